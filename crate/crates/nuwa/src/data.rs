//! Dataset ingestion: the CIFAR-10 binary format, a deterministic
//! synthetic generator for desk-scale runs, and sub-task split
//! construction with label remapping.

use crate::error::{NuwaError, Result};
use crate::oneshot::SubTask;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::path::Path;

pub const CIFAR10_MEAN: [f32; 3] = [0.4914, 0.4822, 0.4465];
pub const CIFAR10_STD: [f32; 3] = [0.2470, 0.2435, 0.2616];

const CIFAR_RECORD: usize = 3073;
const CIFAR_CLASSES: [&str; 10] = [
    "airplane",
    "automobile",
    "bird",
    "cat",
    "deer",
    "dog",
    "frog",
    "horse",
    "ship",
    "truck",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Eval,
}

#[derive(Debug, Clone)]
pub struct Sample {
    /// Channel-major 3 x H x W normalized pixels.
    pub pixels: Vec<f32>,
    pub label: usize,
    pub split: Split,
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub image_size: usize,
    pub num_classes: usize,
    pub class_names: Vec<String>,
    /// Per-channel normalization applied to the stored pixels.
    pub mean: [f32; 3],
    pub std: [f32; 3],
    pub samples: Vec<Sample>,
}

impl Dataset {
    pub fn split(&self, split: Split) -> Vec<&Sample> {
        self.samples.iter().filter(|s| s.split == split).collect()
    }
}

/// Filtered view of one split restricted to a sub-task, with labels
/// remapped to [0, C_edge).
#[derive(Debug, Clone)]
pub struct TaskSplit<'a> {
    pub images: Vec<&'a [f32]>,
    pub labels: Vec<usize>,
    /// Original class ids, parallel to `labels`.
    pub original_labels: Vec<usize>,
}

impl<'a> TaskSplit<'a> {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// Parses the binary CIFAR-10 layout: 3073-byte records of one label byte
/// followed by 3072 channel-major pixel bytes. Pixels are scaled to [0,1]
/// and then normalized with the fixed per-channel constants.
pub fn load_cifar10(dir: &Path) -> Result<Dataset> {
    let mut samples = Vec::new();
    for (file, split) in [
        ("data_batch_1.bin", Split::Train),
        ("data_batch_2.bin", Split::Train),
        ("data_batch_3.bin", Split::Train),
        ("data_batch_4.bin", Split::Train),
        ("data_batch_5.bin", Split::Train),
        ("test_batch.bin", Split::Eval),
    ] {
        let path = dir.join(file);
        let bytes = std::fs::read(&path)
            .map_err(|e| NuwaError::Format(format!("cannot read {}: {e}", path.display())))?;
        parse_cifar_records(&bytes, file, split, &mut samples)?;
    }
    Ok(Dataset {
        image_size: 32,
        num_classes: 10,
        class_names: CIFAR_CLASSES.iter().map(|s| s.to_string()).collect(),
        mean: CIFAR10_MEAN,
        std: CIFAR10_STD,
        samples,
    })
}

fn parse_cifar_records(
    bytes: &[u8],
    file: &str,
    split: Split,
    out: &mut Vec<Sample>,
) -> Result<()> {
    if bytes.len() % CIFAR_RECORD != 0 {
        let offset = (bytes.len() / CIFAR_RECORD) * CIFAR_RECORD;
        return Err(NuwaError::Format(format!(
            "{file}: length {} is not a multiple of {CIFAR_RECORD} (partial record at byte offset {offset})",
            bytes.len()
        )));
    }
    for (r, rec) in bytes.chunks(CIFAR_RECORD).enumerate() {
        let label = rec[0] as usize;
        if label >= 10 {
            return Err(NuwaError::Format(format!(
                "{file}: record {r} has label byte {label} outside 0..=9"
            )));
        }
        let mut pixels = vec![0.0f32; 3072];
        for c in 0..3 {
            for i in 0..1024 {
                let raw = rec[1 + c * 1024 + i] as f32 / 255.0;
                pixels[c * 1024 + i] = (raw - CIFAR10_MEAN[c]) / CIFAR10_STD[c];
            }
        }
        out.push(Sample {
            pixels,
            label,
            split,
        });
    }
    Ok(())
}

/// Deterministic class-separable texture dataset. Each class has its own
/// color triple, grating frequency, and orientation; samples vary in
/// phase, small parameter jitter, and pixel noise. Identical specs
/// produce bitwise-identical datasets.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub seed: u64,
    pub num_classes: usize,
    pub samples_per_class: usize,
    pub image_size: usize,
}

/// Normalization constants used for synthetic data (maps [0,1] to [-1,1]).
pub const SYNTHETIC_MEAN: [f32; 3] = [0.5, 0.5, 0.5];
pub const SYNTHETIC_STD: [f32; 3] = [0.5, 0.5, 0.5];

fn splitmix(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

pub fn make_synthetic(spec: &SyntheticSpec) -> Dataset {
    let s = spec.image_size;
    let k = spec.num_classes.max(1) as f64;
    let mut samples = Vec::with_capacity(spec.num_classes * spec.samples_per_class);
    let train_per_class = (spec.samples_per_class * 4).div_ceil(5);
    for class in 0..spec.num_classes {
        let hue = 2.0 * std::f64::consts::PI * class as f64 / k;
        let base_freq = 2.0 + (class % 3) as f64 * 1.5;
        let base_theta = std::f64::consts::PI * class as f64 / k;
        let amp: [f64; 3] = [0.0, 1.0, 2.0].map(|ch| {
            0.18 + 0.22 * (0.5 + 0.5 * (hue - 2.0 * std::f64::consts::PI * ch / 3.0).cos())
        });
        for idx in 0..spec.samples_per_class {
            let mut rng = ChaCha8Rng::seed_from_u64(splitmix(
                spec.seed
                    .wrapping_mul(0x2545_F491_4F6C_DD1D)
                    .wrapping_add((class as u64) << 32)
                    .wrapping_add(idx as u64),
            ));
            let phase: f64 = rng.gen_range(0.0..(2.0 * std::f64::consts::PI));
            let theta = base_theta + rng.gen_range(-0.08..0.08);
            let freq = base_freq + rng.gen_range(-0.2..0.2);
            let (ct, st) = (theta.cos(), theta.sin());
            let mut pixels = vec![0.0f32; 3 * s * s];
            for y in 0..s {
                for x in 0..s {
                    let u = (x as f64 * ct + y as f64 * st) / s as f64;
                    let wave = 0.5 + 0.5 * (2.0 * std::f64::consts::PI * freq * u + phase).sin();
                    for c in 0..3 {
                        let noise: f64 = rng.gen_range(-0.10..0.10);
                        let v = (0.18 + amp[c] * wave + noise).clamp(0.0, 1.0) as f32;
                        pixels[c * s * s + y * s + x] =
                            (v - SYNTHETIC_MEAN[c]) / SYNTHETIC_STD[c];
                    }
                }
            }
            samples.push(Sample {
                pixels,
                label: class,
                split: if idx < train_per_class {
                    Split::Train
                } else {
                    Split::Eval
                },
            });
        }
    }
    Dataset {
        image_size: s,
        num_classes: spec.num_classes,
        class_names: (0..spec.num_classes).map(|c| format!("class_{c}")).collect(),
        mean: SYNTHETIC_MEAN,
        std: SYNTHETIC_STD,
        samples,
    }
}

/// Filters both splits to the sub-task classes and remaps labels through
/// the sub-task's label map. Sample order is preserved.
pub fn build_subtask_split<'a>(
    dataset: &'a Dataset,
    subtask: &SubTask,
) -> Result<(TaskSplit<'a>, TaskSplit<'a>)> {
    for &class in &subtask.classes {
        if class >= dataset.num_classes {
            return Err(NuwaError::Argument(format!(
                "sub-task class {class} absent from dataset with {} classes",
                dataset.num_classes
            )));
        }
    }
    let mut train = TaskSplit {
        images: vec![],
        labels: vec![],
        original_labels: vec![],
    };
    let mut eval = TaskSplit {
        images: vec![],
        labels: vec![],
        original_labels: vec![],
    };
    for sample in &dataset.samples {
        if let Some(mapped) = subtask.remap(sample.label) {
            let bucket = match sample.split {
                Split::Train => &mut train,
                Split::Eval => &mut eval,
            };
            bucket.images.push(sample.pixels.as_slice());
            bucket.labels.push(mapped);
            bucket.original_labels.push(sample.label);
        }
    }
    Ok((train, eval))
}
