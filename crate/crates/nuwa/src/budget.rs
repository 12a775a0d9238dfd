//! Parameter and FLOPs accounting used as the stopping criterion for the
//! target pruning rate.
//!
//! The closed-form counts deliberately omit bias terms and fold the cls
//! token and positions into a single (N+1)d term; `params_exact`
//! enumerates every stored tensor as a transparency metric. The patch
//! embedding FLOPs term uses 3(N-1)p^2*d although a direct count gives N
//! patches; the formula is evaluated verbatim rather than corrected.

use crate::linalg;
use crate::model::{forward, ModelConfig, VitModel};
use crate::Result;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Accounting {
    PaperA2,
    ExactTensor,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BudgetMetric {
    Params,
    Flops,
}

impl std::str::FromStr for BudgetMetric {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "params" => Ok(BudgetMetric::Params),
            "flops" => Ok(BudgetMetric::Flops),
            other => Err(format!("unknown metric {other:?} (expected params or flops)")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Budget {
    pub params: u64,
    pub flops: u64,
    pub accounting: Accounting,
}

impl Budget {
    pub fn paper_a2(config: &ModelConfig) -> Budget {
        Budget {
            params: params_a2(config),
            flops: flops_a2(config),
            accounting: Accounting::PaperA2,
        }
    }

    pub fn metric(&self, metric: BudgetMetric) -> u64 {
        match metric {
            BudgetMetric::Params => self.params,
            BudgetMetric::Flops => self.flops,
        }
    }
}

/// [3p^2 + N + 2*sum(q_l + v_l + e_l) + 4L + C + 3] * d, exact integers.
pub fn params_a2(config: &ModelConfig) -> u64 {
    let p2 = (config.patch_size * config.patch_size) as u64;
    let n = config.num_patches() as u64;
    let depth = config.depth() as u64;
    let c = config.num_classes as u64;
    let d = config.embed_dim as u64;
    let dims_sum: u64 = config
        .layers
        .iter()
        .map(|l| (l.qk + l.v + l.expansion) as u64)
        .sum();
    (3 * p2 + n + 2 * dims_sum + 4 * depth + c + 3) * d
}

/// [3(N-1)p^2 + 2LN + C + 1] * d + (2Nd + N^2) * sum(q_l + v_l)
/// + 2Nd * sum(e_l), exact integers.
pub fn flops_a2(config: &ModelConfig) -> u64 {
    let p2 = (config.patch_size * config.patch_size) as u64;
    let n = config.num_patches() as u64;
    let depth = config.depth() as u64;
    let c = config.num_classes as u64;
    let d = config.embed_dim as u64;
    let qv_sum: u64 = config.layers.iter().map(|l| (l.qk + l.v) as u64).sum();
    let e_sum: u64 = config.layers.iter().map(|l| l.expansion as u64).sum();
    (3 * n.saturating_sub(1) * p2 + 2 * depth * n + c + 1) * d
        + (2 * n * d + n * n) * qv_sum
        + 2 * n * d * e_sum
}

/// Total element count over every stored tensor, biases included.
pub fn params_exact(model: &VitModel) -> u64 {
    model.named_tensors().iter().map(|(_, t)| t.numel() as u64).sum()
}

/// Closed form for params_exact - params_a2: the tensors the closed-form
/// count omits are the patch-embedding bias, all attention and MLP biases,
/// and the classifier bias.
pub fn bias_param_delta(config: &ModelConfig) -> u64 {
    let d = config.embed_dim as u64;
    let per_layer: u64 = config
        .layers
        .iter()
        .map(|l| 2 * l.qk as u64 + l.v as u64 + l.expansion as u64 + 2 * d)
        .sum();
    d + per_layer + config.num_classes as u64
}

/// Multiply-accumulates of one instrumented batch-1 forward pass.
pub fn measure_forward_macs(model: &VitModel) -> Result<u64> {
    let image = vec![0.0f32; 3 * model.config.image_size * model.config.image_size];
    linalg::mac_reset();
    let _ = forward(model, &[&image])?;
    Ok(linalg::mac_count())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{LayerDims, ModelConfig, VitModel};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn toy_config() -> ModelConfig {
        ModelConfig::uniform(32, 4, 2, 8, 2, 8, 8, 16, 10)
    }

    fn random_config(rng: &mut ChaCha8Rng) -> ModelConfig {
        let depth = rng.gen_range(1..=4);
        let layers = (0..depth)
            .map(|_| {
                let heads = rng.gen_range(1..=4usize);
                LayerDims {
                    heads,
                    qk: heads * rng.gen_range(1..=8usize),
                    v: heads * rng.gen_range(1..=8usize),
                    expansion: rng.gen_range(0..=32usize),
                }
            })
            .collect();
        ModelConfig {
            image_size: 32,
            patch_size: *[2usize, 4, 8].get(rng.gen_range(0..3)).unwrap(),
            embed_dim: rng.gen_range(1..=32),
            num_classes: rng.gen_range(1..=20),
            layernorm_eps: 1e-6,
            layers,
        }
    }

    /// Unsimplified per-module sums; the independent route to the counts.
    fn params_by_module(config: &ModelConfig) -> u64 {
        let d = config.embed_dim as u64;
        let p2 = (config.patch_size * config.patch_size) as u64;
        let n = config.num_patches() as u64;
        let patching = (3 * p2 + n + 1) * d;
        let encoders: u64 = config
            .layers
            .iter()
            .map(|l| 2 * (l.qk + l.v) as u64 * d + 2 * l.expansion as u64 * d + 4 * d)
            .sum();
        let classifier = (2 + config.num_classes as u64) * d;
        patching + encoders + classifier
    }

    fn flops_by_module(config: &ModelConfig) -> u64 {
        let d = config.embed_dim as u64;
        let p2 = (config.patch_size * config.patch_size) as u64;
        let n = config.num_patches() as u64;
        let patching = 3 * (n - 1) * p2 * d;
        let encoders: u64 = config
            .layers
            .iter()
            .map(|l| {
                let qv = (l.qk + l.v) as u64;
                let e = l.expansion as u64;
                2 * n * qv * d + n * n * qv + 2 * n * e * d + 2 * n * d
            })
            .sum();
        let classifier = (1 + config.num_classes as u64) * d;
        patching + encoders + classifier
    }

    #[test]
    fn toy_config_reference_values() {
        let cfg = toy_config();
        assert_eq!(params_a2(&cfg), 2088);
        assert_eq!(flops_a2(&cfg), 222_936);
    }

    #[test]
    fn zero_embed_dim_gives_zero_params() {
        let mut cfg = toy_config();
        cfg.embed_dim = 0;
        assert_eq!(params_a2(&cfg), 0);
    }

    #[test]
    fn doubling_expansion_adds_axis_linear_params() {
        let cfg = toy_config();
        let base = params_a2(&cfg);
        let mut doubled = cfg.clone();
        for l in doubled.layers.iter_mut() {
            l.expansion *= 2;
        }
        let e_sum: u64 = cfg.layers.iter().map(|l| l.expansion as u64).sum();
        assert_eq!(params_a2(&doubled), base + 2 * cfg.embed_dim as u64 * e_sum);
    }

    #[test]
    fn flops_strictly_decrease_with_qk() {
        let cfg = toy_config();
        let base = flops_a2(&cfg);
        let mut smaller = cfg.clone();
        smaller.layers[0].qk -= 1;
        assert!(flops_a2(&smaller) < base);
    }

    #[test]
    fn formulas_match_per_module_sums_on_random_configs() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        for _ in 0..50 {
            let cfg = random_config(&mut rng);
            assert_eq!(params_a2(&cfg), params_by_module(&cfg), "{cfg:?}");
            assert_eq!(flops_a2(&cfg), flops_by_module(&cfg), "{cfg:?}");
        }
    }

    #[test]
    fn exact_count_equals_formula_plus_bias_delta() {
        let mut rng = ChaCha8Rng::seed_from_u64(43);
        for _ in 0..10 {
            let mut cfg = random_config(&mut rng);
            // Model construction needs a valid config.
            cfg.embed_dim = cfg.embed_dim.max(2);
            let model = VitModel::random(cfg.clone(), 0).unwrap();
            assert_eq!(
                params_exact(&model),
                params_a2(&cfg) + bias_param_delta(&cfg),
                "{cfg:?}"
            );
        }
    }

    #[test]
    fn scalar_tensor_counts_one_element() {
        let scalar = crate::linalg::Tensor::zeros(&[]);
        assert_eq!(scalar.numel(), 1);
    }

    #[test]
    fn removing_one_neuron_drops_exact_count_by_2d_plus_1() {
        let cfg = toy_config();
        let before = params_a2(&cfg) + bias_param_delta(&cfg);
        let mut pruned = cfg.clone();
        pruned.layers[1].expansion -= 1;
        let after = params_a2(&pruned) + bias_param_delta(&pruned);
        assert_eq!(before - after, 2 * cfg.embed_dim as u64 + 1);
    }

    #[test]
    fn instrumented_macs_close_to_flops_formula() {
        let cfg = toy_config();
        let model = VitModel::random(cfg.clone(), 0).unwrap();
        let macs = measure_forward_macs(&model).unwrap();
        let formula = flops_a2(&cfg);
        let rel = (macs as f64 - formula as f64).abs() / formula as f64;
        assert!(rel < 0.10, "macs {macs} vs formula {formula} (rel {rel:.3})");
    }
}
