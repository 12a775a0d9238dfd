//! Desk-scale training and post-pruning recovery fine-tuning with a
//! decoupled-weight-decay adaptive optimizer, plus top-1 evaluation.
//!
//! Training is deterministic under a fixed seed: the shuffle order is
//! seed-derived per epoch, batches are visited in that order, and every
//! reduction runs in f64.

use crate::error::{NuwaError, Result};
use crate::grad::backward;
use crate::model::{forward, VitModel};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// Decoupled weight decay is applied multiplicatively before the adaptive
/// step.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AdamWParams {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamWParams {
    fn default() -> Self {
        AdamWParams {
            lr: 1e-4,
            weight_decay: 0.05,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// One AdamW update of a parameter slice. `bc1`/`bc2` are the bias
/// corrections (1 - beta^t) for the current step.
pub(crate) fn adamw_step_slice(
    w: &mut [f64],
    g: &[f64],
    m: &mut [f64],
    v: &mut [f64],
    p: &AdamWParams,
    bc1: f64,
    bc2: f64,
) {
    for i in 0..w.len() {
        w[i] *= 1.0 - p.lr * p.weight_decay;
        m[i] = p.beta1 * m[i] + (1.0 - p.beta1) * g[i];
        v[i] = p.beta2 * v[i] + (1.0 - p.beta2) * g[i] * g[i];
        let mhat = m[i] / bc1;
        let vhat = v[i] / bc2;
        w[i] -= p.lr * mhat / (vhat.sqrt() + p.eps);
    }
}

/// Per-tensor first/second moment accumulators over the model's canonical
/// tensor order.
pub struct OptimizerState {
    pub params: AdamWParams,
    moments: Vec<(Vec<f64>, Vec<f64>)>,
    step: usize,
}

impl OptimizerState {
    pub fn new(model: &VitModel, params: AdamWParams) -> Self {
        let moments = model
            .named_tensors()
            .iter()
            .map(|(_, t)| (vec![0.0; t.numel()], vec![0.0; t.numel()]))
            .collect();
        OptimizerState {
            params,
            moments,
            step: 0,
        }
    }

    pub fn step_count(&self) -> usize {
        self.step
    }

    /// Applies one update given gradients in the same canonical order.
    pub fn step(&mut self, model: &mut VitModel, grads: &crate::grad::GradientSet) {
        self.step += 1;
        let bc1 = 1.0 - self.params.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.params.beta2.powi(self.step as i32);
        let grad_tensors = grads.named_tensors();
        for (((_, tensor), (m, v)), (_, gt)) in model
            .named_tensors_mut()
            .into_iter()
            .zip(self.moments.iter_mut())
            .zip(grad_tensors)
        {
            let mut w: Vec<f64> = tensor.data().iter().map(|&x| x as f64).collect();
            let g: Vec<f64> = gt.data().iter().map(|&x| x as f64).collect();
            adamw_step_slice(&mut w, &g, m, v, &self.params, bc1, bc2);
            for (dst, &src) in tensor.data_mut().iter_mut().zip(&w) {
                *dst = src as f32;
            }
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub optimizer: AdamWParams,
}

impl TrainConfig {
    pub fn recovery(seed: u64) -> Self {
        TrainConfig {
            epochs: 5,
            batch_size: 64,
            seed,
            optimizer: AdamWParams::default(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainRun {
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    /// Mean training loss per epoch.
    pub loss_curve: Vec<f64>,
    /// Held-out top-1 accuracy per epoch (empty when no eval split given).
    pub eval_accuracy: Vec<f64>,
}

/// Trains the model in place. Labels are sub-task label indices in
/// [0, C). On divergence (non-finite loss) the model is restored to the
/// last completed epoch and an error is returned.
pub fn train(
    model: &mut VitModel,
    images: &[&[f32]],
    labels: &[usize],
    eval: Option<(&[&[f32]], &[usize])>,
    config: &TrainConfig,
) -> Result<TrainRun> {
    if images.is_empty() || images.len() != labels.len() {
        return Err(NuwaError::Argument(
            "training needs a non-empty matching image/label set".to_string(),
        ));
    }
    let c = model.config.num_classes;
    if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
        return Err(NuwaError::Argument(format!(
            "label index {bad} out of range for {c} classes"
        )));
    }
    let mut opt = OptimizerState::new(model, config.optimizer.clone());
    let mut run = TrainRun {
        epochs: config.epochs,
        batch_size: config.batch_size,
        seed: config.seed,
        loss_curve: Vec::with_capacity(config.epochs),
        eval_accuracy: Vec::with_capacity(config.epochs),
    };
    let batch = config.batch_size.max(1);
    for epoch in 0..config.epochs {
        let snapshot = model.clone();
        let mut order: Vec<usize> = (0..images.len()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(epoch as u64));
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0f64;
        for chunk in order.chunks(batch) {
            let bi: Vec<&[f32]> = chunk.iter().map(|&i| images[i]).collect();
            let bl: Vec<usize> = chunk.iter().map(|&i| labels[i]).collect();
            let (loss, grads) = backward(model, &bi, &bl)?;
            if !loss.is_finite() {
                *model = snapshot;
                return Err(NuwaError::Diverged { epoch });
            }
            epoch_loss += loss * chunk.len() as f64;
            opt.step(model, &grads);
        }
        run.loss_curve.push(epoch_loss / images.len() as f64);
        if let Some((ei, el)) = eval {
            run.eval_accuracy.push(evaluate_on_indices(model, ei, el)?);
        }
    }
    Ok(run)
}

/// Top-1 accuracy against original class ids: a prediction is correct
/// when class_ids[argmax] equals the sample's label. Ties resolve to the
/// lowest class index.
pub fn evaluate(model: &VitModel, images: &[&[f32]], original_labels: &[usize]) -> Result<f64> {
    if images.is_empty() || images.len() != original_labels.len() {
        return Err(NuwaError::Argument(
            "evaluation needs a non-empty matching image/label set".to_string(),
        ));
    }
    let mut mapped = Vec::with_capacity(original_labels.len());
    for &label in original_labels {
        let idx = model.class_ids.iter().position(|&c| c == label).ok_or_else(|| {
            NuwaError::Argument(format!("label {label} not among the model's classes"))
        })?;
        mapped.push(idx);
    }
    evaluate_on_indices(model, images, &mapped)
}

/// Top-1 accuracy against label indices in [0, C).
pub fn evaluate_on_indices(model: &VitModel, images: &[&[f32]], labels: &[usize]) -> Result<f64> {
    if images.is_empty() || images.len() != labels.len() {
        return Err(NuwaError::Argument(
            "evaluation needs a non-empty matching image/label set".to_string(),
        ));
    }
    let c = model.config.num_classes;
    let mut correct = 0usize;
    for (chunk_imgs, chunk_labels) in images.chunks(64).zip(labels.chunks(64)) {
        let logits = forward(model, chunk_imgs)?;
        for (i, &label) in chunk_labels.iter().enumerate() {
            let mut best = 0usize;
            for j in 1..c {
                if logits.get2(i, j) > logits.get2(i, best) {
                    best = j;
                }
            }
            if best == label {
                correct += 1;
            }
        }
    }
    Ok(correct as f64 / images.len() as f64)
}
