//! Reverse-mode gradients of the task loss with respect to every weight
//! tensor, plus a central finite-difference oracle for checking them.
//!
//! The loss is mean cross-entropy over the batch; labels are indices into
//! the model's class_ids. Gradients are exact derivatives of the f64
//! forward function; no input gradients are computed anywhere.

use crate::error::{NuwaError, Result};
use crate::linalg::Tensor;
use crate::model::engine::{self, GradF64, ModelF64, TraceF64};
use crate::model::VitModel;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// One gradient tensor per weight tensor of the model, shape-matched.
#[derive(Debug, Clone)]
pub struct GradientSet {
    pub patch_embed: Tensor,
    pub patch_embed_bias: Tensor,
    pub cls_token: Tensor,
    pub pos_embed: Tensor,
    pub layers: Vec<LayerGrads>,
    pub head_ln_gamma: Tensor,
    pub head_ln_beta: Tensor,
    pub head_weight: Tensor,
    pub head_bias: Tensor,
}

#[derive(Debug, Clone)]
pub struct LayerGrads {
    pub ln1_gamma: Tensor,
    pub ln1_beta: Tensor,
    pub wq: Tensor,
    pub bq: Tensor,
    pub wk: Tensor,
    pub bk: Tensor,
    pub wv: Tensor,
    pub bv: Tensor,
    pub wo: Tensor,
    pub bo: Tensor,
    pub ln2_gamma: Tensor,
    pub ln2_beta: Tensor,
    pub w1: Tensor,
    pub b1: Tensor,
    pub w2: Tensor,
    pub b2: Tensor,
}

impl GradientSet {
    pub(crate) fn from_f64(model: &VitModel, g: &GradF64) -> Self {
        let shp = |t: &Tensor, data: &[f64]| Tensor::from_f64(t.shape(), data);
        GradientSet {
            patch_embed: shp(&model.patch_embed, &g.patch_embed),
            patch_embed_bias: shp(&model.patch_embed_bias, &g.patch_embed_bias),
            cls_token: shp(&model.cls_token, &g.cls_token),
            pos_embed: shp(&model.pos_embed, &g.pos_embed),
            layers: model
                .layers
                .iter()
                .zip(&g.layers)
                .map(|(w, lg)| LayerGrads {
                    ln1_gamma: shp(&w.ln1_gamma, &lg.ln1_gamma),
                    ln1_beta: shp(&w.ln1_beta, &lg.ln1_beta),
                    wq: shp(&w.wq, &lg.wq),
                    bq: shp(&w.bq, &lg.bq),
                    wk: shp(&w.wk, &lg.wk),
                    bk: shp(&w.bk, &lg.bk),
                    wv: shp(&w.wv, &lg.wv),
                    bv: shp(&w.bv, &lg.bv),
                    wo: shp(&w.wo, &lg.wo),
                    bo: shp(&w.bo, &lg.bo),
                    ln2_gamma: shp(&w.ln2_gamma, &lg.ln2_gamma),
                    ln2_beta: shp(&w.ln2_beta, &lg.ln2_beta),
                    w1: shp(&w.w1, &lg.w1),
                    b1: shp(&w.b1, &lg.b1),
                    w2: shp(&w.w2, &lg.w2),
                    b2: shp(&w.b2, &lg.b2),
                })
                .collect(),
            head_ln_gamma: shp(&model.head.ln_gamma, &g.head_ln_gamma),
            head_ln_beta: shp(&model.head.ln_beta, &g.head_ln_beta),
            head_weight: shp(&model.head.weight, &g.head_weight),
            head_bias: shp(&model.head.bias, &g.head_bias),
        }
    }

    /// Gradient tensors in the same canonical (name, tensor) order the
    /// model exposes.
    pub fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out: Vec<(String, &Tensor)> = vec![
            ("patch_embed.weight".into(), &self.patch_embed),
            ("patch_embed.bias".into(), &self.patch_embed_bias),
            ("cls_token".into(), &self.cls_token),
            ("pos_embed".into(), &self.pos_embed),
        ];
        for (l, w) in self.layers.iter().enumerate() {
            out.push((format!("layers.{l}.ln1.gamma"), &w.ln1_gamma));
            out.push((format!("layers.{l}.ln1.beta"), &w.ln1_beta));
            out.push((format!("layers.{l}.attn.wq"), &w.wq));
            out.push((format!("layers.{l}.attn.bq"), &w.bq));
            out.push((format!("layers.{l}.attn.wk"), &w.wk));
            out.push((format!("layers.{l}.attn.bk"), &w.bk));
            out.push((format!("layers.{l}.attn.wv"), &w.wv));
            out.push((format!("layers.{l}.attn.bv"), &w.bv));
            out.push((format!("layers.{l}.attn.wo"), &w.wo));
            out.push((format!("layers.{l}.attn.bo"), &w.bo));
            out.push((format!("layers.{l}.ln2.gamma"), &w.ln2_gamma));
            out.push((format!("layers.{l}.ln2.beta"), &w.ln2_beta));
            out.push((format!("layers.{l}.mlp.w1"), &w.w1));
            out.push((format!("layers.{l}.mlp.b1"), &w.b1));
            out.push((format!("layers.{l}.mlp.w2"), &w.w2));
            out.push((format!("layers.{l}.mlp.b2"), &w.b2));
        }
        out.push(("head.ln.gamma".into(), &self.head_ln_gamma));
        out.push(("head.ln.beta".into(), &self.head_ln_beta));
        out.push(("head.weight".into(), &self.head_weight));
        out.push(("head.bias".into(), &self.head_bias));
        out
    }

    pub fn by_name(&self, name: &str) -> Option<&Tensor> {
        self.named_tensors().into_iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }
}

fn check_labels(model: &VitModel, images: &[&[f32]], labels: &[usize]) -> Result<()> {
    if images.is_empty() || images.len() != labels.len() {
        return Err(NuwaError::Argument(format!(
            "need matching non-empty images/labels, got {} and {}",
            images.len(),
            labels.len()
        )));
    }
    let c = model.config.num_classes;
    for &l in labels {
        if l >= c {
            return Err(NuwaError::Argument(format!(
                "label index {l} out of range for {c} classes"
            )));
        }
    }
    Ok(())
}

/// Mean cross-entropy over the batch and exact gradients for every weight.
pub fn backward(model: &VitModel, images: &[&[f32]], labels: &[usize]) -> Result<(f64, GradientSet)> {
    check_labels(model, images, labels)?;
    let mf = ModelF64::from_model(model);
    let mut g = GradF64::zeros_like(&mf);
    let scale = 1.0 / images.len() as f64;
    let mut loss = 0.0;
    for (img, &label) in images.iter().zip(labels) {
        let mut tr = TraceF64::default();
        let _ = engine::forward_sample(&mf, img, mf.depth(), &mf.head, Some(&mut tr));
        loss += engine::backward_sample(&mf, &tr, label, scale, &mut g) * scale;
    }
    Ok((loss, GradientSet::from_f64(model, &g)))
}

/// Mean cross-entropy of the batch under an f64 forward pass.
pub fn batch_loss(model: &VitModel, images: &[&[f32]], labels: &[usize]) -> Result<f64> {
    check_labels(model, images, labels)?;
    let mf = ModelF64::from_model(model);
    Ok(mean_loss(&mf, images, labels))
}

fn mean_loss(mf: &ModelF64, images: &[&[f32]], labels: &[usize]) -> f64 {
    let mut loss = 0.0;
    for (img, &label) in images.iter().zip(labels) {
        let logits = engine::forward_sample(mf, img, mf.depth(), &mf.head, None);
        loss += engine::ce_loss(&logits, label);
    }
    loss / images.len() as f64
}

/// Central finite difference (L(w+h) - L(w-h)) / 2h of the batch loss with
/// respect to one weight coordinate, evaluated with f64 forward passes.
pub fn finite_diff(
    model: &VitModel,
    images: &[&[f32]],
    labels: &[usize],
    tensor_name: &str,
    coordinate: usize,
    h: f64,
) -> Result<f64> {
    check_labels(model, images, labels)?;
    let mut mf = ModelF64::from_model(model);
    if !mf.nudge(tensor_name, coordinate, h) {
        return Err(NuwaError::Argument(format!(
            "unknown tensor {tensor_name:?} or coordinate {coordinate} out of range"
        )));
    }
    let up = mean_loss(&mf, images, labels);
    mf.nudge(tensor_name, coordinate, -2.0 * h);
    let down = mean_loss(&mf, images, labels);
    Ok((up - down) / (2.0 * h))
}

/// Outcome of a full backward-vs-finite-difference sweep.
#[derive(Debug, Clone)]
pub struct GradientCheck {
    /// Worst guarded relative error seen across all sampled coordinates.
    pub max_rel_err: f64,
    /// (tensor name, coordinate, backward value, finite-difference value)
    /// of the worst coordinate.
    pub worst: (String, usize, f64, f64),
    pub coordinates_checked: usize,
}

/// Compares backward against central finite differences on
/// `coords_per_tensor` seeded-random coordinates of every weight tensor.
/// The relative error is guarded below by 1e-4 to keep near-zero
/// derivatives from dominating.
pub fn gradient_check(
    model: &VitModel,
    images: &[&[f32]],
    labels: &[usize],
    coords_per_tensor: usize,
    h: f64,
    seed: u64,
) -> Result<GradientCheck> {
    let (_, grads) = backward(model, images, labels)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut max_rel_err = 0.0f64;
    let mut worst = (String::new(), 0usize, 0.0f64, 0.0f64);
    let mut checked = 0usize;
    for (name, gt) in grads.named_tensors() {
        let n = gt.numel();
        if n == 0 {
            continue;
        }
        for _ in 0..coords_per_tensor {
            let coord = rng.gen_range(0..n);
            let bp = gt.data()[coord] as f64;
            let fd = finite_diff(model, images, labels, &name, coord, h)?;
            let rel = (bp - fd).abs() / bp.abs().max(fd.abs()).max(1e-4);
            checked += 1;
            if rel > max_rel_err {
                max_rel_err = rel;
                worst = (name.clone(), coord, bp, fd);
            }
        }
    }
    Ok(GradientCheck {
        max_rel_err,
        worst,
        coordinates_checked: checked,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{forward, ModelConfig, VitModel};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    pub(crate) fn toy_model() -> VitModel {
        let config = ModelConfig::uniform(32, 4, 2, 8, 2, 8, 8, 16, 10);
        VitModel::random(config, 0).unwrap()
    }

    pub(crate) fn random_images(n: usize, image_size: usize, seed: u64) -> Vec<Vec<f32>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| (0..3 * image_size * image_size).map(|_| rng.gen_range(-1.0f32..1.0)).collect())
            .collect()
    }

    fn as_refs(images: &[Vec<f32>]) -> Vec<&[f32]> {
        images.iter().map(|v| v.as_slice()).collect()
    }

    #[test]
    fn uniform_logits_loss_is_ln_c() {
        let mut model = toy_model();
        for (_, t) in model.named_tensors_mut() {
            for v in t.data_mut() {
                *v = 0.0;
            }
        }
        let images = random_images(2, 32, 1);
        let loss = batch_loss(&model, &as_refs(&images), &[3, 7]).unwrap();
        assert!((loss - (10.0f64).ln()).abs() < 1e-5, "loss {loss}");
    }

    #[test]
    fn invalid_label_rejected() {
        let model = toy_model();
        let images = random_images(1, 32, 1);
        let err = backward(&model, &as_refs(&images), &[10]);
        assert!(matches!(err, Err(NuwaError::Argument(_))));
    }

    #[test]
    fn dead_path_weights_get_zero_gradient() {
        let mut model = toy_model();
        // Zeroing layer-1 w2 detaches its MLP hidden units from the loss.
        for v in model.layers[1].w2.data_mut() {
            *v = 0.0;
        }
        let images = random_images(2, 32, 2);
        let refs = as_refs(&images);
        let (_, grads) = backward(&model, &refs, &[0, 4]).unwrap();
        assert!(grads.layers[1].w1.data().iter().all(|&g| g == 0.0));
        assert!(grads.layers[1].b1.data().iter().all(|&g| g == 0.0));
        // And the finite-difference oracle agrees.
        let fd = finite_diff(&model, &refs, &[0, 4], "layers.1.mlp.w1", 5, 1e-3).unwrap();
        assert!(fd.abs() < 1e-8, "fd = {fd}");
    }

    #[test]
    fn duplicated_batch_leaves_mean_gradients_unchanged() {
        let model = toy_model();
        let images = random_images(3, 32, 3);
        let refs = as_refs(&images);
        let labels = [1usize, 5, 9];
        let (loss1, g1) = backward(&model, &refs, &labels).unwrap();
        let doubled: Vec<&[f32]> = refs.iter().chain(refs.iter()).cloned().collect();
        let labels2: Vec<usize> = labels.iter().chain(labels.iter()).cloned().collect();
        let (loss2, g2) = backward(&model, &doubled, &labels2).unwrap();
        assert!((loss1 - loss2).abs() < 1e-9);
        for ((_, a), (_, b)) in g1.named_tensors().iter().zip(g2.named_tensors().iter()) {
            for (x, y) in a.data().iter().zip(b.data()) {
                assert!((x - y).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn backward_is_deterministic() {
        let model = toy_model();
        let images = random_images(2, 32, 4);
        let refs = as_refs(&images);
        let (l1, g1) = backward(&model, &refs, &[2, 8]).unwrap();
        let (l2, g2) = backward(&model, &refs, &[2, 8]).unwrap();
        assert_eq!(l1.to_bits(), l2.to_bits());
        for ((_, a), (_, b)) in g1.named_tensors().iter().zip(g2.named_tensors().iter()) {
            assert_eq!(a.data(), b.data());
        }
    }

    #[test]
    fn finite_diff_sign_behavior() {
        // Negating h swaps the two loss evaluations and the denominator
        // sign, so the central estimate is unchanged; equivalently,
        // swapping only the +h/-h evaluations negates it.
        let model = toy_model();
        let images = random_images(1, 32, 5);
        let refs = as_refs(&images);
        let plus = finite_diff(&model, &refs, &[3], "layers.0.attn.wq", 7, 1e-3).unwrap();
        let minus = finite_diff(&model, &refs, &[3], "layers.0.attn.wq", 7, -1e-3).unwrap();
        assert!((plus - minus).abs() < 1e-9, "{plus} vs {minus}");
        let swapped = -plus;
        assert!((swapped + minus).abs() < 1e-9);
    }

    #[test]
    fn finite_diff_unknown_tensor() {
        let model = toy_model();
        let images = random_images(1, 32, 5);
        let err = finite_diff(&model, &as_refs(&images), &[3], "layers.0.attn.wz", 0, 1e-3);
        assert!(matches!(err, Err(NuwaError::Argument(_))));
    }

    #[test]
    fn backward_matches_finite_differences_everywhere() {
        let model = toy_model();
        let images = random_images(3, 32, 6);
        let refs = as_refs(&images);
        let check = gradient_check(&model, &refs, &[0, 5, 9], 20, 1e-3, 99).unwrap();
        assert!(
            check.max_rel_err < 1e-3,
            "worst {:?} rel {}",
            check.worst,
            check.max_rel_err
        );
    }

    #[test]
    fn loss_matches_forward_logits() {
        let model = toy_model();
        let images = random_images(2, 32, 7);
        let refs = as_refs(&images);
        let labels = [4usize, 6];
        let (loss, _) = backward(&model, &refs, &labels).unwrap();
        let logits = forward(&model, &refs).unwrap();
        let mut expect = 0.0f64;
        for (i, &label) in labels.iter().enumerate() {
            let row: Vec<f64> = (0..10).map(|j| logits.get2(i, j) as f64).collect();
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            expect += lse - row[label];
        }
        expect /= labels.len() as f64;
        assert!((loss - expect).abs() < 1e-5, "{loss} vs {expect}");
    }
}
