//! One-shot pruning stage: depth pruning via early-exit probes,
//! classifier slicing to the sub-task, and head pruning under a
//! cumulative-importance retention floor.
//!
//! The stage order is fixed: depth, then classifier slice, then heads.
//! Depth probes are LayerNorm + linear classifiers on the cls token,
//! initialized from the sliced classifier at every depth and trained on
//! frozen backbone features; accuracies are measured on the held-out
//! split.

use crate::data::TaskSplit;
use crate::error::{NuwaError, Result};
use crate::linalg::Tensor;
use crate::model::engine::{ModelF64, TraceF64};
use crate::model::{engine, ClassifierHead, VitModel};
use crate::ranking::minimal_cumulative_keep;
use crate::score::{GroupKind, ImportanceMap};
use crate::train::AdamWParams;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::HashMap;

/// The class subset an edge model must recognize, with the label
/// remapping from original ids to [0, C_edge).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SubTask {
    classes: Vec<usize>,
    map: HashMap<usize, usize>,
}

#[derive(Serialize, Deserialize)]
struct SubTaskJson {
    classes: Vec<usize>,
}

impl SubTask {
    pub fn new(classes: Vec<usize>) -> Result<Self> {
        if classes.is_empty() {
            return Err(NuwaError::Argument("sub-task has no classes".to_string()));
        }
        let mut map = HashMap::new();
        for (i, &c) in classes.iter().enumerate() {
            if map.insert(c, i).is_some() {
                return Err(NuwaError::Argument(format!(
                    "sub-task lists class {c} twice"
                )));
            }
        }
        Ok(SubTask { classes, map })
    }

    pub fn classes(&self) -> &[usize] {
        &self.classes
    }

    pub fn num_classes(&self) -> usize {
        self.classes.len()
    }

    /// Maps an original class id to its sub-task label, if included.
    pub fn remap(&self, original: usize) -> Option<usize> {
        self.map.get(&original).copied()
    }

    /// Short identifier used in reports, e.g. "task_0-1-4".
    pub fn id(&self) -> String {
        let joined: Vec<String> = self.classes.iter().map(|c| c.to_string()).collect();
        format!("task_{}", joined.join("-"))
    }

    pub fn from_json(json: &str) -> Result<Self> {
        let parsed: SubTaskJson = serde_json::from_str(json)?;
        SubTask::new(parsed.classes)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(&SubTaskJson {
            classes: self.classes.clone(),
        })
        .expect("subtask serialization cannot fail")
    }

    pub fn from_file(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        SubTask::from_json(&text)
    }
}

/// One early-exit probe per layer with its held-out accuracy.
#[derive(Debug, Clone)]
pub struct DepthProbeSet {
    pub probes: Vec<ClassifierHead>,
    pub accuracies: Vec<f64>,
    /// Class ids the probes classify, in sub-task order.
    pub class_ids: Vec<usize>,
}

/// Restricts the classifier to the sub-task classes, in sub-task order.
/// Every other weight is copied bit-identically.
pub fn slice_classifier(model: &VitModel, subtask: &SubTask) -> Result<VitModel> {
    let head = slice_head(&model.head, &model.class_ids, subtask)?;
    let mut out = model.clone();
    out.head = head;
    out.class_ids = subtask.classes().to_vec();
    out.config.num_classes = subtask.num_classes();
    Ok(out)
}

fn slice_head(
    head: &ClassifierHead,
    class_ids: &[usize],
    subtask: &SubTask,
) -> Result<ClassifierHead> {
    let d = head.weight.cols();
    let mut weight = Vec::with_capacity(subtask.num_classes() * d);
    let mut bias = Vec::with_capacity(subtask.num_classes());
    for &class in subtask.classes() {
        let row = class_ids.iter().position(|&c| c == class).ok_or_else(|| {
            NuwaError::Argument(format!("class id {class} not present in the model"))
        })?;
        weight.extend_from_slice(&head.weight.data()[row * d..(row + 1) * d]);
        bias.push(head.bias.data()[row]);
    }
    Ok(ClassifierHead {
        ln_gamma: head.ln_gamma.clone(),
        ln_beta: head.ln_beta.clone(),
        weight: Tensor::new(vec![subtask.num_classes(), d], weight)?,
        bias: Tensor::new(vec![subtask.num_classes()], bias)?,
    })
}

/// Cached per-layer cls features of a split, plus remapped labels.
struct FeatureCache {
    per_layer: Vec<Vec<Vec<f64>>>, // [layer][sample][d]
    labels: Vec<usize>,
}

fn collect_features(mf: &ModelF64, split: &TaskSplit) -> FeatureCache {
    let depth = mf.depth();
    let mut per_layer = vec![Vec::with_capacity(split.len()); depth];
    for img in &split.images {
        let mut tr = TraceF64::default();
        let _ = engine::forward_sample(mf, img, depth, &mf.head, Some(&mut tr));
        for (l, lt) in tr.layers.iter().enumerate() {
            per_layer[l].push(lt.x_out[0..mf.d].to_vec());
        }
    }
    FeatureCache {
        per_layer,
        labels: split.labels.clone(),
    }
}

fn probe_logits(probe: &ProbeF64, feat: &[f64], eps: f64) -> (Vec<f64>, Vec<f64>, f64) {
    let (z, xhat, inv_std) =
        crate::linalg::kern::layernorm_row(feat, &probe.ln_gamma, &probe.ln_beta, eps);
    let d = feat.len();
    let mut logits = probe.bias.clone();
    for (c, logit) in logits.iter_mut().enumerate() {
        *logit += crate::linalg::kern::dot(&probe.weight[c * d..(c + 1) * d], &z);
    }
    // z is recoverable from xhat but the caller needs it; fold into xhat
    // slot by returning z and xhat packed: z = gamma*xhat + beta.
    (logits, xhat, inv_std)
}

struct ProbeF64 {
    ln_gamma: Vec<f64>,
    ln_beta: Vec<f64>,
    weight: Vec<f64>,
    bias: Vec<f64>,
}

impl ProbeF64 {
    fn from_head(h: &ClassifierHead) -> Self {
        ProbeF64 {
            ln_gamma: h.ln_gamma.to_f64(),
            ln_beta: h.ln_beta.to_f64(),
            weight: h.weight.to_f64(),
            bias: h.bias.to_f64(),
        }
    }

    fn to_head(&self, d: usize, c: usize) -> ClassifierHead {
        ClassifierHead {
            ln_gamma: Tensor::from_f64(&[d], &self.ln_gamma),
            ln_beta: Tensor::from_f64(&[d], &self.ln_beta),
            weight: Tensor::from_f64(&[c, d], &self.weight),
            bias: Tensor::from_f64(&[c], &self.bias),
        }
    }
}

fn probe_accuracy(probe: &ProbeF64, feats: &[Vec<f64>], labels: &[usize], eps: f64) -> f64 {
    let mut correct = 0usize;
    for (feat, &label) in feats.iter().zip(labels) {
        let (logits, _, _) = probe_logits(probe, feat, eps);
        let mut best = 0usize;
        for (c, &v) in logits.iter().enumerate() {
            if v > logits[best] {
                best = c;
            }
        }
        if best == label {
            correct += 1;
        }
    }
    correct as f64 / labels.len().max(1) as f64
}

/// Trains one probe per layer on frozen backbone features of the training
/// split; accuracies come from the held-out split. The backbone is never
/// touched.
pub fn train_depth_probes(
    model: &VitModel,
    subtask: &SubTask,
    train: &TaskSplit,
    eval: &TaskSplit,
    epochs: usize,
    seed: u64,
) -> Result<DepthProbeSet> {
    if train.is_empty() || eval.is_empty() {
        return Err(NuwaError::Argument(
            "probe training needs non-empty train and eval splits".to_string(),
        ));
    }
    let sliced_head = slice_head(&model.head, &model.class_ids, subtask)?;
    let mf = ModelF64::from_model(model);
    let d = model.config.embed_dim;
    let c = subtask.num_classes();
    let eps = model.config.layernorm_eps;
    let train_feats = collect_features(&mf, train);
    let eval_feats = collect_features(&mf, eval);

    let params = AdamWParams::default();
    let mut probes = Vec::with_capacity(model.depth());
    let mut accuracies = Vec::with_capacity(model.depth());
    for l in 0..model.depth() {
        let mut probe = ProbeF64::from_head(&sliced_head);
        let feats = &train_feats.per_layer[l];
        let labels = &train_feats.labels;
        let mut opt = ProbeAdamW::new(&probe, &params);
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ ((l as u64 + 1) << 24));
        let mut order: Vec<usize> = (0..feats.len()).collect();
        for _ in 0..epochs {
            order.shuffle(&mut rng);
            for batch in order.chunks(64) {
                let mut g = ProbeGrads::zeros(d, c);
                for &i in batch {
                    probe_backward(&probe, &feats[i], labels[i], eps, 1.0 / batch.len() as f64, &mut g);
                }
                opt.step(&mut probe, &g);
            }
        }
        accuracies.push(probe_accuracy(&probe, &eval_feats.per_layer[l], &eval_feats.labels, eps));
        probes.push(probe.to_head(d, c));
    }
    Ok(DepthProbeSet {
        probes,
        accuracies,
        class_ids: subtask.classes().to_vec(),
    })
}

struct ProbeGrads {
    ln_gamma: Vec<f64>,
    ln_beta: Vec<f64>,
    weight: Vec<f64>,
    bias: Vec<f64>,
}

impl ProbeGrads {
    fn zeros(d: usize, c: usize) -> Self {
        ProbeGrads {
            ln_gamma: vec![0.0; d],
            ln_beta: vec![0.0; d],
            weight: vec![0.0; c * d],
            bias: vec![0.0; c],
        }
    }
}

fn probe_backward(
    probe: &ProbeF64,
    feat: &[f64],
    label: usize,
    eps: f64,
    scale: f64,
    g: &mut ProbeGrads,
) {
    let d = feat.len();
    let (logits, xhat, _) = probe_logits(probe, feat, eps);
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut dl: Vec<f64> = logits.iter().map(|&v| (v - max).exp()).collect();
    let sum: f64 = dl.iter().sum();
    for v in dl.iter_mut() {
        *v /= sum;
    }
    dl[label] -= 1.0;
    let z: Vec<f64> = xhat
        .iter()
        .zip(probe.ln_gamma.iter().zip(&probe.ln_beta))
        .map(|(&xh, (&ga, &be))| ga * xh + be)
        .collect();
    let mut dz = vec![0.0f64; d];
    for (c, &dv) in dl.iter().enumerate() {
        let dv = dv * scale;
        g.bias[c] += dv;
        for j in 0..d {
            g.weight[c * d + j] += dv * z[j];
            dz[j] += dv * probe.weight[c * d + j];
        }
    }
    for j in 0..d {
        g.ln_gamma[j] += dz[j] * xhat[j];
        g.ln_beta[j] += dz[j];
    }
}

struct ProbeAdamW {
    params: AdamWParams,
    m: Vec<f64>,
    v: Vec<f64>,
    step: usize,
}

impl ProbeAdamW {
    fn new(probe: &ProbeF64, params: &AdamWParams) -> Self {
        let n = probe.ln_gamma.len() * 2 + probe.weight.len() + probe.bias.len();
        ProbeAdamW {
            params: params.clone(),
            m: vec![0.0; n],
            v: vec![0.0; n],
            step: 0,
        }
    }

    fn step(&mut self, probe: &mut ProbeF64, g: &ProbeGrads) {
        self.step += 1;
        let bc1 = 1.0 - self.params.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.params.beta2.powi(self.step as i32);
        let d = probe.ln_gamma.len();
        let wlen = probe.weight.len();
        let (m1, rest_m) = self.m.split_at_mut(d);
        let (v1, rest_v) = self.v.split_at_mut(d);
        crate::train::adamw_step_slice(&mut probe.ln_gamma, &g.ln_gamma, m1, v1, &self.params, bc1, bc2);
        let (m2, rest_m) = rest_m.split_at_mut(d);
        let (v2, rest_v) = rest_v.split_at_mut(d);
        crate::train::adamw_step_slice(&mut probe.ln_beta, &g.ln_beta, m2, v2, &self.params, bc1, bc2);
        let (m3, m4) = rest_m.split_at_mut(wlen);
        let (v3, v4) = rest_v.split_at_mut(wlen);
        crate::train::adamw_step_slice(&mut probe.weight, &g.weight, m3, v3, &self.params, bc1, bc2);
        crate::train::adamw_step_slice(&mut probe.bias, &g.bias, m4, v4, &self.params, bc1, bc2);
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DepthPruneReport {
    pub accuracies: Vec<f64>,
    pub threshold: f64,
    pub depth_before: usize,
    pub depth_after: usize,
    pub notes: Vec<String>,
}

/// Truncates the model to the smallest depth whose probe accuracy reaches
/// rho_depth times the full-depth probe accuracy; that depth's probe
/// becomes the model head.
pub fn prune_depth(
    model: &VitModel,
    probes: &DepthProbeSet,
    rho_depth: f64,
) -> Result<(VitModel, DepthPruneReport)> {
    if !(rho_depth > 0.0 && rho_depth <= 1.0) {
        return Err(NuwaError::Argument(format!(
            "rho_depth must lie in (0, 1], got {rho_depth}"
        )));
    }
    let depth = model.depth();
    if probes.probes.len() != depth || probes.accuracies.len() != depth {
        return Err(NuwaError::Argument(format!(
            "probe set covers {} layers, model has {depth}",
            probes.probes.len()
        )));
    }
    let threshold = rho_depth * probes.accuracies[depth - 1];
    let chosen = (0..depth)
        .find(|&l| probes.accuracies[l] >= threshold)
        .map(|l| l + 1)
        .unwrap_or(depth);

    let mut out = model.clone();
    out.layers.truncate(chosen);
    out.config.layers.truncate(chosen);
    out.head = probes.probes[chosen - 1].clone();
    out.class_ids = probes.class_ids.clone();
    out.config.num_classes = probes.class_ids.len();
    let report = DepthPruneReport {
        accuracies: probes.accuracies.clone(),
        threshold,
        depth_before: depth,
        depth_after: chosen,
        notes: vec![
            "depth rule reads the early-exit walk as: keep the smallest depth whose probe \
             accuracy reaches rho_depth times the final probe's accuracy (the prose walk \
             direction is ambiguous)"
                .to_string(),
        ],
    };
    Ok((out, report))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct HeadPruneReport {
    /// Kept heads per layer (original head indices).
    pub kept: Vec<Vec<usize>>,
    pub kept_fraction: f64,
    pub rho: f64,
    pub notes: Vec<String>,
}

/// Keeps the minimal globally-ranked set of heads whose cumulative
/// importance reaches rho_head, forcing at least one head per layer.
pub fn prune_heads(
    model: &VitModel,
    head_scores: &ImportanceMap,
    rho_head: f64,
) -> Result<(VitModel, HeadPruneReport)> {
    if !(rho_head > 0.0 && rho_head <= 1.0) {
        return Err(NuwaError::Argument(format!(
            "rho_head must lie in (0, 1], got {rho_head}"
        )));
    }
    if head_scores.kind != GroupKind::Head {
        return Err(NuwaError::Argument("expected head scores".to_string()));
    }
    let keys: Vec<(usize, usize)> = model
        .config
        .layers
        .iter()
        .enumerate()
        .flat_map(|(l, dims)| (0..dims.heads).map(move |h| (l, h)))
        .collect();
    if head_scores.scores.len() != keys.len()
        || head_scores
            .scores
            .iter()
            .zip(&keys)
            .any(|(s, &(l, h))| s.layer != Some(l) || s.index != h)
    {
        return Err(NuwaError::Argument(
            "head scores do not cover this model's heads".to_string(),
        ));
    }
    let scores: Vec<f64> = head_scores.scores.iter().map(|s| s.score).collect();
    let kept_flat = minimal_cumulative_keep(&scores, rho_head);
    let mut kept_per_layer: Vec<Vec<usize>> = vec![Vec::new(); model.depth()];
    for &i in &kept_flat {
        let (l, h) = keys[i];
        kept_per_layer[l].push(h);
    }
    let mut notes = Vec::new();
    for (l, kept) in kept_per_layer.iter_mut().enumerate() {
        if kept.is_empty() {
            let best = (0..model.config.layers[l].heads)
                .max_by(|&a, &b| {
                    let sa = head_scores.get(Some(l), a).unwrap();
                    let sb = head_scores.get(Some(l), b).unwrap();
                    sa.partial_cmp(&sb).unwrap().then(b.cmp(&a))
                })
                .unwrap();
            kept.push(best);
            notes.push(format!(
                "layer {l}: retention floor would empty the layer; kept its best head {best}"
            ));
        }
    }
    let total: f64 = scores.iter().sum();
    let kept_sum: f64 = kept_per_layer
        .iter()
        .enumerate()
        .flat_map(|(l, ks)| {
            ks.iter()
                .map(move |&h| head_scores.get(Some(l), h).unwrap())
        })
        .sum();
    let kept_fraction = if total > 0.0 { kept_sum / total } else { 1.0 };

    let mut out = model.clone();
    for (l, kept) in kept_per_layer.iter().enumerate() {
        let dims = model.config.layers[l];
        let (lw, new_dims) = keep_head_blocks(&model.layers[l], dims, kept);
        out.layers[l] = lw;
        out.config.layers[l] = new_dims;
    }
    let report = HeadPruneReport {
        kept: kept_per_layer,
        kept_fraction,
        rho: rho_head,
        notes,
    };
    Ok((out, report))
}

fn keep_head_blocks(
    lw: &crate::model::LayerWeights,
    dims: crate::model::LayerDims,
    kept: &[usize],
) -> (crate::model::LayerWeights, crate::model::LayerDims) {
    let d = lw.wq.cols();
    let qh = dims.qk / dims.heads;
    let vh = dims.v / dims.heads;
    let take_rows = |t: &Tensor, width: usize, per: usize| -> Tensor {
        let mut data = Vec::with_capacity(kept.len() * per * width);
        for &h in kept {
            data.extend_from_slice(&t.data()[h * per * width..(h + 1) * per * width]);
        }
        if width == 1 {
            Tensor::new(vec![kept.len() * per], data).unwrap()
        } else {
            Tensor::new(vec![kept.len() * per, width], data).unwrap()
        }
    };
    let take_wo_cols = |t: &Tensor| -> Tensor {
        let v = dims.v;
        let mut data = Vec::with_capacity(d * kept.len() * vh);
        for r in 0..d {
            for &h in kept {
                data.extend_from_slice(&t.data()[r * v + h * vh..r * v + (h + 1) * vh]);
            }
        }
        Tensor::new(vec![d, kept.len() * vh], data).unwrap()
    };
    let new = crate::model::LayerWeights {
        ln1_gamma: lw.ln1_gamma.clone(),
        ln1_beta: lw.ln1_beta.clone(),
        wq: take_rows(&lw.wq, d, qh),
        bq: take_rows(&lw.bq, 1, qh),
        wk: take_rows(&lw.wk, d, qh),
        bk: take_rows(&lw.bk, 1, qh),
        wv: take_rows(&lw.wv, d, vh),
        bv: take_rows(&lw.bv, 1, vh),
        wo: take_wo_cols(&lw.wo),
        bo: lw.bo.clone(),
        ln2_gamma: lw.ln2_gamma.clone(),
        ln2_beta: lw.ln2_beta.clone(),
        w1: lw.w1.clone(),
        b1: lw.b1.clone(),
        w2: lw.w2.clone(),
        b2: lw.b2.clone(),
    };
    let new_dims = crate::model::LayerDims {
        heads: kept.len(),
        qk: kept.len() * qh,
        v: kept.len() * vh,
        expansion: dims.expansion,
    };
    (new, new_dims)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct OneShotReport {
    pub depth: DepthPruneReport,
    pub heads: HeadPruneReport,
    pub head_scores: ImportanceMap,
}
