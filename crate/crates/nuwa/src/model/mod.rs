//! The vision-transformer data model across all seven structural
//! dimensions (depth, classifier size, heads, query-key size, value size,
//! expansion size, embedding size) and its deterministic forward pass.
//!
//! Encoders are pre-norm: X <- X + MHA(LN1(X)); X <- X + MLP(LN2(X)).
//! Attention scales by sqrt(per-head query-key width). Biases are carried
//! everywhere.

pub(crate) mod engine;


use crate::error::{NuwaError, Result};
use crate::linalg::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

/// Per-layer structural dimensions. `qk` and `v` are whole-MHA widths;
/// every head in a layer shares the same per-head width.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerDims {
    pub heads: usize,
    pub qk: usize,
    pub v: usize,
    pub expansion: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub image_size: usize,
    pub patch_size: usize,
    pub embed_dim: usize,
    pub num_classes: usize,
    pub layernorm_eps: f64,
    pub layers: Vec<LayerDims>,
}

impl ModelConfig {
    pub fn uniform(
        image_size: usize,
        patch_size: usize,
        depth: usize,
        embed_dim: usize,
        heads: usize,
        qk: usize,
        v: usize,
        expansion: usize,
        num_classes: usize,
    ) -> Self {
        ModelConfig {
            image_size,
            patch_size,
            embed_dim,
            num_classes,
            layernorm_eps: 1e-6,
            layers: vec![
                LayerDims {
                    heads,
                    qk,
                    v,
                    expansion
                };
                depth
            ],
        }
    }

    pub fn depth(&self) -> usize {
        self.layers.len()
    }

    /// Number of image patches N = (image_size / patch_size)^2.
    pub fn num_patches(&self) -> usize {
        let g = self.image_size / self.patch_size;
        g * g
    }

    pub fn patch_dim(&self) -> usize {
        3 * self.patch_size * self.patch_size
    }

    pub fn validate(&self) -> Result<()> {
        if self.patch_size == 0 || self.image_size % self.patch_size != 0 {
            return Err(NuwaError::Argument(format!(
                "image size {} not divisible by patch size {}",
                self.image_size, self.patch_size
            )));
        }
        if self.layers.is_empty() || self.embed_dim == 0 || self.num_classes == 0 {
            return Err(NuwaError::Argument(
                "depth, embed_dim and num_classes must all be at least 1".to_string(),
            ));
        }
        for (l, dims) in self.layers.iter().enumerate() {
            if dims.heads == 0 {
                return Err(NuwaError::Argument(format!("layer {l} has zero heads")));
            }
            if dims.qk % dims.heads != 0 || dims.v % dims.heads != 0 {
                return Err(NuwaError::Argument(format!(
                    "layer {l}: qk {} and v {} must be divisible by heads {}",
                    dims.qk, dims.v, dims.heads
                )));
            }
        }
        Ok(())
    }
}

/// Weights of one transformer encoder layer. Head h owns the row block
/// [h*qk/H, (h+1)*qk/H) of wq/wk (and bq/bk), the row block of wv/bv at
/// width v/H, and the matching column block of wo.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerWeights {
    pub ln1_gamma: Tensor,
    pub ln1_beta: Tensor,
    pub wq: Tensor, // [qk x d]
    pub bq: Tensor, // [qk]
    pub wk: Tensor, // [qk x d]
    pub bk: Tensor, // [qk]
    pub wv: Tensor, // [v x d]
    pub bv: Tensor, // [v]
    pub wo: Tensor, // [d x v]
    pub bo: Tensor, // [d]
    pub ln2_gamma: Tensor,
    pub ln2_beta: Tensor,
    pub w1: Tensor, // [e x d]
    pub b1: Tensor, // [e]
    pub w2: Tensor, // [d x e]
    pub b2: Tensor, // [d]
}

/// LayerNorm + linear classifier over the cls token. Doubles as the
/// model's own head and as an early-exit depth probe.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassifierHead {
    pub ln_gamma: Tensor,
    pub ln_beta: Tensor,
    pub weight: Tensor, // [C x d]
    pub bias: Tensor,   // [C]
}

impl ClassifierHead {
    pub fn num_classes(&self) -> usize {
        self.weight.rows()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct VitModel {
    pub config: ModelConfig,
    pub patch_embed: Tensor,      // [d x 3p^2]
    pub patch_embed_bias: Tensor, // [d]
    pub cls_token: Tensor,        // [d]
    pub pos_embed: Tensor,        // [(N+1) x d]
    pub layers: Vec<LayerWeights>,
    pub head: ClassifierHead,
    /// Original class identifiers, one per classifier row.
    pub class_ids: Vec<usize>,
}

impl VitModel {
    /// Fresh model with normal(0, 0.02) weights, zero biases, unit
    /// layernorm gains. Deterministic in the seed.
    pub fn random(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0f64, 0.02).unwrap();
        let mut randn = |shape: &[usize]| {
            let n: usize = shape.iter().product();
            let data: Vec<f32> = (0..n).map(|_| normal.sample(&mut rng) as f32).collect();
            Tensor::new(shape.to_vec(), data).unwrap()
        };
        let d = config.embed_dim;
        let n_tok = config.num_patches() + 1;
        let pdim = config.patch_dim();
        let ones = |len: usize| Tensor::new(vec![len], vec![1.0; len]).unwrap();
        let patch_embed = randn(&[d, pdim]);
        let cls_token = randn(&[d]);
        let pos_embed = randn(&[n_tok, d]);
        let layers = config
            .layers
            .iter()
            .map(|dims| LayerWeights {
                ln1_gamma: ones(d),
                ln1_beta: Tensor::zeros(&[d]),
                wq: randn(&[dims.qk, d]),
                bq: Tensor::zeros(&[dims.qk]),
                wk: randn(&[dims.qk, d]),
                bk: Tensor::zeros(&[dims.qk]),
                wv: randn(&[dims.v, d]),
                bv: Tensor::zeros(&[dims.v]),
                wo: randn(&[d, dims.v]),
                bo: Tensor::zeros(&[d]),
                ln2_gamma: ones(d),
                ln2_beta: Tensor::zeros(&[d]),
                w1: randn(&[dims.expansion, d]),
                b1: Tensor::zeros(&[dims.expansion]),
                w2: randn(&[d, dims.expansion]),
                b2: Tensor::zeros(&[d]),
            })
            .collect();
        let head = ClassifierHead {
            ln_gamma: ones(d),
            ln_beta: Tensor::zeros(&[d]),
            weight: randn(&[config.num_classes, d]),
            bias: Tensor::zeros(&[config.num_classes]),
        };
        let class_ids = (0..config.num_classes).collect();
        Ok(VitModel {
            config,
            patch_embed,
            patch_embed_bias: Tensor::zeros(&[d]),
            cls_token,
            pos_embed,
            layers,
            head,
            class_ids,
        })
    }

    pub fn depth(&self) -> usize {
        self.config.depth()
    }

    /// Checks that every stored tensor matches the config and that
    /// class_ids are consistent.
    pub fn validate(&self) -> Result<()> {
        self.config.validate()?;
        let d = self.config.embed_dim;
        let n_tok = self.config.num_patches() + 1;
        let check = |name: &str, t: &Tensor, shape: &[usize]| -> Result<()> {
            if t.shape() != shape {
                return Err(NuwaError::Dimension(format!(
                    "{name}: expected shape {shape:?}, got {:?}",
                    t.shape()
                )));
            }
            Ok(())
        };
        check("patch_embed.weight", &self.patch_embed, &[d, self.config.patch_dim()])?;
        check("patch_embed.bias", &self.patch_embed_bias, &[d])?;
        check("cls_token", &self.cls_token, &[d])?;
        check("pos_embed", &self.pos_embed, &[n_tok, d])?;
        if self.layers.len() != self.config.depth() {
            return Err(NuwaError::Dimension(format!(
                "layer count {} does not match config depth {}",
                self.layers.len(),
                self.config.depth()
            )));
        }
        for (l, (w, dims)) in self.layers.iter().zip(&self.config.layers).enumerate() {
            let p = |f: &str| format!("layers.{l}.{f}");
            check(&p("ln1.gamma"), &w.ln1_gamma, &[d])?;
            check(&p("ln1.beta"), &w.ln1_beta, &[d])?;
            check(&p("attn.wq"), &w.wq, &[dims.qk, d])?;
            check(&p("attn.bq"), &w.bq, &[dims.qk])?;
            check(&p("attn.wk"), &w.wk, &[dims.qk, d])?;
            check(&p("attn.bk"), &w.bk, &[dims.qk])?;
            check(&p("attn.wv"), &w.wv, &[dims.v, d])?;
            check(&p("attn.bv"), &w.bv, &[dims.v])?;
            check(&p("attn.wo"), &w.wo, &[d, dims.v])?;
            check(&p("attn.bo"), &w.bo, &[d])?;
            check(&p("ln2.gamma"), &w.ln2_gamma, &[d])?;
            check(&p("ln2.beta"), &w.ln2_beta, &[d])?;
            check(&p("mlp.w1"), &w.w1, &[dims.expansion, d])?;
            check(&p("mlp.b1"), &w.b1, &[dims.expansion])?;
            check(&p("mlp.w2"), &w.w2, &[d, dims.expansion])?;
            check(&p("mlp.b2"), &w.b2, &[d])?;
        }
        check("head.ln.gamma", &self.head.ln_gamma, &[d])?;
        check("head.ln.beta", &self.head.ln_beta, &[d])?;
        check("head.weight", &self.head.weight, &[self.config.num_classes, d])?;
        check("head.bias", &self.head.bias, &[self.config.num_classes])?;
        if self.class_ids.len() != self.config.num_classes {
            return Err(NuwaError::Dimension(format!(
                "class_ids length {} does not match classifier size {}",
                self.class_ids.len(),
                self.config.num_classes
            )));
        }
        let mut seen = self.class_ids.clone();
        seen.sort_unstable();
        seen.dedup();
        if seen.len() != self.class_ids.len() {
            return Err(NuwaError::Argument("class_ids contain duplicates".to_string()));
        }
        Ok(())
    }

    /// All weight tensors in canonical order, paired with their canonical
    /// names (the same names the container format uses).
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
        out.push(("head.ln.gamma".into(), &self.head.ln_gamma));
        out.push(("head.ln.beta".into(), &self.head.ln_beta));
        out.push(("head.weight".into(), &self.head.weight));
        out.push(("head.bias".into(), &self.head.bias));
        out
    }

    pub fn named_tensors_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out: Vec<(String, &mut Tensor)> = vec![
            ("patch_embed.weight".into(), &mut self.patch_embed),
            ("patch_embed.bias".into(), &mut self.patch_embed_bias),
            ("cls_token".into(), &mut self.cls_token),
            ("pos_embed".into(), &mut self.pos_embed),
        ];
        for (l, w) in self.layers.iter_mut().enumerate() {
            out.push((format!("layers.{l}.ln1.gamma"), &mut w.ln1_gamma));
            out.push((format!("layers.{l}.ln1.beta"), &mut w.ln1_beta));
            out.push((format!("layers.{l}.attn.wq"), &mut w.wq));
            out.push((format!("layers.{l}.attn.bq"), &mut w.bq));
            out.push((format!("layers.{l}.attn.wk"), &mut w.wk));
            out.push((format!("layers.{l}.attn.bk"), &mut w.bk));
            out.push((format!("layers.{l}.attn.wv"), &mut w.wv));
            out.push((format!("layers.{l}.attn.bv"), &mut w.bv));
            out.push((format!("layers.{l}.attn.wo"), &mut w.wo));
            out.push((format!("layers.{l}.attn.bo"), &mut w.bo));
            out.push((format!("layers.{l}.ln2.gamma"), &mut w.ln2_gamma));
            out.push((format!("layers.{l}.ln2.beta"), &mut w.ln2_beta));
            out.push((format!("layers.{l}.mlp.w1"), &mut w.w1));
            out.push((format!("layers.{l}.mlp.b1"), &mut w.b1));
            out.push((format!("layers.{l}.mlp.w2"), &mut w.w2));
            out.push((format!("layers.{l}.mlp.b2"), &mut w.b2));
        }
        out.push(("head.ln.gamma".into(), &mut self.head.ln_gamma));
        out.push(("head.ln.beta".into(), &mut self.head.ln_beta));
        out.push(("head.weight".into(), &mut self.head.weight));
        out.push(("head.bias".into(), &mut self.head.bias));
        out
    }
}

/// Intermediate activations of one sample's forward pass.
#[derive(Debug, Clone)]
pub struct ActivationTrace {
    /// Token matrices after each encoder layer, (N+1) x d.
    pub layer_tokens: Vec<Tensor>,
    /// Attention probabilities per layer, H x (N+1) x (N+1).
    pub attn_probs: Vec<Tensor>,
    /// Post-GELU MLP hidden activations per layer, (N+1) x e_l.
    pub mlp_hidden: Vec<Tensor>,
    /// Final cls-token feature (before the head layernorm).
    pub cls_feature: Tensor,
    pub logits: Tensor,
}

fn check_images(model: &VitModel, images: &[&[f32]]) -> Result<()> {
    let want = 3 * model.config.image_size * model.config.image_size;
    for (i, img) in images.iter().enumerate() {
        if img.len() != want {
            return Err(NuwaError::Dimension(format!(
                "image {i} has {} values, expected {want}",
                img.len()
            )));
        }
    }
    Ok(())
}

/// Batched forward pass; returns logits [B x C].
pub fn forward(model: &VitModel, images: &[&[f32]]) -> Result<Tensor> {
    check_images(model, images)?;
    let mf = engine::ModelF64::from_model(model);
    let c = model.config.num_classes;
    let mut out = vec![0.0f64; images.len() * c];
    for (i, img) in images.iter().enumerate() {
        let logits = engine::forward_sample(&mf, img, mf.depth(), &mf.head, None);
        out[i * c..(i + 1) * c].copy_from_slice(&logits);
    }
    Tensor::new(vec![images.len(), c], out.iter().map(|&x| x as f32).collect())
}

/// Forward pass that also captures per-sample activation traces.
pub fn forward_with_trace(
    model: &VitModel,
    images: &[&[f32]],
) -> Result<(Tensor, Vec<ActivationTrace>)> {
    check_images(model, images)?;
    let mf = engine::ModelF64::from_model(model);
    let c = model.config.num_classes;
    let mut out = vec![0.0f64; images.len() * c];
    let mut traces = Vec::with_capacity(images.len());
    for (i, img) in images.iter().enumerate() {
        let mut tr = engine::TraceF64::default();
        let logits = engine::forward_sample(&mf, img, mf.depth(), &mf.head, Some(&mut tr));
        out[i * c..(i + 1) * c].copy_from_slice(&logits);
        traces.push(tr.into_public(&mf, &logits));
    }
    let logits = Tensor::new(vec![images.len(), c], out.iter().map(|&x| x as f32).collect())?;
    Ok((logits, traces))
}

/// Runs only the first `depth_limit` encoder layers and classifies the cls
/// token through `probe`.
pub fn forward_truncated(
    model: &VitModel,
    images: &[&[f32]],
    depth_limit: usize,
    probe: &ClassifierHead,
) -> Result<Tensor> {
    if depth_limit == 0 || depth_limit > model.depth() {
        return Err(NuwaError::Argument(format!(
            "depth_limit {depth_limit} out of range 1..={}",
            model.depth()
        )));
    }
    if probe.ln_gamma.numel() != model.config.embed_dim
        || probe.weight.cols() != model.config.embed_dim
    {
        return Err(NuwaError::Argument(
            "probe dimensions do not match the model embedding size".to_string(),
        ));
    }
    check_images(model, images)?;
    let mf = engine::ModelF64::from_model(model);
    let hf = engine::HeadF64::from_head(probe);
    let c = probe.num_classes();
    let mut out = vec![0.0f64; images.len() * c];
    for (i, img) in images.iter().enumerate() {
        let logits = engine::forward_sample(&mf, img, depth_limit, &hf, None);
        out[i * c..(i + 1) * c].copy_from_slice(&logits);
    }
    Tensor::new(vec![images.len(), c], out.iter().map(|&x| x as f32).collect())
}

/// Diagnostic forward pass in which layernorm statistics run over the
/// mask-true embedding dimensions only. Used to verify that removing an
/// everywhere-zero residual channel preserves the function: the plain
/// forward shifts every mean/variance denominator when d changes, so the
/// comparison target is the original model with masked statistics.
pub fn forward_masked(
    model: &VitModel,
    images: &[&[f32]],
    mask: &[bool],
) -> Result<(Tensor, Vec<ActivationTrace>)> {
    if mask.len() != model.config.embed_dim {
        return Err(NuwaError::Argument(format!(
            "mask length {} does not match embedding size {}",
            mask.len(),
            model.config.embed_dim
        )));
    }
    check_images(model, images)?;
    let mut mf = engine::ModelF64::from_model(model);
    mf.ln_stat_mask = Some(mask.to_vec());
    let c = model.config.num_classes;
    let mut out = vec![0.0f64; images.len() * c];
    let mut traces = Vec::with_capacity(images.len());
    for (i, img) in images.iter().enumerate() {
        let mut tr = engine::TraceF64::default();
        let logits = engine::forward_sample(&mf, img, mf.depth(), &mf.head, Some(&mut tr));
        out[i * c..(i + 1) * c].copy_from_slice(&logits);
        traces.push(tr.into_public(&mf, &logits));
    }
    let logits = Tensor::new(vec![images.len(), c], out.iter().map(|&x| x as f32).collect())?;
    Ok((logits, traces))
}

/// Post-GELU cls-token activation of MLP neuron `neuron` in layer `layer`,
/// consistent with the forward pass (LN2-normalized input, bias included).
pub fn neuron_activation(
    model: &VitModel,
    image: &[f32],
    layer: usize,
    neuron: usize,
) -> Result<f64> {
    if layer >= model.depth() {
        return Err(NuwaError::Argument(format!(
            "layer {layer} out of range 0..{}",
            model.depth()
        )));
    }
    if neuron >= model.config.layers[layer].expansion {
        return Err(NuwaError::Argument(format!(
            "neuron {neuron} out of range 0..{}",
            model.config.layers[layer].expansion
        )));
    }
    check_images(model, &[image])?;
    let mf = engine::ModelF64::from_model(model);
    let mut tr = engine::TraceF64::default();
    let _ = engine::forward_sample(&mf, image, layer + 1, &mf.head, Some(&mut tr));
    // h_act is (N+1) x e row-major; the cls token is row 0.
    Ok(tr.layers[layer].h_act[neuron])
}
