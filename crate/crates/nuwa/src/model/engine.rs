//! f64 compute engine behind the public forward/backward operations.
//!
//! Weights are upcast once per call batch; every intermediate stays in f64
//! until results cross back into public f32 types. The same trace feeds
//! the reverse pass and the public ActivationTrace.

use super::{ActivationTrace, ClassifierHead, LayerDims, VitModel};
use crate::linalg::kern;
use crate::linalg::Tensor;

pub(crate) struct HeadF64 {
    pub ln_gamma: Vec<f64>,
    pub ln_beta: Vec<f64>,
    pub weight: Vec<f64>, // [C x d]
    pub bias: Vec<f64>,
    pub classes: usize,
}

impl HeadF64 {
    pub fn from_head(h: &ClassifierHead) -> Self {
        HeadF64 {
            ln_gamma: h.ln_gamma.to_f64(),
            ln_beta: h.ln_beta.to_f64(),
            weight: h.weight.to_f64(),
            bias: h.bias.to_f64(),
            classes: h.num_classes(),
        }
    }
}

pub(crate) struct LayerF64 {
    pub dims: LayerDims,
    pub ln1_gamma: Vec<f64>,
    pub ln1_beta: Vec<f64>,
    pub wq: Vec<f64>,
    pub bq: Vec<f64>,
    pub wk: Vec<f64>,
    pub bk: Vec<f64>,
    pub wv: Vec<f64>,
    pub bv: Vec<f64>,
    pub wo: Vec<f64>,
    pub bo: Vec<f64>,
    pub ln2_gamma: Vec<f64>,
    pub ln2_beta: Vec<f64>,
    pub w1: Vec<f64>,
    pub b1: Vec<f64>,
    pub w2: Vec<f64>,
    pub b2: Vec<f64>,
}

pub(crate) struct ModelF64 {
    pub d: usize,
    pub image_size: usize,
    pub patch: usize,
    pub n_patches: usize,
    pub eps: f64,
    pub patch_embed: Vec<f64>,
    pub patch_embed_bias: Vec<f64>,
    pub cls_token: Vec<f64>,
    pub pos_embed: Vec<f64>,
    pub layers: Vec<LayerF64>,
    pub head: HeadF64,
    /// When set, layernorm statistics run over the mask-true dimensions
    /// only (diagnostic forward for dead-channel checks).
    pub ln_stat_mask: Option<Vec<bool>>,
}

impl ModelF64 {
    pub fn from_model(m: &VitModel) -> Self {
        ModelF64 {
            d: m.config.embed_dim,
            image_size: m.config.image_size,
            patch: m.config.patch_size,
            n_patches: m.config.num_patches(),
            eps: m.config.layernorm_eps,
            patch_embed: m.patch_embed.to_f64(),
            patch_embed_bias: m.patch_embed_bias.to_f64(),
            cls_token: m.cls_token.to_f64(),
            pos_embed: m.pos_embed.to_f64(),
            layers: m
                .layers
                .iter()
                .zip(&m.config.layers)
                .map(|(w, &dims)| LayerF64 {
                    dims,
                    ln1_gamma: w.ln1_gamma.to_f64(),
                    ln1_beta: w.ln1_beta.to_f64(),
                    wq: w.wq.to_f64(),
                    bq: w.bq.to_f64(),
                    wk: w.wk.to_f64(),
                    bk: w.bk.to_f64(),
                    wv: w.wv.to_f64(),
                    bv: w.bv.to_f64(),
                    wo: w.wo.to_f64(),
                    bo: w.bo.to_f64(),
                    ln2_gamma: w.ln2_gamma.to_f64(),
                    ln2_beta: w.ln2_beta.to_f64(),
                    w1: w.w1.to_f64(),
                    b1: w.b1.to_f64(),
                    w2: w.w2.to_f64(),
                    b2: w.b2.to_f64(),
                })
                .collect(),
            head: HeadF64::from_head(&m.head),
            ln_stat_mask: None,
        }
    }

    pub fn depth(&self) -> usize {
        self.layers.len()
    }

    pub fn patch_dim(&self) -> usize {
        3 * self.patch * self.patch
    }

    /// Perturbs one weight coordinate in place (f64, no f32 rounding).
    pub fn nudge(&mut self, name: &str, coord: usize, delta: f64) -> bool {
        match self.tensor_mut(name) {
            Some(t) if coord < t.len() => {
                t[coord] += delta;
                true
            }
            _ => false,
        }
    }

    fn tensor_mut(&mut self, name: &str) -> Option<&mut Vec<f64>> {
        match name {
            "patch_embed.weight" => return Some(&mut self.patch_embed),
            "patch_embed.bias" => return Some(&mut self.patch_embed_bias),
            "cls_token" => return Some(&mut self.cls_token),
            "pos_embed" => return Some(&mut self.pos_embed),
            "head.ln.gamma" => return Some(&mut self.head.ln_gamma),
            "head.ln.beta" => return Some(&mut self.head.ln_beta),
            "head.weight" => return Some(&mut self.head.weight),
            "head.bias" => return Some(&mut self.head.bias),
            _ => {}
        }
        let rest = name.strip_prefix("layers.")?;
        let (idx, field) = rest.split_once('.')?;
        let l: usize = idx.parse().ok()?;
        let w = self.layers.get_mut(l)?;
        Some(match field {
            "ln1.gamma" => &mut w.ln1_gamma,
            "ln1.beta" => &mut w.ln1_beta,
            "attn.wq" => &mut w.wq,
            "attn.bq" => &mut w.bq,
            "attn.wk" => &mut w.wk,
            "attn.bk" => &mut w.bk,
            "attn.wv" => &mut w.wv,
            "attn.bv" => &mut w.bv,
            "attn.wo" => &mut w.wo,
            "attn.bo" => &mut w.bo,
            "ln2.gamma" => &mut w.ln2_gamma,
            "ln2.beta" => &mut w.ln2_beta,
            "mlp.w1" => &mut w.w1,
            "mlp.b1" => &mut w.b1,
            "mlp.w2" => &mut w.w2,
            "mlp.b2" => &mut w.b2,
            _ => return None,
        })
    }
}

#[derive(Default)]
pub(crate) struct LayerTrace {
    pub x_in: Vec<f64>,
    pub ln1_xhat: Vec<f64>,
    pub ln1_inv_std: Vec<f64>,
    pub y1: Vec<f64>,
    pub q: Vec<f64>,
    pub k: Vec<f64>,
    pub v: Vec<f64>,
    pub probs: Vec<f64>, // H x T x T
    pub o: Vec<f64>,     // T x v (concatenated head outputs)
    pub x_mid: Vec<f64>,
    pub ln2_xhat: Vec<f64>,
    pub ln2_inv_std: Vec<f64>,
    pub y2: Vec<f64>,
    pub h_pre: Vec<f64>,
    pub h_act: Vec<f64>,
    pub x_out: Vec<f64>,
}

#[derive(Default)]
pub(crate) struct TraceF64 {
    pub patches: Vec<f64>, // N x 3p^2
    pub x0: Vec<f64>,
    pub layers: Vec<LayerTrace>,
    pub feat: Vec<f64>,
    pub head_xhat: Vec<f64>,
    pub head_inv_std: f64,
    pub z: Vec<f64>,
    pub logits: Vec<f64>,
}

impl TraceF64 {
    pub fn into_public(self, mf: &ModelF64, logits: &[f64]) -> ActivationTrace {
        let t = mf.n_patches + 1;
        let layer_tokens = self
            .layers
            .iter()
            .map(|lt| Tensor::from_f64(&[t, mf.d], &lt.x_out))
            .collect();
        let attn_probs = self
            .layers
            .iter()
            .zip(&mf.layers)
            .map(|(lt, lw)| Tensor::from_f64(&[lw.dims.heads, t, t], &lt.probs))
            .collect();
        let mlp_hidden = self
            .layers
            .iter()
            .zip(&mf.layers)
            .map(|(lt, lw)| Tensor::from_f64(&[t, lw.dims.expansion], &lt.h_act))
            .collect();
        ActivationTrace {
            layer_tokens,
            attn_probs,
            mlp_hidden,
            cls_feature: Tensor::from_f64(&[mf.d], &self.feat),
            logits: Tensor::from_f64(&[logits.len()], logits),
        }
    }
}

/// Unfolds an image into row-major patch vectors. Patch (py, px) maps to
/// row py*grid+px; within a patch the layout is channel-major.
pub(crate) fn unfold_patches(img: &[f32], image_size: usize, p: usize) -> Vec<f64> {
    let g = image_size / p;
    let pdim = 3 * p * p;
    let mut out = vec![0.0f64; g * g * pdim];
    for py in 0..g {
        for px in 0..g {
            let row = &mut out[(py * g + px) * pdim..(py * g + px + 1) * pdim];
            for c in 0..3 {
                for dy in 0..p {
                    for dx in 0..p {
                        let pix = img[c * image_size * image_size
                            + (py * p + dy) * image_size
                            + (px * p + dx)];
                        row[c * p * p + dy * p + dx] = pix as f64;
                    }
                }
            }
        }
    }
    out
}

fn add_bias_rows(x: &mut [f64], bias: &[f64]) {
    let n = bias.len();
    if n == 0 {
        return;
    }
    for row in x.chunks_mut(n) {
        for (v, &b) in row.iter_mut().zip(bias) {
            *v += b;
        }
    }
}

fn layernorm_rows(
    x: &[f64],
    gamma: &[f64],
    beta: &[f64],
    eps: f64,
    mask: Option<&[bool]>,
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let d = gamma.len();
    let rows = x.len() / d;
    let mut out = vec![0.0; x.len()];
    let mut xhat = vec![0.0; x.len()];
    let mut inv_std = vec![0.0; rows];
    for r in 0..rows {
        let row = &x[r * d..(r + 1) * d];
        let (y, xh, istd) = match mask {
            None => kern::layernorm_row(row, gamma, beta, eps),
            Some(m) => kern::layernorm_row_masked(row, gamma, beta, eps, m),
        };
        out[r * d..(r + 1) * d].copy_from_slice(&y);
        xhat[r * d..(r + 1) * d].copy_from_slice(&xh);
        inv_std[r] = istd;
    }
    (out, xhat, inv_std)
}

fn extract_cols(x: &[f64], cols: usize, lo: usize, hi: usize) -> Vec<f64> {
    let rows = x.len() / cols;
    let w = hi - lo;
    let mut out = vec![0.0; rows * w];
    for r in 0..rows {
        out[r * w..(r + 1) * w].copy_from_slice(&x[r * cols + lo..r * cols + hi]);
    }
    out
}

/// Forward pass of one sample through the first `depth` layers, classified
/// by `head`. Returns logits.
pub(crate) fn forward_sample(
    mf: &ModelF64,
    img: &[f32],
    depth: usize,
    head: &HeadF64,
    mut trace: Option<&mut TraceF64>,
) -> Vec<f64> {
    let d = mf.d;
    let t = mf.n_patches + 1;
    let pdim = mf.patch_dim();

    let patches = unfold_patches(img, mf.image_size, mf.patch);
    let mut x = vec![0.0f64; t * d];
    x[0..d].copy_from_slice(&mf.cls_token);
    let tok = kern::matmul_nt(&patches, &mf.patch_embed, mf.n_patches, pdim, d);
    x[d..].copy_from_slice(&tok);
    for r in 1..t {
        for j in 0..d {
            x[r * d + j] += mf.patch_embed_bias[j];
        }
    }
    for (v, &pe) in x.iter_mut().zip(&mf.pos_embed) {
        *v += pe;
    }
    if let Some(tr) = trace.as_deref_mut() {
        tr.patches = patches;
        tr.x0 = x.clone();
    }

    for lw in mf.layers.iter().take(depth) {
        let dims = lw.dims;
        let (qh, vh) = (dims.qk / dims.heads, dims.v / dims.heads);
        let x_in = x.clone();

        let (y1, ln1_xhat, ln1_inv) =
            layernorm_rows(&x, &lw.ln1_gamma, &lw.ln1_beta, mf.eps, mf.ln_stat_mask.as_deref());
        let mut q = kern::matmul_nt(&y1, &lw.wq, t, d, dims.qk);
        add_bias_rows(&mut q, &lw.bq);
        let mut k = kern::matmul_nt(&y1, &lw.wk, t, d, dims.qk);
        add_bias_rows(&mut k, &lw.bk);
        let mut v = kern::matmul_nt(&y1, &lw.wv, t, d, dims.v);
        add_bias_rows(&mut v, &lw.bv);

        let scale = 1.0 / (qh as f64).sqrt();
        let mut o = vec![0.0f64; t * dims.v];
        let mut probs_all = vec![0.0f64; dims.heads * t * t];
        for h in 0..dims.heads {
            let qb = extract_cols(&q, dims.qk, h * qh, (h + 1) * qh);
            let kb = extract_cols(&k, dims.qk, h * qh, (h + 1) * qh);
            let vb = extract_cols(&v, dims.v, h * vh, (h + 1) * vh);
            let mut s = kern::matmul_nt(&qb, &kb, t, qh, t);
            for val in s.iter_mut() {
                *val *= scale;
            }
            for row in s.chunks_mut(t) {
                kern::softmax_row(row);
            }
            probs_all[h * t * t..(h + 1) * t * t].copy_from_slice(&s);
            let oh = kern::matmul(&s, &vb, t, t, vh);
            for r in 0..t {
                o[r * dims.v + h * vh..r * dims.v + (h + 1) * vh]
                    .copy_from_slice(&oh[r * vh..(r + 1) * vh]);
            }
        }
        let attn = kern::matmul_nt(&o, &lw.wo, t, dims.v, d);
        for r in 0..t {
            for j in 0..d {
                x[r * d + j] += attn[r * d + j] + lw.bo[j];
            }
        }
        let x_mid = x.clone();

        let (y2, ln2_xhat, ln2_inv) =
            layernorm_rows(&x, &lw.ln2_gamma, &lw.ln2_beta, mf.eps, mf.ln_stat_mask.as_deref());
        let mut h_pre = kern::matmul_nt(&y2, &lw.w1, t, d, dims.expansion);
        add_bias_rows(&mut h_pre, &lw.b1);
        let h_act: Vec<f64> = h_pre.iter().map(|&p| kern::gelu(p)).collect();
        let mlp = kern::matmul_nt(&h_act, &lw.w2, t, dims.expansion, d);
        for r in 0..t {
            for j in 0..d {
                x[r * d + j] += mlp[r * d + j] + lw.b2[j];
            }
        }

        if let Some(tr) = trace.as_deref_mut() {
            tr.layers.push(LayerTrace {
                x_in,
                ln1_xhat,
                ln1_inv_std: ln1_inv,
                y1,
                q,
                k,
                v,
                probs: probs_all,
                o,
                x_mid,
                ln2_xhat,
                ln2_inv_std: ln2_inv,
                y2,
                h_pre,
                h_act,
                x_out: x.clone(),
            });
        }
    }

    let feat = x[0..d].to_vec();
    let (z, head_xhat, head_inv) = match mf.ln_stat_mask.as_deref() {
        None => kern::layernorm_row(&feat, &head.ln_gamma, &head.ln_beta, mf.eps),
        Some(m) => kern::layernorm_row_masked(&feat, &head.ln_gamma, &head.ln_beta, mf.eps, m),
    };
    let mut logits = head.bias.clone();
    for c in 0..head.classes {
        logits[c] += kern::dot(&head.weight[c * d..(c + 1) * d], &z);
    }
    if let Some(tr) = trace.as_deref_mut() {
        tr.feat = feat;
        tr.head_xhat = head_xhat;
        tr.head_inv_std = head_inv;
        tr.z = z;
        tr.logits = logits.clone();
    }
    logits
}

pub(crate) struct LayerGradF64 {
    pub ln1_gamma: Vec<f64>,
    pub ln1_beta: Vec<f64>,
    pub wq: Vec<f64>,
    pub bq: Vec<f64>,
    pub wk: Vec<f64>,
    pub bk: Vec<f64>,
    pub wv: Vec<f64>,
    pub bv: Vec<f64>,
    pub wo: Vec<f64>,
    pub bo: Vec<f64>,
    pub ln2_gamma: Vec<f64>,
    pub ln2_beta: Vec<f64>,
    pub w1: Vec<f64>,
    pub b1: Vec<f64>,
    pub w2: Vec<f64>,
    pub b2: Vec<f64>,
}

pub(crate) struct GradF64 {
    pub patch_embed: Vec<f64>,
    pub patch_embed_bias: Vec<f64>,
    pub cls_token: Vec<f64>,
    pub pos_embed: Vec<f64>,
    pub layers: Vec<LayerGradF64>,
    pub head_ln_gamma: Vec<f64>,
    pub head_ln_beta: Vec<f64>,
    pub head_weight: Vec<f64>,
    pub head_bias: Vec<f64>,
}

impl GradF64 {
    pub fn zeros_like(mf: &ModelF64) -> Self {
        let d = mf.d;
        GradF64 {
            patch_embed: vec![0.0; d * mf.patch_dim()],
            patch_embed_bias: vec![0.0; d],
            cls_token: vec![0.0; d],
            pos_embed: vec![0.0; (mf.n_patches + 1) * d],
            layers: mf
                .layers
                .iter()
                .map(|lw| LayerGradF64 {
                    ln1_gamma: vec![0.0; d],
                    ln1_beta: vec![0.0; d],
                    wq: vec![0.0; lw.dims.qk * d],
                    bq: vec![0.0; lw.dims.qk],
                    wk: vec![0.0; lw.dims.qk * d],
                    bk: vec![0.0; lw.dims.qk],
                    wv: vec![0.0; lw.dims.v * d],
                    bv: vec![0.0; lw.dims.v],
                    wo: vec![0.0; d * lw.dims.v],
                    bo: vec![0.0; d],
                    ln2_gamma: vec![0.0; d],
                    ln2_beta: vec![0.0; d],
                    w1: vec![0.0; lw.dims.expansion * d],
                    b1: vec![0.0; lw.dims.expansion],
                    w2: vec![0.0; d * lw.dims.expansion],
                    b2: vec![0.0; d],
                })
                .collect(),
            head_ln_gamma: vec![0.0; d],
            head_ln_beta: vec![0.0; d],
            head_weight: vec![0.0; mf.head.classes * d],
            head_bias: vec![0.0; mf.head.classes],
        }
    }
}

/// Per-sample cross-entropy loss (natural log).
pub(crate) fn ce_loss(logits: &[f64], label: usize) -> f64 {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|&v| (v - max).exp()).sum::<f64>().ln();
    lse - logits[label]
}

/// Reverse pass of one sample, seeded with d(scale * CE)/dlogits.
/// Accumulates weight gradients into `g` and returns the unscaled loss.
pub(crate) fn backward_sample(
    mf: &ModelF64,
    tr: &TraceF64,
    label: usize,
    scale: f64,
    g: &mut GradF64,
) -> f64 {
    let d = mf.d;
    let t = mf.n_patches + 1;
    let loss = ce_loss(&tr.logits, label);

    // Fused softmax + cross-entropy backward.
    let max = tr.logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut dlogits: Vec<f64> = tr.logits.iter().map(|&v| (v - max).exp()).collect();
    let sum: f64 = dlogits.iter().sum();
    for v in dlogits.iter_mut() {
        *v /= sum;
    }
    dlogits[label] -= 1.0;
    for v in dlogits.iter_mut() {
        *v *= scale;
    }

    // Head: logits = W * z + b.
    let mut dz = vec![0.0f64; d];
    for c in 0..mf.head.classes {
        let dl = dlogits[c];
        g.head_bias[c] += dl;
        let wrow = &mf.head.weight[c * d..(c + 1) * d];
        let grow = &mut g.head_weight[c * d..(c + 1) * d];
        for j in 0..d {
            grow[j] += dl * tr.z[j];
            dz[j] += dl * wrow[j];
        }
    }
    for j in 0..d {
        g.head_ln_gamma[j] += dz[j] * tr.head_xhat[j];
        g.head_ln_beta[j] += dz[j];
    }
    let dfeat = kern::layernorm_row_backward(&dz, &tr.head_xhat, tr.head_inv_std, &mf.head.ln_gamma);

    let depth = tr.layers.len();
    let mut dx = vec![0.0f64; t * d];
    dx[0..d].copy_from_slice(&dfeat);

    for l in (0..depth).rev() {
        let lw = &mf.layers[l];
        let lt = &tr.layers[l];
        let lg = &mut g.layers[l];
        let dims = lw.dims;
        let (qh, vh) = (dims.qk / dims.heads, dims.v / dims.heads);

        // MLP block: x_out = x_mid + h_act * w2^T + b2.
        for r in 0..t {
            let dxr = &dx[r * d..(r + 1) * d];
            for j in 0..d {
                lg.b2[j] += dxr[j];
            }
            kern::add_outer(&mut lg.w2, dxr, &lt.h_act[r * dims.expansion..(r + 1) * dims.expansion]);
        }
        let dh_act = kern::matmul(&dx, &lw.w2, t, d, dims.expansion);
        let mut dh_pre = dh_act;
        for (v, &p) in dh_pre.iter_mut().zip(&lt.h_pre) {
            *v *= kern::gelu_prime(p);
        }
        for r in 0..t {
            let dhr = &dh_pre[r * dims.expansion..(r + 1) * dims.expansion];
            for (bv, &dv) in lg.b1.iter_mut().zip(dhr) {
                *bv += dv;
            }
            kern::add_outer(&mut lg.w1, dhr, &lt.y2[r * d..(r + 1) * d]);
        }
        let dy2 = kern::matmul(&dh_pre, &lw.w1, t, dims.expansion, d);
        for r in 0..t {
            let dyr = &dy2[r * d..(r + 1) * d];
            let xhr = &lt.ln2_xhat[r * d..(r + 1) * d];
            for j in 0..d {
                lg.ln2_gamma[j] += dyr[j] * xhr[j];
                lg.ln2_beta[j] += dyr[j];
            }
            let dxr = kern::layernorm_row_backward(dyr, xhr, lt.ln2_inv_std[r], &lw.ln2_gamma);
            for j in 0..d {
                dx[r * d + j] += dxr[j];
            }
        }

        // Attention block: x_mid = x_in + o * wo^T + bo.
        let d_o = kern::matmul(&dx, &lw.wo, t, d, dims.v);
        for r in 0..t {
            let dxr = &dx[r * d..(r + 1) * d];
            for j in 0..d {
                lg.bo[j] += dxr[j];
            }
            kern::add_outer(&mut lg.wo, dxr, &lt.o[r * dims.v..(r + 1) * dims.v]);
        }

        let scale_attn = 1.0 / (qh as f64).sqrt();
        let mut dq = vec![0.0f64; t * dims.qk];
        let mut dk = vec![0.0f64; t * dims.qk];
        let mut dv = vec![0.0f64; t * dims.v];
        for h in 0..dims.heads {
            let doh = extract_cols(&d_o, dims.v, h * vh, (h + 1) * vh);
            let vb = extract_cols(&lt.v, dims.v, h * vh, (h + 1) * vh);
            let qb = extract_cols(&lt.q, dims.qk, h * qh, (h + 1) * qh);
            let kb = extract_cols(&lt.k, dims.qk, h * qh, (h + 1) * qh);
            let pr = &lt.probs[h * t * t..(h + 1) * t * t];

            let dpr = kern::matmul_nt(&doh, &vb, t, vh, t);
            let mut dvb = vec![0.0f64; t * vh];
            for r in 0..t {
                kern::add_outer(&mut dvb, &pr[r * t..(r + 1) * t], &doh[r * vh..(r + 1) * vh]);
            }
            // Softmax backward per row, folding in the 1/sqrt(qh) factor.
            let mut ds = vec![0.0f64; t * t];
            for r in 0..t {
                let prow = &pr[r * t..(r + 1) * t];
                let dprow = &dpr[r * t..(r + 1) * t];
                let inner = kern::dot(prow, dprow);
                let dsrow = &mut ds[r * t..(r + 1) * t];
                for j in 0..t {
                    dsrow[j] = prow[j] * (dprow[j] - inner) * scale_attn;
                }
            }
            let dqb = kern::matmul(&ds, &kb, t, t, qh);
            let mut dkb = vec![0.0f64; t * qh];
            for r in 0..t {
                kern::add_outer(&mut dkb, &ds[r * t..(r + 1) * t], &qb[r * qh..(r + 1) * qh]);
            }
            // dkb currently holds sum_r ds[r] outer q[r] laid out [t x qh]:
            // row i of dkb is sum over r of ds[r][i] * q[r], which is dK.
            for r in 0..t {
                dq[r * dims.qk + h * qh..r * dims.qk + (h + 1) * qh]
                    .copy_from_slice(&dqb[r * qh..(r + 1) * qh]);
                dk[r * dims.qk + h * qh..r * dims.qk + (h + 1) * qh]
                    .copy_from_slice(&dkb[r * qh..(r + 1) * qh]);
                dv[r * dims.v + h * vh..r * dims.v + (h + 1) * vh]
                    .copy_from_slice(&dvb[r * vh..(r + 1) * vh]);
            }
        }

        let mut dy1 = kern::matmul(&dq, &lw.wq, t, dims.qk, d);
        let dy1k = kern::matmul(&dk, &lw.wk, t, dims.qk, d);
        let dy1v = kern::matmul(&dv, &lw.wv, t, dims.v, d);
        for ((a, &b), &c) in dy1.iter_mut().zip(&dy1k).zip(&dy1v) {
            *a += b + c;
        }
        for r in 0..t {
            let y1r = &lt.y1[r * d..(r + 1) * d];
            kern::add_outer(&mut lg.wq, &dq[r * dims.qk..(r + 1) * dims.qk], y1r);
            kern::add_outer(&mut lg.wk, &dk[r * dims.qk..(r + 1) * dims.qk], y1r);
            kern::add_outer(&mut lg.wv, &dv[r * dims.v..(r + 1) * dims.v], y1r);
            for (bv, &g1) in lg.bq.iter_mut().zip(&dq[r * dims.qk..(r + 1) * dims.qk]) {
                *bv += g1;
            }
            for (bv, &g1) in lg.bk.iter_mut().zip(&dk[r * dims.qk..(r + 1) * dims.qk]) {
                *bv += g1;
            }
            for (bv, &g1) in lg.bv.iter_mut().zip(&dv[r * dims.v..(r + 1) * dims.v]) {
                *bv += g1;
            }
        }
        for r in 0..t {
            let dyr = &dy1[r * d..(r + 1) * d];
            let xhr = &lt.ln1_xhat[r * d..(r + 1) * d];
            for j in 0..d {
                lg.ln1_gamma[j] += dyr[j] * xhr[j];
                lg.ln1_beta[j] += dyr[j];
            }
            let dxr = kern::layernorm_row_backward(dyr, xhr, lt.ln1_inv_std[r], &lw.ln1_gamma);
            for j in 0..d {
                dx[r * d + j] += dxr[j];
            }
        }
    }

    // Embedding stage: x0 = [cls; patches * W^T + b] + pos.
    let pdim = mf.patch_dim();
    for j in 0..d {
        g.cls_token[j] += dx[j];
    }
    for (gv, &dv) in g.pos_embed.iter_mut().zip(&dx) {
        *gv += dv;
    }
    for r in 1..t {
        let dxr = &dx[r * d..(r + 1) * d];
        kern::add_outer(&mut g.patch_embed, dxr, &tr.patches[(r - 1) * pdim..r * pdim]);
        for (bv, &dv) in g.patch_embed_bias.iter_mut().zip(dxr) {
            *bv += dv;
        }
    }
    loss
}
