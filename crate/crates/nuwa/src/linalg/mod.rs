//! Dense f32 tensors and the numerical kernels behind the model runtime.
//!
//! Storage is row-major f32; every reduction runs with f64 accumulation so
//! results do not depend on batching or traversal order.

pub(crate) mod kern;
mod svd;

pub use kern::{mac_count, mac_reset};
pub use svd::SvdFactorization;
pub(crate) use svd::{svd_f64, SvdF64};

use crate::error::{NuwaError, Result};
use serde::{Deserialize, Serialize};

/// Row-major dense tensor of 32-bit floats.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if data.len() != numel {
            return Err(NuwaError::Dimension(format!(
                "data length {} does not match shape {:?} (numel {})",
                data.len(),
                shape,
                numel
            )));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let numel: usize = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; numel],
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    /// Extent of a 2-D tensor's first axis.
    pub fn rows(&self) -> usize {
        debug_assert_eq!(self.shape.len(), 2);
        self.shape[0]
    }

    /// Extent of a 2-D tensor's second axis.
    pub fn cols(&self) -> usize {
        debug_assert_eq!(self.shape.len(), 2);
        self.shape[1]
    }

    pub fn get2(&self, i: usize, j: usize) -> f32 {
        self.data[i * self.shape[1] + j]
    }

    pub(crate) fn to_f64(&self) -> Vec<f64> {
        self.data.iter().map(|&x| x as f64).collect()
    }

    pub(crate) fn from_f64(shape: &[usize], data: &[f64]) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Tensor {
            shape: shape.to_vec(),
            data: data.iter().map(|&x| x as f32).collect(),
        }
    }

    /// c = self * other for 2-D operands with matching inner extents.
    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        if self.shape.len() != 2 || other.shape.len() != 2 {
            return Err(NuwaError::Dimension(format!(
                "matmul expects rank-2 tensors, got {:?} x {:?}",
                self.shape, other.shape
            )));
        }
        let (m, k) = (self.shape[0], self.shape[1]);
        let (k2, n) = (other.shape[0], other.shape[1]);
        if k != k2 {
            return Err(NuwaError::Dimension(format!(
                "matmul inner extents differ: [{m}x{k}] x [{k2}x{n}]"
            )));
        }
        let c = kern::matmul(&self.to_f64(), &other.to_f64(), m, k, n);
        Ok(Tensor::from_f64(&[m, n], &c))
    }

    /// Row-wise stabilized softmax of a 2-D tensor.
    pub fn softmax_rows(&self) -> Tensor {
        debug_assert_eq!(self.shape.len(), 2);
        let n = self.shape[1];
        let mut data = self.to_f64();
        for row in data.chunks_mut(n.max(1)) {
            kern::softmax_row(row);
        }
        Tensor::from_f64(&self.shape, &data)
    }

    /// Elementwise exact (erf-based) GELU.
    pub fn gelu(&self) -> Tensor {
        let data: Vec<f64> = self.data.iter().map(|&x| kern::gelu(x as f64)).collect();
        Tensor::from_f64(&self.shape, &data)
    }

    /// Layer normalization over the last axis followed by the gamma/beta
    /// affine transform.
    pub fn layernorm(&self, gamma: &Tensor, beta: &Tensor, eps: f64) -> Result<Tensor> {
        let d = *self.shape.last().ok_or_else(|| {
            NuwaError::Dimension("layernorm needs at least one axis".to_string())
        })?;
        if gamma.numel() != d || beta.numel() != d {
            return Err(NuwaError::Dimension(format!(
                "layernorm affine params must have length {d}, got {} and {}",
                gamma.numel(),
                beta.numel()
            )));
        }
        let g = gamma.to_f64();
        let b = beta.to_f64();
        let x = self.to_f64();
        let mut out = vec![0.0; x.len()];
        for (xr, or) in x.chunks(d).zip(out.chunks_mut(d)) {
            let (y, _, _) = kern::layernorm_row(xr, &g, &b, eps);
            or.copy_from_slice(&y);
        }
        Ok(Tensor::from_f64(&self.shape, &out))
    }

    /// Full singular value decomposition of a 2-D tensor.
    pub fn svd(&self) -> Result<SvdFactorization> {
        if self.shape.len() != 2 {
            return Err(NuwaError::Dimension(format!(
                "svd expects a rank-2 tensor, got {:?}",
                self.shape
            )));
        }
        let f = svd_f64(&self.to_f64(), self.shape[0], self.shape[1])?;
        Ok(SvdFactorization::from_f64(&f))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn assert_near(a: f64, b: f64, tol: f64, msg: &str) {
        assert!((a - b).abs() <= tol, "{msg}: {a} vs {b}");
    }

    fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
        let n: usize = shape.iter().product();
        let data: Vec<f32> = (0..n).map(|_| rng.gen_range(-1.0f32..1.0)).collect();
        Tensor::new(shape.to_vec(), data).unwrap()
    }

    #[test]
    fn matmul_identity() {
        let eye = Tensor::new(vec![3, 3], vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0]).unwrap();
        let a = Tensor::new(vec![3, 2], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let c = eye.matmul(&a).unwrap();
        assert_eq!(c.data(), a.data());
    }

    #[test]
    fn matmul_hand_case() {
        let a = Tensor::new(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let b = Tensor::new(vec![2, 1], vec![0.0, 1.0]).unwrap();
        let c = a.matmul(&b).unwrap();
        assert_eq!(c.shape(), &[2, 1]);
        assert_eq!(c.data(), &[2.0, 4.0]);
    }

    #[test]
    fn matmul_shape_mismatch() {
        let a = Tensor::zeros(&[2, 3]);
        let b = Tensor::zeros(&[4, 5]);
        assert!(matches!(a.matmul(&b), Err(NuwaError::Dimension(_))));
    }

    #[test]
    fn matmul_associative_on_random_triples() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..20 {
            let a = random_tensor(&mut rng, &[4, 4]);
            let b = random_tensor(&mut rng, &[4, 4]);
            let c = random_tensor(&mut rng, &[4, 4]);
            let left = a.matmul(&b).unwrap().matmul(&c).unwrap();
            let right = a.matmul(&b.matmul(&c).unwrap()).unwrap();
            for (x, y) in left.data().iter().zip(right.data()) {
                let scale = x.abs().max(y.abs()).max(1.0);
                assert!((x - y).abs() / scale < 1e-4);
            }
        }
    }

    #[test]
    fn softmax_uniform_and_stability() {
        let t = Tensor::new(vec![2, 3], vec![0.0, 0.0, 0.0, 1000.0, 0.0, -50.0]).unwrap();
        let s = t.softmax_rows();
        for j in 0..3 {
            assert_near(s.get2(0, j) as f64, 1.0 / 3.0, 1e-6, "uniform row");
        }
        assert_near(s.get2(1, 0) as f64, 1.0, 1e-6, "stabilized large entry");
        assert!(s.data().iter().all(|v| v.is_finite() && *v >= 0.0));
    }

    #[test]
    fn softmax_closed_form() {
        let t = Tensor::new(vec![1, 2], vec![std::f32::consts::LN_2, 0.0]).unwrap();
        let s = t.softmax_rows();
        assert_near(s.get2(0, 0) as f64, 2.0 / 3.0, 1e-6, "ln2 row");
        assert_near(s.get2(0, 1) as f64, 1.0 / 3.0, 1e-6, "ln2 row");
    }

    #[test]
    fn softmax_shift_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            let t = random_tensor(&mut rng, &[3, 5]);
            let shift: f32 = rng.gen_range(-4.0..4.0);
            let shifted = Tensor::new(
                t.shape().to_vec(),
                t.data().iter().map(|v| v + shift).collect(),
            )
            .unwrap();
            let a = t.softmax_rows();
            let b = shifted.softmax_rows();
            for (x, y) in a.data().iter().zip(b.data()) {
                assert!((x - y).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn gelu_values() {
        let t = Tensor::new(vec![3], vec![0.0, 10.0, 1.0]).unwrap();
        let g = t.gelu();
        assert_eq!(g.data()[0], 0.0);
        assert_near(g.data()[1] as f64, 10.0, 1e-6, "asymptote");
        assert_near(g.data()[2] as f64, 0.841345, 1e-6, "erf-based gelu(1)");
    }

    #[test]
    fn layernorm_constant_row_and_affine() {
        let x = Tensor::new(vec![1, 4], vec![5.0; 4]).unwrap();
        let gamma = Tensor::new(vec![4], vec![1.0; 4]).unwrap();
        let beta = Tensor::zeros(&[4]);
        let y = x.layernorm(&gamma, &beta, 1e-5).unwrap();
        for &v in y.data() {
            assert_near(v as f64, 0.0, 1e-6, "zero-variance guard");
        }
        let gamma0 = Tensor::zeros(&[4]);
        let beta_c = Tensor::new(vec![4], vec![2.5; 4]).unwrap();
        let y = x.layernorm(&gamma0, &beta_c, 1e-5).unwrap();
        for &v in y.data() {
            assert_eq!(v, 2.5);
        }
    }

    #[test]
    fn layernorm_hand_case() {
        let x = Tensor::new(vec![1, 2], vec![1.0, 3.0]).unwrap();
        let gamma = Tensor::new(vec![2], vec![1.0; 2]).unwrap();
        let beta = Tensor::zeros(&[2]);
        let y = x.layernorm(&gamma, &beta, 1e-12).unwrap();
        assert_near(y.data()[0] as f64, -1.0, 1e-5, "normalized");
        assert_near(y.data()[1] as f64, 1.0, 1e-5, "normalized");
    }

    #[test]
    fn layernorm_shift_scale_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let gamma = Tensor::new(vec![8], vec![1.0; 8]).unwrap();
        let beta = Tensor::zeros(&[8]);
        for _ in 0..20 {
            let x = random_tensor(&mut rng, &[2, 8]);
            let shift: f32 = rng.gen_range(-2.0..2.0);
            let scale: f32 = rng.gen_range(0.5..3.0);
            let moved = Tensor::new(
                x.shape().to_vec(),
                x.data().iter().map(|v| v * scale + shift).collect(),
            )
            .unwrap();
            let a = x.layernorm(&gamma, &beta, 1e-10).unwrap();
            let b = moved.layernorm(&gamma, &beta, 1e-10).unwrap();
            for (p, q) in a.data().iter().zip(b.data()) {
                assert!((p - q).abs() < 1e-4, "{p} vs {q}");
            }
        }
    }

    #[test]
    fn layernorm_pre_affine_moments() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let d = 16;
        let gamma = Tensor::new(vec![d], vec![1.0; d]).unwrap();
        let beta = Tensor::zeros(&[d]);
        let x = random_tensor(&mut rng, &[4, d]);
        let y = x.layernorm(&gamma, &beta, 1e-12).unwrap();
        for i in 0..4 {
            let row: Vec<f64> = (0..d).map(|j| y.get2(i, j) as f64).collect();
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            assert_near(mean, 0.0, 1e-5, "mean");
            assert_near(var, 1.0, 1e-3, "variance");
        }
    }

    #[test]
    fn svd_diagonal() {
        let a = Tensor::new(vec![2, 2], vec![3.0, 0.0, 0.0, 1.0]).unwrap();
        let f = a.svd().unwrap();
        assert_near(f.sigma[0], 3.0, 1e-6, "sigma0");
        assert_near(f.sigma[1], 1.0, 1e-6, "sigma1");
    }

    #[test]
    fn svd_rank_one() {
        let u = [1.0f32, 2.0, -1.0];
        let v = [0.5f32, -0.25];
        let mut data = vec![0.0f32; 6];
        for i in 0..3 {
            for j in 0..2 {
                data[i * 2 + j] = u[i] * v[j];
            }
        }
        let a = Tensor::new(vec![3, 2], data).unwrap();
        let f = a.svd().unwrap();
        let nu = (u.iter().map(|x| (x * x) as f64).sum::<f64>()).sqrt();
        let nv = (v.iter().map(|x| (x * x) as f64).sum::<f64>()).sqrt();
        assert_near(f.sigma[0], nu * nv, 1e-5, "sigma0 = |u||v|");
        assert_near(f.sigma[1], 0.0, 1e-6, "sigma1 = 0");
    }

    fn reconstruct(f: &SvdFactorization, m: usize, n: usize) -> Vec<f64> {
        let r = f.sigma.len();
        let u = f.u.to_f64();
        let vt = f.vt.to_f64();
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                let mut acc = 0.0;
                for t in 0..r {
                    acc += u[i * r + t] * f.sigma[t] * vt[t * n + j];
                }
                out[i * n + j] = acc;
            }
        }
        out
    }

    #[test]
    fn svd_reconstruction_seed7() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let a = random_tensor(&mut rng, &[4, 4]);
        let f = a.svd().unwrap();
        let rec = reconstruct(&f, 4, 4);
        let max_abs = a.data().iter().fold(0.0f64, |acc, &x| acc.max(x.abs() as f64));
        for (x, &y) in rec.iter().zip(a.data()) {
            assert!((x - y as f64).abs() <= 1e-4 * max_abs.max(1.0));
        }
    }

    #[test]
    fn svd_orthonormal_and_sorted() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for &(m, n) in &[(5, 3), (3, 5), (6, 6)] {
            let a = random_tensor(&mut rng, &[m, n]);
            let f = a.svd().unwrap();
            let r = f.sigma.len();
            assert_eq!(r, m.min(n));
            for w in f.sigma.windows(2) {
                assert!(w[0] >= w[1] && w[1] >= 0.0);
            }
            let u = f.u.to_f64();
            for c1 in 0..r {
                for c2 in 0..r {
                    let mut acc = 0.0;
                    for i in 0..m {
                        acc += u[i * r + c1] * u[i * r + c2];
                    }
                    let expect = if c1 == c2 { 1.0 } else { 0.0 };
                    assert_near(acc, expect, 1e-4, "u^T u");
                }
            }
            let vt = f.vt.to_f64();
            for r1 in 0..r {
                for r2 in 0..r {
                    let mut acc = 0.0;
                    for j in 0..n {
                        acc += vt[r1 * n + j] * vt[r2 * n + j];
                    }
                    let expect = if r1 == r2 { 1.0 } else { 0.0 };
                    assert_near(acc, expect, 1e-4, "v v^T");
                }
            }
        }
    }

    #[test]
    fn svd_energy_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        for &n in &[4usize, 16, 64] {
            let a = random_tensor(&mut rng, &[n, n]);
            let f = a.svd().unwrap();
            let energy: f64 = f.sigma.iter().map(|s| s * s).sum();
            let fro: f64 = a.data().iter().map(|&x| (x as f64) * (x as f64)).sum();
            assert!((energy - fro).abs() <= 1e-3 * fro.max(1e-12), "n={n}");
        }
    }

    #[test]
    fn svd_sign_convention_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let a = random_tensor(&mut rng, &[5, 4]);
        let f1 = a.svd().unwrap();
        let f2 = a.svd().unwrap();
        assert_eq!(f1.u.data(), f2.u.data());
        assert_eq!(f1.vt.data(), f2.vt.data());
        let u = f1.u.to_f64();
        let r = f1.sigma.len();
        for c in 0..r {
            let lead = (0..5).map(|i| u[i * r + c]).find(|x| x.abs() > 1e-6);
            if let Some(lead) = lead {
                assert!(lead >= 0.0, "column {c} leading entry negative");
            }
        }
    }
}
