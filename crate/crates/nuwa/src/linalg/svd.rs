//! One-sided Jacobi singular value decomposition.
//!
//! Adequate for the matrix sizes this crate factors (a few hundred on a
//! side at most), deterministic, and accurate to close to machine epsilon.
//! The sign convention is fixed: the first significantly nonzero entry of
//! each left singular vector is non-negative.

use crate::error::{NuwaError, Result};
use crate::linalg::Tensor;

const MAX_SWEEPS: usize = 60;
const ORTH_TOL: f64 = 1e-13;

/// Full factorization a = u * diag(sigma) * vt with r = min(m, n).
#[derive(Debug, Clone)]
pub struct SvdFactorization {
    /// Left singular vectors, m x r.
    pub u: Tensor,
    /// Singular values, non-negative, descending.
    pub sigma: Vec<f64>,
    /// Right singular vectors transposed, r x n.
    pub vt: Tensor,
}

/// f64 result used internally where rebuild precision matters.
#[derive(Debug, Clone)]
pub(crate) struct SvdF64 {
    pub u: Vec<f64>, // m x r row-major
    pub sigma: Vec<f64>,
    pub vt: Vec<f64>, // r x n row-major
    pub m: usize,
    pub n: usize,
}

impl SvdF64 {
    pub fn rank(&self) -> usize {
        self.sigma.len()
    }
}

pub(crate) fn svd_f64(a: &[f64], m: usize, n: usize) -> Result<SvdF64> {
    assert_eq!(a.len(), m * n);
    if m == 0 || n == 0 {
        return Ok(SvdF64 {
            u: vec![],
            sigma: vec![],
            vt: vec![],
            m,
            n,
        });
    }
    if m < n {
        // Factor the transpose and swap the roles of u and v.
        let mut at = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                at[j * m + i] = a[i * n + j];
            }
        }
        let f = svd_f64(&at, n, m)?;
        let r = f.sigma.len();
        // u of a = v of a^T ( = transpose of f.vt ), vt of a = u^T of a^T.
        let mut u = vec![0.0; m * r];
        for i in 0..r {
            for j in 0..m {
                u[j * r + i] = f.vt[i * m + j];
            }
        }
        let mut vt = vec![0.0; r * n];
        for i in 0..n {
            for j in 0..r {
                vt[j * n + i] = f.u[i * r + j];
            }
        }
        return Ok(SvdF64 {
            u,
            sigma: f.sigma,
            vt,
            m,
            n,
        });
    }

    // Columns of `a` as working vectors; v accumulates the rotations.
    let mut cols: Vec<Vec<f64>> = (0..n).map(|j| (0..m).map(|i| a[i * n + j]).collect()).collect();
    let mut v: Vec<Vec<f64>> = (0..n)
        .map(|j| {
            let mut e = vec![0.0; n];
            e[j] = 1.0;
            e
        })
        .collect();

    let mut worst = 0.0f64;
    let mut converged = false;
    for _ in 0..MAX_SWEEPS {
        worst = 0.0;
        for p in 0..n {
            for q in (p + 1)..n {
                let (alpha, beta, gamma) = {
                    let (cp, cq) = (&cols[p], &cols[q]);
                    let mut alpha = 0.0;
                    let mut beta = 0.0;
                    let mut gamma = 0.0;
                    for i in 0..m {
                        alpha += cp[i] * cp[i];
                        beta += cq[i] * cq[i];
                        gamma += cp[i] * cq[i];
                    }
                    (alpha, beta, gamma)
                };
                if alpha == 0.0 || beta == 0.0 {
                    continue;
                }
                let off = gamma.abs() / (alpha * beta).sqrt();
                worst = worst.max(off);
                if off <= ORTH_TOL {
                    continue;
                }
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let cs = 1.0 / (1.0 + t * t).sqrt();
                let sn = cs * t;
                let (lo, hi) = cols.split_at_mut(q);
                let (cp, cq) = (&mut lo[p], &mut hi[0]);
                for i in 0..m {
                    let x = cp[i];
                    let y = cq[i];
                    cp[i] = cs * x - sn * y;
                    cq[i] = sn * x + cs * y;
                }
                let (lo, hi) = v.split_at_mut(q);
                let (vp, vq) = (&mut lo[p], &mut hi[0]);
                for i in 0..n {
                    let x = vp[i];
                    let y = vq[i];
                    vp[i] = cs * x - sn * y;
                    vq[i] = sn * x + cs * y;
                }
            }
        }
        if worst <= ORTH_TOL {
            converged = true;
            break;
        }
    }
    if !converged && worst > 1e-8 {
        return Err(NuwaError::Numeric(format!(
            "svd failed to converge after {MAX_SWEEPS} sweeps (residual {worst:.3e})"
        )));
    }

    let norms: Vec<f64> = cols.iter().map(|c| dot(c, c).sqrt()).collect();
    let max_norm = norms.iter().cloned().fold(0.0f64, f64::max);

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| norms[j].partial_cmp(&norms[i]).unwrap().then(i.cmp(&j)));

    let r = m.min(n); // == n here
    let mut sigma = Vec::with_capacity(r);
    let mut u_cols: Vec<Vec<f64>> = Vec::with_capacity(r);
    let mut degenerate: Vec<usize> = Vec::new();
    for (slot, &j) in order.iter().enumerate() {
        let s = norms[j];
        sigma.push(s);
        if s > max_norm * 1e-12 && s > 0.0 {
            u_cols.push(cols[j].iter().map(|x| x / s).collect());
        } else {
            u_cols.push(vec![0.0; m]);
            degenerate.push(slot);
        }
    }
    // Complete degenerate directions into an orthonormal set.
    for slot in degenerate {
        let mut filled = false;
        for k in 0..m {
            let mut cand = vec![0.0; m];
            cand[k] = 1.0;
            for uc in u_cols.iter() {
                let proj = dot(uc, &cand);
                if proj != 0.0 {
                    for i in 0..m {
                        cand[i] -= proj * uc[i];
                    }
                }
            }
            let nrm = dot(&cand, &cand).sqrt();
            if nrm > 0.5 {
                for x in cand.iter_mut() {
                    *x /= nrm;
                }
                u_cols[slot] = cand;
                filled = true;
                break;
            }
        }
        debug_assert!(filled, "failed to complete orthonormal basis");
    }

    // Sign convention: first entry of each u column with magnitude above
    // 1e-6 (columns are unit norm) must be non-negative.
    let mut v_rows: Vec<Vec<f64>> = order.iter().map(|&j| v[j].clone()).collect();
    for (uc, vr) in u_cols.iter_mut().zip(v_rows.iter_mut()) {
        if let Some(&lead) = uc.iter().find(|x| x.abs() > 1e-6) {
            if lead < 0.0 {
                for x in uc.iter_mut() {
                    *x = -*x;
                }
                for x in vr.iter_mut() {
                    *x = -*x;
                }
            }
        }
    }

    let mut u = vec![0.0; m * r];
    for (j, uc) in u_cols.iter().enumerate() {
        for i in 0..m {
            u[i * r + j] = uc[i];
        }
    }
    let mut vt = vec![0.0; r * n];
    for (i, vr) in v_rows.iter().enumerate() {
        vt[i * n..(i + 1) * n].copy_from_slice(vr);
    }
    Ok(SvdF64 { u, sigma, vt, m, n })
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

impl SvdFactorization {
    pub(crate) fn from_f64(f: &SvdF64) -> Self {
        SvdFactorization {
            u: Tensor::from_f64(&[f.m, f.sigma.len()], &f.u),
            sigma: f.sigma.clone(),
            vt: Tensor::from_f64(&[f.sigma.len(), f.n], &f.vt),
        }
    }
}
