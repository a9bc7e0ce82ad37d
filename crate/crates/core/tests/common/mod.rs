//! Shared test oracles. Everything here is independent of the library's
//! backward implementations: gradients come from central finite differences
//! of freshly rebuilt forward graphs, Gaussian quantities from dense
//! textbook formulas.

#![allow(dead_code)]

use promptgate::diff::Tensor;
use promptgate::rng::{split_stream, standard_normal};
use rand_chacha::ChaCha8Rng;

/// Build-and-evaluate closure type: fresh leaves in, scalar loss out.
pub type LossFn = dyn Fn(&[Tensor<f64>]) -> Tensor<f64>;

pub struct GradReport {
    pub max_rel_err: f64,
    pub checked: usize,
}

/// Central-difference gradient check. `inputs` lists (shape, values) of every
/// leaf the loss depends on; `f` rebuilds the graph from scratch for each
/// evaluation so perturbations never share state with the analytic pass.
pub fn check_gradients(
    inputs: &[(Vec<usize>, Vec<f64>)],
    f: &LossFn,
    h: f64,
    tol_rel: f64,
) -> GradReport {
    let leaves: Vec<Tensor<f64>> = inputs
        .iter()
        .map(|(s, v)| Tensor::parameter(s.clone(), v.clone()).unwrap())
        .collect();
    let loss = f(&leaves);
    assert_eq!(loss.len(), 1, "loss must be scalar");
    loss.backward().unwrap();
    let grads: Vec<Vec<f64>> = leaves
        .iter()
        .map(|t| t.grad().unwrap_or_else(|| vec![0.0; t.len()]))
        .collect();

    let eval = |which: usize, elem: usize, delta: f64| -> f64 {
        let leaves: Vec<Tensor<f64>> = inputs
            .iter()
            .enumerate()
            .map(|(k, (s, v))| {
                let mut vv = v.clone();
                if k == which {
                    vv[elem] += delta;
                }
                Tensor::from_vec(s.clone(), vv).unwrap()
            })
            .collect();
        f(&leaves).item()
    };

    let mut max_rel = 0.0f64;
    let mut checked = 0usize;
    for (i, (_, base)) in inputs.iter().enumerate() {
        for j in 0..base.len() {
            let fd = (eval(i, j, h) - eval(i, j, -h)) / (2.0 * h);
            let an = grads[i][j];
            let scale = an.abs().max(fd.abs()).max(1e-6);
            let rel = (an - fd).abs() / scale;
            assert!(
                rel < tol_rel,
                "gradient mismatch at input {i} elem {j}: analytic {an}, fd {fd}, rel {rel}"
            );
            max_rel = max_rel.max(rel);
            checked += 1;
        }
    }
    GradReport {
        max_rel_err: max_rel,
        checked,
    }
}

pub fn rng_for(label: &str) -> ChaCha8Rng {
    split_stream(0x5eed, label)
}

pub fn random_values(rng: &mut ChaCha8Rng, n: usize, std: f64) -> Vec<f64> {
    (0..n).map(|_| standard_normal(rng) * std).collect()
}

// ── Dense Gaussian oracle ───────────────────────────────────────────────

/// Gauss-Jordan inverse; panics if the matrix is numerically singular.
pub fn dense_inverse(a: &[f64], d: usize) -> Vec<f64> {
    let mut aug = vec![0.0; d * 2 * d];
    for i in 0..d {
        for j in 0..d {
            aug[i * 2 * d + j] = a[i * d + j];
        }
        aug[i * 2 * d + d + i] = 1.0;
    }
    for col in 0..d {
        let mut pivot = col;
        for r in col + 1..d {
            if aug[r * 2 * d + col].abs() > aug[pivot * 2 * d + col].abs() {
                pivot = r;
            }
        }
        assert!(aug[pivot * 2 * d + col].abs() > 1e-300, "singular matrix");
        if pivot != col {
            for j in 0..2 * d {
                aug.swap(col * 2 * d + j, pivot * 2 * d + j);
            }
        }
        let p = aug[col * 2 * d + col];
        for j in 0..2 * d {
            aug[col * 2 * d + j] /= p;
        }
        for r in 0..d {
            if r == col {
                continue;
            }
            let factor = aug[r * 2 * d + col];
            if factor != 0.0 {
                for j in 0..2 * d {
                    aug[r * 2 * d + j] -= factor * aug[col * 2 * d + j];
                }
            }
        }
    }
    let mut inv = vec![0.0; d * d];
    for i in 0..d {
        for j in 0..d {
            inv[i * d + j] = aug[i * 2 * d + d + j];
        }
    }
    inv
}

/// log-determinant via LU with partial pivoting (positive-definite inputs).
pub fn dense_log_det(a: &[f64], d: usize) -> f64 {
    let mut m = a.to_vec();
    let mut sign = 1.0f64;
    let mut logdet = 0.0f64;
    for col in 0..d {
        let mut pivot = col;
        for r in col + 1..d {
            if m[r * d + col].abs() > m[pivot * d + col].abs() {
                pivot = r;
            }
        }
        assert!(m[pivot * d + col].abs() > 1e-300, "singular matrix");
        if pivot != col {
            sign = -sign;
            for j in 0..d {
                m.swap(col * d + j, pivot * d + j);
            }
        }
        let p = m[col * d + col];
        if p < 0.0 {
            sign = -sign;
        }
        logdet += p.abs().ln();
        for r in col + 1..d {
            let factor = m[r * d + col] / p;
            for j in col..d {
                m[r * d + j] -= factor * m[col * d + j];
            }
        }
    }
    assert!(sign > 0.0, "negative determinant for supposedly PD matrix");
    logdet
}

/// Multivariate normal log density straight from the textbook formula,
/// using the explicit inverse and determinant.
pub fn dense_gaussian_log_pdf(x: &[f64], mu: &[f64], cov: &[f64]) -> f64 {
    let d = mu.len();
    let inv = dense_inverse(cov, d);
    let logdet = dense_log_det(cov, d);
    let diff: Vec<f64> = x.iter().zip(mu).map(|(a, b)| a - b).collect();
    let mut maha = 0.0;
    for i in 0..d {
        for j in 0..d {
            maha += diff[i] * inv[i * d + j] * diff[j];
        }
    }
    -0.5 * (maha + d as f64 * (2.0 * std::f64::consts::PI).ln() + logdet)
}

/// Random symmetric positive-definite matrix: A = B B^T + eps I.
pub fn random_spd(rng: &mut ChaCha8Rng, d: usize, scale: f64) -> Vec<f64> {
    let b = random_values(rng, d * d, scale);
    let mut a = vec![0.0; d * d];
    for i in 0..d {
        for j in 0..d {
            let mut acc = 0.0;
            for k in 0..d {
                acc += b[i * d + k] * b[j * d + k];
            }
            a[i * d + j] = acc;
        }
        a[i * d + i] += 0.05 * scale * scale;
    }
    a
}
