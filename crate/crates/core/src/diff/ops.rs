//! Differentiable operations over `Tensor`.
//!
//! Each op evaluates eagerly and registers a closure that maps the upstream
//! gradient to parent gradients. Axis-wise ops (softmax, l2 normalization)
//! work on lanes along any axis; matrix ops are rank-2.

use crate::error::{Error, Result};
use crate::scalar::Real;

use super::tensor::{same_shape, Tensor};

fn lane_geometry(shape: &[usize], axis: usize) -> Result<(usize, usize, usize)> {
    if axis >= shape.len() {
        return Err(Error::Dimension(format!(
            "axis {axis} out of range for shape {shape:?}"
        )));
    }
    let n = shape[axis];
    let stride: usize = shape[axis + 1..].iter().product();
    let outer: usize = shape[..axis].iter().product();
    Ok((n, stride, outer))
}

fn require_rank2<F: Real>(t: &Tensor<F>, op: &str) -> Result<(usize, usize)> {
    match t.shape() {
        [m, n] => Ok((*m, *n)),
        s => Err(Error::Dimension(format!("{op}: expected a matrix, got {s:?}"))),
    }
}

impl<F: Real> Tensor<F> {
    pub fn add(&self, other: &Tensor<F>) -> Result<Tensor<F>> {
        same_shape(self, other, "add")?;
        let out: Vec<F> = self
            .values()
            .iter()
            .zip(other.values().iter())
            .map(|(&a, &b)| a + b)
            .collect();
        let (pa, pb) = (self.clone(), other.clone());
        Ok(Tensor::from_op(
            self.shape().to_vec(),
            out,
            vec![self.clone(), other.clone()],
            Box::new(move |g| {
                if pa.requires_grad() {
                    pa.grad_mut(|d| {
                        for (d, &u) in d.iter_mut().zip(g) {
                            *d += u;
                        }
                    });
                }
                if pb.requires_grad() {
                    pb.grad_mut(|d| {
                        for (d, &u) in d.iter_mut().zip(g) {
                            *d += u;
                        }
                    });
                }
            }),
        ))
    }

    pub fn sub(&self, other: &Tensor<F>) -> Result<Tensor<F>> {
        same_shape(self, other, "sub")?;
        let out: Vec<F> = self
            .values()
            .iter()
            .zip(other.values().iter())
            .map(|(&a, &b)| a - b)
            .collect();
        let (pa, pb) = (self.clone(), other.clone());
        Ok(Tensor::from_op(
            self.shape().to_vec(),
            out,
            vec![self.clone(), other.clone()],
            Box::new(move |g| {
                if pa.requires_grad() {
                    pa.grad_mut(|d| {
                        for (d, &u) in d.iter_mut().zip(g) {
                            *d += u;
                        }
                    });
                }
                if pb.requires_grad() {
                    pb.grad_mut(|d| {
                        for (d, &u) in d.iter_mut().zip(g) {
                            *d -= u;
                        }
                    });
                }
            }),
        ))
    }

    /// Elementwise product.
    pub fn mul(&self, other: &Tensor<F>) -> Result<Tensor<F>> {
        same_shape(self, other, "mul")?;
        let av = self.to_vec();
        let bv = other.to_vec();
        let out: Vec<F> = av.iter().zip(bv.iter()).map(|(&a, &b)| a * b).collect();
        let (pa, pb) = (self.clone(), other.clone());
        Ok(Tensor::from_op(
            self.shape().to_vec(),
            out,
            vec![self.clone(), other.clone()],
            Box::new(move |g| {
                if pa.requires_grad() {
                    pa.grad_mut(|d| {
                        for i in 0..d.len() {
                            d[i] += g[i] * bv[i];
                        }
                    });
                }
                if pb.requires_grad() {
                    pb.grad_mut(|d| {
                        for i in 0..d.len() {
                            d[i] += g[i] * av[i];
                        }
                    });
                }
            }),
        ))
    }

    pub fn scale(&self, c: F) -> Tensor<F> {
        let out: Vec<F> = self.values().iter().map(|&a| a * c).collect();
        let pa = self.clone();
        Tensor::from_op(
            self.shape().to_vec(),
            out,
            vec![self.clone()],
            Box::new(move |g| {
                pa.grad_mut(|d| {
                    for (d, &u) in d.iter_mut().zip(g) {
                        *d += u * c;
                    }
                });
            }),
        )
    }

    pub fn neg(&self) -> Tensor<F> {
        self.scale(-F::one())
    }

    /// Multiply every element by a graph-connected scalar tensor.
    pub fn scale_by(&self, s: &Tensor<F>) -> Result<Tensor<F>> {
        if s.len() != 1 {
            return Err(Error::Dimension(format!(
                "scale_by: scalar expected, got shape {:?}",
                s.shape()
            )));
        }
        let sv = s.item();
        let av = self.to_vec();
        let out: Vec<F> = av.iter().map(|&a| a * sv).collect();
        let (pa, ps) = (self.clone(), s.clone());
        Ok(Tensor::from_op(
            self.shape().to_vec(),
            out,
            vec![self.clone(), s.clone()],
            Box::new(move |g| {
                if pa.requires_grad() {
                    pa.grad_mut(|d| {
                        for (d, &u) in d.iter_mut().zip(g) {
                            *d += u * sv;
                        }
                    });
                }
                if ps.requires_grad() {
                    let mut acc = F::zero();
                    for i in 0..av.len() {
                        acc += g[i] * av[i];
                    }
                    ps.grad_mut(|d| d[0] += acc);
                }
            }),
        ))
    }

    /// Broadcast-add a length-n row vector over every row of an `[m, n]` matrix.
    pub fn add_row(&self, row: &Tensor<F>) -> Result<Tensor<F>> {
        let (m, n) = require_rank2(self, "add_row")?;
        if row.shape() != [n] {
            return Err(Error::Dimension(format!(
                "add_row: row shape {:?} does not match width {n}",
                row.shape()
            )));
        }
        let rv = row.to_vec();
        let mut out = self.to_vec();
        for i in 0..m {
            for j in 0..n {
                out[i * n + j] += rv[j];
            }
        }
        let (pa, pr) = (self.clone(), row.clone());
        Ok(Tensor::from_op(
            vec![m, n],
            out,
            vec![self.clone(), row.clone()],
            Box::new(move |g| {
                if pa.requires_grad() {
                    pa.grad_mut(|d| {
                        for (d, &u) in d.iter_mut().zip(g) {
                            *d += u;
                        }
                    });
                }
                if pr.requires_grad() {
                    pr.grad_mut(|d| {
                        for i in 0..m {
                            for j in 0..n {
                                d[j] += g[i * n + j];
                            }
                        }
                    });
                }
            }),
        ))
    }

    pub fn sum(&self) -> Tensor<F> {
        let total: F = self.values().iter().copied().sum();
        let pa = self.clone();
        Tensor::from_op(
            vec![1],
            vec![total],
            vec![self.clone()],
            Box::new(move |g| {
                pa.grad_mut(|d| {
                    for d in d.iter_mut() {
                        *d += g[0];
                    }
                });
            }),
        )
    }

    pub fn mean(&self) -> Tensor<F> {
        let inv = F::one() / F::from_usize(self.len());
        self.sum().scale(inv)
    }

    /// Column means of an `[m, n]` matrix, shape `[n]`.
    pub fn mean_rows(&self) -> Result<Tensor<F>> {
        let (m, n) = require_rank2(self, "mean_rows")?;
        let inv = F::one() / F::from_usize(m);
        let v = self.values();
        let mut out = vec![F::zero(); n];
        for i in 0..m {
            for j in 0..n {
                out[j] += v[i * n + j];
            }
        }
        for o in out.iter_mut() {
            *o *= inv;
        }
        drop(v);
        let pa = self.clone();
        Ok(Tensor::from_op(
            vec![n],
            out,
            vec![self.clone()],
            Box::new(move |g| {
                pa.grad_mut(|d| {
                    for i in 0..m {
                        for j in 0..n {
                            d[i * n + j] += g[j] * inv;
                        }
                    }
                });
            }),
        ))
    }

    /// Standard matrix product `[m, k] x [k, n] -> [m, n]`.
    pub fn matmul(&self, other: &Tensor<F>) -> Result<Tensor<F>> {
        let (m, ka) = require_rank2(self, "matmul")?;
        let (kb, n) = require_rank2(other, "matmul")?;
        if ka != kb {
            return Err(Error::Dimension(format!(
                "matmul: inner extents disagree, {:?} x {:?}",
                self.shape(),
                other.shape()
            )));
        }
        let k = ka;
        let av = self.to_vec();
        let bv = other.to_vec();
        let mut out = vec![F::zero(); m * n];
        for i in 0..m {
            for p in 0..k {
                let a = av[i * k + p];
                let brow = &bv[p * n..(p + 1) * n];
                let orow = &mut out[i * n..(i + 1) * n];
                for j in 0..n {
                    orow[j] += a * brow[j];
                }
            }
        }
        let (pa, pb) = (self.clone(), other.clone());
        Ok(Tensor::from_op(
            vec![m, n],
            out,
            vec![self.clone(), other.clone()],
            Box::new(move |g| {
                if pa.requires_grad() {
                    // dA = g . B^T
                    pa.grad_mut(|d| {
                        for i in 0..m {
                            let grow = &g[i * n..(i + 1) * n];
                            for p in 0..k {
                                let brow = &bv[p * n..(p + 1) * n];
                                let mut acc = F::zero();
                                for j in 0..n {
                                    acc += grow[j] * brow[j];
                                }
                                d[i * k + p] += acc;
                            }
                        }
                    });
                }
                if pb.requires_grad() {
                    // dB = A^T . g
                    pb.grad_mut(|d| {
                        for i in 0..m {
                            let grow = &g[i * n..(i + 1) * n];
                            for p in 0..k {
                                let a = av[i * k + p];
                                let drow = &mut d[p * n..(p + 1) * n];
                                for j in 0..n {
                                    drow[j] += a * grow[j];
                                }
                            }
                        }
                    });
                }
            }),
        ))
    }

    pub fn transpose(&self) -> Result<Tensor<F>> {
        let (m, n) = require_rank2(self, "transpose")?;
        let v = self.values();
        let mut out = vec![F::zero(); m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = v[i * n + j];
            }
        }
        drop(v);
        let pa = self.clone();
        Ok(Tensor::from_op(
            vec![n, m],
            out,
            vec![self.clone()],
            Box::new(move |g| {
                pa.grad_mut(|d| {
                    for i in 0..m {
                        for j in 0..n {
                            d[i * n + j] += g[j * m + i];
                        }
                    }
                });
            }),
        ))
    }

    /// Numerically stabilized softmax along `axis`.
    pub fn softmax(&self, axis: usize) -> Result<Tensor<F>> {
        let (n, stride, outer) = lane_geometry(self.shape(), axis)?;
        let v = self.to_vec();
        let mut out = vec![F::zero(); v.len()];
        for o in 0..outer {
            for i in 0..stride {
                let base = o * n * stride + i;
                let mut mx = F::neg_infinity();
                for kk in 0..n {
                    mx = mx.max(v[base + kk * stride]);
                }
                let mut z = F::zero();
                for kk in 0..n {
                    let e = (v[base + kk * stride] - mx).exp();
                    out[base + kk * stride] = e;
                    z += e;
                }
                let inv = F::one() / z;
                for kk in 0..n {
                    out[base + kk * stride] *= inv;
                }
            }
        }
        let yv = out.clone();
        let pa = self.clone();
        Ok(Tensor::from_op(
            self.shape().to_vec(),
            out,
            vec![self.clone()],
            Box::new(move |g| {
                pa.grad_mut(|d| {
                    for o in 0..outer {
                        for i in 0..stride {
                            let base = o * n * stride + i;
                            let mut dot = F::zero();
                            for kk in 0..n {
                                let idx = base + kk * stride;
                                dot += g[idx] * yv[idx];
                            }
                            for kk in 0..n {
                                let idx = base + kk * stride;
                                d[idx] += yv[idx] * (g[idx] - dot);
                            }
                        }
                    }
                });
            }),
        ))
    }

    /// Rows scaled to unit L2 norm along `axis`; an all-zero lane stays zero.
    pub fn l2_normalize(&self, axis: usize) -> Result<Tensor<F>> {
        let (n, stride, outer) = lane_geometry(self.shape(), axis)?;
        let v = self.to_vec();
        let mut out = vec![F::zero(); v.len()];
        let mut norms = vec![F::zero(); outer * stride];
        for o in 0..outer {
            for i in 0..stride {
                let base = o * n * stride + i;
                let mut sq = F::zero();
                for kk in 0..n {
                    let x = v[base + kk * stride];
                    sq += x * x;
                }
                let nrm = sq.sqrt();
                norms[o * stride + i] = nrm;
                if nrm > F::zero() {
                    let inv = F::one() / nrm;
                    for kk in 0..n {
                        out[base + kk * stride] = v[base + kk * stride] * inv;
                    }
                }
            }
        }
        let yv = out.clone();
        let pa = self.clone();
        Ok(Tensor::from_op(
            self.shape().to_vec(),
            out,
            vec![self.clone()],
            Box::new(move |g| {
                pa.grad_mut(|d| {
                    for o in 0..outer {
                        for i in 0..stride {
                            let nrm = norms[o * stride + i];
                            if nrm <= F::zero() {
                                continue;
                            }
                            let base = o * n * stride + i;
                            let inv = F::one() / nrm;
                            let mut dot = F::zero();
                            for kk in 0..n {
                                let idx = base + kk * stride;
                                dot += g[idx] * yv[idx];
                            }
                            for kk in 0..n {
                                let idx = base + kk * stride;
                                d[idx] += (g[idx] - yv[idx] * dot) * inv;
                            }
                        }
                    }
                });
            }),
        ))
    }

    /// Layer normalization over the last axis with affine gain and bias.
    /// Zero-variance rows are defined through the epsilon term.
    pub fn layernorm(&self, gain: &Tensor<F>, bias: &Tensor<F>) -> Result<Tensor<F>> {
        let shape = self.shape().to_vec();
        let n = *shape.last().ok_or_else(|| {
            Error::Dimension("layernorm: rank-0 tensor".to_string())
        })?;
        if gain.shape() != [n] || bias.shape() != [n] {
            return Err(Error::Dimension(format!(
                "layernorm: gain {:?} / bias {:?} do not match width {n}",
                gain.shape(),
                bias.shape()
            )));
        }
        let eps = F::from_f64(crate::diff::LAYERNORM_EPS);
        let rows = self.len() / n;
        let v = self.to_vec();
        let gv = gain.to_vec();
        let bv = bias.to_vec();
        let inv_n = F::one() / F::from_usize(n);
        let mut out = vec![F::zero(); v.len()];
        let mut xhat = vec![F::zero(); v.len()];
        let mut inv_std = vec![F::zero(); rows];
        for r in 0..rows {
            let row = &v[r * n..(r + 1) * n];
            let mut mu = F::zero();
            for &x in row {
                mu += x;
            }
            mu *= inv_n;
            let mut var = F::zero();
            for &x in row {
                let dxm = x - mu;
                var += dxm * dxm;
            }
            var *= inv_n;
            let istd = F::one() / (var + eps).sqrt();
            inv_std[r] = istd;
            for j in 0..n {
                let xh = (row[j] - mu) * istd;
                xhat[r * n + j] = xh;
                out[r * n + j] = gv[j] * xh + bv[j];
            }
        }
        let (pa, pg, pb) = (self.clone(), gain.clone(), bias.clone());
        Ok(Tensor::from_op(
            shape,
            out,
            vec![self.clone(), gain.clone(), bias.clone()],
            Box::new(move |g| {
                if pg.requires_grad() {
                    pg.grad_mut(|d| {
                        for r in 0..rows {
                            for j in 0..n {
                                d[j] += g[r * n + j] * xhat[r * n + j];
                            }
                        }
                    });
                }
                if pb.requires_grad() {
                    pb.grad_mut(|d| {
                        for r in 0..rows {
                            for j in 0..n {
                                d[j] += g[r * n + j];
                            }
                        }
                    });
                }
                if pa.requires_grad() {
                    pa.grad_mut(|d| {
                        for r in 0..rows {
                            let mut mean_dxh = F::zero();
                            let mut mean_dxh_xh = F::zero();
                            for j in 0..n {
                                let dxh = g[r * n + j] * gv[j];
                                mean_dxh += dxh;
                                mean_dxh_xh += dxh * xhat[r * n + j];
                            }
                            mean_dxh *= inv_n;
                            mean_dxh_xh *= inv_n;
                            for j in 0..n {
                                let dxh = g[r * n + j] * gv[j];
                                d[r * n + j] += inv_std[r]
                                    * (dxh - mean_dxh - xhat[r * n + j] * mean_dxh_xh);
                            }
                        }
                    });
                }
            }),
        ))
    }

    /// Gaussian error linear unit, tanh approximation.
    pub fn gelu(&self) -> Tensor<F> {
        let c = F::from_f64(0.797_884_560_802_865_4); // sqrt(2/pi)
        let a = F::from_f64(0.044_715);
        let half = F::from_f64(0.5);
        let three = F::from_f64(3.0);
        let v = self.to_vec();
        let out: Vec<F> = v
            .iter()
            .map(|&x| {
                let u = c * (x + a * x * x * x);
                half * x * (F::one() + u.tanh())
            })
            .collect();
        let pa = self.clone();
        Tensor::from_op(
            self.shape().to_vec(),
            out,
            vec![self.clone()],
            Box::new(move |g| {
                pa.grad_mut(|d| {
                    for i in 0..v.len() {
                        let x = v[i];
                        let u = c * (x + a * x * x * x);
                        let t = u.tanh();
                        let sech2 = F::one() - t * t;
                        let du = c * (F::one() + three * a * x * x);
                        let dy = half * (F::one() + t) + half * x * sech2 * du;
                        d[i] += g[i] * dy;
                    }
                });
            }),
        )
    }

    /// Rows `[start, end)` of a matrix.
    pub fn slice_rows(&self, start: usize, end: usize) -> Result<Tensor<F>> {
        let (m, n) = require_rank2(self, "slice_rows")?;
        if start >= end || end > m {
            return Err(Error::Index(format!(
                "slice_rows: [{start}, {end}) out of {m} rows"
            )));
        }
        let out = self.values()[start * n..end * n].to_vec();
        let pa = self.clone();
        Ok(Tensor::from_op(
            vec![end - start, n],
            out,
            vec![self.clone()],
            Box::new(move |g| {
                pa.grad_mut(|d| {
                    for (d, &u) in d[start * n..end * n].iter_mut().zip(g) {
                        *d += u;
                    }
                });
            }),
        ))
    }

    /// Columns `[start, end)` of a matrix.
    pub fn slice_cols(&self, start: usize, end: usize) -> Result<Tensor<F>> {
        let (m, n) = require_rank2(self, "slice_cols")?;
        if start >= end || end > n {
            return Err(Error::Index(format!(
                "slice_cols: [{start}, {end}) out of {n} columns"
            )));
        }
        let w = end - start;
        let v = self.values();
        let mut out = vec![F::zero(); m * w];
        for i in 0..m {
            out[i * w..(i + 1) * w].copy_from_slice(&v[i * n + start..i * n + end]);
        }
        drop(v);
        let pa = self.clone();
        Ok(Tensor::from_op(
            vec![m, w],
            out,
            vec![self.clone()],
            Box::new(move |g| {
                pa.grad_mut(|d| {
                    for i in 0..m {
                        for j in 0..w {
                            d[i * n + start + j] += g[i * w + j];
                        }
                    }
                });
            }),
        ))
    }

    /// Extract one element as a scalar tensor.
    pub fn pick(&self, index: usize) -> Result<Tensor<F>> {
        if index >= self.len() {
            return Err(Error::Index(format!(
                "pick: {index} out of {} elements",
                self.len()
            )));
        }
        let val = self.values()[index];
        let pa = self.clone();
        Ok(Tensor::from_op(
            vec![1],
            vec![val],
            vec![self.clone()],
            Box::new(move |g| {
                pa.grad_mut(|d| d[index] += g[0]);
            }),
        ))
    }
}

/// Stack matrices with equal widths along the row axis.
pub fn concat_rows<F: Real>(parts: &[Tensor<F>]) -> Result<Tensor<F>> {
    if parts.is_empty() {
        return Err(Error::Argument("concat_rows: empty input".to_string()));
    }
    let (_, n) = require_rank2(&parts[0], "concat_rows")?;
    let mut rows = 0usize;
    let mut out = Vec::new();
    let mut row_counts = Vec::with_capacity(parts.len());
    for p in parts {
        let (m, pn) = require_rank2(p, "concat_rows")?;
        if pn != n {
            return Err(Error::Dimension(format!(
                "concat_rows: widths {n} and {pn} differ"
            )));
        }
        rows += m;
        row_counts.push(m);
        out.extend_from_slice(&p.values());
    }
    let owned: Vec<Tensor<F>> = parts.to_vec();
    let parents = owned.clone();
    Ok(Tensor::from_op(
        vec![rows, n],
        out,
        parents,
        Box::new(move |g| {
            let mut off = 0usize;
            for (p, &m) in owned.iter().zip(&row_counts) {
                if p.requires_grad() {
                    p.grad_mut(|d| {
                        for (d, &u) in d.iter_mut().zip(&g[off..off + m * n]) {
                            *d += u;
                        }
                    });
                }
                off += m * n;
            }
        }),
    ))
}

/// Stack matrices with equal heights along the column axis.
pub fn concat_cols<F: Real>(parts: &[Tensor<F>]) -> Result<Tensor<F>> {
    if parts.is_empty() {
        return Err(Error::Argument("concat_cols: empty input".to_string()));
    }
    let (m, _) = require_rank2(&parts[0], "concat_cols")?;
    let mut widths = Vec::with_capacity(parts.len());
    let mut total_w = 0usize;
    for p in parts {
        let (pm, w) = require_rank2(p, "concat_cols")?;
        if pm != m {
            return Err(Error::Dimension(format!(
                "concat_cols: heights {m} and {pm} differ"
            )));
        }
        widths.push(w);
        total_w += w;
    }
    let mut out = vec![F::zero(); m * total_w];
    let mut off = 0usize;
    for (p, &w) in parts.iter().zip(&widths) {
        let v = p.values();
        for i in 0..m {
            out[i * total_w + off..i * total_w + off + w].copy_from_slice(&v[i * w..(i + 1) * w]);
        }
        off += w;
    }
    let owned: Vec<Tensor<F>> = parts.to_vec();
    let parents = owned.clone();
    Ok(Tensor::from_op(
        vec![m, total_w],
        out,
        parents,
        Box::new(move |g| {
            let mut off = 0usize;
            for (p, &w) in owned.iter().zip(&widths) {
                if p.requires_grad() {
                    p.grad_mut(|d| {
                        for i in 0..m {
                            for j in 0..w {
                                d[i * w + j] += g[i * total_w + off + j];
                            }
                        }
                    });
                }
                off += w;
            }
        }),
    ))
}

/// Gather rows of an embedding table; gradient scatters back into the table.
pub fn embedding_lookup<F: Real>(table: &Tensor<F>, indices: &[usize]) -> Result<Tensor<F>> {
    let (vocab, d) = require_rank2(table, "embedding_lookup")?;
    if indices.is_empty() {
        return Err(Error::Argument("embedding_lookup: empty index list".to_string()));
    }
    for &ix in indices {
        if ix >= vocab {
            return Err(Error::Index(format!(
                "embedding_lookup: id {ix} outside table of {vocab} rows"
            )));
        }
    }
    let v = table.values();
    let mut out = vec![F::zero(); indices.len() * d];
    for (i, &ix) in indices.iter().enumerate() {
        out[i * d..(i + 1) * d].copy_from_slice(&v[ix * d..(ix + 1) * d]);
    }
    drop(v);
    let pt = table.clone();
    let idx: Vec<usize> = indices.to_vec();
    Ok(Tensor::from_op(
        vec![indices.len(), d],
        out,
        vec![table.clone()],
        Box::new(move |g| {
            pt.grad_mut(|dst| {
                for (i, &ix) in idx.iter().enumerate() {
                    for j in 0..d {
                        dst[ix * d + j] += g[i * d + j];
                    }
                }
            });
        }),
    ))
}

/// `-sum_i log softmax(row_i)[i]` for a square score matrix. This is the
/// fused core of the contrastive objective; softmax is recomputed internally
/// with max-subtraction so saturated scores stay finite.
pub fn neg_log_softmax_diag<F: Real>(scores: &Tensor<F>) -> Result<Tensor<F>> {
    let (m, n) = require_rank2(scores, "neg_log_softmax_diag")?;
    if m != n {
        return Err(Error::Dimension(format!(
            "neg_log_softmax_diag: square matrix expected, got {:?}",
            scores.shape()
        )));
    }
    let v = scores.to_vec();
    let mut probs = vec![F::zero(); m * n];
    let mut loss = F::zero();
    for i in 0..m {
        let row = &v[i * n..(i + 1) * n];
        let mut mx = F::neg_infinity();
        for &x in row {
            mx = mx.max(x);
        }
        let mut z = F::zero();
        for (j, &x) in row.iter().enumerate() {
            let e = (x - mx).exp();
            probs[i * n + j] = e;
            z += e;
        }
        let inv = F::one() / z;
        for j in 0..n {
            probs[i * n + j] *= inv;
        }
        // log softmax at the diagonal, computed from the shifted row
        loss -= (row[i] - mx) - z.ln();
    }
    let pa = scores.clone();
    Ok(Tensor::from_op(
        vec![1],
        vec![loss],
        vec![scores.clone()],
        Box::new(move |g| {
            pa.grad_mut(|d| {
                for i in 0..m {
                    for j in 0..n {
                        let delta = if i == j { F::one() } else { F::zero() };
                        d[i * n + j] += g[0] * (probs[i * n + j] - delta);
                    }
                }
            });
        }),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t64(shape: Vec<usize>, v: Vec<f64>) -> Tensor<f64> {
        Tensor::from_vec(shape, v).unwrap()
    }

    #[test]
    fn matmul_identity() {
        let i2 = t64(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]);
        let p = i2.matmul(&i2).unwrap();
        assert_eq!(p.to_vec(), vec![1.0, 0.0, 0.0, 1.0]);
    }

    #[test]
    fn matmul_hand_case() {
        let a = t64(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]);
        let b = t64(vec![2, 1], vec![0.0, 1.0]);
        let p = a.matmul(&b).unwrap();
        assert_eq!(p.shape(), &[2, 1]);
        assert_eq!(p.to_vec(), vec![2.0, 4.0]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let a = t64(vec![2, 3], vec![0.0; 6]);
        let b = t64(vec![2, 2], vec![0.0; 4]);
        let err = a.matmul(&b).unwrap_err().to_string();
        assert!(err.contains("[2, 3]") && err.contains("[2, 2]"), "{err}");
    }

    #[test]
    fn matmul_matches_triple_loop_oracle() {
        // independent brute-force oracle
        let mut rng = 1234u64;
        let mut next = || {
            rng = rng.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            ((rng >> 33) as f64 / (1u64 << 31) as f64) - 1.0
        };
        let (m, k, n) = (5, 7, 3);
        let av: Vec<f64> = (0..m * k).map(|_| next()).collect();
        let bv: Vec<f64> = (0..k * n).map(|_| next()).collect();
        let mut want = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                let mut acc = 0.0;
                for p in 0..k {
                    acc += av[i * k + p] * bv[p * n + j];
                }
                want[i * n + j] = acc;
            }
        }
        let got = t64(vec![m, k], av).matmul(&t64(vec![k, n], bv)).unwrap();
        for (g, w) in got.to_vec().iter().zip(&want) {
            assert!((g - w).abs() < 1e-12);
        }
    }

    #[test]
    fn softmax_symmetry_and_stability() {
        let s = t64(vec![2], vec![0.0, 0.0]).softmax(0).unwrap();
        assert_eq!(s.to_vec(), vec![0.5, 0.5]);

        let big = t64(vec![2], vec![1000.0, 0.0]).softmax(0).unwrap();
        let v = big.to_vec();
        assert!(v.iter().all(|x| x.is_finite()));
        assert!((v[0] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn softmax_matches_exp_sum_oracle() {
        let x = vec![0.3, -1.2, 2.5, 0.0, -0.7, 1.1];
        let s = t64(vec![6], x.clone()).softmax(0).unwrap();
        let z: f64 = x.iter().map(|v| v.exp()).sum();
        for (got, xi) in s.to_vec().iter().zip(&x) {
            assert!((got - xi.exp() / z).abs() < 1e-12);
        }
    }

    #[test]
    fn l2_normalize_hand_case_and_zero_row() {
        let y = t64(vec![2], vec![3.0, 4.0]).l2_normalize(0).unwrap();
        for (got, want) in y.to_vec().iter().zip([0.6, 0.8]) {
            assert!((got - want).abs() < 1e-15);
        }

        let z = t64(vec![1, 3], vec![0.0, 0.0, 0.0]).l2_normalize(1).unwrap();
        assert_eq!(z.to_vec(), vec![0.0, 0.0, 0.0]);
    }

    #[test]
    fn layernorm_constant_row_is_zero() {
        let x = t64(vec![1, 4], vec![5.0; 4]);
        let gain = t64(vec![4], vec![1.0; 4]);
        let bias = t64(vec![4], vec![0.0; 4]);
        let y = x.layernorm(&gain, &bias).unwrap();
        for v in y.to_vec() {
            assert!(v.abs() < 1e-9);
        }
    }

    #[test]
    fn embedding_rejects_out_of_range() {
        let table = t64(vec![3, 2], vec![0.0; 6]);
        assert!(matches!(
            embedding_lookup(&table, &[0, 3]),
            Err(Error::Index(_))
        ));
    }

    #[test]
    fn backward_through_add_mul() {
        let a = Tensor::parameter(vec![2], vec![2.0f64, 3.0]).unwrap();
        let b = Tensor::parameter(vec![2], vec![4.0f64, 5.0]).unwrap();
        let y = a.mul(&b).unwrap().sum();
        y.backward().unwrap();
        assert_eq!(a.grad().unwrap(), vec![4.0, 5.0]);
        assert_eq!(b.grad().unwrap(), vec![2.0, 3.0]);
    }

    #[test]
    fn concat_and_slice_roundtrip_gradients() {
        let a = Tensor::parameter(vec![1, 2], vec![1.0f64, 2.0]).unwrap();
        let b = Tensor::parameter(vec![1, 2], vec![3.0f64, 4.0]).unwrap();
        let cat = concat_rows(&[a.clone(), b.clone()]).unwrap();
        let top = cat.slice_rows(0, 1).unwrap();
        top.sum().backward().unwrap();
        assert_eq!(a.grad().unwrap(), vec![1.0, 1.0]);
        assert!(b.grad().is_none() || b.grad().unwrap() == vec![0.0, 0.0]);
    }
}
