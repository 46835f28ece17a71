//! Differentiable tensor primitives.
//!
//! Each op computes its forward value eagerly and registers one VJP closure
//! per input. Closures capture cheap `Rc` clones of whatever forward values
//! the backward pass needs.

use std::rc::Rc;

use super::{record, Tensor, Vjp};
use crate::error::{Error, Result};

const GELU_SCALE: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_CUBIC: f64 = 0.044_715;

/// Rows/columns view of a shape: the last axis is the row content, all
/// leading axes are flattened into rows.
fn rows_cols(shape: &[usize]) -> (usize, usize) {
    let cols = *shape.last().expect("tensor shapes are nonempty");
    let rows: usize = shape.iter().product::<usize>() / cols;
    (rows, cols)
}

fn require_2d(t: &Tensor, op: &'static str) -> Result<(usize, usize)> {
    if t.shape.len() != 2 {
        return Err(Error::InvalidShape {
            op,
            shape: t.shape.clone(),
            reason: "expected a 2-D tensor".into(),
        });
    }
    Ok((t.shape[0], t.shape[1]))
}

/// c[m,n] = a[m,k] * b[k,n]
fn mm(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let crow = &mut c[i * n..(i + 1) * n];
        for (p, &av) in arow.iter().enumerate() {
            let brow = &b[p * n..(p + 1) * n];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    }
    c
}

/// c[m,k] = a[m,n] * b[k,n]^T (rows of `a` dotted with rows of `b`)
fn mm_nt(a: &[f64], b: &[f64], m: usize, n: usize, k: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * k];
    for i in 0..m {
        let arow = &a[i * n..(i + 1) * n];
        for j in 0..k {
            let brow = &b[j * n..(j + 1) * n];
            let mut dot = 0.0;
            for (av, bv) in arow.iter().zip(brow) {
                dot += av * bv;
            }
            c[i * k + j] = dot;
        }
    }
    c
}

/// c[k,n] = a[m,k]^T * g[m,n]
fn mm_tn(a: &[f64], g: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; k * n];
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let grow = &g[i * n..(i + 1) * n];
        for (p, &av) in arow.iter().enumerate() {
            let crow = &mut c[p * n..(p + 1) * n];
            for (cv, &gv) in crow.iter_mut().zip(grow) {
                *cv += av * gv;
            }
        }
    }
    c
}

fn transpose_raw(x: &[f64], r: usize, c: usize) -> Vec<f64> {
    let mut out = vec![0.0; r * c];
    for i in 0..r {
        for j in 0..c {
            out[j * r + i] = x[i * c + j];
        }
    }
    out
}

/// Single-input recording cannot fail (no tape mismatch is possible).
fn record1(shape: Vec<usize>, data: Vec<f64>, input: &Tensor, vjp: Vjp) -> Tensor {
    record(shape, data, &[input], vec![vjp]).expect("single-input record is infallible")
}

impl Tensor {
    /// Matrix product of two 2-D tensors.
    pub fn matmul(&self, rhs: &Tensor) -> Result<Tensor> {
        let (m, k) = require_2d(self, "matmul")?;
        let (k2, n) = require_2d(rhs, "matmul")?;
        if k != k2 {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                left: self.shape.clone(),
                right: rhs.shape.clone(),
            });
        }
        let out = mm(&self.data, &rhs.data, m, k, n);
        let a = Rc::clone(&self.data);
        let b = Rc::clone(&rhs.data);
        record(
            vec![m, n],
            out,
            &[self, rhs],
            vec![
                Box::new(move |g| mm_nt(g, &b, m, n, k)),
                Box::new(move |g| mm_tn(&a, g, m, k, n)),
            ],
        )
    }

    /// Transpose of a 2-D tensor.
    pub fn transpose(&self) -> Result<Tensor> {
        let (r, c) = require_2d(self, "transpose")?;
        let out = transpose_raw(&self.data, r, c);
        Ok(record1(
            vec![c, r],
            out,
            self,
            Box::new(move |g| transpose_raw(g, c, r)),
        ))
    }

    /// View the same data under a new shape with equal element count.
    pub fn reshape(&self, new_shape: &[usize]) -> Result<Tensor> {
        if new_shape.is_empty() || new_shape.iter().any(|&d| d == 0) {
            return Err(Error::InvalidShape {
                op: "reshape",
                shape: new_shape.to_vec(),
                reason: "dimensions must be nonzero".into(),
            });
        }
        let numel: usize = new_shape.iter().product();
        if numel != self.numel() {
            return Err(Error::InvalidShape {
                op: "reshape",
                shape: new_shape.to_vec(),
                reason: format!("element count {} != {}", numel, self.numel()),
            });
        }
        Ok(record1(
            new_shape.to_vec(),
            self.data.to_vec(),
            self,
            Box::new(|g| g.to_vec()),
        ))
    }

    /// Elementwise sum. When `rhs` is 1-D with length equal to the column
    /// count of `self`, it is broadcast across rows (the bias case).
    pub fn add(&self, rhs: &Tensor) -> Result<Tensor> {
        if self.shape == rhs.shape {
            let out = self
                .data
                .iter()
                .zip(rhs.data.iter())
                .map(|(a, b)| a + b)
                .collect();
            return record(
                self.shape.clone(),
                out,
                &[self, rhs],
                vec![Box::new(|g| g.to_vec()), Box::new(|g| g.to_vec())],
            );
        }
        let (rows, cols) = rows_cols(&self.shape);
        if rhs.shape.len() == 1 && rhs.shape[0] == cols {
            let mut out = self.data.to_vec();
            for r in 0..rows {
                for (o, b) in out[r * cols..(r + 1) * cols].iter_mut().zip(rhs.data.iter()) {
                    *o += b;
                }
            }
            return record(
                self.shape.clone(),
                out,
                &[self, rhs],
                vec![
                    Box::new(|g| g.to_vec()),
                    Box::new(move |g| {
                        let mut acc = vec![0.0; cols];
                        for r in 0..rows {
                            for (a, gv) in acc.iter_mut().zip(&g[r * cols..(r + 1) * cols]) {
                                *a += gv;
                            }
                        }
                        acc
                    }),
                ],
            );
        }
        Err(Error::ShapeMismatch {
            op: "add",
            left: self.shape.clone(),
            right: rhs.shape.clone(),
        })
    }

    /// Elementwise difference of same-shape tensors.
    pub fn sub(&self, rhs: &Tensor) -> Result<Tensor> {
        if self.shape != rhs.shape {
            return Err(Error::ShapeMismatch {
                op: "sub",
                left: self.shape.clone(),
                right: rhs.shape.clone(),
            });
        }
        let out = self
            .data
            .iter()
            .zip(rhs.data.iter())
            .map(|(a, b)| a - b)
            .collect();
        record(
            self.shape.clone(),
            out,
            &[self, rhs],
            vec![
                Box::new(|g| g.to_vec()),
                Box::new(|g| g.iter().map(|v| -v).collect()),
            ],
        )
    }

    /// Elementwise product of same-shape tensors.
    pub fn mul(&self, rhs: &Tensor) -> Result<Tensor> {
        if self.shape != rhs.shape {
            return Err(Error::ShapeMismatch {
                op: "mul",
                left: self.shape.clone(),
                right: rhs.shape.clone(),
            });
        }
        let out = self
            .data
            .iter()
            .zip(rhs.data.iter())
            .map(|(a, b)| a * b)
            .collect();
        let a = Rc::clone(&self.data);
        let b = Rc::clone(&rhs.data);
        record(
            self.shape.clone(),
            out,
            &[self, rhs],
            vec![
                Box::new(move |g| g.iter().zip(b.iter()).map(|(gv, bv)| gv * bv).collect()),
                Box::new(move |g| g.iter().zip(a.iter()).map(|(gv, av)| gv * av).collect()),
            ],
        )
    }

    /// Multiply every element by a constant.
    pub fn scale(&self, c: f64) -> Tensor {
        let out = self.data.iter().map(|v| v * c).collect();
        record1(
            self.shape.clone(),
            out,
            self,
            Box::new(move |g| g.iter().map(|v| v * c).collect()),
        )
    }

    /// Add a constant to every element.
    pub fn add_scalar(&self, c: f64) -> Tensor {
        let out = self.data.iter().map(|v| v + c).collect();
        record1(self.shape.clone(), out, self, Box::new(|g| g.to_vec()))
    }

    pub fn neg(&self) -> Tensor {
        self.scale(-1.0)
    }

    /// Row lookup: `self` is a 2-D table, the output stacks `indices.len()`
    /// of its rows. Backward scatter-adds into the table, so repeated indices
    /// accumulate.
    pub fn gather(&self, indices: &[usize]) -> Result<Tensor> {
        let (v, h) = require_2d(self, "gather")?;
        if indices.is_empty() {
            return Err(Error::InvalidShape {
                op: "gather",
                shape: self.shape.clone(),
                reason: "empty index list".into(),
            });
        }
        for &ix in indices {
            if ix >= v {
                return Err(Error::IndexOutOfBounds {
                    op: "gather",
                    index: ix,
                    len: v,
                });
            }
        }
        let mut out = Vec::with_capacity(indices.len() * h);
        for &ix in indices {
            out.extend_from_slice(&self.data[ix * h..(ix + 1) * h]);
        }
        let idx: Vec<usize> = indices.to_vec();
        Ok(record1(
            vec![indices.len(), h],
            out,
            self,
            Box::new(move |g| {
                let mut acc = vec![0.0; v * h];
                for (r, &ix) in idx.iter().enumerate() {
                    for (a, gv) in acc[ix * h..(ix + 1) * h].iter_mut().zip(&g[r * h..(r + 1) * h])
                    {
                        *a += gv;
                    }
                }
                acc
            }),
        ))
    }

    /// Numerically stable softmax over the last axis.
    pub fn softmax(&self) -> Tensor {
        let (rows, cols) = rows_cols(&self.shape);
        let mut out = vec![0.0; self.numel()];
        for r in 0..rows {
            let x = &self.data[r * cols..(r + 1) * cols];
            let y = &mut out[r * cols..(r + 1) * cols];
            let max = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for (yi, xi) in y.iter_mut().zip(x) {
                *yi = (xi - max).exp();
                z += *yi;
            }
            for yi in y.iter_mut() {
                *yi /= z;
            }
        }
        let y_saved = out.clone();
        record1(
            self.shape.clone(),
            out,
            self,
            Box::new(move |g| {
                let mut dx = vec![0.0; g.len()];
                for r in 0..rows {
                    let y = &y_saved[r * cols..(r + 1) * cols];
                    let gr = &g[r * cols..(r + 1) * cols];
                    let dot: f64 = y.iter().zip(gr).map(|(yv, gv)| yv * gv).sum();
                    for ((d, yv), gv) in dx[r * cols..(r + 1) * cols].iter_mut().zip(y).zip(gr) {
                        *d = yv * (gv - dot);
                    }
                }
                dx
            }),
        )
    }

    /// Numerically stable log-softmax over the last axis.
    pub fn log_softmax(&self) -> Tensor {
        let (rows, cols) = rows_cols(&self.shape);
        let mut out = vec![0.0; self.numel()];
        for r in 0..rows {
            let x = &self.data[r * cols..(r + 1) * cols];
            let y = &mut out[r * cols..(r + 1) * cols];
            let max = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = x.iter().map(|xi| (xi - max).exp()).sum::<f64>().ln() + max;
            for (yi, xi) in y.iter_mut().zip(x) {
                *yi = xi - lse;
            }
        }
        let y_saved = out.clone();
        record1(
            self.shape.clone(),
            out,
            self,
            Box::new(move |g| {
                let mut dx = vec![0.0; g.len()];
                for r in 0..rows {
                    let y = &y_saved[r * cols..(r + 1) * cols];
                    let gr = &g[r * cols..(r + 1) * cols];
                    let gsum: f64 = gr.iter().sum();
                    for ((d, yv), gv) in dx[r * cols..(r + 1) * cols].iter_mut().zip(y).zip(gr) {
                        *d = gv - yv.exp() * gsum;
                    }
                }
                dx
            }),
        )
    }

    /// GELU with the tanh approximation:
    /// `0.5 * x * (1 + tanh(sqrt(2/pi) * (x + 0.044715 * x^3)))`.
    pub fn gelu(&self) -> Tensor {
        let out = self
            .data
            .iter()
            .map(|&x| {
                let u = GELU_SCALE * (x + GELU_CUBIC * x * x * x);
                0.5 * x * (1.0 + u.tanh())
            })
            .collect();
        let x_saved = Rc::clone(&self.data);
        record1(
            self.shape.clone(),
            out,
            self,
            Box::new(move |g| {
                g.iter()
                    .zip(x_saved.iter())
                    .map(|(&gv, &x)| {
                        let u = GELU_SCALE * (x + GELU_CUBIC * x * x * x);
                        let t = u.tanh();
                        let du = GELU_SCALE * (1.0 + 3.0 * GELU_CUBIC * x * x);
                        gv * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du)
                    })
                    .collect()
            }),
        )
    }

    /// Elementwise tanh.
    pub fn tanh(&self) -> Tensor {
        let out: Vec<f64> = self.data.iter().map(|v| v.tanh()).collect();
        let y_saved = out.clone();
        record1(
            self.shape.clone(),
            out,
            self,
            Box::new(move |g| {
                g.iter()
                    .zip(&y_saved)
                    .map(|(gv, yv)| gv * (1.0 - yv * yv))
                    .collect()
            }),
        )
    }

    /// Elementwise max(0, x). The subgradient at exactly 0 is taken as 0.
    pub fn relu(&self) -> Tensor {
        let out = self.data.iter().map(|&v| v.max(0.0)).collect();
        let x_saved = Rc::clone(&self.data);
        record1(
            self.shape.clone(),
            out,
            self,
            Box::new(move |g| {
                g.iter()
                    .zip(x_saved.iter())
                    .map(|(gv, &x)| if x > 0.0 { *gv } else { 0.0 })
                    .collect()
            }),
        )
    }

    /// Layer normalization over the last axis with learned gain and bias
    /// (both 1-D of the column count). Uses the population variance.
    pub fn layer_norm(&self, gain: &Tensor, bias: &Tensor, eps: f64) -> Result<Tensor> {
        let (rows, cols) = rows_cols(&self.shape);
        if gain.shape != [cols] || bias.shape != [cols] {
            return Err(Error::ShapeMismatch {
                op: "layer_norm",
                left: self.shape.clone(),
                right: if gain.shape != [cols] {
                    gain.shape.clone()
                } else {
                    bias.shape.clone()
                },
            });
        }
        let mut out = vec![0.0; self.numel()];
        let mut xhat = vec![0.0; self.numel()];
        let mut inv_std = vec![0.0; rows];
        for r in 0..rows {
            let x = &self.data[r * cols..(r + 1) * cols];
            let mean = x.iter().sum::<f64>() / cols as f64;
            let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
            let inv = 1.0 / (var + eps).sqrt();
            inv_std[r] = inv;
            for j in 0..cols {
                let xh = (x[j] - mean) * inv;
                xhat[r * cols + j] = xh;
                out[r * cols + j] = gain.data[j] * xh + bias.data[j];
            }
        }
        let xhat = Rc::new(xhat);
        let inv_std = Rc::new(inv_std);
        let gain_data = Rc::clone(&gain.data);
        let xhat_x = Rc::clone(&xhat);
        let xhat_g = Rc::clone(&xhat);
        let inv_x = Rc::clone(&inv_std);
        record(
            self.shape.clone(),
            out,
            &[self, gain, bias],
            vec![
                Box::new(move |g| {
                    let mut dx = vec![0.0; g.len()];
                    for r in 0..rows {
                        let gr = &g[r * cols..(r + 1) * cols];
                        let xh = &xhat_x[r * cols..(r + 1) * cols];
                        let mut m1 = 0.0;
                        let mut m2 = 0.0;
                        for j in 0..cols {
                            let dxh = gr[j] * gain_data[j];
                            m1 += dxh;
                            m2 += dxh * xh[j];
                        }
                        m1 /= cols as f64;
                        m2 /= cols as f64;
                        let inv = inv_x[r];
                        for j in 0..cols {
                            let dxh = gr[j] * gain_data[j];
                            dx[r * cols + j] = inv * (dxh - m1 - xh[j] * m2);
                        }
                    }
                    dx
                }),
                Box::new(move |g| {
                    let mut dg = vec![0.0; cols];
                    for r in 0..rows {
                        for j in 0..cols {
                            dg[j] += g[r * cols + j] * xhat_g[r * cols + j];
                        }
                    }
                    dg
                }),
                Box::new(move |g| {
                    let mut db = vec![0.0; cols];
                    for r in 0..rows {
                        for (b, gv) in db.iter_mut().zip(&g[r * cols..(r + 1) * cols]) {
                            *b += gv;
                        }
                    }
                    db
                }),
            ],
        )
    }

    /// Sum of all elements, as a scalar.
    pub fn sum_all(&self) -> Tensor {
        let s = self.data.iter().sum();
        let n = self.numel();
        record1(
            vec![1],
            vec![s],
            self,
            Box::new(move |g| vec![g[0]; n]),
        )
    }

    /// Mean of all elements, as a scalar.
    pub fn mean_all(&self) -> Tensor {
        let n = self.numel();
        let s: f64 = self.data.iter().sum();
        record1(
            vec![1],
            vec![s / n as f64],
            self,
            Box::new(move |g| vec![g[0] / n as f64; n]),
        )
    }

    /// Mean squared error against a same-shape tensor, as a scalar.
    pub fn mse(&self, target: &Tensor) -> Result<Tensor> {
        if self.shape != target.shape {
            return Err(Error::ShapeMismatch {
                op: "mse",
                left: self.shape.clone(),
                right: target.shape.clone(),
            });
        }
        let n = self.numel() as f64;
        let s: f64 = self
            .data
            .iter()
            .zip(target.data.iter())
            .map(|(a, b)| (a - b) * (a - b))
            .sum();
        let a = Rc::clone(&self.data);
        let b = Rc::clone(&target.data);
        let a2 = Rc::clone(&self.data);
        let b2 = Rc::clone(&target.data);
        record(
            vec![1],
            vec![s / n],
            &[self, target],
            vec![
                Box::new(move |g| {
                    a.iter()
                        .zip(b.iter())
                        .map(|(av, bv)| 2.0 * (av - bv) / n * g[0])
                        .collect()
                }),
                Box::new(move |g| {
                    a2.iter()
                        .zip(b2.iter())
                        .map(|(av, bv)| -2.0 * (av - bv) / n * g[0])
                        .collect()
                }),
            ],
        )
    }

    /// Rows `start..end` of a 2-D tensor.
    pub fn slice_rows(&self, start: usize, end: usize) -> Result<Tensor> {
        let (r, c) = require_2d(self, "slice_rows")?;
        if start >= end || end > r {
            return Err(Error::IndexOutOfBounds {
                op: "slice_rows",
                index: if start >= end { start } else { end },
                len: r,
            });
        }
        let out = self.data[start * c..end * c].to_vec();
        Ok(record1(
            vec![end - start, c],
            out,
            self,
            Box::new(move |g| {
                let mut dx = vec![0.0; r * c];
                dx[start * c..end * c].copy_from_slice(g);
                dx
            }),
        ))
    }

    /// Columns `start..end` of a 2-D tensor.
    pub fn slice_cols(&self, start: usize, end: usize) -> Result<Tensor> {
        let (r, c) = require_2d(self, "slice_cols")?;
        if start >= end || end > c {
            return Err(Error::IndexOutOfBounds {
                op: "slice_cols",
                index: if start >= end { start } else { end },
                len: c,
            });
        }
        let w = end - start;
        let mut out = Vec::with_capacity(r * w);
        for i in 0..r {
            out.extend_from_slice(&self.data[i * c + start..i * c + end]);
        }
        Ok(record1(
            vec![r, w],
            out,
            self,
            Box::new(move |g| {
                let mut dx = vec![0.0; r * c];
                for i in 0..r {
                    dx[i * c + start..i * c + end].copy_from_slice(&g[i * w..(i + 1) * w]);
                }
                dx
            }),
        ))
    }

    /// Element at a flat index, as a scalar.
    pub fn pick(&self, index: usize) -> Result<Tensor> {
        if index >= self.numel() {
            return Err(Error::IndexOutOfBounds {
                op: "pick",
                index,
                len: self.numel(),
            });
        }
        let n = self.numel();
        Ok(record1(
            vec![1],
            vec![self.data[index]],
            self,
            Box::new(move |g| {
                let mut dx = vec![0.0; n];
                dx[index] = g[0];
                dx
            }),
        ))
    }
}

/// Stack 2-D tensors with equal column counts along the row axis.
pub fn concat_rows(parts: &[&Tensor]) -> Result<Tensor> {
    if parts.is_empty() {
        return Err(Error::InvalidShape {
            op: "concat_rows",
            shape: vec![],
            reason: "no parts".into(),
        });
    }
    let (_, c) = require_2d(parts[0], "concat_rows")?;
    let mut total_rows = 0;
    for p in parts {
        let (pr, pc) = require_2d(p, "concat_rows")?;
        if pc != c {
            return Err(Error::ShapeMismatch {
                op: "concat_rows",
                left: parts[0].shape.clone(),
                right: p.shape.clone(),
            });
        }
        total_rows += pr;
    }
    let mut out = Vec::with_capacity(total_rows * c);
    for p in parts {
        out.extend_from_slice(&p.data);
    }
    let mut vjps: Vec<Vjp> = Vec::with_capacity(parts.len());
    let mut offset = 0;
    for p in parts {
        let rows = p.shape[0];
        let start = offset * c;
        let len = rows * c;
        offset += rows;
        vjps.push(Box::new(move |g: &[f64]| g[start..start + len].to_vec()));
    }
    record(vec![total_rows, c], out, parts, vjps)
}

/// Stack 2-D tensors with equal row counts along the column axis.
pub fn concat_cols(parts: &[&Tensor]) -> Result<Tensor> {
    if parts.is_empty() {
        return Err(Error::InvalidShape {
            op: "concat_cols",
            shape: vec![],
            reason: "no parts".into(),
        });
    }
    let (r, _) = require_2d(parts[0], "concat_cols")?;
    let mut total_cols = 0;
    for p in parts {
        let (pr, pc) = require_2d(p, "concat_cols")?;
        if pr != r {
            return Err(Error::ShapeMismatch {
                op: "concat_cols",
                left: parts[0].shape.clone(),
                right: p.shape.clone(),
            });
        }
        total_cols += pc;
    }
    let mut out = vec![0.0; r * total_cols];
    let mut offset = 0;
    for p in parts {
        let pc = p.shape[1];
        for i in 0..r {
            out[i * total_cols + offset..i * total_cols + offset + pc]
                .copy_from_slice(&p.data[i * pc..(i + 1) * pc]);
        }
        offset += pc;
    }
    let mut vjps: Vec<Vjp> = Vec::with_capacity(parts.len());
    let mut col_off = 0;
    for p in parts {
        let pc = p.shape[1];
        let start = col_off;
        col_off += pc;
        vjps.push(Box::new(move |g: &[f64]| {
            let mut dx = Vec::with_capacity(r * pc);
            for i in 0..r {
                dx.extend_from_slice(&g[i * total_cols + start..i * total_cols + start + pc]);
            }
            dx
        }));
    }
    record(vec![r, total_cols], out, parts, vjps)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tape;
    use approx::assert_abs_diff_eq;

    fn t2(rows: usize, cols: usize, data: Vec<f64>) -> Tensor {
        Tensor::from_vec(vec![rows, cols], data).unwrap()
    }

    /// Triple-loop reference used to cross-check the tiled kernel.
    fn matmul_oracle(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
        let mut c = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                for p in 0..k {
                    c[i * n + j] += a[i * k + p] * b[p * n + j];
                }
            }
        }
        c
    }

    #[test]
    fn matmul_matches_triple_loop_oracle() {
        let (m, k, n) = (3, 4, 5);
        let a: Vec<f64> = (0..m * k).map(|i| (i as f64 * 0.7).sin()).collect();
        let b: Vec<f64> = (0..k * n).map(|i| (i as f64 * 1.3).cos()).collect();
        let prod = t2(m, k, a.clone()).matmul(&t2(k, n, b.clone())).unwrap();
        let want = matmul_oracle(&a, &b, m, k, n);
        for (got, want) in prod.data().iter().zip(&want) {
            assert_abs_diff_eq!(got, want, epsilon = 1e-12);
        }
    }

    #[test]
    fn matmul_identity_and_zero() {
        let a = t2(2, 2, vec![1.0, 2.0, 3.0, 4.0]);
        let id = t2(2, 2, vec![1.0, 0.0, 0.0, 1.0]);
        assert_eq!(a.matmul(&id).unwrap().data(), a.data());
        let z = Tensor::zeros(vec![2, 2]).unwrap();
        assert_eq!(a.matmul(&z).unwrap().data(), &[0.0; 4]);
    }

    #[test]
    fn matmul_shape_errors() {
        let a = t2(2, 3, vec![0.0; 6]);
        let b = t2(2, 3, vec![0.0; 6]);
        assert!(a.matmul(&b).is_err());
        let v = Tensor::from_vec(vec![3], vec![0.0; 3]).unwrap();
        assert!(a.matmul(&v).is_err());
    }

    #[test]
    fn matmul_gradients_match_formula() {
        // loss = sum(A*B); dA = 1 * B^T, dB = A^T * 1.
        let tape = Tape::new();
        let a = tape.watch(&t2(2, 3, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]));
        let b = tape.watch(&t2(3, 2, vec![0.5, -1.0, 2.0, 1.5, -0.5, 1.0]));
        let loss = a.matmul(&b).unwrap().sum_all();
        loss.backward().unwrap();
        let da = a.grad().unwrap();
        // Row of ones times B^T: each dA[i, p] = sum_j B[p, j].
        for i in 0..2 {
            for p in 0..3 {
                let want: f64 = (0..2).map(|j| b.data()[p * 2 + j]).sum();
                assert_abs_diff_eq!(da.data()[i * 3 + p], want, epsilon = 1e-12);
            }
        }
        let db = b.grad().unwrap();
        for p in 0..3 {
            for j in 0..2 {
                let want: f64 = (0..2).map(|i| a.data()[i * 3 + p]).sum();
                assert_abs_diff_eq!(db.data()[p * 2 + j], want, epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn transpose_round_trip() {
        let a = t2(2, 3, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let tt = a.transpose().unwrap().transpose().unwrap();
        assert_eq!(tt.data(), a.data());
        assert_eq!(a.transpose().unwrap().shape(), &[3, 2]);
    }

    #[test]
    fn add_broadcasts_bias_over_rows() {
        let a = t2(2, 3, vec![0.0; 6]);
        let b = Tensor::from_vec(vec![3], vec![1.0, 2.0, 3.0]).unwrap();
        let c = a.add(&b).unwrap();
        assert_eq!(c.data(), &[1.0, 2.0, 3.0, 1.0, 2.0, 3.0]);

        let tape = Tape::new();
        let bw = tape.watch(&b);
        let loss = t2(2, 3, vec![1.0; 6]).add(&bw).unwrap().sum_all();
        loss.backward().unwrap();
        // Bias gradient is the column sum over both rows.
        assert_eq!(bw.grad().unwrap().data(), &[2.0, 2.0, 2.0]);
    }

    #[test]
    fn softmax_rows_sum_to_one_and_match_reference() {
        let x = t2(2, 3, vec![1.0, 2.0, 3.0, -1.0, 0.0, 1.0]);
        let y = x.softmax();
        for r in 0..2 {
            let row = &y.data()[r * 3..(r + 1) * 3];
            assert_abs_diff_eq!(row.iter().sum::<f64>(), 1.0, epsilon = 1e-12);
        }
        // Scalar reference for the first row.
        let exps: Vec<f64> = [1.0f64, 2.0, 3.0].iter().map(|v| v.exp()).collect();
        let z: f64 = exps.iter().sum();
        for j in 0..3 {
            assert_abs_diff_eq!(y.data()[j], exps[j] / z, epsilon = 1e-12);
        }
    }

    #[test]
    fn softmax_is_shift_invariant_and_stable() {
        let x = t2(1, 3, vec![1000.0, 1001.0, 1002.0]);
        let y = x.softmax();
        assert!(y.data().iter().all(|v| v.is_finite()));
        let x0 = t2(1, 3, vec![0.0, 1.0, 2.0]);
        for (a, b) in y.data().iter().zip(x0.softmax().data()) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-12);
        }
    }

    #[test]
    fn log_softmax_agrees_with_log_of_softmax() {
        let x = t2(2, 4, vec![0.3, -1.2, 2.0, 0.7, -0.4, 0.0, 1.1, -2.2]);
        let a = x.log_softmax();
        let b = x.softmax();
        for (la, sb) in a.data().iter().zip(b.data()) {
            assert_abs_diff_eq!(la, &sb.ln(), epsilon = 1e-12);
        }
    }

    #[test]
    fn layer_norm_zero_mean_unit_variance() {
        let x = t2(2, 4, vec![1.0, 2.0, 3.0, 4.0, -2.0, 0.0, 2.0, 8.0]);
        let gain = Tensor::from_vec(vec![4], vec![1.0; 4]).unwrap();
        let bias = Tensor::from_vec(vec![4], vec![0.0; 4]).unwrap();
        let y = x.layer_norm(&gain, &bias, 1e-12).unwrap();
        for r in 0..2 {
            let row = &y.data()[r * 4..(r + 1) * 4];
            let mean: f64 = row.iter().sum::<f64>() / 4.0;
            let var: f64 = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / 4.0;
            assert_abs_diff_eq!(mean, 0.0, epsilon = 1e-9);
            assert_abs_diff_eq!(var, 1.0, epsilon = 1e-6);
        }
    }

    #[test]
    fn layer_norm_constant_row_is_finite() {
        let x = t2(1, 4, vec![3.0; 4]);
        let gain = Tensor::from_vec(vec![4], vec![1.0; 4]).unwrap();
        let bias = Tensor::from_vec(vec![4], vec![0.5; 4]).unwrap();
        let y = x.layer_norm(&gain, &bias, 1e-12).unwrap();
        assert!(y.data().iter().all(|v| v.is_finite()));
        for v in y.data() {
            assert_abs_diff_eq!(v, &0.5, epsilon = 1e-5);
        }
    }

    #[test]
    fn gelu_known_values() {
        let x = Tensor::from_vec(vec![3], vec![0.0, 1.0, -1.0]).unwrap();
        let y = x.gelu();
        assert_abs_diff_eq!(y.data()[0], 0.0, epsilon = 1e-12);
        // Reference values of the tanh approximation.
        assert_abs_diff_eq!(y.data()[1], 0.841192, epsilon = 1e-6);
        assert_abs_diff_eq!(y.data()[2], -0.158808, epsilon = 1e-6);
    }

    #[test]
    fn relu_subgradient_at_zero_is_zero() {
        let tape = Tape::new();
        let x = tape.watch(&Tensor::from_vec(vec![3], vec![-1.0, 0.0, 2.0]).unwrap());
        let loss = x.relu().sum_all();
        loss.backward().unwrap();
        assert_eq!(x.grad().unwrap().data(), &[0.0, 0.0, 1.0]);
    }

    #[test]
    fn gather_stacks_rows_and_scatter_adds() {
        let table = t2(3, 2, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let out = table.gather(&[2, 0, 2]).unwrap();
        assert_eq!(out.data(), &[5.0, 6.0, 1.0, 2.0, 5.0, 6.0]);

        let tape = Tape::new();
        let w = tape.watch(&table);
        let loss = w.gather(&[2, 0, 2]).unwrap().sum_all();
        loss.backward().unwrap();
        // Row 2 was gathered twice.
        assert_eq!(w.grad().unwrap().data(), &[1.0, 1.0, 0.0, 0.0, 2.0, 2.0]);

        assert!(table.gather(&[3]).is_err());
        assert!(table.gather(&[]).is_err());
    }

    #[test]
    fn mse_zero_on_identical_inputs() {
        let a = t2(2, 2, vec![1.0, -2.0, 3.0, 0.5]);
        let loss = a.mse(&a.clone()).unwrap();
        assert_eq!(loss.item().unwrap(), 0.0);
    }

    #[test]
    fn mse_matches_hand_value_and_gradient() {
        let tape = Tape::new();
        let a = tape.watch(&Tensor::from_vec(vec![2], vec![1.0, 3.0]).unwrap());
        let b = Tensor::from_vec(vec![2], vec![0.0, 1.0]).unwrap();
        let loss = a.mse(&b).unwrap();
        // ((1-0)^2 + (3-1)^2) / 2 = 2.5
        assert_abs_diff_eq!(loss.item().unwrap(), 2.5, epsilon = 1e-12);
        loss.backward().unwrap();
        // d/da_i = 2 (a_i - b_i) / n
        assert_eq!(a.grad().unwrap().data(), &[1.0, 2.0]);
    }

    #[test]
    fn slicing_and_concat_round_trip() {
        let a = t2(3, 4, (0..12).map(|v| v as f64).collect());
        let top = a.slice_rows(0, 1).unwrap();
        let rest = a.slice_rows(1, 3).unwrap();
        let back = concat_rows(&[&top, &rest]).unwrap();
        assert_eq!(back.data(), a.data());

        let left = a.slice_cols(0, 2).unwrap();
        let right = a.slice_cols(2, 4).unwrap();
        let back = concat_cols(&[&left, &right]).unwrap();
        assert_eq!(back.data(), a.data());
    }

    #[test]
    fn slice_bounds_are_checked() {
        let a = t2(2, 2, vec![0.0; 4]);
        assert!(a.slice_rows(1, 1).is_err());
        assert!(a.slice_rows(0, 3).is_err());
        assert!(a.slice_cols(2, 3).is_err());
    }

    #[test]
    fn pick_extracts_scalar_with_one_hot_gradient() {
        let tape = Tape::new();
        let x = tape.watch(&Tensor::from_vec(vec![4], vec![0.1, 0.2, 0.3, 0.4]).unwrap());
        let y = x.pick(2).unwrap();
        assert_eq!(y.item().unwrap(), 0.3);
        y.backward().unwrap();
        assert_eq!(x.grad().unwrap().data(), &[0.0, 0.0, 1.0, 0.0]);
        assert!(x.pick(4).is_err());
    }

    #[test]
    fn reshape_preserves_data_and_gradients() {
        let tape = Tape::new();
        let x = tape.watch(&t2(2, 3, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]));
        let y = x.reshape(&[3, 2]).unwrap();
        assert_eq!(y.data(), x.data());
        assert!(x.reshape(&[4, 2]).is_err());
        let loss = y.mean_all();
        loss.backward().unwrap();
        for g in x.grad().unwrap().data() {
            assert_abs_diff_eq!(g, &(1.0 / 6.0), epsilon = 1e-15);
        }
    }

    #[test]
    fn forward_values_are_bitwise_deterministic() {
        let build = || {
            let a = t2(4, 4, (0..16).map(|v| (v as f64 * 0.37).sin()).collect());
            let b = t2(4, 4, (0..16).map(|v| (v as f64 * 0.91).cos()).collect());
            a.matmul(&b).unwrap().softmax().gelu().sum_all().item().unwrap()
        };
        let x = build();
        let y = build();
        assert_eq!(x.to_bits(), y.to_bits());
    }
}
