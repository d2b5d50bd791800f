//! Differentiable operations.
//!
//! Each op computes its forward values eagerly and, when some input requires
//! a gradient, attaches a closure that routes the upstream gradient to its
//! parents through a [`GradSink`].

use super::{node_from_parents, Tensor};
use crate::error::{Error, Result};

fn raw_matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            for j in 0..n {
                out[i * n + j] += av * b[p * n + j];
            }
        }
    }
    out
}

fn raw_transpose(x: &[f64], m: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            out[j * m + i] = x[i * n + j];
        }
    }
    out
}

fn stable_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl Tensor {
    fn check_same_shape(&self, other: &Tensor, op: &'static str) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(Error::ShapeMismatch {
                op,
                left: self.shape().to_vec(),
                right: other.shape().to_vec(),
            });
        }
        Ok(())
    }

    /// Matrix product of two rank-2 tensors.
    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        let (m, k) = self.dims2("matmul")?;
        let (k2, n) = other.dims2("matmul")?;
        if k != k2 {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                left: self.shape().to_vec(),
                right: other.shape().to_vec(),
            });
        }
        let out = raw_matmul(self.values(), other.values(), m, k, n);
        let (a, b) = (self.clone(), other.clone());
        Ok(node_from_parents(
            vec![m, n],
            out,
            vec![self.clone(), other.clone()],
            Box::new(move |g, sink| {
                // dA = G * B^T, dB = A^T * G
                let bt = raw_transpose(b.values(), k, n);
                sink.add(&a, &raw_matmul(g, &bt, m, n, k));
                let at = raw_transpose(a.values(), m, k);
                sink.add(&b, &raw_matmul(&at, g, k, m, n));
            }),
        ))
    }

    pub fn transpose(&self) -> Result<Tensor> {
        let (m, n) = self.dims2("transpose")?;
        let out = raw_transpose(self.values(), m, n);
        let x = self.clone();
        Ok(node_from_parents(
            vec![n, m],
            out,
            vec![self.clone()],
            Box::new(move |g, sink| sink.add(&x, &raw_transpose(g, n, m))),
        ))
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        self.check_same_shape(other, "add")?;
        let out = self
            .values()
            .iter()
            .zip(other.values())
            .map(|(x, y)| x + y)
            .collect();
        let (a, b) = (self.clone(), other.clone());
        Ok(node_from_parents(
            self.shape().to_vec(),
            out,
            vec![self.clone(), other.clone()],
            Box::new(move |g, sink| {
                sink.add(&a, g);
                sink.add(&b, g);
            }),
        ))
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        self.check_same_shape(other, "sub")?;
        let out = self
            .values()
            .iter()
            .zip(other.values())
            .map(|(x, y)| x - y)
            .collect();
        let (a, b) = (self.clone(), other.clone());
        Ok(node_from_parents(
            self.shape().to_vec(),
            out,
            vec![self.clone(), other.clone()],
            Box::new(move |g, sink| {
                sink.add(&a, g);
                let neg: Vec<f64> = g.iter().map(|v| -v).collect();
                sink.add(&b, &neg);
            }),
        ))
    }

    /// Elementwise (Hadamard) product.
    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        self.check_same_shape(other, "mul")?;
        let out = self
            .values()
            .iter()
            .zip(other.values())
            .map(|(x, y)| x * y)
            .collect();
        let (a, b) = (self.clone(), other.clone());
        Ok(node_from_parents(
            self.shape().to_vec(),
            out,
            vec![self.clone(), other.clone()],
            Box::new(move |g, sink| {
                let da: Vec<f64> = g.iter().zip(b.values()).map(|(g, y)| g * y).collect();
                sink.add(&a, &da);
                let db: Vec<f64> = g.iter().zip(a.values()).map(|(g, x)| g * x).collect();
                sink.add(&b, &db);
            }),
        ))
    }

    pub fn div(&self, other: &Tensor) -> Result<Tensor> {
        self.check_same_shape(other, "div")?;
        let out = self
            .values()
            .iter()
            .zip(other.values())
            .map(|(x, y)| x / y)
            .collect();
        let (a, b) = (self.clone(), other.clone());
        Ok(node_from_parents(
            self.shape().to_vec(),
            out,
            vec![self.clone(), other.clone()],
            Box::new(move |g, sink| {
                let da: Vec<f64> = g.iter().zip(b.values()).map(|(g, y)| g / y).collect();
                sink.add(&a, &da);
                let db: Vec<f64> = g
                    .iter()
                    .zip(a.values().iter().zip(b.values()))
                    .map(|(g, (x, y))| -g * x / (y * y))
                    .collect();
                sink.add(&b, &db);
            }),
        ))
    }

    pub fn add_scalar(&self, c: f64) -> Tensor {
        let out = self.values().iter().map(|x| x + c).collect();
        let a = self.clone();
        node_from_parents(
            self.shape().to_vec(),
            out,
            vec![self.clone()],
            Box::new(move |g, sink| sink.add(&a, g)),
        )
    }

    pub fn mul_scalar(&self, c: f64) -> Tensor {
        let out = self.values().iter().map(|x| x * c).collect();
        let a = self.clone();
        node_from_parents(
            self.shape().to_vec(),
            out,
            vec![self.clone()],
            Box::new(move |g, sink| {
                let da: Vec<f64> = g.iter().map(|v| v * c).collect();
                sink.add(&a, &da);
            }),
        )
    }

    /// Elementwise power with a constant exponent.
    pub fn powf_scalar(&self, p: f64) -> Tensor {
        let out = self.values().iter().map(|x| x.powf(p)).collect();
        let a = self.clone();
        node_from_parents(
            self.shape().to_vec(),
            out,
            vec![self.clone()],
            Box::new(move |g, sink| {
                let da: Vec<f64> = g
                    .iter()
                    .zip(a.values())
                    .map(|(g, x)| g * p * x.powf(p - 1.0))
                    .collect();
                sink.add(&a, &da);
            }),
        )
    }

    /// Natural logarithm; the caller guarantees positive inputs.
    pub fn ln(&self) -> Tensor {
        let out = self.values().iter().map(|x| x.ln()).collect();
        let a = self.clone();
        node_from_parents(
            self.shape().to_vec(),
            out,
            vec![self.clone()],
            Box::new(move |g, sink| {
                let da: Vec<f64> = g.iter().zip(a.values()).map(|(g, x)| g / x).collect();
                sink.add(&a, &da);
            }),
        )
    }

    /// Elementwise logistic function, computed without overflow.
    pub fn sigmoid(&self) -> Tensor {
        let out: Vec<f64> = self.values().iter().map(|&x| stable_sigmoid(x)).collect();
        let a = self.clone();
        let y = out.clone();
        node_from_parents(
            self.shape().to_vec(),
            out,
            vec![self.clone()],
            Box::new(move |g, sink| {
                let da: Vec<f64> = g
                    .iter()
                    .zip(&y)
                    .map(|(g, y)| g * y * (1.0 - y))
                    .collect();
                sink.add(&a, &da);
            }),
        )
    }

    /// Clamps into `[lo, hi]`; gradient passes only through the interior.
    pub fn clamp(&self, lo: f64, hi: f64) -> Tensor {
        let out = self.values().iter().map(|x| x.clamp(lo, hi)).collect();
        let a = self.clone();
        let mask: Vec<f64> = self
            .values()
            .iter()
            .map(|&x| if x > lo && x < hi { 1.0 } else { 0.0 })
            .collect();
        node_from_parents(
            self.shape().to_vec(),
            out,
            vec![self.clone()],
            Box::new(move |g, sink| {
                let da: Vec<f64> = g.iter().zip(&mask).map(|(g, m)| g * m).collect();
                sink.add(&a, &da);
            }),
        )
    }

    /// Sum of all elements as a rank-0 tensor.
    pub fn sum_all(&self) -> Tensor {
        let s: f64 = self.values().iter().sum();
        let a = self.clone();
        let n = self.numel();
        node_from_parents(
            Vec::new(),
            vec![s],
            vec![self.clone()],
            Box::new(move |g, sink| sink.add(&a, &vec![g[0]; n])),
        )
    }

    /// Mean of all elements as a rank-0 tensor.
    pub fn mean_all(&self) -> Tensor {
        let n = self.numel();
        let s: f64 = self.values().iter().sum();
        let a = self.clone();
        node_from_parents(
            Vec::new(),
            vec![s / n as f64],
            vec![self.clone()],
            Box::new(move |g, sink| sink.add(&a, &vec![g[0] / n as f64; n])),
        )
    }

    /// Row-wise softmax with max subtraction for stability.
    pub fn softmax_rows(&self) -> Result<Tensor> {
        let (m, n) = self.dims2("softmax_rows")?;
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let row = &self.values()[i * n..(i + 1) * n];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut denom = 0.0;
            for j in 0..n {
                let e = (row[j] - max).exp();
                out[i * n + j] = e;
                denom += e;
            }
            for j in 0..n {
                out[i * n + j] /= denom;
            }
        }
        let a = self.clone();
        let y = out.clone();
        Ok(node_from_parents(
            vec![m, n],
            out,
            vec![self.clone()],
            Box::new(move |g, sink| {
                // dx = y * (g - <g, y>) per row
                let mut da = vec![0.0; m * n];
                for i in 0..m {
                    let mut dot = 0.0;
                    for j in 0..n {
                        dot += g[i * n + j] * y[i * n + j];
                    }
                    for j in 0..n {
                        da[i * n + j] = y[i * n + j] * (g[i * n + j] - dot);
                    }
                }
                sink.add(&a, &da);
            }),
        ))
    }

    /// Row-wise standardization (biased variance) followed by gain and bias.
    pub fn layer_norm(&self, gain: &Tensor, bias: &Tensor, eps: f64) -> Result<Tensor> {
        let (m, n) = self.dims2("layer_norm")?;
        if gain.shape() != [n] || bias.shape() != [n] {
            return Err(Error::ShapeMismatch {
                op: "layer_norm",
                left: self.shape().to_vec(),
                right: gain.shape().to_vec(),
            });
        }
        let mut out = vec![0.0; m * n];
        let mut xhat = vec![0.0; m * n];
        let mut inv_std = vec![0.0; m];
        for i in 0..m {
            let row = &self.values()[i * n..(i + 1) * n];
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n as f64;
            let inv = 1.0 / (var + eps).sqrt();
            inv_std[i] = inv;
            for j in 0..n {
                let h = (row[j] - mean) * inv;
                xhat[i * n + j] = h;
                out[i * n + j] = gain.values()[j] * h + bias.values()[j];
            }
        }
        let (x, gn, bs) = (self.clone(), gain.clone(), bias.clone());
        Ok(node_from_parents(
            vec![m, n],
            out,
            vec![self.clone(), gain.clone(), bias.clone()],
            Box::new(move |g, sink| {
                let mut dgain = vec![0.0; n];
                let mut dbias = vec![0.0; n];
                let mut dx = vec![0.0; m * n];
                for i in 0..m {
                    let mut mean_gg = 0.0;
                    let mut mean_ggx = 0.0;
                    for j in 0..n {
                        let idx = i * n + j;
                        let gg = g[idx] * gn.values()[j];
                        dgain[j] += g[idx] * xhat[idx];
                        dbias[j] += g[idx];
                        mean_gg += gg;
                        mean_ggx += gg * xhat[idx];
                    }
                    mean_gg /= n as f64;
                    mean_ggx /= n as f64;
                    for j in 0..n {
                        let idx = i * n + j;
                        let gg = g[idx] * gn.values()[j];
                        dx[idx] = inv_std[i] * (gg - mean_gg - xhat[idx] * mean_ggx);
                    }
                }
                sink.add(&x, &dx);
                sink.add(&gn, &dgain);
                sink.add(&bs, &dbias);
            }),
        ))
    }

    /// Adds a length-n bias to every row of an m-by-n tensor.
    pub fn add_row_bias(&self, bias: &Tensor) -> Result<Tensor> {
        let (m, n) = self.dims2("add_row_bias")?;
        if bias.shape() != [n] {
            return Err(Error::ShapeMismatch {
                op: "add_row_bias",
                left: self.shape().to_vec(),
                right: bias.shape().to_vec(),
            });
        }
        let mut out = self.values().to_vec();
        for i in 0..m {
            for j in 0..n {
                out[i * n + j] += bias.values()[j];
            }
        }
        let (x, b) = (self.clone(), bias.clone());
        Ok(node_from_parents(
            vec![m, n],
            out,
            vec![self.clone(), bias.clone()],
            Box::new(move |g, sink| {
                sink.add(&x, g);
                let mut db = vec![0.0; n];
                for i in 0..m {
                    for j in 0..n {
                        db[j] += g[i * n + j];
                    }
                }
                sink.add(&b, &db);
            }),
        ))
    }

    /// Affine map `x * w + b`, the composition of matmul and a row bias.
    pub fn linear(&self, w: &Tensor, b: &Tensor) -> Result<Tensor> {
        self.matmul(w)?.add_row_bias(b)
    }

    /// Stacks `self` on top of `other` along rows.
    pub fn concat_rows(&self, other: &Tensor) -> Result<Tensor> {
        let (m1, n1) = self.dims2("concat_rows")?;
        let (m2, n2) = other.dims2("concat_rows")?;
        if n1 != n2 {
            return Err(Error::ShapeMismatch {
                op: "concat_rows",
                left: self.shape().to_vec(),
                right: other.shape().to_vec(),
            });
        }
        let mut out = self.values().to_vec();
        out.extend_from_slice(other.values());
        let (a, b) = (self.clone(), other.clone());
        Ok(node_from_parents(
            vec![m1 + m2, n1],
            out,
            vec![self.clone(), other.clone()],
            Box::new(move |g, sink| {
                sink.add(&a, &g[..m1 * n1]);
                sink.add(&b, &g[m1 * n1..]);
            }),
        ))
    }

    /// Joins `self` and `other` side by side along columns.
    pub fn concat_cols(&self, other: &Tensor) -> Result<Tensor> {
        let (m1, n1) = self.dims2("concat_cols")?;
        let (m2, n2) = other.dims2("concat_cols")?;
        if m1 != m2 {
            return Err(Error::ShapeMismatch {
                op: "concat_cols",
                left: self.shape().to_vec(),
                right: other.shape().to_vec(),
            });
        }
        let n = n1 + n2;
        let mut out = vec![0.0; m1 * n];
        for i in 0..m1 {
            out[i * n..i * n + n1].copy_from_slice(&self.values()[i * n1..(i + 1) * n1]);
            out[i * n + n1..(i + 1) * n].copy_from_slice(&other.values()[i * n2..(i + 1) * n2]);
        }
        let (a, b) = (self.clone(), other.clone());
        Ok(node_from_parents(
            vec![m1, n],
            out,
            vec![self.clone(), other.clone()],
            Box::new(move |g, sink| {
                let mut da = vec![0.0; m1 * n1];
                let mut db = vec![0.0; m1 * n2];
                for i in 0..m1 {
                    da[i * n1..(i + 1) * n1].copy_from_slice(&g[i * n..i * n + n1]);
                    db[i * n2..(i + 1) * n2].copy_from_slice(&g[i * n + n1..(i + 1) * n]);
                }
                sink.add(&a, &da);
                sink.add(&b, &db);
            }),
        ))
    }

    /// Rows `r0..r1` as a new tensor.
    pub fn slice_rows(&self, r0: usize, r1: usize) -> Result<Tensor> {
        let (m, n) = self.dims2("slice_rows")?;
        if r0 >= r1 || r1 > m {
            return Err(Error::InvalidShape {
                op: "slice_rows",
                shape: self.shape().to_vec(),
                reason: format!("row range {r0}..{r1} out of bounds"),
            });
        }
        let out = self.values()[r0 * n..r1 * n].to_vec();
        let a = self.clone();
        Ok(node_from_parents(
            vec![r1 - r0, n],
            out,
            vec![self.clone()],
            Box::new(move |g, sink| {
                let mut da = vec![0.0; m * n];
                da[r0 * n..r1 * n].copy_from_slice(g);
                sink.add(&a, &da);
            }),
        ))
    }

    /// Columns `c0..c1` as a new tensor.
    pub fn slice_cols(&self, c0: usize, c1: usize) -> Result<Tensor> {
        let (m, n) = self.dims2("slice_cols")?;
        if c0 >= c1 || c1 > n {
            return Err(Error::InvalidShape {
                op: "slice_cols",
                shape: self.shape().to_vec(),
                reason: format!("column range {c0}..{c1} out of bounds"),
            });
        }
        let w = c1 - c0;
        let mut out = vec![0.0; m * w];
        for i in 0..m {
            out[i * w..(i + 1) * w].copy_from_slice(&self.values()[i * n + c0..i * n + c1]);
        }
        let a = self.clone();
        Ok(node_from_parents(
            vec![m, w],
            out,
            vec![self.clone()],
            Box::new(move |g, sink| {
                let mut da = vec![0.0; m * n];
                for i in 0..m {
                    da[i * n + c0..i * n + c1].copy_from_slice(&g[i * w..(i + 1) * w]);
                }
                sink.add(&a, &da);
            }),
        ))
    }

    /// Selects rows by index; repeated indices accumulate gradient.
    pub fn gather_rows(&self, indices: &[usize]) -> Result<Tensor> {
        let (m, n) = self.dims2("gather_rows")?;
        if let Some(&bad) = indices.iter().find(|&&i| i >= m) {
            return Err(Error::InvalidShape {
                op: "gather_rows",
                shape: self.shape().to_vec(),
                reason: format!("row index {bad} out of bounds"),
            });
        }
        let mut out = vec![0.0; indices.len() * n];
        for (r, &i) in indices.iter().enumerate() {
            out[r * n..(r + 1) * n].copy_from_slice(&self.values()[i * n..(i + 1) * n]);
        }
        let a = self.clone();
        let idx = indices.to_vec();
        Ok(node_from_parents(
            vec![indices.len(), n],
            out,
            vec![self.clone()],
            Box::new(move |g, sink| {
                let mut da = vec![0.0; m * n];
                for (r, &i) in idx.iter().enumerate() {
                    for j in 0..n {
                        da[i * n + j] += g[r * n + j];
                    }
                }
                sink.add(&a, &da);
            }),
        ))
    }

    /// Repeats a 1-by-n row m times.
    pub fn broadcast_row(&self, m: usize) -> Result<Tensor> {
        let (one, n) = self.dims2("broadcast_row")?;
        if one != 1 {
            return Err(Error::InvalidShape {
                op: "broadcast_row",
                shape: self.shape().to_vec(),
                reason: "expected a single row".into(),
            });
        }
        let mut out = Vec::with_capacity(m * n);
        for _ in 0..m {
            out.extend_from_slice(self.values());
        }
        let a = self.clone();
        Ok(node_from_parents(
            vec![m, n],
            out,
            vec![self.clone()],
            Box::new(move |g, sink| {
                let mut da = vec![0.0; n];
                for i in 0..m {
                    for j in 0..n {
                        da[j] += g[i * n + j];
                    }
                }
                sink.add(&a, &da);
            }),
        ))
    }

    /// Repeats an m-by-1 column n times.
    pub fn broadcast_col(&self, n: usize) -> Result<Tensor> {
        let (m, one) = self.dims2("broadcast_col")?;
        if one != 1 {
            return Err(Error::InvalidShape {
                op: "broadcast_col",
                shape: self.shape().to_vec(),
                reason: "expected a single column".into(),
            });
        }
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[i * n + j] = self.values()[i];
            }
        }
        let a = self.clone();
        Ok(node_from_parents(
            vec![m, n],
            out,
            vec![self.clone()],
            Box::new(move |g, sink| {
                let mut da = vec![0.0; m];
                for i in 0..m {
                    for j in 0..n {
                        da[i] += g[i * n + j];
                    }
                }
                sink.add(&a, &da);
            }),
        ))
    }

    /// Same values under a new shape with equal element count.
    pub fn reshape(&self, shape: impl Into<Vec<usize>>) -> Result<Tensor> {
        let shape = shape.into();
        let expected: usize = shape.iter().product();
        if expected != self.numel() {
            return Err(Error::InvalidShape {
                op: "reshape",
                shape,
                reason: format!("element count {} does not match", self.numel()),
            });
        }
        let a = self.clone();
        Ok(node_from_parents(
            shape,
            self.values().to_vec(),
            vec![self.clone()],
            Box::new(move |g, sink| sink.add(&a, g)),
        ))
    }
}
