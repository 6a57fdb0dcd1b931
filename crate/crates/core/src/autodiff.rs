//! Minimal reverse-mode automatic differentiation over dense tensors.
//!
//! A [`Tape`] records primitive operations as they execute; [`Tape::backward`]
//! walks the record once in reverse. Tapes are single-owner and rebuilt per
//! forward pass (gate noise is resampled every step). Forward values are
//! computed by the shared kernels in [`crate::tensor`], so a taped forward and
//! the plain evaluation path produce bit-identical numbers.

use std::collections::HashMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::num::Real;
use crate::tensor::{self, Tensor};
use crate::{Error, Result};

/// Handle to a node on a tape. Only meaningful for the tape that issued it.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(pub(crate) usize);

type BackFn<F> = Box<dyn Fn(&[Tensor<F>], &Tensor<F>, &mut [Option<Tensor<F>>])>;

struct Node<F> {
    requires_grad: bool,
    back: Option<BackFn<F>>,
}

pub struct Tape<F: Real> {
    values: Vec<Tensor<F>>,
    nodes: Vec<Node<F>>,
    grads: Vec<Option<Tensor<F>>>,
}

fn accum<F: Real>(grads: &mut [Option<Tensor<F>>], idx: usize, delta: Tensor<F>) {
    match &mut grads[idx] {
        Some(g) => {
            debug_assert_eq!(g.shape(), delta.shape());
            for (a, b) in g.data_mut().iter_mut().zip(delta.data()) {
                *a += *b;
            }
        }
        slot @ None => *slot = Some(delta),
    }
}

impl<F: Real> Default for Tape<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Real> Tape<F> {
    pub fn new() -> Self {
        Tape { values: Vec::new(), nodes: Vec::new(), grads: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<F>, requires_grad: bool, back: Option<BackFn<F>>) -> Var {
        self.values.push(value);
        self.nodes.push(Node { requires_grad, back });
        self.grads.push(None);
        Var(self.values.len() - 1)
    }

    /// Register a leaf. Trainable leaves receive gradients on backward.
    pub fn leaf(&mut self, value: Tensor<F>, requires_grad: bool) -> Var {
        self.push(value, requires_grad, None)
    }

    pub fn constant(&mut self, value: Tensor<F>) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<F> {
        &self.values[v.0]
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Accumulated gradient of `v`, if any reached it.
    pub fn grad(&self, v: Var) -> Option<&Tensor<F>> {
        self.grads[v.0].as_ref()
    }

    pub fn zero_grads(&mut self) {
        for g in &mut self.grads {
            *g = None;
        }
    }

    /// Run reverse accumulation from a scalar loss. Gradients accumulate
    /// across repeated calls until [`Tape::zero_grads`].
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if !self.values[loss.0].is_scalar() {
            return Err(Error::Shape(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.values[loss.0].shape()
            )));
        }
        // sweep into a fresh buffer so repeated calls do not re-propagate
        // previously accumulated gradients, then merge
        let mut local: Vec<Option<Tensor<F>>> = vec![None; self.nodes.len()];
        accum(&mut local, loss.0, Tensor::scalar(F::one()));
        for i in (0..=loss.0).rev() {
            if local[i].is_none() {
                continue;
            }
            if let Some(back) = &self.nodes[i].back {
                let g = local[i].clone().unwrap();
                back(&self.values, &g, &mut local);
            }
        }
        for (i, g) in local.into_iter().enumerate() {
            if let Some(g) = g {
                accum(&mut self.grads, i, g);
            }
        }
        Ok(())
    }

    // ── primitive operations ────────────────────────────────────────────

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = tensor::add(self.value(a), self.value(b))?;
        let (ra, rb) = (self.requires_grad(a), self.requires_grad(b));
        let back: Option<BackFn<F>> = if ra || rb {
            Some(Box::new(move |_vals, g, grads| {
                if ra {
                    accum(grads, a.0, g.clone());
                }
                if rb {
                    accum(grads, b.0, g.clone());
                }
            }))
        } else {
            None
        };
        Ok(self.push(value, ra || rb, back))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = tensor::mul(self.value(a), self.value(b))?;
        let (ra, rb) = (self.requires_grad(a), self.requires_grad(b));
        let back: Option<BackFn<F>> = if ra || rb {
            Some(Box::new(move |vals, g, grads| {
                if ra {
                    accum(grads, a.0, tensor::mul(g, &vals[b.0]).unwrap());
                }
                if rb {
                    accum(grads, b.0, tensor::mul(g, &vals[a.0]).unwrap());
                }
            }))
        } else {
            None
        };
        Ok(self.push(value, ra || rb, back))
    }

    /// Elementwise `scale * x + shift`.
    pub fn affine(&mut self, x: Var, scale: F, shift: F) -> Var {
        let value = tensor::affine(self.value(x), scale, shift);
        let rx = self.requires_grad(x);
        let back: Option<BackFn<F>> = if rx {
            Some(Box::new(move |_vals, g, grads| {
                accum(grads, x.0, g.map(|v| scale * v));
            }))
        } else {
            None
        };
        self.push(value, rx, back)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = tensor::matmul(self.value(a), self.value(b))?;
        let (ra, rb) = (self.requires_grad(a), self.requires_grad(b));
        let back: Option<BackFn<F>> = if ra || rb {
            Some(Box::new(move |vals, g, grads| {
                if ra {
                    accum(grads, a.0, tensor::matmul_nt(g, &vals[b.0]).unwrap());
                }
                if rb {
                    accum(grads, b.0, tensor::matmul_tn(&vals[a.0], g).unwrap());
                }
            }))
        } else {
            None
        };
        Ok(self.push(value, ra || rb, back))
    }

    /// `a[m x k] * b[n x k]^T`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = tensor::matmul_nt(self.value(a), self.value(b))?;
        let (ra, rb) = (self.requires_grad(a), self.requires_grad(b));
        let back: Option<BackFn<F>> = if ra || rb {
            Some(Box::new(move |vals, g, grads| {
                if ra {
                    accum(grads, a.0, tensor::matmul(g, &vals[b.0]).unwrap());
                }
                if rb {
                    accum(grads, b.0, tensor::matmul_tn(g, &vals[a.0]).unwrap());
                }
            }))
        } else {
            None
        };
        Ok(self.push(value, ra || rb, back))
    }

    /// `out[i,j] = gr[i] * w[i,j] * gc[j]`. The usual case has a frozen `w`
    /// and trainable gates; gradient routing skips non-trainable inputs.
    pub fn scale_rows_cols(&mut self, w: Var, gr: Var, gc: Var) -> Result<Var> {
        let value = tensor::scale_rows_cols(self.value(w), self.value(gr), self.value(gc))?;
        let (rw, rr, rc) = (
            self.requires_grad(w),
            self.requires_grad(gr),
            self.requires_grad(gc),
        );
        let back: Option<BackFn<F>> = if rw || rr || rc {
            Some(Box::new(move |vals, g, grads| {
                let wv = &vals[w.0];
                let grv = &vals[gr.0];
                let gcv = &vals[gc.0];
                let (k, d) = (wv.rows(), wv.cols());
                if rw {
                    let mut dw = vec![F::zero(); k * d];
                    for i in 0..k {
                        for j in 0..d {
                            dw[i * d + j] = g.data()[i * d + j] * grv.data()[i] * gcv.data()[j];
                        }
                    }
                    accum(grads, w.0, Tensor::from_vec(vec![k, d], dw).unwrap());
                }
                if rr {
                    let mut dgr = vec![F::zero(); k];
                    for i in 0..k {
                        let mut s = F::zero();
                        for j in 0..d {
                            s += g.data()[i * d + j] * wv.data()[i * d + j] * gcv.data()[j];
                        }
                        dgr[i] = s;
                    }
                    accum(grads, gr.0, Tensor::vector(dgr));
                }
                if rc {
                    let mut dgc = vec![F::zero(); d];
                    for j in 0..d {
                        let mut s = F::zero();
                        for i in 0..k {
                            s += g.data()[i * d + j] * grv.data()[i] * wv.data()[i * d + j];
                        }
                        dgc[j] = s;
                    }
                    accum(grads, gc.0, Tensor::vector(dgc));
                }
            }))
        } else {
            None
        };
        Ok(self.push(value, rw || rr || rc, back))
    }

    /// Clip to `[0,1]`. Subgradient convention: gradient 1 strictly inside
    /// (0,1), 0 everywhere else including the boundary points.
    pub fn clamp01(&mut self, x: Var) -> Var {
        let value = tensor::clamp01(self.value(x));
        let rx = self.requires_grad(x);
        let back: Option<BackFn<F>> = if rx {
            Some(Box::new(move |vals, g, grads| {
                let xin = &vals[x.0];
                let data = xin
                    .data()
                    .iter()
                    .zip(g.data())
                    .map(|(&v, &gv)| {
                        if v > F::zero() && v < F::one() {
                            gv
                        } else {
                            F::zero()
                        }
                    })
                    .collect();
                accum(grads, x.0, Tensor::from_vec(xin.shape().to_vec(), data).unwrap());
            }))
        } else {
            None
        };
        self.push(value, rx, back)
    }

    /// Exact Gaussian-CDF gelu.
    pub fn gelu(&mut self, x: Var) -> Var {
        let value = tensor::gelu(self.value(x));
        let rx = self.requires_grad(x);
        let back: Option<BackFn<F>> = if rx {
            Some(Box::new(move |vals, g, grads| {
                let inv_sqrt_2pi = F::from_f64_lossy(1.0 / (2.0 * std::f64::consts::PI).sqrt());
                let half = F::from_f64_lossy(0.5);
                let d = vals[x.0].map(|v| {
                    let pdf = inv_sqrt_2pi * (-(v * v) * half).exp();
                    tensor::phi(v) + v * pdf
                });
                accum(grads, x.0, tensor::mul(g, &d).unwrap());
            }))
        } else {
            None
        };
        self.push(value, rx, back)
    }

    pub fn erf_op(&mut self, x: Var) -> Var {
        let value = self.value(x).map(|v| v.erf());
        let rx = self.requires_grad(x);
        let back: Option<BackFn<F>> = if rx {
            Some(Box::new(move |vals, g, grads| {
                let c = F::from_f64_lossy(2.0 / std::f64::consts::PI.sqrt());
                let d = vals[x.0].map(|v| c * (-(v * v)).exp());
                accum(grads, x.0, tensor::mul(g, &d).unwrap());
            }))
        } else {
            None
        };
        self.push(value, rx, back)
    }

    pub fn tanh_op(&mut self, x: Var) -> Var {
        let value = self.value(x).map(|v| v.tanh());
        let rx = self.requires_grad(x);
        let out = self.push(value, rx, None);
        if rx {
            let back: BackFn<F> = Box::new(move |vals, g, grads| {
                let d = vals[out.0].map(|y| F::one() - y * y);
                accum(grads, x.0, tensor::mul(g, &d).unwrap());
            });
            self.nodes[out.0].back = Some(back);
        }
        out
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let value = self.value(x).map(|v| if v > F::zero() { v } else { F::zero() });
        let rx = self.requires_grad(x);
        let back: Option<BackFn<F>> = if rx {
            Some(Box::new(move |vals, g, grads| {
                let d = vals[x.0]
                    .data()
                    .iter()
                    .zip(g.data())
                    .map(|(&v, &gv)| if v > F::zero() { gv } else { F::zero() })
                    .collect();
                accum(
                    grads,
                    x.0,
                    Tensor::from_vec(vals[x.0].shape().to_vec(), d).unwrap(),
                );
            }))
        } else {
            None
        };
        self.push(value, rx, back)
    }

    /// Elementwise `max(x, c)`; gradient flows where `x > c`.
    pub fn max_const(&mut self, x: Var, c: F) -> Var {
        let value = self.value(x).map(|v| if v > c { v } else { c });
        let rx = self.requires_grad(x);
        let back: Option<BackFn<F>> = if rx {
            Some(Box::new(move |vals, g, grads| {
                let d = vals[x.0]
                    .data()
                    .iter()
                    .zip(g.data())
                    .map(|(&v, &gv)| if v > c { gv } else { F::zero() })
                    .collect();
                accum(
                    grads,
                    x.0,
                    Tensor::from_vec(vals[x.0].shape().to_vec(), d).unwrap(),
                );
            }))
        } else {
            None
        };
        self.push(value, rx, back)
    }

    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        let value = tensor::softmax_rows(self.value(x))?;
        let rx = self.requires_grad(x);
        let out = self.push(value, rx, None);
        if rx {
            let back: BackFn<F> = Box::new(move |vals, g, grads| {
                let y = &vals[out.0];
                let (m, n) = (y.rows(), y.cols());
                let mut dx = vec![F::zero(); m * n];
                for i in 0..m {
                    let mut dot = F::zero();
                    for j in 0..n {
                        dot += g.data()[i * n + j] * y.data()[i * n + j];
                    }
                    for j in 0..n {
                        dx[i * n + j] = y.data()[i * n + j] * (g.data()[i * n + j] - dot);
                    }
                }
                accum(grads, x.0, Tensor::from_vec(vec![m, n], dx).unwrap());
            });
            self.nodes[out.0].back = Some(back);
        }
        Ok(out)
    }

    /// Mean cross-entropy of `logits[n x c]` against integer labels, with
    /// log-sum-exp stabilization.
    pub fn cross_entropy_mean(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let lv = self.value(logits);
        let (n, c) = (lv.rows(), lv.cols());
        if n == 0 || labels.is_empty() {
            return Err(Error::Input("cross_entropy over an empty batch".into()));
        }
        if labels.len() != n {
            return Err(Error::Shape(format!(
                "cross_entropy: {n} logit rows vs {} labels",
                labels.len()
            )));
        }
        if lv.has_non_finite() {
            return Err(Error::Numeric("non-finite logits in cross_entropy".into()));
        }
        let mut loss = F::zero();
        for (i, &y) in labels.iter().enumerate() {
            if y >= c {
                return Err(Error::Input(format!("label {y} out of range 0..{c}")));
            }
            let row = &lv.data()[i * c..(i + 1) * c];
            let mut mx = row[0];
            for &v in row {
                if v > mx {
                    mx = v;
                }
            }
            let mut z = F::zero();
            for &v in row {
                z += (v - mx).exp();
            }
            loss += (mx + z.ln()) - row[y];
        }
        let nf = F::from_f64_lossy(n as f64);
        loss = loss / nf;
        let rx = self.requires_grad(logits);
        let labels_owned: Vec<usize> = labels.to_vec();
        let back: Option<BackFn<F>> = if rx {
            Some(Box::new(move |vals, g, grads| {
                let gs = g.item();
                let lv = &vals[logits.0];
                let (n, c) = (lv.rows(), lv.cols());
                let nf = F::from_f64_lossy(n as f64);
                let sm = tensor::softmax_rows(lv).unwrap();
                let mut dl = sm.data().to_vec();
                for (i, &y) in labels_owned.iter().enumerate() {
                    dl[i * c + y] -= F::one();
                }
                for v in &mut dl {
                    *v = *v * gs / nf;
                }
                accum(grads, logits.0, Tensor::from_vec(vec![n, c], dl).unwrap());
            }))
        } else {
            None
        };
        Ok(self.push(Tensor::scalar(loss), rx, back))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let value = Tensor::scalar(tensor::sum(self.value(x)));
        let rx = self.requires_grad(x);
        let back: Option<BackFn<F>> = if rx {
            Some(Box::new(move |vals, g, grads| {
                let gs = g.item();
                accum(grads, x.0, Tensor::full(vals[x.0].shape().to_vec(), gs));
            }))
        } else {
            None
        };
        self.push(value, rx, back)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let value = Tensor::scalar(tensor::mean(self.value(x)));
        let rx = self.requires_grad(x);
        let back: Option<BackFn<F>> = if rx {
            Some(Box::new(move |vals, g, grads| {
                let nf = F::from_f64_lossy(vals[x.0].len() as f64);
                let gs = g.item() / nf;
                accum(grads, x.0, Tensor::full(vals[x.0].shape().to_vec(), gs));
            }))
        } else {
            None
        };
        self.push(value, rx, back)
    }

    /// Broadcast-add a vector to every row.
    pub fn add_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let value = tensor::add_bias(self.value(x), self.value(b))?;
        let (rx, rb) = (self.requires_grad(x), self.requires_grad(b));
        let back: Option<BackFn<F>> = if rx || rb {
            Some(Box::new(move |_vals, g, grads| {
                if rx {
                    accum(grads, x.0, g.clone());
                }
                if rb {
                    let (m, n) = (g.rows(), g.cols());
                    let mut db = vec![F::zero(); n];
                    for i in 0..m {
                        for j in 0..n {
                            db[j] += g.data()[i * n + j];
                        }
                    }
                    accum(grads, b.0, Tensor::vector(db));
                }
            }))
        } else {
            None
        };
        Ok(self.push(value, rx || rb, back))
    }

    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: F) -> Result<Var> {
        let value = tensor::layer_norm(self.value(x), self.value(gamma), self.value(beta), eps)?;
        let (rx, rg, rb) = (
            self.requires_grad(x),
            self.requires_grad(gamma),
            self.requires_grad(beta),
        );
        let back: Option<BackFn<F>> = if rx || rg || rb {
            Some(Box::new(move |vals, g, grads| {
                let xv = &vals[x.0];
                let gv = &vals[gamma.0];
                let (m, n) = (xv.rows(), xv.cols());
                let nf = F::from_f64_lossy(n as f64);
                let mut dgamma = vec![F::zero(); n];
                let mut dbeta = vec![F::zero(); n];
                let mut dx = vec![F::zero(); m * n];
                for i in 0..m {
                    let row = &xv.data()[i * n..(i + 1) * n];
                    let mut meanv = F::zero();
                    for &v in row {
                        meanv += v;
                    }
                    meanv = meanv / nf;
                    let mut var = F::zero();
                    for &v in row {
                        let c = v - meanv;
                        var += c * c;
                    }
                    var = var / nf;
                    let inv = F::one() / (var + eps).sqrt();
                    let grow = &g.data()[i * n..(i + 1) * n];
                    // xhat and the two row means needed for dx
                    let mut mean_dxhat = F::zero();
                    let mut mean_dxhat_xhat = F::zero();
                    for j in 0..n {
                        let xhat = (row[j] - meanv) * inv;
                        let dxhat = gv.data()[j] * grow[j];
                        dgamma[j] += grow[j] * xhat;
                        dbeta[j] += grow[j];
                        mean_dxhat += dxhat;
                        mean_dxhat_xhat += dxhat * xhat;
                    }
                    mean_dxhat = mean_dxhat / nf;
                    mean_dxhat_xhat = mean_dxhat_xhat / nf;
                    for j in 0..n {
                        let xhat = (row[j] - meanv) * inv;
                        let dxhat = gv.data()[j] * grow[j];
                        dx[i * n + j] = (dxhat - mean_dxhat - xhat * mean_dxhat_xhat) * inv;
                    }
                }
                if rx {
                    accum(grads, x.0, Tensor::from_vec(vec![m, n], dx).unwrap());
                }
                if rg {
                    accum(grads, gamma.0, Tensor::vector(dgamma));
                }
                if rb {
                    accum(grads, beta.0, Tensor::vector(dbeta));
                }
            }))
        } else {
            None
        };
        Ok(self.push(value, rx || rg || rb, back))
    }

    pub fn select_row(&mut self, x: Var, i: usize) -> Result<Var> {
        let value = tensor::select_row(self.value(x), i)?;
        let rx = self.requires_grad(x);
        let back: Option<BackFn<F>> = if rx {
            Some(Box::new(move |vals, g, grads| {
                let (m, n) = (vals[x.0].rows(), vals[x.0].cols());
                let mut dx = vec![F::zero(); m * n];
                dx[i * n..(i + 1) * n].copy_from_slice(g.data());
                accum(grads, x.0, Tensor::from_vec(vec![m, n], dx).unwrap());
            }))
        } else {
            None
        };
        Ok(self.push(value, rx, back))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let value = tensor::slice_cols(self.value(x), start, len)?;
        let rx = self.requires_grad(x);
        let back: Option<BackFn<F>> = if rx {
            Some(Box::new(move |vals, g, grads| {
                let (m, n) = (vals[x.0].rows(), vals[x.0].cols());
                let mut dx = vec![F::zero(); m * n];
                for i in 0..m {
                    for j in 0..len {
                        dx[i * n + start + j] = g.data()[i * len + j];
                    }
                }
                accum(grads, x.0, Tensor::from_vec(vec![m, n], dx).unwrap());
            }))
        } else {
            None
        };
        Ok(self.push(value, rx, back))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let refs: Vec<&Tensor<F>> = parts.iter().map(|v| self.value(*v)).collect();
        let value = tensor::concat_cols(&refs)?;
        let req = parts.iter().any(|v| self.requires_grad(*v));
        let parts_owned: Vec<Var> = parts.to_vec();
        let flags: Vec<bool> = parts.iter().map(|v| self.requires_grad(*v)).collect();
        let back: Option<BackFn<F>> = if req {
            Some(Box::new(move |vals, g, grads| {
                let mut start = 0;
                for (p, &need) in parts_owned.iter().zip(&flags) {
                    let w = vals[p.0].cols();
                    if need {
                        let piece = tensor::slice_cols(g, start, w).unwrap();
                        accum(grads, p.0, piece);
                    }
                    start += w;
                }
            }))
        } else {
            None
        };
        Ok(self.push(value, req, back))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let refs: Vec<&Tensor<F>> = parts.iter().map(|v| self.value(*v)).collect();
        let value = tensor::concat_rows(&refs)?;
        let req = parts.iter().any(|v| self.requires_grad(*v));
        let parts_owned: Vec<Var> = parts.to_vec();
        let flags: Vec<bool> = parts.iter().map(|v| self.requires_grad(*v)).collect();
        let back: Option<BackFn<F>> = if req {
            Some(Box::new(move |vals, g, grads| {
                let n = g.cols();
                let mut row = 0;
                for (p, &need) in parts_owned.iter().zip(&flags) {
                    let m = vals[p.0].rows();
                    if need {
                        let piece = Tensor::from_vec(
                            vec![m, n],
                            g.data()[row * n..(row + m) * n].to_vec(),
                        )
                        .unwrap();
                        accum(grads, p.0, piece);
                    }
                    row += m;
                }
            }))
        } else {
            None
        };
        Ok(self.push(value, req, back))
    }

    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let value = tensor::gather_rows(self.value(table), ids)?;
        let rt = self.requires_grad(table);
        let ids_owned: Vec<usize> = ids.to_vec();
        let back: Option<BackFn<F>> = if rt {
            Some(Box::new(move |vals, g, grads| {
                let (v, d) = (vals[table.0].rows(), vals[table.0].cols());
                let mut dt = vec![F::zero(); v * d];
                for (r, &id) in ids_owned.iter().enumerate() {
                    for j in 0..d {
                        dt[id * d + j] += g.data()[r * d + j];
                    }
                }
                accum(grads, table.0, Tensor::from_vec(vec![v, d], dt).unwrap());
            }))
        } else {
            None
        };
        Ok(self.push(value, rt, back))
    }
}

/// How gate noise is produced during a taped forward pass.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NoisePolicy {
    /// Fresh draws every request (one per gate vector per forward pass).
    Sample,
    /// First request per name samples and records; later requests replay.
    /// Used by finite-difference checks and fixed-batch descent runs.
    Frozen,
    /// All-zero noise; training gates coincide with evaluation gates.
    Zero,
}

/// Per-forward-pass state: the tape, parameter bindings for the optimizer,
/// and the gate-noise source.
pub struct ForwardCtx<F: Real> {
    pub tape: Tape<F>,
    bindings: Vec<(String, Var)>,
    policy: NoisePolicy,
    rng: ChaCha8Rng,
    frozen: HashMap<String, Vec<F>>,
}

impl<F: Real> ForwardCtx<F> {
    pub fn new(policy: NoisePolicy, noise_seed: u64) -> Self {
        ForwardCtx {
            tape: Tape::new(),
            bindings: Vec::new(),
            policy,
            rng: ChaCha8Rng::seed_from_u64(noise_seed),
            frozen: HashMap::new(),
        }
    }

    /// Frozen-noise context preloaded with recorded draws.
    pub fn with_frozen_noise(noise: HashMap<String, Vec<F>>, noise_seed: u64) -> Self {
        let mut ctx = Self::new(NoisePolicy::Frozen, noise_seed);
        ctx.frozen = noise;
        ctx
    }

    /// Noise draws recorded so far under the `Frozen` policy.
    pub fn frozen_noise(&self) -> &HashMap<String, Vec<F>> {
        &self.frozen
    }

    pub fn bind(&mut self, name: &str, var: Var) {
        self.bindings.push((name.to_string(), var));
    }

    pub fn bindings(&self) -> &[(String, Var)] {
        &self.bindings
    }

    pub fn var(&self, name: &str) -> Option<Var> {
        self.bindings
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, v)| *v)
    }

    /// Noise vector for one gate vector, `N(0, sigma^2)` per coordinate.
    pub fn gate_noise(&mut self, name: &str, len: usize, sigma: F) -> Vec<F> {
        match self.policy {
            NoisePolicy::Zero => vec![F::zero(); len],
            NoisePolicy::Sample => self.draw(len, sigma),
            NoisePolicy::Frozen => {
                if let Some(v) = self.frozen.get(name) {
                    debug_assert_eq!(v.len(), len);
                    return v.clone();
                }
                let v = self.draw(len, sigma);
                self.frozen.insert(name.to_string(), v.clone());
                v
            }
        }
    }

    fn draw(&mut self, len: usize, sigma: F) -> Vec<F> {
        (0..len)
            .map(|_| {
                let n: f64 = StandardNormal.sample(&mut self.rng);
                F::from_f64_lossy(n) * sigma
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    type T = Tape<f64>;

    fn finite_diff(f: &mut dyn FnMut(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
        let mut g = vec![0.0; x.len()];
        let mut xp = x.to_vec();
        for i in 0..x.len() {
            xp[i] = x[i] + h;
            let fp = f(&xp);
            xp[i] = x[i] - h;
            let fm = f(&xp);
            xp[i] = x[i];
            g[i] = (fp - fm) / (2.0 * h);
        }
        g
    }

    fn rel_err(a: f64, b: f64) -> f64 {
        (a - b).abs() / b.abs().max(1e-8)
    }

    fn seeded_vals(n: usize, seed: u64) -> Vec<f64> {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
    }

    #[test]
    fn backward_requires_scalar() {
        let mut t = T::new();
        let x = t.leaf(Tensor::vector(vec![1.0, 2.0]), true);
        assert!(t.backward(x).is_err());
    }

    #[test]
    fn sum_grad_is_ones() {
        let mut t = T::new();
        let x = t.leaf(Tensor::matrix(2, 3, vec![1.0; 6]).unwrap(), true);
        let l = t.sum(x);
        t.backward(l).unwrap();
        assert_eq!(t.grad(x).unwrap().data(), &[1.0; 6]);
    }

    #[test]
    fn square_sum_grad() {
        let mut t = T::new();
        let x = t.leaf(Tensor::vector(vec![1.0, 2.0]), true);
        let sq = t.mul(x, x).unwrap();
        let l = t.sum(sq);
        t.backward(l).unwrap();
        assert_eq!(t.grad(x).unwrap().data(), &[2.0, 4.0]);
    }

    #[test]
    fn repeated_backward_accumulates() {
        let mut t = T::new();
        let x = t.leaf(Tensor::vector(vec![3.0]), true);
        let l = t.sum(x);
        t.backward(l).unwrap();
        t.backward(l).unwrap();
        assert_eq!(t.grad(x).unwrap().data(), &[2.0]);
    }

    #[test]
    fn matmul_gradient_matches_finite_differences() {
        let a0 = seeded_vals(12, 1);
        let b0 = seeded_vals(8, 2);
        let mut f = |av: &[f64]| {
            let mut t = T::new();
            let a = t.leaf(Tensor::matrix(3, 4, av.to_vec()).unwrap(), true);
            let b = t.leaf(Tensor::matrix(4, 2, b0.clone()).unwrap(), false);
            let m = t.matmul(a, b).unwrap();
            let s = t.sum(m);
            t.value(s).item()
        };
        let fd = finite_diff(&mut f, &a0, 1e-5);
        let mut t = T::new();
        let a = t.leaf(Tensor::matrix(3, 4, a0.clone()).unwrap(), true);
        let b = t.leaf(Tensor::matrix(4, 2, b0.clone()).unwrap(), false);
        let m = t.matmul(a, b).unwrap();
        let s = t.sum(m);
        t.backward(s).unwrap();
        for (g, f) in t.grad(a).unwrap().data().iter().zip(&fd) {
            assert!(rel_err(*g, *f) <= 1e-6, "{g} vs {f}");
        }
    }

    #[test]
    fn scale_rows_cols_col_gate_gradient() {
        let w0 = seeded_vals(6, 3);
        let gc0 = vec![0.8, -0.3, 0.5];
        let mut f = |gc: &[f64]| {
            let mut t = T::new();
            let w = t.leaf(Tensor::matrix(2, 3, w0.clone()).unwrap(), false);
            let gr = t.leaf(Tensor::vector(vec![1.0, 1.0]), false);
            let gcv = t.leaf(Tensor::vector(gc.to_vec()), true);
            let m = t.scale_rows_cols(w, gr, gcv).unwrap();
            let s = t.sum(m);
            t.value(s).item()
        };
        let fd = finite_diff(&mut f, &gc0, 1e-5);
        let mut t = T::new();
        let w = t.leaf(Tensor::matrix(2, 3, w0.clone()).unwrap(), false);
        let gr = t.leaf(Tensor::vector(vec![1.0, 1.0]), false);
        let gcv = t.leaf(Tensor::vector(gc0.clone()), true);
        let m = t.scale_rows_cols(w, gr, gcv).unwrap();
        let s = t.sum(m);
        t.backward(s).unwrap();
        // frozen w receives no gradient
        assert!(t.grad(w).is_none());
        for (g, f) in t.grad(gcv).unwrap().data().iter().zip(&fd) {
            assert!(rel_err(*g, *f) <= 1e-6, "{g} vs {f}");
        }
    }

    #[test]
    fn clamp01_subgradient() {
        let mut t = T::new();
        let x = t.leaf(Tensor::vector(vec![1.2, -0.5, 0.5, 0.0, 1.0]), true);
        let y = t.clamp01(x);
        assert_eq!(t.value(y).data(), &[1.0, 0.0, 0.5, 0.0, 1.0]);
        let s = t.sum(y);
        t.backward(s).unwrap();
        assert_eq!(t.grad(x).unwrap().data(), &[0.0, 0.0, 1.0, 0.0, 0.0]);
    }

    #[test]
    fn gelu_gradient_matches_finite_differences() {
        for &x0 in &[-2.0, -0.3, 1.7] {
            let mut f = |xv: &[f64]| {
                let mut t = T::new();
                let x = t.leaf(Tensor::vector(xv.to_vec()), true);
                let y = t.gelu(x);
                let s = t.sum(y);
                t.value(s).item()
            };
            let fd = finite_diff(&mut f, &[x0], 1e-5)[0];
            let mut t = T::new();
            let x = t.leaf(Tensor::vector(vec![x0]), true);
            let y = t.gelu(x);
            let s = t.sum(y);
            t.backward(s).unwrap();
            let g = t.grad(x).unwrap().data()[0];
            assert!(rel_err(g, fd) <= 1e-6, "x={x0}: {g} vs {fd}");
        }
    }

    #[test]
    fn erf_values_and_gradient() {
        let mut t = T::new();
        let x = t.leaf(Tensor::vector(vec![0.0, 1.0, -1.0]), true);
        let y = t.erf_op(x);
        assert_eq!(t.value(y).data()[0], 0.0);
        assert!((t.value(y).data()[1] - 0.8427007929497149).abs() < 1e-12);
        assert_eq!(t.value(y).data()[1], -t.value(y).data()[2]);
        let s = t.sum(y);
        t.backward(s).unwrap();
        let expect = 2.0 / std::f64::consts::PI.sqrt();
        assert!((t.grad(x).unwrap().data()[0] - expect).abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_ln2_and_grad() {
        let mut t = T::new();
        let logits = t.leaf(Tensor::matrix(1, 2, vec![0.0, 0.0]).unwrap(), true);
        let l = t.cross_entropy_mean(logits, &[0]).unwrap();
        assert!((t.value(l).item() - std::f64::consts::LN_2).abs() < 1e-15);
        t.backward(l).unwrap();
        let g = t.grad(logits).unwrap();
        assert!((g.data()[0] + 0.5).abs() < 1e-15);
        assert!((g.data()[1] - 0.5).abs() < 1e-15);
    }

    #[test]
    fn cross_entropy_rejects_bad_input() {
        let mut t = T::new();
        let logits = t.leaf(Tensor::matrix(1, 2, vec![f64::NAN, 0.0]).unwrap(), true);
        assert!(t.cross_entropy_mean(logits, &[0]).is_err());
        let logits = t.leaf(Tensor::matrix(1, 2, vec![0.0, 0.0]).unwrap(), true);
        assert!(t.cross_entropy_mean(logits, &[5]).is_err());
    }

    #[test]
    fn chained_composite_matches_finite_differences() {
        // scale_rows_cols feeding a matmul, gradient wrt the column gates
        let w0 = seeded_vals(12, 7);
        let x0 = seeded_vals(8, 8);
        let gc0 = vec![0.9, 0.2, -0.4, 0.6];
        let run = |gc: &[f64]| -> (f64, Option<Vec<f64>>, bool) {
            let mut t = T::new();
            let w = t.leaf(Tensor::matrix(3, 4, w0.clone()).unwrap(), false);
            let gr = t.leaf(Tensor::vector(vec![0.5, 1.0, 0.7]), false);
            let gcv = t.leaf(Tensor::vector(gc.to_vec()), true);
            let m = t.scale_rows_cols(w, gr, gcv).unwrap();
            let x = t.leaf(Tensor::matrix(2, 4, x0.clone()).unwrap(), false);
            let h = t.matmul_nt(x, m).unwrap();
            let s = t.sum(h);
            t.backward(s).unwrap();
            let g = t.grad(gcv).map(|g| g.data().to_vec());
            (t.value(s).item(), g, true)
        };
        let mut f = |gc: &[f64]| run(gc).0;
        let fd = finite_diff(&mut f, &gc0, 1e-5);
        let (_, g, _) = run(&gc0);
        for (g, f) in g.unwrap().iter().zip(&fd) {
            assert!(rel_err(*g, *f) <= 1e-6, "{g} vs {f}");
        }
    }

    #[test]
    fn layer_norm_gradient_matches_finite_differences() {
        let x0 = seeded_vals(8, 11);
        let gm0 = vec![1.1, 0.9, 1.0, 0.8];
        let bt0 = vec![0.1, -0.2, 0.0, 0.3];
        // check wrt x, gamma, beta through a nonlinear readout
        let eval = |x: &[f64], gm: &[f64], bt: &[f64]| -> f64 {
            let mut t = T::new();
            let xv = t.leaf(Tensor::matrix(2, 4, x.to_vec()).unwrap(), true);
            let g = t.leaf(Tensor::vector(gm.to_vec()), true);
            let b = t.leaf(Tensor::vector(bt.to_vec()), true);
            let y = t.layer_norm(xv, g, b, 1e-5).unwrap();
            let y2 = t.mul(y, y).unwrap();
            let s = t.sum(y2);
            t.value(s).item()
        };
        let mut fx = |x: &[f64]| eval(x, &gm0, &bt0);
        let fd_x = finite_diff(&mut fx, &x0, 1e-5);
        let mut fg = |g: &[f64]| eval(&x0, g, &bt0);
        let fd_g = finite_diff(&mut fg, &gm0, 1e-5);
        let mut t = T::new();
        let xv = t.leaf(Tensor::matrix(2, 4, x0.clone()).unwrap(), true);
        let g = t.leaf(Tensor::vector(gm0.clone()), true);
        let b = t.leaf(Tensor::vector(bt0.clone()), true);
        let y = t.layer_norm(xv, g, b, 1e-5).unwrap();
        let y2 = t.mul(y, y).unwrap();
        let s = t.sum(y2);
        t.backward(s).unwrap();
        for (a, f) in t.grad(xv).unwrap().data().iter().zip(&fd_x) {
            assert!(rel_err(*a, *f) <= 1e-5, "{a} vs {f}");
        }
        for (a, f) in t.grad(g).unwrap().data().iter().zip(&fd_g) {
            assert!(rel_err(*a, *f) <= 1e-5, "{a} vs {f}");
        }
    }

    #[test]
    fn softmax_gradient_matches_finite_differences() {
        let x0 = seeded_vals(6, 21);
        let eval = |x: &[f64]| -> f64 {
            let mut t = T::new();
            let xv = t.leaf(Tensor::matrix(2, 3, x.to_vec()).unwrap(), true);
            let y = t.softmax_rows(xv).unwrap();
            let y2 = t.mul(y, y).unwrap();
            let s = t.sum(y2);
            t.value(s).item()
        };
        let mut f = |x: &[f64]| eval(x);
        let fd = finite_diff(&mut f, &x0, 1e-5);
        let mut t = T::new();
        let xv = t.leaf(Tensor::matrix(2, 3, x0.clone()).unwrap(), true);
        let y = t.softmax_rows(xv).unwrap();
        let y2 = t.mul(y, y).unwrap();
        let s = t.sum(y2);
        t.backward(s).unwrap();
        for (a, f) in t.grad(xv).unwrap().data().iter().zip(&fd) {
            assert!(rel_err(*a, *f) <= 1e-6, "{a} vs {f}");
        }
    }

    #[test]
    fn tape_replay_is_deterministic() {
        let run = || {
            let mut ctx = ForwardCtx::<f64>::new(NoisePolicy::Sample, 99);
            let noise = ctx.gate_noise("g", 4, 0.5);
            let mut t = T::new();
            let x = t.leaf(Tensor::vector(noise), true);
            let y = t.gelu(x);
            let s = t.sum(y);
            t.backward(s).unwrap();
            (t.value(s).item(), t.grad(x).unwrap().data().to_vec())
        };
        let (a1, g1) = run();
        let (a2, g2) = run();
        assert_eq!(a1, a2);
        assert_eq!(g1, g2);
    }

    #[test]
    fn frozen_noise_replays_by_name() {
        let mut ctx = ForwardCtx::<f64>::new(NoisePolicy::Frozen, 3);
        let a = ctx.gate_noise("layer.rows", 8, 0.5);
        let b = ctx.gate_noise("layer.rows", 8, 0.5);
        assert_eq!(a, b);
        let c = ctx.gate_noise("layer.cols", 8, 0.5);
        assert_ne!(a, c);
    }
}
