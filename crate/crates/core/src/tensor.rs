//! Dense row-major tensors and the deterministic math kernels shared by the
//! autodiff forward pass and the no-tape evaluation path.
//!
//! Every kernel here uses a fixed summation order (ascending inner index).
//! The prune-equivalence guarantees depend on that: a compacted multiply that
//! skips exactly-zero terms must reproduce the dense result bit for bit.

use crate::num::Real;
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<F> {
    shape: Vec<usize>,
    data: Vec<F>,
}

impl<F: Real> Tensor<F> {
    pub fn from_vec(shape: Vec<usize>, data: Vec<F>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if shape.iter().any(|&d| d == 0) {
            return Err(Error::Shape(format!("zero dimension in shape {shape:?}")));
        }
        if n != data.len() {
            return Err(Error::Shape(format!(
                "shape {shape:?} wants {n} elements, got {}",
                data.len()
            )));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Tensor { shape, data: vec![F::zero(); n] }
    }

    pub fn full(shape: Vec<usize>, v: F) -> Self {
        let n = shape.iter().product();
        Tensor { shape, data: vec![v; n] }
    }

    pub fn scalar(v: F) -> Self {
        Tensor { shape: vec![1], data: vec![v] }
    }

    pub fn vector(data: Vec<F>) -> Self {
        Tensor { shape: vec![data.len()], data }
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<F>) -> Result<Self> {
        Tensor::from_vec(vec![rows, cols], data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[F] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [F] {
        &mut self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    /// Scalar value of a one-element tensor.
    pub fn item(&self) -> F {
        debug_assert_eq!(self.data.len(), 1);
        self.data[0]
    }

    /// Number of rows when viewed as a matrix (1 for vectors).
    pub fn rows(&self) -> usize {
        if self.shape.len() == 2 {
            self.shape[0]
        } else {
            1
        }
    }

    /// Number of columns when viewed as a matrix (the length for vectors).
    pub fn cols(&self) -> usize {
        *self.shape.last().unwrap_or(&0)
    }

    pub fn at(&self, r: usize, c: usize) -> F {
        self.data[r * self.cols() + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: F) {
        let cols = self.cols();
        self.data[r * cols + c] = v;
    }

    pub fn map(&self, f: impl Fn(F) -> F) -> Tensor<F> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn transpose(&self) -> Tensor<F> {
        let (m, n) = (self.rows(), self.cols());
        let mut out = vec![F::zero(); m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = self.data[i * n + j];
            }
        }
        Tensor { shape: vec![n, m], data: out }
    }

    pub fn has_non_finite(&self) -> bool {
        self.data.iter().any(|x| !x.is_finite())
    }
}

fn check_same_shape<F: Real>(a: &Tensor<F>, b: &Tensor<F>, op: &str) -> Result<()> {
    if a.shape != b.shape {
        return Err(Error::Shape(format!(
            "{op}: shape {:?} vs {:?}",
            a.shape, b.shape
        )));
    }
    Ok(())
}

/// Elementwise sum.
pub fn add<F: Real>(a: &Tensor<F>, b: &Tensor<F>) -> Result<Tensor<F>> {
    check_same_shape(a, b, "add")?;
    Ok(Tensor {
        shape: a.shape.clone(),
        data: a.data.iter().zip(&b.data).map(|(&x, &y)| x + y).collect(),
    })
}

/// Elementwise product.
pub fn mul<F: Real>(a: &Tensor<F>, b: &Tensor<F>) -> Result<Tensor<F>> {
    check_same_shape(a, b, "mul")?;
    Ok(Tensor {
        shape: a.shape.clone(),
        data: a.data.iter().zip(&b.data).map(|(&x, &y)| x * y).collect(),
    })
}

/// Elementwise `scale * x + shift`.
pub fn affine<F: Real>(x: &Tensor<F>, scale: F, shift: F) -> Tensor<F> {
    x.map(|v| scale * v + shift)
}

/// `a[m x k] * b[k x n]`, ascending-`k` accumulation.
pub fn matmul<F: Real>(a: &Tensor<F>, b: &Tensor<F>) -> Result<Tensor<F>> {
    let (m, k) = (a.rows(), a.cols());
    let (kb, n) = (b.rows(), b.cols());
    if k != kb {
        return Err(Error::Shape(format!(
            "matmul: {:?} incompatible with {:?}",
            a.shape, b.shape
        )));
    }
    let mut out = vec![F::zero(); m * n];
    for i in 0..m {
        for t in 0..k {
            let av = a.data[i * k + t];
            let brow = &b.data[t * n..(t + 1) * n];
            let orow = &mut out[i * n..(i + 1) * n];
            for j in 0..n {
                orow[j] += av * brow[j];
            }
        }
    }
    Ok(Tensor { shape: vec![m, n], data: out })
}

/// `a[m x k] * b[n x k]^T`, ascending-`k` accumulation.
pub fn matmul_nt<F: Real>(a: &Tensor<F>, b: &Tensor<F>) -> Result<Tensor<F>> {
    let (m, k) = (a.rows(), a.cols());
    let (n, kb) = (b.rows(), b.cols());
    if k != kb {
        return Err(Error::Shape(format!(
            "matmul_nt: {:?} incompatible with {:?}",
            a.shape, b.shape
        )));
    }
    let mut out = vec![F::zero(); m * n];
    for i in 0..m {
        let arow = &a.data[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b.data[j * k..(j + 1) * k];
            let mut s = F::zero();
            for t in 0..k {
                s += arow[t] * brow[t];
            }
            out[i * n + j] = s;
        }
    }
    Ok(Tensor { shape: vec![m, n], data: out })
}

/// `a[k x m]^T * b[k x n]`, ascending-`k` accumulation.
pub fn matmul_tn<F: Real>(a: &Tensor<F>, b: &Tensor<F>) -> Result<Tensor<F>> {
    let (k, m) = (a.rows(), a.cols());
    let (kb, n) = (b.rows(), b.cols());
    if k != kb {
        return Err(Error::Shape(format!(
            "matmul_tn: {:?} incompatible with {:?}",
            a.shape, b.shape
        )));
    }
    let mut out = vec![F::zero(); m * n];
    for t in 0..k {
        let arow = &a.data[t * m..(t + 1) * m];
        let brow = &b.data[t * n..(t + 1) * n];
        for i in 0..m {
            let av = arow[i];
            let orow = &mut out[i * n..(i + 1) * n];
            for j in 0..n {
                orow[j] += av * brow[j];
            }
        }
    }
    Ok(Tensor { shape: vec![m, n], data: out })
}

/// `out[i,j] = (gr[i] * w[i,j]) * gc[j]`.
pub fn scale_rows_cols<F: Real>(w: &Tensor<F>, gr: &Tensor<F>, gc: &Tensor<F>) -> Result<Tensor<F>> {
    let (k, d) = (w.rows(), w.cols());
    if gr.len() != k || gc.len() != d {
        return Err(Error::Shape(format!(
            "scale_rows_cols: w {:?} with row gates len {} and col gates len {}",
            w.shape,
            gr.len(),
            gc.len()
        )));
    }
    let mut out = vec![F::zero(); k * d];
    for i in 0..k {
        let g = gr.data[i];
        for j in 0..d {
            out[i * d + j] = (g * w.data[i * d + j]) * gc.data[j];
        }
    }
    Ok(Tensor { shape: vec![k, d], data: out })
}

/// Elementwise clip to `[0, 1]`.
pub fn clamp01<F: Real>(x: &Tensor<F>) -> Tensor<F> {
    x.map(|v| {
        if v < F::zero() {
            F::zero()
        } else if v > F::one() {
            F::one()
        } else {
            v
        }
    })
}

/// Gaussian CDF at `x`.
#[inline]
pub fn phi<F: Real>(x: F) -> F {
    let half = F::from_f64_lossy(0.5);
    let inv_sqrt2 = F::from_f64_lossy(std::f64::consts::FRAC_1_SQRT_2);
    half * (F::one() + (x * inv_sqrt2).erf())
}

/// Exact Gaussian-CDF gelu: `x * Phi(x)`.
#[inline]
pub fn gelu_scalar<F: Real>(x: F) -> F {
    x * phi(x)
}

pub fn gelu<F: Real>(x: &Tensor<F>) -> Tensor<F> {
    x.map(gelu_scalar)
}

/// Numerically stabilized row softmax.
pub fn softmax_rows<F: Real>(x: &Tensor<F>) -> Result<Tensor<F>> {
    let (m, n) = (x.rows(), x.cols());
    if n == 0 {
        return Err(Error::Numeric("softmax over an empty row".into()));
    }
    let mut out = vec![F::zero(); m * n];
    for i in 0..m {
        let row = &x.data[i * n..(i + 1) * n];
        let mut mx = row[0];
        for &v in row {
            if !v.is_finite() && v > F::zero() {
                return Err(Error::Numeric("non-finite softmax input".into()));
            }
            if v > mx {
                mx = v;
            }
        }
        let orow = &mut out[i * n..(i + 1) * n];
        let mut z = F::zero();
        for j in 0..n {
            let e = (row[j] - mx).exp();
            orow[j] = e;
            z += e;
        }
        for j in 0..n {
            orow[j] = orow[j] / z;
        }
    }
    Ok(Tensor { shape: vec![m, n], data: out })
}

/// Per-row layer normalization with trainable scale/shift.
pub fn layer_norm<F: Real>(
    x: &Tensor<F>,
    gamma: &Tensor<F>,
    beta: &Tensor<F>,
    eps: F,
) -> Result<Tensor<F>> {
    let (m, n) = (x.rows(), x.cols());
    if gamma.len() != n || beta.len() != n {
        return Err(Error::Shape(format!(
            "layer_norm: x {:?}, gamma len {}, beta len {}",
            x.shape,
            gamma.len(),
            beta.len()
        )));
    }
    let nf = F::from_f64_lossy(n as f64);
    let mut out = vec![F::zero(); m * n];
    for i in 0..m {
        let row = &x.data[i * n..(i + 1) * n];
        let mut mean = F::zero();
        for &v in row {
            mean += v;
        }
        mean = mean / nf;
        let mut var = F::zero();
        for &v in row {
            let c = v - mean;
            var += c * c;
        }
        var = var / nf;
        let inv = F::one() / (var + eps).sqrt();
        let orow = &mut out[i * n..(i + 1) * n];
        for j in 0..n {
            orow[j] = gamma.data[j] * ((row[j] - mean) * inv) + beta.data[j];
        }
    }
    Ok(Tensor { shape: vec![m, n], data: out })
}

/// Broadcast-add a length-`d` vector to every row of `x[n x d]`.
pub fn add_bias<F: Real>(x: &Tensor<F>, b: &Tensor<F>) -> Result<Tensor<F>> {
    let (m, n) = (x.rows(), x.cols());
    if b.len() != n {
        return Err(Error::Shape(format!(
            "add_bias: x {:?} vs bias len {}",
            x.shape,
            b.len()
        )));
    }
    let mut out = x.data.clone();
    for i in 0..m {
        for j in 0..n {
            out[i * n + j] += b.data[j];
        }
    }
    Ok(Tensor { shape: x.shape.clone(), data: out })
}

/// Rows of `table` at `ids`.
pub fn gather_rows<F: Real>(table: &Tensor<F>, ids: &[usize]) -> Result<Tensor<F>> {
    let (v, d) = (table.rows(), table.cols());
    let mut out = Vec::with_capacity(ids.len() * d);
    for &id in ids {
        if id >= v {
            return Err(Error::Input(format!("row id {id} out of range 0..{v}")));
        }
        out.extend_from_slice(&table.data[id * d..(id + 1) * d]);
    }
    Ok(Tensor { shape: vec![ids.len(), d], data: out })
}

pub fn select_row<F: Real>(x: &Tensor<F>, i: usize) -> Result<Tensor<F>> {
    let (m, n) = (x.rows(), x.cols());
    if i >= m {
        return Err(Error::Input(format!("row {i} out of range 0..{m}")));
    }
    Ok(Tensor {
        shape: vec![1, n],
        data: x.data[i * n..(i + 1) * n].to_vec(),
    })
}

pub fn slice_cols<F: Real>(x: &Tensor<F>, start: usize, len: usize) -> Result<Tensor<F>> {
    let (m, n) = (x.rows(), x.cols());
    if start + len > n {
        return Err(Error::Shape(format!(
            "slice_cols: {start}..{} out of {n} columns",
            start + len
        )));
    }
    let mut out = Vec::with_capacity(m * len);
    for i in 0..m {
        out.extend_from_slice(&x.data[i * n + start..i * n + start + len]);
    }
    Ok(Tensor { shape: vec![m, len], data: out })
}

pub fn concat_cols<F: Real>(parts: &[&Tensor<F>]) -> Result<Tensor<F>> {
    if parts.is_empty() {
        return Err(Error::Shape("concat_cols of nothing".into()));
    }
    let m = parts[0].rows();
    if parts.iter().any(|p| p.rows() != m) {
        return Err(Error::Shape("concat_cols: row counts differ".into()));
    }
    let total: usize = parts.iter().map(|p| p.cols()).sum();
    let mut out = Vec::with_capacity(m * total);
    for i in 0..m {
        for p in parts {
            let n = p.cols();
            out.extend_from_slice(&p.data[i * n..(i + 1) * n]);
        }
    }
    Ok(Tensor { shape: vec![m, total], data: out })
}

pub fn concat_rows<F: Real>(parts: &[&Tensor<F>]) -> Result<Tensor<F>> {
    if parts.is_empty() {
        return Err(Error::Shape("concat_rows of nothing".into()));
    }
    let n = parts[0].cols();
    if parts.iter().any(|p| p.cols() != n) {
        return Err(Error::Shape("concat_rows: column counts differ".into()));
    }
    let m: usize = parts.iter().map(|p| p.rows()).sum();
    let mut out = Vec::with_capacity(m * n);
    for p in parts {
        out.extend_from_slice(&p.data);
    }
    Ok(Tensor { shape: vec![m, n], data: out })
}

pub fn sum<F: Real>(x: &Tensor<F>) -> F {
    let mut s = F::zero();
    for &v in &x.data {
        s += v;
    }
    s
}

pub fn mean<F: Real>(x: &Tensor<F>) -> F {
    sum(x) / F::from_f64_lossy(x.len() as f64)
}
