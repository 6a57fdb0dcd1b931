//! Adapter layers over a frozen base matrix: row/column stochastic gates,
//! optional low-rank updates, and fuse-then-prune export.
//!
//! The forward map is `h = diag(omega_r) * (W0 + scale * W_B W_A) * diag(omega_c) * x`
//! applied batched as `X * M^T`. Fusing materializes the deterministic gated
//! matrix and physically removes hard-masked rows and columns.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::autodiff::{ForwardCtx, Var};
use crate::gates::GateVector;
use crate::num::Real;
use crate::tensor::{self, Tensor};
use crate::{Error, Result};

/// Conventional transformer init scale for `W_A`.
pub const LORA_INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, PartialEq)]
pub struct LoraFactors<F> {
    /// `k x r`, zero-initialized so the update is zero at step 0.
    pub w_b: Tensor<F>,
    /// `r x d`, Gaussian-initialized.
    pub w_a: Tensor<F>,
    pub rank: usize,
    pub scale: F,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GatePair<F> {
    pub rows: GateVector<F>,
    pub cols: GateVector<F>,
}

/// A linear map with a frozen `k x d` base matrix and any combination of
/// stochastic gates, low-rank factors, and (for the full-finetune baseline)
/// a trainable base.
#[derive(Debug, Clone, PartialEq)]
pub struct AdapterLinear<F> {
    pub w0: Tensor<F>,
    pub bias: Option<Tensor<F>>,
    pub gates: Option<GatePair<F>>,
    pub lora: Option<LoraFactors<F>>,
    pub train_base: bool,
}

impl<F: Real> AdapterLinear<F> {
    pub fn frozen(w0: Tensor<F>, bias: Option<Tensor<F>>) -> Result<Self> {
        if let Some(b) = &bias {
            if b.len() != w0.rows() {
                return Err(Error::Shape(format!(
                    "bias length {} vs {} output rows",
                    b.len(),
                    w0.rows()
                )));
            }
        }
        Ok(AdapterLinear { w0, bias, gates: None, lora: None, train_base: false })
    }

    pub fn gated(mut self) -> Self {
        self.gates = Some(GatePair {
            rows: GateVector::new(self.w0.rows()),
            cols: GateVector::new(self.w0.cols()),
        });
        self
    }

    pub fn with_lora(mut self, rank: usize, scale: F, rng: &mut ChaCha8Rng) -> Result<Self> {
        let (k, d) = (self.w0.rows(), self.w0.cols());
        if rank == 0 || rank >= k.min(d) {
            return Err(Error::Config(format!(
                "lora rank {rank} outside 1..{}",
                k.min(d)
            )));
        }
        let std = F::from_f64_lossy(LORA_INIT_STD);
        let w_a = Tensor::from_vec(
            vec![rank, d],
            (0..rank * d)
                .map(|_| {
                    let n: f64 = StandardNormal.sample(rng);
                    F::from_f64_lossy(n) * std
                })
                .collect(),
        )?;
        self.lora = Some(LoraFactors {
            w_b: Tensor::zeros(vec![k, rank]),
            w_a,
            rank,
            scale,
        });
        Ok(self)
    }

    pub fn trainable_base(mut self) -> Self {
        self.train_base = true;
        self
    }

    pub fn out_dim(&self) -> usize {
        self.w0.rows()
    }

    pub fn in_dim(&self) -> usize {
        self.w0.cols()
    }

    fn check_input(&self, cols: usize) -> Result<()> {
        if cols != self.in_dim() {
            return Err(Error::Shape(format!(
                "input width {cols} vs layer input dim {}",
                self.in_dim()
            )));
        }
        Ok(())
    }

    /// Register this layer's parameters on the context's tape, sampling gate
    /// noise, and return the handle used to apply it. Called once per forward
    /// pass (batch); every sequence in the batch shares the same gate draw.
    pub fn register_train(&self, ctx: &mut ForwardCtx<F>, name: &str) -> Result<RegisteredLinear> {
        let w0v = ctx.tape.leaf(self.w0.clone(), self.train_base);
        if self.train_base {
            ctx.bind(&format!("{name}.w0"), w0v);
        }
        let wv = if let Some(lora) = &self.lora {
            let wb = ctx.tape.leaf(lora.w_b.clone(), true);
            ctx.bind(&format!("{name}.w_b"), wb);
            let wa = ctx.tape.leaf(lora.w_a.clone(), true);
            ctx.bind(&format!("{name}.w_a"), wa);
            let delta = ctx.tape.matmul(wb, wa)?;
            let scaled = ctx.tape.affine(delta, lora.scale, F::zero());
            ctx.tape.add(w0v, scaled)?
        } else {
            w0v
        };
        let (weight, row_gates) = if let Some(gp) = &self.gates {
            let mu_r = ctx.tape.leaf(gp.rows.mu().clone(), true);
            ctx.bind(&format!("{name}.gate_rows.mu"), mu_r);
            let mu_c = ctx.tape.leaf(gp.cols.mu().clone(), true);
            ctx.bind(&format!("{name}.gate_cols.mu"), mu_c);
            let noise_r = ctx.gate_noise(&format!("{name}.gate_rows"), gp.rows.len(), gp.rows.sigma());
            let noise_c = ctx.gate_noise(&format!("{name}.gate_cols"), gp.cols.len(), gp.cols.sigma());
            let omega_r = crate::gates::sample_train_gates_var(&mut ctx.tape, mu_r, &noise_r)?;
            let omega_c = crate::gates::sample_train_gates_var(&mut ctx.tape, mu_c, &noise_c)?;
            let m = ctx.tape.scale_rows_cols(wv, omega_r, omega_c)?;
            (m, Some(omega_r))
        } else {
            (wv, None)
        };
        let bias = match &self.bias {
            Some(b) => {
                let bv = ctx.tape.constant(b.clone());
                Some(match row_gates {
                    // row gates also gate the bias of the killed output unit
                    Some(omega_r) => ctx.tape.mul(bv, omega_r)?,
                    None => bv,
                })
            }
            None => None,
        };
        Ok(RegisteredLinear { weight, bias, in_dim: self.in_dim() })
    }

    /// One full training-mode forward for input `x` already on the tape.
    pub fn forward_train(&self, ctx: &mut ForwardCtx<F>, name: &str, x: Var) -> Result<Var> {
        self.check_input(ctx.tape.value(x).cols())?;
        let reg = self.register_train(ctx, name)?;
        reg.apply(ctx, x)
    }

    /// The deterministic fused matrix `diag(g_r) (W0 + scale W_B W_A) diag(g_c)`
    /// with evaluation gates.
    pub fn fused_matrix(&self) -> Tensor<F> {
        let w = match &self.lora {
            Some(lora) => {
                let delta = tensor::matmul(&lora.w_b, &lora.w_a).unwrap();
                let scaled = tensor::affine(&delta, lora.scale, F::zero());
                tensor::add(&self.w0, &scaled).unwrap()
            }
            None => self.w0.clone(),
        };
        match &self.gates {
            Some(gp) => {
                tensor::scale_rows_cols(&w, &gp.rows.eval_gates(), &gp.cols.eval_gates()).unwrap()
            }
            None => w,
        }
    }

    /// Effective bias under evaluation gates.
    pub fn eval_bias(&self) -> Option<Tensor<F>> {
        self.bias.as_ref().map(|b| match &self.gates {
            Some(gp) => tensor::mul(b, &gp.rows.eval_gates()).unwrap(),
            None => b.clone(),
        })
    }

    /// Deterministic forward pass; no tape, no noise.
    pub fn forward_eval(&self, x: &Tensor<F>) -> Result<Tensor<F>> {
        self.check_input(x.cols())?;
        let out = tensor::matmul_nt(x, &self.fused_matrix())?;
        match self.eval_bias() {
            Some(b) => tensor::add_bias(&out, &b),
            None => Ok(out),
        }
    }

    /// Fuse and compact with explicit keep masks.
    pub fn fuse_with_masks(
        &self,
        name: &str,
        row_mask: &[bool],
        col_mask: &[bool],
    ) -> Result<PrunedLinear<F>> {
        let (k, d) = (self.w0.rows(), self.w0.cols());
        if row_mask.len() != k || col_mask.len() != d {
            return Err(Error::Shape(format!(
                "fuse masks {}x{} vs matrix {k}x{d}",
                row_mask.len(),
                col_mask.len()
            )));
        }
        let kept_rows: Vec<usize> = (0..k).filter(|&i| row_mask[i]).collect();
        let kept_cols: Vec<usize> = (0..d).filter(|&j| col_mask[j]).collect();
        if kept_rows.is_empty() || kept_cols.is_empty() {
            return Err(Error::Degenerate { layer: name.to_string() });
        }
        let fused = self.fused_matrix();
        let mut data = Vec::with_capacity(kept_rows.len() * kept_cols.len());
        for &i in &kept_rows {
            for &j in &kept_cols {
                data.push(fused.at(i, j));
            }
        }
        let bias_compact = self.eval_bias().map(|b| {
            Tensor::vector(kept_rows.iter().map(|&i| b.data()[i]).collect())
        });
        Ok(PrunedLinear {
            w_compact: Tensor::from_vec(vec![kept_rows.len(), kept_cols.len()], data)?,
            kept_rows,
            kept_cols,
            original_shape: (k, d),
            bias_compact,
        })
    }

    /// Fuse using the gates' hard masks at `threshold`. Ungated layers keep
    /// every row and column.
    pub fn fuse(&self, name: &str, threshold: F) -> Result<PrunedLinear<F>> {
        let (k, d) = (self.w0.rows(), self.w0.cols());
        let (rm, cm) = match &self.gates {
            Some(gp) => (gp.rows.hard_mask(threshold)?, gp.cols.hard_mask(threshold)?),
            None => (vec![true; k], vec![true; d]),
        };
        self.fuse_with_masks(name, &rm, &cm)
    }
}

/// A layer registered on a tape for the current forward pass.
pub struct RegisteredLinear {
    weight: Var,
    bias: Option<Var>,
    in_dim: usize,
}

impl RegisteredLinear {
    pub fn apply<F: Real>(&self, ctx: &mut ForwardCtx<F>, x: Var) -> Result<Var> {
        if ctx.tape.value(x).cols() != self.in_dim {
            return Err(Error::Shape(format!(
                "input width {} vs layer input dim {}",
                ctx.tape.value(x).cols(),
                self.in_dim
            )));
        }
        let out = ctx.tape.matmul_nt(x, self.weight)?;
        match self.bias {
            Some(b) => ctx.tape.add_bias(out, b),
            None => Ok(out),
        }
    }
}

/// Physically compacted fused layer plus the index maps back into the
/// original coordinates.
#[derive(Debug, Clone, PartialEq)]
pub struct PrunedLinear<F> {
    pub w_compact: Tensor<F>,
    pub kept_rows: Vec<usize>,
    pub kept_cols: Vec<usize>,
    pub original_shape: (usize, usize),
    pub bias_compact: Option<Tensor<F>>,
}

impl<F: Real> PrunedLinear<F> {
    pub fn removed_params(&self) -> usize {
        let (k, d) = self.original_shape;
        let weight_removed = k * d - self.kept_rows.len() * self.kept_cols.len();
        let bias_removed = if self.bias_compact.is_some() {
            k - self.kept_rows.len()
        } else {
            0
        };
        weight_removed + bias_removed
    }

    /// Gather the kept input columns, multiply by the compact matrix, and
    /// scatter the result back to the original output width with zeros at
    /// dropped rows.
    pub fn forward(&self, x: &Tensor<F>) -> Result<Tensor<F>> {
        let (k, d) = self.original_shape;
        if x.cols() != d {
            return Err(Error::Shape(format!(
                "input width {} vs original input dim {d}",
                x.cols()
            )));
        }
        let n = x.rows();
        let dk = self.kept_cols.len();
        let mut gathered = Vec::with_capacity(n * dk);
        for i in 0..n {
            for &j in &self.kept_cols {
                gathered.push(x.at(i, j));
            }
        }
        let xg = Tensor::from_vec(vec![n, dk], gathered)?;
        let mut compact_out = tensor::matmul_nt(&xg, &self.w_compact)?;
        if let Some(b) = &self.bias_compact {
            compact_out = tensor::add_bias(&compact_out, b)?;
        }
        let mut out = vec![F::zero(); n * k];
        for i in 0..n {
            for (r, &row) in self.kept_rows.iter().enumerate() {
                out[i * k + row] = compact_out.at(i, r);
            }
        }
        Tensor::from_vec(vec![n, k], out)
    }
}

/// Seeded Gaussian matrix, the stand-in for pretrained weights.
pub fn random_matrix<F: Real>(rows: usize, cols: usize, std: f64, rng: &mut ChaCha8Rng) -> Tensor<F> {
    Tensor::from_vec(
        vec![rows, cols],
        (0..rows * cols)
            .map(|_| {
                let n: f64 = StandardNormal.sample(rng);
                F::from_f64_lossy(n * std)
            })
            .collect(),
    )
    .unwrap()
}

/// Seeded uniform pick of `count` indices out of `0..n`, sorted.
pub fn random_kept_indices(n: usize, count: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    // Fisher-Yates prefix shuffle
    for i in 0..count.min(n) {
        let j = rng.gen_range(i..n);
        idx.swap(i, j);
    }
    let mut kept = idx[..count.min(n)].to_vec();
    kept.sort_unstable();
    kept
}
