//! Stochastic gate vectors: Gaussian-relaxed Bernoulli gates over weight
//! rows/columns, their analytic expected open fraction, and the sparsity
//! penalty driving them toward a target sparsity ratio.
//!
//! A gate is `omega = clamp01(0.5 + mu + eps)` with `eps ~ N(0, sigma^2)`
//! during training and `eps = 0` at evaluation. `sigma` is fixed for a run.

use std::io::Write;

use crate::autodiff::{Tape, Var};
use crate::num::Real;
use crate::tensor::{self, Tensor};
use crate::{Error, Result};

pub const DEFAULT_SIGMA: f64 = 0.5;

/// Which reading of the sparsity penalty `max(open, s)` is active.
///
/// `Hinge` penalizes only the excess open fraction above `1 - s` and
/// vanishes once the target sparsity is met; `PaperLiteral` keeps the
/// verbatim `max(open, s)` form, which is constant below `s`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SparsityLossMode {
    #[default]
    Hinge,
    PaperLiteral,
}

impl std::str::FromStr for SparsityLossMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "hinge" => Ok(SparsityLossMode::Hinge),
            "paper_literal" => Ok(SparsityLossMode::PaperLiteral),
            other => Err(Error::Config(format!("unknown sparsity loss mode {other:?}"))),
        }
    }
}

/// Trainable gate parameters for one side (rows or columns) of a matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct GateVector<F> {
    mu: Tensor<F>,
    sigma: F,
}

/// Coefficients `(a, b)` such that the open probability per coordinate is
/// `0.5 + (-0.5) * erf(a * mu + b)`. Shared by the plain and taped paths so
/// both produce bit-identical values.
fn erf_arg_coeffs<F: Real>(sigma: F) -> (F, F) {
    let sqrt2 = F::from_f64_lossy(std::f64::consts::SQRT_2);
    let c = F::one() / (sqrt2 * sigma);
    let half = F::from_f64_lossy(0.5);
    (-c, -(half * c))
}

impl<F: Real> GateVector<F> {
    /// Gates start fully open: `mu = 0.5` makes the deterministic gate 1.
    pub fn new(len: usize) -> Self {
        GateVector {
            mu: Tensor::full(vec![len], F::from_f64_lossy(0.5)),
            sigma: F::from_f64_lossy(DEFAULT_SIGMA),
        }
    }

    pub fn from_mu(mu: Tensor<F>) -> Self {
        GateVector { mu, sigma: F::from_f64_lossy(DEFAULT_SIGMA) }
    }

    pub fn len(&self) -> usize {
        self.mu.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mu.is_empty()
    }

    pub fn sigma(&self) -> F {
        self.sigma
    }

    pub fn mu(&self) -> &Tensor<F> {
        &self.mu
    }

    pub fn mu_mut(&mut self) -> &mut Tensor<F> {
        &mut self.mu
    }

    /// Clip `mu` back onto `[-1, 1]`; called after every optimizer step.
    pub fn project_mu(&mut self) {
        for v in self.mu.data_mut() {
            if *v > F::one() {
                *v = F::one();
            } else if *v < -F::one() {
                *v = -F::one();
            }
        }
    }

    /// Training-time gates for a given noise vector.
    pub fn sample_train_gates(&self, noise: &[F]) -> Result<Tensor<F>> {
        if noise.len() != self.len() {
            return Err(Error::Shape(format!(
                "gate noise length {} vs mu length {}",
                noise.len(),
                self.len()
            )));
        }
        let half = F::from_f64_lossy(0.5);
        let shifted = tensor::affine(&self.mu, F::one(), half);
        let noisy = tensor::add(&shifted, &Tensor::vector(noise.to_vec()))?;
        Ok(tensor::clamp01(&noisy))
    }

    /// Deterministic evaluation gates: `clamp01(0.5 + mu)`.
    pub fn eval_gates(&self) -> Tensor<F> {
        let half = F::from_f64_lossy(0.5);
        let shifted = tensor::affine(&self.mu, F::one(), half);
        let zeros = Tensor::zeros(vec![self.len()]);
        let noisy = tensor::add(&shifted, &zeros).unwrap();
        tensor::clamp01(&noisy)
    }

    /// Analytic `P(omega_j > 0)` per coordinate.
    pub fn open_probabilities(&self) -> Tensor<F> {
        let (a, b) = erf_arg_coeffs(self.sigma);
        let half = F::from_f64_lossy(0.5);
        self.mu.map(|m| half + (-half) * (a * m + b).erf())
    }

    /// Mean analytic probability that a gate is nonzero.
    pub fn expected_open_fraction(&self) -> F {
        tensor::mean(&self.open_probabilities())
    }

    /// Binary keep mask from the deterministic gates.
    pub fn hard_mask(&self, threshold: F) -> Result<Vec<bool>> {
        if threshold < F::zero() || threshold > F::one() {
            return Err(Error::Config(format!(
                "hard mask threshold {threshold} outside [0, 1]"
            )));
        }
        Ok(self
            .eval_gates()
            .data()
            .iter()
            .map(|&g| g > threshold)
            .collect())
    }

    /// Fraction of hard-masked (zero) gates at the given threshold.
    pub fn achieved_sparsity(&self, threshold: F) -> Result<F> {
        let mask = self.hard_mask(threshold)?;
        let dropped = mask.iter().filter(|&&k| !k).count();
        Ok(F::from_f64_lossy(dropped as f64 / mask.len() as f64))
    }

    /// Penalty value without a tape; mirrors [`sparsity_loss_var`] bit for bit.
    pub fn sparsity_loss(&self, target_sparsity: F, mode: SparsityLossMode) -> Result<F> {
        check_target(target_sparsity)?;
        let open = self.expected_open_fraction();
        Ok(match mode {
            SparsityLossMode::Hinge => {
                let t = F::one() * open + (-(F::one() - target_sparsity));
                if t > F::zero() {
                    t
                } else {
                    F::zero()
                }
            }
            SparsityLossMode::PaperLiteral => {
                if open > target_sparsity {
                    open
                } else {
                    target_sparsity
                }
            }
        })
    }
}

fn check_target<F: Real>(s: F) -> Result<()> {
    if s < F::zero() || s >= F::one() {
        return Err(Error::Config(format!(
            "target sparsity {s} outside [0, 1)"
        )));
    }
    Ok(())
}

// ── taped counterparts ──────────────────────────────────────────────────

/// `omega = clamp01(0.5 + mu + noise)` on the tape, differentiable wrt `mu`.
pub fn sample_train_gates_var<F: Real>(
    tape: &mut Tape<F>,
    mu: Var,
    noise: &[F],
) -> Result<Var> {
    if noise.len() != tape.value(mu).len() {
        return Err(Error::Shape(format!(
            "gate noise length {} vs mu length {}",
            noise.len(),
            tape.value(mu).len()
        )));
    }
    let half = F::from_f64_lossy(0.5);
    let shifted = tape.affine(mu, F::one(), half);
    let nvar = tape.constant(Tensor::vector(noise.to_vec()));
    let noisy = tape.add(shifted, nvar)?;
    Ok(tape.clamp01(noisy))
}

/// Mean analytic open probability on the tape, differentiable wrt `mu`.
pub fn expected_open_fraction_var<F: Real>(tape: &mut Tape<F>, mu: Var, sigma: F) -> Var {
    let (a, b) = erf_arg_coeffs(sigma);
    let z = tape.affine(mu, a, b);
    let e = tape.erf_op(z);
    let half = F::from_f64_lossy(0.5);
    let open = tape.affine(e, -half, half);
    tape.mean(open)
}

/// Sparsity penalty on the tape. Gradient wrt `mu` is nonzero exactly when
/// the max selects the open-fraction branch.
pub fn sparsity_loss_var<F: Real>(
    tape: &mut Tape<F>,
    mu: Var,
    sigma: F,
    target_sparsity: F,
    mode: SparsityLossMode,
) -> Result<Var> {
    check_target(target_sparsity)?;
    let open = expected_open_fraction_var(tape, mu, sigma);
    Ok(match mode {
        SparsityLossMode::Hinge => {
            let shifted = tape.affine(open, F::one(), -(F::one() - target_sparsity));
            tape.relu(shifted)
        }
        SparsityLossMode::PaperLiteral => tape.max_const(open, target_sparsity),
    })
}

// ── gate report ─────────────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GateSide {
    Row,
    Col,
}

impl std::fmt::Display for GateSide {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            GateSide::Row => write!(f, "row"),
            GateSide::Col => write!(f, "col"),
        }
    }
}

#[derive(Debug, Clone)]
pub struct GateReportRow {
    pub layer: String,
    pub side: GateSide,
    pub index: usize,
    pub mu: f64,
    pub eval_gate: f64,
    pub kept: bool,
}

pub fn gate_report_rows<F: Real>(
    layer: &str,
    side: GateSide,
    gv: &GateVector<F>,
    threshold: F,
) -> Result<Vec<GateReportRow>> {
    let eval = gv.eval_gates();
    let mask = gv.hard_mask(threshold)?;
    Ok((0..gv.len())
        .map(|i| GateReportRow {
            layer: layer.to_string(),
            side,
            index: i,
            mu: gv.mu().data()[i].as_f64(),
            eval_gate: eval.data()[i].as_f64(),
            kept: mask[i],
        })
        .collect())
}

pub fn write_gate_report<W: Write>(mut w: W, rows: &[GateReportRow]) -> Result<()> {
    writeln!(w, "layer,gate_side,index,mu,eval_gate,kept")?;
    for r in rows {
        writeln!(
            w,
            "{},{},{},{},{},{}",
            r.layer,
            r.side,
            r.index,
            r.mu,
            r.eval_gate,
            if r.kept { 1 } else { 0 }
        )?;
    }
    Ok(())
}
