//! Optimization loop: joint descent on task loss plus weighted sparsity
//! loss, with separate learning rates for gate parameters and everything
//! else, decoupled weight decay, checkpointing, and metrics.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::autodiff::{ForwardCtx, NoisePolicy};
use crate::checkpoint::Checkpoint;
use crate::data::{epoch_batches, Batch, Corpus};
use crate::gates::SparsityLossMode;
use crate::tensor::Tensor;
use crate::transformer::{Model, ParamGroup};
use crate::{Error, Result, Scalar};

fn default_lr_gates() -> f64 {
    1e-3
}

fn default_lr_lora() -> f64 {
    1e-4
}

fn default_eval_every() -> usize {
    50
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    /// Sparsity-loss weight.
    pub lambda: f64,
    /// Target structured sparsity `s`.
    pub target_sparsity: f64,
    #[serde(default = "default_lr_gates")]
    pub lr_gates: f64,
    #[serde(default = "default_lr_lora")]
    pub lr_lora: f64,
    #[serde(default)]
    pub weight_decay: f64,
    pub batch_size: usize,
    pub max_steps: usize,
    pub seed: u64,
    #[serde(default = "default_eval_every")]
    pub eval_every: usize,
    #[serde(default)]
    pub sparsity_loss_mode: SparsityLossMode,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.lambda < 0.0 {
            return Err(Error::Config(format!("lambda {} < 0", self.lambda)));
        }
        if !(0.0..=1.0).contains(&self.target_sparsity) {
            return Err(Error::Config(format!(
                "target_sparsity {} outside [0,1]",
                self.target_sparsity
            )));
        }
        for (name, v) in [
            ("lr_gates", self.lr_gates),
            ("lr_lora", self.lr_lora),
        ] {
            if v <= 0.0 || !v.is_finite() {
                return Err(Error::Config(format!("{name} {v} must be positive")));
            }
        }
        if self.weight_decay < 0.0 {
            return Err(Error::Config(format!("weight_decay {} < 0", self.weight_decay)));
        }
        if self.batch_size == 0 || self.max_steps == 0 || self.eval_every == 0 {
            return Err(Error::Config(
                "batch_size, max_steps and eval_every must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// Which first-order rule advances the parameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum UpdateRule {
    /// Adam with decoupled weight decay.
    AdamW { beta1: f64, beta2: f64, eps: f64 },
    /// Plain gradient descent; used by the convergence check.
    Sgd,
}

impl UpdateRule {
    pub fn adamw() -> Self {
        UpdateRule::AdamW { beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

struct Moments {
    m: Tensor<Scalar>,
    v: Tensor<Scalar>,
}

/// Per-parameter optimizer state keyed by canonical tensor name.
pub struct Optimizer {
    pub rule: UpdateRule,
    state: HashMap<String, Moments>,
    step: usize,
}

/// Learning rate and decay for one parameter, derived from its group.
fn hyper(group: ParamGroup, cfg: &TrainConfig) -> Option<(f64, f64)> {
    match group {
        ParamGroup::GateMu => Some((cfg.lr_gates, 0.0)),
        ParamGroup::Adapter | ParamGroup::Head | ParamGroup::Base => {
            Some((cfg.lr_lora, cfg.weight_decay))
        }
        ParamGroup::LayerNorm => Some((cfg.lr_lora, 0.0)),
        ParamGroup::Frozen => None,
    }
}

impl Optimizer {
    pub fn new(rule: UpdateRule) -> Self {
        Optimizer { rule, state: HashMap::new(), step: 0 }
    }

    /// Advance every parameter that has a gradient. Gate mu parameters are
    /// projected back into [-1, 1] afterwards.
    pub fn apply(
        &mut self,
        model: &mut Model<Scalar>,
        grads: &HashMap<String, Tensor<Scalar>>,
        cfg: &TrainConfig,
    ) -> Result<()> {
        self.step += 1;
        let step = self.step;
        let rule = self.rule;
        let state = &mut self.state;
        let mut failure: Option<Error> = None;
        model.visit_params_mut(&mut |name, group, param| {
            if failure.is_some() {
                return;
            }
            let Some((lr, decay)) = hyper(group, cfg) else {
                return;
            };
            let Some(grad) = grads.get(name) else {
                return;
            };
            if grad.shape() != param.shape() {
                failure = Some(Error::Shape(format!(
                    "gradient shape {:?} vs parameter '{name}' shape {:?}",
                    grad.shape(),
                    param.shape()
                )));
                return;
            }
            match rule {
                UpdateRule::Sgd => {
                    for (p, &g) in param.data_mut().iter_mut().zip(grad.data()) {
                        *p -= lr * g;
                        *p -= lr * decay * *p;
                    }
                }
                UpdateRule::AdamW { beta1, beta2, eps } => {
                    let entry = state.entry(name.to_string()).or_insert_with(|| Moments {
                        m: Tensor::zeros(param.shape().to_vec()),
                        v: Tensor::zeros(param.shape().to_vec()),
                    });
                    let bc1 = 1.0 - beta1.powi(step as i32);
                    let bc2 = 1.0 - beta2.powi(step as i32);
                    for i in 0..grad.len() {
                        let g = grad.data()[i];
                        let m = &mut entry.m.data_mut()[i];
                        *m = beta1 * *m + (1.0 - beta1) * g;
                        let mhat = *m / bc1;
                        let v = &mut entry.v.data_mut()[i];
                        *v = beta2 * *v + (1.0 - beta2) * g * g;
                        let vhat = *v / bc2;
                        let p = &mut param.data_mut()[i];
                        let old = *p;
                        *p = old - lr * mhat / (vhat.sqrt() + eps) - lr * decay * old;
                    }
                }
            }
            if group == ParamGroup::GateMu {
                for p in param.data_mut() {
                    *p = p.clamp(-1.0, 1.0);
                }
            }
        });
        match failure {
            Some(e) => Err(e),
            None => Ok(()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepMetrics {
    pub task_loss: f64,
    pub sparse_loss: f64,
    pub total_loss: f64,
    pub grad_norm: f64,
}

/// Noise source for one training step.
pub enum StepNoise<'a> {
    /// Fresh draws seeded per step.
    Fresh(u64),
    /// Replay recorded draws (fixed-batch descent, gradient checks).
    Frozen(&'a HashMap<String, Vec<Scalar>>),
}

/// Eq.-style total objective on the tape: cross-entropy plus
/// `lambda * sum` of per-gate-vector sparsity losses. With `lambda == 0` the
/// sparsity term is never built, so the total equals the task loss exactly.
pub fn total_loss_on_tape(
    ctx: &mut ForwardCtx<Scalar>,
    model: &Model<Scalar>,
    batch: &Batch,
    cfg: &TrainConfig,
) -> Result<(crate::autodiff::Var, crate::autodiff::Var, Option<crate::autodiff::Var>)> {
    let logits = model.forward_train(ctx, &batch.ids, Some(&batch.mask))?;
    let task = ctx.tape.cross_entropy_mean(logits, &batch.labels)?;
    if cfg.lambda == 0.0 {
        return Ok((task, task, None));
    }
    let mu_bindings: Vec<(String, crate::autodiff::Var)> = ctx
        .bindings()
        .iter()
        .filter(|(n, _)| n.ends_with(".gate_rows.mu") || n.ends_with(".gate_cols.mu"))
        .cloned()
        .collect();
    let sigma = crate::gates::DEFAULT_SIGMA;
    let mut sparse: Option<crate::autodiff::Var> = None;
    for (_, mu) in mu_bindings {
        let term = crate::gates::sparsity_loss_var(
            &mut ctx.tape,
            mu,
            sigma,
            cfg.target_sparsity,
            cfg.sparsity_loss_mode,
        )?;
        sparse = Some(match sparse {
            Some(acc) => ctx.tape.add(acc, term)?,
            None => term,
        });
    }
    let sparse = sparse
        .ok_or_else(|| Error::Config("lambda > 0 but the model has no gates".into()))?;
    let weighted = ctx.tape.affine(sparse, cfg.lambda, 0.0);
    let total = ctx.tape.add(task, weighted)?;
    Ok((total, task, Some(sparse)))
}

/// One optimization step on one batch. Aborts with a numeric error naming
/// the step and offending tensor if the loss or any gradient is not finite.
pub fn train_step(
    model: &mut Model<Scalar>,
    batch: &Batch,
    optimizer: &mut Optimizer,
    cfg: &TrainConfig,
    step: usize,
    noise: StepNoise<'_>,
) -> Result<StepMetrics> {
    let mut ctx = match noise {
        StepNoise::Fresh(seed) => ForwardCtx::new(NoisePolicy::Sample, seed),
        StepNoise::Frozen(map) => ForwardCtx::with_frozen_noise(map.clone(), 0),
    };
    let (total, task, sparse) = total_loss_on_tape(&mut ctx, model, batch, cfg)?;
    let total_val = ctx.tape.value(total).item();
    if !total_val.is_finite() {
        return Err(Error::Numeric(format!("non-finite loss {total_val} at step {step}")));
    }
    ctx.tape.backward(total)?;
    let mut grads = HashMap::new();
    let mut grad_sq = 0.0;
    for (name, var) in ctx.bindings() {
        if let Some(g) = ctx.tape.grad(*var) {
            if g.has_non_finite() {
                return Err(Error::Numeric(format!(
                    "non-finite gradient in '{name}' at step {step}"
                )));
            }
            grad_sq += g.data().iter().map(|v| v * v).sum::<f64>();
            grads.insert(name.clone(), g.clone());
        }
    }
    let task_loss = ctx.tape.value(task).item();
    let sparse_loss = sparse.map(|s| ctx.tape.value(s).item()).unwrap_or(0.0);
    optimizer.apply(model, &grads, cfg)?;
    Ok(StepMetrics {
        task_loss,
        sparse_loss,
        total_loss: total_val,
        grad_norm: grad_sq.sqrt(),
    })
}

/// Deterministic accuracy of the evaluation-gate model on a corpus,
/// processed in corpus order.
pub fn evaluate(model: &Model<Scalar>, corpus: &Corpus, batch_size: usize) -> Result<f64> {
    predictions(corpus, batch_size, |ids, mask| model.forward_eval(ids, mask))
        .map(|(acc, _)| acc)
}

/// Accuracy plus per-example argmax predictions via any logits function.
pub fn predictions(
    corpus: &Corpus,
    batch_size: usize,
    mut logits_of: impl FnMut(&[Vec<usize>], Option<&[Vec<bool>]>) -> Result<Tensor<Scalar>>,
) -> Result<(f64, Vec<usize>)> {
    if corpus.is_empty() {
        return Err(Error::Config("cannot evaluate an empty corpus".into()));
    }
    if batch_size == 0 {
        return Err(Error::Config("batch_size must be positive".into()));
    }
    let mut hits = 0usize;
    let mut preds = Vec::with_capacity(corpus.len());
    for chunk in corpus.examples.chunks(batch_size) {
        let width = chunk.iter().map(|e| e.tokens.len()).max().unwrap();
        let mut ids = Vec::with_capacity(chunk.len());
        let mut mask = Vec::with_capacity(chunk.len());
        for e in chunk {
            let mut row = e.tokens.clone();
            let mut m = vec![true; row.len()];
            row.resize(width, crate::data::PAD_ID);
            m.resize(width, false);
            ids.push(row);
            mask.push(m);
        }
        let logits = logits_of(&ids, Some(&mask))?;
        for (r, e) in chunk.iter().enumerate() {
            let row = &logits.data()[r * logits.cols()..(r + 1) * logits.cols()];
            let pred = row
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                .map(|(i, _)| i)
                .unwrap();
            preds.push(pred);
            if pred == e.label {
                hits += 1;
            }
        }
    }
    Ok((hits as f64 / corpus.len() as f64, preds))
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRow {
    pub step: usize,
    pub task_loss: f64,
    pub sparse_loss: f64,
    pub open_fraction_mean: f64,
    pub achieved_sparsity: f64,
    pub accuracy: f64,
}

pub const METRICS_HEADER: &str =
    "step,task_loss,sparse_loss,open_fraction_mean,achieved_sparsity,accuracy";

pub fn metrics_csv(rows: &[MetricsRow]) -> String {
    let mut out = String::from(METRICS_HEADER);
    out.push('\n');
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{},{}\n",
            r.step, r.task_loss, r.sparse_loss, r.open_fraction_mean, r.achieved_sparsity, r.accuracy
        ));
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct FitResult {
    pub metrics: Vec<MetricsRow>,
    pub final_checkpoint: Checkpoint,
    pub best_checkpoint: Checkpoint,
    pub best_accuracy: f64,
    pub final_accuracy: f64,
    pub achieved_sparsity: f64,
}

/// Full training run: epoch-shuffled batches, periodic evaluation, best and
/// final checkpoints. Deterministic given the config seed.
pub fn fit(
    model: &mut Model<Scalar>,
    train: &Corpus,
    val: &Corpus,
    cfg: &TrainConfig,
) -> Result<FitResult> {
    cfg.validate()?;
    if train.is_empty() || val.is_empty() {
        return Err(Error::Config("training requires non-empty train and val corpora".into()));
    }
    let mut optimizer = Optimizer::new(UpdateRule::adamw());
    let mut metrics = Vec::new();
    let mut best_accuracy = f64::NEG_INFINITY;
    let mut best_checkpoint = Checkpoint::from_model(model);
    let mut step = 0usize;
    let mut epoch = 0u64;
    'train: loop {
        let batches = epoch_batches(train, cfg.batch_size, cfg.seed.wrapping_add(epoch))?;
        for batch in &batches {
            step += 1;
            let noise_seed = cfg.seed.wrapping_mul(0x9E37_79B9).wrapping_add(step as u64);
            let last =
                train_step(model, batch, &mut optimizer, cfg, step, StepNoise::Fresh(noise_seed))?;
            if step % cfg.eval_every == 0 || step == cfg.max_steps {
                let accuracy = evaluate(model, val, cfg.batch_size)?;
                metrics.push(MetricsRow {
                    step,
                    task_loss: last.task_loss,
                    sparse_loss: last.sparse_loss,
                    open_fraction_mean: model.mean_open_fraction(),
                    achieved_sparsity: model.achieved_sparsity(0.0)?,
                    accuracy,
                });
                if accuracy > best_accuracy {
                    best_accuracy = accuracy;
                    best_checkpoint = Checkpoint::from_model(model);
                }
            }
            if step == cfg.max_steps {
                break 'train;
            }
        }
        epoch += 1;
    }
    let final_accuracy = metrics.last().map(|r| r.accuracy).unwrap_or(0.0);
    Ok(FitResult {
        final_checkpoint: Checkpoint::from_model(model),
        best_checkpoint,
        best_accuracy,
        final_accuracy,
        achieved_sparsity: model.achieved_sparsity(0.0)?,
        metrics,
    })
}

/// Median of a non-empty sample (average of the middle pair for even sizes).
pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}
