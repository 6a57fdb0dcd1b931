//! Wall-clock benchmarks: gathered (column-pruned) matrix multiplication
//! against the dense product, and whole-model inference epochs at prescribed
//! sparsity levels.
//!
//! Pruned weights are static, so the weight gather happens once per level
//! outside the timed region; only the per-input gather and the multiply are
//! timed. Each measurement is the median of 3 chunk medians over the repeat
//! samples, which resists scheduler noise.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::adapters::random_kept_indices;
use crate::data::Corpus;
use crate::training::predictions;
use crate::transformer::Model;
use crate::{Error, Result, Scalar};

#[derive(Debug, Clone, PartialEq)]
pub struct MatmulBenchRow {
    pub sparsity: f64,
    pub dense_ms: f64,
    pub gathered_ms: f64,
    pub relative_reduction_pct: f64,
    /// The three chunk medians behind `gathered_ms`; their spread bounds
    /// timing noise for monotonicity checks.
    pub gathered_chunk_medians: [f64; 3],
}

pub const MATMUL_CSV_HEADER: &str = "sparsity,dense_ms,gathered_ms,relative_reduction_pct";

pub fn matmul_csv(rows: &[MatmulBenchRow]) -> String {
    let mut out = String::from(MATMUL_CSV_HEADER);
    out.push('\n');
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{}\n",
            r.sparsity, r.dense_ms, r.gathered_ms, r.relative_reduction_pct
        ));
    }
    out
}

/// Median of the per-repeat samples: split into 3 chunks, median each,
/// median of those.
fn median_of_chunk_medians(samples: &[f64]) -> (f64, [f64; 3]) {
    let n = samples.len();
    let chunk = n.div_ceil(3);
    let mut medians = [0.0f64; 3];
    for (i, c) in samples.chunks(chunk).enumerate().take(3) {
        medians[i] = crate::training::median(c);
    }
    (crate::training::median(&medians), medians)
}

/// Dense product via a blocked kernel; the benchmark compares wall time,
/// not bit patterns, so the fast path is appropriate here.
fn gemm(x: &[f64], w: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            x.as_ptr(),
            k as isize,
            1,
            w.as_ptr(),
            n as isize,
            1,
            0.0,
            out.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Time the dense `X W^T` against the gathered `(X omega)(W omega)^T` at each
/// sparsity level. `W` is held transposed so dropped input columns are
/// contiguous row gathers.
pub fn bench_matmul(
    dim: usize,
    batch: usize,
    repeats: usize,
    grid: &[f64],
    seed: u64,
) -> Result<Vec<MatmulBenchRow>> {
    if dim == 0 || batch == 0 || repeats == 0 {
        return Err(Error::Config("dim, batch and repeats must be positive".into()));
    }
    if let Some(&bad) = grid.iter().find(|s| !(0.0..1.0).contains(*s)) {
        return Err(Error::Config(format!("sparsity level {bad} outside [0,1)")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    // w_t[i][j] = W[j][i]; row i of w_t is input dimension i
    let w_t: Vec<f64> = (0..dim * dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let x: Vec<f64> = (0..batch * dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let mut out = vec![0.0f64; batch * dim];

    let time_gathered = |kept: &[usize],
                         w_gathered: &[f64],
                         x_gathered: &mut [f64],
                         out: &mut [f64]|
     -> f64 {
        let keep = kept.len();
        let t0 = Instant::now();
        // the input changes every call, so its gather is paid inside
        for b in 0..batch {
            let src = &x[b * dim..(b + 1) * dim];
            let dst = &mut x_gathered[b * keep..(b + 1) * keep];
            for (d, &i) in dst.iter_mut().zip(kept) {
                *d = src[i];
            }
        }
        gemm(x_gathered, w_gathered, out, batch, keep, dim);
        t0.elapsed().as_secs_f64() * 1e3
    };

    // settle caches and clock scaling before anything is recorded
    let warmup = (repeats / 50).clamp(10, 2000);
    for _ in 0..warmup {
        gemm(&x, &w_t, &mut out, batch, dim, dim);
    }

    // dense and full-width gathered samples are interleaved so machine-speed
    // drift over the run hits both alike: the sparsity-0 comparison (pure
    // gather overhead, fractions of a percent) is a paired measurement
    let full: Vec<usize> = (0..dim).collect();
    let mut x_full = vec![0.0f64; batch * dim];
    let mut dense_samples = Vec::with_capacity(repeats);
    let mut full_samples = Vec::with_capacity(repeats);
    for _ in 0..repeats {
        let t0 = Instant::now();
        gemm(&x, &w_t, &mut out, batch, dim, dim);
        dense_samples.push(t0.elapsed().as_secs_f64() * 1e3);
        full_samples.push(time_gathered(&full, &w_t, &mut x_full, &mut out));
    }
    let (dense_ms, _) = median_of_chunk_medians(&dense_samples);

    let mut rows = Vec::with_capacity(grid.len());
    for &s in grid {
        let keep = (((1.0 - s) * dim as f64).round() as usize).clamp(1, dim);
        let (gathered_ms, gathered_chunk_medians) = if keep == dim {
            median_of_chunk_medians(&full_samples)
        } else {
            let kept = random_kept_indices(dim, keep, &mut rng);
            // static pruned weight: gathered once, outside the timed region
            let mut w_gathered = Vec::with_capacity(keep * dim);
            for &i in &kept {
                w_gathered.extend_from_slice(&w_t[i * dim..(i + 1) * dim]);
            }
            let mut x_gathered = vec![0.0f64; batch * keep];
            let mut samples = Vec::with_capacity(repeats);
            for _ in 0..repeats {
                samples.push(time_gathered(&kept, &w_gathered, &mut x_gathered, &mut out));
            }
            median_of_chunk_medians(&samples)
        };
        rows.push(MatmulBenchRow {
            sparsity: s,
            dense_ms,
            gathered_ms,
            relative_reduction_pct: (dense_ms - gathered_ms) / dense_ms * 100.0,
            gathered_chunk_medians,
        });
    }
    Ok(rows)
}

#[derive(Debug, Clone, PartialEq)]
pub struct InferBenchRow {
    pub sparsity: f64,
    pub median_epoch_ms: f64,
    /// Relative time factor: epoch time at sparsity 0 over epoch time here.
    pub rtf: f64,
    pub accuracy: f64,
}

pub const INFER_CSV_HEADER: &str = "sparsity,median_epoch_ms,rtf,accuracy";

pub fn infer_csv(rows: &[InferBenchRow]) -> String {
    let mut out = String::from(INFER_CSV_HEADER);
    out.push('\n');
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{}\n",
            r.sparsity, r.median_epoch_ms, r.rtf, r.accuracy
        ));
    }
    out
}

/// Time one validation epoch of the physically pruned model at each level,
/// `repeats` times each, reporting medians and the relative time factor
/// against the level-0 (unpruned, but fused) model.
pub fn bench_infer(
    model: &Model<Scalar>,
    corpus: &Corpus,
    levels: &[f64],
    batch_size: usize,
    repeats: usize,
) -> Result<Vec<InferBenchRow>> {
    if repeats == 0 {
        return Err(Error::Config("repeats must be positive".into()));
    }
    if corpus.is_empty() {
        return Err(Error::Config("cannot benchmark on an empty corpus".into()));
    }
    let timed_level = |s: f64| -> Result<(f64, f64)> {
        let pruned = model.prune_to_sparsity(s)?;
        let mut samples = Vec::with_capacity(repeats);
        let mut accuracy = 0.0;
        for _ in 0..repeats {
            let t0 = Instant::now();
            let (acc, _) =
                predictions(corpus, batch_size, |ids, mask| pruned.forward_eval(ids, mask))?;
            samples.push(t0.elapsed().as_secs_f64() * 1e3);
            accuracy = acc;
        }
        Ok((crate::training::median(&samples), accuracy))
    };
    let (base_ms, _) = timed_level(0.0)?;
    let mut rows = Vec::with_capacity(levels.len());
    for &s in levels {
        let (median_epoch_ms, accuracy) = if s == 0.0 {
            // re-timing level 0 would make its RTF drift from 1 by noise
            (base_ms, timed_level(0.0)?.1)
        } else {
            timed_level(s)?
        };
        rows.push(InferBenchRow {
            sparsity: s,
            median_epoch_ms,
            rtf: base_ms / median_epoch_ms,
            accuracy,
        });
    }
    Ok(rows)
}
