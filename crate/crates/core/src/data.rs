//! Task sources: a planted-sparse-feature synthetic generator with known
//! ground-truth removable dimensions, and a tokenized TSV classification
//! loader.
//!
//! Token id 0 is PAD, 1 is UNK. In planted corpora every content token
//! `t >= 2` activates exactly one embedding dimension, so the informative
//! dimensions of the task are literal embedding dimensions and an oracle
//! reading only those attains accuracy `1 - noise_rate` in expectation.

use std::collections::HashMap;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::transformer::planted_token_dim;
use crate::{Error, Result};

pub const PAD_ID: usize = 0;
pub const UNK_ID: usize = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Example {
    pub tokens: Vec<usize>,
    pub label: usize,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Corpus {
    pub examples: Vec<Example>,
    /// token -> id; empty for synthetic corpora.
    pub vocab: HashMap<String, usize>,
    pub num_classes: usize,
    pub split: String,
}

impl Corpus {
    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    /// Deterministic head/tail split at `train_fraction`.
    pub fn split_at(&self, train_fraction: f64) -> Result<(Corpus, Corpus)> {
        if !(0.0..=1.0).contains(&train_fraction) {
            return Err(Error::Config(format!(
                "train_fraction {train_fraction} outside [0,1]"
            )));
        }
        let cut = (self.len() as f64 * train_fraction).round() as usize;
        let mut train = self.clone();
        let mut val = self.clone();
        val.examples = train.examples.split_off(cut);
        train.split = "train".into();
        val.split = "val".into();
        Ok((train, val))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlantedTaskSpec {
    pub vocab_size: usize,
    pub seq_len: usize,
    pub num_classes: usize,
    /// Embedding width of the model the task is planted for; tokens map onto
    /// dimensions modulo this.
    pub embed_dim: usize,
    /// Embedding dimensions that determine the label.
    pub informative_dims: Vec<usize>,
    /// Probability of replacing a label with a different uniformly drawn one.
    pub noise_rate: f64,
    pub num_samples: usize,
    pub seed: u64,
}

impl PlantedTaskSpec {
    pub fn validate(&self) -> Result<()> {
        if self.vocab_size < 3 {
            return Err(Error::Config("planted vocab_size must be >= 3".into()));
        }
        if self.seq_len == 0 || self.num_samples == 0 {
            return Err(Error::Config("seq_len and num_samples must be positive".into()));
        }
        if self.num_classes < 2 {
            return Err(Error::Config(format!("num_classes {} < 2", self.num_classes)));
        }
        if self.embed_dim == 0 {
            return Err(Error::Config("embed_dim must be positive".into()));
        }
        if self.informative_dims.is_empty() || self.informative_dims.len() >= self.embed_dim {
            return Err(Error::Config(format!(
                "need 1..{} informative dims, got {}",
                self.embed_dim,
                self.informative_dims.len()
            )));
        }
        if let Some(&bad) = self.informative_dims.iter().find(|&&d| d >= self.embed_dim) {
            return Err(Error::Config(format!(
                "informative dim {bad} >= embed_dim {}",
                self.embed_dim
            )));
        }
        if !(0.0..=1.0).contains(&self.noise_rate) {
            return Err(Error::Config(format!("noise_rate {} outside [0,1]", self.noise_rate)));
        }
        Ok(())
    }
}

/// Generated corpus plus the scoring rule that defines its labels.
#[derive(Debug, Clone, PartialEq)]
pub struct PlantedTask {
    pub corpus: Corpus,
    pub spec: PlantedTaskSpec,
    /// Per-dimension score weight; zero outside informative dims.
    pub dim_weights: Vec<f64>,
    /// Ascending class-boundary scores (num_classes - 1 edges).
    pub edges: Vec<f64>,
}

impl PlantedTask {
    /// Noise-free label of a token sequence under the planted rule.
    pub fn oracle_label(&self, tokens: &[usize]) -> usize {
        let score = self.score(tokens);
        self.edges.iter().take_while(|&&e| score > e).count()
    }

    fn score(&self, tokens: &[usize]) -> f64 {
        let mut s = 0.0;
        for &t in tokens {
            if let Some(dim) = planted_token_dim(t, self.spec.embed_dim) {
                s += self.dim_weights[dim];
            }
        }
        s
    }

    /// Accuracy of the oracle on this corpus; 1.0 at noise_rate 0.
    pub fn oracle_accuracy(&self) -> f64 {
        if self.corpus.is_empty() {
            return 0.0;
        }
        let hits = self
            .corpus
            .examples
            .iter()
            .filter(|e| self.oracle_label(&e.tokens) == e.label)
            .count();
        hits as f64 / self.corpus.len() as f64
    }
}

/// Generate a planted classification corpus. Deterministic given its
/// parameters.
///
/// Sequences are drawn uniformly over content tokens; the label is the
/// quantile bin of a weighted count of informative-dimension activations.
/// Candidates whose score falls within a margin of a bin edge are rejected
/// so the task stays learnable, and classes are balanced exactly.
pub fn generate_planted(spec: &PlantedTaskSpec) -> Result<PlantedTask> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut dim_weights = vec![0.0f64; spec.embed_dim];
    for &d in &spec.informative_dims {
        // weights bounded away from zero so every informative dim matters
        let w: f64 = rng.gen_range(0.5..1.5);
        dim_weights[d] = if rng.gen_bool(0.5) { w } else { -w };
    }
    let draw_seq = |rng: &mut ChaCha8Rng| -> Vec<usize> {
        (0..spec.seq_len)
            .map(|_| rng.gen_range(2..spec.vocab_size))
            .collect()
    };
    let score_of = |tokens: &[usize]| -> f64 {
        tokens
            .iter()
            .filter_map(|&t| planted_token_dim(t, spec.embed_dim))
            .map(|d| dim_weights[d])
            .sum()
    };
    // pool of candidates to estimate quantile edges
    let pool_size = (spec.num_samples * 4).max(2000);
    let pool: Vec<(Vec<usize>, f64)> = (0..pool_size)
        .map(|_| {
            let t = draw_seq(&mut rng);
            let s = score_of(&t);
            (t, s)
        })
        .collect();
    let mut scores: Vec<f64> = pool.iter().map(|(_, s)| *s).collect();
    scores.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let edges: Vec<f64> = (1..spec.num_classes)
        .map(|c| scores[c * pool_size / spec.num_classes])
        .collect();
    let spread = scores[pool_size - 1] - scores[0];
    let margin = spread * 0.02;
    let label_of = |s: f64| edges.iter().take_while(|&&e| s > e).count();
    let near_edge = |s: f64| edges.iter().any(|&e| (s - e).abs() <= margin);
    // balanced fill, drawing past the pool as needed
    let per_class = spec.num_samples.div_ceil(spec.num_classes);
    let mut buckets: Vec<Vec<Vec<usize>>> = vec![Vec::new(); spec.num_classes];
    let feed = |tokens: Vec<usize>, s: f64, buckets: &mut Vec<Vec<Vec<usize>>>| {
        if near_edge(s) {
            return;
        }
        let l = label_of(s);
        if buckets[l].len() < per_class {
            buckets[l].push(tokens);
        }
    };
    for (tokens, s) in pool {
        feed(tokens, s, &mut buckets);
    }
    let mut attempts = 0usize;
    while buckets.iter().any(|b| b.len() < per_class) {
        attempts += 1;
        if attempts > pool_size * 200 {
            return Err(Error::Config(
                "planted task generation failed to balance classes; \
                 informative dims may be too sparse for the sequence length"
                    .into(),
            ));
        }
        let t = draw_seq(&mut rng);
        let s = score_of(&t);
        feed(t, s, &mut buckets);
    }
    let mut examples = Vec::with_capacity(spec.num_samples);
    'outer: for i in 0..per_class {
        for (label, bucket) in buckets.iter().enumerate() {
            if examples.len() == spec.num_samples {
                break 'outer;
            }
            let tokens = bucket[i].clone();
            let label = if spec.noise_rate > 0.0 && rng.gen_bool(spec.noise_rate) {
                // flip to a different class uniformly
                let shift = rng.gen_range(1..spec.num_classes);
                (label + shift) % spec.num_classes
            } else {
                label
            };
            examples.push(Example { tokens, label });
        }
    }
    Ok(PlantedTask {
        corpus: Corpus {
            examples,
            vocab: HashMap::new(),
            num_classes: spec.num_classes,
            split: "planted".into(),
        },
        spec: spec.clone(),
        dim_weights,
        edges,
    })
}

/// Load a `label<TAB>space-separated tokens` file. With `vocab: None` a
/// vocabulary is built from this file (the train split); pass the train
/// vocabulary for other splits so unseen tokens map to UNK.
pub fn load_tsv(
    path: &Path,
    max_samples: Option<usize>,
    vocab: Option<&HashMap<String, usize>>,
    num_classes: usize,
) -> Result<Corpus> {
    let file = std::fs::File::open(path)
        .map_err(|e| Error::Input(format!("cannot open {}: {e}", path.display())))?;
    let reader = BufReader::new(file);
    let build_vocab = vocab.is_none();
    let mut local_vocab: HashMap<String, usize> = vocab.cloned().unwrap_or_default();
    let mut examples = Vec::new();
    for (lineno, line) in reader.lines().enumerate() {
        if let Some(cap) = max_samples {
            if examples.len() == cap {
                break;
            }
        }
        let line = line.map_err(|e| Error::Input(format!("{}:{}: {e}", path.display(), lineno + 1)))?;
        if line.is_empty() {
            continue;
        }
        let (label_str, text) = line.split_once('\t').ok_or_else(|| {
            Error::Input(format!("{}:{}: missing tab separator", path.display(), lineno + 1))
        })?;
        let label: usize = label_str.trim().parse().map_err(|_| {
            Error::Input(format!(
                "{}:{}: label '{label_str}' is not a non-negative integer",
                path.display(),
                lineno + 1
            ))
        })?;
        if label >= num_classes {
            return Err(Error::Input(format!(
                "{}:{}: label {label} >= num_classes {num_classes}",
                path.display(),
                lineno + 1
            )));
        }
        let mut tokens = Vec::new();
        for word in text.split_whitespace() {
            let id = if build_vocab {
                let next = local_vocab.len() + 2; // after PAD/UNK
                *local_vocab.entry(word.to_string()).or_insert(next)
            } else {
                local_vocab.get(word).copied().unwrap_or(UNK_ID)
            };
            tokens.push(id);
        }
        if tokens.is_empty() {
            return Err(Error::Input(format!(
                "{}:{}: no tokens after label",
                path.display(),
                lineno + 1
            )));
        }
        examples.push(Example { tokens, label });
    }
    if examples.is_empty() {
        return Err(Error::Input(format!("{}: no examples", path.display())));
    }
    Ok(Corpus {
        examples,
        vocab: local_vocab,
        num_classes,
        split: if build_vocab { "train" } else { "eval" }.into(),
    })
}

/// Smallest model vocab size covering a corpus (ids are dense by
/// construction: PAD, UNK, then token ids).
pub fn required_vocab_size(corpus: &Corpus) -> usize {
    let max_id = corpus
        .examples
        .iter()
        .flat_map(|e| e.tokens.iter().copied())
        .max()
        .unwrap_or(UNK_ID);
    max_id + 1
}

pub fn save_vocab(path: &Path, vocab: &HashMap<String, usize>) -> Result<()> {
    let mut entries: Vec<(&String, &usize)> = vocab.iter().collect();
    entries.sort_by_key(|(_, &id)| id);
    let mut f = std::fs::File::create(path)?;
    for (token, id) in entries {
        writeln!(f, "{token}\t{id}")?;
    }
    Ok(())
}

pub fn load_vocab(path: &Path) -> Result<HashMap<String, usize>> {
    let file = std::fs::File::open(path)
        .map_err(|e| Error::Input(format!("cannot open {}: {e}", path.display())))?;
    let mut vocab = HashMap::new();
    for (lineno, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.is_empty() {
            continue;
        }
        let (token, id) = line.split_once('\t').ok_or_else(|| {
            Error::Input(format!("{}:{}: missing tab", path.display(), lineno + 1))
        })?;
        let id: usize = id.parse().map_err(|_| {
            Error::Input(format!("{}:{}: bad id '{id}'", path.display(), lineno + 1))
        })?;
        vocab.insert(token.to_string(), id);
    }
    Ok(vocab)
}

/// One padded training batch.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub ids: Vec<Vec<usize>>,
    pub mask: Vec<Vec<bool>>,
    pub labels: Vec<usize>,
}

/// Split a corpus into right-padded batches in a seeded shuffle order.
pub fn epoch_batches(corpus: &Corpus, batch_size: usize, seed: u64) -> Result<Vec<Batch>> {
    if batch_size == 0 {
        return Err(Error::Config("batch_size must be positive".into()));
    }
    if corpus.is_empty() {
        return Err(Error::Config("cannot batch an empty corpus".into()));
    }
    let mut order: Vec<usize> = (0..corpus.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut batches = Vec::with_capacity(corpus.len().div_ceil(batch_size));
    for chunk in order.chunks(batch_size) {
        let width = chunk
            .iter()
            .map(|&i| corpus.examples[i].tokens.len())
            .max()
            .unwrap();
        let mut ids = Vec::with_capacity(chunk.len());
        let mut mask = Vec::with_capacity(chunk.len());
        let mut labels = Vec::with_capacity(chunk.len());
        for &i in chunk {
            let ex = &corpus.examples[i];
            let mut row = ex.tokens.clone();
            let mut m = vec![true; row.len()];
            row.resize(width, PAD_ID);
            m.resize(width, false);
            ids.push(row);
            mask.push(m);
            labels.push(ex.label);
        }
        batches.push(Batch { ids, mask, labels });
    }
    Ok(batches)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec() -> PlantedTaskSpec {
        PlantedTaskSpec {
            vocab_size: 66, // tokens 2..66 cover dims 0..32 twice
            seq_len: 12,
            num_classes: 2,
            embed_dim: 32,
            informative_dims: (0..16).collect(),
            noise_rate: 0.0,
            num_samples: 400,
            seed: 7,
        }
    }

    #[test]
    fn spec_validation() {
        let mut s = spec();
        s.informative_dims = vec![40];
        assert!(s.validate().is_err());
        let mut s = spec();
        s.informative_dims = (0..32).collect();
        assert!(s.validate().is_err());
        let mut s = spec();
        s.noise_rate = 1.5;
        assert!(s.validate().is_err());
        assert!(spec().validate().is_ok());
    }

    #[test]
    fn oracle_is_perfect_without_noise() {
        let task = generate_planted(&spec()).unwrap();
        assert_eq!(task.corpus.len(), 400);
        assert!((task.oracle_accuracy() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn deterministic_given_seed() {
        let a = generate_planted(&spec()).unwrap();
        let b = generate_planted(&spec()).unwrap();
        assert_eq!(a, b);
        let c = generate_planted(&PlantedTaskSpec { seed: 8, ..spec() }).unwrap();
        assert_ne!(a.corpus, c.corpus);
    }

    #[test]
    fn labels_balanced() {
        let task = generate_planted(&spec()).unwrap();
        let ones = task.corpus.examples.iter().filter(|e| e.label == 1).count();
        assert_eq!(ones, 200);
    }

    #[test]
    fn noise_rate_degrades_oracle_proportionally() {
        let task = generate_planted(&PlantedTaskSpec {
            noise_rate: 0.3,
            num_samples: 4000,
            ..spec()
        })
        .unwrap();
        let acc = task.oracle_accuracy();
        // binomial 3-sigma band around 0.7 at n=4000
        assert!((acc - 0.7).abs() < 3.0 * (0.7f64 * 0.3 / 4000.0).sqrt() + 0.01, "{acc}");
    }

    #[test]
    fn only_informative_dims_carry_weight() {
        let task = generate_planted(&spec()).unwrap();
        for (d, &w) in task.dim_weights.iter().enumerate() {
            if task.spec.informative_dims.contains(&d) {
                assert!(w.abs() >= 0.5);
            } else {
                assert_eq!(w, 0.0);
            }
        }
    }

    #[test]
    fn tsv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("train.tsv");
        std::fs::write(&p, "1\thello world\n0\thello there\n1\tworld\n").unwrap();
        let c = load_tsv(&p, None, None, 2).unwrap();
        assert_eq!(c.len(), 3);
        assert_eq!(c.examples[0].tokens.len(), 2);
        assert_eq!(c.examples[0].label, 1);
        // same token, same id
        assert_eq!(c.examples[0].tokens[0], c.examples[1].tokens[0]);
        assert!(c.examples.iter().all(|e| e.tokens.iter().all(|&t| t >= 2)));
        // cap
        assert_eq!(load_tsv(&p, Some(1), None, 2).unwrap().len(), 1);
        // eval split maps unseen tokens to UNK
        let pe = dir.path().join("eval.tsv");
        std::fs::write(&pe, "0\thello unseen\n").unwrap();
        let e = load_tsv(&pe, None, Some(&c.vocab), 2).unwrap();
        assert_eq!(e.examples[0].tokens[1], UNK_ID);
        // vocab persistence
        let vp = dir.path().join("vocab.tsv");
        save_vocab(&vp, &c.vocab).unwrap();
        assert_eq!(load_vocab(&vp).unwrap(), c.vocab);
    }

    #[test]
    fn tsv_errors_carry_line_numbers() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("bad.tsv");
        std::fs::write(&p, "1\tok line\nno tab here\n").unwrap();
        let err = load_tsv(&p, None, None, 2).unwrap_err().to_string();
        assert!(err.contains(":2:"), "{err}");
        std::fs::write(&p, "7\ttoo big\n").unwrap();
        assert!(load_tsv(&p, None, None, 2).is_err());
        std::fs::write(&p, "").unwrap();
        assert!(load_tsv(&p, None, None, 2).is_err());
    }

    #[test]
    fn batching_shapes_and_determinism() {
        let task = generate_planted(&PlantedTaskSpec { num_samples: 10, ..spec() }).unwrap();
        let batches = epoch_batches(&task.corpus, 4, 3).unwrap();
        assert_eq!(batches.iter().map(|b| b.ids.len()).collect::<Vec<_>>(), vec![4, 4, 2]);
        assert_eq!(batches, epoch_batches(&task.corpus, 4, 3).unwrap());
        assert_ne!(batches, epoch_batches(&task.corpus, 4, 4).unwrap());
        assert!(epoch_batches(&task.corpus, 0, 0).is_err());
    }

    #[test]
    fn padding_is_masked() {
        let corpus = Corpus {
            examples: vec![
                Example { tokens: vec![2, 3, 4], label: 0 },
                Example { tokens: vec![5], label: 1 },
            ],
            vocab: HashMap::new(),
            num_classes: 2,
            split: "t".into(),
        };
        let batches = epoch_batches(&corpus, 2, 0).unwrap();
        let b = &batches[0];
        for (row, m) in b.ids.iter().zip(&b.mask) {
            assert_eq!(row.len(), 3);
            for (t, &keep) in row.iter().zip(m) {
                assert_eq!(keep, *t != PAD_ID || row[0] == PAD_ID);
            }
        }
    }

    #[test]
    fn split_fractions() {
        let task = generate_planted(&PlantedTaskSpec { num_samples: 100, ..spec() }).unwrap();
        let (train, val) = task.corpus.split_at(0.8).unwrap();
        assert_eq!(train.len(), 80);
        assert_eq!(val.len(), 20);
        assert_eq!(train.split, "train");
    }
}
