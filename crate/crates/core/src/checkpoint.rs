//! Named-tensor checkpoint file.
//!
//! Layout: magic `FGCKPT01` (8 bytes) | u32 LE tensor count | per tensor:
//! u16 LE name length, UTF-8 name, u8 dtype code (0 = 64-bit real), u8 rank,
//! rank x u32 LE dims, raw little-endian data.
//!
//! The model configuration rides along as `config.*` scalar tensors so a
//! checkpoint is self-contained; integer config fields are stored through
//! `f64::from_bits` for exact round trips. Tensor order is preserved, which
//! makes save -> load -> save byte-identical.

use std::io::{Read, Write};
use std::path::Path;

use crate::adapters::PrunedLinear;
use crate::tensor::Tensor;
use crate::transformer::{AdapterKind, Model, ModelConfig, PrunedModel};
use crate::{Error, Result};

pub const MAGIC: &[u8; 8] = b"FGCKPT01";
const DTYPE_F64: u8 = 0;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub tensors: Vec<(String, Tensor<f64>)>,
}

/// Tracks the byte offset for format diagnostics.
struct Cursor<R> {
    inner: R,
    offset: u64,
}

impl<R: Read> Cursor<R> {
    fn fail(&self, msg: impl Into<String>) -> Error {
        Error::Format { offset: self.offset, msg: msg.into() }
    }

    fn read_exact(&mut self, buf: &mut [u8], what: &str) -> Result<()> {
        self.inner
            .read_exact(buf)
            .map_err(|e| self.fail(format!("truncated while reading {what}: {e}")))?;
        self.offset += buf.len() as u64;
        Ok(())
    }

    fn read_u16(&mut self, what: &str) -> Result<u16> {
        let mut b = [0u8; 2];
        self.read_exact(&mut b, what)?;
        Ok(u16::from_le_bytes(b))
    }

    fn read_u32(&mut self, what: &str) -> Result<u32> {
        let mut b = [0u8; 4];
        self.read_exact(&mut b, what)?;
        Ok(u32::from_le_bytes(b))
    }

    fn read_u8(&mut self, what: &str) -> Result<u8> {
        let mut b = [0u8; 1];
        self.read_exact(&mut b, what)?;
        Ok(b[0])
    }
}

impl Checkpoint {
    pub fn get(&self, name: &str) -> Option<&Tensor<f64>> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    fn require(&self, name: &str) -> Result<&Tensor<f64>> {
        self.get(name)
            .ok_or_else(|| Error::Format { offset: 0, msg: format!("missing tensor '{name}'") })
    }

    fn scalar(&self, name: &str) -> Result<f64> {
        let t = self.require(name)?;
        if !t.is_scalar() {
            return Err(Error::Format {
                offset: 0,
                msg: format!("'{name}' is not a scalar"),
            });
        }
        Ok(t.item())
    }

    fn usize_field(&self, name: &str) -> Result<usize> {
        Ok(f64::to_bits(self.scalar(name)?) as usize)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        f.write_all(MAGIC)?;
        let count = u32::try_from(self.tensors.len())
            .map_err(|_| Error::Config("too many tensors for checkpoint format".into()))?;
        f.write_all(&count.to_le_bytes())?;
        for (name, tensor) in &self.tensors {
            let name_len = u16::try_from(name.len())
                .map_err(|_| Error::Config(format!("tensor name '{name}' too long")))?;
            f.write_all(&name_len.to_le_bytes())?;
            f.write_all(name.as_bytes())?;
            f.write_all(&[DTYPE_F64])?;
            let rank = u8::try_from(tensor.shape().len())
                .map_err(|_| Error::Config("tensor rank exceeds format".into()))?;
            f.write_all(&[rank])?;
            for &d in tensor.shape() {
                let d = u32::try_from(d)
                    .map_err(|_| Error::Config(format!("dimension {d} exceeds format")))?;
                f.write_all(&d.to_le_bytes())?;
            }
            for &v in tensor.data() {
                f.write_all(&v.to_le_bytes())?;
            }
        }
        f.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Checkpoint> {
        let file = std::fs::File::open(path)
            .map_err(|e| Error::Input(format!("cannot open {}: {e}", path.display())))?;
        let mut c = Cursor { inner: std::io::BufReader::new(file), offset: 0 };
        let mut magic = [0u8; 8];
        c.read_exact(&mut magic, "magic")?;
        if &magic != MAGIC {
            return Err(Error::Format { offset: 0, msg: "bad magic; not a checkpoint file".into() });
        }
        let count = c.read_u32("tensor count")?;
        let mut tensors = Vec::with_capacity(count as usize);
        for i in 0..count {
            let name_len = c.read_u16("name length")? as usize;
            let mut name_buf = vec![0u8; name_len];
            c.read_exact(&mut name_buf, "name")?;
            let name = String::from_utf8(name_buf)
                .map_err(|_| c.fail(format!("tensor {i}: name is not UTF-8")))?;
            let dtype = c.read_u8("dtype")?;
            if dtype != DTYPE_F64 {
                return Err(c.fail(format!("tensor '{name}': unknown dtype code {dtype}")));
            }
            let rank = c.read_u8("rank")? as usize;
            let mut shape = Vec::with_capacity(rank);
            let mut len = 1usize;
            for _ in 0..rank {
                let d = c.read_u32("dimension")? as usize;
                len = len.checked_mul(d).ok_or_else(|| {
                    c.fail(format!("tensor '{name}': dimension overflow"))
                })?;
                shape.push(d);
            }
            let mut data = Vec::with_capacity(len);
            let mut b = [0u8; 8];
            for _ in 0..len {
                c.read_exact(&mut b, "tensor data")?;
                data.push(f64::from_le_bytes(b));
            }
            tensors.push((name, Tensor::from_vec(shape, data)?));
        }
        Ok(Checkpoint { tensors })
    }

    // ── dense model ─────────────────────────────────────────────────────

    pub fn from_model(model: &Model<f64>) -> Checkpoint {
        let mut tensors = config_tensors(&model.config, false);
        model.visit_params(&mut |name, _, t| {
            tensors.push((name.to_string(), t.clone()));
        });
        Checkpoint { tensors }
    }

    pub fn config(&self) -> Result<ModelConfig> {
        Ok(ModelConfig {
            num_blocks: self.usize_field("config.num_blocks")?,
            model_dim: self.usize_field("config.model_dim")?,
            num_heads: self.usize_field("config.num_heads")?,
            ffn_dim: self.usize_field("config.ffn_dim")?,
            vocab_size: self.usize_field("config.vocab_size")?,
            max_seq_len: self.usize_field("config.max_seq_len")?,
            num_classes: self.usize_field("config.num_classes")?,
            adapter_kind: AdapterKind::from_code(self.usize_field("config.adapter_kind")? as u8)?,
            lora_rank: self.usize_field("config.lora_rank")?,
            lora_scale: self.scalar("config.lora_scale")?,
            gate_mlp: self.usize_field("config.gate_mlp")? != 0,
            planted_embedding: self.usize_field("config.planted_embedding")? != 0,
            init_seed: f64::to_bits(self.scalar("config.init_seed")?),
        })
    }

    pub fn is_pruned(&self) -> Result<bool> {
        Ok(self.usize_field("config.pruned")? != 0)
    }

    pub fn to_model(&self) -> Result<Model<f64>> {
        if self.is_pruned()? {
            return Err(Error::Input(
                "checkpoint holds a pruned model; load it as one".into(),
            ));
        }
        let config = self.config()?;
        let mut model = Model::new(config)?;
        let mut failure: Option<Error> = None;
        model.visit_params_mut(&mut |name, _, t| {
            if failure.is_some() {
                return;
            }
            match self.get(name) {
                Some(stored) if stored.shape() == t.shape() => *t = stored.clone(),
                Some(stored) => {
                    failure = Some(Error::Shape(format!(
                        "tensor '{name}': checkpoint shape {:?} vs model shape {:?}",
                        stored.shape(),
                        t.shape()
                    )))
                }
                None => {
                    failure = Some(Error::Format {
                        offset: 0,
                        msg: format!("missing tensor '{name}'"),
                    })
                }
            }
        });
        match failure {
            Some(e) => Err(e),
            None => Ok(model),
        }
    }

    // ── pruned model ────────────────────────────────────────────────────

    pub fn from_pruned(model: &PrunedModel<f64>) -> Checkpoint {
        let mut tensors = config_tensors(&model.config, true);
        tensors.push(("embedding".into(), model.embedding.clone()));
        tensors.push(("positional".into(), model.positional.clone()));
        for (i, block) in model.blocks.iter().enumerate() {
            for (l, lname) in crate::transformer::BLOCK_LAYER_NAMES.iter().enumerate() {
                let layer = &block.layers[l];
                let base = format!("block{i}.{lname}");
                tensors.push((format!("{base}.w_compact"), layer.w_compact.clone()));
                tensors.push((format!("{base}.kept_rows"), index_tensor(&layer.kept_rows)));
                tensors.push((format!("{base}.kept_cols"), index_tensor(&layer.kept_cols)));
                tensors.push((
                    format!("{base}.original_shape"),
                    index_tensor(&[layer.original_shape.0, layer.original_shape.1]),
                ));
                if let Some(b) = &layer.bias_compact {
                    tensors.push((format!("{base}.bias_compact"), b.clone()));
                }
            }
            tensors.push((format!("block{i}.ln1.gamma"), block.ln1.gamma.clone()));
            tensors.push((format!("block{i}.ln1.beta"), block.ln1.beta.clone()));
            tensors.push((format!("block{i}.ln2.gamma"), block.ln2.gamma.clone()));
            tensors.push((format!("block{i}.ln2.beta"), block.ln2.beta.clone()));
        }
        tensors.push(("head.w1".into(), model.head.w1.clone()));
        tensors.push(("head.b1".into(), model.head.b1.clone()));
        tensors.push(("head.w2".into(), model.head.w2.clone()));
        tensors.push(("head.b2".into(), model.head.b2.clone()));
        Checkpoint { tensors }
    }

    pub fn to_pruned(&self) -> Result<PrunedModel<f64>> {
        if !self.is_pruned()? {
            return Err(Error::Input("checkpoint holds a dense model, not a pruned one".into()));
        }
        let config = self.config()?;
        let mut blocks = Vec::with_capacity(config.num_blocks);
        for i in 0..config.num_blocks {
            let mut layers = Vec::with_capacity(6);
            for lname in crate::transformer::BLOCK_LAYER_NAMES {
                let base = format!("block{i}.{lname}");
                let shape = indices_from(self.require(&format!("{base}.original_shape"))?)?;
                if shape.len() != 2 {
                    return Err(Error::Format {
                        offset: 0,
                        msg: format!("'{base}.original_shape' must have 2 entries"),
                    });
                }
                layers.push(PrunedLinear {
                    w_compact: self.require(&format!("{base}.w_compact"))?.clone(),
                    kept_rows: indices_from(self.require(&format!("{base}.kept_rows"))?)?,
                    kept_cols: indices_from(self.require(&format!("{base}.kept_cols"))?)?,
                    original_shape: (shape[0], shape[1]),
                    bias_compact: self.get(&format!("{base}.bias_compact")).cloned(),
                });
            }
            blocks.push(crate::transformer::PrunedBlock {
                layers: layers
                    .try_into()
                    .map_err(|_| Error::Format { offset: 0, msg: "block layer count".into() })?,
                ln1: crate::transformer::LayerNormParams {
                    gamma: self.require(&format!("block{i}.ln1.gamma"))?.clone(),
                    beta: self.require(&format!("block{i}.ln1.beta"))?.clone(),
                },
                ln2: crate::transformer::LayerNormParams {
                    gamma: self.require(&format!("block{i}.ln2.gamma"))?.clone(),
                    beta: self.require(&format!("block{i}.ln2.beta"))?.clone(),
                },
            });
        }
        Ok(PrunedModel {
            config,
            embedding: self.require("embedding")?.clone(),
            positional: self.require("positional")?.clone(),
            blocks,
            head: crate::transformer::ClassifierHead {
                w1: self.require("head.w1")?.clone(),
                b1: self.require("head.b1")?.clone(),
                w2: self.require("head.w2")?.clone(),
                b2: self.require("head.b2")?.clone(),
            },
        })
    }
}

fn bits_scalar(v: usize) -> Tensor<f64> {
    Tensor::scalar(f64::from_bits(v as u64))
}

fn config_tensors(config: &ModelConfig, pruned: bool) -> Vec<(String, Tensor<f64>)> {
    vec![
        ("config.num_blocks".into(), bits_scalar(config.num_blocks)),
        ("config.model_dim".into(), bits_scalar(config.model_dim)),
        ("config.num_heads".into(), bits_scalar(config.num_heads)),
        ("config.ffn_dim".into(), bits_scalar(config.ffn_dim)),
        ("config.vocab_size".into(), bits_scalar(config.vocab_size)),
        ("config.max_seq_len".into(), bits_scalar(config.max_seq_len)),
        ("config.num_classes".into(), bits_scalar(config.num_classes)),
        ("config.adapter_kind".into(), bits_scalar(config.adapter_kind.code() as usize)),
        ("config.lora_rank".into(), bits_scalar(config.lora_rank)),
        ("config.lora_scale".into(), Tensor::scalar(config.lora_scale)),
        ("config.gate_mlp".into(), bits_scalar(config.gate_mlp as usize)),
        ("config.planted_embedding".into(), bits_scalar(config.planted_embedding as usize)),
        ("config.init_seed".into(), Tensor::scalar(f64::from_bits(config.init_seed))),
        ("config.pruned".into(), bits_scalar(pruned as usize)),
    ]
}

fn index_tensor(ix: &[usize]) -> Tensor<f64> {
    Tensor::vector(ix.iter().map(|&i| f64::from_bits(i as u64)).collect())
}

fn indices_from(t: &Tensor<f64>) -> Result<Vec<usize>> {
    Ok(t.data().iter().map(|&v| f64::to_bits(v) as usize).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::transformer::AdapterKind;

    fn toy_model() -> Model<f64> {
        Model::new(ModelConfig {
            num_blocks: 2,
            model_dim: 8,
            num_heads: 2,
            ffn_dim: 12,
            vocab_size: 10,
            max_seq_len: 5,
            num_classes: 3,
            adapter_kind: AdapterKind::GatesPlusLora,
            lora_rank: 2,
            lora_scale: 0.5,
            gate_mlp: true,
            planted_embedding: false,
            init_seed: 0xDEAD_BEEF_CAFE_F00D,
        })
        .unwrap()
    }

    #[test]
    fn model_round_trip_bit_exact() {
        let mut m = toy_model();
        // perturb away from the constructor state so restore is exercised
        m.blocks[0].wq.gates.as_mut().unwrap().cols.mu_mut().data_mut()[3] = -0.25;
        m.head.b2.data_mut()[1] = 0.125;
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.ckpt");
        Checkpoint::from_model(&m).save(&p).unwrap();
        let restored = Checkpoint::load(&p).unwrap().to_model().unwrap();
        assert_eq!(restored, m);
        let batch = vec![vec![2, 3, 4]];
        assert_eq!(
            restored.forward_eval(&batch, None).unwrap(),
            m.forward_eval(&batch, None).unwrap()
        );
    }

    #[test]
    fn save_load_save_byte_identical() {
        let m = toy_model();
        let dir = tempfile::tempdir().unwrap();
        let (p1, p2) = (dir.path().join("a.ckpt"), dir.path().join("b.ckpt"));
        Checkpoint::from_model(&m).save(&p1).unwrap();
        Checkpoint::load(&p1).unwrap().save(&p2).unwrap();
        assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());
    }

    #[test]
    fn pruned_round_trip() {
        let mut m = toy_model();
        m.blocks[1].wv.gates.as_mut().unwrap().rows.mu_mut().data_mut()[0] = -1.0;
        let pruned = m.prune(0.0).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("p.ckpt");
        Checkpoint::from_pruned(&pruned).save(&p).unwrap();
        let loaded = Checkpoint::load(&p).unwrap();
        assert!(loaded.is_pruned().unwrap());
        let restored = loaded.to_pruned().unwrap();
        assert_eq!(restored, pruned);
        assert!(loaded.to_model().is_err());
    }

    #[test]
    fn bad_magic_and_truncation() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.ckpt");
        std::fs::write(&p, b"NOTMAGIC\x00\x00\x00\x00").unwrap();
        match Checkpoint::load(&p) {
            Err(Error::Format { offset, .. }) => assert_eq!(offset, 0),
            other => panic!("{other:?}"),
        }
        // truncate a real checkpoint mid-tensor
        let good = dir.path().join("g.ckpt");
        Checkpoint::from_model(&toy_model()).save(&good).unwrap();
        let bytes = std::fs::read(&good).unwrap();
        std::fs::write(&p, &bytes[..bytes.len() / 2]).unwrap();
        match Checkpoint::load(&p) {
            Err(Error::Format { offset, msg }) => {
                assert!(offset > 0);
                assert!(msg.contains("truncated"), "{msg}");
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn mismatched_dimension_is_a_shape_error() {
        let m = toy_model();
        let mut ck = Checkpoint::from_model(&m);
        // widen the stored head weight behind the config's back
        for (name, t) in &mut ck.tensors {
            if name == "head.w1" {
                *t = Tensor::zeros(vec![16, 16]);
            }
        }
        match ck.to_model() {
            Err(Error::Shape(msg)) => assert!(msg.contains("head.w1"), "{msg}"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn missing_tensor_reported_by_name() {
        let m = toy_model();
        let mut ck = Checkpoint::from_model(&m);
        ck.tensors.retain(|(n, _)| n != "block0.wk.w_a");
        let err = ck.to_model().unwrap_err().to_string();
        assert!(err.contains("block0.wk.w_a"), "{err}");
    }
}
