//! Versioned binary checkpoints.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic      8 bytes  "LSTCKPT\0"
//! version    u32
//! header     u64 length + UTF-8 JSON (kind, config, labels, vocab, graph meta)
//! blocks     u32 count, then per block:
//!            u32 name length + name, u64 rows, u64 cols, rows*cols f64
//! ```
//!
//! Tensors live only in the blocks, so a save/load round trip is bit-exact.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::config::TrainConfig;
use super::model::{Tagger, Vocab};
use crate::data::TagSet;
use crate::error::{Error, Result};
use crate::fusion::{FusionParams, Linear, ModelParams, ToyEncoder};
use crate::graph::LabelGraph;
use crate::tensor::Matrix;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"LSTCKPT\0";
pub const CHECKPOINT_VERSION: u32 = 1;

const GRAPH_BLOCK: &str = "source_graph.nodes";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CheckpointKind {
    Source,
    Target,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub kind: CheckpointKind,
    pub tagger: Tagger,
}

#[derive(Serialize, Deserialize)]
struct GraphMeta {
    labels: Vec<String>,
    threshold: f64,
    degenerate: bool,
}

#[derive(Serialize, Deserialize)]
struct Header {
    kind: CheckpointKind,
    config: TrainConfig,
    labels: Vec<String>,
    vocab: Vec<String>,
    source_graph: Option<GraphMeta>,
}

fn bad(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| bad("truncated checkpoint"))?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn len(&mut self) -> Result<usize> {
        usize::try_from(self.u64()?).map_err(|_| bad("length overflow"))
    }
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let t = &self.tagger;
        let header = Header {
            kind: self.kind,
            config: t.config.clone(),
            labels: t.labels().to_vec(),
            vocab: t.vocab.tokens().to_vec(),
            source_graph: t.source_graph.as_ref().map(|g| GraphMeta {
                labels: g.labels().to_vec(),
                threshold: g.threshold(),
                degenerate: g.is_degenerate(),
            }),
        };
        let json = serde_json::to_vec(&header)?;

        let mut blocks: Vec<(String, &Matrix)> = t.params.named();
        if let Some(g) = &t.source_graph {
            blocks.push((GRAPH_BLOCK.into(), g.nodes()));
        }

        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        out.extend_from_slice(&(blocks.len() as u32).to_le_bytes());
        for (name, m) in blocks {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(m.rows() as u64).to_le_bytes());
            out.extend_from_slice(&(m.cols() as u64).to_le_bytes());
            for v in m.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8)? != CHECKPOINT_MAGIC {
            return Err(bad("not a checkpoint (bad magic)"));
        }
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(bad(format!("unsupported checkpoint version {version}")));
        }
        let header_len = r.len()?;
        let header: Header = serde_json::from_slice(r.take(header_len)?)
            .map_err(|e| bad(format!("bad header: {e}")))?;

        let mut blocks: BTreeMap<String, Matrix> = BTreeMap::new();
        for _ in 0..r.u32()? {
            let name_len = r.u32()? as usize;
            let name = String::from_utf8(r.take(name_len)?.to_vec())
                .map_err(|_| bad("block name is not UTF-8"))?;
            let rows = r.len()?;
            let cols = r.len()?;
            let n = rows.checked_mul(cols).ok_or_else(|| bad("block size overflow"))?;
            let raw = r.take(n.checked_mul(8).ok_or_else(|| bad("block size overflow"))?)?;
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            let m = Matrix::new(rows, cols, data).map_err(|e| bad(e.to_string()))?;
            if blocks.insert(name.clone(), m).is_some() {
                return Err(bad(format!("duplicate block {name}")));
            }
        }
        if r.pos != bytes.len() {
            return Err(bad("trailing bytes after last block"));
        }

        let source_graph = match &header.source_graph {
            Some(meta) => {
                let nodes = blocks
                    .remove(GRAPH_BLOCK)
                    .ok_or_else(|| bad("graph metadata without node block"))?;
                if nodes.rows() != meta.labels.len() {
                    return Err(bad("graph node block does not match its labels"));
                }
                Some(LabelGraph::from_normalized(
                    meta.labels.clone(),
                    nodes,
                    meta.degenerate,
                    meta.threshold,
                ))
            }
            None => None,
        };
        let params = params_from_blocks(blocks)?;
        let tagger = Tagger::new(
            header.config,
            TagSet::new(&header.labels),
            Vocab::from_tokens(header.vocab),
            params,
            source_graph,
        );
        Ok(Self {
            kind: header.kind,
            tagger,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    /// Reads a checkpoint and, in file encoder mode, its embedding file.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let mut ck = Self::from_bytes(&std::fs::read(path)?)?;
        ck.tagger.attach_embeddings_from_config()?;
        Ok(ck)
    }

    /// Hex SHA-256 of the serialised checkpoint.
    pub fn sha256(&self) -> Result<String> {
        let digest = Sha256::digest(self.to_bytes()?);
        Ok(digest.iter().map(|b| format!("{b:02x}")).collect())
    }
}

fn params_from_blocks(mut blocks: BTreeMap<String, Matrix>) -> Result<ModelParams> {
    fn take(blocks: &mut BTreeMap<String, Matrix>, name: &str) -> Result<Matrix> {
        blocks
            .remove(name)
            .ok_or_else(|| bad(format!("missing block {name}")))
    }
    fn linear(blocks: &mut BTreeMap<String, Matrix>, prefix: &str) -> Result<Linear> {
        Ok(Linear {
            weight: take(blocks, &format!("{prefix}.weight"))?,
            bias: take(blocks, &format!("{prefix}.bias"))?,
        })
    }

    let encoder = if blocks.contains_key("encoder.embeddings") {
        Some(ToyEncoder {
            embeddings: take(&mut blocks, "encoder.embeddings")?,
            mix_prev: take(&mut blocks, "encoder.mix_prev")?,
            mix_center: take(&mut blocks, "encoder.mix_center")?,
            mix_next: take(&mut blocks, "encoder.mix_next")?,
            mix_bias: take(&mut blocks, "encoder.mix_bias")?,
        })
    } else {
        None
    };
    let fusion = if blocks.contains_key("fusion.label_reps") {
        let label_reps = take(&mut blocks, "fusion.label_reps")?;
        let proj = linear(&mut blocks, "fusion.proj")?;
        let mut gcn = Vec::new();
        while let Some(w) = blocks.remove(&format!("fusion.gcn.{}", gcn.len())) {
            gcn.push(w);
        }
        let out_proj = linear(&mut blocks, "fusion.out_proj")?;
        Some(FusionParams {
            label_reps,
            proj,
            gcn,
            out_proj,
        })
    } else {
        None
    };
    let fc_cls = linear(&mut blocks, "fc_cls")?;
    let fc_aux = if blocks.contains_key("fc_aux.weight") {
        Some(linear(&mut blocks, "fc_aux")?)
    } else {
        None
    };
    if let Some(name) = blocks.keys().next() {
        return Err(bad(format!("unexpected block {name}")));
    }
    Ok(ModelParams {
        encoder,
        fusion,
        fc_cls,
        fc_aux,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tagger() -> Tagger {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let labels = vec!["A".to_string(), "B".to_string()];
        let tags = TagSet::new(&labels);
        let params = ModelParams {
            encoder: Some(ToyEncoder::init(4, 3, &mut rng)),
            fusion: Some(FusionParams::init(2, 3, 2, &mut rng)),
            fc_cls: Linear::init(3, tags.len(), &mut rng),
            fc_aux: Some(Linear::init(3, 2, &mut rng)),
        };
        let rows = Matrix::from_rows(&[vec![0.9, 0.1], vec![0.3, 0.7]]).unwrap();
        let graph = LabelGraph::build(labels, &rows, 1.5).unwrap();
        Tagger::new(
            TrainConfig::default(),
            tags,
            Vocab::from_tokens(vec!["x".into(), "y".into(), "z".into()]),
            params,
            Some(graph),
        )
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let ck = Checkpoint {
            kind: CheckpointKind::Target,
            tagger: tagger(),
        };
        let bytes = ck.to_bytes().unwrap();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.to_bytes().unwrap(), bytes);
        assert_eq!(back.sha256().unwrap(), ck.sha256().unwrap());
    }

    #[test]
    fn corrupt_input_is_rejected() {
        let ck = Checkpoint {
            kind: CheckpointKind::Source,
            tagger: tagger(),
        };
        let bytes = ck.to_bytes().unwrap();
        assert!(matches!(Checkpoint::from_bytes(b"nonsense"), Err(Error::Checkpoint(_))));
        assert!(matches!(
            Checkpoint::from_bytes(&bytes[..bytes.len() - 3]),
            Err(Error::Checkpoint(_))
        ));
        let mut wrong_version = bytes.clone();
        wrong_version[8] = 9;
        assert!(matches!(Checkpoint::from_bytes(&wrong_version), Err(Error::Checkpoint(_))));
    }
}
