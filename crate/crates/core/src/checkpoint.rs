//! Checkpoint directories.
//!
//! ```text
//! manifest.json   tensor names, shapes, segment offsets, payload digests
//! config.json     model config, ablation flags, tokenizer digest
//! tokenizer.json
//! nodes.jsonl / edges.jsonl
//! model.bin       encoder-decoder tensors, little-endian f64
//! graph.bin       graph encoder + node classifier tensors
//! ```
//!
//! The checkpoint hash is the SHA-256 of `manifest.json`, which itself pins
//! every payload digest.

use std::fs;
use std::io::BufReader;
use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autograd::Matrix;
use crate::error::{Error, Result};
use crate::graph_encoder::Provenance;
use crate::kg::load_graph;
use crate::model::{AblationFlags, ModelConfig, RecommenderModel};
use crate::params::ParamGroup;
use crate::tokenizer::Tokenizer;

pub const MODEL_SEGMENT: &str = "model.bin";
pub const GRAPH_SEGMENT: &str = "graph.bin";
const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: [usize; 2],
    pub segment: String,
    /// Byte offset inside the segment.
    pub offset: usize,
    pub group: ParamGroup,
    pub trainable: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub tensors: Vec<TensorEntry>,
    /// Segment file name to hex SHA-256 of its bytes.
    pub payloads: Vec<(String, String)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointConfig {
    pub model: ModelConfig,
    pub ablation: AblationFlags,
    pub tokenizer_hash: String,
    pub embedding_provenance: Provenance,
    pub num_entities: usize,
    pub vocab_size: usize,
}

fn read(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

fn read_string(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

fn write(path: &Path, bytes: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Writes `model` into `dir` (created if missing) and returns the hash.
pub fn save(model: &RecommenderModel, dir: &Path) -> Result<String> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut model_bytes = Vec::new();
    let mut graph_bytes = Vec::new();
    let mut tensors = Vec::new();
    for e in model.params().entries() {
        let (segment, buf) = if e.group.is_graph_segment() {
            (GRAPH_SEGMENT, &mut graph_bytes)
        } else {
            (MODEL_SEGMENT, &mut model_bytes)
        };
        tensors.push(TensorEntry {
            name: e.name.clone(),
            shape: [e.value.nrows(), e.value.ncols()],
            segment: segment.to_string(),
            offset: buf.len(),
            group: e.group,
            trainable: e.trainable,
        });
        for v in e.value.iter() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    let manifest = Manifest {
        format_version: FORMAT_VERSION,
        tensors,
        payloads: vec![
            (MODEL_SEGMENT.to_string(), sha256_hex(&model_bytes)),
            (GRAPH_SEGMENT.to_string(), sha256_hex(&graph_bytes)),
        ],
    };
    let config = CheckpointConfig {
        model: model.config().clone(),
        ablation: model.ablation(),
        tokenizer_hash: model.tokenizer().hash(),
        embedding_provenance: model.provenance(),
        num_entities: model.kg().num_entities(),
        vocab_size: model.tokenizer().vocab_size(),
    };
    write(&dir.join(MODEL_SEGMENT), &model_bytes)?;
    write(&dir.join(GRAPH_SEGMENT), &graph_bytes)?;
    write(&dir.join("tokenizer.json"), model.tokenizer().to_json()?)?;
    write(&dir.join("config.json"), serde_json::to_string_pretty(&config)?)?;
    let mut nodes = Vec::new();
    model.kg().write_nodes(&mut nodes)?;
    write(&dir.join("nodes.jsonl"), nodes)?;
    let mut edges = Vec::new();
    model.kg().write_edges(&mut edges)?;
    write(&dir.join("edges.jsonl"), edges)?;
    let manifest_bytes = serde_json::to_vec_pretty(&manifest)?;
    write(&dir.join("manifest.json"), &manifest_bytes)?;
    Ok(sha256_hex(&manifest_bytes))
}

pub fn checkpoint_hash(dir: &Path) -> Result<String> {
    Ok(sha256_hex(&read(&dir.join("manifest.json"))?))
}

pub fn read_manifest(dir: &Path) -> Result<Manifest> {
    Ok(serde_json::from_str(&read_string(&dir.join("manifest.json"))?)?)
}

/// Reads one payload segment, verifying its digest.
fn read_segment(dir: &Path, manifest: &Manifest, segment: &str) -> Result<Vec<u8>> {
    let bytes = read(&dir.join(segment))?;
    let expected = manifest
        .payloads
        .iter()
        .find(|(name, _)| name == segment)
        .map(|(_, h)| h.as_str())
        .ok_or_else(|| Error::Data(format!("manifest lists no digest for {segment}")))?;
    if sha256_hex(&bytes) != expected {
        return Err(Error::Data(format!("{segment} does not match its manifest digest")));
    }
    Ok(bytes)
}

fn decode_tensor(bytes: &[u8], entry: &TensorEntry) -> Result<Matrix> {
    let [rows, cols] = entry.shape;
    let len = rows * cols * 8;
    let slice = bytes
        .get(entry.offset..entry.offset + len)
        .ok_or_else(|| Error::Data(format!("tensor {} runs past the end of {}", entry.name, entry.segment)))?;
    let values = slice
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
        .collect();
    Ok(Array2::from_shape_vec((rows, cols), values).expect("shape matches length"))
}

/// Tensors of one segment by name, without building a model.
pub fn load_segment(dir: &Path, segment: &str) -> Result<Vec<(String, Matrix)>> {
    let manifest = read_manifest(dir)?;
    let bytes = read_segment(dir, &manifest, segment)?;
    manifest
        .tensors
        .iter()
        .filter(|t| t.segment == segment)
        .map(|t| Ok((t.name.clone(), decode_tensor(&bytes, t)?)))
        .collect()
}

pub fn load(dir: &Path) -> Result<RecommenderModel> {
    let config: CheckpointConfig = serde_json::from_str(&read_string(&dir.join("config.json"))?)?;
    let tokenizer = Tokenizer::from_json(&read_string(&dir.join("tokenizer.json"))?)?;
    if tokenizer.hash() != config.tokenizer_hash {
        return Err(Error::Data("tokenizer does not match the checkpoint config".into()));
    }
    let nodes_path = dir.join("nodes.jsonl");
    let edges_path = dir.join("edges.jsonl");
    let nodes = fs::File::open(&nodes_path).map_err(|e| Error::io(&nodes_path, e))?;
    let edges = fs::File::open(&edges_path).map_err(|e| Error::io(&edges_path, e))?;
    let kg = load_graph(BufReader::new(nodes), BufReader::new(edges))?;
    if kg.num_entities() != config.num_entities {
        return Err(Error::Data("graph size does not match the checkpoint config".into()));
    }
    let mut model = RecommenderModel::skeleton(config.model, tokenizer, kg, config.ablation, 0)?;
    let manifest = read_manifest(dir)?;
    if manifest.format_version != FORMAT_VERSION {
        return Err(Error::Data(format!(
            "unsupported checkpoint format {}",
            manifest.format_version
        )));
    }
    if manifest.tensors.len() != model.params().len() {
        return Err(Error::Data(format!(
            "checkpoint has {} tensors, model expects {}",
            manifest.tensors.len(),
            model.params().len()
        )));
    }
    for segment in [MODEL_SEGMENT, GRAPH_SEGMENT] {
        let bytes = read_segment(dir, &manifest, segment)?;
        for t in manifest.tensors.iter().filter(|t| t.segment == segment) {
            model.set_param(&t.name, decode_tensor(&bytes, t)?)?;
            let id = model.params().id(&t.name).expect("set_param checked the name");
            model.params_mut().set_trainable(id, t.trainable);
        }
    }
    model.set_provenance(config.embedding_provenance);
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fixtures;
    use crate::model::TrainableSpec;

    fn model() -> RecommenderModel {
        let kg = fixtures::small_kg();
        let tok = Tokenizer::word(kg.names());
        let config = ModelConfig {
            d_model: 8,
            heads: 2,
            ffn_dim: 8,
            max_positions: 16,
            max_context_len: 16,
            max_response_len: 8,
            ..ModelConfig::desk()
        };
        RecommenderModel::new(config, tok, kg, AblationFlags::default(), 1).unwrap()
    }

    #[test]
    fn round_trip_preserves_everything() {
        let dir = tempfile::tempdir().unwrap();
        let mut m = model();
        m.apply_trainability(&TrainableSpec::Layers {
            encoder: vec![1],
            decoder: vec![],
        })
        .unwrap();
        let hash = save(&m, dir.path()).unwrap();
        assert_eq!(hash, checkpoint_hash(dir.path()).unwrap());
        let back = load(dir.path()).unwrap();
        assert_eq!(back.params(), m.params());
        assert_eq!(back.kg(), m.kg());
        assert_eq!(back.provenance(), m.provenance());
        assert_eq!(back.count_parameters(), m.count_parameters());
    }

    #[test]
    fn graph_segment_loads_alone() {
        let dir = tempfile::tempdir().unwrap();
        let m = model();
        save(&m, dir.path()).unwrap();
        fs::remove_file(dir.path().join(MODEL_SEGMENT)).unwrap();
        let graph = load_segment(dir.path(), GRAPH_SEGMENT).unwrap();
        let emb = graph.iter().find(|(n, _)| n == "graph.entity_embeddings").unwrap();
        assert_eq!(&emb.1, m.params().get(m.handles().graph.embeddings));
    }

    #[test]
    fn corrupted_payload_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        save(&model(), dir.path()).unwrap();
        let path = dir.path().join(GRAPH_SEGMENT);
        let mut bytes = fs::read(&path).unwrap();
        bytes[0] ^= 1;
        fs::write(&path, bytes).unwrap();
        assert!(matches!(load(dir.path()), Err(Error::Data(_))));
    }
}
