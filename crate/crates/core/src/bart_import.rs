//! Import of pretrained BART-style encoder–decoder weights.
//!
//! Reads a `model.safetensors` file in the Hugging Face layout together
//! with its `vocab.json` / `merges.txt`. Linear weights are stored there as
//! `[out, in]` and are transposed; learned positions skip the two offset
//! rows; token rows for the placeholder and speaker markers, which the
//! pretrained vocabulary lacks, are freshly initialised.

use std::collections::HashMap;

use ndarray::{s, Array2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use safetensors::{Dtype, SafeTensors};

use crate::autograd::Matrix;
use crate::error::{Error, Result};
use crate::kg::KnowledgeGraph;
use crate::model::{AblationFlags, ModelConfig, Profile, RecommenderModel};
use crate::params::{normal_matrix, ParamGroup};
use crate::tokenizer::Tokenizer;

/// Rows at the start of each position table that no token uses.
pub const POSITION_OFFSET: usize = 2;

#[derive(Debug, Clone, PartialEq)]
struct RawTensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl RawTensor {
    fn matrix(&self) -> Matrix {
        let (r, c) = match self.shape.as_slice() {
            [n] => (1, *n),
            [r, c] => (*r, *c),
            _ => (1, self.data.len()),
        };
        Array2::from_shape_vec((r, c), self.data.clone()).expect("shape matches data")
    }
}

fn to_f64(dtype: Dtype, bytes: &[u8]) -> Result<Vec<f64>> {
    Ok(match dtype {
        Dtype::F64 => bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect(),
        Dtype::F32 => bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
            .collect(),
        Dtype::F16 => bytes
            .chunks_exact(2)
            .map(|c| half::f16::from_le_bytes([c[0], c[1]]).to_f64())
            .collect(),
        Dtype::BF16 => bytes
            .chunks_exact(2)
            .map(|c| half::bf16::from_le_bytes([c[0], c[1]]).to_f64())
            .collect(),
        other => return Err(Error::Data(format!("unsupported tensor dtype {other:?}"))),
    })
}

/// Tensors keyed by name with any leading `model.` stripped.
fn read_tensors(bytes: &[u8]) -> Result<HashMap<String, RawTensor>> {
    let st = SafeTensors::deserialize(bytes).map_err(|e| Error::Data(format!("bad safetensors file: {e}")))?;
    st.tensors()
        .into_iter()
        .map(|(name, view)| {
            let key = name.strip_prefix("model.").unwrap_or(&name).to_string();
            Ok((
                key,
                RawTensor {
                    shape: view.shape().to_vec(),
                    data: to_f64(view.dtype(), view.data())?,
                },
            ))
        })
        .collect()
}

fn get<'t>(tensors: &'t HashMap<String, RawTensor>, name: &str) -> Result<&'t RawTensor> {
    tensors
        .get(name)
        .ok_or_else(|| Error::Data(format!("pretrained weights lack {name}")))
}

fn count_layers(tensors: &HashMap<String, RawTensor>, stack: &str) -> usize {
    let prefix = format!("{stack}.layers.");
    tensors
        .keys()
        .filter_map(|k| k.strip_prefix(&prefix)?.split('.').next()?.parse::<usize>().ok())
        .map(|i| i + 1)
        .max()
        .unwrap_or(0)
}

/// Model shape read off the tensors; `heads` cannot be inferred.
fn infer_config(tensors: &HashMap<String, RawTensor>, heads: usize) -> Result<ModelConfig> {
    let shared = tensors
        .get("shared.weight")
        .or_else(|| tensors.get("encoder.embed_tokens.weight"))
        .ok_or_else(|| Error::Data("pretrained weights lack a token embedding".into()))?;
    let d_model = shared.shape[1];
    let positions = get(tensors, "encoder.embed_positions.weight")?.shape[0];
    let ffn_dim = get(tensors, "encoder.layers.0.fc1.weight")?.shape[0];
    let max_positions = positions
        .checked_sub(POSITION_OFFSET)
        .ok_or_else(|| Error::Data("position table too small".into()))?;
    let base = ModelConfig::pretrained();
    Ok(ModelConfig {
        profile: Profile::Pretrained,
        d_model,
        heads,
        ffn_dim,
        encoder_layers: count_layers(tensors, "encoder"),
        decoder_layers: count_layers(tensors, "decoder"),
        max_positions,
        max_context_len: base.max_context_len.min(max_positions),
        max_response_len: base.max_response_len.min(max_positions),
        ..base
    })
}

/// Builds a model from pretrained weights. Graph parameters are fresh and
/// entity embeddings are encoded from names with the imported encoder.
pub fn import_bart(
    weights: &[u8],
    tokenizer: Tokenizer,
    kg: KnowledgeGraph,
    heads: usize,
    ablation: AblationFlags,
    seed: u64,
) -> Result<RecommenderModel> {
    let tensors = read_tensors(weights)?;
    let config = infer_config(&tensors, heads)?;
    let mut model = RecommenderModel::skeleton(config.clone(), tokenizer, kg, ablation, seed)?;
    let vocab = model.tokenizer().vocab_size();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let names: Vec<(String, ParamGroup, (usize, usize))> = model
        .params()
        .entries()
        .iter()
        .map(|e| (e.name.clone(), e.group, e.value.dim()))
        .collect();
    for (name, group, dim) in names {
        if group.is_graph_segment() {
            continue;
        }
        let value = if name.ends_with("embed_tokens") {
            let src = tensors
                .get(&format!("{name}.weight"))
                .or_else(|| tensors.get("shared.weight"))
                .ok_or_else(|| Error::Data(format!("pretrained weights lack {name}")))?
                .matrix();
            pad_rows(&src, vocab, config.init_std, &mut rng)?
        } else if name.ends_with("embed_positions") {
            let src = get(&tensors, &format!("{name}.weight"))?.matrix();
            src.slice(s![POSITION_OFFSET..POSITION_OFFSET + config.max_positions, ..]).to_owned()
        } else if name == "final_logits_bias" {
            let src = tensors.get(&name).map(RawTensor::matrix).unwrap_or_else(|| Array2::zeros((1, 0)));
            let mut out = Array2::zeros((1, vocab));
            let n = src.ncols().min(vocab);
            out.slice_mut(s![.., ..n]).assign(&src.slice(s![.., ..n]));
            out
        } else {
            let src = get(&tensors, &name)?.matrix();
            if src.dim() == dim {
                src
            } else if src.t().dim() == dim {
                src.t().to_owned()
            } else {
                return Err(Error::Data(format!(
                    "pretrained {name} has shape {:?}, model expects {dim:?}",
                    src.dim()
                )));
            }
        };
        model.set_param(&name, value)?;
    }
    model.init_entity_embeddings(seed)?;
    Ok(model)
}

/// Keeps the pretrained rows and appends random rows up to `rows`.
fn pad_rows(src: &Matrix, rows: usize, std: f64, rng: &mut ChaCha8Rng) -> Result<Matrix> {
    let d = src.ncols();
    let keep = src.nrows().min(rows);
    let mut out = normal_matrix(rng, rows, d, std);
    out.slice_mut(s![..keep, ..]).assign(&src.slice(s![..keep, ..]));
    if src.nrows() < rows.saturating_sub(3) {
        log::warn!(
            "pretrained embedding has {} rows for a {rows}-token vocabulary",
            src.nrows()
        );
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fixtures;
    use crate::tokenizer::BpeTokenizer;
    use safetensors::tensor::TensorView;

    fn tiny_tokenizer() -> Tokenizer {
        let tokens = ["<s>", "<pad>", "</s>", "<unk>", "a", "b", "Ġ", "Ġa"];
        let vocab = tokens.iter().enumerate().map(|(i, t)| (t.to_string(), i)).collect();
        Tokenizer::Bpe(BpeTokenizer::new(vocab, vec![("Ġ".into(), "a".into())]).unwrap())
    }

    fn tensor_bytes(values: &[f32]) -> Vec<u8> {
        values.iter().flat_map(|v| v.to_le_bytes()).collect()
    }

    /// Fake pretrained file: d = 4, ffn = 6, one layer per stack, 8 tokens.
    fn fake_weights() -> Vec<u8> {
        let d = 4;
        let f = 6;
        let v = 8;
        let p = 10 + POSITION_OFFSET;
        let mut specs: Vec<(String, Vec<usize>)> = vec![
            ("model.shared.weight".into(), vec![v, d]),
            ("model.encoder.embed_positions.weight".into(), vec![p, d]),
            ("model.decoder.embed_positions.weight".into(), vec![p, d]),
            ("final_logits_bias".into(), vec![1, v]),
        ];
        for stack in ["encoder", "decoder"] {
            specs.push((format!("model.{stack}.layernorm_embedding.weight"), vec![d]));
            specs.push((format!("model.{stack}.layernorm_embedding.bias"), vec![d]));
            let mut attn = vec!["self_attn"];
            if stack == "decoder" {
                attn.push("encoder_attn");
            }
            for a in attn {
                for proj in ["q_proj", "k_proj", "v_proj", "out_proj"] {
                    specs.push((format!("model.{stack}.layers.0.{a}.{proj}.weight"), vec![d, d]));
                    specs.push((format!("model.{stack}.layers.0.{a}.{proj}.bias"), vec![d]));
                }
                specs.push((format!("model.{stack}.layers.0.{a}_layer_norm.weight"), vec![d]));
                specs.push((format!("model.{stack}.layers.0.{a}_layer_norm.bias"), vec![d]));
            }
            specs.push((format!("model.{stack}.layers.0.fc1.weight"), vec![f, d]));
            specs.push((format!("model.{stack}.layers.0.fc1.bias"), vec![f]));
            specs.push((format!("model.{stack}.layers.0.fc2.weight"), vec![d, f]));
            specs.push((format!("model.{stack}.layers.0.fc2.bias"), vec![d]));
            specs.push((format!("model.{stack}.layers.0.final_layer_norm.weight"), vec![d]));
            specs.push((format!("model.{stack}.layers.0.final_layer_norm.bias"), vec![d]));
        }
        let buffers: Vec<(String, Vec<usize>, Vec<u8>)> = specs
            .into_iter()
            .enumerate()
            .map(|(k, (name, shape))| {
                let n: usize = shape.iter().product();
                let values: Vec<f32> = (0..n).map(|i| ((i * 7 + k * 3) % 11) as f32 * 0.05 - 0.25).collect();
                (name, shape, tensor_bytes(&values))
            })
            .collect();
        let views: Vec<(String, TensorView<'_>)> = buffers
            .iter()
            .map(|(n, s, b)| (n.clone(), TensorView::new(Dtype::F32, s.clone(), b).unwrap()))
            .collect();
        safetensors::serialize(views, &None).unwrap()
    }

    #[test]
    fn import_maps_shapes_and_transposes_linears() {
        let bytes = fake_weights();
        let kg = fixtures::small_kg();
        let model = import_bart(&bytes, tiny_tokenizer(), kg, 2, AblationFlags::default(), 1).unwrap();
        let c = model.config();
        assert_eq!((c.d_model, c.ffn_dim, c.encoder_layers, c.decoder_layers, c.max_positions), (4, 6, 1, 1, 10));
        let tensors = read_tensors(&bytes).unwrap();
        let hf = tensors["encoder.layers.0.fc1.weight"].matrix();
        let ours = model.params().get(model.params().id("encoder.layers.0.fc1.weight").unwrap());
        assert_eq!(ours, &hf.t().to_owned());
        let pos = model.params().get(model.params().id("decoder.embed_positions").unwrap());
        assert_eq!(pos.row(0), tensors["decoder.embed_positions.weight"].matrix().row(POSITION_OFFSET));
        let emb = model.params().get(model.params().id("encoder.embed_tokens").unwrap());
        assert_eq!(emb.nrows(), model.tokenizer().vocab_size());
        assert_eq!(emb.row(5), tensors["shared.weight"].matrix().row(5));
        assert_eq!(model.provenance(), crate::graph_encoder::Provenance::NameEncoded);
    }

    #[test]
    fn garbage_is_a_data_error() {
        let err = import_bart(b"nope", tiny_tokenizer(), fixtures::small_kg(), 2, AblationFlags::default(), 1);
        assert!(matches!(err, Err(Error::Data(_))));
    }
}
