//! Post-norm transformer encoder and decoder built on the autograd tape.
//!
//! Parameter names follow the common `encoder.layers.N.self_attn.q_proj`
//! layout so pretrained weights map by name. Linear weights are stored
//! `[in, out]` and applied as `x W + b`.

use ndarray::Array2;
use rand::Rng;

use crate::autograd::{Tape, Var};
use crate::params::{normal_matrix, ParamGroup, ParamId, ParamStore};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Linear {
    fn new<R: Rng>(
        store: &mut ParamStore,
        rng: &mut R,
        name: &str,
        group: ParamGroup,
        (fan_in, fan_out): (usize, usize),
        std: f64,
    ) -> Self {
        Self {
            weight: store.add(format!("{name}.weight"), group, normal_matrix(rng, fan_in, fan_out, std)),
            bias: store.add(format!("{name}.bias"), group, Array2::zeros((1, fan_out))),
        }
    }

    pub fn forward(&self, tape: &mut Tape<'_>, x: Var) -> Var {
        let w = tape.param(self.weight);
        let b = tape.param(self.bias);
        tape.linear(x, w, b)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    fn new(store: &mut ParamStore, name: &str, group: ParamGroup, dim: usize) -> Self {
        Self {
            gamma: store.add(format!("{name}.weight"), group, Array2::ones((1, dim))),
            beta: store.add(format!("{name}.bias"), group, Array2::zeros((1, dim))),
        }
    }

    pub fn forward(&self, tape: &mut Tape<'_>, x: Var, eps: f64) -> Var {
        let g = tape.param(self.gamma);
        let b = tape.param(self.beta);
        tape.layer_norm(x, g, b, eps)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Attention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub out: Linear,
}

impl Attention {
    fn new<R: Rng>(store: &mut ParamStore, rng: &mut R, name: &str, group: ParamGroup, d: usize, std: f64) -> Self {
        Self {
            q: Linear::new(store, rng, &format!("{name}.q_proj"), group, (d, d), std),
            k: Linear::new(store, rng, &format!("{name}.k_proj"), group, (d, d), std),
            v: Linear::new(store, rng, &format!("{name}.v_proj"), group, (d, d), std),
            out: Linear::new(store, rng, &format!("{name}.out_proj"), group, (d, d), std),
        }
    }

    /// Multi-head scaled dot-product attention of `query` rows over `memory` rows.
    pub fn forward(&self, tape: &mut Tape<'_>, query: Var, memory: Var, heads: usize, causal: bool) -> Var {
        let d = tape.value(query).ncols();
        let dh = d / heads;
        let q = self.q.forward(tape, query);
        let q = tape.scale(q, 1.0 / (dh as f64).sqrt());
        let k = self.k.forward(tape, memory);
        let v = self.v.forward(tape, memory);
        let mut outs = Vec::with_capacity(heads);
        for h in 0..heads {
            let qh = tape.slice_cols(q, h * dh, dh);
            let kh = tape.slice_cols(k, h * dh, dh);
            let vh = tape.slice_cols(v, h * dh, dh);
            let scores = tape.matmul_t(qh, kh);
            let p = tape.softmax(scores, causal);
            outs.push(tape.matmul(p, vh));
        }
        let joined = if heads == 1 { outs[0] } else { tape.concat_cols(&outs) };
        self.out.forward(tape, joined)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FeedForward {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl FeedForward {
    pub fn forward(&self, tape: &mut Tape<'_>, x: Var) -> Var {
        let h = self.fc1.forward(tape, x);
        let h = tape.gelu(h);
        self.fc2.forward(tape, h)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderLayer {
    pub self_attn: Attention,
    pub self_attn_layer_norm: LayerNorm,
    pub ffn: FeedForward,
    pub final_layer_norm: LayerNorm,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecoderLayer {
    pub self_attn: Attention,
    pub self_attn_layer_norm: LayerNorm,
    pub encoder_attn: Attention,
    pub encoder_attn_layer_norm: LayerNorm,
    pub ffn: FeedForward,
    pub final_layer_norm: LayerNorm,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Embeddings {
    pub tokens: ParamId,
    pub positions: ParamId,
    pub layer_norm: LayerNorm,
}

impl Embeddings {
    fn new<R: Rng>(
        store: &mut ParamStore,
        rng: &mut R,
        prefix: &str,
        group: ParamGroup,
        (vocab, positions, d): (usize, usize, usize),
        std: f64,
    ) -> Self {
        Self {
            tokens: store.add(format!("{prefix}.embed_tokens"), group, normal_matrix(rng, vocab, d, std)),
            positions: store.add(
                format!("{prefix}.embed_positions"),
                group,
                normal_matrix(rng, positions, d, std),
            ),
            layer_norm: LayerNorm::new(store, &format!("{prefix}.layernorm_embedding"), group, d),
        }
    }

    fn forward(&self, tape: &mut Tape<'_>, ids: &[usize], eps: f64) -> Var {
        let table = tape.param(self.tokens);
        let tok = tape.gather(table, ids);
        let pos_table = tape.param(self.positions);
        let positions: Vec<usize> = (0..ids.len()).collect();
        let pos = tape.gather(pos_table, &positions);
        let x = tape.add(tok, pos);
        self.layer_norm.forward(tape, x, eps)
    }
}

/// Shape of an encoder–decoder stack.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StackShape {
    pub vocab: usize,
    pub d_model: usize,
    pub heads: usize,
    pub ffn_dim: usize,
    pub encoder_layers: usize,
    pub decoder_layers: usize,
    pub max_positions: usize,
    pub eps: f64,
    pub init_std: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Encoder {
    pub embeddings: Embeddings,
    pub layers: Vec<EncoderLayer>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Decoder {
    pub embeddings: Embeddings,
    pub layers: Vec<DecoderLayer>,
    /// Added to the tied output projection.
    pub final_logits_bias: ParamId,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Seq2Seq {
    pub shape: StackShape,
    pub encoder: Encoder,
    pub decoder: Decoder,
}

impl Seq2Seq {
    pub fn new<R: Rng>(store: &mut ParamStore, rng: &mut R, shape: StackShape) -> Self {
        let StackShape {
            vocab,
            d_model: d,
            ffn_dim: f,
            max_positions,
            init_std: std,
            ..
        } = shape;
        let emb_group = ParamGroup::Encoder { layer: None };
        let encoder = Encoder {
            embeddings: Embeddings::new(store, rng, "encoder", emb_group, (vocab, max_positions, d), std),
            layers: (0..shape.encoder_layers)
                .map(|i| {
                    let g = ParamGroup::Encoder { layer: Some(i) };
                    let p = format!("encoder.layers.{i}");
                    EncoderLayer {
                        self_attn: Attention::new(store, rng, &format!("{p}.self_attn"), g, d, std),
                        self_attn_layer_norm: LayerNorm::new(store, &format!("{p}.self_attn_layer_norm"), g, d),
                        ffn: FeedForward {
                            fc1: Linear::new(store, rng, &format!("{p}.fc1"), g, (d, f), std),
                            fc2: Linear::new(store, rng, &format!("{p}.fc2"), g, (f, d), std),
                        },
                        final_layer_norm: LayerNorm::new(store, &format!("{p}.final_layer_norm"), g, d),
                    }
                })
                .collect(),
        };
        let dec_group = ParamGroup::Decoder { layer: None };
        let embeddings = Embeddings::new(store, rng, "decoder", dec_group, (vocab, max_positions, d), std);
        let layers = (0..shape.decoder_layers)
            .map(|i| {
                let g = ParamGroup::Decoder { layer: Some(i) };
                let p = format!("decoder.layers.{i}");
                DecoderLayer {
                    self_attn: Attention::new(store, rng, &format!("{p}.self_attn"), g, d, std),
                    self_attn_layer_norm: LayerNorm::new(store, &format!("{p}.self_attn_layer_norm"), g, d),
                    encoder_attn: Attention::new(store, rng, &format!("{p}.encoder_attn"), g, d, std),
                    encoder_attn_layer_norm: LayerNorm::new(store, &format!("{p}.encoder_attn_layer_norm"), g, d),
                    ffn: FeedForward {
                        fc1: Linear::new(store, rng, &format!("{p}.fc1"), g, (d, f), std),
                        fc2: Linear::new(store, rng, &format!("{p}.fc2"), g, (f, d), std),
                    },
                    final_layer_norm: LayerNorm::new(store, &format!("{p}.final_layer_norm"), g, d),
                }
            })
            .collect();
        let final_logits_bias = store.add("final_logits_bias", dec_group, Array2::zeros((1, vocab)));
        Self {
            shape,
            encoder,
            decoder: Decoder {
                embeddings,
                layers,
                final_logits_bias,
            },
        }
    }

    /// Final encoder states, one row per input token.
    pub fn encode(&self, tape: &mut Tape<'_>, ids: &[usize]) -> Var {
        let eps = self.shape.eps;
        let heads = self.shape.heads;
        let mut x = self.encoder.embeddings.forward(tape, ids, eps);
        for layer in &self.encoder.layers {
            let a = layer.self_attn.forward(tape, x, x, heads, false);
            let x1 = tape.add(x, a);
            let x1 = layer.self_attn_layer_norm.forward(tape, x1, eps);
            let f = layer.ffn.forward(tape, x1);
            let x2 = tape.add(x1, f);
            x = layer.final_layer_norm.forward(tape, x2, eps);
        }
        x
    }

    /// Vocabulary logits for every decoder input position.
    pub fn decode(&self, tape: &mut Tape<'_>, ids: &[usize], memory: Var) -> Var {
        let eps = self.shape.eps;
        let heads = self.shape.heads;
        let mut x = self.decoder.embeddings.forward(tape, ids, eps);
        for layer in &self.decoder.layers {
            let a = layer.self_attn.forward(tape, x, x, heads, true);
            let x1 = tape.add(x, a);
            let x1 = layer.self_attn_layer_norm.forward(tape, x1, eps);
            let c = layer.encoder_attn.forward(tape, x1, memory, heads, false);
            let x2 = tape.add(x1, c);
            let x2 = layer.encoder_attn_layer_norm.forward(tape, x2, eps);
            let f = layer.ffn.forward(tape, x2);
            let x3 = tape.add(x2, f);
            x = layer.final_layer_norm.forward(tape, x3, eps);
        }
        let table = tape.param(self.decoder.embeddings.tokens);
        let logits = tape.matmul_t(x, table);
        let bias = tape.param(self.decoder.final_logits_bias);
        tape.add_row(logits, bias)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn toy() -> (ParamStore, Seq2Seq) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let shape = StackShape {
            vocab: 11,
            d_model: 8,
            heads: 2,
            ffn_dim: 12,
            encoder_layers: 1,
            decoder_layers: 2,
            max_positions: 16,
            eps: 1e-5,
            init_std: 0.3,
        };
        let s = Seq2Seq::new(&mut store, &mut rng, shape);
        (store, s)
    }

    #[test]
    fn decoder_is_causal() {
        let (store, s) = toy();
        let run = |ids: &[usize]| {
            let mut tape = Tape::new(&store);
            let mem = s.encode(&mut tape, &[1, 2, 3]);
            let out = s.decode(&mut tape, ids, mem);
            tape.value(out).clone()
        };
        let a = run(&[0, 4, 5, 6]);
        let b = run(&[0, 4, 9, 10]);
        for t in 0..2 {
            for v in 0..11 {
                assert_eq!(a[[t, v]], b[[t, v]]);
            }
        }
        assert_ne!(a.row(2), b.row(2));
    }

    #[test]
    fn encoder_output_shape() {
        let (store, s) = toy();
        let mut tape = Tape::new(&store);
        let h = s.encode(&mut tape, &[1, 2, 3, 4, 5]);
        assert_eq!(tape.value(h).dim(), (5, 8));
    }
}
