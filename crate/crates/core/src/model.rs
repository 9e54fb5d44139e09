//! The unified recommender: one encoder–decoder whose encoder state doubles
//! as a retrieval key over graph-encoded entities.

use std::collections::BTreeSet;

use ndarray::{Array1, Array2, ArrayView1};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Matrix, Tape, Var};
use crate::corpus::{Speaker, Utterance};
use crate::error::{Error, Result};
use crate::graph_encoder::{
    self, check_finite, Activation, ClassifierHandles, GraphEncoderHandles, Provenance, RelationalAdjacency,
    RgcnLayerHandles,
};
use crate::kg::{KnowledgeGraph, NodeType, Relation};
use crate::params::{normal_matrix, ParamGroup, ParamStore};
use crate::tokenizer::{Tokenizer, PLACEHOLDER};
use crate::transformer::{Seq2Seq, StackShape};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Profile {
    Desk,
    Pretrained,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub profile: Profile,
    pub d_model: usize,
    pub heads: usize,
    pub ffn_dim: usize,
    pub encoder_layers: usize,
    pub decoder_layers: usize,
    /// Rows of each learned position table.
    pub max_positions: usize,
    /// Longest serialized context, in tokens.
    pub max_context_len: usize,
    /// Longest generated or teacher-forced response, in tokens.
    pub max_response_len: usize,
    pub rgcn_layers: usize,
    pub rgcn_activation: Activation,
    pub layer_norm_eps: f64,
    pub init_std: f64,
}

impl ModelConfig {
    pub fn desk() -> Self {
        Self {
            profile: Profile::Desk,
            d_model: 64,
            heads: 4,
            ffn_dim: 128,
            encoder_layers: 2,
            decoder_layers: 2,
            max_positions: 128,
            max_context_len: 96,
            max_response_len: 40,
            rgcn_layers: 1,
            rgcn_activation: Activation::Relu,
            layer_norm_eps: 1e-5,
            init_std: 0.02,
        }
    }

    pub fn pretrained() -> Self {
        Self {
            profile: Profile::Pretrained,
            d_model: 768,
            heads: 12,
            ffn_dim: 3072,
            encoder_layers: 6,
            decoder_layers: 6,
            max_positions: 1024,
            max_context_len: 512,
            max_response_len: 64,
            rgcn_layers: 1,
            rgcn_activation: Activation::Relu,
            layer_norm_eps: 1e-5,
            init_std: 0.02,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.d_model == 0 || self.heads == 0 || self.d_model % self.heads != 0 {
            return bad("d_model must be a positive multiple of heads");
        }
        if self.rgcn_layers == 0 {
            return bad("at least one graph layer is required");
        }
        if self.max_context_len == 0 || self.max_context_len > self.max_positions {
            return bad("max_context_len must be in 1..=max_positions");
        }
        if self.max_response_len == 0 || self.max_response_len > self.max_positions {
            return bad("max_response_len must be in 1..=max_positions");
        }
        if !(self.layer_norm_eps > 0.0) || !(self.init_std >= 0.0) {
            return bad("layer_norm_eps must be positive and init_std non-negative");
        }
        Ok(())
    }

    fn shape(&self, vocab: usize) -> StackShape {
        StackShape {
            vocab,
            d_model: self.d_model,
            heads: self.heads,
            ffn_dim: self.ffn_dim,
            encoder_layers: self.encoder_layers,
            decoder_layers: self.decoder_layers,
            max_positions: self.max_positions,
            eps: self.layer_norm_eps,
            init_std: self.init_std,
        }
    }
}

/// Variant switches. Each one is applied before parameters are created.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct AblationFlags {
    #[serde(default)]
    pub no_node_loss: bool,
    #[serde(default)]
    pub no_data_aug: bool,
    #[serde(default)]
    pub no_node_init: bool,
    #[serde(default)]
    pub no_corg: bool,
}

/// Which parameters receive gradient updates.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TrainableSpec {
    All,
    /// Nothing at all, graph encoder included.
    Nothing,
    /// Listed layers plus the graph encoder and classifier; embeddings frozen.
    Layers { encoder: Vec<usize>, decoder: Vec<usize> },
}

impl Default for TrainableSpec {
    fn default() -> Self {
        TrainableSpec::All
    }
}

impl TrainableSpec {
    /// Last encoder layer and last two decoder layers.
    pub fn top_layers(config: &ModelConfig) -> Self {
        TrainableSpec::Layers {
            encoder: config.encoder_layers.checked_sub(1).into_iter().collect(),
            decoder: (config.decoder_layers.saturating_sub(2)..config.decoder_layers).collect(),
        }
    }

    /// `all`, `none`, `top`, or `enc:0,1;dec:1` (either side may be empty).
    pub fn parse(text: &str, config: &ModelConfig) -> Result<Self> {
        match text.trim() {
            "all" => return Ok(TrainableSpec::All),
            "none" => return Ok(TrainableSpec::Nothing),
            "top" => return Ok(Self::top_layers(config)),
            _ => {}
        }
        let mut encoder = Vec::new();
        let mut decoder = Vec::new();
        for part in text.split(';').map(str::trim).filter(|p| !p.is_empty()) {
            let (side, list) = part
                .split_once(':')
                .ok_or_else(|| Error::Config(format!("bad trainable spec part {part:?}")))?;
            let target = match side.trim() {
                "enc" | "encoder" => &mut encoder,
                "dec" | "decoder" => &mut decoder,
                other => return Err(Error::Config(format!("unknown stack {other:?} in trainable spec"))),
            };
            for n in list.split(',').map(str::trim).filter(|n| !n.is_empty()) {
                target.push(
                    n.parse()
                        .map_err(|_| Error::Config(format!("bad layer index {n:?}")))?,
                );
            }
        }
        Ok(TrainableSpec::Layers { encoder, decoder })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ParameterBreakdown {
    pub recommendation_module: usize,
    pub generation_module: usize,
    pub total: usize,
    pub trainable_total: usize,
}

impl ParameterBreakdown {
    /// `(rec %, gen %)` of the trainable total; `None` when nothing trains.
    pub fn shares(&self) -> Option<(f64, f64)> {
        if self.trainable_total == 0 {
            return None;
        }
        let t = self.trainable_total as f64;
        Some((
            100.0 * self.recommendation_module as f64 / t,
            100.0 * self.generation_module as f64 / t,
        ))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ContextRepresentation {
    pub token_ids: Vec<usize>,
    pub token_states: Matrix,
    pub c: Array1<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EntityRepresentations {
    pub h: Matrix,
    pub h_items: Matrix,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecommendationResult {
    pub scores: Vec<f64>,
    pub probabilities: Vec<f64>,
    pub top_k: Vec<(String, f64)>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DecodeStrategy {
    Greedy,
    Beam { width: usize },
}

/// Numerically stable softmax of a score vector.
pub fn softmax(scores: &[f64]) -> Vec<f64> {
    let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exp: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
    let z: f64 = exp.iter().sum();
    exp.into_iter().map(|e| e / z).collect()
}

fn scores_against(c: ArrayView1<f64>, h: &Matrix) -> Result<Vec<f64>> {
    if c.len() != h.ncols() {
        return Err(Error::Validation(format!(
            "search key has {} dims, entity rows have {}",
            c.len(),
            h.ncols()
        )));
    }
    let scores = h.dot(&c).to_vec();
    if let Some(i) = scores.iter().position(|s| !s.is_finite()) {
        return Err(Error::Numeric(format!("non-finite retrieval score for entity row {i}")));
    }
    Ok(scores)
}

/// Distribution over every entity row of `h`.
pub fn recommend_train(c: ArrayView1<f64>, h: &Matrix) -> Result<Vec<f64>> {
    Ok(softmax(&scores_against(c, h)?))
}

/// Indices of `scores` sorted by descending score, ties by ascending id.
pub fn rank(scores: &[f64], ids: &[String]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| {
        scores[b]
            .partial_cmp(&scores[a])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then_with(|| ids[a].cmp(&ids[b]))
    });
    order
}

/// Distribution over the item rows only, with the `k` best items.
pub fn recommend_infer(c: ArrayView1<f64>, h_items: &Matrix, item_ids: &[String], k: usize) -> Result<RecommendationResult> {
    if k == 0 {
        return Err(Error::Validation("k must be at least 1".into()));
    }
    let scores = scores_against(c, h_items)?;
    let probabilities = softmax(&scores);
    let k = if k > item_ids.len() {
        log::warn!("requested top {k} of {} items; truncating", item_ids.len());
        item_ids.len()
    } else {
        k
    };
    let top_k = rank(&scores, item_ids)
        .into_iter()
        .take(k)
        .map(|i| (item_ids[i].clone(), probabilities[i]))
        .collect();
    Ok(RecommendationResult {
        scores,
        probabilities,
        top_k,
    })
}

impl RecommendationResult {
    /// The `n` best item ids (may exceed `top_k`, bounded by the item count).
    pub fn ranked(&self, item_ids: &[String], n: usize) -> Vec<String> {
        rank(&self.scores, item_ids)
            .into_iter()
            .take(n)
            .map(|i| item_ids[i].clone())
            .collect()
    }
}

/// Replaces the i-th placeholder with the i-th name. Placeholders without a
/// name are left verbatim.
pub fn fill_placeholders(text: &str, names: &[String]) -> String {
    let mut out = String::with_capacity(text.len());
    let mut rest = text;
    let mut names = names.iter();
    let mut missing = 0usize;
    while let Some(pos) = rest.find(PLACEHOLDER) {
        out.push_str(&rest[..pos]);
        match names.next() {
            Some(n) => out.push_str(n),
            None => {
                missing += 1;
                out.push_str(PLACEHOLDER);
            }
        }
        rest = &rest[pos + PLACEHOLDER.len()..];
    }
    out.push_str(rest);
    if missing > 0 {
        log::warn!("{missing} placeholder(s) left unfilled: no items available");
    }
    out
}

/// Every named parameter handle of the model.
#[derive(Debug, Clone, PartialEq)]
pub struct Handles {
    pub seq2seq: Seq2Seq,
    pub graph: GraphEncoderHandles,
    pub classifier: ClassifierHandles,
}

fn build_skeleton(config: &ModelConfig, vocab: usize, num_entities: usize, seed: u64) -> (ParamStore, Handles) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let seq2seq = Seq2Seq::new(&mut store, &mut rng, config.shape(vocab));
    let d = config.d_model;
    let graph_std = 1.0 / (d as f64).sqrt();
    let embeddings = store.add("graph.entity_embeddings", ParamGroup::Graph, Array2::zeros((num_entities, d)));
    let layers = (0..config.rgcn_layers)
        .map(|l| RgcnLayerHandles {
            relation_weights: Relation::ALL
                .iter()
                .map(|r| {
                    store.add(
                        format!("graph.layers.{l}.relation.{}", r.index()),
                        ParamGroup::Graph,
                        normal_matrix(&mut rng, d, d, graph_std),
                    )
                })
                .collect(),
            self_weight: store.add(
                format!("graph.layers.{l}.self"),
                ParamGroup::Graph,
                normal_matrix(&mut rng, d, d, graph_std),
            ),
        })
        .collect();
    let classifier = ClassifierHandles {
        hidden_w: store.add("classifier.hidden.weight", ParamGroup::Classifier, normal_matrix(&mut rng, d, d, graph_std)),
        hidden_b: store.add("classifier.hidden.bias", ParamGroup::Classifier, Array2::zeros((1, d))),
        out_w: store.add(
            "classifier.out.weight",
            ParamGroup::Classifier,
            normal_matrix(&mut rng, d, NodeType::COUNT, graph_std),
        ),
        out_b: store.add("classifier.out.bias", ParamGroup::Classifier, Array2::zeros((1, NodeType::COUNT))),
    };
    (
        store,
        Handles {
            seq2seq,
            graph: GraphEncoderHandles { embeddings, layers },
            classifier,
        },
    )
}

#[derive(Debug, Clone)]
pub struct RecommenderModel {
    config: ModelConfig,
    tokenizer: Tokenizer,
    kg: KnowledgeGraph,
    adjacency: RelationalAdjacency,
    params: ParamStore,
    handles: Handles,
    node_types: Vec<NodeType>,
    item_rows: Vec<usize>,
    provenance: Provenance,
    ablation: AblationFlags,
}

impl RecommenderModel {
    /// Fresh model. Entity embeddings come from encoding entity names,
    /// or from a seeded random table under `no_node_init`.
    pub fn new(
        config: ModelConfig,
        tokenizer: Tokenizer,
        kg: KnowledgeGraph,
        ablation: AblationFlags,
        seed: u64,
    ) -> Result<Self> {
        let mut model = Self::skeleton(config, tokenizer, kg, ablation, seed)?;
        model.init_entity_embeddings(seed)?;
        Ok(model)
    }

    /// Randomly initialised weights with zero entity embeddings; callers
    /// overwrite values (checkpoint load, weight import).
    pub fn skeleton(
        config: ModelConfig,
        tokenizer: Tokenizer,
        kg: KnowledgeGraph,
        ablation: AblationFlags,
        seed: u64,
    ) -> Result<Self> {
        config.validate()?;
        if kg.item_index().is_empty() {
            return Err(Error::Data("knowledge graph has no movie nodes".into()));
        }
        let (params, handles) = build_skeleton(&config, tokenizer.vocab_size(), kg.num_entities(), seed);
        let adjacency = if ablation.no_corg {
            RelationalAdjacency::empty(kg.num_entities(), Relation::COUNT)
        } else {
            RelationalAdjacency::from_graph(&kg)
        };
        Ok(Self {
            node_types: kg.node_types(),
            item_rows: kg.item_rows(),
            config,
            tokenizer,
            kg,
            adjacency,
            params,
            handles,
            provenance: Provenance::Random,
            ablation,
        })
    }

    /// Sets entity embeddings per the ablation flags.
    pub fn init_entity_embeddings(&mut self, seed: u64) -> Result<()> {
        let n = self.kg.num_entities();
        let d = self.config.d_model;
        let random = graph_encoder::init_embeddings_random(n, d, seed ^ 0x9e37_79b9_7f4a_7c15, 1.0);
        let table = if self.ablation.no_node_init {
            random
        } else {
            let mut m = random.matrix;
            let names: Vec<String> = self.kg.names().into_iter().map(str::to_string).collect();
            for (i, name) in names.iter().enumerate() {
                if self.tokenizer.encode(name).is_empty() {
                    log::warn!("entity name {name:?} has no tokens; keeping a random embedding");
                    continue;
                }
                let rep = self.encode_context(&[Utterance::new(Speaker::Seeker, name.clone())])?;
                m.row_mut(i).assign(&rep.c);
            }
            graph_encoder::EmbeddingTable {
                matrix: m,
                provenance: Provenance::NameEncoded,
            }
        };
        check_finite(&table.matrix, "embedding")?;
        *self.params.get_mut(self.handles.graph.embeddings) = table.matrix;
        self.provenance = table.provenance;
        Ok(())
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn tokenizer(&self) -> &Tokenizer {
        &self.tokenizer
    }

    pub fn kg(&self) -> &KnowledgeGraph {
        &self.kg
    }

    pub fn adjacency(&self) -> &RelationalAdjacency {
        &self.adjacency
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn handles(&self) -> &Handles {
        &self.handles
    }

    pub fn node_types(&self) -> &[NodeType] {
        &self.node_types
    }

    pub fn item_rows(&self) -> &[usize] {
        &self.item_rows
    }

    pub fn item_ids(&self) -> &[String] {
        self.kg.item_index()
    }

    pub fn provenance(&self) -> Provenance {
        self.provenance
    }

    pub fn set_provenance(&mut self, provenance: Provenance) {
        self.provenance = provenance;
    }

    pub fn ablation(&self) -> AblationFlags {
        self.ablation
    }

    /// Replaces a parameter by name, checking its shape.
    pub fn set_param(&mut self, name: &str, value: Matrix) -> Result<()> {
        let id = self
            .params
            .id(name)
            .ok_or_else(|| Error::Data(format!("unknown parameter {name}")))?;
        let current = self.params.get(id);
        if current.dim() != value.dim() {
            return Err(Error::Data(format!(
                "parameter {name} has shape {:?}, got {:?}",
                current.dim(),
                value.dim()
            )));
        }
        *self.params.get_mut(id) = value;
        Ok(())
    }

    /// Speaker-marked context tokens followed by the end marker, keeping the
    /// most recent `max_context_len` ids.
    pub fn context_ids(&self, context: &[Utterance]) -> Result<Vec<usize>> {
        let sp = self.tokenizer.special();
        let mut ids = Vec::new();
        for u in context {
            ids.push(match u.speaker {
                Speaker::Seeker => sp.seeker,
                Speaker::Recommender => sp.recommender,
            });
            ids.extend(self.tokenizer.encode(&u.text));
        }
        if ids.iter().all(|&i| i == sp.seeker || i == sp.recommender) {
            return Err(Error::Validation("context has no tokens".into()));
        }
        ids.push(sp.eos);
        let max = self.config.max_context_len;
        if ids.len() > max {
            ids.drain(..ids.len() - max);
        }
        Ok(ids)
    }

    /// Teacher-forcing layout `(decoder input, labels)`: the labels are the
    /// response tokens plus the end marker, the input is the start marker
    /// followed by all labels but the last.
    pub fn target_ids(&self, target: &str) -> (Vec<usize>, Vec<usize>) {
        let sp = self.tokenizer.special();
        let mut labels = self.tokenizer.encode(target);
        labels.truncate(self.config.max_response_len - 1);
        labels.push(sp.eos);
        let mut input = vec![sp.bos];
        input.extend_from_slice(&labels[..labels.len() - 1]);
        (input, labels)
    }

    pub fn encode_on_tape(&self, tape: &mut Tape<'_>, ids: &[usize]) -> Var {
        self.handles.seq2seq.encode(tape, ids)
    }

    pub fn decode_on_tape(&self, tape: &mut Tape<'_>, ids: &[usize], memory: Var) -> Var {
        self.handles.seq2seq.decode(tape, ids, memory)
    }

    pub fn graph_on_tape(&self, tape: &mut Tape<'_>) -> Var {
        graph_encoder::encode_entities_on_tape(tape, &self.handles.graph, &self.adjacency, self.config.rgcn_activation)
    }

    pub fn encode_context(&self, context: &[Utterance]) -> Result<ContextRepresentation> {
        let ids = self.context_ids(context)?;
        self.encode_ids(ids)
    }

    pub fn encode_ids(&self, token_ids: Vec<usize>) -> Result<ContextRepresentation> {
        let mut tape = Tape::new(&self.params);
        let states = self.encode_on_tape(&mut tape, &token_ids);
        let token_states = tape.value(states).clone();
        if token_states.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("non-finite encoder state".into()));
        }
        let c = token_states.row(token_states.nrows() - 1).to_owned();
        Ok(ContextRepresentation {
            token_ids,
            token_states,
            c,
        })
    }

    pub fn entity_representations(&self) -> Result<EntityRepresentations> {
        let mut tape = Tape::new(&self.params);
        let h = self.graph_on_tape(&mut tape);
        let h = tape.value(h).clone();
        check_finite(&h, "representation")?;
        let h_items = h.select(ndarray::Axis(0), &self.item_rows);
        Ok(EntityRepresentations { h, h_items })
    }

    /// Node-type distribution of the listed entity rows.
    pub fn node_type_probabilities(&self, rows: &[usize]) -> Matrix {
        let mut tape = Tape::new(&self.params);
        let h = self.graph_on_tape(&mut tape);
        let logits = graph_encoder::node_type_logits(&mut tape, h, &self.handles.classifier, rows);
        let p = tape.softmax(logits, false);
        tape.value(p).clone()
    }

    pub fn recommend_with(
        &self,
        rep: &ContextRepresentation,
        entities: &EntityRepresentations,
        k: usize,
    ) -> Result<RecommendationResult> {
        recommend_infer(rep.c.view(), &entities.h_items, self.item_ids(), k)
    }

    pub fn recommend(&self, context: &[Utterance], k: usize) -> Result<RecommendationResult> {
        let rep = self.encode_context(context)?;
        let entities = self.entity_representations()?;
        self.recommend_with(&rep, &entities, k)
    }

    /// Logits for every decoder position given encoder states.
    pub fn generation_logits(&self, decoder_input_ids: &[usize], token_states: &Matrix) -> Matrix {
        let mut tape = Tape::new(&self.params);
        let memory = tape.input_borrowed(token_states, false);
        let logits = self.decode_on_tape(&mut tape, decoder_input_ids, memory);
        tape.value(logits).clone()
    }

    /// Log-probabilities of the next token after `prefix`, with tokens that
    /// can never be produced masked out.
    fn next_log_probs(&self, prefix: &[usize], token_states: &Matrix, banned: &[usize]) -> Vec<f64> {
        let logits = self.generation_logits(prefix, token_states);
        let mut last: Vec<f64> = logits.row(logits.nrows() - 1).to_vec();
        for &b in banned {
            last[b] = f64::NEG_INFINITY;
        }
        let max = last.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + last.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        last.into_iter().map(|v| v - lse).collect()
    }

    fn banned_tokens(&self) -> Vec<usize> {
        let sp = self.tokenizer.special();
        let mut b: BTreeSet<usize> = [sp.bos, sp.pad, sp.unk, sp.seeker, sp.recommender].into();
        b.remove(&sp.eos);
        b.into_iter().collect()
    }

    /// Generated token ids, ending with the end marker unless `max_len`
    /// tokens were produced first.
    pub fn generate(&self, rep: &ContextRepresentation, max_len: usize, strategy: DecodeStrategy) -> Vec<usize> {
        let max_len = max_len.min(self.config.max_positions);
        match strategy {
            DecodeStrategy::Greedy => self.greedy(rep, max_len),
            DecodeStrategy::Beam { width } => self.beam(rep, max_len, width.max(1)),
        }
    }

    fn greedy(&self, rep: &ContextRepresentation, max_len: usize) -> Vec<usize> {
        let sp = self.tokenizer.special();
        let banned = self.banned_tokens();
        let mut prefix = vec![sp.bos];
        let mut out = Vec::new();
        while out.len() < max_len {
            let lp = self.next_log_probs(&prefix, &rep.token_states, &banned);
            let tok = argmax_lowest(&lp);
            out.push(tok);
            if tok == sp.eos {
                break;
            }
            prefix.push(tok);
        }
        out
    }

    /// Beam search over summed log-probabilities; finished hypotheses leave
    /// the beam. Ties prefer the earlier beam, then the lower token id.
    fn beam(&self, rep: &ContextRepresentation, max_len: usize, width: usize) -> Vec<usize> {
        let sp = self.tokenizer.special();
        let banned = self.banned_tokens();
        let mut live: Vec<(f64, Vec<usize>)> = vec![(0.0, Vec::new())];
        let mut finished: Vec<(f64, Vec<usize>)> = Vec::new();
        for _ in 0..max_len {
            if live.is_empty() {
                break;
            }
            let mut candidates: Vec<(f64, usize, usize)> = Vec::new();
            for (bi, (score, toks)) in live.iter().enumerate() {
                let mut prefix = vec![sp.bos];
                prefix.extend_from_slice(toks);
                let lp = self.next_log_probs(&prefix, &rep.token_states, &banned);
                let mut order: Vec<usize> = (0..lp.len()).filter(|&t| lp[t].is_finite()).collect();
                order.sort_by(|&a, &b| lp[b].partial_cmp(&lp[a]).unwrap().then(a.cmp(&b)));
                candidates.extend(order.into_iter().take(width).map(|t| (score + lp[t], bi, t)));
            }
            candidates.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
            let mut next = Vec::with_capacity(width);
            for (score, bi, tok) in candidates.into_iter().take(width) {
                let mut toks = live[bi].1.clone();
                toks.push(tok);
                if tok == sp.eos {
                    finished.push((score, toks));
                } else {
                    next.push((score, toks));
                }
            }
            live = next;
            let best_finished = finished.iter().map(|f| f.0).fold(f64::NEG_INFINITY, f64::max);
            let best_live = live.iter().map(|l| l.0).fold(f64::NEG_INFINITY, f64::max);
            if finished.len() >= width && best_finished >= best_live {
                break;
            }
        }
        finished
            .into_iter()
            .chain(live)
            .fold(None::<(f64, Vec<usize>)>, |best, cand| match best {
                Some(b) if b.0 >= cand.0 => Some(b),
                _ => Some(cand),
            })
            .map(|b| b.1)
            .unwrap_or_default()
    }

    /// Display names for the `n` best items of `result`.
    pub fn display_names(&self, result: &RecommendationResult, n: usize) -> Vec<String> {
        result
            .ranked(self.item_ids(), n)
            .iter()
            .filter_map(|id| self.kg.node(id).map(|node| node.display_name()))
            .collect()
    }

    /// Fills placeholders from `result`, reaching past its top-k when the
    /// text holds more placeholders.
    pub fn fill_from(&self, text: &str, result: &RecommendationResult) -> String {
        let n = text.matches(PLACEHOLDER).count().max(result.top_k.len());
        fill_placeholders(text, &self.display_names(result, n))
    }

    /// One full turn: recommendations, raw and filled response text.
    pub fn respond(
        &self,
        context: &[Utterance],
        entities: &EntityRepresentations,
        k: usize,
        max_len: usize,
        strategy: DecodeStrategy,
    ) -> Result<Response> {
        let rep = self.encode_context(context)?;
        let recommendations = self.recommend_with(&rep, entities, k)?;
        let ids = self.generate(&rep, max_len, strategy);
        let raw = self.tokenizer.decode_pretty(&ids);
        let filled = self.fill_from(&raw, &recommendations);
        Ok(Response {
            recommendations,
            generated_ids: ids,
            raw,
            filled,
        })
    }

    pub fn count_parameters(&self) -> ParameterBreakdown {
        let mut rec = 0;
        let mut gen = 0;
        for e in self.params.entries() {
            if !e.trainable {
                continue;
            }
            match e.group {
                ParamGroup::Decoder { .. } => gen += e.value.len(),
                _ => rec += e.value.len(),
            }
        }
        ParameterBreakdown {
            recommendation_module: rec,
            generation_module: gen,
            total: self.params.total_count(),
            trainable_total: rec + gen,
        }
    }

    pub fn apply_trainability(&mut self, spec: &TrainableSpec) -> Result<()> {
        if let TrainableSpec::Layers { encoder, decoder } = spec {
            if let Some(i) = encoder.iter().find(|&&i| i >= self.config.encoder_layers) {
                return Err(Error::Config(format!(
                    "encoder layer {i} out of range (model has {})",
                    self.config.encoder_layers
                )));
            }
            if let Some(i) = decoder.iter().find(|&&i| i >= self.config.decoder_layers) {
                return Err(Error::Config(format!(
                    "decoder layer {i} out of range (model has {})",
                    self.config.decoder_layers
                )));
            }
        }
        for e in self.params.entries_mut() {
            e.trainable = match spec {
                TrainableSpec::All => true,
                TrainableSpec::Nothing => false,
                TrainableSpec::Layers { encoder, decoder } => match e.group {
                    ParamGroup::Graph | ParamGroup::Classifier => true,
                    ParamGroup::Encoder { layer } => layer.is_some_and(|l| encoder.contains(&l)),
                    ParamGroup::Decoder { layer } => layer.is_some_and(|l| decoder.contains(&l)),
                },
            };
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Response {
    pub recommendations: RecommendationResult,
    pub generated_ids: Vec<usize>,
    pub raw: String,
    pub filled: String,
}

/// First index of the maximum.
fn argmax_lowest(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}
