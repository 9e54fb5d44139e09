//! Shared helpers and independent oracles for the integration tests.
//!
//! The oracles here are deliberately naive (dense loops, explicit sets) so
//! they share no code path with the library.

#![allow(dead_code)]

use std::collections::{BTreeSet, HashSet};

use kgrec::corpus::{Speaker, TrainingTriplet, Utterance};
use kgrec::kg::KnowledgeGraph;
use kgrec::model::{ModelConfig, RecommenderModel};
use kgrec::tokenizer::Tokenizer;
use kgrec::training::TrainConfig;
use ndarray::Array2;
use rand::Rng;

pub const PLACEHOLDER: &str = "[MOVIE]";

/// Dense per-node evaluation of one relational layer:
/// `out_i = act(h_i W0 + sum_r mean_{j in N_r(i)} h_j W_r)` with undirected,
/// de-duplicated, self-loop-free neighbourhoods.
pub fn rgcn_oracle(
    h: &Array2<f64>,
    edges: &[(usize, usize, usize)],
    relation_weights: &[Array2<f64>],
    self_weight: &Array2<f64>,
    relu: bool,
) -> Array2<f64> {
    let n = h.nrows();
    let d_in = h.ncols();
    let d_out = self_weight.ncols();
    let mut out = Array2::<f64>::zeros((n, d_out));
    for i in 0..n {
        for k in 0..d_out {
            let mut acc = 0.0;
            for m in 0..d_in {
                acc += h[[i, m]] * self_weight[[m, k]];
            }
            for (r, w) in relation_weights.iter().enumerate() {
                let mut neighbours = BTreeSet::new();
                for &(a, rel, b) in edges {
                    if rel != r || a == b {
                        continue;
                    }
                    if a == i {
                        neighbours.insert(b);
                    }
                    if b == i {
                        neighbours.insert(a);
                    }
                }
                if neighbours.is_empty() {
                    continue;
                }
                let norm = 1.0 / neighbours.len() as f64;
                for &j in &neighbours {
                    for m in 0..d_in {
                        acc += norm * h[[j, m]] * w[[m, k]];
                    }
                }
            }
            out[[i, k]] = if relu { acc.max(0.0) } else { acc };
        }
    }
    out
}

pub fn random_matrix<R: Rng>(rng: &mut R, rows: usize, cols: usize) -> Array2<f64> {
    Array2::from_shape_fn((rows, cols), |_| rng.gen_range(-1.0..1.0))
}

pub fn max_abs_diff(a: &Array2<f64>, b: &Array2<f64>) -> f64 {
    assert_eq!(a.dim(), b.dim());
    a.iter().zip(b.iter()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

pub fn recall_oracle(ranked: &[Vec<String>], gold: &[Vec<String>], k: usize) -> Option<f64> {
    let mut num = 0.0;
    let mut den = 0.0;
    for i in 0..ranked.len() {
        let top: HashSet<&String> = ranked[i].iter().take(k).collect();
        for g in &gold[i] {
            den += 1.0;
            if top.contains(g) {
                num += 1.0;
            }
        }
    }
    if den == 0.0 {
        None
    } else {
        Some(num / den)
    }
}

/// `(distinct / total * 100, distinct / responses * 100)`.
pub fn distinct_oracle(responses: &[Vec<String>], n: usize) -> Option<(f64, f64)> {
    let mut grams: BTreeSet<Vec<String>> = BTreeSet::new();
    let mut total = 0usize;
    for r in responses {
        if r.len() < n {
            continue;
        }
        for i in 0..=(r.len() - n) {
            grams.insert(r[i..i + n].to_vec());
            total += 1;
        }
    }
    if total == 0 {
        return None;
    }
    let distinct = grams.len() as f64;
    Some((distinct / total as f64 * 100.0, distinct / responses.len() as f64 * 100.0))
}

/// Precision/recall form of F1 over "has a placeholder" labels.
pub fn item_f1_oracle(generated: &[Vec<String>], reference: &[Vec<String>]) -> Option<f64> {
    let has = |t: &Vec<String>| t.iter().any(|x| x == PLACEHOLDER);
    let mut tp = 0.0;
    let mut fp = 0.0;
    let mut fn_ = 0.0;
    for (g, r) in generated.iter().zip(reference) {
        match (has(g), has(r)) {
            (true, true) => tp += 1.0,
            (true, false) => fp += 1.0,
            (false, true) => fn_ += 1.0,
            _ => {}
        }
    }
    if tp + fp + fn_ == 0.0 {
        return None;
    }
    if tp == 0.0 {
        return Some(0.0);
    }
    let precision = tp / (tp + fp);
    let recall = tp / (tp + fn_);
    Some(2.0 * precision * recall / (precision + recall))
}

pub fn ain_oracle(generated: &[Vec<String>]) -> Option<f64> {
    if generated.is_empty() {
        return None;
    }
    let mut count = 0.0;
    for g in generated {
        for t in g {
            if t == PLACEHOLDER {
                count += 1.0;
            }
        }
    }
    Some(count * 100.0 / generated.len() as f64)
}

/// Item ids sorted by score descending, ties by id ascending, by repeated
/// selection of the best remaining item.
pub fn top_k_oracle(scores: &[f64], ids: &[String], k: usize) -> Vec<String> {
    let mut left: Vec<usize> = (0..scores.len()).collect();
    let mut out = Vec::new();
    while out.len() < k && !left.is_empty() {
        let mut best = 0;
        for p in 1..left.len() {
            let (a, b) = (left[p], left[best]);
            if scores[a] > scores[b] || (scores[a] == scores[b] && ids[a] < ids[b]) {
                best = p;
            }
        }
        out.push(ids[left.remove(best)].clone());
    }
    out
}

/// Word tokenizer over `texts` padded with filler words to exactly `size`.
pub fn tokenizer_of_size<'a>(texts: impl IntoIterator<Item = &'a str> + Clone, size: usize) -> Tokenizer {
    let base = Tokenizer::word(texts.clone()).vocab_size();
    assert!(base <= size, "base vocabulary {base} exceeds {size}");
    let filler: Vec<String> = (0..size - base).map(|i| format!("zzfill{i}")).collect();
    let mut all: Vec<&str> = texts.into_iter().collect();
    all.extend(filler.iter().map(String::as_str));
    let tok = Tokenizer::word(all);
    assert_eq!(tok.vocab_size(), size);
    tok
}

/// Overfit configuration: desk model, lr 1e-3, batch 16, no weight decay.
pub fn overfit_config(epochs: usize) -> TrainConfig {
    TrainConfig {
        learning_rate: 1e-3,
        batch_size: 16,
        weight_decay: 0.0,
        epochs,
        ..TrainConfig::default()
    }
}

/// Train-set Recall@1 over triplets with gold items.
pub fn train_recall_at_1(model: &RecommenderModel, triplets: &[TrainingTriplet]) -> f64 {
    let scored: Vec<&TrainingTriplet> = triplets.iter().filter(|t| t.has_recommendation()).collect();
    let ranked: Vec<Vec<String>> = scored
        .iter()
        .map(|t| {
            model
                .recommend(&t.context, 1)
                .unwrap()
                .top_k
                .into_iter()
                .map(|(id, _)| id)
                .collect()
        })
        .collect();
    let gold: Vec<Vec<String>> = scored.iter().map(|t| t.gold_items.clone()).collect();
    recall_oracle(&ranked, &gold, 1).unwrap_or(0.0)
}

/// Small desk-shaped model for fast tests.
pub fn tiny_config(d: usize) -> ModelConfig {
    let mut c = ModelConfig::desk();
    c.d_model = d;
    c.heads = 2;
    c.ffn_dim = 2 * d;
    c.max_positions = 64;
    c.max_context_len = 48;
    c.max_response_len = 12;
    c
}

pub fn seeker(text: &str) -> Utterance {
    Utterance::new(Speaker::Seeker, text)
}

pub fn recommender(text: &str) -> Utterance {
    Utterance::new(Speaker::Recommender, text)
}

pub fn triplet(context: Vec<Utterance>, gold: &[&str], target: &str) -> TrainingTriplet {
    TrainingTriplet {
        conversation_id: Some("t".into()),
        turn_index: context.len(),
        context,
        gold_items: gold.iter().map(|s| s.to_string()).collect(),
        target: target.into(),
        is_augmented: false,
        masked_surfaces: Vec::new(),
    }
}

pub fn kg_texts(kg: &KnowledgeGraph) -> Vec<String> {
    kg.names().into_iter().map(str::to_string).collect()
}
