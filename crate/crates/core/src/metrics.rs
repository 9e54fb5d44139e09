//! Recommendation and generation metrics.

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::hash::Hash;

use serde::{Deserialize, Serialize};

use crate::corpus::{TrainingTriplet, Utterance};
use crate::error::Result;
use crate::model::{DecodeStrategy, EntityRepresentations, RecommenderModel};
use crate::tokenizer::PLACEHOLDER;

pub const DEFAULT_KS: [usize; 4] = [1, 5, 10, 50];
pub const DEFAULT_NS: [usize; 3] = [2, 3, 4];

/// Hits over gold items, for triplets with at least one gold item. `None`
/// when nothing is scorable.
pub fn recall_at_k<S: AsRef<str>>(ranked: &[Vec<S>], gold: &[Vec<S>], k: usize) -> Option<f64> {
    let mut hits = 0usize;
    let mut total = 0usize;
    for (ranking, gold) in ranked.iter().zip(gold) {
        let top: Vec<&str> = ranking.iter().take(k).map(AsRef::as_ref).collect();
        for g in gold {
            total += 1;
            if top.contains(&g.as_ref()) {
                hits += 1;
            }
        }
    }
    (total > 0).then(|| hits as f64 / total as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Distinct {
    /// Distinct n-grams over total n-grams, x100.
    pub ratio: f64,
    /// Distinct n-grams over number of responses, x100.
    pub per_response: f64,
}

/// Both Dist-n variants; `None` when no response has `n` tokens.
pub fn distinct_n<T: Eq + Hash>(responses: &[Vec<T>], n: usize) -> Option<Distinct> {
    if n == 0 {
        return None;
    }
    let mut seen: HashSet<&[T]> = HashSet::new();
    let mut total = 0usize;
    for r in responses {
        for w in r.windows(n) {
            total += 1;
            seen.insert(w);
        }
    }
    (total > 0).then(|| Distinct {
        ratio: 100.0 * seen.len() as f64 / total as f64,
        per_response: 100.0 * seen.len() as f64 / responses.len() as f64,
    })
}

fn placeholder_count<S: AsRef<str>>(tokens: &[S]) -> usize {
    tokens.iter().filter(|t| t.as_ref() == PLACEHOLDER).count()
}

/// F1 of "contains a placeholder" labels; `None` without any positive.
pub fn item_f1<S: AsRef<str>>(generated: &[Vec<S>], reference: &[Vec<S>]) -> Option<f64> {
    let (mut tp, mut fp, mut fn_) = (0usize, 0usize, 0usize);
    for (g, r) in generated.iter().zip(reference) {
        match (placeholder_count(g) > 0, placeholder_count(r) > 0) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fn_ += 1,
            (false, false) => {}
        }
    }
    let denom = 2 * tp + fp + fn_;
    (denom > 0).then(|| 2.0 * tp as f64 / denom as f64)
}

/// Mean placeholder count per response, x100.
pub fn avg_item_number<S: AsRef<str>>(generated: &[Vec<S>]) -> Option<f64> {
    if generated.is_empty() {
        return None;
    }
    let total: usize = generated.iter().map(|g| placeholder_count(g)).sum();
    Some(100.0 * total as f64 / generated.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub recall: BTreeMap<usize, Option<f64>>,
    pub dist: BTreeMap<usize, Option<Distinct>>,
    pub item_f1: Option<f64>,
    pub ain: Option<f64>,
    pub evaluated_triplets: usize,
    pub scored_triplets: usize,
    pub responses: usize,
}

/// What evaluation needs from a recommender.
pub trait CrsModel {
    /// Item ids, best first; at least `depth` long when that many exist.
    fn rank_items(&self, context: &[Utterance], depth: usize) -> Result<Vec<String>>;
    /// Generated response as tokenizer pieces, placeholders unfilled.
    fn generate_tokens(&self, context: &[Utterance]) -> Result<Vec<String>>;
    /// Reference target as tokenizer pieces.
    fn reference_tokens(&self, target: &str) -> Vec<String>;
}

/// Adapter running a model with precomputed entity representations.
pub struct ModelRunner<'m> {
    pub model: &'m RecommenderModel,
    pub entities: EntityRepresentations,
    pub max_len: usize,
    pub strategy: DecodeStrategy,
}

impl<'m> ModelRunner<'m> {
    pub fn new(model: &'m RecommenderModel, strategy: DecodeStrategy) -> Result<Self> {
        Ok(Self {
            entities: model.entity_representations()?,
            max_len: model.config().max_response_len,
            model,
            strategy,
        })
    }
}

impl CrsModel for ModelRunner<'_> {
    fn rank_items(&self, context: &[Utterance], depth: usize) -> Result<Vec<String>> {
        let rep = self.model.encode_context(context)?;
        let r = self.model.recommend_with(&rep, &self.entities, depth.clamp(1, self.model.item_ids().len()))?;
        Ok(r.top_k.into_iter().map(|(id, _)| id).collect())
    }

    fn generate_tokens(&self, context: &[Utterance]) -> Result<Vec<String>> {
        let rep = self.model.encode_context(context)?;
        let ids = self.model.generate(&rep, self.max_len, self.strategy);
        Ok(self.model.tokenizer().pieces(&ids))
    }

    fn reference_tokens(&self, target: &str) -> Vec<String> {
        let tok = self.model.tokenizer();
        tok.pieces(&tok.encode(target))
    }
}

/// Scores `model` on the non-augmented `triplets`.
pub fn evaluate(model: &dyn CrsModel, triplets: &[TrainingTriplet], ks: &[usize], ns: &[usize]) -> Result<MetricReport> {
    let depth = ks.iter().copied().max().unwrap_or(1);
    let mut ranked = Vec::new();
    let mut gold = Vec::new();
    let mut generated = Vec::new();
    let mut reference = Vec::new();
    let mut evaluated = 0;
    for t in triplets.iter().filter(|t| !t.is_augmented) {
        evaluated += 1;
        if t.has_recommendation() {
            ranked.push(model.rank_items(&t.context, depth)?);
            gold.push(t.gold_items.clone());
        }
        generated.push(model.generate_tokens(&t.context)?);
        reference.push(model.reference_tokens(&t.target));
    }
    Ok(MetricReport {
        recall: ks.iter().map(|&k| (k, recall_at_k(&ranked, &gold, k))).collect(),
        dist: ns.iter().map(|&n| (n, distinct_n(&generated, n))).collect(),
        item_f1: item_f1(&generated, &reference),
        ain: avg_item_number(&generated),
        evaluated_triplets: evaluated,
        scored_triplets: ranked.len(),
        responses: generated.len(),
    })
}

/// Generated responses read back from a predictions file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    /// Ranked item ids, best first.
    pub ranked: Vec<String>,
    pub generated: Vec<String>,
}

/// Report for externally produced predictions aligned with `triplets`.
pub fn evaluate_predictions(
    predictions: &[Prediction],
    triplets: &[TrainingTriplet],
    reference_tokens: impl Fn(&str) -> Vec<String>,
    ks: &[usize],
    ns: &[usize],
) -> MetricReport {
    let pairs: Vec<(&Prediction, &TrainingTriplet)> = predictions
        .iter()
        .zip(triplets.iter().filter(|t| !t.is_augmented))
        .collect();
    let (ranked, gold): (Vec<Vec<String>>, Vec<Vec<String>>) = pairs
        .iter()
        .filter(|(_, t)| t.has_recommendation())
        .map(|(p, t)| (p.ranked.clone(), t.gold_items.clone()))
        .unzip();
    let generated: Vec<Vec<String>> = pairs.iter().map(|(p, _)| p.generated.clone()).collect();
    let reference: Vec<Vec<String>> = pairs.iter().map(|(_, t)| reference_tokens(&t.target)).collect();
    MetricReport {
        recall: ks.iter().map(|&k| (k, recall_at_k(&ranked, &gold, k))).collect(),
        dist: ns.iter().map(|&n| (n, distinct_n(&generated, n))).collect(),
        item_f1: item_f1(&generated, &reference),
        ain: avg_item_number(&generated),
        evaluated_triplets: pairs.len(),
        scored_triplets: ranked.len(),
        responses: generated.len(),
    }
}

fn cell(v: Option<f64>) -> String {
    v.map_or_else(|| "n/a".to_string(), |v| format!("{v:.4}"))
}

impl fmt::Display for MetricReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mut rows: Vec<(String, String)> = Vec::new();
        for (k, v) in &self.recall {
            rows.push((format!("R@{k}"), cell(*v)));
        }
        for (n, v) in &self.dist {
            rows.push((format!("Dist-{n} (ratio)"), cell(v.map(|d| d.ratio))));
            rows.push((format!("Dist-{n} (per response)"), cell(v.map(|d| d.per_response))));
        }
        rows.push(("Item-F1".into(), cell(self.item_f1)));
        rows.push(("AIN".into(), cell(self.ain)));
        rows.push(("triplets".into(), self.evaluated_triplets.to_string()));
        rows.push(("scored".into(), self.scored_triplets.to_string()));
        let width = rows.iter().map(|(k, _)| k.len()).max().unwrap_or(0);
        for (k, v) in rows {
            writeln!(f, "{k:<width$}  {v:>10}")?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toks(s: &str) -> Vec<String> {
        s.split_whitespace().map(str::to_string).collect()
    }

    #[test]
    fn recall_examples() {
        let ranked = vec![vec!["a", "b", "c"]];
        let gold = vec![vec!["a"]];
        assert_eq!(recall_at_k(&ranked, &gold, 1), Some(1.0));
        let gold = vec![vec!["c"]];
        assert_eq!(recall_at_k(&ranked, &gold, 2), Some(0.0));
        assert_eq!(recall_at_k(&ranked, &gold, 3), Some(1.0));
        let none: Vec<Vec<&str>> = vec![];
        assert_eq!(recall_at_k(&none, &none, 1), None);
    }

    #[test]
    fn distinct_examples() {
        let one = vec![toks("a b c")];
        assert_eq!(distinct_n(&one, 2).unwrap().ratio, 100.0);
        let two = vec![toks("a b"), toks("a b")];
        let d = distinct_n(&two, 2).unwrap();
        assert_eq!(d.ratio, 50.0);
        assert_eq!(d.per_response, 50.0);
        assert_eq!(distinct_n(&two, 3), None);
    }

    #[test]
    fn item_f1_confusion_example() {
        // 3 TP, 2 FP, 1 FN, 2 TN
        let g: Vec<Vec<String>> = ["[MOVIE]", "[MOVIE]", "[MOVIE]", "[MOVIE] x", "x [MOVIE]", "no", "no", "no"]
            .iter()
            .map(|s| toks(s))
            .collect();
        let r: Vec<Vec<String>> = ["[MOVIE]", "a [MOVIE]", "[MOVIE]", "no", "no", "[MOVIE]", "no", "no"]
            .iter()
            .map(|s| toks(s))
            .collect();
        let f1 = item_f1(&g, &r).unwrap();
        assert!((f1 - 6.0 / 9.0).abs() < 1e-12);
        let neg = vec![toks("a"); 3];
        let pos = vec![toks("[MOVIE]"); 3];
        assert_eq!(item_f1(&neg, &pos), Some(0.0));
        assert_eq!(item_f1(&neg, &neg), None);
    }

    #[test]
    fn ain_examples() {
        let g = vec![toks("a"), toks("[MOVIE]"), toks("[MOVIE] [MOVIE]"), toks("x [MOVIE]")];
        assert_eq!(avg_item_number(&g), Some(100.0));
        assert_eq!(avg_item_number::<String>(&[]), None);
    }
}
