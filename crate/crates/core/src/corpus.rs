//! Dialogue corpus ingestion and training-triplet construction.
//!
//! A corpus file holds one conversation per line:
//!
//! ```json
//! {"conversation_id": "c1", "turns": [
//!   {"speaker": "seeker", "text": "I loved Alien.", "items": [{"id": "m1", "span": [8, 13]}]}
//! ]}
//! ```
//!
//! Spans are half-open character offsets into `text`. A recommender turn
//! (other than the first turn of a dialogue) becomes one [`TrainingTriplet`]:
//! items already mentioned earlier in the dialogue are dropped from the gold
//! set and stay verbatim in the target, while each newly recommended item is
//! replaced by the [`PLACEHOLDER`] token.

use std::collections::{BTreeSet, HashSet};
use std::io::{BufRead, Write};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kg::KnowledgeGraph;
use crate::tokenizer::PLACEHOLDER;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Speaker {
    Seeker,
    Recommender,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ItemMention {
    pub id: String,
    /// `[start, end)` in characters.
    pub span: [usize; 2],
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Utterance {
    pub speaker: Speaker,
    pub text: String,
    #[serde(rename = "items", default)]
    pub mentions: Vec<ItemMention>,
}

impl Utterance {
    pub fn new(speaker: Speaker, text: impl Into<String>) -> Self {
        Self {
            speaker,
            text: text.into(),
            mentions: Vec::new(),
        }
    }

    /// Builds an utterance from text segments; `(segment, Some(id))` marks an item mention.
    pub fn from_segments(speaker: Speaker, segments: &[(&str, Option<&str>)]) -> Self {
        let mut text = String::new();
        let mut mentions = Vec::new();
        for (segment, id) in segments {
            let start = text.chars().count();
            text.push_str(segment);
            if let Some(id) = id {
                mentions.push(ItemMention {
                    id: id.to_string(),
                    span: [start, start + segment.chars().count()],
                });
            }
        }
        Self {
            speaker,
            text,
            mentions,
        }
    }

    pub fn item_mentions(&self) -> impl Iterator<Item = &str> {
        self.mentions.iter().map(|m| m.id.as_str())
    }

    /// Text covered by `mention`.
    pub fn surface(&self, mention: &ItemMention) -> &str {
        let (a, b) = char_range_to_bytes(&self.text, mention.span);
        &self.text[a..b]
    }

    fn validate(&self) -> std::result::Result<(), String> {
        if self.text.trim().is_empty() {
            return Err("empty utterance".into());
        }
        if self.text.contains(PLACEHOLDER) {
            return Err(format!("utterance text contains reserved token {PLACEHOLDER}"));
        }
        let len = self.text.chars().count();
        let mut last_end = 0;
        for m in &self.mentions {
            let [start, end] = m.span;
            if start >= end || end > len {
                return Err(format!("span [{start}, {end}) out of range for item {}", m.id));
            }
            if start < last_end {
                return Err(format!("overlapping or unsorted span for item {}", m.id));
            }
            last_end = end;
        }
        Ok(())
    }
}

fn char_range_to_bytes(text: &str, [start, end]: [usize; 2]) -> (usize, usize) {
    let mut indices = text.char_indices().map(|(i, _)| i).chain(std::iter::once(text.len()));
    let a = indices.nth(start).unwrap_or(text.len());
    let b = if end == start {
        a
    } else {
        indices.nth(end - start - 1).unwrap_or(text.len())
    };
    (a, b)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Conversation {
    pub conversation_id: String,
    pub turns: Vec<Utterance>,
}

/// Item mention that does not resolve to a movie of the loaded graph.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct UnresolvedMention {
    pub line: usize,
    pub conversation_id: String,
    pub turn: usize,
    pub item_id: String,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParsedCorpus {
    pub conversations: Vec<Conversation>,
    pub unresolved: Vec<UnresolvedMention>,
}

/// Parses a line-delimited corpus. Blank lines are skipped. When `known_items`
/// is given, mentions outside it are collected as diagnostics.
pub fn parse_corpus<R: BufRead>(
    reader: R,
    known_items: Option<&HashSet<String>>,
) -> Result<ParsedCorpus> {
    let mut out = ParsedCorpus::default();
    for (idx, line) in reader.lines().enumerate() {
        let line_no = idx + 1;
        let line = line.map_err(|e| Error::Parse {
            line: line_no,
            message: e.to_string(),
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let mut conv: Conversation = serde_json::from_str(&line).map_err(|e| Error::Parse {
            line: line_no,
            message: e.to_string(),
        })?;
        if conv.turns.is_empty() {
            return Err(Error::Parse {
                line: line_no,
                message: "conversation has no turns".into(),
            });
        }
        for (t, turn) in conv.turns.iter_mut().enumerate() {
            turn.mentions.sort_by_key(|m| m.span);
            turn.validate().map_err(|message| Error::Parse {
                line: line_no,
                message: format!("turn {t}: {message}"),
            })?;
            if let Some(known) = known_items {
                for m in &turn.mentions {
                    if !known.contains(&m.id) {
                        out.unresolved.push(UnresolvedMention {
                            line: line_no,
                            conversation_id: conv.conversation_id.clone(),
                            turn: t,
                            item_id: m.id.clone(),
                        });
                    }
                }
            }
        }
        out.conversations.push(conv);
    }
    Ok(out)
}

pub fn write_corpus<W: Write>(mut writer: W, conversations: &[Conversation]) -> Result<()> {
    for conv in conversations {
        serde_json::to_writer(&mut writer, conv)?;
        writer
            .write_all(b"\n")
            .map_err(|e| Error::io("<corpus writer>", e))?;
    }
    Ok(())
}

/// One training example `(context, gold items, masked target)`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrainingTriplet {
    /// `None` for augmented triplets.
    #[serde(default)]
    pub conversation_id: Option<String>,
    #[serde(default)]
    pub turn_index: usize,
    pub context: Vec<Utterance>,
    pub gold_items: Vec<String>,
    pub target: String,
    pub is_augmented: bool,
    /// Original text of each placeholder in `target`, in order.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub masked_surfaces: Vec<String>,
}

impl TrainingTriplet {
    pub fn has_recommendation(&self) -> bool {
        !self.gold_items.is_empty()
    }

    /// Restores the original response text.
    pub fn unmask(&self) -> String {
        unmask(&self.target, &self.masked_surfaces)
    }
}

pub fn unmask(target: &str, surfaces: &[String]) -> String {
    let mut out = String::with_capacity(target.len());
    let mut rest = target;
    let mut surfaces = surfaces.iter();
    while let Some(pos) = rest.find(PLACEHOLDER) {
        out.push_str(&rest[..pos]);
        match surfaces.next() {
            Some(s) => out.push_str(s),
            None => out.push_str(PLACEHOLDER),
        }
        rest = &rest[pos + PLACEHOLDER.len()..];
    }
    out.push_str(rest);
    out
}

/// Masks the first mention of every newly recommended item in `turn`.
/// Returns `(target, gold ids, masked surfaces)`; `seen` holds the items
/// mentioned anywhere in the preceding context.
fn mask_turn(turn: &Utterance, seen: &HashSet<&str>) -> (String, Vec<String>, Vec<String>) {
    let mut gold: Vec<String> = Vec::new();
    let mut surfaces = Vec::new();
    let mut target = String::with_capacity(turn.text.len());
    let mut cursor = 0;
    for m in &turn.mentions {
        if seen.contains(m.id.as_str()) || gold.contains(&m.id) {
            continue;
        }
        let (a, b) = char_range_to_bytes(&turn.text, m.span);
        target.push_str(&turn.text[cursor..a]);
        target.push_str(PLACEHOLDER);
        surfaces.push(turn.text[a..b].to_string());
        gold.push(m.id.clone());
        cursor = b;
    }
    target.push_str(&turn.text[cursor..]);
    (target, gold, surfaces)
}

/// Decomposes a conversation into one triplet per recommender turn that has
/// at least one preceding utterance.
pub fn extract_triplets(conv: &Conversation) -> Vec<TrainingTriplet> {
    let mut out = Vec::new();
    let mut seen: HashSet<&str> = HashSet::new();
    for (j, turn) in conv.turns.iter().enumerate() {
        if j >= 1 && turn.speaker == Speaker::Recommender {
            let (target, gold_items, masked_surfaces) = mask_turn(turn, &seen);
            out.push(TrainingTriplet {
                conversation_id: Some(conv.conversation_id.clone()),
                turn_index: j,
                context: conv.turns[..j].to_vec(),
                gold_items,
                target,
                is_augmented: false,
                masked_surfaces,
            });
        }
        seen.extend(turn.item_mentions());
    }
    out
}

/// Number of recommender-turn item mentions dropped as repetitions.
pub fn count_filtered_mentions(conv: &Conversation) -> usize {
    let triplets = extract_triplets(conv);
    let mentioned: usize = conv
        .turns
        .iter()
        .enumerate()
        .filter(|(j, t)| *j >= 1 && t.speaker == Speaker::Recommender)
        .map(|(_, t)| t.mentions.len())
        .sum();
    let kept: usize = triplets.iter().map(|t| t.gold_items.len()).sum();
    mentioned - kept
}

/// One triplet per descriptive (non-movie) entity: its name as the whole
/// context, the entity itself as the gold item, and no generation target.
pub fn augment_with_entities(kg: &KnowledgeGraph) -> Vec<TrainingTriplet> {
    kg.nodes()
        .values()
        .filter(|n| !n.node_type.is_movie())
        .map(|n| TrainingTriplet {
            conversation_id: None,
            turn_index: 0,
            context: vec![Utterance::new(Speaker::Seeker, n.name.clone())],
            gold_items: vec![n.id.clone()],
            target: String::new(),
            is_augmented: true,
            masked_surfaces: Vec::new(),
        })
        .collect()
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct DatasetSplits {
    pub train: Vec<TrainingTriplet>,
    pub valid: Vec<TrainingTriplet>,
    pub test: Vec<TrainingTriplet>,
}

/// Splits by conversation so no dialogue straddles two splits. Conversation
/// ids are sorted, shuffled with a seeded ChaCha8 generator, then cut at
/// `round(ratio * n)`. Augmented triplets always go to train.
pub fn split_dataset(
    triplets: Vec<TrainingTriplet>,
    ratios: (f64, f64, f64),
    seed: u64,
) -> Result<DatasetSplits> {
    let (rt, rv, rs) = ratios;
    if [rt, rv, rs].iter().any(|r| !(0.0..=1.0).contains(r)) || ((rt + rv + rs) - 1.0).abs() > 1e-9 {
        return Err(Error::Config(format!(
            "split ratios must be in [0, 1] and sum to 1, got ({rt}, {rv}, {rs})"
        )));
    }
    let ids: BTreeSet<&str> = triplets
        .iter()
        .filter_map(|t| t.conversation_id.as_deref())
        .collect();
    let mut ids: Vec<String> = ids.into_iter().map(str::to_string).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    ids.shuffle(&mut rng);
    let n = ids.len();
    let n_train = ((rt * n as f64).round() as usize).min(n);
    let n_valid = ((rv * n as f64).round() as usize).min(n - n_train);
    let train_ids: HashSet<&str> = ids[..n_train].iter().map(String::as_str).collect();
    let valid_ids: HashSet<&str> = ids[n_train..n_train + n_valid]
        .iter()
        .map(String::as_str)
        .collect();

    let mut splits = DatasetSplits::default();
    for t in triplets {
        match t.conversation_id.as_deref() {
            None => splits.train.push(t),
            Some(id) if train_ids.contains(id) => splits.train.push(t),
            Some(id) if valid_ids.contains(id) => splits.valid.push(t),
            Some(_) => splits.test.push(t),
        }
    }
    Ok(splits)
}

pub fn write_triplets<W: Write>(mut writer: W, triplets: &[TrainingTriplet]) -> Result<()> {
    for t in triplets {
        serde_json::to_writer(&mut writer, t)?;
        writer
            .write_all(b"\n")
            .map_err(|e| Error::io("<triplet writer>", e))?;
    }
    Ok(())
}

pub fn read_triplets<R: BufRead>(reader: R) -> Result<Vec<TrainingTriplet>> {
    let mut out = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| Error::Parse {
            line: idx + 1,
            message: e.to_string(),
        })?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| Error::Parse {
            line: idx + 1,
            message: e.to_string(),
        })?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fixtures;
    use proptest::prelude::*;

    fn placeholder_count(s: &str) -> usize {
        s.matches(PLACEHOLDER).count()
    }

    #[test]
    fn parse_preserves_turns_and_ids() {
        let line = r#"{"conversation_id":"c7","turns":[
            {"speaker":"seeker","text":"hi"},
            {"speaker":"recommender","text":"try Alien","items":[{"id":"m1","span":[4,9]}]},
            {"speaker":"seeker","text":"thanks"}]}"#
            .replace('\n', "");
        let parsed = parse_corpus(line.as_bytes(), None).unwrap();
        assert_eq!(parsed.conversations.len(), 1);
        let c = &parsed.conversations[0];
        assert_eq!(c.conversation_id, "c7");
        assert_eq!(c.turns.len(), 3);
        assert_eq!(c.turns[1].surface(&c.turns[1].mentions[0]), "Alien");
    }

    #[test]
    fn empty_utterance_is_a_parse_error() {
        let line = r#"{"conversation_id":"c","turns":[{"speaker":"seeker","text":""}]}"#;
        let err = parse_corpus(line.as_bytes(), None).unwrap_err();
        assert!(err.to_string().contains("empty utterance"), "{err}");
        assert!(matches!(err, Error::Parse { line: 1, .. }));
    }

    #[test]
    fn malformed_line_reports_line_number() {
        let input = "\n{\"conversation_id\":\"a\",\"turns\":[{\"speaker\":\"seeker\",\"text\":\"x\"}]}\n{oops\n";
        match parse_corpus(input.as_bytes(), None) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn empty_stream_is_empty_corpus() {
        let parsed = parse_corpus(&b""[..], None).unwrap();
        assert!(parsed.conversations.is_empty());
    }

    #[test]
    fn out_of_range_span_rejected() {
        let line = r#"{"conversation_id":"c","turns":[{"speaker":"seeker","text":"abc","items":[{"id":"m","span":[1,9]}]}]}"#;
        assert!(parse_corpus(line.as_bytes(), None).is_err());
    }

    #[test]
    fn unresolved_mentions_are_collected() {
        let line = r#"{"conversation_id":"c","turns":[{"speaker":"seeker","text":"abc","items":[{"id":"zz","span":[0,1]}]}]}"#;
        let known: HashSet<String> = ["m1".to_string()].into();
        let parsed = parse_corpus(line.as_bytes(), Some(&known)).unwrap();
        assert_eq!(parsed.unresolved.len(), 1);
        assert_eq!(parsed.unresolved[0].item_id, "zz");
    }

    #[test]
    fn fixture_round_trip_is_a_fixpoint() {
        let kg = fixtures::synthetic_kg();
        let convs = fixtures::synthetic_dialogues(&kg, 10, 3);
        let mut buf = Vec::new();
        write_corpus(&mut buf, &convs).unwrap();
        let parsed = parse_corpus(buf.as_slice(), None).unwrap();
        assert_eq!(parsed.conversations, convs);
        let mut again = Vec::new();
        write_corpus(&mut again, &parsed.conversations).unwrap();
        assert_eq!(buf, again);
    }

    #[test]
    fn repetitive_item_is_not_a_recommendation() {
        let conv = fixtures::repeated_item_example();
        let triplets = extract_triplets(&conv);
        let last = triplets.last().unwrap();
        assert!(last.gold_items.is_empty());
        assert_eq!(last.target, "Yes Police Academy is funny.");
        assert!(triplets
            .iter()
            .filter(|t| t.turn_index == 3)
            .all(|t| !t.gold_items.contains(&"police-academy-1984".to_string())));
    }

    #[test]
    fn recommended_item_is_masked() {
        let conv = fixtures::fresh_recommendation_example();
        let triplets = extract_triplets(&conv);
        let t = triplets.last().unwrap();
        assert_eq!(t.gold_items, vec!["happy-death-day-2017".to_string()]);
        assert_eq!(t.target, "Oh, you like scary movies? I recently watched [MOVIE].");
        assert_eq!(t.unmask(), conv.turns.last().unwrap().text);
    }

    #[test]
    fn turn_without_items_is_unchanged() {
        let conv = Conversation {
            conversation_id: "x".into(),
            turns: vec![
                Utterance::new(Speaker::Seeker, "hello"),
                Utterance::new(Speaker::Recommender, "what do you like?"),
            ],
        };
        let t = extract_triplets(&conv);
        assert_eq!(t.len(), 1);
        assert!(t[0].gold_items.is_empty());
        assert_eq!(t[0].target, "what do you like?");
    }

    #[test]
    fn first_turn_and_seeker_turns_yield_no_triplets() {
        let conv = Conversation {
            conversation_id: "x".into(),
            turns: vec![
                Utterance::new(Speaker::Recommender, "hi"),
                Utterance::new(Speaker::Seeker, "hello"),
                Utterance::new(Speaker::Seeker, "anyone?"),
            ],
        };
        assert!(extract_triplets(&conv).is_empty());
    }

    #[test]
    fn repeated_mention_within_turn_masked_once() {
        let turn = Utterance::from_segments(
            Speaker::Recommender,
            &[("", None), ("Alien", Some("m1")), (" is great. ", None), ("Alien", Some("m1")), ("!", None)],
        );
        let conv = Conversation {
            conversation_id: "x".into(),
            turns: vec![Utterance::new(Speaker::Seeker, "hi"), turn],
        };
        let t = &extract_triplets(&conv)[0];
        assert_eq!(t.target, "[MOVIE] is great. Alien!");
        assert_eq!(t.gold_items.len(), placeholder_count(&t.target));
    }

    #[test]
    fn augmentation_yields_one_triplet_per_descriptive_entity() {
        let kg = fixtures::synthetic_kg();
        let aug = augment_with_entities(&kg);
        let descriptive = kg.nodes().values().filter(|n| !n.node_type.is_movie()).count();
        assert_eq!(aug.len(), descriptive);
        assert!(aug.iter().all(|t| t.is_augmented && t.gold_items.len() == 1));
        let clooney = aug
            .iter()
            .find(|t| t.context[0].text == "George Clooney")
            .expect("fixture contains George Clooney");
        assert_eq!(clooney.gold_items, vec!["cast:Q23844".to_string()]);
    }

    #[test]
    fn augmentation_of_movie_only_graph_is_empty() {
        let kg = KnowledgeGraph::empty();
        assert!(augment_with_entities(&kg).is_empty());
    }

    fn triplets_for(n: usize) -> Vec<TrainingTriplet> {
        (0..n)
            .flat_map(|c| {
                (0..2).map(move |t| TrainingTriplet {
                    conversation_id: Some(format!("conv-{c:02}")),
                    turn_index: t,
                    context: vec![Utterance::new(Speaker::Seeker, "x")],
                    gold_items: vec![],
                    target: "y".into(),
                    is_augmented: false,
                    masked_surfaces: vec![],
                })
            })
            .collect()
    }

    #[test]
    fn split_all_train() {
        let s = split_dataset(triplets_for(5), (1.0, 0.0, 0.0), 0).unwrap();
        assert_eq!((s.train.len(), s.valid.len(), s.test.len()), (10, 0, 0));
    }

    #[test]
    fn split_is_seed_deterministic_and_matches_independent_shuffle() {
        let a = split_dataset(triplets_for(10), (0.8, 0.1, 0.1), 0).unwrap();
        let b = split_dataset(triplets_for(10), (0.8, 0.1, 0.1), 0).unwrap();
        assert_eq!(a, b);
        let conv_ids = |v: &[TrainingTriplet]| -> BTreeSet<String> {
            v.iter().filter_map(|t| t.conversation_id.clone()).collect()
        };
        assert_eq!(conv_ids(&a.train).len(), 8);
        assert_eq!(conv_ids(&a.valid).len(), 1);
        assert_eq!(conv_ids(&a.test).len(), 1);

        // independent oracle: same generator, same sorted ids
        let mut ids: Vec<String> = (0..10).map(|c| format!("conv-{c:02}")).collect();
        ids.shuffle(&mut ChaCha8Rng::seed_from_u64(0));
        assert_eq!(conv_ids(&a.valid), BTreeSet::from([ids[8].clone()]));
        assert_eq!(conv_ids(&a.test), BTreeSet::from([ids[9].clone()]));
    }

    #[test]
    fn split_rejects_bad_ratios() {
        assert!(matches!(
            split_dataset(vec![], (0.5, 0.2, 0.2), 0),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn augmented_triplets_go_to_train() {
        let mut t = triplets_for(4);
        t.push(TrainingTriplet {
            conversation_id: None,
            turn_index: 0,
            context: vec![Utterance::new(Speaker::Seeker, "George Clooney")],
            gold_items: vec!["cast:Q23844".into()],
            target: String::new(),
            is_augmented: true,
            masked_surfaces: vec![],
        });
        let s = split_dataset(t, (0.0, 0.5, 0.5), 1).unwrap();
        assert_eq!(s.train.len(), 1);
        assert!(s.train[0].is_augmented);
    }

    proptest! {
        #[test]
        fn filtering_masking_and_unmasking_invariants(seed in 0u64..500) {
            let kg = fixtures::synthetic_kg();
            for conv in fixtures::synthetic_dialogues(&kg, 3, seed) {
                for t in extract_triplets(&conv) {
                    let context_items: HashSet<&str> =
                        t.context.iter().flat_map(|u| u.item_mentions()).collect();
                    prop_assert!(t.gold_items.iter().all(|g| !context_items.contains(g.as_str())));
                    prop_assert_eq!(placeholder_count(&t.target), t.gold_items.len());
                    prop_assert_eq!(&t.unmask(), &conv.turns[t.turn_index].text);
                }
            }
        }
    }
}
