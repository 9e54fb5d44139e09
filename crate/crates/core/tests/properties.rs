mod common;

use std::sync::OnceLock;

use approx::assert_abs_diff_eq;
use kgrec::corpus::{extract_triplets, Conversation, Speaker, Utterance};
use kgrec::fixtures::overfit_fixture;
use kgrec::graph_encoder::{Activation, RelationalAdjacency, RgcnLayer};
use kgrec::metrics::{distinct_n, recall_at_k};
use kgrec::model::{rank, softmax, AblationFlags, RecommenderModel};
use ndarray::{Array2, Axis};
use proptest::prelude::*;

use common::*;

fn matrix(rows: usize, cols: usize) -> impl Strategy<Value = Array2<f64>> {
    proptest::collection::vec(-2.0f64..2.0, rows * cols)
        .prop_map(move |v| Array2::from_shape_vec((rows, cols), v).unwrap())
}

fn graph_case() -> impl Strategy<Value = (usize, usize, Vec<(usize, usize, usize)>, Array2<f64>, Vec<Array2<f64>>, Array2<f64>)> {
    (1usize..10, 1usize..4, 1usize..5).prop_flat_map(|(n, r, d)| {
        (
            Just(n),
            Just(r),
            proptest::collection::vec((0..n, 0..r, 0..n), 0..3 * n),
            matrix(n, d),
            proptest::collection::vec(matrix(d, d), r),
            matrix(d, d),
        )
    })
}

fn tiny_model() -> &'static RecommenderModel {
    static MODEL: OnceLock<RecommenderModel> = OnceLock::new();
    MODEL.get_or_init(|| {
        let fx = overfit_fixture(5, 2);
        let mut config = tiny_config(8);
        config.init_std = 0.3;
        RecommenderModel::new(config, fx.tokenizer, fx.kg, AblationFlags::default(), 1).unwrap()
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn rgcn_is_permutation_equivariant(
        (n, r, edges, h, rel, w0) in graph_case(),
        seed in any::<u64>(),
    ) {
        use rand::seq::SliceRandom;
        use rand::SeedableRng;
        let mut perm: Vec<usize> = (0..n).collect();
        perm.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(seed));
        let layer = RgcnLayer { relation_weights: rel, self_weight: w0, activation: Activation::Relu };
        let out = layer.forward(&h, &RelationalAdjacency::from_edges(n, r, &edges)).unwrap();
        // Node i of the permuted graph is node perm[i] of the original.
        let mut inverse = vec![0; n];
        for (i, &p) in perm.iter().enumerate() {
            inverse[p] = i;
        }
        let edges_p: Vec<_> = edges.iter().map(|&(a, rel, b)| (inverse[a], rel, inverse[b])).collect();
        let h_p = h.select(Axis(0), &perm);
        let out_p = layer.forward(&h_p, &RelationalAdjacency::from_edges(n, r, &edges_p)).unwrap();
        prop_assert!(max_abs_diff(&out_p, &out.select(Axis(0), &perm)) < 1e-12);
    }

    #[test]
    fn edge_direction_and_duplicates_do_not_matter(
        (n, r, edges, h, rel, w0) in graph_case(),
    ) {
        let layer = RgcnLayer { relation_weights: rel, self_weight: w0, activation: Activation::Identity };
        let base = layer.forward(&h, &RelationalAdjacency::from_edges(n, r, &edges)).unwrap();
        let mut doubled: Vec<_> = edges.iter().map(|&(a, rel, b)| (b, rel, a)).collect();
        doubled.extend(edges.iter().copied());
        let other = layer.forward(&h, &RelationalAdjacency::from_edges(n, r, &doubled)).unwrap();
        prop_assert!(max_abs_diff(&base, &other) < 1e-12);
    }

    #[test]
    fn softmax_is_a_distribution(scores in proptest::collection::vec(-500.0f64..500.0, 1..60)) {
        let p = softmax(&scores);
        assert_abs_diff_eq!(p.iter().sum::<f64>(), 1.0, epsilon = 1e-9);
        prop_assert!(p.iter().all(|&x| (0.0..=1.0).contains(&x)));
    }

    #[test]
    fn rank_is_a_sorted_permutation(scores in proptest::collection::vec(-3i32..3, 1..40)) {
        let scores: Vec<f64> = scores.into_iter().map(f64::from).collect();
        let ids: Vec<String> = (0..scores.len()).map(|i| format!("id{i:03}")).collect();
        let order = rank(&scores, &ids);
        let mut seen = order.clone();
        seen.sort_unstable();
        prop_assert_eq!(seen, (0..scores.len()).collect::<Vec<_>>());
        prop_assert_eq!(top_k_oracle(&scores, &ids, scores.len()), order.iter().map(|&i| ids[i].clone()).collect::<Vec<_>>());
    }

    #[test]
    fn recall_is_monotone_in_k(
        rows in proptest::collection::vec(
            (any::<u64>().prop_map(|seed| {
                use rand::seq::SliceRandom;
                use rand::SeedableRng;
                let mut v: Vec<String> = (0..12).map(|i| format!("m{i}")).collect();
                v.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(seed));
                v
            }), proptest::collection::vec(0usize..14, 0..4)),
            0..8,
        )
    ) {
        let ranked: Vec<Vec<String>> = rows.iter().map(|(r, _)| r.clone()).collect();
        let gold: Vec<Vec<String>> = rows.iter().map(|(_, g)| g.iter().map(|i| format!("m{i}")).collect()).collect();
        let mut last = 0.0;
        for k in 1..=13 {
            if let Some(r) = recall_at_k(&ranked, &gold, k) {
                prop_assert!(r >= last && r <= 1.0);
                last = r;
            }
        }
    }

    #[test]
    fn distinct_ratio_is_bounded(
        responses in proptest::collection::vec(proptest::collection::vec(0u8..5, 0..10), 1..8),
        n in 1usize..4,
    ) {
        if let Some(d) = distinct_n(&responses, n) {
            prop_assert!(d.ratio > 0.0 && d.ratio <= 100.0);
        }
    }

    #[test]
    fn masking_round_trips(
        parts in proptest::collection::vec((r"[a-z ,.!?]{1,12}", proptest::option::of(0usize..4)), 1..8),
        seen in proptest::collection::vec(0usize..4, 0..3),
    ) {
        let titles = ["Heat", "Alien", "Ronin", "Léon"];
        let segments: Vec<(String, Option<String>)> = parts
            .into_iter()
            .flat_map(|(text, item)| {
                let mut v = vec![(text, None)];
                if let Some(i) = item {
                    v.push((titles[i].to_string(), Some(format!("m{i}"))));
                }
                v
            })
            .collect();
        let borrowed: Vec<(&str, Option<&str>)> = segments.iter().map(|(s, i)| (s.as_str(), i.as_deref())).collect();
        let earlier: Vec<(String, Option<String>)> = seen.iter().map(|&i| (format!("{} ", titles[i]), Some(format!("m{i}")))).collect();
        let earlier_b: Vec<(&str, Option<&str>)> = earlier.iter().map(|(s, i)| (s.as_str(), i.as_deref())).collect();
        let mut first = Utterance::from_segments(Speaker::Seeker, &earlier_b);
        if first.text.trim().is_empty() {
            first = Utterance::new(Speaker::Seeker, "hi");
        }
        let turn = Utterance::from_segments(Speaker::Recommender, &borrowed);
        let conv = Conversation { conversation_id: "p".into(), turns: vec![first, turn.clone()] };
        let t = &extract_triplets(&conv)[0];
        prop_assert_eq!(t.unmask(), turn.text);
        for g in &t.gold_items {
            let idx: usize = g[1..].parse().unwrap();
            prop_assert!(!seen.contains(&idx), "already-mentioned {} kept as gold", g);
        }
    }

    #[test]
    fn decoder_is_causal(prefix in proptest::collection::vec(7usize..40, 2..8), replacement in 7usize..40) {
        let model = tiny_model();
        let rep = model.encode_context(&[seeker("Alien")]).unwrap();
        let a = model.generation_logits(&prefix, &rep.token_states);
        let mut changed = prefix.clone();
        *changed.last_mut().unwrap() = replacement;
        let b = model.generation_logits(&changed, &rep.token_states);
        let keep = prefix.len() - 1;
        let diff = max_abs_diff(
            &a.slice(ndarray::s![..keep, ..]).to_owned(),
            &b.slice(ndarray::s![..keep, ..]).to_owned(),
        );
        prop_assert!(diff < 1e-12, "earlier positions changed by {}", diff);
    }
}

#[test]
fn encoding_is_deterministic() {
    let model = tiny_model();
    let ctx = [seeker("Alien"), recommender("try Heat")];
    let a = model.encode_context(&ctx).unwrap();
    let b = model.encode_context(&ctx).unwrap();
    assert_eq!(a, b);
}
