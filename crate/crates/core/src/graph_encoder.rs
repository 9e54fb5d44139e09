//! Relational graph convolution over the knowledge graph.
//!
//! One layer computes, for every entity `i`,
//!
//! ```text
//! h_i' = act( sum_r sum_{j in N_r(i)} (1 / |N_r(i)|) W_r h_j  +  W h_i )
//! ```
//!
//! `N_r(i)` holds the entities joined to `i` by an `r` edge in either
//! direction; relations with no neighbours contribute nothing. With row
//! vectors the products are written `h W`.

use std::collections::BTreeSet;
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Matrix, SparseRows, Tape, Var};
use crate::error::{Error, Result};
use crate::kg::{KnowledgeGraph, NodeType, Relation};
use crate::params::{normal_matrix, ParamId};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Identity,
    #[default]
    Relu,
}

/// Per-relation mean-aggregation operators.
#[derive(Debug, Clone, PartialEq)]
pub struct RelationalAdjacency {
    pub num_nodes: usize,
    pub relations: Vec<Arc<SparseRows>>,
}

impl RelationalAdjacency {
    /// No edges at all: every layer reduces to `act(h W)`.
    pub fn empty(num_nodes: usize, num_relations: usize) -> Self {
        Self {
            num_nodes,
            relations: (0..num_relations)
                .map(|_| Arc::new(SparseRows::new(num_nodes, num_nodes)))
                .collect(),
        }
    }

    /// `edges` are `(head, relation, tail)` row indices.
    pub fn from_edges(num_nodes: usize, num_relations: usize, edges: &[(usize, usize, usize)]) -> Self {
        let mut neighbours = vec![vec![BTreeSet::new(); num_nodes]; num_relations];
        for &(h, r, t) in edges {
            if h == t {
                continue;
            }
            neighbours[r][h].insert(t);
            neighbours[r][t].insert(h);
        }
        let relations = neighbours
            .into_iter()
            .map(|per_node| {
                let mut m = SparseRows::new(num_nodes, num_nodes);
                for (i, set) in per_node.into_iter().enumerate() {
                    let norm = 1.0 / set.len().max(1) as f64;
                    m.entries[i] = set.into_iter().map(|j| (j, norm)).collect();
                }
                Arc::new(m)
            })
            .collect();
        Self {
            num_nodes,
            relations,
        }
    }

    pub fn from_graph(kg: &KnowledgeGraph) -> Self {
        Self::from_edges(kg.num_entities(), Relation::COUNT, &kg.indexed_edges())
    }

    pub fn num_relations(&self) -> usize {
        self.relations.len()
    }
}

/// Parameter handles of one R-GCN layer inside the model's store.
#[derive(Debug, Clone, PartialEq)]
pub struct RgcnLayerHandles {
    pub relation_weights: Vec<ParamId>,
    pub self_weight: ParamId,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GraphEncoderHandles {
    pub embeddings: ParamId,
    pub layers: Vec<RgcnLayerHandles>,
}

/// Node-type head: `Linear(d, d) -> ReLU -> Linear(d, 5)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassifierHandles {
    pub hidden_w: ParamId,
    pub hidden_b: ParamId,
    pub out_w: ParamId,
    pub out_b: ParamId,
}

/// One layer on the tape, with weights given as tape variables.
pub fn rgcn_layer_vars(
    tape: &mut Tape<'_>,
    h: Var,
    adjacency: &RelationalAdjacency,
    relation_weights: &[Var],
    self_weight: Var,
    activation: Activation,
) -> Var {
    let mut acc = tape.matmul(h, self_weight);
    for (matrix, &w) in adjacency.relations.iter().zip(relation_weights) {
        if matrix.nnz() == 0 {
            continue;
        }
        let agg = tape.spmm(matrix.clone(), h);
        let msg = tape.matmul(agg, w);
        acc = tape.add(acc, msg);
    }
    match activation {
        Activation::Identity => acc,
        Activation::Relu => tape.relu(acc),
    }
}

/// Full graph encoder: embeddings through every layer. Returns `H`.
pub fn encode_entities_on_tape(
    tape: &mut Tape<'_>,
    handles: &GraphEncoderHandles,
    adjacency: &RelationalAdjacency,
    activation: Activation,
) -> Var {
    let mut h = tape.param(handles.embeddings);
    for layer in &handles.layers {
        let rel: Vec<Var> = layer.relation_weights.iter().map(|&w| tape.param(w)).collect();
        let sw = tape.param(layer.self_weight);
        h = rgcn_layer_vars(tape, h, adjacency, &rel, sw, activation);
    }
    h
}

/// Errors on the first non-finite row.
pub fn check_finite(h: &Matrix, what: &str) -> Result<()> {
    for (i, row) in h.rows().into_iter().enumerate() {
        if row.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!("non-finite {what} for entity row {i}")));
        }
    }
    Ok(())
}

/// Stand-alone layer weights, for evaluation outside a model.
#[derive(Debug, Clone, PartialEq)]
pub struct RgcnLayer {
    pub relation_weights: Vec<Matrix>,
    pub self_weight: Matrix,
    pub activation: Activation,
}

impl RgcnLayer {
    pub fn forward(&self, h: &Matrix, adjacency: &RelationalAdjacency) -> Result<Matrix> {
        let store = crate::params::ParamStore::new();
        let mut tape = Tape::new(&store);
        let hv = tape.input_borrowed(h, false);
        let rel: Vec<Var> = self
            .relation_weights
            .iter()
            .map(|w| tape.input_borrowed(w, false))
            .collect();
        let sw = tape.input_borrowed(&self.self_weight, false);
        let out = rgcn_layer_vars(&mut tape, hv, adjacency, &rel, sw, self.activation);
        let out = tape.value(out).clone();
        check_finite(&out, "representation")?;
        Ok(out)
    }
}

/// Applies `layers` in sequence.
pub fn encode_entities(h0: &Matrix, layers: &[RgcnLayer], adjacency: &RelationalAdjacency) -> Result<Matrix> {
    let mut h = h0.clone();
    for layer in layers {
        h = layer.forward(&h, adjacency)?;
    }
    Ok(h)
}

/// Mean cross-entropy of the node-type head over `rows`.
pub fn node_type_loss(
    tape: &mut Tape<'_>,
    h: Var,
    classifier: &ClassifierHandles,
    rows: &[usize],
    types: &[NodeType],
) -> Var {
    if rows.is_empty() {
        return tape.constant(Matrix::zeros((1, 1)));
    }
    let logits = node_type_logits(tape, h, classifier, rows);
    let targets: Vec<(usize, usize)> = rows
        .iter()
        .enumerate()
        .map(|(k, &r)| (k, types[r].index()))
        .collect();
    let total = tape.cross_entropy_sum(logits, &targets);
    tape.scale(total, 1.0 / rows.len() as f64)
}

pub fn node_type_logits(tape: &mut Tape<'_>, h: Var, classifier: &ClassifierHandles, rows: &[usize]) -> Var {
    let x = tape.gather(h, rows);
    let w1 = tape.param(classifier.hidden_w);
    let b1 = tape.param(classifier.hidden_b);
    let w2 = tape.param(classifier.out_w);
    let b2 = tape.param(classifier.out_b);
    let hidden = tape.linear(x, w1, b1);
    let hidden = tape.relu(hidden);
    tape.linear(hidden, w2, b2)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    Random,
    NameEncoded,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingTable {
    pub matrix: Matrix,
    pub provenance: Provenance,
}

/// `N(0, scale^2)` entries from a seeded ChaCha8 stream.
pub fn init_embeddings_random(num_entities: usize, dim: usize, seed: u64, scale: f64) -> EmbeddingTable {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    EmbeddingTable {
        matrix: normal_matrix(&mut rng, num_entities, dim, scale),
        provenance: Provenance::Random,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array2;

    fn identity(d: usize) -> Matrix {
        Array2::eye(d)
    }

    #[test]
    fn isolated_node_with_identity_self_weight_is_unchanged() {
        let adj = RelationalAdjacency::empty(1, 2);
        let layer = RgcnLayer {
            relation_weights: vec![identity(3), identity(3)],
            self_weight: identity(3),
            activation: Activation::Identity,
        };
        let h = Array2::from_shape_vec((1, 3), vec![0.5, -1.0, 2.0]).unwrap();
        assert_eq!(layer.forward(&h, &adj).unwrap(), h);
    }

    #[test]
    fn neighbour_messages_are_mean_normalised() {
        // node 0 has two neighbours under relation 0
        let adj = RelationalAdjacency::from_edges(3, 1, &[(0, 0, 1), (2, 0, 0)]);
        let layer = RgcnLayer {
            relation_weights: vec![identity(2)],
            self_weight: Array2::zeros((2, 2)),
            activation: Activation::Identity,
        };
        let h = Array2::from_shape_vec((3, 2), vec![9.0, 9.0, 1.0, 2.0, 3.0, 6.0]).unwrap();
        let out = layer.forward(&h, &adj).unwrap();
        assert_eq!(out.row(0).to_vec(), vec![2.0, 4.0]);
        // nodes 1 and 2 each see node 0 only
        assert_eq!(out.row(1).to_vec(), vec![9.0, 9.0]);
    }

    #[test]
    fn duplicate_and_reverse_edges_count_once() {
        let adj = RelationalAdjacency::from_edges(2, 1, &[(0, 0, 1), (1, 0, 0), (0, 0, 1)]);
        assert_eq!(adj.relations[0].entries[0], vec![(1, 1.0)]);
    }

    #[test]
    fn zero_embeddings_map_to_activation_of_zero() {
        let adj = RelationalAdjacency::from_edges(4, 2, &[(0, 0, 1), (1, 1, 2), (2, 0, 3)]);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let layer = RgcnLayer {
            relation_weights: vec![normal_matrix(&mut rng, 3, 3, 1.0), normal_matrix(&mut rng, 3, 3, 1.0)],
            self_weight: normal_matrix(&mut rng, 3, 3, 1.0),
            activation: Activation::Relu,
        };
        let out = encode_entities(&Array2::zeros((4, 3)), &[layer], &adj).unwrap();
        assert!(out.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn non_finite_output_names_the_row() {
        let adj = RelationalAdjacency::empty(2, 1);
        let layer = RgcnLayer {
            relation_weights: vec![identity(1)],
            self_weight: identity(1),
            activation: Activation::Identity,
        };
        let h = Array2::from_shape_vec((2, 1), vec![1.0, f64::NAN]).unwrap();
        let err = layer.forward(&h, &adj).unwrap_err();
        assert!(err.to_string().contains("row 1"), "{err}");
    }

    #[test]
    fn random_init_is_seeded_and_scale_zero_is_zero() {
        let a = init_embeddings_random(5, 4, 3, 1.0);
        let b = init_embeddings_random(5, 4, 3, 1.0);
        assert_eq!(a, b);
        assert_eq!(a.provenance, Provenance::Random);
        assert!(init_embeddings_random(5, 4, 3, 0.0).matrix.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn random_init_mean_within_three_sigma() {
        let t = init_embeddings_random(40, 64, 11, 0.5);
        let n = t.matrix.len() as f64;
        let mean = t.matrix.sum() / n;
        assert!(mean.abs() < 3.0 * 0.5 / n.sqrt(), "mean {mean}");
    }
}
