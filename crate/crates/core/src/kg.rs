//! Movie knowledge graph: five node types, five typed relations.
//!
//! Files are line-delimited JSON:
//! nodes `{"id", "name", "node_type", "release_year"?}` and edges
//! `{"head", "relation", "tail"}`. Entity row order everywhere in the model
//! is ascending node id, and `item_index` lists the movie ids in that order.

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};
use unicode_normalization::UnicodeNormalization;

use crate::corpus::Conversation;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NodeType {
    Movie,
    Genre,
    CastMember,
    Director,
    ProductionCompany,
}

impl NodeType {
    pub const ALL: [NodeType; 5] = [
        NodeType::Movie,
        NodeType::Genre,
        NodeType::CastMember,
        NodeType::Director,
        NodeType::ProductionCompany,
    ];
    pub const COUNT: usize = 5;

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn is_movie(self) -> bool {
        self == NodeType::Movie
    }

    /// Id prefix used for descriptive entities created by the builder.
    pub fn id_prefix(self) -> &'static str {
        match self {
            NodeType::Movie => "movie",
            NodeType::Genre => "genre",
            NodeType::CastMember => "cast",
            NodeType::Director => "director",
            NodeType::ProductionCompany => "company",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Relation {
    HasGenre,
    HasCastMember,
    DirectedBy,
    ProducedBy,
    SubgenreOf,
}

impl Relation {
    pub const ALL: [Relation; 5] = [
        Relation::HasGenre,
        Relation::HasCastMember,
        Relation::DirectedBy,
        Relation::ProducedBy,
        Relation::SubgenreOf,
    ];
    pub const COUNT: usize = 5;

    pub fn index(self) -> usize {
        self as usize
    }

    /// `(head type, tail type)` this relation connects.
    pub fn endpoints(self) -> (NodeType, NodeType) {
        match self {
            Relation::HasGenre => (NodeType::Movie, NodeType::Genre),
            Relation::HasCastMember => (NodeType::Movie, NodeType::CastMember),
            Relation::DirectedBy => (NodeType::Movie, NodeType::Director),
            Relation::ProducedBy => (NodeType::Movie, NodeType::ProductionCompany),
            Relation::SubgenreOf => (NodeType::Genre, NodeType::Genre),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EntityNode {
    pub id: String,
    pub name: String,
    pub node_type: NodeType,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub release_year: Option<i32>,
}

impl EntityNode {
    /// `"Title (Year)"` for movies with a year, the bare name otherwise.
    pub fn display_name(&self) -> String {
        match self.release_year {
            Some(y) => format!("{} ({y})", self.name),
            None => self.name.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct RelationEdge {
    pub head: String,
    pub relation: Relation,
    pub tail: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct KnowledgeGraph {
    nodes: BTreeMap<String, EntityNode>,
    edges: Vec<RelationEdge>,
    item_index: Vec<String>,
    positions: HashMap<String, usize>,
}

impl KnowledgeGraph {
    pub fn empty() -> Self {
        Self {
            nodes: BTreeMap::new(),
            edges: Vec::new(),
            item_index: Vec::new(),
            positions: HashMap::new(),
        }
    }

    /// Validates and assembles a graph. Edge order is preserved.
    pub fn from_parts(nodes: Vec<EntityNode>, edges: Vec<RelationEdge>) -> Result<Self> {
        let mut map = BTreeMap::new();
        for node in nodes {
            if map.contains_key(&node.id) {
                return Err(Error::Validation(format!("duplicate node id {:?}", node.id)));
            }
            map.insert(node.id.clone(), node);
        }

        let mut dangling = Vec::new();
        for e in &edges {
            let (head, tail) = match (map.get(&e.head), map.get(&e.tail)) {
                (Some(h), Some(t)) => (h, t),
                _ => {
                    dangling.push(format!("({}, {:?}, {})", e.head, e.relation, e.tail));
                    continue;
                }
            };
            if e.head == e.tail {
                return Err(Error::Validation(format!(
                    "self-loop edge ({}, {:?}, {})",
                    e.head, e.relation, e.tail
                )));
            }
            let (ht, tt) = e.relation.endpoints();
            if head.node_type != ht || tail.node_type != tt {
                return Err(Error::Validation(format!(
                    "relation {:?} expects {:?} -> {:?} but edge ({}, {}) connects {:?} -> {:?}",
                    e.relation, ht, tt, e.head, e.tail, head.node_type, tail.node_type
                )));
            }
        }
        if !dangling.is_empty() {
            return Err(Error::Validation(format!(
                "dangling edges: {}",
                dangling.join(", ")
            )));
        }

        let positions = map.keys().enumerate().map(|(i, k)| (k.clone(), i)).collect();
        let item_index = map
            .values()
            .filter(|n| n.node_type.is_movie())
            .map(|n| n.id.clone())
            .collect();
        Ok(Self {
            nodes: map,
            edges,
            item_index,
            positions,
        })
    }

    pub fn nodes(&self) -> &BTreeMap<String, EntityNode> {
        &self.nodes
    }

    pub fn node(&self, id: &str) -> Option<&EntityNode> {
        self.nodes.get(id)
    }

    pub fn edges(&self) -> &[RelationEdge] {
        &self.edges
    }

    /// Movie ids in row order of the item matrix.
    pub fn item_index(&self) -> &[String] {
        &self.item_index
    }

    pub fn num_entities(&self) -> usize {
        self.nodes.len()
    }

    /// Row of `id` in the entity matrix.
    pub fn position(&self, id: &str) -> Option<usize> {
        self.positions.get(id).copied()
    }

    /// Entity-matrix rows of the movies, in `item_index` order.
    pub fn item_rows(&self) -> Vec<usize> {
        self.item_index
            .iter()
            .map(|id| self.positions[id])
            .collect()
    }

    pub fn node_types(&self) -> Vec<NodeType> {
        self.nodes.values().map(|n| n.node_type).collect()
    }

    pub fn names(&self) -> Vec<&str> {
        self.nodes.values().map(|n| n.name.as_str()).collect()
    }

    /// Edges as `(head row, relation index, tail row)`.
    pub fn indexed_edges(&self) -> Vec<(usize, usize, usize)> {
        self.edges
            .iter()
            .map(|e| {
                (
                    self.positions[&e.head],
                    e.relation.index(),
                    self.positions[&e.tail],
                )
            })
            .collect()
    }

    /// Same nodes, no relations.
    pub fn without_edges(&self) -> Self {
        Self {
            edges: Vec::new(),
            ..self.clone()
        }
    }

    pub fn write_nodes<W: Write>(&self, mut w: W) -> Result<()> {
        for node in self.nodes.values() {
            serde_json::to_writer(&mut w, node)?;
            w.write_all(b"\n").map_err(|e| Error::io("<nodes writer>", e))?;
        }
        Ok(())
    }

    pub fn write_edges<W: Write>(&self, mut w: W) -> Result<()> {
        for edge in &self.edges {
            serde_json::to_writer(&mut w, edge)?;
            w.write_all(b"\n").map_err(|e| Error::io("<edges writer>", e))?;
        }
        Ok(())
    }
}

fn read_jsonl<T: for<'de> Deserialize<'de>, R: BufRead>(reader: R) -> Result<Vec<T>> {
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

/// Reads and validates node and edge files.
pub fn load_graph<R1: BufRead, R2: BufRead>(nodes: R1, edges: R2) -> Result<KnowledgeGraph> {
    let nodes: Vec<EntityNode> = read_jsonl(nodes)?;
    let edges: Vec<RelationEdge> = read_jsonl(edges)?;
    KnowledgeGraph::from_parts(nodes, edges)
}

// ---------------------------------------------------------------------------
// Builder

/// A `(id, name)` pair; accepted as `{"id", "name"}` or `["id", "name"]`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum NamedRef {
    Object { id: String, name: String },
    Pair(String, String),
}

impl NamedRef {
    pub fn id(&self) -> &str {
        match self {
            NamedRef::Object { id, .. } | NamedRef::Pair(id, _) => id,
        }
    }

    pub fn name(&self) -> &str {
        match self {
            NamedRef::Object { name, .. } | NamedRef::Pair(_, name) => name,
        }
    }
}

/// Parent link of a genre: an id defined elsewhere in the dump, or a nested record.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum GenreRef {
    Id(String),
    Record(GenreRecord),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GenreRecord {
    pub id: String,
    pub name: String,
    #[serde(default)]
    pub parents: Vec<GenreRef>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DumpMovie {
    pub name: String,
    #[serde(default)]
    pub year: Option<i32>,
}

/// One movie of an offline property dump.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DumpRecord {
    pub movie: DumpMovie,
    #[serde(default)]
    pub genres: Vec<GenreRecord>,
    /// Billing order.
    #[serde(default)]
    pub cast: Vec<NamedRef>,
    #[serde(default)]
    pub directors: Vec<NamedRef>,
    #[serde(default)]
    pub companies: Vec<NamedRef>,
}

/// A movie mentioned in the dialogue corpus, keyed by its corpus id.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MentionedMovie {
    pub id: String,
    pub name: String,
    #[serde(default)]
    pub year: Option<i32>,
}

pub fn parse_dump<R: BufRead>(reader: R) -> Result<Vec<DumpRecord>> {
    read_jsonl(reader)
}

pub fn parse_mentions<R: BufRead>(reader: R) -> Result<Vec<MentionedMovie>> {
    read_jsonl(reader)
}

/// Main cast members kept per movie.
pub const TOP_CAST: usize = 10;

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct GenreInfo {
    pub name: String,
    pub parents: Vec<String>,
}

/// Flattens every genre record (including nested parents) into one registry.
/// Parent lists of repeated ids are merged in first-seen order.
pub fn genre_registry(records: &[DumpRecord]) -> BTreeMap<String, GenreInfo> {
    fn add(reg: &mut BTreeMap<String, GenreInfo>, g: &GenreRecord) {
        let entry = reg.entry(g.id.clone()).or_insert_with(|| GenreInfo {
            name: g.name.clone(),
            parents: Vec::new(),
        });
        let mut nested = Vec::new();
        for p in &g.parents {
            let pid = match p {
                GenreRef::Id(id) => id.clone(),
                GenreRef::Record(r) => {
                    nested.push(r);
                    r.id.clone()
                }
            };
            if !entry.parents.contains(&pid) {
                entry.parents.push(pid);
            }
        }
        for r in nested {
            add(reg, r);
        }
    }
    let mut reg = BTreeMap::new();
    for rec in records {
        for g in &rec.genres {
            add(&mut reg, g);
        }
    }
    reg
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct GenreClosure {
    /// `(raw genre id, name)` in discovery order.
    pub nodes: Vec<(String, String)>,
    /// `(child, parent)` raw ids.
    pub edges: Vec<(String, String)>,
    pub warnings: Vec<String>,
}

/// Walks parent links from `roots`, emitting every reachable genre once and
/// one child-to-parent edge per direct parent link. A link back onto the
/// current walk path is a cycle: it is skipped and reported.
pub fn genre_closure<'r>(
    registry: &BTreeMap<String, GenreInfo>,
    roots: impl IntoIterator<Item = &'r str>,
) -> GenreClosure {
    struct Walk<'a> {
        registry: &'a BTreeMap<String, GenreInfo>,
        visited: HashSet<String>,
        on_path: Vec<String>,
        out: GenreClosure,
    }
    impl Walk<'_> {
        fn visit(&mut self, id: &str) {
            if !self.visited.insert(id.to_string()) {
                return;
            }
            let info = &self.registry[id];
            self.out.nodes.push((id.to_string(), info.name.clone()));
            self.on_path.push(id.to_string());
            for parent in &info.parents {
                if self.on_path.iter().any(|p| p == parent) {
                    self.out.warnings.push(format!(
                        "genre cycle: {id} -> {parent} closes a loop; edge skipped"
                    ));
                    continue;
                }
                if !self.registry.contains_key(parent) {
                    self.out
                        .warnings
                        .push(format!("genre {id}: parent {parent} has no record; skipped"));
                    continue;
                }
                self.out.edges.push((id.to_string(), parent.clone()));
                self.visit(parent);
            }
            self.on_path.pop();
        }
    }
    let mut walk = Walk {
        registry,
        visited: HashSet::new(),
        on_path: Vec::new(),
        out: GenreClosure::default(),
    };
    for root in roots {
        if registry.contains_key(root) {
            walk.visit(root);
        } else {
            walk.out.warnings.push(format!("genre {root} has no record"));
        }
    }
    walk.out
}

/// NFC + lower-case + trimmed.
pub fn normalize_title(name: &str) -> String {
    name.trim().nfc().collect::<String>().to_lowercase()
}

#[derive(Debug, Clone, PartialEq)]
pub struct BuildOutput {
    pub graph: KnowledgeGraph,
    pub unmatched: Vec<MentionedMovie>,
    pub warnings: Vec<String>,
}

/// Finds the dump record for a mention: same normalised title, exact year
/// preferred, then a year off by one. Dump order breaks ties.
fn match_mention<'d>(
    by_title: &HashMap<String, Vec<usize>>,
    dump: &'d [DumpRecord],
    mention: &MentionedMovie,
) -> Option<&'d DumpRecord> {
    let candidates = by_title.get(&normalize_title(&mention.name))?;
    let Some(year) = mention.year else {
        return candidates.first().map(|&i| &dump[i]);
    };
    let pick = |tolerance: i32| {
        candidates.iter().map(|&i| &dump[i]).find(|r| match r.movie.year {
            Some(y) => (y - year).abs() <= tolerance,
            None => false,
        })
    };
    pick(0).or_else(|| pick(1))
}

/// Builds the graph from a property dump and the corpus's mentioned movies.
/// Movie nodes take the mention id; descriptive entities get a type-prefixed
/// id (`cast:Q123`). Unmatched mentions are reported, not fatal.
pub fn build_graph(dump: &[DumpRecord], mentioned: &[MentionedMovie]) -> Result<BuildOutput> {
    let mut by_title: HashMap<String, Vec<usize>> = HashMap::new();
    for (i, rec) in dump.iter().enumerate() {
        by_title
            .entry(normalize_title(&rec.movie.name))
            .or_default()
            .push(i);
    }
    let registry = genre_registry(dump);

    let mut nodes: BTreeMap<String, EntityNode> = BTreeMap::new();
    let mut edges: BTreeSet<RelationEdge> = BTreeSet::new();
    let mut unmatched = Vec::new();
    let mut warnings = Vec::new();
    let mut genre_roots: Vec<String> = Vec::new();

    let add_entity = |nodes: &mut BTreeMap<String, EntityNode>, ty: NodeType, r: &NamedRef| {
        let id = format!("{}:{}", ty.id_prefix(), r.id());
        nodes.entry(id.clone()).or_insert_with(|| EntityNode {
            id: id.clone(),
            name: r.name().to_string(),
            node_type: ty,
            release_year: None,
        });
        id
    };

    for mention in mentioned {
        let Some(rec) = match_mention(&by_title, dump, mention) else {
            unmatched.push(mention.clone());
            continue;
        };
        if nodes.contains_key(&mention.id) {
            warnings.push(format!("duplicate mentioned movie id {}", mention.id));
            continue;
        }
        nodes.insert(
            mention.id.clone(),
            EntityNode {
                id: mention.id.clone(),
                name: rec.movie.name.clone(),
                node_type: NodeType::Movie,
                release_year: rec.movie.year,
            },
        );
        let mut link = |nodes: &mut BTreeMap<String, EntityNode>, ty, rel, refs: &[NamedRef], limit| {
            let mut seen = HashSet::new();
            for r in refs.iter().filter(|r| seen.insert(r.id().to_string())).take(limit) {
                let tail = add_entity(nodes, ty, r);
                edges.insert(RelationEdge {
                    head: mention.id.clone(),
                    relation: rel,
                    tail,
                });
            }
        };
        link(&mut nodes, NodeType::CastMember, Relation::HasCastMember, &rec.cast, TOP_CAST);
        link(&mut nodes, NodeType::Director, Relation::DirectedBy, &rec.directors, usize::MAX);
        link(&mut nodes, NodeType::ProductionCompany, Relation::ProducedBy, &rec.companies, usize::MAX);
        for g in &rec.genres {
            edges.insert(RelationEdge {
                head: mention.id.clone(),
                relation: Relation::HasGenre,
                tail: format!("{}:{}", NodeType::Genre.id_prefix(), g.id),
            });
            genre_roots.push(g.id.clone());
        }
    }

    let closure = genre_closure(&registry, genre_roots.iter().map(String::as_str));
    warnings.extend(closure.warnings);
    let gid = |raw: &str| format!("{}:{raw}", NodeType::Genre.id_prefix());
    for (raw, name) in closure.nodes {
        let id = gid(&raw);
        nodes.entry(id.clone()).or_insert(EntityNode {
            id,
            name,
            node_type: NodeType::Genre,
            release_year: None,
        });
    }
    for (child, parent) in closure.edges {
        edges.insert(RelationEdge {
            head: gid(&child),
            relation: Relation::SubgenreOf,
            tail: gid(&parent),
        });
    }

    let graph = KnowledgeGraph::from_parts(nodes.into_values().collect(), edges.into_iter().collect())?;
    Ok(BuildOutput {
        graph,
        unmatched,
        warnings,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoverageStats {
    pub mentioned_movies: usize,
    pub covered_movies: usize,
    /// `None` when nothing is mentioned.
    pub coverage_ratio: Option<f64>,
    pub node_counts: BTreeMap<NodeType, usize>,
    pub edge_counts: BTreeMap<Relation, usize>,
    pub total_nodes: usize,
    pub total_edges: usize,
}

pub fn graph_counts(kg: &KnowledgeGraph) -> (BTreeMap<NodeType, usize>, BTreeMap<Relation, usize>) {
    let mut node_counts: BTreeMap<NodeType, usize> = NodeType::ALL.iter().map(|&t| (t, 0)).collect();
    for n in kg.nodes().values() {
        *node_counts.get_mut(&n.node_type).expect("all types present") += 1;
    }
    let mut edge_counts: BTreeMap<Relation, usize> = Relation::ALL.iter().map(|&r| (r, 0)).collect();
    for e in kg.edges() {
        *edge_counts.get_mut(&e.relation).expect("all relations present") += 1;
    }
    (node_counts, edge_counts)
}

/// Movie coverage of the corpus's distinct item mentions.
pub fn coverage_report(kg: &KnowledgeGraph, conversations: &[Conversation]) -> CoverageStats {
    let mentioned: BTreeSet<&str> = conversations
        .iter()
        .flat_map(|c| c.turns.iter())
        .flat_map(|t| t.item_mentions())
        .collect();
    coverage_of_ids(kg, mentioned)
}

pub fn coverage_of_ids<'a>(kg: &KnowledgeGraph, ids: impl IntoIterator<Item = &'a str>) -> CoverageStats {
    let mentioned: BTreeSet<&str> = ids.into_iter().collect();
    let covered = mentioned
        .iter()
        .filter(|id| kg.node(id).is_some_and(|n| n.node_type.is_movie()))
        .count();
    let (node_counts, edge_counts) = graph_counts(kg);
    CoverageStats {
        mentioned_movies: mentioned.len(),
        covered_movies: covered,
        coverage_ratio: (!mentioned.is_empty()).then(|| covered as f64 / mentioned.len() as f64),
        node_counts,
        edge_counts,
        total_nodes: kg.num_entities(),
        total_edges: kg.edges().len(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{Speaker, Utterance};
    use crate::fixtures;

    fn named(id: &str, name: &str) -> NamedRef {
        NamedRef::Object {
            id: id.into(),
            name: name.into(),
        }
    }

    fn movie(name: &str, year: i32) -> DumpRecord {
        DumpRecord {
            movie: DumpMovie {
                name: name.into(),
                year: Some(year),
            },
            genres: vec![],
            cast: vec![],
            directors: vec![],
            companies: vec![],
        }
    }

    fn mention(id: &str, name: &str, year: i32) -> MentionedMovie {
        MentionedMovie {
            id: id.into(),
            name: name.into(),
            year: Some(year),
        }
    }

    #[test]
    fn empty_files_give_empty_graph() {
        let kg = load_graph(&b""[..], &b""[..]).unwrap();
        assert_eq!(kg.num_entities(), 0);
        assert!(kg.item_index().is_empty());
    }

    #[test]
    fn dangling_edge_is_named() {
        let nodes = r#"{"id":"m1","name":"A","node_type":"movie"}"#;
        let edges = r#"{"head":"m1","relation":"has_genre","tail":"genre:missing"}"#;
        let err = load_graph(nodes.as_bytes(), edges.as_bytes()).unwrap_err();
        assert!(err.to_string().contains("genre:missing"), "{err}");
    }

    #[test]
    fn relation_type_mismatch_rejected() {
        let nodes = "{\"id\":\"m1\",\"name\":\"A\",\"node_type\":\"movie\"}\n{\"id\":\"d\",\"name\":\"D\",\"node_type\":\"director\"}";
        let edges = r#"{"head":"m1","relation":"has_genre","tail":"d"}"#;
        assert!(matches!(
            load_graph(nodes.as_bytes(), edges.as_bytes()),
            Err(Error::Validation(_))
        ));
    }

    #[test]
    fn duplicate_and_unknown_type_rejected() {
        let dup = "{\"id\":\"m1\",\"name\":\"A\",\"node_type\":\"movie\"}\n{\"id\":\"m1\",\"name\":\"B\",\"node_type\":\"movie\"}";
        assert!(load_graph(dup.as_bytes(), &b""[..]).is_err());
        let bad = r#"{"id":"m1","name":"A","node_type":"actor"}"#;
        assert!(matches!(
            load_graph(bad.as_bytes(), &b""[..]),
            Err(Error::Parse { line: 1, .. })
        ));
    }

    #[test]
    fn fixture_counts_match_file_lines_and_round_trip() {
        let kg = fixtures::small_kg();
        let (mut n, mut e) = (Vec::new(), Vec::new());
        kg.write_nodes(&mut n).unwrap();
        kg.write_edges(&mut e).unwrap();
        let nl = String::from_utf8(n.clone()).unwrap().lines().count();
        let el = String::from_utf8(e.clone()).unwrap().lines().count();
        assert_eq!((nl, el), (12, 15));
        let back = load_graph(n.as_slice(), e.as_slice()).unwrap();
        assert_eq!(back.num_entities(), 12);
        assert_eq!(back.edges().len(), 15);
        assert_eq!(back, kg);
    }

    #[test]
    fn cast_truncated_to_top_ten_in_billing_order() {
        let mut rec = movie("Ocean's Eleven", 2001);
        rec.cast = (0..14).map(|i| named(&format!("a{i}"), &format!("Actor {i}"))).collect();
        let out = build_graph(&[rec], &[mention("m1", "Ocean's Eleven", 2001)]).unwrap();
        let cast: Vec<&str> = out
            .graph
            .edges()
            .iter()
            .filter(|e| e.relation == Relation::HasCastMember)
            .map(|e| e.tail.as_str())
            .collect();
        assert_eq!(cast.len(), 10);
        let expected: BTreeSet<String> = (0..10).map(|i| format!("cast:a{i}")).collect();
        assert_eq!(cast.iter().map(|s| s.to_string()).collect::<BTreeSet<_>>(), expected);
    }

    #[test]
    fn movie_without_properties_has_no_edges() {
        let out = build_graph(&[movie("Alien", 1979)], &[mention("m1", "Alien", 1979)]).unwrap();
        assert_eq!(out.graph.num_entities(), 1);
        assert!(out.graph.edges().is_empty());
    }

    #[test]
    fn title_matching_is_normalised_with_year_tolerance() {
        let dump = vec![movie("Amélie", 2001), movie("Alien", 1979)];
        let ments = vec![
            mention("m1", "AME\u{301}LIE", 2002),
            mention("m2", "alien", 1981),
        ];
        let out = build_graph(&dump, &ments).unwrap();
        assert!(out.graph.node("m1").is_some());
        assert_eq!(out.unmatched, vec![mention("m2", "alien", 1981)]);
    }

    #[test]
    fn superhero_genre_gets_two_parent_edges() {
        let mut reg = BTreeMap::new();
        reg.insert("sh".to_string(), GenreInfo { name: "superhero film".into(), parents: vec!["ac".into(), "ad".into()] });
        reg.insert("ac".to_string(), GenreInfo { name: "action film".into(), parents: vec![] });
        reg.insert("ad".to_string(), GenreInfo { name: "adventure film".into(), parents: vec![] });
        let c = genre_closure(&reg, ["sh"]);
        assert_eq!(c.edges, vec![("sh".into(), "ac".into()), ("sh".into(), "ad".into())]);
        assert_eq!(c.nodes.len(), 3);
    }

    #[test]
    fn parentless_genre_has_no_edges() {
        let mut reg = BTreeMap::new();
        reg.insert("g".to_string(), GenreInfo { name: "drama".into(), parents: vec![] });
        let c = genre_closure(&reg, ["g"]);
        assert_eq!(c.nodes.len(), 1);
        assert!(c.edges.is_empty());
    }

    #[test]
    fn genre_cycle_terminates_with_warning() {
        let mut reg = BTreeMap::new();
        reg.insert("a".to_string(), GenreInfo { name: "A".into(), parents: vec!["b".into()] });
        reg.insert("b".to_string(), GenreInfo { name: "B".into(), parents: vec!["a".into()] });
        let c = genre_closure(&reg, ["a"]);
        assert_eq!(c.edges, vec![("a".into(), "b".into())]);
        assert_eq!(c.warnings.len(), 1);
    }

    #[test]
    fn nested_parent_records_are_registered() {
        let line = r#"{"movie":{"name":"X","year":2000},"genres":[{"id":"g1","name":"g1","parents":[{"id":"g2","name":"g2","parents":["g3"]}]},{"id":"g3","name":"g3"}]}"#;
        let dump = parse_dump(line.as_bytes()).unwrap();
        let out = build_graph(&dump, &[mention("m", "X", 2000)]).unwrap();
        let sub: Vec<_> = out.graph.edges().iter().filter(|e| e.relation == Relation::SubgenreOf).collect();
        assert_eq!(sub.len(), 2);
    }

    #[test]
    fn coverage_counts_distinct_mentions() {
        let kg = fixtures::small_kg();
        let movies: Vec<String> = kg.item_index().iter().take(3).cloned().collect();
        let turn = Utterance::from_segments(
            Speaker::Seeker,
            &[
                (movies[0].as_str(), Some(movies[0].as_str())),
                (" ", None),
                (movies[1].as_str(), Some(movies[1].as_str())),
                (" ", None),
                (movies[2].as_str(), Some(movies[2].as_str())),
                (" ", None),
                ("Unknown", Some("nope")),
                (" ", None),
                (movies[0].as_str(), Some(movies[0].as_str())),
            ],
        );
        let conv = Conversation {
            conversation_id: "c".into(),
            turns: vec![turn],
        };
        let stats = coverage_report(&kg, &[conv]);
        assert_eq!((stats.mentioned_movies, stats.covered_movies), (4, 3));
        assert_eq!(stats.coverage_ratio, Some(0.75));
        assert_eq!(stats.node_counts.values().sum::<usize>(), stats.total_nodes);
        assert_eq!(stats.edge_counts.values().sum::<usize>(), stats.total_edges);
    }

    #[test]
    fn no_mentions_gives_null_coverage() {
        let stats = coverage_report(&fixtures::small_kg(), &[]);
        assert_eq!(stats.coverage_ratio, None);
    }

    #[test]
    fn item_index_is_sorted_movie_ids() {
        let kg = fixtures::synthetic_kg();
        let mut sorted = kg.item_index().to_vec();
        sorted.sort();
        assert_eq!(kg.item_index(), sorted.as_slice());
        assert!(kg.item_rows().windows(2).all(|w| w[0] < w[1]));
    }
}
