//! Small deterministic datasets used by tests, the acceptance suite and the
//! `synth` command.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::corpus::{augment_with_entities, extract_triplets, Conversation, Speaker, TrainingTriplet, Utterance};
use crate::kg::{
    DumpMovie, DumpRecord, EntityNode, GenreRecord, GenreRef, KnowledgeGraph, MentionedMovie,
    NamedRef, NodeType, Relation, RelationEdge,
};
use crate::tokenizer::Tokenizer;

fn node(id: &str, name: &str, node_type: NodeType, year: Option<i32>) -> EntityNode {
    EntityNode {
        id: id.into(),
        name: name.into(),
        node_type,
        release_year: year,
    }
}

fn edge(head: &str, relation: Relation, tail: &str) -> RelationEdge {
    RelationEdge {
        head: head.into(),
        relation,
        tail: tail.into(),
    }
}

/// 12 nodes, 15 edges.
pub fn small_kg() -> KnowledgeGraph {
    use NodeType::*;
    use Relation::*;
    let nodes = vec![
        node("m1", "Alien", Movie, Some(1979)),
        node("m2", "Aliens", Movie, Some(1986)),
        node("m3", "Heat", Movie, Some(1995)),
        node("m4", "Ronin", Movie, Some(1998)),
        node("genre:horror", "horror film", Genre, None),
        node("genre:thriller", "thriller film", Genre, None),
        node("genre:action", "action film", Genre, None),
        node("cast:weaver", "Sigourney Weaver", CastMember, None),
        node("cast:deniro", "Robert De Niro", CastMember, None),
        node("director:scott", "Ridley Scott", Director, None),
        node("director:mann", "Michael Mann", Director, None),
        node("company:fox", "20th Century Fox", ProductionCompany, None),
    ];
    let edges = vec![
        edge("m1", HasGenre, "genre:horror"),
        edge("m2", HasGenre, "genre:horror"),
        edge("m2", HasGenre, "genre:action"),
        edge("m3", HasGenre, "genre:action"),
        edge("m4", HasGenre, "genre:thriller"),
        edge("m1", HasCastMember, "cast:weaver"),
        edge("m2", HasCastMember, "cast:weaver"),
        edge("m3", HasCastMember, "cast:deniro"),
        edge("m4", HasCastMember, "cast:deniro"),
        edge("m1", DirectedBy, "director:scott"),
        edge("m2", DirectedBy, "director:scott"),
        edge("m3", DirectedBy, "director:mann"),
        edge("m4", DirectedBy, "director:mann"),
        edge("m1", ProducedBy, "company:fox"),
        edge("genre:horror", SubgenreOf, "genre:thriller"),
    ];
    KnowledgeGraph::from_parts(nodes, edges).expect("fixture is valid")
}

struct SynthMovie {
    id: &'static str,
    name: &'static str,
    year: i32,
    genres: &'static [&'static str],
    cast: &'static [&'static str],
    director: &'static str,
    company: &'static str,
}

const GENRES: [(&str, &str, &[&str]); 6] = [
    ("genre:slasher", "slasher film", &["genre:horror"]),
    ("genre:horror", "horror film", &["genre:thriller"]),
    ("genre:thriller", "thriller film", &[]),
    ("genre:comedy", "comedy film", &[]),
    ("genre:action", "action film", &[]),
    ("genre:superhero", "superhero film", &["genre:action"]),
];

const CAST: [(&str, &str); 10] = [
    ("cast:Q23844", "George Clooney"),
    ("cast:Q1", "Brad Pitt"),
    ("cast:Q2", "Jamie Lee Curtis"),
    ("cast:Q3", "Steve Guttenberg"),
    ("cast:Q4", "Jessica Rothe"),
    ("cast:Q5", "Heather Langenkamp"),
    ("cast:Q6", "Robert Downey Jr"),
    ("cast:Q7", "Kim Cattrall"),
    ("cast:Q8", "Neve Campbell"),
    ("cast:Q9", "Matt Damon"),
];

const DIRECTORS: [(&str, &str); 5] = [
    ("director:D1", "Steven Soderbergh"),
    ("director:D2", "John Carpenter"),
    ("director:D3", "Wes Craven"),
    ("director:D4", "Christopher Landon"),
    ("director:D5", "Hugh Wilson"),
];

const COMPANIES: [(&str, &str); 3] = [
    ("company:C1", "Warner Bros"),
    ("company:C2", "Universal Pictures"),
    ("company:C3", "Marvel Studios"),
];

const MOVIES: [SynthMovie; 16] = [
    SynthMovie { id: "m01", name: "Ocean's Eleven", year: 2001, genres: &["genre:comedy", "genre:thriller"], cast: &["cast:Q23844", "cast:Q1", "cast:Q9"], director: "director:D1", company: "company:C1" },
    SynthMovie { id: "m02", name: "Ocean's Twelve", year: 2004, genres: &["genre:comedy"], cast: &["cast:Q23844", "cast:Q1", "cast:Q9"], director: "director:D1", company: "company:C1" },
    SynthMovie { id: "m03", name: "Halloween", year: 1978, genres: &["genre:slasher"], cast: &["cast:Q2"], director: "director:D2", company: "company:C2" },
    SynthMovie { id: "m04", name: "Police Academy", year: 1984, genres: &["genre:comedy"], cast: &["cast:Q3", "cast:Q7"], director: "director:D5", company: "company:C1" },
    SynthMovie { id: "m05", name: "Happy Death Day", year: 2017, genres: &["genre:slasher", "genre:comedy"], cast: &["cast:Q4"], director: "director:D4", company: "company:C2" },
    SynthMovie { id: "m06", name: "A Nightmare on Elm Street", year: 1984, genres: &["genre:slasher"], cast: &["cast:Q5"], director: "director:D3", company: "company:C2" },
    SynthMovie { id: "m07", name: "Iron Man", year: 2008, genres: &["genre:superhero"], cast: &["cast:Q6"], director: "director:D1", company: "company:C3" },
    SynthMovie { id: "m08", name: "Scream", year: 1996, genres: &["genre:slasher"], cast: &["cast:Q8"], director: "director:D3", company: "company:C2" },
    SynthMovie { id: "m09", name: "The Thing", year: 1982, genres: &["genre:horror"], cast: &["cast:Q7"], director: "director:D2", company: "company:C2" },
    SynthMovie { id: "m10", name: "Michael Clayton", year: 2007, genres: &["genre:thriller"], cast: &["cast:Q23844"], director: "director:D1", company: "company:C1" },
    SynthMovie { id: "m11", name: "Fight Club", year: 1999, genres: &["genre:thriller"], cast: &["cast:Q1"], director: "director:D4", company: "company:C1" },
    SynthMovie { id: "m12", name: "The Martian", year: 2015, genres: &["genre:action"], cast: &["cast:Q9"], director: "director:D1", company: "company:C2" },
    SynthMovie { id: "m13", name: "Avengers", year: 2012, genres: &["genre:superhero", "genre:action"], cast: &["cast:Q6"], director: "director:D1", company: "company:C3" },
    SynthMovie { id: "m14", name: "Halloween H20", year: 1998, genres: &["genre:slasher"], cast: &["cast:Q2"], director: "director:D2", company: "company:C2" },
    SynthMovie { id: "m15", name: "Scream 2", year: 1997, genres: &["genre:slasher"], cast: &["cast:Q8"], director: "director:D3", company: "company:C2" },
    SynthMovie { id: "m16", name: "Big Trouble in Little China", year: 1986, genres: &["genre:action", "genre:comedy"], cast: &["cast:Q7"], director: "director:D2", company: "company:C1" },
];

/// 40-node graph: 16 movies, 6 genres (with the chain slasher -> horror ->
/// thriller), 10 cast members, 5 directors, 3 production companies.
pub fn synthetic_kg() -> KnowledgeGraph {
    let mut nodes = Vec::new();
    let mut edges = Vec::new();
    for m in &MOVIES {
        nodes.push(node(m.id, m.name, NodeType::Movie, Some(m.year)));
        for g in m.genres {
            edges.push(edge(m.id, Relation::HasGenre, g));
        }
        for c in m.cast {
            edges.push(edge(m.id, Relation::HasCastMember, c));
        }
        edges.push(edge(m.id, Relation::DirectedBy, m.director));
        edges.push(edge(m.id, Relation::ProducedBy, m.company));
    }
    for (id, name, parents) in GENRES {
        nodes.push(node(id, name, NodeType::Genre, None));
        for p in parents {
            edges.push(edge(id, Relation::SubgenreOf, p));
        }
    }
    for (id, name) in CAST {
        nodes.push(node(id, name, NodeType::CastMember, None));
    }
    for (id, name) in DIRECTORS {
        nodes.push(node(id, name, NodeType::Director, None));
    }
    for (id, name) in COMPANIES {
        nodes.push(node(id, name, NodeType::ProductionCompany, None));
    }
    KnowledgeGraph::from_parts(nodes, edges).expect("fixture is valid")
}

/// Deterministic follow-up recommendation for a liked movie.
fn follow_up(items: &[String], liked: usize, step: usize) -> usize {
    let n = items.len();
    (liked + 1 + (liked * 7 + step * 5) % (n - 1)) % n
}

/// Synthetic seeker/recommender dialogues over the movies of `kg`.
///
/// Each dialogue names a genre and a cast member, the seeker mentions a liked
/// movie, and the recommender answers with a movie that is a fixed function
/// of the liked one (and optionally a second one), so the recommendation is
/// recoverable from the context.
pub fn synthetic_dialogues(kg: &KnowledgeGraph, n: usize, seed: u64) -> Vec<Conversation> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let items = kg.item_index().to_vec();
    assert!(items.len() >= 3, "need at least three movies");
    let name_of = |id: &str| kg.node(id).map(|n| n.name.clone()).unwrap_or_default();
    let of_type = |t: NodeType| -> Vec<String> {
        kg.nodes()
            .values()
            .filter(|n| n.node_type == t)
            .map(|n| n.name.clone())
            .collect()
    };
    let genres = of_type(NodeType::Genre);
    let people = of_type(NodeType::CastMember);
    let openers = ["hi !", "hello there .", "hey ,"];
    let closers = ["thanks , i will check it out !", "great , thank you .", "sounds good !"];

    (0..n)
        .map(|c| {
            let liked = rng.gen_range(0..items.len());
            let rec = follow_up(&items, liked, 0);
            let genre = genres.choose(&mut rng).cloned().unwrap_or_else(|| "good".into());
            let person = people.choose(&mut rng).cloned().unwrap_or_else(|| "anyone".into());
            let opener = openers[rng.gen_range(0..openers.len())];
            let liked_name = name_of(&items[liked]);
            let rec_name = name_of(&items[rec]);

            let mut turns = vec![
                Utterance::new(
                    Speaker::Seeker,
                    format!("{opener} i am looking for a {genre} to watch ."),
                ),
                Utterance::new(Speaker::Recommender, format!("sure , do you like {person} ?")),
                Utterance::from_segments(
                    Speaker::Seeker,
                    &[
                        ("yes , i really enjoyed ", None),
                        (liked_name.as_str(), Some(items[liked].as_str())),
                        (" .", None),
                    ],
                ),
                Utterance::from_segments(
                    Speaker::Recommender,
                    &[
                        ("then you should watch ", None),
                        (rec_name.as_str(), Some(items[rec].as_str())),
                        (" , it is great .", None),
                    ],
                ),
                Utterance::new(Speaker::Seeker, closers[rng.gen_range(0..closers.len())]),
            ];
            if rng.gen_bool(0.5) {
                let mut extra = follow_up(&items, rec, 1);
                if extra == liked {
                    extra = follow_up(&items, extra, 2);
                }
                if extra != liked && extra != rec {
                    let extra_name = name_of(&items[extra]);
                    turns.push(Utterance::from_segments(
                        Speaker::Recommender,
                        &[
                            ("you might also like ", None),
                            (extra_name.as_str(), Some(items[extra].as_str())),
                            (" .", None),
                        ],
                    ));
                }
            }
            Conversation {
                conversation_id: format!("synth-{seed}-{c:04}"),
                turns,
            }
        })
        .collect()
}

/// Synthetic dialogues over [`synthetic_kg`] turned into training data.
#[derive(Debug, Clone)]
pub struct OverfitFixture {
    pub kg: KnowledgeGraph,
    pub conversations: Vec<Conversation>,
    pub dialogue_triplets: Vec<TrainingTriplet>,
    pub augmented: Vec<TrainingTriplet>,
    pub tokenizer: Tokenizer,
}

impl OverfitFixture {
    /// Dialogue triplets followed by the augmented ones.
    pub fn train_set(&self) -> Vec<TrainingTriplet> {
        self.dialogue_triplets
            .iter()
            .chain(&self.augmented)
            .cloned()
            .collect()
    }
}

pub fn overfit_fixture(dialogues: usize, seed: u64) -> OverfitFixture {
    let kg = synthetic_kg();
    let conversations = synthetic_dialogues(&kg, dialogues, seed);
    let dialogue_triplets: Vec<TrainingTriplet> = conversations.iter().flat_map(extract_triplets).collect();
    let augmented = augment_with_entities(&kg);
    let tokenizer = Tokenizer::word(
        conversations
            .iter()
            .flat_map(|c| c.turns.iter().map(|u| u.text.as_str()))
            .chain(dialogue_triplets.iter().map(|t| t.target.as_str()))
            .chain(kg.names()),
    );
    OverfitFixture {
        kg,
        conversations,
        dialogue_triplets,
        augmented,
        tokenizer,
    }
}

/// A dialogue whose last recommender turn only repeats an item already in
/// the context ("Police Academy").
pub fn repeated_item_example() -> Conversation {
    Conversation {
        conversation_id: "repeat-a".into(),
        turns: vec![
            Utterance::from_segments(
                Speaker::Seeker,
                &[
                    ("Hi, I am looking for a movie like ", None),
                    ("Super Troopers", Some("super-troopers-2001")),
                    (".", None),
                ],
            ),
            Utterance::from_segments(
                Speaker::Recommender,
                &[
                    ("You should watch ", None),
                    ("Police Academy", Some("police-academy-1984")),
                    (".", None),
                ],
            ),
            Utterance::new(Speaker::Seeker, "Is that a great one? I have never seen it."),
            Utterance::from_segments(
                Speaker::Recommender,
                &[
                    ("Yes ", None),
                    ("Police Academy", Some("police-academy-1984")),
                    (" is funny.", None),
                ],
            ),
        ],
    }
}

/// A dialogue ending in a fresh recommendation ("Happy Death Day").
pub fn fresh_recommendation_example() -> Conversation {
    Conversation {
        conversation_id: "fresh-b".into(),
        turns: vec![
            Utterance::new(Speaker::Recommender, "Hello, what kind of movies do you like?"),
            Utterance::new(Speaker::Seeker, "I am looking for a movie recommendation."),
            Utterance::from_segments(
                Speaker::Seeker,
                &[
                    ("When I was younger, I really enjoyed the ", None),
                    ("A Nightmare on Elm Street", Some("a-nightmare-on-elm-street-1984")),
                    (".", None),
                ],
            ),
            Utterance::from_segments(
                Speaker::Recommender,
                &[
                    ("Oh, you like scary movies? I recently watched ", None),
                    ("Happy Death Day", Some("happy-death-day-2017")),
                    (".", None),
                ],
            ),
        ],
    }
}

fn named(id: &str, name: &str) -> NamedRef {
    NamedRef::Object {
        id: id.into(),
        name: name.into(),
    }
}

/// Property dump for the graph builder: five movies sharing two actors, one
/// with fourteen billed cast members, a genre chain g1 -> g2 -> g3 and a
/// superhero genre with two parents.
pub fn builder_dump() -> (Vec<DumpRecord>, Vec<MentionedMovie>) {
    let genre = |id: &str, name: &str, parents: &[&str]| GenreRecord {
        id: id.into(),
        name: name.into(),
        parents: parents.iter().map(|p| GenreRef::Id(p.to_string())).collect(),
    };
    let rec = |name: &str, year: i32, genres: Vec<GenreRecord>, cast: Vec<NamedRef>, directors: Vec<NamedRef>, companies: Vec<NamedRef>| DumpRecord {
        movie: DumpMovie {
            name: name.into(),
            year: Some(year),
        },
        genres,
        cast,
        directors,
        companies,
    };
    let shared_a = named("P1", "Shared Actor One");
    let shared_b = named("P2", "Shared Actor Two");
    let big_cast: Vec<NamedRef> = std::iter::once(shared_a.clone())
        .chain((0..13).map(|i| named(&format!("X{i}"), &format!("Extra {i}"))))
        .collect();
    let dump = vec![
        rec(
            "Film One",
            2001,
            vec![genre("g1", "g1 film", &["g2"]), genre("g2", "g2 film", &["g3"]), genre("g3", "g3 film", &[])],
            vec![shared_a.clone(), shared_b.clone()],
            vec![named("D1", "Director One")],
            vec![named("C1", "Company One")],
        ),
        rec("Film Two", 2002, vec![genre("g1", "g1 film", &["g2"])], vec![shared_a.clone()], vec![named("D1", "Director One")], vec![]),
        rec(
            "Film Three",
            2003,
            vec![
                genre("sh", "superhero film", &["ac", "ad"]),
                genre("ac", "action film", &[]),
                genre("ad", "adventure film", &[]),
            ],
            vec![shared_b.clone(), named("P3", "Solo Actor")],
            vec![named("D2", "Director Two")],
            vec![named("C1", "Company One"), named("C2", "Company Two")],
        ),
        rec("Film Four", 2004, vec![], big_cast, vec![], vec![]),
        rec("Film Five", 2005, vec![], vec![shared_a, shared_b], vec![named("D2", "Director Two")], vec![]),
        rec("Never Mentioned", 1999, vec![genre("g9", "orphan film", &[])], vec![named("P9", "Nobody")], vec![], vec![]),
    ];
    let mentions = [
        ("f1", "Film One", 2001),
        ("f2", "film two", 2002),
        ("f3", "Film Three", 2004),
        ("f4", "Film Four", 2004),
        ("f5", "Film Five", 2005),
        ("f6", "Missing Film", 2010),
    ]
    .iter()
    .map(|&(id, name, year)| MentionedMovie {
        id: id.into(),
        name: name.into(),
        year: Some(year),
    })
    .collect();
    (dump, mentions)
}
