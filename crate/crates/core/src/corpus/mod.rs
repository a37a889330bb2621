//! Seeded synthetic "vertical domain" worlds and the datasets derived from
//! them.
//!
//! A world is a set of entities, each with a canonical name, one or more
//! aliases, and a few `(relation, value)` facts. The datasets are arranged
//! so that the alias-to-canonical mapping is only ever visible to the
//! generative stage:
//!
//! * generative examples ask a fact through an alias and answer with the
//!   canonical name;
//! * contrastive pairs use canonical names only, for training entities only;
//! * evaluation queries use aliases of held-out entities, and their relevant
//!   passages are canonical.

mod jsonl;
mod vocab;

use std::collections::HashSet;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use jsonl::{read_jsonl, write_jsonl};
pub use vocab::{Vocabulary, BNK, BOS, EOS, PAD};

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("vocabulary needs {needed} tokens but vocab_size is {limit}")]
    VocabOverflow { needed: usize, limit: usize },
    #[error("unknown token {0:?}")]
    UnknownToken(String),
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("too few entities ({entities}) for holdout fraction {fraction}")]
    TooFewEntities { entities: usize, fraction: f64 },
    #[error("line {line}: {message}")]
    Malformed { line: usize, message: String },
    #[error("io: {0}")]
    Io(String),
}

impl From<std::io::Error> for CorpusError {
    fn from(e: std::io::Error) -> Self {
        CorpusError::Io(e.to_string())
    }
}

const QUERY_PREFIX: &str = "query:";
const CATEGORY: &str = "drug";
const TEMPLATE_WORDS: [&str; 6] = [QUERY_PREFIX, "which", CATEGORY, "?", "(", ")"];
const RELATIONS: [&str; 8] = [
    "relieves",
    "treats",
    "inhibits",
    "targets",
    "reduces",
    "blocks",
    "activates",
    "prevents",
];
const VALUE_ADJECTIVES: [&str; 8] = [
    "joint", "chronic", "acute", "mild", "severe", "nasal", "muscle", "skin",
];
const VALUE_NOUNS: [&str; 8] = [
    "pain",
    "fever",
    "swelling",
    "cough",
    "rash",
    "infection",
    "fatigue",
    "nausea",
];
const ONSETS: [&str; 14] = [
    "b", "d", "f", "g", "k", "l", "m", "n", "p", "r", "s", "t", "v", "z",
];
const VOWELS: [&str; 5] = ["a", "e", "i", "o", "u"];
const CODAS: [&str; 5] = ["", "", "n", "r", "x"];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct WorldConfig {
    pub seed: u64,
    pub n_entities: usize,
    pub n_aliases: usize,
    pub n_facts: usize,
    /// Relations drawn from (at most 8).
    pub n_relations: usize,
    /// Distinct two-word fact values (at most 64). Small values make facts
    /// weak evidence on their own.
    pub n_values: usize,
    pub vocab_size: usize,
}

impl Default for WorldConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            n_entities: 100,
            n_aliases: 2,
            n_facts: 2,
            n_relations: 2,
            n_values: 2,
            vocab_size: 512,
        }
    }
}

/// One `(relation, value)` fact; the value may span several words.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Fact {
    pub relation: String,
    pub value: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EntityRecord {
    pub canonical: String,
    pub aliases: Vec<String>,
    pub facts: Vec<Fact>,
}

impl EntityRecord {
    /// Alias used to ask fact `j` in generative data.
    pub fn train_alias(&self, j: usize) -> &str {
        &self.aliases[j % self.aliases.len()]
    }

    /// Alias used to ask fact `j` in evaluation queries. With two or more
    /// aliases this differs from [`train_alias`](Self::train_alias), so the
    /// exact query string never appears in training data.
    pub fn eval_alias(&self, j: usize) -> &str {
        &self.aliases[(j + 1) % self.aliases.len()]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct World {
    pub config: WorldConfig,
    pub entities: Vec<EntityRecord>,
    pub vocab: Vocabulary,
}

fn fact_query(fact: &Fact, name: &str) -> String {
    format!(
        "{QUERY_PREFIX} which {CATEGORY} {} {}? ({name})",
        fact.relation, fact.value
    )
}

fn fact_passage(name: &str, fact: &Fact) -> String {
    format!("{name} {} {}", fact.relation, fact.value)
}

fn make_name(rng: &mut ChaCha8Rng, syllables: usize) -> String {
    let mut s = String::new();
    for i in 0..syllables {
        s.push_str(ONSETS[rng.random_range(0..ONSETS.len())]);
        s.push_str(VOWELS[rng.random_range(0..VOWELS.len())]);
        if i + 1 == syllables {
            s.push_str(CODAS[rng.random_range(0..CODAS.len())]);
        }
    }
    s
}

impl World {
    /// Deterministic world for `config`.
    pub fn generate(config: WorldConfig) -> Result<Self, CorpusError> {
        let c = &config;
        if c.n_entities == 0 || c.n_aliases == 0 || c.n_facts == 0 {
            return Err(CorpusError::InvalidParameter(
                "entity, alias and fact counts must be >= 1".into(),
            ));
        }
        if c.n_relations == 0 || c.n_relations > RELATIONS.len() || c.n_facts > c.n_relations {
            return Err(CorpusError::InvalidParameter(format!(
                "need 1 <= n_facts <= n_relations <= {}",
                RELATIONS.len()
            )));
        }
        let max_values = VALUE_ADJECTIVES.len() * VALUE_NOUNS.len();
        if c.n_values == 0 || c.n_values > max_values {
            return Err(CorpusError::InvalidParameter(format!(
                "n_values must be in 1..={max_values}"
            )));
        }

        let mut rng = ChaCha8Rng::seed_from_u64(c.seed);
        let values: Vec<String> = (0..c.n_values)
            .map(|k| {
                let adj = VALUE_ADJECTIVES[k % VALUE_ADJECTIVES.len()];
                let noun = VALUE_NOUNS[(k / VALUE_ADJECTIVES.len() + k) % VALUE_NOUNS.len()];
                format!("{adj} {noun}")
            })
            .collect();

        let mut taken: HashSet<String> = TEMPLATE_WORDS
            .iter()
            .chain(&RELATIONS)
            .chain(&VALUE_ADJECTIVES)
            .chain(&VALUE_NOUNS)
            .map(|s| s.to_string())
            .collect();
        let mut fresh = |rng: &mut ChaCha8Rng, syllables: usize| loop {
            let name = make_name(rng, syllables);
            if taken.insert(name.clone()) {
                break name;
            }
        };

        let mut entities = Vec::with_capacity(c.n_entities);
        for _ in 0..c.n_entities {
            let canonical = fresh(&mut rng, 2);
            let aliases = (0..c.n_aliases).map(|_| fresh(&mut rng, 3)).collect();
            let mut rels: Vec<usize> = (0..c.n_relations).collect();
            rels.shuffle(&mut rng);
            let mut chosen: Vec<usize> = rels[..c.n_facts].to_vec();
            chosen.sort_unstable();
            let facts = chosen
                .into_iter()
                .map(|r| Fact {
                    relation: RELATIONS[r].to_string(),
                    value: values[rng.random_range(0..values.len())].clone(),
                })
                .collect();
            entities.push(EntityRecord {
                canonical,
                aliases,
                facts,
            });
        }
        Self::from_entities(config, entities)
    }

    /// Builds a world (and its vocabulary) around explicit entities.
    pub fn from_entities(
        config: WorldConfig,
        entities: Vec<EntityRecord>,
    ) -> Result<Self, CorpusError> {
        let mut seen = HashSet::new();
        for e in &entities {
            if e.aliases.is_empty() || e.facts.is_empty() {
                return Err(CorpusError::InvalidParameter(format!(
                    "entity {} needs at least one alias and one fact",
                    e.canonical
                )));
            }
            for name in std::iter::once(&e.canonical).chain(&e.aliases) {
                if !seen.insert(name.clone()) {
                    return Err(CorpusError::InvalidParameter(format!(
                        "name {name:?} used twice"
                    )));
                }
            }
        }
        let mut vocab = Vocabulary::new();
        for w in TEMPLATE_WORDS.iter().chain(&RELATIONS) {
            vocab.insert(w);
        }
        for e in &entities {
            for f in &e.facts {
                for w in Vocabulary::split(&f.relation)
                    .into_iter()
                    .chain(Vocabulary::split(&f.value))
                {
                    vocab.insert(w);
                }
            }
        }
        for e in &entities {
            vocab.insert(&e.canonical);
            for a in &e.aliases {
                vocab.insert(a);
            }
        }
        if vocab.len() > config.vocab_size {
            return Err(CorpusError::VocabOverflow {
                needed: vocab.len(),
                limit: config.vocab_size,
            });
        }
        Ok(Self {
            config,
            entities,
            vocab,
        })
    }

    pub fn len(&self) -> usize {
        self.entities.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entities.is_empty()
    }

    fn tokens(&self, text: &str) -> Vec<usize> {
        self.vocab
            .encode(text)
            .expect("world text only uses world vocabulary")
    }

    /// Alias-form question for fact `j` of entity `e`, as seen in training.
    pub fn sft_question(&self, e: usize, j: usize) -> String {
        let ent = &self.entities[e];
        fact_query(&ent.facts[j], ent.train_alias(j))
    }

    /// Canonical fact passage `"<canonical> <relation> <value>"`.
    pub fn canonical_passage(&self, e: usize, j: usize) -> String {
        let ent = &self.entities[e];
        fact_passage(&ent.canonical, &ent.facts[j])
    }

    /// Unlabeled domain corpus for PT-style learning: every canonical fact
    /// passage, in entity order. Aliases never occur here.
    pub fn documents(&self) -> Vec<Vec<usize>> {
        let mut out = Vec::new();
        for (e, ent) in self.entities.iter().enumerate() {
            for j in 0..ent.facts.len() {
                out.push(self.tokens(&self.canonical_passage(e, j)));
            }
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
pub enum GenStyle {
    #[default]
    #[serde(rename = "sft")]
    Sft,
    #[serde(rename = "pt-recon")]
    PtRecon,
    #[serde(rename = "pt-prefix")]
    PtPrefix,
}

impl GenStyle {
    pub fn as_str(&self) -> &'static str {
        match self {
            GenStyle::Sft => "sft",
            GenStyle::PtRecon => "pt-recon",
            GenStyle::PtPrefix => "pt-prefix",
        }
    }
}

impl std::str::FromStr for GenStyle {
    type Err = CorpusError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "sft" => Ok(Self::Sft),
            "pt-recon" => Ok(Self::PtRecon),
            "pt-prefix" => Ok(Self::PtPrefix),
            other => Err(CorpusError::InvalidParameter(format!(
                "unknown style {other:?}"
            ))),
        }
    }
}

/// Generative-stage record: predict `y` from `x` through the bottleneck.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GenExample {
    pub x_tokens: Vec<usize>,
    pub y_tokens: Vec<usize>,
    pub style: GenStyle,
}

/// Contrastive-stage record.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PairExample {
    pub query_tokens: Vec<usize>,
    pub positive_tokens: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GenRecord {
    pub x: String,
    pub y: String,
    pub style: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PairRecord {
    pub query: String,
    pub positive: String,
}

impl GenExample {
    pub fn to_record(&self, vocab: &Vocabulary) -> GenRecord {
        GenRecord {
            x: vocab.decode(&self.x_tokens),
            y: vocab.decode(&self.y_tokens),
            style: self.style.as_str().to_string(),
        }
    }

    pub fn from_record(rec: &GenRecord, vocab: &Vocabulary) -> Result<Self, CorpusError> {
        Ok(Self {
            x_tokens: vocab.encode(&rec.x)?,
            y_tokens: vocab.encode(&rec.y)?,
            style: rec.style.parse()?,
        })
    }
}

impl PairExample {
    pub fn to_record(&self, vocab: &Vocabulary) -> PairRecord {
        PairRecord {
            query: vocab.decode(&self.query_tokens),
            positive: vocab.decode(&self.positive_tokens),
        }
    }

    pub fn from_record(rec: &PairRecord, vocab: &Vocabulary) -> Result<Self, CorpusError> {
        Ok(Self {
            query_tokens: vocab.encode(&rec.query)?,
            positive_tokens: vocab.encode(&rec.positive)?,
        })
    }
}

/// One alias-form question per `(entity, fact)`, answered canonically.
pub fn make_sft_examples(world: &World) -> Vec<GenExample> {
    let mut out = Vec::new();
    for (e, ent) in world.entities.iter().enumerate() {
        for j in 0..ent.facts.len() {
            out.push(GenExample {
                x_tokens: world.tokens(&world.sft_question(e, j)),
                y_tokens: world.tokens(&world.canonical_passage(e, j)),
                style: GenStyle::Sft,
            });
        }
    }
    out
}

/// Self-supervised examples over `passages`. Returns the examples and how
/// many passages were too short to split.
pub fn make_pt_examples(
    passages: &[Vec<usize>],
    style: GenStyle,
    split_fraction: f64,
) -> Result<(Vec<GenExample>, usize), CorpusError> {
    match style {
        GenStyle::Sft => Err(CorpusError::InvalidParameter(
            "make_pt_examples needs a pt-* style".into(),
        )),
        GenStyle::PtRecon => Ok((
            passages
                .iter()
                .filter(|p| !p.is_empty())
                .map(|p| GenExample {
                    x_tokens: p.clone(),
                    y_tokens: p.clone(),
                    style,
                })
                .collect(),
            passages.iter().filter(|p| p.is_empty()).count(),
        )),
        GenStyle::PtPrefix => {
            if !(split_fraction > 0.0 && split_fraction < 1.0) {
                return Err(CorpusError::InvalidParameter(format!(
                    "split fraction must be in (0, 1), got {split_fraction}"
                )));
            }
            let mut out = Vec::new();
            let mut skipped = 0;
            for p in passages {
                let cut = (split_fraction * p.len() as f64).floor() as usize;
                if cut == 0 || cut >= p.len() {
                    skipped += 1;
                    continue;
                }
                out.push(GenExample {
                    x_tokens: p[..cut].to_vec(),
                    y_tokens: p[cut..].to_vec(),
                    style,
                });
            }
            if skipped > 0 {
                log::warn!("skipped {skipped} passages too short for prefix-suffix split");
            }
            Ok((out, skipped))
        }
    }
}

/// Canonical-only contrastive pairs for the given entities.
pub fn make_cl_pairs(world: &World, entities: &[usize]) -> Vec<PairExample> {
    let mut out = Vec::new();
    for &e in entities {
        let ent = &world.entities[e];
        for (j, fact) in ent.facts.iter().enumerate() {
            out.push(PairExample {
                query_tokens: world.tokens(&fact_query(fact, &ent.canonical)),
                positive_tokens: world.tokens(&world.canonical_passage(e, j)),
            });
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TextRecord {
    pub id: String,
    pub text: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QrelRecord {
    pub query_id: String,
    pub passage_id: String,
}

/// Held-out retrieval benchmark.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalSet {
    pub train_entities: Vec<usize>,
    pub eval_entities: Vec<usize>,
    /// `(id, tokens)` of alias-form queries.
    pub queries: Vec<(String, Vec<usize>)>,
    /// `(id, tokens)` of canonical passages.
    pub passages: Vec<(String, Vec<usize>)>,
    /// `(query id, relevant passage id)`, exactly one per query.
    pub qrels: Vec<(String, String)>,
}

impl EvalSet {
    pub fn query_records(&self, vocab: &Vocabulary) -> Vec<TextRecord> {
        records(&self.queries, vocab)
    }

    pub fn passage_records(&self, vocab: &Vocabulary) -> Vec<TextRecord> {
        records(&self.passages, vocab)
    }

    pub fn qrel_records(&self) -> Vec<QrelRecord> {
        self.qrels
            .iter()
            .map(|(q, p)| QrelRecord {
                query_id: q.clone(),
                passage_id: p.clone(),
            })
            .collect()
    }
}

fn records(items: &[(String, Vec<usize>)], vocab: &Vocabulary) -> Vec<TextRecord> {
    items
        .iter()
        .map(|(id, toks)| TextRecord {
            id: id.clone(),
            text: vocab.decode(toks),
        })
        .collect()
}

/// Splits entities into train/eval (seeded by the world seed) and builds
/// alias-form queries against canonical passages of the eval entities.
pub fn make_eval_set(world: &World, holdout_fraction: f64) -> Result<EvalSet, CorpusError> {
    if !(holdout_fraction > 0.0 && holdout_fraction < 1.0) {
        return Err(CorpusError::InvalidParameter(format!(
            "holdout fraction must be in (0, 1), got {holdout_fraction}"
        )));
    }
    let n = world.len();
    let n_eval = (holdout_fraction * n as f64).round() as usize;
    if n_eval == 0 || n_eval >= n {
        return Err(CorpusError::TooFewEntities {
            entities: n,
            fraction: holdout_fraction,
        });
    }
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(world.config.seed ^ 0x5eed_e7a1);
    order.shuffle(&mut rng);
    let mut eval_entities = order[..n_eval].to_vec();
    let mut train_entities = order[n_eval..].to_vec();
    eval_entities.sort_unstable();
    train_entities.sort_unstable();

    let mut queries = Vec::new();
    let mut passages = Vec::new();
    let mut qrels = Vec::new();
    for &e in &eval_entities {
        let ent = &world.entities[e];
        for (j, fact) in ent.facts.iter().enumerate() {
            let qid = format!("q{e}_{j}");
            let pid = format!("p{e}_{j}");
            queries.push((
                qid.clone(),
                world.tokens(&fact_query(fact, ent.eval_alias(j))),
            ));
            passages.push((pid.clone(), world.tokens(&world.canonical_passage(e, j))));
            qrels.push((qid, pid));
        }
    }
    Ok(EvalSet {
        train_entities,
        eval_entities,
        queries,
        passages,
        qrels,
    })
}

/// Vocabulary `<specials> w0 .. w{pool-1}` and `n` random passages of
/// `len` content tokens, for reconstruction experiments.
pub fn copy_task(seed: u64, n: usize, len: usize, pool: usize) -> (Vocabulary, Vec<Vec<usize>>) {
    let mut vocab = Vocabulary::new();
    let ids: Vec<usize> = (0..pool).map(|i| vocab.insert(&format!("w{i}"))).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let passages = (0..n)
        .map(|_| (0..len).map(|_| ids[rng.random_range(0..pool)]).collect())
        .collect();
    (vocab, passages)
}

/// Seed and parameters a dataset directory was generated from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorldManifest {
    pub world: WorldConfig,
    pub holdout_fraction: f64,
    pub config_hash: String,
    pub vocabulary: Vec<String>,
    pub files: Vec<String>,
}

#[cfg(test)]
mod tests {
    use super::*;

    fn aspirin_world() -> World {
        let e = EntityRecord {
            canonical: "aspirin".into(),
            aliases: vec!["acetylsalicylic".into()],
            facts: vec![Fact {
                relation: "relieves".into(),
                value: "pain".into(),
            }],
        };
        World::from_entities(WorldConfig::default(), vec![e]).unwrap()
    }

    fn world(seed: u64, n: usize) -> World {
        World::generate(WorldConfig {
            seed,
            n_entities: n,
            ..WorldConfig::default()
        })
        .unwrap()
    }

    #[test]
    fn generated_world_shape() {
        let w = world(7, 100);
        assert_eq!(w.len(), 100);
        assert!(w
            .entities
            .iter()
            .all(|e| e.aliases.len() == 2 && e.facts.len() == 2));
        assert_eq!(w, world(7, 100));
        assert_ne!(w.entities, world(8, 100).entities);
    }

    #[test]
    fn names_are_globally_unique() {
        let w = world(3, 150);
        let mut seen = HashSet::new();
        for e in &w.entities {
            for n in std::iter::once(&e.canonical).chain(&e.aliases) {
                assert!(seen.insert(n.clone()), "duplicate {n}");
                assert!(!Vocabulary::is_special(w.vocab.id(n).unwrap()));
            }
        }
    }

    #[test]
    fn vocab_overflow_is_an_error() {
        let cfg = WorldConfig {
            n_entities: 200,
            vocab_size: 128,
            ..WorldConfig::default()
        };
        assert!(matches!(
            World::generate(cfg),
            Err(CorpusError::VocabOverflow { .. })
        ));
    }

    #[test]
    fn sft_template() {
        let w = aspirin_world();
        let ex = make_sft_examples(&w);
        assert_eq!(ex.len(), 1);
        assert_eq!(
            w.vocab.decode(&ex[0].x_tokens),
            "query: which drug relieves pain? (acetylsalicylic)"
        );
        assert_eq!(w.vocab.decode(&ex[0].y_tokens), "aspirin relieves pain");

        let big = world(1, 40);
        let ex = make_sft_examples(&big);
        assert_eq!(ex.len(), 40 * 2);
        for (i, e) in ex.iter().enumerate() {
            let canon = big.vocab.id(&big.entities[i / 2].canonical).unwrap();
            assert!(e.y_tokens.contains(&canon));
        }
    }

    #[test]
    fn pt_examples() {
        let p10: Vec<usize> = (10..20).collect();
        let (recon, _) = make_pt_examples(&[p10.clone()], GenStyle::PtRecon, 0.5).unwrap();
        assert_eq!((recon[0].x_tokens.len(), recon[0].y_tokens.len()), (10, 10));
        let (pre, skipped) = make_pt_examples(&[p10, vec![5]], GenStyle::PtPrefix, 0.5).unwrap();
        assert_eq!(pre.len(), 1);
        assert_eq!(skipped, 1);
        assert_eq!((pre[0].x_tokens.len(), pre[0].y_tokens.len()), (5, 5));
        assert!(make_pt_examples(&[], GenStyle::PtPrefix, 1.0).is_err());
    }

    #[test]
    fn cl_pairs_use_canonical_names_only() {
        let w = aspirin_world();
        let pairs = make_cl_pairs(&w, &[0]);
        assert_eq!(
            w.vocab.decode(&pairs[0].query_tokens),
            "query: which drug relieves pain? (aspirin)"
        );
        assert_eq!(
            w.vocab.decode(&pairs[0].positive_tokens),
            "aspirin relieves pain"
        );

        let big = world(2, 30);
        let all: Vec<usize> = (0..30).collect();
        let pairs = make_cl_pairs(&big, &all);
        assert_eq!(pairs.len(), 30 * 2);
        let aliases: HashSet<usize> = big
            .entities
            .iter()
            .flat_map(|e| e.aliases.iter().map(|a| big.vocab.id(a).unwrap()))
            .collect();
        for p in &pairs {
            assert!(p
                .query_tokens
                .iter()
                .chain(&p.positive_tokens)
                .all(|t| !aliases.contains(t)));
        }
    }

    #[test]
    fn eval_split_is_disjoint_and_leak_free() {
        let w = world(5, 100);
        let ev = make_eval_set(&w, 0.2).unwrap();
        assert_eq!(ev.eval_entities.len(), 20);
        assert_eq!(ev.train_entities.len(), 80);
        let train: HashSet<_> = ev.train_entities.iter().collect();
        assert!(ev.eval_entities.iter().all(|e| !train.contains(e)));
        assert_eq!(ev.qrels.len(), ev.queries.len());
        let mut per_query = std::collections::HashMap::new();
        for (q, _) in &ev.qrels {
            *per_query.entry(q).or_insert(0) += 1;
        }
        assert!(per_query.values().all(|&c| c == 1));

        let pairs = make_cl_pairs(&w, &ev.train_entities);
        let pair_tokens: HashSet<usize> = pairs
            .iter()
            .flat_map(|p| p.query_tokens.iter().chain(&p.positive_tokens).copied())
            .collect();
        for &e in &ev.eval_entities {
            let ent = &w.entities[e];
            for n in std::iter::once(&ent.canonical).chain(&ent.aliases) {
                assert!(!pair_tokens.contains(&w.vocab.id(n).unwrap()));
            }
        }
        // eval query strings never occur verbatim in generative inputs
        let sft: HashSet<Vec<usize>> = make_sft_examples(&w)
            .into_iter()
            .map(|e| e.x_tokens)
            .collect();
        assert!(ev.queries.iter().all(|(_, q)| !sft.contains(q)));

        assert!(matches!(
            make_eval_set(&world(5, 2), 0.2),
            Err(CorpusError::TooFewEntities { .. })
        ));
        assert!(make_eval_set(&w, 1.0).is_err());
    }

    #[test]
    fn generated_text_round_trips() {
        let w = world(9, 20);
        let ev = make_eval_set(&w, 0.25).unwrap();
        let mut texts: Vec<Vec<usize>> = Vec::new();
        for e in make_sft_examples(&w) {
            texts.push(e.x_tokens);
            texts.push(e.y_tokens);
        }
        texts.extend(w.documents());
        texts.extend(ev.queries.iter().map(|q| q.1.clone()));
        for t in texts {
            assert_eq!(w.vocab.encode(&w.vocab.decode(&t)).unwrap(), t);
        }
        let rec = make_sft_examples(&w)[0].to_record(&w.vocab);
        assert_eq!(
            GenExample::from_record(&rec, &w.vocab).unwrap(),
            make_sft_examples(&w)[0]
        );
    }

    #[test]
    fn copy_task_is_seeded() {
        let (v, p) = copy_task(1, 5, 8, 16);
        assert_eq!(v.len(), 4 + 16);
        assert_eq!(p.len(), 5);
        assert!(p.iter().all(|s| s.len() == 8 && s.iter().all(|&t| t >= 4)));
        assert_eq!(copy_task(1, 5, 8, 16).1, p);
    }
}
