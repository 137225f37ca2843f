//! Symbolic multi-hop QA world.
//!
//! Every document is an entity page whose facts are `(subject, predicate,
//! object)` triples with the page's title as subject. A question is the
//! three-token sequence `[attribute, relation, start_entity]`: follow
//! `relation` from `start_entity` to a bridge entity, then read
//! `attribute` off the bridge entity's page.
//!
//! Gold per-hop summaries are built backwards from the answer statement
//! ([`qa2d`] then [`backward_summary`]); inference-time summaries come from
//! the forward [`oracle_summarize`].

use std::collections::{BTreeMap, HashSet};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub type TokenId = u32;
pub type DocId = u32;

/// Prefix prepended to query-side text before encoding.
pub const QUERY_PREFIX: TokenId = 0;
/// Prefix prepended to document-side text before encoding.
pub const PASSAGE_PREFIX: TokenId = 1;
/// Copula used by declarative summaries: `A R E IS V`.
pub const IS: TokenId = 2;

const N_RESERVED: u32 = 3;

/// Chain length of every generated question.
pub const HOPS: usize = 2;

const MAX_ATTEMPTS: usize = 64;

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("invalid world config: {0}")]
    Config(String),
    #[error("world generation failed after {attempts} attempts: {constraint}")]
    Unsatisfiable { attempts: usize, constraint: String },
    #[error("question shape error: {0}")]
    Shape(String),
    #[error("invariant violated for sample {sample_id}: {what}")]
    Invariant { sample_id: u32, what: String },
    #[error("malformed data file {path}: {msg}")]
    Format { path: String, msg: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TokenClass {
    Entity,
    Relation,
    Attribute,
    Value,
    Structural,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Token {
    pub id: TokenId,
    pub class: TokenClass,
}

/// Token table. Ids are laid out as reserved structural tokens, then
/// entities, relations, attributes and values in contiguous ranges.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocab {
    n_entities: u32,
    n_relations: u32,
    n_attributes: u32,
    n_values: u32,
}

impl Vocab {
    pub fn new(n_entities: u32, n_relations: u32, n_attributes: u32, n_values: u32) -> Self {
        Self {
            n_entities,
            n_relations,
            n_attributes,
            n_values,
        }
    }

    pub fn len(&self) -> usize {
        (N_RESERVED + self.n_entities + self.n_relations + self.n_attributes + self.n_values)
            as usize
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn entity(&self, i: u32) -> TokenId {
        debug_assert!(i < self.n_entities);
        N_RESERVED + i
    }

    pub fn relation(&self, i: u32) -> TokenId {
        debug_assert!(i < self.n_relations);
        N_RESERVED + self.n_entities + i
    }

    pub fn attribute(&self, i: u32) -> TokenId {
        debug_assert!(i < self.n_attributes);
        N_RESERVED + self.n_entities + self.n_relations + i
    }

    pub fn value(&self, i: u32) -> TokenId {
        debug_assert!(i < self.n_values);
        N_RESERVED + self.n_entities + self.n_relations + self.n_attributes + i
    }

    pub fn class(&self, id: TokenId) -> Option<TokenClass> {
        let mut base = N_RESERVED;
        if id < base {
            return Some(TokenClass::Structural);
        }
        for (count, class) in [
            (self.n_entities, TokenClass::Entity),
            (self.n_relations, TokenClass::Relation),
            (self.n_attributes, TokenClass::Attribute),
            (self.n_values, TokenClass::Value),
        ] {
            if id < base + count {
                return Some(class);
            }
            base += count;
        }
        None
    }

    pub fn token(&self, id: TokenId) -> Option<Token> {
        self.class(id).map(|class| Token { id, class })
    }

    pub fn surface(&self, id: TokenId) -> String {
        match id {
            QUERY_PREFIX => "[QUERY]".to_string(),
            PASSAGE_PREFIX => "[PASSAGE]".to_string(),
            IS => "IS".to_string(),
            _ => match self.class(id) {
                Some(TokenClass::Entity) => format!("E{}", id - self.entity(0)),
                Some(TokenClass::Relation) => format!("R{}", id - self.relation(0)),
                Some(TokenClass::Attribute) => format!("A{}", id - self.attribute(0)),
                Some(TokenClass::Value) => format!("V{}", id - self.value(0)),
                _ => format!("<unk:{id}>"),
            },
        }
    }

    fn entries(&self) -> BTreeMap<TokenId, VocabEntry> {
        (0..self.len() as TokenId)
            .map(|id| {
                (
                    id,
                    VocabEntry {
                        surface: self.surface(id),
                        class: self.class(id).expect("id in range"),
                    },
                )
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
struct VocabEntry {
    surface: String,
    class: TokenClass,
}

/// One `subject predicate object` triple. The predicate's token class tells
/// relation links (object is an entity) from attribute facts (object is a
/// value).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Fact {
    pub subject: TokenId,
    pub predicate: TokenId,
    pub object: TokenId,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Document {
    pub doc_id: DocId,
    pub title: TokenId,
    pub facts: Vec<Fact>,
}

impl Document {
    /// Title followed by the flattened fact triples.
    pub fn tokens(&self) -> Vec<TokenId> {
        let mut out = Vec::with_capacity(1 + 3 * self.facts.len());
        out.push(self.title);
        out.extend(self.fact_tokens());
        out
    }

    pub fn fact_tokens(&self) -> impl Iterator<Item = TokenId> + '_ {
        self.facts
            .iter()
            .flat_map(|f| [f.subject, f.predicate, f.object])
    }

    pub fn contains_token(&self, t: TokenId) -> bool {
        self.title == t || self.fact_tokens().any(|x| x == t)
    }

    /// Object of the first fact with this predicate.
    pub fn lookup(&self, predicate: TokenId) -> Option<TokenId> {
        self.facts
            .iter()
            .find(|f| f.predicate == predicate)
            .map(|f| f.object)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Corpus {
    pub vocab: Vocab,
    docs: Vec<Document>,
}

impl Corpus {
    /// Documents must carry `doc_id == position`.
    pub fn new(vocab: Vocab, docs: Vec<Document>) -> Result<Self, CorpusError> {
        for (i, d) in docs.iter().enumerate() {
            if d.doc_id as usize != i {
                return Err(CorpusError::Format {
                    path: "<memory>".into(),
                    msg: format!("doc at position {i} has doc_id {}", d.doc_id),
                });
            }
        }
        Ok(Self { vocab, docs })
    }

    pub fn docs(&self) -> &[Document] {
        &self.docs
    }

    pub fn doc(&self, id: DocId) -> Option<&Document> {
        self.docs.get(id as usize)
    }

    pub fn len(&self) -> usize {
        self.docs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.docs.is_empty()
    }

    /// Every document holding a fact `subject predicate *`.
    pub fn resolving_docs(&self, subject: TokenId, predicate: TokenId) -> Vec<DocId> {
        self.docs
            .iter()
            .filter(|d| {
                d.facts
                    .iter()
                    .any(|f| f.subject == subject && f.predicate == predicate)
            })
            .map(|d| d.doc_id)
            .collect()
    }
}

/// A bridge question `[attribute, relation, start_entity]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Question {
    pub attribute: TokenId,
    pub relation: TokenId,
    pub start: TokenId,
}

impl Question {
    pub fn parse(vocab: &Vocab, tokens: &[TokenId]) -> Result<Self, CorpusError> {
        let [a, r, e] = tokens else {
            return Err(CorpusError::Shape(format!(
                "expected [attribute, relation, entity], got {} tokens",
                tokens.len()
            )));
        };
        let expect = [
            (*a, TokenClass::Attribute),
            (*r, TokenClass::Relation),
            (*e, TokenClass::Entity),
        ];
        for (pos, (t, class)) in expect.into_iter().enumerate() {
            if vocab.class(t) != Some(class) {
                return Err(CorpusError::Shape(format!(
                    "position {pos} holds {} ({:?}), expected {class:?}",
                    vocab.surface(t),
                    vocab.class(t)
                )));
            }
        }
        Ok(Self {
            attribute: *a,
            relation: *r,
            start: *e,
        })
    }

    pub fn tokens(&self) -> [TokenId; 3] {
        [self.attribute, self.relation, self.start]
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QASample {
    pub sample_id: u32,
    pub question: Vec<TokenId>,
    pub answer: TokenId,
    pub gold_chain: Vec<DocId>,
    pub summaries: Vec<Vec<TokenId>>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WorldConfig {
    pub n_entities: u32,
    pub n_relations: u32,
    pub n_attributes: u32,
    pub n_values: u32,
    pub n_docs: u32,
    pub n_train: u32,
    pub n_dev: u32,
    /// Relation links per entity page (capped by `n_relations`).
    pub relations_per_doc: u32,
    /// Attribute facts per entity page (capped by `n_attributes`).
    pub attributes_per_doc: u32,
    pub seed: u64,
}

impl Default for WorldConfig {
    fn default() -> Self {
        Self {
            n_entities: 500,
            n_relations: 8,
            n_attributes: 8,
            n_values: 64,
            n_docs: 500,
            n_train: 400,
            n_dev: 100,
            relations_per_doc: 2,
            attributes_per_doc: 2,
            seed: 42,
        }
    }
}

impl WorldConfig {
    fn validate(&self) -> Result<(), CorpusError> {
        let positive = [
            ("n_entities", self.n_entities),
            ("n_relations", self.n_relations),
            ("n_attributes", self.n_attributes),
            ("n_values", self.n_values),
            ("n_docs", self.n_docs),
            ("relations_per_doc", self.relations_per_doc),
            ("attributes_per_doc", self.attributes_per_doc),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(CorpusError::Config(format!("{name} must be positive")));
            }
        }
        if self.n_entities < 2 {
            return Err(CorpusError::Config(
                "n_entities must be at least 2 (a bridge needs two entities)".into(),
            ));
        }
        if self.n_docs < self.n_entities {
            return Err(CorpusError::Config(format!(
                "n_docs ({}) must be >= n_entities ({})",
                self.n_docs, self.n_entities
            )));
        }
        if self.n_train + self.n_dev == 0 {
            return Err(CorpusError::Config(
                "n_train + n_dev must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// A generated corpus plus its train/dev splits.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct World {
    pub corpus: Corpus,
    pub train: Vec<QASample>,
    pub dev: Vec<QASample>,
}

/// Last-hop summary: the declarative form `[A, R, E, IS, answer]`.
pub fn qa2d(vocab: &Vocab, question: &[TokenId], answer: TokenId) -> Result<Vec<TokenId>, CorpusError> {
    let q = Question::parse(vocab, question)?;
    let mut out = q.tokens().to_vec();
    out.push(IS);
    out.push(answer);
    Ok(out)
}

/// Tokens `question` asks about that `doc` answers: relation objects and
/// the attribute's value, in document fact order.
fn resolve(question: &[TokenId], doc: &Document) -> Vec<TokenId> {
    let (attribute, relation) = match question {
        [a, r, ..] => (Some(*a), Some(*r)),
        _ => (None, None),
    };
    doc.facts
        .iter()
        .filter(|f| f.subject == doc.title)
        .filter(|f| Some(f.predicate) == relation || Some(f.predicate) == attribute)
        .map(|f| f.object)
        .collect()
}

/// Derive `s_t` from `s_{t+1}` by dropping tokens `doc` does not support,
/// then appending what `doc` resolves for the question.
pub fn backward_summary(question: &[TokenId], doc: &Document, s_next: &[TokenId]) -> Vec<TokenId> {
    let supported: HashSet<TokenId> = doc
        .fact_tokens()
        .chain(question.iter().copied())
        .chain([IS])
        .collect();
    let mut out: Vec<TokenId> = s_next
        .iter()
        .copied()
        .filter(|t| supported.contains(t))
        .collect();
    let kept: HashSet<TokenId> = out.iter().copied().collect();
    out.extend(resolve(question, doc).into_iter().filter(|t| !kept.contains(t)));
    out
}

/// Forward summarizer used at inference on retrieved documents:
/// `dedup(s_prev ++ resolve(question, doc))`, first occurrence wins.
pub fn oracle_summarize(s_prev: &[TokenId], doc: &Document, question: &[TokenId]) -> Vec<TokenId> {
    let mut seen = HashSet::new();
    s_prev
        .iter()
        .copied()
        .chain(resolve(question, doc))
        .filter(|t| seen.insert(*t))
        .collect()
}

/// Build a world deterministically from `config`.
pub fn generate_world(config: &WorldConfig) -> Result<World, CorpusError> {
    config.validate()?;
    let vocab = Vocab::new(
        config.n_entities,
        config.n_relations,
        config.n_attributes,
        config.n_values,
    );
    let needed = (config.n_train + config.n_dev) as usize;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut last_failure = String::new();
    for _ in 0..MAX_ATTEMPTS {
        let docs = match sample_documents(config, &vocab, &mut rng) {
            Ok(d) => d,
            Err(msg) => {
                last_failure = msg;
                continue;
            }
        };
        let corpus = Corpus::new(vocab.clone(), docs)?;
        let mut candidates = bridge_candidates(&corpus);
        if candidates.len() < needed {
            last_failure = format!(
                "only {} unique bridge questions satisfy uniqueness and answer closure, need {needed}",
                candidates.len()
            );
            continue;
        }
        candidates.shuffle(&mut rng);
        candidates.truncate(needed);
        let samples = candidates
            .into_iter()
            .enumerate()
            .map(|(i, c)| build_sample(&corpus, i as u32, c))
            .collect::<Result<Vec<_>, _>>()?;
        let mut train = samples;
        let dev = train.split_off(config.n_train as usize);
        let world = World { corpus, train, dev };
        for s in world.train.iter().chain(&world.dev) {
            check_sample(&world.corpus, s)?;
        }
        return Ok(world);
    }
    Err(CorpusError::Unsatisfiable {
        attempts: MAX_ATTEMPTS,
        constraint: last_failure,
    })
}

fn sample_documents(
    config: &WorldConfig,
    vocab: &Vocab,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<Document>, String> {
    let rel_per = config.relations_per_doc.min(config.n_relations) as usize;
    let attr_per = config.attributes_per_doc.min(config.n_attributes) as usize;
    let relations: Vec<TokenId> = (0..config.n_relations).map(|i| vocab.relation(i)).collect();
    let attributes: Vec<TokenId> = (0..config.n_attributes).map(|i| vocab.attribute(i)).collect();

    // (entity index) -> predicates already used for it anywhere in the corpus
    let mut used: Vec<HashSet<TokenId>> = vec![HashSet::new(); config.n_entities as usize];
    let mut docs = Vec::with_capacity(config.n_docs as usize);

    let make_doc = |e: u32, rel_pool: Vec<TokenId>, attr_pool: Vec<TokenId>, rng: &mut ChaCha8Rng| {
        let title = vocab.entity(e);
        let mut facts = Vec::new();
        for predicate in rel_pool {
            let mut other = rng.gen_range(0..config.n_entities - 1);
            if other >= e {
                other += 1;
            }
            facts.push(Fact {
                subject: title,
                predicate,
                object: vocab.entity(other),
            });
        }
        for predicate in attr_pool {
            facts.push(Fact {
                subject: title,
                predicate,
                object: vocab.value(rng.gen_range(0..config.n_values)),
            });
        }
        facts.shuffle(rng);
        Document {
            doc_id: 0,
            title,
            facts,
        }
    };

    for e in 0..config.n_entities {
        let rels: Vec<TokenId> = relations.choose_multiple(rng, rel_per).copied().collect();
        let attrs: Vec<TokenId> = attributes.choose_multiple(rng, attr_per).copied().collect();
        used[e as usize].extend(rels.iter().chain(&attrs));
        docs.push(make_doc(e, rels, attrs, rng));
    }

    // Extra pages reuse a title entity but only with predicates that entity
    // has nowhere else, so no (subject, predicate) pair is ever resolved twice.
    for _ in config.n_entities..config.n_docs {
        let open: Vec<u32> = (0..config.n_entities)
            .filter(|&e| used[e as usize].len() < relations.len() + attributes.len())
            .collect();
        let Some(&e) = open.choose(rng) else {
            return Err(format!(
                "n_docs ({}) exceeds the number of distinct (entity, predicate) pairs available",
                config.n_docs
            ));
        };
        let free = |pool: &[TokenId], used: &HashSet<TokenId>| -> Vec<TokenId> {
            pool.iter().copied().filter(|p| !used.contains(p)).collect()
        };
        let rels: Vec<TokenId> = free(&relations, &used[e as usize])
            .choose_multiple(rng, rel_per)
            .copied()
            .collect();
        let attrs: Vec<TokenId> = free(&attributes, &used[e as usize])
            .choose_multiple(rng, attr_per)
            .copied()
            .collect();
        used[e as usize].extend(rels.iter().chain(&attrs));
        docs.push(make_doc(e, rels, attrs, rng));
    }

    docs.shuffle(rng);
    for (i, d) in docs.iter_mut().enumerate() {
        d.doc_id = i as DocId;
    }
    Ok(docs)
}

#[derive(Debug, Clone, Copy)]
struct Candidate {
    question: Question,
    answer: TokenId,
    first: DocId,
    second: DocId,
}

fn bridge_candidates(corpus: &Corpus) -> Vec<Candidate> {
    let vocab = &corpus.vocab;
    // (subject, predicate) -> docs resolving it
    let mut resolvers: BTreeMap<(TokenId, TokenId), Vec<DocId>> = BTreeMap::new();
    for d in corpus.docs() {
        for f in &d.facts {
            resolvers.entry((f.subject, f.predicate)).or_default().push(d.doc_id);
        }
    }
    let mut out = Vec::new();
    for d1 in corpus.docs() {
        for f1 in d1.facts.iter().filter(|f| vocab.class(f.predicate) == Some(TokenClass::Relation)) {
            if resolvers[&(f1.subject, f1.predicate)].len() != 1 {
                continue;
            }
            let bridge = f1.object;
            for d2 in corpus.docs().iter().filter(|d| d.title == bridge) {
                for f2 in d2
                    .facts
                    .iter()
                    .filter(|f| vocab.class(f.predicate) == Some(TokenClass::Attribute))
                {
                    if resolvers[&(f2.subject, f2.predicate)].len() != 1 {
                        continue;
                    }
                    // the answer must not leak into the first hop's page
                    if d1.contains_token(f2.object) {
                        continue;
                    }
                    out.push(Candidate {
                        question: Question {
                            attribute: f2.predicate,
                            relation: f1.predicate,
                            start: d1.title,
                        },
                        answer: f2.object,
                        first: d1.doc_id,
                        second: d2.doc_id,
                    });
                }
            }
        }
    }
    out
}

fn build_sample(corpus: &Corpus, sample_id: u32, c: Candidate) -> Result<QASample, CorpusError> {
    let question = c.question.tokens().to_vec();
    let chain = [c.first, c.second];
    let mut summaries = vec![qa2d(&corpus.vocab, &question, c.answer)?];
    for &doc_id in chain[..HOPS - 1].iter().rev() {
        let doc = corpus.doc(doc_id).expect("candidate doc exists");
        let next = summaries.last().expect("non-empty");
        summaries.push(backward_summary(&question, doc, next));
    }
    summaries.reverse();
    Ok(QASample {
        sample_id,
        question,
        answer: c.answer,
        gold_chain: chain.to_vec(),
        summaries,
    })
}

/// Check every structural promise a sample makes about the corpus.
pub fn check_sample(corpus: &Corpus, s: &QASample) -> Result<(), CorpusError> {
    let fail = |what: String| CorpusError::Invariant {
        sample_id: s.sample_id,
        what,
    };
    let q = Question::parse(&corpus.vocab, &s.question).map_err(|e| fail(e.to_string()))?;
    if s.gold_chain.len() != HOPS || s.summaries.len() != HOPS {
        return Err(fail(format!(
            "expected {HOPS} gold docs and summaries, got {} and {}",
            s.gold_chain.len(),
            s.summaries.len()
        )));
    }
    let docs: Vec<&Document> = s
        .gold_chain
        .iter()
        .map(|&id| corpus.doc(id).ok_or_else(|| fail(format!("gold doc {id} missing"))))
        .collect::<Result<_, _>>()?;
    let (d1, d2) = (docs[0], docs[1]);

    if d1.title != q.start {
        return Err(fail("first gold doc is not the start entity's page".into()));
    }
    let Some(bridge) = d1.lookup(q.relation) else {
        return Err(fail("first gold doc lacks the question relation".into()));
    };
    if d2.title != bridge {
        return Err(fail("second gold doc is not the bridge entity's page".into()));
    }
    if d2.lookup(q.attribute) != Some(s.answer) {
        return Err(fail("second gold doc does not state the answer".into()));
    }
    let r1 = corpus.resolving_docs(q.start, q.relation);
    if r1 != [d1.doc_id] {
        return Err(fail(format!("(start, relation) resolved by docs {r1:?}")));
    }
    let r2 = corpus.resolving_docs(bridge, q.attribute);
    if r2 != [d2.doc_id] {
        return Err(fail(format!("(bridge, attribute) resolved by docs {r2:?}")));
    }

    let mut support: HashSet<TokenId> = s.question.iter().copied().chain([IS]).collect();
    for (t, (summary, doc)) in s.summaries.iter().zip(&docs).enumerate() {
        support.extend(doc.fact_tokens());
        if let Some(bad) = summary.iter().find(|tok| !support.contains(tok)) {
            return Err(fail(format!(
                "summary {} holds unsupported token {}",
                t + 1,
                corpus.vocab.surface(*bad)
            )));
        }
        let last = t + 1 == HOPS;
        let has_answer = summary.contains(&s.answer);
        if last && !has_answer {
            return Err(fail("final summary lacks the answer".into()));
        }
        if !last && has_answer && !docs[..=t].iter().any(|d| d.contains_token(s.answer)) {
            return Err(fail(format!("summary {} leaks the answer", t + 1)));
        }
    }

    let mut expected = s.question.clone();
    expected.push(IS);
    expected.extend(oracle_summarize(&[], d1, &s.question));
    if s.summaries[0] != expected {
        return Err(fail(
            "first summary disagrees with question ++ IS ++ oracle_summarize(d1)".into(),
        ));
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// JSONL / JSON persistence

#[derive(Serialize, Deserialize)]
struct DocRecord {
    doc_id: DocId,
    title: TokenId,
    facts: Vec<TokenId>,
}

impl World {
    /// Writes `corpus.jsonl`, `train.jsonl`, `dev.jsonl` and `vocab.json`.
    pub fn write_dir(&self, dir: &Path) -> Result<(), CorpusError> {
        std::fs::create_dir_all(dir)?;
        let vocab = &self.corpus.vocab;
        let vocab_json = serde_json::to_string_pretty(&vocab.entries())
            .expect("vocab serializes");
        std::fs::write(dir.join("vocab.json"), vocab_json + "\n")?;

        let mut w = BufWriter::new(File::create(dir.join("corpus.jsonl"))?);
        for d in self.corpus.docs() {
            let rec = DocRecord {
                doc_id: d.doc_id,
                title: d.title,
                facts: d.fact_tokens().collect(),
            };
            writeln!(w, "{}", serde_json::to_string(&rec).expect("doc serializes"))?;
        }
        w.flush()?;
        write_samples(&dir.join("train.jsonl"), &self.train)?;
        write_samples(&dir.join("dev.jsonl"), &self.dev)?;
        Ok(())
    }

    pub fn read_dir(dir: &Path) -> Result<Self, CorpusError> {
        let vocab = read_vocab(&dir.join("vocab.json"))?;
        let corpus_path = dir.join("corpus.jsonl");
        let docs = read_jsonl::<DocRecord>(&corpus_path)?
            .into_iter()
            .map(|r| {
                if r.facts.len() % 3 != 0 {
                    return Err(format_err(&corpus_path, format!("doc {} facts not triples", r.doc_id)));
                }
                let facts = r
                    .facts
                    .chunks(3)
                    .map(|c| Fact {
                        subject: c[0],
                        predicate: c[1],
                        object: c[2],
                    })
                    .collect();
                Ok(Document {
                    doc_id: r.doc_id,
                    title: r.title,
                    facts,
                })
            })
            .collect::<Result<Vec<_>, _>>()?;
        for d in &docs {
            if let Some(bad) = d.tokens().into_iter().find(|&t| t as usize >= vocab.len()) {
                return Err(format_err(&corpus_path, format!("doc {} has token {bad} outside vocab", d.doc_id)));
            }
        }
        let corpus = Corpus::new(vocab, docs).map_err(|e| format_err(&corpus_path, e.to_string()))?;
        let train = read_jsonl(&dir.join("train.jsonl"))?;
        let dev = read_jsonl(&dir.join("dev.jsonl"))?;
        Ok(World { corpus, train, dev })
    }
}

fn format_err(path: &Path, msg: String) -> CorpusError {
    CorpusError::Format {
        path: path.display().to_string(),
        msg,
    }
}

fn read_vocab(path: &Path) -> Result<Vocab, CorpusError> {
    let text = std::fs::read_to_string(path)?;
    let entries: BTreeMap<TokenId, VocabEntry> =
        serde_json::from_str(&text).map_err(|e| format_err(path, e.to_string()))?;
    let count = |c: TokenClass| entries.values().filter(|e| e.class == c).count() as u32;
    let vocab = Vocab::new(
        count(TokenClass::Entity),
        count(TokenClass::Relation),
        count(TokenClass::Attribute),
        count(TokenClass::Value),
    );
    if vocab.entries() != entries {
        return Err(format_err(path, "vocab layout is not the canonical id layout".into()));
    }
    Ok(vocab)
}

fn write_samples(path: &Path, samples: &[QASample]) -> Result<(), CorpusError> {
    let mut w = BufWriter::new(File::create(path)?);
    for s in samples {
        writeln!(w, "{}", serde_json::to_string(s).expect("sample serializes"))?;
    }
    w.flush()?;
    Ok(())
}

fn read_jsonl<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>, CorpusError> {
    let reader = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    for (lineno, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(
            serde_json::from_str(&line)
                .map_err(|e| format_err(path, format!("line {}: {e}", lineno + 1)))?,
        );
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_config() -> WorldConfig {
        WorldConfig {
            n_entities: 3,
            n_relations: 1,
            n_attributes: 1,
            n_values: 2,
            n_docs: 3,
            n_train: 1,
            n_dev: 0,
            seed: 7,
            ..WorldConfig::default()
        }
    }

    #[test]
    fn minimal_world() {
        let w = generate_world(&tiny_config()).unwrap();
        assert_eq!(w.corpus.len(), 3);
        assert_eq!(w.train.len(), 1);
        assert!(w.dev.is_empty());
        assert_eq!(w.train[0].gold_chain.len(), 2);
        check_sample(&w.corpus, &w.train[0]).unwrap();
    }

    #[test]
    fn same_seed_same_bytes() {
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        generate_world(&tiny_config()).unwrap().write_dir(a.path()).unwrap();
        generate_world(&tiny_config()).unwrap().write_dir(b.path()).unwrap();
        for f in ["corpus.jsonl", "train.jsonl", "dev.jsonl", "vocab.json"] {
            assert_eq!(
                std::fs::read(a.path().join(f)).unwrap(),
                std::fs::read(b.path().join(f)).unwrap(),
                "{f}"
            );
        }
    }

    #[test]
    fn write_read_round_trip() {
        let cfg = WorldConfig {
            n_entities: 20,
            n_docs: 26,
            n_train: 10,
            n_dev: 5,
            ..WorldConfig::default()
        };
        let w = generate_world(&cfg).unwrap();
        let dir = tempfile::tempdir().unwrap();
        w.write_dir(dir.path()).unwrap();
        assert_eq!(World::read_dir(dir.path()).unwrap(), w);
    }

    #[test]
    fn default_world_passes_checker() {
        let w = generate_world(&WorldConfig::default()).unwrap();
        assert_eq!(w.corpus.len(), 500);
        assert_eq!((w.train.len(), w.dev.len()), (400, 100));
        for s in &w.dev {
            check_sample(&w.corpus, s).unwrap();
        }
        let train_q: HashSet<_> = w.train.iter().map(|s| s.question.clone()).collect();
        assert!(w.dev.iter().all(|s| !train_q.contains(&s.question)));
    }

    #[test]
    fn extra_documents_keep_uniqueness() {
        let cfg = WorldConfig {
            n_entities: 40,
            n_docs: 70,
            n_train: 30,
            n_dev: 10,
            ..WorldConfig::default()
        };
        let w = generate_world(&cfg).unwrap();
        assert_eq!(w.corpus.len(), 70);
        for d in w.corpus.docs() {
            for f in &d.facts {
                assert_eq!(f.subject, d.title);
                assert_eq!(w.corpus.resolving_docs(f.subject, f.predicate).len(), 1);
            }
        }
    }

    #[test]
    fn impossible_configs_are_rejected() {
        let too_many = WorldConfig {
            n_train: 1000,
            ..tiny_config()
        };
        match generate_world(&too_many) {
            Err(CorpusError::Unsatisfiable { constraint, .. }) => {
                assert!(constraint.contains("unique bridge questions"), "{constraint}")
            }
            other => panic!("unexpected {other:?}"),
        }
        let few_docs = WorldConfig {
            n_docs: 2,
            ..tiny_config()
        };
        assert!(matches!(generate_world(&few_docs), Err(CorpusError::Config(_))));
        let zero = WorldConfig {
            n_values: 0,
            ..tiny_config()
        };
        assert!(matches!(generate_world(&zero), Err(CorpusError::Config(_))));
    }

    fn vocab() -> Vocab {
        Vocab::new(4, 2, 2, 4)
    }

    #[test]
    fn qa2d_rule() {
        let v = vocab();
        let q = [v.attribute(0), v.relation(1), v.entity(2)];
        let out = qa2d(&v, &q, v.value(3)).unwrap();
        assert_eq!(out, vec![q[0], q[1], q[2], IS, v.value(3)]);
        assert!(matches!(qa2d(&v, &q[..2], v.value(0)), Err(CorpusError::Shape(_))));
        let swapped = [v.relation(1), v.attribute(0), v.entity(2)];
        assert!(matches!(qa2d(&v, &swapped, v.value(0)), Err(CorpusError::Shape(_))));
    }

    #[test]
    fn qa2d_answer_may_repeat_question_token() {
        // The rule never deduplicates, so a token shared with the question
        // still yields five tokens. Shape validation is bypassed by reusing
        // the entity as a (nonsensical) answer.
        let v = vocab();
        let q = [v.attribute(0), v.relation(0), v.entity(1)];
        let out = qa2d(&v, &q, v.entity(1)).unwrap();
        assert_eq!(out.len(), 5);
        assert_eq!(out[2], out[4]);
    }

    #[test]
    fn backward_summary_hand_case() {
        // q = [A, R, E1], s_next = [A, R, E1, IS, V], d1 = "E1 R -> E2".
        // keep: A, R, E1 (question) and IS; V is unsupported. resolve: E2.
        let v = vocab();
        let (a, r, e1, e2, val) = (v.attribute(0), v.relation(0), v.entity(1), v.entity(2), v.value(0));
        let d1 = Document {
            doc_id: 0,
            title: e1,
            facts: vec![Fact { subject: e1, predicate: r, object: e2 }],
        };
        let out = backward_summary(&[a, r, e1], &d1, &[a, r, e1, IS, val]);
        assert_eq!(out, vec![a, r, e1, IS, e2]);
    }

    #[test]
    fn backward_summary_identity_when_doc_supports_everything() {
        let v = vocab();
        let (a, r, e1, e2, val) = (v.attribute(0), v.relation(0), v.entity(1), v.entity(2), v.value(0));
        let other_rel = v.relation(1);
        // doc supports every token of s_next; it has the question attribute
        // (whose value is already in s_next) but not the question relation
        let d = Document {
            doc_id: 0,
            title: e2,
            facts: vec![
                Fact { subject: e2, predicate: a, object: val },
                Fact { subject: e2, predicate: other_rel, object: e1 },
            ],
        };
        let s_next = vec![a, e2, IS, val];
        assert_eq!(backward_summary(&[a, r, e1], &d, &s_next), s_next);
    }

    #[test]
    fn oracle_summarize_cases() {
        let v = vocab();
        let (a, r, e1, e2) = (v.attribute(0), v.relation(0), v.entity(1), v.entity(2));
        let q = [a, r, e1];
        let d1 = Document {
            doc_id: 0,
            title: e1,
            facts: vec![Fact { subject: e1, predicate: r, object: e2 }],
        };
        assert_eq!(oracle_summarize(&[], &d1, &q), vec![e2]);
        let unrelated = Document {
            doc_id: 1,
            title: e2,
            facts: vec![Fact { subject: e2, predicate: v.relation(1), object: e1 }],
        };
        let prev = vec![e2, IS];
        assert_eq!(oracle_summarize(&prev, &unrelated, &q), prev);
        assert_eq!(oracle_summarize(&[e2], &d1, &q), vec![e2]);
    }

    #[test]
    fn vocab_classes_and_surfaces() {
        let v = vocab();
        assert_eq!(v.len(), 3 + 4 + 2 + 2 + 4);
        assert_eq!(v.class(QUERY_PREFIX), Some(TokenClass::Structural));
        assert_eq!(v.class(v.value(3)), Some(TokenClass::Value));
        assert_eq!(v.class(v.len() as TokenId), None);
        assert_eq!(v.surface(v.relation(1)), "R1");
    }
}
