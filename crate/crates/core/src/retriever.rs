//! Two-hop beam retrieval with summary-based query reformulation, and
//! reranking of retrieved chains by an external per-document scorer.

use std::cmp::Ordering;
use std::collections::HashSet;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{oracle_summarize, Corpus, DocId, Document, TokenId};
use crate::encoder::{EncoderError, EncoderParams, Role};
use crate::index::FlatIndex;

#[derive(Debug, Error)]
pub enum RetrieveError {
    #[error("beam config error: {0}")]
    Config(String),
    #[error("index and encoder disagree: {0}")]
    Mismatch(String),
    #[error("gold-summary mode needs a first-hop gold summary")]
    MissingGoldSummary,
    #[error(transparent)]
    Encoder(#[from] EncoderError),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BeamConfig {
    /// Hop-1 beam width.
    pub b1: usize,
    /// Hop-2 expansions per hop-1 beam.
    pub b2: usize,
    /// Reformulate hop 2 from the sample's gold first-hop summary.
    pub gold_summaries: bool,
}

impl Default for BeamConfig {
    fn default() -> Self {
        Self {
            b1: 10,
            b2: 20,
            gold_summaries: false,
        }
    }
}

impl BeamConfig {
    pub fn extended() -> Self {
        Self {
            b1: 50,
            b2: 50,
            gold_summaries: false,
        }
    }

    pub fn validate(&self) -> Result<(), RetrieveError> {
        if self.b1 == 0 || self.b2 == 0 {
            return Err(RetrieveError::Config(format!(
                "beam widths must be >= 1, got {}x{}",
                self.b1, self.b2
            )));
        }
        Ok(())
    }
}

impl std::str::FromStr for BeamConfig {
    type Err = String;

    /// Parses `B1xB2`, e.g. `10x20`.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let (a, b) = s
            .split_once(['x', 'X'])
            .ok_or_else(|| format!("beam `{s}` is not of the form B1xB2"))?;
        let parse = |t: &str| t.trim().parse::<usize>().map_err(|e| format!("beam `{s}`: {e}"));
        let cfg = BeamConfig {
            b1: parse(a)?,
            b2: parse(b)?,
            gold_summaries: false,
        };
        cfg.validate().map_err(|e| e.to_string())?;
        Ok(cfg)
    }
}

/// Produces the next-hop summary from a retrieved document.
pub trait Summarizer {
    fn summarize(&self, s_prev: &[TokenId], doc: &Document, question: &[TokenId]) -> Vec<TokenId>;
}

/// Rule-based stand-in for a learned query-focused summarizer.
#[derive(Debug, Clone, Copy, Default)]
pub struct OracleSummarizer;

impl Summarizer for OracleSummarizer {
    fn summarize(&self, s_prev: &[TokenId], doc: &Document, question: &[TokenId]) -> Vec<TokenId> {
        oracle_summarize(s_prev, doc, question)
    }
}

/// Question-document relevance used by [`rerank`]. Must be pure.
pub trait DocScorer {
    fn score(&self, question: &[TokenId], doc: &Document) -> f64;
}

/// Number of distinct question tokens present in the document.
#[derive(Debug, Clone, Copy, Default)]
pub struct LexicalOverlapScorer;

impl DocScorer for LexicalOverlapScorer {
    fn score(&self, question: &[TokenId], doc: &Document) -> f64 {
        let doc_tokens: HashSet<TokenId> = doc.tokens().into_iter().collect();
        let q: HashSet<&TokenId> = question.iter().collect();
        q.into_iter().filter(|t| doc_tokens.contains(t)).count() as f64
    }
}

/// `q ++ s_prev`.
pub fn reformulate(question: &[TokenId], s_prev: &[TokenId]) -> Vec<TokenId> {
    let mut out = Vec::with_capacity(question.len() + s_prev.len());
    out.extend_from_slice(question);
    out.extend_from_slice(s_prev);
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SequenceCandidate {
    pub doc_ids: Vec<DocId>,
    /// Temperature-scaled similarity per hop.
    pub hop_scores: Vec<f64>,
    pub total_score: f64,
    /// Summaries `s_1 .. s_{L-1}` used to build later-hop queries.
    pub summary_trace: Vec<Vec<TokenId>>,
    /// The same document appears twice in the chain.
    pub repeated: bool,
}

/// Descending total score, then lexicographically smaller chain first.
pub fn sequence_order(a: &SequenceCandidate, b: &SequenceCandidate) -> Ordering {
    (b.total_score + 0.0)
        .total_cmp(&(a.total_score + 0.0))
        .then_with(|| a.doc_ids.cmp(&b.doc_ids))
}

/// Inputs for one query of [`beam_retrieve`].
#[derive(Debug, Clone, Copy)]
pub struct BeamQuery<'a> {
    pub question: &'a [TokenId],
    /// Gold `s_1`, consulted only in gold-summary mode.
    pub gold_first_summary: Option<&'a [TokenId]>,
}

/// Retrieve up to `b1 * b2` two-hop chains ranked by summed hop scores.
pub fn beam_retrieve(
    query: BeamQuery<'_>,
    corpus: &Corpus,
    index: &FlatIndex,
    encoder: &EncoderParams,
    summarizer: &dyn Summarizer,
    cfg: &BeamConfig,
    temperature: f64,
) -> Result<Vec<SequenceCandidate>, RetrieveError> {
    cfg.validate()?;
    if index.dim() != encoder.out_dim() {
        return Err(RetrieveError::Mismatch(format!(
            "index width {} vs encoder output {}",
            index.dim(),
            encoder.out_dim()
        )));
    }
    if cfg.gold_summaries && query.gold_first_summary.is_none() {
        return Err(RetrieveError::MissingGoldSummary);
    }
    let q1 = encoder.encode(Role::Query, query.question)?;
    let mut out = Vec::with_capacity(cfg.b1 * cfg.b2);
    for first in index.search(&q1.vec, cfg.b1) {
        let s1 = match (cfg.gold_summaries, query.gold_first_summary) {
            (true, Some(gold)) => gold.to_vec(),
            _ => {
                let doc = corpus
                    .doc(first.doc_id)
                    .ok_or_else(|| RetrieveError::Mismatch(format!("index holds unknown doc {}", first.doc_id)))?;
                summarizer.summarize(&[], doc, query.question)
            }
        };
        let q2 = encoder.encode(Role::Query, &reformulate(query.question, &s1))?;
        let h1 = first.score / temperature;
        for second in index.search(&q2.vec, cfg.b2) {
            let h2 = second.score / temperature;
            out.push(SequenceCandidate {
                doc_ids: vec![first.doc_id, second.doc_id],
                hop_scores: vec![h1, h2],
                total_score: h1 + h2,
                summary_trace: vec![s1.clone()],
                repeated: first.doc_id == second.doc_id,
            });
        }
    }
    out.sort_by(sequence_order);
    Ok(out)
}

/// `log(sigmoid(x))` without overflow.
pub fn log_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        -(-x).exp().ln_1p()
    } else {
        x - x.exp().ln_1p()
    }
}

/// Reorder chains by `sum_t log sigmoid(score(q, d_t))`, keeping the
/// incoming order among ties.
pub fn rerank(
    candidates: Vec<SequenceCandidate>,
    question: &[TokenId],
    corpus: &Corpus,
    scorer: &dyn DocScorer,
) -> Vec<SequenceCandidate> {
    let mut scored: Vec<(f64, SequenceCandidate)> = candidates
        .into_iter()
        .map(|c| {
            let s = c
                .doc_ids
                .iter()
                .filter_map(|&d| corpus.doc(d))
                .map(|d| log_sigmoid(scorer.score(question, d)))
                .sum();
            (s, c)
        })
        .collect();
    // stable sort keeps retrieval order as the final tie-break
    scored.sort_by(|a, b| (b.0 + 0.0).total_cmp(&(a.0 + 0.0)));
    scored.into_iter().map(|(_, c)| c).collect()
}
