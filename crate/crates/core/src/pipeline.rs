//! Glue between a trained encoder and the metrics: index the corpus, run
//! beam retrieval over a split, and score the rankings.

use std::io::{BufRead, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::{Corpus, DocId, QASample};
use crate::encoder::EncoderParams;
use crate::eval::{MetricReport, Ranking};
use crate::index::{FlatIndex, IndexError};
use crate::retriever::{beam_retrieve, BeamConfig, BeamQuery, RetrieveError, SequenceCandidate, Summarizer};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedChain {
    pub doc_ids: Vec<DocId>,
    pub hop_scores: Vec<f64>,
    pub total_score: f64,
}

impl From<&SequenceCandidate> for RankedChain {
    fn from(c: &SequenceCandidate) -> Self {
        Self {
            doc_ids: c.doc_ids.clone(),
            hop_scores: c.hop_scores.clone(),
            total_score: c.total_score,
        }
    }
}

/// One line of `retrieval.jsonl`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalRecord {
    pub sample_id: u32,
    pub ranked: Vec<RankedChain>,
}

#[derive(Debug, thiserror::Error)]
pub enum PipelineError {
    #[error(transparent)]
    Index(#[from] IndexError),
    #[error(transparent)]
    Retrieve(#[from] RetrieveError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("retrieval dump: {0}")]
    Json(#[from] serde_json::Error),
}

/// Beam-retrieve every sample against a prebuilt index.
pub fn retrieve_split(
    samples: &[QASample],
    corpus: &Corpus,
    index: &FlatIndex,
    encoder: &EncoderParams,
    summarizer: &dyn Summarizer,
    beam: &BeamConfig,
    temperature: f64,
) -> Result<Vec<RetrievalRecord>, PipelineError> {
    samples
        .iter()
        .map(|s| {
            let query = BeamQuery {
                question: &s.question,
                gold_first_summary: s.summaries.first().map(Vec::as_slice),
            };
            let ranked = beam_retrieve(query, corpus, index, encoder, summarizer, beam, temperature)?;
            Ok(RetrievalRecord {
                sample_id: s.sample_id,
                ranked: ranked.iter().map(RankedChain::from).collect(),
            })
        })
        .collect()
}

/// Metrics for records aligned with `samples`.
pub fn score_records(records: &[RetrievalRecord], samples: &[QASample], k_list: &[usize]) -> MetricReport {
    let rankings: Vec<Ranking> = records
        .iter()
        .map(|r| r.ranked.iter().map(|c| c.doc_ids.clone()).collect())
        .collect();
    let golds: Vec<Vec<DocId>> = samples.iter().map(|s| s.gold_chain.clone()).collect();
    MetricReport::compute(&rankings, &golds, k_list)
}

/// Index the corpus with `encoder`, retrieve, and score.
pub fn evaluate(
    samples: &[QASample],
    corpus: &Corpus,
    encoder: &EncoderParams,
    summarizer: &dyn Summarizer,
    beam: &BeamConfig,
    temperature: f64,
    k_list: &[usize],
) -> Result<(Vec<RetrievalRecord>, MetricReport), PipelineError> {
    let index = FlatIndex::build(corpus.docs(), encoder)?;
    let records = retrieve_split(samples, corpus, &index, encoder, summarizer, beam, temperature)?;
    let report = score_records(&records, samples, k_list);
    Ok((records, report))
}

pub fn save_records(path: &Path, records: &[RetrievalRecord]) -> Result<(), PipelineError> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    for r in records {
        serde_json::to_writer(&mut out, r)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

pub fn load_records(path: &Path) -> Result<Vec<RetrievalRecord>, PipelineError> {
    let file = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut out = Vec::new();
    for line in file.lines() {
        let line = line?;
        if !line.trim().is_empty() {
            out.push(serde_json::from_str(&line)?);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{generate_world, WorldConfig};
    use crate::retriever::OracleSummarizer;

    #[test]
    fn records_round_trip_and_align() {
        let w = generate_world(&WorldConfig {
            n_entities: 20,
            n_docs: 20,
            n_train: 4,
            n_dev: 3,
            seed: 9,
            ..WorldConfig::default()
        })
        .unwrap();
        let enc = EncoderParams::init(w.corpus.vocab.len(), 8, 8, 2).unwrap();
        let beam = BeamConfig { b1: 3, b2: 4, gold_summaries: false };
        let (records, report) = evaluate(&w.dev, &w.corpus, &enc, &OracleSummarizer, &beam, 0.05, &[2, 100]).unwrap();
        assert_eq!(records.len(), 3);
        assert!(records.iter().all(|r| r.ranked.len() == 12));
        assert_eq!(report.queries, 3);

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("retrieval.jsonl");
        save_records(&path, &records).unwrap();
        assert_eq!(load_records(&path).unwrap(), records);
        assert_eq!(score_records(&load_records(&path).unwrap(), &w.dev, &[2, 100]), report);
    }
}
