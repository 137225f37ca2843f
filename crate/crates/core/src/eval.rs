//! Retrieval metrics over ranked chains: Recall@K, EM@K and per-hop recall.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::corpus::{DocId, HOPS};

/// A ranked list of chains for one query, best first.
pub type Ranking = Vec<Vec<DocId>>;

pub const DEFAULT_K_LIST: [usize; 4] = [2, 20, 50, 100];

/// Number of top chains considered at `K`: `floor(K / L)`.
pub fn cutoff(k: usize, hops: usize) -> usize {
    k / hops.max(1)
}

fn mean_percent<F>(rankings: &[Ranking], golds: &[Vec<DocId>], k: usize, hops: usize, hit: F) -> f64
where
    F: Fn(&[DocId], &[DocId]) -> bool,
{
    assert_eq!(rankings.len(), golds.len(), "one gold chain per ranking");
    if rankings.is_empty() {
        return 0.0;
    }
    let c = cutoff(k, hops);
    assert!(c >= 1, "K={k} gives an empty cutoff for L={hops}");
    let mut hits = 0usize;
    for (i, (ranked, gold)) in rankings.iter().zip(golds).enumerate() {
        if ranked.is_empty() {
            log::warn!("query {i} has an empty ranked list; scoring it as a miss");
            continue;
        }
        if ranked.iter().take(c).any(|chain| hit(chain, gold)) {
            hits += 1;
        }
    }
    100.0 * hits as f64 / rankings.len() as f64
}

/// Percentage of queries whose top `floor(K/L)` chains include the gold
/// chain as an ordered tuple.
pub fn em_at_k(rankings: &[Ranking], golds: &[Vec<DocId>], k: usize, hops: usize) -> f64 {
    mean_percent(rankings, golds, k, hops, |chain, gold| chain == gold)
}

/// Percentage of queries whose top `floor(K/L)` chains share at least one
/// document with the gold chain.
pub fn recall_at_k(rankings: &[Ranking], golds: &[Vec<DocId>], k: usize, hops: usize) -> f64 {
    mean_percent(rankings, golds, k, hops, |chain, gold| {
        chain.iter().any(|d| gold.contains(d))
    })
}

/// For each hop `t`, the percentage of queries where some top-`cutoff`
/// chain has the gold document in position `t`.
pub fn per_hop_recall(rankings: &[Ranking], golds: &[Vec<DocId>], cutoff: usize) -> Vec<f64> {
    assert_eq!(rankings.len(), golds.len(), "one gold chain per ranking");
    assert!(cutoff >= 1, "cutoff must be >= 1");
    let hops = golds.iter().map(Vec::len).max().unwrap_or(HOPS);
    if rankings.is_empty() {
        return vec![0.0; hops];
    }
    (0..hops)
        .map(|t| {
            let hits = rankings
                .iter()
                .zip(golds)
                .filter(|(ranked, gold)| {
                    ranked
                        .iter()
                        .take(cutoff)
                        .any(|chain| chain.get(t).is_some() && chain.get(t) == gold.get(t))
                })
                .count();
            100.0 * hits as f64 / rankings.len() as f64
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KMetrics {
    pub k: usize,
    pub recall: f64,
    pub em: f64,
    /// Per-hop recall at the same `floor(K/L)` cutoff.
    pub hop_recall: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub queries: usize,
    pub empty_rankings: usize,
    pub by_k: Vec<KMetrics>,
}

impl MetricReport {
    pub fn compute(rankings: &[Ranking], golds: &[Vec<DocId>], k_list: &[usize]) -> Self {
        let by_k = k_list
            .iter()
            .map(|&k| KMetrics {
                k,
                recall: recall_at_k(rankings, golds, k, HOPS),
                em: em_at_k(rankings, golds, k, HOPS),
                hop_recall: per_hop_recall(rankings, golds, cutoff(k, HOPS)),
            })
            .collect();
        Self {
            queries: rankings.len(),
            empty_rankings: rankings.iter().filter(|r| r.is_empty()).count(),
            by_k,
        }
    }

    pub fn get(&self, k: usize) -> Option<&KMetrics> {
        self.by_k.iter().find(|m| m.k == k)
    }

    /// Flat `(metric, K, value)` rows.
    pub fn rows(&self) -> Vec<(String, usize, f64)> {
        let mut rows = Vec::new();
        for m in &self.by_k {
            rows.push(("recall".to_string(), m.k, m.recall));
            rows.push(("em".to_string(), m.k, m.em));
            for (t, r) in m.hop_recall.iter().enumerate() {
                rows.push((format!("hop{}_recall", t + 1), m.k, *r));
            }
        }
        rows
    }

    pub fn write_csv<W: std::io::Write>(&self, out: W) -> csv::Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["metric", "K", "value"])?;
        for (metric, k, v) in self.rows() {
            w.write_record([metric, k.to_string(), format!("{v:.4}")])?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn save_csv(&self, path: &std::path::Path) -> csv::Result<()> {
        self.write_csv(std::fs::File::create(path)?)
    }
}

impl fmt::Display for MetricReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "queries: {}", self.queries)?;
        writeln!(f, "{:>6} {:>9} {:>9} {:>9} {:>9}", "K", "Recall", "EM", "hop1", "hop2")?;
        for m in &self.by_k {
            let hop = |t: usize| m.hop_recall.get(t).copied().unwrap_or(f64::NAN);
            writeln!(
                f,
                "{:>6} {:>9.2} {:>9.2} {:>9.2} {:>9.2}",
                m.k,
                m.recall,
                m.em,
                hop(0),
                hop(1)
            )?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    const G: [DocId; 2] = [1, 2];

    fn gold(n: usize) -> Vec<Vec<DocId>> {
        vec![G.to_vec(); n]
    }

    #[test]
    fn gold_at_rank_one() {
        let r = vec![vec![G.to_vec(), vec![3, 4]]];
        assert_eq!(em_at_k(&r, &gold(1), 2, 2), 100.0);
        assert_eq!(per_hop_recall(&r, &gold(1), 1), vec![100.0, 100.0]);
    }

    #[test]
    fn cutoff_semantics() {
        let r = vec![vec![vec![3, 4], G.to_vec()]];
        assert_eq!(em_at_k(&r, &gold(1), 2, 2), 0.0);
        assert_eq!(em_at_k(&r, &gold(1), 20, 2), 100.0);
    }

    #[test]
    fn one_hit_one_miss() {
        let r = vec![vec![G.to_vec()], vec![vec![5, 6]]];
        assert_eq!(em_at_k(&r, &gold(2), 2, 2), 50.0);
    }

    #[test]
    fn containment_without_match() {
        let r = vec![vec![vec![2, 9]]];
        assert_eq!(recall_at_k(&r, &gold(1), 2, 2), 100.0);
        assert_eq!(em_at_k(&r, &gold(1), 2, 2), 0.0);
        let none = vec![vec![vec![7, 8], vec![9, 10]]];
        assert_eq!(recall_at_k(&none, &gold(1), 20, 2), 0.0);
    }

    #[test]
    fn reversed_chain_is_not_exact() {
        let r = vec![vec![vec![2, 1]]];
        assert_eq!(recall_at_k(&r, &gold(1), 2, 2), 100.0);
        assert_eq!(em_at_k(&r, &gold(1), 2, 2), 0.0);
        assert_eq!(per_hop_recall(&r, &gold(1), 1), vec![0.0, 0.0]);
    }

    #[test]
    fn first_hop_only() {
        let r = vec![vec![vec![1, 9]]];
        assert_eq!(per_hop_recall(&r, &gold(1), 1), vec![100.0, 0.0]);
    }

    #[test]
    fn three_query_fixture() {
        let golds = vec![vec![1, 2], vec![3, 4], vec![5, 6]];
        let r = vec![
            vec![vec![1, 9], vec![1, 2]],
            vec![vec![8, 4], vec![3, 7]],
            vec![vec![6, 5]],
        ];
        // cutoff 1: q0 hop1; q1 hop2; q2 nothing positional
        assert_eq!(per_hop_recall(&r, &golds, 1), vec![100.0 / 3.0, 100.0 / 3.0]);
        // cutoff 2: q0 both; q1 both
        assert_eq!(per_hop_recall(&r, &golds, 2), vec![200.0 / 3.0, 200.0 / 3.0]);
        assert_eq!(em_at_k(&r, &golds, 2, 2), 0.0);
        assert_eq!(em_at_k(&r, &golds, 4, 2), 100.0 / 3.0);
        assert_eq!(recall_at_k(&r, &golds, 2, 2), 100.0);
    }

    #[test]
    fn empty_ranking_is_a_miss() {
        let r = vec![vec![], vec![G.to_vec()]];
        assert_eq!(em_at_k(&r, &gold(2), 2, 2), 50.0);
        let rep = MetricReport::compute(&r, &gold(2), &DEFAULT_K_LIST);
        assert_eq!(rep.empty_rankings, 1);
        assert_eq!(rep.queries, 2);
    }

    #[test]
    fn csv_layout() {
        let r = vec![vec![G.to_vec()]];
        let rep = MetricReport::compute(&r, &gold(1), &[2]);
        let mut buf = Vec::new();
        rep.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(
            text,
            "metric,K,value\nrecall,2,100.0000\nem,2,100.0000\nhop1_recall,2,100.0000\nhop2_recall,2,100.0000\n"
        );
        assert!(rep.to_string().contains("Recall"));
    }

    fn rankings_strategy() -> impl Strategy<Value = (Vec<Ranking>, Vec<Vec<DocId>>)> {
        let chain = || proptest::collection::vec(0u32..6, 2);
        proptest::collection::vec((proptest::collection::vec(chain(), 0..12), chain()), 1..8)
            .prop_map(|qs| qs.into_iter().unzip())
    }

    proptest! {
        #[test]
        fn em_never_exceeds_recall((r, g) in rankings_strategy()) {
            for k in [2, 4, 10, 20] {
                prop_assert!(em_at_k(&r, &g, k, 2) <= recall_at_k(&r, &g, k, 2));
            }
        }

        #[test]
        fn monotone_in_k((r, g) in rankings_strategy()) {
            let ks = [2, 4, 6, 10, 20, 100];
            for w in ks.windows(2) {
                prop_assert!(em_at_k(&r, &g, w[0], 2) <= em_at_k(&r, &g, w[1], 2));
                prop_assert!(recall_at_k(&r, &g, w[0], 2) <= recall_at_k(&r, &g, w[1], 2));
            }
        }

        #[test]
        fn query_order_is_irrelevant((r, g) in rankings_strategy(), rot in 0usize..8) {
            let n = r.len();
            let rot = rot % n;
            let mut r2 = r.clone();
            let mut g2 = g.clone();
            r2.rotate_left(rot);
            g2.rotate_left(rot);
            prop_assert_eq!(
                MetricReport::compute(&r, &g, &DEFAULT_K_LIST),
                MetricReport::compute(&r2, &g2, &DEFAULT_K_LIST)
            );
        }
    }
}
