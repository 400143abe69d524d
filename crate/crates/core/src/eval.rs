//! Ranking metrics over TREC-style runs and qrels.
//!
//! Conventions follow trec_eval: linear-gain DCG, passages with grade >= 1
//! count as relevant, and queries without any relevant passage are skipped.

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::io::Write;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::corpus::Qrels;
use crate::error::{Error, Result};
use crate::index::RankedList;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum MetricSpec {
    /// Reciprocal rank; `None` reads the whole list.
    Mrr { cutoff: Option<usize> },
    Ndcg { k: usize },
    Recall { k: usize },
}

impl MetricSpec {
    pub const MRR: MetricSpec = MetricSpec::Mrr { cutoff: None };

    /// The four reported metrics: MRR, NDCG@3, Recall@10, Recall@100.
    pub fn standard() -> Vec<MetricSpec> {
        vec![
            MetricSpec::MRR,
            MetricSpec::Ndcg { k: 3 },
            MetricSpec::Recall { k: 10 },
            MetricSpec::Recall { k: 100 },
        ]
    }

    /// Per-query value, or `None` when the query has no relevant passage.
    pub fn score<T>(&self, list: &RankedList<T>, qrels: &Qrels) -> Option<f64> {
        match *self {
            MetricSpec::Mrr { cutoff } => reciprocal_rank(list, qrels, cutoff),
            MetricSpec::Ndcg { k } => ndcg_at(list, qrels, k),
            MetricSpec::Recall { k } => recall_at(list, qrels, k),
        }
    }
}

impl fmt::Display for MetricSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            MetricSpec::Mrr { cutoff: None } => write!(f, "MRR"),
            MetricSpec::Mrr { cutoff: Some(k) } => write!(f, "MRR@{k}"),
            MetricSpec::Ndcg { k } => write!(f, "NDCG@{k}"),
            MetricSpec::Recall { k } => write!(f, "Recall@{k}"),
        }
    }
}

impl FromStr for MetricSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let lower = s.trim().to_ascii_lowercase();
        let (name, cutoff) = match lower.split_once('@') {
            Some((n, k)) => {
                let k: usize = k
                    .parse()
                    .map_err(|_| Error::Config(format!("bad metric cutoff in {s:?}")))?;
                if k == 0 {
                    return Err(Error::Config(format!("metric cutoff must be >= 1 in {s:?}")));
                }
                (n.to_string(), Some(k))
            }
            None => (lower.clone(), None),
        };
        match (name.as_str(), cutoff) {
            ("mrr", c) => Ok(MetricSpec::Mrr { cutoff: c }),
            ("ndcg", Some(k)) => Ok(MetricSpec::Ndcg { k }),
            ("recall" | "r", Some(k)) => Ok(MetricSpec::Recall { k }),
            _ => Err(Error::Config(format!(
                "unknown metric {s:?} (expected mrr, mrr@k, ndcg@k or recall@k)"
            ))),
        }
    }
}

impl TryFrom<String> for MetricSpec {
    type Error = Error;
    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<MetricSpec> for String {
    fn from(m: MetricSpec) -> String {
        m.to_string().to_ascii_lowercase()
    }
}

fn judged<'a>(qrels: &'a Qrels, query_id: &str) -> Option<&'a BTreeMap<String, u32>> {
    qrels.get(query_id).filter(|docs| docs.values().any(|&g| g >= 1))
}

fn grade(docs: &BTreeMap<String, u32>, id: &str) -> u32 {
    docs.get(id).copied().unwrap_or(0)
}

pub fn reciprocal_rank<T>(list: &RankedList<T>, qrels: &Qrels, cutoff: Option<usize>) -> Option<f64> {
    let docs = judged(qrels, &list.query_id)?;
    let depth = cutoff.unwrap_or(list.hits.len());
    Some(
        list.ids()
            .take(depth)
            .position(|id| grade(docs, id) >= 1)
            .map_or(0.0, |p| 1.0 / (p + 1) as f64),
    )
}

pub fn ndcg_at<T>(list: &RankedList<T>, qrels: &Qrels, k: usize) -> Option<f64> {
    let docs = judged(qrels, &list.query_id)?;
    let discount = |i: usize| 1.0 / ((i + 2) as f64).log2();
    let dcg: f64 = list
        .ids()
        .take(k)
        .enumerate()
        .map(|(i, id)| f64::from(grade(docs, id)) * discount(i))
        .sum();
    let mut ideal: Vec<u32> = docs.values().copied().filter(|&g| g > 0).collect();
    ideal.sort_unstable_by(|a, b| b.cmp(a));
    let idcg: f64 = ideal.iter().take(k).enumerate().map(|(i, &g)| f64::from(g) * discount(i)).sum();
    Some(dcg / idcg)
}

pub fn recall_at<T>(list: &RankedList<T>, qrels: &Qrels, k: usize) -> Option<f64> {
    let docs = judged(qrels, &list.query_id)?;
    let relevant = docs.values().filter(|&&g| g >= 1).count();
    let found = list.ids().take(k).filter(|id| grade(docs, id) >= 1).count();
    Some(found as f64 / relevant as f64)
}

/// Per-query values and macro averages for one run.
#[derive(Debug, Clone, PartialEq)]
pub struct Report {
    pub metrics: Vec<MetricSpec>,
    /// Query id -> one value per metric, ascending query id.
    pub per_query: BTreeMap<String, Vec<f64>>,
    pub means: Vec<f64>,
    /// Run queries with no relevant passage in the qrels.
    pub unjudged: Vec<String>,
}

impl Report {
    pub fn mean(&self, metric: MetricSpec) -> Option<f64> {
        self.metrics.iter().position(|&m| m == metric).map(|i| self.means[i])
    }

    /// Tab-separated `query_id metric value` lines.
    pub fn write_per_query<W: Write>(&self, mut w: W) -> Result<()> {
        for (qid, values) in &self.per_query {
            for (m, v) in self.metrics.iter().zip(values) {
                writeln!(w, "{qid}\t{m}\t{v:.6}").map_err(|e| Error::io("writing report", e))?;
            }
        }
        w.flush().map_err(|e| Error::io("writing report", e))
    }
}

pub fn evaluate<T>(run: &[RankedList<T>], qrels: &Qrels, metrics: &[MetricSpec]) -> Result<Report> {
    let mut seen = HashSet::new();
    let mut lists: Vec<&RankedList<T>> = Vec::with_capacity(run.len());
    for list in run {
        if !seen.insert(list.query_id.as_str()) {
            return Err(Error::Validation(format!("query {} appears twice in the run", list.query_id)));
        }
        lists.push(list);
    }
    lists.sort_by(|a, b| a.query_id.cmp(&b.query_id));

    let mut per_query = BTreeMap::new();
    let mut unjudged = Vec::new();
    for list in lists {
        if judged(qrels, &list.query_id).is_none() {
            unjudged.push(list.query_id.clone());
            continue;
        }
        let values = metrics
            .iter()
            .map(|m| m.score(list, qrels).expect("judged query"))
            .collect();
        per_query.insert(list.query_id.clone(), values);
    }
    if per_query.is_empty() {
        return Err(Error::Validation("no run query has relevance judgments".into()));
    }
    let n = per_query.len() as f64;
    let means = (0..metrics.len())
        .map(|i| per_query.values().map(|v: &Vec<f64>| v[i]).sum::<f64>() / n)
        .collect();
    Ok(Report {
        metrics: metrics.to_vec(),
        per_query,
        means,
        unjudged,
    })
}

/// Side-by-side table of macro averages, one column per named report.
pub fn format_table(reports: &[(&str, &Report)]) -> String {
    let mut metrics: Vec<MetricSpec> = Vec::new();
    for (_, r) in reports {
        for m in &r.metrics {
            if !metrics.contains(m) {
                metrics.push(*m);
            }
        }
    }
    let width = reports.iter().map(|(n, _)| n.len()).max().unwrap_or(0).max(10);
    let mut out = format!("{:<12}", "metric");
    for (name, _) in reports {
        out.push_str(&format!(" {name:>width$}"));
    }
    out.push('\n');
    for m in metrics {
        out.push_str(&format!("{:<12}", m.to_string()));
        for (_, r) in reports {
            let cell = r.mean(m).map_or("-".to_string(), |v| format!("{v:.4}"));
            out.push_str(&format!(" {cell:>width$}"));
        }
        out.push('\n');
    }
    out.push_str(&format!("{:<12}", "queries"));
    for (_, r) in reports {
        out.push_str(&format!(" {:>width$}", r.per_query.len()));
    }
    out.push('\n');
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::index::Hit;
    use proptest::prelude::*;

    fn list(qid: &str, ids: &[&str]) -> RankedList<f64> {
        RankedList {
            query_id: qid.into(),
            hits: ids
                .iter()
                .enumerate()
                .map(|(i, id)| Hit { passage_id: id.to_string(), score: -(i as f64) })
                .collect(),
        }
    }

    fn qrels(entries: &[(&str, &[&str])]) -> Qrels {
        entries
            .iter()
            .map(|(q, docs)| (q.to_string(), docs.iter().map(|d| (d.to_string(), 1)).collect()))
            .collect()
    }

    fn ranked_with_gold_at(rank: usize, len: usize) -> RankedList<f64> {
        let ids: Vec<String> = (1..=len).map(|i| if i == rank { "g".into() } else { format!("x{i}") }).collect();
        let refs: Vec<&str> = ids.iter().map(String::as_str).collect();
        list("q", &refs)
    }

    #[test]
    fn reciprocal_rank_cases() {
        let q = qrels(&[("q", &["g"])]);
        assert_eq!(reciprocal_rank(&ranked_with_gold_at(1, 5), &q, None), Some(1.0));
        assert_eq!(reciprocal_rank(&ranked_with_gold_at(4, 5), &q, None), Some(0.25));
        assert_eq!(reciprocal_rank(&ranked_with_gold_at(4, 5), &q, Some(3)), Some(0.0));
        assert_eq!(reciprocal_rank(&ranked_with_gold_at(0, 5), &q, None), Some(0.0));
    }

    #[test]
    fn unjudged_query_is_skipped_not_zero() {
        let q = qrels(&[("other", &["g"])]);
        assert_eq!(reciprocal_rank(&ranked_with_gold_at(1, 3), &q, None), None);
        assert_eq!(ndcg_at(&ranked_with_gold_at(1, 3), &q, 3), None);
        let zero_grade: Qrels = [("q".to_string(), [("g".to_string(), 0)].into_iter().collect())].into_iter().collect();
        assert_eq!(recall_at(&ranked_with_gold_at(1, 3), &zero_grade, 3), None);
    }

    #[test]
    fn ndcg_single_gold() {
        let q = qrels(&[("q", &["g"])]);
        assert_eq!(ndcg_at(&ranked_with_gold_at(1, 5), &q, 3), Some(1.0));
        // 1 / log2(3)
        assert!((ndcg_at(&ranked_with_gold_at(2, 5), &q, 3).unwrap() - 0.630_929_753_571_457_4).abs() < 1e-15);
        assert_eq!(ndcg_at(&ranked_with_gold_at(3, 5), &q, 3), Some(0.5));
        assert_eq!(ndcg_at(&ranked_with_gold_at(4, 5), &q, 3), Some(0.0));
    }

    #[test]
    fn recall_cases() {
        let q = qrels(&[("q", &["g"])]);
        assert_eq!(recall_at(&ranked_with_gold_at(10, 20), &q, 10), Some(1.0));
        assert_eq!(recall_at(&ranked_with_gold_at(11, 20), &q, 10), Some(0.0));
        let two = qrels(&[("q", &["g", "h"])]);
        assert_eq!(recall_at(&ranked_with_gold_at(3, 20), &two, 10), Some(0.5));
    }

    #[test]
    fn evaluate_averages_over_judged_queries() {
        let run = vec![list("b", &["x", "g"]), list("a", &["g", "x"]), list("c", &["g"])];
        let q = qrels(&[("a", &["g"]), ("b", &["g"])]);
        let r = evaluate(&run, &q, &[MetricSpec::MRR]).unwrap();
        assert_eq!(r.mean(MetricSpec::MRR), Some(0.75));
        assert_eq!(r.unjudged, ["c"]);
        assert_eq!(r.per_query.keys().collect::<Vec<_>>(), ["a", "b"]);
    }

    #[test]
    fn evaluate_empty_intersection_is_error() {
        let run = vec![list("z", &["g"])];
        assert!(evaluate(&run, &qrels(&[("a", &["g"])]), &[MetricSpec::MRR]).is_err());
    }

    #[test]
    fn metric_names_parse() {
        assert_eq!("mrr".parse::<MetricSpec>().unwrap(), MetricSpec::MRR);
        assert_eq!("NDCG@3".parse::<MetricSpec>().unwrap(), MetricSpec::Ndcg { k: 3 });
        assert_eq!("recall@100".parse::<MetricSpec>().unwrap(), MetricSpec::Recall { k: 100 });
        assert!("ndcg".parse::<MetricSpec>().is_err());
        assert!("recall@0".parse::<MetricSpec>().is_err());
        for m in MetricSpec::standard() {
            assert_eq!(String::from(m).parse::<MetricSpec>().unwrap(), m);
        }
    }

    proptest! {
        #[test]
        fn metric_properties(ids in proptest::collection::vec(0u8..30, 1..40), gold in proptest::collection::btree_set(0u8..30, 1..4)) {
            let mut seen = HashSet::new();
            let ids: Vec<String> = ids.into_iter().filter(|i| seen.insert(*i)).map(|i| format!("d{i}")).collect();
            let refs: Vec<&str> = ids.iter().map(String::as_str).collect();
            let l = list("q", &refs);
            let gold: Vec<String> = gold.into_iter().map(|g| format!("d{g}")).collect();
            let grefs: Vec<&str> = gold.iter().map(String::as_str).collect();
            let q = qrels(&[("q", &grefs)]);
            let mut prev_recall = 0.0;
            for k in 1..45 {
                let r = recall_at(&l, &q, k).unwrap();
                let n = ndcg_at(&l, &q, k).unwrap();
                prop_assert!((0.0..=1.0).contains(&r));
                prop_assert!((0.0..=1.0 + 1e-12).contains(&n));
                prop_assert!(r >= prev_recall);
                prev_recall = r;
            }
            let rr = reciprocal_rank(&l, &q, None).unwrap();
            prop_assert_eq!(rr == 1.0, gold.contains(&ids[0]));
            if gold.len() == 1 {
                let n3 = ndcg_at(&l, &q, 3).unwrap();
                let allowed = [0.0, 0.5, 1.0 / 3f64.log2(), 1.0];
                prop_assert!(allowed.contains(&n3));
                // With one relevant passage NDCG@k only grows with k.
                let mut prev = 0.0;
                for k in 1..45 {
                    let n = ndcg_at(&l, &q, k).unwrap();
                    prop_assert!(n >= prev);
                    prev = n;
                }
            }
        }

        #[test]
        fn metrics_ignore_score_values(scale in 0.1f64..10.0, shift in -5.0f64..5.0) {
            let base = list("q", &["a", "b", "g", "c"]);
            let moved = RankedList {
                query_id: "q".into(),
                hits: base.hits.iter().map(|h| Hit { passage_id: h.passage_id.clone(), score: (h.score * scale + shift).exp() }).collect(),
            };
            let q = qrels(&[("q", &["g"])]);
            for m in MetricSpec::standard() {
                prop_assert_eq!(m.score(&base, &q), m.score(&moved, &q));
            }
        }
    }
}
