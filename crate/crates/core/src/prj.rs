//! Pseudo relevance judgments (PRJ) of historical turns.
//!
//! A historical turn `(q_i, p_i)` is relevant to the current query `q_n` when
//! retrieving with the expanded text `q_n q_i p_i` scores strictly better under
//! the metric than retrieving with `q_n` alone. When gold passages of past
//! turns are unavailable, `p_i` is replaced by the concatenated top-k passages
//! retrieved for `q_i`.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::io::{BufRead, Write};
use std::path::Path;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{query_id, Collection, Qrels, Session, Turn};
use crate::encode::QueryEncoderParams;
use crate::error::{Error, Result};
use crate::eval::MetricSpec;
use crate::index::{DenseIndex, RankedList};
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Judgment {
    Relevant,
    Irrelevant,
}

impl Judgment {
    /// Relevant iff the expanded query scores strictly higher.
    pub fn from_scores(score_raw: f64, score_reform: f64) -> Self {
        if score_reform > score_raw {
            Judgment::Relevant
        } else {
            Judgment::Irrelevant
        }
    }

    pub fn is_relevant(self) -> bool {
        self == Judgment::Relevant
    }
}

impl fmt::Display for Judgment {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Judgment::Relevant => "relevant",
            Judgment::Irrelevant => "irrelevant",
        })
    }
}

/// Where the historical passage text comes from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum PrjMode {
    Gold,
    /// Top-k retrieved passages for the historical query stand in for its gold.
    Substituted { k: usize },
}

impl fmt::Display for PrjMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            PrjMode::Gold => f.write_str("gold"),
            PrjMode::Substituted { k } => write!(f, "substituted({k})"),
        }
    }
}

impl FromStr for PrjMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        if s == "gold" {
            return Ok(PrjMode::Gold);
        }
        s.strip_prefix("substituted(")
            .and_then(|r| r.strip_suffix(')'))
            .and_then(|k| k.parse().ok())
            .filter(|&k| k >= 1)
            .map(|k| PrjMode::Substituted { k })
            .ok_or_else(|| Error::Config(format!("bad PRJ mode {s:?} (expected gold or substituted(k))")))
    }
}

impl TryFrom<String> for PrjMode {
    type Error = Error;
    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<PrjMode> for String {
    fn from(m: PrjMode) -> String {
        m.to_string()
    }
}

/// Order of the historical query and passage in the expanded PRJ query.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConcatOrder {
    /// `q_n q_i p_i`
    #[default]
    QueryFirst,
    /// `q_n p_i q_i`
    PassageFirst,
}

impl ConcatOrder {
    pub fn expand(self, current: &str, hist_query: &str, hist_passage: &str) -> String {
        match self {
            ConcatOrder::QueryFirst => format!("{current} {hist_query} {hist_passage}"),
            ConcatOrder::PassageFirst => format!("{current} {hist_passage} {hist_query}"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PrjSettings {
    pub metric: MetricSpec,
    pub depth: usize,
    pub mode: PrjMode,
    pub order: ConcatOrder,
}

impl Default for PrjSettings {
    fn default() -> Self {
        Self {
            metric: MetricSpec::MRR,
            depth: crate::index::DEFAULT_DEPTH,
            mode: PrjMode::Gold,
            order: ConcatOrder::QueryFirst,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PrjLabel {
    pub session_id: String,
    /// Current turn `n`.
    pub current: usize,
    /// Historical turn `i < n`.
    pub historical: usize,
    pub judgment: Judgment,
    pub score_raw: f64,
    pub score_reform: f64,
    pub metric: MetricSpec,
    pub mode: PrjMode,
}

/// Dense retriever: a query encoder over an index.
#[derive(Clone, Copy)]
pub struct Retriever<'a, T> {
    pub index: &'a DenseIndex<T>,
    pub encoder: &'a QueryEncoderParams<T>,
}

impl<'a, T: Scalar> Retriever<'a, T> {
    pub fn new(index: &'a DenseIndex<T>, encoder: &'a QueryEncoderParams<T>) -> Self {
        Self { index, encoder }
    }

    pub fn retrieve(&self, query_id: &str, text: &str, depth: usize) -> Result<RankedList<T>> {
        self.index.search(query_id, &self.encoder.encode(text), depth)
    }
}

/// Text standing in for the gold passage of a historical turn.
pub trait HistoryPassages: Sync {
    /// `None` when the turn has no usable passage.
    fn passage_text(&self, session_id: &str, turn: &Turn) -> Option<String>;
}

/// Gold passages looked up in the collection.
pub struct GoldPassages<'a> {
    pub collection: &'a Collection,
}

impl HistoryPassages for GoldPassages<'_> {
    fn passage_text(&self, _session_id: &str, turn: &Turn) -> Option<String> {
        turn.gold_passage_id
            .as_ref()
            .and_then(|id| self.collection.get(id))
            .map(|p| p.text.clone())
    }
}

/// Precomputed pseudo-gold texts keyed by `(session id, turn index)`.
#[derive(Debug, Clone, Default)]
pub struct PseudoGoldPassages {
    texts: HashMap<(String, usize), String>,
}

impl PseudoGoldPassages {
    pub fn compute<T: Scalar>(
        sessions: &[Session],
        retriever: Retriever<'_, T>,
        collection: &Collection,
        k: usize,
    ) -> Result<Self> {
        let jobs: Vec<(&Session, &Turn)> = sessions.iter().flat_map(|s| s.turns.iter().map(move |t| (s, t))).collect();
        let texts = jobs
            .par_iter()
            .map(|(s, t)| {
                pseudo_gold(t, retriever, collection, k).map(|text| ((s.session_id.clone(), t.turn_index), text))
            })
            .collect::<Result<HashMap<_, _>>>()?;
        Ok(Self { texts })
    }
}

impl HistoryPassages for PseudoGoldPassages {
    fn passage_text(&self, session_id: &str, turn: &Turn) -> Option<String> {
        self.texts.get(&(session_id.to_string(), turn.turn_index)).cloned()
    }
}

/// Top-k passages retrieved for the turn's raw query, joined in rank order.
pub fn pseudo_gold<T: Scalar>(turn: &Turn, retriever: Retriever<'_, T>, collection: &Collection, k: usize) -> Result<String> {
    if retriever.index.is_empty() {
        return Err(Error::Validation("pseudo-gold retrieval over an empty collection".into()));
    }
    let list = retriever.retrieve("pseudo", &turn.query_text, k)?;
    let texts = list
        .ids()
        .map(|id| {
            collection
                .get(id)
                .map(|p| p.text.as_str())
                .ok_or_else(|| Error::Validation(format!("indexed passage {id} missing from collection")))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(texts.join(" "))
}

/// Everything a judgment needs.
pub struct PrjJudge<'a, T> {
    pub retriever: Retriever<'a, T>,
    pub qrels: &'a Qrels,
    pub passages: &'a dyn HistoryPassages,
    pub settings: PrjSettings,
}

impl<T: Scalar> PrjJudge<'_, T> {
    fn score(&self, qid: &str, text: &str) -> Result<Option<f64>> {
        let list = self.retriever.retrieve(qid, text, self.settings.depth)?;
        Ok(self.settings.metric.score(&list, self.qrels))
    }

    fn label(&self, session_id: &str, current: &Turn, hist: &Turn, score_raw: f64) -> Result<PrjLabel> {
        if hist.turn_index >= current.turn_index {
            return Err(Error::Validation(format!(
                "session {session_id}: historical turn {} does not precede turn {}",
                hist.turn_index, current.turn_index
            )));
        }
        let passage = self.passages.passage_text(session_id, hist).ok_or_else(|| {
            Error::Validation(format!(
                "session {session_id} turn {} has no gold passage; use substitution mode",
                hist.turn_index
            ))
        })?;
        let expanded = self.settings.order.expand(&current.query_text, &hist.query_text, &passage);
        let qid = query_id(session_id, current.turn_index);
        let score_reform = self.score(&qid, &expanded)?.expect("judged query stays judged");
        Ok(PrjLabel {
            session_id: session_id.to_string(),
            current: current.turn_index,
            historical: hist.turn_index,
            judgment: Judgment::from_scores(score_raw, score_reform),
            score_raw,
            score_reform,
            metric: self.settings.metric,
            mode: self.settings.mode,
        })
    }

    fn raw_score(&self, session_id: &str, current: &Turn) -> Result<Option<f64>> {
        self.score(&query_id(session_id, current.turn_index), &current.query_text)
    }

    /// Judges one historical turn against the current turn.
    pub fn judge_turn(&self, session_id: &str, current: &Turn, hist: &Turn) -> Result<PrjLabel> {
        let raw = self.raw_score(session_id, current)?.ok_or_else(|| {
            Error::Validation(format!(
                "query {} has no relevance judgments",
                query_id(session_id, current.turn_index)
            ))
        })?;
        self.label(session_id, current, hist, raw)
    }

    /// Judges every historical turn of every judged turn. Turns without qrels
    /// are omitted, as are historical turns without a usable passage.
    pub fn judge_all(&self, sessions: &[Session]) -> Result<PrjTable> {
        let jobs: Vec<(&Session, &Turn)> =
            sessions.iter().flat_map(|s| s.turns.iter().skip(1).map(move |t| (s, t))).collect();
        let results: Vec<Option<((String, usize), Vec<PrjLabel>)>> = jobs
            .par_iter()
            .map(|(s, cur)| {
                let Some(raw) = self.raw_score(&s.session_id, cur)? else {
                    log::info!("PRJ: {} has no qrels; skipped", query_id(&s.session_id, cur.turn_index));
                    return Ok(None);
                };
                let mut labels = Vec::with_capacity(cur.turn_index - 1);
                for hist in s.history(cur.turn_index) {
                    if self.passages.passage_text(&s.session_id, hist).is_none() {
                        log::debug!("PRJ: {} turn {} has no passage; skipped", s.session_id, hist.turn_index);
                        continue;
                    }
                    labels.push(self.label(&s.session_id, cur, hist, raw)?);
                }
                Ok(Some(((s.session_id.clone(), cur.turn_index), labels)))
            })
            .collect::<Result<_>>()?;
        Ok(PrjTable {
            entries: results.into_iter().flatten().collect(),
        })
    }
}

/// Labels per `(session id, current turn)`, each list ordered by historical turn.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct PrjTable {
    pub entries: BTreeMap<(String, usize), Vec<PrjLabel>>,
}

impl PrjTable {
    pub fn labels(&self, session_id: &str, n: usize) -> Option<&[PrjLabel]> {
        self.entries.get(&(session_id.to_string(), n)).map(Vec::as_slice)
    }

    pub fn label_count(&self) -> usize {
        self.entries.values().map(Vec::len).sum()
    }

    pub fn iter(&self) -> impl Iterator<Item = &PrjLabel> {
        self.entries.values().flatten()
    }

    /// Copy with every label marked irrelevant.
    pub fn all_irrelevant(&self) -> Self {
        let mut t = self.clone();
        t.entries.values_mut().flatten().for_each(|l| l.judgment = Judgment::Irrelevant);
        t
    }

    /// Tab-separated: `session_id n i label score_raw score_reform metric mode`.
    pub fn write<W: Write>(&self, mut w: W) -> Result<()> {
        for l in self.iter() {
            writeln!(
                w,
                "{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}",
                l.session_id,
                l.current,
                l.historical,
                l.judgment,
                l.score_raw,
                l.score_reform,
                String::from(l.metric),
                l.mode
            )
            .map_err(|e| Error::io("writing PRJ table", e))?;
        }
        w.flush().map_err(|e| Error::io("writing PRJ table", e))
    }

    /// Parses a table; every label must agree with its two scores.
    pub fn read<R: BufRead>(r: R, path: &Path) -> Result<Self> {
        let mut table = PrjTable::default();
        for (i, line) in r.lines().enumerate() {
            let n = i + 1;
            let line = line.map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
            if line.is_empty() {
                continue;
            }
            let f: Vec<&str> = line.split('\t').collect();
            if f.len() != 8 {
                return Err(Error::parse(path, n, format!("expected 8 fields, found {}", f.len())));
            }
            let int = |s: &str| s.parse::<usize>().map_err(|_| Error::parse(path, n, format!("bad integer {s:?}")));
            let num = |s: &str| s.parse::<f64>().map_err(|_| Error::parse(path, n, format!("bad score {s:?}")));
            let judgment = match f[3] {
                "relevant" => Judgment::Relevant,
                "irrelevant" => Judgment::Irrelevant,
                other => return Err(Error::parse(path, n, format!("bad label {other:?}"))),
            };
            let label = PrjLabel {
                session_id: f[0].to_string(),
                current: int(f[1])?,
                historical: int(f[2])?,
                judgment,
                score_raw: num(f[4])?,
                score_reform: num(f[5])?,
                metric: f[6].parse()?,
                mode: f[7].parse()?,
            };
            if label.historical >= label.current {
                return Err(Error::parse(path, n, "historical turn must precede the current turn"));
            }
            if Judgment::from_scores(label.score_raw, label.score_reform) != label.judgment {
                return Err(Error::Validation(format!(
                    "{}:{n}: label {} contradicts scores {} / {}",
                    path.display(),
                    label.judgment,
                    label.score_raw,
                    label.score_reform
                )));
            }
            table
                .entries
                .entry((label.session_id.clone(), label.current))
                .or_default()
                .push(label);
        }
        Ok(table)
    }
}

/// Share of relevant labels among all labels pooled at each current turn index.
pub fn relevant_portion_by_turn(table: &PrjTable) -> Vec<(usize, f64)> {
    let mut pooled: BTreeMap<usize, (usize, usize)> = BTreeMap::new();
    for l in table.iter() {
        let e = pooled.entry(l.current).or_default();
        e.1 += 1;
        if l.judgment.is_relevant() {
            e.0 += 1;
        }
    }
    pooled
        .into_iter()
        .map(|(n, (rel, total))| (n, rel as f64 / total as f64))
        .collect()
}

pub fn write_portion_csv<W: Write>(rows: &[(usize, f64)], mut w: W) -> Result<()> {
    writeln!(w, "n,portion").map_err(|e| Error::io("writing CSV", e))?;
    for (n, p) in rows {
        writeln!(w, "{n},{p:.6}").map_err(|e| Error::io("writing CSV", e))?;
    }
    w.flush().map_err(|e| Error::io("writing CSV", e))
}

/// Per-query shortcut flags and their percentage.
#[derive(Debug, Clone, PartialEq)]
pub struct HistAboveCurrent {
    /// `(query id, flag)` in ascending query id order.
    pub flags: Vec<(String, bool)>,
    pub percentage: f64,
}

/// Percentage of evaluated queries whose list ranks some historical gold
/// (different from the current gold) strictly above the current gold. A gold
/// missing from the list ranks at infinity.
pub fn historical_gold_above_current<T>(run: &[RankedList<T>], sessions: &[Session], qrels: &Qrels) -> HistAboveCurrent {
    let lists: HashMap<&str, &RankedList<T>> = run.iter().map(|l| (l.query_id.as_str(), l)).collect();
    let mut flags = Vec::new();
    for s in sessions {
        for t in &s.turns {
            let qid = query_id(&s.session_id, t.turn_index);
            let (Some(gold), Some(list)) = (&t.gold_passage_id, lists.get(qid.as_str())) else {
                continue;
            };
            if !qrels.contains_key(&qid) {
                continue;
            }
            let current = list.rank_of(gold).unwrap_or(usize::MAX);
            let best_hist = s
                .history(t.turn_index)
                .iter()
                .filter_map(|h| h.gold_passage_id.as_deref())
                .filter(|h| *h != gold)
                .filter_map(|h| list.rank_of(h))
                .min()
                .unwrap_or(usize::MAX);
            flags.push((qid, best_hist < current));
        }
    }
    flags.sort();
    let hits = flags.iter().filter(|f| f.1).count();
    let percentage = if flags.is_empty() { 0.0 } else { 100.0 * hits as f64 / flags.len() as f64 };
    HistAboveCurrent { flags, percentage }
}

/// CSV with one row per query and one flag column per named report.
pub fn write_hist_above_csv<W: Write>(reports: &[(&str, &HistAboveCurrent)], mut w: W) -> Result<()> {
    let err = |e| Error::io("writing CSV", e);
    let names: Vec<&str> = reports.iter().map(|r| r.0).collect();
    writeln!(w, "query_id,{}", names.join(",")).map_err(err)?;
    let mut rows: BTreeMap<&str, Vec<String>> = BTreeMap::new();
    for (i, (_, r)) in reports.iter().enumerate() {
        for (qid, flag) in &r.flags {
            rows.entry(qid.as_str()).or_insert_with(|| vec![String::new(); reports.len()])[i] =
                u8::from(*flag).to_string();
        }
    }
    for (qid, cells) in rows {
        writeln!(w, "{qid},{}", cells.join(",")).map_err(err)?;
    }
    let pct: Vec<String> = reports.iter().map(|(_, r)| format!("{:.4}", r.percentage)).collect();
    writeln!(w, "percentage,{}", pct.join(",")).map_err(err)?;
    w.flush().map_err(err)
}
