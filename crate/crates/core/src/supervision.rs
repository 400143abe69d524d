//! Context-denoised query reformulation and history-derived supervision.

use std::collections::HashSet;
use std::io::{BufRead, Write};
use std::path::Path;

use rand::seq::index;
use serde::{Deserialize, Serialize};

use crate::corpus::{query_id, Session};
use crate::error::{Error, Result};
use crate::prj::{HistoryPassages, PrjTable, Retriever};
use crate::rng;
use crate::scalar::Scalar;

pub const DEFAULT_MAX_TOKENS: usize = 512;

/// Gold passages of judged historical turns, split by their PRJ label.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct HistoryPartition {
    /// Ordered by turn index.
    pub relevant: Vec<String>,
    pub irrelevant: Vec<String>,
}

/// Splits the historical gold passages of turn `n`. A passage shared by a
/// relevant and an irrelevant turn lands in `relevant` only.
pub fn partition_history(session: &Session, n: usize, table: &PrjTable) -> Result<HistoryPartition> {
    let history = session.history(n);
    let labels = table.labels(&session.session_id, n).unwrap_or(&[]);
    let mut relevant: Vec<String> = Vec::new();
    let mut irrelevant: Vec<String> = Vec::new();
    for turn in history {
        let Some(gold) = &turn.gold_passage_id else { continue };
        let label = labels.iter().find(|l| l.historical == turn.turn_index).ok_or_else(|| {
            Error::Validation(format!(
                "no PRJ label for session {} turn {n} against historical turn {}",
                session.session_id, turn.turn_index
            ))
        })?;
        if label.judgment.is_relevant() {
            if !relevant.contains(gold) {
                relevant.push(gold.clone());
            }
        } else if !irrelevant.contains(gold) {
            irrelevant.push(gold.clone());
        }
    }
    irrelevant.retain(|id| !relevant.contains(id));
    Ok(HistoryPartition { relevant, irrelevant })
}

/// Which historical turns are appended to the current query.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HistorySelection {
    /// Turns judged relevant.
    #[default]
    Prj,
    /// Every historical turn.
    All,
    /// None: the raw current query.
    None,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ReformulateSettings {
    pub selection: HistorySelection,
    /// Whitespace-token budget for the whole reformulated text.
    pub max_tokens: usize,
}

impl Default for ReformulateSettings {
    fn default() -> Self {
        Self {
            selection: HistorySelection::Prj,
            max_tokens: DEFAULT_MAX_TOKENS,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReformulatedQuery {
    pub query_id: String,
    pub session_id: String,
    pub turn_index: usize,
    pub text: String,
    /// Historical turns whose passage and query were appended, ascending.
    pub contributing: Vec<usize>,
}

/// Builds `q_n p_i q_i p_j q_j ...` over the selected turns in chronological
/// order. Over budget, the oldest history units are dropped first; the
/// current query is never cut.
pub fn reformulate(
    session: &Session,
    n: usize,
    table: &PrjTable,
    passages: &dyn HistoryPassages,
    settings: ReformulateSettings,
) -> Result<ReformulatedQuery> {
    let current = session
        .turn(n)
        .ok_or_else(|| Error::Validation(format!("session {} has no turn {n}", session.session_id)))?;
    let own_tokens = current.query_text.split_whitespace().count();
    if own_tokens > settings.max_tokens {
        return Err(Error::Config(format!(
            "query {} has {own_tokens} tokens, over the budget of {}",
            query_id(&session.session_id, n),
            settings.max_tokens
        )));
    }

    let selected: Vec<usize> = match settings.selection {
        HistorySelection::None => Vec::new(),
        HistorySelection::All => session.history(n).iter().map(|t| t.turn_index).collect(),
        HistorySelection::Prj if n == 1 => Vec::new(),
        HistorySelection::Prj => table
            .labels(&session.session_id, n)
            .ok_or_else(|| {
                Error::Validation(format!("no PRJ labels for {}", query_id(&session.session_id, n)))
            })?
            .iter()
            .filter(|l| l.judgment.is_relevant())
            .map(|l| l.historical)
            .collect(),
    };

    let mut units: Vec<(usize, String, usize)> = Vec::new();
    for i in selected {
        let turn = session.turn(i).expect("historical turn exists");
        let unit = match passages.passage_text(&session.session_id, turn) {
            Some(p) => format!("{p} {}", turn.query_text),
            None => turn.query_text.clone(),
        };
        let tokens = unit.split_whitespace().count();
        units.push((i, unit, tokens));
    }
    let mut total = own_tokens + units.iter().map(|u| u.2).sum::<usize>();
    let mut start = 0;
    while total > settings.max_tokens {
        total -= units[start].2;
        start += 1;
    }
    let kept = &units[start..];

    let mut text = current.query_text.clone();
    for (_, unit, _) in kept {
        text.push(' ');
        text.push_str(unit);
    }
    Ok(ReformulatedQuery {
        query_id: query_id(&session.session_id, n),
        session_id: session.session_id.clone(),
        turn_index: n,
        text,
        contributing: kept.iter().map(|u| u.0).collect(),
    })
}

/// Top-ranked passages for the reformulated query, skipping the current gold
/// and every pseudo positive.
pub fn mine_retrieved_negatives<T: Scalar>(
    reformed: &ReformulatedQuery,
    retriever: Retriever<'_, T>,
    gold: &str,
    partition: &HistoryPartition,
    depth: usize,
    count: usize,
) -> Result<Vec<String>> {
    if depth < count {
        return Err(Error::Config(format!("mining depth {depth} is smaller than count {count}")));
    }
    if count == 0 {
        return Ok(Vec::new());
    }
    let list = retriever.retrieve(&reformed.query_id, &reformed.text, depth)?;
    let survivors: Vec<String> = list
        .ids()
        .filter(|id| *id != gold && !partition.relevant.iter().any(|p| p == id))
        .take(count)
        .map(str::to_string)
        .collect();
    if survivors.len() < count {
        log::warn!(
            "{}: only {} retrieved negatives survive filtering (wanted {count})",
            reformed.query_id,
            survivors.len()
        );
    }
    Ok(survivors)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NegativeSource {
    InBatch,
    Retrieved,
    Historical,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaggedNegative {
    pub id: String,
    pub source: NegativeSource,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrainingInstance {
    pub query_id: String,
    pub session_id: String,
    pub turn_index: usize,
    pub text: String,
    /// Gold first, then sampled pseudo positives.
    pub positives: Vec<String>,
    /// Explicit negatives; in-batch negatives are added at batch time.
    pub negatives: Vec<TaggedNegative>,
}

impl TrainingInstance {
    pub fn gold(&self) -> &str {
        &self.positives[0]
    }
}

/// How many of each mined signal an instance receives.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SamplingPolicy {
    pub pseudo_positives: usize,
    pub historical_negatives: usize,
    pub retrieved_negatives: usize,
}

impl Default for SamplingPolicy {
    fn default() -> Self {
        Self {
            pseudo_positives: 1,
            historical_negatives: 1,
            retrieved_negatives: 1,
        }
    }
}

fn sample(rng: &mut rng::Rng, pool: &[String], count: usize) -> Vec<String> {
    let count = count.min(pool.len());
    index::sample(rng, pool.len(), count).into_iter().map(|i| pool[i].clone()).collect()
}

/// Samples pseudo positives and historical hard negatives with the stream
/// keyed on `(seed, session id, n)` and appends the retrieved negatives.
/// Returns `None` when turn `n` has no gold passage.
pub fn assemble_instance(
    session: &Session,
    n: usize,
    partition: &HistoryPartition,
    reformed: &ReformulatedQuery,
    retrieved: &[String],
    seed: u64,
    policy: SamplingPolicy,
) -> Option<TrainingInstance> {
    let Some(gold) = session.turn(n).and_then(|t| t.gold_passage_id.clone()) else {
        log::info!("{}: no gold passage; instance skipped", query_id(&session.session_id, n));
        return None;
    };
    let mut rng = rng::keyed(seed, &[&session.session_id, &n.to_string()]);

    let pseudo_pool: Vec<String> = partition.relevant.iter().filter(|p| **p != gold).cloned().collect();
    let mut positives = vec![gold];
    positives.extend(sample(&mut rng, &pseudo_pool, policy.pseudo_positives));

    let hist_pool: Vec<String> = partition
        .irrelevant
        .iter()
        .filter(|p| !positives.contains(p))
        .cloned()
        .collect();
    let mut negatives: Vec<TaggedNegative> = sample(&mut rng, &hist_pool, policy.historical_negatives)
        .into_iter()
        .map(|id| TaggedNegative { id, source: NegativeSource::Historical })
        .collect();
    let taken: HashSet<String> = positives.iter().chain(negatives.iter().map(|n| &n.id)).cloned().collect();
    negatives.extend(
        retrieved
            .iter()
            .filter(|id| !taken.contains(*id))
            .take(policy.retrieved_negatives)
            .map(|id| TaggedNegative { id: id.clone(), source: NegativeSource::Retrieved }),
    );

    Some(TrainingInstance {
        query_id: reformed.query_id.clone(),
        session_id: session.session_id.clone(),
        turn_index: n,
        text: reformed.text.clone(),
        positives,
        negatives,
    })
}

fn write_jsonl<T: Serialize, W: Write>(items: &[T], mut w: W, what: &str) -> Result<()> {
    for item in items {
        serde_json::to_writer(&mut w, item).map_err(|e| Error::io(format!("writing {what}"), std::io::Error::other(e)))?;
        w.write_all(b"\n").map_err(|e| Error::io(format!("writing {what}"), e))?;
    }
    w.flush().map_err(|e| Error::io(format!("writing {what}"), e))
}

fn read_jsonl<T: for<'de> Deserialize<'de>, R: BufRead>(r: R, path: &Path) -> Result<Vec<T>> {
    let mut out = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line = line.map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| Error::parse(path, i + 1, e.to_string()))?);
    }
    Ok(out)
}

pub fn write_instances<W: Write>(instances: &[TrainingInstance], w: W) -> Result<()> {
    write_jsonl(instances, w, "training instances")
}

pub fn read_instances<R: BufRead>(r: R, path: &Path) -> Result<Vec<TrainingInstance>> {
    let instances: Vec<TrainingInstance> = read_jsonl(r, path)?;
    for inst in &instances {
        if inst.positives.is_empty() {
            return Err(Error::Validation(format!("instance {} has no positives", inst.query_id)));
        }
    }
    Ok(instances)
}

pub fn write_reformulated<W: Write>(queries: &[ReformulatedQuery], w: W) -> Result<()> {
    write_jsonl(queries, w, "reformulated queries")
}

pub fn read_reformulated<R: BufRead>(r: R, path: &Path) -> Result<Vec<ReformulatedQuery>> {
    read_jsonl(r, path)
}
