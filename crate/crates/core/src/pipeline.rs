//! Stage functions shared by the command line and the experiment runner,
//! plus the multi-variant ablation driver.

use std::collections::BTreeMap;
use std::io::Write;

use rand::seq::SliceRandom;
use rayon::prelude::*;

use crate::config::{EncoderConfig, EvalQuery, MiningQuery, PipelineConfig, PrjConfig, SplitConfig, SupervisionConfig};
use crate::corpus::{derive_qrels, query_id, Collection, Qrels, Session, Turn};
use crate::encode::{PassageEncoder, QueryEncoderParams};
use crate::error::{Error, Result};
use crate::eval::{evaluate, MetricSpec, Report};
use crate::index::{DenseIndex, RankedList};
use crate::prj::{
    historical_gold_above_current, GoldPassages, HistAboveCurrent, HistoryPassages, PrjJudge, PrjMode, PrjTable,
    PseudoGoldPassages, Retriever,
};
use crate::rng;
use crate::scalar::Scalar;
use crate::supervision::{
    assemble_instance, mine_retrieved_negatives, partition_history, reformulate, HistoryPartition, HistorySelection,
    ReformulateSettings, ReformulatedQuery, TrainingInstance,
};
use crate::trainer::{train, TrainConfig, TrainLog};

#[derive(Debug, Clone, PartialEq)]
pub struct Split {
    pub train: Vec<Session>,
    pub test: Vec<Session>,
}

/// Holds out `round(test_fraction * n)` sessions (at least one, and never all
/// of them), chosen by a seeded shuffle. Input order is kept within each side.
/// A zero fraction uses every session for both sides.
pub fn split_sessions(sessions: &[Session], cfg: &SplitConfig) -> Split {
    if cfg.test_fraction <= 0.0 || sessions.len() < 2 {
        return Split {
            train: sessions.to_vec(),
            test: sessions.to_vec(),
        };
    }
    let n_test = ((cfg.test_fraction * sessions.len() as f64).round() as usize).clamp(1, sessions.len() - 1);
    let mut order: Vec<usize> = (0..sessions.len()).collect();
    order.shuffle(&mut rng::keyed(cfg.seed, &["split"]));
    let mut held = vec![false; sessions.len()];
    order[..n_test].iter().for_each(|&i| held[i] = true);
    let (test, train): (Vec<_>, Vec<_>) = sessions.iter().zip(held).partition(|(_, h)| *h);
    Split {
        train: train.into_iter().map(|(s, _)| s.clone()).collect(),
        test: test.into_iter().map(|(s, _)| s.clone()).collect(),
    }
}

pub fn build_encoder<T: Scalar>(cfg: &EncoderConfig) -> Result<PassageEncoder<T>> {
    PassageEncoder::new(cfg.d_feat, cfg.d_emb, cfg.projection_seed)
}

/// Source of historical passage text: gold passages, or precomputed pseudo gold.
#[derive(Debug, Clone)]
pub enum HistorySource {
    Gold,
    Pseudo(PseudoGoldPassages),
}

impl HistorySource {
    /// In substitution mode, pseudo gold comes from the initial encoder.
    pub fn build<T: Scalar>(
        mode: PrjMode,
        sessions: &[Session],
        retriever: Retriever<'_, T>,
        collection: &Collection,
    ) -> Result<Self> {
        Ok(match mode {
            PrjMode::Gold => HistorySource::Gold,
            PrjMode::Substituted { k } => {
                HistorySource::Pseudo(PseudoGoldPassages::compute(sessions, retriever, collection, k)?)
            }
        })
    }

    pub fn bind<'a>(&'a self, collection: &'a Collection) -> BoundHistory<'a> {
        match self {
            HistorySource::Gold => BoundHistory::Gold(GoldPassages { collection }),
            HistorySource::Pseudo(p) => BoundHistory::Pseudo(p),
        }
    }
}

pub enum BoundHistory<'a> {
    Gold(GoldPassages<'a>),
    Pseudo(&'a PseudoGoldPassages),
}

impl HistoryPassages for BoundHistory<'_> {
    fn passage_text(&self, session_id: &str, turn: &Turn) -> Option<String> {
        match self {
            BoundHistory::Gold(g) => g.passage_text(session_id, turn),
            BoundHistory::Pseudo(p) => p.passage_text(session_id, turn),
        }
    }
}

/// PRJ labels for every judged turn, using the initial encoder.
pub fn run_prj<T: Scalar>(
    sessions: &[Session],
    qrels: &Qrels,
    retriever: Retriever<'_, T>,
    passages: &dyn HistoryPassages,
    cfg: &PrjConfig,
) -> Result<PrjTable> {
    PrjJudge {
        retriever,
        qrels,
        passages,
        settings: cfg.settings(),
    }
    .judge_all(sessions)
}

/// Reformulates every turn that has relevance judgments.
pub fn reformulate_sessions(
    sessions: &[Session],
    qrels: &Qrels,
    table: &PrjTable,
    passages: &dyn HistoryPassages,
    settings: ReformulateSettings,
) -> Result<Vec<ReformulatedQuery>> {
    let jobs: Vec<(&Session, usize)> = sessions
        .iter()
        .flat_map(|s| s.turns.iter().map(move |t| (s, t.turn_index)))
        .filter(|(s, n)| qrels.contains_key(&query_id(&s.session_id, *n)))
        .collect();
    jobs.par_iter()
        .map(|(s, n)| reformulate(s, *n, table, passages, settings))
        .collect()
}

/// Builds one training instance per reformulated query of `sessions`. In
/// substitution mode historical gold is unavailable, so the history
/// partition is empty and only retrieved and in-batch negatives remain.
pub fn mine_instances<T: Scalar>(
    sessions: &[Session],
    reformed: &[ReformulatedQuery],
    table: &PrjTable,
    retriever: Retriever<'_, T>,
    mode: PrjMode,
    cfg: &SupervisionConfig,
) -> Result<Vec<TrainingInstance>> {
    let by_id: BTreeMap<&str, &Session> = sessions.iter().map(|s| (s.session_id.as_str(), s)).collect();
    let jobs: Vec<(&Session, &ReformulatedQuery)> = reformed
        .iter()
        .filter_map(|r| by_id.get(r.session_id.as_str()).map(|s| (*s, r)))
        .collect();
    let mined: Vec<Option<TrainingInstance>> = jobs
        .par_iter()
        .map(|(s, r)| {
            let n = r.turn_index;
            let Some(turn) = s.turn(n) else { return Ok(None) };
            let Some(gold) = turn.gold_passage_id.as_deref() else {
                return Ok(None);
            };
            let partition = match mode {
                PrjMode::Gold => partition_history(s, n, table)?,
                PrjMode::Substituted { .. } => HistoryPartition::default(),
            };
            let raw;
            let mining = match cfg.mining_query {
                MiningQuery::Reformulated => *r,
                MiningQuery::Raw => {
                    raw = ReformulatedQuery {
                        text: turn.query_text.clone(),
                        contributing: Vec::new(),
                        ..(*r).clone()
                    };
                    &raw
                }
            };
            let retrieved = mine_retrieved_negatives(
                mining,
                retriever,
                gold,
                &partition,
                cfg.mining_depth,
                cfg.retrieved_negatives,
            )?;
            Ok(assemble_instance(s, n, &partition, r, &retrieved, cfg.seed, cfg.policy()))
        })
        .collect::<Result<_>>()?;
    Ok(mined.into_iter().flatten().collect())
}

/// Encodes and searches every query; output order follows the input.
pub fn search_queries<T: Scalar>(
    retriever: Retriever<'_, T>,
    queries: &[ReformulatedQuery],
    depth: usize,
) -> Result<Vec<RankedList<T>>> {
    let encoded: Vec<_> = queries
        .par_iter()
        .map(|q| (q.query_id.clone(), retriever.encoder.encode(&q.text)))
        .collect();
    retriever.index.search_batch(&encoded, depth)
}

/// History selection for evaluation queries given the training selection.
pub fn eval_selection(query: EvalQuery, training: HistorySelection) -> HistorySelection {
    match query {
        EvalQuery::Reformulated => training,
        EvalQuery::Raw => HistorySelection::None,
        EvalQuery::FullHistory => HistorySelection::All,
    }
}

/// Training configurations compared in the ablation table.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Variant {
    Full,
    NoHardNegatives,
    NoPseudoPositives,
    NoPrjReformulation,
}

impl Variant {
    pub const ALL: [Variant; 4] = [
        Variant::Full,
        Variant::NoHardNegatives,
        Variant::NoPseudoPositives,
        Variant::NoPrjReformulation,
    ];

    pub fn label(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::NoHardNegatives => "-hard_neg",
            Variant::NoPseudoPositives => "-pse_pos",
            Variant::NoPrjReformulation => "-qr_prj",
        }
    }

    /// The supervision settings of this variant. Dropping PRJ reformulation
    /// concatenates all history but keeps the PRJ-mined supervision.
    pub fn supervision(self, base: &SupervisionConfig) -> SupervisionConfig {
        let mut s = *base;
        match self {
            Variant::Full => {}
            Variant::NoHardNegatives => s.historical_negatives = 0,
            Variant::NoPseudoPositives => s.pseudo_positives = 0,
            Variant::NoPrjReformulation => s.selection = HistorySelection::All,
        }
        s
    }
}

#[derive(Debug, Clone)]
pub struct TrainedModel<T> {
    pub params: QueryEncoderParams<T>,
    pub log: TrainLog,
    pub instances: usize,
    pub run: Vec<RankedList<T>>,
    pub report: Report,
    pub hist_above: HistAboveCurrent,
}

/// All seed-dependent state that the training variants share: the split,
/// encoder, index and PRJ table.
pub struct Experiment<T> {
    pub config: PipelineConfig,
    pub collection: Collection,
    pub split: Split,
    pub qrels: Qrels,
    pub encoder: PassageEncoder<T>,
    pub initial: QueryEncoderParams<T>,
    pub index: DenseIndex<T>,
    pub history: HistorySource,
    pub prj: PrjTable,
}

impl<T: Scalar> Experiment<T> {
    pub fn prepare(collection: Collection, sessions: &[Session], config: PipelineConfig) -> Result<Self> {
        config.validate()?;
        let qrels = derive_qrels(sessions);
        let split = split_sessions(sessions, &config.split);
        let encoder = build_encoder::<T>(&config.encoder)?;
        let initial = QueryEncoderParams::from_passage_encoder(&encoder);
        let index = DenseIndex::build(&collection, &encoder)?;
        let retriever = Retriever::new(&index, &initial);
        let history = HistorySource::build(config.prj.mode, sessions, retriever, &collection)?;
        let prj = run_prj(sessions, &qrels, retriever, &history.bind(&collection), &config.prj)?;
        Ok(Self {
            config,
            collection,
            split,
            qrels,
            encoder,
            initial,
            index,
            history,
            prj,
        })
    }

    pub fn initial_retriever(&self) -> Retriever<'_, T> {
        Retriever::new(&self.index, &self.initial)
    }

    pub fn reformulate(&self, sessions: &[Session], selection: HistorySelection) -> Result<Vec<ReformulatedQuery>> {
        let settings = ReformulateSettings {
            selection,
            max_tokens: self.config.supervision.max_tokens,
        };
        reformulate_sessions(sessions, &self.qrels, &self.prj, &self.history.bind(&self.collection), settings)
    }

    pub fn instances(&self, supervision: &SupervisionConfig) -> Result<Vec<TrainingInstance>> {
        let reformed = self.reformulate(&self.split.train, supervision.selection)?;
        mine_instances(
            &self.split.train,
            &reformed,
            &self.prj,
            self.initial_retriever(),
            self.config.prj.mode,
            supervision,
        )
    }

    /// Held-out queries for a training selection under the configured query type.
    pub fn test_queries(&self, training: HistorySelection) -> Result<Vec<ReformulatedQuery>> {
        self.reformulate(&self.split.test, eval_selection(self.config.eval.query, training))
    }

    pub fn search(&self, params: &QueryEncoderParams<T>, queries: &[ReformulatedQuery]) -> Result<Vec<RankedList<T>>> {
        search_queries(Retriever::new(&self.index, params), queries, self.config.eval.depth)
    }

    pub fn evaluate(&self, run: &[RankedList<T>]) -> Result<(Report, HistAboveCurrent)> {
        let report = evaluate(run, &self.qrels, &self.config.eval.metrics)?;
        let hist = historical_gold_above_current(run, &self.split.test, &self.qrels);
        Ok((report, hist))
    }

    /// Untrained encoder on the given held-out queries.
    pub fn untrained(&self, queries: &[ReformulatedQuery]) -> Result<(Vec<RankedList<T>>, Report, HistAboveCurrent)> {
        let run = self.search(&self.initial, queries)?;
        let (report, hist) = self.evaluate(&run)?;
        Ok((run, report, hist))
    }

    /// Untrained encoder on raw held-out queries.
    pub fn baseline(&self) -> Result<(Vec<RankedList<T>>, Report, HistAboveCurrent)> {
        self.untrained(&self.reformulate(&self.split.test, HistorySelection::None)?)
    }

    pub fn train_with(&self, supervision: &SupervisionConfig, trainer: &TrainConfig) -> Result<TrainedModel<T>> {
        let instances = self.instances(supervision)?;
        let (params, log) = train(&instances, &self.index, self.initial.clone(), trainer, |_, _| None)?;
        let run = self.search(&params, &self.test_queries(supervision.selection)?)?;
        let (report, hist_above) = self.evaluate(&run)?;
        Ok(TrainedModel {
            params,
            log,
            instances: instances.len(),
            run,
            report,
            hist_above,
        })
    }

    pub fn train_variant(&self, variant: Variant) -> Result<TrainedModel<T>> {
        self.train_with(&variant.supervision(&self.config.supervision), &self.config.trainer)
    }
}

pub fn median(values: &[f64]) -> f64 {
    assert!(!values.is_empty(), "median of nothing");
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let mid = v.len() / 2;
    if v.len() % 2 == 1 {
        v[mid]
    } else {
        (v[mid - 1] + v[mid]) / 2.0
    }
}

/// Per-seed reports of each variant and their medians.
#[derive(Debug, Clone, PartialEq)]
pub struct AblationTable {
    pub metrics: Vec<MetricSpec>,
    pub seeds: Vec<u64>,
    pub reports: BTreeMap<Variant, Vec<Report>>,
}

impl AblationTable {
    pub fn median(&self, variant: Variant, metric: MetricSpec) -> Option<f64> {
        let values: Vec<f64> = self.reports.get(&variant)?.iter().filter_map(|r| r.mean(metric)).collect();
        (!values.is_empty()).then(|| median(&values))
    }

    /// `variant,<metric>...` with one row of medians per variant.
    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        let err = |e| Error::io("writing ablation table", e);
        let header: Vec<String> = self.metrics.iter().map(ToString::to_string).collect();
        writeln!(w, "variant,{}", header.join(",")).map_err(err)?;
        for &v in self.reports.keys() {
            let cells: Vec<String> = self
                .metrics
                .iter()
                .map(|&m| self.median(v, m).map_or(String::new(), |x| format!("{x:.6}")))
                .collect();
            writeln!(w, "{},{}", v.label(), cells.join(",")).map_err(err)?;
        }
        w.flush().map_err(err)
    }
}

/// Trains every variant for every seed. `prepare` builds the experiment for
/// one seed, so callers decide whether the data also varies with the seed.
pub fn run_ablation<T: Scalar>(
    seeds: &[u64],
    mut prepare: impl FnMut(u64) -> Result<Experiment<T>>,
) -> Result<AblationTable> {
    if seeds.is_empty() {
        return Err(Error::Config("ablation needs at least one seed".into()));
    }
    let mut reports: BTreeMap<Variant, Vec<Report>> = BTreeMap::new();
    let mut metrics = Vec::new();
    for &seed in seeds {
        let exp = prepare(seed)?;
        metrics.clone_from(&exp.config.eval.metrics);
        for v in Variant::ALL {
            let model = exp.train_variant(v)?;
            log::info!(
                "seed {seed} {}: MRR {:.4}",
                v.label(),
                model.report.mean(MetricSpec::MRR).unwrap_or(f64::NAN)
            );
            reports.entry(v).or_default().push(model.report);
        }
    }
    Ok(AblationTable {
        metrics,
        seeds: seeds.to_vec(),
        reports,
    })
}
