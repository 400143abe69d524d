//! Pipeline configuration, read from a single TOML file.
//!
//! Every field has a default, so an empty file is a valid configuration.
//! Unknown keys are rejected.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::encode::{DEFAULT_D_EMB, DEFAULT_D_FEAT};
use crate::error::{Error, Result};
use crate::eval::MetricSpec;
use crate::index::DEFAULT_DEPTH;
use crate::prj::{ConcatOrder, PrjMode, PrjSettings};
use crate::supervision::{HistorySelection, ReformulateSettings, SamplingPolicy, DEFAULT_MAX_TOKENS};
use crate::trainer::TrainConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PathsConfig {
    /// Passage collection (JSONL). Relative paths resolve against the config file.
    pub collection: PathBuf,
    /// Conversation sessions (JSONL).
    pub sessions: PathBuf,
    /// Directory holding every intermediate artifact.
    pub work_dir: PathBuf,
}

impl Default for PathsConfig {
    fn default() -> Self {
        Self {
            collection: "collection.jsonl".into(),
            sessions: "sessions.jsonl".into(),
            work_dir: "work".into(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderConfig {
    pub d_feat: usize,
    pub d_emb: usize,
    pub projection_seed: u64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            d_feat: DEFAULT_D_FEAT,
            d_emb: DEFAULT_D_EMB,
            projection_seed: 0,
        }
    }
}

/// Held-out sessions for evaluation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitConfig {
    /// Fraction of sessions held out; 0 trains and evaluates on everything.
    pub test_fraction: f64,
    pub seed: u64,
}

impl Default for SplitConfig {
    fn default() -> Self {
        Self {
            test_fraction: 0.2,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PrjConfig {
    pub metric: MetricSpec,
    pub depth: usize,
    /// `"gold"` or `"substituted(k)"`.
    pub mode: PrjMode,
    pub order: ConcatOrder,
}

impl Default for PrjConfig {
    fn default() -> Self {
        let s = PrjSettings::default();
        Self {
            metric: s.metric,
            depth: s.depth,
            mode: s.mode,
            order: s.order,
        }
    }
}

impl PrjConfig {
    pub fn settings(&self) -> PrjSettings {
        PrjSettings {
            metric: self.metric,
            depth: self.depth,
            mode: self.mode,
            order: self.order,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SupervisionConfig {
    pub max_tokens: usize,
    /// History used in the training query text.
    pub selection: HistorySelection,
    pub pseudo_positives: usize,
    pub historical_negatives: usize,
    pub retrieved_negatives: usize,
    /// Retrieval depth when mining retrieved negatives.
    pub mining_depth: usize,
    /// Query text used to mine retrieved negatives.
    pub mining_query: MiningQuery,
    pub seed: u64,
}

impl Default for SupervisionConfig {
    fn default() -> Self {
        let p = SamplingPolicy::default();
        Self {
            max_tokens: DEFAULT_MAX_TOKENS,
            selection: HistorySelection::Prj,
            pseudo_positives: p.pseudo_positives,
            historical_negatives: p.historical_negatives,
            retrieved_negatives: p.retrieved_negatives,
            mining_depth: DEFAULT_DEPTH,
            mining_query: MiningQuery::Reformulated,
            seed: 0,
        }
    }
}

impl SupervisionConfig {
    pub fn policy(&self) -> SamplingPolicy {
        SamplingPolicy {
            pseudo_positives: self.pseudo_positives,
            historical_negatives: self.historical_negatives,
            retrieved_negatives: self.retrieved_negatives,
        }
    }

    pub fn reformulate(&self) -> ReformulateSettings {
        ReformulateSettings {
            selection: self.selection,
            max_tokens: self.max_tokens,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MiningQuery {
    #[default]
    Reformulated,
    Raw,
}

/// Query text used when searching held-out turns.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvalQuery {
    /// Same history selection as training.
    #[default]
    Reformulated,
    /// The current query alone.
    Raw,
    /// The current query followed by every historical turn.
    FullHistory,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub metrics: Vec<MetricSpec>,
    /// Run-file depth.
    pub depth: usize,
    pub query: EvalQuery,
    /// Seeds for multi-seed analyses such as the ablation table.
    pub seeds: Vec<u64>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            metrics: MetricSpec::standard(),
            depth: DEFAULT_DEPTH,
            query: EvalQuery::Reformulated,
            seeds: vec![1, 2, 3, 4, 5],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub paths: PathsConfig,
    pub encoder: EncoderConfig,
    pub split: SplitConfig,
    pub prj: PrjConfig,
    pub supervision: SupervisionConfig,
    pub trainer: TrainConfig,
    pub eval: EvalConfig,
}

impl PipelineConfig {
    pub fn from_toml_str(s: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(s).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Loads a config file; relative paths inside it resolve against its directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
        let mut cfg = Self::from_toml_str(&text)?;
        if let Some(base) = path.parent() {
            cfg.paths.resolve_against(base);
        }
        Ok(cfg)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Sets every seed (projection, split, sampling, training) to `seed`.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.encoder.projection_seed = seed;
        self.split.seed = seed;
        self.supervision.seed = seed;
        self.trainer.seed = seed;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.encoder.d_feat == 0 || self.encoder.d_emb == 0 {
            return bad("encoder dimensions must be positive".into());
        }
        if !(0.0..1.0).contains(&self.split.test_fraction) {
            return bad(format!("split.test_fraction must lie in [0, 1), got {}", self.split.test_fraction));
        }
        if self.prj.depth == 0 || self.eval.depth == 0 {
            return bad("retrieval depths must be positive".into());
        }
        if self.supervision.max_tokens == 0 {
            return bad("supervision.max_tokens must be positive".into());
        }
        if self.supervision.mining_depth < self.supervision.retrieved_negatives {
            return bad(format!(
                "supervision.mining_depth {} is smaller than retrieved_negatives {}",
                self.supervision.mining_depth, self.supervision.retrieved_negatives
            ));
        }
        if self.eval.metrics.is_empty() {
            return bad("eval.metrics is empty".into());
        }
        self.trainer.validate()
    }
}

impl PathsConfig {
    fn resolve_against(&mut self, base: &Path) {
        for p in [&mut self.collection, &mut self.sessions, &mut self.work_dir] {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::trainer::LossForm;

    #[test]
    fn empty_file_gives_defaults() {
        let cfg = PipelineConfig::from_toml_str("").unwrap();
        assert_eq!(cfg, PipelineConfig::default());
        assert_eq!(cfg.trainer.lr, 3e-5);
        assert_eq!(cfg.trainer.batch_size, 32);
        assert_eq!(cfg.supervision.max_tokens, 512);
        assert_eq!(cfg.prj.depth, 100);
    }

    #[test]
    fn unknown_keys_rejected() {
        assert!(PipelineConfig::from_toml_str("[trainer]\nlearning_rate = 0.1\n").is_err());
        assert!(PipelineConfig::from_toml_str("[extra]\n").is_err());
    }

    #[test]
    fn parses_every_section() {
        let cfg = PipelineConfig::from_toml_str(
            r#"
            [encoder]
            d_feat = 64
            [prj]
            metric = "ndcg@3"
            mode = "substituted(2)"
            order = "passage_first"
            [supervision]
            selection = "all"
            [trainer]
            lr = 0.01
            loss = "probability"
            [eval]
            metrics = ["mrr", "recall@10"]
            query = "raw"
            "#,
        )
        .unwrap();
        assert_eq!(cfg.encoder.d_feat, 64);
        assert_eq!(cfg.prj.metric, MetricSpec::Ndcg { k: 3 });
        assert_eq!(cfg.prj.mode, PrjMode::Substituted { k: 2 });
        assert_eq!(cfg.prj.order, ConcatOrder::PassageFirst);
        assert_eq!(cfg.supervision.selection, HistorySelection::All);
        assert_eq!(cfg.trainer.lr, 0.01);
        assert_eq!(cfg.trainer.loss, LossForm::Probability);
        assert_eq!(cfg.eval.query, EvalQuery::Raw);
    }

    #[test]
    fn round_trips_through_toml() {
        let cfg = PipelineConfig::default().with_seed(7);
        assert_eq!(PipelineConfig::from_toml_str(&cfg.to_toml_string()).unwrap(), cfg);
    }

    #[test]
    fn rejects_bad_values() {
        assert!(PipelineConfig::from_toml_str("[trainer]\nlr = 0.0\n").is_err());
        assert!(PipelineConfig::from_toml_str("[split]\ntest_fraction = 1.0\n").is_err());
        assert!(PipelineConfig::from_toml_str("[prj]\nmode = \"substituted(0)\"\n").is_err());
    }
}
