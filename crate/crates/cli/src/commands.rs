//! One function per subcommand. Each reads its inputs from the work
//! directory, writes its outputs there, and records both in the manifest.

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufReader, Write};
use std::path::{Path, PathBuf};

use histdr::config::{EvalQuery, PipelineConfig};
use histdr::corpus::{
    derive_qrels, load_collection, load_sessions, read_qrels, write_collection, write_qrels, write_sessions,
    Collection, LoadOptions, Qrels, Session,
};
use histdr::encode::{write_embeddings_binary, write_embeddings_text, QueryEncoderParams};
use histdr::eval::{evaluate, format_table, Report};
use histdr::index::{read_run, write_run, RankedList};
use histdr::pipeline::{
    build_encoder, eval_selection, mine_instances, reformulate_sessions, run_ablation, run_prj, search_queries,
    split_sessions, Experiment, HistorySource, Split,
};
use histdr::prj::{
    historical_gold_above_current, relevant_portion_by_turn, write_hist_above_csv, write_portion_csv, PrjTable,
    Retriever,
};
use histdr::supervision::{
    read_instances, read_reformulated, write_instances, write_reformulated, ReformulateSettings, ReformulatedQuery,
};
use histdr::trainer::{read_checkpoint, train, write_checkpoint, Checkpoint};
use histdr::{DenseIndex, Error, QueryEncoder};
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::error::{CliError, CliResult};
use crate::workdir::{self, sha256_str, WorkDir};

pub struct Ctx {
    pub cfg: PipelineConfig,
    pub work: WorkDir,
}

/// Hash of the configuration sections a step depends on.
pub fn step_config_hash(cfg: &PipelineConfig, step: &str) -> String {
    let v = match step.split(':').next().unwrap_or(step) {
        "ingest" => json!({ "split": cfg.split }),
        "embed" => json!({ "encoder": cfg.encoder }),
        "prj" => json!({ "encoder": cfg.encoder, "prj": cfg.prj }),
        "reformulate" | "mine" => json!({ "encoder": cfg.encoder, "prj": cfg.prj, "supervision": cfg.supervision }),
        "train" => json!({ "encoder": cfg.encoder, "trainer": cfg.trainer }),
        "search" => json!({
            "encoder": cfg.encoder, "prj": cfg.prj, "supervision": cfg.supervision,
            "query": cfg.eval.query, "depth": cfg.eval.depth,
        }),
        "eval" => json!({ "metrics": cfg.eval.metrics }),
        _ => json!({}),
    };
    sha256_str(&v.to_string())
}

#[derive(Debug, Serialize, Deserialize)]
struct SplitFile {
    train: Vec<String>,
    test: Vec<String>,
}

fn open(path: &Path) -> CliResult<BufReader<File>> {
    File::open(path)
        .map(BufReader::new)
        .map_err(|e| CliError::io(format!("opening {}", path.display()), e))
}

fn finish<W: Write>(mut w: W, path: &str) -> CliResult<()> {
    w.flush().map_err(|e| CliError::io(format!("writing {path}"), e))
}

impl Ctx {
    fn input(&self, artifact: &str) -> CliResult<PathBuf> {
        let cfg = &self.cfg;
        self.work.input(artifact, &|step| step_config_hash(cfg, step))
    }

    fn record(&mut self, step: &str, inputs: &[PathBuf], outputs: &[&str]) -> CliResult<()> {
        let hash = step_config_hash(&self.cfg, step);
        self.work.record(step, hash, inputs, outputs)
    }

    fn collection(&self) -> CliResult<(PathBuf, Collection)> {
        let p = self.input(workdir::COLLECTION)?;
        let c = load_collection(&p, LoadOptions::default())?;
        Ok((p, c))
    }

    fn sessions(&self, collection: &Collection) -> CliResult<(PathBuf, Vec<Session>)> {
        let p = self.input(workdir::SESSIONS)?;
        let s = load_sessions(&p, collection)?;
        Ok((p, s))
    }

    fn qrels(&self) -> CliResult<(PathBuf, Qrels)> {
        let p = self.input(workdir::QRELS)?;
        let q = read_qrels(&p)?;
        Ok((p, q))
    }

    fn split(&self, sessions: &[Session]) -> CliResult<(PathBuf, Split)> {
        let p = self.input(workdir::SPLIT)?;
        let file: SplitFile = serde_json::from_reader(open(&p)?)
            .map_err(|e| Error::Validation(format!("bad split file {}: {e}", p.display())))?;
        let pick = |ids: &[String]| -> CliResult<Vec<Session>> {
            ids.iter()
                .map(|id| {
                    sessions
                        .iter()
                        .find(|s| &s.session_id == id)
                        .cloned()
                        .ok_or_else(|| Error::Validation(format!("split names unknown session {id}")).into())
                })
                .collect()
        };
        let split = Split {
            train: pick(&file.train)?,
            test: pick(&file.test)?,
        };
        Ok((p, split))
    }

    fn index(&self) -> CliResult<(PathBuf, DenseIndex)> {
        let p = self.input(workdir::INDEX)?;
        let index = DenseIndex::read(open(&p)?)?;
        if index.d_emb() != self.cfg.encoder.d_emb {
            return Err(Error::Dimension {
                expected: self.cfg.encoder.d_emb,
                actual: index.d_emb(),
            }
            .into());
        }
        Ok((p, index))
    }

    fn prj_table(&self) -> CliResult<(PathBuf, PrjTable)> {
        let p = self.input(workdir::PRJ)?;
        let t = PrjTable::read(open(&p)?, &p)?;
        Ok((p, t))
    }

    fn initial_params(&self) -> CliResult<QueryEncoder> {
        Ok(QueryEncoderParams::from_passage_encoder(&build_encoder::<f64>(&self.cfg.encoder)?))
    }

    /// Query encoder from `--untrained`, an explicit checkpoint, or the work-directory checkpoint.
    fn params(&self, untrained: bool, checkpoint: Option<&Path>) -> CliResult<(Option<PathBuf>, QueryEncoder)> {
        if untrained {
            return Ok((None, self.initial_params()?));
        }
        let p = match checkpoint {
            Some(p) if p.exists() => p.to_path_buf(),
            Some(p) => return Err(Error::MissingArtifact(p.display().to_string()).into()),
            None => self.input(workdir::CHECKPOINT)?,
        };
        let ckpt: Checkpoint<f64> = read_checkpoint(open(&p)?)?;
        if ckpt.params.d_feat() != self.cfg.encoder.d_feat || ckpt.params.d_emb() != self.cfg.encoder.d_emb {
            return Err(Error::Config(format!(
                "checkpoint {} is {}x{}, config expects {}x{}",
                p.display(),
                ckpt.params.d_feat(),
                ckpt.params.d_emb(),
                self.cfg.encoder.d_feat,
                self.cfg.encoder.d_emb
            ))
            .into());
        }
        Ok((Some(p), ckpt.params))
    }

    /// Resolves a run argument: a bare name means `runs/<name>.trec`.
    fn run_path(&self, arg: &str) -> CliResult<(String, PathBuf)> {
        if arg.contains('/') || arg.ends_with(".trec") {
            let p = PathBuf::from(arg);
            if !p.exists() {
                return Err(Error::MissingArtifact(arg.to_string()).into());
            }
            let name = p.file_stem().map_or(arg.to_string(), |s| s.to_string_lossy().into_owned());
            Ok((name, p))
        } else {
            Ok((arg.to_string(), self.input(&workdir::run_artifact(arg))?))
        }
    }

    fn runs(&self, args: &[String]) -> CliResult<Vec<(String, PathBuf)>> {
        if !args.is_empty() {
            return args.iter().map(|a| self.run_path(a)).collect();
        }
        let dir = self.work.path("runs");
        let mut names: Vec<String> = fs::read_dir(&dir)
            .map_err(|_| Error::MissingArtifact(format!("{} (run `histdr search` first)", dir.display())))?
            .filter_map(|e| e.ok())
            .filter_map(|e| e.file_name().to_str().and_then(|n| n.strip_suffix(".trec")).map(str::to_string))
            .collect();
        names.sort();
        if names.is_empty() {
            return Err(Error::MissingArtifact(format!("no run files in {}", dir.display())).into());
        }
        names.iter().map(|n| self.run_path(n)).collect()
    }
}

pub fn ingest(ctx: &mut Ctx) -> CliResult<()> {
    let (cpath, spath) = (ctx.cfg.paths.collection.clone(), ctx.cfg.paths.sessions.clone());
    for p in [&cpath, &spath] {
        if !p.exists() {
            return Err(Error::MissingArtifact(p.display().to_string()).into());
        }
    }
    let collection = load_collection(&cpath, LoadOptions::default())?;
    let sessions = load_sessions(&spath, &collection)?;
    let qrels = derive_qrels(&sessions);
    let split = split_sessions(&sessions, &ctx.cfg.split);

    let mut w = ctx.work.create(workdir::COLLECTION)?;
    write_collection(&collection, &mut w)?;
    finish(w, workdir::COLLECTION)?;
    let mut w = ctx.work.create(workdir::SESSIONS)?;
    write_sessions(&sessions, &mut w)?;
    finish(w, workdir::SESSIONS)?;
    let mut w = ctx.work.create(workdir::QRELS)?;
    write_qrels(&qrels, &mut w)?;
    finish(w, workdir::QRELS)?;
    let ids = |s: &[Session]| s.iter().map(|x| x.session_id.clone()).collect();
    let file = SplitFile {
        train: ids(&split.train),
        test: ids(&split.test),
    };
    let mut w = ctx.work.create(workdir::SPLIT)?;
    serde_json::to_writer_pretty(&mut w, &file).map_err(|e| CliError::io("writing split", e.into()))?;
    w.write_all(b"\n").map_err(|e| CliError::io("writing split", e))?;
    finish(w, workdir::SPLIT)?;

    ctx.record(
        "ingest",
        &[cpath, spath],
        &[workdir::COLLECTION, workdir::SESSIONS, workdir::QRELS, workdir::SPLIT],
    )?;
    println!(
        "ingested {} passages, {} sessions ({} train / {} test), {} judged queries",
        collection.len(),
        sessions.len(),
        split.train.len(),
        split.test.len(),
        qrels.len()
    );
    Ok(())
}

pub fn embed(ctx: &mut Ctx) -> CliResult<()> {
    let (cpath, collection) = ctx.collection()?;
    let encoder = build_encoder::<f64>(&ctx.cfg.encoder)?;
    let index = DenseIndex::build(&collection, &encoder)?;
    let rows: Vec<(String, &[f64])> = index.ids().iter().map(|id| (id.clone(), index.embedding(id).unwrap())).collect();
    let mut w = ctx.work.create(workdir::EMBEDDINGS)?;
    write_embeddings_binary(&mut w, encoder.d_emb(), &rows)?;
    finish(w, workdir::EMBEDDINGS)?;
    ctx.record("embed", &[cpath], &[workdir::EMBEDDINGS])?;
    println!("embedded {} passages (d_feat {}, d_emb {})", rows.len(), encoder.d_feat(), encoder.d_emb());
    Ok(())
}

pub fn index(ctx: &mut Ctx) -> CliResult<()> {
    let epath = ctx.input(workdir::EMBEDDINGS)?;
    let index = DenseIndex::read(open(&epath)?)?;
    let mut w = ctx.work.create(workdir::INDEX)?;
    index.write(&mut w)?;
    finish(w, workdir::INDEX)?;
    ctx.record("index", &[epath], &[workdir::INDEX])?;
    println!("indexed {} passages", index.len());
    Ok(())
}

fn history_source(
    ctx: &Ctx,
    sessions: &[Session],
    index: &DenseIndex,
    initial: &QueryEncoder,
    collection: &Collection,
) -> CliResult<HistorySource> {
    Ok(HistorySource::build(ctx.cfg.prj.mode, sessions, Retriever::new(index, initial), collection)?)
}

pub fn prj(ctx: &mut Ctx) -> CliResult<()> {
    let (cpath, collection) = ctx.collection()?;
    let (spath, sessions) = ctx.sessions(&collection)?;
    let (qpath, qrels) = ctx.qrels()?;
    let (ipath, index) = ctx.index()?;
    let initial = ctx.initial_params()?;
    let history = history_source(ctx, &sessions, &index, &initial, &collection)?;
    let table = run_prj(
        &sessions,
        &qrels,
        Retriever::new(&index, &initial),
        &history.bind(&collection),
        &ctx.cfg.prj,
    )?;
    let mut w = ctx.work.create(workdir::PRJ)?;
    table.write(&mut w)?;
    finish(w, workdir::PRJ)?;
    ctx.record("prj", &[cpath, spath, qpath, ipath], &[workdir::PRJ])?;
    let relevant = table.iter().filter(|l| l.judgment.is_relevant()).count();
    println!("judged {} historical turns, {relevant} relevant", table.label_count());
    Ok(())
}

pub fn reformulate(ctx: &mut Ctx) -> CliResult<()> {
    let (cpath, collection) = ctx.collection()?;
    let (spath, sessions) = ctx.sessions(&collection)?;
    let (qpath, qrels) = ctx.qrels()?;
    let (ppath, table) = ctx.prj_table()?;
    let (ipath, index) = ctx.index()?;
    let initial = ctx.initial_params()?;
    let history = history_source(ctx, &sessions, &index, &initial, &collection)?;
    let queries = reformulate_sessions(
        &sessions,
        &qrels,
        &table,
        &history.bind(&collection),
        ctx.cfg.supervision.reformulate(),
    )?;
    let mut w = ctx.work.create(workdir::REFORMULATED)?;
    write_reformulated(&queries, &mut w)?;
    finish(w, workdir::REFORMULATED)?;
    ctx.record("reformulate", &[cpath, spath, qpath, ppath, ipath], &[workdir::REFORMULATED])?;
    let expanded = queries.iter().filter(|q| !q.contributing.is_empty()).count();
    println!("reformulated {} queries, {expanded} with history", queries.len());
    Ok(())
}

pub fn mine(ctx: &mut Ctx) -> CliResult<()> {
    let (_, collection) = ctx.collection()?;
    let (spath, sessions) = ctx.sessions(&collection)?;
    let (splitpath, split) = ctx.split(&sessions)?;
    let rpath = ctx.input(workdir::REFORMULATED)?;
    let reformed = read_reformulated(open(&rpath)?, &rpath)?;
    let (ppath, table) = ctx.prj_table()?;
    let (ipath, index) = ctx.index()?;
    let initial = ctx.initial_params()?;
    let instances = mine_instances(
        &split.train,
        &reformed,
        &table,
        Retriever::new(&index, &initial),
        ctx.cfg.prj.mode,
        &ctx.cfg.supervision,
    )?;
    let mut w = ctx.work.create(workdir::INSTANCES)?;
    write_instances(&instances, &mut w)?;
    finish(w, workdir::INSTANCES)?;
    ctx.record("mine", &[spath, splitpath, rpath, ppath, ipath], &[workdir::INSTANCES])?;
    let pseudo = instances.iter().filter(|i| i.positives.len() > 1).count();
    println!("mined {} training instances, {pseudo} with a pseudo positive", instances.len());
    Ok(())
}

pub fn train_cmd(ctx: &mut Ctx) -> CliResult<()> {
    let ipath = ctx.input(workdir::INSTANCES)?;
    let instances = read_instances(open(&ipath)?, &ipath)?;
    let (xpath, index) = ctx.index()?;
    let initial = ctx.initial_params()?;
    let (params, log) = train(&instances, &index, initial, &ctx.cfg.trainer, |epoch, _| {
        log::info!("epoch {epoch} done");
        None
    })?;
    let steps = log.steps.len() as u64;
    let mut w = ctx.work.create(workdir::CHECKPOINT)?;
    write_checkpoint(
        &mut w,
        &Checkpoint {
            params,
            seed: ctx.cfg.trainer.seed,
            steps,
        },
    )?;
    finish(w, workdir::CHECKPOINT)?;
    let mut w = ctx.work.create(workdir::TRAIN_LOG)?;
    log.write_csv(&mut w)?;
    finish(w, workdir::TRAIN_LOG)?;
    ctx.record("train", &[ipath, xpath], &[workdir::CHECKPOINT, workdir::TRAIN_LOG])?;
    for e in &log.epochs {
        println!("epoch {:>3}  mean loss {:.6}", e.epoch, e.mean_loss);
    }
    println!("trained {steps} steps on {} instances", instances.len());
    Ok(())
}

pub struct SearchArgs {
    pub untrained: bool,
    pub checkpoint: Option<PathBuf>,
    pub name: Option<String>,
    pub query: Option<EvalQuery>,
}

pub fn search(ctx: &mut Ctx, args: &SearchArgs) -> CliResult<()> {
    let (cpath, collection) = ctx.collection()?;
    let (spath, sessions) = ctx.sessions(&collection)?;
    let (splitpath, split) = ctx.split(&sessions)?;
    let (qpath, qrels) = ctx.qrels()?;
    let (ppath, table) = ctx.prj_table()?;
    let (ipath, index) = ctx.index()?;
    let (ckpt_path, params) = ctx.params(args.untrained, args.checkpoint.as_deref())?;
    let initial = ctx.initial_params()?;
    let history = history_source(ctx, &sessions, &index, &initial, &collection)?;
    let query = args.query.unwrap_or(ctx.cfg.eval.query);
    let settings = ReformulateSettings {
        selection: eval_selection(query, ctx.cfg.supervision.selection),
        max_tokens: ctx.cfg.supervision.max_tokens,
    };
    let queries = reformulate_sessions(&split.test, &qrels, &table, &history.bind(&collection), settings)?;
    let run = search_queries(Retriever::new(&index, &params), &queries, ctx.cfg.eval.depth)?;

    let name = args
        .name
        .clone()
        .unwrap_or_else(|| if args.untrained { "untrained" } else { "trained" }.to_string());
    let artifact = workdir::run_artifact(&name);
    let mut w = ctx.work.create(&artifact)?;
    write_run(&run, &name, &mut w)?;
    finish(w, &artifact)?;
    let mut inputs = vec![cpath, spath, splitpath, qpath, ppath, ipath];
    inputs.extend(ckpt_path);
    // Query type is part of the step name so runs with different inputs coexist.
    let step = format!("search:{name}:{}", serde_json::to_value(query).unwrap().as_str().unwrap());
    let hash = step_config_hash(&ctx.cfg, "search");
    ctx.work.record(&step, hash, &inputs, &[&artifact])?;
    println!("searched {} queries -> {}", run.len(), ctx.work.path(&artifact).display());
    Ok(())
}

fn load_runs(ctx: &Ctx, args: &[String]) -> CliResult<Vec<(String, PathBuf, Vec<RankedList<f64>>)>> {
    ctx.runs(args)?
        .into_iter()
        .map(|(name, p)| {
            let run = read_run(open(&p)?, &p)?;
            Ok((name, p, run))
        })
        .collect()
}

pub fn eval(ctx: &mut Ctx, run_args: &[String]) -> CliResult<()> {
    let (qpath, qrels) = ctx.qrels()?;
    let runs = load_runs(ctx, run_args)?;
    let mut reports: Vec<(String, Report)> = Vec::new();
    let mut outputs = Vec::new();
    for (name, _, run) in &runs {
        let report = evaluate(run, &qrels, &ctx.cfg.eval.metrics)?;
        let artifact = format!("reports/{name}.tsv");
        let mut w = ctx.work.create(&artifact)?;
        report.write_per_query(&mut w)?;
        finish(w, &artifact)?;
        outputs.push(artifact);
        reports.push((name.clone(), report));
    }
    let named: Vec<(&str, &Report)> = reports.iter().map(|(n, r)| (n.as_str(), r)).collect();
    let table = format_table(&named);
    let mut w = ctx.work.create("reports/summary.txt")?;
    w.write_all(table.as_bytes()).map_err(|e| CliError::io("writing summary", e))?;
    finish(w, "reports/summary.txt")?;
    outputs.push("reports/summary.txt".into());
    let mut inputs = vec![qpath];
    inputs.extend(runs.iter().map(|r| r.1.clone()));
    let outs: Vec<&str> = outputs.iter().map(String::as_str).collect();
    ctx.record("eval", &inputs, &outs)?;
    print!("{table}");
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum AnalyzeKind {
    PrjPortion,
    HistAboveCurrent,
    AblationTable,
}

pub fn analyze(ctx: &mut Ctx, kind: AnalyzeKind, run_args: &[String], seeds: &[u64]) -> CliResult<()> {
    match kind {
        AnalyzeKind::PrjPortion => {
            let (ppath, table) = ctx.prj_table()?;
            let rows = relevant_portion_by_turn(&table);
            let artifact = "analysis/prj_portion.csv";
            let mut w = ctx.work.create(artifact)?;
            write_portion_csv(&rows, &mut w)?;
            finish(w, artifact)?;
            ctx.record("analyze:prj_portion", &[ppath], &[artifact])?;
            println!("n,portion");
            for (n, p) in rows {
                println!("{n},{p:.6}");
            }
        }
        AnalyzeKind::HistAboveCurrent => {
            let (_, collection) = ctx.collection()?;
            let (spath, sessions) = ctx.sessions(&collection)?;
            let (qpath, qrels) = ctx.qrels()?;
            let runs = load_runs(ctx, run_args)?;
            let results: Vec<(String, _)> = runs
                .iter()
                .map(|(name, _, run)| (name.clone(), historical_gold_above_current(run, &sessions, &qrels)))
                .collect();
            let named: Vec<(&str, _)> = results.iter().map(|(n, r)| (n.as_str(), r)).collect();
            let flags = "analysis/hist_above_current.csv";
            let mut w = ctx.work.create(flags)?;
            write_hist_above_csv(&named, &mut w)?;
            finish(w, flags)?;
            let summary = "analysis/hist_above_current_summary.csv";
            let mut text = format!("metric,{}\n", results.iter().map(|r| r.0.as_str()).collect::<Vec<_>>().join(","));
            text.push_str(&format!(
                "percentage,{}\n",
                results.iter().map(|r| format!("{:.4}", r.1.percentage)).collect::<Vec<_>>().join(",")
            ));
            let mut w = ctx.work.create(summary)?;
            w.write_all(text.as_bytes()).map_err(|e| CliError::io("writing summary", e))?;
            finish(w, summary)?;
            let mut inputs = vec![spath, qpath];
            inputs.extend(runs.iter().map(|r| r.1.clone()));
            ctx.record("analyze:hist_above_current", &inputs, &[flags, summary])?;
            print!("{text}");
        }
        AnalyzeKind::AblationTable => {
            let (cpath, collection) = ctx.collection()?;
            let (spath, sessions) = ctx.sessions(&collection)?;
            let seeds = if seeds.is_empty() { ctx.cfg.eval.seeds.clone() } else { seeds.to_vec() };
            let base = ctx.cfg.clone();
            let table = run_ablation::<f64>(&seeds, |seed| {
                Experiment::prepare(collection.clone(), &sessions, base.clone().with_seed(seed))
            })?;
            let artifact = "analysis/ablation.csv";
            let mut w = ctx.work.create(artifact)?;
            table.write_csv(&mut w)?;
            finish(w, artifact)?;
            ctx.record("analyze:ablation_table", &[cpath, spath], &[artifact])?;
            print!("{}", fs::read_to_string(ctx.work.path(artifact)).unwrap_or_default());
        }
    }
    Ok(())
}

pub struct ExportArgs {
    pub ids: Vec<String>,
    pub all: bool,
    pub untrained: bool,
    pub checkpoint: Option<PathBuf>,
    pub out: Option<PathBuf>,
}

/// Writes query and passage embeddings in the text layout. Query ids are
/// looked up in the reformulated queries, passage ids in the index.
pub fn export_embeddings(ctx: &mut Ctx, args: &ExportArgs) -> CliResult<()> {
    if args.all == !args.ids.is_empty() {
        return Err(Error::Config("pass either --ids or --all".into()).into());
    }
    let (_, index) = ctx.index()?;
    let (_, params) = ctx.params(args.untrained, args.checkpoint.as_deref())?;
    let rpath = ctx.work.path(workdir::REFORMULATED);
    let queries: BTreeMap<String, ReformulatedQuery> = if rpath.exists() {
        let rpath = ctx.input(workdir::REFORMULATED)?;
        read_reformulated(open(&rpath)?, &rpath)?
            .into_iter()
            .map(|q| (q.query_id.clone(), q))
            .collect()
    } else {
        BTreeMap::new()
    };

    let ids: Vec<String> = if args.all {
        queries.keys().cloned().chain(index.ids().iter().cloned()).collect()
    } else {
        args.ids.clone()
    };
    let unresolved: Vec<&str> = ids
        .iter()
        .filter(|id| !queries.contains_key(*id) && index.row_of(id).is_none())
        .map(String::as_str)
        .collect();
    if !unresolved.is_empty() {
        return Err(Error::Validation(format!("unknown ids: {}", unresolved.join(", "))).into());
    }
    let vectors: Vec<(String, Vec<f64>)> = ids
        .iter()
        .map(|id| match queries.get(id) {
            Some(q) => (id.clone(), params.encode(&q.text).into_values()),
            None => (id.clone(), index.embedding(id).unwrap().to_vec()),
        })
        .collect();
    let rows: Vec<(String, &[f64])> = vectors.iter().map(|(id, v)| (id.clone(), v.as_slice())).collect();

    let out = args.out.clone().unwrap_or_else(|| ctx.work.path("exports/embeddings.txt"));
    if let Some(parent) = out.parent() {
        fs::create_dir_all(parent).map_err(|e| CliError::io(format!("creating {}", parent.display()), e))?;
    }
    let f = File::create(&out).map_err(|e| CliError::io(format!("creating {}", out.display()), e))?;
    write_embeddings_text(std::io::BufWriter::new(f), &rows)?;
    println!("exported {} embeddings -> {}", rows.len(), out.display());
    Ok(())
}

/// Every stage in order: the same functions the individual subcommands call.
pub fn pipeline(ctx: &mut Ctx) -> CliResult<()> {
    ingest(ctx)?;
    embed(ctx)?;
    index(ctx)?;
    prj(ctx)?;
    reformulate(ctx)?;
    mine(ctx)?;
    train_cmd(ctx)?;
    search(
        ctx,
        &SearchArgs {
            untrained: true,
            checkpoint: None,
            name: Some("baseline".into()),
            query: Some(EvalQuery::Raw),
        },
    )?;
    search(
        ctx,
        &SearchArgs {
            untrained: false,
            checkpoint: None,
            name: Some("trained".into()),
            query: None,
        },
    )?;
    let runs = vec!["baseline".to_string(), "trained".to_string()];
    eval(ctx, &runs)?;
    analyze(ctx, AnalyzeKind::PrjPortion, &[], &[])?;
    analyze(ctx, AnalyzeKind::HistAboveCurrent, &runs, &[])
}
