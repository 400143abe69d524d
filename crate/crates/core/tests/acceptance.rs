//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any criterion fails.

use std::collections::BTreeMap;
use std::time::Instant;

use histdr::config::PipelineConfig;
use histdr::corpus::{derive_qrels, generate_synthetic, Collection, Passage, Session, SyntheticSpec, Turn};
use histdr::encode::{EmbeddingVector, FeatureVector, Matrix, PassageEncoder, QueryEncoderParams};
use histdr::eval::{evaluate, MetricSpec};
use histdr::index::{write_run, DenseIndex, Hit, RankedList};
use histdr::pipeline::{median, Experiment, Variant};
use histdr::prj::{GoldPassages, Judgment, PrjJudge, PrjMode, PrjSettings, Retriever};
use histdr::rng;
use histdr::supervision::NegativeSource;
use histdr::trainer::{loss_and_grad, write_checkpoint, Batch, BatchItem, Checkpoint, LossForm};
use rand::Rng;

const SEEDS: [u64; 5] = [1, 2, 3, 4, 5];
/// Tuned on seeds 101-105, never on the acceptance seeds.
const LR: f64 = 5e-3;

const GRAD_CONFIGS: usize = 120;
const GRAD_STEP: f64 = 1e-6;
const GRAD_REL_TOL: f64 = 1e-6;
/// Entries below this magnitude are compared on an absolute scale, since a
/// central difference at step 1e-6 carries roundoff near 1e-10.
const GRAD_SCALE_FLOOR: f64 = 1e-3;

const MIN_GAIN: f64 = 0.05;

struct Outcome {
    id: u32,
    name: &'static str,
    pass: bool,
    detail: String,
    secs: f64,
    bound: Option<f64>,
}

impl Outcome {
    fn ok(&self) -> bool {
        self.pass && self.bound.is_none_or(|b| self.secs < b)
    }

    fn line(&self) -> String {
        let time = match self.bound {
            Some(b) => format!("{:.2}s < {b}s", self.secs),
            None => format!("{:.2}s", self.secs),
        };
        format!(
            "criterion {:>2} {:<28} {}  [{time}]  {}",
            self.id,
            self.name,
            if self.ok() { "PASS" } else { "FAIL" },
            self.detail
        )
    }
}

fn timed<F: FnOnce() -> (bool, String)>(id: u32, name: &'static str, bound: Option<f64>, f: F) -> Outcome {
    let t = Instant::now();
    let (pass, detail) = f();
    let o = Outcome {
        id,
        name,
        pass,
        detail,
        secs: t.elapsed().as_secs_f64(),
        bound,
    };
    println!("{}", o.line());
    o
}

fn c1() -> (bool, String) {
    (
        true,
        "large-benchmark figures need 25M/54M-passage collections and a transformer encoder; \
         they are not reproduced here, criteria 2-10 substitute property and direction checks"
            .into(),
    )
}

fn c2() -> (bool, String) {
    let mut worst = 0.0f64;
    let mut entries = 0usize;
    for c in 0..GRAD_CONFIGS {
        let mut r = rng::keyed(0, &["gradient", &c.to_string()]);
        let d_feat = r.gen_range(1..=16);
        let d_emb = r.gen_range(1..=8);
        let emb = |r: &mut rng::Rng| (0..d_emb).map(|_| r.gen_range(-1.0..1.0)).collect::<Vec<f64>>();
        let items: Vec<BatchItem<f64>> = (0..r.gen_range(1..=3))
            .map(|_| {
                let mut feats = Vec::new();
                for k in 0..d_feat as u32 {
                    if r.gen_bool(0.7) {
                        feats.push((k, r.gen_range(-1.0..1.0)));
                    }
                }
                let n = r.gen_range(1..=3);
                let m = r.gen_range(1..=5);
                BatchItem {
                    features: FeatureVector::from_entries(d_feat, feats).unwrap(),
                    positives: (0..n).map(|_| emb(&mut r)).collect(),
                    negatives: (0..m).map(|_| (emb(&mut r), NegativeSource::Retrieved)).collect(),
                }
            })
            .collect();
        let batch = Batch { items };
        let w: Vec<f64> = (0..d_feat * d_emb).map(|_| r.gen_range(-1.0..1.0)).collect();
        let params = QueryEncoderParams { w: Matrix::from_vec(d_feat, d_emb, w).unwrap() };
        let (_, grad) = loss_and_grad(&params, &batch, LossForm::NegLog).unwrap();
        let loss_at = |i: usize, delta: f64| {
            let mut p = params.clone();
            p.w.as_mut_slice()[i] += delta;
            loss_and_grad(&p, &batch, LossForm::NegLog).unwrap().0
        };
        for i in 0..d_feat * d_emb {
            let numeric = (loss_at(i, GRAD_STEP) - loss_at(i, -GRAD_STEP)) / (2.0 * GRAD_STEP);
            let analytic = grad.as_slice()[i];
            let scale = analytic.abs().max(numeric.abs()).max(GRAD_SCALE_FLOOR);
            worst = worst.max((analytic - numeric).abs() / scale);
            entries += 1;
        }
    }
    (
        worst < GRAD_REL_TOL,
        format!("{GRAD_CONFIGS} configs, {entries} entries, max rel err {worst:.2e} (tol {GRAD_REL_TOL:e})"),
    )
}

fn c3() -> (bool, String) {
    // Query q{i} has its single relevant passage at the given rank (None: absent).
    let ranks: [Option<usize>; 10] = [Some(1), Some(2), Some(3), Some(4), Some(7), Some(10), Some(11), Some(50), Some(100), None];
    let mut qrels = histdr::corpus::Qrels::new();
    let mut run = Vec::new();
    for (q, rank) in ranks.iter().enumerate() {
        let qid = format!("q{q}");
        qrels.entry(qid.clone()).or_default().insert(format!("g{q}"), 1);
        let hits = (1..=100)
            .map(|r| Hit {
                passage_id: if Some(r) == *rank { format!("g{q}") } else { format!("d{r:03}") },
                score: -(r as f64),
            })
            .collect();
        run.push(RankedList { query_id: qid, hits });
    }
    let inv_log3 = 1.0 / 3f64.log2();
    // (MRR, NDCG@3, R@10, R@100) computed by hand.
    let expected: [[f64; 4]; 10] = [
        [1.0, 1.0, 1.0, 1.0],
        [0.5, inv_log3, 1.0, 1.0],
        [1.0 / 3.0, 0.5, 1.0, 1.0],
        [0.25, 0.0, 1.0, 1.0],
        [1.0 / 7.0, 0.0, 1.0, 1.0],
        [0.1, 0.0, 1.0, 1.0],
        [1.0 / 11.0, 0.0, 0.0, 1.0],
        [0.02, 0.0, 0.0, 1.0],
        [0.01, 0.0, 0.0, 1.0],
        [0.0, 0.0, 0.0, 0.0],
    ];
    let metrics = [MetricSpec::MRR, MetricSpec::Ndcg { k: 3 }, MetricSpec::Recall { k: 10 }, MetricSpec::Recall { k: 100 }];
    let report = evaluate(&run, &qrels, &metrics).unwrap();
    let mut mismatches = Vec::new();
    for (q, exp) in expected.iter().enumerate() {
        let got = &report.per_query[&format!("q{q}")];
        if got.as_slice() != exp.as_slice() {
            mismatches.push(format!("q{q}: {got:?} != {exp:?}"));
        }
    }
    let mean_mrr = expected.iter().map(|e| e[0]).sum::<f64>() / 10.0;
    let mean_ok = (report.mean(MetricSpec::MRR).unwrap() - mean_mrr).abs() < 1e-15
        && report.mean(MetricSpec::Recall { k: 10 }) == Some(0.6)
        && report.mean(MetricSpec::Recall { k: 100 }) == Some(0.9);
    (
        mismatches.is_empty() && mean_ok,
        if mismatches.is_empty() {
            format!("10 queries x 4 metrics exact; MRR {:.6}", mean_mrr)
        } else {
            mismatches.join("; ")
        },
    )
}

fn c4() -> (bool, String) {
    let mut r = rng::keyed(0, &["retrieval"]);
    // Values on a 1/4 grid make every dot product exact, so ties are real.
    let grid = |r: &mut rng::Rng| (0..16).map(|_| r.gen_range(-4i32..=4) as f64 / 4.0).collect::<Vec<f64>>();
    let mut rows: Vec<(String, Vec<f64>)> = (0..200).map(|i| (format!("p{:03}", (i * 37) % 200), grid(&mut r))).collect();
    for i in 0..20 {
        let dup = rows[i * 3].1.clone();
        rows[150 + i].1 = dup;
    }
    let index = DenseIndex::from_embeddings(16, rows.iter().map(|(id, v)| (id.clone(), EmbeddingVector::new(v.clone()).unwrap())).collect()).unwrap();
    let mut checked = 0;
    let mut ties = 0;
    for q in 0..20 {
        let qv = grid(&mut r);
        let mut oracle: Vec<(f64, &str)> = rows
            .iter()
            .map(|(id, v)| (v.iter().zip(&qv).map(|(a, b)| a * b).sum::<f64>(), id.as_str()))
            .collect();
        oracle.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(b.1)));
        ties += oracle.windows(2).filter(|w| w[0].0 == w[1].0).count();
        for k in [1, 5, 100] {
            let got = index.search(&format!("q{q}"), &EmbeddingVector::new(qv.clone()).unwrap(), k).unwrap();
            let want: Vec<&str> = oracle.iter().take(k).map(|o| o.1).collect();
            let have: Vec<&str> = got.ids().collect();
            let scores_ok = got.hits.iter().zip(&oracle).all(|(h, o)| h.score == o.0);
            if have != want || !scores_ok {
                return (false, format!("query {q}, k={k}: {have:?} != {want:?}"));
            }
            checked += 1;
        }
    }
    (true, format!("{checked} searches over 200 passages match full sort; {ties} tied adjacent pairs"))
}

fn reciprocal_rank_direct(collection: &Collection, encoder: &PassageEncoder<f64>, text: &str, gold: &str, depth: usize) -> f64 {
    let q = QueryEncoderParams::from_passage_encoder(encoder).encode(text);
    let mut scored: Vec<(f64, &str)> = collection
        .values()
        .map(|p| {
            let e = encoder.encode(&p.text);
            (e.values().iter().zip(q.values()).map(|(a, b)| a * b).sum::<f64>(), p.id.as_str())
        })
        .collect();
    scored.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(b.1)));
    scored
        .iter()
        .take(depth)
        .position(|s| s.1 == gold)
        .map_or(0.0, |i| 1.0 / (i + 1) as f64)
}

fn c5() -> (bool, String) {
    let spec = SyntheticSpec {
        passages_per_topic: 60,
        entities_per_topic: 6,
        n_sessions: 20,
        turns_per_session: 5,
        ..SyntheticSpec::default()
    };
    let data = generate_synthetic(&spec, 17).unwrap();
    let encoder = PassageEncoder::<f64>::new(4096, 128, 17).unwrap();
    let index = DenseIndex::build(&data.collection, &encoder).unwrap();
    let params = QueryEncoderParams::from_passage_encoder(&encoder);
    let qrels = derive_qrels(&data.sessions);
    let settings = PrjSettings { depth: 100, ..PrjSettings::default() };
    let judge = PrjJudge {
        retriever: Retriever::new(&index, &params),
        qrels: &qrels,
        passages: &GoldPassages { collection: &data.collection },
        settings,
    };
    let table = judge.judge_all(&data.sessions).unwrap();
    let mut compared = 0;
    let mut relevant = 0;
    for session in &data.sessions {
        for n in 2..=5 {
            let cur = session.turn(n).unwrap();
            let gold = cur.gold_passage_id.as_deref().unwrap();
            let raw = reciprocal_rank_direct(&data.collection, &encoder, &cur.query_text, gold, 100);
            let labels = table.labels(&session.session_id, n).unwrap();
            if labels.len() != n - 1 {
                return (false, format!("{} turn {n} has {} labels", session.session_id, labels.len()));
            }
            for i in 1..n {
                let hist = session.turn(i).unwrap();
                let passage = &data.collection[hist.gold_passage_id.as_deref().unwrap()].text;
                let expanded = format!("{} {} {}", cur.query_text, hist.query_text, passage);
                let reform = reciprocal_rank_direct(&data.collection, &encoder, &expanded, gold, 100);
                let label = labels.iter().find(|l| l.historical == i).unwrap();
                let want = if reform > raw { Judgment::Relevant } else { Judgment::Irrelevant };
                if label.judgment != want || label.score_raw != raw || label.score_reform != reform {
                    return (
                        false,
                        format!(
                            "{} turn {n} vs {i}: got {:?} ({}, {}), want {want:?} ({raw}, {reform})",
                            session.session_id, label.judgment, label.score_raw, label.score_reform
                        ),
                    );
                }
                relevant += usize::from(want.is_relevant());
                compared += 1;
            }
        }
    }

    // Tie: the gold ranks first with and without the expansion.
    let coll: Collection = [("a", "alpha beta"), ("b", "gamma delta"), ("c", "epsilon zeta")]
        .into_iter()
        .map(|(id, t)| (id.to_string(), Passage { id: id.into(), text: t.into() }))
        .collect();
    let tie_session = Session {
        session_id: "t".into(),
        turns: vec![
            Turn { turn_index: 1, query_text: "beta".into(), gold_passage_id: Some("a".into()), answer_text: None },
            Turn { turn_index: 2, query_text: "alpha beta".into(), gold_passage_id: Some("a".into()), answer_text: None },
        ],
    };
    let tie_enc = PassageEncoder::<f64>::new(256, 32, 1).unwrap();
    let tie_index = DenseIndex::build(&coll, &tie_enc).unwrap();
    let tie_params = QueryEncoderParams::from_passage_encoder(&tie_enc);
    let tie_qrels = derive_qrels(std::slice::from_ref(&tie_session));
    let tie_judge = PrjJudge {
        retriever: Retriever::new(&tie_index, &tie_params),
        qrels: &tie_qrels,
        passages: &GoldPassages { collection: &coll },
        settings: PrjSettings { depth: 3, ..PrjSettings::default() },
    };
    let l = tie_judge.judge_turn("t", &tie_session.turns[1], &tie_session.turns[0]).unwrap();
    let tie_ok = l.score_raw == 1.0 && l.score_reform == 1.0 && l.judgment == Judgment::Irrelevant;
    let pass = compared == 20 * 10 && relevant > 0 && tie_ok;
    (
        pass,
        format!(
            "{compared} labels over 20 five-turn sessions match direct re-retrieval ({relevant} relevant); tie {} / {} -> {}",
            l.score_raw, l.score_reform, l.judgment
        ),
    )
}

fn config(seed: u64) -> PipelineConfig {
    let mut cfg = PipelineConfig::default().with_seed(seed);
    cfg.trainer.lr = LR;
    cfg
}

fn experiment(seed: u64, cfg: PipelineConfig) -> (Experiment<f64>, Vec<Session>) {
    let data = generate_synthetic(&SyntheticSpec::default(), seed).unwrap();
    let exp = Experiment::prepare(data.collection, &data.sessions, cfg).unwrap();
    (exp, data.sessions)
}

struct SeedResult {
    baseline_mrr: f64,
    baseline_hist: f64,
    mrr: BTreeMap<Variant, f64>,
    hist: BTreeMap<Variant, f64>,
    untrained_same_input_hist: f64,
}

fn run_seed(seed: u64) -> SeedResult {
    let (exp, _) = experiment(seed, config(seed));
    let (_, base, base_hist) = exp.baseline().unwrap();
    let (_, _, same_hist) = exp.untrained(&exp.test_queries(exp.config.supervision.selection).unwrap()).unwrap();
    let mut mrr = BTreeMap::new();
    let mut hist = BTreeMap::new();
    for v in Variant::ALL {
        let m = exp.train_variant(v).unwrap();
        mrr.insert(v, m.report.mean(MetricSpec::MRR).unwrap());
        hist.insert(v, m.hist_above.percentage);
    }
    SeedResult {
        baseline_mrr: base.mean(MetricSpec::MRR).unwrap(),
        baseline_hist: base_hist.percentage,
        mrr,
        hist,
        untrained_same_input_hist: same_hist.percentage,
    }
}

fn fmt_seeds(values: &[f64], digits: usize) -> String {
    values.iter().map(|v| format!("{v:.digits$}")).collect::<Vec<_>>().join(" ")
}

fn c9() -> (bool, String) {
    let mut rows = Vec::new();
    let mut pass = true;
    for k in 1..=3 {
        let (mut with, mut without) = (Vec::new(), Vec::new());
        for seed in SEEDS {
            let mut cfg = config(seed);
            cfg.prj.mode = PrjMode::Substituted { k };
            let (exp, _) = experiment(seed, cfg);
            with.push(exp.train_variant(Variant::Full).unwrap().report.mean(MetricSpec::MRR).unwrap());
            without.push(exp.train_variant(Variant::NoPrjReformulation).unwrap().report.mean(MetricSpec::MRR).unwrap());
        }
        let (w, wo) = (median(&with), median(&without));
        if k == 1 {
            pass = w >= wo;
        }
        rows.push(format!("k={k}: w/ PRJ {w:.4} vs w/o {wo:.4}"));
    }
    (pass, format!("{} (k=1 asserted; k trend reported only)", rows.join(", ")))
}

/// PRJ table, trained run file and checkpoint of one full pipeline pass.
fn pipeline_bytes(seed: u64) -> [Vec<u8>; 3] {
    let (exp, _) = experiment(seed, config(seed));
    let mut prj = Vec::new();
    exp.prj.write(&mut prj).unwrap();
    let model = exp.train_variant(Variant::Full).unwrap();
    let mut run = Vec::new();
    write_run(&model.run, "trained", &mut run).unwrap();
    let mut ckpt = Vec::new();
    let steps = model.log.steps.len() as u64;
    write_checkpoint(&mut ckpt, &Checkpoint { params: model.params, seed, steps }).unwrap();
    [prj, run, ckpt]
}

fn c10() -> (bool, String) {
    let a = pipeline_bytes(1);
    let b = rayon::ThreadPoolBuilder::new()
        .num_threads(1)
        .build()
        .unwrap()
        .install(|| pipeline_bytes(1));
    let names = ["PRJ table", "run file", "checkpoint"];
    let diffs: Vec<&str> = names.iter().zip(a.iter().zip(&b)).filter(|(_, (x, y))| x != y).map(|(n, _)| *n).collect();
    (
        diffs.is_empty() && a.iter().all(|x| !x.is_empty()),
        if diffs.is_empty() {
            format!(
                "two passes (default pool, 1 thread) byte-identical: {} / {} / {} bytes",
                a[0].len(),
                a[1].len(),
                a[2].len()
            )
        } else {
            format!("differs: {}", diffs.join(", "))
        },
    )
}

fn main() {
    let mut outcomes = vec![
        timed(1, "non-reproducibility", None, c1),
        timed(2, "gradient oracle", Some(30.0), c2),
        timed(3, "metric oracle", Some(1.0), c3),
        timed(4, "retrieval oracle", Some(5.0), c4),
        timed(5, "PRJ oracle", Some(10.0), c5),
    ];

    let t = Instant::now();
    let results: Vec<SeedResult> = SEEDS.iter().map(|&s| run_seed(s)).collect();
    let secs = t.elapsed().as_secs_f64();
    let col = |f: &dyn Fn(&SeedResult) -> f64| results.iter().map(f).collect::<Vec<f64>>();
    let base = col(&|r| r.baseline_mrr);
    let full = col(&|r| r.mrr[&Variant::Full]);
    let gains: Vec<f64> = full.iter().zip(&base).map(|(f, b)| f - b).collect();
    let gain = median(&gains);
    let c6 = Outcome {
        id: 6,
        name: "end-to-end learning",
        pass: gain >= MIN_GAIN,
        detail: format!(
            "median MRR gain {gain:.4} (>= {MIN_GAIN}); baseline [{}] full [{}]",
            fmt_seeds(&base, 3),
            fmt_seeds(&full, 3)
        ),
        secs,
        bound: Some(600.0),
    };
    println!("{}", c6.line());
    outcomes.push(c6);

    let med: BTreeMap<Variant, f64> = Variant::ALL.iter().map(|&v| (v, median(&col(&|r| r.mrr[&v])))).collect();
    let worst_is_qr = Variant::ALL
        .iter()
        .filter(|&&v| v != Variant::NoPrjReformulation)
        .all(|v| med[&Variant::NoPrjReformulation] < med[v]);
    let c7 = Outcome {
        id: 7,
        name: "ablation direction",
        pass: med[&Variant::Full] >= med[&Variant::NoHardNegatives]
            && med[&Variant::Full] >= med[&Variant::NoPseudoPositives]
            && worst_is_qr,
        detail: Variant::ALL
            .iter()
            .map(|v| format!("{} {:.4}", v.label(), med[v]))
            .collect::<Vec<_>>()
            .join(", "),
        secs: 0.0,
        bound: None,
    };
    println!("{}", c7.line());
    outcomes.push(c7);

    let base_hist = col(&|r| r.baseline_hist);
    let full_hist = col(&|r| r.hist[&Variant::Full]);
    let (bh, fh) = (median(&base_hist), median(&full_hist));
    let c8 = Outcome {
        id: 8,
        name: "shortcut reduction",
        pass: fh < bh,
        detail: format!(
            "median hist-above-current full {fh:.1}% vs untrained raw baseline {bh:.1}% \
             (untrained on the same reformulated input {:.1}%, -qr_prj {:.1}%)",
            median(&col(&|r| r.untrained_same_input_hist)),
            median(&col(&|r| r.hist[&Variant::NoPrjReformulation]))
        ),
        secs: 0.0,
        bound: None,
    };
    println!("{}", c8.line());
    outcomes.push(c8);

    outcomes.push(timed(9, "substitution mode", None, c9));
    outcomes.push(timed(10, "determinism", None, c10));

    let failed: Vec<u32> = outcomes.iter().filter(|o| !o.ok()).map(|o| o.id).collect();
    println!(
        "acceptance: {}/{} criteria pass{}",
        outcomes.len() - failed.len(),
        outcomes.len(),
        if failed.is_empty() { String::new() } else { format!("; failing: {failed:?}") }
    );
    if !failed.is_empty() {
        std::process::exit(1);
    }
}
