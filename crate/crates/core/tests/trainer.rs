use histdr::corpus::{generate_synthetic, SyntheticSpec};
use histdr::encode::{FeatureVector, Matrix, PassageEncoder, QueryEncoderParams};
use histdr::index::DenseIndex;
use histdr::rng;
use histdr::supervision::{NegativeSource, TaggedNegative, TrainingInstance};
use histdr::trainer::{loss_and_grad, train, Batch, BatchItem, LossForm, TrainConfig};
use proptest::prelude::*;
use rand::Rng;

fn random_item(r: &mut rng::Rng, d_feat: usize, d_emb: usize, n_pos: usize, n_neg: usize) -> BatchItem<f64> {
    let emb = |r: &mut rng::Rng| (0..d_emb).map(|_| r.gen_range(-1.0..1.0)).collect::<Vec<f64>>();
    let mut entries = Vec::new();
    for k in 0..d_feat as u32 {
        if r.gen_bool(0.6) {
            entries.push((k, r.gen_range(-1.0..1.0)));
        }
    }
    BatchItem {
        features: FeatureVector::from_entries(d_feat, entries).unwrap(),
        positives: (0..n_pos).map(|_| emb(r)).collect(),
        negatives: (0..n_neg).map(|_| (emb(r), NegativeSource::Retrieved)).collect(),
    }
}

fn random_params(r: &mut rng::Rng, d_feat: usize, d_emb: usize) -> QueryEncoderParams<f64> {
    let data = (0..d_feat * d_emb).map(|_| r.gen_range(-0.5..0.5)).collect();
    QueryEncoderParams { w: Matrix::from_vec(d_feat, d_emb, data).unwrap() }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(40))]

    #[test]
    fn gradient_matches_central_differences(seed in 0u64..10_000, form in prop_oneof![Just(LossForm::NegLog), Just(LossForm::Probability)]) {
        let mut r = rng::keyed(seed, &["grad"]);
        let (d_feat, d_emb) = (r.gen_range(1..=8), r.gen_range(1..=4));
        let items = (0..r.gen_range(1..=3)).map(|_| {
            let (n, m) = (r.gen_range(1..=3), r.gen_range(0..=4));
            random_item(&mut r, d_feat, d_emb, n, m)
        }).collect();
        let batch = Batch { items };
        let params = random_params(&mut r, d_feat, d_emb);
        let (_, grad) = loss_and_grad(&params, &batch, form).unwrap();
        let h = 1e-6;
        for i in 0..d_feat * d_emb {
            let mut plus = params.clone();
            plus.w.as_mut_slice()[i] += h;
            let mut minus = params.clone();
            minus.w.as_mut_slice()[i] -= h;
            let fd = (loss_and_grad(&plus, &batch, form).unwrap().0 - loss_and_grad(&minus, &batch, form).unwrap().0) / (2.0 * h);
            let a = grad.as_slice()[i];
            prop_assert!((a - fd).abs() <= 1e-7 * a.abs().max(1.0), "entry {i}: analytic {a} vs numeric {fd}");
        }
    }

    #[test]
    fn batch_order_does_not_change_loss_or_gradient(seed in 0u64..10_000) {
        let mut r = rng::keyed(seed, &["perm"]);
        let items: Vec<_> = (0..4).map(|_| random_item(&mut r, 6, 3, 2, 3)).collect();
        let params = random_params(&mut r, 6, 3);
        let mut reversed = items.clone();
        reversed.reverse();
        let (l1, g1) = loss_and_grad(&params, &Batch { items }, LossForm::NegLog).unwrap();
        let (l2, g2) = loss_and_grad(&params, &Batch { items: reversed }, LossForm::NegLog).unwrap();
        prop_assert!((l1 - l2).abs() < 1e-12);
        for (a, b) in g1.as_slice().iter().zip(g2.as_slice()) {
            prop_assert!((a - b).abs() < 1e-12);
        }
    }

    /// Adding a negative can only raise the loss.
    #[test]
    fn extra_negative_never_lowers_loss(seed in 0u64..10_000) {
        let mut r = rng::keyed(seed, &["extra"]);
        let item = random_item(&mut r, 5, 3, 2, 2);
        let params = random_params(&mut r, 5, 3);
        let mut more = item.clone();
        more.negatives.push((vec![0.3, -0.2, 0.9], NegativeSource::InBatch));
        let (l1, _) = loss_and_grad(&params, &Batch { items: vec![item] }, LossForm::NegLog).unwrap();
        let (l2, _) = loss_and_grad(&params, &Batch { items: vec![more] }, LossForm::NegLog).unwrap();
        prop_assert!(l2 >= l1);
    }
}

/// 200 instances on a small synthetic collection: each instance pairs a
/// passage's entity terms with the passage itself.
fn toy_problem() -> (Vec<TrainingInstance>, DenseIndex<f64>, PassageEncoder<f64>) {
    let spec = SyntheticSpec {
        n_topics: 4,
        passages_per_topic: 50,
        entities_per_topic: 10,
        n_sessions: 2,
        ..SyntheticSpec::default()
    };
    let data = generate_synthetic(&spec, 5).unwrap();
    let encoder = PassageEncoder::new(512, 16, 5).unwrap();
    let index = DenseIndex::build(&data.collection, &encoder).unwrap();
    let ids: Vec<&String> = data.collection.keys().collect();
    let instances = ids
        .iter()
        .enumerate()
        .map(|(i, id)| {
            let text: Vec<&str> = data.collection[*id].text.split(' ').take(3).collect();
            TrainingInstance {
                query_id: format!("q_{i}"),
                session_id: "q".into(),
                turn_index: i + 1,
                text: text.join(" "),
                positives: vec![(*id).clone()],
                negatives: vec![TaggedNegative {
                    id: ids[(i + 7) % ids.len()].clone(),
                    source: NegativeSource::Retrieved,
                }],
            }
        })
        .collect::<Vec<_>>();
    assert_eq!(instances.len(), 200);
    (instances, index, encoder)
}

fn toy_config() -> TrainConfig {
    TrainConfig {
        lr: 5e-3,
        epochs: 6,
        batch_size: 16,
        seed: 9,
        ..TrainConfig::default()
    }
}

#[test]
fn loss_decreases_and_index_stays_frozen() {
    let (instances, index, encoder) = toy_problem();
    let before = index.matrix().checksum();
    let (params, log) = train(&instances, &index, QueryEncoderParams::from_passage_encoder(&encoder), &toy_config(), |_, _| None).unwrap();
    assert_eq!(index.matrix().checksum(), before);
    assert_eq!(log.epochs.len(), 6);
    let first = log.epochs[0].mean_loss;
    let last = log.epochs.last().unwrap().mean_loss;
    assert!(last < first, "mean loss went from {first} to {last}");
    assert!(params.w.is_finite());
    assert_eq!(log.steps.len(), 6 * 200usize.div_ceil(16));
}

#[test]
fn training_is_deterministic() {
    let (instances, index, encoder) = toy_problem();
    let run = || train(&instances, &index, QueryEncoderParams::from_passage_encoder(&encoder), &toy_config(), |_, _| None).unwrap();
    let (a, la) = run();
    let (b, lb) = run();
    assert_eq!(a.w.checksum(), b.w.checksum());
    assert_eq!(la, lb);
}

#[test]
fn epoch_callback_sees_every_epoch() {
    let (instances, index, encoder) = toy_problem();
    let mut seen = Vec::new();
    let (_, log) = train(&instances, &index, QueryEncoderParams::from_passage_encoder(&encoder), &toy_config(), |e, _| {
        seen.push(e);
        Some(e as f64)
    })
    .unwrap();
    assert_eq!(seen, (1..=6).collect::<Vec<_>>());
    assert_eq!(log.epochs[2].eval, Some(3.0));
}

#[test]
fn unknown_passage_is_rejected_before_training() {
    let (mut instances, index, encoder) = toy_problem();
    instances[3].negatives[0].id = "missing".into();
    let r = train(&instances, &index, QueryEncoderParams::from_passage_encoder(&encoder), &toy_config(), |_, _| None);
    assert!(r.is_err());
}
