//! Contrastive training of the query encoder.
//!
//! For an instance with positives `p_1..p_N` and negatives `n_1..n_M`
//! (explicit plus in-batch), each positive contributes
//! `-log(exp(s_i) / (exp(s_i) + Σ_j exp(s_j⁻)))`; the instance loss is their
//! mean and the batch loss is the mean over instances. Only `W` is trained;
//! passage embeddings come from the frozen index.

use std::collections::HashSet;
use std::io::{Read, Write};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::encode::{
    featurize, project, read_embeddings_binary, write_embeddings_binary, FeatureVector, Matrix, QueryEncoderParams,
};
use crate::error::{check_dim, Error, Result};
use crate::index::DenseIndex;
use crate::rng;
use crate::scalar::{dot, Scalar};
use crate::supervision::{NegativeSource, TrainingInstance};

/// Training objective.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossForm {
    /// Mean negative log-softmax of each positive.
    #[default]
    NegLog,
    /// Negated mean softmax probability of each positive (the un-logged form).
    Probability,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BatchItem<T> {
    pub features: FeatureVector<T>,
    pub positives: Vec<Vec<T>>,
    pub negatives: Vec<(Vec<T>, NegativeSource)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Batch<T> {
    pub items: Vec<BatchItem<T>>,
}

impl<T: Scalar> Batch<T> {
    /// Resolves embeddings and adds in-batch negatives: the gold passages of
    /// the other instances, minus anything this instance already uses.
    pub fn assemble(instances: &[&TrainingInstance], index: &DenseIndex<T>, d_feat: usize) -> Result<Self> {
        let lookup = |id: &str| {
            index
                .embedding(id)
                .map(<[T]>::to_vec)
                .ok_or_else(|| Error::Validation(format!("passage {id} is not in the index")))
        };
        let mut items = Vec::with_capacity(instances.len());
        for (j, inst) in instances.iter().enumerate() {
            let mut used: HashSet<&str> = inst.positives.iter().map(String::as_str).collect();
            used.extend(inst.negatives.iter().map(|n| n.id.as_str()));
            let mut negatives = inst
                .negatives
                .iter()
                .map(|n| lookup(&n.id).map(|e| (e, n.source)))
                .collect::<Result<Vec<_>>>()?;
            for (k, other) in instances.iter().enumerate() {
                if k != j && used.insert(other.gold()) {
                    negatives.push((lookup(other.gold())?, NegativeSource::InBatch));
                }
            }
            items.push(BatchItem {
                features: featurize(&inst.text, d_feat),
                positives: inst.positives.iter().map(|p| lookup(p)).collect::<Result<_>>()?,
                negatives,
            });
        }
        Ok(Self { items })
    }

    /// `(in_batch, retrieved, historical)` negative counts.
    pub fn source_counts(&self) -> (usize, usize, usize) {
        let mut c = (0, 0, 0);
        for (_, src) in self.items.iter().flat_map(|i| &i.negatives) {
            match src {
                NegativeSource::InBatch => c.0 += 1,
                NegativeSource::Retrieved => c.1 += 1,
                NegativeSource::Historical => c.2 += 1,
            }
        }
        c
    }
}

/// Softmax of `[own, negs...]` with max shifting; returns `(log-sum-exp, probabilities)`.
fn softmax_with<T: Scalar>(own: T, negs: &[T]) -> (T, Vec<T>) {
    let max = negs.iter().fold(own, |m, &s| m.max(s));
    let mut probs: Vec<T> = std::iter::once(own).chain(negs.iter().copied()).map(|s| (s - max).exp()).collect();
    let z: T = probs.iter().copied().sum();
    probs.iter_mut().for_each(|p| *p /= z);
    (max + z.ln(), probs)
}

/// Instance loss from similarity scores alone.
pub fn instance_loss<T: Scalar>(pos_scores: &[T], neg_scores: &[T], form: LossForm) -> T {
    let n = T::of(pos_scores.len() as f64);
    pos_scores
        .iter()
        .map(|&s| {
            let (lse, probs) = softmax_with(s, neg_scores);
            match form {
                LossForm::NegLog => lse - s,
                LossForm::Probability => -probs[0],
            }
        })
        .sum::<T>()
        / n
}

/// Batch loss and its exact gradient with respect to `W`.
///
/// The query embedding is `Wᵀx`, so `∂L/∂W = x ⊗ ∂L/∂q` summed over instances.
pub fn loss_and_grad<T: Scalar>(params: &QueryEncoderParams<T>, batch: &Batch<T>, form: LossForm) -> Result<(T, Matrix<T>)> {
    let d_emb = params.d_emb();
    let mut grad = Matrix::zeros(params.d_feat(), d_emb);
    let mut total = T::zero();
    let mut pending: Vec<(&FeatureVector<T>, Vec<T>)> = Vec::with_capacity(batch.items.len());
    for item in &batch.items {
        if item.positives.is_empty() {
            log::warn!("batch item without positives skipped");
            continue;
        }
        check_dim(params.d_feat(), item.features.dim())?;
        for e in item.positives.iter().chain(item.negatives.iter().map(|n| &n.0)) {
            check_dim(d_emb, e.len())?;
        }
        let q = project(&params.w, &item.features);
        let neg_scores: Vec<T> = item.negatives.iter().map(|(e, _)| dot(&q, e)).collect();
        let inv_n = T::one() / T::of(item.positives.len() as f64);
        let mut dq = vec![T::zero(); d_emb];
        let mut loss = T::zero();
        for pos in &item.positives {
            let s = dot(&q, pos);
            let (lse, probs) = softmax_with(s, &neg_scores);
            // Coefficients of dℓ/dq on the positive and on each negative.
            let (own_coef, neg_scale) = match form {
                LossForm::NegLog => {
                    loss += lse - s;
                    (probs[0] - T::one(), T::one())
                }
                LossForm::Probability => {
                    let p0 = probs[0];
                    loss -= p0;
                    (-p0 * (T::one() - p0), p0)
                }
            };
            let c = own_coef * inv_n;
            dq.iter_mut().zip(pos).for_each(|(d, &e)| *d += c * e);
            for ((e, _), &p) in item.negatives.iter().zip(&probs[1..]) {
                let c = neg_scale * p * inv_n;
                dq.iter_mut().zip(e).for_each(|(d, &x)| *d += c * x);
            }
        }
        total += loss * inv_n;
        pending.push((&item.features, dq));
    }
    if pending.is_empty() {
        return Err(Error::Validation("batch has no instance with a positive".into()));
    }
    let inv_b = T::one() / T::of(pending.len() as f64);
    for (features, dq) in pending {
        for &(k, x) in features.entries() {
            let c = x * inv_b;
            grad.row_mut(k as usize).iter_mut().zip(&dq).for_each(|(g, &d)| *g += c * d);
        }
    }
    Ok((total * inv_b, grad))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 3e-5,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(Error::Config(format!("learning rate must be positive, got {}", self.lr)));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::Config("Adam betas must lie in [0, 1)".into()));
        }
        if !(self.eps.is_finite() && self.eps > 0.0) {
            return Err(Error::Config("Adam epsilon must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<T> {
    pub m: Matrix<T>,
    pub v: Matrix<T>,
    pub t: u64,
    pub config: AdamConfig,
}

impl<T: Scalar> AdamState<T> {
    pub fn new(rows: usize, cols: usize, config: AdamConfig) -> Self {
        Self {
            m: Matrix::zeros(rows, cols),
            v: Matrix::zeros(rows, cols),
            t: 0,
            config,
        }
    }
}

/// One bias-corrected Adam update of `W`. A non-finite gradient aborts
/// before anything is modified; an update that overflows `W` aborts after.
pub fn adam_step<T: Scalar>(params: &mut QueryEncoderParams<T>, state: &mut AdamState<T>, grad: &Matrix<T>) -> Result<()> {
    check_dim(params.w.rows(), grad.rows())?;
    check_dim(params.w.cols(), grad.cols())?;
    check_dim(state.m.as_slice().len(), grad.as_slice().len())?;
    if let Some(pos) = grad.as_slice().iter().position(|g| !g.is_finite()) {
        return Err(Error::Numerical(format!(
            "non-finite gradient at row {}, column {} (step {})",
            pos / grad.cols(),
            pos % grad.cols(),
            state.t + 1
        )));
    }
    state.t += 1;
    let cfg = state.config;
    let (b1, b2) = (T::of(cfg.beta1), T::of(cfg.beta2));
    let bc1 = T::one() - T::of(cfg.beta1.powi(state.t as i32));
    let bc2 = T::one() - T::of(cfg.beta2.powi(state.t as i32));
    let (lr, eps) = (T::of(cfg.lr), T::of(cfg.eps));
    let w = params.w.as_mut_slice();
    let m = state.m.as_mut_slice();
    let v = state.v.as_mut_slice();
    for (i, &g) in grad.as_slice().iter().enumerate() {
        m[i] = b1 * m[i] + (T::one() - b1) * g;
        v[i] = b2 * v[i] + (T::one() - b2) * g * g;
        let m_hat = m[i] / bc1;
        let v_hat = v[i] / bc2;
        w[i] -= lr * m_hat / (v_hat.sqrt() + eps);
    }
    if let Some(pos) = w.iter().position(|x| !x.is_finite()) {
        return Err(Error::Numerical(format!(
            "weight at row {}, column {} overflowed (step {})",
            pos / grad.cols(),
            pos % grad.cols(),
            state.t
        )));
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub loss: LossForm,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let adam = AdamConfig::default();
        Self {
            lr: adam.lr,
            beta1: adam.beta1,
            beta2: adam.beta2,
            eps: adam.eps,
            batch_size: 32,
            epochs: 10,
            seed: 0,
            loss: LossForm::NegLog,
        }
    }
}

impl TrainConfig {
    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.adam().validate()?;
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepRecord {
    pub step: u64,
    pub epoch: usize,
    pub loss: f64,
    pub grad_norm: f64,
    pub n_in_batch: usize,
    pub n_retrieved: usize,
    pub n_historical: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub mean_loss: f64,
    /// Value returned by the per-epoch evaluation hook.
    pub eval: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainLog {
    pub steps: Vec<StepRecord>,
    pub epochs: Vec<EpochRecord>,
}

impl TrainLog {
    /// CSV: `step,loss,grad_norm,n_inbatch,n_retrieved,n_historical`.
    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        let err = |e| Error::io("writing training log", e);
        writeln!(w, "step,loss,grad_norm,n_inbatch,n_retrieved,n_historical").map_err(err)?;
        for s in &self.steps {
            writeln!(
                w,
                "{},{},{},{},{},{}",
                s.step, s.loss, s.grad_norm, s.n_in_batch, s.n_retrieved, s.n_historical
            )
            .map_err(err)?;
        }
        w.flush().map_err(err)
    }
}

/// Trains `W` from `initial`. Instances are reshuffled every epoch with the
/// stream keyed on `(seed, "epoch", e)` and cut into batches of `batch_size`
/// (the last one may be short). `on_epoch` runs after each epoch and may
/// return an evaluation value for the log.
pub fn train<T: Scalar>(
    instances: &[TrainingInstance],
    index: &DenseIndex<T>,
    initial: QueryEncoderParams<T>,
    config: &TrainConfig,
    mut on_epoch: impl FnMut(usize, &QueryEncoderParams<T>) -> Option<f64>,
) -> Result<(QueryEncoderParams<T>, TrainLog)> {
    config.validate()?;
    if instances.is_empty() {
        return Err(Error::Validation("no training instances".into()));
    }
    check_dim(index.d_emb(), initial.d_emb())?;
    for inst in instances {
        if inst.positives.is_empty() {
            return Err(Error::Validation(format!("instance {} has no positives", inst.query_id)));
        }
        for id in inst.positives.iter().chain(inst.negatives.iter().map(|n| &n.id)) {
            if index.row_of(id).is_none() {
                return Err(Error::Validation(format!("instance {} references unknown passage {id}", inst.query_id)));
            }
        }
    }

    let mut params = initial;
    let mut state = AdamState::new(params.d_feat(), params.d_emb(), config.adam());
    let mut log = TrainLog::default();
    let mut order: Vec<usize> = (0..instances.len()).collect();
    for epoch in 1..=config.epochs {
        order.shuffle(&mut rng::keyed(config.seed, &["epoch", &epoch.to_string()]));
        let mut epoch_loss = 0.0;
        let mut batches = 0usize;
        for chunk in order.chunks(config.batch_size) {
            let members: Vec<&TrainingInstance> = chunk.iter().map(|&i| &instances[i]).collect();
            let batch = Batch::assemble(&members, index, params.d_feat())?;
            let (loss, grad) = loss_and_grad(&params, &batch, config.loss)?;
            let loss = loss.as_f64();
            if !loss.is_finite() {
                return Err(Error::Numerical(format!("loss is {loss} at step {}", state.t + 1)));
            }
            adam_step(&mut params, &mut state, &grad)?;
            let (n_in_batch, n_retrieved, n_historical) = batch.source_counts();
            log.steps.push(StepRecord {
                step: state.t,
                epoch,
                loss,
                grad_norm: grad.frobenius_norm().as_f64(),
                n_in_batch,
                n_retrieved,
                n_historical,
            });
            epoch_loss += loss;
            batches += 1;
        }
        let eval = on_epoch(epoch, &params);
        log.epochs.push(EpochRecord {
            epoch,
            mean_loss: epoch_loss / batches as f64,
            eval,
        });
    }
    Ok((params, log))
}

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"HDRCKP01";

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint<T> {
    pub params: QueryEncoderParams<T>,
    pub seed: u64,
    pub steps: u64,
}

/// Header (magic, d_feat u32, d_emb u32, seed u64, steps u64, little-endian)
/// followed by `W` in the embedding-file layout, one record per feature row.
pub fn write_checkpoint<T: Scalar, W: Write>(mut w: W, ckpt: &Checkpoint<T>) -> Result<()> {
    let err = |e| Error::io("writing checkpoint", e);
    let p = &ckpt.params;
    w.write_all(CHECKPOINT_MAGIC).map_err(err)?;
    w.write_all(&(p.d_feat() as u32).to_le_bytes()).map_err(err)?;
    w.write_all(&(p.d_emb() as u32).to_le_bytes()).map_err(err)?;
    w.write_all(&ckpt.seed.to_le_bytes()).map_err(err)?;
    w.write_all(&ckpt.steps.to_le_bytes()).map_err(err)?;
    let rows: Vec<(String, &[T])> = (0..p.d_feat()).map(|k| (k.to_string(), p.w.row(k))).collect();
    write_embeddings_binary(w, p.d_emb(), &rows)
}

pub fn read_checkpoint<T: Scalar, R: Read>(mut r: R) -> Result<Checkpoint<T>> {
    let err = |e| Error::io("reading checkpoint", e);
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic).map_err(err)?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(Error::Validation("not a checkpoint file (bad magic)".into()));
    }
    let mut b4 = [0u8; 4];
    let mut b8 = [0u8; 8];
    r.read_exact(&mut b4).map_err(err)?;
    let d_feat = u32::from_le_bytes(b4) as usize;
    r.read_exact(&mut b4).map_err(err)?;
    let d_emb = u32::from_le_bytes(b4) as usize;
    r.read_exact(&mut b8).map_err(err)?;
    let seed = u64::from_le_bytes(b8);
    r.read_exact(&mut b8).map_err(err)?;
    let steps = u64::from_le_bytes(b8);
    let (d, rows) = read_embeddings_binary::<T, _>(r)?;
    check_dim(d_emb, d)?;
    check_dim(d_feat, rows.len())?;
    let mut data = Vec::with_capacity(d_feat * d_emb);
    for (k, (id, values)) in rows.into_iter().enumerate() {
        if id != k.to_string() {
            return Err(Error::Validation(format!("checkpoint row {k} is labelled {id:?}")));
        }
        data.extend(values);
    }
    let w = Matrix::from_vec(d_feat, d_emb, data)?;
    if !w.is_finite() {
        return Err(Error::Numerical("checkpoint contains non-finite weights".into()));
    }
    Ok(Checkpoint {
        params: QueryEncoderParams { w },
        seed,
        steps,
    })
}
