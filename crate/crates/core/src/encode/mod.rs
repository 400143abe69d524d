//! Dual encoders over hashed lexical features.
//!
//! Passages: `normalize(Rᵀ · f(text))` with `R` a fixed `d_feat × d_emb`
//! projection drawn from a seeded generator. Queries: `Wᵀ · f(text)` with `W`
//! trainable and left unnormalized. Relevance is the dot product.

mod export;
mod features;
mod matrix;

pub use export::{
    read_embeddings_binary, read_embeddings_text, write_embeddings_binary, write_embeddings_text, EMBEDDING_MAGIC,
};
pub use features::{featurize, fnv1a64, tokenize, FeatureVector};
pub use matrix::Matrix;

use crate::error::{check_dim, Error, Result};
use crate::rng;
use crate::scalar::{dot, l2_norm, Scalar};

pub const DEFAULT_D_FEAT: usize = 4096;
pub const DEFAULT_D_EMB: usize = 128;

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingVector<T> {
    values: Vec<T>,
}

impl<T: Scalar> EmbeddingVector<T> {
    /// Fails on NaN or infinite entries.
    pub fn new(values: Vec<T>) -> Result<Self> {
        if let Some(pos) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::Numerical(format!("embedding entry {pos} is not finite")));
        }
        Ok(Self { values })
    }

    pub fn zeros(dim: usize) -> Self {
        Self { values: vec![T::zero(); dim] }
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn values(&self) -> &[T] {
        &self.values
    }

    pub fn norm(&self) -> T {
        l2_norm(&self.values)
    }

    pub fn is_zero(&self) -> bool {
        self.values.iter().all(|v| v.is_zero())
    }

    pub fn into_values(self) -> Vec<T> {
        self.values
    }
}

/// `S(q, p) = qᵀ p`.
pub fn similarity<T: Scalar>(q: &EmbeddingVector<T>, p: &EmbeddingVector<T>) -> Result<T> {
    check_dim(q.dim(), p.dim())?;
    Ok(dot(&q.values, &p.values))
}

/// `Mᵀ · f` for a sparse `f` indexing the rows of `M`.
pub(crate) fn project<T: Scalar>(m: &Matrix<T>, f: &FeatureVector<T>) -> Vec<T> {
    let mut out = vec![T::zero(); m.cols()];
    for &(k, w) in f.entries() {
        for (o, &r) in out.iter_mut().zip(m.row(k as usize)) {
            *o += w * r;
        }
    }
    out
}

/// Frozen passage encoder. Nothing mutates it after construction.
#[derive(Debug, Clone)]
pub struct PassageEncoder<T> {
    projection_seed: u64,
    projection: Matrix<T>,
}

impl<T: Scalar> PassageEncoder<T> {
    /// Draws `R` row by row (row = feature index) with one uniform `[-1, 1)`
    /// value per entry from `rng::seeded(projection_seed)`.
    pub fn new(d_feat: usize, d_emb: usize, projection_seed: u64) -> Result<Self> {
        if d_feat == 0 || d_emb == 0 {
            return Err(Error::Config("d_feat and d_emb must be positive".into()));
        }
        let mut rng = rng::seeded(projection_seed);
        let data = (0..d_feat * d_emb).map(|_| T::of(rng::symmetric_f64(&mut rng))).collect();
        Ok(Self {
            projection_seed,
            projection: Matrix::from_vec(d_feat, d_emb, data)?,
        })
    }

    /// Uses an explicit projection, e.g. the identity.
    pub fn with_projection(projection: Matrix<T>) -> Self {
        Self { projection_seed: 0, projection }
    }

    pub fn d_feat(&self) -> usize {
        self.projection.rows()
    }

    pub fn d_emb(&self) -> usize {
        self.projection.cols()
    }

    pub fn projection_seed(&self) -> u64 {
        self.projection_seed
    }

    pub fn projection(&self) -> &Matrix<T> {
        &self.projection
    }

    pub fn featurize(&self, text: &str) -> FeatureVector<T> {
        featurize(text, self.d_feat())
    }

    /// Zero features map to the zero embedding, which is left unnormalized.
    pub fn encode(&self, text: &str) -> EmbeddingVector<T> {
        self.encode_features(&self.featurize(text))
    }

    pub fn encode_features(&self, f: &FeatureVector<T>) -> EmbeddingVector<T> {
        let mut v = project(&self.projection, f);
        let n = l2_norm(&v);
        if n > T::zero() {
            v.iter_mut().for_each(|x| *x /= n);
        }
        EmbeddingVector { values: v }
    }
}

/// Trainable query encoder `W` of shape `d_feat × d_emb`.
#[derive(Debug, Clone, PartialEq)]
pub struct QueryEncoderParams<T> {
    pub w: Matrix<T>,
}

impl<T: Scalar> QueryEncoderParams<T> {
    /// `W = R`: the untrained encoder scores by projected lexical overlap.
    pub fn from_passage_encoder(encoder: &PassageEncoder<T>) -> Self {
        Self { w: encoder.projection.clone() }
    }

    pub fn zeros(d_feat: usize, d_emb: usize) -> Self {
        Self { w: Matrix::zeros(d_feat, d_emb) }
    }

    pub fn d_feat(&self) -> usize {
        self.w.rows()
    }

    pub fn d_emb(&self) -> usize {
        self.w.cols()
    }

    /// `Wᵀ · f(text)` using this encoder's own feature dimension.
    pub fn encode(&self, text: &str) -> EmbeddingVector<T> {
        EmbeddingVector {
            values: project(&self.w, &featurize(text, self.d_feat())),
        }
    }

    pub fn encode_features(&self, f: &FeatureVector<T>) -> Result<EmbeddingVector<T>> {
        if f.dim() != self.d_feat() {
            return Err(Error::Config(format!(
                "query features have d_feat {} but the encoder expects {}",
                f.dim(),
                self.d_feat()
            )));
        }
        Ok(EmbeddingVector {
            values: project(&self.w, f),
        })
    }
}
