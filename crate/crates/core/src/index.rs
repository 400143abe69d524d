//! Exact top-k retrieval over frozen passage embeddings, and TREC run files.

use std::cmp::Ordering;
use std::collections::HashMap;
use std::io::{BufRead, Read, Write};
use std::path::Path;

use rayon::prelude::*;

use crate::corpus::Collection;
use crate::encode::{read_embeddings_binary, write_embeddings_binary, EmbeddingVector, Matrix, PassageEncoder};
use crate::error::{check_dim, Error, Result};
use crate::scalar::{dot, Scalar};

pub const DEFAULT_DEPTH: usize = 100;

#[derive(Debug, Clone, PartialEq)]
pub struct Hit<T> {
    pub passage_id: String,
    pub score: T,
}

/// Hits ordered by descending score, ties by ascending passage id.
#[derive(Debug, Clone, PartialEq)]
pub struct RankedList<T> {
    pub query_id: String,
    pub hits: Vec<Hit<T>>,
}

impl<T> RankedList<T> {
    /// 1-based rank of `passage_id`, if retrieved.
    pub fn rank_of(&self, passage_id: &str) -> Option<usize> {
        self.hits.iter().position(|h| h.passage_id == passage_id).map(|p| p + 1)
    }

    pub fn ids(&self) -> impl Iterator<Item = &str> {
        self.hits.iter().map(|h| h.passage_id.as_str())
    }
}

/// Immutable passage embedding matrix; row `i` belongs to `ids[i]`, ids ascending.
#[derive(Debug, Clone)]
pub struct DenseIndex<T> {
    ids: Vec<String>,
    rows: HashMap<String, usize>,
    matrix: Matrix<T>,
}

impl<T: Scalar> DenseIndex<T> {
    pub fn build(collection: &Collection, encoder: &PassageEncoder<T>) -> Result<Self> {
        if collection.is_empty() {
            return Err(Error::Validation("cannot index an empty collection".into()));
        }
        let embedded: Vec<(String, EmbeddingVector<T>)> = collection
            .values()
            .collect::<Vec<_>>()
            .par_iter()
            .map(|p| (p.id.clone(), encoder.encode(&p.text)))
            .collect();
        Self::from_embeddings(encoder.d_emb(), embedded)
    }

    /// Canonicalizes row order by id; duplicate ids are rejected.
    pub fn from_embeddings(d_emb: usize, mut rows: Vec<(String, EmbeddingVector<T>)>) -> Result<Self> {
        rows.sort_by(|a, b| a.0.cmp(&b.0));
        if let Some(w) = rows.windows(2).find(|w| w[0].0 == w[1].0) {
            return Err(Error::Validation(format!("duplicate passage id {:?} in index", w[0].0)));
        }
        let mut data = Vec::with_capacity(rows.len() * d_emb);
        let mut ids = Vec::with_capacity(rows.len());
        for (id, e) in rows {
            check_dim(d_emb, e.dim())?;
            data.extend_from_slice(e.values());
            ids.push(id);
        }
        let rows = ids.iter().enumerate().map(|(i, id)| (id.clone(), i)).collect();
        Ok(Self {
            matrix: Matrix::from_vec(ids.len(), d_emb, data)?,
            ids,
            rows,
        })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn d_emb(&self) -> usize {
        self.matrix.cols()
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn matrix(&self) -> &Matrix<T> {
        &self.matrix
    }

    pub fn row_of(&self, id: &str) -> Option<usize> {
        self.rows.get(id).copied()
    }

    pub fn embedding(&self, id: &str) -> Option<&[T]> {
        self.row_of(id).map(|r| self.matrix.row(r))
    }

    /// Exhaustive scan returning the top `min(k, len)` passages.
    pub fn search(&self, query_id: &str, qvec: &EmbeddingVector<T>, k: usize) -> Result<RankedList<T>> {
        check_dim(self.d_emb(), qvec.dim())?;
        if k == 0 {
            return Err(Error::Config("search depth k must be at least 1".into()));
        }
        let mut scored: Vec<(usize, T)> = (0..self.len())
            .map(|r| (r, dot(self.matrix.row(r), qvec.values())))
            .collect();
        // Rows are in ascending id order, so the row index breaks ties.
        let order = |a: &(usize, T), b: &(usize, T)| {
            b.1.partial_cmp(&a.1).unwrap_or(Ordering::Equal).then(a.0.cmp(&b.0))
        };
        let k = k.min(scored.len());
        if k < scored.len() {
            scored.select_nth_unstable_by(k - 1, order);
            scored.truncate(k);
        }
        scored.sort_unstable_by(order);
        Ok(RankedList {
            query_id: query_id.to_string(),
            hits: scored
                .into_iter()
                .map(|(r, score)| Hit { passage_id: self.ids[r].clone(), score })
                .collect(),
        })
    }

    /// Searches every query; output order matches input order.
    pub fn search_batch(&self, queries: &[(String, EmbeddingVector<T>)], k: usize) -> Result<Vec<RankedList<T>>> {
        queries.par_iter().map(|(qid, q)| self.search(qid, q, k)).collect()
    }

    /// Same layout as the embedding export, rows in id order.
    pub fn write<W: Write>(&self, w: W) -> Result<()> {
        let rows: Vec<(String, &[T])> = self
            .ids
            .iter()
            .enumerate()
            .map(|(i, id)| (id.clone(), self.matrix.row(i)))
            .collect();
        write_embeddings_binary(w, self.d_emb(), &rows)
    }

    pub fn read<R: Read>(r: R) -> Result<Self> {
        let (d_emb, rows) = read_embeddings_binary::<T, _>(r)?;
        let rows = rows
            .into_iter()
            .map(|(id, v)| EmbeddingVector::new(v).map(|e| (id, e)))
            .collect::<Result<Vec<_>>>()?;
        Self::from_embeddings(d_emb, rows)
    }
}

/// TREC run lines: `<qid> Q0 <docid> <rank> <score> <tag>`, scores with 6 decimals.
pub fn write_run<T: Scalar, W: Write>(lists: &[RankedList<T>], tag: &str, mut w: W) -> Result<()> {
    for list in lists {
        for (i, h) in list.hits.iter().enumerate() {
            writeln!(w, "{} Q0 {} {} {:.6} {}", list.query_id, h.passage_id, i + 1, h.score.as_f64(), tag)
                .map_err(|e| Error::io("writing run", e))?;
        }
    }
    w.flush().map_err(|e| Error::io("writing run", e))
}

/// Parses a run file. Queries keep their first-appearance order; each query's
/// ranks must be exactly `1..=n` in order.
pub fn read_run<R: BufRead>(r: R, path: &Path) -> Result<Vec<RankedList<f64>>> {
    let mut lists: Vec<RankedList<f64>> = Vec::new();
    let mut pos: HashMap<String, usize> = HashMap::new();
    for (i, line) in r.lines().enumerate() {
        let n = i + 1;
        let line = line.map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
        if line.trim().is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split_whitespace().collect();
        if f.len() != 6 {
            return Err(Error::parse(path, n, format!("expected 6 fields, found {}", f.len())));
        }
        let rank: usize = f[3].parse().map_err(|_| Error::parse(path, n, format!("bad rank {:?}", f[3])))?;
        let score: f64 = f[4].parse().map_err(|_| Error::parse(path, n, format!("bad score {:?}", f[4])))?;
        let slot = *pos.entry(f[0].to_string()).or_insert_with(|| {
            lists.push(RankedList { query_id: f[0].to_string(), hits: Vec::new() });
            lists.len() - 1
        });
        let list = &mut lists[slot];
        if rank != list.hits.len() + 1 {
            return Err(Error::Validation(format!(
                "{}:{n}: query {} has rank {rank} where {} was expected",
                path.display(),
                f[0],
                list.hits.len() + 1
            )));
        }
        if list.hits.iter().any(|h| h.passage_id == f[2]) {
            return Err(Error::Validation(format!(
                "{}:{n}: passage {} repeated for query {}",
                path.display(),
                f[2],
                f[0]
            )));
        }
        list.hits.push(Hit { passage_id: f[2].to_string(), score });
    }
    Ok(lists)
}
