//! Embedding files.
//!
//! Binary layout (all integers little-endian):
//!
//! ```text
//! magic   8 bytes  "HDREMB01"
//! d_emb   u32
//! count   u64
//! count × { id_len u32, id bytes (UTF-8), d_emb × f64 }
//! ```
//!
//! Text layout: one `id<TAB>v1,v2,...` line per vector, values printed in the
//! shortest form that parses back to the same `f64`.

use std::io::{BufRead, Read, Write};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

pub const EMBEDDING_MAGIC: &[u8; 8] = b"HDREMB01";

fn io_err(e: std::io::Error) -> Error {
    Error::io("embedding file", e)
}

pub fn write_embeddings_binary<T: Scalar, W: Write>(
    mut w: W,
    d_emb: usize,
    rows: &[(String, &[T])],
) -> Result<()> {
    w.write_all(EMBEDDING_MAGIC).map_err(io_err)?;
    w.write_all(&(d_emb as u32).to_le_bytes()).map_err(io_err)?;
    w.write_all(&(rows.len() as u64).to_le_bytes()).map_err(io_err)?;
    for (id, values) in rows {
        if values.len() != d_emb {
            return Err(Error::Dimension { expected: d_emb, actual: values.len() });
        }
        w.write_all(&(id.len() as u32).to_le_bytes()).map_err(io_err)?;
        w.write_all(id.as_bytes()).map_err(io_err)?;
        for v in *values {
            w.write_all(&v.as_f64().to_le_bytes()).map_err(io_err)?;
        }
    }
    w.flush().map_err(io_err)
}

fn read_exact<const N: usize, R: Read>(r: &mut R) -> Result<[u8; N]> {
    let mut buf = [0u8; N];
    r.read_exact(&mut buf).map_err(io_err)?;
    Ok(buf)
}

/// Returns `(d_emb, rows)`.
pub fn read_embeddings_binary<T: Scalar, R: Read>(mut r: R) -> Result<(usize, Vec<(String, Vec<T>)>)> {
    let magic: [u8; 8] = read_exact(&mut r)?;
    if &magic != EMBEDDING_MAGIC {
        return Err(Error::Validation("not an embedding file (bad magic)".into()));
    }
    let d_emb = u32::from_le_bytes(read_exact(&mut r)?) as usize;
    let count = u64::from_le_bytes(read_exact(&mut r)?) as usize;
    let mut rows = Vec::with_capacity(count.min(1 << 20));
    for _ in 0..count {
        let len = u32::from_le_bytes(read_exact(&mut r)?) as usize;
        let mut id = vec![0u8; len];
        r.read_exact(&mut id).map_err(io_err)?;
        let id = String::from_utf8(id).map_err(|_| Error::Validation("embedding id is not UTF-8".into()))?;
        let mut values = Vec::with_capacity(d_emb);
        for _ in 0..d_emb {
            values.push(T::of(f64::from_le_bytes(read_exact(&mut r)?)));
        }
        rows.push((id, values));
    }
    Ok((d_emb, rows))
}

pub fn write_embeddings_text<T: Scalar, W: Write>(mut w: W, rows: &[(String, &[T])]) -> Result<()> {
    for (id, values) in rows {
        let joined: Vec<String> = values.iter().map(|v| v.as_f64().to_string()).collect();
        writeln!(w, "{id}\t{}", joined.join(",")).map_err(io_err)?;
    }
    w.flush().map_err(io_err)
}

pub fn read_embeddings_text<R: BufRead>(r: R) -> Result<Vec<(String, Vec<f64>)>> {
    let mut out = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line = line.map_err(io_err)?;
        if line.is_empty() {
            continue;
        }
        let (id, values) = line
            .split_once('\t')
            .ok_or_else(|| Error::parse("<embeddings>", i + 1, "missing tab separator"))?;
        let values = values
            .split(',')
            .map(|v| v.parse::<f64>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|e| Error::parse("<embeddings>", i + 1, e.to_string()))?;
        out.push((id.to_string(), values));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn binary_round_trip(rows in proptest::collection::vec(("[a-z0-9_]{1,8}", proptest::collection::vec(-1e6f64..1e6, 3)), 0..6)) {
            let refs: Vec<(String, &[f64])> = rows.iter().map(|(id, v)| (id.clone(), v.as_slice())).collect();
            let mut buf = Vec::new();
            write_embeddings_binary(&mut buf, 3, &refs).unwrap();
            let (d, back) = read_embeddings_binary::<f64, _>(buf.as_slice()).unwrap();
            prop_assert_eq!(d, 3);
            prop_assert_eq!(back, rows);
        }
    }

    #[test]
    fn text_round_trip_reproduces_values() {
        let v = [0.1, -2.5e-7, 1.0 / 3.0, 12345.678];
        let mut buf = Vec::new();
        write_embeddings_text::<f64, _>(&mut buf, &[("q1".to_string(), &v[..])]).unwrap();
        let back = read_embeddings_text(buf.as_slice()).unwrap();
        assert_eq!(back, vec![("q1".to_string(), v.to_vec())]);
    }

    #[test]
    fn bad_magic_rejected() {
        assert!(read_embeddings_binary::<f64, _>(&b"NOTMAGIC\0\0\0\0"[..]).is_err());
    }
}
