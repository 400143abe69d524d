use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use super::{query_id, Session};
use crate::error::{Error, Result};

/// Query id -> passage id -> relevance grade.
pub type Qrels = BTreeMap<String, BTreeMap<String, u32>>;

/// One grade-1 judgment per turn that carries a gold passage.
pub fn derive_qrels(sessions: &[Session]) -> Qrels {
    let mut qrels = Qrels::new();
    for s in sessions {
        for t in &s.turns {
            if let Some(gold) = &t.gold_passage_id {
                qrels
                    .entry(query_id(&s.session_id, t.turn_index))
                    .or_default()
                    .insert(gold.clone(), 1);
            }
        }
    }
    qrels
}

/// TREC qrels: `<qid> 0 <docid> <grade>`.
pub fn write_qrels<W: Write>(qrels: &Qrels, writer: W) -> Result<()> {
    let mut w = BufWriter::new(writer);
    for (qid, docs) in qrels {
        for (doc, grade) in docs {
            writeln!(w, "{qid} 0 {doc} {grade}").map_err(|e| Error::io("writing qrels", e))?;
        }
    }
    w.flush().map_err(|e| Error::io("writing qrels", e))
}

pub fn read_qrels(path: &Path) -> Result<Qrels> {
    let file = File::open(path).map_err(|e| Error::io(format!("opening {}", path.display()), e))?;
    let mut qrels = Qrels::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() != 4 {
            return Err(Error::parse(path, i + 1, format!("expected 4 fields, found {}", fields.len())));
        }
        let grade: i64 = fields[3]
            .parse()
            .map_err(|_| Error::parse(path, i + 1, format!("bad grade {:?}", fields[3])))?;
        if grade < 0 {
            return Err(Error::parse(path, i + 1, "negative relevance grade"));
        }
        qrels
            .entry(fields[0].to_string())
            .or_default()
            .insert(fields[2].to_string(), grade as u32);
    }
    Ok(qrels)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::Turn;

    fn turn(i: usize, gold: Option<&str>) -> Turn {
        Turn {
            turn_index: i,
            query_text: format!("q{i}"),
            gold_passage_id: gold.map(str::to_string),
            answer_text: None,
        }
    }

    #[test]
    fn one_entry_per_gold_turn() {
        let s = Session {
            session_id: "s1".into(),
            turns: vec![turn(1, Some("a")), turn(2, Some("b")), turn(3, Some("c"))],
        };
        let q = derive_qrels(&[s]);
        assert_eq!(q.len(), 3);
        assert!(q.values().all(|d| d.len() == 1 && d.values().all(|&g| g == 1)));
        assert_eq!(q["s1_2"]["b"], 1);
    }

    #[test]
    fn turns_without_gold_are_omitted() {
        let s = Session {
            session_id: "s1".into(),
            turns: vec![turn(1, Some("a")), turn(2, None)],
        };
        let q = derive_qrels(&[s]);
        assert_eq!(q.len(), 1);
        assert!(!q.contains_key("s1_2"));
    }

    #[test]
    fn shared_gold_gives_independent_entries() {
        let a = Session { session_id: "a".into(), turns: vec![turn(1, Some("p"))] };
        let b = Session { session_id: "b".into(), turns: vec![turn(1, Some("p"))] };
        let q = derive_qrels(&[a, b]);
        assert_eq!(q["a_1"]["p"], 1);
        assert_eq!(q["b_1"]["p"], 1);
    }

    #[test]
    fn trec_round_trip() {
        let s = Session {
            session_id: "s1".into(),
            turns: vec![turn(1, Some("a")), turn(2, Some("b"))],
        };
        let q = derive_qrels(&[s]);
        let mut buf = Vec::new();
        write_qrels(&q, &mut buf).unwrap();
        assert_eq!(String::from_utf8(buf.clone()).unwrap(), "s1_1 0 a 1\ns1_2 0 b 1\n");
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("q.txt");
        std::fs::write(&p, buf).unwrap();
        assert_eq!(read_qrels(&p).unwrap(), q);
    }
}
