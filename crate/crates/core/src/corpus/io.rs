use std::collections::{BTreeMap, HashSet};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Collection, Passage, Session, Turn};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, Default)]
pub struct LoadOptions {
    /// Accept passages whose text is empty.
    pub allow_empty_text: bool,
}

#[derive(Serialize, Deserialize)]
struct PassageRecord {
    id: String,
    text: String,
}

#[derive(Serialize, Deserialize)]
struct SessionRecord {
    session_id: String,
    turns: Vec<TurnRecord>,
}

#[derive(Serialize, Deserialize)]
struct TurnRecord {
    turn_index: usize,
    query: String,
    gold_passage_id: Option<String>,
    answer: Option<String>,
}

fn open(path: &Path) -> Result<BufReader<File>> {
    File::open(path)
        .map(BufReader::new)
        .map_err(|e| Error::io(format!("opening {}", path.display()), e))
}

/// Non-blank lines with their 1-based line numbers.
fn records<R: Read>(reader: BufReader<R>, path: &Path) -> Result<Vec<(usize, String)>> {
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
        if !line.trim().is_empty() {
            out.push((i + 1, line));
        }
    }
    Ok(out)
}

pub fn load_collection(path: &Path, options: LoadOptions) -> Result<Collection> {
    read_collection(open(path)?, path, options)
}

/// Parses a line-delimited collection. `path` is only used in error messages.
pub fn read_collection<R: Read>(reader: BufReader<R>, path: &Path, options: LoadOptions) -> Result<Collection> {
    let mut collection = BTreeMap::new();
    for (line, raw) in records(reader, path)? {
        let rec: PassageRecord =
            serde_json::from_str(&raw).map_err(|e| Error::parse(path, line, e.to_string()))?;
        if rec.id.is_empty() {
            return Err(Error::parse(path, line, "passage id is empty"));
        }
        if rec.text.is_empty() && !options.allow_empty_text {
            return Err(Error::Validation(format!(
                "passage {:?} (line {line}) has empty text",
                rec.id
            )));
        }
        if collection.contains_key(&rec.id) {
            return Err(Error::Validation(format!(
                "duplicate passage id {:?} at line {line}",
                rec.id
            )));
        }
        collection.insert(
            rec.id.clone(),
            Passage {
                id: rec.id,
                text: rec.text,
            },
        );
    }
    Ok(collection)
}

pub fn write_collection<W: Write>(collection: &Collection, writer: W) -> Result<()> {
    let mut w = BufWriter::new(writer);
    for p in collection.values() {
        let rec = PassageRecord {
            id: p.id.clone(),
            text: p.text.clone(),
        };
        write_json_line(&mut w, &rec)?;
    }
    w.flush().map_err(|e| Error::io("writing collection", e))
}

pub fn load_sessions(path: &Path, collection: &Collection) -> Result<Vec<Session>> {
    read_sessions(open(path)?, path, collection)
}

pub fn read_sessions<R: Read>(reader: BufReader<R>, path: &Path, collection: &Collection) -> Result<Vec<Session>> {
    let mut seen = HashSet::new();
    let mut sessions = Vec::new();
    for (line, raw) in records(reader, path)? {
        let rec: SessionRecord =
            serde_json::from_str(&raw).map_err(|e| Error::parse(path, line, e.to_string()))?;
        let sid = rec.session_id;
        if sid.is_empty() {
            return Err(Error::parse(path, line, "session id is empty"));
        }
        if !seen.insert(sid.clone()) {
            return Err(Error::Validation(format!("duplicate session id {sid:?} at line {line}")));
        }
        if rec.turns.is_empty() {
            return Err(Error::Validation(format!("session {sid:?} has no turns")));
        }
        let mut turns = Vec::with_capacity(rec.turns.len());
        for (pos, t) in rec.turns.into_iter().enumerate() {
            if t.turn_index != pos + 1 {
                return Err(Error::Validation(format!(
                    "session {sid:?}: turn at position {} has turn_index {}, expected {}",
                    pos + 1,
                    t.turn_index,
                    pos + 1
                )));
            }
            if t.query.trim().is_empty() {
                return Err(Error::Validation(format!(
                    "session {sid:?} turn {}: empty query",
                    t.turn_index
                )));
            }
            if let Some(gold) = &t.gold_passage_id {
                if !collection.contains_key(gold) {
                    return Err(Error::Validation(format!(
                        "session {sid:?} turn {}: gold passage {gold:?} not in collection",
                        t.turn_index
                    )));
                }
            }
            turns.push(Turn {
                turn_index: t.turn_index,
                query_text: t.query,
                gold_passage_id: t.gold_passage_id,
                answer_text: t.answer,
            });
        }
        sessions.push(Session {
            session_id: sid,
            turns,
        });
    }
    Ok(sessions)
}

pub fn write_sessions<W: Write>(sessions: &[Session], writer: W) -> Result<()> {
    let mut w = BufWriter::new(writer);
    for s in sessions {
        let rec = SessionRecord {
            session_id: s.session_id.clone(),
            turns: s
                .turns
                .iter()
                .map(|t| TurnRecord {
                    turn_index: t.turn_index,
                    query: t.query_text.clone(),
                    gold_passage_id: t.gold_passage_id.clone(),
                    answer: t.answer_text.clone(),
                })
                .collect(),
        };
        write_json_line(&mut w, &rec)?;
    }
    w.flush().map_err(|e| Error::io("writing sessions", e))
}

fn write_json_line<W: Write, T: Serialize>(w: &mut W, value: &T) -> Result<()> {
    serde_json::to_writer(&mut *w, value)
        .map_err(|e| Error::io("serializing record", std::io::Error::other(e)))?;
    w.write_all(b"\n").map_err(|e| Error::io("writing record", e))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn collection_from(s: &str) -> Result<Collection> {
        read_collection(BufReader::new(s.as_bytes()), Path::new("mem"), LoadOptions::default())
    }

    fn sessions_from(s: &str, c: &Collection) -> Result<Vec<Session>> {
        read_sessions(BufReader::new(s.as_bytes()), Path::new("mem"), c)
    }

    fn two() -> Collection {
        collection_from("{\"id\":\"p1\",\"text\":\"alpha\"}\n{\"id\":\"p2\",\"text\":\"beta\"}\n").unwrap()
    }

    #[test]
    fn loads_well_formed_records() {
        assert_eq!(two().len(), 2);
    }

    #[test]
    fn empty_file_is_empty_collection() {
        assert!(collection_from("").unwrap().is_empty());
    }

    #[test]
    fn duplicate_ids_rejected() {
        let err = collection_from("{\"id\":\"p1\",\"text\":\"a\"}\n{\"id\":\"p1\",\"text\":\"b\"}\n").unwrap_err();
        assert!(matches!(err, Error::Validation(m) if m.contains("duplicate")));
    }

    #[test]
    fn malformed_line_reports_line_number() {
        let err = collection_from("{\"id\":\"p1\",\"text\":\"a\"}\nnot json\n").unwrap_err();
        assert!(matches!(err, Error::Parse { line: 2, .. }));
    }

    #[test]
    fn empty_text_needs_opt_in() {
        let src = "{\"id\":\"p1\",\"text\":\"\"}\n";
        assert!(collection_from(src).is_err());
        let opts = LoadOptions { allow_empty_text: true };
        assert_eq!(read_collection(BufReader::new(src.as_bytes()), Path::new("m"), opts).unwrap().len(), 1);
    }

    #[test]
    fn contiguous_turns_accepted() {
        let c = two();
        let s = sessions_from(
            r#"{"session_id":"s1","turns":[{"turn_index":1,"query":"a","gold_passage_id":"p1","answer":null},{"turn_index":2,"query":"b","gold_passage_id":null,"answer":"x"},{"turn_index":3,"query":"c","gold_passage_id":"p2","answer":null}]}"#,
            &c,
        )
        .unwrap();
        assert_eq!(s[0].turns.len(), 3);
        assert_eq!(s[0].turns[1].answer_text.as_deref(), Some("x"));
    }

    #[test]
    fn gap_in_turn_index_rejected() {
        let c = two();
        let err = sessions_from(
            r#"{"session_id":"s1","turns":[{"turn_index":1,"query":"a","gold_passage_id":null,"answer":null},{"turn_index":3,"query":"b","gold_passage_id":null,"answer":null}]}"#,
            &c,
        )
        .unwrap_err();
        assert!(matches!(err, Error::Validation(m) if m.contains("turn_index 3")));
    }

    #[test]
    fn dangling_gold_names_session_and_turn() {
        let c = two();
        let err = sessions_from(
            r#"{"session_id":"s9","turns":[{"turn_index":1,"query":"a","gold_passage_id":"p7","answer":null}]}"#,
            &c,
        )
        .unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("s9") && msg.contains("turn 1") && msg.contains("p7"), "{msg}");
    }

    #[test]
    fn collection_round_trip() {
        let c = two();
        let mut buf = Vec::new();
        write_collection(&c, &mut buf).unwrap();
        assert_eq!(collection_from(std::str::from_utf8(&buf).unwrap()).unwrap(), c);
    }
}
