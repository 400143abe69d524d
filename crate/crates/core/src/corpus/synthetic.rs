//! Synthetic topic-shift conversations.
//!
//! Each topic owns a disjoint content vocabulary made of aspect terms and
//! entity names; all topics share a pool of function words. A passage belongs
//! to one (topic, entity) pair and contains the entity's name terms, a sample of
//! the topic's aspect terms and some function words. Within a session every
//! topic is bound to one entity. The first turn on a topic names the entity;
//! follow-up turns on the same topic only ask about aspects, so their raw query
//! is ambiguous without the conversation history.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::seq::{index, SliceRandom};
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use super::{write_collection, write_sessions, Collection, Passage, Session, Turn};
use crate::error::{Error, Result};
use crate::rng;

const FUNCTION_WORDS: [&str; 32] = [
    "the", "of", "and", "what", "is", "a", "in", "to", "about", "how", "was", "were", "which", "who", "when",
    "did", "does", "for", "on", "with", "as", "by", "that", "this", "it", "from", "at", "are", "be", "an",
    "or", "its",
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ShiftSchedule {
    /// Round-robin over all topics: T1, T2, ..., Tk, T1, ...
    Alternate,
    /// Start on a uniform topic; before each later turn switch to a uniformly
    /// chosen different topic with probability `shift_prob`.
    Random { shift_prob: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticSpec {
    pub n_topics: usize,
    /// Aspect terms per topic.
    pub aspect_vocab: usize,
    pub entities_per_topic: usize,
    /// Name terms per entity.
    pub entity_terms: usize,
    pub passages_per_topic: usize,
    pub passage_aspect_terms: usize,
    pub passage_function_terms: usize,
    /// Size of the shared function-word pool.
    pub function_pool: usize,
    pub n_sessions: usize,
    pub turns_per_session: usize,
    pub query_aspect_terms: usize,
    pub query_function_terms: usize,
    pub schedule: ShiftSchedule,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            n_topics: 5,
            aspect_vocab: 60,
            entities_per_topic: 20,
            entity_terms: 2,
            passages_per_topic: 400,
            passage_aspect_terms: 10,
            passage_function_terms: 6,
            function_pool: 24,
            n_sessions: 50,
            turns_per_session: 8,
            query_aspect_terms: 2,
            query_function_terms: 2,
            schedule: ShiftSchedule::Random { shift_prob: 0.5 },
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::Config(format!("synthetic spec: {m}")));
        if self.n_topics < 2 {
            return fail("n_topics must be at least 2");
        }
        if self.aspect_vocab == 0 || self.entity_terms == 0 || self.entities_per_topic == 0 {
            return fail("aspect_vocab, entity_terms and entities_per_topic must be positive");
        }
        if self.passages_per_topic < self.entities_per_topic {
            return fail("passages_per_topic must be at least entities_per_topic");
        }
        if self.passage_aspect_terms == 0 || self.passage_aspect_terms > self.aspect_vocab {
            return fail("passage_aspect_terms must be in 1..=aspect_vocab");
        }
        if self.query_aspect_terms == 0 || self.query_aspect_terms > self.passage_aspect_terms {
            return fail("query_aspect_terms must be in 1..=passage_aspect_terms");
        }
        if self.function_pool == 0 && (self.passage_function_terms > 0 || self.query_function_terms > 0) {
            return fail("function words requested from an empty pool");
        }
        if self.n_sessions == 0 || self.turns_per_session == 0 {
            return fail("n_sessions and turns_per_session must be positive");
        }
        if let ShiftSchedule::Random { shift_prob } = self.schedule {
            if !(0.0..=1.0).contains(&shift_prob) {
                return fail("shift_prob must lie in [0, 1]");
            }
        }
        Ok(())
    }

    fn aspect_term(&self, topic: usize, j: usize) -> String {
        format!("t{}a{}", topic + 1, j + 1)
    }

    fn entity_term(&self, topic: usize, entity: usize, j: usize) -> String {
        format!("t{}e{}n{}", topic + 1, entity + 1, j + 1)
    }

    fn function_word(&self, j: usize) -> String {
        FUNCTION_WORDS
            .get(j)
            .map(|w| w.to_string())
            .unwrap_or_else(|| format!("fw{}", j + 1))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PassageTruth {
    pub id: String,
    /// 1-based topic number.
    pub topic: usize,
    /// 1-based entity number within the topic.
    pub entity: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TurnTruth {
    pub session_id: String,
    pub turn_index: usize,
    pub topic: usize,
    pub entity: usize,
    /// Whether the query names the entity.
    pub explicit: bool,
}

/// Ground truth of a generated dataset. Analysis only; the pipeline never reads it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticManifest {
    pub seed: u64,
    pub spec: SyntheticSpec,
    pub passages: Vec<PassageTruth>,
    pub turns: Vec<TurnTruth>,
}

impl SyntheticManifest {
    /// Topic sequence of one session, e.g. `["T1", "T2", "T1"]`.
    pub fn topic_sequence(&self, session_id: &str) -> Vec<String> {
        self.turns
            .iter()
            .filter(|t| t.session_id == session_id)
            .map(|t| format!("T{}", t.topic))
            .collect()
    }
}

#[derive(Debug, Clone)]
pub struct SyntheticDataset {
    pub collection: Collection,
    pub sessions: Vec<Session>,
    pub manifest: SyntheticManifest,
}

pub const COLLECTION_FILE: &str = "collection.jsonl";
pub const SESSIONS_FILE: &str = "sessions.jsonl";
pub const MANIFEST_FILE: &str = "manifest.json";

impl SyntheticDataset {
    /// Writes `collection.jsonl`, `sessions.jsonl` and `manifest.json` into `dir`.
    pub fn write_to(&self, dir: &Path) -> Result<[PathBuf; 3]> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(format!("creating {}", dir.display()), e))?;
        let create = |name: &str| {
            let p = dir.join(name);
            File::create(&p)
                .map(|f| (p.clone(), f))
                .map_err(|e| Error::io(format!("creating {}", p.display()), e))
        };
        let (cp, cf) = create(COLLECTION_FILE)?;
        write_collection(&self.collection, cf)?;
        let (sp, sf) = create(SESSIONS_FILE)?;
        write_sessions(&self.sessions, sf)?;
        let (mp, mf) = create(MANIFEST_FILE)?;
        let mut w = BufWriter::new(mf);
        serde_json::to_writer_pretty(&mut w, &self.manifest)
            .map_err(|e| Error::io("writing manifest", std::io::Error::other(e)))?;
        w.write_all(b"\n").and_then(|_| w.flush()).map_err(|e| Error::io("writing manifest", e))?;
        Ok([cp, sp, mp])
    }
}

/// Generates a dataset; a pure function of `(spec, seed)`.
pub fn generate_synthetic(spec: &SyntheticSpec, seed: u64) -> Result<SyntheticDataset> {
    spec.validate()?;
    let mut rng = rng::keyed(seed, &["synthetic", "passages"]);
    let pool = spec.function_pool;

    // (topic, entity, aspect indices, text)
    let mut drafts = Vec::with_capacity(spec.n_topics * spec.passages_per_topic);
    for topic in 0..spec.n_topics {
        for j in 0..spec.passages_per_topic {
            let entity = j % spec.entities_per_topic;
            let aspects = index::sample(&mut rng, spec.aspect_vocab, spec.passage_aspect_terms).into_vec();
            let mut words: Vec<String> = (0..spec.entity_terms).map(|k| spec.entity_term(topic, entity, k)).collect();
            words.extend(aspects.iter().map(|&a| spec.aspect_term(topic, a)));
            words.extend((0..spec.passage_function_terms).map(|_| spec.function_word(rng.gen_range(0..pool))));
            words.shuffle(&mut rng);
            drafts.push((topic, entity, aspects, words.join(" ")));
        }
    }
    // Ids carry no topic information.
    drafts.shuffle(&mut rng);

    let width = digits(drafts.len());
    let mut collection = Collection::new();
    let mut truth = Vec::with_capacity(drafts.len());
    let mut by_entity: BTreeMap<(usize, usize), Vec<usize>> = BTreeMap::new();
    for (i, (topic, entity, _, text)) in drafts.iter().enumerate() {
        let id = format!("p{i:0width$}");
        collection.insert(id.clone(), Passage { id: id.clone(), text: text.clone() });
        truth.push(PassageTruth { id, topic: topic + 1, entity: entity + 1 });
        by_entity.entry((*topic, *entity)).or_default().push(i);
    }

    let swidth = digits(spec.n_sessions);
    let mut sessions = Vec::with_capacity(spec.n_sessions);
    let mut turn_truth = Vec::new();
    for s in 0..spec.n_sessions {
        let session_id = format!("s{:0swidth$}", s + 1);
        let mut rng = rng::keyed(seed, &["synthetic", "session", &session_id]);
        let topics = topic_sequence(spec, &mut rng);
        let mut entity_of: HashMap<usize, usize> = HashMap::new();
        let mut used: HashSet<usize> = HashSet::new();
        let mut turns = Vec::with_capacity(topics.len());
        for (pos, &topic) in topics.iter().enumerate() {
            let explicit = !entity_of.contains_key(&topic);
            let entity = *entity_of
                .entry(topic)
                .or_insert_with(|| rng.gen_range(0..spec.entities_per_topic));
            let members = &by_entity[&(topic, entity)];
            let fresh: Vec<usize> = members.iter().copied().filter(|p| !used.contains(p)).collect();
            let candidates = if fresh.is_empty() { members.clone() } else { fresh };
            let gold = *candidates.choose(&mut rng).expect("entity has passages");
            used.insert(gold);

            let mut words: Vec<String> =
                (0..spec.query_function_terms).map(|_| spec.function_word(rng.gen_range(0..pool))).collect();
            if explicit {
                words.extend((0..spec.entity_terms).map(|k| spec.entity_term(topic, entity, k)));
            }
            let aspects = &drafts[gold].2;
            for k in index::sample(&mut rng, aspects.len(), spec.query_aspect_terms) {
                words.push(spec.aspect_term(topic, aspects[k]));
            }
            turns.push(Turn {
                turn_index: pos + 1,
                query_text: words.join(" "),
                gold_passage_id: Some(truth[gold].id.clone()),
                answer_text: None,
            });
            turn_truth.push(TurnTruth {
                session_id: session_id.clone(),
                turn_index: pos + 1,
                topic: topic + 1,
                entity: entity + 1,
                explicit,
            });
        }
        sessions.push(Session { session_id, turns });
    }

    Ok(SyntheticDataset {
        collection,
        sessions,
        manifest: SyntheticManifest {
            seed,
            spec: spec.clone(),
            passages: truth,
            turns: turn_truth,
        },
    })
}

fn topic_sequence(spec: &SyntheticSpec, rng: &mut rng::Rng) -> Vec<usize> {
    match spec.schedule {
        ShiftSchedule::Alternate => (0..spec.turns_per_session).map(|i| i % spec.n_topics).collect(),
        ShiftSchedule::Random { shift_prob } => {
            let mut current = rng.gen_range(0..spec.n_topics);
            let mut out = vec![current];
            for _ in 1..spec.turns_per_session {
                if rng::unit_f64(rng) < shift_prob {
                    let other = rng.gen_range(0..spec.n_topics - 1);
                    current = if other >= current { other + 1 } else { other };
                }
                out.push(current);
            }
            out
        }
    }
}

fn digits(n: usize) -> usize {
    n.max(1).to_string().len()
}
