//! Human-annotation sessions: blinded variant assignment, live chat with a
//! reference system variant, rating capture and aggregation. Transport
//! lives in the CLI; this module is plain data and locking.

use std::collections::{BTreeMap, HashMap};
use std::fs::OpenOptions;
use std::io::Write as _;
use std::path::PathBuf;
use std::sync::{Arc, Mutex};
use std::time::{SystemTime, UNIX_EPOCH};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::corpus::{Corpus, ItemDatabase, Speaker};
use crate::preference::{compute_goal_stats, init_preference, GoalStats, Preference};
use crate::sampling::{derive_seed, rng_from_seed};
use crate::tester::{
    exact_distinct, human_rating, EpisodeRanking, RuleSystem, SystemSession, Tester, VariantScore,
};
use crate::text;

#[derive(Debug, Error)]
pub enum ServiceError {
    #[error("unknown session `{0}`")]
    NotFound(String),
    #[error("session `{0}` is closed")]
    Closed(String),
    #[error("session `{0}` is already rated")]
    AlreadyRated(String),
    #[error("invalid rating: {0}")]
    InvalidRating(String),
    #[error("invalid request: {0}")]
    BadRequest(String),
    #[error(transparent)]
    Core(#[from] crate::Error),
}

/// Annotator judgments: success and efficiency 1–2, naturalness 1–3,
/// satisfaction 1–5.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Ratings {
    pub success: u8,
    pub efficiency: u8,
    pub naturalness: u8,
    pub satisfaction: u8,
}

impl Ratings {
    pub fn validate(&self) -> Result<(), ServiceError> {
        for (name, v, hi) in [
            ("success", self.success, 2),
            ("efficiency", self.efficiency, 2),
            ("naturalness", self.naturalness, 3),
            ("satisfaction", self.satisfaction, 5),
        ] {
            if !(1..=hi).contains(&v) {
                return Err(ServiceError::InvalidRating(format!(
                    "{name} must be in 1..={hi}, got {v}"
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TranscriptTurn {
    pub speaker: Speaker,
    pub utterance: String,
}

/// Persisted annotation. `variant` is server-side only; client views
/// come from [`AnnotationRecord::public`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnnotationRecord {
    pub session_id: String,
    pub variant: String,
    pub goal: String,
    pub transcript: Vec<TranscriptTurn>,
    pub ratings: Ratings,
    pub annotator_id: String,
    /// Unix seconds.
    pub created_at: u64,
    pub rated_at: u64,
}

/// Annotation as returned to clients: no variant identity.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PublicRecord {
    pub session_id: String,
    pub goal: String,
    pub transcript: Vec<TranscriptTurn>,
    pub ratings: Ratings,
    pub annotator_id: String,
    pub created_at: u64,
    pub rated_at: u64,
}

impl AnnotationRecord {
    pub fn public(&self) -> PublicRecord {
        PublicRecord {
            session_id: self.session_id.clone(),
            goal: self.goal.clone(),
            transcript: self.transcript.clone(),
            ratings: self.ratings,
            annotator_id: self.annotator_id.clone(),
            created_at: self.created_at,
            rated_at: self.rated_at,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GoalConstraint {
    pub domain: String,
    pub slot: String,
    pub value: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CreatedSession {
    pub session_id: String,
    pub goal_text: String,
    pub goal: Vec<GoalConstraint>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatReply {
    pub reply: String,
    pub terminated: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionView {
    pub session_id: String,
    pub goal_text: String,
    pub goal: Vec<GoalConstraint>,
    pub transcript: Vec<TranscriptTurn>,
    pub terminated: bool,
    pub rated: bool,
}

/// Totals safe to show annotators.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlindedAggregate {
    pub sessions: usize,
    pub rated: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariantAggregate {
    pub label: String,
    pub sessions: usize,
    pub rated: usize,
    pub mean_rating: Option<f64>,
    pub mean_success: Option<f64>,
    pub mean_efficiency: Option<f64>,
    pub mean_naturalness: Option<f64>,
    pub mean_satisfaction: Option<f64>,
    pub mean_turns: Option<f64>,
}

/// Unblinded aggregate. `exact_distinct` ranks variants by mean human
/// rating; it is present once every variant has a rated session.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdminAggregate {
    pub tester: String,
    pub sessions: usize,
    pub rated: usize,
    pub variants: Vec<VariantAggregate>,
    pub exact_distinct: Option<f64>,
}

struct LiveSession {
    id: String,
    variant: usize,
    goal: Preference,
    system: SystemSession,
    transcript: Vec<TranscriptTurn>,
    created_at: u64,
    rated: bool,
}

impl LiveSession {
    fn closed(&self) -> bool {
        self.system.terminated || self.rated
    }
}

struct Assigner {
    created: u64,
    /// Remaining variant indices of the current shuffled block.
    block: Vec<usize>,
}

/// Shared state behind the HTTP routes.
pub struct AnnotationService {
    tester: Tester,
    systems: Vec<RuleSystem>,
    db: Arc<ItemDatabase>,
    goal_stats: GoalStats,
    seed: u64,
    store: Option<PathBuf>,
    assigner: Mutex<Assigner>,
    sessions: Mutex<HashMap<String, Arc<Mutex<LiveSession>>>>,
    records: Mutex<Vec<AnnotationRecord>>,
}

fn now() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0)
}

fn goal_constraints(goal: &Preference) -> Vec<GoalConstraint> {
    goal.goal_entries()
        .map(|e| GoalConstraint {
            domain: e.domain.clone().unwrap_or_default(),
            slot: e.slot.clone(),
            value: e.value.clone(),
        })
        .collect()
}

/// Readable goal: `hotel: parking=free, stars=4; taxi: ...`.
pub fn goal_text(goal: &Preference) -> String {
    let mut by_domain: BTreeMap<String, Vec<String>> = BTreeMap::new();
    for c in goal_constraints(goal) {
        let slot = c
            .slot
            .strip_prefix(&format!("{}_", c.domain))
            .unwrap_or(&c.slot)
            .to_string();
        by_domain
            .entry(c.domain)
            .or_default()
            .push(format!("{slot}={}", c.value));
    }
    by_domain
        .into_iter()
        .map(|(d, cs)| format!("{d}: {}", cs.join(", ")))
        .collect::<Vec<_>>()
        .join("; ")
}

fn mean(xs: impl Iterator<Item = f64>) -> Option<f64> {
    let (s, n) = xs.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    (n > 0).then(|| s / n as f64)
}

impl AnnotationService {
    /// `seed` drives session ids, goals and the blinded assignment.
    /// Records are appended as JSON lines to `store` when given.
    pub fn new(
        tester: Tester,
        corpus: &Corpus,
        seed: u64,
        store: Option<PathBuf>,
    ) -> crate::Result<Self> {
        let systems = tester.instantiate(corpus, derive_seed(seed, &[u64::MAX - 1]));
        Ok(AnnotationService {
            tester,
            systems,
            db: Arc::new(corpus.db.clone()),
            goal_stats: compute_goal_stats(corpus)?,
            seed,
            store,
            assigner: Mutex::new(Assigner {
                created: 0,
                block: Vec::new(),
            }),
            sessions: Mutex::new(HashMap::new()),
            records: Mutex::new(Vec::new()),
        })
    }

    pub fn tester(&self) -> &Tester {
        &self.tester
    }

    fn session(&self, id: &str) -> Result<Arc<Mutex<LiveSession>>, ServiceError> {
        self.sessions
            .lock()
            .expect("session map poisoned")
            .get(id)
            .cloned()
            .ok_or_else(|| ServiceError::NotFound(id.to_string()))
    }

    /// Assigns variants in shuffled blocks of one per variant, so counts
    /// never differ by more than one.
    pub fn create_session(&self) -> Result<CreatedSession, ServiceError> {
        let (n, variant) = {
            let mut a = self.assigner.lock().expect("assigner poisoned");
            let n = a.created;
            a.created += 1;
            if a.block.is_empty() {
                let mut block: Vec<usize> = (0..self.systems.len()).collect();
                let block_no = n / self.systems.len() as u64;
                block.shuffle(&mut rng_from_seed(derive_seed(self.seed, &[0, block_no])));
                a.block = block;
            }
            (n, a.block.pop().expect("non-empty block"))
        };
        let mut rng = rng_from_seed(derive_seed(self.seed, &[1, n]));
        let goal = init_preference(&self.goal_stats, &self.db, &mut rng)?;
        let id = {
            let mut h = Sha256::new();
            h.update(self.seed.to_le_bytes());
            h.update(n.to_le_bytes());
            hex::encode(&h.finalize()[..12])
        };
        let system = self.systems[variant].start(derive_seed(self.seed, &[2, n]));
        let created = CreatedSession {
            session_id: id.clone(),
            goal_text: goal_text(&goal),
            goal: goal_constraints(&goal),
        };
        let live = LiveSession {
            id: id.clone(),
            variant,
            goal,
            system,
            transcript: Vec::new(),
            created_at: now(),
            rated: false,
        };
        self.sessions
            .lock()
            .expect("session map poisoned")
            .insert(id, Arc::new(Mutex::new(live)));
        Ok(created)
    }

    pub fn view(&self, id: &str) -> Result<SessionView, ServiceError> {
        let s = self.session(id)?;
        let s = s.lock().expect("session poisoned");
        Ok(SessionView {
            session_id: s.id.clone(),
            goal_text: goal_text(&s.goal),
            goal: goal_constraints(&s.goal),
            transcript: s.transcript.clone(),
            terminated: s.closed(),
            rated: s.rated,
        })
    }

    /// One user message; the session lock serializes concurrent posts.
    pub fn message(&self, id: &str, text_in: &str) -> Result<ChatReply, ServiceError> {
        let text_in = text_in.trim();
        if text_in.is_empty() {
            return Err(ServiceError::BadRequest("empty message".into()));
        }
        let s = self.session(id)?;
        let mut s = s.lock().expect("session poisoned");
        if s.closed() {
            return Err(ServiceError::Closed(id.to_string()));
        }
        let variant = s.variant;
        let reply = self.systems[variant].respond(&mut s.system, text_in)?;
        s.transcript.push(TranscriptTurn {
            speaker: Speaker::User,
            utterance: text_in.to_string(),
        });
        s.transcript.push(TranscriptTurn {
            speaker: Speaker::System,
            utterance: reply.utterance.clone(),
        });
        if text::has_end_marker(text_in) {
            s.system.terminated = true;
        }
        Ok(ChatReply {
            reply: reply.utterance,
            terminated: s.system.terminated,
        })
    }

    /// Validates, persists and returns the record. Rating closes the
    /// session.
    pub fn rate(
        &self,
        id: &str,
        annotator_id: &str,
        ratings: Ratings,
    ) -> Result<AnnotationRecord, ServiceError> {
        ratings.validate()?;
        if annotator_id.trim().is_empty() {
            return Err(ServiceError::BadRequest("annotator_id is required".into()));
        }
        let s = self.session(id)?;
        let mut s = s.lock().expect("session poisoned");
        if s.rated {
            return Err(ServiceError::AlreadyRated(id.to_string()));
        }
        if s.transcript.is_empty() {
            return Err(ServiceError::BadRequest(
                "rate after at least one exchange".into(),
            ));
        }
        let record = AnnotationRecord {
            session_id: s.id.clone(),
            variant: self.tester.variants[s.variant].label.clone(),
            goal: goal_text(&s.goal),
            transcript: s.transcript.clone(),
            ratings,
            annotator_id: annotator_id.trim().to_string(),
            created_at: s.created_at,
            rated_at: now(),
        };
        if let Some(path) = &self.store {
            let line = serde_json::to_string(&record).map_err(crate::Error::from)?;
            let mut f = OpenOptions::new()
                .create(true)
                .append(true)
                .open(path)
                .map_err(|e| crate::Error::io(path, e))?;
            writeln!(f, "{line}").map_err(|e| crate::Error::io(path, e))?;
        }
        s.rated = true;
        self.records
            .lock()
            .expect("records poisoned")
            .push(record.clone());
        Ok(record)
    }

    pub fn record(&self, id: &str) -> Result<AnnotationRecord, ServiceError> {
        self.session(id)?;
        self.records
            .lock()
            .expect("records poisoned")
            .iter()
            .find(|r| r.session_id == id)
            .cloned()
            .ok_or_else(|| ServiceError::BadRequest(format!("session `{id}` is not rated yet")))
    }

    pub fn blinded_aggregate(&self) -> BlindedAggregate {
        BlindedAggregate {
            sessions: self.sessions.lock().expect("session map poisoned").len(),
            rated: self.records.lock().expect("records poisoned").len(),
        }
    }

    pub fn admin_aggregate(&self) -> AdminAggregate {
        let mut counts = vec![0usize; self.systems.len()];
        for s in self.sessions.lock().expect("session map poisoned").values() {
            counts[s.lock().expect("session poisoned").variant] += 1;
        }
        let records = self.records.lock().expect("records poisoned").clone();
        let variants: Vec<VariantAggregate> = self
            .tester
            .variants
            .iter()
            .zip(&counts)
            .map(|(v, &sessions)| {
                let rs: Vec<&AnnotationRecord> =
                    records.iter().filter(|r| r.variant == v.label).collect();
                let field =
                    |f: fn(&Ratings) -> u8| mean(rs.iter().map(|r| f64::from(f(&r.ratings))));
                VariantAggregate {
                    label: v.label.clone(),
                    sessions,
                    rated: rs.len(),
                    mean_rating: mean(rs.iter().filter_map(|r| {
                        human_rating(r.ratings.success, r.ratings.satisfaction).ok()
                    })),
                    mean_success: field(|r| r.success),
                    mean_efficiency: field(|r| r.efficiency),
                    mean_naturalness: field(|r| r.naturalness),
                    mean_satisfaction: field(|r| r.satisfaction),
                    mean_turns: mean(rs.iter().map(|r| {
                        r.transcript
                            .iter()
                            .filter(|t| t.speaker == Speaker::User)
                            .count() as f64
                    })),
                }
            })
            .collect();
        let exact_distinct = variants
            .iter()
            .map(|v| {
                Some(VariantScore {
                    rating: v.mean_rating?,
                    turns: (v.mean_turns? * 1000.0).round() as usize,
                    success: v.mean_success.map(|s| s - 1.0),
                })
            })
            .collect::<Option<Vec<_>>>()
            .and_then(|scores| {
                let ranking = EpisodeRanking { episode: 0, scores };
                exact_distinct(&ranking, &self.tester.expected_order()).ok()
            });
        AdminAggregate {
            tester: self.tester.kind.name().to_string(),
            sessions: counts.iter().sum(),
            rated: records.len(),
            variants,
            exact_distinct,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{generate_corpus, SynthSpec};
    use crate::tester::{make_tester, VariantConfig};

    fn service() -> AnnotationService {
        let corpus = generate_corpus(&SynthSpec {
            domains: 2,
            slots: 4,
            items: 20,
            dialogues: 100,
            ..SynthSpec::default()
        })
        .unwrap();
        let tester = make_tester("context", VariantConfig::base()).unwrap();
        AnnotationService::new(tester, &corpus, 9, None).unwrap()
    }

    fn ok() -> Ratings {
        Ratings {
            success: 2,
            efficiency: 1,
            naturalness: 3,
            satisfaction: 5,
        }
    }

    #[test]
    fn rating_ranges() {
        assert!(ok().validate().is_ok());
        for bad in [
            Ratings { success: 3, ..ok() },
            Ratings {
                efficiency: 0,
                ..ok()
            },
            Ratings {
                naturalness: 4,
                ..ok()
            },
            Ratings {
                satisfaction: 6,
                ..ok()
            },
        ] {
            assert!(matches!(
                bad.validate(),
                Err(ServiceError::InvalidRating(_))
            ));
        }
    }

    #[test]
    fn assignment_is_block_balanced() {
        let svc = service();
        for _ in 0..31 {
            svc.create_session().unwrap();
        }
        let counts: Vec<usize> = svc
            .admin_aggregate()
            .variants
            .iter()
            .map(|v| v.sessions)
            .collect();
        assert_eq!(counts.iter().sum::<usize>(), 31);
        assert!(
            counts.iter().max().unwrap() - counts.iter().min().unwrap() <= 1,
            "{counts:?}"
        );
    }

    #[test]
    fn end_marker_closes_and_double_rating_fails() {
        let svc = service();
        let c = svc.create_session().unwrap();
        svc.message(&c.session_id, "hello").unwrap();
        let r = svc.message(&c.session_id, "thanks bye [END]").unwrap();
        assert!(r.terminated);
        assert!(matches!(
            svc.message(&c.session_id, "again"),
            Err(ServiceError::Closed(_))
        ));
        svc.rate(&c.session_id, "a1", ok()).unwrap();
        assert!(matches!(
            svc.rate(&c.session_id, "a1", ok()),
            Err(ServiceError::AlreadyRated(_))
        ));
        assert_eq!(svc.record(&c.session_id).unwrap().ratings, ok());
    }
}
