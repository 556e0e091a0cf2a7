//! Canonical data model: dialogues, turns, item databases and corpora.
//!
//! On disk a corpus is a JSONL file (one dialogue per line) next to an item
//! database JSON file; see [`io`] for the schema.

mod action;
pub mod convert;
mod db;
pub mod io;

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

pub use action::{Action, Triple, SATISFACTION_ACT};
pub use db::{match_values, Item, ItemDatabase, LexiconEntry, Table};
pub use io::{load_corpus, load_corpus_with_db, load_item_db, write_corpus, write_item_db};

use crate::error::{Error, Result};
use crate::preference::Preference;
use crate::text;

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Speaker {
    User,
    System,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Turn {
    pub speaker: Speaker,
    pub utterance: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub action: Option<Action>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub satisfaction: Option<u8>,
}

impl Turn {
    pub fn user(
        utterance: impl Into<String>,
        action: Option<Action>,
        satisfaction: Option<u8>,
    ) -> Self {
        Turn {
            speaker: Speaker::User,
            utterance: utterance.into(),
            action,
            satisfaction,
        }
    }

    pub fn system(utterance: impl Into<String>, action: Option<Action>) -> Self {
        Turn {
            speaker: Speaker::System,
            utterance: utterance.into(),
            action,
            satisfaction: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dialogue {
    pub id: String,
    pub domains: BTreeSet<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub goal: Option<Preference>,
    pub turns: Vec<Turn>,
}

impl Dialogue {
    pub fn user_turns(&self) -> impl Iterator<Item = (usize, &Turn)> {
        self.turns
            .iter()
            .enumerate()
            .filter(|(_, t)| t.speaker == Speaker::User)
    }

    /// Checks the per-dialogue invariants: non-empty domain set, strict
    /// user/system alternation starting with the user, satisfaction only on
    /// user turns and within 1..=3, non-empty utterances.
    pub fn validate(&self) -> Result<()> {
        if self.id.is_empty() {
            return Err(Error::record("<unnamed>", None, "empty dialogue id"));
        }
        if self.domains.is_empty() {
            return Err(Error::record(&self.id, None, "empty domain set"));
        }
        for (i, turn) in self.turns.iter().enumerate() {
            let expected = if i % 2 == 0 {
                Speaker::User
            } else {
                Speaker::System
            };
            if turn.speaker != expected {
                return Err(Error::record(
                    &self.id,
                    Some(i),
                    format!("speaker alternation violated: expected {expected:?}"),
                ));
            }
            if let Some(level) = turn.satisfaction {
                if turn.speaker != Speaker::User {
                    return Err(Error::record(
                        &self.id,
                        Some(i),
                        "satisfaction on a system turn",
                    ));
                }
                if !(1..=3).contains(&level) {
                    return Err(Error::record(
                        &self.id,
                        Some(i),
                        format!("satisfaction {level} outside 1..=3"),
                    ));
                }
            }
            if text::strip_end_marker(&turn.utterance).is_empty()
                && !text::has_end_marker(&turn.utterance)
            {
                return Err(Error::record(&self.id, Some(i), "empty utterance"));
            }
            if let Some(action) = &turn.action {
                action
                    .validate()
                    .map_err(|e| Error::record(&self.id, Some(i), e.to_string()))?;
            }
        }
        Ok(())
    }
}

/// Token and label statistics derived at load time.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Vocab {
    pub token_counts: BTreeMap<String, usize>,
    pub user_act_counts: BTreeMap<String, usize>,
    pub system_act_counts: BTreeMap<String, usize>,
    pub slots: BTreeSet<String>,
}

impl Vocab {
    fn build(dialogues: &[Dialogue]) -> Self {
        let mut v = Vocab::default();
        for turn in dialogues.iter().flat_map(|d| &d.turns) {
            for tok in text::tokenize(&turn.utterance) {
                *v.token_counts.entry(tok).or_default() += 1;
            }
            if let Some(action) = &turn.action {
                let acts = match turn.speaker {
                    Speaker::User => &mut v.user_act_counts,
                    Speaker::System => &mut v.system_act_counts,
                };
                for t in action.dialogue_triples() {
                    *acts.entry(t.act.clone()).or_default() += 1;
                    if let Some(s) = &t.slot {
                        v.slots.insert(s.clone());
                    }
                }
            }
        }
        v
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    pub dialogues: Vec<Dialogue>,
    pub db: ItemDatabase,
    pub vocab: Vocab,
}

impl Corpus {
    /// Validates every dialogue and the cross-reference between action slots
    /// and the database's slot registry.
    pub fn new(dialogues: Vec<Dialogue>, db: ItemDatabase) -> Result<Self> {
        let registry = db.slot_registry();
        for d in &dialogues {
            d.validate()?;
            for (i, turn) in d.turns.iter().enumerate() {
                let Some(action) = &turn.action else { continue };
                for slot in action.slots() {
                    if !registry.contains(slot) {
                        return Err(Error::record(
                            &d.id,
                            Some(i),
                            format!("unknown slot `{slot}`"),
                        ));
                    }
                }
            }
        }
        let vocab = Vocab::build(&dialogues);
        Ok(Corpus {
            dialogues,
            db,
            vocab,
        })
    }

    pub fn turn_count(&self) -> usize {
        self.dialogues.iter().map(|d| d.turns.len()).sum()
    }

    pub fn user_turn_count(&self) -> usize {
        self.dialogues.iter().map(|d| d.user_turns().count()).sum()
    }
}

/// Negative log-likelihood of a token sequence, `-Σ ln p`.
///
/// Probabilities must lie in `(0, 1]`; callers that may produce zeros have
/// to smooth explicitly.
pub fn sequence_nll(token_probabilities: &[f64]) -> Result<f64> {
    let mut sum = 0.0;
    for (index, &p) in token_probabilities.iter().enumerate() {
        if !(p > 0.0 && p <= 1.0) {
            return Err(Error::Probability { index, value: p });
        }
        sum += p.ln();
    }
    Ok(0.0 - sum)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn nll_anchors() {
        assert_eq!(sequence_nll(&[1.0, 1.0]).unwrap(), 0.0);
        assert!((sequence_nll(&[0.5, 0.5]).unwrap() - 2.0 * 2f64.ln()).abs() < 1e-12);
        assert!((sequence_nll(&[0.25]).unwrap() - 1.3863).abs() < 1e-4);
        assert!(sequence_nll(&[0.5, 0.0]).is_err());
        assert!(sequence_nll(&[1.5]).is_err());
        assert!(sequence_nll(&[f64::NAN]).is_err());
        assert_eq!(sequence_nll(&[]).unwrap(), 0.0);
    }

    proptest! {
        #[test]
        fn nll_is_additive(a in proptest::collection::vec(1e-6f64..=1.0, 0..20),
                           b in proptest::collection::vec(1e-6f64..=1.0, 0..20)) {
            let joined: Vec<f64> = a.iter().chain(&b).copied().collect();
            let lhs = sequence_nll(&joined).unwrap();
            let rhs = sequence_nll(&a).unwrap() + sequence_nll(&b).unwrap();
            prop_assert!((lhs - rhs).abs() <= 1e-9 * (1.0 + lhs.abs()));
        }
    }

    fn dialogue(turns: Vec<Turn>) -> Dialogue {
        Dialogue {
            id: "d1".into(),
            domains: ["hotel".to_string()].into(),
            goal: None,
            turns,
        }
    }

    #[test]
    fn alternation_and_ranges() {
        let ok = dialogue(vec![
            Turn::user("hi", None, Some(2)),
            Turn::system("hello", None),
        ]);
        assert!(ok.validate().is_ok());

        let bad = dialogue(vec![Turn::system("hello", None)]);
        assert!(matches!(
            bad.validate(),
            Err(Error::Record {
                turn_index: Some(0),
                ..
            })
        ));

        let bad = dialogue(vec![Turn::user("hi", None, Some(7))]);
        let err = bad.validate().unwrap_err().to_string();
        assert!(err.contains("d1") && err.contains("turn 0"), "{err}");

        let end_only = dialogue(vec![Turn::user("[END]", None, None)]);
        assert!(end_only.validate().is_ok());
        let empty = dialogue(vec![Turn::user("  ", None, None)]);
        assert!(empty.validate().is_err());
    }
}
