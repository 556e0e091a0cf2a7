//! Dialogue acts as `(act, slot, value)` triples.
//!
//! Text form, used by retrieval keys and model-facing sequences:
//! `act slot=value ; act slot ; act`. A satisfaction level rides along as a
//! trailing `satisfaction=N` segment.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Act name of the triple that carries a satisfaction level.
pub const SATISFACTION_ACT: &str = "satisfaction";

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(into = "RawTriple", try_from = "RawTriple")]
pub struct Triple {
    pub act: String,
    pub slot: Option<String>,
    pub value: Option<String>,
}

#[derive(Serialize, Deserialize)]
struct RawTriple(String, Option<String>, Option<String>);

impl From<Triple> for RawTriple {
    fn from(t: Triple) -> Self {
        RawTriple(t.act, t.slot, t.value)
    }
}

impl TryFrom<RawTriple> for Triple {
    type Error = Error;

    fn try_from(raw: RawTriple) -> Result<Self> {
        let t = Triple {
            act: raw.0,
            slot: raw.1,
            value: raw.2,
        };
        t.validate()?;
        Ok(t)
    }
}

impl Triple {
    pub fn act(act: &str) -> Self {
        Triple {
            act: act.to_string(),
            slot: None,
            value: None,
        }
    }

    pub fn slot(act: &str, slot: &str) -> Self {
        Triple {
            act: act.to_string(),
            slot: Some(slot.to_string()),
            value: None,
        }
    }

    pub fn full(act: &str, slot: &str, value: &str) -> Self {
        Triple {
            act: act.to_string(),
            slot: Some(slot.to_string()),
            value: Some(value.to_string()),
        }
    }

    pub fn is_satisfaction(&self) -> bool {
        self.act == SATISFACTION_ACT
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::ActionSyntax(m));
        if self.act.is_empty()
            || self.act.contains(char::is_whitespace)
            || self.act.contains(['=', ';'])
        {
            return bad(format!("invalid act `{}`", self.act));
        }
        if let Some(slot) = &self.slot {
            if slot.is_empty() || slot.contains(char::is_whitespace) || slot.contains(['=', ';']) {
                return bad(format!("invalid slot `{slot}`"));
            }
        }
        if let Some(value) = &self.value {
            if value.trim().is_empty() || value.contains(';') || value.trim() != value {
                return bad(format!("invalid value `{value}`"));
            }
        }
        if self.is_satisfaction() {
            if self.slot.is_some() || self.value.is_none() {
                return bad("satisfaction triple carries a value and no slot".into());
            }
        } else if self.slot.is_none() && self.value.is_some() {
            return bad(format!("act `{}` has a value without a slot", self.act));
        }
        Ok(())
    }
}

impl fmt::Display for Triple {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.is_satisfaction() {
            return write!(
                f,
                "{}={}",
                SATISFACTION_ACT,
                self.value.as_deref().unwrap_or("")
            );
        }
        write!(f, "{}", self.act)?;
        if let Some(slot) = &self.slot {
            write!(f, " {slot}")?;
            if let Some(value) = &self.value {
                write!(f, "={value}")?;
            }
        }
        Ok(())
    }
}

impl FromStr for Triple {
    type Err = Error;

    fn from_str(segment: &str) -> Result<Self> {
        let segment = segment.trim();
        let triple = match segment.split_once(char::is_whitespace) {
            None => match segment.split_once('=') {
                Some((SATISFACTION_ACT, level)) => Triple {
                    act: SATISFACTION_ACT.to_string(),
                    slot: None,
                    value: Some(level.to_string()),
                },
                Some(_) => {
                    return Err(Error::ActionSyntax(format!(
                        "segment `{segment}` lacks an act"
                    )))
                }
                None => Triple::act(segment),
            },
            Some((act, rest)) => {
                let rest = rest.trim();
                match rest.split_once('=') {
                    Some((slot, value)) => Triple {
                        act: act.to_string(),
                        slot: Some(slot.trim().to_string()),
                        value: Some(value.trim().to_string()),
                    },
                    None => Triple::slot(act, rest),
                }
            }
        };
        triple.validate()?;
        Ok(triple)
    }
}

/// An ordered set of triples. May be empty (e.g. the system side of a
/// dialogue before the first response).
#[derive(Debug, Clone, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Action {
    pub triples: Vec<Triple>,
}

impl Action {
    pub fn new(triples: Vec<Triple>) -> Self {
        Action { triples }
    }

    pub fn single(triple: Triple) -> Self {
        Action {
            triples: vec![triple],
        }
    }

    pub fn simple(act: &str) -> Self {
        Action::single(Triple::act(act))
    }

    pub fn is_empty(&self) -> bool {
        self.triples.is_empty()
    }

    pub fn push(&mut self, triple: Triple) {
        self.triples.push(triple);
    }

    /// Triples other than the satisfaction segment.
    pub fn dialogue_triples(&self) -> impl Iterator<Item = &Triple> {
        self.triples.iter().filter(|t| !t.is_satisfaction())
    }

    /// The first non-satisfaction act, if any.
    pub fn primary_act(&self) -> Option<&str> {
        self.dialogue_triples().next().map(|t| t.act.as_str())
    }

    pub fn has_act(&self, act: &str) -> bool {
        self.dialogue_triples().any(|t| t.act == act)
    }

    /// Distinct acts in first-seen order.
    pub fn acts(&self) -> Vec<&str> {
        let mut out: Vec<&str> = Vec::new();
        for t in self.dialogue_triples() {
            if !out.contains(&t.act.as_str()) {
                out.push(&t.act);
            }
        }
        out
    }

    /// `(slot, value)` pairs carried by triples with the given act.
    pub fn slot_values<'a>(
        &'a self,
        act: &'a str,
    ) -> impl Iterator<Item = (&'a str, &'a str)> + 'a {
        self.dialogue_triples()
            .filter(move |t| t.act == act)
            .filter_map(|t| Some((t.slot.as_deref()?, t.value.as_deref()?)))
    }

    /// Slots named by any dialogue triple, in order, without duplicates.
    pub fn slots(&self) -> Vec<&str> {
        let mut out: Vec<&str> = Vec::new();
        for s in self.dialogue_triples().filter_map(|t| t.slot.as_deref()) {
            if !out.contains(&s) {
                out.push(s);
            }
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        self.triples.iter().try_for_each(Triple::validate)
    }
}

impl fmt::Display for Action {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, t) in self.triples.iter().enumerate() {
            if i > 0 {
                f.write_str(" ; ")?;
            }
            write!(f, "{t}")?;
        }
        Ok(())
    }
}

impl FromStr for Action {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let triples = s
            .split(';')
            .map(str::trim)
            .filter(|seg| !seg.is_empty())
            .map(str::parse)
            .collect::<Result<Vec<Triple>>>()?;
        Ok(Action { triples })
    }
}
