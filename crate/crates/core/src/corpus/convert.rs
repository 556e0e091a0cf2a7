//! Converters from external corpus shapes into the canonical schema.

use std::collections::BTreeSet;

use serde_json::Value;

use super::{Action, Dialogue, Speaker, Triple, Turn};
use crate::error::{Error, Result};
use crate::preference::Preference;

/// Collapses a 5-point satisfaction rating onto the 3-point scale:
/// 1-2 → 1, 3 → 2, 4-5 → 3.
pub fn collapse_satisfaction(five_point: u8) -> Result<u8> {
    match five_point {
        1 | 2 => Ok(1),
        3 => Ok(2),
        4 | 5 => Ok(3),
        other => Err(Error::InvalidArgument(format!(
            "satisfaction {other} outside 1..=5"
        ))),
    }
}

fn key(domain: &str, slot: &str) -> String {
    format!(
        "{}_{}",
        domain.to_lowercase(),
        slot.to_lowercase().replace(' ', "")
    )
}

fn optional(v: &str) -> Option<String> {
    match v.trim() {
        "" | "none" | "?" => None,
        s => Some(s.to_lowercase()),
    }
}

fn convert_acts(acts: &Value) -> Action {
    let mut action = Action::default();
    let Some(map) = acts.as_object() else {
        return action;
    };
    for (name, pairs) in map {
        let (domain, act) = name.split_once('-').unwrap_or(("general", name));
        let act = act.to_lowercase();
        let pairs = pairs.as_array().cloned().unwrap_or_default();
        if pairs.is_empty() {
            action.push(Triple::act(&act));
        }
        for pair in pairs {
            let slot = pair.get(0).and_then(Value::as_str).and_then(optional);
            let value = pair.get(1).and_then(Value::as_str).and_then(optional);
            let triple = match (slot, domain.eq_ignore_ascii_case("general")) {
                (Some(slot), false) => Triple {
                    act: act.clone(),
                    slot: Some(key(domain, &slot)),
                    value,
                },
                _ => Triple::act(&act),
            };
            if !action.triples.contains(&triple) {
                action.push(triple);
            }
        }
    }
    action
}

/// Maps a MultiWOZ-2.1-shaped JSON object (`{dialogue_id: {goal, log}}`)
/// onto canonical dialogues. Goal `info` constraints become preference
/// entries; `dialog_act` annotations become actions.
pub fn from_multiwoz(root: &Value) -> Result<Vec<Dialogue>> {
    let map = root
        .as_object()
        .ok_or_else(|| Error::InvalidArgument("MultiWOZ root must be an object".into()))?;
    let mut out = Vec::new();
    for (raw_id, dialogue) in map {
        let id = raw_id.trim_end_matches(".json").to_string();
        let mut domains = BTreeSet::new();
        let mut goal = Preference::default();
        if let Some(goals) = dialogue.get("goal").and_then(Value::as_object) {
            for (domain, spec) in goals {
                let Some(info) = spec.get("info").and_then(Value::as_object) else {
                    continue;
                };
                if info.is_empty() {
                    continue;
                }
                domains.insert(domain.to_lowercase());
                for (slot, value) in info {
                    if let Some(v) = value.as_str().and_then(optional) {
                        goal.push_goal(domain, &key(domain, slot), &v)
                            .map_err(|e| Error::record(&id, None, e.to_string()))?;
                    }
                }
            }
        }
        goal.domains = domains.clone();
        let log = dialogue
            .get("log")
            .and_then(Value::as_array)
            .ok_or_else(|| Error::record(&id, None, "missing `log`"))?;
        let turns = log
            .iter()
            .enumerate()
            .map(|(i, entry)| {
                let text = entry
                    .get("text")
                    .and_then(Value::as_str)
                    .unwrap_or("")
                    .trim()
                    .to_string();
                let action = entry
                    .get("dialog_act")
                    .map(convert_acts)
                    .filter(|a| !a.is_empty());
                let speaker = if i % 2 == 0 {
                    Speaker::User
                } else {
                    Speaker::System
                };
                Turn {
                    speaker,
                    utterance: text,
                    action,
                    satisfaction: None,
                }
            })
            .collect();
        let d = Dialogue {
            id,
            domains,
            goal: (!goal.entries.is_empty()).then_some(goal),
            turns,
        };
        d.validate()?;
        out.push(d);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn collapse_table() {
        let got: Vec<u8> = (1..=5).map(|s| collapse_satisfaction(s).unwrap()).collect();
        assert_eq!(got, vec![1, 1, 2, 3, 3]);
        assert!(collapse_satisfaction(0).is_err());
        assert!(collapse_satisfaction(6).is_err());
    }

    #[test]
    fn multiwoz_shape() {
        let raw = serde_json::json!({
            "SNG01.json": {
                "goal": {"hotel": {"info": {"parking": "yes", "pricerange": "cheap"}}, "taxi": {}},
                "log": [
                    {"text": "I want a cheap hotel with parking.",
                     "dialog_act": {"Hotel-Inform": [["Price", "cheap"], ["Parking", "yes"]]}},
                    {"text": "What area?", "dialog_act": {"Hotel-Request": [["Area", "?"]]}},
                    {"text": "Thanks, bye.", "dialog_act": {"general-bye": [["none", "none"]]}}
                ]
            }
        });
        let ds = from_multiwoz(&raw).unwrap();
        assert_eq!(ds.len(), 1);
        let d = &ds[0];
        assert_eq!(d.id, "SNG01");
        assert_eq!(d.domains, ["hotel".to_string()].into());
        assert_eq!(d.turns.len(), 3);
        assert_eq!(
            d.turns[0].action.as_ref().unwrap().to_string(),
            "inform hotel_price=cheap ; inform hotel_parking=yes"
        );
        assert_eq!(
            d.turns[1].action.as_ref().unwrap().to_string(),
            "request hotel_area"
        );
        assert_eq!(d.turns[2].action.as_ref().unwrap().to_string(), "bye");
        assert_eq!(d.goal.as_ref().unwrap().entries.len(), 2);
    }
}
