//! User preferences: sampling a goal from corpus statistics and the item
//! database, then tracking it through a conversation.
//!
//! Initialization runs three steps: draw a domain combination from its
//! corpus frequency, draw one item per domain uniformly, and draw `k`
//! attributes of that item uniformly without replacement where `k` follows
//! the corpus attribute-count distribution.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{Action, Corpus, ItemDatabase};
use crate::error::{Error, Result};
use crate::sampling::sample_weighted;

pub const INFORMED_TAG: &str = "Informed";

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EntryOrigin {
    /// Sampled goal constraint.
    #[default]
    Goal,
    /// Added because the user stated a slot outside the goal.
    Stated,
    /// Added because the system recommended an item.
    Recommended,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PreferenceEntry {
    pub slot: String,
    pub value: String,
    #[serde(default)]
    pub informed: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub domain: Option<String>,
    #[serde(default)]
    pub origin: EntryOrigin,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Preference {
    #[serde(default)]
    pub domains: BTreeSet<String>,
    pub entries: Vec<PreferenceEntry>,
}

impl Preference {
    pub fn push_goal(&mut self, domain: &str, slot: &str, value: &str) -> Result<()> {
        self.push(PreferenceEntry {
            slot: slot.to_string(),
            value: value.to_string(),
            informed: false,
            domain: Some(domain.to_string()),
            origin: EntryOrigin::Goal,
        })
    }

    pub fn push(&mut self, entry: PreferenceEntry) -> Result<()> {
        if self.get(&entry.slot).is_some() {
            return Err(Error::InvalidArgument(format!(
                "duplicate preference slot `{}`",
                entry.slot
            )));
        }
        if let Some(d) = &entry.domain {
            self.domains.insert(d.clone());
        }
        self.entries.push(entry);
        Ok(())
    }

    pub fn get(&self, slot: &str) -> Option<&PreferenceEntry> {
        self.entries.iter().find(|e| e.slot == slot)
    }

    pub fn goal_entries(&self) -> impl Iterator<Item = &PreferenceEntry> {
        self.entries
            .iter()
            .filter(|e| e.origin == EntryOrigin::Goal)
    }

    /// Goal constraints of one domain as `(slot, value)` pairs.
    pub fn constraints(&self, domain: &str) -> Vec<(String, String)> {
        self.goal_entries()
            .filter(|e| e.domain.as_deref() == Some(domain))
            .map(|e| (e.slot.clone(), e.value.clone()))
            .collect()
    }

    /// Domains in goal order (first appearance among entries).
    pub fn goal_domains(&self) -> Vec<&str> {
        let mut out: Vec<&str> = Vec::new();
        for d in self.goal_entries().filter_map(|e| e.domain.as_deref()) {
            if !out.contains(&d) {
                out.push(d);
            }
        }
        out
    }

    pub fn next_uninformed(&self) -> Option<&PreferenceEntry> {
        self.goal_entries().find(|e| !e.informed)
    }

    pub fn is_finished(&self) -> bool {
        self.next_uninformed().is_none()
    }

    pub fn informed_slots(&self) -> BTreeSet<&str> {
        self.entries
            .iter()
            .filter(|e| e.informed)
            .map(|e| e.slot.as_str())
            .collect()
    }

    /// True when, for every goal domain, the database holds an item meeting
    /// all of that domain's constraints.
    pub fn is_satisfiable(&self, db: &ItemDatabase) -> bool {
        self.goal_domains()
            .into_iter()
            .all(|d| !db.query(d, &self.constraints(d)).is_empty())
    }
}

impl fmt::Display for PreferenceEntry {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}={}", self.slot, self.value)?;
        if self.informed {
            write!(f, " | {INFORMED_TAG}")?;
        }
        Ok(())
    }
}

/// Sequence form: `slot=value [| Informed]` segments joined by `, `.
impl fmt::Display for Preference {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, e) in self.entries.iter().enumerate() {
            if i > 0 {
                f.write_str(", ")?;
            }
            write!(f, "{e}")?;
        }
        Ok(())
    }
}

/// Parses the sequence form. Domain and origin are not part of the text
/// form; parsed entries are goal entries without a domain.
impl FromStr for Preference {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let mut pref = Preference::default();
        for seg in s.split(", ").map(str::trim).filter(|x| !x.is_empty()) {
            let (body, informed) = match seg.rsplit_once('|') {
                Some((b, tag)) if tag.trim() == INFORMED_TAG => (b.trim(), true),
                _ => (seg, false),
            };
            let (slot, value) = body
                .split_once('=')
                .ok_or_else(|| Error::InvalidArgument(format!("preference segment `{seg}`")))?;
            pref.push(PreferenceEntry {
                slot: slot.trim().to_string(),
                value: value.trim().to_string(),
                informed,
                domain: None,
                origin: EntryOrigin::Goal,
            })?;
        }
        Ok(pref)
    }
}

/// Domain-combination and attribute-count distributions from a corpus.
#[derive(Debug, Clone, PartialEq)]
pub struct GoalStats {
    pub domain_combination_dist: BTreeMap<BTreeSet<String>, f64>,
    pub attribute_count_dist: BTreeMap<usize, f64>,
}

fn normalize<K: Ord + Clone>(counts: &BTreeMap<K, usize>) -> BTreeMap<K, f64> {
    let total: usize = counts.values().sum();
    counts
        .iter()
        .map(|(k, c)| (k.clone(), *c as f64 / total as f64))
        .collect()
}

fn draw<'a, K, R: Rng + ?Sized>(rng: &mut R, dist: &'a BTreeMap<K, f64>) -> Option<&'a K> {
    let weights: Vec<f64> = dist.values().copied().collect();
    sample_weighted(rng, &weights).and_then(|i| dist.keys().nth(i))
}

pub fn compute_goal_stats(corpus: &Corpus) -> Result<GoalStats> {
    if corpus.dialogues.is_empty() {
        return Err(Error::InvalidArgument(
            "goal statistics need a non-empty corpus".into(),
        ));
    }
    let mut combos: BTreeMap<BTreeSet<String>, usize> = BTreeMap::new();
    let mut counts: BTreeMap<usize, usize> = BTreeMap::new();
    for d in &corpus.dialogues {
        let Some(goal) = &d.goal else { continue };
        let mut per_domain: BTreeMap<String, usize> = BTreeMap::new();
        for e in goal.goal_entries() {
            let domain = e
                .domain
                .clone()
                .or_else(|| corpus.db.slot_domain(&e.slot).map(str::to_string));
            if let Some(domain) = domain {
                *per_domain.entry(domain).or_default() += 1;
            }
        }
        let combo: BTreeSet<String> = if goal.domains.is_empty() {
            d.domains.clone()
        } else {
            goal.domains.clone()
        };
        *combos.entry(combo).or_default() += 1;
        for (_, k) in per_domain.into_iter().filter(|(_, k)| *k > 0) {
            *counts.entry(k).or_default() += 1;
        }
    }
    if combos.is_empty() {
        return Err(Error::NoGoals);
    }
    if counts.is_empty() {
        return Err(Error::InvalidArgument(
            "goals carry no attribute constraints".into(),
        ));
    }
    Ok(GoalStats {
        domain_combination_dist: normalize(&combos),
        attribute_count_dist: normalize(&counts),
    })
}

/// Samples a fresh goal. Every sampled constraint comes from the sampled
/// item, so the result is satisfiable in `db` by construction.
pub fn init_preference<R: Rng + ?Sized>(
    stats: &GoalStats,
    db: &ItemDatabase,
    rng: &mut R,
) -> Result<Preference> {
    let combo = draw(rng, &stats.domain_combination_dist)
        .ok_or_else(|| Error::EmptySupport("domain combination distribution".into()))?;
    let mut pref = Preference::default();
    for domain in combo {
        let table = db.table(domain).ok_or_else(|| Error::Unknown {
            kind: "domain",
            name: domain.clone(),
        })?;
        if table.items.is_empty() {
            return Err(Error::ItemDb(format!("table `{domain}` is empty")));
        }
        let item = &table.items[rng.random_range(0..table.items.len())];
        let slots = table.informable_slots();
        let k = *draw(rng, &stats.attribute_count_dist)
            .ok_or_else(|| Error::EmptySupport("attribute count distribution".into()))?;
        let k = k.min(slots.len());
        let mut picked = rand::seq::index::sample(rng, slots.len(), k).into_vec();
        picked.sort_unstable();
        for i in picked {
            let slot = slots[i];
            let value = item.get(slot).expect("uniform attribute keys");
            pref.push_goal(domain, slot, value)?;
        }
        pref.domains.insert(domain.clone());
    }
    debug_assert!(pref.is_satisfiable(db));
    Ok(pref)
}

/// Options for [`update_preference_with`].
#[derive(Debug, Clone, Copy)]
pub struct UpdateOptions {
    /// Append user-informed slots that are not yet in the preference.
    pub append_unknown_informs: bool,
}

impl Default for UpdateOptions {
    fn default() -> Self {
        UpdateOptions {
            append_unknown_informs: true,
        }
    }
}

/// The user's attitude towards a recommendation, read off their reaction.
pub fn favor_from_reaction(user_action: &Action) -> &'static str {
    if user_action.has_act("reject") {
        "dislike"
    } else if user_action.has_act("accept") {
        "like"
    } else {
        "unknown"
    }
}

pub fn update_preference(
    pref: &Preference,
    user_action: &Action,
    system_action: &Action,
) -> Preference {
    update_preference_with(pref, user_action, system_action, UpdateOptions::default())
}

/// Applies the two update rules: user-informed slots are tagged Informed,
/// and recommended items not yet present are appended with the user's
/// favor as value.
pub fn update_preference_with(
    pref: &Preference,
    user_action: &Action,
    system_action: &Action,
    opts: UpdateOptions,
) -> Preference {
    let mut next = pref.clone();
    for (slot, value) in user_action.slot_values("inform") {
        match next.entries.iter_mut().find(|e| e.slot == slot) {
            Some(e) => e.informed = true,
            None if opts.append_unknown_informs && value != "dontcare" => {
                next.entries.push(PreferenceEntry {
                    slot: slot.to_string(),
                    value: value.to_string(),
                    informed: true,
                    domain: None,
                    origin: EntryOrigin::Stated,
                })
            }
            None => {}
        }
    }
    let favor = favor_from_reaction(user_action);
    for (_, item) in system_action.slot_values("recommend") {
        if next.get(item).is_none() {
            next.entries.push(PreferenceEntry {
                slot: item.to_string(),
                value: favor.to_string(),
                informed: false,
                domain: None,
                origin: EntryOrigin::Recommended,
            });
        }
    }
    next
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::Triple;

    fn fig2() -> Preference {
        let mut p = Preference::default();
        p.push_goal("hotel", "hotel_parking", "yes").unwrap();
        p.push_goal("hotel", "hotel_price", "cheap").unwrap();
        p
    }

    #[test]
    fn inform_tags_entry() {
        let p = fig2();
        let user = Action::single(Triple::full("inform", "hotel_price", "cheap"));
        let next = update_preference(&p, &user, &Action::default());
        assert!(next.get("hotel_price").unwrap().informed);
        assert!(!next.get("hotel_parking").unwrap().informed);
        assert_eq!(
            next.to_string(),
            "hotel_parking=yes, hotel_price=cheap | Informed"
        );
        // idempotent
        assert_eq!(update_preference(&next, &user, &Action::default()), next);
    }

    #[test]
    fn recommendation_appended() {
        let p = fig2();
        let sys = Action::single(Triple::full("recommend", "movie", "titanic"));
        let user = Action::new(vec![Triple::act("reject")]);
        let next = update_preference(&p, &user, &sys);
        let e = next.get("titanic").unwrap();
        assert_eq!(e.value, "dislike");
        assert_eq!(e.origin, EntryOrigin::Recommended);
        let next2 = update_preference(&p, &Action::simple("bye"), &sys);
        assert_eq!(next2.get("titanic").unwrap().value, "unknown");
    }

    #[test]
    fn bye_is_noop() {
        let p = fig2();
        assert_eq!(
            update_preference(&p, &Action::simple("bye"), &Action::default()),
            p
        );
    }

    #[test]
    fn unknown_inform_respects_flag() {
        let p = fig2();
        let user = Action::single(Triple::full("inform", "hotel_wifi", "yes"));
        let on = update_preference(&p, &user, &Action::default());
        assert_eq!(on.get("hotel_wifi").unwrap().origin, EntryOrigin::Stated);
        let off = update_preference_with(
            &p,
            &user,
            &Action::default(),
            UpdateOptions {
                append_unknown_informs: false,
            },
        );
        assert_eq!(off, p);
    }

    #[test]
    fn text_round_trip() {
        let p: Preference = "hotel_parking=yes, hotel_price=cheap | Informed"
            .parse()
            .unwrap();
        assert_eq!(
            p.to_string(),
            "hotel_parking=yes, hotel_price=cheap | Informed"
        );
        assert!("novalue".parse::<Preference>().is_err());
    }
}
