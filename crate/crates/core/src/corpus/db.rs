use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::text;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Item {
    pub id: u64,
    pub attributes: BTreeMap<String, String>,
}

impl Item {
    pub fn get(&self, slot: &str) -> Option<&str> {
        self.attributes.get(slot).map(String::as_str)
    }

    /// True when every `(slot, value)` constraint equals this item's value.
    /// The value `dontcare` matches anything.
    pub fn matches<'a>(&self, constraints: impl IntoIterator<Item = (&'a str, &'a str)>) -> bool {
        constraints
            .into_iter()
            .all(|(slot, value)| value == "dontcare" || self.get(slot) == Some(value))
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Table {
    pub items: Vec<Item>,
    /// Attribute holding the item's display name, used for recommendations.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub name_slot: Option<String>,
    /// Attributes a user may ask about but never constrains on.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub requestable: Vec<String>,
}

impl Table {
    pub fn attribute_keys(&self) -> BTreeSet<&str> {
        self.items
            .first()
            .map(|i| i.attributes.keys().map(String::as_str).collect())
            .unwrap_or_default()
    }

    /// Attributes usable as goal constraints (neither name nor requestable).
    pub fn informable_slots(&self) -> Vec<&str> {
        self.attribute_keys()
            .into_iter()
            .filter(|s| {
                Some(*s) != self.name_slot.as_deref() && !self.requestable.iter().any(|r| r == s)
            })
            .collect()
    }

    pub fn get(&self, id: u64) -> Option<&Item> {
        self.items.iter().find(|i| i.id == id)
    }

    pub fn find_by_name(&self, name: &str) -> Option<&Item> {
        let slot = self.name_slot.as_deref()?;
        self.items.iter().find(|i| i.get(slot) == Some(name))
    }

    fn validate(&self, domain: &str) -> Result<()> {
        let mut ids = BTreeSet::new();
        let keys = self.attribute_keys();
        for item in &self.items {
            if !ids.insert(item.id) {
                return Err(Error::ItemDb(format!(
                    "table `{domain}`: duplicate item id {}",
                    item.id
                )));
            }
            let own: BTreeSet<&str> = item.attributes.keys().map(String::as_str).collect();
            if own != keys {
                return Err(Error::ItemDb(format!(
                    "table `{domain}`: item {} has ragged attribute keys",
                    item.id
                )));
            }
        }
        if let Some(name) = &self.name_slot {
            if !self.items.is_empty() && !keys.contains(name.as_str()) {
                return Err(Error::ItemDb(format!(
                    "table `{domain}`: name slot `{name}` missing"
                )));
            }
        }
        Ok(())
    }
}

/// A value phrase the lexical matchers look for in utterances.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LexiconEntry {
    pub tokens: Vec<String>,
    pub slot: String,
    pub value: String,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ItemDatabase {
    #[serde(default = "default_version")]
    pub schema_version: u32,
    pub tables: BTreeMap<String, Table>,
    /// Slots used in dialogue actions that are not item attributes.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub extra_slots: Vec<String>,
}

fn default_version() -> u32 {
    super::SCHEMA_VERSION
}

impl ItemDatabase {
    pub fn new(tables: BTreeMap<String, Table>) -> Result<Self> {
        let db = ItemDatabase {
            schema_version: super::SCHEMA_VERSION,
            tables,
            extra_slots: Vec::new(),
        };
        db.validate()?;
        Ok(db)
    }

    pub fn validate(&self) -> Result<()> {
        if self.schema_version != super::SCHEMA_VERSION {
            return Err(Error::ItemDb(format!(
                "unsupported schema_version {}",
                self.schema_version
            )));
        }
        self.tables.iter().try_for_each(|(d, t)| t.validate(d))
    }

    pub fn table(&self, domain: &str) -> Option<&Table> {
        self.tables.get(domain)
    }

    pub fn domains(&self) -> impl Iterator<Item = &str> {
        self.tables.keys().map(String::as_str)
    }

    /// Attribute keys of all tables plus declared extra slots.
    pub fn slot_registry(&self) -> BTreeSet<&str> {
        self.tables
            .values()
            .flat_map(|t| t.attribute_keys())
            .chain(self.extra_slots.iter().map(String::as_str))
            .collect()
    }

    /// Domains whose table carries the given attribute.
    pub fn slot_domains(&self, slot: &str) -> Vec<&str> {
        self.tables
            .iter()
            .filter(|(_, t)| t.attribute_keys().contains(slot))
            .map(|(d, _)| d.as_str())
            .collect()
    }

    pub fn slot_domain(&self, slot: &str) -> Option<&str> {
        self.slot_domains(slot).into_iter().next()
    }

    pub fn is_name_slot(&self, slot: &str) -> bool {
        self.tables
            .values()
            .any(|t| t.name_slot.as_deref() == Some(slot))
    }

    /// Items of `domain` matching every constraint, in table order.
    pub fn query<'a>(&'a self, domain: &str, constraints: &[(String, String)]) -> Vec<&'a Item> {
        self.table(domain)
            .map(|t| {
                t.items
                    .iter()
                    .filter(|i| {
                        i.matches(constraints.iter().map(|(s, v)| (s.as_str(), v.as_str())))
                    })
                    .collect()
            })
            .unwrap_or_default()
    }

    /// Every distinct `(slot, value)` in the database as a token phrase,
    /// longest phrases first so greedy matching prefers specific values.
    pub fn value_lexicon(&self) -> Vec<LexiconEntry> {
        let mut seen = BTreeSet::new();
        let mut out = Vec::new();
        for table in self.tables.values() {
            for item in &table.items {
                for (slot, value) in &item.attributes {
                    if seen.insert((slot.clone(), value.clone())) {
                        let tokens = text::tokenize(value);
                        if !tokens.is_empty() {
                            out.push(LexiconEntry {
                                tokens,
                                slot: slot.clone(),
                                value: value.clone(),
                            });
                        }
                    }
                }
            }
        }
        out.sort_by(|a, b| {
            b.tokens
                .len()
                .cmp(&a.tokens.len())
                .then_with(|| a.slot.cmp(&b.slot))
                .then_with(|| a.value.cmp(&b.value))
        });
        out
    }
}

/// Finds non-overlapping lexicon matches in `tokens`, preferring longer
/// phrases, returned in utterance order.
pub fn match_values<'a>(tokens: &[String], lexicon: &'a [LexiconEntry]) -> Vec<&'a LexiconEntry> {
    let mut taken = vec![false; tokens.len()];
    let mut hits: Vec<(usize, &LexiconEntry)> = Vec::new();
    for entry in lexicon {
        let n = entry.tokens.len();
        if n > tokens.len() {
            continue;
        }
        for start in 0..=tokens.len() - n {
            if taken[start..start + n].iter().any(|t| *t) {
                continue;
            }
            if tokens[start..start + n] == entry.tokens[..] {
                taken[start..start + n].iter_mut().for_each(|t| *t = true);
                hits.push((start, entry));
            }
        }
    }
    hits.sort_by_key(|(pos, _)| *pos);
    hits.into_iter().map(|(_, e)| e).collect()
}
