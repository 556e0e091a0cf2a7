//! Synthetic benchmark: a small multi-domain item database and dialogues
//! between a scripted reference user and the full-knowledge reference
//! system.
//!
//! The reference user's act and satisfaction choices are fixed tables
//! keyed by [`Signal`], so downstream statistics have known targets.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;
use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{io, Action, Corpus, Dialogue, Item, ItemDatabase, Table, Triple};
use crate::error::{Error, Result};
use crate::nlg::TemplateBank;
use crate::nlu::DialogueState;
use crate::policy::{analyze_turn, SatisfactionLabel, Signal};
use crate::preference::{init_preference, GoalStats, Preference};
use crate::sampling::{derive_seed, rng_from_seed, sample_weighted, SimRng};
use crate::simulators::{SimulatorSession, UserSimulator};
use crate::tester::{make_tester, run_dialogue, RuleSystem, SystemKnowledge, VariantConfig};
use crate::text;

const DOMAINS: &[&str] = &[
    "hotel",
    "restaurant",
    "attraction",
    "train",
    "taxi",
    "hospital",
    "police",
    "bus",
];
const ATTRIBUTES: &[&str] = &[
    "price", "area", "stars", "parking", "type", "food", "day", "internet",
];
const SYLLABLES: &[&str] = &[
    "ka", "be", "di", "fo", "gu", "la", "me", "ni", "po", "ru", "sa", "te", "vi", "zo",
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub domains: usize,
    /// Informable slots per domain.
    pub slots: usize,
    pub values_per_slot: usize,
    pub items: usize,
    pub dialogues: usize,
    /// Share of two-domain goals.
    pub multi_domain_rate: f64,
    /// Probability of 1, 2, 3, ... goal constraints per domain, truncated to
    /// `slots` and renormalized.
    pub attribute_counts: Vec<f64>,
    pub max_turns: usize,
    /// Share of dialogues held with a degraded system variant, so the
    /// corpus covers misunderstandings and wrong recommendations.
    pub degraded_rate: f64,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            domains: 3,
            slots: 5,
            values_per_slot: 6,
            items: 100,
            dialogues: 1000,
            multi_domain_rate: 0.25,
            attribute_counts: vec![0.1, 0.25, 0.35, 0.2, 0.1],
            max_turns: 20,
            degraded_rate: 0.4,
            seed: 0,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if self.domains == 0
            || self.slots == 0
            || self.values_per_slot == 0
            || self.items == 0
            || self.dialogues == 0
        {
            return bad("domain, slot, value, item and dialogue counts must be at least 1".into());
        }
        if self.domains > DOMAINS.len() || self.slots > ATTRIBUTES.len() {
            return bad(format!(
                "at most {} domains and {} slots",
                DOMAINS.len(),
                ATTRIBUTES.len()
            ));
        }
        let words = self.domains * (self.slots * self.values_per_slot + self.items);
        if words > SYLLABLES.len().pow(3) {
            return bad(format!("{words} distinct value words requested"));
        }
        if !(0.0..=1.0).contains(&self.multi_domain_rate)
            || (self.domains == 1 && self.multi_domain_rate > 0.0)
        {
            return bad("multi_domain_rate must be in [0, 1] and 0 for a single domain".into());
        }
        if self.attribute_counts.iter().take(self.slots).sum::<f64>() <= 0.0
            || self.attribute_counts.iter().any(|p| *p < 0.0)
        {
            return bad("attribute_counts needs positive mass on 1..=slots".into());
        }
        if !(0.0..=1.0).contains(&self.degraded_rate) {
            return bad("degraded_rate must be in [0, 1]".into());
        }
        if self.max_turns == 0 {
            return bad("max_turns must be at least 1".into());
        }
        Ok(())
    }

    /// Goal distribution the generator samples from.
    pub fn goal_stats(&self) -> GoalStats {
        let names: Vec<String> = DOMAINS[..self.domains]
            .iter()
            .map(|d| d.to_string())
            .collect();
        let mut combos = BTreeMap::new();
        let single = if self.domains == 1 {
            1.0
        } else {
            1.0 - self.multi_domain_rate
        };
        for d in &names {
            combos.insert(BTreeSet::from([d.clone()]), single / self.domains as f64);
        }
        let pairs: Vec<BTreeSet<String>> = names
            .iter()
            .enumerate()
            .flat_map(|(i, a)| {
                names[i + 1..]
                    .iter()
                    .map(move |b| BTreeSet::from([a.clone(), b.clone()]))
            })
            .collect();
        for p in &pairs {
            combos.insert(p.clone(), self.multi_domain_rate / pairs.len() as f64);
        }
        combos.retain(|_, p| *p > 0.0);
        let mass: Vec<f64> = self
            .attribute_counts
            .iter()
            .take(self.slots)
            .copied()
            .collect();
        let z: f64 = mass.iter().sum();
        let attribute_count_dist = mass
            .iter()
            .enumerate()
            .filter(|(_, p)| **p > 0.0)
            .map(|(i, p)| (i + 1, p / z))
            .collect();
        GoalStats {
            domain_combination_dist: combos,
            attribute_count_dist,
        }
    }
}

fn word(i: usize) -> String {
    let n = SYLLABLES.len();
    [i / (n * n), (i / n) % n, i % n]
        .iter()
        .map(|&k| SYLLABLES[k])
        .collect()
}

/// Item tables with globally unique value words. Names are
/// `"<word> <domain>"`; each table has a requestable `<domain>_postcode`.
pub fn generate_db(spec: &SynthSpec) -> Result<ItemDatabase> {
    spec.validate()?;
    let mut rng = rng_from_seed(derive_seed(spec.seed, &[0]));
    let mut next_word = 0;
    let mut fresh = || {
        next_word += 1;
        word(next_word - 1)
    };
    let mut tables = BTreeMap::new();
    for (di, domain) in DOMAINS[..spec.domains].iter().enumerate() {
        let slots: Vec<(String, Vec<String>)> = ATTRIBUTES[..spec.slots]
            .iter()
            .map(|a| {
                (
                    format!("{domain}_{a}"),
                    (0..spec.values_per_slot).map(|_| fresh()).collect(),
                )
            })
            .collect();
        let items = (0..spec.items)
            .map(|i| {
                let mut attributes: BTreeMap<String, String> = slots
                    .iter()
                    .map(|(s, vals)| (s.clone(), vals[rng.random_range(0..vals.len())].clone()))
                    .collect();
                attributes.insert(format!("{domain}_name"), format!("{} {domain}", fresh()));
                attributes.insert(format!("{domain}_postcode"), format!("cb{di}{i:03}"));
                Item {
                    id: i as u64,
                    attributes,
                }
            })
            .collect();
        tables.insert(
            domain.to_string(),
            Table {
                items,
                name_slot: Some(format!("{domain}_name")),
                requestable: vec![format!("{domain}_postcode")],
            },
        );
    }
    ItemDatabase::new(tables)
}

/// Goal domains that already received a conflict-free recommendation.
fn matched_domains(
    pref: &Preference,
    state: &DialogueState,
    db: &ItemDatabase,
) -> BTreeSet<String> {
    let system: Vec<&Action> = state.steps().iter().map(|s| &s.system).collect();
    let mut out = BTreeSet::new();
    for d in pref.goal_domains() {
        let constraints = pref.constraints(d);
        let Some(table) = db.table(d) else { continue };
        let hit = crate::metrics::recommended_items(system.iter().copied(), db)
            .iter()
            .filter(|(rd, _)| rd == d)
            .any(|(_, n)| {
                table.find_by_name(n).is_some_and(|i| {
                    i.matches(constraints.iter().map(|(s, v)| (s.as_str(), v.as_str())))
                })
            });
        if hit {
            out.insert(d.to_string());
        }
    }
    out
}

/// Scripted ground-truth user. It reads the system's true actions from the
/// session log, so it only works against systems that report them.
#[derive(Debug, Clone)]
pub struct ReferenceUser {
    db: Arc<ItemDatabase>,
    max_turns: usize,
}

fn draw_sat(rng: &mut SimRng, probs: [f64; 3]) -> SatisfactionLabel {
    let i = sample_weighted(rng, &probs).unwrap_or(1);
    SatisfactionLabel::all()[i]
}

impl ReferenceUser {
    pub fn new(db: Arc<ItemDatabase>, max_turns: usize) -> Self {
        ReferenceUser { db, max_turns }
    }

    fn informs(pref: &Preference, domain: &str, n: usize, restate: bool) -> Vec<Triple> {
        let open: Vec<Triple> = pref
            .goal_entries()
            .filter(|e| e.domain.as_deref() == Some(domain) && !e.informed)
            .take(n)
            .map(|e| Triple::full("inform", &e.slot, &e.value))
            .collect();
        if !open.is_empty() || !restate {
            return open;
        }
        pref.constraints(domain)
            .iter()
            .map(|(s, v)| Triple::full("inform", s, v))
            .collect()
    }

    /// Act and satisfaction for the current state.
    pub fn decide(
        &self,
        pref: &Preference,
        state: &DialogueState,
        asked: bool,
        rng: &mut SimRng,
    ) -> (Action, SatisfactionLabel) {
        let view = analyze_turn(pref, state, &self.db);
        let matched = matched_domains(pref, state, &self.db);
        let target = pref
            .goal_domains()
            .into_iter()
            .find(|d| !matched.contains(*d))
            .map(str::to_string);
        let chunk = if rng.random::<f64>() < 0.7 { 1 } else { 2 };
        let continue_with = |target: &Option<String>, rng: &mut SimRng| -> Action {
            match target {
                Some(d) => Action::new(Self::informs(pref, d, chunk, true)),
                None => {
                    let ask = view
                        .matched_domain
                        .as_ref()
                        .and_then(|d| self.db.table(d))
                        .and_then(|t| t.requestable.first());
                    match ask {
                        Some(slot) if !asked && rng.random::<f64>() < 0.3 => {
                            Action::single(Triple::slot("request", slot))
                        }
                        _ => Action::simple("bye"),
                    }
                }
            }
        };
        match view.signal {
            Signal::Start | Signal::Reqmore => {
                let sat = if view.signal == Signal::Start {
                    SatisfactionLabel::FAIR
                } else {
                    draw_sat(rng, [0.8, 0.2, 0.0])
                };
                (continue_with(&target, rng), sat)
            }
            Signal::RecommendMatch | Signal::Inform => {
                let sat = draw_sat(rng, [0.0, 0.15, 0.85]);
                (continue_with(&target, rng), sat)
            }
            Signal::RecommendConflict => {
                let mut a = Action::default();
                if rng.random::<f64>() < 0.85 {
                    a.push(Triple::act("reject"));
                }
                for (s, _) in view.conflicts.iter().take(chunk) {
                    if let Some(e) = pref.goal_entries().find(|e| &e.slot == s) {
                        a.push(Triple::full("inform", &e.slot, &e.value));
                    }
                }
                (a, draw_sat(rng, [0.4, 0.6, 0.0]))
            }
            Signal::RecommendOffGoal => {
                let mut a = Action::single(Triple::act("reject"));
                if let Some(d) = &target {
                    Self::informs(pref, d, chunk, true)
                        .into_iter()
                        .for_each(|t| a.push(t));
                }
                (a, draw_sat(rng, [0.5, 0.5, 0.0]))
            }
            Signal::NoOffer => {
                let d = target.or(view.domain.clone());
                let a = match d {
                    Some(d) => Action::new(
                        Self::informs(pref, &d, usize::MAX, false)
                            .into_iter()
                            .chain(
                                pref.constraints(&d)
                                    .iter()
                                    .map(|(s, v)| Triple::full("inform", s, v)),
                            )
                            .collect::<Vec<_>>(),
                    ),
                    None => Action::simple("bye"),
                };
                (dedup(a), draw_sat(rng, [0.6, 0.4, 0.0]))
            }
            Signal::RequestGoal => {
                let a = Action::new(
                    view.requested
                        .iter()
                        .filter_map(|s| pref.goal_entries().find(|e| &e.slot == s))
                        .map(|e| Triple::full("inform", &e.slot, &e.value))
                        .collect(),
                );
                (a, SatisfactionLabel::FAIR)
            }
            Signal::RequestOther | Signal::Bye => (Action::simple("bye"), SatisfactionLabel::FAIR),
        }
    }
}

fn dedup(a: Action) -> Action {
    let mut seen = BTreeSet::new();
    Action::new(
        a.triples
            .into_iter()
            .filter(|t| seen.insert(t.clone()))
            .collect(),
    )
}

const INFORM_PHRASES: &[&str] = &[
    "i am looking for a {d} that is {v} .",
    "i need a {d} with {v} .",
    "can you find me something {v} ?",
    "i would like {v} please .",
    "it should be {v} .",
];
const REJECT_PHRASES: &[&str] = &[
    "no , that does not work .",
    "that is not what i want .",
    "no thanks , not that one .",
];
const REQUEST_PHRASES: &[&str] = &[
    "what is the {s} ?",
    "can i get the {s} please ?",
    "could you tell me the {s} ?",
];
const BYE_PHRASES: &[&str] = &[
    "thank you , goodbye .",
    "that is all i need , bye .",
    "great , thanks . bye .",
];

fn pick<'a>(rng: &mut SimRng, xs: &[&'a str]) -> &'a str {
    xs[rng.random_range(0..xs.len())]
}

/// Surface form of a reference-user action. Values appear verbatim.
pub fn phrase(action: &Action, db: &ItemDatabase, rng: &mut SimRng) -> String {
    let mut parts: Vec<String> = Vec::new();
    if action.has_act("reject") {
        parts.push(pick(rng, REJECT_PHRASES).to_string());
    }
    let values: Vec<(&str, &str)> = action.slot_values("inform").collect();
    if let Some((slot, _)) = values.first() {
        let d = db.slot_domain(slot).unwrap_or("place");
        let vs: Vec<&str> = values.iter().map(|(_, v)| *v).collect();
        parts.push(
            pick(rng, INFORM_PHRASES)
                .replace("{d}", d)
                .replace("{v}", &vs.join(" and ")),
        );
    }
    for t in action.dialogue_triples().filter(|t| t.act == "request") {
        if let Some(s) = &t.slot {
            let bare = s.split_once('_').map(|(_, b)| b).unwrap_or(s);
            parts.push(pick(rng, REQUEST_PHRASES).replace("{s}", bare));
        }
    }
    if action.has_act("bye") {
        parts.push(format!("{} {}", pick(rng, BYE_PHRASES), text::END_MARKER));
    }
    if parts.is_empty() {
        parts.push("hello .".into());
    }
    parts.join(" ")
}

impl UserSimulator for ReferenceUser {
    fn name(&self) -> &str {
        "reference"
    }

    fn start(&self, goal: Preference, seed: u64) -> SimulatorSession {
        SimulatorSession::new(goal, seed, self.max_turns)
    }

    fn turn(
        &self,
        session: &mut SimulatorSession,
        system_utterance: Option<&str>,
    ) -> Result<String> {
        let logged = session.logged_system.last().cloned().unwrap_or_default();
        let system = session.observe_with(system_utterance, |_, _| Ok(logged))?;
        let asked = session.user_actions().any(|a| a.has_act("request"));
        let mut rng = session.rng().clone();
        let (action, sat) = self.decide(&session.pref, &session.state, asked, &mut rng);
        let action = if action.is_empty() {
            Action::simple("bye")
        } else {
            action
        };
        let utterance = phrase(&action, &self.db, &mut rng);
        *session.rng() = rng;
        Ok(session.commit(utterance, action, &system, sat))
    }
}

fn reference_knowledge(db: &ItemDatabase) -> SystemKnowledge {
    let lexicon = db
        .value_lexicon()
        .into_iter()
        .filter(|e| {
            db.slot_domain(&e.slot)
                .and_then(|d| db.table(d))
                .is_some_and(|t| t.informable_slots().contains(&e.slot.as_str()))
        })
        .collect();
    SystemKnowledge::new(lexicon, TemplateBank::new(Vec::new()))
}

/// Full-knowledge reference system used to generate the corpus.
pub fn reference_system(db: Arc<ItemDatabase>) -> RuleSystem {
    RuleSystem::new(
        VariantConfig::base(),
        Arc::new(reference_knowledge(&db)),
        db,
    )
}

/// The base system followed by the degraded variants of every tester.
fn corpus_systems(db: &Arc<ItemDatabase>, seed: u64) -> Result<Vec<RuleSystem>> {
    let full = reference_knowledge(db);
    let mut variants = vec![VariantConfig::base()];
    for kind in ["context", "recommender", "domain"] {
        variants.extend(
            make_tester(kind, VariantConfig::base())?
                .variants
                .into_iter()
                .skip(1),
        );
    }
    Ok(variants
        .into_iter()
        .enumerate()
        .map(|(i, v)| {
            let knowledge = full.subsample(
                v.gamma,
                &mut rng_from_seed(derive_seed(seed, &[4, i as u64])),
            );
            RuleSystem::new(v, Arc::new(knowledge), db.clone())
        })
        .collect())
}

/// Generates the database and `spec.dialogues` conversations. Identical
/// specs give identical corpora.
pub fn generate_corpus(spec: &SynthSpec) -> Result<Corpus> {
    let db = Arc::new(generate_db(spec)?);
    let stats = spec.goal_stats();
    let user = ReferenceUser::new(db.clone(), spec.max_turns);
    let systems = corpus_systems(&db, spec.seed)?;
    let dialogues = (0..spec.dialogues)
        .map(|i| {
            let mut rng = rng_from_seed(derive_seed(spec.seed, &[1, i as u64]));
            let goal = init_preference(&stats, &db, &mut rng)?;
            let system = if rng.random::<f64>() < spec.degraded_rate {
                &systems[rng.random_range(1..systems.len())]
            } else {
                &systems[0]
            };
            let mut session = user.start(goal.clone(), derive_seed(spec.seed, &[2, i as u64]));
            let mut sys = system.start(derive_seed(spec.seed, &[3, i as u64]));
            run_dialogue(&user, &mut session, system, &mut sys)?;
            let turns = session.context.clone();
            let domains = goal.domains.clone();
            Ok(Dialogue {
                id: format!("synth-{i:05}"),
                domains,
                goal: Some(goal),
                turns,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Corpus::new(dialogues, (*db).clone())
}

/// Writes `<dir>/corpus.jsonl` and the adjacent item database.
pub fn write_synthetic(dir: &Path, corpus: &Corpus) -> Result<std::path::PathBuf> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let path = dir.join("corpus.jsonl");
    io::write_corpus(&path, &corpus.dialogues)?;
    io::write_item_db(io::adjacent_db_path(&path), &corpus.db)?;
    Ok(path)
}
