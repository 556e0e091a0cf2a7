//! Testers: calibrated variants of a rule-based reference system, and the
//! ExactDistinct score of an evaluator's ranking of those variants.
//!
//! A variant degrades the reference system along one axis: `alpha` keeps
//! only the last utterances before understanding, `beta` drops query
//! constraints, `gamma` shrinks the value vocabulary and template bank.

use std::collections::BTreeMap;
use std::fmt;
use std::sync::Arc;

use rand::seq::index;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{
    match_values, Action, Corpus, Item, ItemDatabase, LexiconEntry, Speaker, Triple, Turn,
};
use crate::error::{Error, Result};
use crate::nlg::{complete_template, fill_slots, Template, TemplateBank};
use crate::preference::{init_preference, GoalStats, Preference};
use crate::registry::Registry;
use crate::sampling::{derive_seed, rng_from_seed, SimRng};
use crate::simulators::{rate_dialogue, DialogueRating, SimulatorSession, UserSimulator};
use crate::text;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariantConfig {
    /// Utterances of history kept.
    pub alpha: usize,
    /// Fraction of query constraints kept.
    pub beta: f64,
    /// Fraction of vocabulary and templates kept.
    pub gamma: f64,
    pub label: String,
}

impl VariantConfig {
    pub fn base() -> Self {
        VariantConfig {
            alpha: 15,
            beta: 1.0,
            gamma: 1.0,
            label: "base".into(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let frac = |x: f64| x > 0.0 && x <= 1.0;
        if self.alpha == 0 || !frac(self.beta) || !frac(self.gamma) {
            return Err(Error::InvalidArgument(format!(
                "variant `{}` needs alpha >= 1 and beta, gamma in (0, 1]",
                self.label
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TesterKind {
    Context,
    Recommender,
    Domain,
}

impl TesterKind {
    pub fn name(self) -> &'static str {
        match self {
            TesterKind::Context => "context",
            TesterKind::Recommender => "recommender",
            TesterKind::Domain => "domain",
        }
    }
}

/// Variants ordered best to worst; the expected ranking is `0..n`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tester {
    pub kind: TesterKind,
    pub variants: Vec<VariantConfig>,
}

impl Tester {
    pub fn new(kind: TesterKind, variants: Vec<VariantConfig>) -> Result<Self> {
        if variants.len() < 2 {
            return Err(Error::InvalidArgument(
                "a tester needs at least two variants".into(),
            ));
        }
        for v in &variants {
            v.validate()?;
        }
        for (i, a) in variants.iter().enumerate() {
            if variants[i + 1..]
                .iter()
                .any(|b| b.alpha == a.alpha && b.beta == a.beta && b.gamma == a.gamma)
            {
                return Err(Error::InvalidArgument(format!(
                    "duplicate variant `{}`",
                    a.label
                )));
            }
        }
        Ok(Tester { kind, variants })
    }

    pub fn expected_order(&self) -> Vec<usize> {
        (0..self.variants.len()).collect()
    }

    pub fn labels(&self) -> Vec<String> {
        self.variants.iter().map(|v| v.label.clone()).collect()
    }

    /// Builds one reference system per variant. Knowledge subsampling for
    /// variant `i` is seeded with `derive_seed(seed, [i])`.
    pub fn instantiate(&self, corpus: &Corpus, seed: u64) -> Vec<RuleSystem> {
        let full = SystemKnowledge::from_corpus(corpus);
        let db = Arc::new(corpus.db.clone());
        self.variants
            .iter()
            .enumerate()
            .map(|(i, v)| {
                let mut rng = rng_from_seed(derive_seed(seed, &[i as u64]));
                let knowledge = Arc::new(full.subsample(v.gamma, &mut rng));
                RuleSystem::new(v.clone(), knowledge, db.clone())
            })
            .collect()
    }
}

pub type TesterFactory = fn(VariantConfig) -> Tester;

fn degraded(base: &VariantConfig, kind: TesterKind, params: [f64; 2]) -> Tester {
    let mut variants = vec![base.clone()];
    for p in params {
        let mut v = base.clone();
        match kind {
            TesterKind::Context => {
                v.alpha = p as usize;
                v.label = format!("alpha={}", v.alpha);
            }
            TesterKind::Recommender => {
                v.beta = p;
                v.label = format!("beta={p}");
            }
            TesterKind::Domain => {
                v.gamma = p;
                v.label = format!("gamma={p}");
            }
        }
        variants.push(v);
    }
    Tester { kind, variants }
}

pub fn tester_registry() -> Registry<TesterFactory> {
    let mut r: Registry<TesterFactory> = Registry::new("tester");
    r.register("context", |b| degraded(&b, TesterKind::Context, [3.0, 1.0]));
    r.register("recommender", |b| {
        degraded(&b, TesterKind::Recommender, [0.4, 0.1])
    });
    r.register("domain", |b| degraded(&b, TesterKind::Domain, [0.1, 0.01]));
    r
}

/// `base` plus the two default degraded variants of `kind`.
pub fn make_tester(kind: &str, base: VariantConfig) -> Result<Tester> {
    base.validate()?;
    let t = (tester_registry().get(kind)?)(base);
    Tester::new(t.kind, t.variants)
}

/// A conjunctive lookup against one domain table.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DbQuery {
    pub domain: String,
    pub constraints: Vec<(String, String)>,
}

impl DbQuery {
    pub fn run<'a>(&self, db: &'a ItemDatabase) -> Vec<&'a Item> {
        db.query(&self.domain, &self.constraints)
    }
}

fn bare_slot<'a>(domain: &str, slot: &'a str) -> &'a str {
    slot.strip_prefix(domain)
        .and_then(|s| s.strip_prefix('_'))
        .unwrap_or(slot)
}

impl fmt::Display for DbQuery {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mut table = self.domain.chars();
        let table: String = table
            .next()
            .map(|c| c.to_uppercase().chain(table).collect())
            .unwrap_or_default();
        write!(f, "select * from {table}")?;
        for (i, (s, v)) in self.constraints.iter().enumerate() {
            let sep = if i == 0 { " where " } else { " and " };
            write!(f, "{sep}{}={v}", bare_slot(&self.domain, s))?;
        }
        Ok(())
    }
}

/// Keeps `⌈beta·m⌉` of the `m` constraints. The RNG is consulted only
/// when something is dropped; kept constraints stay in belief order.
pub fn build_db_query<R: Rng + ?Sized>(
    domain: &str,
    belief: &[(String, String)],
    beta: f64,
    rng: &mut R,
) -> DbQuery {
    let m = belief.len();
    let keep = ((beta * m as f64).ceil() as usize).min(m);
    let constraints = if keep == m {
        belief.to_vec()
    } else {
        let mut idx = index::sample(rng, m, keep).into_vec();
        idx.sort_unstable();
        idx.into_iter().map(|i| belief[i].clone()).collect()
    };
    DbQuery {
        domain: domain.to_string(),
        constraints,
    }
}

/// What a reference system knows: the value vocabulary it can recognize
/// and the response templates it can say.
#[derive(Debug, Clone)]
pub struct SystemKnowledge {
    pub lexicon: Vec<LexiconEntry>,
    pub bank: TemplateBank,
}

fn sort_lexicon(lex: &mut [LexiconEntry]) {
    lex.sort_by(|a, b| {
        b.tokens
            .len()
            .cmp(&a.tokens.len())
            .then_with(|| a.slot.cmp(&b.slot))
            .then_with(|| a.value.cmp(&b.value))
    });
}

impl SystemKnowledge {
    pub fn new(mut lexicon: Vec<LexiconEntry>, bank: TemplateBank) -> Self {
        sort_lexicon(&mut lexicon);
        SystemKnowledge { lexicon, bank }
    }

    /// Values the users of `corpus` informed, and the system-side
    /// templates.
    pub fn from_corpus(corpus: &Corpus) -> Self {
        let mut seen = std::collections::BTreeSet::new();
        let mut lexicon = Vec::new();
        for d in &corpus.dialogues {
            for (_, t) in d.user_turns() {
                let Some(a) = &t.action else { continue };
                for (slot, value) in a.slot_values("inform") {
                    if corpus.db.is_name_slot(slot)
                        || !seen.insert((slot.to_string(), value.to_string()))
                    {
                        continue;
                    }
                    let tokens = text::tokenize(value);
                    if !tokens.is_empty() {
                        lexicon.push(LexiconEntry {
                            tokens,
                            slot: slot.to_string(),
                            value: value.to_string(),
                        });
                    }
                }
            }
        }
        Self::new(
            lexicon,
            TemplateBank::from_dialogues(&corpus.dialogues, Speaker::System),
        )
    }

    /// Keeps `⌈gamma·n⌉` lexicon entries and templates.
    pub fn subsample<R: Rng + ?Sized>(&self, gamma: f64, rng: &mut R) -> Self {
        fn pick<T: Clone, R: Rng + ?Sized>(xs: &[T], gamma: f64, rng: &mut R) -> Vec<T> {
            let keep = ((gamma * xs.len() as f64).ceil() as usize).min(xs.len());
            if keep == xs.len() {
                return xs.to_vec();
            }
            let mut idx = index::sample(rng, xs.len(), keep).into_vec();
            idx.sort_unstable();
            idx.into_iter().map(|i| xs[i].clone()).collect()
        }
        let lexicon = pick(&self.lexicon, gamma, rng);
        let templates = pick(self.bank.templates(), gamma, rng);
        SystemKnowledge {
            lexicon,
            bank: TemplateBank::new(templates),
        }
    }
}

/// Per-conversation state of a reference system.
#[derive(Debug, Clone)]
pub struct SystemSession {
    pub history: Vec<Turn>,
    pub terminated: bool,
    rng: SimRng,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SystemReply {
    pub utterance: String,
    pub action: Action,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub query: Option<String>,
}

const TEMPLATE_DRAWS: usize = 5;

/// Rule-based reference dialogue system parameterized by a variant.
#[derive(Debug, Clone)]
pub struct RuleSystem {
    pub variant: VariantConfig,
    knowledge: Arc<SystemKnowledge>,
    db: Arc<ItemDatabase>,
}

impl RuleSystem {
    pub fn new(
        variant: VariantConfig,
        knowledge: Arc<SystemKnowledge>,
        db: Arc<ItemDatabase>,
    ) -> Self {
        RuleSystem {
            variant,
            knowledge,
            db,
        }
    }

    pub fn knowledge(&self) -> &SystemKnowledge {
        &self.knowledge
    }

    pub fn start(&self, seed: u64) -> SystemSession {
        SystemSession {
            history: Vec::new(),
            terminated: false,
            rng: rng_from_seed(seed),
        }
    }

    /// Belief over the last `alpha` utterances, last value per slot wins,
    /// plus the domain of the most recent value heard.
    pub fn window_belief(&self, window: &[Turn]) -> (Vec<(String, String)>, Option<String>) {
        let mut belief: Vec<(String, String)> = Vec::new();
        let mut domain = None;
        for t in window.iter().filter(|t| t.speaker == Speaker::User) {
            for e in match_values(&text::tokenize(&t.utterance), &self.knowledge.lexicon) {
                belief.retain(|(s, _)| s != &e.slot);
                belief.push((e.slot.clone(), e.value.clone()));
                if let Some(d) = self.db.slot_domain(&e.slot) {
                    domain = Some(d.to_string());
                }
            }
        }
        (belief, domain)
    }

    fn decide(&self, window: &[Turn], rng: &mut SimRng) -> (Action, Option<DbQuery>) {
        let Some(user) = window.last() else {
            return (Action::simple("reqmore"), None);
        };
        let tokens = text::tokenize(&user.utterance);
        if text::has_end_marker(&user.utterance)
            || tokens.iter().any(|t| t == "bye" || t == "goodbye")
        {
            return (Action::simple("bye"), None);
        }

        let recommended = window
            .iter()
            .rev()
            .filter(|t| t.speaker == Speaker::System)
            .filter_map(|t| t.action.as_ref())
            .find_map(|a| self.recommended_item(a));
        if let Some((domain, item)) = recommended {
            let table = self.db.table(&domain);
            let asked: Vec<&String> = table
                .map(|t| {
                    t.requestable
                        .iter()
                        .filter(|s| tokens.iter().any(|w| w == bare_slot(&domain, s)))
                        .collect()
                })
                .unwrap_or_default();
            if !asked.is_empty() {
                let mut a = Action::default();
                if let Some(ns) = table.and_then(|t| t.name_slot.as_ref()) {
                    if let Some(n) = item.get(ns) {
                        a.push(Triple::full("inform", ns, n));
                    }
                }
                for s in asked {
                    if let Some(v) = item.get(s) {
                        a.push(Triple::full("inform", s, v));
                    }
                }
                return (a, None);
            }
        }

        let (belief, domain) = self.window_belief(window);
        let Some(domain) = domain else {
            return (Action::simple("reqmore"), None);
        };
        let constraints: Vec<(String, String)> = belief
            .into_iter()
            .filter(|(s, _)| self.db.slot_domain(s) == Some(domain.as_str()))
            .collect();
        let query = build_db_query(&domain, &constraints, self.variant.beta, rng);
        let action = match query.run(&self.db).first() {
            Some(item) => self.recommend(&domain, item),
            None => Action::new(
                query
                    .constraints
                    .iter()
                    .map(|(s, v)| Triple::full("nooffer", s, v))
                    .collect(),
            ),
        };
        (action, Some(query))
    }

    fn recommended_item(&self, a: &Action) -> Option<(String, Item)> {
        a.slot_values("recommend").find_map(|(slot, name)| {
            if !self.db.is_name_slot(slot) {
                return None;
            }
            let d = self.db.slot_domain(slot)?;
            self.db
                .table(d)?
                .find_by_name(name)
                .map(|i| (d.to_string(), i.clone()))
        })
    }

    /// Name as `recommend`, attributes as `inform`.
    fn recommend(&self, domain: &str, item: &Item) -> Action {
        let mut a = Action::default();
        let Some(table) = self.db.table(domain) else {
            return a;
        };
        if let Some(ns) = &table.name_slot {
            if let Some(n) = item.get(ns) {
                a.push(Triple::full("recommend", ns, n));
            }
        }
        for s in table.informable_slots() {
            if let Some(v) = item.get(s) {
                a.push(Triple::full("inform", s, v));
            }
        }
        a
    }

    /// Draws up to five compatible templates and keeps the one with the
    /// most placeholders; generic wording when none is compatible.
    fn realize(&self, action: &Action, rng: &mut SimRng) -> Result<String> {
        let compatible: Vec<&Template> = self
            .knowledge
            .bank
            .compatible(action)
            .map(|(_, t)| t)
            .collect();
        let template = if compatible.is_empty() {
            system_fallback(action)
        } else {
            let draws = index::sample(rng, compatible.len(), TEMPLATE_DRAWS.min(compatible.len()));
            let mut best: Option<&Template> = None;
            for i in draws.iter() {
                let t = compatible[i];
                if best.is_none_or(|b| t.placeholders().len() > b.placeholders().len()) {
                    best = Some(t);
                }
            }
            complete_template(
                best.cloned().unwrap_or_else(|| system_fallback(action)),
                action,
            )
        };
        let mut out = fill_slots(&template, action, &Preference::default())?;
        if action.has_act("bye") && !text::has_end_marker(&out) {
            out = format!("{out} {}", text::END_MARKER);
        }
        Ok(out)
    }

    /// One system turn: folds the user utterance into the history, decides
    /// from the last `alpha` utterances, and realizes the reply.
    pub fn respond(
        &self,
        session: &mut SystemSession,
        user_utterance: &str,
    ) -> Result<SystemReply> {
        if session.terminated {
            return Err(Error::Terminated);
        }
        session.history.push(Turn::user(user_utterance, None, None));
        let start = session.history.len().saturating_sub(self.variant.alpha);
        let (action, query) = self.decide(&session.history[start..], &mut session.rng);
        let utterance = self.realize(&action, &mut session.rng)?;
        if action.has_act("bye") {
            session.terminated = true;
        }
        session
            .history
            .push(Turn::system(utterance.clone(), Some(action.clone())));
        Ok(SystemReply {
            utterance,
            action,
            query: query.map(|q| q.to_string()),
        })
    }
}

fn system_fallback(action: &Action) -> Template {
    let ph = |act: &str| -> Vec<String> {
        action
            .dialogue_triples()
            .filter(|t| t.act == act && t.value.is_some())
            .filter_map(|t| t.slot.as_ref().map(|s| format!("[{s}]")))
            .collect()
    };
    let text = match action.primary_act() {
        Some("recommend") => {
            let attrs = ph("inform");
            match ph("recommend").first() {
                Some(name) if !attrs.is_empty() => {
                    format!("how about {name} ? it is {} .", attrs.join(" and "))
                }
                Some(name) => format!("how about {name} ?"),
                None => "i have something for you .".into(),
            }
        }
        Some("inform") => format!("{} .", ph("inform").join(" , ")),
        Some("nooffer") => format!(
            "sorry , there is nothing with {} .",
            ph("nooffer").join(" and ")
        ),
        Some("bye") => format!("goodbye . {}", text::END_MARKER),
        _ => "what are you looking for ?".into(),
    };
    Template {
        text,
        source_action: action.clone(),
        source_dialogue_id: String::new(),
    }
}

/// Runs one conversation to termination. The simulator only sees the
/// system's utterances; the true system actions are logged for scoring.
pub fn run_dialogue(
    sim: &dyn UserSimulator,
    session: &mut SimulatorSession,
    system: &RuleSystem,
    sys: &mut SystemSession,
) -> Result<()> {
    let mut reply: Option<String> = None;
    while !session.terminated {
        let user = sim.turn(session, reply.as_deref())?;
        if session.terminated {
            break;
        }
        let r = system.respond(sys, &user)?;
        session.log_system_action(r.action);
        reply = Some(r.utterance);
    }
    Ok(())
}

/// One evaluator's rating of one variant in one episode.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariantScore {
    pub rating: f64,
    pub turns: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub success: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeRanking {
    pub episode: u64,
    pub scores: Vec<VariantScore>,
}

impl EpisodeRanking {
    /// Variant indices by rating descending, fewer turns first on equal
    /// ratings, then index.
    pub fn induced_order(&self) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..self.scores.len()).collect();
        idx.sort_by(|&a, &b| {
            let (x, y) = (&self.scores[a], &self.scores[b]);
            y.rating
                .total_cmp(&x.rating)
                .then(x.turns.cmp(&y.turns))
                .then(a.cmp(&b))
        });
        idx
    }
}

fn full_tie(a: &VariantScore, b: &VariantScore) -> bool {
    a.rating == b.rating && a.turns == b.turns
}

/// 1 when the induced order equals `expected` with no unresolved ties.
pub fn exact_distinct(episode: &EpisodeRanking, expected: &[usize]) -> Result<f64> {
    if episode.scores.len() != expected.len() {
        return Err(Error::InvalidArgument(format!(
            "episode {} rates {} variants, expected {}",
            episode.episode,
            episode.scores.len(),
            expected.len()
        )));
    }
    if let Some(i) = episode.scores.iter().position(|s| !s.rating.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "missing rating for variant {i}"
        )));
    }
    let order = episode.induced_order();
    let tied = order
        .windows(2)
        .any(|w| full_tie(&episode.scores[w[0]], &episode.scores[w[1]]));
    Ok(if !tied && order == expected { 1.0 } else { 0.0 })
}

/// Rates every variant in one episode.
pub trait Evaluator: Send + Sync {
    fn name(&self) -> String;
    fn rate_episode(
        &self,
        systems: &[RuleSystem],
        episode: u64,
        seed: u64,
    ) -> Result<EpisodeRanking>;
}

/// Knows the expected order.
pub struct OracleEvaluator;

impl Evaluator for OracleEvaluator {
    fn name(&self) -> String {
        "oracle".into()
    }

    fn rate_episode(
        &self,
        systems: &[RuleSystem],
        episode: u64,
        _seed: u64,
    ) -> Result<EpisodeRanking> {
        let n = systems.len();
        let scores = (0..n)
            .map(|i| VariantScore {
                rating: (n - i) as f64 / n as f64,
                turns: 0,
                success: None,
            })
            .collect();
        Ok(EpisodeRanking { episode, scores })
    }
}

/// Uniform ratings, independent of the systems.
pub struct RandomEvaluator;

impl Evaluator for RandomEvaluator {
    fn name(&self) -> String {
        "random".into()
    }

    fn rate_episode(
        &self,
        systems: &[RuleSystem],
        episode: u64,
        seed: u64,
    ) -> Result<EpisodeRanking> {
        let mut rng = rng_from_seed(derive_seed(seed, &[episode]));
        let scores = systems
            .iter()
            .map(|_| VariantScore {
                rating: rng.random::<f64>(),
                turns: 0,
                success: None,
            })
            .collect();
        Ok(EpisodeRanking { episode, scores })
    }
}

/// Talks to every variant with the same sampled goal and rates each
/// conversation with the calibrated dialogue rating.
pub struct SimulatorEvaluator {
    pub simulator: Box<dyn UserSimulator>,
    pub goal_stats: GoalStats,
    pub db: Arc<ItemDatabase>,
}

impl SimulatorEvaluator {
    pub fn goal(&self, episode: u64, seed: u64) -> Result<Preference> {
        let mut rng = rng_from_seed(derive_seed(seed, &[episode, 0]));
        init_preference(&self.goal_stats, &self.db, &mut rng)
    }

    /// Conversation of `episode` with variant `v`.
    pub fn converse(
        &self,
        system: &RuleSystem,
        goal: Preference,
        episode: u64,
        v: usize,
        seed: u64,
    ) -> Result<SimulatorSession> {
        let mut session = self
            .simulator
            .start(goal, derive_seed(seed, &[episode, 1, v as u64]));
        let mut sys = system.start(derive_seed(seed, &[episode, 2, v as u64]));
        run_dialogue(self.simulator.as_ref(), &mut session, system, &mut sys)?;
        Ok(session)
    }
}

impl SimulatorEvaluator {
    /// One episode: the same goal against every variant. Returns the
    /// ranking and the rated sessions in variant order.
    pub fn episode(
        &self,
        systems: &[RuleSystem],
        episode: u64,
        seed: u64,
    ) -> Result<(EpisodeRanking, Vec<(SimulatorSession, DialogueRating)>)> {
        let goal = self.goal(episode, seed)?;
        let sessions = systems
            .iter()
            .enumerate()
            .map(|(v, system)| {
                let session = self.converse(system, goal.clone(), episode, v, seed)?;
                let r = rate_dialogue(&session, &self.db)?;
                Ok((session, r))
            })
            .collect::<Result<Vec<_>>>()?;
        let scores = sessions
            .iter()
            .map(|(_, r)| VariantScore {
                rating: r.calibrated,
                turns: r.turns,
                success: Some(r.success),
            })
            .collect();
        Ok((EpisodeRanking { episode, scores }, sessions))
    }
}

impl Evaluator for SimulatorEvaluator {
    fn name(&self) -> String {
        self.simulator.label()
    }

    fn rate_episode(
        &self,
        systems: &[RuleSystem],
        episode: u64,
        seed: u64,
    ) -> Result<EpisodeRanking> {
        self.episode(systems, episode, seed)
            .map(|(ranking, _)| ranking)
    }
}

/// Human ratings folded onto the simulator scale: success in {1, 2} and
/// satisfaction in 1..=5 → `(success01 + (satisfaction − 1) / 4) / 2`.
pub fn human_rating(success: u8, satisfaction: u8) -> Result<f64> {
    if !(1..=2).contains(&success) || !(1..=5).contains(&satisfaction) {
        return Err(Error::InvalidArgument(format!(
            "ratings out of range: success {success}, satisfaction {satisfaction}"
        )));
    }
    Ok((f64::from(success - 1) + f64::from(satisfaction - 1) / 4.0) / 2.0)
}

/// Percentile bootstrap CI of the mean.
pub fn bootstrap_mean_ci(
    values: &[f64],
    resamples: usize,
    level: f64,
    seed: u64,
) -> Option<(f64, f64)> {
    if values.is_empty() || resamples == 0 {
        return None;
    }
    let mut rng = rng_from_seed(seed);
    let n = values.len();
    let mut means: Vec<f64> = (0..resamples)
        .map(|_| (0..n).map(|_| values[rng.random_range(0..n)]).sum::<f64>() / n as f64)
        .collect();
    means.sort_by(f64::total_cmp);
    let tail = (1.0 - level) / 2.0;
    let at = |q: f64| means[((q * resamples as f64).floor() as usize).min(resamples - 1)];
    Some((at(tail), at(1.0 - tail)))
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RankingMode {
    /// ExactDistinct per episode, then averaged.
    #[default]
    PerEpisode,
    /// Ratings and turns averaged per variant, then ranked once.
    AggregateThenRank,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariantSummary {
    pub label: String,
    pub alpha: usize,
    pub beta: f64,
    pub gamma: f64,
    pub mean_rating: f64,
    pub mean_turns: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mean_success: Option<f64>,
    /// Histogram of ratings rounded to two decimals.
    pub rating_histogram: BTreeMap<String, usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TesterReport {
    pub schema_version: u32,
    pub tester: TesterKind,
    pub evaluator: String,
    pub mode: RankingMode,
    pub seed: u64,
    pub config_hash: String,
    pub episodes: usize,
    pub failed_episodes: usize,
    pub exact_distinct: f64,
    pub exact_distinct_ci95: Option<(f64, f64)>,
    pub variants: Vec<VariantSummary>,
    #[serde(skip)]
    pub rankings: Vec<EpisodeRanking>,
    #[serde(skip)]
    pub episode_ed: Vec<f64>,
}

pub const BOOTSTRAP_RESAMPLES: usize = 1000;

/// Runs `episodes` seeded episodes in parallel. Failed episodes are
/// logged and tallied, not scored.
pub fn run_tester(
    evaluator: &dyn Evaluator,
    tester: &Tester,
    systems: &[RuleSystem],
    episodes: usize,
    seed: u64,
    mode: RankingMode,
) -> Result<TesterReport> {
    if episodes == 0 {
        return Err(Error::InvalidArgument("episodes must be at least 1".into()));
    }
    if systems.len() != tester.variants.len() {
        return Err(Error::InvalidArgument(
            "one system per variant required".into(),
        ));
    }
    let results: Vec<Result<EpisodeRanking>> = (0..episodes as u64)
        .into_par_iter()
        .map(|ep| evaluator.rate_episode(systems, ep, seed))
        .collect();
    let mut rankings = Vec::with_capacity(episodes);
    let mut failed = 0;
    for (ep, r) in results.into_iter().enumerate() {
        match r {
            Ok(r) => rankings.push(r),
            Err(e) => {
                log::warn!("episode {ep} failed: {e}");
                failed += 1;
            }
        }
    }
    if rankings.is_empty() {
        return Err(Error::InvalidArgument(format!(
            "all {episodes} episodes failed"
        )));
    }
    let expected = tester.expected_order();
    let episode_ed = rankings
        .iter()
        .map(|r| exact_distinct(r, &expected))
        .collect::<Result<Vec<_>>>()?;

    let n = rankings.len() as f64;
    let variants: Vec<VariantSummary> = tester
        .variants
        .iter()
        .enumerate()
        .map(|(i, v)| {
            let scores: Vec<&VariantScore> = rankings.iter().map(|r| &r.scores[i]).collect();
            let mut rating_histogram = BTreeMap::new();
            for s in &scores {
                *rating_histogram
                    .entry(format!("{:.2}", s.rating))
                    .or_default() += 1;
            }
            let successes: Vec<f64> = scores.iter().filter_map(|s| s.success).collect();
            VariantSummary {
                label: v.label.clone(),
                alpha: v.alpha,
                beta: v.beta,
                gamma: v.gamma,
                mean_rating: scores.iter().map(|s| s.rating).sum::<f64>() / n,
                mean_turns: scores.iter().map(|s| s.turns as f64).sum::<f64>() / n,
                mean_success: (!successes.is_empty())
                    .then(|| successes.iter().sum::<f64>() / successes.len() as f64),
                rating_histogram,
            }
        })
        .collect();

    let (ed, ci) = match mode {
        RankingMode::PerEpisode => (
            episode_ed.iter().sum::<f64>() / n,
            bootstrap_mean_ci(
                &episode_ed,
                BOOTSTRAP_RESAMPLES,
                0.95,
                derive_seed(seed, &[u64::MAX]),
            ),
        ),
        RankingMode::AggregateThenRank => {
            // Mean turns are compared after rounding so the tie-break works
            // on a comparable scale.
            let agg = EpisodeRanking {
                episode: 0,
                scores: variants
                    .iter()
                    .map(|v| VariantScore {
                        rating: v.mean_rating,
                        turns: (v.mean_turns * 1000.0).round() as usize,
                        success: v.mean_success,
                    })
                    .collect(),
            };
            (exact_distinct(&agg, &expected)?, None)
        }
    };
    Ok(TesterReport {
        schema_version: crate::corpus::SCHEMA_VERSION,
        tester: tester.kind,
        evaluator: evaluator.name(),
        mode,
        seed,
        config_hash: String::new(),
        episodes,
        failed_episodes: failed,
        exact_distinct: ed,
        exact_distinct_ci95: ci,
        variants,
        rankings,
        episode_ed,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::BTreeMap as Map;

    use crate::corpus::Table;

    fn score(rating: f64, turns: usize) -> VariantScore {
        VariantScore {
            rating,
            turns,
            success: None,
        }
    }

    fn ranking(s: &[(f64, usize)]) -> EpisodeRanking {
        EpisodeRanking {
            episode: 0,
            scores: s.iter().map(|&(r, t)| score(r, t)).collect(),
        }
    }

    #[test]
    fn ed_examples() {
        assert_eq!(
            exact_distinct(&ranking(&[(0.9, 5), (0.6, 5), (0.3, 5)]), &[0, 1, 2]).unwrap(),
            1.0
        );
        assert_eq!(
            exact_distinct(&ranking(&[(0.5, 6), (0.5, 9), (0.3, 7)]), &[0, 1, 2]).unwrap(),
            1.0
        );
        assert_eq!(
            exact_distinct(&ranking(&[(0.5, 6), (0.5, 6), (0.3, 7)]), &[0, 1, 2]).unwrap(),
            0.0
        );
        assert_eq!(
            exact_distinct(&ranking(&[(0.3, 6), (0.5, 6), (0.9, 7)]), &[0, 1, 2]).unwrap(),
            0.0
        );
        assert!(
            exact_distinct(&ranking(&[(0.3, 6), (f64::NAN, 6), (0.9, 7)]), &[0, 1, 2]).is_err()
        );
        assert!(exact_distinct(&ranking(&[(0.3, 6)]), &[0, 1, 2]).is_err());
    }

    #[test]
    fn tester_defaults() {
        let c = make_tester("context", VariantConfig::base()).unwrap();
        assert_eq!(
            c.variants.iter().map(|v| v.alpha).collect::<Vec<_>>(),
            vec![15, 3, 1]
        );
        let r = make_tester("recommender", VariantConfig::base()).unwrap();
        assert_eq!(
            r.variants.iter().map(|v| v.beta).collect::<Vec<_>>(),
            vec![1.0, 0.4, 0.1]
        );
        let d = make_tester("domain", VariantConfig::base()).unwrap();
        assert_eq!(
            d.variants.iter().map(|v| v.gamma).collect::<Vec<_>>(),
            vec![1.0, 0.1, 0.01]
        );
        assert!(matches!(
            make_tester("weather", VariantConfig::base()),
            Err(Error::Unknown { .. })
        ));
    }

    fn pair(s: &str, v: &str) -> (String, String) {
        (s.to_string(), v.to_string())
    }

    #[test]
    fn query_rendering_and_keep_count() {
        let belief = vec![pair("hotel_price", "cheap"), pair("hotel_type", "hotel")];
        let mut rng = rng_from_seed(3);
        let q = build_db_query("hotel", &belief, 1.0, &mut rng);
        assert_eq!(
            q.to_string(),
            "select * from Hotel where price=cheap and type=hotel"
        );
        for s in 0..50 {
            let q = build_db_query("hotel", &belief, 0.5, &mut rng_from_seed(s));
            assert_eq!(q.constraints.len(), 1);
        }
        assert_eq!(
            build_db_query("hotel", &[], 0.4, &mut rng).to_string(),
            "select * from Hotel"
        );
    }

    fn hotel_db() -> ItemDatabase {
        let items = [
            ("alpha", "cheap", "north"),
            ("bravo", "cheap", "south"),
            ("charlie", "expensive", "south"),
        ]
        .iter()
        .enumerate()
        .map(|(i, (n, p, a))| Item {
            id: i as u64,
            attributes: [
                ("hotel_name", *n),
                ("hotel_price", *p),
                ("hotel_area", *a),
                ("hotel_postcode", "cb1"),
            ]
            .iter()
            .map(|(k, v)| (k.to_string(), v.to_string()))
            .collect(),
        })
        .collect();
        let table = Table {
            items,
            name_slot: Some("hotel_name".into()),
            requestable: vec!["hotel_postcode".into()],
        };
        ItemDatabase::new(Map::from([("hotel".to_string(), table)])).unwrap()
    }

    fn system(alpha: usize, beta: f64) -> RuleSystem {
        let db = hotel_db();
        let lexicon = db
            .value_lexicon()
            .into_iter()
            .filter(|e| e.slot != "hotel_name" && e.slot != "hotel_postcode")
            .collect();
        let knowledge = SystemKnowledge::new(lexicon, TemplateBank::new(Vec::new()));
        let v = VariantConfig {
            alpha,
            beta,
            ..VariantConfig::base()
        };
        RuleSystem::new(v, Arc::new(knowledge), Arc::new(db))
    }

    #[test]
    fn base_books_unique_match() {
        let sys = system(15, 1.0);
        let mut s = sys.start(1);
        let r = sys.respond(&mut s, "i want somewhere cheap").unwrap();
        assert_eq!(
            r.query.as_deref(),
            Some("select * from Hotel where price=cheap")
        );
        let r = sys.respond(&mut s, "in the south please").unwrap();
        assert_eq!(
            r.query.as_deref(),
            Some("select * from Hotel where price=cheap and area=south")
        );
        assert!(r
            .action
            .slot_values("recommend")
            .any(|(s, v)| s == "hotel_name" && v == "bravo"));
        assert!(r.utterance.contains("bravo"));
        let r = sys.respond(&mut s, "what is the postcode").unwrap();
        assert!(r
            .action
            .slot_values("inform")
            .any(|(s, v)| s == "hotel_postcode" && v == "cb1"));
        let r = sys.respond(&mut s, "thanks , bye").unwrap();
        assert!(r.action.has_act("bye"));
        assert!(text::has_end_marker(&r.utterance));
        assert!(sys.respond(&mut s, "hello").is_err());
    }

    #[test]
    fn short_context_forgets_earlier_constraint() {
        let sys = system(1, 1.0);
        let mut s = sys.start(1);
        sys.respond(&mut s, "i want somewhere cheap").unwrap();
        let r = sys.respond(&mut s, "in the south please").unwrap();
        let q = r.query.unwrap();
        assert!(!q.contains("price=cheap"), "{q}");
        assert!(q.contains("area=south"));
    }

    #[test]
    fn nooffer_and_unknown_input() {
        let sys = system(15, 1.0);
        let mut s = sys.start(1);
        let r = sys.respond(&mut s, "hello there").unwrap();
        assert!(r.action.has_act("reqmore"));
        let r = sys.respond(&mut s, "expensive in the north").unwrap();
        assert!(r.action.has_act("nooffer"));
    }

    #[test]
    fn human_fold() {
        assert_eq!(human_rating(2, 5).unwrap(), 1.0);
        assert_eq!(human_rating(1, 1).unwrap(), 0.0);
        assert_eq!(human_rating(2, 3).unwrap(), 0.75);
        assert!(human_rating(3, 3).is_err());
        assert!(human_rating(1, 0).is_err());
    }

    #[test]
    fn bootstrap_brackets_mean() {
        let v: Vec<f64> = (0..200).map(|i| f64::from(i % 2)).collect();
        let (lo, hi) = bootstrap_mean_ci(&v, 500, 0.95, 1).unwrap();
        assert!(lo < 0.5 && 0.5 < hi && hi - lo < 0.2);
    }

    #[test]
    fn subsample_counts() {
        let sys = system(15, 1.0);
        let k = sys.knowledge().subsample(0.5, &mut rng_from_seed(0));
        assert_eq!(
            k.lexicon.len(),
            (sys.knowledge().lexicon.len() as f64 * 0.5).ceil() as usize
        );
    }
}
