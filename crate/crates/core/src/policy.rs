//! User policy: predicts the next user action jointly with a turn-level
//! satisfaction label.
//!
//! Satisfaction travels inside the action as a final `satisfaction=N`
//! segment, so a backend produces one distribution over joint actions.

use std::collections::{BTreeMap, BTreeSet};
use std::sync::Arc;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{
    sequence_nll, Action, Corpus, Dialogue, ItemDatabase, LexiconEntry, Speaker, Triple, Turn,
    SATISFACTION_ACT,
};
use crate::error::{Error, Result};
use crate::metaphor::{MetaphorDb, RankedCandidate, RetrievalConfig};
use crate::nlu::{compose_state, DialogueState};
use crate::preference::{update_preference, Preference};
use crate::registry::Registry;
use crate::sampling::sample_weighted;
use crate::text;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(try_from = "u8", into = "u8")]
pub struct SatisfactionLabel(u8);

impl SatisfactionLabel {
    pub const UNSATISFIED: Self = SatisfactionLabel(1);
    pub const FAIR: Self = SatisfactionLabel(2);
    pub const SATISFIED: Self = SatisfactionLabel(3);

    pub fn new(level: u8) -> Result<Self> {
        if (1..=3).contains(&level) {
            Ok(SatisfactionLabel(level))
        } else {
            Err(Error::InvalidArgument(format!(
                "satisfaction {level} outside 1..=3"
            )))
        }
    }

    pub fn level(self) -> u8 {
        self.0
    }

    /// `(level − 1) / 2`, in `[0, 1]`.
    pub fn normalized(self) -> f64 {
        f64::from(self.0 - 1) / 2.0
    }

    pub fn all() -> [Self; 3] {
        [Self::UNSATISFIED, Self::FAIR, Self::SATISFIED]
    }
}

impl TryFrom<u8> for SatisfactionLabel {
    type Error = Error;
    fn try_from(v: u8) -> Result<Self> {
        SatisfactionLabel::new(v)
    }
}

impl From<SatisfactionLabel> for u8 {
    fn from(s: SatisfactionLabel) -> u8 {
        s.0
    }
}

/// Appends the satisfaction segment. Errors if one is already present.
pub fn encode_satisfaction(action: &Action, sat: SatisfactionLabel) -> Result<Action> {
    if action.triples.iter().any(Triple::is_satisfaction) {
        return Err(Error::InvalidArgument(format!(
            "action already carries satisfaction: {action}"
        )));
    }
    let mut out = action.clone();
    out.push(Triple {
        act: SATISFACTION_ACT.into(),
        slot: None,
        value: Some(sat.level().to_string()),
    });
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Decoded {
    pub action: Action,
    pub satisfaction: SatisfactionLabel,
    /// The action had no satisfaction segment and Fair was assumed.
    pub defaulted: bool,
}

pub fn decode_satisfaction(action: &Action) -> Result<Decoded> {
    let mut sat = None;
    let mut rest = Vec::new();
    for t in &action.triples {
        if t.is_satisfaction() {
            let level = t
                .value
                .as_deref()
                .and_then(|v| v.parse::<u8>().ok())
                .ok_or_else(|| {
                    Error::ActionSyntax(format!("bad satisfaction segment in `{action}`"))
                })?;
            sat = Some(SatisfactionLabel::new(level)?);
        } else {
            rest.push(t.clone());
        }
    }
    Ok(Decoded {
        action: Action::new(rest),
        satisfaction: sat.unwrap_or(SatisfactionLabel::FAIR),
        defaulted: sat.is_none(),
    })
}

/// Coarse reading of the latest system action from the user's side.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Signal {
    Start,
    RequestGoal,
    RequestOther,
    RecommendMatch,
    RecommendConflict,
    RecommendOffGoal,
    Inform,
    NoOffer,
    Reqmore,
    Bye,
}

impl Signal {
    pub fn name(self) -> &'static str {
        match self {
            Signal::Start => "start",
            Signal::RequestGoal => "request-goal",
            Signal::RequestOther => "request-other",
            Signal::RecommendMatch => "recommend-match",
            Signal::RecommendConflict => "recommend-conflict",
            Signal::RecommendOffGoal => "recommend-offgoal",
            Signal::Inform => "inform",
            Signal::NoOffer => "nooffer",
            Signal::Reqmore => "reqmore",
            Signal::Bye => "bye",
        }
    }
}

/// What the user needs to know about the current turn to pick and fill an
/// action.
#[derive(Debug, Clone, PartialEq)]
pub struct TurnView {
    pub signal: Signal,
    /// Domain the system is talking about, if any.
    pub domain: Option<String>,
    /// Goal constraints contradicted by the latest recommendation.
    pub conflicts: Vec<(String, String)>,
    pub requested: Vec<String>,
    pub recommended: Option<String>,
    /// Some goal domain has not yet received a matching recommendation.
    pub unfinished: bool,
    /// Most recent domain with a matching recommendation.
    pub matched_domain: Option<String>,
}

struct Recommendation {
    name: String,
    domain: String,
    attributes: Vec<(String, String)>,
}

fn recommendation(action: &Action, db: &ItemDatabase) -> Option<Recommendation> {
    let (slot, name) = action
        .slot_values("recommend")
        .find(|(s, _)| db.is_name_slot(s))?;
    let domain = db.slot_domain(slot)?.to_string();
    let attributes = action
        .slot_values("inform")
        .filter(|(s, _)| db.slot_domains(s).contains(&domain.as_str()))
        .map(|(s, v)| (s.to_string(), v.to_string()))
        .collect();
    Some(Recommendation {
        name: name.to_string(),
        domain,
        attributes,
    })
}

fn conflicts(pref: &Preference, rec: &Recommendation) -> Vec<(String, String)> {
    pref.constraints(&rec.domain)
        .into_iter()
        .filter(|(s, v)| rec.attributes.iter().any(|(rs, rv)| rs == s && rv != v))
        .collect()
}

fn action_domain(action: &Action, db: &ItemDatabase) -> Option<String> {
    action
        .slots()
        .into_iter()
        .find_map(|s| db.slot_domain(s))
        .map(str::to_string)
}

pub fn analyze_turn(pref: &Preference, state: &DialogueState, db: &ItemDatabase) -> TurnView {
    let goal_domains = pref.goal_domains();
    let mut matched: Vec<String> = Vec::new();
    let mut last_rec_domain = None;
    for step in state.steps() {
        if let Some(rec) = recommendation(&step.system, db) {
            last_rec_domain = Some(rec.domain.clone());
            if goal_domains.contains(&rec.domain.as_str()) && conflicts(pref, &rec).is_empty() {
                matched.retain(|d| d != &rec.domain);
                matched.push(rec.domain);
            }
        }
    }
    let unfinished = goal_domains.iter().any(|d| !matched.iter().any(|m| m == d));
    let mut view = TurnView {
        signal: Signal::Start,
        domain: None,
        conflicts: Vec::new(),
        requested: Vec::new(),
        recommended: None,
        unfinished,
        matched_domain: matched.last().cloned(),
    };
    let Some(sys) = state.last_system() else {
        return view;
    };
    view.domain = action_domain(sys, db).or(last_rec_domain).or_else(|| {
        goal_domains
            .iter()
            .find(|d| !matched.iter().any(|m| m == *d))
            .map(|d| d.to_string())
    });
    view.signal = if sys.has_act("bye") {
        Signal::Bye
    } else if let Some(rec) = recommendation(sys, db) {
        view.recommended = Some(rec.name.clone());
        view.domain = Some(rec.domain.clone());
        if !goal_domains.contains(&rec.domain.as_str()) {
            Signal::RecommendOffGoal
        } else {
            view.conflicts = conflicts(pref, &rec);
            if view.conflicts.is_empty() {
                Signal::RecommendMatch
            } else {
                Signal::RecommendConflict
            }
        }
    } else if sys.has_act("nooffer") {
        Signal::NoOffer
    } else if sys.has_act("request") {
        view.requested = sys
            .triples
            .iter()
            .filter(|t| t.act == "request")
            .filter_map(|t| t.slot.clone())
            .collect();
        let goal: BTreeSet<&str> = pref.goal_entries().map(|e| e.slot.as_str()).collect();
        if view.requested.iter().any(|s| goal.contains(s.as_str())) {
            Signal::RequestGoal
        } else {
            Signal::RequestOther
        }
    } else if sys.has_act("inform") {
        Signal::Inform
    } else {
        Signal::Reqmore
    };
    view
}

/// Everything a policy backend conditions on.
#[derive(Debug, Clone, Copy)]
pub struct PolicyInput<'a> {
    pub pref: &'a Preference,
    pub context: &'a [Turn],
    /// State including the latest system action.
    pub state: &'a DialogueState,
    /// Ranked metaphor candidates, best first.
    pub metaphor: &'a [RankedCandidate],
}

/// `P(a_{t+1} | P, U, S, M)` over joint actions (satisfaction included).
pub trait PolicyBackend: Send + Sync {
    fn name(&self) -> &str;
    fn distribution(&self, input: &PolicyInput) -> Result<Vec<(Action, f64)>>;
}

/// `Q(a_{t+1} | P, U, S, u_{t+1})`: sees the gold next user utterance.
pub trait PosteriorBackend: Send + Sync {
    fn name(&self) -> &str;
    fn distribution(&self, input: &PolicyInput, gold_utterance: &str)
        -> Result<Vec<(Action, f64)>>;
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "lowercase")]
pub enum DecodeMode {
    Argmax,
    Sample { temperature: f64 },
}

impl Default for DecodeMode {
    fn default() -> Self {
        DecodeMode::Argmax
    }
}

/// Picks one joint action (first maximum on ties, or a tempered sample)
/// and splits off its satisfaction.
pub fn choose_action<R: Rng + ?Sized>(
    dist: &[(Action, f64)],
    mode: DecodeMode,
    rng: &mut R,
) -> Result<(Action, SatisfactionLabel)> {
    if dist.is_empty() {
        return Err(Error::EmptySupport("user action distribution".into()));
    }
    let idx = match mode {
        DecodeMode::Argmax => {
            let mut best = 0;
            for (i, (_, p)) in dist.iter().enumerate() {
                if *p > dist[best].1 {
                    best = i;
                }
            }
            best
        }
        DecodeMode::Sample { temperature } => {
            if !(temperature > 0.0) {
                return Err(Error::InvalidArgument(format!(
                    "temperature {temperature} must be > 0"
                )));
            }
            let w: Vec<f64> = dist
                .iter()
                .map(|(_, p)| p.powf(1.0 / temperature))
                .collect();
            sample_weighted(rng, &w)
                .ok_or_else(|| Error::EmptySupport("user action distribution".into()))?
        }
    };
    let d = decode_satisfaction(&dist[idx].0)?;
    Ok((d.action, d.satisfaction))
}

pub fn predict_user_action<R: Rng + ?Sized>(
    backend: &dyn PolicyBackend,
    input: &PolicyInput,
    mode: DecodeMode,
    rng: &mut R,
) -> Result<(Action, SatisfactionLabel)> {
    choose_action(&backend.distribution(input)?, mode, rng)
}

/// `-log Q(a_{t+1})` over the gold action's per-token probabilities.
pub fn posterior_loss(gold_token_probs: &[f64]) -> Result<f64> {
    sequence_nll(gold_token_probs)
}

/// Forward KL divergence `Σ q·ln(q/p)` between aligned distributions.
pub fn policy_distillation_loss(q: &[f64], p: &[f64]) -> Result<f64> {
    if q.len() != p.len() {
        return Err(Error::InvalidArgument(format!(
            "distribution lengths differ: {} vs {}",
            q.len(),
            p.len()
        )));
    }
    let mut kl = 0.0;
    for (i, (&qi, &pi)) in q.iter().zip(p).enumerate() {
        if !(qi >= 0.0 && qi <= 1.0) {
            return Err(Error::Probability {
                index: i,
                value: qi,
            });
        }
        if !(pi >= 0.0 && pi <= 1.0) {
            return Err(Error::Probability {
                index: i,
                value: pi,
            });
        }
        if qi == 0.0 {
            continue;
        }
        if pi == 0.0 {
            return Err(Error::Probability {
                index: i,
                value: pi,
            });
        }
        kl += qi * (qi / pi).ln();
    }
    Ok(kl.max(0.0))
}

/// Aligns two action distributions on the union of their supports (in
/// first-seen order), filling missing entries with 0.
pub fn align_distributions(q: &[(Action, f64)], p: &[(Action, f64)]) -> (Vec<f64>, Vec<f64>) {
    let mut keys: Vec<String> = Vec::new();
    for (a, _) in q.iter().chain(p) {
        let k = a.to_string();
        if !keys.contains(&k) {
            keys.push(k);
        }
    }
    let lookup = |d: &[(Action, f64)], k: &str| {
        d.iter()
            .filter(|(a, _)| a.to_string() == k)
            .map(|(_, p)| p)
            .sum()
    };
    (
        keys.iter().map(|k| lookup(q, k)).collect(),
        keys.iter().map(|k| lookup(p, k)).collect(),
    )
}

/// Weighted sampler over training turns: turns whose satisfaction is not
/// Fair get `factor` times the base weight.
#[derive(Debug, Clone)]
pub struct UpsampleSampler {
    weights: Vec<f64>,
    index: Option<WeightedIndex<f64>>,
}

pub fn upsample_training_turns(
    labels: &[SatisfactionLabel],
    factor: f64,
) -> Result<UpsampleSampler> {
    if !(factor > 0.0 && factor.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "upsampling factor {factor} must be > 0"
        )));
    }
    let weights: Vec<f64> = labels
        .iter()
        .map(|l| {
            if *l == SatisfactionLabel::FAIR {
                1.0
            } else {
                factor
            }
        })
        .collect();
    let index = if weights.is_empty() {
        None
    } else {
        Some(WeightedIndex::new(&weights).map_err(|e| Error::InvalidArgument(e.to_string()))?)
    };
    Ok(UpsampleSampler { weights, index })
}

impl UpsampleSampler {
    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Option<usize> {
        self.index.as_ref().map(|w| w.sample(rng))
    }
}

/// Owned training/evaluation example for a single user turn.
#[derive(Debug, Clone)]
pub struct PolicyExample {
    pub dialogue_id: String,
    pub pref: Preference,
    pub context: Vec<Turn>,
    pub state: DialogueState,
    pub metaphor: Vec<RankedCandidate>,
    pub gold: Action,
    pub gold_satisfaction: Option<SatisfactionLabel>,
    pub gold_utterance: String,
}

impl PolicyExample {
    pub fn input(&self) -> PolicyInput<'_> {
        PolicyInput {
            pref: &self.pref,
            context: &self.context,
            state: &self.state,
            metaphor: &self.metaphor,
        }
    }
}

/// Replays every dialogue that carries a goal, tracking preference and
/// state from the gold annotations. Metaphor candidates come from records
/// of other dialogues only.
pub fn policy_examples(
    corpus: &Corpus,
    metaphor: Option<&MetaphorDb>,
    cfg: &RetrievalConfig,
) -> Vec<PolicyExample> {
    corpus
        .dialogues
        .par_iter()
        .map(|d| dialogue_examples(d, metaphor, cfg))
        .collect::<Vec<_>>()
        .into_iter()
        .flatten()
        .collect()
}

fn dialogue_examples(
    d: &Dialogue,
    metaphor: Option<&MetaphorDb>,
    cfg: &RetrievalConfig,
) -> Vec<PolicyExample> {
    let mut out = Vec::new();
    let Some(goal) = &d.goal else { return out };
    let mut pref = goal.clone();
    let mut state = DialogueState::default();
    let mut last_system = Action::default();
    let mut pending: Option<Action> = None;
    for (i, turn) in d.turns.iter().enumerate() {
        match turn.speaker {
            Speaker::User => {
                let gold = turn.action.clone().unwrap_or_default();
                let candidates = match metaphor {
                    Some(db) => {
                        let records = db.records();
                        db.search(&state.to_key(), cfg.k + 16)
                            .into_iter()
                            .filter(|c| records[c.record].dialogue_id != d.id)
                            .take(cfg.top_j)
                            .collect()
                    }
                    None => Vec::new(),
                };
                out.push(PolicyExample {
                    dialogue_id: d.id.clone(),
                    pref: pref.clone(),
                    context: d.turns[..i].to_vec(),
                    state: state.clone(),
                    metaphor: candidates,
                    gold: Action::new(gold.dialogue_triples().cloned().collect()),
                    gold_satisfaction: turn
                        .satisfaction
                        .and_then(|s| SatisfactionLabel::new(s).ok()),
                    gold_utterance: turn.utterance.clone(),
                });
                pref = update_preference(&pref, &gold, &last_system);
                pending = Some(gold);
            }
            Speaker::System => {
                let sys = turn.action.clone().unwrap_or_default();
                state = compose_state(&state, pending.take().unwrap_or_default(), sys.clone());
                last_system = sys;
            }
        }
    }
    out
}

/// The act sequence of an action (satisfaction excluded), e.g.
/// `reject+inform`.
pub fn act_pattern(action: &Action) -> String {
    action
        .dialogue_triples()
        .map(|t| t.act.as_str())
        .collect::<Vec<_>>()
        .join("+")
}

fn top_metaphor_act(metaphor: &[RankedCandidate]) -> String {
    metaphor
        .first()
        .and_then(|c| c.action.as_ref())
        .and_then(|a| a.primary_act())
        .unwrap_or("none")
        .to_string()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PolicyOptions {
    /// Condition on the top metaphor candidate's act.
    pub use_metaphor: bool,
    /// Fill slot values from the preference; when off, values come from
    /// the metaphor candidates.
    pub use_preference: bool,
    /// Weight of the parent distribution in the back-off chain.
    pub prior_strength: f64,
}

impl Default for PolicyOptions {
    fn default() -> Self {
        PolicyOptions {
            use_metaphor: true,
            use_preference: true,
            prior_strength: 1.0,
        }
    }
}

type Counts = BTreeMap<String, f64>;

/// Act-transition counts keyed by (signal, unfinished, metaphor act) with
/// back-off to (signal, unfinished), (signal), and the global pattern
/// distribution. Satisfaction is estimated per signal.
#[derive(Debug, Clone)]
pub struct StatisticalPolicy {
    db: Arc<ItemDatabase>,
    opts: PolicyOptions,
    full: BTreeMap<(Signal, bool, String), Counts>,
    by_signal_flag: BTreeMap<(Signal, bool), Counts>,
    by_signal: BTreeMap<Signal, Counts>,
    global: Counts,
    sat_by_signal: BTreeMap<Signal, [f64; 3]>,
    sat_global: [f64; 3],
}

fn bump(c: &mut Counts, k: &str) {
    *c.entry(k.to_string()).or_default() += 1.0;
}

impl StatisticalPolicy {
    pub fn train(db: &ItemDatabase, examples: &[PolicyExample], opts: PolicyOptions) -> Self {
        let mut p = StatisticalPolicy {
            db: Arc::new(db.clone()),
            opts,
            full: BTreeMap::new(),
            by_signal_flag: BTreeMap::new(),
            by_signal: BTreeMap::new(),
            global: Counts::new(),
            sat_by_signal: BTreeMap::new(),
            sat_global: [0.0; 3],
        };
        for ex in examples {
            let view = analyze_turn(&ex.pref, &ex.state, db);
            let pat = act_pattern(&ex.gold);
            if pat.is_empty() {
                continue;
            }
            let meta = top_metaphor_act(&ex.metaphor);
            bump(
                p.full
                    .entry((view.signal, view.unfinished, meta))
                    .or_default(),
                &pat,
            );
            bump(
                p.by_signal_flag
                    .entry((view.signal, view.unfinished))
                    .or_default(),
                &pat,
            );
            bump(p.by_signal.entry(view.signal).or_default(), &pat);
            bump(&mut p.global, &pat);
            if let Some(s) = ex.gold_satisfaction {
                let i = usize::from(s.level() - 1);
                p.sat_by_signal.entry(view.signal).or_insert([0.0; 3])[i] += 1.0;
                p.sat_global[i] += 1.0;
            }
        }
        if p.global.is_empty() {
            bump(&mut p.global, "bye");
        }
        p
    }

    pub fn from_corpus(
        corpus: &Corpus,
        metaphor: Option<&MetaphorDb>,
        cfg: &RetrievalConfig,
        opts: PolicyOptions,
    ) -> Self {
        Self::train(&corpus.db, &policy_examples(corpus, metaphor, cfg), opts)
    }

    pub fn options(&self) -> PolicyOptions {
        self.opts
    }

    pub fn with_options(mut self, opts: PolicyOptions) -> Self {
        self.opts = opts;
        self
    }

    /// Smoothed act-pattern distribution for one conditioning key, in
    /// pattern order.
    pub fn pattern_distribution(
        &self,
        signal: Signal,
        unfinished: bool,
        metaphor_act: Option<&str>,
    ) -> Vec<(String, f64)> {
        let total: f64 = self.global.values().sum();
        let mut dist: BTreeMap<&str, f64> = self
            .global
            .iter()
            .map(|(k, c)| (k.as_str(), c / total))
            .collect();
        let m = self.opts.prior_strength;
        let mut refine = |counts: Option<&Counts>| {
            let Some(counts) = counts else { return };
            let n: f64 = counts.values().sum();
            for (k, p) in dist.iter_mut() {
                let c = counts.get(*k).copied().unwrap_or(0.0);
                *p = (c + m * *p) / (n + m);
            }
        };
        refine(self.by_signal.get(&signal));
        refine(self.by_signal_flag.get(&(signal, unfinished)));
        if let Some(meta) = metaphor_act {
            refine(self.full.get(&(signal, unfinished, meta.to_string())));
        }
        dist.into_iter().map(|(k, p)| (k.to_string(), p)).collect()
    }

    pub fn satisfaction_distribution(&self, signal: Signal) -> [f64; 3] {
        let global_n: f64 = self.sat_global.iter().sum();
        let prior: [f64; 3] = if global_n > 0.0 {
            std::array::from_fn(|i| (self.sat_global[i] + 0.5) / (global_n + 1.5))
        } else {
            [0.0, 1.0, 0.0]
        };
        let Some(c) = self.sat_by_signal.get(&signal) else {
            return prior;
        };
        let n: f64 = c.iter().sum();
        std::array::from_fn(|i| (c[i] + prior[i]) / (n + 1.0))
    }
}

/// Where informed values come from when filling an act pattern.
struct Filler<'a> {
    view: &'a TurnView,
    pref: &'a Preference,
    state: &'a DialogueState,
    metaphor: &'a [RankedCandidate],
    db: &'a ItemDatabase,
    use_preference: bool,
    /// Values read off the gold utterance (posterior only).
    observed: Option<&'a [(String, String)]>,
}

impl Filler<'_> {
    fn inform_candidates(&self) -> Vec<(String, String)> {
        let mut out: Vec<(String, String)> = Vec::new();
        let add = |s: &str, v: &str, out: &mut Vec<(String, String)>| {
            if !out.iter().any(|(os, _)| os == s) {
                out.push((s.to_string(), v.to_string()));
            }
        };
        if let Some(obs) = self.observed {
            for (s, v) in obs {
                add(s, v, &mut out);
            }
            return out;
        }
        if !self.use_preference {
            for c in self.metaphor {
                if let Some(a) = &c.action {
                    for (s, v) in a.slot_values("inform") {
                        add(s, v, &mut out);
                    }
                }
            }
            return out;
        }
        let goal: Vec<_> = self.pref.goal_entries().collect();
        for s in &self.view.requested {
            if let Some(e) = goal.iter().find(|e| &e.slot == s) {
                add(&e.slot, &e.value, &mut out);
            }
        }
        for (s, v) in &self.view.conflicts {
            add(s, v, &mut out);
        }
        if self.view.signal == Signal::NoOffer {
            if let Some(d) = &self.view.domain {
                for (s, v) in self.pref.constraints(d) {
                    add(&s, &v, &mut out);
                }
            }
        }
        // uninformed goal slots, domains still lacking a match first
        let done = |d: Option<&String>| d.is_some() && d == self.view.matched_domain.as_ref();
        for e in goal
            .iter()
            .filter(|e| !e.informed && !done(e.domain.as_ref()))
        {
            add(&e.slot, &e.value, &mut out);
        }
        for e in goal.iter().filter(|e| !e.informed) {
            add(&e.slot, &e.value, &mut out);
        }
        out
    }

    fn request_slot(&self) -> Option<String> {
        let asked: BTreeSet<&str> = self
            .state
            .steps()
            .iter()
            .flat_map(|s| s.user.triples.iter())
            .filter(|t| t.act == "request")
            .filter_map(|t| t.slot.as_deref())
            .collect();
        if !self.use_preference {
            return self
                .metaphor
                .iter()
                .filter_map(|c| c.action.as_ref())
                .flat_map(|a| a.triples.iter())
                .find(|t| t.act == "request" && t.slot.is_some())
                .and_then(|t| t.slot.clone());
        }
        let domain = self
            .view
            .matched_domain
            .as_ref()
            .or(self.view.domain.as_ref())?;
        let table = self.db.table(domain)?;
        table
            .requestable
            .iter()
            .find(|s| !asked.contains(s.as_str()))
            .cloned()
    }

    fn fill(&self, pattern: &str) -> Option<Action> {
        let acts: Vec<&str> = pattern.split('+').filter(|a| !a.is_empty()).collect();
        let n_inform = acts.iter().filter(|a| **a == "inform").count();
        let mut informs = self.inform_candidates().into_iter().take(n_inform);
        let mut out = Action::default();
        for act in acts {
            match act {
                "inform" => {
                    if let Some((s, v)) = informs.next() {
                        out.push(Triple::full("inform", &s, &v));
                    }
                }
                "request" => out.push(Triple::slot("request", &self.request_slot()?)),
                "reject" => {
                    self.view.recommended.as_ref()?;
                    out.push(Triple::act("reject"));
                }
                other => out.push(Triple::act(other)),
            }
        }
        if n_inform > 0 && !out.has_act("inform") {
            return None;
        }
        (!out.is_empty()).then_some(out)
    }
}

/// Combines a pattern distribution with a satisfaction distribution into a
/// joint action distribution; unfillable patterns are dropped and the rest
/// renormalized. Falls back to `bye` when nothing is fillable.
fn joint(patterns: &[(String, f64)], sat: [f64; 3], filler: &Filler) -> Result<Vec<(Action, f64)>> {
    let mut merged: Vec<(Action, f64)> = Vec::new();
    for (pat, p) in patterns {
        if *p <= 0.0 {
            continue;
        }
        let Some(action) = filler.fill(pat) else {
            continue;
        };
        match merged.iter_mut().find(|(a, _)| *a == action) {
            Some(e) => e.1 += p,
            None => merged.push((action, *p)),
        }
    }
    if merged.is_empty() {
        merged.push((Action::simple("bye"), 1.0));
    }
    let z: f64 = merged.iter().map(|(_, p)| p).sum();
    let mut out = Vec::with_capacity(merged.len() * 3);
    for (action, p) in merged {
        for (i, label) in SatisfactionLabel::all().into_iter().enumerate() {
            if sat[i] > 0.0 {
                out.push((encode_satisfaction(&action, label)?, p / z * sat[i]));
            }
        }
    }
    Ok(out)
}

impl PolicyBackend for StatisticalPolicy {
    fn name(&self) -> &str {
        "statistical"
    }

    fn distribution(&self, input: &PolicyInput) -> Result<Vec<(Action, f64)>> {
        let empty = Preference::default();
        let pref = if self.opts.use_preference {
            input.pref
        } else {
            &empty
        };
        let view = analyze_turn(pref, input.state, &self.db);
        let meta = self
            .opts
            .use_metaphor
            .then(|| top_metaphor_act(input.metaphor));
        let patterns = self.pattern_distribution(view.signal, view.unfinished, meta.as_deref());
        let filler = Filler {
            view: &view,
            pref,
            state: input.state,
            metaphor: input.metaphor,
            db: &self.db,
            use_preference: self.opts.use_preference,
            observed: None,
        };
        joint(
            &patterns,
            self.satisfaction_distribution(view.signal),
            &filler,
        )
    }
}

/// Naive-Bayes posterior: act pattern and satisfaction are scored against
/// the tokens of the gold next user utterance (values delexicalized), and
/// informed values are read directly from it.
#[derive(Debug, Clone)]
pub struct NaiveBayesPosterior {
    prior: StatisticalPolicy,
    lexicon: Vec<LexiconEntry>,
    pattern_tokens: BTreeMap<String, Counts>,
    sat_tokens: [Counts; 3],
    vocab: f64,
}

fn delex_tokens(utterance: &str, lexicon: &[LexiconEntry]) -> (Vec<String>, Vec<(String, String)>) {
    let tokens = text::tokenize(utterance);
    let hits = crate::corpus::match_values(&tokens, lexicon);
    let values: Vec<(String, String)> = hits
        .iter()
        .map(|e| (e.slot.clone(), e.value.clone()))
        .collect();
    let value_tokens: BTreeSet<&str> = hits
        .iter()
        .flat_map(|e| e.tokens.iter().map(String::as_str))
        .collect();
    let kept = tokens
        .into_iter()
        .filter(|t| !value_tokens.contains(t.as_str()))
        .collect();
    (kept, values)
}

fn log_likelihood(tokens: &[String], counts: Option<&Counts>, vocab: f64) -> f64 {
    let total: f64 = counts.map(|c| c.values().sum()).unwrap_or(0.0);
    tokens
        .iter()
        .map(|t| {
            let c = counts.and_then(|m| m.get(t)).copied().unwrap_or(0.0);
            ((c + 1.0) / (total + vocab)).ln()
        })
        .sum()
}

fn normalize_log(scores: &mut [f64]) {
    let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let z: f64 = scores.iter().map(|s| (s - max).exp()).sum();
    for s in scores.iter_mut() {
        *s = (*s - max).exp() / z;
    }
}

impl NaiveBayesPosterior {
    pub fn train(db: &ItemDatabase, examples: &[PolicyExample]) -> Self {
        let lexicon = db.value_lexicon();
        let mut pattern_tokens: BTreeMap<String, Counts> = BTreeMap::new();
        let mut sat_tokens: [Counts; 3] = Default::default();
        let mut vocab = BTreeSet::new();
        for ex in examples {
            let pat = act_pattern(&ex.gold);
            if pat.is_empty() {
                continue;
            }
            let (tokens, _) = delex_tokens(&ex.gold_utterance, &lexicon);
            for t in &tokens {
                bump(pattern_tokens.entry(pat.clone()).or_default(), t);
                if let Some(s) = ex.gold_satisfaction {
                    bump(&mut sat_tokens[usize::from(s.level() - 1)], t);
                }
                vocab.insert(t.clone());
            }
        }
        NaiveBayesPosterior {
            prior: StatisticalPolicy::train(
                db,
                examples,
                PolicyOptions {
                    use_metaphor: false,
                    ..PolicyOptions::default()
                },
            ),
            lexicon,
            pattern_tokens,
            sat_tokens,
            vocab: vocab.len().max(1) as f64,
        }
    }
}

impl PosteriorBackend for NaiveBayesPosterior {
    fn name(&self) -> &str {
        "naive-bayes"
    }

    fn distribution(
        &self,
        input: &PolicyInput,
        gold_utterance: &str,
    ) -> Result<Vec<(Action, f64)>> {
        let view = analyze_turn(input.pref, input.state, &self.prior.db);
        let (tokens, values) = delex_tokens(gold_utterance, &self.lexicon);
        let base = self
            .prior
            .pattern_distribution(view.signal, view.unfinished, None);
        let mut scores: Vec<f64> = base
            .iter()
            .map(|(pat, p)| {
                p.ln() + log_likelihood(&tokens, self.pattern_tokens.get(pat), self.vocab)
            })
            .collect();
        normalize_log(&mut scores);
        let patterns: Vec<(String, f64)> = base.into_iter().map(|(k, _)| k).zip(scores).collect();
        let sat_prior = self.prior.satisfaction_distribution(view.signal);
        let mut sat: Vec<f64> = (0..3)
            .map(|i| {
                sat_prior[i].ln() + log_likelihood(&tokens, Some(&self.sat_tokens[i]), self.vocab)
            })
            .collect();
        normalize_log(&mut sat);
        let observed: Vec<(String, String)> = values
            .into_iter()
            .filter(|(s, _)| !self.prior.db.is_name_slot(s))
            .collect();
        let filler = Filler {
            view: &view,
            pref: input.pref,
            state: input.state,
            metaphor: input.metaphor,
            db: &self.prior.db,
            use_preference: true,
            observed: (!observed.is_empty()).then_some(observed.as_slice()),
        };
        joint(&patterns, [sat[0], sat[1], sat[2]], &filler)
    }
}

/// Fills missing satisfaction labels with the posterior's most likely
/// level; returns `(dialogue_id, turn_index, level)` for each filled turn.
pub fn pseudo_label(
    corpus: &Corpus,
    posterior: &dyn PosteriorBackend,
) -> Result<Vec<(String, usize, SatisfactionLabel)>> {
    let mut out = Vec::new();
    let examples = policy_examples(corpus, None, &RetrievalConfig::default());
    for ex in &examples {
        if ex.gold_satisfaction.is_some() {
            continue;
        }
        let dist = posterior.distribution(&ex.input(), &ex.gold_utterance)?;
        let mut mass = [0.0; 3];
        for (a, p) in &dist {
            mass[usize::from(decode_satisfaction(a)?.satisfaction.level() - 1)] += p;
        }
        let best = (0..3).fold(0, |b, i| if mass[i] > mass[b] { i } else { b });
        out.push((
            ex.dialogue_id.clone(),
            ex.context.len(),
            SatisfactionLabel::new(best as u8 + 1)?,
        ));
    }
    Ok(out)
}

/// Fraction of examples whose argmax action (satisfaction excluded)
/// equals the gold action.
pub fn action_accuracy(backend: &dyn PolicyBackend, examples: &[PolicyExample]) -> Result<f64> {
    if examples.is_empty() {
        return Ok(0.0);
    }
    let mut rng = crate::sampling::rng_from_seed(0);
    let mut hits = 0usize;
    for ex in examples {
        let (a, _) = predict_user_action(backend, &ex.input(), DecodeMode::Argmax, &mut rng)?;
        if a == ex.gold {
            hits += 1;
        }
    }
    Ok(hits as f64 / examples.len() as f64)
}

pub type PolicyFactory = Box<
    dyn Fn(&Corpus, Option<&MetaphorDb>, &RetrievalConfig) -> Box<dyn PolicyBackend> + Send + Sync,
>;

pub fn policy_registry() -> Registry<PolicyFactory> {
    let mut r: Registry<PolicyFactory> = Registry::new("policy backend");
    for (name, opts) in [
        ("statistical", PolicyOptions::default()),
        (
            "statistical-no-metaphor",
            PolicyOptions {
                use_metaphor: false,
                ..PolicyOptions::default()
            },
        ),
        (
            "statistical-no-preference",
            PolicyOptions {
                use_preference: false,
                ..PolicyOptions::default()
            },
        ),
    ] {
        r.register(
            name,
            Box::new(
                move |c: &Corpus, m: Option<&MetaphorDb>, cfg: &RetrievalConfig| {
                    Box::new(StatisticalPolicy::from_corpus(c, m, cfg, opts))
                        as Box<dyn PolicyBackend>
                },
            ),
        );
    }
    r
}
