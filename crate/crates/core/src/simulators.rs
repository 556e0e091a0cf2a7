//! Complete user simulators: the retrieval-augmented pipeline, its
//! ablations, and the agenda / supervised-template baselines.
//!
//! Every simulator drives a [`SimulatorSession`] one user turn at a time.
//! The user speaks first; each later turn consumes the system's reply.

use std::collections::BTreeMap;
use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{Action, Corpus, ItemDatabase, Speaker, Triple, Turn};
use crate::error::{Error, Result};
use crate::metaphor::{
    build_metaphor_db, rank_candidates, ranker_registry, ranking_examples, retrieve_candidates,
    LogisticRanker, MetaphorDb, RankedCandidate, RelevanceScorer, RetrievalConfig,
};
use crate::metrics;
use crate::nlg::{realize, Generator, NlgInput, TemplateBank, TemplateGenerator};
use crate::nlu::{compose_state, predictor_registry, ActionPredictor, DialogueState};
use crate::policy::{
    policy_examples, predict_user_action, DecodeMode, PolicyExample, PolicyInput, PolicyOptions,
    SatisfactionLabel, StatisticalPolicy,
};
use crate::preference::{compute_goal_stats, update_preference, GoalStats, Preference};
use crate::registry::Registry;
use crate::sampling::{rng_from_seed, sample_weighted, SimRng};
use crate::text;

/// Stack of pending user actions; the top is the last element.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Agenda {
    pub stack: Vec<Action>,
}

/// `P(next user act | previous user act)` with `<start>` as the initial
/// context.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TransitionStats {
    pub table: BTreeMap<String, BTreeMap<String, f64>>,
}

pub const START_ACT: &str = "<start>";

impl TransitionStats {
    pub fn from_corpus(corpus: &Corpus) -> Self {
        let mut counts: BTreeMap<String, BTreeMap<String, f64>> = BTreeMap::new();
        for d in &corpus.dialogues {
            let mut prev = START_ACT.to_string();
            for (_, t) in d.user_turns() {
                let Some(act) = t.action.as_ref().and_then(|a| a.primary_act()) else {
                    continue;
                };
                *counts
                    .entry(prev)
                    .or_default()
                    .entry(act.to_string())
                    .or_default() += 1.0;
                prev = act.to_string();
            }
        }
        for row in counts.values_mut() {
            let z: f64 = row.values().sum();
            row.values_mut().for_each(|v| *v /= z);
        }
        TransitionStats { table: counts }
    }

    fn next<R: Rng + ?Sized>(&self, act: &str, rng: &mut R) -> Option<&str> {
        let row = self.table.get(act)?;
        let w: Vec<f64> = row.values().copied().collect();
        sample_weighted(rng, &w)
            .and_then(|i| row.keys().nth(i))
            .map(String::as_str)
    }
}

/// How the agenda stack is initialized.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AgendaInit {
    /// Walk the act-transition chain, filling informs from the goal.
    #[default]
    Sampled,
    /// Every goal constraint in goal order, then `bye`.
    Oracle,
}

pub fn build_agenda<R: Rng + ?Sized>(
    pref: &Preference,
    stats: &TransitionStats,
    db: &ItemDatabase,
    init: AgendaInit,
    rng: &mut R,
) -> Agenda {
    let goal: Vec<_> = pref.goal_entries().collect();
    let mut plan: Vec<Action> = Vec::new();
    match init {
        AgendaInit::Oracle => {
            plan.extend(
                goal.iter()
                    .map(|e| Action::single(Triple::full("inform", &e.slot, &e.value))),
            );
        }
        AgendaInit::Sampled => {
            let mut next_goal = 0;
            let mut requested = false;
            let mut act = START_ACT.to_string();
            let cap = 2 * goal.len() + 4;
            while plan.len() < cap {
                let Some(next) = stats.next(&act, rng) else {
                    break;
                };
                match next {
                    "bye" => break,
                    "inform" => {
                        let Some(e) = goal.get(next_goal) else { break };
                        plan.push(Action::single(Triple::full("inform", &e.slot, &e.value)));
                        next_goal += 1;
                    }
                    "request" if !requested => {
                        let slot = pref
                            .goal_domains()
                            .first()
                            .and_then(|d| db.table(d))
                            .and_then(|t| t.requestable.first().cloned());
                        if let Some(s) = slot {
                            plan.push(Action::single(Triple::slot("request", &s)));
                            requested = true;
                        }
                    }
                    _ => {}
                }
                act = next.to_string();
            }
        }
    }
    plan.push(Action::simple("bye"));
    plan.reverse();
    Agenda { stack: plan }
}

/// Pops the next action. A system request for a goal slot first pushes the
/// matching inform unless it is already on top; an empty stack yields
/// `bye`.
pub fn agenda_turn(agenda: &mut Agenda, system_action: &Action, pref: &Preference) -> Action {
    for t in system_action
        .dialogue_triples()
        .filter(|t| t.act == "request")
    {
        let Some(slot) = &t.slot else { continue };
        let Some(e) = pref.goal_entries().find(|e| &e.slot == slot) else {
            continue;
        };
        let on_top = agenda
            .stack
            .last()
            .is_some_and(|a| a.slot_values("inform").any(|(s, _)| s == slot));
        if !on_top {
            agenda
                .stack
                .push(Action::single(Triple::full("inform", &e.slot, &e.value)));
        }
    }
    agenda.stack.pop().unwrap_or_else(|| Action::simple("bye"))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DialogueRating {
    pub success: f64,
    pub mean_satisfaction: f64,
    pub calibrated: f64,
    pub turns: usize,
}

impl DialogueRating {
    /// `(success + (mean_satisfaction − 1) / 2) / 2`.
    pub fn new(success: f64, mean_satisfaction: f64, turns: usize) -> Self {
        DialogueRating {
            success,
            mean_satisfaction,
            calibrated: (success + (mean_satisfaction - 1.0) / 2.0) / 2.0,
            turns,
        }
    }
}

/// Per-conversation simulator state.
#[derive(Debug, Clone)]
pub struct SimulatorSession {
    pub goal: Preference,
    pub pref: Preference,
    pub context: Vec<Turn>,
    pub state: DialogueState,
    pub turn_index: usize,
    pub satisfaction: Vec<SatisfactionLabel>,
    pub terminated: bool,
    pub max_turns: usize,
    /// System actions as understood by the simulator.
    pub predicted_system: Vec<Action>,
    /// System actions reported by the system under test, when available;
    /// the simulator never reads these.
    pub logged_system: Vec<Action>,
    pub agenda: Option<Agenda>,
    pub seed: u64,
    rng: SimRng,
    last_user: Action,
}

impl SimulatorSession {
    pub fn new(goal: Preference, seed: u64, max_turns: usize) -> Self {
        SimulatorSession {
            pref: goal.clone(),
            goal,
            context: Vec::new(),
            state: DialogueState::default(),
            turn_index: 0,
            satisfaction: Vec::new(),
            terminated: false,
            max_turns,
            predicted_system: Vec::new(),
            logged_system: Vec::new(),
            agenda: None,
            seed,
            rng: rng_from_seed(seed),
            last_user: Action::default(),
        }
    }

    pub fn log_system_action(&mut self, action: Action) {
        self.logged_system.push(action);
    }

    pub fn rng(&mut self) -> &mut SimRng {
        &mut self.rng
    }

    pub fn user_actions(&self) -> impl Iterator<Item = &Action> {
        self.context
            .iter()
            .filter(|t| t.speaker == Speaker::User)
            .filter_map(|t| t.action.as_ref())
    }

    /// Reads the system reply and folds it into the state. Returns the
    /// understood system action (empty on the first turn).
    fn observe(
        &mut self,
        nlu: &dyn ActionPredictor,
        system_utterance: Option<&str>,
    ) -> Result<Action> {
        self.observe_with(system_utterance, |pref, context| {
            Ok(nlu.predict(pref, context)?.action)
        })
    }

    /// Appends the system reply and folds `understand`'s reading of it
    /// into the state. Returns the understood system action (empty on the
    /// first turn).
    pub(crate) fn observe_with(
        &mut self,
        system_utterance: Option<&str>,
        understand: impl FnOnce(&Preference, &[Turn]) -> Result<Action>,
    ) -> Result<Action> {
        if self.terminated {
            return Err(Error::Terminated);
        }
        let Some(utt) = system_utterance else {
            if self.turn_index > 0 {
                return Err(Error::InvalidArgument(
                    "system reply required after the first turn".into(),
                ));
            }
            return Ok(Action::default());
        };
        self.context.push(Turn::system(utt, None));
        let sys = understand(&self.pref, &self.context)?;
        if let Some(last) = self.context.last_mut() {
            last.action = Some(sys.clone());
        }
        self.state = compose_state(
            &self.state,
            std::mem::take(&mut self.last_user),
            sys.clone(),
        );
        self.predicted_system.push(sys.clone());
        Ok(sys)
    }

    pub(crate) fn commit(
        &mut self,
        utterance: String,
        action: Action,
        system: &Action,
        sat: SatisfactionLabel,
    ) -> String {
        self.pref = update_preference(&self.pref, &action, system);
        self.context.push(Turn::user(
            utterance.clone(),
            Some(action.clone()),
            Some(sat.level()),
        ));
        self.satisfaction.push(sat);
        self.last_user = action;
        self.turn_index += 1;
        if text::has_end_marker(&utterance) || self.turn_index >= self.max_turns {
            self.terminated = true;
        }
        utterance
    }
}

/// Success from the logged system actions when present, else from the
/// simulator's understanding; satisfaction averaged over user turns.
pub fn rate_dialogue(session: &SimulatorSession, db: &ItemDatabase) -> Result<DialogueRating> {
    if session.satisfaction.is_empty() {
        return Err(Error::InvalidArgument(
            "cannot rate a dialogue without user turns".into(),
        ));
    }
    let actions = if session.logged_system.is_empty() {
        &session.predicted_system
    } else {
        &session.logged_system
    };
    let success = metrics::success(actions.iter(), &session.goal, db);
    let mean = session
        .satisfaction
        .iter()
        .map(|s| f64::from(s.level()))
        .sum::<f64>()
        / session.satisfaction.len() as f64;
    Ok(DialogueRating::new(success, mean, session.turn_index))
}

pub trait UserSimulator: Send + Sync {
    fn name(&self) -> &str;
    /// Name plus any degradation note shown in reports.
    fn label(&self) -> String {
        self.name().to_string()
    }
    fn start(&self, goal: Preference, seed: u64) -> SimulatorSession;
    /// One user turn. `system_utterance` is `None` only on the first turn.
    fn turn(
        &self,
        session: &mut SimulatorSession,
        system_utterance: Option<&str>,
    ) -> Result<String>;
    /// Greedy next-turn prediction from a gold context, for test-set
    /// metrics.
    fn predict_gold_turn(&self, example: &PolicyExample) -> Result<(Action, String)> {
        let _ = example;
        Err(Error::InvalidArgument(format!(
            "simulator `{}` has no test-set mode",
            self.name()
        )))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KitConfig {
    pub retrieval: RetrievalConfig,
    pub predictor: String,
    pub ranker: String,
    pub ranker_epochs: usize,
}

impl Default for KitConfig {
    fn default() -> Self {
        KitConfig {
            retrieval: RetrievalConfig::default(),
            predictor: "lexical".into(),
            ranker: "logistic".into(),
            ranker_epochs: 50,
        }
    }
}

/// Components trained once from a corpus and shared by every simulator.
#[derive(Clone)]
pub struct SimulatorKit {
    pub db: Arc<ItemDatabase>,
    pub metaphor: Arc<MetaphorDb>,
    pub nlu: Arc<dyn ActionPredictor>,
    pub ranker: Arc<dyn RelevanceScorer>,
    pub bank: Arc<TemplateBank>,
    pub examples: Arc<Vec<PolicyExample>>,
    pub goal_stats: GoalStats,
    pub transitions: TransitionStats,
    pub config: KitConfig,
}

impl SimulatorKit {
    pub fn train(corpus: &Corpus, config: KitConfig) -> Result<Self> {
        Self::train_with_metaphor(corpus, config, None)
    }

    /// As [`SimulatorKit::train`], reusing a prebuilt metaphor index.
    pub fn train_with_metaphor(
        corpus: &Corpus,
        config: KitConfig,
        metaphor: Option<MetaphorDb>,
    ) -> Result<Self> {
        let metaphor = metaphor.unwrap_or_else(|| build_metaphor_db(corpus));
        let nlu: Arc<dyn ActionPredictor> =
            Arc::from((predictor_registry().get(&config.predictor)?)(corpus));
        let ranker: Arc<dyn RelevanceScorer> = if config.ranker == "logistic" {
            let mut r = LogisticRanker::default();
            if config.ranker_epochs > 0 {
                let ex = ranking_examples(corpus, &metaphor, &config.retrieval);
                r.train(&ex, config.ranker_epochs, 0.5);
            }
            Arc::new(r)
        } else {
            Arc::from((ranker_registry().get(&config.ranker)?)())
        };
        let examples = policy_examples(corpus, Some(&metaphor), &config.retrieval);
        Ok(SimulatorKit {
            db: Arc::new(corpus.db.clone()),
            metaphor: Arc::new(metaphor),
            nlu,
            ranker,
            bank: Arc::new(TemplateBank::user_templates(corpus)),
            examples: Arc::new(examples),
            goal_stats: compute_goal_stats(corpus)?,
            transitions: TransitionStats::from_corpus(corpus),
            config,
        })
    }

    pub fn policy(&self, opts: PolicyOptions) -> StatisticalPolicy {
        StatisticalPolicy::train(&self.db, &self.examples, opts)
    }

    fn metaphor_for(&self, context: &[Turn], state: &DialogueState) -> Vec<RankedCandidate> {
        let cfg = &self.config.retrieval;
        let cands = retrieve_candidates(state, &self.metaphor, cfg);
        let mut ranked = rank_candidates(self.ranker.as_ref(), context, state, cands);
        ranked.truncate(cfg.top_j);
        ranked
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SimConfig {
    pub max_turns: usize,
    pub decode: DecodeMode,
    pub agenda_init: AgendaInit,
}

impl Default for SimConfig {
    fn default() -> Self {
        SimConfig {
            max_turns: 20,
            decode: DecodeMode::Sample { temperature: 1.0 },
            agenda_init: AgendaInit::Sampled,
        }
    }
}

/// Policy source for [`PipelineSimulator`].
enum PolicyMode {
    Statistical {
        policy: StatisticalPolicy,
        model_satisfaction: bool,
    },
    /// No policy: echo the top metaphor record.
    Echo,
}

/// NLU → state → metaphor → policy → NLG → preference update.
pub struct PipelineSimulator {
    name: String,
    kit: SimulatorKit,
    mode: PolicyMode,
    use_metaphor: bool,
    generator: Box<dyn Generator>,
    cfg: SimConfig,
}

impl PipelineSimulator {
    pub fn metasim(kit: &SimulatorKit, cfg: SimConfig) -> Self {
        Self::build(
            "metasim",
            kit,
            cfg,
            PolicyOptions::default(),
            true,
            true,
            "metaphor-echo",
        )
    }

    fn build(
        name: &str,
        kit: &SimulatorKit,
        cfg: SimConfig,
        opts: PolicyOptions,
        use_metaphor: bool,
        model_satisfaction: bool,
        generator: &str,
    ) -> Self {
        let generator = match generator {
            "metaphor-echo" => Box::new(crate::nlg::MetaphorEchoGenerator::new(kit.bank.clone()))
                as Box<dyn Generator>,
            _ => Box::new(TemplateGenerator::new(kit.bank.clone())) as Box<dyn Generator>,
        };
        PipelineSimulator {
            name: name.to_string(),
            mode: PolicyMode::Statistical {
                policy: kit.policy(opts),
                model_satisfaction,
            },
            kit: kit.clone(),
            use_metaphor,
            generator,
            cfg,
        }
    }
}

impl UserSimulator for PipelineSimulator {
    fn name(&self) -> &str {
        &self.name
    }

    fn start(&self, goal: Preference, seed: u64) -> SimulatorSession {
        SimulatorSession::new(goal, seed, self.cfg.max_turns)
    }

    fn turn(
        &self,
        session: &mut SimulatorSession,
        system_utterance: Option<&str>,
    ) -> Result<String> {
        let system = session.observe(self.kit.nlu.as_ref(), system_utterance)?;
        let (action, sat, utterance) = self.step(
            &session.pref,
            &session.context,
            &session.state,
            self.cfg.decode,
            &mut session.rng,
        )?;
        Ok(session.commit(utterance, action, &system, sat))
    }

    fn predict_gold_turn(&self, example: &PolicyExample) -> Result<(Action, String)> {
        let mut rng = rng_from_seed(0);
        let (action, _, utterance) = self.step(
            &example.pref,
            &example.context,
            &example.state,
            DecodeMode::Argmax,
            &mut rng,
        )?;
        Ok((action, utterance))
    }
}

impl PipelineSimulator {
    fn step(
        &self,
        pref: &Preference,
        context: &[Turn],
        state: &DialogueState,
        decode: DecodeMode,
        rng: &mut SimRng,
    ) -> Result<(Action, SatisfactionLabel, String)> {
        let metaphor = if self.use_metaphor {
            self.kit.metaphor_for(context, state)
        } else {
            Vec::new()
        };
        Ok(match &self.mode {
            PolicyMode::Statistical {
                policy,
                model_satisfaction,
            } => {
                let input = PolicyInput {
                    pref,
                    context,
                    state,
                    metaphor: &metaphor,
                };
                let (action, sat) = predict_user_action(policy, &input, decode, rng)?;
                let sat = if *model_satisfaction {
                    sat
                } else {
                    SatisfactionLabel::FAIR
                };
                let nlg = NlgInput {
                    pref,
                    context,
                    metaphor: &metaphor,
                    action: &action,
                };
                let utterance = realize(self.generator.as_ref(), &self.kit.bank, &nlg)?;
                (action, sat, utterance)
            }
            PolicyMode::Echo => match metaphor.first() {
                Some(c) => {
                    let action = c.action.clone().unwrap_or_default();
                    let mut utt = c.utterance.clone();
                    if action.has_act("bye") || utt.is_empty() {
                        utt = format!("{} {}", utt, text::END_MARKER).trim().to_string();
                    }
                    (action, SatisfactionLabel::FAIR, utt)
                }
                None => (
                    Action::simple("bye"),
                    SatisfactionLabel::FAIR,
                    format!("okay. {}", text::END_MARKER),
                ),
            },
        })
    }
}

/// Agenda-driven baseline; `generator` decides the surface form.
pub struct AgendaSimulator {
    name: String,
    kit: SimulatorKit,
    generator: Box<dyn Generator>,
    template_fallback: bool,
    cfg: SimConfig,
}

impl AgendaSimulator {
    pub fn new(kit: &SimulatorKit, cfg: SimConfig) -> Self {
        AgendaSimulator {
            name: "agenda".into(),
            generator: Box::new(TemplateGenerator::new(kit.bank.clone())),
            kit: kit.clone(),
            template_fallback: false,
            cfg,
        }
    }

    /// Agenda policy with a pluggable generator. Without a learned
    /// generator this is the template pipeline and says so in its label.
    pub fn with_generator(
        kit: &SimulatorKit,
        cfg: SimConfig,
        generator: Option<Box<dyn Generator>>,
    ) -> Self {
        let template_fallback = generator.is_none();
        AgendaSimulator {
            name: "agenda-gen".into(),
            generator: generator
                .unwrap_or_else(|| Box::new(TemplateGenerator::new(kit.bank.clone()))),
            kit: kit.clone(),
            template_fallback,
            cfg,
        }
    }
}

impl UserSimulator for AgendaSimulator {
    fn name(&self) -> &str {
        &self.name
    }

    fn label(&self) -> String {
        if self.template_fallback {
            format!("{} (template fallback)", self.name)
        } else {
            self.name.clone()
        }
    }

    fn start(&self, goal: Preference, seed: u64) -> SimulatorSession {
        let mut s = SimulatorSession::new(goal, seed, self.cfg.max_turns);
        let agenda = build_agenda(
            &s.goal,
            &self.kit.transitions,
            &self.kit.db,
            self.cfg.agenda_init,
            &mut s.rng,
        );
        s.agenda = Some(agenda);
        s
    }

    fn turn(
        &self,
        session: &mut SimulatorSession,
        system_utterance: Option<&str>,
    ) -> Result<String> {
        let system = session.observe(self.kit.nlu.as_ref(), system_utterance)?;
        let pref = session.pref.clone();
        let agenda = session.agenda.get_or_insert_with(Agenda::default);
        let action = agenda_turn(agenda, &system, &pref);
        let nlg = NlgInput {
            pref: &session.pref,
            context: &session.context,
            metaphor: &[],
            action: &action,
        };
        let utterance = realize(self.generator.as_ref(), &self.kit.bank, &nlg)?;
        Ok(session.commit(utterance, action, &system, SatisfactionLabel::FAIR))
    }
}

pub type SimulatorFactory =
    Box<dyn Fn(&SimulatorKit, SimConfig) -> Box<dyn UserSimulator> + Send + Sync>;

pub fn simulator_registry() -> Registry<SimulatorFactory> {
    let mut r: Registry<SimulatorFactory> = Registry::new("simulator");
    r.register(
        "metasim",
        Box::new(|k, c| Box::new(PipelineSimulator::metasim(k, c)) as Box<dyn UserSimulator>),
    );
    r.register(
        "metasim-no-metaphor",
        Box::new(|k, c| {
            let opts = PolicyOptions {
                use_metaphor: false,
                ..PolicyOptions::default()
            };
            Box::new(PipelineSimulator::build(
                "metasim-no-metaphor",
                k,
                c,
                opts,
                false,
                true,
                "template",
            )) as Box<dyn UserSimulator>
        }),
    );
    r.register(
        "metasim-no-preference",
        Box::new(|k, c| {
            let opts = PolicyOptions {
                use_preference: false,
                ..PolicyOptions::default()
            };
            Box::new(PipelineSimulator::build(
                "metasim-no-preference",
                k,
                c,
                opts,
                true,
                true,
                "metaphor-echo",
            )) as Box<dyn UserSimulator>
        }),
    );
    r.register(
        "metasim-no-policy",
        Box::new(|k, c| {
            let mut s = PipelineSimulator::metasim(k, c);
            s.name = "metasim-no-policy".into();
            s.mode = PolicyMode::Echo;
            Box::new(s) as Box<dyn UserSimulator>
        }),
    );
    r.register(
        "sl-template",
        Box::new(|k, c| {
            let opts = PolicyOptions {
                use_metaphor: false,
                ..PolicyOptions::default()
            };
            Box::new(PipelineSimulator::build(
                "sl-template",
                k,
                c,
                opts,
                false,
                false,
                "template",
            )) as Box<dyn UserSimulator>
        }),
    );
    r.register(
        "agenda",
        Box::new(|k, c| Box::new(AgendaSimulator::new(k, c)) as Box<dyn UserSimulator>),
    );
    r.register(
        "agenda-gen",
        Box::new(|k, c| {
            Box::new(AgendaSimulator::with_generator(k, c, None)) as Box<dyn UserSimulator>
        }),
    );
    r
}

/// One logged turn.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogTurn {
    pub speaker: Speaker,
    pub utterance: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub action: Option<Action>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub satisfaction: Option<u8>,
}

/// One session per JSONL line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionLog {
    pub schema_version: u32,
    pub simulator: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub variant: Option<String>,
    pub seed: u64,
    pub config_hash: String,
    pub goal: String,
    pub turns: Vec<LogTurn>,
    pub rating: Option<DialogueRating>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

impl SessionLog {
    /// Builds the log from the session, using logged system actions for
    /// system turns when available.
    pub fn from_session(
        simulator: &str,
        variant: Option<&str>,
        session: &SimulatorSession,
        rating: Option<DialogueRating>,
        config_hash: &str,
    ) -> Self {
        let mut sys_i = 0;
        let turns = session
            .context
            .iter()
            .map(|t| {
                let action = if t.speaker == Speaker::System {
                    let a = session
                        .logged_system
                        .get(sys_i)
                        .cloned()
                        .or_else(|| t.action.clone());
                    sys_i += 1;
                    a
                } else {
                    t.action.clone()
                };
                LogTurn {
                    speaker: t.speaker,
                    utterance: t.utterance.clone(),
                    action,
                    satisfaction: t.satisfaction,
                }
            })
            .collect();
        SessionLog {
            schema_version: crate::corpus::SCHEMA_VERSION,
            simulator: simulator.to_string(),
            variant: variant.map(str::to_string),
            seed: session.seed,
            config_hash: config_hash.to_string(),
            goal: session.goal.to_string(),
            turns,
            rating,
            error: None,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn a(s: &str) -> Action {
        s.parse().unwrap()
    }

    fn goal() -> Preference {
        let mut p = Preference::default();
        p.push_goal("hotel", "hotel_price", "cheap").unwrap();
        p.push_goal("hotel", "hotel_parking", "yes").unwrap();
        p
    }

    #[test]
    fn stack_discipline_and_repair() {
        let pref = goal();
        let mut ag = Agenda {
            stack: vec![
                a("bye"),
                a("inform hotel_parking=yes"),
                a("inform hotel_price=cheap"),
            ],
        };
        let none = Action::default();
        assert_eq!(
            agenda_turn(&mut ag, &none, &pref),
            a("inform hotel_price=cheap")
        );
        assert_eq!(
            agenda_turn(&mut ag, &none, &pref),
            a("inform hotel_parking=yes")
        );
        assert_eq!(agenda_turn(&mut ag, &none, &pref), a("bye"));
        assert_eq!(agenda_turn(&mut ag, &none, &pref), a("bye"));

        let mut ag = Agenda {
            stack: vec![a("bye"), a("inform hotel_price=cheap")],
        };
        assert_eq!(
            agenda_turn(&mut ag, &a("request hotel_parking"), &pref),
            a("inform hotel_parking=yes")
        );
        assert_eq!(ag.stack.len(), 2);
    }

    #[test]
    fn oracle_agenda_lists_goal() {
        let pref = goal();
        let ag = build_agenda(
            &pref,
            &TransitionStats::default(),
            &ItemDatabase::default(),
            AgendaInit::Oracle,
            &mut rng_from_seed(0),
        );
        let order: Vec<String> = ag.stack.iter().rev().map(|x| x.to_string()).collect();
        assert_eq!(
            order,
            vec![
                "inform hotel_price=cheap",
                "inform hotel_parking=yes",
                "bye"
            ]
        );
    }

    #[test]
    fn rating_formula() {
        assert_eq!(DialogueRating::new(1.0, 3.0, 4).calibrated, 1.0);
        assert_eq!(DialogueRating::new(0.0, 1.0, 4).calibrated, 0.0);
        assert_eq!(DialogueRating::new(1.0, 2.0, 4).calibrated, 0.75);
    }

    #[test]
    fn rating_needs_user_turns() {
        let s = SimulatorSession::new(goal(), 0, 20);
        assert!(rate_dialogue(&s, &ItemDatabase::default()).is_err());
    }
}
