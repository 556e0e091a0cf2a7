//! Natural language understanding on the user side: predict the action of
//! the latest system response and fold it into the dialogue state.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::sync::Arc;

use crate::corpus::{
    match_values, sequence_nll, Action, Corpus, ItemDatabase, LexiconEntry, Speaker, Triple, Turn,
};
use crate::error::{Error, Result};
use crate::preference::Preference;
use crate::registry::Registry;
use crate::text;

/// One completed exchange: the user's action and the system action that
/// followed it.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct StateStep {
    pub user: Action,
    pub system: Action,
}

/// Append-only history of per-turn actions.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct DialogueState {
    steps: Vec<StateStep>,
}

impl DialogueState {
    pub fn steps(&self) -> &[StateStep] {
        &self.steps
    }

    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    pub fn last_system(&self) -> Option<&Action> {
        self.steps.last().map(|s| &s.system)
    }

    /// Constraints informed by the user so far; a later value for the same
    /// slot replaces the earlier one in place.
    pub fn belief(&self) -> Vec<(String, String)> {
        let mut out: Vec<(String, String)> = Vec::new();
        for step in &self.steps {
            for (slot, value) in step.user.slot_values("inform") {
                match out.iter_mut().find(|(s, _)| s == slot) {
                    Some(entry) => entry.1 = value.to_string(),
                    None => out.push((slot.to_string(), value.to_string())),
                }
            }
        }
        out
    }

    pub fn informed_slots(&self) -> BTreeSet<String> {
        self.belief().into_iter().map(|(s, _)| s).collect()
    }

    /// `slot=value, slot=value` rendering of [`belief`](Self::belief).
    pub fn belief_string(&self) -> String {
        self.belief()
            .iter()
            .map(|(s, v)| format!("{s}={v}"))
            .collect::<Vec<_>>()
            .join(", ")
    }

    /// Retrieval key: every action in order, separated by ` | `.
    pub fn to_key(&self) -> String {
        self.to_string()
    }
}

impl fmt::Display for DialogueState {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mut first = true;
        for step in &self.steps {
            for a in [&step.user, &step.system] {
                let user_only = Action::new(a.dialogue_triples().cloned().collect());
                if !first {
                    f.write_str(" | ")?;
                }
                first = false;
                write!(f, "{user_only}")?;
            }
        }
        Ok(())
    }
}

/// Returns `state` extended by one step; the input is untouched.
pub fn compose_state(
    state: &DialogueState,
    user_action: Action,
    system_action: Action,
) -> DialogueState {
    let mut next = state.clone();
    next.steps.push(StateStep {
        user: user_action,
        system: system_action,
    });
    next
}

/// Predicted action plus the probability of each emitted token/triple.
#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub action: Action,
    pub token_probs: Vec<f64>,
}

/// Predicts the action of the last system response given the user's
/// preference and the dialogue context.
pub trait ActionPredictor: Send + Sync {
    fn name(&self) -> &str;
    fn predict(&self, pref: &Preference, context: &[Turn]) -> Result<Prediction>;
}

pub fn predict_system_action(
    predictor: &dyn ActionPredictor,
    pref: &Preference,
    context: &[Turn],
) -> Result<Action> {
    match context.last() {
        None => Err(Error::InvalidArgument("empty dialogue context".into())),
        Some(t) if t.speaker != Speaker::System => Err(Error::InvalidArgument(
            "dialogue context must end with a system turn".into(),
        )),
        Some(_) => Ok(predictor.predict(pref, context)?.action),
    }
}

/// `-log P(s_t | P, U)` over the per-token probabilities of the gold action.
pub fn nlu_loss(gold_token_probs: &[f64]) -> Result<f64> {
    sequence_nll(gold_token_probs)
}

const CLOSED_CLASS: &[(&str, &str)] = &[("goodbye", "bye"), ("bye", "bye")];

/// Maps slot keywords (the slot name without its domain prefix) to slots.
#[derive(Debug, Clone, Default)]
struct SlotLexicon {
    by_keyword: BTreeMap<String, Vec<String>>,
    domains: BTreeSet<String>,
}

impl SlotLexicon {
    fn build(db: &ItemDatabase) -> Self {
        let mut lex = SlotLexicon::default();
        for (domain, table) in &db.tables {
            lex.domains.insert(domain.clone());
            for slot in table.attribute_keys() {
                let bare = slot.strip_prefix(&format!("{domain}_")).unwrap_or(slot);
                for tok in text::tokenize(bare) {
                    lex.by_keyword
                        .entry(tok)
                        .or_default()
                        .push(slot.to_string());
                }
            }
        }
        for slot in &db.extra_slots {
            for tok in text::tokenize(slot) {
                lex.by_keyword.entry(tok).or_default().push(slot.clone());
            }
        }
        lex
    }

    /// Slots named in the utterance; ambiguous keywords resolve by a domain
    /// word in the utterance, then by the preference's domains.
    fn find(&self, tokens: &[String], db: &ItemDatabase, pref: &Preference) -> Vec<String> {
        let mentioned: Vec<&str> = tokens
            .iter()
            .filter(|t| self.domains.contains(*t))
            .map(String::as_str)
            .collect();
        let mut out = Vec::new();
        for tok in tokens {
            let Some(cands) = self.by_keyword.get(tok) else {
                continue;
            };
            let in_domain = |doms: &[&str]| {
                cands
                    .iter()
                    .find(|s| db.slot_domains(s).iter().any(|d| doms.contains(d)))
                    .cloned()
            };
            let pick = in_domain(&mentioned)
                .or_else(|| in_domain(&pref.goal_domains()))
                .or_else(|| cands.first().cloned());
            if let Some(slot) = pick {
                if !out.contains(&slot) {
                    out.push(slot);
                }
            }
        }
        out
    }
}

/// Default predictor: multinomial naive-Bayes act classification over
/// delexicalized tokens, value detection by exact match against database
/// values, and slot-keyword lookup for requests.
pub struct LexicalPredictor {
    db: Arc<ItemDatabase>,
    lexicon: Vec<LexiconEntry>,
    slots: SlotLexicon,
    act_prior: BTreeMap<String, f64>,
    token_counts: BTreeMap<String, BTreeMap<String, f64>>,
    act_totals: BTreeMap<String, f64>,
    vocab_size: f64,
    /// Acts that carried `slot=value` in training annotations.
    value_acts: BTreeSet<String>,
    /// Acts that carried a bare slot.
    slot_acts: BTreeSet<String>,
}

const VALUE_TOKEN: &str = "<value>";

fn delexicalize_tokens(
    tokens: &[String],
    lexicon: &[LexiconEntry],
) -> (Vec<String>, Vec<(String, String)>) {
    let hits = match_values(tokens, lexicon);
    let mut out = tokens.to_vec();
    let mut pos = 0;
    let mut found = Vec::new();
    for e in hits {
        if let Some(start) =
            text::find_phrase(&out[pos.min(out.len())..], &e.tokens).map(|p| p + pos)
        {
            out.splice(start..start + e.tokens.len(), [VALUE_TOKEN.to_string()]);
            pos = start + 1;
        }
        found.push((e.slot.clone(), e.value.clone()));
    }
    (out, found)
}

impl LexicalPredictor {
    pub fn train(corpus: &Corpus) -> Self {
        Self::train_on(corpus.dialogues.iter().flat_map(|d| &d.turns), &corpus.db)
    }

    pub fn train_on<'a>(turns: impl IntoIterator<Item = &'a Turn>, db: &ItemDatabase) -> Self {
        let lexicon = db.value_lexicon();
        let mut act_counts: BTreeMap<String, f64> = BTreeMap::new();
        let mut token_counts: BTreeMap<String, BTreeMap<String, f64>> = BTreeMap::new();
        let mut act_totals: BTreeMap<String, f64> = BTreeMap::new();
        let mut vocab = BTreeSet::new();
        let mut value_acts = BTreeSet::new();
        let mut slot_acts = BTreeSet::new();
        for turn in turns {
            if turn.speaker != Speaker::System {
                continue;
            }
            let Some(action) = &turn.action else { continue };
            let Some(act) = action.primary_act() else {
                continue;
            };
            for t in action.dialogue_triples() {
                match (&t.slot, &t.value) {
                    (Some(_), Some(_)) => value_acts.insert(t.act.clone()),
                    (Some(_), None) => slot_acts.insert(t.act.clone()),
                    _ => false,
                };
            }
            *act_counts.entry(act.to_string()).or_default() += 1.0;
            let (tokens, _) = delexicalize_tokens(&text::tokenize(&turn.utterance), &lexicon);
            let per_act = token_counts.entry(act.to_string()).or_default();
            for tok in tokens {
                *per_act.entry(tok.clone()).or_default() += 1.0;
                *act_totals.entry(act.to_string()).or_default() += 1.0;
                vocab.insert(tok);
            }
        }
        let total: f64 = act_counts.values().sum();
        let act_prior = act_counts
            .into_iter()
            .map(|(a, c)| (a, c / total))
            .collect();
        LexicalPredictor {
            db: Arc::new(db.clone()),
            lexicon,
            slots: SlotLexicon::build(db),
            act_prior,
            token_counts,
            act_totals,
            vocab_size: vocab.len().max(1) as f64,
            value_acts,
            slot_acts,
        }
    }

    /// Posterior over acts for an utterance, sorted by act name.
    pub fn act_posterior(&self, utterance: &str) -> Vec<(String, f64)> {
        let (tokens, _) = delexicalize_tokens(&text::tokenize(utterance), &self.lexicon);
        let mut scores: Vec<(String, f64)> = self
            .act_prior
            .iter()
            .map(|(act, prior)| {
                let counts = self.token_counts.get(act);
                let total = self.act_totals.get(act).copied().unwrap_or(0.0);
                let ll: f64 = tokens
                    .iter()
                    .map(|t| {
                        let c = counts.and_then(|m| m.get(t)).copied().unwrap_or(0.0);
                        ((c + 1.0) / (total + self.vocab_size)).ln()
                    })
                    .sum();
                (act.clone(), prior.ln() + ll)
            })
            .collect();
        let max = scores
            .iter()
            .map(|(_, s)| *s)
            .fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = scores.iter().map(|(_, s)| (s - max).exp()).sum();
        for (_, s) in &mut scores {
            *s = (*s - max).exp() / z;
        }
        scores
    }

    fn classify(&self, utterance: &str, tokens: &[String]) -> (String, f64) {
        if text::has_end_marker(utterance) {
            return ("bye".into(), 1.0);
        }
        for (kw, act) in CLOSED_CLASS {
            if tokens.iter().any(|t| t == kw) {
                return (act.to_string(), 1.0);
            }
        }
        let post = self.act_posterior(utterance);
        post.into_iter()
            .fold(None::<(String, f64)>, |best, (a, p)| match best {
                Some((_, bp)) if bp >= p => best,
                _ => Some((a, p)),
            })
            .unwrap_or_else(|| ("inform".into(), 1.0))
    }
}

impl ActionPredictor for LexicalPredictor {
    fn name(&self) -> &str {
        "lexical"
    }

    fn predict(&self, pref: &Preference, context: &[Turn]) -> Result<Prediction> {
        let last = context
            .last()
            .ok_or_else(|| Error::InvalidArgument("empty dialogue context".into()))?;
        let tokens = text::tokenize(&last.utterance);
        let (act, p_act) = self.classify(&last.utterance, &tokens);
        let values: Vec<(String, String)> = match_values(&tokens, &self.lexicon)
            .into_iter()
            .map(|e| (e.slot.clone(), e.value.clone()))
            .collect();
        let mut action = Action::default();
        if self.slot_acts.contains(&act) && !self.value_acts.contains(&act) {
            for slot in self.slots.find(&tokens, &self.db, pref) {
                action.push(Triple::slot(&act, &slot));
            }
        } else if act == "recommend" {
            for (slot, value) in &values {
                let a = if self.db.is_name_slot(slot) {
                    "recommend"
                } else {
                    "inform"
                };
                action.push(Triple::full(a, slot, value));
            }
            // recommend first, attributes after
            action.triples.sort_by_key(|t| t.act != "recommend");
        } else if self.value_acts.contains(&act)
            || (act != "bye" && !values.is_empty() && !self.slot_acts.contains(&act))
        {
            for (slot, value) in &values {
                action.push(Triple::full(&act, slot, value));
            }
        }
        if action.is_empty() {
            action.push(Triple::act(&act));
        }
        let mut token_probs = vec![p_act.clamp(f64::MIN_POSITIVE, 1.0)];
        token_probs.extend(std::iter::repeat(1.0).take(action.triples.len().saturating_sub(1)));
        Ok(Prediction {
            action,
            token_probs,
        })
    }
}

/// Rule-based entity linker: every database value mentioned in the system
/// utterance becomes a triple (`recommend` for item names, `inform`
/// otherwise). Utterances without entities map to `fallback_act`.
pub struct EntityPredictor {
    db: Arc<ItemDatabase>,
    lexicon: Vec<LexiconEntry>,
    fallback_act: String,
}

impl EntityPredictor {
    pub fn new(db: &ItemDatabase) -> Self {
        EntityPredictor {
            db: Arc::new(db.clone()),
            lexicon: db.value_lexicon(),
            fallback_act: "chat".into(),
        }
    }
}

impl ActionPredictor for EntityPredictor {
    fn name(&self) -> &str {
        "entity"
    }

    fn predict(&self, _pref: &Preference, context: &[Turn]) -> Result<Prediction> {
        let last = context
            .last()
            .ok_or_else(|| Error::InvalidArgument("empty dialogue context".into()))?;
        let tokens = text::tokenize(&last.utterance);
        let mut action = Action::default();
        if text::has_end_marker(&last.utterance)
            || CLOSED_CLASS
                .iter()
                .any(|(k, _)| tokens.iter().any(|t| t == k))
        {
            action.push(Triple::act("bye"));
        }
        for e in match_values(&tokens, &self.lexicon) {
            let act = if self.db.is_name_slot(&e.slot) {
                "recommend"
            } else {
                "inform"
            };
            action.push(Triple::full(act, &e.slot, &e.value));
        }
        if action.is_empty() {
            action.push(Triple::act(&self.fallback_act));
        }
        let n = action.triples.len();
        Ok(Prediction {
            action,
            token_probs: vec![1.0; n],
        })
    }
}

pub type PredictorFactory = Box<dyn Fn(&Corpus) -> Box<dyn ActionPredictor> + Send + Sync>;

pub fn predictor_registry() -> Registry<PredictorFactory> {
    let mut r: Registry<PredictorFactory> = Registry::new("action predictor");
    r.register(
        "lexical",
        Box::new(|c: &Corpus| Box::new(LexicalPredictor::train(c)) as Box<dyn ActionPredictor>),
    );
    r.register(
        "entity",
        Box::new(|c: &Corpus| Box::new(EntityPredictor::new(&c.db)) as Box<dyn ActionPredictor>),
    );
    r
}
