//! User-side language generation: template retrieval plus slot filling,
//! with pluggable generators and `[END]` handling.

use std::collections::BTreeSet;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::corpus::{Action, Corpus, Dialogue, Speaker, Turn};
use crate::error::{Error, Result};
use crate::metaphor::{tfidf_score, IdfTable, RankedCandidate};
use crate::preference::Preference;
use crate::registry::Registry;
use crate::text;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Template {
    /// Lowercased, tokenized text with `[slot]` placeholders.
    pub text: String,
    pub source_action: Action,
    pub source_dialogue_id: String,
}

/// Placeholder names in order of appearance. `[END]` is not a
/// placeholder.
pub fn placeholders(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut rest = text;
    while let Some(open) = rest.find('[') {
        let after = &rest[open + 1..];
        let Some(close) = after.find(']') else { break };
        let name = &after[..close];
        if !name.is_empty()
            && name
                .chars()
                .all(|c| c.is_ascii_lowercase() || c.is_ascii_digit() || c == '_')
        {
            out.push(name.to_string());
        }
        rest = &after[close + 1..];
    }
    out
}

impl Template {
    pub fn placeholders(&self) -> Vec<String> {
        placeholders(&self.text)
    }

    fn act_set(&self) -> BTreeSet<&str> {
        self.source_action.acts().into_iter().collect()
    }

    fn bare_slots(&self) -> BTreeSet<&str> {
        bare_slots(&self.source_action)
    }
}

fn bare_slots(action: &Action) -> BTreeSet<&str> {
    action
        .dialogue_triples()
        .filter(|t| t.value.is_none())
        .filter_map(|t| t.slot.as_deref())
        .collect()
}

fn valued_slots(action: &Action) -> Vec<&str> {
    let mut out: Vec<&str> = Vec::new();
    for t in action.dialogue_triples() {
        if let (Some(s), Some(_)) = (&t.slot, &t.value) {
            if !out.contains(&s.as_str()) {
                out.push(s);
            }
        }
    }
    out
}

/// Replaces annotated values in the utterance with `[slot]`. Values that
/// do not occur verbatim are left alone.
pub fn delexicalize(utterance: &str, action: &Action) -> String {
    let mut tokens = text::tokenize(&text::strip_end_marker(utterance));
    let mut triples: Vec<(&str, Vec<String>)> = action
        .dialogue_triples()
        .filter_map(|t| Some((t.slot.as_deref()?, text::tokenize(t.value.as_deref()?))))
        .filter(|(_, v)| !v.is_empty())
        .collect();
    // longer values first so overlapping phrases resolve to the specific one
    triples.sort_by(|a, b| b.1.len().cmp(&a.1.len()));
    for (slot, value) in triples {
        if let Some(pos) = text::find_phrase(&tokens, &value) {
            tokens.splice(pos..pos + value.len(), [format!("[{slot}]")]);
        }
    }
    tokens.join(" ")
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TemplateBank {
    templates: Vec<Template>,
    idf: IdfTable,
}

impl TemplateBank {
    pub fn new(templates: Vec<Template>) -> Self {
        let idf = IdfTable::from_texts(templates.iter().map(|t| t.text.as_str()));
        TemplateBank { templates, idf }
    }

    /// Delexicalized turns of one speaker, deduplicated by (text, action).
    pub fn from_dialogues<'a>(
        dialogues: impl IntoIterator<Item = &'a Dialogue>,
        speaker: Speaker,
    ) -> Self {
        let mut seen = BTreeSet::new();
        let mut templates = Vec::new();
        for d in dialogues {
            for turn in d.turns.iter().filter(|t| t.speaker == speaker) {
                let Some(action) = &turn.action else { continue };
                let action = Action::new(action.dialogue_triples().cloned().collect());
                if action.is_empty() {
                    continue;
                }
                let text = delexicalize(&turn.utterance, &action);
                if text.is_empty() || !seen.insert((text.clone(), action.to_string())) {
                    continue;
                }
                templates.push(Template {
                    text,
                    source_action: action,
                    source_dialogue_id: d.id.clone(),
                });
            }
        }
        TemplateBank::new(templates)
    }

    pub fn user_templates(corpus: &Corpus) -> Self {
        Self::from_dialogues(&corpus.dialogues, Speaker::User)
    }

    pub fn len(&self) -> usize {
        self.templates.len()
    }

    pub fn is_empty(&self) -> bool {
        self.templates.is_empty()
    }

    pub fn templates(&self) -> &[Template] {
        &self.templates
    }

    pub fn idf(&self) -> &IdfTable {
        &self.idf
    }

    /// Templates usable for `action`: same act set, same bare (requested)
    /// slots, and every placeholder backed by a value in the action.
    pub fn compatible<'a>(
        &'a self,
        action: &'a Action,
    ) -> impl Iterator<Item = (usize, &'a Template)> + 'a {
        let acts: BTreeSet<&str> = action.acts().into_iter().collect();
        let bare = bare_slots(action);
        let valued = valued_slots(action);
        self.templates.iter().enumerate().filter(move |(_, t)| {
            t.act_set() == acts
                && t.bare_slots() == bare
                && t.placeholders()
                    .iter()
                    .all(|p| valued.contains(&p.as_str()))
        })
    }
}

/// Generic per-act wording used when the bank has nothing suitable.
pub fn fallback_template(action: &Action) -> Template {
    let mut parts: Vec<String> = Vec::new();
    let informs: Vec<String> = action
        .dialogue_triples()
        .filter(|t| t.act == "inform" && t.value.is_some())
        .filter_map(|t| t.slot.as_ref().map(|s| format!("[{s}]")))
        .collect();
    for t in action.dialogue_triples() {
        match t.act.as_str() {
            "inform" => {}
            "reject" => parts.push("no , not that one .".into()),
            "accept" => parts.push("that sounds good .".into()),
            "request" => {
                if let Some(s) = &t.slot {
                    let bare = s.split_once('_').map(|(_, b)| b).unwrap_or(s);
                    parts.push(format!("what is the {} ?", bare.replace('_', " ")));
                }
            }
            "bye" => {}
            other => match (&t.slot, &t.value) {
                (Some(s), Some(_)) => parts.push(format!("[{s}] .")),
                _ => parts.push(format!("{other} .")),
            },
        }
    }
    if !informs.is_empty() {
        let pos = usize::from(action.has_act("reject"));
        parts.insert(
            pos.min(parts.len()),
            format!("i am looking for {} .", informs.join(" and ")),
        );
    }
    if action.has_act("bye") {
        parts.push(format!("okay. {}", text::END_MARKER));
    }
    Template {
        text: parts.join(" "),
        source_action: action.clone(),
        source_dialogue_id: String::new(),
    }
}

/// Compatible template with the most placeholders; ties by TF-IDF against
/// the latest context utterance, then bank order. Falls back to the
/// generic template when nothing is compatible.
pub fn retrieve_template(action: &Action, context: &[Turn], bank: &TemplateBank) -> Template {
    let query = context.last().map(|t| t.utterance.as_str()).unwrap_or("");
    let mut best: Option<(usize, f64, &Template)> = None;
    for (_, t) in bank.compatible(action) {
        let overlap = t.placeholders().len();
        let score = tfidf_score(query, &t.text, bank.idf());
        let better = match &best {
            None => true,
            Some((bo, bs, _)) => overlap > *bo || (overlap == *bo && score > *bs),
        };
        if better {
            best = Some((overlap, score, t));
        }
    }
    match best {
        Some((_, _, t)) => complete_template(t.clone(), action),
        None => fallback_template(action),
    }
}

/// Appends placeholders for valued slots the template does not mention so
/// that every action value is realized.
pub fn complete_template(mut t: Template, action: &Action) -> Template {
    let have = t.placeholders();
    let missing: Vec<String> = valued_slots(action)
        .into_iter()
        .filter(|s| !have.iter().any(|h| h == s))
        .map(|s| format!("[{s}]"))
        .collect();
    if !missing.is_empty() {
        t.text = format!("{} , also {}", t.text, missing.join(" and "));
    }
    t
}

/// Substitutes every placeholder with the action's value for that slot,
/// else the preference's.
pub fn fill_slots(template: &Template, action: &Action, pref: &Preference) -> Result<String> {
    let mut out = template.text.clone();
    for slot in template.placeholders() {
        let value = action
            .dialogue_triples()
            .find(|t| t.slot.as_deref() == Some(slot.as_str()) && t.value.is_some())
            .and_then(|t| t.value.clone())
            .or_else(|| pref.get(&slot).map(|e| e.value.clone()))
            .ok_or_else(|| Error::UnfilledSlot(slot.clone()))?;
        out = out.replacen(&format!("[{slot}]"), &value, 1);
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy)]
pub struct NlgInput<'a> {
    pub pref: &'a Preference,
    pub context: &'a [Turn],
    pub metaphor: &'a [RankedCandidate],
    pub action: &'a Action,
}

pub trait Generator: Send + Sync {
    fn name(&self) -> &str;
    fn generate(&self, input: &NlgInput) -> Result<String>;
    /// Per-token probabilities of a gold utterance, for trainable
    /// generators.
    fn token_probabilities(&self, _input: &NlgInput, _gold: &str) -> Option<Vec<f64>> {
        None
    }
}

/// `-log P(u_{t+1} | …)` over generator-supplied token probabilities.
pub fn nlg_loss(gold_token_probs: &[f64]) -> Result<f64> {
    crate::corpus::sequence_nll(gold_token_probs)
}

pub struct TemplateGenerator {
    bank: Arc<TemplateBank>,
}

impl TemplateGenerator {
    pub fn new(bank: Arc<TemplateBank>) -> Self {
        TemplateGenerator { bank }
    }
}

fn template_pipeline(bank: &TemplateBank, input: &NlgInput) -> Result<String> {
    let t = retrieve_template(input.action, input.context, bank);
    match fill_slots(&t, input.action, input.pref) {
        Ok(s) => Ok(s),
        Err(_) => fill_slots(&fallback_template(input.action), input.action, input.pref),
    }
}

impl Generator for TemplateGenerator {
    fn name(&self) -> &str {
        "template"
    }

    fn generate(&self, input: &NlgInput) -> Result<String> {
        template_pipeline(&self.bank, input)
    }
}

/// Reuses the best metaphor utterance whose action has the same shape,
/// re-filled with the current action's values.
pub struct MetaphorEchoGenerator {
    bank: Arc<TemplateBank>,
}

impl MetaphorEchoGenerator {
    pub fn new(bank: Arc<TemplateBank>) -> Self {
        MetaphorEchoGenerator { bank }
    }
}

impl Generator for MetaphorEchoGenerator {
    fn name(&self) -> &str {
        "metaphor-echo"
    }

    fn generate(&self, input: &NlgInput) -> Result<String> {
        let probe = TemplateBank::new(
            input
                .metaphor
                .iter()
                .filter_map(|c| {
                    let a = c.action.as_ref()?;
                    Some(Template {
                        text: delexicalize(&c.utterance, a),
                        source_action: Action::new(a.dialogue_triples().cloned().collect()),
                        source_dialogue_id: String::new(),
                    })
                })
                .collect(),
        );
        let first = probe
            .compatible(input.action)
            .next()
            .map(|(_, t)| t.clone());
        match first {
            Some(t) => fill_slots(
                &complete_template(t, input.action),
                input.action,
                input.pref,
            ),
            None => template_pipeline(&self.bank, input),
        }
    }
}

/// Runs the generator, falling back to the template pipeline on failure or
/// empty output, and marks `bye` utterances with `[END]`.
pub fn realize(generator: &dyn Generator, bank: &TemplateBank, input: &NlgInput) -> Result<String> {
    let mut out = match generator.generate(input) {
        Ok(s) if !text::strip_end_marker(&s).is_empty() || text::has_end_marker(&s) => s,
        Ok(_) => {
            log::warn!(
                "generator `{}` returned an empty utterance; using templates",
                generator.name()
            );
            template_pipeline(bank, input)?
        }
        Err(e) => {
            log::warn!(
                "generator `{}` failed ({e}); using templates",
                generator.name()
            );
            template_pipeline(bank, input)?
        }
    };
    if input.action.has_act("bye") && !text::has_end_marker(&out) {
        out = format!("{} {}", out.trim_end(), text::END_MARKER);
    }
    if text::strip_end_marker(&out).is_empty() && !text::has_end_marker(&out) {
        out = fill_slots(&fallback_template(input.action), input.action, input.pref)?;
    }
    Ok(out)
}

pub type GeneratorFactory = Box<dyn Fn(Arc<TemplateBank>) -> Box<dyn Generator> + Send + Sync>;

pub fn generator_registry() -> Registry<GeneratorFactory> {
    let mut r: Registry<GeneratorFactory> = Registry::new("generator");
    r.register(
        "template",
        Box::new(|b| Box::new(TemplateGenerator::new(b)) as Box<dyn Generator>),
    );
    r.register(
        "metaphor-echo",
        Box::new(|b| Box::new(MetaphorEchoGenerator::new(b)) as Box<dyn Generator>),
    );
    r
}

#[cfg(test)]
mod tests {
    use super::*;

    fn a(s: &str) -> Action {
        s.parse().unwrap()
    }

    fn t(text: &str, action: &str) -> Template {
        Template {
            text: text.into(),
            source_action: a(action),
            source_dialogue_id: "d".into(),
        }
    }

    #[test]
    fn fill_examples() {
        let pref = Preference::default();
        let tmpl = t("i want a [hotel_price] hotel", "inform hotel_price=cheap");
        assert_eq!(
            fill_slots(&tmpl, &a("inform hotel_price=cheap"), &pref).unwrap(),
            "i want a cheap hotel"
        );
        let plain = t("thanks a lot", "thank");
        assert_eq!(
            fill_slots(&plain, &a("thank"), &pref).unwrap(),
            "thanks a lot"
        );
        let err = fill_slots(
            &t("in the [hotel_area]", "inform hotel_area=x"),
            &a("inform hotel_price=cheap"),
            &pref,
        )
        .unwrap_err();
        assert!(matches!(err, Error::UnfilledSlot(ref s) if s == "hotel_area"));
        let mut pref = Preference::default();
        pref.push_goal("hotel", "hotel_area", "north").unwrap();
        assert_eq!(
            fill_slots(
                &t("in the [hotel_area]", "inform hotel_area=x"),
                &a("inform hotel_price=cheap"),
                &pref
            )
            .unwrap(),
            "in the north"
        );
    }

    #[test]
    fn delexicalization() {
        let got = delexicalize(
            "I want a CHEAP hotel in the north. [END]",
            &a("inform hotel_price=cheap ; inform hotel_area=north"),
        );
        assert_eq!(got, "i want a [hotel_price] hotel in the [hotel_area]");
        assert_eq!(placeholders("x [a_b] [END] [c1]"), vec!["a_b", "c1"]);
    }

    #[test]
    fn unique_maximizer_selected() {
        let bank = TemplateBank::new(vec![
            t("a [hotel_price] one", "inform hotel_price=x"),
            t(
                "a [hotel_price] one in [hotel_area]",
                "inform hotel_price=x ; inform hotel_area=y",
            ),
        ]);
        let action = a("inform hotel_price=cheap ; inform hotel_area=north");
        assert_eq!(
            retrieve_template(&action, &[], &bank).text,
            "a [hotel_price] one in [hotel_area]"
        );
    }

    #[test]
    fn tfidf_breaks_overlap_ties() {
        let bank = TemplateBank::new(vec![
            t("i need [hotel_price] prices", "inform hotel_price=x"),
            t(
                "make it [hotel_price] for my budget",
                "inform hotel_price=x",
            ),
        ]);
        let ctx = vec![Turn::system("what is your budget ?", None)];
        let action = a("inform hotel_price=cheap");
        // hand check: only the second template shares a token ("budget")
        assert_eq!(
            tfidf_score(
                "what is your budget ?",
                &bank.templates()[0].text,
                bank.idf()
            ),
            0.0
        );
        assert!(
            tfidf_score(
                "what is your budget ?",
                &bank.templates()[1].text,
                bank.idf()
            ) > 0.0
        );
        assert_eq!(
            retrieve_template(&action, &ctx, &bank).text,
            "make it [hotel_price] for my budget"
        );
        // with no context the bank order decides
        assert_eq!(
            retrieve_template(&action, &[], &bank).text,
            "i need [hotel_price] prices"
        );
    }

    #[test]
    fn bye_uses_act_template_and_end_marker() {
        let bank = TemplateBank::new(vec![
            t("thanks , goodbye", "bye"),
            t("bye for now , thanks for the help", "bye"),
            t("cheap", "inform hotel_price=x"),
        ]);
        let ctx = vec![Turn::system("glad to help , anything else ?", None)];
        assert_eq!(
            retrieve_template(&a("bye"), &ctx, &bank).text,
            "bye for now , thanks for the help"
        );
        let gen = TemplateGenerator::new(Arc::new(bank.clone()));
        let pref = Preference::default();
        let input = NlgInput {
            pref: &pref,
            context: &ctx,
            metaphor: &[],
            action: &a("bye"),
        };
        let out = realize(&gen, &bank, &input).unwrap();
        assert!(out.ends_with("[END]"), "{out}");
        let empty = TemplateBank::default();
        let out = realize(
            &TemplateGenerator::new(Arc::new(empty.clone())),
            &empty,
            &input,
        )
        .unwrap();
        assert_eq!(out, "okay. [END]");
    }

    #[test]
    fn default_backend_equals_pipeline() {
        let bank = TemplateBank::new(vec![t(
            "a [hotel_price] place please",
            "inform hotel_price=x",
        )]);
        let pref = Preference::default();
        let action = a("inform hotel_price=cheap ; inform hotel_area=north");
        let input = NlgInput {
            pref: &pref,
            context: &[],
            metaphor: &[],
            action: &action,
        };
        let expected = fill_slots(&retrieve_template(&action, &[], &bank), &action, &pref).unwrap();
        let got = realize(
            &TemplateGenerator::new(Arc::new(bank.clone())),
            &bank,
            &input,
        )
        .unwrap();
        assert_eq!(got, expected);
        assert!(got.contains("cheap") && got.contains("north"), "{got}");
    }

    #[test]
    fn metaphor_echo_refills_current_values() {
        let bank = TemplateBank::default();
        let cand = RankedCandidate {
            record: 0,
            utterance: "something expensive in the south please".into(),
            action: Some(a("inform hotel_price=expensive ; inform hotel_area=south")),
            tfidf_score: 1.0,
            relevance: 1.0,
        };
        let pref = Preference::default();
        let action = a("inform hotel_price=cheap ; inform hotel_area=north");
        let input = NlgInput {
            pref: &pref,
            context: &[],
            metaphor: std::slice::from_ref(&cand),
            action: &action,
        };
        let out = realize(
            &MetaphorEchoGenerator::new(Arc::new(bank.clone())),
            &bank,
            &input,
        )
        .unwrap();
        assert_eq!(out, "something cheap in the north please");
    }

    struct Failing;
    impl Generator for Failing {
        fn name(&self) -> &str {
            "failing"
        }
        fn generate(&self, _: &NlgInput) -> Result<String> {
            Err(Error::Backend("down".into()))
        }
    }

    #[test]
    fn failure_falls_back_and_fallbacks_are_total() {
        let bank = TemplateBank::default();
        let pref = Preference::default();
        for s in [
            "reject ; inform hotel_price=cheap",
            "request hotel_postcode",
            "inform hotel_area=north ; bye",
            "thank",
        ] {
            let action = a(s);
            let input = NlgInput {
                pref: &pref,
                context: &[],
                metaphor: &[],
                action: &action,
            };
            let out = realize(&Failing, &bank, &input).unwrap();
            assert!(!out.trim().is_empty());
            for (_, v) in action.slot_values("inform") {
                assert!(out.contains(v), "{out}");
            }
        }
    }

    #[test]
    fn bank_from_corpus_turns() {
        let d = Dialogue {
            id: "d1".into(),
            domains: ["hotel".to_string()].into(),
            goal: None,
            turns: vec![
                Turn::user(
                    "A cheap one please",
                    Some(a("inform hotel_price=cheap")),
                    None,
                ),
                Turn::system("ok", None),
                Turn::user("thanks bye [END]", Some(a("bye")), None),
            ],
        };
        let bank = TemplateBank::from_dialogues([&d], Speaker::User);
        let texts: Vec<&str> = bank.templates().iter().map(|t| t.text.as_str()).collect();
        assert_eq!(texts, vec!["a [hotel_price] one please", "thanks bye"]);
    }
}
