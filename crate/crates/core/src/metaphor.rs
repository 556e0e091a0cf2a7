//! Metaphor retrieval: a database of `(serialized state, user utterance)`
//! records built from the training corpus, searched in two stages.
//!
//! Stage one scores every record key against the current dialogue state
//! with TF-IDF (raw term frequency, `idf = ln((1+n)/(1+df)) + 1`, cosine
//! normalization) through an inverted index. Stage two re-orders the top-k
//! candidates with a relevance scorer.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{Action, Corpus, Speaker, Turn, SCHEMA_VERSION};
use crate::error::{Error, Result};
use crate::nlu::{compose_state, DialogueState};
use crate::registry::Registry;
use crate::text;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetaphorRecord {
    pub key: String,
    pub value: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub action: Option<Action>,
    pub dialogue_id: String,
    pub turn: usize,
}

/// Document frequencies over record keys.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct IdfTable {
    pub documents: usize,
    pub df: BTreeMap<String, usize>,
}

impl IdfTable {
    pub fn from_texts<'a>(texts: impl IntoIterator<Item = &'a str>) -> Self {
        let mut t = IdfTable::default();
        for text in texts {
            t.documents += 1;
            let mut seen: Vec<String> = text::tokenize(text);
            seen.sort();
            seen.dedup();
            for tok in seen {
                *t.df.entry(tok).or_default() += 1;
            }
        }
        t
    }

    pub fn idf(&self, token: &str) -> f64 {
        let df = self.df.get(token).copied().unwrap_or(0) as f64;
        ((1.0 + self.documents as f64) / (1.0 + df)).ln() + 1.0
    }
}

/// Raw term frequencies in token order.
fn term_frequencies(text: &str) -> BTreeMap<String, u32> {
    let mut tf = BTreeMap::new();
    for tok in text::tokenize(text) {
        *tf.entry(tok).or_default() += 1;
    }
    tf
}

fn norm(tf: &BTreeMap<String, u32>, idf: &IdfTable) -> f64 {
    tf.iter()
        .map(|(t, c)| {
            let w = f64::from(*c) * idf.idf(t);
            w * w
        })
        .sum::<f64>()
        .sqrt()
}

/// Cosine-normalized `Σ tf(q)·tf(k)·idf²` over shared tokens; 0 when either
/// side is empty.
pub fn tfidf_score(query: &str, key: &str, idf: &IdfTable) -> f64 {
    let q = term_frequencies(query);
    let k = term_frequencies(key);
    let (qn, kn) = (norm(&q, idf), norm(&k, idf));
    if qn == 0.0 || kn == 0.0 {
        return 0.0;
    }
    let mut dot = 0.0;
    for (tok, qc) in &q {
        if let Some(kc) = k.get(tok) {
            let w = idf.idf(tok);
            dot += (f64::from(*qc) * w) * (f64::from(*kc) * w);
        }
    }
    dot / (qn * kn)
}

#[derive(Debug, Clone, Default, PartialEq)]
struct InvertedIndex {
    postings: BTreeMap<String, Vec<(u32, u32)>>,
    norms: Vec<f64>,
}

impl InvertedIndex {
    fn build(records: &[MetaphorRecord], idf: &IdfTable) -> Self {
        let mut idx = InvertedIndex::default();
        for (i, r) in records.iter().enumerate() {
            let tf = term_frequencies(&r.key);
            idx.norms.push(norm(&tf, idf));
            for (tok, c) in tf {
                idx.postings.entry(tok).or_default().push((i as u32, c));
            }
        }
        idx
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RetrievalConfig {
    /// Candidates produced by stage one.
    pub k: usize,
    /// Ranked candidates handed to policy and generation.
    pub top_j: usize,
}

impl Default for RetrievalConfig {
    fn default() -> Self {
        RetrievalConfig { k: 10, top_j: 3 }
    }
}

impl RetrievalConfig {
    pub fn new(k: usize, top_j: usize) -> Result<Self> {
        if k == 0 || top_j == 0 {
            return Err(Error::InvalidArgument(
                "retrieval k and top_j must be ≥ 1".into(),
            ));
        }
        Ok(RetrievalConfig { k, top_j })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedCandidate {
    pub record: usize,
    pub utterance: String,
    pub action: Option<Action>,
    pub tfidf_score: f64,
    /// Relevance in `[0, 1]`; equals the TF-IDF score until re-ranked.
    pub relevance: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetaphorDb {
    records: Vec<MetaphorRecord>,
    idf: IdfTable,
    index: InvertedIndex,
}

#[derive(Serialize, Deserialize)]
struct IndexFile {
    schema_version: u32,
    idf: IdfTable,
    records: Vec<MetaphorRecord>,
}

/// One record per user turn, keyed by the state before that turn.
pub fn build_metaphor_db(corpus: &Corpus) -> MetaphorDb {
    let mut records = Vec::new();
    for d in &corpus.dialogues {
        let mut state = DialogueState::default();
        let mut pending: Option<Action> = None;
        for (i, turn) in d.turns.iter().enumerate() {
            match turn.speaker {
                Speaker::User => {
                    records.push(MetaphorRecord {
                        key: state.to_key(),
                        value: text::strip_end_marker(&turn.utterance),
                        action: turn.action.clone(),
                        dialogue_id: d.id.clone(),
                        turn: i,
                    });
                    pending = Some(turn.action.clone().unwrap_or_default());
                }
                Speaker::System => {
                    let user = pending.take().unwrap_or_default();
                    state = compose_state(&state, user, turn.action.clone().unwrap_or_default());
                }
            }
        }
    }
    MetaphorDb::from_records(records)
}

impl MetaphorDb {
    pub fn from_records(records: Vec<MetaphorRecord>) -> Self {
        let idf = IdfTable::from_texts(records.iter().map(|r| r.key.as_str()));
        let index = InvertedIndex::build(&records, &idf);
        MetaphorDb {
            records,
            idf,
            index,
        }
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn records(&self) -> &[MetaphorRecord] {
        &self.records
    }

    pub fn idf(&self) -> &IdfTable {
        &self.idf
    }

    fn candidate(&self, record: usize, score: f64) -> RankedCandidate {
        let r = &self.records[record];
        RankedCandidate {
            record,
            utterance: r.value.clone(),
            action: r.action.clone(),
            tfidf_score: score,
            relevance: score.clamp(0.0, 1.0),
        }
    }

    /// Top-k records for a query string via the inverted index. Ties go to
    /// the lower record index.
    pub fn search(&self, query: &str, k: usize) -> Vec<RankedCandidate> {
        if self.records.is_empty() || k == 0 {
            return Vec::new();
        }
        let q = term_frequencies(query);
        let qn = norm(&q, &self.idf);
        // Dense accumulator; per-document sums still run in query-token
        // order, which keeps scores bitwise equal to `tfidf_score`.
        let mut acc = vec![0.0f64; self.records.len()];
        let mut touched: Vec<u32> = Vec::new();
        if qn > 0.0 {
            for (tok, qc) in &q {
                let Some(postings) = self.index.postings.get(tok) else {
                    continue;
                };
                let w = self.idf.idf(tok);
                let qw = f64::from(*qc) * w;
                for &(doc, kc) in postings {
                    let slot = &mut acc[doc as usize];
                    if *slot == 0.0 {
                        touched.push(doc);
                    }
                    *slot += qw * (f64::from(kc) * w);
                }
            }
        }
        let mut scored: Vec<(usize, f64)> = touched
            .into_iter()
            .map(|doc| {
                let kn = self.index.norms[doc as usize];
                let s = if kn == 0.0 {
                    0.0
                } else {
                    acc[doc as usize] / (qn * kn)
                };
                (doc as usize, s)
            })
            .filter(|(_, s)| *s > 0.0)
            .collect();
        sort_scored(&mut scored);
        scored.truncate(k);
        if scored.len() < k {
            // zero-score records fill the remainder in index order
            let have: std::collections::BTreeSet<usize> = scored.iter().map(|(d, _)| *d).collect();
            let fill: Vec<(usize, f64)> = (0..self.records.len())
                .filter(|d| !have.contains(d))
                .take(k - scored.len())
                .map(|d| (d, 0.0))
                .collect();
            scored.extend(fill);
        }
        scored
            .into_iter()
            .map(|(d, s)| self.candidate(d, s))
            .collect()
    }

    /// Reference implementation: score every record with [`tfidf_score`].
    pub fn search_exhaustive(&self, query: &str, k: usize) -> Vec<RankedCandidate> {
        let mut scored: Vec<(usize, f64)> = self
            .records
            .iter()
            .enumerate()
            .map(|(i, r)| (i, tfidf_score(query, &r.key, &self.idf)))
            .collect();
        sort_scored(&mut scored);
        scored.truncate(k);
        scored
            .into_iter()
            .map(|(d, s)| self.candidate(d, s))
            .collect()
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let body = serde_json::to_string(&IndexFile {
            schema_version: SCHEMA_VERSION,
            idf: self.idf.clone(),
            records: self.records.clone(),
        })?;
        fs::write(path, body).map_err(|e| Error::io(path, e))
    }

    /// Loads an index file, rebuilding postings and checking the embedded
    /// idf table against the records.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let raw = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let file: IndexFile = serde_json::from_str(&raw)?;
        if file.schema_version != SCHEMA_VERSION {
            return Err(Error::InvalidArgument(format!(
                "metaphor index schema_version {}",
                file.schema_version
            )));
        }
        let db = MetaphorDb::from_records(file.records);
        if db.idf != file.idf {
            return Err(Error::InvalidArgument(
                "metaphor index idf table does not match its records".into(),
            ));
        }
        Ok(db)
    }
}

fn sort_scored(scored: &mut [(usize, f64)]) {
    scored.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
}

/// Stage one: top-k candidates for the current state.
pub fn retrieve_candidates(
    state: &DialogueState,
    db: &MetaphorDb,
    cfg: &RetrievalConfig,
) -> Vec<RankedCandidate> {
    db.search(&state.to_key(), cfg.k)
}

/// Estimates `P(rel | candidate, context, state)`.
pub trait RelevanceScorer: Send + Sync {
    fn name(&self) -> &str;
    fn score(
        &self,
        context: &[Turn],
        state: &DialogueState,
        candidate: &RankedCandidate,
    ) -> Result<f64>;
}

/// Stage two: stable sort by relevance, descending. A failing scorer leaves
/// the TF-IDF order in place.
pub fn rank_candidates(
    ranker: &dyn RelevanceScorer,
    context: &[Turn],
    state: &DialogueState,
    candidates: Vec<RankedCandidate>,
) -> Vec<RankedCandidate> {
    let scores: Result<Vec<f64>> = candidates
        .iter()
        .map(|c| ranker.score(context, state, c))
        .collect();
    match scores {
        Ok(scores) => {
            let mut out: Vec<RankedCandidate> = candidates
                .into_iter()
                .zip(scores)
                .map(|(mut c, s)| {
                    c.relevance = s.clamp(0.0, 1.0);
                    c
                })
                .collect();
            out.sort_by(|a, b| b.relevance.total_cmp(&a.relevance));
            out
        }
        Err(e) => {
            log::warn!(
                "ranker `{}` failed ({e}); keeping tf-idf order",
                ranker.name()
            );
            let mut out = candidates;
            out.sort_by(|a, b| b.tfidf_score.total_cmp(&a.tfidf_score));
            out
        }
    }
}

/// `-[ln p_gold + Σ_{i≠gold} ln(1 − p_i)]` with gold label 1.0 and the
/// rest 0.0.
pub fn ranker_loss(relevances: &[f64], gold_index: usize) -> Result<f64> {
    if gold_index >= relevances.len() {
        return Err(Error::InvalidArgument(format!(
            "gold index {gold_index} out of range for {} candidates",
            relevances.len()
        )));
    }
    let mut loss = 0.0;
    for (i, &p) in relevances.iter().enumerate() {
        if !(p > 0.0 && p < 1.0) {
            return Err(Error::Probability { index: i, value: p });
        }
        loss -= if i == gold_index {
            p.ln()
        } else {
            (1.0 - p).ln()
        };
    }
    Ok(loss)
}

/// Ranker that keeps the stage-one score.
pub struct TfidfRanker;

impl RelevanceScorer for TfidfRanker {
    fn name(&self) -> &str {
        "tfidf"
    }

    fn score(&self, _: &[Turn], _: &DialogueState, c: &RankedCandidate) -> Result<f64> {
        Ok(c.tfidf_score)
    }
}

fn overlap(candidate: &[String], other: &[String]) -> f64 {
    if candidate.is_empty() {
        return 0.0;
    }
    let mut uniq: Vec<&String> = candidate.iter().collect();
    uniq.sort();
    uniq.dedup();
    let hits = uniq.iter().filter(|t| other.contains(t)).count();
    hits as f64 / uniq.len() as f64
}

/// Logistic relevance over lexical features: overlap with the recent
/// context, overlap with the serialized state, and the TF-IDF score.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogisticRanker {
    pub weights: [f64; 3],
    pub bias: f64,
    /// Context turns (most recent) used for the context-overlap feature.
    pub context_window: usize,
}

impl Default for LogisticRanker {
    fn default() -> Self {
        LogisticRanker {
            weights: [3.0, 1.0, 1.0],
            bias: -2.0,
            context_window: 2,
        }
    }
}

/// One supervised ranking example.
#[derive(Debug, Clone)]
pub struct RankingExample {
    pub context: Vec<Turn>,
    pub state: DialogueState,
    pub candidates: Vec<RankedCandidate>,
    pub gold: usize,
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

impl LogisticRanker {
    pub fn features(
        &self,
        context: &[Turn],
        state: &DialogueState,
        c: &RankedCandidate,
    ) -> [f64; 3] {
        let cand = text::tokenize(&c.utterance);
        let start = context.len().saturating_sub(self.context_window);
        let ctx: Vec<String> = context[start..]
            .iter()
            .flat_map(|t| text::tokenize(&t.utterance))
            .collect();
        let st = text::tokenize(&state.to_key());
        [overlap(&cand, &ctx), overlap(&cand, &st), c.tfidf_score]
    }

    fn logit(&self, x: &[f64; 3]) -> f64 {
        self.bias + self.weights.iter().zip(x).map(|(w, v)| w * v).sum::<f64>()
    }

    /// Batch gradient descent on the mean ranker loss; returns the loss per
    /// epoch.
    pub fn train(
        &mut self,
        examples: &[RankingExample],
        epochs: usize,
        learning_rate: f64,
    ) -> Vec<f64> {
        let data: Vec<(Vec<[f64; 3]>, usize)> = examples
            .iter()
            .map(|e| {
                (
                    e.candidates
                        .iter()
                        .map(|c| self.features(&e.context, &e.state, c))
                        .collect(),
                    e.gold,
                )
            })
            .collect();
        let mut history = Vec::with_capacity(epochs);
        for _ in 0..epochs {
            let mut grad = [0.0; 3];
            let mut grad_b = 0.0;
            let mut loss = 0.0;
            let mut n = 0.0;
            for (xs, gold) in &data {
                let probs: Vec<f64> = xs
                    .iter()
                    .map(|x| sigmoid(self.logit(x)).clamp(1e-12, 1.0 - 1e-12))
                    .collect();
                loss += ranker_loss(&probs, *gold).unwrap_or(0.0);
                for (i, (x, p)) in xs.iter().zip(&probs).enumerate() {
                    let y = if i == *gold { 1.0 } else { 0.0 };
                    let g = p - y;
                    for j in 0..3 {
                        grad[j] += g * x[j];
                    }
                    grad_b += g;
                    n += 1.0;
                }
            }
            if n == 0.0 {
                break;
            }
            for j in 0..3 {
                self.weights[j] -= learning_rate * grad[j] / n;
            }
            self.bias -= learning_rate * grad_b / n;
            history.push(loss / data.len() as f64);
        }
        history
    }
}

impl RelevanceScorer for LogisticRanker {
    fn name(&self) -> &str {
        "logistic"
    }

    fn score(&self, context: &[Turn], state: &DialogueState, c: &RankedCandidate) -> Result<f64> {
        Ok(sigmoid(self.logit(&self.features(context, state, c))))
    }
}

/// Builds ranking examples from a corpus: for each user turn, retrieve
/// candidates (excluding the turn's own record) and label the candidate
/// whose utterance equals the gold one. Turns whose gold utterance is not
/// retrieved are skipped.
pub fn ranking_examples(
    corpus: &Corpus,
    db: &MetaphorDb,
    cfg: &RetrievalConfig,
) -> Vec<RankingExample> {
    // Record index of each dialogue's first user turn, matching the order
    // of `build_metaphor_db`.
    let offsets: Vec<usize> = corpus
        .dialogues
        .iter()
        .scan(0usize, |acc, d| {
            let first = *acc;
            *acc += d.user_turns().count();
            Some(first)
        })
        .collect();
    corpus
        .dialogues
        .par_iter()
        .zip(offsets)
        .map(|(d, mut record)| {
            let mut out = Vec::new();
            let mut state = DialogueState::default();
            let mut pending: Option<Action> = None;
            for (i, turn) in d.turns.iter().enumerate() {
                match turn.speaker {
                    Speaker::User => {
                        let gold_text = text::strip_end_marker(&turn.utterance);
                        let cands: Vec<RankedCandidate> = db
                            .search(&state.to_key(), cfg.k + 1)
                            .into_iter()
                            .filter(|c| c.record != record)
                            .take(cfg.k)
                            .collect();
                        if let Some(gold) = cands.iter().position(|c| c.utterance == gold_text) {
                            out.push(RankingExample {
                                context: d.turns[..i].to_vec(),
                                state: state.clone(),
                                candidates: cands,
                                gold,
                            });
                        }
                        record += 1;
                        pending = Some(turn.action.clone().unwrap_or_default());
                    }
                    Speaker::System => {
                        let user = pending.take().unwrap_or_default();
                        state =
                            compose_state(&state, user, turn.action.clone().unwrap_or_default());
                    }
                }
            }
            out
        })
        .collect::<Vec<_>>()
        .into_iter()
        .flatten()
        .collect()
}

pub type RankerFactory = Box<dyn Fn() -> Box<dyn RelevanceScorer> + Send + Sync>;

pub fn ranker_registry() -> Registry<RankerFactory> {
    let mut r: Registry<RankerFactory> = Registry::new("ranker");
    r.register(
        "logistic",
        Box::new(|| Box::new(LogisticRanker::default()) as Box<dyn RelevanceScorer>),
    );
    r.register(
        "tfidf",
        Box::new(|| Box::new(TfidfRanker) as Box<dyn RelevanceScorer>),
    );
    r
}
