//! Metric kernels for test-set and interaction evaluation. All text
//! metrics strip `[END]` and use [`text::tokenize`].

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::corpus::{Action, ItemDatabase};
use crate::preference::Preference;
use crate::text;

fn tokens(s: &str) -> Vec<String> {
    text::tokenize(&text::strip_end_marker(s))
}

fn bag(tokens: &[String]) -> BTreeMap<&str, usize> {
    let mut m = BTreeMap::new();
    for t in tokens {
        *m.entry(t.as_str()).or_default() += 1;
    }
    m
}

/// Unigram-bag F1. Both empty → 1, one empty → 0.
pub fn f1(pred: &str, gold: &str) -> f64 {
    let (p, g) = (tokens(pred), tokens(gold));
    match (p.is_empty(), g.is_empty()) {
        (true, true) => return 1.0,
        (true, false) | (false, true) => return 0.0,
        _ => {}
    }
    let gb = bag(&g);
    let common: usize = bag(&p)
        .iter()
        .map(|(t, c)| (*c).min(gb.get(t).copied().unwrap_or(0)))
        .sum();
    if common == 0 {
        return 0.0;
    }
    let precision = common as f64 / p.len() as f64;
    let recall = common as f64 / g.len() as f64;
    2.0 * precision * recall / (precision + recall)
}

/// Distinct n-grams over all n-grams, pooled across `texts`; 0 when there
/// are none.
pub fn distinct_n<S: AsRef<str>>(texts: &[S], n: usize) -> f64 {
    if n == 0 {
        return 0.0;
    }
    let mut total = 0usize;
    let mut unique: BTreeSet<Vec<String>> = BTreeSet::new();
    for t in texts {
        let toks = tokens(t.as_ref());
        for g in text::ngrams(&toks, n) {
            total += 1;
            unique.insert(g.to_vec());
        }
    }
    if total == 0 {
        0.0
    } else {
        unique.len() as f64 / total as f64
    }
}

/// 1 when every gold value appears (case-insensitively) in the prediction.
pub fn slot_acc<S: AsRef<str>>(pred: &str, gold_values: &[S]) -> f64 {
    let p = pred.to_lowercase();
    if gold_values
        .iter()
        .all(|v| p.contains(&v.as_ref().to_lowercase()))
    {
        1.0
    } else {
        0.0
    }
}

/// Item names recommended in `actions`, with their domains.
pub fn recommended_items<'a>(
    actions: impl IntoIterator<Item = &'a Action>,
    db: &ItemDatabase,
) -> Vec<(String, String)> {
    let mut out = Vec::new();
    for a in actions {
        for (slot, name) in a.slot_values("recommend") {
            if db.is_name_slot(slot) {
                if let Some(d) = db.slot_domain(slot) {
                    out.push((d.to_string(), name.to_string()));
                }
            }
        }
    }
    out
}

/// 1 when, for every goal domain, some recommended item of that domain
/// meets all of the domain's constraints in the database.
pub fn success<'a>(
    system_actions: impl IntoIterator<Item = &'a Action>,
    goal: &Preference,
    db: &ItemDatabase,
) -> f64 {
    let recs = recommended_items(system_actions, db);
    let domains = goal.goal_domains();
    if domains.is_empty() {
        return 0.0;
    }
    let ok = domains.iter().all(|d| {
        let constraints = goal.constraints(d);
        let Some(table) = db.table(d) else {
            return false;
        };
        recs.iter().filter(|(rd, _)| rd == d).any(|(_, name)| {
            table.find_by_name(name).is_some_and(|item| {
                item.matches(constraints.iter().map(|(s, v)| (s.as_str(), v.as_str())))
            })
        })
    });
    if ok {
        1.0
    } else {
        0.0
    }
}

fn ngram_counts(tokens: &[String], n: usize) -> BTreeMap<&[String], usize> {
    let mut m = BTreeMap::new();
    for g in text::ngrams(tokens, n) {
        *m.entry(g).or_default() += 1;
    }
    m
}

/// Clipped matches and candidate n-gram totals for orders 1..=4.
fn bleu_stats(pred: &[String], gold: &[String]) -> [(usize, usize); 4] {
    std::array::from_fn(|i| {
        let n = i + 1;
        let g = ngram_counts(gold, n);
        let p = ngram_counts(pred, n);
        let matched = p
            .iter()
            .map(|(k, c)| (*c).min(g.get(k).copied().unwrap_or(0)))
            .sum();
        (matched, p.values().sum())
    })
}

fn bleu_from(stats: &[(usize, usize); 4], pred_len: usize, gold_len: usize) -> f64 {
    if pred_len == 0 || stats[0].0 == 0 {
        return 0.0;
    }
    let mut log_p = (stats[0].0 as f64 / stats[0].1 as f64).ln();
    for &(m, c) in &stats[1..] {
        log_p += ((m as f64 + 1.0) / (c as f64 + 1.0)).ln();
    }
    let bp = if pred_len >= gold_len {
        1.0
    } else {
        (1.0 - gold_len as f64 / pred_len as f64).exp()
    };
    bp * (log_p / 4.0).exp()
}

/// BLEU-4 with uniform weights, brevity penalty, and add-one smoothing on
/// the 2- to 4-gram precisions. Empty prediction → 0.
pub fn bleu(pred: &str, gold: &str) -> f64 {
    let (p, g) = (tokens(pred), tokens(gold));
    bleu_from(&bleu_stats(&p, &g), p.len(), g.len())
}

/// Corpus-level BLEU-4: n-gram statistics and lengths summed over pairs.
pub fn corpus_bleu<S: AsRef<str>>(pairs: &[(S, S)]) -> f64 {
    let mut total = [(0usize, 0usize); 4];
    let (mut pl, mut gl) = (0, 0);
    for (pred, gold) in pairs {
        let (p, g) = (tokens(pred.as_ref()), tokens(gold.as_ref()));
        for (t, s) in total.iter_mut().zip(bleu_stats(&p, &g)) {
            t.0 += s.0;
            t.1 += s.1;
        }
        pl += p.len();
        gl += g.len();
    }
    bleu_from(&total, pl, gl)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricValue {
    pub value: f64,
    pub count: usize,
}

/// Running mean.
#[derive(Debug, Clone, Copy, Default)]
pub struct Mean {
    sum: f64,
    n: usize,
}

impl Mean {
    pub fn add(&mut self, x: f64) {
        self.sum += x;
        self.n += 1;
    }

    pub fn value(&self) -> Option<MetricValue> {
        (self.n > 0).then(|| MetricValue {
            value: self.sum / self.n as f64,
            count: self.n,
        })
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub f1: Option<MetricValue>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub distinct_n: Option<MetricValue>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub slot_acc: Option<MetricValue>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub success_rate: Option<MetricValue>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub bleu: Option<MetricValue>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub avg_turns: Option<MetricValue>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub exact_distinct: Option<MetricValue>,
}

impl MetricReport {
    fn rows(&self) -> Vec<(&'static str, Option<MetricValue>, bool)> {
        vec![
            ("F1", self.f1, true),
            ("Dist", self.distinct_n, true),
            ("SlotAcc", self.slot_acc, true),
            ("Success", self.success_rate, true),
            ("BLEU", self.bleu, true),
            ("Turns", self.avg_turns, false),
            ("ED", self.exact_distinct, true),
        ]
    }

    /// Plain-text table; rates are shown ×100.
    pub fn to_table(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "{:<10} {:>8} {:>8}", "metric", "value", "n");
        for (name, v, pct) in self.rows() {
            if let Some(v) = v {
                let shown = if pct { v.value * 100.0 } else { v.value };
                let _ = writeln!(out, "{name:<10} {shown:>8.2} {:>8}", v.count);
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn f1_anchors() {
        assert_eq!(f1("a b c", "a b c"), 1.0);
        assert!((f1("postcode is cb21ab please", "the postcode is cb21ab") - 0.75).abs() < 1e-12);
        assert_eq!(f1("a b", "c d"), 0.0);
        assert_eq!(f1("", ""), 1.0);
        assert_eq!(f1("[END]", "x"), 0.0);
    }

    #[test]
    fn distinct_anchors() {
        assert_eq!(distinct_n(&["a b c d"], 3), 1.0);
        assert_eq!(distinct_n(&["a b c d", "a b c d"], 3), 0.5);
        assert_eq!(distinct_n(&["a b"], 3), 0.0);
    }

    #[test]
    fn slot_acc_anchors() {
        let none: [&str; 0] = [];
        assert_eq!(slot_acc("anything", &none), 1.0);
        assert_eq!(
            slot_acc("Cheap place in the North", &["cheap", "north"]),
            1.0
        );
        assert_eq!(slot_acc("cheap place", &["cheap", "north"]), 0.0);
    }

    #[test]
    fn bleu_anchors() {
        assert!((bleu("the cat sat on the mat", "the cat sat on the mat") - 1.0).abs() < 1e-12);
        assert_eq!(bleu("", "the cat"), 0.0);
        // one unigram, full unigram precision, smoothed higher orders = 1,
        // brevity penalty exp(1 - 2/1)
        assert!((bleu("the", "the cat") - (-1f64).exp()).abs() < 1e-9);
        assert!((corpus_bleu(&[("a b c d", "a b c d")]) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn report_table() {
        let r = MetricReport {
            success_rate: Some(MetricValue {
                value: 0.5,
                count: 4,
            }),
            avg_turns: Some(MetricValue {
                value: 6.0,
                count: 4,
            }),
            ..MetricReport::default()
        };
        let t = r.to_table();
        assert!(t.contains("Success       50.00        4"), "{t}");
        assert!(t.contains("Turns          6.00"), "{t}");
    }
}
