//! Acceptance suite. Prints one `[PASS]`/`[FAIL]` line per criterion and
//! exits non-zero if any fails. Pass a substring to run matching criteria
//! only, e.g. `cargo test --test acceptance -- retrieval`.

use std::collections::BTreeMap;
use std::path::Path;
use std::sync::{Arc, OnceLock};
use std::time::{Duration, Instant};

use metasim::corpus::{sequence_nll, Action, Corpus, ItemDatabase, Triple};
use metasim::harness::{self, RunConfig, LOGS_FILE, METRICS_FILE, REPORT_FILE};
use metasim::metaphor::{build_metaphor_db, MetaphorDb, MetaphorRecord, RetrievalConfig};
use metasim::metrics;
use metasim::policy::{policy_distillation_loss, upsample_training_turns, SatisfactionLabel};
use metasim::preference::{compute_goal_stats, init_preference, Preference};
use metasim::sampling::rng_from_seed;
use metasim::simulators::{simulator_registry, SimConfig, SimulatorKit};
use metasim::synth::{generate_corpus, ReferenceUser, SynthSpec};
use metasim::tester::{
    bootstrap_mean_ci, make_tester, run_tester, OracleEvaluator, RandomEvaluator, RankingMode,
    SimulatorEvaluator, TesterReport, VariantConfig,
};
use rand::Rng;

// Pinned tolerances and sizes.
const METRIC_FIXTURES: usize = 200;
const METRIC_TOL: f64 = 1e-9;
const BLEU_TOL: f64 = 1e-6;
const METRIC_BUDGET: Duration = Duration::from_secs(10);
const RETRIEVAL_RECORDS: usize = 5000;
const RETRIEVAL_QUERIES: usize = 1000;
const RETRIEVAL_K: usize = 10;
const RETRIEVAL_BUDGET: Duration = Duration::from_secs(30);
const SAMPLING_DRAWS: usize = 10_000;
const SAMPLING_L1: f64 = 0.05;
const UPSAMPLE_DRAWS: usize = 100_000;
const UPSAMPLE_FACTOR: f64 = 10.0;
const UPSAMPLE_TOL: f64 = 0.02;
const RANDOM_EPISODES: usize = 10_000;
const RANDOM_TOL: f64 = 0.05;
const CALIBRATION_BUDGET: Duration = Duration::from_secs(120);
const EPISODES: usize = 1000;
const BOOTSTRAP: usize = 1000;
const NO_PREFERENCE_RATIO: f64 = 0.10;
const SEED: u64 = 2024;
const TESTERS: [&str; 3] = ["context", "recommender", "domain"];

type Check = fn() -> Result<String, String>;

fn main() {
    let filters: Vec<String> = std::env::args()
        .skip(1)
        .filter(|a| !a.starts_with('-'))
        .collect();
    let checks: [(&str, Check); 8] = [
        ("metric_oracles", metric_oracles),
        ("retrieval_equivalence", retrieval_equivalence),
        ("sampling_fidelity", sampling_fidelity),
        ("tester_calibration", tester_calibration),
        ("tester_monotonicity", tester_monotonicity),
        ("simulator_ordering", simulator_ordering),
        ("ablation_direction", ablation_direction),
        ("determinism", determinism),
    ];
    let mut failed = 0;
    let mut ran = 0;
    for (name, check) in checks {
        if !filters.is_empty() && !filters.iter().any(|f| name.contains(f.as_str())) {
            continue;
        }
        ran += 1;
        let t = Instant::now();
        let outcome = std::panic::catch_unwind(check).unwrap_or_else(|e| {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(format!("panicked: {msg}"))
        });
        let secs = t.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("[PASS] {name} ({secs:.1}s): {detail}"),
            Err(detail) => {
                failed += 1;
                println!("[FAIL] {name} ({secs:.1}s): {detail}");
            }
        }
    }
    println!("acceptance: {} passed, {failed} failed", ran - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

// ---------------------------------------------------------------------------
// Shared fixtures

fn benchmark() -> &'static Corpus {
    static C: OnceLock<Corpus> = OnceLock::new();
    C.get_or_init(|| generate_corpus(&SynthSpec::default()).expect("synthetic corpus"))
}

fn kit() -> &'static SimulatorKit {
    static K: OnceLock<SimulatorKit> = OnceLock::new();
    K.get_or_init(|| SimulatorKit::train(benchmark(), Default::default()).expect("kit"))
}

/// Paired bootstrap CI of `mean(a - b)`.
fn paired_ci(a: &[f64], b: &[f64], seed: u64) -> (f64, (f64, f64)) {
    let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let mean = d.iter().sum::<f64>() / d.len() as f64;
    (
        mean,
        bootstrap_mean_ci(&d, BOOTSTRAP, 0.95, seed).expect("non-empty"),
    )
}

// ---------------------------------------------------------------------------
// Independent metric oracles

/// Lowercase, `[END]` removed, non-alphanumerics as separators.
fn oracle_tokens(s: &str) -> Vec<String> {
    let s = s.replace("[END]", " ");
    let mut out = Vec::new();
    let mut cur = String::new();
    for ch in s.chars() {
        if ch.is_alphanumeric() {
            cur.extend(ch.to_lowercase());
        } else if !cur.is_empty() {
            out.push(std::mem::take(&mut cur));
        }
    }
    if !cur.is_empty() {
        out.push(cur);
    }
    out
}

fn count_in(xs: &[String], x: &String) -> usize {
    xs.iter().filter(|y| *y == x).count()
}

fn oracle_f1(pred: &str, gold: &str) -> f64 {
    let (p, g) = (oracle_tokens(pred), oracle_tokens(gold));
    if p.is_empty() && g.is_empty() {
        return 1.0;
    }
    if p.is_empty() || g.is_empty() {
        return 0.0;
    }
    let mut seen: Vec<&String> = Vec::new();
    let mut common = 0;
    for t in &p {
        if seen.contains(&t) {
            continue;
        }
        seen.push(t);
        common += count_in(&p, t).min(count_in(&g, t));
    }
    if common == 0 {
        return 0.0;
    }
    let (pr, rc) = (
        common as f64 / p.len() as f64,
        common as f64 / g.len() as f64,
    );
    2.0 * pr * rc / (pr + rc)
}

fn grams(t: &[String], n: usize) -> Vec<Vec<String>> {
    if t.len() < n {
        return Vec::new();
    }
    (0..=t.len() - n).map(|i| t[i..i + n].to_vec()).collect()
}

fn oracle_distinct(texts: &[String], n: usize) -> f64 {
    let all: Vec<Vec<String>> = texts
        .iter()
        .flat_map(|t| grams(&oracle_tokens(t), n))
        .collect();
    if all.is_empty() {
        return 0.0;
    }
    let unique = (0..all.len())
        .filter(|&i| !all[..i].contains(&all[i]))
        .count();
    unique as f64 / all.len() as f64
}

fn oracle_slot_acc(pred: &str, values: &[String]) -> f64 {
    let p: Vec<char> = pred.to_lowercase().chars().collect();
    let all = values.iter().all(|v| {
        let v: Vec<char> = v.to_lowercase().chars().collect();
        v.is_empty()
            || (v.len() <= p.len() && (0..=p.len() - v.len()).any(|i| p[i..i + v.len()] == v[..]))
    });
    if all {
        1.0
    } else {
        0.0
    }
}

fn oracle_bleu(pred: &str, gold: &str) -> f64 {
    let (p, g) = (oracle_tokens(pred), oracle_tokens(gold));
    if p.is_empty() {
        return 0.0;
    }
    let mut log_sum = 0.0;
    for n in 1..=4 {
        let pg = grams(&p, n);
        let gg = grams(&g, n);
        let mut matched = 0usize;
        let mut done: Vec<&Vec<String>> = Vec::new();
        for x in &pg {
            if done.contains(&x) {
                continue;
            }
            done.push(x);
            let cp = pg.iter().filter(|y| *y == x).count();
            let cg = gg.iter().filter(|y| *y == x).count();
            matched += cp.min(cg);
        }
        let prec = if n == 1 {
            if matched == 0 {
                return 0.0;
            }
            matched as f64 / pg.len() as f64
        } else {
            (matched as f64 + 1.0) / (pg.len() as f64 + 1.0)
        };
        log_sum += prec.ln();
    }
    let bp = if p.len() >= g.len() {
        1.0
    } else {
        (1.0 - g.len() as f64 / p.len() as f64).exp()
    };
    bp * (log_sum / 4.0).exp()
}

fn oracle_success(actions: &[Action], goal: &Preference, db: &ItemDatabase) -> f64 {
    let mut domains: Vec<&str> = goal
        .entries
        .iter()
        .filter_map(|e| e.domain.as_deref())
        .collect();
    domains.sort();
    domains.dedup();
    if domains.is_empty() {
        return 0.0;
    }
    for d in domains {
        let table = db.table(d).unwrap();
        let name_slot = table.name_slot.clone().unwrap();
        let constraints: Vec<(&str, &str)> = goal
            .entries
            .iter()
            .filter(|e| e.domain.as_deref() == Some(d))
            .map(|e| (e.slot.as_str(), e.value.as_str()))
            .collect();
        let mut hit = false;
        for a in actions {
            for t in &a.triples {
                if t.act != "recommend" || t.slot.as_deref() != Some(name_slot.as_str()) {
                    continue;
                }
                let name = t.value.as_deref().unwrap_or("");
                for item in &table.items {
                    if item.attributes.get(&name_slot).map(String::as_str) != Some(name) {
                        continue;
                    }
                    if constraints.iter().all(|(s, v)| {
                        *v == "dontcare" || item.attributes.get(*s).map(String::as_str) == Some(*v)
                    }) {
                        hit = true;
                    }
                }
            }
        }
        if !hit {
            return 0.0;
        }
    }
    1.0
}

const WORDS: [&str; 14] = [
    "the", "Hotel", "cheap", "north", "a", "is", "postcode", "cb21ab", "please", "Free", "wifi",
    "parking", "4", "star",
];
const PUNCT: [&str; 6] = [" ", " ", ", ", "? ", ". ", "-"];

fn random_text<R: Rng>(rng: &mut R, max_len: usize) -> String {
    let n = rng.random_range(0..=max_len);
    let mut s = String::new();
    for _ in 0..n {
        s.push_str(WORDS[rng.random_range(0..WORDS.len())]);
        s.push_str(PUNCT[rng.random_range(0..PUNCT.len())]);
    }
    if rng.random_bool(0.1) {
        s.push_str("[END]");
    }
    s
}

fn metric_oracles() -> Result<String, String> {
    let t = Instant::now();
    let mut rng = rng_from_seed(SEED);
    for i in 0..METRIC_FIXTURES {
        let (p, g) = (random_text(&mut rng, 12), random_text(&mut rng, 12));
        let (a, b) = (metrics::f1(&p, &g), oracle_f1(&p, &g));
        ensure((a - b).abs() <= METRIC_TOL, || {
            format!("f1 fixture {i}: {a} vs oracle {b} ({p:?}, {g:?})")
        })?;
        let (a, b) = (metrics::bleu(&p, &g), oracle_bleu(&p, &g));
        ensure((a - b).abs() <= BLEU_TOL, || {
            format!("bleu fixture {i}: {a} vs oracle {b} ({p:?}, {g:?})")
        })?;
        let texts: Vec<String> = (0..rng.random_range(1..5))
            .map(|_| random_text(&mut rng, 8))
            .collect();
        let n = rng.random_range(1..=3);
        let (a, b) = (metrics::distinct_n(&texts, n), oracle_distinct(&texts, n));
        ensure((a - b).abs() <= METRIC_TOL, || {
            format!("distinct fixture {i}: {a} vs oracle {b}")
        })?;
        let values: Vec<String> = (0..rng.random_range(0..3))
            .map(|_| WORDS[rng.random_range(0..WORDS.len())].to_string())
            .collect();
        let (a, b) = (metrics::slot_acc(&p, &values), oracle_slot_acc(&p, &values));
        ensure(a == b, || {
            format!("slot_acc fixture {i}: {a} vs oracle {b}")
        })?;
    }

    // Success over random goals and recommendations in a generated DB.
    let corpus = generate_corpus(&SynthSpec {
        domains: 3,
        slots: 3,
        values_per_slot: 2,
        items: 12,
        dialogues: 60,
        ..SynthSpec::default()
    })
    .map_err(|e| e.to_string())?;
    let db = &corpus.db;
    let stats = compute_goal_stats(&corpus).map_err(|e| e.to_string())?;
    let mut hits = 0;
    for i in 0..METRIC_FIXTURES {
        let goal = init_preference(&stats, db, &mut rng).map_err(|e| e.to_string())?;
        let mut actions = Vec::new();
        for _ in 0..rng.random_range(0..4) {
            let domain = db
                .domains()
                .nth(rng.random_range(0..db.domains().count()))
                .unwrap()
                .to_string();
            let table = db.table(&domain).unwrap();
            let name_slot = table.name_slot.clone().unwrap();
            let item = &table.items[rng.random_range(0..table.items.len())];
            let act = if rng.random_bool(0.85) {
                "recommend"
            } else {
                "inform"
            };
            actions.push(Action::new(vec![Triple::full(
                act,
                &name_slot,
                item.get(&name_slot).unwrap(),
            )]));
        }
        let (a, b) = (
            metrics::success(actions.iter(), &goal, db),
            oracle_success(&actions, &goal, db),
        );
        ensure(a == b, || {
            format!("success fixture {i}: {a} vs oracle {b} for goal {goal}")
        })?;
        hits += a as usize;
    }
    ensure(hits > 0 && hits < METRIC_FIXTURES, || {
        format!("success fixtures degenerate: {hits} hits")
    })?;

    // Hand-computed anchors.
    ensure(
        (metrics::f1("postcode is cb21ab please", "the postcode is cb21ab") - 0.75).abs() < 1e-12,
        || "F1 anchor".into(),
    )?;
    let kl = policy_distillation_loss(&[1.0, 0.0], &[0.5, 0.5]).map_err(|e| e.to_string())?;
    ensure((kl - 2f64.ln()).abs() < 1e-12, || format!("KL anchor {kl}"))?;
    let nll = sequence_nll(&[0.5, 0.5]).map_err(|e| e.to_string())?;
    ensure((nll - 2.0 * 2f64.ln()).abs() < 1e-12, || {
        format!("NLL anchor {nll}")
    })?;
    let elapsed = t.elapsed();
    ensure(elapsed < METRIC_BUDGET, || format!("took {elapsed:?}"))?;
    Ok(format!(
        "{METRIC_FIXTURES} fixtures each for f1/bleu/distinct/slot_acc/success ({hits} successes); anchors F1=0.75, KL=ln2, NLL=2ln2"
    ))
}

// ---------------------------------------------------------------------------

fn retrieval_equivalence() -> Result<String, String> {
    let t = Instant::now();
    let mut rng = rng_from_seed(SEED + 1);
    let vocab: Vec<String> = (0..400).map(|i| format!("w{i}")).collect();
    // Skewed draws so common tokens collide and ties occur.
    let phrase = |rng: &mut metasim::sampling::SimRng, len: usize| -> String {
        (0..len)
            .map(|_| {
                let r: f64 = rng.random();
                vocab[((r * r * r) * vocab.len() as f64) as usize].clone()
            })
            .collect::<Vec<_>>()
            .join(" ")
    };
    let records: Vec<MetaphorRecord> = (0..RETRIEVAL_RECORDS)
        .map(|i| MetaphorRecord {
            key: phrase(&mut rng, 1 + i % 7),
            value: format!("utterance {i}"),
            action: None,
            dialogue_id: format!("d{}", i / 10),
            turn: i % 10,
        })
        .collect();
    let db = MetaphorDb::from_records(records);
    let mut ties = 0usize;
    for q in 0..RETRIEVAL_QUERIES {
        let query = phrase(&mut rng, 1 + q % 5);
        let fast = db.search(&query, RETRIEVAL_K);
        let slow = db.search_exhaustive(&query, RETRIEVAL_K);
        let key = |c: &Vec<metasim::metaphor::RankedCandidate>| -> Vec<(usize, u64)> {
            c.iter()
                .map(|x| (x.record, x.tfidf_score.to_bits()))
                .collect()
        };
        ensure(key(&fast) == key(&slow), || {
            format!("query {q} {query:?}: {:?} vs {:?}", key(&fast), key(&slow))
        })?;
        ensure(key(&fast) == key(&db.search(&query, RETRIEVAL_K)), || {
            format!("query {q} not repeatable")
        })?;
        for w in slow.windows(2) {
            if w[0].tfidf_score == w[1].tfidf_score {
                ties += 1;
                ensure(w[0].record < w[1].record, || {
                    format!("query {q}: tie not broken by index")
                })?;
            }
        }
    }
    let elapsed = t.elapsed();
    ensure(elapsed < RETRIEVAL_BUDGET, || format!("took {elapsed:?}"))?;
    Ok(format!(
        "{RETRIEVAL_QUERIES} queries over {RETRIEVAL_RECORDS} records, top-{RETRIEVAL_K} bitwise equal; {ties} tied neighbours ordered by index"
    ))
}

// ---------------------------------------------------------------------------

fn l1<K: Ord>(a: &BTreeMap<K, f64>, b: &BTreeMap<K, f64>) -> f64 {
    let mut keys: Vec<&K> = a.keys().chain(b.keys()).collect();
    keys.sort();
    keys.dedup();
    keys.iter()
        .map(|k| (a.get(k).unwrap_or(&0.0) - b.get(k).unwrap_or(&0.0)).abs())
        .sum()
}

fn sampling_fidelity() -> Result<String, String> {
    let corpus = benchmark();
    let stats = compute_goal_stats(corpus).map_err(|e| e.to_string())?;
    let mut rng = rng_from_seed(SEED + 2);
    let mut combos: BTreeMap<std::collections::BTreeSet<String>, f64> = BTreeMap::new();
    let mut counts: BTreeMap<usize, f64> = BTreeMap::new();
    let mut per_domain_total = 0.0;
    for _ in 0..SAMPLING_DRAWS {
        let g = init_preference(&stats, &corpus.db, &mut rng).map_err(|e| e.to_string())?;
        let mut per: BTreeMap<&str, usize> = BTreeMap::new();
        for e in g.goal_entries() {
            *per.entry(e.domain.as_deref().unwrap_or("")).or_default() += 1;
        }
        *combos
            .entry(per.keys().map(|d| d.to_string()).collect())
            .or_default() += 1.0;
        for k in per.values() {
            *counts.entry(*k).or_default() += 1.0;
            per_domain_total += 1.0;
        }
    }
    combos
        .values_mut()
        .for_each(|v| *v /= SAMPLING_DRAWS as f64);
    counts.values_mut().for_each(|v| *v /= per_domain_total);
    let l1_combo = l1(&combos, &stats.domain_combination_dist);
    let l1_count = l1(&counts, &stats.attribute_count_dist);
    ensure(l1_combo <= SAMPLING_L1, || {
        format!("domain-combination L1 {l1_combo:.4}")
    })?;
    ensure(l1_count <= SAMPLING_L1, || {
        format!("attribute-count L1 {l1_count:.4}")
    })?;

    // 70% Fair, 20% Unsatisfied, 10% Satisfied; expected non-fair share
    // with factor f is 0.3f / (0.7 + 0.3f).
    let labels: Vec<SatisfactionLabel> = (0..1000)
        .map(|i| match i % 10 {
            0..=6 => SatisfactionLabel::FAIR,
            7 | 8 => SatisfactionLabel::UNSATISFIED,
            _ => SatisfactionLabel::SATISFIED,
        })
        .collect();
    let sampler = upsample_training_turns(&labels, UPSAMPLE_FACTOR).map_err(|e| e.to_string())?;
    let non_fair = (0..UPSAMPLE_DRAWS)
        .filter(|_| labels[sampler.sample(&mut rng).unwrap()] != SatisfactionLabel::FAIR)
        .count() as f64
        / UPSAMPLE_DRAWS as f64;
    let expected = 0.3 * UPSAMPLE_FACTOR / (0.7 + 0.3 * UPSAMPLE_FACTOR);
    ensure((non_fair - expected).abs() <= UPSAMPLE_TOL, || {
        format!("non-fair fraction {non_fair:.4}, expected {expected:.4}")
    })?;
    Ok(format!(
        "L1 domain-combination {l1_combo:.4}, attribute-count {l1_count:.4} at {SAMPLING_DRAWS} draws; upsampled non-fair {non_fair:.4} vs {expected:.4}"
    ))
}

// ---------------------------------------------------------------------------

fn tester_calibration() -> Result<String, String> {
    let t = Instant::now();
    let corpus = benchmark();
    let tester = make_tester("context", VariantConfig::base()).map_err(|e| e.to_string())?;
    let systems = tester.instantiate(corpus, SEED);
    let oracle = run_tester(
        &OracleEvaluator,
        &tester,
        &systems,
        EPISODES,
        SEED,
        RankingMode::PerEpisode,
    )
    .map_err(|e| e.to_string())?;
    ensure(oracle.exact_distinct == 1.0, || {
        format!("oracle ED {}", oracle.exact_distinct)
    })?;
    let random = run_tester(
        &RandomEvaluator,
        &tester,
        &systems,
        RANDOM_EPISODES,
        SEED,
        RankingMode::PerEpisode,
    )
    .map_err(|e| e.to_string())?;
    let target = 1.0 / 6.0;
    ensure((random.exact_distinct - target).abs() <= RANDOM_TOL, || {
        format!("random ED {}", random.exact_distinct)
    })?;
    let elapsed = t.elapsed();
    ensure(elapsed < CALIBRATION_BUDGET, || format!("took {elapsed:?}"))?;
    Ok(format!(
        "oracle ED 1.0 over {EPISODES}; random ED {:.4} over {RANDOM_EPISODES} (target 1/6 ± {RANDOM_TOL})",
        random.exact_distinct
    ))
}

// ---------------------------------------------------------------------------

fn per_variant_success(report: &TesterReport) -> Vec<Vec<f64>> {
    let n = report.variants.len();
    (0..n)
        .map(|v| {
            report
                .rankings
                .iter()
                .map(|r| r.scores[v].success.unwrap_or(0.0))
                .collect()
        })
        .collect()
}

fn tester_monotonicity() -> Result<String, String> {
    let corpus = benchmark();
    let db = Arc::new(corpus.db.clone());
    let stats = compute_goal_stats(corpus).map_err(|e| e.to_string())?;
    let mut lines = Vec::new();
    let mut failures = Vec::new();
    for (ti, kind) in TESTERS.iter().enumerate() {
        let tester = make_tester(kind, VariantConfig::base()).map_err(|e| e.to_string())?;
        let systems = tester.instantiate(corpus, SEED);
        let ev = SimulatorEvaluator {
            simulator: Box::new(ReferenceUser::new(
                db.clone(),
                SimConfig::default().max_turns,
            )),
            goal_stats: stats.clone(),
            db: db.clone(),
        };
        let report = run_tester(
            &ev,
            &tester,
            &systems,
            EPISODES,
            SEED,
            RankingMode::PerEpisode,
        )
        .map_err(|e| e.to_string())?;
        ensure(report.failed_episodes == 0, || {
            format!("{kind}: {} failed episodes", report.failed_episodes)
        })?;
        let s = per_variant_success(&report);
        let means: Vec<String> = s
            .iter()
            .map(|v| format!("{:.3}", v.iter().sum::<f64>() / v.len() as f64))
            .collect();
        for v in 0..s.len() - 1 {
            let (d, (lo, hi)) = paired_ci(&s[v], &s[v + 1], SEED + ti as u64 * 10 + v as u64);
            if lo <= 0.0 {
                failures.push(format!(
                    "{kind} {}>{}: diff {d:.3} CI [{lo:.3}, {hi:.3}]",
                    v,
                    v + 1
                ));
            }
        }
        lines.push(format!("{kind} {}", means.join(">")));
    }
    ensure(failures.is_empty(), || failures.join("; "))?;
    Ok(format!(
        "reference-user Success, {EPISODES} episodes, paired 95% CIs > 0: {}",
        lines.join(", ")
    ))
}

// ---------------------------------------------------------------------------

fn tester_run(sim: &str, kind: &str) -> Result<TesterReport, String> {
    let kit = kit();
    let tester = make_tester(kind, VariantConfig::base()).map_err(|e| e.to_string())?;
    let systems = tester.instantiate(benchmark(), SEED);
    let simulator =
        (simulator_registry().get(sim).map_err(|e| e.to_string())?)(kit, SimConfig::default());
    let ev = SimulatorEvaluator {
        simulator,
        goal_stats: kit.goal_stats.clone(),
        db: kit.db.clone(),
    };
    run_tester(
        &ev,
        &tester,
        &systems,
        EPISODES,
        SEED,
        RankingMode::PerEpisode,
    )
    .map_err(|e| e.to_string())
}

fn episode_ed(r: &TesterReport) -> BTreeMap<u64, f64> {
    r.rankings
        .iter()
        .map(|x| x.episode)
        .zip(r.episode_ed.iter().copied())
        .collect()
}

fn metasim_reports() -> &'static Vec<(String, TesterReport)> {
    static R: OnceLock<Vec<(String, TesterReport)>> = OnceLock::new();
    R.get_or_init(|| {
        TESTERS
            .iter()
            .map(|k| {
                (
                    k.to_string(),
                    tester_run("metasim", k).expect("metasim run"),
                )
            })
            .collect()
    })
}

fn simulator_ordering() -> Result<String, String> {
    let mut lines = Vec::new();
    let mut failures = Vec::new();
    for (ti, (kind, meta)) in metasim_reports().iter().enumerate() {
        let agenda = tester_run("agenda", kind)?;
        let (m, a) = (episode_ed(meta), episode_ed(&agenda));
        let common: Vec<u64> = m.keys().filter(|k| a.contains_key(k)).copied().collect();
        let mv: Vec<f64> = common.iter().map(|k| m[k]).collect();
        let av: Vec<f64> = common.iter().map(|k| a[k]).collect();
        let (d, (lo, hi)) = paired_ci(&mv, &av, SEED + 100 + ti as u64);
        let line = format!(
            "{kind} MetaSim {:.3} vs Agenda {:.3} (diff {d:.3}, CI [{lo:.3}, {hi:.3}], n={})",
            meta.exact_distinct,
            agenda.exact_distinct,
            common.len()
        );
        if !(meta.exact_distinct > agenda.exact_distinct && lo > 0.0) {
            failures.push(line.clone());
        }
        lines.push(line);
    }
    ensure(failures.is_empty(), || failures.join("; "))?;
    Ok(format!(
        "mean ED over {EPISODES} episodes: {}",
        lines.join("; ")
    ))
}

// ---------------------------------------------------------------------------

fn ablation_direction() -> Result<String, String> {
    let corpus = benchmark();
    let metaphor = build_metaphor_db(corpus);
    let (n, with, without) =
        harness::heldout_action_accuracy(corpus, &metaphor, &RetrievalConfig::default(), 0.2)
            .map_err(|e| e.to_string())?;
    ensure(without <= with, || {
        format!("no-metaphor accuracy {without:.4} > full {with:.4}")
    })?;

    let full = &metasim_reports()[0].1;
    let nopref = tester_run("metasim-no-preference", "context")?;
    let full_success = full.variants[0].mean_success.unwrap_or(0.0);
    let nopref_success = nopref.variants[0].mean_success.unwrap_or(0.0);
    ensure(
        full_success > 0.0 && nopref_success < NO_PREFERENCE_RATIO * full_success,
        || format!("no-preference Success {nopref_success:.4} vs full {full_success:.4}"),
    )?;
    Ok(format!(
        "held-out action accuracy full {with:.4} >= no-metaphor {without:.4} (n={n}); base-system Success full {full_success:.3} vs no-preference {nopref_success:.3}"
    ))
}

// ---------------------------------------------------------------------------

fn determinism() -> Result<String, String> {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let corpus = generate_corpus(&SynthSpec {
        domains: 2,
        slots: 4,
        items: 30,
        dialogues: 200,
        ..SynthSpec::default()
    })
    .map_err(|e| e.to_string())?;
    let (path, _) = harness::write_corpus_split(&dir.path().join("data"), &corpus, 0)
        .map_err(|e| e.to_string())?;
    let mut checked = 0;
    for (tester, sim) in [
        (None, "metasim"),
        (Some("domain"), "metasim"),
        (Some("context"), "agenda"),
    ] {
        let run_in = |out: &Path| -> Result<(), String> {
            let mut cfg = RunConfig::new(&path, out, 77);
            cfg.episodes = 60;
            cfg.simulator = sim.into();
            cfg.tester = tester.map(|t| make_tester(t, VariantConfig::base()).unwrap().kind);
            harness::run(&cfg).map(|_| ()).map_err(|e| e.to_string())
        };
        let (a, b) = (
            dir.path().join(format!("a-{sim}-{tester:?}")),
            dir.path().join(format!("b-{sim}-{tester:?}")),
        );
        run_in(&a)?;
        run_in(&b)?;
        let mut files = vec![LOGS_FILE, METRICS_FILE];
        if tester.is_some() {
            files.push(REPORT_FILE);
        }
        for f in files {
            let (x, y) = (
                std::fs::read(a.join(f)).map_err(|e| e.to_string())?,
                std::fs::read(b.join(f)).map_err(|e| e.to_string())?,
            );
            ensure(!x.is_empty() && x == y, || {
                format!("{f} differs for {sim} {tester:?}")
            })?;
            checked += 1;
        }
    }
    Ok(format!(
        "{checked} artifacts byte-identical across reruns (simulate and test verbs)"
    ))
}
