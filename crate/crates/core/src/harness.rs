//! Run orchestration behind the CLI verbs: seeded configurations, the
//! `train` / `simulate` / `test` / `eval` drivers, and their artifacts.
//!
//! Every artifact carries `schema_version`, `seed` and `config_hash`, and
//! reruns of the same configuration are byte-identical: no timestamps,
//! ordered maps only, episode results collected in episode order.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::corpus::{io, Corpus, Speaker, SCHEMA_VERSION};
use crate::error::{Error, Result};
use crate::metaphor::{build_metaphor_db, MetaphorDb, RetrievalConfig};
use crate::metrics::{self, Mean, MetricReport, MetricValue};
use crate::policy::{
    action_accuracy, policy_examples, DecodeMode, PolicyOptions, StatisticalPolicy,
};
use crate::preference::compute_goal_stats;
use crate::sampling::derive_seed;
use crate::simulators::{
    rate_dialogue, simulator_registry, KitConfig, SessionLog, SimConfig, SimulatorKit,
    UserSimulator,
};
use crate::synth::ReferenceUser;
use crate::tester::{
    make_tester, run_tester, EpisodeRanking, Evaluator, RankingMode, RuleSystem,
    SimulatorEvaluator, SystemKnowledge, TesterKind, TesterReport, VariantConfig,
};

pub const CONFIG_FILE: &str = "config.json";
pub const LOGS_FILE: &str = "logs.jsonl";
pub const METRICS_FILE: &str = "metrics.json";
pub const REPORT_FILE: &str = "tester_report.json";
pub const METAPHOR_FILE: &str = "metaphor.idx";
pub const TRAIN_REPORT_FILE: &str = "train_report.json";

/// Distinct-n order used in run metrics.
pub const DISTINCT_N: usize = 3;

/// Seed stream for building tester systems, disjoint from episode paths.
const SYSTEMS_STREAM: u64 = u64::MAX - 1;

fn default_simulator() -> String {
    "metasim".into()
}

/// One `simulate` or `test` run. `tester: None` simulates against the
/// base reference system only.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub corpus: PathBuf,
    /// Defaults to the database file next to the corpus.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub db: Option<PathBuf>,
    /// Prebuilt index from `train`; rebuilt from the corpus when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub metaphor: Option<PathBuf>,
    #[serde(default = "default_simulator")]
    pub simulator: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tester: Option<TesterKind>,
    pub episodes: usize,
    pub seed: u64,
    pub max_turns: usize,
    pub output: PathBuf,
    pub decode: DecodeMode,
    #[serde(default)]
    pub ranking: RankingMode,
    pub base: VariantConfig,
    #[serde(default)]
    pub kit: KitConfig,
}

impl RunConfig {
    /// Defaults for everything except the mandatory seed and paths.
    pub fn new(corpus: impl Into<PathBuf>, output: impl Into<PathBuf>, seed: u64) -> Self {
        let sim = SimConfig::default();
        RunConfig {
            corpus: corpus.into(),
            db: None,
            metaphor: None,
            simulator: default_simulator(),
            tester: None,
            episodes: 1000,
            seed,
            max_turns: sim.max_turns,
            output: output.into(),
            decode: sim.decode,
            ranking: RankingMode::default(),
            base: VariantConfig::base(),
            kit: KitConfig::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.episodes == 0 {
            return Err(Error::InvalidArgument("episodes must be at least 1".into()));
        }
        if self.max_turns == 0 {
            return Err(Error::InvalidArgument(
                "max_turns must be at least 1".into(),
            ));
        }
        if let DecodeMode::Sample { temperature } = self.decode {
            if !(temperature > 0.0 && temperature.is_finite()) {
                return Err(Error::InvalidArgument(format!(
                    "temperature must be positive, got {temperature}"
                )));
            }
        }
        self.base.validate()
    }

    pub fn db_path(&self) -> PathBuf {
        self.db
            .clone()
            .unwrap_or_else(|| io::adjacent_db_path(&self.corpus))
    }

    pub fn sim_config(&self) -> SimConfig {
        SimConfig {
            max_turns: self.max_turns,
            decode: self.decode,
            ..SimConfig::default()
        }
    }

    /// SHA-256 over the input file contents and every setting that can
    /// change results. Paths themselves are not hashed, so moving the
    /// inputs or the output directory keeps the hash.
    pub fn config_hash(&self) -> Result<String> {
        #[derive(Serialize)]
        struct View<'a> {
            corpus: String,
            db: String,
            metaphor: Option<String>,
            simulator: &'a str,
            tester: Option<TesterKind>,
            episodes: usize,
            seed: u64,
            max_turns: usize,
            decode: DecodeMode,
            ranking: RankingMode,
            base: &'a VariantConfig,
            kit: &'a KitConfig,
        }
        let view = View {
            corpus: file_digest(&self.corpus)?,
            db: file_digest(&self.db_path())?,
            metaphor: self.metaphor.as_deref().map(file_digest).transpose()?,
            simulator: &self.simulator,
            tester: self.tester,
            episodes: self.episodes,
            seed: self.seed,
            max_turns: self.max_turns,
            decode: self.decode,
            ranking: self.ranking,
            base: &self.base,
            kit: &self.kit,
        };
        Ok(hex::encode(Sha256::digest(serde_json::to_vec(&view)?)))
    }
}

/// Hex SHA-256 of a file's bytes.
pub fn file_digest(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(hex::encode(Sha256::digest(bytes)))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut body = serde_json::to_string_pretty(value)?;
    body.push('\n');
    fs::write(path, body).map_err(|e| Error::io(path, e))
}

fn write_jsonl<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut body = String::new();
    for r in rows {
        body.push_str(&serde_json::to_string(r)?);
        body.push('\n');
    }
    fs::write(path, body).map_err(|e| Error::io(path, e))
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

/// Simulator by registry name; `reference` is the synthetic ground-truth
/// user, which needs only the database.
pub fn build_simulator(
    name: &str,
    kit: &SimulatorKit,
    cfg: SimConfig,
) -> Result<Box<dyn UserSimulator>> {
    if name == "reference" {
        return Ok(Box::new(ReferenceUser::new(kit.db.clone(), cfg.max_turns)));
    }
    Ok((simulator_registry().get(name)?)(kit, cfg))
}

pub fn simulator_names() -> Vec<String> {
    let mut names: Vec<String> = simulator_registry().names().map(str::to_string).collect();
    names.push("reference".into());
    names
}

fn load_kit(
    corpus: &Corpus,
    settings: &KitConfig,
    metaphor: Option<&Path>,
) -> Result<SimulatorKit> {
    let index = metaphor.map(MetaphorDb::load).transpose()?;
    SimulatorKit::train_with_metaphor(corpus, settings.clone(), index)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConfigFile {
    pub schema_version: u32,
    pub seed: u64,
    pub config_hash: String,
    pub config: RunConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsFile {
    pub schema_version: u32,
    pub seed: u64,
    pub config_hash: String,
    pub simulator: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub tester: Option<TesterKind>,
    pub episodes: usize,
    pub failed_episodes: usize,
    pub metrics: MetricReport,
}

#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub dir: PathBuf,
    pub config_hash: String,
    pub metrics: MetricsFile,
    pub report: Option<TesterReport>,
}

/// Wraps a simulator evaluator and keeps every rated session.
struct LoggingEvaluator<'a> {
    inner: &'a SimulatorEvaluator,
    config_hash: &'a str,
    labels: Vec<String>,
    logs: Mutex<BTreeMap<u64, Vec<SessionLog>>>,
}

impl Evaluator for LoggingEvaluator<'_> {
    fn name(&self) -> String {
        self.inner.name()
    }

    fn rate_episode(
        &self,
        systems: &[RuleSystem],
        episode: u64,
        seed: u64,
    ) -> Result<EpisodeRanking> {
        let (ranking, sessions) = self.inner.episode(systems, episode, seed)?;
        let sim = self.inner.simulator.name();
        let logs = sessions
            .iter()
            .zip(&self.labels)
            .map(|((s, r), label)| {
                SessionLog::from_session(sim, Some(label), s, Some(*r), self.config_hash)
            })
            .collect();
        self.logs
            .lock()
            .expect("log mutex poisoned")
            .insert(episode, logs);
        Ok(ranking)
    }
}

/// Success, turns and distinct-n over logged sessions.
fn session_metrics(logs: &[SessionLog]) -> MetricReport {
    let mut success = Mean::default();
    let mut turns = Mean::default();
    let mut user_texts = Vec::new();
    for log in logs {
        if let Some(r) = &log.rating {
            success.add(r.success);
            turns.add(r.turns as f64);
        }
        user_texts.extend(
            log.turns
                .iter()
                .filter(|t| t.speaker == Speaker::User)
                .map(|t| t.utterance.clone()),
        );
    }
    MetricReport {
        success_rate: success.value(),
        avg_turns: turns.value(),
        distinct_n: (!user_texts.is_empty()).then(|| MetricValue {
            value: metrics::distinct_n(&user_texts, DISTINCT_N),
            count: user_texts.len(),
        }),
        ..MetricReport::default()
    }
}

/// Executes a `simulate` (no tester) or `test` run and writes
/// `config.json`, `logs.jsonl`, `metrics.json` and, for tester runs,
/// `tester_report.json` into `config.output`.
pub fn run(config: &RunConfig) -> Result<RunOutcome> {
    config.validate()?;
    let config_hash = config.config_hash()?;
    let corpus = io::load_corpus_with_db(&config.corpus, config.db_path())?;
    log::info!("corpus: {} dialogues", corpus.dialogues.len());
    let kit = load_kit(&corpus, &config.kit, config.metaphor.as_deref())?;
    let simulator = build_simulator(&config.simulator, &kit, config.sim_config())?;
    let db = kit.db.clone();
    let evaluator = SimulatorEvaluator {
        simulator,
        goal_stats: compute_goal_stats(&corpus)?,
        db: db.clone(),
    };

    let (logs, failed, report) = match config.tester {
        Some(kind) => {
            let tester = make_tester(kind.name(), config.base.clone())?;
            let systems = tester.instantiate(&corpus, derive_seed(config.seed, &[SYSTEMS_STREAM]));
            let logging = LoggingEvaluator {
                inner: &evaluator,
                config_hash: &config_hash,
                labels: tester.labels(),
                logs: Mutex::new(BTreeMap::new()),
            };
            let mut report = run_tester(
                &logging,
                &tester,
                &systems,
                config.episodes,
                config.seed,
                config.ranking,
            )?;
            report.config_hash = config_hash.clone();
            let logs: Vec<SessionLog> = logging
                .logs
                .into_inner()
                .expect("log mutex poisoned")
                .into_values()
                .flatten()
                .collect();
            (logs, report.failed_episodes, Some(report))
        }
        None => {
            let system = RuleSystem::new(
                config.base.clone(),
                Arc::new(SystemKnowledge::from_corpus(&corpus)),
                db.clone(),
            );
            let label = config.base.label.clone();
            let results: Vec<Result<SessionLog>> = (0..config.episodes as u64)
                .into_par_iter()
                .map(|ep| {
                    let goal = evaluator.goal(ep, config.seed)?;
                    let session = evaluator.converse(&system, goal, ep, 0, config.seed)?;
                    let rating = rate_dialogue(&session, &db)?;
                    Ok(SessionLog::from_session(
                        evaluator.simulator.name(),
                        Some(&label),
                        &session,
                        Some(rating),
                        &config_hash,
                    ))
                })
                .collect();
            let mut logs = Vec::with_capacity(results.len());
            let mut failed = 0;
            for (ep, r) in results.into_iter().enumerate() {
                match r {
                    Ok(l) => logs.push(l),
                    Err(e) => {
                        log::warn!("episode {ep} failed: {e}");
                        failed += 1;
                    }
                }
            }
            if logs.is_empty() {
                return Err(Error::InvalidArgument(format!(
                    "all {} episodes failed",
                    config.episodes
                )));
            }
            (logs, failed, None)
        }
    };

    let mut metrics = session_metrics(&logs);
    if let Some(r) = &report {
        metrics.exact_distinct = Some(MetricValue {
            value: r.exact_distinct,
            count: r.episodes - r.failed_episodes,
        });
    }
    let metrics = MetricsFile {
        schema_version: SCHEMA_VERSION,
        seed: config.seed,
        config_hash: config_hash.clone(),
        simulator: evaluator.simulator.label(),
        tester: config.tester,
        episodes: config.episodes,
        failed_episodes: failed,
        metrics,
    };

    let dir = config.output.clone();
    create_dir(&dir)?;
    write_json(
        &dir.join(CONFIG_FILE),
        &ConfigFile {
            schema_version: SCHEMA_VERSION,
            seed: config.seed,
            config_hash: config_hash.clone(),
            config: config.clone(),
        },
    )?;
    write_jsonl(&dir.join(LOGS_FILE), &logs)?;
    write_json(&dir.join(METRICS_FILE), &metrics)?;
    if let Some(r) = &report {
        write_json(&dir.join(REPORT_FILE), r)?;
    }
    Ok(RunOutcome {
        dir,
        config_hash,
        metrics,
        report,
    })
}

/// Held-out split by dialogue: the last `fraction` of dialogues are
/// scored, the rest train the policy. Returns (test examples, accuracy
/// with metaphor conditioning, accuracy without).
pub fn heldout_action_accuracy(
    corpus: &Corpus,
    metaphor: &MetaphorDb,
    cfg: &RetrievalConfig,
    fraction: f64,
) -> Result<(usize, f64, f64)> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "holdout fraction must be in (0, 1), got {fraction}"
        )));
    }
    let n = corpus.dialogues.len();
    let cut = n - ((n as f64 * fraction).ceil() as usize).min(n);
    let test_ids: std::collections::BTreeSet<&str> = corpus.dialogues[cut..]
        .iter()
        .map(|d| d.id.as_str())
        .collect();
    let (test, train): (Vec<_>, Vec<_>) = policy_examples(corpus, Some(metaphor), cfg)
        .into_iter()
        .partition(|e| test_ids.contains(e.dialogue_id.as_str()));
    let acc = |use_metaphor| {
        let opts = PolicyOptions {
            use_metaphor,
            ..PolicyOptions::default()
        };
        action_accuracy(&StatisticalPolicy::train(&corpus.db, &train, opts), &test)
    };
    Ok((test.len(), acc(true)?, acc(false)?))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub corpus: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub db: Option<PathBuf>,
    pub output: PathBuf,
    pub holdout: f64,
    pub kit: KitConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub schema_version: u32,
    pub config_hash: String,
    pub dialogues: usize,
    pub metaphor_records: usize,
    pub policy_examples: usize,
    pub holdout: f64,
    pub heldout_examples: usize,
    pub heldout_accuracy: f64,
    pub heldout_accuracy_no_metaphor: f64,
}

/// Builds the metaphor index and scores the statistical policy on a
/// held-out split. Writes `metaphor.idx` and `train_report.json`.
pub fn train(config: &TrainConfig) -> Result<TrainReport> {
    let db_path = config
        .db
        .clone()
        .unwrap_or_else(|| io::adjacent_db_path(&config.corpus));
    let corpus = io::load_corpus_with_db(&config.corpus, &db_path)?;
    let config_hash = {
        let mut h = Sha256::new();
        h.update(file_digest(&config.corpus)?);
        h.update(file_digest(&db_path)?);
        h.update(serde_json::to_vec(&(config.holdout, &config.kit))?);
        hex::encode(h.finalize())
    };
    let metaphor = build_metaphor_db(&corpus);
    let (heldout_examples, with, without) =
        heldout_action_accuracy(&corpus, &metaphor, &config.kit.retrieval, config.holdout)?;
    let report = TrainReport {
        schema_version: SCHEMA_VERSION,
        config_hash,
        dialogues: corpus.dialogues.len(),
        metaphor_records: metaphor.len(),
        policy_examples: policy_examples(&corpus, None, &config.kit.retrieval).len(),
        holdout: config.holdout,
        heldout_examples,
        heldout_accuracy: with,
        heldout_accuracy_no_metaphor: without,
    };
    create_dir(&config.output)?;
    metaphor.save(config.output.join(METAPHOR_FILE))?;
    write_json(&config.output.join(TRAIN_REPORT_FILE), &report)?;
    Ok(report)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    /// Training corpus.
    pub corpus: PathBuf,
    /// Gold dialogues scored turn by turn; must share the database.
    pub test_corpus: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub db: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub metaphor: Option<PathBuf>,
    pub simulator: String,
    pub output: PathBuf,
    pub kit: KitConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub schema_version: u32,
    pub seed: u64,
    pub config_hash: String,
    pub simulator: String,
    pub action_accuracy: MetricValue,
    pub metrics: MetricReport,
}

/// Test-set metrics: for every gold user turn, the simulator predicts the
/// next action and utterance greedily from the gold history. Writes
/// `metrics.json`.
pub fn eval(config: &EvalConfig) -> Result<EvalReport> {
    let db_path = config
        .db
        .clone()
        .unwrap_or_else(|| io::adjacent_db_path(&config.corpus));
    let corpus = io::load_corpus_with_db(&config.corpus, &db_path)?;
    let test = io::load_corpus_with_db(&config.test_corpus, &db_path)?;
    let config_hash = {
        let mut h = Sha256::new();
        for p in [&config.corpus, &config.test_corpus, &db_path] {
            h.update(file_digest(p)?);
        }
        if let Some(m) = &config.metaphor {
            h.update(file_digest(m)?);
        }
        h.update(serde_json::to_vec(&(&config.simulator, &config.kit))?);
        hex::encode(h.finalize())
    };
    let kit = load_kit(&corpus, &config.kit, config.metaphor.as_deref())?;
    let sim = build_simulator(&config.simulator, &kit, SimConfig::default())?;
    let examples = policy_examples(&test, None, &config.kit.retrieval);
    if examples.is_empty() {
        return Err(Error::InvalidArgument(
            "test corpus has no annotated user turns".into(),
        ));
    }
    let predictions = examples
        .par_iter()
        .map(|ex| sim.predict_gold_turn(ex))
        .collect::<Result<Vec<_>>>()?;

    let (mut f1, mut slot) = (Mean::default(), Mean::default());
    let mut hits = 0usize;
    let mut pairs = Vec::with_capacity(examples.len());
    for (ex, (action, utt)) in examples.iter().zip(&predictions) {
        f1.add(metrics::f1(utt, &ex.gold_utterance));
        let gold_values: Vec<&str> = ex
            .gold
            .dialogue_triples()
            .filter_map(|t| t.value.as_deref())
            .collect();
        slot.add(metrics::slot_acc(utt, &gold_values));
        if *action == ex.gold {
            hits += 1;
        }
        pairs.push((utt.as_str(), ex.gold_utterance.as_str()));
    }
    let n = examples.len();
    let texts: Vec<&str> = predictions.iter().map(|(_, u)| u.as_str()).collect();
    let report = EvalReport {
        schema_version: SCHEMA_VERSION,
        seed: 0,
        config_hash,
        simulator: sim.label(),
        action_accuracy: MetricValue {
            value: hits as f64 / n as f64,
            count: n,
        },
        metrics: MetricReport {
            f1: f1.value(),
            slot_acc: slot.value(),
            bleu: Some(MetricValue {
                value: metrics::corpus_bleu(&pairs),
                count: n,
            }),
            distinct_n: Some(MetricValue {
                value: metrics::distinct_n(&texts, DISTINCT_N),
                count: n,
            }),
            ..MetricReport::default()
        },
    };
    create_dir(&config.output)?;
    write_json(&config.output.join(METRICS_FILE), &report)?;
    Ok(report)
}

/// Writes a generated corpus, holding out the last `test_dialogues` as
/// `test.jsonl` next to `corpus.jsonl`. Returns (corpus path, test path).
pub fn write_corpus_split(
    dir: &Path,
    corpus: &Corpus,
    test_dialogues: usize,
) -> Result<(PathBuf, Option<PathBuf>)> {
    if test_dialogues >= corpus.dialogues.len() {
        return Err(Error::InvalidArgument(format!(
            "test split of {test_dialogues} leaves no training dialogues out of {}",
            corpus.dialogues.len()
        )));
    }
    create_dir(dir)?;
    let cut = corpus.dialogues.len() - test_dialogues;
    let path = dir.join("corpus.jsonl");
    io::write_corpus(&path, &corpus.dialogues[..cut])?;
    io::write_item_db(io::adjacent_db_path(&path), &corpus.db)?;
    let test = (test_dialogues > 0)
        .then(|| {
            let p = dir.join("test.jsonl");
            io::write_corpus(&p, &corpus.dialogues[cut..]).map(|_| p)
        })
        .transpose()?;
    Ok((path, test))
}
