//! Command-line verbs. Paths can also come from `METASIM_*` environment
//! variables; every other setting is a flag.

use std::path::PathBuf;
use std::sync::Arc;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};
use metasim::corpus::io;
use metasim::harness::{self, EvalConfig, RunConfig, TrainConfig};
use metasim::policy::DecodeMode;
use metasim::service::AnnotationService;
use metasim::simulators::KitConfig;
use metasim::synth::{generate_corpus, SynthSpec};
use metasim::tester::{make_tester, RankingMode, TesterKind, VariantConfig};

use crate::api::{router, AppState};

#[derive(Debug, Parser)]
#[command(
    name = "metasim",
    version,
    about = "User simulation and tester-based evaluation for dialogue systems"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic corpus, item database and held-out test split.
    GenCorpus(GenCorpusArgs),
    /// Build the metaphor index and score the statistical policy.
    Train(TrainArgs),
    /// Run a simulator against the base reference system.
    Simulate(SimulateArgs),
    /// Run a tester: one simulator against every system variant.
    Test(TestArgs),
    /// Test-set metrics of a simulator on gold dialogues.
    Eval(EvalArgs),
    /// Serve the annotation HTTP API.
    Serve(ServeArgs),
}

#[derive(Debug, Args)]
pub struct GenCorpusArgs {
    /// Output directory for corpus.jsonl, corpus.db.json and test.jsonl.
    #[arg(long, env = "METASIM_OUTPUT")]
    pub output: PathBuf,
    #[arg(long, default_value_t = 3)]
    pub domains: usize,
    /// Informable slots per domain.
    #[arg(long, default_value_t = 5)]
    pub slots: usize,
    #[arg(long, default_value_t = 6)]
    pub values_per_slot: usize,
    /// Items per domain table.
    #[arg(long, default_value_t = 100)]
    pub items: usize,
    /// Training dialogues.
    #[arg(long, default_value_t = 1000)]
    pub dialogues: usize,
    /// Additional dialogues written to test.jsonl.
    #[arg(long, default_value_t = 200)]
    pub test_dialogues: usize,
    #[arg(long, default_value_t = 0.25)]
    pub multi_domain_rate: f64,
    /// Share of dialogues held with a degraded system.
    #[arg(long, default_value_t = 0.4)]
    pub degraded_rate: f64,
    #[arg(long, default_value_t = 20)]
    pub max_turns: usize,
    #[arg(long)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct CorpusArgs {
    /// Corpus JSONL.
    #[arg(long, env = "METASIM_CORPUS")]
    pub corpus: PathBuf,
    /// Item database; defaults to the `.db.json` file next to the corpus.
    #[arg(long, env = "METASIM_DB")]
    pub db: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct KitArgs {
    /// Retrieval depth of the first stage.
    #[arg(long, default_value_t = 10)]
    pub k: usize,
    /// Ranked candidates passed to the policy.
    #[arg(long, default_value_t = 3)]
    pub top_j: usize,
    /// Action predictor: `lexical` or `entity`.
    #[arg(long, default_value = "lexical")]
    pub predictor: String,
    /// Candidate ranker: `logistic` or `tfidf`.
    #[arg(long, default_value = "logistic")]
    pub ranker: String,
    #[arg(long, default_value_t = 50)]
    pub ranker_epochs: usize,
}

impl KitArgs {
    fn config(&self) -> anyhow::Result<KitConfig> {
        Ok(KitConfig {
            retrieval: metasim::metaphor::RetrievalConfig::new(self.k, self.top_j)?,
            predictor: self.predictor.clone(),
            ranker: self.ranker.clone(),
            ranker_epochs: self.ranker_epochs,
        })
    }
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub corpus: CorpusArgs,
    /// Output directory for metaphor.idx and train_report.json.
    #[arg(long, env = "METASIM_OUTPUT")]
    pub output: PathBuf,
    /// Fraction of dialogues held out for policy accuracy.
    #[arg(long, default_value_t = 0.2)]
    pub holdout: f64,
    #[command(flatten)]
    pub kit: KitArgs,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum Decode {
    Argmax,
    Sample,
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    #[command(flatten)]
    pub corpus: CorpusArgs,
    /// Prebuilt metaphor index from `train`.
    #[arg(long, env = "METASIM_METAPHOR")]
    pub metaphor: Option<PathBuf>,
    /// Output directory for config.json, logs.jsonl and metrics.json.
    #[arg(long, env = "METASIM_OUTPUT")]
    pub output: PathBuf,
    /// Simulator: metasim, metasim-no-metaphor, metasim-no-preference,
    /// metasim-no-policy, sl-template, agenda, agenda-gen or reference.
    #[arg(long, default_value = "metasim")]
    pub simulator: String,
    #[arg(long, default_value_t = 1000)]
    pub episodes: usize,
    #[arg(long)]
    pub seed: u64,
    #[arg(long, default_value_t = 20)]
    pub max_turns: usize,
    /// Policy decoding for the simulated user.
    #[arg(long, value_enum, default_value_t = Decode::Sample)]
    pub decode: Decode,
    /// Sampling temperature when `--decode sample`.
    #[arg(long, default_value_t = 1.0)]
    pub temperature: f64,
    /// Base variant: utterances of history the system keeps.
    #[arg(long, default_value_t = 15)]
    pub alpha: usize,
    /// Base variant: fraction of query constraints kept.
    #[arg(long, default_value_t = 1.0)]
    pub beta: f64,
    /// Base variant: fraction of vocabulary and templates kept.
    #[arg(long, default_value_t = 1.0)]
    pub gamma: f64,
    #[command(flatten)]
    pub kit: KitArgs,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum Kind {
    Context,
    Recommender,
    Domain,
}

impl From<Kind> for TesterKind {
    fn from(k: Kind) -> Self {
        match k {
            Kind::Context => TesterKind::Context,
            Kind::Recommender => TesterKind::Recommender,
            Kind::Domain => TesterKind::Domain,
        }
    }
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum Ranking {
    PerEpisode,
    AggregateThenRank,
}

#[derive(Debug, Args)]
pub struct TestArgs {
    #[command(flatten)]
    pub run: SimulateArgs,
    #[arg(long, value_enum)]
    pub tester: Kind,
    /// Per-episode ExactDistinct, or rank once on aggregate ratings.
    #[arg(long, value_enum, default_value_t = Ranking::PerEpisode)]
    pub ranking: Ranking,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[command(flatten)]
    pub corpus: CorpusArgs,
    /// Gold dialogues to score; shares the training database.
    #[arg(long, env = "METASIM_TEST_CORPUS")]
    pub test_corpus: PathBuf,
    #[arg(long, env = "METASIM_METAPHOR")]
    pub metaphor: Option<PathBuf>,
    #[arg(long, env = "METASIM_OUTPUT")]
    pub output: PathBuf,
    #[arg(long, default_value = "metasim")]
    pub simulator: String,
    #[command(flatten)]
    pub kit: KitArgs,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    #[command(flatten)]
    pub corpus: CorpusArgs,
    #[arg(long, value_enum)]
    pub tester: Kind,
    #[arg(long, default_value = "127.0.0.1")]
    pub host: String,
    #[arg(long, default_value_t = 8080)]
    pub port: u16,
    /// Seed for goals, session ids and blinded variant assignment.
    #[arg(long)]
    pub blinding_seed: u64,
    /// Token unlocking the unblinded aggregate; admin view disabled if unset.
    #[arg(long)]
    pub admin_token: Option<String>,
    /// Append-only JSONL file for annotation records.
    #[arg(long, env = "METASIM_ANNOTATIONS")]
    pub store: Option<PathBuf>,
}

fn run_config(a: &SimulateArgs) -> anyhow::Result<RunConfig> {
    let mut cfg = RunConfig::new(&a.corpus.corpus, &a.output, a.seed);
    cfg.db = a.corpus.db.clone();
    cfg.metaphor = a.metaphor.clone();
    cfg.simulator = a.simulator.clone();
    cfg.episodes = a.episodes;
    cfg.max_turns = a.max_turns;
    cfg.decode = match a.decode {
        Decode::Argmax => DecodeMode::Argmax,
        Decode::Sample => DecodeMode::Sample {
            temperature: a.temperature,
        },
    };
    cfg.base = VariantConfig {
        alpha: a.alpha,
        beta: a.beta,
        gamma: a.gamma,
        label: "base".into(),
    };
    cfg.kit = a.kit.config()?;
    Ok(cfg)
}

fn check_simulator(name: &str) -> anyhow::Result<()> {
    let names = harness::simulator_names();
    if !names.iter().any(|n| n == name) {
        bail!(
            "unknown simulator `{name}`; available: {}",
            names.join(", ")
        );
    }
    Ok(())
}

pub fn execute(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::GenCorpus(a) => {
            let spec = SynthSpec {
                domains: a.domains,
                slots: a.slots,
                values_per_slot: a.values_per_slot,
                items: a.items,
                dialogues: a.dialogues + a.test_dialogues,
                multi_domain_rate: a.multi_domain_rate,
                max_turns: a.max_turns,
                degraded_rate: a.degraded_rate,
                seed: a.seed,
                ..SynthSpec::default()
            };
            let corpus = generate_corpus(&spec)?;
            let (path, test) = harness::write_corpus_split(&a.output, &corpus, a.test_dialogues)?;
            println!("corpus: {} ({} dialogues)", path.display(), a.dialogues);
            println!("db:     {}", io::adjacent_db_path(&path).display());
            if let Some(t) = test {
                println!("test:   {} ({} dialogues)", t.display(), a.test_dialogues);
            }
        }
        Command::Train(a) => {
            let report = harness::train(&TrainConfig {
                corpus: a.corpus.corpus,
                db: a.corpus.db,
                output: a.output.clone(),
                holdout: a.holdout,
                kit: a.kit.config()?,
            })?;
            println!("{}", serde_json::to_string_pretty(&report)?);
            println!("wrote {}", a.output.display());
        }
        Command::Simulate(a) => {
            check_simulator(&a.simulator)?;
            let out = harness::run(&run_config(&a)?)?;
            print!("{}", out.metrics.metrics.to_table());
            println!("config_hash {}", out.config_hash);
            println!("wrote {}", out.dir.display());
        }
        Command::Test(a) => {
            check_simulator(&a.run.simulator)?;
            let mut cfg = run_config(&a.run)?;
            cfg.tester = Some(a.tester.into());
            cfg.ranking = match a.ranking {
                Ranking::PerEpisode => RankingMode::PerEpisode,
                Ranking::AggregateThenRank => RankingMode::AggregateThenRank,
            };
            let out = harness::run(&cfg)?;
            let report = out.report.as_ref().context("tester run without report")?;
            for v in &report.variants {
                println!(
                    "{:<14} success {:>6.2}  rating {:.3}  turns {:.2}",
                    v.label,
                    v.mean_success.unwrap_or(f64::NAN) * 100.0,
                    v.mean_rating,
                    v.mean_turns
                );
            }
            match report.exact_distinct_ci95 {
                Some((lo, hi)) => println!(
                    "ED {:.2} (95% CI {:.2}-{:.2})",
                    report.exact_distinct * 100.0,
                    lo * 100.0,
                    hi * 100.0
                ),
                None => println!("ED {:.2}", report.exact_distinct * 100.0),
            }
            println!("failed episodes {}", report.failed_episodes);
            println!("config_hash {}", out.config_hash);
            println!("wrote {}", out.dir.display());
        }
        Command::Eval(a) => {
            check_simulator(&a.simulator)?;
            let report = harness::eval(&EvalConfig {
                corpus: a.corpus.corpus,
                test_corpus: a.test_corpus,
                db: a.corpus.db,
                metaphor: a.metaphor,
                simulator: a.simulator,
                output: a.output.clone(),
                kit: a.kit.config()?,
            })?;
            print!("{}", report.metrics.to_table());
            println!(
                "action accuracy {:.2} (n={})",
                report.action_accuracy.value * 100.0,
                report.action_accuracy.count
            );
            println!("wrote {}", a.output.display());
        }
        Command::Serve(a) => serve(a)?,
    }
    Ok(())
}

fn serve(a: ServeArgs) -> anyhow::Result<()> {
    let db = a
        .corpus
        .db
        .clone()
        .unwrap_or_else(|| io::adjacent_db_path(&a.corpus.corpus));
    let corpus = io::load_corpus_with_db(&a.corpus.corpus, db)?;
    let kind: TesterKind = a.tester.into();
    let tester = make_tester(kind.name(), VariantConfig::base())?;
    let service = AnnotationService::new(tester, &corpus, a.blinding_seed, a.store.clone())?;
    let state = AppState {
        service: Arc::new(service),
        admin_token: a.admin_token,
    };
    let addr = format!("{}:{}", a.host, a.port);
    tokio::runtime::Runtime::new()?.block_on(async move {
        let listener = tokio::net::TcpListener::bind(&addr)
            .await
            .with_context(|| format!("binding {addr}"))?;
        log::info!("serving on http://{}", listener.local_addr()?);
        println!("listening on http://{}", listener.local_addr()?);
        axum::serve(listener, router(state))
            .with_graceful_shutdown(async {
                let _ = tokio::signal::ctrl_c().await;
            })
            .await?;
        Ok(())
    })
}
