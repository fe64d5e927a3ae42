use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::net::{IpAddr, SocketAddr};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;
use std::time::Instant;

use clap::{Parser, Subcommand, ValueEnum};
use serde::Serialize;
use serde_json::json;

use seqmatch::checkpoint::Checkpoint;
use seqmatch::config::{TrainingConfig, Variant};
use seqmatch::data::dataset::{prepare, read_test, read_train, write_dataset, PrepareRules};
use seqmatch::data::synthetic::{generate, PlantedPattern, SyntheticConfig};
use seqmatch::data::{read_events, write_events, FilterRules, HistoryRules, SessionRules};
use seqmatch::eval::evaluate;
use seqmatch::optim::AdamState;
use seqmatch::recommend::{RecommendRequest, RecommendResponse, Recommender};
use seqmatch::train::Trainer;

const SEED_ENV: &str = "SEQMATCH_SEED";

#[derive(Parser)]
#[command(name = "seqmatch", version, about = "Sequential deep matching: prepare, train, evaluate and serve")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Pattern {
    Transitions,
    LongTermPreference,
}

#[derive(Subcommand)]
enum Command {
    /// Write a seeded synthetic event log with a planted signal.
    Generate {
        #[arg(long)]
        out: PathBuf,
        /// Where to write the planted ground truth (JSON).
        #[arg(long)]
        manifest: Option<PathBuf>,
        /// Defaults to $SEQMATCH_SEED, then 0.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value_t = 500)]
        users: usize,
        #[arg(long, default_value_t = 200)]
        items: usize,
        #[arg(long, default_value_t = 20)]
        clusters: usize,
        #[arg(long, default_value_t = 50)]
        events_per_user: usize,
        #[arg(long, default_value_t = 3)]
        min_session_len: usize,
        #[arg(long, default_value_t = 4)]
        max_session_len: usize,
        #[arg(long, default_value_t = 8)]
        days: u32,
        #[arg(long, default_value_t = 0.1)]
        noise_rate: f64,
        #[arg(long, value_enum, default_value = "transitions")]
        pattern: Pattern,
        #[arg(long, default_value_t = 8)]
        hub_items: usize,
        #[arg(long, default_value_t = 0.0)]
        explore_rate: f64,
    },
    /// Filter, sessionize and split an event log into train/ and test/.
    Prepare {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
        #[arg(long, default_value_t = 600)]
        gap_seconds: i64,
        #[arg(long, default_value_t = 50)]
        max_session_len: usize,
        #[arg(long, default_value_t = 7)]
        lookback_days: u32,
        #[arg(long, default_value_t = 20)]
        longterm_cap: usize,
        #[arg(long, default_value_t = 5)]
        min_item_count: usize,
        #[arg(long, default_value_t = 1000)]
        spam_threshold: usize,
        #[arg(long, default_value_t = 2)]
        min_session_len: usize,
        #[arg(long, default_value_t = 0.25)]
        test_prefix: f64,
        /// First test timestamp; defaults to the start of the last day.
        #[arg(long)]
        split_ts: Option<i64>,
    },
    /// Train a model and write a checkpoint.
    Train {
        #[arg(long)]
        data: PathBuf,
        /// TOML file with TrainingConfig fields; defaults apply otherwise.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Apply a named variant's switches on top of the config.
        #[arg(long)]
        variant: Option<Variant>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        out: PathBuf,
        /// Per-epoch metrics log; defaults to <out>.metrics.jsonl.
        #[arg(long)]
        metrics: Option<PathBuf>,
        /// Continue from a checkpoint that carries optimizer state.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Compute HitRate/Precision/Recall/F1 at each K.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        test: PathBuf,
        #[arg(long = "k", default_values_t = [100, 20])]
        k: Vec<usize>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Rank items for one request file.
    Recommend {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Request JSON (same format as the service).
        #[arg(long)]
        history: PathBuf,
        #[arg(long)]
        n: Option<usize>,
    },
    /// Dump per-head attention weights for the latest session of a request.
    InspectAttention {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        session: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Serve POST /recommend and GET /healthz.
    Serve {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value_t = 8080)]
        port: u16,
        #[arg(long, default_value = "127.0.0.1")]
        host: IpAddr,
    },
}

#[derive(Debug)]
struct Failure {
    kind: &'static str,
    message: String,
}

impl From<seqmatch::Error> for Failure {
    fn from(e: seqmatch::Error) -> Self {
        Failure {
            kind: e.kind(),
            message: e.to_string(),
        }
    }
}

impl From<serde_json::Error> for Failure {
    fn from(e: serde_json::Error) -> Self {
        Failure {
            kind: "json",
            message: e.to_string(),
        }
    }
}

fn io_failure(path: &Path, e: std::io::Error) -> Failure {
    Failure {
        kind: "io",
        message: format!("{}: {e}", path.display()),
    }
}

fn fail(kind: &'static str, message: impl Into<String>) -> Failure {
    Failure {
        kind,
        message: message.into(),
    }
}

type Outcome = Result<(), Failure>;

fn env_seed() -> Result<Option<u64>, Failure> {
    match std::env::var(SEED_ENV) {
        Ok(v) => v
            .trim()
            .parse()
            .map(Some)
            .map_err(|_| fail("config", format!("{SEED_ENV} must be an unsigned integer, got {v:?}"))),
        Err(_) => Ok(None),
    }
}

fn create(path: &Path) -> Result<BufWriter<File>, Failure> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| io_failure(dir, e))?;
    }
    File::create(path).map(BufWriter::new).map_err(|e| io_failure(path, e))
}

/// Pretty JSON to `path`, or to stdout.
fn emit<T: Serialize>(value: &T, path: Option<&Path>) -> Outcome {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    match path {
        Some(p) => {
            let mut w = create(p)?;
            w.write_all(text.as_bytes()).and_then(|_| w.flush()).map_err(|e| io_failure(p, e))
        }
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn read_request(path: &Path) -> Result<RecommendRequest, Failure> {
    let file = File::open(path).map_err(|e| io_failure(path, e))?;
    Ok(serde_json::from_reader(BufReader::new(file))?)
}

fn load_recommender(path: &Path) -> Result<Recommender, Failure> {
    Ok(Recommender::from_checkpoint(Checkpoint::load(path)?))
}

fn run(cli: Cli) -> Outcome {
    match cli.command {
        Command::Generate {
            out,
            manifest,
            seed,
            users,
            items,
            clusters,
            events_per_user,
            min_session_len,
            max_session_len,
            days,
            noise_rate,
            pattern,
            hub_items,
            explore_rate,
        } => {
            let seed = match seed {
                Some(s) => s,
                None => env_seed()?.unwrap_or(0),
            };
            let config = SyntheticConfig {
                users,
                items,
                clusters,
                events_per_user,
                min_session_len,
                max_session_len,
                days,
                noise_rate,
                pattern: match pattern {
                    Pattern::Transitions => PlantedPattern::Transitions,
                    Pattern::LongTermPreference => PlantedPattern::LongTermPreference { hub_items, explore_rate },
                },
                ..SyntheticConfig::default()
            };
            let (events, planted) = generate(&config, seed)?;
            let mut w = create(&out)?;
            write_events(&mut w, &events).and_then(|_| w.flush()).map_err(|e| io_failure(&out, e))?;
            if let Some(path) = manifest {
                emit(&planted, Some(&path))?;
            }
            emit(&json!({ "events": events.len(), "seed": seed }), None)
        }

        Command::Prepare {
            input,
            output,
            gap_seconds,
            max_session_len,
            lookback_days,
            longterm_cap,
            min_item_count,
            spam_threshold,
            min_session_len,
            test_prefix,
            split_ts,
        } => {
            let rules = PrepareRules {
                session: SessionRules {
                    gap_seconds,
                    max_len: max_session_len,
                },
                history: HistoryRules {
                    lookback_days,
                    longterm_cap,
                },
                filter: FilterRules {
                    min_item_count,
                    spam_threshold,
                    min_session_len,
                },
                test_prefix,
            };
            let file = File::open(&input).map_err(|e| io_failure(&input, e))?;
            let events = read_events(BufReader::new(file))?;
            let data = prepare(&events, &rules, split_ts)?;
            write_dataset(&output, &data, &rules)?;
            emit(
                &json!({
                    "events": events.len(),
                    "split_ts": data.split_ts,
                    "train_histories": data.train.len(),
                    "test_cases": data.test.len(),
                }),
                None,
            )
        }

        Command::Train {
            data,
            config,
            variant,
            epochs,
            out,
            metrics,
            resume,
        } => {
            let (header, histories) = read_train(&data)?;
            let mut trainer = match resume {
                Some(path) => {
                    let ck = Checkpoint::load(&path)?;
                    let adam = match ck.adam {
                        Some(a) => a,
                        None => AdamState::new(ck.model.config().adam(), ck.model.params()),
                    };
                    Trainer::resume(ck.model, adam, ck.epoch, &histories)?
                }
                None => {
                    let mut c = match config {
                        Some(p) => TrainingConfig::load(&p)?,
                        None => TrainingConfig::default(),
                    };
                    if let Some(v) = variant {
                        c.apply_variant(v);
                    }
                    if let Some(seed) = env_seed()? {
                        c.seed = seed;
                    }
                    Trainer::from_histories(c, &histories)?
                }
            };
            let target = epochs.unwrap_or(trainer.model().config().epochs);
            let remaining = target.saturating_sub(trainer.epoch());
            let metrics_path = metrics.unwrap_or_else(|| {
                let mut name = out.clone().into_os_string();
                name.push(".metrics.jsonl");
                PathBuf::from(name)
            });
            let mut log = create(&metrics_path)?;
            let mut log_err = None;
            let history = trainer.run(remaining, |m| {
                let line = serde_json::to_string(m).expect("metrics serialize");
                eprintln!("{line}");
                if let Err(e) = writeln!(log, "{line}").and_then(|_| log.flush()) {
                    log_err.get_or_insert(e);
                }
            })?;
            if let Some(e) = log_err {
                return Err(io_failure(&metrics_path, e));
            }
            let epoch = trainer.epoch();
            let (model, adam) = trainer.into_parts();
            let version = model.config().hash();
            let ck = Checkpoint {
                model,
                adam: Some(adam),
                epoch,
                rules: Some(header.rules),
            };
            ck.save(&out)?;
            emit(
                &json!({
                    "checkpoint": out,
                    "model_version": version,
                    "epochs": epoch,
                    "final_loss": history.last().map(|m| m.loss),
                }),
                None,
            )
        }

        Command::Eval { checkpoint, test, k, out } => {
            if k.is_empty() || k.contains(&0) {
                return Err(fail("invalid_argument", "every --k must be at least 1"));
            }
            let rec = load_recommender(&checkpoint)?;
            let (_, cases) = read_test(&test)?;
            let reports = evaluate(&rec, &cases, &k)?;
            emit(
                &json!({ "model_version": rec.version(), "reports": reports }),
                out.as_deref(),
            )
        }

        Command::Recommend { checkpoint, history, n } => {
            let started = Instant::now();
            let rec = load_recommender(&checkpoint)?;
            let mut req = read_request(&history)?;
            if let Some(n) = n {
                req.n = n;
            }
            let items = rec.recommend(&req)?;
            emit(
                &RecommendResponse {
                    items,
                    model_version: rec.version().to_string(),
                    latency_ms: started.elapsed().as_secs_f64() * 1e3,
                },
                None,
            )
        }

        Command::InspectAttention { checkpoint, session, out } => {
            let rec = load_recommender(&checkpoint)?;
            let req = read_request(&session)?;
            emit(&rec.inspect_attention(&req)?, out.as_deref())
        }

        Command::Serve { checkpoint, port, host } => {
            let rec = Arc::new(load_recommender(&checkpoint)?);
            let version = rec.version().to_string();
            let runtime = tokio::runtime::Builder::new_multi_thread()
                .enable_all()
                .build()
                .map_err(|e| fail("io", e.to_string()))?;
            runtime
                .block_on(seqmatch_cli::serve(rec, SocketAddr::new(host, port), |addr| {
                    println!("{}", json!({ "listening": addr.to_string(), "model_version": version }));
                }))
                .map_err(|e| fail("io", e.to_string()))
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("{}", json!({ "error": f.kind, "message": f.message }));
            ExitCode::FAILURE
        }
    }
}
