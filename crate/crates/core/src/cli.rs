//! Command-line front end. [`dispatch`] parses arguments, runs one
//! subcommand and returns the process exit code.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::Value;

use crate::corpus::{generate_corpus, generate_trials, CorpusConfig, CorpusManifest, TrialList};
use crate::eval::{self, Condition};
use crate::trainer::{self, RunConfig, RunSource, LAST_DIR, SOURCE_FILE};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_RUNTIME: i32 = 2;
pub const EXIT_SELFCHECK: i32 = 3;

/// Fallback for `train --run-dir`.
pub const RUN_DIR_ENV: &str = "MTL_SPEECH_RUN_DIR";

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("invalid configuration:\n  {}", .0.join("\n  "))]
    Config(Vec<String>),
    #[error("{0}")]
    Runtime(String),
    #[error("{failed} of {total} self-checks failed")]
    SelfCheck { failed: usize, total: usize },
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) | CliError::Config(_) => EXIT_USAGE,
            CliError::Runtime(_) => EXIT_RUNTIME,
            CliError::SelfCheck { .. } => EXIT_SELFCHECK,
        }
    }
}

fn runtime(e: impl std::fmt::Display) -> CliError {
    CliError::Runtime(e.to_string())
}

#[derive(Debug, Parser)]
#[command(name = "mtl-speech", version, about = "Joint speech and speaker recognition on a shared encoder")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct Overrides {
    /// JSON file merged over the defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Dotted-path override such as `trainer.mode=mtl_joint`; applied left to right.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Synthesize a corpus with train, validation and dev splits.
    GenCorpus {
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Draw verification trials from a manifest.
    GenTrials {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        positives: usize,
        #[arg(long)]
        negatives: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model.
    Train {
        #[command(flatten)]
        overrides: Overrides,
        /// Corpus directory; on resume defaults to the one the run used.
        #[arg(long)]
        corpus: Option<PathBuf>,
        #[arg(long, env = RUN_DIR_ENV)]
        run_dir: Option<PathBuf>,
        /// Continue from `<run-dir>/last` with the config stored there.
        #[arg(long)]
        resume: bool,
    },
    /// WER and per-condition EER of a checkpoint.
    Evaluate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        trials: Option<PathBuf>,
        /// `full` or `first_<seconds>s`; repeatable. None gives a WER-only report.
        #[arg(long = "condition")]
        conditions: Vec<String>,
        /// Leave out WER.
        #[arg(long)]
        no_wer: bool,
        #[arg(long)]
        out: PathBuf,
    },
    /// Per-layer speaker EER of mean-pooled encoder outputs.
    Probe {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        trials: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the gradient, CTC and EER oracles.
    Selfcheck,
}

/// Sets `path` (dotted) in `root` to `raw`, parsed as JSON when possible
/// and taken as a string otherwise. Only keys already present may be set.
pub fn set_path(root: &mut Value, path: &str, raw: &str) -> Result<(), String> {
    let mut node = root;
    let mut walked = Vec::new();
    for key in path.split('.') {
        walked.push(key);
        node = match node {
            Value::Object(map) => map.get_mut(key),
            _ => None,
        }
        .ok_or_else(|| format!("{}: unknown key", walked.join(".")))?;
    }
    *node = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_owned()));
    Ok(())
}

/// Recursively merges `patch` into `base`, reporting keys `base` lacks.
fn merge(base: &mut Value, patch: Value, prefix: &str, unknown: &mut Vec<String>) {
    match (base, patch) {
        (Value::Object(b), Value::Object(p)) => {
            for (k, v) in p {
                let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v, &key, unknown),
                    None => unknown.push(format!("{key}: unknown key")),
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

/// Defaults, then the JSON file, then each override in order.
pub fn resolve<T: Serialize + DeserializeOwned + Default>(file: Option<&Path>, sets: &[String]) -> Result<T, CliError> {
    let mut value = serde_json::to_value(T::default()).expect("defaults serialize");
    let mut problems = Vec::new();
    if let Some(path) = file {
        let text = fs::read_to_string(path).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?;
        let patch: Value =
            serde_json::from_str(&text).map_err(|e| CliError::Config(vec![format!("{}: {e}", path.display())]))?;
        merge(&mut value, patch, "", &mut problems);
    }
    for s in sets {
        match s.split_once('=') {
            Some((k, v)) => {
                if let Err(e) = set_path(&mut value, k.trim(), v) {
                    problems.push(e);
                }
            }
            None => problems.push(format!("--set {s}: expected KEY=VALUE")),
        }
    }
    if !problems.is_empty() {
        return Err(CliError::Config(problems));
    }
    serde_json::from_value(value).map_err(|e| CliError::Config(vec![e.to_string()]))
}

/// Defaults merged with the file and overrides, then validated.
pub fn resolve_run_config(file: Option<&Path>, sets: &[String]) -> Result<RunConfig, CliError> {
    let config: RunConfig = resolve(file, sets)?;
    let problems = config.problems();
    if problems.is_empty() {
        Ok(config)
    } else {
        Err(CliError::Config(problems))
    }
}

fn load_utterances(manifest: &Path) -> Result<Vec<crate::corpus::Utterance>, CliError> {
    CorpusManifest::read(manifest).and_then(|m| m.load()).map_err(runtime)
}

fn execute(command: Command) -> Result<(), CliError> {
    match command {
        Command::GenCorpus { out, overrides } => {
            let config: CorpusConfig = resolve(overrides.config.as_deref(), &overrides.set)?;
            config.validate().map_err(|e| CliError::Config(vec![e.to_string()]))?;
            let c = generate_corpus(&config, &out).map_err(runtime)?;
            println!(
                "wrote {} utterances ({} train, {} val, {} dev) to {}",
                c.all.rows.len(),
                c.train.rows.len(),
                c.val.rows.len(),
                c.dev.rows.len(),
                out.display()
            );
        }
        Command::GenTrials {
            manifest,
            positives,
            negatives,
            seed,
            out,
        } => {
            let m = CorpusManifest::read(&manifest).map_err(runtime)?;
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let trials = generate_trials(&m.rows, positives, negatives, &mut rng).map_err(runtime)?;
            trials.write(&out).map_err(runtime)?;
            println!("wrote {} trials to {}", trials.len(), out.display());
        }
        Command::Train {
            overrides,
            corpus,
            run_dir,
            resume,
        } => {
            let run_dir =
                run_dir.ok_or_else(|| CliError::Usage(format!("train needs --run-dir or {RUN_DIR_ENV}")))?;
            let config = if resume {
                if overrides.config.is_some() || !overrides.set.is_empty() {
                    return Err(CliError::Usage("--resume uses the stored config; drop --config and --set".into()));
                }
                trainer::read_manifest(&run_dir.join(LAST_DIR)).map_err(runtime)?.config
            } else {
                resolve_run_config(overrides.config.as_deref(), &overrides.set)?
            };
            let corpus = match corpus {
                Some(c) => c,
                None if resume => {
                    let sp = run_dir.join(SOURCE_FILE);
                    let text = fs::read(&sp).map_err(|e| runtime(format!("{}: {e}", sp.display())))?;
                    serde_json::from_slice::<RunSource>(&text).map_err(runtime)?.corpus
                }
                None => return Err(CliError::Usage("train needs --corpus".into())),
            };
            let summary = trainer::run(&config, &corpus, &run_dir, resume).map_err(runtime)?;
            println!(
                "trained {} steps{}; best {}",
                summary.steps,
                if summary.stopped_early { " (stopped early)" } else { "" },
                summary.best.map_or("none".into(), |b| serde_json::to_string(&b).expect("record serializes"))
            );
        }
        Command::Evaluate {
            checkpoint,
            manifest,
            trials,
            conditions,
            no_wer,
            out,
        } => {
            let conditions = conditions
                .iter()
                .map(|c| c.parse::<Condition>())
                .collect::<Result<Vec<_>, _>>()
                .map_err(|e| CliError::Usage(e.to_string()))?;
            let trials = match (&trials, conditions.is_empty()) {
                (Some(p), _) => TrialList::read(p).map_err(runtime)?,
                (None, true) => TrialList::default(),
                (None, false) => return Err(CliError::Usage("--condition needs --trials".into())),
            };
            let utts = load_utterances(&manifest)?;
            let report = eval::evaluate(&checkpoint, &utts, &trials, &conditions, !no_wer, &out).map_err(runtime)?;
            println!("{}", serde_json::to_string_pretty(&report).expect("report serializes"));
        }
        Command::Probe {
            checkpoint,
            manifest,
            trials,
            out,
        } => {
            let utts = load_utterances(&manifest)?;
            let list = TrialList::read(&trials).map_err(runtime)?;
            let report = eval::probe(&checkpoint, &utts, &list, &trials.display().to_string(), &out).map_err(runtime)?;
            for row in &report.rows {
                println!("layer {} eer {:.4}", row.layer, row.eer);
            }
        }
        Command::Selfcheck => {
            let results = crate::selfcheck::run_all();
            for r in &results {
                println!("{r}");
            }
            let failed = results.iter().filter(|r| !r.passed()).count();
            if failed > 0 {
                return Err(CliError::SelfCheck {
                    failed,
                    total: results.len(),
                });
            }
            println!("all {} checks passed", results.len());
        }
    }
    Ok(())
}

/// Runs the command line `args` (program name first) and returns the exit
/// code. Help and version requests exit 0.
pub fn dispatch<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    match execute(cli.command) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
