//! Command-line front end over the alignment toolkit: every pipeline stage
//! as a subcommand, JSON on stdout, logs on stderr, and exit codes that
//! scripts can rely on (0 ok, 1 runtime failure, 2 usage).

use std::ffi::OsString;
use std::path::PathBuf;

use clap::error::ErrorKind;
use clap::{ArgMatches, CommandFactory, FromArgMatches, Parser, Subcommand, ValueEnum};
use serde::de::DeserializeOwned;
use serde_json::{Map, Value};

mod commands;
pub mod schema;

#[derive(Debug)]
pub enum CliError {
    /// Bad invocation or config: exit 2.
    Usage(String),
    /// The command itself failed: exit 1.
    Runtime(String),
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Usage(m) | CliError::Runtime(m) => f.write_str(m),
        }
    }
}

impl std::error::Error for CliError {}

/// Anything from the core library is a runtime failure; usage errors are
/// raised explicitly at the argument layer.
pub fn runtime(e: impl std::fmt::Display) -> CliError {
    CliError::Runtime(e.to_string())
}

pub enum Output {
    Json(Value),
    /// Help or version text, printed verbatim with exit 0.
    Text(String),
}

#[derive(Parser, Debug)]
#[command(
    name = "capalign",
    version,
    about = "Caption-grounding toolkit: pair verification, prompt synthesis, toy training, transport and alignment diagnostics"
)]
struct Cli {
    /// Seed for every random choice the command makes.
    #[arg(long, global = true, default_value_t = 42)]
    seed: u64,
    /// JSON file of default flag values for the chosen subcommand
    /// (snake_case keys); explicit flags win.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ModeArg {
    Full,
    CaptionOnly,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Score caption pairs by embedding cosine and flag each against a threshold.
    VerifyPairs(commands::VerifyPairsArgs),
    /// Render generation prompts and hash-stamped sidecars from caption records.
    BuildPrompts(commands::BuildPromptsArgs),
    /// Concatenate record shards, dropping exact duplicates and rejecting conflicts.
    MergeShards(commands::MergeShardsArgs),
    /// Train the toy captioner and report its per-step loss history.
    TrainToy(commands::TrainToyArgs),
    /// Decode captions from a trained checkpoint.
    Generate(commands::GenerateArgs),
    /// Solve one entropic transport instance from tensor files.
    Sinkhorn(commands::SinkhornArgs),
    /// Compare loss gradients against central finite differences.
    GradCheck(commands::GradCheckArgs),
    /// Alignment scorecard for two embedding clouds.
    Diagnose(commands::DiagnoseArgs),
    /// Corpus BLEU over candidate/reference token files.
    Bleu(commands::BleuArgs),
    /// Pooled-descriptor alignment loss for paired descriptor tensors.
    PalEval(commands::PalEvalArgs),
}

/// Loads the --config JSON object, if any. Keys must be a subset of the
/// active subcommand's flags; anything else is a typo worth failing on.
fn load_config(path: Option<&PathBuf>) -> Result<Map<String, Value>, CliError> {
    let Some(path) = path else { return Ok(Map::new()) };
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", path.display())))?;
    match serde_json::from_str(&text) {
        Ok(Value::Object(map)) => Ok(map),
        Ok(_) => Err(CliError::Usage(format!(
            "config {} must hold a JSON object",
            path.display()
        ))),
        Err(e) => Err(CliError::Usage(format!("config {} is not JSON: {e}", path.display()))),
    }
}

/// Fills `slot` from the config map unless the flag was given explicitly.
fn merge_one<T: DeserializeOwned>(
    slot: &mut T,
    sub: &ArgMatches,
    cfg: &Map<String, Value>,
    id: &str,
) -> Result<(), CliError> {
    if sub.value_source(id) == Some(clap::parser::ValueSource::CommandLine) {
        return Ok(());
    }
    if let Some(v) = cfg.get(id) {
        *slot = serde_json::from_value(v.clone())
            .map_err(|e| CliError::Usage(format!("config key {id:?}: {e}")))?;
    }
    Ok(())
}

macro_rules! merge_fields {
    ($args:expr, $sub:expr, $cfg:expr; $($field:ident),+ $(,)?) => {
        $(crate::merge_one(&mut $args.$field, $sub, $cfg, stringify!($field))?;)+
    };
}
pub(crate) use merge_fields;

fn reject_unknown_keys(cfg: &Map<String, Value>, known: &[&str]) -> Result<(), CliError> {
    for key in cfg.keys() {
        if !known.contains(&key.as_str()) {
            return Err(CliError::Usage(format!(
                "config key {key:?} does not match any flag of this subcommand"
            )));
        }
    }
    Ok(())
}

pub fn run<I, A>(argv: I) -> Result<Output, CliError>
where
    I: IntoIterator<Item = A>,
    A: Into<OsString> + Clone,
{
    let matches = match Cli::command().try_get_matches_from(argv) {
        Ok(m) => m,
        Err(e) if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) => {
            return Ok(Output::Text(e.to_string()));
        }
        Err(e) => return Err(CliError::Usage(e.to_string())),
    };
    let cli = Cli::from_arg_matches(&matches).map_err(|e| CliError::Usage(e.to_string()))?;
    let (_, sub) = matches
        .subcommand()
        .expect("clap guarantees a subcommand when parsing succeeded");

    let cfg = load_config(cli.config.as_ref())?;
    let mut seed = cli.seed;
    merge_one(&mut seed, sub, &cfg, "seed")?;

    let value = match cli.command {
        Command::VerifyPairs(mut a) => {
            a.merge(sub, &cfg)?;
            commands::verify_pairs(a)
        }
        Command::BuildPrompts(mut a) => {
            a.merge(sub, &cfg)?;
            commands::build_prompts(a, seed)
        }
        Command::MergeShards(mut a) => {
            a.merge(sub, &cfg)?;
            commands::merge_shards(a)
        }
        Command::TrainToy(mut a) => {
            a.merge(sub, &cfg)?;
            commands::train_toy(a, seed)
        }
        Command::Generate(mut a) => {
            a.merge(sub, &cfg)?;
            commands::generate(a, seed)
        }
        Command::Sinkhorn(mut a) => {
            a.merge(sub, &cfg)?;
            commands::sinkhorn(a)
        }
        Command::GradCheck(mut a) => {
            a.merge(sub, &cfg)?;
            commands::grad_check(a, seed)
        }
        Command::Diagnose(mut a) => {
            a.merge(sub, &cfg)?;
            commands::diagnose(a)
        }
        Command::Bleu(mut a) => {
            a.merge(sub, &cfg)?;
            commands::bleu(a)
        }
        Command::PalEval(mut a) => {
            a.merge(sub, &cfg)?;
            commands::pal_eval(a)
        }
    }?;
    Ok(Output::Json(value))
}
