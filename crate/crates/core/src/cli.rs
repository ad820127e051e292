//! Command-line entry point.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use serde_json::json;

use crate::classifier::Variant;
use crate::config::{ExperimentConfig, DEFAULT_CONFIG};
use crate::error::{Error, Result};
use crate::harness::{self, write_atomic, Experiment, Provenance, Sections};

#[derive(Debug, Parser)]
#[command(
    name = "attrib-robust",
    version,
    about = "Feature attribution for small text classifiers with randomization sanity tests",
    after_long_help = concat!(
        "Configuration keys and their defaults (TOML):\n\n",
        include_str!("../configs/default.toml")
    )
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,

    /// Experiment config (TOML). Defaults apply when omitted.
    #[arg(long, global = true, value_name = "PATH")]
    pub config: Option<PathBuf>,

    /// Output directory.
    #[arg(long, global = true, value_name = "DIR", default_value = "runs/default")]
    pub out: PathBuf,

    /// Global seed, overriding `seed` in the config.
    #[arg(long, global = true, value_name = "INT")]
    pub seed: Option<u64>,

    /// Document-level worker threads.
    #[arg(long, global = true, value_name = "N", default_value_t = 1)]
    pub jobs: usize,

    /// Overwrite a completed report or a directory made with another config.
    #[arg(long, global = true)]
    pub force: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Subcommand)]
pub enum Command {
    /// Load or generate the corpus and write the split and vocabulary.
    GenData,
    /// Train the pretrained encoder and the FirstInit/SecondInit/RandInit models.
    Train,
    /// Compute and cache attributions of every method for every model.
    Attribute,
    /// Infidelity tables for FirstInit, SecondInit and RandInit.
    Infidelity,
    /// Jaccard@K% tables for both model pairs.
    Jaccard,
    /// Different-initializations test and its report.
    TestDiffinit,
    /// Untrained-model test and its report.
    TestUntrained,
    /// Both tests and the combined report.
    Report,
}

impl Command {
    fn writes_report(self) -> bool {
        matches!(self, Command::TestDiffinit | Command::TestUntrained | Command::Report)
    }
}

fn load_config(cli: &Cli) -> Result<(ExperimentConfig, String)> {
    let (mut cfg, text) = match &cli.config {
        Some(p) => {
            let cfg = ExperimentConfig::load(p)?;
            (cfg, std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?)
        }
        None => (ExperimentConfig::from_toml(DEFAULT_CONFIG)?, DEFAULT_CONFIG.to_string()),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if cli.jobs == 0 {
        return Err(Error::Config {
            path: "--jobs".into(),
            message: "must be >= 1".into(),
        });
    }
    cfg.validate()?;
    Ok((cfg, text))
}

/// Creates `out` by renaming a fully populated sibling into place, so a
/// crashed start never leaves a half-made directory.
fn create_out_dir(out: &Path, cfg: &ExperimentConfig) -> Result<()> {
    if out.exists() {
        return Ok(());
    }
    let parent = match out.parent() {
        Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
        _ => PathBuf::from("."),
    };
    std::fs::create_dir_all(&parent).map_err(|e| Error::io(&parent, e))?;
    let name = out.file_name().and_then(|n| n.to_str()).unwrap_or("out");
    let tmp = parent.join(format!(".{name}.tmp-{}", std::process::id()));
    std::fs::create_dir_all(&tmp).map_err(|e| Error::io(&tmp, e))?;
    std::fs::write(tmp.join("config.toml"), cfg.to_toml()?).map_err(|e| Error::io(&tmp, e))?;
    match std::fs::rename(&tmp, out) {
        Ok(()) => Ok(()),
        Err(_) if out.exists() => {
            let _ = std::fs::remove_dir_all(&tmp);
            Ok(())
        }
        Err(e) => Err(Error::io(out, e)),
    }
}

fn check_out_dir(cli: &Cli, cfg: &ExperimentConfig) -> Result<()> {
    let cfg_path = cli.out.join("config.toml");
    if let Ok(text) = std::fs::read_to_string(&cfg_path) {
        let same = ExperimentConfig::from_toml(&text).map(|c| c.hash() == cfg.hash()).unwrap_or(false);
        if !same && !cli.force {
            return Err(Error::contract(format!(
                "{} was created with a different config; pass --force to reuse it",
                cli.out.display()
            )));
        }
    }
    if cli.command.writes_report() && cli.out.join("report.json").exists() && !cli.force {
        return Err(Error::contract(format!(
            "{} already holds a completed report; pass --force to overwrite it",
            cli.out.display()
        )));
    }
    write_atomic(&cfg_path, cfg.to_toml()?)
}

fn execute(cli: &Cli) -> Result<serde_json::Value> {
    let (cfg, config_text) = load_config(cli)?;
    create_out_dir(&cli.out, &cfg)?;
    check_out_dir(cli, &cfg)?;
    let provenance = Provenance::new(&cfg, config_text);
    let prov_path = cli.out.join("provenance.json");
    write_atomic(&prov_path, serde_json::to_string_pretty(&provenance)?)?;

    let exp = Experiment::prepare(cfg, &cli.out)?;
    let summary = match cli.command {
        Command::GenData => json!({
            "train": exp.split.train.len(),
            "validation": exp.split.validation.len(),
            "test": exp.split.test.len(),
            "eval": exp.eval_docs.len(),
            "vocab": exp.vocab.len(),
        }),
        Command::Train => {
            let mut acc = Vec::new();
            for r in 0..exp.cfg.replicates {
                let v = exp.variants(r)?;
                acc.push(json!({
                    "replicate": r,
                    "FirstInit": crate::metrics::accuracy(&v.first, &exp.split.test)?,
                    "SecondInit": crate::metrics::accuracy(&v.second, &exp.split.test)?,
                    "RandInit": crate::metrics::accuracy(&v.rand, &exp.split.test)?,
                }));
            }
            json!({ "test_accuracy": acc })
        }
        Command::Attribute => json!({ "attributions": harness::run_attributions(&exp)? }),
        Command::Infidelity => {
            let t = harness::run_infidelity(&exp, &[Variant::FirstInit, Variant::SecondInit, Variant::RandInit])?;
            json!({ "tables": t.iter().map(|t| &t.name).collect::<Vec<_>>() })
        }
        Command::Jaccard => {
            let pairs = [(Variant::FirstInit, Variant::SecondInit), (Variant::FirstInit, Variant::RandInit)];
            let t = harness::run_jaccard(&exp, &pairs)?;
            json!({ "tables": t.iter().map(|t| &t.name).collect::<Vec<_>>() })
        }
        Command::TestDiffinit | Command::TestUntrained | Command::Report => {
            let sections = Sections {
                diffinit: match cli.command {
                    Command::TestUntrained => None,
                    _ => Some(harness::run_test_diffinit(&exp)?),
                },
                untrained: match cli.command {
                    Command::TestDiffinit => None,
                    _ => Some(harness::run_test_untrained(&exp)?),
                },
            };
            let report = harness::assemble_report(&exp, &sections, provenance.clone())?;
            json!({
                "report": cli.out.join("report.json"),
                "tables": report.tables.keys().collect::<Vec<_>>(),
                "gaps": report.gaps,
            })
        }
    };
    let mut provenance = provenance;
    provenance.finished_unix = Some(harness::unix_time());
    write_atomic(&prov_path, serde_json::to_string_pretty(&provenance)?)?;
    Ok(summary)
}

fn error_record(e: &Error) -> serde_json::Value {
    let mut rec = json!({ "error": e.kind(), "message": e.to_string() });
    if let Error::Config { path, .. } = e {
        rec["path"] = json!(path);
    }
    rec
}

/// Parses `args`, runs the subcommand and returns the process exit code:
/// 0 on success, 2 for an invalid config, 1 for any other failure.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    let pool = rayon::ThreadPoolBuilder::new().num_threads(cli.jobs.max(1)).build();
    let result = match pool {
        Ok(pool) => pool.install(|| execute(&cli)),
        Err(e) => Err(Error::contract(format!("thread pool: {e}"))),
    };
    match result {
        Ok(summary) => {
            println!("{summary}");
            0
        }
        Err(e) => {
            eprintln!("{}", error_record(&e));
            match e {
                Error::Config { .. } => 2,
                _ => 1,
            }
        }
    }
}
