//! `bdr` command line. Exit codes: 0 success, 1 usage error, 2 runtime error.

use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use super::checkpoint::{load_checkpoint, save_checkpoint};
use super::config::RunConfig;
use super::eval::{eval_matrix, evaluate_condition, standard_matrix};
use super::gradcheck::{gradcheck_full, GRADCHECK_TOLERANCE};
use super::report::{self, ReportFormat};
use super::train::train;
use crate::error::{Error, Result};
use crate::model::{Model, ModelVariant, LOSS_COMPONENTS};
use crate::numerics::ParamStore;
use crate::par::Parallelism;
use crate::scenesim::{make_dataset, read_dataset, write_dataset, CorruptionSpec, Item, Split};

#[derive(Parser, Debug)]
#[command(name = "bdr", version, about = "Decouple/recouple BEV fusion on synthetic corrupted scenes")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone, Default)]
struct Common {
    /// TOML file with [sim], [model], [train] and [eval] tables
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a dataset file
    Gen {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 120)]
        n: usize,
        #[arg(long, default_value = "all")]
        split: Split,
    },
    /// Train a model and write a checkpoint
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        variant: Option<ModelVariant>,
        #[arg(long)]
        epochs: Option<usize>,
        /// Per-epoch loss log (CSV)
        #[arg(long)]
        log: Option<PathBuf>,
        #[arg(long)]
        sequential: bool,
    },
    /// mAP and router weights under individual corruptions
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
        /// `kind[:target[:severity]]`, repeatable; clean when absent
        #[arg(long)]
        corruption: Vec<CorruptionSpec>,
    },
    /// Full corruption sweep; writes report.csv and report.json under --out
    Matrix {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
        /// Also compute clean-versus-corrupted CKA rows
        #[arg(long)]
        cka: bool,
        #[arg(long)]
        sequential: bool,
    },
    /// Clean-versus-corrupted CKA of invariant and specific features
    Cka {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
    },
    /// Finite-difference check of the full training loss
    Gradcheck {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 200)]
        coords: usize,
    },
    /// Convert or re-emit a report file
    Report {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        input: PathBuf,
        #[arg(long, default_value = "csv")]
        format: ReportFormat,
    },
}

/// Parses `argv` (including the program name), runs the command and returns
/// the process exit code.
pub fn run<I, S>(argv: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    match execute(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::Usage(_) => 1,
                _ => 2,
            }
        }
    }
}

fn base_config(common: &Common) -> Result<RunConfig> {
    match &common.config {
        Some(p) => RunConfig::load(p),
        None => Ok(RunConfig::default()),
    }
}

fn require_out(common: &Common) -> Result<&Path> {
    common
        .out
        .as_deref()
        .ok_or_else(|| Error::Usage("--out is required for this command".into()))
}

fn load_items(path: &Path, cfg: &RunConfig) -> Result<Vec<Item>> {
    let (header, items) = read_dataset(path)?;
    header.check(&cfg.sim)?;
    if items.is_empty() {
        return Err(Error::Config(format!("{} holds no scenes", path.display())));
    }
    Ok(items)
}

/// Model and parameters from a checkpoint, with the configuration it echoes;
/// an explicit `--config` replaces only the `[eval]` table.
fn load_trained(common: &Common, path: &Path) -> Result<(RunConfig, Model, ParamStore<f32>)> {
    let ck = load_checkpoint(path)?;
    let mut cfg = RunConfig::from_toml(&ck.config)?;
    if common.config.is_some() {
        cfg.eval = base_config(common)?.eval;
    }
    let model = Model::new(cfg.model.clone())?;
    model.check_params(&ck.params)?;
    Ok((cfg, model, ck.params))
}

fn write_text(out: Option<&Path>, text: &str) -> Result<()> {
    match out {
        Some(p) => std::fs::write(p, text).map_err(|e| Error::io(p, e)),
        None => {
            print!("{text}");
            std::io::stdout().flush().map_err(|e| Error::io("<stdout>", e))
        }
    }
}

fn mode(sequential: bool) -> Parallelism {
    if sequential {
        Parallelism::Sequential
    } else {
        Parallelism::Parallel
    }
}

fn execute(cmd: Command) -> Result<()> {
    match cmd {
        Command::Gen { common, n, split } => {
            let cfg = base_config(&common)?;
            let out = require_out(&common)?;
            let items = make_dataset(n, common.seed.unwrap_or(0), &cfg.sim, split, Parallelism::Parallel)?;
            write_dataset(out, &items, &cfg.sim)?;
            println!("wrote {} scenes to {}", items.len(), out.display());
        }
        Command::Train {
            common,
            dataset,
            variant,
            epochs,
            log,
            sequential,
        } => {
            let mut cfg = base_config(&common)?;
            let out = require_out(&common)?;
            if let Some(s) = common.seed {
                cfg.train.seed = s;
            }
            if let Some(v) = variant {
                cfg.model.variant = v;
            }
            if let Some(e) = epochs {
                cfg.train.epochs = e;
            }
            cfg.validate()?;
            let items = load_items(&dataset, &cfg)?;
            let model = Model::new(cfg.model.clone())?;
            let (params, history) = train(&model, &items, &cfg.train, mode(sequential), |e| {
                eprintln!("epoch {:>3}  loss {:.4}  det {:.4}", e.epoch, e.losses[0], e.losses[1]);
            })?;
            save_checkpoint(out, &params, &cfg.to_toml())?;
            if let Some(path) = log {
                let mut s = format!("epoch,{}\n", LOSS_COMPONENTS.join(","));
                for e in &history {
                    let vals: Vec<String> = e.losses.iter().map(|v| format!("{v:.6}")).collect();
                    s.push_str(&format!("{},{}\n", e.epoch, vals.join(",")));
                }
                std::fs::write(&path, s).map_err(|e| Error::io(&path, e))?;
            }
            println!("wrote {} ({} tensors)", out.display(), params.len());
        }
        Command::Eval {
            common,
            checkpoint,
            dataset,
            corruption,
        } => {
            let (cfg, model, params) = load_trained(&common, &checkpoint)?;
            let items = load_items(&dataset, &cfg)?;
            let specs = if corruption.is_empty() {
                vec![CorruptionSpec::none()]
            } else {
                corruption
            };
            let mut s = String::from("corruption,mAP,w_camera,w_lidar,w_joint,invariant_rms\n");
            for mut spec in specs {
                spec.seed = common.seed.unwrap_or(0);
                let c = evaluate_condition(&model, &params, &items, &spec, &cfg.sim, &cfg.eval, false)?;
                let w = c
                    .router_mean
                    .map(|w| format!("{:.4},{:.4},{:.4}", w[0], w[1], w[2]))
                    .unwrap_or_else(|| ",,".into());
                let rms = c.invariant_rms.map(|r| format!("{r:.4}")).unwrap_or_default();
                s.push_str(&format!("{},{:.4},{w},{rms}\n", spec.label(), c.map));
            }
            write_text(common.out.as_deref(), &s)?;
        }
        Command::Matrix {
            common,
            checkpoint,
            dataset,
            cka,
            sequential,
        } => {
            let out = require_out(&common)?.to_path_buf();
            let (cfg, model, params) = load_trained(&common, &checkpoint)?;
            let items = load_items(&dataset, &cfg)?;
            let specs = seeded(standard_matrix(), common.seed);
            let m = eval_matrix(&model, &params, &items, &specs, &cfg.sim, &cfg.eval, cka, mode(sequential))?;
            std::fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
            for fmt in [ReportFormat::Csv, ReportFormat::Json] {
                report::emit_report(&m.report, fmt, &out.join(format!("report.{}", fmt.extension())))?;
            }
            println!(
                "clean mAP {:.4}, mRR {:.4}% over {} corruptions",
                m.report.clean_map,
                m.report.mrr,
                specs.len()
            );
        }
        Command::Cka {
            common,
            checkpoint,
            dataset,
        } => {
            let (cfg, model, params) = load_trained(&common, &checkpoint)?;
            if !model.cfg.variant.has_decouple() {
                return Err(Error::Config(format!(
                    "variant {} has no decoupled features",
                    model.cfg.variant
                )));
            }
            let items = load_items(&dataset, &cfg)?;
            let specs = seeded(standard_matrix(), common.seed);
            let m = eval_matrix(&model, &params, &items, &specs, &cfg.sim, &cfg.eval, true, Parallelism::Parallel)?;
            write_text(common.out.as_deref(), &report::cka_to_csv(&m.report))?;
        }
        Command::Gradcheck { common, coords } => {
            let r = gradcheck_full(common.seed.unwrap_or(0), coords)?;
            println!("max relative error {:.3e} over {} coordinates", r.max_rel_error, r.coords_checked);
            if let Some((name, i, a, n)) = &r.worst {
                println!("worst: {name}[{i}] analytic {a:.6e} numeric {n:.6e}");
            }
            if !(r.max_rel_error <= GRADCHECK_TOLERANCE) {
                return Err(Error::Config(format!(
                    "gradient check failed: {:.3e} exceeds {GRADCHECK_TOLERANCE:e}",
                    r.max_rel_error
                )));
            }
        }
        Command::Report { common, input, format } => {
            let text = std::fs::read_to_string(&input).map_err(|e| Error::io(&input, e))?;
            let from = match input.extension().and_then(|e| e.to_str()) {
                Some("json") => ReportFormat::Json,
                _ => ReportFormat::Csv,
            };
            let r = report::parse(&text, from)?;
            write_text(common.out.as_deref(), &report::render(&r, format))?;
        }
    }
    Ok(())
}

fn seeded(mut specs: Vec<CorruptionSpec>, seed: Option<u64>) -> Vec<CorruptionSpec> {
    for s in &mut specs {
        s.seed = seed.unwrap_or(0);
    }
    specs
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unknown_flag_is_usage_error() {
        assert_eq!(run(["bdr", "gen", "--bogus"]), 1);
        assert_eq!(run(["bdr"]), 1);
        assert_eq!(run(["bdr", "frobnicate"]), 1);
    }

    #[test]
    fn missing_out_is_usage_error() {
        assert_eq!(run(["bdr", "gen", "--n", "2"]), 1);
    }

    #[test]
    fn help_exits_zero() {
        assert_eq!(run(["bdr", "--help"]), 0);
    }
}
