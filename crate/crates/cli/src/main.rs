//! `norm-align`: generate synthetic data, train, evaluate, check gradients
//! and run the comparison presets.
//!
//! Exit codes: 0 success, 1 check failure, 2 input error, 3 numerical abort,
//! 4 contract violation. Machine-readable output goes to stdout, logs to stderr.

mod config;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{CommandFactory, FromArgMatches, Parser, Subcommand};
use serde_json::json;

use normalign::data::{generate, load_dataset, save_dataset, DatasetSpec, FeatureDataset, SplitKind};
use normalign::gradcheck::{gradient_suite, SuiteEntry, SUITE_CHECKS};
use normalign::models::{load_checkpoint, save_checkpoint};
use normalign::trainer::{
    evaluate_split, preset_spec, run_preset, train, write_report, Mode, Preset, TrainConfig, TrainError,
};

use config::{defaults_help, parse_json_file, CliConfig};

/// Failure carrying its exit code.
#[derive(Debug)]
struct Failure {
    code: u8,
    message: String,
}

impl Failure {
    fn input(message: impl Into<String>) -> Self {
        Self {
            code: 2,
            message: message.into(),
        }
    }

    fn check(message: impl Into<String>) -> Self {
        Self {
            code: 1,
            message: message.into(),
        }
    }
}

impl From<TrainError> for Failure {
    fn from(e: TrainError) -> Self {
        let code = match &e {
            TrainError::NonFinite { .. } => 3,
            TrainError::LabelHygiene { .. } | TrainError::Contract(_) => 4,
            _ => 2,
        };
        Self {
            code,
            message: e.to_string(),
        }
    }
}

type CmdResult = Result<(), Failure>;

#[derive(Parser)]
#[command(
    name = "norm-align",
    version,
    about = "Multi-modal domain adaptation on synthetic clip features"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset and print per-split, per-modality mean feature norms.
    GenData {
        /// Dataset spec JSON; omitted fields take their defaults.
        #[arg(long)]
        spec: Option<PathBuf>,
        /// Overrides the spec's seed.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train streams and write report.jsonl, summary.json and checkpoint.bin.
    Train {
        /// Config JSON with optional keys `dataset`, `train`, `data` and `out`.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Dataset directory; overrides the config's `data` and `dataset`.
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        /// source_only, dg_rna or uda_full; overrides `train.mode`.
        #[arg(long)]
        mode: Option<String>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Evaluate a checkpoint on a labeled split and print the metrics.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// source_<k> or target_test.
        #[arg(long, default_value = "target_test")]
        split: String,
    },
    /// Finite-difference check of every loss and an end-to-end micro model.
    Gradcheck {
        #[arg(long, default_value_t = 1e-4)]
        tol: f64,
        #[arg(long, default_value_t = 1e-5)]
        step: f64,
        /// First seed; seeds `seed..seed + trials` are checked.
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 10)]
        trials: u64,
    },
    /// Run a comparison preset over several seeds and write CSV and JSON tables.
    Preset {
        /// table2-left or table2-right.
        #[arg(long)]
        name: String,
        /// Number of seeds, starting at 0.
        #[arg(long, default_value_t = 3)]
        seeds: u64,
        #[arg(long)]
        out: PathBuf,
        /// Dataset spec JSON replacing the preset's own.
        #[arg(long)]
        spec: Option<PathBuf>,
        /// Overrides every row's epoch budget.
        #[arg(long)]
        epochs: Option<usize>,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .target(env_logger::Target::Stderr)
        .init();
    let mut command = Cli::command();
    for (name, help) in defaults_help() {
        command = command.mut_subcommand(name, |c| c.after_long_help(help));
    }
    let matches = command.get_matches();
    let cli = match Cli::from_arg_matches(&matches) {
        Ok(cli) => cli,
        Err(e) => e.exit(),
    };
    let result = match cli.command {
        Command::GenData { spec, seed, out } => gen_data(spec.as_deref(), seed, &out),
        Command::Train {
            config,
            data,
            out,
            mode,
            epochs,
            seed,
        } => cmd_train(config.as_deref(), data, out, mode.as_deref(), epochs, seed),
        Command::Eval {
            checkpoint,
            data,
            split,
        } => cmd_eval(&checkpoint, &data, &split),
        Command::Gradcheck {
            tol,
            step,
            seed,
            trials,
        } => cmd_gradcheck(tol, step, seed, trials),
        Command::Preset {
            name,
            seeds,
            out,
            spec,
            epochs,
        } => cmd_preset(&name, seeds, &out, spec.as_deref(), epochs),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}

fn print_json(value: &impl serde::Serialize) -> CmdResult {
    let text = serde_json::to_string_pretty(value).map_err(|e| Failure::input(e.to_string()))?;
    println!("{text}");
    Ok(())
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> CmdResult {
    fs::write(path, contents).map_err(|e| Failure::input(format!("{}: {e}", path.display())))
}

/// Mean raw row norm of every modality in every split.
fn raw_norms(data: &FeatureDataset) -> serde_json::Value {
    let mut out = serde_json::Map::new();
    for kind in data.split_kinds() {
        let set = data.clip_set(kind).expect("listed split");
        let mut per = serde_json::Map::new();
        for (name, t) in &set.features {
            let mean = (0..t.rows())
                .map(|r| t.row(r).iter().map(|v| v * v).sum::<f64>().sqrt())
                .sum::<f64>()
                / t.rows() as f64;
            per.insert(name.clone(), json!(mean));
        }
        out.insert(kind.to_string(), per.into());
    }
    out.into()
}

fn gen_data(spec_path: Option<&Path>, seed: Option<u64>, out: &Path) -> CmdResult {
    let mut spec: DatasetSpec = match spec_path {
        Some(p) => parse_json_file(p)?,
        None => DatasetSpec::default(),
    };
    if let Some(s) = seed {
        spec.seed = s;
    }
    let data = generate(&spec).map_err(|e| Failure::input(e.to_string()))?;
    save_dataset(&data, out).map_err(|e| Failure::input(e.to_string()))?;
    log::info!("wrote {} splits to {}", data.split_kinds().len(), out.display());
    print_json(&raw_norms(&data))
}

fn load_data(dir: &Path) -> Result<FeatureDataset, Failure> {
    load_dataset(dir).map_err(|e| Failure::input(format!("{}: {e}", dir.display())))
}

fn cmd_train(
    config_path: Option<&Path>,
    data_flag: Option<PathBuf>,
    out_flag: Option<PathBuf>,
    mode: Option<&str>,
    epochs: Option<usize>,
    seed: Option<u64>,
) -> CmdResult {
    let config: CliConfig = match config_path {
        Some(p) => parse_json_file(p)?,
        None => CliConfig::default(),
    };
    let mut train_config: TrainConfig = config.train;
    if let Some(m) = mode {
        train_config.mode = Mode::parse(m)
            .ok_or_else(|| Failure::input(format!("unknown mode {m:?}; valid: source_only, dg_rna, uda_full")))?;
    }
    if let Some(e) = epochs {
        train_config.epochs = e;
    }
    if let Some(s) = seed {
        train_config.seed = s;
    }
    let data = match (data_flag.or(config.data), config.dataset) {
        (Some(dir), _) => load_data(&dir)?,
        (None, Some(spec)) => generate(&spec).map_err(|e| Failure::input(e.to_string()))?,
        (None, None) => {
            return Err(Failure::input(
                "no dataset: pass --data or set `data` or `dataset` in the config",
            ))
        }
    };
    let out = out_flag
        .or(config.out)
        .ok_or_else(|| Failure::input("no output directory: pass --out or set `out` in the config"))?;

    let outcome = train(&train_config, &data)?;
    write_report(&outcome.report, &out)?;
    save_checkpoint(out.join("checkpoint.bin"), &outcome.streams).map_err(|e| Failure::input(e.to_string()))?;
    let last = outcome.report.last();
    print_json(&json!({
        "epochs": last.epoch,
        "metrics": last.metrics,
        "norm_ratio": last.norm_ratio,
        "target_label_reads": outcome.report.target_label_reads,
    }))
}

fn cmd_eval(checkpoint: &Path, data_dir: &Path, split: &str) -> CmdResult {
    let kind: SplitKind = split
        .parse()
        .map_err(|e: normalign::data::DataError| Failure::input(e.to_string()))?;
    let streams = load_checkpoint(checkpoint).map_err(|e| Failure::input(format!("{}: {e}", checkpoint.display())))?;
    let data = load_data(data_dir)?;
    let metrics = evaluate_split(&streams, &data, kind).map_err(|e| Failure::input(e.to_string()))?;
    print_json(&json!({ "split": split, "metrics": metrics }))
}

fn cmd_gradcheck(tol: f64, step: f64, seed: u64, trials: u64) -> CmdResult {
    if trials == 0 {
        return Err(Failure::input("trials must be >= 1"));
    }
    let seeds: Vec<u64> = (seed..seed + trials).collect();
    let entries = gradient_suite(&seeds, step, tol).map_err(|e| Failure::input(e.to_string()))?;
    let mut rows = Vec::new();
    let mut all_passed = true;
    for check in SUITE_CHECKS {
        let mine: Vec<&SuiteEntry> = entries.iter().filter(|e| e.check == check).collect();
        let worst = mine
            .iter()
            .max_by(|a, b| a.report.max_rel_err.total_cmp(&b.report.max_rel_err))
            .expect("one entry per seed");
        let passed = mine.iter().all(|e| e.report.passed);
        all_passed &= passed;
        eprintln!(
            "{:<22} max rel err {:>10.3e} (seed {:>3})  {}",
            check,
            worst.report.max_rel_err,
            worst.seed,
            if passed { "ok" } else { "FAIL" }
        );
        rows.push(json!({
            "check": check,
            "max_rel_err": worst.report.max_rel_err,
            "max_abs_err": worst.report.max_abs_err,
            "worst_seed": worst.seed,
            "failed_seeds": mine.iter().filter(|e| !e.report.passed).map(|e| e.seed).collect::<Vec<_>>(),
            "passed": passed,
        }));
    }
    print_json(&json!({ "tol": tol, "step": step, "seeds": seeds, "checks": rows, "passed": all_passed }))?;
    if all_passed {
        Ok(())
    } else {
        Err(Failure::check(format!("gradient check failed at tolerance {tol:e}")))
    }
}

fn threads() -> Result<usize, Failure> {
    match std::env::var("NORM_ALIGN_THREADS") {
        Err(_) => Ok(1),
        Ok(v) => v
            .parse::<usize>()
            .ok()
            .filter(|n| *n >= 1)
            .ok_or_else(|| Failure::input(format!("NORM_ALIGN_THREADS must be a positive integer, got {v:?}"))),
    }
}

fn cmd_preset(name: &str, seeds: u64, out: &Path, spec_path: Option<&Path>, epochs: Option<usize>) -> CmdResult {
    let preset: Preset = name.parse().map_err(Failure::input)?;
    if seeds == 0 {
        return Err(Failure::input("seeds must be >= 1"));
    }
    let spec = match spec_path {
        Some(p) => parse_json_file(p)?,
        None => preset_spec(preset),
    };
    let seed_list: Vec<u64> = (0..seeds).collect();
    let table = match epochs {
        None => run_preset(preset, &spec, &seed_list, threads()?)?,
        Some(e) => {
            let rows: Vec<(String, TrainConfig)> = normalign::trainer::preset_rows(preset)
                .into_iter()
                .map(|(n, c)| (n, TrainConfig { epochs: e, ..c }))
                .collect();
            normalign::trainer::run_rows(&preset.to_string(), &rows, &spec, &seed_list, threads()?)?
        }
    };
    fs::create_dir_all(out).map_err(|e| Failure::input(format!("{}: {e}", out.display())))?;
    let csv = table.to_csv()?;
    write_file(&out.join(format!("{preset}.csv")), &csv)?;
    let text = serde_json::to_vec_pretty(&table).map_err(|e| Failure::input(e.to_string()))?;
    write_file(&out.join(format!("{preset}.json")), text)?;
    print!("{csv}");
    Ok(())
}
