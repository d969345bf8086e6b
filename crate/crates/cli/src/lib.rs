//! The `dctev` command-line tool.
//!
//! Every subcommand accepts `--config <file>` plus one `--<key> <value>`
//! override per configuration key. The resolved configuration is validated
//! before any work starts and is embedded in every artifact written.

use clap::{Arg, ArgAction, ArgMatches, Command};
use dctev::checkpoint::Checkpoint;
use dctev::config::RunConfig;
use dctev::dataio::{format_timestamp, read_meter_file, write_meter_csv, MeterSeries};
use dctev::gradsuite::gradcheck_suite;
use dctev::metrics::{
    threshold_grid, threshold_sweep, write_history_csv, write_horizon_csv, write_sweep_csv,
    history_length_sweep,
};
use dctev::model::{attention_cost_report, Network};
use dctev::pipeline::{evaluate_model, fit_model, inference_windows, split_data, SplitData};
use dctev::synthgen::generate;
use dctev::{Error, Result};
use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

pub const EXIT_OK: i32 = 0;
pub const EXIT_RUNTIME: i32 = 1;
pub const EXIT_USAGE: i32 = 2;

fn path_arg(name: &'static str, help: &'static str, required: bool) -> Arg {
    Arg::new(name)
        .long(name)
        .value_name("PATH")
        .value_parser(clap::value_parser!(PathBuf))
        .required(required)
        .help(help)
}

fn with_config_args(mut cmd: Command) -> Command {
    cmd = cmd.arg(path_arg("config", "TOML configuration file; overrides apply on top", false));
    for key in RunConfig::keys() {
        let kebab = key.replace('_', "-");
        let mut arg = Arg::new(key.clone())
            .long(key.clone())
            .value_name("VALUE")
            .action(ArgAction::Set)
            .help_heading("Configuration overrides");
        if kebab != key {
            arg = arg.alias(kebab);
        }
        cmd = cmd.arg(arg);
    }
    cmd
}

pub fn command() -> Command {
    let sub = |name: &'static str, about: &'static str| with_config_args(Command::new(name).about(about));
    Command::new("dctev")
        .about("EV charging event prediction from smart-meter load")
        .subcommand_required(true)
        .arg_required_else_help(true)
        .subcommand(
            sub("synth", "Generate a synthetic meter file")
                .arg(path_arg("out", "Meter CSV to write", true)),
        )
        .subcommand(
            sub("train", "Train a model on the training split of a meter file")
                .arg(path_arg("data", "Meter CSV", true))
                .arg(path_arg("out", "Checkpoint to write", true))
                .arg(path_arg("history", "Training history JSON [default: <out>.history.json]", false)),
        )
        .subcommand(
            sub("evaluate", "Score a checkpoint on the test split")
                .arg(path_arg("data", "Meter CSV", true))
                .arg(path_arg("checkpoint", "Checkpoint from `train`", true))
                .arg(path_arg("out", "Report JSON [default: stdout]", false))
                .arg(path_arg("horizon-table", "Per-horizon metrics CSV", false)),
        )
        .subcommand(
            sub("predict", "Charging probabilities for every window and horizon")
                .arg(path_arg("data", "Meter CSV; ev_load_kw may be empty", true))
                .arg(path_arg("checkpoint", "Checkpoint from `train`", true))
                .arg(path_arg("out", "Prediction CSV to write", true)),
        )
        .subcommand(
            sub("sweep-threshold", "F1 across decision thresholds on the test split")
                .arg(path_arg("data", "Meter CSV", true))
                .arg(path_arg("checkpoint", "Checkpoint from `train`", true))
                .arg(path_arg("out", "Sweep CSV to write", true)),
        )
        .subcommand(
            sub("sweep-history", "Train and score one model per history length")
                .arg(path_arg("data", "Meter CSV", true))
                .arg(path_arg("out", "Sweep CSV to write", true)),
        )
        .subcommand(
            sub("gradcheck", "Finite-difference checks of every kernel and the configured model")
                .arg(path_arg("out", "Result JSON", false)),
        )
        .subcommand(
            sub("bench-attention", "Attention cost over raw minutes versus patches")
                .arg(path_arg("out", "Report JSON", false)),
        )
}

/// Parses `args` (program name first), runs the command and returns the
/// process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let matches = match command().try_get_matches_from(args) {
        Ok(m) => m,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    let (name, sub) = matches.subcommand().expect("subcommand is required");
    match execute(name, sub) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_config() {
                EXIT_USAGE
            } else {
                EXIT_RUNTIME
            }
        }
    }
}

fn path<'a>(m: &'a ArgMatches, name: &str) -> Option<&'a Path> {
    m.get_one::<PathBuf>(name).map(PathBuf::as_path)
}

fn required_path<'a>(m: &'a ArgMatches, name: &str) -> &'a Path {
    path(m, name).expect("clap enforces required paths")
}

/// Config file (or `base`), then command-line overrides, then validation.
fn resolve_config(m: &ArgMatches, base: RunConfig) -> Result<RunConfig> {
    let config = match path(m, "config") {
        Some(p) => RunConfig::load(p)?,
        None => base,
    };
    let overrides: Vec<(String, String)> = RunConfig::keys()
        .into_iter()
        .filter_map(|k| m.get_one::<String>(&k).map(|v| (k.clone(), v.clone())))
        .collect();
    let config = config.with_overrides(overrides.iter().map(|(k, v)| (k.as_str(), v.as_str())))?;
    config.validate()?;
    Ok(config)
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    File::create(path)
        .map(BufWriter::new)
        .map_err(|e| Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display()))))
}

fn write_json(path: &Path, value: &serde_json::Value) -> Result<()> {
    let mut out = create(path)?;
    serde_json::to_writer_pretty(&mut out, value)?;
    writeln!(out)?;
    out.flush()?;
    Ok(())
}

/// The run config embedded in any artifact: the `config` object of a JSON
/// file or the `# ` header of a text file.
pub fn artifact_config(path: &Path) -> Result<RunConfig> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display()))))?;
    if text.trim_start().starts_with('{') {
        let mut value: serde_json::Value = serde_json::from_str(&text)?;
        let config = value
            .get_mut("config")
            .map(serde_json::Value::take)
            .ok_or_else(|| Error::Schema(format!("{}: no config object", path.display())))?;
        Ok(serde_json::from_value(config)?)
    } else {
        RunConfig::from_header(&text)
    }
}

/// Loads a checkpoint and resolves the config on top of the one it was
/// trained with. Overrides that would change the network are rejected.
fn checkpoint_and_config(m: &ArgMatches) -> Result<(Checkpoint, RunConfig)> {
    let ckpt = Checkpoint::load(required_path(m, "checkpoint"))?;
    let config = resolve_config(m, ckpt.config.clone())?;
    let trained = &ckpt.config;
    let mut changed = Vec::new();
    if config.model != trained.model {
        changed.push("model");
    }
    if config.model_config() != trained.model_config() {
        changed.push("model shape");
    }
    if config.mlp_hidden != trained.mlp_hidden {
        changed.push("mlp_hidden");
    }
    if config.normalize != trained.normalize {
        changed.push("normalize");
    }
    if !changed.is_empty() {
        return Err(Error::Config(format!(
            "configuration differs from the checkpoint in: {}",
            changed.join(", ")
        )));
    }
    Ok((ckpt, config))
}

fn load_homes(m: &ArgMatches) -> Result<BTreeMap<String, MeterSeries>> {
    read_meter_file(required_path(m, "data"))
}

/// Split of the data file with the checkpoint's scaler.
fn checkpoint_split(m: &ArgMatches, ckpt: &Checkpoint, config: &RunConfig) -> Result<SplitData> {
    let mut data = split_data(&load_homes(m)?, config)?;
    data.scaler = ckpt.scaler.clone();
    Ok(data)
}

fn execute(name: &str, m: &ArgMatches) -> Result<i32> {
    match name {
        "synth" => synth(m),
        "train" => train(m),
        "evaluate" => evaluate(m),
        "predict" => predict(m),
        "sweep-threshold" => sweep_threshold(m),
        "sweep-history" => sweep_history(m),
        "gradcheck" => gradcheck(m),
        "bench-attention" => bench_attention(m),
        other => Err(Error::Config(format!("unknown command {other:?}"))),
    }
}

fn synth(m: &ArgMatches) -> Result<i32> {
    let config = resolve_config(m, RunConfig::default())?;
    let records = generate(&config.synth())?;
    let out = required_path(m, "out");
    write_meter_csv(&records, &config.header_lines(), create(out)?)?;
    println!("wrote {} records to {}", records.len(), out.display());
    Ok(EXIT_OK)
}

fn train(m: &ArgMatches) -> Result<i32> {
    let config = resolve_config(m, RunConfig::default())?;
    let data = split_data(&load_homes(m)?, &config)?;
    let (model, history) = fit_model(&config, &data)?;
    let out = required_path(m, "out");
    let ckpt = Checkpoint {
        config: config.clone(),
        model,
        scaler: data.scaler,
    };
    ckpt.save(out)?;
    let history_path = path(m, "history").map_or_else(
        || {
            let mut p = out.as_os_str().to_owned();
            p.push(".history.json");
            PathBuf::from(p)
        },
        Path::to_path_buf,
    );
    write_json(
        &history_path,
        &serde_json::json!({ "config": config.to_json(), "history": history }),
    )?;
    println!(
        "trained on {} windows ({} held out), best epoch {:?}; wrote {} and {}",
        history.train_windows,
        history.val_windows,
        history.best_epoch,
        out.display(),
        history_path.display()
    );
    Ok(EXIT_OK)
}

fn evaluate(m: &ArgMatches) -> Result<i32> {
    let (ckpt, config) = checkpoint_and_config(m)?;
    let data = checkpoint_split(m, &ckpt, &config)?;
    let (report, _) = evaluate_model(&ckpt.model, &config, &data)?;
    let doc = serde_json::json!({ "config": config.to_json(), "report": report });
    match path(m, "out") {
        Some(p) => write_json(p, &doc)?,
        None => println!("{}", serde_json::to_string_pretty(&doc)?),
    }
    if let Some(p) = path(m, "horizon-table") {
        write_horizon_csv(&report.per_horizon, &config.header_lines(), create(p)?)?;
    }
    eprintln!(
        "f1 {:.4}  acc {:.4}  auc {}  over {} predictions",
        report.f1,
        report.acc,
        report.auc.map_or("n/a".into(), |v| format!("{v:.4}")),
        report.n
    );
    Ok(EXIT_OK)
}

fn predict(m: &ArgMatches) -> Result<i32> {
    let (ckpt, config) = checkpoint_and_config(m)?;
    let homes = load_homes(m)?;
    let labeled = homes.values().all(MeterSeries::has_ev_load);
    let windows = inference_windows(&homes, &config, ckpt.scaler.as_ref())?;
    let probs = dctev::train::predict_windows(&ckpt.model, &windows)?;
    let horizon = ckpt.model.horizon();
    let out = required_path(m, "out");
    let mut w = create(out)?;
    for l in config.header_lines() {
        writeln!(w, "# {l}")?;
    }
    write!(w, "home_id,window_start,horizon_min,probability")?;
    writeln!(w, "{}", if labeled { ",label" } else { "" })?;
    for i in 0..windows.len() {
        let start = format_timestamp(&windows.start_time(i));
        for h in 0..horizon {
            write!(w, "{},{},{},{}", windows.home_id(i), start, h + 1, probs[i * horizon + h])?;
            if labeled {
                write!(w, ",{}", windows.target(i)[h])?;
            }
            writeln!(w)?;
        }
    }
    w.flush()?;
    println!("wrote {} rows to {}", probs.len(), out.display());
    Ok(EXIT_OK)
}

fn sweep_threshold(m: &ArgMatches) -> Result<i32> {
    let (ckpt, config) = checkpoint_and_config(m)?;
    let data = checkpoint_split(m, &ckpt, &config)?;
    let (_, preds) = evaluate_model(&ckpt.model, &config, &data)?;
    let grid = threshold_grid(config.threshold_grid_lo, config.threshold_grid_hi, config.threshold_grid_step)?;
    let sweep = threshold_sweep(&preds, &grid)?;
    let out = required_path(m, "out");
    write_sweep_csv(&sweep, &config.header_lines(), create(out)?)?;
    println!("best threshold {} with f1 {:.4}", sweep.best_threshold, sweep.best_f1);
    Ok(EXIT_OK)
}

fn sweep_history(m: &ArgMatches) -> Result<i32> {
    let config = resolve_config(m, RunConfig::default())?;
    let data = split_data(&load_homes(m)?, &config)?;
    let rows = history_length_sweep(&config, &data, &config.sweep_history_lens)?;
    let out = required_path(m, "out");
    write_history_csv(&rows, &config.header_lines(), create(out)?)?;
    for r in &rows {
        println!("T={:4}  N={:3}  f1 {:.4}  acc {:.4}", r.history_len, r.n_patches, r.f1, r.acc);
    }
    Ok(EXIT_OK)
}

fn gradcheck(m: &ArgMatches) -> Result<i32> {
    let config = resolve_config(m, RunConfig::default())?;
    let entries = gradcheck_suite(&config)?;
    let all_pass = entries.iter().all(|e| e.pass);
    for e in &entries {
        println!(
            "{}  {:<40} max rel error {:.3e} over {} coords",
            if e.pass { "ok  " } else { "FAIL" },
            e.name,
            e.max_rel_error,
            e.coords_checked
        );
    }
    if let Some(p) = path(m, "out") {
        write_json(
            p,
            &serde_json::json!({ "config": config.to_json(), "pass": all_pass, "checks": entries }),
        )?;
    }
    Ok(if all_pass { EXIT_OK } else { EXIT_RUNTIME })
}

fn bench_attention(m: &ArgMatches) -> Result<i32> {
    let config = resolve_config(m, RunConfig::default())?;
    let report = attention_cost_report(
        config.history_len,
        config.patch_len,
        config.patch_stride,
        config.d_model,
        config.n_heads,
        config.bench_repeats,
    )?;
    let doc = serde_json::json!({ "config": config.to_json(), "report": report });
    println!("{}", serde_json::to_string_pretty(&doc["report"])?);
    if let Some(p) = path(m, "out") {
        write_json(p, &doc)?;
    }
    Ok(EXIT_OK)
}
