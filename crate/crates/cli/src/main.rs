//! `aether`: generate datasets, train models, evaluate forecasts and export
//! learned fields.
//!
//! Exit codes: 0 success, 2 configuration error, 3 numerical divergence,
//! 4 I/O or malformed file.

mod config;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use aether_core::eval::{
    dataset_positions, dynamic_field_recovery, evaluate, field_grid_export, static_field_recovery, EvalOptions,
    GridSpec,
};
use aether_core::field::aggregate_latent;
use aether_core::gnn::{Batch, Model, Variant};
use aether_core::par::{init_threads_from_env, Exec};
use aether_core::simulate::{generate_dataset, Dataset, Manifest, SimConfig, Setting, Split};
use aether_core::train::fit;
use aether_core::{Error, Result};
use clap::{Args, Parser, Subcommand};
use config::RunConfig;

#[derive(Parser)]
#[command(name = "aether", version, about = "Latent force-field discovery for particle systems")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate train/val/test splits and write a manifest.
    Gen(GenArgs),
    /// Fit a model; writes the checkpoint, CSV log and resolved config.
    Train(TrainArgs),
    /// Roll a checkpoint out on a dataset split and write metrics JSON.
    Eval(EvalArgs),
    /// Export a learned field on a grid, optionally scoring it against the
    /// simulator's field.
    Field(FieldArgs),
}

#[derive(Args)]
struct GenArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, value_parser = parse_setting)]
    setting: Option<Setting>,
    #[arg(long)]
    train: Option<usize>,
    #[arg(long)]
    val: Option<usize>,
    #[arg(long)]
    test: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Number of field sources.
    #[arg(long)]
    sources: Option<usize>,
    /// Use the printed Coulomb sign (like charges attract).
    #[arg(long)]
    paper_sign: bool,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long, value_parser = parse_variant)]
    variant: Option<Variant>,
    /// Dataset directory (overrides the config).
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<usize>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long, default_value = "test", value_parser = parse_split)]
    split: Split,
    #[arg(long)]
    burn_in: Option<usize>,
    #[arg(long)]
    horizon: Option<usize>,
    #[arg(long)]
    max_sims: Option<usize>,
    /// Output directory; receives `metrics.json`.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct FieldArgs {
    #[arg(long)]
    ckpt: PathBuf,
    /// Grid points per axis.
    #[arg(long, default_value_t = 64)]
    grid: usize,
    /// Half-width of the square grid.
    #[arg(long, default_value_t = 4.0)]
    extent: f64,
    /// CSV destination; recovery stats go next to it.
    #[arg(long)]
    out: PathBuf,
    /// Dataset directory: supplies latent codes and groundtruth sources.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Test simulation whose latent code conditions a dynamic field.
    #[arg(long, default_value_t = 0)]
    sim: usize,
    /// Score the field against the simulator (needs `--data`).
    #[arg(long)]
    recovery: bool,
    /// Support radius around observed positions.
    #[arg(long, default_value_t = 0.5)]
    rho: f64,
    /// Test simulations scored for a dynamic field.
    #[arg(long, default_value_t = 100)]
    max_sims: usize,
}

fn parse_setting(s: &str) -> std::result::Result<Setting, String> {
    Setting::parse(s).ok_or_else(|| format!("unknown setting {s:?}"))
}

fn parse_variant(s: &str) -> std::result::Result<Variant, String> {
    Variant::parse(s).ok_or_else(|| format!("unknown variant {s:?}"))
}

fn parse_split(s: &str) -> std::result::Result<Split, String> {
    Split::ALL
        .into_iter()
        .find(|x| x.name() == s)
        .ok_or_else(|| format!("unknown split {s:?}"))
}

/// `Sequential` when `AETHER_THREADS=1`, so single-threaded runs never touch
/// the pool.
fn exec() -> Exec {
    match std::env::var("AETHER_THREADS").ok().and_then(|v| v.trim().parse::<usize>().ok()) {
        Some(1) => Exec::Sequential,
        _ => Exec::available(),
    }
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Divergence { .. } | Error::Singularity(_) => 3,
        Error::Io(_) | Error::Format(_) => 4,
        _ => 2,
    }
}

fn load_split(dir: &Path, split: Split) -> Result<Dataset> {
    let manifest = Manifest::read(dir)?;
    let path = manifest
        .path_of(dir, split)
        .ok_or_else(|| Error::Format(format!("manifest lists no {} split", split.name())))?;
    Dataset::read(&path)
}

fn required<'a>(flag: Option<&'a PathBuf>, file: Option<&'a PathBuf>, what: &str) -> Result<&'a PathBuf> {
    flag.or(file)
        .ok_or_else(|| Error::Config(format!("no {what} given (flag or config)")))
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> Result<()> {
    std::fs::write(path, serde_json::to_string_pretty(value)? + "\n")?;
    Ok(())
}

fn cmd_gen(a: &GenArgs) -> Result<()> {
    let run = a.config.as_deref().map(RunConfig::read).transpose()?.unwrap_or_default();
    let mut cfg = match (run.sim.clone(), a.setting) {
        (Some(c), Some(s)) if c.setting != s => {
            return Err(Error::Config(format!(
                "--setting {} disagrees with the configured {}",
                s.name(),
                c.setting.name()
            )))
        }
        (Some(c), _) => c,
        (None, s) => SimConfig::for_setting(s.unwrap_or(Setting::Electrostatic)),
    };
    if let Some(v) = a.train {
        cfg.counts.train = v;
    }
    if let Some(v) = a.val {
        cfg.counts.val = v;
    }
    if let Some(v) = a.test {
        cfg.counts.test = v;
    }
    if let Some(v) = a.seed {
        cfg.seed = v;
    }
    if let Some(v) = a.sources {
        cfg.m = v;
    }
    if a.paper_sign {
        cfg.sign_convention = 1.0;
    }
    let out = required(a.out.as_ref(), run.out.as_ref(), "output directory")?;
    let manifest = generate_dataset(&cfg, out, exec())?;
    for f in &manifest.files {
        println!("{:<5} {:>6} sims  {}  {}", f.split.name(), f.num_sims, f.hash, f.path);
    }
    println!(
        "distinct source sets {}, source spread {:.4}",
        manifest.stats.distinct_source_sets, manifest.stats.source_position_spread
    );
    Ok(())
}

fn cmd_train(a: &TrainArgs) -> Result<()> {
    let mut run = RunConfig::read(&a.config)?;
    if let Some(e) = a.epochs {
        run.train.epochs = e;
    }
    let data = required(a.data.as_ref(), run.data.as_ref(), "dataset directory")?.clone();
    let out = required(a.out.as_ref(), run.out.as_ref(), "output directory")?.clone();
    let train = load_split(&data, Split::Train)?;
    let val = load_split(&data, Split::Val)?;
    let model_cfg = run.resolve_model(train.header.setting, a.variant)?;
    run.variant = Some(model_cfg.variant);
    run.model = Some(model_cfg.clone());
    run.data = Some(data);
    run.out = Some(out.clone());
    std::fs::create_dir_all(&out)?;
    write_json(&out.join("resolved_config.json"), &run)?;
    let model = Model::new(model_cfg)?;
    let fitted = fit(&run.train, model, &train, &val, exec(), Some(&out))?;
    println!(
        "{}: best val_mse {:.6} at epoch {} ({} epochs) -> {}",
        fitted.best.cfg.variant.name(),
        fitted.best_val,
        fitted.best_epoch,
        fitted.log.len(),
        out.display()
    );
    Ok(())
}

fn cmd_eval(a: &EvalArgs) -> Result<()> {
    let run = a.config.as_deref().map(RunConfig::read).transpose()?.unwrap_or_default();
    for (name, flag, file) in [
        ("horizon", a.horizon, run.eval.horizon),
        ("burn-in", a.burn_in, run.eval.burn_in),
    ] {
        if let (Some(f), Some(c)) = (flag, file) {
            if f != c {
                return Err(Error::Config(format!("--{name} {f} disagrees with the config's {c}")));
            }
        }
    }
    let data = required(a.data.as_ref(), run.data.as_ref(), "dataset directory")?;
    let ds = load_split(data, a.split)?;
    let (model, _) = Model::load(&a.ckpt)?;
    let mut opts = EvalOptions::for_dataset(&ds);
    opts.seed = run.eval.seed;
    opts.max_sims = a.max_sims.or(run.eval.max_sims);
    if let Some(b) = a.burn_in.or(run.eval.burn_in) {
        opts.burn_in = b;
        opts.horizon = ds.positions.dim().1.saturating_sub(b);
    }
    if let Some(h) = a.horizon.or(run.eval.horizon) {
        opts.horizon = h;
    }
    let report = evaluate(&model, &ds, &opts, exec())?;
    std::fs::create_dir_all(&a.out)?;
    let path = a.out.join("metrics.json");
    std::fs::write(&path, report.to_json()?)?;
    let scalars: Vec<String> = report.mse.iter().map(|(k, v)| format!("{k} {v:.6}")).collect();
    println!("{} on {} sims: {} -> {}", report.variant, report.num_sims, scalars.join(", "), path.display());
    Ok(())
}

fn cmd_field(a: &FieldArgs) -> Result<()> {
    let (model, _) = Model::load(&a.ckpt)?;
    if model.field.is_none() {
        return Err(Error::Config(format!("variant {} has no field", model.cfg.variant.name())));
    }
    let grid = GridSpec::square(model.cfg.d, a.grid, a.extent);
    let test = a.data.as_deref().map(|d| load_split(d, Split::Test)).transpose()?;
    let z = match (&model.aggregator, &test) {
        (None, _) => None,
        (Some(agg), Some(ds)) => {
            if a.sim >= ds.len() {
                return Err(Error::InvalidInput(format!("--sim {} but the test split has {}", a.sim, ds.len())));
            }
            let window = model.cfg.aggregator.map_or(1, |c| c.window).min(ds.positions.dim().1);
            let batch = Batch::from_dataset(ds, &[a.sim], 0..window)?;
            Some(aggregate_latent(&model.params, agg, &batch.states)?)
        }
        (Some(_), None) => return Err(Error::Config("a dynamic field needs --data for its latent code".into())),
    };
    if let Some(dir) = a.out.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    field_grid_export(&model, &grid, z.as_deref(), &a.out)?;
    println!("{} grid points -> {}", a.grid.pow(model.cfg.d as u32), a.out.display());
    if a.recovery {
        let dir = a
            .data
            .as_deref()
            .ok_or_else(|| Error::Config("--recovery needs --data".into()))?;
        let test = test.expect("loaded with --data");
        let rec = if model.aggregator.is_some() {
            dynamic_field_recovery(&model, &test, &grid, a.rho, Some(a.max_sims), exec())?
        } else {
            let train = load_split(dir, Split::Train)?;
            static_field_recovery(&model, &train.external_field(0), &grid, &dataset_positions(&train), a.rho)?
        };
        let path = a.out.with_extension("recovery.json");
        write_json(&path, &rec)?;
        println!(
            "median cosine {:.4} over {} support points -> {}",
            rec.median_cosine,
            rec.support_points,
            path.display()
        );
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    init_threads_from_env();
    let result = match &cli.command {
        Command::Gen(a) => cmd_gen(a),
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Field(a) => cmd_field(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
