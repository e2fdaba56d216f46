use std::path::{Path, PathBuf};
use std::process::ExitCode;

use candle_core::Device;
use clap::{Args, Parser, Subcommand};
use serde_json::{json, Value};

use slotphys::evaluation::{
    backbone_ari_fg, evaluate_model, evaluate_upper_bound, export_figures, summarize, ExampleGrid, MetricReport,
    Provenance,
};
use slotphys::experiments::{
    generate_dataset, merge_tables, rollout_for, run_experiment, CellStatus,
    ExperimentBundle, ExperimentSpec, Preset,
};
use slotphys::params::ParamStore;
use slotphys::rollout::{self, Variant};
use slotphys::savi::{self, FlowWindows, Savi};
use slotphys::scene::Dataset;
use slotphys::training::{encode_dataset, train_predictor, EncodedVideo, TrainingExample};
use slotphys::{Error, Result};

#[derive(Parser)]
#[command(name = "slotphys", version, about = "Object-centric video prediction with an embedded gravity engine")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// TOML configuration (experiment schema; unused sections are ignored).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Preset the configuration's overrides apply to.
    #[arg(long)]
    preset: Option<String>,
    /// Seed for the stage this command runs.
    #[arg(long)]
    seed: Option<u64>,
    /// Output path.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Render a synthetic dataset.
    GenerateData {
        #[command(flatten)]
        common: Common,
    },
    /// Train the slot encoder on flow reconstruction.
    TrainSavi {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
    },
    /// Train one prediction model on top of a frozen encoder.
    TrainPredictor {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        savi: PathBuf,
        /// Overrides `rollout.variant` from the configuration.
        #[arg(long)]
        variant: Option<String>,
    },
    /// Score prediction checkpoints on the test split.
    Evaluate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        savi: PathBuf,
        /// Prediction checkpoint directories; one report row per variant.
        #[arg(long, num_args = 1..)]
        ckpt: Vec<PathBuf>,
        /// Also score the encoder on the same frames.
        #[arg(long)]
        upper_bound: bool,
    },
    /// Run a whole experiment with caching and write its bundle.
    RunExperiment {
        #[command(flatten)]
        common: Common,
        /// Stage cache; defaults to `<out>/cache`.
        #[arg(long)]
        cache: Option<PathBuf>,
    },
    /// Join two experiment bundles into one comparison table.
    Report {
        first: PathBuf,
        second: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

fn load_spec(common: &Common) -> Result<ExperimentSpec> {
    let mut spec = match &common.config {
        Some(p) => ExperimentSpec::from_toml(&std::fs::read_to_string(p)?)?,
        None => ExperimentSpec::default(),
    };
    if let Some(p) = &common.preset {
        spec.preset = p.parse::<Preset>()?;
    }
    Ok(spec)
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)?;
        }
    }
    std::fs::write(path, serde_json::to_vec_pretty(value)?)?;
    Ok(())
}

fn examples(videos: &[EncodedVideo], ctx: usize, horizon: usize) -> Result<Vec<TrainingExample>> {
    videos.iter().map(|v| v.example(ctx, horizon)).collect()
}

fn gate(frozen: &Savi, videos: &[EncodedVideo], threshold: f64) -> Result<f64> {
    let score = backbone_ari_fg(frozen, videos)?;
    if score <= threshold {
        return Err(Error::Config(format!(
            "backbone gate failed: held-out ARI-FG {score:.3} does not exceed {threshold}"
        )));
    }
    Ok(score)
}

fn run(cli: Cli) -> Result<Value> {
    let device = Device::Cpu;
    match cli.command {
        Command::GenerateData { common } => {
            let mut spec = load_spec(&common)?;
            if let Some(s) = common.seed {
                spec.data.insert("seed".into(), toml::Value::Integer(s as i64));
            }
            let exp = spec.resolve()?;
            let manifest = generate_dataset(&exp.generator, &common.out)?;
            Ok(json!({
                "dataset": common.out,
                "samples": manifest.samples.len(),
                "train": manifest.splits.train.len(),
                "val": manifest.splits.val.len(),
                "test": manifest.splits.test.len(),
            }))
        }
        Command::TrainSavi { common, data } => {
            let mut spec = load_spec(&common)?;
            if let Some(s) = common.seed {
                spec.savi_optim.insert("seed".into(), toml::Value::Integer(s as i64));
            }
            let exp = spec.resolve()?;
            let dataset = Dataset::open(&data)?;
            let splits = &dataset.manifest.splits;
            let train = FlowWindows::load(&dataset, &splits.train, &exp.encoder, &device)?;
            let val = FlowWindows::load(&dataset, &splits.val, &exp.encoder, &device)?;
            let fresh = Savi::new(exp.encoder.clone(), ParamStore::seeded(exp.savi_optim.seed), &device)?;
            std::fs::create_dir_all(&common.out)?;
            let (frozen, report) =
                savi::train_savi(&fresh, &train, &val, &exp.savi_optim, Some(&common.out.join("curve.csv")))?;
            let meta = savi::save_checkpoint(&frozen, Some(&exp.savi_optim), Some(&report), &common.out)?;
            let val_videos = encode_dataset(&frozen, &dataset, &splits.val, false)?;
            let ari_fg = backbone_ari_fg(&frozen, &val_videos)?;
            Ok(json!({
                "checkpoint": common.out,
                "param_hash": meta.param_hash,
                "steps": report.steps,
                "best_val_loss": report.best_val_loss,
                "val_ari_fg": ari_fg,
            }))
        }
        Command::TrainPredictor { common, data, savi: savi_dir, variant } => {
            let mut spec = load_spec(&common)?;
            if let Some(s) = common.seed {
                spec.train.insert("seed".into(), toml::Value::Integer(s as i64));
            }
            let variant: Variant = match (variant, spec.rollout.get("variant")) {
                (Some(v), _) => v.parse()?,
                (None, Some(toml::Value::String(v))) => v.parse()?,
                (None, Some(_)) => return Err(Error::InvalidParam {
                    key: "variant".into(),
                    constraint: "must be a string".into(),
                }),
                (None, None) => Variant::Ours,
            };
            spec.rollout.remove("variant");
            let frozen = savi::load_frozen(&savi_dir, &device)?;
            let cfg = rollout_for(variant, frozen.config(), &spec.rollout)?;
            cfg.validate()?;
            let exp = spec.resolve()?;
            let dataset = Dataset::open(&data)?;
            let splits = &dataset.manifest.splits;
            let val_videos = encode_dataset(&frozen, &dataset, &splits.val, false)?;
            let score = gate(&frozen, &val_videos, exp.backbone_gate)?;
            let train_videos = encode_dataset(&frozen, &dataset, &splits.train, false)?;
            let train = examples(&train_videos, cfg.context_len, cfg.train_horizon)?;
            let val = examples(&val_videos, cfg.context_len, cfg.train_horizon)?;
            let outcome = train_predictor(&train, &val, &frozen, &cfg, &exp.train, Some(&common.out))?;
            Ok(json!({
                "checkpoint": outcome.checkpoint,
                "variant": variant.as_str(),
                "steps": outcome.summary.steps,
                "best_val_loss": outcome.summary.best_val_loss,
                "stopped_early": outcome.summary.stopped_early,
                "backbone_val_ari_fg": score,
            }))
        }
        Command::Evaluate { common, data, savi: savi_dir, ckpt, upper_bound } => {
            let spec = load_spec(&common)?;
            let exp = spec.resolve()?;
            let seed = common.seed.unwrap_or(0);
            let frozen = savi::load_frozen(&savi_dir, &device)?;
            let dataset = Dataset::open(&data)?;
            let test = encode_dataset(&frozen, &dataset, &dataset.manifest.splits.test, false)?;
            let mut models = Vec::new();
            for dir in &ckpt {
                let meta = rollout::read_checkpoint_meta(dir)?;
                models.push((dir.clone(), meta, rollout::load_checkpoint(dir, &device)?));
            }
            let (ctx, horizon) = match models.first() {
                Some((_, m, _)) => (m.config.context_len, m.config.eval_horizon),
                None => (6, 24),
            };
            let mut grid = match test.first() {
                Some(v) => {
                    let steps: Vec<usize> = exp.example_steps.iter().copied().filter(|&s| s <= horizon).collect();
                    Some(ExampleGrid::new(v, ctx, &steps)?)
                }
                None => None,
            };
            let mut rows = Vec::new();
            for (dir, meta, model) in &models {
                let eval = evaluate_model(model, &frozen, &test, meta.config.eval_horizon, exp.eval_batch_size, seed)?;
                let label = meta.config.variant.label();
                if let (Some(g), Some(segs)) = (grid.as_mut(), eval.example.as_ref()) {
                    g.add(label, segs)?;
                }
                let prov = vec![Provenance {
                    seed,
                    checkpoint: dir.display().to_string(),
                    config_hash: slotphys::experiments::content_hash(&meta.config)?,
                }];
                rows.push(summarize(label, Some(meta.config.variant), &[eval], prov)?);
            }
            if upper_bound {
                let ub = evaluate_upper_bound(&frozen, &test, ctx, horizon)?;
                if let (Some(g), Some(segs)) = (grid.as_mut(), ub.example.as_ref()) {
                    g.add("SAVi", segs)?;
                }
                let prov = vec![Provenance {
                    seed: 0,
                    checkpoint: savi_dir.display().to_string(),
                    config_hash: frozen.store().hash()?,
                }];
                rows.push(summarize("SAVi", None, &[ub], prov)?);
            }
            let report = MetricReport {
                context_len: ctx,
                horizon,
                num_samples: test.len(),
                rows,
                example: grid,
            };
            write_json(&common.out, &report)?;
            let fig_dir = common.out.with_extension("figures");
            export_figures(&report, &fig_dir)?;
            let summary: Vec<Value> = report
                .rows
                .iter()
                .map(|r| json!({"row": r.name, "miou": r.miou.mean, "miou_fg": r.miou_fg.mean, "ari": r.ari.mean, "ari_fg": r.ari_fg.mean}))
                .collect();
            Ok(json!({"report": common.out, "figures": fig_dir, "rows": summary}))
        }
        Command::RunExperiment { common, cache } => {
            let mut spec = load_spec(&common)?;
            if let Some(s) = common.seed {
                spec.seeds = vec![s];
            }
            let cache = cache.unwrap_or_else(|| common.out.join("cache"));
            let bundle = run_experiment(&spec, &cache, &common.out, &device)?;
            Ok(json!({
                "bundle": common.out,
                "config_hash": bundle.config_hash,
                "trained": bundle.count(CellStatus::Trained),
                "cached": bundle.count(CellStatus::Cached),
                "failed": bundle.count(CellStatus::Failed),
            }))
        }
        Command::Report { first, second, out } => {
            let a = ExperimentBundle::read(&first)?;
            let b = ExperimentBundle::read(&second)?;
            let table = merge_tables(&a, &b);
            if let Some(parent) = out.parent() {
                if !parent.as_os_str().is_empty() {
                    std::fs::create_dir_all(parent)?;
                }
            }
            std::fs::write(&out, &table)?;
            Ok(json!({"table": out, "rows": table.lines().filter(|l| l.starts_with("| ")).count() - 1}))
        }
    }
}

fn error_json(e: &Error) -> Value {
    let mut v = json!({"error": {"kind": e.kind(), "message": e.to_string()}});
    if let Error::InvalidParam { key, constraint } = e {
        v["error"]["key"] = json!(key);
        v["error"]["constraint"] = json!(constraint);
    }
    v
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let v = json!({"error": {"kind": "usage", "message": e.to_string().trim()}});
            eprintln!("{v}");
            return ExitCode::from(2);
        }
    };
    match run(cli) {
        Ok(v) => {
            println!("{v}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("{}", error_json(&e));
            ExitCode::from(if matches!(e, Error::InvalidParam { .. } | Error::Config(_)) { 2 } else { 1 })
        }
    }
}

