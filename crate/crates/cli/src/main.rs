use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use serde_json::Value;

use ral_core::ablation::{self, AblationConfig};
use ral_core::autodiff::inject_backward_sign_flip;
use ral_core::checkpoint::{load_model, load_trainer, save_trainer};
use ral_core::data::{ingest_lrw_layout, synth_splits, write_layout, Dataset, Split, SynthSpec};
use ral_core::gradcheck::{full_suite, GradCheckConfig};
use ral_core::model::{RalConfig, RalModel};
use ral_core::train::{evaluate, EpochStats, TrainConfig, Trainer};

mod error;
use error::{CliError, CliResult};

#[derive(Parser)]
#[command(name = "ral", version, about = "Train and check symmetric-view lipreading models")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    #[command(flatten)]
    common: Common,
}

#[derive(Args, Clone)]
struct Common {
    /// JSON run configuration; missing keys take defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory for the run record.
    #[arg(long, global = true, default_value = "run")]
    out: PathBuf,
    /// Dotted-path override, e.g. `train.epochs=5`. Applied after the file.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Finite-difference check of every op and the tiny end-to-end model.
    Gradcheck {
        /// Per-op relative error tolerance.
        #[arg(long)]
        tolerance: Option<f64>,
        #[arg(long)]
        e2e_tolerance: Option<f64>,
        /// Negate the backward rule of this op.
        #[arg(long, hide = true)]
        inject_fault: Option<String>,
    },
    /// Train on the synthetic task or an ingested dataset.
    Train {
        /// Continue from the checkpoint in `--out`.
        #[arg(long)]
        resume: bool,
        /// Stop after this many epochs in this invocation.
        #[arg(long, hide = true)]
        stop_after: Option<usize>,
        /// `diverge` sets an absurd learning rate.
        #[arg(long, hide = true)]
        inject_fault: Option<String>,
    },
    /// Accuracy of a checkpoint on the validation split.
    Eval {
        /// Checkpoint directory; defaults to `<out>/checkpoint`.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Train every ablation row under every seed.
    Ablate,
    /// Write a synthetic dataset as clip files plus a manifest.
    Generate,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct RunConfig {
    seed: u64,
    model: RalConfig,
    synth: SynthSpec,
    train_size: usize,
    val_size: usize,
    /// Manifest of an ingested dataset; its directory is the dataset root.
    data: Option<PathBuf>,
    train: TrainConfig,
    /// Seeds of the ablation sweep.
    seeds: Vec<u64>,
    gradcheck: GradCheckConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        let a = AblationConfig::default();
        Self {
            seed: 0,
            model: a.model,
            synth: a.synth,
            train_size: a.train_size,
            val_size: a.val_size,
            data: None,
            train: a.train,
            seeds: a.seeds,
            gradcheck: GradCheckConfig::default(),
        }
    }
}

fn apply_override(root: &mut Value, spec: &str) -> CliResult<()> {
    let (key, raw) = spec
        .split_once('=')
        .ok_or_else(|| CliError::Usage(format!("override {spec:?} is not KEY=VALUE")))?;
    let mut node = root;
    for part in key.split('.') {
        node = node
            .get_mut(part)
            .ok_or_else(|| CliError::Usage(format!("unknown config key {key:?}")))?;
    }
    *node = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    Ok(())
}

fn resolve(common: &Common) -> CliResult<RunConfig> {
    let base: RunConfig = match &common.config {
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| CliError::Io(p.clone(), e))?;
            serde_json::from_str(&text).map_err(|e| CliError::Usage(format!("{}: {e}", p.display())))?
        }
        None => RunConfig::default(),
    };
    let mut v = serde_json::to_value(&base).map_err(|e| CliError::Usage(e.to_string()))?;
    if let Some(seed) = common.seed {
        v["seed"] = seed.into();
    }
    for o in &common.overrides {
        apply_override(&mut v, o)?;
    }
    let cfg: RunConfig = serde_json::from_value(v).map_err(|e| CliError::Usage(format!("config: {e}")))?;
    cfg.model.validate()?;
    cfg.train.validate()?;
    Ok(cfg)
}

fn write_json(path: &Path, v: &impl Serialize) -> CliResult<()> {
    let text = serde_json::to_string_pretty(v).map_err(|e| CliError::Usage(e.to_string()))?;
    fs::write(path, text + "\n").map_err(|e| CliError::Io(path.to_path_buf(), e))
}

/// Records the resolved config. Evaluation gets its own file so that it does
/// not overwrite the record of the training run in the same directory.
fn prepare_out(out: &Path, cfg: &RunConfig, eval: bool) -> CliResult<()> {
    fs::create_dir_all(out).map_err(|e| CliError::Io(out.to_path_buf(), e))?;
    let name = if eval { "eval_config.json" } else { "config.json" };
    write_json(&out.join(name), cfg)
}

fn load_data(cfg: &RunConfig) -> CliResult<(Dataset, Dataset)> {
    let k = cfg.model.num_classes;
    match &cfg.data {
        Some(manifest) => {
            let root = manifest.parent().unwrap_or(Path::new("."));
            let ds = ingest_lrw_layout(root, manifest)?;
            let train = ds.split(Split::Train, k)?;
            let mut val = ds.split(Split::Val, k)?;
            if val.is_empty() {
                val = ds.split(Split::Test, k)?;
            }
            Ok((train, val))
        }
        None => {
            if cfg.synth.num_classes != k {
                return Err(CliError::Usage(format!(
                    "synth.num_classes = {} but model.num_classes = {k}",
                    cfg.synth.num_classes
                )));
            }
            Ok(synth_splits(&cfg.synth, cfg.train_size, cfg.val_size)?)
        }
    }
}

fn cmd_gradcheck(
    cfg: &RunConfig,
    out: &Path,
    tolerance: Option<f64>,
    e2e_tolerance: Option<f64>,
    fault: Option<String>,
) -> CliResult<()> {
    let mut gc = cfg.gradcheck.clone();
    if let Some(t) = tolerance {
        gc.tolerance = t;
    }
    if let Some(t) = e2e_tolerance {
        gc.e2e_tolerance = t;
    }
    inject_backward_sign_flip(fault.as_deref());
    let reports = full_suite(&gc)?;
    inject_backward_sign_flip(None);
    let mut failed = Vec::new();
    for r in &reports {
        let status = if r.passed() { "ok" } else { "FAIL" };
        print!("{:<22} {:>10.3e} < {:<8.1e} {status}", r.name, r.max_rel_err, r.tolerance);
        if let (false, Some(w)) = (r.passed(), &r.worst) {
            print!(
                "  worst: input {} element {} analytic {:.6e} numeric {:.6e}",
                w.input, w.element, w.analytic, w.numeric
            );
        }
        println!();
        if !r.passed() {
            failed.push(r.name.clone());
        }
    }
    write_json(&out.join("gradcheck.json"), &reports)?;
    if failed.is_empty() {
        println!("{} checks passed", reports.len());
        Ok(())
    } else {
        Err(CliError::Check(format!("gradient check failed for {}", failed.join(", "))))
    }
}

fn metrics_line(s: &EpochStats) -> String {
    serde_json::to_string(s).expect("stats serialize")
}

fn cmd_train(cfg: &RunConfig, out: &Path, resume: bool, stop_after: Option<usize>, fault: Option<String>) -> CliResult<()> {
    let ckpt = out.join("checkpoint");
    let metrics = out.join("metrics.jsonl");
    let (train, val) = load_data(cfg)?;
    let mut trainer = if resume {
        let t = load_trainer(&ckpt)?;
        if t.model.config() != &cfg.model {
            return Err(CliError::Usage("checkpoint model config differs from the run config".into()));
        }
        t
    } else {
        let mut tc = TrainConfig {
            seed: cfg.seed,
            ..cfg.train.clone()
        };
        if fault.as_deref() == Some("diverge") {
            tc.adam.lr = 1e30;
        }
        Trainer::new(RalModel::new(&cfg.model, cfg.seed)?, tc)?
    };
    let lines: String = trainer.history.iter().map(|s| metrics_line(s) + "\n").collect();
    fs::write(&metrics, lines).map_err(|e| CliError::Io(metrics.clone(), e))?;

    let budget = stop_after.unwrap_or(usize::MAX);
    let mut ran = 0;
    while !trainer.done() && ran < budget {
        let s = trainer.train_epoch(&train, Some(&val))?;
        ran += 1;
        println!(
            "epoch {:>3}  loss {:.4}  train {:.3}  val {:.3}  lr {:.3e}",
            s.epoch,
            s.loss,
            s.train_acc,
            s.val_acc.unwrap_or(f64::NAN),
            s.lr
        );
        let mut f = fs::OpenOptions::new()
            .append(true)
            .open(&metrics)
            .map_err(|e| CliError::Io(metrics.clone(), e))?;
        writeln!(f, "{}", metrics_line(&s)).map_err(|e| CliError::Io(metrics.clone(), e))?;
        save_trainer(&ckpt, &trainer)?;
    }
    Ok(())
}

fn cmd_eval(cfg: &RunConfig, out: &Path, checkpoint: Option<PathBuf>) -> CliResult<()> {
    let dir = checkpoint.unwrap_or_else(|| out.join("checkpoint"));
    let model = load_model(&dir)?;
    let (_, val) = load_data(&RunConfig {
        model: model.config().clone(),
        ..cfg.clone()
    })?;
    let acc = evaluate(&model, &val, cfg.train.batch_size, cfg.train.preprocess.as_ref())?;
    println!("accuracy {acc:.4} on {} clips", val.len());
    write_json(
        &out.join("eval.json"),
        &serde_json::json!({ "checkpoint": dir, "accuracy": acc, "clips": val.len() }),
    )
}

fn cmd_ablate(cfg: &RunConfig, out: &Path) -> CliResult<()> {
    let acfg = AblationConfig {
        synth: cfg.synth.clone(),
        train_size: cfg.train_size,
        val_size: cfg.val_size,
        model: cfg.model.clone(),
        train: cfg.train.clone(),
        seeds: cfg.seeds.clone(),
    };
    let report = ablation::run(&acfg, |r| {
        println!("{:<14} seed {:<3} val {:.3}  {:.0}s", r.row, r.seed, r.val_acc, r.seconds);
    })?;
    let table = report.to_markdown();
    print!("{table}");
    println!(
        "wall {:.0}s on {} threads; projected {:.0}s on 4",
        report.wall_seconds,
        rayon::current_num_threads(),
        report.projected_seconds(4)
    );
    let path = out.join("ablation.md");
    fs::write(&path, &table).map_err(|e| CliError::Io(path, e))?;
    write_json(&out.join("ablation.json"), &report)
}

fn cmd_generate(cfg: &RunConfig, out: &Path) -> CliResult<()> {
    let (train, val) = synth_splits(&cfg.synth, cfg.train_size, cfg.val_size)?;
    let clips: Vec<_> = train
        .samples
        .iter()
        .map(|s| (Split::Train, s))
        .chain(val.samples.iter().map(|s| (Split::Val, s)))
        .collect();
    let manifest = write_layout(out, &clips)?;
    println!("wrote {} clips, manifest {}", clips.len(), manifest.display());
    Ok(())
}

fn set_threads() -> CliResult<()> {
    if let Ok(v) = std::env::var("RAL_THREADS") {
        let n: usize = v
            .parse()
            .map_err(|_| CliError::Usage(format!("RAL_THREADS={v:?} is not a count")))?;
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::Usage(e.to_string()))?;
    }
    Ok(())
}

fn run(cli: Cli) -> CliResult<()> {
    set_threads()?;
    let cfg = resolve(&cli.common)?;
    let out = cli.common.out.as_path();
    prepare_out(out, &cfg, matches!(cli.command, Command::Eval { .. }))?;
    match cli.command {
        Command::Gradcheck {
            tolerance,
            e2e_tolerance,
            inject_fault,
        } => cmd_gradcheck(&cfg, out, tolerance, e2e_tolerance, inject_fault),
        Command::Train {
            resume,
            stop_after,
            inject_fault,
        } => cmd_train(&cfg, out, resume, stop_after, inject_fault),
        Command::Eval { checkpoint } => cmd_eval(&cfg, out, checkpoint),
        Command::Ablate => cmd_ablate(&cfg, out),
        Command::Generate => cmd_generate(&cfg, out),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
