//! The `tinydet` command line: `gradcheck`, `synth`, `train-demo`, `eval`, `ablate`.
//!
//! Logs go to stderr, artifacts to files under `--out`, and stdout carries a
//! single summary line. Every run writes a manifest next to its outputs.
//! Exit status: 0 on success, 1 on a failed check or validation error, 2 on
//! a usage error.

use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::{evaluate, load_coco, load_detections, EvalResult};
use crate::gradsuite::{run_suite, Block, DEFAULT_EPSILON, DEFAULT_TOLERANCE};
use crate::pipeline::{ablate, generate_synthetic, small_target_ratio, train_demo, ClsLoss, Dataset, ModelConfig, SynthSpec, TrainConfig};
use crate::ENGINE_VERSION;

#[derive(Debug, Parser)]
#[command(name = "tinydet", version, about = "Desk-scale tiny-object detector toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Finite-difference gradient suites.
    Gradcheck(GradcheckArgs),
    /// Generate a synthetic dataset.
    Synth(SynthArgs),
    /// Train one model and evaluate it on the held-out split.
    TrainDemo(TrainArgs),
    /// COCO evaluation of a detections file.
    Eval(EvalArgs),
    /// Four-arm ablation over several seeds.
    Ablate(AblateArgs),
}

#[derive(Debug, Args)]
struct GradcheckArgs {
    /// conv, spd, okm, cspok, vfl, ciou, e2e, a comma list, or all.
    #[arg(long, default_value = "all")]
    block: String,
    #[arg(long, default_value_t = DEFAULT_TOLERANCE)]
    tol: f64,
    #[arg(long, default_value_t = DEFAULT_EPSILON)]
    epsilon: f64,
    #[arg(long, default_value_t = 20)]
    instances: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Report JSON path.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct SynthArgs {
    /// SynthSpec JSON file.
    #[arg(long)]
    spec: Option<PathBuf>,
    /// JSON file with a `synth` section.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    images: Option<usize>,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
}

/// Model and training overrides shared by `train-demo` and `ablate`.
#[derive(Debug, Args)]
struct ModelFlags {
    /// JSON file with optional `model`, `train` and `synth` sections.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    input_size: Option<usize>,
    #[arg(long, overrides_with = "no_spd")]
    spd: bool,
    #[arg(long, overrides_with = "spd")]
    no_spd: bool,
    #[arg(long, overrides_with = "no_cspok")]
    cspok: bool,
    #[arg(long, overrides_with = "cspok")]
    no_cspok: bool,
    /// vfl, focal or bce.
    #[arg(long)]
    cls_loss: Option<String>,
}

#[derive(Debug, Args)]
struct TrainArgs {
    #[command(flatten)]
    model: ModelFlags,
    /// Dataset directory; a synthetic one is generated when absent.
    #[arg(long)]
    data: Option<PathBuf>,
    /// SynthSpec JSON used when `--data` is absent.
    #[arg(long)]
    spec: Option<PathBuf>,
    /// Output directory.
    #[arg(long, default_value = "train-demo-out")]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct EvalArgs {
    /// Ground-truth COCO annotation file.
    #[arg(long)]
    gt: PathBuf,
    /// COCO results file.
    #[arg(long)]
    dets: PathBuf,
    /// EvalResult JSON path.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Also write the aligned text table here.
    #[arg(long)]
    table: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct AblateArgs {
    #[command(flatten)]
    model: ModelFlags,
    /// SynthSpec JSON describing the dataset.
    #[arg(long)]
    spec: Option<PathBuf>,
    /// Dataset directory, instead of `--spec`.
    #[arg(long, conflicts_with = "spec")]
    data: Option<PathBuf>,
    /// Comma-separated seeds.
    #[arg(long, default_value = "1,2,3", value_delimiter = ',')]
    seeds: Vec<u64>,
    /// Report JSON path; a text table goes next to it.
    #[arg(long, default_value = "ablation.json")]
    out: PathBuf,
}

/// Config file layout; every section is optional.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub synth: SynthSpec,
}

/// Record of one invocation, written next to its outputs.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunManifest {
    pub subcommand: String,
    pub config: serde_json::Value,
    pub seed: Option<u64>,
    pub engine_version: String,
    pub inputs: Vec<PathBuf>,
    pub outputs: Vec<PathBuf>,
    /// Milliseconds since the Unix epoch.
    pub started_ms: u128,
    pub finished_ms: u128,
}

fn now_ms() -> u128 {
    SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_millis())
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::parse(path.display().to_string(), e.to_string()))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let text = serde_json::to_string_pretty(value)?;
    std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// `dir/manifest.json` for directory outputs, `<stem>.manifest.json` beside file outputs.
fn manifest_path(out: &Path, is_dir: bool) -> PathBuf {
    if is_dir {
        out.join("manifest.json")
    } else {
        let stem = out.file_stem().map_or_else(|| "run".into(), |s| s.to_string_lossy().into_owned());
        out.with_file_name(format!("{stem}.manifest.json"))
    }
}

fn sibling(out: &Path, suffix: &str) -> PathBuf {
    let stem = out.file_stem().map_or_else(|| "run".into(), |s| s.to_string_lossy().into_owned());
    out.with_file_name(format!("{stem}{suffix}"))
}

struct Run {
    manifest: RunManifest,
}

impl Run {
    fn start(subcommand: &str, config: impl Serialize, seed: Option<u64>) -> Result<Self> {
        Ok(Run {
            manifest: RunManifest {
                subcommand: subcommand.into(),
                config: serde_json::to_value(config)?,
                seed,
                engine_version: ENGINE_VERSION.into(),
                inputs: Vec::new(),
                outputs: Vec::new(),
                started_ms: now_ms(),
                finished_ms: 0,
            },
        })
    }

    fn finish(mut self, path: &Path) -> Result<()> {
        self.manifest.finished_ms = now_ms();
        write_json(path, &self.manifest)
    }
}

fn load_run_config(path: Option<&Path>) -> Result<RunConfig> {
    match path {
        Some(p) => read_json(p),
        None => Ok(RunConfig::default()),
    }
}

impl ModelFlags {
    fn resolve(&self) -> Result<RunConfig> {
        let mut cfg = load_run_config(self.config.as_deref())?;
        if let Some(s) = self.seed {
            cfg.model.seed = s;
        }
        if let Some(e) = self.epochs {
            cfg.train.epochs = e;
        }
        if let Some(lr) = self.lr {
            cfg.train.lr = lr;
        }
        if let Some(size) = self.input_size {
            cfg.model.input_size = size;
            cfg.synth.image_size = size;
        }
        if self.spd {
            cfg.model.spd_enabled = true;
        }
        if self.no_spd {
            cfg.model.spd_enabled = false;
        }
        if self.cspok {
            cfg.model.cspok_enabled = true;
        }
        if self.no_cspok {
            cfg.model.cspok_enabled = false;
        }
        if let Some(l) = &self.cls_loss {
            cfg.model.cls_loss = l.parse::<ClsLoss>().map_err(|_| Error::Usage(format!("unknown --cls-loss {l:?} (vfl, focal, bce)")))?;
        }
        cfg.model.validate()?;
        cfg.train.validate()?;
        Ok(cfg)
    }
}

/// Dataset from `--data`, else generated from `--spec`, else from the config's synth section.
fn obtain_dataset(data: Option<&Path>, spec: Option<&Path>, cfg: &mut RunConfig, inputs: &mut Vec<PathBuf>) -> Result<Dataset> {
    if let Some(dir) = data {
        inputs.push(dir.to_path_buf());
        return Dataset::load(dir);
    }
    if let Some(p) = spec {
        inputs.push(p.to_path_buf());
        cfg.synth = read_json(p)?;
    }
    generate_synthetic(&cfg.synth)
}

fn check_classes(cfg: &mut RunConfig, data: &Dataset) {
    cfg.model.num_classes = data.coco.categories.len();
}

fn cmd_gradcheck(a: &GradcheckArgs) -> Result<bool> {
    let blocks = Block::parse_list(&a.block)?;
    if a.instances == 0 {
        return Err(Error::Usage("--instances must be positive".into()));
    }
    let mut run = Run::start("gradcheck", (&a.block, a.tol, a.epsilon, a.instances), Some(a.seed))?;
    let mut reports = Vec::new();
    for b in blocks {
        let r = run_suite(b, a.instances, a.seed, a.epsilon, a.tol)?;
        eprintln!(
            "{:<6} {}  {}/{} instances  max_rel_err {:.3e}",
            b.name(),
            if r.pass { "PASS" } else { "FAIL" },
            r.passed,
            r.instances,
            r.max_rel_err
        );
        reports.push(r);
    }
    let ok = reports.iter().all(|r| r.pass);
    let passed = reports.iter().filter(|r| r.pass).count();
    if let Some(out) = &a.out {
        write_json(out, &reports)?;
        run.manifest.outputs.push(out.clone());
        run.finish(&manifest_path(out, false))?;
    }
    println!("gradcheck: {passed}/{} blocks passed at tol {:e}", reports.len(), a.tol);
    Ok(ok)
}

fn cmd_synth(a: &SynthArgs) -> Result<bool> {
    let mut cfg = load_run_config(a.config.as_deref())?;
    let mut inputs = Vec::new();
    if let Some(p) = &a.spec {
        cfg.synth = read_json(p)?;
        inputs.push(p.clone());
    }
    if let Some(s) = a.seed {
        cfg.synth.seed = s;
    }
    if let Some(n) = a.images {
        cfg.synth.images = n;
    }
    let mut run = Run::start("synth", &cfg.synth, Some(cfg.synth.seed))?;
    run.manifest.inputs = inputs;
    let data = generate_synthetic(&cfg.synth)?;
    data.write(&a.out)?;
    run.manifest.outputs.push(a.out.clone());
    run.finish(&manifest_path(&a.out, true))?;
    println!(
        "synth: {} images, {} targets, small ratio {:.3} -> {}",
        data.len(),
        data.coco.annotations.len(),
        small_target_ratio(&data.coco),
        a.out.display()
    );
    Ok(true)
}

fn cmd_train(a: &TrainArgs) -> Result<bool> {
    let mut cfg = a.model.resolve()?;
    let mut inputs = Vec::new();
    let data = obtain_dataset(a.data.as_deref(), a.spec.as_deref(), &mut cfg, &mut inputs)?;
    check_classes(&mut cfg, &data);
    let mut run = Run::start("train-demo", &cfg, Some(cfg.model.seed))?;
    run.manifest.inputs = inputs;
    let out = train_demo(&cfg.model, &data, &cfg.train)?;
    std::fs::create_dir_all(&a.out).map_err(|e| Error::io(&a.out, e))?;
    let history = a.out.join("history.json");
    let eval = a.out.join("eval.json");
    write_json(&history, &out.history)?;
    write_json(&eval, &out.final_eval)?;
    run.manifest.outputs.extend([history, eval]);
    run.finish(&manifest_path(&a.out, true))?;
    let last = out.history.last().map_or(f64::NAN, |r| r.loss);
    println!(
        "train-demo: {} epochs, final loss {last:.4}, mAP.5 {:.3}, mAP.5:.95 {:.3} -> {}",
        out.history.len(),
        out.final_eval.map_50,
        out.final_eval.map_50_95,
        a.out.display()
    );
    Ok(true)
}

fn cmd_eval(a: &EvalArgs) -> Result<bool> {
    let mut run = Run::start("eval", (&a.gt, &a.dets), None)?;
    run.manifest.inputs = vec![a.gt.clone(), a.dets.clone()];
    let gt = load_coco(&a.gt)?;
    let image_ids: std::collections::BTreeSet<u64> = gt.images.iter().map(|i| i.id).collect();
    let dets: Vec<_> = load_detections(&a.dets)?.into_iter().filter(|d| image_ids.contains(&d.image_id)).collect();
    let result = evaluate(&dets, &gt.box_annotations(), &gt.categories)?;
    let table = EvalResult::table([("detections", &result)]);
    eprint!("{table}");
    if let Some(t) = &a.table {
        write_text(t, &table)?;
        run.manifest.outputs.push(t.clone());
    }
    if let Some(out) = &a.out {
        write_json(out, &result)?;
        run.manifest.outputs.push(out.clone());
        run.finish(&manifest_path(out, false))?;
    }
    let fmt = |v: Option<f64>| v.map_or_else(|| "-".into(), |x| format!("{x:.3}"));
    println!(
        "eval: mAP.5:.95 {:.3}, mAP.5 {:.3}, AP_small {}",
        result.map_50_95,
        result.map_50,
        fmt(result.ap_small)
    );
    Ok(true)
}

fn cmd_ablate(a: &AblateArgs) -> Result<bool> {
    let mut cfg = a.model.resolve()?;
    if a.seeds.is_empty() {
        return Err(Error::Usage("--seeds needs at least one value".into()));
    }
    let mut inputs = Vec::new();
    let data = obtain_dataset(a.data.as_deref(), a.spec.as_deref(), &mut cfg, &mut inputs)?;
    check_classes(&mut cfg, &data);
    let mut run = Run::start("ablate", (&cfg, &a.seeds), a.seeds.first().copied())?;
    run.manifest.inputs = inputs;
    let report = ablate(&data, &cfg.model, &cfg.train, &a.seeds)?;
    let table = report.table();
    eprint!("{table}");
    write_json(&a.out, &report)?;
    let table_path = sibling(&a.out, ".txt");
    write_text(&table_path, &table)?;
    run.manifest.outputs.extend([a.out.clone(), table_path]);
    run.finish(&manifest_path(&a.out, false))?;
    println!("ablate: {} arms x {} seeds -> {}", report.rows.len(), a.seeds.len(), a.out.display());
    Ok(true)
}

/// Runs the command line; returns the process exit status.
pub fn run<I, S>(argv: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .target(env_logger::Target::Stderr)
        .try_init();
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    let outcome = match &cli.command {
        Command::Gradcheck(a) => cmd_gradcheck(a),
        Command::Synth(a) => cmd_synth(a),
        Command::TrainDemo(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Ablate(a) => cmd_ablate(a),
    };
    match outcome {
        Ok(true) => 0,
        Ok(false) => 1,
        Err(e @ Error::Usage(_)) => {
            eprintln!("error: {e}");
            2
        }
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}
