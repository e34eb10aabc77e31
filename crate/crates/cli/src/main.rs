use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::{json, Value};

use rstn_core::baseline::stagewise_train;
use rstn_core::harness::{
    crossval, evaluate_saved, load_joint, load_stagewise, report_emit, save_joint, save_stagewise,
    ExperimentConfig, Method, ReportFormat,
};
use rstn_core::inference::{run_pipeline, ViewModel};
use rstn_core::rstn::{train, unrolled_gradcheck, ReferenceMode, FD_STEP};
use rstn_core::synthgen::{generate_corpus, load_corpus, write_corpus, PhantomSpec};
use rstn_core::volume::rvol;

/// Gradient checks pass at or below this relative error.
const GRADCHECK_TOLERANCE: f64 = 1e-4;

#[derive(Parser)]
#[command(
    name = "rstn",
    version,
    about = "Recurrent saliency transformation networks on phantom volumes"
)]
struct Cli {
    /// JSON config: a phantom spec for `synthgen`, an experiment config otherwise.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a phantom corpus.
    Synthgen {
        #[arg(long, default_value_t = 48)]
        count: usize,
    },
    /// Train on the whole corpus and save the weights.
    Train(Overrides),
    /// Segment one volume with saved weights.
    Infer {
        #[command(flatten)]
        overrides: Overrides,
        /// Directory holding the weight files.
        #[arg(long)]
        weights: PathBuf,
        /// RVOL header of the input volume.
        #[arg(long)]
        volume: PathBuf,
        /// RVOL header of the ground truth, needed with --oracle-boxes.
        #[arg(long)]
        mask: Option<PathBuf>,
    },
    /// Re-test the weights of a finished cross-validation run.
    Eval(Overrides),
    /// Run k-fold cross-validation.
    Crossval(Overrides),
    /// Finite-difference check of the unrolled loss gradient.
    Gradcheck,
}

#[derive(Clone, Copy, ValueEnum)]
enum MethodArg {
    Rstn,
    Stagewise,
    Mix,
}

#[derive(Args, Clone)]
struct Overrides {
    #[arg(long, value_enum)]
    method: Option<MethodArg>,
    #[arg(long)]
    thr: Option<f64>,
    #[arg(long)]
    max_iter: Option<usize>,
    /// Crop margin for training and testing.
    #[arg(long)]
    margin: Option<usize>,
    #[arg(long, value_parser = ["1", "3", "5"])]
    saliency_kernel: Option<String>,
    #[arg(long, value_parser = ["1", "2"])]
    saliency_layers: Option<String>,
    #[arg(long)]
    oracle_boxes: bool,
}

fn experiment(cli: &Cli, o: &Overrides) -> Result<ExperimentConfig> {
    let mut cfg = match &cli.config {
        Some(p) => ExperimentConfig::load(p)
            .with_context(|| format!("loading experiment config {}", p.display()))?,
        None => ExperimentConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(out) = &cli.out {
        cfg.out = out.clone();
    }
    if let Some(m) = o.method {
        cfg.method = match m {
            MethodArg::Rstn => Method::Rstn,
            MethodArg::Stagewise => Method::Stagewise,
            MethodArg::Mix => Method::Mix,
        };
    }
    if let Some(t) = o.thr {
        cfg.inference.threshold = t;
    }
    if let Some(t) = o.max_iter {
        cfg.inference.max_iterations = t;
    }
    if let Some(k) = o.margin {
        cfg.train.margin = k;
        cfg.inference.margin = k;
    }
    if let Some(k) = &o.saliency_kernel {
        cfg.model.saliency.kernel = k.parse()?;
    }
    if let Some(l) = &o.saliency_layers {
        cfg.model.saliency.layers = l.parse()?;
    }
    if o.oracle_boxes {
        cfg.inference.oracle_boxes = true;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn cmd_synthgen(cli: &Cli, count: usize) -> Result<Value> {
    let seed_base = cli.seed.unwrap_or(1000);
    let spec = match &cli.config {
        Some(p) => {
            let text = std::fs::read(p).with_context(|| format!("reading {}", p.display()))?;
            serde_json::from_slice(&text).context("parsing phantom spec")?
        }
        None => PhantomSpec::reference(seed_base),
    };
    let out = cli.out.clone().unwrap_or_else(|| PathBuf::from("corpus"));
    let cases = generate_corpus(&spec, count, seed_base)?;
    let manifest = write_corpus(&out, &spec, seed_base, &cases)?;
    let fractions: Vec<f64> = cases.iter().map(|c| c.mask.fraction()).collect();
    Ok(json!({ "manifest": manifest, "cases": cases.len(), "target_fractions": fractions }))
}

fn cmd_train(cli: &Cli, o: &Overrides) -> Result<Value> {
    let cfg = experiment(cli, o)?;
    let (_, cases) = load_corpus(&cfg.corpus)?;
    let mut written = Vec::new();
    if matches!(cfg.method, Method::Rstn | Method::Mix) {
        let m = train(&cases, &cfg.model, &cfg.train, cfg.seed)?;
        save_joint(&cfg.out, &m.bundles)?;
        m.log.save_jsonl(cfg.out.join("rstn_train.jsonl"))?;
        written.push("rstn");
    }
    if matches!(cfg.method, Method::Stagewise | Method::Mix) {
        let m = stagewise_train(&cases, &cfg.model, &cfg.train, cfg.seed)?;
        save_stagewise(&cfg.out, &m.bundles)?;
        m.log.save_jsonl(cfg.out.join("stagewise_train.jsonl"))?;
        written.push("stagewise");
    }
    Ok(json!({ "out": cfg.out, "trained": written, "cases": cases.len() }))
}

fn cmd_infer(
    cli: &Cli,
    o: &Overrides,
    weights: &Path,
    volume: &Path,
    mask: Option<&Path>,
) -> Result<Value> {
    let cfg = experiment(cli, o)?;
    let x = rvol::load_volume(volume)?;
    let truth = mask.map(rvol::load_mask).transpose()?;
    let oracle = if cfg.inference.oracle_boxes {
        Some(truth.as_ref().context("--oracle-boxes needs --mask")?)
    } else {
        None
    };
    let joint;
    let stage;
    let views: [ViewModel; 3] = match cfg.method {
        Method::Rstn => {
            joint = load_joint(weights)?;
            [joint[0].view(), joint[1].view(), joint[2].view()]
        }
        Method::Stagewise => {
            stage = load_stagewise(weights)?;
            [stage[0].view(), stage[1].view(), stage[2].view()]
        }
        Method::Mix => bail!("infer takes --method rstn or stagewise"),
    };
    let (z, trace) = run_pipeline(&views, &x, &cfg.inference, oracle)?;
    std::fs::create_dir_all(&cfg.out)?;
    let mask_path = cfg.out.join("mask.json");
    let trace_path = cfg.out.join("trace.json");
    rvol::save_mask(&z, x.spacing(), &mask_path)?;
    trace.save(&trace_path)?;
    let dsc = truth
        .as_ref()
        .map(|y| rstn_core::volume::dsc(&z, y))
        .transpose()?;
    Ok(json!({
        "mask": mask_path,
        "trace": trace_path,
        "iterations": trace.iterations,
        "termination": trace.termination,
        "voxels": z.count(),
        "dsc": dsc,
    }))
}

fn cmd_eval(cli: &Cli, o: &Overrides) -> Result<Value> {
    let cfg = experiment(cli, o)?;
    let methods: &[Method] = match cfg.method {
        Method::Mix => &[Method::Rstn, Method::Stagewise],
        Method::Rstn => &[Method::Rstn],
        Method::Stagewise => &[Method::Stagewise],
    };
    let mut out = Vec::new();
    for &m in methods {
        let report = evaluate_saved(&cfg, m, &cfg.inference)?;
        let files = report_emit(
            &report,
            &cfg.out.join("eval"),
            &[ReportFormat::Json, ReportFormat::Csv],
        )?;
        out.push(json!({
            "method": report.method,
            "oracle": report.oracle,
            "dsc": report.dsc,
            "convergence_rate": report.convergence_rate,
            "files": files,
        }));
    }
    Ok(Value::Array(out))
}

fn cmd_crossval(cli: &Cli, o: &Overrides) -> Result<Value> {
    let cfg = experiment(cli, o)?;
    let outcome = crossval(&cfg)?;
    let reports: Vec<Value> = outcome
        .reports
        .iter()
        .map(|r| {
            json!({
                "method": r.method,
                "dsc": r.dsc,
                "coarse_dsc": r.coarse_dsc,
                "convergence_rate": r.convergence_rate,
                "d_table": r.d_table,
            })
        })
        .collect();
    let mix: Option<Vec<Value>> = outcome.mix.as_ref().map(|m| {
        m.entries
            .iter()
            .map(|e| json!({ "coarse": e.coarse, "fine": e.fine, "mean": e.mean, "std": e.std }))
            .collect()
    });
    Ok(json!({ "out": cfg.out, "reports": reports, "mix": mix }))
}

fn cmd_gradcheck(cli: &Cli) -> Result<Value> {
    let seed = cli.seed.unwrap_or(32);
    let mut rows = Vec::new();
    let mut worst: f64 = 0.0;
    for t in [1, 2] {
        for reference in [ReferenceMode::GroundTruth, ReferenceMode::Predicted] {
            let r = unrolled_gradcheck(t, reference, seed)?;
            worst = worst.max(r.max_rel_error);
            rows.push(json!({
                "iterations": t,
                "reference": reference,
                "max_rel_error": r.max_rel_error,
                "checked": r.checked,
            }));
        }
    }
    if worst > GRADCHECK_TOLERANCE {
        bail!(
            "gradient check failed: max relative error {worst:e} exceeds {GRADCHECK_TOLERANCE:e}"
        );
    }
    Ok(json!({ "step": FD_STEP, "max_rel_error": worst, "checks": rows }))
}

fn run(cli: &Cli) -> Result<Value> {
    match &cli.command {
        Command::Synthgen { count } => cmd_synthgen(cli, *count),
        Command::Train(o) => cmd_train(cli, o),
        Command::Infer {
            overrides,
            weights,
            volume,
            mask,
        } => cmd_infer(cli, overrides, weights, volume, mask.as_deref()),
        Command::Eval(o) => cmd_eval(cli, o),
        Command::Crossval(o) => cmd_crossval(cli, o),
        Command::Gradcheck => cmd_gradcheck(cli),
    }
}

fn error_json(e: &anyhow::Error) -> Value {
    let kind = e
        .chain()
        .find_map(|c| c.downcast_ref::<rstn_core::Error>())
        .map_or("cli", |c| c.kind());
    // library errors already print their source, so skip repeated tails
    let mut message = String::new();
    for c in e.chain() {
        let s = c.to_string();
        if message.ends_with(&s) {
            continue;
        }
        if !message.is_empty() {
            message.push_str(": ");
        }
        message.push_str(&s);
    }
    json!({ "error": { "kind": kind, "message": message } })
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(v) => {
            println!("{}", serde_json::to_string_pretty(&v).expect("json value"));
            ExitCode::SUCCESS
        }
        Err(e) => {
            println!("{}", error_json(&e));
            ExitCode::FAILURE
        }
    }
}
