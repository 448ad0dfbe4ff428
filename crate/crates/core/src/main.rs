use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use pprfcn::bench::{run_bench, BenchConfig, BenchReport};
use pprfcn::data::{generate_dataset, DataConfig, Dataset, Split};
use pprfcn::eval::{evaluate, write_jsonl, write_report, EvalConfig};
use pprfcn::inspect::{dump_bundle, dump_pooled};
use pprfcn::model::{LossConfig, Model, ModelConfig};
use pprfcn::train::{train, write_loss_log, TrainConfig};
use pprfcn::wsod::{DetectConfig, ThresholdBasis};
use pprfcn::wspp::Branch;
use pprfcn::{Error, Result};

const CONFIG_FILE: &str = "config.json";
const THREADS_ENV: &str = "PPRFCN_THREADS";

#[derive(Parser)]
#[command(name = "pprfcn", version, about = "Weakly supervised relation detection with pairwise RoI pooling")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset directory.
    GenData(GenDataArgs),
    /// Train a model on the train split.
    Train(TrainArgs),
    /// Evaluate a checkpoint on the test split.
    Eval(EvalArgs),
    /// Time shared-map pair scoring against a per-pair MLP.
    Bench(BenchArgs),
    /// Dump score maps and pooled grids of one image.
    Inspect(InspectArgs),
}

#[derive(Args, Serialize)]
struct GenDataArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 7)]
    seed: u64,
    #[arg(long, default_value_t = 500)]
    num_train: usize,
    #[arg(long, default_value_t = 100)]
    num_test: usize,
    #[arg(long, default_value_t = 5)]
    classes: usize,
    #[arg(long, default_value_t = 4)]
    predicates: usize,
    #[arg(long, default_value_t = 3)]
    k: usize,
    #[arg(long, default_value_t = 16)]
    dim: usize,
    #[arg(long, default_value_t = 48)]
    height: usize,
    #[arg(long, default_value_t = 48)]
    width: usize,
    /// Proposals per image.
    #[arg(long, default_value_t = 20)]
    n_proposals: usize,
    #[arg(long, default_value_t = 0.5)]
    noise: f32,
}

#[derive(Args, Serialize)]
struct TrainArgs {
    #[arg(long)]
    data: PathBuf,
    /// Checkpoint directory.
    #[arg(long, default_value = "ckpt")]
    out: PathBuf,
    #[arg(long, default_value_t = 7)]
    seed: u64,
    /// Total epochs, bootstrap included.
    #[arg(long, default_value_t = 15)]
    epochs: usize,
    /// Detection-only epochs, capped at `epochs - 1`.
    #[arg(long, default_value_t = 3)]
    bootstrap_epochs: usize,
    #[arg(long, default_value_t = 0.01)]
    lr: f32,
    #[arg(long, default_value_t = 0.9)]
    momentum: f32,
    #[arg(long, default_value_t = 0.2)]
    alpha: f64,
    #[arg(long, default_value_t = 3)]
    k: usize,
    #[arg(long, default_value_t = 15)]
    top_m: usize,
    #[arg(long, default_value_t = 0.01)]
    init_std: f32,
    #[arg(long)]
    no_flip: bool,
    #[arg(long)]
    scale_jitter: bool,
}

#[derive(Clone, Copy, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
enum Basis {
    Minmax,
    Raw,
}

#[derive(Args, Serialize)]
struct EvalArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    ckpt: PathBuf,
    /// Output directory; defaults to `<ckpt>/eval`.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Recall cut-offs, comma separated.
    #[arg(long = "k-recall", visible_alias = "k", value_delimiter = ',', default_value = "50,100")]
    k_recall: Vec<usize>,
    #[arg(long, default_value_t = 0.7)]
    score_threshold: f64,
    #[arg(long, value_enum, default_value_t = Basis::Minmax)]
    threshold_basis: Basis,
    #[arg(long, default_value_t = 30)]
    max_per_class: usize,
    /// Predicates kept per ground-truth pair under predicate prediction.
    #[arg(long, default_value_t = 1)]
    predicates_per_pair: usize,
}

#[derive(Args, Serialize)]
struct BenchArgs {
    /// Also write `bench.csv` and the config here.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, default_value_t = 100)]
    n_proposals: usize,
    #[arg(long, default_value_t = 5)]
    repeats: usize,
    #[arg(long, default_value_t = 7)]
    seed: u64,
    #[arg(long, default_value_t = 3)]
    k: usize,
    #[arg(long, default_value_t = 4)]
    predicates: usize,
    #[arg(long, default_value_t = 5)]
    classes: usize,
    #[arg(long, default_value_t = 16)]
    dim: usize,
    #[arg(long, default_value_t = 256)]
    hidden: usize,
}

#[derive(Clone, Copy, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
enum BranchArg {
    Sel,
    Cls,
}

#[derive(Args, Serialize)]
struct InspectArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Image id; defaults to the first test image.
    #[arg(long)]
    image: Option<String>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_enum, default_value_t = BranchArg::Cls)]
    branch: BranchArg,
}

#[derive(Serialize)]
struct RunConfig<'a, A, R> {
    command: &'a str,
    args: &'a A,
    resolved: R,
}

fn write_config<A: Serialize, R: Serialize>(dir: &Path, command: &str, args: &A, resolved: R) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let path = dir.join(CONFIG_FILE);
    let run = RunConfig { command, args, resolved };
    let text = serde_json::to_string_pretty(&run).map_err(|e| Error::format(&path, e.to_string()))?;
    fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))
}

fn gen_data(a: &GenDataArgs) -> Result<()> {
    let cfg = DataConfig {
        num_train: a.num_train,
        num_test: a.num_test,
        classes: a.classes,
        predicates: a.predicates,
        k: a.k,
        dim: a.dim,
        height: a.height,
        width: a.width,
        proposals: a.n_proposals,
        noise: a.noise,
        seed: a.seed,
        ..DataConfig::default()
    };
    let manifest = generate_dataset(&a.out, &cfg)?;
    write_config(&a.out, "gen-data", a, &cfg)?;
    println!("wrote {} images to {}", manifest.images.len(), a.out.display());
    Ok(())
}

#[derive(Serialize)]
struct TrainResolved {
    model: ModelConfig,
    train: TrainConfig,
}

fn train_cmd(a: &TrainArgs) -> Result<()> {
    let data = Dataset::open(&a.data)?;
    let dc = data.config().clone();
    let model_cfg = ModelConfig {
        classes: dc.classes,
        predicates: dc.predicates,
        k: a.k,
        dim: dc.dim,
        init_std: a.init_std,
        seed: a.seed,
    };
    if a.epochs == 0 {
        return Err(Error::Usage("--epochs must be at least 1".into()));
    }
    let bootstrap = a.bootstrap_epochs.min(a.epochs - 1);
    let cfg = TrainConfig {
        epochs: a.epochs - bootstrap,
        bootstrap_epochs: bootstrap,
        lr: a.lr,
        momentum: a.momentum,
        flip: !a.no_flip,
        scale_jitter: a.scale_jitter,
        loss: LossConfig {
            alpha: a.alpha,
            top_m: a.top_m,
            ..LossConfig::default()
        },
        seed: a.seed,
        ..TrainConfig::default()
    };
    cfg.validate()?;
    let images = data.load_weak_split(Split::Train)?;
    let mut model = Model::new(model_cfg.clone())?;
    let logs = train(&mut model, &images, &cfg, |l| {
        eprintln!(
            "epoch {:>3} {:?}: total {:.4} obj {:.4} pred {:.4} reg {:.4}",
            l.epoch, l.stage, l.total, l.obj, l.pred, l.reg
        )
    })?;
    model.save(&a.out)?;
    write_loss_log(&a.out.join("loss_log.csv"), &logs)?;
    write_config(&a.out, "train", a, TrainResolved { model: model_cfg, train: cfg })?;
    println!("checkpoint written to {}", a.out.display());
    Ok(())
}

fn eval_cmd(a: &EvalArgs) -> Result<()> {
    if a.k_recall.is_empty() || a.k_recall.contains(&0) {
        return Err(Error::Usage("--k-recall needs positive cut-offs".into()));
    }
    let data = Dataset::open(&a.data)?;
    let model = Model::load(&a.ckpt)?;
    let cfg = EvalConfig {
        ks: a.k_recall.clone(),
        detect: DetectConfig {
            score_threshold: a.score_threshold,
            basis: match a.threshold_basis {
                Basis::Minmax => ThresholdBasis::MinMax,
                Basis::Raw => ThresholdBasis::Raw,
            },
            max_per_class: a.max_per_class,
            ..DetectConfig::default()
        },
        predicates_per_pair: a.predicates_per_pair,
        ..EvalConfig::default()
    };
    let images = data.load_split(Split::Test)?;
    let (rows, preds) = evaluate(&model, &images, &cfg)?;
    let out = a.out.clone().unwrap_or_else(|| a.ckpt.join("eval"));
    fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
    write_report(&out.join("report.csv"), &rows)?;
    write_jsonl(&out.join("detections.jsonl"), preds.detections.iter().flatten())?;
    write_jsonl(&out.join("relations.jsonl"), preds.relations.iter().flatten())?;
    write_config(&out, "eval", a, &cfg)?;
    for r in &rows {
        println!("{:?} R@{}: {:.4}", r.protocol, r.k, r.recall);
    }
    Ok(())
}

fn bench_csv(report: &BenchReport) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.serialize(report).map_err(|e| Error::Numeric(e.to_string()))?;
    let bytes = w.into_inner().map_err(|e| Error::Numeric(e.to_string()))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

fn bench_cmd(a: &BenchArgs) -> Result<()> {
    if a.n_proposals < 2 {
        return Err(Error::Usage("--n-proposals must be at least 2".into()));
    }
    let cfg = BenchConfig {
        n_proposals: a.n_proposals,
        predicates: a.predicates,
        classes: a.classes,
        dim: a.dim,
        k: a.k,
        hidden: a.hidden,
        repeats: a.repeats,
        seed: a.seed,
        ..BenchConfig::default()
    };
    let (report, _) = run_bench(&cfg)?;
    let text = bench_csv(&report)?;
    print!("{text}");
    if let Some(out) = &a.out {
        write_config(out, "bench", a, &cfg)?;
        let path = out.join("bench.csv");
        fs::write(&path, &text).map_err(|e| Error::io(&path, e))?;
    }
    Ok(())
}

#[derive(Serialize)]
struct InspectResolved<'a> {
    image: &'a str,
    subject_box: pprfcn::geometry::BBox,
    object_box: pprfcn::geometry::BBox,
    channels: usize,
}

fn inspect_cmd(a: &InspectArgs) -> Result<()> {
    let data = Dataset::open(&a.data)?;
    let model = Model::load(&a.ckpt)?;
    let rec = match &a.image {
        Some(id) => data
            .record(id)
            .ok_or_else(|| Error::Domain(format!("image {id} not in dataset")))?,
        None => data
            .records(Split::Test)
            .chain(data.records(Split::Train))
            .next()
            .ok_or_else(|| Error::Domain("dataset has no images".into()))?,
    };
    let image = data.load(rec)?;
    let branch = match a.branch {
        BranchArg::Sel => Branch::Sel,
        BranchArg::Cls => Branch::Cls,
    };
    let bundle = model.wspp.branch_bundle(&image.weak.features, branch)?;
    let (p_i, p_j) = match image.gt.relations.first() {
        Some(r) => (image.gt.instances[r.subject].bbox, image.gt.instances[r.object].bbox),
        None => match image.weak.proposals.as_slice() {
            [p, q, ..] => (*p, *q),
            _ => return Err(Error::Domain(format!("image {} has fewer than two boxes", rec.id))),
        },
    };
    fs::create_dir_all(&a.out).map_err(|e| Error::io(&a.out, e))?;
    let channels = dump_bundle(&bundle, &a.out)?;
    dump_pooled(&bundle, &p_i, &p_j, &a.out)?;
    write_config(
        &a.out,
        "inspect",
        a,
        InspectResolved {
            image: &rec.id,
            subject_box: p_i,
            object_box: p_j,
            channels,
        },
    )?;
    println!("dumped {channels} channels of {} to {}", rec.id, a.out.display());
    Ok(())
}

fn init_threads() -> Result<()> {
    let Ok(value) = std::env::var(THREADS_ENV) else {
        return Ok(());
    };
    let n: usize = value
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| Error::Usage(format!("{THREADS_ENV}={value} is not a positive integer")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| Error::Config(e.to_string()))
}

fn run(cli: &Cli) -> Result<()> {
    init_threads()?;
    match &cli.command {
        Command::GenData(a) => gen_data(a),
        Command::Train(a) => train_cmd(a),
        Command::Eval(a) => eval_cmd(a),
        Command::Bench(a) => bench_cmd(a),
        Command::Inspect(a) => inspect_cmd(a),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let _ = writeln!(std::io::stderr(), "error: {e}");
            match e {
                Error::Usage(_) => ExitCode::from(2),
                _ => ExitCode::FAILURE,
            }
        }
    }
}
