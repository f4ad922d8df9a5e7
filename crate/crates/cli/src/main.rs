use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use difficalib::classifier::{train, Predictions};
use difficalib::difficulty::{
    average_scores, import_scores, rank_report, score_dataset, KMeansParams, DEFAULT_OFFSET,
    DEFAULT_TEMPERATURE,
};
use difficalib::embedding_store::{load_dataset, save_dataset};
use difficalib::gaussian::DEFAULT_SHRINKAGE;
use difficalib::metrics::{self, UncertaintyKind, DEFAULT_BINS};
use difficalib::synthetic::{self, MixtureSpec};
use difficalib::{
    ClassifierModel, DifficultyScores, EmbeddingDataset, EvalReport, GaussianBank, LossConfig, LossKind,
    OptimConfig, ScoreMethod,
};
use serde_json::{json, Value};

#[derive(Parser)]
#[command(name = "difficalib", version, about = "Difficulty-aware calibration toolkit for frozen embeddings")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a Gaussian-mixture embedding dataset.
    Synth(SynthArgs),
    /// Fit class-conditional and class-agnostic Gaussians.
    Fit(FitArgs),
    /// Score sample difficulty and derive per-sample weights.
    Score(ScoreArgs),
    /// List the hardest and easiest samples per class.
    Rank(RankArgs),
    /// Train a classifier head.
    Train(TrainArgs),
    /// Accuracy, ECE and NLL of one model, or a comparison table of several.
    Eval(EvalArgs),
    /// Accuracy under selective rejection of uncertain samples.
    Selective(SelectiveArgs),
    /// Out-of-distribution detection from predictive uncertainty.
    Ood(OodArgs),
    /// Error rate per difficulty-ranked bucket.
    BucketError(BucketArgs),
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long, default_value_t = 10)]
    classes: usize,
    #[arg(long, default_value_t = 16)]
    dim: usize,
    #[arg(long, default_value_t = 500)]
    per_class: usize,
    #[arg(long, default_value_t = 3.0)]
    separation: f64,
    #[arg(long, default_value_t = 7)]
    seed: u64,
    /// Remove this class and write it to --ood-out.
    #[arg(long, requires = "ood_out")]
    ood_class: Option<usize>,
    #[arg(long)]
    ood_out: Option<PathBuf>,
    #[arg(long, default_value_t = 0.0)]
    label_noise: f64,
    #[arg(long, default_value_t = 0.0)]
    feature_noise: f64,
    /// Hold out this fraction of samples and write them to --val-out.
    #[arg(long, requires = "val_out")]
    val_fraction: Option<f64>,
    #[arg(long)]
    val_out: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct FitArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value_t = DEFAULT_SHRINKAGE)]
    shrinkage: f64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Clone, Copy)]
struct WeightArgs {
    /// Temperature of the difficulty weights.
    #[arg(long = "T", default_value_t = DEFAULT_TEMPERATURE)]
    temperature: f64,
    /// Offset c of the difficulty weights.
    #[arg(long = "c", default_value_t = DEFAULT_OFFSET)]
    offset: f64,
}

#[derive(Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
enum Scorer {
    Rmd,
    Md,
    Kmeans,
    Imported,
}

#[derive(Args)]
struct ScoreArgs {
    /// Dataset(s) to score; several runs are averaged per id.
    #[arg(long, required = true)]
    data: Vec<PathBuf>,
    /// Gaussian bank(s), one per run or one shared by all runs.
    #[arg(long)]
    bank: Vec<PathBuf>,
    #[arg(long, value_enum, default_value_t = Scorer::Rmd)]
    scorer: Scorer,
    /// `id,score` file for --scorer imported.
    #[arg(long)]
    import: Option<PathBuf>,
    #[arg(long, default_value_t = 10)]
    clusters: usize,
    #[arg(long, default_value_t = 50)]
    iters: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[command(flatten)]
    weights: WeightArgs,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct RankArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    scores: PathBuf,
    #[arg(long, default_value_t = 8)]
    top_k: usize,
    #[command(flatten)]
    weights: WeightArgs,
    /// Write the full report as JSON.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    data: PathBuf,
    /// Scores file from `score`; required for difficulty_er.
    #[arg(long)]
    scores: Option<PathBuf>,
    #[arg(long, default_value = "ce")]
    loss: String,
    /// Entropy-regularization strength; defaults to 0.3 for up to 100
    /// classes and 0.2 beyond.
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long, default_value_t = 0.1)]
    ls_epsilon: f64,
    #[arg(long, default_value_t = 3.0)]
    focal_gamma: f64,
    #[arg(long, default_value_t = 0.01)]
    l1_coeff: f64,
    #[arg(long, default_value_t = 2.0)]
    poly_epsilon: f64,
    #[arg(long, default_value_t = 0.1)]
    lr: f64,
    /// Decay the learning rate every this many epochs (0 = constant).
    #[arg(long, default_value_t = 0)]
    lr_step: usize,
    #[arg(long, default_value_t = 0.1)]
    lr_decay: f64,
    #[arg(long, default_value_t = 0.9)]
    momentum: f64,
    #[arg(long, default_value_t = 1e-4)]
    weight_decay: f64,
    #[arg(long, default_value_t = 128)]
    batch_size: usize,
    #[arg(long, default_value_t = 30)]
    epochs: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Comma-separated hidden widths; empty for a linear head.
    #[arg(long, default_value = "", value_parser = parse_widths)]
    hidden: Widths,
    /// Validation split logged every epoch.
    #[arg(long)]
    val: Option<PathBuf>,
    #[command(flatten)]
    weights: WeightArgs,
    #[arg(long)]
    out: PathBuf,
    /// Per-epoch CSV log.
    #[arg(long)]
    log: Option<PathBuf>,
}

#[derive(Clone)]
struct Widths(Vec<usize>);

fn parse_widths(s: &str) -> Result<Widths, String> {
    s.split(',')
        .map(str::trim)
        .filter(|t| !t.is_empty())
        .map(|t| t.parse::<usize>().map_err(|e| format!("bad width {t:?}: {e}")))
        .collect::<Result<_, _>>()
        .map(Widths)
}

#[derive(Args)]
struct EvalArgs {
    /// Model file(s); more than one produces a comparison table.
    #[arg(long, required = true)]
    model: Vec<PathBuf>,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value_t = DEFAULT_BINS)]
    bins: usize,
    /// JSON report (or the comparison table in compare mode).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Flat `metric,value` rows.
    #[arg(long)]
    csv: Option<PathBuf>,
    /// Reliability-diagram data.
    #[arg(long)]
    reliability: Option<PathBuf>,
}

#[derive(Args)]
struct SelectiveArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value = "entropy")]
    uncertainty: String,
    /// Rejection rates; defaults to 0, 0.05, ..., 0.95.
    #[arg(long, value_delimiter = ',')]
    rates: Vec<f64>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct OodArgs {
    #[arg(long)]
    model: PathBuf,
    /// In-distribution evaluation split.
    #[arg(long = "in")]
    in_data: PathBuf,
    /// Out-of-distribution samples.
    #[arg(long)]
    ood: PathBuf,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct BucketArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    scores: PathBuf,
    #[arg(long, default_value_t = 500)]
    bucket_size: usize,
    #[command(flatten)]
    weights: WeightArgs,
    #[arg(long)]
    out: Option<PathBuf>,
}

fn load(path: &Path) -> Result<EmbeddingDataset> {
    load_dataset(path).with_context(|| format!("loading {}", path.display()))
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    std::fs::write(path, contents).with_context(|| format!("writing {}", path.display()))
}

fn labels_of(ds: &EmbeddingDataset) -> Vec<usize> {
    ds.labels().iter().map(|&y| y as usize).collect()
}

fn predict(model: &ClassifierModel, ds: &EmbeddingDataset) -> Result<Predictions> {
    if model.input_dim() != ds.dim() {
        bail!("model expects width {}, data has width {}", model.input_dim(), ds.dim());
    }
    if model.num_classes() < ds.num_classes() {
        bail!("model has {} classes, data has {}", model.num_classes(), ds.num_classes());
    }
    Ok(model.predict(&ds.features_f64())?)
}

fn synth(a: SynthArgs) -> Result<Value> {
    let spec = MixtureSpec {
        num_classes: a.classes,
        dim: a.dim,
        samples_per_class: a.per_class,
        separation: a.separation,
        seed: a.seed,
    };
    let mut ds = synthetic::generate_mixture(&spec)?;
    let mut summary = json!({ "spec": &spec });
    if let (Some(class), Some(path)) = (a.ood_class, &a.ood_out) {
        let (inside, ood) = synthetic::hold_out_class(&ds, class)?;
        save_dataset(&ood, path)?;
        summary["ood_samples"] = json!(ood.len());
        ds = inside;
    }
    if a.label_noise > 0.0 {
        ds = synthetic::inject_label_noise(&ds, a.label_noise, a.seed)?;
    }
    if a.feature_noise > 0.0 {
        ds = synthetic::inject_feature_noise(&ds, a.feature_noise, a.seed)?;
    }
    if let (Some(fraction), Some(path)) = (a.val_fraction, &a.val_out) {
        let (kept, held) = synthetic::split(&ds, fraction, a.seed)?;
        save_dataset(&held, path)?;
        summary["val_samples"] = json!(held.len());
        ds = kept;
    }
    save_dataset(&ds, &a.out)?;
    let sidecar = json!({
        "spec": &spec,
        "ood_class": a.ood_class,
        "label_noise": a.label_noise,
        "feature_noise": a.feature_noise,
        "val_fraction": a.val_fraction,
    });
    let mut sidecar_path = a.out.clone().into_os_string();
    sidecar_path.push(".json");
    write(Path::new(&sidecar_path), serde_json::to_string_pretty(&sidecar)? + "\n")?;
    summary["samples"] = json!(ds.len());
    summary["label_noise"] = json!(a.label_noise);
    summary["feature_noise"] = json!(a.feature_noise);
    summary["out"] = json!(a.out);
    Ok(summary)
}

fn fit(a: FitArgs) -> Result<Value> {
    let ds = load(&a.data)?;
    let bank = GaussianBank::fit(&ds, a.shrinkage)?;
    bank.save(&a.out)?;
    Ok(json!({
        "classes": bank.num_classes(),
        "dim": bank.dim(),
        "samples": ds.len(),
        "shrinkage": a.shrinkage,
        "out": a.out,
    }))
}

fn score(a: ScoreArgs) -> Result<Value> {
    let w = a.weights;
    let datasets = a.data.iter().map(|p| load(p)).collect::<Result<Vec<_>>>()?;
    let runs: Vec<DifficultyScores> = match a.scorer {
        Scorer::Rmd | Scorer::Md => {
            if a.bank.is_empty() {
                bail!("--scorer rmd/md requires --bank");
            }
            let banks = a.bank.iter().map(GaussianBank::load).collect::<Result<Vec<_>, _>>()?;
            let runs = datasets.len().max(banks.len());
            if (datasets.len() != 1 && datasets.len() != runs) || (banks.len() != 1 && banks.len() != runs) {
                bail!("give one --data per --bank, or share a single one of either");
            }
            (0..runs)
                .map(|r| {
                    let ds = &datasets[r.min(datasets.len() - 1)];
                    let bank = &banks[r.min(banks.len() - 1)];
                    let method = if a.scorer == Scorer::Rmd {
                        ScoreMethod::Rmd(bank)
                    } else {
                        ScoreMethod::Md(bank)
                    };
                    Ok(score_dataset(ds, method, w.temperature, w.offset)?)
                })
                .collect::<Result<_>>()?
        }
        Scorer::Kmeans => datasets
            .iter()
            .map(|ds| {
                let params = KMeansParams {
                    clusters: a.clusters,
                    iters: a.iters,
                    seed: a.seed,
                };
                Ok(score_dataset(ds, ScoreMethod::KMeans(params), w.temperature, w.offset)?)
            })
            .collect::<Result<_>>()?,
        Scorer::Imported => {
            let path = a.import.as_ref().context("--scorer imported requires --import")?;
            datasets
                .iter()
                .map(|ds| Ok(import_scores(path, ds, w.temperature, w.offset)?))
                .collect::<Result<_>>()?
        }
    };
    let scores = average_scores(&runs)?;
    scores.save_csv(&a.out)?;
    let (min, max) = scores
        .rmd()
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    Ok(json!({
        "scorer": scores.scorer(),
        "runs": runs.len(),
        "samples": scores.len(),
        "T": w.temperature,
        "c": w.offset,
        "rmd_min": min,
        "rmd_max": max,
        "mean_weight": scores.weights().iter().sum::<f64>() / scores.len() as f64,
        "out": a.out,
    }))
}

fn rank(a: RankArgs) -> Result<Value> {
    let ds = load(&a.data)?;
    let scores = import_scores(&a.scores, &ds, a.weights.temperature, a.weights.offset)?;
    let report = rank_report(&scores, &ds, a.top_k)?;
    if let Some(out) = &a.out {
        write(out, serde_json::to_string_pretty(&report)? + "\n")?;
    }
    Ok(json!({ "top_k": a.top_k, "classes": report }))
}

fn train_cmd(a: TrainArgs) -> Result<Value> {
    let kind: LossKind = a.loss.parse()?;
    if kind == LossKind::DifficultyEr && a.scores.is_none() {
        bail!("difficulty_er requires --scores");
    }
    let ds = load(&a.data)?;
    let val = a.val.as_deref().map(load).transpose()?;
    let scores = match &a.scores {
        Some(p) => Some(import_scores(p, &ds, a.weights.temperature, a.weights.offset)?),
        None => None,
    };
    let mut lcfg = LossConfig::new(kind, ds.num_classes());
    if let Some(alpha) = a.alpha {
        lcfg.alpha = alpha;
    }
    lcfg.ls_epsilon = a.ls_epsilon;
    lcfg.focal_gamma = a.focal_gamma;
    lcfg.l1_coeff = a.l1_coeff;
    lcfg.poly_epsilon = a.poly_epsilon;
    let ocfg = OptimConfig {
        learning_rate: a.lr,
        lr_step_epochs: a.lr_step,
        lr_decay: a.lr_decay,
        momentum: a.momentum,
        weight_decay: a.weight_decay,
        batch_size: a.batch_size,
        epochs: a.epochs,
        seed: a.seed,
        hidden: a.hidden.0,
    };
    let outcome = train(&ds, scores.as_ref(), &lcfg, &ocfg, val.as_ref())?;
    outcome.model.save(&a.out)?;
    if let Some(log) = &a.log {
        write(log, outcome.log_csv())?;
    }
    let last = outcome.log.last();
    Ok(json!({
        "loss": lcfg,
        "optim": ocfg,
        "T": a.weights.temperature,
        "c": a.weights.offset,
        "samples": ds.len(),
        "final_train_loss": last.map(|e| e.train_loss),
        "final_val_acc": last.and_then(|e| e.val_acc),
        "final_val_ece": last.and_then(|e| e.val_ece),
        "out": a.out,
    }))
}

fn eval(a: EvalArgs) -> Result<Value> {
    let ds = load(&a.data)?;
    let labels = labels_of(&ds);
    let mut reports = Vec::with_capacity(a.model.len());
    for path in &a.model {
        let model = ClassifierModel::load(path)?;
        let pred = predict(&model, &ds)?;
        let mut report = EvalReport::basic(&pred.probs, &labels, pred.num_classes, a.bins)?;
        // misclassification detection per uncertainty score
        let correct: Vec<bool> = pred.predicted().iter().zip(&labels).map(|(p, y)| p == y).collect();
        if correct.iter().any(|&c| c) && correct.iter().any(|&c| !c) {
            let unc = metrics::uncertainty_scores(&pred.logits, pred.num_classes)?;
            let errors: Vec<bool> = correct.iter().map(|c| !c).collect();
            let mut det = BTreeMap::new();
            for kind in UncertaintyKind::ALL {
                det.insert(kind.name().to_string(), metrics::detection_metrics(unc.get(kind), &errors)?);
            }
            report.detection = Some(det);
        }
        reports.push((path, report));
    }

    if let [(_, report)] = reports.as_slice() {
        if let Some(out) = &a.out {
            write(out, serde_json::to_string_pretty(report)? + "\n")?;
        }
        if let Some(csv) = &a.csv {
            write(csv, report.to_csv_rows())?;
        }
        if let Some(rel) = &a.reliability {
            write(rel, report.reliability_csv())?;
        }
        return Ok(json!({
            "bins": a.bins,
            "samples": report.num_samples,
            "accuracy": report.accuracy,
            "ece": report.ece,
            "nll": report.nll,
        }));
    }

    let mut table = String::from("model,accuracy,ece,nll\n");
    let mut rows = Vec::new();
    for (path, r) in &reports {
        let name = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
        table.push_str(&format!("{name},{},{},{}\n", r.accuracy, r.ece, r.nll));
        rows.push(json!({ "model": name, "accuracy": r.accuracy, "ece": r.ece, "nll": r.nll }));
    }
    if let Some(out) = a.out.as_ref().or(a.csv.as_ref()) {
        write(out, &table)?;
    }
    Ok(json!({ "bins": a.bins, "samples": ds.len(), "compare": rows }))
}

fn selective(a: SelectiveArgs) -> Result<Value> {
    let kind: UncertaintyKind = a.uncertainty.parse()?;
    let ds = load(&a.data)?;
    let pred = predict(&ClassifierModel::load(&a.model)?, &ds)?;
    let unc = metrics::uncertainty_scores(&pred.logits, pred.num_classes)?;
    let rates = if a.rates.is_empty() {
        metrics::default_rejection_grid()
    } else {
        a.rates
    };
    let points = metrics::risk_coverage(&pred.probs, &labels_of(&ds), pred.num_classes, unc.get(kind), &rates)?;
    if let Some(out) = &a.out {
        write(out, metrics::risk_coverage_csv(&points))?;
    }
    Ok(json!({ "uncertainty": kind, "points": points }))
}

fn ood(a: OodArgs) -> Result<Value> {
    let model = ClassifierModel::load(&a.model)?;
    let inside = load(&a.in_data)?;
    let outside = load(&a.ood)?;
    let p_in = predict(&model, &inside)?;
    if outside.dim() != model.input_dim() {
        bail!("OOD data has width {}, model expects {}", outside.dim(), model.input_dim());
    }
    let p_out = model.predict(&outside.features_f64())?;
    let u_in = metrics::uncertainty_scores(&p_in.logits, p_in.num_classes)?;
    let u_out = metrics::uncertainty_scores(&p_out.logits, p_out.num_classes)?;
    let positives: Vec<bool> = std::iter::repeat_n(false, inside.len())
        .chain(std::iter::repeat_n(true, outside.len()))
        .collect();
    let mut det = BTreeMap::new();
    for kind in UncertaintyKind::ALL {
        let scores: Vec<f64> = u_in.get(kind).iter().chain(u_out.get(kind)).copied().collect();
        det.insert(kind.name(), metrics::detection_metrics(&scores, &positives)?);
    }
    if let Some(out) = &a.out {
        write(out, serde_json::to_string_pretty(&det)? + "\n")?;
    }
    Ok(json!({ "in_samples": inside.len(), "ood_samples": outside.len(), "detection": det }))
}

fn bucket(a: BucketArgs) -> Result<Value> {
    let ds = load(&a.data)?;
    let scores = import_scores(&a.scores, &ds, a.weights.temperature, a.weights.offset)?;
    let pred = predict(&ClassifierModel::load(&a.model)?, &ds)?;
    let buckets = metrics::bucket_error(&scores, &pred.predicted(), &labels_of(&ds), a.bucket_size)?;
    if let Some(out) = &a.out {
        let mut csv = String::from("first_rank,last_rank,count,error_rate\n");
        for b in &buckets {
            csv.push_str(&format!("{},{},{},{}\n", b.first_rank, b.last_rank, b.count, b.error_rate));
        }
        write(out, csv)?;
    }
    Ok(json!({ "bucket_size": a.bucket_size, "buckets": buckets }))
}

fn configure_threads() -> Result<()> {
    if let Ok(v) = std::env::var("DIFFICALIB_THREADS") {
        let n: usize = v
            .parse()
            .with_context(|| format!("DIFFICALIB_THREADS must be a positive integer, got {v:?}"))?;
        if n == 0 {
            bail!("DIFFICALIB_THREADS must be at least 1");
        }
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    }
    Ok(())
}

fn run(cli: Cli) -> Result<Value> {
    configure_threads()?;
    let (name, summary) = match cli.command {
        Command::Synth(a) => ("synth", synth(a)?),
        Command::Fit(a) => ("fit", fit(a)?),
        Command::Score(a) => ("score", score(a)?),
        Command::Rank(a) => ("rank", rank(a)?),
        Command::Train(a) => ("train", train_cmd(a)?),
        Command::Eval(a) => ("eval", eval(a)?),
        Command::Selective(a) => ("selective", selective(a)?),
        Command::Ood(a) => ("ood", ood(a)?),
        Command::BucketError(a) => ("bucket-error", bucket(a)?),
    };
    let mut out = json!({ "command": name, "status": "ok" });
    if let (Value::Object(dst), Value::Object(src)) = (&mut out, summary) {
        dst.extend(src);
    }
    Ok(out)
}

fn main() -> ExitCode {
    // clap exits with status 2 on usage errors
    let cli = Cli::parse();
    match run(cli) {
        Ok(summary) => {
            println!("{summary}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
