//! Command-line driver. Exit status: 0 success, 1 contract violation,
//! 2 usage error.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::data::{
    generate_synthetic, import_csv, load_dataset, load_recipe, load_split_plan, make_splits, parse_labels,
    save_dataset, Dataset, Fold, SyntheticConfig,
};
use crate::error::{Error, Result};
use crate::graph::resolve_layout;
use crate::layers::MaskMode;
use crate::loss::LossConfig;
use crate::metrics::{evaluate_pair, rows_to_csv, trial_rows, DEFAULT_THRESHOLDS};
use crate::models::{DilationSchedule, Model, ModelConfig, ModelKind};
use crate::plot::{timeline_svg, TimelineRow};
use crate::training::{
    ablate, dataset_sha256, evaluate, fold_seed, run_folds, AblationAxis, FoldRecord, RunManifest, TrainConfig,
};
use crate::verify::{gradient_suite, GRAD_TOLERANCE, LAYERS};

pub const OUT_DIR_ENV: &str = "MSGCN_OUT_DIR";

#[derive(Parser, Debug)]
#[command(name = "msgcn", version, about = "Skeleton-based action segmentation with multi-stage graph convolutional networks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write a synthetic skeleton dataset.
    GenData(GenDataArgs),
    /// Convert a CSV export into the sequence format using a recipe.
    Import(ImportArgs),
    /// Train a model on every fold and save checkpoints.
    Train(TrainArgs),
    /// Score a checkpoint and print the per-trial metric table.
    Eval(EvalArgs),
    /// Compare causal/acausal or dilated/regular variants.
    Ablate(AblateArgs),
    /// Run the finite-difference gradient suite.
    Gradcheck(GradcheckArgs),
    /// Score a predicted label file against a ground-truth label file.
    Metrics(MetricsArgs),
}

#[derive(Args, Debug)]
struct OutArgs {
    /// Output directory (default: $MSGCN_OUT_DIR, else ./msgcn-out).
    #[arg(long)]
    out: Option<PathBuf>,
}

impl OutArgs {
    fn dir(&self) -> Result<PathBuf> {
        let dir = self
            .out
            .clone()
            .or_else(|| std::env::var_os(OUT_DIR_ENV).map(PathBuf::from))
            .unwrap_or_else(|| PathBuf::from("msgcn-out"));
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        Ok(dir)
    }
}

#[derive(Args, Debug)]
struct GenDataArgs {
    #[command(flatten)]
    out: OutArgs,
    /// TOML file with generator settings; flags below override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    classes: Option<usize>,
    #[arg(long)]
    sequences: Option<usize>,
    #[arg(long)]
    min_len: Option<usize>,
    #[arg(long)]
    max_len: Option<usize>,
    #[arg(long)]
    min_segment: Option<usize>,
    #[arg(long)]
    max_segment: Option<usize>,
    /// Standard deviation of additive feature noise.
    #[arg(long)]
    noise: Option<f64>,
    /// Expected distractor bursts per sample.
    #[arg(long)]
    distractor_rate: Option<f64>,
    #[arg(long)]
    subjects: Option<usize>,
    /// Layout preset name or layout file.
    #[arg(long)]
    layout: Option<String>,
    #[arg(long)]
    pattern_seed: Option<u64>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args, Debug)]
struct ImportArgs {
    #[command(flatten)]
    out: OutArgs,
    /// CSV export to convert.
    #[arg(long)]
    csv: PathBuf,
    /// TOML column map.
    #[arg(long)]
    recipe: PathBuf,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum KindArg {
    Bilstm,
    Tcn,
    Stgcn,
    MsTcn,
    MsGcn,
}

impl From<KindArg> for ModelKind {
    fn from(k: KindArg) -> Self {
        match k {
            KindArg::Bilstm => ModelKind::Bilstm,
            KindArg::Tcn => ModelKind::Tcn,
            KindArg::Stgcn => ModelKind::Stgcn,
            KindArg::MsTcn => ModelKind::MsTcn,
            KindArg::MsGcn => ModelKind::MsGcn,
        }
    }
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum DilationArg {
    Doubling,
    Regular,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum MaskArg {
    Hadamard,
    RightMultiply,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum AxisArg {
    Causal,
    Dilation,
}

#[derive(Args, Debug)]
struct DataArgs {
    /// Dataset directory, or `synthetic` for the default generator.
    #[arg(long)]
    data: String,
    /// Layout preset or file (defaults to the dataset's layout).
    #[arg(long)]
    layout: Option<String>,
    /// Split plan TOML. Without it, all trials train and are evaluated.
    #[arg(long)]
    split: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct ModelArgs {
    #[arg(long, value_enum, default_value = "ms-gcn")]
    model: KindArg,
    #[arg(long, default_value_t = 64)]
    filters: usize,
    #[arg(long, default_value_t = 3)]
    kernel: usize,
    /// Temporal layers per stage.
    #[arg(long, default_value_t = 10)]
    layers: usize,
    #[arg(long, default_value_t = 3)]
    refinement_stages: usize,
    #[arg(long, value_enum, default_value = "doubling")]
    dilation: DilationArg,
    /// Use causal temporal convolutions (forward-only LSTM).
    #[arg(long)]
    causal: bool,
    #[arg(long, value_enum, default_value = "hadamard")]
    mask_mode: MaskArg,
    #[arg(long, default_value_t = 64)]
    lstm_hidden: usize,
    #[arg(long, default_value_t = 2)]
    lstm_layers: usize,
}

impl ModelArgs {
    fn config(&self, data: &Dataset) -> ModelConfig {
        let mut cfg = ModelConfig::new(self.model.into(), data.layout.clone(), data.channels(), data.num_classes());
        cfg.filters = self.filters;
        cfg.kernel = self.kernel;
        cfg.layers_per_stage = self.layers;
        cfg.refinement_stages = self.refinement_stages;
        cfg.dilation = match self.dilation {
            DilationArg::Doubling => DilationSchedule::Doubling,
            DilationArg::Regular => DilationSchedule::Regular,
        };
        cfg.causal = self.causal;
        cfg.mask_mode = match self.mask_mode {
            MaskArg::Hadamard => MaskMode::Hadamard,
            MaskArg::RightMultiply => MaskMode::RightMultiply,
        };
        cfg.lstm_hidden = self.lstm_hidden;
        cfg.lstm_layers = self.lstm_layers;
        cfg
    }
}

#[derive(Args, Debug)]
struct OptimArgs {
    #[arg(long, default_value_t = 100)]
    epochs: usize,
    #[arg(long, default_value_t = 4)]
    batch_size: usize,
    #[arg(long, default_value_t = 0.0005)]
    lr: f64,
    /// Weight of the smoothing term.
    #[arg(long, default_value_t = 0.15)]
    lambda: f64,
    /// Truncation threshold of the smoothing term.
    #[arg(long, default_value_t = 4.0)]
    tau: f64,
    /// Let smoothing gradients flow into the previous sample as well.
    #[arg(long)]
    full_smoothing_gradient: bool,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Number of folds trained concurrently.
    #[arg(long, default_value_t = 1)]
    folds_parallel: usize,
}

impl OptimArgs {
    fn config(&self) -> TrainConfig {
        TrainConfig {
            learning_rate: self.lr,
            epochs: self.epochs,
            batch_size: self.batch_size,
            loss: LossConfig {
                lambda: self.lambda,
                tau: self.tau,
                detach_prev: !self.full_smoothing_gradient,
                ..LossConfig::default()
            },
            seed: self.seed,
            ..TrainConfig::default()
        }
    }
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[command(flatten)]
    out: OutArgs,
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    model: ModelArgs,
    #[command(flatten)]
    optim: OptimArgs,
    /// Write an SVG timeline of test predictions per fold.
    #[arg(long)]
    plot: bool,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[command(flatten)]
    out: OutArgs,
    #[arg(long)]
    checkpoint: PathBuf,
    #[command(flatten)]
    data: DataArgs,
    /// Evaluate the test partition of this fold (requires --split).
    #[arg(long)]
    fold: Option<String>,
    /// Write an SVG timeline to this file.
    #[arg(long)]
    plot: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct AblateArgs {
    #[command(flatten)]
    out: OutArgs,
    #[arg(long, value_enum)]
    axis: AxisArg,
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    model: ModelArgs,
    #[command(flatten)]
    optim: OptimArgs,
}

#[derive(Args, Debug)]
struct GradcheckArgs {
    #[command(flatten)]
    out: OutArgs,
    /// Check every layer (the default when no --layer is given).
    #[arg(long)]
    all: bool,
    /// Restrict to these layers.
    #[arg(long, value_parser = clap::builder::PossibleValuesParser::new(LAYERS))]
    layer: Vec<String>,
    /// Random instances per layer.
    #[arg(long, default_value_t = 20)]
    instances: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args, Debug)]
struct MetricsArgs {
    #[command(flatten)]
    out: OutArgs,
    /// Predicted labels, one integer per line.
    pred: PathBuf,
    /// Ground-truth labels, one integer per line.
    gt: PathBuf,
    /// IoU thresholds.
    #[arg(long, value_delimiter = ',', default_values_t = DEFAULT_THRESHOLDS.to_vec())]
    tau: Vec<f64>,
}

/// Parse `args` (including the program name) and run. Returns the exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    match dispatch(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}

fn dispatch(cmd: Command) -> Result<()> {
    match cmd {
        Command::GenData(a) => gen_data(a),
        Command::Import(a) => import(a),
        Command::Train(a) => train_cmd(a),
        Command::Eval(a) => eval_cmd(a),
        Command::Ablate(a) => ablate_cmd(a),
        Command::Gradcheck(a) => gradcheck_cmd(a),
        Command::Metrics(a) => metrics_cmd(a),
    }
}

fn write(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn write_manifest(dir: &Path, m: &RunManifest) -> Result<()> {
    write(&dir.join("manifest.json"), &m.to_json())
}

fn gen_data(a: GenDataArgs) -> Result<()> {
    let mut cfg = match &a.config {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
            toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", p.display())))?
        }
        None => SyntheticConfig::default(),
    };
    macro_rules! set {
        ($($f:ident),*) => { $(if let Some(v) = a.$f { cfg.$f = v; })* };
    }
    set!(classes, sequences, min_len, max_len, min_segment, max_segment, noise, distractor_rate, subjects, pattern_seed, seed);
    if let Some(l) = &a.layout {
        cfg.layout = resolve_layout(l)?;
    }
    let data = generate_synthetic(&cfg)?;
    let dir = a.out.dir()?;
    let paths = save_dataset(&dir, &data)?;
    write(&dir.join("synthetic.toml"), &toml::to_string(&cfg).map_err(|e| Error::Format(e.to_string()))?)?;
    let m = RunManifest::new("gen-data", &format!("synthetic seed {}", cfg.seed), dataset_sha256(&data));
    write_manifest(&dir, &m)?;
    println!("wrote {} sequences to {}", paths.len(), dir.display());
    Ok(())
}

fn import(a: ImportArgs) -> Result<()> {
    let recipe = load_recipe(&a.recipe)?;
    let data = import_csv(&a.csv, &recipe)?;
    let dir = a.out.dir()?;
    let paths = save_dataset(&dir, &data)?;
    let m = RunManifest::new("import", &a.csv.display().to_string(), dataset_sha256(&data));
    write_manifest(&dir, &m)?;
    println!("imported {} sequences into {}", paths.len(), dir.display());
    Ok(())
}

fn load_data(args: &DataArgs, seed: u64) -> Result<(Dataset, String)> {
    let mut data = if args.data == "synthetic" {
        let mut cfg = SyntheticConfig {
            seed,
            ..SyntheticConfig::default()
        };
        if let Some(l) = &args.layout {
            cfg.layout = resolve_layout(l)?;
        }
        generate_synthetic(&cfg)?
    } else {
        load_dataset(Path::new(&args.data))?
    };
    if let Some(l) = &args.layout {
        let layout = resolve_layout(l)?;
        if layout.num_nodes != data.layout.num_nodes {
            return Err(Error::Config(format!(
                "layout has {} nodes but the data has {}",
                layout.num_nodes, data.layout.num_nodes
            )));
        }
        data.layout = layout;
    }
    let desc = if args.data == "synthetic" {
        format!("synthetic seed {seed}")
    } else {
        args.data.clone()
    };
    Ok((data, desc))
}

fn folds_for(args: &DataArgs, data: &Dataset) -> Result<Vec<Fold>> {
    match &args.split {
        Some(p) => make_splits(data, &load_split_plan(p)?),
        None => {
            let all: Vec<usize> = (0..data.trials.len()).collect();
            Ok(vec![Fold {
                name: "all".into(),
                train: all.clone(),
                test: all,
            }])
        }
    }
}

fn summary(name: &str, r: &crate::metrics::F1Report) -> String {
    let f: Vec<String> = r.entries.iter().map(|e| format!("F1@{:.0} {:.2}", e.tau * 100.0, e.f1 * 100.0)).collect();
    format!("{name}: {}  accuracy {:.2}", f.join("  "), r.accuracy * 100.0)
}

fn plot_trials(model: &mut Model, data: &Dataset, path: &Path) -> Result<()> {
    let preds: Vec<Vec<usize>> = data
        .trials
        .iter()
        .map(|t| model.predict(&t.sequence.values).map(|p| p.labels()))
        .collect::<Result<_>>()?;
    let rows: Vec<TimelineRow> = data
        .trials
        .iter()
        .zip(&preds)
        .map(|(t, p)| TimelineRow {
            name: &t.sequence.trial_id,
            truth: &t.labels.labels,
            predicted: p,
        })
        .collect();
    write(path, &timeline_svg(&rows, &data.class_names))
}

fn train_cmd(a: TrainArgs) -> Result<()> {
    let train_cfg = a.optim.config();
    let (data, desc) = load_data(&a.data, train_cfg.seed)?;
    let model_cfg = a.model.config(&data);
    model_cfg.validate()?;
    train_cfg.validate()?;
    let folds = folds_for(&a.data, &data)?;
    let dir = a.out.dir()?;
    let mut results = run_folds(&model_cfg, &train_cfg, &data, &folds, a.optim.folds_parallel)?;

    let mut manifest = RunManifest::new("train", &desc, dataset_sha256(&data));
    manifest.model = Some(model_cfg);
    manifest.train = Some(train_cfg.clone());
    let mut rows = Vec::new();
    let mut losses = String::from("fold,epoch,loss\n");
    for (i, (fold, r)) in folds.iter().zip(results.iter_mut()).enumerate() {
        let fdir = dir.join(&fold.name);
        std::fs::create_dir_all(&fdir).map_err(|e| Error::io(&fdir, e))?;
        r.model.save(&fdir.join("model.ckpt"))?;
        if a.plot {
            plot_trials(&mut r.model, &data.subset(&fold.test), &fdir.join("timeline.svg"))?;
        }
        for (e, l) in r.log.epoch_losses.iter().enumerate() {
            losses += &format!("{},{e},{l}\n", fold.name);
        }
        rows.extend(r.report.rows());
        println!("{}", summary(&fold.name, &r.report.mean));
        manifest.folds.push(FoldRecord::from_result(&data, fold, fold_seed(train_cfg.seed, i), r));
    }
    write(&dir.join("metrics.csv"), &rows_to_csv(&rows)?)?;
    write(&dir.join("losses.csv"), &losses)?;
    write_manifest(&dir, &manifest)
}

fn eval_cmd(a: EvalArgs) -> Result<()> {
    let mut model = Model::load(&a.checkpoint)?;
    let (data, desc) = load_data(&a.data, 0)?;
    let data = match &a.fold {
        Some(name) => {
            if a.data.split.is_none() {
                return Err(Error::Config("--fold requires --split".into()));
            }
            let folds = folds_for(&a.data, &data)?;
            let fold = folds
                .iter()
                .find(|f| &f.name == name)
                .ok_or_else(|| Error::Config(format!("no fold named '{name}'")))?;
            data.subset(&fold.test)
        }
        None => data,
    };
    let report = evaluate(&mut model, &data, &DEFAULT_THRESHOLDS)?;
    let csv = rows_to_csv(&report.rows())?;
    print!("{csv}");
    println!("{}", summary("mean", &report.mean));
    let dir = a.out.dir()?;
    write(&dir.join("metrics.csv"), &csv)?;
    if let Some(p) = &a.plot {
        plot_trials(&mut model, &data, p)?;
    }
    let mut manifest = RunManifest::new("eval", &desc, dataset_sha256(&data));
    manifest.model = Some(model.config().clone());
    manifest.folds.push(FoldRecord {
        name: a.fold.unwrap_or_else(|| "all".into()),
        seed: 0,
        train_trials: Vec::new(),
        test_trials: data.trials.iter().map(|t| t.sequence.trial_id.clone()).collect(),
        epoch_losses: Vec::new(),
        metrics: Some(report.mean),
        checkpoint_sha256: Some(crate::container::sha256_hex(&model.to_bytes())),
    });
    write_manifest(&dir, &manifest)
}

fn ablate_cmd(a: AblateArgs) -> Result<()> {
    let train_cfg = a.optim.config();
    let (data, desc) = load_data(&a.data, train_cfg.seed)?;
    let model_cfg = a.model.config(&data);
    model_cfg.validate()?;
    let folds = folds_for(&a.data, &data)?;
    let axis = match a.axis {
        AxisArg::Causal => AblationAxis::Causal,
        AxisArg::Dilation => AblationAxis::Dilation,
    };
    let report = ablate(&model_cfg, &train_cfg, &data, &folds, axis, a.optim.folds_parallel)?;
    let csv = report.to_csv();
    print!("{csv}");
    let dir = a.out.dir()?;
    write(&dir.join("ablation.csv"), &csv)?;
    write(
        &dir.join("ablation.json"),
        &serde_json::to_string_pretty(&report).expect("report serializes"),
    )?;
    let mut manifest = RunManifest::new(&format!("ablate {axis:?}").to_lowercase(), &desc, dataset_sha256(&data));
    manifest.model = Some(model_cfg);
    manifest.train = Some(train_cfg);
    write_manifest(&dir, &manifest)
}

fn gradcheck_cmd(a: GradcheckArgs) -> Result<()> {
    let layers: Vec<&str> = if a.all || a.layer.is_empty() {
        LAYERS.to_vec()
    } else {
        a.layer.iter().map(String::as_str).collect()
    };
    let checks = gradient_suite(&layers, a.instances.max(1), a.seed)?;
    let mut table = String::from("layer,instances,redrawn,max_rel_error,status\n");
    for c in &checks {
        let status = if c.passed() { "pass" } else { "FAIL" };
        println!("{:<28} {:.3e}  {status}", c.layer, c.max_rel_error);
        table += &format!("{},{},{},{:e},{status}\n", c.layer, c.instances, c.redrawn, c.max_rel_error);
    }
    let dir = a.out.dir()?;
    write(&dir.join("gradcheck.csv"), &table)?;
    write_manifest(&dir, &RunManifest::new("gradcheck", "generated instances", String::new()))?;
    match checks.iter().find(|c| !c.passed()) {
        Some(c) => Err(Error::Domain {
            op: "gradcheck",
            detail: format!("{} relative error {:e} exceeds {GRAD_TOLERANCE:e}", c.layer, c.max_rel_error),
        }),
        None => Ok(()),
    }
}

fn metrics_cmd(a: MetricsArgs) -> Result<()> {
    let read = |p: &Path| -> Result<Vec<usize>> {
        let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
        Ok(parse_labels(p, &text, usize::MAX)?.labels)
    };
    let pred = read(&a.pred)?;
    let gt = read(&a.gt)?;
    let report = evaluate_pair(&pred, &gt, &a.tau)?;
    let csv = rows_to_csv(&trial_rows(&a.gt.display().to_string(), &report))?;
    print!("{csv}");
    let dir = a.out.dir()?;
    write(&dir.join("metrics.csv"), &csv)?;
    let mut bytes = std::fs::read(&a.pred).map_err(|e| Error::io(&a.pred, e))?;
    bytes.extend(std::fs::read(&a.gt).map_err(|e| Error::io(&a.gt, e))?);
    write_manifest(
        &dir,
        &RunManifest::new("metrics", &a.gt.display().to_string(), crate::container::sha256_hex(&bytes)),
    )
}
