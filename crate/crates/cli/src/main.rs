use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde_json::json;

use openset::harness::{
    self, evaluate_test, export_report, fit_postprocessor,
    report::{curve_csv, grid_csv, histogram_csv, report_csv},
    score_postprocessor, ExperimentConfig, ExperimentSummary, FitBundle, GridCell, ProtocolSource,
    SplitData,
};
use openset::modelio::{self, Checkpoint, PostProcessorFile};
use openset::postproc::{EvmParams, Method, OpenMaxParams, PostProcessorModel, ProserParams};
use openset::protocol::{self, ProtocolData, ProtocolSpec};
use openset::training::{self, OptimizerConfig, Regime};
use openset::{Category, Error, LabeledSample, Result, Split};

/// Open-set classification experiments: protocol generation, training,
/// post-processing and evaluation.
#[derive(Parser)]
#[command(name = "openset", version)]
struct Cli {
    /// Relative output paths are resolved against this directory.
    #[arg(long, global = true, env = "OPENSET_OUTPUT_ROOT")]
    output_root: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic protocol as a feature CSV.
    Generate(GenerateArgs),
    /// Train a network under one regime.
    Train(TrainArgs),
    /// Write deep features and logits of every sample.
    Extract(ExtractArgs),
    /// Fit one post-processor with fixed hyperparameters.
    Fit(FitArgs),
    /// Grid-search a post-processor on the validation split.
    Grid(GridArgs),
    /// Evaluate a post-processor on the test split.
    Eval(EvalArgs),
    /// Re-export report files from a results.json.
    Report(ReportArgs),
    /// Run every regime and post-processor end to end.
    RunAll(RunAllArgs),
}

#[derive(Args)]
struct GenerateArgs {
    /// JSON protocol spec; flags override its fields.
    #[arg(long)]
    spec: Option<PathBuf>,
    /// Start from the easy (distant unknowns) or hard (close unknowns) preset.
    #[arg(long, value_parser = ["easy", "hard"])]
    preset: Option<String>,
    #[arg(long)]
    known_classes: Option<usize>,
    #[arg(long)]
    negative_classes: Option<usize>,
    #[arg(long)]
    unknown_classes: Option<usize>,
    #[arg(long)]
    dim: Option<usize>,
    #[arg(long)]
    train_per_class: Option<usize>,
    #[arg(long)]
    val_per_class: Option<usize>,
    #[arg(long)]
    test_per_class: Option<usize>,
    #[arg(long)]
    neg_offset: Option<f64>,
    #[arg(long)]
    unk_offset: Option<f64>,
    #[arg(long)]
    cluster_spread: Option<f64>,
    #[arg(long)]
    spacing: Option<f64>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output CSV; the manifest goes next to it with a .json extension.
    #[arg(long, default_value = "protocol.csv")]
    out: PathBuf,
}

#[derive(Args)]
struct OptimizerArgs {
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    learning_rate: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    /// Hidden layer widths, e.g. 64,64.
    #[arg(long, value_delimiter = ',')]
    hidden: Option<Vec<usize>>,
}

impl OptimizerArgs {
    fn apply(&self, mut opt: OptimizerConfig) -> OptimizerConfig {
        if let Some(v) = self.epochs {
            opt.epochs = v;
        }
        if let Some(v) = self.learning_rate {
            opt.learning_rate = v;
        }
        if let Some(v) = self.batch_size {
            opt.batch_size = v;
        }
        if let Some(v) = &self.hidden {
            opt.hidden = v.clone();
        }
        opt
    }
}

#[derive(Args)]
struct TrainArgs {
    /// Feature CSV.
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    regime: Regime,
    #[command(flatten)]
    optimizer: OptimizerArgs,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value = "model.bin")]
    out: PathBuf,
}

#[derive(Args)]
struct ExtractArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    model: PathBuf,
    #[arg(long, default_value = "features.csv")]
    features_out: PathBuf,
    #[arg(long, default_value = "logits.csv")]
    logits_out: PathBuf,
}

#[derive(Args)]
struct FitArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    method: Method,
    #[arg(long)]
    tail_size: Option<usize>,
    #[arg(long)]
    distance_multiplier: Option<f64>,
    #[arg(long)]
    alpha: Option<usize>,
    #[arg(long)]
    cover_threshold: Option<f64>,
    #[arg(long)]
    dummy_count: Option<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value = "postproc.bin")]
    out: PathBuf,
}

#[derive(Args)]
struct GridArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    method: Method,
    /// Experiment config supplying grids and FPR targets; defaults otherwise.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value = "grid")]
    out_dir: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    model: PathBuf,
    /// Fitted post-processor file.
    #[arg(long, conflicts_with = "method")]
    postproc: Option<PathBuf>,
    /// Parameter-free method (mss or mls) instead of a file.
    #[arg(long)]
    method: Option<Method>,
    #[arg(long, default_value_t = 20)]
    bins: usize,
    #[arg(long, default_value = "eval")]
    out_dir: PathBuf,
}

#[derive(Args)]
struct ReportArgs {
    /// results.json written by run-all.
    #[arg(long)]
    results: PathBuf,
    #[arg(long, default_value = "report")]
    out_dir: PathBuf,
}

#[derive(Args)]
struct RunAllArgs {
    /// Experiment config (JSON); defaults apply to missing keys.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Feature CSV to use instead of the configured protocol.
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long, value_delimiter = ',')]
    regimes: Option<Vec<Regime>>,
    #[arg(long, value_delimiter = ',')]
    methods: Option<Vec<Method>>,
    #[command(flatten)]
    optimizer: OptimizerArgs,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    output_dir: Option<PathBuf>,
}

struct Ctx {
    root: Option<PathBuf>,
}

impl Ctx {
    fn out(&self, p: &Path) -> PathBuf {
        match &self.root {
            Some(r) if p.is_relative() => r.join(p),
            _ => p.to_path_buf(),
        }
    }
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            std::fs::create_dir_all(dir)?;
        }
    }
    std::fs::write(path, contents)?;
    Ok(())
}

fn generate(ctx: &Ctx, a: GenerateArgs) -> Result<serde_json::Value> {
    let mut spec = match (&a.spec, a.preset.as_deref()) {
        (Some(p), _) => serde_json::from_str(&std::fs::read_to_string(p)?)?,
        (None, Some("hard")) => ProtocolSpec::hard(),
        _ => ProtocolSpec::easy(),
    };
    macro_rules! set {
        ($($f:ident),*) => { $( if let Some(v) = a.$f { spec.$f = v; } )* };
    }
    set!(
        known_classes,
        negative_classes,
        unknown_classes,
        dim,
        train_per_class,
        val_per_class,
        test_per_class,
        neg_offset,
        unk_offset,
        cluster_spread
    );
    if a.spacing.is_some() {
        spec.spacing = a.spacing;
    }
    let data = protocol::generate_protocol(&spec, a.seed)?;
    let out = ctx.out(&a.out);
    write(&out, data.to_csv())?;
    let manifest = out.with_extension("json");
    write(
        &manifest,
        serde_json::to_string_pretty(&data.manifest)? + "\n",
    )?;
    Ok(json!({ "samples": data.len(), "written": [out, manifest] }))
}

fn train(ctx: &Ctx, a: TrainArgs) -> Result<serde_json::Value> {
    let data = protocol::load_features_csv(&a.data)?;
    let opt = a.optimizer.apply(OptimizerConfig::default());
    let samples = data.view(Split::Train, &[Category::Known, Category::Negative]);
    let k = data.known_classes();
    let model = training::train(a.regime, &samples, k, &opt, a.seed)?;
    let out = ctx.out(&a.out);
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    modelio::save_checkpoint(
        &out,
        &Checkpoint {
            regime: a.regime,
            known_classes: k,
            model,
        },
    )?;
    Ok(json!({ "regime": a.regime.as_str(), "written": [out] }))
}

fn load_pair(data: &Path, model: &Path) -> Result<(ProtocolData, Checkpoint)> {
    let data = protocol::load_features_csv(data)?;
    let ckpt = modelio::load_checkpoint(model)?;
    if ckpt.known_classes != data.known_classes() || ckpt.model.input_dim() != data.dim() {
        return Err(Error::InvalidParameter(format!(
            "model expects K = {} and {} inputs, data has K = {} and {} features",
            ckpt.known_classes,
            ckpt.model.input_dim(),
            data.known_classes(),
            data.dim()
        )));
    }
    Ok((data, ckpt))
}

fn extract(ctx: &Ctx, a: ExtractArgs) -> Result<serde_json::Value> {
    let (data, ckpt) = load_pair(&a.data, &a.model)?;
    let samples = data.samples();
    let (features, logits) = training::extract(&ckpt.model, samples)?;
    let rebuild = |m: &openset::numerics::Mat| -> Result<ProtocolData> {
        let rows = samples
            .iter()
            .zip(m.iter_rows())
            .map(|(s, r)| LabeledSample {
                x: r.to_vec(),
                ..s.clone()
            })
            .collect();
        ProtocolData::new(rows, data.known_classes())
    };
    let f_out = ctx.out(&a.features_out);
    let l_out = ctx.out(&a.logits_out);
    write(&f_out, rebuild(&features)?.to_csv())?;
    write(&l_out, rebuild(&logits)?.to_csv())?;
    Ok(json!({ "samples": samples.len(), "written": [f_out, l_out] }))
}

fn require<T>(v: Option<T>, flag: &str, method: Method) -> Result<T> {
    v.ok_or_else(|| Error::InvalidParameter(format!("--{flag} is required for {method}")))
}

fn fit(ctx: &Ctx, a: FitArgs) -> Result<serde_json::Value> {
    let (data, ckpt) = load_pair(&a.data, &a.model)?;
    let cell = match a.method {
        Method::Mss => GridCell::Mss,
        Method::Mls => GridCell::Mls,
        Method::OpenMax => GridCell::OpenMax(OpenMaxParams {
            tail_size: require(a.tail_size, "tail-size", a.method)?,
            distance_multiplier: require(a.distance_multiplier, "distance-multiplier", a.method)?,
            alpha: require(a.alpha, "alpha", a.method)?,
        }),
        Method::Evm => GridCell::Evm(EvmParams {
            tail_size: require(a.tail_size, "tail-size", a.method)?,
            distance_multiplier: require(a.distance_multiplier, "distance-multiplier", a.method)?,
            cover_threshold: a.cover_threshold,
        }),
        Method::Proser => GridCell::Proser {
            dummy_count: require(a.dummy_count, "dummy-count", a.method)?,
        },
    };
    let bundle = FitBundle::from_protocol(&data, ckpt.model)?;
    let model = fit_postprocessor(&cell, &bundle, &ProserParams::default(), a.seed)?;
    let out = ctx.out(&a.out);
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    modelio::save_postprocessor(
        &out,
        &PostProcessorFile {
            known_classes: data.known_classes(),
            model,
        },
    )?;
    Ok(json!({ "method": a.method.as_str(), "written": [out] }))
}

fn grid(ctx: &Ctx, a: GridArgs) -> Result<serde_json::Value> {
    let config = match &a.config {
        Some(p) => ExperimentConfig::from_json_file(p)?,
        None => ExperimentConfig::default(),
    };
    let (data, ckpt) = load_pair(&a.data, &a.model)?;
    let bundle = FitBundle::from_protocol(&data, ckpt.model)?;
    let outcome = harness::grid_search(a.method, &bundle, &config.grids, &config.fpr_targets, a.seed)?;
    let dir = ctx.out(&a.out_dir);
    std::fs::create_dir_all(&dir)?;
    write(&dir.join("grid.csv"), grid_csv(a.method, &outcome.entries))?;
    write(
        &dir.join("grid.json"),
        serde_json::to_string_pretty(&outcome.entries)? + "\n",
    )?;
    let model_path = dir.join("postproc.bin");
    modelio::save_postprocessor(
        &model_path,
        &PostProcessorFile {
            known_classes: data.known_classes(),
            model: outcome.model,
        },
    )?;
    let best = &outcome.entries[outcome.best];
    Ok(json!({
        "cells": outcome.entries.len(),
        "failed": outcome.entries.iter().filter(|e| e.error.is_some()).count(),
        "best": best.cell,
        "sigma": best.sigma,
        "written": [dir.join("grid.csv"), dir.join("grid.json"), model_path],
    }))
}

fn eval(ctx: &Ctx, a: EvalArgs) -> Result<serde_json::Value> {
    let (data, ckpt) = load_pair(&a.data, &a.model)?;
    let k = data.known_classes();
    let model = match (&a.postproc, a.method) {
        (Some(p), _) => {
            let f = modelio::load_postprocessor(p)?;
            if f.known_classes != k {
                return Err(Error::InvalidParameter(format!(
                    "post-processor was fitted for K = {}, data has K = {k}",
                    f.known_classes
                )));
            }
            f.model
        }
        (None, Some(Method::Mss)) => PostProcessorModel::Mss,
        (None, Some(Method::Mls)) => PostProcessorModel::Mls,
        (None, Some(m)) => {
            return Err(Error::InvalidParameter(format!(
                "{m} needs a fitted model; pass --postproc"
            )))
        }
        (None, None) => {
            return Err(Error::InvalidParameter(
                "pass --postproc or --method".into(),
            ))
        }
    };
    let method = model.method();
    let test = data.view(
        Split::Test,
        &[Category::Known, Category::Negative, Category::Unknown],
    );
    let split = SplitData::from_samples(&ckpt.model, &test)?;
    let scores = score_postprocessor(&model, &split, k)?;
    let t = evaluate_test(&scores, a.bins)?;
    let summary = ExperimentSummary {
        manifest: data.manifest.clone(),
        known_classes: k,
        unknown_reads_before_test: 0,
        cells: vec![harness::CellResult {
            regime: ckpt.regime,
            method,
            grid: Vec::new(),
            selected: None,
            test: Some(t.clone()),
            error: None,
        }],
    };
    let rows = harness::report::report_rows(&summary);
    let dir = ctx.out(&a.out_dir);
    std::fs::create_dir_all(&dir)?;
    write(&dir.join("report.csv"), report_csv(&rows))?;
    write(&dir.join("report.json"), serde_json::to_string_pretty(&rows)? + "\n")?;
    write(&dir.join("oscr_negative.csv"), curve_csv(&t.negative_curve))?;
    write(&dir.join("oscr_unknown.csv"), curve_csv(&t.unknown_curve))?;
    write(&dir.join("histogram.csv"), histogram_csv(&t.histogram))?;
    Ok(json!({
        "regime": ckpt.regime.as_str(),
        "method": method.as_str(),
        "negative": t.negative,
        "unknown": t.unknown,
        "written": [dir],
    }))
}

fn report(ctx: &Ctx, a: ReportArgs) -> Result<serde_json::Value> {
    let summary: ExperimentSummary = serde_json::from_str(&std::fs::read_to_string(&a.results)?)?;
    let dir = ctx.out(&a.out_dir);
    export_report(&summary, &dir)?;
    Ok(json!({ "cells": summary.cells.len(), "written": [dir] }))
}

fn run_all(ctx: &Ctx, a: RunAllArgs) -> Result<serde_json::Value> {
    let mut config = match &a.config {
        Some(p) => ExperimentConfig::from_json_file(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(p) = a.data {
        config.protocol = ProtocolSource::Features(p);
    }
    if let Some(r) = a.regimes {
        config.regimes = r;
    }
    if let Some(m) = a.methods {
        config.methods = m;
    }
    if let Some(s) = a.seed {
        config.seed = s;
    }
    if let Some(o) = a.output_dir {
        config.output_dir = o;
    }
    config.optimizer = a.optimizer.apply(config.optimizer);
    config.output_dir = ctx.out(&config.output_dir);
    let summary = harness::run_experiment(&config)?;
    let failed: Vec<String> = summary
        .cells
        .iter()
        .filter(|c| c.error.is_some())
        .map(|c| c.name())
        .collect();
    Ok(json!({
        "cells": summary.cells.len(),
        "failed": failed,
        "written": [config.output_dir],
    }))
}

fn error_json(kind: &str, message: &str) -> String {
    json!({ "error": { "kind": kind, "message": message } }).to_string()
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                print!("{e}");
                return ExitCode::SUCCESS;
            }
            let msg = e.render().to_string();
            eprintln!("{}", error_json("usage", msg.trim()));
            return ExitCode::from(2);
        }
    };
    let ctx = Ctx {
        root: cli.output_root,
    };
    let result = match cli.command {
        Command::Generate(a) => generate(&ctx, a),
        Command::Train(a) => train(&ctx, a),
        Command::Extract(a) => extract(&ctx, a),
        Command::Fit(a) => fit(&ctx, a),
        Command::Grid(a) => grid(&ctx, a),
        Command::Eval(a) => eval(&ctx, a),
        Command::Report(a) => report(&ctx, a),
        Command::RunAll(a) => run_all(&ctx, a),
    };
    match result {
        Ok(v) => {
            println!("{v}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("{}", error_json(e.kind(), &e.to_string()));
            ExitCode::FAILURE
        }
    }
}
