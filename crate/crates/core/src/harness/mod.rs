//! Experiment orchestration: train every regime, select post-processor
//! hyperparameters on validation knowns and negatives, then evaluate the
//! selected models on the test split against negatives and unknowns
//! separately.

pub mod grid;
pub mod report;

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::{evaluate, score_histogram, EvalSummary, Histogram, OscrCurve, DEFAULT_FPR_TARGETS};
use crate::numerics::Mat;
use crate::postproc::{
    evm_fit, evm_scores, mls_scores, mss_scores, openmax_fit, openmax_scores, proser_finetune,
    proser_scores, Method, PostProcessorModel, ProserParams, ScoreMatrix,
};
use crate::protocol::{generate_protocol, load_features_csv, Manifest, ProtocolData, ProtocolSpec};
use crate::sample::{Category, LabeledSample, Split};
use crate::training::{self, BackboneModel, OptimizerConfig, Regime};

pub use grid::{grid_cells, grid_search_with, GridCell, GridEntry, GridOutcome};
pub use report::{export_report, ReportRow};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ProtocolSource {
    Synthetic(ProtocolSpec),
    /// Feature CSV; its rows are used as network inputs.
    Features(PathBuf),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OpenMaxGrid {
    pub tail_sizes: Vec<usize>,
    pub distance_multipliers: Vec<f64>,
    pub alphas: Vec<usize>,
}

impl Default for OpenMaxGrid {
    fn default() -> Self {
        OpenMaxGrid {
            tail_sizes: vec![10, 100, 250, 500, 750, 1000],
            distance_multipliers: vec![1.5, 1.7, 2.0, 2.3],
            alphas: vec![2, 3, 5, 10],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvmGrid {
    pub tail_sizes: Vec<usize>,
    pub distance_multipliers: Vec<f64>,
    /// Model reduction threshold; off unless set.
    pub cover_threshold: Option<f64>,
}

impl Default for EvmGrid {
    fn default() -> Self {
        EvmGrid {
            tail_sizes: vec![10, 25, 50, 75, 100, 150, 200, 300, 500, 1000],
            distance_multipliers: vec![0.10, 0.20, 0.30, 0.40, 0.50, 0.70, 0.90, 1.00],
            cover_threshold: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProserGrid {
    pub dummy_counts: Vec<usize>,
    /// Fine-tuning settings; `dummy_count` is taken from the grid.
    pub training: ProserParams,
}

impl Default for ProserGrid {
    fn default() -> Self {
        ProserGrid {
            dummy_counts: vec![1, 2, 5, 10, 25, 100],
            training: ProserParams::default(),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Grids {
    pub openmax: OpenMaxGrid,
    pub evm: EvmGrid,
    pub proser: ProserGrid,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub protocol: ProtocolSource,
    pub regimes: Vec<Regime>,
    pub methods: Vec<Method>,
    pub grids: Grids,
    pub optimizer: OptimizerConfig,
    /// FPR targets of the model-selection criterion.
    pub fpr_targets: Vec<f64>,
    pub histogram_bins: usize,
    pub output_dir: PathBuf,
    pub seed: u64,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            protocol: ProtocolSource::Synthetic(ProtocolSpec::default()),
            regimes: Regime::ALL.to_vec(),
            methods: Method::ALL.to_vec(),
            grids: Grids::default(),
            optimizer: OptimizerConfig::default(),
            fpr_targets: DEFAULT_FPR_TARGETS.to_vec(),
            histogram_bins: 20,
            output_dir: PathBuf::from("results"),
            seed: 0,
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidParameter(m.to_string()));
        if self.regimes.is_empty() {
            return bad("no training regimes");
        }
        if self.methods.is_empty() {
            return bad("no post-processors");
        }
        let g = &self.grids;
        if g.openmax.tail_sizes.is_empty()
            || g.openmax.distance_multipliers.is_empty()
            || g.openmax.alphas.is_empty()
            || g.evm.tail_sizes.is_empty()
            || g.evm.distance_multipliers.is_empty()
            || g.proser.dummy_counts.is_empty()
        {
            return bad("hyperparameter grids must be non-empty");
        }
        if self.fpr_targets.is_empty() || self.fpr_targets.iter().any(|&z| !(z > 0.0 && z <= 1.0)) {
            return bad("FPR targets must be non-empty and lie in (0, 1]");
        }
        if self.histogram_bins < 2 {
            return bad("need at least 2 histogram bins");
        }
        if let ProtocolSource::Synthetic(spec) = &self.protocol {
            spec.validate()?;
        }
        Ok(())
    }

    pub fn from_json_file(path: impl AsRef<Path>) -> Result<Self> {
        let cfg: ExperimentConfig = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        cfg.validate()?;
        Ok(cfg)
    }
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Independent seed for a sub-task identified by `stream`.
pub fn derive_seed(seed: u64, stream: u64) -> u64 {
    splitmix(seed ^ splitmix(stream))
}

fn regime_stream(regime: Regime) -> u64 {
    1 + Regime::ALL.iter().position(|&r| r == regime).expect("listed") as u64
}

/// Inputs with their deep features and logits under one network.
#[derive(Debug, Clone, PartialEq)]
pub struct SplitData {
    pub inputs: Mat,
    pub features: Mat,
    pub logits: Mat,
    pub labels: Vec<usize>,
    pub categories: Vec<Category>,
}

impl SplitData {
    pub fn from_samples(model: &BackboneModel, samples: &[LabeledSample]) -> Result<Self> {
        let rows: Vec<&[f64]> = samples.iter().map(|s| s.x.as_slice()).collect();
        let inputs = if rows.is_empty() {
            Mat::zeros(0, model.input_dim())
        } else {
            Mat::from_rows(&rows)?
        };
        let (features, logits) = training::extract(model, samples)?;
        Ok(SplitData {
            inputs,
            features,
            logits,
            labels: samples.iter().map(|s| s.label).collect(),
            categories: samples.iter().map(|s| s.category).collect(),
        })
    }
}

/// What post-processors are fitted and selected on.
#[derive(Debug, Clone)]
pub struct FitBundle {
    pub known_classes: usize,
    pub backbone: BackboneModel,
    /// Training knowns.
    pub train: SplitData,
    /// Validation knowns and negatives.
    pub val: SplitData,
}

impl FitBundle {
    pub fn from_protocol(data: &ProtocolData, backbone: BackboneModel) -> Result<Self> {
        let train = SplitData::from_samples(&backbone, &data.view(Split::Train, &[Category::Known]))?;
        let val = SplitData::from_samples(
            &backbone,
            &data.view(Split::Val, &[Category::Known, Category::Negative]),
        )?;
        Ok(FitBundle {
            known_classes: data.known_classes(),
            backbone,
            train,
            val,
        })
    }
}

/// Fits the post-processor of one grid cell.
pub fn fit_postprocessor(
    cell: &GridCell,
    bundle: &FitBundle,
    proser: &ProserParams,
    seed: u64,
) -> Result<PostProcessorModel> {
    let k = bundle.known_classes;
    let t = &bundle.train;
    Ok(match cell {
        GridCell::Mss => PostProcessorModel::Mss,
        GridCell::Mls => PostProcessorModel::Mls,
        GridCell::OpenMax(p) => {
            PostProcessorModel::OpenMax(openmax_fit(&t.features, &t.logits, &t.labels, k, *p)?)
        }
        GridCell::Evm(p) => PostProcessorModel::Evm(evm_fit(&t.features, &t.labels, k, *p)?),
        GridCell::Proser { dummy_count } => {
            let params = ProserParams {
                dummy_count: *dummy_count,
                ..*proser
            };
            PostProcessorModel::Proser(proser_finetune(
                &bundle.backbone,
                &t.inputs,
                &t.labels,
                k,
                params,
                seed,
            )?)
        }
    })
}

/// Known-class scores of `data` under a fitted post-processor.
pub fn score_postprocessor(
    model: &PostProcessorModel,
    data: &SplitData,
    known_classes: usize,
) -> Result<ScoreMatrix> {
    let k = known_classes;
    let scores = match model {
        PostProcessorModel::Mss => mss_scores(&data.logits, k)?,
        PostProcessorModel::Mls => mls_scores(&data.logits, k)?,
        PostProcessorModel::OpenMax(m) => {
            openmax_scores(m, &data.features, &data.logits.truncate_cols(k))?
        }
        PostProcessorModel::Evm(m) => evm_scores(m, &data.features)?,
        PostProcessorModel::Proser(m) => proser_scores(m, &data.inputs)?,
    };
    ScoreMatrix::new(scores, data.labels.clone(), data.categories.clone())
}

/// Grid search for one method on the validation split of `bundle`.
pub fn grid_search(
    method: Method,
    bundle: &FitBundle,
    grids: &Grids,
    targets: &[f64],
    seed: u64,
) -> Result<GridOutcome<GridCell, PostProcessorModel>> {
    let cells = grid_cells(method, grids);
    grid_search_with(&cells, targets, |i, cell| {
        let model = fit_postprocessor(cell, bundle, &grids.proser.training, derive_seed(seed, i as u64))?;
        let scores = score_postprocessor(&model, &bundle.val, bundle.known_classes)?;
        Ok((model, scores))
    })
}

/// Test-split evaluation of one post-processor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TestEvaluation {
    pub negative: EvalSummary,
    pub unknown: EvalSummary,
    pub negative_curve: OscrCurve,
    pub unknown_curve: OscrCurve,
    pub histogram: Histogram,
}

pub fn evaluate_test(scores: &ScoreMatrix, bins: usize) -> Result<TestEvaluation> {
    let (negative, negative_curve) = evaluate(scores, Category::Negative)?;
    let (unknown, unknown_curve) = evaluate(scores, Category::Unknown)?;
    Ok(TestEvaluation {
        negative,
        unknown,
        negative_curve,
        unknown_curve,
        histogram: score_histogram(scores, bins)?,
    })
}

/// One regime and post-processor combination.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellResult {
    pub regime: Regime,
    pub method: Method,
    pub grid: Vec<GridEntry<GridCell>>,
    pub selected: Option<GridCell>,
    pub test: Option<TestEvaluation>,
    pub error: Option<String>,
}

impl CellResult {
    pub fn name(&self) -> String {
        format!("{}_{}", self.regime, self.method)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentSummary {
    pub manifest: Option<Manifest>,
    pub known_classes: usize,
    /// Unknown samples read before test evaluation started; always 0.
    pub unknown_reads_before_test: usize,
    pub cells: Vec<CellResult>,
}

impl ExperimentSummary {
    pub fn cell(&self, regime: Regime, method: Method) -> Option<&CellResult> {
        self.cells
            .iter()
            .find(|c| c.regime == regime && c.method == method)
    }
}

pub fn load_protocol(config: &ExperimentConfig) -> Result<ProtocolData> {
    match &config.protocol {
        ProtocolSource::Synthetic(spec) => generate_protocol(spec, derive_seed(config.seed, 0)),
        ProtocolSource::Features(path) => load_features_csv(path),
    }
}

struct Selected {
    bundle: FitBundle,
    cells: Vec<(Method, std::result::Result<GridOutcome<GridCell, PostProcessorModel>, String>)>,
}

/// Runs the experiment without touching the disk.
pub fn run_in_memory(config: &ExperimentConfig, data: &ProtocolData) -> Result<ExperimentSummary> {
    config.validate()?;
    let k = data.known_classes();
    let fit_samples = data.view(Split::Train, &[Category::Known, Category::Negative]);

    // model selection; unknown samples must stay untouched
    let mut selected = Vec::new();
    for &regime in &config.regimes {
        let seed = derive_seed(config.seed, regime_stream(regime));
        let backbone = training::train(regime, &fit_samples, k, &config.optimizer, seed)?;
        let bundle = FitBundle::from_protocol(data, backbone)?;
        let cells = config
            .methods
            .iter()
            .map(|&m| {
                let r = grid_search(m, &bundle, &config.grids, &config.fpr_targets, seed)
                    .map_err(|e| e.to_string());
                (m, r)
            })
            .collect();
        selected.push((regime, Selected { bundle, cells }));
    }
    let reads = data.unknown_reads();
    if reads != 0 {
        return Err(Error::IsolationViolated(reads));
    }

    let test_samples = data.view(
        Split::Test,
        &[Category::Known, Category::Negative, Category::Unknown],
    );
    let mut cells = Vec::new();
    for (regime, sel) in selected {
        let test = SplitData::from_samples(&sel.bundle.backbone, &test_samples)?;
        for (method, outcome) in sel.cells {
            let cell = match outcome {
                Ok(o) => {
                    let eval = score_postprocessor(&o.model, &test, k)
                        .and_then(|s| evaluate_test(&s, config.histogram_bins));
                    let selected = Some(o.entries[o.best].cell.clone());
                    match eval {
                        Ok(t) => CellResult {
                            regime,
                            method,
                            grid: o.entries,
                            selected,
                            test: Some(t),
                            error: None,
                        },
                        Err(e) => CellResult {
                            regime,
                            method,
                            grid: o.entries,
                            selected,
                            test: None,
                            error: Some(e.to_string()),
                        },
                    }
                }
                Err(e) => CellResult {
                    regime,
                    method,
                    grid: Vec::new(),
                    selected: None,
                    test: None,
                    error: Some(e),
                },
            };
            cells.push(cell);
        }
    }
    Ok(ExperimentSummary {
        manifest: data.manifest.clone(),
        known_classes: k,
        unknown_reads_before_test: reads,
        cells,
    })
}

/// Runs the full experiment and writes all artifacts to
/// `config.output_dir`.
pub fn run_experiment(config: &ExperimentConfig) -> Result<ExperimentSummary> {
    config.validate()?;
    let data = load_protocol(config)?;
    let summary = run_in_memory(config, &data)?;
    let out = &config.output_dir;
    std::fs::create_dir_all(out)?;
    std::fs::write(out.join("config.json"), serde_json::to_string_pretty(config)? + "\n")?;
    export_report(&summary, out)?;
    Ok(summary)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_config_matches_grids() {
        let c = ExperimentConfig::default();
        c.validate().unwrap();
        assert_eq!(c.regimes.len() * c.methods.len(), 15);
        let json = serde_json::to_string(&c).unwrap();
        let back: ExperimentConfig = serde_json::from_str(&json).unwrap();
        assert_eq!(back, c);
        let partial: ExperimentConfig = serde_json::from_str(r#"{"seed": 5}"#).unwrap();
        assert_eq!(partial.grids, Grids::default());
        assert!(serde_json::from_str::<ExperimentConfig>(r#"{"sed": 5}"#).is_err());
    }

    #[test]
    fn empty_grid_rejected() {
        let mut c = ExperimentConfig::default();
        c.grids.evm.tail_sizes.clear();
        assert!(c.validate().is_err());
    }

    #[test]
    fn derived_seeds_differ() {
        let s: Vec<u64> = (0..4).map(|i| derive_seed(1, i)).collect();
        for i in 0..4 {
            for j in 0..i {
                assert_ne!(s[i], s[j]);
            }
        }
        assert_eq!(derive_seed(1, 2), derive_seed(1, 2));
    }
}
