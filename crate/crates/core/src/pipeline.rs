//! End-to-end runs: forecasts and their validation errors, the error
//! threshold, shapelet learning on high-error contexts, matching against test
//! contexts, drop selection and selective evaluation, plus the files that
//! document a run.

use std::collections::BTreeSet;
use std::fmt;
use std::fs::{self, File};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{load_series, make_windows, split_series, DataError, SplitSpec, WindowSet};
use crate::distance::{build_distance_matrix, znorm, DistanceError};
use crate::forecast::{
    fit_baseline, load_external_predictions, mean_std, per_window_mse, predict, ErrorVector,
    ForecastError, PredictionSet, DEFAULT_RIDGE,
};
use crate::report::{reduction_pct, ReportError};
use crate::select::{
    compute_threshold, discard_by_distance, filter_high_error, random_selection, selective_mse,
    EvaluationReport, SelectError, Selection, SelectionMethod, ThresholdSpec, DEFAULT_DELTA,
    DEFAULT_DP,
};
use crate::sidl::{
    grid_search, learn_dictionary, GridCell, ShapeletModel, SidlConfig, SidlError, SidlGrid,
};
use crate::synth::{generate_planted, SynthError, SynthSeries, SynthSpec};

pub const DEFAULT_SL: usize = 512;
pub const DEFAULT_FL: usize = 96;

/// Pipeline stages, used to label errors.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Config,
    Ingest,
    Forecast,
    LearnShapelets,
    Distance,
    Select,
    Report,
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Stage::Config => "config",
            Stage::Ingest => "ingest",
            Stage::Forecast => "forecast",
            Stage::LearnShapelets => "learn-shapelets",
            Stage::Distance => "distance",
            Stage::Select => "select",
            Stage::Report => "report",
        })
    }
}

#[derive(Debug, thiserror::Error)]
pub enum StageError {
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Forecast(#[from] ForecastError),
    #[error(transparent)]
    Sidl(#[from] SidlError),
    #[error(transparent)]
    Distance(#[from] DistanceError),
    #[error(transparent)]
    Select(#[from] SelectError),
    #[error(transparent)]
    Synth(#[from] SynthError),
    #[error(transparent)]
    Report(#[from] ReportError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error("{0}")]
    Invalid(String),
}

#[derive(Debug, thiserror::Error)]
#[error("{stage} stage failed: {source}")]
pub struct PipelineError {
    pub stage: Stage,
    #[source]
    pub source: StageError,
}

impl PipelineError {
    pub fn new(stage: Stage, source: impl Into<StageError>) -> Self {
        Self {
            stage,
            source: source.into(),
        }
    }

    fn invalid(stage: Stage, message: impl Into<String>) -> Self {
        Self::new(stage, StageError::Invalid(message.into()))
    }
}

trait AtStage<T> {
    fn at(self, stage: Stage) -> Result<T, PipelineError>;
}

impl<T, E: Into<StageError>> AtStage<T> for Result<T, E> {
    fn at(self, stage: Stage) -> Result<T, PipelineError> {
        self.map_err(|e| PipelineError::new(stage, e))
    }
}

/// Where the series comes from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DataSource {
    Csv { path: PathBuf, column: String },
    Synth(SynthSpec),
}

/// How forecasts for validation and test windows are obtained.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ForecasterSpec {
    /// Ridge regression on the context, fit on the train split.
    Baseline {
        #[serde(default = "default_ridge")]
        ridge: f64,
    },
    /// Prediction files in `window_index,v_1,...,v_fl` format.
    External {
        val_predictions: PathBuf,
        test_predictions: PathBuf,
    },
}

fn default_ridge() -> f64 {
    DEFAULT_RIDGE
}

impl Default for ForecasterSpec {
    fn default() -> Self {
        ForecasterSpec::Baseline {
            ridge: DEFAULT_RIDGE,
        }
    }
}

/// Shapelet-learning settings. Grid entries left empty fall back to the
/// defaults for the context length.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SidlSettings {
    pub n_atoms: Vec<usize>,
    pub atom_len: Vec<usize>,
    pub lambda: Vec<f64>,
    pub folds: usize,
    pub top_k: usize,
    pub dedup_threshold: f64,
    pub norm_bound: f64,
    pub max_iters: usize,
    pub inner_iters: usize,
    pub rel_tol: f64,
    pub restarts: usize,
    /// Standardize each high-error context before learning.
    pub znorm_samples: bool,
}

impl Default for SidlSettings {
    fn default() -> Self {
        let base = SidlConfig::default();
        Self {
            n_atoms: Vec::new(),
            atom_len: Vec::new(),
            lambda: Vec::new(),
            folds: 3,
            top_k: 5,
            dedup_threshold: 1.0,
            norm_bound: base.norm_bound,
            max_iters: base.max_iters,
            inner_iters: base.inner_iters,
            rel_tol: base.rel_tol,
            restarts: base.restarts,
            znorm_samples: true,
        }
    }
}

impl SidlSettings {
    /// The search grid for contexts of length `sl`; atom lengths above `sl`
    /// are dropped.
    pub fn grid(&self, sl: usize) -> SidlGrid {
        let default = SidlGrid::default_for(sl);
        let pick = |given: &Vec<usize>, fallback: Vec<usize>| {
            if given.is_empty() {
                fallback
            } else {
                given.clone()
            }
        };
        let mut atom_len = pick(&self.atom_len, default.atom_len);
        atom_len.retain(|&q| q >= 1 && q <= sl);
        SidlGrid {
            n_atoms: pick(&self.n_atoms, default.n_atoms),
            atom_len,
            lambda: if self.lambda.is_empty() {
                default.lambda
            } else {
                self.lambda.clone()
            },
        }
    }

    fn base_config(&self, seed: u64) -> SidlConfig {
        SidlConfig {
            norm_bound: self.norm_bound,
            max_iters: self.max_iters,
            inner_iters: self.inner_iters,
            rel_tol: self.rel_tol,
            restarts: self.restarts,
            seed,
            ..SidlConfig::default()
        }
    }
}

fn default_seeds() -> Vec<u64> {
    vec![0, 1, 2]
}

/// Everything one run needs. Relative paths in a loaded file are resolved
/// against the file's directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// Dataset label for reports; defaults to one derived from the source.
    #[serde(default)]
    pub name: Option<String>,
    pub data: DataSource,
    #[serde(default)]
    pub split: SplitSpec,
    #[serde(default = "default_sl")]
    pub sl: usize,
    #[serde(default = "default_fl")]
    pub fl: usize,
    #[serde(default = "one")]
    pub stride_val: usize,
    #[serde(default = "one")]
    pub stride_test: usize,
    #[serde(default)]
    pub forecaster: ForecasterSpec,
    /// Second forecaster evaluated on the same windows (e.g. a fine-tuned
    /// model next to a zero-shot one).
    #[serde(default)]
    pub secondary: Option<ForecasterSpec>,
    #[serde(default = "default_delta")]
    pub delta: f64,
    #[serde(default = "default_dp")]
    pub dp: f64,
    #[serde(default)]
    pub sidl: SidlSettings,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
}

fn default_sl() -> usize {
    DEFAULT_SL
}
fn default_fl() -> usize {
    DEFAULT_FL
}
fn one() -> usize {
    1
}
fn default_delta() -> f64 {
    DEFAULT_DELTA
}
fn default_dp() -> f64 {
    DEFAULT_DP
}

impl RunConfig {
    pub fn new(data: DataSource) -> Self {
        Self {
            name: None,
            data,
            split: SplitSpec::default(),
            sl: DEFAULT_SL,
            fl: DEFAULT_FL,
            stride_val: 1,
            stride_test: 1,
            forecaster: ForecasterSpec::default(),
            secondary: None,
            delta: DEFAULT_DELTA,
            dp: DEFAULT_DP,
            sidl: SidlSettings::default(),
            seeds: default_seeds(),
            output_dir: None,
        }
    }

    /// Parses TOML; relative paths are joined onto `base_dir` when given.
    pub fn from_toml_str(text: &str, base_dir: Option<&Path>) -> Result<Self, PipelineError> {
        let mut config: RunConfig = toml::from_str(text)
            .map_err(|e| PipelineError::invalid(Stage::Config, e.to_string()))?;
        if let Some(dir) = base_dir {
            config.resolve_paths(dir);
        }
        Ok(config)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, PipelineError> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| {
            PipelineError::invalid(Stage::Config, format!("{}: {e}", path.display()))
        })?;
        Self::from_toml_str(&text, Some(path.parent().unwrap_or(Path::new("."))))
    }

    pub fn to_toml(&self) -> Result<String, PipelineError> {
        toml::to_string(self).map_err(|e| PipelineError::invalid(Stage::Config, e.to_string()))
    }

    fn resolve_paths(&mut self, dir: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = dir.join(&*p);
            }
        };
        if let DataSource::Csv { path, .. } = &mut self.data {
            fix(path);
        }
        for spec in std::iter::once(&mut self.forecaster).chain(self.secondary.as_mut()) {
            if let ForecasterSpec::External {
                val_predictions,
                test_predictions,
            } = spec
            {
                fix(val_predictions);
                fix(test_predictions);
            }
        }
        if let Some(out) = &mut self.output_dir {
            fix(out);
        }
    }

    /// Checks values and that every referenced file exists.
    pub fn validate(&self) -> Result<(), PipelineError> {
        let bad = |m: String| Err(PipelineError::invalid(Stage::Config, m));
        if self.seeds.is_empty() {
            return bad("at least one seed is required".into());
        }
        if self.sl == 0 || self.fl == 0 || self.stride_val == 0 || self.stride_test == 0 {
            return bad("sl, fl and strides must be positive".into());
        }
        if !(0.0..=1.0).contains(&self.dp) {
            return bad(format!("dp {} outside [0, 1]", self.dp));
        }
        if !self.delta.is_finite() {
            return bad(format!("delta {} must be finite", self.delta));
        }
        if self.sidl.folds < 2 || self.sidl.top_k == 0 {
            return bad("sidl.folds must be at least 2 and sidl.top_k positive".into());
        }
        self.split.validate().at(Stage::Config)?;
        if let DataSource::Csv { path, .. } = &self.data {
            if !path.is_file() {
                return Err(PipelineError::new(
                    Stage::Ingest,
                    DataError::FileNotFound(path.clone()),
                ));
            }
        }
        for spec in std::iter::once(&self.forecaster).chain(self.secondary.as_ref()) {
            if let ForecasterSpec::External {
                val_predictions,
                test_predictions,
            } = spec
            {
                for p in [val_predictions, test_predictions] {
                    if !p.is_file() {
                        return Err(PipelineError::new(
                            Stage::Forecast,
                            ForecastError::FileNotFound(p.clone()),
                        ));
                    }
                }
            }
        }
        Ok(())
    }
}

/// Realized split boundaries and window counts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitInfo {
    pub series_len: usize,
    pub train_end: usize,
    pub val_end: usize,
    pub n_val_windows: usize,
    pub n_test_windows: usize,
}

/// Per-window errors of one forecaster.
#[derive(Debug, Clone)]
pub struct PreparedForecaster {
    pub label: String,
    pub val_errors: ErrorVector,
    pub test_errors: ErrorVector,
    pub val_predictions: PredictionSet,
    pub test_predictions: PredictionSet,
}

/// Loaded data, windows and forecast errors; everything that does not
/// depend on the threshold, drop percentage or seed.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub dataset: String,
    pub split: SplitInfo,
    pub val_windows: WindowSet,
    pub test_windows: WindowSet,
    pub synth: Option<SynthSeries>,
    pub forecasters: Vec<PreparedForecaster>,
}

fn forecaster_label(i: usize) -> &'static str {
    if i == 0 {
        "primary"
    } else {
        "secondary"
    }
}

/// Loads data, cuts windows and computes forecast errors.
pub fn prepare(config: &RunConfig) -> Result<Prepared, PipelineError> {
    config.validate()?;
    let (series, synth, default_name) = match &config.data {
        DataSource::Csv { path, column } => {
            let ts = load_series(path, column).at(Stage::Ingest)?;
            let name = path
                .file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_else(|| ts.name.clone());
            (ts, None, name)
        }
        DataSource::Synth(spec) => {
            let s = generate_planted(spec).at(Stage::Ingest)?;
            (s.series.clone(), Some(s), "synthetic".to_string())
        }
    };
    let (sl, fl) = (config.sl, config.fl);
    let splits = split_series(&series, &config.split, sl + fl).at(Stage::Ingest)?;
    let val_windows = make_windows(&splits.val, sl, fl, config.stride_val).at(Stage::Ingest)?;
    let test_windows = make_windows(&splits.test, sl, fl, config.stride_test).at(Stage::Ingest)?;

    let mut forecasters = Vec::new();
    for (i, spec) in std::iter::once(&config.forecaster)
        .chain(config.secondary.as_ref())
        .enumerate()
    {
        let (val_predictions, test_predictions) = match spec {
            ForecasterSpec::Baseline { ridge } => {
                let model = fit_baseline(&splits.train, sl, fl, *ridge).at(Stage::Forecast)?;
                (
                    predict(&model, &val_windows).at(Stage::Forecast)?,
                    predict(&model, &test_windows).at(Stage::Forecast)?,
                )
            }
            ForecasterSpec::External {
                val_predictions,
                test_predictions,
            } => (
                load_external_predictions(val_predictions, &val_windows).at(Stage::Forecast)?,
                load_external_predictions(test_predictions, &test_windows).at(Stage::Forecast)?,
            ),
        };
        forecasters.push(PreparedForecaster {
            label: forecaster_label(i).to_string(),
            val_errors: per_window_mse(&val_predictions, &val_windows).at(Stage::Forecast)?,
            test_errors: per_window_mse(&test_predictions, &test_windows).at(Stage::Forecast)?,
            val_predictions,
            test_predictions,
        });
    }

    Ok(Prepared {
        dataset: config.name.clone().unwrap_or(default_name),
        split: SplitInfo {
            series_len: series.len(),
            train_end: splits.train_end,
            val_end: splits.val_end,
            n_val_windows: val_windows.len(),
            n_test_windows: test_windows.len(),
        },
        val_windows,
        test_windows,
        synth,
        forecasters,
    })
}

/// Result of shapelet learning for one forecaster, threshold and seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LearnOutcome {
    pub threshold: ThresholdSpec,
    pub n_high_error: usize,
    /// Configuration the dictionary was trained with.
    pub sidl_config: Option<SidlConfig>,
    pub grid: Vec<GridCell>,
    pub model: Option<ShapeletModel>,
    pub warning: Option<String>,
}

impl LearnOutcome {
    pub fn has_shapelets(&self) -> bool {
        self.model.as_ref().is_some_and(|m| !m.shapelets.is_empty())
    }
}

/// Threshold, high-error filtering and dictionary learning on validation
/// contexts. An empty high-error set yields no model and a warning.
pub fn learn_shapelets(
    val_windows: &WindowSet,
    val_errors: &ErrorVector,
    settings: &SidlSettings,
    delta: f64,
    seed: u64,
) -> Result<LearnOutcome, PipelineError> {
    let (mean, std) = mean_std(val_errors.errors());
    let threshold = compute_threshold(mean, std, delta);
    let high = filter_high_error(val_errors, threshold.tau);
    let mut outcome = LearnOutcome {
        threshold,
        n_high_error: high.len(),
        sidl_config: None,
        grid: Vec::new(),
        model: None,
        warning: None,
    };
    if high.is_empty() {
        outcome.warning = Some(format!(
            "{}: no validation window has error above tau = {} (delta = {delta}); \
             shapelet selection falls back to no drop",
            SidlError::EmptySampleSet,
            threshold.tau
        ));
        return Ok(outcome);
    }
    let samples: Vec<Vec<f64>> = high
        .iter()
        .map(|&i| {
            let context = val_windows.context(i);
            if settings.znorm_samples {
                znorm(context)
            } else {
                context.to_vec()
            }
        })
        .collect();

    let grid = settings.grid(val_windows.sl());
    if grid.atom_len.is_empty() || grid.n_atoms.is_empty() || grid.lambda.is_empty() {
        return Err(PipelineError::invalid(
            Stage::LearnShapelets,
            "shapelet grid is empty after removing atom lengths above sl",
        ));
    }
    let base = settings.base_config(seed);
    let n_cells = grid.n_atoms.len() * grid.atom_len.len() * grid.lambda.len();
    let config = if n_cells == 1 {
        SidlConfig {
            n_atoms: grid.n_atoms[0],
            atom_len: grid.atom_len[0],
            lambda: grid.lambda[0],
            ..base
        }
    } else if samples.len() < settings.folds {
        // Too few samples to cross-validate: take the simplest grid point.
        let pick = SidlConfig {
            n_atoms: *grid.n_atoms.iter().min().expect("non-empty"),
            atom_len: *grid.atom_len.iter().min().expect("non-empty"),
            lambda: grid.lambda.iter().copied().fold(f64::MIN, f64::max),
            ..base
        };
        outcome.warning = Some(format!(
            "only {} high-error samples for {}-fold search; using K={} q={} lambda={}",
            samples.len(),
            settings.folds,
            pick.n_atoms,
            pick.atom_len,
            pick.lambda
        ));
        pick
    } else {
        let result =
            grid_search(&samples, &grid, &base, settings.folds, seed).at(Stage::LearnShapelets)?;
        outcome.grid = result.cells;
        result.best
    };

    let (dict, codes) = learn_dictionary(&samples, &config).at(Stage::LearnShapelets)?;
    let model = ShapeletModel::new(dict, &codes, settings.top_k, settings.dedup_threshold);
    if model.shapelets.is_empty() {
        outcome.warning = Some(
            "no atom was used by any high-error sample; shapelet selection falls back to no drop"
                .into(),
        );
    }
    outcome.sidl_config = Some(config);
    outcome.model = Some(model);
    Ok(outcome)
}

/// Closest shapelet match for every test window.
#[derive(Debug, Clone, PartialEq)]
pub struct TestMatches {
    pub min_distance: Vec<f64>,
    pub position: Vec<usize>,
}

pub fn match_test_windows(
    test_windows: &WindowSet,
    outcome: &LearnOutcome,
) -> Result<Option<TestMatches>, PipelineError> {
    let Some(model) = outcome.model.as_ref().filter(|m| !m.shapelets.is_empty()) else {
        return Ok(None);
    };
    let dm = build_distance_matrix(test_windows, &model.shapelets).at(Stage::Distance)?;
    Ok(Some(TestMatches {
        min_distance: dm.per_window_min().iter().map(|m| m.distance).collect(),
        position: dm.per_window_min().iter().map(|m| m.position).collect(),
    }))
}

/// Dataset-level numbers of one evaluation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub mse_zeroed: f64,
    pub mse_retained: f64,
    pub coverage: f64,
    pub n: usize,
    pub n_dropped: usize,
}

impl From<&EvaluationReport> for EvalSummary {
    fn from(r: &EvaluationReport) -> Self {
        Self {
            mse_zeroed: r.mse_zeroed,
            mse_retained: r.mse_retained,
            coverage: r.coverage,
            n: r.n,
            n_dropped: r.n_dropped,
        }
    }
}

/// Seed average of [`EvalSummary`] values.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanSummary {
    pub mse_zeroed: f64,
    pub mse_retained: f64,
    pub coverage: f64,
}

impl MeanSummary {
    pub fn of(items: &[EvalSummary]) -> Self {
        let n = items.len().max(1) as f64;
        let mean = |f: fn(&EvalSummary) -> f64| items.iter().map(f).sum::<f64>() / n;
        Self {
            mse_zeroed: mean(|s| s.mse_zeroed),
            mse_retained: mean(|s| s.mse_retained),
            coverage: mean(|s| s.coverage),
        }
    }
}

/// One test window's outcome under both selection methods.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WindowRecord {
    pub index: usize,
    /// Context start in the full series.
    pub start: usize,
    pub error: f64,
    pub min_distance: Option<f64>,
    pub match_position: Option<usize>,
    pub shapelet_dropped: bool,
    pub random_dropped: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedReport {
    pub seed: u64,
    pub learn: LearnOutcome,
    pub random: EvalSummary,
    pub shapelet: EvalSummary,
    #[serde(skip)]
    pub windows: Vec<WindowRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForecasterReport {
    pub label: String,
    pub threshold: ThresholdSpec,
    pub n_high_error: usize,
    pub no_drop: EvalSummary,
    pub seeds: Vec<SeedReport>,
    pub mean_random: MeanSummary,
    pub mean_shapelet: MeanSummary,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub dataset: String,
    pub split: SplitInfo,
    pub std_convention: String,
    pub cv_objective: String,
    pub forecasters: Vec<ForecasterReport>,
    pub warnings: Vec<String>,
    pub config: RunConfig,
}

fn no_drop_selection(n: usize) -> Selection {
    Selection {
        n,
        dropped: BTreeSet::new(),
        dp: 0.0,
        method: SelectionMethod::Shapelet,
        seed: None,
    }
}

fn evaluate_seed(
    prepared: &Prepared,
    errors: &ErrorVector,
    learn: &LearnOutcome,
    matches: Option<&TestMatches>,
    dp: f64,
    seed: u64,
) -> Result<SeedReport, PipelineError> {
    let n = errors.len();
    let shapelet_sel = match matches {
        Some(m) => discard_by_distance(dp, &m.min_distance).at(Stage::Select)?,
        None => no_drop_selection(n),
    };
    let random_sel = random_selection(dp, n, seed).at(Stage::Select)?;
    let shapelet = selective_mse(errors, &shapelet_sel).at(Stage::Select)?;
    let random = selective_mse(errors, &random_sel).at(Stage::Select)?;
    let offset = prepared.split.val_end;
    let windows = (0..n)
        .map(|i| WindowRecord {
            index: i,
            start: offset + prepared.test_windows.start(i),
            error: errors.errors()[i],
            min_distance: matches.map(|m| m.min_distance[i]),
            match_position: matches.map(|m| m.position[i]),
            shapelet_dropped: shapelet_sel.is_dropped(i),
            random_dropped: random_sel.is_dropped(i),
        })
        .collect();
    Ok(SeedReport {
        seed,
        learn: learn.clone(),
        random: (&random).into(),
        shapelet: (&shapelet).into(),
        windows,
    })
}

/// Learned shapelets and their test matches, per forecaster and seed.
type LearnedSet = Vec<Vec<(LearnOutcome, Option<TestMatches>)>>;

fn learn_all(
    prepared: &Prepared,
    config: &RunConfig,
    delta: f64,
) -> Result<LearnedSet, PipelineError> {
    prepared
        .forecasters
        .iter()
        .map(|f| {
            config
                .seeds
                .par_iter()
                .map(|&seed| {
                    let outcome = learn_shapelets(
                        &prepared.val_windows,
                        &f.val_errors,
                        &config.sidl,
                        delta,
                        seed,
                    )?;
                    let matches = match_test_windows(&prepared.test_windows, &outcome)?;
                    Ok((outcome, matches))
                })
                .collect()
        })
        .collect()
}

fn assemble(
    prepared: &Prepared,
    config: &RunConfig,
    learned: &LearnedSet,
) -> Result<RunReport, PipelineError> {
    let mut warnings: Vec<String> = Vec::new();
    let mut forecasters = Vec::new();
    for (f, per_seed) in prepared.forecasters.iter().zip(learned) {
        let n = f.test_errors.len();
        let no_drop = selective_mse(&f.test_errors, &no_drop_selection(n)).at(Stage::Select)?;
        let mut seeds = Vec::new();
        for (&seed, (outcome, matches)) in config.seeds.iter().zip(per_seed) {
            if let Some(w) = &outcome.warning {
                let w = format!("{}: {w}", f.label);
                if !warnings.contains(&w) {
                    warnings.push(w);
                }
            }
            seeds.push(evaluate_seed(
                prepared,
                &f.test_errors,
                outcome,
                matches.as_ref(),
                config.dp,
                seed,
            )?);
        }
        let random: Vec<EvalSummary> = seeds.iter().map(|s| s.random).collect();
        let shapelet: Vec<EvalSummary> = seeds.iter().map(|s| s.shapelet).collect();
        let first = &per_seed[0].0;
        forecasters.push(ForecasterReport {
            label: f.label.clone(),
            threshold: first.threshold,
            n_high_error: first.n_high_error,
            no_drop: (&no_drop).into(),
            mean_random: MeanSummary::of(&random),
            mean_shapelet: MeanSummary::of(&shapelet),
            seeds,
        });
    }
    Ok(RunReport {
        dataset: prepared.dataset.clone(),
        split: prepared.split.clone(),
        std_convention: "population".into(),
        cv_objective: "held-out reconstruction error".into(),
        forecasters,
        warnings,
        config: config.clone(),
    })
}

/// Runs every stage. When `config.output_dir` is set the report files are
/// written there after all stages succeed, so a failing run leaves nothing
/// behind.
pub fn run_pipeline(config: &RunConfig) -> Result<RunReport, PipelineError> {
    let prepared = prepare(config)?;
    run_prepared(&prepared, config)
}

/// [`run_pipeline`] on already prepared data.
pub fn run_prepared(prepared: &Prepared, config: &RunConfig) -> Result<RunReport, PipelineError> {
    let learned = learn_all(prepared, config, config.delta)?;
    let report = assemble(prepared, config, &learned)?;
    if let Some(dir) = &config.output_dir {
        emit_report(&report, dir)?;
        if let Some(s) = &prepared.synth {
            s.write_positions(dir.join("synth_positions.csv"))
                .at(Stage::Report)?;
        }
    }
    Ok(report)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AblationAxis {
    Delta,
    Dp,
}

impl AblationAxis {
    pub fn as_str(&self) -> &'static str {
        match self {
            AblationAxis::Delta => "delta",
            AblationAxis::Dp => "dp",
        }
    }
}

impl FromStr for AblationAxis {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "delta" => Ok(AblationAxis::Delta),
            "dp" => Ok(AblationAxis::Dp),
            other => Err(format!(
                "unknown ablation axis '{other}' (expected delta or dp)"
            )),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationPoint {
    pub value: f64,
    pub report: RunReport,
}

/// Re-runs the pipeline once per value. Shapelets are re-learned when the
/// threshold changes and reused when only the drop percentage does. When
/// `config.output_dir` is set, each point is written to its own
/// subdirectory and the combined table to `ablation_<axis>.csv`.
pub fn run_ablation(
    config: &RunConfig,
    axis: AblationAxis,
    values: &[f64],
) -> Result<Vec<AblationPoint>, PipelineError> {
    if values.is_empty() {
        return Err(PipelineError::invalid(
            Stage::Config,
            "ablation needs at least one value",
        ));
    }
    let prepared = prepare(config)?;
    let shared = match axis {
        AblationAxis::Dp => Some(learn_all(&prepared, config, config.delta)?),
        AblationAxis::Delta => None,
    };
    let mut points = Vec::new();
    for &value in values {
        let mut point_config = config.clone();
        match axis {
            AblationAxis::Delta => point_config.delta = value,
            AblationAxis::Dp => point_config.dp = value,
        }
        point_config.validate()?;
        let learned = match &shared {
            Some(l) => l.clone(),
            None => learn_all(&prepared, &point_config, value)?,
        };
        let mut report = assemble(&prepared, &point_config, &learned)?;
        if let Some(dir) = &config.output_dir {
            let sub = dir.join(format!("{}_{value}", axis.as_str()));
            report.config.output_dir = Some(sub.clone());
            emit_report(&report, &sub)?;
        }
        points.push(AblationPoint { value, report });
    }
    if let Some(dir) = &config.output_dir {
        emit_ablation(&points, axis, dir)?;
    }
    Ok(points)
}

fn create(path: &Path) -> Result<std::io::BufWriter<File>, PipelineError> {
    Ok(std::io::BufWriter::new(
        File::create(path).at(Stage::Report)?,
    ))
}

fn opt<T: ToString>(v: Option<T>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

fn pct_or_empty(baseline: f64, value: f64) -> String {
    reduction_pct(baseline, value)
        .map(|v| v.to_string())
        .unwrap_or_default()
}

const FORECASTER_COLUMNS: [&str; 8] = [
    "no_drop_mse",
    "random_mse",
    "shapelet_mse",
    "coverage",
    "reduction_pct",
    "margin_over_random_pct",
    "random_mse_retained",
    "shapelet_mse_retained",
];

fn forecaster_cells(f: &ForecasterReport) -> Vec<String> {
    let no_drop = f.no_drop.mse_zeroed;
    let random = f.mean_random.mse_zeroed;
    let shapelet = f.mean_shapelet.mse_zeroed;
    vec![
        no_drop.to_string(),
        random.to_string(),
        shapelet.to_string(),
        f.mean_shapelet.coverage.to_string(),
        pct_or_empty(no_drop, shapelet),
        pct_or_empty(random, shapelet),
        f.mean_random.mse_retained.to_string(),
        f.mean_shapelet.mse_retained.to_string(),
    ]
}

fn summary_header(n_forecasters: usize) -> Vec<String> {
    let mut header = vec!["dataset".to_string()];
    for i in 0..n_forecasters {
        let suffix = if i == 0 {
            String::new()
        } else {
            format!("_{}", i + 1)
        };
        header.extend(FORECASTER_COLUMNS.iter().map(|c| format!("{c}{suffix}")));
    }
    header
}

/// Writes `report.json`, `summary.csv`, one `windows_<label>_seed<s>.csv`
/// per forecaster and seed, and `shapelets_<label>_seed<s>.json` for every
/// learned model. Output depends only on `report`.
pub fn emit_report(report: &RunReport, dir: impl AsRef<Path>) -> Result<(), PipelineError> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).at(Stage::Report)?;

    let json = serde_json::to_string_pretty(report).at(Stage::Report)?;
    fs::write(dir.join("report.json"), json + "\n").at(Stage::Report)?;

    let mut out = create(&dir.join("summary.csv"))?;
    let mut row = vec![report.dataset.clone()];
    for f in &report.forecasters {
        row.extend(forecaster_cells(f));
    }
    writeln!(
        out,
        "{}",
        summary_header(report.forecasters.len()).join(",")
    )
    .at(Stage::Report)?;
    writeln!(out, "{}", row.join(",")).at(Stage::Report)?;
    out.flush().at(Stage::Report)?;

    for f in &report.forecasters {
        for s in &f.seeds {
            let path = dir.join(format!("windows_{}_seed{}.csv", f.label, s.seed));
            let mut out = create(&path)?;
            writeln!(
                out,
                "window_index,start,error,min_distance,match_position,shapelet_dropped,random_dropped,shapelet_zeroed_error,random_zeroed_error"
            )
            .at(Stage::Report)?;
            for w in &s.windows {
                let zeroed = |dropped: bool| if dropped { 0.0 } else { w.error };
                writeln!(
                    out,
                    "{},{},{},{},{},{},{},{},{}",
                    w.index,
                    w.start,
                    w.error,
                    opt(w.min_distance),
                    opt(w.match_position),
                    u8::from(w.shapelet_dropped),
                    u8::from(w.random_dropped),
                    zeroed(w.shapelet_dropped),
                    zeroed(w.random_dropped),
                )
                .at(Stage::Report)?;
            }
            out.flush().at(Stage::Report)?;
            if let Some(model) = &s.learn.model {
                let path = dir.join(format!("shapelets_{}_seed{}.json", f.label, s.seed));
                model.save(path).at(Stage::Report)?;
            }
        }
    }
    Ok(())
}

/// Writes `ablation_<axis>.csv` with one row per value and forecaster.
pub fn emit_ablation(
    points: &[AblationPoint],
    axis: AblationAxis,
    dir: impl AsRef<Path>,
) -> Result<(), PipelineError> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).at(Stage::Report)?;
    let mut out = create(&dir.join(format!("ablation_{}.csv", axis.as_str())))?;
    writeln!(
        out,
        "axis,value,dataset,forecaster,{},tau,n_high_error,warning",
        FORECASTER_COLUMNS.join(",")
    )
    .at(Stage::Report)?;
    for p in points {
        for f in &p.report.forecasters {
            let warning = p
                .report
                .warnings
                .iter()
                .find(|w| w.starts_with(&format!("{}:", f.label)))
                .map(|w| format!("\"{}\"", w.replace('"', "\"\"")))
                .unwrap_or_default();
            writeln!(
                out,
                "{},{},{},{},{},{},{},{}",
                axis.as_str(),
                p.value,
                p.report.dataset,
                f.label,
                forecaster_cells(f).join(","),
                f.threshold.tau,
                f.n_high_error,
                warning
            )
            .at(Stage::Report)?;
        }
    }
    out.flush().at(Stage::Report)?;
    Ok(())
}

/// A summary value that disagrees with its recomputation from per-window files.
#[derive(Debug, Clone, PartialEq)]
pub struct Mismatch {
    pub column: String,
    pub summary: f64,
    pub recomputed: f64,
}

/// Recomputes the no-drop, random and shapelet MSE and the coverage of every
/// forecaster in `dir/summary.csv` from the `windows_*` files next to it.
/// Returns the disagreements beyond `tol` (relative).
pub fn cross_check(dir: impl AsRef<Path>, tol: f64) -> Result<Vec<Mismatch>, PipelineError> {
    let dir = dir.as_ref();
    let report: RunReport =
        serde_json::from_str(&fs::read_to_string(dir.join("report.json")).at(Stage::Report)?)
            .at(Stage::Report)?;
    let mut reader = csv::Reader::from_path(dir.join("summary.csv"))
        .map_err(|e| PipelineError::invalid(Stage::Report, e.to_string()))?;
    let header = reader
        .headers()
        .map_err(|e| PipelineError::invalid(Stage::Report, e.to_string()))?
        .clone();
    let record = reader
        .records()
        .next()
        .ok_or_else(|| PipelineError::invalid(Stage::Report, "summary.csv has no rows"))?
        .map_err(|e| PipelineError::invalid(Stage::Report, e.to_string()))?;
    let value = |name: &str| -> Result<f64, PipelineError> {
        let i = header
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| PipelineError::invalid(Stage::Report, format!("no column {name}")))?;
        record[i]
            .parse()
            .map_err(|_| PipelineError::invalid(Stage::Report, format!("bad value in {name}")))
    };

    let mut mismatches = Vec::new();
    for (fi, f) in report.forecasters.iter().enumerate() {
        let suffix = if fi == 0 {
            String::new()
        } else {
            format!("_{}", fi + 1)
        };
        let (mut no_drop, mut random, mut shapelet, mut coverage) = (0.0, 0.0, 0.0, 0.0);
        for s in &f.seeds {
            let path = dir.join(format!("windows_{}_seed{}.csv", f.label, s.seed));
            let mut r = csv::Reader::from_path(&path)
                .map_err(|e| PipelineError::invalid(Stage::Report, e.to_string()))?;
            let (mut n, mut total, mut kept_shapelet, mut kept_random, mut retained) =
                (0usize, 0.0, 0.0, 0.0, 0usize);
            for rec in r.records() {
                let rec = rec.map_err(|e| PipelineError::invalid(Stage::Report, e.to_string()))?;
                let err: f64 = rec[2]
                    .parse()
                    .map_err(|_| PipelineError::invalid(Stage::Report, "bad error value"))?;
                n += 1;
                total += err;
                if &rec[5] == "0" {
                    kept_shapelet += err;
                    retained += 1;
                }
                if &rec[6] == "0" {
                    kept_random += err;
                }
            }
            let n_f = n.max(1) as f64;
            no_drop = total / n_f;
            shapelet += kept_shapelet / n_f;
            random += kept_random / n_f;
            coverage += if n == 0 { 1.0 } else { retained as f64 / n_f };
        }
        let k = f.seeds.len().max(1) as f64;
        for (column, recomputed) in [
            ("no_drop_mse", no_drop),
            ("random_mse", random / k),
            ("shapelet_mse", shapelet / k),
            ("coverage", coverage / k),
        ] {
            let name = format!("{column}{suffix}");
            let summary = value(&name)?;
            if (summary - recomputed).abs() > tol * summary.abs().max(recomputed.abs()).max(1e-300)
            {
                mismatches.push(Mismatch {
                    column: name,
                    summary,
                    recomputed,
                });
            }
        }
    }
    Ok(mismatches)
}
