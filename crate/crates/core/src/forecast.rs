//! Forecaster boundary: a ridge-regularized linear baseline, an adapter for
//! externally produced predictions, and per-window MSE.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::Write;
use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{make_windows, TimeSeries, WindowSet};

pub const DEFAULT_RIDGE: f64 = 1e-3;

#[derive(Debug, thiserror::Error)]
pub enum ForecastError {
    #[error("series of length {len} is shorter than one window ({needed})")]
    SeriesTooShort { len: usize, needed: usize },
    #[error("normal equations are singular; use a positive ridge")]
    SingularSystem,
    #[error("model expects sl={model_sl}, fl={model_fl} but windows have sl={sl}, fl={fl}")]
    GeometryMismatch {
        model_sl: usize,
        model_fl: usize,
        sl: usize,
        fl: usize,
    },
    #[error("prediction file not found: {0}")]
    FileNotFound(PathBuf),
    #[error("prediction indices do not match the window set: {0}")]
    IndexMismatch(String),
    #[error("row {row}: expected {expected} values, found {found}")]
    LengthMismatch {
        row: usize,
        expected: usize,
        found: usize,
    },
    #[error("row {row}: cannot parse '{value}'")]
    ParseError { row: usize, value: String },
    #[error("{predictions} predictions for {windows} windows")]
    CoverageMismatch { predictions: usize, windows: usize },
    #[error("invalid ridge {0}")]
    InvalidRidge(f64),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

/// One length-`fl` forecast per window, indexed by window position.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionSet {
    /// `"baseline"` or `"external:<name>"`.
    pub source: String,
    pub fl: usize,
    predictions: Vec<Vec<f64>>,
}

impl PredictionSet {
    pub fn new(
        source: impl Into<String>,
        fl: usize,
        predictions: Vec<Vec<f64>>,
    ) -> Result<Self, ForecastError> {
        for (row, p) in predictions.iter().enumerate() {
            if p.len() != fl {
                return Err(ForecastError::LengthMismatch {
                    row,
                    expected: fl,
                    found: p.len(),
                });
            }
            if let Some(v) = p.iter().find(|v| !v.is_finite()) {
                return Err(ForecastError::ParseError {
                    row,
                    value: v.to_string(),
                });
            }
        }
        Ok(Self {
            source: source.into(),
            fl,
            predictions,
        })
    }

    pub fn len(&self) -> usize {
        self.predictions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.predictions.is_empty()
    }

    pub fn get(&self, index: usize) -> Option<&[f64]> {
        self.predictions.get(index).map(Vec::as_slice)
    }

    /// Writes the `window_index,v_1,...,v_fl` CSV read by
    /// [`load_external_predictions`].
    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<(), ForecastError> {
        let mut out = std::io::BufWriter::new(File::create(path)?);
        let header: Vec<String> = std::iter::once("window_index".to_string())
            .chain((1..=self.fl).map(|j| format!("v_{j}")))
            .collect();
        writeln!(out, "{}", header.join(","))?;
        for (i, p) in self.predictions.iter().enumerate() {
            write!(out, "{i}")?;
            for v in p {
                write!(out, ",{v}")?;
            }
            writeln!(out)?;
        }
        out.flush()?;
        Ok(())
    }
}

/// Direct multi-output linear map from a context to a forecast.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaselineModel {
    pub sl: usize,
    pub fl: usize,
    pub ridge: f64,
    /// `fl x sl`, row-major.
    weights: Vec<f64>,
    intercept: Vec<f64>,
}

impl BaselineModel {
    pub fn forecast(&self, context: &[f64]) -> Vec<f64> {
        debug_assert_eq!(context.len(), self.sl);
        self.weights
            .chunks_exact(self.sl)
            .zip(&self.intercept)
            .map(|(row, b)| b + row.iter().zip(context).map(|(w, x)| w * x).sum::<f64>())
            .collect()
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn intercept(&self) -> &[f64] {
        &self.intercept
    }
}

/// Fits the baseline by ridge regression over every stride-1 window of
/// `train`. The intercept is not penalized.
pub fn fit_baseline(
    train: &TimeSeries,
    sl: usize,
    fl: usize,
    ridge: f64,
) -> Result<BaselineModel, ForecastError> {
    if !(ridge >= 0.0 && ridge.is_finite()) {
        return Err(ForecastError::InvalidRidge(ridge));
    }
    let windows = make_windows(train, sl, fl, 1).map_err(|_| ForecastError::SeriesTooShort {
        len: train.len(),
        needed: sl + fl,
    })?;
    let n = windows.len();

    let mut x = DMatrix::<f64>::from_fn(n, sl, |i, j| windows.context(i)[j]);
    let mut y = DMatrix::<f64>::from_fn(n, fl, |i, j| windows.target(i)[j]);
    let x_mean: Vec<f64> = x.column_iter().map(|c| c.mean()).collect();
    let y_mean: Vec<f64> = y.column_iter().map(|c| c.mean()).collect();
    for (j, m) in x_mean.iter().enumerate() {
        x.column_mut(j).add_scalar_mut(-m);
    }
    for (j, m) in y_mean.iter().enumerate() {
        y.column_mut(j).add_scalar_mut(-m);
    }

    let mut gram = x.tr_mul(&x);
    for d in 0..sl {
        gram[(d, d)] += ridge;
    }
    let rhs = x.tr_mul(&y);
    let chol = gram.cholesky().ok_or(ForecastError::SingularSystem)?;
    // sl x fl
    let coef = chol.solve(&rhs);
    if coef.iter().any(|v| !v.is_finite()) {
        return Err(ForecastError::SingularSystem);
    }

    let x_mean = DVector::from_vec(x_mean);
    let intercept: Vec<f64> = (0..fl)
        .map(|k| y_mean[k] - coef.column(k).dot(&x_mean))
        .collect();
    let weights: Vec<f64> = (0..fl)
        .flat_map(|k| coef.column(k).iter().copied().collect::<Vec<_>>())
        .collect();

    Ok(BaselineModel {
        sl,
        fl,
        ridge,
        weights,
        intercept,
    })
}

pub fn predict(model: &BaselineModel, windows: &WindowSet) -> Result<PredictionSet, ForecastError> {
    if windows.sl() != model.sl || windows.fl() != model.fl {
        return Err(ForecastError::GeometryMismatch {
            model_sl: model.sl,
            model_fl: model.fl,
            sl: windows.sl(),
            fl: windows.fl(),
        });
    }
    let predictions = (0..windows.len())
        .into_par_iter()
        .map(|i| model.forecast(windows.context(i)))
        .collect();
    PredictionSet::new("baseline", model.fl, predictions)
}

/// Loads a `window_index,v_1,...,v_fl` CSV; the indices must cover the
/// window set exactly once each, in any order.
pub fn load_external_predictions(
    path: impl AsRef<Path>,
    windows: &WindowSet,
) -> Result<PredictionSet, ForecastError> {
    let path = path.as_ref();
    if !path.exists() {
        return Err(ForecastError::FileNotFound(path.to_path_buf()));
    }
    let fl = windows.fl();
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .from_reader(File::open(path)?);

    let mut rows: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
    for (row, record) in reader.records().enumerate() {
        let record = record?;
        let parse = |s: &str| -> Result<f64, ForecastError> {
            s.trim()
                .parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .ok_or_else(|| ForecastError::ParseError {
                    row,
                    value: s.to_string(),
                })
        };
        let mut fields = record.iter();
        let idx_field = fields.next().unwrap_or("");
        let index: usize = idx_field
            .trim()
            .parse()
            .map_err(|_| ForecastError::ParseError {
                row,
                value: idx_field.to_string(),
            })?;
        let values = fields.map(parse).collect::<Result<Vec<_>, _>>()?;
        if values.len() != fl {
            return Err(ForecastError::LengthMismatch {
                row,
                expected: fl,
                found: values.len(),
            });
        }
        if index >= windows.len() {
            return Err(ForecastError::IndexMismatch(format!(
                "index {index} out of range for {} windows",
                windows.len()
            )));
        }
        if rows.insert(index, values).is_some() {
            return Err(ForecastError::IndexMismatch(format!(
                "duplicate index {index}"
            )));
        }
    }
    if rows.len() != windows.len() {
        let missing = (0..windows.len())
            .find(|i| !rows.contains_key(i))
            .unwrap_or(windows.len());
        return Err(ForecastError::IndexMismatch(format!(
            "missing index {missing}"
        )));
    }
    let name = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    PredictionSet::new(format!("external:{name}"), fl, rows.into_values().collect())
}

/// Per-window errors with their population mean and standard deviation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorVector {
    errors: Vec<f64>,
    pub mean: f64,
    pub std: f64,
}

impl ErrorVector {
    pub fn new(errors: Vec<f64>) -> Self {
        let (mean, std) = mean_std(&errors);
        Self { errors, mean, std }
    }

    pub fn errors(&self) -> &[f64] {
        &self.errors
    }

    pub fn len(&self) -> usize {
        self.errors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.errors.is_empty()
    }
}

/// Mean and population standard deviation; `(0, 0)` when empty.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (0.0, 0.0);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Mean squared error over the forecast steps of each window.
pub fn per_window_mse(
    preds: &PredictionSet,
    windows: &WindowSet,
) -> Result<ErrorVector, ForecastError> {
    if preds.len() != windows.len() || preds.fl != windows.fl() {
        return Err(ForecastError::CoverageMismatch {
            predictions: preds.len(),
            windows: windows.len(),
        });
    }
    let fl = windows.fl() as f64;
    let errors = (0..windows.len())
        .map(|i| {
            preds.predictions[i]
                .iter()
                .zip(windows.target(i))
                .map(|(p, y)| (p - y).powi(2))
                .sum::<f64>()
                / fl
        })
        .collect();
    Ok(ErrorVector::new(errors))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::TimeSeries;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::TAU;
    use std::io::Write;

    fn ts(values: Vec<f64>) -> TimeSeries {
        TimeSeries::new("t", values).unwrap()
    }

    fn sine(n: usize, period: f64) -> Vec<f64> {
        (0..n).map(|i| (TAU * i as f64 / period).sin()).collect()
    }

    #[test]
    fn sine_is_reproduced() {
        let values = sine(600, 24.0);
        let model = fit_baseline(&ts(values[..400].to_vec()), 48, 24, DEFAULT_RIDGE).unwrap();
        let held_out = make_windows(&ts(values[400..].to_vec()), 48, 24, 1).unwrap();
        let preds = predict(&model, &held_out).unwrap();
        let err = per_window_mse(&preds, &held_out).unwrap();
        assert!(err.mean < 1e-6, "held-out mse {}", err.mean);

        // Beats a last-value forecast computed directly.
        for (i, w) in held_out.iter().enumerate() {
            let last = *w.context.last().unwrap();
            let naive: f64 = w.target.iter().map(|y| (y - last).powi(2)).sum::<f64>() / 24.0;
            assert!(err.errors()[i] < naive);
        }
    }

    #[test]
    fn constant_series_is_a_fixed_point() {
        let model = fit_baseline(&ts(vec![3.0; 200]), 20, 5, DEFAULT_RIDGE).unwrap();
        let w = make_windows(&ts(vec![3.0; 60]), 20, 5, 1).unwrap();
        let preds = predict(&model, &w).unwrap();
        for i in 0..w.len() {
            for v in preds.get(i).unwrap() {
                assert!((v - 3.0).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn singular_without_ridge() {
        assert!(matches!(
            fit_baseline(&ts(vec![3.0; 200]), 20, 5, 0.0),
            Err(ForecastError::SingularSystem)
        ));
    }

    #[test]
    fn too_short_training_series() {
        assert!(matches!(
            fit_baseline(&ts(vec![1.0; 24]), 20, 5, DEFAULT_RIDGE),
            Err(ForecastError::SeriesTooShort {
                len: 24,
                needed: 25
            })
        ));
    }

    #[test]
    fn prediction_is_deterministic_and_checks_geometry() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let values: Vec<f64> = (0..300).map(|_| rng.random::<f64>()).collect();
        let model = fit_baseline(&ts(values.clone()), 10, 4, DEFAULT_RIDGE).unwrap();
        let w = make_windows(&ts(values.clone()), 10, 4, 3).unwrap();
        assert_eq!(predict(&model, &w).unwrap(), predict(&model, &w).unwrap());
        let other = make_windows(&ts(values), 12, 4, 3).unwrap();
        assert!(matches!(
            predict(&model, &other),
            Err(ForecastError::GeometryMismatch { .. })
        ));
    }

    #[test]
    fn translation_equivariance() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let values: Vec<f64> = (0..400)
            .map(|i| (i as f64 * 0.3).sin() + 0.2 * rng.random::<f64>())
            .collect();
        let shift = 7.5;
        let shifted: Vec<f64> = values.iter().map(|v| v + shift).collect();
        let m0 = fit_baseline(&ts(values.clone()), 16, 8, DEFAULT_RIDGE).unwrap();
        let m1 = fit_baseline(&ts(shifted.clone()), 16, 8, DEFAULT_RIDGE).unwrap();
        let w0 = make_windows(&ts(values), 16, 8, 5).unwrap();
        let w1 = make_windows(&ts(shifted), 16, 8, 5).unwrap();
        let p0 = predict(&m0, &w0).unwrap();
        let p1 = predict(&m1, &w1).unwrap();
        for i in 0..w0.len() {
            for (a, b) in p0.get(i).unwrap().iter().zip(p1.get(i).unwrap()) {
                assert!((b - a - shift).abs() < 1e-9, "{a} {b}");
            }
        }
    }

    #[test]
    fn hand_computed_mse() {
        let w = make_windows(&ts(vec![0.0, 1.0, 1.0]), 1, 2, 1).unwrap();
        let preds = PredictionSet::new("t", 2, vec![vec![2.0, 3.0]]).unwrap();
        let e = per_window_mse(&preds, &w).unwrap();
        assert_eq!(e.errors(), &[2.5]);

        let perfect = PredictionSet::new("t", 2, vec![vec![1.0, 1.0]]).unwrap();
        let e = per_window_mse(&perfect, &w).unwrap();
        assert_eq!((e.errors()[0], e.mean, e.std), (0.0, 0.0, 0.0));
    }

    #[test]
    fn mse_matches_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let values: Vec<f64> = (0..200).map(|_| rng.random_range(-2.0..2.0)).collect();
        let (sl, fl, stride) = (12, 7, 3);
        let w = make_windows(&ts(values.clone()), sl, fl, stride).unwrap();
        let preds: Vec<Vec<f64>> = (0..w.len())
            .map(|_| (0..fl).map(|_| rng.random_range(-2.0..2.0)).collect())
            .collect();
        let set = PredictionSet::new("t", fl, preds.clone()).unwrap();
        let e = per_window_mse(&set, &w).unwrap();

        let mut grand = 0.0;
        for (i, p) in preds.iter().enumerate() {
            let mut acc = 0.0;
            for j in 0..fl {
                let y = values[i * stride + sl + j];
                acc += (p[j] - y) * (p[j] - y);
            }
            grand += acc;
            assert!((e.errors()[i] - acc / fl as f64).abs() < 1e-12);
        }
        // Mean of per-window errors equals the grand MSE.
        assert!((e.mean - grand / (fl * preds.len()) as f64).abs() < 1e-12);
    }

    #[test]
    fn coverage_mismatch() {
        let w = make_windows(&ts(vec![0.0; 10]), 2, 2, 1).unwrap();
        let p = PredictionSet::new("t", 2, vec![vec![0.0, 0.0]]).unwrap();
        assert!(matches!(
            per_window_mse(&p, &w),
            Err(ForecastError::CoverageMismatch { .. })
        ));
    }

    fn write(contents: &str) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        f.write_all(contents.as_bytes()).unwrap();
        f
    }

    #[test]
    fn external_predictions() {
        let w = make_windows(&ts((0..10).map(f64::from).collect()), 3, 2, 1).unwrap();
        assert_eq!(w.len(), 6);

        let mut body = String::from("window_index,v_1,v_2\n");
        for i in (0..6).rev() {
            body.push_str(&format!("{i},{},{}\n", i, i + 1));
        }
        let set = load_external_predictions(write(&body).path(), &w).unwrap();
        assert_eq!(set.get(2).unwrap(), &[2.0, 3.0]);
        assert!(set.source.starts_with("external:"));

        let missing: String = body
            .lines()
            .filter(|l| !l.starts_with("5,"))
            .map(|l| format!("{l}\n"))
            .collect();
        assert!(matches!(
            load_external_predictions(write(&missing).path(), &w),
            Err(ForecastError::IndexMismatch(m)) if m.contains('5')
        ));

        let dup = format!("{body}3,1,1\n");
        assert!(matches!(
            load_external_predictions(write(&dup).path(), &w),
            Err(ForecastError::IndexMismatch(_))
        ));

        let short = body.replace("2,2,3", "2,2");
        assert!(matches!(
            load_external_predictions(write(&short).path(), &w),
            Err(ForecastError::LengthMismatch {
                expected: 2,
                found: 1,
                ..
            })
        ));

        let garbage = body.replace("2,2,3", "2,abc,3");
        assert!(matches!(
            load_external_predictions(write(&garbage).path(), &w),
            Err(ForecastError::ParseError { .. })
        ));
    }

    #[test]
    fn written_predictions_load_back() {
        let w = make_windows(&ts((0..40).map(|i| (i as f64).cos()).collect()), 8, 3, 2).unwrap();
        let model =
            fit_baseline(&ts((0..80).map(|i| (i as f64).cos()).collect()), 8, 3, 0.1).unwrap();
        let p = predict(&model, &w).unwrap();
        let f = tempfile::NamedTempFile::new().unwrap();
        p.write_csv(f.path()).unwrap();
        let back = load_external_predictions(f.path(), &w).unwrap();
        for i in 0..w.len() {
            assert_eq!(back.get(i), p.get(i));
        }
    }

    proptest! {
        #[test]
        fn mse_nonnegative_and_zero_iff_equal(
            target in proptest::collection::vec(-5.0f64..5.0, 4),
            delta in proptest::collection::vec(-1.0f64..1.0, 3),
        ) {
            let w = make_windows(&ts(target.clone()), 1, 3, 1).unwrap();
            let pred: Vec<f64> = target[1..].iter().zip(&delta).map(|(y, d)| y + d).collect();
            let e = per_window_mse(&PredictionSet::new("t", 3, vec![pred]).unwrap(), &w).unwrap();
            prop_assert!(e.errors()[0] >= 0.0);
            prop_assert_eq!(e.errors()[0] == 0.0, delta.iter().all(|d| *d == 0.0));
        }
    }
}
