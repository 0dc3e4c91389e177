//! Error threshold, high-error filtering, drop selection and selective MSE.

use std::collections::BTreeSet;
use std::fs::File;
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::distance::DistanceMatrix;
use crate::forecast::ErrorVector;

pub const DEFAULT_DP: f64 = 0.2;
pub const DEFAULT_DELTA: f64 = 2.0;

#[derive(Debug, thiserror::Error)]
pub enum SelectError {
    #[error("drop percentage {0} outside [0, 1]")]
    InvalidDropPercentage(f64),
    #[error("selection covers {selection} windows but there are {errors} errors")]
    IndexMismatch { selection: usize, errors: usize },
    #[error("min-distance column has {distances} entries for {windows} windows")]
    DistanceMismatch { distances: usize, windows: usize },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// `tau = mean_err + delta * std_err`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ThresholdSpec {
    pub mean_err: f64,
    pub std_err: f64,
    pub delta: f64,
    pub tau: f64,
}

pub fn compute_threshold(mean_err: f64, std_err: f64, delta: f64) -> ThresholdSpec {
    ThresholdSpec {
        mean_err,
        std_err,
        delta,
        tau: mean_err + delta * std_err,
    }
}

/// Indices whose error strictly exceeds `tau`, in index order.
pub fn filter_high_error(errors: &ErrorVector, tau: f64) -> Vec<usize> {
    errors
        .errors()
        .iter()
        .enumerate()
        .filter(|(_, &e)| e > tau)
        .map(|(i, _)| i)
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SelectionMethod {
    Shapelet,
    Random,
}

impl SelectionMethod {
    pub fn as_str(&self) -> &'static str {
        match self {
            SelectionMethod::Shapelet => "shapelet",
            SelectionMethod::Random => "random",
        }
    }
}

impl std::str::FromStr for SelectionMethod {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "shapelet" => Ok(SelectionMethod::Shapelet),
            "random" => Ok(SelectionMethod::Random),
            other => Err(format!("unknown selection method '{other}'")),
        }
    }
}

/// A partition of window indices into dropped and retained.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Selection {
    pub n: usize,
    pub dropped: BTreeSet<usize>,
    pub dp: f64,
    pub method: SelectionMethod,
    pub seed: Option<u64>,
}

impl Selection {
    pub fn is_dropped(&self, index: usize) -> bool {
        self.dropped.contains(&index)
    }

    pub fn retained(&self) -> impl Iterator<Item = usize> + '_ {
        (0..self.n).filter(move |i| !self.dropped.contains(i))
    }

    pub fn n_retained(&self) -> usize {
        self.n - self.dropped.len()
    }

    /// Writes `window_index,min_distance,dropped`. `min_distance` is empty
    /// when no distances are given (random selection).
    pub fn write_csv(
        &self,
        path: impl AsRef<Path>,
        min_distances: Option<&[f64]>,
    ) -> Result<(), SelectError> {
        if let Some(d) = min_distances {
            if d.len() != self.n {
                return Err(SelectError::DistanceMismatch {
                    distances: d.len(),
                    windows: self.n,
                });
            }
        }
        let mut out = std::io::BufWriter::new(File::create(path)?);
        writeln!(out, "window_index,min_distance,dropped")?;
        for i in 0..self.n {
            let d = min_distances.map(|d| d[i].to_string()).unwrap_or_default();
            writeln!(out, "{i},{d},{}", u8::from(self.is_dropped(i)))?;
        }
        out.flush()?;
        Ok(())
    }
}

/// `floor(dp * n)`.
pub fn drop_count(dp: f64, n: usize) -> Result<usize, SelectError> {
    if !(0.0..=1.0).contains(&dp) {
        return Err(SelectError::InvalidDropPercentage(dp));
    }
    Ok(((dp * n as f64).floor() as usize).min(n))
}

/// Drops the `floor(dp * n)` windows closest to any shapelet.
pub fn discard(dp: f64, d_mat: &DistanceMatrix) -> Result<Selection, SelectError> {
    discard_by_distance(dp, &d_mat.min_distances())
}

/// [`discard`] over a bare per-window minimum-distance column. Ties go to
/// the lower window index.
pub fn discard_by_distance(dp: f64, min_distances: &[f64]) -> Result<Selection, SelectError> {
    let n = min_distances.len();
    let count = drop_count(dp, n)?;
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| min_distances[a].total_cmp(&min_distances[b]));
    Ok(Selection {
        n,
        dropped: order.into_iter().take(count).collect(),
        dp,
        method: SelectionMethod::Shapelet,
        seed: None,
    })
}

/// Drops `floor(dp * n)` windows drawn uniformly without replacement.
///
/// The drop set is a prefix of one seeded permutation, so for a fixed seed a
/// larger `dp` always drops a superset.
pub fn random_selection(dp: f64, n: usize, seed: u64) -> Result<Selection, SelectError> {
    let count = drop_count(dp, n)?;
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let dropped = order.into_iter().take(count).collect();
    Ok(Selection {
        n,
        dropped,
        dp,
        method: SelectionMethod::Random,
        seed: Some(seed),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WindowOutcome {
    pub index: usize,
    pub error: f64,
    pub dropped: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    /// Dropped windows count as zero error; averaged over all windows.
    pub mse_zeroed: f64,
    /// Averaged over retained windows only; 0 when none are retained.
    pub mse_retained: f64,
    pub coverage: f64,
    pub n: usize,
    pub n_dropped: usize,
    /// Set when every window was dropped and `mse_retained` is undefined.
    pub no_retained: bool,
    pub per_window: Vec<WindowOutcome>,
}

pub fn selective_mse(
    errors: &ErrorVector,
    sel: &Selection,
) -> Result<EvaluationReport, SelectError> {
    if errors.len() != sel.n {
        return Err(SelectError::IndexMismatch {
            selection: sel.n,
            errors: errors.len(),
        });
    }
    let n = sel.n;
    let per_window: Vec<WindowOutcome> = errors
        .errors()
        .iter()
        .enumerate()
        .map(|(index, &error)| WindowOutcome {
            index,
            error,
            dropped: sel.is_dropped(index),
        })
        .collect();
    let retained_sum: f64 = per_window
        .iter()
        .filter(|w| !w.dropped)
        .map(|w| w.error)
        .sum();
    let n_retained = sel.n_retained();
    Ok(EvaluationReport {
        mse_zeroed: if n == 0 { 0.0 } else { retained_sum / n as f64 },
        mse_retained: if n_retained == 0 {
            0.0
        } else {
            retained_sum / n_retained as f64
        },
        coverage: if n == 0 {
            1.0
        } else {
            n_retained as f64 / n as f64
        },
        n,
        n_dropped: sel.dropped.len(),
        no_retained: n_retained == 0,
        per_window,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn threshold_arithmetic() {
        let t = compute_threshold(0.4506, 0.6129, 2.0);
        assert!((t.tau - 1.6764).abs() < 1e-12);
        assert_eq!(compute_threshold(0.3, 0.5, 0.0).tau, 0.3);
        assert_eq!(compute_threshold(0.3, 0.0, 7.0).tau, 0.3);
    }

    #[test]
    fn strict_filtering() {
        let e = ErrorVector::new(vec![1.0, 2.0, 3.0]);
        assert_eq!(filter_high_error(&e, 2.0), vec![2]);
        assert!(filter_high_error(&e, 3.0).is_empty());
        assert_eq!(filter_high_error(&e, -1.0), vec![0, 1, 2]);
    }

    #[test]
    fn discard_by_hand() {
        let s = discard_by_distance(0.4, &[3.0, 1.0, 2.0, 5.0, 4.0]).unwrap();
        assert_eq!(s.dropped, BTreeSet::from([1, 2]));
        assert!(discard_by_distance(0.0, &[1.0, 2.0])
            .unwrap()
            .dropped
            .is_empty());
        assert_eq!(
            discard_by_distance(1.0, &[1.0, 2.0]).unwrap().dropped.len(),
            2
        );
        let ties = discard_by_distance(0.5, &[1.0, 1.0, 1.0, 1.0]).unwrap();
        assert_eq!(ties.dropped, BTreeSet::from([0, 1]));
        assert!(discard_by_distance(1.5, &[1.0]).is_err());
    }

    #[test]
    fn random_selection_is_seeded() {
        assert!(random_selection(0.0, 10, 1).unwrap().dropped.is_empty());
        assert_eq!(
            random_selection(0.3, 50, 9).unwrap(),
            random_selection(0.3, 50, 9).unwrap()
        );
        assert_eq!(random_selection(0.25, 10, 9).unwrap().dropped.len(), 2);
    }

    #[test]
    fn random_drop_frequencies_are_uniform() {
        let mut counts = [0usize; 100];
        let draws = 10_000;
        for seed in 0..draws {
            for i in random_selection(0.2, 100, seed).unwrap().dropped {
                counts[i] += 1;
            }
        }
        for c in counts {
            let freq = c as f64 / draws as f64;
            assert!((freq - 0.2).abs() <= 0.02, "{freq}");
        }
    }

    #[test]
    fn selective_mse_by_hand() {
        let e = ErrorVector::new(vec![2.0, 4.0]);
        let sel = Selection {
            n: 2,
            dropped: BTreeSet::from([1]),
            dp: 0.5,
            method: SelectionMethod::Shapelet,
            seed: None,
        };
        let r = selective_mse(&e, &sel).unwrap();
        assert_eq!((r.mse_zeroed, r.mse_retained, r.coverage), (1.0, 2.0, 0.5));

        let none = discard_by_distance(0.0, &[0.0, 0.0]).unwrap();
        let r = selective_mse(&e, &none).unwrap();
        assert_eq!((r.mse_zeroed, r.mse_retained), (3.0, 3.0));

        let all = discard_by_distance(1.0, &[0.0, 0.0]).unwrap();
        let r = selective_mse(&e, &all).unwrap();
        assert!(r.no_retained);
        assert_eq!((r.mse_zeroed, r.mse_retained, r.coverage), (0.0, 0.0, 0.0));

        let wrong = discard_by_distance(0.0, &[0.0]).unwrap();
        assert!(matches!(
            selective_mse(&e, &wrong),
            Err(SelectError::IndexMismatch { .. })
        ));
    }

    #[test]
    fn concentrated_errors_favor_targeted_drops() {
        // Errors concentrate on windows 0..10, which also have the smallest distances.
        let errors: Vec<f64> = (0..50).map(|i| if i < 10 { 5.0 } else { 1.0 }).collect();
        let e = ErrorVector::new(errors);
        let distances: Vec<f64> = (0..50).map(|i| i as f64).collect();
        let targeted = selective_mse(&e, &discard_by_distance(0.2, &distances).unwrap()).unwrap();
        let random = selective_mse(&e, &random_selection(0.2, 50, 3).unwrap()).unwrap();
        let dropped_mean = 5.0;
        assert!(dropped_mean > e.mean);
        assert!(targeted.mse_zeroed < random.mse_zeroed);
    }

    proptest! {
        #[test]
        fn selections_partition_indices(n in 0usize..200, dp in 0.0f64..=1.0, seed in 0u64..1000) {
            let d: Vec<f64> = (0..n).map(|i| ((i * 37) % 11) as f64).collect();
            for s in [discard_by_distance(dp, &d).unwrap(), random_selection(dp, n, seed).unwrap()] {
                prop_assert_eq!(s.dropped.len(), (dp * n as f64).floor() as usize);
                prop_assert!(s.dropped.iter().all(|&i| i < n));
                prop_assert_eq!(s.retained().count() + s.dropped.len(), n);
            }
        }

        #[test]
        fn zeroed_mse_is_monotone_in_dp(errors in proptest::collection::vec(0.0f64..10.0, 1..100), seed in 0u64..100) {
            let e = ErrorVector::new(errors.clone());
            let d: Vec<f64> = errors.iter().map(|v| 10.0 - v).collect();
            let mut last = (f64::INFINITY, f64::INFINITY);
            for step in 0..=5 {
                let dp = step as f64 / 10.0;
                let s = selective_mse(&e, &discard_by_distance(dp, &d).unwrap()).unwrap().mse_zeroed;
                let r = selective_mse(&e, &random_selection(dp, errors.len(), seed).unwrap()).unwrap().mse_zeroed;
                prop_assert!(s <= last.0 + 1e-12);
                prop_assert!(r <= last.1 + 1e-12);
                last = (s, r);
            }
        }
    }
}
