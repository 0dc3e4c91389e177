//! z-normalized Euclidean distance and sliding-minimum shapelet matching.

use std::fs::File;
use std::io::Write;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::WindowSet;
use crate::sidl::ShapeletSet;

/// Population std below which a sequence is treated as flat.
pub const FLAT_STD: f64 = 1e-12;

#[derive(Debug, thiserror::Error)]
pub enum DistanceError {
    #[error("sequence lengths differ ({0} vs {1})")]
    LengthMismatch(usize, usize),
    #[error("shapelet length {shapelet} exceeds context length {context}")]
    ShapeletTooLong { shapelet: usize, context: usize },
    #[error("no shapelets to match against")]
    EmptyShapeletSet,
    #[error("empty sequence")]
    Empty,
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// `(v - mean) / popstd`; flat sequences map to all zeros.
pub fn znorm(v: &[f64]) -> Vec<f64> {
    let mut out = v.to_vec();
    znorm_in_place(&mut out);
    out
}

fn znorm_in_place(v: &mut [f64]) {
    if v.is_empty() {
        return;
    }
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let std = (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n).sqrt();
    if std < FLAT_STD {
        v.iter_mut().for_each(|x| *x = 0.0);
    } else {
        v.iter_mut().for_each(|x| *x = (*x - mean) / std);
    }
}

pub fn znorm_ed(a: &[f64], b: &[f64]) -> Result<f64, DistanceError> {
    if a.len() != b.len() {
        return Err(DistanceError::LengthMismatch(a.len(), b.len()));
    }
    if a.is_empty() {
        return Err(DistanceError::Empty);
    }
    Ok(euclidean(&znorm(a), &znorm(b)))
}

/// Largest absolute Pearson correlation between `a` and `b` over lags
/// `-max_lag..=max_lag`, each lag comparing only the overlapping parts.
/// Overlaps shorter than two points are skipped.
pub fn best_aligned_correlation(a: &[f64], b: &[f64], max_lag: usize) -> f64 {
    let (n, m) = (a.len() as isize, b.len() as isize);
    let max_lag = max_lag as isize;
    let mut best = 0.0f64;
    for lag in -max_lag..=max_lag {
        let start = 0.max(-lag);
        let end = n.min(m - lag);
        if end - start < 2 {
            continue;
        }
        let x = &a[start as usize..end as usize];
        let y = &b[(start + lag) as usize..(end + lag) as usize];
        let (zx, zy) = (znorm(x), znorm(y));
        let r = zx.iter().zip(&zy).map(|(u, v)| u * v).sum::<f64>() / x.len() as f64;
        best = best.max(r.abs());
    }
    best
}

fn euclidean(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

/// Distance between an already z-normalized shapelet and `segment`.
fn distance_to_normed(normed: &[f64], segment: &[f64], scratch: &mut Vec<f64>) -> f64 {
    scratch.clear();
    scratch.extend_from_slice(segment);
    znorm_in_place(scratch);
    euclidean(normed, scratch)
}

/// Best match of `shapelet` over every alignment inside `context`.
/// Returns `(distance, position)`; ties resolve to the earliest position.
pub fn sliding_min_distance(
    context: &[f64],
    shapelet: &[f64],
) -> Result<(f64, usize), DistanceError> {
    check_lengths(context, shapelet)?;
    let normed = znorm(shapelet);
    Ok(sliding_min_normed(context, &normed))
}

fn check_lengths(context: &[f64], shapelet: &[f64]) -> Result<(), DistanceError> {
    if shapelet.is_empty() {
        return Err(DistanceError::Empty);
    }
    if shapelet.len() > context.len() {
        return Err(DistanceError::ShapeletTooLong {
            shapelet: shapelet.len(),
            context: context.len(),
        });
    }
    Ok(())
}

fn sliding_min_normed(context: &[f64], normed: &[f64]) -> (f64, usize) {
    let q = normed.len();
    let mut scratch = Vec::with_capacity(q);
    let mut best = (f64::INFINITY, 0);
    for (j, segment) in context.windows(q).enumerate() {
        let d = distance_to_normed(normed, segment, &mut scratch);
        if d < best.0 {
            best = (d, j);
        }
    }
    best
}

/// Distance at every alignment via the correlation identity: for non-flat
/// segments `d^2 = 2q(1 - rho)` with `rho` the Pearson correlation, and a
/// flat side gives `d = ||znorm(other)||`. Near-perfect matches are
/// re-evaluated directly. Agrees with the exhaustive evaluation to 1e-9.
pub fn sliding_distance_profile(
    context: &[f64],
    shapelet: &[f64],
) -> Result<Vec<f64>, DistanceError> {
    check_lengths(context, shapelet)?;
    let q = shapelet.len();
    let qf = q as f64;
    let normed = znorm(shapelet);
    let shapelet_flat = normed.iter().all(|v| *v == 0.0);
    let mut scratch = Vec::with_capacity(q);

    let profile = context
        .windows(q)
        .map(|segment| {
            let mean = segment.iter().sum::<f64>() / qf;
            let std = (segment.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / qf).sqrt();
            match (shapelet_flat, std < FLAT_STD) {
                (true, true) => 0.0,
                (true, false) | (false, true) => qf.sqrt(),
                (false, false) => {
                    // sum(normed) = 0, so the segment mean drops out of the dot.
                    let dot: f64 = segment.iter().zip(&normed).map(|(x, s)| x * s).sum();
                    let d2 = 2.0 * qf * (1.0 - dot / (qf * std));
                    if d2 < 1e-6 * qf {
                        // sqrt amplifies cancellation near a perfect match.
                        distance_to_normed(&normed, segment, &mut scratch)
                    } else {
                        d2.sqrt()
                    }
                }
            }
        })
        .collect();
    Ok(profile)
}

/// Closest shapelet for one window.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WindowMatch {
    pub distance: f64,
    pub shapelet: usize,
    pub position: usize,
}

/// Distances between every window context and every shapelet.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistanceMatrix {
    pub n_windows: usize,
    pub n_shapelets: usize,
    /// Row-major `n_windows x n_shapelets`.
    values: Vec<f64>,
    positions: Vec<usize>,
    per_window_min: Vec<WindowMatch>,
}

impl DistanceMatrix {
    /// Builds a matrix from raw rows, deriving the per-window minima.
    pub fn from_rows(values: Vec<Vec<f64>>, positions: Vec<Vec<usize>>) -> Self {
        let n_windows = values.len();
        let n_shapelets = values.first().map_or(0, Vec::len);
        let per_window_min = values
            .iter()
            .zip(&positions)
            .map(|(row, pos)| row_min(row, pos))
            .collect();
        Self {
            n_windows,
            n_shapelets,
            values: values.into_iter().flatten().collect(),
            positions: positions.into_iter().flatten().collect(),
            per_window_min,
        }
    }

    pub fn get(&self, window: usize, shapelet: usize) -> f64 {
        self.values[window * self.n_shapelets + shapelet]
    }

    pub fn position(&self, window: usize, shapelet: usize) -> usize {
        self.positions[window * self.n_shapelets + shapelet]
    }

    pub fn row(&self, window: usize) -> &[f64] {
        &self.values[window * self.n_shapelets..(window + 1) * self.n_shapelets]
    }

    pub fn per_window_min(&self) -> &[WindowMatch] {
        &self.per_window_min
    }

    pub fn min_distances(&self) -> Vec<f64> {
        self.per_window_min.iter().map(|m| m.distance).collect()
    }

    /// Writes `window_index,shapelet_index,distance,position`.
    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<(), DistanceError> {
        let mut out = std::io::BufWriter::new(File::create(path)?);
        writeln!(out, "window_index,shapelet_index,distance,position")?;
        for w in 0..self.n_windows {
            for s in 0..self.n_shapelets {
                writeln!(out, "{w},{s},{},{}", self.get(w, s), self.position(w, s))?;
            }
        }
        out.flush()?;
        Ok(())
    }
}

fn row_min(row: &[f64], positions: &[usize]) -> WindowMatch {
    let mut best = WindowMatch {
        distance: f64::INFINITY,
        shapelet: 0,
        position: 0,
    };
    for (k, (&d, &p)) in row.iter().zip(positions).enumerate() {
        if d < best.distance {
            best = WindowMatch {
                distance: d,
                shapelet: k,
                position: p,
            };
        }
    }
    best
}

pub fn build_distance_matrix(
    windows: &WindowSet,
    shapelets: &ShapeletSet,
) -> Result<DistanceMatrix, DistanceError> {
    let atoms: Vec<&[f64]> = shapelets.atoms().collect();
    build_from_atoms(windows, &atoms)
}

/// Same as [`build_distance_matrix`] over raw shapelet sequences.
pub fn build_from_atoms(
    windows: &WindowSet,
    shapelets: &[&[f64]],
) -> Result<DistanceMatrix, DistanceError> {
    if shapelets.is_empty() {
        return Err(DistanceError::EmptyShapeletSet);
    }
    for s in shapelets {
        check_lengths(&vec![0.0; windows.sl()], s)?;
    }
    let normed: Vec<Vec<f64>> = shapelets.iter().map(|s| znorm(s)).collect();
    let (values, positions): (Vec<Vec<f64>>, Vec<Vec<usize>>) = (0..windows.len())
        .into_par_iter()
        .map(|i| {
            let context = windows.context(i);
            normed
                .iter()
                .map(|s| sliding_min_normed(context, s))
                .unzip()
        })
        .unzip();
    Ok(DistanceMatrix::from_rows(values, positions))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{make_windows, TimeSeries};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn brute_force(context: &[f64], shapelet: &[f64]) -> (f64, usize) {
        let q = shapelet.len();
        let mut best = (f64::INFINITY, 0);
        for j in 0..=context.len() - q {
            let d = znorm_ed(&context[j..j + q], shapelet).unwrap();
            if d < best.0 {
                best = (d, j);
            }
        }
        best
    }

    #[test]
    fn znorm_hand_values() {
        let z = znorm(&[1.0, 2.0, 3.0]);
        let expected = [-1.2247, 0.0, 1.2247];
        for (a, b) in z.iter().zip(expected) {
            assert!((a - b).abs() < 1e-4);
        }
        assert_eq!(znorm(&[7.0, 7.0, 7.0]), vec![0.0; 3]);
    }

    #[test]
    fn znorm_ed_hand_values() {
        let d = znorm_ed(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]).unwrap();
        assert!((d - 12f64.sqrt()).abs() < 1e-9);
        let a = [0.3, -1.0, 2.5, 0.7];
        let b: Vec<f64> = a.iter().map(|v| 5.0 * v + 2.0).collect();
        assert!(znorm_ed(&a, &b).unwrap() < 1e-9);
        assert!(matches!(
            znorm_ed(&a, &b[..3]),
            Err(DistanceError::LengthMismatch(4, 3))
        ));
    }

    #[test]
    fn flat_segment_distance_is_shapelet_norm() {
        let shapelet = [1.0, 3.0, 2.0];
        let (d, pos) = sliding_min_distance(&[5.0; 6], &shapelet).unwrap();
        let norm = znorm(&shapelet).iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!((d - norm).abs() < 1e-12);
        assert_eq!(pos, 0);
    }

    #[test]
    fn contained_shapelet_is_found() {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let context: Vec<f64> = (0..50).map(|_| rng.random_range(-1.0..1.0)).collect();
        let shapelet: Vec<f64> = context[17..27].iter().map(|v| 0.5 * v - 3.0).collect();
        let (d, pos) = sliding_min_distance(&context, &shapelet).unwrap();
        assert!(d < 1e-9);
        assert_eq!(pos, 17);
    }

    #[test]
    fn full_length_shapelet_is_single_evaluation() {
        let a = [1.0, 4.0, 2.0, 8.0];
        let b = [2.0, 1.0, 0.0, 3.0];
        let (d, pos) = sliding_min_distance(&a, &b).unwrap();
        assert_eq!(pos, 0);
        assert_eq!(d, znorm_ed(&a, &b).unwrap());
        assert!(matches!(
            sliding_min_distance(&a[..3], &b),
            Err(DistanceError::ShapeletTooLong { .. })
        ));
    }

    #[test]
    fn ties_pick_earliest_position() {
        let context = [0.0, 1.0, 0.0, 1.0, 0.0, 1.0];
        let (d, pos) = sliding_min_distance(&context, &[0.0, 1.0]).unwrap();
        assert_eq!((d, pos), (0.0, 0));
    }

    #[test]
    fn sliding_matches_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        for _ in 0..200 {
            let sl = rng.random_range(4..60);
            let q = rng.random_range(1..=sl);
            let context: Vec<f64> = (0..sl).map(|_| rng.random_range(-3.0..3.0)).collect();
            let shapelet: Vec<f64> = (0..q).map(|_| rng.random_range(-3.0..3.0)).collect();
            let (d, p) = sliding_min_distance(&context, &shapelet).unwrap();
            let (bd, bp) = brute_force(&context, &shapelet);
            assert!((d - bd).abs() <= 1e-12);
            assert_eq!(p, bp);
        }
    }

    #[test]
    fn fast_profile_agrees_with_exhaustive() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..200 {
            let sl = rng.random_range(8..120);
            let q = rng.random_range(2..=sl);
            let offset = rng.random_range(-100.0..100.0);
            let mut context: Vec<f64> = (0..sl)
                .map(|_| offset + rng.random_range(-3.0..3.0))
                .collect();
            if rng.random_bool(0.3) {
                let start = rng.random_range(0..sl - 1);
                let end = (start + q + 2).min(sl);
                context[start..end].iter_mut().for_each(|v| *v = offset);
            }
            let shapelet: Vec<f64> = (0..q).map(|_| rng.random_range(-3.0..3.0)).collect();
            let profile = sliding_distance_profile(&context, &shapelet).unwrap();
            for (j, d) in profile.iter().enumerate() {
                let exact = znorm_ed(&context[j..j + q], &shapelet).unwrap();
                assert!((d - exact).abs() < 1e-9 * exact.max(1.0), "{d} vs {exact}");
            }
        }
    }

    #[test]
    fn matrix_matches_double_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let values: Vec<f64> = (0..59).map(|_| rng.random_range(-1.0..1.0)).collect();
        let windows = make_windows(&TimeSeries::new("r", values).unwrap(), 30, 10, 1).unwrap();
        assert_eq!(windows.len(), 20);
        let shapelets: Vec<Vec<f64>> = [5, 8, 12]
            .iter()
            .map(|&q| (0..q).map(|_| rng.random_range(-1.0..1.0)).collect())
            .collect();
        let refs: Vec<&[f64]> = shapelets.iter().map(Vec::as_slice).collect();
        let m = build_from_atoms(&windows, &refs).unwrap();
        for i in 0..20 {
            for (k, s) in shapelets.iter().enumerate() {
                let (d, p) = brute_force(windows.context(i), s);
                assert!((m.get(i, k) - d).abs() <= 1e-12);
                assert_eq!(m.position(i, k), p);
            }
            let row = m.row(i);
            let min = row.iter().cloned().fold(f64::INFINITY, f64::min);
            assert_eq!(m.per_window_min()[i].distance, min);
            assert_eq!(row[m.per_window_min()[i].shapelet], min);
        }
    }

    #[test]
    fn single_window_exact_match() {
        let values: Vec<f64> = vec![1.0, 5.0, 2.0, 4.0, 9.0, 0.0];
        let windows =
            make_windows(&TimeSeries::new("r", values.clone()).unwrap(), 4, 2, 1).unwrap();
        let windows_one = make_windows(&TimeSeries::new("r", values).unwrap(), 4, 2, 10).unwrap();
        assert_eq!(windows_one.len(), 1);
        let m = build_from_atoms(&windows_one, &[&[1.0, 5.0, 2.0]]).unwrap();
        assert_eq!(m.get(0, 0), 0.0);
        assert!(matches!(
            build_from_atoms(&windows, &[]),
            Err(DistanceError::EmptyShapeletSet)
        ));
    }

    fn pair() -> impl Strategy<Value = (Vec<f64>, Vec<f64>)> {
        (1usize..30).prop_flat_map(|n| {
            (
                proptest::collection::vec(-10.0f64..10.0, n),
                proptest::collection::vec(-10.0f64..10.0, n),
            )
        })
    }

    proptest! {
        #[test]
        fn znorm_ed_is_a_symmetric_nonnegative_affine_invariant(
            (a, b) in pair(),
            s1 in 0.1f64..10.0, o1 in -50.0f64..50.0,
            s2 in 0.1f64..10.0, o2 in -50.0f64..50.0,
        ) {
            let d = znorm_ed(&a, &b).unwrap();
            prop_assert!(d >= 0.0);
            prop_assert_eq!(d, znorm_ed(&b, &a).unwrap());
            prop_assert!(znorm_ed(&a, &a).unwrap() < 1e-12);
            let ta: Vec<f64> = a.iter().map(|v| s1 * v + o1).collect();
            let tb: Vec<f64> = b.iter().map(|v| s2 * v + o2).collect();
            // Skip pairs that are near-flat, where the flat cutoff decides the result.
            let (_, sa) = crate::forecast::mean_std(&a);
            let (_, sb) = crate::forecast::mean_std(&b);
            prop_assume!(sa > 1e-6 && sb > 1e-6);
            prop_assert!((znorm_ed(&ta, &tb).unwrap() - d).abs() < 1e-9);
        }

        #[test]
        fn squared_distance_is_correlation_identity((a, b) in pair()) {
            let (_, sa) = crate::forecast::mean_std(&a);
            let (_, sb) = crate::forecast::mean_std(&b);
            prop_assume!(a.len() > 1 && sa > 1e-6 && sb > 1e-6);
            let q = a.len() as f64;
            let (za, zb) = (znorm(&a), znorm(&b));
            let rho = za.iter().zip(&zb).map(|(x, y)| x * y).sum::<f64>() / q;
            let d = znorm_ed(&a, &b).unwrap();
            prop_assert!((d * d - 2.0 * q * (1.0 - rho)).abs() < 1e-9);
        }

        #[test]
        fn znorm_affine_invariant(v in proptest::collection::vec(-10.0f64..10.0, 2..30), a in 0.1f64..10.0, b in -10.0f64..10.0) {
            let (_, s) = crate::forecast::mean_std(&v);
            prop_assume!(s > 1e-6);
            let t: Vec<f64> = v.iter().map(|x| a * x + b).collect();
            for (x, y) in znorm(&v).iter().zip(znorm(&t)) {
                prop_assert!((x - y).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn aligned_correlation_finds_shifted_copy() {
        let base: Vec<f64> = (0..40).map(|i| ((i * i) % 13) as f64).collect();
        let a = &base[0..30];
        let b = &base[5..35];
        assert!(best_aligned_correlation(a, b, 1) < 0.99);
        assert!((best_aligned_correlation(a, b, 5) - 1.0).abs() < 1e-12);
        let neg: Vec<f64> = a.iter().map(|v| -2.0 * v + 1.0).collect();
        assert!((best_aligned_correlation(a, &neg, 0) - 1.0).abs() < 1e-12);
    }
}
