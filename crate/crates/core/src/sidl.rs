//! Shift-invariant dictionary learning.
//!
//! Each sample `x_i` (length `p`) is approximated by `sum_k alpha_ik T(d_k, t_ik)`
//! where `T(d, t)` places the length-`q` atom `d` at offset `t` in an
//! otherwise-zero length-`p` vector. The learner minimizes
//!
//! ```text
//! 1/2 sum_i ||x_i - sum_k alpha_ik T(d_k, t_ik)||^2 + lambda sum_i ||alpha_i||_1
//! subject to ||d_k||^2 <= c
//! ```
//!
//! by alternating two steps. Coding picks one offset per atom per sample by
//! maximum absolute correlation with the running residual and then solves the
//! lasso over the shifted atoms with iterative soft-thresholding. The
//! dictionary step takes projected gradient steps on the reconstruction term
//! with backtracking. Coding keeps the previous code of a sample whenever the
//! fresh one is worse, so the objective never increases across alternations.

use std::fs;
use std::path::Path;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::distance::znorm_ed;

/// Projected gradient steps per alternation.
const DICT_STEPS: usize = 5;
/// Step halvings tried before a dictionary step is abandoned.
const MAX_BACKTRACK: usize = 60;

#[derive(Debug, thiserror::Error)]
pub enum SidlError {
    #[error("offset {offset} out of range for atom length {q} in a sample of length {p}")]
    OffsetOutOfRange { offset: usize, q: usize, p: usize },
    #[error("non-finite value in input")]
    NonFiniteInput,
    #[error("non-finite dictionary gradient")]
    NonFiniteGradient,
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("no samples to learn from")]
    EmptySampleSet,
    #[error("invalid configuration: {0}")]
    ConfigInvalid(String),
    #[error("{samples} samples cannot be split into {folds} folds")]
    TooFewSamples { samples: usize, folds: usize },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SidlConfig {
    /// Number of atoms `K`.
    pub n_atoms: usize,
    /// Atom length `q`.
    pub atom_len: usize,
    /// L1 weight.
    pub lambda: f64,
    /// Bound `c` on each atom's squared norm.
    pub norm_bound: f64,
    pub max_iters: usize,
    pub inner_iters: usize,
    pub rel_tol: f64,
    pub seed: u64,
    /// Independent initializations; the run with the lowest final objective wins.
    #[serde(default = "default_restarts")]
    pub restarts: usize,
}

fn default_restarts() -> usize {
    4
}

impl Default for SidlConfig {
    fn default() -> Self {
        Self {
            n_atoms: 8,
            atom_len: 32,
            lambda: 0.1,
            norm_bound: 1.0,
            max_iters: 100,
            inner_iters: 200,
            rel_tol: 1e-5,
            seed: 0,
            restarts: default_restarts(),
        }
    }
}

impl SidlConfig {
    pub fn validate(&self, sample_len: usize) -> Result<(), SidlError> {
        let fail = |m: String| Err(SidlError::ConfigInvalid(m));
        if self.n_atoms == 0 {
            return fail("at least one atom is required".into());
        }
        if self.atom_len == 0 || self.atom_len > sample_len {
            return fail(format!(
                "atom length {} must be in 1..={sample_len}",
                self.atom_len
            ));
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return fail(format!(
                "lambda {} must be finite and non-negative",
                self.lambda
            ));
        }
        if !(self.norm_bound > 0.0 && self.norm_bound.is_finite()) {
            return fail(format!("norm bound {} must be positive", self.norm_bound));
        }
        if self.rel_tol.is_nan() || self.rel_tol <= 0.0 {
            return fail(format!("rel_tol {} must be positive", self.rel_tol));
        }
        if self.max_iters == 0 || self.inner_iters == 0 || self.restarts == 0 {
            return fail("iteration limits and restarts must be positive".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dictionary {
    atoms: Vec<Vec<f64>>,
    pub config: SidlConfig,
    pub objective_trace: Vec<f64>,
}

impl Dictionary {
    /// Wraps explicit atoms; all must share the configured length.
    pub fn new(atoms: Vec<Vec<f64>>, config: SidlConfig) -> Result<Self, SidlError> {
        if atoms.is_empty() {
            return Err(SidlError::ShapeMismatch("dictionary has no atoms".into()));
        }
        if atoms.iter().any(|a| a.len() != config.atom_len) {
            return Err(SidlError::ShapeMismatch(format!(
                "every atom must have length {}",
                config.atom_len
            )));
        }
        if atoms.iter().flatten().any(|v| !v.is_finite()) {
            return Err(SidlError::NonFiniteInput);
        }
        Ok(Self {
            atoms,
            config,
            objective_trace: Vec::new(),
        })
    }

    pub fn atoms(&self) -> &[Vec<f64>] {
        &self.atoms
    }

    pub fn n_atoms(&self) -> usize {
        self.atoms.len()
    }

    pub fn atom_len(&self) -> usize {
        self.config.atom_len
    }
}

/// Coefficients and offsets of one sample.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CodeRow {
    pub alpha: Vec<f64>,
    pub offsets: Vec<usize>,
}

/// Codes of every training sample, in sample order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SparseCode {
    pub rows: Vec<CodeRow>,
}

impl SparseCode {
    pub fn n_samples(&self) -> usize {
        self.rows.len()
    }

    pub fn alpha(&self, sample: usize, atom: usize) -> f64 {
        self.rows[sample].alpha[atom]
    }

    pub fn offset(&self, sample: usize, atom: usize) -> usize {
        self.rows[sample].offsets[atom]
    }

    /// `sum_i |alpha_ik|` for each atom.
    pub fn usage(&self, n_atoms: usize) -> Vec<f64> {
        let mut scores = vec![0.0; n_atoms];
        for row in &self.rows {
            for (s, a) in scores.iter_mut().zip(&row.alpha) {
                *s += a.abs();
            }
        }
        scores
    }
}

/// Places `atom` at offset `t` inside a zero vector of length `p`.
pub fn shift_atom(atom: &[f64], t: usize, p: usize) -> Result<Vec<f64>, SidlError> {
    let q = atom.len();
    if q > p || t > p - q {
        return Err(SidlError::OffsetOutOfRange { offset: t, q, p });
    }
    let mut out = vec![0.0; p];
    out[t..t + q].copy_from_slice(atom);
    Ok(out)
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn soft_threshold(v: f64, thresh: f64) -> f64 {
    if v > thresh {
        v - thresh
    } else if v < -thresh {
        v + thresh
    } else {
        0.0
    }
}

/// `x - sum_k alpha_k T(d_k, t_k)`.
fn residual(x: &[f64], atoms: &[Vec<f64>], code: &CodeRow) -> Vec<f64> {
    let mut r = x.to_vec();
    for ((atom, &a), &t) in atoms.iter().zip(&code.alpha).zip(&code.offsets) {
        if a != 0.0 {
            for (ri, di) in r[t..t + atom.len()].iter_mut().zip(atom) {
                *ri -= a * di;
            }
        }
    }
    r
}

fn sample_objective(x: &[f64], atoms: &[Vec<f64>], code: &CodeRow, lambda: f64) -> f64 {
    let r = residual(x, atoms, code);
    0.5 * dot(&r, &r) + lambda * code.alpha.iter().map(|a| a.abs()).sum::<f64>()
}

/// Lasso over fixed offsets by iterative soft-thresholding, starting at `alpha`.
fn ista(
    x: &[f64],
    atoms: &[Vec<f64>],
    offsets: &[usize],
    mut alpha: Vec<f64>,
    lambda: f64,
    iters: usize,
    tol: f64,
) -> Vec<f64> {
    let k = atoms.len();
    let q = atoms.first().map_or(0, Vec::len);
    // Gram matrix of the shifted atoms and their correlation with x.
    let mut gram = vec![0.0; k * k];
    for a in 0..k {
        for b in a..k {
            let (ta, tb) = (offsets[a], offsets[b]);
            let lo = ta.max(tb);
            let hi = (ta + q).min(tb + q);
            let g: f64 = (lo..hi)
                .map(|pos| atoms[a][pos - ta] * atoms[b][pos - tb])
                .sum();
            gram[a * k + b] = g;
            gram[b * k + a] = g;
        }
    }
    let corr: Vec<f64> = (0..k)
        .map(|a| dot(&x[offsets[a]..offsets[a] + q], &atoms[a]))
        .collect();
    // Gershgorin bound on the largest eigenvalue.
    let lipschitz = (0..k)
        .map(|a| {
            gram[a * k..(a + 1) * k]
                .iter()
                .map(|g| g.abs())
                .sum::<f64>()
        })
        .fold(0.0, f64::max);
    if lipschitz <= 0.0 {
        return vec![0.0; k];
    }
    let step = 1.0 / lipschitz;
    for _ in 0..iters.max(1) {
        let mut max_change = 0.0f64;
        let mut max_abs = 0.0f64;
        let next: Vec<f64> = (0..k)
            .map(|a| {
                let grad = dot(&gram[a * k..(a + 1) * k], &alpha) - corr[a];
                soft_threshold(alpha[a] - step * grad, lambda * step)
            })
            .collect();
        for (old, new) in alpha.iter().zip(&next) {
            max_change = max_change.max((old - new).abs());
            max_abs = max_abs.max(new.abs());
        }
        alpha = next;
        if max_change <= tol * max_abs.max(1.0) {
            break;
        }
    }
    alpha
}

/// Fresh code: greedy offsets against the running residual, then lasso.
fn fresh_code(x: &[f64], atoms: &[Vec<f64>], lambda: f64, iters: usize, tol: f64) -> CodeRow {
    let p = x.len();
    let mut r = x.to_vec();
    let mut offsets = Vec::with_capacity(atoms.len());
    let mut start = Vec::with_capacity(atoms.len());
    for atom in atoms {
        let q = atom.len();
        let norm2 = dot(atom, atom);
        let mut best = (0usize, 0.0f64);
        for t in 0..=p - q {
            let c = dot(&r[t..t + q], atom);
            if c.abs() > best.1.abs() {
                best = (t, c);
            }
        }
        let (t, c) = best;
        let a = if norm2 > 0.0 { c / norm2 } else { 0.0 };
        for (ri, di) in r[t..t + q].iter_mut().zip(atom) {
            *ri -= a * di;
        }
        offsets.push(t);
        start.push(a);
    }
    let alpha = ista(x, atoms, &offsets, start, lambda, iters, tol);
    CodeRow { alpha, offsets }
}

fn code_with(
    x: &[f64],
    atoms: &[Vec<f64>],
    lambda: f64,
    iters: usize,
    tol: f64,
    previous: Option<&CodeRow>,
) -> CodeRow {
    let fresh = fresh_code(x, atoms, lambda, iters, tol);
    let Some(prev) = previous else {
        return fresh;
    };
    let warm = CodeRow {
        alpha: ista(
            x,
            atoms,
            &prev.offsets,
            prev.alpha.clone(),
            lambda,
            iters,
            tol,
        ),
        offsets: prev.offsets.clone(),
    };
    // Keep whichever is better; the warm start cannot be worse than `prev`.
    if sample_objective(x, atoms, &fresh, lambda) < sample_objective(x, atoms, &warm, lambda) {
        fresh
    } else {
        warm
    }
}

fn check_sample(x: &[f64], q: usize) -> Result<(), SidlError> {
    if x.iter().any(|v| !v.is_finite()) {
        return Err(SidlError::NonFiniteInput);
    }
    if x.len() < q {
        return Err(SidlError::ShapeMismatch(format!(
            "sample length {} shorter than atom length {q}",
            x.len()
        )));
    }
    Ok(())
}

/// Codes one sample against `dict`, using its iteration limits.
pub fn sparse_code(x: &[f64], dict: &Dictionary, lambda: f64) -> Result<CodeRow, SidlError> {
    check_sample(x, dict.atom_len())?;
    if !(lambda >= 0.0 && lambda.is_finite()) {
        return Err(SidlError::ConfigInvalid(format!("lambda {lambda}")));
    }
    Ok(fresh_code(
        x,
        &dict.atoms,
        lambda,
        dict.config.inner_iters,
        dict.config.rel_tol,
    ))
}

fn check_shapes(
    samples: &[Vec<f64>],
    atoms: &[Vec<f64>],
    codes: &SparseCode,
) -> Result<(), SidlError> {
    if samples.len() != codes.rows.len() {
        return Err(SidlError::ShapeMismatch(format!(
            "{} samples but {} code rows",
            samples.len(),
            codes.rows.len()
        )));
    }
    let q = atoms.first().map_or(0, Vec::len);
    for (i, (x, row)) in samples.iter().zip(&codes.rows).enumerate() {
        if row.alpha.len() != atoms.len() || row.offsets.len() != atoms.len() {
            return Err(SidlError::ShapeMismatch(format!(
                "code row {i} does not have {} entries",
                atoms.len()
            )));
        }
        if let Some(&t) = row.offsets.iter().find(|&&t| t + q > x.len()) {
            return Err(SidlError::OffsetOutOfRange {
                offset: t,
                q,
                p: x.len(),
            });
        }
    }
    Ok(())
}

fn reconstruction_error(samples: &[Vec<f64>], atoms: &[Vec<f64>], codes: &SparseCode) -> f64 {
    samples
        .iter()
        .zip(&codes.rows)
        .map(|(x, row)| {
            let r = residual(x, atoms, row);
            0.5 * dot(&r, &r)
        })
        .sum()
}

/// Full objective: reconstruction plus L1 penalty.
pub fn sidl_objective(
    samples: &[Vec<f64>],
    dict: &Dictionary,
    codes: &SparseCode,
    lambda: f64,
) -> Result<f64, SidlError> {
    check_shapes(samples, &dict.atoms, codes)?;
    let l1: f64 = codes
        .rows
        .iter()
        .flat_map(|r| r.alpha.iter())
        .map(|a| a.abs())
        .sum();
    Ok(reconstruction_error(samples, &dict.atoms, codes) + lambda * l1)
}

/// Gradient of the reconstruction term with respect to each atom.
pub fn dictionary_gradient(
    samples: &[Vec<f64>],
    dict: &Dictionary,
    codes: &SparseCode,
) -> Result<Vec<Vec<f64>>, SidlError> {
    check_shapes(samples, &dict.atoms, codes)?;
    Ok(gradient(samples, &dict.atoms, codes))
}

fn gradient(samples: &[Vec<f64>], atoms: &[Vec<f64>], codes: &SparseCode) -> Vec<Vec<f64>> {
    let q = atoms.first().map_or(0, Vec::len);
    let mut grad = vec![vec![0.0; q]; atoms.len()];
    for (x, row) in samples.iter().zip(&codes.rows) {
        let r = residual(x, atoms, row);
        for (k, g) in grad.iter_mut().enumerate() {
            let a = row.alpha[k];
            if a != 0.0 {
                let t = row.offsets[k];
                for (gj, rj) in g.iter_mut().zip(&r[t..t + q]) {
                    *gj -= a * rj;
                }
            }
        }
    }
    grad
}

fn project(atom: &mut [f64], bound: f64) {
    let norm2 = dot(atom, atom);
    if norm2 > bound {
        let scale = (bound / norm2).sqrt();
        atom.iter_mut().for_each(|v| *v *= scale);
    }
}

/// One projected gradient step on the atoms with codes held fixed. The step
/// is halved until the reconstruction error does not increase; if no such
/// step is found the dictionary is returned unchanged.
pub fn dict_update(
    dict: &Dictionary,
    samples: &[Vec<f64>],
    codes: &SparseCode,
    step: f64,
) -> Result<Dictionary, SidlError> {
    check_shapes(samples, &dict.atoms, codes)?;
    let (atoms, _) = projected_step(&dict.atoms, samples, codes, step, dict.config.norm_bound)?;
    Ok(Dictionary {
        atoms,
        config: dict.config.clone(),
        objective_trace: dict.objective_trace.clone(),
    })
}

fn projected_step(
    atoms: &[Vec<f64>],
    samples: &[Vec<f64>],
    codes: &SparseCode,
    step: f64,
    bound: f64,
) -> Result<(Vec<Vec<f64>>, f64), SidlError> {
    let grad = gradient(samples, atoms, codes);
    if grad.iter().flatten().any(|g| !g.is_finite()) {
        return Err(SidlError::NonFiniteGradient);
    }
    let current = reconstruction_error(samples, atoms, codes);
    if grad.iter().flatten().all(|g| *g == 0.0) {
        return Ok((atoms.to_vec(), current));
    }
    let mut step = step;
    for _ in 0..MAX_BACKTRACK {
        let candidate: Vec<Vec<f64>> = atoms
            .iter()
            .zip(&grad)
            .map(|(d, g)| {
                let mut next: Vec<f64> = d.iter().zip(g).map(|(v, gv)| v - step * gv).collect();
                project(&mut next, bound);
                next
            })
            .collect();
        let value = reconstruction_error(samples, &candidate, codes);
        if value <= current {
            return Ok((candidate, value));
        }
        step *= 0.5;
    }
    Ok((atoms.to_vec(), current))
}

/// Seeded random subsequences, with offsets drawn in proportion to the
/// squared energy of each candidate segment so that initial atoms tend to
/// cover whole high-amplitude patterns rather than fragments of them.
fn init_atoms(
    samples: &[Vec<f64>],
    q: usize,
    n_atoms: usize,
    norm_bound: f64,
    seed: u64,
) -> Vec<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let target = norm_bound.sqrt();
    (0..n_atoms)
        .map(|_| {
            let x = &samples[rng.random_range(0..samples.len())];
            let mean = x.iter().sum::<f64>() / x.len() as f64;
            let weights: Vec<f64> = x
                .windows(q)
                .map(|w| w.iter().map(|v| (v - mean).powi(2)).sum::<f64>().powi(2))
                .collect();
            let t = match WeightedIndex::new(&weights) {
                Ok(dist) => dist.sample(&mut rng),
                Err(_) => rng.random_range(0..weights.len()),
            };
            let mut atom = x[t..t + q].to_vec();
            let mut norm = dot(&atom, &atom).sqrt();
            if norm < 1e-12 {
                atom = (0..q).map(|_| rng.random_range(-1.0..1.0)).collect();
                norm = dot(&atom, &atom).sqrt();
            }
            atom.iter_mut().for_each(|v| *v *= target / norm);
            atom
        })
        .collect()
}

fn code_all(
    samples: &[Vec<f64>],
    atoms: &[Vec<f64>],
    config: &SidlConfig,
    previous: Option<&SparseCode>,
) -> SparseCode {
    let rows = samples
        .par_iter()
        .enumerate()
        .map(|(i, x)| {
            code_with(
                x,
                atoms,
                config.lambda,
                config.inner_iters,
                config.rel_tol,
                previous.map(|p| &p.rows[i]),
            )
        })
        .collect();
    SparseCode { rows }
}

/// Atoms, codes and objective trace of one initialization.
type LearnRun = (Vec<Vec<f64>>, SparseCode, Vec<f64>);

fn learn_once(samples: &[Vec<f64>], config: &SidlConfig, seed: u64) -> Result<LearnRun, SidlError> {
    let mut atoms = init_atoms(
        samples,
        config.atom_len,
        config.n_atoms,
        config.norm_bound,
        seed,
    );
    let mut codes = code_all(samples, &atoms, config, None);
    let l1 = |c: &SparseCode| -> f64 {
        config.lambda
            * c.rows
                .iter()
                .flat_map(|r| &r.alpha)
                .map(|a| a.abs())
                .sum::<f64>()
    };
    let mut trace = vec![reconstruction_error(samples, &atoms, &codes) + l1(&codes)];

    for iter in 0..config.max_iters {
        if iter > 0 {
            codes = code_all(samples, &atoms, config, Some(&codes));
        }
        let lipschitz: f64 = codes.rows.iter().map(|r| dot(&r.alpha, &r.alpha)).sum();
        let mut recon = reconstruction_error(samples, &atoms, &codes);
        if lipschitz > 0.0 {
            for _ in 0..DICT_STEPS {
                let (next, value) =
                    projected_step(&atoms, samples, &codes, 1.0 / lipschitz, config.norm_bound)?;
                let done = recon - value <= config.rel_tol * recon.abs();
                atoms = next;
                recon = value;
                if done {
                    break;
                }
            }
        }
        let value = recon + l1(&codes);
        let prev = *trace.last().expect("trace is non-empty");
        trace.push(value);
        if (prev - value).abs() <= config.rel_tol * prev.abs().max(f64::MIN_POSITIVE) {
            break;
        }
    }

    Ok((atoms, codes, trace))
}

/// Learns a dictionary from equal-length samples.
pub fn learn_dictionary(
    samples: &[Vec<f64>],
    config: &SidlConfig,
) -> Result<(Dictionary, SparseCode), SidlError> {
    let first = samples.first().ok_or(SidlError::EmptySampleSet)?;
    let p = first.len();
    config.validate(p)?;
    for x in samples {
        if x.len() != p {
            return Err(SidlError::ShapeMismatch(format!(
                "samples must share one length ({p} vs {})",
                x.len()
            )));
        }
        check_sample(x, config.atom_len)?;
    }

    let mut best: Option<LearnRun> = None;
    for restart in 0..config.restarts {
        let seed = config
            .seed
            .wrapping_add((restart as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
        let run = learn_once(samples, config, seed)?;
        let better = best.as_ref().is_none_or(|b| run.2.last() < b.2.last());
        if better {
            best = Some(run);
        }
    }
    let (atoms, codes, trace) = best.expect("at least one restart");
    let dict = Dictionary {
        atoms,
        config: config.clone(),
        objective_trace: trace,
    };
    Ok((dict, codes))
}

/// A ranked shapelet.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Shapelet {
    /// Atom values, sign-flipped when the atom is mostly used with negative
    /// coefficients so that the stored shape is the one seen in the data.
    pub atom: Vec<f64>,
    pub score: f64,
    /// Index of the source atom in the dictionary.
    pub atom_index: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShapeletSet {
    pub shapelets: Vec<Shapelet>,
    pub top_k: usize,
    pub dedup_threshold: f64,
}

impl ShapeletSet {
    pub fn len(&self) -> usize {
        self.shapelets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.shapelets.is_empty()
    }

    pub fn atoms(&self) -> impl Iterator<Item = &[f64]> + '_ {
        self.shapelets.iter().map(|s| s.atom.as_slice())
    }
}

/// Ranks atoms by total absolute coefficient and keeps at most `top_k`,
/// skipping any atom within `dedup_threshold` (z-normalized distance) of one
/// already kept. Unused atoms are never kept.
pub fn rank_top_k(
    dict: &Dictionary,
    codes: &SparseCode,
    top_k: usize,
    dedup_threshold: f64,
) -> ShapeletSet {
    let scores = codes.usage(dict.n_atoms());
    let mut signed = vec![0.0; dict.n_atoms()];
    for row in &codes.rows {
        for (s, a) in signed.iter_mut().zip(&row.alpha) {
            *s += a;
        }
    }
    let mut order: Vec<usize> = (0..dict.n_atoms()).filter(|&k| scores[k] > 0.0).collect();
    // Stable sort keeps lower atom indices first among equal scores.
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));

    let mut kept: Vec<Shapelet> = Vec::new();
    for k in order {
        if kept.len() >= top_k {
            break;
        }
        let sign = if signed[k] < 0.0 { -1.0 } else { 1.0 };
        let atom: Vec<f64> = dict.atoms[k].iter().map(|v| sign * v).collect();
        let duplicate = kept
            .iter()
            .any(|s| znorm_ed(&s.atom, &atom).expect("atoms share a length") < dedup_threshold);
        if !duplicate {
            kept.push(Shapelet {
                atom,
                score: scores[k],
                atom_index: k,
            });
        }
    }
    ShapeletSet {
        shapelets: kept,
        top_k,
        dedup_threshold,
    }
}

/// Candidate values for the cross-validated search.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SidlGrid {
    pub n_atoms: Vec<usize>,
    pub atom_len: Vec<usize>,
    pub lambda: Vec<f64>,
}

impl SidlGrid {
    /// `K in {4, 8, 16}`, `q in {p/16, p/8, p/4}`, `lambda in {0.01, 0.1, 1}`.
    pub fn default_for(sample_len: usize) -> Self {
        let mut atom_len: Vec<usize> = [16, 8, 4]
            .iter()
            .map(|d| ((sample_len as f64 / *d as f64).round() as usize).max(1))
            .collect();
        atom_len.dedup();
        Self {
            n_atoms: vec![4, 8, 16],
            atom_len,
            lambda: vec![0.01, 0.1, 1.0],
        }
    }

    fn cells(&self) -> Vec<(usize, usize, f64)> {
        let mut cells = Vec::new();
        for &k in &self.n_atoms {
            for &q in &self.atom_len {
                for &l in &self.lambda {
                    cells.push((k, q, l));
                }
            }
        }
        cells
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridCell {
    pub n_atoms: usize,
    pub atom_len: usize,
    pub lambda: f64,
    /// Held-out `1/2 ||x - reconstruction||^2` per sample, averaged over folds.
    pub cv_error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridSearchResult {
    pub best: SidlConfig,
    pub cells: Vec<GridCell>,
}

/// Held-out reconstruction error per sample with a trained dictionary.
fn held_out_error(samples: &[&Vec<f64>], dict: &Dictionary) -> f64 {
    let cfg = &dict.config;
    // Collected before summing so the total does not depend on thread scheduling.
    let errors: Vec<f64> = samples
        .par_iter()
        .map(|x| {
            let code = fresh_code(x, &dict.atoms, cfg.lambda, cfg.inner_iters, cfg.rel_tol);
            let r = residual(x, &dict.atoms, &code);
            0.5 * dot(&r, &r)
        })
        .collect();
    errors.iter().sum::<f64>() / samples.len() as f64
}

/// Picks `(K, q, lambda)` by k-fold cross-validated reconstruction error.
/// The remaining fields of `base` are kept. Ties go to smaller `K`, then
/// smaller `q`, then larger `lambda`.
pub fn grid_search(
    samples: &[Vec<f64>],
    grid: &SidlGrid,
    base: &SidlConfig,
    folds: usize,
    seed: u64,
) -> Result<GridSearchResult, SidlError> {
    if folds < 2 || samples.len() < folds {
        return Err(SidlError::TooFewSamples {
            samples: samples.len(),
            folds,
        });
    }
    let cells = grid.cells();
    if cells.is_empty() {
        return Err(SidlError::ConfigInvalid("empty grid".into()));
    }
    let p = samples[0].len();
    for &(k, q, l) in &cells {
        SidlConfig {
            n_atoms: k,
            atom_len: q,
            lambda: l,
            ..base.clone()
        }
        .validate(p)?;
    }

    let mut order: Vec<usize> = (0..samples.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let fold_of: Vec<usize> = {
        let mut f = vec![0; samples.len()];
        for (rank, &i) in order.iter().enumerate() {
            f[i] = rank % folds;
        }
        f
    };

    let jobs: Vec<(usize, usize)> = (0..cells.len())
        .flat_map(|c| (0..folds).map(move |f| (c, f)))
        .collect();
    let errors: Vec<Result<f64, SidlError>> = jobs
        .par_iter()
        .map(|&(c, f)| {
            let (k, q, l) = cells[c];
            let config = SidlConfig {
                n_atoms: k,
                atom_len: q,
                lambda: l,
                ..base.clone()
            };
            let train: Vec<Vec<f64>> = samples
                .iter()
                .zip(&fold_of)
                .filter(|(_, &fi)| fi != f)
                .map(|(x, _)| x.clone())
                .collect();
            let test: Vec<&Vec<f64>> = samples
                .iter()
                .zip(&fold_of)
                .filter(|(_, &fi)| fi == f)
                .map(|(x, _)| x)
                .collect();
            let (dict, _) = learn_dictionary(&train, &config)?;
            Ok(held_out_error(&test, &dict))
        })
        .collect();

    let mut table = Vec::with_capacity(cells.len());
    for (c, &(k, q, l)) in cells.iter().enumerate() {
        let mut sum = 0.0;
        for f in 0..folds {
            sum += errors[c * folds + f].as_ref().map_err(|e| {
                SidlError::ConfigInvalid(format!("grid cell K={k} q={q} lambda={l}: {e}"))
            })?;
        }
        table.push(GridCell {
            n_atoms: k,
            atom_len: q,
            lambda: l,
            cv_error: sum / folds as f64,
        });
    }

    let best = table
        .iter()
        .min_by(|a, b| {
            a.cv_error
                .total_cmp(&b.cv_error)
                .then(a.n_atoms.cmp(&b.n_atoms))
                .then(a.atom_len.cmp(&b.atom_len))
                .then(b.lambda.total_cmp(&a.lambda))
        })
        .expect("grid is non-empty");
    Ok(GridSearchResult {
        best: SidlConfig {
            n_atoms: best.n_atoms,
            atom_len: best.atom_len,
            lambda: best.lambda,
            ..base.clone()
        },
        cells: table,
    })
}

/// A learned dictionary together with its ranked shapelets, as stored on disk.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShapeletModel {
    pub dictionary: Dictionary,
    pub scores: Vec<f64>,
    pub shapelets: ShapeletSet,
}

impl ShapeletModel {
    pub fn new(dictionary: Dictionary, codes: &SparseCode, top_k: usize, dedup: f64) -> Self {
        let scores = codes.usage(dictionary.n_atoms());
        let shapelets = rank_top_k(&dictionary, codes, top_k, dedup);
        Self {
            dictionary,
            scores,
            shapelets,
        }
    }

    pub fn to_json(&self) -> Result<String, SidlError> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self, SidlError> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), SidlError> {
        fs::write(path, self.to_json()? + "\n")?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, SidlError> {
        Self::from_json(&fs::read_to_string(path)?)
    }
}
