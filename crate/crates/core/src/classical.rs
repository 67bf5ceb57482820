//! Frame sampling, SMOTE oversampling and a one-vs-rest RBF SVM trained by
//! sequential minimal optimization.

use rand::seq::index::sample as sample_distinct;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{NormalizedSample, NUM_CLASSES};
use crate::tensor::Tensor;
use crate::train::{rng_stream, streams};

#[derive(Debug, Error)]
pub enum ClassicalError {
    #[error("cannot sample frames from an empty sequence")]
    EmptySequence,
    #[error("SMOTE: class {class} has a single row, cannot interpolate")]
    SingleRow { class: usize },
    #[error("length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("binary SVM needs both labels present")]
    SingleClass,
    #[error("model has no fitted machines")]
    Unfitted,
    #[error("{0}")]
    Invalid(String),
}

pub type Result<T> = std::result::Result<T, ClassicalError>;

/// `k` frame indices in ascending order: distinct when `t >= k`, drawn with
/// replacement otherwise.
pub fn sample_frame_indices(t: usize, k: usize, rng: &mut impl Rng) -> Result<Vec<usize>> {
    if t == 0 {
        return Err(ClassicalError::EmptySequence);
    }
    if k == 0 {
        return Err(ClassicalError::Invalid("frame count k must be >= 1".into()));
    }
    let mut idx = if t >= k {
        sample_distinct(rng, t, k).into_vec()
    } else {
        (0..k).map(|_| rng.gen_range(0..t)).collect()
    };
    idx.sort_unstable();
    Ok(idx)
}

/// Concatenates the rows of `seq[T, D]` at `indices`.
pub fn gather_frames(seq: &Tensor, indices: &[usize]) -> Vec<f64> {
    let d = seq.last_dim();
    indices.iter().flat_map(|&t| seq.data()[t * d..(t + 1) * d].iter().copied()).collect()
}

/// `k` random frames of `seq[T, D]`, flattened to length `k * D`.
pub fn random_frame_sample(seq: &Tensor, k: usize, rng: &mut impl Rng) -> Result<Vec<f64>> {
    let idx = sample_frame_indices(seq.shape()[0], k, rng)?;
    Ok(gather_frames(seq, &idx))
}

/// Flat design row for one sample: the same frame indices are used for every
/// view so the views stay aligned, then the per-view vectors are concatenated.
pub fn flatten_sample(s: &NormalizedSample, n_views: usize, k: usize, rng: &mut impl Rng) -> Result<Vec<f64>> {
    if s.views.len() < n_views {
        return Err(ClassicalError::Invalid(format!("sample has {} views, need {n_views}", s.views.len())));
    }
    let idx = sample_frame_indices(s.len(), k, rng)?;
    Ok(s.views[..n_views].iter().flat_map(|v| gather_frames(v, &idx)).collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticRow {
    pub class: usize,
    /// Row indices into the original input.
    pub parent: usize,
    pub neighbor: usize,
    pub u: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResampleReport {
    pub before: [usize; NUM_CLASSES],
    pub after: [usize; NUM_CLASSES],
    /// One entry per appended row, in output order.
    pub synthetic: Vec<SyntheticRow>,
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Balances every present class up to the majority count by interpolating
/// between a random row and one of its `k_neighbors` nearest same-class rows.
/// Originals come first, unchanged; synthetic rows are appended class by class.
pub fn smote(x: &[Vec<f64>], y: &[usize], k_neighbors: usize, rng: &mut impl Rng) -> Result<(Vec<Vec<f64>>, Vec<usize>, ResampleReport)> {
    if x.len() != y.len() {
        return Err(ClassicalError::LengthMismatch(x.len(), y.len()));
    }
    if k_neighbors == 0 {
        return Err(ClassicalError::Invalid("k_neighbors must be >= 1".into()));
    }
    if let Some(&bad) = y.iter().find(|&&c| c >= NUM_CLASSES) {
        return Err(ClassicalError::Invalid(format!("label code {bad} out of range")));
    }
    let mut members: Vec<Vec<usize>> = vec![Vec::new(); NUM_CLASSES];
    for (i, &c) in y.iter().enumerate() {
        members[c].push(i);
    }
    let mut before = [0; NUM_CLASSES];
    for c in 0..NUM_CLASSES {
        before[c] = members[c].len();
    }
    let target = before.iter().copied().max().unwrap_or(0);
    let (mut xs, mut ys) = (x.to_vec(), y.to_vec());
    let mut synthetic = Vec::new();
    for c in 0..NUM_CLASSES {
        let rows = &members[c];
        let need = if rows.is_empty() { 0 } else { target - rows.len() };
        if need == 0 {
            continue;
        }
        if rows.len() < 2 {
            return Err(ClassicalError::SingleRow { class: c });
        }
        let k = k_neighbors.min(rows.len() - 1);
        // nearest same-class neighbours of every member, ties by index
        let neighbours: Vec<Vec<usize>> = rows
            .iter()
            .map(|&i| {
                let mut others: Vec<(f64, usize)> = rows.iter().filter(|&&j| j != i).map(|&j| (sq_dist(&x[i], &x[j]), j)).collect();
                others.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
                others.into_iter().take(k).map(|(_, j)| j).collect()
            })
            .collect();
        for _ in 0..need {
            let pi = rng.gen_range(0..rows.len());
            let parent = rows[pi];
            let neighbor = neighbours[pi][rng.gen_range(0..k)];
            let u: f64 = rng.gen();
            xs.push(x[parent].iter().zip(&x[neighbor]).map(|(a, b)| a + u * (b - a)).collect());
            ys.push(c);
            synthetic.push(SyntheticRow { class: c, parent, neighbor, u });
        }
    }
    let mut after = [0; NUM_CLASSES];
    for &c in &ys {
        after[c] += 1;
    }
    Ok((xs, ys, ResampleReport { before, after, synthetic }))
}

/// `exp(-gamma * |x - y|^2)`.
pub fn rbf_kernel(x: &[f64], y: &[f64], gamma: f64) -> Result<f64> {
    if x.len() != y.len() {
        return Err(ClassicalError::LengthMismatch(x.len(), y.len()));
    }
    Ok((-gamma * sq_dist(x, y)).exp())
}

/// Dense symmetric Gram matrix, row-major `[n, n]`.
pub fn gram_matrix(x: &[Vec<f64>], gamma: f64) -> Vec<f64> {
    let n = x.len();
    let mut k = vec![0.0; n * n];
    for i in 0..n {
        k[i * n + i] = 1.0;
        for j in 0..i {
            let v = (-gamma * sq_dist(&x[i], &x[j])).exp();
            k[i * n + j] = v;
            k[j * n + i] = v;
        }
    }
    k
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SmoParams {
    pub c: f64,
    pub tol: f64,
    /// Upper bound on full sweeps over the training rows.
    pub max_passes: usize,
}

impl Default for SmoParams {
    fn default() -> Self {
        Self {
            c: 1.0,
            tol: 1e-3,
            max_passes: 1000,
        }
    }
}

/// A trained binary machine: `f(x) = sum_i coef_i k(sv_i, x) + bias`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BinarySvm {
    pub support: Vec<Vec<f64>>,
    /// `alpha_i * y_i` for each support vector.
    pub coef: Vec<f64>,
    pub bias: f64,
    pub gamma: f64,
}

impl BinarySvm {
    pub fn decision(&self, x: &[f64]) -> f64 {
        self.support
            .iter()
            .zip(&self.coef)
            .map(|(sv, c)| c * (-self.gamma * sq_dist(sv, x)).exp())
            .sum::<f64>()
            + self.bias
    }
}

/// Full dual solution, kept for diagnostics and oracles.
#[derive(Clone, Debug, PartialEq)]
pub struct BinaryFit {
    pub machine: BinarySvm,
    pub alpha: Vec<f64>,
    pub bias: f64,
    pub sweeps: usize,
    pub converged: bool,
    /// Rows violating the KKT conditions (at `tol`) on the final solution.
    pub kkt_violations: usize,
}

/// `sum(alpha) - 1/2 sum_ij alpha_i alpha_j y_i y_j K_ij`.
pub fn dual_objective(alpha: &[f64], y: &[f64], gram: &[f64]) -> f64 {
    let n = alpha.len();
    let mut quad = 0.0;
    for i in 0..n {
        for j in 0..n {
            quad += alpha[i] * alpha[j] * y[i] * y[j] * gram[i * n + j];
        }
    }
    alpha.iter().sum::<f64>() - 0.5 * quad
}

struct Smo<'a> {
    y: &'a [f64],
    k: &'a [f64],
    n: usize,
    c: f64,
    tol: f64,
    alpha: Vec<f64>,
    /// `f(x_i) - y_i` without the bias term. Pair selection and the
    /// optimality test only ever compare these, so no bias is carried
    /// while optimizing.
    f: Vec<f64>,
}

/// Extremes of `f` over the two index sets that can still move.
struct Extremes {
    /// `min f` over rows whose multiplier may move "up" (`I_up`).
    b_up: f64,
    i_up: usize,
    /// `max f` over rows that may move "down" (`I_low`).
    b_low: f64,
    i_low: usize,
}

impl Smo<'_> {
    fn in_up(&self, i: usize) -> bool {
        (self.y[i] > 0.0 && self.alpha[i] < self.c) || (self.y[i] < 0.0 && self.alpha[i] > 0.0)
    }

    fn in_low(&self, i: usize) -> bool {
        (self.y[i] > 0.0 && self.alpha[i] > 0.0) || (self.y[i] < 0.0 && self.alpha[i] < self.c)
    }

    fn extremes(&self) -> Extremes {
        let mut e = Extremes {
            b_up: f64::INFINITY,
            i_up: 0,
            b_low: f64::NEG_INFINITY,
            i_low: 0,
        };
        for i in 0..self.n {
            if self.in_up(i) && self.f[i] < e.b_up {
                e.b_up = self.f[i];
                e.i_up = i;
            }
            if self.in_low(i) && self.f[i] > e.b_low {
                e.b_low = self.f[i];
                e.i_low = i;
            }
        }
        e
    }

    fn optimal(&self, e: &Extremes) -> bool {
        e.b_low <= e.b_up + 2.0 * self.tol
    }

    /// Bias placing every row within `tol` of its KKT condition once
    /// `optimal` holds.
    fn bias(&self, e: &Extremes) -> f64 {
        match (e.b_up.is_finite(), e.b_low.is_finite()) {
            (true, true) => -0.5 * (e.b_up + e.b_low),
            (true, false) => -e.b_up,
            (false, true) => -e.b_low,
            (false, false) => 0.0,
        }
    }

    /// KKT test with an explicit bias: `alpha < C` needs `y f(x) >= 1 - tol`,
    /// `alpha > 0` needs `y f(x) <= 1 + tol`.
    fn violates(&self, i: usize, b: f64) -> bool {
        let r = self.y[i] * (self.f[i] + b);
        (r < -self.tol && self.alpha[i] < self.c) || (r > self.tol && self.alpha[i] > 0.0)
    }

    fn kk(&self, i: usize, j: usize) -> f64 {
        self.k[i * self.n + j]
    }

    fn take_step(&mut self, i: usize, j: usize) -> bool {
        if i == j {
            return false;
        }
        let (yi, yj) = (self.y[i], self.y[j]);
        let (ai, aj) = (self.alpha[i], self.alpha[j]);
        let (ei, ej) = (self.f[i], self.f[j]);
        let (lo, hi) = if yi != yj {
            ((aj - ai).max(0.0), (self.c + aj - ai).min(self.c))
        } else {
            ((ai + aj - self.c).max(0.0), (ai + aj).min(self.c))
        };
        if hi - lo < 1e-14 {
            return false;
        }
        let eta = self.kk(i, i) + self.kk(j, j) - 2.0 * self.kk(i, j);
        let mut aj_new = if eta > 1e-12 {
            (aj + yj * (ei - ej) / eta).clamp(lo, hi)
        } else {
            // flat direction: move to whichever end has the larger dual value
            let obj = |a: f64| {
                let d = a - aj;
                yj * d * (ei - ej) - 0.5 * eta * d * d
            };
            if obj(lo) > obj(hi) + 1e-12 {
                lo
            } else if obj(hi) > obj(lo) + 1e-12 {
                hi
            } else {
                aj
            }
        };
        if aj_new < 1e-12 {
            aj_new = 0.0;
        } else if aj_new > self.c - 1e-12 {
            aj_new = self.c;
        }
        if (aj_new - aj).abs() < 1e-12 * (aj_new + aj + 1e-12) {
            return false;
        }
        let mut ai_new = ai + yi * yj * (aj - aj_new);
        if ai_new.abs() < 1e-12 {
            ai_new = 0.0;
        } else if (ai_new - self.c).abs() < 1e-12 {
            ai_new = self.c;
        }
        let (di, dj) = (yi * (ai_new - ai), yj * (aj_new - aj));
        for t in 0..self.n {
            self.f[t] += di * self.k[i * self.n + t] + dj * self.k[j * self.n + t];
        }
        self.alpha[i] = ai_new;
        self.alpha[j] = aj_new;
        true
    }

    /// Partner for a violating `i`: the extreme row of the opposite set,
    /// i.e. the largest `|E_i - E_j|` among rows that make a violating pair.
    fn partner(&self, i: usize, e: &Extremes) -> Option<usize> {
        let gap = 2.0 * self.tol;
        if self.in_up(i) && self.f[i] < e.b_low - gap {
            Some(e.i_low)
        } else if self.in_low(i) && self.f[i] > e.b_up + gap {
            Some(e.i_up)
        } else {
            None
        }
    }

    /// Recomputes `f` exactly; the incremental updates drift slowly.
    fn refresh(&mut self) {
        self.f = (0..self.n)
            .map(|t| (0..self.n).map(|s| self.alpha[s] * self.y[s] * self.k[s * self.n + t]).sum::<f64>() - self.y[t])
            .collect();
    }
}

/// SMO on a precomputed Gram matrix; `y` entries are ±1.
///
/// The outer loop visits rows in order and stops at each one that violates
/// optimality; its partner is the row with the largest `|E_i - E_j|` among
/// those forming a violating pair with it. Optimality is judged without a
/// bias (`b_low <= b_up + 2 tol`), and the bias is set once at the end.
pub fn train_binary_svm_gram(x: &[Vec<f64>], y: &[f64], gram: &[f64], gamma: f64, p: &SmoParams) -> Result<BinaryFit> {
    let n = x.len();
    if y.len() != n {
        return Err(ClassicalError::LengthMismatch(n, y.len()));
    }
    if gram.len() != n * n {
        return Err(ClassicalError::LengthMismatch(gram.len(), n * n));
    }
    if y.iter().any(|&v| v != 1.0 && v != -1.0) {
        return Err(ClassicalError::Invalid("binary labels must be -1 or +1".into()));
    }
    if !(y.contains(&1.0) && y.contains(&-1.0)) {
        return Err(ClassicalError::SingleClass);
    }
    if !(p.c > 0.0) || !(p.tol > 0.0) {
        return Err(ClassicalError::Invalid("C and tol must be positive".into()));
    }
    let mut smo = Smo {
        y,
        k: gram,
        n,
        c: p.c,
        tol: p.tol,
        alpha: vec![0.0; n],
        f: y.iter().map(|v| -v).collect(),
    };
    let mut sweeps = 0;
    let mut converged = false;
    'outer: while sweeps < p.max_passes {
        sweeps += 1;
        let mut changed = 0;
        for i in 0..n {
            let e = smo.extremes();
            if smo.optimal(&e) {
                smo.refresh();
                if smo.optimal(&smo.extremes()) {
                    converged = true;
                    break 'outer;
                }
                continue;
            }
            if let Some(j) = smo.partner(i, &e) {
                if smo.take_step(i, j) {
                    changed += 1;
                }
            }
        }
        if changed == 0 {
            // no single row made progress; the most violating pair always can
            let e = smo.extremes();
            if !smo.take_step(e.i_up, e.i_low) {
                break;
            }
        }
    }
    smo.refresh();
    let e = smo.extremes();
    converged = converged || smo.optimal(&e);
    let b = smo.bias(&e);
    let kkt_violations = (0..n).filter(|&i| smo.violates(i, b)).count();
    if !converged {
        log::warn!("SMO stopped after {sweeps} sweeps with {kkt_violations} KKT violations");
    }
    let sv: Vec<usize> = (0..n).filter(|&i| smo.alpha[i] > 0.0).collect();
    let machine = BinarySvm {
        support: sv.iter().map(|&i| x[i].clone()).collect(),
        coef: sv.iter().map(|&i| smo.alpha[i] * y[i]).collect(),
        bias: b,
        gamma,
    };
    Ok(BinaryFit {
        machine,
        bias: b,
        alpha: smo.alpha,
        sweeps,
        converged,
        kkt_violations,
    })
}

pub fn train_binary_svm(x: &[Vec<f64>], y: &[f64], c: f64, gamma: f64, tol: f64, max_passes: usize) -> Result<BinaryFit> {
    if let Some(r) = x.iter().find(|r| r.len() != x[0].len()) {
        return Err(ClassicalError::LengthMismatch(r.len(), x[0].len()));
    }
    let gram = gram_matrix(x, gamma);
    train_binary_svm_gram(x, y, &gram, gamma, &SmoParams { c, tol, max_passes })
}

/// Scale heuristic `1 / (d * var(X))` over every entry of the design matrix.
pub fn scale_gamma(x: &[Vec<f64>]) -> f64 {
    let d = x.first().map_or(1, Vec::len).max(1);
    let n = (x.len() * d) as f64;
    let mean = x.iter().flatten().sum::<f64>() / n;
    let var = x.iter().flatten().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    if var > 0.0 {
        1.0 / (d as f64 * var)
    } else {
        1.0
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OvrSvmModel {
    /// One machine per class; `None` when the class never appeared in training.
    pub machines: Vec<Option<BinarySvm>>,
    pub gamma: f64,
    pub c: f64,
}

impl OvrSvmModel {
    pub fn decisions(&self, x: &[f64]) -> Vec<f64> {
        self.machines
            .iter()
            .map(|m| m.as_ref().map_or(f64::NEG_INFINITY, |m| m.decision(x)))
            .collect()
    }
}

/// Arg-max of the per-class decision values, lowest class index on ties.
pub fn ovr_predict(m: &OvrSvmModel, x: &[f64]) -> Result<usize> {
    if m.machines.iter().all(Option::is_none) {
        return Err(ClassicalError::Unfitted);
    }
    let d = m.decisions(x);
    let mut best = 0;
    for (c, &v) in d.iter().enumerate() {
        if v > d[best] {
            best = c;
        }
    }
    Ok(best)
}

#[derive(Clone, Debug, PartialEq)]
pub struct OvrFit {
    pub model: OvrSvmModel,
    pub converged: Vec<bool>,
    pub kkt_violations: Vec<usize>,
}

/// One machine per class present in `y`. Rows are put in a canonical order
/// first, so the result does not depend on how the training rows are listed.
pub fn train_ovr(x: &[Vec<f64>], y: &[usize], gamma: f64, p: &SmoParams) -> Result<OvrFit> {
    if x.len() != y.len() {
        return Err(ClassicalError::LengthMismatch(x.len(), y.len()));
    }
    let mut order: Vec<usize> = (0..x.len()).collect();
    order.sort_by(|&a, &b| {
        x[a].iter()
            .zip(&x[b])
            .map(|(u, v)| u.total_cmp(v))
            .find(|o| o.is_ne())
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(y[a].cmp(&y[b]))
    });
    let xs: Vec<Vec<f64>> = order.iter().map(|&i| x[i].clone()).collect();
    let ys: Vec<usize> = order.iter().map(|&i| y[i]).collect();
    let gram = gram_matrix(&xs, gamma);
    let fits: Vec<Option<Result<BinaryFit>>> = std::thread::scope(|s| {
        let handles: Vec<_> = (0..NUM_CLASSES)
            .map(|c| {
                let (xs, ys, gram) = (&xs, &ys, &gram);
                s.spawn(move || {
                    let yc: Vec<f64> = ys.iter().map(|&l| if l == c { 1.0 } else { -1.0 }).collect();
                    if !ys.contains(&c) {
                        return None;
                    }
                    Some(train_binary_svm_gram(xs, &yc, gram, gamma, p))
                })
            })
            .collect();
        handles.into_iter().map(|h| h.join().expect("svm worker panicked")).collect()
    });
    let mut machines = Vec::with_capacity(NUM_CLASSES);
    let (mut converged, mut kkt_violations) = (Vec::new(), Vec::new());
    for f in fits {
        match f.transpose()? {
            Some(fit) => {
                converged.push(fit.converged);
                kkt_violations.push(fit.kkt_violations);
                machines.push(Some(fit.machine));
            }
            None => {
                converged.push(true);
                kkt_violations.push(0);
                machines.push(None);
            }
        }
    }
    Ok(OvrFit {
        model: OvrSvmModel { machines, gamma, c: p.c },
        converged,
        kkt_violations,
    })
}

/// RBF width: a fixed value or `"scale"`, i.e. `1 / (d * var(X))`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Gamma {
    Fixed(f64),
    Rule(GammaRule),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GammaRule {
    Scale,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SvmConfig {
    /// Frames sampled per view.
    pub frames: usize,
    pub c: f64,
    pub gamma: Gamma,
    pub tol: f64,
    pub max_passes: usize,
    pub smote: bool,
    pub smote_k: usize,
}

impl Default for SvmConfig {
    fn default() -> Self {
        Self {
            frames: 16,
            c: 1.0,
            gamma: Gamma::Rule(GammaRule::Scale),
            tol: 1e-3,
            max_passes: 1000,
            smote: true,
            smote_k: 5,
        }
    }
}

impl SvmConfig {
    pub fn validate(&self) -> Result<()> {
        if self.frames == 0 || self.smote_k == 0 || self.max_passes == 0 {
            return Err(ClassicalError::Invalid("frames, smote_k and max_passes must be >= 1".into()));
        }
        if !(self.c > 0.0) || !(self.tol > 0.0) || matches!(self.gamma, Gamma::Fixed(g) if !(g > 0.0)) {
            return Err(ClassicalError::Invalid("C, tol and gamma must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SvmFitReport {
    pub resample: Option<ResampleReport>,
    pub gamma: f64,
    pub converged: Vec<bool>,
    pub kkt_violations: Vec<usize>,
}

/// Design matrix for `samples` with seeded frame sampling.
pub fn design_matrix(samples: &[NormalizedSample], n_views: usize, frames: usize, seed: u64) -> Result<Vec<Vec<f64>>> {
    let mut rng = rng_stream(seed, streams::SAMPLING);
    samples.iter().map(|s| flatten_sample(s, n_views, frames, &mut rng)).collect()
}

/// Sampling, flattening, optional SMOTE and one-vs-rest training on
/// already normalized samples.
pub fn fit_svm(train: &[NormalizedSample], n_views: usize, cfg: &SvmConfig, seed: u64) -> Result<(OvrSvmModel, SvmFitReport)> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(ClassicalError::Invalid("training set is empty".into()));
    }
    let x = design_matrix(train, n_views, cfg.frames, seed)?;
    let y: Vec<usize> = train.iter().map(|s| s.label.code()).collect();
    let (x, y, resample) = if cfg.smote {
        // the sampling stream is already spent on frames; SMOTE gets its own
        let mut rng = rng_stream(seed ^ 0x5_3d07e, streams::SAMPLING);
        let (x, y, r) = smote(&x, &y, cfg.smote_k, &mut rng)?;
        (x, y, Some(r))
    } else {
        (x, y, None)
    };
    let gamma = match cfg.gamma {
        Gamma::Fixed(g) => g,
        Gamma::Rule(GammaRule::Scale) => scale_gamma(&x),
    };
    let params = SmoParams {
        c: cfg.c,
        tol: cfg.tol,
        max_passes: cfg.max_passes,
    };
    let fit = train_ovr(&x, &y, gamma, &params)?;
    let report = SvmFitReport {
        resample,
        gamma,
        converged: fit.converged,
        kkt_violations: fit.kkt_violations,
    };
    Ok((fit.model, report))
}

pub fn predict_svm(model: &OvrSvmModel, samples: &[NormalizedSample], n_views: usize, frames: usize, seed: u64) -> Result<Vec<usize>> {
    design_matrix(samples, n_views, frames, seed)?
        .iter()
        .map(|row| ovr_predict(model, row))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_synthetic, GenConfig, Normalizer};
    use proptest::prelude::*;
    use rand::seq::SliceRandom;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn seq(t: usize, d: usize) -> Tensor {
        Tensor::new(&[t, d], (0..t * d).map(|v| v as f64).collect()).unwrap()
    }

    #[test]
    fn full_length_sample_is_identity() {
        let s = seq(5, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert_eq!(random_frame_sample(&s, 5, &mut rng).unwrap(), s.data());
    }

    #[test]
    fn single_frame_has_width_d() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert_eq!(random_frame_sample(&seq(7, 4), 1, &mut rng).unwrap().len(), 4);
    }

    #[test]
    fn frame_sampling_is_seeded() {
        let run = || {
            let mut rng = ChaCha8Rng::seed_from_u64(42);
            (sample_frame_indices(10, 4, &mut rng).unwrap(), random_frame_sample(&seq(10, 3), 4, &mut rng).unwrap())
        };
        let (a, b) = (run(), run());
        assert_eq!(a.0, b.0);
        assert_eq!(a.1.iter().map(|v| v.to_bits()).collect::<Vec<_>>(), b.1.iter().map(|v| v.to_bits()).collect::<Vec<_>>());
        assert_eq!(a.0.len(), 4);
        assert!(a.0.windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn short_sequences_sample_with_replacement() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let idx = sample_frame_indices(3, 16, &mut rng).unwrap();
        assert_eq!(idx.len(), 16);
        assert!(idx.windows(2).all(|w| w[0] <= w[1]) && idx.iter().all(|&i| i < 3));
        assert!(matches!(sample_frame_indices(0, 4, &mut rng), Err(ClassicalError::EmptySequence)));
    }

    #[test]
    fn views_share_frame_indices() {
        let front = seq(9, 2);
        let left = Tensor::new(&[9, 2], front.data().iter().map(|v| v + 1000.0).collect()).unwrap();
        let s = NormalizedSample {
            label: crate::data::ManeuverLabel::RT,
            views: vec![front, left],
        };
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let row = flatten_sample(&s, 2, 4, &mut rng).unwrap();
        let (a, b) = row.split_at(8);
        assert!(a.iter().zip(b).all(|(x, y)| y - x == 1000.0));
    }

    #[test]
    fn smote_leaves_balanced_input_alone() {
        let x = vec![vec![0.0], vec![1.0], vec![2.0], vec![3.0]];
        let y = vec![0, 0, 1, 1];
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (xs, ys, r) = smote(&x, &y, 5, &mut rng).unwrap();
        assert_eq!((xs, ys), (x, y));
        assert!(r.synthetic.is_empty());
    }

    #[test]
    fn smote_two_point_minority_lies_on_segment() {
        let x = vec![vec![0.0, 0.0], vec![1.0, 1.0], vec![5.0, 5.0], vec![6.0, 5.0], vec![7.0, 5.0]];
        let y = vec![1, 1, 0, 0, 0];
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let (xs, ys, r) = smote(&x, &y, 5, &mut rng).unwrap();
        assert_eq!(r.synthetic.len(), 1);
        let p = &xs[5];
        assert_eq!(ys[5], 1);
        assert_eq!(p[0], p[1]);
        assert!((0.0..=1.0).contains(&p[0]));
    }

    #[test]
    fn smote_ten_vs_four() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x: Vec<Vec<f64>> = (0..14).map(|_| (0..3).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect();
        let y: Vec<usize> = (0..14).map(|i| if i < 10 { 2 } else { 4 }).collect();
        let (xs, ys, r) = smote(&x, &y, 5, &mut rng).unwrap();
        assert_eq!(r.before[2], 10);
        assert_eq!(r.before[4], 4);
        assert_eq!((r.after[2], r.after[4]), (10, 10));
        assert_eq!(r.synthetic.len(), 6);
        assert_eq!(&xs[..14], &x[..]);
        for (row, s) in xs[14..].iter().zip(&r.synthetic) {
            assert_eq!(ys[14], 4);
            assert!(y[s.parent] == 4 && y[s.neighbor] == 4 && s.parent != s.neighbor);
            for d in 0..3 {
                let resid = row[d] - x[s.parent][d] - s.u * (x[s.neighbor][d] - x[s.parent][d]);
                assert!(resid.abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn smote_rejects_singleton_minority() {
        let x = vec![vec![0.0], vec![1.0], vec![2.0]];
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(matches!(smote(&x, &[0, 0, 3], 5, &mut rng), Err(ClassicalError::SingleRow { class: 3 })));
    }

    #[test]
    fn smote_neighbours_are_nearest() {
        // with k = 1 the only admissible partner is the closest row
        let x = vec![vec![0.0], vec![0.1], vec![5.0], vec![9.0], vec![9.5], vec![9.7], vec![9.8], vec![9.9]];
        let y = vec![1, 1, 1, 0, 0, 0, 0, 0];
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let (_, _, r) = smote(&x, &y, 1, &mut rng).unwrap();
        for s in &r.synthetic {
            let expect = match s.parent {
                0 => 1,
                1 => 0,
                _ => 1,
            };
            assert_eq!(s.neighbor, expect);
        }
    }

    proptest! {
        #[test]
        fn smote_balances_and_reconstructs(
            counts in prop::collection::vec(2usize..9, 2..6),
            seed in 0u64..1000,
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut x = Vec::new();
            let mut y = Vec::new();
            for (c, &n) in counts.iter().enumerate() {
                for _ in 0..n {
                    x.push((0..4).map(|_| rng.gen_range(-3.0..3.0)).collect::<Vec<f64>>());
                    y.push(c);
                }
            }
            let (xs, ys, r) = smote(&x, &y, 5, &mut rng).unwrap();
            let max = *counts.iter().max().unwrap();
            for (c, &n) in counts.iter().enumerate() {
                prop_assert_eq!(r.after[c], max);
                prop_assert_eq!(r.before[c], n);
            }
            prop_assert_eq!(&xs[..x.len()], &x[..]);
            for (row, s) in xs[x.len()..].iter().zip(&r.synthetic) {
                prop_assert!((0.0..1.0).contains(&s.u));
                for d in 0..4 {
                    let resid = row[d] - x[s.parent][d] - s.u * (x[s.neighbor][d] - x[s.parent][d]);
                    prop_assert!(resid.abs() <= 1e-12);
                    let (lo, hi) = (x[s.parent][d].min(x[s.neighbor][d]), x[s.parent][d].max(x[s.neighbor][d]));
                    prop_assert!(row[d] >= lo - 1e-12 && row[d] <= hi + 1e-12);
                }
            }
            // class means stay inside the per-coordinate hull of the originals
            for c in 0..counts.len() {
                for d in 0..4 {
                    let orig: Vec<f64> = x.iter().zip(&y).filter(|(_, &l)| l == c).map(|(r, _)| r[d]).collect();
                    let all: Vec<f64> = xs.iter().zip(&ys).filter(|(_, &l)| l == c).map(|(r, _)| r[d]).collect();
                    let mean = all.iter().sum::<f64>() / all.len() as f64;
                    let lo = orig.iter().cloned().fold(f64::MAX, f64::min);
                    let hi = orig.iter().cloned().fold(f64::MIN, f64::max);
                    prop_assert!(mean >= lo - 1e-12 && mean <= hi + 1e-12);
                }
            }
        }

        #[test]
        fn rbf_is_symmetric_and_bounded(
            a in prop::collection::vec(-5.0f64..5.0, 3),
            b in prop::collection::vec(-5.0f64..5.0, 3),
            g in 0.0f64..3.0,
        ) {
            let k = rbf_kernel(&a, &b, g).unwrap();
            prop_assert_eq!(k, rbf_kernel(&b, &a, g).unwrap());
            prop_assert!((0.0..=1.0).contains(&k));
            prop_assert_eq!(rbf_kernel(&a, &a, g).unwrap(), 1.0);
        }
    }

    #[test]
    fn rbf_examples() {
        assert_eq!(rbf_kernel(&[0.3, 9.0], &[-4.0, 2.0], 0.0).unwrap(), 1.0);
        assert!((rbf_kernel(&[0.0, 0.0], &[1.0, 1.0], 0.5).unwrap() - (-1.0f64).exp()).abs() < 1e-15);
        assert!((rbf_kernel(&[0.0, 0.0], &[1.0, 1.0], 0.5).unwrap() - 0.367879).abs() < 1e-6);
        assert!(matches!(rbf_kernel(&[1.0], &[1.0, 2.0], 1.0), Err(ClassicalError::LengthMismatch(1, 2))));
    }

    /// KKT conditions on the exact decision values.
    fn assert_kkt(fit: &BinaryFit, x: &[Vec<f64>], y: &[f64], c: f64, tol: f64) {
        for i in 0..x.len() {
            let yf = y[i] * fit.machine.decision(&x[i]);
            let a = fit.alpha[i];
            if a == 0.0 {
                assert!(yf >= 1.0 - tol - 1e-9, "row {i}: alpha 0, y f = {yf}");
            } else if a >= c {
                assert!(yf <= 1.0 + tol + 1e-9, "row {i}: alpha C, y f = {yf}");
            } else {
                assert!((yf - 1.0).abs() <= tol + 1e-9, "row {i}: free alpha {a}, y f = {yf}");
            }
            assert!((0.0..=c).contains(&a));
        }
        let balance: f64 = fit.alpha.iter().zip(y).map(|(a, y)| a * y).sum();
        assert!(balance.abs() <= 1e-9, "sum alpha y = {balance}");
    }

    #[test]
    fn separable_pair() {
        let x = vec![vec![-1.0], vec![1.0]];
        let y = vec![-1.0, 1.0];
        let fit = train_binary_svm(&x, &y, 1e3, 0.5, 1e-6, 100).unwrap();
        assert!(fit.converged);
        assert!(fit.machine.decision(&[-1.0]) < 0.0 && fit.machine.decision(&[1.0]) > 0.0);
        assert_kkt(&fit, &x, &y, 1e3, 1e-6);
    }

    #[test]
    fn xor_is_learned_exactly() {
        let x = vec![vec![0.0, 0.0], vec![1.0, 1.0], vec![0.0, 1.0], vec![1.0, 0.0]];
        let y = vec![-1.0, -1.0, 1.0, 1.0];
        let fit = train_binary_svm(&x, &y, 10.0, 1.0, 1e-3, 100).unwrap();
        for (r, &l) in x.iter().zip(&y) {
            assert_eq!(fit.machine.decision(r).signum(), l);
        }
        assert_kkt(&fit, &x, &y, 10.0, 1e-3);
    }

    #[test]
    fn single_class_is_rejected() {
        let x = vec![vec![0.0], vec![1.0]];
        assert!(matches!(train_binary_svm(&x, &[1.0, 1.0], 1.0, 1.0, 1e-3, 10), Err(ClassicalError::SingleClass)));
    }

    /// Maximizes the dual of a 3-point problem with labels (+, +, -) by a
    /// zooming grid over (a1, a2), with a3 = a1 + a2 forced by the equality.
    fn brute_force_dual(gram: &[f64], y: &[f64], c: f64) -> f64 {
        let (mut lo1, mut hi1, mut lo2, mut hi2) = (0.0, c, 0.0, c);
        let mut best = (f64::MIN, 0.0, 0.0);
        for _ in 0..12 {
            let steps = 200;
            for i in 0..=steps {
                for j in 0..=steps {
                    let a1 = lo1 + (hi1 - lo1) * i as f64 / steps as f64;
                    let a2 = lo2 + (hi2 - lo2) * j as f64 / steps as f64;
                    let a3 = a1 + a2;
                    if a3 > c {
                        continue;
                    }
                    let w = dual_objective(&[a1, a2, a3], y, gram);
                    if w > best.0 {
                        best = (w, a1, a2);
                    }
                }
            }
            let (w1, w2) = ((hi1 - lo1) / 20.0, (hi2 - lo2) / 20.0);
            lo1 = (best.1 - w1).max(0.0);
            hi1 = (best.1 + w1).min(c);
            lo2 = (best.2 - w2).max(0.0);
            hi2 = (best.2 + w2).min(c);
        }
        best.0
    }

    #[test]
    fn three_point_dual_matches_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for c in [0.5, 1.0, 10.0] {
            for _ in 0..4 {
                let x: Vec<Vec<f64>> = (0..3).map(|_| vec![rng.gen_range(-1.5..1.5), rng.gen_range(-1.5..1.5)]).collect();
                let y = vec![1.0, 1.0, -1.0];
                let gamma = 0.7;
                let gram = gram_matrix(&x, gamma);
                let fit = train_binary_svm(&x, &y, c, gamma, 1e-9, 10_000).unwrap();
                let w = dual_objective(&fit.alpha, &y, &gram);
                let oracle = brute_force_dual(&gram, &y, c);
                assert!((w - oracle).abs() <= 1e-6, "C={c}: smo {w} vs grid {oracle}");
                assert_kkt(&fit, &x, &y, c, 1e-9);
            }
        }
    }

    fn blobs(n: usize, seed: u64) -> (Vec<Vec<f64>>, Vec<usize>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let centers = [[0.0, 0.0], [3.0, 0.0], [0.0, 3.0], [3.0, 3.0]];
        let mut x = Vec::new();
        let mut y = Vec::new();
        for i in 0..n {
            let c = i % 4;
            x.push(vec![centers[c][0] + rng.gen_range(-1.4..1.4), centers[c][1] + rng.gen_range(-1.4..1.4)]);
            y.push([0, 1, 3, 5][c]);
        }
        (x, y)
    }

    #[test]
    fn every_ovr_machine_satisfies_kkt() {
        let (x, y) = blobs(60, 1);
        let p = SmoParams { c: 2.0, ..SmoParams::default() };
        let fit = train_ovr(&x, &y, 0.5, &p).unwrap();
        assert!(fit.converged.iter().all(|&c| c));
        assert_eq!(fit.kkt_violations, vec![0; NUM_CLASSES]);
        assert!(fit.model.machines[2].is_none() && fit.model.machines[4].is_none());
        for c in [0, 1, 3, 5] {
            let yc: Vec<f64> = y.iter().map(|&l| if l == c { 1.0 } else { -1.0 }).collect();
            let gram = gram_matrix(&x, 0.5);
            let bf = train_binary_svm_gram(&x, &yc, &gram, 0.5, &p).unwrap();
            assert_kkt(&bf, &x, &yc, 2.0, 1e-3);
        }
    }

    #[test]
    fn ovr_predict_matches_hand_evaluation() {
        let (x, y) = blobs(40, 2);
        let m = train_ovr(&x, &y, 0.5, &SmoParams::default()).unwrap().model;
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..30 {
            let q = vec![rng.gen_range(-1.0..4.0), rng.gen_range(-1.0..4.0)];
            let mut best = (0, f64::NEG_INFINITY);
            for (c, mach) in m.machines.iter().enumerate() {
                let Some(mach) = mach else { continue };
                let f: f64 = mach
                    .support
                    .iter()
                    .zip(&mach.coef)
                    .map(|(sv, a)| a * rbf_kernel(sv, &q, m.gamma).unwrap())
                    .sum::<f64>()
                    + mach.bias;
                if f > best.1 {
                    best = (c, f);
                }
            }
            assert_eq!(ovr_predict(&m, &q).unwrap(), best.0);
        }
    }

    fn constant_machine(bias: f64) -> BinarySvm {
        BinarySvm {
            support: vec![],
            coef: vec![],
            bias,
            gamma: 1.0,
        }
    }

    #[test]
    fn ovr_tie_goes_to_lower_class() {
        let mut machines: Vec<Option<BinarySvm>> = (0..NUM_CLASSES).map(|_| Some(constant_machine(-1.0))).collect();
        machines[4] = Some(constant_machine(0.5));
        let mut m = OvrSvmModel { machines, gamma: 1.0, c: 1.0 };
        assert_eq!(ovr_predict(&m, &[0.0]).unwrap(), 4);
        m.machines[2] = Some(constant_machine(0.5));
        assert_eq!(ovr_predict(&m, &[0.0]).unwrap(), 2);
        let empty = OvrSvmModel { machines: vec![None; NUM_CLASSES], gamma: 1.0, c: 1.0 };
        assert!(matches!(ovr_predict(&empty, &[0.0]), Err(ClassicalError::Unfitted)));
    }

    #[test]
    fn ovr_ignores_training_order() {
        let (x, y) = blobs(48, 4);
        let (q, _) = blobs(40, 5);
        let base = train_ovr(&x, &y, 0.5, &SmoParams::default()).unwrap().model;
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for _ in 0..3 {
            let mut order: Vec<usize> = (0..x.len()).collect();
            order.shuffle(&mut rng);
            let xs: Vec<_> = order.iter().map(|&i| x[i].clone()).collect();
            let ys: Vec<_> = order.iter().map(|&i| y[i]).collect();
            let m = train_ovr(&xs, &ys, 0.5, &SmoParams::default()).unwrap().model;
            for r in &q {
                for (a, b) in base.decisions(r).iter().zip(m.decisions(r)) {
                    assert!(a == &b || (a - b).abs() <= 1e-8);
                }
                assert_eq!(ovr_predict(&base, r).unwrap(), ovr_predict(&m, r).unwrap());
            }
        }
    }

    #[test]
    fn gamma_parses_number_or_scale() {
        let c: SvmConfig = toml::from_str("gamma = \"scale\"").unwrap();
        assert_eq!(c.gamma, Gamma::Rule(GammaRule::Scale));
        let c: SvmConfig = toml::from_str("gamma = 0.25").unwrap();
        assert_eq!(c.gamma, Gamma::Fixed(0.25));
        assert!(toml::from_str::<SvmConfig>("gamma = \"auto\"").is_err());
        assert!(toml::to_string(&SvmConfig::default()).unwrap().contains("gamma = \"scale\""));
        assert!(SvmConfig { gamma: Gamma::Fixed(-1.0), ..SvmConfig::default() }.validate().is_err());
    }

    #[test]
    fn scale_gamma_heuristic() {
        let x = vec![vec![1.0, -1.0], vec![-1.0, 1.0]];
        // d = 2, var = 1
        assert_eq!(scale_gamma(&x), 0.5);
    }

    #[test]
    fn pipeline_beats_chance_on_synthetic_data() {
        let cfg = GenConfig {
            n_samples: 240,
            dim: 8,
            signal: 1.0,
            max_seconds: 10.0,
            ..GenConfig::default()
        };
        let (ds, _) = generate_synthetic(&cfg, 3).unwrap();
        let norm = Normalizer::fit(&ds).unwrap();
        let all = norm.apply_all(&ds).unwrap();
        let (train, test) = all.split_at(160);
        for views in [1, 3] {
            let svm = SvmConfig { frames: 4, ..SvmConfig::default() };
            let (m, rep) = fit_svm(train, views, &svm, 1).unwrap();
            let r = rep.resample.unwrap();
            assert!(r.after.iter().filter(|&&c| c > 0).all(|&c| c == *r.after.iter().max().unwrap()));
            let preds = predict_svm(&m, test, views, 4, 2).unwrap();
            let acc = preds.iter().zip(test).filter(|(p, s)| **p == s.label.code()).count() as f64 / test.len() as f64;
            assert!(acc > 0.5, "views {views}: acc {acc}");
            let again = fit_svm(train, views, &svm, 1).unwrap().0;
            assert_eq!(again, m);
        }
    }
}
