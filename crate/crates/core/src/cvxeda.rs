//! Convex decomposition of skin conductance into a phasic response driven by
//! a sparse non-negative sudomotor driver, a smooth tonic level and noise:
//!
//! ```text
//! min  ½‖Hp + Bλ + Cd − y‖² + α‖Hp‖₁ + γ/2‖λ‖²   s.t. p ≥ 0
//! ```
//!
//! `H` is the causal convolution with a sampled Bateman impulse response,
//! `B` a cubic B-spline basis and `C = [1, i/N]`. The tonic coefficients
//! `(λ, d)` enter as a ridge regression and are eliminated exactly for every
//! driver iterate, leaving a non-negative ℓ1 problem in `p` that is solved
//! with monotone accelerated proximal gradient and backtracking.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{validate_trace, DecomposedEda, EdaTrace, SignalError};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CvxedaError {
    #[error("invalid parameters: {0}")]
    BadParams(String),
    #[error("signal of {len} samples is too short: {reason}")]
    TooShort { len: usize, reason: String },
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error(transparent)]
    Signal(#[from] SignalError),
    #[error(
        "no convergence after {} iterations (residual {:.3e})",
        .0.solution.iterations,
        .0.solution.residual
    )]
    NoConvergence(Box<Unconverged>),
}

/// Best iterate found when the iteration budget ran out.
#[derive(Debug, Clone, PartialEq)]
pub struct Unconverged {
    pub solution: QpSolution,
    pub decomposition: Option<DecomposedEda>,
}

/// Biexponential impulse response `exp(-t/tau1) - exp(-t/tau0)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BatemanIrf {
    /// Fast time constant, seconds.
    pub tau0: f64,
    /// Slow time constant, seconds.
    pub tau1: f64,
    /// Truncation horizon, seconds.
    pub duration: f64,
}

impl Default for BatemanIrf {
    fn default() -> Self {
        Self {
            tau0: 0.7,
            tau1: 2.0,
            duration: 40.0,
        }
    }
}

impl BatemanIrf {
    pub fn validate(&self) -> Result<(), CvxedaError> {
        if !(self.tau0 > 0.0 && self.tau1 > self.tau0) {
            return Err(CvxedaError::BadParams(format!(
                "need tau1 > tau0 > 0, got tau0={} tau1={}",
                self.tau0, self.tau1
            )));
        }
        if !(self.duration >= 5.0 * self.tau1) {
            return Err(CvxedaError::BadParams(format!(
                "duration {} must cover at least 5*tau1 = {}",
                self.duration,
                5.0 * self.tau1
            )));
        }
        Ok(())
    }

    /// Continuous-time location of the response maximum.
    pub fn peak_time(&self) -> f64 {
        (self.tau1 / self.tau0).ln() * self.tau0 * self.tau1 / (self.tau1 - self.tau0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CvxedaConfig {
    /// ℓ1 weight on the phasic component (or on the driver, see below).
    pub alpha: f64,
    /// Ridge weight on the spline coefficients.
    pub gamma: f64,
    pub knot_spacing_s: f64,
    pub solver_tol: f64,
    pub max_iter: usize,
    /// Penalize `‖p‖₁` instead of `‖Hp‖₁`.
    pub penalize_driver: bool,
}

impl Default for CvxedaConfig {
    fn default() -> Self {
        Self {
            alpha: 8e-4,
            gamma: 1e-2,
            knot_spacing_s: 10.0,
            solver_tol: 1e-6,
            max_iter: 20_000,
            penalize_driver: false,
        }
    }
}

impl CvxedaConfig {
    pub fn validate(&self) -> Result<(), CvxedaError> {
        let ok = self.alpha > 0.0
            && self.gamma > 0.0
            && self.knot_spacing_s > 0.0
            && self.solver_tol > 0.0
            && self.max_iter >= 1;
        if ok {
            Ok(())
        } else {
            Err(CvxedaError::BadParams(format!("{self:?}")))
        }
    }
}

/// Samples the impulse response on `k/sampling_hz` for `kΔ <= duration`,
/// scaled to unit peak.
pub fn sample_irf(irf: &BatemanIrf, sampling_hz: f64) -> Result<Vec<f64>, CvxedaError> {
    irf.validate()?;
    if !(sampling_hz > 0.0) {
        return Err(CvxedaError::BadParams(format!(
            "sampling rate must be positive, got {sampling_hz}"
        )));
    }
    let dt = 1.0 / sampling_hz;
    let n = (irf.duration * sampling_hz + 1e-9).floor() as usize + 1;
    let mut h: Vec<f64> = (0..n)
        .map(|k| {
            let t = k as f64 * dt;
            (-t / irf.tau1).exp() - (-t / irf.tau0).exp()
        })
        .collect();
    let peak = h.iter().cloned().fold(0.0, f64::max);
    if !(peak > 0.0) {
        return Err(CvxedaError::BadParams(
            "impulse response vanishes on the sampling grid".into(),
        ));
    }
    h.iter_mut().for_each(|v| *v /= peak);
    Ok(h)
}

/// Lower-triangular Toeplitz convolution `r = H p` with a truncated kernel.
#[derive(Debug, Clone, PartialEq)]
pub struct PhasicOperator {
    kernel: Vec<f64>,
    n: usize,
}

pub fn build_phasic_operator(irf_samples: &[f64], n: usize) -> Result<PhasicOperator, CvxedaError> {
    if n < 2 {
        return Err(CvxedaError::TooShort {
            len: n,
            reason: "need at least 2 samples".into(),
        });
    }
    if irf_samples.is_empty() || irf_samples.iter().any(|v| !v.is_finite()) || irf_samples[0] < 0.0 {
        return Err(CvxedaError::BadParams(
            "kernel must be non-empty, finite and start non-negative".into(),
        ));
    }
    let k = irf_samples.len().min(n);
    Ok(PhasicOperator {
        kernel: irf_samples[..k].to_vec(),
        n,
    })
}

impl PhasicOperator {
    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn kernel(&self) -> &[f64] {
        &self.kernel
    }

    /// `(Hp)[i] = Σ_{k ≤ i} h[k] p[i−k]`.
    pub fn apply(&self, p: &[f64]) -> Vec<f64> {
        assert_eq!(p.len(), self.n, "driver length");
        let mut out = vec![0.0; self.n];
        for (j, &pj) in p.iter().enumerate() {
            if pj == 0.0 {
                continue;
            }
            let span = (self.n - j).min(self.kernel.len());
            for (o, h) in out[j..j + span].iter_mut().zip(&self.kernel[..span]) {
                *o += h * pj;
            }
        }
        out
    }

    /// `(Hᵀq)[j] = Σ_k h[k] q[j+k]`.
    pub fn apply_transpose(&self, q: &[f64]) -> Vec<f64> {
        assert_eq!(q.len(), self.n, "signal length");
        (0..self.n)
            .map(|j| {
                let span = (self.n - j).min(self.kernel.len());
                self.kernel[..span]
                    .iter()
                    .zip(&q[j..j + span])
                    .map(|(h, v)| h * v)
                    .sum()
            })
            .collect()
    }
}

/// Uniform cubic B-spline basis plus offset and linear-drift columns.
#[derive(Debug, Clone, PartialEq)]
pub struct TonicBasis {
    n: usize,
    num_splines: usize,
    /// Row-major `n × num_splines`.
    spline: Vec<f64>,
}

fn cubic_bspline(u: f64) -> f64 {
    if !(0.0..4.0).contains(&u) {
        0.0
    } else if u < 1.0 {
        u * u * u / 6.0
    } else if u < 2.0 {
        (-3.0 * u * u * u + 12.0 * u * u - 12.0 * u + 4.0) / 6.0
    } else if u < 3.0 {
        (3.0 * u * u * u - 24.0 * u * u + 60.0 * u - 44.0) / 6.0
    } else {
        let v = 4.0 - u;
        v * v * v / 6.0
    }
}

pub fn build_tonic_basis(n: usize, sampling_hz: f64, knot_spacing_s: f64) -> Result<TonicBasis, CvxedaError> {
    if !(sampling_hz > 0.0 && knot_spacing_s > 0.0) {
        return Err(CvxedaError::BadParams(format!(
            "sampling_hz={sampling_hz}, knot_spacing_s={knot_spacing_s}"
        )));
    }
    if (n as f64) / sampling_hz < 2.0 * knot_spacing_s || n < 2 {
        return Err(CvxedaError::TooShort {
            len: n,
            reason: format!("tonic basis needs at least {} s of signal", 2.0 * knot_spacing_s),
        });
    }
    let s = knot_spacing_s * sampling_hz;
    // Knots t_j = (j-3)s; every sample sees all four overlapping pieces.
    let num_splines = ((n - 1) as f64 / s).floor() as usize + 4;
    let mut spline = vec![0.0; n * num_splines];
    for i in 0..n {
        for j in 0..num_splines {
            let knot = (j as f64 - 3.0) * s;
            spline[i * num_splines + j] = cubic_bspline((i as f64 - knot) / s);
        }
    }
    Ok(TonicBasis {
        n,
        num_splines,
        spline,
    })
}

impl TonicBasis {
    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn num_splines(&self) -> usize {
        self.num_splines
    }

    pub fn spline_value(&self, row: usize, col: usize) -> f64 {
        self.spline[row * self.num_splines + col]
    }

    /// Columns of `C`: offset and `i/N` drift.
    pub fn drift_value(&self, row: usize, col: usize) -> f64 {
        match col {
            0 => 1.0,
            1 => row as f64 / self.n as f64,
            _ => panic!("drift column {col} out of range"),
        }
    }

    /// Number of coefficients in `[λ; d]`.
    pub fn num_coefs(&self) -> usize {
        self.num_splines + 2
    }

    /// `G z` with `G = [B C]`.
    pub fn apply(&self, z: &[f64]) -> Vec<f64> {
        let m = self.num_splines;
        (0..self.n)
            .map(|i| {
                let row = &self.spline[i * m..(i + 1) * m];
                row.iter().zip(&z[..m]).map(|(a, b)| a * b).sum::<f64>()
                    + z[m]
                    + z[m + 1] * i as f64 / self.n as f64
            })
            .collect()
    }

    /// `Gᵀ r`.
    pub fn apply_transpose(&self, r: &[f64]) -> Vec<f64> {
        let m = self.num_splines;
        let mut out = vec![0.0; m + 2];
        for (i, &ri) in r.iter().enumerate() {
            let row = &self.spline[i * m..(i + 1) * m];
            for (o, b) in out[..m].iter_mut().zip(row) {
                *o += b * ri;
            }
            out[m] += ri;
            out[m + 1] += ri * i as f64 / self.n as f64;
        }
        out
    }

    fn gram(&self) -> Vec<f64> {
        let m = self.num_coefs();
        let mut cols = vec![0.0; m];
        let mut g = vec![0.0; m * m];
        for i in 0..self.n {
            for (j, c) in cols.iter_mut().enumerate().take(self.num_splines) {
                *c = self.spline_value(i, j);
            }
            cols[self.num_splines] = 1.0;
            cols[self.num_splines + 1] = i as f64 / self.n as f64;
            for a in 0..m {
                if cols[a] == 0.0 {
                    continue;
                }
                for b in 0..m {
                    g[a * m + b] += cols[a] * cols[b];
                }
            }
        }
        g
    }
}

/// Dense Cholesky factor of a small symmetric positive definite matrix.
struct Cholesky {
    l: Vec<f64>,
    m: usize,
}

impl Cholesky {
    fn new(a: &[f64], m: usize) -> Result<Self, CvxedaError> {
        let mut l = vec![0.0; m * m];
        for i in 0..m {
            for j in 0..=i {
                let mut s = a[i * m + j];
                for k in 0..j {
                    s -= l[i * m + k] * l[j * m + k];
                }
                if i == j {
                    if !(s > 0.0) {
                        return Err(CvxedaError::BadParams(
                            "tonic normal equations are not positive definite".into(),
                        ));
                    }
                    l[i * m + i] = s.sqrt();
                } else {
                    l[i * m + j] = s / l[j * m + j];
                }
            }
        }
        Ok(Self { l, m })
    }

    fn solve(&self, b: &[f64]) -> Vec<f64> {
        let m = self.m;
        let mut x = b.to_vec();
        for i in 0..m {
            for k in 0..i {
                x[i] -= self.l[i * m + k] * x[k];
            }
            x[i] /= self.l[i * m + i];
        }
        for i in (0..m).rev() {
            for k in i + 1..m {
                x[i] -= self.l[k * m + i] * x[k];
            }
            x[i] /= self.l[i * m + i];
        }
        x
    }
}

/// Solver output. `objective_trace[k]` is the objective after iteration `k`
/// (entry 0 is the starting point).
#[derive(Debug, Clone, PartialEq)]
pub struct QpSolution {
    pub driver: Vec<f64>,
    pub spline_coef: Vec<f64>,
    pub drift_coef: [f64; 2],
    pub objective_trace: Vec<f64>,
    pub iterations: usize,
    pub residual: f64,
    pub converged: bool,
}

impl QpSolution {
    pub fn objective(&self) -> f64 {
        *self.objective_trace.last().expect("trace starts with the initial point")
    }
}

/// Reduced problem in the driver with the tonic part profiled out.
struct Reduced<'a> {
    y: &'a [f64],
    op: &'a PhasicOperator,
    basis: &'a TonicBasis,
    chol: Cholesky,
    gamma: f64,
    alpha: f64,
    /// Linear penalty weights: `Hᵀ1` or all ones.
    weights: Vec<f64>,
    penalize_driver: bool,
}

struct Eval {
    smooth: f64,
    objective: f64,
    /// `y − Hp − Gz`.
    residual: Vec<f64>,
    coefs: Vec<f64>,
}

impl<'a> Reduced<'a> {
    fn eval(&self, p: &[f64]) -> Eval {
        let phasic = self.op.apply(p);
        let r: Vec<f64> = self.y.iter().zip(&phasic).map(|(a, b)| a - b).collect();
        let coefs = self.chol.solve(&self.basis.apply_transpose(&r));
        let tonic = self.basis.apply(&coefs);
        let residual: Vec<f64> = r.iter().zip(&tonic).map(|(a, b)| a - b).collect();
        let ridge: f64 = coefs[..self.basis.num_splines()].iter().map(|v| v * v).sum();
        let smooth = 0.5 * residual.iter().map(|v| v * v).sum::<f64>() + 0.5 * self.gamma * ridge;
        let l1 = if self.penalize_driver {
            p.iter().map(|v| v.abs()).sum::<f64>()
        } else {
            phasic.iter().map(|v| v.abs()).sum::<f64>()
        };
        Eval {
            smooth,
            objective: smooth + self.alpha * l1,
            residual,
            coefs,
        }
    }

    fn gradient(&self, e: &Eval) -> Vec<f64> {
        self.op.apply_transpose(&e.residual).into_iter().map(|v| -v).collect()
    }

    fn prox(&self, v: &[f64], step: f64) -> Vec<f64> {
        v.iter()
            .zip(&self.weights)
            .map(|(x, w)| (x - step * self.alpha * w).max(0.0))
            .collect()
    }

    /// Largest eigenvalue of HᵀH by power iteration, an upper bound for the
    /// curvature of the smooth part.
    fn lipschitz_estimate(&self) -> f64 {
        let n = self.op.len();
        let mut v: Vec<f64> = (0..n).map(|i| 1.0 + 0.01 * (i % 7) as f64).collect();
        let mut lambda = 0.0;
        for _ in 0..50 {
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm == 0.0 {
                return 1.0;
            }
            v.iter_mut().for_each(|x| *x /= norm);
            let w = self.op.apply_transpose(&self.op.apply(&v));
            lambda = w.iter().zip(&v).map(|(a, b)| a * b).sum::<f64>();
            v = w;
        }
        lambda.max(1e-12)
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn inf_norm(a: &[f64]) -> f64 {
    a.iter().fold(0.0, |m, v| m.max(v.abs()))
}

/// Solves the decomposition QP for an already-anchored signal `y`.
pub fn solve_qp(
    y: &[f64],
    op: &PhasicOperator,
    basis: &TonicBasis,
    cfg: &CvxedaConfig,
) -> Result<QpSolution, CvxedaError> {
    cfg.validate()?;
    let n = y.len();
    if op.len() != n || basis.len() != n {
        return Err(CvxedaError::ShapeMismatch(format!(
            "signal {n}, operator {}, basis {}",
            op.len(),
            basis.len()
        )));
    }
    if let Some(i) = y.iter().position(|v| !v.is_finite()) {
        return Err(SignalError::NonFinite(i).into());
    }
    let m = basis.num_coefs();
    let mut gram = basis.gram();
    for j in 0..basis.num_splines() {
        gram[j * m + j] += cfg.gamma;
    }
    let weights = if cfg.penalize_driver {
        vec![1.0; n]
    } else {
        op.apply_transpose(&vec![1.0; n])
    };
    let problem = Reduced {
        y,
        op,
        basis,
        chol: Cholesky::new(&gram, m)?,
        gamma: cfg.gamma,
        alpha: cfg.alpha,
        weights,
        penalize_driver: cfg.penalize_driver,
    };

    let scale = inf_norm(&op.apply_transpose(y)).max(1.0);
    let mut lip = problem.lipschitz_estimate() * 1.01;

    let mut x = vec![0.0; n];
    let mut x_eval = problem.eval(&x);
    let mut trace = vec![x_eval.objective];
    let mut search = x.clone();
    let mut momentum: f64 = 1.0;
    let mut residual = f64::INFINITY;
    let mut iterations = 0;
    let mut converged = false;

    let stationarity = |p: &[f64], e: &Eval, lip: f64| -> f64 {
        let g = problem.gradient(e);
        let step: Vec<f64> = p.iter().zip(&g).map(|(a, b)| a - b / lip).collect();
        let q = problem.prox(&step, 1.0 / lip);
        lip * p.iter().zip(&q).fold(0.0f64, |m, (a, b)| m.max((a - b).abs())) / scale
    };

    residual = residual.min(stationarity(&x, &x_eval, lip));
    if residual <= cfg.solver_tol {
        converged = true;
    }

    while !converged && iterations < cfg.max_iter {
        iterations += 1;
        let s_eval = problem.eval(&search);
        let grad = problem.gradient(&s_eval);
        // Backtracking on the quadratic upper model.
        let (candidate, c_eval) = loop {
            let step: Vec<f64> = search.iter().zip(&grad).map(|(a, b)| a - b / lip).collect();
            let cand = problem.prox(&step, 1.0 / lip);
            let ce = problem.eval(&cand);
            let diff: Vec<f64> = cand.iter().zip(&search).map(|(a, b)| a - b).collect();
            let model = s_eval.smooth + dot(&grad, &diff) + 0.5 * lip * dot(&diff, &diff);
            if ce.smooth <= model + 1e-12 * s_eval.smooth.abs().max(1.0) || lip > 1e15 {
                break (cand, ce);
            }
            lip *= 2.0;
        };

        let prev = x.clone();
        let next_momentum = 0.5 * (1.0 + (1.0 + 4.0 * momentum * momentum).sqrt());
        if c_eval.objective <= x_eval.objective {
            x = candidate.clone();
            x_eval = c_eval;
            search = x
                .iter()
                .zip(&prev)
                .map(|(xn, xo)| xn + (momentum - 1.0) / next_momentum * (xn - xo))
                .collect();
            momentum = next_momentum;
        } else {
            // Monotone safeguard: keep the incumbent and restart momentum.
            search = x.clone();
            momentum = 1.0;
        }
        trace.push(x_eval.objective);

        if iterations % 10 == 0 || iterations == cfg.max_iter {
            residual = stationarity(&x, &x_eval, lip);
            if residual <= cfg.solver_tol {
                converged = true;
            }
        }
    }

    let num_splines = basis.num_splines();
    let solution = QpSolution {
        driver: x,
        spline_coef: x_eval.coefs[..num_splines].to_vec(),
        drift_coef: [x_eval.coefs[num_splines], x_eval.coefs[num_splines + 1]],
        objective_trace: trace,
        iterations,
        residual,
        converged,
    };
    if converged {
        Ok(solution)
    } else {
        Err(CvxedaError::NoConvergence(Box::new(Unconverged {
            solution,
            decomposition: None,
        })))
    }
}

/// Signal-level decomposition: anchors the trace at its minimum, solves the
/// QP and folds the shift back into the tonic component.
pub fn decompose(trace: &EdaTrace, irf: &BatemanIrf, cfg: &CvxedaConfig) -> Result<DecomposedEda, CvxedaError> {
    decompose_detailed(trace, irf, cfg).map(|(d, _)| d)
}

pub fn decompose_detailed(
    trace: &EdaTrace,
    irf: &BatemanIrf,
    cfg: &CvxedaConfig,
) -> Result<(DecomposedEda, QpSolution), CvxedaError> {
    let trace = validate_trace(trace.clone())?;
    cfg.validate()?;
    let n = trace.len();
    let kernel = sample_irf(irf, trace.sampling_hz)?;
    let op = build_phasic_operator(&kernel, n)?;
    let basis = build_tonic_basis(n, trace.sampling_hz, cfg.knot_spacing_s)?;
    let floor = trace.samples.iter().cloned().fold(f64::INFINITY, f64::min);
    let anchored: Vec<f64> = trace.samples.iter().map(|v| v - floor).collect();

    let assemble = |sol: &QpSolution| -> DecomposedEda {
        let phasic = op.apply(&sol.driver);
        let mut z = sol.spline_coef.clone();
        z.extend_from_slice(&sol.drift_coef);
        let tonic: Vec<f64> = basis.apply(&z).into_iter().map(|v| v + floor).collect();
        let residual = trace
            .samples
            .iter()
            .zip(&phasic)
            .zip(&tonic)
            .map(|((y, p), t)| y - (p + t))
            .collect();
        DecomposedEda {
            origin: trace.samples.clone(),
            phasic,
            tonic,
            driver: sol.driver.clone(),
            residual,
        }
    };

    match solve_qp(&anchored, &op, &basis, cfg) {
        Ok(sol) => Ok((assemble(&sol), sol)),
        Err(CvxedaError::NoConvergence(mut unconverged)) => {
            unconverged.decomposition = Some(assemble(&unconverged.solution));
            Err(CvxedaError::NoConvergence(unconverged))
        }
        Err(e) => Err(e),
    }
}

/// Like [`decompose`] but accepts the best iterate when the budget runs out.
pub fn decompose_lenient(trace: &EdaTrace, irf: &BatemanIrf, cfg: &CvxedaConfig) -> Result<DecomposedEda, CvxedaError> {
    match decompose(trace, irf, cfg) {
        Err(CvxedaError::NoConvergence(u)) => {
            log::warn!(
                "decomposition of {}/{} stopped at residual {:.3e}",
                trace.subject_id,
                trace.stimulus_id,
                u.solution.residual
            );
            Ok(u.decomposition.expect("decomposition assembled for unconverged solve"))
        }
        other => other,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn trace(samples: Vec<f64>, hz: f64) -> EdaTrace {
        EdaTrace::new("S", "M", hz, samples)
    }

    #[test]
    fn irf_shape() {
        let irf = BatemanIrf::default();
        let h = sample_irf(&irf, 10.0).unwrap();
        assert_eq!(h[0], 0.0);
        assert_eq!(h.len(), 401);
        let argmax = (0..h.len()).max_by(|&a, &b| h[a].total_cmp(&h[b])).unwrap();
        assert_eq!(argmax, 11);
        assert!((irf.peak_time() - 1.131).abs() < 1e-3);
        assert!(h.iter().all(|v| (0.0..=1.0).contains(v)));
        assert_eq!(h.iter().cloned().fold(0.0, f64::max), 1.0);
    }

    #[test]
    fn irf_rejects_bad_params() {
        let bad = BatemanIrf { tau0: 2.0, tau1: 0.7, duration: 40.0 };
        assert!(matches!(sample_irf(&bad, 4.0), Err(CvxedaError::BadParams(_))));
        let short = BatemanIrf { duration: 5.0, ..BatemanIrf::default() };
        assert!(short.validate().is_err());
        assert!(sample_irf(&BatemanIrf::default(), 0.0).is_err());
    }

    #[test]
    fn operator_impulse_and_zero() {
        let h = sample_irf(&BatemanIrf::default(), 4.0).unwrap();
        let op = build_phasic_operator(&h, 200).unwrap();
        let mut e = vec![0.0; 200];
        e[0] = 1.0;
        assert_eq!(op.apply(&e)[..161], h[..]);
        assert!(op.apply(&e)[161..].iter().all(|&v| v == 0.0));
        assert!(op.apply(&[0.0; 200]).iter().all(|&v| v == 0.0));
        // truncated when the signal is shorter than the kernel
        let short = build_phasic_operator(&h, 20).unwrap();
        assert_eq!(short.kernel(), &h[..20]);
        assert!(build_phasic_operator(&h, 1).is_err());
    }

    proptest! {
        #[test]
        fn adjoint_identity(seed in 0u64..200, n in 2usize..300) {
            let h = sample_irf(&BatemanIrf::default(), 4.0).unwrap();
            let op = build_phasic_operator(&h, n).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let p: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let q: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let lhs = dot(&op.apply(&p), &q);
            let rhs = dot(&p, &op.apply_transpose(&q));
            prop_assert!((lhs - rhs).abs() < 1e-10, "{} vs {}", lhs, rhs);
        }
    }

    #[test]
    fn tonic_basis_properties() {
        let basis = build_tonic_basis(240, 4.0, 10.0).unwrap();
        assert_eq!(basis.num_splines(), 9);
        for i in 0..240 {
            let sum: f64 = (0..basis.num_splines()).map(|j| basis.spline_value(i, j)).sum();
            assert!((sum - 1.0).abs() < 1e-9, "row {i}: {sum}");
            assert!((0..basis.num_splines()).all(|j| basis.spline_value(i, j) >= 0.0));
        }
        let mut z = vec![0.0; basis.num_coefs()];
        z[basis.num_splines()] = 1.0;
        assert!(basis.apply(&z).iter().all(|v| (v - 1.0).abs() < 1e-9));
        z[basis.num_splines()] = 0.5;
        z[basis.num_splines() + 1] = 2.0;
        for (i, v) in basis.apply(&z).iter().enumerate() {
            assert!((v - (0.5 + 2.0 * i as f64 / 240.0)).abs() < 1e-12);
        }
        assert!(matches!(build_tonic_basis(79, 4.0, 10.0), Err(CvxedaError::TooShort { .. })));
    }

    #[test]
    fn tonic_transpose_matches_apply() {
        let basis = build_tonic_basis(100, 4.0, 10.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let z: Vec<f64> = (0..basis.num_coefs()).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let r: Vec<f64> = (0..100).map(|_| rng.gen_range(-1.0..1.0)).collect();
        assert!((dot(&basis.apply(&z), &r) - dot(&z, &basis.apply_transpose(&r))).abs() < 1e-10);
    }

    fn setup(n: usize) -> (PhasicOperator, TonicBasis) {
        let h = sample_irf(&BatemanIrf::default(), 4.0).unwrap();
        (build_phasic_operator(&h, n).unwrap(), build_tonic_basis(n, 4.0, 10.0).unwrap())
    }

    #[test]
    fn zero_signal_is_a_fixed_point() {
        let (op, basis) = setup(160);
        let sol = solve_qp(&[0.0; 160], &op, &basis, &CvxedaConfig::default()).unwrap();
        assert!(sol.driver.iter().all(|&v| v == 0.0));
        assert!(sol.spline_coef.iter().all(|&v| v == 0.0));
        assert_eq!(sol.drift_coef, [0.0, 0.0]);
        assert_eq!(sol.objective(), 0.0);
        assert_eq!(sol.iterations, 0);
    }

    #[test]
    fn constant_trace_has_no_phasic_part() {
        for level in [0.5, 3.0, 12.0] {
            let d = decompose(&trace(vec![level; 200], 4.0), &BatemanIrf::default(), &CvxedaConfig::default()).unwrap();
            assert!(inf_norm(&d.phasic) < 1e-3 * level);
            assert!(d.tonic.iter().all(|t| (t - level).abs() < 1e-3 * level));
            assert_eq!(d.reconstruction_error(), 0.0);
        }
    }

    #[test]
    fn driver_is_nonnegative_and_trace_monotone() {
        let (op, basis) = setup(200);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut p = vec![0.0; 200];
        for _ in 0..5 {
            p[rng.gen_range(0..180)] = rng.gen_range(0.2..1.0);
        }
        let y: Vec<f64> = op.apply(&p).iter().map(|v| v + 0.3 + rng.gen_range(-0.02..0.02)).collect();
        let sol = solve_qp(&y, &op, &basis, &CvxedaConfig::default()).unwrap();
        assert!(sol.converged && sol.residual <= 1e-6);
        assert!(sol.driver.iter().all(|&v| v >= 0.0));
        for w in sol.objective_trace.windows(2) {
            assert!(w[1] <= w[0] + 1e-9);
        }
    }

    #[test]
    fn exhausted_budget_reports_best_iterate() {
        let (op, basis) = setup(200);
        let mut p = vec![0.0; 200];
        p[20] = 1.0;
        p[90] = 0.5;
        let y: Vec<f64> = op.apply(&p).iter().map(|v| v + 1.0).collect();
        let cfg = CvxedaConfig { max_iter: 3, ..CvxedaConfig::default() };
        match solve_qp(&y, &op, &basis, &cfg) {
            Err(CvxedaError::NoConvergence(u)) => {
                assert!(!u.solution.converged);
                assert_eq!(u.solution.iterations, 3);
                assert_eq!(u.solution.objective_trace.len(), 4);
            }
            other => panic!("expected NoConvergence, got {other:?}"),
        }
        let t = trace(y, 4.0);
        assert!(matches!(decompose(&t, &BatemanIrf::default(), &cfg), Err(CvxedaError::NoConvergence(u)) if u.decomposition.is_some()));
        let d = decompose_lenient(&t, &BatemanIrf::default(), &cfg).unwrap();
        assert_eq!(d.len(), 200);
    }

    #[test]
    fn shape_and_param_errors() {
        let (op, basis) = setup(200);
        assert!(matches!(solve_qp(&[0.0; 10], &op, &basis, &CvxedaConfig::default()), Err(CvxedaError::ShapeMismatch(_))));
        let mut y = vec![0.0; 200];
        y[3] = f64::NAN;
        assert!(matches!(solve_qp(&y, &op, &basis, &CvxedaConfig::default()), Err(CvxedaError::Signal(SignalError::NonFinite(3)))));
        let cfg = CvxedaConfig { alpha: 0.0, ..CvxedaConfig::default() };
        assert!(matches!(cfg.validate(), Err(CvxedaError::BadParams(_))));
        assert!(serde_json::from_str::<CvxedaConfig>(r#"{"alpha": 1e-3, "extra": 1}"#).is_err());
    }

    #[test]
    fn scaling_covariance() {
        // the objective is homogeneous when the signal and alpha scale together
        let (op, _) = setup(240);
        let mut p = vec![0.0; 240];
        p[30] = 0.8;
        p[120] = 0.4;
        p[170] = 1.0;
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let y: Vec<f64> = op
            .apply(&p)
            .iter()
            .enumerate()
            .map(|(i, v)| v + 1.5 + 0.002 * i as f64 + rng.gen_range(-0.01..0.01))
            .collect();
        let cfg = CvxedaConfig { solver_tol: 1e-8, max_iter: 200_000, ..CvxedaConfig::default() };
        let base = decompose(&trace(y.clone(), 4.0), &BatemanIrf::default(), &cfg).unwrap();
        let c = 2.0;
        let scaled_cfg = CvxedaConfig { alpha: c * cfg.alpha, ..cfg };
        let scaled_y: Vec<f64> = y.iter().map(|v| c * v).collect();
        let scaled = decompose(&trace(scaled_y, 4.0), &BatemanIrf::default(), &scaled_cfg).unwrap();
        for (a, b) in scaled.phasic.iter().zip(&base.phasic) {
            assert!((a - c * b).abs() < 1e-4, "{a} vs {}", c * b);
        }
        for (a, b) in scaled.tonic.iter().zip(&base.tonic) {
            assert!((a - c * b).abs() < 1e-4);
        }
    }

    #[test]
    fn penalize_driver_switch() {
        let (op, basis) = setup(200);
        let mut p = vec![0.0; 200];
        p[40] = 1.0;
        let y: Vec<f64> = op.apply(&p).iter().map(|v| v + 0.5).collect();
        let cfg = CvxedaConfig { penalize_driver: true, ..CvxedaConfig::default() };
        let sol = solve_qp(&y, &op, &basis, &cfg).unwrap();
        assert!(sol.driver.iter().all(|&v| v >= 0.0));
        let peak = (0..200).max_by(|&a, &b| sol.driver[a].total_cmp(&sol.driver[b])).unwrap();
        assert_eq!(peak, 40);
    }
}
