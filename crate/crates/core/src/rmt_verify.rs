//! Numerical checks of the random-matrix approximations behind the two-layer
//! bound: population kernel Σ vs Σ̃, the Q/Q̃ and I/Ĩ replacements, the
//! bivariate Gaussian expansion and the A_R decomposition.
//!
//! Population expectations are computed exactly by quadrature by default;
//! every check also has a Monte Carlo mode.

use std::io::Write;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::linalg::{op_norm, sym_eigenvalues_desc};
use crate::model::{constants_for, gauss_expect, Activation, GaussConstants, ModelConfig};
use crate::output::fmt_f64;
use crate::quadrature::{bivariate_expect, default_normal_rule, gauss_gamma, normal_panel_rule, QuadratureRule};
use crate::rng;

const SIGMA_STREAM: u64 = 0x5161;
const EXPANSION_STREAM: u64 = 0xE7A4;
const REPLACE_STREAM: u64 = 0x4E91;
const AR_STREAM: u64 = 0xA4;

/// Hermite terms kept in the Mehler series for off-diagonal Σ entries.
const MEHLER_TERMS: usize = 48;
/// Above this correlation Σ entries use 2-D quadrature instead of the series.
const MEHLER_MAX_RHO: f64 = 0.5;
/// Monte Carlo chunk size; chunk `c` uses its own seed stream.
const CHUNK: usize = 4096;

/// How population expectations are evaluated.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Default)]
pub enum Estimator {
    #[default]
    Exact,
    MonteCarlo { n_mc: usize },
}

impl Estimator {
    fn check(self) -> Result<()> {
        match self {
            Estimator::MonteCarlo { n_mc } if n_mc < 2 => {
                Err(Error::InvalidConfig("Monte Carlo needs at least two samples".into()))
            }
            _ => Ok(()),
        }
    }
}

/// How the constant off-diagonal term of Σ̃ is handled.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Default)]
pub enum SigmaMode {
    /// Compare on the orthogonal complement of the all-ones vector.
    #[default]
    Projection,
    /// Fit the constant by least squares on the off-diagonal entries.
    LeastSquares,
}

/// Median metric per dimension.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ConvergenceReport {
    pub dims: Vec<usize>,
    pub metric: Vec<f64>,
    pub trials: usize,
    /// Metric strictly decreasing along `dims`.
    pub decreasing: bool,
    /// `metric[i] / metric[i+1]`.
    pub ratios: Vec<f64>,
}

impl ConvergenceReport {
    pub fn new(dims: Vec<usize>, metric: Vec<f64>, trials: usize) -> Result<Self> {
        if dims.len() != metric.len() {
            return Err(Error::DimensionMismatch(format!(
                "{} dims but {} metric values",
                dims.len(),
                metric.len()
            )));
        }
        if dims.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::InvalidConfig("dims must be strictly increasing".into()));
        }
        if metric.iter().any(|m| !(m.is_finite() && *m >= 0.0)) {
            return Err(Error::numerical("convergence report", "metric must be finite and >= 0"));
        }
        let decreasing = metric.windows(2).all(|w| w[1] < w[0]);
        let ratios = metric.windows(2).map(|w| w[0] / w[1]).collect();
        Ok(ConvergenceReport {
            dims,
            metric,
            trials,
            decreasing,
            ratios,
        })
    }

    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "dim,metric,trials")?;
        for (d, m) in self.dims.iter().zip(&self.metric) {
            writeln!(w, "{d},{},{}", fmt_f64(*m), self.trials)?;
        }
        Ok(())
    }
}

fn check_dims(dims: &[usize]) -> Result<()> {
    if dims.len() < 2 {
        return Err(Error::InvalidConfig("need at least two dimensions".into()));
    }
    if dims[0] == 0 || dims.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::InvalidConfig("dims must be positive and strictly increasing".into()));
    }
    Ok(())
}

fn median(mut xs: Vec<f64>) -> f64 {
    xs.sort_by(f64::total_cmp);
    let n = xs.len();
    if n % 2 == 1 {
        xs[n / 2]
    } else {
        0.5 * (xs[n / 2 - 1] + xs[n / 2])
    }
}

/// Template scaled to input dimension `d`, keeping `N/d` and `d/M`.
pub fn scaled_config(template: &ModelConfig, d: usize) -> Result<ModelConfig> {
    let mut c = *template;
    c.d = d;
    c.n1 = ((template.beta1() * d as f64).round() as usize).max(1);
    c.m = ((d as f64 / template.gamma0()).round() as usize).max(1);
    c.validate()?;
    Ok(c)
}

fn check_w1(w1: &DMatrix<f64>, cfg: &ModelConfig) -> Result<()> {
    if w1.nrows() != cfg.n1 || w1.ncols() != cfg.d {
        return Err(Error::DimensionMismatch(format!(
            "W1 is {}x{}, config has n1 = {}, d = {}",
            w1.nrows(),
            w1.ncols(),
            cfg.n1,
            cfg.d
        )));
    }
    Ok(())
}

fn sample_w1(cfg: &ModelConfig, seed: u64, path: &[u64]) -> DMatrix<f64> {
    let mut r = rng::stream(seed, path);
    let s = (1.0 / cfg.alpha).sqrt();
    DMatrix::from_fn(cfg.n1, cfg.d, |_, _| s * rng::normal(&mut r))
}

fn sample_w2(cfg: &ModelConfig, seed: u64, path: &[u64]) -> DVector<f64> {
    let mut r = rng::stream(seed, path);
    let s = (1.0 / cfg.alpha2).sqrt();
    DVector::from_fn(cfg.n1, |_, _| s * rng::normal(&mut r))
}

/// Monte Carlo `Σ̂ = (1/n) Σ σ(q)σ(q)ᵀ`, `q = W1 x/√d`, `x ~ N(0, σ_x²I)`.
pub fn sigma_population(
    w1: &DMatrix<f64>,
    consts: &GaussConstants,
    cfg: &ModelConfig,
    n_mc: usize,
    seed: u64,
) -> Result<DMatrix<f64>> {
    cfg.validate()?;
    check_w1(w1, cfg)?;
    if n_mc == 0 {
        return Err(Error::InvalidConfig("n_mc must be at least 1".into()));
    }
    let act = consts.activation;
    let (n, d) = (cfg.n1, cfg.d);
    let scale = cfg.sigma_x2.sqrt() / (d as f64).sqrt();
    let chunks = n_mc.div_ceil(CHUNK);
    let partials: Vec<DMatrix<f64>> = (0..chunks)
        .into_par_iter()
        .map(|c| {
            let len = CHUNK.min(n_mc - c * CHUNK);
            let mut r = rng::stream(seed, &[SIGMA_STREAM, c as u64]);
            let x = DMatrix::from_fn(d, len, |_, _| scale * rng::normal(&mut r));
            let s = (w1 * x).map(|q| act.value(q));
            &s * s.transpose()
        })
        .collect();
    let mut sum = DMatrix::zeros(n, n);
    for p in partials {
        sum += p;
    }
    Ok(sum / n_mc as f64)
}

/// Normalized Hermite coefficients `c_k = E[f(vz) He_k(z)]/√k!`, `k < terms`.
fn hermite_coefficients<F: Fn(f64) -> f64>(f: F, v: f64, terms: usize) -> Vec<f64> {
    let rule = normal_panel_rule(crate::quadrature::panels_for_scale(v));
    let mut c = vec![0.0; terms];
    let mut h = vec![0.0; terms];
    for (&z, &w) in rule.nodes.iter().zip(&rule.weights) {
        let fz = w * f(v * z);
        if fz == 0.0 {
            continue;
        }
        h[0] = 1.0;
        if terms > 1 {
            h[1] = z;
        }
        for k in 1..terms.saturating_sub(1) {
            h[k + 1] = (z * h[k] - (k as f64).sqrt() * h[k - 1]) / ((k + 1) as f64).sqrt();
        }
        for k in 0..terms {
            c[k] += fz * h[k];
        }
    }
    c
}

/// Exact `Σ = E_x[σ(q)σ(q)ᵀ]` for a fixed `W1`: diagonal by 1-D
/// quadrature, off-diagonal by the Mehler series in the pair correlation
/// (2-D quadrature for strongly correlated rows).
pub fn sigma_exact(w1: &DMatrix<f64>, act: Activation, cfg: &ModelConfig) -> Result<DMatrix<f64>> {
    cfg.validate()?;
    check_w1(w1, cfg)?;
    let (n, d) = (cfg.n1, cfg.d);
    let gram = w1 * w1.transpose() * (cfg.sigma_x2 / d as f64);
    let v: Vec<f64> = (0..n).map(|i| gram[(i, i)].sqrt()).collect();
    if v.iter().any(|&x| !(x > 0.0)) {
        return Err(Error::numerical("sigma_exact", "W1 has a zero row"));
    }
    let coeffs: Vec<Vec<f64>> = v
        .par_iter()
        .map(|&vi| hermite_coefficients(|x| act.value(x), vi, MEHLER_TERMS))
        .collect();
    let diag: Vec<f64> = v
        .par_iter()
        .map(|&vi| gauss_expect(|x| act.value(x).powi(2), vi))
        .collect::<Result<_>>()?;
    let rows: Vec<Vec<f64>> = (0..n)
        .into_par_iter()
        .map(|i| {
            (0..n)
                .map(|j| {
                    if i == j {
                        return Ok(diag[i]);
                    }
                    let rho = gram[(i, j)] / (v[i] * v[j]);
                    if rho.abs() <= MEHLER_MAX_RHO {
                        let mut acc = 0.0;
                        let mut p = 1.0;
                        for k in 0..MEHLER_TERMS {
                            acc += coeffs[i][k] * coeffs[j][k] * p;
                            p *= rho;
                        }
                        Ok(acc)
                    } else {
                        bivariate_expect(default_normal_rule(), gram[(i, i)], gram[(j, j)], gram[(i, j)], |a, b| {
                            act.value(a) * act.value(b)
                        })
                    }
                })
                .collect::<Result<Vec<f64>>>()
        })
        .collect::<Result<_>>()?;
    Ok(DMatrix::from_fn(n, n, |i, j| 0.5 * (rows[i][j] + rows[j][i])))
}

/// `Σ̃ = (η₀−θ₁₁)I + αθ₁₁ W1W1ᵀ/d + (a/d)(11ᵀ − I)`.
pub fn sigma_tilde(w1: &DMatrix<f64>, consts: &GaussConstants, cfg: &ModelConfig, a: f64) -> Result<DMatrix<f64>> {
    cfg.validate()?;
    check_w1(w1, cfg)?;
    let (n, d) = (cfg.n1, cfg.d as f64);
    let mut s = w1 * w1.transpose() * (cfg.alpha * consts.theta11 / d);
    for i in 0..n {
        for j in 0..n {
            if i == j {
                s[(i, j)] += consts.eta0 - consts.theta11;
            } else {
                s[(i, j)] += a / d;
            }
        }
    }
    Ok(s)
}

/// Least-squares `a`: `d` times the mean off-diagonal entry of
/// `Σ − αθ₁₁W1W1ᵀ/d`.
pub fn estimate_offdiag_constant(sigma: &DMatrix<f64>, w1: &DMatrix<f64>, consts: &GaussConstants, cfg: &ModelConfig) -> f64 {
    let n = sigma.nrows();
    if n < 2 {
        return 0.0;
    }
    let d = cfg.d as f64;
    let g = w1 * w1.transpose() * (cfg.alpha * consts.theta11 / d);
    let mut acc = 0.0;
    for i in 0..n {
        for j in 0..n {
            if i != j {
                acc += sigma[(i, j)] - g[(i, j)];
            }
        }
    }
    d * acc / (n * (n - 1)) as f64
}

/// `‖Σ − Σ̃‖_op` under `mode`.
pub fn sigma_gap(
    sigma: &DMatrix<f64>,
    w1: &DMatrix<f64>,
    consts: &GaussConstants,
    cfg: &ModelConfig,
    mode: SigmaMode,
) -> Result<f64> {
    match mode {
        SigmaMode::LeastSquares => {
            let a = estimate_offdiag_constant(sigma, w1, consts, cfg);
            let t = sigma_tilde(w1, consts, cfg, a)?;
            Ok(op_norm(&(sigma - t)))
        }
        SigmaMode::Projection => {
            let t = sigma_tilde(w1, consts, cfg, 0.0)?;
            let diff = sigma - t;
            let n = diff.nrows();
            let p = DMatrix::identity(n, n) - DMatrix::from_element(n, n, 1.0 / n as f64);
            Ok(op_norm(&(&p * diff * &p)))
        }
    }
}

/// Median over `trials` prior draws of `W1` of `‖Σ − Σ̃‖_op` at each `d`,
/// with `N/d` taken from `template`.
pub fn check_sigma_convergence(
    act: Activation,
    template: &ModelConfig,
    dims: &[usize],
    trials: usize,
    mode: SigmaMode,
    estimator: Estimator,
    seed: u64,
) -> Result<ConvergenceReport> {
    check_dims(dims)?;
    estimator.check()?;
    if trials == 0 {
        return Err(Error::InvalidConfig("trials must be at least 1".into()));
    }
    let mut metric = Vec::with_capacity(dims.len());
    for &d in dims {
        let cfg = scaled_config(template, d)?;
        let consts = constants_for(&cfg, act)?;
        let gaps: Vec<f64> = (0..trials)
            .into_par_iter()
            .map(|t| {
                let w1 = sample_w1(&cfg, seed, &[SIGMA_STREAM, d as u64, t as u64]);
                let sigma = match estimator {
                    Estimator::Exact => sigma_exact(&w1, act, &cfg)?,
                    Estimator::MonteCarlo { n_mc } => {
                        sigma_population(&w1, &consts, &cfg, n_mc, rng::derive_seed(seed, &[d as u64, t as u64]))?
                    }
                };
                sigma_gap(&sigma, &w1, &consts, &cfg, mode)
            })
            .collect::<Result<_>>()?;
        metric.push(median(gaps));
    }
    ConvergenceReport::new(dims.to_vec(), metric, trials)
}

/// A scalar function with its derivative.
pub struct Differentiable {
    f: Box<dyn Fn(f64) -> f64 + Send + Sync>,
    df: Box<dyn Fn(f64) -> f64 + Send + Sync>,
}

impl Differentiable {
    pub fn new(f: impl Fn(f64) -> f64 + Send + Sync + 'static, df: impl Fn(f64) -> f64 + Send + Sync + 'static) -> Self {
        Differentiable {
            f: Box::new(f),
            df: Box::new(df),
        }
    }

    pub fn from_activation(act: Activation) -> Self {
        Differentiable::new(move |x| act.value(x), move |x| act.derivative(x))
    }

    pub fn value(&self, x: f64) -> f64 {
        (self.f)(x)
    }

    pub fn derivative(&self, x: f64) -> f64 {
        (self.df)(x)
    }
}

/// One row of the expansion table.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ExpansionRow {
    pub eps: f64,
    /// `E[f₁(q₁)f₂(q₂)]`
    pub value: f64,
    /// `E f₁(v₁z)·E f₂(v₂z) + ε·E f₁'(v₁z)·E f₂'(v₂z)`
    pub first_order: f64,
    pub residual: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ExpansionReport {
    pub rows: Vec<ExpansionRow>,
    /// Least-squares slope of `ln|residual|` against `ln ε` over rows with
    /// `ε > 0`; `None` with fewer than two such rows.
    pub slope: Option<f64>,
}

impl ExpansionReport {
    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "eps,value,first_order,residual")?;
        for r in &self.rows {
            writeln!(
                w,
                "{},{},{},{}",
                fmt_f64(r.eps),
                fmt_f64(r.value),
                fmt_f64(r.first_order),
                fmt_f64(r.residual)
            )?;
        }
        Ok(())
    }
}

/// Log-log least-squares slope of `|y|` against `x` over points with
/// `x > 0` and `y ≠ 0`.
pub fn loglog_slope(x: &[f64], y: &[f64]) -> Option<f64> {
    let pts: Vec<(f64, f64)> = x
        .iter()
        .zip(y)
        .filter(|(a, b)| **a > 0.0 && **b != 0.0 && b.is_finite())
        .map(|(a, b)| (a.ln(), b.abs().ln()))
        .collect();
    if pts.len() < 2 {
        return None;
    }
    let n = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
    if sxx == 0.0 {
        return None;
    }
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    Some(sxy / sxx)
}

/// Residual of the first-order expansion of `E[f₁(q₁)f₂(q₂)]` for the
/// centered pair with covariance `[[v₁², ε], [ε, v₂²]]`, at each `ε`.
pub fn check_gaussian_expansion(
    f1: &Differentiable,
    f2: &Differentiable,
    v1: f64,
    v2: f64,
    eps_grid: &[f64],
    estimator: Estimator,
    seed: u64,
) -> Result<ExpansionReport> {
    estimator.check()?;
    if !(v1 > 0.0 && v2 > 0.0 && v1.is_finite() && v2.is_finite()) {
        return Err(Error::InvalidConfig("scales must be positive".into()));
    }
    if eps_grid.is_empty() {
        return Err(Error::InvalidConfig("empty epsilon grid".into()));
    }
    let bound = (v1 * v1).min(v2 * v2);
    if let Some(e) = eps_grid.iter().find(|e| !(e.is_finite() && e.abs() < bound)) {
        return Err(Error::InvalidConfig(format!("epsilon {e} must be below min(v1², v2²) = {bound}")));
    }
    let m1 = gauss_expect(|x| f1.value(x), v1)?;
    let m2 = gauss_expect(|x| f2.value(x), v2)?;
    let d1 = gauss_expect(|x| f1.derivative(x), v1)?;
    let d2 = gauss_expect(|x| f2.derivative(x), v2)?;
    let rows = eps_grid
        .iter()
        .enumerate()
        .map(|(idx, &eps)| {
            let value = match estimator {
                Estimator::Exact => bivariate_expect(default_normal_rule(), v1 * v1, v2 * v2, eps, |a, b| {
                    f1.value(a) * f2.value(b)
                })?,
                Estimator::MonteCarlo { n_mc } => {
                    let mut r = rng::stream(seed, &[EXPANSION_STREAM, idx as u64]);
                    let l21 = eps / v1;
                    let l22 = (v2 * v2 - l21 * l21).max(0.0).sqrt();
                    let mut acc = 0.0;
                    for _ in 0..n_mc {
                        let z1 = rng::normal(&mut r);
                        let z2 = rng::normal(&mut r);
                        acc += f1.value(v1 * z1) * f2.value(l21 * z1 + l22 * z2);
                    }
                    acc / n_mc as f64
                }
            };
            let first_order = m1 * m2 + eps * d1 * d2;
            Ok(ExpansionRow {
                eps,
                value,
                first_order,
                residual: value - first_order,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let xs: Vec<f64> = rows.iter().map(|r| r.eps).collect();
    let ys: Vec<f64> = rows.iter().map(|r| r.residual).collect();
    Ok(ExpansionReport {
        slope: loglog_slope(&xs, &ys),
        rows,
    })
}

/// `θ₁(r)² = (E σ'(rz))²`.
fn theta1_sq(act: Activation, r: f64) -> Result<f64> {
    Ok(gauss_expect(|x| act.derivative(x), r)?.powi(2))
}

/// `‖Q − Q̃‖_HS` for one draw of `w2`.
///
/// Given `x̃`, `D̄ = θ₁(r)I` with `r = |x̃|/√(dα)`, so
/// `Q = (1/N) w2w2ᵀ ⊗ E[θ₁(r)² x̃x̃ᵀ]`.
fn q_gap(cfg: &ModelConfig, act: Activation, w2: &DVector<f64>, estimator: Estimator, seed: u64) -> Result<f64> {
    let d = cfg.d;
    let df = d as f64;
    let n = cfg.n1 as f64;
    let target = cfg.sigma_x2 * theta1_sq(act, cfg.v())?;
    let w2n = w2.norm_squared();
    match estimator {
        Estimator::Exact => {
            // |x̃|² = 2σ_x² u, u ~ Gamma(d/2, 1); E[θ₁² x̃x̃ᵀ] = E[θ₁²|x̃|²]/d · I
            let rule = gauss_gamma(96, 0.5 * df);
            let mut c = 0.0;
            for (&u, &w) in rule.nodes.iter().zip(&rule.weights) {
                let norm2 = 2.0 * cfg.sigma_x2 * u;
                let r = (norm2 / (df * cfg.alpha)).sqrt();
                c += w * theta1_sq(act, r)? * norm2 / df;
            }
            Ok((c - target).abs() * w2n * df.sqrt() / n)
        }
        Estimator::MonteCarlo { n_mc } => {
            let mut r = rng::stream(seed, &[REPLACE_STREAM, 0]);
            let sx = cfg.sigma_x2.sqrt();
            let mut m = DMatrix::<f64>::zeros(d, d);
            let mut x = DVector::<f64>::zeros(d);
            for _ in 0..n_mc {
                x.iter_mut().for_each(|v| *v = sx * rng::normal(&mut r));
                let rr = (x.norm_squared() / (df * cfg.alpha)).sqrt();
                m.ger(theta1_sq(act, rr)?, &x, &x, 1.0);
            }
            m /= n_mc as f64;
            for i in 0..d {
                m[(i, i)] -= target;
            }
            Ok(m.norm() * w2n / n)
        }
    }
}

/// `‖I − Ĩ‖_op` for one draw of `(X, w2)`.
///
/// Exactly, `I − Ĩ = (1/(Nd)) w2w2ᵀ ⊗ Σ_k Δθ_k x_k x_kᵀ` with
/// `Δθ_k = θ₁(r_k)² − θ₁(v)²`. The Monte Carlo mode averages
/// `D w2w2ᵀ D` over `n_mc` draws of the hidden pre-activations given `x_k`.
fn i_gap(cfg: &ModelConfig, act: Activation, x: &DMatrix<f64>, w2: &DVector<f64>, estimator: Estimator, seed: u64) -> Result<f64> {
    let (n, d, m) = (cfg.n1, cfg.d, cfg.m);
    let df = d as f64;
    let nd = (n * d) as f64;
    let base = theta1_sq(act, cfg.v())?;
    let radii: Vec<f64> = (0..m)
        .map(|k| (x.column(k).norm_squared() / (df * cfg.alpha)).sqrt())
        .collect();
    match estimator {
        Estimator::Exact => {
            let mut s = DMatrix::<f64>::zeros(d, d);
            for k in 0..m {
                let dt = theta1_sq(act, radii[k])? - base;
                let xk = x.column(k).into_owned();
                s.ger(dt, &xk, &xk, 1.0);
            }
            Ok(w2.norm_squared() / nd * op_norm(&s))
        }
        Estimator::MonteCarlo { n_mc } => {
            let mut total = DMatrix::<f64>::zeros(n * d, n * d);
            for k in 0..m {
                let rk = radii[k];
                let mut r = rng::stream(seed, &[REPLACE_STREAM, 1, k as u64]);
                let mut e = DMatrix::<f64>::zeros(n, n);
                let mut s = DVector::<f64>::zeros(n);
                for _ in 0..n_mc {
                    for i in 0..n {
                        s[i] = act.derivative(rk * rng::normal(&mut r)) * w2[i];
                    }
                    e.ger(1.0, &s, &s, 1.0);
                }
                e /= n_mc as f64;
                // subtract the Ĩ part for this sample
                let theta = theta1_sq(act, rk)?;
                let eta1 = gauss_expect(|z| act.derivative(z).powi(2), rk)?;
                for i in 0..n {
                    for j in 0..n {
                        let mut t = base * w2[i] * w2[j];
                        if i == j {
                            t += (eta1 - theta) * w2[i] * w2[i];
                        }
                        e[(i, j)] -= t;
                    }
                }
                let xk = x.column(k).into_owned();
                let xx = &xk * xk.transpose();
                total += e.kronecker(&xx);
            }
            Ok(op_norm(&total) / nd)
        }
    }
}

/// Replacement errors over `dims`: first report `‖Q − Q̃‖_HS`, second
/// `‖I − Ĩ‖_op`, medians over `trials` draws of `(X, w2)`.
pub fn check_replacements(
    template: &ModelConfig,
    act: Activation,
    dims: &[usize],
    trials: usize,
    estimator: Estimator,
    seed: u64,
) -> Result<(ConvergenceReport, ConvergenceReport)> {
    check_dims(dims)?;
    estimator.check()?;
    if trials == 0 {
        return Err(Error::InvalidConfig("trials must be at least 1".into()));
    }
    let mut q_metric = Vec::new();
    let mut i_metric = Vec::new();
    for &d in dims {
        let cfg = scaled_config(template, d)?;
        let pairs: Vec<(f64, f64)> = (0..trials)
            .into_par_iter()
            .map(|t| {
                let path = [REPLACE_STREAM, d as u64, t as u64];
                let w2 = sample_w2(&cfg, seed, &path);
                let mut r = rng::stream(seed, &[REPLACE_STREAM, d as u64, t as u64, 1]);
                let sx = cfg.sigma_x2.sqrt();
                let x = DMatrix::from_fn(cfg.d, cfg.m, |_, _| sx * rng::normal(&mut r));
                let sub = rng::derive_seed(seed, &path);
                Ok((q_gap(&cfg, act, &w2, estimator, sub)?, i_gap(&cfg, act, &x, &w2, estimator, sub)?))
            })
            .collect::<Result<_>>()?;
        q_metric.push(median(pairs.iter().map(|p| p.0).collect()));
        i_metric.push(median(pairs.iter().map(|p| p.1).collect()));
    }
    Ok((
        ConvergenceReport::new(dims.to_vec(), q_metric, trials)?,
        ConvergenceReport::new(dims.to_vec(), i_metric, trials)?,
    ))
}

/// Gram part `θ₁₁/(v²Nd) w2w2ᵀ ⊗ XXᵀ` of Ĩ.
pub fn i_tilde_gram(cfg: &ModelConfig, consts: &GaussConstants, x: &DMatrix<f64>, w2: &DVector<f64>) -> Result<DMatrix<f64>> {
    cfg.validate()?;
    if x.nrows() != cfg.d || w2.len() != cfg.n1 {
        return Err(Error::DimensionMismatch("X or w2 does not match the config".into()));
    }
    let v2 = cfg.v().powi(2);
    let c = consts.theta11 / (v2 * (cfg.n1 * cfg.d) as f64);
    Ok((w2 * w2.transpose()).kronecker(&(x * x.transpose())) * c)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ArReport {
    pub n1: usize,
    pub d: usize,
    /// Diagonal of `D⁽²⁾`.
    pub d2: Vec<f64>,
    /// Directions removed from `A_R − D⁽²⁾⊗I` (`N + d + 2`).
    pub removed: usize,
    pub a_r_frobenius: f64,
    pub gap_frobenius: f64,
    pub residual_frobenius: f64,
    /// `residual_frobenius / a_r_frobenius`.
    pub residual_ratio: f64,
}

/// Moments `E g`, `E g q₁²`, `E g q₁q₂`, `E g q₂²` of `g(q₁, q₂)` for a
/// centered pair with covariance `c`.
fn pair_moments<G: Fn(f64, f64) -> f64>(rule: &QuadratureRule, c: [f64; 3], g: G) -> [f64; 4] {
    let s1 = c[0].sqrt();
    let l21 = c[1] / s1;
    let l22 = (c[2] - l21 * l21).max(0.0).sqrt();
    let mut m = [0.0; 4];
    for (&z1, &w1) in rule.nodes.iter().zip(&rule.weights) {
        let q1 = s1 * z1;
        for (&z2, &w2) in rule.nodes.iter().zip(&rule.weights) {
            let q2 = l21 * z1 + l22 * z2;
            let gw = w1 * w2 * g(q1, q2);
            m[0] += gw;
            m[1] += gw * q1 * q1;
            m[2] += gw * q1 * q2;
            m[3] += gw * q2 * q2;
        }
    }
    m
}

/// Exact `A_R = E_x[D w2w2ᵀ D ⊗ xxᵀ]`. For rows `i, j` the block is
/// `w_i w_j E[σ'(q_i)σ'(q_j) xxᵀ]`, obtained by conditioning `x` on
/// `(q_i, q_j)`.
fn a_r_exact(w1: &DMatrix<f64>, w2: &DVector<f64>, act: Activation, cfg: &ModelConfig) -> Result<DMatrix<f64>> {
    let (n, d) = (cfg.n1, cfg.d);
    let sx2 = cfg.sigma_x2;
    let sd = (d as f64).sqrt();
    let rule = normal_panel_rule(8);
    let gram = w1 * w1.transpose() * (sx2 / d as f64);
    let pairs: Vec<(usize, usize)> = (0..n).flat_map(|i| (i..n).map(move |j| (i, j))).collect();
    let blocks: Vec<DMatrix<f64>> = pairs
        .par_iter()
        .map(|&(i, j)| {
            if i == j {
                let c = gram[(i, i)];
                let e0 = gauss_expect(|q| act.derivative(q).powi(2), c.sqrt())?;
                let e2 = gauss_expect(|q| act.derivative(q).powi(2) * q * q, c.sqrt())?;
                // x = b q + x⊥ with b = σ_x² w_i/(√d c)
                let b = w1.row(i).transpose() * (sx2 / (sd * c));
                let bbt = &b * b.transpose();
                let mut blk = &bbt * (e2 - e0 * c);
                for k in 0..d {
                    blk[(k, k)] += e0 * sx2;
                }
                return Ok(blk * (w2[i] * w2[i]));
            }
            let cm = [gram[(i, i)], gram[(i, j)], gram[(j, j)]];
            let det = cm[0] * cm[2] - cm[1] * cm[1];
            if !(det > 0.0) {
                return Err(Error::numerical("a_r_exact", "collinear rows of W1"));
            }
            let mom = pair_moments(&rule, cm, |a, b| act.derivative(a) * act.derivative(b));
            // B = σ_x² W_pᵀ C⁻¹/√d, E[g xxᵀ] = E g (σ_x² I − B C Bᵀ) + B E[g qqᵀ] Bᵀ
            let cinv = DMatrix::from_row_slice(2, 2, &[cm[2], -cm[1], -cm[1], cm[0]]) / det;
            let wp = DMatrix::from_fn(d, 2, |k, c| if c == 0 { w1[(i, k)] } else { w1[(j, k)] });
            let b = &wp * &cinv * (sx2 / sd);
            let gq = DMatrix::from_row_slice(2, 2, &[mom[1], mom[2], mom[2], mom[3]]);
            let cmat = DMatrix::from_row_slice(2, 2, &[cm[0], cm[1], cm[1], cm[2]]);
            let inner = gq - cmat * mom[0];
            let mut blk = &b * inner * b.transpose();
            for k in 0..d {
                blk[(k, k)] += mom[0] * sx2;
            }
            Ok(blk * (w2[i] * w2[j]))
        })
        .collect::<Result<_>>()?;
    let mut a = DMatrix::zeros(n * d, n * d);
    for (&(i, j), blk) in pairs.iter().zip(&blocks) {
        a.view_mut((i * d, j * d), (d, d)).copy_from(blk);
        if i != j {
            a.view_mut((j * d, i * d), (d, d)).copy_from(&blk.transpose());
        }
    }
    Ok(a)
}

fn a_r_mc(w1: &DMatrix<f64>, w2: &DVector<f64>, act: Activation, cfg: &ModelConfig, n_mc: usize, seed: u64) -> DMatrix<f64> {
    let (n, d) = (cfg.n1, cfg.d);
    let sx = cfg.sigma_x2.sqrt();
    let sd = (d as f64).sqrt();
    let chunks = n_mc.div_ceil(CHUNK);
    let partials: Vec<DMatrix<f64>> = (0..chunks)
        .into_par_iter()
        .map(|c| {
            let len = CHUNK.min(n_mc - c * CHUNK);
            let mut r = rng::stream(seed, &[AR_STREAM, c as u64]);
            let x = DMatrix::from_fn(d, len, |_, _| sx * rng::normal(&mut r));
            let q = w1 * &x / sd;
            let g = DMatrix::from_fn(n * d, len, |row, s| {
                let (i, k) = (row / d, row % d);
                act.derivative(q[(i, s)]) * w2[i] * x[(k, s)]
            });
            &g * g.transpose()
        })
        .collect();
    let mut a = DMatrix::zeros(n * d, n * d);
    for p in partials {
        a += p;
    }
    a / n_mc as f64
}

/// Builds `A_R` for a prior draw of `(W1, w2)`, subtracts `D⁽²⁾ ⊗ I_d` with
/// `D⁽²⁾_ii = σ_x²(η_{1,i} − θ_{1,i}²)(w2_i)²`, removes the top `N + d + 2`
/// eigendirections of the difference and reports the remaining Frobenius
/// mass relative to `‖A_R‖_F`.
pub fn check_ar_decomposition(cfg: &ModelConfig, act: Activation, estimator: Estimator, seed: u64) -> Result<ArReport> {
    cfg.validate()?;
    estimator.check()?;
    if cfg.n1 > 40 || cfg.d > 40 {
        return Err(Error::InvalidConfig(format!(
            "A_R check is limited to n1, d <= 40 (got n1 = {}, d = {})",
            cfg.n1, cfg.d
        )));
    }
    let (n, d) = (cfg.n1, cfg.d);
    let w1 = sample_w1(cfg, seed, &[AR_STREAM, 0]);
    let w2 = sample_w2(cfg, seed, &[AR_STREAM, 1]);
    let a = match estimator {
        Estimator::Exact => a_r_exact(&w1, &w2, act, cfg)?,
        Estimator::MonteCarlo { n_mc } => a_r_mc(&w1, &w2, act, cfg, n_mc, rng::derive_seed(seed, &[AR_STREAM])),
    };
    let mut d2 = Vec::with_capacity(n);
    for i in 0..n {
        let vi = (cfg.sigma_x2 * w1.row(i).norm_squared() / d as f64).sqrt();
        let eta1 = gauss_expect(|x| act.derivative(x).powi(2), vi)?;
        let th = gauss_expect(|x| act.derivative(x), vi)?;
        d2.push((cfg.sigma_x2 * (eta1 - th * th) * w2[i] * w2[i]).max(0.0));
    }
    let mut gap = a.clone();
    for i in 0..n {
        for k in 0..d {
            gap[(i * d + k, i * d + k)] -= d2[i];
        }
    }
    let removed = (n + d + 2).min(n * d);
    let mut eig = sym_eigenvalues_desc((&gap + gap.transpose()) * 0.5)?;
    eig.sort_by(|a, b| b.abs().total_cmp(&a.abs()));
    let residual = eig[removed..].iter().map(|e| e * e).sum::<f64>().sqrt();
    let a_f = a.norm();
    Ok(ArReport {
        n1: n,
        d,
        d2,
        removed,
        a_r_frobenius: a_f,
        gap_frobenius: gap.norm(),
        residual_frobenius: residual,
        residual_ratio: if a_f > 0.0 { residual / a_f } else { 0.0 },
    })
}
