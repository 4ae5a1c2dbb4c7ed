//! Teacher–student data, SGD training, bias/variance estimates, the ridge
//! simulation and parameter sweeps.

use std::io::Write;

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::Serialize;

use crate::bounds::bound_two_layer_with;
use crate::error::{Error, Result};
use crate::fisher::{grad_two_layer_into, TwoLayerParams};
use crate::model::{constants_for, Activation, ModelConfig};
use crate::output::{fmt_f64, fmt_opt};
use crate::rng;

const TEACHER_STREAM: u64 = 1;
const DATA_STREAM: u64 = 2;
const INIT_STREAM: u64 = 3;
const SHUFFLE_STREAM: u64 = 4;
const TEST_STREAM: u64 = 5;
const RIDGE_STREAM: u64 = 6;

/// SGD and experiment sizes.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SgdConfig {
    pub epochs: usize,
    pub batch_size: usize,
    /// Learning rate is `lr_c / M`; `None` picks 0.5 for sigmoid and 0.03 otherwise.
    pub lr_c: Option<f64>,
    pub n_theta: usize,
    pub n_datasets: usize,
    pub n_test: usize,
    pub seed: u64,
}

impl Default for SgdConfig {
    fn default() -> Self {
        SgdConfig {
            epochs: 100,
            batch_size: 1,
            lr_c: None,
            n_theta: 10,
            n_datasets: 10,
            n_test: 2000,
            seed: 42,
        }
    }
}

impl SgdConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::InvalidConfig("epochs and batch_size must be at least 1".into()));
        }
        if self.n_theta == 0 || self.n_datasets == 0 || self.n_test == 0 {
            return Err(Error::InvalidConfig(
                "n_theta, n_datasets and n_test must be at least 1".into(),
            ));
        }
        if let Some(c) = self.lr_c {
            if !(c.is_finite() && c >= 0.0) {
                return Err(Error::InvalidConfig(format!("learning-rate constant must be >= 0, got {c}")));
            }
        }
        Ok(())
    }

    /// Learning rate for `act` with `m` training samples.
    pub fn learning_rate(&self, act: Activation, m: usize) -> f64 {
        let c = self.lr_c.unwrap_or(match act {
            Activation::Sigmoid => 0.5,
            _ => 0.03,
        });
        c / m as f64
    }
}

/// Averages over teachers, datasets and test points.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ExperimentResult {
    /// `E(ỹ − ŷ)²`, label noise included.
    pub gen_error: f64,
    /// `E(f_θ(x̃) − ŷ)²`.
    pub excess_error: f64,
    pub bias2: f64,
    pub variance: f64,
    pub n_runs: usize,
    /// Standard error of `gen_error`.
    pub stderr: f64,
}

/// Training inputs (`d×m`, one sample per column) and labels.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub x: DMatrix<f64>,
    pub y: DVector<f64>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }
}

/// Teacher weights drawn from the prior.
pub fn generate_teacher(cfg: &ModelConfig, seed: u64) -> Result<TwoLayerParams> {
    cfg.validate()?;
    let mut r = rng::stream(seed, &[TEACHER_STREAM]);
    Ok(TwoLayerParams::sample(cfg, &mut r))
}

/// `m` samples `x ~ N(0, σ_x²I)`, `y = f_θ(x) + ε`, `ε ~ N(0, σ_ε²)`.
pub fn generate_dataset(
    teacher: &TwoLayerParams,
    act: Activation,
    cfg: &ModelConfig,
    m: usize,
    seed: u64,
) -> Result<Dataset> {
    generate_dataset_with_noise(teacher, act, cfg, m, cfg.sigma_eps2, seed)
}

/// As [`generate_dataset`] with an explicit noise variance (0 allowed).
pub fn generate_dataset_with_noise(
    teacher: &TwoLayerParams,
    act: Activation,
    cfg: &ModelConfig,
    m: usize,
    noise_var: f64,
    seed: u64,
) -> Result<Dataset> {
    cfg.validate()?;
    teacher.check(cfg)?;
    if m == 0 {
        return Err(Error::InvalidConfig("dataset size must be at least 1".into()));
    }
    if !(noise_var.is_finite() && noise_var >= 0.0) {
        return Err(Error::InvalidConfig(format!("noise variance must be >= 0, got {noise_var}")));
    }
    let mut r = rng::stream(seed, &[DATA_STREAM]);
    let sx = cfg.sigma_x2.sqrt();
    let se = noise_var.sqrt();
    let x = DMatrix::from_fn(cfg.d, m, |_, _| sx * rng::normal(&mut r));
    let mut y = DVector::zeros(m);
    for k in 0..m {
        y[k] = teacher.forward(act, x.column(k).as_slice()) + se * rng::normal(&mut r);
    }
    Ok(Dataset { x, y })
}

/// Plain SGD on `(y − ŷ)²`, `sgd.epochs` passes with a fresh shuffle each
/// epoch. Aborts if the epoch training loss exceeds 10⁶ times its initial
/// value.
pub fn train_sgd(
    init: &TwoLayerParams,
    act: Activation,
    data: &Dataset,
    sgd: &SgdConfig,
    seed: u64,
) -> Result<TwoLayerParams> {
    sgd.validate()?;
    let lr = sgd.learning_rate(act, data.len());
    train_sgd_with_lr(init, act, data, sgd, lr, seed)
}

/// [`train_sgd`] with an explicit learning rate.
pub fn train_sgd_with_lr(
    init: &TwoLayerParams,
    act: Activation,
    data: &Dataset,
    sgd: &SgdConfig,
    lr: f64,
    seed: u64,
) -> Result<TwoLayerParams> {
    sgd.validate()?;
    if data.x.nrows() != init.d() || data.x.ncols() != data.len() {
        return Err(Error::DimensionMismatch(format!(
            "data is {}x{} with {} labels, weights expect d = {}",
            data.x.nrows(),
            data.x.ncols(),
            data.len(),
            init.d()
        )));
    }
    if data.is_empty() {
        return Err(Error::InvalidConfig("empty dataset".into()));
    }
    if !(lr.is_finite() && lr >= 0.0) {
        return Err(Error::InvalidConfig(format!("learning rate must be >= 0, got {lr}")));
    }
    if lr == 0.0 {
        return Ok(init.clone());
    }
    let m = data.len();
    let (n, d) = (init.n1(), init.d());
    let mut flat = init.to_flat();
    let mut grad = vec![0.0; flat.len()];
    let mut step = vec![0.0; flat.len()];
    let mut params = init.clone();
    let initial = training_loss(&params, act, data);
    let mut order: Vec<usize> = (0..m).collect();
    let mut r = rng::stream(seed, &[SHUFFLE_STREAM]);
    for _epoch in 0..sgd.epochs {
        order.shuffle(&mut r);
        let mut running = 0.0;
        for batch in order.chunks(sgd.batch_size) {
            step.iter_mut().for_each(|s| *s = 0.0);
            for &k in batch {
                let x = data.x.column(k);
                let x = x.as_slice();
                let resid = data.y[k] - params.forward(act, x);
                running += resid * resid;
                grad_two_layer_into(&params, act, x, &mut grad);
                // d/dθ (y − f)² = −2(y − f)∇f
                let c = -2.0 * resid / batch.len() as f64;
                step.iter_mut().zip(&grad).for_each(|(s, g)| *s += c * g);
            }
            flat.iter_mut().zip(&step).for_each(|(w, s)| *w -= lr * s);
            // write back
            for i in 0..n {
                for k in 0..d {
                    params.w1[(i, k)] = flat[i * d + k];
                }
                params.w2[i] = flat[n * d + i];
            }
        }
        let epoch_loss = running / m as f64;
        if !epoch_loss.is_finite() || epoch_loss > 1e6 * initial.max(f64::MIN_POSITIVE) {
            return Err(Error::numerical(
                "train_sgd",
                format!("training loss diverged: {epoch_loss:e} vs initial {initial:e}"),
            ));
        }
    }
    Ok(params)
}

/// Mean squared training residual.
pub fn training_loss(params: &TwoLayerParams, act: Activation, data: &Dataset) -> f64 {
    (0..data.len())
        .map(|k| {
            let r = data.y[k] - params.forward(act, data.x.column(k).as_slice());
            r * r
        })
        .sum::<f64>()
        / data.len() as f64
}

/// Per-teacher evaluation: test error, bias² and variance of `students`
/// (one per dataset) against `teacher`, on `n_test` fresh inputs. The
/// irreducible `σ_ε²` is added to the excess error exactly.
pub fn evaluate(
    teacher: &TwoLayerParams,
    students: &[TwoLayerParams],
    act: Activation,
    cfg: &ModelConfig,
    n_test: usize,
    seed: u64,
) -> Result<ExperimentResult> {
    cfg.validate()?;
    teacher.check(cfg)?;
    if students.is_empty() {
        return Err(Error::InvalidConfig("need at least one student".into()));
    }
    for s in students {
        s.check(cfg)?;
    }
    if n_test == 0 {
        return Err(Error::InvalidConfig("n_test must be at least 1".into()));
    }
    let mut r = rng::stream(seed, &[TEST_STREAM]);
    let sx = cfg.sigma_x2.sqrt();
    let mut x = vec![0.0; cfg.d];
    let ns = students.len() as f64;
    let (mut excess, mut excess_sq, mut bias2) = (0.0, 0.0, 0.0);
    let mut preds = vec![0.0; students.len()];
    for _ in 0..n_test {
        x.iter_mut().for_each(|v| *v = sx * rng::normal(&mut r));
        let f = teacher.forward(act, &x);
        for (p, s) in preds.iter_mut().zip(students) {
            *p = s.forward(act, &x);
        }
        let mean = preds.iter().sum::<f64>() / ns;
        let e = preds.iter().map(|p| (f - p).powi(2)).sum::<f64>() / ns;
        excess += e;
        excess_sq += e * e;
        bias2 += (f - mean).powi(2);
    }
    let nt = n_test as f64;
    let excess = excess / nt;
    let bias2 = bias2 / nt;
    let var_e = (excess_sq / nt - excess * excess).max(0.0);
    Ok(ExperimentResult {
        gen_error: excess + cfg.sigma_eps2,
        excess_error: excess,
        bias2,
        variance: excess - bias2,
        n_runs: students.len(),
        stderr: (var_e / nt).sqrt(),
    })
}

/// Full teacher–student experiment: `n_theta` teachers × `n_datasets`
/// datasets of size `cfg.m`, each trained from a fresh prior draw. Teacher
/// results are averaged; `stderr` is the spread across teachers.
pub fn run_teacher_student(cfg: &ModelConfig, act: Activation, sgd: &SgdConfig) -> Result<ExperimentResult> {
    cfg.validate()?;
    sgd.validate()?;
    let jobs: Vec<(usize, usize)> = (0..sgd.n_theta)
        .flat_map(|t| (0..sgd.n_datasets).map(move |k| (t, k)))
        .collect();
    let teachers: Vec<TwoLayerParams> = (0..sgd.n_theta)
        .map(|t| generate_teacher(cfg, rng::derive_seed(sgd.seed, &[t as u64])))
        .collect::<Result<_>>()?;
    let students: Vec<TwoLayerParams> = jobs
        .par_iter()
        .map(|&(t, k)| {
            let run_seed = rng::derive_seed(sgd.seed, &[t as u64, k as u64]);
            let data = generate_dataset(&teachers[t], act, cfg, cfg.m, run_seed)?;
            let mut r = rng::stream(run_seed, &[INIT_STREAM]);
            let init = TwoLayerParams::sample(cfg, &mut r);
            train_sgd(&init, act, &data, sgd, run_seed)
        })
        .collect::<Result<_>>()?;
    let per_teacher: Vec<ExperimentResult> = (0..sgd.n_theta)
        .into_par_iter()
        .map(|t| {
            let group = &students[t * sgd.n_datasets..(t + 1) * sgd.n_datasets];
            let test_seed = rng::derive_seed(sgd.seed, &[t as u64, u64::MAX]);
            evaluate(&teachers[t], group, act, cfg, sgd.n_test, test_seed)
        })
        .collect::<Result<_>>()?;
    Ok(aggregate(&per_teacher))
}

fn aggregate(runs: &[ExperimentResult]) -> ExperimentResult {
    let n = runs.len() as f64;
    let mean = |f: fn(&ExperimentResult) -> f64| runs.iter().map(f).sum::<f64>() / n;
    let gen = mean(|r| r.gen_error);
    let stderr = if runs.len() > 1 {
        let var = runs.iter().map(|r| (r.gen_error - gen).powi(2)).sum::<f64>() / (n - 1.0);
        (var / n).sqrt()
    } else {
        runs[0].stderr
    };
    ExperimentResult {
        gen_error: gen,
        excess_error: mean(|r| r.excess_error),
        bias2: mean(|r| r.bias2),
        variance: mean(|r| r.variance),
        n_runs: runs.iter().map(|r| r.n_runs).sum(),
        stderr,
    }
}

/// Mean and standard error of a simulated test error.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SimulationSummary {
    pub mean: f64,
    pub stderr: f64,
    pub trials: usize,
}

/// Simulated ridge regression on `y = θᵀx/√d + ε`, `θ ~ N(0, I/α)`:
/// `θ̂ = (XXᵀ/d + (λ/γ₀)I)⁻¹ X y/√d`, error `σ_x²‖θ − θ̂‖²/d` per trial.
/// `λ` is on the scale of `XXᵀ/M`, the same as in [`crate::bounds::ridge_error`].
pub fn simulate_ridge(cfg: &ModelConfig, lambda: f64, trials: usize, seed: u64) -> Result<SimulationSummary> {
    cfg.validate()?;
    if !(lambda.is_finite() && lambda > 0.0) {
        return Err(Error::InvalidConfig(format!("lambda must be positive, got {lambda}")));
    }
    if trials < 2 {
        return Err(Error::InvalidConfig("need at least two trials".into()));
    }
    let (d, m) = (cfg.d, cfg.m);
    let sd = (d as f64).sqrt();
    let shift = lambda / cfg.gamma0();
    let errs: Vec<f64> = (0..trials)
        .into_par_iter()
        .map(|t| {
            let mut r = rng::stream(seed, &[RIDGE_STREAM, t as u64]);
            let theta = DVector::from_fn(d, |_, _| rng::normal(&mut r) / cfg.alpha.sqrt());
            let x = DMatrix::from_fn(d, m, |_, _| cfg.sigma_x2.sqrt() * rng::normal(&mut r));
            let noise = DVector::from_fn(m, |_, _| cfg.sigma_eps2.sqrt() * rng::normal(&mut r));
            let y = x.tr_mul(&theta) / sd + noise;
            let mut a = &x * x.transpose() / d as f64;
            for i in 0..d {
                a[(i, i)] += shift;
            }
            let rhs = &x * y / sd;
            let chol = a
                .cholesky()
                .ok_or_else(|| Error::numerical("simulate_ridge", "ridge system is not positive definite"))?;
            let est = chol.solve(&rhs);
            Ok(cfg.sigma_x2 * (theta - est).norm_squared() / d as f64)
        })
        .collect::<Result<_>>()?;
    Ok(summarize(&errs))
}

fn summarize(xs: &[f64]) -> SimulationSummary {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    SimulationSummary {
        mean,
        stderr: (var / n).sqrt(),
        trials: xs.len(),
    }
}

/// Parameter varied by a sweep.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum SweepKind {
    Snr,
    Gamma0,
    Beta1,
}

impl SweepKind {
    pub fn name(self) -> &'static str {
        match self {
            SweepKind::Snr => "snr",
            SweepKind::Gamma0 => "gamma0",
            SweepKind::Beta1 => "beta1",
        }
    }

    /// Config at grid value `value`: SNR sets σ_ε²; γ₀ sets `m = round(d/γ₀)`;
    /// β₁ sets `n1 = round(β₁d)`.
    pub fn apply(self, template: &ModelConfig, value: f64) -> Result<ModelConfig> {
        if !value.is_finite() {
            return Err(Error::InvalidConfig(format!("grid value must be finite, got {value}")));
        }
        let mut c = *template;
        match self {
            SweepKind::Snr => return template.with_snr_db(value),
            SweepKind::Gamma0 => {
                if value <= 0.0 {
                    return Err(Error::InvalidConfig(format!("gamma0 must be positive, got {value}")));
                }
                c.m = ((template.d as f64 / value).round() as usize).max(1);
            }
            SweepKind::Beta1 => {
                if value <= 0.0 {
                    return Err(Error::InvalidConfig(format!("beta1 must be positive, got {value}")));
                }
                c.n1 = ((value * template.d as f64).round() as usize).max(1);
            }
        }
        c.validate()?;
        Ok(c)
    }
}

impl std::str::FromStr for SweepKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "snr" => Ok(SweepKind::Snr),
            "gamma0" => Ok(SweepKind::Gamma0),
            "beta1" => Ok(SweepKind::Beta1),
            other => Err(Error::InvalidConfig(format!("unknown sweep '{other}'"))),
        }
    }
}

/// One grid point of a sweep.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepRow {
    pub sweep_param: SweepKind,
    pub value: f64,
    pub b1: Option<f64>,
    pub b2: Option<f64>,
    pub bound_max: Option<f64>,
    pub sgd: Option<ExperimentResult>,
    /// `"ok"` or `"error: ..."`.
    pub status: String,
}

fn sweep_point(
    kind: SweepKind,
    value: f64,
    template: &ModelConfig,
    act: Activation,
    sgd: Option<&SgdConfig>,
    index: usize,
) -> SweepRow {
    let mut row = SweepRow {
        sweep_param: kind,
        value,
        b1: None,
        b2: None,
        bound_max: None,
        sgd: None,
        status: "ok".into(),
    };
    let cfg = match kind.apply(template, value) {
        Ok(c) => c,
        Err(e) => {
            row.status = format!("error: {e}");
            return row;
        }
    };
    match constants_for(&cfg, act).and_then(|k| bound_two_layer_with(&cfg, &k)) {
        Ok(r) => {
            row.b1 = r.b1;
            row.b2 = r.b2;
            row.bound_max = Some(r.value);
        }
        Err(e) => {
            row.status = format!("error: {e}");
            return row;
        }
    }
    if let Some(s) = sgd {
        let mut s = *s;
        s.seed = rng::derive_seed(s.seed, &[index as u64]);
        match run_teacher_student(&cfg, act, &s) {
            Ok(r) => row.sgd = Some(r),
            Err(e) => row.status = format!("error: {e}"),
        }
    }
    row
}

/// Bounds (and optionally SGD metrics) at every grid point. Failures are
/// recorded in `status` and the sweep continues.
pub fn sweep(
    kind: SweepKind,
    grid: &[f64],
    template: &ModelConfig,
    act: Activation,
    sgd: Option<&SgdConfig>,
) -> Result<Vec<SweepRow>> {
    if grid.is_empty() {
        return Err(Error::InvalidConfig("sweep grid is empty".into()));
    }
    template.validate()?;
    if let Some(s) = sgd {
        s.validate()?;
    }
    Ok(grid
        .iter()
        .enumerate()
        .map(|(i, &v)| sweep_point(kind, v, template, act, sgd, i))
        .collect())
}

/// CSV header of [`write_sweep_csv`].
pub const SWEEP_HEADER: &str = "sweep_param,value,b1,b2,bound_max,sgd_gen_error,sgd_stderr,sgd_bias2,status";

/// Write sweep rows as CSV; missing values are empty fields.
pub fn write_sweep_csv<W: Write>(rows: &[SweepRow], mut w: W) -> Result<()> {
    writeln!(w, "{SWEEP_HEADER}")?;
    for r in rows {
        let status = if r.status.contains([',', '"', '\n']) {
            format!("\"{}\"", r.status.replace('"', "\"\"").replace('\n', " "))
        } else {
            r.status.clone()
        };
        writeln!(
            w,
            "{},{},{},{},{},{},{},{},{}",
            r.sweep_param.name(),
            fmt_f64(r.value),
            fmt_opt(r.b1),
            fmt_opt(r.b2),
            fmt_opt(r.bound_max),
            fmt_opt(r.sgd.map(|s| s.gen_error)),
            fmt_opt(r.sgd.map(|s| s.stderr)),
            fmt_opt(r.sgd.map(|s| s.bias2)),
            status
        )?;
    }
    Ok(())
}

/// Evenly spaced grid of `points` values from `from` to `to` inclusive.
pub fn linear_grid(from: f64, to: f64, points: usize) -> Result<Vec<f64>> {
    if points == 0 || !from.is_finite() || !to.is_finite() {
        return Err(Error::InvalidConfig("grid needs finite ends and at least one point".into()));
    }
    if points == 1 {
        return Ok(vec![from]);
    }
    let step = (to - from) / (points - 1) as f64;
    Ok((0..points).map(|i| from + step * i as f64).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bounds::bound_two_layer;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn small_cfg() -> ModelConfig {
        ModelConfig::new(6, 5, 20, 1.0, 0.1, 1.0, 1.0).unwrap()
    }

    #[test]
    fn teacher_is_deterministic() {
        let c = small_cfg();
        assert_eq!(generate_teacher(&c, 5).unwrap(), generate_teacher(&c, 5).unwrap());
        assert_ne!(generate_teacher(&c, 5).unwrap(), generate_teacher(&c, 6).unwrap());
    }

    #[test]
    fn noiseless_labels_equal_network_output() {
        let c = small_cfg();
        let t = generate_teacher(&c, 1).unwrap();
        let data = generate_dataset_with_noise(&t, Activation::Tanh, &c, 30, 0.0, 2).unwrap();
        for k in 0..30 {
            assert_eq!(data.y[k], t.forward(Activation::Tanh, data.x.column(k).as_slice()));
        }
    }

    #[test]
    fn zero_rate_returns_init() {
        let c = small_cfg();
        let t = generate_teacher(&c, 1).unwrap();
        let data = generate_dataset(&t, Activation::Tanh, &c, c.m, 2).unwrap();
        let init = generate_teacher(&c, 9).unwrap();
        let sgd = SgdConfig {
            lr_c: Some(0.0),
            epochs: 3,
            ..Default::default()
        };
        assert_eq!(train_sgd(&init, Activation::Tanh, &data, &sgd, 3).unwrap(), init);
    }

    #[test]
    fn teacher_is_stationary_without_noise() {
        let c = small_cfg();
        let t = generate_teacher(&c, 1).unwrap();
        let data = generate_dataset_with_noise(&t, Activation::Sigmoid, &c, c.m, 0.0, 2).unwrap();
        let sgd = SgdConfig {
            epochs: 5,
            ..Default::default()
        };
        let out = train_sgd(&t, Activation::Sigmoid, &data, &sgd, 3).unwrap();
        assert_eq!(out, t);
    }

    #[test]
    fn divergence_is_detected() {
        let c = small_cfg();
        let t = generate_teacher(&c, 1).unwrap();
        let data = generate_dataset(&t, Activation::Linear, &c, c.m, 2).unwrap();
        let init = generate_teacher(&c, 4).unwrap();
        let sgd = SgdConfig {
            epochs: 50,
            ..Default::default()
        };
        let e = train_sgd_with_lr(&init, Activation::Linear, &data, &sgd, 50.0, 3).unwrap_err();
        assert!(e.is_numerical());
    }

    #[test]
    fn perfect_students_have_zero_error() {
        let c = ModelConfig {
            sigma_eps2: 1e-300,
            ..small_cfg()
        };
        let t = generate_teacher(&c, 1).unwrap();
        let r = evaluate(&t, &[t.clone(), t.clone()], Activation::Tanh, &c, 50, 3).unwrap();
        assert!(r.excess_error == 0.0 && r.bias2 == 0.0);
        assert!(r.gen_error <= 1e-299);
    }

    #[test]
    fn variance_identity() {
        let c = small_cfg();
        let t = generate_teacher(&c, 1).unwrap();
        let s: Vec<_> = (10..14).map(|k| generate_teacher(&c, k).unwrap()).collect();
        let r = evaluate(&t, &s, Activation::Tanh, &c, 200, 3).unwrap();
        assert_abs_diff_eq!(r.gen_error - r.bias2 - c.sigma_eps2, r.variance, epsilon = 1e-12);
        assert!(r.variance >= 0.0);
    }

    #[test]
    fn sweep_kinds_apply() {
        let c = ModelConfig::new(30, 30, 30, 1.0, 0.2, 1.0, 1.0).unwrap();
        assert_eq!(SweepKind::Gamma0.apply(&c, 0.25).unwrap().m, 120);
        assert_eq!(SweepKind::Beta1.apply(&c, 2.0).unwrap().n1, 60);
        let s = SweepKind::Snr.apply(&c, 10.0).unwrap();
        assert_abs_diff_eq!(crate::model::snr_db(&s).unwrap(), 10.0, epsilon = 1e-12);
        assert!(SweepKind::Gamma0.apply(&c, -1.0).is_err());
    }

    #[test]
    fn singleton_sweep_matches_direct_call() {
        let c = ModelConfig::new(50, 50, 50, 1.0, 0.1, 1.0, 2.0).unwrap();
        let rows = sweep(SweepKind::Gamma0, &[0.5], &c, Activation::Tanh, None).unwrap();
        assert_eq!(rows.len(), 1);
        let direct = bound_two_layer(&SweepKind::Gamma0.apply(&c, 0.5).unwrap(), Activation::Tanh).unwrap();
        assert_eq!(rows[0].bound_max, Some(direct.value));
        assert_eq!(rows[0].b1, direct.b1);
        assert_eq!(rows[0].status, "ok");
    }

    #[test]
    fn failed_point_does_not_stop_sweep() {
        let c = ModelConfig::new(50, 50, 50, 1.0, 0.1, 1.0, 2.0).unwrap();
        let rows = sweep(SweepKind::Gamma0, &[0.5, -1.0, 2.0], &c, Activation::Tanh, None).unwrap();
        assert_eq!(rows.len(), 3);
        assert!(rows[1].status.starts_with("error"));
        assert!(rows[2].bound_max.is_some());
        let mut buf = Vec::new();
        write_sweep_csv(&rows, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], SWEEP_HEADER);
        assert_eq!(lines.len(), 4);
        assert!(lines.iter().skip(1).all(|l| l.split(',').count() >= 9));
        assert!(sweep(SweepKind::Snr, &[], &c, Activation::Tanh, None).is_err());
    }

    #[test]
    fn grids() {
        assert_eq!(linear_grid(0.0, 1.0, 3).unwrap(), vec![0.0, 0.5, 1.0]);
        assert_eq!(linear_grid(2.0, 5.0, 1).unwrap(), vec![2.0]);
        assert!(linear_grid(0.0, 1.0, 0).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        #[test]
        fn bias_variance_split(seed in 0u64..10_000, k in 1usize..5) {
            let c = small_cfg();
            let t = generate_teacher(&c, seed).unwrap();
            let s: Vec<_> = (0..k).map(|j| generate_teacher(&c, seed + 1 + j as u64).unwrap()).collect();
            let r = evaluate(&t, &s, Activation::Sigmoid, &c, 50, seed).unwrap();
            prop_assert!(r.bias2 >= 0.0 && r.variance >= -1e-12);
            prop_assert!((r.excess_error - r.bias2 - r.variance).abs() <= 1e-12);
            prop_assert!(r.gen_error >= c.sigma_eps2);
        }

        #[test]
        fn sgd_is_deterministic(seed in 0u64..10_000) {
            let c = small_cfg();
            let t = generate_teacher(&c, seed).unwrap();
            let data = generate_dataset(&t, Activation::Tanh, &c, c.m, seed).unwrap();
            let sgd = SgdConfig { epochs: 3, ..Default::default() };
            let a = train_sgd(&t, Activation::Tanh, &data, &sgd, seed).unwrap();
            let b = train_sgd(&t, Activation::Tanh, &data, &sgd, seed).unwrap();
            prop_assert_eq!(a, b);
        }

        #[test]
        fn gamma_sweep_keeps_ratio(g in 0.1f64..8.0) {
            let c = ModelConfig::new(40, 40, 40, 1.0, 0.1, 1.0, 1.0).unwrap();
            let out = SweepKind::Gamma0.apply(&c, g).unwrap();
            prop_assert_eq!(out.m, ((40.0 / g).round() as usize).max(1));
            prop_assert_eq!(out.d, 40);
        }
    }
}
