//! Lower bounds on the generalization error and the ridge-regression oracle.

use num_complex::Complex64;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::model::{constants_for, Activation, GaussConstants, ModelConfig};
use crate::mp_law::{mp_integrate, MPLaw};
use crate::stieltjes::{solve_complex, solve_fixed_point, StieltjesPair};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum BoundKind {
    Unbiased,
    LinearAny,
    B1,
    B2,
    TwoLayerMax,
    RidgeError,
}

/// Non-fatal flags attached to a report.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Warning {
    /// relu is not twice differentiable; the asymptotic derivation assumes it is.
    ReluNotSmooth,
    /// The two-layer bound is reported as max(B1, B2), without the extra σ_ε²
    /// factor some statements of the result carry.
    SigmaEpsPrefactorOmitted,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BoundReport {
    pub kind: BoundKind,
    pub value: f64,
    pub cfg: ModelConfig,
    pub consts: Option<GaussConstants>,
    /// Fixed-point solution behind a B2 value.
    pub stieltjes: Option<StieltjesPair>,
    /// B1 and B2 values behind a two-layer max.
    pub b1: Option<f64>,
    pub b2: Option<f64>,
    pub warnings: Vec<Warning>,
}

impl BoundReport {
    fn new(kind: BoundKind, value: f64, cfg: &ModelConfig) -> Self {
        BoundReport {
            kind,
            value,
            cfg: *cfg,
            consts: None,
            stieltjes: None,
            b1: None,
            b2: None,
            warnings: Vec::new(),
        }
    }

    fn with_consts(mut self, consts: &GaussConstants) -> Self {
        self.consts = Some(*consts);
        if !consts.activation.is_smooth() {
            self.warnings.push(Warning::ReluNotSmooth);
        }
        self
    }
}

fn nonnegative(kind: &'static str, value: f64) -> Result<f64> {
    if !value.is_finite() {
        return Err(Error::numerical(kind, format!("bound evaluated to {value}")));
    }
    if value < -1e-12 {
        return Err(Error::numerical(kind, format!("bound evaluated to negative {value}")));
    }
    Ok(value.max(0.0))
}

/// `σ_ε² · rank / M`.
pub fn bound_unbiased(expected_rank: f64, m: usize, sigma_eps2: f64) -> Result<f64> {
    if m == 0 {
        return Err(Error::InvalidConfig("m must be at least 1".into()));
    }
    if !(expected_rank.is_finite() && expected_rank >= 0.0) {
        return Err(Error::InvalidConfig(format!("rank must be nonnegative, got {expected_rank}")));
    }
    if !(sigma_eps2.is_finite() && sigma_eps2 > 0.0) {
        return Err(Error::InvalidConfig(format!("sigma_eps2 must be positive, got {sigma_eps2}")));
    }
    Ok(sigma_eps2 * expected_rank / m as f64)
}

/// Model whose Fisher rank feeds the unbiased bound.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum RankModel {
    LinearRegression,
    LinearTwoLayer,
    NonlinearTwoLayer,
}

/// Asymptotic Fisher rank: `d`, `d`, or `n1·d`.
pub fn rank_for_model(model: RankModel, cfg: &ModelConfig) -> Result<f64> {
    cfg.validate()?;
    Ok(match model {
        RankModel::LinearRegression | RankModel::LinearTwoLayer => cfg.d as f64,
        RankModel::NonlinearTwoLayer => cfg.n1 as f64 * cfg.d as f64,
    })
}

/// Unbiased bound report for `model`.
pub fn bound_unbiased_for(model: RankModel, cfg: &ModelConfig) -> Result<BoundReport> {
    let rank = rank_for_model(model, cfg)?;
    let v = bound_unbiased(rank, cfg.m, cfg.sigma_eps2)?;
    Ok(BoundReport::new(BoundKind::Unbiased, v, cfg))
}

/// Bound for any estimator in linear regression:
/// `σ_ε²σ_x² ∫ (s/γ₀ + ασ_ε²)⁻¹ dρ_{γ₀}(s)`.
pub fn bound_linear_any(cfg: &ModelConfig) -> Result<BoundReport> {
    cfg.validate()?;
    let g0 = cfg.gamma0();
    let law = MPLaw::new(g0)?;
    let a = cfg.alpha * cfg.sigma_eps2;
    let integral = mp_integrate(&law, |s| 1.0 / (s / g0 + a))?;
    let v = nonnegative("bound_linear_any", cfg.sigma_eps2 * cfg.sigma_x2 * integral)?;
    Ok(BoundReport::new(BoundKind::LinearAny, v, cfg))
}

/// Asymptotic ridge error `σ_x²γ₀ ∫ (λ²/(γ₀α) + σ_ε²s)/(s+λ)² dρ_{γ₀}(s)`.
pub fn ridge_error(cfg: &ModelConfig, lambda: f64) -> Result<f64> {
    cfg.validate()?;
    if !(lambda.is_finite() && lambda > 0.0) {
        return Err(Error::InvalidConfig(format!("lambda must be positive, got {lambda}")));
    }
    let g0 = cfg.gamma0();
    let law = MPLaw::new(g0)?;
    let bias = lambda * lambda / (g0 * cfg.alpha);
    let integral = mp_integrate(&law, |s| (bias + cfg.sigma_eps2 * s) / (s + lambda).powi(2))?;
    nonnegative("ridge_error", cfg.sigma_x2 * g0 * integral)
}

/// Optimal ridge parameter `σ_ε²αγ₀`.
pub fn ridge_lambda_opt(cfg: &ModelConfig) -> Result<f64> {
    cfg.validate()?;
    Ok(cfg.sigma_eps2 * cfg.alpha * cfg.gamma0())
}

/// Report wrapper around [`ridge_error`].
pub fn ridge_report(cfg: &ModelConfig, lambda: f64) -> Result<BoundReport> {
    let v = ridge_error(cfg, lambda)?;
    Ok(BoundReport::new(BoundKind::RidgeError, v, cfg))
}

/// First-layer bound
/// `σ_ε²θ₁₁ ∫ (1 + θ₁₁(1−γ₀⁻¹)s/(σ_ε²α₂)) / (θ₁₁s + α₂σ_ε²) dρ_{1/γ₀}(s)`.
/// Does not depend on `n1`.
pub fn bound_b1(cfg: &ModelConfig, consts: &GaussConstants) -> Result<BoundReport> {
    cfg.validate()?;
    let g0 = cfg.gamma0();
    let th = consts.theta11;
    let se = cfg.sigma_eps2;
    let a2 = cfg.alpha2;
    let law = MPLaw::new(1.0 / g0)?;
    let integral = mp_integrate(&law, |s| {
        (1.0 + th * (1.0 - 1.0 / g0) * s / (se * a2)) / (th * s + a2 * se)
    })?;
    let v = nonnegative("bound_b1", se * th * integral)?;
    Ok(BoundReport::new(BoundKind::B1, v, cfg).with_consts(consts))
}

/// The same quantity before the change of measure:
/// `(θ₁₁/α₂)(1 − (θ₁₁/γ₀) ∫ s/(θ₁₁s + α₂σ_ε²) dρ_{1/γ₀}(s))`.
pub fn b1_prelimit(cfg: &ModelConfig, consts: &GaussConstants) -> Result<f64> {
    cfg.validate()?;
    let g0 = cfg.gamma0();
    let th = consts.theta11;
    let law = MPLaw::new(1.0 / g0)?;
    let integral = mp_integrate(&law, |s| s / (th * s + cfg.alpha2 * cfg.sigma_eps2))?;
    Ok(th / cfg.alpha2 * (1.0 - th / g0 * integral))
}

/// Second-layer bound
/// `(σ_ε/√(α₂β₁)) a₁ (θ₁₁/(1+θ₁₁a₁a₂) + η₀ − θ₁₁)` with `(a₁, a₂)` the
/// real fixed point at `u_c = σ_ε√(α₂β₁)`.
pub fn bound_b2(cfg: &ModelConfig, consts: &GaussConstants) -> Result<BoundReport> {
    cfg.validate()?;
    let u = cfg.u_c();
    let pair = solve_fixed_point(consts, cfg.beta1(), cfg.gamma0(), u)?;
    let th = consts.theta11;
    let value = cfg.sigma_eps2 / u
        * pair.a1
        * (th / (1.0 + th * pair.a1 * pair.a2) + consts.eta0 - th);
    let v = nonnegative("bound_b2", value)?;
    let mut r = BoundReport::new(BoundKind::B2, v, cfg).with_consts(consts);
    r.stieltjes = Some(pair);
    Ok(r)
}

/// B2 evaluated from the complex solution at `ξ = iu_c`:
/// `−(σ_ε²/u_c)·i·m₁·(θ₁₁/(1−θ₁₁m₁m₂) + η₀ − θ₁₁)`. The imaginary part
/// vanishes in exact arithmetic.
pub fn b2_complex(cfg: &ModelConfig, consts: &GaussConstants) -> Result<Complex64> {
    cfg.validate()?;
    let u = cfg.u_c();
    let (m1, m2) = solve_complex(
        consts,
        cfg.beta1(),
        cfg.gamma0(),
        Complex64::new(0.0, u),
        0.0,
        0.0,
    )?;
    let th = consts.theta11;
    let i = Complex64::new(0.0, 1.0);
    Ok(-(cfg.sigma_eps2 / u) * i * m1 * (th / (1.0 - th * m1 * m2) + consts.eta0 - th))
}

/// `max(B1, B2)` for a two-layer network with activation `act`.
pub fn bound_two_layer(cfg: &ModelConfig, act: Activation) -> Result<BoundReport> {
    let consts = constants_for(cfg, act)?;
    bound_two_layer_with(cfg, &consts)
}

/// `max(B1, B2)` with precomputed constants.
pub fn bound_two_layer_with(cfg: &ModelConfig, consts: &GaussConstants) -> Result<BoundReport> {
    let b1 = bound_b1(cfg, consts)?;
    let b2 = bound_b2(cfg, consts)?;
    let mut r = BoundReport::new(BoundKind::TwoLayerMax, b1.value.max(b2.value), cfg).with_consts(consts);
    r.b1 = Some(b1.value);
    r.b2 = Some(b2.value);
    r.stieltjes = b2.stieltjes;
    r.warnings.push(Warning::SigmaEpsPrefactorOmitted);
    Ok(r)
}
