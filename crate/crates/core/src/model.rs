//! Model parameters, activations and Gaussian-expectation constants.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::quadrature::{default_normal_rule, normal_panel_rule, panels_for_scale, QuadratureRule};

/// Pointwise nonlinearity of the hidden layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Linear,
    Sigmoid,
    Tanh,
    Relu,
}

impl Activation {
    pub const ALL: [Activation; 4] = [
        Activation::Linear,
        Activation::Sigmoid,
        Activation::Tanh,
        Activation::Relu,
    ];

    #[inline]
    pub fn value(self, x: f64) -> f64 {
        match self {
            Activation::Linear => x,
            Activation::Sigmoid => sigmoid(x),
            Activation::Tanh => x.tanh(),
            Activation::Relu => x.max(0.0),
        }
    }

    /// First derivative; relu'(0) is 0.
    #[inline]
    pub fn derivative(self, x: f64) -> f64 {
        match self {
            Activation::Linear => 1.0,
            Activation::Sigmoid => {
                let s = sigmoid(x);
                s * (1.0 - s)
            }
            Activation::Tanh => {
                let t = x.tanh();
                1.0 - t * t
            }
            Activation::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
        }
    }

    /// Whether the activation has the smoothness the asymptotic results assume.
    pub fn is_smooth(self) -> bool {
        !matches!(self, Activation::Relu)
    }

    pub fn name(self) -> &'static str {
        match self {
            Activation::Linear => "linear",
            Activation::Sigmoid => "sigmoid",
            Activation::Tanh => "tanh",
            Activation::Relu => "relu",
        }
    }
}

#[inline]
fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl fmt::Display for Activation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Activation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "linear" | "identity" => Ok(Activation::Linear),
            "sigmoid" => Ok(Activation::Sigmoid),
            "tanh" => Ok(Activation::Tanh),
            "relu" => Ok(Activation::Relu),
            other => Err(Error::InvalidConfig(format!(
                "unknown activation '{other}' (expected linear, sigmoid, tanh or relu)"
            ))),
        }
    }
}

/// Scalar parameters of the data-generating model.
///
/// `beta1 = n1/d` and `gamma0 = d/m` are computed on demand.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ModelConfig {
    pub d: usize,
    pub n1: usize,
    pub m: usize,
    pub sigma_x2: f64,
    pub sigma_eps2: f64,
    pub alpha: f64,
    pub alpha2: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            d: 50,
            n1: 50,
            m: 50,
            sigma_x2: 1.0,
            sigma_eps2: 0.1,
            alpha: 1.0,
            alpha2: 1.0,
        }
    }
}

impl ModelConfig {
    /// Validated constructor.
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        d: usize,
        n1: usize,
        m: usize,
        sigma_x2: f64,
        sigma_eps2: f64,
        alpha: f64,
        alpha2: f64,
    ) -> Result<Self> {
        let cfg = ModelConfig {
            d,
            n1,
            m,
            sigma_x2,
            sigma_eps2,
            alpha,
            alpha2,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("d", self.d), ("n1", self.n1), ("m", self.m)] {
            if v == 0 {
                return Err(Error::InvalidConfig(format!("{name} must be at least 1")));
            }
        }
        for (name, v) in [
            ("sigma_x2", self.sigma_x2),
            ("sigma_eps2", self.sigma_eps2),
            ("alpha", self.alpha),
            ("alpha2", self.alpha2),
        ] {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::InvalidConfig(format!(
                    "{name} must be a positive finite number, got {v}"
                )));
            }
        }
        Ok(())
    }

    pub fn beta1(&self) -> f64 {
        self.n1 as f64 / self.d as f64
    }

    pub fn gamma0(&self) -> f64 {
        self.d as f64 / self.m as f64
    }

    /// Scale of the hidden pre-activations, `σ_x/√α`.
    pub fn v(&self) -> f64 {
        (self.sigma_x2 / self.alpha).sqrt()
    }

    /// Evaluation point `σ_ε√(α₂β₁)` of the fixed-point system.
    pub fn u_c(&self) -> f64 {
        (self.sigma_eps2 * self.alpha2 * self.beta1()).sqrt()
    }

    /// Copy with σ_ε² chosen so that `snr_db` returns `snr`.
    pub fn with_snr_db(&self, snr: f64) -> Result<Self> {
        if !snr.is_finite() {
            return Err(Error::InvalidConfig(format!("SNR must be finite, got {snr}")));
        }
        let mut c = *self;
        c.sigma_eps2 = self.sigma_x2 / (self.alpha * self.alpha2 * 10f64.powf(snr / 10.0));
        c.validate()?;
        Ok(c)
    }
}

/// Signal-to-noise ratio in dB, `10·log₁₀(σ_x²/(α α₂ σ_ε²))`.
pub fn snr_db(cfg: &ModelConfig) -> Result<f64> {
    cfg.validate()?;
    Ok(10.0 * (cfg.sigma_x2 / (cfg.alpha * cfg.alpha2 * cfg.sigma_eps2)).log10())
}

fn check_scale(v: f64) -> Result<()> {
    if v.is_finite() && v > 0.0 {
        Ok(())
    } else {
        Err(Error::InvalidConfig(format!("scale v must be positive, got {v}")))
    }
}

/// `E[f(vz)]` for `z ~ N(0,1)`.
///
/// Composite Gauss–Legendre against the normal density with at least 768
/// nodes, refined as `v` grows; 0 is a panel edge so a kink of `f` at the
/// origin costs no accuracy.
pub fn gauss_expect<F: Fn(f64) -> f64>(f: F, v: f64) -> Result<f64> {
    check_scale(v)?;
    if v <= 1.0 {
        default_normal_rule().integrate(|z| f(v * z))
    } else {
        normal_panel_rule(panels_for_scale(v)).integrate(|z| f(v * z))
    }
}

/// Same as [`gauss_expect`] with twice as many panels, for convergence checks.
pub fn gauss_expect_refined<F: Fn(f64) -> f64>(f: F, v: f64) -> Result<f64> {
    check_scale(v)?;
    normal_panel_rule(2 * panels_for_scale(v)).integrate(|z| f(v * z))
}

/// `E[f(vz)]` with an explicit rule.
pub fn gauss_expect_with<F: Fn(f64) -> f64>(rule: &QuadratureRule, f: F, v: f64) -> Result<f64> {
    check_scale(v)?;
    rule.integrate(|z| f(v * z))
}

/// Gaussian constants `η₀`, `θ₁₁`, `η₁` of an activation at scale `v`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct GaussConstants {
    pub activation: Activation,
    pub v: f64,
    /// `Var σ(vz)`
    pub eta0: f64,
    /// `(v E σ'(vz))²`
    pub theta11: f64,
    /// `E σ'(vz)²`
    pub eta1: f64,
}

/// Constants for `act` at scale `v`.
pub fn constants(act: Activation, v: f64) -> Result<GaussConstants> {
    check_scale(v)?;
    let mean = gauss_expect(|x| act.value(x), v)?;
    let second = gauss_expect(|x| act.value(x).powi(2), v)?;
    let dmean = gauss_expect(|x| act.derivative(x), v)?;
    let eta1 = gauss_expect(|x| act.derivative(x).powi(2), v)?;
    let eta0 = (second - mean * mean).max(0.0);
    Ok(GaussConstants {
        activation: act,
        v,
        eta0,
        theta11: (v * dmean).powi(2),
        eta1,
    })
}

/// Constants at the scale `σ_x/√α` implied by `cfg`.
pub fn constants_for(cfg: &ModelConfig, act: Activation) -> Result<GaussConstants> {
    cfg.validate()?;
    constants(act, cfg.v())
}

/// Config-file contents; absent keys are `None` so command-line flags can
/// fill or override them.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ConfigFile {
    pub d: Option<usize>,
    pub n1: Option<usize>,
    pub m: Option<usize>,
    pub sigma_x2: Option<f64>,
    pub sigma_eps2: Option<f64>,
    pub alpha: Option<f64>,
    pub alpha2: Option<f64>,
    pub activation: Option<Activation>,
    pub seed: Option<u64>,
}

impl ConfigFile {
    /// Parse `key = value` lines; `#` starts a comment. Unknown keys and
    /// repeated keys are errors.
    pub fn parse(text: &str) -> Result<Self> {
        let mut out = ConfigFile::default();
        for (idx, raw) in text.lines().enumerate() {
            let line_no = idx + 1;
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .or_else(|| line.split_once(':'))
                .ok_or_else(|| Error::ConfigParse {
                    line: line_no,
                    msg: format!("expected key = value, got '{line}'"),
                })?;
            let key = key.trim();
            let value = value.trim();
            let err = |msg: String| Error::ConfigParse { line: line_no, msg };
            macro_rules! set {
                ($field:ident) => {{
                    if out.$field.is_some() {
                        return Err(err(format!("key '{}' given twice", key)));
                    }
                    out.$field = Some(
                        value
                            .parse()
                            .map_err(|_| err(format!("cannot parse '{value}' for key '{key}'")))?,
                    );
                }};
            }
            match key {
                "d" => set!(d),
                "n1" => set!(n1),
                "m" => set!(m),
                "sigma_x2" => set!(sigma_x2),
                "sigma_eps2" => set!(sigma_eps2),
                "alpha" => set!(alpha),
                "alpha2" => set!(alpha2),
                "seed" => set!(seed),
                "activation" => {
                    if out.activation.is_some() {
                        return Err(err("key 'activation' given twice".into()));
                    }
                    out.activation = Some(value.parse().map_err(|e: Error| err(e.to_string()))?);
                }
                other => return Err(err(format!("unknown key '{other}'"))),
            }
        }
        Ok(out)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::parse(&text)
    }

    /// Fields present here replace those of `base`.
    pub fn apply_to(&self, base: ModelConfig) -> ModelConfig {
        ModelConfig {
            d: self.d.unwrap_or(base.d),
            n1: self.n1.unwrap_or(base.n1),
            m: self.m.unwrap_or(base.m),
            sigma_x2: self.sigma_x2.unwrap_or(base.sigma_x2),
            sigma_eps2: self.sigma_eps2.unwrap_or(base.sigma_eps2),
            alpha: self.alpha.unwrap_or(base.alpha),
            alpha2: self.alpha2.unwrap_or(base.alpha2),
        }
    }

    /// Layer `over` on top of `self`: keys set in `over` win.
    pub fn merged(&self, over: &ConfigFile) -> ConfigFile {
        ConfigFile {
            d: over.d.or(self.d),
            n1: over.n1.or(self.n1),
            m: over.m.or(self.m),
            sigma_x2: over.sigma_x2.or(self.sigma_x2),
            sigma_eps2: over.sigma_eps2.or(self.sigma_eps2),
            alpha: over.alpha.or(self.alpha),
            alpha2: over.alpha2.or(self.alpha2),
            activation: over.activation.or(self.activation),
            seed: over.seed.or(self.seed),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    #[test]
    fn trivial_expectations() {
        assert_abs_diff_eq!(gauss_expect(|_| 1.0, 1.0).unwrap(), 1.0, epsilon = 1e-14);
        assert_abs_diff_eq!(gauss_expect(|x| x * x, 2.0).unwrap(), 4.0, epsilon = 1e-12);
        assert!(gauss_expect(|x| (x - 1.0).sqrt(), 1.0).is_err());
        assert!(gauss_expect(|x| x, 0.0).is_err());
    }

    #[test]
    fn steep_tanh_is_resolved() {
        // reference from 30-digit adaptive quadrature
        let e = gauss_expect(|x| x.tanh().powi(2), 2.0).unwrap();
        assert_abs_diff_eq!(e, 0.635_261_234_256_939_9, epsilon = 1e-12);
    }

    #[test]
    fn linear_constants() {
        let c = constants(Activation::Linear, 1.0).unwrap();
        assert_abs_diff_eq!(c.eta0, 1.0, epsilon = 1e-14);
        assert_abs_diff_eq!(c.theta11, 1.0, epsilon = 1e-14);
        assert_abs_diff_eq!(c.eta1, 1.0, epsilon = 1e-14);
    }

    #[test]
    fn relu_constants_closed_form() {
        let c = constants(Activation::Relu, 2.0).unwrap();
        let pi = std::f64::consts::PI;
        assert_abs_diff_eq!(c.theta11, 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(c.eta0, 2.0 - 2.0 / pi, epsilon = 1e-12);
        assert_abs_diff_eq!(c.eta1, 0.5, epsilon = 1e-12);
    }

    #[test]
    fn doubling_nodes_is_stable() {
        for act in [Activation::Sigmoid, Activation::Tanh, Activation::Linear] {
            for v in [0.5, 1.0, 2.0] {
                let f = |x: f64| act.value(x).powi(2);
                let a = gauss_expect(f, v).unwrap();
                let b = gauss_expect_refined(f, v).unwrap();
                assert!((a - b).abs() < 1e-12, "{act} v={v}: {a} vs {b}");
            }
        }
    }

    #[test]
    fn snr_examples() {
        let mut c = ModelConfig {
            sigma_eps2: 1.0,
            ..Default::default()
        };
        assert_abs_diff_eq!(snr_db(&c).unwrap(), 0.0, epsilon = 1e-12);
        c.alpha2 = 2.0;
        c.sigma_eps2 = 0.05;
        assert_abs_diff_eq!(snr_db(&c).unwrap(), 10.0, epsilon = 1e-12);
        c.alpha2 = 1.0;
        c.sigma_eps2 = 0.01;
        assert_abs_diff_eq!(snr_db(&c).unwrap(), 20.0, epsilon = 1e-12);
        let back = c.with_snr_db(7.5).unwrap();
        assert_abs_diff_eq!(snr_db(&back).unwrap(), 7.5, epsilon = 1e-12);
    }

    #[test]
    fn validation_rejects_bad_values() {
        let c = ModelConfig {
            d: 0,
            ..Default::default()
        };
        assert!(c.validate().is_err());
        let c = ModelConfig {
            alpha: -1.0,
            ..Default::default()
        };
        assert!(c.validate().is_err());
        let c = ModelConfig {
            sigma_eps2: f64::NAN,
            ..Default::default()
        };
        assert!(snr_db(&c).is_err());
    }

    #[test]
    fn config_file_round_trip() {
        let text = "# fig 5\nd = 30\nn1=30\nm = 60 # gamma0 0.5\nsigma_eps2 = 0.2\nactivation = tanh\nseed = 7\n";
        let f = ConfigFile::parse(text).unwrap();
        assert_eq!(f.d, Some(30));
        assert_eq!(f.activation, Some(Activation::Tanh));
        assert_eq!(f.seed, Some(7));
        let cfg = f.apply_to(ModelConfig::default());
        assert_eq!(cfg.m, 60);
        assert_abs_diff_eq!(cfg.gamma0(), 0.5);
        assert!(matches!(
            ConfigFile::parse("d = 3\nbogus = 1\n"),
            Err(Error::ConfigParse { line: 2, .. })
        ));
        assert!(ConfigFile::parse("d = three").is_err());
        assert!(ConfigFile::parse("d = 3\nd = 4").is_err());
    }

    proptest! {
        #[test]
        fn constants_nonnegative_and_ordered(v in 0.1f64..10.0, k in 0usize..4) {
            let act = Activation::ALL[k];
            let c = constants(act, v).unwrap();
            prop_assert!(c.eta0 >= 0.0 && c.theta11 >= 0.0 && c.eta1 >= 0.0);
            if act == Activation::Linear {
                prop_assert!((c.eta0 - c.theta11).abs() <= 1e-12 * c.eta0.max(1.0));
            } else {
                prop_assert!(c.eta0 > c.theta11);
            }
            // Cauchy–Schwarz on E σ'(vz)
            prop_assert!(c.eta1 * v * v >= c.theta11 * (1.0 - 1e-12));
        }

        #[test]
        fn constants_deterministic(v in 0.1f64..10.0, k in 0usize..4) {
            let act = Activation::ALL[k];
            let a = constants(act, v).unwrap();
            let b = constants(act, v).unwrap();
            prop_assert_eq!(a.eta0.to_bits(), b.eta0.to_bits());
            prop_assert_eq!(a.theta11.to_bits(), b.theta11.to_bits());
            prop_assert_eq!(a.eta1.to_bits(), b.eta1.to_bits());
        }
    }
}
