//! Marchenko–Pastur law: density, integrals, CDF and a Wishart sampler.

use std::f64::consts::PI;

use nalgebra::DMatrix;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::linalg::sym_eigenvalues_desc;
use crate::quadrature::gauss_legendre;
use crate::rng;

/// Default node count of the angular midpoint rule.
pub const DEFAULT_MP_NODES: usize = 2048;

/// Marchenko–Pastur law with aspect ratio `gamma`, defined for every
/// `gamma > 0` with an atom `(1 − 1/γ)₊` at zero.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct MPLaw {
    pub gamma: f64,
    pub lambda_minus: f64,
    pub lambda_plus: f64,
    pub atom_mass: f64,
}

impl MPLaw {
    pub fn new(gamma: f64) -> Result<Self> {
        if !(gamma.is_finite() && gamma > 0.0) {
            return Err(Error::InvalidConfig(format!(
                "Marchenko-Pastur ratio must be positive, got {gamma}"
            )));
        }
        let r = gamma.sqrt();
        Ok(MPLaw {
            gamma,
            lambda_minus: (1.0 - r).powi(2),
            lambda_plus: (1.0 + r).powi(2),
            atom_mass: (1.0 - 1.0 / gamma).max(0.0),
        })
    }

    /// Mass of the continuous part.
    pub fn continuous_mass(&self) -> f64 {
        1.0 - self.atom_mass
    }

    /// Point of the support at angle `φ ∈ [0, π]`: `λ₊` at 0, `λ₋` at π.
    fn at_angle(&self, phi: f64) -> f64 {
        let c = (0.5 * phi).cos();
        self.lambda_minus + (self.lambda_plus - self.lambda_minus) * c * c
    }

    /// Density of the continuous part in the angle variable.
    fn angular_weight(&self, phi: f64, s: f64) -> f64 {
        let h = 0.5 * (self.lambda_plus - self.lambda_minus);
        let sp = phi.sin();
        // sin²φ/s stays bounded as s → 0 when γ = 1
        if s <= 0.0 {
            return 0.0;
        }
        h * h * sp * sp / (2.0 * PI * self.gamma * s)
    }
}

/// Density of the continuous part at `s`; zero outside `(λ₋, λ₊)`.
pub fn mp_density(law: &MPLaw, s: f64) -> f64 {
    if !(s > law.lambda_minus && s < law.lambda_plus) || s <= 0.0 {
        return 0.0;
    }
    ((law.lambda_plus - s) * (s - law.lambda_minus)).sqrt() / (2.0 * PI * law.gamma * s)
}

/// `∫ f dρ_γ`, atom included, with the default node count.
pub fn mp_integrate<F: Fn(f64) -> f64>(law: &MPLaw, f: F) -> Result<f64> {
    mp_integrate_n(law, f, DEFAULT_MP_NODES)
}

/// `∫ f dρ_γ` using an `n`-point midpoint rule in the angle `φ` of
/// `s = λ₋ + (λ₊−λ₋)cos²(φ/2)`, which removes the square-root edges.
pub fn mp_integrate_n<F: Fn(f64) -> f64>(law: &MPLaw, f: F, n: usize) -> Result<f64> {
    if n == 0 {
        return Err(Error::Usage("MP quadrature needs at least one node".into()));
    }
    let mut acc = 0.0;
    if law.atom_mass > 0.0 {
        let f0 = f(0.0);
        if !f0.is_finite() {
            return Err(Error::numerical("mp_integrate", format!("integrand is {f0} at the atom")));
        }
        acc += law.atom_mass * f0;
    }
    // For γ near 1 the weight has a near-pole at s = 0 just below λ₋.
    // Integrating f(s) − f(0) and adding f(0) times the exact continuous
    // mass cancels it when f(0) is finite.
    let shift = if law.lambda_minus < 1e-2 * law.lambda_plus {
        let f0 = f(0.0);
        if f0.is_finite() { f0 } else { 0.0 }
    } else {
        0.0
    };
    let h = PI / n as f64;
    let mut cont = 0.0;
    for k in 0..n {
        let phi = (k as f64 + 0.5) * h;
        let s = law.at_angle(phi);
        let fs = f(s);
        if !fs.is_finite() {
            return Err(Error::numerical("mp_integrate", format!("integrand is {fs} at s = {s}")));
        }
        cont += (fs - shift) * law.angular_weight(phi, s);
    }
    Ok(acc + cont * h + shift * (1.0 - law.atom_mass))
}

/// Distribution function `ρ_γ((−∞, x])`.
pub fn mp_cdf(law: &MPLaw, x: f64) -> f64 {
    if x < 0.0 {
        return 0.0;
    }
    if x <= law.lambda_minus {
        return law.atom_mass;
    }
    if x >= law.lambda_plus {
        return 1.0;
    }
    let t = ((x - law.lambda_minus) / (law.lambda_plus - law.lambda_minus)).sqrt();
    let phi_x = 2.0 * t.clamp(0.0, 1.0).acos();
    let gl = gauss_legendre(64);
    let half = 0.5 * (PI - phi_x);
    let mid = 0.5 * (PI + phi_x);
    let cont: f64 = gl
        .nodes
        .iter()
        .zip(&gl.weights)
        .map(|(&z, &w)| {
            let phi = mid + half * z;
            w * law.angular_weight(phi, law.at_angle(phi))
        })
        .sum::<f64>()
        * half;
    (law.atom_mass + cont).min(1.0)
}

/// Eigenvalues (nonincreasing) of `XXᵀ/m` for a `d×m` matrix `X` with iid
/// `N(0, sigma2)` entries.
pub fn sample_wishart_spectrum(d: usize, m: usize, sigma2: f64, seed: u64) -> Result<Vec<f64>> {
    if d == 0 || m == 0 {
        return Err(Error::InvalidConfig("d and m must be at least 1".into()));
    }
    if !(sigma2.is_finite() && sigma2 > 0.0) {
        return Err(Error::InvalidConfig(format!("variance must be positive, got {sigma2}")));
    }
    let mut r = rng::stream(seed, &[0x57_15]);
    let sd = sigma2.sqrt();
    let x = DMatrix::<f64>::from_fn(d, m, |_, _| {
        sd * rng::normal(&mut r)
    });
    let g = (&x * x.transpose()) / m as f64;
    let mut eigs = sym_eigenvalues_desc(g)?;
    eigs.iter_mut().for_each(|e| *e = e.max(0.0));
    Ok(eigs)
}
