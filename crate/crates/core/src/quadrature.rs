//! Gaussian quadrature rules built with the Golub–Welsch algorithm.
//!
//! All rules here are normalized to probability measures: the weights sum
//! to one, so `Σ wᵢ f(xᵢ)` approximates an expectation directly.

use std::sync::OnceLock;

use nalgebra::{DMatrix, SymmetricEigen};

use crate::error::{Error, Result};

/// Default node count for Gaussian expectations.
pub const DEFAULT_HERMITE_NODES: usize = 201;

/// Nodes and weights of an `n`-point rule.
#[derive(Debug, Clone)]
pub struct QuadratureRule {
    pub nodes: Vec<f64>,
    pub weights: Vec<f64>,
}

impl QuadratureRule {
    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// `Σ wᵢ f(xᵢ)`, failing if `f` is non-finite at a node carrying weight.
    pub fn integrate<F: Fn(f64) -> f64>(&self, f: F) -> Result<f64> {
        let mut acc = 0.0;
        for (&x, &w) in self.nodes.iter().zip(&self.weights) {
            if w == 0.0 {
                continue;
            }
            let fx = f(x);
            if !fx.is_finite() {
                return Err(Error::numerical(
                    "quadrature",
                    format!("integrand is {fx} at node {x}"),
                ));
            }
            acc += w * fx;
        }
        Ok(acc)
    }
}

fn golub_welsch(diag: &[f64], offdiag: &[f64]) -> QuadratureRule {
    let n = diag.len();
    let mut jacobi = DMatrix::<f64>::zeros(n, n);
    for i in 0..n {
        jacobi[(i, i)] = diag[i];
    }
    for (i, &b) in offdiag.iter().enumerate() {
        jacobi[(i, i + 1)] = b;
        jacobi[(i + 1, i)] = b;
    }
    let eig = SymmetricEigen::new(jacobi);
    let mut pairs: Vec<(f64, f64)> = (0..n)
        .map(|k| (eig.eigenvalues[k], eig.eigenvectors[(0, k)].powi(2)))
        .collect();
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
    QuadratureRule {
        nodes: pairs.iter().map(|p| p.0).collect(),
        weights: pairs.iter().map(|p| p.1).collect(),
    }
}

/// Orthonormal probabilists' Hermite values `p_{n-1}(x), p_n(x)` and the
/// Christoffel sum `Σ_{k<n} p_k(x)²`. Returns `None` on overflow.
fn hermite_orthonormal(n: usize, x: f64) -> Option<(f64, f64, f64)> {
    let mut prev = 0.0;
    let mut cur = 1.0;
    let mut sum = 0.0;
    for k in 0..n {
        sum += cur * cur;
        let next = (x * cur - (k as f64).sqrt() * prev) / ((k + 1) as f64).sqrt();
        prev = cur;
        cur = next;
    }
    (cur.is_finite() && prev.is_finite() && sum.is_finite()).then_some((prev, cur, sum))
}

/// `n`-point Gauss–Hermite rule for `E[f(z)]`, `z ~ N(0, 1)`.
pub fn gauss_hermite(n: usize) -> QuadratureRule {
    assert!(n >= 1, "Gauss-Hermite rule needs at least one node");
    let diag = vec![0.0; n];
    let off: Vec<f64> = (1..n).map(|k| (k as f64).sqrt()).collect();
    let mut rule = golub_welsch(&diag, &off);

    // Newton polish of the nodes, then Christoffel weights; far-tail nodes
    // whose polynomials overflow keep their eigenvector weights (< 1e-300).
    for i in 0..n {
        let mut x = rule.nodes[i];
        for _ in 0..3 {
            match hermite_orthonormal(n, x) {
                Some((pm1, pn, _)) if pm1 != 0.0 => x -= pn / ((n as f64).sqrt() * pm1),
                _ => break,
            }
        }
        if let Some((_, _, sum)) = hermite_orthonormal(n, x) {
            rule.nodes[i] = x;
            rule.weights[i] = 1.0 / sum;
        }
    }
    // enforce the exact symmetry of the rule
    for i in 0..n / 2 {
        let j = n - 1 - i;
        let x = 0.5 * (rule.nodes[j] - rule.nodes[i]);
        let w = 0.5 * (rule.weights[i] + rule.weights[j]);
        rule.nodes[i] = -x;
        rule.nodes[j] = x;
        rule.weights[i] = w;
        rule.weights[j] = w;
    }
    if n % 2 == 1 {
        rule.nodes[n / 2] = 0.0;
    }
    let total: f64 = rule.weights.iter().sum();
    rule.weights.iter_mut().for_each(|w| *w /= total);
    rule
}

/// Shared default rule (201 nodes).
pub fn default_hermite() -> &'static QuadratureRule {
    static RULE: OnceLock<QuadratureRule> = OnceLock::new();
    RULE.get_or_init(|| gauss_hermite(DEFAULT_HERMITE_NODES))
}

/// Shared doubled rule (402 nodes), used for self-convergence checks.
pub fn doubled_hermite() -> &'static QuadratureRule {
    static RULE: OnceLock<QuadratureRule> = OnceLock::new();
    RULE.get_or_init(|| gauss_hermite(2 * DEFAULT_HERMITE_NODES))
}

/// Small rule used for the inner dimension of bivariate expectations.
pub fn bivariate_hermite() -> &'static QuadratureRule {
    static RULE: OnceLock<QuadratureRule> = OnceLock::new();
    RULE.get_or_init(|| gauss_hermite(48))
}

/// Generalized Gauss–Laguerre rule for `E[f(u)]`, `u ~ Gamma(shape, 1)`.
pub fn gauss_gamma(n: usize, shape: f64) -> QuadratureRule {
    assert!(n >= 1 && shape > 0.0);
    let a = shape - 1.0;
    let diag: Vec<f64> = (0..n).map(|k| 2.0 * k as f64 + a + 1.0).collect();
    let off: Vec<f64> = (1..n).map(|k| (k as f64 * (k as f64 + a)).sqrt()).collect();
    let mut rule = golub_welsch(&diag, &off);
    let total: f64 = rule.weights.iter().sum();
    rule.weights.iter_mut().for_each(|w| *w /= total);
    rule
}

/// `E[f(q₁, q₂)]` for a centered Gaussian pair with the given covariance,
/// by a tensor Gauss–Hermite rule on the Cholesky factor.
pub fn bivariate_expect<F>(rule: &QuadratureRule, var1: f64, var2: f64, cov: f64, f: F) -> Result<f64>
where
    F: Fn(f64, f64) -> f64,
{
    if var1 <= 0.0 || var2 <= 0.0 {
        return Err(Error::InvalidConfig(
            "bivariate Gaussian needs positive variances".into(),
        ));
    }
    let s1 = var1.sqrt();
    let l21 = cov / s1;
    let l22sq = var2 - l21 * l21;
    if l22sq < -1e-12 * var2 {
        return Err(Error::InvalidConfig(
            "covariance matrix is not positive semidefinite".into(),
        ));
    }
    let l22 = l22sq.max(0.0).sqrt();
    let mut acc = 0.0;
    for (&z1, &w1) in rule.nodes.iter().zip(&rule.weights) {
        let q1 = s1 * z1;
        let mut inner = 0.0;
        for (&z2, &w2) in rule.nodes.iter().zip(&rule.weights) {
            inner += w2 * f(q1, l21 * z1 + l22 * z2);
        }
        acc += w1 * inner;
    }
    if !acc.is_finite() {
        return Err(Error::numerical("bivariate quadrature", "non-finite integrand"));
    }
    Ok(acc)
}


/// Gauss–Legendre rule on `[-1, 1]` with weights summing to 2.
pub fn gauss_legendre(n: usize) -> QuadratureRule {
    assert!(n >= 1);
    let diag = vec![0.0; n];
    let off: Vec<f64> = (1..n)
        .map(|k| {
            let k = k as f64;
            k / (4.0 * k * k - 1.0).sqrt()
        })
        .collect();
    let mut rule = golub_welsch(&diag, &off);
    rule.weights.iter_mut().for_each(|w| *w *= 2.0);
    rule
}

/// Composite Gauss–Legendre rule for `E[f(z)]`, `z ~ N(0,1)`, on
/// `[-12, 12]` with `2·per_side` panels of 16 points. Panel edges sit at
/// multiples of the panel width, so 0 is always an edge.
pub fn normal_panel_rule(per_side: usize) -> QuadratureRule {
    assert!(per_side >= 1);
    let gl = gauss_legendre(16);
    let width = NORMAL_RULE_HALF_RANGE / per_side as f64;
    let inv_sqrt_2pi = 1.0 / (2.0 * std::f64::consts::PI).sqrt();
    let mut nodes = Vec::with_capacity(2 * per_side * gl.len());
    let mut weights = Vec::with_capacity(nodes.capacity());
    for p in 0..2 * per_side {
        let lo = -NORMAL_RULE_HALF_RANGE + p as f64 * width;
        for (&t, &w) in gl.nodes.iter().zip(&gl.weights) {
            let z = lo + 0.5 * width * (t + 1.0);
            nodes.push(z);
            weights.push(0.5 * width * w * inv_sqrt_2pi * (-0.5 * z * z).exp());
        }
    }
    let total: f64 = weights.iter().sum();
    weights.iter_mut().for_each(|w| *w /= total);
    QuadratureRule { nodes, weights }
}

/// Half-width of the truncated range of [`normal_panel_rule`].
pub const NORMAL_RULE_HALF_RANGE: f64 = 12.0;

/// Panels per half line giving width `0.5/max(1, v)`, so features of
/// `f(vz)` on the unit scale stay resolved.
pub fn panels_for_scale(v: f64) -> usize {
    let base = 2.0 * NORMAL_RULE_HALF_RANGE;
    (base * v.max(1.0)).ceil() as usize
}

/// Shared rule for scales `v ≤ 1` (768 nodes).
pub fn default_normal_rule() -> &'static QuadratureRule {
    static RULE: OnceLock<QuadratureRule> = OnceLock::new();
    RULE.get_or_init(|| normal_panel_rule(panels_for_scale(1.0)))
}
