//! Coupled fixed-point equations for the Stieltjes transforms `m₁`, `m₂` of
//! the conjugate-kernel block matrix, and their empirical counterparts.

use nalgebra::DMatrix;
use num_complex::Complex64;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::model::GaussConstants;

const MAX_ITER: usize = 10_000;
const TOL: f64 = 1e-12;
const STALL_WINDOW: usize = 50;

/// Real solution `(a₁, a₂)` at `ξ = iu`, where `m_i(iu) = i·a_i`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct StieltjesPair {
    pub a1: f64,
    pub a2: f64,
    pub u: f64,
    /// Largest relative residual of the two equations.
    pub residual: f64,
    pub iterations: usize,
}

fn check_ratios(beta1: f64, gamma0: f64) -> Result<()> {
    if !(beta1.is_finite() && beta1 > 0.0 && gamma0.is_finite() && gamma0 > 0.0) {
        return Err(Error::InvalidConfig(format!(
            "beta1 and gamma0 must be positive, got {beta1} and {gamma0}"
        )));
    }
    Ok(())
}

struct RealSystem {
    beta1: f64,
    inv_gamma0: f64,
    gap: f64,
    theta: f64,
    u: f64,
}

impl RealSystem {
    fn map(&self, a1: f64, a2: f64) -> (f64, f64) {
        let t = 1.0 + self.theta * a1 * a2;
        let d1 = self.u + self.gap * a2 + self.theta * a2 / t;
        let d2 = self.u + self.gap * a1 + self.theta * a1 / t;
        (self.beta1 / d1, self.inv_gamma0 / d2)
    }

    fn residual(&self, a1: f64, a2: f64) -> f64 {
        let (f1, f2) = self.map(a1, a2);
        ((a1 - f1) / a1).abs().max(((a2 - f2) / a2).abs())
    }

    /// Newton step on `a − F(a)`.
    fn newton_step(&self, a1: f64, a2: f64) -> Option<(f64, f64)> {
        let th = self.theta;
        let t = 1.0 + th * a1 * a2;
        let d1 = self.u + self.gap * a2 + th * a2 / t;
        let d2 = self.u + self.gap * a1 + th * a1 / t;
        let dd1_da1 = -th * th * a2 * a2 / (t * t);
        let dd1_da2 = self.gap + th / (t * t);
        let dd2_da1 = self.gap + th / (t * t);
        let dd2_da2 = -th * th * a1 * a1 / (t * t);
        let c1 = -self.beta1 / (d1 * d1);
        let c2 = -self.inv_gamma0 / (d2 * d2);
        // Jacobian of G(a) = a − F(a)
        let j11 = 1.0 - c1 * dd1_da1;
        let j12 = -c1 * dd1_da2;
        let j21 = -c2 * dd2_da1;
        let j22 = 1.0 - c2 * dd2_da2;
        let g1 = a1 - self.beta1 / d1;
        let g2 = a2 - self.inv_gamma0 / d2;
        let det = j11 * j22 - j12 * j21;
        if !det.is_finite() || det == 0.0 {
            return None;
        }
        let s1 = (j22 * g1 - j12 * g2) / det;
        let s2 = (j11 * g2 - j21 * g1) / det;
        // keep the iterate positive
        let mut lam = 1.0;
        for _ in 0..60 {
            let n1 = a1 - lam * s1;
            let n2 = a2 - lam * s2;
            if n1 > 0.0 && n2 > 0.0 {
                return Some((n1, n2));
            }
            lam *= 0.5;
        }
        None
    }
}

/// Solve the real system at `u > 0`:
/// `a₁ = β₁ / (u + (η₀−θ₁₁)a₂ + θ₁₁a₂/(1+θ₁₁a₁a₂))`,
/// `a₂ = γ₀⁻¹ / (u + (η₀−θ₁₁)a₁ + θ₁₁a₁/(1+θ₁₁a₁a₂))`.
///
/// Damped iteration (factor ½) from `(β₁/u, 1/(γ₀u))`, switching to Newton
/// when the residual stalls or is already small.
pub fn solve_fixed_point(
    consts: &GaussConstants,
    beta1: f64,
    gamma0: f64,
    u: f64,
) -> Result<StieltjesPair> {
    check_ratios(beta1, gamma0)?;
    if !(u.is_finite() && u > 0.0) {
        return Err(Error::InvalidConfig(format!("u must be positive, got {u}")));
    }
    let sys = RealSystem {
        beta1,
        inv_gamma0: 1.0 / gamma0,
        gap: consts.eta0 - consts.theta11,
        theta: consts.theta11,
        u,
    };
    let (mut a1, mut a2) = (beta1 / u, 1.0 / (gamma0 * u));
    let mut res = sys.residual(a1, a2);
    let mut window_start = res;
    let mut newton = false;
    let mut it = 0;
    while it < MAX_ITER && !(res <= 0.1 * TOL) {
        it += 1;
        if newton {
            match sys.newton_step(a1, a2) {
                Some((n1, n2)) => {
                    a1 = n1;
                    a2 = n2;
                }
                None => break,
            }
        } else {
            let (f1, f2) = sys.map(a1, a2);
            a1 = 0.5 * (a1 + f1);
            a2 = 0.5 * (a2 + f2);
        }
        let new_res = sys.residual(a1, a2);
        if newton && new_res >= res && res <= TOL {
            res = res.min(new_res);
            break;
        }
        res = new_res;
        if !newton {
            if res < 1e-6 {
                newton = true;
            } else if it % STALL_WINDOW == 0 {
                if res > 0.9 * window_start {
                    newton = true;
                }
                window_start = res;
            }
        }
    }
    if !(res <= TOL) || !(a1 > 0.0 && a2 > 0.0) {
        return Err(Error::numerical(
            "solve_fixed_point",
            format!("no convergence after {it} iterations, residual {res:e}"),
        ));
    }
    Ok(StieltjesPair {
        a1,
        a2,
        u,
        residual: res,
        iterations: it,
    })
}

struct ComplexSystem {
    beta1: f64,
    inv_gamma0: f64,
    gap: f64,
    theta: f64,
    xi: Complex64,
    s1: f64,
    s2: f64,
}

impl ComplexSystem {
    fn denoms(&self, m1: Complex64, m2: Complex64) -> (Complex64, Complex64, Complex64) {
        let e = 1.0 + self.s2 * m1 - self.theta * m1 * m2;
        let d1 = -self.xi + self.s1 - self.gap * m2 + (self.s2 - self.theta * m2) / e;
        let d2 = -self.xi - self.gap * m1 - self.theta * m1 / e;
        (e, d1, d2)
    }

    fn map(&self, m1: Complex64, m2: Complex64) -> (Complex64, Complex64) {
        let (_, d1, d2) = self.denoms(m1, m2);
        (self.beta1 / d1, self.inv_gamma0 / d2)
    }

    fn residual(&self, m1: Complex64, m2: Complex64) -> f64 {
        let (f1, f2) = self.map(m1, m2);
        ((m1 - f1) / m1).norm().max(((m2 - f2) / m2).norm())
    }

    fn newton_step(&self, m1: Complex64, m2: Complex64) -> Option<(Complex64, Complex64)> {
        let th = self.theta;
        let (e, d1, d2) = self.denoms(m1, m2);
        let e2 = e * e;
        let w = self.s2 - th * m2;
        let dd1_dm1 = -(w * w) / e2;
        let dd1_dm2 = -self.gap - th / e2;
        let dd2_dm1 = -self.gap - th / e2;
        let dd2_dm2 = -(th * th) * m1 * m1 / e2;
        let c1 = -self.beta1 / (d1 * d1);
        let c2 = -self.inv_gamma0 / (d2 * d2);
        let j11 = 1.0 - c1 * dd1_dm1;
        let j12 = -c1 * dd1_dm2;
        let j21 = -c2 * dd2_dm1;
        let j22 = 1.0 - c2 * dd2_dm2;
        let g1 = m1 - self.beta1 / d1;
        let g2 = m2 - self.inv_gamma0 / d2;
        let det = j11 * j22 - j12 * j21;
        if !det.is_finite() || det.norm() == 0.0 {
            return None;
        }
        let st1 = (j22 * g1 - j12 * g2) / det;
        let st2 = (j11 * g2 - j21 * g1) / det;
        let mut lam = 1.0;
        for _ in 0..60 {
            let n1 = m1 - lam * st1;
            let n2 = m2 - lam * st2;
            if n1.im > 0.0 && n2.im > 0.0 {
                return Some((n1, n2));
            }
            lam *= 0.5;
        }
        None
    }

    fn solve_from(&self, mut m1: Complex64, mut m2: Complex64) -> Option<(Complex64, Complex64, f64)> {
        let mut res = self.residual(m1, m2);
        let mut window_start = res;
        let mut newton = false;
        let mut it = 0;
        while it < MAX_ITER && !(res <= 0.1 * TOL) {
            it += 1;
            if newton {
                let (n1, n2) = self.newton_step(m1, m2)?;
                m1 = n1;
                m2 = n2;
            } else {
                let (f1, f2) = self.map(m1, m2);
                m1 = 0.5 * (m1 + f1);
                m2 = 0.5 * (m2 + f2);
            }
            let new_res = self.residual(m1, m2);
            if !new_res.is_finite() {
                return None;
            }
            if newton && new_res >= res && res <= TOL {
                res = res.min(new_res);
                break;
            }
            res = new_res;
            if !newton {
                if res < 1e-6 {
                    newton = true;
                } else if it % STALL_WINDOW == 0 {
                    if res > 0.9 * window_start {
                        newton = true;
                    }
                    window_start = res;
                }
            }
        }
        (res <= TOL && m1.im > 0.0 && m2.im > 0.0).then_some((m1, m2, res))
    }
}

/// Solve the complex system at `ξ` in the open upper half plane with shifts
/// `s = (s1, s2)`:
/// `m₁ = β₁ (−ξ + s₁ − (η₀−θ₁₁)m₂ + (s₂−θ₁₁m₂)/(1+s₂m₁−θ₁₁m₁m₂))⁻¹`,
/// `m₂ = γ₀⁻¹ (−ξ − (η₀−θ₁₁)m₁ − θ₁₁m₁/(1+s₂m₁−θ₁₁m₁m₂))⁻¹`.
///
/// Starts from the large-`ξ` asymptotics; if that fails, follows a path
/// from `ξ + iT` down to `ξ`.
pub fn solve_complex(
    consts: &GaussConstants,
    beta1: f64,
    gamma0: f64,
    xi: Complex64,
    s1: f64,
    s2: f64,
) -> Result<(Complex64, Complex64)> {
    check_ratios(beta1, gamma0)?;
    if !(xi.im > 0.0) || !xi.is_finite() {
        return Err(Error::InvalidConfig(format!(
            "xi must lie in the open upper half plane, got {xi}"
        )));
    }
    if !(s1.is_finite() && s2.is_finite()) {
        return Err(Error::InvalidConfig("shifts must be finite".into()));
    }
    let sys_at = |z: Complex64| ComplexSystem {
        beta1,
        inv_gamma0: 1.0 / gamma0,
        gap: consts.eta0 - consts.theta11,
        theta: consts.theta11,
        xi: z,
        s1,
        s2,
    };
    let init = |z: Complex64| (beta1 / (-z), 1.0 / (gamma0 * -z));
    let (m1, m2) = init(xi);
    if let Some((m1, m2, _)) = sys_at(xi).solve_from(m1, m2) {
        return Ok((m1, m2));
    }
    // continuation in Im ξ
    let top = 10.0 * (1.0 + xi.norm());
    let steps = 40;
    let start = xi + Complex64::new(0.0, top);
    let (mut m1, mut m2) = init(start);
    for k in 0..=steps {
        let frac = 1.0 - k as f64 / steps as f64;
        let z = xi + Complex64::new(0.0, top * frac * frac);
        match sys_at(z).solve_from(m1, m2) {
            Some((n1, n2, _)) => {
                m1 = n1;
                m2 = n2;
            }
            None => {
                return Err(Error::numerical(
                    "solve_complex",
                    format!("continuation failed at xi = {z}"),
                ))
            }
        }
    }
    Ok((m1, m2))
}

/// Relative residual of the complex system at a candidate solution.
pub fn complex_residual(
    consts: &GaussConstants,
    beta1: f64,
    gamma0: f64,
    xi: Complex64,
    s: (f64, f64),
    m: (Complex64, Complex64),
) -> f64 {
    ComplexSystem {
        beta1,
        inv_gamma0: 1.0 / gamma0,
        gap: consts.eta0 - consts.theta11,
        theta: consts.theta11,
        xi,
        s1: s.0,
        s2: s.1,
    }
    .residual(m.0, m.1)
}

/// Relative residual of the real system.
pub fn real_residual(consts: &GaussConstants, beta1: f64, gamma0: f64, u: f64, a1: f64, a2: f64) -> f64 {
    RealSystem {
        beta1,
        inv_gamma0: 1.0 / gamma0,
        gap: consts.eta0 - consts.theta11,
        theta: consts.theta11,
        u,
    }
    .residual(a1, a2)
}

/// Ingredients of the block matrix
/// `A(s) = [[s₁I_N + s₂Q, X⁽¹⁾/√d], [(X⁽¹⁾)ᵀ/√d, 0_M]]`.
#[derive(Debug, Clone)]
pub struct BlockMatrixSpec {
    /// `N×M` conjugate kernel `σ(W⁽¹⁾X/√d)`.
    pub x1: DMatrix<f64>,
    /// `N×N` matrix `W⁽¹⁾W⁽¹⁾ᵀ/d`.
    pub q: DMatrix<f64>,
    pub s1: f64,
    pub s2: f64,
    /// Input dimension used to normalize the off-diagonal blocks.
    pub d: usize,
}

/// Assemble the symmetric `(N+M)×(N+M)` matrix `A(s)`.
pub fn build_block_matrix(spec: &BlockMatrixSpec) -> Result<DMatrix<f64>> {
    let n = spec.x1.nrows();
    let m = spec.x1.ncols();
    if spec.q.nrows() != n || spec.q.ncols() != n {
        return Err(Error::DimensionMismatch(format!(
            "Q is {}x{} but X1 has {n} rows",
            spec.q.nrows(),
            spec.q.ncols()
        )));
    }
    if spec.d == 0 {
        return Err(Error::DimensionMismatch("d must be at least 1".into()));
    }
    let scale = 1.0 / (spec.d as f64).sqrt();
    let r = n + m;
    let mut a = DMatrix::<f64>::zeros(r, r);
    for i in 0..n {
        a[(i, i)] = spec.s1;
        for j in 0..=i {
            let v = a[(i, j)] + spec.s2 * 0.5 * (spec.q[(i, j)] + spec.q[(j, i)]);
            a[(i, j)] = v;
            a[(j, i)] = v;
        }
    }
    for i in 0..n {
        for k in 0..m {
            let v = spec.x1[(i, k)] * scale;
            a[(i, n + k)] = v;
            a[(n + k, i)] = v;
        }
    }
    Ok(a)
}

/// `(1/d) Σᵢ (λᵢ − ξ)⁻¹`.
pub fn empirical_stieltjes(eigs: &[f64], d: usize, xi: Complex64) -> Complex64 {
    eigs.iter().map(|&l| 1.0 / (l - xi)).sum::<Complex64>() / d as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::sym_eigenvalues_desc;
    use crate::model::{constants, Activation};
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn tanh1() -> GaussConstants {
        constants(Activation::Tanh, 1.0).unwrap()
    }

    #[test]
    fn residual_is_tiny() {
        let c = tanh1();
        let p = solve_fixed_point(&c, 1.0, 1.0, 0.3).unwrap();
        assert!(p.residual <= 1e-12);
        assert!(real_residual(&c, 1.0, 1.0, 0.3, p.a1, p.a2) <= 1e-12);
        assert!(p.a1 > 0.0 && p.a2 > 0.0);
    }

    #[test]
    fn large_u_asymptotics() {
        let c = tanh1();
        let u = 1e6;
        let p = solve_fixed_point(&c, 1.0, 1.0, u).unwrap();
        assert!((p.a1 * u - 1.0).abs() < 1e-3);
        assert!((p.a2 * u - 1.0).abs() < 1e-3);
        let xi = Complex64::new(3e5, 1e6 * 0.95);
        let (m1, _) = solve_complex(&c, 2.0, 1.0, xi, 0.0, 0.0).unwrap();
        assert!(((m1 * -xi) / 2.0 - 1.0).norm() < 1e-3);
    }

    #[test]
    fn complex_matches_real_form() {
        for act in [Activation::Tanh, Activation::Sigmoid, Activation::Relu, Activation::Linear] {
            let c = constants(act, 1.3).unwrap();
            for &(b, g, u) in &[(1.0, 1.0, 0.5), (2.0, 0.5, 0.1), (0.5, 4.0, 2.0)] {
                let p = solve_fixed_point(&c, b, g, u).unwrap();
                let (m1, m2) = solve_complex(&c, b, g, Complex64::new(0.0, u), 0.0, 0.0).unwrap();
                assert!((m1 - Complex64::new(0.0, p.a1)).norm() <= 1e-10, "{act}");
                assert!((m2 - Complex64::new(0.0, p.a2)).norm() <= 1e-10, "{act}");
            }
        }
    }

    #[test]
    fn linear_degenerate_case_converges() {
        let c = constants(Activation::Linear, 1.0).unwrap();
        assert!((c.eta0 - c.theta11).abs() < 1e-12);
        let p = solve_fixed_point(&c, 3.0, 0.25, 0.05).unwrap();
        assert!(p.residual <= 1e-12);
    }

    #[test]
    fn rejects_bad_domain() {
        let c = tanh1();
        assert!(solve_fixed_point(&c, 1.0, 1.0, 0.0).is_err());
        assert!(solve_complex(&c, 1.0, 1.0, Complex64::new(1.0, 0.0), 0.0, 0.0).is_err());
    }

    #[test]
    fn empirical_stieltjes_examples() {
        let i = Complex64::new(0.0, 1.0);
        assert_abs_diff_eq!((empirical_stieltjes(&[0.0], 1, i) - i).norm(), 0.0, epsilon = 1e-15);
        let v = empirical_stieltjes(&[1.0, 1.0], 2, i);
        assert_abs_diff_eq!((v - Complex64::new(0.5, 0.5)).norm(), 0.0, epsilon = 1e-15);
    }

    #[test]
    fn block_matrix_hand_case() {
        let x1 = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 0.5, -1.0]);
        let spec = BlockMatrixSpec {
            x1: x1.clone(),
            q: DMatrix::zeros(2, 2),
            s1: 0.0,
            s2: 0.0,
            d: 1,
        };
        let a = build_block_matrix(&spec).unwrap();
        assert_eq!(a, a.transpose());
        let eigs = sym_eigenvalues_desc(a).unwrap();
        let sv = x1.singular_values();
        let (hi, lo) = (sv.max(), sv.min());
        let expect = [hi, lo, -lo, -hi];
        for (e, x) in eigs.iter().zip(expect) {
            assert_abs_diff_eq!(*e, x, epsilon = 1e-12);
        }
        let zero = build_block_matrix(&BlockMatrixSpec {
            x1: DMatrix::zeros(3, 4),
            q: DMatrix::zeros(3, 3),
            s1: 0.0,
            s2: 0.0,
            d: 3,
        })
        .unwrap();
        assert!(zero.iter().all(|&v| v == 0.0));
        let bad = BlockMatrixSpec {
            x1: DMatrix::zeros(3, 4),
            q: DMatrix::zeros(2, 2),
            s1: 0.0,
            s2: 0.0,
            d: 3,
        };
        assert!(build_block_matrix(&bad).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn herglotz_on_grid(re in -3.0f64..3.0, im in 0.05f64..3.0, b in 0.25f64..4.0, g in 0.25f64..4.0, k in 0usize..4) {
            let c = constants(Activation::ALL[k], 1.0).unwrap();
            let xi = Complex64::new(re, im);
            let (m1, m2) = solve_complex(&c, b, g, xi, 0.0, 0.0).unwrap();
            prop_assert!(m1.im > 0.0 && m2.im > 0.0);
            prop_assert!(complex_residual(&c, b, g, xi, (0.0, 0.0), (m1, m2)) <= 1e-12);
        }

        #[test]
        fn real_solver_residual(u in 0.01f64..10.0, b in 0.1f64..5.0, g in 0.1f64..5.0, v in 0.3f64..3.0, k in 0usize..4) {
            let c = constants(Activation::ALL[k], v).unwrap();
            let p = solve_fixed_point(&c, b, g, u).unwrap();
            prop_assert!(p.residual <= 1e-12 && p.a1 > 0.0 && p.a2 > 0.0);
        }
    }
}
