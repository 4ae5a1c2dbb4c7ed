//! Finite-d Fisher information matrices, spectra and numerical ranks.

use std::io::Write;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::linalg::{sqrtm_psd, sym_eigenvalues_desc};
use crate::model::{Activation, ModelConfig};
use crate::output::fmt_f64;
use crate::rng;

/// Samples per Monte Carlo block; blocks are the unit of parallel work.
pub const BLOCK: usize = 1024;
/// Default relative eigenvalue cutoff for numerical rank.
pub const DEFAULT_RANK_TOL: f64 = 1e-6;

const FISHER_STREAM: u64 = 0xF15E;
const DEEP_STREAM: u64 = 0xDEE9;

/// Weights of `f(x) = w2ᵀ σ(W1 x/√d)/√N`.
#[derive(Debug, Clone, PartialEq)]
pub struct TwoLayerParams {
    /// `N×d`
    pub w1: DMatrix<f64>,
    /// length `N`
    pub w2: DVector<f64>,
}

impl TwoLayerParams {
    /// Draw from the prior: entries of `w1` have variance `1/α`, entries of
    /// `w2` variance `1/α₂`.
    pub fn sample<R: Rng + ?Sized>(cfg: &ModelConfig, rng: &mut R) -> Self {
        let s1 = (1.0 / cfg.alpha).sqrt();
        let s2 = (1.0 / cfg.alpha2).sqrt();
        let w1 = DMatrix::from_fn(cfg.n1, cfg.d, |_, _| s1 * rng::normal(rng));
        let w2 = DVector::from_fn(cfg.n1, |_, _| s2 * rng::normal(rng));
        TwoLayerParams { w1, w2 }
    }

    pub fn zeros(n1: usize, d: usize) -> Self {
        TwoLayerParams {
            w1: DMatrix::zeros(n1, d),
            w2: DVector::zeros(n1),
        }
    }

    pub fn n1(&self) -> usize {
        self.w1.nrows()
    }

    pub fn d(&self) -> usize {
        self.w1.ncols()
    }

    /// Number of parameters `N·d + N`.
    pub fn n_params(&self) -> usize {
        self.n1() * self.d() + self.n1()
    }

    pub fn check(&self, cfg: &ModelConfig) -> Result<()> {
        if self.w1.nrows() != cfg.n1 || self.w1.ncols() != cfg.d || self.w2.len() != cfg.n1 {
            return Err(Error::DimensionMismatch(format!(
                "weights are {}x{} and {}, config has n1 = {}, d = {}",
                self.w1.nrows(),
                self.w1.ncols(),
                self.w2.len(),
                cfg.n1,
                cfg.d
            )));
        }
        Ok(())
    }

    /// Network output at `x`.
    pub fn forward(&self, act: Activation, x: &[f64]) -> f64 {
        let n = self.n1();
        let sd = (self.d() as f64).sqrt();
        let mut out = 0.0;
        for i in 0..n {
            let q = self.w1.row(i).iter().zip(x).map(|(a, b)| a * b).sum::<f64>() / sd;
            out += self.w2[i] * act.value(q);
        }
        out / (n as f64).sqrt()
    }

    /// Flattened parameters in gradient order (W1 row-major, then w2).
    pub fn to_flat(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(self.n_params());
        for i in 0..self.n1() {
            v.extend(self.w1.row(i).iter());
        }
        v.extend(self.w2.iter());
        v
    }

    pub fn from_flat(n1: usize, d: usize, flat: &[f64]) -> Result<Self> {
        if flat.len() != n1 * d + n1 {
            return Err(Error::DimensionMismatch(format!(
                "expected {} parameters, got {}",
                n1 * d + n1,
                flat.len()
            )));
        }
        Ok(TwoLayerParams {
            w1: DMatrix::from_row_slice(n1, d, &flat[..n1 * d]),
            w2: DVector::from_column_slice(&flat[n1 * d..]),
        })
    }
}

/// Write the gradient of the network output with respect to all parameters
/// into `out` (length `N·d + N`): first `σ'(qᵢ)w2ᵢ x_k/√(Nd)` at index
/// `i·d + k`, then `σ(qᵢ)/√N`.
pub fn grad_two_layer_into(params: &TwoLayerParams, act: Activation, x: &[f64], out: &mut [f64]) {
    let n = params.n1();
    let d = params.d();
    let sd = (d as f64).sqrt();
    let sn = (n as f64).sqrt();
    let snd = sn * sd;
    for i in 0..n {
        let q = params.w1.row(i).iter().zip(x).map(|(a, b)| a * b).sum::<f64>() / sd;
        let g = act.derivative(q) * params.w2[i] / snd;
        let row = &mut out[i * d..(i + 1) * d];
        row.iter_mut().zip(x).for_each(|(o, &xk)| *o = g * xk);
        out[n * d + i] = act.value(q) / sn;
    }
}

/// Gradient of the network output with respect to `(W1, w2)`.
pub fn grad_two_layer(params: &TwoLayerParams, act: Activation, x: &[f64]) -> Result<DVector<f64>> {
    if x.len() != params.d() {
        return Err(Error::DimensionMismatch(format!(
            "input has length {}, weights expect {}",
            x.len(),
            params.d()
        )));
    }
    let mut out = DVector::zeros(params.n_params());
    grad_two_layer_into(params, act, x, out.as_mut_slice());
    Ok(out)
}

/// Spectrum of a Fisher matrix.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FisherSpectrum {
    /// Nonincreasing, clamped at 0.
    pub eigenvalues: Vec<f64>,
    pub mc_samples: usize,
    pub rank_estimate: usize,
    pub threshold: f64,
    /// Smallest eigenvalue before clamping.
    pub min_eigenvalue_raw: f64,
}

impl FisherSpectrum {
    pub fn from_matrix(fisher: DMatrix<f64>, mc_samples: usize, threshold: f64) -> Result<Self> {
        let raw = sym_eigenvalues_desc(fisher)?;
        let min_raw = raw.last().copied().unwrap_or(0.0);
        let eigenvalues: Vec<f64> = raw.iter().map(|&e| e.max(0.0)).collect();
        let rank_estimate = numerical_rank(&eigenvalues, threshold);
        Ok(FisherSpectrum {
            eigenvalues,
            mc_samples,
            rank_estimate,
            threshold,
            min_eigenvalue_raw: min_raw,
        })
    }

    pub fn lambda_max(&self) -> f64 {
        self.eigenvalues.first().copied().unwrap_or(0.0)
    }

    /// CSV with columns `index,eigenvalue`.
    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "index,eigenvalue")?;
        for (i, e) in self.eigenvalues.iter().enumerate() {
            writeln!(w, "{},{}", i, fmt_f64(*e))?;
        }
        Ok(())
    }
}

/// `#{λ > rel_tol·λ_max}`; 0 for an all-zero spectrum.
pub fn numerical_rank(eigs: &[f64], rel_tol: f64) -> usize {
    let max = eigs.iter().copied().fold(0.0f64, f64::max);
    if max <= 0.0 {
        return 0;
    }
    let cut = rel_tol * max;
    eigs.iter().filter(|&&e| e > cut).count()
}

/// Sum of `g gᵀ` over sample blocks, in block order regardless of scheduling.
fn block_sum<F>(p: usize, n_samples: usize, block_fn: F) -> DMatrix<f64>
where
    F: Fn(usize, usize, &mut DMatrix<f64>) + Sync,
{
    let n_blocks = n_samples.div_ceil(BLOCK);
    let mut acc = DMatrix::<f64>::zeros(p, p);
    // bounded number of partial matrices alive at once
    let group = rayon::current_num_threads().max(1) * 2;
    let mut start = 0;
    while start < n_blocks {
        let end = (start + group).min(n_blocks);
        let partials: Vec<DMatrix<f64>> = (start..end)
            .into_par_iter()
            .map(|b| {
                let len = BLOCK.min(n_samples - b * BLOCK);
                let mut g = DMatrix::<f64>::zeros(p, len);
                block_fn(b, len, &mut g);
                let mut part = DMatrix::<f64>::zeros(p, p);
                part.gemm(1.0, &g, &g.transpose(), 0.0);
                part
            })
            .collect();
        for part in partials {
            acc += part;
        }
        start = end;
    }
    acc
}

/// Monte Carlo estimate `(1/n) Σ J(xᵢ)J(xᵢ)ᵀ`, `xᵢ ~ N(0, σ_x²I)`, as a matrix.
pub fn fisher_matrix_mc(
    params: &TwoLayerParams,
    act: Activation,
    cfg: &ModelConfig,
    n_mc: usize,
    seed: u64,
) -> Result<DMatrix<f64>> {
    cfg.validate()?;
    params.check(cfg)?;
    if n_mc == 0 {
        return Err(Error::Usage("n_mc must be positive".into()));
    }
    let p = params.n_params();
    let d = params.d();
    let sx = cfg.sigma_x2.sqrt();
    let sum = block_sum(p, n_mc, |b, len, g| {
        let mut r = rng::stream(seed, &[FISHER_STREAM, b as u64]);
        let mut x = vec![0.0; d];
        let mut col = vec![0.0; p];
        for j in 0..len {
            x.iter_mut().for_each(|v| {
                *v = sx * rng::normal(&mut r)
            });
            grad_two_layer_into(params, act, &x, &mut col);
            g.column_mut(j).copy_from_slice(&col);
        }
    });
    Ok(sum / n_mc as f64)
}

/// Monte Carlo Fisher matrix of the two-layer model and its spectrum.
/// Requires `n_mc ≥ 10·P`.
pub fn fisher_mc(
    params: &TwoLayerParams,
    act: Activation,
    cfg: &ModelConfig,
    n_mc: usize,
    seed: u64,
) -> Result<FisherSpectrum> {
    fisher_mc_with_tol(params, act, cfg, n_mc, seed, DEFAULT_RANK_TOL)
}

pub fn fisher_mc_with_tol(
    params: &TwoLayerParams,
    act: Activation,
    cfg: &ModelConfig,
    n_mc: usize,
    seed: u64,
    rel_tol: f64,
) -> Result<FisherSpectrum> {
    let p = params.n_params();
    if n_mc < 10 * p {
        return Err(Error::Usage(format!(
            "n_mc = {n_mc} is below the floor 10·P = {} needed to resolve the rank",
            10 * p
        )));
    }
    if !(rel_tol.is_finite() && rel_tol > 0.0) {
        return Err(Error::InvalidConfig(format!("rank tolerance must be positive, got {rel_tol}")));
    }
    let a = fisher_matrix_mc(params, act, cfg, n_mc, seed)?;
    FisherSpectrum::from_matrix(a, n_mc, rel_tol)
}

fn check_chain(weights: &[DMatrix<f64>], d: usize) -> Result<()> {
    if weights.is_empty() {
        return Err(Error::DimensionMismatch("need at least one layer".into()));
    }
    let mut width = d;
    for (l, w) in weights.iter().enumerate() {
        if w.ncols() != width {
            return Err(Error::DimensionMismatch(format!(
                "layer {} expects input width {}, previous width is {width}",
                l + 1,
                w.ncols()
            )));
        }
        width = w.nrows();
    }
    if width != 1 {
        return Err(Error::DimensionMismatch(format!("last layer has width {width}, expected 1")));
    }
    Ok(())
}

/// `Π_l 1/N_{l−1}` with `N_0 = d`.
fn deep_scale(weights: &[DMatrix<f64>]) -> f64 {
    weights.iter().map(|w| 1.0 / w.ncols() as f64).product()
}

/// Block factor of the deep linear Fisher matrix.
#[derive(Debug, Clone)]
pub struct LinearFisherFactor {
    /// `P×d`, blocks `B_lᵀ ⊗ A_lΣ^{1/2}` stacked by layer.
    pub j: DMatrix<f64>,
    /// `(Π 1/N_{l−1}) J Jᵀ`.
    pub fisher: DMatrix<f64>,
}

/// Build `J_L` for `f(x) = W⁽ᴸ⁾⋯W⁽¹⁾x/√(Π N_{l−1})` with `x ~ N(0, Σ)`.
/// `weights[l]` is the `N_{l+1}×N_l` matrix of layer `l+1`; the last has one row.
pub fn linear_fisher_factor(weights: &[DMatrix<f64>], sigma: &DMatrix<f64>) -> Result<LinearFisherFactor> {
    let d = sigma.nrows();
    if sigma.ncols() != d {
        return Err(Error::DimensionMismatch("covariance must be square".into()));
    }
    check_chain(weights, d)?;
    let root = sqrtm_psd(sigma)?;
    let l_count = weights.len();
    let p: usize = weights.iter().map(|w| w.len()).sum();
    let mut j = DMatrix::<f64>::zeros(p, d);
    let mut offset = 0;
    for l in 0..l_count {
        // A_l = W^(l-1)⋯W^(1), B_l = W^(L)⋯W^(l+1)
        let mut a = DMatrix::<f64>::identity(d, d);
        for w in &weights[..l] {
            a = w * a;
        }
        let mut b = DMatrix::<f64>::identity(weights[l].nrows(), weights[l].nrows());
        for w in &weights[l + 1..] {
            b = w * b;
        }
        let block = b.transpose().kronecker(&(a * &root));
        j.view_mut((offset, 0), (block.nrows(), d)).copy_from(&block);
        offset += block.nrows();
    }
    let fisher = &j * j.transpose() * deep_scale(weights);
    Ok(LinearFisherFactor { j, fisher })
}

/// Gradient of the deep linear network output, each layer's matrix
/// flattened row-major, layers in order.
pub fn deep_linear_grad(weights: &[DMatrix<f64>], x: &[f64]) -> Result<DVector<f64>> {
    check_chain(weights, x.len())?;
    let c = deep_scale(weights).sqrt();
    let mut acts = vec![DVector::from_column_slice(x)];
    for w in weights {
        let next = w * acts.last().expect("nonempty");
        acts.push(next);
    }
    let p: usize = weights.iter().map(|w| w.len()).sum();
    let mut out = DVector::zeros(p);
    let mut offset = 0;
    for l in 0..weights.len() {
        let mut back = DVector::from_element(1, 1.0);
        for w in weights[l + 1..].iter().rev() {
            back = w.transpose() * back;
        }
        let input = &acts[l];
        for i in 0..weights[l].nrows() {
            for k in 0..weights[l].ncols() {
                out[offset + i * weights[l].ncols() + k] = c * back[i] * input[k];
            }
        }
        offset += weights[l].len();
    }
    Ok(out)
}

/// Monte Carlo Fisher matrix of the deep linear network, `x ~ N(0, Σ)`.
pub fn deep_linear_fisher_mc(
    weights: &[DMatrix<f64>],
    sigma: &DMatrix<f64>,
    n_mc: usize,
    seed: u64,
) -> Result<DMatrix<f64>> {
    let d = sigma.nrows();
    check_chain(weights, d)?;
    if n_mc == 0 {
        return Err(Error::Usage("n_mc must be positive".into()));
    }
    let root = sqrtm_psd(sigma)?;
    let p: usize = weights.iter().map(|w| w.len()).sum();
    let sum = block_sum(p, n_mc, |b, len, g| {
        let mut r = rng::stream(seed, &[DEEP_STREAM, b as u64]);
        for j in 0..len {
            let z = DVector::from_fn(d, |_, _| rng::normal(&mut r));
            let x = &root * z;
            let grad = deep_linear_grad(weights, x.as_slice()).expect("chain checked");
            g.column_mut(j).copy_from(&grad);
        }
    });
    Ok(sum / n_mc as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn small(act_seed: u64, n1: usize, d: usize) -> (TwoLayerParams, ModelConfig) {
        let cfg = ModelConfig::new(d, n1, 10, 1.0, 0.1, 1.0, 1.0).unwrap();
        let mut r = rng::stream(act_seed, &[]);
        (TwoLayerParams::sample(&cfg, &mut r), cfg)
    }

    fn finite_difference(p: &TwoLayerParams, act: Activation, x: &[f64]) -> Vec<f64> {
        let flat = p.to_flat();
        let h = 1e-5;
        (0..flat.len())
            .map(|k| {
                let mut a = flat.clone();
                let mut b = flat.clone();
                a[k] += h;
                b[k] -= h;
                let pa = TwoLayerParams::from_flat(p.n1(), p.d(), &a).unwrap();
                let pb = TwoLayerParams::from_flat(p.n1(), p.d(), &b).unwrap();
                (pa.forward(act, x) - pb.forward(act, x)) / (2.0 * h)
            })
            .collect()
    }

    #[test]
    fn zero_output_weights_kill_first_block() {
        let (mut p, _) = small(1, 4, 5);
        p.w2.fill(0.0);
        let g = grad_two_layer(&p, Activation::Tanh, &[0.3, -1.0, 2.0, 0.1, 0.5]).unwrap();
        assert!(g.rows(0, 20).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn gradient_matches_finite_differences() {
        for act in [Activation::Linear, Activation::Tanh, Activation::Sigmoid] {
            let (p, _) = small(7, 2, 3);
            let x = [0.4, -1.1, 0.7];
            let g = grad_two_layer(&p, act, &x).unwrap();
            let fd = finite_difference(&p, act, &x);
            let scale = g.amax().max(1e-12);
            for (a, b) in g.iter().zip(&fd) {
                assert!((a - b).abs() <= 1e-6 * scale, "{act}: {a} vs {b}");
            }
        }
    }

    #[test]
    fn rank_examples() {
        assert_eq!(numerical_rank(&[1.0, 0.5, 1e-12], 1e-6), 2);
        assert_eq!(numerical_rank(&[0.0, 0.0], 1e-6), 0);
        assert_eq!(numerical_rank(&[], 1e-6), 0);
    }

    #[test]
    fn linear_rank_is_d() {
        let (p, cfg) = small(3, 6, 8);
        let s = fisher_mc(&p, Activation::Linear, &cfg, 10 * p.n_params(), 11).unwrap();
        assert_eq!(s.rank_estimate, 8);
        assert!(s.min_eigenvalue_raw >= -1e-10 * s.lambda_max());
    }

    #[test]
    fn zero_w2_rank_at_most_n1() {
        let (mut p, cfg) = small(3, 6, 8);
        p.w2.fill(0.0);
        let s = fisher_mc(&p, Activation::Tanh, &cfg, 10 * p.n_params(), 11).unwrap();
        assert!(s.rank_estimate <= 6);
    }

    #[test]
    fn sample_floor_is_enforced() {
        let (p, cfg) = small(3, 6, 8);
        let e = fisher_mc(&p, Activation::Tanh, &cfg, 100, 1).unwrap_err();
        assert!(matches!(e, Error::Usage(_)));
    }

    #[test]
    fn single_layer_factor_is_sigma_over_d() {
        let sigma = DMatrix::from_row_slice(3, 3, &[2.0, 0.3, 0.0, 0.3, 1.0, 0.1, 0.0, 0.1, 0.5]);
        let w = DMatrix::from_row_slice(1, 3, &[0.2, -0.4, 1.0]);
        let f = linear_fisher_factor(&[w], &sigma).unwrap();
        assert_abs_diff_eq!((f.fisher - &sigma / 3.0).norm(), 0.0, epsilon = 1e-12);
    }

    #[test]
    fn deep_gradient_matches_finite_differences() {
        let mut r = rng::stream(5, &[]);
        let mut draw = |a: usize, b: usize| DMatrix::from_fn(a, b, |_, _| rng::normal(&mut r));
        let ws = vec![draw(4, 3), draw(2, 4), draw(1, 2)];
        let x = [0.5, -0.2, 1.3];
        let g = deep_linear_grad(&ws, &x).unwrap();
        let out = |ws: &[DMatrix<f64>]| {
            let mut v = DVector::from_column_slice(&x);
            for w in ws {
                v = w * v;
            }
            v[0] * deep_scale(ws).sqrt()
        };
        let mut idx = 0;
        for l in 0..ws.len() {
            for i in 0..ws[l].nrows() {
                for k in 0..ws[l].ncols() {
                    let mut a = ws.clone();
                    let mut b = ws.clone();
                    a[l][(i, k)] += 1e-6;
                    b[l][(i, k)] -= 1e-6;
                    let fd = (out(&a) - out(&b)) / 2e-6;
                    assert_abs_diff_eq!(g[idx], fd, epsilon = 1e-8);
                    idx += 1;
                }
            }
        }
    }

    #[test]
    fn chain_mismatch_is_rejected() {
        let ws = vec![DMatrix::zeros(4, 3), DMatrix::zeros(1, 5)];
        assert!(linear_fisher_factor(&ws, &DMatrix::identity(3, 3)).is_err());
        let ws = vec![DMatrix::zeros(2, 3)];
        assert!(linear_fisher_factor(&ws, &DMatrix::identity(3, 3)).is_err());
    }

    #[test]
    fn fisher_is_schedule_independent() {
        let (p, cfg) = small(9, 3, 4);
        let n = 10 * p.n_params() + 2 * BLOCK;
        let a = fisher_matrix_mc(&p, Activation::Tanh, &cfg, n, 4).unwrap();
        let pool = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
        let b = pool.install(|| fisher_matrix_mc(&p, Activation::Tanh, &cfg, n, 4).unwrap());
        assert!((a - b).amax() == 0.0);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        #[test]
        fn rank_never_exceeds_samples_or_params(seed in 0u64..1000, n1 in 1usize..5, d in 1usize..5) {
            let (p, cfg) = small(seed, n1, d);
            let n = 10 * p.n_params();
            let s = fisher_mc(&p, Activation::Tanh, &cfg, n, seed).unwrap();
            prop_assert!(s.rank_estimate <= p.n_params().min(n));
            prop_assert!(s.eigenvalues.windows(2).all(|w| w[0] >= w[1]));
            prop_assert!(s.eigenvalues.iter().all(|&e| e >= 0.0));
        }
    }
}
