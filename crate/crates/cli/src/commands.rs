use std::fmt::Write as _;

use crlb_core::bounds::{bound_linear_any, bound_two_layer, bound_unbiased_for, ridge_report};
use crlb_core::experiments::{generate_teacher, linear_grid, run_teacher_student, sweep, write_sweep_csv};
use crlb_core::fisher::fisher_mc_with_tol;
use crlb_core::model::{constants_for, ConfigFile};
use crlb_core::mp_law::{mp_density, mp_integrate};
use crlb_core::rmt_verify::{
    check_ar_decomposition, check_gaussian_expansion, check_replacements, check_sigma_convergence,
    ConvergenceReport, Differentiable, Estimator, SigmaMode,
};
use crlb_core::stieltjes::{complex_residual, solve_complex, solve_fixed_point};
use crlb_core::{
    Activation, BoundReport, Error, MPLaw, ModelConfig, RankModel, Result, SgdConfig, SweepKind, Warning,
};
use num_complex::Complex64;
use serde_json::{json, Value};

use crate::args::*;

const DEFAULT_SEED: u64 = 42;

pub struct Output {
    pub body: Vec<u8>,
    pub code: u8,
}

impl Output {
    fn ok(body: impl Into<Vec<u8>>) -> Self {
        Output {
            body: body.into(),
            code: 0,
        }
    }
}

struct Ctx {
    file: ConfigFile,
    seed: u64,
    json: bool,
}

impl Ctx {
    fn new(cli: &Cli) -> Result<Self> {
        let file = match &cli.config {
            Some(p) => ConfigFile::load(p)?,
            None => ConfigFile::default(),
        };
        let seed = cli.seed.or(file.seed).unwrap_or(DEFAULT_SEED);
        Ok(Ctx {
            file,
            seed,
            json: cli.json,
        })
    }

    fn model(&self, a: &ModelArgs) -> Result<(ModelConfig, Activation)> {
        let mut cfg = self.file.apply_to(ModelConfig::default());
        macro_rules! take {
            ($($f:ident),*) => { $( if let Some(v) = a.$f { cfg.$f = v; } )* };
        }
        take!(d, n1, m, sigma_x2, sigma_eps2, alpha, alpha2);
        cfg.validate()?;
        if let Some(snr) = a.snr_db {
            cfg = cfg.with_snr_db(snr)?;
        }
        let act = a.activation.or(self.file.activation).unwrap_or(Activation::Tanh);
        Ok((cfg, act))
    }

    fn json(&self, v: Value) -> Output {
        let mut s = serde_json::to_string_pretty(&v).expect("json values serialize");
        s.push('\n');
        Output::ok(s)
    }
}

fn to_json<T: serde::Serialize>(v: &T) -> Value {
    serde_json::to_value(v).expect("report types serialize")
}

fn estimator(e: &EstimatorArgs) -> Estimator {
    match e.mc {
        Some(n_mc) => Estimator::MonteCarlo { n_mc },
        None => Estimator::Exact,
    }
}

fn warn(report: &BoundReport) {
    for w in &report.warnings {
        match w {
            Warning::ReluNotSmooth => eprintln!("warning: relu is not smooth; the bound assumes a smooth activation"),
            Warning::SigmaEpsPrefactorOmitted => {
                eprintln!("warning: reported as max(B1, B2) without an extra sigma_eps2 factor")
            }
        }
    }
}

fn sgd_config(t: &TrainArgs, seed: u64) -> Result<SgdConfig> {
    let s = SgdConfig {
        epochs: t.epochs,
        batch_size: t.batch_size,
        lr_c: t.lr_c,
        n_theta: t.n_theta,
        n_datasets: t.n_datasets,
        n_test: t.n_test,
        seed,
    };
    s.validate()?;
    Ok(s)
}

fn csv_report(rep: &ConvergenceReport) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    rep.write_csv(&mut buf)?;
    Ok(buf)
}

fn note_convergence(label: &str, rep: &ConvergenceReport) {
    eprintln!("{label}: decreasing={} ratios={:?}", rep.decreasing, rep.ratios);
}

pub fn run(cli: &Cli) -> Result<Output> {
    let ctx = Ctx::new(cli)?;
    match &cli.command {
        Command::Constants(m) => constants(&ctx, m),
        Command::Bound(b) => bound(&ctx, b),
        Command::Sweep(s) => run_sweep(&ctx, s),
        Command::Sgd(s) => sgd(&ctx, s),
        Command::FisherRank(f) => fisher_rank(&ctx, f),
        Command::Verify(v) => verify(&ctx, v),
        Command::Mp(m) => mp(&ctx, m),
    }
}

fn constants(ctx: &Ctx, m: &ModelArgs) -> Result<Output> {
    let (cfg, act) = ctx.model(m)?;
    let k = constants_for(&cfg, act)?;
    if ctx.json {
        return Ok(ctx.json(to_json(&k)));
    }
    Ok(Output::ok(format!("eta0={} theta11={} eta1={}\n", k.eta0, k.theta11, k.eta1)))
}

fn bound(ctx: &Ctx, b: &BoundCmd) -> Result<Output> {
    match b {
        BoundCmd::Unbiased { model, rank_model } => {
            let (cfg, _) = ctx.model(model)?;
            let rm = match rank_model {
                RankArg::LinearRegression => RankModel::LinearRegression,
                RankArg::LinearTwoLayer => RankModel::LinearTwoLayer,
                RankArg::NonlinearTwoLayer => RankModel::NonlinearTwoLayer,
            };
            let r = bound_unbiased_for(rm, &cfg)?;
            if ctx.json {
                return Ok(ctx.json(to_json(&r)));
            }
            Ok(Output::ok(format!("value={}\n", r.value)))
        }
        BoundCmd::Linear { model, lambda } => {
            let (cfg, _) = ctx.model(model)?;
            let r = bound_linear_any(&cfg)?;
            let ridge = lambda.map(|l| ridge_report(&cfg, l)).transpose()?;
            if ctx.json {
                return Ok(ctx.json(json!({ "bound": to_json(&r), "ridge": ridge.as_ref().map(to_json) })));
            }
            let mut s = format!("value={}\n", r.value);
            if let (Some(l), Some(rr)) = (lambda, &ridge) {
                writeln!(s, "lambda={l} ridge_error={}", rr.value).unwrap();
            }
            Ok(Output::ok(s))
        }
        BoundCmd::TwoLayer { model } => {
            let (cfg, act) = ctx.model(model)?;
            let r = bound_two_layer(&cfg, act)?;
            warn(&r);
            if ctx.json {
                return Ok(ctx.json(to_json(&r)));
            }
            let b1 = r.b1.unwrap_or(f64::NAN);
            let b2 = r.b2.unwrap_or(f64::NAN);
            Ok(Output::ok(format!("value={} b1={b1} b2={b2}\n", r.value)))
        }
    }
}

fn run_sweep(ctx: &Ctx, s: &SweepArgs) -> Result<Output> {
    let (cfg, act) = ctx.model(&s.model)?;
    let kind = match s.kind {
        SweepArg::Snr => SweepKind::Snr,
        SweepArg::Gamma0 => SweepKind::Gamma0,
        SweepArg::Beta1 => SweepKind::Beta1,
    };
    let grid = linear_grid(s.from, s.to, s.points)?;
    for &v in &grid {
        kind.apply(&cfg, v)?;
    }
    let sgd = if s.sgd { Some(sgd_config(&s.train, ctx.seed)?) } else { None };
    let rows = sweep(kind, &grid, &cfg, act, sgd.as_ref())?;
    let failed: Vec<_> = rows.iter().filter(|r| r.status != "ok").collect();
    for r in &failed {
        eprintln!("{} = {}: {}", kind.name(), r.value, r.status);
    }
    let body = if ctx.json {
        ctx.json(to_json(&rows)).body
    } else {
        let mut buf = Vec::new();
        write_sweep_csv(&rows, &mut buf)?;
        buf
    };
    Ok(Output {
        body,
        code: if failed.is_empty() { 0 } else { 2 },
    })
}

fn sgd(ctx: &Ctx, s: &SgdArgs) -> Result<Output> {
    let (cfg, act) = ctx.model(&s.model)?;
    let sc = sgd_config(&s.train, ctx.seed)?;
    let r = run_teacher_student(&cfg, act, &sc)?;
    if ctx.json {
        return Ok(ctx.json(to_json(&r)));
    }
    Ok(Output::ok(format!(
        "gen_error={} excess_error={} bias2={} variance={} stderr={} n_runs={}\n",
        r.gen_error, r.excess_error, r.bias2, r.variance, r.stderr, r.n_runs
    )))
}

fn fisher_rank(ctx: &Ctx, f: &FisherArgs) -> Result<Output> {
    let (cfg, act) = ctx.model(&f.model)?;
    let params = generate_teacher(&cfg, ctx.seed)?;
    let p = params.n_params();
    let n_mc = f.n_mc.unwrap_or(20 * p);
    let spec = fisher_mc_with_tol(&params, act, &cfg, n_mc, ctx.seed, f.threshold)?;
    if ctx.json {
        return Ok(ctx.json(to_json(&spec)));
    }
    if f.spectrum {
        let mut buf = Vec::new();
        spec.write_csv(&mut buf)?;
        eprintln!("rank={} params={p}", spec.rank_estimate);
        return Ok(Output::ok(buf));
    }
    Ok(Output::ok(format!(
        "rank={} params={p} lambda_max={} n_mc={n_mc} threshold={}\n",
        spec.rank_estimate,
        spec.lambda_max(),
        spec.threshold
    )))
}

fn verify(ctx: &Ctx, v: &VerifyCmd) -> Result<Output> {
    match v {
        VerifyCmd::Sigma {
            model,
            dims,
            trials,
            mode,
            estimator: e,
        } => {
            let (cfg, act) = ctx.model(model)?;
            let mode = match mode {
                ModeArg::Projection => SigmaMode::Projection,
                ModeArg::LeastSquares => SigmaMode::LeastSquares,
            };
            let rep = check_sigma_convergence(act, &cfg, dims, *trials, mode, estimator(e), ctx.seed)?;
            note_convergence("sigma", &rep);
            if ctx.json {
                return Ok(ctx.json(to_json(&rep)));
            }
            Ok(Output::ok(csv_report(&rep)?))
        }
        VerifyCmd::Replacements {
            model,
            dims,
            trials,
            estimator: e,
        } => {
            let (cfg, act) = ctx.model(model)?;
            let (q, i) = check_replacements(&cfg, act, dims, *trials, estimator(e), ctx.seed)?;
            note_convergence("q", &q);
            note_convergence("i", &i);
            if ctx.json {
                return Ok(ctx.json(json!({ "q": to_json(&q), "i": to_json(&i) })));
            }
            let mut s = String::from("check,dim,metric,trials\n");
            for (name, rep) in [("q", &q), ("i", &i)] {
                let csv = String::from_utf8(csv_report(rep)?).expect("csv is utf-8");
                for line in csv.lines().skip(1) {
                    writeln!(s, "{name},{line}").unwrap();
                }
            }
            Ok(Output::ok(s))
        }
        VerifyCmd::Expansion {
            f1,
            f2,
            v1,
            v2,
            eps,
            estimator: e,
        } => {
            let g1 = Differentiable::from_activation(*f1);
            let g2 = Differentiable::from_activation(*f2);
            let rep = check_gaussian_expansion(&g1, &g2, *v1, *v2, eps, estimator(e), ctx.seed)?;
            match rep.slope {
                Some(sl) => eprintln!("slope={sl}"),
                None => eprintln!("slope unavailable: fewer than two usable points"),
            }
            if ctx.json {
                return Ok(ctx.json(to_json(&rep)));
            }
            let mut buf = Vec::new();
            rep.write_csv(&mut buf)?;
            Ok(Output::ok(buf))
        }
        VerifyCmd::Ar { model, estimator: e } => {
            let (cfg, act) = ctx.model(model)?;
            let r = check_ar_decomposition(&cfg, act, estimator(e), ctx.seed)?;
            if ctx.json {
                return Ok(ctx.json(to_json(&r)));
            }
            Ok(Output::ok(format!(
                "n1={} d={} removed={} a_r_frobenius={} gap_frobenius={} residual_frobenius={} residual_ratio={}\n",
                r.n1, r.d, r.removed, r.a_r_frobenius, r.gap_frobenius, r.residual_frobenius, r.residual_ratio
            )))
        }
        VerifyCmd::Stieltjes { model, u } => {
            let (cfg, act) = ctx.model(model)?;
            let k = constants_for(&cfg, act)?;
            let us = if u.is_empty() { vec![cfg.u_c()] } else { u.clone() };
            if let Some(bad) = us.iter().find(|x| !(x.is_finite() && **x > 0.0)) {
                return Err(Error::InvalidConfig(format!("u must be positive, got {bad}")));
            }
            let (b1, g0) = (cfg.beta1(), cfg.gamma0());
            let mut rows = Vec::new();
            for &x in &us {
                let p = solve_fixed_point(&k, b1, g0, x)?;
                let xi = Complex64::new(0.0, x);
                let (m1, m2) = solve_complex(&k, b1, g0, xi, 0.0, 0.0)?;
                let cres = complex_residual(&k, b1, g0, xi, (0.0, 0.0), (m1, m2));
                let cons = (m1 - Complex64::new(0.0, p.a1))
                    .norm()
                    .max((m2 - Complex64::new(0.0, p.a2)).norm());
                rows.push((p, cres, cons));
            }
            if ctx.json {
                let v: Vec<Value> = rows
                    .iter()
                    .map(|(p, c, k)| json!({ "pair": to_json(p), "complex_residual": c, "consistency": k }))
                    .collect();
                return Ok(ctx.json(Value::Array(v)));
            }
            let mut s = String::from("u,a1,a2,residual,complex_residual,consistency,iterations\n");
            for (p, c, k) in &rows {
                writeln!(
                    s,
                    "{},{},{},{},{},{},{}",
                    fmt(p.u),
                    fmt(p.a1),
                    fmt(p.a2),
                    fmt(p.residual),
                    fmt(*c),
                    fmt(*k),
                    p.iterations
                )
                .unwrap();
            }
            Ok(Output::ok(s))
        }
    }
}

fn fmt(x: f64) -> String {
    crlb_core::output::fmt_f64(x)
}

fn mp(ctx: &Ctx, m: &MpCmd) -> Result<Output> {
    match m {
        MpCmd::Density { gamma, points } => {
            let law = MPLaw::new(*gamma)?;
            if *points < 2 {
                return Err(Error::InvalidConfig("density grid needs at least two points".into()));
            }
            let step = (law.lambda_plus - law.lambda_minus) / (*points - 1) as f64;
            let grid: Vec<(f64, f64)> = (0..*points)
                .map(|i| {
                    let s = law.lambda_minus + step * i as f64;
                    (s, mp_density(&law, s))
                })
                .collect();
            if ctx.json {
                let pts: Vec<Value> = grid.iter().map(|(s, p)| json!({ "s": s, "density": p })).collect();
                return Ok(ctx.json(json!({ "law": to_json(&law), "points": pts })));
            }
            eprintln!("atom_mass={}", law.atom_mass);
            let mut s = String::from("s,density\n");
            for (x, p) in grid {
                writeln!(s, "{},{}", fmt(x), fmt(p)).unwrap();
            }
            Ok(Output::ok(s))
        }
        MpCmd::Integrate {
            gamma,
            integrand,
            shift,
        } => {
            let law = MPLaw::new(*gamma)?;
            let b = *shift;
            let needs_shift = matches!(integrand, IntegrandArg::Resolvent | IntegrandArg::Log);
            if needs_shift && !(b.is_finite() && b > 0.0) {
                return Err(Error::InvalidConfig(format!("shift must be positive, got {b}")));
            }
            let value = match integrand {
                IntegrandArg::One => mp_integrate(&law, |_| 1.0)?,
                IntegrandArg::S => mp_integrate(&law, |s| s)?,
                IntegrandArg::S2 => mp_integrate(&law, |s| s * s)?,
                IntegrandArg::Resolvent => mp_integrate(&law, |s| 1.0 / (s + b))?,
                IntegrandArg::Log => mp_integrate(&law, |s| (s + b).ln())?,
            };
            if ctx.json {
                return Ok(ctx.json(json!({ "gamma": gamma, "value": value })));
            }
            Ok(Output::ok(format!("value={value}\n")))
        }
    }
}
