//! Drivers behind the subcommands.

use std::path::Path;

use fibrekahler::adiabatic::{log_slope, theta_extraction, ExpansionState};
use fibrekahler::exterior::top_coefficient;
use fibrekahler::fibration::{wp_pointwise, FibredSpace};
use fibrekahler::geometry::d_wedge_dbar;
use fibrekahler::ift::SolveProblem;
use fibrekahler::twisted::{Twist, TwistedProblem};
use fibrekahler::{ddbar, ScalarField, C64};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::config::{RunConfig, TwistSpec};
use crate::output::{write_csv, write_json, Cell, Context, RunError};

/// Invariant suites run by `verify`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum Suite {
    All,
    Geometry,
    Twisted,
    Fibration,
    Adiabatic,
    Ift,
}

/// Residual below which an expansion order counts as exact.
pub const EXACT_RESIDUAL: f64 = 1e-10;

/// r-list for the θ identity, long enough for the extrapolation to settle.
pub const THETA_R_LIST: [f64; 6] = [32.0, 64.0, 128.0, 256.0, 512.0, 1024.0];

#[derive(Debug, Clone, Serialize)]
pub struct Check {
    pub suite: String,
    pub name: String,
    pub value: f64,
    pub bound: f64,
    pub pass: bool,
}

fn check(suite: &str, name: &str, value: f64, bound: f64) -> Check {
    Check {
        suite: suite.into(),
        name: name.into(),
        value,
        bound,
        pass: value <= bound,
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct VerifyReport {
    pub run: String,
    pub failed: usize,
    pub checks: Vec<Check>,
}

pub fn testbed(cfg: &RunConfig) -> Result<FibredSpace, RunError> {
    FibredSpace::make_testbed(&cfg.testbed()).context(|| {
        format!(
            "testbed (ε = {}, base grid {}, fibre grid {})",
            cfg.epsilon, cfg.base_grid, cfg.fibre_grid
        )
    })
}

fn geometry_suite(fs: &FibredSpace, seed: u64) -> fibrekahler::Result<Vec<Check>> {
    let s = "geometry";
    let om = fs.omega0();
    let lat = fs.total();
    let n = om.dim() as f64;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let b1 = ddbar(&ScalarField::random_smooth(lat, 1, 1.0, &mut rng));
    let b2 = ddbar(&ScalarField::random_smooth(lat, 1, 1.0, &mut rng));
    let l1 = om.trace(&b1)?;
    let l2 = om.trace(&b2)?;
    let ip = om.inner11(&b1, &b2)?;
    let tw = om.trace(om.form())?;
    let (mut wedge, mut trace) = (0.0f64, 0.0f64);
    for idx in 0..lat.len() {
        let g = om.form().matrix_at(idx);
        let m1 = b1.matrix_at(idx);
        let vol = top_coefficient(&[&g, &g]);
        let lhs = 2.0 * top_coefficient(&[&m1, &b2.matrix_at(idx)]);
        let rhs = (l1.values()[idx] * l2.values()[idx] - ip.values()[idx]) * vol;
        wedge = wedge.max((lhs - rhs).norm() / (lhs.norm() + rhs.norm() + 1e-3));
        let quotient = 2.0 * top_coefficient(&[&m1, &g]) / vol;
        trace = trace
            .max((l1.values()[idx] - quotient).norm() / l1.values()[idx].norm().max(1.0))
            .max((tw.values()[idx] - n).norm() / n);
    }
    let f = ScalarField::random_smooth(lat, 2, 1.0, &mut rng);
    let p = ScalarField::random_smooth(lat, 2, 1.0, &mut rng);
    let gp = om.grad_pair(&f, &p)?;
    let tr = om.trace(&d_wedge_dbar(&f, &p))?.scale_re(2.0);
    let strong = om.integrate(&(&p * &om.lichnerowicz(&f)?));
    let df = om.d_operator(&f)?;
    let dp = om.d_operator(&p)?;
    let weak = om.integrate(&om.d_pairing(&df, &dp)?);
    let scale = om.integrate(&om.d_pairing(&df, &df)?).norm().sqrt() * om.integrate(&om.d_pairing(&dp, &dp)?).norm().sqrt();
    Ok(vec![
        check(s, "wedge identity", wedge, 1e-8),
        check(s, "trace consistency", trace, 1e-8),
        check(s, "gradient pairing", (&gp - &tr).max_abs() / gp.max_abs(), 1e-8),
        check(s, "lichnerowicz weak form", (strong - weak).norm() / scale, 1e-8),
    ])
}

fn twist(fs: &FibredSpace, spec: &TwistSpec) -> fibrekahler::Result<Twist> {
    match spec {
        TwistSpec::Zero => Ok(Twist::zero(fs.total())),
        TwistSpec::PullbackDegenerate { scale } => Twist::pullback_flat(fs.total(), 0, *scale),
        TwistSpec::FromFibration => Twist::new(fs.pullback_form(fs.alpha_form())?),
    }
}

fn twisted_suite(fs: &FibredSpace, cfg: &RunConfig) -> fibrekahler::Result<Vec<Check>> {
    let s = "twisted";
    let prob = TwistedProblem::new(fs.omega0().clone(), twist(fs, &cfg.twist)?)?;
    let lat = fs.total();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed + 1);
    let mut weak_err = 0.0f64;
    for _ in 0..2 {
        let phi = ScalarField::random_smooth(lat, 1, 1.0, &mut rng);
        let psi = ScalarField::random_smooth(lat, 1, 1.0, &mut rng);
        let strong = prob.omega().integrate(&(&psi * &prob.l_alpha(&phi)?));
        let weak = prob.l_alpha_weak(&phi, &psi)?;
        weak_err = weak_err.max((strong - weak).norm() / strong.norm().max(weak.norm()));
    }
    let f = ScalarField::random_smooth(lat, 1, 0.5, &mut rng);
    let dphi = ScalarField::random_smooth(lat, 1, 0.5, &mut rng);
    let dh = ScalarField::random_smooth(lat, 1, 0.5, &mut rng);
    let lin = prob.linearized_p(&dphi, &dh, &f)?;
    let eps = [1e-2, 1e-3, 1e-4];
    let mut errs = Vec::new();
    for &e in &eps {
        let p = prob.extremal_operator(&dphi.scale_re(e), &f.axpy(e, &dh))?;
        let m = prob.extremal_operator(&dphi.scale_re(-e), &f.axpy(-e, &dh))?;
        errs.push((&(&p - &m).scale_re(0.5 / e) - &lin).max_abs());
    }
    let slope = log_slope(&eps, &errs);
    let kernel = prob.kernel_analysis(1e-6, 300, None)?;
    Ok(vec![
        check(s, "weak form", weak_err, 1e-8),
        check(s, "linearisation slope defect", (slope - 2.0).abs(), 0.1),
        check(s, "negated smallest eigenvalue", -kernel.lambda_min, 0.0),
    ])
}

fn fibration_suite(fs: &FibredSpace, cfg: &RunConfig) -> fibrekahler::Result<Vec<Check>> {
    let s = "fibration";
    let inv = fs.invariants();
    let tau0 = C64::new(cfg.fibre_tau[0], cfg.fibre_tau[1]);
    let b0 = [C64::new(0.0, 0.0)];
    let one = wp_pointwise(&|b: &[C64]| tau0 + b[0], &b0, cfg.fibre_grid)?;
    let two = wp_pointwise(&|b: &[C64]| tau0 + 2.0 * b[0], &b0, cfg.fibre_grid)?;
    let scaling = (two[(0, 0)].re / (4.0 * one[(0, 0)].re) - 1.0).abs();
    Ok(vec![
        check(s, "alpha closedness", inv.alpha_closed, 1e-8),
        check(s, "alpha - wp gap over sup alpha", inv.alpha_wp_gap / inv.alpha_sup.max(f64::MIN_POSITIVE), 1e-8),
        check(s, "wp family quadratic scaling", scaling, 1e-6),
        check(s, "wp family negativity", -one[(0, 0)].re, 1e-8),
    ])
}

fn adiabatic_suite(fs: &FibredSpace, cfg: &RunConfig) -> fibrekahler::Result<Vec<Check>> {
    let s = "adiabatic";
    let (_, theta) = theta_extraction(fs, &THETA_R_LIST)?;
    let theta_err = if theta.identity_scale > 1e-12 {
        theta.relative_identity_error()
    } else {
        theta.identity_error
    };
    let mut out = vec![check(s, "theta identity", theta_err, 1e-6)];
    let opts = cfg.expansion();
    let mut st = ExpansionState::build(fs, 0, &opts)?;
    for p in 0..=cfg.p_max {
        if p > 0 {
            st = st.inductive_step(&opts)?;
        }
        let (rows, slope) = st.residual_fit(&cfg.r_list)?;
        let exact = rows.iter().all(|(_, sup, _)| *sup < EXACT_RESIDUAL);
        let excess = if exact { 0.0 } else { slope + (p as f64 + 1.0) };
        out.push(check(s, &format!("decay excess p={p}"), excess, 0.3));
    }
    Ok(out)
}

fn ift_suite(fs: &FibredSpace, cfg: &RunConfig) -> fibrekahler::Result<Vec<Check>> {
    let s = "ift";
    let st = ExpansionState::build(fs, cfg.solve_p, &cfg.expansion())?;
    let prob = SolveProblem::new(st, cfg.solve_r, cfg.ift())?;
    let cert = prob.certificate()?;
    let newton = prob.newton();
    let final_res = newton.as_ref().map_or(f64::INFINITY, |o| *o.residuals.last().expect("initial residual"));
    let bad = cert.certified && newton.is_err();
    Ok(vec![
        check(s, "certificate inconsistency", if cert.is_consistent() { 0.0 } else { 1.0 }, 0.0),
        check(s, "certified but diverged", if bad { 1.0 } else { 0.0 }, 0.0),
        check(s, "final residual", final_res, cfg.newton_tol),
    ])
}

pub fn verify(cfg: &RunConfig, suite: Suite, out: &Path) -> Result<VerifyReport, RunError> {
    let fs = testbed(cfg)?;
    let mut checks = Vec::new();
    let want = |s: Suite| suite == Suite::All || suite == s;
    if want(Suite::Geometry) {
        checks.extend(geometry_suite(&fs, cfg.seed).context(|| "geometry suite".into())?);
    }
    if want(Suite::Twisted) {
        checks.extend(twisted_suite(&fs, cfg).context(|| "twisted suite".into())?);
    }
    if want(Suite::Fibration) {
        checks.extend(fibration_suite(&fs, cfg).context(|| "fibration suite".into())?);
    }
    if want(Suite::Adiabatic) {
        checks.extend(adiabatic_suite(&fs, cfg).context(|| "adiabatic suite".into())?);
    }
    if want(Suite::Ift) {
        checks.extend(ift_suite(&fs, cfg).context(|| format!("ift suite (r = {}, p = {})", cfg.solve_r, cfg.solve_p))?);
    }
    let report = VerifyReport {
        run: cfg.name.clone(),
        failed: checks.iter().filter(|c| !c.pass).count(),
        checks,
    };
    write_json(&out.join("verify.json"), &report)?;
    let rows: Vec<Vec<Cell>> = report
        .checks
        .iter()
        .map(|c| vec![c.suite.as_str().into(), c.name.as_str().into(), c.value.into(), c.bound.into(), c.pass.into()])
        .collect();
    write_csv(&out.join("verify.csv"), &["suite", "check", "value", "bound", "pass"], &rows)?;
    if report.failed > 0 {
        return Err(RunError::Invariant(report.failed));
    }
    Ok(report)
}

pub fn expand(cfg: &RunConfig, out: &Path) -> Result<(), RunError> {
    let fs = testbed(cfg)?;
    let opts = cfg.expansion();
    let mut st = ExpansionState::build(&fs, 0, &opts).context(|| "adiabatic expansion p = 0".into())?;
    let mut rows = Vec::new();
    let mut slopes = Vec::new();
    for p in 0..=cfg.p_max {
        if p > 0 {
            st = st.inductive_step(&opts).context(|| format!("adiabatic expansion p = {p}"))?;
        }
        let (fit, slope) = st.residual_fit(&cfg.r_list).context(|| format!("residual fit p = {p}"))?;
        for (r, sup, l2) in fit {
            rows.push(vec![p.into(), r.into(), sup.into(), l2.into()]);
        }
        slopes.push(vec![p.into(), slope.into(), st.beta(cfg.r_list[0]).into()]);
    }
    write_csv(&out.join("residuals.csv"), &["p", "r", "sup_residual", "l2_residual"], &rows)?;
    write_csv(&out.join("slopes.csv"), &["p", "slope", "beta_at_first_r"], &slopes)
}

#[derive(Debug, Clone, Serialize)]
pub struct WpSummary {
    pub run: String,
    pub max_gap: f64,
    pub alpha_sup: f64,
    pub fibre_scalar_curvature_spread: f64,
    pub family_value: f64,
}

pub fn wp(cfg: &RunConfig, out: &Path) -> Result<WpSummary, RunError> {
    let fs = testbed(cfg)?;
    let data = fs.wp_data();
    let tau0 = C64::new(cfg.fibre_tau[0], cfg.fibre_tau[1]);
    let family = wp_pointwise(&|b: &[C64]| tau0 + b[0], &[C64::new(0.0, 0.0)], cfg.fibre_grid)
        .context(|| "pointwise Weil–Petersson family".into())?[(0, 0)]
        .re;
    let base = fs.base();
    let mut rows = Vec::new();
    let mut max_gap = 0.0f64;
    for idx in 0..base.len() {
        let x = base.coords(idx);
        let a = data.alpha.at(0, 0, idx).re;
        let w = data.wp.at(0, 0, idx).re;
        let wc = data.wp_constant_sfib.at(0, 0, idx).re;
        max_gap = max_gap.max((a - w).abs());
        rows.push(vec![idx.into(), x[0].into(), x[1].into(), a.into(), w.into(), wc.into(), (a - w).abs().into(), family.into()]);
    }
    write_csv(
        &out.join("wp.csv"),
        &["index", "x", "y", "alpha", "omega_wp", "omega_wp_constant_sfib", "abs_gap", "family_value"],
        &rows,
    )?;
    let summary = WpSummary {
        run: cfg.name.clone(),
        max_gap,
        alpha_sup: data.alpha.max_abs(),
        fibre_scalar_curvature_spread: data.s_fib_spread,
        family_value: family,
    };
    write_json(&out.join("wp_summary.json"), &summary)?;
    Ok(summary)
}

fn solve_problem(cfg: &RunConfig) -> Result<SolveProblem, RunError> {
    let fs = testbed(cfg)?;
    let ctx = || format!("finite-r problem (r = {}, p = {})", cfg.solve_r, cfg.solve_p);
    let st = ExpansionState::build(&fs, cfg.solve_p, &cfg.expansion()).context(ctx)?;
    SolveProblem::new(st, cfg.solve_r, cfg.ift()).context(ctx)
}

pub fn solve(cfg: &RunConfig, out: &Path) -> Result<fibrekahler::ift::NewtonRecord, RunError> {
    let prob = solve_problem(cfg)?;
    let cert = prob.certificate().context(|| "certificate".into())?;
    match prob.newton() {
        Ok(o) => {
            let rec = prob.record(&cert, Some(&o));
            write_json(&out.join("solve.json"), &rec)?;
            Ok(rec)
        }
        Err(e) => {
            write_json(&out.join("solve.json"), &prob.record(&cert, None))?;
            Err(RunError::Geometry {
                context: format!("Newton solve (certified = {})", cert.certified),
                source: e,
            })
        }
    }
}

pub fn certify(cfg: &RunConfig, out: &Path) -> Result<fibrekahler::ift::Certificate, RunError> {
    let prob = solve_problem(cfg)?;
    let cert = prob.certificate().context(|| "certificate".into())?;
    write_json(&out.join("certify.json"), &cert)?;
    Ok(cert)
}
