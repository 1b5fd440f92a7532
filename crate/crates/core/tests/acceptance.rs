//! Acceptance suite. Prints one PASS/FAIL line per criterion.
//!
//! Failing criteria are reported but do not fail `cargo test` unless
//! `FIBREKAHLER_STRICT=1` is set.

use std::time::Instant;

use fibrekahler::adiabatic::{
    log_slope, subdominance, theta_extraction, ExpansionOptions, ExpansionState,
};
use fibrekahler::exterior::top_coefficient;
use fibrekahler::fibration::{wp_pointwise, FibredSpace, TestbedSpec};
use fibrekahler::geometry::d_wedge_dbar;
use fibrekahler::ift::{IftOptions, SolveProblem};
use fibrekahler::twisted::{TwistedProblem, Twist};
use fibrekahler::{ddbar, Form11, KahlerStructure, PeriodicLattice, Result, ScalarField, C64};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// `ω_WP` of `τ(b) = i + b` at `b = 0`, from the brute-force oracle in
/// `tests/wp_oracle.rs`.
const WP_TAU_I: f64 = 0.25;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Result<Outcome> {
    Ok(Outcome { pass, detail })
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn surface(points: usize) -> std::sync::Arc<PeriodicLattice> {
    PeriodicLattice::new(vec![C64::new(0.2, 1.1), C64::new(0.0, 1.0)], vec![points; 4]).unwrap()
}

fn curve(points: usize) -> std::sync::Arc<PeriodicLattice> {
    PeriodicLattice::new(vec![C64::new(0.3, 1.2)], vec![points; 2]).unwrap()
}

fn perturbed(lat: &std::sync::Arc<PeriodicLattice>, amp: f64, r: &mut ChaCha8Rng) -> Result<KahlerStructure> {
    let pot = ScalarField::random_smooth(lat, 1, amp, r);
    KahlerStructure::new(&Form11::identity(lat), &pot)
}

fn identities() -> Result<Outcome> {
    let mut worst = [0.0f64; 4];
    for (lat, seed) in [(curve(16), 1u64), (surface(16), 2)] {
        let mut r = rng(seed);
        let om = perturbed(&lat, 0.08, &mut r)?;
        let n = om.dim() as f64;
        let b1 = ddbar(&ScalarField::random_smooth(&lat, 1, 1.0, &mut r));
        let b2 = ddbar(&ScalarField::random_smooth(&lat, 1, 1.0, &mut r));
        let l1 = om.trace(&b1)?;
        let l2 = om.trace(&b2)?;
        let ip = om.inner11(&b1, &b2)?;
        let tw = om.trace(om.form())?;
        let iw = om.inner11(om.form(), om.form())?;
        for idx in 0..lat.len() {
            let g = om.form().matrix_at(idx);
            let m1 = b1.matrix_at(idx);
            let m2 = b2.matrix_at(idx);
            let vol = if om.dim() == 1 { g[(0, 0)] } else { top_coefficient(&[&g, &g]) };
            if om.dim() == 2 {
                // n(n−1) β₁∧β₂∧ωⁿ⁻² / ωⁿ = Λβ₁ Λβ₂ − ⟨β₁, β₂⟩
                let lhs = 2.0 * top_coefficient(&[&m1, &m2]);
                let rhs = (l1.values()[idx] * l2.values()[idx] - ip.values()[idx]) * vol;
                worst[0] = worst[0].max((lhs - rhs).norm() / (lhs.norm() + rhs.norm() + 1e-3));
            }
            let wedge_trace = if om.dim() == 1 { m1[(0, 0)] / vol } else { 2.0 * top_coefficient(&[&m1, &g]) / vol };
            let t = l1.values()[idx];
            worst[1] = worst[1]
                .max((t - wedge_trace).norm() / t.norm().max(1.0))
                .max((tw.values()[idx] - n).norm() / n)
                .max((iw.values()[idx] - n).norm() / n);
        }
        let f = ScalarField::random_smooth(&lat, 2, 1.0, &mut r);
        let p = ScalarField::random_smooth(&lat, 2, 1.0, &mut r);
        let gp = om.grad_pair(&f, &p)?;
        let tr = om.trace(&d_wedge_dbar(&f, &p))?.scale_re(2.0);
        worst[2] = worst[2].max((&gp - &tr).max_abs() / gp.max_abs());
        let strong = om.integrate(&(&p * &om.lichnerowicz(&f)?));
        let df = om.d_operator(&f)?;
        let dp = om.d_operator(&p)?;
        let weak = om.integrate(&om.d_pairing(&df, &dp)?);
        let scale = om.integrate(&om.d_pairing(&df, &df)?).norm().sqrt() * om.integrate(&om.d_pairing(&dp, &dp)?).norm().sqrt();
        worst[3] = worst[3].max((strong - weak).norm() / scale);
    }
    outcome(
        worst.iter().all(|&w| w < 1e-8),
        format!(
            "wedge {:.2e}, trace/inner {:.2e}, grad-pair {:.2e}, weak=strong {:.2e}",
            worst[0], worst[1], worst[2], worst[3]
        ),
    )
}

fn curved_problem(seed: u64) -> Result<TwistedProblem> {
    let lat = curve(16);
    let mut r = rng(seed);
    let om = perturbed(&lat, 0.1, &mut r)?;
    let apot = ScalarField::random_smooth(&lat, 1, 0.1, &mut r);
    let alpha = Form11::identity(&lat).add(&ddbar(&apot))?.scale(0.5 + 0.1 * seed as f64);
    TwistedProblem::new(om, Twist::new(alpha)?)
}

fn linearisation() -> Result<Outcome> {
    let eps = [1e-2, 1e-3, 1e-4];
    let mut slopes = Vec::new();
    for seed in 0..5u64 {
        let prob = curved_problem(100 + seed)?;
        let mut r = rng(200 + seed);
        let f = ScalarField::random_smooth(prob.lattice(), 1, 0.5, &mut r);
        let dphi = ScalarField::random_smooth(prob.lattice(), 1, 0.5, &mut r);
        let dh = ScalarField::random_smooth(prob.lattice(), 1, 0.5, &mut r);
        let lin = prob.linearized_p(&dphi, &dh, &f)?;
        let mut errs = Vec::new();
        for &e in &eps {
            let p = prob.extremal_operator(&dphi.scale_re(e), &f.axpy(e, &dh))?;
            let m = prob.extremal_operator(&dphi.scale_re(-e), &f.axpy(-e, &dh))?;
            errs.push((&(&p - &m).scale_re(0.5 / e) - &lin).max_abs());
        }
        slopes.push(log_slope(&eps, &errs));
    }
    let pass = slopes.iter().all(|s| (s - 2.0).abs() <= 0.1);
    outcome(pass, format!("slopes {}", fmt_list(&slopes)))
}

fn weak_form() -> Result<Outcome> {
    let mut worst = 0.0f64;
    let degenerate = {
        let lat = surface(16);
        let mut r = rng(300);
        let om = perturbed(&lat, 0.08, &mut r)?;
        TwistedProblem::new(om, Twist::pullback_flat(&lat, 1, 0.7)?)?
    };
    let curved = curved_problem(301)?;
    for (k, prob) in [&curved, &degenerate].into_iter().enumerate() {
        let mut r = rng(310 + k as u64);
        for _ in 0..10 {
            let phi = ScalarField::random_smooth(prob.lattice(), 2, 1.0, &mut r);
            let psi = ScalarField::random_smooth(prob.lattice(), 2, 1.0, &mut r);
            let strong = prob.omega().integrate(&(&psi * &prob.l_alpha(&phi)?));
            let weak = prob.l_alpha_weak(&phi, &psi)?;
            worst = worst.max((strong - weak).norm() / strong.norm().max(weak.norm()));
        }
    }
    outcome(worst < 1e-8, format!("20 pairs, worst relative residual {worst:.2e}"))
}

fn kernel() -> Result<Outcome> {
    let lat = PeriodicLattice::square(2, 8)?;
    let flat = KahlerStructure::flat(&lat);
    let zero = TwistedProblem::new(flat.clone(), Twist::zero(&lat))?;
    let l0 = zero.kernel_analysis(1e-10, 200, None)?.lambda_min;
    // Δ = Λ i∂∂̄ has symbol −|k|²/4, so the lowest mode of Δ² is 1/16.
    let closed = 1.0 / 16.0;
    let deg = TwistedProblem::new(flat, Twist::pullback_flat(&lat, 0, 1.0)?)?;
    let ld = deg.kernel_analysis(1e-10, 200, None)?.lambda_min;
    outcome(
        l0 > 0.5 * closed && ld > 0.0,
        format!("λ_min(α=0) {l0:.6e} (closed form {closed:.6e}), λ_min(degenerate α) {ld:.6e}"),
    )
}

fn weil_petersson() -> Result<Outcome> {
    let fs = FibredSpace::make_testbed(&TestbedSpec::standard(16, 0.1))?;
    let inv = fs.invariants();
    let rel = inv.alpha_wp_gap / inv.alpha_sup;
    outcome(rel < 1e-8, format!("max|α − ω_WP| = {:.2e}, ‖α‖∞ = {:.3e}, ratio {rel:.2e}", inv.alpha_wp_gap, inv.alpha_sup))
}

fn wp_scaling() -> Result<Outcome> {
    let b0 = [C64::new(0.0, 0.0)];
    let one = wp_pointwise(&|b: &[C64]| C64::new(0.0, 1.0) + b[0], &b0, 16)?[(0, 0)].re;
    let two = wp_pointwise(&|b: &[C64]| C64::new(0.0, 1.0) + 2.0 * b[0], &b0, 16)?[(0, 0)].re;
    let scaling = (two / (4.0 * one) - 1.0).abs();
    let oracle = (one / WP_TAU_I - 1.0).abs();
    outcome(
        scaling < 1e-6 && oracle < 1e-5,
        format!("scaling defect {scaling:.2e}, value {one:.12} vs oracle {WP_TAU_I} (rel {oracle:.2e})"),
    )
}

fn adiabatic_decay() -> Result<Outcome> {
    let fs = FibredSpace::make_testbed(&TestbedSpec::standard(16, 0.1))?;
    let opts = ExpansionOptions::default();
    let rs = [8.0, 16.0, 32.0, 64.0];
    let bounds = [-0.7, -1.7, -2.7];
    let mut st = ExpansionState::build(&fs, 0, &opts)?;
    let mut slopes = Vec::new();
    let mut rows = Vec::new();
    for p in 0..3 {
        if p > 0 {
            st = st.inductive_step(&opts)?;
        }
        let (fit, slope) = st.residual_fit(&rs)?;
        slopes.push(slope);
        rows.push(fit.iter().map(|(_, sup, _)| format!("{sup:.1e}")).collect::<Vec<_>>().join(" "));
    }
    let pass = slopes.iter().zip(bounds).all(|(s, b)| *s <= b);
    outcome(
        pass,
        format!(
            "slopes {} (bounds −0.7/−1.7/−2.7); sup residuals p0 [{}] p1 [{}] p2 [{}]",
            fmt_list(&slopes),
            rows[0],
            rows[1],
            rows[2]
        ),
    )
}

fn theta_identity() -> Result<Outcome> {
    let fs = FibredSpace::make_testbed(&TestbedSpec::standard(16, 0.1))?;
    let (_, rep) = theta_extraction(&fs, &[32.0, 64.0, 128.0, 256.0, 512.0, 1024.0])?;
    let rel = rep.relative_identity_error();
    outcome(rel < 1e-6, format!("relative error {rel:.2e} (scale {:.3e}), remainder slope {:.3}", rep.identity_scale, rep.remainder_slope))
}

fn newton() -> Result<Outcome> {
    let fs = FibredSpace::make_testbed(&TestbedSpec::standard(16, 0.1))?;
    let opts = ExpansionOptions::default();
    let s1 = ExpansionState::build(&fs, 1, &opts)?;
    let s2 = s1.inductive_step(&opts)?;
    let io = IftOptions {
        newton_tol: 1e-13,
        ..Default::default()
    };
    let p1 = SolveProblem::new(s1, 32.0, io.clone())?;
    let p2 = SolveProblem::new(s2, 32.0, io)?;
    let o1 = p1.newton()?;
    let o2 = p2.newton()?;
    let fin = *o2.residuals.last().expect("at least the initial residual");
    let diff = (&p1.total_potential(&o1.psi)? - &p2.total_potential(&o2.psi)?).max_abs();
    outcome(
        fin < 1e-9 && o2.iterations <= 8 && diff < 1e-8,
        format!(
            "p=2: {} iterations, final {fin:.2e}; p=1 residuals {}; potential gap {diff:.2e}; h* {:.2e}",
            o2.iterations,
            fmt_list(&o1.residuals),
            o2.h_star
        ),
    )
}

fn certification() -> Result<Outcome> {
    let rs = [8.0, 16.0, 32.0, 64.0, 128.0];
    let mut certified = 0;
    let mut bad = Vec::new();
    let mut uncert_converged = 0;
    let mut norms = Vec::new();
    for eps in [1e-4, 0.05, 0.1] {
        let fs = FibredSpace::make_testbed(&TestbedSpec::standard(8, eps))?;
        let opts = ExpansionOptions::default();
        let mut st = ExpansionState::build(&fs, 0, &opts)?;
        for p in 0..3 {
            if p > 0 {
                st = st.inductive_step(&opts)?;
            }
            for &r in &rs {
                let prob = SolveProblem::new(st.clone(), r, IftOptions::default())?;
                let cert = prob.certificate()?;
                if eps == 0.1 && p == 2 {
                    norms.push(cert.inverse_norm);
                }
                let converged = prob.newton().is_ok();
                if cert.certified {
                    certified += 1;
                    if !converged {
                        bad.push(format!("(r={r}, p={p}, ε={eps})"));
                    }
                } else if converged {
                    uncert_converged += 1;
                }
            }
        }
    }
    let growth = log_slope(&rs, &norms);
    outcome(
        certified >= 12 && bad.is_empty(),
        format!(
            "45 cells, {certified} certified, {} certified-diverged {:?}, {uncert_converged} uncertified converged; ‖P‖ growth exponent {growth:.2}",
            bad.len(),
            bad
        ),
    )
}

fn subdominant() -> Result<Outcome> {
    let fs = FibredSpace::make_testbed(&TestbedSpec::standard(16, 0.1))?;
    let eta = ScalarField::from_real_fn(fs.base(), |x| x[0].sin() + 0.3 * x[1].cos());
    let psi_b = ScalarField::from_real_fn(fs.base(), |x| (x[0] + x[1]).cos());
    let psi = ScalarField::from_real_fn(fs.total(), |x| (x[0] + x[2]).sin() + x[3].cos() * x[1].sin());
    let rep = subdominance(&fs, &eta, &psi, &psi_b, &[8.0, 16.0, 32.0, 64.0])?;
    outcome(
        rep.mixed_bounded() && (rep.base_remainder_slope + 1.0).abs() <= 0.3,
        format!(
            "r·sup mixed {} (spread {:.2}), base–base slope {:.3}",
            fmt_list(&rep.mixed_scaled),
            rep.mixed_spread(),
            rep.base_remainder_slope
        ),
    )
}

fn fmt_list(v: &[f64]) -> String {
    let s: Vec<String> = v.iter().map(|x| format!("{x:.3e}")).collect();
    format!("[{}]", s.join(", "))
}

type Criterion = (usize, &'static str, f64, fn() -> Result<Outcome>);

fn main() {
    let criteria: [Criterion; 11] = [
        (1, "identity suite", 60.0, identities),
        (2, "linearisation", 120.0, linearisation),
        (3, "twisted weak form", 60.0, weak_form),
        (4, "kernel triviality", 120.0, kernel),
        (5, "Weil-Petersson equality", 120.0, weil_petersson),
        (6, "WP family scaling", 120.0, wp_scaling),
        (7, "adiabatic decay", 600.0, adiabatic_decay),
        (8, "theta fibre-integral identity", 180.0, theta_identity),
        (9, "Newton convergence", 300.0, newton),
        (10, "certification consistency", 1200.0, certification),
        (11, "subdominance", 120.0, subdominant),
    ];
    let filter: Option<Vec<usize>> = std::env::var("FIBREKAHLER_CRITERIA")
        .ok()
        .map(|s| s.split(',').filter_map(|t| t.trim().parse().ok()).collect());
    let mut failed = 0;
    for (id, name, limit, run) in criteria {
        if filter.as_ref().is_some_and(|f| !f.contains(&id)) {
            continue;
        }
        let t = Instant::now();
        let res = run();
        let secs = t.elapsed().as_secs_f64();
        let (pass, detail) = match res {
            Ok(o) => (o.pass && secs < limit, o.detail),
            Err(e) => (false, format!("error: {e}")),
        };
        if !pass {
            failed += 1;
        }
        println!(
            "{} {id:>2} {name}: {detail} [{secs:.1} s / {limit:.0} s]",
            if pass { "PASS" } else { "FAIL" }
        );
    }
    println!("acceptance: {failed} criteria failed");
    if failed > 0 && std::env::var("FIBREKAHLER_STRICT").is_ok_and(|v| v == "1") {
        std::process::exit(1);
    }
}
