//! The finite-r nonlinear solve around an approximate solution `ω_{r,p}`.
//!
//! `F(ψ, k) = S(ω_{r,p} + i∂∂̄ψ) − β_p − τ_{r,p}(k)` for constant holomorphy
//! potentials `k`. The gradient terms `½⟨∇β_p, ∇φ_{r,p}⟩` and
//! `½⟨∇τ(k), ∇ψ⟩` of the general operator vanish because `β_p` and `τ(k)`
//! are constant.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::adiabatic::{omega_r_form, ExpansionState};
use crate::error::{GeomError, Result};
use crate::field::ScalarField;
use crate::geometry::KahlerStructure;
use crate::krylov::{gmres, inverse_iteration, GmresOptions, SolveReport};
use crate::lattice::C64;
use crate::twisted::{FlatBiharmonic, HolomorphySpace};

/// Lift of a constant holomorphy potential `k` on the base:
/// `τ_r(k) = r k + h_X` with `h_X = k`.
pub fn lift_constant(k: f64, r: f64) -> f64 {
    r * k + k
}

#[derive(Debug, Clone)]
pub struct IftOptions {
    pub gmres: GmresOptions,
    /// Final sup-norm tolerance on `F`.
    pub newton_tol: f64,
    pub max_iterations: usize,
    pub max_halvings: usize,
    /// Radius of the Lipschitz probe in the normalised `L²` norm.
    pub probe_radius: f64,
    pub probe_samples: usize,
    pub eigen_tol: f64,
    pub eigen_max_iter: usize,
    pub seed: u64,
}

impl Default for IftOptions {
    fn default() -> Self {
        Self {
            // Attainable accuracy is about ε‖G‖‖P‖, near 1e−10 at r = 32.
            gmres: GmresOptions {
                tol: 1e-9,
                ..GmresOptions::default()
            },
            newton_tol: 1e-9,
            max_iterations: 8,
            max_halvings: 6,
            probe_radius: 1e-3,
            probe_samples: 6,
            eigen_tol: 1e-8,
            eigen_max_iter: 300,
            seed: 7,
        }
    }
}

/// Quantitative implicit function theorem data at `(r, p)`.
#[derive(Debug, Clone, Serialize)]
pub struct Certificate {
    pub r: f64,
    pub p: usize,
    /// `‖P‖` in the volume-normalised `L²(ω_{r,p})` norm.
    pub inverse_norm: f64,
    /// `C` with `‖𝓝(φ) − 𝓝(ψ)‖ ≤ C(‖φ‖ + ‖ψ‖)‖φ − ψ‖` on the probe.
    pub lipschitz_constant: f64,
    /// Radius on which `𝓝` is Lipschitz with constant `1/(2‖P‖)`.
    pub delta_prime: f64,
    pub delta: f64,
    /// `‖F(0, 0)‖_sup`.
    pub initial_residual: f64,
    pub certified: bool,
}

impl Certificate {
    pub fn new(r: f64, p: usize, inverse_norm: f64, lipschitz_constant: f64, initial_residual: f64) -> Self {
        let delta_prime = 1.0 / (4.0 * lipschitz_constant * inverse_norm);
        let delta = delta_prime / (2.0 * inverse_norm);
        Self {
            r,
            p,
            inverse_norm,
            lipschitz_constant,
            delta_prime,
            delta,
            initial_residual,
            certified: initial_residual < delta,
        }
    }

    /// The stored numbers satisfy the certificate definition.
    pub fn is_consistent(&self) -> bool {
        self.delta == self.delta_prime / (2.0 * self.inverse_norm) && self.certified == (self.initial_residual < self.delta)
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct LipschitzEstimate {
    /// Radius actually probed, after any shrinking for positivity.
    pub radius: f64,
    pub shrinks: usize,
    /// Largest `‖𝓝(φ) − 𝓝(ψ)‖ / ‖φ − ψ‖` over the samples.
    pub lipschitz: f64,
    /// Largest `‖𝓝(φ) − 𝓝(ψ)‖ / ((‖φ‖ + ‖ψ‖)‖φ − ψ‖)`.
    pub constant: f64,
}

/// Machine-readable summary of a Newton solve.
#[derive(Debug, Clone, Serialize)]
pub struct NewtonRecord {
    pub r: f64,
    pub p: usize,
    pub iterations: usize,
    pub residuals: Vec<f64>,
    pub inverse_norm: f64,
    pub delta: f64,
    pub delta_prime: f64,
    pub certified: bool,
    pub h_star: f64,
}

#[derive(Debug, Clone)]
pub struct NewtonOutcome {
    /// Correction `ψ*`, volume-mean-zero for `ω_{r,p}`.
    pub psi: ScalarField,
    /// Constant holomorphy potential `k*`.
    pub h_star: f64,
    /// `‖F‖_sup` before each iteration and at the end.
    pub residuals: Vec<f64>,
    pub halvings: Vec<usize>,
    pub iterations: usize,
    pub metric: KahlerStructure,
}

pub struct SolveProblem {
    state: ExpansionState,
    r: f64,
    omega: KahlerStructure,
    holomorphy: HolomorphySpace,
    beta: f64,
    opts: IftOptions,
}

impl SolveProblem {
    pub fn new(state: ExpansionState, r: f64, opts: IftOptions) -> Result<Self> {
        let omega = state.metric(r)?;
        let holomorphy = HolomorphySpace::constants(state.fibred_space().base());
        let defect = holomorphy.d_defect(state.effective().omega_b())?;
        if defect > 1e-10 {
            return Err(GeomError::Precondition(format!("holomorphy basis not 𝓓-closed ({defect:e})")));
        }
        let beta = state.beta(r);
        Ok(Self {
            state,
            r,
            omega,
            holomorphy,
            beta,
            opts,
        })
    }

    pub fn r(&self) -> f64 {
        self.r
    }

    pub fn p(&self) -> usize {
        self.state.p
    }

    pub fn state(&self) -> &ExpansionState {
        &self.state
    }

    /// `ω_{r,p}`.
    pub fn metric(&self) -> &KahlerStructure {
        &self.omega
    }

    pub fn holomorphy(&self) -> &HolomorphySpace {
        &self.holomorphy
    }

    fn norm(&self, f: &ScalarField) -> f64 {
        self.omega.l2_norm(f) / self.omega.volume().sqrt()
    }

    /// `τ_{r,p}(h) = r π*h_B + h_X + ½⟨∇φ_{r,p}, ∇π*h_B⟩_{ω_r}`.
    pub fn lift(&self, h_base: &ScalarField, h_x: &ScalarField) -> Result<ScalarField> {
        let fs = self.state.fibred_space();
        let pb = fs.pullback(h_base)?;
        let om_r = KahlerStructure::from_form(&omega_r_form(fs, self.r))?;
        let grad = om_r.grad_pair_real(&self.state.potential(self.r)?, &pb)?;
        Ok(&(&pb.scale_re(self.r) + h_x) + &grad.scale_re(0.5))
    }

    /// `F(ψ, k)`.
    pub fn f(&self, psi: &ScalarField, k: f64) -> Result<ScalarField> {
        let om = KahlerStructure::new(self.omega.form(), psi)?;
        let shift = self.beta + lift_constant(k, self.r);
        Ok(om.scalar_curvature().map(|v| v - shift))
    }

    /// `G(φ, k) = dS_ω(φ) − τ(k)` at the metric `at`.
    pub fn g_at(&self, at: &KahlerStructure, phi: &ScalarField, k: f64) -> Result<ScalarField> {
        let t = lift_constant(k, self.r);
        Ok(at.scalar_derivative(phi)?.map(|v| v - t))
    }

    /// `𝓝(ψ) = F(ψ, 0) − F(0, 0) − G(ψ, 0)`.
    pub fn nonlinear(&self, psi: &ScalarField) -> Result<ScalarField> {
        let f0 = self.f(&ScalarField::zeros(self.omega.lattice()), 0.0)?;
        Ok(&(&self.f(psi, 0.0)? - &f0) - &self.g_at(&self.omega, psi, 0.0)?)
    }

    /// Solves `G(ψ, k) = rhs` at `at` with `ψ` volume-mean-zero for `ω_{r,p}`.
    ///
    /// Uses the augmented map `u ↦ dS(u) − τ(mean(u)) + ghost(u)`.
    pub fn linear_solve_at(&self, at: &KahlerStructure, rhs: &ScalarField) -> Result<(ScalarField, f64, SolveReport)> {
        let lat = self.omega.lattice().clone();
        let scale = lift_constant(1.0, self.r);
        let pre = FlatBiharmonic::new(at, 1.0, -scale);
        let apply = |v: &[C64]| -> Result<Vec<C64>> {
            let u = ScalarField::new(lat.clone(), v.to_vec())?;
            let l = at.scalar_derivative(&u)?;
            let m = self.omega.mean(&u);
            let g = u.ghost_part();
            Ok(l.values().iter().zip(g.values()).map(|(a, b)| a - m * scale + b).collect())
        };
        let (u, report) = gmres(apply, |v| pre.apply(v), rhs.values(), None, self.opts.gmres)?;
        let u = ScalarField::new(lat.clone(), u)?;
        let u = &u - &u.ghost_part();
        let k = self.omega.mean(&u);
        Ok((u.map(|v| v - k).re(), k.re, report))
    }

    pub fn linear_solve(&self, rhs: &ScalarField) -> Result<(ScalarField, f64, SolveReport)> {
        self.linear_solve_at(&self.omega, rhs)
    }

    /// `‖P‖ = 1/|λ_min|` for the smallest eigenvalue of `−dS` on
    /// volume-mean-zero fields, by inverse iteration.
    pub fn inverse_norm_estimate(&self) -> Result<f64> {
        let lat = self.omega.lattice().clone();
        let om = &self.omega;
        let x0 = ScalarField::from_real_fn(&lat, |x| {
            x.iter().enumerate().map(|(d, &v)| ((d + 1) as f64 * 0.37 + v).sin()).sum()
        });
        let project = |v: &mut [C64]| {
            let f = ScalarField::new(lat.clone(), v.to_vec()).expect("grid length").re();
            let s = &f - &f.ghost_part();
            let m = om.mean(&s);
            for (dst, src) in v.iter_mut().zip(s.values()) {
                *dst = src - m;
            }
        };
        let inner = |a: &[C64], b: &[C64]| {
            let fa = ScalarField::new(lat.clone(), a.to_vec()).expect("grid length");
            let fb = ScalarField::new(lat.clone(), b.to_vec()).expect("grid length");
            om.l2_inner(&fb, &fa)
        };
        let rep = inverse_iteration(
            |x| {
                let (psi, _, _) = self.linear_solve(&ScalarField::new(lat.clone(), x.to_vec())?)?;
                Ok(psi.scale_re(-1.0).into_values())
            },
            |x| Ok(om.scalar_derivative(&ScalarField::new(lat.clone(), x.to_vec())?)?.scale_re(-1.0).into_values()),
            inner,
            project,
            x0.into_values(),
            self.opts.eigen_tol,
            self.opts.eigen_max_iter,
        )?;
        Ok(1.0 / rep.lambda.abs())
    }

    fn random_direction(&self, rng: &mut ChaCha8Rng) -> ScalarField {
        let f = ScalarField::random_smooth(self.omega.lattice(), 2, 1.0, rng).re();
        let f = &f - &f.ghost_part();
        let m = self.omega.mean(&f);
        let f = f.map(|v| v - m);
        let n = self.norm(&f);
        f.scale_re(1.0 / n)
    }

    /// Samples pairs in the ball of radius `radius` and measures the
    /// Lipschitz ratio of `𝓝`. The radius is halved on positivity loss.
    pub fn lipschitz_probe(&self, radius: f64, samples: usize) -> Result<LipschitzEstimate> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.opts.seed);
        let dirs: Vec<(ScalarField, ScalarField, f64, f64)> = (0..samples)
            .map(|i| {
                let a = self.random_direction(&mut rng);
                let b = self.random_direction(&mut rng);
                let sa = 1.0 - 0.5 * (i as f64) / (samples.max(2) - 1) as f64;
                (a, b, sa, 0.5 * sa)
            })
            .collect();
        let mut rad = radius;
        for shrinks in 0..20 {
            match self.probe_at(&dirs, rad) {
                Ok((lip, c)) => {
                    return Ok(LipschitzEstimate {
                        radius: rad,
                        shrinks,
                        lipschitz: lip,
                        constant: c,
                    })
                }
                Err(GeomError::NonPositive { .. }) => rad *= 0.5,
                Err(e) => return Err(e),
            }
        }
        Err(GeomError::Precondition("Lipschitz probe radius shrank below positivity range".into()))
    }

    fn probe_at(&self, dirs: &[(ScalarField, ScalarField, f64, f64)], radius: f64) -> Result<(f64, f64)> {
        let mut lip: f64 = 0.0;
        let mut c: f64 = 0.0;
        for (a, b, sa, sb) in dirs {
            let phi = a.scale_re(radius * sa);
            let psi = b.scale_re(radius * sb);
            let diff = &phi - &psi;
            let dn = self.norm(&diff);
            if dn == 0.0 {
                continue;
            }
            let num = self.norm(&(&self.nonlinear(&phi)? - &self.nonlinear(&psi)?));
            lip = lip.max(num / dn);
            c = c.max(num / ((self.norm(&phi) + self.norm(&psi)) * dn));
        }
        Ok((lip, c))
    }

    pub fn certificate(&self) -> Result<Certificate> {
        let zero = ScalarField::zeros(self.omega.lattice());
        let initial = self.f(&zero, 0.0)?.max_abs();
        let norm = self.inverse_norm_estimate()?;
        let probe = self.lipschitz_probe(self.opts.probe_radius, self.opts.probe_samples)?;
        Ok(Certificate::new(self.r, self.p(), norm, probe.constant, initial))
    }

    /// Damped Newton iteration for `F(ψ, k) = 0`.
    pub fn newton(&self) -> Result<NewtonOutcome> {
        let lat = self.omega.lattice().clone();
        let mut psi = ScalarField::zeros(&lat);
        let mut k = 0.0;
        let mut f = self.f(&psi, k)?;
        let mut res = f.max_abs();
        let mut residuals = vec![res];
        let mut halvings = Vec::new();
        let mut it = 0;
        while res >= self.opts.newton_tol {
            if it == self.opts.max_iterations {
                return Err(GeomError::MaxIterations { iterations: it, residuals });
            }
            it += 1;
            let at = KahlerStructure::new(self.omega.form(), &psi)?;
            let (dpsi, dk, _) = self.linear_solve_at(&at, &f.scale_re(-1.0))?;
            let mut t = 1.0;
            let mut accepted = None;
            for h in 0..=self.opts.max_halvings {
                let trial = psi.axpy(t, &dpsi);
                let m = self.omega.mean(&trial);
                let trial = trial.map(|v| v - m);
                if let Ok(ft) = self.f(&trial, k + t * dk) {
                    let rt = ft.max_abs();
                    if rt < res {
                        accepted = Some((trial, k + t * dk, ft, rt, h));
                        break;
                    }
                }
                t *= 0.5;
            }
            match accepted {
                Some((p, kk, ff, rr, h)) => {
                    psi = p;
                    k = kk;
                    f = ff;
                    res = rr;
                    residuals.push(res);
                    halvings.push(h);
                }
                None => return Err(GeomError::MaxIterations { iterations: it, residuals }),
            }
        }
        let metric = KahlerStructure::new(self.omega.form(), &psi)?;
        Ok(NewtonOutcome {
            psi: psi.tagged_mean_zero(),
            h_star: k,
            residuals,
            halvings,
            iterations: it,
            metric,
        })
    }

    /// Certificate followed by Newton; the record is filled either way.
    pub fn newton_solve(&self) -> Result<(NewtonOutcome, Certificate, NewtonRecord)> {
        let cert = self.certificate()?;
        let out = self.newton()?;
        let record = self.record(&cert, Some(&out));
        Ok((out, cert, record))
    }

    pub fn record(&self, cert: &Certificate, out: Option<&NewtonOutcome>) -> NewtonRecord {
        NewtonRecord {
            r: self.r,
            p: self.p(),
            iterations: out.map_or(0, |o| o.iterations),
            residuals: out.map_or_else(|| vec![cert.initial_residual], |o| o.residuals.clone()),
            inverse_norm: cert.inverse_norm,
            delta: cert.delta,
            delta_prime: cert.delta_prime,
            certified: cert.certified,
            h_star: out.map_or(f64::NAN, |o| o.h_star),
        }
    }

    /// `φ_{r,p} + λ_p + ψ`, normalised to volume mean zero for `ω_r`.
    pub fn total_potential(&self, psi: &ScalarField) -> Result<ScalarField> {
        let fs = self.state.fibred_space();
        let om_r = KahlerStructure::from_form(&omega_r_form(fs, self.r))?;
        let total = &self.state.potential(self.r)? + psi;
        let m = om_r.mean(&total);
        Ok(total.map(|v| v - m).re())
    }
}
