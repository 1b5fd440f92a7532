//! The twisted extremal operator, its linearisation, the twisted
//! Lichnerowicz operator `𝓛_α`, kernel analysis and the twisted Mabuchi
//! functional.

use std::sync::Arc;
use std::time::Instant;

use nalgebra::DMatrix;
use serde::Serialize;

use crate::error::{GeomError, Result};
use crate::field::{Form11, ScalarField};
use crate::geometry::{ddbar, KahlerStructure};
use crate::krylov::{gmres, inverse_iteration, GmresOptions, SolveReport};
use crate::lattice::{PeriodicLattice, C64};

/// Semipositivity tolerance for twisting forms.
pub const SEMIPOSITIVE_TOL: f64 = 1e-10;
/// Closedness tolerance (spectral) for twisting forms.
pub const CLOSED_TOL: f64 = 1e-8;

#[derive(Debug, Clone)]
pub struct Twist {
    alpha: Form11,
    degeneracy: Option<String>,
}

impl Twist {
    pub fn new(alpha: Form11) -> Result<Self> {
        let (lo, idx) = alpha.min_eigenvalue();
        if lo < -SEMIPOSITIVE_TOL {
            return Err(GeomError::Precondition(format!(
                "twist is not semipositive: eigenvalue {lo:e} at grid point {idx}"
            )));
        }
        let herm = alpha.hermitian_defect();
        let closed = alpha.closedness_defect();
        if herm > CLOSED_TOL || closed > CLOSED_TOL {
            return Err(GeomError::Precondition(format!(
                "twist is not a closed real (1,1)-form: hermitian defect {herm:e}, closedness defect {closed:e}"
            )));
        }
        let degeneracy = if lo < 1e-8 {
            Some(format!("smallest eigenvalue {lo:e} attained at grid point {idx}"))
        } else {
            None
        };
        Ok(Self { alpha, degeneracy })
    }

    pub fn zero(lattice: &Arc<PeriodicLattice>) -> Self {
        Self {
            alpha: Form11::zeros(lattice),
            degeneracy: Some("identically zero".into()),
        }
    }

    /// `a · i dz_f ∧ dz̄_f`: the pullback of a flat form from one factor,
    /// degenerate in every other direction.
    pub fn pullback_flat(lattice: &Arc<PeriodicLattice>, factor: usize, a: f64) -> Result<Self> {
        let n = lattice.dim();
        if factor >= n || a < 0.0 {
            return Err(GeomError::Precondition(format!(
                "pullback twist needs factor < {n} and a ≥ 0"
            )));
        }
        let mut m = DMatrix::zeros(n, n);
        m[(factor, factor)] = C64::new(a, 0.0);
        Self::new(Form11::constant(lattice, &m)?)
    }

    pub fn alpha(&self) -> &Form11 {
        &self.alpha
    }

    pub fn degeneracy(&self) -> Option<&str> {
        self.degeneracy.as_deref()
    }
}

/// Holomorphy potentials on the base. Flat tori carry only the constants.
#[derive(Debug, Clone)]
pub struct HolomorphySpace {
    basis: Vec<ScalarField>,
}

impl HolomorphySpace {
    pub fn constants(lattice: &Arc<PeriodicLattice>) -> Self {
        Self {
            basis: vec![ScalarField::constant(lattice, C64::new(1.0, 0.0))],
        }
    }

    pub fn basis(&self) -> &[ScalarField] {
        &self.basis
    }

    /// Largest `‖𝓓_ω h‖_∞` over the basis.
    pub fn d_defect(&self, omega: &KahlerStructure) -> Result<f64> {
        let mut m: f64 = 0.0;
        for h in &self.basis {
            m = m.max(omega.d_operator(h)?.max_abs());
        }
        Ok(m)
    }
}

/// Fourier-space inverse of the flat biharmonic operator for the averaged
/// metric, used as a right preconditioner.
///
/// The symbol is `−σ²` on ordinary modes (`σ` the symbol of `Δ`),
/// `mean_value` on the constant mode and `1` on ghost modes.
#[derive(Debug, Clone)]
pub struct FlatBiharmonic {
    lattice: Arc<PeriodicLattice>,
    inv_symbol: Vec<C64>,
}

impl FlatBiharmonic {
    pub fn new(omega: &KahlerStructure, scale: f64, mean_value: f64) -> Self {
        let lat = omega.lattice().clone();
        let n = lat.dim();
        let ginv_mean: Vec<C64> = omega.inverse().components().iter().map(|c| c.mean()).collect();
        let inv_symbol = (0..lat.len())
            .map(|idx| {
                if idx == 0 {
                    return C64::new(1.0 / mean_value, 0.0);
                }
                if lat.is_ghost_mode(idx) {
                    return C64::new(1.0, 0.0);
                }
                let mut sigma = C64::new(0.0, 0.0);
                for j in 0..n {
                    for k in 0..n {
                        sigma += ginv_mean[k * n + j] * lat.dz_symbol(j)[idx] * lat.dzbar_symbol(k)[idx];
                    }
                }
                let s = -sigma * sigma * scale;
                if s.norm() == 0.0 {
                    C64::new(1.0, 0.0)
                } else {
                    1.0 / s
                }
            })
            .collect();
        Self { lattice: lat, inv_symbol }
    }

    pub fn apply(&self, v: &[C64]) -> Vec<C64> {
        let mut hat = v.to_vec();
        self.lattice.forward(&mut hat);
        for (h, s) in hat.iter_mut().zip(&self.inv_symbol) {
            *h *= s;
        }
        self.lattice.inverse(&mut hat);
        hat
    }
}

/// Output of [`TwistedProblem::solve`].
#[derive(Debug, Clone)]
pub struct TwistedSolution {
    /// Volume-mean-zero potential.
    pub phi: ScalarField,
    /// Coefficient of the constant holomorphy potential.
    pub h: C64,
    pub report: SolveReport,
    /// Relative residual `‖𝓛_α φ − h − rhs‖ / ‖rhs‖`, recomputed.
    pub residual: f64,
}

/// JSON record for solves and eigen-reports.
#[derive(Debug, Clone, Serialize)]
pub struct SolveLog {
    pub operator: String,
    pub grid: Vec<usize>,
    pub lambda_min: Option<f64>,
    pub residual_history: Vec<f64>,
    pub iterations: usize,
    pub wall_time: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct KernelReport {
    pub lambda_min: f64,
    pub iterations: usize,
    pub rayleigh_history: Vec<f64>,
    /// Whether the base metric satisfies `S − Λα = c` to 1e−8.
    pub base_is_twisted_csck: bool,
    pub trivial_kernel: bool,
    #[serde(skip)]
    pub eigenvector: Option<ScalarField>,
    pub log: SolveLog,
}

#[derive(Debug, Clone)]
pub struct TwistedProblem {
    omega: KahlerStructure,
    twist: Twist,
    holomorphy: HolomorphySpace,
    c: f64,
    lambda_alpha: ScalarField,
    /// `α − Ric ω`, the zeroth-order coefficient of `𝓛_α` on `i∂∂̄φ`.
    a_minus_ric: Form11,
    /// `∂(Λα − S)` components.
    d_shift: Vec<ScalarField>,
}

impl TwistedProblem {
    pub fn new(omega: KahlerStructure, twist: Twist) -> Result<Self> {
        omega.form().same_grid(twist.alpha(), "twisted problem")?;
        let lambda_alpha = omega.trace(twist.alpha())?;
        let s = omega.scalar_curvature().clone();
        let c = omega.mean(&(&s - &lambda_alpha)).re;
        let a_minus_ric = twist.alpha().sub(omega.ricci())?;
        let (d_shift, _) = (&lambda_alpha - &s).gradients();
        let holomorphy = HolomorphySpace::constants(omega.lattice());
        Ok(Self {
            omega,
            twist,
            holomorphy,
            c,
            lambda_alpha,
            a_minus_ric,
            d_shift,
        })
    }

    pub fn omega(&self) -> &KahlerStructure {
        &self.omega
    }

    pub fn twist(&self) -> &Twist {
        &self.twist
    }

    pub fn holomorphy(&self) -> &HolomorphySpace {
        &self.holomorphy
    }

    pub fn lattice(&self) -> &Arc<PeriodicLattice> {
        self.omega.lattice()
    }

    /// The topological constant `c`, the volume mean of `S − Λ_ω α`.
    pub fn constant(&self) -> f64 {
        self.c
    }

    pub fn lambda_alpha(&self) -> &ScalarField {
        &self.lambda_alpha
    }

    /// `sup |S − Λα − c|`.
    pub fn csck_defect(&self) -> f64 {
        let s = self.omega.scalar_curvature();
        (&(s - &self.lambda_alpha)).map(|v| v - self.c).max_abs()
    }

    /// `P(φ, f) = S(ω_φ) − Λ_{ω_φ}α − ½⟨∇f, ∇φ⟩ − f`, the gradient pairing
    /// taken with respect to `ω`.
    pub fn extremal_operator(&self, phi: &ScalarField, f: &ScalarField) -> Result<ScalarField> {
        let om = self.omega.perturbed(phi)?;
        let s = om.scalar_curvature();
        let la = om.trace(self.twist.alpha())?;
        let gp = self.omega.grad_pair(f, phi)?;
        Ok(&(&(s - &la) - &gp.scale_re(0.5)) - f)
    }

    /// `dP = −𝓓*𝓓φ̇ + ½⟨∇(S − f), ∇φ̇⟩ + ⟨i∂∂̄φ̇, α⟩ − ḣ`.
    pub fn linearized_p(&self, phidot: &ScalarField, hdot: &ScalarField, f: &ScalarField) -> Result<ScalarField> {
        let lich = self.omega.lichnerowicz(phidot)?;
        let s_minus_f = self.omega.scalar_curvature() - f;
        let gp = self.omega.grad_pair(&s_minus_f, phidot)?;
        let ia = self.omega.inner11(&ddbar(phidot), self.twist.alpha())?;
        Ok(&(&(&gp.scale_re(0.5) - &lich) + &ia) - hdot)
    }

    /// `𝓛_α φ = −𝓓*𝓓φ + ½⟨∇Λα, ∇φ⟩ + ⟨i∂∂̄φ, α⟩`, assembled term by term.
    pub fn l_alpha_reference(&self, phi: &ScalarField) -> Result<ScalarField> {
        let lich = self.omega.lichnerowicz(phi)?;
        let gp = self.omega.grad_pair(&self.lambda_alpha, phi)?;
        let ia = self.omega.inner11(&ddbar(phi), self.twist.alpha())?;
        Ok(&(&gp.scale_re(0.5) - &lich) + &ia)
    }

    /// `𝓛_α φ`, with the curvature terms folded into cached coefficients:
    /// `−Δ²φ + ⟨α − Ric, i∂∂̄φ⟩ + ½⟨∇(Λα − S), ∇φ⟩`.
    pub fn l_alpha(&self, phi: &ScalarField) -> Result<ScalarField> {
        PeriodicLattice::ensure_same(self.lattice(), phi.lattice(), "l_alpha")?;
        let om = &self.omega;
        let n = om.dim();
        let h = ddbar(phi);
        let lap = om.trace(&h)?;
        let bilap = om.laplacian(&lap)?;
        let (_, dbp) = phi.gradients();
        let ginv = om.inverse();
        let a = &self.a_minus_ric;
        let vals = (0..phi.len())
            .map(|idx| {
                let mut inner = C64::new(0.0, 0.0);
                let mut grad = C64::new(0.0, 0.0);
                for j in 0..n {
                    for k in 0..n {
                        let gjk = ginv.at(k, j, idx);
                        grad += gjk * self.d_shift[j].values()[idx] * dbp[k].values()[idx];
                        for r in 0..n {
                            for s in 0..n {
                                // tr(Ginv A Ginv H) = Ginv[k][j] A[j][r] Ginv[r][s] H[s][k]
                                inner += gjk * a.at(j, r, idx) * ginv.at(r, s, idx) * h.at(s, k, idx);
                            }
                        }
                    }
                }
                inner + grad - bilap.values()[idx]
            })
            .collect();
        ScalarField::new(self.lattice().clone(), vals)
    }

    /// `−∫⟨𝓓φ, 𝓓ψ⟩ωⁿ − ∫⟨∇ψ, ∇φ⟩_α ωⁿ`, the weak form of `∫ψ 𝓛_α φ ωⁿ`.
    pub fn l_alpha_weak(&self, phi: &ScalarField, psi: &ScalarField) -> Result<C64> {
        let om = &self.omega;
        let dd = om.d_pairing(&om.d_operator(phi)?, &om.d_operator(psi)?)?;
        let ga = om.grad_pair_alpha(psi, phi, self.twist.alpha())?;
        Ok(-om.integrate(&dd) - om.integrate(&ga))
    }

    /// Volume mean functional used by the augmented solve.
    fn wmean(&self, v: &[C64]) -> C64 {
        let om = &self.omega;
        let f = ScalarField::new(self.lattice().clone(), v.to_vec()).expect("grid length");
        om.mean(&f)
    }

    fn field(&self, v: Vec<C64>) -> ScalarField {
        ScalarField::new(self.lattice().clone(), v).expect("grid length")
    }

    /// Solves `𝓛_α φ − h = rhs` with `φ` volume-mean-zero and `h` constant.
    ///
    /// The augmented map `u ↦ 𝓛_α u − mean(u) + ghost(u)` is invertible and
    /// its solution splits as `φ = u − mean(u) − ghost(u)`, `h = mean(u)`.
    pub fn solve(&self, rhs: &ScalarField, opts: GmresOptions) -> Result<TwistedSolution> {
        PeriodicLattice::ensure_same(self.lattice(), rhs.lattice(), "solve_twisted_system")?;
        let pre = FlatBiharmonic::new(&self.omega, 1.0, -1.0);
        let apply = |v: &[C64]| -> Result<Vec<C64>> {
            let u = self.field(v.to_vec());
            let l = self.l_alpha(&u)?;
            let m = self.wmean(v);
            let g = u.ghost_part();
            Ok(l.values()
                .iter()
                .zip(g.values())
                .map(|(a, b)| a - m + b)
                .collect())
        };
        let (u, report) = gmres(apply, |v| pre.apply(v), rhs.values(), None, opts)?;
        let u = self.field(u);
        let ghost = u.ghost_part();
        let stripped = &u - &ghost;
        let h = self.omega.mean(&stripped);
        let phi = stripped.map(|v| v - h).tagged_mean_zero();
        let res = (&self.l_alpha(&phi)?.map(|v| v - h) - rhs).rms();
        let residual = res / rhs.rms().max(f64::MIN_POSITIVE);
        Ok(TwistedSolution {
            phi,
            h,
            report,
            residual,
        })
    }

    /// Smallest eigenvalue of `−𝓛_α` on volume-mean-zero fields, by inverse
    /// iteration in the `ωⁿ`-weighted inner product.
    pub fn kernel_analysis(&self, tol: f64, max_iter: usize, seed_field: Option<&ScalarField>) -> Result<KernelReport> {
        let start = Instant::now();
        let om = &self.omega;
        let lat = self.lattice().clone();
        let opts = GmresOptions {
            tol: 1e-10,
            restart: 80,
            max_iter: 2000,
        };
        let mut history = Vec::new();
        let mut total_iters = 0usize;
        let x0 = match seed_field {
            Some(f) => f.values().to_vec(),
            None => ScalarField::from_real_fn(&lat, |x| {
                x.iter().enumerate().map(|(d, &v)| ((d + 1) as f64 * 0.37 + v).sin() + (v * 2.0).cos() * 0.3).sum()
            })
            .into_values(),
        };
        let project = |v: &mut [C64]| {
            let f = ScalarField::new(lat.clone(), v.to_vec()).expect("grid length");
            let g = f.ghost_part();
            let s = &f - &g;
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
                let sol = self.solve(&self.field(x.to_vec()), opts)?;
                total_iters += sol.report.iterations;
                history.extend(sol.report.residual_history.iter().copied());
                Ok(sol.phi.scale_re(-1.0).into_values())
            },
            |x| Ok(self.l_alpha(&self.field(x.to_vec()))?.scale_re(-1.0).into_values()),
            inner,
            project,
            x0,
            tol,
            max_iter,
        )?;
        let lambda = rep.lambda;
        Ok(KernelReport {
            lambda_min: lambda,
            iterations: rep.iterations,
            rayleigh_history: rep.history,
            base_is_twisted_csck: self.csck_defect() < 1e-8,
            trivial_kernel: lambda > 0.0,
            eigenvector: Some(self.field(rep.vector)),
            log: SolveLog {
                operator: "-L_alpha".into(),
                grid: lat.grid().to_vec(),
                lambda_min: Some(lambda),
                residual_history: history,
                iterations: total_iters,
                wall_time: start.elapsed().as_secs_f64(),
            },
        })
    }

    /// `𝓜_α` along the piecewise-linear path through `vertices`, starting
    /// at the first vertex (normally zero).
    pub fn mabuchi_path(&self, vertices: &[ScalarField]) -> Result<f64> {
        let (nodes, weights) = gauss_legendre(16);
        let mut total = 0.0;
        for seg in vertices.windows(2) {
            let dir = &seg[1] - &seg[0];
            for (t, w) in nodes.iter().zip(&weights) {
                let pot = seg[0].axpy(*t, &dir);
                let om = self.omega.perturbed(&pot)?;
                let la = om.trace(self.twist.alpha())?;
                let integrand = (&dir * &(om.scalar_curvature() - &la)).axpy(-self.c, &dir);
                total -= w * om.integrate(&integrand).re;
            }
        }
        Ok(total)
    }

    /// `𝓜_α(φ)` along the radial path `tφ`.
    pub fn mabuchi(&self, phi: &ScalarField) -> Result<f64> {
        self.mabuchi_path(&[ScalarField::zeros(self.lattice()), phi.clone()])
    }

    /// `H(φ, ψ) = ∫⟨𝓓ψ, 𝓓φ⟩ωⁿ + ∫⟨∇ψ, ∇φ⟩_α ωⁿ` at the base metric.
    pub fn mabuchi_hessian(&self, phi: &ScalarField, psi: &ScalarField) -> Result<f64> {
        Ok(-self.l_alpha_weak(phi, psi)?.re)
    }
}

/// Gauss–Legendre nodes and weights on `[0, 1]`, from the eigen-decomposition
/// of the Jacobi matrix.
pub fn gauss_legendre(n: usize) -> (Vec<f64>, Vec<f64>) {
    let j = DMatrix::from_fn(n, n, |a, b| {
        if a + 1 == b || b + 1 == a {
            let k = a.max(b) as f64;
            k / (4.0 * k * k - 1.0).sqrt()
        } else {
            0.0
        }
    });
    let eig = j.symmetric_eigen();
    let mut pairs: Vec<(f64, f64)> = (0..n)
        .map(|i| {
            let v0 = eig.eigenvectors[(0, i)];
            ((eig.eigenvalues[i] + 1.0) / 2.0, v0 * v0)
        })
        .collect();
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
    pairs.into_iter().unzip()
}
