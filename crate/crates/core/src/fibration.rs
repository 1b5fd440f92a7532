//! Torus-fibred total spaces `X = B × F → B`: vertical/horizontal splitting,
//! fibre integrals, the relative Ricci form, the twist `α` and the
//! Weil–Petersson form.
//!
//! Complex coordinates on `X` list the base factors first, so a total-space
//! sample index is `base_index · fibre_len + fibre_index`.

use std::sync::{Arc, OnceLock};

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{GeomError, Result};
use crate::exterior::FieldForm;
use crate::field::{ordered_sum, Form11, ScalarField};
use crate::geometry::{ddbar, KahlerStructure};
use crate::lattice::{PeriodicLattice, C64};

/// One Fourier mode `amplitude · cos(k · x + phase)` of a testbed potential,
/// with `k` indexed by the real axes of the total space.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mode {
    pub k: Vec<i64>,
    pub amplitude: f64,
    pub phase: f64,
}

/// Parameters of an `ε`-testbed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TestbedSpec {
    pub base_periods: Vec<C64>,
    pub fibre_periods: Vec<C64>,
    pub base_grid: Vec<usize>,
    pub fibre_grid: Vec<usize>,
    pub epsilon: f64,
    pub modes: Vec<Mode>,
}

impl TestbedSpec {
    /// Square base and fibre, one mixed harmonic and one base harmonic.
    pub fn standard(points: usize, epsilon: f64) -> Self {
        Self {
            base_periods: vec![C64::new(0.0, 1.0)],
            fibre_periods: vec![C64::new(0.0, 1.0)],
            base_grid: vec![points; 2],
            fibre_grid: vec![points; 2],
            epsilon,
            modes: vec![
                Mode {
                    k: vec![1, 0, 1, 0],
                    amplitude: 1.0,
                    phase: 0.0,
                },
                Mode {
                    k: vec![0, 1, 0, 0],
                    amplitude: 1.0,
                    phase: 0.3,
                },
            ],
        }
    }

    /// The product testbed (`ε = 0`).
    pub fn product(points: usize) -> Self {
        Self::standard(points, 0.0)
    }
}

#[derive(Debug, Clone)]
pub struct WPData {
    /// `ρ = −i∂∂̄ log det g_𝓥` on the total space.
    pub rho: Form11,
    /// Horizontal part of `ρ` (base indices, total-space samples).
    pub rho_h: Form11,
    pub alpha: Form11,
    /// Weil–Petersson form with the fibre scalar curvature kept under the
    /// fibre integral.
    pub wp: Form11,
    /// The displayed definition with `S(ω_b)` replaced by its fibre-average
    /// constant.
    pub wp_constant_sfib: Form11,
    /// Fibre-average scalar curvature (0 for torus fibres).
    pub s_fib: f64,
    /// `sup |S(ω_b) − s_fib|`; zero exactly when the fibres are cscK.
    pub s_fib_spread: f64,
}

#[derive(Debug)]
pub struct FibredSpace {
    base: Arc<PeriodicLattice>,
    fibre: Arc<PeriodicLattice>,
    total: Arc<PeriodicLattice>,
    omega0: KahlerStructure,
    omega_b: KahlerStructure,
    wp: OnceLock<WPData>,
}

impl Clone for FibredSpace {
    fn clone(&self) -> Self {
        Self {
            base: self.base.clone(),
            fibre: self.fibre.clone(),
            total: self.total.clone(),
            omega0: self.omega0.clone(),
            omega_b: self.omega_b.clone(),
            wp: self.wp.clone(),
        }
    }
}

/// `ε · Σ modes`, with purely fibrewise modes dropped.
pub fn testbed_potential(total: &Arc<PeriodicLattice>, n_base: usize, spec: &TestbedSpec) -> Result<ScalarField> {
    let dims = total.grid().len();
    for m in &spec.modes {
        if m.k.len() != dims {
            return Err(GeomError::Precondition(format!(
                "mode wavevector {:?} needs {dims} entries",
                m.k
            )));
        }
    }
    let modes: Vec<&Mode> = spec
        .modes
        .iter()
        .filter(|m| m.k[..2 * n_base].iter().any(|&v| v != 0))
        .collect();
    let eps = spec.epsilon;
    Ok(ScalarField::from_real_fn(total, |x| {
        eps * modes
            .iter()
            .map(|m| {
                let ph: f64 = m.k.iter().zip(x).map(|(&k, &v)| k as f64 * v).sum();
                m.amplitude * (ph + m.phase).cos()
            })
            .sum::<f64>()
    }))
}

impl FibredSpace {
    /// Builds `X = B × F` with `ω₀ = flat + i∂∂̄(ε φ_mix)` and a given base
    /// metric.
    pub fn new(
        base: Arc<PeriodicLattice>,
        fibre: Arc<PeriodicLattice>,
        omega0: KahlerStructure,
        omega_b: KahlerStructure,
    ) -> Result<Self> {
        let total = base.product(&fibre)?;
        PeriodicLattice::ensure_same(&total, omega0.lattice(), "fibred total space")?;
        PeriodicLattice::ensure_same(&base, omega_b.lattice(), "fibred base")?;
        let fs = Self {
            base,
            fibre,
            total,
            omega0,
            omega_b,
            wp: OnceLock::new(),
        };
        fs.check_vertical()?;
        Ok(fs)
    }

    pub fn make_testbed(spec: &TestbedSpec) -> Result<Self> {
        let base = PeriodicLattice::new(spec.base_periods.clone(), spec.base_grid.clone())?;
        let fibre = PeriodicLattice::new(spec.fibre_periods.clone(), spec.fibre_grid.clone())?;
        let total = base.product(&fibre)?;
        let pot = testbed_potential(&total, base.dim(), spec)?;
        let omega0 = KahlerStructure::new(&Form11::identity(&total), &pot)?;
        let omega_b = KahlerStructure::flat(&base);
        Self::new(base, fibre, omega0, omega_b)
    }

    fn check_vertical(&self) -> Result<()> {
        let det = self.vertical_det();
        for (idx, d) in det.values().iter().enumerate() {
            if !(d.re > crate::geometry::POSITIVITY_TOL) {
                return Err(GeomError::DegenerateVertical { index: idx, det: d.re });
            }
        }
        Ok(())
    }

    pub fn base(&self) -> &Arc<PeriodicLattice> {
        &self.base
    }

    pub fn fibre(&self) -> &Arc<PeriodicLattice> {
        &self.fibre
    }

    pub fn total(&self) -> &Arc<PeriodicLattice> {
        &self.total
    }

    pub fn n(&self) -> usize {
        self.base.dim()
    }

    pub fn m(&self) -> usize {
        self.fibre.dim()
    }

    pub fn omega0(&self) -> &KahlerStructure {
        &self.omega0
    }

    pub fn omega_b(&self) -> &KahlerStructure {
        &self.omega_b
    }

    /// Same space with a different base metric.
    pub fn with_base_metric(&self, omega_b: KahlerStructure) -> Result<Self> {
        Self::new(self.base.clone(), self.fibre.clone(), self.omega0.clone(), omega_b)
    }

    /// Same space with a different relatively Kähler form.
    pub fn with_omega0(&self, omega0: KahlerStructure) -> Result<Self> {
        Self::new(self.base.clone(), self.fibre.clone(), omega0, self.omega_b.clone())
    }

    /// `π*f`.
    pub fn pullback(&self, f: &ScalarField) -> Result<ScalarField> {
        PeriodicLattice::ensure_same(&self.base, f.lattice(), "pullback")?;
        let fl = self.fibre.len();
        let vals = (0..self.total.len()).map(|i| f.values()[i / fl]).collect();
        ScalarField::new(self.total.clone(), vals)
    }

    /// Pullback of a base (1,1)-form, zero in vertical and mixed slots.
    pub fn pullback_form(&self, beta: &Form11) -> Result<Form11> {
        let n = self.n();
        let nt = n + self.m();
        let mut comps = Vec::with_capacity(nt * nt);
        for j in 0..nt {
            for k in 0..nt {
                comps.push(if j < n && k < n {
                    self.pullback(beta.get(j, k))?
                } else {
                    ScalarField::zeros(&self.total)
                });
            }
        }
        Form11::new(nt, comps)
    }

    /// Sums `f` over each fibre against the flat cell measure.
    fn fibre_sum(&self, f: &ScalarField) -> ScalarField {
        let fl = self.fibre.len();
        let cell = self.fibre.cell_volume();
        let vals = f
            .values()
            .chunks(fl)
            .map(|c| ordered_sum(c) * cell)
            .collect();
        ScalarField::new(self.base.clone(), vals).expect("base grid length")
    }

    /// Pointwise vertical block of a total-space form.
    fn block(&self, form: &Form11, idx: usize, rows: std::ops::Range<usize>, cols: std::ops::Range<usize>) -> DMatrix<C64> {
        let r0 = rows.start;
        let c0 = cols.start;
        DMatrix::from_fn(rows.len(), cols.len(), |a, b| form.at(r0 + a, c0 + b, idx))
    }

    /// `det g_𝓥` at every point of the total space.
    pub fn vertical_det(&self) -> ScalarField {
        let n = self.n();
        let nt = n + self.m();
        let g = self.omega0.form();
        let vals = (0..self.total.len())
            .map(|idx| C64::new(self.block(g, idx, n..nt, n..nt).determinant().re, 0.0))
            .collect();
        ScalarField::new(self.total.clone(), vals).expect("grid length")
    }

    /// `(∫_{X/B} φ ω₀^m)(b)`, normalised as the Riemannian fibre volume
    /// form `ω_b^m / m!`.
    pub fn fibre_integral(&self, phi: &ScalarField) -> Result<ScalarField> {
        PeriodicLattice::ensure_same(&self.total, phi.lattice(), "fibre_integral")?;
        Ok(self.fibre_sum(&(phi * &self.vertical_det())))
    }

    /// Fibre volume at every base point.
    pub fn fibre_volume(&self) -> ScalarField {
        self.fibre_sum(&self.vertical_det())
    }

    /// `∫_{X_b} φ ω_b^m / ∫_{X_b} ω_b^m`.
    pub fn fibre_mean(&self, phi: &ScalarField) -> Result<ScalarField> {
        let num = self.fibre_integral(phi)?;
        Ok(num.zip_map(&self.fibre_volume(), |a, v| a / v))
    }

    /// `φ = φ₀ + π*φ_B` with `φ₀` fibre-mean-zero.
    pub fn split_function(&self, phi: &ScalarField) -> Result<(ScalarField, ScalarField)> {
        let pb = self.fibre_mean(phi)?;
        let p0 = (phi - &self.pullback(&pb)?).tagged_mean_zero();
        Ok((p0, pb))
    }

    /// Pushforward of a total-space form: fibre-saturated monomials
    /// `c e_M ∧ e_F` map to `(∫_F c) e_M`, with `∏ i dw_j ∧ dw̄_j`
    /// integrating to the flat fibre measure.
    pub fn pushforward(&self, eta: &FieldForm) -> Result<FieldForm> {
        PeriodicLattice::ensure_same(&self.total, eta.lattice(), "pushforward")?;
        let n = self.n();
        let m = self.m();
        let fibre_mask: u64 = ((1u64 << (2 * m)) - 1) << (2 * n);
        let unit = C64::new(0.0, -1.0).powi(m as i32);
        let mut out = FieldForm::zero(&self.base);
        for (&mask, c) in &eta.terms {
            if mask & fibre_mask != fibre_mask {
                continue;
            }
            let mut single = FieldForm::zero(&self.base);
            single.terms.insert(mask & !fibre_mask, self.fibre_sum(c).scale(unit));
            out = out.add(&single);
        }
        Ok(out)
    }

    /// `ρ` and its horizontal part `ρ_H(h_a, h̄_b)` with horizontal lifts
    /// `h_a = ∂_a − (g_{BV} g_{VV}⁻¹)_a ∂_V`.
    pub fn relative_ricci(&self) -> (Form11, Form11) {
        let n = self.n();
        let nt = n + self.m();
        let logdet = self.vertical_det().map(|d| C64::new(d.re.ln(), 0.0));
        let rho = ddbar(&logdet).scale(-1.0);
        let g = self.omega0.form();
        let mut comps = vec![Vec::with_capacity(self.total.len()); n * n];
        for idx in 0..self.total.len() {
            let gvv = self.block(g, idx, n..nt, n..nt);
            let gbv = self.block(g, idx, 0..n, n..nt);
            let c = gbv * gvv.try_inverse().expect("vertical block checked positive");
            let rbb = self.block(&rho, idx, 0..n, 0..n);
            let rbv = self.block(&rho, idx, 0..n, n..nt);
            let rvb = self.block(&rho, idx, n..nt, 0..n);
            let rvv = self.block(&rho, idx, n..nt, n..nt);
            let ca = c.adjoint();
            let h = &rbb - &c * &rvb - &rbv * &ca + &c * &rvv * &ca;
            for a in 0..n {
                for b in 0..n {
                    comps[a * n + b].push(h[(a, b)]);
                }
            }
        }
        let rho_h = Form11::new(
            n,
            comps
                .into_iter()
                .map(|v| ScalarField::new(self.total.clone(), v).expect("grid length"))
                .collect(),
        )
        .expect("square component array");
        (rho, rho_h)
    }

    /// Scalar curvature of each fibre restriction `ω_b`.
    pub fn fibre_scalar_curvature(&self, rho: &Form11) -> ScalarField {
        let n = self.n();
        let nt = n + self.m();
        let g = self.omega0.form();
        let vals = (0..self.total.len())
            .map(|idx| {
                let gvv = self.block(g, idx, n..nt, n..nt);
                let rvv = self.block(rho, idx, n..nt, n..nt);
                C64::new((gvv.try_inverse().expect("positive") * rvv).trace().re, 0.0)
            })
            .collect();
        ScalarField::new(self.total.clone(), vals).expect("grid length")
    }

    fn base_form(&self, comps: Vec<ScalarField>) -> Form11 {
        Form11::new(self.n(), comps).expect("square component array")
    }

    fn compute_wp(&self) -> WPData {
        let n = self.n();
        let m = self.m();
        let (rho, rho_h) = self.relative_ricci();

        // α = −∫ρ_H ω^m / ∫ω^m, from the Schur-complement route.
        let vol = self.fibre_volume();
        let mut a_comps = Vec::with_capacity(n * n);
        for a in 0..n {
            for b in 0..n {
                let num = self.fibre_integral(rho_h.get(a, b)).expect("same grid");
                a_comps.push(num.zip_map(&vol, |x, v| -x / v));
            }
        }
        let alpha = self.base_form(a_comps);

        // ω_WP from wedge powers and pushforwards.
        let s_b = self.fibre_scalar_curvature(&rho);
        let s_fib = (ordered_sum(self.fibre_integral(&s_b).expect("same grid").values())
            / ordered_sum(vol.values()))
        .re;
        let s_fib_spread = s_b.map(|v| v - s_fib).max_abs();
        let om = FieldForm::from_form11(self.omega0.form());
        let om_m = om.power(m);
        let om_m1 = om_m.wedge(&om);
        let denom = self.pushforward(&om_m).expect("same grid");
        let denom = denom.terms.get(&0).cloned().unwrap_or_else(|| ScalarField::zeros(&self.base));
        let rho_term = self
            .pushforward(&FieldForm::from_form11(&rho).wedge(&om_m))
            .expect("same grid")
            .to_form11();
        let s_term = self
            .pushforward(&FieldForm::function(&s_b).wedge(&om_m1))
            .expect("same grid")
            .to_form11();
        let vol_term = self.pushforward(&om_m1).expect("same grid").to_form11();
        let k = 1.0 / (m as f64 + 1.0);
        let wp = self.base_form(
            (0..n * n)
                .map(|i| {
                    let num = &s_term.components()[i].scale_re(k) - &rho_term.components()[i];
                    num.zip_map(&denom, |x, d| x / d)
                })
                .collect(),
        );
        let wp_constant_sfib = self.base_form(
            (0..n * n)
                .map(|i| {
                    let num = &vol_term.components()[i].scale_re(k * s_fib) - &rho_term.components()[i];
                    num.zip_map(&denom, |x, d| x / d)
                })
                .collect(),
        );
        WPData {
            rho,
            rho_h,
            alpha,
            wp,
            wp_constant_sfib,
            s_fib,
            s_fib_spread,
        }
    }

    /// Relative Ricci form, `α` and `ω_WP`, computed once.
    pub fn wp_data(&self) -> &WPData {
        self.wp.get_or_init(|| self.compute_wp())
    }

    pub fn alpha_form(&self) -> &Form11 {
        &self.wp_data().alpha
    }

    pub fn weil_petersson(&self) -> &Form11 {
        &self.wp_data().wp
    }

    /// Invariant summary of the testbed.
    pub fn invariants(&self) -> TestbedInvariants {
        let vol = self.fibre_volume();
        let v0 = vol.values()[0].re;
        let vol_spread = vol.map(|v| v - v0).max_abs() / v0.abs();
        let wp = self.wp_data();
        let alpha_inf = wp.alpha.max_abs();
        TestbedInvariants {
            fibre_volume: v0,
            fibre_volume_spread: vol_spread,
            fibre_ricci_sup: wp.s_fib_spread,
            alpha_sup: alpha_inf,
            alpha_closed: wp.alpha.closedness_defect(),
            wp_closed: wp.wp.closedness_defect(),
            alpha_wp_gap: wp.alpha.sub(&wp.wp).expect("same grid").max_abs(),
            alpha_min_eigenvalue: wp.alpha.min_eigenvalue().0,
            omega0_min_eigenvalue: self.omega0.form().min_eigenvalue().0,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct TestbedInvariants {
    pub fibre_volume: f64,
    pub fibre_volume_spread: f64,
    pub fibre_ricci_sup: f64,
    pub alpha_sup: f64,
    pub alpha_closed: f64,
    pub wp_closed: f64,
    pub alpha_wp_gap: f64,
    pub alpha_min_eigenvalue: f64,
    pub omega0_min_eigenvalue: f64,
}

/// Step of the base-point stencil in [`wp_pointwise`].
pub const WP_STENCIL_STEP: f64 = 1e-3;

/// `∂_u ∂_v̄ F` at `b₀` for a function on `ℂⁿ`, by polarisation of the
/// directional Laplacian `∂_w∂_w̄ F = ¼(∂_s² + ∂_t²) F(b₀ + (s + it)w)`,
/// with one Richardson step.
fn levi_form(f: &dyn Fn(&[C64]) -> Result<f64>, b0: &[C64], h: f64) -> Result<DMatrix<C64>> {
    let n = b0.len();
    let lap = |w: &[C64], h: f64| -> Result<f64> {
        let at = |s: f64, t: f64| -> Result<f64> {
            let z = C64::new(s, t);
            let p: Vec<C64> = b0.iter().zip(w).map(|(b, wi)| b + z * wi).collect();
            f(&p)
        };
        let c = at(0.0, 0.0)?;
        let sum = at(h, 0.0)? + at(-h, 0.0)? + at(0.0, h)? + at(0.0, -h)? - 4.0 * c;
        Ok(sum / (4.0 * h * h))
    };
    let rich = |w: &[C64]| -> Result<f64> {
        let a = lap(w, h)?;
        let b = lap(w, h / 2.0)?;
        Ok((4.0 * b - a) / 3.0)
    };
    let mut out = DMatrix::zeros(n, n);
    let i = C64::new(0.0, 1.0);
    for a in 0..n {
        for b in 0..n {
            let mut acc = C64::new(0.0, 0.0);
            for k in 0..4 {
                let ik = i.powi(k);
                let w: Vec<C64> = (0..n)
                    .map(|j| {
                        let mut v = C64::new(0.0, 0.0);
                        if j == a {
                            v += 1.0;
                        }
                        if j == b {
                            v += ik;
                        }
                        v
                    })
                    .collect();
                acc += ik * rich(&w)?;
            }
            out[(a, b)] = acc / 4.0;
        }
    }
    Ok(out)
}

/// Weil–Petersson form at `b₀` of the local family of flat tori
/// `ℂ/(2πℤ + 2πτ(b)ℤ)` carrying the fibre metric `i dw∧dw̄ / (2 Im τ)`.
///
/// Evaluates `F(b) = ∫_{X_b} log det g_𝓥 ω_b` on a fibre grid at stencil
/// points around `b₀` and returns `i∂∂̄F / vol`, which is
/// `−∫ρ∧ω/∫ω` because the pushforward commutes with `∂∂̄`.
pub fn wp_pointwise(tau: &dyn Fn(&[C64]) -> C64, b0: &[C64], fibre_points: usize) -> Result<DMatrix<C64>> {
    let h = WP_STENCIL_STEP;
    let fibre_integral = |b: &[C64]| -> Result<(f64, f64)> {
        let t = tau(b);
        if !(t.im > 0.0) {
            return Err(GeomError::StencilOutsideUpperHalfPlane {
                offset: b.iter().zip(b0).flat_map(|(p, q)| [(p - q).re, (p - q).im]).collect(),
                im_tau: t.im,
            });
        }
        let fibre = PeriodicLattice::new(vec![t], vec![fibre_points; 2])?;
        let gvv = 1.0 / (2.0 * t.im);
        let cell = fibre.cell_volume();
        let samples: Vec<C64> = (0..fibre.len()).map(|_| C64::new(gvv.ln() * gvv, 0.0)).collect();
        let vols: Vec<C64> = (0..fibre.len()).map(|_| C64::new(gvv, 0.0)).collect();
        Ok(((ordered_sum(&samples) * cell).re, (ordered_sum(&vols) * cell).re))
    };
    let vol = fibre_integral(b0)?.1;
    let f = |b: &[C64]| -> Result<f64> { Ok(fibre_integral(b)?.0) };
    let levi = levi_form(&f, b0, h)?;
    Ok(levi / C64::new(vol, 0.0))
}
