//! Kähler metrics `ω = ω_ref + i∂∂̄φ` on flat tori and their curvature.
//!
//! Matrices follow the row/column convention of [`Form11`]: `G[j][k] = g_{jk̄}`.
//! With `Ginv = G⁻¹` the inverse metric is `g^{jk̄} = Ginv[k][j]`, so the
//! trace is `Λβ = tr(Ginv·B)`.

use std::sync::{Arc, OnceLock};

use nalgebra::DMatrix;

use crate::error::{GeomError, Result};
use crate::field::{ordered_sum, Form11, ScalarField};
use crate::lattice::{PeriodicLattice, C64};

/// Pointwise positivity threshold for metrics.
pub const POSITIVITY_TOL: f64 = 1e-12;

/// `i∂∂̄φ`, with components `∂_j ∂_{k̄} φ`.
pub fn ddbar(phi: &ScalarField) -> Form11 {
    let lat = phi.lattice();
    let n = lat.dim();
    let hat = phi.spectrum();
    let mut comps = Vec::with_capacity(n * n);
    for j in 0..n {
        let dj = lat.dz_symbol(j);
        for k in 0..n {
            let dk = lat.dzbar_symbol(k);
            let h: Vec<C64> = hat
                .iter()
                .zip(dj.iter().zip(dk))
                .map(|(h, (a, b))| h * a * b)
                .collect();
            comps.push(ScalarField::from_spectrum(lat, h));
        }
    }
    Form11::new(n, comps).expect("square component array")
}

/// `i∂f ∧ ∂̄φ`, with components `∂_j f · ∂_{k̄} φ`.
pub fn d_wedge_dbar(f: &ScalarField, phi: &ScalarField) -> Form11 {
    let n = f.lattice().dim();
    let (df, _) = f.gradients();
    let (_, dbp) = phi.gradients();
    let mut comps = Vec::with_capacity(n * n);
    for a in &df {
        for b in &dbp {
            comps.push(a * b);
        }
    }
    Form11::new(n, comps).expect("square component array")
}

/// `S = −Λ_g i∂∂̄ log det g` for a complexified metric: `g` need not be
/// Hermitian, as when a real family `g(h)` is evaluated at complex `h`.
///
/// `det_scale` multiplies `det g` before the logarithm to keep it off the
/// branch cut; being constant it drops out of `i∂∂̄`.
pub fn analytic_scalar_curvature(g: &Form11, det_scale: C64) -> Result<ScalarField> {
    let lat = g.lattice().clone();
    let n = lat.dim();
    let len = lat.len();
    let mut inv = Vec::with_capacity(len);
    let mut log_det = Vec::with_capacity(len);
    for idx in 0..len {
        let m = g.matrix_at(idx);
        let d = m.determinant() * det_scale;
        let i = m.try_inverse().ok_or(GeomError::NonPositive {
            index: idx,
            coords: lat.coords(idx),
            eigenvalue: 0.0,
        })?;
        if d.re <= 0.0 {
            return Err(GeomError::NonPositive {
                index: idx,
                coords: lat.coords(idx),
                eigenvalue: d.re,
            });
        }
        log_det.push(d.ln());
        inv.push(i);
    }
    let log_det = ScalarField::new(lat.clone(), log_det)?;
    let mean = log_det.mean();
    let ric = ddbar(&log_det.map(|v| v - mean));
    Ok(pointwise(&lat, |idx| {
        let mut s = C64::new(0.0, 0.0);
        for j in 0..n {
            for k in 0..n {
                s -= inv[idx][(k, j)] * ric.at(j, k, idx);
            }
        }
        s
    }))
}

fn pointwise(lat: &Arc<PeriodicLattice>, f: impl Fn(usize) -> C64) -> ScalarField {
    ScalarField::new(lat.clone(), (0..lat.len()).map(f).collect()).expect("grid length")
}

#[derive(Debug)]
pub struct KahlerStructure {
    lattice: Arc<PeriodicLattice>,
    reference: Form11,
    potential: ScalarField,
    g: Form11,
    ginv: Form11,
    det: ScalarField,
    ricci: OnceLock<Form11>,
    scalar: OnceLock<ScalarField>,
}

impl Clone for KahlerStructure {
    fn clone(&self) -> Self {
        Self {
            lattice: self.lattice.clone(),
            reference: self.reference.clone(),
            potential: self.potential.clone(),
            g: self.g.clone(),
            ginv: self.ginv.clone(),
            det: self.det.clone(),
            ricci: self.ricci.clone(),
            scalar: self.scalar.clone(),
        }
    }
}

impl KahlerStructure {
    /// `ω = reference + i∂∂̄φ`, checked for pointwise positivity.
    pub fn new(reference: &Form11, potential: &ScalarField) -> Result<Self> {
        PeriodicLattice::ensure_same(reference.lattice(), potential.lattice(), "metric")?;
        let g = reference.add(&ddbar(potential))?;
        Self::assemble(reference.clone(), potential.clone(), g)
    }

    /// The flat metric with unit diagonal.
    pub fn flat(lattice: &Arc<PeriodicLattice>) -> Self {
        Self::new(&Form11::identity(lattice), &ScalarField::zeros(lattice)).expect("flat metric is positive")
    }

    /// A metric given directly by its form, with zero potential.
    pub fn from_form(form: &Form11) -> Result<Self> {
        let zero = ScalarField::zeros(form.lattice());
        Self::assemble(form.clone(), zero, form.clone())
    }

    fn assemble(reference: Form11, potential: ScalarField, g: Form11) -> Result<Self> {
        let lat = reference.lattice().clone();
        let n = lat.dim();
        let len = lat.len();
        let mut inv_vals = vec![Vec::with_capacity(len); n * n];
        let mut det_vals = Vec::with_capacity(len);
        for idx in 0..len {
            let m = g.matrix_at(idx);
            let h = (&m + m.adjoint()) * C64::new(0.5, 0.0);
            let lo = h.symmetric_eigenvalues().iter().cloned().fold(f64::INFINITY, f64::min);
            if !(lo > POSITIVITY_TOL) {
                return Err(GeomError::NonPositive {
                    index: idx,
                    coords: lat.coords(idx),
                    eigenvalue: lo,
                });
            }
            let inv = m.clone().try_inverse().ok_or(GeomError::NonPositive {
                index: idx,
                coords: lat.coords(idx),
                eigenvalue: lo,
            })?;
            det_vals.push(C64::new(m.determinant().re, 0.0));
            for j in 0..n {
                for k in 0..n {
                    inv_vals[j * n + k].push(inv[(j, k)]);
                }
            }
        }
        let ginv = Form11::new(
            n,
            inv_vals
                .into_iter()
                .map(|v| ScalarField::new(lat.clone(), v).expect("grid length"))
                .collect(),
        )?;
        let det = ScalarField::new(lat.clone(), det_vals)?;
        Ok(Self {
            lattice: lat,
            reference,
            potential,
            g,
            ginv,
            det,
            ricci: OnceLock::new(),
            scalar: OnceLock::new(),
        })
    }

    /// `ω + i∂∂̄ψ` with the same reference.
    pub fn perturbed(&self, psi: &ScalarField) -> Result<Self> {
        let pot = &self.potential + psi;
        Self::new(&self.reference, &pot)
    }

    pub fn lattice(&self) -> &Arc<PeriodicLattice> {
        &self.lattice
    }

    pub fn dim(&self) -> usize {
        self.lattice.dim()
    }

    pub fn reference(&self) -> &Form11 {
        &self.reference
    }

    pub fn potential(&self) -> &ScalarField {
        &self.potential
    }

    /// The Kähler form itself, components `g_{jk̄}`.
    pub fn form(&self) -> &Form11 {
        &self.g
    }

    /// Pointwise matrix inverse of [`Self::form`]; `g^{jk̄}` is entry `(k, j)`.
    pub fn inverse(&self) -> &Form11 {
        &self.ginv
    }

    pub fn det(&self) -> &ScalarField {
        &self.det
    }

    fn ginv_at(&self, idx: usize) -> DMatrix<C64> {
        self.ginv.matrix_at(idx)
    }

    /// `Λ_ω β = g^{jk̄} β_{jk̄}`.
    pub fn trace(&self, beta: &Form11) -> Result<ScalarField> {
        self.g.same_grid(beta, "trace")?;
        let n = self.dim();
        Ok(pointwise(&self.lattice, |idx| {
            let mut s = C64::new(0.0, 0.0);
            for j in 0..n {
                for k in 0..n {
                    s += self.ginv.at(k, j, idx) * beta.at(j, k, idx);
                }
            }
            s
        }))
    }

    /// `⟨β₁, β₂⟩_ω = g^{jk̄} g^{rs̄} (β₁)_{js̄} (β₂)_{rk̄}`.
    pub fn inner11(&self, b1: &Form11, b2: &Form11) -> Result<ScalarField> {
        self.g.same_grid(b1, "inner11")?;
        self.g.same_grid(b2, "inner11")?;
        Ok(pointwise(&self.lattice, |idx| {
            let gi = self.ginv_at(idx);
            let m = &gi * b1.matrix_at(idx) * &gi * b2.matrix_at(idx);
            m.trace()
        }))
    }

    /// `Δφ = Λ_ω i∂∂̄φ`.
    pub fn laplacian(&self, phi: &ScalarField) -> Result<ScalarField> {
        PeriodicLattice::ensure_same(&self.lattice, phi.lattice(), "laplacian")?;
        self.trace(&ddbar(phi))
    }

    /// `Ric ω = −i∂∂̄ log det g`.
    pub fn ricci(&self) -> &Form11 {
        self.ricci
            .get_or_init(|| {
                // The mean is removed first; it only adds FFT round-off.
                let log_det = self.det.map(|d| C64::new(d.re.ln(), 0.0));
                let mean = log_det.mean();
                ddbar(&log_det.map(|v| v - mean)).scale(-1.0)
            })
    }

    /// `S(ω) = Λ_ω Ric ω`.
    pub fn scalar_curvature(&self) -> &ScalarField {
        self.scalar
            .get_or_init(|| self.trace(self.ricci()).expect("same grid").re())
    }

    /// `⟨∇f, ∇φ⟩ = 2 g^{pq̄} ∂_p f ∂_{q̄} φ`, equal to `2 Λ_ω(i∂f ∧ ∂̄φ)`.
    ///
    /// Not symmetrised: for real inputs `grad_pair(φ, f)` is the complex
    /// conjugate, and the real part is the Riemannian pairing.
    pub fn grad_pair(&self, f: &ScalarField, phi: &ScalarField) -> Result<ScalarField> {
        PeriodicLattice::ensure_same(&self.lattice, f.lattice(), "grad_pair")?;
        PeriodicLattice::ensure_same(&self.lattice, phi.lattice(), "grad_pair")?;
        let (df, _) = f.gradients();
        let (_, dbp) = phi.gradients();
        Ok(self.contract_gradients(&df, &dbp).scale_re(2.0))
    }

    /// Real Riemannian pairing `Re ⟨∇f, ∇φ⟩`, symmetric in its arguments.
    pub fn grad_pair_real(&self, f: &ScalarField, phi: &ScalarField) -> Result<ScalarField> {
        let a = self.grad_pair(f, phi)?;
        let b = self.grad_pair(phi, f)?;
        Ok((&a + &b).scale_re(0.5))
    }

    /// Sesquilinear pairing `2 g^{pq̄} ∂_p f conj(∂_q φ)`.
    pub fn grad_pair_hermitian(&self, f: &ScalarField, phi: &ScalarField) -> Result<ScalarField> {
        let (df, _) = f.gradients();
        let (dp, _) = phi.gradients();
        let dpc: Vec<ScalarField> = dp.iter().map(|d| d.conj()).collect();
        Ok(self.contract_gradients(&df, &dpc).scale_re(2.0))
    }

    /// `Σ g^{pq̄} a_p b_q`.
    fn contract_gradients(&self, a: &[ScalarField], b: &[ScalarField]) -> ScalarField {
        let n = self.dim();
        pointwise(&self.lattice, |idx| {
            let mut s = C64::new(0.0, 0.0);
            for p in 0..n {
                for q in 0..n {
                    s += self.ginv.at(q, p, idx) * a[p].values()[idx] * b[q].values()[idx];
                }
            }
            s
        })
    }

    /// `⟨∇ψ, ∇φ⟩_α = g^{pq̄} g^{rs̄} ∂_p ψ ∂_{s̄} φ α_{rq̄}`.
    pub fn grad_pair_alpha(&self, psi: &ScalarField, phi: &ScalarField, alpha: &Form11) -> Result<ScalarField> {
        self.g.same_grid(alpha, "grad_pair_alpha")?;
        let n = self.dim();
        let (dpsi, _) = psi.gradients();
        let (_, dbphi) = phi.gradients();
        Ok(pointwise(&self.lattice, |idx| {
            let gi = self.ginv_at(idx);
            let m = &gi * alpha.matrix_at(idx) * &gi;
            let mut s = C64::new(0.0, 0.0);
            for a in 0..n {
                for b in 0..n {
                    s += dbphi[a].values()[idx] * m[(a, b)] * dpsi[b].values()[idx];
                }
            }
            s
        }))
    }

    /// The tensor `𝓓φ = ∂̄(∇^{1,0}φ)`: entry `(j, l)` is `∂_{l̄}(g^{jk̄} ∂_{k̄}φ)`.
    pub fn d_operator(&self, phi: &ScalarField) -> Result<Form11> {
        PeriodicLattice::ensure_same(&self.lattice, phi.lattice(), "d_operator")?;
        let n = self.dim();
        let (_, dbp) = phi.gradients();
        let mut comps = Vec::with_capacity(n * n);
        for j in 0..n {
            let v = pointwise(&self.lattice, |idx| {
                (0..n).map(|k| self.ginv.at(k, j, idx) * dbp[k].values()[idx]).sum()
            });
            let (_, dbv) = v.gradients();
            comps.extend(dbv);
        }
        Form11::new(n, comps)
    }

    /// Hermitian pairing of two `𝓓`-tensors: `g_{jm̄} g^{pl̄} T^j_{l̄} conj(U^m_{p̄})`.
    pub fn d_pairing(&self, t: &Form11, u: &Form11) -> Result<ScalarField> {
        self.g.same_grid(t, "d_pairing")?;
        self.g.same_grid(u, "d_pairing")?;
        let n = self.dim();
        Ok(pointwise(&self.lattice, |idx| {
            let mut s = C64::new(0.0, 0.0);
            for j in 0..n {
                for m in 0..n {
                    let gjm = self.g.at(j, m, idx);
                    for l in 0..n {
                        for p in 0..n {
                            s += gjm * self.ginv.at(l, p, idx) * t.at(j, l, idx) * u.at(m, p, idx).conj();
                        }
                    }
                }
            }
            s
        }))
    }

    /// `𝓓*𝓓φ = Δ²φ + ⟨Ric, i∂∂̄φ⟩ + ½⟨∇S, ∇φ⟩`.
    pub fn lichnerowicz(&self, phi: &ScalarField) -> Result<ScalarField> {
        let h = ddbar(phi);
        let lap = self.trace(&h)?;
        let bilap = self.laplacian(&lap)?;
        let ric = self.inner11(self.ricci(), &h)?;
        let grad = self.grad_pair(self.scalar_curvature(), phi)?;
        Ok(&(&bilap + &ric) + &grad.scale_re(0.5))
    }

    /// `d/dt S(ω + t i∂∂̄φ) = −Δ²φ − ⟨Ric, i∂∂̄φ⟩`.
    pub fn scalar_derivative(&self, phi: &ScalarField) -> Result<ScalarField> {
        let h = ddbar(phi);
        let lap = self.trace(&h)?;
        let bilap = self.laplacian(&lap)?;
        let ric = self.inner11(self.ricci(), &h)?;
        Ok((&bilap + &ric).scale_re(-1.0))
    }

    /// `∫ f ωⁿ`, normalised so the flat unit metric gives the lattice volume.
    pub fn integrate(&self, f: &ScalarField) -> C64 {
        let prod: Vec<C64> = f.values().iter().zip(self.det.values()).map(|(a, d)| a * d.re).collect();
        ordered_sum(&prod) * self.lattice.cell_volume()
    }

    pub fn volume(&self) -> f64 {
        self.integrate(&ScalarField::constant(&self.lattice, C64::new(1.0, 0.0))).re
    }

    /// Volume-weighted mean `∫ f ωⁿ / ∫ ωⁿ`.
    pub fn mean(&self, f: &ScalarField) -> C64 {
        self.integrate(f) / self.volume()
    }

    /// Hermitian `L²(ωⁿ)` inner product `∫ f conj(g) ωⁿ`.
    pub fn l2_inner(&self, f: &ScalarField, g: &ScalarField) -> C64 {
        self.integrate(&f.zip_map(g, |a, b| a * b.conj()))
    }

    pub fn l2_norm(&self, f: &ScalarField) -> f64 {
        self.l2_inner(f, f).re.max(0.0).sqrt()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::exterior;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::PI;

    fn perturbed_surface(seed: u64, points: usize) -> KahlerStructure {
        let lat = PeriodicLattice::new(vec![C64::new(0.2, 1.1), C64::new(0.0, 1.0)], vec![points; 4]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let phi = ScalarField::random_smooth(&lat, 1, 0.08, &mut rng);
        KahlerStructure::new(&Form11::identity(&lat), &phi).unwrap()
    }

    fn rel(a: f64, b: f64) -> f64 {
        a / b.max(1e-300)
    }

    #[test]
    fn ddbar_of_single_mode_matches_hand_differentiation() {
        // φ = cos x on τ = i: ∂∂̄ = ¼(∂_x² + ∂_y²) gives −¼ cos x.
        let lat = PeriodicLattice::square(1, 16).unwrap();
        let phi = ScalarField::from_real_fn(&lat, |x| x[0].cos());
        let h = ddbar(&phi);
        for (i, v) in h.get(0, 0).values().iter().enumerate() {
            let x = lat.coords(i)[0];
            assert!((v - C64::new(-0.25 * x.cos(), 0.0)).norm() < 1e-14);
        }
        assert!(ddbar(&ScalarField::constant(&lat, C64::new(1.0, 0.0))).max_abs() < 1e-15);
    }

    #[test]
    fn analytic_scalar_curvature_extends_the_real_one() {
        let om = perturbed_surface(4, 8);
        let s = analytic_scalar_curvature(om.form(), C64::new(1.0, 0.0)).unwrap();
        assert!((&s - om.scalar_curvature()).max_abs() < 1e-13);
        // First Taylor coefficient along i∂∂̄ψ by a contour average.
        let lat = om.lattice().clone();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let psi = ScalarField::random_smooth(&lat, 1, 1.0, &mut rng).re();
        let dd = ddbar(&psi);
        let (rho, n) = (1e-2, 12);
        let mut acc = ScalarField::zeros(&lat);
        for k in 0..n {
            let h = C64::from_polar(rho, 2.0 * PI * (k as f64 + 0.5) / n as f64);
            let g = om.form().zip_components(&dd, |a, b| a + &b.scale(h));
            let sh = analytic_scalar_curvature(&g, C64::new(1.0, 0.0)).unwrap();
            acc = &acc + &sh.scale(1.0 / (h * n as f64));
        }
        let d = om.scalar_derivative(&psi).unwrap();
        assert!((&acc - &d).max_abs() < 1e-10 * d.max_abs());
    }

    #[test]
    fn metric_closed_form_for_single_mode() {
        let lat = PeriodicLattice::square(1, 16).unwrap();
        let eps = 0.3;
        let phi = ScalarField::from_real_fn(&lat, |x| eps * x[0].cos());
        let om = KahlerStructure::new(&Form11::identity(&lat), &phi).unwrap();
        for i in 0..lat.len() {
            let x = lat.coords(i)[0];
            let g = 1.0 - 0.25 * eps * x.cos();
            assert!((om.det().values()[i].re - g).abs() < 1e-14);
            assert!((om.inverse().at(0, 0, i).re - 1.0 / g).abs() < 1e-13);
        }
        let bad = ScalarField::from_real_fn(&lat, |x| 10.0 * x[0].cos());
        match KahlerStructure::new(&Form11::identity(&lat), &bad) {
            Err(GeomError::NonPositive { eigenvalue, .. }) => assert!(eigenvalue <= 0.0),
            other => panic!("expected NonPositive, got {other:?}"),
        }
    }

    #[test]
    fn trace_and_inner_of_the_metric() {
        let om = perturbed_surface(1, 8);
        let t = om.trace(om.form()).unwrap();
        let i = om.inner11(om.form(), om.form()).unwrap();
        for (a, b) in t.values().iter().zip(i.values()) {
            assert!((a - 2.0).norm() < 1e-12);
            assert!((b - 2.0).norm() < 1e-12);
        }
    }

    #[test]
    fn trace_agrees_with_wedge_quotient() {
        let om = perturbed_surface(2, 8);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let beta = ddbar(&ScalarField::random_smooth(om.lattice(), 1, 1.0, &mut rng));
        let t = om.trace(&beta).unwrap();
        for idx in (0..om.lattice().len()).step_by(37) {
            let b = beta.matrix_at(idx);
            let g = om.form().matrix_at(idx);
            // n β∧ω^{n−1}/ωⁿ
            let num = exterior::top_coefficient(&[&b, &g]);
            let den = exterior::top_coefficient(&[&g, &g]);
            let expect = 2.0 * num / den;
            assert!((t.values()[idx] - expect).norm() < 1e-12 * expect.norm().max(1.0));
        }
    }

    #[test]
    fn wedge_identity_on_surface() {
        let om = perturbed_surface(3, 8);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let b1 = ddbar(&ScalarField::random_smooth(om.lattice(), 1, 1.0, &mut rng));
        let b2 = ddbar(&ScalarField::random_smooth(om.lattice(), 1, 1.0, &mut rng));
        let l1 = om.trace(&b1).unwrap();
        let l2 = om.trace(&b2).unwrap();
        let ip = om.inner11(&b1, &b2).unwrap();
        for idx in 0..om.lattice().len() {
            let g = om.form().matrix_at(idx);
            let lhs = 2.0 * exterior::top_coefficient(&[&b1.matrix_at(idx), &b2.matrix_at(idx)]);
            let rhs = (l1.values()[idx] * l2.values()[idx] - ip.values()[idx]) * exterior::top_coefficient(&[&g, &g]);
            assert!(rel((lhs - rhs).norm(), lhs.norm() + rhs.norm() + 1e-3) < 1e-12);
        }
    }

    #[test]
    fn grad_pair_of_sine_on_square_torus() {
        let lat = PeriodicLattice::square(1, 16).unwrap();
        let om = KahlerStructure::flat(&lat);
        let f = ScalarField::from_real_fn(&lat, |x| x[0].sin());
        let gp = om.grad_pair(&f, &f).unwrap();
        for (i, v) in gp.values().iter().enumerate() {
            let x = lat.coords(i)[0];
            assert!((v - C64::new(0.5 * x.cos().powi(2), 0.0)).norm() < 1e-14);
        }
        let c = ScalarField::constant(&lat, C64::new(2.0, 0.0));
        assert!(om.grad_pair(&c, &f).unwrap().max_abs() < 1e-15);
    }

    #[test]
    fn grad_pair_is_twice_trace_of_wedge() {
        let om = perturbed_surface(5, 8);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let f = ScalarField::random_smooth(om.lattice(), 2, 1.0, &mut rng);
        let p = ScalarField::random_smooth(om.lattice(), 2, 1.0, &mut rng);
        let gp = om.grad_pair(&f, &p).unwrap();
        let tr = om.trace(&d_wedge_dbar(&f, &p)).unwrap().scale_re(2.0);
        assert!((&gp - &tr).max_abs() < 1e-12);
        let back = om.grad_pair(&p, &f).unwrap();
        assert!((&gp - &back.conj()).max_abs() < 1e-12);
    }

    #[test]
    fn flat_curvature_vanishes() {
        let lat = PeriodicLattice::new(vec![C64::new(0.4, 0.9)], vec![8, 8]).unwrap();
        let om = KahlerStructure::flat(&lat);
        assert!(om.ricci().max_abs() < 1e-15);
        assert!(om.scalar_curvature().max_abs() < 1e-15);
        let expect = (2.0 * PI).powi(2) * 0.9;
        assert!((om.volume() - expect).abs() < 1e-12 * expect);
    }

    #[test]
    fn total_scalar_curvature_vanishes() {
        let lat = PeriodicLattice::square(1, 32).unwrap();
        for eps in [0.5, 1.0, 2.0, 3.5] {
            let phi = ScalarField::from_real_fn(&lat, |x| eps * x[0].cos());
            let om = KahlerStructure::new(&Form11::identity(&lat), &phi).unwrap();
            let total = om.integrate(om.scalar_curvature());
            assert!(total.norm() < 1e-10, "eps {eps}: {total}");
        }
    }

    #[test]
    fn lichnerowicz_is_bilaplacian_on_flat_metric() {
        let lat = PeriodicLattice::square(2, 8).unwrap();
        let om = KahlerStructure::flat(&lat);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let phi = ScalarField::random_smooth(&lat, 1, 1.0, &mut rng);
        let l = om.lichnerowicz(&phi).unwrap();
        let b = om.laplacian(&om.laplacian(&phi).unwrap()).unwrap();
        assert!((&l - &b).max_abs() < 1e-13);
    }

    #[test]
    fn lichnerowicz_weak_form() {
        for (n, seed) in [(1usize, 11u64), (2, 12)] {
            let lat = if n == 1 {
                PeriodicLattice::new(vec![C64::new(0.3, 1.2)], vec![16, 16]).unwrap()
            } else {
                PeriodicLattice::new(vec![C64::new(0.2, 1.1), C64::new(0.0, 1.0)], vec![16; 4]).unwrap()
            };
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let pot = ScalarField::random_smooth(&lat, 1, 0.1, &mut rng);
            let om = KahlerStructure::new(&Form11::identity(&lat), &pot).unwrap();
            let phi = ScalarField::random_smooth(&lat, 1, 1.0, &mut rng);
            let psi = ScalarField::random_smooth(&lat, 1, 1.0, &mut rng);
            let strong = om.integrate(&(&psi * &om.lichnerowicz(&phi).unwrap()));
            let dp = om.d_operator(&phi).unwrap();
            let ds = om.d_operator(&psi).unwrap();
            let weak = om.integrate(&om.d_pairing(&dp, &ds).unwrap());
            let scale = om.integrate(&om.d_pairing(&dp, &dp).unwrap()).norm().sqrt()
                * om.integrate(&om.d_pairing(&ds, &ds).unwrap()).norm().sqrt();
            assert!((strong - weak).norm() < 1e-9 * scale, "n={n}: {strong} vs {weak}");
        }
    }

    #[test]
    fn scalar_derivative_matches_central_difference() {
        let om = perturbed_surface(3, 12);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let phi = ScalarField::random_smooth(om.lattice(), 1, 1.0, &mut rng);
        let exact = om.scalar_derivative(&phi).unwrap();
        let fd = |h: f64| {
            let up = om.perturbed(&phi.scale_re(h)).unwrap();
            let dn = om.perturbed(&phi.scale_re(-h)).unwrap();
            (up.scalar_curvature() - dn.scalar_curvature()).scale_re(0.5 / h)
        };
        let e1 = (&fd(1e-3) - &exact).max_abs();
        let e2 = (&fd(5e-4) - &exact).max_abs();
        assert!(e1 < 1e-5 * exact.max_abs());
        assert!((e1 / e2).log2() > 1.8, "{e1} {e2}");
    }

    #[test]
    fn operations_are_deterministic() {
        let a = perturbed_surface(7, 8);
        let b = perturbed_surface(7, 8);
        assert_eq!(a.scalar_curvature().values(), b.scalar_curvature().values());
        assert_eq!(a.volume().to_bits(), b.volume().to_bits());
    }
}
