//! Approximate extremal metrics `ω_{r,p}` on fibred spaces in the adiabatic
//! regime `ω_r = ω₀ + r ω_B`, `r → ∞`.
//!
//! Expansion coefficients are extracted numerically: the order `r^{-p}` part
//! of a residual is the Richardson limit of `r^p · residual(r)` in `h = 1/r`.

use std::sync::Arc;

use serde::Serialize;

use crate::error::{GeomError, Result};
use crate::fibration::FibredSpace;
use crate::field::{Form11, ScalarField};
use crate::geometry::{analytic_scalar_curvature, ddbar, KahlerStructure};
use crate::ift::lift_constant;
use crate::krylov::{gmres, GmresOptions};
use crate::lattice::{PeriodicLattice, C64};
use crate::twisted::{FlatBiharmonic, Twist, TwistedProblem};

/// Least-squares slope of `ln y` against `ln x`.
pub fn log_slope(xs: &[f64], ys: &[f64]) -> f64 {
    let n = xs.len() as f64;
    let lx: Vec<f64> = xs.iter().map(|x| x.ln()).collect();
    let ly: Vec<f64> = ys.iter().map(|y| y.ln()).collect();
    let mx = lx.iter().sum::<f64>() / n;
    let my = ly.iter().sum::<f64>() / n;
    let sxy: f64 = lx.iter().zip(&ly).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = lx.iter().map(|x| (x - mx).powi(2)).sum();
    sxy / sxx
}

/// Polynomial extrapolation of `vals[i] ≈ v(h[i])` to `h = 0` (Neville).
///
/// Returns the limit and the size of the last diagonal correction. Fails
/// when the corrections grow instead of shrinking.
pub fn richardson(h: &[f64], vals: &[ScalarField]) -> Result<(ScalarField, f64)> {
    let k = vals.len();
    if k == 0 || h.len() != k {
        return Err(GeomError::Precondition("richardson needs matching non-empty inputs".into()));
    }
    let mut table: Vec<Vec<ScalarField>> = vals.iter().map(|v| vec![v.clone()]).collect();
    for i in 1..k {
        for j in 1..=i {
            let a = &table[i][j - 1];
            let b = &table[i - 1][j - 1];
            let w = h[i] / (h[i - j] - h[i]);
            let next = a.zip_map(b, |x, y| x + (x - y) * w);
            table[i].push(next);
        }
    }
    let corrections: Vec<f64> = (1..k).map(|i| (&table[i][i] - &table[i - 1][i - 1]).max_abs()).collect();
    let limit = table[k - 1][k - 1].clone();
    let last = corrections.last().copied().unwrap_or(0.0);
    if corrections.len() >= 2 {
        let prev = corrections[corrections.len() - 2];
        if last > prev && last > 1e-5 * limit.max_abs() {
            return Err(GeomError::ExtrapolationDivergence(format!(
                "corrections {corrections:?} do not decay"
            )));
        }
    }
    Ok((limit, last))
}

/// `ω₀ + r π*ω_B` as a form.
pub fn omega_r_form(fs: &FibredSpace, r: f64) -> Form11 {
    let base = fs.pullback_form(fs.omega_b().form()).expect("base grid");
    fs.omega0().form().add(&base.scale(r)).expect("same grid")
}

/// `ω_r = ω₀ + r ω_B`, checked for positivity.
pub fn omega_r(fs: &FibredSpace, r: f64) -> Result<KahlerStructure> {
    KahlerStructure::from_form(&omega_r_form(fs, r))
}

#[derive(Debug, Clone, Serialize)]
pub struct ThetaReport {
    pub r_list: Vec<f64>,
    /// `max |∫_{X/B}θ ω₀^m / ∫_{X/B}ω₀^m − (S(ω_B) − Λ_{ω_B}α)|`.
    pub identity_error: f64,
    /// `max |S(ω_B) − Λ_{ω_B}α|`.
    pub identity_scale: f64,
    /// `sup |S(ω_r) − S(ω_b) − θ/r|` at each r.
    pub remainder_sup: Vec<f64>,
    pub remainder_slope: f64,
    pub extrapolation_correction: f64,
}

impl ThetaReport {
    pub fn relative_identity_error(&self) -> f64 {
        self.identity_error / self.identity_scale.max(f64::MIN_POSITIVE)
    }
}

/// `θ = lim r (S(ω_r) − S(ω_b))`, with the fibre-integral check.
pub fn theta_extraction(fs: &FibredSpace, r_list: &[f64]) -> Result<(ScalarField, ThetaReport)> {
    if r_list.len() < 3 || r_list.windows(2).any(|w| w[1] <= w[0]) {
        return Err(GeomError::Precondition("theta extraction needs at least 3 increasing r values".into()));
    }
    let wp = fs.wp_data();
    let s_b = fs.fibre_scalar_curvature(&wp.rho);
    let mut diffs = Vec::with_capacity(r_list.len());
    for &r in r_list {
        let om = omega_r(fs, r)?;
        diffs.push(&om.scalar_curvature().re() - &s_b);
    }
    let h: Vec<f64> = r_list.iter().map(|r| 1.0 / r).collect();
    let scaled: Vec<ScalarField> = diffs.iter().zip(r_list).map(|(d, r)| d.scale_re(*r)).collect();
    let (theta, corr) = richardson(&h, &scaled)?;
    let theta = theta.re();
    let lhs = fs.fibre_mean(&theta)?;
    let ob = fs.omega_b();
    let rhs = &ob.scalar_curvature().re() - &ob.trace(&wp.alpha)?.re();
    let remainder_sup: Vec<f64> = diffs
        .iter()
        .zip(r_list)
        .map(|(d, r)| (d - &theta.scale_re(1.0 / r)).max_abs())
        .collect();
    let report = ThetaReport {
        r_list: r_list.to_vec(),
        identity_error: (&lhs - &rhs).max_abs(),
        identity_scale: rhs.max_abs(),
        remainder_slope: log_slope(r_list, &remainder_sup),
        remainder_sup,
        extrapolation_correction: corr,
    };
    Ok((theta, report))
}

enum FibreBlock {
    /// Constant vertical metric: spectral symbol of `𝓛_b = −Δ_b²`.
    Flat(Vec<f64>),
    General(Box<KahlerStructure>),
}

/// The glued fibrewise linearisation `𝓛₀ψ = −Δ_b²ψ − ⟨Ric(ω_b), i∂∂̄_bψ⟩`.
pub struct FibreOperator {
    fibre: Arc<PeriodicLattice>,
    blocks: Vec<FibreBlock>,
}

fn fibre_slice(fs: &FibredSpace, f: &ScalarField, b: usize) -> ScalarField {
    let fl = fs.fibre().len();
    ScalarField::new(fs.fibre().clone(), f.values()[b * fl..(b + 1) * fl].to_vec()).expect("fibre length")
}

/// `Σ Ginv[k][j] ∂_j ∂_k̄` on the fibre lattice for a constant metric.
fn laplace_symbol(lat: &PeriodicLattice, ginv: &nalgebra::DMatrix<C64>) -> Vec<f64> {
    let m = lat.dim();
    (0..lat.len())
        .map(|idx| {
            let mut s = C64::new(0.0, 0.0);
            for j in 0..m {
                for k in 0..m {
                    s += ginv[(k, j)] * lat.dz_symbol(j)[idx] * lat.dzbar_symbol(k)[idx];
                }
            }
            s.re
        })
        .collect()
}

impl FibreOperator {
    pub fn new(fs: &FibredSpace) -> Result<Self> {
        Self::build(fs, false)
    }

    /// Uses the Krylov solve on every fibre, even flat ones.
    pub fn new_krylov(fs: &FibredSpace) -> Result<Self> {
        Self::build(fs, true)
    }

    fn build(fs: &FibredSpace, force_krylov: bool) -> Result<Self> {
        let n = fs.n();
        let m = fs.m();
        let fl = fs.fibre().len();
        let g = fs.omega0().form();
        let mut blocks = Vec::with_capacity(fs.base().len());
        for b in 0..fs.base().len() {
            let comps: Vec<ScalarField> = (0..m * m)
                .map(|c| {
                    let (j, k) = (c / m, c % m);
                    fibre_slice(fs, g.get(n + j, n + k), b)
                })
                .collect();
            let mean = nalgebra::DMatrix::from_fn(m, m, |j, k| comps[j * m + k].mean());
            let spread = comps
                .iter()
                .enumerate()
                .map(|(c, f)| f.map(|v| v - mean[(c / m, c % m)]).max_abs())
                .fold(0.0, f64::max);
            if !force_krylov && spread <= 1e-12 * mean.norm() {
                let ginv = mean.try_inverse().ok_or(GeomError::DegenerateVertical {
                    index: b * fl,
                    det: 0.0,
                })?;
                let sigma = laplace_symbol(fs.fibre(), &ginv);
                blocks.push(FibreBlock::Flat(sigma.iter().map(|s| -s * s).collect()));
            } else {
                let form = Form11::new(m, comps)?;
                blocks.push(FibreBlock::General(Box::new(KahlerStructure::from_form(&form)?)));
            }
        }
        Ok(Self {
            fibre: fs.fibre().clone(),
            blocks,
        })
    }

    /// True when every fibre restriction is flat.
    pub fn all_flat(&self) -> bool {
        self.blocks.iter().all(|b| matches!(b, FibreBlock::Flat(_)))
    }

    fn apply_fibre(&self, b: usize, psi: &ScalarField) -> Result<ScalarField> {
        match &self.blocks[b] {
            FibreBlock::Flat(sym) => Ok(psi.apply_symbol(|idx| C64::new(sym[idx], 0.0))),
            FibreBlock::General(om) => om.scalar_derivative(psi),
        }
    }

    fn solve_fibre(&self, b: usize, theta: &ScalarField, opts: GmresOptions) -> Result<ScalarField> {
        match &self.blocks[b] {
            FibreBlock::Flat(sym) => Ok(theta.apply_symbol(|idx| {
                if idx == 0 || self.fibre.is_ghost_mode(idx) || sym[idx] == 0.0 {
                    C64::new(0.0, 0.0)
                } else {
                    C64::new(1.0 / sym[idx], 0.0)
                }
            })),
            FibreBlock::General(om) => {
                let pre = FlatBiharmonic::new(om, 1.0, 1.0);
                let lat = self.fibre.clone();
                let apply = |v: &[C64]| -> Result<Vec<C64>> {
                    let u = ScalarField::new(lat.clone(), v.to_vec())?;
                    let l = om.scalar_derivative(&u)?;
                    let mean = om.mean(&u);
                    let g = u.ghost_part();
                    Ok(l.values().iter().zip(g.values()).map(|(a, gh)| a + mean + gh).collect())
                };
                let (u, _) = gmres(apply, |v| pre.apply(v), theta.values(), None, opts)?;
                let u = ScalarField::new(lat.clone(), u)?;
                let u = &u - &u.ghost_part();
                let mean = om.mean(&u);
                // On fibres that are not cscK the image of 𝓛_b is not the
                // mean-zero functions and a constant is left over.
                if mean.norm() > 1e-8 * theta.max_abs().max(1e-300) {
                    return Err(GeomError::Precondition(format!(
                        "Θ is not in the image of the fibre operator (constant defect {:e}); fibres must be cscK",
                        mean.norm()
                    )));
                }
                Ok(u.map(|v| v - mean))
            }
        }
    }

    fn per_fibre(&self, fs: &FibredSpace, f: &ScalarField, op: impl Fn(usize, &ScalarField) -> Result<ScalarField>) -> Result<ScalarField> {
        PeriodicLattice::ensure_same(fs.total(), f.lattice(), "fibrewise operator")?;
        let mut out = Vec::with_capacity(f.len());
        for b in 0..self.blocks.len() {
            out.extend_from_slice(op(b, &fibre_slice(fs, f, b))?.values());
        }
        ScalarField::new(fs.total().clone(), out)
    }

    pub fn apply(&self, fs: &FibredSpace, psi: &ScalarField) -> Result<ScalarField> {
        self.per_fibre(fs, psi, |b, p| self.apply_fibre(b, p))
    }

    /// Solves `𝓛₀ψ = Θ` fibre by fibre for fibre-mean-zero `Θ`. Requires
    /// cscK fibres, where `𝓛_b` is self-adjoint with kernel the constants.
    pub fn solve(&self, fs: &FibredSpace, theta: &ScalarField, opts: GmresOptions) -> Result<ScalarField> {
        let mean = fs.fibre_mean(theta)?;
        if mean.max_abs() > 1e-8 * theta.max_abs().max(1e-300) + 1e-14 {
            return Err(GeomError::Precondition(format!(
                "fibrewise right-hand side has fibre mean {:e}",
                mean.max_abs()
            )));
        }
        Ok(self.per_fibre(fs, theta, |b, t| self.solve_fibre(b, t, opts))?.tagged_mean_zero())
    }
}

/// Solves `𝓛₀ψ = Θ` on every fibre.
pub fn solve_fibrewise(theta: &ScalarField, fs: &FibredSpace) -> Result<ScalarField> {
    FibreOperator::new(fs)?.solve(fs, theta, GmresOptions::default())
}

/// Fibrewise potential `l` with `ω₀ + i∂∂̄l` flat on every fibre and `l`
/// of zero flat mean on each fibre. Torus fibres of dimension 1 only.
pub fn flattening_potential(fs: &FibredSpace) -> Result<ScalarField> {
    if fs.m() != 1 {
        return Err(GeomError::Precondition("fibre flattening is implemented for m = 1".into()));
    }
    let n = fs.n();
    let g = fs.omega0().form().get(n, n);
    let lat = fs.fibre();
    let sym = laplace_symbol(lat, &nalgebra::DMatrix::from_element(1, 1, C64::new(1.0, 0.0)));
    let mut out = Vec::with_capacity(g.len());
    for b in 0..fs.base().len() {
        let gb = fibre_slice(fs, g, b).re();
        let c = gb.mean();
        let rhs = gb.map(|v| c - v);
        let l = rhs.apply_symbol(|idx| {
            if idx == 0 || lat.is_ghost_mode(idx) || sym[idx] == 0.0 {
                C64::new(0.0, 0.0)
            } else {
                C64::new(1.0 / sym[idx], 0.0)
            }
        });
        out.extend_from_slice(l.re().values());
    }
    ScalarField::new(fs.total().clone(), out)
}

/// `D_{Ω_B} f = 𝓛_α f + ½⟨∇(S(ω_B) − Λα), ∇f⟩` on the base.
pub fn base_operator(fs: &FibredSpace, f: &ScalarField) -> Result<ScalarField> {
    let alpha = fs.alpha_form().clone();
    let prob = TwistedProblem::new(fs.omega_b().clone(), Twist::new(alpha.clone())?)?;
    let ob = fs.omega_b();
    let b1 = &ob.scalar_curvature().re() - &ob.trace(&alpha)?.re();
    Ok(&prob.l_alpha(f)? + &ob.grad_pair(&b1, f)?.scale_re(0.5))
}

/// Fibre mean of `lim r² dS_{ω_r}(π*f)`, the base response at second order.
pub fn base_response(fs: &FibredSpace, f: &ScalarField, r_list: &[f64]) -> Result<ScalarField> {
    let pf = fs.pullback(f)?;
    let mut vals = Vec::with_capacity(r_list.len());
    for &r in r_list {
        let om = omega_r(fs, r)?;
        vals.push(om.scalar_derivative(&pf)?.scale_re(r * r));
    }
    let h: Vec<f64> = r_list.iter().map(|r| 1.0 / r).collect();
    let (lim, _) = richardson(&h, &vals)?;
    fs.fibre_mean(&lim)
}

#[derive(Debug, Clone, Serialize)]
pub struct SubdominanceReport {
    pub r_list: Vec<f64>,
    /// `r · sup |⟨∇_{ω_r}η, ∇_{ω_r}ψ⟩|` for base `η` and total-space `ψ`.
    pub mixed_scaled: Vec<f64>,
    /// `sup |r⟨∇_{ω_r}η, ∇_{ω_r}ψ_B⟩ − ⟨∇_{ω_B}η, ∇_{ω_B}ψ_B⟩|`.
    pub base_remainder: Vec<f64>,
    pub base_remainder_slope: f64,
}

impl SubdominanceReport {
    /// Bounded: the scaled mixed pairings stay within a factor 2 and their
    /// increments shrink along the sweep.
    pub fn mixed_bounded(&self) -> bool {
        let m = &self.mixed_scaled;
        let first = (m[1] - m[0]).abs();
        let last = (m[m.len() - 1] - m[m.len() - 2]).abs();
        self.mixed_spread() <= 2.0 && last <= first
    }

    /// Ratio of the largest to the smallest scaled mixed pairing.
    pub fn mixed_spread(&self) -> f64 {
        let hi = self.mixed_scaled.iter().cloned().fold(0.0, f64::max);
        let lo = self.mixed_scaled.iter().cloned().fold(f64::INFINITY, f64::min);
        hi / lo
    }
}

pub fn subdominance(
    fs: &FibredSpace,
    eta: &ScalarField,
    psi: &ScalarField,
    psi_base: &ScalarField,
    r_list: &[f64],
) -> Result<SubdominanceReport> {
    let pe = fs.pullback(eta)?;
    let pb = fs.pullback(psi_base)?;
    let limit = fs.pullback(&fs.omega_b().grad_pair_real(eta, psi_base)?)?;
    let mut mixed = Vec::new();
    let mut rem = Vec::new();
    for &r in r_list {
        let om = omega_r(fs, r)?;
        mixed.push(r * om.grad_pair_real(&pe, psi)?.max_abs());
        rem.push((&om.grad_pair_real(&pe, &pb)?.scale_re(r) - &limit).max_abs());
    }
    Ok(SubdominanceReport {
        r_list: r_list.to_vec(),
        base_remainder_slope: log_slope(r_list, &rem),
        mixed_scaled: mixed,
        base_remainder: rem,
    })
}

#[derive(Debug, Clone)]
pub struct ExpansionOptions {
    /// `|r|` on the circle of complex `r` used to extract expansion
    /// coefficients.
    pub contour_r: f64,
    /// Number of nodes on that circle (even).
    pub contour_points: usize,
    pub gmres: GmresOptions,
    /// Start from the fibrewise flattening potential as `l₀`.
    pub flatten_fibres: bool,
    /// Relative tolerance for `b₁` to be a holomorphy potential.
    pub holomorphy_tol: f64,
    /// Number of base solves per order; extra sweeps remove the base part
    /// left by extraction error.
    pub base_sweeps: usize,
    pub max_order: usize,
}

impl Default for ExpansionOptions {
    fn default() -> Self {
        Self {
            contour_r: 16.0,
            contour_points: 16,
            gmres: GmresOptions::default(),
            flatten_fibres: true,
            holomorphy_tol: 1e-6,
            base_sweeps: 1,
            max_order: 3,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct StepReport {
    pub p: usize,
    /// `sup` of the extracted order-`r^{-p}` coefficient `w_p`.
    pub w_sup: f64,
    /// `sup` of its fibre-mean part `Ψ_p`.
    pub base_part_sup: f64,
    pub b_tilde: f64,
    pub f_sup: f64,
    /// Fibre-mean part left after the base solve.
    pub base_leftover_sup: f64,
    pub l_sup: f64,
    /// Size of the highest Fourier mode of the contour samples, a bound on
    /// the aliasing error of the extracted coefficient.
    pub contour_tail: f64,
}

/// Data of `ω_{r,p} = ω_r + i∂∂̄(φ_p + λ_p)` with
/// `φ_p = Σ f_i r^{1−i}`, `λ_p = Σ l_i r^{−i}`, `β_p = Σ b_i r^{−i}`.
///
/// `b` stores the base holomorphy potentials `b̃_i` (constants on flat
/// bases); for `i ≥ 1` they enter `β_p` through the lift,
/// `b_i = r^{-1} τ_r(b̃_i)`.
#[derive(Clone)]
pub struct ExpansionState {
    fs: FibredSpace,
    /// `fs` with `ω₀` replaced by `ω₀ + i∂∂̄l₀`.
    eff: FibredSpace,
    pub p: usize,
    pub f: Vec<ScalarField>,
    pub l: Vec<ScalarField>,
    pub b: Vec<f64>,
    pub log: Vec<StepReport>,
}

impl std::fmt::Debug for ExpansionState {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ExpansionState").field("p", &self.p).field("b", &self.b).finish()
    }
}

impl ExpansionState {
    /// Order `p = 0`: `l₀` is the flattening potential (or zero) and
    /// `b₀ = S(ω_b)`.
    pub fn initial(fs: &FibredSpace, opts: &ExpansionOptions) -> Result<Self> {
        let l0 = if opts.flatten_fibres {
            flattening_potential(fs)?
        } else {
            ScalarField::zeros(fs.total())
        };
        let eff = fs.with_omega0(KahlerStructure::new(fs.omega0().form(), &l0)?)?;
        let wp = eff.wp_data();
        if wp.s_fib_spread > 1e-8 {
            return Err(GeomError::Precondition(format!(
                "fibres are not cscK (scalar curvature spread {:e})",
                wp.s_fib_spread
            )));
        }
        let b0 = wp.s_fib;
        Ok(Self {
            fs: fs.clone(),
            eff,
            p: 0,
            f: Vec::new(),
            l: vec![l0.tagged_mean_zero()],
            b: vec![b0],
            log: Vec::new(),
        })
    }

    pub fn fibred_space(&self) -> &FibredSpace {
        &self.fs
    }

    /// The fibred space with `ω₀ + i∂∂̄l₀`.
    pub fn effective(&self) -> &FibredSpace {
        &self.eff
    }

    /// `φ_p(r) + λ_p(r)`.
    pub fn potential(&self, r: f64) -> Result<ScalarField> {
        let mut acc = ScalarField::zeros(self.fs.total());
        for (i, f) in self.f.iter().enumerate() {
            acc = acc.axpy(r.powi(1 - i as i32), &self.fs.pullback(f)?);
        }
        for (i, l) in self.l.iter().enumerate() {
            acc = acc.axpy(r.powi(-(i as i32)), l);
        }
        Ok(acc)
    }

    /// `φ_p(r)` alone.
    pub fn base_potential(&self, r: f64) -> Result<ScalarField> {
        let mut acc = ScalarField::zeros(self.fs.base());
        for (i, f) in self.f.iter().enumerate() {
            acc = acc.axpy(r.powi(1 - i as i32), f);
        }
        Ok(acc)
    }

    /// `β_p(r)`.
    pub fn beta(&self, r: f64) -> f64 {
        self.b
            .iter()
            .enumerate()
            .map(|(i, &b)| if i == 0 { b } else { lift_constant(b, r) / r * r.powi(-(i as i32)) })
            .sum()
    }

    /// `ω_{r,p}`.
    pub fn metric(&self, r: f64) -> Result<KahlerStructure> {
        KahlerStructure::new(&omega_r_form(&self.fs, r), &self.potential(r)?)
    }

    /// `S(ω_{r,p}) − ½⟨∇β_p, ∇(φ_p + λ_p)⟩ − β_p`. The gradient term
    /// vanishes because `β_p` is constant.
    pub fn residual_field(&self, r: f64) -> Result<ScalarField> {
        let om = self.metric(r)?;
        let beta = self.beta(r);
        Ok(om.scalar_curvature().re().map(|v| v - beta))
    }

    /// Sup-norm and volume-normalised `L²(ω_{r,p})` norm of the residual.
    pub fn residual(&self, r: f64) -> Result<(f64, f64)> {
        let om = self.metric(r)?;
        let beta = self.beta(r);
        let res = om.scalar_curvature().re().map(|v| v - beta);
        let l2 = om.l2_norm(&res) / om.volume().sqrt();
        Ok((res.max_abs(), l2))
    }

    /// Residuals over `r_list` and the fitted log–log slope of the sup-norm.
    pub fn residual_fit(&self, r_list: &[f64]) -> Result<(Vec<(f64, f64, f64)>, f64)> {
        let mut rows = Vec::with_capacity(r_list.len());
        for &r in r_list {
            let (sup, l2) = self.residual(r)?;
            rows.push((r, sup, l2));
        }
        let sups: Vec<f64> = rows.iter().map(|x| x.1).collect();
        Ok((rows, log_slope(r_list, &sups)))
    }

    /// The residual at complex `h = 1/r`, continued analytically in `h`.
    pub fn residual_analytic(&self, h: C64) -> Result<ScalarField> {
        let fs = &self.fs;
        let mut pot = ScalarField::zeros(fs.total());
        for (i, f) in self.f.iter().enumerate() {
            pot = &pot + &fs.pullback(f)?.scale(h.powi(i as i32 - 1));
        }
        for (i, l) in self.l.iter().enumerate() {
            pot = &pot + &l.scale(h.powi(i as i32));
        }
        let base = fs.pullback_form(fs.omega_b().form())?;
        let g = fs.omega0().form().zip_components(&base, |a, b| a + &b.scale(h.inv()));
        let g = g.add(&ddbar(&pot))?;
        let s = analytic_scalar_curvature(&g, h.powi(fs.n() as i32))?;
        let beta: C64 = self
            .b
            .iter()
            .enumerate()
            .map(|(i, &b)| if i == 0 { C64::new(b, 0.0) } else { (h + 1.0) * h.powi(i as i32) * b })
            .sum();
        Ok(s.map(|v| v - beta))
    }

    /// Coefficient of `r^{-p}` in the residual, by the trapezoidal rule for
    /// the Cauchy integral on `|h| = 1/contour_r`. Conjugate symmetry halves
    /// the number of evaluations.
    fn extract(&self, p: usize, opts: &ExpansionOptions) -> Result<(ScalarField, f64)> {
        let n = opts.contour_points;
        if n < 4 || n % 2 != 0 {
            return Err(GeomError::Precondition("contour_points must be even and at least 4".into()));
        }
        let rho = 1.0 / opts.contour_r;
        let mut w = ScalarField::zeros(self.fs.total());
        let mut tail = ScalarField::zeros(self.fs.total());
        for k in 0..n / 2 {
            let theta = std::f64::consts::PI * (2 * k + 1) as f64 / n as f64;
            let h = C64::from_polar(rho, theta);
            let sample = self.residual_analytic(h)?.scale(h.powi(-(p as i32)));
            w = &w + &sample;
            let sign = if k % 2 == 0 { 1.0 } else { -1.0 };
            tail = &tail + &sample.scale(C64::new(0.0, -sign));
        }
        let w = w.scale_re(2.0 / n as f64).re();
        let tail = tail.scale_re(2.0 / n as f64).re();
        Ok((w, tail.max_abs()))
    }

    /// From order `p − 1` to order `p`.
    pub fn inductive_step(&self, opts: &ExpansionOptions) -> Result<Self> {
        let p = self.p + 1;
        if p > opts.max_order {
            return Err(GeomError::Precondition(format!("order cap {} reached", opts.max_order)));
        }
        let (w, corr) = self.extract(p, opts)?;
        let (_, psi) = self.eff.split_function(&w)?;
        let psi = psi.re();
        let ob = self.eff.omega_b();
        let mut next = self.clone();
        next.p = p;

        let (f, b_tilde) = if p == 1 {
            let b1 = ob.mean(&psi).re;
            let spread = psi.map(|v| v - b1).max_abs();
            if spread > opts.holomorphy_tol * psi.max_abs().max(1.0) {
                return Err(GeomError::Precondition(format!(
                    "S(ω_B) − Λα is not a holomorphy potential (spread {spread:e}); the base metric is not twisted extremal"
                )));
            }
            (ScalarField::zeros(self.fs.base()), b1)
        } else {
            let prob = TwistedProblem::new(ob.clone(), Twist::new(self.eff.alpha_form().clone())?)?;
            let sol = prob.solve(&psi.scale_re(-1.0), opts.gmres)?;
            (sol.phi.re(), sol.h.re)
        };
        next.f.push(f);
        next.b.push(b_tilde);
        next.l.push(ScalarField::zeros(self.fs.total()));

        let mut w2 = next.extract(p, opts)?.0;
        if p > 1 {
            let prob = TwistedProblem::new(ob.clone(), Twist::new(self.eff.alpha_form().clone())?)?;
            for _ in 1..opts.base_sweeps {
                let (_, rest) = self.eff.split_function(&w2)?;
                let sol = prob.solve(&rest.re().scale_re(-1.0), opts.gmres)?;
                let k = next.f.len() - 1;
                next.f[k] = &next.f[k] + &sol.phi.re();
                next.b[k] += sol.h.re;
                w2 = next.extract(p, opts)?.0;
            }
        }
        let f = next.f.last().expect("pushed").clone();
        let b_tilde = *next.b.last().expect("pushed");
        let (phi0, leftover) = self.eff.split_function(&w2)?;
        let l0op = FibreOperator::new(&self.eff)?;
        let lp = l0op.solve(&self.eff, &phi0.re().scale_re(-1.0), opts.gmres)?.re();
        *next.l.last_mut().expect("pushed") = lp.clone().tagged_mean_zero();
        next.log.push(StepReport {
            p,
            w_sup: w.max_abs(),
            base_part_sup: psi.max_abs(),
            b_tilde,
            f_sup: f.max_abs(),
            base_leftover_sup: leftover.max_abs(),
            l_sup: lp.max_abs(),
            contour_tail: corr,
        });
        Ok(next)
    }

    /// Runs the induction up to order `p`.
    pub fn build(fs: &FibredSpace, p: usize, opts: &ExpansionOptions) -> Result<Self> {
        let mut st = Self::initial(fs, opts)?;
        while st.p < p {
            st = st.inductive_step(opts)?;
        }
        Ok(st)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fibration::TestbedSpec;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn testbed(points: usize, eps: f64) -> FibredSpace {
        FibredSpace::make_testbed(&TestbedSpec::standard(points, eps)).unwrap()
    }

    #[test]
    fn richardson_recovers_polynomial_limit() {
        let lat = PeriodicLattice::square(1, 8).unwrap();
        let base = ScalarField::from_real_fn(&lat, |x| x[0].sin());
        let h = [0.1, 0.05, 0.025, 0.0125];
        let vals: Vec<ScalarField> = h
            .iter()
            .map(|&t| base.map(|v| v * (1.0 + 3.0 * t - 2.0 * t * t + t * t * t)))
            .collect();
        let (lim, _) = richardson(&h, &vals).unwrap();
        assert!((&lim - &base).max_abs() < 1e-12);
    }

    #[test]
    fn log_slope_of_power_law() {
        let xs = [8.0, 16.0, 32.0, 64.0];
        let ys: Vec<f64> = xs.iter().map(|x: &f64| 3.0 * x.powf(-2.5)).collect();
        assert!((log_slope(&xs, &ys) + 2.5).abs() < 1e-12);
    }

    #[test]
    fn omega_r_positivity_and_volume_polynomial() {
        let fs = testbed(8, 0.1);
        assert!(omega_r(&fs, 1.0).is_ok());
        assert!(matches!(omega_r(&fs, -3.0), Err(GeomError::NonPositive { .. })));
        // vol(ω_r) = r·vol_B·vol_F + vol(ω₀) for n = m = 1.
        let rs = [4.0, 8.0, 16.0, 32.0];
        let vols: Vec<f64> = rs.iter().map(|&r| omega_r(&fs, r).unwrap().volume()).collect();
        let slope = (vols[3] - vols[0]) / (rs[3] - rs[0]);
        let expect = fs.base().flat_volume() * fs.fibre_volume().values()[0].re;
        assert!((slope - expect).abs() < 1e-10 * expect);
        let mid = (vols[2] - vols[1]) / (rs[2] - rs[1]);
        assert!((mid - slope).abs() < 1e-10 * expect);
    }

    #[test]
    fn fibre_operator_kills_pullbacks() {
        let fs = testbed(8, 0.1);
        let op = FibreOperator::new(&fs).unwrap();
        assert!(!op.all_flat());
        let g = ScalarField::from_real_fn(fs.base(), |x| x[0].cos() + x[1].sin());
        assert!(op.apply(&fs, &fs.pullback(&g).unwrap()).unwrap().max_abs() < 1e-12);
    }

    #[test]
    fn fibrewise_solve_round_trips_on_both_paths() {
        let fs = testbed(8, 0.1);
        let st = ExpansionState::initial(&fs, &ExpansionOptions::default()).unwrap();
        let eff = st.effective();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let raw = ScalarField::random_smooth(eff.total(), 1, 1.0, &mut rng);
        let (theta, _) = eff.split_function(&raw).unwrap();
        let theta = theta.re();
        let spectral = FibreOperator::new(eff).unwrap();
        let krylov = FibreOperator::new_krylov(eff).unwrap();
        assert!(spectral.all_flat() && !krylov.all_flat());
        let a = spectral.solve(eff, &theta, GmresOptions::default()).unwrap();
        let b = krylov.solve(eff, &theta, GmresOptions::default()).unwrap();
        assert!((&spectral.apply(eff, &a).unwrap() - &theta).max_abs() < 1e-10 * theta.max_abs());
        assert!((&a - &b).max_abs() < 1e-8 * a.max_abs());
        assert!(eff.fibre_mean(&a).unwrap().max_abs() < 1e-10);
        assert!(matches!(
            spectral.solve(eff, &raw.map(|v| v + 1.0), GmresOptions::default()),
            Err(GeomError::Precondition(_))
        ));
    }

    #[test]
    fn non_csck_fibres_are_rejected() {
        let fs = testbed(8, 0.1);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let raw = ScalarField::random_smooth(fs.total(), 1, 1.0, &mut rng);
        let (theta, _) = fs.split_function(&raw).unwrap();
        assert!(matches!(solve_fibrewise(&theta.re(), &fs), Err(GeomError::Precondition(_))));
    }

    #[test]
    fn flat_fibre_solve_inverts_eigenfunctions() {
        let fs = testbed(8, 0.0);
        let op = FibreOperator::new(&fs).unwrap();
        assert!(op.all_flat());
        assert!(solve_fibrewise(&ScalarField::zeros(fs.total()), &fs).unwrap().max_abs() == 0.0);
        // Δ_b = ∂_w∂_w̄ = ¼ Δ_flat on τ = i, so cos(x_f) has Δ_b² eigenvalue 1/16.
        let theta = ScalarField::from_real_fn(fs.total(), |x| x[2].cos() * (1.0 + x[0].sin()));
        let psi = solve_fibrewise(&theta, &fs).unwrap();
        assert!((&psi - &theta.scale_re(-16.0)).max_abs() < 1e-12);
    }

    #[test]
    fn flattening_makes_fibres_flat_and_removes_twist() {
        let fs = testbed(8, 0.1);
        let st = ExpansionState::initial(&fs, &ExpansionOptions::default()).unwrap();
        let eff = st.effective();
        assert!(FibreOperator::new(eff).unwrap().all_flat());
        assert!(eff.alpha_form().max_abs() < 1e-14);
        assert!(eff.fibre_mean(&st.l[0]).unwrap().max_abs() < 1e-12);
    }

    #[test]
    fn theta_identity_on_mixed_testbed() {
        let fs = testbed(8, 0.1);
        let (_, rep) = theta_extraction(&fs, &[32.0, 64.0, 128.0, 256.0, 512.0, 1024.0]).unwrap();
        assert!(rep.identity_scale > 1e-6);
        assert!(rep.relative_identity_error() < 1e-6, "{rep:?}");
        assert!((rep.remainder_slope + 2.0).abs() < 0.2, "{rep:?}");
    }

    #[test]
    fn base_response_is_the_twisted_linearisation() {
        let fs = testbed(8, 0.1);
        let f = ScalarField::from_real_fn(fs.base(), |x| (x[0] + 0.4).cos() + 0.5 * (2.0 * x[1]).sin());
        let resp = base_response(&fs, &f, &[32.0, 64.0, 128.0, 256.0]).unwrap();
        let d = base_operator(&fs, &f).unwrap();
        assert!((&resp - &d).max_abs() < 1e-6 * d.max_abs(), "{} vs {}", (&resp - &d).max_abs(), d.max_abs());
    }

    #[test]
    fn mixed_gradient_pairings_are_subdominant() {
        let fs = testbed(8, 0.1);
        let eta = ScalarField::from_real_fn(fs.base(), |x| x[0].sin() + 0.3 * x[1].cos());
        let psi_b = ScalarField::from_real_fn(fs.base(), |x| (x[0] + x[1]).cos());
        let psi = ScalarField::from_real_fn(fs.total(), |x| (x[0] + x[2]).sin() + x[3].cos() * x[1].sin());
        let rep = subdominance(&fs, &eta, &psi, &psi_b, &[8.0, 16.0, 32.0, 64.0]).unwrap();
        assert!(rep.mixed_bounded(), "{rep:?}");
        assert!((rep.base_remainder_slope + 1.0).abs() < 0.3, "{rep:?}");
    }

    #[test]
    fn product_testbed_expansion_is_trivial() {
        let fs = testbed(8, 0.0);
        let st = ExpansionState::build(&fs, 2, &ExpansionOptions::default()).unwrap();
        for r in [8.0, 64.0] {
            assert!(st.residual(r).unwrap().0 < 1e-10);
        }
        assert!(st.f.iter().all(|f| f.max_abs() < 1e-10));
        assert!(st.l.iter().all(|l| l.max_abs() < 1e-10));
    }

    #[test]
    fn unflattened_fibres_are_rejected() {
        let fs = testbed(8, 0.1);
        let opts = ExpansionOptions {
            flatten_fibres: false,
            ..Default::default()
        };
        assert!(matches!(ExpansionState::initial(&fs, &opts), Err(GeomError::Precondition(_))));
    }

    #[test]
    fn contour_and_richardson_extractions_agree() {
        let fs = testbed(8, 0.1);
        let opts = ExpansionOptions::default();
        let st = ExpansionState::build(&fs, 1, &opts).unwrap();
        let (w, tail) = st.extract(2, &opts).unwrap();
        let rs = [32.0, 64.0, 128.0, 256.0];
        let vals: Vec<ScalarField> = rs.iter().map(|&r| st.residual_field(r).unwrap().scale_re(r * r)).collect();
        let h: Vec<f64> = rs.iter().map(|r| 1.0 / r).collect();
        let (wr, _) = richardson(&h, &vals).unwrap();
        assert!(tail < 1e-8 * w.max_abs());
        assert!((&w - &wr.re()).max_abs() < 1e-5 * w.max_abs());
    }

    #[test]
    fn analytic_residual_matches_real_residual_on_the_axis() {
        let fs = testbed(8, 0.1);
        let st = ExpansionState::build(&fs, 1, &ExpansionOptions::default()).unwrap();
        let a = st.residual_analytic(C64::new(1.0 / 16.0, 0.0)).unwrap();
        let b = st.residual_field(16.0).unwrap();
        assert!((&a.re() - &b).max_abs() < 1e-14);
        assert!(a.max_imag() < 1e-14);
    }

    #[test]
    fn decay_orders_on_flattened_testbed() {
        let fs = testbed(8, 0.1);
        let opts = ExpansionOptions::default();
        let rs = [8.0, 16.0, 32.0, 64.0];
        let s0 = ExpansionState::build(&fs, 0, &opts).unwrap();
        let s1 = s0.inductive_step(&opts).unwrap();
        assert!(s1.b[1].abs() < 1e-9);
        let (_, slope0) = s0.residual_fit(&rs).unwrap();
        let (_, slope1) = s1.residual_fit(&rs).unwrap();
        assert!((slope0 + 2.0).abs() < 0.3 && (slope1 + 2.0).abs() < 0.3);
        // The base solve at order two removes the whole base potential, after
        // which the metric is a product up to round-off.
        let s2 = s1.inductive_step(&opts).unwrap();
        assert!(s2.residual(8.0).unwrap().0 < 1e-6 * s1.residual(8.0).unwrap().0);
        for l in &s2.l {
            assert!(s2.effective().fibre_mean(l).unwrap().max_abs() < 1e-10);
        }
    }
}
