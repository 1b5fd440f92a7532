//! Sampled scalar fields and Hermitian (1,1)-forms.

use std::ops::{Add, Mul, Sub};
use std::sync::Arc;

use nalgebra::DMatrix;
use rand::Rng;

use crate::error::{GeomError, Result};
use crate::lattice::{PeriodicLattice, C64};

const ZERO: C64 = C64::new(0.0, 0.0);

#[derive(Debug, Clone)]
pub struct ScalarField {
    lattice: Arc<PeriodicLattice>,
    values: Vec<C64>,
    /// Set for fields constructed as members of `C∞₀` (zero fibre or
    /// volume mean). Purely informational; see [`ScalarField::check_mean_zero`].
    mean_zero: bool,
}

impl ScalarField {
    pub fn new(lattice: Arc<PeriodicLattice>, values: Vec<C64>) -> Result<Self> {
        if values.len() != lattice.len() {
            return Err(GeomError::GridMismatch(format!(
                "{} samples for a grid of {}",
                values.len(),
                lattice.len()
            )));
        }
        Ok(Self {
            lattice,
            values,
            mean_zero: false,
        })
    }

    pub fn zeros(lattice: &Arc<PeriodicLattice>) -> Self {
        Self::constant(lattice, ZERO)
    }

    pub fn constant(lattice: &Arc<PeriodicLattice>, c: C64) -> Self {
        Self {
            lattice: lattice.clone(),
            values: vec![c; lattice.len()],
            mean_zero: false,
        }
    }

    /// Samples `f` at the real lattice coordinates `(x_1, y_1, …)`.
    pub fn from_fn(lattice: &Arc<PeriodicLattice>, f: impl Fn(&[f64]) -> C64) -> Self {
        let values = (0..lattice.len()).map(|i| f(&lattice.coords(i))).collect();
        Self {
            lattice: lattice.clone(),
            values,
            mean_zero: false,
        }
    }

    pub fn from_real_fn(lattice: &Arc<PeriodicLattice>, f: impl Fn(&[f64]) -> f64) -> Self {
        Self::from_fn(lattice, |x| C64::new(f(x), 0.0))
    }

    /// A smooth real field: random Fourier modes with `|k|_∞ ≤ max_mode`,
    /// amplitude decaying like `exp(-|k|²/2)`, without a constant term.
    pub fn random_smooth<R: Rng>(
        lattice: &Arc<PeriodicLattice>,
        max_mode: i64,
        amplitude: f64,
        rng: &mut R,
    ) -> Self {
        let dims = lattice.grid().len();
        let mut modes = Vec::new();
        let mut k = vec![-max_mode; dims];
        loop {
            if k.iter().any(|&v| v != 0) {
                let k2: i64 = k.iter().map(|v| v * v).sum();
                let w = (-(k2 as f64) / 2.0).exp();
                let a: f64 = rng.gen_range(-1.0..1.0) * w;
                let b: f64 = rng.gen_range(-1.0..1.0) * w;
                modes.push((k.clone(), a, b));
            }
            let mut d = 0;
            loop {
                if d == dims {
                    return Self::from_real_fn(lattice, |x| {
                        amplitude
                            * modes
                                .iter()
                                .map(|(k, a, b)| {
                                    let ph: f64 = k.iter().zip(x).map(|(&ki, &xi)| ki as f64 * xi).sum();
                                    a * ph.cos() + b * ph.sin()
                                })
                                .sum::<f64>()
                    });
                }
                k[d] += 1;
                if k[d] > max_mode {
                    k[d] = -max_mode;
                    d += 1;
                } else {
                    break;
                }
            }
        }
    }

    pub fn lattice(&self) -> &Arc<PeriodicLattice> {
        &self.lattice
    }

    pub fn values(&self) -> &[C64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [C64] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<C64> {
        self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn is_mean_zero_tagged(&self) -> bool {
        self.mean_zero
    }

    pub fn tagged_mean_zero(mut self) -> Self {
        self.mean_zero = true;
        self
    }

    /// Verifies the `C∞₀` tag against a supplied mean functional.
    pub fn check_mean_zero(&self, mean: impl Fn(&Self) -> f64, tol: f64) -> bool {
        !self.mean_zero || mean(self).abs() < tol
    }

    pub fn same_grid(&self, other: &Self, what: &str) -> Result<()> {
        PeriodicLattice::ensure_same(&self.lattice, &other.lattice, what)
    }

    pub fn map(&self, f: impl Fn(C64) -> C64) -> Self {
        Self {
            lattice: self.lattice.clone(),
            values: self.values.iter().map(|&v| f(v)).collect(),
            mean_zero: false,
        }
    }

    pub fn zip_map(&self, other: &Self, f: impl Fn(C64, C64) -> C64) -> Self {
        debug_assert_eq!(self.values.len(), other.values.len());
        Self {
            lattice: self.lattice.clone(),
            values: self
                .values
                .iter()
                .zip(&other.values)
                .map(|(&a, &b)| f(a, b))
                .collect(),
            mean_zero: false,
        }
    }

    pub fn scale(&self, s: C64) -> Self {
        self.map(|v| v * s)
    }

    pub fn scale_re(&self, s: f64) -> Self {
        self.map(|v| v * s)
    }

    pub fn axpy(&self, a: f64, other: &Self) -> Self {
        self.zip_map(other, |x, y| x + y * a)
    }

    pub fn conj(&self) -> Self {
        self.map(|v| v.conj())
    }

    pub fn re(&self) -> Self {
        self.map(|v| C64::new(v.re, 0.0))
    }

    /// Flat (unweighted) grid mean.
    pub fn mean(&self) -> C64 {
        ordered_sum(&self.values) / self.values.len() as f64
    }

    pub fn max_abs(&self) -> f64 {
        self.values.iter().fold(0.0, |m, v| m.max(v.norm()))
    }

    pub fn max_imag(&self) -> f64 {
        self.values.iter().fold(0.0, |m, v| m.max(v.im.abs()))
    }

    /// Root-mean-square over the grid.
    pub fn rms(&self) -> f64 {
        let s: f64 = self.values.iter().map(|v| v.norm_sqr()).sum();
        (s / self.values.len() as f64).sqrt()
    }

    /// Unnormalised forward transform of the samples.
    pub fn spectrum(&self) -> Vec<C64> {
        let mut hat = self.values.clone();
        self.lattice.forward(&mut hat);
        hat
    }

    pub fn from_spectrum(lattice: &Arc<PeriodicLattice>, mut hat: Vec<C64>) -> Self {
        lattice.inverse(&mut hat);
        Self {
            lattice: lattice.clone(),
            values: hat,
            mean_zero: false,
        }
    }

    /// Applies a Fourier multiplier `symbol(idx)`.
    pub fn apply_symbol(&self, symbol: impl Fn(usize) -> C64) -> Self {
        let mut hat = self.spectrum();
        for (i, h) in hat.iter_mut().enumerate() {
            *h *= symbol(i);
        }
        Self::from_spectrum(&self.lattice, hat)
    }

    /// `∂f/∂z_j`.
    pub fn dz(&self, j: usize) -> Self {
        let s = self.lattice.dz_symbol(j).to_vec();
        self.apply_symbol(|i| s[i])
    }

    /// `∂f/∂z̄_j`.
    pub fn dzbar(&self, j: usize) -> Self {
        let s = self.lattice.dzbar_symbol(j).to_vec();
        self.apply_symbol(|i| s[i])
    }

    /// All first derivatives `(∂_j f, ∂_{j̄} f)` from a single transform.
    pub fn gradients(&self) -> (Vec<Self>, Vec<Self>) {
        let hat = self.spectrum();
        let n = self.lattice.dim();
        let mut d = Vec::with_capacity(n);
        let mut db = Vec::with_capacity(n);
        for j in 0..n {
            let s = self.lattice.dz_symbol(j);
            d.push(Self::from_spectrum(
                &self.lattice,
                hat.iter().zip(s).map(|(h, s)| h * s).collect(),
            ));
            let s = self.lattice.dzbar_symbol(j);
            db.push(Self::from_spectrum(
                &self.lattice,
                hat.iter().zip(s).map(|(h, s)| h * s).collect(),
            ));
        }
        (d, db)
    }

    /// The component carried by ghost modes (see
    /// [`PeriodicLattice::is_ghost_mode`]).
    pub fn ghost_part(&self) -> Self {
        let lat = self.lattice.clone();
        let mut hat = self.spectrum();
        for (i, h) in hat.iter_mut().enumerate() {
            if !lat.is_ghost_mode(i) {
                *h = ZERO;
            }
        }
        Self::from_spectrum(&lat, hat)
    }

    /// Product computed on a 3/2-padded grid and truncated back, removing
    /// the aliasing of quadratic interactions.
    pub fn mul_dealiased(&self, other: &Self) -> Result<Self> {
        self.same_grid(other, "mul_dealiased")?;
        let lat = &self.lattice;
        let padded_grid: Vec<usize> = lat.grid().iter().map(|&n| (3 * n / 2 + 1) & !1).collect();
        let padded = PeriodicLattice::new(lat.periods().to_vec(), padded_grid)?;
        let a = pad_spectrum(lat, &padded, &self.spectrum());
        let b = pad_spectrum(lat, &padded, &other.spectrum());
        let fa = Self::from_spectrum(&padded, a);
        let fb = Self::from_spectrum(&padded, b);
        let prod = fa.zip_map(&fb, |x, y| x * y);
        let hat = truncate_spectrum(&padded, lat, &prod.spectrum());
        Ok(Self::from_spectrum(lat, hat))
    }

    /// Fraction of spectral energy in the outer third of wavenumbers; a
    /// cheap smoothness diagnostic.
    pub fn tail_energy_fraction(&self) -> f64 {
        let hat = self.spectrum();
        let grid = self.lattice.grid().to_vec();
        let mut total = 0.0;
        let mut tail = 0.0;
        for (i, h) in hat.iter().enumerate() {
            let k = self.lattice.wavevector(i);
            let e = h.norm_sqr();
            total += e;
            if k.iter().zip(&grid).any(|(&kk, &n)| 3 * kk.unsigned_abs() as usize > n) {
                tail += e;
            }
        }
        if total == 0.0 {
            0.0
        } else {
            tail / total
        }
    }
}

fn pad_spectrum(from: &PeriodicLattice, to: &PeriodicLattice, hat: &[C64]) -> Vec<C64> {
    let mut out = vec![ZERO; to.len()];
    let scale = to.len() as f64 / from.len() as f64;
    for (i, h) in hat.iter().enumerate() {
        if from.is_nyquist(i) {
            continue;
        }
        out[remap_index(from, to, i)] = h * scale;
    }
    out
}

fn truncate_spectrum(from: &PeriodicLattice, to: &PeriodicLattice, hat: &[C64]) -> Vec<C64> {
    let scale = to.len() as f64 / from.len() as f64;
    let mut out = vec![ZERO; to.len()];
    for (i, o) in out.iter_mut().enumerate() {
        if to.is_nyquist(i) {
            continue;
        }
        *o = hat[remap_index(to, from, i)] * scale;
    }
    out
}

fn remap_index(from: &PeriodicLattice, to: &PeriodicLattice, i: usize) -> usize {
    let k = from.wavevector(i);
    let mut idx = 0usize;
    for (d, &kd) in k.iter().enumerate() {
        let n = to.grid()[d] as i64;
        idx = idx * to.grid()[d] + kd.rem_euclid(n) as usize;
    }
    idx
}

/// Fixed-order compensated (Neumaier) summation.
pub fn ordered_sum(values: &[C64]) -> C64 {
    let mut sum = ZERO;
    let mut comp = ZERO;
    for &v in values {
        let t = sum + v;
        comp.re += if sum.re.abs() >= v.re.abs() {
            (sum.re - t.re) + v.re
        } else {
            (v.re - t.re) + sum.re
        };
        comp.im += if sum.im.abs() >= v.im.abs() {
            (sum.im - t.im) + v.im
        } else {
            (v.im - t.im) + sum.im
        };
        sum = t;
    }
    sum + comp
}

impl Add for &ScalarField {
    type Output = ScalarField;
    fn add(self, rhs: Self) -> ScalarField {
        self.zip_map(rhs, |a, b| a + b)
    }
}

impl Sub for &ScalarField {
    type Output = ScalarField;
    fn sub(self, rhs: Self) -> ScalarField {
        self.zip_map(rhs, |a, b| a - b)
    }
}

impl Mul for &ScalarField {
    type Output = ScalarField;
    fn mul(self, rhs: Self) -> ScalarField {
        self.zip_map(rhs, |a, b| a * b)
    }
}

/// A (1,1)-form `i β_{jk̄} dz_j ∧ dz̄_k`, stored as an `n × n` array of
/// component fields (row `j`, column `k`).
#[derive(Debug, Clone)]
pub struct Form11 {
    n: usize,
    comps: Vec<ScalarField>,
}

impl Form11 {
    pub fn new(n: usize, comps: Vec<ScalarField>) -> Result<Self> {
        if comps.len() != n * n || n == 0 {
            return Err(GeomError::GridMismatch(format!(
                "{} components for a {n}×{n} form",
                comps.len()
            )));
        }
        for c in &comps[1..] {
            comps[0].same_grid(c, "Form11 components")?;
        }
        Ok(Self { n, comps })
    }

    pub fn zeros(lattice: &Arc<PeriodicLattice>) -> Self {
        let n = lattice.dim();
        Self {
            n,
            comps: (0..n * n).map(|_| ScalarField::zeros(lattice)).collect(),
        }
    }

    /// A constant-coefficient form from an `n × n` Hermitian matrix.
    pub fn constant(lattice: &Arc<PeriodicLattice>, m: &DMatrix<C64>) -> Result<Self> {
        let n = lattice.dim();
        if m.nrows() != n || m.ncols() != n {
            return Err(GeomError::GridMismatch(format!(
                "{}×{} matrix for complex dimension {n}",
                m.nrows(),
                m.ncols()
            )));
        }
        let mut comps = Vec::with_capacity(n * n);
        for j in 0..n {
            for k in 0..n {
                comps.push(ScalarField::constant(lattice, m[(j, k)]));
            }
        }
        Ok(Self { n, comps })
    }

    /// The flat form with unit diagonal.
    pub fn identity(lattice: &Arc<PeriodicLattice>) -> Self {
        let n = lattice.dim();
        Self::constant(lattice, &DMatrix::identity(n, n)).expect("dimension matches")
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    pub fn lattice(&self) -> &Arc<PeriodicLattice> {
        self.comps[0].lattice()
    }

    pub fn get(&self, j: usize, k: usize) -> &ScalarField {
        &self.comps[j * self.n + k]
    }

    pub fn get_mut(&mut self, j: usize, k: usize) -> &mut ScalarField {
        &mut self.comps[j * self.n + k]
    }

    pub fn components(&self) -> &[ScalarField] {
        &self.comps
    }

    #[inline]
    pub fn at(&self, j: usize, k: usize, idx: usize) -> C64 {
        self.comps[j * self.n + k].values()[idx]
    }

    /// Pointwise matrix at grid index `idx`.
    pub fn matrix_at(&self, idx: usize) -> DMatrix<C64> {
        DMatrix::from_fn(self.n, self.n, |j, k| self.at(j, k, idx))
    }

    pub fn same_grid(&self, other: &Self, what: &str) -> Result<()> {
        if self.n != other.n {
            return Err(GeomError::GridMismatch(format!(
                "{what}: form dimensions {} vs {}",
                self.n, other.n
            )));
        }
        self.comps[0].same_grid(&other.comps[0], what)
    }

    pub fn map_components(&self, f: impl Fn(&ScalarField) -> ScalarField) -> Self {
        Self {
            n: self.n,
            comps: self.comps.iter().map(f).collect(),
        }
    }

    pub fn zip_components(&self, other: &Self, f: impl Fn(&ScalarField, &ScalarField) -> ScalarField) -> Self {
        Self {
            n: self.n,
            comps: self.comps.iter().zip(&other.comps).map(|(a, b)| f(a, b)).collect(),
        }
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.same_grid(other, "Form11::add")?;
        Ok(self.zip_components(other, |a, b| a + b))
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.same_grid(other, "Form11::sub")?;
        Ok(self.zip_components(other, |a, b| a - b))
    }

    pub fn scale(&self, s: f64) -> Self {
        self.map_components(|c| c.scale_re(s))
    }

    /// Multiplies every component by a scalar field.
    pub fn mul_field(&self, f: &ScalarField) -> Self {
        self.map_components(|c| c * f)
    }

    /// `max |β_{jk̄} − conj(β_{kj̄})|`.
    pub fn hermitian_defect(&self) -> f64 {
        let mut m: f64 = 0.0;
        for j in 0..self.n {
            for k in 0..self.n {
                let a = self.get(j, k).values();
                let b = self.get(k, j).values();
                for (x, y) in a.iter().zip(b) {
                    m = m.max((x - y.conj()).norm());
                }
            }
        }
        m
    }

    /// `max |∂_l β_{jk̄} − ∂_j β_{lk̄}|` together with the conjugate
    /// condition on the barred index; zero for `d`-closed forms.
    pub fn closedness_defect(&self) -> f64 {
        let n = self.n;
        let mut m: f64 = 0.0;
        for j in 0..n {
            for l in 0..n {
                if l == j {
                    continue;
                }
                for k in 0..n {
                    let a = self.get(j, k).dz(l);
                    let b = self.get(l, k).dz(j);
                    m = m.max((&a - &b).max_abs());
                    let a = self.get(k, j).dzbar(l);
                    let b = self.get(k, l).dzbar(j);
                    m = m.max((&a - &b).max_abs());
                }
            }
        }
        m
    }

    pub fn max_abs(&self) -> f64 {
        self.comps.iter().fold(0.0, |m, c| m.max(c.max_abs()))
    }

    /// Smallest eigenvalue of the Hermitian part over all grid points,
    /// together with the index attaining it.
    pub fn min_eigenvalue(&self) -> (f64, usize) {
        let mut best = (f64::INFINITY, 0);
        for idx in 0..self.lattice().len() {
            let m = self.matrix_at(idx);
            let h = (&m + m.adjoint()) * C64::new(0.5, 0.0);
            let ev = h.symmetric_eigenvalues();
            let lo = ev.iter().cloned().fold(f64::INFINITY, f64::min);
            if lo < best.0 {
                best = (lo, idx);
            }
        }
        best
    }
}
