//! Flat complex tori `ℂⁿ / Λ` sampled on uniform periodic grids.
//!
//! Each complex factor is `ℂ/(2πℤ + 2πτ_jℤ)` with lattice coordinates
//! `(x_j, y_j) ∈ [0, 2π)²` and holomorphic coordinate `z_j = x_j + τ_j y_j`.
//! Real axes are ordered `(x_1, y_1, x_2, y_2, …)` and samples are stored
//! row-major, so the last complex factor varies fastest.

use std::f64::consts::PI;
use std::fmt;
use std::sync::Arc;

use num_complex::Complex64;
use rustfft::{Fft, FftPlanner};

use crate::error::{GeomError, Result};

pub type C64 = Complex64;

pub struct PeriodicLattice {
    periods: Vec<C64>,
    grid: Vec<usize>,
    strides: Vec<usize>,
    len: usize,
    plans: Vec<(Arc<dyn Fft<f64>>, Arc<dyn Fft<f64>>)>,
    /// Symbols of `∂/∂z_j` and `∂/∂z̄_j` on the transform grid.
    dz_symbols: Vec<Vec<C64>>,
    dzbar_symbols: Vec<Vec<C64>>,
}

impl fmt::Debug for PeriodicLattice {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("PeriodicLattice")
            .field("periods", &self.periods)
            .field("grid", &self.grid)
            .finish()
    }
}

impl PartialEq for PeriodicLattice {
    fn eq(&self, other: &Self) -> bool {
        self.periods == other.periods && self.grid == other.grid
    }
}

/// Integer wavenumbers for an axis of length `n`, with the Nyquist mode
/// mapped to zero so odd-order derivatives of real fields stay real.
fn wavenumbers(n: usize) -> Vec<f64> {
    (0..n)
        .map(|i| {
            if 2 * i < n {
                i as f64
            } else if 2 * i == n {
                0.0
            } else {
                i as f64 - n as f64
            }
        })
        .collect()
}

impl PeriodicLattice {
    pub fn new(periods: Vec<C64>, grid: Vec<usize>) -> Result<Arc<Self>> {
        let n = periods.len();
        if n == 0 {
            return Err(GeomError::InvalidLattice("complex dimension must be ≥ 1".into()));
        }
        if grid.len() != 2 * n {
            return Err(GeomError::InvalidLattice(format!(
                "expected {} grid sizes for complex dimension {n}, got {}",
                2 * n,
                grid.len()
            )));
        }
        for (j, tau) in periods.iter().enumerate() {
            if !(tau.im > 0.0) || !tau.re.is_finite() {
                return Err(GeomError::InvalidLattice(format!(
                    "period tau_{j} = {tau} must have positive imaginary part"
                )));
            }
        }
        for (d, &nd) in grid.iter().enumerate() {
            if nd < 8 || nd % 2 != 0 {
                return Err(GeomError::InvalidLattice(format!(
                    "grid size along axis {d} is {nd}; sizes must be even and ≥ 8"
                )));
            }
        }
        let mut strides = vec![1usize; grid.len()];
        for d in (0..grid.len().saturating_sub(1)).rev() {
            strides[d] = strides[d + 1] * grid[d + 1];
        }
        let len = grid.iter().product();

        let mut planner = FftPlanner::<f64>::new();
        let plans = grid
            .iter()
            .map(|&nd| (planner.plan_fft_forward(nd), planner.plan_fft_inverse(nd)))
            .collect();

        let waves: Vec<Vec<f64>> = grid.iter().map(|&nd| wavenumbers(nd)).collect();
        let i = C64::new(0.0, 1.0);
        let mut dz_symbols = vec![vec![C64::new(0.0, 0.0); len]; n];
        let mut dzbar_symbols = vec![vec![C64::new(0.0, 0.0); len]; n];
        for idx in 0..len {
            for j in 0..n {
                let ix = (idx / strides[2 * j]) % grid[2 * j];
                let iy = (idx / strides[2 * j + 1]) % grid[2 * j + 1];
                let kx = waves[2 * j][ix];
                let ky = waves[2 * j + 1][iy];
                let tau = periods[j];
                let denom = tau.conj() - tau;
                // ∂_x = ∂_z + ∂_z̄,  ∂_y = τ∂_z + τ̄∂_z̄
                dz_symbols[j][idx] = i * (tau.conj() * kx - ky) / denom;
                dzbar_symbols[j][idx] = i * (ky - tau * kx) / denom;
            }
        }

        Ok(Arc::new(Self {
            periods,
            grid,
            strides,
            len,
            plans,
            dz_symbols,
            dzbar_symbols,
        }))
    }

    /// Square tori `τ_j = i` with `points` samples on every real axis.
    pub fn square(n: usize, points: usize) -> Result<Arc<Self>> {
        Self::new(vec![C64::new(0.0, 1.0); n], vec![points; 2 * n])
    }

    /// The product lattice `self × other` (factors of `self` first).
    pub fn product(&self, other: &Self) -> Result<Arc<Self>> {
        let mut periods = self.periods.clone();
        periods.extend_from_slice(&other.periods);
        let mut grid = self.grid.clone();
        grid.extend_from_slice(&other.grid);
        Self::new(periods, grid)
    }

    pub fn dim(&self) -> usize {
        self.periods.len()
    }

    pub fn periods(&self) -> &[C64] {
        &self.periods
    }

    pub fn grid(&self) -> &[usize] {
        &self.grid
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    /// Flat Lebesgue measure of one grid cell in the `z`-coordinates.
    pub fn cell_volume(&self) -> f64 {
        self.periods
            .iter()
            .enumerate()
            .map(|(j, tau)| {
                (2.0 * PI) * (2.0 * PI) * tau.im / (self.grid[2 * j] * self.grid[2 * j + 1]) as f64
            })
            .product()
    }

    /// Volume of the torus for the flat metric with unit determinant.
    pub fn flat_volume(&self) -> f64 {
        self.cell_volume() * self.len as f64
    }

    /// Real lattice coordinates `(x_1, y_1, …)` of a flat sample index.
    pub fn coords(&self, idx: usize) -> Vec<f64> {
        self.grid
            .iter()
            .zip(&self.strides)
            .map(|(&nd, &st)| 2.0 * PI * ((idx / st) % nd) as f64 / nd as f64)
            .collect()
    }

    pub fn dz_symbol(&self, j: usize) -> &[C64] {
        &self.dz_symbols[j]
    }

    pub fn dzbar_symbol(&self, j: usize) -> &[C64] {
        &self.dzbar_symbols[j]
    }

    /// Signed integer wavenumbers `(k_x1, k_y1, …)` of a transform index.
    pub fn wavevector(&self, idx: usize) -> Vec<i64> {
        self.grid
            .iter()
            .zip(&self.strides)
            .map(|(&nd, &st)| {
                let i = (idx / st) % nd;
                if 2 * i <= nd {
                    i as i64
                } else {
                    i as i64 - nd as i64
                }
            })
            .collect()
    }

    /// Whether a transform index carries a Nyquist wavenumber on some axis.
    pub fn is_nyquist(&self, idx: usize) -> bool {
        self.grid
            .iter()
            .zip(&self.strides)
            .any(|(&nd, &st)| 2 * ((idx / st) % nd) == nd)
    }

    /// Non-constant modes on which every derivative symbol vanishes: each
    /// axis carries wavenumber zero or Nyquist. They behave as constants for
    /// all differential operators.
    pub fn is_ghost_mode(&self, idx: usize) -> bool {
        idx != 0
            && self
                .grid
                .iter()
                .zip(&self.strides)
                .all(|(&nd, &st)| {
                    let i = (idx / st) % nd;
                    i == 0 || 2 * i == nd
                })
    }

    fn transform(&self, data: &mut [C64], inverse: bool) {
        debug_assert_eq!(data.len(), self.len);
        let mut line = Vec::new();
        for axis in 0..self.grid.len() {
            let nd = self.grid[axis];
            let stride = self.strides[axis];
            let plan = if inverse {
                &self.plans[axis].1
            } else {
                &self.plans[axis].0
            };
            let mut scratch = vec![C64::new(0.0, 0.0); plan.get_inplace_scratch_len()];
            line.resize(nd, C64::new(0.0, 0.0));
            let block = stride * nd;
            for outer in 0..self.len / block {
                for inner in 0..stride {
                    let base = outer * block + inner;
                    for (t, v) in line.iter_mut().enumerate() {
                        *v = data[base + t * stride];
                    }
                    plan.process_with_scratch(&mut line, &mut scratch);
                    for (t, v) in line.iter().enumerate() {
                        data[base + t * stride] = *v;
                    }
                }
            }
        }
        if inverse {
            let scale = 1.0 / self.len as f64;
            for v in data.iter_mut() {
                *v *= scale;
            }
        }
    }

    /// Forward multidimensional DFT (unnormalised).
    pub fn forward(&self, data: &mut [C64]) {
        self.transform(data, false);
    }

    /// Inverse multidimensional DFT, normalised so `inverse ∘ forward = id`.
    pub fn inverse(&self, data: &mut [C64]) {
        self.transform(data, true);
    }

    /// Same geometry check used by every binary operation.
    pub fn ensure_same(a: &Arc<Self>, b: &Arc<Self>, what: &str) -> Result<()> {
        if Arc::ptr_eq(a, b) || **a == **b {
            Ok(())
        } else {
            Err(GeomError::GridMismatch(format!(
                "{what}: grid {:?}/periods {:?} vs grid {:?}/periods {:?}",
                a.grid, a.periods, b.grid, b.periods
            )))
        }
    }
}
