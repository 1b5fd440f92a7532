//! Plain exterior-algebra arithmetic on `ℂⁿ`, used as an independent route to
//! wedge-product identities and to fibre pushforwards.
//!
//! Generators are ordered `dz_1, dz̄_1, dz_2, dz̄_2, …`; generator `2j` is
//! `dz_j` and `2j + 1` is `dz̄_j`. A monomial is a bitmask of generators in
//! increasing order.

use std::collections::BTreeMap;
use std::sync::Arc;

use nalgebra::DMatrix;

use crate::field::{Form11, ScalarField};
use crate::lattice::{PeriodicLattice, C64};

const I: C64 = C64::new(0.0, 1.0);

/// Sign of `e_a ∧ e_b` relative to the sorted monomial `e_{a|b}`.
pub fn wedge_sign(a: u64, b: u64) -> f64 {
    let mut swaps = 0u32;
    let mut rest = b;
    while rest != 0 {
        let bit = rest.trailing_zeros();
        swaps += ((a >> bit) >> 1).count_ones();
        rest &= rest - 1;
    }
    if swaps % 2 == 0 {
        1.0
    } else {
        -1.0
    }
}

#[inline]
pub fn dz_bit(j: usize) -> u64 {
    1 << (2 * j)
}

#[inline]
pub fn dzbar_bit(j: usize) -> u64 {
    1 << (2 * j + 1)
}

/// A form with constant coefficients.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct PointForm {
    pub terms: BTreeMap<u64, C64>,
}

impl PointForm {
    /// `i Σ B_{jk̄} dz_j ∧ dz̄_k`.
    pub fn from_hermitian(b: &DMatrix<C64>) -> Self {
        let mut terms = BTreeMap::new();
        for j in 0..b.nrows() {
            for k in 0..b.ncols() {
                let v = I * b[(j, k)] * wedge_sign(dz_bit(j), dzbar_bit(k));
                if v != C64::new(0.0, 0.0) {
                    *terms.entry(dz_bit(j) | dzbar_bit(k)).or_insert(C64::new(0.0, 0.0)) += v;
                }
            }
        }
        Self { terms }
    }

    pub fn wedge(&self, other: &Self) -> Self {
        let mut terms = BTreeMap::new();
        for (&ma, &ca) in &self.terms {
            for (&mb, &cb) in &other.terms {
                if ma & mb != 0 {
                    continue;
                }
                *terms.entry(ma | mb).or_insert(C64::new(0.0, 0.0)) += ca * cb * wedge_sign(ma, mb);
            }
        }
        Self { terms }
    }

    pub fn coefficient(&self, mask: u64) -> C64 {
        self.terms.get(&mask).copied().unwrap_or_default()
    }
}

/// Coefficient of `∏_j (i dz_j ∧ dz̄_j)` in the wedge of the (1,1)-forms with
/// the given Hermitian matrices; the number of factors must equal the
/// dimension.
pub fn top_coefficient(mats: &[&DMatrix<C64>]) -> C64 {
    let n = mats[0].nrows();
    assert_eq!(mats.len(), n, "need exactly n factors for a top form");
    let mut acc = PointForm::from_hermitian(mats[0]);
    for m in &mats[1..] {
        acc = acc.wedge(&PointForm::from_hermitian(m));
    }
    let all = (1u64 << (2 * n)) - 1;
    acc.coefficient(all) / I.powi(n as i32)
}

/// A differential form with field coefficients on a flat torus.
#[derive(Debug, Clone)]
pub struct FieldForm {
    lattice: Arc<PeriodicLattice>,
    pub terms: BTreeMap<u64, ScalarField>,
}

impl FieldForm {
    pub fn zero(lattice: &Arc<PeriodicLattice>) -> Self {
        Self {
            lattice: lattice.clone(),
            terms: BTreeMap::new(),
        }
    }

    /// The function `f` as a 0-form.
    pub fn function(f: &ScalarField) -> Self {
        let mut terms = BTreeMap::new();
        terms.insert(0, f.clone());
        Self {
            lattice: f.lattice().clone(),
            terms,
        }
    }

    /// `i Σ β_{jk̄} dz_j ∧ dz̄_k`.
    pub fn from_form11(beta: &Form11) -> Self {
        let n = beta.dim();
        let mut terms = BTreeMap::new();
        for j in 0..n {
            for k in 0..n {
                terms.insert(
                    dz_bit(j) | dzbar_bit(k),
                    beta.get(j, k).scale(I * wedge_sign(dz_bit(j), dzbar_bit(k))),
                );
            }
        }
        Self {
            lattice: beta.lattice().clone(),
            terms,
        }
    }

    /// Reads back the (1,1)-part as a [`Form11`].
    pub fn to_form11(&self) -> Form11 {
        let n = self.lattice.dim();
        let mut comps = Vec::with_capacity(n * n);
        for j in 0..n {
            for k in 0..n {
                comps.push(match self.terms.get(&(dz_bit(j) | dzbar_bit(k))) {
                    Some(c) => c.scale(-I * wedge_sign(dz_bit(j), dzbar_bit(k))),
                    None => ScalarField::zeros(&self.lattice),
                });
            }
        }
        Form11::new(n, comps).expect("square component array")
    }

    pub fn lattice(&self) -> &Arc<PeriodicLattice> {
        &self.lattice
    }

    fn accumulate(terms: &mut BTreeMap<u64, ScalarField>, mask: u64, f: ScalarField) {
        match terms.get_mut(&mask) {
            Some(t) => *t = &*t + &f,
            None => {
                terms.insert(mask, f);
            }
        }
    }

    pub fn add(&self, other: &Self) -> Self {
        let mut terms = self.terms.clone();
        for (&m, f) in &other.terms {
            Self::accumulate(&mut terms, m, f.clone());
        }
        Self {
            lattice: self.lattice.clone(),
            terms,
        }
    }

    pub fn scale(&self, s: C64) -> Self {
        Self {
            lattice: self.lattice.clone(),
            terms: self.terms.iter().map(|(&m, f)| (m, f.scale(s))).collect(),
        }
    }

    pub fn wedge(&self, other: &Self) -> Self {
        let mut terms = BTreeMap::new();
        for (&ma, fa) in &self.terms {
            for (&mb, fb) in &other.terms {
                if ma & mb != 0 {
                    continue;
                }
                let prod = (fa * fb).scale_re(wedge_sign(ma, mb));
                Self::accumulate(&mut terms, ma | mb, prod);
            }
        }
        Self {
            lattice: self.lattice.clone(),
            terms,
        }
    }

    /// `self^k`, with `self^0 = 1`.
    pub fn power(&self, k: usize) -> Self {
        let mut acc = Self::function(&ScalarField::constant(&self.lattice, C64::new(1.0, 0.0)));
        for _ in 0..k {
            acc = acc.wedge(self);
        }
        acc
    }

    /// Exterior derivative, with spectral coefficients.
    pub fn d(&self) -> Self {
        let n = self.lattice.dim();
        let mut terms = BTreeMap::new();
        for (&m, f) in &self.terms {
            let (df, dbf) = f.gradients();
            for j in 0..n {
                for (bit, g) in [(dz_bit(j), &df[j]), (dzbar_bit(j), &dbf[j])] {
                    if m & bit != 0 {
                        continue;
                    }
                    Self::accumulate(&mut terms, m | bit, g.scale_re(wedge_sign(bit, m)));
                }
            }
        }
        Self {
            lattice: self.lattice.clone(),
            terms,
        }
    }

    pub fn max_abs(&self) -> f64 {
        self.terms.values().fold(0.0, |m, f| m.max(f.max_abs()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn wedge_signs() {
        // dz̄_1 ∧ dz_1 = −dz_1 ∧ dz̄_1
        assert_eq!(wedge_sign(0b10, 0b01), -1.0);
        assert_eq!(wedge_sign(0b01, 0b10), 1.0);
        // (e0 e2) ∧ e1 = −e0 e1 e2
        assert_eq!(wedge_sign(0b101, 0b010), -1.0);
        assert_eq!(wedge_sign(0b0011, 0b1100), 1.0);
    }

    #[test]
    fn top_power_is_factorial_times_determinant() {
        let m = DMatrix::from_row_slice(
            2,
            2,
            &[C64::new(2.0, 0.0), C64::new(0.5, 0.3), C64::new(0.5, -0.3), C64::new(1.0, 0.0)],
        );
        let c = top_coefficient(&[&m, &m]);
        assert!((c - 2.0 * m.determinant()).norm() < 1e-14);
    }

    #[test]
    fn d_squared_vanishes() {
        let lat = PeriodicLattice::square(2, 8).unwrap();
        let f = ScalarField::from_real_fn(&lat, |x| (x[0] + 2.0 * x[3]).sin() * x[1].cos());
        let dd = FieldForm::function(&f).d().d();
        assert!(dd.max_abs() < 1e-12);
    }

    #[test]
    fn ddbar_form_is_closed() {
        let lat = PeriodicLattice::square(2, 8).unwrap();
        let f = ScalarField::from_real_fn(&lat, |x| (x[0] - x[2]).cos() + (x[1] + x[3]).sin());
        let beta = crate::geometry::ddbar(&f);
        let form = FieldForm::from_form11(&beta);
        assert!(form.d().max_abs() < 1e-12);
        let back = form.to_form11();
        assert!(back.sub(&beta).unwrap().max_abs() < 1e-15);
    }
}
