pub mod adiabatic;
pub mod dump;
pub mod error;
pub mod exterior;
pub mod fibration;
pub mod field;
pub mod geometry;
pub mod ift;
pub mod krylov;
pub mod lattice;
pub mod twisted;

pub use error::{GeomError, Result};
pub use field::{Form11, ScalarField};
pub use geometry::{ddbar, KahlerStructure};
pub use lattice::{PeriodicLattice, C64};
