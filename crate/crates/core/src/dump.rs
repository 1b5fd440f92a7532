//! Binary field dumps.
//!
//! Layout, all integers and floats little-endian:
//!
//! | bytes            | content                                        |
//! |------------------|------------------------------------------------|
//! | 8                | magic `FKFIELD1`                               |
//! | 4 (u32)          | complex dimension `n`                          |
//! | 16·n (f64 pairs) | periods `τ_j` as `(re, im)`                    |
//! | 8·2n (u64)       | grid sizes `(N_x1, N_y1, …)`                   |
//! | 4 (u32)          | byte length `L` of the field name              |
//! | L                | field name, UTF-8                              |
//! | 16·∏N            | samples as `(re, im)` f64 pairs, row-major     |
//!
//! Row-major means the last real axis varies fastest, matching
//! [`PeriodicLattice::coords`].

use std::io::{Read, Write};
use std::sync::Arc;

use crate::error::{GeomError, Result};
use crate::field::ScalarField;
use crate::lattice::{PeriodicLattice, C64};

pub const MAGIC: &[u8; 8] = b"FKFIELD1";

fn io_err(e: std::io::Error) -> GeomError {
    GeomError::Dump(e.to_string())
}

pub fn write_field<W: Write>(mut w: W, name: &str, field: &ScalarField) -> Result<()> {
    let lat = field.lattice();
    w.write_all(MAGIC).map_err(io_err)?;
    w.write_all(&(lat.dim() as u32).to_le_bytes()).map_err(io_err)?;
    for tau in lat.periods() {
        w.write_all(&tau.re.to_le_bytes()).map_err(io_err)?;
        w.write_all(&tau.im.to_le_bytes()).map_err(io_err)?;
    }
    for &n in lat.grid() {
        w.write_all(&(n as u64).to_le_bytes()).map_err(io_err)?;
    }
    w.write_all(&(name.len() as u32).to_le_bytes()).map_err(io_err)?;
    w.write_all(name.as_bytes()).map_err(io_err)?;
    for v in field.values() {
        w.write_all(&v.re.to_le_bytes()).map_err(io_err)?;
        w.write_all(&v.im.to_le_bytes()).map_err(io_err)?;
    }
    Ok(())
}

fn read_array<const K: usize, R: Read>(r: &mut R) -> Result<[u8; K]> {
    let mut buf = [0u8; K];
    r.read_exact(&mut buf).map_err(io_err)?;
    Ok(buf)
}

fn read_f64<R: Read>(r: &mut R) -> Result<f64> {
    Ok(f64::from_le_bytes(read_array::<8, _>(r)?))
}

/// Reads a dump, returning the field name and the field.
pub fn read_field<R: Read>(mut r: R) -> Result<(String, ScalarField)> {
    if &read_array::<8, _>(&mut r)? != MAGIC {
        return Err(GeomError::Dump("bad magic".into()));
    }
    let n = u32::from_le_bytes(read_array::<4, _>(&mut r)?) as usize;
    if n == 0 || n > 16 {
        return Err(GeomError::Dump(format!("implausible dimension {n}")));
    }
    let mut periods = Vec::with_capacity(n);
    for _ in 0..n {
        let re = read_f64(&mut r)?;
        let im = read_f64(&mut r)?;
        periods.push(C64::new(re, im));
    }
    let mut grid = Vec::with_capacity(2 * n);
    for _ in 0..2 * n {
        grid.push(u64::from_le_bytes(read_array::<8, _>(&mut r)?) as usize);
    }
    let lat: Arc<PeriodicLattice> = PeriodicLattice::new(periods, grid)?;
    let len = u32::from_le_bytes(read_array::<4, _>(&mut r)?) as usize;
    let mut name = vec![0u8; len];
    r.read_exact(&mut name).map_err(io_err)?;
    let name = String::from_utf8(name).map_err(|e| GeomError::Dump(e.to_string()))?;
    let mut values = Vec::with_capacity(lat.len());
    for _ in 0..lat.len() {
        let re = read_f64(&mut r)?;
        let im = read_f64(&mut r)?;
        values.push(C64::new(re, im));
    }
    Ok((name, ScalarField::new(lat, values)?))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_bit_exact() {
        let lat = PeriodicLattice::new(vec![C64::new(0.25, 1.5)], vec![8, 10]).unwrap();
        let f = ScalarField::from_fn(&lat, |x| C64::new(x[0].sin(), (x[1] * 0.3).exp()));
        let mut buf = Vec::new();
        write_field(&mut buf, "phi", &f).unwrap();
        assert_eq!(buf.len(), 8 + 4 + 16 + 16 + 4 + 3 + 16 * 80);
        let (name, g) = read_field(&buf[..]).unwrap();
        assert_eq!(name, "phi");
        assert_eq!(g.lattice().grid(), f.lattice().grid());
        assert_eq!(g.values(), f.values());
    }

    #[test]
    fn rejects_truncated_input() {
        let lat = PeriodicLattice::square(1, 8).unwrap();
        let mut buf = Vec::new();
        write_field(&mut buf, "x", &ScalarField::zeros(&lat)).unwrap();
        buf.truncate(buf.len() - 1);
        assert!(matches!(read_field(&buf[..]), Err(GeomError::Dump(_))));
        assert!(read_field(&b"NOTADUMP"[..]).is_err());
    }
}
