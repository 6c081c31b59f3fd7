//! Field serialization.
//!
//! Binary layout (little endian):
//!
//! ```text
//! bytes 0..8    magic "DKFIELD1"
//! bytes 8..12   d  (u32)
//! bytes 12..16  n  (u32)
//! then n^d f64 values in lexicographic order, axis 0 fastest
//! ```
//!
//! CSV layout: a `d,n` header line, the two integers, a `value` header line,
//! then one value per line in the same order. Values are written with the
//! shortest representation that round-trips exactly.
//!
//! Grid offsets are not stored; fields are read back on the unshifted grid.

use std::io::{BufRead, Read, Write};

use super::{Field, TorusGrid};
use crate::error::{DkError, Result};

const MAGIC: &[u8; 8] = b"DKFIELD1";

pub fn write_binary<W: Write>(field: &Field, mut out: W) -> Result<()> {
    let g = field.grid();
    out.write_all(MAGIC)?;
    out.write_all(&(g.d() as u32).to_le_bytes())?;
    out.write_all(&(g.n() as u32).to_le_bytes())?;
    for v in field.values() {
        out.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

pub fn read_binary<R: Read>(mut input: R) -> Result<Field> {
    let mut magic = [0u8; 8];
    input.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(DkError::Format("bad magic".into()));
    }
    let mut word = [0u8; 4];
    input.read_exact(&mut word)?;
    let d = u32::from_le_bytes(word) as usize;
    input.read_exact(&mut word)?;
    let n = u32::from_le_bytes(word) as usize;
    let grid = TorusGrid::new(d, n)?;
    let mut values = Vec::with_capacity(grid.len());
    let mut buf = [0u8; 8];
    for _ in 0..grid.len() {
        input.read_exact(&mut buf)?;
        values.push(f64::from_le_bytes(buf));
    }
    Field::new(grid, values)
}

pub fn write_csv<W: Write>(field: &Field, mut out: W) -> Result<()> {
    let g = field.grid();
    writeln!(out, "d,n")?;
    writeln!(out, "{},{}", g.d(), g.n())?;
    writeln!(out, "value")?;
    for v in field.values() {
        writeln!(out, "{v}")?;
    }
    Ok(())
}

pub fn read_csv<R: BufRead>(input: R) -> Result<Field> {
    let mut lines = input.lines();
    let mut next = |what: &str| -> Result<String> {
        lines
            .next()
            .ok_or_else(|| DkError::Format(format!("missing {what}")))?
            .map_err(DkError::from)
    };
    if next("header")?.trim() != "d,n" {
        return Err(DkError::Format("expected `d,n` header".into()));
    }
    let dims = next("dimensions")?;
    let (d, n) = dims
        .trim()
        .split_once(',')
        .ok_or_else(|| DkError::Format("expected `d,n` values".into()))?;
    let parse = |s: &str| {
        s.trim()
            .parse::<usize>()
            .map_err(|e| DkError::Format(format!("bad integer `{s}`: {e}")))
    };
    let grid = TorusGrid::new(parse(d)?, parse(n)?)?;
    if next("value header")?.trim() != "value" {
        return Err(DkError::Format("expected `value` header".into()));
    }
    let mut values = Vec::with_capacity(grid.len());
    for _ in 0..grid.len() {
        let line = next("value")?;
        values.push(
            line.trim()
                .parse::<f64>()
                .map_err(|e| DkError::Format(format!("bad value `{line}`: {e}")))?,
        );
    }
    Field::new(grid, values)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::{interpolate, make_grid};
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn round_trips(d in 1usize..=3, n in 2usize..6, phase in -3.0f64..3.0) {
            let g = make_grid(d, n).unwrap();
            let f = interpolate(&g, |x| (x[0] + phase).sin() * 1e-3 + x.iter().sum::<f64>());
            let mut bin = Vec::new();
            write_binary(&f, &mut bin).unwrap();
            prop_assert_eq!(&read_binary(&bin[..]).unwrap(), &f);
            let mut csv = Vec::new();
            write_csv(&f, &mut csv).unwrap();
            prop_assert_eq!(&read_csv(&csv[..]).unwrap(), &f);
        }
    }

    #[test]
    fn rejects_truncated_input() {
        let f = crate::grid::Field::constant(make_grid(2, 3).unwrap(), 1.0);
        let mut bin = Vec::new();
        write_binary(&f, &mut bin).unwrap();
        assert!(read_binary(&bin[..bin.len() - 1]).is_err());
        assert!(read_binary(&b"NOTAFILE"[..]).is_err());
        assert!(read_csv(&b"d,n\n2,3\nvalue\n1\n"[..]).is_err());
    }
}
