//! Binary field snapshots with a sidecar text description.
//!
//! Layout (little endian): the magic `RBCSNAP1`, `nx`, `nz` as `u64`, then
//! `lx`, `lz`, `t`, `Ra`, `Pr` as `f64`, a `u64` form tag (0 pr-outside,
//! 1 pr-split), then the real and imaginary parts of every vorticity
//! coefficient followed by those of the temperature.

use std::fs;
use std::path::{Path, PathBuf};

use super::grid::{RbcGrid, C64};
use super::solver::{RbcFields, RbcForm, RbcParams};
use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"RBCSNAP1";

#[derive(Clone, Debug, PartialEq)]
pub struct Snapshot {
    pub grid: RbcGrid,
    pub t: f64,
    pub params: RbcParams,
    pub fields: RbcFields,
}

fn meta_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".meta");
    PathBuf::from(s)
}

/// Writes the snapshot and `<path>.meta`.
pub fn write_snapshot(path: &Path, snap: &Snapshot) -> Result<()> {
    let g = &snap.grid;
    let mut buf = Vec::with_capacity(80 + 32 * g.len());
    buf.extend_from_slice(MAGIC);
    for v in [g.nx as u64, g.nz as u64] {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    for v in [g.lx, g.lz, snap.t, snap.params.ra, snap.params.pr] {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    let tag: u64 = match snap.params.form {
        RbcForm::PrOutside => 0,
        RbcForm::PrSplit => 1,
    };
    buf.extend_from_slice(&tag.to_le_bytes());
    for c in snap.fields.zeta.iter().chain(&snap.fields.theta) {
        buf.extend_from_slice(&c.re.to_le_bytes());
        buf.extend_from_slice(&c.im.to_le_bytes());
    }
    fs::write(path, &buf).map_err(|e| Error::io(path, e))?;
    let meta = format!(
        "format = RBCSNAP1\nnx = {}\nnz = {}\nlx = {}\nlz = {}\nt = {}\nRa = {}\nPr = {}\nform = {}\n\
         basis = fourier(x) x sine(z), free-slip walls, fixed temperature\n\
         fields = vorticity, temperature deviation from the conductive profile\n",
        g.nx,
        g.nz,
        g.lx,
        g.lz,
        snap.t,
        snap.params.ra,
        snap.params.pr,
        snap.params.form.name()
    );
    let mp = meta_path(path);
    fs::write(&mp, meta).map_err(|e| Error::io(&mp, e))
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take8(&mut self) -> Option<[u8; 8]> {
        let out = self.bytes.get(self.pos..self.pos + 8)?.try_into().ok()?;
        self.pos += 8;
        Some(out)
    }
    fn u64(&mut self) -> Option<u64> {
        self.take8().map(u64::from_le_bytes)
    }
    fn f64(&mut self) -> Option<f64> {
        self.take8().map(f64::from_le_bytes)
    }
}

pub fn read_snapshot(path: &Path) -> Result<Snapshot> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let bad = || Error::config(format!("{} is not a valid snapshot", path.display()));
    let mut r = Reader { bytes: &bytes, pos: 0 };
    if r.take8().as_ref() != Some(MAGIC) {
        return Err(bad());
    }
    let nx = r.u64().ok_or_else(bad)? as usize;
    let nz = r.u64().ok_or_else(bad)? as usize;
    let mut head = [0.0; 5];
    for h in &mut head {
        *h = r.f64().ok_or_else(bad)?;
    }
    let [lx, lz, t, ra, pr] = head;
    let form = match r.u64().ok_or_else(bad)? {
        0 => RbcForm::PrOutside,
        1 => RbcForm::PrSplit,
        _ => return Err(bad()),
    };
    let grid = RbcGrid::new(nx, nz, lx, lz)?;
    let n = grid.len();
    if bytes.len() != r.pos + 32 * n {
        return Err(bad());
    }
    let mut coeffs = Vec::with_capacity(2 * n);
    for _ in 0..2 * n {
        let re = r.f64().ok_or_else(bad)?;
        let im = r.f64().ok_or_else(bad)?;
        coeffs.push(C64::new(re, im));
    }
    let theta = coeffs.split_off(n);
    Ok(Snapshot {
        grid,
        t,
        params: RbcParams::new(ra, pr, form)?,
        fields: RbcFields { zeta: coeffs, theta },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rbc::solver::seeded_perturbation;

    #[test]
    fn round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let grid = RbcGrid::new(32, 16, 4.0, 1.0).unwrap();
        let mut fields = seeded_perturbation(&grid, 3, 0.5);
        fields.zeta = seeded_perturbation(&grid, 4, 2.0).theta;
        let snap = Snapshot {
            grid,
            t: 1.25,
            params: RbcParams::new(1e5, 0.7, RbcForm::PrSplit).unwrap(),
            fields,
        };
        let path = dir.path().join("state.bin");
        write_snapshot(&path, &snap).unwrap();
        assert_eq!(read_snapshot(&path).unwrap(), snap);
        let meta = fs::read_to_string(dir.path().join("state.bin.meta")).unwrap();
        assert!(meta.contains("form = pr-split"));
    }

    #[test]
    fn truncated_file_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.bin");
        fs::write(&path, b"RBCSNAP1\x02").unwrap();
        assert!(matches!(read_snapshot(&path), Err(Error::Config(_))));
    }
}
