//! Binary SOM checkpoint: `SOM1`, u32 version, u32 m, u32 n, u32 dim,
//! u8 topology, then f32 weights row-major. All little-endian.

use std::fs;
use std::path::Path;

use super::grid::{SomGrid, Topology};
use crate::binio::{Reader, Writer};
use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"SOM1";
const VERSION: u32 = 1;

pub fn encode_som(grid: &SomGrid) -> Vec<u8> {
    let mut w = Writer::new();
    w.bytes(MAGIC);
    w.u32(VERSION);
    w.u32(grid.m() as u32);
    w.u32(grid.n() as u32);
    w.u32(grid.dim() as u32);
    w.u8(grid.topology().to_byte());
    for &v in grid.weights() {
        w.f32(v);
    }
    w.finish()
}

pub fn decode_som(bytes: &[u8]) -> Result<SomGrid> {
    let mut r = Reader::new(bytes);
    r.expect_magic(MAGIC)?;
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(Error::format(
            "version",
            format!("unsupported version {version}"),
        ));
    }
    let m = r.u32("m")? as usize;
    let n = r.u32("n")? as usize;
    let dim = r.u32("dim")? as usize;
    if m == 0 || n == 0 || dim == 0 {
        return Err(Error::format(
            "dim",
            format!("zero extent in {m}x{n}x{dim}"),
        ));
    }
    let topo = r.u8("topology")?;
    let topology = Topology::from_byte(topo)
        .ok_or_else(|| Error::format("topology", format!("unknown topology byte {topo}")))?;
    let count = m
        .checked_mul(n)
        .and_then(|u| u.checked_mul(dim))
        .ok_or_else(|| Error::format("weights", "m*n*dim overflows"))?;
    let weights = r.f32_vec(count, "weights")?;
    r.expect_end()?;
    if weights.iter().any(|v| !v.is_finite()) {
        return Err(Error::format("weights", "non-finite weight"));
    }
    SomGrid::from_weights(m, n, dim, topology, weights)
}

pub fn save_som(grid: &SomGrid, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, encode_som(grid))?;
    Ok(())
}

pub fn load_som(path: impl AsRef<Path>) -> Result<SomGrid> {
    decode_som(&fs::read(path)?)
}
