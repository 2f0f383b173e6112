//! `RNET` checkpoint: magic, u32 version, u32 height, width, c1, c2, kernel,
//! n_classes, then every parameter as f32. Little-endian.

use std::fs;
use std::path::Path;

use super::net::{RefNet, RefNetConfig};
use crate::binio::{Reader, Writer};
use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"RNET";
const VERSION: u32 = 1;

pub fn encode_refnet(net: &RefNet) -> Vec<u8> {
    let c = net.config();
    let mut w = Writer::new();
    w.bytes(MAGIC);
    w.u32(VERSION);
    for v in [c.height, c.width, c.c1, c.c2, c.kernel, c.n_classes] {
        w.u32(v as u32);
    }
    for &p in net.params() {
        w.f32(p as f32);
    }
    w.finish()
}

pub fn decode_refnet(bytes: &[u8]) -> Result<RefNet> {
    let mut r = Reader::new(bytes);
    r.expect_magic(MAGIC)?;
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(Error::format(
            "version",
            format!("unsupported version {version}"),
        ));
    }
    let cfg = RefNetConfig {
        height: r.u32("height")? as usize,
        width: r.u32("width")? as usize,
        c1: r.u32("c1")? as usize,
        c2: r.u32("c2")? as usize,
        kernel: r.u32("kernel")? as usize,
        n_classes: r.u32("n_classes")? as usize,
    };
    cfg.validate()
        .map_err(|e| Error::format("layer dims", e.to_string()))?;
    let params = r.f32_vec(cfg.n_params(), "params")?;
    r.expect_end()?;
    RefNet::from_params(cfg, params.into_iter().map(f64::from).collect())
}

pub fn save_refnet(net: &RefNet, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, encode_refnet(net))?;
    Ok(())
}

pub fn load_refnet(path: impl AsRef<Path>) -> Result<RefNet> {
    decode_refnet(&fs::read(path)?)
}
