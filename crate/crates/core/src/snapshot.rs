//! Ensemble snapshots on disk.
//!
//! Binary layout, all little-endian:
//!
//! ```text
//! magic   8 bytes  "GRANSNAP"
//! version u32      = 1
//! dim     u32
//! np      u64
//! time, rho, alpha, tau   f64 x 4
//! velocities              f64 x np*dim, row-major
//! ```
//!
//! The CSV form carries the same header as `# key = value` comment lines
//! followed by a `v0,v1,...` column header and one row per particle.

use std::io::{BufRead, Read, Write};

use crate::dsmc::VelocityEnsemble;
use crate::error::{contract, Result};

pub const MAGIC: &[u8; 8] = b"GRANSNAP";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Snapshot {
    pub time: f64,
    pub alpha: f64,
    pub tau: f64,
    pub ensemble: VelocityEnsemble,
}

impl Snapshot {
    pub fn write_binary<W: Write>(&self, mut w: W) -> Result<()> {
        let e = &self.ensemble;
        w.write_all(MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;
        w.write_all(&(e.dim() as u32).to_le_bytes())?;
        w.write_all(&(e.np() as u64).to_le_bytes())?;
        for x in [self.time, e.rho(), self.alpha, self.tau] {
            w.write_all(&x.to_le_bytes())?;
        }
        for c in e.velocities() {
            w.write_all(&c.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_binary<R: Read>(mut r: R) -> Result<Self> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(contract("not a snapshot file"));
        }
        let version = read_u32(&mut r)?;
        if version != VERSION {
            return Err(contract(format!("unsupported snapshot version {version}")));
        }
        let dim = read_u32(&mut r)? as usize;
        let np = read_u64(&mut r)? as usize;
        let time = read_f64(&mut r)?;
        let rho = read_f64(&mut r)?;
        let alpha = read_f64(&mut r)?;
        let tau = read_f64(&mut r)?;
        let len = np
            .checked_mul(dim)
            .ok_or_else(|| contract("snapshot size overflows"))?;
        let mut v = Vec::with_capacity(len);
        for _ in 0..len {
            v.push(read_f64(&mut r)?);
        }
        Ok(Self {
            time,
            alpha,
            tau,
            ensemble: VelocityEnsemble::new(dim, rho, v)?,
        })
    }

    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        let e = &self.ensemble;
        writeln!(w, "# version = {VERSION}")?;
        writeln!(w, "# time = {}", self.time)?;
        writeln!(w, "# np = {}", e.np())?;
        writeln!(w, "# rho = {}", e.rho())?;
        writeln!(w, "# alpha = {}", self.alpha)?;
        writeln!(w, "# tau = {}", self.tau)?;
        writeln!(w, "# dim = {}", e.dim())?;
        let header: Vec<String> = (0..e.dim()).map(|k| format!("v{k}")).collect();
        writeln!(w, "{}", header.join(","))?;
        for v in e.iter() {
            let row: Vec<String> = v.iter().map(|c| c.to_string()).collect();
            writeln!(w, "{}", row.join(","))?;
        }
        Ok(())
    }

    pub fn read_csv<R: BufRead>(r: R) -> Result<Self> {
        let mut fields = std::collections::HashMap::new();
        let mut v = Vec::new();
        let mut seen_header = false;
        for line in r.lines() {
            let line = line?;
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            if let Some(rest) = line.strip_prefix('#') {
                let (k, val) = rest
                    .split_once('=')
                    .ok_or_else(|| contract(format!("malformed header line `{line}`")))?;
                fields.insert(k.trim().to_string(), val.trim().to_string());
                continue;
            }
            if !seen_header {
                seen_header = true;
                continue;
            }
            for c in line.split(',') {
                v.push(c.trim().parse::<f64>().map_err(|_| contract(format!("bad number `{c}`")))?);
            }
        }
        let get = |k: &str| -> Result<f64> {
            fields
                .get(k)
                .ok_or_else(|| contract(format!("snapshot header lacks `{k}`")))?
                .parse::<f64>()
                .map_err(|_| contract(format!("snapshot header `{k}` is not a number")))
        };
        if get("version")? as u32 != VERSION {
            return Err(contract("unsupported snapshot version"));
        }
        let dim = get("dim")? as usize;
        let np = get("np")? as usize;
        if v.len() != np * dim {
            return Err(contract(format!("expected {} components, found {}", np * dim, v.len())));
        }
        Ok(Self {
            time: get("time")?,
            alpha: get("alpha")?,
            tau: get("tau")?,
            ensemble: VelocityEnsemble::new(dim, get("rho")?, v)?,
        })
    }
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64<R: Read>(r: &mut R) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

fn read_f64<R: Read>(r: &mut R) -> Result<f64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(f64::from_le_bytes(b))
}
