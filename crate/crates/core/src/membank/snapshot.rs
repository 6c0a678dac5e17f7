//! Binary memory snapshots.
//!
//! Layout, all integers little-endian:
//!
//! | offset | size  | field                                        |
//! |--------|-------|----------------------------------------------|
//! | 0      | 8     | magic `MGSLMEM\0`                            |
//! | 8      | 4     | format version (u32, currently 1)            |
//! | 12     | 1     | domain (0 = video, 1 = query)                |
//! | 13     | 3     | reserved, zero                               |
//! | 16     | 4     | slot count L (u32)                           |
//! | 20     | 4     | slot width D (u32)                           |
//! | 24     | 8     | write count (u64)                            |
//! | 32     | 8     | initialization seed (u64)                    |
//! | 40     | 8·L·D | slot values, row-major IEEE-754 f64          |

use std::io::{Read, Write};

use super::{Domain, MemoryBank};
use crate::error::{Error, Result};
use crate::numcore::Mat;

pub const SNAPSHOT_MAGIC: &[u8; 8] = b"MGSLMEM\0";
pub const SNAPSHOT_VERSION: u32 = 1;

pub fn write_snapshot<W: Write>(bank: &MemoryBank, mut out: W) -> Result<()> {
    let mut buf = Vec::with_capacity(40 + 8 * bank.slots.len());
    buf.extend_from_slice(SNAPSHOT_MAGIC);
    buf.extend_from_slice(&SNAPSHOT_VERSION.to_le_bytes());
    buf.push(match bank.domain {
        Domain::Video => 0,
        Domain::Query => 1,
    });
    buf.extend_from_slice(&[0; 3]);
    buf.extend_from_slice(&(bank.len() as u32).to_le_bytes());
    buf.extend_from_slice(&(bank.width() as u32).to_le_bytes());
    buf.extend_from_slice(&bank.write_count.to_le_bytes());
    buf.extend_from_slice(&bank.seed.to_le_bytes());
    for x in bank.slots.iter() {
        buf.extend_from_slice(&x.to_le_bytes());
    }
    out.write_all(&buf)?;
    Ok(())
}

fn bad(msg: impl Into<String>) -> Error {
    Error::Format { what: "memory snapshot", msg: msg.into() }
}

pub fn read_snapshot<R: Read>(mut input: R) -> Result<MemoryBank> {
    let mut header = [0u8; 40];
    input.read_exact(&mut header).map_err(|_| bad("truncated header"))?;
    if &header[0..8] != SNAPSHOT_MAGIC {
        return Err(bad("bad magic"));
    }
    let u32_at = |o: usize| u32::from_le_bytes(header[o..o + 4].try_into().unwrap());
    let u64_at = |o: usize| u64::from_le_bytes(header[o..o + 8].try_into().unwrap());
    let version = u32_at(8);
    if version != SNAPSHOT_VERSION {
        return Err(bad(format!("unsupported version {version}")));
    }
    let domain = match header[12] {
        0 => Domain::Video,
        1 => Domain::Query,
        other => return Err(bad(format!("unknown domain tag {other}"))),
    };
    let (l, d) = (u32_at(16) as usize, u32_at(20) as usize);
    let (write_count, seed) = (u64_at(24), u64_at(32));
    let mut body = Vec::new();
    input.read_to_end(&mut body)?;
    if body.len() != 8 * l * d {
        return Err(bad(format!("expected {} slot bytes, found {}", 8 * l * d, body.len())));
    }
    let values: Vec<f64> = body.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
    let slots = Mat::from_shape_vec((l, d), values).map_err(|e| bad(e.to_string()))?;
    MemoryBank::from_slots(slots, domain, write_count, seed)
}
