//! File formats.
//!
//! Tensor files (`STBT`, little-endian):
//!
//! | bytes | content                                  |
//! |-------|------------------------------------------|
//! | 4     | magic `b"STBT"`                          |
//! | 4     | format version (`u32`, currently 1)      |
//! | 16    | `C, T, H, W` as `u32` each               |
//! | 4·N   | `C·T·H·W` `f32` values, `(c,t,h,w)` order |
//!
//! Event histories, masks and embeddings are plain CSV.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{format_err, Error, Result};
use crate::profile::ProfileEmbedding;
use crate::synth::{Event, EventHistory};
use crate::tensor::{BehaviorTensor, Dims, EvidenceMask};

pub const TENSOR_MAGIC: &[u8; 4] = b"STBT";
pub const TENSOR_VERSION: u32 = 1;
const HEADER_LEN: usize = 24;

pub fn encode_tensor(x: &BehaviorTensor) -> Vec<u8> {
    let d = x.dims();
    let mut buf = Vec::with_capacity(HEADER_LEN + 4 * d.len());
    buf.extend_from_slice(TENSOR_MAGIC);
    buf.extend_from_slice(&TENSOR_VERSION.to_le_bytes());
    for v in [d.channels, d.time, d.height, d.width] {
        buf.extend_from_slice(&(v as u32).to_le_bytes());
    }
    for v in x.values() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    buf
}

fn read_u32(bytes: &[u8], at: usize) -> u32 {
    u32::from_le_bytes(bytes[at..at + 4].try_into().expect("4-byte slice"))
}

pub fn decode_tensor(bytes: &[u8]) -> Result<BehaviorTensor> {
    const KIND: &str = "tensor";
    if bytes.len() < HEADER_LEN {
        return Err(format_err(KIND, format!("{} bytes is shorter than the header", bytes.len())));
    }
    if &bytes[..4] != TENSOR_MAGIC {
        return Err(format_err(KIND, format!("bad magic {:?}", &bytes[..4])));
    }
    let version = read_u32(bytes, 4);
    if version != TENSOR_VERSION {
        return Err(format_err(KIND, format!("unsupported version {version}")));
    }
    let [c, t, h, w] = [8, 12, 16, 20].map(|at| read_u32(bytes, at) as usize);
    let dims = Dims {
        channels: c,
        time: t,
        height: h,
        width: w,
    };
    let n = dims
        .checked_len()
        .and_then(|n| n.checked_mul(4).map(|bytes| (n, bytes)))
        .ok_or_else(|| format_err(KIND, format!("dims {dims:?} overflow")))?;
    if dims.validate().is_err() {
        return Err(format_err(KIND, format!("invalid dims {dims:?}")));
    }
    let payload = &bytes[HEADER_LEN..];
    if payload.len() != n.1 {
        return Err(format_err(
            KIND,
            format!("payload of {} bytes, header promises {}", payload.len(), n.1),
        ));
    }
    let values = payload
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes(b.try_into().expect("4-byte chunk")))
        .collect();
    BehaviorTensor::from_values(dims, values).map_err(|e| format_err(KIND, e.to_string()))
}

pub fn write_tensor(path: impl AsRef<Path>, x: &BehaviorTensor) -> Result<()> {
    fs::write(path, encode_tensor(x))?;
    Ok(())
}

pub fn read_tensor(path: impl AsRef<Path>) -> Result<BehaviorTensor> {
    decode_tensor(&fs::read(path)?)
}

/// Two-plane tensor (binary, weight) for visualization pipelines.
pub fn mask_as_tensor(m: &EvidenceMask) -> BehaviorTensor {
    let g = m.grid();
    let dims = Dims {
        channels: 2,
        time: g.time,
        height: g.height,
        width: g.width,
    };
    let mut values: Vec<f32> = m.indicator().iter().map(|&v| v as f32).collect();
    values.extend(m.weights().iter().map(|&v| v as f32));
    BehaviorTensor::from_values(dims, values).expect("two planes of the mask grid")
}

pub fn write_mask_csv(path: impl AsRef<Path>, m: &EvidenceMask) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["t", "h", "w", "binary", "weight"])?;
    let g = m.grid();
    for i in 0..g.coords() {
        let (t, h, ww) = g.unravel(i);
        w.write_record([
            t.to_string(),
            h.to_string(),
            ww.to_string(),
            u8::from(m.binary()[i]).to_string(),
            format!("{:e}", m.weights()[i]),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Appends `(user_id, app_id, location_id, timestamp)` rows.
pub fn write_events_csv(path: impl AsRef<Path>, histories: &[(usize, &EventHistory)]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["user_id", "app_id", "location_id", "timestamp"])?;
    for (user, hist) in histories {
        for e in hist.events() {
            w.write_record([
                user.to_string(),
                e.app.to_string(),
                e.location.to_string(),
                e.timestamp.to_string(),
            ])?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Reads events grouped by user id, in file order.
pub fn read_events_csv(path: impl AsRef<Path>) -> Result<Vec<(usize, Vec<Event>)>> {
    let mut r = csv::Reader::from_path(path)?;
    let mut out: Vec<(usize, Vec<Event>)> = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        let field = |i: usize| -> Result<usize> {
            rec.get(i)
                .and_then(|s| s.trim().parse().ok())
                .ok_or_else(|| format_err("event csv", format!("bad field {i} in {rec:?}")))
        };
        let (user, app, location, timestamp) = (field(0)?, field(1)?, field(2)?, field(3)?);
        let ev = Event {
            app,
            location,
            timestamp,
        };
        match out.last_mut() {
            Some((u, evs)) if *u == user => evs.push(ev),
            _ => out.push((user, vec![ev])),
        }
    }
    Ok(out)
}

pub fn write_embeddings_csv(path: impl AsRef<Path>, rows: &[(usize, &ProfileEmbedding)]) -> Result<()> {
    let mut f = fs::File::create(path)?;
    for (user, emb) in rows {
        write!(f, "{user}")?;
        for v in emb.vec() {
            write!(f, ",{v:e}")?;
        }
        writeln!(f)?;
    }
    Ok(())
}

/// Reads `(user_id, values...)` rows as externally produced embeddings.
pub fn read_embeddings_csv(path: impl AsRef<Path>) -> Result<Vec<(usize, ProfileEmbedding)>> {
    let mut r = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .from_path(path)?;
    let mut out = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        let bad = || format_err("embedding csv", format!("bad row {rec:?}"));
        let user: usize = rec.get(0).and_then(|s| s.trim().parse().ok()).ok_or_else(bad)?;
        let vals: Vec<f64> = rec
            .iter()
            .skip(1)
            .map(|s| s.trim().parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| bad())?;
        let emb = ProfileEmbedding::external(vals).map_err(|e| match e {
            Error::Normalization(m) => format_err("embedding csv", m),
            other => other,
        })?;
        out.push((user, emb));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn sample(dims: Dims) -> BehaviorTensor {
        let vals = (0..dims.len()).map(|i| (i as f32).sin()).collect();
        BehaviorTensor::from_values(dims, vals).unwrap()
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.stbt");
        let x = sample(Dims::desk());
        write_tensor(&p, &x).unwrap();
        assert_eq!(read_tensor(&p).unwrap(), x);
    }

    #[test]
    fn wrong_magic_is_rejected() {
        let mut b = encode_tensor(&sample(Dims::new(1, 2, 2, 2).unwrap()));
        b[0] = b'X';
        assert!(matches!(decode_tensor(&b), Err(Error::Format { .. })));
    }

    #[test]
    fn truncated_payload_is_rejected() {
        let b = encode_tensor(&sample(Dims::new(1, 2, 2, 2).unwrap()));
        assert!(decode_tensor(&b[..b.len() - 1]).is_err());
        assert!(decode_tensor(&b[..10]).is_err());
    }

    #[test]
    fn header_dims_must_match_payload() {
        let mut b = encode_tensor(&sample(Dims::new(1, 2, 2, 2).unwrap()));
        b[8..12].copy_from_slice(&2u32.to_le_bytes());
        assert!(decode_tensor(&b).is_err());
    }

    #[test]
    fn overflowing_dims_are_rejected() {
        let mut b = encode_tensor(&sample(Dims::new(1, 1, 1, 1).unwrap()));
        for at in [8, 12, 16, 20] {
            b[at..at + 4].copy_from_slice(&u32::MAX.to_le_bytes());
        }
        assert!(decode_tensor(&b).is_err());
    }

    #[test]
    fn mask_planes_hold_binary_then_weights() {
        let g = Dims::new(1, 1, 1, 3).unwrap().grid();
        let m = EvidenceMask::new(g, vec![true, false, true], vec![0.25, 0.0, 0.5]).unwrap();
        let t = mask_as_tensor(&m);
        assert_eq!(t.values(), &[1.0, 0.0, 1.0, 0.25, 0.0, 0.5]);
    }

    proptest! {
        #[test]
        fn encode_decode_preserves_every_bit(
            c in 1usize..4, t in 1usize..6, h in 1usize..4, w in 1usize..4,
            seed in any::<u32>(),
        ) {
            let dims = Dims::new(c, t, h, w).unwrap();
            let vals: Vec<f32> = (0..dims.len())
                .map(|i| f32::from_bits(((seed as usize).wrapping_mul(2654435761).wrapping_add(i * 40503) % 0x7f00_0000) as u32))
                .collect();
            let x = BehaviorTensor::from_values(dims, vals).unwrap();
            let back = decode_tensor(&encode_tensor(&x)).unwrap();
            let same = back.values().iter().zip(x.values()).all(|(a, b)| a.to_bits() == b.to_bits());
            prop_assert!(same);
        }
    }
}
