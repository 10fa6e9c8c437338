//! Binary checkpoint format.
//!
//! ```text
//! magic        7 bytes   "FLOPSD1"
//! layer count  u32 LE    number of entries in layer_sizes
//! sizes        u32 LE    one per layer
//! activation   u8        0 = tanh, 1 = silu
//! params       f64 LE    param_count values in canonical order
//! ```

use std::io::{Read, Write};
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::net::{Activation, NetSpec, ParamVector};

pub const MAGIC: &[u8; 7] = b"FLOPSD1";

pub fn encode(spec: &NetSpec, params: &ParamVector) -> Result<Vec<u8>> {
    if params.len() != spec.param_count() {
        return Err(Error::DimensionMismatch {
            what: "checkpoint parameters",
            expected: spec.param_count(),
            got: params.len(),
        });
    }
    let sizes = spec.layer_sizes();
    let mut out = Vec::with_capacity(7 + 4 + 4 * sizes.len() + 1 + 8 * params.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(sizes.len() as u32).to_le_bytes());
    for &s in sizes {
        out.extend_from_slice(&(s as u32).to_le_bytes());
    }
    out.push(spec.activation().tag());
    for v in params.iter() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)
        .map_err(|_| Error::Checkpoint("truncated header".into()))?;
    Ok(u32::from_le_bytes(b))
}

pub fn decode(bytes: &[u8]) -> Result<(NetSpec, ParamVector)> {
    let mut r = bytes;
    let mut magic = [0u8; 7];
    r.read_exact(&mut magic)
        .map_err(|_| Error::Checkpoint("truncated magic".into()))?;
    if &magic != MAGIC {
        return Err(Error::Checkpoint("bad magic".into()));
    }
    let n = read_u32(&mut r)? as usize;
    if n > 64 {
        return Err(Error::Checkpoint(format!("implausible layer count {n}")));
    }
    let sizes = (0..n)
        .map(|_| read_u32(&mut r).map(|s| s as usize))
        .collect::<Result<Vec<_>>>()?;
    let mut tag = [0u8; 1];
    r.read_exact(&mut tag)
        .map_err(|_| Error::Checkpoint("missing activation tag".into()))?;
    let act =
        Activation::from_tag(tag[0]).ok_or_else(|| Error::Checkpoint(format!("unknown activation tag {}", tag[0])))?;
    let spec = NetSpec::new(sizes, act)?;
    let count = spec.param_count();
    if r.len() != 8 * count {
        return Err(Error::Checkpoint(format!(
            "expected {} parameter bytes, found {}",
            8 * count,
            r.len()
        )));
    }
    let params = r
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect::<Vec<_>>();
    if !params.iter().all(|v| v.is_finite()) {
        return Err(Error::Checkpoint("non-finite parameter".into()));
    }
    Ok((spec, ParamVector(params)))
}

pub fn save(path: &Path, spec: &NetSpec, params: &ParamVector) -> Result<()> {
    let bytes = encode(spec, params)?;
    let mut f = std::fs::File::create(path)?;
    f.write_all(&bytes)?;
    Ok(())
}

pub fn load(path: &Path) -> Result<(NetSpec, ParamVector)> {
    let bytes = std::fs::read(path).map_err(|e| Error::Checkpoint(format!("cannot read {}: {e}", path.display())))?;
    decode(&bytes)
}

/// SHA-256 of the encoded checkpoint, hex.
pub fn hash(spec: &NetSpec, params: &ParamVector) -> Result<String> {
    Ok(sha256_hex(&encode(spec, params)?))
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::net::forward;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn header_layout_is_fixed() {
        let spec = NetSpec::new(vec![2, 3, 2], Activation::Silu).unwrap();
        let bytes = encode(&spec, &spec.zero_params()).unwrap();
        assert_eq!(&bytes[..7], b"FLOPSD1");
        assert_eq!(&bytes[7..11], &3u32.to_le_bytes());
        assert_eq!(&bytes[11..23], &[2, 0, 0, 0, 3, 0, 0, 0, 2, 0, 0, 0]);
        assert_eq!(bytes[23], 1);
        assert_eq!(bytes.len(), 24 + 17 * 8);
    }

    #[test]
    fn corrupt_inputs_are_rejected() {
        let spec = NetSpec::new(vec![2, 3, 2], Activation::Tanh).unwrap();
        let mut bytes = encode(&spec, &spec.zero_params()).unwrap();
        assert!(decode(&bytes[..bytes.len() - 1]).is_err());
        assert!(decode(&bytes[..5]).is_err());
        bytes[0] = b'X';
        assert!(decode(&bytes).is_err());
    }

    proptest! {
        #[test]
        fn roundtrip_preserves_forward_bits(seed in 0u64..1000, h in 1usize..12, tanh in any::<bool>()) {
            let act = if tanh { Activation::Tanh } else { Activation::Silu };
            let spec = NetSpec::new(vec![3, h, 2], act).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let params = spec.init_params(&mut rng);
            let (spec2, params2) = decode(&encode(&spec, &params).unwrap()).unwrap();
            prop_assert_eq!(&spec, &spec2);
            let x = [0.25, -1.5, 3.0];
            let a = forward(&spec, &params, &x).unwrap();
            let b = forward(&spec2, &params2, &x).unwrap();
            prop_assert_eq!(a.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
                            b.iter().map(|v| v.to_bits()).collect::<Vec<_>>());
        }
    }
}
