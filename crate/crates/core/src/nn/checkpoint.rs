//! Binary checkpoint records for [`PersonalModel`].
//!
//! Layout (all integers and floats little-endian):
//!
//! ```text
//! magic        4 bytes  "PFDL"
//! version      u32
//! input_dim    u32
//! n_hidden     u32
//! hidden_dims  u32 × n_hidden
//! num_classes  u32
//! layers       trunk[0..c], cls_head, aux_head; each as weights (row-major,
//!              out_dim × in_dim) then bias, f64
//! ```

use std::io::{Read, Write};

use super::{ArchSpec, PersonalModel};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"PFDL";
pub const VERSION: u32 = 1;

pub(crate) fn write_u32<W: Write>(w: &mut W, v: u32) -> std::io::Result<()> {
    w.write_all(&v.to_le_bytes())
}

pub(crate) fn write_u64<W: Write>(w: &mut W, v: u64) -> std::io::Result<()> {
    w.write_all(&v.to_le_bytes())
}

pub(crate) fn write_f64<W: Write>(w: &mut W, v: f64) -> std::io::Result<()> {
    w.write_all(&v.to_le_bytes())
}

pub(crate) fn read_u32<R: Read>(r: &mut R) -> std::io::Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

pub(crate) fn read_u64<R: Read>(r: &mut R) -> std::io::Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

pub(crate) fn read_f64<R: Read>(r: &mut R) -> std::io::Result<f64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(f64::from_le_bytes(b))
}

fn corrupt(msg: impl Into<String>) -> Error {
    Error::Data(format!("checkpoint: {}", msg.into()))
}

fn dim(v: usize) -> Result<u32> {
    u32::try_from(v).map_err(|_| corrupt(format!("dimension {v} does not fit in u32")))
}

pub fn write_arch<W: Write>(w: &mut W, arch: &ArchSpec) -> Result<()> {
    let io = |e| corrupt(format!("write failed: {e}"));
    write_u32(w, dim(arch.input_dim)?).map_err(io)?;
    write_u32(w, dim(arch.hidden_dims.len())?).map_err(io)?;
    for &h in &arch.hidden_dims {
        write_u32(w, dim(h)?).map_err(io)?;
    }
    write_u32(w, dim(arch.num_classes)?).map_err(io)?;
    Ok(())
}

pub fn read_arch<R: Read>(r: &mut R) -> Result<ArchSpec> {
    let io = |e| corrupt(format!("truncated arch: {e}"));
    let input_dim = read_u32(r).map_err(io)? as usize;
    let n_hidden = read_u32(r).map_err(io)? as usize;
    if n_hidden > 1024 {
        return Err(corrupt(format!("implausible hidden layer count {n_hidden}")));
    }
    let hidden_dims = (0..n_hidden)
        .map(|_| read_u32(r).map(|v| v as usize))
        .collect::<std::io::Result<Vec<_>>>()
        .map_err(io)?;
    let num_classes = read_u32(r).map_err(io)? as usize;
    ArchSpec::new(input_dim, hidden_dims, num_classes).map_err(|e| corrupt(e.to_string()))
}

/// Writes the parameter arrays only, without magic or arch.
pub(crate) fn write_params<W: Write>(w: &mut W, model: &PersonalModel) -> Result<()> {
    for v in model.values() {
        write_f64(w, *v).map_err(|e| corrupt(format!("write failed: {e}")))?;
    }
    Ok(())
}

pub(crate) fn read_params<R: Read>(r: &mut R, arch: &ArchSpec) -> Result<PersonalModel> {
    let mut model = PersonalModel::zeros(arch)?;
    for v in model.values_mut() {
        *v = read_f64(r).map_err(|e| corrupt(format!("truncated parameters: {e}")))?;
    }
    if !model.is_finite() {
        return Err(corrupt("non-finite parameter"));
    }
    Ok(model)
}

pub fn write_model<W: Write>(w: &mut W, model: &PersonalModel) -> Result<()> {
    w.write_all(MAGIC)
        .and_then(|_| write_u32(w, VERSION))
        .map_err(|e| corrupt(format!("write failed: {e}")))?;
    write_arch(w, &model.arch)?;
    write_params(w, model)
}

pub fn read_model<R: Read>(r: &mut R) -> Result<PersonalModel> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)
        .map_err(|e| corrupt(format!("missing header: {e}")))?;
    if &magic != MAGIC {
        return Err(corrupt(format!("bad magic {magic:?}")));
    }
    let version = read_u32(r).map_err(|e| corrupt(format!("missing version: {e}")))?;
    if version != VERSION {
        return Err(corrupt(format!("unsupported version {version}")));
    }
    let arch = read_arch(r)?;
    read_params(r, &arch)
}

pub fn encode(model: &PersonalModel) -> Vec<u8> {
    let mut buf = Vec::with_capacity(16 + model.param_count() * 8);
    write_model(&mut buf, model).expect("writing to a Vec cannot fail");
    buf
}

pub fn decode(bytes: &[u8]) -> Result<PersonalModel> {
    let mut cursor = bytes;
    let model = read_model(&mut cursor)?;
    if !cursor.is_empty() {
        return Err(corrupt(format!("{} trailing bytes", cursor.len())));
    }
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn header_layout() {
        let arch = ArchSpec::new(2, vec![4], 3).unwrap();
        let m = PersonalModel::init(&arch, 1).unwrap();
        let bytes = encode(&m);
        assert_eq!(&bytes[..4], b"PFDL");
        assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), 1);
        assert_eq!(u32::from_le_bytes(bytes[8..12].try_into().unwrap()), 2);
        assert_eq!(u32::from_le_bytes(bytes[12..16].try_into().unwrap()), 1);
        assert_eq!(u32::from_le_bytes(bytes[16..20].try_into().unwrap()), 4);
        assert_eq!(u32::from_le_bytes(bytes[20..24].try_into().unwrap()), 3);
        assert_eq!(bytes.len(), 24 + 32 * 8);
        // First parameter is trunk[0].weights[0][0].
        let first = f64::from_le_bytes(bytes[24..32].try_into().unwrap());
        assert_eq!(first, m.trunk[0].weights[0]);
        // Last parameter is the auxiliary bias.
        let last = f64::from_le_bytes(bytes[bytes.len() - 8..].try_into().unwrap());
        assert_eq!(last, m.aux_head.bias[0]);
    }

    #[test]
    fn corrupted_records_are_rejected() {
        let arch = ArchSpec::new(3, vec![2], 2).unwrap();
        let bytes = encode(&PersonalModel::init(&arch, 0).unwrap());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(decode(&bad).is_err());
        assert!(decode(&bytes[..bytes.len() - 1]).is_err());
        let mut long = bytes.clone();
        long.push(0);
        assert!(decode(&long).is_err());
        let mut ver = bytes;
        ver[4] = 9;
        assert!(decode(&ver).is_err());
    }

    proptest! {
        #[test]
        fn roundtrip_is_bit_exact(seed in any::<u64>(), hidden in prop::collection::vec(1usize..6, 1..3)) {
            let arch = ArchSpec::new(3, hidden, 4).unwrap();
            let m = PersonalModel::init(&arch, seed).unwrap();
            prop_assert_eq!(decode(&encode(&m)).unwrap(), m);
        }
    }
}
