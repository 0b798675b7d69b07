//! CVTF tensor files: `CVTF`, u32 version, u8 rank, u32 extents, payload,
//! CRC32. Version 1 holds f32 data. Version 2 holds u32 data and is used
//! for instance maps as (H, W, 2) = [instance id, class id].

use std::collections::BTreeMap;
use std::path::Path;

use crate::codec::{Reader, Writer};
use crate::error::{Error, Result};
use crate::postproc::InstanceMap;
use crate::tensor::TensorF32;

pub const CVTF_MAGIC: &str = "CVTF";
pub const CVTF_VERSION_F32: u32 = 1;
pub const CVTF_VERSION_U32: u32 = 2;

fn header(version: u32, shape: &[usize]) -> Writer {
    let mut w = Writer::new(b"CVTF");
    w.u32(version);
    w.u8(shape.len() as u8);
    for &d in shape {
        w.u32(d as u32);
    }
    w
}

pub fn tensor_to_bytes(t: &TensorF32) -> Vec<u8> {
    let mut w = header(CVTF_VERSION_F32, t.shape());
    w.f32s(t.data());
    w.finish()
}

pub fn tensor_from_bytes(bytes: &[u8]) -> Result<TensorF32> {
    let mut r = Reader::open(bytes, CVTF_MAGIC)?;
    let v = r.u32()?;
    if v != CVTF_VERSION_F32 {
        return Err(Error::VersionUnsupported(v));
    }
    let shape = r.shape()?;
    let data = r.f32s(shape.iter().product())?;
    r.finish()?;
    TensorF32::new(&shape, data)
}

pub fn instance_map_to_bytes(m: &InstanceMap) -> Vec<u8> {
    let mut w = header(CVTF_VERSION_U32, &[m.height, m.width, 2]);
    let mut data = Vec::with_capacity(m.labels.len() * 2);
    for &l in &m.labels {
        data.push(l);
        data.push(if l == 0 { 0 } else { m.class_of(l) });
    }
    w.u32s(&data);
    w.finish()
}

/// Reads an integer instance map. Ids are renumbered 1..=count in raster
/// order; a pixel's class must agree with the other pixels of its id.
pub fn instance_map_from_bytes(bytes: &[u8]) -> Result<InstanceMap> {
    let mut r = Reader::open(bytes, CVTF_MAGIC)?;
    let v = r.u32()?;
    if v != CVTF_VERSION_U32 {
        return Err(Error::VersionUnsupported(v));
    }
    let shape = r.shape()?;
    if shape.len() != 3 || shape[2] != 2 {
        return Err(Error::shape(format!("instance map must be (H, W, 2), got {shape:?}")));
    }
    let data = r.u32s(shape[0] * shape[1] * 2)?;
    r.finish()?;
    let mut classes = BTreeMap::new();
    let mut labels = Vec::with_capacity(shape[0] * shape[1]);
    for px in data.chunks_exact(2) {
        labels.push(px[0]);
        if px[0] != 0 {
            if let Some(prev) = classes.insert(px[0], px[1]) {
                if prev != px[1] {
                    return Err(Error::shape(format!("instance {} has classes {prev} and {}", px[0], px[1])));
                }
            }
        }
    }
    InstanceMap::from_raw(labels, shape[0], shape[1], &classes)
}

pub fn write_tensor(path: &Path, t: &TensorF32) -> Result<()> {
    std::fs::write(path, tensor_to_bytes(t)).map_err(|e| Error::io(path, e))
}

pub fn read_tensor(path: &Path) -> Result<TensorF32> {
    tensor_from_bytes(&std::fs::read(path).map_err(|e| Error::io(path, e))?)
}

pub fn write_instance_map(path: &Path, m: &InstanceMap) -> Result<()> {
    std::fs::write(path, instance_map_to_bytes(m)).map_err(|e| Error::io(path, e))
}

pub fn read_instance_map(path: &Path) -> Result<InstanceMap> {
    instance_map_from_bytes(&std::fs::read(path).map_err(|e| Error::io(path, e))?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tensor_round_trip() {
        let t = TensorF32::from_fn(&[2, 3, 3], |i| i as f32 * 0.5);
        assert_eq!(tensor_from_bytes(&tensor_to_bytes(&t)).unwrap(), t);
    }

    #[test]
    fn instance_round_trip() {
        let classes = [(1, 3), (2, 1)].into_iter().collect();
        let m = InstanceMap::from_raw(vec![0, 1, 1, 2, 2, 0], 2, 3, &classes).unwrap();
        assert_eq!(instance_map_from_bytes(&instance_map_to_bytes(&m)).unwrap(), m);
    }

    #[test]
    fn corrupt_and_wrong_version() {
        let t = TensorF32::zeros(&[2, 2]);
        let mut b = tensor_to_bytes(&t);
        b[10] ^= 1;
        assert!(matches!(tensor_from_bytes(&b), Err(Error::ChecksumMismatch { .. })));
        let m = InstanceMap::empty(2, 2);
        assert!(matches!(tensor_from_bytes(&instance_map_to_bytes(&m)), Err(Error::VersionUnsupported(2))));
    }
}
