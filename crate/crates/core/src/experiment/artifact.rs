//! Binary model artifact.
//!
//! ```text
//! "MPFA" | version u16 | precision bits u8 | layer count u32
//! per layer: kind u8 (1 dense, 2 relu) | in u32 | out u32
//! mask length u32 | packed mask | weight length u32 | dense weights
//! ```
//!
//! Integers are little-endian; the mask and weights use the wire encodings.

use std::io::{Read, Write};

use crate::error::{Error, Result};
use crate::mask::PruneMask;
use crate::nn::{ArchSpec, LayerSpec, Model};
use crate::scalar::{Precision, Scalar};
use crate::wire::{decode_mask, decode_weights, encode_mask, encode_weights};

pub const ARTIFACT_MAGIC: [u8; 4] = *b"MPFA";
pub const ARTIFACT_VERSION: u16 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Artifact<T: Scalar> {
    pub precision: Precision,
    pub model: Model<T>,
    pub mask: PruneMask,
}

pub fn write_artifact<T: Scalar, W: Write>(
    model: &Model<T>,
    mask: &PruneMask,
    precision: Precision,
    mut out: W,
) -> Result<()> {
    mask.check_layout(&model.mask_layout())?;
    let mut buf = Vec::new();
    buf.extend_from_slice(&ARTIFACT_MAGIC);
    buf.extend_from_slice(&ARTIFACT_VERSION.to_le_bytes());
    buf.push(precision.bits() as u8);
    let layers = &model.arch().layers;
    buf.extend_from_slice(&(layers.len() as u32).to_le_bytes());
    for layer in layers {
        let (kind, i, o) = match *layer {
            LayerSpec::Dense { in_dim, out_dim } => (1u8, in_dim, out_dim),
            LayerSpec::Relu { dim } => (2u8, dim, dim),
        };
        buf.push(kind);
        buf.extend_from_slice(&(i as u32).to_le_bytes());
        buf.extend_from_slice(&(o as u32).to_le_bytes());
    }
    let mask_bytes = encode_mask(mask);
    buf.extend_from_slice(&(mask_bytes.len() as u32).to_le_bytes());
    buf.extend_from_slice(&mask_bytes);
    let weights = encode_weights(model, precision, None)?;
    buf.extend_from_slice(&(weights.len() as u32).to_le_bytes());
    buf.extend_from_slice(&weights);
    out.write_all(&buf)?;
    Ok(())
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::protocol(self.pos, "truncated artifact"))?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
}

pub fn read_artifact<T: Scalar, R: Read>(mut input: R) -> Result<Artifact<T>> {
    let mut bytes = Vec::new();
    input.read_to_end(&mut bytes)?;
    let mut c = Cursor { bytes: &bytes, pos: 0 };
    if c.take(4)? != ARTIFACT_MAGIC {
        return Err(Error::protocol(0, "not a model artifact"));
    }
    let version = u16::from_le_bytes(c.take(2)?.try_into().expect("2 bytes"));
    if version != ARTIFACT_VERSION {
        return Err(Error::protocol(4, format!("unsupported artifact version {version}")));
    }
    let precision = Precision::try_from(u32::from(c.take(1)?[0])).map_err(|m| Error::protocol(6, m))?;
    let count = c.u32()? as usize;
    let mut layers = Vec::with_capacity(count.min(1024));
    for _ in 0..count {
        let at = c.pos;
        let kind = c.take(1)?[0];
        let i = c.u32()? as usize;
        let o = c.u32()? as usize;
        layers.push(match kind {
            1 => LayerSpec::Dense { in_dim: i, out_dim: o },
            2 if i == o => LayerSpec::Relu { dim: i },
            _ => return Err(Error::protocol(at, "bad layer record")),
        });
    }
    let arch = ArchSpec { layers };
    arch.validate()?;
    let mask_len = c.u32()? as usize;
    let mask = decode_mask(c.take(mask_len)?, &crate::mask::MaskLayout::from_arch(&arch))?;
    let weights_len = c.u32()? as usize;
    let model = decode_weights(c.take(weights_len)?, &arch, precision, None)?;
    if c.pos != bytes.len() {
        return Err(Error::protocol(c.pos, "trailing bytes after artifact"));
    }
    Ok(Artifact { precision, model, mask })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scoring::apply_mask;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn round_trip_and_corruption() {
        let arch = ArchSpec::mlp(&[5, 7, 3, 2]).unwrap();
        let model = Model::<f64>::init(&arch, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let mut mask = PruneMask::all_ones(&model.mask_layout());
        mask.set(0, 3, false);
        mask.set(1, 0, false);
        let model = apply_mask(&model, &mask).unwrap();

        let mut buf = Vec::new();
        write_artifact(&model, &mask, Precision::F64, &mut buf).unwrap();
        let back: Artifact<f64> = read_artifact(buf.as_slice()).unwrap();
        assert_eq!(back.model, model);
        assert_eq!(back.mask, mask);
        assert_eq!(back.precision, Precision::F64);

        for cut in [0, 3, 7, 20, buf.len() - 1] {
            assert!(read_artifact::<f64, _>(&buf[..cut]).is_err());
        }
        let mut extra = buf.clone();
        extra.push(0);
        assert!(read_artifact::<f64, _>(extra.as_slice()).is_err());
        let mut bad = buf.clone();
        bad[0] = b'X';
        assert!(read_artifact::<f64, _>(bad.as_slice()).is_err());
    }

    #[test]
    fn f32_artifact_is_half_the_weights() {
        let arch = ArchSpec::mlp(&[4, 4, 2]).unwrap();
        let model = Model::<f32>::init(&arch, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        let mask = PruneMask::all_ones(&model.mask_layout());
        let mut a = Vec::new();
        let mut b = Vec::new();
        write_artifact(&model, &mask, Precision::F32, &mut a).unwrap();
        write_artifact(&model, &mask, Precision::F64, &mut b).unwrap();
        assert_eq!(b.len() - a.len(), model.param_count() * 4);
        let back: Artifact<f32> = read_artifact(a.as_slice()).unwrap();
        assert_eq!(back.model, model);
    }
}
