use crate::error::{Error, Result};
use crate::mask::{MaskLayout, PruneMask};
use crate::nn::{ArchSpec, DenseLayer, Model};
use crate::scalar::{Precision, Scalar};

fn layer_bytes(groups: usize) -> usize {
    groups.div_ceil(8)
}

fn pack_bits(bits: &[bool], out: &mut Vec<u8>) {
    for chunk in bits.chunks(8) {
        let mut byte = 0u8;
        for (i, &b) in chunk.iter().enumerate() {
            if b {
                byte |= 1 << i;
            }
        }
        out.push(byte);
    }
}

fn unpack_bits(bytes: &[u8], count: usize, offset: usize) -> Result<Vec<bool>> {
    let bits: Vec<bool> = (0..count).map(|i| bytes[i / 8] >> (i % 8) & 1 == 1).collect();
    if !count.is_multiple_of(8) {
        let last = bytes[bytes.len() - 1];
        if last >> (count % 8) != 0 {
            return Err(Error::protocol(
                offset + bytes.len() - 1,
                "non-zero padding bits in packed layer",
            ));
        }
    }
    Ok(bits)
}

/// Packs every layer of the mask; `Σ L(m)` payload bits before padding.
pub fn encode_mask(mask: &PruneMask) -> Vec<u8> {
    let mut out = Vec::with_capacity(mask.layers().iter().map(|l| layer_bytes(l.len())).sum());
    for layer in mask.layers() {
        pack_bits(layer, &mut out);
    }
    out
}

pub fn decode_mask(bytes: &[u8], layout: &MaskLayout) -> Result<PruneMask> {
    let expected: usize = layout.groups.iter().map(|&g| layer_bytes(g)).sum();
    if bytes.len() < expected {
        return Err(Error::protocol(
            bytes.len(),
            format!("truncated mask: {} of {expected} bytes", bytes.len()),
        ));
    }
    if bytes.len() > expected {
        return Err(Error::protocol(expected, "trailing bytes after mask"));
    }
    let mut offset = 0;
    let mut layers = Vec::with_capacity(layout.num_layers());
    for &g in &layout.groups {
        let n = layer_bytes(g);
        layers.push(unpack_bits(&bytes[offset..offset + n], g, offset)?);
        offset += n;
    }
    Ok(PruneMask::from_layers(layers))
}

/// Encoded mask body as carried by `MaskUpload` and `GlobalMask`.
///
/// A delta body lists only the layers that differ from a reference mask both
/// ends already hold: a layer bitmap followed by those layers' packed bits.
/// An empty delta body means "unchanged".
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MaskBody {
    pub delta: bool,
    pub bytes: Vec<u8>,
}

impl MaskBody {
    pub fn full(mask: &PruneMask) -> Self {
        MaskBody {
            delta: false,
            bytes: encode_mask(mask),
        }
    }

    /// Delta against `reference`, falling back to a full body whenever the
    /// delta would not be strictly smaller.
    pub fn delta(mask: &PruneMask, reference: &PruneMask) -> Result<Self> {
        reference.check_layout(&mask.layout())?;
        let changed: Vec<bool> = mask
            .layers()
            .iter()
            .zip(reference.layers())
            .map(|(a, b)| a != b)
            .collect();
        if !changed.iter().any(|&c| c) {
            return Ok(MaskBody {
                delta: true,
                bytes: Vec::new(),
            });
        }
        let mut bytes = Vec::new();
        pack_bits(&changed, &mut bytes);
        for (layer, _) in mask.layers().iter().zip(&changed).filter(|(_, &c)| c) {
            pack_bits(layer, &mut bytes);
        }
        let full = MaskBody::full(mask);
        if bytes.len() < full.bytes.len() {
            Ok(MaskBody { delta: true, bytes })
        } else {
            Ok(full)
        }
    }

    /// Decodes against the session layout; delta bodies need the reference.
    pub fn decode(&self, layout: &MaskLayout, reference: Option<&PruneMask>) -> Result<PruneMask> {
        if !self.delta {
            return decode_mask(&self.bytes, layout);
        }
        let reference = reference.ok_or_else(|| Error::protocol(0, "delta mask without a reference mask"))?;
        reference.check_layout(layout)?;
        if self.bytes.is_empty() {
            return Ok(reference.clone());
        }
        let m = layout.num_layers();
        let bitmap_len = layer_bytes(m);
        if self.bytes.len() < bitmap_len {
            return Err(Error::protocol(self.bytes.len(), "truncated delta layer bitmap"));
        }
        let changed = unpack_bits(&self.bytes[..bitmap_len], m, 0)?;
        let mut offset = bitmap_len;
        let mut mask = reference.clone();
        for (i, &g) in layout.groups.iter().enumerate() {
            if !changed[i] {
                continue;
            }
            let n = layer_bytes(g);
            if self.bytes.len() < offset + n {
                return Err(Error::protocol(self.bytes.len(), format!("truncated delta layer {i}")));
            }
            let bits = unpack_bits(&self.bytes[offset..offset + n], g, offset)?;
            mask.layer_mut(i).copy_from_slice(&bits);
            offset += n;
        }
        if offset != self.bytes.len() {
            return Err(Error::protocol(offset, "trailing bytes after delta mask"));
        }
        Ok(mask)
    }
}

fn write_scalar<T: Scalar>(v: T, precision: Precision, out: &mut Vec<u8>) {
    match precision {
        Precision::F32 => out.extend_from_slice(&(v.to_f64_lossless() as f32).to_le_bytes()),
        Precision::F64 => out.extend_from_slice(&v.to_f64_lossless().to_le_bytes()),
    }
}

fn read_scalar<T: Scalar>(bytes: &[u8], precision: Precision) -> T {
    match precision {
        Precision::F32 => T::from_f64_lossy(f64::from(f32::from_le_bytes(bytes.try_into().expect("4 bytes")))),
        Precision::F64 => T::from_f64_lossy(f64::from_le_bytes(bytes.try_into().expect("8 bytes"))),
    }
}

fn keeps(skip: Option<&PruneMask>, m: usize, l: usize) -> bool {
    match skip {
        Some(mask) if m < mask.num_layers() => mask.get(m, l),
        _ => true,
    }
}

/// Serializes weights at the wire precision. With `skip`, groups pruned in
/// that mask are omitted; the receiver restores them as zeros.
pub fn encode_weights<T: Scalar>(model: &Model<T>, precision: Precision, skip: Option<&PruneMask>) -> Result<Vec<u8>> {
    if let Some(mask) = skip {
        mask.check_layout(&model.mask_layout())?;
    }
    let mut out = Vec::with_capacity(model.param_count() * precision.bytes());
    for (m, layer) in model.layers().iter().enumerate() {
        for l in 0..layer.out_dim {
            if keeps(skip, m, l) {
                for &w in layer.row(l) {
                    write_scalar(w, precision, &mut out);
                }
            }
        }
        for l in 0..layer.out_dim {
            if keeps(skip, m, l) {
                write_scalar(layer.bias[l], precision, &mut out);
            }
        }
    }
    Ok(out)
}

pub fn decode_weights<T: Scalar>(
    bytes: &[u8],
    arch: &ArchSpec,
    precision: Precision,
    skip: Option<&PruneMask>,
) -> Result<Model<T>> {
    let template = Model::<T>::zeros(arch)?;
    if let Some(mask) = skip {
        mask.check_layout(&template.mask_layout())?;
    }
    let width = precision.bytes();
    let mut offset = 0;
    let next = |offset: &mut usize| -> Result<T> {
        let end = *offset + width;
        if end > bytes.len() {
            return Err(Error::protocol(bytes.len(), "truncated weight payload"));
        }
        let v = read_scalar(&bytes[*offset..end], precision);
        *offset = end;
        Ok(v)
    };
    let mut layers = Vec::with_capacity(template.layers().len());
    for (m, shape) in template.layers().iter().enumerate() {
        let mut layer = DenseLayer::<T>::zeros(shape.in_dim, shape.out_dim);
        for l in 0..layer.out_dim {
            if keeps(skip, m, l) {
                for i in 0..layer.in_dim {
                    layer.weights[l * layer.in_dim + i] = next(&mut offset)?;
                }
            }
        }
        for l in 0..layer.out_dim {
            if keeps(skip, m, l) {
                layer.bias[l] = next(&mut offset)?;
            }
        }
        layers.push(layer);
    }
    if offset != bytes.len() {
        return Err(Error::protocol(offset, "trailing bytes after weights"));
    }
    Model::from_layers(arch, layers)
}

/// Encoded weights as carried by the weight-bearing messages.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct WeightsBody {
    /// Pruned groups omitted relative to the session's current global mask.
    pub sparse: bool,
    pub bytes: Vec<u8>,
}

impl WeightsBody {
    pub fn encode<T: Scalar>(model: &Model<T>, precision: Precision, skip: Option<&PruneMask>) -> Result<Self> {
        Ok(WeightsBody {
            sparse: skip.is_some(),
            bytes: encode_weights(model, precision, skip)?,
        })
    }

    pub fn decode<T: Scalar>(
        &self,
        arch: &ArchSpec,
        precision: Precision,
        mask: Option<&PruneMask>,
    ) -> Result<Model<T>> {
        let skip = if self.sparse {
            Some(mask.ok_or_else(|| Error::protocol(0, "sparse weights without a mask"))?)
        } else {
            None
        };
        decode_weights(&self.bytes, arch, precision, skip)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn mask_strategy() -> impl Strategy<Value = PruneMask> {
        prop::collection::vec(prop::collection::vec(any::<bool>(), 0..40), 0..6).prop_map(PruneMask::from_layers)
    }

    #[test]
    fn hand_packed_byte() {
        let mask = PruneMask::from_layers(vec![vec![true, false, true, false, true, false, true, false]]);
        assert_eq!(encode_mask(&mask), vec![0x55]);
        let layout = MaskLayout::new(vec![8]);
        assert_eq!(decode_mask(&[0x55], &layout).unwrap(), mask);
    }

    #[test]
    fn layers_pad_independently() {
        let mask = PruneMask::from_layers(vec![vec![true; 3], vec![true; 9]]);
        assert_eq!(encode_mask(&mask), vec![0b111, 0xff, 0x01]);
    }

    #[test]
    fn decode_rejects_bad_lengths_and_padding() {
        let layout = MaskLayout::new(vec![3]);
        assert!(matches!(decode_mask(&[], &layout), Err(Error::Protocol { .. })));
        assert!(matches!(
            decode_mask(&[1, 0], &layout),
            Err(Error::Protocol { offset: 1, .. })
        ));
        assert!(matches!(decode_mask(&[0b1000], &layout), Err(Error::Protocol { .. })));
    }

    #[test]
    fn empty_delta_carries_reference_forward() {
        let layout = MaskLayout::new(vec![5, 9]);
        let prev = PruneMask::from_layers(vec![vec![true, false, true, true, false], vec![true; 9]]);
        let body = MaskBody::delta(&prev, &prev).unwrap();
        assert!(body.delta && body.bytes.is_empty());
        assert_eq!(body.decode(&layout, Some(&prev)).unwrap(), prev);
        assert!(body.decode(&layout, None).is_err());
    }

    #[test]
    fn delta_only_lists_changed_layers() {
        let layout = MaskLayout::new(vec![16, 16, 16]);
        let prev = PruneMask::all_ones(&layout);
        let mut next = prev.clone();
        next.set(1, 3, false);
        let body = MaskBody::delta(&next, &prev).unwrap();
        assert!(body.delta);
        assert_eq!(body.bytes, vec![0b010, 0xf7, 0xff]);
        assert_eq!(body.decode(&layout, Some(&prev)).unwrap(), next);
    }

    #[test]
    fn weights_round_trip_and_sparse_skip() {
        let arch = ArchSpec::mlp(&[3, 4, 2]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let model = Model::<f64>::init(&arch, &mut rng).unwrap();
        let dense = encode_weights(&model, Precision::F64, None).unwrap();
        assert_eq!(dense.len(), arch.param_count() * 8);
        assert_eq!(
            decode_weights::<f64>(&dense, &arch, Precision::F64, None).unwrap(),
            model
        );

        let f32_bytes = encode_weights(&model, Precision::F32, None).unwrap();
        assert_eq!(f32_bytes.len(), arch.param_count() * 4);
        let back: Model<f64> = decode_weights(&f32_bytes, &arch, Precision::F32, None).unwrap();
        assert_eq!(back, model.cast::<f32>().cast::<f64>());

        let mut mask = PruneMask::all_ones(&model.mask_layout());
        mask.set(0, 1, false);
        let pruned = crate::scoring::apply_mask(&model, &mask).unwrap();
        let body = WeightsBody::encode(&pruned, Precision::F64, Some(&mask)).unwrap();
        assert_eq!(body.bytes.len(), (arch.param_count() - 4) * 8);
        assert_eq!(body.decode::<f64>(&arch, Precision::F64, Some(&mask)).unwrap(), pruned);
        assert!(decode_weights::<f64>(&dense[1..], &arch, Precision::F64, None).is_err());
        let mut long = dense.clone();
        long.push(0);
        assert!(decode_weights::<f64>(&long, &arch, Precision::F64, None).is_err());
    }

    proptest! {
        #[test]
        fn mask_round_trip(mask in mask_strategy()) {
            let bytes = encode_mask(&mask);
            prop_assert_eq!(bytes.len(), mask.layers().iter().map(|l| l.len().div_ceil(8)).sum::<usize>());
            prop_assert_eq!(decode_mask(&bytes, &mask.layout()).unwrap(), mask);
        }

        #[test]
        fn delta_never_exceeds_full(
            rounds in prop::collection::vec(prop::collection::vec(0.0..1.0f64, 60), 1..8),
        ) {
            let layout = MaskLayout::new(vec![8, 20, 32]);
            let mut prev = PruneMask::all_ones(&layout);
            let (mut full_total, mut delta_total) = (0, 0);
            for draws in rounds {
                let mut next = prev.clone();
                let mut k = 0;
                for m in 0..3 {
                    for l in 0..layout.groups[m] {
                        if draws[k % 60] < 0.15 {
                            next.set(m, l, false);
                        }
                        k += 1;
                    }
                }
                let delta = MaskBody::delta(&next, &prev).unwrap();
                prop_assert_eq!(delta.decode(&layout, Some(&prev)).unwrap(), next.clone());
                full_total += MaskBody::full(&next).bytes.len();
                delta_total += delta.bytes.len();
                prev = next;
            }
            prop_assert!(delta_total <= full_total);
        }
    }
}
