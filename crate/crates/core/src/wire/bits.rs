//! Closed-form bit counts for full-precision weights versus one-bit-per-group
//! masks, plus the raw-data upload charged to centralized training.

use crate::nn::ArchSpec;

/// `layers` identical layers of `groups` groups with `weights_per_group`
/// scalars each.
///
/// `scaled_by_precision` is false only for terms quoted from a published
/// expression that leaves the precision factor out; live architectures
/// always scale.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BitTerm {
    pub layers: u64,
    pub groups: u64,
    pub weights_per_group: u64,
    pub scaled_by_precision: bool,
}

impl BitTerm {
    pub fn new(groups: u64, weights_per_group: u64) -> Self {
        BitTerm {
            layers: 1,
            groups,
            weights_per_group,
            scaled_by_precision: true,
        }
    }
}

/// Bits needed to send every scalar at `b` bits each.
pub fn dense_bits(terms: &[BitTerm], b: u32) -> u64 {
    terms
        .iter()
        .map(|t| {
            let scalars = t.layers * t.groups * t.weights_per_group;
            if t.scaled_by_precision {
                scalars * u64::from(b)
            } else {
                scalars
            }
        })
        .sum()
}

/// One bit per group; a group's bias rides on its bit.
pub fn mask_bits(terms: &[BitTerm]) -> u64 {
    terms.iter().map(|t| t.layers * t.groups).sum()
}

/// Fraction of the dense traffic saved by sending masks instead.
pub fn savings(terms: &[BitTerm], b: u32) -> f64 {
    let dense = dense_bits(terms, b);
    if dense == 0 {
        return 0.0;
    }
    1.0 - mask_bits(terms) as f64 / dense as f64
}

/// Terms for the prunable layers of a live architecture.
pub fn arch_terms(arch: &ArchSpec) -> Vec<BitTerm> {
    arch.prunable_layers()
        .map(|l| BitTerm::new(l.groups() as u64, l.group_size() as u64))
        .collect()
}

/// Terms for every dense layer, for the cost of a full weight upload.
pub fn arch_weight_terms(arch: &ArchSpec) -> Vec<BitTerm> {
    arch.dense_layers()
        .map(|l| BitTerm::new(l.groups() as u64, l.group_size() as u64))
        .collect()
}

/// The 16-layer VGG sketch used for per-iteration bandwidth comparisons:
/// 2×64, 2×128, 3×256 and 6×512 convolution filters of 3×3, then 3 fully
/// connected layers of 4096 units.
///
/// The published dense expression is reproduced term by term as written:
/// its 256-filter term carries a single kernel factor of 3 and its
/// 512-filter term omits the precision factor. Evaluating it at `b = 64`
/// gives 1,182,720 bits; the mask side gives 16,512 bits.
pub fn vgg16_sketch_terms() -> Vec<BitTerm> {
    vec![
        BitTerm {
            layers: 2,
            groups: 64,
            weights_per_group: 9,
            scaled_by_precision: true,
        },
        BitTerm {
            layers: 2,
            groups: 128,
            weights_per_group: 9,
            scaled_by_precision: true,
        },
        BitTerm {
            layers: 3,
            groups: 256,
            weights_per_group: 3,
            scaled_by_precision: true,
        },
        BitTerm {
            layers: 6,
            groups: 512,
            weights_per_group: 9,
            scaled_by_precision: false,
        },
        BitTerm {
            layers: 3,
            groups: 4096,
            weights_per_group: 1,
            scaled_by_precision: true,
        },
    ]
}

/// One-shot upload of a raw dataset: every feature at `bits_per_value`, plus
/// `label_bits` per sample.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct RawUpload {
    pub samples: u64,
    pub values_per_sample: u64,
    pub bits_per_value: u64,
    pub label_bits: u64,
}

impl RawUpload {
    pub fn bits(&self) -> u64 {
        self.samples * (self.values_per_sample * self.bits_per_value + self.label_bits)
    }
}

pub fn bits_to_bytes(bits: u64) -> u64 {
    bits.div_ceil(8)
}

/// Binary units: 1 KB = 1024 bytes.
pub fn bits_to_kib(bits: u64) -> f64 {
    bits_to_bytes(bits) as f64 / 1024.0
}

pub fn bits_to_mib(bits: u64) -> f64 {
    bits_to_bytes(bits) as f64 / (1024.0 * 1024.0)
}

pub fn bits_to_gib(bits: u64) -> f64 {
    bits_to_bytes(bits) as f64 / (1024.0 * 1024.0 * 1024.0)
}
