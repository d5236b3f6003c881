//! Seeded codec fuzzing.
//!
//! Round-trip cases build a random architecture, mask, and model, push them
//! through the mask, weight, and frame codecs, and compare the result bit
//! for bit. Corrupt cases mutate valid encodings (bit flips, truncation,
//! extension, random bytes) and require every decoder to return rather than
//! panic.

use std::panic::{catch_unwind, AssertUnwindSafe};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::codec::{decode_mask, MaskBody, WeightsBody};
use super::frame::{decode_frame, encode_frame, Frame, RoundMessage};
use crate::mask::{MaskLayout, PruneMask};
use crate::nn::{ArchSpec, Model};
use crate::scalar::Precision;

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct FuzzReport {
    pub round_trips: usize,
    pub round_trip_failures: usize,
    pub corruptions: usize,
    /// Corrupt inputs that a decoder still accepted (legal, e.g. a flipped
    /// weight byte).
    pub corrupt_accepted: usize,
    pub corrupt_rejected: usize,
    pub panics: usize,
    /// First few failure descriptions.
    pub failures: Vec<String>,
}

impl FuzzReport {
    pub fn is_clean(&self) -> bool {
        self.round_trip_failures == 0 && self.panics == 0
    }

    fn fail(&mut self, what: String) {
        if self.failures.len() < 10 {
            self.failures.push(what);
        }
    }
}

fn random_arch<R: Rng>(rng: &mut R) -> ArchSpec {
    let depth = rng.random_range(1..4);
    let dims: Vec<usize> = (0..=depth).map(|_| rng.random_range(1..13)).collect();
    ArchSpec::mlp(&dims).expect("positive dims")
}

fn random_mask<R: Rng>(layout: &MaskLayout, rng: &mut R) -> PruneMask {
    let p = rng.random_range(0.0..=1.0);
    PruneMask::from_layers(
        layout
            .groups
            .iter()
            .map(|&g| (0..g).map(|_| rng.random_bool(p)).collect())
            .collect(),
    )
}

fn random_model<R: Rng>(arch: &ArchSpec, rng: &mut R) -> Model<f64> {
    let mut model = Model::<f64>::zeros(arch).expect("valid arch");
    let values: Vec<f64> = (0..model.param_count())
        .map(|_| match rng.random_range(0..10) {
            0 => 0.0,
            1 => -0.0,
            2 => f64::from_bits(rng.random::<u64>() & !(0x7ff << 52)),
            _ => rng.random_range(-1e6..1e6),
        })
        .collect();
    model.set_flat(&values).expect("matching length");
    model
}

fn corrupt<R: Rng>(bytes: &[u8], rng: &mut R) -> Vec<u8> {
    let mut out = bytes.to_vec();
    match rng.random_range(0..5) {
        0 if !out.is_empty() => {
            let i = rng.random_range(0..out.len());
            out[i] ^= 1 << rng.random_range(0..8);
        }
        1 => out.truncate(rng.random_range(0..=out.len())),
        2 => out.extend((0..rng.random_range(1..9)).map(|_| rng.random::<u8>())),
        3 if !out.is_empty() => {
            let i = rng.random_range(0..out.len());
            out[i] = rng.random();
        }
        _ => {
            let n = rng.random_range(0..40);
            out = (0..n).map(|_| rng.random()).collect();
        }
    }
    out
}

fn round_trip_case<R: Rng>(rng: &mut R) -> Result<(), String> {
    let arch = random_arch(rng);
    let layout = MaskLayout::from_arch(&arch);
    let mask = random_mask(&layout, rng);
    let reference = random_mask(&layout, rng);
    let precision = if rng.random_bool(0.5) {
        Precision::F32
    } else {
        Precision::F64
    };
    let mut model = random_model(&arch, rng);
    if precision == Precision::F32 {
        model = model.cast::<f32>().cast();
    }
    let round = rng.random();
    let node = rng.random();

    let full = MaskBody::full(&mask);
    let delta = MaskBody::delta(&mask, &reference).map_err(|e| e.to_string())?;
    if delta.bytes.len() > full.bytes.len() {
        return Err("delta body larger than full body".into());
    }
    for (body, reference) in [(&full, None), (&delta, Some(&reference))] {
        let frame = Frame::new(
            round,
            RoundMessage::MaskUpload {
                node,
                mask: body.clone(),
            },
        );
        let back = decode_frame(&encode_frame(&frame)).map_err(|e| e.to_string())?;
        if back != frame {
            return Err("mask frame changed in transit".into());
        }
        let decoded = body.decode(&layout, reference).map_err(|e| e.to_string())?;
        if decoded != mask {
            return Err(format!("mask round trip failed for {layout:?}"));
        }
    }

    let skip = rng.random_bool(0.5).then_some(&mask);
    let body = WeightsBody::encode(&model, precision, skip).map_err(|e| e.to_string())?;
    let frame = Frame::new(
        round,
        RoundMessage::WeightUpload {
            node,
            weights: body.clone(),
        },
    );
    if decode_frame(&encode_frame(&frame)).map_err(|e| e.to_string())? != frame {
        return Err("weight frame changed in transit".into());
    }
    let back: Model<f64> = body.decode(&arch, precision, Some(&mask)).map_err(|e| e.to_string())?;
    let expected = match skip {
        Some(m) => crate::scoring::apply_mask(&model, m).map_err(|e| e.to_string())?,
        None => model,
    };
    let same = back
        .flat()
        .iter()
        .zip(expected.flat())
        .all(|(a, b)| a.to_bits() == b.to_bits());
    if !same {
        return Err(format!("weight round trip failed at {precision:?}"));
    }
    Ok(())
}

/// Decodes `bytes` with every decoder; returns whether any accepted it.
fn decode_all(bytes: &[u8], arch: &ArchSpec, layout: &MaskLayout, reference: &PruneMask) -> bool {
    let mut accepted = decode_frame(bytes).is_ok();
    accepted |= decode_mask(bytes, layout).is_ok();
    accepted |= MaskBody {
        delta: true,
        bytes: bytes.to_vec(),
    }
    .decode(layout, Some(reference))
    .is_ok();
    for precision in [Precision::F32, Precision::F64] {
        accepted |= WeightsBody {
            sparse: true,
            bytes: bytes.to_vec(),
        }
        .decode::<f64>(arch, precision, Some(reference))
        .is_ok();
    }
    accepted
}

fn corrupt_case<R: Rng>(rng: &mut R) -> Vec<u8> {
    let arch = random_arch(rng);
    let layout = MaskLayout::from_arch(&arch);
    let mask = random_mask(&layout, rng);
    let model = random_model(&arch, rng);
    let message = match rng.random_range(0..3) {
        0 => RoundMessage::GlobalMask(MaskBody::full(&mask)),
        1 => RoundMessage::GlobalMask(MaskBody::delta(&mask, &PruneMask::all_ones(&layout)).expect("same layout")),
        _ => {
            RoundMessage::GlobalWeights(WeightsBody::encode(&model, Precision::F32, Some(&mask)).expect("same layout"))
        }
    };
    let valid = encode_frame(&Frame::new(rng.random(), message));
    if rng.random_bool(0.5) {
        corrupt(&valid, rng)
    } else {
        corrupt(&valid[super::HEADER_LEN..], rng)
    }
}

/// Runs `cases` round-trip cases and `cases` corruption cases.
pub fn run_fuzz(cases: usize, seed: u64) -> FuzzReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report = FuzzReport::default();
    for i in 0..cases {
        let case_seed = rng.random::<u64>();
        report.round_trips += 1;
        match catch_unwind(|| round_trip_case(&mut ChaCha8Rng::seed_from_u64(case_seed))) {
            Ok(Ok(())) => {}
            Ok(Err(what)) => {
                report.round_trip_failures += 1;
                report.fail(format!("round trip {i} (seed {case_seed}): {what}"));
            }
            Err(_) => {
                report.panics += 1;
                report.fail(format!("round trip {i} (seed {case_seed}) panicked"));
            }
        }
    }
    for i in 0..cases {
        let case_seed = rng.random::<u64>();
        report.corruptions += 1;
        let outcome = catch_unwind(AssertUnwindSafe(|| {
            let mut r = ChaCha8Rng::seed_from_u64(case_seed);
            let bytes = corrupt_case(&mut r);
            let arch = random_arch(&mut r);
            let layout = MaskLayout::from_arch(&arch);
            let reference = random_mask(&layout, &mut r);
            decode_all(&bytes, &arch, &layout, &reference)
        }));
        match outcome {
            Ok(true) => report.corrupt_accepted += 1,
            Ok(false) => report.corrupt_rejected += 1,
            Err(_) => {
                report.panics += 1;
                report.fail(format!("corruption {i} (seed {case_seed}) panicked"));
            }
        }
    }
    report
}
