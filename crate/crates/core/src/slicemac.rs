//! Functional model of the IA8 x W5 bit-sliced MAC datapath.
//!
//! Each weight slice is placed in a 5-bit signed field. The MSB slice is
//! left-aligned (`2 * msb`) with a hardwired low bit: `1` during MSB-only
//! drafting, `0` when combined with the LSB slice. The LSB slice is
//! zero-extended. Accumulation is exact and in index order.

use serde::{Deserialize, Serialize};

use crate::bitnest::{BitSlicePair, QuantGroup, GROUP_SIZE};
use crate::error::{Error, Result};

/// A signed 5-bit multiplier operand in `[-16, 15]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FieldValue(i8);

impl FieldValue {
    pub fn value(self) -> i32 {
        self.0 as i32
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum SliceMode {
    FullPrecision,
    DraftMsbOnly,
}

pub fn to_msb_field(msb: i8, mode: SliceMode) -> FieldValue {
    debug_assert!((-8..=7).contains(&msb));
    let hardwired = match mode {
        SliceMode::DraftMsbOnly => 1,
        SliceMode::FullPrecision => 0,
    };
    FieldValue(2 * msb + hardwired)
}

pub fn to_lsb_field(lsb: u8) -> FieldValue {
    debug_assert!(lsb <= 15);
    FieldValue(lsb as i8)
}

/// Bit-sliced integer dot product.
///
/// Full precision combines `8 * acc_msb + acc_lsb`; draft mode returns only
/// the shifted MSB accumulator, which equals a dot product against
/// `16 * msb + 8`.
pub fn sliced_dot(activations: &[i8], weights: &[BitSlicePair], mode: SliceMode) -> Result<i64> {
    if activations.len() != weights.len() {
        return Err(Error::LengthMismatch {
            left: activations.len(),
            right: weights.len(),
        });
    }
    let mut acc_msb = 0i64;
    let mut acc_lsb = 0i64;
    for (&a, w) in activations.iter().zip(weights) {
        let a = a as i64;
        acc_msb += a * to_msb_field(w.msb(), mode).value() as i64;
        if mode == SliceMode::FullPrecision {
            acc_lsb += a * to_lsb_field(w.lsb()).value() as i64;
        }
    }
    Ok(match mode {
        SliceMode::FullPrecision => 8 * acc_msb + acc_lsb,
        SliceMode::DraftMsbOnly => 8 * acc_msb,
    })
}

/// Sliced dot over one quantization group with dequantization fused at the
/// end of accumulation.
pub fn dequant_dot(
    activations: &[i8],
    weight_group: &QuantGroup,
    act_scale: f64,
    mode: SliceMode,
) -> Result<f64> {
    if activations.len() != GROUP_SIZE {
        return Err(Error::LengthMismatch {
            left: activations.len(),
            right: GROUP_SIZE,
        });
    }
    let dot = sliced_dot(activations, &weight_group.slices(), mode)?;
    Ok(dot as f64 * (weight_group.scale() * act_scale))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bitnest::split_slices;
    use proptest::prelude::*;

    fn pairs(codes: &[i32]) -> Vec<BitSlicePair> {
        codes.iter().map(|&c| split_slices(c).unwrap()).collect()
    }

    #[test]
    fn field_examples() {
        assert_eq!(to_msb_field(7, SliceMode::DraftMsbOnly).value(), 15);
        assert_eq!(to_msb_field(0, SliceMode::FullPrecision).value(), 0);
        assert_eq!(to_msb_field(-8, SliceMode::DraftMsbOnly).value(), -15);
        assert_eq!(to_lsb_field(0).value(), 0);
        assert_eq!(to_lsb_field(15).value(), 15);
        assert_eq!(to_lsb_field(8).value(), 8);
    }

    #[test]
    fn fields_stay_in_five_bits() {
        for msb in -8..=7 {
            for mode in [SliceMode::FullPrecision, SliceMode::DraftMsbOnly] {
                let f = to_msb_field(msb, mode).value();
                assert!((-16..=15).contains(&f));
            }
        }
    }

    #[test]
    fn sliced_dot_examples() {
        let w = pairs(&[100, -50]);
        assert_eq!(sliced_dot(&[2, 3], &w, SliceMode::FullPrecision).unwrap(), 50);
        let w = pairs(&[127]);
        assert_eq!(sliced_dot(&[1], &w, SliceMode::DraftMsbOnly).unwrap(), 120);
        let w = pairs(&[5, -7, 127]);
        for mode in [SliceMode::FullPrecision, SliceMode::DraftMsbOnly] {
            assert_eq!(sliced_dot(&[0, 0, 0], &w, mode).unwrap(), 0);
        }
        assert!(matches!(
            sliced_dot(&[1, 2], &w, SliceMode::FullPrecision),
            Err(Error::LengthMismatch { .. })
        ));
    }

    #[test]
    fn dequant_dot_examples() {
        let mut codes = [0i8; 32];
        codes[0] = 100;
        codes[1] = -50;
        let g = QuantGroup::from_parts(codes, 0.01).unwrap();
        let mut a = [0i8; 32];
        a[0] = 2;
        a[1] = 3;
        let got = dequant_dot(&a, &g, 0.02, SliceMode::FullPrecision).unwrap();
        assert_eq!(got, 50.0 * (g.scale() * 0.02));
        assert!((got - 0.01).abs() < 1e-5);
        assert_eq!(dequant_dot(&a, &g, 0.0, SliceMode::FullPrecision).unwrap(), 0.0);
    }

    proptest! {
        #[test]
        fn full_matches_direct_and_draft_matches_surrogate(
            v in prop::collection::vec((-127i32..=127, -127i32..=127), 1..64)
        ) {
            let acts: Vec<i8> = v.iter().map(|p| p.0 as i8).collect();
            let codes: Vec<i32> = v.iter().map(|p| p.1).collect();
            let w = pairs(&codes);
            let direct: i64 = acts.iter().zip(&codes).map(|(&a, &c)| a as i64 * c as i64).sum();
            let full = sliced_dot(&acts, &w, SliceMode::FullPrecision).unwrap();
            prop_assert_eq!(full, direct);
            let surrogate: i64 = acts.iter().zip(&w)
                .map(|(&a, p)| a as i64 * (16 * p.msb() as i64 + 8)).sum();
            let draft = sliced_dot(&acts, &w, SliceMode::DraftMsbOnly).unwrap();
            prop_assert_eq!(draft, surrogate);
            let lsb_term: i64 = acts.iter().zip(&w)
                .map(|(&a, p)| a as i64 * (p.lsb() as i64 - 8)).sum();
            prop_assert_eq!(full - draft, lsb_term);
        }

        #[test]
        fn concatenation_is_additive(
            a in prop::collection::vec((-127i32..=127, -127i32..=127), 0..20),
            b in prop::collection::vec((-127i32..=127, -127i32..=127), 0..20),
        ) {
            for mode in [SliceMode::FullPrecision, SliceMode::DraftMsbOnly] {
                let split = |v: &[(i32, i32)]| -> (Vec<i8>, Vec<BitSlicePair>) {
                    (v.iter().map(|p| p.0 as i8).collect(), pairs(&v.iter().map(|p| p.1).collect::<Vec<_>>()))
                };
                let (xa, wa) = split(&a);
                let (xb, wb) = split(&b);
                let joined: Vec<(i32, i32)> = a.iter().chain(&b).copied().collect();
                let (xj, wj) = split(&joined);
                prop_assert_eq!(
                    sliced_dot(&xj, &wj, mode).unwrap(),
                    sliced_dot(&xa, &wa, mode).unwrap() + sliced_dot(&xb, &wb, mode).unwrap()
                );
            }
        }
    }
}
