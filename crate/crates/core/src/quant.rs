//! Per-vector affine codecs for cached key/value vectors.
//!
//! Four storage classes: 2/4/8-bit integer codes with per-vector affine
//! parameters, and 16-bit half-precision passthrough. Quantization is
//! asymmetric min-max with round-to-nearest (ties away from zero):
//!
//! - `scale = (max - min) / (2^b - 1)`, `zero_point = min`
//! - `code  = clamp(round((x - zero_point) / scale), 0, 2^b - 1)`
//! - reconstruction `x̂ = zero_point + scale · code`
//!
//! A constant vector has zero range; it is encoded with `scale = 0` and
//! all-zero codes, and reconstructs exactly.

use crate::error::{Error, Result};
use half::f16;

/// Storage precision for one cached key or value vector.
///
/// The class-index mapping is fixed: 0↔2, 1↔4, 2↔8, 3↔16. Ordering by
/// bit count matches ordering by index.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum BitWidth {
    B2,
    B4,
    B8,
    B16,
}

/// All widths in class-index order.
pub const ALL_BIT_WIDTHS: [BitWidth; 4] = [BitWidth::B2, BitWidth::B4, BitWidth::B8, BitWidth::B16];

impl BitWidth {
    /// Number of bits per stored element.
    pub fn bits(self) -> u32 {
        match self {
            BitWidth::B2 => 2,
            BitWidth::B4 => 4,
            BitWidth::B8 => 8,
            BitWidth::B16 => 16,
        }
    }

    /// Class index: 0↔2, 1↔4, 2↔8, 3↔16.
    pub fn index(self) -> usize {
        match self {
            BitWidth::B2 => 0,
            BitWidth::B4 => 1,
            BitWidth::B8 => 2,
            BitWidth::B16 => 3,
        }
    }

    pub fn from_index(index: usize) -> Result<Self> {
        match index {
            0 => Ok(BitWidth::B2),
            1 => Ok(BitWidth::B4),
            2 => Ok(BitWidth::B8),
            3 => Ok(BitWidth::B16),
            other => Err(Error::invalid_input(format!(
                "bit-width class index {other} out of range 0..4"
            ))),
        }
    }

    pub fn from_bits(bits: u32) -> Result<Self> {
        match bits {
            2 => Ok(BitWidth::B2),
            4 => Ok(BitWidth::B4),
            8 => Ok(BitWidth::B8),
            16 => Ok(BitWidth::B16),
            other => Err(Error::invalid_input(format!(
                "unsupported bit-width {other}; expected one of 2, 4, 8, 16"
            ))),
        }
    }

    /// Number of integer code levels, 2^b (meaningless for B16).
    pub fn levels(self) -> u32 {
        1 << self.bits()
    }
}

impl std::fmt::Display for BitWidth {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}", self.bits())
    }
}

/// Stored form of one vector: integer codes plus affine parameters for
/// widths below 16, raw half-precision words at 16.
#[derive(Debug, Clone, PartialEq)]
pub enum Encoding {
    /// Codes each in `[0, 2^bits - 1]`.
    Affine { codes: Vec<u16> },
    /// Half-precision elements, widened on read.
    Half { halfwords: Vec<f16> },
}

/// One quantized key or value vector.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedVector {
    pub bits: BitWidth,
    pub encoding: Encoding,
    /// Affine scale; 1 for half-precision storage.
    pub scale: f64,
    /// Affine zero point; 0 for half-precision storage.
    pub zero_point: f64,
}

impl QuantizedVector {
    /// Element count of the original vector.
    pub fn len(&self) -> usize {
        match &self.encoding {
            Encoding::Affine { codes } => codes.len(),
            Encoding::Half { halfwords } => halfwords.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Encode `x` at bit-width `b`.
///
/// Constant input is degenerate: zero scale, all-zero codes, and the
/// constant reconstructs exactly.
pub fn quantize(x: &[f64], b: BitWidth) -> Result<QuantizedVector> {
    if x.is_empty() {
        return Err(Error::invalid_input("cannot quantize an empty vector"));
    }
    if let Some(bad) = x.iter().find(|v| !v.is_finite()) {
        return Err(Error::invalid_input(format!(
            "cannot quantize non-finite entry {bad}"
        )));
    }

    if b == BitWidth::B16 {
        let halfwords = x.iter().map(|&v| f16::from_f64(v)).collect();
        return Ok(QuantizedVector {
            bits: b,
            encoding: Encoding::Half { halfwords },
            scale: 1.0,
            zero_point: 0.0,
        });
    }

    let min = x.iter().cloned().fold(f64::INFINITY, f64::min);
    let max = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let max_code = (b.levels() - 1) as f64;
    let scale = (max - min) / max_code;

    let codes = if scale == 0.0 {
        vec![0u16; x.len()]
    } else {
        x.iter()
            .map(|&v| {
                // f64::round ties away from zero; the argument is >= 0 here.
                let code = ((v - min) / scale).round();
                code.clamp(0.0, max_code) as u16
            })
            .collect()
    };

    Ok(QuantizedVector {
        bits: b,
        encoding: Encoding::Affine { codes },
        scale,
        zero_point: min,
    })
}

/// Reconstruct the vector at working precision.
pub fn dequantize(q: &QuantizedVector) -> Vec<f64> {
    match &q.encoding {
        Encoding::Affine { codes } => codes
            .iter()
            .map(|&c| q.zero_point + q.scale * c as f64)
            .collect(),
        Encoding::Half { halfwords } => halfwords.iter().map(|&h| f64::from(h)).collect(),
    }
}

/// Reconstruct into a caller-provided buffer (hot path during decoding).
pub fn dequantize_into(q: &QuantizedVector, out: &mut [f64]) {
    match &q.encoding {
        Encoding::Affine { codes } => {
            for (o, &c) in out.iter_mut().zip(codes) {
                *o = q.zero_point + q.scale * c as f64;
            }
        }
        Encoding::Half { halfwords } => {
            for (o, &h) in out.iter_mut().zip(halfwords) {
                *o = f64::from(h);
            }
        }
    }
}

/// Total storage cost in bits: `d·b` for the payload plus 32 bits of
/// affine overhead (one half-precision scale and one half-precision
/// zero point) for widths below 16. Half-precision storage carries no
/// overhead. All metrics use this accounting.
pub fn storage_bits(q: &QuantizedVector) -> u64 {
    let d = q.len() as u64;
    let payload = d * q.bits.bits() as u64;
    let overhead = if q.bits == BitWidth::B16 { 0 } else { 32 };
    payload + overhead
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng as _, SeedableRng as _};
    use rand_chacha::ChaCha8Rng;

    fn roundtrip(x: &[f64], b: BitWidth) -> (QuantizedVector, Vec<f64>) {
        let q = quantize(x, b).expect("quantize");
        let y = dequantize(&q);
        (q, y)
    }

    #[test]
    fn four_level_input_is_exact_at_two_bits() {
        let (q, y) = roundtrip(&[0.0, 1.0, 2.0, 3.0], BitWidth::B2);
        match &q.encoding {
            Encoding::Affine { codes } => assert_eq!(codes, &[0, 1, 2, 3]),
            _ => panic!("expected affine encoding"),
        }
        assert_eq!(q.scale, 1.0);
        assert_eq!(q.zero_point, 0.0);
        assert_eq!(y, vec![0.0, 1.0, 2.0, 3.0]);
    }

    #[test]
    fn constant_vector_has_zero_scale_and_exact_roundtrip() {
        let (q, y) = roundtrip(&[5.0, 5.0, 5.0], BitWidth::B4);
        assert_eq!(q.scale, 0.0);
        match &q.encoding {
            Encoding::Affine { codes } => assert_eq!(codes, &[0, 0, 0]),
            _ => panic!("expected affine encoding"),
        }
        assert_eq!(y, vec![5.0, 5.0, 5.0]);
    }

    #[test]
    fn endpoint_codes_at_four_bits() {
        // Exhaustive search over all 16 levels confirms the nearest level
        // for each endpoint is the endpoint itself.
        let x = [-1.0, 1.0];
        let (q, y) = roundtrip(&x, BitWidth::B4);
        match &q.encoding {
            Encoding::Affine { codes } => assert_eq!(codes, &[0, 15]),
            _ => panic!("expected affine encoding"),
        }
        assert!((q.scale - 2.0 / 15.0).abs() < 1e-15);
        assert_eq!(q.zero_point, -1.0);
        for (&orig, &rec) in x.iter().zip(&y) {
            let nearest = (0..16)
                .map(|c| -1.0 + 2.0 / 15.0 * c as f64)
                .min_by(|a, b| {
                    (a - orig).abs().partial_cmp(&(b - orig).abs()).unwrap()
                })
                .unwrap();
            assert!((rec - nearest).abs() < 1e-12);
            assert!((rec - orig).abs() < 1e-12, "endpoints reconstruct exactly");
        }
    }

    #[test]
    fn dequantize_identity_and_degenerate_cases() {
        let q = QuantizedVector {
            bits: BitWidth::B2,
            encoding: Encoding::Affine {
                codes: vec![0, 1, 2, 3],
            },
            scale: 1.0,
            zero_point: 0.0,
        };
        assert_eq!(dequantize(&q), vec![0.0, 1.0, 2.0, 3.0]);

        let q = QuantizedVector {
            bits: BitWidth::B4,
            encoding: Encoding::Affine {
                codes: vec![0, 0, 0],
            },
            scale: 0.0,
            zero_point: 5.0,
        };
        assert_eq!(dequantize(&q), vec![5.0, 5.0, 5.0]);

        let q = QuantizedVector {
            bits: BitWidth::B4,
            encoding: Encoding::Affine {
                codes: vec![0, 15],
            },
            scale: 2.0 / 15.0,
            zero_point: -1.0,
        };
        let y = dequantize(&q);
        assert!((y[0] + 1.0).abs() < 1e-15);
        assert!((y[1] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn storage_accounting() {
        let d16 = vec![0.5; 16];
        let mut d16_var = d16.clone();
        d16_var[0] = 1.0;
        assert_eq!(storage_bits(&quantize(&d16_var, BitWidth::B2).unwrap()), 64);
        assert_eq!(storage_bits(&quantize(&d16_var, BitWidth::B16).unwrap()), 256);
        let d64: Vec<f64> = (0..64).map(|i| i as f64 * 0.1).collect();
        // 64·4 + 16 (scale) + 16 (zero point) = 288
        assert_eq!(storage_bits(&quantize(&d64, BitWidth::B4).unwrap()), 288);
    }

    #[test]
    fn rejects_empty_and_non_finite_input() {
        assert!(quantize(&[], BitWidth::B4).is_err());
        assert!(quantize(&[1.0, f64::NAN], BitWidth::B4).is_err());
        assert!(quantize(&[f64::INFINITY], BitWidth::B16).is_err());
    }

    #[test]
    fn half_precision_relative_error_bound() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..1000 {
            let x: Vec<f64> = (0..16).map(|_| rng.gen_range(-100.0..100.0)).collect();
            let (_, y) = roundtrip(&x, BitWidth::B16);
            for (&orig, &rec) in x.iter().zip(&y) {
                if orig != 0.0 {
                    assert!(
                        ((rec - orig) / orig).abs() <= 2f64.powi(-10),
                        "half-precision error too large: {orig} -> {rec}"
                    );
                }
            }
        }
    }

    #[test]
    fn mean_l2_error_non_increasing_in_bits() {
        use rand_distr::Distribution;
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let normal = rand_distr::StandardNormal;
        let mut mean_err = [0.0f64; 4];
        const N: usize = 1000;
        for _ in 0..N {
            let x: Vec<f64> = (0..16).map(|_| normal.sample(&mut rng)).collect();
            for (slot, &b) in ALL_BIT_WIDTHS.iter().enumerate() {
                let (_, y) = roundtrip(&x, b);
                let err: f64 = x
                    .iter()
                    .zip(&y)
                    .map(|(a, c)| (a - c) * (a - c))
                    .sum::<f64>()
                    .sqrt();
                mean_err[slot] += err / N as f64;
            }
        }
        for w in mean_err.windows(2) {
            assert!(w[0] >= w[1], "fidelity must improve with bits: {mean_err:?}");
        }
    }

    proptest! {
        #[test]
        fn roundtrip_error_within_half_step(
            xs in proptest::collection::vec(-1e4f64..1e4, 1..64),
            bi in 0usize..3,
        ) {
            let b = ALL_BIT_WIDTHS[bi];
            let q = quantize(&xs, b).unwrap();
            let y = dequantize(&q);
            let max_abs = xs.iter().cloned().fold(0.0f64, |a, v| a.max(v.abs()));
            let tol = q.scale / 2.0 + 4.0 * f64::EPSILON * max_abs;
            for (a, c) in xs.iter().zip(&y) {
                prop_assert!((a - c).abs() <= tol);
            }
        }

        #[test]
        fn codes_stay_in_range(
            xs in proptest::collection::vec(-1e6f64..1e6, 1..32),
            bi in 0usize..3,
        ) {
            let b = ALL_BIT_WIDTHS[bi];
            let q = quantize(&xs, b).unwrap();
            if let Encoding::Affine { codes } = &q.encoding {
                let max = (b.levels() - 1) as u16;
                prop_assert!(codes.iter().all(|&c| c <= max));
            }
        }

        #[test]
        fn quantize_is_deterministic(
            xs in proptest::collection::vec(-1e3f64..1e3, 1..32),
        ) {
            let a = quantize(&xs, BitWidth::B4).unwrap();
            let b = quantize(&xs, BitWidth::B4).unwrap();
            prop_assert_eq!(a, b);
        }
    }
}
