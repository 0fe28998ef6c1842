//! Affine int8 quantization: fake-quant primitives for QAT, batch-norm
//! folding, export to a full-integer container, and integer inference.

mod container;
mod fold;
mod int8;
mod qat;
mod sim;

pub use container::{
    export_hash, load_export, read_export, save_export, write_export, ExportHeader, ExportTensor,
    EXPORT_MAGIC, EXPORT_VERSION,
};
pub use fold::{fold_batchnorm, fold_model};
pub use int8::{
    accumulator_bound, export_model, int8_forward, int8_gated, int8_score_dataset, Int8Model,
    Int8Outputs, QAdd, QBlock, QHead, QOp, QOpKind, QTensor,
};
pub use qat::{prepare_qat, qat_train, QatConfig, QAT_INITIAL_LR};
pub use sim::simulate_export;

use serde::{Deserialize, Serialize};

use crate::tensor::{Scalar, Tensor};

/// Bit width at or above which quantizers are disabled.
pub const DISABLED_BITS: u32 = 32;
pub const SCALE_FLOOR: f64 = 1e-8;
pub const PACT_INIT: f64 = 6.0;
pub const PACT_L2: f64 = 1e-4;

/// Per-tensor affine quantization: `real = scale · (q − zero_point)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct QuantParams {
    pub scale: f64,
    pub zero_point: i32,
    pub qmin: i32,
    pub qmax: i32,
    pub bits: u32,
}

impl QuantParams {
    fn int_range(bits: u32) -> (i32, i32) {
        let b = bits.clamp(2, 31);
        (-(1i64 << (b - 1)) as i32, ((1i64 << (b - 1)) - 1) as i32)
    }

    /// Min-max parameters; the range is widened to include zero so that
    /// zero is exactly representable.
    pub fn from_range(lo: f64, hi: f64, bits: u32) -> Self {
        let (qmin, qmax) = Self::int_range(bits);
        let lo = lo.min(0.0);
        let hi = hi.max(0.0);
        let scale = ((hi - lo) / (qmax - qmin) as f64).max(SCALE_FLOOR);
        let zero_point =
            (qmin as f64 + (-lo / scale).round()).clamp(qmin as f64, qmax as f64) as i32;
        Self {
            scale,
            zero_point,
            qmin,
            qmax,
            bits,
        }
    }

    /// Unsigned grid over `[0, alpha]` stored in the signed range.
    pub fn pact(alpha: f64, bits: u32) -> Self {
        let (qmin, qmax) = Self::int_range(bits);
        Self {
            scale: (alpha / (qmax - qmin) as f64).max(SCALE_FLOOR),
            zero_point: qmin,
            qmin,
            qmax,
            bits,
        }
    }

    pub fn disabled(&self) -> bool {
        self.bits >= DISABLED_BITS
    }

    pub fn quantize(&self, x: f64) -> i32 {
        let q = (x / self.scale).round() + self.zero_point as f64;
        q.clamp(self.qmin as f64, self.qmax as f64) as i32
    }

    pub fn dequantize(&self, q: i32) -> f64 {
        self.scale * (q - self.zero_point) as f64
    }

    /// `dequantize(quantize(x))`, or `x` itself when disabled.
    pub fn fake(&self, x: f64) -> f64 {
        if self.disabled() {
            x
        } else {
            self.dequantize(self.quantize(x))
        }
    }
}

/// Learnable PaCT clipping bound.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PactClip(f64);

impl PactClip {
    pub fn new(alpha: f64) -> Option<Self> {
        (alpha > 0.0 && alpha.is_finite()).then_some(Self(alpha))
    }

    pub fn value(self) -> f64 {
        self.0
    }
}

pub(crate) fn pact_value(x: f64, alpha: f64, qp: &QuantParams) -> f64 {
    qp.fake(x.clamp(0.0, alpha))
}

/// PaCT forward with its gradients: returns `(y, dy/dx, dy/dalpha)` per element.
pub fn pact_forward<T: Scalar>(
    x: &Tensor<T>,
    clip: PactClip,
    bits: u32,
) -> (Tensor<T>, Vec<T>, Vec<T>) {
    let alpha = clip.value();
    let qp = QuantParams::pact(alpha, bits);
    let y = x.map(|v| T::from_f64(pact_value(v.as_f64(), alpha, &qp)));
    let dx = x
        .data()
        .iter()
        .map(|v| {
            let v = v.as_f64();
            T::from_f64(if v > 0.0 && v < alpha { 1.0 } else { 0.0 })
        })
        .collect();
    let dalpha = x
        .data()
        .iter()
        .map(|v| T::from_f64(if v.as_f64() >= alpha { 1.0 } else { 0.0 }))
        .collect();
    (y, dx, dalpha)
}

/// Per-tensor min-max weight fake quantization. The backward is the
/// straight-through identity, applied by the caller.
pub fn fakequant_weights<T: Scalar>(w: &Tensor<T>, bits: u32) -> (Tensor<T>, QuantParams) {
    let qp = weight_qparams(w.data(), bits);
    (w.map(|v| T::from_f64(qp.fake(v.as_f64()))), qp)
}

pub fn weight_qparams<T: Scalar>(w: &[T], bits: u32) -> QuantParams {
    let (lo, hi) = w
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| {
            let v = v.as_f64();
            (lo.min(v), hi.max(v))
        });
    if w.is_empty() {
        return QuantParams::from_range(0.0, 0.0, bits);
    }
    QuantParams::from_range(lo, hi, bits)
}

/// Observer buffer layout: `[min, max, initialized]`.
pub(crate) fn observe_range<T: Scalar>(buffer: &mut Tensor<T>, x: &Tensor<T>, momentum: f64) {
    let (lo, hi) = x
        .data()
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| {
            let v = v.as_f64();
            (lo.min(v), hi.max(v))
        });
    let b = buffer.data_mut();
    if b[2].as_f64() == 0.0 {
        b[0] = T::from_f64(lo);
        b[1] = T::from_f64(hi);
        b[2] = T::one();
    } else {
        b[0] = T::from_f64((1.0 - momentum) * b[0].as_f64() + momentum * lo);
        b[1] = T::from_f64((1.0 - momentum) * b[1].as_f64() + momentum * hi);
    }
}

pub(crate) fn observed_range<T: Scalar>(buffer: &Tensor<T>) -> (f64, f64) {
    let b = buffer.data();
    (b[0].as_f64(), b[1].as_f64())
}

/// Fixed-point multiplier: `real ≈ mantissa · 2^(exponent − 31)`, with a
/// 32-bit mantissa in `[2^30, 2^31)` (or zero).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FixedMultiplier {
    pub mantissa: i32,
    pub exponent: i32,
}

impl FixedMultiplier {
    pub fn from_real(m: f64) -> Self {
        assert!(
            m >= 0.0 && m.is_finite(),
            "multiplier must be finite and non-negative"
        );
        if m == 0.0 {
            return Self {
                mantissa: 0,
                exponent: 0,
            };
        }
        let mut exponent = m.log2().floor() as i32 + 1;
        let mut frac = m / 2f64.powi(exponent);
        // normalize into [0.5, 1) against log2 rounding
        while frac >= 1.0 {
            frac /= 2.0;
            exponent += 1;
        }
        while frac < 0.5 {
            frac *= 2.0;
            exponent -= 1;
        }
        let mut mantissa = (frac * 2f64.powi(31)).round() as i64;
        if mantissa == 1i64 << 31 {
            mantissa /= 2;
            exponent += 1;
        }
        Self {
            mantissa: mantissa as i32,
            exponent,
        }
    }

    pub fn real(&self) -> f64 {
        self.mantissa as f64 * 2f64.powi(self.exponent - 31)
    }

    /// `round(acc · M)`, rounding half away from zero.
    pub fn apply(&self, acc: i64) -> i64 {
        let prod = acc as i128 * self.mantissa as i128;
        let shift = 31 - self.exponent;
        if shift <= 0 {
            return (prod << (-shift)) as i64;
        }
        rounding_shift(prod, shift as u32) as i64
    }
}

/// `round(v / 2^shift)`, half away from zero.
pub(crate) fn rounding_shift(v: i128, shift: u32) -> i128 {
    if shift == 0 {
        return v;
    }
    if shift >= 127 {
        return 0;
    }
    let half = 1i128 << (shift - 1);
    if v >= 0 {
        (v + half) >> shift
    } else {
        -((-v + half) >> shift)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn unit_range_scale() {
        let w = Tensor::new(vec![3], vec![-1.0f32, 0.25, 1.0]).unwrap();
        let (fq, qp) = fakequant_weights(&w, 8);
        assert!((qp.scale - 2.0 / 255.0).abs() < 1e-12);
        assert_eq!(qp.zero_point, 0);
        assert!((fq.data()[2] - 1.0).abs() <= qp.scale as f32 + 1e-7);
    }

    #[test]
    fn constant_tensor_round_trips() {
        for c in [0.5f32, -0.3, 0.0, 7.25] {
            let w = Tensor::full(&[4], c);
            let (fq, _) = fakequant_weights(&w, 8);
            assert_eq!(fq.data(), w.data(), "constant {c}");
        }
    }

    #[test]
    fn grid_values_are_fixed_points() {
        let qp = QuantParams::from_range(-0.7, 1.3, 8);
        let grid: Vec<f32> = (qp.qmin..=qp.qmax)
            .map(|q| qp.dequantize(q) as f32)
            .collect();
        let w = Tensor::new(vec![grid.len()], grid).unwrap();
        let (once, _) = fakequant_weights(&w, 8);
        let (twice, _) = fakequant_weights(&once, 8);
        assert_eq!(once.data(), twice.data());
        assert_eq!(once.data(), w.data());
    }

    #[test]
    fn all_zero_uses_scale_floor() {
        let w = Tensor::<f32>::zeros(&[5]);
        let (fq, qp) = fakequant_weights(&w, 8);
        assert_eq!(qp.scale, SCALE_FLOOR);
        assert_eq!(fq.data(), &[0.0; 5]);
    }

    #[test]
    fn pact_saturates_and_clamps() {
        let clip = PactClip::new(2.0).unwrap();
        let x = Tensor::new(vec![3], vec![3.0f64, -1.0, 1.0]).unwrap();
        let (y, dx, da) = pact_forward(&x, clip, 8);
        assert_eq!(y.data()[0], 2.0);
        assert_eq!(y.data()[1], 0.0);
        assert_eq!(dx, vec![0.0, 0.0, 1.0]);
        assert_eq!(da, vec![1.0, 0.0, 0.0]);
        assert!(PactClip::new(0.0).is_none());
    }

    #[test]
    fn hand_requantization() {
        // acc = 10·20 = 200; M = 0.1·0.05/0.2 = 0.025; q = round(5.0) = 5
        let m = FixedMultiplier::from_real(0.1 * 0.05 / 0.2);
        assert_eq!(m.apply(200), 5);
        assert!((m.real() - 0.025).abs() < 1e-11);
    }

    #[test]
    fn rounding_is_half_away_from_zero() {
        let half = FixedMultiplier::from_real(0.5);
        assert_eq!(half.apply(3), 2);
        assert_eq!(half.apply(-3), -2);
        assert_eq!(half.apply(1), 1);
        assert_eq!(half.apply(-1), -1);
        let big = FixedMultiplier::from_real(3.0);
        assert_eq!(big.apply(7), 21);
    }

    proptest! {
        #[test]
        fn quantize_dequantize_identity(lo in -10.0f64..0.0, hi in 0.0f64..10.0, q in -128i32..=127) {
            let qp = QuantParams::from_range(lo, hi, 8);
            prop_assert_eq!(qp.quantize(qp.dequantize(q)), q);
            let x = qp.dequantize(q) * 0.37 + lo * 0.1;
            let once = qp.fake(x);
            prop_assert_eq!(qp.fake(once), once);
        }

        #[test]
        fn multiplier_matches_real_product(m in 1e-6f64..4.0, acc in -1_000_000i64..1_000_000) {
            let fm = FixedMultiplier::from_real(m);
            prop_assert!((fm.real() - m).abs() <= m * 1e-9);
            let exact = acc as f64 * fm.real();
            prop_assert!((fm.apply(acc) as f64 - exact).abs() <= 0.5 + 1e-9);
        }
    }
}
