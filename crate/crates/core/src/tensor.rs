//! Flat numeric vectors, the unit every reduction operates on.
//!
//! A [`Tensor`] holds either `f64` values or IEEE-754 binary16 payloads. Half
//! precision is only a storage and wire format: every arithmetic operation
//! widens to `f64`, and reductions such as [`dot_triple`] accumulate in double
//! precision strictly left to right so results are bit-reproducible.

use crate::error::{Error, Result};

/// Element type tag. The discriminant is the on-wire dtype byte.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
#[repr(u8)]
pub enum DType {
    F64 = 0,
    F16 = 1,
}

impl DType {
    pub fn size_in_bytes(self) -> usize {
        match self {
            DType::F64 => 8,
            DType::F16 => 2,
        }
    }

    pub fn from_tag(tag: u8) -> Result<Self> {
        match tag {
            0 => Ok(DType::F64),
            1 => Ok(DType::F16),
            other => Err(Error::Protocol(format!("unknown dtype tag {other}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
enum Storage {
    F64(Vec<f64>),
    F16(Vec<u16>),
}

/// A flat vector of reals with an element type tag.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    storage: Storage,
}

impl Tensor {
    pub fn from_f64(data: Vec<f64>) -> Self {
        Tensor {
            storage: Storage::F64(data),
        }
    }

    /// Builds an `F16` tensor from raw binary16 bit patterns.
    pub fn from_f16_bits(bits: Vec<u16>) -> Self {
        Tensor {
            storage: Storage::F16(bits),
        }
    }

    pub fn zeros(len: usize, dtype: DType) -> Self {
        match dtype {
            DType::F64 => Tensor::from_f64(vec![0.0; len]),
            DType::F16 => Tensor::from_f16_bits(vec![0; len]),
        }
    }

    /// Converts `values` to `dtype`, rounding once when the target is `F16`.
    pub fn from_values(values: Vec<f64>, dtype: DType) -> Self {
        match dtype {
            DType::F64 => Tensor::from_f64(values),
            DType::F16 => Tensor::from_f16_bits(values.iter().map(|&v| f16_bits(v)).collect()),
        }
    }

    pub fn dtype(&self) -> DType {
        match self.storage {
            Storage::F64(_) => DType::F64,
            Storage::F16(_) => DType::F16,
        }
    }

    pub fn len(&self) -> usize {
        match &self.storage {
            Storage::F64(v) => v.len(),
            Storage::F16(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn get(&self, i: usize) -> f64 {
        match &self.storage {
            Storage::F64(v) => v[i],
            Storage::F16(v) => f16_to_f64(v[i]),
        }
    }

    /// Borrowed view of the values when stored as `f64`.
    pub fn as_f64_slice(&self) -> Option<&[f64]> {
        match &self.storage {
            Storage::F64(v) => Some(v),
            Storage::F16(_) => None,
        }
    }

    pub fn f16_bits(&self) -> Option<&[u16]> {
        match &self.storage {
            Storage::F16(v) => Some(v),
            Storage::F64(_) => None,
        }
    }

    /// Values widened to `f64`.
    pub fn to_f64_vec(&self) -> Vec<f64> {
        match &self.storage {
            Storage::F64(v) => v.clone(),
            Storage::F16(v) => v.iter().map(|&b| f16_to_f64(b)).collect(),
        }
    }

    /// Consumes the tensor, widening to `f64` if needed.
    pub fn into_f64_vec(self) -> Vec<f64> {
        match self.storage {
            Storage::F64(v) => v,
            Storage::F16(v) => v.into_iter().map(f16_to_f64).collect(),
        }
    }

    /// Copy of `[start, end)` in the same dtype.
    pub fn slice(&self, start: usize, end: usize) -> Tensor {
        match &self.storage {
            Storage::F64(v) => Tensor::from_f64(v[start..end].to_vec()),
            Storage::F16(v) => Tensor::from_f16_bits(v[start..end].to_vec()),
        }
    }

    /// Concatenates tensors of one dtype. Mixed dtypes are an argument error.
    pub fn concat(parts: &[Tensor]) -> Result<Tensor> {
        let dtype = parts.first().map_or(DType::F64, Tensor::dtype);
        if parts.iter().any(|p| p.dtype() != dtype) {
            return Err(Error::Argument("cannot concatenate tensors of mixed dtype".into()));
        }
        let total = parts.iter().map(Tensor::len).sum();
        Ok(match dtype {
            DType::F64 => {
                let mut out = Vec::with_capacity(total);
                for p in parts {
                    out.extend_from_slice(p.as_f64_slice().unwrap());
                }
                Tensor::from_f64(out)
            }
            DType::F16 => {
                let mut out = Vec::with_capacity(total);
                for p in parts {
                    out.extend_from_slice(p.f16_bits().unwrap());
                }
                Tensor::from_f16_bits(out)
            }
        })
    }

    pub fn has_non_finite(&self) -> bool {
        match &self.storage {
            Storage::F64(v) => v.iter().any(|x| !x.is_finite()),
            Storage::F16(v) => v.iter().any(|&b| b & 0x7c00 == 0x7c00),
        }
    }

    pub fn has_nan(&self) -> bool {
        match &self.storage {
            Storage::F64(v) => v.iter().any(|x| x.is_nan()),
            Storage::F16(v) => v.iter().any(|&b| b & 0x7c00 == 0x7c00 && b & 0x03ff != 0),
        }
    }

    pub fn scale(&self, factor: f64) -> Tensor {
        let values = self.to_f64_vec().into_iter().map(|v| v * factor).collect();
        Tensor::from_values(values, self.dtype())
    }

    /// Serializes as `dtype(1) | count(8, LE) | payload (LE)`.
    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(9 + self.len() * self.dtype().size_in_bytes());
        self.encode_into(&mut out);
        out
    }

    pub fn encode_into(&self, out: &mut Vec<u8>) {
        out.push(self.dtype() as u8);
        out.extend_from_slice(&(self.len() as u64).to_le_bytes());
        match &self.storage {
            Storage::F64(v) => {
                for x in v {
                    out.extend_from_slice(&x.to_le_bytes());
                }
            }
            Storage::F16(v) => {
                for b in v {
                    out.extend_from_slice(&b.to_le_bytes());
                }
            }
        }
    }

    pub fn encoded_len(&self) -> usize {
        9 + self.len() * self.dtype().size_in_bytes()
    }

    pub fn decode(bytes: &[u8]) -> Result<Tensor> {
        if bytes.len() < 9 {
            return Err(Error::Protocol(format!(
                "tensor frame too short: {} bytes",
                bytes.len()
            )));
        }
        let dtype = DType::from_tag(bytes[0])?;
        let count = u64::from_le_bytes(bytes[1..9].try_into().unwrap()) as usize;
        let payload = &bytes[9..];
        let expected = count
            .checked_mul(dtype.size_in_bytes())
            .ok_or_else(|| Error::Protocol("tensor length overflows".into()))?;
        if payload.len() != expected {
            return Err(Error::Protocol(format!(
                "tensor payload is {} bytes, header declares {expected}",
                payload.len()
            )));
        }
        Ok(match dtype {
            DType::F64 => Tensor::from_f64(
                payload
                    .chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                    .collect(),
            ),
            DType::F16 => Tensor::from_f16_bits(
                payload
                    .chunks_exact(2)
                    .map(|c| u16::from_le_bytes(c.try_into().unwrap()))
                    .collect(),
            ),
        })
    }
}

impl From<Vec<f64>> for Tensor {
    fn from(v: Vec<f64>) -> Self {
        Tensor::from_f64(v)
    }
}

/// Partial sums `(a·b, a·a, b·b)`.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct DotTriple {
    pub ab: f64,
    pub aa: f64,
    pub bb: f64,
}

impl DotTriple {
    pub fn to_array(self) -> [f64; 3] {
        [self.ab, self.aa, self.bb]
    }

    pub fn from_slice(v: &[f64]) -> Self {
        DotTriple {
            ab: v[0],
            aa: v[1],
            bb: v[2],
        }
    }

    /// Weights `(c_a, c_b)` of the adaptive sum `c_a·a + c_b·b`.
    ///
    /// A zero-norm operand contributes nothing to the other side's
    /// correction, so `adasum(0, b) == b` and `adasum(a, 0) == a`.
    pub fn adasum_coefficients(self) -> (f64, f64) {
        let ca = if self.aa == 0.0 {
            1.0
        } else {
            1.0 - self.ab / (2.0 * self.aa)
        };
        let cb = if self.bb == 0.0 {
            1.0
        } else {
            1.0 - self.ab / (2.0 * self.bb)
        };
        (ca, cb)
    }
}

impl std::ops::AddAssign for DotTriple {
    fn add_assign(&mut self, rhs: Self) {
        self.ab += rhs.ab;
        self.aa += rhs.aa;
        self.bb += rhs.bb;
    }
}

/// Double-precision dot products over two equal-length slices.
pub fn dot_triple_slices(a: &[f64], b: &[f64]) -> DotTriple {
    debug_assert_eq!(a.len(), b.len());
    let mut t = DotTriple::default();
    for (&x, &y) in a.iter().zip(b) {
        t.ab += x * y;
        t.aa += x * x;
        t.bb += y * y;
    }
    t
}

/// `(a·b, a·a, b·b)` accumulated in `f64` regardless of dtype.
pub fn dot_triple(a: &Tensor, b: &Tensor) -> Result<DotTriple> {
    if a.len() != b.len() {
        return Err(Error::shape(a.len(), b.len()));
    }
    match (a.as_f64_slice(), b.as_f64_slice()) {
        (Some(x), Some(y)) => Ok(dot_triple_slices(x, y)),
        _ => Ok(dot_triple_slices(&a.to_f64_vec(), &b.to_f64_vec())),
    }
}

/// Elementwise `alpha·a + beta·b`.
///
/// The result takes `a`'s dtype. For `F16` the multiply-add happens in `f64`
/// and is rounded to binary16 once.
pub fn axpby(alpha: f64, a: &Tensor, beta: f64, b: &Tensor) -> Result<Tensor> {
    if a.len() != b.len() {
        return Err(Error::shape(a.len(), b.len()));
    }
    if let (Some(x), Some(y)) = (a.as_f64_slice(), b.as_f64_slice()) {
        return Ok(Tensor::from_f64(
            x.iter().zip(y).map(|(&x, &y)| alpha * x + beta * y).collect(),
        ));
    }
    let values = (0..a.len())
        .map(|i| alpha * a.get(i) + beta * b.get(i))
        .collect();
    Ok(Tensor::from_values(values, a.dtype()))
}

/// Rounds every value to binary16 (round-to-nearest-even). Overflow becomes
/// infinity, NaN is preserved. Already-`F16` tensors are returned unchanged.
pub fn quantize_f16(t: &Tensor) -> Tensor {
    match &t.storage {
        Storage::F16(_) => t.clone(),
        Storage::F64(v) => Tensor::from_f16_bits(v.iter().map(|&x| f16_bits(x)).collect()),
    }
}

/// Widens a tensor to `F64`.
pub fn dequantize_f16(t: &Tensor) -> Tensor {
    Tensor::from_f64(t.to_f64_vec())
}

/// Binary16 bit pattern nearest to `x`, rounding half to even.
///
/// Rounds directly from the `f64` significand; going through `f32` first
/// would round twice.
pub fn f16_bits(x: f64) -> u16 {
    let bits = x.to_bits();
    let sign = ((bits >> 48) & 0x8000) as u16;
    let exp = ((bits >> 52) & 0x7ff) as i32;
    let man = bits & 0x000f_ffff_ffff_ffff;
    if exp == 0x7ff {
        return if man == 0 {
            sign | 0x7c00
        } else {
            sign | 0x7e00 | (man >> 42) as u16
        };
    }
    let e = exp - 1023;
    if e > 15 {
        return sign | 0x7c00;
    }
    let (significand, shift) = if e >= -14 {
        // Normal range: keep the top 10 mantissa bits under the new exponent.
        ((((e + 15) as u64) << 52) | man, 42u32)
    } else {
        // Subnormal range: count units of 2^-24.
        let shift = (28 - e) as u32;
        if shift > 63 || exp == 0 {
            return sign;
        }
        ((1u64 << 52) | man, shift)
    };
    let kept = significand >> shift;
    let rem = significand & ((1u64 << shift) - 1);
    let half = 1u64 << (shift - 1);
    let rounded = if rem > half || (rem == half && kept & 1 == 1) {
        kept + 1
    } else {
        kept
    };
    // A mantissa carry moves into the exponent field; past the largest
    // finite value it lands exactly on the infinity pattern.
    sign | rounded.min(0x7c00) as u16
}

/// Exact value of a binary16 bit pattern.
pub fn f16_to_f64(bits: u16) -> f64 {
    let sign = if bits & 0x8000 != 0 { -1.0 } else { 1.0 };
    let exp = ((bits >> 10) & 0x1f) as i32;
    let man = (bits & 0x3ff) as f64;
    let mag = match exp {
        0 => man * 2f64.powi(-24),
        31 if man == 0.0 => f64::INFINITY,
        31 => f64::NAN,
        _ => (1.0 + man / 1024.0) * 2f64.powi(exp - 15),
    };
    sign * mag
}

/// Rounds `x` through binary16 and back.
pub fn round_f16(x: f64) -> f64 {
    f16_to_f64(f16_bits(x))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn t(v: &[f64]) -> Tensor {
        Tensor::from_f64(v.to_vec())
    }

    #[test]
    fn dot_triple_examples() {
        let d = dot_triple(&t(&[1.0, 0.0]), &t(&[0.0, 1.0])).unwrap();
        assert_eq!(d, DotTriple { ab: 0.0, aa: 1.0, bb: 1.0 });
        let d = dot_triple(&t(&[3.0, 4.0]), &t(&[3.0, 4.0])).unwrap();
        assert_eq!(d, DotTriple { ab: 25.0, aa: 25.0, bb: 25.0 });
        let d = dot_triple(&t(&[1.0, 1.0]), &t(&[1.0, 0.0])).unwrap();
        assert_eq!(d, DotTriple { ab: 1.0, aa: 2.0, bb: 1.0 });
    }

    #[test]
    fn dot_triple_rejects_length_mismatch() {
        assert!(matches!(
            dot_triple(&t(&[1.0]), &t(&[1.0, 2.0])),
            Err(Error::Shape { expected: 1, found: 2 })
        ));
    }

    #[test]
    fn empty_tensors_reduce_to_zero() {
        let e = t(&[]);
        assert_eq!(dot_triple(&e, &e).unwrap(), DotTriple::default());
        assert!(axpby(2.0, &e, 3.0, &e).unwrap().is_empty());
    }

    #[test]
    fn dot_triple_widens_f16() {
        let a = quantize_f16(&t(&[0.5, 2.0]));
        let b = quantize_f16(&t(&[4.0, 0.25]));
        let d = dot_triple(&a, &b).unwrap();
        assert_eq!(d, DotTriple { ab: 2.5, aa: 4.25, bb: 16.0625 });
    }

    #[test]
    fn axpby_examples() {
        assert_eq!(axpby(1.0, &t(&[1.0, 0.0]), 1.0, &t(&[0.0, 1.0])).unwrap(), t(&[1.0, 1.0]));
        assert_eq!(
            axpby(0.5, &t(&[1.0, 0.0]), 0.75, &t(&[1.0, 1.0])).unwrap(),
            t(&[1.25, 0.75])
        );
        assert_eq!(axpby(0.0, &t(&[3.0, -2.0]), 0.0, &t(&[7.0, 1.0])).unwrap(), t(&[0.0, 0.0]));
        assert!(axpby(1.0, &t(&[1.0]), 1.0, &t(&[])).is_err());
    }

    #[test]
    fn axpby_f16_rounds_once() {
        // 1 + 2^-11 is a binary16 tie and rounds to even (1.0); computing
        // 0.5·(1 + 2^-10) + 0.5·1 in f64 first lands exactly on that tie.
        let a = quantize_f16(&t(&[1.0 + 2f64.powi(-10)]));
        let b = quantize_f16(&t(&[1.0]));
        let r = axpby(0.5, &a, 0.5, &b).unwrap();
        assert_eq!(r.dtype(), DType::F16);
        assert_eq!(r.get(0), 1.0);
    }

    #[test]
    fn quantize_examples() {
        assert_eq!(quantize_f16(&t(&[1.0])).get(0), 1.0);
        assert_eq!(quantize_f16(&t(&[65520.0])).get(0), f64::INFINITY);
        assert_eq!(quantize_f16(&t(&[65504.0])).get(0), 65504.0);
        assert_eq!(quantize_f16(&t(&[2f64.powi(-25) * 0.9])).get(0), 0.0);
        assert!(quantize_f16(&t(&[f64::NAN])).get(0).is_nan());
        assert_eq!(dequantize_f16(&quantize_f16(&t(&[0.1]))).dtype(), DType::F64);
    }

    #[test]
    fn wire_format_layout() {
        let bytes = t(&[1.0]).encode();
        assert_eq!(bytes.len(), 17);
        assert_eq!(bytes[0], 0);
        assert_eq!(&bytes[1..9], &1u64.to_le_bytes());
        assert_eq!(&bytes[9..], &1.0f64.to_le_bytes());

        let h = quantize_f16(&t(&[1.0, -2.0]));
        let bytes = h.encode();
        assert_eq!(bytes, vec![1, 2, 0, 0, 0, 0, 0, 0, 0, 0x00, 0x3c, 0x00, 0xc0]);
        assert_eq!(Tensor::decode(&bytes).unwrap(), h);
    }

    #[test]
    fn decode_rejects_bad_frames() {
        assert!(Tensor::decode(&[0, 1]).is_err());
        assert!(Tensor::decode(&[7, 0, 0, 0, 0, 0, 0, 0, 0]).is_err());
        let mut bytes = t(&[1.0, 2.0]).encode();
        bytes.pop();
        assert!(Tensor::decode(&bytes).is_err());
    }

    proptest! {
        #[test]
        fn self_dot_equals_norm(v in prop::collection::vec(-1e3f64..1e3, 0..64)) {
            let a = t(&v);
            let d = dot_triple(&a, &a).unwrap();
            prop_assert_eq!(d.ab.to_bits(), d.aa.to_bits());
        }

        #[test]
        fn dot_is_symmetric_and_bounded(
            pair in (1usize..64).prop_flat_map(|n| (
                prop::collection::vec(-1e3f64..1e3, n),
                prop::collection::vec(-1e3f64..1e3, n),
            ))
        ) {
            let (a, b) = (t(&pair.0), t(&pair.1));
            let d = dot_triple(&a, &b).unwrap();
            let r = dot_triple(&b, &a).unwrap();
            prop_assert_eq!(d.ab.to_bits(), r.ab.to_bits());
            prop_assert_eq!(d.aa.to_bits(), r.bb.to_bits());
            prop_assert!(d.aa >= 0.0 && d.bb >= 0.0);
            let bound = (d.aa * d.bb).sqrt();
            prop_assert!(d.ab.abs() <= bound * (1.0 + 1e-9) + 1e-300);
        }

        #[test]
        fn encode_decode_roundtrip(v in prop::collection::vec(any::<f64>(), 0..32), half in any::<bool>()) {
            let x = if half { quantize_f16(&t(&v)) } else { t(&v) };
            let back = Tensor::decode(&x.encode()).unwrap();
            prop_assert_eq!(back.encode(), x.encode());
        }
    }
}
