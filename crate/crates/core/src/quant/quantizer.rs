//! Uniform fake quantizers.
//!
//! Activations use the unsigned range `[0, 2^b - 1]` with a zero point,
//! weights the signed range `[-2^(b-1), 2^(b-1) - 1]`:
//!
//! ```text
//! Q(v) = s * (clip(round(v / s) + z, lo, hi) - z)
//! ```
//!
//! `round` is half-away-from-zero. The zero point is stored as a real number
//! and rounded to the integer grid when applied, so every output lies on
//! `s * (q - z)` for an integer `q` in the clip range.

use serde::{Deserialize, Serialize};

use crate::numerics::Tensor;

/// Smallest admissible scale.
pub const MIN_SCALE: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QuantParams {
    pub scale: f64,
    pub zero_point: f64,
    pub bits: u8,
}

/// Signedness of the integer grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Grid {
    /// `[0, 2^b - 1]`, used for activations.
    Unsigned,
    /// `[-2^(b-1), 2^(b-1) - 1]`, used for weights.
    Signed,
}

impl Grid {
    pub fn range(self, bits: u8) -> (f64, f64) {
        let b = i32::from(bits);
        match self {
            Grid::Unsigned => (0.0, 2f64.powi(b) - 1.0),
            Grid::Signed => (-(2f64.powi(b - 1)), 2f64.powi(b - 1) - 1.0),
        }
    }
}

/// How `round` behaves in the forward pass.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Rounding {
    /// Half-away-from-zero, the deployed quantizer.
    #[default]
    Nearest,
    /// `round` replaced by the identity while clipping is kept. The
    /// straight-through gradient of [`Rounding::Nearest`] is the exact
    /// gradient of this relaxation, which makes it checkable by finite
    /// differences.
    Relaxed,
}

impl Rounding {
    #[inline]
    fn apply(self, x: f64) -> f64 {
        match self {
            Rounding::Nearest => round_half_away(x),
            Rounding::Relaxed => x,
        }
    }
}

/// `f64::round` without the libm call: magnitudes at or above 2^52 are
/// already integral, below that the integer part is exact.
#[inline]
pub fn round_half_away(x: f64) -> f64 {
    let a = x.abs();
    if !(a < 4_503_599_627_370_496.0) {
        return x;
    }
    let t = (a as i64) as f64;
    let r = if a - t >= 0.5 { t + 1.0 } else { t };
    r.copysign(x)
}

/// Local derivatives of a fake-quantized tensor, one entry per element,
/// following the straight-through rule: `round` has derivative 1.
#[derive(Debug, Clone, Default)]
pub struct QuantTrace {
    pub dv: Vec<f64>,
    pub ds: Vec<f64>,
    pub dz: Vec<f64>,
}

impl QuantTrace {
    /// Pulls an upstream adjoint `g` (w.r.t. the quantized output) back to
    /// the input in place and returns the accumulated `(∂L/∂s, ∂L/∂z)`.
    pub fn pullback(&self, g: &mut [f64]) -> (f64, f64) {
        let mut gs = 0.0;
        let mut gz = 0.0;
        for (((gi, dv), ds), dz) in g.iter_mut().zip(&self.dv).zip(&self.ds).zip(&self.dz) {
            gs += *gi * ds;
            gz += *gi * dz;
            *gi *= dv;
        }
        (gs, gz)
    }
}

/// Scalar fake quantization.
#[inline]
pub fn fake_quant(v: f64, p: &QuantParams, grid: Grid, rounding: Rounding) -> f64 {
    let (lo, hi) = grid.range(p.bits);
    let z = rounding.apply(p.zero_point);
    let q = (rounding.apply(v / p.scale) + z).clamp(lo, hi);
    p.scale * (q - z)
}

/// Fake-quantizes `input` into `out`; when `trace` is given, also records the
/// straight-through derivatives w.r.t. input, scale and zero point.
pub fn fake_quant_into(
    input: &[f64],
    p: &QuantParams,
    grid: Grid,
    rounding: Rounding,
    out: &mut [f64],
    trace: Option<&mut QuantTrace>,
) {
    let (lo, hi) = grid.range(p.bits);
    let s = p.scale;
    let z = rounding.apply(p.zero_point);
    match trace {
        None => {
            for (o, &v) in out.iter_mut().zip(input) {
                let q = (rounding.apply(v / s) + z).clamp(lo, hi);
                *o = s * (q - z);
            }
        }
        Some(tr) => {
            let n = input.len();
            tr.dv.resize(n, 0.0);
            tr.ds.resize(n, 0.0);
            tr.dz.resize(n, 0.0);
            for i in 0..n {
                let v = input[i];
                let u = v / s;
                let ru = rounding.apply(u);
                let r = ru + z;
                if r < lo || r > hi {
                    let c = if r < lo { lo } else { hi };
                    out[i] = s * (c - z);
                    tr.dv[i] = 0.0;
                    tr.ds[i] = c - z;
                    tr.dz[i] = -s;
                } else {
                    out[i] = s * (r - z);
                    tr.dv[i] = 1.0;
                    tr.ds[i] = ru - u;
                    tr.dz[i] = 0.0;
                }
            }
        }
    }
}

/// Activation quantizer over a tensor (unsigned grid).
pub fn quantize_act(v: &Tensor, p: &QuantParams) -> Tensor {
    v.map(|x| fake_quant(x, p, Grid::Unsigned, Rounding::Nearest))
}

/// Weight quantizer over a tensor (signed grid).
pub fn quantize_weight(v: &Tensor, p: &QuantParams) -> Tensor {
    v.map(|x| fake_quant(x, p, Grid::Signed, Rounding::Nearest))
}

/// Observed value range of a tensor.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TensorRange {
    pub min: f64,
    pub max: f64,
}

impl TensorRange {
    pub fn empty() -> Self {
        Self { min: f64::INFINITY, max: f64::NEG_INFINITY }
    }

    pub fn of(values: &[f64]) -> Self {
        let mut r = Self::empty();
        r.observe(values);
        r
    }

    pub fn observe(&mut self, values: &[f64]) {
        for &v in values {
            self.min = self.min.min(v);
            self.max = self.max.max(v);
        }
    }
}

/// Min-max initialization. Unsigned grids map `[min, max]` onto
/// `[0, 2^b - 1]` with `z = -min / s`; signed grids are symmetric with `z = 0`.
/// Degenerate ranges fall back to [`MIN_SCALE`].
pub fn init_minmax(range: TensorRange, bits: u8, grid: Grid) -> QuantParams {
    let (lo, hi) = grid.range(bits);
    let (min, max) = if range.min.is_finite() && range.max.is_finite() { (range.min, range.max) } else { (0.0, 0.0) };
    match grid {
        Grid::Unsigned => {
            let raw = (max - min) / (hi - lo);
            let scale = if raw > MIN_SCALE { raw } else { MIN_SCALE };
            QuantParams { scale, zero_point: -min / scale, bits }
        }
        Grid::Signed => {
            let raw = min.abs().max(max.abs()) / hi;
            let scale = if raw > MIN_SCALE { raw } else { MIN_SCALE };
            QuantParams { scale, zero_point: 0.0, bits }
        }
    }
}
