//! Uniform fake-quantizers with straight-through gradients, plus the
//! per-edge branch mixture consumed by quantizable layers.

use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// A bit-width in `[1, 32]`; 32 denotes full precision.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(try_from = "u32", into = "u32")]
pub struct BitWidth(u8);

impl BitWidth {
    pub const FULL: BitWidth = BitWidth(32);

    pub fn new(bits: u32) -> Result<Self> {
        if (1..=32).contains(&bits) {
            Ok(Self(bits as u8))
        } else {
            Err(Error::InvalidBitWidth(bits))
        }
    }

    pub fn bits(self) -> u32 {
        self.0 as u32
    }

    pub fn is_full(self) -> bool {
        self.0 == 32
    }

    /// Number of grid steps, `2^b - 1`.
    fn steps(self) -> f64 {
        ((1u64 << self.0) - 1) as f64
    }
}

impl TryFrom<u32> for BitWidth {
    type Error = Error;
    fn try_from(bits: u32) -> Result<Self> {
        Self::new(bits)
    }
}

impl From<BitWidth> for u32 {
    fn from(b: BitWidth) -> u32 {
        b.bits()
    }
}

impl fmt::Display for BitWidth {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// Activation clipping range. Immutable once constructed.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QuantizerState {
    clip_max: f64,
}

impl QuantizerState {
    pub fn new(clip_max: f64) -> Result<Self> {
        if clip_max.is_finite() && clip_max > 0.0 {
            Ok(Self { clip_max })
        } else {
            Err(Error::InvalidQuantizer(format!(
                "clip_max must be positive and finite, got {clip_max}"
            )))
        }
    }

    pub fn clip_max(&self) -> f64 {
        self.clip_max
    }
}

impl Default for QuantizerState {
    fn default() -> Self {
        Self { clip_max: 1.0 }
    }
}

/// Symmetric per-tensor quantization onto `2^b` levels spanning `[-max|w|, max|w|]`.
pub fn quantize_weights(w: &Tensor, b: BitWidth) -> Tensor {
    if b.is_full() {
        return w.clone();
    }
    let scale = w.max_abs();
    if scale == 0.0 {
        return Tensor::zeros(w.shape());
    }
    let steps = b.steps();
    w.map(|x| {
        let k = ((x + scale) / (2.0 * scale) * steps).round().clamp(0.0, steps);
        scale * (2.0 * k / steps - 1.0)
    })
}

/// Unsigned uniform quantization onto `2^b` levels spanning `[0, clip_max]`.
/// Values outside the range saturate; `b = 32` only clips.
pub fn quantize_activations(a: &Tensor, b: BitWidth, state: &QuantizerState) -> Tensor {
    let clip = state.clip_max;
    if b.is_full() {
        return a.map(|x| x.clamp(0.0, clip));
    }
    let steps = b.steps();
    a.map(|x| {
        let k = (x.clamp(0.0, clip) / clip * steps).round();
        clip * k / steps
    })
}

/// Straight-through gradient of the activation quantizer: identity inside
/// `[0, clip_max]`, zero outside.
pub fn ste_grad(upstream: &Tensor, input: &Tensor, state: &QuantizerState) -> Result<Tensor> {
    if upstream.shape() != input.shape() {
        return Err(Error::Shape(format!(
            "ste_grad: upstream {:?} vs input {:?}",
            upstream.shape(),
            input.shape()
        )));
    }
    let clip = state.clip_max;
    let data = upstream
        .data()
        .iter()
        .zip(input.data())
        .map(|(&g, &x)| if (0.0..=clip).contains(&x) { g } else { 0.0 })
        .collect();
    Tensor::new(upstream.shape().to_vec(), data)
}

/// Fraction of the magnitude distribution kept inside the clip range.
pub const CLIP_PERCENTILE: f64 = 0.999;

/// Sets `clip_max` to the 99.9th percentile (linear interpolation) of the
/// observed activation magnitudes. An all-zero stream falls back to 1.0.
pub fn calibrate_clip<'a, I>(activations: I) -> Result<QuantizerState>
where
    I: IntoIterator<Item = &'a Tensor>,
{
    let mut mags: Vec<f64> = Vec::new();
    for t in activations {
        mags.extend(t.data().iter().map(|x| x.abs()));
    }
    if mags.is_empty() {
        return Err(Error::EmptyCalibration);
    }
    if mags.iter().any(|x| !x.is_finite()) {
        return Err(Error::InvalidQuantizer(
            "non-finite calibration activation".into(),
        ));
    }
    mags.sort_by(|a, b| a.total_cmp(b));
    let pos = CLIP_PERCENTILE * (mags.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let frac = pos - lo as f64;
    let clip = mags[lo] + (mags[hi] - mags[lo]) * frac;
    if clip > 0.0 {
        QuantizerState::new(clip)
    } else {
        Ok(QuantizerState::default())
    }
}

/// One candidate branch on a quantized edge.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Branch {
    Quant(BitWidth),
    /// Seeded uniform noise in place of the quantized tensor. Used to plant
    /// a useless candidate in diagnostic experiments.
    Noise(u64),
}

/// Convex mixture of branches on one edge. An empty mixture is a
/// full-precision pass-through.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct EdgeMix {
    pub branches: Vec<Branch>,
    pub weights: Vec<f64>,
}

impl EdgeMix {
    pub fn full_precision() -> Self {
        Self::default()
    }

    pub fn fixed(branch: Branch) -> Self {
        Self {
            branches: vec![branch],
            weights: vec![1.0],
        }
    }

    pub fn uniform(branches: Vec<Branch>) -> Self {
        let k = branches.len();
        Self {
            weights: vec![1.0 / k as f64; k],
            branches,
        }
    }

    pub fn is_full_precision(&self) -> bool {
        self.branches.is_empty()
    }
}

fn noise_like(shape: &[usize], seed: u64, lo: f64, hi: f64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| rng.gen_range(lo..=hi)).collect();
    Tensor::new(shape.to_vec(), data).expect("noise shape")
}

/// Output of one branch on a weight edge.
pub fn weight_branch(w: &Tensor, branch: Branch) -> Tensor {
    match branch {
        Branch::Quant(b) => quantize_weights(w, b),
        Branch::Noise(seed) => {
            let s = match w.max_abs() {
                s if s > 0.0 => s,
                _ => 1.0,
            };
            noise_like(w.shape(), seed, -s, s)
        }
    }
}

/// Output of one branch on an activation edge. Inside an edge, 32 bits is a
/// pass-through so that an all-32-bit network equals the unquantized one.
pub fn act_branch(x: &Tensor, branch: Branch, state: &QuantizerState) -> Tensor {
    match branch {
        Branch::Quant(b) if b.is_full() => x.clone(),
        Branch::Quant(b) => quantize_activations(x, b, state),
        Branch::Noise(seed) => noise_like(x.shape(), seed, 0.0, state.clip_max),
    }
}

/// Straight-through factor of an activation branch at input value `x`.
pub fn act_branch_ste(x: f64, branch: Branch, state: &QuantizerState) -> f64 {
    match branch {
        Branch::Quant(b) if b.is_full() => 1.0,
        Branch::Quant(_) => {
            if (0.0..=state.clip_max).contains(&x) {
                1.0
            } else {
                0.0
            }
        }
        Branch::Noise(_) => 0.0,
    }
}

/// Straight-through factor of a weight branch. Weights always lie inside the
/// symmetric range, so quantized branches pass gradients unchanged.
pub fn weight_branch_ste(branch: Branch) -> f64 {
    match branch {
        Branch::Quant(_) => 1.0,
        Branch::Noise(_) => 0.0,
    }
}
