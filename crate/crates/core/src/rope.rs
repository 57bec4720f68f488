//! Rotary position embedding: the frequency schedule, the per-band rotation
//! and the exact attention logit.
//!
//! A head vector of dimension `d` is split into `d/2` frequency bands, each
//! a complex number `x[2f] + i·x[2f+1]`. Band `f` rotates at
//! `ω_f = θ^(-2f/d)` radians per position. The logit between a query at
//! `p_q` and a key at `p_k` can be computed two ways:
//!
//! - [`logit_exact`]: rotate both vectors, then take the real dot product.
//! - [`logit_bands`]: `Σ_f ‖q_f‖·‖k_f‖·cos(ω_f·Δ + φ_f)` with `Δ = p_q − p_k`
//!   and `φ_f = arg q_f − arg k_f`.
//!
//! The two agree to rounding; tests use each as the other's oracle.

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

pub const DEFAULT_THETA: f64 = 10_000.0;

/// RoPE frequency schedule for one head dimension.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "FrequencySpecRepr")]
pub struct FrequencySpec {
    head_dim: usize,
    theta: f64,
    frequencies: Vec<f64>,
}

#[derive(Deserialize)]
struct FrequencySpecRepr {
    head_dim: usize,
    theta: f64,
    #[serde(default)]
    frequencies: Option<Vec<f64>>,
}

impl TryFrom<FrequencySpecRepr> for FrequencySpec {
    type Error = Error;

    fn try_from(repr: FrequencySpecRepr) -> Result<Self> {
        let spec = FrequencySpec::new(repr.head_dim, repr.theta)?;
        if let Some(freqs) = repr.frequencies {
            let consistent = freqs.len() == spec.frequencies.len()
                && freqs
                    .iter()
                    .zip(&spec.frequencies)
                    .all(|(a, b)| (a - b).abs() <= 1e-12 * b.abs().max(1e-300));
            if !consistent {
                return Err(Error::Format(
                    "frequencies do not match head_dim/theta schedule".into(),
                ));
            }
        }
        Ok(spec)
    }
}

impl FrequencySpec {
    pub fn new(head_dim: usize, theta: f64) -> Result<Self> {
        if head_dim < 2 || !head_dim.is_multiple_of(2) {
            return Err(Error::InvalidDimension(format!(
                "head_dim must be even and >= 2, got {head_dim}"
            )));
        }
        if !theta.is_finite() || theta <= 1.0 {
            return Err(Error::InvalidBase(theta));
        }
        let d = head_dim as f64;
        let frequencies = (0..head_dim / 2)
            .map(|f| theta.powf(-2.0 * f as f64 / d))
            .collect();
        Ok(Self {
            head_dim,
            theta,
            frequencies,
        })
    }

    pub fn head_dim(&self) -> usize {
        self.head_dim
    }

    pub fn theta(&self) -> f64 {
        self.theta
    }

    pub fn num_bands(&self) -> usize {
        self.frequencies.len()
    }

    pub fn frequencies(&self) -> &[f64] {
        &self.frequencies
    }

    fn check(&self, v: &HeadVector) -> Result<()> {
        if v.num_bands() != self.num_bands() {
            return Err(Error::InvalidDimension(format!(
                "vector has {} bands, spec expects {}",
                v.num_bands(),
                self.num_bands()
            )));
        }
        Ok(())
    }
}

/// One frequency band as a complex number.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(from = "[f64; 2]", into = "[f64; 2]")]
pub struct BandVector {
    pub re: f64,
    pub im: f64,
}

impl From<[f64; 2]> for BandVector {
    fn from([re, im]: [f64; 2]) -> Self {
        Self { re, im }
    }
}

impl From<BandVector> for [f64; 2] {
    fn from(b: BandVector) -> Self {
        [b.re, b.im]
    }
}

impl BandVector {
    pub const ZERO: BandVector = BandVector { re: 0.0, im: 0.0 };

    pub const fn new(re: f64, im: f64) -> Self {
        Self { re, im }
    }

    pub fn from_polar(magnitude: f64, angle: f64) -> Self {
        let (s, c) = angle.sin_cos();
        Self::new(magnitude * c, magnitude * s)
    }

    pub fn norm(self) -> f64 {
        self.re.hypot(self.im)
    }

    /// `atan2(im, re)`, with the zero vector (either sign of zero) mapped to 0.
    pub fn arg(self) -> f64 {
        if self.is_zero() {
            0.0
        } else {
            self.im.atan2(self.re)
        }
    }

    pub fn is_zero(self) -> bool {
        self.re == 0.0 && self.im == 0.0
    }

    /// Multiplication by `e^{i·angle}`.
    pub fn rotate(self, angle: f64) -> Self {
        let (s, c) = angle.sin_cos();
        Self::new(self.re * c - self.im * s, self.re * s + self.im * c)
    }

    pub fn scale(self, c: f64) -> Self {
        Self::new(self.re * c, self.im * c)
    }

    /// Real dot product of the two 2-vectors, i.e. `Re(self · conj(other))`.
    pub fn dot(self, other: Self) -> f64 {
        self.re * other.re + self.im * other.im
    }
}

/// Full pre-RoPE vector of one head for one token, as `d/2` bands.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(transparent)]
pub struct HeadVector {
    pub bands: Vec<BandVector>,
}

impl HeadVector {
    pub fn new(bands: Vec<BandVector>) -> Self {
        Self { bands }
    }

    /// Builds a head vector from `[x0, x1, x2, x3, ...]`, pairing adjacent
    /// components into bands.
    pub fn from_interleaved(values: &[f64]) -> Result<Self> {
        if values.is_empty() || !values.len().is_multiple_of(2) {
            return Err(Error::InvalidDimension(format!(
                "interleaved vector length must be even and nonzero, got {}",
                values.len()
            )));
        }
        Ok(Self {
            bands: values
                .chunks_exact(2)
                .map(|c| BandVector::new(c[0], c[1]))
                .collect(),
        })
    }

    pub fn to_interleaved(&self) -> Vec<f64> {
        self.bands.iter().flat_map(|b| [b.re, b.im]).collect()
    }

    pub fn num_bands(&self) -> usize {
        self.bands.len()
    }

    pub fn band_norms(&self) -> Vec<f64> {
        self.bands.iter().map(|b| b.norm()).collect()
    }

    pub fn norm(&self) -> f64 {
        self.bands
            .iter()
            .map(|b| b.re * b.re + b.im * b.im)
            .sum::<f64>()
            .sqrt()
    }

    pub fn scale(&self, c: f64) -> Self {
        Self::new(self.bands.iter().map(|b| b.scale(c)).collect())
    }

    pub fn dot(&self, other: &Self) -> f64 {
        self.bands
            .iter()
            .zip(&other.bands)
            .map(|(a, b)| a.dot(*b))
            .sum()
    }
}

/// Applies RoPE at `position`: band `f` is multiplied by `e^{i·ω_f·position}`.
pub fn rotate(v: &HeadVector, position: u64, spec: &FrequencySpec) -> Result<HeadVector> {
    spec.check(v)?;
    let p = position as f64;
    Ok(HeadVector::new(
        v.bands
            .iter()
            .zip(spec.frequencies())
            .map(|(b, &w)| b.rotate(w * p))
            .collect(),
    ))
}

fn check_pair(
    q: &HeadVector,
    p_q: u64,
    k: &HeadVector,
    p_k: u64,
    spec: &FrequencySpec,
) -> Result<()> {
    spec.check(q)?;
    spec.check(k)?;
    if p_q < p_k {
        return Err(Error::Causality {
            query: p_q,
            key: p_k,
        });
    }
    Ok(())
}

/// Rotate-then-dot attention logit.
pub fn logit_exact(
    q: &HeadVector,
    p_q: u64,
    k: &HeadVector,
    p_k: u64,
    spec: &FrequencySpec,
) -> Result<f64> {
    check_pair(q, p_q, k, p_k, spec)?;
    Ok(rotate(q, p_q, spec)?.dot(&rotate(k, p_k, spec)?))
}

/// Amplitude/phase form of the attention logit. Depends on positions only
/// through `Δ = p_q − p_k`.
pub fn logit_bands(
    q: &HeadVector,
    p_q: u64,
    k: &HeadVector,
    p_k: u64,
    spec: &FrequencySpec,
) -> Result<f64> {
    check_pair(q, p_q, k, p_k, spec)?;
    let delta = (p_q - p_k) as f64;
    Ok(q.bands
        .iter()
        .zip(&k.bands)
        .zip(spec.frequencies())
        .map(|((qf, kf), &w)| band_term(*qf, *kf, w * delta))
        .sum())
}

/// `‖q‖·‖k‖·cos(angle + arg q − arg k)`, zero when either side is zero.
#[inline]
pub(crate) fn band_term(q: BandVector, k: BandVector, angle: f64) -> f64 {
    if q.is_zero() || k.is_zero() {
        return 0.0;
    }
    q.norm() * k.norm() * (angle + q.arg() - k.arg()).cos()
}

/// Constant coefficients of one band of the trigonometric series
/// `a·cos(ω Δ) + b·sin(ω Δ)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrigCoefficient {
    pub a: f64,
    pub b: f64,
}

/// `a_f = ‖q_f‖‖k_f‖ cos φ_f`, `b_f = −‖q_f‖‖k_f‖ sin φ_f`.
pub fn trig_coefficients(q: &HeadVector, k: &HeadVector) -> Result<Vec<TrigCoefficient>> {
    if q.num_bands() != k.num_bands() {
        return Err(Error::InvalidDimension(format!(
            "query has {} bands, key has {}",
            q.num_bands(),
            k.num_bands()
        )));
    }
    Ok(q.bands
        .iter()
        .zip(&k.bands)
        .map(|(qf, kf)| {
            if qf.is_zero() || kf.is_zero() {
                return TrigCoefficient { a: 0.0, b: 0.0 };
            }
            let amplitude = qf.norm() * kf.norm();
            let phase = qf.arg() - kf.arg();
            TrigCoefficient {
                a: amplitude * phase.cos(),
                b: -amplitude * phase.sin(),
            }
        })
        .collect())
}

/// Evaluates `Σ_f a_f cos(ω_f Δ) + b_f sin(ω_f Δ)`.
pub fn evaluate_trig_series(
    coefficients: &[TrigCoefficient],
    delta: f64,
    spec: &FrequencySpec,
) -> Result<f64> {
    if coefficients.len() != spec.num_bands() {
        return Err(Error::InvalidDimension(format!(
            "{} coefficients for {} bands",
            coefficients.len(),
            spec.num_bands()
        )));
    }
    Ok(coefficients
        .iter()
        .zip(spec.frequencies())
        .map(|(c, &w)| {
            let (s, co) = (w * delta).sin_cos();
            c.a * co + c.b * s
        })
        .sum())
}
