//! Seeded synthetic Q/K traces with controllable concentration, and the
//! brute-force attention matrix used as ground truth in tests.
//!
//! # Sampling model
//!
//! Every band of every head draws, per token, an angle and a magnitude:
//!
//! - angle = center angle + offset, where the offset is wrapped-normal with
//!   variance `1/κ` (`κ = 0`: uniform on `[−π, π)`; `κ = ∞`: always 0). The
//!   population mean resultant length is therefore `exp(−1/(2κ))`.
//! - magnitude = center magnitude · `exp(norm_jitter · z)`, `z ~ N(0, 1)`.
//!
//! Draw order is token-major: for each token, each query head then each key
//! head, each band, four uniforms `u1..u4` (angle: `u1, u2`; magnitude:
//! `u3, u4`). Uniforms are `(next_u64 >> 11) · 2⁻⁵³` from `ChaCha20Rng`
//! seeded with `seed_from_u64(seed)`; normals are Box–Muller
//! `sqrt(−2 ln(1 − u_a)) · cos(2π u_b)`. Values are rounded to f32 so a
//! generated trace equals its `QKT1` round trip.

use std::f64::consts::{PI, TAU};

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use crate::rope::{logit_exact, BandVector, FrequencySpec};
use crate::stats::QkTrace;
use crate::{Error, Result};

pub const GENERATOR_ID: &str = "rand_chacha-0.9/ChaCha20Rng/seed_from_u64";
pub const ORACLE_MAX_TOKENS: usize = 4096;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BandCenter {
    pub angle: f64,
    pub magnitude: f64,
}

/// Generative description of one synthetic attention head. All heads of a
/// generated trace share it and differ only in their random draws.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthHeadSpec {
    pub head_dim: usize,
    pub q_centers: Vec<BandCenter>,
    pub k_centers: Vec<BandCenter>,
    /// Per-band angular concentration κ ≥ 0; may be `inf`.
    pub concentration: Vec<f64>,
    pub norm_jitter: f64,
    pub seed: u64,
}

impl SynthHeadSpec {
    /// A spec with a fixed, band-varying set of centers and the same κ on
    /// every band.
    pub fn with_uniform_kappa(head_dim: usize, kappa: f64, norm_jitter: f64, seed: u64) -> Self {
        let bands = head_dim / 2;
        let q_centers = (0..bands)
            .map(|f| BandCenter {
                angle: (0.7 * f as f64 + 0.4).rem_euclid(TAU),
                magnitude: 2.0 * 0.85f64.powi(f as i32) + 0.2,
            })
            .collect();
        let k_centers = (0..bands)
            .map(|f| BandCenter {
                angle: (1.1 - 1.3 * f as f64).rem_euclid(TAU),
                magnitude: 1.5 * 0.9f64.powi(f as i32) + 0.2,
            })
            .collect();
        Self {
            head_dim,
            q_centers,
            k_centers,
            concentration: vec![kappa; bands],
            norm_jitter,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.head_dim < 2 || !self.head_dim.is_multiple_of(2) {
            return Err(Error::InvalidDimension(format!(
                "head_dim must be even and >= 2, got {}",
                self.head_dim
            )));
        }
        let bands = self.head_dim / 2;
        if self.q_centers.len() != bands
            || self.k_centers.len() != bands
            || self.concentration.len() != bands
        {
            return Err(Error::InvalidDimension(format!(
                "centers and concentration must have {bands} entries"
            )));
        }
        if self.concentration.iter().any(|k| k.is_nan() || *k < 0.0) {
            return Err(Error::InvalidArgument("concentration must be >= 0".into()));
        }
        if !self.norm_jitter.is_finite() || self.norm_jitter < 0.0 {
            return Err(Error::InvalidArgument(
                "norm_jitter must be finite and >= 0".into(),
            ));
        }
        Ok(())
    }
}

/// Provenance record written next to a generated trace.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthProvenance {
    pub generator: String,
    pub angle_distribution: String,
    pub norm_distribution: String,
    pub num_tokens: usize,
    pub num_q_heads: usize,
    pub num_k_heads: usize,
    pub spec: SynthHeadSpec,
}

impl SynthProvenance {
    pub fn new(
        spec: &SynthHeadSpec,
        num_tokens: usize,
        num_q_heads: usize,
        num_k_heads: usize,
    ) -> Self {
        Self {
            generator: GENERATOR_ID.into(),
            angle_distribution: "wrapped-normal offset, variance 1/kappa; kappa=0 uniform".into(),
            norm_distribution: "magnitude * exp(norm_jitter * z)".into(),
            num_tokens,
            num_q_heads,
            num_k_heads,
            spec: spec.clone(),
        }
    }
}

struct Sampler(ChaCha20Rng);

impl Sampler {
    fn uniform(&mut self) -> f64 {
        (self.0.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    fn normal_from(a: f64, b: f64) -> f64 {
        (-2.0 * (1.0 - a).ln()).sqrt() * (TAU * b).cos()
    }

    fn band(&mut self, center: BandCenter, kappa: f64, jitter: f64) -> BandVector {
        let (u1, u2, u3, u4) = (
            self.uniform(),
            self.uniform(),
            self.uniform(),
            self.uniform(),
        );
        let offset = if kappa == 0.0 {
            TAU * u1 - PI
        } else if kappa.is_infinite() {
            0.0
        } else {
            Self::normal_from(u1, u2) / kappa.sqrt()
        };
        let magnitude = center.magnitude * (jitter * Self::normal_from(u3, u4)).exp();
        let v = BandVector::from_polar(magnitude, center.angle + offset);
        BandVector::new(v.re as f32 as f64, v.im as f32 as f64)
    }
}

/// Samples a trace of `num_tokens` tokens at positions `0..num_tokens`.
pub fn generate_trace(
    spec: &SynthHeadSpec,
    num_tokens: usize,
    num_q_heads: usize,
    num_k_heads: usize,
) -> Result<QkTrace> {
    spec.validate()?;
    if num_tokens == 0
        || num_q_heads == 0
        || num_k_heads == 0
        || !num_q_heads.is_multiple_of(num_k_heads)
    {
        return Err(Error::InvalidDimension(format!(
            "need positive counts with num_q_heads a multiple of num_k_heads, got T={num_tokens}, Hq={num_q_heads}, Hk={num_k_heads}"
        )));
    }
    let mut sampler = Sampler(ChaCha20Rng::seed_from_u64(spec.seed));
    let mut q = Vec::with_capacity(num_tokens * num_q_heads * spec.head_dim);
    let mut k = Vec::with_capacity(num_tokens * num_k_heads * spec.head_dim);
    for _ in 0..num_tokens {
        for (out, centers, heads) in [
            (&mut q, &spec.q_centers, num_q_heads),
            (&mut k, &spec.k_centers, num_k_heads),
        ] {
            for _ in 0..heads {
                for (c, &kappa) in centers.iter().zip(&spec.concentration) {
                    let b = sampler.band(*c, kappa, spec.norm_jitter);
                    out.push(b.re);
                    out.push(b.im);
                }
            }
        }
    }
    QkTrace::new(num_q_heads, num_k_heads, spec.head_dim, q, k, None)
}

/// Lower-triangular matrix of exact logits for one query head: row `i`
/// holds `logit_exact(q_i, p_i, k_j, p_j)` for `j = 0..=i`.
pub fn oracle_attention_matrix(
    trace: &QkTrace,
    spec: &FrequencySpec,
    q_head: usize,
) -> Result<Vec<Vec<f64>>> {
    if trace.num_tokens() > ORACLE_MAX_TOKENS {
        return Err(Error::SizeLimit(format!(
            "{} tokens exceeds the oracle limit of {ORACLE_MAX_TOKENS}",
            trace.num_tokens()
        )));
    }
    if q_head >= trace.num_q_heads() {
        return Err(Error::InvalidArgument(format!(
            "query head {q_head} out of range (trace has {})",
            trace.num_q_heads()
        )));
    }
    let k_head = trace.paired_k_head(q_head);
    let positions = trace.positions();
    let keys: Vec<_> = (0..trace.num_tokens())
        .map(|j| trace.k_vector(j, k_head))
        .collect();
    (0..trace.num_tokens())
        .map(|i| {
            let q = trace.q_vector(i, q_head);
            (0..=i)
                .map(|j| logit_exact(&q, positions[i], &keys[j], positions[j], spec))
                .collect()
        })
        .collect()
}
