//! Key importance scores.
//!
//! For a cached key `k` at distance `Δ` from the current decode position:
//!
//! - `S_trig(k, Δ) = Σ_f ‖E[q_f]‖·‖k_f‖·cos(ω_f Δ + arg E[q_f] − arg k_f)`
//! - `S_norm(k)    = Σ_f (1 − R_f)·E[‖q_f‖]·‖k_f‖`
//! - `S(k, Δ)      = S_trig + S_norm`
//! - `S̃(k)         = mean over δ ∈ D of S(k, Δ + δ)`
//!
//! [`HeadScorer`] precomputes the per-band query-side terms of one head so
//! the cache can score many keys cheaply; the free functions are thin
//! wrappers over it.

use serde::{Deserialize, Serialize};

use crate::rope::{FrequencySpec, HeadVector};
use crate::stats::HeadStats;
use crate::{Error, Result};

pub const DEFAULT_MAX_OFFSET: u64 = 1 << 16;

/// Future offsets `D` at which a key's score is averaged.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<u64>", into = "Vec<u64>")]
pub struct OffsetSet {
    offsets: Vec<u64>,
}

impl TryFrom<Vec<u64>> for OffsetSet {
    type Error = Error;

    fn try_from(offsets: Vec<u64>) -> Result<Self> {
        Self::new(offsets)
    }
}

impl From<OffsetSet> for Vec<u64> {
    fn from(o: OffsetSet) -> Self {
        o.offsets
    }
}

impl Default for OffsetSet {
    /// `{1, 2, 4, …, 2^16}`, 17 offsets.
    fn default() -> Self {
        Self::geometric(1, DEFAULT_MAX_OFFSET).expect("default offsets are valid")
    }
}

impl OffsetSet {
    pub fn new(offsets: Vec<u64>) -> Result<Self> {
        if offsets.is_empty() {
            return Err(Error::InvalidArgument("offset set is empty".into()));
        }
        if offsets[0] == 0 {
            return Err(Error::InvalidArgument("offsets must be positive".into()));
        }
        if offsets.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::InvalidArgument(
                "offsets must be strictly increasing".into(),
            ));
        }
        Ok(Self { offsets })
    }

    /// `min, 2·min, 4·min, …` while `<= max`.
    pub fn geometric(min: u64, max: u64) -> Result<Self> {
        if min == 0 || max < min {
            return Err(Error::InvalidArgument(format!(
                "geometric offsets need 1 <= min <= max, got {min}..{max}"
            )));
        }
        let mut offsets = vec![min];
        while let Some(next) = offsets.last().unwrap().checked_mul(2) {
            if next > max {
                break;
            }
            offsets.push(next);
        }
        Self::new(offsets)
    }

    /// `count` offsets evenly spaced over `[min, max]`, rounded to integers.
    pub fn linear(min: u64, max: u64, count: usize) -> Result<Self> {
        if min == 0 || max < min || count == 0 {
            return Err(Error::InvalidArgument(format!(
                "linear offsets need 1 <= min <= max and count >= 1, got {min}..{max} x {count}"
            )));
        }
        if count == 1 {
            return Self::new(vec![min]);
        }
        let span = (max - min) as f64;
        let offsets = (0..count)
            .map(|i| min + (span * i as f64 / (count - 1) as f64).round() as u64)
            .collect();
        Self::new(offsets)
    }

    pub fn offsets(&self) -> &[u64] {
        &self.offsets
    }

    pub fn len(&self) -> usize {
        self.offsets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.offsets.is_empty()
    }
}

/// A cached pre-RoPE key with its position and per-band norms.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(from = "KeyRecordRepr", into = "KeyRecordRepr")]
pub struct KeyRecord {
    pub vector: HeadVector,
    pub position: u64,
    band_norms: Vec<f64>,
    band_args: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct KeyRecordRepr {
    vector: HeadVector,
    position: u64,
}

impl From<KeyRecordRepr> for KeyRecord {
    fn from(r: KeyRecordRepr) -> Self {
        KeyRecord::new(r.vector, r.position)
    }
}

impl From<KeyRecord> for KeyRecordRepr {
    fn from(k: KeyRecord) -> Self {
        Self {
            vector: k.vector,
            position: k.position,
        }
    }
}

impl KeyRecord {
    pub fn new(vector: HeadVector, position: u64) -> Self {
        let band_norms = vector.band_norms();
        let band_args = vector.bands.iter().map(|b| b.arg()).collect();
        Self {
            vector,
            position,
            band_norms,
            band_args,
        }
    }

    pub fn band_norms(&self) -> &[f64] {
        &self.band_norms
    }

    fn band_arg(&self, f: usize) -> f64 {
        self.band_args[f]
    }
}

/// Which terms enter the combined score.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ScoreVariant {
    /// `S_trig + S_norm`.
    #[default]
    Full,
    /// `S_norm` only.
    NoTrig,
    /// `S_trig + S_norm⁽⁰⁾`, dropping the `(1 − R_f)` weighting.
    NoMrlWeight,
}

/// Precomputed query-side terms of one head.
#[derive(Debug, Clone)]
pub struct HeadScorer {
    frequencies: Vec<f64>,
    center_norm: Vec<f64>,
    center_arg: Vec<f64>,
    norm_weight: Vec<f64>,
    variant: ScoreVariant,
}

impl HeadScorer {
    pub fn new(head: &HeadStats, spec: &FrequencySpec, variant: ScoreVariant) -> Result<Self> {
        if head.bands.len() != spec.num_bands() {
            return Err(Error::InvalidDimension(format!(
                "head {} has {} bands, spec has {}",
                head.q_head_index,
                head.bands.len(),
                spec.num_bands()
            )));
        }
        let norm_weight = head
            .bands
            .iter()
            .map(|b| match variant {
                ScoreVariant::NoMrlWeight => b.mean_norm_q,
                _ => (1.0 - b.mrl_q) * b.mean_norm_q,
            })
            .collect();
        Ok(Self {
            frequencies: spec.frequencies().to_vec(),
            center_norm: head.bands.iter().map(|b| b.mean_q.norm()).collect(),
            center_arg: head.bands.iter().map(|b| b.mean_q.arg()).collect(),
            norm_weight,
            variant,
        })
    }

    fn check(&self, key: &KeyRecord) -> Result<()> {
        if key.band_norms.len() != self.frequencies.len() {
            return Err(Error::InvalidDimension(format!(
                "key has {} bands, scorer expects {}",
                key.band_norms.len(),
                self.frequencies.len()
            )));
        }
        Ok(())
    }

    /// `S_trig(k, Δ)`.
    pub fn trig(&self, key: &KeyRecord, delta: f64) -> f64 {
        let mut total = 0.0;
        for f in 0..self.frequencies.len() {
            let kn = key.band_norms[f];
            if kn == 0.0 || self.center_norm[f] == 0.0 {
                continue;
            }
            let phase = self.center_arg[f] - key.band_arg(f);
            total += self.center_norm[f] * kn * (self.frequencies[f] * delta + phase).cos();
        }
        total
    }

    /// The norm term selected by the variant (`S_norm` or `S_norm⁽⁰⁾`).
    pub fn norm(&self, key: &KeyRecord) -> f64 {
        self.norm_weight
            .iter()
            .zip(&key.band_norms)
            .map(|(w, kn)| w * kn)
            .sum()
    }

    /// `S(k, Δ)` for the configured variant.
    pub fn combined(&self, key: &KeyRecord, delta: f64) -> f64 {
        match self.variant {
            ScoreVariant::NoTrig => self.norm(key),
            _ => self.trig(key, delta) + self.norm(key),
        }
    }

    /// `S̃(k)` at decode position `current_position`.
    pub fn averaged(
        &self,
        key: &KeyRecord,
        current_position: u64,
        offsets: &OffsetSet,
    ) -> Result<f64> {
        self.check(key)?;
        if current_position < key.position {
            return Err(Error::Causality {
                query: current_position,
                key: key.position,
            });
        }
        let delta = current_position - key.position;
        // S_norm does not depend on Δ; hoist it out of the offset loop
        let norm = self.norm(key);
        let trig_part = match self.variant {
            ScoreVariant::NoTrig => 0.0,
            _ => average_over_offsets(delta, offsets, |d| self.trig(key, d as f64)),
        };
        Ok(trig_part + norm)
    }
}

/// `(1/|D|)·Σ_{δ∈D} score(Δ + δ)`, calling `score` exactly once per offset.
pub fn average_over_offsets(
    delta: u64,
    offsets: &OffsetSet,
    mut score: impl FnMut(u64) -> f64,
) -> f64 {
    let total: f64 = offsets.offsets().iter().map(|&o| score(delta + o)).sum();
    total / offsets.len() as f64
}

fn scorer(head: &HeadStats, spec: &FrequencySpec, variant: ScoreVariant) -> HeadScorer {
    HeadScorer::new(head, spec, variant).expect("head stats must match the frequency spec")
}

/// `S_trig(k, Δ)`.
///
/// # Panics
/// If `head` does not have one band per frequency of `spec`.
pub fn score_trig(key: &KeyRecord, delta: u64, head: &HeadStats, spec: &FrequencySpec) -> f64 {
    scorer(head, spec, ScoreVariant::Full).trig(key, delta as f64)
}

/// `S_norm⁽⁰⁾(k) = Σ_f E[‖q_f‖]·‖k_f‖`.
pub fn score_norm_base(key: &KeyRecord, head: &HeadStats) -> f64 {
    head.bands
        .iter()
        .zip(key.band_norms())
        .map(|(b, kn)| b.mean_norm_q * kn)
        .sum()
}

/// `S_norm(k) = Σ_f (1 − R_f)·E[‖q_f‖]·‖k_f‖`.
pub fn score_norm(key: &KeyRecord, head: &HeadStats) -> f64 {
    head.bands
        .iter()
        .zip(key.band_norms())
        .map(|(b, kn)| (1.0 - b.mrl_q) * b.mean_norm_q * kn)
        .sum()
}

/// `Σ_f (E[‖q_f‖] − ‖E[q_f]‖)·‖k_f‖`, algebraically equal to [`score_norm`].
pub fn score_norm_centered(key: &KeyRecord, head: &HeadStats) -> f64 {
    head.bands
        .iter()
        .zip(key.band_norms())
        .map(|(b, kn)| (b.mean_norm_q - b.mean_q.norm()) * kn)
        .sum()
}

/// `S(k, Δ) = S_trig + S_norm`.
pub fn score_combined(key: &KeyRecord, delta: u64, head: &HeadStats, spec: &FrequencySpec) -> f64 {
    score_trig(key, delta, head, spec) + score_norm(key, head)
}

/// `S̃(k)`: the combined score averaged over `Δ + δ` for every δ in `offsets`.
pub fn score_averaged(
    key: &KeyRecord,
    current_position: u64,
    head: &HeadStats,
    spec: &FrequencySpec,
    offsets: &OffsetSet,
) -> Result<f64> {
    HeadScorer::new(head, spec, ScoreVariant::Full)?.averaged(key, current_position, offsets)
}
