//! Pre-RoPE Q/K traces and their calibration statistics.
//!
//! # `QKT1` layout (little-endian)
//!
//! | field              | type                         |
//! |--------------------|------------------------------|
//! | magic              | `b"QKT1"`                    |
//! | num_tokens `T`     | u32                          |
//! | num_q_heads `Hq`   | u32                          |
//! | num_k_heads `Hk`   | u32                          |
//! | head_dim `d`       | u32                          |
//! | positions flag     | u32, 0 or 1                  |
//! | positions          | `T` × u64, only if flag is 1 |
//! | Q block            | `T·Hq·d` × f32, `[token][head][dim]` |
//! | K block            | `T·Hk·d` × f32, `[token][head][dim]` |
//!
//! Values are widened to f64 on load and narrowed back on write, so a
//! load/write cycle is byte-identical.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::rope::{BandVector, FrequencySpec, HeadVector};
use crate::summation::{pairwise_sum, PairwiseAccumulator};
use crate::{Error, Result};

pub const TRACE_MAGIC: &[u8; 4] = b"QKT1";
const HEADER_LEN: usize = 24;

/// A positioned sequence of pre-RoPE query and key vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct QkTrace {
    num_tokens: usize,
    num_q_heads: usize,
    num_k_heads: usize,
    head_dim: usize,
    q: Vec<f64>,
    k: Vec<f64>,
    positions: Vec<u64>,
    explicit_positions: bool,
}

impl QkTrace {
    /// Builds a trace from flat `[token][head][dim]` arrays. With
    /// `positions == None` tokens sit at `0..num_tokens`.
    pub fn new(
        num_q_heads: usize,
        num_k_heads: usize,
        head_dim: usize,
        q: Vec<f64>,
        k: Vec<f64>,
        positions: Option<Vec<u64>>,
    ) -> Result<Self> {
        if head_dim < 2 || !head_dim.is_multiple_of(2) {
            return Err(Error::InvalidDimension(format!(
                "head_dim must be even and >= 2, got {head_dim}"
            )));
        }
        if num_q_heads == 0 || num_k_heads == 0 || !num_q_heads.is_multiple_of(num_k_heads) {
            return Err(Error::InvalidDimension(format!(
                "num_q_heads {num_q_heads} must be a positive multiple of num_k_heads {num_k_heads}"
            )));
        }
        let q_row = num_q_heads * head_dim;
        if !q.len().is_multiple_of(q_row) {
            return Err(Error::Length(format!(
                "q has {} values, not a multiple of {q_row}",
                q.len()
            )));
        }
        let num_tokens = q.len() / q_row;
        if k.len() != num_tokens * num_k_heads * head_dim {
            return Err(Error::Length(format!(
                "k has {} values, expected {}",
                k.len(),
                num_tokens * num_k_heads * head_dim
            )));
        }
        let explicit_positions = positions.is_some();
        let positions = positions.unwrap_or_else(|| (0..num_tokens as u64).collect());
        if positions.len() != num_tokens {
            return Err(Error::Length(format!(
                "{} positions for {num_tokens} tokens",
                positions.len()
            )));
        }
        if positions.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::Format(
                "positions must be strictly increasing".into(),
            ));
        }
        Ok(Self {
            num_tokens,
            num_q_heads,
            num_k_heads,
            head_dim,
            q,
            k,
            positions,
            explicit_positions,
        })
    }

    pub fn num_tokens(&self) -> usize {
        self.num_tokens
    }

    pub fn num_q_heads(&self) -> usize {
        self.num_q_heads
    }

    pub fn num_k_heads(&self) -> usize {
        self.num_k_heads
    }

    pub fn head_dim(&self) -> usize {
        self.head_dim
    }

    /// GQA group size: query heads per key head.
    pub fn group_size(&self) -> usize {
        self.num_q_heads / self.num_k_heads
    }

    pub fn positions(&self) -> &[u64] {
        &self.positions
    }

    pub fn has_explicit_positions(&self) -> bool {
        self.explicit_positions
    }

    pub fn q_slice(&self, token: usize, head: usize) -> &[f64] {
        let start = (token * self.num_q_heads + head) * self.head_dim;
        &self.q[start..start + self.head_dim]
    }

    pub fn k_slice(&self, token: usize, head: usize) -> &[f64] {
        let start = (token * self.num_k_heads + head) * self.head_dim;
        &self.k[start..start + self.head_dim]
    }

    pub fn q_vector(&self, token: usize, head: usize) -> HeadVector {
        to_head_vector(self.q_slice(token, head))
    }

    pub fn k_vector(&self, token: usize, head: usize) -> HeadVector {
        to_head_vector(self.k_slice(token, head))
    }

    /// Key head shared by query head `q_head`.
    pub fn paired_k_head(&self, q_head: usize) -> usize {
        q_head / self.group_size()
    }

    /// Token index holding `position`, if any.
    pub fn token_at(&self, position: u64) -> Option<usize> {
        self.positions.binary_search(&position).ok()
    }

    /// Serializes to the `QKT1` layout.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(
            HEADER_LEN
                + if self.explicit_positions {
                    8 * self.num_tokens
                } else {
                    0
                }
                + 4 * (self.q.len() + self.k.len()),
        );
        out.extend_from_slice(TRACE_MAGIC);
        for v in [
            self.num_tokens,
            self.num_q_heads,
            self.num_k_heads,
            self.head_dim,
            self.explicit_positions as usize,
        ] {
            out.extend_from_slice(&(v as u32).to_le_bytes());
        }
        if self.explicit_positions {
            for p in &self.positions {
                out.extend_from_slice(&p.to_le_bytes());
            }
        }
        for x in self.q.iter().chain(&self.k) {
            out.extend_from_slice(&(*x as f32).to_le_bytes());
        }
        out
    }

    /// Parses the `QKT1` layout.
    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 4 {
            return Err(Error::Length(format!(
                "{} bytes, too short for magic",
                bytes.len()
            )));
        }
        if &bytes[..4] != TRACE_MAGIC {
            return Err(Error::Format(format!("bad magic {:?}", &bytes[..4])));
        }
        if bytes.len() < HEADER_LEN {
            return Err(Error::Length(format!(
                "{} bytes, header needs {HEADER_LEN}",
                bytes.len()
            )));
        }
        let field = |i: usize| {
            let o = 4 + 4 * i;
            u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap()) as u64
        };
        let (t, hq, hk, d, flag) = (field(0), field(1), field(2), field(3), field(4));
        if flag > 1 {
            return Err(Error::Format(format!(
                "positions flag must be 0 or 1, got {flag}"
            )));
        }
        let position_bytes = flag * t * 8;
        let value_bytes = (t * hq * d + t * hk * d) * 4;
        let expected = HEADER_LEN as u64 + position_bytes + value_bytes;
        if bytes.len() as u64 != expected {
            return Err(Error::Length(format!(
                "payload is {} bytes, header (T={t}, Hq={hq}, Hk={hk}, d={d}, flag={flag}) implies {expected}",
                bytes.len()
            )));
        }
        let mut cursor = HEADER_LEN;
        let positions = (flag == 1).then(|| {
            let ps = bytes[cursor..cursor + position_bytes as usize]
                .chunks_exact(8)
                .map(|c| u64::from_le_bytes(c.try_into().unwrap()))
                .collect::<Vec<_>>();
            cursor += position_bytes as usize;
            ps
        });
        let floats = |from: usize, count: usize| -> Vec<f64> {
            bytes[from..from + 4 * count]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
                .collect()
        };
        let q_count = (t * hq * d) as usize;
        let q = floats(cursor, q_count);
        let k = floats(cursor + 4 * q_count, (t * hk * d) as usize);
        let trace = Self::new(hq as usize, hk as usize, d as usize, q, k, positions).map_err(
            |e| match e {
                Error::InvalidDimension(m) => Error::Format(m),
                other => other,
            },
        )?;
        // an empty block is ambiguous about T; trust the header
        if trace.num_tokens as u64 != t {
            return Err(Error::Length(format!("header declares {t} tokens")));
        }
        Ok(trace)
    }
}

fn to_head_vector(values: &[f64]) -> HeadVector {
    HeadVector::new(
        values
            .chunks_exact(2)
            .map(|c| BandVector::new(c[0], c[1]))
            .collect(),
    )
}

/// Calibrated statistics for one band of one query head, with the
/// corresponding key-side statistics of its paired key head.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BandStats {
    /// `E[q_f]`
    pub mean_q: BandVector,
    /// `E[‖q_f‖]`
    pub mean_norm_q: f64,
    pub mean_k: BandVector,
    pub mean_norm_k: f64,
    /// Query-side mean resultant length `R_f = ‖E[q_f]‖ / E[‖q_f‖]`.
    pub mrl_q: f64,
    pub mrl_k: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeadStats {
    pub q_head_index: usize,
    pub k_head_index: usize,
    /// Whole-vector `‖E[q]‖ / E[‖q‖]`.
    pub mrl_full: f64,
    pub bands: Vec<BandStats>,
}

impl HeadStats {
    /// Query center `E[q]` as a head vector.
    pub fn q_center(&self) -> HeadVector {
        HeadVector::new(self.bands.iter().map(|b| b.mean_q).collect())
    }

    pub fn k_center(&self) -> HeadVector {
        HeadVector::new(self.bands.iter().map(|b| b.mean_k).collect())
    }
}

/// Key-side statistics of one key head.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KeyBandStats {
    pub mean_k: BandVector,
    pub mean_norm_k: f64,
    pub mrl_k: f64,
}

/// Result of [`calibrate`]; also the stats JSON document.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Calibration {
    pub frequency_spec: FrequencySpec,
    pub num_tokens: usize,
    pub num_q_heads: usize,
    pub num_k_heads: usize,
    pub heads: Vec<HeadStats>,
}

impl Calibration {
    pub fn group_size(&self) -> usize {
        self.num_q_heads / self.num_k_heads.max(1)
    }

    /// Key-side statistics per key head, taken from the first query head of
    /// each group.
    pub fn key_heads(&self) -> Vec<Vec<KeyBandStats>> {
        let g = self.group_size().max(1);
        (0..self.num_k_heads)
            .map(|kh| {
                self.heads[kh * g]
                    .bands
                    .iter()
                    .map(|b| KeyBandStats {
                        mean_k: b.mean_k,
                        mean_norm_k: b.mean_norm_k,
                        mrl_k: b.mrl_k,
                    })
                    .collect()
            })
            .collect()
    }

    /// Checks internal consistency after deserialization.
    pub fn validate(&self) -> Result<()> {
        if self.num_k_heads == 0 || !self.num_q_heads.is_multiple_of(self.num_k_heads) {
            return Err(Error::Format(format!(
                "num_q_heads {} is not a multiple of num_k_heads {}",
                self.num_q_heads, self.num_k_heads
            )));
        }
        if self.heads.len() != self.num_q_heads {
            return Err(Error::Format(format!(
                "{} head records for {} query heads",
                self.heads.len(),
                self.num_q_heads
            )));
        }
        let g = self.group_size();
        for (i, h) in self.heads.iter().enumerate() {
            if h.q_head_index != i || h.k_head_index != i / g {
                return Err(Error::Format(format!("head record {i} has wrong indices")));
            }
            if h.bands.len() != self.frequency_spec.num_bands() {
                return Err(Error::Format(format!(
                    "head {i} has {} bands, spec has {}",
                    h.bands.len(),
                    self.frequency_spec.num_bands()
                )));
            }
            let in_unit = |x: f64| (0.0..=1.0).contains(&x);
            if !in_unit(h.mrl_full)
                || h.bands
                    .iter()
                    .any(|b| !in_unit(b.mrl_q) || !in_unit(b.mrl_k))
            {
                return Err(Error::Format(format!("head {i} has MRL outside [0, 1]")));
            }
        }
        Ok(())
    }
}

fn ratio_mrl(resultant: f64, mean_norm: f64) -> f64 {
    if mean_norm > 0.0 {
        (resultant / mean_norm).min(1.0)
    } else {
        0.0
    }
}

/// Per-band running sums over tokens for one head.
struct BandAccumulators {
    re: Vec<PairwiseAccumulator>,
    im: Vec<PairwiseAccumulator>,
    norm: Vec<PairwiseAccumulator>,
}

impl BandAccumulators {
    fn new(bands: usize) -> Self {
        Self {
            re: vec![PairwiseAccumulator::new(); bands],
            im: vec![PairwiseAccumulator::new(); bands],
            norm: vec![PairwiseAccumulator::new(); bands],
        }
    }

    fn push(&mut self, values: &[f64]) {
        for (f, c) in values.chunks_exact(2).enumerate() {
            self.re[f].push(c[0]);
            self.im[f].push(c[1]);
            self.norm[f].push(c[0].hypot(c[1]));
        }
    }

    /// (mean vector, mean norm, MRL) per band.
    fn finish(&self) -> Vec<(BandVector, f64, f64)> {
        (0..self.re.len())
            .map(|f| {
                let n = self.re[f].count() as f64;
                let mean = BandVector::new(self.re[f].sum() / n, self.im[f].sum() / n);
                let mean_norm = self.norm[f].sum() / n;
                (mean, mean_norm, ratio_mrl(mean.norm(), mean_norm))
            })
            .collect()
    }
}

fn accumulate_head<'a>(
    bands: usize,
    rows: impl Iterator<Item = &'a [f64]>,
) -> Vec<(BandVector, f64, f64)> {
    let mut acc = BandAccumulators::new(bands);
    rows.for_each(|r| acc.push(r));
    acc.finish()
}

/// Computes per-head, per-band centers, expected norms and mean resultant
/// lengths over every token of `trace`.
///
/// Sums run in f64 with streaming pairwise summation over tokens. Heads are
/// processed in parallel; each head's result depends only on its own data.
pub fn calibrate(trace: &QkTrace, spec: &FrequencySpec) -> Result<Calibration> {
    if trace.head_dim() != spec.head_dim() {
        return Err(Error::InvalidDimension(format!(
            "trace head_dim {} does not match spec head_dim {}",
            trace.head_dim(),
            spec.head_dim()
        )));
    }
    if trace.num_tokens() == 0 {
        return Err(Error::EmptyInput("trace has no tokens"));
    }
    let nb = spec.num_bands();
    let t = trace.num_tokens();

    let key_stats: Vec<Vec<(BandVector, f64, f64)>> = (0..trace.num_k_heads())
        .into_par_iter()
        .map(|h| accumulate_head(nb, (0..t).map(|tok| trace.k_slice(tok, h))))
        .collect();

    let heads = (0..trace.num_q_heads())
        .into_par_iter()
        .map(|h| {
            let mut acc = BandAccumulators::new(nb);
            let mut full: Vec<PairwiseAccumulator> =
                vec![PairwiseAccumulator::new(); trace.head_dim()];
            let mut full_norm = PairwiseAccumulator::new();
            for tok in 0..t {
                let row = trace.q_slice(tok, h);
                acc.push(row);
                for (a, &x) in full.iter_mut().zip(row) {
                    a.push(x);
                }
                full_norm.push(row.iter().map(|x| x * x).sum::<f64>().sqrt());
            }
            let n = t as f64;
            let resultant = full
                .iter()
                .map(|a| {
                    let m = a.sum() / n;
                    m * m
                })
                .sum::<f64>()
                .sqrt();
            let kh = trace.paired_k_head(h);
            let bands = acc
                .finish()
                .into_iter()
                .zip(&key_stats[kh])
                .map(
                    |((mean_q, mean_norm_q, mrl_q), &(mean_k, mean_norm_k, mrl_k))| BandStats {
                        mean_q,
                        mean_norm_q,
                        mean_k,
                        mean_norm_k,
                        mrl_q,
                        mrl_k,
                    },
                )
                .collect();
            HeadStats {
                q_head_index: h,
                k_head_index: kh,
                mrl_full: ratio_mrl(resultant, full_norm.sum() / n),
                bands,
            }
        })
        .collect();

    Ok(Calibration {
        frequency_spec: spec.clone(),
        num_tokens: t,
        num_q_heads: trace.num_q_heads(),
        num_k_heads: trace.num_k_heads(),
        heads,
    })
}

/// `‖E[x]‖ / E[‖x‖]` over a sample of band vectors; 0 when every sample is
/// the zero vector.
pub fn mean_resultant_length(samples: &[BandVector]) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::EmptyInput("no samples"));
    }
    let re: Vec<f64> = samples.iter().map(|s| s.re).collect();
    let im: Vec<f64> = samples.iter().map(|s| s.im).collect();
    let norms: Vec<f64> = samples.iter().map(|s| s.norm()).collect();
    let resultant = pairwise_sum(&re).hypot(pairwise_sum(&im));
    Ok(ratio_mrl(resultant, pairwise_sum(&norms)))
}

/// Indices of the `top_k` bands with the largest expected contribution
/// `E[‖q_f‖]·E[‖k_f‖]`, ties going to the lower band index. `top_k` larger
/// than the band count is clamped.
pub fn dominant_bands(head: &HeadStats, top_k: usize) -> Result<Vec<usize>> {
    if top_k == 0 {
        return Err(Error::InvalidArgument("top_k must be >= 1".into()));
    }
    let contribution: Vec<f64> = head
        .bands
        .iter()
        .map(|b| b.mean_norm_q * b.mean_norm_k)
        .collect();
    let mut order: Vec<usize> = (0..contribution.len()).collect();
    order.sort_by(|&a, &b| contribution[b].total_cmp(&contribution[a]).then(a.cmp(&b)));
    order.truncate(top_k);
    Ok(order)
}
