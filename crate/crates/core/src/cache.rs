//! Decode-time KV cache with window-triggered pruning.
//!
//! Every `window` generated tokens the cache is pruned back to `budget`
//! keys per key head. Each key is scored once per query head in its GQA
//! group, the scores are z-normalized within each query head, and the
//! per-key maximum across the group decides retention. Ties go to the
//! older key.

use std::cmp::Ordering;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::rope::{FrequencySpec, HeadVector};
use crate::scoring::{HeadScorer, KeyRecord, OffsetSet, ScoreVariant};
use crate::stats::{HeadStats, QkTrace};
use crate::summation::pairwise_sum;
use crate::{Error, Result};

pub const DEFAULT_BUDGET: usize = 2048;
pub const DEFAULT_WINDOW: usize = 128;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PruneConfig {
    /// Maximum keys per key head after a prune.
    pub budget: usize,
    /// Tokens generated between pruning rounds.
    pub window: usize,
    pub offsets: OffsetSet,
    /// Query heads per key head.
    pub group_size: usize,
    #[serde(default)]
    pub variant: ScoreVariant,
    /// Exempt keys generated within the last `window` positions from
    /// eviction. Off by default.
    #[serde(default)]
    pub protect_recent: bool,
}

impl Default for PruneConfig {
    fn default() -> Self {
        Self {
            budget: DEFAULT_BUDGET,
            window: DEFAULT_WINDOW,
            offsets: OffsetSet::default(),
            group_size: 1,
            variant: ScoreVariant::Full,
            protect_recent: false,
        }
    }
}

impl PruneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.budget == 0 || self.window == 0 || self.group_size == 0 {
            return Err(Error::Configuration(format!(
                "budget ({}), window ({}) and group_size ({}) must all be >= 1",
                self.budget, self.window, self.group_size
            )));
        }
        Ok(())
    }
}

/// Live keys per key head plus the eviction history.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KvCache {
    streams: Vec<Vec<KeyRecord>>,
    /// Per key head, `(position, step)` of every eviction in order.
    evictions: Vec<Vec<(u64, u64)>>,
    prune_calls: u64,
}

/// Outcome of one pruning call.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PruneRound {
    pub step: u64,
    pub current_position: u64,
    pub evicted: usize,
    /// Retained positions per key head after the round.
    pub retained: Vec<Vec<u64>>,
}

impl KvCache {
    pub fn new(num_k_heads: usize) -> Self {
        Self {
            streams: vec![Vec::new(); num_k_heads],
            evictions: vec![Vec::new(); num_k_heads],
            prune_calls: 0,
        }
    }

    pub fn num_k_heads(&self) -> usize {
        self.streams.len()
    }

    pub fn len(&self, k_head: usize) -> usize {
        self.streams[k_head].len()
    }

    pub fn is_empty(&self) -> bool {
        self.streams.iter().all(Vec::is_empty)
    }

    pub fn keys(&self, k_head: usize) -> &[KeyRecord] {
        &self.streams[k_head]
    }

    pub fn positions(&self, k_head: usize) -> Vec<u64> {
        self.streams[k_head].iter().map(|k| k.position).collect()
    }

    pub fn evictions(&self) -> &[Vec<(u64, u64)>] {
        &self.evictions
    }

    /// Number of `prune` calls so far.
    pub fn prune_calls(&self) -> u64 {
        self.prune_calls
    }

    /// Appends one key per key head at `position`.
    pub fn append(&mut self, keys: Vec<HeadVector>, position: u64) -> Result<()> {
        if keys.len() != self.streams.len() {
            return Err(Error::Shape(format!(
                "{} keys for {} key heads",
                keys.len(),
                self.streams.len()
            )));
        }
        // after a prune streams may have different tails
        for s in &self.streams {
            if let Some(last) = s.last() {
                if position <= last.position {
                    return Err(Error::Ordering {
                        position,
                        last: last.position,
                    });
                }
            }
        }
        for (stream, key) in self.streams.iter_mut().zip(keys) {
            stream.push(KeyRecord::new(key, position));
        }
        Ok(())
    }

    /// Scores every key and keeps the top `budget` per key head when a head
    /// is over budget. `heads` must contain one entry per query head
    /// (`num_k_heads · group_size`), matched by `q_head_index`.
    pub fn prune(
        &mut self,
        step: u64,
        current_position: u64,
        heads: &[HeadStats],
        spec: &FrequencySpec,
        config: &PruneConfig,
    ) -> Result<PruneRound> {
        config.validate()?;
        self.prune_calls += 1;
        let g = config.group_size;
        let mut evicted = 0;
        let over_budget = self.streams.iter().any(|s| s.len() > config.budget);
        let scorers = if over_budget {
            Some(build_scorers(
                heads,
                self.streams.len() * g,
                spec,
                config.variant,
            )?)
        } else {
            None
        };

        for kh in 0..self.streams.len() {
            let stream = &self.streams[kh];
            if stream.len() <= config.budget {
                continue;
            }
            let scorers = scorers
                .as_ref()
                .expect("built when any head is over budget");
            let group = &scorers[kh * g..(kh + 1) * g];
            let per_head: Vec<Vec<f64>> = group
                .iter()
                .map(|scorer| {
                    stream
                        .par_iter()
                        .map(|key| scorer.averaged(key, current_position, &config.offsets))
                        .collect::<Result<Vec<f64>>>()
                })
                .collect::<Result<_>>()?;
            let positions: Vec<u64> = stream.iter().map(|k| k.position).collect();
            let keep = if config.protect_recent {
                select_with_recent(&per_head, &positions, config, current_position)?
            } else {
                select_retained(&per_head, &positions, config.budget)?
            };

            let mut keep_mask = vec![false; stream.len()];
            keep.iter().for_each(|&i| keep_mask[i] = true);
            let old = std::mem::take(&mut self.streams[kh]);
            for (key, kept) in old.into_iter().zip(keep_mask) {
                if kept {
                    self.streams[kh].push(key);
                } else {
                    self.evictions[kh].push((key.position, step));
                    evicted += 1;
                }
            }
        }

        Ok(PruneRound {
            step,
            current_position,
            evicted,
            retained: (0..self.streams.len())
                .map(|kh| self.positions(kh))
                .collect(),
        })
    }
}

fn build_scorers(
    heads: &[HeadStats],
    num_q_heads: usize,
    spec: &FrequencySpec,
    variant: ScoreVariant,
) -> Result<Vec<HeadScorer>> {
    (0..num_q_heads)
        .map(|qh| {
            let head = heads.iter().find(|h| h.q_head_index == qh).ok_or_else(|| {
                Error::Configuration(format!("missing stats for query head {qh}"))
            })?;
            HeadScorer::new(head, spec, variant)
        })
        .collect()
}

/// `(S − μ)/σ` with the population standard deviation; all zeros when
/// `σ == 0`.
pub fn zscore_normalize(scores: &[f64]) -> Vec<f64> {
    if scores.is_empty() {
        return Vec::new();
    }
    let n = scores.len() as f64;
    let mean = pairwise_sum(scores) / n;
    let dev: Vec<f64> = scores.iter().map(|s| s - mean).collect();
    let var = pairwise_sum(&dev.iter().map(|d| d * d).collect::<Vec<_>>()) / n;
    let sd = var.sqrt();
    if sd == 0.0 {
        return vec![0.0; scores.len()];
    }
    dev.into_iter().map(|d| d / sd).collect()
}

/// Resolution of aggregated z-scores; see [`gqa_aggregate`].
pub const ZSCORE_QUANTUM: f64 = 1.0 / (1u64 << 32) as f64;

/// Z-scores each query head's list, then takes the per-key maximum, snapped
/// to a multiple of [`ZSCORE_QUANTUM`] so that rounding noise from a
/// per-head affine rescaling cannot split exact ties.
pub fn gqa_aggregate(per_head_scores: &[Vec<f64>]) -> Result<Vec<f64>> {
    let first = per_head_scores
        .first()
        .ok_or_else(|| Error::Shape("no query heads to aggregate".into()))?;
    if per_head_scores.iter().any(|s| s.len() != first.len()) {
        return Err(Error::Shape("per-head score lists differ in length".into()));
    }
    let mut out = vec![f64::NEG_INFINITY; first.len()];
    for scores in per_head_scores {
        for (o, z) in out.iter_mut().zip(zscore_normalize(scores)) {
            *o = o.max(z);
        }
    }
    for o in &mut out {
        *o = (*o / ZSCORE_QUANTUM).round() * ZSCORE_QUANTUM;
    }
    Ok(out)
}

fn rank(scores: &[f64], positions: &[u64], a: usize, b: usize) -> Ordering {
    scores[b]
        .total_cmp(&scores[a])
        .then(positions[a].cmp(&positions[b]))
}

/// Indices (ascending) of the `budget` best keys by `scores`, preferring the
/// smaller position on ties.
pub fn select_top_budget(scores: &[f64], positions: &[u64], budget: usize) -> Vec<usize> {
    assert_eq!(scores.len(), positions.len());
    let mut order: Vec<usize> = (0..scores.len()).collect();
    if budget < order.len() {
        order.select_nth_unstable_by(budget, |&a, &b| rank(scores, positions, a, b));
        order.truncate(budget);
    }
    order.sort_unstable();
    order
}

/// Normalize-then-max aggregation followed by top-`budget` selection.
pub fn select_retained(
    per_head_scores: &[Vec<f64>],
    positions: &[u64],
    budget: usize,
) -> Result<Vec<usize>> {
    let aggregated = gqa_aggregate(per_head_scores)?;
    if aggregated.len() != positions.len() {
        return Err(Error::Shape(format!(
            "{} scores for {} positions",
            aggregated.len(),
            positions.len()
        )));
    }
    Ok(select_top_budget(&aggregated, positions, budget))
}

fn select_with_recent(
    per_head_scores: &[Vec<f64>],
    positions: &[u64],
    config: &PruneConfig,
    current_position: u64,
) -> Result<Vec<usize>> {
    let cutoff = current_position.saturating_sub(config.window as u64 - 1);
    let recent: Vec<usize> = (0..positions.len())
        .filter(|&i| positions[i] >= cutoff)
        .collect();
    if recent.len() >= config.budget {
        return Ok(recent[recent.len() - config.budget..].to_vec());
    }
    let aggregated = gqa_aggregate(per_head_scores)?;
    let older: Vec<usize> = (0..positions.len())
        .filter(|&i| positions[i] < cutoff)
        .collect();
    let older_scores: Vec<f64> = older.iter().map(|&i| aggregated[i]).collect();
    let older_positions: Vec<u64> = older.iter().map(|&i| positions[i]).collect();
    let mut keep: Vec<usize> = select_top_budget(
        &older_scores,
        &older_positions,
        config.budget - recent.len(),
    )
    .into_iter()
    .map(|j| older[j])
    .collect();
    keep.extend(recent);
    keep.sort_unstable();
    Ok(keep)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecodeReport {
    pub config: PruneConfig,
    pub num_tokens: usize,
    pub num_k_heads: usize,
    /// Every pruning call, including ones that found the cache within budget.
    pub rounds: Vec<PruneRound>,
    /// Calls counted by the cache itself.
    pub prune_calls: u64,
    /// Per key head, `(position, step)` eviction events.
    pub evictions: Vec<Vec<(u64, u64)>>,
    pub final_positions: Vec<Vec<u64>>,
}

/// Replays the trace's keys as a generation stream, pruning after every
/// `window`-th token.
pub fn simulate_decode(
    trace: &QkTrace,
    heads: &[HeadStats],
    spec: &FrequencySpec,
    config: &PruneConfig,
) -> Result<DecodeReport> {
    config.validate()?;
    if trace.group_size() != config.group_size {
        return Err(Error::Configuration(format!(
            "trace group size {} does not match config group size {}",
            trace.group_size(),
            config.group_size
        )));
    }
    if trace.head_dim() != spec.head_dim() {
        return Err(Error::InvalidDimension(format!(
            "trace head_dim {} does not match spec head_dim {}",
            trace.head_dim(),
            spec.head_dim()
        )));
    }
    if trace
        .positions()
        .iter()
        .enumerate()
        .any(|(i, &p)| p != i as u64)
    {
        return Err(Error::InvalidArgument(
            "decode stream positions must be 0, 1, 2, ...".into(),
        ));
    }
    let mut cache = KvCache::new(trace.num_k_heads());
    let mut rounds = Vec::new();
    for tok in 0..trace.num_tokens() {
        let keys = (0..trace.num_k_heads())
            .map(|h| trace.k_vector(tok, h))
            .collect();
        cache.append(keys, tok as u64)?;
        let step = tok as u64 + 1;
        if step.is_multiple_of(config.window as u64) {
            rounds.push(cache.prune(step, tok as u64, heads, spec, config)?);
        }
    }
    Ok(DecodeReport {
        config: config.clone(),
        num_tokens: trace.num_tokens(),
        num_k_heads: trace.num_k_heads(),
        rounds,
        prune_calls: cache.prune_calls(),
        evictions: cache.evictions.clone(),
        final_positions: (0..cache.num_k_heads())
            .map(|h| cache.positions(h))
            .collect(),
    })
}
