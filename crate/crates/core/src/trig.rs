//! Attention-vs-distance curves predicted from calibrated Q/K centers, and
//! how well they track the logits actually produced by a trace.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::rope::{band_term, logit_bands, FrequencySpec};
use crate::stats::{HeadStats, QkTrace};
use crate::summation::pairwise_sum;
use crate::{Error, Result};

/// Predicted logit `ŝ(Δ)` at a list of distances.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrigCurve {
    pub head_index: usize,
    pub distances: Vec<u64>,
    pub values: Vec<f64>,
}

impl TrigCurve {
    pub fn value_at(&self, delta: u64) -> Option<f64> {
        self.distances
            .binary_search(&delta)
            .ok()
            .map(|i| self.values[i])
    }
}

fn check_distances(distances: &[u64]) -> Result<()> {
    if distances.is_empty() {
        return Err(Error::InvalidArgument("distance list is empty".into()));
    }
    if distances.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::InvalidArgument(
            "distances must be strictly increasing".into(),
        ));
    }
    Ok(())
}

/// `ŝ(Δ) = Σ_f ‖E[q_f]‖·‖E[k_f]‖·cos(ω_f Δ + arg E[q_f] − arg E[k_f])`.
pub fn predict_curve(
    head: &HeadStats,
    distances: &[u64],
    spec: &FrequencySpec,
) -> Result<TrigCurve> {
    check_distances(distances)?;
    if head.bands.len() != spec.num_bands() {
        return Err(Error::InvalidDimension(format!(
            "head has {} bands, spec has {}",
            head.bands.len(),
            spec.num_bands()
        )));
    }
    let values = distances
        .iter()
        .map(|&d| {
            let delta = d as f64;
            head.bands
                .iter()
                .zip(spec.frequencies())
                .map(|(b, &w)| band_term(b.mean_q, b.mean_k, w * delta))
                .sum()
        })
        .collect();
    Ok(TrigCurve {
        head_index: head.q_head_index,
        distances: distances.to_vec(),
        values,
    })
}

/// `[1, 2, 4, …]` up to the largest power of two not exceeding `max_delta`.
pub fn log_spaced_distances(max_delta: u64) -> Result<Vec<u64>> {
    if max_delta < 1 {
        return Err(Error::InvalidArgument("max_delta must be >= 1".into()));
    }
    Ok((0..64)
        .map(|i| 1u64 << i)
        .take_while(|&d| d <= max_delta)
        .collect())
}

/// Pearson correlation; `None` when either side has zero variance.
pub fn pearson(a: &[f64], b: &[f64]) -> Option<f64> {
    assert_eq!(a.len(), b.len(), "pearson inputs must have equal length");
    if a.len() < 2 {
        return None;
    }
    let n = a.len() as f64;
    let ma = pairwise_sum(a) / n;
    let mb = pairwise_sum(b) / n;
    let da: Vec<f64> = a.iter().map(|x| x - ma).collect();
    let db: Vec<f64> = b.iter().map(|x| x - mb).collect();
    let cov = pairwise_sum(&da.iter().zip(&db).map(|(x, y)| x * y).collect::<Vec<_>>());
    let va = pairwise_sum(&da.iter().map(|x| x * x).collect::<Vec<_>>());
    let vb = pairwise_sum(&db.iter().map(|x| x * x).collect::<Vec<_>>());
    if va == 0.0 || vb == 0.0 {
        return None;
    }
    Some((cov / (va.sqrt() * vb.sqrt())).clamp(-1.0, 1.0))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReconstructionReport {
    pub head_index: usize,
    /// Requested distances, in order.
    pub distances_used: Vec<u64>,
    /// Position of each retained query, parallel to `per_query_r`.
    pub query_positions: Vec<u64>,
    pub per_query_r: Vec<f64>,
    pub mean_r: f64,
    pub n_queries: usize,
    /// (query, Δ) pairs dropped because no key sits at `p_q − Δ`.
    pub skipped_pairs: usize,
    /// Queries dropped for having fewer than three usable distances.
    pub skipped_short_queries: usize,
    /// Queries dropped because actual or predicted logits had zero variance.
    pub skipped_zero_variance: usize,
}

enum QueryOutcome {
    Correlation(u64, f64),
    Short,
    ZeroVariance,
}

/// Mean per-query Pearson correlation between actual logits (the query's
/// true vector against the true cached keys) and the center-predicted curve.
///
/// `max_queries` keeps only the latest eligible queries; `None` uses all.
pub fn reconstruction_correlation(
    trace: &QkTrace,
    head: &HeadStats,
    spec: &FrequencySpec,
    distances: &[u64],
    max_queries: Option<usize>,
) -> Result<ReconstructionReport> {
    if trace.head_dim() != spec.head_dim() {
        return Err(Error::InvalidDimension(format!(
            "trace head_dim {} does not match spec head_dim {}",
            trace.head_dim(),
            spec.head_dim()
        )));
    }
    let q_head = head.q_head_index;
    if q_head >= trace.num_q_heads() {
        return Err(Error::Configuration(format!(
            "stats for query head {q_head} but trace has {}",
            trace.num_q_heads()
        )));
    }
    let curve = predict_curve(head, distances, spec)?;
    let k_head = trace.paired_k_head(q_head);
    let positions = trace.positions();

    let mut queries: Vec<usize> = (0..trace.num_tokens()).collect();
    if let Some(limit) = max_queries {
        let eligible: Vec<usize> = queries
            .iter()
            .copied()
            .filter(|&i| usable_distances(trace, positions[i], distances).count() >= 3)
            .collect();
        queries = eligible[eligible.len().saturating_sub(limit)..].to_vec();
    }

    let outcomes: Vec<(usize, QueryOutcome)> = queries
        .par_iter()
        .map(|&i| {
            let p_q = positions[i];
            let q = trace.q_vector(i, q_head);
            let mut actual = Vec::with_capacity(distances.len());
            let mut predicted = Vec::with_capacity(distances.len());
            for (j, (d, key_token)) in distances
                .iter()
                .map(|&d| (d, p_q.checked_sub(d).and_then(|p| trace.token_at(p))))
                .enumerate()
            {
                let Some(key_token) = key_token else { continue };
                let k = trace.k_vector(key_token, k_head);
                // causality and dimensions were checked above
                actual.push(logit_bands(&q, p_q, &k, p_q - d, spec).unwrap());
                predicted.push(curve.values[j]);
            }
            let skipped = distances.len() - actual.len();
            let outcome = if actual.len() < 3 {
                QueryOutcome::Short
            } else {
                match pearson(&actual, &predicted) {
                    Some(r) => QueryOutcome::Correlation(p_q, r),
                    None => QueryOutcome::ZeroVariance,
                }
            };
            (skipped, outcome)
        })
        .collect();

    let mut report = ReconstructionReport {
        head_index: q_head,
        distances_used: distances.to_vec(),
        query_positions: Vec::new(),
        per_query_r: Vec::new(),
        mean_r: 0.0,
        n_queries: 0,
        skipped_pairs: 0,
        skipped_short_queries: 0,
        skipped_zero_variance: 0,
    };
    for (skipped, outcome) in outcomes {
        report.skipped_pairs += skipped;
        match outcome {
            QueryOutcome::Correlation(p, r) => {
                report.query_positions.push(p);
                report.per_query_r.push(r);
            }
            QueryOutcome::Short => report.skipped_short_queries += 1,
            QueryOutcome::ZeroVariance => report.skipped_zero_variance += 1,
        }
    }
    if report.per_query_r.is_empty() {
        return Err(Error::InsufficientData(format!(
            "no query of head {q_head} retained a correlation ({} short, {} zero-variance)",
            report.skipped_short_queries, report.skipped_zero_variance
        )));
    }
    report.n_queries = report.per_query_r.len();
    report.mean_r = pairwise_sum(&report.per_query_r) / report.n_queries as f64;
    Ok(report)
}

fn usable_distances<'a>(
    trace: &'a QkTrace,
    p_q: u64,
    distances: &'a [u64],
) -> impl Iterator<Item = u64> + 'a {
    distances
        .iter()
        .copied()
        .filter(move |&d| p_q.checked_sub(d).and_then(|p| trace.token_at(p)).is_some())
}
