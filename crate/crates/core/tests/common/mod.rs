#![allow(dead_code)]

use proptest::prelude::*;
use trikv::stats::{BandStats, HeadStats};
use trikv::BandVector;

/// Band statistics with consistent magnitudes: `‖E[q]‖ = R·E[‖q‖]`.
pub fn band_stats() -> impl Strategy<Value = BandStats> {
    (
        0.0..1.0f64,
        0.01..4.0f64,
        -3.2..3.2f64,
        0.0..1.0f64,
        0.01..4.0f64,
        -3.2..3.2f64,
    )
        .prop_map(|(rq, nq, aq, rk, nk, ak)| BandStats {
            mean_q: BandVector::from_polar(rq * nq, aq),
            mean_norm_q: nq,
            mean_k: BandVector::from_polar(rk * nk, ak),
            mean_norm_k: nk,
            mrl_q: rq,
            mrl_k: rk,
        })
}

pub fn head_stats(bands: usize) -> impl Strategy<Value = HeadStats> {
    prop::collection::vec(band_stats(), bands).prop_map(|bands| HeadStats {
        q_head_index: 0,
        k_head_index: 0,
        mrl_full: 0.5,
        bands,
    })
}

pub fn head_vector(bands: usize) -> impl Strategy<Value = trikv::HeadVector> {
    prop::collection::vec(-4.0..4.0f64, 2 * bands)
        .prop_map(|v| trikv::HeadVector::from_interleaved(&v).unwrap())
}
