//! Key-importance scoring and KV-cache eviction driven by calibrated
//! pre-RoPE query/key statistics.
//!
//! The crate is organised bottom-up:
//!
//! - [`rope`]: frequency schedule, rotation and the exact attention logit in
//!   both rotate-then-dot and per-band amplitude/phase form.
//! - [`stats`]: the `QKT1` trace format and per-head, per-band calibration
//!   (centers, expected norms, mean resultant length).
//! - [`trig`]: attention-vs-distance curves predicted from calibrated centers
//!   and their Pearson agreement with actual logits.
//! - [`scoring`]: trigonometric score, concentration-weighted norm score and
//!   the future-offset average.
//! - [`cache`]: the decode-time cache with window-triggered pruning and
//!   normalize-then-max aggregation over grouped query heads.
//! - [`synth`]: seeded synthetic traces with controllable concentration and
//!   a brute-force attention matrix.
//! - [`dfs`]: the recursive state query benchmark (DFS instances, ground
//!   truth, prompt rendering and answer scoring).

pub mod cache;
pub mod dfs;
mod error;
pub mod rope;
pub mod scoring;
pub mod stats;
mod summation;
pub mod synth;
pub mod trig;

pub use error::{Error, Result};
pub use rope::{BandVector, FrequencySpec, HeadVector};
