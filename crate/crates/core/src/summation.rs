//! Pairwise (tree) summation, both over slices and as a streaming
//! accumulator. Error grows as O(log n) instead of O(n) for naive loops,
//! which matters at calibration sizes approaching a million tokens.

const BLOCK: usize = 32;

/// Pairwise sum of a slice.
pub(crate) fn pairwise_sum(values: &[f64]) -> f64 {
    if values.len() <= BLOCK {
        return values.iter().sum();
    }
    // split on a block boundary, matching the streaming accumulator's blocks
    let mid = values.len().div_ceil(BLOCK) / 2 * BLOCK;
    pairwise_sum(&values[..mid]) + pairwise_sum(&values[mid..])
}

/// Streaming pairwise accumulator.
///
/// Values are summed naively in blocks of [`BLOCK`]; completed blocks are
/// merged like a binary counter so partial sums of equal size are always
/// added together.
#[derive(Debug, Clone, Default)]
pub(crate) struct PairwiseAccumulator {
    block: f64,
    block_len: usize,
    // (partial sum, number of blocks it covers); sizes strictly decrease
    stack: Vec<(f64, usize)>,
    count: u64,
}

impl PairwiseAccumulator {
    pub(crate) fn new() -> Self {
        Self::default()
    }

    pub(crate) fn push(&mut self, x: f64) {
        self.block += x;
        self.block_len += 1;
        self.count += 1;
        if self.block_len == BLOCK {
            let mut carry = (self.block, 1usize);
            self.block = 0.0;
            self.block_len = 0;
            while let Some(&(sum, size)) = self.stack.last() {
                if size != carry.1 {
                    break;
                }
                self.stack.pop();
                carry = (sum + carry.0, size * 2);
            }
            self.stack.push(carry);
        }
    }

    pub(crate) fn count(&self) -> u64 {
        self.count
    }

    pub(crate) fn sum(&self) -> f64 {
        let mut total = self.block;
        for &(sum, _) in self.stack.iter().rev() {
            total += sum;
        }
        total
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matches_exact_small_integers() {
        let values: Vec<f64> = (1..=1000).map(f64::from).collect();
        assert_eq!(pairwise_sum(&values), 500_500.0);
        let mut acc = PairwiseAccumulator::new();
        values.iter().for_each(|&v| acc.push(v));
        assert_eq!(acc.sum(), 500_500.0);
        assert_eq!(acc.count(), 1000);
    }

    #[test]
    fn streaming_beats_naive_on_long_runs() {
        let n = 1_000_000;
        let mut acc = PairwiseAccumulator::new();
        let mut naive = 0.0f64;
        for _ in 0..n {
            acc.push(0.1);
            naive += 0.1;
        }
        let exact = 100_000.0;
        assert!((acc.sum() - exact).abs() < (naive - exact).abs());
        assert!((acc.sum() - exact).abs() < 1e-8);
    }

    #[test]
    fn empty_is_zero() {
        assert_eq!(PairwiseAccumulator::new().sum(), 0.0);
        assert_eq!(pairwise_sum(&[]), 0.0);
    }
}
