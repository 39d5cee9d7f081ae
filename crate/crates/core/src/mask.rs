//! Masked-position bookkeeping for reconstruction training.

use rand::Rng;

use crate::error::{Error, Result};

/// The set of masked data-token positions for one sequence.
///
/// Positions index data tokens in `[0, T)`; a CLS slot, when present, sits
/// outside this index space and can never be masked.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskPlan {
    positions: Vec<usize>,
    ratio: f64,
}

impl MaskPlan {
    pub fn new(mut positions: Vec<usize>, ratio: f64) -> Result<Self> {
        positions.sort_unstable();
        positions.dedup();
        if positions.is_empty() {
            return Err(Error::EmptyMask);
        }
        if !(0.0..=1.0).contains(&ratio) {
            return Err(Error::InvalidArgument(format!(
                "mask ratio {ratio} outside (0, 1]"
            )));
        }
        Ok(Self { positions, ratio })
    }

    /// Sorted unique masked positions.
    pub fn positions(&self) -> &[usize] {
        &self.positions
    }

    pub fn ratio(&self) -> f64 {
        self.ratio
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn validate_for(&self, seq_len: usize) -> Result<()> {
        match self.positions.last() {
            Some(&max) if max >= seq_len => Err(Error::InvalidArgument(format!(
                "mask position {max} out of range for {seq_len} tokens"
            ))),
            _ => Ok(()),
        }
    }
}

/// Number of positions a ratio masks out of `maskable`: round half away
/// from zero. A result of zero is rejected by [`sample_mask`].
pub fn mask_count(maskable: usize, ratio: f64) -> usize {
    (ratio * maskable as f64).round() as usize
}

/// Uniformly samples `round(ratio * seq_len)` positions without replacement.
/// Deterministic for a given rng state.
pub fn sample_mask(seq_len: usize, ratio: f64, rng: &mut impl Rng) -> Result<MaskPlan> {
    if !(ratio > 0.0 && ratio <= 1.0) {
        return Err(Error::InvalidArgument(format!(
            "mask ratio {ratio} outside (0, 1]"
        )));
    }
    let count = mask_count(seq_len, ratio);
    if count == 0 {
        return Err(Error::EmptyMask);
    }
    if ratio >= 1.0 {
        log::warn!("mask ratio 1.0 leaves no visible context for reconstruction");
    }
    // Partial Fisher-Yates: the first `count` slots end up a uniform sample.
    let mut pool: Vec<usize> = (0..seq_len).collect();
    for i in 0..count {
        let j = rng.random_range(i..seq_len);
        pool.swap(i, j);
    }
    pool.truncate(count);
    MaskPlan::new(pool, ratio)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_chacha::rand_core::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn fifteen_percent_of_twenty_is_three() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let plan = sample_mask(20, 0.15, &mut rng).unwrap();
        assert_eq!(plan.len(), 3);
    }

    #[test]
    fn three_quarters_of_sixteen_is_twelve() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let plan = sample_mask(16, 0.75, &mut rng).unwrap();
        assert_eq!(plan.len(), 12);
    }

    #[test]
    fn full_ratio_masks_everything() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let plan = sample_mask(8, 1.0, &mut rng).unwrap();
        assert_eq!(plan.positions(), &[0, 1, 2, 3, 4, 5, 6, 7]);
    }

    #[test]
    fn vanishing_ratio_is_an_error() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let err = sample_mask(20, 0.01, &mut rng).unwrap_err();
        assert!(matches!(err, Error::EmptyMask));
    }

    #[test]
    fn positions_are_sorted_unique_and_in_range() {
        for seed in 0..50 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let plan = sample_mask(32, 0.4, &mut rng).unwrap();
            assert!(plan.positions().windows(2).all(|w| w[0] < w[1]));
            plan.validate_for(32).unwrap();
        }
    }

    #[test]
    fn sampling_is_deterministic_per_rng_state() {
        let a = sample_mask(24, 0.5, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        let b = sample_mask(24, 0.5, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn coverage_is_uniform() {
        // Each of 16 positions should be hit with frequency ratio +- 2%
        // over 1e5 draws.
        let seq_len = 16;
        let ratio = 0.25;
        let draws = 100_000;
        let mut counts = vec![0u64; seq_len];
        let mut rng = ChaCha8Rng::seed_from_u64(1234);
        for _ in 0..draws {
            for &p in sample_mask(seq_len, ratio, &mut rng).unwrap().positions() {
                counts[p] += 1;
            }
        }
        for (p, &c) in counts.iter().enumerate() {
            let freq = c as f64 / draws as f64;
            assert!(
                (freq - ratio).abs() < 0.02,
                "position {p}: frequency {freq} vs ratio {ratio}"
            );
        }
    }
}
