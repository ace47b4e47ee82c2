//! Discriminator-guided filtering of teacher pseudo targets.
//!
//! The discriminator's mean realism score on a teacher's unlabeled outputs is
//! compared against an exponential moving average of past scores. Outputs
//! the discriminator finds *less* realistic than usual are always used for
//! distillation; outputs above the average are kept with probability `p`.

use rand::Rng;

use crate::error::{CoreError, Result};

/// Exponential moving average of discriminator scores on generated images.
#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct EmaTracker {
    /// Current average, meaningful once `initialized`.
    pub value: f64,
    /// Decay factor in `[0, 1)`.
    pub decay: f64,
    /// Whether a score has been observed.
    pub initialized: bool,
}

impl EmaTracker {
    /// Empty tracker with the given decay.
    pub fn new(decay: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&decay) {
            return Err(CoreError::OutOfRange { name: "ema decay", value: decay });
        }
        Ok(Self { value: 0.0, decay, initialized: false })
    }

    /// Folds in one score in `[0, 1]`. The first score initializes the average.
    pub fn update(&mut self, score: f64) -> Result<()> {
        if !(0.0..=1.0).contains(&score) {
            return Err(CoreError::OutOfRange { name: "discriminator score", value: score });
        }
        if self.initialized {
            self.value = self.decay * self.value + (1.0 - self.decay) * score;
        } else {
            self.value = score;
            self.initialized = true;
        }
        Ok(())
    }
}

/// Gate for one teacher: `1` when `d_score <= ema`, otherwise a Bernoulli(`p`) draw.
///
/// Ties take the deterministic branch.
pub fn adaptive_filter<R: Rng + ?Sized>(
    d_score: f64,
    tracker: &EmaTracker,
    p: f64,
    rng: &mut R,
) -> Result<u8> {
    if !tracker.initialized {
        return Err(CoreError::UninitializedTracker);
    }
    if !(0.0..=1.0).contains(&p) {
        return Err(CoreError::OutOfRange { name: "gate probability", value: p });
    }
    if d_score <= tracker.value {
        Ok(1)
    } else {
        Ok(u8::from(rng.random_bool(p)))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn zero_decay_tracks_last_score() {
        let mut t = EmaTracker::new(0.0).unwrap();
        t.update(0.3).unwrap();
        t.update(0.8).unwrap();
        assert_eq!(t.value, 0.8);
    }

    #[test]
    fn one_step_arithmetic() {
        let mut t = EmaTracker { value: 0.5, decay: 0.99, initialized: true };
        t.update(1.0).unwrap();
        assert!((t.value - 0.505).abs() < 1e-12);
    }

    #[test]
    fn constant_stream_converges_monotonically() {
        let mut t = EmaTracker::new(0.9).unwrap();
        t.update(0.1).unwrap();
        let mut prev = t.value;
        for _ in 0..500 {
            t.update(0.7).unwrap();
            assert!(t.value >= prev && t.value <= 0.7);
            prev = t.value;
        }
        assert!((t.value - 0.7).abs() < 1e-9);
    }

    #[test]
    fn out_of_range_inputs() {
        let mut t = EmaTracker::new(0.5).unwrap();
        assert!(t.update(1.5).is_err());
        assert!(EmaTracker::new(1.0).is_err());
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(
            adaptive_filter(0.2, &EmaTracker::new(0.5).unwrap(), 0.5, &mut rng),
            Err(CoreError::UninitializedTracker)
        );
    }

    #[test]
    fn gate_branches() {
        let t = EmaTracker { value: 0.5, decay: 0.99, initialized: true };
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert_eq!(adaptive_filter(0.3, &t, 0.5, &mut rng).unwrap(), 1);
        assert_eq!(adaptive_filter(0.5, &t, 0.0, &mut rng).unwrap(), 1);
        let n = 10_000;
        let ones: u32 =
            (0..n).map(|_| u32::from(adaptive_filter(0.7, &t, 0.5, &mut rng).unwrap())).sum();
        let rate = f64::from(ones) / f64::from(n);
        assert!((rate - 0.5).abs() <= 0.05, "{rate}");
    }
}
