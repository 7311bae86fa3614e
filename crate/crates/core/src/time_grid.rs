//! Dyadic partitions of `[0, T]`.
//!
//! Level `ℓ` has `2^ℓ` steps of width `h_ℓ = T·2^{-ℓ}`. Points are formed as
//! `k·h_ℓ` so that every point of level `ℓ - 1` is bit-identical to the
//! matching point of level `ℓ`; level couplings rely on that identity.

use crate::error::{Error, Result};

/// Default cap on the refinement level.
pub const MAX_LEVEL: usize = 30;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TimeGrid {
    level: usize,
    horizon: f64,
    step: f64,
}

impl TimeGrid {
    pub fn new(level: usize, horizon: f64) -> Result<Self> {
        Self::with_max_level(level, horizon, MAX_LEVEL)
    }

    pub fn with_max_level(level: usize, horizon: f64, max_level: usize) -> Result<Self> {
        if level > max_level {
            return Err(Error::parameter(format!(
                "grid level {level} exceeds the maximum {max_level}"
            )));
        }
        if !(horizon > 0.0 && horizon.is_finite()) {
            return Err(Error::parameter(format!(
                "horizon must be positive and finite, got {horizon}"
            )));
        }
        // Scaling by a power of two is exact.
        let step = horizon * (-(level as f64)).exp2();
        Ok(Self {
            level,
            horizon,
            step,
        })
    }

    pub fn level(&self) -> usize {
        self.level
    }

    pub fn horizon(&self) -> f64 {
        self.horizon
    }

    pub fn step(&self) -> f64 {
        self.step
    }

    /// Number of steps, `2^level`.
    pub fn steps(&self) -> usize {
        1usize << self.level
    }

    /// Number of points, `2^level + 1`.
    pub fn len(&self) -> usize {
        self.steps() + 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// The point `t_k = k·h`. The last point is returned as `T` itself.
    pub fn point(&self, k: usize) -> f64 {
        debug_assert!(k <= self.steps());
        if k == self.steps() {
            self.horizon
        } else {
            k as f64 * self.step
        }
    }

    pub fn points(&self) -> impl ExactSizeIterator<Item = f64> + '_ {
        (0..self.len()).map(move |k| self.point(k))
    }

    fn check_time(&self, t: f64) -> Result<()> {
        if (0.0..=self.horizon).contains(&t) {
            Ok(())
        } else {
            Err(Error::domain(format!(
                "time {t} outside [0, {}]",
                self.horizon
            )))
        }
    }

    /// Index of the largest grid point `<= t`; `t = T` maps to the last point.
    pub fn eta_index(&self, t: f64) -> Result<usize> {
        self.check_time(t)?;
        let n = self.steps();
        if t == self.horizon {
            return Ok(n);
        }
        let mut k = ((t / self.step).floor() as usize).min(n);
        while k > 0 && self.point(k) > t {
            k -= 1;
        }
        while k < n && self.point(k + 1) <= t {
            k += 1;
        }
        Ok(k)
    }

    /// Projection `η(t)` onto the grid.
    pub fn eta(&self, t: f64) -> Result<f64> {
        self.eta_index(t).map(|k| self.point(k))
    }

    /// Interpolation weight `λ = (t - η(t)) / h`, in `[0, 1)`.
    pub fn interp_weight(&self, t: f64) -> Result<f64> {
        self.locate(t).map(|(_, w)| w)
    }

    /// `(η-index, λ)` for an arbitrary time.
    pub fn locate(&self, t: f64) -> Result<(usize, f64)> {
        let k = self.eta_index(t)?;
        let w = (t - self.point(k)) / self.step;
        Ok((k, w.clamp(0.0, 1.0 - f64::EPSILON / 2.0)))
    }

    /// Locates point `index` of the dyadic grid of level `from_level` (same
    /// horizon) on this grid, using integer arithmetic only.
    pub fn locate_dyadic(&self, from_level: usize, index: usize) -> (usize, f64) {
        if from_level <= self.level {
            (index << (self.level - from_level), 0.0)
        } else {
            let shift = from_level - self.level;
            let k = index >> shift;
            let rem = index & ((1usize << shift) - 1);
            (k, rem as f64 / (1u64 << shift) as f64)
        }
    }
}
