//! The shared discretization of the distance axis.
//!
//! One grid of linearly spaced centers over [0, d_max] serves three
//! consumers: the radial basis expansion feeding the filter networks, the
//! smoothed target distributions, and the bin lookup when a continuous
//! distance is matched against a predicted distribution. Keeping a single
//! type guarantees they can never drift apart.

/// `count` centers at 0, spacing, 2*spacing, ..., d_max (both endpoints).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DistanceBins {
    count: usize,
    d_max: f64,
}

impl DistanceBins {
    pub fn new(count: usize, d_max: f64) -> Self {
        assert!(count >= 2, "need at least 2 bin centers, got {count}");
        assert!(d_max > 0.0, "d_max must be positive, got {d_max}");
        DistanceBins { count, d_max }
    }

    pub fn count(&self) -> usize {
        self.count
    }

    pub fn d_max(&self) -> f64 {
        self.d_max
    }

    /// Distance between neighboring centers.
    pub fn spacing(&self) -> f64 {
        self.d_max / (self.count - 1) as f64
    }

    /// Width parameter of the Gaussian expansion: reciprocal center spacing.
    pub fn gamma(&self) -> f64 {
        1.0 / self.spacing()
    }

    pub fn center(&self, c: usize) -> f64 {
        debug_assert!(c < self.count);
        c as f64 * self.spacing()
    }

    pub fn centers(&self) -> Vec<f64> {
        (0..self.count).map(|c| self.center(c)).collect()
    }

    /// Index of the center nearest to `d` (bin edges at center +- spacing/2).
    /// Out-of-range distances clamp to the boundary bins.
    pub fn nearest(&self, d: f64) -> usize {
        let idx = (d / self.spacing()).round();
        if idx <= 0.0 {
            0
        } else if idx >= (self.count - 1) as f64 {
            self.count - 1
        } else {
            idx as usize
        }
    }

    /// Unnormalized Gaussian expansion exp(-gamma (d - center)^2) per center.
    pub fn expand(&self, d: f64) -> Vec<f64> {
        let gamma = self.gamma();
        (0..self.count)
            .map(|c| {
                let delta = d - self.center(c);
                (-gamma * delta * delta).exp()
            })
            .collect()
    }
}
