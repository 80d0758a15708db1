//! Seeded two-domain synthetic data.
//!
//! The source domain is a mixture of Gaussian class clusters. The target
//! domain draws from the same clusters and then applies a domain shift:
//! a plane rotation in the first two coordinates, a translation along the
//! all-ones direction, and a within-class noise rescale.

use nalgebra::DMatrix;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};

use super::{DatasetPair, FeatureMatrix, LabelVector};

/// Affine transform applied to target samples.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ShiftSpec {
    /// Rotation angle in degrees per rotated coordinate plane.
    pub rotation_deg: f64,
    /// Number of disjoint coordinate pairs (0,1), (2,3), ... the rotation
    /// acts on; 1 rotates only the first two coordinates.
    pub rotation_pairs: usize,
    /// Length of the translation along (1, ..., 1)/sqrt(d).
    pub translation: f64,
    /// Multiplier on the within-class noise of the target domain.
    pub noise: f64,
}

impl ShiftSpec {
    pub fn identity() -> Self {
        ShiftSpec {
            rotation_deg: 0.0,
            rotation_pairs: 1,
            translation: 0.0,
            noise: 1.0,
        }
    }
}

/// Distance between class centers.
const CENTER_SEPARATION: f64 = 6.0;
/// Within-class noise standard deviation in the source domain.
const CLUSTER_SIGMA: f64 = 1.25;

/// Generates a labeled source domain and a shifted target domain with
/// ground-truth labels. Pure function of `(parameters, seed)`.
///
/// Sample `i` of each domain belongs to class `i % c`, so both domains are
/// class-balanced up to rounding.
pub fn generate_synthetic_pair(
    c: usize,
    d: usize,
    n_s: usize,
    n_t: usize,
    shift: &ShiftSpec,
    seed: u64,
) -> Result<DatasetPair> {
    if c < 2 {
        return Err(Error::InvalidInput(format!("need at least 2 classes, got {c}")));
    }
    if d < c {
        return Err(Error::InvalidInput(format!(
            "feature dimension {d} must be at least the class count {c}"
        )));
    }
    if n_s < c || n_t < c {
        return Err(Error::InvalidInput(format!(
            "cannot cover all {c} classes with n_s={n_s}, n_t={n_t}"
        )));
    }
    if !(shift.noise >= 0.0) {
        return Err(Error::InvalidInput(format!(
            "noise scale must be nonnegative, got {}",
            shift.noise
        )));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    // class centers: separated directions on the sphere of radius
    // CENTER_SEPARATION
    let mut centers = DMatrix::zeros(d, c);
    for j in 0..c {
        let mut norm_sq = 0.0;
        for i in 0..d {
            let g: f64 = rng.sample(StandardNormal);
            centers[(i, j)] = g;
            norm_sq += g * g;
        }
        let scale = CENTER_SEPARATION / norm_sq.sqrt();
        for i in 0..d {
            centers[(i, j)] *= scale;
        }
    }

    let mut source = DMatrix::zeros(d, n_s);
    for j in 0..n_s {
        let class = j % c;
        for i in 0..d {
            let g: f64 = rng.sample(StandardNormal);
            source[(i, j)] = centers[(i, class)] + CLUSTER_SIGMA * g;
        }
    }

    let angle = shift.rotation_deg.to_radians();
    let (sin, cos) = angle.sin_cos();
    let pairs = shift.rotation_pairs.min(d / 2);
    let t_per_coord = shift.translation / (d as f64).sqrt();
    let mut target = DMatrix::zeros(d, n_t);
    for j in 0..n_t {
        let class = j % c;
        for i in 0..d {
            let g: f64 = rng.sample(StandardNormal);
            target[(i, j)] = centers[(i, class)] + CLUSTER_SIGMA * shift.noise * g;
        }
        for p in 0..pairs {
            let (a, b) = (2 * p, 2 * p + 1);
            let (x0, x1) = (target[(a, j)], target[(b, j)]);
            target[(a, j)] = cos * x0 - sin * x1;
            target[(b, j)] = sin * x0 + cos * x1;
        }
        for i in 0..d {
            target[(i, j)] += t_per_coord;
        }
    }

    let source_labels = LabelVector::new((0..n_s).map(|j| j % c).collect(), c)?;
    let target_truth = LabelVector::new((0..n_t).map(|j| j % c).collect(), c)?;
    DatasetPair::new(
        FeatureMatrix::new(source)?,
        source_labels,
        FeatureMatrix::new(target)?,
        Some(target_truth),
    )
}
