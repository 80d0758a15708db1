//! Loss terms and their analytic gradients.
//!
//! The total objective is
//! `Tri + theta*Q + lambda1*C + lambda2*|C|^2 + lambda3*M`, where `Tri` is
//! the probability-weighted triplet hinge, `Q` the quantization error, `C`
//! the source classification error, and `M` the manifold energy. Ablation
//! flags zero out individual terms.

use nalgebra::DMatrix;

use crate::dataio::RunConfig;
use crate::graph::{SampleRef, TripletSet};

/// Target and source features pooled into one `d x n` matrix, target
/// columns first.
#[derive(Debug, Clone, PartialEq)]
pub struct PooledFeatures {
    data: DMatrix<f64>,
    n_t: usize,
}

impl PooledFeatures {
    pub fn new(target: DMatrix<f64>, source: DMatrix<f64>) -> Self {
        assert_eq!(target.nrows(), source.nrows(), "feature dimension");
        let d = target.nrows();
        let n_t = target.ncols();
        let n = n_t + source.ncols();
        let mut data = DMatrix::zeros(d, n);
        data.view_mut((0, 0), (d, n_t)).copy_from(&target);
        data.view_mut((0, n_t), (d, source.ncols())).copy_from(&source);
        PooledFeatures { data, n_t }
    }

    pub fn dim(&self) -> usize {
        self.data.nrows()
    }

    pub fn n_target(&self) -> usize {
        self.n_t
    }

    pub fn n_source(&self) -> usize {
        self.data.ncols() - self.n_t
    }

    pub fn n(&self) -> usize {
        self.data.ncols()
    }

    /// The pooled `[X_t, X_s]` matrix.
    pub fn pooled(&self) -> &DMatrix<f64> {
        &self.data
    }

    pub fn target(&self) -> DMatrix<f64> {
        self.data.columns(0, self.n_t).into_owned()
    }

    pub fn source(&self) -> DMatrix<f64> {
        self.data.columns(self.n_t, self.n_source()).into_owned()
    }

    pub fn col(&self, s: SampleRef) -> nalgebra::DVectorView<'_, f64> {
        self.data.column(s.pooled(self.n_t))
    }
}

/// Loss values at one model state. `total` is always the exact linear
/// combination of the stored fields under the run's weights.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossBreakdown {
    pub triplet: f64,
    pub quantization: f64,
    pub classification: f64,
    pub regularizer: f64,
    pub manifold: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn compose(
        triplet: f64,
        quantization: f64,
        classification: f64,
        regularizer: f64,
        manifold: f64,
        config: &RunConfig,
    ) -> Self {
        let total = triplet
            + config.theta * quantization
            + config.lambda1 * classification
            + config.lambda2 * regularizer
            + config.lambda3 * manifold;
        LossBreakdown {
            triplet,
            quantization,
            classification,
            regularizer,
            manifold,
            total,
        }
    }
}

/// Per-triplet hinge values (already clamped at zero) and focal weights.
#[derive(Debug, Clone, PartialEq)]
pub struct FocalWeightTrace {
    pub hinges: Vec<f64>,
    pub weights: Vec<f64>,
}

/// `(1 - e^(-hinge))^gamma`; gamma = 0 yields the constant weight 1 of the
/// standard triplet loss.
pub fn focal_weight(hinge: f64, gamma: f64) -> f64 {
    if gamma == 0.0 {
        1.0
    } else {
        (1.0 - (-hinge).exp()).powf(gamma)
    }
}

/// Squared distances of the projected anchor to its positive and negative.
fn projected_dists(
    proj: &DMatrix<f64>,
    feats: &PooledFeatures,
    t: &crate::graph::Triplet,
) -> (f64, f64) {
    let a = proj.column(t.anchor.pooled(feats.n_t));
    let p = proj.column(t.positive.pooled(feats.n_t));
    let n = proj.column(t.negative.pooled(feats.n_t));
    ((&a - p).norm_squared(), (&a - n).norm_squared())
}

/// Probability-weighted triplet hinge loss
/// `sum_i w_i [ |W^T x_a - W^T x_p|^2 - |W^T x_a - W^T x_n|^2 + m ]_+`.
pub fn focal_triplet_loss(
    w: &DMatrix<f64>,
    triplets: &TripletSet,
    feats: &PooledFeatures,
    margin: f64,
    gamma: f64,
) -> (f64, FocalWeightTrace) {
    warn_if_not_orthonormal(w);
    let proj = w.tr_mul(feats.pooled());
    let mut hinges = Vec::with_capacity(triplets.triplets.len());
    let mut weights = Vec::with_capacity(triplets.triplets.len());
    let mut loss = 0.0;
    for t in &triplets.triplets {
        let (d_ap, d_an) = projected_dists(&proj, feats, t);
        let hinge = (d_ap - d_an + margin).max(0.0);
        let weight = focal_weight(hinge, gamma);
        loss += weight * hinge;
        hinges.push(hinge);
        weights.push(weight);
    }
    (loss, FocalWeightTrace { hinges, weights })
}

/// Gradient of the triplet term with respect to `W`, treating the focal
/// weights as constants:
/// `2 sum_{active} w_i ((x_a-x_p)(x_a-x_p)^T - (x_a-x_n)(x_a-x_n)^T) W`.
/// A triplet is active when its raw hinge argument is >= 0.
pub fn triplet_gradient(
    w: &DMatrix<f64>,
    triplets: &TripletSet,
    feats: &PooledFeatures,
    margin: f64,
    gamma: f64,
) -> DMatrix<f64> {
    let d = feats.dim();
    let r = w.ncols();
    let proj = w.tr_mul(feats.pooled());

    let mut active: Vec<(usize, f64)> = Vec::new();
    for (idx, t) in triplets.triplets.iter().enumerate() {
        let (d_ap, d_an) = projected_dists(&proj, feats, t);
        let raw = d_ap - d_an + margin;
        if raw >= 0.0 {
            active.push((idx, focal_weight(raw.max(0.0), gamma)));
        }
    }
    if active.is_empty() {
        return DMatrix::zeros(d, r);
    }

    // G = 2 (U_p diag(w) U_p^T - U_n diag(w) U_n^T) W as four products
    let m = active.len();
    let mut up = DMatrix::zeros(d, m);
    let mut un = DMatrix::zeros(d, m);
    for (col, &(idx, _)) in active.iter().enumerate() {
        let t = &triplets.triplets[idx];
        let a = feats.col(t.anchor);
        let p = feats.col(t.positive);
        let n = feats.col(t.negative);
        for i in 0..d {
            up[(i, col)] = a[i] - p[i];
            un[(i, col)] = a[i] - n[i];
        }
    }
    let upt_w = up.tr_mul(w); // m x r
    let unt_w = un.tr_mul(w);
    for (col, &(_, weight)) in active.iter().enumerate() {
        let s = 2.0 * weight;
        for i in 0..d {
            up[(i, col)] *= s;
            un[(i, col)] *= s;
        }
    }
    &up * upt_w - &un * unt_w
}

/// `|B_t - W^T X_t|^2 + |B_s - W^T X_s|^2` (Frobenius).
pub fn quantization_loss(
    w: &DMatrix<f64>,
    xt: &DMatrix<f64>,
    xs: &DMatrix<f64>,
    bt: &DMatrix<f64>,
    bs: &DMatrix<f64>,
) -> f64 {
    let rt = bt - w.tr_mul(xt);
    let rs = bs - w.tr_mul(xs);
    rt.norm_squared() + rs.norm_squared()
}

/// `|Y_s - C^T B_s|^2` over the labeled source domain.
pub fn classification_loss(c: &DMatrix<f64>, bs: &DMatrix<f64>, ys: &DMatrix<f64>) -> f64 {
    (ys - c.tr_mul(bs)).norm_squared()
}

/// Everything fixed during training that the objective needs.
pub struct ObjectiveInputs<'a> {
    pub feats: &'a PooledFeatures,
    /// One-hot source labels, `c x n_s`.
    pub ys: &'a DMatrix<f64>,
    pub triplets: &'a TripletSet,
    /// Precomputed `X L X^T`; ignored when the manifold term is disabled.
    pub xlxt: &'a DMatrix<f64>,
    pub config: &'a RunConfig,
}

impl ObjectiveInputs<'_> {
    /// Focal exponent actually applied: the standard-triplet variant pins
    /// every weight to 1.
    pub fn effective_gamma(&self) -> f64 {
        if self.config.flags.standard_triplet {
            0.0
        } else {
            self.config.gamma
        }
    }
}

/// Evaluates the full breakdown at a model state. Disabled terms are
/// stored as zero so the composed total drops them.
pub fn total_objective(
    inputs: &ObjectiveInputs,
    w: &DMatrix<f64>,
    c: &DMatrix<f64>,
    bt: &DMatrix<f64>,
    bs: &DMatrix<f64>,
) -> LossBreakdown {
    let cfg = inputs.config;
    let triplet = if cfg.flags.disable_triplet {
        0.0
    } else {
        focal_triplet_loss(
            w,
            inputs.triplets,
            inputs.feats,
            cfg.margin,
            inputs.effective_gamma(),
        )
        .0
    };
    let quantization = if cfg.flags.disable_quantization {
        0.0
    } else {
        quantization_loss(w, &inputs.feats.target(), &inputs.feats.source(), bt, bs)
    };
    let classification = if cfg.flags.disable_classifier {
        0.0
    } else {
        classification_loss(c, bs, inputs.ys)
    };
    let regularizer = c.norm_squared();
    let manifold = if cfg.flags.disable_manifold {
        0.0
    } else {
        (inputs.xlxt * w).dot(w).max(0.0)
    };
    LossBreakdown::compose(triplet, quantization, classification, regularizer, manifold, cfg)
}

fn warn_if_not_orthonormal(w: &DMatrix<f64>) {
    let r = w.ncols();
    let drift = (w.tr_mul(w) - DMatrix::identity(r, r)).norm();
    if drift > 1e-6 {
        eprintln!("pwcf: warning: projection columns are not orthonormal (drift {drift:.3e})");
    }
}
