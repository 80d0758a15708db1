//! Alternating optimization of the projection, classifier, and codes.
//!
//! One outer iteration updates, in order: `W` by orthogonality-preserving
//! Cayley steps with a Barzilai-Borwein step size, `C` in closed form,
//! then `B_t` and `B_s` by sign solutions. `W` starts from PCA and the
//! codes from seeded random signs.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use nalgebra::{DMatrix, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::dataio::format::{
    check_magic, check_version, read_f64_block, read_u32, read_u64, write_f64_block,
    FORMAT_VERSION,
};
use crate::dataio::{
    AblationFlags, FeatureMatrix, RunConfig, Standardizer, TrainView,
};
use crate::error::{Error, Result};
use crate::graph::{
    build_affinity_from, hfon_cross_distances, mine_triplets_with, SigmaMode, TripletSet,
};
use crate::hamming::BinaryCodes;
use crate::neighbors::{compute_hfon_from, knn_pseudo_label_from, pairwise_sq_dists};
use crate::objective::{
    focal_triplet_loss, total_objective, triplet_gradient, LossBreakdown, ObjectiveInputs,
    PooledFeatures,
};

/// Barzilai-Borwein step size bounds.
pub const TAU_MIN: f64 = 1e-4;
pub const TAU_MAX: f64 = 1.0;
/// Maximum step halvings per inner iteration.
const MAX_BACKTRACKS: usize = 10;

pub(crate) const MODEL_MAGIC: [u8; 4] = *b"PWM1";

/// Model kind tag stored in the model file.
pub const KIND_PWCF: u32 = 0;

/// A trained projection with its classifier, feature scaling, and the
/// recorded optimization trace.
#[derive(Debug, Clone, PartialEq)]
pub struct PwcfModel {
    /// Orthonormal projection, `d x r`.
    pub w: DMatrix<f64>,
    /// Classifier, `r x c`.
    pub c: DMatrix<f64>,
    pub config: RunConfig,
    pub standardizer: Standardizer,
    pub num_classes: usize,
    pub trace: Vec<IterationRecord>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct IterationRecord {
    pub losses: LossBreakdown,
    /// `|W^T W - I|_F` when the record was taken.
    pub ortho_error: f64,
}

/// Binary codes of both domains, entries exactly +-1.
#[derive(Debug, Clone, PartialEq)]
pub struct CodesPair {
    pub target: DMatrix<f64>,
    pub source: DMatrix<f64>,
}

impl PwcfModel {
    pub fn dim(&self) -> usize {
        self.w.nrows()
    }

    pub fn code_len(&self) -> usize {
        self.w.ncols()
    }

    /// Standardizes with the stored parameters, projects, and packs signs.
    pub fn encode(&self, x: &FeatureMatrix) -> Result<BinaryCodes> {
        let standardized = self.standardizer.apply(x)?;
        BinaryCodes::pack(&sign_matrix(&self.w.tr_mul(&standardized)))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        write_model_file(
            path.as_ref(),
            KIND_PWCF,
            &self.standardizer,
            &self.w,
            Some(&self.c),
            &self.config,
        )
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let raw = read_model_file(path)?;
        if raw.kind != KIND_PWCF {
            return Err(Error::format(
                path,
                "kind",
                format!("expected a trained model (kind 0), found kind {}", raw.kind),
            ));
        }
        let c = raw.classifier.ok_or_else(|| {
            Error::format(path, "classifier", "model file lacks a classifier block".to_string())
        })?;
        Ok(PwcfModel {
            num_classes: c.ncols(),
            w: raw.projection,
            c,
            config: raw.config,
            standardizer: raw.standardizer,
            trace: Vec::new(),
        })
    }
}

/// Elementwise sign with `sgn(0) = +1`.
pub fn sign_matrix(m: &DMatrix<f64>) -> DMatrix<f64> {
    m.map(|v| if v >= 0.0 { 1.0 } else { -1.0 })
}

/// `|W^T W - I|_F`.
pub fn ortho_error(w: &DMatrix<f64>) -> f64 {
    let r = w.ncols();
    (w.tr_mul(w) - DMatrix::identity(r, r)).norm()
}

/// Everything the W updates need that stays fixed across outer iterations.
pub struct TrainSetup {
    pub feats: PooledFeatures,
    /// One-hot source labels, `c x n_s`.
    pub ys: DMatrix<f64>,
    pub triplets: TripletSet,
    /// `X L X^T`, zero when the manifold term is disabled.
    pub xlxt: DMatrix<f64>,
    pub config: RunConfig,
    /// `X_t X_t^T + X_s X_s^T`.
    sxx: DMatrix<f64>,
    xt: DMatrix<f64>,
    xs: DMatrix<f64>,
}

impl TrainSetup {
    pub fn new(
        feats: PooledFeatures,
        ys: DMatrix<f64>,
        triplets: TripletSet,
        xlxt: DMatrix<f64>,
        config: RunConfig,
    ) -> Self {
        let sxx = feats.pooled() * feats.pooled().transpose();
        let xt = feats.target();
        let xs = feats.source();
        TrainSetup {
            feats,
            ys,
            triplets,
            xlxt,
            config,
            sxx,
            xt,
            xs,
        }
    }

    fn inputs(&self) -> ObjectiveInputs<'_> {
        ObjectiveInputs {
            feats: &self.feats,
            ys: &self.ys,
            triplets: &self.triplets,
            xlxt: &self.xlxt,
            config: &self.config,
        }
    }

    fn quantization_on(&self) -> bool {
        !self.config.flags.disable_quantization && self.config.theta > 0.0
    }

    fn manifold_on(&self) -> bool {
        !self.config.flags.disable_manifold && self.config.lambda3 > 0.0
    }

    fn triplet_on(&self) -> bool {
        !self.config.flags.disable_triplet
    }

    /// The W-dependent part of the objective; the classification terms are
    /// constant in W and omitted.
    fn w_objective(&self, w: &DMatrix<f64>, bt: &DMatrix<f64>, bs: &DMatrix<f64>) -> f64 {
        let cfg = &self.config;
        let mut total = 0.0;
        if self.triplet_on() {
            let (loss, _) = focal_triplet_loss(
                w,
                &self.triplets,
                &self.feats,
                cfg.margin,
                self.inputs().effective_gamma(),
            );
            total += loss;
        }
        if self.quantization_on() {
            let q = (bt - w.tr_mul(&self.xt)).norm_squared()
                + (bs - w.tr_mul(&self.xs)).norm_squared();
            total += cfg.theta * q;
        }
        if self.manifold_on() {
            total += cfg.lambda3 * (&self.xlxt * w).dot(w).max(0.0);
        }
        total
    }

    fn gradient_with_sxb(
        &self,
        w: &DMatrix<f64>,
        sxb: Option<&DMatrix<f64>>,
    ) -> DMatrix<f64> {
        let cfg = &self.config;
        let mut g = DMatrix::zeros(self.feats.dim(), w.ncols());
        if self.triplet_on() {
            g += triplet_gradient(
                w,
                &self.triplets,
                &self.feats,
                cfg.margin,
                self.inputs().effective_gamma(),
            );
        }
        if self.quantization_on() {
            let sxb = sxb.expect("sxb required when quantization is on");
            g += 2.0 * cfg.theta * (&self.sxx * w - sxb);
        }
        if self.manifold_on() {
            g += 2.0 * cfg.lambda3 * (&self.xlxt * w);
        }
        g
    }

    fn sxb(&self, bt: &DMatrix<f64>, bs: &DMatrix<f64>) -> DMatrix<f64> {
        &self.xt * bt.transpose() + &self.xs * bs.transpose()
    }
}

/// Gradient of the W-dependent objective at the given state: the triplet
/// term over its active set, `2 theta (X X^T W - X B^T)` summed over both
/// domains, and `2 lambda3 X L X^T W`.
pub fn full_gradient(
    setup: &TrainSetup,
    w: &DMatrix<f64>,
    bt: &DMatrix<f64>,
    bs: &DMatrix<f64>,
) -> DMatrix<f64> {
    let sxb = if setup.quantization_on() {
        Some(setup.sxb(bt, bs))
    } else {
        None
    };
    setup.gradient_with_sxb(w, sxb.as_ref())
}

/// Top-`r` eigenvectors of `X X^T`, orthonormal, ordered by descending
/// eigenvalue, each column's first nonzero entry made positive.
pub fn pca_init(x: &DMatrix<f64>, r: usize) -> Result<DMatrix<f64>> {
    let d = x.nrows();
    if r > d {
        return Err(Error::InvalidInput(format!(
            "code length {r} exceeds the feature dimension {d}"
        )));
    }
    let mut xxt = x * x.transpose();
    // exact symmetry for the eigensolver
    for a in 0..d {
        for b in (a + 1)..d {
            let v = 0.5 * (xxt[(a, b)] + xxt[(b, a)]);
            xxt[(a, b)] = v;
            xxt[(b, a)] = v;
        }
    }
    let eig = SymmetricEigen::new(xxt);
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| {
        eig.eigenvalues[b]
            .partial_cmp(&eig.eigenvalues[a])
            .expect("finite eigenvalues")
            .then(a.cmp(&b))
    });
    let max_eig = eig.eigenvalues[order[0]].max(0.0);
    let rank_tol = max_eig * 1e-12;
    let effective_rank = order
        .iter()
        .filter(|&&i| eig.eigenvalues[i] > rank_tol)
        .count();
    if effective_rank < r {
        eprintln!(
            "pwcf: warning: data rank {effective_rank} is below the code length {r}; \
             completing the basis with null-space eigenvectors"
        );
    }
    let mut w = DMatrix::zeros(d, r);
    for (col, &idx) in order.iter().take(r).enumerate() {
        let mut v = eig.eigenvectors.column(idx).into_owned();
        if let Some(&first) = v.iter().find(|&&e| e != 0.0) {
            if first < 0.0 {
                v.neg_mut();
            }
        }
        w.set_column(col, &v);
    }
    Ok(w)
}

/// One Crank-Nicolson / Cayley update: with `A = G W^T - W G^T`, solves
/// `(I + tau/2 A) W' = (I - tau/2 A) W`. Preserves orthonormality.
pub fn cayley_step(w: &DMatrix<f64>, g: &DMatrix<f64>, tau: f64) -> Result<DMatrix<f64>> {
    let d = w.nrows();
    let a = g * w.transpose() - w * g.transpose();
    let half = 0.5 * tau;
    let mut lhs = DMatrix::identity(d, d);
    let mut rhs_mat = DMatrix::identity(d, d);
    for x in 0..d {
        for y in 0..d {
            lhs[(x, y)] += half * a[(x, y)];
            rhs_mat[(x, y)] -= half * a[(x, y)];
        }
    }
    let rhs = rhs_mat * w;
    lhs.clone().lu().solve(&rhs).ok_or_else(|| {
        Error::Numerical(format!(
            "cayley solve failed: tau={tau}, |A|={:.3e}, |I + tau/2 A|={:.3e}",
            a.norm(),
            lhs.norm()
        ))
    })
}

/// Result of one projection update round.
#[derive(Debug, Clone)]
pub struct WStepOutcome {
    pub w: DMatrix<f64>,
    /// W-dependent objective at entry and after each accepted inner
    /// iteration.
    pub objectives: Vec<f64>,
    /// `|W^T W - I|_F` at the same checkpoints.
    pub ortho_errors: Vec<f64>,
}

/// Inner loop of Cayley steps. The step size starts at `config.tau`, is
/// adapted by the BB1 rule from successive iterate/gradient differences
/// (clamped to `[TAU_MIN, TAU_MAX]`), and is halved on failure to descend,
/// at most [`MAX_BACKTRACKS`] times. The returned iterate never has a
/// worse objective than the entry point.
pub fn w_step(
    setup: &TrainSetup,
    w0: &DMatrix<f64>,
    bt: &DMatrix<f64>,
    bs: &DMatrix<f64>,
    inner_iters: usize,
) -> Result<WStepOutcome> {
    let sxb = if setup.quantization_on() {
        Some(setup.sxb(bt, bs))
    } else {
        None
    };
    let mut w = w0.clone();
    let mut f = setup.w_objective(&w, bt, bs);
    let mut objectives = vec![f];
    let mut ortho_errors = vec![ortho_error(&w)];
    let mut tau = setup.config.tau;
    let mut prev: Option<(DMatrix<f64>, DMatrix<f64>)> = None;

    for _ in 0..inner_iters {
        let g = setup.gradient_with_sxb(&w, sxb.as_ref());
        if g.norm() == 0.0 {
            break;
        }
        if let Some((pw, pg)) = &prev {
            let dw = &w - pw;
            let dg = &g - pg;
            let den = dw.dot(&dg);
            if den > 0.0 {
                tau = (dw.dot(&dw) / den).clamp(TAU_MIN, TAU_MAX);
            }
        }
        let mut accepted = false;
        let mut t = tau;
        for _ in 0..=MAX_BACKTRACKS {
            let w_try = cayley_step(&w, &g, t)?;
            let f_try = setup.w_objective(&w_try, bt, bs);
            if f_try <= f {
                prev = Some((std::mem::replace(&mut w, w_try), g));
                f = f_try;
                tau = t;
                accepted = true;
                break;
            }
            t *= 0.5;
        }
        if !accepted {
            break;
        }
        objectives.push(f);
        ortho_errors.push(ortho_error(&w));
    }
    Ok(WStepOutcome {
        w,
        objectives,
        ortho_errors,
    })
}

/// Closed-form classifier update
/// `C = (lambda1 B_s B_s^T + lambda2 I)^-1 lambda1 B_s Y_s^T`.
pub fn c_step(
    bs: &DMatrix<f64>,
    ys: &DMatrix<f64>,
    lambda1: f64,
    lambda2: f64,
) -> Result<DMatrix<f64>> {
    let r = bs.nrows();
    let c = ys.nrows();
    if bs.ncols() != ys.ncols() {
        return Err(Error::shape("classifier sample count", bs.ncols(), ys.ncols()));
    }
    if lambda1 == 0.0 {
        return Ok(DMatrix::zeros(r, c));
    }
    let mut lhs = bs * bs.transpose() * lambda1;
    for i in 0..r {
        lhs[(i, i)] += lambda2;
    }
    let rhs = bs * ys.transpose() * lambda1;
    lhs.lu().solve(&rhs).ok_or_else(|| {
        if lambda2 == 0.0 {
            Error::Numerical(
                "classifier normal equations are singular; lambda2 must be positive".to_string(),
            )
        } else {
            Error::Numerical("classifier solve failed".to_string())
        }
    })
}

/// Target code update `B_t = sgn(W^T X_t)`.
pub fn bt_step(w: &DMatrix<f64>, xt: &DMatrix<f64>) -> DMatrix<f64> {
    sign_matrix(&w.tr_mul(xt))
}

/// Source code update
/// `B_s = sgn((theta I + lambda1 C C^T)^-1 (theta W^T X_s + lambda1 C Y_s))`.
pub fn bs_step(
    w: &DMatrix<f64>,
    xs: &DMatrix<f64>,
    c: &DMatrix<f64>,
    ys: &DMatrix<f64>,
    theta: f64,
    lambda1: f64,
) -> Result<DMatrix<f64>> {
    let r = w.ncols();
    let mut lhs = c * c.transpose() * lambda1;
    for i in 0..r {
        lhs[(i, i)] += theta;
    }
    let rhs = w.tr_mul(xs) * theta + c * ys * lambda1;
    let relaxed = lhs.lu().solve(&rhs).ok_or_else(|| {
        Error::Numerical(format!(
            "source-code solve failed: theta={theta} leaves theta I + lambda1 C C^T singular"
        ))
    })?;
    Ok(sign_matrix(&relaxed))
}

/// Runs the full training loop on the training-visible view of a pair.
///
/// Pipeline: pseudo-labels, per-domain neighbor histograms, hard triplet
/// mining, affinity Laplacian, PCA initialization, seeded random codes,
/// then alternating `W`/`C`/`B_t`/`B_s` updates until the relative
/// objective change drops below [`CONVERGENCE_TOL`] or `max_iters` passes.
pub fn train(view: &TrainView, config: &RunConfig) -> Result<(PwcfModel, CodesPair)> {
    config.validate()?;
    let d = view.source.dim();
    if view.target.dim() != d {
        return Err(Error::shape("train feature dimension", d, view.target.dim()));
    }
    if view.source_labels.len() != view.source.count() {
        return Err(Error::shape(
            "train source labels",
            view.source.count(),
            view.source_labels.len(),
        ));
    }
    let k = config.neighbors;
    let (n_t, n_s) = (view.target.count(), view.source.count());
    if n_s < k + 1 || n_t < k + 1 {
        return Err(Error::InvalidInput(format!(
            "need at least k+1 = {} samples per domain, got n_t={n_t}, n_s={n_s}",
            k + 1
        )));
    }
    let r = config.code_len;
    if r > d {
        return Err(Error::InvalidInput(format!(
            "code length {r} exceeds the feature dimension {d}"
        )));
    }
    let c = view.source_labels.num_classes();

    let standardizer = Standardizer::fit_pooled(view.target, view.source)?;
    let xt = standardizer.apply(view.target)?;
    let xs = standardizer.apply(view.source)?;

    // shared squared-distance matrices; every neighbor search reads these
    let dist_tt = pairwise_sq_dists(&xt, &xt);
    let dist_ss = pairwise_sq_dists(&xs, &xs);
    let dist_st = pairwise_sq_dists(&xs, &xt); // column j = target sample j

    // Steps 1-3: pseudo-labels, histograms, triplets
    let pseudo = knn_pseudo_label_from(&dist_st, view.source_labels, k);
    let hfon_s = compute_hfon_from(&dist_ss, view.source_labels.labels(), k, c);
    let hfon_t = compute_hfon_from(&dist_tt, &pseudo.labels, k, c);

    // cross-domain comparability: histogram distances, or raw feature
    // distances under the histogram ablation
    let cross_dists = if config.flags.disable_hfon {
        dist_st.transpose()
    } else {
        hfon_cross_distances(&hfon_t, &hfon_s)
    };
    let triplets = mine_triplets_with(view.source_labels, &pseudo, &cross_dists);

    let feats = PooledFeatures::new(xt, xs);
    let manifold_off = config.flags.disable_manifold || config.lambda3 == 0.0;
    let xlxt = if manifold_off {
        DMatrix::zeros(d, d)
    } else {
        let graph = build_affinity_from(&dist_tt, &dist_ss, &cross_dists, k, SigmaMode::Median)?;
        graph.xlxt(feats.pooled())
    };
    drop((dist_tt, dist_ss, dist_st, cross_dists));

    let ys = view.source_labels.one_hot();
    let setup = TrainSetup::new(feats, ys, triplets, xlxt, config.clone());

    // Step 4: PCA projection, random codes
    let mut w = pca_init(setup.feats.pooled(), r)?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut random_signs = |cols: usize| {
        DMatrix::from_fn(r, cols, |_, _| if rng.random::<bool>() { 1.0 } else { -1.0 })
    };
    let mut bt = random_signs(n_t);
    let mut bs = random_signs(n_s);
    let mut c_mat = DMatrix::zeros(r, c);

    let effective_lambda1 = if config.flags.disable_classifier {
        0.0
    } else {
        config.lambda1
    };

    let mut trace = Vec::with_capacity(config.max_iters + 1);
    let initial = total_objective(&setup.inputs(), &w, &c_mat, &bt, &bs);
    trace.push(IterationRecord {
        losses: initial,
        ortho_error: ortho_error(&w),
    });
    let mut prev_total = initial.total;

    // Step 5
    for _ in 0..config.max_iters {
        let outcome = w_step(&setup, &w, &bt, &bs, config.inner_w_iters)?;
        // the recorded drift covers every inner Cayley update of this round
        let inner_drift = outcome.ortho_errors.iter().cloned().fold(0.0, f64::max);
        w = outcome.w;
        if !config.flags.disable_classifier {
            c_mat = c_step(&bs, &setup.ys, config.lambda1, config.lambda2)?;
        }
        if !config.flags.disable_quantization {
            // without the quantization term the codes have no coupling to
            // the objective and stay at their random initialization
            bt = bt_step(&w, &setup.xt);
            bs = bs_step(&w, &setup.xs, &c_mat, &setup.ys, config.theta, effective_lambda1)?;
        }
        let breakdown = total_objective(&setup.inputs(), &w, &c_mat, &bt, &bs);
        trace.push(IterationRecord {
            losses: breakdown,
            ortho_error: inner_drift.max(ortho_error(&w)),
        });
        let rel = (breakdown.total - prev_total).abs() / prev_total.abs().max(1e-12);
        prev_total = breakdown.total;
        if rel < config.convergence_tol {
            break;
        }
    }

    Ok((
        PwcfModel {
            w,
            c: c_mat,
            config: config.clone(),
            standardizer,
            num_classes: c,
            trace,
        },
        CodesPair {
            target: bt,
            source: bs,
        },
    ))
}

// --- model file ---

pub(crate) struct RawModel {
    pub kind: u32,
    pub standardizer: Standardizer,
    pub projection: DMatrix<f64>,
    pub classifier: Option<DMatrix<f64>>,
    pub config: RunConfig,
}

pub(crate) fn write_model_file(
    path: &Path,
    kind: u32,
    standardizer: &Standardizer,
    projection: &DMatrix<f64>,
    classifier: Option<&DMatrix<f64>>,
    config: &RunConfig,
) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let io = |e| Error::io(path, e);
    w.write_all(&MODEL_MAGIC).map_err(io)?;
    w.write_all(&FORMAT_VERSION.to_le_bytes()).map_err(io)?;
    w.write_all(&kind.to_le_bytes()).map_err(io)?;
    let d = projection.nrows() as u64;
    let r = projection.ncols() as u64;
    let c = classifier.map_or(0, |m| m.ncols()) as u64;
    w.write_all(&d.to_le_bytes()).map_err(io)?;
    w.write_all(&r.to_le_bytes()).map_err(io)?;
    w.write_all(&c.to_le_bytes()).map_err(io)?;
    write_f64_block(&mut w, standardizer.mean(), path)?;
    write_f64_block(&mut w, standardizer.scale(), path)?;
    write_f64_block(&mut w, projection.as_slice(), path)?;
    if let Some(cm) = classifier {
        write_f64_block(&mut w, cm.as_slice(), path)?;
    }
    for v in [
        config.code_len as u64,
        config.neighbors as u64,
        config.max_iters as u64,
        config.inner_w_iters as u64,
        config.seed,
    ] {
        w.write_all(&v.to_le_bytes()).map_err(io)?;
    }
    write_f64_block(
        &mut w,
        &[
            config.margin,
            config.gamma,
            config.theta,
            config.lambda1,
            config.lambda2,
            config.lambda3,
            config.tau,
            config.convergence_tol,
        ],
        path,
    )?;
    let mut flag_bits = 0u8;
    for (bit, name) in AblationFlags::NAMES.iter().enumerate() {
        if config.flags.get(name).unwrap() {
            flag_bits |= 1 << bit;
        }
    }
    w.write_all(&[flag_bits]).map_err(io)?;
    w.flush().map_err(io)
}

pub(crate) fn read_model_file(path: &Path) -> Result<RawModel> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = BufReader::new(file);
    check_magic(&mut r, &MODEL_MAGIC, path)?;
    check_version(&mut r, path)?;
    let kind = read_u32(&mut r, path, "kind")?;
    let d = read_u64(&mut r, path, "header")? as usize;
    let rr = read_u64(&mut r, path, "header")? as usize;
    let c = read_u64(&mut r, path, "header")? as usize;
    let mean = read_f64_block(&mut r, d, path, "standardizer mean")?;
    let scale = read_f64_block(&mut r, d, path, "standardizer scale")?;
    let proj_vals = read_f64_block(&mut r, d * rr, path, "projection")?;
    let projection = DMatrix::from_column_slice(d, rr, &proj_vals);
    let classifier = if c > 0 {
        let vals = read_f64_block(&mut r, rr * c, path, "classifier")?;
        Some(DMatrix::from_column_slice(rr, c, &vals))
    } else {
        None
    };
    let mut ints = [0u64; 5];
    for v in &mut ints {
        *v = read_u64(&mut r, path, "config")?;
    }
    let floats = read_f64_block(&mut r, 8, path, "config")?;
    let mut flag_byte = [0u8; 1];
    r.read_exact(&mut flag_byte)
        .map_err(|e| Error::format(path, "config flags", format!("truncated: {e}")))?;
    let mut flags = AblationFlags::default();
    for (bit, name) in AblationFlags::NAMES.iter().enumerate() {
        if flag_byte[0] & (1 << bit) != 0 {
            flags.set(name, true)?;
        }
    }
    let config = RunConfig {
        code_len: ints[0] as usize,
        neighbors: ints[1] as usize,
        max_iters: ints[2] as usize,
        inner_w_iters: ints[3] as usize,
        seed: ints[4],
        margin: floats[0],
        gamma: floats[1],
        theta: floats[2],
        lambda1: floats[3],
        lambda2: floats[4],
        lambda3: floats[5],
        tau: floats[6],
        convergence_tol: floats[7],
        flags,
    };
    Ok(RawModel {
        kind,
        standardizer: Standardizer::from_parts(mean, scale)?,
        projection,
        classifier,
        config,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataio::{generate_synthetic_pair, ShiftSpec};
    use crate::graph::{SampleRef, Triplet};

    fn random_matrix(rows: usize, cols: usize, seed: u64) -> DMatrix<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        DMatrix::from_fn(rows, cols, |_, _| rng.random::<f64>() * 2.0 - 1.0)
    }

    fn random_signs(rows: usize, cols: usize, seed: u64) -> DMatrix<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        DMatrix::from_fn(rows, cols, |_, _| if rng.random::<bool>() { 1.0 } else { -1.0 })
    }

    /// Dense Gauss-Jordan solve, independent of the LU path under test.
    fn gauss_solve(a: &DMatrix<f64>, b: &DMatrix<f64>) -> DMatrix<f64> {
        let n = a.nrows();
        let m = b.ncols();
        let mut aug = DMatrix::zeros(n, n + m);
        aug.view_mut((0, 0), (n, n)).copy_from(a);
        aug.view_mut((0, n), (n, m)).copy_from(b);
        for col in 0..n {
            let mut pivot = col;
            for row in (col + 1)..n {
                if aug[(row, col)].abs() > aug[(pivot, col)].abs() {
                    pivot = row;
                }
            }
            aug.swap_rows(col, pivot);
            let p = aug[(col, col)];
            assert!(p.abs() > 1e-14, "singular test system");
            for j in col..(n + m) {
                aug[(col, j)] /= p;
            }
            for row in 0..n {
                if row != col {
                    let factor = aug[(row, col)];
                    for j in col..(n + m) {
                        aug[(row, j)] -= factor * aug[(col, j)];
                    }
                }
            }
        }
        aug.view((0, n), (n, m)).into_owned()
    }

    #[test]
    fn pca_diagonal_covariance_selects_leading_axes() {
        let x = DMatrix::from_column_slice(
            3,
            6,
            &[
                3.0, 0.0, 0.0, -3.0, 0.0, 0.0, 0.0, 2.0, 0.0, 0.0, -2.0, 0.0, 0.0, 0.0, 1.0, 0.0,
                0.0, -1.0,
            ],
        );
        let w = pca_init(&x, 2).unwrap();
        // XX^T = diag(18, 8, 2): columns are +e0 and +e1
        assert!((w[(0, 0)] - 1.0).abs() < 1e-12);
        assert!((w[(1, 1)] - 1.0).abs() < 1e-12);
        assert!(w.column(0).norm() - 1.0 < 1e-12);
        assert!(ortho_error(&w) < 1e-12);
    }

    #[test]
    fn pca_is_orthonormal_with_sorted_variances() {
        let x = random_matrix(6, 40, 123);
        let r = 4;
        let w = pca_init(&x, r).unwrap();
        assert!(ortho_error(&w) < 1e-10);
        let xxt = &x * x.transpose();
        let mut prev = f64::INFINITY;
        for j in 0..r {
            let col = w.column(j).into_owned();
            let lambda = (&xxt * &col).dot(&col);
            assert!(lambda <= prev + 1e-9, "captured variance must be nonincreasing");
            // eigenvector residual against an independent criterion
            let residual = (&xxt * &col - lambda * &col).norm();
            assert!(residual < 1e-7 * xxt.norm(), "residual {residual}");
            prev = lambda;
        }
    }

    #[test]
    fn pca_rejects_r_above_dimension() {
        let x = random_matrix(3, 10, 5);
        assert!(pca_init(&x, 4).is_err());
    }

    #[test]
    fn pca_pads_past_rank_deterministically() {
        // rank-1 data but r = 2
        let mut x = DMatrix::zeros(3, 8);
        for j in 0..8 {
            x[(0, j)] = (j as f64) - 3.5;
        }
        let w1 = pca_init(&x, 2).unwrap();
        let w2 = pca_init(&x, 2).unwrap();
        assert_eq!(w1, w2);
        assert!(ortho_error(&w1) < 1e-10);
    }

    #[test]
    fn cayley_zero_gradient_is_identity() {
        let w = pca_init(&random_matrix(4, 12, 9), 2).unwrap();
        let g = DMatrix::zeros(4, 2);
        let w2 = cayley_step(&w, &g, 0.1).unwrap();
        assert!((&w2 - &w).norm() < 1e-15);
    }

    #[test]
    fn cayley_preserves_orthonormality() {
        let w = pca_init(&random_matrix(8, 30, 21), 3).unwrap();
        for seed in 0..5 {
            let g = random_matrix(8, 3, 100 + seed) * 10.0;
            let w2 = cayley_step(&w, &g, 0.3).unwrap();
            assert!(ortho_error(&w2) < 1e-10, "drift {}", ortho_error(&w2));
        }
    }

    #[test]
    fn cayley_matches_hand_solved_2x2() {
        // W = e0, G = e1, tau = 0.1: A = [[0,-1],[1,0]]
        let w = DMatrix::from_column_slice(2, 1, &[1.0, 0.0]);
        let g = DMatrix::from_column_slice(2, 1, &[0.0, 1.0]);
        let tau = 0.1;
        let w2 = cayley_step(&w, &g, tau).unwrap();
        // solve (I + 0.05 A) w' = (I - 0.05 A) w by Cramer's rule
        let h = 0.05;
        // lhs = [[1, -h], [h, 1]], rhs = (1, -h)
        let det = 1.0 + h * h;
        let exp0 = (1.0 - h * h) / det;
        let exp1 = (-2.0 * h) / det;
        assert!((w2[(0, 0)] - exp0).abs() < 1e-12);
        assert!((w2[(1, 0)] - exp1).abs() < 1e-12);
        assert!((w2.column(0).norm() - 1.0).abs() < 1e-12);
    }

    fn quadratic_setup(seed: u64) -> (TrainSetup, DMatrix<f64>, DMatrix<f64>) {
        // quantization term only
        let mut config = RunConfig::default();
        config.flags.disable_triplet = true;
        config.flags.disable_manifold = true;
        config.code_len = 3;
        let xt = random_matrix(5, 12, seed);
        let xs = random_matrix(5, 14, seed + 1);
        let feats = PooledFeatures::new(xt, xs);
        let ys = crate::dataio::LabelVector::new((0..14).map(|i| i % 2).collect(), 2)
            .unwrap()
            .one_hot();
        let triplets = TripletSet { triplets: vec![], skipped: 0 };
        let xlxt = DMatrix::zeros(5, 5);
        let bt = random_signs(3, 12, seed + 2);
        let bs = random_signs(3, 14, seed + 3);
        (
            TrainSetup::new(feats, ys, triplets, xlxt, config),
            bt,
            bs,
        )
    }

    #[test]
    fn w_step_no_gradient_leaves_w_unchanged() {
        let (mut setup, bt, bs) = quadratic_setup(31);
        setup.config.flags.disable_quantization = true; // every term off
        let w0 = pca_init(setup.feats.pooled(), 3).unwrap();
        let out = w_step(&setup, &w0, &bt, &bs, 5).unwrap();
        assert_eq!(out.w, w0);
        assert_eq!(out.objectives.len(), 1);
    }

    #[test]
    fn w_step_descends_on_quadratic_objective() {
        let (setup, bt, bs) = quadratic_setup(37);
        let w0 = pca_init(setup.feats.pooled(), 3).unwrap();
        let out = w_step(&setup, &w0, &bt, &bs, 5).unwrap();
        assert!(out.objectives.len() > 1, "no step was accepted");
        for pair in out.objectives.windows(2) {
            assert!(pair[1] < pair[0], "objective must strictly decrease: {pair:?}");
        }
        for &e in &out.ortho_errors {
            assert!(e < 1e-10, "orthonormality drift {e}");
        }
    }

    #[test]
    fn full_gradient_matches_finite_differences_on_quadratic() {
        let (setup, bt, bs) = quadratic_setup(43);
        let w0 = pca_init(setup.feats.pooled(), 3).unwrap();
        let g = full_gradient(&setup, &w0, &bt, &bs);
        let h = 1e-6;
        for i in 0..5 {
            for j in 0..3 {
                let mut wp = w0.clone();
                let mut wm = w0.clone();
                wp[(i, j)] += h;
                wm[(i, j)] -= h;
                let fd = (setup.w_objective(&wp, &bt, &bs) - setup.w_objective(&wm, &bt, &bs))
                    / (2.0 * h);
                let rel = (fd - g[(i, j)]).abs() / g[(i, j)].abs().max(1e-6);
                assert!(rel < 1e-4, "entry ({i},{j}): fd {fd} vs {}", g[(i, j)]);
            }
        }
    }

    #[test]
    fn c_step_zero_lambda1_gives_zero() {
        let bs = random_signs(4, 10, 50);
        let ys = crate::dataio::LabelVector::new((0..10).map(|i| i % 3).collect(), 3)
            .unwrap()
            .one_hot();
        let c = c_step(&bs, &ys, 0.0, 10.0).unwrap();
        assert_eq!(c, DMatrix::zeros(4, 3));
    }

    #[test]
    fn c_step_is_stationary_and_matches_dense_solve() {
        let bs = random_signs(4, 20, 51);
        let ys = crate::dataio::LabelVector::new((0..20).map(|i| i % 3).collect(), 3)
            .unwrap()
            .one_hot();
        let (l1, l2) = (2.0, 0.7);
        let c = c_step(&bs, &ys, l1, l2).unwrap();

        // stationarity of lambda1 |Y - C^T B|^2 + lambda2 |C|^2
        let grad = (&bs * bs.transpose() * &c) * l1 - (&bs * ys.transpose()) * l1 + &c * l2;
        assert!(grad.norm() * 2.0 <= 1e-8 * (1.0 + c.norm()), "residual {}", grad.norm());

        // independent dense solve
        let mut lhs = &bs * bs.transpose() * l1;
        for i in 0..4 {
            lhs[(i, i)] += l2;
        }
        let rhs = &bs * ys.transpose() * l1;
        let oracle = gauss_solve(&lhs, &rhs);
        assert!((c - oracle).norm() < 1e-10);
    }

    #[test]
    fn c_step_shrinks_with_large_lambda2() {
        let bs = random_signs(4, 15, 52);
        let ys = crate::dataio::LabelVector::new((0..15).map(|i| i % 2).collect(), 2)
            .unwrap()
            .one_hot();
        let l1 = 1.0;
        let l2 = 1e6;
        let c = c_step(&bs, &ys, l1, l2).unwrap();
        let bound = l1 * (&bs * ys.transpose()).norm() / l2;
        assert!(c.norm() <= bound * (1.0 + 1e-9), "{} > {bound}", c.norm());
    }

    #[test]
    fn bt_step_sign_convention() {
        let w = DMatrix::identity(2, 2);
        let xt = DMatrix::from_column_slice(2, 2, &[0.2, 0.0, -0.1, 3.0]);
        let b = bt_step(&w, &xt);
        assert_eq!(b.as_slice(), &[1.0, 1.0, -1.0, 1.0]);

        let all_neg = DMatrix::from_element(2, 3, -0.5);
        assert!(bt_step(&w, &all_neg).iter().all(|&v| v == -1.0));
    }

    #[test]
    fn bt_step_idempotent_on_codes() {
        let b = random_signs(3, 7, 60);
        let w = DMatrix::identity(3, 3);
        assert_eq!(bt_step(&w, &b), b);
    }

    #[test]
    fn bs_step_reduces_to_projection_sign_without_classifier() {
        let w = pca_init(&random_matrix(5, 20, 61), 3).unwrap();
        let xs = random_matrix(5, 9, 62);
        let ys = crate::dataio::LabelVector::new((0..9).map(|i| i % 2).collect(), 2)
            .unwrap()
            .one_hot();
        let plain = sign_matrix(&w.tr_mul(&xs));
        let c = random_matrix(3, 2, 63);
        let with_l1_zero = bs_step(&w, &xs, &c, &ys, 10.0, 0.0).unwrap();
        assert_eq!(with_l1_zero, plain);
        let zero_c = DMatrix::zeros(3, 2);
        let with_zero_c = bs_step(&w, &xs, &zero_c, &ys, 10.0, 5.0).unwrap();
        assert_eq!(with_zero_c, plain);
    }

    #[test]
    fn bs_step_matches_dense_solve_oracle() {
        let w = pca_init(&random_matrix(6, 25, 64), 4).unwrap();
        let xs = random_matrix(6, 11, 65);
        let ys = crate::dataio::LabelVector::new((0..11).map(|i| i % 3).collect(), 3)
            .unwrap()
            .one_hot();
        let c = random_matrix(4, 3, 66);
        let (theta, l1) = (3.0, 1.5);
        let got = bs_step(&w, &xs, &c, &ys, theta, l1).unwrap();

        let mut lhs = &c * c.transpose() * l1;
        for i in 0..4 {
            lhs[(i, i)] += theta;
        }
        let rhs = w.tr_mul(&xs) * theta + &c * &ys * l1;
        let relaxed = gauss_solve(&lhs, &rhs);
        let want = sign_matrix(&relaxed);
        assert_eq!(got, want);
    }

    fn small_pair() -> crate::dataio::DatasetPair {
        generate_synthetic_pair(
            3,
            8,
            45,
            36,
            &ShiftSpec {
                rotation_deg: 20.0,
                rotation_pairs: 1,
                translation: 1.0,
                noise: 1.0,
            },
            7,
        )
        .unwrap()
    }

    fn small_config() -> RunConfig {
        let mut cfg = RunConfig::default();
        cfg.code_len = 4;
        cfg.neighbors = 5;
        cfg.max_iters = 12;
        cfg.seed = 3;
        cfg
    }

    #[test]
    fn train_zero_iterations_returns_initial_state() {
        let pair = small_pair();
        let mut cfg = small_config();
        cfg.max_iters = 0;
        let (model, codes) = train(&pair.train_view(), &cfg).unwrap();
        assert_eq!(model.trace.len(), 1);
        let w0 = {
            let st = Standardizer::fit_pooled(&pair.target_features, &pair.source_features).unwrap();
            let xt = st.apply(&pair.target_features).unwrap();
            let xs = st.apply(&pair.source_features).unwrap();
            pca_init(PooledFeatures::new(xt, xs).pooled(), 4).unwrap()
        };
        assert_eq!(model.w, w0);
        assert!(codes.target.iter().all(|&v| v == 1.0 || v == -1.0));
        assert!(codes.source.iter().all(|&v| v == 1.0 || v == -1.0));
    }

    #[test]
    fn train_reduces_objective_and_keeps_w_orthonormal() {
        let pair = small_pair();
        let (model, codes) = train(&pair.train_view(), &small_config()).unwrap();
        let first = model.trace.first().unwrap().losses.total;
        let last = model.trace.last().unwrap().losses.total;
        assert!(last < first, "objective {first} -> {last}");
        for rec in &model.trace {
            assert!(rec.ortho_error <= 1e-6, "ortho drift {}", rec.ortho_error);
        }
        assert!(codes.target.iter().all(|&v| v.abs() == 1.0));
        assert_eq!(codes.target.nrows(), 4);
        assert_eq!(codes.source.ncols(), 45);
    }

    #[test]
    fn train_is_deterministic_under_seed() {
        let pair = small_pair();
        let cfg = small_config();
        let (m1, c1) = train(&pair.train_view(), &cfg).unwrap();
        let (m2, c2) = train(&pair.train_view(), &cfg).unwrap();
        assert_eq!(m1.w, m2.w);
        assert_eq!(m1.c, m2.c);
        assert_eq!(c1, c2);
        let t1: Vec<f64> = m1.trace.iter().map(|r| r.losses.total).collect();
        let t2: Vec<f64> = m2.trace.iter().map(|r| r.losses.total).collect();
        assert_eq!(t1, t2);
    }

    #[test]
    fn train_rejects_tiny_domains() {
        let pair = small_pair();
        let mut cfg = small_config();
        cfg.neighbors = 40; // n_t = 36 < k+1
        assert!(train(&pair.train_view(), &cfg).is_err());
    }

    #[test]
    fn ablation_flags_zero_their_trace_columns() {
        let pair = small_pair();
        let mut cfg = small_config();
        cfg.max_iters = 4;
        cfg.flags.disable_manifold = true;
        cfg.flags.disable_triplet = true;
        let (model, _) = train(&pair.train_view(), &cfg).unwrap();
        for rec in &model.trace {
            assert_eq!(rec.losses.manifold, 0.0);
            assert_eq!(rec.losses.triplet, 0.0);
            assert!(rec.losses.quantization > 0.0);
        }
    }

    #[test]
    fn disable_quantization_freezes_codes() {
        let pair = small_pair();
        let mut cfg = small_config();
        cfg.max_iters = 3;
        cfg.flags.disable_quantization = true;
        let (model, codes) = train(&pair.train_view(), &cfg).unwrap();
        // codes must equal the seeded random initialization
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let bt = DMatrix::from_fn(4, 36, |_, _| if rng.random::<bool>() { 1.0 } else { -1.0 });
        let bs = DMatrix::from_fn(4, 45, |_, _| if rng.random::<bool>() { 1.0 } else { -1.0 });
        assert_eq!(codes.target, bt);
        assert_eq!(codes.source, bs);
        for rec in &model.trace {
            assert_eq!(rec.losses.quantization, 0.0);
        }
    }

    #[test]
    fn model_roundtrip_is_identity() {
        let pair = small_pair();
        let mut cfg = small_config();
        cfg.max_iters = 2;
        cfg.flags.standard_triplet = true;
        let (model, _) = train(&pair.train_view(), &cfg).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.pwm");
        model.save(&path).unwrap();
        let loaded = PwcfModel::load(&path).unwrap();
        assert_eq!(loaded.w, model.w);
        assert_eq!(loaded.c, model.c);
        assert_eq!(loaded.config, model.config);
        assert_eq!(loaded.standardizer, model.standardizer);
        assert_eq!(loaded.num_classes, model.num_classes);
    }

    #[test]
    fn gradient_ignores_disabled_terms() {
        let (mut setup, bt, bs) = quadratic_setup(71);
        setup.config.flags.disable_quantization = true;
        let w = pca_init(setup.feats.pooled(), 3).unwrap();
        let g = full_gradient(&setup, &w, &bt, &bs);
        assert_eq!(g, DMatrix::zeros(5, 3));
    }

    #[test]
    fn triplet_gradient_enters_full_gradient() {
        let mut config = RunConfig::default();
        config.flags.disable_manifold = true;
        config.flags.disable_quantization = true;
        config.code_len = 2;
        let xt = random_matrix(4, 6, 80);
        let xs = random_matrix(4, 6, 81);
        let feats = PooledFeatures::new(xt, xs);
        let ys = crate::dataio::LabelVector::new((0..6).map(|i| i % 2).collect(), 2)
            .unwrap()
            .one_hot();
        let triplets = TripletSet {
            triplets: vec![Triplet {
                anchor: SampleRef::target(0),
                positive: SampleRef::source(1),
                negative: SampleRef::source(2),
            }],
            skipped: 0,
        };
        let setup = TrainSetup::new(feats, ys, triplets, DMatrix::zeros(4, 4), config);
        let w = pca_init(setup.feats.pooled(), 2).unwrap();
        let bt = random_signs(2, 6, 82);
        let bs = random_signs(2, 6, 83);
        let g = full_gradient(&setup, &w, &bt, &bs);
        let direct = triplet_gradient(&w, &setup.triplets, &setup.feats, 1.0, 1.0);
        assert_eq!(g, direct);
    }
}
