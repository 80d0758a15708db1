//! Cross-domain hard triplets and the manifold affinity graph.
//!
//! Pooled sample indexing everywhere in this module: target samples come
//! first (`0..n_t`), then source samples (`n_t..n_t + n_s`), matching the
//! column order of the pooled feature matrix `[X_t, X_s]`.

use nalgebra::DMatrix;
use rayon::prelude::*;

use crate::dataio::{FeatureMatrix, LabelVector};
use crate::error::{Error, Result};
use crate::neighbors::{hfon_distance, k_smallest, pairwise_sq_dists, HfonMatrix, PseudoLabels};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Domain {
    Target,
    Source,
}

impl Domain {
    pub fn opposite(self) -> Domain {
        match self {
            Domain::Target => Domain::Source,
            Domain::Source => Domain::Target,
        }
    }
}

/// A sample identified by its domain and its index within that domain.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct SampleRef {
    pub domain: Domain,
    pub index: usize,
}

impl SampleRef {
    pub fn target(index: usize) -> Self {
        SampleRef { domain: Domain::Target, index }
    }

    pub fn source(index: usize) -> Self {
        SampleRef { domain: Domain::Source, index }
    }

    /// Column of this sample in the pooled `[X_t, X_s]` matrix.
    pub fn pooled(&self, n_t: usize) -> usize {
        match self.domain {
            Domain::Target => self.index,
            Domain::Source => n_t + self.index,
        }
    }
}

/// One hard cross-domain triplet. The positive and negative share the
/// domain opposite the anchor's; the positive shares the anchor's class,
/// the negative does not.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Triplet {
    pub anchor: SampleRef,
    pub positive: SampleRef,
    pub negative: SampleRef,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TripletSet {
    pub triplets: Vec<Triplet>,
    /// Anchors dropped because the opposite domain lacked a same-class or a
    /// different-class sample.
    pub skipped: usize,
}

/// Picks, for one anchor, the same-class candidate at maximum distance and
/// the different-class candidate at minimum distance. Ties break toward
/// the smaller candidate index. Returns `None` when either side is empty.
fn pick_hard_pair(
    anchor_label: usize,
    candidate_labels: &[usize],
    dist: impl Fn(usize) -> f64,
) -> Option<(usize, usize)> {
    let mut best_pos: Option<(f64, usize)> = None;
    let mut best_neg: Option<(f64, usize)> = None;
    for (j, &label) in candidate_labels.iter().enumerate() {
        let d = dist(j);
        if label == anchor_label {
            let better = match best_pos {
                None => true,
                Some((bd, _)) => d > bd,
            };
            if better {
                best_pos = Some((d, j));
            }
        } else {
            let better = match best_neg {
                None => true,
                Some((bd, _)) => d < bd,
            };
            if better {
                best_neg = Some((d, j));
            }
        }
    }
    match (best_pos, best_neg) {
        (Some((_, p)), Some((_, n))) => Some((p, n)),
        _ => None,
    }
}

/// Mines one hard triplet per training sample using neighbor-histogram
/// distances across domains. Target anchors use their pseudo-labels.
///
/// Anchors are visited in pooled order (all target samples, then all
/// source samples), so the output is at most `n_t + n_s` triplets.
pub fn mine_triplets(
    source_labels: &LabelVector,
    pseudo: &PseudoLabels,
    hfon_s: &HfonMatrix,
    hfon_t: &HfonMatrix,
) -> Result<TripletSet> {
    let n_t = pseudo.labels.len();
    let n_s = source_labels.len();
    if hfon_t.count() != n_t {
        return Err(Error::shape("target histogram count", n_t, hfon_t.count()));
    }
    if hfon_s.count() != n_s {
        return Err(Error::shape("source histogram count", n_s, hfon_s.count()));
    }
    if hfon_s.num_classes() != hfon_t.num_classes() {
        return Err(Error::shape(
            "histogram class count",
            hfon_s.num_classes(),
            hfon_t.num_classes(),
        ));
    }
    let cross = hfon_cross_distances(hfon_t, hfon_s);
    Ok(mine_triplets_with(source_labels, pseudo, &cross))
}

/// `n_t x n_s` matrix of squared histogram distances, evaluated with the
/// direct per-pair formula so mathematically equal distances stay
/// bit-equal and the argmax/argmin tie rules are reproducible.
pub fn hfon_cross_distances(hfon_t: &HfonMatrix, hfon_s: &HfonMatrix) -> DMatrix<f64> {
    let n_t = hfon_t.count();
    let n_s = hfon_s.count();
    let mut cross = DMatrix::zeros(n_t, n_s);
    cross
        .as_mut_slice()
        .par_chunks_mut(n_t)
        .enumerate()
        .for_each(|(j, col)| {
            let hs = hfon_s.histogram(j);
            for (i, entry) in col.iter_mut().enumerate() {
                *entry = hfon_distance(hfon_t.histogram(i), hs);
            }
        });
    cross
}

/// Same mining rule over a caller-supplied `n_t x n_s` cross-domain
/// distance matrix (used when histograms are disabled).
pub fn mine_triplets_with(
    source_labels: &LabelVector,
    pseudo: &PseudoLabels,
    cross_dists: &DMatrix<f64>,
) -> TripletSet {
    let n_t = pseudo.labels.len();
    let n_s = source_labels.len();
    assert_eq!(cross_dists.nrows(), n_t, "cross distance rows");
    assert_eq!(cross_dists.ncols(), n_s, "cross distance cols");

    let target_picks: Vec<Option<(usize, usize)>> = (0..n_t)
        .into_par_iter()
        .map(|i| {
            pick_hard_pair(pseudo.labels[i], source_labels.labels(), |j| {
                cross_dists[(i, j)]
            })
        })
        .collect();
    let source_picks: Vec<Option<(usize, usize)>> = (0..n_s)
        .into_par_iter()
        .map(|j| {
            pick_hard_pair(source_labels.get(j), &pseudo.labels, |i| cross_dists[(i, j)])
        })
        .collect();

    let mut triplets = Vec::with_capacity(n_t + n_s);
    let mut skipped = 0;
    for (i, pick) in target_picks.into_iter().enumerate() {
        match pick {
            Some((p, n)) => triplets.push(Triplet {
                anchor: SampleRef::target(i),
                positive: SampleRef::source(p),
                negative: SampleRef::source(n),
            }),
            None => skipped += 1,
        }
    }
    for (j, pick) in source_picks.into_iter().enumerate() {
        match pick {
            Some((p, n)) => triplets.push(Triplet {
                anchor: SampleRef::source(j),
                positive: SampleRef::target(p),
                negative: SampleRef::target(n),
            }),
            None => skipped += 1,
        }
    }
    TripletSet { triplets, skipped }
}

/// Bandwidth selection for the affinity weights.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum SigmaMode {
    /// Per edge class, sigma^2 is the median squared distance over the
    /// edges of that class.
    Median,
    /// Fixed sigma^2 for within-domain and cross-domain edges.
    Fixed { within: f64, cross: f64 },
}

/// Sparse symmetric affinity with its graph Laplacian `L = D - Z`.
#[derive(Debug, Clone, PartialEq)]
pub struct LaplacianGraph {
    n: usize,
    /// Undirected edges `(i, j, weight)` with `i < j` in pooled indexing.
    edges: Vec<(u32, u32, f64)>,
    degrees: Vec<f64>,
    sigma_sq_within: f64,
    sigma_sq_cross: f64,
}

impl LaplacianGraph {
    /// Graph with no edges; `L` is the zero matrix.
    pub fn empty(n: usize) -> Self {
        LaplacianGraph {
            n,
            edges: Vec::new(),
            degrees: vec![0.0; n],
            sigma_sq_within: 0.0,
            sigma_sq_cross: 0.0,
        }
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn edges(&self) -> &[(u32, u32, f64)] {
        &self.edges
    }

    pub fn degrees(&self) -> &[f64] {
        &self.degrees
    }

    pub fn sigma_sq_within(&self) -> f64 {
        self.sigma_sq_within
    }

    pub fn sigma_sq_cross(&self) -> f64 {
        self.sigma_sq_cross
    }

    /// `x^T L x`, evaluated as the edge sum `sum w_ij (x_i - x_j)^2`.
    pub fn quadratic_form(&self, x: &[f64]) -> f64 {
        assert_eq!(x.len(), self.n, "vector length");
        self.edges
            .iter()
            .map(|&(i, j, w)| {
                let d = x[i as usize] - x[j as usize];
                w * d * d
            })
            .sum()
    }

    /// `X L X^T` for a `d x n` matrix whose columns follow the pooled order.
    pub fn xlxt(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        assert_eq!(x.ncols(), self.n, "column count");
        let d = x.nrows();
        // rows of L X^T, assembled sparsely
        let mut lxt = DMatrix::zeros(self.n, d);
        for i in 0..self.n {
            let deg = self.degrees[i];
            if deg != 0.0 {
                for a in 0..d {
                    lxt[(i, a)] = deg * x[(a, i)];
                }
            }
        }
        for &(i, j, w) in &self.edges {
            let (i, j) = (i as usize, j as usize);
            for a in 0..d {
                lxt[(i, a)] -= w * x[(a, j)];
                lxt[(j, a)] -= w * x[(a, i)];
            }
        }
        let m = x * lxt;
        // symmetrize away multiplication roundoff
        let mut sym = DMatrix::zeros(d, d);
        for a in 0..d {
            for b in 0..d {
                sym[(a, b)] = 0.5 * (m[(a, b)] + m[(b, a)]);
            }
        }
        sym
    }

    /// Dense `Z` for small-instance checks.
    pub fn dense_affinity(&self) -> DMatrix<f64> {
        let mut z = DMatrix::zeros(self.n, self.n);
        for &(i, j, w) in &self.edges {
            z[(i as usize, j as usize)] = w;
            z[(j as usize, i as usize)] = w;
        }
        z
    }
}

fn median(values: &mut [f64]) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    let len = values.len();
    let mid = len / 2;
    let cmp = |a: &f64, b: &f64| a.partial_cmp(b).unwrap();
    let (below, upper, _) = values.select_nth_unstable_by(mid, cmp);
    let upper = *upper;
    if len % 2 == 1 {
        upper
    } else {
        let lower = below.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        0.5 * (lower + upper)
    }
}

/// Builds the neighborhood affinity and its Laplacian.
///
/// Edges connect k-nearest-neighbor pairs, symmetrized by union: within a
/// domain neighbors are found by feature distance and weighted
/// `exp(-|x_i - x_j|^2 / sigma^2)`; across domains neighbors are found by
/// histogram distance and weighted `exp(-|h_i - h_j|^2 / sigma^2)`.
pub fn build_affinity(
    target: &FeatureMatrix,
    source: &FeatureMatrix,
    hfon_t: &HfonMatrix,
    hfon_s: &HfonMatrix,
    k: usize,
    sigma_mode: SigmaMode,
) -> Result<LaplacianGraph> {
    let n_t = target.count();
    let n_s = source.count();
    if hfon_t.count() != n_t || hfon_s.count() != n_s {
        return Err(Error::shape(
            "histogram counts",
            format!("{n_t}/{n_s}"),
            format!("{}/{}", hfon_t.count(), hfon_s.count()),
        ));
    }
    let cross = hfon_cross_distances(hfon_t, hfon_s);
    build_affinity_with(target, source, &cross, k, sigma_mode)
}

/// [`build_affinity`] with a caller-supplied `n_t x n_s` cross-domain
/// distance matrix (used when histograms are disabled).
pub fn build_affinity_with(
    target: &FeatureMatrix,
    source: &FeatureMatrix,
    cross_sq_dists: &DMatrix<f64>,
    k: usize,
    sigma_mode: SigmaMode,
) -> Result<LaplacianGraph> {
    if target.dim() != source.dim() {
        return Err(Error::shape("affinity feature dimension", target.dim(), source.dim()));
    }
    let within_target = pairwise_sq_dists(target.data(), target.data());
    let within_source = pairwise_sq_dists(source.data(), source.data());
    build_affinity_from(&within_target, &within_source, cross_sq_dists, k, sigma_mode)
}

/// Core affinity construction over precomputed squared-distance matrices:
/// `n_t x n_t` within-target, `n_s x n_s` within-source, and `n_t x n_s`
/// cross-domain.
pub(crate) fn build_affinity_from(
    within_target: &DMatrix<f64>,
    within_source: &DMatrix<f64>,
    cross_sq_dists: &DMatrix<f64>,
    k: usize,
    sigma_mode: SigmaMode,
) -> Result<LaplacianGraph> {
    if k == 0 {
        return Err(Error::InvalidInput("k must be at least 1".into()));
    }
    let n_t = within_target.ncols();
    let n_s = within_source.ncols();
    let n = n_t + n_s;
    assert_eq!(cross_sq_dists.nrows(), n_t, "cross distance rows");
    assert_eq!(cross_sq_dists.ncols(), n_s, "cross distance cols");

    // candidate edges as (i, j, squared distance), i < j pooled
    let within_of = |dists: &DMatrix<f64>, offset: usize| -> Vec<(u32, u32, f64)> {
        let m = dists.ncols();
        let per_node: Vec<Vec<(u32, u32, f64)>> = (0..m)
            .into_par_iter()
            .map(|i| {
                let col = &dists.as_slice()[i * m..(i + 1) * m];
                k_smallest(col, k, Some(i))
                    .into_iter()
                    .map(|j| {
                        let (a, b) = ((offset + i.min(j)) as u32, (offset + i.max(j)) as u32);
                        (a, b, col[j])
                    })
                    .collect()
            })
            .collect();
        per_node.into_iter().flatten().collect()
    };
    let mut within = within_of(within_target, 0);
    within.extend(within_of(within_source, n_t));

    // cross-domain candidates from both sides of the distance matrix
    let cross_t = {
        // n_s x n_t, one column per target, transposed in parallel
        let mut t = DMatrix::zeros(n_s, n_t);
        t.as_mut_slice()
            .par_chunks_mut(n_s)
            .enumerate()
            .for_each(|(i, col)| {
                for (j, entry) in col.iter_mut().enumerate() {
                    *entry = cross_sq_dists[(i, j)];
                }
            });
        t
    };
    let from_targets: Vec<Vec<(u32, u32, f64)>> = (0..n_t)
        .into_par_iter()
        .map(|i| {
            let col = &cross_t.as_slice()[i * n_s..(i + 1) * n_s];
            k_smallest(col, k, None)
                .into_iter()
                .map(|j| (i as u32, (n_t + j) as u32, col[j]))
                .collect()
        })
        .collect();
    let from_sources: Vec<Vec<(u32, u32, f64)>> = (0..n_s)
        .into_par_iter()
        .map(|j| {
            let col = &cross_sq_dists.as_slice()[j * n_t..(j + 1) * n_t];
            k_smallest(col, k, None)
                .into_iter()
                .map(|i| (i as u32, (n_t + j) as u32, col[i]))
                .collect()
        })
        .collect();
    let mut cross: Vec<(u32, u32, f64)> = from_targets.into_iter().flatten().collect();
    cross.extend(from_sources.into_iter().flatten());

    let dedup = |edges: &mut Vec<(u32, u32, f64)>| {
        edges.sort_by(|a, b| (a.0, a.1).cmp(&(b.0, b.1)));
        edges.dedup_by_key(|e| (e.0, e.1));
    };
    dedup(&mut within);
    dedup(&mut cross);

    let (sigma_sq_within, sigma_sq_cross) = match sigma_mode {
        SigmaMode::Fixed { within, cross } => {
            if !(within > 0.0) || !(cross > 0.0) {
                return Err(Error::InvalidInput("fixed sigma^2 must be positive".into()));
            }
            (within, cross)
        }
        SigmaMode::Median => {
            let mut wd: Vec<f64> = within.iter().map(|e| e.2).collect();
            let mut cd: Vec<f64> = cross.iter().map(|e| e.2).collect();
            // an all-zero median would blow up the weights; fall back to 1
            (median(&mut wd).max(1e-12), median(&mut cd).max(1e-12))
        }
    };

    let mut edges: Vec<(u32, u32, f64)> =
        Vec::with_capacity(within.len() + cross.len());
    for (i, j, d2) in within {
        edges.push((i, j, (-d2 / sigma_sq_within).exp()));
    }
    for (i, j, d2) in cross {
        edges.push((i, j, (-d2 / sigma_sq_cross).exp()));
    }
    edges.sort_by(|a, b| (a.0, a.1).cmp(&(b.0, b.1)));

    let mut degrees = vec![0.0; n];
    for &(i, j, w) in &edges {
        degrees[i as usize] += w;
        degrees[j as usize] += w;
    }

    Ok(LaplacianGraph {
        n,
        edges,
        degrees,
        sigma_sq_within,
        sigma_sq_cross,
    })
}

/// Manifold energy `trace(W^T X L X^T W)` of the projected samples.
///
/// Equals the half-sum `sum_{i<j} Z_ij |W^T x_i - W^T x_j|^2`; clamps
/// negative roundoff to zero.
pub fn manifold_quadratic(w: &DMatrix<f64>, x: &DMatrix<f64>, l: &LaplacianGraph) -> f64 {
    let m = l.xlxt(x);
    let mw = m * w;
    w.dot(&mw).max(0.0)
}
