//! Pseudo-labeling of the target domain by KNN over the source domain, and
//! the per-sample Histogram Feature of Neighbors (HFON).
//!
//! Neighbor searches are exact. Distance ties break toward the smaller
//! sample index, majority-vote ties toward the smaller class index, so all
//! outputs are deterministic.

use nalgebra::DMatrix;
use rayon::prelude::*;

use crate::dataio::{FeatureMatrix, LabelVector};
use crate::error::{Error, Result};

/// KNN-assigned target classes with the winning vote fraction per sample.
#[derive(Debug, Clone, PartialEq)]
pub struct PseudoLabels {
    pub labels: Vec<usize>,
    /// Fraction of the k neighbors that voted for the winner, in (0, 1].
    pub confidence: Vec<f64>,
}

/// `c x n` matrix whose column `i` is the neighbor-class histogram of
/// sample `i`: entry `a` counts the fraction of the k nearest same-domain
/// neighbors with class `a`.
#[derive(Debug, Clone, PartialEq)]
pub struct HfonMatrix {
    data: DMatrix<f64>,
}

impl HfonMatrix {
    pub fn new(data: DMatrix<f64>) -> Result<Self> {
        for j in 0..data.ncols() {
            let mut sum = 0.0;
            for i in 0..data.nrows() {
                let v = data[(i, j)];
                if !(v >= 0.0) {
                    return Err(Error::InvalidInput(format!(
                        "histogram entry ({i}, {j}) is negative"
                    )));
                }
                sum += v;
            }
            if (sum - 1.0).abs() > 1e-9 {
                return Err(Error::InvalidInput(format!(
                    "histogram column {j} sums to {sum}, not 1"
                )));
            }
        }
        Ok(HfonMatrix { data })
    }

    pub fn num_classes(&self) -> usize {
        self.data.nrows()
    }

    pub fn count(&self) -> usize {
        self.data.ncols()
    }

    pub fn data(&self) -> &DMatrix<f64> {
        &self.data
    }

    /// Histogram of sample `i` as a contiguous slice of length `c`.
    pub fn histogram(&self, i: usize) -> &[f64] {
        let c = self.data.nrows();
        &self.data.as_slice()[i * c..(i + 1) * c]
    }
}

/// All pairwise squared Euclidean distances, `candidates.ncols() x
/// queries.ncols()`; column `j` holds the distances of query `j`.
///
/// Uses the Gram-matrix expansion, clamping tiny negative roundoff to 0.
pub(crate) fn pairwise_sq_dists(candidates: &DMatrix<f64>, queries: &DMatrix<f64>) -> DMatrix<f64> {
    assert_eq!(candidates.nrows(), queries.nrows(), "dimension mismatch");
    let d = candidates.nrows();
    let m = candidates.ncols();
    let n = queries.ncols();
    let cand_sq: Vec<f64> = (0..m).map(|i| candidates.column(i).norm_squared()).collect();
    let query_sq: Vec<f64> = (0..n).map(|j| queries.column(j).norm_squared()).collect();

    // Gram matrix candidates^T * queries, column blocks in parallel
    let mut out = DMatrix::zeros(m, n);
    let a = candidates.as_slice();
    let b = queries.as_slice();
    let block = n.div_ceil(rayon::current_num_threads()).max(1);
    out.as_mut_slice()
        .par_chunks_mut(m * block)
        .enumerate()
        .for_each(|(chunk, c)| {
            let cols = c.len() / m;
            let b_part = &b[chunk * block * d..chunk * block * d + cols * d];
            unsafe {
                // candidates^T is m x d with row stride d; everything else
                // is column-major
                matrixmultiply::dgemm(
                    m, d, cols, 1.0, a.as_ptr(), d as isize, 1, b_part.as_ptr(), 1, d as isize,
                    0.0, c.as_mut_ptr(), 1, m as isize,
                );
            }
        });

    out.as_mut_slice()
        .par_chunks_mut(m)
        .zip(query_sq.par_iter())
        .for_each(|(col, &q_sq)| {
            for (entry, &c_sq) in col.iter_mut().zip(&cand_sq) {
                let d = (c_sq + q_sq) - 2.0 * *entry;
                *entry = if d > 0.0 { d } else { 0.0 };
            }
        });
    out
}

/// Indices of the `k` smallest entries, ascending by `(distance, index)`,
/// skipping `exclude`. A bounded max-heap keeps the scan at O(n log k)
/// without per-query scratch proportional to n.
pub(crate) fn k_smallest(dists: &[f64], k: usize, exclude: Option<usize>) -> Vec<usize> {
    if k == 0 {
        return Vec::new();
    }
    let worse = |a: &(f64, usize), b: &(f64, usize)| -> bool {
        a.0 > b.0 || (a.0 == b.0 && a.1 > b.1)
    };
    // heap[0] is the worst kept entry under the (distance, index) order
    let mut heap: Vec<(f64, usize)> = Vec::with_capacity(k + 1);
    let sift_down = |heap: &mut Vec<(f64, usize)>, mut i: usize| {
        loop {
            let (l, r) = (2 * i + 1, 2 * i + 2);
            let mut largest = i;
            if l < heap.len() && worse(&heap[l], &heap[largest]) {
                largest = l;
            }
            if r < heap.len() && worse(&heap[r], &heap[largest]) {
                largest = r;
            }
            if largest == i {
                break;
            }
            heap.swap(i, largest);
            i = largest;
        }
    };
    for (i, &d) in dists.iter().enumerate() {
        if Some(i) == exclude {
            continue;
        }
        let entry = (d, i);
        if heap.len() < k {
            heap.push(entry);
            // sift up
            let mut j = heap.len() - 1;
            while j > 0 {
                let parent = (j - 1) / 2;
                if worse(&heap[j], &heap[parent]) {
                    heap.swap(j, parent);
                    j = parent;
                } else {
                    break;
                }
            }
        } else if worse(&heap[0], &entry) {
            heap[0] = entry;
            sift_down(&mut heap, 0);
        }
    }
    heap.sort_unstable_by(|a, b| {
        a.0.partial_cmp(&b.0)
            .expect("finite distances")
            .then(a.1.cmp(&b.1))
    });
    heap.into_iter().map(|(_, i)| i).collect()
}

/// Majority class among `votes`; ties go to the smaller class index.
fn majority_vote(votes: &[usize], num_classes: usize) -> (usize, usize) {
    let mut counts = vec![0usize; num_classes];
    for &v in votes {
        counts[v] += 1;
    }
    let mut winner = 0;
    for class in 1..num_classes {
        if counts[class] > counts[winner] {
            winner = class;
        }
    }
    (winner, counts[winner])
}

/// Assigns each target sample the majority class of its `k` nearest source
/// samples under Euclidean distance.
pub fn knn_pseudo_label(
    source: &FeatureMatrix,
    source_labels: &LabelVector,
    target: &FeatureMatrix,
    k: usize,
) -> Result<PseudoLabels> {
    if source.dim() != target.dim() {
        return Err(Error::shape("knn feature dimension", source.dim(), target.dim()));
    }
    if source_labels.len() != source.count() {
        return Err(Error::shape(
            "knn source label count",
            source.count(),
            source_labels.len(),
        ));
    }
    if k == 0 {
        return Err(Error::InvalidInput("k must be at least 1".into()));
    }
    if k > source.count() {
        return Err(Error::InvalidInput(format!(
            "k={} exceeds the number of source samples {}",
            k,
            source.count()
        )));
    }
    let dists = pairwise_sq_dists(source.data(), target.data());
    Ok(knn_pseudo_label_from(&dists, source_labels, k))
}

/// [`knn_pseudo_label`] over a precomputed `n_s x n_t` squared-distance
/// matrix (column `j` holds target sample `j`'s distances).
pub(crate) fn knn_pseudo_label_from(
    dists: &DMatrix<f64>,
    source_labels: &LabelVector,
    k: usize,
) -> PseudoLabels {
    let n_s = dists.nrows();
    let n_t = dists.ncols();
    let c = source_labels.num_classes();
    let results: Vec<(usize, f64)> = (0..n_t)
        .into_par_iter()
        .map(|j| {
            let col = &dists.as_slice()[j * n_s..(j + 1) * n_s];
            let neighbors = k_smallest(col, k, None);
            let votes: Vec<usize> = neighbors.iter().map(|&i| source_labels.get(i)).collect();
            let (winner, count) = majority_vote(&votes, c);
            (winner, count as f64 / k as f64)
        })
        .collect();
    PseudoLabels {
        labels: results.iter().map(|&(l, _)| l).collect(),
        confidence: results.iter().map(|&(_, c)| c).collect(),
    }
}

/// Builds the HFON matrix of one domain: column `i` is the class-frequency
/// histogram of sample `i`'s `k` nearest neighbors within this domain,
/// self excluded.
pub fn compute_hfon(
    features: &FeatureMatrix,
    labels: &[usize],
    k: usize,
    num_classes: usize,
) -> Result<HfonMatrix> {
    let n = features.count();
    if labels.len() != n {
        return Err(Error::shape("hfon label count", n, labels.len()));
    }
    if num_classes == 0 {
        return Err(Error::InvalidInput("need at least one class".into()));
    }
    if let Some((pos, &bad)) = labels.iter().enumerate().find(|(_, &l)| l >= num_classes) {
        return Err(Error::InvalidInput(format!(
            "label {bad} at position {pos} is outside [0, {num_classes})"
        )));
    }
    if k == 0 {
        return Err(Error::InvalidInput("k must be at least 1".into()));
    }
    if n <= k {
        return Err(Error::InvalidInput(format!(
            "need more than k={k} samples for self-excluded neighbors, got {n}"
        )));
    }
    let dists = pairwise_sq_dists(features.data(), features.data());
    Ok(compute_hfon_from(&dists, labels, k, num_classes))
}

/// [`compute_hfon`] over a precomputed `n x n` within-domain
/// squared-distance matrix.
pub(crate) fn compute_hfon_from(
    dists: &DMatrix<f64>,
    labels: &[usize],
    k: usize,
    num_classes: usize,
) -> HfonMatrix {
    let n = dists.ncols();
    let columns: Vec<Vec<f64>> = (0..n)
        .into_par_iter()
        .map(|i| {
            let col = &dists.as_slice()[i * n..(i + 1) * n];
            let neighbors = k_smallest(col, k, Some(i));
            let mut hist = vec![0.0; num_classes];
            for &j in &neighbors {
                hist[labels[j]] += 1.0;
            }
            for v in &mut hist {
                *v /= k as f64;
            }
            hist
        })
        .collect();
    let mut data = DMatrix::zeros(num_classes, n);
    for (i, col) in columns.iter().enumerate() {
        for (a, &v) in col.iter().enumerate() {
            data[(a, i)] = v;
        }
    }
    HfonMatrix { data }
}

/// Squared Euclidean distance between two neighbor-class histograms.
pub fn hfon_distance(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len(), "histogram class counts differ");
    a.iter()
        .zip(b.iter())
        .map(|(x, y)| (x - y) * (x - y))
        .sum()
}
