//! Data types, file formats, synthetic data, and run configuration.
//!
//! Feature matrices are `d x n` with one sample per column. All arithmetic
//! is 64-bit. The on-disk formats are specified in [`format`].

mod config;
pub(crate) mod format;
mod synth;

pub use config::{parse_config, parse_config_str, AblationFlags, Manifest, RunConfig};
pub use format::{
    load_feature_matrix, load_labels, save_feature_matrix, save_labels, MatrixFormat,
};
pub use synth::{generate_synthetic_pair, ShiftSpec};

use nalgebra::DMatrix;

use crate::error::{Error, Result};

/// Column-major feature matrix: `dim` rows, `count` sample columns.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix {
    data: DMatrix<f64>,
}

impl FeatureMatrix {
    /// Wraps a matrix, rejecting empty shapes and non-finite entries.
    pub fn new(data: DMatrix<f64>) -> Result<Self> {
        if data.nrows() == 0 || data.ncols() == 0 {
            return Err(Error::InvalidInput(format!(
                "empty dataset: feature matrix is {}x{}",
                data.nrows(),
                data.ncols()
            )));
        }
        for j in 0..data.ncols() {
            for i in 0..data.nrows() {
                if !data[(i, j)].is_finite() {
                    return Err(Error::InvalidInput(format!(
                        "non-finite value at row {i}, column {j}"
                    )));
                }
            }
        }
        Ok(FeatureMatrix { data })
    }

    /// Feature dimension `d`.
    pub fn dim(&self) -> usize {
        self.data.nrows()
    }

    /// Sample count `n`.
    pub fn count(&self) -> usize {
        self.data.ncols()
    }

    pub fn data(&self) -> &DMatrix<f64> {
        &self.data
    }

    pub fn column(&self, j: usize) -> nalgebra::DVectorView<'_, f64> {
        self.data.column(j)
    }

    /// Keeps only the listed columns, in the given order.
    pub fn select_columns(&self, indices: &[usize]) -> FeatureMatrix {
        FeatureMatrix {
            data: self.data.select_columns(indices.iter()),
        }
    }
}

/// Class labels for one domain, values in `[0, num_classes)`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelVector {
    labels: Vec<usize>,
    num_classes: usize,
}

impl LabelVector {
    pub fn new(labels: Vec<usize>, num_classes: usize) -> Result<Self> {
        if num_classes < 2 {
            return Err(Error::InvalidInput(format!(
                "need at least 2 classes, got {num_classes}"
            )));
        }
        if let Some((pos, &bad)) = labels.iter().enumerate().find(|(_, &l)| l >= num_classes) {
            return Err(Error::InvalidInput(format!(
                "label {bad} at position {pos} is outside [0, {num_classes})"
            )));
        }
        Ok(LabelVector {
            labels,
            num_classes,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn get(&self, i: usize) -> usize {
        self.labels[i]
    }

    /// One-hot matrix `c x n`; column `i` has a single 1 at row `labels[i]`.
    pub fn one_hot(&self) -> DMatrix<f64> {
        let mut m = DMatrix::zeros(self.num_classes, self.labels.len());
        for (i, &l) in self.labels.iter().enumerate() {
            m[(l, i)] = 1.0;
        }
        m
    }

    /// Per-class sample counts.
    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0usize; self.num_classes];
        for &l in &self.labels {
            counts[l] += 1;
        }
        counts
    }

    pub fn select(&self, indices: &[usize]) -> LabelVector {
        LabelVector {
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            num_classes: self.num_classes,
        }
    }
}

/// A labeled source domain plus an unlabeled target domain.
///
/// `target_truth` exists for evaluation only; training entry points take a
/// [`TrainView`], which cannot see it.
#[derive(Debug, Clone)]
pub struct DatasetPair {
    pub source_features: FeatureMatrix,
    pub source_labels: LabelVector,
    pub target_features: FeatureMatrix,
    pub target_truth: Option<LabelVector>,
}

impl DatasetPair {
    pub fn new(
        source_features: FeatureMatrix,
        source_labels: LabelVector,
        target_features: FeatureMatrix,
        target_truth: Option<LabelVector>,
    ) -> Result<Self> {
        if source_features.dim() != target_features.dim() {
            return Err(Error::shape(
                "source/target feature dimension",
                source_features.dim(),
                target_features.dim(),
            ));
        }
        if source_labels.len() != source_features.count() {
            return Err(Error::shape(
                "source label count",
                source_features.count(),
                source_labels.len(),
            ));
        }
        if let Some(truth) = &target_truth {
            if truth.len() != target_features.count() {
                return Err(Error::shape(
                    "target label count",
                    target_features.count(),
                    truth.len(),
                ));
            }
            if truth.num_classes() != source_labels.num_classes() {
                return Err(Error::shape(
                    "target class count",
                    source_labels.num_classes(),
                    truth.num_classes(),
                ));
            }
        }
        Ok(DatasetPair {
            source_features,
            source_labels,
            target_features,
            target_truth,
        })
    }

    pub fn dim(&self) -> usize {
        self.source_features.dim()
    }

    pub fn num_classes(&self) -> usize {
        self.source_labels.num_classes()
    }

    /// The training-visible part of the pair. `target_truth` stays behind.
    pub fn train_view(&self) -> TrainView<'_> {
        TrainView {
            source: &self.source_features,
            source_labels: &self.source_labels,
            target: &self.target_features,
        }
    }
}

/// What training is allowed to look at.
#[derive(Debug, Clone, Copy)]
pub struct TrainView<'a> {
    pub source: &'a FeatureMatrix,
    pub source_labels: &'a LabelVector,
    pub target: &'a FeatureMatrix,
}

/// Per-feature affine transform to zero mean and unit variance.
///
/// Fitted once on pooled training data and stored in the model so queries
/// are transformed identically at encode time.
#[derive(Debug, Clone, PartialEq)]
pub struct Standardizer {
    mean: Vec<f64>,
    scale: Vec<f64>,
}

impl Standardizer {
    /// Fits on the pooled columns of both matrices.
    pub fn fit_pooled(a: &FeatureMatrix, b: &FeatureMatrix) -> Result<Self> {
        if a.dim() != b.dim() {
            return Err(Error::shape("standardizer input dimension", a.dim(), b.dim()));
        }
        Ok(Self::fit_views(&[a.data(), b.data()]))
    }

    pub fn fit(x: &FeatureMatrix) -> Self {
        Self::fit_views(&[x.data()])
    }

    fn fit_views(parts: &[&DMatrix<f64>]) -> Self {
        let d = parts[0].nrows();
        let n: usize = parts.iter().map(|m| m.ncols()).sum();
        let mut mean = vec![0.0; d];
        for m in parts {
            for j in 0..m.ncols() {
                for i in 0..d {
                    mean[i] += m[(i, j)];
                }
            }
        }
        for v in &mut mean {
            *v /= n as f64;
        }
        let mut var = vec![0.0; d];
        for m in parts {
            for j in 0..m.ncols() {
                for i in 0..d {
                    let c = m[(i, j)] - mean[i];
                    var[i] += c * c;
                }
            }
        }
        let scale = var
            .iter()
            .map(|&v| {
                let s = (v / n as f64).sqrt();
                // constant features pass through unscaled
                if s > 1e-12 {
                    s
                } else {
                    1.0
                }
            })
            .collect();
        Standardizer { mean, scale }
    }

    pub fn from_parts(mean: Vec<f64>, scale: Vec<f64>) -> Result<Self> {
        if mean.len() != scale.len() {
            return Err(Error::shape("standardizer parts", mean.len(), scale.len()));
        }
        if scale.iter().any(|&s| !(s > 0.0) || !s.is_finite()) {
            return Err(Error::InvalidInput(
                "standardizer scale must be positive and finite".into(),
            ));
        }
        Ok(Standardizer { mean, scale })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn mean(&self) -> &[f64] {
        &self.mean
    }

    pub fn scale(&self) -> &[f64] {
        &self.scale
    }

    pub fn apply(&self, x: &FeatureMatrix) -> Result<DMatrix<f64>> {
        if x.dim() != self.mean.len() {
            return Err(Error::shape("standardize dimension", self.mean.len(), x.dim()));
        }
        let mut out = x.data().clone();
        for j in 0..out.ncols() {
            for i in 0..out.nrows() {
                out[(i, j)] = (out[(i, j)] - self.mean[i]) / self.scale[i];
            }
        }
        Ok(out)
    }
}
