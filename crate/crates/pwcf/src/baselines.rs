//! Reference encoders: seeded random-projection LSH and PCA-sign hashing.
//!
//! Both produce sign-of-projection codes and share the retrieval and
//! evaluation pipeline (and the model file format) with the trained
//! encoder, so comparisons measure the training method alone.

use std::path::Path;

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::dataio::{FeatureMatrix, RunConfig, Standardizer};
use crate::error::{Error, Result};
use crate::hamming::BinaryCodes;
use crate::optimizer::{
    pca_init, read_model_file, sign_matrix, write_model_file, PwcfModel, KIND_PWCF,
};

pub const KIND_LSH: u32 = 1;
pub const KIND_PCA_SIGN: u32 = 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BaselineKind {
    Lsh,
    PcaSign,
}

impl BaselineKind {
    pub fn tag(self) -> u32 {
        match self {
            BaselineKind::Lsh => KIND_LSH,
            BaselineKind::PcaSign => KIND_PCA_SIGN,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            BaselineKind::Lsh => "lsh",
            BaselineKind::PcaSign => "pca_sign",
        }
    }
}

/// A fitted baseline: a `d x r` projection plus the feature scaling it was
/// fitted with.
#[derive(Debug, Clone, PartialEq)]
pub struct BaselineModel {
    pub kind: BaselineKind,
    pub projection: DMatrix<f64>,
    pub standardizer: Standardizer,
    pub seed: u64,
}

/// Fits a baseline on pooled features: LSH draws a seeded standard-normal
/// projection; PCA-sign takes the leading principal directions.
pub fn fit_baseline(
    kind: BaselineKind,
    x: &FeatureMatrix,
    code_len: usize,
    seed: u64,
) -> Result<BaselineModel> {
    if code_len == 0 {
        return Err(Error::InvalidInput("code length must be at least 1".into()));
    }
    let standardizer = Standardizer::fit(x);
    let standardized = standardizer.apply(x)?;
    let projection = match kind {
        BaselineKind::Lsh => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            DMatrix::from_fn(x.dim(), code_len, |_, _| rng.sample(StandardNormal))
        }
        BaselineKind::PcaSign => pca_init(&standardized, code_len)?,
    };
    Ok(BaselineModel {
        kind,
        projection,
        standardizer,
        seed,
    })
}

/// `pack(sgn(projection^T standardize(x)))` with `sgn(0) = +1`.
pub fn encode_baseline(model: &BaselineModel, x: &FeatureMatrix) -> Result<BinaryCodes> {
    if x.dim() != model.projection.nrows() {
        return Err(Error::shape(
            "encode feature dimension",
            model.projection.nrows(),
            x.dim(),
        ));
    }
    let standardized = model.standardizer.apply(x)?;
    BinaryCodes::pack(&sign_matrix(&model.projection.tr_mul(&standardized)))
}

impl BaselineModel {
    pub fn code_len(&self) -> usize {
        self.projection.ncols()
    }

    pub fn dim(&self) -> usize {
        self.projection.nrows()
    }

    pub fn encode(&self, x: &FeatureMatrix) -> Result<BinaryCodes> {
        encode_baseline(self, x)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut config = RunConfig::default();
        config.code_len = self.code_len();
        config.seed = self.seed;
        write_model_file(
            path.as_ref(),
            self.kind.tag(),
            &self.standardizer,
            &self.projection,
            None,
            &config,
        )
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let raw = read_model_file(path)?;
        let kind = match raw.kind {
            KIND_LSH => BaselineKind::Lsh,
            KIND_PCA_SIGN => BaselineKind::PcaSign,
            other => {
                return Err(Error::format(
                    path,
                    "kind",
                    format!("expected a baseline model (kind 1 or 2), found kind {other}"),
                ))
            }
        };
        Ok(BaselineModel {
            kind,
            projection: raw.projection,
            standardizer: raw.standardizer,
            seed: raw.config.seed,
        })
    }
}

/// Any encoder the CLI can load from a model file.
#[derive(Debug, Clone)]
pub enum AnyModel {
    Pwcf(PwcfModel),
    Baseline(BaselineModel),
}

impl AnyModel {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let raw = read_model_file(path)?;
        match raw.kind {
            KIND_PWCF => Ok(AnyModel::Pwcf(PwcfModel::load(path)?)),
            KIND_LSH | KIND_PCA_SIGN => Ok(AnyModel::Baseline(BaselineModel::load(path)?)),
            other => Err(Error::format(path, "kind", format!("unknown model kind {other}"))),
        }
    }

    pub fn encode(&self, x: &FeatureMatrix) -> Result<BinaryCodes> {
        match self {
            AnyModel::Pwcf(m) => m.encode(x),
            AnyModel::Baseline(m) => m.encode(x),
        }
    }

    pub fn code_len(&self) -> usize {
        match self {
            AnyModel::Pwcf(m) => m.code_len(),
            AnyModel::Baseline(m) => m.code_len(),
        }
    }

    pub fn dim(&self) -> usize {
        match self {
            AnyModel::Pwcf(m) => m.dim(),
            AnyModel::Baseline(m) => m.dim(),
        }
    }

    pub fn kind_name(&self) -> &'static str {
        match self {
            AnyModel::Pwcf(_) => "pwcf",
            AnyModel::Baseline(m) => m.kind.name(),
        }
    }
}
