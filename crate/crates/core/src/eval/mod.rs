//! Agreement between model scores and human judgements.

mod geometry;
mod logistic;
mod protocols;
mod rank;

pub use geometry::{geometric_transform, warp, warp_matrix, Affine, Transform};
pub use logistic::{logistic_fit, LogisticFit, LogisticParams};
pub use protocols::{knn_classify, map_score, rrf, two_afc, two_afc_mean};
pub use rank::{average_ranks, krcc, pearson, srcc};

use crate::error::Result;

/// PLCC, SRCC and KRCC of one dataset, PLCC taken after logistic remapping.
#[derive(Clone, Debug, PartialEq)]
pub struct Correlations {
    pub plcc: f64,
    pub srcc: f64,
    pub krcc: f64,
    pub logistic: LogisticParams,
    pub n: usize,
}

/// Pearson correlation between `mos` and the logistic remapping of `model`.
pub fn plcc(model: &[f64], mos: &[f64]) -> Result<(f64, LogisticFit)> {
    let fit = logistic_fit(model, mos)?;
    let mapped: Vec<f64> = model.iter().map(|&d| fit.params.predict(d)).collect();
    Ok((pearson(&mapped, mos)?, fit))
}

pub fn correlations(model: &[f64], mos: &[f64]) -> Result<Correlations> {
    let (p, fit) = plcc(model, mos)?;
    Ok(Correlations {
        plcc: p,
        srcc: srcc(model, mos)?,
        krcc: krcc(model, mos)?,
        logistic: fit.params,
        n: model.len(),
    })
}
