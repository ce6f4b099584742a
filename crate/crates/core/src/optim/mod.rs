//! Learning the similarity weights `α`, `β`.
//!
//! The distance is linear in the weights, so training works on cached
//! per-pair similarity profiles and never differentiates the backbone.

mod train;

pub use train::{
    normalize_scores, texture_crop_pairs, train, CachedProfiles, ProfileSource, RecomputedProfiles, TraceRow,
    TrainConfig, TrainOutcome,
};

use crate::error::{Error, Result};
use crate::metric::{SimilarityProfile, WeightSet};

/// `E1 = |D(x, y) − q|`.
pub fn loss_e1(profile: &SimilarityProfile, q: f64, w: &WeightSet) -> Result<f64> {
    Ok((profile.distance(w)? - q).abs())
}

/// `E2 = D(z1, z2)` for two crops of one texture.
pub fn loss_e2(profile: &SimilarityProfile, w: &WeightSet) -> Result<f64> {
    profile.distance(w)
}

/// `mean E1 + λ · mean E2`.
pub fn combined_loss(
    quality: &[(&SimilarityProfile, f64)],
    texture: &[&SimilarityProfile],
    w: &WeightSet,
    lambda: f64,
) -> Result<f64> {
    if quality.is_empty() || texture.is_empty() {
        return Err(Error::invalid("combined loss needs nonempty quality and texture batches"));
    }
    let e1 = quality
        .iter()
        .map(|(p, q)| loss_e1(p, *q, w))
        .sum::<Result<f64>>()?
        / quality.len() as f64;
    let e2 = texture.iter().map(|p| loss_e2(p, w)).sum::<Result<f64>>()? / texture.len() as f64;
    Ok(e1 + lambda * e2)
}

/// Maps arbitrary `(α, β)` back into the feasible set.
///
/// Entries are clamped to be nonnegative and stage-0 entries to
/// `[floor, 1]`; the free entries are then rescaled so the total is one.
/// Entries sitting on a bound in the direction of the rescale stay fixed.
/// The clamp/rescale pair is iterated until nothing moves (at most ten
/// rounds).
pub fn project_weights(w: &WeightSet, floor: f64) -> WeightSet {
    let layout = w.layout().clone();
    let n = w.len();
    let pix = layout.pixel_range().unwrap_or(0..0);
    let mut v: Vec<f64> = w.alpha().iter().chain(w.beta()).copied().collect();
    let is_pixel = |i: usize| pix.contains(&(i % n.max(1)));

    for _ in 0..10 {
        for (i, x) in v.iter_mut().enumerate() {
            *x = if !x.is_finite() {
                0.0
            } else if is_pixel(i) {
                x.clamp(floor, 1.0)
            } else {
                x.max(0.0)
            };
        }
        let total: f64 = v.iter().sum();
        if (total - 1.0).abs() <= 1e-12 {
            break;
        }
        let shrinking = total > 1.0;
        let pinned = |i: usize, x: f64| is_pixel(i) && if shrinking { x <= floor } else { x >= 1.0 };
        let (mut fixed, mut free) = (0.0, 0.0);
        let mut free_count = 0usize;
        for (i, &x) in v.iter().enumerate() {
            if pinned(i, x) {
                fixed += x;
            } else {
                free += x;
                free_count += 1;
            }
        }
        let target = 1.0 - fixed;
        if free_count == 0 || target < 0.0 {
            break;
        }
        if free > 0.0 {
            let scale = target / free;
            for (i, x) in v.iter_mut().enumerate() {
                if !pinned(i, *x) {
                    *x *= scale;
                }
            }
        } else {
            let share = target / free_count as f64;
            for (i, x) in v.iter_mut().enumerate() {
                if !pinned(i, *x) {
                    *x = share;
                }
            }
        }
    }
    let beta = v.split_off(n);
    WeightSet::from_raw(layout, v, beta).with_constants(w.c1(), w.c2()).expect("constants were valid")
}

/// Adam on a flat parameter vector.
#[derive(Clone, Debug)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    pub fn new(len: usize, beta1: f64, beta2: f64, eps: f64) -> Self {
        Adam {
            beta1,
            beta2,
            eps,
            m: vec![0.0; len],
            v: vec![0.0; len],
            t: 0,
        }
    }

    pub fn step(&mut self, params: &mut [f64], grad: &[f64], lr: f64) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        for (((p, &g), m), v) in params.iter_mut().zip(grad).zip(&mut self.m).zip(&mut self.v) {
            *m = self.beta1 * *m + (1.0 - self.beta1) * g;
            *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
            *p -= lr * (*m / c1) / ((*v / c2).sqrt() + self.eps);
        }
    }
}
