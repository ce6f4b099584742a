//! Texture/structure similarity of feature stacks and the weighted distance.

mod baseline;
mod weights;

pub use baseline::{mse, psnr, ssim_global, ssim_global_with_gradient, Psnr, SSIM_SIGMA, SSIM_WINDOW};
pub use weights::{WeightSet, STAGE0_FLOOR};

use crate::backbone::{FeatureStack, StageLayout};
use crate::error::{Error, Result};
use crate::par;
use crate::tensor::Tensor3;

/// Default stabilizing constants of the texture and structure terms.
pub const C1: f64 = 1e-6;
pub const C2: f64 = 1e-6;

/// Global statistics of one channel pair.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ChannelStats {
    pub mean_x: f64,
    pub mean_y: f64,
    pub var_x: f64,
    pub var_y: f64,
    pub cov: f64,
}

/// Population means, variances and covariance, accumulated in `f64`.
///
/// Variances and the covariance go through the same centered product loop,
/// so `channel_stats(a, a)` gives `cov == var_x == var_y` exactly and
/// swapping the arguments swaps the fields bit for bit.
pub fn channel_stats(a: &[f32], b: &[f32]) -> Result<ChannelStats> {
    if a.len() != b.len() {
        return Err(Error::shape(format!("channel lengths {} and {}", a.len(), b.len())));
    }
    if a.is_empty() {
        return Err(Error::shape("empty channel"));
    }
    let n = a.len() as f64;
    let mean = |v: &[f32]| v.iter().map(|&x| x as f64).sum::<f64>() / n;
    let (mean_x, mean_y) = (mean(a), mean(b));
    let (mut sxx, mut syy, mut sxy) = (0.0, 0.0, 0.0);
    for (&x, &y) in a.iter().zip(b) {
        let dx = x as f64 - mean_x;
        let dy = y as f64 - mean_y;
        sxx += dx * dx;
        syy += dy * dy;
        sxy += dx * dy;
    }
    Ok(ChannelStats {
        mean_x,
        mean_y,
        var_x: sxx / n,
        var_y: syy / n,
        cov: sxy / n,
    })
}

/// `(2 μx μy + c1) / (μx² + μy² + c1)`.
pub fn texture_sim(stats: &ChannelStats, c1: f64) -> f64 {
    let (mx, my) = (stats.mean_x, stats.mean_y);
    (2.0 * (mx * my) + c1) / (mx * mx + my * my + c1)
}

/// `(2 σxy + c2) / (σx² + σy² + c2)`.
pub fn structure_sim(stats: &ChannelStats, c2: f64) -> f64 {
    (2.0 * stats.cov + c2) / (stats.var_x + stats.var_y + c2)
}

/// Per-channel `l` and `s` of an image pair, flattened in stage order.
///
/// The distance is linear in the weights, so a profile is all that weight
/// training needs from an image pair.
#[derive(Clone, Debug, PartialEq)]
pub struct SimilarityProfile {
    pub layout: StageLayout,
    pub l: Vec<f64>,
    pub s: Vec<f64>,
}

impl SimilarityProfile {
    pub fn len(&self) -> usize {
        self.l.len()
    }

    pub fn is_empty(&self) -> bool {
        self.l.is_empty()
    }

    /// `D = Σ α(1 − l) + β(1 − s)`, which equals `1 − Σ(α l + β s)` on the
    /// simplex and is exactly zero when every `l` and `s` is one.
    pub fn distance(&self, w: &WeightSet) -> Result<f64> {
        self.check(w)?;
        Ok(self
            .l
            .iter()
            .zip(&self.s)
            .zip(w.alpha().iter().zip(w.beta()))
            .map(|((&l, &s), (&a, &b))| a * (1.0 - l) + b * (1.0 - s))
            .sum())
    }

    /// `∂D/∂α = 1 − l` and `∂D/∂β = 1 − s`.
    pub fn weight_gradient(&self) -> (Vec<f64>, Vec<f64>) {
        (
            self.l.iter().map(|l| 1.0 - l).collect(),
            self.s.iter().map(|s| 1.0 - s).collect(),
        )
    }

    fn check(&self, w: &WeightSet) -> Result<()> {
        if w.len() != self.len() {
            return Err(Error::shape(format!(
                "{} weights per term for {} channels",
                w.len(),
                self.len()
            )));
        }
        Ok(())
    }
}

fn check_stacks(fx: &FeatureStack, fy: &FeatureStack) -> Result<()> {
    if fx.stage_ids != fy.stage_ids || fx.stages.len() != fy.stages.len() {
        return Err(Error::shape("feature stacks come from different graphs"));
    }
    for (a, b) in fx.stages.iter().zip(&fy.stages) {
        if !a.same_shape(b) {
            return Err(Error::shape(format!("stage shapes {:?} and {:?}", a.shape(), b.shape())));
        }
    }
    Ok(())
}

/// Statistics of every channel pair, flattened in stage order.
pub fn stack_stats(fx: &FeatureStack, fy: &FeatureStack) -> Result<Vec<ChannelStats>> {
    check_stacks(fx, fy)?;
    let pairs: Vec<(&[f32], &[f32])> = fx
        .stages
        .iter()
        .zip(&fy.stages)
        .flat_map(|(a, b)| a.planes().zip(b.planes()))
        .collect();
    par::try_map_indexed(pairs.len(), |i| channel_stats(pairs[i].0, pairs[i].1))
}

pub fn similarity_profile(fx: &FeatureStack, fy: &FeatureStack, c1: f64, c2: f64) -> Result<SimilarityProfile> {
    let stats = stack_stats(fx, fy)?;
    Ok(SimilarityProfile {
        layout: fx.layout(),
        l: stats.iter().map(|st| texture_sim(st, c1)).collect(),
        s: stats.iter().map(|st| structure_sim(st, c2)).collect(),
    })
}

/// The weighted distance `D(x, y) ∈ [0, 2]`.
pub fn dists(fx: &FeatureStack, fy: &FeatureStack, w: &WeightSet) -> Result<f64> {
    if w.layout() != &fx.layout() {
        return Err(Error::shape("weight layout does not match the feature stack"));
    }
    similarity_profile(fx, fy, w.c1(), w.c2())?.distance(w)
}

/// `d = √D`, the form that satisfies the triangle inequality.
pub fn dists_metric(fx: &FeatureStack, fy: &FeatureStack, w: &WeightSet) -> Result<f64> {
    Ok(dists(fx, fy, w)?.max(0.0).sqrt())
}

/// `D(x, y)` and its gradient with respect to every stage tensor of `fy`.
pub fn dists_with_gradient(fx: &FeatureStack, fy: &FeatureStack, w: &WeightSet) -> Result<(f64, Vec<Tensor3>)> {
    let stats = stack_stats(fx, fy)?;
    let layout = fx.layout();
    if w.layout() != &layout {
        return Err(Error::shape("weight layout does not match the feature stack"));
    }
    let (c1, c2) = (w.c1(), w.c2());
    let mut d = 0.0;
    let mut grads = Vec::with_capacity(fy.stages.len());
    let mut flat = 0;
    for (sx, sy) in fx.stages.iter().zip(&fy.stages) {
        let n = sx.plane_len() as f64;
        let mut g = Tensor3::zeros(sy.channels(), sy.height(), sy.width());
        for c in 0..sy.channels() {
            let st = &stats[flat];
            let (alpha, beta) = (w.alpha()[flat], w.beta()[flat]);
            flat += 1;
            let l = texture_sim(st, c1);
            let s = structure_sim(st, c2);
            d += alpha * (1.0 - l) + beta * (1.0 - s);

            let (mx, my) = (st.mean_x, st.mean_y);
            let a = 2.0 * mx * my + c1;
            let b = mx * mx + my * my + c1;
            let dl_dmy = (2.0 * mx * b - a * 2.0 * my) / (b * b);
            let a_s = 2.0 * st.cov + c2;
            let b_s = st.var_x + st.var_y + c2;
            // dD/dy_k = −α dl/dy_k − β ds/dy_k
            let lum = -alpha * dl_dmy / n;
            let kx = -beta * 2.0 / (n * b_s);
            let ky = beta * a_s * 2.0 / (n * b_s * b_s);
            for ((gv, &xv), &yv) in g.plane_mut(c).iter_mut().zip(sx.plane(c)).zip(sy.plane(c)) {
                let dx = xv as f64 - mx;
                let dy = yv as f64 - my;
                *gv = (lum + kx * dx + ky * dy) as f32;
            }
        }
        grads.push(g);
    }
    Ok((d, grads))
}
