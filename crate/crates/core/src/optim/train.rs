use std::borrow::Cow;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{project_weights, Adam};
use crate::backbone::{NetworkGraph, StageLayout};
use crate::error::{Error, Result};
use crate::image::Image;
use crate::metric::{similarity_profile, SimilarityProfile, WeightSet, C1, C2, STAGE0_FLOOR};
use crate::par;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    /// Weight of the texture-invariance term.
    pub lambda: f64,
    pub lr: f64,
    /// The learning rate halves every this many iterations.
    pub lr_halving_period: usize,
    pub total_iters: usize,
    pub batch_size: usize,
    pub stage0_floor: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    /// Evaluate the full training objective after every step. Costs one
    /// pass over every cached profile per iteration.
    pub track_objective: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lambda: 1.0,
            lr: 1e-4,
            lr_halving_period: 1000,
            total_iters: 5000,
            batch_size: 32,
            stage0_floor: STAGE0_FLOOR,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            track_objective: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [self.lr, self.stage0_floor, self.adam_eps]
            .iter()
            .all(|v| v.is_finite() && *v > 0.0);
        if !positive || self.lambda < 0.0 || !self.lambda.is_finite() {
            return Err(Error::invalid("learning rate, floor and epsilon must be positive, λ nonnegative"));
        }
        if self.lr_halving_period == 0 || self.total_iters == 0 || self.batch_size == 0 {
            return Err(Error::invalid("iteration counts and batch size must be positive"));
        }
        if self.stage0_floor >= 1.0 {
            return Err(Error::invalid("stage-0 floor must be below 1"));
        }
        if !(0.0..1.0).contains(&self.adam_beta1) || !(0.0..1.0).contains(&self.adam_beta2) {
            return Err(Error::invalid("Adam moment decays must be in [0, 1)"));
        }
        Ok(())
    }

    pub fn lr_at(&self, iteration: usize) -> f64 {
        self.lr * 0.5f64.powi((iteration / self.lr_halving_period) as i32)
    }
}

/// Similarity profiles of a list of image pairs, by index.
pub trait ProfileSource: Sync {
    fn len(&self) -> usize;

    fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn profile(&self, index: usize) -> Result<Cow<'_, SimilarityProfile>>;
}

/// Profiles computed once up front.
#[derive(Clone, Debug)]
pub struct CachedProfiles {
    profiles: Vec<SimilarityProfile>,
}

impl CachedProfiles {
    /// Extracts both images of every pair (in parallel across pairs) and
    /// keeps only the resulting profiles.
    pub fn build(graph: &NetworkGraph, pairs: &[(Image, Image)]) -> Result<Self> {
        let profiles = par::try_map_indexed(pairs.len(), |i| pair_profile(graph, &pairs[i]))?;
        Ok(CachedProfiles { profiles })
    }

    /// Like [`CachedProfiles::build`] but loads pair `i` on demand, so only
    /// the pairs in flight are held in memory.
    pub fn build_with<F>(graph: &NetworkGraph, n: usize, load: F) -> Result<Self>
    where
        F: Fn(usize) -> Result<(Image, Image)> + Sync,
    {
        let profiles = par::try_map_indexed(n, |i| pair_profile(graph, &load(i)?))?;
        Ok(CachedProfiles { profiles })
    }

    pub fn from_profiles(profiles: Vec<SimilarityProfile>) -> Self {
        CachedProfiles { profiles }
    }

    pub fn profiles(&self) -> &[SimilarityProfile] {
        &self.profiles
    }
}

impl ProfileSource for CachedProfiles {
    fn len(&self) -> usize {
        self.profiles.len()
    }

    fn profile(&self, index: usize) -> Result<Cow<'_, SimilarityProfile>> {
        Ok(Cow::Borrowed(&self.profiles[index]))
    }
}

/// Runs the backbone on every request. Only useful to check that caching
/// does not change training.
pub struct RecomputedProfiles<'a> {
    pub graph: &'a NetworkGraph,
    pub pairs: &'a [(Image, Image)],
}

impl ProfileSource for RecomputedProfiles<'_> {
    fn len(&self) -> usize {
        self.pairs.len()
    }

    fn profile(&self, index: usize) -> Result<Cow<'_, SimilarityProfile>> {
        Ok(Cow::Owned(pair_profile(self.graph, &self.pairs[index])?))
    }
}

fn pair_profile(graph: &NetworkGraph, pair: &(Image, Image)) -> Result<SimilarityProfile> {
    let fx = graph.extract_features(&pair.0)?;
    let fy = graph.extract_features(&pair.1)?;
    similarity_profile(&fx, &fy, C1, C2)
}

/// One row of the training trace.
#[derive(Clone, Debug, PartialEq)]
pub struct TraceRow {
    pub iteration: usize,
    pub lr: f64,
    /// `mean E1 + λ mean E2` on the minibatch, before the step.
    pub batch_loss: f64,
    /// The same objective over every training pair, after the step and
    /// projection. Present when [`TrainConfig::track_objective`] is set.
    pub objective: Option<f64>,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub weights: WeightSet,
    pub trace: Vec<TraceRow>,
}

/// Index stream over reshuffled epochs, each index once per epoch.
struct EpochSampler {
    order: Vec<usize>,
    pos: usize,
}

impl EpochSampler {
    fn new(n: usize) -> Self {
        EpochSampler {
            order: (0..n).collect(),
            pos: n,
        }
    }

    fn batch(&mut self, size: usize, rng: &mut impl Rng) -> Vec<usize> {
        (0..size)
            .map(|_| {
                if self.pos == self.order.len() {
                    self.order.shuffle(rng);
                    self.pos = 0;
                }
                self.pos += 1;
                self.order[self.pos - 1]
            })
            .collect()
    }
}

/// Minimizes `mean |D − q| + λ mean D(z1, z2)` over feasible weights with
/// Adam, projecting after every step.
///
/// `scores` are normalized quality scores aligned with `quality`. Training
/// starts from uniform weights projected onto the feasible set.
pub fn train(
    quality: &dyn ProfileSource,
    scores: &[f64],
    texture: &dyn ProfileSource,
    layout: &StageLayout,
    cfg: &TrainConfig,
    seed: u64,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if quality.is_empty() {
        return Err(Error::Ingestion("no quality pairs to train on".into()));
    }
    if scores.len() != quality.len() {
        return Err(Error::Ingestion(format!(
            "{} scores for {} quality pairs",
            scores.len(),
            quality.len()
        )));
    }
    if let Some(q) = scores.iter().find(|q| !(0.0..=1.0).contains(*q)) {
        return Err(Error::Ingestion(format!("score {q} is outside [0, 1]")));
    }
    if cfg.lambda > 0.0 && texture.is_empty() {
        return Err(Error::Ingestion("no texture pairs for a positive λ".into()));
    }

    let n = layout.total_channels();
    let mut w = project_weights(&WeightSet::uniform(layout.clone()), cfg.stage0_floor);
    let mut adam = Adam::new(2 * n, cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut q_sampler = EpochSampler::new(quality.len());
    let mut t_sampler = EpochSampler::new(texture.len());
    let mut trace = Vec::with_capacity(cfg.total_iters);

    for it in 0..cfg.total_iters {
        let mut grad = vec![0.0; 2 * n];
        let qb = q_sampler.batch(cfg.batch_size, &mut rng);
        let mut e1 = 0.0;
        for &i in &qb {
            let p = quality.profile(i)?;
            let diff = p.distance(&w)? - scores[i];
            e1 += diff.abs();
            let sign = if diff > 0.0 {
                1.0
            } else if diff < 0.0 {
                -1.0
            } else {
                0.0
            };
            accumulate(&mut grad, &p, sign / qb.len() as f64);
        }
        let mut loss = e1 / qb.len() as f64;
        if cfg.lambda > 0.0 {
            let tb = t_sampler.batch(cfg.batch_size, &mut rng);
            let mut e2 = 0.0;
            for &i in &tb {
                let p = texture.profile(i)?;
                e2 += p.distance(&w)?;
                accumulate(&mut grad, &p, cfg.lambda / tb.len() as f64);
            }
            loss += cfg.lambda * e2 / tb.len() as f64;
        }

        // Feasible moves keep Σ(α + β) fixed, so only the gradient's
        // component inside the simplex matters. Without this, Adam's
        // per-coordinate normalization turns a same-signed gradient into a
        // uniform shift that the projection then undoes.
        let mean = grad.iter().sum::<f64>() / grad.len() as f64;
        grad.iter_mut().for_each(|g| *g -= mean);

        let lr = cfg.lr_at(it);
        let mut params: Vec<f64> = w.alpha().iter().chain(w.beta()).copied().collect();
        adam.step(&mut params, &grad, lr);
        let beta = params.split_off(n);
        w = project_weights(&WeightSet::from_raw(layout.clone(), params, beta), cfg.stage0_floor);

        let objective = if cfg.track_objective {
            Some(full_objective(quality, scores, texture, &w, cfg.lambda)?)
        } else {
            None
        };
        trace.push(TraceRow {
            iteration: it,
            lr,
            batch_loss: loss,
            objective,
        });
    }
    Ok(TrainOutcome { weights: w, trace })
}

fn accumulate(grad: &mut [f64], p: &SimilarityProfile, scale: f64) {
    let n = p.len();
    for (g, l) in grad[..n].iter_mut().zip(&p.l) {
        *g += scale * (1.0 - l);
    }
    for (g, s) in grad[n..].iter_mut().zip(&p.s) {
        *g += scale * (1.0 - s);
    }
}

fn full_objective(
    quality: &dyn ProfileSource,
    scores: &[f64],
    texture: &dyn ProfileSource,
    w: &WeightSet,
    lambda: f64,
) -> Result<f64> {
    let mut e1 = 0.0;
    for (i, q) in scores.iter().enumerate() {
        e1 += (quality.profile(i)?.distance(w)? - q).abs();
    }
    let mut total = e1 / scores.len() as f64;
    if lambda > 0.0 {
        let mut e2 = 0.0;
        for i in 0..texture.len() {
            e2 += texture.profile(i)?.distance(w)?;
        }
        total += lambda * e2 / texture.len() as f64;
    }
    Ok(total)
}

/// Linearly maps raw opinion scores onto `[0, 1]` as distances: when
/// `higher_is_better`, the best score maps to 0.
pub fn normalize_scores(raw: &[f64], higher_is_better: bool) -> Result<Vec<f64>> {
    if raw.iter().any(|v| !v.is_finite()) {
        return Err(Error::Ingestion("non-finite opinion score".into()));
    }
    let lo = raw.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = raw.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if raw.is_empty() || hi <= lo {
        return Err(Error::Ingestion("opinion scores need at least two distinct values".into()));
    }
    Ok(raw
        .iter()
        .map(|&v| {
            let t = (v - lo) / (hi - lo);
            if higher_is_better {
                1.0 - t
            } else {
                t
            }
        })
        .collect())
}

/// `pairs_per_texture` pairs of `crop × crop` patches, both patches of a
/// pair cut from the same texture at independent random positions.
pub fn texture_crop_pairs(
    textures: &[Image],
    crop: usize,
    pairs_per_texture: usize,
    rng: &mut impl Rng,
) -> Result<Vec<(Image, Image)>> {
    let mut out = Vec::with_capacity(textures.len() * pairs_per_texture);
    for t in textures {
        if t.height() < crop || t.width() < crop {
            return Err(Error::Ingestion(format!(
                "texture {}x{} is smaller than the {crop}x{crop} crop",
                t.height(),
                t.width()
            )));
        }
        for _ in 0..pairs_per_texture {
            let cut = |rng: &mut dyn rand::RngCore| {
                let top = rng.gen_range(0..=t.height() - crop);
                let left = rng.gen_range(0..=t.width() - crop);
                t.crop(top, left, crop, crop)
            };
            let a = cut(rng)?;
            let b = cut(rng)?;
            out.push((a, b));
        }
    }
    Ok(out)
}
