//! Gradient descent on the input image: texture synthesis by matching
//! channel means, and recovery of a reference by minimizing a measure.

mod measure;

pub use measure::{DistsMeasure, Measure, MseMeasure, SsimMeasure};

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::backbone::NetworkGraph;
use crate::error::{Error, Result};
use crate::image::Image;
use crate::tensor::{Tape, Tensor3};

pub const STAGE_COUNT: usize = 6;

/// Which stages' channel means take part in the synthesis objective.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct StageMask([bool; STAGE_COUNT]);

impl StageMask {
    pub fn all() -> Self {
        StageMask([true; STAGE_COUNT])
    }

    pub fn only(stage: usize) -> Result<Self> {
        Self::from_stages(&[stage])
    }

    /// Stages `0..=last`.
    pub fn up_to(last: usize) -> Result<Self> {
        Self::from_stages(&(0..=last).collect::<Vec<_>>())
    }

    pub fn from_stages(stages: &[usize]) -> Result<Self> {
        let mut m = [false; STAGE_COUNT];
        for &s in stages {
            if s >= STAGE_COUNT {
                return Err(Error::invalid(format!("stage {s} does not exist")));
            }
            m[s] = true;
        }
        if !m.iter().any(|&b| b) {
            return Err(Error::invalid("stage mask selects no stage"));
        }
        Ok(StageMask(m))
    }

    pub fn contains(&self, stage: usize) -> bool {
        self.0.get(stage).copied().unwrap_or(false)
    }

    pub fn stages(&self) -> impl Iterator<Item = usize> + '_ {
        (0..STAGE_COUNT).filter(|&s| self.0[s])
    }

    pub fn deepest(&self) -> usize {
        self.stages().last().expect("mask is nonempty")
    }
}

/// `all`, a single stage (`3`), a list (`0,2,5`) or a range (`0-3`).
impl FromStr for StageMask {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        if s.eq_ignore_ascii_case("all") {
            return Ok(Self::all());
        }
        let parse = |t: &str| {
            t.trim()
                .parse::<usize>()
                .map_err(|_| Error::invalid(format!("bad stage `{t}` in mask `{s}`")))
        };
        let mut stages = Vec::new();
        for part in s.split(',') {
            match part.split_once('-') {
                Some((a, b)) => stages.extend(parse(a)?..=parse(b)?),
                None => stages.push(parse(part)?),
            }
        }
        Self::from_stages(&stages)
    }
}

impl fmt::Display for StageMask {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self.stages().map(|s| s.to_string()).collect();
        f.write_str(&parts.join(","))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Optimizer {
    /// Fixed step; a step that raises the objective is undone and the step
    /// halved.
    GradientDescent,
    /// Adam on pixels with a fixed learning rate; every step is accepted.
    Adam,
}

impl FromStr for Optimizer {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gd" => Ok(Optimizer::GradientDescent),
            "adam" => Ok(Optimizer::Adam),
            _ => Err(Error::invalid(format!("unknown optimizer `{s}` (gd, adam)"))),
        }
    }
}

/// Settings shared by synthesis and recovery.
#[derive(Clone, Debug, PartialEq)]
pub struct DescentConfig {
    pub optimizer: Optimizer,
    pub step: f64,
    pub max_iters: usize,
    /// Stop once the objective changed by less than this fraction over
    /// `window` iterations.
    pub rel_tol: f64,
    pub window: usize,
    /// Stop as soon as the objective is at or below this value.
    pub abs_tol: f64,
    /// Gradient descent only: undo a step that raises the objective and
    /// halve the step size.
    pub halve_on_increase: bool,
}

impl Default for DescentConfig {
    fn default() -> Self {
        DescentConfig {
            optimizer: Optimizer::Adam,
            step: 0.01,
            max_iters: 2000,
            rel_tol: 1e-6,
            window: 100,
            abs_tol: 0.0,
            halve_on_increase: true,
        }
    }
}

impl DescentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_iters == 0 || self.window == 0 {
            return Err(Error::invalid("iteration budget and window must be at least 1"));
        }
        if !(self.step.is_finite() && self.step > 0.0) {
            return Err(Error::invalid("step must be positive"));
        }
        Ok(())
    }
}

/// Result of a descent run. `trace[0]` is the objective at the initial
/// image, then one entry per iteration.
#[derive(Clone, Debug)]
pub struct DescentOutcome {
    /// The best iterate.
    pub image: Image,
    /// Objective at `image`.
    pub value: f64,
    pub trace: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
}

impl DescentOutcome {
    pub fn initial(&self) -> f64 {
        self.trace[0]
    }

    pub fn final_value(&self) -> f64 {
        *self.trace.last().expect("trace is never empty")
    }
}

/// Minimizes `objective` over images with pixels in `[0, 1]`.
///
/// Returns the best iterate found. A non-finite objective or gradient
/// aborts with [`Error::Diverged`] carrying the last finite iterate.
pub fn descend<F>(init: Image, cfg: &DescentConfig, mut objective: F) -> Result<DescentOutcome>
where
    F: FnMut(&Image) -> Result<(f64, Image)>,
{
    cfg.validate()?;
    let mut y = init;
    y.clamp01();
    let (mut f, mut g) = objective(&y)?;
    if !f.is_finite() || !g.tensor().all_finite() {
        return Err(Error::Diverged {
            iteration: 0,
            last_stable: Box::new(y),
        });
    }
    let mut trace = vec![f];
    if f <= cfg.abs_tol || g.tensor().max_abs() == 0.0 {
        return Ok(DescentOutcome {
            image: y,
            value: f,
            trace,
            iterations: 1,
            converged: true,
        });
    }

    let len = y.data().len();
    let (mut m, mut v) = (vec![0.0f64; len], vec![0.0f64; len]);
    let (b1, b2, eps) = (0.9f64, 0.999f64, 1e-8f64);
    let mut step = cfg.step;
    let mut best = (f, y.clone());
    let mut converged = false;
    let mut iterations = 0;

    for it in 1..=cfg.max_iters {
        iterations = it;
        let mut cand = y.clone();
        match cfg.optimizer {
            Optimizer::GradientDescent => {
                for (p, &gv) in cand.data_mut().iter_mut().zip(g.data()) {
                    *p -= (step * gv as f64) as f32;
                }
            }
            Optimizer::Adam => {
                let c1 = 1.0 - b1.powi(it as i32);
                let c2 = 1.0 - b2.powi(it as i32);
                for (((p, &gv), mm), vv) in cand.data_mut().iter_mut().zip(g.data()).zip(&mut m).zip(&mut v) {
                    let gv = gv as f64;
                    *mm = b1 * *mm + (1.0 - b1) * gv;
                    *vv = b2 * *vv + (1.0 - b2) * gv * gv;
                    *p -= (step * (*mm / c1) / ((*vv / c2).sqrt() + eps)) as f32;
                }
            }
        }
        cand.clamp01();
        let (fc, gc) = objective(&cand)?;
        if !fc.is_finite() || !gc.tensor().all_finite() {
            return Err(Error::Diverged {
                iteration: it,
                last_stable: Box::new(y),
            });
        }
        let rejected = fc > f && cfg.optimizer == Optimizer::GradientDescent && cfg.halve_on_increase;
        if rejected {
            step *= 0.5;
        } else {
            y = cand;
            f = fc;
            g = gc;
        }
        if f < best.0 {
            best = (f, y.clone());
        }
        trace.push(f);
        if f <= cfg.abs_tol {
            converged = true;
            break;
        }
        if it >= cfg.window {
            let old = trace[it - cfg.window];
            if (old - f).abs() <= cfg.rel_tol * old.abs() {
                converged = true;
                break;
            }
        }
    }
    Ok(DescentOutcome {
        value: best.0,
        image: best.1,
        trace,
        iterations,
        converged,
    })
}

/// Per-stage channel means of a texture photograph.
#[derive(Clone, Debug, PartialEq)]
pub struct TextureTarget {
    pub stage_ids: Vec<usize>,
    pub means: Vec<Vec<f64>>,
}

impl TextureTarget {
    pub fn from_image(graph: &NetworkGraph, x: &Image) -> Result<Self> {
        let f = graph.extract_features(x)?;
        Ok(TextureTarget {
            means: f.stages.iter().map(|s| s.channel_means()).collect(),
            stage_ids: f.stage_ids,
        })
    }
}

/// `Σ_{masked stages} Σ_j (μ_j(x) − μ_j(y))²` and its gradient with respect
/// to the pixels of `y`.
pub fn texture_objective(
    graph: &NetworkGraph,
    target: &TextureTarget,
    y: &Image,
    mask: &StageMask,
) -> Result<(f64, Image)> {
    for s in mask.stages() {
        if !target.stage_ids.contains(&s) {
            return Err(Error::invalid(format!("stage {s} is not produced by this graph")));
        }
    }
    let mut tape = Tape::new();
    let input = tape.input(y.tensor().clone());
    let (stack, vars) = graph.extract_features_recorded_to(&mut tape, input, mask.deepest())?;
    let mut value = 0.0;
    let mut seeds = Vec::new();
    for ((stage, t), var) in stack.stages.iter().zip(&stack.stage_ids).zip(vars) {
        if !mask.contains(*t) {
            continue;
        }
        let k = target.stage_ids.iter().position(|s| s == t).expect("checked above");
        let want = &target.means[k];
        if want.len() != stage.channels() {
            return Err(Error::shape("texture target does not match the graph"));
        }
        let n = stage.plane_len() as f64;
        let mut seed = Tensor3::zeros(stage.channels(), stage.height(), stage.width());
        for (c, mu) in stage.channel_means().into_iter().enumerate() {
            let diff = mu - want[c];
            value += diff * diff;
            let gv = (2.0 * diff / n) as f32;
            seed.plane_mut(c).iter_mut().for_each(|v| *v = gv);
        }
        seeds.push((var, seed));
    }
    tape.scalar(value, seeds)?;
    let grad = tape.backward(1.0)?;
    Ok((value, Image::from_tensor(grad)?))
}

/// Where synthesis starts.
#[derive(Clone, Debug, PartialEq)]
pub enum Init {
    /// Uniform noise in `[0, 1]` from the configured seed.
    Noise,
    Image(Image),
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthesisConfig {
    pub mask: StageMask,
    pub descent: DescentConfig,
    pub seed: u64,
    pub init: Init,
    /// Output size; `None` keeps the texture's size.
    pub size: Option<(usize, usize)>,
}

impl Default for SynthesisConfig {
    fn default() -> Self {
        SynthesisConfig {
            mask: StageMask::all(),
            descent: DescentConfig::default(),
            seed: 0,
            init: Init::Noise,
            size: None,
        }
    }
}

pub fn noise_image(height: usize, width: usize, seed: u64) -> Image {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Image::from_fn(height, width, |_, _, _| rng.gen())
}

/// Synthesizes an image whose masked channel means match those of `x`.
pub fn synthesize(graph: &NetworkGraph, x: &Image, cfg: &SynthesisConfig) -> Result<DescentOutcome> {
    let target = TextureTarget::from_image(graph, x)?;
    let (h, w) = cfg.size.unwrap_or((x.height(), x.width()));
    let init = match &cfg.init {
        Init::Noise => noise_image(h, w, cfg.seed),
        Init::Image(img) => img.clone(),
    };
    descend(init, &cfg.descent, |y| texture_objective(graph, &target, y, &cfg.mask))
}

/// Drives `init` toward the minimizer of `measure` (the measure holds the
/// reference).
pub fn recover(measure: &dyn Measure, init: Image, cfg: &DescentConfig) -> Result<DescentOutcome> {
    descend(init, cfg, |y| measure.value_and_gradient(y))
}
