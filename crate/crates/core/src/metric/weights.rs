use rand::Rng;

use super::{C1, C2};
use crate::backbone::{StageLayout, WeightFile, WeightRecord};
use crate::error::{Error, Result};

/// Lower bound on every stage-0 `α` and `β` once projected.
pub const STAGE0_FLOOR: f64 = 0.02;

const SUM_TOLERANCE: f64 = 1e-6;

/// Per-channel texture weights `α` and structure weights `β`.
#[derive(Clone, Debug, PartialEq)]
pub struct WeightSet {
    layout: StageLayout,
    alpha: Vec<f64>,
    beta: Vec<f64>,
    c1: f64,
    c2: f64,
}

impl WeightSet {
    /// Checks lengths, non-negativity and `Σ(α + β) = 1`. The stage-0 floor
    /// is not required here; see [`WeightSet::is_feasible`].
    pub fn new(layout: StageLayout, alpha: Vec<f64>, beta: Vec<f64>) -> Result<Self> {
        let n = layout.total_channels();
        if alpha.len() != n || beta.len() != n {
            return Err(Error::shape(format!(
                "{n} channels need {n} α and β values, got {} and {}",
                alpha.len(),
                beta.len()
            )));
        }
        if let Some(v) = alpha.iter().chain(&beta).find(|v| !v.is_finite() || **v < 0.0) {
            return Err(Error::invalid(format!("weights must be finite and nonnegative, found {v}")));
        }
        let total: f64 = alpha.iter().chain(&beta).sum();
        if (total - 1.0).abs() > SUM_TOLERANCE {
            return Err(Error::invalid(format!("weights sum to {total}, expected 1")));
        }
        Ok(Self::from_raw(layout, alpha, beta))
    }

    /// No validation; used by the projection, which establishes the
    /// invariants itself.
    pub(crate) fn from_raw(layout: StageLayout, alpha: Vec<f64>, beta: Vec<f64>) -> Self {
        WeightSet {
            layout,
            alpha,
            beta,
            c1: C1,
            c2: C2,
        }
    }

    /// Every `α` and `β` equal to `1 / (2N)`.
    pub fn uniform(layout: StageLayout) -> Self {
        let n = layout.total_channels();
        let v = 1.0 / (2 * n) as f64;
        Self::from_raw(layout, vec![v; n], vec![v; n])
    }

    /// A random point of the feasible set: stage-0 entries sit at the floor
    /// plus a random share, the remaining mass is spread by normalized
    /// exponential draws.
    pub fn random_feasible(layout: StageLayout, rng: &mut impl Rng) -> Self {
        let n = layout.total_channels();
        let pix = layout.pixel_range();
        let floor_mass = pix.as_ref().map_or(0.0, |r| 2.0 * r.len() as f64 * STAGE0_FLOOR);
        let mut draw = || -> f64 { -(1.0 - rng.gen::<f64>()).ln() };
        let mut alpha: Vec<f64> = (0..n).map(|_| draw()).collect();
        let mut beta: Vec<f64> = (0..n).map(|_| draw()).collect();
        let total: f64 = alpha.iter().chain(&beta).sum();
        let scale = (1.0 - floor_mass) / total;
        alpha.iter_mut().chain(beta.iter_mut()).for_each(|v| *v *= scale);
        if let Some(r) = pix {
            for i in r {
                alpha[i] += STAGE0_FLOOR;
                beta[i] += STAGE0_FLOOR;
            }
        }
        Self::from_raw(layout, alpha, beta)
    }

    pub fn with_constants(mut self, c1: f64, c2: f64) -> Result<Self> {
        if !(c1 > 0.0 && c2 > 0.0) {
            return Err(Error::invalid("c1 and c2 must be positive"));
        }
        self.c1 = c1;
        self.c2 = c2;
        Ok(self)
    }

    pub fn layout(&self) -> &StageLayout {
        &self.layout
    }

    pub fn len(&self) -> usize {
        self.alpha.len()
    }

    pub fn is_empty(&self) -> bool {
        self.alpha.is_empty()
    }

    pub fn alpha(&self) -> &[f64] {
        &self.alpha
    }

    pub fn beta(&self) -> &[f64] {
        &self.beta
    }

    pub fn c1(&self) -> f64 {
        self.c1
    }

    pub fn c2(&self) -> f64 {
        self.c2
    }

    pub fn total(&self) -> f64 {
        self.alpha.iter().chain(&self.beta).sum()
    }

    /// Nonnegative, on the simplex, and (when stage 0 is present) every
    /// stage-0 entry in `[floor, 1]`.
    pub fn is_feasible(&self, floor: f64) -> bool {
        let nonneg = self.alpha.iter().chain(&self.beta).all(|&v| v >= 0.0);
        let simplex = (self.total() - 1.0).abs() <= SUM_TOLERANCE;
        let floored = self.layout.pixel_range().map_or(true, |r| {
            r.into_iter()
                .all(|i| (floor..=1.0).contains(&self.alpha[i]) && (floor..=1.0).contains(&self.beta[i]))
        });
        nonneg && simplex && floored
    }

    /// Stores `α` and `β` as two rank-1 records named `alpha` and `beta`.
    pub fn to_weight_file(&self) -> WeightFile {
        let rec = |name: &str, v: &[f64]| WeightRecord {
            name: name.into(),
            dims: vec![v.len() as u32],
            data: v.iter().map(|&x| x as f32).collect(),
        };
        WeightFile::new(vec![rec("alpha", &self.alpha), rec("beta", &self.beta)])
    }

    pub fn from_weight_file(file: &WeightFile, layout: StageLayout) -> Result<Self> {
        let n = layout.total_channels();
        let get = |name: &str| -> Result<Vec<f64>> {
            let r = file.get(name).ok_or_else(|| Error::IncompatibleWeights {
                layer: name.into(),
                reason: "record missing".into(),
            })?;
            if r.dims != [n as u32] {
                return Err(Error::IncompatibleWeights {
                    layer: name.into(),
                    reason: format!("shape {:?}, expected [{n}]", r.dims),
                });
            }
            Ok(r.data.iter().map(|&v| v as f64).collect())
        };
        let (alpha, beta) = (get("alpha")?, get("beta")?);
        Self::new(layout, alpha, beta)
    }
}
