use crate::backbone::{FeatureStack, NetworkGraph};
use crate::error::Result;
use crate::image::Image;
use crate::metric::{self, WeightSet};
use crate::tensor::Tape;

/// A full-reference distance with a fixed reference, differentiable in the
/// test image.
pub trait Measure {
    fn name(&self) -> &str;

    fn value(&self, y: &Image) -> Result<f64> {
        Ok(self.value_and_gradient(y)?.0)
    }

    fn value_and_gradient(&self, y: &Image) -> Result<(f64, Image)>;
}

/// `D(x, y)` under a graph and weight set.
pub struct DistsMeasure<'a> {
    graph: &'a NetworkGraph,
    reference: FeatureStack,
    weights: WeightSet,
}

impl<'a> DistsMeasure<'a> {
    pub fn new(graph: &'a NetworkGraph, reference: &Image, weights: WeightSet) -> Result<Self> {
        Ok(DistsMeasure {
            graph,
            reference: graph.extract_features(reference)?,
            weights,
        })
    }
}

impl Measure for DistsMeasure<'_> {
    fn name(&self) -> &str {
        "dists"
    }

    fn value(&self, y: &Image) -> Result<f64> {
        metric::dists(&self.reference, &self.graph.extract_features(y)?, &self.weights)
    }

    fn value_and_gradient(&self, y: &Image) -> Result<(f64, Image)> {
        let mut tape = Tape::new();
        let input = tape.input(y.tensor().clone());
        let (fy, vars) = self.graph.extract_features_recorded(&mut tape, input)?;
        let (d, grads) = metric::dists_with_gradient(&self.reference, &fy, &self.weights)?;
        tape.scalar(d, vars.into_iter().zip(grads).collect())?;
        Ok((d, Image::from_tensor(tape.backward(1.0)?)?))
    }
}

/// Mean squared error, the quantity PSNR is a monotone function of.
pub struct MseMeasure {
    reference: Image,
}

impl MseMeasure {
    pub fn new(reference: Image) -> Self {
        MseMeasure { reference }
    }
}

impl Measure for MseMeasure {
    fn name(&self) -> &str {
        "mse"
    }

    fn value_and_gradient(&self, y: &Image) -> Result<(f64, Image)> {
        let v = metric::mse(&self.reference, y)?;
        let n = y.data().len() as f32;
        let g = Image::from_fn(y.height(), y.width(), |c, i, j| {
            2.0 * (y.get(c, i, j) - self.reference.get(c, i, j)) / n
        });
        Ok((v, g))
    }
}

/// `1 − SSIM(x, y)`.
pub struct SsimMeasure {
    reference: Image,
}

impl SsimMeasure {
    pub fn new(reference: Image) -> Self {
        SsimMeasure { reference }
    }
}

impl Measure for SsimMeasure {
    fn name(&self) -> &str {
        "ssim"
    }

    fn value_and_gradient(&self, y: &Image) -> Result<(f64, Image)> {
        let (s, g) = metric::ssim_global_with_gradient(&self.reference, y)?;
        let neg = g.tensor().map(|v| -v);
        Ok((1.0 - s, Image::from_tensor(neg)?))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::{GraphOptions, VggLayout};
    use crate::synthesis::{noise_image, recover, DescentConfig};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn dists_value_matches_gradient_path_and_reference_is_fixed_point() {
        let g = NetworkGraph::random(VggLayout::narrowed(16), GraphOptions::default(), 2).unwrap();
        let x = noise_image(16, 16, 1);
        let w = WeightSet::random_feasible(g.stage_layout(), &mut ChaCha8Rng::seed_from_u64(3));
        let m = DistsMeasure::new(&g, &x, w).unwrap();
        let y = noise_image(16, 16, 2);
        assert_eq!(m.value(&y).unwrap(), m.value_and_gradient(&y).unwrap().0);
        let out = recover(&m, x.clone(), &DescentConfig::default()).unwrap();
        assert_eq!(out.iterations, 1);
        assert_eq!(out.trace, vec![0.0]);
        assert_eq!(out.image, x);
    }

    #[test]
    fn ssim_measure_is_zero_at_reference() {
        let x = noise_image(12, 12, 4);
        let m = SsimMeasure::new(x.clone());
        assert!(m.value(&x).unwrap().abs() < 1e-12);
    }
}
