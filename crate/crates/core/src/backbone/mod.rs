//! VGG16 with ℓ2 pooling, and the six-stage representation built on it.
//!
//! Stage 0 is the input image itself; stages 1–5 are the rectified responses
//! of `conv1_2`, `conv2_2`, `conv3_3`, `conv4_3` and `conv5_3`.

mod weights;

use std::path::Path;
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

pub use weights::{WeightFile, WeightRecord, MAGIC, VERSION};

use crate::error::{Error, Result};
use crate::image::Image;
use crate::tensor::{self, ConvSpec, PoolSpec, Tape, Tensor3, Var};

/// ImageNet channel statistics the imported VGG weights were trained with.
pub const IMAGENET_MEAN: [f32; 3] = [0.485, 0.456, 0.406];
pub const IMAGENET_STD: [f32; 3] = [0.229, 0.224, 0.225];

/// Shorter side after [`preprocess`].
pub const PREPROCESS_MIN_SIDE: usize = 256;

/// Blur width of the ℓ2 pooling layers.
pub const POOL_WINDOW: usize = 5;

/// Conv layers per VGG16 block.
const BLOCK_DEPTHS: [usize; 5] = [2, 2, 3, 3, 3];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum Pooling {
    #[default]
    L2,
    Max,
}

/// Graph-construction toggles that express the ablation variants.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct GraphOptions {
    pub pooling: Pooling,
    /// Whether the raw image is part of the representation.
    pub include_stage0: bool,
}

impl Default for GraphOptions {
    fn default() -> Self {
        GraphOptions {
            pooling: Pooling::L2,
            include_stage0: true,
        }
    }
}

/// Channel widths of the five VGG blocks.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct VggLayout {
    pub widths: [usize; 5],
}

impl VggLayout {
    pub const VGG16: VggLayout = VggLayout {
        widths: [64, 128, 256, 512, 512],
    };

    /// VGG16 with every block narrowed by `divisor` (at least one channel).
    pub fn narrowed(divisor: usize) -> Self {
        let d = divisor.max(1);
        VggLayout {
            widths: Self::VGG16.widths.map(|w| (w / d).max(1)),
        }
    }

    /// Stages produced by a graph with this layout.
    pub fn stage_layout(&self, include_stage0: bool) -> StageLayout {
        let mut stage_ids = Vec::with_capacity(6);
        let mut channels = Vec::with_capacity(6);
        if include_stage0 {
            stage_ids.push(0);
            channels.push(3);
        }
        for (i, &w) in self.widths.iter().enumerate() {
            stage_ids.push(i + 1);
            channels.push(w);
        }
        StageLayout { stage_ids, channels }
    }

    /// `(name, in_channels, out_channels)` for every conv layer in order.
    pub fn conv_layers(&self) -> Vec<(String, usize, usize)> {
        let mut layers = Vec::with_capacity(13);
        let mut cin = 3;
        for (b, (&depth, &width)) in BLOCK_DEPTHS.iter().zip(&self.widths).enumerate() {
            for l in 0..depth {
                layers.push((format!("conv{}_{}", b + 1, l + 1), cin, width));
                cin = width;
            }
        }
        layers
    }
}

/// Stage indices and channel counts of a representation.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct StageLayout {
    pub stage_ids: Vec<usize>,
    pub channels: Vec<usize>,
}

impl StageLayout {
    pub fn total_channels(&self) -> usize {
        self.channels.iter().sum()
    }

    /// Flat channel range of each stage.
    pub fn ranges(&self) -> Vec<std::ops::Range<usize>> {
        let mut start = 0;
        self.channels
            .iter()
            .map(|&n| {
                let r = start..start + n;
                start += n;
                r
            })
            .collect()
    }

    /// Flat range of stage 0 (raw pixels), if present.
    pub fn pixel_range(&self) -> Option<std::ops::Range<usize>> {
        self.stage_ids
            .iter()
            .position(|&s| s == 0)
            .map(|i| self.ranges()[i].clone())
    }
}

#[derive(Clone, Debug)]
enum Layer {
    Conv(Arc<ConvSpec>),
    Relu,
    Pool,
    Tap(usize),
}

/// The feature extractor. Immutable once built.
#[derive(Clone, Debug)]
pub struct NetworkGraph {
    layout: VggLayout,
    options: GraphOptions,
    convs: Vec<(String, Arc<ConvSpec>)>,
    layers: Vec<Layer>,
    pool: Arc<PoolSpec>,
}

impl PartialEq for NetworkGraph {
    fn eq(&self, other: &Self) -> bool {
        self.layout == other.layout
            && self.options == other.options
            && self.pool == other.pool
            && self.convs.len() == other.convs.len()
            && self
                .convs
                .iter()
                .zip(&other.convs)
                .all(|((a, x), (b, y))| a == b && x == y)
    }
}

/// The representation `f(x)`: one tensor per stage.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureStack {
    pub stages: Vec<Tensor3>,
    pub stage_ids: Vec<usize>,
}

impl FeatureStack {
    pub fn layout(&self) -> StageLayout {
        StageLayout {
            stage_ids: self.stage_ids.clone(),
            channels: self.stages.iter().map(|s| s.channels()).collect(),
        }
    }

    pub fn total_channels(&self) -> usize {
        self.stages.iter().map(|s| s.channels()).sum()
    }

    /// Spatial means of every channel, flattened in stage order.
    pub fn channel_means(&self) -> Vec<f64> {
        self.stages.iter().flat_map(|s| s.channel_means()).collect()
    }
}

impl NetworkGraph {
    /// Assembles the graph from named convolution layers, checked against
    /// `layout`.
    fn assemble(layout: VggLayout, options: GraphOptions, convs: Vec<(String, Arc<ConvSpec>)>) -> Result<Self> {
        let expected = layout.conv_layers();
        if convs.len() != expected.len() {
            return Err(Error::shape(format!("expected {} conv layers", expected.len())));
        }
        let mut layers = Vec::new();
        let mut idx = 0;
        for (b, &depth) in BLOCK_DEPTHS.iter().enumerate() {
            for _ in 0..depth {
                let (name, cin, cout) = &expected[idx];
                let spec = &convs[idx].1;
                if &convs[idx].0 != name || spec.in_channels() != *cin || spec.out_channels() != *cout {
                    return Err(Error::IncompatibleWeights {
                        layer: convs[idx].0.clone(),
                        reason: format!("expected {name} with {cout}x{cin}x3x3"),
                    });
                }
                layers.push(Layer::Conv(spec.clone()));
                layers.push(Layer::Relu);
                idx += 1;
            }
            layers.push(Layer::Tap(b + 1));
            if b < 4 {
                layers.push(Layer::Pool);
            }
        }
        Ok(NetworkGraph {
            layout,
            options,
            convs,
            layers,
            pool: Arc::new(PoolSpec::hanning(POOL_WINDOW, 2)?),
        })
    }

    /// Builds VGG16 from a parsed `DWTS` file.
    pub fn from_weight_file(file: &WeightFile, options: GraphOptions) -> Result<Self> {
        Self::from_weight_file_with_layout(file, VggLayout::VGG16, options)
    }

    /// Like [`NetworkGraph::from_weight_file`] for a narrowed layout; every
    /// record must match `layout` exactly.
    pub fn from_weight_file_with_layout(file: &WeightFile, layout: VggLayout, options: GraphOptions) -> Result<Self> {
        let expected = layout.conv_layers();
        let mut convs = Vec::with_capacity(expected.len());
        for (name, cin, cout) in &expected {
            let wname = format!("{name}.weight");
            let bname = format!("{name}.bias");
            let w = file.get(&wname).ok_or_else(|| Error::IncompatibleWeights {
                layer: wname.clone(),
                reason: "record missing".into(),
            })?;
            let b = file.get(&bname).ok_or_else(|| Error::IncompatibleWeights {
                layer: bname.clone(),
                reason: "record missing".into(),
            })?;
            let want_w = [*cout as u32, *cin as u32, 3, 3];
            if w.dims != want_w {
                return Err(Error::IncompatibleWeights {
                    layer: wname,
                    reason: format!("shape {:?}, expected {:?}", w.dims, want_w),
                });
            }
            if b.dims != [*cout as u32] {
                return Err(Error::IncompatibleWeights {
                    layer: bname,
                    reason: format!("shape {:?}, expected [{cout}]", b.dims),
                });
            }
            let spec = ConvSpec::same(*cin, *cout, 3, w.data.clone(), b.data.clone())?;
            convs.push((name.clone(), Arc::new(spec)));
        }
        let known: std::collections::HashSet<String> = expected
            .iter()
            .flat_map(|(n, _, _)| [format!("{n}.weight"), format!("{n}.bias")])
            .collect();
        if let Some(extra) = file.records.iter().find(|r| !known.contains(&r.name)) {
            return Err(Error::IncompatibleWeights {
                layer: extra.name.clone(),
                reason: "unexpected record".into(),
            });
        }
        Self::assemble(layout, options, convs)
    }

    /// Reads a `DWTS` file holding the 13 VGG16 convolution layers.
    pub fn load_weights(path: impl AsRef<Path>, options: GraphOptions) -> Result<Self> {
        Self::from_weight_file(&WeightFile::read(path)?, options)
    }

    pub fn load_weights_with_layout(path: impl AsRef<Path>, layout: VggLayout, options: GraphOptions) -> Result<Self> {
        Self::from_weight_file_with_layout(&WeightFile::read(path)?, layout, options)
    }

    /// A graph with fixed random (He-normal) kernels and zero bias.
    pub fn random(layout: VggLayout, options: GraphOptions, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let convs = layout
            .conv_layers()
            .into_iter()
            .map(|(name, cin, cout)| {
                let normal = Normal::new(0.0f32, (2.0 / (cin * 9) as f32).sqrt()).unwrap();
                let w = (0..cout * cin * 9).map(|_| normal.sample(&mut rng)).collect();
                let spec = ConvSpec::same(cin, cout, 3, w, vec![0.0; cout])?;
                Ok((name, Arc::new(spec)))
            })
            .collect::<Result<Vec<_>>>()?;
        Self::assemble(layout, options, convs)
    }

    /// The same kernels with different ablation toggles.
    pub fn with_options(&self, options: GraphOptions) -> Self {
        NetworkGraph {
            options,
            ..self.clone()
        }
    }

    pub fn to_weight_file(&self) -> WeightFile {
        let mut records = Vec::with_capacity(2 * self.convs.len());
        for (name, spec) in &self.convs {
            let dims = vec![spec.out_channels() as u32, spec.in_channels() as u32, 3, 3];
            records.push(WeightRecord {
                name: format!("{name}.weight"),
                dims,
                data: spec.weights().to_vec(),
            });
            records.push(WeightRecord {
                name: format!("{name}.bias"),
                dims: vec![spec.out_channels() as u32],
                data: spec.bias().to_vec(),
            });
        }
        WeightFile::new(records)
    }

    pub fn options(&self) -> GraphOptions {
        self.options
    }

    pub fn layout(&self) -> VggLayout {
        self.layout
    }

    pub fn convs(&self) -> impl Iterator<Item = (&str, &ConvSpec)> {
        self.convs.iter().map(|(n, s)| (n.as_str(), s.as_ref()))
    }

    pub fn conv_count(&self) -> usize {
        self.convs.len()
    }

    pub fn pool(&self) -> &PoolSpec {
        &self.pool
    }

    /// Stage layout of every [`FeatureStack`] this graph produces.
    pub fn stage_layout(&self) -> StageLayout {
        self.layout.stage_layout(self.options.include_stage0)
    }

    /// Computes `f(x)`.
    pub fn extract_features(&self, image: &Image) -> Result<FeatureStack> {
        self.extract_features_to(image, 5)
    }

    /// Computes `f(x)` up to and including stage `last_stage`.
    pub fn extract_features_to(&self, image: &Image, last_stage: usize) -> Result<FeatureStack> {
        let mut stack = self.empty_stack(image);
        if last_stage == 0 && self.options.include_stage0 {
            return Ok(stack);
        }
        let mut x = standardize(image.tensor());
        for layer in &self.layers {
            x = match layer {
                Layer::Conv(spec) => tensor::conv2d(&x, spec)?,
                Layer::Relu => {
                    x.data_mut().iter_mut().for_each(|v| *v = v.max(0.0));
                    x
                }
                Layer::Pool => match self.options.pooling {
                    Pooling::L2 => tensor::l2pool(&x, &self.pool),
                    Pooling::Max => tensor::max_pool(&x),
                },
                Layer::Tap(stage) => {
                    stack.stages.push(x.clone());
                    stack.stage_ids.push(*stage);
                    if *stage >= last_stage {
                        break;
                    }
                    x
                }
            };
        }
        Ok(stack)
    }

    /// Records `f(x)` on `tape`, with `input` holding the raw image.
    /// Returns the stack and the tape variable of every stage.
    pub fn extract_features_recorded(&self, tape: &mut Tape, input: Var) -> Result<(FeatureStack, Vec<Var>)> {
        self.extract_features_recorded_to(tape, input, 5)
    }

    /// [`NetworkGraph::extract_features_recorded`] stopping after stage
    /// `last_stage`.
    pub fn extract_features_recorded_to(
        &self,
        tape: &mut Tape,
        input: Var,
        last_stage: usize,
    ) -> Result<(FeatureStack, Vec<Var>)> {
        let image = Image::from_tensor(tape.value(input).clone())?;
        let mut stack = self.empty_stack(&image);
        let mut vars = Vec::with_capacity(6);
        if self.options.include_stage0 {
            vars.push(input);
            if last_stage == 0 {
                return Ok((stack, vars));
            }
        }
        let (scale, shift) = standardization();
        let mut x = tape.affine(input, &scale, &shift)?;
        for layer in &self.layers {
            x = match layer {
                Layer::Conv(spec) => tape.conv2d(x, spec.clone())?,
                Layer::Relu => tape.relu(x),
                Layer::Pool => match self.options.pooling {
                    Pooling::L2 => tape.l2pool(x, self.pool.clone()),
                    Pooling::Max => tape.max_pool(x),
                },
                Layer::Tap(stage) => {
                    stack.stages.push(tape.value(x).clone());
                    stack.stage_ids.push(*stage);
                    vars.push(x);
                    if *stage >= last_stage {
                        break;
                    }
                    x
                }
            };
        }
        Ok((stack, vars))
    }

    /// [`NetworkGraph::extract_features`], optionally recording on a tape.
    pub fn extract_features_with(&self, image: &Image, record: Option<&mut Tape>) -> Result<FeatureStack> {
        match record {
            None => self.extract_features(image),
            Some(tape) => {
                let input = tape.input(image.tensor().clone());
                Ok(self.extract_features_recorded(tape, input)?.0)
            }
        }
    }

    fn empty_stack(&self, image: &Image) -> FeatureStack {
        let mut stack = FeatureStack {
            stages: Vec::with_capacity(6),
            stage_ids: Vec::with_capacity(6),
        };
        if self.options.include_stage0 {
            stack.stages.push(image.tensor().clone());
            stack.stage_ids.push(0);
        }
        stack
    }
}

fn standardization() -> ([f32; 3], [f32; 3]) {
    let scale = IMAGENET_STD.map(|s| 1.0 / s);
    let shift = [0, 1, 2].map(|c| -IMAGENET_MEAN[c] / IMAGENET_STD[c]);
    (scale, shift)
}

/// Per-channel ImageNet standardization, `(x − mean) / std`.
pub fn standardize(t: &Tensor3) -> Tensor3 {
    let (scale, shift) = standardization();
    tensor::affine_channels(t, &scale, &shift).expect("three-channel input")
}

/// Bilinear rescale so the shorter side has `min_side` pixels.
pub fn resize_min_side(image: &Image, min_side: usize) -> Image {
    let (h, w) = (image.height(), image.width());
    let short = h.min(w);
    if short == min_side || short == 0 {
        return image.clone();
    }
    let scale = min_side as f64 / short as f64;
    let (nh, nw) = if h <= w {
        (min_side, ((w as f64 * scale).round() as usize).max(1))
    } else {
        (((h as f64 * scale).round() as usize).max(1), min_side)
    };
    image.resize_bilinear(nh, nw)
}

/// Rescales to the 256-pixel working resolution. Standardization is part of
/// the graph so that stage 0 keeps raw `[0, 1]` pixels.
pub fn preprocess(image: &Image) -> Image {
    resize_min_side(image, PREPROCESS_MIN_SIDE)
}
