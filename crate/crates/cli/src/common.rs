use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::{SystemTime, UNIX_EPOCH};

use anyhow::Context;
use clap::{Args, ValueEnum};
use serde::Serialize;
use sha2::{Digest, Sha256};

use dists_core::backbone::{resize_min_side, GraphOptions, NetworkGraph, Pooling, VggLayout, WeightFile};
use dists_core::metric::WeightSet;
use dists_core::{Error, Image};

/// Marks failures while loading backbone weights or trained parameters.
#[derive(Debug)]
pub struct WeightLoad(pub PathBuf);

impl fmt::Display for WeightLoad {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "cannot use weights from {}", self.0.display())
    }
}

pub fn exit_code(e: &anyhow::Error) -> u8 {
    if e.downcast_ref::<WeightLoad>().is_some() {
        return 3;
    }
    for cause in e.chain() {
        match cause.downcast_ref::<Error>() {
            Some(Error::Diverged { .. }) => return 4,
            Some(Error::IncompatibleWeights { .. } | Error::Format(_)) => return 3,
            Some(Error::Io { .. } | Error::Image { .. } | Error::Csv(_)) => return 2,
            _ => {}
        }
        if cause.downcast_ref::<std::io::Error>().is_some() {
            return 2;
        }
    }
    1
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum PoolingArg {
    L2,
    Max,
}

/// `none`, or the length in pixels of the shorter side after rescaling.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub enum Resize {
    None,
    MinSide(usize),
}

impl FromStr for Resize {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        if s.eq_ignore_ascii_case("none") {
            return Ok(Resize::None);
        }
        match s.parse::<usize>() {
            Ok(n) if n > 0 => Ok(Resize::MinSide(n)),
            _ => Err(format!("expected `none` or a positive pixel count, got `{s}`")),
        }
    }
}

impl Resize {
    pub fn apply(&self, img: Image) -> Image {
        match *self {
            Resize::None => img,
            Resize::MinSide(n) => resize_min_side(&img, n),
        }
    }
}

pub fn load_image(path: &Path, resize: Resize) -> anyhow::Result<Image> {
    Ok(resize.apply(Image::load(path)?))
}

/// Backbone weights and graph toggles.
#[derive(Args, Clone, Debug, Serialize)]
pub struct BackboneArgs {
    /// VGG16 convolution weights in DWTS format.
    #[arg(long, env = "DISTS_WEIGHTS")]
    pub weights: PathBuf,
    #[arg(long, value_enum, default_value = "l2")]
    pub pooling: PoolingArg,
    /// Drop the raw image from the representation.
    #[arg(long)]
    pub no_stage0: bool,
    /// Rescale inputs so the shorter side has this many pixels, or `none`.
    #[arg(long, default_value = "256")]
    pub resize: Resize,
    /// Expect VGG16 with every block's width divided by this (1 is the
    /// standard network).
    #[arg(long, default_value_t = 1)]
    pub width_divisor: usize,
}

/// Backbone plus the α/β weights of the distance.
#[derive(Args, Clone, Debug, Serialize)]
pub struct ModelArgs {
    #[command(flatten)]
    #[serde(flatten)]
    pub backbone: BackboneArgs,
    /// Trained α/β parameters (DWTS records `alpha`, `beta`); uniform
    /// weights when absent.
    #[arg(long)]
    pub params: Option<PathBuf>,
}

pub struct Model {
    pub graph: NetworkGraph,
    pub weights: WeightSet,
    pub weights_sha256: String,
    pub params_sha256: Option<String>,
}

impl BackboneArgs {
    pub fn options(&self) -> GraphOptions {
        GraphOptions {
            pooling: match self.pooling {
                PoolingArg::L2 => Pooling::L2,
                PoolingArg::Max => Pooling::Max,
            },
            include_stage0: !self.no_stage0,
        }
    }

    pub fn load_graph(&self) -> anyhow::Result<(NetworkGraph, String)> {
        let ctx = || WeightLoad(self.weights.clone());
        let digest = sha256_file(&self.weights).with_context(ctx)?;
        if self.width_divisor == 0 {
            anyhow::bail!("--width-divisor must be at least 1");
        }
        let layout = VggLayout::narrowed(self.width_divisor);
        let graph = NetworkGraph::load_weights_with_layout(&self.weights, layout, self.options()).with_context(ctx)?;
        Ok((graph, digest))
    }
}

impl ModelArgs {
    pub fn resize(&self) -> Resize {
        self.backbone.resize
    }

    pub fn load(&self) -> anyhow::Result<Model> {
        let (graph, weights_sha256) = self.backbone.load_graph()?;
        let (weights, params_sha256) = match &self.params {
            Some(p) => {
                let ctx = || WeightLoad(p.clone());
                let digest = sha256_file(p).with_context(ctx)?;
                let file = WeightFile::read(p).with_context(ctx)?;
                (WeightSet::from_weight_file(&file, graph.stage_layout()).with_context(ctx)?, Some(digest))
            }
            None => (WeightSet::uniform(graph.stage_layout()), None),
        };
        Ok(Model {
            graph,
            weights,
            weights_sha256,
            params_sha256,
        })
    }
}

pub fn sha256_file(path: &Path) -> anyhow::Result<String> {
    let bytes = fs::read(path).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })?;
    Ok(Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect())
}

#[derive(Debug, Serialize)]
pub struct FileDigest {
    pub path: PathBuf,
    pub sha256: String,
}

/// Provenance record written as `run_manifest.json` beside a command's
/// outputs.
#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub version: String,
    pub config: serde_json::Value,
    pub seed: Option<u64>,
    pub weights_sha256: Option<String>,
    pub params_sha256: Option<String>,
    pub outputs: Vec<FileDigest>,
    pub started_unix: f64,
    pub finished_unix: f64,
}

pub const RUN_MANIFEST: &str = "run_manifest.json";

fn now() -> f64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs_f64())
        .unwrap_or(0.0)
}

pub struct Recorder {
    manifest: RunManifest,
}

impl Recorder {
    pub fn start(command: &str, config: &impl Serialize, seed: Option<u64>) -> anyhow::Result<Self> {
        Ok(Recorder {
            manifest: RunManifest {
                command: command.into(),
                version: env!("CARGO_PKG_VERSION").into(),
                config: serde_json::to_value(config)?,
                seed,
                weights_sha256: None,
                params_sha256: None,
                outputs: Vec::new(),
                started_unix: now(),
                finished_unix: 0.0,
            },
        })
    }

    pub fn model(&mut self, m: &Model) {
        self.manifest.weights_sha256 = Some(m.weights_sha256.clone());
        self.manifest.params_sha256 = m.params_sha256.clone();
    }

    pub fn weights_digest(&mut self, digest: String) {
        self.manifest.weights_sha256 = Some(digest);
    }

    pub fn output(&mut self, path: &Path) -> anyhow::Result<()> {
        let sha256 = sha256_file(path)?;
        self.manifest.outputs.push(FileDigest {
            path: path.to_path_buf(),
            sha256,
        });
        Ok(())
    }

    pub fn finish(mut self, out_dir: &Path) -> anyhow::Result<PathBuf> {
        self.manifest.finished_unix = now();
        let path = out_dir.join(RUN_MANIFEST);
        let text = serde_json::to_string_pretty(&self.manifest)?;
        fs::write(&path, text).map_err(|e| Error::Io {
            path: path.clone(),
            source: e,
        })?;
        Ok(path)
    }
}

pub fn create_dir(dir: &Path) -> anyhow::Result<()> {
    fs::create_dir_all(dir).map_err(|e| {
        Error::Io {
            path: dir.to_path_buf(),
            source: e,
        }
        .into()
    })
}

/// `iteration,objective` rows, the initial objective at iteration 0.
pub fn write_descent_trace(path: &Path, trace: &[f64]) -> anyhow::Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["iteration", "objective"])?;
    for (i, v) in trace.iter().enumerate() {
        w.write_record([i.to_string(), format!("{v:e}")])?;
    }
    w.flush()?;
    Ok(())
}
