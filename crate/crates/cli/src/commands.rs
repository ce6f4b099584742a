use std::collections::{BTreeMap, HashSet};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use clap::{Args, ValueEnum};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use dists_core::data::{read_texture_manifest, BadRow, QualityManifest, QualityRow};
use dists_core::eval::{correlations, geometric_transform, Transform};
use dists_core::metric::{self, psnr, ssim_global};
use dists_core::optim::{self, normalize_scores, texture_crop_pairs, CachedProfiles, TrainConfig};
use dists_core::synthesis::{
    self, noise_image, DescentConfig, DescentOutcome, DistsMeasure, Init, Measure, MseMeasure, Optimizer, SsimMeasure,
    StageMask, SynthesisConfig,
};
use dists_core::{Error, Image};

use crate::common::{create_dir, load_image, write_descent_trace, BackboneArgs, Model, ModelArgs, Recorder, Resize};

#[derive(Args, Debug, Serialize)]
pub struct ScoreArgs {
    pub reference: PathBuf,
    pub distorted: PathBuf,
    #[command(flatten)]
    #[serde(flatten)]
    pub model: ModelArgs,
    /// Also write `score.csv` and a run manifest here.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

pub fn score(a: ScoreArgs) -> anyhow::Result<()> {
    let rec = Recorder::start("score", &a, None)?;
    let m = a.model.load()?;
    let x = load_image(&a.reference, a.model.resize())?;
    let y = load_image(&a.distorted, a.model.resize())?;
    let fx = m.graph.extract_features(&x)?;
    let fy = m.graph.extract_features(&y)?;
    let d2 = metric::dists(&fx, &fy, &m.weights)?;
    let d = metric::dists_metric(&fx, &fy, &m.weights)?;
    let p = psnr(&x, &y)?;
    let s = ssim_global(&x, &y)?;
    let rows = [
        ("D", format!("{d2:.10}")),
        ("d", format!("{d:.10}")),
        ("PSNR", p.to_string()),
        ("SSIM", format!("{s:.10}")),
    ];
    for (k, v) in &rows {
        println!("{k:<5} {v}");
    }
    if let Some(out) = &a.out {
        create_dir(out)?;
        let mut rec = rec;
        rec.model(&m);
        let path = out.join("score.csv");
        let mut w = csv::Writer::from_path(&path)?;
        w.write_record(["key", "value"])?;
        for (k, v) in &rows {
            w.write_record([*k, v.as_str()])?;
        }
        w.flush()?;
        rec.output(&path)?;
        rec.finish(out)?;
    }
    Ok(())
}

#[derive(Args, Debug, Serialize)]
pub struct EvalArgs {
    /// CSV with ref_path, dist_path, mos and optionally dataset.
    #[arg(long)]
    pub manifest: PathBuf,
    #[command(flatten)]
    #[serde(flatten)]
    pub model: ModelArgs,
    #[arg(long)]
    pub out: PathBuf,
    /// Drop malformed or unreadable rows instead of aborting.
    #[arg(long)]
    pub skip_bad: bool,
}

fn write_bad_rows(path: &Path, bad: &[BadRow]) -> anyhow::Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["line", "reason"])?;
    for b in bad {
        w.write_record([b.line.to_string(), b.reason.clone()])?;
    }
    w.flush()?;
    Ok(())
}

/// Model score for every manifest row, extracting each reference once.
/// Unreadable images give per-row errors; when a reference fails, its first
/// row carries the cause and the others point to it.
fn score_rows(m: &Model, resize: Resize, rows: &[QualityRow]) -> Vec<anyhow::Result<f64>> {
    let mut groups: BTreeMap<&Path, Vec<usize>> = BTreeMap::new();
    for (i, r) in rows.iter().enumerate() {
        groups.entry(r.ref_path.as_path()).or_default().push(i);
    }
    let groups: Vec<(&Path, Vec<usize>)> = groups.into_iter().collect();
    let scored: Vec<Vec<(usize, anyhow::Result<f64>)>> = groups
        .par_iter()
        .map(|(ref_path, idx)| {
            let fx = match load_image(ref_path, resize).and_then(|x| Ok(m.graph.extract_features(&x)?)) {
                Ok(f) => f,
                Err(e) => {
                    let first = rows[idx[0]].line;
                    let mut out = vec![(idx[0], Err(e))];
                    out.extend(idx[1..].iter().map(|&i| {
                        (i, Err(anyhow::anyhow!("reference unusable, see line {first}")))
                    }));
                    return out;
                }
            };
            idx.iter()
                .map(|&i| {
                    let d = load_image(&rows[i].dist_path, resize)
                        .and_then(|y| Ok(metric::dists(&fx, &m.graph.extract_features(&y)?, &m.weights)?));
                    (i, d)
                })
                .collect()
        })
        .collect();
    let mut out: Vec<Option<anyhow::Result<f64>>> = (0..rows.len()).map(|_| None).collect();
    for (i, d) in scored.into_iter().flatten() {
        out[i] = Some(d);
    }
    out.into_iter().map(|d| d.expect("every row scored")).collect()
}

pub fn eval(a: EvalArgs) -> anyhow::Result<()> {
    let mut rec = Recorder::start("eval", &a, None)?;
    let mut manifest = QualityManifest::read(&a.manifest)?;
    if !a.skip_bad {
        manifest.require_clean()?;
    }
    let m = a.model.load()?;
    rec.model(&m);
    create_dir(&a.out)?;
    let scores = score_rows(&m, a.model.resize(), &manifest.rows);
    let mut kept = Vec::new();
    for (row, d) in manifest.rows.iter().zip(scores) {
        match d {
            Ok(d) => kept.push((row.clone(), d)),
            Err(e) if a.skip_bad => manifest.bad.push(BadRow {
                line: row.line,
                reason: format!("{e:#}"),
            }),
            Err(e) => return Err(e.context(format!("manifest line {}", row.line))),
        }
    }
    manifest.bad.sort_by_key(|b| b.line);

    let scores_path = a.out.join("scores.csv");
    let mut w = csv::Writer::from_path(&scores_path)?;
    w.write_record(["line", "ref_path", "dist_path", "dataset", "mos", "D"])?;
    for (r, d) in &kept {
        w.write_record([
            r.line.to_string(),
            r.ref_path.display().to_string(),
            r.dist_path.display().to_string(),
            r.dataset.clone(),
            r.mos.to_string(),
            format!("{d:e}"),
        ])?;
    }
    w.flush()?;

    let mut by_set: BTreeMap<&str, (Vec<f64>, Vec<f64>)> = BTreeMap::new();
    for (r, d) in &kept {
        let e = by_set.entry(r.dataset.as_str()).or_default();
        e.0.push(*d);
        e.1.push(r.mos);
    }
    let corr_path = a.out.join("correlations.csv");
    let mut w = csv::Writer::from_path(&corr_path)?;
    w.write_record(["dataset", "n", "plcc", "srcc", "krcc", "eta1", "eta2", "eta3", "eta4"])?;
    println!("{:<16} {:>6} {:>9} {:>9} {:>9}", "dataset", "n", "PLCC", "SRCC", "KRCC");
    for (name, (d, mos)) in &by_set {
        let c = correlations(d, mos).with_context(|| format!("dataset `{name}`"))?;
        let mut rec = vec![name.to_string(), c.n.to_string()];
        rec.extend([c.plcc, c.srcc, c.krcc].iter().map(|v| format!("{v:.6}")));
        rec.extend(c.logistic.eta.iter().map(|v| format!("{v:e}")));
        w.write_record(&rec)?;
        println!("{:<16} {:>6} {:>9.4} {:>9.4} {:>9.4}", name, c.n, c.plcc, c.srcc, c.krcc);
    }
    w.flush()?;

    rec.output(&scores_path)?;
    rec.output(&corr_path)?;
    if !manifest.bad.is_empty() {
        let bad_path = a.out.join("bad_rows.csv");
        write_bad_rows(&bad_path, &manifest.bad)?;
        eprintln!("skipped {} bad rows, listed in {}", manifest.bad.len(), bad_path.display());
        rec.output(&bad_path)?;
    }
    rec.finish(&a.out)?;
    Ok(())
}

#[derive(Clone, Copy, Debug, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum MosDirection {
    /// Larger scores mean better quality (MOS).
    HigherBetter,
    /// Larger scores mean worse quality (DMOS).
    LowerBetter,
}

#[derive(Args, Debug, Serialize)]
pub struct TrainArgs {
    /// Quality manifest: ref_path, dist_path, mos[, dataset].
    #[arg(long)]
    pub manifest: PathBuf,
    /// Texture manifest with a `path` column; required when λ > 0.
    #[arg(long)]
    pub textures: Option<PathBuf>,
    #[command(flatten)]
    #[serde(flatten)]
    pub backbone: BackboneArgs,
    #[arg(long, default_value_t = 1.0)]
    pub lambda: f64,
    #[arg(long, default_value_t = 5000)]
    pub iters: usize,
    #[arg(long, default_value_t = 32)]
    pub batch: usize,
    #[arg(long, default_value_t = 1e-4)]
    pub lr: f64,
    /// The learning rate halves every this many iterations.
    #[arg(long, default_value_t = 1000)]
    pub lr_halving: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Side of the square texture crops.
    #[arg(long, default_value_t = 256)]
    pub crop: usize,
    /// Crop pairs cut from each texture.
    #[arg(long, default_value_t = 8)]
    pub texture_pairs: usize,
    #[arg(long, value_enum, default_value = "higher-better")]
    pub mos_direction: MosDirection,
    #[arg(long)]
    pub skip_bad: bool,
    /// Evaluate the full objective after every step (slow).
    #[arg(long)]
    pub track_objective: bool,
    #[arg(long)]
    pub out: PathBuf,
}

/// Maps each dataset's scores onto `[0, 1]` separately.
fn normalize_by_dataset(rows: &[QualityRow], dir: MosDirection) -> anyhow::Result<Vec<f64>> {
    let mut q = vec![0.0; rows.len()];
    let mut groups: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, r) in rows.iter().enumerate() {
        groups.entry(&r.dataset).or_default().push(i);
    }
    for (name, idx) in groups {
        let raw: Vec<f64> = idx.iter().map(|&i| rows[i].mos).collect();
        let norm = normalize_scores(&raw, matches!(dir, MosDirection::HigherBetter))
            .with_context(|| format!("dataset `{name}`"))?;
        for (&i, v) in idx.iter().zip(norm) {
            q[i] = v;
        }
    }
    Ok(q)
}

pub fn train(a: TrainArgs) -> anyhow::Result<()> {
    let mut rec = Recorder::start("train", &a, Some(a.seed))?;
    let cfg = TrainConfig {
        lambda: a.lambda,
        lr: a.lr,
        lr_halving_period: a.lr_halving,
        total_iters: a.iters,
        batch_size: a.batch,
        track_objective: a.track_objective,
        ..TrainConfig::default()
    };
    cfg.validate()?;
    if a.lambda > 0.0 && a.textures.is_none() {
        bail!(Error::Ingestion("--textures is required when --lambda is positive".into()));
    }

    let manifest = QualityManifest::read(&a.manifest)?;
    if !a.skip_bad {
        manifest.require_clean()?;
    }
    let rows = &manifest.rows;
    let scores = normalize_by_dataset(rows, a.mos_direction)?;
    let textures = match (&a.textures, a.lambda > 0.0) {
        (Some(t), true) => read_texture_manifest(t)?,
        _ => Vec::new(),
    };

    let (graph, digest) = a.backbone.load_graph()?;
    rec.weights_digest(digest);
    let resize = a.backbone.resize;
    let quality = CachedProfiles::build_with(&graph, rows.len(), |i| {
        let load = |p: &Path| -> dists_core::error::Result<Image> { Ok(resize.apply(Image::load(p)?)) };
        Ok((load(&rows[i].ref_path)?, load(&rows[i].dist_path)?))
    })?;
    let texture_images: Vec<Image> = textures
        .iter()
        .map(|p| load_image(p, resize))
        .collect::<anyhow::Result<_>>()?;
    let mut rng = ChaCha8Rng::seed_from_u64(a.seed);
    let crops = texture_crop_pairs(&texture_images, a.crop, a.texture_pairs, &mut rng)?;
    drop(texture_images);
    let texture = CachedProfiles::build(&graph, &crops)?;
    drop(crops);

    let layout = graph.stage_layout();
    let outcome = optim::train(&quality, &scores, &texture, &layout, &cfg, a.seed)?;

    create_dir(&a.out)?;
    let params = a.out.join("params.dwts");
    outcome.weights.to_weight_file().write(&params)?;
    let trace = a.out.join("trace.csv");
    let mut w = csv::Writer::from_path(&trace)?;
    w.write_record(["iteration", "lr", "batch_loss", "objective"])?;
    for t in &outcome.trace {
        w.write_record([
            t.iteration.to_string(),
            format!("{:e}", t.lr),
            format!("{:e}", t.batch_loss),
            t.objective.map(|v| format!("{v:e}")).unwrap_or_default(),
        ])?;
    }
    w.flush()?;

    let mut mae = 0.0;
    for (p, q) in quality.profiles().iter().zip(&scores) {
        mae += (p.distance(&outcome.weights)? - q).abs();
    }
    mae /= rows.len() as f64;
    println!(
        "trained on {} quality pairs and {} texture pairs; mean |D - q| = {mae:.6}",
        rows.len(),
        texture.profiles().len()
    );
    rec.output(&params)?;
    rec.output(&trace)?;
    rec.finish(&a.out)?;
    Ok(())
}

/// Options shared by synthesis and recovery.
#[derive(Args, Debug, Serialize)]
pub struct DescentArgs {
    #[arg(long, default_value_t = 2000)]
    pub iters: usize,
    #[arg(long, default_value_t = 0.01)]
    pub step: f64,
    /// `adam` or `gd`.
    #[arg(long, default_value = "adam")]
    pub optimizer: String,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Start from this image instead of uniform noise.
    #[arg(long)]
    pub init: Option<PathBuf>,
}

impl DescentArgs {
    fn config(&self) -> anyhow::Result<DescentConfig> {
        let cfg = DescentConfig {
            optimizer: self.optimizer.parse::<Optimizer>()?,
            step: self.step,
            max_iters: self.iters,
            ..DescentConfig::default()
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Saves the best image and trace, or on divergence the last stable
/// iterate, then passes the error on.
fn finish_descent(
    result: dists_core::error::Result<DescentOutcome>,
    out: &Path,
    name: &str,
    rec: &mut Recorder,
) -> anyhow::Result<DescentOutcome> {
    match result {
        Ok(o) => {
            let img = out.join(name);
            o.image.save(&img)?;
            let trace = out.join("trace.csv");
            write_descent_trace(&trace, &o.trace)?;
            rec.output(&img)?;
            rec.output(&trace)?;
            Ok(o)
        }
        Err(Error::Diverged { iteration, last_stable }) => {
            let img = out.join("last_stable.png");
            last_stable.save(&img)?;
            eprintln!("saved the last stable iterate to {}", img.display());
            Err(Error::Diverged { iteration, last_stable }.into())
        }
        Err(e) => Err(e.into()),
    }
}

fn report(o: &DescentOutcome) {
    println!(
        "objective {:.6e} -> {:.6e} ({:.3}% of initial) after {} iterations{}",
        o.initial(),
        o.value,
        100.0 * o.value / o.initial().max(f64::MIN_POSITIVE),
        o.iterations,
        if o.converged { ", converged" } else { "" }
    );
}

#[derive(Args, Debug, Serialize)]
pub struct SynthArgs {
    pub texture: PathBuf,
    #[command(flatten)]
    #[serde(flatten)]
    pub backbone: BackboneArgs,
    /// Stages whose channel means are matched: `all`, `3`, `0,2` or `0-3`.
    #[arg(long, default_value = "all")]
    pub mask: String,
    /// Output size `HxW`; defaults to the texture's size.
    #[arg(long)]
    pub size: Option<String>,
    #[command(flatten)]
    #[serde(flatten)]
    pub descent: DescentArgs,
    #[arg(long)]
    pub out: PathBuf,
}

fn parse_size(s: &str) -> anyhow::Result<(usize, usize)> {
    let (h, w) = s
        .split_once(['x', 'X'])
        .ok_or_else(|| anyhow::anyhow!("size must look like 64x64, got `{s}`"))?;
    let (h, w) = (h.trim().parse::<usize>()?, w.trim().parse::<usize>()?);
    if h == 0 || w == 0 {
        bail!("size must be positive");
    }
    Ok((h, w))
}

pub fn synthesize(a: SynthArgs) -> anyhow::Result<()> {
    let mut rec = Recorder::start("synthesize", &a, Some(a.descent.seed))?;
    let mask: StageMask = a.mask.parse()?;
    let descent = a.descent.config()?;
    let size = a.size.as_deref().map(parse_size).transpose()?;
    let (graph, digest) = a.backbone.load_graph()?;
    rec.weights_digest(digest);
    let x = load_image(&a.texture, a.backbone.resize)?;
    let init = match &a.descent.init {
        Some(p) => Init::Image(load_image(p, a.backbone.resize)?),
        None => Init::Noise,
    };
    let cfg = SynthesisConfig {
        mask,
        descent,
        seed: a.descent.seed,
        init,
        size,
    };
    create_dir(&a.out)?;
    let o = finish_descent(synthesis::synthesize(&graph, &x, &cfg), &a.out, "synthesized.png", &mut rec)?;
    report(&o);
    rec.finish(&a.out)?;
    Ok(())
}

#[derive(Clone, Copy, Debug, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum MeasureArg {
    Dists,
    Mse,
    Ssim,
}

#[derive(Args, Debug, Serialize)]
pub struct RecoverArgs {
    pub reference: PathBuf,
    #[command(flatten)]
    #[serde(flatten)]
    pub model: ModelArgs,
    #[arg(long, value_enum, default_value = "dists")]
    pub measure: MeasureArg,
    #[command(flatten)]
    #[serde(flatten)]
    pub descent: DescentArgs,
    #[arg(long)]
    pub out: PathBuf,
}

pub fn recover(a: RecoverArgs) -> anyhow::Result<()> {
    let mut rec = Recorder::start("recover", &a, Some(a.descent.seed))?;
    let cfg = a.descent.config()?;
    let x = load_image(&a.reference, a.model.resize())?;
    let init = match &a.descent.init {
        Some(p) => load_image(p, a.model.resize())?,
        None => noise_image(x.height(), x.width(), a.descent.seed),
    };
    let model;
    let measure: Box<dyn Measure + '_> = match a.measure {
        MeasureArg::Dists => {
            model = a.model.load()?;
            rec.model(&model);
            Box::new(DistsMeasure::new(&model.graph, &x, model.weights.clone())?)
        }
        MeasureArg::Mse => Box::new(MseMeasure::new(x.clone())),
        MeasureArg::Ssim => Box::new(SsimMeasure::new(x.clone())),
    };
    create_dir(&a.out)?;
    let o = finish_descent(synthesis::recover(measure.as_ref(), init, &cfg), &a.out, "recovered.png", &mut rec)?;
    report(&o);
    rec.finish(&a.out)?;
    Ok(())
}

#[derive(Args, Debug, Serialize)]
pub struct AugmentArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Multiplies the default magnitudes (5% shift, 3° rotation, 1.05
    /// dilation); 0 writes untransformed copies.
    #[arg(long, default_value_t = 1.0)]
    pub scale: f64,
    #[arg(long)]
    pub skip_bad: bool,
}

pub fn augment(a: AugmentArgs) -> anyhow::Result<()> {
    let mut rec = Recorder::start("augment", &a, None)?;
    let transforms = Transform::standard_set(a.scale)?;
    let manifest = QualityManifest::read(&a.manifest)?;
    if !a.skip_bad {
        manifest.require_clean()?;
    }
    create_dir(&a.out)?;
    let out_abs = std::path::absolute(&a.out)?;

    // one output name per distinct reference
    let mut names: BTreeMap<&Path, String> = BTreeMap::new();
    let mut used = HashSet::new();
    for r in &manifest.rows {
        if names.contains_key(r.ref_path.as_path()) {
            continue;
        }
        let stem = r
            .ref_path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| "ref".into());
        let mut name = stem.clone();
        let mut k = 1;
        while !used.insert(name.clone()) {
            name = format!("{stem}-{k}");
            k += 1;
        }
        names.insert(&r.ref_path, name);
    }

    let refs: Vec<(&Path, &String)> = names.iter().map(|(p, n)| (*p, n)).collect();
    let results: Vec<(&Path, anyhow::Result<Vec<PathBuf>>)> = refs
        .par_iter()
        .map(|(p, name)| {
            let run = || -> anyhow::Result<Vec<PathBuf>> {
                let x = Image::load(p)?;
                let mut written = Vec::new();
                for t in &transforms {
                    let path = out_abs.join(format!("{name}_{}.png", t.name()));
                    geometric_transform(&x, t)?.save(&path)?;
                    written.push(path);
                }
                Ok(written)
            };
            (*p, run())
        })
        .collect();

    let mut variants: BTreeMap<&Path, Vec<PathBuf>> = BTreeMap::new();
    let mut failures = Vec::new();
    for (p, r) in results {
        match r {
            Ok(v) => {
                for path in &v {
                    rec.output(path)?;
                }
                variants.insert(p, v);
            }
            Err(e) => {
                eprintln!("{}: {e:#}", p.display());
                failures.push(e);
            }
        }
    }
    if let Some(first) = failures.into_iter().next() {
        if !a.skip_bad {
            return Err(first.context("augmentation failed for at least one reference"));
        }
    }

    let mut rows = Vec::new();
    for r in &manifest.rows {
        let Some(v) = variants.get(r.ref_path.as_path()) else {
            continue;
        };
        let abs = |p: &Path| std::path::absolute(p).unwrap_or_else(|_| p.to_path_buf());
        let base = QualityRow {
            ref_path: abs(&r.ref_path),
            dist_path: abs(&r.dist_path),
            ..r.clone()
        };
        rows.push(base.clone());
        for path in v {
            rows.push(QualityRow {
                ref_path: path.clone(),
                ..base.clone()
            });
        }
    }
    let path = a.out.join("augmented.csv");
    QualityManifest::write(&path, &rows)?;
    rec.output(&path)?;
    println!("{} rows written to {}", rows.len(), path.display());
    rec.finish(&a.out)?;
    Ok(())
}
