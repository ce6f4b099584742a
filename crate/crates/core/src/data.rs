//! CSV manifests and exporter fixture bundles.
//!
//! Paths inside a manifest are resolved against the manifest's directory
//! unless absolute.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use crate::backbone::FeatureStack;
use crate::error::{Error, Result};
use crate::image::Image;

/// One reference / distorted / opinion-score triple.
#[derive(Clone, Debug, PartialEq)]
pub struct QualityRow {
    /// 1-based line in the manifest (the header is line 1).
    pub line: usize,
    pub ref_path: PathBuf,
    pub dist_path: PathBuf,
    pub mos: f64,
    pub dataset: String,
}

/// A manifest row that could not be used, with the reason.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BadRow {
    pub line: usize,
    pub reason: String,
}

impl fmt::Display for BadRow {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "line {}: {}", self.line, self.reason)
    }
}

/// Rows that parsed and rows that did not. Whether bad rows abort the run
/// is the caller's choice (see [`QualityManifest::require_clean`]).
#[derive(Clone, Debug, Default, PartialEq)]
pub struct QualityManifest {
    pub rows: Vec<QualityRow>,
    pub bad: Vec<BadRow>,
}

fn resolve(base: &Path, p: &str) -> PathBuf {
    let p = Path::new(p.trim());
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

fn base_dir(path: &Path) -> PathBuf {
    path.parent().map(Path::to_path_buf).unwrap_or_default()
}

fn reader(path: &Path) -> Result<csv::Reader<fs::File>> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    Ok(csv::ReaderBuilder::new().flexible(true).trim(csv::Trim::All).from_reader(file))
}

fn column(headers: &csv::StringRecord, name: &str, path: &Path) -> Result<usize> {
    headers
        .iter()
        .position(|h| h == name)
        .ok_or_else(|| Error::Ingestion(format!("{} has no `{name}` column", path.display())))
}

impl QualityManifest {
    /// Columns `ref_path`, `dist_path`, `mos` and optionally `dataset`
    /// (defaulting to the manifest's file stem).
    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let base = base_dir(path);
        let default_set = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
        let mut rdr = reader(path)?;
        let headers = rdr.headers()?.clone();
        let (ri, di, mi) = (
            column(&headers, "ref_path", path)?,
            column(&headers, "dist_path", path)?,
            column(&headers, "mos", path)?,
        );
        let si = headers.iter().position(|h| h == "dataset");
        let mut out = QualityManifest::default();
        for (k, rec) in rdr.records().enumerate() {
            let line = k + 2;
            let rec = match rec {
                Ok(r) => r,
                Err(e) => {
                    out.bad.push(BadRow { line, reason: e.to_string() });
                    continue;
                }
            };
            let field = |i: usize| rec.get(i).filter(|s| !s.is_empty());
            let (Some(r), Some(d), Some(m)) = (field(ri), field(di), field(mi)) else {
                out.bad.push(BadRow {
                    line,
                    reason: "missing ref_path, dist_path or mos".into(),
                });
                continue;
            };
            let mos = match m.parse::<f64>() {
                Ok(v) if v.is_finite() => v,
                _ => {
                    out.bad.push(BadRow {
                        line,
                        reason: format!("mos `{m}` is not a finite number"),
                    });
                    continue;
                }
            };
            out.rows.push(QualityRow {
                line,
                ref_path: resolve(&base, r),
                dist_path: resolve(&base, d),
                mos,
                dataset: si.and_then(field).unwrap_or(&default_set).to_string(),
            });
        }
        Ok(out)
    }

    /// Fails with every bad row listed if there are any.
    pub fn require_clean(&self) -> Result<()> {
        if self.bad.is_empty() {
            return Ok(());
        }
        let list: Vec<String> = self.bad.iter().map(|b| b.to_string()).collect();
        Err(Error::Ingestion(format!("{} malformed manifest rows:\n  {}", self.bad.len(), list.join("\n  "))))
    }

    /// Row indices grouped by dataset name.
    pub fn by_dataset(&self) -> BTreeMap<&str, Vec<usize>> {
        let mut m: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
        for (i, r) in self.rows.iter().enumerate() {
            m.entry(r.dataset.as_str()).or_default().push(i);
        }
        m
    }

    /// Writes `rows` with paths as given (absolute paths stay absolute).
    pub fn write(path: impl AsRef<Path>, rows: &[QualityRow]) -> Result<()> {
        let path = path.as_ref();
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["ref_path", "dist_path", "mos", "dataset"])?;
        for r in rows {
            w.write_record([
                r.ref_path.to_string_lossy().as_ref(),
                r.dist_path.to_string_lossy().as_ref(),
                &r.mos.to_string(),
                &r.dataset,
            ])?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}

/// A single `path` column of texture images.
pub fn read_texture_manifest(path: impl AsRef<Path>) -> Result<Vec<PathBuf>> {
    let path = path.as_ref();
    let base = base_dir(path);
    let mut rdr = reader(path)?;
    let pi = column(&rdr.headers()?.clone(), "path", path)?;
    let mut out = Vec::new();
    for (k, rec) in rdr.records().enumerate() {
        let rec = rec?;
        match rec.get(pi).filter(|s| !s.is_empty()) {
            Some(p) => out.push(resolve(&base, p)),
            None => return Err(Error::Ingestion(format!("{} line {}: empty path", path.display(), k + 2))),
        }
    }
    if out.is_empty() {
        return Err(Error::Ingestion(format!("{} lists no textures", path.display())));
    }
    Ok(out)
}

/// Reference values written by the weight exporter for cross-checking the
/// forward pass.
///
/// Directory layout:
/// - `image.png` and `stage_means.csv` (`stage,channel,mean`)
/// - `pair_ref.png`, `pair_dist.png` and `pair_ls.csv` (`stage,channel,l,s`)
/// - `summary.csv` (`key,value`) with at least `D`, the distance of the
///   pair under uniform weights
#[derive(Clone, Debug, PartialEq)]
pub struct Fixtures {
    pub image: Image,
    /// Channel means per stage, stage 0 first.
    pub stage_means: Vec<Vec<f64>>,
    pub pair: (Image, Image),
    /// `(l, s)` per channel per stage.
    pub pair_ls: Vec<Vec<(f64, f64)>>,
    pub summary: BTreeMap<String, String>,
}

fn staged<T: Clone + Default>(entries: Vec<(usize, usize, T)>, path: &Path) -> Result<Vec<Vec<T>>> {
    let stages = entries.iter().map(|e| e.0 + 1).max().unwrap_or(0);
    let mut out: Vec<Vec<Option<T>>> = vec![Vec::new(); stages];
    for (s, c, v) in entries {
        let st = &mut out[s];
        if st.len() <= c {
            st.resize(c + 1, None);
        }
        if st[c].replace(v).is_some() {
            return Err(Error::Ingestion(format!("{}: stage {s} channel {c} listed twice", path.display())));
        }
    }
    out.into_iter()
        .enumerate()
        .map(|(s, st)| {
            if st.is_empty() {
                return Err(Error::Ingestion(format!("{}: stage {s} is missing", path.display())));
            }
            st.into_iter()
                .enumerate()
                .map(|(c, v)| v.ok_or_else(|| Error::Ingestion(format!("{}: stage {s} channel {c} is missing", path.display()))))
                .collect()
        })
        .collect()
}

fn parse_num(s: &str, path: &Path, line: usize) -> Result<f64> {
    s.parse::<f64>()
        .ok()
        .filter(|v| v.is_finite())
        .ok_or_else(|| Error::Ingestion(format!("{} line {line}: `{s}` is not a finite number", path.display())))
}

fn parse_index(s: &str, path: &Path, line: usize) -> Result<usize> {
    s.parse::<usize>()
        .map_err(|_| Error::Ingestion(format!("{} line {line}: `{s}` is not an index", path.display())))
}

fn read_table(path: &Path, cols: &[&str]) -> Result<Vec<(usize, Vec<String>)>> {
    let mut rdr = reader(path)?;
    let headers = rdr.headers()?.clone();
    let idx: Vec<usize> = cols.iter().map(|c| column(&headers, c, path)).collect::<Result<_>>()?;
    let mut rows = Vec::new();
    for (k, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let line = k + 2;
        let vals = idx
            .iter()
            .map(|&i| {
                rec.get(i)
                    .map(str::to_string)
                    .ok_or_else(|| Error::Ingestion(format!("{} line {line}: too few fields", path.display())))
            })
            .collect::<Result<Vec<_>>>()?;
        rows.push((line, vals));
    }
    Ok(rows)
}

impl Fixtures {
    pub const IMAGE: &'static str = "image.png";
    pub const STAGE_MEANS: &'static str = "stage_means.csv";
    pub const PAIR_REF: &'static str = "pair_ref.png";
    pub const PAIR_DIST: &'static str = "pair_dist.png";
    pub const PAIR_LS: &'static str = "pair_ls.csv";
    pub const SUMMARY: &'static str = "summary.csv";

    pub fn read(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();

        let p = dir.join(Self::STAGE_MEANS);
        let mut means = Vec::new();
        for (line, v) in read_table(&p, &["stage", "channel", "mean"])? {
            means.push((parse_index(&v[0], &p, line)?, parse_index(&v[1], &p, line)?, parse_num(&v[2], &p, line)?));
        }
        let stage_means = staged(means, &p)?;

        let p = dir.join(Self::PAIR_LS);
        let mut ls = Vec::new();
        for (line, v) in read_table(&p, &["stage", "channel", "l", "s"])? {
            let pair = (parse_num(&v[2], &p, line)?, parse_num(&v[3], &p, line)?);
            ls.push((parse_index(&v[0], &p, line)?, parse_index(&v[1], &p, line)?, pair));
        }
        let pair_ls = staged(ls, &p)?;

        let p = dir.join(Self::SUMMARY);
        let summary: BTreeMap<String, String> = read_table(&p, &["key", "value"])?
            .into_iter()
            .map(|(_, v)| (v[0].clone(), v[1].clone()))
            .collect();
        match summary.get("D") {
            Some(d) => {
                parse_num(d, &p, 0)?;
            }
            None => return Err(Error::Ingestion(format!("{} has no `D` entry", p.display()))),
        }

        Ok(Fixtures {
            image: Image::load(dir.join(Self::IMAGE))?,
            stage_means,
            pair: (Image::load(dir.join(Self::PAIR_REF))?, Image::load(dir.join(Self::PAIR_DIST))?),
            pair_ls,
            summary,
        })
    }

    /// The pair's distance under uniform weights.
    pub fn distance(&self) -> f64 {
        self.summary["D"].parse().expect("checked on read")
    }

    pub fn write(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        self.image.save(dir.join(Self::IMAGE))?;
        self.pair.0.save(dir.join(Self::PAIR_REF))?;
        self.pair.1.save(dir.join(Self::PAIR_DIST))?;

        let mut w = csv::Writer::from_path(dir.join(Self::STAGE_MEANS))?;
        w.write_record(["stage", "channel", "mean"])?;
        for (s, st) in self.stage_means.iter().enumerate() {
            for (c, m) in st.iter().enumerate() {
                w.write_record([s.to_string(), c.to_string(), format!("{m:e}")])?;
            }
        }
        w.flush().map_err(|e| Error::io(dir, e))?;

        let mut w = csv::Writer::from_path(dir.join(Self::PAIR_LS))?;
        w.write_record(["stage", "channel", "l", "s"])?;
        for (s, st) in self.pair_ls.iter().enumerate() {
            for (c, (l, sv)) in st.iter().enumerate() {
                w.write_record([s.to_string(), c.to_string(), format!("{l:e}"), format!("{sv:e}")])?;
            }
        }
        w.flush().map_err(|e| Error::io(dir, e))?;

        let mut w = csv::Writer::from_path(dir.join(Self::SUMMARY))?;
        w.write_record(["key", "value"])?;
        for (k, v) in &self.summary {
            w.write_record([k, v])?;
        }
        w.flush().map_err(|e| Error::io(dir, e))
    }
}

/// `|a − b| / max(|b|, floor)`, the largest over paired values.
pub fn max_relative_error(ours: &[f64], reference: &[f64], floor: f64) -> Result<f64> {
    if ours.len() != reference.len() {
        return Err(Error::shape(format!("{} values against {} reference values", ours.len(), reference.len())));
    }
    Ok(ours
        .iter()
        .zip(reference)
        .map(|(a, b)| (a - b).abs() / b.abs().max(floor))
        .fold(0.0, f64::max))
}

/// Largest relative deviation of `stack`'s channel means from the fixture
/// means, over all stages.
pub fn stage_mean_error(stack: &FeatureStack, fixture_means: &[Vec<f64>], floor: f64) -> Result<f64> {
    if stack.stages.len() != fixture_means.len() {
        return Err(Error::shape(format!(
            "{} stages against {} fixture stages",
            stack.stages.len(),
            fixture_means.len()
        )));
    }
    let mut worst: f64 = 0.0;
    for (st, want) in stack.stages.iter().zip(fixture_means) {
        worst = worst.max(max_relative_error(&st.channel_means(), want, floor)?);
    }
    Ok(worst)
}
