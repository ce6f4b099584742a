//! PSNR and single-scale global SSIM, the pixel-domain reference measures.

use std::fmt;

use crate::error::{Error, Result};
use crate::image::Image;

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
const K1: f64 = 0.01;
const K2: f64 = 0.03;

fn check_same(x: &Image, y: &Image) -> Result<()> {
    if x.tensor().shape() != y.tensor().shape() {
        return Err(Error::shape(format!(
            "images {:?} and {:?}",
            x.tensor().shape(),
            y.tensor().shape()
        )));
    }
    Ok(())
}

/// Mean squared pixel error over all channels.
pub fn mse(x: &Image, y: &Image) -> Result<f64> {
    check_same(x, y)?;
    let n = x.data().len() as f64;
    Ok(x.data()
        .iter()
        .zip(y.data())
        .map(|(&a, &b)| (a as f64 - b as f64).powi(2))
        .sum::<f64>()
        / n)
}

/// PSNR for unit peak; identical images have no finite value.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Psnr {
    Finite(f64),
    Infinite,
}

impl Psnr {
    pub fn db(self) -> f64 {
        match self {
            Psnr::Finite(v) => v,
            Psnr::Infinite => f64::INFINITY,
        }
    }
}

impl fmt::Display for Psnr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Psnr::Finite(v) => write!(f, "{v:.4}"),
            Psnr::Infinite => f.write_str("inf"),
        }
    }
}

pub fn psnr(x: &Image, y: &Image) -> Result<Psnr> {
    let m = mse(x, y)?;
    Ok(if m == 0.0 {
        Psnr::Infinite
    } else {
        Psnr::Finite(-10.0 * m.log10())
    })
}

fn gaussian_window() -> Vec<f64> {
    let r = (SSIM_WINDOW / 2) as f64;
    let w: Vec<f64> = (0..SSIM_WINDOW)
        .map(|i| (-(i as f64 - r).powi(2) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp())
        .collect();
    let s: f64 = w.iter().sum();
    w.into_iter().map(|v| v / s).collect()
}

/// Separable 'valid' filtering of a row-major `h × w` plane.
fn filter_valid(src: &[f64], h: usize, w: usize, k: &[f64]) -> Vec<f64> {
    let n = k.len();
    let (oh, ow) = (h + 1 - n, w + 1 - n);
    let mut rows = vec![0.0; h * ow];
    for y in 0..h {
        for x in 0..ow {
            rows[y * ow + x] = (0..n).map(|i| k[i] * src[y * w + x + i]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = (0..n).map(|i| k[i] * rows[(y + i) * ow + x]).sum();
        }
    }
    out
}

/// Adjoint of [`filter_valid`]: scatters an `oh × ow` plane back onto the
/// `(oh + n − 1) × (ow + n − 1)` input grid.
fn filter_valid_adjoint(g: &[f64], oh: usize, ow: usize, k: &[f64]) -> Vec<f64> {
    let n = k.len();
    let (h, w) = (oh + n - 1, ow + n - 1);
    let mut rows = vec![0.0; h * ow];
    for y in 0..oh {
        for i in 0..n {
            for x in 0..ow {
                rows[(y + i) * ow + x] += k[i] * g[y * ow + x];
            }
        }
    }
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..ow {
            let v = rows[y * ow + x];
            for i in 0..n {
                out[y * w + x + i] += k[i] * v;
            }
        }
    }
    out
}

struct SsimMaps {
    h: usize,
    w: usize,
    oh: usize,
    ow: usize,
    lx: Vec<f64>,
    ly: Vec<f64>,
    mu_x: Vec<f64>,
    mu_y: Vec<f64>,
    exx: Vec<f64>,
    eyy: Vec<f64>,
    exy: Vec<f64>,
}

fn ssim_maps(x: &Image, y: &Image) -> Result<SsimMaps> {
    check_same(x, y)?;
    let (h, w) = (x.height(), x.width());
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::shape(format!(
            "SSIM needs at least {SSIM_WINDOW}x{SSIM_WINDOW} pixels, got {h}x{w}"
        )));
    }
    let k = gaussian_window();
    let lx = x.luminance();
    let ly = y.luminance();
    let sq = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(p, q)| p * q).collect::<Vec<_>>();
    Ok(SsimMaps {
        h,
        w,
        oh: h + 1 - SSIM_WINDOW,
        ow: w + 1 - SSIM_WINDOW,
        mu_x: filter_valid(&lx, h, w, &k),
        mu_y: filter_valid(&ly, h, w, &k),
        exx: filter_valid(&sq(&lx, &lx), h, w, &k),
        eyy: filter_valid(&sq(&ly, &ly), h, w, &k),
        exy: filter_valid(&sq(&lx, &ly), h, w, &k),
        lx,
        ly,
    })
}

/// Single-scale SSIM on Rec. 601 luminance: 11×11 Gaussian window
/// (σ = 1.5), `K1 = 0.01`, `K2 = 0.03`, unit dynamic range, 'valid' window
/// positions only, averaged over the map.
pub fn ssim_global(x: &Image, y: &Image) -> Result<f64> {
    Ok(ssim_global_with_gradient(x, y)?.0)
}

/// SSIM and its gradient with respect to the pixels of `y`.
pub fn ssim_global_with_gradient(x: &Image, y: &Image) -> Result<(f64, Image)> {
    let m = ssim_maps(x, y)?;
    let (c1, c2) = (K1 * K1, K2 * K2);
    let p = (m.oh * m.ow) as f64;
    let mut total = 0.0;
    let mut d_mu = vec![0.0; m.oh * m.ow];
    let mut d_eyy = vec![0.0; m.oh * m.ow];
    let mut d_exy = vec![0.0; m.oh * m.ow];
    for i in 0..m.oh * m.ow {
        let (mx, my) = (m.mu_x[i], m.mu_y[i]);
        let a1 = 2.0 * mx * my + c1;
        let b1 = mx * mx + my * my + c1;
        let a2 = 2.0 * (m.exy[i] - mx * my) + c2;
        let b2 = (m.exx[i] - mx * mx) + (m.eyy[i] - my * my) + c2;
        let v = a1 * a2 / (b1 * b2);
        total += v;
        d_mu[i] = (2.0 * mx * a2 - 2.0 * mx * a1) / (b1 * b2) - v * 2.0 * my / b1 + v * 2.0 * my / b2;
        d_eyy[i] = -v / b2;
        d_exy[i] = 2.0 * a1 / (b1 * b2);
    }
    let k = gaussian_window();
    let g_mu = filter_valid_adjoint(&d_mu, m.oh, m.ow, &k);
    let g_eyy = filter_valid_adjoint(&d_eyy, m.oh, m.ow, &k);
    let g_exy = filter_valid_adjoint(&d_exy, m.oh, m.ow, &k);
    let g_lum: Vec<f64> = (0..m.h * m.w)
        .map(|q| (g_mu[q] + 2.0 * m.ly[q] * g_eyy[q] + m.lx[q] * g_exy[q]) / p)
        .collect();
    let coef = [0.299, 0.587, 0.114];
    let grad = Image::from_fn(m.h, m.w, |c, yy, xx| (coef[c] * g_lum[yy * m.w + xx]) as f32);
    Ok((total / p, grad))
}
