//! Planar RGB images with values in `[0, 1]`.

use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor3;

/// A 3-channel planar raster. Values are nominally in `[0, 1]`; the type
/// keeps whatever finite values it is given and [`Image::clamp01`] restores
/// the range.
#[derive(Clone, Debug, PartialEq)]
pub struct Image(Tensor3);

impl Image {
    pub fn from_tensor(t: Tensor3) -> Result<Self> {
        if t.channels() != 3 {
            return Err(Error::invalid(format!(
                "images have 3 channels, got {}",
                t.channels()
            )));
        }
        Ok(Image(t))
    }

    pub fn from_fn(height: usize, width: usize, f: impl FnMut(usize, usize, usize) -> f32) -> Self {
        Image(Tensor3::from_fn(3, height, width, f))
    }

    pub fn filled(height: usize, width: usize, rgb: [f32; 3]) -> Self {
        Self::from_fn(height, width, |c, _, _| rgb[c])
    }

    pub fn tensor(&self) -> &Tensor3 {
        &self.0
    }

    pub fn into_tensor(self) -> Tensor3 {
        self.0
    }

    pub fn height(&self) -> usize {
        self.0.height()
    }

    pub fn width(&self) -> usize {
        self.0.width()
    }

    pub fn get(&self, c: usize, y: usize, x: usize) -> f32 {
        self.0.get(c, y, x)
    }

    pub fn data(&self) -> &[f32] {
        self.0.data()
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        self.0.data_mut()
    }

    pub fn clamp01(&mut self) {
        self.0.data_mut().iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
    }

    /// Rec. 601 luma, row-major.
    pub fn luminance(&self) -> Vec<f64> {
        let (r, g, b) = (self.0.plane(0), self.0.plane(1), self.0.plane(2));
        r.iter()
            .zip(g)
            .zip(b)
            .map(|((&r, &g), &b)| 0.299 * r as f64 + 0.587 * g as f64 + 0.114 * b as f64)
            .collect()
    }

    pub fn crop(&self, top: usize, left: usize, height: usize, width: usize) -> Result<Image> {
        if top + height > self.height() || left + width > self.width() {
            return Err(Error::invalid(format!(
                "crop {height}x{width}@({top},{left}) exceeds {}x{}",
                self.height(),
                self.width()
            )));
        }
        Ok(Self::from_fn(height, width, |c, y, x| self.get(c, top + y, left + x)))
    }

    /// Bilinear resampling with half-pixel centers and edge clamping.
    pub fn resize_bilinear(&self, height: usize, width: usize) -> Image {
        if height == self.height() && width == self.width() {
            return self.clone();
        }
        let (sh, sw) = (self.height(), self.width());
        let sy = sh as f64 / height as f64;
        let sx = sw as f64 / width as f64;
        let coords = |o: usize, scale: f64, n: usize| {
            let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(n - 1);
            let i1 = (i0 + 1).min(n - 1);
            (i0, i1, (src - i0 as f64) as f32)
        };
        let ys: Vec<_> = (0..height).map(|o| coords(o, sy, sh)).collect();
        let xs: Vec<_> = (0..width).map(|o| coords(o, sx, sw)).collect();
        Self::from_fn(height, width, |c, y, x| {
            let (y0, y1, fy) = ys[y];
            let (x0, x1, fx) = xs[x];
            let top = self.get(c, y0, x0) * (1.0 - fx) + self.get(c, y0, x1) * fx;
            let bot = self.get(c, y1, x0) * (1.0 - fx) + self.get(c, y1, x1) * fx;
            top * (1.0 - fy) + bot * fy
        })
    }

    /// Reads any 8/16-bit raster the `image` crate understands, as RGB.
    pub fn load(path: impl AsRef<Path>) -> Result<Image> {
        let path = path.as_ref();
        let img = ::image::open(path)
            .map_err(|source| Error::Image {
                path: path.to_path_buf(),
                source,
            })?
            .to_rgb8();
        let (w, h) = (img.width() as usize, img.height() as usize);
        Ok(Self::from_fn(h, w, |c, y, x| {
            img.get_pixel(x as u32, y as u32)[c] as f32 / 255.0
        }))
    }

    /// Writes an 8-bit RGB file; the format follows the extension.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let (w, h) = (self.width() as u32, self.height() as u32);
        let buf = ::image::RgbImage::from_fn(w, h, |x, y| {
            let px = |c| (self.get(c, y as usize, x as usize).clamp(0.0, 1.0) * 255.0).round() as u8;
            ::image::Rgb([px(0), px(1), px(2)])
        });
        buf.save(path).map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })
    }

    /// Quantizes to the 8-bit grid [`Image::save`] writes.
    pub fn quantized(&self) -> Image {
        Image(self.0.map(|v| (v.clamp(0.0, 1.0) * 255.0).round() / 255.0))
    }
}
