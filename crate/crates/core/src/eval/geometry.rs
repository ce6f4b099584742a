//! Small geometric transforms used to augment reference images.
//!
//! Coordinates are pixel centres with x to the right and y down; all
//! transforms act about the image centre `((w − 1)/2, (h − 1)/2)`.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::image::Image;

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Transform {
    /// Horizontal shift by this fraction of the width, positive rightward.
    Translate(f64),
    /// Clockwise rotation on screen, in degrees.
    Rotate(f64),
    /// Scaling about the centre by this factor.
    Dilate(f64),
    /// `Translate ∘ Rotate ∘ Dilate`: dilate first, translate last.
    Mixed { shift: f64, degrees: f64, factor: f64 },
}

impl Transform {
    pub const DEFAULT_SHIFT: f64 = 0.05;
    pub const DEFAULT_DEGREES: f64 = 3.0;
    pub const DEFAULT_FACTOR: f64 = 1.05;

    pub const KINDS: [&'static str; 4] = ["shift", "rotate", "dilate", "mixed"];

    /// The four augmentation transforms, magnitudes scaled as in
    /// [`Transform::scaled`].
    pub fn standard_set(scale: f64) -> Result<[Transform; 4]> {
        let mut out = [Transform::Translate(0.0); 4];
        for (t, kind) in out.iter_mut().zip(Self::KINDS) {
            *t = Self::scaled(kind, scale)?;
        }
        Ok(out)
    }

    /// The named transform with its default magnitude multiplied by
    /// `scale` (the dilation's excess over 1 is scaled). `scale = 0` gives
    /// the identity.
    pub fn scaled(kind: &str, scale: f64) -> Result<Self> {
        let shift = Self::DEFAULT_SHIFT * scale;
        let degrees = Self::DEFAULT_DEGREES * scale;
        let factor = 1.0 + (Self::DEFAULT_FACTOR - 1.0) * scale;
        let t = match kind {
            "shift" => Transform::Translate(shift),
            "rotate" => Transform::Rotate(degrees),
            "dilate" => Transform::Dilate(factor),
            "mixed" => Transform::Mixed { shift, degrees, factor },
            _ => return Err(unknown(kind)),
        };
        t.validate()?;
        Ok(t)
    }

    pub fn name(&self) -> &'static str {
        match self {
            Transform::Translate(_) => "shift",
            Transform::Rotate(_) => "rotate",
            Transform::Dilate(_) => "dilate",
            Transform::Mixed { .. } => "mixed",
        }
    }

    /// Shifts up to half the width, rotations up to 45°, factors in
    /// `[0.5, 2]`.
    pub fn validate(&self) -> Result<()> {
        let (shift, degrees, factor) = match *self {
            Transform::Translate(s) => (s, 0.0, 1.0),
            Transform::Rotate(d) => (0.0, d, 1.0),
            Transform::Dilate(f) => (0.0, 0.0, f),
            Transform::Mixed { shift, degrees, factor } => (shift, degrees, factor),
        };
        if !(shift.abs() <= 0.5 && degrees.abs() <= 45.0 && (0.5..=2.0).contains(&factor)) {
            return Err(Error::invalid(format!("{self} is outside the supported magnitude range")));
        }
        Ok(())
    }
}

fn unknown(kind: &str) -> Error {
    Error::invalid(format!("unknown transform `{kind}` (shift, rotate, dilate, mixed)"))
}

/// Name at its default magnitude.
impl FromStr for Transform {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Transform::scaled(s, 1.0)
    }
}

impl fmt::Display for Transform {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Transform::Translate(s) => write!(f, "shift({s})"),
            Transform::Rotate(d) => write!(f, "rotate({d})"),
            Transform::Dilate(k) => write!(f, "dilate({k})"),
            Transform::Mixed { shift, degrees, factor } => write!(f, "mixed({shift}, {degrees}, {factor})"),
        }
    }
}

/// Row-major 3×3 homogeneous matrix mapping source to output coordinates.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Affine(pub [[f64; 3]; 3]);

impl Affine {
    pub const IDENTITY: Affine = Affine([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]]);

    pub fn translation(tx: f64, ty: f64) -> Self {
        Affine([[1.0, 0.0, tx], [0.0, 1.0, ty], [0.0, 0.0, 1.0]])
    }

    /// Clockwise on screen because y points down.
    pub fn rotation(degrees: f64) -> Self {
        let (s, c) = degrees.to_radians().sin_cos();
        Affine([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])
    }

    pub fn scaling(k: f64) -> Self {
        Affine([[k, 0.0, 0.0], [0.0, k, 0.0], [0.0, 0.0, 1.0]])
    }

    /// `self ∘ other`: apply `other` first.
    pub fn then_after(&self, other: &Affine) -> Affine {
        let (a, b) = (&self.0, &other.0);
        let mut m = [[0.0; 3]; 3];
        for (i, row) in m.iter_mut().enumerate() {
            for (j, v) in row.iter_mut().enumerate() {
                *v = (0..3).map(|k| a[i][k] * b[k][j]).sum();
            }
        }
        Affine(m)
    }

    pub fn apply(&self, x: f64, y: f64) -> (f64, f64) {
        let m = &self.0;
        (m[0][0] * x + m[0][1] * y + m[0][2], m[1][0] * x + m[1][1] * y + m[1][2])
    }

    /// Inverse of the affine part; the last row is assumed `[0, 0, 1]`.
    pub fn inverse(&self) -> Result<Affine> {
        let m = &self.0;
        let det = m[0][0] * m[1][1] - m[0][1] * m[1][0];
        if det.abs() < 1e-12 {
            return Err(Error::invalid("transform is singular"));
        }
        let (a, b, c, d) = (m[1][1] / det, -m[0][1] / det, -m[1][0] / det, m[0][0] / det);
        Ok(Affine([
            [a, b, -(a * m[0][2] + b * m[1][2])],
            [c, d, -(c * m[0][2] + d * m[1][2])],
            [0.0, 0.0, 1.0],
        ]))
    }
}

/// The source-to-output matrix of `t` on an `h × w` image.
pub fn warp_matrix(t: &Transform, height: usize, width: usize) -> Affine {
    let (cx, cy) = ((width as f64 - 1.0) / 2.0, (height as f64 - 1.0) / 2.0);
    let about_centre = |m: Affine| {
        Affine::translation(cx, cy)
            .then_after(&m)
            .then_after(&Affine::translation(-cx, -cy))
    };
    match *t {
        Transform::Translate(s) => Affine::translation(s * width as f64, 0.0),
        Transform::Rotate(d) => about_centre(Affine::rotation(d)),
        Transform::Dilate(k) => about_centre(Affine::scaling(k)),
        Transform::Mixed { shift, degrees, factor } => warp_matrix(&Transform::Translate(shift), height, width)
            .then_after(&warp_matrix(&Transform::Rotate(degrees), height, width))
            .then_after(&warp_matrix(&Transform::Dilate(factor), height, width)),
    }
}

/// Inverse-mapped bilinear warp; samples outside the frame replicate the
/// nearest edge pixel.
pub fn warp(x: &Image, m: &Affine) -> Result<Image> {
    let inv = m.inverse()?;
    let (h, w) = (x.height(), x.width());
    let sample = |c: usize, sy: f64, sx: f64| {
        let sy = sy.clamp(0.0, (h - 1) as f64);
        let sx = sx.clamp(0.0, (w - 1) as f64);
        let (y0, x0) = (sy.floor() as usize, sx.floor() as usize);
        let (y1, x1) = ((y0 + 1).min(h - 1), (x0 + 1).min(w - 1));
        let (fy, fx) = (sy - y0 as f64, sx - x0 as f64);
        let top = x.get(c, y0, x0) as f64 * (1.0 - fx) + x.get(c, y0, x1) as f64 * fx;
        let bot = x.get(c, y1, x0) as f64 * (1.0 - fx) + x.get(c, y1, x1) as f64 * fx;
        (top * (1.0 - fy) + bot * fy) as f32
    };
    Ok(Image::from_fn(h, w, |c, i, j| {
        let (sx, sy) = inv.apply(j as f64, i as f64);
        sample(c, sy, sx)
    }))
}

pub fn geometric_transform(x: &Image, t: &Transform) -> Result<Image> {
    t.validate()?;
    warp(x, &warp_matrix(t, x.height(), x.width()))
}
