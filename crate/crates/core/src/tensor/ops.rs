use std::sync::OnceLock;

use super::Tensor3;
use crate::error::{Error, Result};
use crate::par;

/// Stabilizer inside the square root of [`l2pool`]; keeps the derivative
/// finite where the blurred energy vanishes.
pub const L2POOL_EPS: f32 = 1e-12;

/// Upper bound on the im2col scratch per tile, in floats.
const TILE_FLOATS: usize = 1 << 20;

/// Parameters of one 2-D convolution (cross-correlation) layer.
#[derive(Clone, Debug)]
pub struct ConvSpec {
    in_channels: usize,
    out_channels: usize,
    kernel_size: usize,
    stride: usize,
    padding: usize,
    weights: Vec<f32>,
    bias: Vec<f32>,
    // Flipped, in/out-swapped kernel used for the stride-1 input gradient.
    adjoint: OnceLock<Vec<f32>>,
}

impl PartialEq for ConvSpec {
    fn eq(&self, other: &Self) -> bool {
        self.in_channels == other.in_channels
            && self.out_channels == other.out_channels
            && self.kernel_size == other.kernel_size
            && self.stride == other.stride
            && self.padding == other.padding
            && self.weights == other.weights
            && self.bias == other.bias
    }
}

impl ConvSpec {
    /// `weights` is `out × in × k × k`, `bias` has `out` entries.
    pub fn new(
        in_channels: usize,
        out_channels: usize,
        kernel_size: usize,
        stride: usize,
        padding: usize,
        weights: Vec<f32>,
        bias: Vec<f32>,
    ) -> Result<Self> {
        if kernel_size == 0 || stride == 0 {
            return Err(Error::invalid("kernel size and stride must be positive"));
        }
        let expected = out_channels * in_channels * kernel_size * kernel_size;
        if weights.len() != expected {
            return Err(Error::shape(format!(
                "conv weights have {} values, expected {expected}",
                weights.len()
            )));
        }
        if bias.len() != out_channels {
            return Err(Error::shape(format!(
                "conv bias has {} values, expected {out_channels}",
                bias.len()
            )));
        }
        Ok(ConvSpec {
            in_channels,
            out_channels,
            kernel_size,
            stride,
            padding,
            weights,
            bias,
            adjoint: OnceLock::new(),
        })
    }

    /// Square kernel with "same" zero padding at stride 1.
    pub fn same(
        in_channels: usize,
        out_channels: usize,
        kernel_size: usize,
        weights: Vec<f32>,
        bias: Vec<f32>,
    ) -> Result<Self> {
        if kernel_size % 2 == 0 {
            return Err(Error::invalid("same-padding convolution needs an odd kernel"));
        }
        Self::new(
            in_channels,
            out_channels,
            kernel_size,
            1,
            (kernel_size - 1) / 2,
            weights,
            bias,
        )
    }

    pub fn in_channels(&self) -> usize {
        self.in_channels
    }

    pub fn out_channels(&self) -> usize {
        self.out_channels
    }

    pub fn kernel_size(&self) -> usize {
        self.kernel_size
    }

    pub fn stride(&self) -> usize {
        self.stride
    }

    pub fn padding(&self) -> usize {
        self.padding
    }

    pub fn weights(&self) -> &[f32] {
        &self.weights
    }

    pub fn bias(&self) -> &[f32] {
        &self.bias
    }

    #[inline]
    pub fn weight(&self, o: usize, i: usize, ky: usize, kx: usize) -> f32 {
        let k = self.kernel_size;
        self.weights[((o * self.in_channels + i) * k + ky) * k + kx]
    }

    pub fn output_size(&self, height: usize, width: usize) -> Result<(usize, usize)> {
        let k = self.kernel_size;
        let (ph, pw) = (height + 2 * self.padding, width + 2 * self.padding);
        if ph < k || pw < k {
            return Err(Error::shape(format!(
                "{height}x{width} input is smaller than a {k}x{k} kernel after padding"
            )));
        }
        Ok(((ph - k) / self.stride + 1, (pw - k) / self.stride + 1))
    }

    fn adjoint_weights(&self) -> &[f32] {
        self.adjoint.get_or_init(|| {
            let k = self.kernel_size;
            let mut w = vec![0.0f32; self.weights.len()];
            for o in 0..self.out_channels {
                for i in 0..self.in_channels {
                    for ky in 0..k {
                        for kx in 0..k {
                            w[((i * self.out_channels + o) * k + (k - 1 - ky)) * k + (k - 1 - kx)] =
                                self.weight(o, i, ky, kx);
                        }
                    }
                }
            }
            w
        })
    }
}

/// `C (m × n) = A (m × k) · B (k × n)`, all row-major and contiguous.
fn gemm(m: usize, k: usize, n: usize, a: &[f32], b: &[f32], c: &mut [f32]) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    // SAFETY: the asserts above bound every access the kernel makes with the
    // given dimensions and unit column strides.
    unsafe {
        matrixmultiply::sgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            k as isize,
            1,
            b.as_ptr(),
            n as isize,
            1,
            0.0,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

fn conv_raw(input: &Tensor3, spec_shape: ConvShape, weights: &[f32], bias: Option<&[f32]>) -> Result<Tensor3> {
    let ConvShape {
        cin,
        cout,
        k,
        stride,
        pad,
    } = spec_shape;
    if input.channels() != cin {
        return Err(Error::shape(format!(
            "convolution expects {cin} input channels, got {}",
            input.channels()
        )));
    }
    let (h, w) = (input.height(), input.width());
    let (ph, pw) = (h + 2 * pad, w + 2 * pad);
    if ph < k || pw < k {
        return Err(Error::shape(format!(
            "{h}x{w} input is smaller than a {k}x{k} kernel after padding"
        )));
    }
    let (oh, ow) = ((ph - k) / stride + 1, (pw - k) / stride + 1);
    let kk = cin * k * k;
    let rows_per_tile = (TILE_FLOATS / (kk * ow).max(1)).clamp(1, oh);
    let tiles = oh.div_ceil(rows_per_tile);
    let src = input.data();

    let tile_out = par::map_indexed(tiles, |t| {
        let r0 = t * rows_per_tile;
        let r1 = (r0 + rows_per_tile).min(oh);
        let cols = (r1 - r0) * ow;
        let mut col = vec![0.0f32; kk * cols];
        for ci in 0..cin {
            let plane = &src[ci * h * w..(ci + 1) * h * w];
            for ky in 0..k {
                for kx in 0..k {
                    let row = &mut col[((ci * k + ky) * k + kx) * cols..][..cols];
                    for r in r0..r1 {
                        let iy = (r * stride + ky) as isize - pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let line = &plane[iy as usize * w..(iy as usize + 1) * w];
                        let dst = &mut row[(r - r0) * ow..(r - r0 + 1) * ow];
                        for (ox, d) in dst.iter_mut().enumerate() {
                            let ix = (ox * stride + kx) as isize - pad as isize;
                            if ix >= 0 && ix < w as isize {
                                *d = line[ix as usize];
                            }
                        }
                    }
                }
            }
        }
        let mut out = vec![0.0f32; cout * cols];
        gemm(cout, kk, cols, weights, &col, &mut out);
        if let Some(bias) = bias {
            for (o, chunk) in out.chunks_mut(cols).enumerate() {
                chunk.iter_mut().for_each(|v| *v += bias[o]);
            }
        }
        (r0, cols, out)
    });

    let mut output = Tensor3::zeros(cout, oh, ow);
    let plane = oh * ow;
    let dst = output.data_mut();
    for (r0, cols, out) in tile_out {
        for o in 0..cout {
            dst[o * plane + r0 * ow..][..cols].copy_from_slice(&out[o * cols..(o + 1) * cols]);
        }
    }
    Ok(output)
}

#[derive(Clone, Copy)]
struct ConvShape {
    cin: usize,
    cout: usize,
    k: usize,
    stride: usize,
    pad: usize,
}

/// Cross-correlation with zero padding and per-output-channel bias.
pub fn conv2d(input: &Tensor3, spec: &ConvSpec) -> Result<Tensor3> {
    conv_raw(
        input,
        ConvShape {
            cin: spec.in_channels,
            cout: spec.out_channels,
            k: spec.kernel_size,
            stride: spec.stride,
            pad: spec.padding,
        },
        &spec.weights,
        Some(&spec.bias),
    )
}

/// Gradient of a convolution with respect to its input: the transposed
/// convolution of `grad_out` with the layer's kernel.
pub(crate) fn conv2d_input_grad(
    grad_out: &Tensor3,
    spec: &ConvSpec,
    in_height: usize,
    in_width: usize,
) -> Result<Tensor3> {
    let k = spec.kernel_size;
    if spec.stride == 1 && spec.padding < k {
        let g = conv_raw(
            grad_out,
            ConvShape {
                cin: spec.out_channels,
                cout: spec.in_channels,
                k,
                stride: 1,
                pad: k - 1 - spec.padding,
            },
            spec.adjoint_weights(),
            None,
        )?;
        debug_assert_eq!((g.height(), g.width()), (in_height, in_width));
        return Ok(g);
    }
    // General stride: scatter each output gradient back through the kernel.
    let (oh, ow) = (grad_out.height(), grad_out.width());
    let mut grad = Tensor3::zeros(spec.in_channels, in_height, in_width);
    let pad = spec.padding as isize;
    for o in 0..spec.out_channels {
        for oy in 0..oh {
            for ox in 0..ow {
                let g = grad_out.get(o, oy, ox);
                if g == 0.0 {
                    continue;
                }
                for i in 0..spec.in_channels {
                    for ky in 0..k {
                        let iy = (oy * spec.stride + ky) as isize - pad;
                        if iy < 0 || iy >= in_height as isize {
                            continue;
                        }
                        for kx in 0..k {
                            let ix = (ox * spec.stride + kx) as isize - pad;
                            if ix < 0 || ix >= in_width as isize {
                                continue;
                            }
                            let idx = (i * in_height + iy as usize) * in_width + ix as usize;
                            grad.data_mut()[idx] += g * spec.weight(o, i, ky, kx);
                        }
                    }
                }
            }
        }
    }
    Ok(grad)
}

/// Halfwave rectification.
pub fn relu(input: &Tensor3) -> Tensor3 {
    input.map(|v| v.max(0.0))
}

pub(crate) fn relu_grad(grad_out: &Tensor3, output: &Tensor3) -> Tensor3 {
    let mut g = grad_out.clone();
    g.data_mut()
        .iter_mut()
        .zip(output.data())
        .for_each(|(g, &y)| {
            if y <= 0.0 {
                *g = 0.0;
            }
        });
    g
}

/// `out[c] = x[c] * scale[c] + shift[c]`.
pub fn affine_channels(input: &Tensor3, scale: &[f32], shift: &[f32]) -> Result<Tensor3> {
    if scale.len() != input.channels() || shift.len() != input.channels() {
        return Err(Error::shape(format!(
            "affine needs {} scale/shift entries",
            input.channels()
        )));
    }
    let mut out = input.clone();
    for c in 0..input.channels() {
        let (a, b) = (scale[c], shift[c]);
        out.plane_mut(c).iter_mut().for_each(|v| *v = *v * a + b);
    }
    Ok(out)
}

/// Symmetric 2-D Hanning window of odd `size`, normalized to unit sum,
/// returned row-major (`size × size`).
pub fn hanning_kernel(size: usize) -> Result<Vec<f32>> {
    let w = hanning_window(size)?;
    let mut k = Vec::with_capacity(size * size);
    for &a in &w {
        for &b in &w {
            k.push(a * b);
        }
    }
    Ok(k)
}

fn hanning_window(size: usize) -> Result<Vec<f32>> {
    if size < 3 || size % 2 == 0 {
        return Err(Error::invalid(format!(
            "Hanning window size must be odd and at least 3, got {size}"
        )));
    }
    let n = (size - 1) as f64;
    let raw: Vec<f64> = (0..size)
        .map(|i| 0.5 * (1.0 - (2.0 * std::f64::consts::PI * i as f64 / n).cos()))
        .collect();
    let total: f64 = raw.iter().sum();
    Ok(raw.iter().map(|v| (v / total) as f32).collect())
}

/// Separable blur window plus stride for weighted ℓ2 pooling.
#[derive(Clone, Debug, PartialEq)]
pub struct PoolSpec {
    window: Vec<f32>,
    stride: usize,
}

impl PoolSpec {
    /// Hanning blur of odd `size` with the given stride.
    pub fn hanning(size: usize, stride: usize) -> Result<Self> {
        Self::from_window(hanning_window(size)?, stride)
    }

    /// Builds a pool from a 1-D window; the 2-D kernel is its outer product.
    pub fn from_window(window: Vec<f32>, stride: usize) -> Result<Self> {
        if window.len() % 2 == 0 || stride == 0 {
            return Err(Error::invalid("pool window must be odd and stride positive"));
        }
        if window.iter().any(|&v| !(v >= 0.0)) {
            return Err(Error::invalid("pool window entries must be nonnegative"));
        }
        let total: f64 = window.iter().map(|&v| v as f64).sum();
        if (total * total - 1.0).abs() > 1e-6 {
            return Err(Error::invalid(format!(
                "pool kernel must sum to one, got {}",
                total * total
            )));
        }
        Ok(PoolSpec { window, stride })
    }

    pub fn size(&self) -> usize {
        self.window.len()
    }

    pub fn stride(&self) -> usize {
        self.stride
    }

    pub fn padding(&self) -> usize {
        (self.window.len() - 1) / 2
    }

    pub fn window(&self) -> &[f32] {
        &self.window
    }

    pub fn kernel(&self) -> Vec<f32> {
        let mut k = Vec::with_capacity(self.size() * self.size());
        for &a in &self.window {
            for &b in &self.window {
                k.push(a * b);
            }
        }
        k
    }

    pub fn output_len(&self, len: usize) -> usize {
        (len + 2 * self.padding() - self.size()) / self.stride + 1
    }
}

/// Taps `(u, weight)` with nonzero weight.
fn taps(window: &[f32]) -> Vec<(usize, f32)> {
    window
        .iter()
        .enumerate()
        .filter(|(_, &w)| w != 0.0)
        .map(|(u, &w)| (u, w))
        .collect()
}

/// Weighted ℓ2 pooling: `sqrt(ε + g * (x ⊙ x))` sampled on the stride grid.
pub fn l2pool(input: &Tensor3, pool: &PoolSpec) -> Tensor3 {
    let (c, h, w) = input.shape();
    let (oh, ow) = (pool.output_len(h), pool.output_len(w));
    let mut out = Tensor3::zeros(c, oh, ow);
    let taps = taps(&pool.window);
    let (s, p) = (pool.stride, pool.padding() as isize);
    par::for_each_chunk_mut(out.data_mut(), oh * ow, |ch, dst| {
        let src = input.plane(ch);
        let mut rows = vec![0.0f32; h * ow];
        for y in 0..h {
            let line = &src[y * w..(y + 1) * w];
            for ox in 0..ow {
                let mut acc = 0.0f32;
                for &(u, g) in &taps {
                    let ix = (ox * s + u) as isize - p;
                    if ix >= 0 && (ix as usize) < w {
                        let v = line[ix as usize];
                        acc += g * v * v;
                    }
                }
                rows[y * ow + ox] = acc;
            }
        }
        for oy in 0..oh {
            for ox in 0..ow {
                let mut acc = 0.0f32;
                for &(v, g) in &taps {
                    let iy = (oy * s + v) as isize - p;
                    if iy >= 0 && (iy as usize) < h {
                        acc += g * rows[iy as usize * ow + ox];
                    }
                }
                dst[oy * ow + ox] = (L2POOL_EPS + acc).sqrt();
            }
        }
    });
    out
}

pub(crate) fn l2pool_grad(
    grad_out: &Tensor3,
    input: &Tensor3,
    output: &Tensor3,
    pool: &PoolSpec,
) -> Tensor3 {
    let (c, h, w) = input.shape();
    let (oh, ow) = (output.height(), output.width());
    let taps = taps(&pool.window);
    let (s, p) = (pool.stride, pool.padding() as isize);
    let mut grad = Tensor3::zeros(c, h, w);
    par::for_each_chunk_mut(grad.data_mut(), h * w, |ch, dst| {
        let go = grad_out.plane(ch);
        let y = output.plane(ch);
        let x = input.plane(ch);
        // d/d(blur) of sqrt(ε + blur)
        let gb: Vec<f32> = go.iter().zip(y).map(|(&g, &y)| g / (2.0 * y)).collect();
        let mut grows = vec![0.0f32; h * ow];
        for oy in 0..oh {
            for &(v, g) in &taps {
                let iy = (oy * s + v) as isize - p;
                if iy < 0 || iy as usize >= h {
                    continue;
                }
                let row = &mut grows[iy as usize * ow..(iy as usize + 1) * ow];
                for ox in 0..ow {
                    row[ox] += g * gb[oy * ow + ox];
                }
            }
        }
        for yy in 0..h {
            for ox in 0..ow {
                let gr = grows[yy * ow + ox];
                if gr == 0.0 {
                    continue;
                }
                for &(u, g) in &taps {
                    let ix = (ox * s + u) as isize - p;
                    if ix >= 0 && (ix as usize) < w {
                        dst[yy * w + ix as usize] += g * gr;
                    }
                }
            }
        }
        dst.iter_mut().zip(x).for_each(|(d, &xv)| *d *= 2.0 * xv);
    });
    grad
}

/// 2×2 max pooling at stride 2. Partial windows at the far edges are kept,
/// so the output size matches [`l2pool`] with a stride-2 pool.
pub fn max_pool(input: &Tensor3) -> Tensor3 {
    max_pool_with_indices(input).0
}

pub(crate) fn max_pool_with_indices(input: &Tensor3) -> (Tensor3, Vec<u32>) {
    let (c, h, w) = input.shape();
    let (oh, ow) = (h.div_ceil(2), w.div_ceil(2));
    let mut out = Tensor3::zeros(c, oh, ow);
    let mut arg = vec![0u32; c * oh * ow];
    for ch in 0..c {
        let src = input.plane(ch);
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = f32::NEG_INFINITY;
                let mut best_i = 0usize;
                for y in 2 * oy..(2 * oy + 2).min(h) {
                    for x in 2 * ox..(2 * ox + 2).min(w) {
                        let v = src[y * w + x];
                        if v > best {
                            best = v;
                            best_i = y * w + x;
                        }
                    }
                }
                out.set(ch, oy, ox, best);
                arg[(ch * oh + oy) * ow + ox] = best_i as u32;
            }
        }
    }
    (out, arg)
}

pub(crate) fn max_pool_grad(grad_out: &Tensor3, argmax: &[u32], in_shape: (usize, usize, usize)) -> Tensor3 {
    let (c, h, w) = in_shape;
    let mut grad = Tensor3::zeros(c, h, w);
    let plane = grad_out.plane_len();
    for ch in 0..c {
        let dst = grad.plane_mut(ch);
        for (i, &g) in grad_out.plane(ch).iter().enumerate() {
            dst[argmax[ch * plane + i] as usize] += g;
        }
    }
    grad
}
