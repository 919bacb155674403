//! Image-based representations fed to the attention stream: windowed FFT power,
//! the local-pattern maturity map and Sobel gradient magnitude.
//!
//! FFT power and the maturity map share one window grid (96×96 windows at
//! stride 8 by default), so the two channels are spatially registered.

use image::imageops::{self, FilterType};
use image::{ImageBuffer, Luma};
use ndarray::{s, Array2, Array3, ArrayView2};
use rustfft::num_complex::Complex64;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};
use std::sync::Arc;

use crate::dataset::CellImage;
use crate::error::{Error, Result};
use crate::patchnet::MaturityMap;

pub const DEFAULT_WINDOW: usize = 96;
pub const DEFAULT_STEP: usize = 8;
pub const STACK_SIZE: usize = 224;

/// Maps any integer index into `0..len` by mirror reflection about the edge
/// pixels (no edge repetition), periodic with period `2(len-1)`.
fn reflect_index(i: isize, len: usize) -> usize {
    if len == 1 {
        return 0;
    }
    let period = 2 * (len as isize - 1);
    let m = i.rem_euclid(period);
    if m < len as isize {
        m as usize
    } else {
        (period - m) as usize
    }
}

/// Reflect-pads `pixels` so that both dimensions are at least `min_size`.
/// Padding is split evenly with the extra pixel after.
pub fn reflect_pad_to(pixels: &Array2<f64>, min_size: usize) -> Array2<f64> {
    let (h, w) = pixels.dim();
    if h >= min_size && w >= min_size {
        return pixels.clone();
    }
    let (ph, pw) = (h.max(min_size), w.max(min_size));
    let (top, left) = (((ph - h) / 2) as isize, ((pw - w) / 2) as isize);
    Array2::from_shape_fn((ph, pw), |(y, x)| {
        pixels[(
            reflect_index(y as isize - top, h),
            reflect_index(x as isize - left, w),
        )]
    })
}

/// Number of window positions along one axis: `floor((len - n) / step) + 1`.
pub fn grid_len(len: usize, n: usize, step: usize) -> usize {
    (len.max(n) - n) / step + 1
}

/// Square windows of size `n` at stride `step` over a (possibly padded) image.
#[derive(Debug, Clone)]
pub struct WindowGrid {
    pub n: usize,
    pub step: usize,
    pub rows: usize,
    pub cols: usize,
    padded: Array2<f64>,
}

impl WindowGrid {
    /// The window at grid position `(row, col)`, i.e. pixels starting at `(row·step, col·step)`.
    pub fn window(&self, row: usize, col: usize) -> ArrayView2<'_, f64> {
        let (y, x) = (row * self.step, col * self.step);
        self.padded.slice(s![y..y + self.n, x..x + self.n])
    }

    pub fn padded(&self) -> &Array2<f64> {
        &self.padded
    }

    pub fn positions(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        (0..self.rows).flat_map(move |r| (0..self.cols).map(move |c| (r, c)))
    }
}

pub fn tile_windows(image: &CellImage, n: usize, step: usize) -> Result<WindowGrid> {
    if n == 0 || step == 0 {
        return Err(Error::Config(format!(
            "window size {n} and step {step} must be positive"
        )));
    }
    let padded = reflect_pad_to(image.pixels(), n);
    let (h, w) = padded.dim();
    Ok(WindowGrid {
        n,
        step,
        rows: grid_len(h, n, step),
        cols: grid_len(w, n, step),
        padded,
    })
}

/// Reusable planner state for square 2-D transforms of one size.
pub struct Dft2 {
    n: usize,
    fft: Arc<dyn Fft<f64>>,
    scratch: Vec<Complex64>,
}

impl Dft2 {
    pub fn new(n: usize) -> Self {
        let fft = FftPlanner::new().plan_fft_forward(n);
        let scratch = vec![Complex64::default(); fft.get_inplace_scratch_len()];
        Dft2 { n, fft, scratch }
    }

    /// Unnormalized forward transform
    /// `X(u,v) = Σ_p Σ_q w(p,q) e^{-2πi(up/n + vq/n)}`, returned with `u` as the row index.
    pub fn transform(&mut self, window: ArrayView2<f64>) -> Result<Array2<Complex64>> {
        let (h, w) = window.dim();
        if h != w || h != self.n {
            return Err(Error::Shape(format!(
                "expected {n}x{n} window, got {h}x{w}",
                n = self.n
            )));
        }
        let n = self.n;
        let mut buf: Vec<Complex64> = window.iter().map(|&v| Complex64::new(v, 0.0)).collect();
        // rows (transform over q)
        for row in buf.chunks_exact_mut(n) {
            self.fft.process_with_scratch(row, &mut self.scratch);
        }
        // columns (transform over p) on the transpose
        let mut cols = vec![Complex64::default(); n * n];
        transpose::transpose(&buf, &mut cols, n, n);
        for col in cols.chunks_exact_mut(n) {
            self.fft.process_with_scratch(col, &mut self.scratch);
        }
        transpose::transpose(&cols, &mut buf, n, n);
        Ok(Array2::from_shape_vec((n, n), buf).expect("n*n buffer"))
    }
}

/// Two-dimensional DFT of a square window.
pub fn dft2(window: ArrayView2<f64>) -> Result<Array2<Complex64>> {
    let (h, w) = window.dim();
    if h != w {
        return Err(Error::Shape(format!("dft2 needs a square window, got {h}x{w}")));
    }
    Dft2::new(h).transform(window)
}

/// Per-window total spectral power `P(j,k) = Σ_{u,v} |X(u,v)|²`.
#[derive(Debug, Clone, PartialEq)]
pub struct FftPowerImage {
    pub id: String,
    pub values: Array2<f64>,
    pub dc_excluded: bool,
}

/// Windowed FFT power map. With `exclude_dc` the `(0,0)` term is left out of
/// each window's sum; otherwise the sum runs over all frequencies.
pub fn fft_power_map(
    image: &CellImage,
    n: usize,
    step: usize,
    exclude_dc: bool,
) -> Result<FftPowerImage> {
    let grid = tile_windows(image, n, step)?;
    let mut dft = Dft2::new(n);
    let mut values = Array2::zeros((grid.rows, grid.cols));
    for (r, c) in grid.positions() {
        let spectrum = dft.transform(grid.window(r, c))?;
        let mut p: f64 = spectrum.iter().map(|z| z.norm_sqr()).sum();
        if exclude_dc {
            p -= spectrum[(0, 0)].norm_sqr();
            p = p.max(0.0);
        }
        values[(r, c)] = p;
    }
    Ok(FftPowerImage {
        id: image.id.clone(),
        values,
        dc_excluded: exclude_dc,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradientMagnitudeImage {
    pub id: String,
    pub values: Array2<f64>,
}

/// Sobel gradient magnitude `sqrt(Gx² + Gy²)` with kernels
///
/// ```text
/// Gx = [-1 0 1; -2 0 2; -1 0 1]    Gy = [-1 -2 -1; 0 0 0; 1 2 1]
/// ```
///
/// applied as a correlation (x along columns, y along rows) with one pixel of
/// replicate padding, so the output has the input's size.
pub fn sobel_gradient_magnitude(image: &CellImage) -> Result<GradientMagnitudeImage> {
    let px = image.pixels();
    let (h, w) = px.dim();
    if h < 3 || w < 3 {
        return Err(Error::Shape(format!(
            "Sobel needs at least 3x3 pixels, got {h}x{w}"
        )));
    }
    let at = |y: isize, x: isize| -> f64 {
        px[(
            y.clamp(0, h as isize - 1) as usize,
            x.clamp(0, w as isize - 1) as usize,
        )]
    };
    let values = Array2::from_shape_fn((h, w), |(y, x)| {
        let (y, x) = (y as isize, x as isize);
        let p = |i: isize, j: isize| at(y + i - 1, x + j - 1);
        // Written so that transposing the image swaps gx and gy term for term.
        let gx = (p(0, 2) - p(0, 0)) + 2.0 * (p(1, 2) - p(1, 0)) + (p(2, 2) - p(2, 0));
        let gy = (p(2, 0) - p(0, 0)) + 2.0 * (p(2, 1) - p(0, 1)) + (p(2, 2) - p(0, 2));
        (gx * gx + gy * gy).sqrt()
    });
    Ok(GradientMagnitudeImage {
        id: image.id.clone(),
        values,
    })
}

fn to_luma32(values: &Array2<f64>) -> ImageBuffer<Luma<f32>, Vec<f32>> {
    let (h, w) = values.dim();
    ImageBuffer::from_fn(w as u32, h as u32, |x, y| {
        Luma([values[(y as usize, x as usize)] as f32])
    })
}

fn from_luma32(buf: &ImageBuffer<Luma<f32>, Vec<f32>>) -> Array2<f64> {
    let (w, h) = buf.dimensions();
    Array2::from_shape_fn((h as usize, w as usize), |(y, x)| {
        buf.get_pixel(x as u32, y as u32)[0] as f64
    })
}

/// Bilinear (triangle-filter) resize.
pub fn resize_bilinear(values: &Array2<f64>, height: usize, width: usize) -> Array2<f64> {
    if values.dim() == (height, width) {
        return values.clone();
    }
    let out = imageops::resize(&to_luma32(values), width as u32, height as u32, FilterType::Triangle);
    from_luma32(&out)
}

/// Nearest-neighbour resize; output values are a subset of the input values.
pub fn resize_nearest<T: Copy>(values: &Array2<T>, height: usize, width: usize) -> Array2<T> {
    let (h, w) = values.dim();
    Array2::from_shape_fn((height, width), |(y, x)| {
        let sy = ((y as f64 + 0.5) * h as f64 / height as f64).floor() as usize;
        let sx = ((x as f64 + 0.5) * w as f64 / width as f64).floor() as usize;
        values[(sy.min(h - 1), sx.min(w - 1))]
    })
}

/// Per-image min-max scaling to `[0, 1]`; constant inputs map to 0.
fn min_max(values: &mut Array2<f64>) -> (f64, f64) {
    let min = values.iter().copied().fold(f64::INFINITY, f64::min);
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let range = max - min;
    values.mapv_inplace(|v| if range > 0.0 { ((v - min) / range).clamp(0.0, 1.0) } else { 0.0 });
    (min, max)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ChannelTransform {
    /// `log1p`, bilinear resize, then min-max.
    Log1pMinMax,
    /// Bilinear resize, then min-max.
    MinMax,
    /// Nearest-neighbour resize, then division by the largest class id.
    DivideByMaxClass,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ChannelNorm {
    pub transform: ChannelTransform,
    /// Value mapped to 0 (after any log transform).
    pub min: f64,
    /// Value mapped to 1.
    pub max: f64,
}

/// Channel order of [`RepresentationStack`].
pub const STACK_CHANNELS: [&str; 3] = ["fft_power", "maturity_map", "gradient_magnitude"];

/// Three registered channels at 224×224, each in `[0, 1]`, ordered
/// (FFT power, maturity map, gradient magnitude).
#[derive(Debug, Clone, PartialEq)]
pub struct RepresentationStack {
    pub id: String,
    /// `(channel, y, x)`
    pub channels: Array3<f32>,
    pub norms: [ChannelNorm; 3],
}

pub fn assemble_stack(
    fft: &FftPowerImage,
    maturity: &MaturityMap,
    grad: &GradientMagnitudeImage,
) -> Result<RepresentationStack> {
    if fft.id != maturity.id || fft.id != grad.id {
        return Err(Error::Consistency(format!(
            "representations come from different images: {:?}, {:?}, {:?}",
            fft.id, maturity.id, grad.id
        )));
    }
    let size = STACK_SIZE;

    let mut fft_ch = resize_bilinear(&fft.values.mapv(f64::ln_1p), size, size);
    let (fmin, fmax) = min_max(&mut fft_ch);

    let mat_ch = resize_nearest(&maturity.values, size, size)
        .mapv(|v| v as f64 / MaturityMap::MAX_CLASS as f64);

    let mut grad_ch = resize_bilinear(&grad.values, size, size);
    let (gmin, gmax) = min_max(&mut grad_ch);

    let mut channels = Array3::zeros((3, size, size));
    for (c, ch) in [&fft_ch, &mat_ch, &grad_ch].into_iter().enumerate() {
        channels
            .slice_mut(s![c, .., ..])
            .assign(&ch.mapv(|v| v as f32));
    }
    Ok(RepresentationStack {
        id: fft.id.clone(),
        channels,
        norms: [
            ChannelNorm { transform: ChannelTransform::Log1pMinMax, min: fmin, max: fmax },
            ChannelNorm {
                transform: ChannelTransform::DivideByMaxClass,
                min: 0.0,
                max: MaturityMap::MAX_CLASS as f64,
            },
            ChannelNorm { transform: ChannelTransform::MinMax, min: gmin, max: gmax },
        ],
    })
}

/// Raw-stream input: per-image min-max to `[0, 1]`, bilinear resize to 224×224.
/// The single channel is replicated to three when batched.
pub fn raw_input(image: &CellImage) -> Array2<f32> {
    let mut px = image.pixels().clone();
    min_max(&mut px);
    resize_bilinear(&px, STACK_SIZE, STACK_SIZE).mapv(|v| v.clamp(0.0, 1.0) as f32)
}
