//! Crop-and-align: bounded similarity parameters, the 2×3 sampling matrix,
//! bilinear grid sampling and its derivative with respect to the alignment
//! parameters.
//!
//! Coordinates are normalized to `[-1, 1]` over pixel *edges*, so pixel `j`
//! of a width-`w` image has its centre at `(2j + 1) / w - 1`. The matrix maps
//! target coordinates to source coordinates.

use std::f64::consts::PI;
use std::path::Path;

use crate::error::{ensure_finite, validation, Result};
use crate::real::Real;

/// Grayscale image with `f32` pixels, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct GrayImage {
    h: usize,
    w: usize,
    pixels: Vec<f32>,
}

impl GrayImage {
    pub fn new(h: usize, w: usize, pixels: Vec<f32>) -> Result<Self> {
        if h == 0 || w == 0 {
            return Err(validation("image dimensions must be positive"));
        }
        if pixels.len() != h * w {
            return Err(validation(format!(
                "image buffer has {} pixels, expected {h}x{w}",
                pixels.len()
            )));
        }
        if pixels.iter().any(|p| !p.is_finite()) {
            return Err(validation("image pixels must be finite"));
        }
        Ok(GrayImage { h, w, pixels })
    }

    pub fn zeros(h: usize, w: usize) -> Self {
        assert!(h > 0 && w > 0, "image dimensions must be positive");
        GrayImage {
            h,
            w,
            pixels: vec![0.0; h * w],
        }
    }

    pub fn from_fn(h: usize, w: usize, mut f: impl FnMut(usize, usize) -> f32) -> Self {
        let mut img = Self::zeros(h, w);
        for y in 0..h {
            for x in 0..w {
                img.pixels[y * w + x] = f(y, x);
            }
        }
        img
    }

    pub fn height(&self) -> usize {
        self.h
    }

    pub fn width(&self) -> usize {
        self.w
    }

    pub fn pixels(&self) -> &[f32] {
        &self.pixels
    }

    pub fn pixels_mut(&mut self) -> &mut [f32] {
        &mut self.pixels
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize) -> f32 {
        self.pixels[y * self.w + x]
    }

    /// Loads an 8-bit grayscale PNG or PGM, mapping values to `[0, 1]`.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let img = image::open(path)?.to_luma8();
        let (w, h) = img.dimensions();
        let pixels = img.into_raw().into_iter().map(|p| p as f32 / 255.0).collect();
        GrayImage::new(h as usize, w as usize, pixels)
    }

    /// Quantizes to 8 bits and encodes in memory; `format` is picked from an
    /// extension such as `"png"` or `"pgm"`.
    pub fn encode(&self, extension: &str) -> Result<Vec<u8>> {
        let buf = self.to_luma8();
        let mut out = Vec::new();
        match extension.to_ascii_lowercase().as_str() {
            "pgm" => {
                let enc = image::codecs::pnm::PnmEncoder::new(&mut out)
                    .with_subtype(image::codecs::pnm::PnmSubtype::Graymap(
                        image::codecs::pnm::SampleEncoding::Binary,
                    ));
                image::ImageEncoder::write_image(
                    enc,
                    buf.as_raw(),
                    self.w as u32,
                    self.h as u32,
                    image::ExtendedColorType::L8,
                )?;
            }
            "png" => {
                buf.write_to(&mut std::io::Cursor::new(&mut out), image::ImageFormat::Png)?;
            }
            other => return Err(validation(format!("unsupported image extension {other:?}"))),
        }
        Ok(out)
    }

    fn to_luma8(&self) -> image::GrayImage {
        let raw = self
            .pixels
            .iter()
            .map(|p| (p.clamp(0.0, 1.0) * 255.0).round() as u8)
            .collect();
        image::GrayImage::from_raw(self.w as u32, self.h as u32, raw).expect("buffer size matches")
    }

    /// Writes PNG or PGM (by extension) atomically.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let ext = path.extension().and_then(|e| e.to_str()).unwrap_or("");
        let bytes = self.encode(ext)?;
        crate::io::write_atomic(path, &bytes)
    }
}

/// Parameter bounds for the localization output.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct AlignmentBounds {
    /// Maximum |tx|, |ty| in input pixels.
    pub max_translation: f64,
    /// Maximum |theta| in radians.
    pub max_rotation: f64,
    /// Side of the square crop window in input pixels.
    pub window: f64,
}

impl AlignmentBounds {
    pub const REFERENCE_SIDE: f64 = 448.0;

    /// Bounds for a 448×448 input: ±224 px, ±60°, 285 px window.
    pub const fn reference() -> Self {
        AlignmentBounds {
            max_translation: 224.0,
            max_rotation: PI / 3.0,
            window: 285.0,
        }
    }

    /// Reference bounds rescaled for a square input of side `side` pixels.
    pub fn scaled_to(side: usize) -> Self {
        let f = side as f64 / Self::REFERENCE_SIDE;
        let r = Self::reference();
        AlignmentBounds {
            max_translation: r.max_translation * f,
            max_rotation: r.max_rotation,
            window: r.window * f,
        }
    }
}

impl Default for AlignmentBounds {
    fn default() -> Self {
        Self::reference()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct AlignmentParams {
    pub tx: f64,
    pub ty: f64,
    pub theta: f64,
    pub window: f64,
}

impl AlignmentParams {
    /// Saturating clamp into `bounds`.
    pub fn clamped(raw_tx: f64, raw_ty: f64, raw_theta: f64, bounds: &AlignmentBounds) -> Result<Self> {
        ensure_finite("tx", raw_tx)?;
        ensure_finite("ty", raw_ty)?;
        ensure_finite("theta", raw_theta)?;
        let t = bounds.max_translation;
        let r = bounds.max_rotation;
        Ok(AlignmentParams {
            tx: raw_tx.clamp(-t, t),
            ty: raw_ty.clamp(-t, t),
            theta: raw_theta.clamp(-r, r),
            window: bounds.window,
        })
    }

    /// Parameters without any clamping; for tests and synthetic warps.
    pub fn unclamped(tx: f64, ty: f64, theta: f64, window: f64) -> Self {
        AlignmentParams { tx, ty, theta, window }
    }
}

/// Clamps raw localization outputs into the reference bounds
/// (±224 px, ±π/3, 285 px window).
pub fn clamp_params(raw_tx: f64, raw_ty: f64, raw_theta: f64) -> Result<AlignmentParams> {
    AlignmentParams::clamped(raw_tx, raw_ty, raw_theta, &AlignmentBounds::reference())
}

/// Row-major 2×3 matrix acting on normalized `(x, y, 1)`.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct AffineMatrix {
    pub m: [[f64; 3]; 2],
}

impl AffineMatrix {
    pub const fn identity() -> Self {
        AffineMatrix {
            m: [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]],
        }
    }

    /// Scaled rotation plus translation, all in normalized units.
    pub fn similarity(scale_x: f64, scale_y: f64, theta: f64, tx: f64, ty: f64) -> Self {
        let (s, c) = theta.sin_cos();
        AffineMatrix {
            m: [
                [scale_x * c, -scale_x * s, tx],
                [scale_y * s, scale_y * c, ty],
            ],
        }
    }

    pub fn apply(&self, x: f64, y: f64) -> (f64, f64) {
        let m = &self.m;
        (
            m[0][0] * x + m[0][1] * y + m[0][2],
            m[1][0] * x + m[1][1] * y + m[1][2],
        )
    }

    pub fn inverse(&self) -> Option<Self> {
        let m = &self.m;
        let det = m[0][0] * m[1][1] - m[0][1] * m[1][0];
        if det.abs() < 1e-300 {
            return None;
        }
        let (a, b, c, d) = (m[1][1] / det, -m[0][1] / det, -m[1][0] / det, m[0][0] / det);
        Some(AffineMatrix {
            m: [
                [a, b, -(a * m[0][2] + b * m[1][2])],
                [c, d, -(c * m[0][2] + d * m[1][2])],
            ],
        })
    }

    /// The equivalent map in pixel coordinates between a `out_h × out_w`
    /// target and a `in_h × in_w` source. Arranged so the identity matrix on
    /// equal sizes yields exactly integer source coordinates.
    fn to_pixel(self, in_h: usize, in_w: usize, out_h: usize, out_w: usize) -> PixelMap {
        let m = &self.m;
        let (w, h) = (in_w as f64, in_h as f64);
        let (ow, oh) = (out_w as f64, out_h as f64);
        let row = |r: &[f64; 3], side: f64| -> [f64; 3] {
            [
                side * r[0] / ow,
                side * r[1] / oh,
                side / 2.0 * (r[2] + 1.0 - r[0] - r[1]) + side * r[0] / (2.0 * ow)
                    + side * r[1] / (2.0 * oh)
                    - 0.5,
            ]
        };
        PixelMap {
            x: row(&m[0], w),
            y: row(&m[1], h),
        }
    }
}

#[derive(Debug, Clone, Copy)]
struct PixelMap {
    x: [f64; 3],
    y: [f64; 3],
}

impl PixelMap {
    #[inline]
    fn apply(&self, col: usize, row: usize) -> (f64, f64) {
        let (j, i) = (col as f64, row as f64);
        (
            self.x[0] * j + self.x[1] * i + self.x[2],
            self.y[0] * j + self.y[1] * i + self.y[2],
        )
    }
}

/// Builds the sampling matrix for a `h_in × w_in` input: scale is
/// `window / w_in` horizontally and `window / h_in` vertically, and the
/// translation is converted from pixels to normalized units.
pub fn build_affine(params: &AlignmentParams, w_in: usize, h_in: usize) -> AffineMatrix {
    let (w, h) = (w_in as f64, h_in as f64);
    AffineMatrix::similarity(
        params.window / w,
        params.window / h,
        params.theta,
        2.0 * params.tx / w,
        2.0 * params.ty / h,
    )
}

/// What the sampler reads outside the source image.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
pub enum Padding {
    #[default]
    Zeros,
    Border,
}

struct Source<'a, T> {
    data: &'a [T],
    h: usize,
    w: usize,
    padding: Padding,
}

impl<T: Real> Source<'_, T> {
    #[inline]
    fn at(&self, x: isize, y: isize) -> T {
        let (w, h) = (self.w as isize, self.h as isize);
        match self.padding {
            Padding::Zeros => {
                if x < 0 || y < 0 || x >= w || y >= h {
                    T::zero()
                } else {
                    self.data[y as usize * self.w + x as usize]
                }
            }
            Padding::Border => {
                let (x, y) = (x.clamp(0, w - 1), y.clamp(0, h - 1));
                self.data[y as usize * self.w + x as usize]
            }
        }
    }

    /// Bilinear value and its partials at pixel coordinates `(x, y)`.
    /// At exact integers the left/top interval is used.
    #[inline]
    fn sample(&self, x: f64, y: f64) -> (T, T, T) {
        let (x0, fx) = split_left(x);
        let (y0, fy) = split_left(y);
        let i00 = self.at(x0, y0);
        let i10 = self.at(x0 + 1, y0);
        let i01 = self.at(x0, y0 + 1);
        let i11 = self.at(x0 + 1, y0 + 1);
        let (fx, fy) = (T::of(fx), T::of(fy));
        let one = T::one();
        let v = (one - fx) * (one - fy) * i00
            + fx * (one - fy) * i10
            + (one - fx) * fy * i01
            + fx * fy * i11;
        let dx = (one - fy) * (i10 - i00) + fy * (i11 - i01);
        let dy = (one - fx) * (i01 - i00) + fx * (i11 - i10);
        (v, dx, dy)
    }
}

#[inline]
fn split_left(x: f64) -> (isize, f64) {
    let f = x.floor();
    if f == x {
        (f as isize - 1, 1.0)
    } else {
        (f as isize, x - f)
    }
}

/// Bilinear resampling of a raw row-major buffer; the core shared by
/// [`grid_sample`] and the network's alignment stage.
#[allow(clippy::too_many_arguments)]
pub fn sample_buffer<T: Real>(
    src: &[T],
    in_h: usize,
    in_w: usize,
    a: &AffineMatrix,
    padding: Padding,
    out_h: usize,
    out_w: usize,
    out: &mut [T],
) {
    assert_eq!(src.len(), in_h * in_w);
    assert_eq!(out.len(), out_h * out_w);
    let map = a.to_pixel(in_h, in_w, out_h, out_w);
    let source = Source { data: src, h: in_h, w: in_w, padding };
    for i in 0..out_h {
        for j in 0..out_w {
            let (x, y) = map.apply(j, i);
            out[i * out_w + j] = source.sample(x, y).0;
        }
    }
}

/// Gradient of `Σ out_grad · sample(src, A(params))` with respect to
/// `(tx, ty, theta)`, for a raw row-major buffer.
#[allow(clippy::too_many_arguments)]
pub fn sample_buffer_backward<T: Real>(
    src: &[T],
    in_h: usize,
    in_w: usize,
    params: &AlignmentParams,
    padding: Padding,
    out_grad: &[T],
    out_h: usize,
    out_w: usize,
) -> [T; 3] {
    assert_eq!(src.len(), in_h * in_w);
    assert_eq!(out_grad.len(), out_h * out_w);
    let a = build_affine(params, in_w, in_h);
    let map = a.to_pixel(in_h, in_w, out_h, out_w);
    let source = Source { data: src, h: in_h, w: in_w, padding };
    let (w, h) = (in_w as f64, in_h as f64);
    let (sx, sy) = (params.window / w, params.window / h);
    let (s, c) = params.theta.sin_cos();
    let mut g = [T::zero(); 3];
    for i in 0..out_h {
        let yn = (2 * i + 1) as f64 / out_h as f64 - 1.0;
        for j in 0..out_w {
            let og = out_grad[i * out_w + j];
            if og == T::zero() {
                continue;
            }
            let xn = (2 * j + 1) as f64 / out_w as f64 - 1.0;
            let (x, y) = map.apply(j, i);
            let (_, dvdx, dvdy) = source.sample(x, y);
            // d(pixel x)/d tx = 1 and d(pixel y)/d ty = 1.
            let dxdt = w / 2.0 * (-sx * s * xn - sx * c * yn);
            let dydt = h / 2.0 * (sy * c * xn - sy * s * yn);
            g[0] += og * dvdx;
            g[1] += og * dvdy;
            g[2] += og * (dvdx * T::of(dxdt) + dvdy * T::of(dydt));
        }
    }
    g
}

/// Resamples `image` through `a` into an `out_h × out_w` image, zero padded.
pub fn grid_sample(image: &GrayImage, a: &AffineMatrix, out_h: usize, out_w: usize) -> Result<GrayImage> {
    grid_sample_with(image, a, out_h, out_w, Padding::Zeros)
}

pub fn grid_sample_with(
    image: &GrayImage,
    a: &AffineMatrix,
    out_h: usize,
    out_w: usize,
    padding: Padding,
) -> Result<GrayImage> {
    if out_h == 0 || out_w == 0 {
        return Err(validation("output dimensions must be positive"));
    }
    let mut out = vec![0.0f32; out_h * out_w];
    sample_buffer(image.pixels(), image.h, image.w, a, padding, out_h, out_w, &mut out);
    GrayImage::new(out_h, out_w, out)
}

/// `∂L/∂(tx, ty, theta)` given `∂L/∂output` for the zero-padded sampler
/// driven by `params`.
pub fn grid_sample_backward(image: &GrayImage, params: &AlignmentParams, out_grad: &GrayImage) -> [f64; 3] {
    let g = sample_buffer_backward(
        image.pixels(),
        image.h,
        image.w,
        params,
        Padding::Zeros,
        out_grad.pixels(),
        out_grad.h,
        out_grad.w,
    );
    [g[0].f64(), g[1].f64(), g[2].f64()]
}

/// Gradient in `f64` for an `f64` image; used by verification code.
pub fn grid_sample_backward_f64(
    src: &[f64],
    in_h: usize,
    in_w: usize,
    params: &AlignmentParams,
    out_grad: &[f64],
    out_h: usize,
    out_w: usize,
) -> [f64; 3] {
    sample_buffer_backward(src, in_h, in_w, params, Padding::Zeros, out_grad, out_h, out_w)
}

/// Clamps, builds the matrix and samples a `out_h × out_w` aligned image.
pub fn align(image: &GrayImage, params: &AlignmentParams, out_h: usize, out_w: usize) -> Result<GrayImage> {
    let a = build_affine(params, image.w, image.h);
    grid_sample(image, &a, out_h, out_w)
}
