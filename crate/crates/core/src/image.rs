//! Dense planar image primitives shared by every module.
//!
//! Layout is planar row-major: `data[c * h * w + y * w + x]`. Values live in
//! linear radiometric space unless tagged otherwise; HDR values are unbounded
//! above and only clamped when written to an 8-bit file.

use crate::error::{Error, Result};

/// Interpretation tag for pixel values.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ColorSpace {
    /// Linear radiometric values.
    Linear,
    /// Gamma-encoded sRGB values in [0,1].
    Srgb,
    /// Non-color data (masks, roughness, encoded normals).
    Data,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    channels: usize,
    height: usize,
    width: usize,
    data: Vec<f32>,
    color_space: ColorSpace,
}

impl Image {
    pub fn new(channels: usize, height: usize, width: usize, color_space: ColorSpace) -> Self {
        Image { channels, height, width, data: vec![0.0; channels * height * width], color_space }
    }

    pub fn from_data(
        channels: usize,
        height: usize,
        width: usize,
        data: Vec<f32>,
        color_space: ColorSpace,
    ) -> Result<Self> {
        if data.len() != channels * height * width {
            return Err(Error::ShapeMismatch(format!(
                "image data length {} != {}x{}x{}",
                data.len(),
                channels,
                height,
                width
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("image data".into()));
        }
        Ok(Image { channels, height, width, data, color_space })
    }

    pub fn filled(
        channels: usize,
        height: usize,
        width: usize,
        value: f32,
        color_space: ColorSpace,
    ) -> Self {
        Image { channels, height, width, data: vec![value; channels * height * width], color_space }
    }

    pub fn channels(&self) -> usize {
        self.channels
    }
    pub fn height(&self) -> usize {
        self.height
    }
    pub fn width(&self) -> usize {
        self.width
    }
    pub fn color_space(&self) -> ColorSpace {
        self.color_space
    }
    pub fn data(&self) -> &[f32] {
        &self.data
    }
    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }
    pub fn pixel_count(&self) -> usize {
        self.height * self.width
    }

    pub fn with_color_space(mut self, cs: ColorSpace) -> Self {
        self.color_space = cs;
        self
    }

    /// One channel plane as a slice.
    pub fn plane(&self, c: usize) -> &[f32] {
        let hw = self.height * self.width;
        &self.data[c * hw..(c + 1) * hw]
    }

    pub fn plane_mut(&mut self, c: usize) -> &mut [f32] {
        let hw = self.height * self.width;
        &mut self.data[c * hw..(c + 1) * hw]
    }

    #[inline]
    pub fn get(&self, c: usize, y: usize, x: usize) -> f32 {
        self.data[(c * self.height + y) * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, c: usize, y: usize, x: usize, v: f32) {
        self.data[(c * self.height + y) * self.width + x] = v;
    }

    pub fn same_shape(&self, other: &Image) -> bool {
        self.channels == other.channels && self.height == other.height && self.width == other.width
    }

    pub fn check_same_shape(&self, other: &Image, what: &str) -> Result<()> {
        if !self.same_shape(other) {
            return Err(Error::ShapeMismatch(format!(
                "{what}: {}x{}x{} vs {}x{}x{}",
                self.channels, self.height, self.width, other.channels, other.height, other.width
            )));
        }
        Ok(())
    }

    pub fn map(&self, f: impl Fn(f32) -> f32) -> Image {
        let mut out = self.clone();
        for v in out.data.iter_mut() {
            *v = f(*v);
        }
        out
    }

    pub fn zip_map(&self, other: &Image, f: impl Fn(f32, f32) -> f32) -> Result<Image> {
        self.check_same_shape(other, "zip_map")?;
        let mut out = self.clone();
        for (v, &o) in out.data.iter_mut().zip(other.data.iter()) {
            *v = f(*v, o);
        }
        Ok(out)
    }

    pub fn scaled(&self, k: f32) -> Image {
        self.map(|v| v * k)
    }

    pub fn max_abs_diff(&self, other: &Image) -> f32 {
        self.data
            .iter()
            .zip(other.data.iter())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0f32, f32::max)
    }

    /// Relative L2 distance: ||a-b|| / ||b|| (0 when both are zero).
    pub fn relative_l2(&self, reference: &Image) -> f64 {
        let mut num = 0.0f64;
        let mut den = 0.0f64;
        for (&a, &b) in self.data.iter().zip(reference.data.iter()) {
            num += ((a - b) as f64).powi(2);
            den += (b as f64).powi(2);
        }
        if den == 0.0 {
            return if num == 0.0 { 0.0 } else { f64::INFINITY };
        }
        (num / den).sqrt()
    }

    /// Replicate a single-channel image across `n` channels.
    pub fn replicate(&self, n: usize) -> Result<Image> {
        if self.channels != 1 {
            return Err(Error::InvalidArgument("replicate expects 1 channel".into()));
        }
        let mut data = Vec::with_capacity(n * self.height * self.width);
        for _ in 0..n {
            data.extend_from_slice(&self.data);
        }
        Image::from_data(n, self.height, self.width, data, self.color_space)
    }

    /// Extract one channel as a new single-channel image.
    pub fn channel(&self, c: usize) -> Image {
        Image {
            channels: 1,
            height: self.height,
            width: self.width,
            data: self.plane(c).to_vec(),
            color_space: self.color_space,
        }
    }
}

/// Normal map: a 3-channel image storing unit camera-space vectors encoded
/// as (n+1)/2. Decoding is `n = 2x - 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct NormalMap(Image);

impl NormalMap {
    pub fn from_image(image: Image) -> Result<Self> {
        if image.channels() != 3 {
            return Err(Error::InvalidArgument(format!(
                "normal map needs 3 channels, got {}",
                image.channels()
            )));
        }
        Ok(NormalMap(image))
    }

    /// Build from already-decoded vectors. Pixels with `mask == 0` store the
    /// zero vector (encoded 0.5).
    pub fn from_vectors(height: usize, width: usize, vectors: &[[f32; 3]]) -> Result<Self> {
        if vectors.len() != height * width {
            return Err(Error::ShapeMismatch("normal vector count".into()));
        }
        let mut img = Image::new(3, height, width, ColorSpace::Data);
        for (i, n) in vectors.iter().enumerate() {
            let (y, x) = (i / width, i % width);
            for c in 0..3 {
                img.set(c, y, x, 0.5 * (n[c] + 1.0));
            }
        }
        Ok(NormalMap(img))
    }

    pub fn image(&self) -> &Image {
        &self.0
    }

    pub fn into_image(self) -> Image {
        self.0
    }

    pub fn height(&self) -> usize {
        self.0.height()
    }
    pub fn width(&self) -> usize {
        self.0.width()
    }

    /// Decoded vector at a pixel; not renormalized.
    #[inline]
    pub fn vector(&self, y: usize, x: usize) -> [f32; 3] {
        [
            2.0 * self.0.get(0, y, x) - 1.0,
            2.0 * self.0.get(1, y, x) - 1.0,
            2.0 * self.0.get(2, y, x) - 1.0,
        ]
    }

    /// Check the unit-norm invariant wherever `mask` is 1.
    pub fn check_unit_norm(&self, mask: &Image, tol: f32) -> Result<()> {
        for y in 0..self.height() {
            for x in 0..self.width() {
                if mask.get(0, y, x) > 0.5 {
                    let n = self.vector(y, x);
                    let len = (n[0] * n[0] + n[1] * n[1] + n[2] * n[2]).sqrt();
                    if (len - 1.0).abs() > tol {
                        return Err(Error::InvalidArgument(format!(
                            "normal at ({y},{x}) has norm {len}"
                        )));
                    }
                }
            }
        }
        Ok(())
    }
}

/// Bilinear sampling of `src` at normalized coordinates in [-1,1]
/// (align-corners = false). The horizontal axis wraps (equirectangular
/// longitude is periodic); the vertical axis clamps to the edge rows.
///
/// `uv` must be a 2-channel image; channel 0 is u (horizontal), channel 1 is
/// v (vertical). The output has `src.channels()` channels and the spatial
/// shape of `uv`.
pub fn grid_sample(src: &Image, uv: &Image) -> Result<Image> {
    if src.pixel_count() == 0 {
        return Err(Error::InvalidArgument("grid_sample: empty source".into()));
    }
    if uv.channels() != 2 {
        return Err(Error::InvalidArgument(format!(
            "grid_sample: uv needs 2 channels, got {}",
            uv.channels()
        )));
    }
    if uv.data().iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("grid_sample uv".into()));
    }
    let (h, w) = (src.height(), src.width());
    let (oh, ow) = (uv.height(), uv.width());
    let mut out = Image::new(src.channels(), oh, ow, src.color_space());
    for y in 0..oh {
        for x in 0..ow {
            let u = uv.get(0, y, x);
            let v = uv.get(1, y, x);
            // Pixel-center coordinates; u=-1 is the left edge, u=+1 the right.
            let px = (u as f64 + 1.0) * 0.5 * w as f64 - 0.5;
            let py = (v as f64 + 1.0) * 0.5 * h as f64 - 0.5;
            let x0 = px.floor();
            let y0 = py.floor();
            let fx = (px - x0) as f32;
            let fy = (py - y0) as f32;
            let xi = x0 as i64;
            let yi = y0 as i64;
            let xa = wrap_index(xi, w);
            let xb = wrap_index(xi + 1, w);
            let ya = clamp_index(yi, h);
            let yb = clamp_index(yi + 1, h);
            for c in 0..src.channels() {
                let v00 = src.get(c, ya, xa);
                let v01 = src.get(c, ya, xb);
                let v10 = src.get(c, yb, xa);
                let v11 = src.get(c, yb, xb);
                let top = v00 + (v01 - v00) * fx;
                let bot = v10 + (v11 - v10) * fx;
                out.set(c, y, x, top + (bot - top) * fy);
            }
        }
    }
    Ok(out)
}

#[inline]
fn wrap_index(i: i64, n: usize) -> usize {
    i.rem_euclid(n as i64) as usize
}

#[inline]
fn clamp_index(i: i64, n: usize) -> usize {
    i.clamp(0, n as i64 - 1) as usize
}

/// Area (box-filter) downsampling by an integer factor; each output pixel is
/// the arithmetic mean of its `factor x factor` input block. Dimensions must
/// divide exactly; there is no implicit padding.
pub fn downsample_area(src: &Image, factor: usize) -> Result<Image> {
    if factor == 0 {
        return Err(Error::InvalidArgument("downsample factor 0".into()));
    }
    if src.height() % factor != 0 || src.width() % factor != 0 {
        return Err(Error::InvalidArgument(format!(
            "downsample: {}x{} not divisible by {}",
            src.height(),
            src.width(),
            factor
        )));
    }
    let (oh, ow) = (src.height() / factor, src.width() / factor);
    let inv = 1.0 / (factor * factor) as f64;
    let mut out = Image::new(src.channels(), oh, ow, src.color_space());
    for c in 0..src.channels() {
        for oy in 0..oh {
            for ox in 0..ow {
                let mut acc = 0.0f64;
                for dy in 0..factor {
                    for dx in 0..factor {
                        acc += src.get(c, oy * factor + dy, ox * factor + dx) as f64;
                    }
                }
                out.set(c, oy, ox, (acc * inv) as f32);
            }
        }
    }
    Ok(out)
}

/// Peak signal-to-noise ratio in decibels. Identical images return the
/// `+infinity` sentinel so metric tables stay total.
pub fn psnr(a: &Image, b: &Image, peak: f32) -> Result<f64> {
    a.check_same_shape(b, "psnr")?;
    if peak <= 0.0 {
        return Err(Error::InvalidArgument("psnr peak must be > 0".into()));
    }
    let mut acc = 0.0f64;
    for (&x, &y) in a.data().iter().zip(b.data().iter()) {
        acc += ((x - y) as f64).powi(2);
    }
    let mse = acc / a.data().len() as f64;
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * ((peak as f64) * (peak as f64) / mse).log10())
}

/// Structural similarity with the standard 11x11 Gaussian window
/// (sigma = 1.5), K1 = 0.01, K2 = 0.03 and dynamic range 1. Channels are
/// averaged. For images smaller than the window the window shrinks to the
/// largest odd size that fits.
pub fn ssim(a: &Image, b: &Image) -> Result<f64> {
    a.check_same_shape(b, "ssim")?;
    let (h, w) = (a.height(), a.width());
    let mut win = 11usize.min(h).min(w);
    if win % 2 == 0 {
        win -= 1;
    }
    if win == 0 {
        return Err(Error::InvalidArgument("ssim on empty image".into()));
    }
    let kernel = gaussian_kernel(win, 1.5);
    const C1: f64 = 0.01 * 0.01;
    const C2: f64 = 0.03 * 0.03;

    let mut total = 0.0f64;
    let mut count = 0usize;
    for c in 0..a.channels() {
        let pa = a.plane(c);
        let pb = b.plane(c);
        for y in 0..=(h - win) {
            for x in 0..=(w - win) {
                let (mut ma, mut mb) = (0.0f64, 0.0f64);
                let (mut va, mut vb, mut cov) = (0.0f64, 0.0f64, 0.0f64);
                for dy in 0..win {
                    for dx in 0..win {
                        let k = kernel[dy] * kernel[dx];
                        let xa = pa[(y + dy) * w + x + dx] as f64;
                        let xb = pb[(y + dy) * w + x + dx] as f64;
                        ma += k * xa;
                        mb += k * xb;
                        va += k * xa * xa;
                        vb += k * xb * xb;
                        cov += k * xa * xb;
                    }
                }
                va -= ma * ma;
                vb -= mb * mb;
                cov -= ma * mb;
                let s = ((2.0 * ma * mb + C1) * (2.0 * cov + C2))
                    / ((ma * ma + mb * mb + C1) * (va + vb + C2));
                total += s;
                count += 1;
            }
        }
    }
    Ok(total / count as f64)
}

fn gaussian_kernel(n: usize, sigma: f64) -> Vec<f64> {
    let half = (n as f64 - 1.0) / 2.0;
    let mut k: Vec<f64> = (0..n)
        .map(|i| {
            let d = i as f64 - half;
            (-d * d / (2.0 * sigma * sigma)).exp()
        })
        .collect();
    let sum: f64 = k.iter().sum();
    for v in k.iter_mut() {
        *v /= sum;
    }
    k
}
