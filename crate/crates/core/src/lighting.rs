//! The lighting representation: equirectangular environment maps, the
//! front-hemisphere gray-ball condition image, conversions between them and
//! the dataset light sampler.
//!
//! Conventions. Row `v` of an env map covers polar angle
//! `theta = pi*(v+0.5)/H` measured from +y (up); column `u` covers azimuth
//! `phi = 2*pi*(u+0.5)/W - pi`. A direction is
//! `(sin(theta)sin(phi), cos(theta), sin(theta)cos(phi))`, so +z points at
//! the viewer and the gray ball's visible hemisphere is `d_z >= 0`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{ColorSpace, Image};
use crate::rng::Rng;
use crate::shading::{ggx_ndf, smith_g};

/// Albedo of the gray condition ball. Documented constant so that the
/// ball -> diffuse-env conversion is invertible up to a known scale.
pub const GRAY_BALL_ALBEDO: f32 = 0.5;
/// Specular reflectance of the ball. The lobe is intentionally mild: a
/// constant dielectric Fresnel, faded out as roughness approaches 1 so the
/// fully rough ball is exactly Lambertian.
pub const GRAY_BALL_F0: f32 = 0.04;
/// Angular sigma of the point-light lobe; the smallest lobe resolvable at
/// 32x16 without aliasing.
pub const POINT_LOBE_SIGMA_DEG: f64 = 10.0;

pub const DEFAULT_ENV_WIDTH: usize = 64;
pub const DEFAULT_ENV_HEIGHT: usize = 32;
/// Target resolution of the diffuse environment map used for lookups.
pub const DIFFUSE_ENV_WIDTH: usize = 32;
pub const DIFFUSE_ENV_HEIGHT: usize = 16;
pub const DEFAULT_BALL_RESOLUTION: usize = 128;

/// Equirectangular HDR radiance map with width = 2 * height.
#[derive(Debug, Clone, PartialEq)]
pub struct EnvMap {
    image: Image,
}

impl EnvMap {
    pub fn from_image(image: Image) -> Result<Self> {
        if image.channels() != 3 {
            return Err(Error::InvalidArgument("env map needs 3 channels".into()));
        }
        if image.width() != 2 * image.height() || image.height() == 0 {
            return Err(Error::InvalidArgument(format!(
                "env map must be 2:1 equirectangular, got {}x{}",
                image.width(),
                image.height()
            )));
        }
        if image.data().iter().any(|&v| v < 0.0) {
            return Err(Error::InvalidArgument("env radiance must be >= 0".into()));
        }
        Ok(EnvMap { image })
    }

    pub fn constant(height: usize, value: f32) -> Self {
        EnvMap { image: Image::filled(3, height, 2 * height, value, ColorSpace::Linear) }
    }

    pub fn image(&self) -> &Image {
        &self.image
    }
    pub fn width(&self) -> usize {
        self.image.width()
    }
    pub fn height(&self) -> usize {
        self.image.height()
    }

    pub fn radiance(&self, v: usize, u: usize) -> [f32; 3] {
        [self.image.get(0, v, u), self.image.get(1, v, u), self.image.get(2, v, u)]
    }

    pub fn set_radiance(&mut self, v: usize, u: usize, rgb: [f32; 3]) {
        for c in 0..3 {
            self.image.set(c, v, u, rgb[c]);
        }
    }

    pub fn scaled(&self, k: f32) -> Result<Self> {
        EnvMap::from_image(self.image.scaled(k))
    }

    /// Mirror the map in azimuth (phi -> -phi); an exact column reversal.
    pub fn flip_azimuth(&self) -> Self {
        let (h, w) = (self.height(), self.width());
        let mut out = self.image.clone();
        for c in 0..3 {
            for v in 0..h {
                for u in 0..w {
                    out.set(c, v, u, self.image.get(c, v, w - 1 - u));
                }
            }
        }
        EnvMap { image: out }
    }

    /// Rotate the map in azimuth by whole texels (exact column permutation).
    pub fn rotate_azimuth_texels(&self, shift: i64) -> Self {
        let (h, w) = (self.height(), self.width());
        let mut out = self.image.clone();
        for c in 0..3 {
            for v in 0..h {
                for u in 0..w {
                    let src = (u as i64 + shift).rem_euclid(w as i64) as usize;
                    out.set(c, v, u, self.image.get(c, v, src));
                }
            }
        }
        EnvMap { image: out }
    }

    pub fn directions(&self) -> DirectionTable {
        DirectionTable::new(self.height(), self.width())
    }
}

/// Precomputed texel directions and solid-angle weights for one env size,
/// stored as structure-of-arrays for tight integration loops.
pub struct DirectionTable {
    pub dx: Vec<f32>,
    pub dy: Vec<f32>,
    pub dz: Vec<f32>,
    pub weight: Vec<f32>,
}

impl DirectionTable {
    pub fn new(height: usize, width: usize) -> Self {
        let n = height * width;
        let mut t = DirectionTable {
            dx: Vec::with_capacity(n),
            dy: Vec::with_capacity(n),
            dz: Vec::with_capacity(n),
            weight: Vec::with_capacity(n),
        };
        let dtheta = std::f64::consts::PI / height as f64;
        let dphi = 2.0 * std::f64::consts::PI / width as f64;
        for v in 0..height {
            let theta = (v as f64 + 0.5) * dtheta;
            let (st, ct) = (theta.sin(), theta.cos());
            let w = (st * dtheta * dphi) as f32;
            for u in 0..width {
                let phi = (u as f64 + 0.5) * dphi - std::f64::consts::PI;
                t.dx.push((st * phi.sin()) as f32);
                t.dy.push(ct as f32);
                t.dz.push((st * phi.cos()) as f32);
                t.weight.push(w);
            }
        }
        t
    }

    pub fn len(&self) -> usize {
        self.weight.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weight.is_empty()
    }

    pub fn direction(&self, i: usize) -> [f32; 3] {
        [self.dx[i], self.dy[i], self.dz[i]]
    }
}

/// Direction of the texel at (row v, col u) for an H x W map.
pub fn texel_direction(v: usize, u: usize, height: usize, width: usize) -> [f64; 3] {
    let theta = std::f64::consts::PI * (v as f64 + 0.5) / height as f64;
    let phi = 2.0 * std::f64::consts::PI * (u as f64 + 0.5) / width as f64 - std::f64::consts::PI;
    [theta.sin() * phi.sin(), theta.cos(), theta.sin() * phi.cos()]
}

/// Rendered front-hemisphere sphere image: a unit sphere under orthographic
/// projection, tangent to all four image edges. Pixels outside the disk are
/// zero; `mask` marks disk coverage.
#[derive(Debug, Clone, PartialEq)]
pub struct GrayBall {
    image: Image,
    mask: Image,
}

impl GrayBall {
    /// Wrap a rendered ball image; the coverage mask is geometric.
    pub fn from_image(image: Image) -> Result<Self> {
        if image.channels() != 3 || image.height() != image.width() || image.height() == 0 {
            return Err(Error::InvalidArgument("gray ball must be a square 3-channel image".into()));
        }
        let mask = Self::disk_mask(image.height());
        Ok(GrayBall { image, mask })
    }

    pub fn disk_mask(size: usize) -> Image {
        let mut mask = Image::new(1, size, size, ColorSpace::Data);
        for y in 0..size {
            for x in 0..size {
                let (nx, ny) = Self::pixel_coords(y, x, size);
                if nx * nx + ny * ny <= 1.0 {
                    mask.set(0, y, x, 1.0);
                }
            }
        }
        mask
    }

    /// Normalized disk coordinates of a pixel center; x right, y up.
    #[inline]
    pub fn pixel_coords(y: usize, x: usize, size: usize) -> (f64, f64) {
        let s = size as f64;
        (2.0 * (x as f64 + 0.5) / s - 1.0, 1.0 - 2.0 * (y as f64 + 0.5) / s)
    }

    /// Per-pixel normal n = (x, y, sqrt(1 - x^2 - y^2)), or None outside
    /// the disk.
    pub fn normal(&self, y: usize, x: usize) -> Option<[f64; 3]> {
        let (nx, ny) = Self::pixel_coords(y, x, self.size());
        let r2 = nx * nx + ny * ny;
        if r2 > 1.0 {
            return None;
        }
        Some([nx, ny, (1.0 - r2).max(0.0).sqrt()])
    }

    pub fn size(&self) -> usize {
        self.image.height()
    }
    pub fn image(&self) -> &Image {
        &self.image
    }
    pub fn mask(&self) -> &Image {
        &self.mask
    }

    pub fn scaled(&self, k: f32) -> Self {
        GrayBall { image: self.image.scaled(k), mask: self.mask.clone() }
    }

    /// Horizontal mirror (x -> -x), the flipped lighting condition.
    pub fn mirrored(&self) -> Self {
        let s = self.size();
        let mut out = self.image.clone();
        for c in 0..3 {
            for y in 0..s {
                for x in 0..s {
                    out.set(c, y, x, self.image.get(c, y, s - 1 - x));
                }
            }
        }
        GrayBall { image: out, mask: self.mask.clone() }
    }
}

/// Render the gray condition ball under `env`: Lambertian diffuse
/// convolution with albedo [`GRAY_BALL_ALBEDO`] plus a mild GGX lobe toward
/// the viewer at +z. The result is the lighting condition image L.
pub fn render_gray_ball(env: &EnvMap, roughness: f32) -> Result<GrayBall> {
    render_gray_ball_sized(env, roughness, DEFAULT_BALL_RESOLUTION)
}

pub fn render_gray_ball_sized(env: &EnvMap, roughness: f32, size: usize) -> Result<GrayBall> {
    if !(roughness > 0.0 && roughness <= 1.0) {
        return Err(Error::InvalidArgument(format!("ball roughness {roughness} not in (0,1]")));
    }
    if size == 0 {
        return Err(Error::InvalidArgument("ball size 0".into()));
    }
    let table = env.directions();
    // Premultiply radiance by solid-angle weight once.
    let n = table.len();
    let mut wr = vec![0.0f32; n];
    let mut wg = vec![0.0f32; n];
    let mut wb = vec![0.0f32; n];
    {
        let (h, w) = (env.height(), env.width());
        let mut i = 0;
        for v in 0..h {
            for u in 0..w {
                let rgb = env.radiance(v, u);
                wr[i] = rgb[0] * table.weight[i];
                wg[i] = rgb[1] * table.weight[i];
                wb[i] = rgb[2] * table.weight[i];
                i += 1;
            }
        }
    }

    let alpha = roughness * roughness;
    let k_spec = GRAY_BALL_F0 * (1.0 - roughness);
    let mut image = Image::new(3, size, size, ColorSpace::Linear);
    for y in 0..size {
        for x in 0..size {
            let (px, py) = GrayBall::pixel_coords(y, x, size);
            let r2 = px * px + py * py;
            if r2 > 1.0 {
                continue;
            }
            let nx = px as f32;
            let ny = py as f32;
            let nz = ((1.0 - r2).max(0.0) as f32).sqrt();

            let (mut dr, mut dg, mut db) = (0.0f32, 0.0f32, 0.0f32);
            for i in 0..n {
                let cos = (nx * table.dx[i] + ny * table.dy[i] + nz * table.dz[i]).max(0.0);
                dr += cos * wr[i];
                dg += cos * wg[i];
                db += cos * wb[i];
            }

            let (mut sr, mut sg, mut sb) = (0.0f32, 0.0f32, 0.0f32);
            if k_spec > 0.0 && nz > 0.0 {
                for i in 0..n {
                    let n_dot_l = nx * table.dx[i] + ny * table.dy[i] + nz * table.dz[i];
                    if n_dot_l <= 0.0 {
                        continue;
                    }
                    // Halfway between l and the +z viewer.
                    let hx = table.dx[i];
                    let hy = table.dy[i];
                    let hz = table.dz[i] + 1.0;
                    let hl = (hx * hx + hy * hy + hz * hz).sqrt().max(1e-12);
                    let n_dot_h = (nx * hx + ny * hy + nz * hz) / hl;
                    let d = ggx_ndf(n_dot_h.max(0.0), alpha);
                    let g = smith_g(nz, n_dot_l, alpha);
                    // Constant Fresnel by design; BRDF * cos folds one n.l.
                    let term = d * g / (4.0 * nz).max(1e-12);
                    sr += term * wr[i];
                    sg += term * wg[i];
                    sb += term * wb[i];
                }
            }
            image.set(0, y, x, GRAY_BALL_ALBEDO * dr + k_spec * sr);
            image.set(1, y, x, GRAY_BALL_ALBEDO * dg + k_spec * sg);
            image.set(2, y, x, GRAY_BALL_ALBEDO * db + k_spec * sb);
        }
    }
    GrayBall::from_image(image)
}

/// Unfold a gray ball into an equirectangular diffuse environment map.
///
/// Front-hemisphere texels (d_z >= 0) read the ball pixel whose normal
/// equals the texel direction; back-hemisphere texels clamp d_z to 0 and
/// read the silhouette. Bilinear taps are coverage-weighted so values at
/// the disk rim are not diluted by the zero background.
pub fn unfold_ball_to_envmap(ball: &GrayBall, out_width: usize, out_height: usize) -> Result<EnvMap> {
    if out_height == 0 || out_width != 2 * out_height {
        return Err(Error::InvalidArgument(format!(
            "unfold target must be 2:1, got {out_width}x{out_height}"
        )));
    }
    let size = ball.size();
    let mut out = Image::new(3, out_height, out_width, ColorSpace::Linear);
    for v in 0..out_height {
        for u in 0..out_width {
            let d = texel_direction(v, u, out_height, out_width);
            let (bx, by) = if d[2] >= 0.0 {
                (d[0], d[1])
            } else {
                let r = (d[0] * d[0] + d[1] * d[1]).sqrt();
                if r < 1e-9 {
                    (1.0, 0.0)
                } else {
                    (d[0] / r, d[1] / r)
                }
            };
            let px = (bx + 1.0) * 0.5 * size as f64 - 0.5;
            let py = (1.0 - by) * 0.5 * size as f64 - 0.5;
            let rgb = sample_ball_bilinear(ball, px, py);
            for c in 0..3 {
                out.set(c, v, u, rgb[c].max(0.0));
            }
        }
    }
    EnvMap::from_image(out)
}

fn sample_ball_bilinear(ball: &GrayBall, px: f64, py: f64) -> [f32; 3] {
    let size = ball.size() as i64;
    let x0 = px.floor() as i64;
    let y0 = py.floor() as i64;
    let fx = (px - x0 as f64) as f32;
    let fy = (py - y0 as f64) as f32;
    let cl = |i: i64| i.clamp(0, size - 1) as usize;
    let (xa, xb, ya, yb) = (cl(x0), cl(x0 + 1), cl(y0), cl(y0 + 1));
    let wgt = [(1.0 - fx) * (1.0 - fy), fx * (1.0 - fy), (1.0 - fx) * fy, fx * fy];
    let taps = [(ya, xa), (ya, xb), (yb, xa), (yb, xb)];
    let mut rgb = [0.0f32; 3];
    let mut cov = 0.0f32;
    for (w, (y, x)) in wgt.iter().zip(taps.iter()) {
        let m = ball.mask().get(0, *y, *x);
        cov += w * m;
        for c in 0..3 {
            rgb[c] += w * m * ball.image().get(c, *y, *x);
        }
    }
    if cov < 1e-4 {
        return [0.0; 3];
    }
    for c in rgb.iter_mut() {
        *c /= cov;
    }
    rgb
}

/// A sampled dataset lighting condition.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LightSample {
    pub azimuth_deg: f64,
    pub elevation_deg: f64,
    pub strength: f64,
    pub kind: LightKind,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LightKind {
    PointOnly,
    PointPlusHdri,
}

pub const ELEVATION_MEAN_DEG: f64 = 60.0;
pub const ELEVATION_STD_DEG: f64 = 40.0;
pub const ELEVATION_MIN_DEG: f64 = 20.0;
pub const ELEVATION_MAX_DEG: f64 = 160.0;
pub const STRENGTH_MIN: f64 = 5.0;
pub const STRENGTH_MAX: f64 = 20.0;
pub const POINT_ONLY_PROB: f64 = 0.8;

/// Sample one lighting condition: azimuth uniform in [0, 360), elevation
/// normal(60, 40) kept in [20, 160] by resampling, strength uniform in
/// [5, 20], point-only with probability 0.8.
pub fn sample_light_condition(rng: &mut Rng) -> LightSample {
    let azimuth_deg = rng.uniform_in(0.0, 360.0);
    let elevation_deg = loop {
        let e = rng.normal_with(ELEVATION_MEAN_DEG, ELEVATION_STD_DEG);
        if (ELEVATION_MIN_DEG..=ELEVATION_MAX_DEG).contains(&e) {
            break e;
        }
    };
    let strength = rng.uniform_in(STRENGTH_MIN, STRENGTH_MAX);
    let kind = if rng.chance(POINT_ONLY_PROB) { LightKind::PointOnly } else { LightKind::PointPlusHdri };
    LightSample { azimuth_deg, elevation_deg, strength, kind }
}

/// Direction of a light sample in the env-map frame.
pub fn light_direction(sample: &LightSample) -> [f64; 3] {
    let theta = sample.elevation_deg.to_radians();
    let phi = sample.azimuth_deg.to_radians() - std::f64::consts::PI;
    [theta.sin() * phi.sin(), theta.cos(), theta.sin() * phi.cos()]
}

/// Build an env map that is `ambient` everywhere plus a Gaussian lobe of
/// peak `strength` (angular sigma [`POINT_LOBE_SIGMA_DEG`]) centered at the
/// sample's direction.
pub fn point_light_envmap(
    sample: &LightSample,
    width: usize,
    height: usize,
    ambient: f32,
) -> Result<EnvMap> {
    if height == 0 || width != 2 * height {
        return Err(Error::InvalidArgument("point_light_envmap target must be 2:1".into()));
    }
    let dir = light_direction(sample);
    let sigma = POINT_LOBE_SIGMA_DEG.to_radians();
    let mut img = Image::new(3, height, width, ColorSpace::Linear);
    for v in 0..height {
        for u in 0..width {
            let d = texel_direction(v, u, height, width);
            let cos = (d[0] * dir[0] + d[1] * dir[1] + d[2] * dir[2]).clamp(-1.0, 1.0);
            let angle = cos.acos();
            let val = ambient as f64 + sample.strength * (-angle * angle / (2.0 * sigma * sigma)).exp();
            for c in 0..3 {
                img.set(c, v, u, val as f32);
            }
        }
    }
    EnvMap::from_image(img)
}

/// A random smooth HDRI-like map: low ambient plus a few broad colored
/// lobes. Stands in for the hand-curated HDRI assets the dataset sampler
/// mixes in.
pub fn random_smooth_envmap(rng: &mut Rng, width: usize, height: usize) -> Result<EnvMap> {
    if height == 0 || width != 2 * height {
        return Err(Error::InvalidArgument("random_smooth_envmap target must be 2:1".into()));
    }
    let ambient = [
        rng.uniform_in(0.05, 0.25) as f32,
        rng.uniform_in(0.05, 0.25) as f32,
        rng.uniform_in(0.05, 0.25) as f32,
    ];
    let n_lobes = 2 + rng.below(3);
    let mut lobes = Vec::with_capacity(n_lobes);
    for _ in 0..n_lobes {
        // Uniform direction on the sphere.
        let z = rng.uniform_in(-1.0, 1.0);
        let phi = rng.uniform_in(0.0, 2.0 * std::f64::consts::PI);
        let r = (1.0 - z * z).max(0.0).sqrt();
        let dir = [r * phi.sin(), z, r * phi.cos()];
        let sigma = rng.uniform_in(0.4, 1.0);
        let amp = [
            rng.uniform_in(0.2, 1.5) as f32,
            rng.uniform_in(0.2, 1.5) as f32,
            rng.uniform_in(0.2, 1.5) as f32,
        ];
        lobes.push((dir, sigma, amp));
    }
    let mut img = Image::new(3, height, width, ColorSpace::Linear);
    for v in 0..height {
        for u in 0..width {
            let d = texel_direction(v, u, height, width);
            let mut rgb = ambient;
            for (dir, sigma, amp) in &lobes {
                let cos = (d[0] * dir[0] + d[1] * dir[1] + d[2] * dir[2]).clamp(-1.0, 1.0);
                let a = cos.acos();
                let g = (-a * a / (2.0 * sigma * sigma)).exp() as f32;
                for c in 0..3 {
                    rgb[c] += amp[c] * g;
                }
            }
            for c in 0..3 {
                img.set(c, v, u, rgb[c]);
            }
        }
    }
    EnvMap::from_image(img)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn solid_angle_weights_sum_to_sphere() {
        let four_pi = 4.0 * std::f64::consts::PI;
        for h in [16usize, 32, 64] {
            let t = DirectionTable::new(h, 2 * h);
            let sum: f64 = t.weight.iter().map(|&w| w as f64).sum();
            let rel = (sum - four_pi).abs() / four_pi;
            let bound = if h >= 32 { 1e-3 } else { 2e-3 };
            assert!(rel < bound, "H={h}: rel err {rel}");
        }
    }

    #[test]
    fn env_map_validation() {
        assert!(EnvMap::from_image(Image::new(3, 8, 8, ColorSpace::Linear)).is_err());
        assert!(EnvMap::from_image(Image::new(1, 8, 16, ColorSpace::Linear)).is_err());
        let mut img = Image::new(3, 8, 16, ColorSpace::Linear);
        img.set(0, 0, 0, -1.0);
        assert!(EnvMap::from_image(img).is_err());
    }

    #[test]
    fn black_env_black_ball() {
        let env = EnvMap::constant(16, 0.0);
        let ball = render_gray_ball_sized(&env, 0.5, 32).unwrap();
        assert!(ball.image().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn ball_rejects_bad_roughness() {
        let env = EnvMap::constant(16, 1.0);
        assert!(render_gray_ball_sized(&env, 0.0, 32).is_err());
        assert!(render_gray_ball_sized(&env, -0.5, 32).is_err());
    }

    // Closed-form Lambert under uniform radiance: the hemisphere cosine
    // integral is pi, so every disk pixel is c * pi * rho at roughness 1
    // (the specular lobe fades out entirely there by design).
    #[test]
    fn uniform_env_ball_is_lambert_closed_form() {
        let c = 0.8f32;
        let env = EnvMap::constant(32, c);
        let ball = render_gray_ball_sized(&env, 1.0, 64).unwrap();
        let expect = c * std::f32::consts::PI * GRAY_BALL_ALBEDO;
        for y in 0..64 {
            for x in 0..64 {
                if ball.mask().get(0, y, x) > 0.5 {
                    let v = ball.image().get(0, y, x);
                    assert!(
                        (v - expect).abs() / expect < 2e-3,
                        "pixel ({y},{x}): {v} vs {expect}"
                    );
                }
            }
        }
    }

    // Brute-force argmax oracle: the brightest disk pixel is the one whose
    // normal maximizes the cosine response to the single lit texel.
    #[test]
    fn single_texel_lights_matching_normal() {
        let mut img = Image::new(3, 16, 32, ColorSpace::Linear);
        let (bv, bu) = (4usize, 9usize);
        for c in 0..3 {
            img.set(c, bv, bu, 10.0);
        }
        let env = EnvMap::from_image(img).unwrap();
        let d = texel_direction(bv, bu, 16, 32);
        let ball = render_gray_ball_sized(&env, 1.0, 48).unwrap();
        let mut best_pix = (0usize, 0usize, -1.0f32);
        let mut best_oracle = (0usize, 0usize, -1.0f64);
        for y in 0..48 {
            for x in 0..48 {
                if let Some(n) = ball.normal(y, x) {
                    let v = ball.image().get(0, y, x);
                    if v > best_pix.2 {
                        best_pix = (y, x, v);
                    }
                    let cos = n[0] * d[0] + n[1] * d[1] + n[2] * d[2];
                    if cos > best_oracle.2 {
                        best_oracle = (y, x, cos);
                    }
                }
            }
        }
        assert_eq!((best_pix.0, best_pix.1), (best_oracle.0, best_oracle.1));
    }

    #[test]
    fn ball_linear_in_env_and_exact_under_power_of_two_scale() {
        let mut rng = Rng::new(31);
        let env = random_smooth_envmap(&mut rng, 32, 16).unwrap();
        let ball = render_gray_ball_sized(&env, 0.5, 32).unwrap();
        let ball2 = render_gray_ball_sized(&env.scaled(2.0).unwrap(), 0.5, 32).unwrap();
        assert_eq!(ball.image().scaled(2.0).data(), ball2.image().data());

        let env_b = random_smooth_envmap(&mut rng, 32, 16).unwrap();
        let sum_env =
            EnvMap::from_image(env.image().zip_map(env_b.image(), |a, b| a + b).unwrap()).unwrap();
        let ball_b = render_gray_ball_sized(&env_b, 0.5, 32).unwrap();
        let ball_sum = render_gray_ball_sized(&sum_env, 0.5, 32).unwrap();
        let linear_sum = ball.image().zip_map(ball_b.image(), |a, b| a + b).unwrap();
        assert!(ball_sum.image().max_abs_diff(&linear_sum) < 1e-4);
    }

    #[test]
    fn unfold_constant_ball_gives_constant_env() {
        let c = 0.42f32;
        let mut img = Image::new(3, 32, 32, ColorSpace::Linear);
        let mask = GrayBall::disk_mask(32);
        for ch in 0..3 {
            for y in 0..32 {
                for x in 0..32 {
                    if mask.get(0, y, x) > 0.5 {
                        img.set(ch, y, x, c);
                    }
                }
            }
        }
        let ball = GrayBall::from_image(img).unwrap();
        let env = unfold_ball_to_envmap(&ball, 32, 16).unwrap();
        for &v in env.image().data() {
            assert!((v - c).abs() < 1e-6, "{v}");
        }
    }

    #[test]
    fn unfold_scaling_and_nonnegativity() {
        let mut rng = Rng::new(12);
        let env = random_smooth_envmap(&mut rng, 32, 16).unwrap();
        let ball = render_gray_ball_sized(&env, 0.5, 32).unwrap();
        let e1 = unfold_ball_to_envmap(&ball, 32, 16).unwrap();
        let e2 = unfold_ball_to_envmap(&ball.scaled(2.0), 32, 16).unwrap();
        assert_eq!(e1.image().scaled(2.0).data(), e2.image().data());
        assert!(e1.image().data().iter().all(|&v| v >= 0.0));
        assert!(unfold_ball_to_envmap(&ball, 7, 16).is_err());
        assert!(unfold_ball_to_envmap(&ball, 0, 0).is_err());
    }

    #[test]
    fn light_sampler_distributions() {
        let mut rng = Rng::new(42);
        let n = 100_000;
        let mut point_only = 0usize;
        let mut sum_elev = 0.0f64;
        for _ in 0..n {
            let s = sample_light_condition(&mut rng);
            assert!((0.0..360.0).contains(&s.azimuth_deg));
            assert!((ELEVATION_MIN_DEG..=ELEVATION_MAX_DEG).contains(&s.elevation_deg));
            assert!((STRENGTH_MIN..=STRENGTH_MAX).contains(&s.strength));
            if s.kind == LightKind::PointOnly {
                point_only += 1;
            }
            sum_elev += s.elevation_deg;
        }
        let frac = point_only as f64 / n as f64;
        assert!((0.79..=0.81).contains(&frac), "point-only fraction {frac}");

        // Quadrature oracle for the truncated-normal mean.
        let expected = truncated_normal_mean(
            ELEVATION_MEAN_DEG,
            ELEVATION_STD_DEG,
            ELEVATION_MIN_DEG,
            ELEVATION_MAX_DEG,
        );
        let mean = sum_elev / n as f64;
        assert!((mean - expected).abs() < 2.0, "mean {mean} vs {expected}");
        // The clipping skews the mean well above the nominal center.
        assert!((expected - 70.75).abs() < 0.05, "oracle value moved: {expected}");
    }

    fn truncated_normal_mean(mu: f64, sigma: f64, lo: f64, hi: f64) -> f64 {
        let steps = 200_000;
        let (mut num, mut den) = (0.0f64, 0.0f64);
        for k in 0..steps {
            let x = lo + (hi - lo) * (k as f64 + 0.5) / steps as f64;
            let z = (x - mu) / sigma;
            let pdf = (-0.5 * z * z).exp();
            num += x * pdf;
            den += pdf;
        }
        num / den
    }

    #[test]
    fn point_light_map_examples() {
        let s = LightSample {
            azimuth_deg: 200.0,
            elevation_deg: 75.0,
            strength: 0.0,
            kind: LightKind::PointOnly,
        };
        let env = point_light_envmap(&s, 64, 32, 0.07).unwrap();
        for &v in env.image().data() {
            assert!((v - 0.07).abs() < 1e-7);
        }

        let s2 = LightSample { strength: 12.0, ..s.clone() };
        let env2 = point_light_envmap(&s2, 64, 32, 0.0).unwrap();
        // The lobe center texel is the global argmax.
        let dir = light_direction(&s2);
        let mut best_cos = -2.0;
        let mut best_tex = (0, 0);
        for v in 0..32 {
            for u in 0..64 {
                let d = texel_direction(v, u, 32, 64);
                let cos = d[0] * dir[0] + d[1] * dir[1] + d[2] * dir[2];
                if cos > best_cos {
                    best_cos = cos;
                    best_tex = (v, u);
                }
            }
        }
        let mut best_val = -1.0f32;
        let mut best_val_tex = (0, 0);
        for v in 0..32 {
            for u in 0..64 {
                let val = env2.image().get(0, v, u);
                if val > best_val {
                    best_val = val;
                    best_val_tex = (v, u);
                }
            }
        }
        assert_eq!(best_tex, best_val_tex);

        // Riemann mass of the lobe vs the closed-form small-angle Gaussian mass.
        let t = DirectionTable::new(32, 64);
        let mut mass = 0.0f64;
        for (i, &w) in t.weight.iter().enumerate() {
            let (v, u) = (i / 64, i % 64);
            mass += env2.image().get(0, v, u) as f64 * w as f64;
        }
        let sigma = POINT_LOBE_SIGMA_DEG.to_radians();
        let closed = s2.strength * 2.0 * std::f64::consts::PI * sigma * sigma;
        assert!((mass - closed).abs() / closed < 0.05, "mass {mass} vs {closed}");
    }

    #[test]
    fn light_sample_json_shape() {
        let s = LightSample {
            azimuth_deg: 10.0,
            elevation_deg: 50.0,
            strength: 7.5,
            kind: LightKind::PointPlusHdri,
        };
        let js = serde_json::to_string(&s).unwrap();
        assert!(js.contains("\"azimuth_deg\""));
        assert!(js.contains("point_plus_hdri"));
        let back: LightSample = serde_json::from_str(&js).unwrap();
        assert_eq!(back, s);
    }

    #[test]
    fn flip_azimuth_is_involution() {
        let mut rng = Rng::new(8);
        let env = random_smooth_envmap(&mut rng, 32, 16).unwrap();
        let back = env.flip_azimuth().flip_azimuth();
        assert_eq!(env.image().data(), back.image().data());
    }
}
