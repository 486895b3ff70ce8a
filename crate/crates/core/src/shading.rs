//! Physically-based shading: the Lambertian diffuse integral in brute-force
//! and lookup forms, a Cook-Torrance GGX specular term, the surface
//! composition `I = A (.) D + S`, and the analytic scene renderer that
//! stands in for an offline path tracer when building dataset ground truth.

use crate::error::{Error, Result};
use crate::image::{grid_sample, ColorSpace, Image, NormalMap};
use crate::lighting::{DirectionTable, EnvMap};
use crate::scenegen::{SceneSpec, Shape};

/// GGX normal distribution; `alpha` is roughness squared.
#[inline]
pub fn ggx_ndf(n_dot_h: f32, alpha: f32) -> f32 {
    if n_dot_h <= 0.0 {
        return 0.0;
    }
    let a2 = alpha * alpha;
    let d = n_dot_h * n_dot_h * (a2 - 1.0) + 1.0;
    a2 / (std::f32::consts::PI * d * d)
}

/// Separable Smith masking-shadowing for GGX.
#[inline]
pub fn smith_g(n_dot_v: f32, n_dot_l: f32, alpha: f32) -> f32 {
    let a2 = alpha * alpha;
    let g1 = |x: f32| 2.0 * x / (x + (a2 + (1.0 - a2) * x * x).sqrt());
    g1(n_dot_v.max(1e-6)) * g1(n_dot_l.max(1e-6))
}

/// Schlick Fresnel approximation.
#[inline]
pub fn fresnel_schlick(cos: f32, f0: f32) -> f32 {
    f0 + (1.0 - f0) * (1.0 - cos).clamp(0.0, 1.0).powi(5)
}

/// Dielectric base reflectance used for F0 = mix(0.04, albedo, metallic).
pub const DIELECTRIC_F0: f32 = 0.04;

/// Per-surface material parameters.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct BrdfParams {
    pub albedo: [f32; 3],
    pub roughness: f32,
    pub metallic: f32,
}

impl BrdfParams {
    pub fn validate(&self) -> Result<()> {
        if self.albedo.iter().any(|&a| !(0.0..=1.0).contains(&a)) {
            return Err(Error::InvalidArgument("albedo outside [0,1]".into()));
        }
        if !(self.roughness > 0.0 && self.roughness <= 1.0) {
            return Err(Error::InvalidArgument("roughness outside (0,1]".into()));
        }
        if !(0.0..=1.0).contains(&self.metallic) {
            return Err(Error::InvalidArgument("metallic outside [0,1]".into()));
        }
        Ok(())
    }
}

/// Output of the renderer: the two shading components plus their
/// composition, which is constructed as exactly `A (.) D + S`.
#[derive(Debug, Clone)]
pub struct ShadingResult {
    pub diffuse: Image,
    pub specular: Image,
    pub composed: Image,
}

/// Ground-truth per-pixel intrinsics of a rendered view.
#[derive(Debug, Clone)]
pub struct IntrinsicSet {
    pub albedo: Image,
    pub normal: NormalMap,
    pub roughness: Image,
    pub metallic: Image,
    pub mask: Image,
}

/// Brute-force Lambertian diffuse: per pixel,
/// `D(p) = sum_texels L(w) * max(0, N(p).w) * sin(theta) dtheta dphi` over
/// the full sphere. This is the independent oracle every other diffuse
/// computation is checked against. Pixels whose stored normal decodes to
/// (almost) zero length are treated as background and produce 0.
pub fn diffuse_bruteforce(env: &EnvMap, normals: &NormalMap) -> Image {
    let table = env.directions();
    let (wr, wg, wb) = premultiplied_radiance(env, &table);
    let (h, w) = (normals.height(), normals.width());
    let mut out = Image::new(3, h, w, ColorSpace::Linear);
    for y in 0..h {
        for x in 0..w {
            let n = normals.vector(y, x);
            if n[0] * n[0] + n[1] * n[1] + n[2] * n[2] < 1e-6 {
                continue;
            }
            let mut acc = [0.0f32; 3];
            for i in 0..table.len() {
                let cos = (n[0] * table.dx[i] + n[1] * table.dy[i] + n[2] * table.dz[i]).max(0.0);
                acc[0] += cos * wr[i];
                acc[1] += cos * wg[i];
                acc[2] += cos * wb[i];
            }
            for c in 0..3 {
                out.set(c, y, x, acc[c]);
            }
        }
    }
    out
}

pub(crate) fn premultiplied_radiance(
    env: &EnvMap,
    table: &DirectionTable,
) -> (Vec<f32>, Vec<f32>, Vec<f32>) {
    let n = table.len();
    let (mut wr, mut wg, mut wb) = (vec![0.0f32; n], vec![0.0f32; n], vec![0.0f32; n]);
    let mut i = 0;
    for v in 0..env.height() {
        for u in 0..env.width() {
            let rgb = env.radiance(v, u);
            wr[i] = rgb[0] * table.weight[i];
            wg[i] = rgb[1] * table.weight[i];
            wb[i] = rgb[2] * table.weight[i];
            i += 1;
        }
    }
    (wr, wg, wb)
}

/// Normalized lookup coordinates for a normal map:
/// `u = atan2(n_x, n_z)/pi`, `v = (2/pi) acos(n_y) - 1`. atan2 extends the
/// printed arctan formula continuously to grazing normals.
pub fn normal_lookup_uv(normals: &NormalMap) -> Image {
    let (h, w) = (normals.height(), normals.width());
    let mut uv = Image::new(2, h, w, ColorSpace::Data);
    for y in 0..h {
        for x in 0..w {
            let n = normals.vector(y, x);
            let u = (n[0] as f64).atan2(n[2] as f64) / std::f64::consts::PI;
            let v = 2.0 / std::f64::consts::PI * (n[1].clamp(-1.0, 1.0) as f64).acos() - 1.0;
            uv.set(0, y, x, u as f32);
            uv.set(1, y, x, v as f32);
        }
    }
    uv
}

/// Diffuse shading by lookup into a diffuse-convolved environment map.
/// Never contains cast shadows; that gap from ground truth is what the
/// diffuse shading loss tolerates.
pub fn diffuse_lookup(e_diff: &EnvMap, normals: &NormalMap) -> Result<Image> {
    let uv = normal_lookup_uv(normals);
    grid_sample(e_diff.image(), &uv)
}

/// Cook-Torrance GGX specular under an environment map, Riemann-summed
/// over texels. `view` is the camera direction in the shading frame
/// (default +z); back-facing pixels (n.v <= 0) output 0.
pub fn specular_ggx(
    env: &EnvMap,
    normals: &NormalMap,
    roughness: &Image,
    metallic: &Image,
    albedo: &Image,
    view: [f32; 3],
) -> Result<Image> {
    let (h, w) = (normals.height(), normals.width());
    if roughness.height() != h || roughness.width() != w || roughness.channels() != 1 {
        return Err(Error::ShapeMismatch("specular_ggx roughness map".into()));
    }
    if metallic.height() != h || metallic.width() != w || metallic.channels() != 1 {
        return Err(Error::ShapeMismatch("specular_ggx metallic map".into()));
    }
    if albedo.height() != h || albedo.width() != w || albedo.channels() != 3 {
        return Err(Error::ShapeMismatch("specular_ggx albedo map".into()));
    }
    let table = env.directions();
    let (wr, wg, wb) = premultiplied_radiance(env, &table);
    let mut out = Image::new(3, h, w, ColorSpace::Linear);
    for y in 0..h {
        for x in 0..w {
            let n = normals.vector(y, x);
            if n[0] * n[0] + n[1] * n[1] + n[2] * n[2] < 1e-6 {
                continue;
            }
            let rough = roughness.get(0, y, x).max(1e-3);
            let metal = metallic.get(0, y, x);
            let alb = [albedo.get(0, y, x), albedo.get(1, y, x), albedo.get(2, y, x)];
            let f0 = [
                DIELECTRIC_F0 + (alb[0] - DIELECTRIC_F0) * metal,
                DIELECTRIC_F0 + (alb[1] - DIELECTRIC_F0) * metal,
                DIELECTRIC_F0 + (alb[2] - DIELECTRIC_F0) * metal,
            ];
            let rgb = specular_ggx_pixel(n, rough, f0, view, &table, &wr, &wg, &wb);
            for c in 0..3 {
                out.set(c, y, x, rgb[c]);
            }
        }
    }
    Ok(out)
}

pub(crate) fn specular_ggx_pixel(
    n: [f32; 3],
    roughness: f32,
    f0: [f32; 3],
    view: [f32; 3],
    table: &DirectionTable,
    wr: &[f32],
    wg: &[f32],
    wb: &[f32],
) -> [f32; 3] {
    let n_dot_v = n[0] * view[0] + n[1] * view[1] + n[2] * view[2];
    if n_dot_v <= 0.0 {
        return [0.0; 3];
    }
    let alpha = roughness * roughness;
    let mut acc = [0.0f32; 3];
    for i in 0..table.len() {
        let n_dot_l = n[0] * table.dx[i] + n[1] * table.dy[i] + n[2] * table.dz[i];
        if n_dot_l <= 0.0 {
            continue;
        }
        let hx = table.dx[i] + view[0];
        let hy = table.dy[i] + view[1];
        let hz = table.dz[i] + view[2];
        let hl = (hx * hx + hy * hy + hz * hz).sqrt().max(1e-12);
        let n_dot_h = (n[0] * hx + n[1] * hy + n[2] * hz) / hl;
        let v_dot_h = (view[0] * hx + view[1] * hy + view[2] * hz) / hl;
        let d = ggx_ndf(n_dot_h, alpha);
        let g = smith_g(n_dot_v, n_dot_l, alpha);
        // BRDF * cos(l): the 1/(n.l) of the denominator cancels.
        let base = d * g / (4.0 * n_dot_v).max(1e-12);
        let fr = fresnel_schlick(v_dot_h, f0[0]);
        let fg = fresnel_schlick(v_dot_h, f0[1]);
        let fb = fresnel_schlick(v_dot_h, f0[2]);
        acc[0] += base * fr * wr[i];
        acc[1] += base * fg * wg[i];
        acc[2] += base * fb * wb[i];
    }
    acc
}

/// Element-wise `A (.) D + S` with no clamping (HDR-preserving).
pub fn compose(albedo: &Image, diffuse: &Image, specular: &Image) -> Result<Image> {
    albedo.check_same_shape(diffuse, "compose albedo/diffuse")?;
    albedo.check_same_shape(specular, "compose albedo/specular")?;
    let mut out = albedo.clone().with_color_space(ColorSpace::Linear);
    let d = diffuse.data();
    let s = specular.data();
    for (i, v) in out.data_mut().iter_mut().enumerate() {
        *v = *v * d[i] + s[i];
    }
    Ok(out)
}

/// Rendering knobs for the analytic renderer.
#[derive(Debug, Clone, Copy)]
pub struct RenderOptions {
    pub resolution: usize,
    /// When set, ground-truth diffuse includes analytic sphere umbra tests
    /// on plane and box-face receivers. Lookup-based diffuse never does.
    pub cast_shadows: bool,
}

impl Default for RenderOptions {
    fn default() -> Self {
        RenderOptions { resolution: 64, cast_shadows: false }
    }
}

/// Rasterize a procedural scene under `env` (given in the camera frame) and
/// shade it: brute-force Lambertian diffuse, GGX specular, and the exact
/// composition, together with ground-truth intrinsics. The mask is 1 on
/// covered pixels.
pub fn render_scene(
    scene: &SceneSpec,
    env: &EnvMap,
    opts: &RenderOptions,
) -> Result<(ShadingResult, IntrinsicSet)> {
    if scene.objects.is_empty() {
        return Err(Error::InvalidArgument("render_scene: empty scene".into()));
    }
    for o in &scene.objects {
        o.material.validate()?;
    }
    let res = opts.resolution;
    if res == 0 {
        return Err(Error::InvalidArgument("render resolution 0".into()));
    }
    let table = env.directions();
    let (wr, wg, wb) = premultiplied_radiance(env, &table);
    let basis = scene.camera.basis();
    // World-space copies of the (camera-frame) texel directions for
    // occlusion rays.
    let n_tex = table.len();
    let mut world_dirs = Vec::with_capacity(n_tex);
    for i in 0..n_tex {
        let d = table.direction(i);
        world_dirs.push(basis.to_world([d[0] as f64, d[1] as f64, d[2] as f64]));
    }

    let spheres: Vec<([f64; 3], f64)> = scene
        .objects
        .iter()
        .filter_map(|o| match o.shape {
            Shape::Sphere { center, radius } => Some((center, radius)),
            _ => None,
        })
        .collect();

    let mut diffuse = Image::new(3, res, res, ColorSpace::Linear);
    let mut specular = Image::new(3, res, res, ColorSpace::Linear);
    let mut albedo = Image::new(3, res, res, ColorSpace::Linear);
    let mut rough = Image::new(1, res, res, ColorSpace::Data);
    let mut metal = Image::new(1, res, res, ColorSpace::Data);
    let mut mask = Image::new(1, res, res, ColorSpace::Data);
    let mut normals = vec![[0.0f32; 3]; res * res];

    let view = [0.0f32, 0.0, 1.0];
    for py in 0..res {
        for px in 0..res {
            let xn = 2.0 * (px as f64 + 0.5) / res as f64 - 1.0;
            let yn = 1.0 - 2.0 * (py as f64 + 0.5) / res as f64;
            let (origin, dir) = scene.camera.ray(xn, yn, &basis);

            let mut best: Option<(f64, [f64; 3], usize, bool)> = None;
            for (oi, obj) in scene.objects.iter().enumerate() {
                if let Some((t, nrm)) = obj.shape.intersect(origin, dir) {
                    let receiver = !matches!(obj.shape, Shape::Sphere { .. });
                    if best.map_or(true, |(bt, _, _, _)| t < bt) {
                        best = Some((t, nrm, oi, receiver));
                    }
                }
            }
            let Some((t, n_world, oi, receiver)) = best else { continue };
            let hit = [
                origin[0] + t * dir[0],
                origin[1] + t * dir[1],
                origin[2] + t * dir[2],
            ];
            let n_cam = basis.to_camera(n_world);
            let n = [n_cam[0] as f32, n_cam[1] as f32, n_cam[2] as f32];
            let mat = &scene.objects[oi].material;

            let shadow_test = opts.cast_shadows && receiver && !spheres.is_empty();
            let mut dacc = [0.0f32; 3];
            for i in 0..n_tex {
                let cos = (n[0] * table.dx[i] + n[1] * table.dy[i] + n[2] * table.dz[i]).max(0.0);
                if cos == 0.0 {
                    continue;
                }
                if shadow_test && occluded(hit, world_dirs[i], &spheres) {
                    continue;
                }
                dacc[0] += cos * wr[i];
                dacc[1] += cos * wg[i];
                dacc[2] += cos * wb[i];
            }

            let f0 = [
                DIELECTRIC_F0 + (mat.albedo[0] - DIELECTRIC_F0) * mat.metallic,
                DIELECTRIC_F0 + (mat.albedo[1] - DIELECTRIC_F0) * mat.metallic,
                DIELECTRIC_F0 + (mat.albedo[2] - DIELECTRIC_F0) * mat.metallic,
            ];
            let sacc = specular_ggx_pixel(n, mat.roughness, f0, view, &table, &wr, &wg, &wb);

            for c in 0..3 {
                diffuse.set(c, py, px, dacc[c]);
                specular.set(c, py, px, sacc[c]);
                albedo.set(c, py, px, mat.albedo[c]);
            }
            rough.set(0, py, px, mat.roughness);
            metal.set(0, py, px, mat.metallic);
            mask.set(0, py, px, 1.0);
            normals[py * res + px] = n;
        }
    }

    let composed = compose(&albedo, &diffuse, &specular)?;
    let normal = NormalMap::from_vectors(
        res,
        res,
        &normals.iter().map(|n| [n[0], n[1], n[2]]).collect::<Vec<_>>(),
    )?;
    Ok((
        ShadingResult { diffuse, specular, composed },
        IntrinsicSet { albedo, normal, roughness: rough, metallic: metal, mask },
    ))
}

fn occluded(origin: [f64; 3], dir: [f64; 3], spheres: &[([f64; 3], f64)]) -> bool {
    const EPS: f64 = 1e-6;
    for &(c, r) in spheres {
        let oc = [origin[0] - c[0], origin[1] - c[1], origin[2] - c[2]];
        let b = oc[0] * dir[0] + oc[1] * dir[1] + oc[2] * dir[2];
        let cc = oc[0] * oc[0] + oc[1] * oc[1] + oc[2] * oc[2] - r * r;
        let disc = b * b - cc;
        if disc <= 0.0 {
            continue;
        }
        let sq = disc.sqrt();
        let t0 = -b - sq;
        let t1 = -b + sq;
        if t0 > EPS || t1 > EPS {
            return true;
        }
    }
    false
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lighting::random_smooth_envmap;
    use crate::rng::Rng;
    use crate::scenegen::{Camera, CameraKind, SceneObject};

    fn random_front_normals(rng: &mut Rng, h: usize, w: usize) -> NormalMap {
        let vecs: Vec<[f32; 3]> = (0..h * w)
            .map(|_| {
                let z = rng.uniform_in(0.05, 1.0);
                let phi = rng.uniform_in(0.0, std::f64::consts::TAU);
                let r = (1.0 - z * z).sqrt();
                [(r * phi.sin()) as f32, (r * phi.cos()) as f32, z as f32]
            })
            .collect();
        NormalMap::from_vectors(h, w, &vecs).unwrap()
    }

    #[test]
    fn lookup_uv_reference_points() {
        let nm = NormalMap::from_vectors(1, 2, &[[0.0, 0.0, 1.0], [0.0, 1.0, 0.0]]).unwrap();
        let uv = normal_lookup_uv(&nm);
        // n = +z: atan2(0,1) = 0 and acos(0) = pi/2 -> the map center.
        assert!(uv.get(0, 0, 0).abs() < 1e-6);
        assert!(uv.get(1, 0, 0).abs() < 1e-6);
        // n = +y: acos(1) = 0 -> top row.
        assert!((uv.get(1, 0, 1) + 1.0).abs() < 1e-6);
    }

    #[test]
    fn black_env_gives_zero_shading() {
        let env = EnvMap::constant(16, 0.0);
        let mut rng = Rng::new(2);
        let nm = random_front_normals(&mut rng, 4, 4);
        let d = diffuse_bruteforce(&env, &nm);
        assert!(d.data().iter().all(|&v| v == 0.0));
        let rough = Image::filled(1, 4, 4, 0.3, ColorSpace::Data);
        let metal = Image::filled(1, 4, 4, 1.0, ColorSpace::Data);
        let alb = Image::filled(3, 4, 4, 1.0, ColorSpace::Linear);
        let s = specular_ggx(&env, &nm, &rough, &metal, &alb, [0.0, 0.0, 1.0]).unwrap();
        assert!(s.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn backfacing_single_texel_is_killed() {
        let mut img = Image::new(3, 16, 32, ColorSpace::Linear);
        for c in 0..3 {
            img.set(c, 2, 5, 10.0); // a direction d
        }
        let env = EnvMap::from_image(img).unwrap();
        let d = crate::lighting::texel_direction(2, 5, 16, 32);
        // normal opposite to d: n.d < 0 -> zero diffuse
        let n = [(-d[0]) as f32, (-d[1]) as f32, (-d[2]) as f32];
        let nm = NormalMap::from_vectors(1, 1, &[n]).unwrap();
        let out = diffuse_bruteforce(&env, &nm);
        assert!(out.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn uniform_env_diffuse_is_pi() {
        let env = EnvMap::constant(32, 1.0);
        let mut rng = Rng::new(7);
        let vecs: Vec<[f32; 3]> = (0..64)
            .map(|_| {
                let z = rng.uniform_in(-1.0, 1.0);
                let phi = rng.uniform_in(0.0, std::f64::consts::TAU);
                let r = (1.0 - z * z).sqrt();
                [(r * phi.cos()) as f32, (r * phi.sin()) as f32, z as f32]
            })
            .collect();
        let nm = NormalMap::from_vectors(8, 8, &vecs).unwrap();
        let d = diffuse_bruteforce(&env, &nm);
        for &v in d.data() {
            assert!((v - std::f32::consts::PI).abs() / std::f32::consts::PI < 1e-3, "{v}");
        }
    }

    #[test]
    fn lookup_values_stay_in_convex_hull() {
        let mut rng = Rng::new(44);
        let e = random_smooth_envmap(&mut rng, 32, 16).unwrap();
        let nm = {
            let vecs: Vec<[f32; 3]> = (0..256)
                .map(|_| {
                    let z = rng.uniform_in(-1.0, 1.0);
                    let phi = rng.uniform_in(0.0, std::f64::consts::TAU);
                    let r = (1.0 - z * z).sqrt();
                    [(r * phi.sin()) as f32, z as f32, (r * phi.cos()) as f32]
                })
                .collect();
            NormalMap::from_vectors(16, 16, &vecs).unwrap()
        };
        let out = diffuse_lookup(&e, &nm).unwrap();
        let lo = e.image().data().iter().cloned().fold(f32::INFINITY, f32::min);
        let hi = e.image().data().iter().cloned().fold(f32::NEG_INFINITY, f32::max);
        for &v in out.data() {
            assert!(v >= lo - 1e-6 && v <= hi + 1e-6);
        }
    }

    #[test]
    fn compose_identities() {
        let mut rng = Rng::new(3);
        let mk = |rng: &mut Rng| {
            let data: Vec<f32> = (0..3 * 16).map(|_| rng.uniform_f32()).collect();
            Image::from_data(3, 4, 4, data, ColorSpace::Linear).unwrap()
        };
        let a = mk(&mut rng);
        let d = mk(&mut rng);
        let s = mk(&mut rng);

        let ones = Image::filled(3, 4, 4, 1.0, ColorSpace::Linear);
        let zeros = Image::new(3, 4, 4, ColorSpace::Linear);
        assert_eq!(compose(&ones, &d, &zeros).unwrap().data(), d.data());
        assert_eq!(compose(&a, &zeros, &s).unwrap().data(), s.data());

        // Exact algebraic inversion for S.
        let out = compose(&a, &d, &s).unwrap();
        let s_resid = out
            .zip_map(&a.zip_map(&d, |x, y| x * y).unwrap(), |o, ad| o - ad)
            .unwrap();
        assert!(s_resid.max_abs_diff(&s) < 1e-6);

        assert!(compose(&a, &d, &Image::new(3, 2, 2, ColorSpace::Linear)).is_err());
    }

    #[test]
    fn composed_dominates_diffuse_times_albedo() {
        // Specular non-negativity: composed >= A (.) D.
        let scene = SceneSpec {
            objects: vec![SceneObject {
                shape: crate::scenegen::Shape::Sphere { center: [0.0, 0.0, 0.0], radius: 0.8 },
                material: BrdfParams { albedo: [0.7, 0.5, 0.3], roughness: 0.4, metallic: 0.5 },
            }],
            camera: Camera::default(),
            seed: 1,
        };
        let mut rng = Rng::new(10);
        let env = random_smooth_envmap(&mut rng, 32, 16).unwrap();
        let (res, _) = render_scene(&scene, &env, &RenderOptions { resolution: 24, cast_shadows: false })
            .unwrap();
        let ad = res
            .diffuse
            .zip_map(&res.composed, |d, _| d)
            .unwrap(); // placeholder shape
        let _ = ad;
        for i in 0..res.composed.data().len() {
            let a_d = res.composed.data()[i] - res.specular.data()[i];
            assert!(res.composed.data()[i] >= a_d - 1e-6);
            assert!(res.specular.data()[i] >= 0.0);
            assert!(res.diffuse.data()[i] >= 0.0);
        }
    }

    #[test]
    fn render_scene_rejects_empty() {
        let scene = SceneSpec { objects: vec![], camera: Camera::default(), seed: 0 };
        let env = EnvMap::constant(16, 1.0);
        assert!(render_scene(&scene, &env, &RenderOptions::default()).is_err());
    }

    #[test]
    fn mask_zero_exactly_on_background() {
        let scene = SceneSpec {
            objects: vec![SceneObject {
                shape: crate::scenegen::Shape::Sphere { center: [0.0, 0.0, 0.0], radius: 0.5 },
                material: BrdfParams { albedo: [0.5, 0.5, 0.5], roughness: 0.8, metallic: 0.0 },
            }],
            camera: Camera {
                kind: CameraKind::Orthographic { half_extent: 1.5 },
                tilt_deg: 0.0,
                distance: 5.0,
            },
            seed: 0,
        };
        let env = EnvMap::constant(16, 0.5);
        let (_, intr) =
            render_scene(&scene, &env, &RenderOptions { resolution: 32, cast_shadows: false }).unwrap();
        // Orthographic, untilted: coverage is exactly the projected disk.
        for y in 0..32 {
            for x in 0..32 {
                let xn = 2.0 * (x as f64 + 0.5) / 32.0 - 1.0;
                let yn = 1.0 - 2.0 * (y as f64 + 0.5) / 32.0;
                let inside = (xn * 1.5).hypot(yn * 1.5) < 0.5;
                let m = intr.mask.get(0, y, x);
                if inside {
                    assert_eq!(m, 1.0, "({y},{x}) should be covered");
                } else if (xn * 1.5).hypot(yn * 1.5) > 0.52 {
                    assert_eq!(m, 0.0, "({y},{x}) should be background");
                }
            }
        }
    }

    #[test]
    fn cast_shadow_darkens_plane_under_sphere() {
        use crate::scenegen::Shape;
        let mat = BrdfParams { albedo: [0.8, 0.8, 0.8], roughness: 1.0, metallic: 0.0 };
        let scene = SceneSpec {
            objects: vec![
                SceneObject { shape: Shape::GroundPlane { y: -0.5 }, material: mat },
                SceneObject { shape: Shape::Sphere { center: [0.0, 0.3, 0.0], radius: 0.45 }, material: mat },
            ],
            camera: Camera { kind: CameraKind::Orthographic { half_extent: 1.4 }, tilt_deg: 35.0, distance: 6.0 },
            seed: 0,
        };
        let env = EnvMap::constant(16, 0.7);
        let res = 48;
        let lit = render_scene(&scene, &env, &RenderOptions { resolution: res, cast_shadows: false }).unwrap();
        let shadowed = render_scene(&scene, &env, &RenderOptions { resolution: res, cast_shadows: true }).unwrap();
        let sum = |img: &Image| img.data().iter().map(|&v| v as f64).sum::<f64>();
        assert!(sum(&shadowed.0.diffuse) < sum(&lit.0.diffuse) * 0.999);
        // Sphere pixels themselves are identical (they receive no cast shadows).
        let tilt = 35.0f32.to_radians();
        let plane_n = [0.0, tilt.cos(), tilt.sin()];
        let mut sphere_diff = 0.0f32;
        for y in 0..res {
            for x in 0..res {
                let n = shadowed.1.normal.vector(y, x);
                let is_plane = (n[0] - plane_n[0]).abs() < 1e-3
                    && (n[1] - plane_n[1]).abs() < 1e-3
                    && (n[2] - plane_n[2]).abs() < 1e-3;
                if lit.1.mask.get(0, y, x) > 0.5 && !is_plane {
                    sphere_diff = sphere_diff
                        .max((shadowed.0.diffuse.get(0, y, x) - lit.0.diffuse.get(0, y, x)).abs());
                }
            }
        }
        assert!(sphere_diff < 1e-6);
    }
}
