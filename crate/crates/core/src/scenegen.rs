//! Procedural synthetic dataset generator: analytic scenes with known
//! intrinsics, lighting sampled per the dataset strategy, and train/test
//! manifests on disk.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{ColorSpace, Image};
use crate::io;
use crate::lighting::{
    point_light_envmap, random_smooth_envmap, render_gray_ball_sized, sample_light_condition,
    EnvMap, GrayBall, LightKind, LightSample,
};
use crate::rng::Rng;
use crate::shading::{render_scene, BrdfParams, IntrinsicSet, RenderOptions};

/// Point-light strength multiplier when an HDRI-like map is mixed in.
pub const HDRI_MODE_STRENGTH_FACTOR: f64 = 0.5;

/// Analytic primitive shapes. Box faces are axis-aligned rectangles.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Shape {
    Sphere { center: [f64; 3], radius: f64 },
    GroundPlane { y: f64 },
    /// Rectangle on the plane `coord[axis] = offset`, bounded on the two
    /// remaining axes (in increasing axis order) by `min`/`max`.
    BoxFace { axis: usize, offset: f64, min: [f64; 2], max: [f64; 2] },
}

impl Shape {
    /// Ray intersection returning (t, world normal facing the ray origin).
    pub fn intersect(&self, origin: [f64; 3], dir: [f64; 3]) -> Option<(f64, [f64; 3])> {
        const EPS: f64 = 1e-9;
        match *self {
            Shape::Sphere { center, radius } => {
                let oc = sub(origin, center);
                let b = dot(oc, dir);
                let c = dot(oc, oc) - radius * radius;
                let disc = b * b - c;
                if disc <= 0.0 {
                    return None;
                }
                let sq = disc.sqrt();
                let t = if -b - sq > EPS { -b - sq } else { -b + sq };
                if t <= EPS {
                    return None;
                }
                let hit = add(origin, scale(dir, t));
                let n = scale(sub(hit, center), 1.0 / radius);
                Some((t, n))
            }
            Shape::GroundPlane { y } => {
                if dir[1].abs() < EPS {
                    return None;
                }
                let t = (y - origin[1]) / dir[1];
                if t <= EPS {
                    return None;
                }
                let n = if dir[1] < 0.0 { [0.0, 1.0, 0.0] } else { [0.0, -1.0, 0.0] };
                Some((t, n))
            }
            Shape::BoxFace { axis, offset, min, max } => {
                if axis > 2 || dir[axis].abs() < EPS {
                    return None;
                }
                let t = (offset - origin[axis]) / dir[axis];
                if t <= EPS {
                    return None;
                }
                let hit = add(origin, scale(dir, t));
                let others: [usize; 2] = match axis {
                    0 => [1, 2],
                    1 => [0, 2],
                    _ => [0, 1],
                };
                for (k, &a) in others.iter().enumerate() {
                    if hit[a] < min[k] || hit[a] > max[k] {
                        return None;
                    }
                }
                let mut n = [0.0; 3];
                n[axis] = if dir[axis] < 0.0 { 1.0 } else { -1.0 };
                Some((t, n))
            }
        }
    }
}

fn dot(a: [f64; 3], b: [f64; 3]) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}
fn sub(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}
fn add(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [a[0] + b[0], a[1] + b[1], a[2] + b[2]]
}
fn scale(a: [f64; 3], k: f64) -> [f64; 3] {
    [a[0] * k, a[1] * k, a[2] * k]
}
fn cross(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [a[1] * b[2] - a[2] * b[1], a[2] * b[0] - a[0] * b[2], a[0] * b[1] - a[1] * b[0]]
}
fn normalize(a: [f64; 3]) -> [f64; 3] {
    let l = dot(a, a).sqrt();
    scale(a, 1.0 / l)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum CameraKind {
    Orthographic { half_extent: f64 },
    Pinhole { fov_deg: f64 },
}

/// Fixed-pose camera: positioned on the +z side, tilted down toward the
/// origin. All shading happens in its frame (z toward the viewer).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Camera {
    pub kind: CameraKind,
    pub tilt_deg: f64,
    pub distance: f64,
}

impl Default for Camera {
    fn default() -> Self {
        Camera { kind: CameraKind::Orthographic { half_extent: 1.6 }, tilt_deg: 20.0, distance: 6.0 }
    }
}

pub struct CameraBasis {
    pub position: [f64; 3],
    pub right: [f64; 3],
    pub up: [f64; 3],
    pub forward: [f64; 3],
}

impl CameraBasis {
    /// World -> camera (x right, y up, z toward the viewer).
    pub fn to_camera(&self, v: [f64; 3]) -> [f64; 3] {
        [dot(v, self.right), dot(v, self.up), -dot(v, self.forward)]
    }

    /// Camera -> world.
    pub fn to_world(&self, v: [f64; 3]) -> [f64; 3] {
        [
            v[0] * self.right[0] + v[1] * self.up[0] - v[2] * self.forward[0],
            v[0] * self.right[1] + v[1] * self.up[1] - v[2] * self.forward[1],
            v[0] * self.right[2] + v[1] * self.up[2] - v[2] * self.forward[2],
        ]
    }
}

impl Camera {
    pub fn basis(&self) -> CameraBasis {
        let t = self.tilt_deg.to_radians();
        let position = [0.0, self.distance * t.sin(), self.distance * t.cos()];
        let forward = normalize(scale(position, -1.0));
        let right = normalize(cross(forward, [0.0, 1.0, 0.0]));
        let up = cross(right, forward);
        CameraBasis { position, right, up, forward }
    }

    /// Ray through normalized image coordinates (x right, y up, in [-1,1]).
    pub fn ray(&self, xn: f64, yn: f64, basis: &CameraBasis) -> ([f64; 3], [f64; 3]) {
        match self.kind {
            CameraKind::Orthographic { half_extent } => {
                let origin = add(
                    basis.position,
                    add(scale(basis.right, xn * half_extent), scale(basis.up, yn * half_extent)),
                );
                (origin, basis.forward)
            }
            CameraKind::Pinhole { fov_deg } => {
                let t = (fov_deg.to_radians() * 0.5).tan();
                let dir = normalize(add(
                    basis.forward,
                    add(scale(basis.right, xn * t), scale(basis.up, yn * t)),
                ));
                (basis.position, dir)
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneObject {
    pub shape: Shape,
    pub material: BrdfParams,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub objects: Vec<SceneObject>,
    pub camera: Camera,
    pub seed: u64,
}

impl SceneSpec {
    /// Rotate the sphere arrangement about the world y axis; planes and
    /// box faces are backdrop and stay put. Used for orbit views.
    pub fn with_view_rotation(&self, angle_rad: f64) -> SceneSpec {
        let (s, c) = (angle_rad.sin(), angle_rad.cos());
        let mut out = self.clone();
        for obj in out.objects.iter_mut() {
            if let Shape::Sphere { center, .. } = &mut obj.shape {
                let (x, z) = (center[0], center[2]);
                center[0] = c * x + s * z;
                center[2] = -s * x + c * z;
            }
        }
        out
    }
}

const MAX_REJECTION_TRIES: usize = 1000;

fn sample_material(rng: &mut Rng) -> BrdfParams {
    let albedo = [
        rng.uniform_in(0.05, 0.95) as f32,
        rng.uniform_in(0.05, 0.95) as f32,
        rng.uniform_in(0.05, 0.95) as f32,
    ];
    let roughness = rng.uniform_in(0.2, 1.0) as f32;
    // Bimodal metallic, mimicking real material statistics.
    let metallic = if rng.chance(0.7) { 0.0 } else { rng.uniform_in(0.5, 1.0) as f32 };
    BrdfParams { albedo, roughness, metallic }
}

/// Rejection-sample a procedural scene with exactly `complexity` primitives
/// (one of which may be a ground plane). Spheres never intersect each other.
pub fn generate_scene(rng: &mut Rng, complexity: usize) -> Result<SceneSpec> {
    if !(1..=8).contains(&complexity) {
        return Err(Error::InvalidArgument(format!("complexity {complexity} not in [1,8]")));
    }
    let seed = rng.next_u64();
    let mut objects = Vec::new();
    let plane_y = -1.0;
    let with_plane = complexity >= 2 && rng.chance(0.5);
    if with_plane {
        objects.push(SceneObject {
            shape: Shape::GroundPlane { y: plane_y },
            material: sample_material(rng),
        });
    }
    let remaining = complexity - usize::from(with_plane);
    let mut spheres: Vec<([f64; 3], f64)> = Vec::new();
    for _ in 0..remaining {
        if rng.chance(0.8) {
            let mut placed = false;
            for _ in 0..MAX_REJECTION_TRIES {
                let radius = rng.uniform_in(0.25, 0.6);
                let center = [
                    rng.uniform_in(-1.1, 1.1),
                    rng.uniform_in(if with_plane { plane_y + radius } else { -0.6 }, 0.9),
                    rng.uniform_in(-1.0, 1.0),
                ];
                let ok = spheres
                    .iter()
                    .all(|&(c, r)| dot(sub(center, c), sub(center, c)).sqrt() >= r + radius);
                if ok {
                    spheres.push((center, radius));
                    objects.push(SceneObject {
                        shape: Shape::Sphere { center, radius },
                        material: sample_material(rng),
                    });
                    placed = true;
                    break;
                }
            }
            if !placed {
                return Err(Error::Sampling(format!(
                    "sphere placement failed after {MAX_REJECTION_TRIES} tries"
                )));
            }
        } else {
            let offset = rng.uniform_in(-2.0, -1.2);
            let x0 = rng.uniform_in(-1.5, 0.8);
            let y0 = rng.uniform_in(-1.0, 0.6);
            let w = rng.uniform_in(0.4, 1.2);
            let h = rng.uniform_in(0.4, 1.2);
            objects.push(SceneObject {
                shape: Shape::BoxFace { axis: 2, offset, min: [x0, y0], max: [x0 + w, y0 + h] },
                material: sample_material(rng),
            });
        }
    }
    Ok(SceneSpec { objects, camera: Camera::default(), seed })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    ObjectTest,
    SceneTest,
}

/// A relighting target: the same scene and view under a different light.
#[derive(Debug, Clone)]
pub struct RelitTarget {
    pub light: usize,
    pub ball: GrayBall,
    pub image: Image,
}

/// One dataset sample with everything the two training stages consume.
/// `input_image`, `diffuse_gt` and `specular_gt` are HDR linear and satisfy
/// the composition identity before any file quantization.
#[derive(Debug, Clone)]
pub struct DatasetRecord {
    pub scene_id: usize,
    pub view: usize,
    pub light: usize,
    pub split: Split,
    pub light_sample: LightSample,
    pub input_image: Image,
    pub ball: GrayBall,
    pub intrinsics: IntrinsicSet,
    pub diffuse_gt: Image,
    pub specular_gt: Image,
    pub relit_targets: Vec<RelitTarget>,
    pub one_hot_label: [f32; 4],
    /// Present for freshly generated records; not reconstructed on read.
    pub env: Option<EnvMap>,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct RecordOptions {
    pub resolution: usize,
    pub env_height: usize,
    pub ball_resolution: usize,
    pub cast_shadows: bool,
}

impl Default for RecordOptions {
    fn default() -> Self {
        RecordOptions { resolution: 64, env_height: 32, ball_resolution: 64, cast_shadows: false }
    }
}

/// Render one scene under `n_views x n_lights` conditions. Every (view,
/// light) pair derives its own substream from `rng`, so generation order
/// does not matter. Records of one view cross-reference each other as
/// relighting targets.
pub fn generate_record(
    scene: &SceneSpec,
    n_views: usize,
    n_lights: usize,
    rng: &Rng,
    scene_id: usize,
    split: Split,
    opts: &RecordOptions,
) -> Result<Vec<DatasetRecord>> {
    if n_views == 0 || n_lights == 0 {
        return Err(Error::InvalidArgument("need at least one view and one light".into()));
    }
    let (env_h, env_w) = (opts.env_height, opts.env_height * 2);
    let render_opts = RenderOptions { resolution: opts.resolution, cast_shadows: opts.cast_shadows };
    let mut records = Vec::with_capacity(n_views * n_lights);
    for view in 0..n_views {
        let angle = 2.0 * std::f64::consts::PI * view as f64 / n_views as f64;
        let view_scene = scene.with_view_rotation(angle);
        let mut per_light: Vec<(LightSample, EnvMap, GrayBall, crate::shading::ShadingResult, IntrinsicSet)> =
            Vec::with_capacity(n_lights);
        for light in 0..n_lights {
            let mut lr = rng.derive(&[scene.seed, view as u64, light as u64]);
            let mut sample = sample_light_condition(&mut lr);
            let ambient = lr.uniform_in(0.05, 0.15) as f32;
            let mut env = if sample.kind == LightKind::PointPlusHdri {
                sample.strength *= HDRI_MODE_STRENGTH_FACTOR;
                let point = point_light_envmap(&sample, env_w, env_h, ambient)?;
                let sky = random_smooth_envmap(&mut lr, env_w, env_h)?;
                EnvMap::from_image(point.image().zip_map(sky.image(), |a, b| a + b)?)?
            } else {
                point_light_envmap(&sample, env_w, env_h, ambient)?
            };
            // Keep the kind annotation on the stored sample.
            env = EnvMap::from_image(env.image().clone())?;
            let ball = render_gray_ball_sized(&env, 0.5, opts.ball_resolution)?;
            let (shading, intrinsics) = render_scene(&view_scene, &env, &render_opts)?;
            per_light.push((sample, env, ball, shading, intrinsics));
        }
        for light in 0..n_lights {
            let relit_targets = (0..n_lights)
                .filter(|&j| j != light)
                .map(|j| RelitTarget {
                    light: j,
                    ball: per_light[j].2.clone(),
                    image: per_light[j].3.composed.clone(),
                })
                .collect();
            let (sample, env, ball, shading, intrinsics) = per_light[light].clone_parts();
            let idx = records.len();
            let mut one_hot = [0.0f32; 4];
            one_hot[idx % 4] = 1.0;
            records.push(DatasetRecord {
                scene_id,
                view,
                light,
                split,
                light_sample: sample,
                input_image: shading.composed.clone(),
                ball,
                intrinsics,
                diffuse_gt: shading.diffuse,
                specular_gt: shading.specular,
                relit_targets,
                one_hot_label: one_hot,
                env: Some(env),
            });
        }
    }
    Ok(records)
}

trait ClonePartsExt {
    fn clone_parts(
        &self,
    ) -> (LightSample, EnvMap, GrayBall, crate::shading::ShadingResult, IntrinsicSet);
}

impl ClonePartsExt
    for (LightSample, EnvMap, GrayBall, crate::shading::ShadingResult, IntrinsicSet)
{
    fn clone_parts(
        &self,
    ) -> (LightSample, EnvMap, GrayBall, crate::shading::ShadingResult, IntrinsicSet) {
        (self.0.clone(), self.1.clone(), self.2.clone(), self.3.clone(), self.4.clone())
    }
}

/// Whole-dataset generation settings.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetConfig {
    pub seed: u64,
    pub train_scenes: usize,
    pub object_test_scenes: usize,
    pub scene_test_scenes: usize,
    pub views: usize,
    pub lights: usize,
    pub max_complexity: usize,
    #[serde(flatten)]
    pub record: RecordOptions,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig {
            seed: 42,
            train_scenes: 64,
            object_test_scenes: 8,
            scene_test_scenes: 4,
            views: 4,
            lights: 4,
            max_complexity: 3,
            record: RecordOptions::default(),
        }
    }
}

/// (scene id, split) pairs of a dataset config, train scenes first.
pub fn dataset_scene_plan(cfg: &DatasetConfig) -> Vec<(usize, Split)> {
    let groups = [
        (Split::Train, cfg.train_scenes),
        (Split::ObjectTest, cfg.object_test_scenes),
        (Split::SceneTest, cfg.scene_test_scenes),
    ];
    let mut plan = Vec::new();
    let mut id = 0usize;
    for (split, count) in groups {
        for _ in 0..count {
            plan.push((id, split));
            id += 1;
        }
    }
    plan
}

/// All records of one scene. Every scene derives its own substream from
/// the dataset seed, so scenes can be generated in any order (or in
/// parallel) with identical results.
pub fn scene_records(cfg: &DatasetConfig, scene_id: usize, split: Split) -> Result<Vec<DatasetRecord>> {
    let mut srng = Rng::new(cfg.seed).derive(&[0x5C3E_AE00, scene_id as u64]);
    let complexity = 1 + srng.below(cfg.max_complexity.clamp(1, 8));
    let scene = generate_scene(&mut srng, complexity)?;
    generate_record(&scene, cfg.views, cfg.lights, &srng, scene_id, split, &cfg.record)
}

/// Generate the full dataset: train scenes first, then the two held-out
/// splits with strictly disjoint scene ids.
pub fn generate_dataset(cfg: &DatasetConfig) -> Result<Vec<DatasetRecord>> {
    let mut records = Vec::new();
    for (scene_id, split) in dataset_scene_plan(cfg) {
        records.extend(scene_records(cfg, scene_id, split)?);
    }
    Ok(records)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub dir: String,
    pub scene: usize,
    pub view: usize,
    pub light: usize,
    pub split: Split,
    pub label: usize,
    pub light_sample: LightSample,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Manifest {
    pub schema: u32,
    pub seed: u64,
    pub records: Vec<ManifestEntry>,
}

pub const MANIFEST_SCHEMA: u32 = 1;

fn record_dir(rec: &DatasetRecord) -> String {
    format!("scene_{:04}/view_{:02}_light_{:02}", rec.scene_id, rec.view, rec.light)
}

/// Write records under `root` in the fixed per-record layout, with
/// `manifest.json` written last as the commit point.
pub fn write_dataset(records: &[DatasetRecord], root: &Path, seed: u64) -> Result<Manifest> {
    let mut entries = Vec::with_capacity(records.len());
    for rec in records {
        let dir = record_dir(rec);
        let full = root.join(&dir);
        std::fs::create_dir_all(&full).map_err(|e| Error::io(&full, e))?;
        io::write_png(&full.join("input.png"), &rec.input_image)?;
        io::write_pfm(&full.join("ball.pfm"), rec.ball.image())?;
        io::write_png(&full.join("albedo.png"), &rec.intrinsics.albedo)?;
        io::write_pfm(&full.join("normal.pfm"), rec.intrinsics.normal.image())?;
        io::write_png(&full.join("roughness.png"), &rec.intrinsics.roughness)?;
        io::write_png(&full.join("metallic.png"), &rec.intrinsics.metallic)?;
        io::write_png(&full.join("mask.png"), &rec.intrinsics.mask)?;
        io::write_pfm(&full.join("diffuse.pfm"), &rec.diffuse_gt)?;
        io::write_pfm(&full.join("specular.pfm"), &rec.specular_gt)?;
        entries.push(ManifestEntry {
            dir,
            scene: rec.scene_id,
            view: rec.view,
            light: rec.light,
            split: rec.split,
            label: rec.one_hot_label.iter().position(|&v| v == 1.0).unwrap_or(0),
            light_sample: rec.light_sample.clone(),
        });
    }
    let manifest = Manifest { schema: MANIFEST_SCHEMA, seed, records: entries };
    let path = root.join("manifest.json");
    let json = serde_json::to_string_pretty(&manifest)
        .map_err(|e| Error::format(&path, e.to_string()))?;
    std::fs::write(&path, json).map_err(|e| Error::io(&path, e))?;
    Ok(manifest)
}

/// Read a dataset back. PFM channels are bit-exact; PNG channels carry
/// 8-bit quantization. Relighting targets are reconstructed from sibling
/// records of the same scene and view.
pub fn read_dataset(root: &Path) -> Result<(Vec<DatasetRecord>, Manifest)> {
    let manifest_path = root.join("manifest.json");
    let text = std::fs::read_to_string(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
    let manifest: Manifest =
        serde_json::from_str(&text).map_err(|e| Error::format(&manifest_path, e.to_string()))?;
    if manifest.schema != MANIFEST_SCHEMA {
        return Err(Error::format(
            &manifest_path,
            format!("unsupported schema {}", manifest.schema),
        ));
    }
    let mut records = Vec::with_capacity(manifest.records.len());
    for entry in &manifest.records {
        let dir = root.join(&entry.dir);
        if !dir.is_dir() {
            return Err(Error::MissingData(format!("record dir {}", dir.display())));
        }
        let input_image = io::read_png(&dir.join("input.png"), ColorSpace::Linear)?;
        let ball = GrayBall::from_image(io::read_pfm(&dir.join("ball.pfm"))?)?;
        let albedo = io::read_png(&dir.join("albedo.png"), ColorSpace::Linear)?;
        let normal_img = io::read_pfm(&dir.join("normal.pfm"))?.with_color_space(ColorSpace::Data);
        let normal = crate::image::NormalMap::from_image(normal_img)?;
        let roughness = io::read_png(&dir.join("roughness.png"), ColorSpace::Data)?;
        let metallic = io::read_png(&dir.join("metallic.png"), ColorSpace::Data)?;
        let mask = io::read_png(&dir.join("mask.png"), ColorSpace::Data)?
            .map(|v| if v > 0.5 { 1.0 } else { 0.0 });
        let diffuse_gt = io::read_pfm(&dir.join("diffuse.pfm"))?;
        let specular_gt = io::read_pfm(&dir.join("specular.pfm"))?;
        let mut one_hot = [0.0f32; 4];
        one_hot[entry.label.min(3)] = 1.0;
        records.push(DatasetRecord {
            scene_id: entry.scene,
            view: entry.view,
            light: entry.light,
            split: entry.split,
            light_sample: entry.light_sample.clone(),
            input_image,
            ball,
            intrinsics: IntrinsicSet { albedo, normal, roughness, metallic, mask },
            diffuse_gt,
            specular_gt,
            relit_targets: Vec::new(),
            one_hot_label: one_hot,
            env: None,
        });
    }
    // Attach cross-lighting targets from siblings.
    let snapshot: Vec<(usize, usize, usize, GrayBall, Image)> = records
        .iter()
        .map(|r| (r.scene_id, r.view, r.light, r.ball.clone(), r.input_image.clone()))
        .collect();
    for rec in records.iter_mut() {
        rec.relit_targets = snapshot
            .iter()
            .filter(|(s, v, l, _, _)| *s == rec.scene_id && *v == rec.view && *l != rec.light)
            .map(|(_, _, l, ball, image)| RelitTarget { light: *l, ball: ball.clone(), image: image.clone() })
            .collect();
    }
    Ok((records, manifest))
}

/// Indices of records grouped by (scene, view); the unit inside which
/// records relight each other.
pub fn group_by_scene_view(records: &[DatasetRecord]) -> Vec<Vec<usize>> {
    let mut groups: Vec<((usize, usize), Vec<usize>)> = Vec::new();
    for (i, r) in records.iter().enumerate() {
        match groups.iter_mut().find(|(k, _)| *k == (r.scene_id, r.view)) {
            Some((_, v)) => v.push(i),
            None => groups.push(((r.scene_id, r.view), vec![i])),
        }
    }
    groups.into_iter().map(|(_, v)| v).collect()
}
