//! Procedural analytic scenes, the exact reference renderer, and the
//! dataset file format.
//!
//! A scene is a handful of constant-density primitives (axis-aligned boxes
//! and spheres), one subset of which moves rigidly along a ground-truth
//! trajectory. The reference renderer integrates these fields with dense
//! uniform quadrature; its output doubles as training data and as a
//! brute-force oracle for the learned renderer.
//!
//! Ground-truth poses describe *object motion*: `M_t` carries a canonical
//! (frame 0) object point to its frame-`t` world location, `M_0 = I`. The
//! trainer's per-frame transform (which carries world points back into the
//! canonical frame) is the inverse of `M_t`; conversions happen at the
//! dataset/eval boundary so each module sees one convention.

use crate::render::Ray;
use crate::se3::{inverse, transform_point, PoseRows, RigidTransform};
use nalgebra::Vector3;
use serde::{Deserialize, Serialize};
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

pub const MANIFEST_VERSION: u32 = 1;
pub const MANIFEST_NAME: &str = "manifest.json";

/// Images are (height, width, rgb) arrays of f64 in [0, 1].
pub type Image = ndarray::Array3<f64>;

#[derive(Debug, thiserror::Error)]
pub enum DatasetError {
    #[error("io error on {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("manifest parse error: {0}")]
    Manifest(#[from] serde_json::Error),
    #[error("unsupported dataset format version {0} (expected {MANIFEST_VERSION})")]
    Version(u32),
    #[error("missing image file {0}")]
    MissingImage(PathBuf),
    #[error("image {path} has size {got_w}x{got_h}, camera expects {want_w}x{want_h}")]
    DimensionMismatch { path: PathBuf, got_w: usize, got_h: usize, want_w: usize, want_h: usize },
    #[error("truncated or corrupt float sidecar {0}")]
    BadSidecar(PathBuf),
    #[error("invalid pose in manifest: {0}")]
    BadPose(#[from] crate::se3::Se3Error),
    #[error("image decode error on {path}: {source}")]
    Decode { path: PathBuf, source: image::ImageError },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DatasetError + '_ {
    move |source| DatasetError::Io { path: path.to_path_buf(), source }
}

/// Pinhole camera with a camera-to-world pose. The camera looks down its
/// local -z axis; +x is image right, +y image up.
#[derive(Debug, Clone)]
pub struct Camera {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
    pub camera_to_world: RigidTransform,
    pub s_near: f64,
    pub s_far: f64,
}

impl Camera {
    /// Places the camera at `eye` looking at `target`.
    pub fn look_at(
        eye: Vector3<f64>,
        target: Vector3<f64>,
        up: Vector3<f64>,
        fx: f64,
        width: usize,
        height: usize,
        s_near: f64,
        s_far: f64,
    ) -> Self {
        let backward = (eye - target).normalize(); // camera +z
        let right = up.cross(&backward).normalize();
        let cam_up = backward.cross(&right);
        let mut r = nalgebra::Matrix3::zeros();
        r.set_column(0, &right);
        r.set_column(1, &cam_up);
        r.set_column(2, &backward);
        Camera {
            fx,
            fy: fx,
            cx: width as f64 / 2.0,
            cy: height as f64 / 2.0,
            width,
            height,
            camera_to_world: RigidTransform::from_parts(r, eye),
            s_near,
            s_far,
        }
    }

    pub fn center(&self) -> Vector3<f64> {
        self.camera_to_world.t
    }
}

/// Ray through the center of pixel (row, col). Origin is the camera center;
/// the direction is unit length in world coordinates.
pub fn pixel_ray(camera: &Camera, row: usize, col: usize) -> Ray {
    assert!(row < camera.height && col < camera.width, "pixel out of bounds");
    let x = (col as f64 + 0.5 - camera.cx) / camera.fx;
    let y = -((row as f64 + 0.5 - camera.cy) / camera.fy);
    let dir_cam = Vector3::new(x, y, -1.0);
    let dir_world = (camera.camera_to_world.r * dir_cam).normalize();
    Ray::new(camera.center(), dir_world, camera.s_near, camera.s_far)
}

/// Axis-aligned box.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct Aabb {
    pub min: [f64; 3],
    pub max: [f64; 3],
}

impl Aabb {
    pub fn new(min: [f64; 3], max: [f64; 3]) -> Self {
        Aabb { min, max }
    }

    pub fn contains(&self, p: &Vector3<f64>) -> bool {
        (0..3).all(|i| self.min[i] <= p[i] && p[i] <= self.max[i])
    }

    pub fn diagonal(&self) -> f64 {
        (0..3).map(|i| (self.max[i] - self.min[i]).powi(2)).sum::<f64>().sqrt()
    }

    pub fn corners(&self) -> [Vector3<f64>; 8] {
        let mut out = [Vector3::zeros(); 8];
        for (i, corner) in out.iter_mut().enumerate() {
            *corner = Vector3::new(
                if i & 1 == 0 { self.min[0] } else { self.max[0] },
                if i & 2 == 0 { self.min[1] } else { self.max[1] },
                if i & 4 == 0 { self.min[2] } else { self.max[2] },
            );
        }
        out
    }

    pub fn grow_to(&mut self, p: &Vector3<f64>) {
        for i in 0..3 {
            self.min[i] = self.min[i].min(p[i]);
            self.max[i] = self.max[i].max(p[i]);
        }
    }

    /// Bounding box of this box swept through a pose sequence.
    pub fn swept(&self, trajectory: &[RigidTransform]) -> Aabb {
        let mut out = Aabb::new([f64::INFINITY; 3], [f64::NEG_INFINITY; 3]);
        for pose in trajectory {
            for c in self.corners() {
                out.grow_to(&transform_point(pose, &c));
            }
        }
        out
    }
}

#[derive(Debug, Clone, Copy)]
pub enum Shape {
    Box { center: Vector3<f64>, half: Vector3<f64> },
    Sphere { center: Vector3<f64>, radius: f64 },
}

impl Shape {
    fn contains(&self, p: &Vector3<f64>) -> bool {
        match self {
            Shape::Box { center, half } => {
                (0..3).all(|i| (p[i] - center[i]).abs() <= half[i])
            }
            Shape::Sphere { center, radius } => (p - center).norm_squared() <= radius * radius,
        }
    }
}

/// Direction-dependent highlight: `strength * max(0, d . normal)` of white
/// is added to the albedo.
#[derive(Debug, Clone, Copy)]
pub struct Tint {
    pub strength: f64,
    pub normal: Vector3<f64>,
}

#[derive(Debug, Clone, Copy)]
pub struct Primitive {
    pub shape: Shape,
    pub density: f64,
    pub albedo: [f64; 3],
    pub tint: Option<Tint>,
}

impl Primitive {
    fn color(&self, d: &Vector3<f64>) -> [f64; 3] {
        match self.tint {
            None => self.albedo,
            Some(t) => {
                let h = t.strength * d.dot(&t.normal).max(0.0);
                [
                    (self.albedo[0] + h).min(1.0),
                    (self.albedo[1] + h).min(1.0),
                    (self.albedo[2] + h).min(1.0),
                ]
            }
        }
    }
}

/// Scene description: static primitives, dynamic primitives (defined in the
/// canonical frame), the object-motion trajectory, and the dynamic object's
/// canonical-frame bounding box.
#[derive(Debug, Clone)]
pub struct AnalyticScene {
    pub statics: Vec<Primitive>,
    pub dynamics: Vec<Primitive>,
    /// Object motion per frame, `trajectory[0] = I`.
    pub trajectory: Vec<RigidTransform>,
    pub object_bbox: Aabb,
    pub background: [f64; 3],
}

fn eval_primitives(prims: &[Primitive], p: &Vector3<f64>, d: &Vector3<f64>) -> (f64, [f64; 3]) {
    let mut sigma = 0.0;
    let mut color = [0.0; 3];
    for prim in prims {
        if prim.shape.contains(p) {
            let c = prim.color(d);
            sigma += prim.density;
            for ch in 0..3 {
                color[ch] += prim.density * c[ch];
            }
        }
    }
    if sigma > 0.0 {
        for ch in color.iter_mut() {
            *ch /= sigma;
        }
    }
    (sigma, color)
}

impl AnalyticScene {
    pub fn frame_count(&self) -> usize {
        self.trajectory.len()
    }

    /// Static field at a world point.
    pub fn eval_static(&self, p: &Vector3<f64>, d: &Vector3<f64>) -> (f64, [f64; 3]) {
        eval_primitives(&self.statics, p, d)
    }

    /// Dynamic field at a world point and frame: containment is tested in
    /// the object frame, i.e. at `M_t^-1 p`.
    pub fn eval_dynamic(&self, p: &Vector3<f64>, d: &Vector3<f64>, t: usize) -> (f64, [f64; 3]) {
        let inv = inverse(&self.trajectory[t]);
        let q = transform_point(&inv, p);
        let dq = inv.r * d;
        eval_primitives(&self.dynamics, &q, &dq)
    }
}

/// Combined ground-truth field: summed density and the density-weighted
/// color blend of every primitive containing `p` at frame `t`.
pub fn oracle_field_eval(
    scene: &AnalyticScene,
    p: &Vector3<f64>,
    d: &Vector3<f64>,
    t: usize,
) -> (f64, [f64; 3]) {
    let (ss, cs) = scene.eval_static(p, d);
    let (sd, cd) = scene.eval_dynamic(p, d, t);
    let sigma = ss + sd;
    if sigma == 0.0 {
        return (0.0, [0.0; 3]);
    }
    let mut color = [0.0; 3];
    for ch in 0..3 {
        color[ch] = (ss * cs[ch] + sd * cd[ch]) / sigma;
    }
    (sigma, color)
}

/// Brute-force reference render over an `n_oracle`-interval uniform grid,
/// composited onto the background color. Within each grid interval the
/// optical depth of every primitive is integrated *exactly* from the
/// analytic ray-primitive intersection, so the piecewise-constant fields
/// are resolved to machine precision except where differently colored
/// primitives share one interval. Deterministic; parallel over pixels.
pub fn oracle_render(scene: &AnalyticScene, camera: &Camera, t: usize, n_oracle: usize) -> Image {
    assert!(n_oracle >= 1024, "oracle quadrature needs at least 1024 intervals");
    use rayon::prelude::*;
    let (h, w) = (camera.height, camera.width);
    let rows: Vec<Vec<[f64; 3]>> = (0..h)
        .into_par_iter()
        .map(|row| {
            (0..w)
                .map(|col| {
                    let ray = pixel_ray(camera, row, col);
                    oracle_render_ray(scene, &ray, t, n_oracle)
                })
                .collect()
        })
        .collect();
    let mut img = Image::zeros((h, w, 3));
    for (r, row) in rows.iter().enumerate() {
        for (c, px) in row.iter().enumerate() {
            for ch in 0..3 {
                img[[r, c, ch]] = px[ch];
            }
        }
    }
    img
}

/// Depth range over which a ray overlaps a primitive, in the primitive's
/// own frame.
fn ray_shape_span(shape: &Shape, origin: &Vector3<f64>, dir: &Vector3<f64>) -> Option<(f64, f64)> {
    match shape {
        Shape::Box { center, half } => {
            let mut t0 = f64::NEG_INFINITY;
            let mut t1 = f64::INFINITY;
            for i in 0..3 {
                let (lo, hi) = (center[i] - half[i], center[i] + half[i]);
                if dir[i].abs() < 1e-15 {
                    if origin[i] < lo || origin[i] > hi {
                        return None;
                    }
                } else {
                    let a = (lo - origin[i]) / dir[i];
                    let b = (hi - origin[i]) / dir[i];
                    t0 = t0.max(a.min(b));
                    t1 = t1.min(a.max(b));
                }
            }
            (t0 < t1).then_some((t0, t1))
        }
        Shape::Sphere { center, radius } => {
            let oc = origin - center;
            let b = oc.dot(dir);
            let c = oc.norm_squared() - radius * radius;
            let disc = b * b - c;
            (disc > 0.0).then(|| {
                let sq = disc.sqrt();
                (-b - sq, -b + sq)
            })
        }
    }
}

fn oracle_render_ray(scene: &AnalyticScene, ray: &Ray, t: usize, n: usize) -> [f64; 3] {
    // Per-primitive depth spans along this ray (the dynamic set is
    // intersected in the object frame) with per-ray colors.
    struct Span {
        t0: f64,
        t1: f64,
        density: f64,
        color: [f64; 3],
    }
    let inv = inverse(&scene.trajectory[t]);
    let obj_origin = transform_point(&inv, &ray.origin);
    let obj_dir = inv.r * ray.dir;
    let mut spans: Vec<Span> = Vec::new();
    for prim in &scene.statics {
        if let Some((t0, t1)) = ray_shape_span(&prim.shape, &ray.origin, &ray.dir) {
            spans.push(Span { t0, t1, density: prim.density, color: prim.color(&ray.dir) });
        }
    }
    for prim in &scene.dynamics {
        if let Some((t0, t1)) = ray_shape_span(&prim.shape, &obj_origin, &obj_dir) {
            spans.push(Span { t0, t1, density: prim.density, color: prim.color(&obj_dir) });
        }
    }

    let delta = (ray.s_far - ray.s_near) / n as f64;
    let mut trans = 1.0f64;
    let mut color = [0.0; 3];
    for i in 0..n {
        let a = ray.s_near + i as f64 * delta;
        let b = a + delta;
        let mut tau = 0.0;
        let mut mix = [0.0; 3];
        for span in &spans {
            let overlap = (b.min(span.t1) - a.max(span.t0)).max(0.0);
            if overlap > 0.0 {
                let contrib = span.density * overlap;
                tau += contrib;
                for ch in 0..3 {
                    mix[ch] += contrib * span.color[ch];
                }
            }
        }
        if tau > 0.0 {
            let alpha = 1.0 - (-tau).exp();
            for ch in 0..3 {
                color[ch] += trans * alpha * mix[ch] / tau;
            }
            trans *= (-tau).exp();
            if trans < 1e-12 {
                break;
            }
        }
    }
    for ch in 0..3 {
        color[ch] += trans * scene.background[ch];
    }
    color
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ViewRole {
    Train,
    Eval,
}

#[derive(Debug, Clone)]
pub struct View {
    pub camera: Camera,
    pub role: ViewRole,
}

/// An on-disk or in-memory multi-view multi-frame image collection.
///
/// Ground-truth poses are deliberately not public: the trainer must never
/// see them. Evaluation code reads them through
/// [`Dataset::gt_trajectory_for_eval`].
#[derive(Debug, Clone)]
pub struct Dataset {
    pub views: Vec<View>,
    /// images[view][frame]
    pub images: Vec<Vec<Image>>,
    pub frame_count: usize,
    pub background: [f64; 3],
    pub object_bbox: Option<Aabb>,
    /// Name of the bundled preset this dataset was generated from, when any.
    pub scene_preset: Option<String>,
    gt_trajectory: Option<Vec<RigidTransform>>,
}

impl Dataset {
    pub fn train_view_indices(&self) -> Vec<usize> {
        (0..self.views.len()).filter(|&i| self.views[i].role == ViewRole::Train).collect()
    }

    pub fn eval_view_indices(&self) -> Vec<usize> {
        (0..self.views.len()).filter(|&i| self.views[i].role == ViewRole::Eval).collect()
    }

    /// Ground-truth object-motion poses; evaluation only.
    pub fn gt_trajectory_for_eval(&self) -> Option<&[RigidTransform]> {
        self.gt_trajectory.as_deref()
    }

    pub fn pixel_count_per_view(&self) -> usize {
        let c = &self.views[0].camera;
        c.width * c.height
    }
}

#[derive(Serialize, Deserialize)]
struct ManifestView {
    role: ViewRole,
    fx: f64,
    fy: f64,
    cx: f64,
    cy: f64,
    width: usize,
    height: usize,
    s_near: f64,
    s_far: f64,
    /// Row-major 3x4 camera-to-world matrix.
    camera_to_world: PoseRows,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    format_version: u32,
    frame_count: usize,
    background: [f64; 3],
    views: Vec<ManifestView>,
    /// Row-major 3x4 object-motion poses, one per frame; frame 0 identity.
    gt_object_trajectory: Option<Vec<PoseRows>>,
    object_bbox: Option<Aabb>,
    #[serde(default)]
    scene_preset: Option<String>,
}

pub fn image_file_stem(view: usize, frame: usize) -> String {
    format!("view{view:02}_frame{frame:03}")
}

fn save_png(img: &Image, path: &Path) -> Result<(), DatasetError> {
    let (h, w) = (img.shape()[0], img.shape()[1]);
    let mut buf = image::RgbImage::new(w as u32, h as u32);
    for r in 0..h {
        for c in 0..w {
            let px = [
                (img[[r, c, 0]].clamp(0.0, 1.0) * 255.0).round() as u8,
                (img[[r, c, 1]].clamp(0.0, 1.0) * 255.0).round() as u8,
                (img[[r, c, 2]].clamp(0.0, 1.0) * 255.0).round() as u8,
            ];
            buf.put_pixel(c as u32, r as u32, image::Rgb(px));
        }
    }
    buf.save(path).map_err(|source| DatasetError::Decode { path: path.to_path_buf(), source })
}

fn load_png(path: &Path) -> Result<Image, DatasetError> {
    let img = image::open(path)
        .map_err(|source| DatasetError::Decode { path: path.to_path_buf(), source })?
        .to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut out = Image::zeros((h, w, 3));
    for r in 0..h {
        for c in 0..w {
            let px = img.get_pixel(c as u32, r as u32);
            for ch in 0..3 {
                out[[r, c, ch]] = px[ch] as f64 / 255.0;
            }
        }
    }
    Ok(out)
}

const SIDECAR_MAGIC: &[u8; 8] = b"SNIMGF32";

/// Raw float sidecar: magic, u32 height/width/channels (little-endian),
/// then row-major f32 samples.
pub fn save_f32_sidecar(img: &Image, path: &Path) -> Result<(), DatasetError> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path).map_err(io_err(path))?);
    f.write_all(SIDECAR_MAGIC).map_err(io_err(path))?;
    for dim in [img.shape()[0], img.shape()[1], img.shape()[2]] {
        f.write_all(&(dim as u32).to_le_bytes()).map_err(io_err(path))?;
    }
    for v in img.iter() {
        f.write_all(&(*v as f32).to_le_bytes()).map_err(io_err(path))?;
    }
    Ok(())
}

pub fn load_f32_sidecar(path: &Path) -> Result<Image, DatasetError> {
    let mut f = std::io::BufReader::new(std::fs::File::open(path).map_err(io_err(path))?);
    let mut magic = [0u8; 8];
    f.read_exact(&mut magic).map_err(|_| DatasetError::BadSidecar(path.to_path_buf()))?;
    if &magic != SIDECAR_MAGIC {
        return Err(DatasetError::BadSidecar(path.to_path_buf()));
    }
    let mut dims = [0usize; 3];
    for d in dims.iter_mut() {
        let mut b = [0u8; 4];
        f.read_exact(&mut b).map_err(|_| DatasetError::BadSidecar(path.to_path_buf()))?;
        *d = u32::from_le_bytes(b) as usize;
    }
    let mut data = Vec::with_capacity(dims[0] * dims[1] * dims[2]);
    let mut b = [0u8; 4];
    for _ in 0..dims[0] * dims[1] * dims[2] {
        f.read_exact(&mut b).map_err(|_| DatasetError::BadSidecar(path.to_path_buf()))?;
        data.push(f32::from_le_bytes(b) as f64);
    }
    Image::from_shape_vec((dims[0], dims[1], dims[2]), data)
        .map_err(|_| DatasetError::BadSidecar(path.to_path_buf()))
}

/// Renders every (view, frame) image with the reference renderer and writes
/// the dataset (manifest, PNGs, float sidecars) to `out_dir`.
pub fn generate_dataset(
    scene: &AnalyticScene,
    views: &[(Camera, ViewRole)],
    out_dir: &Path,
    n_oracle: usize,
) -> Result<Dataset, DatasetError> {
    generate_dataset_named(scene, views, out_dir, n_oracle, None)
}

/// [`generate_dataset`] with a preset name recorded in the manifest so that
/// evaluation can rebuild the analytic ground truth.
pub fn generate_dataset_named(
    scene: &AnalyticScene,
    views: &[(Camera, ViewRole)],
    out_dir: &Path,
    n_oracle: usize,
    scene_preset: Option<&str>,
) -> Result<Dataset, DatasetError> {
    std::fs::create_dir_all(out_dir).map_err(io_err(out_dir))?;
    let frame_count = scene.frame_count();
    let mut images: Vec<Vec<Image>> = Vec::with_capacity(views.len());
    for (v, (camera, _)) in views.iter().enumerate() {
        let mut per_view = Vec::with_capacity(frame_count);
        for t in 0..frame_count {
            let img = oracle_render(scene, camera, t, n_oracle);
            let stem = image_file_stem(v, t);
            save_png(&img, &out_dir.join(format!("{stem}.png")))?;
            save_f32_sidecar(&img, &out_dir.join(format!("{stem}.f32")))?;
            per_view.push(img);
        }
        images.push(per_view);
    }

    let manifest = Manifest {
        format_version: MANIFEST_VERSION,
        frame_count,
        background: scene.background,
        views: views
            .iter()
            .map(|(c, role)| ManifestView {
                role: *role,
                fx: c.fx,
                fy: c.fy,
                cx: c.cx,
                cy: c.cy,
                width: c.width,
                height: c.height,
                s_near: c.s_near,
                s_far: c.s_far,
                camera_to_world: PoseRows::from_transform(&c.camera_to_world),
            })
            .collect(),
        gt_object_trajectory: Some(
            scene.trajectory.iter().map(PoseRows::from_transform).collect(),
        ),
        object_bbox: Some(scene.object_bbox),
        scene_preset: scene_preset.map(str::to_owned),
    };
    let manifest_path = out_dir.join(MANIFEST_NAME);
    let json = serde_json::to_string_pretty(&manifest)?;
    std::fs::write(&manifest_path, json).map_err(io_err(&manifest_path))?;

    Ok(Dataset {
        views: views.iter().map(|(c, role)| View { camera: c.clone(), role: *role }).collect(),
        images,
        frame_count,
        background: scene.background,
        object_bbox: Some(scene.object_bbox),
        scene_preset: scene_preset.map(str::to_owned),
        gt_trajectory: Some(scene.trajectory.clone()),
    })
}

/// Loads a dataset directory. Float sidecars are preferred (lossless); PNGs
/// are the fallback with at most 1/255 quantization error.
pub fn load_dataset(dir: &Path) -> Result<Dataset, DatasetError> {
    let manifest_path = dir.join(MANIFEST_NAME);
    let json = std::fs::read_to_string(&manifest_path).map_err(io_err(&manifest_path))?;
    let manifest: Manifest = serde_json::from_str(&json)?;
    if manifest.format_version != MANIFEST_VERSION {
        return Err(DatasetError::Version(manifest.format_version));
    }
    let mut views = Vec::with_capacity(manifest.views.len());
    for mv in &manifest.views {
        views.push(View {
            camera: Camera {
                fx: mv.fx,
                fy: mv.fy,
                cx: mv.cx,
                cy: mv.cy,
                width: mv.width,
                height: mv.height,
                camera_to_world: mv.camera_to_world.to_transform()?,
                s_near: mv.s_near,
                s_far: mv.s_far,
            },
            role: mv.role,
        });
    }
    let gt_trajectory = match &manifest.gt_object_trajectory {
        Some(poses) => {
            Some(poses.iter().map(|p| p.to_transform()).collect::<Result<Vec<_>, _>>()?)
        }
        None => None,
    };

    let mut images = Vec::with_capacity(views.len());
    for (v, view) in views.iter().enumerate() {
        let mut per_view = Vec::with_capacity(manifest.frame_count);
        for t in 0..manifest.frame_count {
            let stem = image_file_stem(v, t);
            let sidecar = dir.join(format!("{stem}.f32"));
            let png = dir.join(format!("{stem}.png"));
            let img = if sidecar.exists() {
                load_f32_sidecar(&sidecar)?
            } else if png.exists() {
                load_png(&png)?
            } else {
                return Err(DatasetError::MissingImage(png));
            };
            let (h, w) = (img.shape()[0], img.shape()[1]);
            if h != view.camera.height || w != view.camera.width {
                return Err(DatasetError::DimensionMismatch {
                    path: if sidecar.exists() { sidecar } else { png },
                    got_w: w,
                    got_h: h,
                    want_w: view.camera.width,
                    want_h: view.camera.height,
                });
            }
            per_view.push(img);
        }
        images.push(per_view);
    }

    Ok(Dataset {
        views,
        images,
        frame_count: manifest.frame_count,
        background: manifest.background,
        object_bbox: manifest.object_bbox,
        scene_preset: manifest.scene_preset,
        gt_trajectory,
    })
}

/// Object motion of the bundled presets: rotate about the object's own
/// center, then translate.
fn motion_about(center: Vector3<f64>, angle_z: f64, translate: Vector3<f64>) -> RigidTransform {
    let r = nalgebra::Rotation3::from_axis_angle(&Vector3::z_axis(), angle_z);
    let r = r.into_inner();
    RigidTransform::from_parts(r, translate + center - r * center)
}

/// The standard desk-scale camera rig: `rows x cols` of training cameras on
/// a sphere around the target plus one held-out evaluation camera between
/// the rows.
pub fn preset_rig(target: Vector3<f64>, radius: f64, res: usize) -> Vec<(Camera, ViewRole)> {
    let azimuths = [-36.0f64, -12.0, 12.0, 36.0];
    let elevations = [18.0f64, 38.0];
    let fx = res as f64 * 78.0 / 64.0;
    let mut views = Vec::new();
    let place = |az_deg: f64, el_deg: f64| -> Vector3<f64> {
        let az = az_deg.to_radians();
        let el = el_deg.to_radians();
        // Cameras sit on the -y side of the scene.
        target
            + radius
                * Vector3::new(el.cos() * az.sin(), -(el.cos() * az.cos()), el.sin())
    };
    for &el in &elevations {
        for &az in &azimuths {
            let cam = Camera::look_at(
                place(az, el),
                target,
                Vector3::z(),
                fx,
                res,
                res,
                1.0,
                3.8,
            );
            views.push((cam, ViewRole::Train));
        }
    }
    let eval = Camera::look_at(place(0.0, 28.0), target, Vector3::z(), fx, res, res, 1.0, 3.8);
    views.push((eval, ViewRole::Eval));
    views
}

/// "desk": static room (floor, back wall, desk) and a box that slides and
/// yaws across the floor. Translation-dominant trajectory, 10 frames.
pub fn scene_desk() -> (AnalyticScene, Vec<(Camera, ViewRole)>) {
    let chair_center = Vector3::new(0.32, -0.28, -0.36);
    let chair_half = Vector3::new(0.16, 0.12, 0.14);
    let frames = 10;
    let trajectory: Vec<RigidTransform> = (0..frames)
        .map(|t| {
            let t = t as f64;
            motion_about(
                chair_center,
                (2.0 * t).to_radians(),
                Vector3::new(0.045 * t, 0.02 * t, 0.0),
            )
        })
        .collect();
    let scene = AnalyticScene {
        statics: vec![
            Primitive {
                shape: Shape::Box {
                    center: Vector3::new(0.0, 0.0, -0.55),
                    half: Vector3::new(0.9, 0.9, 0.05),
                },
                density: 140.0,
                albedo: [0.42, 0.45, 0.50],
                tint: None,
            },
            Primitive {
                shape: Shape::Box {
                    center: Vector3::new(0.0, 0.75, -0.05),
                    half: Vector3::new(0.9, 0.06, 0.55),
                },
                density: 140.0,
                albedo: [0.35, 0.55, 0.50],
                tint: None,
            },
            Primitive {
                shape: Shape::Box {
                    center: Vector3::new(-0.30, 0.10, -0.32),
                    half: Vector3::new(0.28, 0.22, 0.18),
                },
                density: 140.0,
                albedo: [0.55, 0.38, 0.20],
                tint: None,
            },
        ],
        dynamics: vec![Primitive {
            shape: Shape::Box { center: chair_center, half: chair_half },
            density: 140.0,
            albedo: [0.80, 0.25, 0.15],
            tint: None,
        }],
        trajectory,
        object_bbox: Aabb::new(
            [
                chair_center[0] - chair_half[0],
                chair_center[1] - chair_half[1],
                chair_center[2] - chair_half[2],
            ],
            [
                chair_center[0] + chair_half[0],
                chair_center[1] + chair_half[1],
                chair_center[2] + chair_half[2],
            ],
        ),
        background: [0.0, 0.0, 0.0],
    };
    (scene, preset_rig(Vector3::new(0.0, 0.0, -0.1), 2.3, 64))
}

/// "bar": a sphere gliding over a slab with a view-dependent sheen, so the
/// direction input carries real signal.
pub fn scene_bar() -> (AnalyticScene, Vec<(Camera, ViewRole)>) {
    let sphere_center = Vector3::new(0.30, 0.0, -0.18);
    let frames = 10;
    let trajectory: Vec<RigidTransform> = (0..frames)
        .map(|t| {
            let t = t as f64;
            motion_about(sphere_center, 0.0, Vector3::new(-0.055 * t, 0.015 * t, 0.0))
        })
        .collect();
    let r = 0.17;
    let scene = AnalyticScene {
        statics: vec![
            Primitive {
                shape: Shape::Box {
                    center: Vector3::new(0.0, 0.0, -0.42),
                    half: Vector3::new(0.85, 0.85, 0.06),
                },
                density: 160.0,
                albedo: [0.15, 0.15, 0.18],
                tint: Some(Tint { strength: 0.5, normal: Vector3::new(0.0, 0.0, -1.0) }),
            },
            Primitive {
                shape: Shape::Box {
                    center: Vector3::new(-0.50, 0.45, -0.20),
                    half: Vector3::new(0.10, 0.10, 0.16),
                },
                density: 160.0,
                albedo: [0.60, 0.30, 0.50],
                tint: None,
            },
        ],
        dynamics: vec![Primitive {
            shape: Shape::Sphere { center: sphere_center, radius: r },
            density: 160.0,
            albedo: [0.85, 0.75, 0.20],
            tint: None,
        }],
        trajectory,
        object_bbox: Aabb::new(
            [sphere_center[0] - r, sphere_center[1] - r, sphere_center[2] - r],
            [sphere_center[0] + r, sphere_center[1] + r, sphere_center[2] + r],
        ),
        background: [0.0, 0.0, 0.0],
    };
    (scene, preset_rig(Vector3::new(0.0, 0.0, -0.15), 2.3, 64))
}

pub fn preset_by_name(name: &str) -> Option<(AnalyticScene, Vec<(Camera, ViewRole)>)> {
    match name {
        "desk" => Some(scene_desk()),
        "bar" => Some(scene_bar()),
        _ => None,
    }
}

// --- user-supplied scene files ---------------------------------------------

#[derive(Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShapeSpec {
    Box { center: [f64; 3], half: [f64; 3] },
    Sphere { center: [f64; 3], radius: f64 },
}

#[derive(Serialize, Deserialize)]
pub struct TintSpec {
    pub strength: f64,
    pub normal: [f64; 3],
}

#[derive(Serialize, Deserialize)]
pub struct PrimitiveSpec {
    pub shape: ShapeSpec,
    pub density: f64,
    pub albedo: [f64; 3],
    #[serde(default)]
    pub tint: Option<TintSpec>,
}

#[derive(Serialize, Deserialize)]
pub struct RigSpec {
    pub target: [f64; 3],
    pub radius: f64,
    pub resolution: usize,
}

/// JSON schema for custom scenes fed to the `gen` command: primitives,
/// object-motion trajectory (row-major 3x4 per frame, frame 0 identity),
/// and the camera-rig parameters.
#[derive(Serialize, Deserialize)]
pub struct SceneFile {
    pub statics: Vec<PrimitiveSpec>,
    pub dynamics: Vec<PrimitiveSpec>,
    pub trajectory: Vec<PoseRows>,
    pub object_bbox: Aabb,
    pub background: [f64; 3],
    pub rig: RigSpec,
}

fn primitive_from_spec(spec: &PrimitiveSpec) -> Primitive {
    Primitive {
        shape: match &spec.shape {
            ShapeSpec::Box { center, half } => Shape::Box {
                center: Vector3::from_row_slice(center),
                half: Vector3::from_row_slice(half),
            },
            ShapeSpec::Sphere { center, radius } => {
                Shape::Sphere { center: Vector3::from_row_slice(center), radius: *radius }
            }
        },
        density: spec.density,
        albedo: spec.albedo,
        tint: spec.tint.as_ref().map(|t| Tint {
            strength: t.strength,
            normal: Vector3::from_row_slice(&t.normal).normalize(),
        }),
    }
}

pub fn load_scene_file(path: &Path) -> Result<(AnalyticScene, Vec<(Camera, ViewRole)>), DatasetError> {
    let json = std::fs::read_to_string(path).map_err(io_err(path))?;
    let spec: SceneFile = serde_json::from_str(&json)?;
    let trajectory = spec
        .trajectory
        .iter()
        .map(|p| p.to_transform())
        .collect::<Result<Vec<_>, _>>()?;
    let scene = AnalyticScene {
        statics: spec.statics.iter().map(primitive_from_spec).collect(),
        dynamics: spec.dynamics.iter().map(primitive_from_spec).collect(),
        trajectory,
        object_bbox: spec.object_bbox,
        background: spec.background,
    };
    let views = preset_rig(Vector3::from_row_slice(&spec.rig.target), spec.rig.radius, spec.rig.resolution);
    Ok((scene, views))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn pixel_ray_principal_point_looks_down_minus_z() {
        let cam = Camera {
            fx: 50.0,
            fy: 50.0,
            cx: 2.0,
            cy: 2.0,
            width: 4,
            height: 4,
            camera_to_world: RigidTransform::identity(),
            s_near: 0.1,
            s_far: 2.0,
        };
        // Pixel (1,1) center is at (1.5, 1.5): only (cx-0.5, cy-0.5) hits the
        // principal point exactly; use a camera with cx = cy = 1.5 instead.
        let cam2 = Camera { cx: 1.5, cy: 1.5, ..cam };
        let ray = pixel_ray(&cam2, 1, 1);
        assert_abs_diff_eq!(ray.dir, Vector3::new(0.0, 0.0, -1.0), epsilon = 1e-12);
        assert_eq!(ray.origin, Vector3::zeros());
    }

    #[test]
    fn pixel_ray_matches_homogeneous_unprojection() {
        let (_, views) = scene_desk();
        let cam = &views[3].0;
        for (row, col) in [(0usize, 0usize), (63, 63), (17, 42)] {
            let ray = pixel_ray(cam, row, col);
            assert_abs_diff_eq!(ray.dir.norm(), 1.0, epsilon = 1e-12);
            // Unproject via the intrinsics matrix applied in camera space.
            let xc = (col as f64 + 0.5 - cam.cx) / cam.fx;
            let yc = -((row as f64 + 0.5 - cam.cy) / cam.fy);
            let v = cam.camera_to_world.r * Vector3::new(xc, yc, -1.0);
            assert_abs_diff_eq!(ray.dir, v.normalize(), epsilon = 1e-12);
        }
    }

    #[test]
    fn oracle_point_outside_everything_is_empty() {
        let (scene, _) = scene_desk();
        let (sigma, _) = oracle_field_eval(&scene, &Vector3::new(0.0, -0.7, 0.4), &Vector3::z(), 0);
        assert_eq!(sigma, 0.0);
    }

    #[test]
    fn oracle_point_inside_single_box() {
        let (scene, _) = scene_desk();
        // Inside the desk box.
        let p = Vector3::new(-0.30, 0.10, -0.32);
        let (sigma, color) = oracle_field_eval(&scene, &p, &Vector3::z(), 0);
        assert_eq!(sigma, 140.0);
        assert_eq!(color, [0.55, 0.38, 0.20]);
    }

    #[test]
    fn moving_containment_consistent_with_trajectory() {
        let (scene, _) = scene_desk();
        let t = 5;
        // The canonical chair center transported to frame 5 must be inside
        // the dynamic field at frame 5.
        let center = Vector3::new(0.32, -0.28, -0.36);
        let moved = transform_point(&scene.trajectory[t], &center);
        let (sigma, _) = scene.eval_dynamic(&moved, &Vector3::z(), t);
        assert_eq!(sigma, 140.0);
        // And the unmoved center is empty at frame 5 (object has left).
        let (sigma0, _) = scene.eval_dynamic(&center, &Vector3::z(), t);
        assert_eq!(sigma0, 0.0);
    }

    #[test]
    fn trajectory_starts_at_identity_and_stays_in_cube() {
        for (scene, _) in [scene_desk(), scene_bar()] {
            let t0 = &scene.trajectory[0];
            assert!((t0.r - nalgebra::Matrix3::identity()).norm() < 1e-15);
            assert!(t0.t.norm() < 1e-15);
            let swept = scene.object_bbox.swept(&scene.trajectory);
            for i in 0..3 {
                assert!(swept.min[i] >= -1.0 && swept.max[i] <= 1.0, "sweep leaves unit cube");
            }
        }
    }

    #[test]
    fn oracle_empty_scene_renders_background() {
        let scene = AnalyticScene {
            statics: vec![],
            dynamics: vec![],
            trajectory: vec![RigidTransform::identity()],
            object_bbox: Aabb::new([0.0; 3], [0.1; 3]),
            background: [0.2, 0.4, 0.6],
        };
        let cam = Camera::look_at(
            Vector3::new(0.0, -2.0, 0.5),
            Vector3::zeros(),
            Vector3::z(),
            40.0,
            8,
            8,
            1.0,
            3.0,
        );
        let img = oracle_render(&scene, &cam, 0, 1024);
        for px in img.rows() {
            assert_abs_diff_eq!(px[0], 0.2, epsilon = 1e-12);
        }
    }

    #[test]
    fn opaque_box_front_face_shows_albedo() {
        let scene = AnalyticScene {
            statics: vec![Primitive {
                shape: Shape::Box {
                    center: Vector3::zeros(),
                    half: Vector3::new(0.4, 0.4, 0.4),
                },
                density: 1000.0,
                albedo: [0.3, 0.7, 0.9],
                tint: None,
            }],
            dynamics: vec![],
            trajectory: vec![RigidTransform::identity()],
            object_bbox: Aabb::new([0.0; 3], [0.1; 3]),
            background: [0.0; 3],
        };
        let cam = Camera::look_at(
            Vector3::new(0.0, -2.0, 0.0),
            Vector3::zeros(),
            Vector3::z(),
            60.0,
            16,
            16,
            1.0,
            3.0,
        );
        let img = oracle_render(&scene, &cam, 0, 2048);
        // Center pixel goes straight through the box front face.
        let px = [img[[8, 8, 0]], img[[8, 8, 1]], img[[8, 8, 2]]];
        for ch in 0..3 {
            assert!((px[ch] - scene.statics[0].albedo[ch]).abs() < 1e-3, "{px:?}");
        }
    }

    #[test]
    fn oracle_render_self_refines() {
        let (scene, views) = scene_desk();
        let cam = Camera { width: 16, height: 16, fx: 19.5, fy: 19.5, cx: 8.0, cy: 8.0, ..views[0].0.clone() };
        let a = oracle_render(&scene, &cam, 3, 4096);
        let b = oracle_render(&scene, &cam, 3, 8192);
        let max_diff =
            a.iter().zip(b.iter()).map(|(x, y)| (x - y).abs()).fold(0.0f64, f64::max);
        assert!(max_diff < 1e-4, "doubling the oracle sample count moved pixels by {max_diff}");
    }

    #[test]
    fn tinted_slab_is_view_dependent() {
        let (scene, _) = scene_bar();
        let p = Vector3::new(0.0, 0.5, -0.42);
        let steep = Vector3::new(0.0, 0.0, -1.0);
        let shallow = Vector3::new(0.0, 0.96, -0.28).normalize();
        let (_, c1) = scene.eval_static(&p, &steep);
        let (_, c2) = scene.eval_static(&p, &shallow);
        assert!(c1[0] > c2[0], "head-on view should catch more sheen");
    }

    #[test]
    fn dataset_roundtrip_is_lossless_via_sidecars() {
        let dir = tempfile::tempdir().unwrap();
        let (scene, views) = scene_bar();
        // Tiny configuration to keep the test fast.
        let views: Vec<(Camera, ViewRole)> = views
            .into_iter()
            .take(2)
            .map(|(c, role)| {
                (Camera { width: 8, height: 8, fx: 9.75, fy: 9.75, cx: 4.0, cy: 4.0, ..c }, role)
            })
            .collect();
        let mut scene = scene;
        scene.trajectory.truncate(2);
        let ds = generate_dataset(&scene, &views, dir.path(), 1024).unwrap();
        let loaded = load_dataset(dir.path()).unwrap();
        assert_eq!(loaded.frame_count, 2);
        assert_eq!(loaded.views.len(), 2);
        for v in 0..2 {
            for t in 0..2 {
                let a = &ds.images[v][t];
                let b = &loaded.images[v][t];
                // f32 sidecar quantization only.
                let diff = a.iter().zip(b.iter()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
                assert!(diff < 1e-7, "sidecar roundtrip diff {diff}");
            }
        }
        assert!(loaded.gt_trajectory_for_eval().is_some());
        // Camera parameters survive exactly.
        assert_eq!(loaded.views[0].camera.fx, views[0].0.fx);
        assert_eq!(
            loaded.views[0].camera.camera_to_world.to_rows_3x4(),
            views[0].0.camera_to_world.to_rows_3x4()
        );
    }

    #[test]
    fn dataset_png_fallback_quantizes_within_one_step() {
        let dir = tempfile::tempdir().unwrap();
        let (scene, views) = scene_bar();
        let views: Vec<(Camera, ViewRole)> = views
            .into_iter()
            .take(1)
            .map(|(c, role)| {
                (Camera { width: 8, height: 8, fx: 9.75, fy: 9.75, cx: 4.0, cy: 4.0, ..c }, role)
            })
            .collect();
        let mut scene = scene;
        scene.trajectory.truncate(1);
        let ds = generate_dataset(&scene, &views, dir.path(), 1024).unwrap();
        // Remove the sidecars to force the PNG path.
        std::fs::remove_file(dir.path().join("view00_frame000.f32")).unwrap();
        let loaded = load_dataset(dir.path()).unwrap();
        let diff = ds.images[0][0]
            .iter()
            .zip(loaded.images[0][0].iter())
            .map(|(x, y)| (x - y).abs())
            .fold(0.0, f64::max);
        assert!(diff <= 0.5 / 255.0 + 1e-12, "png quantization diff {diff}");
    }

    #[test]
    fn dataset_missing_image_is_reported() {
        let dir = tempfile::tempdir().unwrap();
        let (scene, views) = scene_bar();
        let views: Vec<(Camera, ViewRole)> = views
            .into_iter()
            .take(1)
            .map(|(c, role)| {
                (Camera { width: 8, height: 8, fx: 9.75, fy: 9.75, cx: 4.0, cy: 4.0, ..c }, role)
            })
            .collect();
        let mut scene = scene;
        scene.trajectory.truncate(1);
        generate_dataset(&scene, &views, dir.path(), 1024).unwrap();
        std::fs::remove_file(dir.path().join("view00_frame000.f32")).unwrap();
        std::fs::remove_file(dir.path().join("view00_frame000.png")).unwrap();
        match load_dataset(dir.path()) {
            Err(DatasetError::MissingImage(_)) => {}
            other => panic!("expected MissingImage, got {other:?}"),
        }
    }

    #[test]
    fn dataset_truncated_sidecar_is_reported() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.f32");
        std::fs::write(&path, b"SNIMGF32\x02\x00\x00\x00").unwrap();
        match load_f32_sidecar(&path) {
            Err(DatasetError::BadSidecar(_)) => {}
            other => panic!("expected BadSidecar, got {other:?}"),
        }
    }

    #[test]
    fn dataset_version_mismatch_is_reported() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(
            dir.path().join(MANIFEST_NAME),
            r#"{"format_version":99,"frame_count":0,"background":[0,0,0],"views":[],"gt_object_trajectory":null,"object_bbox":null}"#,
        )
        .unwrap();
        match load_dataset(dir.path()) {
            Err(DatasetError::Version(99)) => {}
            other => panic!("expected Version error, got {other:?}"),
        }
    }

    #[test]
    fn preset_counts_match_protocol() {
        let (scene, views) = scene_desk();
        assert_eq!(scene.frame_count(), 10);
        assert_eq!(views.len(), 9);
        assert_eq!(views.iter().filter(|(_, r)| *r == ViewRole::Train).count(), 8);
        // Training views never coincide with the held-out view.
        let eval_pos = views.last().unwrap().0.center();
        for (cam, role) in &views[..8] {
            assert_eq!(*role, ViewRole::Train);
            assert!((cam.center() - eval_pos).norm() > 0.1);
        }
    }
}
