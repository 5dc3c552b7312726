//! Analytic synthetic scenes: sphere and box primitives rendered into exact
//! segmentations, vector fields and confidences.

use std::collections::BTreeMap;

use nalgebra::{Vector2, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;

use crate::dkr::softplus_inverse;
use crate::error::{Error, Result};
use crate::pose_geometry::{project, CameraIntrinsics, KeypointModel, Pose, KEYPOINTS_PER_OBJECT};
use crate::semantic_norm::SoftSegmentation;
use crate::tensor_io::{FeatureMap, SceneDescription, SceneObject};

/// Raw confidence given to outlier pixels; softplus of it is ~4e-18.
pub const OUTLIER_RAW_CONFIDENCE: f64 = -40.0;

const SPHERE_SAMPLES: usize = 600;
/// Lattice points per box edge; the surface holds 11³ − 9³ = 602 points.
const BOX_LATTICE: usize = 11;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum PrimitiveShape {
    Sphere { radius: f64 },
    Box { half_extents: Vector3<f64> },
}

impl PrimitiveShape {
    /// Parses `sphere:<r>` or `box:<hx>,<hy>,<hz>` (meters). Returns `None`
    /// for references that are not primitives, such as file paths.
    pub fn parse_ref(s: &str) -> Option<Result<Self>> {
        let (kind, args) = s.split_once(':')?;
        let nums: std::result::Result<Vec<f64>, _> = args.split(',').map(|v| v.trim().parse::<f64>()).collect();
        let shape = match (kind, nums) {
            ("sphere", Ok(v)) if v.len() == 1 => Self::Sphere { radius: v[0] },
            ("box", Ok(v)) if v.len() == 3 => Self::Box {
                half_extents: Vector3::new(v[0], v[1], v[2]),
            },
            ("sphere" | "box", _) => {
                return Some(Err(Error::Format(format!("malformed primitive reference `{s}`"))))
            }
            _ => return None,
        };
        Some(shape.validate().map(|_| shape))
    }

    pub fn to_ref(&self) -> String {
        match self {
            Self::Sphere { radius } => format!("sphere:{radius:?}"),
            Self::Box { half_extents: h } => format!("box:{:?},{:?},{:?}", h.x, h.y, h.z),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = match self {
            Self::Sphere { radius } => *radius > 0.0 && radius.is_finite(),
            Self::Box { half_extents } => half_extents.iter().all(|v| *v > 0.0 && v.is_finite()),
        };
        if ok {
            Ok(())
        } else {
            Err(Error::Validation(format!("degenerate primitive {self:?}")))
        }
    }

    /// Radius of the smallest origin-centred ball containing the shape.
    pub fn bounding_radius(&self) -> f64 {
        match self {
            Self::Sphere { radius } => *radius,
            Self::Box { half_extents } => half_extents.norm(),
        }
    }

    /// Deterministic surface samples: a Fibonacci sphere, or the surface
    /// points of an 11×11×11 box lattice (corners included).
    pub fn vertices(&self) -> Vec<Vector3<f64>> {
        match *self {
            Self::Sphere { radius } => {
                let golden = std::f64::consts::PI * (3.0 - 5f64.sqrt());
                (0..SPHERE_SAMPLES)
                    .map(|i| {
                        let z = 1.0 - 2.0 * (i as f64 + 0.5) / SPHERE_SAMPLES as f64;
                        let r = (1.0 - z * z).sqrt();
                        let a = golden * i as f64;
                        Vector3::new(r * a.cos(), r * a.sin(), z) * radius
                    })
                    .collect()
            }
            Self::Box { half_extents: h } => {
                let n = BOX_LATTICE;
                let coord = |i: usize, e: f64| -e + 2.0 * e * i as f64 / (n - 1) as f64;
                let mut out = Vec::new();
                for i in 0..n {
                    for j in 0..n {
                        for k in 0..n {
                            let surface = [i, j, k].iter().any(|&v| v == 0 || v == n - 1);
                            if surface {
                                out.push(Vector3::new(coord(i, h.x), coord(j, h.y), coord(k, h.z)));
                            }
                        }
                    }
                }
                out
            }
        }
    }

    /// Nearest ray parameter `t > 0` at which `origin + t·dir` enters the
    /// shape, in object coordinates.
    fn intersect(&self, origin: &Vector3<f64>, dir: &Vector3<f64>) -> Option<f64> {
        match *self {
            Self::Sphere { radius } => {
                let a = dir.norm_squared();
                let b = origin.dot(dir);
                let c = origin.norm_squared() - radius * radius;
                let disc = b * b - a * c;
                if disc < 0.0 {
                    return None;
                }
                let t = (-b - disc.sqrt()) / a;
                (t > 0.0).then_some(t)
            }
            Self::Box { half_extents: h } => {
                let mut t0 = f64::NEG_INFINITY;
                let mut t1 = f64::INFINITY;
                for i in 0..3 {
                    if dir[i] == 0.0 {
                        if origin[i].abs() > h[i] {
                            return None;
                        }
                        continue;
                    }
                    let a = (-h[i] - origin[i]) / dir[i];
                    let b = (h[i] - origin[i]) / dir[i];
                    t0 = t0.max(a.min(b));
                    t1 = t1.min(a.max(b));
                }
                (t0 <= t1 && t0 > 0.0).then_some(t0)
            }
        }
    }
}

/// A primitive placed in the scene.
#[derive(Debug, Clone, PartialEq)]
pub struct PrimitiveObject {
    pub class_id: u32,
    pub shape: PrimitiveShape,
    pub pose: Pose,
    pub symmetric: bool,
}

impl PrimitiveObject {
    pub fn model(&self) -> Result<KeypointModel> {
        KeypointModel::from_vertices(self.class_id, self.shape.vertices(), self.symmetric)
    }

    pub fn to_scene_object(&self) -> SceneObject {
        SceneObject {
            class_id: self.class_id,
            pose: self.pose,
            model_ref: self.shape.to_ref(),
            symmetric: self.symmetric,
        }
    }

    pub fn from_scene_object(obj: &SceneObject) -> Result<Self> {
        let shape = PrimitiveShape::parse_ref(&obj.model_ref).ok_or_else(|| {
            Error::Validation(format!("`{}` is not a primitive reference", obj.model_ref))
        })??;
        Ok(Self {
            class_id: obj.class_id,
            shape,
            pose: obj.pose,
            symmetric: obj.symmetric,
        })
    }

    fn check_in_front(&self) -> Result<()> {
        let in_front = match self.shape {
            PrimitiveShape::Sphere { radius } => self.pose.translation.z - radius > 0.0,
            PrimitiveShape::Box { half_extents: h } => (0..8).all(|i| {
                let corner = Vector3::new(
                    if i & 1 == 0 { -h.x } else { h.x },
                    if i & 2 == 0 { -h.y } else { h.y },
                    if i & 4 == 0 { -h.z } else { h.z },
                );
                self.pose.transform(&corner).z > 0.0
            }),
        };
        if in_front {
            Ok(())
        } else {
            Err(Error::Validation(format!(
                "object of class {} is not entirely in front of the camera",
                self.class_id
            )))
        }
    }
}

/// Per-pixel class ids (row-major) and the matching one-hot segmentation.
#[derive(Debug, Clone)]
pub struct Rasterized {
    pub labels: Vec<u32>,
    pub seg: SoftSegmentation,
}

/// Exact silhouettes with per-pixel depth ordering. Pixel `(y, x)` casts the
/// ray through image point `(u, v) = (x, y)`.
pub fn rasterize_masks(
    objects: &[PrimitiveObject],
    k: &CameraIntrinsics,
    image_size: (usize, usize),
    classes: usize,
) -> Result<Rasterized> {
    k.validate()?;
    let (h, w) = image_size;
    for o in objects {
        o.shape.validate()?;
        o.check_in_front()?;
        if o.class_id == 0 || o.class_id as usize >= classes {
            return Err(Error::Validation(format!(
                "class {} outside 1..{classes}",
                o.class_id
            )));
        }
    }
    // Camera centre and ray directions in each object's frame.
    let frames: Vec<(Vector3<f64>, nalgebra::Matrix3<f64>)> = objects
        .iter()
        .map(|o| {
            let rt = o.pose.rotation.transpose();
            (-(rt * o.pose.translation), rt)
        })
        .collect();
    let labels: Vec<u32> = (0..h)
        .into_par_iter()
        .flat_map_iter(|y| {
            let frames = &frames;
            (0..w).map(move |x| {
                let dir = Vector3::new((x as f64 - k.cx) / k.fx, (y as f64 - k.cy) / k.fy, 1.0);
                let mut best = (f64::INFINITY, 0u32);
                for (o, (origin, rt)) in objects.iter().zip(frames) {
                    // The ray parameter equals camera depth because dir.z = 1.
                    if let Some(t) = o.shape.intersect(origin, &(rt * dir)) {
                        if t < best.0 {
                            best = (t, o.class_id);
                        }
                    }
                }
                best.1
            })
        })
        .collect();
    let seg = SoftSegmentation::from_labels(h, w, classes, &labels)?;
    Ok(Rasterized { labels, seg })
}

/// Unit vectors from each foreground pixel towards its class's keypoints.
/// A pixel that coincides with a keypoint gets `(1, 0)`.
pub fn gt_vector_fields(
    labels: &[u32],
    image_size: (usize, usize),
    keypoints: &BTreeMap<u32, Vec<Vector2<f64>>>,
    m: usize,
) -> Result<FeatureMap> {
    let (h, w) = image_size;
    if labels.len() != h * w {
        return Err(Error::Shape(format!("{} labels for a {h}x{w} image", labels.len())));
    }
    for (&c, kps) in keypoints {
        if kps.len() != m {
            return Err(Error::Shape(format!("class {c} has {} keypoints, expected {m}", kps.len())));
        }
    }
    let mut field = FeatureMap::zeros(h, w, 2 * m);
    for (i, &c) in labels.iter().enumerate() {
        if c == 0 {
            continue;
        }
        let kps = keypoints
            .get(&c)
            .ok_or_else(|| Error::Validation(format!("no keypoints for class {c}")))?;
        let p = Vector2::new((i % w) as f64, (i / w) as f64);
        let out = field.pixel_mut(i / w, i % w);
        for (j, kp) in kps.iter().enumerate() {
            let d = kp - p;
            let n = d.norm();
            let v = if n == 0.0 { Vector2::new(1.0, 0.0) } else { d / n };
            out[2 * j] = v.x;
            out[2 * j + 1] = v.y;
        }
    }
    Ok(field)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NoiseSpec {
    /// Radians.
    pub angular_sigma: f64,
    /// Fraction of foreground pixels whose vectors are all replaced.
    pub outlier_fraction: f64,
    pub seed: u64,
}

impl NoiseSpec {
    pub fn none() -> Self {
        Self {
            angular_sigma: 0.0,
            outlier_fraction: 0.0,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.angular_sigma >= 0.0 && self.angular_sigma.is_finite()) {
            return Err(Error::Parameter(format!("angular sigma {} < 0", self.angular_sigma)));
        }
        if !(0.0..=1.0).contains(&self.outlier_fraction) {
            return Err(Error::Parameter(format!(
                "outlier fraction {} outside [0, 1]",
                self.outlier_fraction
            )));
        }
        Ok(())
    }
}

/// Noisy copy of `field` and the per-pixel outlier mask.
///
/// Exactly `round(fraction · foreground)` pixels become outliers; every
/// other foreground vector is rotated by an independent `N(0, σ²)` angle.
pub fn perturb_fields(field: &FeatureMap, labels: &[u32], spec: &NoiseSpec) -> Result<(FeatureMap, Vec<bool>)> {
    spec.validate()?;
    if labels.len() != field.pixels() {
        return Err(Error::Shape(format!("{} labels for {} pixels", labels.len(), field.pixels())));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let foreground: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] != 0).collect();
    let n_out = (spec.outlier_fraction * foreground.len() as f64).round() as usize;
    let mut outlier = vec![false; labels.len()];
    for j in rand::seq::index::sample(&mut rng, foreground.len(), n_out.min(foreground.len())) {
        outlier[foreground[j]] = true;
    }
    let normal = Normal::new(0.0, spec.angular_sigma.max(0.0)).expect("sigma validated");
    let c = field.channels();
    let mut out = field.clone();
    for &i in &foreground {
        let px = &mut out.data_mut()[i * c..(i + 1) * c];
        for v in px.chunks_exact_mut(2) {
            if outlier[i] {
                let a = rng.random_range(0.0..std::f64::consts::TAU);
                v[0] = a.cos();
                v[1] = a.sin();
            } else if spec.angular_sigma > 0.0 {
                let a: f64 = normal.sample(&mut rng);
                let (s, co) = a.sin_cos();
                let (x, y) = (v[0], v[1]);
                v[0] = co * x - s * y;
                v[1] = s * x + co * y;
            }
        }
    }
    Ok((out, outlier))
}

/// Raw confidences an ideal network would emit: softplus weight
/// `1/(1 + (d/10 px)²)` for a pixel at distance `d` from the keypoint,
/// and [`OUTLIER_RAW_CONFIDENCE`] on outliers.
///
/// Angular noise displaces a line by roughly `d·σ` at the keypoint, so the
/// inverse-square falloff approximates inverse-variance weighting.
pub fn oracle_confidences(
    labels: &[u32],
    image_size: (usize, usize),
    keypoints: &BTreeMap<u32, Vec<Vector2<f64>>>,
    m: usize,
    outliers: Option<&[bool]>,
) -> Result<FeatureMap> {
    let (h, w) = image_size;
    if labels.len() != h * w {
        return Err(Error::Shape(format!("{} labels for a {h}x{w} image", labels.len())));
    }
    let mut conf = FeatureMap::zeros(h, w, m);
    for (i, &c) in labels.iter().enumerate() {
        if c == 0 {
            continue;
        }
        let kps = keypoints
            .get(&c)
            .ok_or_else(|| Error::Validation(format!("no keypoints for class {c}")))?;
        let p = Vector2::new((i % w) as f64, (i / w) as f64);
        let is_out = outliers.is_some_and(|o| o[i]);
        let out = conf.pixel_mut(i / w, i % w);
        for (j, kp) in kps.iter().enumerate().take(m) {
            out[j] = if is_out {
                OUTLIER_RAW_CONFIDENCE
            } else {
                let d2 = (kp - p).norm_squared() / 100.0;
                softplus_inverse(1.0 / (1.0 + d2))
            };
        }
    }
    Ok(conf)
}

/// Everything a perfect decoder would produce for one scene.
#[derive(Debug, Clone)]
pub struct RenderedScene {
    pub labels: Vec<u32>,
    pub seg: SoftSegmentation,
    /// `H×W×2m`, after noise.
    pub field: FeatureMap,
    /// `H×W×m` raw confidences.
    pub raw_conf: FeatureMap,
    pub keypoints: BTreeMap<u32, Vec<Vector2<f64>>>,
    pub outliers: Vec<bool>,
}

/// Synthetic scene: description plus the primitive objects and their models.
#[derive(Debug, Clone)]
pub struct SyntheticScene {
    pub objects: Vec<PrimitiveObject>,
    pub intrinsics: CameraIntrinsics,
    pub image_size: (usize, usize),
}

impl SyntheticScene {
    pub fn from_description(desc: &SceneDescription) -> Result<Self> {
        desc.validate()?;
        Ok(Self {
            objects: desc
                .objects
                .iter()
                .map(PrimitiveObject::from_scene_object)
                .collect::<Result<_>>()?,
            intrinsics: desc.intrinsics,
            image_size: desc.image_size,
        })
    }

    pub fn description(&self) -> SceneDescription {
        SceneDescription {
            objects: self.objects.iter().map(PrimitiveObject::to_scene_object).collect(),
            intrinsics: self.intrinsics,
            image_size: self.image_size,
        }
    }

    /// Segmentation channels: background plus the highest class id, and at
    /// least one foreground channel so empty scenes stay well-formed.
    pub fn classes(&self) -> usize {
        self.objects.iter().map(|o| o.class_id as usize).max().unwrap_or(0).max(1) + 1
    }

    pub fn models(&self) -> Result<BTreeMap<u32, KeypointModel>> {
        self.objects.iter().map(|o| Ok((o.class_id, o.model()?))).collect()
    }

    pub fn keypoints2d(&self, models: &BTreeMap<u32, KeypointModel>) -> Result<BTreeMap<u32, Vec<Vector2<f64>>>> {
        self.objects
            .iter()
            .map(|o| Ok((o.class_id, project(&models[&o.class_id].keypoints3d, &o.pose, &self.intrinsics)?)))
            .collect()
    }

    /// Renders decoder outputs. Confidences come from [`oracle_confidences`]
    /// so the outlier pixels are suppressed.
    pub fn render(&self, noise: &NoiseSpec) -> Result<RenderedScene> {
        let models = self.models()?;
        let keypoints = self.keypoints2d(&models)?;
        let raster = rasterize_masks(&self.objects, &self.intrinsics, self.image_size, self.classes())?;
        let m = KEYPOINTS_PER_OBJECT;
        let clean = gt_vector_fields(&raster.labels, self.image_size, &keypoints, m)?;
        let (field, outliers) = perturb_fields(&clean, &raster.labels, noise)?;
        let raw_conf = oracle_confidences(&raster.labels, self.image_size, &keypoints, m, Some(&outliers))?;
        Ok(RenderedScene {
            labels: raster.labels,
            seg: raster.seg,
            field,
            raw_conf,
            keypoints,
            outliers,
        })
    }
}

/// Default camera for generated scenes: 240×320 pixels, f = 400.
pub fn default_camera() -> (CameraIntrinsics, (usize, usize)) {
    (
        CameraIntrinsics {
            fx: 400.0,
            fy: 400.0,
            cx: 160.0,
            cy: 120.0,
        },
        (240, 320),
    )
}

/// A sphere partly hidden behind a box, and a second box overlapping the
/// first one from behind.
pub fn occlusion_scene() -> SyntheticScene {
    let (intrinsics, image_size) = default_camera();
    let objects = vec![
        PrimitiveObject {
            class_id: 1,
            shape: PrimitiveShape::Sphere { radius: 0.05 },
            pose: Pose::from_axis_angle(Vector3::new(0.2, -0.3, 0.1), Vector3::new(-0.07, -0.01, 0.75)),
            symmetric: true,
        },
        PrimitiveObject {
            class_id: 2,
            shape: PrimitiveShape::Box {
                half_extents: Vector3::new(0.04, 0.03, 0.025),
            },
            pose: Pose::from_axis_angle(Vector3::new(0.4, 0.5, -0.2), Vector3::new(-0.015, 0.02, 0.6)),
            symmetric: false,
        },
        PrimitiveObject {
            class_id: 3,
            shape: PrimitiveShape::Box {
                half_extents: Vector3::new(0.05, 0.02, 0.035),
            },
            pose: Pose::from_axis_angle(Vector3::new(-0.6, 0.2, 0.7), Vector3::new(0.06, 0.035, 0.8)),
            symmetric: false,
        },
    ];
    SyntheticScene {
        objects,
        intrinsics,
        image_size,
    }
}

/// Random scene with `n` objects: the first is a sphere, the rest boxes.
///
/// Objects are spread left to right so they overlap at most partially.
pub fn random_scene(n: usize, seed: u64) -> SyntheticScene {
    let (intrinsics, image_size) = default_camera();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let objects = (0..n)
        .map(|i| {
            let shape = if i == 0 {
                PrimitiveShape::Sphere {
                    radius: rng.random_range(0.03..0.05),
                }
            } else {
                PrimitiveShape::Box {
                    half_extents: Vector3::new(
                        rng.random_range(0.02..0.045),
                        rng.random_range(0.02..0.045),
                        rng.random_range(0.02..0.045),
                    ),
                }
            };
            let z = rng.random_range(0.6..0.9);
            // Horizontal slots across the middle 70% of the image.
            let slot = (i as f64 + 0.5) / n as f64 - 0.5;
            let u = intrinsics.cx + slot * 0.7 * image_size.1 as f64 + rng.random_range(-10.0..10.0);
            let v = intrinsics.cy + rng.random_range(-30.0..30.0);
            let t = Vector3::new((u - intrinsics.cx) * z / intrinsics.fx, (v - intrinsics.cy) * z / intrinsics.fy, z);
            let axis = Vector3::new(
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
            );
            let angle = rng.random_range(0.0..std::f64::consts::PI);
            let axis_angle = if axis.norm() > 1e-6 { axis.normalize() * angle } else { Vector3::zeros() };
            PrimitiveObject {
                class_id: i as u32 + 1,
                shape,
                pose: Pose::from_axis_angle(axis_angle, t),
                symmetric: matches!(shape, PrimitiveShape::Sphere { .. }),
            }
        })
        .collect();
    SyntheticScene {
        objects,
        intrinsics,
        image_size,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sphere_silhouette_radius() {
        let k = CameraIntrinsics {
            fx: 500.0,
            fy: 500.0,
            cx: 320.0,
            cy: 240.0,
        };
        let sphere = PrimitiveObject {
            class_id: 1,
            shape: PrimitiveShape::Sphere { radius: 1.0 },
            pose: Pose::new(nalgebra::Matrix3::identity(), Vector3::new(0.0, 0.0, 5.0)),
            symmetric: true,
        };
        let r = rasterize_masks(&[sphere], &k, (480, 640), 2).unwrap();
        let expected = 500.0 / 24f64.sqrt();
        for (i, &l) in r.labels.iter().enumerate() {
            let d = ((i % 640) as f64 - 320.0).hypot((i / 640) as f64 - 240.0);
            if (d - expected).abs() > 1e-9 {
                assert_eq!(l == 1, d < expected, "pixel {i} at distance {d}");
            }
        }
    }

    #[test]
    fn empty_scene_is_background() {
        let (k, size) = default_camera();
        let r = rasterize_masks(&[], &k, size, 2).unwrap();
        assert!(r.labels.iter().all(|&l| l == 0));
    }

    #[test]
    fn near_sphere_wins_overlap() {
        let (k, size) = default_camera();
        let mk = |c: u32, x: f64, z: f64| PrimitiveObject {
            class_id: c,
            shape: PrimitiveShape::Sphere { radius: 0.05 },
            pose: Pose::new(nalgebra::Matrix3::identity(), Vector3::new(x, 0.0, z)),
            symmetric: true,
        };
        let objs = [mk(1, 0.0, 1.0), mk(2, 0.03, 0.8)];
        let r = rasterize_masks(&objs, &k, size, 3).unwrap();
        let centre = 120 * 320 + 160 + 10;
        assert_eq!(r.labels[centre], 2);
        assert!(r.labels.contains(&1));
    }

    #[test]
    fn behind_camera_rejected() {
        let (k, size) = default_camera();
        let obj = PrimitiveObject {
            class_id: 1,
            shape: PrimitiveShape::Sphere { radius: 0.5 },
            pose: Pose::new(nalgebra::Matrix3::identity(), Vector3::new(0.0, 0.0, 0.3)),
            symmetric: true,
        };
        assert!(matches!(rasterize_masks(&[obj], &k, size, 2), Err(Error::Validation(_))));
    }

    #[test]
    fn field_conventions() {
        let labels = vec![1, 1, 0, 0];
        let kps = BTreeMap::from([(1, vec![Vector2::new(3.0, 4.0), Vector2::new(1.0, 0.0)])]);
        let f = gt_vector_fields(&labels, (2, 2), &kps, 2).unwrap();
        assert_eq!(&f.pixel(0, 0)[..2], &[0.6, 0.8]);
        assert_eq!(&f.pixel(0, 1)[2..], &[1.0, 0.0]);
        assert!(f.pixel(1, 0).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn noise_free_is_identity() {
        let scene = occlusion_scene();
        let a = scene.render(&NoiseSpec::none()).unwrap();
        let (same, outliers) = perturb_fields(&a.field, &a.labels, &NoiseSpec::none()).unwrap();
        assert_eq!(same, a.field);
        assert!(outliers.iter().all(|o| !o));
    }

    #[test]
    fn angular_noise_statistics() {
        let labels = vec![1u32; 100 * 100];
        let field = FeatureMap::from_fn(100, 100, 2, |_, _, c| if c == 0 { 1.0 } else { 0.0 });
        let spec = NoiseSpec {
            angular_sigma: 0.01,
            outlier_fraction: 0.0,
            seed: 5,
        };
        let (noisy, _) = perturb_fields(&field, &labels, &spec).unwrap();
        let mean = noisy
            .data()
            .chunks_exact(2)
            .map(|v| v[1].atan2(v[0]).abs())
            .sum::<f64>()
            / 1e4;
        let expected = 0.01 * (2.0 / std::f64::consts::PI).sqrt();
        assert!((mean / expected - 1.0).abs() < 0.05, "{mean} vs {expected}");
    }

    #[test]
    fn outliers_replace_everything() {
        let scene = occlusion_scene();
        let a = scene.render(&NoiseSpec::none()).unwrap();
        let spec = NoiseSpec {
            angular_sigma: 0.0,
            outlier_fraction: 1.0,
            seed: 9,
        };
        let (x, mask) = perturb_fields(&a.field, &a.labels, &spec).unwrap();
        let (y, _) = perturb_fields(&a.field, &a.labels, &spec).unwrap();
        assert_eq!(x, y);
        let fg = a.labels.iter().filter(|&&l| l != 0).count();
        assert_eq!(mask.iter().filter(|&&o| o).count(), fg);
        let changed = (0..a.field.pixels())
            .filter(|&i| a.labels[i] != 0)
            .filter(|&i| x.data()[i * 18..i * 18 + 18] != a.field.data()[i * 18..i * 18 + 18])
            .count();
        assert_eq!(changed, fg);
    }

    #[test]
    fn vertex_clouds() {
        let sphere = PrimitiveShape::Sphere { radius: 0.1 };
        let v = sphere.vertices();
        assert_eq!(v.len(), 600);
        assert!(v.iter().all(|p| (p.norm() - 0.1).abs() < 1e-12));
        let b = PrimitiveShape::Box {
            half_extents: Vector3::new(0.1, 0.2, 0.3),
        };
        let v = b.vertices();
        assert_eq!(v.len(), 602);
        let m = KeypointModel::from_vertices(1, v, false).unwrap();
        assert!((m.diameter - 2.0 * Vector3::new(0.1f64, 0.2, 0.3).norm()).abs() < 1e-12);
    }

    #[test]
    fn refs_round_trip() {
        for s in [
            PrimitiveShape::Sphere { radius: 0.05 },
            PrimitiveShape::Box {
                half_extents: Vector3::new(0.01, 0.02, 0.03),
            },
        ] {
            assert_eq!(PrimitiveShape::parse_ref(&s.to_ref()).unwrap().unwrap(), s);
        }
        assert!(PrimitiveShape::parse_ref("models/duck.ply").is_none());
        assert!(PrimitiveShape::parse_ref("sphere:-1").unwrap().is_err());
    }

    #[test]
    fn labels_match_argmax() {
        let scene = random_scene(4, 11);
        let r = scene.render(&NoiseSpec::none()).unwrap();
        assert_eq!(r.seg.labels(), r.labels);
    }
}
