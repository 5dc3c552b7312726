//! From decoder outputs to per-class poses: connected components, keypoint
//! regression (DKR or RANSAC voting), then RANSAC PnP.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::time::{Duration, Instant};

use nalgebra::{Vector2, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::dkr::{dkr_forward, solve_keypoint, Keypoints2D, Pixel, RegionMasks, RegionSystem, Row, SolveDiagnostics};
use crate::error::{Error, Result};
use crate::pose_geometry::{ransac_pnp, CameraIntrinsics, KeypointModel, Pose, PoseEstimate, RansacParams};
use crate::semantic_norm::SoftSegmentation;
use crate::tensor_io::FeatureMap;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Component {
    /// 1-based; matches the values in [`ComponentLabeling::labels`].
    pub id: u32,
    pub class_id: u32,
    pub pixel_count: usize,
    /// `(y_min, x_min, y_max, x_max)`, inclusive.
    pub bbox: (usize, usize, usize, usize),
}

#[derive(Debug, Clone, PartialEq)]
pub struct ComponentLabeling {
    pub height: usize,
    pub width: usize,
    /// Row-major component ids; 0 is background.
    pub labels: Vec<u32>,
    /// Ordered by id, i.e. by the row-major position of each first pixel.
    pub components: Vec<Component>,
}

/// 4-connected components of equal argmax class. Background is skipped.
pub fn connected_components(seg: &SoftSegmentation) -> ComponentLabeling {
    let (h, w) = (seg.height(), seg.width());
    let classes = seg.labels();
    let mut labels = vec![0u32; h * w];
    let mut components = Vec::new();
    let mut stack = Vec::new();
    for start in 0..h * w {
        let class_id = classes[start];
        if class_id == 0 || labels[start] != 0 {
            continue;
        }
        let id = components.len() as u32 + 1;
        let mut comp = Component {
            id,
            class_id,
            pixel_count: 0,
            bbox: (usize::MAX, usize::MAX, 0, 0),
        };
        labels[start] = id;
        stack.push(start);
        while let Some(i) = stack.pop() {
            let (y, x) = (i / w, i % w);
            comp.pixel_count += 1;
            comp.bbox = (comp.bbox.0.min(y), comp.bbox.1.min(x), comp.bbox.2.max(y), comp.bbox.3.max(x));
            let mut visit = |j: usize| {
                if labels[j] == 0 && classes[j] == class_id {
                    labels[j] = id;
                    stack.push(j);
                }
            };
            if y > 0 {
                visit(i - w);
            }
            if y + 1 < h {
                visit(i + w);
            }
            if x > 0 {
                visit(i - 1);
            }
            if x + 1 < w {
                visit(i + 1);
            }
        }
        components.push(comp);
    }
    ComponentLabeling {
        height: h,
        width: w,
        labels,
        components,
    }
}

/// Largest component of each class, as row-major pixel lists. Ties go to the
/// lower component id; classes whose winner has fewer than `min_pixels`
/// pixels are absent.
pub fn largest_component_per_class(labeling: &ComponentLabeling, min_pixels: usize) -> RegionMasks {
    let mut best: BTreeMap<u32, &Component> = BTreeMap::new();
    for c in &labeling.components {
        let e = best.entry(c.class_id).or_insert(c);
        if c.pixel_count > e.pixel_count {
            *e = c;
        }
    }
    let chosen: BTreeMap<u32, u32> = best
        .into_iter()
        .filter(|(_, c)| c.pixel_count >= min_pixels)
        .map(|(class, c)| (c.id, class))
        .collect();
    let mut out: RegionMasks = chosen.values().map(|&c| (c, Vec::new())).collect();
    for (i, &id) in labeling.labels.iter().enumerate() {
        if let Some(class) = chosen.get(&id) {
            out.get_mut(class)
                .expect("class inserted above")
                .push(Pixel::new(i / labeling.width, i % labeling.width));
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VotingParams {
    pub hypotheses: usize,
    /// A pixel votes for a hypothesis when the cosine between its vector and
    /// the direction to the hypothesis exceeds this.
    pub inlier_cosine: f64,
    pub seed: u64,
}

impl Default for VotingParams {
    fn default() -> Self {
        Self {
            hypotheses: 128,
            inlier_cosine: 0.999,
            seed: 0,
        }
    }
}

fn unit(v: Vector2<f64>) -> Option<Vector2<f64>> {
    let n = v.norm();
    (n > 0.0 && n.is_finite()).then(|| v / n)
}

fn intersect(p: Vector2<f64>, d: Vector2<f64>, q: Vector2<f64>, e: Vector2<f64>) -> Option<Vector2<f64>> {
    let den = d.x * e.y - d.y * e.x;
    if den.abs() < 1e-12 {
        return None;
    }
    let r = q - p;
    let s = (r.x * e.y - r.y * e.x) / den;
    Some(p + d * s)
}

fn votes(point: Vector2<f64>, pixels: &[Vector2<f64>], dirs: &[Option<Vector2<f64>>], cos: f64) -> Vec<usize> {
    pixels
        .iter()
        .zip(dirs)
        .enumerate()
        .filter(|(_, (p, d))| {
            let Some(d) = d else { return false };
            let to = point - *p;
            let n = to.norm();
            n == 0.0 || d.dot(&to) / n > cos
        })
        .map(|(i, _)| i)
        .collect()
}

/// RANSAC voting over line-pair intersections, one independent random
/// stream per keypoint.
///
/// The winning hypothesis is refined by unweighted least squares over its
/// voters. If that system is rank-deficient the hypothesis itself is kept.
pub fn ransac_voting(region: &[Pixel], field: &FeatureMap, params: &VotingParams) -> Result<Keypoints2D> {
    if region.len() < 2 {
        return Err(Error::Parameter(format!(
            "voting needs at least 2 pixels, got {}",
            region.len()
        )));
    }
    if field.channels() % 2 != 0 {
        return Err(Error::Shape(format!("field has {} channels", field.channels())));
    }
    let m = field.channels() / 2;
    let pixels: Vec<Vector2<f64>> = region.iter().map(Pixel::point).collect();
    let results: Vec<(Vector2<f64>, bool, SolveDiagnostics)> = (0..m)
        .map(|k| {
            let dirs: Vec<Option<Vector2<f64>>> = region
                .iter()
                .map(|p| unit(Vector2::new(field.get(p.y, p.x, 2 * k), field.get(p.y, p.x, 2 * k + 1))))
                .collect();
            let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
            rng.set_stream(k as u64);
            let mut best: Option<(Vector2<f64>, Vec<usize>)> = None;
            for _ in 0..params.hypotheses {
                let a = rng.random_range(0..region.len());
                let mut b = rng.random_range(0..region.len() - 1);
                if b >= a {
                    b += 1;
                }
                let (Some(da), Some(db)) = (dirs[a], dirs[b]) else { continue };
                let Some(h) = intersect(pixels[a], da, pixels[b], db) else { continue };
                let inl = votes(h, &pixels, &dirs, params.inlier_cosine);
                if best.as_ref().is_none_or(|(_, bi)| inl.len() > bi.len()) {
                    best = Some((h, inl));
                }
            }
            let empty = SolveDiagnostics {
                eigenvalues: [0.0; 2],
                rank: 0,
                condition: f64::INFINITY,
                rows: 0,
            };
            let Some((h, inl)) = best else {
                return (Vector2::zeros(), false, empty);
            };
            let rows: Vec<Row> = inl
                .iter()
                .map(|&i| Row::new(pixels[i], dirs[i].expect("voters have directions"), 1.0))
                .collect();
            match solve_keypoint(&RegionSystem::from_rows(rows)) {
                Ok(sol) if sol.valid => (sol.point, true, sol.diagnostics),
                Ok(sol) => (h, true, sol.diagnostics),
                Err(_) => (h, true, empty),
            }
        })
        .collect();
    let mut kp = Keypoints2D {
        points: Vec::with_capacity(m),
        valid: Vec::with_capacity(m),
        diagnostics: Vec::with_capacity(m),
    };
    for (p, v, d) in results {
        kp.points.push(p);
        kp.valid.push(v);
        kp.diagnostics.push(d);
    }
    Ok(kp)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RegressionMode {
    Dkr,
    RansacVoting,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PipelineConfig {
    pub mode: RegressionMode,
    pub min_component_pixels: usize,
    pub voting: VotingParams,
    pub pnp: RansacParams,
    /// Mixed with class ids to seed voting and PnP.
    pub seed: u64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            mode: RegressionMode::Dkr,
            min_component_pixels: 2 * crate::pose_geometry::KEYPOINTS_PER_OBJECT,
            voting: VotingParams::default(),
            pnp: RansacParams::default(),
            seed: 0,
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        if self.min_component_pixels < 2 {
            return Err(Error::Parameter(format!(
                "min_component_pixels must be at least 2, got {}",
                self.min_component_pixels
            )));
        }
        if self.voting.hypotheses == 0 || !(-1.0..1.0).contains(&self.voting.inlier_cosine) {
            return Err(Error::Parameter(format!("invalid voting parameters {:?}", self.voting)));
        }
        Ok(())
    }
}

/// Decoder channel budget for `objects` classes and `keypoints` keypoints.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DecoderLayout {
    pub objects: usize,
    pub keypoints: usize,
}

/// Decoder outputs split into their three heads.
#[derive(Debug, Clone)]
pub struct DecoderOutputs {
    /// `n + 1` segmentation logits.
    pub seg_logits: FeatureMap,
    /// `2m` vector components.
    pub field: FeatureMap,
    /// `m` raw confidences.
    pub raw_conf: FeatureMap,
}

impl DecoderLayout {
    /// `2m` vectors, `m` confidences and `n + 1` segmentation channels.
    pub fn total_channels(&self) -> usize {
        3 * self.keypoints + self.objects + 1
    }

    pub fn validate_channels(&self, channels: usize) -> Result<()> {
        if channels != self.total_channels() {
            return Err(Error::Shape(format!(
                "decoder output has {channels} channels, expected 3·{}+{}+1 = {}",
                self.keypoints,
                self.objects,
                self.total_channels()
            )));
        }
        Ok(())
    }

    /// Splits a merged map laid out as `[segmentation | field | confidence]`.
    pub fn split(&self, merged: &FeatureMap) -> Result<DecoderOutputs> {
        self.validate_channels(merged.channels())?;
        let ns = self.objects + 1;
        let nf = 2 * self.keypoints;
        Ok(DecoderOutputs {
            seg_logits: merged.select_channels(0, ns)?,
            field: merged.select_channels(ns, nf)?,
            raw_conf: merged.select_channels(ns + nf, self.keypoints)?,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PoseStatus {
    Ok,
    /// Too few valid keypoints for PnP.
    LowRank,
    PnpFailed,
}

impl PoseStatus {
    pub fn as_str(&self) -> &'static str {
        match self {
            Self::Ok => "ok",
            Self::LowRank => "low_rank",
            Self::PnpFailed => "pnp_failed",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "ok" => Some(Self::Ok),
            "low_rank" => Some(Self::LowRank),
            "pnp_failed" => Some(Self::PnpFailed),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClassResult {
    pub keypoints: Keypoints2D,
    pub pose: Option<PoseEstimate>,
    pub status: PoseStatus,
}

/// Wall time per stage.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct StageTiming {
    pub components: Duration,
    pub keypoints: Duration,
    pub pnp: Duration,
}

#[derive(Debug, Clone, PartialEq)]
pub struct InferenceResult {
    pub classes: BTreeMap<u32, ClassResult>,
    pub timing: StageTiming,
}

/// Deterministic per-class seed.
fn class_seed(seed: u64, class: u32, salt: u64) -> u64 {
    // splitmix64 finalizer
    let mut z = seed ^ (u64::from(class) << 32) ^ salt;
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn pnp_for_class(
    kp: &Keypoints2D,
    model: &KeypointModel,
    k: &CameraIntrinsics,
    params: &RansacParams,
) -> (Option<PoseEstimate>, PoseStatus) {
    let (obj, img): (Vec<Vector3<f64>>, Vec<Vector2<f64>>) = kp
        .points
        .iter()
        .zip(&kp.valid)
        .zip(&model.keypoints3d)
        .filter(|((_, &v), _)| v)
        .map(|((p, _), q)| (*q, *p))
        .unzip();
    if obj.len() < 4 {
        return (None, PoseStatus::LowRank);
    }
    match ransac_pnp(&obj, &img, k, params) {
        Ok(est) => (Some(est), PoseStatus::Ok),
        Err(_) => (None, PoseStatus::PnpFailed),
    }
}

/// Runs the whole pipeline on one image.
pub fn infer_poses(
    seg: &SoftSegmentation,
    field: &FeatureMap,
    raw_conf: &FeatureMap,
    models: &BTreeMap<u32, KeypointModel>,
    k: &CameraIntrinsics,
    cfg: &PipelineConfig,
) -> Result<InferenceResult> {
    cfg.validate()?;
    k.validate()?;
    let m = raw_conf.channels();
    if field.channels() != 2 * m {
        return Err(Error::Shape(format!(
            "field has {} channels but confidences imply 2·{m}",
            field.channels()
        )));
    }
    for map in [field, raw_conf] {
        if (map.height(), map.width()) != (seg.height(), seg.width()) {
            return Err(Error::Shape(format!(
                "{}x{} map vs {}x{} segmentation",
                map.height(),
                map.width(),
                seg.height(),
                seg.width()
            )));
        }
    }
    if let Some(model) = models.values().find(|md| md.keypoints3d.len() != m) {
        return Err(Error::Shape(format!(
            "class {} model has {} keypoints, decoder has {m}",
            model.class_id,
            model.keypoints3d.len()
        )));
    }

    let t0 = Instant::now();
    let labeling = connected_components(seg);
    if let Some(c) = labeling.components.iter().find(|c| !models.contains_key(&c.class_id)) {
        return Err(Error::Validation(format!("segmentation contains unknown class {}", c.class_id)));
    }
    let regions = largest_component_per_class(&labeling, cfg.min_component_pixels);
    let cc_time = t0.elapsed();

    let t1 = Instant::now();
    let keypoints: BTreeMap<u32, Keypoints2D> = match cfg.mode {
        RegressionMode::Dkr => dkr_forward(&regions, field, raw_conf)?,
        RegressionMode::RansacVoting => regions
            .par_iter()
            .map(|(&class, px)| {
                let params = VotingParams {
                    seed: class_seed(cfg.seed, class, 1),
                    ..cfg.voting
                };
                Ok((class, ransac_voting(px, field, &params)?))
            })
            .collect::<Result<_>>()?,
    };
    let kp_time = t1.elapsed();

    let t2 = Instant::now();
    let classes: BTreeMap<u32, ClassResult> = keypoints
        .into_par_iter()
        .map(|(class, kp)| {
            let params = RansacParams {
                seed: class_seed(cfg.seed ^ cfg.pnp.seed, class, 2),
                ..cfg.pnp
            };
            let (pose, status) = pnp_for_class(&kp, &models[&class], k, &params);
            (
                class,
                ClassResult {
                    keypoints: kp,
                    pose,
                    status,
                },
            )
        })
        .collect();
    let pnp_time = t2.elapsed();

    Ok(InferenceResult {
        classes,
        timing: StageTiming {
            components: cc_time,
            keypoints: kp_time,
            pnp: pnp_time,
        },
    })
}

/// One line of a pose file.
#[derive(Debug, Clone, PartialEq)]
pub struct PoseRecord {
    pub class_id: u32,
    pub pose: Pose,
    /// Flattened `(u, v)` pairs.
    pub keypoints: Vec<f64>,
    pub status: PoseStatus,
}

impl PoseRecord {
    /// Records without a pose carry the identity rotation and zero
    /// translation.
    pub fn from_result(class_id: u32, r: &ClassResult) -> Self {
        Self {
            class_id,
            pose: r.pose.map_or_else(Pose::identity, |e| e.pose),
            keypoints: r.keypoints.points.iter().flat_map(|p| [p.x, p.y]).collect(),
            status: r.status,
        }
    }
}

pub fn write_pose_records(records: &[PoseRecord]) -> String {
    let mut out = String::new();
    for r in records {
        write!(out, "class {} R", r.class_id).unwrap();
        for v in r.pose.rotation_row_major() {
            write!(out, " {v:?}").unwrap();
        }
        out.push_str(" t");
        for v in r.pose.translation.iter() {
            write!(out, " {v:?}").unwrap();
        }
        out.push_str(" keypoints");
        for v in &r.keypoints {
            write!(out, " {v:?}").unwrap();
        }
        writeln!(out, " status {}", r.status.as_str()).unwrap();
    }
    out
}

/// Parses pose records; blank lines and `#` comments are skipped.
pub fn parse_pose_records(text: &str) -> Result<Vec<PoseRecord>> {
    let mut out = Vec::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let err = |key: &str, message: &str| Error::Schema {
            key: key.into(),
            line: n + 1,
            message: message.into(),
        };
        let tok: Vec<&str> = line.split_whitespace().collect();
        let find = |key: &str| tok.iter().position(|t| *t == key).ok_or_else(|| err(key, "missing"));
        let (ic, ir, it, ik, is) = (find("class")?, find("R")?, find("t")?, find("keypoints")?, find("status")?);
        if !(ic == 0 && ir == 2 && it == 12 && ik == 16 && is > ik && is + 2 == tok.len()) {
            return Err(err("class", "fields out of order or wrong counts"));
        }
        let class_id = tok[1].parse().map_err(|_| err("class", "not an integer"))?;
        let nums = |key: &str, s: &[&str]| -> Result<Vec<f64>> {
            s.iter().map(|v| v.parse::<f64>().map_err(|_| err(key, "not a number"))).collect()
        };
        let r = nums("R", &tok[3..12])?;
        let t = nums("t", &tok[13..16])?;
        let keypoints = nums("keypoints", &tok[17..is])?;
        if keypoints.len() % 2 != 0 {
            return Err(err("keypoints", "odd number of coordinates"));
        }
        let status = PoseStatus::parse(tok[is + 1]).ok_or_else(|| err("status", "unknown status"))?;
        out.push(PoseRecord {
            class_id,
            pose: Pose::new(nalgebra::Matrix3::from_row_slice(&r), Vector3::new(t[0], t[1], t[2])),
            keypoints,
            status,
        });
    }
    Ok(out)
}
