//! Keypoint models, pinhole projection, EPnP inside RANSAC with
//! Levenberg-Marquardt refinement, and the ADD(-S) / 2D projection metrics.

use std::collections::BTreeMap;
use std::path::Path;

use nalgebra::{DMatrix, DVector, Matrix3, Matrix6, SymmetricEigen, Vector2, Vector3, Vector6};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor_io::{read_tensor, Validation};

/// Keypoints per object model.
pub const KEYPOINTS_PER_OBJECT: usize = 9;
/// ADD(-S) threshold as a fraction of the object diameter.
pub const ADD_THRESHOLD: f64 = 0.1;
/// 2D projection threshold in pixels.
pub const PROJECTION_THRESHOLD_PX: f64 = 5.0;

const ROTATION_TOLERANCE: f64 = 1e-6;
const MIN_DEPTH: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CameraIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
}

impl CameraIntrinsics {
    pub fn validate(&self) -> Result<()> {
        if !(self.fx > 0.0 && self.fy > 0.0) || !self.cx.is_finite() || !self.cy.is_finite() {
            return Err(Error::Validation(format!("invalid intrinsics {self:?}")));
        }
        Ok(())
    }

    #[inline]
    pub fn project_camera_point(&self, p: &Vector3<f64>) -> Vector2<f64> {
        Vector2::new(self.fx * p.x / p.z + self.cx, self.fy * p.y / p.z + self.cy)
    }
}

/// Rigid object-to-camera transform.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pose {
    pub rotation: Matrix3<f64>,
    /// Meters.
    pub translation: Vector3<f64>,
}

impl Pose {
    pub fn identity() -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
        }
    }

    pub fn new(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Self {
        Self {
            rotation,
            translation,
        }
    }

    /// Pose from an axis-angle vector (radians) and a translation.
    pub fn from_axis_angle(axis_angle: Vector3<f64>, translation: Vector3<f64>) -> Self {
        Self {
            rotation: *nalgebra::Rotation3::new(axis_angle).matrix(),
            translation,
        }
    }

    #[inline]
    pub fn transform(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * p + self.translation
    }

    /// `self ∘ other`: apply `other` first.
    pub fn compose(&self, other: &Pose) -> Pose {
        Pose {
            rotation: self.rotation * other.rotation,
            translation: self.rotation * other.translation + self.translation,
        }
    }

    pub fn rotation_row_major(&self) -> [f64; 9] {
        let r = &self.rotation;
        [
            r[(0, 0)],
            r[(0, 1)],
            r[(0, 2)],
            r[(1, 0)],
            r[(1, 1)],
            r[(1, 2)],
            r[(2, 0)],
            r[(2, 1)],
            r[(2, 2)],
        ]
    }

    /// Checks `RᵀR = I` and `det R = +1` within 1e-6.
    pub fn validate(&self) -> Result<()> {
        let r = &self.rotation;
        if r.iter().chain(self.translation.iter()).any(|v| !v.is_finite()) {
            return Err(Error::Validation("pose has non-finite entries".into()));
        }
        let ortho = (r.transpose() * r - Matrix3::identity()).abs().max();
        if ortho > ROTATION_TOLERANCE {
            return Err(Error::Validation(format!(
                "rotation is not orthonormal (max |RᵀR − I| = {ortho:e})"
            )));
        }
        let det = r.determinant();
        if (det - 1.0).abs() > ROTATION_TOLERANCE {
            return Err(Error::Validation(format!("rotation determinant is {det}")));
        }
        Ok(())
    }
}

/// Geodesic angle between two rotations, radians.
pub fn rotation_error(a: &Matrix3<f64>, b: &Matrix3<f64>) -> f64 {
    let rel = a.transpose() * b;
    let c = ((rel.trace() - 1.0) * 0.5).clamp(-1.0, 1.0);
    // acos loses precision near 0; use the skew part there.
    let skew = Vector3::new(
        rel[(2, 1)] - rel[(1, 2)],
        rel[(0, 2)] - rel[(2, 0)],
        rel[(1, 0)] - rel[(0, 1)],
    );
    (0.5 * skew.norm()).atan2(c)
}

/// Pose with solver diagnostics.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PoseEstimate {
    pub pose: Pose,
    pub inlier_count: usize,
    /// Root-mean-square reprojection error over the inliers, pixels.
    pub reproj_rmse: f64,
}

/// Object model the pose pipeline and the metrics work with.
#[derive(Debug, Clone, PartialEq)]
pub struct KeypointModel {
    pub class_id: u32,
    /// Index 0 is the object centre.
    pub keypoints3d: Vec<Vector3<f64>>,
    pub vertices: Vec<Vector3<f64>>,
    /// Meters.
    pub diameter: f64,
    pub symmetric: bool,
}

impl KeypointModel {
    /// Derives the keypoints by farthest point sampling and the diameter as
    /// the largest pairwise vertex distance.
    pub fn from_vertices(class_id: u32, vertices: Vec<Vector3<f64>>, symmetric: bool) -> Result<Self> {
        let keypoints3d = fps_keypoints(&vertices, KEYPOINTS_PER_OBJECT)?;
        let diameter = diameter(&vertices);
        if !(diameter > 0.0) {
            return Err(Error::Validation(format!(
                "model of class {class_id} has zero diameter"
            )));
        }
        Ok(Self {
            class_id,
            keypoints3d,
            vertices,
            diameter,
            symmetric,
        })
    }
}

/// Largest pairwise distance.
pub fn diameter(points: &[Vector3<f64>]) -> f64 {
    let mut best = 0.0f64;
    for (i, a) in points.iter().enumerate() {
        for b in &points[i + 1..] {
            best = best.max((a - b).norm_squared());
        }
    }
    best.sqrt()
}

pub fn centroid(points: &[Vector3<f64>]) -> Vector3<f64> {
    points.iter().fold(Vector3::zeros(), |acc, p| acc + p) / points.len().max(1) as f64
}

/// Farthest point sampling seeded with the vertex centroid.
///
/// Each further pick maximizes the distance to the closest point chosen so
/// far; ties go to the lowest vertex index.
pub fn fps_keypoints(vertices: &[Vector3<f64>], m: usize) -> Result<Vec<Vector3<f64>>> {
    if m == 0 {
        return Err(Error::Parameter("at least one keypoint is required".into()));
    }
    if vertices.len() < m {
        return Err(Error::Validation(format!(
            "{} vertices cannot yield {m} keypoints",
            vertices.len()
        )));
    }
    let centre = centroid(vertices);
    let mut chosen = vec![centre];
    let mut nearest: Vec<f64> = vertices.iter().map(|v| (v - centre).norm_squared()).collect();
    while chosen.len() < m {
        let mut best = 0;
        for (i, &d) in nearest.iter().enumerate() {
            if d > nearest[best] {
                best = i;
            }
        }
        let pick = vertices[best];
        chosen.push(pick);
        for (d, v) in nearest.iter_mut().zip(vertices) {
            *d = d.min((v - pick).norm_squared());
        }
    }
    Ok(chosen)
}

/// Pinhole projection of object points under `pose`.
pub fn project(points: &[Vector3<f64>], pose: &Pose, k: &CameraIntrinsics) -> Result<Vec<Vector2<f64>>> {
    let cam: Vec<Vector3<f64>> = points.iter().map(|p| pose.transform(p)).collect();
    let bad: Vec<usize> = cam
        .iter()
        .enumerate()
        .filter(|(_, p)| !(p.z > MIN_DEPTH))
        .map(|(i, _)| i)
        .collect();
    if !bad.is_empty() {
        return Err(Error::Projection { indices: bad });
    }
    Ok(cam.iter().map(|p| k.project_camera_point(p)).collect())
}

fn reprojection_errors(
    points3d: &[Vector3<f64>],
    points2d: &[Vector2<f64>],
    pose: &Pose,
    k: &CameraIntrinsics,
) -> Vec<f64> {
    points3d
        .iter()
        .zip(points2d)
        .map(|(p, uv)| {
            let c = pose.transform(p);
            if c.z > MIN_DEPTH {
                (k.project_camera_point(&c) - uv).norm()
            } else {
                f64::INFINITY
            }
        })
        .collect()
}

fn rmse(errors: &[f64]) -> f64 {
    (errors.iter().map(|e| e * e).sum::<f64>() / errors.len().max(1) as f64).sqrt()
}

/// Rotation and translation that best map `world` onto `camera` (Kabsch).
fn absolute_orientation(world: &[Vector3<f64>], camera: &[Vector3<f64>]) -> Pose {
    let cw = centroid(world);
    let cc = centroid(camera);
    let mut h = Matrix3::zeros();
    for (pw, pc) in world.iter().zip(camera) {
        h += (pc - cc) * (pw - cw).transpose();
    }
    let svd = h.svd(true, true);
    let u = svd.u.unwrap();
    let v_t = svd.v_t.unwrap();
    let d = (u * v_t).determinant().signum();
    let r = u * Matrix3::from_diagonal(&Vector3::new(1.0, 1.0, d)) * v_t;
    Pose::new(r, cc - r * cw)
}

/// Control-point solution of EPnP.
///
/// Non-planar inputs use four control points (centroid plus the principal
/// axes). Coplanar inputs use three in-plane control points; the null-space
/// analysis is the same with fewer distance constraints.
pub fn epnp(
    points3d: &[Vector3<f64>],
    points2d: &[Vector2<f64>],
    k: &CameraIntrinsics,
) -> Result<PoseEstimate> {
    let n = points3d.len();
    if n < 4 {
        return Err(Error::Parameter(format!(
            "EPnP needs at least 4 correspondences, got {n}"
        )));
    }
    if points2d.len() != n {
        return Err(Error::Shape(format!("{n} object points vs {} image points", points2d.len())));
    }
    let c0 = centroid(points3d);
    let mut cov = Matrix3::zeros();
    for p in points3d {
        let d = p - c0;
        cov += d * d.transpose();
    }
    let eig = SymmetricEigen::new(cov);
    let mut order = [0usize, 1, 2];
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let vals: Vec<f64> = order.iter().map(|&i| eig.eigenvalues[i].max(0.0)).collect();
    let axes: Vec<Vector3<f64>> = order.iter().map(|&i| eig.eigenvectors.column(i).into_owned()).collect();
    if vals[0] <= 0.0 || vals[1] <= 1e-10 * vals[0] {
        return Err(Error::Solver("object points are collinear".into()));
    }
    let planar = vals[2] <= 1e-10 * vals[0];
    let n_axes = if planar { 2 } else { 3 };
    let n_ctrl = n_axes + 1;

    let mut controls = vec![c0];
    for a in 0..n_axes {
        controls.push(c0 + axes[a] * (vals[a] / n as f64).sqrt());
    }
    // Barycentric coordinates in the control-point frame.
    let alphas: Vec<Vec<f64>> = points3d
        .iter()
        .map(|p| {
            let d = p - c0;
            let mut a = vec![0.0; n_ctrl];
            let mut sum = 0.0;
            for j in 0..n_axes {
                let scale = (vals[j] / n as f64).sqrt();
                a[j + 1] = axes[j].dot(&d) / scale;
                sum += a[j + 1];
            }
            a[0] = 1.0 - sum;
            a
        })
        .collect();

    let dim = 3 * n_ctrl;
    let mut mtm = DMatrix::<f64>::zeros(dim, dim);
    let mut row_u = DVector::<f64>::zeros(dim);
    let mut row_v = DVector::<f64>::zeros(dim);
    for (a, uv) in alphas.iter().zip(points2d) {
        row_u.fill(0.0);
        row_v.fill(0.0);
        for j in 0..n_ctrl {
            row_u[3 * j] = a[j] * k.fx;
            row_u[3 * j + 2] = a[j] * (k.cx - uv.x);
            row_v[3 * j + 1] = a[j] * k.fy;
            row_v[3 * j + 2] = a[j] * (k.cy - uv.y);
        }
        mtm += &row_u * row_u.transpose();
        mtm += &row_v * row_v.transpose();
    }
    let eig = SymmetricEigen::new(mtm);
    let mut idx: Vec<usize> = (0..dim).collect();
    idx.sort_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b]));
    let n_vec = n_ctrl;
    let null: Vec<DVector<f64>> = idx[..n_vec]
        .iter()
        .map(|&i| eig.eigenvectors.column(i).into_owned())
        .collect();

    let pairs: Vec<(usize, usize)> = (0..n_ctrl)
        .flat_map(|i| (i + 1..n_ctrl).map(move |j| (i, j)))
        .collect();
    // dv[a][p]: difference of control points of pair p in null vector a.
    let dv: Vec<Vec<Vector3<f64>>> = null
        .iter()
        .map(|v| {
            pairs
                .iter()
                .map(|&(i, j)| {
                    Vector3::new(v[3 * i], v[3 * i + 1], v[3 * i + 2])
                        - Vector3::new(v[3 * j], v[3 * j + 1], v[3 * j + 2])
                })
                .collect()
        })
        .collect();
    let rho: Vec<f64> = pairs
        .iter()
        .map(|&(i, j)| (controls[i] - controls[j]).norm_squared())
        .collect();

    let mut best: Option<(f64, Pose)> = None;
    for init in beta_initializations(&dv, &rho, n_vec) {
        let betas = refine_betas(&dv, &rho, init);
        let Some((pose, err)) = pose_from_betas(&betas, &null, &alphas, points3d, points2d, k) else {
            continue;
        };
        if best.as_ref().is_none_or(|(e, _)| err < *e) {
            best = Some((err, pose));
        }
    }
    let (_, pose) = best.ok_or_else(|| Error::Solver("EPnP found no valid control points".into()))?;
    let errors = reprojection_errors(points3d, points2d, &pose, k);
    Ok(PoseEstimate {
        pose,
        inlier_count: n,
        reproj_rmse: rmse(&errors),
    })
}

fn lstsq(a: &DMatrix<f64>, b: &DVector<f64>) -> Option<DVector<f64>> {
    a.clone().svd(true, true).solve(b, 1e-12).ok()
}

/// Linearized initial guesses for the null-space coefficients.
fn beta_initializations(dv: &[Vec<Vector3<f64>>], rho: &[f64], n_vec: usize) -> Vec<Vec<f64>> {
    let pairs = rho.len();
    let b = DVector::from_row_slice(rho);
    let dot = |a: usize, c: usize, p: usize| dv[a][p].dot(&dv[c][p]);
    let mut out = Vec::new();

    // One null vector.
    {
        let num: f64 = (0..pairs).map(|p| rho[p] * dot(0, 0, p)).sum();
        let den: f64 = (0..pairs).map(|p| dot(0, 0, p).powi(2)).sum();
        if den > 0.0 {
            let mut betas = vec![0.0; n_vec];
            betas[0] = (num / den).abs().sqrt();
            out.push(betas);
        }
    }
    // Two null vectors: [β11, β12, β22].
    if n_vec >= 2 {
        let a = DMatrix::from_fn(pairs, 3, |p, c| match c {
            0 => dot(0, 0, p),
            1 => 2.0 * dot(0, 1, p),
            _ => dot(1, 1, p),
        });
        if let Some(x) = lstsq(&a, &b) {
            let mut betas = vec![0.0; n_vec];
            if x[0] < 0.0 {
                betas[0] = (-x[0]).sqrt();
                betas[1] = if x[2] < 0.0 { (-x[2]).sqrt() } else { 0.0 };
            } else {
                betas[0] = x[0].sqrt();
                betas[1] = if x[2] > 0.0 { x[2].sqrt() } else { 0.0 };
            }
            if x[1] < 0.0 {
                betas[0] = -betas[0];
            }
            out.push(betas);
        }
    }
    // Three null vectors: [β11, β12, β22, β13, β23].
    if n_vec >= 3 && pairs >= 5 {
        let a = DMatrix::from_fn(pairs, 5, |p, c| match c {
            0 => dot(0, 0, p),
            1 => 2.0 * dot(0, 1, p),
            2 => dot(1, 1, p),
            3 => 2.0 * dot(0, 2, p),
            _ => 2.0 * dot(1, 2, p),
        });
        if let Some(x) = lstsq(&a, &b) {
            let mut betas = vec![0.0; n_vec];
            if x[0] < 0.0 {
                betas[0] = (-x[0]).sqrt();
                betas[1] = if x[2] < 0.0 { (-x[2]).sqrt() } else { 0.0 };
            } else {
                betas[0] = x[0].sqrt();
                betas[1] = if x[2] > 0.0 { x[2].sqrt() } else { 0.0 };
            }
            if x[1] < 0.0 {
                betas[0] = -betas[0];
            }
            if betas[0] != 0.0 {
                betas[2] = x[3] / betas[0];
            }
            out.push(betas);
        }
    }
    // First-order terms of four vectors: [β11, β12, β13, β14].
    if n_vec >= 4 && pairs >= 4 {
        let a = DMatrix::from_fn(pairs, 4, |p, c| match c {
            0 => dot(0, 0, p),
            _ => 2.0 * dot(0, c, p),
        });
        if let Some(x) = lstsq(&a, &b) {
            let s = x[0].abs().sqrt();
            if s > 0.0 {
                let sign = if x[0] < 0.0 { -1.0 } else { 1.0 };
                out.push(vec![s, sign * x[1] / s, sign * x[2] / s, sign * x[3] / s]);
            }
        }
    }
    out
}

/// Gauss-Newton on the control-point distance constraints.
fn refine_betas(dv: &[Vec<Vector3<f64>>], rho: &[f64], mut betas: Vec<f64>) -> Vec<f64> {
    let n_vec = betas.len();
    let pairs = rho.len();
    let cost = |betas: &[f64]| -> f64 {
        (0..pairs)
            .map(|p| {
                let d: Vector3<f64> = (0..n_vec).map(|a| dv[a][p] * betas[a]).sum();
                (rho[p] - d.norm_squared()).powi(2)
            })
            .sum()
    };
    let mut current = cost(&betas);
    for _ in 0..10 {
        let mut jac = DMatrix::<f64>::zeros(pairs, n_vec);
        let mut res = DVector::<f64>::zeros(pairs);
        for p in 0..pairs {
            let d: Vector3<f64> = (0..n_vec).map(|a| dv[a][p] * betas[a]).sum();
            res[p] = rho[p] - d.norm_squared();
            for a in 0..n_vec {
                jac[(p, a)] = 2.0 * d.dot(&dv[a][p]);
            }
        }
        let Some(step) = lstsq(&jac, &res) else { break };
        let trial: Vec<f64> = betas.iter().zip(step.iter()).map(|(b, s)| b + s).collect();
        let c = cost(&trial);
        if !(c < current) {
            break;
        }
        betas = trial;
        current = c;
        if step.norm() < 1e-14 {
            break;
        }
    }
    betas
}

fn pose_from_betas(
    betas: &[f64],
    null: &[DVector<f64>],
    alphas: &[Vec<f64>],
    points3d: &[Vector3<f64>],
    points2d: &[Vector2<f64>],
    k: &CameraIntrinsics,
) -> Option<(Pose, f64)> {
    let n_ctrl = alphas[0].len();
    let mut ctrl = vec![Vector3::zeros(); n_ctrl];
    for (b, v) in betas.iter().zip(null) {
        for (j, c) in ctrl.iter_mut().enumerate() {
            *c += Vector3::new(v[3 * j], v[3 * j + 1], v[3 * j + 2]) * *b;
        }
    }
    let mut camera: Vec<Vector3<f64>> = alphas
        .iter()
        .map(|a| a.iter().zip(&ctrl).map(|(w, c)| c * *w).sum())
        .collect();
    let mean_z: f64 = camera.iter().map(|p| p.z).sum::<f64>();
    if mean_z < 0.0 {
        camera.iter_mut().for_each(|p| *p = -*p);
    }
    if camera.iter().all(|p| p.norm_squared() == 0.0) {
        return None;
    }
    let pose = absolute_orientation(points3d, &camera);
    if pose.rotation.iter().chain(pose.translation.iter()).any(|v| !v.is_finite()) {
        return None;
    }
    let errors = reprojection_errors(points3d, points2d, &pose, k);
    let mean = errors.iter().sum::<f64>() / errors.len() as f64;
    Some((pose, mean))
}

/// Levenberg-Marquardt limits.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RefineParams {
    pub max_iterations: usize,
    pub step_tolerance: f64,
}

impl Default for RefineParams {
    fn default() -> Self {
        Self {
            max_iterations: 20,
            step_tolerance: 1e-8,
        }
    }
}

fn reprojection_cost(points3d: &[Vector3<f64>], points2d: &[Vector2<f64>], pose: &Pose, k: &CameraIntrinsics) -> f64 {
    let mut sum = 0.0;
    for (p, uv) in points3d.iter().zip(points2d) {
        let c = pose.transform(p);
        if !(c.z > MIN_DEPTH) {
            return f64::INFINITY;
        }
        sum += (k.project_camera_point(&c) - uv).norm_squared();
    }
    sum
}

/// Minimizes the squared reprojection error starting from `seed`.
///
/// Steps that do not lower the cost are rejected, so the result is never
/// worse than the seed.
pub fn refine_pose(
    points3d: &[Vector3<f64>],
    points2d: &[Vector2<f64>],
    k: &CameraIntrinsics,
    seed: &Pose,
    params: &RefineParams,
) -> Pose {
    let mut pose = *seed;
    let mut cost = reprojection_cost(points3d, points2d, &pose, k);
    if !cost.is_finite() {
        return pose;
    }
    let mut mu = 1e-3;
    for _ in 0..params.max_iterations {
        let mut jtj = Matrix6::<f64>::zeros();
        let mut jtr = Vector6::<f64>::zeros();
        for (p, uv) in points3d.iter().zip(points2d) {
            let rp = pose.rotation * p;
            let c = rp + pose.translation;
            let (x, y, z) = (c.x, c.y, c.z);
            let iz = 1.0 / z;
            let r = k.project_camera_point(&c) - uv;
            // d(u, v)/dc
            let du = Vector3::new(k.fx * iz, 0.0, -k.fx * x * iz * iz);
            let dv = Vector3::new(0.0, k.fy * iz, -k.fy * y * iz * iz);
            // dc/dω = −[Rp]× for the left perturbation exp(ω)·R.
            let skew = Matrix3::new(0.0, -rp.z, rp.y, rp.z, 0.0, -rp.x, -rp.y, rp.x, 0.0);
            let ju_w = -(skew.transpose() * du);
            let jv_w = -(skew.transpose() * dv);
            let ju = Vector6::new(ju_w.x, ju_w.y, ju_w.z, du.x, du.y, du.z);
            let jv = Vector6::new(jv_w.x, jv_w.y, jv_w.z, dv.x, dv.y, dv.z);
            jtj += ju * ju.transpose() + jv * jv.transpose();
            jtr += ju * r.x + jv * r.y;
        }
        let mut accepted = false;
        let mut small_step = false;
        for _ in 0..8 {
            let mut a = jtj;
            for i in 0..6 {
                a[(i, i)] += mu * jtj[(i, i)].max(1e-12);
            }
            let Some(step) = a.cholesky().map(|c| c.solve(&(-jtr))) else {
                mu *= 10.0;
                continue;
            };
            let omega = Vector3::new(step[0], step[1], step[2]);
            let dt = Vector3::new(step[3], step[4], step[5]);
            let rot = nalgebra::Rotation3::new(omega);
            let trial = Pose::new(rot.matrix() * pose.rotation, pose.translation + dt);
            let trial_cost = reprojection_cost(points3d, points2d, &trial, k);
            small_step = step.norm() < params.step_tolerance;
            if trial_cost < cost {
                pose = trial;
                cost = trial_cost;
                mu = (mu * 0.1).max(1e-12);
                accepted = true;
                break;
            }
            if small_step {
                break;
            }
            mu *= 10.0;
        }
        if !accepted || small_step {
            break;
        }
    }
    // Re-orthonormalize against drift from repeated products.
    let svd = pose.rotation.svd(true, true);
    let (u, v_t) = (svd.u.unwrap(), svd.v_t.unwrap());
    let fixed = Pose::new(u * v_t, pose.translation);
    if reprojection_cost(points3d, points2d, &fixed, k) <= cost {
        fixed
    } else {
        pose
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RansacParams {
    pub iterations: usize,
    /// Inlier reprojection threshold, pixels.
    pub threshold: f64,
    pub confidence: f64,
    pub refine: RefineParams,
    pub seed: u64,
}

impl Default for RansacParams {
    fn default() -> Self {
        Self {
            iterations: 100,
            threshold: 8.0,
            confidence: 0.99,
            refine: RefineParams::default(),
            seed: 0,
        }
    }
}

const MINIMAL_SAMPLE: usize = 4;

fn inliers_of(
    points3d: &[Vector3<f64>],
    points2d: &[Vector2<f64>],
    pose: &Pose,
    k: &CameraIntrinsics,
    threshold: f64,
) -> (Vec<usize>, f64) {
    let errors = reprojection_errors(points3d, points2d, pose, k);
    let mut idx = Vec::new();
    let mut total = 0.0;
    for (i, e) in errors.iter().enumerate() {
        if *e < threshold {
            idx.push(i);
            total += e;
        }
    }
    (idx, total)
}

/// EPnP on minimal samples inside RANSAC, then Levenberg-Marquardt on the
/// consensus set.
pub fn ransac_pnp(
    points3d: &[Vector3<f64>],
    points2d: &[Vector2<f64>],
    k: &CameraIntrinsics,
    params: &RansacParams,
) -> Result<PoseEstimate> {
    let n = points3d.len();
    if n < MINIMAL_SAMPLE {
        return Err(Error::Parameter(format!(
            "RANSAC PnP needs at least {MINIMAL_SAMPLE} correspondences, got {n}"
        )));
    }
    if points2d.len() != n {
        return Err(Error::Shape(format!("{n} object points vs {} image points", points2d.len())));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    let mut best: Option<(Vec<usize>, f64, Pose)> = None;
    let mut budget = params.iterations;
    let mut iter = 0;
    let mut obj = [Vector3::zeros(); MINIMAL_SAMPLE];
    let mut img = [Vector2::zeros(); MINIMAL_SAMPLE];
    while iter < budget {
        iter += 1;
        let sample = rand::seq::index::sample(&mut rng, n, MINIMAL_SAMPLE);
        for (slot, i) in sample.iter().enumerate() {
            obj[slot] = points3d[i];
            img[slot] = points2d[i];
        }
        let Ok(hyp) = epnp(&obj, &img, k) else { continue };
        let (inl, err) = inliers_of(points3d, points2d, &hyp.pose, k, params.threshold);
        let better = match &best {
            None => true,
            Some((b, e, _)) => inl.len() > b.len() || (inl.len() == b.len() && err < *e),
        };
        if better {
            if inl.len() >= MINIMAL_SAMPLE {
                let w = inl.len() as f64 / n as f64;
                let fail = 1.0 - w.powi(MINIMAL_SAMPLE as i32);
                if fail <= f64::EPSILON {
                    budget = iter;
                } else {
                    let need = ((1.0 - params.confidence).ln() / fail.ln()).ceil();
                    if need.is_finite() && need >= 0.0 {
                        budget = budget.min(need as usize);
                    }
                }
            }
            best = Some((inl, err, hyp.pose));
        }
    }
    let (inliers, _, hyp_pose) = best
        .filter(|(inl, _, _)| inl.len() >= MINIMAL_SAMPLE)
        .ok_or(Error::NoConsensus {
            required: MINIMAL_SAMPLE,
        })?;

    let obj: Vec<Vector3<f64>> = inliers.iter().map(|&i| points3d[i]).collect();
    let img: Vec<Vector2<f64>> = inliers.iter().map(|&i| points2d[i]).collect();
    let mut seed = hyp_pose;
    if let Ok(all) = epnp(&obj, &img, k) {
        if reprojection_cost(&obj, &img, &all.pose, k) < reprojection_cost(&obj, &img, &seed, k) {
            seed = all.pose;
        }
    }
    let pose = refine_pose(&obj, &img, k, &seed, &params.refine);
    let errors = reprojection_errors(&obj, &img, &pose, k);
    Ok(PoseEstimate {
        pose,
        inlier_count: inliers.len(),
        reproj_rmse: rmse(&errors),
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricResult {
    pub value: f64,
    pub correct: bool,
}

/// ADD for asymmetric models, ADD-S (closest transformed vertex) for
/// symmetric ones. Correct below 10% of the diameter.
pub fn add_metric(est: &Pose, gt: &Pose, model: &KeypointModel) -> MetricResult {
    let ests: Vec<Vector3<f64>> = model.vertices.iter().map(|v| est.transform(v)).collect();
    let gts: Vec<Vector3<f64>> = model.vertices.iter().map(|v| gt.transform(v)).collect();
    let n = ests.len().max(1) as f64;
    let value = if model.symmetric {
        gts.iter()
            .map(|g| {
                ests.iter()
                    .map(|e| (e - g).norm_squared())
                    .fold(f64::INFINITY, f64::min)
                    .sqrt()
            })
            .sum::<f64>()
            / n
    } else {
        ests.iter().zip(&gts).map(|(e, g)| (e - g).norm()).sum::<f64>() / n
    };
    MetricResult {
        value,
        correct: value < ADD_THRESHOLD * model.diameter,
    }
}

/// Plain ADD regardless of the symmetry flag.
pub fn add_distance(est: &Pose, gt: &Pose, vertices: &[Vector3<f64>]) -> f64 {
    vertices
        .iter()
        .map(|v| (est.transform(v) - gt.transform(v)).norm())
        .sum::<f64>()
        / vertices.len().max(1) as f64
}

/// Mean pixel distance of vertices projected under both poses. `None` when
/// some vertex falls behind the camera, which counts as incorrect.
pub fn projection_metric(
    est: &Pose,
    gt: &Pose,
    model: &KeypointModel,
    k: &CameraIntrinsics,
) -> Option<MetricResult> {
    let a = project(&model.vertices, est, k).ok()?;
    let b = project(&model.vertices, gt, k).ok()?;
    let value = a.iter().zip(&b).map(|(p, q)| (p - q).norm()).sum::<f64>() / a.len().max(1) as f64;
    Some(MetricResult {
        value,
        correct: value < PROJECTION_THRESHOLD_PX,
    })
}

/// One annotated object in one image. `correct == None` means the object was
/// not detected.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Outcome {
    pub class_id: u32,
    pub correct: Option<bool>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RecallReport {
    /// Percent per class.
    pub per_class: BTreeMap<u32, f64>,
    /// Unweighted mean over classes, percent.
    pub mean: f64,
}

pub fn recall_report(results: &[Outcome]) -> RecallReport {
    let mut tally: BTreeMap<u32, (usize, usize)> = BTreeMap::new();
    for r in results {
        let e = tally.entry(r.class_id).or_default();
        e.0 += 1;
        if r.correct == Some(true) {
            e.1 += 1;
        }
    }
    let per_class: BTreeMap<u32, f64> = tally
        .into_iter()
        .map(|(c, (n, ok))| (c, 100.0 * ok as f64 / n as f64))
        .collect();
    let mean = if per_class.is_empty() {
        0.0
    } else {
        per_class.values().sum::<f64>() / per_class.len() as f64
    };
    RecallReport { per_class, mean }
}

/// Reads vertices from an ASCII PLY file.
///
/// Only the `x y z` properties of the `vertex` element are used; other
/// properties and elements are skipped.
pub fn read_ply_ascii(text: &str) -> Result<Vec<Vector3<f64>>> {
    let fail = |msg: &str| Error::Format(format!("PLY: {msg}"));
    let mut lines = text.lines();
    if lines.next().map(str::trim) != Some("ply") {
        return Err(fail("missing `ply` signature"));
    }
    // (name, count, property names)
    let mut elements: Vec<(String, usize, Vec<String>)> = Vec::new();
    let mut ascii = false;
    loop {
        let line = lines.next().ok_or_else(|| fail("header not terminated"))?.trim();
        let mut tok = line.split_whitespace();
        match tok.next() {
            Some("format") => ascii = tok.next() == Some("ascii"),
            Some("element") => {
                let name = tok.next().ok_or_else(|| fail("element without name"))?;
                let count = tok
                    .next()
                    .and_then(|c| c.parse().ok())
                    .ok_or_else(|| fail("element without count"))?;
                elements.push((name.to_string(), count, Vec::new()));
            }
            Some("property") => {
                let name = line.split_whitespace().last().unwrap_or_default();
                elements
                    .last_mut()
                    .ok_or_else(|| fail("property before element"))?
                    .2
                    .push(name.to_string());
            }
            Some("end_header") => break,
            _ => {}
        }
    }
    if !ascii {
        return Err(fail("only ASCII PLY is supported"));
    }
    let mut out = Vec::new();
    for (name, count, props) in &elements {
        if name != "vertex" {
            for _ in 0..*count {
                lines.next().ok_or_else(|| fail("truncated element data"))?;
            }
            continue;
        }
        let pos = |axis: &str| props.iter().position(|p| p == axis);
        let (Some(ix), Some(iy), Some(iz)) = (pos("x"), pos("y"), pos("z")) else {
            return Err(fail("vertex element lacks x y z"));
        };
        for _ in 0..*count {
            let line = lines.next().ok_or_else(|| fail("truncated vertex data"))?;
            let vals: Vec<f64> = line
                .split_whitespace()
                .map(|v| v.parse::<f64>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|_| fail("non-numeric vertex value"))?;
            let get = |i: usize| vals.get(i).copied().ok_or_else(|| fail("short vertex line"));
            out.push(Vector3::new(get(ix)?, get(iy)?, get(iz)?));
        }
    }
    Ok(out)
}

/// Loads a point cloud from `.ply` (ASCII) or `.cpt` (`N×3` tensor).
pub fn read_point_cloud(path: &Path) -> Result<Vec<Vector3<f64>>> {
    match path.extension().and_then(|e| e.to_str()) {
        Some("ply") => read_ply_ascii(&std::fs::read_to_string(path)?),
        Some("cpt") => {
            let t = read_tensor(std::fs::File::open(path)?, Validation::Finite)?;
            match *t.dims() {
                [_, 3] => Ok(t
                    .values()
                    .chunks_exact(3)
                    .map(|c| Vector3::new(c[0] as f64, c[1] as f64, c[2] as f64))
                    .collect()),
                _ => Err(Error::Shape(format!("point cloud tensor must be N×3, got {:?}", t.dims()))),
            }
        }
        _ => Err(Error::Format(format!("unsupported point cloud file {}", path.display()))),
    }
}
