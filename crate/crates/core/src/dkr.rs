//! Differentiable keypoint regression.
//!
//! Every pixel of a class region contributes the line through the pixel
//! along its predicted direction. One weighted least-squares system is built
//! per (class, keypoint); its normal equations are 2×2, so they are solved
//! in closed form through a symmetric eigendecomposition with a relative
//! rank cut-off (the minimum-norm pseudoinverse solution). The gradient
//! follows from implicit differentiation of `N·x = r`.

use std::collections::BTreeMap;

use nalgebra::{Matrix2, Vector2};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::tensor_io::FeatureMap;

/// Relative eigenvalue cut-off of the normal-matrix pseudoinverse.
pub const RANK_TOLERANCE: f64 = 1e-10;
/// Target of the mean foreground confidence in [`confidence_regularizer`].
pub const CONFIDENCE_TARGET: f64 = 0.7;

/// Pixel location, `y` = row and `x` = column. As an image point it sits at
/// `(u, v) = (x, y)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Pixel {
    pub y: usize,
    pub x: usize,
}

impl Pixel {
    pub fn new(y: usize, x: usize) -> Self {
        Self { y, x }
    }

    pub fn point(&self) -> Vector2<f64> {
        Vector2::new(self.x as f64, self.y as f64)
    }
}

/// Per-class pixel sets, keyed by class id.
pub type RegionMasks = BTreeMap<u32, Vec<Pixel>>;

/// `ln(1 + eᵛ)` without overflow.
#[inline]
pub fn softplus(v: f64) -> f64 {
    if v > 20.0 {
        v + (-v).exp().ln_1p()
    } else {
        v.exp().ln_1p()
    }
}

#[inline]
fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

/// Inverse of [`softplus`] for positive weights.
pub fn softplus_inverse(w: f64) -> f64 {
    if w > 20.0 {
        w + (-(-w).exp_m1()).ln()
    } else {
        w.exp_m1().ln()
    }
}

/// Non-negative least-squares weights from raw confidences.
pub fn softplus_weights(raw: &FeatureMap) -> FeatureMap {
    let mut out = raw.clone();
    for v in out.data_mut() {
        *v = softplus(*v);
    }
    out
}

/// One equation `normal · p = offset` of a region system.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Row {
    pub pixel: Vector2<f64>,
    /// Unit direction; the zero vector marks a pixel without a usable field
    /// value, which contributes nothing.
    pub direction: Vector2<f64>,
    pub normal: Vector2<f64>,
    pub offset: f64,
    pub weight: f64,
}

impl Row {
    pub fn new(pixel: Vector2<f64>, direction: Vector2<f64>, weight: f64) -> Self {
        let normal = Vector2::new(-direction.y, direction.x);
        Self {
            pixel,
            direction,
            normal,
            offset: normal.dot(&pixel),
            weight,
        }
    }
}

/// Rows of one (class, keypoint) system.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct RegionSystem {
    pub rows: Vec<Row>,
}

impl RegionSystem {
    pub fn from_rows(rows: Vec<Row>) -> Self {
        Self { rows }
    }

    /// Normal matrix `AᵀWA` and right-hand side `AᵀWb`.
    pub fn normal_equations(&self) -> (Matrix2<f64>, Vector2<f64>) {
        let mut n = Matrix2::zeros();
        let mut r = Vector2::zeros();
        for row in &self.rows {
            n += row.weight * row.normal * row.normal.transpose();
            r += row.weight * row.offset * row.normal;
        }
        (n, r)
    }
}

/// Builds the system of `keypoint` over `region`, re-normalizing directions.
pub fn assemble_system(
    region: &[Pixel],
    field: &FeatureMap,
    weights: &FeatureMap,
    keypoint: usize,
) -> Result<RegionSystem> {
    if region.is_empty() {
        return Err(Error::EmptySystem);
    }
    if 2 * keypoint + 1 >= field.channels() || keypoint >= weights.channels() {
        return Err(Error::Shape(format!(
            "keypoint {keypoint} out of range for {} field / {} weight channels",
            field.channels(),
            weights.channels()
        )));
    }
    if field.height() != weights.height() || field.width() != weights.width() {
        return Err(Error::Shape("field and weights differ spatially".into()));
    }
    let mut rows = Vec::with_capacity(region.len());
    for p in region {
        if p.y >= field.height() || p.x >= field.width() {
            return Err(Error::Shape(format!("pixel {p:?} outside the field")));
        }
        let v = Vector2::new(field.get(p.y, p.x, 2 * keypoint), field.get(p.y, p.x, 2 * keypoint + 1));
        let norm = v.norm();
        let (direction, weight) = if norm > 0.0 && norm.is_finite() {
            (v / norm, weights.get(p.y, p.x, keypoint))
        } else {
            (Vector2::zeros(), 0.0)
        };
        rows.push(Row::new(p.point(), direction, weight));
    }
    Ok(RegionSystem { rows })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SolveDiagnostics {
    /// Eigenvalues of the normal matrix, ascending.
    pub eigenvalues: [f64; 2],
    pub rank: usize,
    /// `λmax / λmin`, infinite when rank-deficient.
    pub condition: f64,
    pub rows: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KeypointSolution {
    pub point: Vector2<f64>,
    pub valid: bool,
    pub diagnostics: SolveDiagnostics,
}

fn symmetric_eigen(n: &Matrix2<f64>) -> ([f64; 2], [Vector2<f64>; 2]) {
    let (a, b, c) = (n[(0, 0)], n[(0, 1)], n[(1, 1)]);
    let mid = 0.5 * (a + c);
    let rad = (0.25 * (a - c) * (a - c) + b * b).sqrt();
    let hi = mid + rad;
    let lo = mid - rad;
    let v_hi = if b != 0.0 {
        let v = Vector2::new(hi - c, b);
        // The other orientation is better conditioned when a ≪ c.
        let w = Vector2::new(b, hi - a);
        if v.norm_squared() >= w.norm_squared() {
            v.normalize()
        } else {
            w.normalize()
        }
    } else if a >= c {
        Vector2::new(1.0, 0.0)
    } else {
        Vector2::new(0.0, 1.0)
    };
    let v_lo = Vector2::new(-v_hi.y, v_hi.x);
    ([lo, hi], [v_lo, v_hi])
}

/// Minimum-norm weighted least-squares intersection of the system's lines.
pub fn solve_keypoint(sys: &RegionSystem) -> Result<KeypointSolution> {
    if sys.rows.is_empty() {
        return Err(Error::EmptySystem);
    }
    if sys.rows.iter().all(|r| r.weight == 0.0) {
        return Err(Error::DegenerateWeights);
    }
    let (n, r) = sys.normal_equations();
    let (vals, vecs) = symmetric_eigen(&n);
    let threshold = RANK_TOLERANCE * vals[1].abs();
    let mut point = Vector2::zeros();
    let mut rank = 0;
    for (lam, v) in vals.iter().zip(&vecs) {
        if *lam > threshold && *lam > 0.0 {
            point += v * (v.dot(&r) / lam);
            rank += 1;
        }
    }
    let condition = if rank == 2 { vals[1] / vals[0] } else { f64::INFINITY };
    Ok(KeypointSolution {
        point,
        valid: rank == 2,
        diagnostics: SolveDiagnostics {
            eigenvalues: vals,
            rank,
            condition,
            rows: sys.rows.len(),
        },
    })
}

/// Cotangents of one row: with respect to its unit direction and weight.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RowCotangent {
    pub direction: Vector2<f64>,
    pub weight: f64,
}

/// Backpropagates a cotangent on the solved point onto every row.
///
/// With `λ = N⁻¹g` and residual `e = p − x*`:
/// `∂/∂w = (λ·n)(n·e)` and `∂/∂n = w[(n·e)λ + (λ·n)e]`.
/// Rank-deficient systems return zeros.
pub fn system_vjp(
    sys: &RegionSystem,
    solution: &KeypointSolution,
    upstream: Vector2<f64>,
) -> Vec<RowCotangent> {
    let zero = RowCotangent {
        direction: Vector2::zeros(),
        weight: 0.0,
    };
    if !solution.valid {
        return vec![zero; sys.rows.len()];
    }
    let (n, _) = sys.normal_equations();
    let Some(inv) = n.try_inverse() else {
        return vec![zero; sys.rows.len()];
    };
    let lambda = inv * upstream;
    sys.rows
        .iter()
        .map(|row| {
            if row.direction == Vector2::zeros() {
                return zero;
            }
            let e = row.pixel - solution.point;
            let ln = lambda.dot(&row.normal);
            let ne = row.normal.dot(&e);
            let d_normal = row.weight * (ne * lambda + ln * e);
            // normal = (−d_y, d_x)
            RowCotangent {
                direction: Vector2::new(d_normal.y, -d_normal.x),
                weight: ln * ne,
            }
        })
        .collect()
}

/// Keypoints of one class, in keypoint order.
#[derive(Debug, Clone, PartialEq)]
pub struct Keypoints2D {
    pub points: Vec<Vector2<f64>>,
    pub valid: Vec<bool>,
    pub diagnostics: Vec<SolveDiagnostics>,
}

impl Keypoints2D {
    pub fn from_points(points: Vec<Vector2<f64>>) -> Self {
        let n = points.len();
        Self {
            points,
            valid: vec![true; n],
            diagnostics: Vec::new(),
        }
    }

    pub fn all_valid(&self) -> bool {
        self.valid.iter().all(|&v| v)
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

fn check_stacks(field: &FeatureMap, raw_conf: &FeatureMap) -> Result<usize> {
    let m = raw_conf.channels();
    if field.channels() != 2 * m {
        return Err(Error::Shape(format!(
            "field has {} channels, expected 2·{m}",
            field.channels()
        )));
    }
    if field.height() != raw_conf.height() || field.width() != raw_conf.width() {
        return Err(Error::Shape("field and confidences differ spatially".into()));
    }
    Ok(m)
}

fn solve_all(
    regions: &RegionMasks,
    field: &FeatureMap,
    weights: &FeatureMap,
    m: usize,
) -> Result<Vec<(u32, usize, RegionSystem, Option<KeypointSolution>)>> {
    let jobs: Vec<(u32, usize)> = regions
        .iter()
        .filter(|(_, px)| !px.is_empty())
        .flat_map(|(&c, _)| (0..m).map(move |k| (c, k)))
        .collect();
    jobs.into_par_iter()
        .map(|(class, k)| {
            let sys = assemble_system(&regions[&class], field, weights, k)?;
            let sol = match solve_keypoint(&sys) {
                Ok(sol) => Some(sol),
                Err(Error::DegenerateWeights) => None,
                Err(e) => return Err(e),
            };
            Ok((class, k, sys, sol))
        })
        .collect()
}

/// Solves every (class, keypoint) system.
///
/// Classes with an empty region are absent from the result. A system whose
/// weights are all zero yields an invalid keypoint at the origin.
pub fn dkr_forward(
    regions: &RegionMasks,
    field: &FeatureMap,
    raw_conf: &FeatureMap,
) -> Result<BTreeMap<u32, Keypoints2D>> {
    let m = check_stacks(field, raw_conf)?;
    let weights = softplus_weights(raw_conf);
    let solved = solve_all(regions, field, &weights, m)?;
    let mut out: BTreeMap<u32, Keypoints2D> = BTreeMap::new();
    for (class, _, sys, sol) in solved {
        let kp = out.entry(class).or_insert_with(|| Keypoints2D {
            points: Vec::with_capacity(m),
            valid: Vec::with_capacity(m),
            diagnostics: Vec::with_capacity(m),
        });
        match sol {
            Some(s) => {
                kp.points.push(s.point);
                kp.valid.push(s.valid);
                kp.diagnostics.push(s.diagnostics);
            }
            None => {
                kp.points.push(Vector2::zeros());
                kp.valid.push(false);
                kp.diagnostics.push(SolveDiagnostics {
                    eigenvalues: [0.0; 2],
                    rank: 0,
                    condition: f64::INFINITY,
                    rows: sys.rows.len(),
                });
            }
        }
    }
    Ok(out)
}

#[derive(Debug, Clone)]
pub struct DkrCotangents {
    pub field: FeatureMap,
    pub raw_conf: FeatureMap,
}

/// Vector-Jacobian product of [`dkr_forward`].
///
/// `upstream` maps class ids to one cotangent per keypoint; classes missing
/// from it contribute nothing.
pub fn dkr_vjp(
    regions: &RegionMasks,
    field: &FeatureMap,
    raw_conf: &FeatureMap,
    upstream: &BTreeMap<u32, Vec<Vector2<f64>>>,
) -> Result<DkrCotangents> {
    let m = check_stacks(field, raw_conf)?;
    let weights = softplus_weights(raw_conf);
    let mut d_field = FeatureMap::zeros(field.height(), field.width(), field.channels());
    let mut d_conf = FeatureMap::zeros(raw_conf.height(), raw_conf.width(), m);
    let solved = solve_all(regions, field, &weights, m)?;
    for (class, k, sys, sol) in solved {
        let (Some(sol), Some(g)) = (sol, upstream.get(&class)) else {
            continue;
        };
        let g = *g.get(k).ok_or_else(|| {
            Error::Shape(format!("class {class} cotangent lacks keypoint {k}"))
        })?;
        let rows = system_vjp(&sys, &sol, g);
        for (p, rc) in regions[&class].iter().zip(rows) {
            if rc.weight == 0.0 && rc.direction == Vector2::zeros() {
                continue;
            }
            let raw = raw_conf.get(p.y, p.x, k);
            let ci = d_conf.index(p.y, p.x, k);
            d_conf.data_mut()[ci] += rc.weight * sigmoid(raw);
            let v = Vector2::new(field.get(p.y, p.x, 2 * k), field.get(p.y, p.x, 2 * k + 1));
            let norm = v.norm();
            let d = v / norm;
            let dv = (rc.direction - d * d.dot(&rc.direction)) / norm;
            let fi = d_field.index(p.y, p.x, 2 * k);
            d_field.data_mut()[fi] += dv.x;
            d_field.data_mut()[fi + 1] += dv.y;
        }
    }
    Ok(DkrCotangents {
        field: d_field,
        raw_conf: d_conf,
    })
}

/// `Σₖ |mean softplus(raw_k) over foreground − 0.7|`.
///
/// An empty foreground gives zero loss.
pub fn confidence_regularizer(raw_conf: &FeatureMap, foreground: &[Pixel]) -> f64 {
    if foreground.is_empty() {
        return 0.0;
    }
    let n = foreground.len() as f64;
    (0..raw_conf.channels())
        .map(|k| {
            let mean = foreground
                .iter()
                .map(|p| softplus(raw_conf.get(p.y, p.x, k)))
                .sum::<f64>()
                / n;
            (mean - CONFIDENCE_TARGET).abs()
        })
        .sum()
}

/// Gradient of [`confidence_regularizer`] with respect to `raw_conf`.
pub fn confidence_regularizer_vjp(raw_conf: &FeatureMap, foreground: &[Pixel], upstream: f64) -> FeatureMap {
    let m = raw_conf.channels();
    let mut out = FeatureMap::zeros(raw_conf.height(), raw_conf.width(), m);
    if foreground.is_empty() {
        return out;
    }
    let n = foreground.len() as f64;
    for k in 0..m {
        let mean = foreground
            .iter()
            .map(|p| softplus(raw_conf.get(p.y, p.x, k)))
            .sum::<f64>()
            / n;
        let sign = (mean - CONFIDENCE_TARGET).signum();
        if mean == CONFIDENCE_TARGET {
            continue;
        }
        for p in foreground {
            let i = out.index(p.y, p.x, k);
            out.data_mut()[i] += upstream * sign * sigmoid(raw_conf.get(p.y, p.x, k)) / n;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn row_at(p: (f64, f64), d: (f64, f64), w: f64) -> Row {
        Row::new(Vector2::new(p.0, p.1), Vector2::new(d.0, d.1).normalize(), w)
    }

    #[test]
    fn softplus_limits() {
        assert!((softplus(0.0) - 2f64.ln()).abs() < 1e-15);
        let tiny = softplus(-40.0);
        assert!(tiny > 0.0 && tiny < 1e-17);
        assert!((softplus(40.0) - 40.0).abs() < 1e-12);
        assert!(softplus(800.0).is_finite());
        for w in [1e-6, 0.3, 0.7, 5.0, 30.0] {
            assert!((softplus(softplus_inverse(w)) - w).abs() < 1e-9 * w.max(1.0));
        }
    }

    #[test]
    fn axis_rows() {
        let field = FeatureMap::from_vec(1, 5, 2, {
            let mut v = vec![0.0; 10];
            v[0] = 1.0; // (0,0) → (1,0)
            v[9] = 1.0; // (0,4) → (0,1)
            v
        })
        .unwrap();
        let w = FeatureMap::from_fn(1, 5, 1, |_, _, _| 1.0);
        let sys = assemble_system(&[Pixel::new(0, 0), Pixel::new(0, 4)], &field, &w, 0).unwrap();
        assert_eq!(sys.rows[0].normal, Vector2::new(0.0, 1.0));
        assert_eq!(sys.rows[0].offset, 0.0);
        assert_eq!(sys.rows[1].normal, Vector2::new(-1.0, 0.0));
        assert_eq!(sys.rows[1].offset, -4.0);
        let sol = solve_keypoint(&sys).unwrap();
        assert!(sol.valid);
        assert!((sol.point - Vector2::new(4.0, 0.0)).norm() < 1e-12);
    }

    #[test]
    fn empty_region_is_an_error() {
        let field = FeatureMap::zeros(1, 1, 2);
        let w = FeatureMap::zeros(1, 1, 1);
        assert!(matches!(assemble_system(&[], &field, &w, 0), Err(Error::EmptySystem)));
    }

    #[test]
    fn diagonal_lines_meet() {
        let sys = RegionSystem::from_rows(vec![
            row_at((0.0, 0.0), (1.0, 1.0), 1.0),
            row_at((4.0, 0.0), (-1.0, 1.0), 1.0),
        ]);
        let sol = solve_keypoint(&sys).unwrap();
        assert!((sol.point - Vector2::new(2.0, 2.0)).norm() < 1e-9);
    }

    #[test]
    fn concurrent_rays_recover_target() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let target = Vector2::new(7.5, 3.25);
        let rows = (0..100)
            .map(|_| {
                let p = Vector2::new(rng.random_range(0.0..30.0), rng.random_range(0.0..30.0));
                Row::new(p, (target - p).normalize(), rng.random_range(0.01..3.0))
            })
            .collect();
        let sol = solve_keypoint(&RegionSystem::from_rows(rows)).unwrap();
        assert!((sol.point - target).norm() < 1e-6);
    }

    #[test]
    fn zero_weights_and_low_rank() {
        let sys = RegionSystem::from_rows(vec![row_at((0.0, 0.0), (1.0, 0.0), 0.0)]);
        assert!(matches!(solve_keypoint(&sys), Err(Error::DegenerateWeights)));
        let sys = RegionSystem::from_rows(vec![
            row_at((0.0, 1.0), (1.0, 0.0), 1.0),
            row_at((3.0, 1.0), (-1.0, 0.0), 2.0),
        ]);
        let sol = solve_keypoint(&sys).unwrap();
        assert!(!sol.valid);
        assert_eq!(sol.diagnostics.rank, 1);
        // Minimum-norm point on the line y = 1.
        assert!((sol.point - Vector2::new(0.0, 1.0)).norm() < 1e-12);
    }

    #[test]
    fn scaling_weights_leaves_solution() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let rows: Vec<Row> = (0..20)
            .map(|_| {
                let p = Vector2::new(rng.random_range(0.0..30.0), rng.random_range(0.0..30.0));
                let a: f64 = rng.random_range(0.0..std::f64::consts::TAU);
                Row::new(p, Vector2::new(a.cos(), a.sin()), rng.random_range(0.1..2.0))
            })
            .collect();
        let base = solve_keypoint(&RegionSystem::from_rows(rows.clone())).unwrap();
        let scaled: Vec<Row> = rows
            .iter()
            .map(|r| Row::new(r.pixel, r.direction, r.weight * 37.0))
            .collect();
        let again = solve_keypoint(&RegionSystem::from_rows(scaled)).unwrap();
        assert!((base.point - again.point).norm() < 1e-9);
    }

    #[test]
    fn single_pixel_class_is_low_rank() {
        let field = FeatureMap::from_vec(1, 1, 2, vec![1.0, 0.0]).unwrap();
        let conf = FeatureMap::zeros(1, 1, 1);
        let mut regions = RegionMasks::new();
        regions.insert(1, vec![Pixel::new(0, 0)]);
        let kp = dkr_forward(&regions, &field, &conf).unwrap();
        assert!(!kp[&1].valid[0]);
    }

    #[test]
    fn channel_mismatch() {
        let field = FeatureMap::zeros(2, 2, 3);
        let conf = FeatureMap::zeros(2, 2, 1);
        assert!(matches!(dkr_forward(&RegionMasks::new(), &field, &conf), Err(Error::Shape(_))));
    }

    #[test]
    fn regularizer_values() {
        let at_target = softplus_inverse(0.7);
        let conf = FeatureMap::from_fn(2, 2, 2, |_, _, _| at_target);
        let fg = vec![Pixel::new(0, 0), Pixel::new(1, 1)];
        assert!(confidence_regularizer(&conf, &fg) < 1e-12);
        let high = FeatureMap::from_fn(2, 2, 1, |_, _, _| softplus_inverse(1.7));
        assert!((confidence_regularizer(&high, &fg) - 1.0).abs() < 1e-12);
        assert_eq!(confidence_regularizer(&high, &[]), 0.0);
    }

    #[test]
    fn regularizer_matches_two_pass_mean() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let conf = FeatureMap::from_fn(4, 4, 3, |_, _, _| rng.random_range(-3.0..3.0));
        let fg: Vec<Pixel> = (0..16)
            .filter(|i| i % 3 != 0)
            .map(|i| Pixel::new(i / 4, i % 4))
            .collect();
        let mut want = 0.0;
        for k in 0..3 {
            let vals: Vec<f64> = fg
                .iter()
                .map(|p| (1.0 + conf.get(p.y, p.x, k).exp()).ln())
                .collect();
            let mean = vals.iter().sum::<f64>() / vals.len() as f64;
            want += (mean - 0.7).abs();
        }
        assert!((confidence_regularizer(&conf, &fg) - want).abs() < 1e-7);
    }

    #[test]
    fn zero_upstream_zero_cotangents() {
        let field = FeatureMap::from_fn(3, 3, 2, |y, x, c| if c == 0 { 1.0 + x as f64 } else { y as f64 - 1.0 });
        let conf = FeatureMap::zeros(3, 3, 1);
        let mut regions = RegionMasks::new();
        regions.insert(1, (0..9).map(|i| Pixel::new(i / 3, i % 3)).collect());
        let mut up = BTreeMap::new();
        up.insert(1, vec![Vector2::zeros()]);
        let cot = dkr_vjp(&regions, &field, &conf, &up).unwrap();
        assert!(cot.field.data().iter().all(|&v| v == 0.0));
        assert!(cot.raw_conf.data().iter().all(|&v| v == 0.0));
    }
}
