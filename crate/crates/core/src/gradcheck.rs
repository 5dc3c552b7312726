//! Central finite-difference checks of every analytic VJP in the crate.
//!
//! Each kernel is reduced to a scalar `L(θ) = ⟨u, f(θ)⟩` with a random
//! cotangent `u`. The VJP then gives `∇L` directly and the finite
//! differences perturb one coordinate of `θ` at a time. Instances are drawn
//! away from non-smooth points (argmax ties, smooth-ℓ1 kinks).

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use nalgebra::Vector2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::dkr::{dkr_forward, dkr_vjp, Pixel, RegionMasks};
use crate::error::{Error, Result};
use crate::guided_ops::{
    build_pyramid, object_aware_conv, object_aware_conv_vjp, object_aware_upsample, object_aware_upsample_vjp,
    ConvWeights,
};
use crate::losses::{
    keypoint_loss, keypoint_loss_vjp, proxy_voting_loss, proxy_voting_loss_vjp, seg_loss, seg_loss_vjp,
    vector_loss, vector_loss_vjp,
};
use crate::semantic_norm::{clade_vjp, CladeInputs, ModulationTable, SoftSegmentation, DEFAULT_EPS};
use crate::tensor_io::FeatureMap;

/// Finite-difference step.
pub const STEP: f64 = 1e-3;
/// Pass threshold on the maximum relative error.
pub const TOLERANCE: f64 = 1e-4;
pub const DEFAULT_INSTANCES: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Kernel {
    Clade,
    Conv,
    Upsample,
    Dkr,
    SegLoss,
    VectorLoss,
    ProxyVotingLoss,
    KeypointLoss,
}

impl Kernel {
    pub const ALL: [Kernel; 8] = [
        Kernel::Clade,
        Kernel::Conv,
        Kernel::Upsample,
        Kernel::Dkr,
        Kernel::SegLoss,
        Kernel::VectorLoss,
        Kernel::ProxyVotingLoss,
        Kernel::KeypointLoss,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            Kernel::Clade => "clade",
            Kernel::Conv => "conv",
            Kernel::Upsample => "upsample",
            Kernel::Dkr => "dkr",
            Kernel::SegLoss => "seg_loss",
            Kernel::VectorLoss => "vector_loss",
            Kernel::ProxyVotingLoss => "pv_loss",
            Kernel::KeypointLoss => "keypoint_loss",
        }
    }
}

impl fmt::Display for Kernel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Kernel {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Kernel::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::Parameter(format!("unknown kernel `{s}`")))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradcheckOptions {
    pub instances: usize,
    pub seed: u64,
    /// Test hook: scales this kernel's analytic gradient by 1.01.
    pub corrupt: Option<Kernel>,
}

impl Default for GradcheckOptions {
    fn default() -> Self {
        Self {
            instances: DEFAULT_INSTANCES,
            seed: 0,
            corrupt: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KernelReport {
    pub kernel: Kernel,
    pub max_relative_error: f64,
    pub instances: usize,
    pub coordinates: usize,
}

impl KernelReport {
    pub fn passed(&self) -> bool {
        self.max_relative_error < TOLERANCE
    }
}

/// `|a − n| / max(|a|, |n|, 1e-8 + 1e-2·max|n|)`, maximized over
/// coordinates.
///
/// Coordinates below 1% of the largest gradient entry are measured against
/// that floor: their O(h²) truncation error is of the same absolute size as
/// everyone else's and would otherwise dominate the maximum.
pub fn max_relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let scale = numeric.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let floor = 1e-8 + 1e-2 * scale;
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n).abs() / a.abs().max(n.abs()).max(floor))
        .fold(0.0, f64::max)
}

/// Central differences of `f` at `theta`.
pub fn numeric_gradient(theta: &[f64], mut f: impl FnMut(&[f64]) -> f64) -> Vec<f64> {
    let mut work = theta.to_vec();
    (0..theta.len())
        .map(|i| {
            work[i] = theta[i] + STEP;
            let up = f(&work);
            work[i] = theta[i] - STEP;
            let down = f(&work);
            work[i] = theta[i];
            (up - down) / (2.0 * STEP)
        })
        .collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn random_map(rng: &mut ChaCha8Rng, h: usize, w: usize, c: usize, lo: f64, hi: f64) -> FeatureMap {
    FeatureMap::from_fn(h, w, c, |_, _, _| rng.random_range(lo..hi))
}

/// Random soft segmentation whose top class leads the runner-up by at
/// least `margin` everywhere.
fn random_seg(rng: &mut ChaCha8Rng, h: usize, w: usize, nc: usize, margin: f64) -> SoftSegmentation {
    let mut probs = FeatureMap::zeros(h, w, nc);
    for y in 0..h {
        for x in 0..w {
            loop {
                let raw: Vec<f64> = (0..nc).map(|_| rng.random_range(0.05..1.0)).collect();
                let boost = rng.random_range(0..nc);
                let mut v: Vec<f64> = raw.iter().enumerate().map(|(c, r)| if c == boost { r + 1.0 } else { *r }).collect();
                let s: f64 = v.iter().sum();
                v.iter_mut().for_each(|p| *p /= s);
                let mut sorted = v.clone();
                sorted.sort_by(|a, b| b.total_cmp(a));
                if sorted[0] - sorted[1] >= margin {
                    probs.pixel_mut(y, x).copy_from_slice(&v);
                    break;
                }
            }
        }
    }
    SoftSegmentation::new_unchecked(probs)
}

struct Problem {
    theta: Vec<f64>,
    objective: Box<dyn Fn(&[f64]) -> f64>,
    gradient: Vec<f64>,
}

fn clade_problem(rng: &mut ChaCha8Rng) -> Result<Problem> {
    let (h, w, c, nc) = (4, 4, 3, 3);
    let x = random_map(rng, h, w, c, -2.0, 2.0);
    let seg = random_seg(rng, h, w, nc, 0.0);
    let gamma: Vec<f64> = (0..nc * c).map(|_| rng.random_range(0.5..1.5)).collect();
    let beta: Vec<f64> = (0..nc * c).map(|_| rng.random_range(-0.5..0.5)).collect();
    let table = ModulationTable::new(nc, c, gamma, beta)?;
    let u = random_map(rng, h, w, c, -1.0, 1.0);

    let inputs = CladeInputs {
        x: &x,
        seg: &seg,
        table: &table,
        eps: DEFAULT_EPS,
    };
    let cot = clade_vjp(&inputs, &u)?;
    let mut gradient = cot.x.data().to_vec();
    gradient.extend_from_slice(cot.seg.data());
    gradient.extend_from_slice(cot.table.gamma_values());
    gradient.extend_from_slice(cot.table.beta_values());

    let mut theta = x.data().to_vec();
    theta.extend_from_slice(seg.probs().data());
    theta.extend_from_slice(table.gamma_values());
    theta.extend_from_slice(table.beta_values());
    let objective = move |t: &[f64]| {
        let (nx, ns, nt) = (h * w * c, h * w * nc, nc * c);
        let x = FeatureMap::from_vec(h, w, c, t[..nx].to_vec()).unwrap();
        let seg = SoftSegmentation::new_unchecked(FeatureMap::from_vec(h, w, nc, t[nx..nx + ns].to_vec()).unwrap());
        let table = ModulationTable::new(
            nc,
            c,
            t[nx + ns..nx + ns + nt].to_vec(),
            t[nx + ns + nt..].to_vec(),
        )
        .unwrap();
        let out = CladeInputs {
            x: &x,
            seg: &seg,
            table: &table,
            eps: DEFAULT_EPS,
        }
        .forward()
        .unwrap();
        dot(out.data(), u.data())
    };
    Ok(Problem {
        theta,
        objective: Box::new(objective),
        gradient,
    })
}

fn conv_problem(rng: &mut ChaCha8Rng) -> Result<Problem> {
    let (h, w, cin, cout, nc) = (5, 5, 2, 2, 3);
    let x = random_map(rng, h, w, cin, -1.0, 1.0);
    let weights = ConvWeights::new(cin, cout, (0..9 * cin * cout).map(|_| rng.random_range(-1.0..1.0)).collect())?;
    let seg = random_seg(rng, h, w, nc, 0.1);
    let u = random_map(rng, h, w, cout, -1.0, 1.0);
    let cot = object_aware_conv_vjp(&x, &weights, &seg, &u)?;
    let mut gradient = cot.x.data().to_vec();
    gradient.extend_from_slice(cot.weights.values());
    gradient.extend_from_slice(cot.seg.data());
    let mut theta = x.data().to_vec();
    theta.extend_from_slice(weights.values());
    theta.extend_from_slice(seg.probs().data());
    let objective = move |t: &[f64]| {
        let (nx, nw) = (h * w * cin, 9 * cin * cout);
        let x = FeatureMap::from_vec(h, w, cin, t[..nx].to_vec()).unwrap();
        let wt = ConvWeights::new(cin, cout, t[nx..nx + nw].to_vec()).unwrap();
        let seg = SoftSegmentation::new_unchecked(FeatureMap::from_vec(h, w, nc, t[nx + nw..].to_vec()).unwrap());
        dot(object_aware_conv(&x, &wt, &seg).unwrap().data(), u.data())
    };
    Ok(Problem {
        theta,
        objective: Box::new(objective),
        gradient,
    })
}

fn upsample_problem(rng: &mut ChaCha8Rng) -> Result<Problem> {
    let (h, w, c, nc) = (6, 8, 3, 3);
    let seg = random_seg(rng, h, w, nc, 0.0);
    let pyr = build_pyramid(&seg, 1)?;
    let low = pyr.level(1).expect("one step");
    let f = random_map(rng, low.height(), low.width(), c, -1.0, 1.0);
    let up = object_aware_upsample(&f, &pyr, 1)?;
    let u = random_map(rng, up.map.height(), up.map.width(), c, -1.0, 1.0);
    let gradient = object_aware_upsample_vjp(f.dims(), &up.sources, &u)?.into_data();
    let (lh, lw) = (low.height(), low.width());
    let objective = move |t: &[f64]| {
        let f = FeatureMap::from_vec(lh, lw, c, t.to_vec()).unwrap();
        dot(object_aware_upsample(&f, &pyr, 1).unwrap().map.data(), u.data())
    };
    Ok(Problem {
        theta: f.into_data(),
        objective: Box::new(objective),
        gradient,
    })
}

fn dkr_problem(rng: &mut ChaCha8Rng) -> Result<Problem> {
    let (h, w, m) = (6, 6, 2);
    let region: Vec<Pixel> = (0..h)
        .flat_map(|y| (0..w).map(move |x| Pixel::new(y, x)))
        .filter(|p| (p.y + p.x) % 3 != 0)
        .collect();
    let targets: Vec<Vector2<f64>> = (0..m)
        .map(|_| Vector2::new(rng.random_range(-1.0..6.0), rng.random_range(-1.0..6.0)))
        .collect();
    let mut field = FeatureMap::zeros(h, w, 2 * m);
    let mut conf = FeatureMap::zeros(h, w, m);
    for p in &region {
        for (k, t) in targets.iter().enumerate() {
            let d = t - p.point();
            let ang = d.y.atan2(d.x) + rng.random_range(-0.1..0.1);
            // DKR ignores the vector length; see the proxy-voting instance.
            let len = rng.random_range(2.4..3.75);
            field.set(p.y, p.x, 2 * k, len * ang.cos());
            field.set(p.y, p.x, 2 * k + 1, len * ang.sin());
            conf.set(p.y, p.x, k, rng.random_range(-1.5..1.5));
        }
    }
    let regions: RegionMasks = BTreeMap::from([(1u32, region)]);
    let u: BTreeMap<u32, Vec<Vector2<f64>>> = BTreeMap::from([(
        1,
        (0..m)
            .map(|_| Vector2::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)))
            .collect(),
    )]);
    let cot = dkr_vjp(&regions, &field, &conf, &u)?;
    let mut gradient = cot.field.into_data();
    gradient.extend_from_slice(cot.raw_conf.data());
    let mut theta = field.into_data();
    theta.extend_from_slice(conf.data());
    let objective = move |t: &[f64]| {
        let nf = h * w * 2 * m;
        let field = FeatureMap::from_vec(h, w, 2 * m, t[..nf].to_vec()).unwrap();
        let conf = FeatureMap::from_vec(h, w, m, t[nf..].to_vec()).unwrap();
        let kp = dkr_forward(&regions, &field, &conf).unwrap();
        kp[&1].points.iter().zip(&u[&1]).map(|(p, g)| p.dot(g)).sum()
    };
    Ok(Problem {
        theta,
        objective: Box::new(objective),
        gradient,
    })
}

fn seg_loss_problem(rng: &mut ChaCha8Rng) -> Result<Problem> {
    let (h, w, nc) = (4, 5, 4);
    let logits = random_map(rng, h, w, nc, -3.0, 3.0);
    let labels: Vec<u32> = (0..h * w).map(|_| rng.random_range(0..nc as u32)).collect();
    let s = rng.random_range(0.5..2.0);
    let gradient = seg_loss_vjp(&logits, &labels, s)?.into_data();
    let objective = move |t: &[f64]| {
        s * seg_loss(&FeatureMap::from_vec(h, w, nc, t.to_vec()).unwrap(), &labels).unwrap()
    };
    Ok(Problem {
        theta: logits.into_data(),
        objective: Box::new(objective),
        gradient,
    })
}

/// Uniform sample from `[lo, hi]` that stays `gap` away from ±1.
fn away_from_kink(rng: &mut ChaCha8Rng, lo: f64, hi: f64, gap: f64) -> f64 {
    loop {
        let v: f64 = rng.random_range(lo..hi);
        if (v.abs() - 1.0).abs() > gap {
            return v;
        }
    }
}

fn vector_loss_problem(rng: &mut ChaCha8Rng) -> Result<Problem> {
    let (h, w, c) = (4, 4, 4);
    let gt = random_map(rng, h, w, c, -1.0, 1.0);
    let mut pred = gt.clone();
    for v in pred.data_mut() {
        *v += away_from_kink(rng, -2.5, 2.5, 0.01);
    }
    let mask: Vec<bool> = (0..h * w).map(|_| rng.random_bool(0.6)).collect();
    let s = rng.random_range(0.5..2.0);
    let gradient = vector_loss_vjp(&pred, &gt, &mask, s)?.into_data();
    let objective = move |t: &[f64]| {
        s * vector_loss(&FeatureMap::from_vec(h, w, c, t.to_vec()).unwrap(), &gt, &mask).unwrap()
    };
    Ok(Problem {
        theta: pred.into_data(),
        objective: Box::new(objective),
        gradient,
    })
}

fn proxy_problem(rng: &mut ChaCha8Rng) -> Result<Problem> {
    let (h, w, m) = (5, 5, 2);
    let keypoints: BTreeMap<u32, Vec<Vector2<f64>>> = (1..=2u32)
        .map(|c| {
            let pts = (0..m)
                .map(|_| Vector2::new(rng.random_range(-1.0..5.0), rng.random_range(-1.0..5.0)))
                .collect();
            (c, pts)
        })
        .collect();
    let labels: Vec<u32> = (0..h * w).map(|_| rng.random_range(0..3)).collect();
    let mask: Vec<bool> = labels.iter().map(|&l| l != 0).collect();
    let s = rng.random_range(0.5..2.0);
    'retry: loop {
        // The loss only depends on the direction; lengths around 3 keep the
        // O(h²/|v|²) truncation of the normalization below tolerance.
        let mut pred = FeatureMap::zeros(h, w, 2 * m);
        for v in pred.data_mut().chunks_exact_mut(2) {
            let a: f64 = rng.random_range(0.0..std::f64::consts::TAU);
            let len = rng.random_range(2.4..3.75);
            v[0] = len * a.cos();
            v[1] = len * a.sin();
        }
        for (i, &l) in labels.iter().enumerate() {
            if l == 0 {
                continue;
            }
            let p = Vector2::new((i % w) as f64, (i / w) as f64);
            for (k, kp) in keypoints[&l].iter().enumerate() {
                let v = Vector2::new(pred.data()[i * 2 * m + 2 * k], pred.data()[i * 2 * m + 2 * k + 1]);
                let d = kp - p;
                let dist = (v.x * d.y - v.y * d.x).abs() / v.norm();
                if (dist - 1.0).abs() < 0.02 || dist < 0.02 {
                    continue 'retry;
                }
            }
        }
        let gradient = proxy_voting_loss_vjp(&pred, &keypoints, &labels, &mask, s)?.into_data();
        let objective = move |t: &[f64]| {
            let pred = FeatureMap::from_vec(h, w, 2 * m, t.to_vec()).unwrap();
            s * proxy_voting_loss(&pred, &keypoints, &labels, &mask).unwrap()
        };
        return Ok(Problem {
            theta: pred.into_data(),
            objective: Box::new(objective),
            gradient,
        });
    }
}

fn keypoint_problem(rng: &mut ChaCha8Rng) -> Result<Problem> {
    let m = 4;
    let classes = [1u32, 4, 7];
    let gt: BTreeMap<u32, Vec<Vector2<f64>>> = classes
        .iter()
        .map(|&c| {
            let pts = (0..m)
                .map(|_| Vector2::new(rng.random_range(0.0..50.0), rng.random_range(0.0..50.0)))
                .collect();
            (c, pts)
        })
        .collect();
    let pred: BTreeMap<u32, Vec<Vector2<f64>>> = gt
        .iter()
        .map(|(&c, pts)| {
            // Class 1 stays in the quadratic regime, the others in the linear one.
            let scale = if c == 1 { 0.4 } else { 3.0 };
            let moved = pts
                .iter()
                .map(|p| {
                    let a: f64 = rng.random_range(0.0..std::f64::consts::TAU);
                    p + Vector2::new(a.cos(), a.sin()) * scale * rng.random_range(0.5..1.0)
                })
                .collect();
            (c, moved)
        })
        .collect();
    let s = rng.random_range(0.5..2.0);
    let cot = keypoint_loss_vjp(&pred, &gt, s)?;
    let gradient: Vec<f64> = cot.values().flatten().flat_map(|v| [v.x, v.y]).collect();
    let theta: Vec<f64> = pred.values().flatten().flat_map(|v| [v.x, v.y]).collect();
    let objective = move |t: &[f64]| {
        let mut it = t.chunks_exact(2).map(|c| Vector2::new(c[0], c[1]));
        let pred: BTreeMap<u32, Vec<Vector2<f64>>> =
            classes.iter().map(|&c| (c, it.by_ref().take(m).collect())).collect();
        s * keypoint_loss(&pred, &gt).unwrap()
    };
    Ok(Problem {
        theta,
        objective: Box::new(objective),
        gradient,
    })
}

/// Checks one kernel on `opts.instances` seeded random instances.
pub fn check_kernel(kernel: Kernel, opts: &GradcheckOptions) -> Result<KernelReport> {
    let mut worst = 0.0f64;
    let mut coordinates = 0;
    for i in 0..opts.instances {
        let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
        rng.set_stream(((kernel as u64) << 32) | i as u64);
        let mut p = match kernel {
            Kernel::Clade => clade_problem(&mut rng)?,
            Kernel::Conv => conv_problem(&mut rng)?,
            Kernel::Upsample => upsample_problem(&mut rng)?,
            Kernel::Dkr => dkr_problem(&mut rng)?,
            Kernel::SegLoss => seg_loss_problem(&mut rng)?,
            Kernel::VectorLoss => vector_loss_problem(&mut rng)?,
            Kernel::ProxyVotingLoss => proxy_problem(&mut rng)?,
            Kernel::KeypointLoss => keypoint_problem(&mut rng)?,
        };
        if opts.corrupt == Some(kernel) {
            p.gradient.iter_mut().for_each(|g| *g *= 1.01);
        }
        let numeric = numeric_gradient(&p.theta, &p.objective);
        worst = worst.max(max_relative_error(&p.gradient, &numeric));
        coordinates += p.theta.len();
    }
    Ok(KernelReport {
        kernel,
        max_relative_error: worst,
        instances: opts.instances,
        coordinates,
    })
}

pub fn run(kernels: &[Kernel], opts: &GradcheckOptions) -> Result<Vec<KernelReport>> {
    kernels.iter().map(|&k| check_kernel(k, opts)).collect()
}
