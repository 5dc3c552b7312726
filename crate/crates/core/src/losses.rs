//! Training losses and their gradients with respect to the predictions.
//!
//! All robust terms use smooth-ℓ1 with the transition at 1.

use std::collections::BTreeMap;

use nalgebra::Vector2;

use crate::error::{Error, Result};
use crate::tensor_io::FeatureMap;

/// Weights of the four loss terms.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub segmentation: f64,
    pub vector: f64,
    pub proxy_voting: f64,
    pub keypoint: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            segmentation: 1.0,
            vector: 0.5,
            proxy_voting: 0.015,
            keypoint: 0.007,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [self.segmentation, self.vector, self.proxy_voting, self.keypoint];
        if all.iter().any(|w| !(*w >= 0.0) || !w.is_finite()) {
            return Err(Error::Parameter(format!("loss weights must be non-negative: {self:?}")));
        }
        Ok(())
    }
}

/// Individual loss values fed to [`total_loss`].
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossParts {
    pub segmentation: f64,
    pub vector: f64,
    pub proxy_voting: f64,
    pub keypoint: f64,
    /// Confidence regularizer, present when keypoint regression is trained.
    pub confidence: Option<f64>,
}

#[inline]
pub fn smooth_l1(x: f64) -> f64 {
    let a = x.abs();
    if a < 1.0 {
        0.5 * x * x
    } else {
        a - 0.5
    }
}

#[inline]
pub fn smooth_l1_grad(x: f64) -> f64 {
    if x.abs() < 1.0 {
        x
    } else {
        x.signum()
    }
}

fn check_labels(logits: &FeatureMap, labels: &[u32]) -> Result<()> {
    if labels.len() != logits.pixels() {
        return Err(Error::Shape(format!(
            "{} labels for {} pixels",
            labels.len(),
            logits.pixels()
        )));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l as usize >= logits.channels()) {
        return Err(Error::Validation(format!(
            "label {bad} outside [0, {})",
            logits.channels()
        )));
    }
    Ok(())
}

fn log_softmax(px: &[f64], out: &mut [f64]) {
    let max = px.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v));
    let lse = px.iter().map(|v| (v - max).exp()).sum::<f64>().ln() + max;
    for (o, v) in out.iter_mut().zip(px) {
        *o = v - lse;
    }
}

/// Mean per-pixel cross-entropy of `softmax(logits)` against `labels`.
pub fn seg_loss(logits: &FeatureMap, labels: &[u32]) -> Result<f64> {
    check_labels(logits, labels)?;
    let nc = logits.channels();
    let mut ls = vec![0.0; nc];
    let total: f64 = logits
        .data()
        .chunks_exact(nc)
        .zip(labels)
        .map(|(px, &l)| {
            log_softmax(px, &mut ls);
            -ls[l as usize]
        })
        .sum();
    Ok(total / labels.len().max(1) as f64)
}

pub fn seg_loss_vjp(logits: &FeatureMap, labels: &[u32], upstream: f64) -> Result<FeatureMap> {
    check_labels(logits, labels)?;
    let nc = logits.channels();
    let scale = upstream / labels.len().max(1) as f64;
    let mut out = logits.clone();
    let mut ls = vec![0.0; nc];
    for (px, &l) in out.data_mut().chunks_exact_mut(nc).zip(labels) {
        log_softmax(px, &mut ls);
        for (c, v) in px.iter_mut().enumerate() {
            *v = scale * (ls[c].exp() - (c == l as usize) as u8 as f64);
        }
    }
    Ok(out)
}

/// Pixels where the predicted class equals the ground truth and is not
/// background.
pub fn supervision_mask(predicted: &[u32], truth: &[u32]) -> Vec<bool> {
    predicted
        .iter()
        .zip(truth)
        .map(|(&p, &t)| t != 0 && p == t)
        .collect()
}

fn check_vector_inputs(pred: &FeatureMap, mask: &[bool]) -> Result<()> {
    if mask.len() != pred.pixels() {
        return Err(Error::Shape(format!(
            "mask has {} entries for {} pixels",
            mask.len(),
            pred.pixels()
        )));
    }
    if pred.channels() % 2 != 0 {
        return Err(Error::Shape("vector field needs an even channel count".into()));
    }
    Ok(())
}

/// Smooth-ℓ1 over every component of every masked pixel, averaged over the
/// masked components.
pub fn vector_loss(pred: &FeatureMap, gt: &FeatureMap, mask: &[bool]) -> Result<f64> {
    if !pred.same_dims(gt) {
        return Err(Error::Shape("predicted and true fields differ".into()));
    }
    check_vector_inputs(pred, mask)?;
    let c = pred.channels();
    let mut total = 0.0;
    let mut count = 0usize;
    for (i, _) in mask.iter().enumerate().filter(|(_, &m)| m) {
        for j in i * c..(i + 1) * c {
            total += smooth_l1(pred.data()[j] - gt.data()[j]);
        }
        count += c;
    }
    Ok(if count == 0 { 0.0 } else { total / count as f64 })
}

pub fn vector_loss_vjp(pred: &FeatureMap, gt: &FeatureMap, mask: &[bool], upstream: f64) -> Result<FeatureMap> {
    if !pred.same_dims(gt) {
        return Err(Error::Shape("predicted and true fields differ".into()));
    }
    check_vector_inputs(pred, mask)?;
    let c = pred.channels();
    let count = mask.iter().filter(|&&m| m).count() * c;
    let mut out = FeatureMap::zeros(pred.height(), pred.width(), c);
    if count == 0 {
        return Ok(out);
    }
    let scale = upstream / count as f64;
    for (i, _) in mask.iter().enumerate().filter(|(_, &m)| m) {
        for j in i * c..(i + 1) * c {
            out.data_mut()[j] = scale * smooth_l1_grad(pred.data()[j] - gt.data()[j]);
        }
    }
    Ok(out)
}

/// Perpendicular distance from `target` to the line through `pixel` along
/// `direction`. `None` for a zero direction.
pub fn point_line_distance(pixel: Vector2<f64>, direction: Vector2<f64>, target: Vector2<f64>) -> Option<f64> {
    let n = direction.norm();
    if n == 0.0 {
        return None;
    }
    let d = target - pixel;
    Some((direction.x * d.y - direction.y * d.x).abs() / n)
}

fn proxy_terms<'a>(
    pred: &'a FeatureMap,
    keypoints: &'a BTreeMap<u32, Vec<Vector2<f64>>>,
    labels: &'a [u32],
    mask: &'a [bool],
) -> Result<Vec<(usize, usize, Vector2<f64>, Vector2<f64>)>> {
    check_vector_inputs(pred, mask)?;
    if labels.len() != pred.pixels() {
        return Err(Error::Shape("label map does not match field".into()));
    }
    let m = pred.channels() / 2;
    let w = pred.width();
    let mut terms = Vec::new();
    for (i, _) in mask.iter().enumerate().filter(|(_, &on)| on) {
        let class = labels[i];
        let kps = keypoints.get(&class).ok_or_else(|| {
            Error::Validation(format!("no ground-truth keypoints for class {class}"))
        })?;
        if kps.len() != m {
            return Err(Error::Shape(format!(
                "class {class} has {} keypoints, field has {m}",
                kps.len()
            )));
        }
        let pixel = Vector2::new((i % w) as f64, (i / w) as f64);
        for (k, kp) in kps.iter().enumerate() {
            terms.push((i, k, pixel, *kp));
        }
    }
    Ok(terms)
}

/// Smooth-ℓ1 of the distance between each true keypoint and the line cast by
/// the predicted direction, averaged over masked (pixel, keypoint) pairs.
///
/// `labels` selects the keypoint set of every masked pixel.
pub fn proxy_voting_loss(
    pred: &FeatureMap,
    keypoints: &BTreeMap<u32, Vec<Vector2<f64>>>,
    labels: &[u32],
    mask: &[bool],
) -> Result<f64> {
    let terms = proxy_terms(pred, keypoints, labels, mask)?;
    if terms.is_empty() {
        return Ok(0.0);
    }
    let c = pred.channels();
    let total: f64 = terms
        .iter()
        .map(|&(i, k, p, kp)| {
            let v = Vector2::new(pred.data()[i * c + 2 * k], pred.data()[i * c + 2 * k + 1]);
            point_line_distance(p, v, kp).map_or(0.0, smooth_l1)
        })
        .sum();
    Ok(total / terms.len() as f64)
}

pub fn proxy_voting_loss_vjp(
    pred: &FeatureMap,
    keypoints: &BTreeMap<u32, Vec<Vector2<f64>>>,
    labels: &[u32],
    mask: &[bool],
    upstream: f64,
) -> Result<FeatureMap> {
    let terms = proxy_terms(pred, keypoints, labels, mask)?;
    let c = pred.channels();
    let mut out = FeatureMap::zeros(pred.height(), pred.width(), c);
    if terms.is_empty() {
        return Ok(out);
    }
    let scale = upstream / terms.len() as f64;
    for (i, k, p, kp) in terms {
        let j = i * c + 2 * k;
        let v = Vector2::new(pred.data()[j], pred.data()[j + 1]);
        let n = v.norm();
        if n == 0.0 {
            continue;
        }
        let d = kp - p;
        let cross = v.x * d.y - v.y * d.x;
        let dist = cross.abs() / n;
        let dd_dv = cross.signum() * Vector2::new(d.y, -d.x) / n - v * (cross.abs() / (n * n * n));
        let g = scale * smooth_l1_grad(dist) * dd_dv;
        out.data_mut()[j] += g.x;
        out.data_mut()[j + 1] += g.y;
    }
    Ok(out)
}

fn check_keypoint_sets(
    pred: &BTreeMap<u32, Vec<Vector2<f64>>>,
    gt: &BTreeMap<u32, Vec<Vector2<f64>>>,
) -> Result<()> {
    for (class, points) in pred {
        let truth = gt.get(class).ok_or_else(|| {
            Error::Validation(format!("class {class} predicted but not annotated"))
        })?;
        if truth.len() != points.len() || points.is_empty() {
            return Err(Error::Shape(format!(
                "class {class}: {} predicted vs {} true keypoints",
                points.len(),
                truth.len()
            )));
        }
    }
    Ok(())
}

/// Smooth-ℓ1 of each class's mean keypoint distance, averaged over the
/// predicted classes.
pub fn keypoint_loss(
    pred: &BTreeMap<u32, Vec<Vector2<f64>>>,
    gt: &BTreeMap<u32, Vec<Vector2<f64>>>,
) -> Result<f64> {
    check_keypoint_sets(pred, gt)?;
    if pred.is_empty() {
        return Ok(0.0);
    }
    let total: f64 = pred
        .iter()
        .map(|(class, points)| {
            let truth = &gt[class];
            let mean = points
                .iter()
                .zip(truth)
                .map(|(a, b)| (a - b).norm())
                .sum::<f64>()
                / points.len() as f64;
            smooth_l1(mean)
        })
        .sum();
    Ok(total / pred.len() as f64)
}

pub fn keypoint_loss_vjp(
    pred: &BTreeMap<u32, Vec<Vector2<f64>>>,
    gt: &BTreeMap<u32, Vec<Vector2<f64>>>,
    upstream: f64,
) -> Result<BTreeMap<u32, Vec<Vector2<f64>>>> {
    check_keypoint_sets(pred, gt)?;
    let classes = pred.len().max(1) as f64;
    Ok(pred
        .iter()
        .map(|(&class, points)| {
            let truth = &gt[&class];
            let m = points.len() as f64;
            let mean = points
                .iter()
                .zip(truth)
                .map(|(a, b)| (a - b).norm())
                .sum::<f64>()
                / m;
            let outer = upstream * smooth_l1_grad(mean) / (classes * m);
            let grads = points
                .iter()
                .zip(truth)
                .map(|(a, b)| {
                    let d = a - b;
                    let n = d.norm();
                    if n == 0.0 {
                        Vector2::zeros()
                    } else {
                        d * (outer / n)
                    }
                })
                .collect();
            (class, grads)
        })
        .collect())
}

/// `λ1·seg + λ2·vec + λ3·pv + λ4·key`, plus the confidence regularizer with
/// unit weight when present.
pub fn total_loss(parts: &LossParts, weights: &LossWeights) -> Result<f64> {
    weights.validate()?;
    let named = [
        ("segmentation", parts.segmentation),
        ("vector", parts.vector),
        ("proxy_voting", parts.proxy_voting),
        ("keypoint", parts.keypoint),
        ("confidence", parts.confidence.unwrap_or(0.0)),
    ];
    if let Some((part, _)) = named.iter().find(|(_, v)| !v.is_finite()) {
        return Err(Error::Numeric {
            part: part.to_string(),
        });
    }
    Ok(weights.segmentation * parts.segmentation
        + weights.vector * parts.vector
        + weights.proxy_voting * parts.proxy_voting
        + weights.keypoint * parts.keypoint
        + parts.confidence.unwrap_or(0.0))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn kps(points: &[(f64, f64)]) -> Vec<Vector2<f64>> {
        points.iter().map(|&(x, y)| Vector2::new(x, y)).collect()
    }

    #[test]
    fn saturated_logits_have_tiny_loss() {
        let logits = FeatureMap::from_vec(1, 2, 2, vec![50.0, 0.0, 0.0, 50.0]).unwrap();
        assert!(seg_loss(&logits, &[0, 1]).unwrap() < 1e-6);
    }

    #[test]
    fn uniform_logits_give_log_classes() {
        let logits = FeatureMap::zeros(2, 3, 14);
        let loss = seg_loss(&logits, &[0, 3, 13, 7, 1, 2]).unwrap();
        assert!((loss - 14f64.ln()).abs() < 1e-12);
        assert!((loss - 2.6391).abs() < 1e-4);
    }

    #[test]
    fn out_of_range_label() {
        let logits = FeatureMap::zeros(1, 1, 3);
        assert!(matches!(seg_loss(&logits, &[3]), Err(Error::Validation(_))));
    }

    #[test]
    fn seg_loss_matches_naive_sum() {
        let logits = FeatureMap::from_fn(2, 2, 3, |y, x, c| ((y * 7 + x * 3 + c * 5) % 11) as f64 * 0.3);
        let labels = [2, 0, 1, 2];
        let mut want = 0.0;
        for (i, &l) in labels.iter().enumerate() {
            let px = &logits.data()[i * 3..i * 3 + 3];
            let z: f64 = px.iter().map(|v| v.exp()).sum();
            want -= (px[l as usize].exp() / z).ln();
        }
        want /= 4.0;
        assert!((seg_loss(&logits, &labels).unwrap() - want).abs() < 1e-6);
    }

    #[test]
    fn vector_loss_branches() {
        let gt = FeatureMap::from_vec(1, 1, 2, vec![0.6, 0.8]).unwrap();
        assert_eq!(vector_loss(&gt, &gt, &[true]).unwrap(), 0.0);
        let off = FeatureMap::from_vec(1, 1, 2, vec![1.1, 0.8]).unwrap();
        let l = vector_loss(&off, &gt, &[true]).unwrap();
        assert!((l - 0.5 * 0.5 * 0.5 / 2.0).abs() < 1e-12);
        let far = FeatureMap::from_vec(1, 1, 2, vec![3.6, 0.8]).unwrap();
        let l = vector_loss(&far, &gt, &[true]).unwrap();
        assert!((l - 2.5 / 2.0).abs() < 1e-12);
        assert_eq!(vector_loss(&far, &gt, &[false]).unwrap(), 0.0);
    }

    #[test]
    fn mask_requires_match_and_foreground() {
        assert_eq!(supervision_mask(&[0, 1, 2, 2], &[0, 1, 1, 2]), vec![false, true, false, true]);
    }

    #[test]
    fn proxy_voting_cases() {
        let mut gt = BTreeMap::new();
        gt.insert(1, kps(&[(5.0, 1.0)]));
        let pred = FeatureMap::from_vec(1, 1, 2, vec![1.0, 0.0]).unwrap();
        let l = proxy_voting_loss(&pred, &gt, &[1], &[true]).unwrap();
        assert!((l - 0.5).abs() < 1e-12);

        let aimed = FeatureMap::from_vec(1, 1, 2, vec![5.0, 1.0]).unwrap();
        assert!(proxy_voting_loss(&aimed, &gt, &[1], &[true]).unwrap() < 1e-15);

        let mut shifted = BTreeMap::new();
        shifted.insert(1, kps(&[(12.0, 1.0)]));
        let a = proxy_voting_loss(&pred, &gt, &[1], &[true]).unwrap();
        let b = proxy_voting_loss(&pred, &shifted, &[1], &[true]).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn keypoint_loss_cases() {
        let truth: Vec<_> = (0..9).map(|i| Vector2::new(i as f64, 2.0 * i as f64)).collect();
        let mut gt = BTreeMap::new();
        gt.insert(1, truth.clone());
        let mut pred = gt.clone();
        assert_eq!(keypoint_loss(&pred, &gt).unwrap(), 0.0);
        pred.insert(1, truth.iter().map(|p| p + Vector2::new(0.0, 1.0)).collect());
        assert!((keypoint_loss(&pred, &gt).unwrap() - 0.5).abs() < 1e-12);
        pred.insert(1, truth.iter().map(|p| p + Vector2::new(4.0, 0.0)).collect());
        assert!((keypoint_loss(&pred, &gt).unwrap() - 3.5).abs() < 1e-12);
        pred.insert(2, truth.clone());
        assert!(matches!(keypoint_loss(&pred, &gt), Err(Error::Validation(_))));
    }

    #[test]
    fn weighted_sum() {
        let ones = LossParts {
            segmentation: 1.0,
            vector: 1.0,
            proxy_voting: 1.0,
            keypoint: 1.0,
            confidence: None,
        };
        assert!((total_loss(&ones, &LossWeights::default()).unwrap() - 1.522).abs() < 1e-12);
        let heavier = LossWeights {
            keypoint: 0.01,
            ..LossWeights::default()
        };
        assert!((total_loss(&ones, &heavier).unwrap() - 1.525).abs() < 1e-12);
        assert_eq!(total_loss(&LossParts::default(), &LossWeights::default()).unwrap(), 0.0);
        let bad = LossParts {
            proxy_voting: f64::NAN,
            ..ones
        };
        match total_loss(&bad, &LossWeights::default()) {
            Err(Error::Numeric { part }) => assert_eq!(part, "proxy_voting"),
            other => panic!("unexpected {other:?}"),
        }
    }
}
