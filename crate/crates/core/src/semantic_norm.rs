//! Class-adaptive (de)normalization driven by a soft segmentation.
//!
//! The pipeline is `temperature_softmax → guided_sample → clade_normalize`.
//! Guided sampling blends the per-class rows of a modulation table with the
//! per-pixel class probabilities, so a one-hot segmentation reproduces the
//! discrete row lookup while soft inputs keep the graph differentiable.

use crate::error::{Error, Result};
use crate::tensor_io::FeatureMap;

/// Default variance stabilizer inside the square root.
pub const DEFAULT_EPS: f64 = 1e-5;
/// Default softmax temperature.
pub const DEFAULT_TAU: f64 = 10.0;

const SUM_TOLERANCE: f64 = 1e-5;

/// Per-pixel class probabilities, `H×W×Nc`.
///
/// Class 0 is background. Kernels that need a hard class per pixel use
/// [`SoftSegmentation::argmax`], which resolves ties towards the lowest class
/// index.
#[derive(Debug, Clone, PartialEq)]
pub struct SoftSegmentation(FeatureMap);

impl SoftSegmentation {
    /// Validates that every pixel holds a probability vector.
    pub fn new(probs: FeatureMap) -> Result<Self> {
        if probs.channels() < 2 {
            return Err(Error::Shape(format!(
                "segmentation needs at least 2 classes, got {}",
                probs.channels()
            )));
        }
        for (i, px) in probs.data().chunks_exact(probs.channels()).enumerate() {
            if px.iter().any(|&p| !(0.0..=1.0).contains(&p)) {
                return Err(Error::Validation(format!(
                    "pixel {i} has a probability outside [0, 1]"
                )));
            }
            let sum: f64 = px.iter().sum();
            if (sum - 1.0).abs() > SUM_TOLERANCE {
                return Err(Error::Validation(format!(
                    "pixel {i} class vector sums to {sum}"
                )));
            }
        }
        Ok(Self(probs))
    }

    /// Wraps a map without the probability checks.
    ///
    /// Used by gradient checks, which perturb individual entries off the
    /// simplex.
    pub fn new_unchecked(probs: FeatureMap) -> Self {
        Self(probs)
    }

    /// One-hot segmentation from a row-major label map.
    pub fn from_labels(height: usize, width: usize, classes: usize, labels: &[u32]) -> Result<Self> {
        if labels.len() != height * width {
            return Err(Error::Shape(format!(
                "label map has {} entries for {height}x{width}",
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l as usize >= classes) {
            return Err(Error::Validation(format!(
                "label {bad} out of range for {classes} classes"
            )));
        }
        let map = FeatureMap::from_fn(height, width, classes, |y, x, c| {
            (labels[y * width + x] as usize == c) as u8 as f64
        });
        Self::new(map)
    }

    pub fn probs(&self) -> &FeatureMap {
        &self.0
    }

    pub fn into_probs(self) -> FeatureMap {
        self.0
    }

    pub fn height(&self) -> usize {
        self.0.height()
    }

    pub fn width(&self) -> usize {
        self.0.width()
    }

    pub fn classes(&self) -> usize {
        self.0.channels()
    }

    /// Most probable class; ties go to the lowest index.
    pub fn argmax(&self, y: usize, x: usize) -> usize {
        let px = self.0.pixel(y, x);
        let mut best = 0;
        for (l, &p) in px.iter().enumerate().skip(1) {
            if p > px[best] {
                best = l;
            }
        }
        best
    }

    /// Largest class probability at a pixel (`s̄`).
    pub fn max_prob(&self, y: usize, x: usize) -> f64 {
        self.0.get(y, x, self.argmax(y, x))
    }

    /// Row-major argmax label map.
    pub fn labels(&self) -> Vec<u32> {
        let mut out = Vec::with_capacity(self.0.pixels());
        for y in 0..self.height() {
            for x in 0..self.width() {
                out.push(self.argmax(y, x) as u32);
            }
        }
        out
    }
}

/// Per-class scale and shift rows, both `Nc×Nk`.
#[derive(Debug, Clone, PartialEq)]
pub struct ModulationTable {
    classes: usize,
    channels: usize,
    gamma: Vec<f64>,
    beta: Vec<f64>,
}

impl ModulationTable {
    pub fn new(classes: usize, channels: usize, gamma: Vec<f64>, beta: Vec<f64>) -> Result<Self> {
        let n = classes * channels;
        if gamma.len() != n || beta.len() != n {
            return Err(Error::Shape(format!(
                "{classes}x{channels} table needs {n} entries, got gamma {} beta {}",
                gamma.len(),
                beta.len()
            )));
        }
        if gamma.iter().chain(&beta).any(|v| !v.is_finite()) {
            return Err(Error::Validation("modulation table has non-finite entries".into()));
        }
        Ok(Self {
            classes,
            channels,
            gamma,
            beta,
        })
    }

    /// γ ≡ 1, β ≡ 0: plain instance normalization for every class.
    pub fn identity(classes: usize, channels: usize) -> Self {
        Self {
            classes,
            channels,
            gamma: vec![1.0; classes * channels],
            beta: vec![0.0; classes * channels],
        }
    }

    pub fn zeros(classes: usize, channels: usize) -> Self {
        Self {
            classes,
            channels,
            gamma: vec![0.0; classes * channels],
            beta: vec![0.0; classes * channels],
        }
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn gamma(&self, class: usize, channel: usize) -> f64 {
        self.gamma[class * self.channels + channel]
    }

    pub fn beta(&self, class: usize, channel: usize) -> f64 {
        self.beta[class * self.channels + channel]
    }

    pub fn gamma_values(&self) -> &[f64] {
        &self.gamma
    }

    pub fn beta_values(&self) -> &[f64] {
        &self.beta
    }

    pub fn gamma_values_mut(&mut self) -> &mut [f64] {
        &mut self.gamma
    }

    pub fn beta_values_mut(&mut self) -> &mut [f64] {
        &mut self.beta
    }

    /// Learnable reals held by the table, `2·Nc·Nk`.
    pub fn parameter_count(&self) -> usize {
        self.gamma.len() + self.beta.len()
    }

    /// Appends one class row with the given scale and shift.
    pub fn push_class(&mut self, gamma: &[f64], beta: &[f64]) -> Result<()> {
        if gamma.len() != self.channels || beta.len() != self.channels {
            return Err(Error::Shape(format!(
                "class row needs {} entries",
                self.channels
            )));
        }
        self.gamma.extend_from_slice(gamma);
        self.beta.extend_from_slice(beta);
        self.classes += 1;
        Ok(())
    }
}

/// Pairwise (cascade) summation with a fixed split order.
pub fn pairwise_sum(values: &[f64]) -> f64 {
    const BLOCK: usize = 8;
    if values.len() <= BLOCK {
        return values.iter().sum();
    }
    let mid = values.len() / 2;
    pairwise_sum(&values[..mid]) + pairwise_sum(&values[mid..])
}

/// Per-pixel `softmax(tau · raw)` over the class axis.
pub fn temperature_softmax(raw: &FeatureMap, tau: f64) -> Result<SoftSegmentation> {
    if !(tau > 0.0) || !tau.is_finite() {
        return Err(Error::Parameter(format!("temperature must be positive, got {tau}")));
    }
    if raw.channels() < 2 {
        return Err(Error::Shape("softmax needs at least 2 classes".into()));
    }
    let mut out = raw.clone();
    for px in out.data_mut().chunks_exact_mut(raw.channels()) {
        let max = px.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(tau * v));
        let mut total = 0.0;
        for v in px.iter_mut() {
            *v = (tau * *v - max).exp();
            total += *v;
        }
        for v in px.iter_mut() {
            *v /= total;
        }
    }
    Ok(SoftSegmentation(out))
}

/// Cotangent of `raw` given the cotangent of the softmax output.
pub fn temperature_softmax_vjp(
    seg: &SoftSegmentation,
    tau: f64,
    upstream: &FeatureMap,
) -> Result<FeatureMap> {
    if !seg.probs().same_dims(upstream) {
        return Err(Error::Shape("softmax cotangent dims differ".into()));
    }
    let nc = seg.classes();
    let mut out = upstream.clone();
    for (g, s) in out
        .data_mut()
        .chunks_exact_mut(nc)
        .zip(seg.probs().data().chunks_exact(nc))
    {
        let dot: f64 = g.iter().zip(s).map(|(a, b)| a * b).sum();
        for (gi, si) in g.iter_mut().zip(s) {
            *gi = tau * si * (*gi - dot);
        }
    }
    Ok(out)
}

/// Dense modulation maps `γ̄ = S·Γ` and `β̄ = S·B`.
pub fn guided_sample(
    seg: &SoftSegmentation,
    table: &ModulationTable,
) -> Result<(FeatureMap, FeatureMap)> {
    if seg.classes() != table.classes {
        return Err(Error::Shape(format!(
            "segmentation has {} classes, table has {}",
            seg.classes(),
            table.classes
        )));
    }
    let (h, w, _) = seg.probs().dims();
    let nk = table.channels;
    let mut gamma_bar = FeatureMap::zeros(h, w, nk);
    let mut beta_bar = FeatureMap::zeros(h, w, nk);
    for y in 0..h {
        for x in 0..w {
            let s = seg.probs().pixel(y, x);
            let g = gamma_bar.pixel_mut(y, x);
            for (l, &sl) in s.iter().enumerate() {
                let row = &table.gamma[l * nk..(l + 1) * nk];
                for (gk, &t) in g.iter_mut().zip(row) {
                    *gk += sl * t;
                }
            }
            let b = beta_bar.pixel_mut(y, x);
            for (l, &sl) in s.iter().enumerate() {
                let row = &table.beta[l * nk..(l + 1) * nk];
                for (bk, &t) in b.iter_mut().zip(row) {
                    *bk += sl * t;
                }
            }
        }
    }
    Ok((gamma_bar, beta_bar))
}

/// Pulls modulation-map cotangents back onto the segmentation and the table.
pub fn guided_sample_vjp(
    seg: &SoftSegmentation,
    table: &ModulationTable,
    d_gamma_bar: &FeatureMap,
    d_beta_bar: &FeatureMap,
) -> Result<(FeatureMap, ModulationTable)> {
    let (h, w, nc) = seg.probs().dims();
    let nk = table.channels;
    if nc != table.classes
        || d_gamma_bar.dims() != (h, w, nk)
        || d_beta_bar.dims() != (h, w, nk)
    {
        return Err(Error::Shape("guided sampling cotangent dims differ".into()));
    }
    let mut d_seg = FeatureMap::zeros(h, w, nc);
    let mut d_table = ModulationTable::zeros(nc, nk);
    for y in 0..h {
        for x in 0..w {
            let s = seg.probs().pixel(y, x);
            let dg = d_gamma_bar.pixel(y, x);
            let db = d_beta_bar.pixel(y, x);
            let ds = d_seg.pixel_mut(y, x);
            for l in 0..nc {
                let mut acc = 0.0;
                for k in 0..nk {
                    acc += dg[k] * table.gamma[l * nk + k] + db[k] * table.beta[l * nk + k];
                    d_table.gamma[l * nk + k] += s[l] * dg[k];
                    d_table.beta[l * nk + k] += s[l] * db[k];
                }
                ds[l] = acc;
            }
        }
    }
    Ok((d_seg, d_table))
}

/// Per-channel instance statistics `(mean, variance)` over all pixels.
pub fn channel_statistics(x: &FeatureMap) -> Result<Vec<(f64, f64)>> {
    let n = x.pixels();
    if n < 2 {
        return Err(Error::Statistics(format!(
            "instance statistics need at least 2 pixels, got {n}"
        )));
    }
    let nk = x.channels();
    let mut column = vec![0.0; n];
    let mut stats = Vec::with_capacity(nk);
    for k in 0..nk {
        for (i, slot) in column.iter_mut().enumerate() {
            *slot = x.data()[i * nk + k];
        }
        // A constant channel must normalize to exactly zero, which the
        // rounded mean does not guarantee.
        let mean = if column.iter().all(|&v| v == column[0]) {
            column[0]
        } else {
            pairwise_sum(&column) / n as f64
        };
        for v in column.iter_mut() {
            *v = (*v - mean) * (*v - mean);
        }
        let var = pairwise_sum(&column) / n as f64;
        stats.push((mean, var));
    }
    Ok(stats)
}

/// `γ̄ ⊙ (x − μ)/√(σ² + eps) + β̄` with instance statistics per channel.
pub fn clade_normalize(
    x: &FeatureMap,
    gamma_bar: &FeatureMap,
    beta_bar: &FeatureMap,
    eps: f64,
) -> Result<FeatureMap> {
    if !x.same_dims(gamma_bar) || !x.same_dims(beta_bar) {
        return Err(Error::Shape(format!(
            "feature {:?}, gamma {:?}, beta {:?} differ",
            x.dims(),
            gamma_bar.dims(),
            beta_bar.dims()
        )));
    }
    if !(eps > 0.0) {
        return Err(Error::Parameter(format!("eps must be positive, got {eps}")));
    }
    let stats = channel_statistics(x)?;
    let nk = x.channels();
    let mut out = x.clone();
    for (i, v) in out.data_mut().iter_mut().enumerate() {
        let (mean, var) = stats[i % nk];
        let xhat = (*v - mean) / (var + eps).sqrt();
        *v = gamma_bar.data()[i] * xhat + beta_bar.data()[i];
    }
    Ok(out)
}

/// Inputs of the composed `guided_sample ∘ clade_normalize` graph.
#[derive(Debug, Clone, Copy)]
pub struct CladeInputs<'a> {
    pub x: &'a FeatureMap,
    pub seg: &'a SoftSegmentation,
    pub table: &'a ModulationTable,
    pub eps: f64,
}

impl CladeInputs<'_> {
    pub fn forward(&self) -> Result<FeatureMap> {
        let (g, b) = guided_sample(self.seg, self.table)?;
        clade_normalize(self.x, &g, &b, self.eps)
    }
}

/// Cotangents of every input of the composed CLADE graph.
#[derive(Debug, Clone)]
pub struct CladeCotangents {
    pub x: FeatureMap,
    pub gamma_bar: FeatureMap,
    pub beta_bar: FeatureMap,
    pub seg: FeatureMap,
    pub table: ModulationTable,
}

/// Vector-Jacobian product of [`CladeInputs::forward`].
pub fn clade_vjp(inputs: &CladeInputs<'_>, upstream: &FeatureMap) -> Result<CladeCotangents> {
    let x = inputs.x;
    if !x.same_dims(upstream) {
        return Err(Error::Shape(format!(
            "upstream {:?} does not match features {:?}",
            upstream.dims(),
            x.dims()
        )));
    }
    let (gamma_bar, _) = guided_sample(inputs.seg, inputs.table)?;
    if !x.same_dims(&gamma_bar) {
        return Err(Error::Shape("segmentation and features differ".into()));
    }
    let stats = channel_statistics(x)?;
    let nk = x.channels();
    let n = x.pixels() as f64;

    let mut xhat = x.clone();
    for (i, v) in xhat.data_mut().iter_mut().enumerate() {
        let (mean, var) = stats[i % nk];
        *v = (*v - mean) / (var + inputs.eps).sqrt();
    }

    let d_beta_bar = upstream.clone();
    let mut d_gamma_bar = upstream.clone();
    for (d, &xh) in d_gamma_bar.data_mut().iter_mut().zip(xhat.data()) {
        *d *= xh;
    }

    // dx = (dxhat − mean(dxhat) − xhat·mean(dxhat·xhat)) / σ, per channel.
    let mut dxhat: Vec<f64> = upstream
        .data()
        .iter()
        .zip(gamma_bar.data())
        .map(|(g, gb)| g * gb)
        .collect();
    let mut mean_d = vec![0.0; nk];
    let mut mean_dx = vec![0.0; nk];
    for (i, &d) in dxhat.iter().enumerate() {
        mean_d[i % nk] += d;
        mean_dx[i % nk] += d * xhat.data()[i];
    }
    for k in 0..nk {
        mean_d[k] /= n;
        mean_dx[k] /= n;
    }
    for (i, d) in dxhat.iter_mut().enumerate() {
        let k = i % nk;
        let sigma = (stats[k].1 + inputs.eps).sqrt();
        *d = (*d - mean_d[k] - xhat.data()[i] * mean_dx[k]) / sigma;
    }
    let d_x = FeatureMap::from_vec(x.height(), x.width(), nk, dxhat)?;

    let (d_seg, d_table) = guided_sample_vjp(inputs.seg, inputs.table, &d_gamma_bar, &d_beta_bar)?;
    Ok(CladeCotangents {
        x: d_x,
        gamma_bar: d_gamma_bar,
        beta_bar: d_beta_bar,
        seg: d_seg,
        table: d_table,
    })
}
