//! Segmentation-guided convolution and upsampling.
//!
//! Both operators only mix features of pixels that share the argmax class of
//! the output location. Pixel coordinates are `(y, x)` = (row, column)
//! throughout; out-of-bounds neighbors contribute nothing.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::semantic_norm::SoftSegmentation;
use crate::tensor_io::FeatureMap;

/// Default number of downsampling steps in a [`SegPyramid`].
pub const DEFAULT_PYRAMID_STEPS: usize = 3;

const MASK_FLOOR: f64 = 1e-8;

/// Nearest-neighbor segmentation pyramid; level 0 is full resolution.
#[derive(Debug, Clone, PartialEq)]
pub struct SegPyramid {
    levels: Vec<SoftSegmentation>,
}

impl SegPyramid {
    pub fn levels(&self) -> &[SoftSegmentation] {
        &self.levels
    }

    pub fn level(&self, k: usize) -> Option<&SoftSegmentation> {
        self.levels.get(k)
    }

    pub fn len(&self) -> usize {
        self.levels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.levels.is_empty()
    }
}

/// Downsamples `n` times, keeping the top-left pixel of every 2×2 block.
pub fn build_pyramid(seg: &SoftSegmentation, n: usize) -> Result<SegPyramid> {
    if n == 0 {
        return Err(Error::Parameter("pyramid needs at least one step".into()));
    }
    let min = 1usize << n.min(usize::BITS as usize - 1);
    if seg.height() < min || seg.width() < min {
        return Err(Error::Shape(format!(
            "{}x{} segmentation too small for {n} downsampling steps",
            seg.height(),
            seg.width()
        )));
    }
    let mut levels = vec![seg.clone()];
    for _ in 0..n {
        let prev = levels.last().unwrap().probs();
        let h = prev.height().div_ceil(2);
        let w = prev.width().div_ceil(2);
        let next = FeatureMap::from_fn(h, w, prev.channels(), |y, x, c| prev.get(2 * y, 2 * x, c));
        levels.push(SoftSegmentation::new_unchecked(next));
    }
    Ok(SegPyramid { levels })
}

/// 3×3 guidance mask around one output location, `m[dy + 1][dx + 1]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GuidanceMaskPatch {
    pub m: [[f64; 3]; 3],
}

impl GuidanceMaskPatch {
    pub fn sum(&self) -> f64 {
        self.m.iter().flatten().sum()
    }

    pub fn at(&self, dy: isize, dx: isize) -> f64 {
        self.m[(dy + 1) as usize][(dx + 1) as usize]
    }
}

/// Argmax class and its probability for every pixel, cached once per call.
struct ClassGrid {
    width: usize,
    height: usize,
    class: Vec<usize>,
    sbar: Vec<f64>,
}

impl ClassGrid {
    fn new(seg: &SoftSegmentation) -> Self {
        let (h, w) = (seg.height(), seg.width());
        let mut class = Vec::with_capacity(h * w);
        let mut sbar = Vec::with_capacity(h * w);
        for y in 0..h {
            for x in 0..w {
                let c = seg.argmax(y, x);
                class.push(c);
                sbar.push(seg.probs().get(y, x, c));
            }
        }
        Self {
            width: w,
            height: h,
            class,
            sbar,
        }
    }

    fn neighbor(&self, y: usize, x: usize, dy: isize, dx: isize) -> Option<usize> {
        let ny = y as isize + dy;
        let nx = x as isize + dx;
        if ny < 0 || nx < 0 || ny >= self.height as isize || nx >= self.width as isize {
            return None;
        }
        Some(ny as usize * self.width + nx as usize)
    }

    fn patch(&self, y: usize, x: usize) -> GuidanceMaskPatch {
        let centre = self.class[y * self.width + x];
        let mut m = [[0.0; 3]; 3];
        for dy in -1..=1isize {
            for dx in -1..=1isize {
                if let Some(q) = self.neighbor(y, x, dy, dx) {
                    if self.class[q] == centre {
                        m[(dy + 1) as usize][(dx + 1) as usize] = self.sbar[q];
                    }
                }
            }
        }
        GuidanceMaskPatch { m }
    }
}

/// Guidance mask at `(y, x)`: a neighbor keeps its `s̄` when its argmax class
/// equals the centre's, and is 0 otherwise.
pub fn guidance_mask(seg: &SoftSegmentation, y: usize, x: usize) -> Result<GuidanceMaskPatch> {
    if y >= seg.height() || x >= seg.width() {
        return Err(Error::Shape(format!(
            "pixel ({y}, {x}) outside {}x{}",
            seg.height(),
            seg.width()
        )));
    }
    Ok(ClassGrid::new(seg).patch(y, x))
}

/// 3×3 kernel, laid out `[ky][kx][c_in][c_out]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvWeights {
    c_in: usize,
    c_out: usize,
    values: Vec<f64>,
}

impl ConvWeights {
    pub fn new(c_in: usize, c_out: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != 9 * c_in * c_out {
            return Err(Error::Shape(format!(
                "3x3x{c_in}x{c_out} kernel needs {} values, got {}",
                9 * c_in * c_out,
                values.len()
            )));
        }
        Ok(Self { c_in, c_out, values })
    }

    pub fn zeros(c_in: usize, c_out: usize) -> Self {
        Self {
            c_in,
            c_out,
            values: vec![0.0; 9 * c_in * c_out],
        }
    }

    pub fn c_in(&self) -> usize {
        self.c_in
    }

    pub fn c_out(&self) -> usize {
        self.c_out
    }

    #[inline]
    pub fn index(&self, ky: usize, kx: usize, ci: usize, co: usize) -> usize {
        ((ky * 3 + kx) * self.c_in + ci) * self.c_out + co
    }

    #[inline]
    pub fn get(&self, ky: usize, kx: usize, ci: usize, co: usize) -> f64 {
        self.values[self.index(ky, kx, ci, co)]
    }

    pub fn set(&mut self, ky: usize, kx: usize, ci: usize, co: usize, v: f64) {
        let i = self.index(ky, kx, ci, co);
        self.values[i] = v;
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }
}

fn check_conv_shapes(x: &FeatureMap, weights: &ConvWeights, seg: &SoftSegmentation) -> Result<()> {
    if x.height() != seg.height() || x.width() != seg.width() {
        return Err(Error::Shape(format!(
            "features {}x{} vs segmentation {}x{}",
            x.height(),
            x.width(),
            seg.height(),
            seg.width()
        )));
    }
    if x.channels() != weights.c_in {
        return Err(Error::Shape(format!(
            "features have {} channels, kernel expects {}",
            x.channels(),
            weights.c_in
        )));
    }
    Ok(())
}

/// `x' = Wᵀ(X ⊙ M)·9/sum(M)` at every location.
pub fn object_aware_conv(
    x: &FeatureMap,
    weights: &ConvWeights,
    seg: &SoftSegmentation,
) -> Result<FeatureMap> {
    check_conv_shapes(x, weights, seg)?;
    let grid = ClassGrid::new(seg);
    let (h, w, cin) = x.dims();
    let cout = weights.c_out;
    let rows: Vec<Vec<f64>> = (0..h)
        .into_par_iter()
        .map(|y| {
            let mut row = vec![0.0; w * cout];
            for xx in 0..w {
                let patch = grid.patch(y, xx);
                let total = patch.sum();
                if total < MASK_FLOOR {
                    continue;
                }
                let out = &mut row[xx * cout..(xx + 1) * cout];
                for ky in 0..3 {
                    for kx in 0..3 {
                        let m = patch.m[ky][kx];
                        // Masked taps are skipped outright so that foreign
                        // pixels cannot even flip the sign of a zero.
                        if m == 0.0 {
                            continue;
                        }
                        let ny = (y as isize + ky as isize - 1) as usize;
                        let nx = (xx as isize + kx as isize - 1) as usize;
                        let src = x.pixel(ny, nx);
                        for (ci, &v) in src.iter().enumerate().take(cin) {
                            let xm = v * m;
                            let base = weights.index(ky, kx, ci, 0);
                            for (o, wv) in out.iter_mut().zip(&weights.values[base..base + cout]) {
                                *o += wv * xm;
                            }
                        }
                    }
                }
                let scale = 9.0 / total;
                for o in out.iter_mut() {
                    *o *= scale;
                }
            }
            row
        })
        .collect();
    FeatureMap::from_vec(h, w, cout, rows.concat())
}

/// Cotangents of [`object_aware_conv`].
///
/// `seg` carries the gradient through the retained `s̄` magnitudes; it lands
/// on each pixel's argmax channel and class membership is held constant.
#[derive(Debug, Clone)]
pub struct ConvCotangents {
    pub x: FeatureMap,
    pub weights: ConvWeights,
    pub seg: FeatureMap,
}

pub fn object_aware_conv_vjp(
    x: &FeatureMap,
    weights: &ConvWeights,
    seg: &SoftSegmentation,
    upstream: &FeatureMap,
) -> Result<ConvCotangents> {
    check_conv_shapes(x, weights, seg)?;
    let (h, w, cin) = x.dims();
    let cout = weights.c_out;
    if upstream.dims() != (h, w, cout) {
        return Err(Error::Shape(format!(
            "upstream {:?} does not match output {:?}",
            upstream.dims(),
            (h, w, cout)
        )));
    }
    let grid = ClassGrid::new(seg);
    let mut dx = FeatureMap::zeros(h, w, cin);
    let mut dw = ConvWeights::zeros(cin, cout);
    let mut dsbar = vec![0.0; h * w];
    let mut acc = vec![0.0; cout];
    for y in 0..h {
        for xx in 0..w {
            let patch = grid.patch(y, xx);
            let total = patch.sum();
            if total < MASK_FLOOR {
                continue;
            }
            let scale = 9.0 / total;
            let g = upstream.pixel(y, xx);
            if g.iter().all(|&v| v == 0.0) {
                continue;
            }
            // Forward pre-activation, needed for the d/dsum(M) term.
            acc.iter_mut().for_each(|a| *a = 0.0);
            for ky in 0..3 {
                for kx in 0..3 {
                    let m = patch.m[ky][kx];
                    if m == 0.0 {
                        continue;
                    }
                    let ny = (y as isize + ky as isize - 1) as usize;
                    let nx = (xx as isize + kx as isize - 1) as usize;
                    for ci in 0..cin {
                        let v = x.get(ny, nx, ci) * m;
                        for co in 0..cout {
                            acc[co] += weights.get(ky, kx, ci, co) * v;
                        }
                    }
                }
            }
            let g_dot_out: f64 = (0..cout).map(|co| g[co] * scale * acc[co]).sum();
            for ky in 0..3 {
                for kx in 0..3 {
                    let m = patch.m[ky][kx];
                    if m == 0.0 {
                        continue;
                    }
                    let ny = (y as isize + ky as isize - 1) as usize;
                    let nx = (xx as isize + kx as isize - 1) as usize;
                    let mut dm = 0.0;
                    for ci in 0..cin {
                        let xv = x.get(ny, nx, ci);
                        let mut dxi = 0.0;
                        for co in 0..cout {
                            let da = g[co] * scale;
                            let wi = weights.index(ky, kx, ci, co);
                            dw.values[wi] += da * xv * m;
                            dxi += da * weights.values[wi];
                            dm += da * weights.values[wi] * xv;
                        }
                        let di = dx.index(ny, nx, ci);
                        dx.data_mut()[di] += dxi * m;
                    }
                    dm -= g_dot_out / total;
                    dsbar[ny * w + nx] += dm;
                }
            }
        }
    }
    let mut dseg = FeatureMap::zeros(h, w, seg.classes());
    for y in 0..h {
        for xx in 0..w {
            let i = y * w + xx;
            dseg.set(y, xx, grid.class[i], dsbar[i]);
        }
    }
    Ok(ConvCotangents {
        x: dx,
        weights: dw,
        seg: dseg,
    })
}

/// High-resolution features plus, per output pixel, the flat low-resolution
/// pixel it was copied from.
#[derive(Debug, Clone, PartialEq)]
pub struct Upsampled {
    pub map: FeatureMap,
    pub sources: Vec<usize>,
}

/// Upsamples `f_low` from pyramid level `level` to `level − 1`.
///
/// High-resolution pixel `(y, x)` looks at the low-resolution 2×2 window
/// anchored at `(⌊y/2⌋, ⌊x/2⌋)` in row-major order and copies the first
/// feature whose class matches its own, falling back to the anchor. The
/// output has the extents of level `level − 1`, which is `2h×2w` whenever
/// the finer level has even extents.
pub fn object_aware_upsample(
    f_low: &FeatureMap,
    pyr: &SegPyramid,
    level: usize,
) -> Result<Upsampled> {
    if level == 0 || level >= pyr.len() {
        return Err(Error::Shape(format!(
            "level {level} needs a coarser level and a finer level in a {}-level pyramid",
            pyr.len()
        )));
    }
    let low = ClassGrid::new(&pyr.levels[level]);
    let high = ClassGrid::new(&pyr.levels[level - 1]);
    if f_low.height() != low.height || f_low.width() != low.width {
        return Err(Error::Shape(format!(
            "features {}x{} vs level {level} segmentation {}x{}",
            f_low.height(),
            f_low.width(),
            low.height,
            low.width
        )));
    }
    let (hh, hw) = (high.height, high.width);
    let c = f_low.channels();
    let mut sources = Vec::with_capacity(hh * hw);
    let mut data = Vec::with_capacity(hh * hw * c);
    for y in 0..hh {
        for x in 0..hw {
            let want = high.class[y * hw + x];
            let (ay, ax) = (y / 2, x / 2);
            let anchor = ay * low.width + ax;
            let mut src = anchor;
            'search: for dy in 0..2 {
                for dx in 0..2 {
                    let (ly, lx) = (ay + dy, ax + dx);
                    if ly >= low.height || lx >= low.width {
                        continue;
                    }
                    let q = ly * low.width + lx;
                    if low.class[q] == want {
                        src = q;
                        break 'search;
                    }
                }
            }
            sources.push(src);
            data.extend_from_slice(&f_low.data()[src * c..(src + 1) * c]);
        }
    }
    Ok(Upsampled {
        map: FeatureMap::from_vec(hh, hw, c, data)?,
        sources,
    })
}

/// Scatter-adds `upstream` onto the recorded source pixels.
pub fn object_aware_upsample_vjp(
    low_dims: (usize, usize, usize),
    sources: &[usize],
    upstream: &FeatureMap,
) -> Result<FeatureMap> {
    let (h, w, c) = low_dims;
    if upstream.pixels() != sources.len() || upstream.channels() != c {
        return Err(Error::Shape(format!(
            "upstream {:?} does not match {} recorded sources with {c} channels",
            upstream.dims(),
            sources.len()
        )));
    }
    let mut out = FeatureMap::zeros(h, w, c);
    for (i, &src) in sources.iter().enumerate() {
        if src >= h * w {
            return Err(Error::Shape(format!("source index {src} outside {h}x{w}")));
        }
        let (sy, sx) = (src / w, src % w);
        let g = &upstream.data()[i * c..(i + 1) * c];
        for (o, v) in out.pixel_mut(sy, sx).iter_mut().zip(g) {
            *o += v;
        }
    }
    Ok(out)
}
