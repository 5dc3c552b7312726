//! Dense tensors, the `CPT1` binary format and the scene text format.
//!
//! `CPT1` layout, all integers and floats little-endian:
//!
//! ```text
//! "CPT1" | rank: u8 | dims: rank × u32 | values: Π dims × f32 (row-major)
//! ```
//!
//! Scene files are line oriented. Blank lines and lines starting with `#`
//! are ignored.
//!
//! ```text
//! image <H> <W>
//! camera <fx> <fy> <cx> <cy>
//! object <class_id> model <path> R <9 floats row-major> t <3 floats meters> [symmetric]
//! ```

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::io::{Read, Write};

use nalgebra::{Matrix3, Vector3};

use crate::error::{Error, Result};
use crate::pose_geometry::{CameraIntrinsics, Pose};

pub const MAGIC: &[u8; 4] = b"CPT1";
pub const MAX_RANK: usize = 4;

/// Row-major `f32` tensor of rank at most 4.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    dims: Vec<usize>,
    values: Vec<f32>,
}

impl Tensor {
    pub fn new(dims: Vec<usize>, values: Vec<f32>) -> Result<Self> {
        if dims.len() > MAX_RANK {
            return Err(Error::Shape(format!(
                "rank {} exceeds the maximum of {MAX_RANK}",
                dims.len()
            )));
        }
        let count: usize = dims.iter().product();
        if count != values.len() {
            return Err(Error::Shape(format!(
                "dims {dims:?} need {count} values, got {}",
                values.len()
            )));
        }
        Ok(Self { dims, values })
    }

    pub fn zeros(dims: Vec<usize>) -> Result<Self> {
        let count = dims.iter().product();
        Self::new(dims, vec![0.0; count])
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn rank(&self) -> usize {
        self.dims.len()
    }

    /// Byte length of the encoded `CPT1` form.
    pub fn encoded_len(&self) -> usize {
        MAGIC.len() + 1 + 4 * self.dims.len() + 4 * self.values.len()
    }
}

struct CountingWriter<W> {
    inner: W,
    written: usize,
}

impl<W: Write> CountingWriter<W> {
    fn put(&mut self, bytes: &[u8]) -> Result<()> {
        let mut rest = bytes;
        while !rest.is_empty() {
            match self.inner.write(rest) {
                Ok(0) => {
                    return Err(Error::Write {
                        written: self.written,
                        source: std::io::ErrorKind::WriteZero.into(),
                    })
                }
                Ok(n) => {
                    self.written += n;
                    rest = &rest[n..];
                }
                Err(e) if e.kind() == std::io::ErrorKind::Interrupted => {}
                Err(source) => {
                    return Err(Error::Write {
                        written: self.written,
                        source,
                    })
                }
            }
        }
        Ok(())
    }
}

/// Encodes `t` as `CPT1` and returns the number of bytes written.
pub fn write_tensor<W: Write>(t: &Tensor, sink: W) -> Result<usize> {
    if t.rank() > MAX_RANK {
        return Err(Error::Format(format!("rank {} not encodable", t.rank())));
    }
    let mut out = CountingWriter {
        inner: sink,
        written: 0,
    };
    let mut header = Vec::with_capacity(5 + 4 * t.rank());
    header.extend_from_slice(MAGIC);
    header.push(t.rank() as u8);
    for &d in &t.dims {
        let d = u32::try_from(d).map_err(|_| Error::Format(format!("extent {d} exceeds u32")))?;
        header.extend_from_slice(&d.to_le_bytes());
    }
    out.put(&header)?;
    let mut payload = Vec::with_capacity(4 * t.values.len());
    for v in &t.values {
        payload.extend_from_slice(&v.to_le_bytes());
    }
    out.put(&payload)?;
    out.inner.flush().map_err(|source| Error::Write {
        written: out.written,
        source,
    })?;
    Ok(out.written)
}

/// Whether [`read_tensor`] rejects NaN and infinities.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Validation {
    #[default]
    Finite,
    None,
}

fn read_full<R: Read>(source: &mut R, buf: &mut [u8]) -> Result<usize> {
    let mut filled = 0;
    while filled < buf.len() {
        match source.read(&mut buf[filled..]) {
            Ok(0) => break,
            Ok(n) => filled += n,
            Err(e) if e.kind() == std::io::ErrorKind::Interrupted => {}
            Err(e) => return Err(e.into()),
        }
    }
    Ok(filled)
}

/// Decodes one `CPT1` tensor from `source`.
pub fn read_tensor<R: Read>(mut source: R, validation: Validation) -> Result<Tensor> {
    let mut head = [0u8; 5];
    let got = read_full(&mut source, &mut head)?;
    if got < 4 || &head[..4] != MAGIC {
        return Err(Error::Format("missing CPT1 magic".into()));
    }
    if got < 5 {
        return Err(Error::Length {
            expected: 5,
            actual: got,
        });
    }
    let rank = head[4] as usize;
    if rank > MAX_RANK {
        return Err(Error::Format(format!("rank {rank} exceeds {MAX_RANK}")));
    }
    let mut dim_bytes = vec![0u8; 4 * rank];
    let got = read_full(&mut source, &mut dim_bytes)?;
    if got < dim_bytes.len() {
        return Err(Error::Length {
            expected: 5 + dim_bytes.len(),
            actual: 5 + got,
        });
    }
    let dims: Vec<usize> = dim_bytes
        .chunks_exact(4)
        .map(|c| u32::from_le_bytes([c[0], c[1], c[2], c[3]]) as usize)
        .collect();
    let count = dims
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| Error::Format("element count overflows".into()))?;
    let mut payload = vec![0u8; 4 * count];
    let got = read_full(&mut source, &mut payload)?;
    if got < payload.len() {
        let header = 5 + 4 * rank;
        return Err(Error::Length {
            expected: header + payload.len(),
            actual: header + got,
        });
    }
    let values: Vec<f32> = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    if validation == Validation::Finite {
        if let Some(index) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite { index });
        }
    }
    Tensor::new(dims, values)
}

/// Dense `H×W×C` map of `f64` values, channel index fastest.
///
/// This is the working type of every kernel; [`Tensor`] is only used at the
/// I/O boundary.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<f64>,
}

impl FeatureMap {
    pub fn zeros(height: usize, width: usize, channels: usize) -> Self {
        Self {
            height,
            width,
            channels,
            data: vec![0.0; height * width * channels],
        }
    }

    pub fn from_vec(height: usize, width: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != height * width * channels {
            return Err(Error::Shape(format!(
                "{height}x{width}x{channels} map needs {} values, got {}",
                height * width * channels,
                data.len()
            )));
        }
        Ok(Self {
            height,
            width,
            channels,
            data,
        })
    }

    pub fn from_fn(
        height: usize,
        width: usize,
        channels: usize,
        mut f: impl FnMut(usize, usize, usize) -> f64,
    ) -> Self {
        let mut data = Vec::with_capacity(height * width * channels);
        for y in 0..height {
            for x in 0..width {
                for c in 0..channels {
                    data.push(f(y, x, c));
                }
            }
        }
        Self {
            height,
            width,
            channels,
            data,
        }
    }

    /// Interprets a rank-3 tensor as `H×W×C`.
    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        match *t.dims() {
            [h, w, c] => Self::from_vec(h, w, c, t.values().iter().map(|&v| v as f64).collect()),
            _ => Err(Error::Shape(format!(
                "expected a rank-3 H×W×C tensor, got dims {:?}",
                t.dims()
            ))),
        }
    }

    /// Narrows to `f32` for the `CPT1` boundary.
    pub fn to_tensor(&self) -> Tensor {
        Tensor {
            dims: vec![self.height, self.width, self.channels],
            values: self.data.iter().map(|&v| v as f32).collect(),
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn pixels(&self) -> usize {
        self.height * self.width
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        (self.height, self.width, self.channels)
    }

    #[inline]
    pub fn index(&self, y: usize, x: usize, c: usize) -> usize {
        debug_assert!(y < self.height && x < self.width && c < self.channels);
        (y * self.width + x) * self.channels + c
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize, c: usize) -> f64 {
        self.data[self.index(y, x, c)]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, c: usize, v: f64) {
        let i = self.index(y, x, c);
        self.data[i] = v;
    }

    /// All channels of one pixel.
    #[inline]
    pub fn pixel(&self, y: usize, x: usize) -> &[f64] {
        let start = (y * self.width + x) * self.channels;
        &self.data[start..start + self.channels]
    }

    #[inline]
    pub fn pixel_mut(&mut self, y: usize, x: usize) -> &mut [f64] {
        let start = (y * self.width + x) * self.channels;
        &mut self.data[start..start + self.channels]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn same_dims(&self, other: &FeatureMap) -> bool {
        self.dims() == other.dims()
    }

    /// Copies channels `start..start + count` into a new map.
    pub fn select_channels(&self, start: usize, count: usize) -> Result<FeatureMap> {
        if start + count > self.channels {
            return Err(Error::Shape(format!(
                "channels {start}..{} out of range for {} channels",
                start + count,
                self.channels
            )));
        }
        let mut data = Vec::with_capacity(self.pixels() * count);
        for px in self.data.chunks_exact(self.channels) {
            data.extend_from_slice(&px[start..start + count]);
        }
        FeatureMap::from_vec(self.height, self.width, count, data)
    }

    /// Concatenates maps along the channel axis.
    pub fn concat_channels(parts: &[&FeatureMap]) -> Result<FeatureMap> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Shape("nothing to concatenate".into()))?;
        let (h, w) = (first.height, first.width);
        if parts.iter().any(|p| p.height != h || p.width != w) {
            return Err(Error::Shape("spatial extents differ".into()));
        }
        let channels: usize = parts.iter().map(|p| p.channels).sum();
        let mut data = Vec::with_capacity(h * w * channels);
        for i in 0..h * w {
            for p in parts {
                data.extend_from_slice(&p.data[i * p.channels..(i + 1) * p.channels]);
            }
        }
        FeatureMap::from_vec(h, w, channels, data)
    }
}

/// One object placement in a scene file.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneObject {
    pub class_id: u32,
    pub pose: Pose,
    /// Free-form model reference; resolved by the caller (see
    /// [`crate::synthgen::PrimitiveShape::parse_ref`]).
    pub model_ref: String,
    pub symmetric: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SceneDescription {
    pub objects: Vec<SceneObject>,
    pub intrinsics: CameraIntrinsics,
    /// `(H, W)` in pixels.
    pub image_size: (usize, usize),
}

impl SceneDescription {
    pub fn validate(&self) -> Result<()> {
        let (h, w) = self.image_size;
        if h == 0 || w == 0 {
            return Err(Error::Validation(format!("image size {h}x{w} is empty")));
        }
        self.intrinsics.validate()?;
        let mut seen = BTreeSet::new();
        for obj in &self.objects {
            if obj.class_id == 0 {
                return Err(Error::Validation("class_id 0 is reserved for background".into()));
            }
            if !seen.insert(obj.class_id) {
                return Err(Error::Validation(format!(
                    "class_id {} appears more than once",
                    obj.class_id
                )));
            }
            obj.pose.validate().map_err(|e| {
                Error::Validation(format!("object of class {}: {e}", obj.class_id))
            })?;
        }
        Ok(())
    }
}

struct Tokens<'a> {
    items: std::iter::Peekable<std::str::SplitWhitespace<'a>>,
    line: usize,
}

impl<'a> Tokens<'a> {
    fn schema(&self, key: &str, message: impl Into<String>) -> Error {
        Error::Schema {
            key: key.to_string(),
            line: self.line,
            message: message.into(),
        }
    }

    fn keyword(&mut self, key: &str) -> Result<()> {
        match self.items.next() {
            Some(tok) if tok == key => Ok(()),
            Some(tok) => Err(self.schema(key, format!("expected `{key}`, found `{tok}`"))),
            None => Err(self.schema(key, "missing")),
        }
    }

    fn value<T: std::str::FromStr>(&mut self, key: &str) -> Result<T> {
        let tok = self
            .items
            .next()
            .ok_or_else(|| self.schema(key, "missing value"))?;
        tok.parse()
            .map_err(|_| self.schema(key, format!("cannot parse `{tok}`")))
    }

    fn floats<const N: usize>(&mut self, key: &str) -> Result<[f64; N]> {
        let mut out = [0.0; N];
        for slot in out.iter_mut() {
            let v: f64 = self.value(key)?;
            if !v.is_finite() {
                return Err(self.schema(key, "non-finite value"));
            }
            *slot = v;
        }
        Ok(out)
    }
}

/// Parses and validates a scene file.
pub fn read_scene(source: &str) -> Result<SceneDescription> {
    let mut objects = Vec::new();
    let mut camera = None;
    let mut image = None;
    for (i, raw) in source.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let mut tok = Tokens {
            items: line.split_whitespace().peekable(),
            line: i + 1,
        };
        let head = tok.items.next().unwrap_or_default();
        match head {
            "image" => {
                let h: usize = tok.value("image")?;
                let w: usize = tok.value("image")?;
                image = Some((h, w));
            }
            "camera" => {
                let [fx, fy, cx, cy] = tok.floats::<4>("camera")?;
                camera = Some(CameraIntrinsics { fx, fy, cx, cy });
            }
            "object" => {
                let class_id: u32 = tok.value("object")?;
                tok.keyword("model")?;
                let model_ref: String = tok.value("model")?;
                tok.keyword("R")?;
                let r = tok.floats::<9>("R")?;
                tok.keyword("t")?;
                let t = tok.floats::<3>("t")?;
                let symmetric = match tok.items.next() {
                    None => false,
                    Some("symmetric") => true,
                    Some(other) => {
                        return Err(tok.schema("symmetric", format!("unexpected token `{other}`")))
                    }
                };
                objects.push(SceneObject {
                    class_id,
                    pose: Pose {
                        rotation: Matrix3::from_row_slice(&r),
                        translation: Vector3::from(t),
                    },
                    model_ref,
                    symmetric,
                });
            }
            other => {
                return Err(Error::Schema {
                    key: other.to_string(),
                    line: i + 1,
                    message: "unknown record".into(),
                })
            }
        }
        if let Some(extra) = tok.items.next() {
            return Err(tok.schema(head, format!("trailing token `{extra}`")));
        }
    }
    let missing = |key: &str| Error::Schema {
        key: key.to_string(),
        line: 0,
        message: "required record not found".into(),
    };
    let scene = SceneDescription {
        objects,
        intrinsics: camera.ok_or_else(|| missing("camera"))?,
        image_size: image.ok_or_else(|| missing("image"))?,
    };
    scene.validate()?;
    Ok(scene)
}

/// Renders a scene in the format accepted by [`read_scene`].
///
/// Floats are printed with the shortest representation that round-trips.
pub fn write_scene(scene: &SceneDescription) -> String {
    let mut out = String::new();
    let (h, w) = scene.image_size;
    let k = &scene.intrinsics;
    writeln!(out, "image {h} {w}").unwrap();
    writeln!(out, "camera {:?} {:?} {:?} {:?}", k.fx, k.fy, k.cx, k.cy).unwrap();
    for obj in &scene.objects {
        write!(out, "object {} model {} R", obj.class_id, obj.model_ref).unwrap();
        for v in obj.pose.rotation_row_major() {
            write!(out, " {v:?}").unwrap();
        }
        out.push_str(" t");
        for v in obj.pose.translation.iter() {
            write!(out, " {v:?}").unwrap();
        }
        if obj.symmetric {
            out.push_str(" symmetric");
        }
        out.push('\n');
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_value_is_thirteen_bytes() {
        let t = Tensor::new(vec![1], vec![0.0]).unwrap();
        let mut buf = Vec::new();
        assert_eq!(write_tensor(&t, &mut buf).unwrap(), 13);
        assert_eq!(buf.len(), 13);
        assert_eq!(&buf[..4], b"CPT1");
        assert_eq!(buf[4], 1);
    }

    #[test]
    fn row_major_payload_order() {
        let t = Tensor::new(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let mut buf = Vec::new();
        write_tensor(&t, &mut buf).unwrap();
        assert_eq!(buf.len(), 4 + 1 + 8 + 16);
        assert_eq!(&buf[5..9], &2u32.to_le_bytes());
        let payload: Vec<f32> = buf[13..]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        assert_eq!(payload, vec![1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn read_inverts_write() {
        let t = Tensor::new(vec![3], vec![1.0, 2.0, 3.0]).unwrap();
        let mut buf = Vec::new();
        write_tensor(&t, &mut buf).unwrap();
        let back = read_tensor(&buf[..], Validation::Finite).unwrap();
        assert_eq!(back.dims(), &[3]);
        assert_eq!(back, t);
    }

    #[test]
    fn bad_magic_is_format_error() {
        let err = read_tensor(&b"XXXX\x01\x01\x00\x00\x00"[..], Validation::Finite).unwrap_err();
        assert!(matches!(err, Error::Format(_)), "{err}");
    }

    #[test]
    fn short_payload_is_length_error() {
        let t = Tensor::new(vec![3], vec![1.0, 2.0, 3.0]).unwrap();
        let mut buf = Vec::new();
        write_tensor(&t, &mut buf).unwrap();
        buf.truncate(buf.len() - 4);
        let err = read_tensor(&buf[..], Validation::Finite).unwrap_err();
        assert!(matches!(err, Error::Length { expected: 21, actual: 17 }), "{err}");
    }

    #[test]
    fn non_finite_rejected_only_when_validating() {
        let t = Tensor::new(vec![2], vec![1.0, f32::NAN]).unwrap();
        let mut buf = Vec::new();
        write_tensor(&t, &mut buf).unwrap();
        let err = read_tensor(&buf[..], Validation::Finite).unwrap_err();
        assert!(matches!(err, Error::NonFinite { index: 1 }));
        let back = read_tensor(&buf[..], Validation::None).unwrap();
        assert!(back.values()[1].is_nan());
    }

    #[test]
    fn rank_five_rejected() {
        assert!(Tensor::new(vec![1; 5], vec![0.0]).is_err());
    }

    struct FailAfter(usize);

    impl Write for FailAfter {
        fn write(&mut self, buf: &[u8]) -> std::io::Result<usize> {
            if self.0 == 0 {
                return Err(std::io::Error::other("disk full"));
            }
            let n = buf.len().min(self.0);
            self.0 -= n;
            Ok(n)
        }
        fn flush(&mut self) -> std::io::Result<()> {
            Ok(())
        }
    }

    #[test]
    fn sink_failure_reports_bytes_written() {
        let t = Tensor::new(vec![4], vec![0.0; 4]).unwrap();
        let err = write_tensor(&t, FailAfter(7)).unwrap_err();
        assert!(matches!(err, Error::Write { written: 7, .. }), "{err}");
    }

    const ONE_OBJECT: &str = "\
image 480 640
camera 572.4 573.5 325.3 242.0
object 1 model sphere:0.05 R 1 0 0 0 1 0 0 0 1 t 0 0 0.8 symmetric
";

    #[test]
    fn minimal_scene() {
        let scene = read_scene(ONE_OBJECT).unwrap();
        assert_eq!(scene.objects.len(), 1);
        assert_eq!(scene.image_size, (480, 640));
        assert!(scene.objects[0].symmetric);
        assert_eq!(scene.objects[0].model_ref, "sphere:0.05");
        let again = read_scene(&write_scene(&scene)).unwrap();
        assert_eq!(again, scene);
    }

    #[test]
    fn duplicate_class_rejected() {
        let text = "image 4 4\ncamera 1 1 2 2\n\
            object 3 model a.ply R 1 0 0 0 1 0 0 0 1 t 0 0 1\n\
            object 3 model b.ply R 1 0 0 0 1 0 0 0 1 t 0 0 2\n";
        assert!(matches!(read_scene(text), Err(Error::Validation(_))));
    }

    #[test]
    fn reflection_rejected() {
        let text = "image 4 4\ncamera 1 1 2 2\n\
            object 1 model a.ply R -1 0 0 0 1 0 0 0 1 t 0 0 1\n";
        assert!(matches!(read_scene(text), Err(Error::Validation(_))));
    }

    #[test]
    fn missing_key_is_named() {
        let text = "image 4 4\nobject 1 model a.ply R 1 0 0 0 1 0 0 0 1 t 0 0 1\n";
        match read_scene(text) {
            Err(Error::Schema { key, .. }) => assert_eq!(key, "camera"),
            other => panic!("unexpected {other:?}"),
        }
        let text = "image 4 4\ncamera 1 1 2 2\nobject 1 model a.ply R 1 0 0 0 1 0 0 0 1\n";
        match read_scene(text) {
            Err(Error::Schema { key, line, .. }) => {
                assert_eq!(key, "t");
                assert_eq!(line, 3);
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn channel_helpers() {
        let a = FeatureMap::from_fn(2, 3, 2, |y, x, c| (y * 100 + x * 10 + c) as f64);
        let b = a.select_channels(1, 1).unwrap();
        assert_eq!(b.get(1, 2, 0), 121.0);
        let ab = FeatureMap::concat_channels(&[&a, &b]).unwrap();
        assert_eq!(ab.channels(), 3);
        assert_eq!(ab.pixel(1, 2), &[120.0, 121.0, 121.0]);
    }
}
