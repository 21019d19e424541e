//! Planar RGB float images, PPM/IMGF file I/O, on-disk datasets and
//! procedural clean scenes.

use std::collections::HashSet;
use std::fmt;
use std::fs;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rng::Rng;

pub const CHANNELS: usize = 3;
const IMGF_MAGIC: &[u8] = b"IMGF1\n";

#[derive(Debug, Error)]
pub enum ImageError {
    #[error("file not found: {0}")]
    Missing(PathBuf),
    #[error("malformed header in {path}: {reason}")]
    MalformedHeader { path: PathBuf, reason: String },
    #[error("truncated payload in {path}: expected {expected} bytes, found {found}")]
    Truncated {
        path: PathBuf,
        expected: usize,
        found: usize,
    },
    #[error("{path} is not a 3-channel image ({kind})")]
    NotThreeChannel { path: PathBuf, kind: String },
    #[error("non-finite or out-of-range sample at index {index}")]
    InvalidSample { index: usize },
    #[error("data length {len} does not match {width}x{height}x3")]
    LengthMismatch {
        width: usize,
        height: usize,
        len: usize,
    },
    #[error("rectangle ({x},{y},{w},{h}) outside {width}x{height} image")]
    OutOfBounds {
        x: usize,
        y: usize,
        w: usize,
        h: usize,
        width: usize,
        height: usize,
    },
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("invalid dataset: {0}")]
    Dataset(String),
    #[error("manifest error: {0}")]
    Manifest(#[from] csv::Error),
    #[error("i/o error on {path}: {source}")]
    Io { path: PathBuf, source: io::Error },
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> ImageError + '_ {
    move |source| ImageError::Io {
        path: path.to_path_buf(),
        source,
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Channel {
    R = 0,
    G = 1,
    B = 2,
}

impl Channel {
    pub const ALL: [Channel; 3] = [Channel::R, Channel::G, Channel::B];

    pub fn index(self) -> usize {
        self as usize
    }
}

/// Axis-aligned pixel rectangle.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Rect {
    pub x: usize,
    pub y: usize,
    pub w: usize,
    pub h: usize,
}

/// Planar, channel-major, row-major RGB raster of `f32` samples.
///
/// Samples are finite. Images handed between modules are expected to be in
/// `[0, 1]`; use [`Image::clamped`] at the edges of any computation that may
/// leave that range.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    width: usize,
    height: usize,
    data: Vec<f32>,
}

impl Image {
    pub fn new(width: usize, height: usize, data: Vec<f32>) -> Result<Self, ImageError> {
        if data.len() != width * height * CHANNELS || width == 0 || height == 0 {
            return Err(ImageError::LengthMismatch {
                width,
                height,
                len: data.len(),
            });
        }
        if let Some(index) = data.iter().position(|v| !v.is_finite()) {
            return Err(ImageError::InvalidSample { index });
        }
        Ok(Self {
            width,
            height,
            data,
        })
    }

    pub fn filled(width: usize, height: usize, rgb: [f32; 3]) -> Self {
        Self::from_fn(width, height, |c, _, _| rgb[c])
    }

    /// Build an image from `f(channel, y, x)`.
    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize, usize) -> f32) -> Self {
        assert!(width > 0 && height > 0, "empty image");
        let mut data = Vec::with_capacity(width * height * CHANNELS);
        for c in 0..CHANNELS {
            for y in 0..height {
                for x in 0..width {
                    data.push(f(c, y, x));
                }
            }
        }
        Self {
            width,
            height,
            data,
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    pub fn plane_len(&self) -> usize {
        self.width * self.height
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn get(&self, c: usize, y: usize, x: usize) -> f32 {
        self.data[(c * self.height + y) * self.width + x]
    }

    pub fn plane(&self, c: usize) -> &[f32] {
        let n = self.plane_len();
        &self.data[c * n..(c + 1) * n]
    }

    pub fn map(&self, f: impl Fn(usize, f32) -> f32) -> Image {
        let n = self.plane_len();
        let data = self
            .data
            .iter()
            .enumerate()
            .map(|(i, &v)| f(i / n, v))
            .collect();
        Image {
            width: self.width,
            height: self.height,
            data,
        }
    }

    pub fn clamped(&self) -> Image {
        self.map(|_, v| v.clamp(0.0, 1.0))
    }

    pub fn min(&self) -> f32 {
        self.data.iter().copied().fold(f32::INFINITY, f32::min)
    }

    pub fn max(&self) -> f32 {
        self.data.iter().copied().fold(f32::NEG_INFINITY, f32::max)
    }

    pub fn same_dims(&self, other: &Image) -> bool {
        self.dims() == other.dims()
    }
}

/// Arithmetic mean of one channel, accumulated in `f64`.
pub fn channel_mean(img: &Image, channel: Channel) -> f64 {
    let plane = img.plane(channel.index());
    plane.iter().map(|&v| f64::from(v)).sum::<f64>() / plane.len() as f64
}

pub fn crop(img: &Image, rect: Rect) -> Result<Image, ImageError> {
    let Rect { x, y, w, h } = rect;
    if w == 0 || h == 0 || x + w > img.width || y + h > img.height {
        return Err(ImageError::OutOfBounds {
            x,
            y,
            w,
            h,
            width: img.width,
            height: img.height,
        });
    }
    Ok(Image::from_fn(w, h, |c, yy, xx| img.get(c, y + yy, x + xx)))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ImageFormat {
    Ppm,
    Imgf,
}

impl ImageFormat {
    pub fn extension(self) -> &'static str {
        match self {
            ImageFormat::Ppm => "ppm",
            ImageFormat::Imgf => "imgf",
        }
    }
}

impl FromStr for ImageFormat {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "ppm" => Ok(ImageFormat::Ppm),
            "imgf" => Ok(ImageFormat::Imgf),
            other => Err(format!("unknown image format '{other}' (expected ppm or imgf)")),
        }
    }
}

/// Quantize a sample to 8 bits: round half away from zero, then clamp.
pub fn quantize_u8(v: f32) -> u8 {
    (v * 255.0).round().clamp(0.0, 255.0) as u8
}

pub fn encode_ppm(img: &Image, w: &mut impl Write) -> io::Result<()> {
    write!(w, "P6\n{} {}\n255\n", img.width, img.height)?;
    let n = img.plane_len();
    let mut bytes = Vec::with_capacity(n * CHANNELS);
    for i in 0..n {
        for c in 0..CHANNELS {
            bytes.push(quantize_u8(img.data[c * n + i]));
        }
    }
    w.write_all(&bytes)
}

pub fn encode_imgf(img: &Image, w: &mut impl Write) -> io::Result<()> {
    w.write_all(IMGF_MAGIC)?;
    writeln!(w, "{} {}", img.width, img.height)?;
    let mut bytes = Vec::with_capacity(img.data.len() * 4);
    for v in &img.data {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    w.write_all(&bytes)
}

pub fn save_image(img: &Image, path: &Path, format: ImageFormat) -> Result<(), ImageError> {
    let file = fs::File::create(path).map_err(io_err(path))?;
    let mut w = BufWriter::new(file);
    match format {
        ImageFormat::Ppm => encode_ppm(img, &mut w),
        ImageFormat::Imgf => encode_imgf(img, &mut w),
    }
    .and_then(|_| w.flush())
    .map_err(io_err(path))
}

pub fn load_image(path: &Path) -> Result<Image, ImageError> {
    let bytes = match fs::read(path) {
        Ok(b) => b,
        Err(e) if e.kind() == io::ErrorKind::NotFound => {
            return Err(ImageError::Missing(path.to_path_buf()))
        }
        Err(e) => return Err(io_err(path)(e)),
    };
    decode_image(&bytes, path)
}

/// Decode PPM (P6, maxval 255) or IMGF bytes; `path` is only used in errors.
pub fn decode_image(bytes: &[u8], path: &Path) -> Result<Image, ImageError> {
    let malformed = |reason: &str| ImageError::MalformedHeader {
        path: path.to_path_buf(),
        reason: reason.to_string(),
    };
    if bytes.starts_with(IMGF_MAGIC) {
        let rest = &bytes[IMGF_MAGIC.len()..];
        let nl = rest
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| malformed("missing dimension line"))?;
        let line = std::str::from_utf8(&rest[..nl]).map_err(|_| malformed("non-ascii dimensions"))?;
        let mut parts = line.split(' ');
        let (width, height) = match (parts.next(), parts.next(), parts.next()) {
            (Some(w), Some(h), None) => (
                w.parse::<usize>().map_err(|_| malformed("bad width"))?,
                h.parse::<usize>().map_err(|_| malformed("bad height"))?,
            ),
            _ => return Err(malformed("expected 'width height'")),
        };
        if width == 0 || height == 0 {
            return Err(malformed("zero dimension"));
        }
        let payload = &rest[nl + 1..];
        let expected = width * height * CHANNELS * 4;
        if payload.len() < expected {
            return Err(ImageError::Truncated {
                path: path.to_path_buf(),
                expected,
                found: payload.len(),
            });
        }
        let data = payload[..expected]
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect();
        return Image::new(width, height, data);
    }

    if bytes.len() < 2 || bytes[0] != b'P' {
        return Err(malformed("unrecognized magic"));
    }
    match bytes[1] {
        b'6' => {}
        b'1' | b'2' | b'4' | b'5' => {
            return Err(ImageError::NotThreeChannel {
                path: path.to_path_buf(),
                kind: format!("P{}", bytes[1] as char),
            })
        }
        _ => return Err(malformed("unsupported netpbm variant")),
    }

    // Three whitespace-separated integers, '#' comments allowed, then exactly
    // one whitespace byte before the raster.
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for field in fields.iter_mut() {
        loop {
            match bytes.get(pos) {
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                Some(b'#') => {
                    while bytes.get(pos).is_some_and(|&b| b != b'\n') {
                        pos += 1;
                    }
                }
                Some(_) => break,
                None => return Err(malformed("header ends early")),
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(u8::is_ascii_digit) {
            pos += 1;
        }
        if start == pos {
            return Err(malformed("expected integer"));
        }
        *field = std::str::from_utf8(&bytes[start..pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| malformed("integer overflow"))?;
    }
    match bytes.get(pos) {
        Some(b) if b.is_ascii_whitespace() => pos += 1,
        _ => return Err(malformed("missing separator after maxval")),
    }
    let [width, height, maxval] = fields;
    if width == 0 || height == 0 {
        return Err(malformed("zero dimension"));
    }
    if maxval != 255 {
        return Err(malformed("maxval must be 255"));
    }
    let payload = &bytes[pos..];
    let n = width * height;
    if payload.len() < n * CHANNELS {
        return Err(ImageError::Truncated {
            path: path.to_path_buf(),
            expected: n * CHANNELS,
            found: payload.len(),
        });
    }
    let mut data = vec![0f32; n * CHANNELS];
    for i in 0..n {
        for c in 0..CHANNELS {
            data[c * n + i] = f32::from(payload[i * CHANNELS + c]) / 255.0;
        }
    }
    Image::new(width, height, data)
}

// ---------------------------------------------------------------------------
// Datasets

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Provenance {
    Synthetic,
    Aligned,
    External,
}

impl fmt::Display for Provenance {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Provenance::Synthetic => "synthetic",
            Provenance::Aligned => "aligned",
            Provenance::External => "external",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Pair {
    pub id: String,
    pub hazy: Image,
    pub clean: Image,
    pub provenance: Provenance,
}

/// Ordered (hazy, clean) pairs with unique ids and matching dimensions.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Dataset {
    pairs: Vec<Pair>,
}

#[derive(Debug, Serialize, Deserialize)]
struct ManifestRow {
    id: String,
    hazy_path: String,
    clean_path: String,
    provenance: Provenance,
}

pub const MANIFEST: &str = "manifest.csv";

impl Dataset {
    pub fn new(pairs: Vec<Pair>) -> Result<Self, ImageError> {
        let mut seen = HashSet::new();
        for p in &pairs {
            if !p.hazy.same_dims(&p.clean) {
                return Err(ImageError::DimensionMismatch(format!(
                    "pair {}: hazy {:?} vs clean {:?}",
                    p.id,
                    p.hazy.dims(),
                    p.clean.dims()
                )));
            }
            if !seen.insert(p.id.as_str()) {
                return Err(ImageError::Dataset(format!("duplicate id {}", p.id)));
            }
        }
        Ok(Self { pairs })
    }

    pub fn pairs(&self) -> &[Pair] {
        &self.pairs
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn hazy_images(&self) -> Vec<&Image> {
        self.pairs.iter().map(|p| &p.hazy).collect()
    }

    pub fn clean_images(&self) -> Vec<&Image> {
        self.pairs.iter().map(|p| &p.clean).collect()
    }

    /// First `n` pairs, and the remainder.
    pub fn split_at(&self, n: usize) -> (Dataset, Dataset) {
        let n = n.min(self.pairs.len());
        (
            Dataset {
                pairs: self.pairs[..n].to_vec(),
            },
            Dataset {
                pairs: self.pairs[n..].to_vec(),
            },
        )
    }

    /// Write images plus `manifest.csv` into `dir` (created if needed).
    pub fn write_dir(&self, dir: &Path, format: ImageFormat) -> Result<PathBuf, ImageError> {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
        let manifest = dir.join(MANIFEST);
        let mut w = csv::Writer::from_path(&manifest)?;
        for p in &self.pairs {
            let hazy = format!("{}_hazy.{}", p.id, format.extension());
            let clean = format!("{}_clean.{}", p.id, format.extension());
            save_image(&p.hazy, &dir.join(&hazy), format)?;
            save_image(&p.clean, &dir.join(&clean), format)?;
            w.serialize(ManifestRow {
                id: p.id.clone(),
                hazy_path: hazy,
                clean_path: clean,
                provenance: p.provenance,
            })?;
        }
        w.flush().map_err(io_err(&manifest))?;
        Ok(manifest)
    }

    /// Load a dataset directory; image paths in the manifest are relative to it.
    pub fn read_dir(dir: &Path) -> Result<Self, ImageError> {
        let manifest = dir.join(MANIFEST);
        if !manifest.exists() {
            return Err(ImageError::Missing(manifest));
        }
        let mut r = csv::Reader::from_path(&manifest)?;
        let mut pairs = Vec::new();
        for row in r.deserialize() {
            let row: ManifestRow = row?;
            pairs.push(Pair {
                hazy: load_image(&dir.join(&row.hazy_path))?,
                clean: load_image(&dir.join(&row.clean_path))?,
                id: row.id,
                provenance: row.provenance,
            });
        }
        Dataset::new(pairs)
    }
}

// ---------------------------------------------------------------------------
// Procedural content

fn smoothstep(t: f64) -> f64 {
    t * t * (3.0 - 2.0 * t)
}

/// Smooth value noise: a `(cells+1)^2` lattice of values from `draw`,
/// interpolated with smoothstep weights across a `width x height` grid.
pub(crate) fn value_noise(
    width: usize,
    height: usize,
    cells: usize,
    mut draw: impl FnMut() -> f64,
) -> Vec<f64> {
    let n = cells + 1;
    let lattice: Vec<f64> = (0..n * n).map(|_| draw()).collect();
    let mut out = Vec::with_capacity(width * height);
    for y in 0..height {
        let fy = y as f64 / (height.max(2) - 1) as f64 * cells as f64;
        let iy = (fy.floor() as usize).min(cells - 1);
        let ty = smoothstep(fy - iy as f64);
        for x in 0..width {
            let fx = x as f64 / (width.max(2) - 1) as f64 * cells as f64;
            let ix = (fx.floor() as usize).min(cells - 1);
            let tx = smoothstep(fx - ix as f64);
            let at = |j: usize, i: usize| lattice[j * n + i];
            let top = at(iy, ix) * (1.0 - tx) + at(iy, ix + 1) * tx;
            let bottom = at(iy + 1, ix) * (1.0 - tx) + at(iy + 1, ix + 1) * tx;
            out.push(top * (1.0 - ty) + bottom * ty);
        }
    }
    out
}

const SCENE_NOISE_AMPLITUDE: f64 = 0.05;

/// Procedural clean scene: bilinear corner-color gradient, `complexity`
/// random rectangles and disks, and low-frequency per-channel noise.
///
/// Panics if either dimension is below 8.
pub fn gen_scene(rng: &mut Rng, width: usize, height: usize, complexity: usize) -> Image {
    assert!(width >= 8 && height >= 8, "gen_scene needs at least 8x8");
    let mut rng = rng.split("scene");
    let corners: Vec<[f64; 3]> = (0..4)
        .map(|_| {
            [
                rng.uniform(0.15, 0.85),
                rng.uniform(0.15, 0.85),
                rng.uniform(0.15, 0.85),
            ]
        })
        .collect();
    let (wf, hf) = (width as f64, height as f64);
    let mut canvas: Vec<[f64; 3]> = Vec::with_capacity(width * height);
    for y in 0..height {
        let v = y as f64 / (hf - 1.0);
        for x in 0..width {
            let u = x as f64 / (wf - 1.0);
            let mut px = [0.0; 3];
            for (c, p) in px.iter_mut().enumerate() {
                *p = corners[0][c] * (1.0 - u) * (1.0 - v)
                    + corners[1][c] * u * (1.0 - v)
                    + corners[2][c] * (1.0 - u) * v
                    + corners[3][c] * u * v;
            }
            canvas.push(px);
        }
    }

    for _ in 0..complexity {
        let color = [rng.next_f64(), rng.next_f64(), rng.next_f64()];
        if rng.next_f64() < 0.5 {
            let rw = rng.uniform(wf / 8.0, wf / 2.0);
            let rh = rng.uniform(hf / 8.0, hf / 2.0);
            let x0 = rng.uniform(-rw / 2.0, wf - rw / 2.0);
            let y0 = rng.uniform(-rh / 2.0, hf - rh / 2.0);
            for y in 0..height {
                let py = y as f64 + 0.5;
                if py < y0 || py >= y0 + rh {
                    continue;
                }
                for x in 0..width {
                    let px = x as f64 + 0.5;
                    if px >= x0 && px < x0 + rw {
                        canvas[y * width + x] = color;
                    }
                }
            }
        } else {
            let radius = rng.uniform(wf.min(hf) / 16.0, wf.min(hf) / 4.0).max(1.0);
            let cx = rng.uniform(0.0, wf);
            let cy = rng.uniform(0.0, hf);
            for y in 0..height {
                for x in 0..width {
                    let dx = x as f64 + 0.5 - cx;
                    let dy = y as f64 + 0.5 - cy;
                    if dx * dx + dy * dy <= radius * radius {
                        canvas[y * width + x] = color;
                    }
                }
            }
        }
    }

    let noise: Vec<Vec<f64>> = (0..CHANNELS)
        .map(|_| value_noise(width, height, 3, || SCENE_NOISE_AMPLITUDE * rng.normal()))
        .collect();
    Image::from_fn(width, height, |c, y, x| {
        let i = y * width + x;
        (canvas[i][c] + noise[c][i]).clamp(0.0, 1.0) as f32
    })
}
