//! Haze synthesis with the atmospheric scattering model
//! `I(x) = J(x) t(x) + A (1 - t(x))`.

use std::str::FromStr;

use rayon::prelude::*;
use thiserror::Error;

use crate::imgdata::{gen_scene, value_noise, Dataset, Image, ImageError, Pair, Provenance};
use crate::rng::Rng;

pub const AMBIENT_RANGE: (f64, f64) = (0.7, 1.0);
pub const TRANSMISSION_RANGE: (f64, f64) = (0.25, 0.65);
pub const THICKNESS_RANGE: (f64, f64) = (0.35, 0.75);

/// Depth-to-optical-thickness scale `k` in `t(x) = exp(-s k d(x))`.
pub const DEPTH_SCALE: f64 = 3.0;
/// Lower clamp on the depth-mode transmission.
pub const MIN_TRANSMISSION: f64 = 0.05;

/// Clean-scene complexity used by [`synth_dataset`].
pub const SCENE_COMPLEXITY: usize = 6;

#[derive(Debug, Error)]
pub enum HazeError {
    #[error("depth map {depth:?} does not match image {image:?}")]
    DimensionMismatch {
        depth: (usize, usize),
        image: (usize, usize),
    },
    #[error(transparent)]
    Image(#[from] ImageError),
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct HazeParams {
    /// Per-channel atmospheric light.
    pub ambient: [f64; 3],
    /// Constant-mode transmission.
    pub transmission: f64,
    /// Depth-mode attenuation coefficient.
    pub thickness: f64,
}

impl HazeParams {
    pub fn new(ambient: [f64; 3], transmission: f64, thickness: f64) -> Self {
        Self {
            ambient,
            transmission,
            thickness,
        }
    }
}

/// Smooth field in `[0, 1]`, one value per pixel.
#[derive(Clone, Debug, PartialEq)]
pub struct DepthMap {
    width: usize,
    height: usize,
    values: Vec<f64>,
}

impl DepthMap {
    pub fn new(width: usize, height: usize, values: Vec<f64>) -> Self {
        assert_eq!(values.len(), width * height, "depth map size");
        Self {
            width,
            height,
            values,
        }
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn get(&self, y: usize, x: usize) -> f64 {
        self.values[y * self.width + x]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum HazeMode {
    ConstantT,
    Depth,
}

impl FromStr for HazeMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "constant" | "constant_t" => Ok(HazeMode::ConstantT),
            "depth" => Ok(HazeMode::Depth),
            other => Err(format!("unknown haze mode '{other}' (expected constant_t or depth)")),
        }
    }
}

pub fn sample_haze_params(rng: &mut Rng) -> HazeParams {
    let ambient = [
        rng.uniform(AMBIENT_RANGE.0, AMBIENT_RANGE.1),
        rng.uniform(AMBIENT_RANGE.0, AMBIENT_RANGE.1),
        rng.uniform(AMBIENT_RANGE.0, AMBIENT_RANGE.1),
    ];
    let transmission = rng.uniform(TRANSMISSION_RANGE.0, TRANSMISSION_RANGE.1);
    let thickness = rng.uniform(THICKNESS_RANGE.0, THICKNESS_RANGE.1);
    HazeParams {
        ambient,
        transmission,
        thickness,
    }
}

/// Per-pixel transmission for depth mode.
pub fn depth_transmission(thickness: f64, depth: f64) -> f64 {
    (-thickness * DEPTH_SCALE * depth)
        .exp()
        .clamp(MIN_TRANSMISSION, 1.0)
}

/// Blend `clean` toward the atmospheric light. Without a depth map the
/// constant transmission is used; with one, transmission follows
/// [`depth_transmission`]. The result is clamped to `[0, 1]`.
pub fn apply_haze(
    clean: &Image,
    params: &HazeParams,
    depth: Option<&DepthMap>,
) -> Result<Image, HazeError> {
    apply_haze_unclamped(clean, params, depth).map(|img| img.clamped())
}

pub(crate) fn apply_haze_unclamped(
    clean: &Image,
    params: &HazeParams,
    depth: Option<&DepthMap>,
) -> Result<Image, HazeError> {
    if let Some(d) = depth {
        if d.dims() != clean.dims() {
            return Err(HazeError::DimensionMismatch {
                depth: d.dims(),
                image: clean.dims(),
            });
        }
    }
    let (w, h) = clean.dims();
    Ok(Image::from_fn(w, h, |c, y, x| {
        let t = match depth {
            None => params.transmission,
            Some(d) => depth_transmission(params.thickness, d.get(y, x)),
        };
        let j = f64::from(clean.get(c, y, x));
        (j * t + params.ambient[c] * (1.0 - t)) as f32
    }))
}

/// Low-frequency noise plus a planar ramp of random orientation, normalized
/// to span exactly `[0, 1]`.
pub fn gen_depth(rng: &mut Rng, width: usize, height: usize) -> DepthMap {
    assert!(width >= 8 && height >= 8, "gen_depth needs at least 8x8");
    let mut rng = rng.split("depth");
    let angle = rng.uniform(0.0, std::f64::consts::FRAC_PI_2);
    let (flip_x, flip_y) = (rng.next_f64() < 0.5, rng.next_f64() < 0.5);
    let noise = value_noise(width, height, 2, || 0.25 * rng.next_f64());
    let mut values = Vec::with_capacity(width * height);
    for y in 0..height {
        let mut v = y as f64 / (height - 1) as f64;
        if flip_y {
            v = 1.0 - v;
        }
        for x in 0..width {
            let mut u = x as f64 / (width - 1) as f64;
            if flip_x {
                u = 1.0 - u;
            }
            values.push(angle.cos() * u + angle.sin() * v + noise[y * width + x]);
        }
    }
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    for v in &mut values {
        *v = (*v - lo) / (hi - lo);
    }
    DepthMap::new(width, height, values)
}

/// `n` hazy/clean pairs from procedural scenes. Each pair draws from its own
/// split stream, so the result does not depend on the rayon worker count.
pub fn synth_dataset(
    rng: &mut Rng,
    n: usize,
    width: usize,
    height: usize,
    mode: HazeMode,
) -> Result<Dataset, HazeError> {
    assert!(n >= 1, "synth_dataset needs n >= 1");
    let streams: Vec<Rng> = (0..n).map(|i| rng.split(&format!("pair{i}"))).collect();
    let pairs = streams
        .into_par_iter()
        .enumerate()
        .map(|(i, mut r)| {
            let clean = gen_scene(&mut r, width, height, SCENE_COMPLEXITY);
            let params = sample_haze_params(&mut r);
            let depth = match mode {
                HazeMode::ConstantT => None,
                HazeMode::Depth => Some(gen_depth(&mut r, width, height)),
            };
            let hazy = apply_haze(&clean, &params, depth.as_ref())?;
            Ok(Pair {
                id: format!("syn_{i:05}"),
                hazy,
                clean,
                provenance: Provenance::Synthetic,
            })
        })
        .collect::<Result<Vec<_>, HazeError>>()?;
    Ok(Dataset::new(pairs)?)
}

/// Same as [`synth_dataset`] in constant mode, also returning each pair's
/// parameters (used by tests that check per-sample bounds).
pub fn synth_with_params(
    rng: &mut Rng,
    n: usize,
    width: usize,
    height: usize,
) -> Vec<(Image, Image, HazeParams)> {
    (0..n)
        .map(|i| {
            let mut r = rng.split(&format!("pair{i}"));
            let clean = gen_scene(&mut r, width, height, SCENE_COMPLEXITY);
            let params = sample_haze_params(&mut r);
            let hazy = apply_haze(&clean, &params, None).expect("no depth map");
            (hazy, clean, params)
        })
        .collect()
}
