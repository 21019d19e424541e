//! External augmentor: dataset-level per-channel gamma alignment.
//!
//! Per-channel means are computed over the pooled pixels of a dataset. For
//! each channel the gamma `g` is chosen so that `source_mean^(1/g)` equals
//! `target_mean`, i.e. `g = ln(source_mean) / ln(target_mean)`, and every
//! sample is then mapped through `v^(1/g)`. Everything lives in `[0, 1]`.

use std::fmt;
use std::fs;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use thiserror::Error;

use crate::imgdata::{Channel, Dataset, Image, ImageError, Pair, Provenance, CHANNELS};

pub const HISTOGRAM_BINS: usize = 64;
/// Means closer than this to 0 or 1 make the log ratio singular.
pub const MEAN_GUARD: f64 = 1e-4;

#[derive(Debug, Error)]
pub enum AlignError {
    #[error("cannot compute statistics of an empty image list")]
    Empty,
    #[error("singular statistics on channel {channel:?}: {which} mean {mean} is within {MEAN_GUARD} of 0 or 1")]
    Singular {
        channel: Channel,
        which: &'static str,
        mean: f64,
    },
    #[error("histogram bin counts differ ({0} vs {1})")]
    BinMismatch(usize, usize),
    #[error("i/o error on {path}: {source}")]
    Io { path: PathBuf, source: io::Error },
    #[error(transparent)]
    Image(#[from] ImageError),
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GammaTriple {
    pub r: f64,
    pub g: f64,
    pub b: f64,
}

impl GammaTriple {
    pub const IDENTITY: GammaTriple = GammaTriple {
        r: 1.0,
        g: 1.0,
        b: 1.0,
    };

    pub fn new(r: f64, g: f64, b: f64) -> Self {
        Self { r, g, b }
    }

    pub fn as_array(&self) -> [f64; 3] {
        [self.r, self.g, self.b]
    }

    pub fn from_array([r, g, b]: [f64; 3]) -> Self {
        Self { r, g, b }
    }
}

impl fmt::Display for GammaTriple {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:.6} {:.6} {:.6}", self.r, self.g, self.b)
    }
}

/// Neumaier-compensated running sum.
#[derive(Clone, Copy, Debug, Default)]
struct CompensatedSum {
    sum: f64,
    carry: f64,
}

impl CompensatedSum {
    fn add(&mut self, v: f64) {
        let t = self.sum + v;
        if self.sum.abs() >= v.abs() {
            self.carry += (self.sum - t) + v;
        } else {
            self.carry += (v - t) + self.sum;
        }
        self.sum = t;
    }

    fn merge(mut self, other: CompensatedSum) -> CompensatedSum {
        self.add(other.sum);
        self.add(other.carry);
        self
    }

    fn value(&self) -> f64 {
        self.sum + self.carry
    }
}

/// Pooled per-channel means and `[0, 1]` histograms.
#[derive(Clone, Debug, PartialEq)]
pub struct ChannelStats {
    pub means: [f64; 3],
    /// `histogram[c][bin]` raw counts.
    pub histogram: [Vec<u64>; 3],
    /// Pixels per channel.
    pub sample_count: u64,
}

impl ChannelStats {
    pub fn from_means(means: [f64; 3]) -> Self {
        Self {
            means,
            histogram: [
                vec![0; HISTOGRAM_BINS],
                vec![0; HISTOGRAM_BINS],
                vec![0; HISTOGRAM_BINS],
            ],
            sample_count: 0,
        }
    }

    pub fn mean(&self, ch: Channel) -> f64 {
        self.means[ch.index()]
    }

    pub fn bins(&self) -> usize {
        self.histogram[0].len()
    }

    /// Histogram counts divided by the channel's total.
    pub fn frequencies(&self, c: usize) -> Vec<f64> {
        let total: u64 = self.histogram[c].iter().sum();
        self.histogram[c]
            .iter()
            .map(|&n| if total == 0 { 0.0 } else { n as f64 / total as f64 })
            .collect()
    }
}

fn bin_of(v: f32, bins: usize) -> usize {
    ((f64::from(v) * bins as f64).floor().max(0.0) as usize).min(bins - 1)
}

struct Partial {
    sums: [CompensatedSum; 3],
    hist: [Vec<u64>; 3],
    count: u64,
}

impl Partial {
    fn empty() -> Self {
        Self {
            sums: [CompensatedSum::default(); 3],
            hist: [
                vec![0; HISTOGRAM_BINS],
                vec![0; HISTOGRAM_BINS],
                vec![0; HISTOGRAM_BINS],
            ],
            count: 0,
        }
    }

    fn of(img: &Image) -> Self {
        let mut p = Partial::empty();
        for c in 0..CHANNELS {
            for &v in img.plane(c) {
                p.sums[c].add(f64::from(v));
                p.hist[c][bin_of(v, HISTOGRAM_BINS)] += 1;
            }
        }
        p.count = img.plane_len() as u64;
        p
    }

    fn merge(mut self, other: Partial) -> Partial {
        for c in 0..CHANNELS {
            self.sums[c] = self.sums[c].merge(other.sums[c]);
            for (a, b) in self.hist[c].iter_mut().zip(&other.hist[c]) {
                *a += b;
            }
        }
        self.count += other.count;
        self
    }
}

/// Pixel-weighted per-channel means over every pixel of every image, plus a
/// 64-bin histogram per channel.
pub fn dataset_channel_means(images: &[&Image]) -> Result<ChannelStats, AlignError> {
    if images.is_empty() {
        return Err(AlignError::Empty);
    }
    let total = images
        .par_iter()
        .map(|img| Partial::of(img))
        .reduce(Partial::empty, Partial::merge);
    let n = total.count as f64;
    Ok(ChannelStats {
        means: [
            total.sums[0].value() / n,
            total.sums[1].value() / n,
            total.sums[2].value() / n,
        ],
        histogram: total.hist,
        sample_count: total.count,
    })
}

pub fn solve_gamma(source: &ChannelStats, target: &ChannelStats) -> Result<GammaTriple, AlignError> {
    let mut gamma = [1.0; 3];
    for ch in Channel::ALL {
        let (s, t) = (source.mean(ch), target.mean(ch));
        for (which, mean) in [("source", s), ("target", t)] {
            if !(mean > MEAN_GUARD && mean < 1.0 - MEAN_GUARD) {
                return Err(AlignError::Singular {
                    channel: ch,
                    which,
                    mean,
                });
            }
        }
        gamma[ch.index()] = s.ln() / t.ln();
    }
    Ok(GammaTriple::from_array(gamma))
}

/// `v -> v^(1/gamma_c)` per channel.
pub fn apply_gamma(img: &Image, gamma: &GammaTriple) -> Image {
    let inv = gamma.as_array().map(|g| 1.0 / g);
    img.map(|c, v| {
        if inv[c] == 1.0 {
            v
        } else {
            f64::from(v).powf(inv[c]) as f32
        }
    })
}

/// Solve gamma from the source's hazy images against `target`, then apply it
/// to both images of every pair. Returns the new dataset and the gamma.
pub fn align_dataset(
    source: &Dataset,
    target: &ChannelStats,
) -> Result<(Dataset, GammaTriple), AlignError> {
    let stats = dataset_channel_means(&source.hazy_images())?;
    let gamma = solve_gamma(&stats, target)?;
    let pairs = source
        .pairs()
        .par_iter()
        .map(|p| Pair {
            id: p.id.clone(),
            hazy: apply_gamma(&p.hazy, &gamma),
            clean: apply_gamma(&p.clean, &gamma),
            provenance: Provenance::Aligned,
        })
        .collect();
    Ok((Dataset::new(pairs)?, gamma))
}

pub fn write_histogram_csv(
    a: &ChannelStats,
    b: &ChannelStats,
    w: &mut impl Write,
) -> Result<(), AlignError> {
    let bins = a.bins();
    if b.bins() != bins {
        return Err(AlignError::BinMismatch(bins, b.bins()));
    }
    let fa: Vec<Vec<f64>> = (0..CHANNELS).map(|c| a.frequencies(c)).collect();
    let fb: Vec<Vec<f64>> = (0..CHANNELS).map(|c| b.frequencies(c)).collect();
    let io = |source| AlignError::Io {
        path: PathBuf::from("<histogram>"),
        source,
    };
    writeln!(w, "bin_low,bin_high,a_r,a_g,a_b,b_r,b_g,b_b").map_err(io)?;
    for i in 0..bins {
        writeln!(
            w,
            "{:.6},{:.6},{:.9},{:.9},{:.9},{:.9},{:.9},{:.9}",
            i as f64 / bins as f64,
            (i + 1) as f64 / bins as f64,
            fa[0][i],
            fa[1][i],
            fa[2][i],
            fb[0][i],
            fb[1][i],
            fb[2][i]
        )
        .map_err(io)?;
    }
    Ok(())
}

/// Side-by-side normalized histograms of two statistics as CSV.
pub fn channel_histogram_csv(
    a: &ChannelStats,
    b: &ChannelStats,
    path: &Path,
) -> Result<(), AlignError> {
    let io = |source| AlignError::Io {
        path: path.to_path_buf(),
        source,
    };
    let file = fs::File::create(path).map_err(io)?;
    let mut w = BufWriter::new(file);
    write_histogram_csv(a, b, &mut w)?;
    w.flush().map_err(io)
}
