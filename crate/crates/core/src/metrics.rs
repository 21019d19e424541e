//! Training losses on the tape and image-quality metrics on exported images.

use thiserror::Error;

use crate::imgdata::{Image, CHANNELS};
use crate::nnet::{gaussian_kernel, Float, NnError, Tape, Var};

#[derive(Debug, Error)]
pub enum MetricError {
    #[error("image dimensions differ: {a:?} vs {b:?}")]
    DimensionMismatch { a: (usize, usize), b: (usize, usize) },
    #[error("{width}x{height} image is smaller than the {window}x{window} window")]
    TooSmall { width: usize, height: usize, window: usize },
    #[error(transparent)]
    Nn(#[from] NnError),
}

fn check_dims(a: &Image, b: &Image) -> Result<(), MetricError> {
    if a.same_dims(b) {
        Ok(())
    } else {
        Err(MetricError::DimensionMismatch {
            a: a.dims(),
            b: b.dims(),
        })
    }
}

/// Mean absolute difference between a `(3, h, w)` node and a target image.
pub fn l1_loss<F: Float>(tape: &mut Tape<F>, y_hat: Var, y: &Image) -> Result<Var, MetricError> {
    let shape = [CHANNELS, y.height(), y.width()];
    if tape.shape(y_hat) != shape {
        return Err(NnError::Shape {
            op: "l1_loss",
            detail: format!("{:?} vs target {shape:?}", tape.shape(y_hat)),
        }
        .into());
    }
    let target = tape.leaf(shape.to_vec(), y.data().iter().map(|&v| F::of(f64::from(v))).collect());
    let diff = tape.sub(y_hat, target)?;
    Ok(tape.mean_abs(diff))
}

/// External plus internal loss. Both must be scalars on the same tape.
pub fn total_loss<F: Float>(tape: &mut Tape<F>, external: Var, internal: Var) -> Result<Var, MetricError> {
    for v in [external, internal] {
        if !tape.owns(v) {
            return Err(NnError::CrossTape.into());
        }
        if tape.shape(v).iter().product::<usize>() != 1 {
            return Err(NnError::NotScalar(tape.shape(v).to_vec()).into());
        }
    }
    Ok(tape.add(external, internal)?)
}

pub fn mse(a: &Image, b: &Image) -> Result<f64, MetricError> {
    check_dims(a, b)?;
    let sq: f64 = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| {
            let d = f64::from(x) - f64::from(y);
            d * d
        })
        .sum();
    Ok(sq / a.data().len() as f64)
}

/// `10 log10(1 / MSE)` for images in `[0, 1]`; identical images give
/// `f64::INFINITY`.
pub fn psnr(a: &Image, b: &Image) -> Result<f64, MetricError> {
    let m = mse(a, b)?;
    Ok(if m == 0.0 { f64::INFINITY } else { -10.0 * m.log10() })
}

/// Six-decimal rendering used in metric CSVs; the PSNR sentinel is `inf`.
pub fn format_metric(v: f64) -> String {
    if v == f64::INFINITY {
        "inf".to_string()
    } else {
        format!("{v:.6}")
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SsimParams {
    pub window: usize,
    pub sigma: f64,
    pub c1: f64,
    pub c2: f64,
}

impl Default for SsimParams {
    fn default() -> Self {
        Self {
            window: 11,
            sigma: 1.5,
            c1: 0.01 * 0.01,
            c2: 0.03 * 0.03,
        }
    }
}

impl SsimParams {
    /// Normalized 1-D taps; the 2-D window is their outer product.
    pub fn taps(&self) -> Vec<f64> {
        gaussian_kernel(self.window / 2, self.sigma)
    }
}

/// Valid-position separable filter of one `h x w` plane.
fn filter_valid(x: &[f64], h: usize, w: usize, taps: &[f64]) -> Vec<f64> {
    let k = taps.len();
    let (oh, ow) = (h - k + 1, w - k + 1);
    let mut rows = vec![0.0; h * ow];
    for y in 0..h {
        for ox in 0..ow {
            rows[y * ow + ox] = taps.iter().enumerate().map(|(i, t)| t * x[y * w + ox + i]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for oy in 0..oh {
        for ox in 0..ow {
            out[oy * ow + ox] = taps.iter().enumerate().map(|(i, t)| t * rows[(oy + i) * ow + ox]).sum();
        }
    }
    out
}

/// Mean SSIM over valid window positions and channels.
pub fn ssim(a: &Image, b: &Image, params: &SsimParams) -> Result<f64, MetricError> {
    check_dims(a, b)?;
    let (w, h) = a.dims();
    if w < params.window || h < params.window {
        return Err(MetricError::TooSmall {
            width: w,
            height: h,
            window: params.window,
        });
    }
    let taps = params.taps();
    let (c1, c2) = (params.c1, params.c2);
    let mut total = 0.0;
    let mut count = 0usize;
    for ch in 0..CHANNELS {
        let pa: Vec<f64> = a.plane(ch).iter().map(|&v| f64::from(v)).collect();
        let pb: Vec<f64> = b.plane(ch).iter().map(|&v| f64::from(v)).collect();
        let prod = |p: &[f64], q: &[f64]| -> Vec<f64> { p.iter().zip(q).map(|(x, y)| x * y).collect() };
        let mu_a = filter_valid(&pa, h, w, &taps);
        let mu_b = filter_valid(&pb, h, w, &taps);
        let aa = filter_valid(&prod(&pa, &pa), h, w, &taps);
        let bb = filter_valid(&prod(&pb, &pb), h, w, &taps);
        let ab = filter_valid(&prod(&pa, &pb), h, w, &taps);
        for i in 0..mu_a.len() {
            let (ma, mb) = (mu_a[i], mu_b[i]);
            let va = aa[i] - ma * ma;
            let vb = bb[i] - mb * mb;
            let cov = ab[i] - ma * mb;
            total += ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
        }
        count += mu_a.len();
    }
    Ok(total / count as f64)
}
