use rayon::prelude::*;

use super::tape::{Fault, Tape};
use super::unet::DehazeUNet;
use super::{Float, NnError};
use crate::imgdata::Image;
use crate::rng::Rng;

#[derive(Clone, Debug)]
pub struct GradCheckOptions {
    /// Central-difference step.
    pub epsilon: f64,
    /// Parameter coordinates to sample. Every tensor contributes at least one.
    pub param_samples: usize,
    /// Denominator floor of the relative error, as a fraction of the median
    /// absolute parameter gradient. Coordinates with a (near-)zero true
    /// gradient are then compared on the scale of the typical gradient
    /// instead of against pure rounding noise.
    pub floor: f64,
    pub seed: u64,
    #[doc(hidden)]
    pub fault: Option<Fault>,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            epsilon: 1e-5,
            param_samples: 256,
            floor: 1e-4,
            seed: 0,
            fault: None,
        }
    }
}

impl GradCheckOptions {
    /// Defaults for a network of the given float width. In 32-bit mode the
    /// floor is raised to match single-precision accumulation error.
    pub fn for_bits(bits: u32) -> Self {
        let floor = if bits == 32 { 1e-2 } else { 1e-4 };
        Self {
            floor,
            ..Self::default()
        }
    }
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_param_error: f64,
    pub max_input_error: f64,
    /// Parameter name and index of the worst parameter coordinate.
    pub worst_param: (String, usize),
    pub params_checked: usize,
    pub inputs_checked: usize,
}

impl GradCheckReport {
    pub fn max_error(&self) -> f64 {
        self.max_param_error.max(self.max_input_error)
    }
}

fn median_abs(values: impl Iterator<Item = f64>) -> f64 {
    let mut v: Vec<f64> = values.map(f64::abs).collect();
    if v.is_empty() {
        return 0.0;
    }
    let mid = v.len() / 2;
    *v.select_nth_unstable_by(mid, f64::total_cmp).1
}

/// `|a - n| / max(|a|, |n|, floor)`.
pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Loss `sum(r * y_hat)` with a fixed random `r`, evaluated without a tape
/// recording gradients for later use.
fn loss_value(net: &DehazeUNet<f64>, input: &[f64], dims: (usize, usize), r: &[f64]) -> Result<f64, NnError> {
    let mut t = Tape::new();
    let p = net.bind(&mut t);
    let x = t.leaf(vec![3, dims.1, dims.0], input.to_vec());
    let y = net.forward(&mut t, &p, x)?;
    Ok(t.value(y).iter().zip(r).map(|(&a, &b)| a * b).sum())
}

/// Compare analytic gradients against central differences for a random
/// subsample of parameter coordinates and every input pixel.
///
/// Analytic gradients are computed in `F`; the difference quotients always
/// run on a 64-bit copy of the network, so a 32-bit check measures the
/// 32-bit backward pass rather than 32-bit rounding in the oracle.
pub fn grad_check<F: Float>(
    net: &DehazeUNet<F>,
    input: &Image,
    opts: &GradCheckOptions,
) -> Result<GradCheckReport, NnError> {
    let mut rng = Rng::new(opts.seed);
    let dims = input.dims();
    let x0: Vec<f64> = input.data().iter().map(|&v| f64::from(v)).collect();
    let r: Vec<f64> = (0..x0.len()).map(|_| rng.uniform(-1.0, 1.0)).collect();

    let mut t = Tape::new();
    if let Some(f) = opts.fault {
        t.inject_fault(f);
    }
    let bound = net.bind(&mut t);
    let x = t.leaf(vec![3, dims.1, dims.0], x0.iter().map(|&v| F::of(v)).collect());
    let y = net.forward(&mut t, &bound, x)?;
    let loss = t.dot_const(y, r.iter().map(|&v| F::of(v)).collect())?;
    let grads = t.backward(loss)?;

    let zeros = |n| vec![F::zero(); n];
    let param_grads: Vec<Vec<F>> = bound
        .vars
        .iter()
        .zip(net.params().iter())
        .map(|(&v, p)| grads.wrt(v).map_or_else(|| zeros(p.value.len()), <[F]>::to_vec))
        .collect();
    let floor = opts.floor * median_abs(param_grads.iter().flatten().map(|v| v.as_f64()));
    let input_grad = grads.wrt(x).map_or_else(|| zeros(x0.len()), <[F]>::to_vec);

    let mut coords: Vec<(usize, usize)> = net
        .params()
        .iter()
        .enumerate()
        .map(|(i, p)| (i, rng.below(p.value.len())))
        .collect();
    let total = net.params().numel();
    while coords.len() < opts.param_samples {
        let mut k = rng.below(total);
        let (ti, _) = net
            .params()
            .iter()
            .enumerate()
            .find(|(_, p)| {
                let hit = k < p.value.len();
                if !hit {
                    k -= p.value.len();
                }
                hit
            })
            .expect("index within total");
        coords.push((ti, k));
    }

    let oracle: DehazeUNet<f64> = net.cast();
    let eps = opts.epsilon;
    let two_eps = 2.0 * eps;
    let param_errors: Vec<f64> = coords
        .par_iter()
        .map(|&(ti, k)| {
            let mut probe = oracle.clone();
            let base = probe.params().get(ti).value[k];
            probe.params_mut().get_mut(ti).value[k] = base + eps;
            let plus = loss_value(&probe, &x0, dims, &r)?;
            probe.params_mut().get_mut(ti).value[k] = base - eps;
            let minus = loss_value(&probe, &x0, dims, &r)?;
            let numeric = (plus - minus) / two_eps;
            Ok(relative_error(param_grads[ti][k].as_f64(), numeric, floor))
        })
        .collect::<Result<_, NnError>>()?;

    let input_errors: Vec<f64> = (0..x0.len())
        .into_par_iter()
        .map(|i| {
            let mut xp = x0.clone();
            xp[i] = x0[i] + eps;
            let plus = loss_value(&oracle, &xp, dims, &r)?;
            xp[i] = x0[i] - eps;
            let minus = loss_value(&oracle, &xp, dims, &r)?;
            let numeric = (plus - minus) / two_eps;
            Ok(relative_error(input_grad[i].as_f64(), numeric, floor))
        })
        .collect::<Result<_, NnError>>()?;

    let (worst, max_param_error) = param_errors
        .iter()
        .copied()
        .enumerate()
        .fold((0, 0.0_f64), |acc, (i, e)| if e > acc.1 { (i, e) } else { acc });
    let (ti, k) = coords[worst];
    Ok(GradCheckReport {
        max_param_error,
        max_input_error: input_errors.iter().copied().fold(0.0, f64::max),
        worst_param: (net.params().get(ti).name.clone(), k),
        params_checked: coords.len(),
        inputs_checked: input_errors.len(),
    })
}
