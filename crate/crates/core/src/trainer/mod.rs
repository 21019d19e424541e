//! AdamW with a cosine learning-rate schedule, mixed target/auxiliary
//! sampling, the training loop, evaluation and the ablation harness.

mod ablate;
mod eval;
mod optim;
mod sampler;
mod train;

use std::path::PathBuf;

use thiserror::Error;

pub use ablate::{
    ablate, ablation_data, write_ablation_csv, AblationConfig, AblationData, AblationRow, ABLATION_HEADER, AUX_COLOR_SHIFT,
};
pub use eval::{evaluate, evaluate_checkpoint, evaluate_hazy, write_eval_csv, EvalReport, EvalRow};
pub use optim::{adamw_step, lr_at, AdamW, OptimState};
pub use sampler::{Batch, MixRatio, MixedSampler, SampleRef};
pub use train::{train, EpochStats, LogRow, TrainOutputs, TrainReport, LOG_HEADER};

use crate::hazesim::HazeError;
use crate::imgdata::ImageError;
use crate::metrics::MetricError;
use crate::nnet::{NetConfig, NnError};
use crate::ssaug::{AugError, AugPolicy, InternalOptions};
use crate::xalign::AlignError;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("step {step} outside [0, {total}]")]
    StepOutOfRange { step: u64, total: u64 },
    #[error("mix ratio {0} needs a non-empty auxiliary dataset")]
    EmptyAuxiliary(MixRatio),
    #[error("non-finite {what} at step {step}")]
    NonFinite { step: u64, what: &'static str },
    #[error("model/data mismatch: {0}")]
    Mismatch(String),
    #[error(transparent)]
    Aug(#[from] AugError),
    #[error(transparent)]
    Metric(#[from] MetricError),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Image(#[from] ImageError),
    #[error(transparent)]
    Align(#[from] AlignError),
    #[error(transparent)]
    Haze(#[from] HazeError),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
}

impl TrainError {
    pub(crate) fn io(path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> Self {
        let path = path.into();
        move |source| TrainError::Io { path, source }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub seed: u64,
    pub batch_size: usize,
    pub total_steps: u64,
    pub lr_initial: f64,
    pub lr_final: f64,
    pub optimizer: AdamW,
    pub mix_ratio: MixRatio,
    /// Resample the auxiliary subset each epoch (false) or draw it once.
    pub fixed_aux_subset: bool,
    pub use_internal: bool,
    pub aug: AugPolicy,
    pub alpha0: f64,
    pub internal: InternalOptions,
    pub net: NetConfig,
    /// Write a checkpoint every this many steps; 0 writes only the final one.
    pub checkpoint_every: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            batch_size: 8,
            total_steps: 2000,
            lr_initial: 1e-4,
            lr_final: 1e-6,
            optimizer: AdamW::default(),
            mix_ratio: MixRatio::Off,
            fixed_aux_subset: false,
            use_internal: true,
            aug: AugPolicy::default(),
            alpha0: 0.1,
            internal: InternalOptions::default(),
            net: NetConfig::default(),
            checkpoint_every: 0,
        }
    }
}

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T, String> {
    value
        .trim()
        .parse()
        .map_err(|_| format!("bad value '{value}' for '{key}'"))
}

fn parse_bool(key: &str, value: &str) -> Result<bool, String> {
    match value.trim() {
        "true" | "1" | "yes" | "on" => Ok(true),
        "false" | "0" | "no" | "off" => Ok(false),
        _ => Err(format!("bad boolean '{value}' for '{key}'")),
    }
}

impl TrainConfig {
    /// Every key accepted by [`TrainConfig::set`], in echo order.
    pub const KEYS: &'static [&'static str] = &[
        "seed",
        "batch_size",
        "total_steps",
        "lr_initial",
        "lr_final",
        "weight_decay",
        "beta1",
        "beta2",
        "adam_eps",
        "mix_ratio",
        "fixed_aux_subset",
        "use_internal",
        "crop_fraction",
        "blur_radius",
        "blur_sigma",
        "alpha0",
        "internal_sum_form",
        "internal_detach_strong",
        "widths",
        "blocks",
        "window",
        "heads",
        "mlp_ratio",
        "checkpoint_every",
    ];

    pub fn set(&mut self, key: &str, value: &str) -> Result<(), String> {
        match key {
            "seed" => self.seed = parse(key, value)?,
            "batch_size" => self.batch_size = parse(key, value)?,
            "total_steps" => self.total_steps = parse(key, value)?,
            "lr_initial" => self.lr_initial = parse(key, value)?,
            "lr_final" => self.lr_final = parse(key, value)?,
            "weight_decay" => self.optimizer.weight_decay = parse(key, value)?,
            "beta1" => self.optimizer.beta1 = parse(key, value)?,
            "beta2" => self.optimizer.beta2 = parse(key, value)?,
            "adam_eps" => self.optimizer.eps = parse(key, value)?,
            "mix_ratio" => self.mix_ratio = value.trim().parse()?,
            "fixed_aux_subset" => self.fixed_aux_subset = parse_bool(key, value)?,
            "use_internal" => self.use_internal = parse_bool(key, value)?,
            "crop_fraction" => self.aug.crop_fraction = parse(key, value)?,
            "blur_radius" => self.aug.blur_radius = parse(key, value)?,
            "blur_sigma" => self.aug.blur_sigma = parse(key, value)?,
            "alpha0" => self.alpha0 = parse(key, value)?,
            "internal_sum_form" => self.internal.sum_form = parse_bool(key, value)?,
            "internal_detach_strong" => self.internal.detach_strong = parse_bool(key, value)?,
            "widths" => {
                let w: Vec<usize> = value
                    .split(',')
                    .map(|s| parse(key, s))
                    .collect::<Result<_, _>>()?;
                self.net.widths = w.try_into().map_err(|_| "widths needs 5 values".to_string())?;
            }
            "blocks" => self.net.blocks = parse(key, value)?,
            "window" => self.net.window = parse(key, value)?,
            "heads" => self.net.heads = parse(key, value)?,
            "mlp_ratio" => self.net.mlp_ratio = parse(key, value)?,
            "checkpoint_every" => self.checkpoint_every = parse(key, value)?,
            _ => return Err(format!("unknown config key '{key}'")),
        }
        Ok(())
    }

    /// Resolved values for every key, in [`TrainConfig::KEYS`] order.
    pub fn to_pairs(&self) -> Vec<(&'static str, String)> {
        let n = &self.net;
        let values = [
            self.seed.to_string(),
            self.batch_size.to_string(),
            self.total_steps.to_string(),
            format!("{:e}", self.lr_initial),
            format!("{:e}", self.lr_final),
            format!("{:e}", self.optimizer.weight_decay),
            self.optimizer.beta1.to_string(),
            self.optimizer.beta2.to_string(),
            format!("{:e}", self.optimizer.eps),
            self.mix_ratio.to_string(),
            self.fixed_aux_subset.to_string(),
            self.use_internal.to_string(),
            self.aug.crop_fraction.to_string(),
            self.aug.blur_radius.to_string(),
            self.aug.blur_sigma.to_string(),
            self.alpha0.to_string(),
            self.internal.sum_form.to_string(),
            self.internal.detach_strong.to_string(),
            n.widths.map(|w| w.to_string()).join(","),
            n.blocks.to_string(),
            n.window.to_string(),
            n.heads.to_string(),
            n.mlp_ratio.to_string(),
            self.checkpoint_every.to_string(),
        ];
        Self::KEYS.iter().copied().zip(values).collect()
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: String| Err(TrainError::Config(m));
        if self.batch_size == 0 {
            return bad("batch_size must be >= 1".into());
        }
        if self.total_steps == 0 {
            return bad("total_steps must be >= 1".into());
        }
        if !(self.lr_final >= 0.0 && self.lr_final <= self.lr_initial && self.lr_initial.is_finite()) {
            return bad(format!("need 0 <= lr_final <= lr_initial, got {} and {}", self.lr_final, self.lr_initial));
        }
        let o = &self.optimizer;
        if !((0.0..1.0).contains(&o.beta1) && (0.0..1.0).contains(&o.beta2)) {
            return bad("beta1 and beta2 must lie in [0, 1)".into());
        }
        if o.eps.is_nan() || o.eps <= 0.0 || o.weight_decay.is_nan() || o.weight_decay < 0.0 {
            return bad("adam_eps must be > 0 and weight_decay >= 0".into());
        }
        if !(self.alpha0 >= 0.0 && self.alpha0.is_finite()) {
            return bad(format!("alpha0 {} must be >= 0", self.alpha0));
        }
        self.aug.validate()?;
        self.net.validate().map_err(TrainError::Config)?;
        Ok(())
    }
}
