use std::io::Write;

use super::{evaluate, train, EvalReport, MixRatio, TrainConfig, TrainError, TrainOutputs};
use crate::hazesim::{synth_dataset, HazeMode};
use crate::imgdata::{Dataset, Pair};
use crate::metrics::format_metric;
use crate::rng::Rng;
use crate::xalign::{align_dataset, apply_gamma, dataset_channel_means, GammaTriple};

pub const ABLATION_HEADER: &str = "sw_ssl,rsct_3_1,rsct_1_1,psnr_db,ssim";

/// Per-channel gamma applied to the auxiliary set so it starts out of
/// distribution: red darkened, blue brightened.
pub const AUX_COLOR_SHIFT: [f64; 3] = [0.6, 1.0, 1.6];

#[derive(Clone, Debug, PartialEq)]
pub struct AblationConfig {
    /// Shared by every arm; `use_internal` and `mix_ratio` are overridden.
    pub base: TrainConfig,
    pub n_train: usize,
    pub n_test: usize,
    pub n_aux: usize,
    pub size: usize,
    pub mode: HazeMode,
}

impl Default for AblationConfig {
    fn default() -> Self {
        Self {
            base: TrainConfig::default(),
            n_train: 200,
            n_test: 50,
            n_aux: 200,
            size: 24,
            mode: HazeMode::ConstantT,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationRow {
    pub sw_ssl: bool,
    pub rsct_3_1: bool,
    pub rsct_1_1: bool,
    pub report: EvalReport,
}

/// Arms in table order: baseline, internal only, external 3:1, external 1:1
/// with internal.
const ARMS: [(bool, MixRatio); 4] = [
    (false, MixRatio::Off),
    (true, MixRatio::Off),
    (false, MixRatio::ThreeToOne),
    (true, MixRatio::OneToOne),
];

/// The desk datasets: target train/test split and the color-shifted
/// auxiliary set after alignment to the target's hazy statistics.
pub struct AblationData {
    pub train: Dataset,
    pub test: Dataset,
    pub aux_shifted: Dataset,
    pub aux_aligned: Dataset,
    pub gamma: GammaTriple,
}

pub fn ablation_data(cfg: &AblationConfig) -> Result<AblationData, TrainError> {
    if cfg.n_train == 0 || cfg.n_test == 0 || cfg.n_aux == 0 {
        return Err(TrainError::Config("ablation needs non-empty train, test and auxiliary sets".into()));
    }
    let mut root = Rng::new(cfg.base.seed);
    let target = synth_dataset(&mut root.split("target"), cfg.n_train + cfg.n_test, cfg.size, cfg.size, cfg.mode)?;
    let (train, test) = target.split_at(cfg.n_train);
    let raw = synth_dataset(&mut root.split("auxiliary"), cfg.n_aux, cfg.size, cfg.size, cfg.mode)?;
    let shift = GammaTriple::from_array(AUX_COLOR_SHIFT);
    let aux_shifted = Dataset::new(
        raw.pairs()
            .iter()
            .map(|p| Pair {
                id: format!("aux_{}", p.id),
                hazy: apply_gamma(&p.hazy, &shift),
                clean: apply_gamma(&p.clean, &shift),
                provenance: p.provenance,
            })
            .collect(),
    )?;
    let stats = dataset_channel_means(&train.hazy_images())?;
    let (aux_aligned, gamma) = align_dataset(&aux_shifted, &stats)?;
    Ok(AblationData {
        train,
        test,
        aux_shifted,
        aux_aligned,
        gamma,
    })
}

/// Train and evaluate the four arms, one seed each.
pub fn ablate(cfg: &AblationConfig, mut on_arm: impl FnMut(&AblationRow)) -> Result<Vec<AblationRow>, TrainError> {
    let data = ablation_data(cfg)?;
    let mut rows = Vec::with_capacity(ARMS.len());
    for (use_internal, mix_ratio) in ARMS {
        let config = TrainConfig {
            use_internal,
            mix_ratio,
            ..cfg.base.clone()
        };
        let aux = (mix_ratio != MixRatio::Off).then_some(&data.aux_aligned);
        let rep = train::<f32>(&config, &data.train, aux, TrainOutputs::default())?;
        let row = AblationRow {
            sw_ssl: use_internal,
            rsct_3_1: mix_ratio == MixRatio::ThreeToOne,
            rsct_1_1: mix_ratio == MixRatio::OneToOne,
            report: evaluate(&rep.net, &data.test)?,
        };
        on_arm(&row);
        rows.push(row);
    }
    Ok(rows)
}

pub fn write_ablation_csv(rows: &[AblationRow], mut w: impl Write) -> std::io::Result<()> {
    writeln!(w, "{ABLATION_HEADER}")?;
    for r in rows {
        writeln!(
            w,
            "{},{},{},{},{}",
            r.sw_ssl,
            r.rsct_3_1,
            r.rsct_1_1,
            format_metric(r.report.mean_psnr),
            format_metric(r.report.mean_ssim)
        )?;
    }
    w.flush()
}
