use std::io::Write;
use std::path::Path;

use rayon::prelude::*;

use super::TrainError;
use crate::imgdata::{Dataset, Image};
use crate::metrics::{format_metric, psnr, ssim, SsimParams};
use crate::nnet::{load_checkpoint, DehazeUNet, Float};

#[derive(Clone, Debug, PartialEq)]
pub struct EvalRow {
    pub id: String,
    pub psnr: f64,
    pub ssim: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub rows: Vec<EvalRow>,
    /// Mean over finite-PSNR pairs; `inf` when every pair is exact.
    pub mean_psnr: f64,
    pub mean_ssim: f64,
    /// Pairs left out of `mean_psnr` because their PSNR is infinite.
    pub inf_excluded: usize,
}

impl EvalReport {
    fn from_rows(rows: Vec<EvalRow>) -> Self {
        let finite: Vec<f64> = rows.iter().map(|r| r.psnr).filter(|v| v.is_finite()).collect();
        let inf_excluded = rows.len() - finite.len();
        let mean_psnr = if finite.is_empty() {
            f64::INFINITY
        } else {
            finite.iter().sum::<f64>() / finite.len() as f64
        };
        let mean_ssim = rows.iter().map(|r| r.ssim).sum::<f64>() / rows.len() as f64;
        Self {
            rows,
            mean_psnr,
            mean_ssim,
            inf_excluded,
        }
    }
}

fn score(test: &Dataset, output: impl Fn(&Image) -> Result<Image, TrainError> + Sync) -> Result<EvalReport, TrainError> {
    if test.is_empty() {
        return Err(TrainError::Config("test dataset is empty".into()));
    }
    let params = SsimParams::default();
    let rows = test
        .pairs()
        .par_iter()
        .map(|p| {
            let y = output(&p.hazy)?;
            Ok(EvalRow {
                id: p.id.clone(),
                psnr: psnr(&y, &p.clean)?,
                ssim: ssim(&y, &p.clean, &params)?,
            })
        })
        .collect::<Result<Vec<_>, TrainError>>()?;
    Ok(EvalReport::from_rows(rows))
}

/// Dehaze every hazy image (clamped to `[0, 1]`) and score it against its
/// clean image. Pairs are processed in parallel; row order follows `test`.
pub fn evaluate<F: Float>(net: &DehazeUNet<F>, test: &Dataset) -> Result<EvalReport, TrainError> {
    score(test, |img| Ok(net.infer(img)?))
}

/// Score the hazy inputs themselves, the no-model baseline.
pub fn evaluate_hazy(test: &Dataset) -> Result<EvalReport, TrainError> {
    score(test, |img| Ok(img.clone()))
}

pub fn evaluate_checkpoint(path: &Path, test: &Dataset) -> Result<EvalReport, TrainError> {
    let net: DehazeUNet<f32> = load_checkpoint(path)?;
    evaluate(&net, test)
}

/// `id,psnr_db,ssim` per pair, then a mean row.
pub fn write_eval_csv(report: &EvalReport, mut w: impl Write) -> std::io::Result<()> {
    writeln!(w, "id,psnr_db,ssim")?;
    for r in &report.rows {
        writeln!(w, "{},{},{}", r.id, format_metric(r.psnr), format_metric(r.ssim))?;
    }
    let label = match report.inf_excluded {
        0 => "mean".to_string(),
        n => format!("mean ({n} inf excluded)"),
    };
    writeln!(w, "{label},{},{}", format_metric(report.mean_psnr), format_metric(report.mean_ssim))?;
    w.flush()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::hazesim::{synth_dataset, HazeMode};
    use crate::imgdata::{Pair, Provenance};
    use crate::nnet::{save_checkpoint, NetConfig};
    use crate::rng::Rng;

    fn data() -> Dataset {
        synth_dataset(&mut Rng::new(9), 6, 16, 16, HazeMode::ConstantT).unwrap()
    }

    fn identity() -> DehazeUNet<f32> {
        DehazeUNet::new(NetConfig::default(), &mut Rng::new(0))
    }

    #[test]
    fn identity_model_scores_the_hazy_input() {
        let d = data();
        assert_eq!(evaluate(&identity(), &d).unwrap(), evaluate_hazy(&d).unwrap());
    }

    #[test]
    fn rows_match_standalone_metrics() {
        let d = data();
        let mut net = identity();
        net.randomize_all(&mut Rng::new(3));
        let rep = evaluate(&net, &d).unwrap();
        for (row, p) in rep.rows.iter().zip(d.pairs()) {
            let y = net.infer(&p.hazy).unwrap();
            assert_eq!(row.id, p.id);
            assert!((row.psnr - psnr(&y, &p.clean).unwrap()).abs() < 1e-9);
            assert!((row.ssim - ssim(&y, &p.clean, &SsimParams::default()).unwrap()).abs() < 1e-9);
        }
        let mean = rep.rows.iter().map(|r| r.psnr).sum::<f64>() / 6.0;
        assert!((rep.mean_psnr - mean).abs() < 1e-12);
    }

    #[test]
    fn clean_pairs_give_unit_ssim_and_excluded_inf() {
        let pairs = data()
            .pairs()
            .iter()
            .map(|p| Pair {
                id: p.id.clone(),
                hazy: p.clean.clone(),
                clean: p.clean.clone(),
                provenance: Provenance::Synthetic,
            })
            .collect();
        let d = Dataset::new(pairs).unwrap();
        let rep = evaluate(&identity(), &d).unwrap();
        assert_eq!(rep.mean_ssim, 1.0);
        assert_eq!(rep.inf_excluded, 6);
        let mut csv = Vec::new();
        write_eval_csv(&rep, &mut csv).unwrap();
        let text = String::from_utf8(csv).unwrap();
        assert!(text.starts_with("id,psnr_db,ssim\n"));
        assert!(text.ends_with("mean (6 inf excluded),inf,1.000000\n"));
        assert_eq!(text.lines().count(), 8);
    }

    #[test]
    fn checkpoint_evaluation_matches_in_memory() {
        let mut net = identity();
        net.randomize_all(&mut Rng::new(4));
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        save_checkpoint(&net, &path).unwrap();
        let d = data();
        assert_eq!(evaluate_checkpoint(&path, &d).unwrap(), evaluate(&net, &d).unwrap());
    }

    #[test]
    fn too_small_for_ssim_is_an_error() {
        let d = synth_dataset(&mut Rng::new(1), 2, 8, 8, HazeMode::ConstantT).unwrap();
        assert!(matches!(evaluate(&identity(), &d), Err(TrainError::Metric(_))));
    }
}
