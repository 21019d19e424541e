use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rayon::prelude::*;

use super::{adamw_step, lr_at, MixedSampler, OptimState, SampleRef, TrainConfig, TrainError};
use crate::imgdata::{Dataset, Pair, Rect};
use crate::metrics::{l1_loss, total_loss};
use crate::nnet::{save_checkpoint, DehazeUNet, Float, Tape};
use crate::rng::Rng;
use crate::ssaug::{alpha_at, internal_term_at, DecaySchedule};

pub const LOG_HEADER: &str = "step,lr,alpha,l_ext,l_int,l_total";

/// One optimizer step; losses are batch means.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LogRow {
    pub step: u64,
    pub lr: f64,
    pub alpha: f64,
    pub l_ext: f64,
    pub l_int: f64,
    pub l_total: f64,
}

/// Per-sample mean losses over one sampler epoch.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochStats {
    pub epoch: usize,
    pub steps: u64,
    pub samples: usize,
    pub l_ext: f64,
    pub l_int: f64,
    pub l_total: f64,
}

pub struct TrainReport<F: Float> {
    pub net: DehazeUNet<F>,
    pub log: Vec<LogRow>,
    pub epochs: Vec<EpochStats>,
    /// Final model checkpoint, when an output directory was given.
    pub checkpoint: Option<PathBuf>,
}

/// Where training writes its artifacts and whom it tells about epochs.
#[derive(Default)]
pub struct TrainOutputs<'a> {
    /// Receives `train_log.csv`, `model.ckpt` and `checkpoints/`.
    pub dir: Option<PathBuf>,
    pub on_epoch: Option<&'a mut dyn FnMut(&EpochStats)>,
}

/// Summed gradients and losses of one batch.
pub(crate) struct BatchGrads {
    pub grads: Vec<Vec<f64>>,
    pub l_ext: Vec<f64>,
    pub l_int: Vec<f64>,
    pub l_total: Vec<f64>,
}

/// Forward and backward for every pair on its own tape, in parallel; the
/// per-sample gradients are summed in batch order. `rects[i]` is the crop
/// for pair `i` when the internal term is on.
pub(crate) fn batch_gradients<F: Float>(
    net: &DehazeUNet<F>,
    config: &TrainConfig,
    pairs: &[&Pair],
    rects: Option<&[Rect]>,
    alpha: f64,
) -> Result<BatchGrads, TrainError> {
    let per_sample: Vec<(Vec<Vec<F>>, f64, f64, f64)> = pairs
        .par_iter()
        .enumerate()
        .map(|(i, pair)| {
            let mut t = Tape::new();
            let bound = net.bind(&mut t);
            let x = DehazeUNet::image_leaf(&mut t, &pair.hazy);
            let y_hat = net.forward(&mut t, &bound, x)?;
            let ext = l1_loss(&mut t, y_hat, &pair.clean)?;
            let (loss, l_int) = match rects {
                Some(r) => {
                    let int = internal_term_at(&mut t, y_hat, r[i], &config.aug, alpha, config.internal)?;
                    (total_loss(&mut t, ext, int)?, t.scalar(int).as_f64())
                }
                None => (ext, 0.0),
            };
            let grads = t.backward(loss)?;
            let g = bound
                .vars
                .iter()
                .zip(net.params().iter())
                .map(|(&v, p)| grads.wrt(v).map_or_else(|| vec![F::zero(); p.value.len()], <[F]>::to_vec))
                .collect();
            Ok((g, t.scalar(ext).as_f64(), l_int, t.scalar(loss).as_f64()))
        })
        .collect::<Result<_, TrainError>>()?;

    let mut grads: Vec<Vec<f64>> = net.params().iter().map(|p| vec![0.0; p.value.len()]).collect();
    let mut out = BatchGrads {
        grads: Vec::new(),
        l_ext: Vec::with_capacity(pairs.len()),
        l_int: Vec::with_capacity(pairs.len()),
        l_total: Vec::with_capacity(pairs.len()),
    };
    for (g, e, i, l) in per_sample {
        for (acc, src) in grads.iter_mut().zip(g) {
            for (a, b) in acc.iter_mut().zip(src) {
                *a += b.as_f64();
            }
        }
        out.l_ext.push(e);
        out.l_int.push(i);
        out.l_total.push(l);
    }
    out.grads = grads;
    Ok(out)
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn resolve<'a>(r: SampleRef, target: &'a Dataset, aux: Option<&'a Dataset>) -> &'a Pair {
    match r {
        SampleRef::Target(i) => &target.pairs()[i],
        SampleRef::Auxiliary(i) => &aux.expect("sampler only yields auxiliary refs when present").pairs()[i],
    }
}

fn write_log(path: &Path, rows: &[LogRow]) -> Result<(), TrainError> {
    let file = File::create(path).map_err(TrainError::io(path))?;
    let mut w = BufWriter::new(file);
    let write = |w: &mut BufWriter<File>| -> std::io::Result<()> {
        writeln!(w, "{LOG_HEADER}")?;
        for r in rows {
            writeln!(
                w,
                "{},{:e},{:e},{:.9},{:.9},{:.9}",
                r.step, r.lr, r.alpha, r.l_ext, r.l_int, r.l_total
            )?;
        }
        w.flush()
    };
    write(&mut w).map_err(TrainError::io(path))
}

struct EpochAcc {
    epoch: usize,
    steps: u64,
    samples: usize,
    sums: [f64; 3],
}

impl EpochAcc {
    fn new(epoch: usize) -> Self {
        Self {
            epoch,
            steps: 0,
            samples: 0,
            sums: [0.0; 3],
        }
    }

    fn finish(&self) -> EpochStats {
        let n = self.samples as f64;
        EpochStats {
            epoch: self.epoch,
            steps: self.steps,
            samples: self.samples,
            l_ext: self.sums[0] / n,
            l_int: self.sums[1] / n,
            l_total: self.sums[2] / n,
        }
    }
}

/// Train a fresh network on `target`, mixing in `aux` per `config.mix_ratio`.
///
/// Runs `config.total_steps` optimizer steps `s = 0..S` with `lr_at(s)` and
/// `alpha_at(s)`. Each step averages the per-sample gradients of the batch.
/// All randomness derives from `config.seed`, so runs are bit-reproducible.
pub fn train<F: Float>(
    config: &TrainConfig,
    target: &Dataset,
    aux: Option<&Dataset>,
    outputs: TrainOutputs<'_>,
) -> Result<TrainReport<F>, TrainError> {
    config.validate()?;
    let TrainOutputs { dir, mut on_epoch } = outputs;
    let mut root = Rng::new(config.seed);
    let mut net = DehazeUNet::<F>::new(config.net.clone(), &mut root.split("init"));
    let n_aux = aux.map_or(0, Dataset::len);
    let mut sampler = MixedSampler::new(
        root.split("sampler"),
        target.len(),
        n_aux,
        config.mix_ratio,
        config.batch_size,
        config.fixed_aux_subset,
    )?;
    let mut crop_rng = root.split("crops");
    let schedule = DecaySchedule::new(config.alpha0, config.total_steps)?;
    let mut state = OptimState::new(net.params());

    let ckpt_dir = dir.as_ref().map(|d| d.join("checkpoints"));
    if let Some(d) = &dir {
        fs::create_dir_all(d).map_err(TrainError::io(d))?;
    }
    if let (Some(c), true) = (&ckpt_dir, config.checkpoint_every > 0) {
        fs::create_dir_all(c).map_err(TrainError::io(c))?;
    }

    let mut log = Vec::with_capacity(config.total_steps as usize);
    let mut epochs = Vec::new();
    let mut acc = EpochAcc::new(0);

    for step in 0..config.total_steps {
        let lr = lr_at(config, step)?;
        let alpha = if config.use_internal {
            alpha_at(&schedule, step)?
        } else {
            0.0
        };
        let batch = sampler.next_batch();
        if batch.epoch != acc.epoch {
            let stats = acc.finish();
            if let Some(cb) = on_epoch.as_mut() {
                cb(&stats);
            }
            epochs.push(stats);
            acc = EpochAcc::new(batch.epoch);
        }
        let pairs: Vec<&Pair> = batch.items.iter().map(|&r| resolve(r, target, aux)).collect();
        let rects = if config.use_internal {
            Some(
                pairs
                    .iter()
                    .map(|p| config.aug.draw_crop(&mut crop_rng, p.hazy.width(), p.hazy.height()))
                    .collect::<Result<Vec<_>, _>>()?,
            )
        } else {
            None
        };

        let bg = batch_gradients(&net, config, &pairs, rects.as_deref(), alpha)?;
        let row = LogRow {
            step,
            lr,
            alpha,
            l_ext: mean(&bg.l_ext),
            l_int: mean(&bg.l_int),
            l_total: mean(&bg.l_total),
        };
        if !row.l_total.is_finite() {
            return Err(TrainError::NonFinite { step, what: "loss" });
        }
        let inv = 1.0 / pairs.len() as f64;
        for (p, g) in net.params_mut().iter_mut().zip(&bg.grads) {
            for (dst, &src) in p.grad.iter_mut().zip(g) {
                let v = src * inv;
                if !v.is_finite() {
                    return Err(TrainError::NonFinite { step, what: "gradient" });
                }
                *dst = F::of(v);
            }
        }
        adamw_step(net.params_mut(), &mut state, lr, &config.optimizer)?;

        acc.steps += 1;
        acc.samples += pairs.len();
        for (s, v) in acc.sums.iter_mut().zip([&bg.l_ext, &bg.l_int, &bg.l_total]) {
            *s += v.iter().sum::<f64>();
        }
        log.push(row);

        let done = step + 1;
        if let Some(c) = &ckpt_dir {
            if config.checkpoint_every > 0 && done % config.checkpoint_every == 0 {
                save_checkpoint(&net, &c.join(format!("step_{done:06}.ckpt")))?;
            }
        }
    }
    let stats = acc.finish();
    if let Some(cb) = on_epoch.as_mut() {
        cb(&stats);
    }
    epochs.push(stats);
    net.zero_grads();

    let checkpoint = match &dir {
        Some(d) => {
            write_log(&d.join("train_log.csv"), &log)?;
            let path = d.join("model.ckpt");
            save_checkpoint(&net, &path)?;
            Some(path)
        }
        None => None,
    };
    Ok(TrainReport {
        net,
        log,
        epochs,
        checkpoint,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::hazesim::{synth_dataset, HazeMode};
    use crate::nnet::{load_checkpoint, NetConfig};
    use crate::trainer::MixRatio;

    fn data(seed: u64, n: usize) -> Dataset {
        synth_dataset(&mut Rng::new(seed), n, 16, 16, HazeMode::ConstantT).unwrap()
    }

    fn small(steps: u64) -> TrainConfig {
        TrainConfig {
            total_steps: steps,
            batch_size: 4,
            lr_initial: 1e-3,
            lr_final: 1e-5,
            net: NetConfig {
                widths: [4, 8, 8, 8, 4],
                ..NetConfig::default()
            },
            ..TrainConfig::default()
        }
    }

    #[test]
    fn log_rows_follow_schedules() {
        let rep = train::<f32>(&small(6), &data(1, 8), None, TrainOutputs::default()).unwrap();
        assert_eq!(rep.log.len(), 6);
        assert_eq!(rep.log[0].lr, 1e-3);
        assert_eq!(rep.log[0].alpha, 0.1);
        assert!(rep.log.iter().all(|r| r.l_int >= 0.0));
        assert!(rep.log.iter().all(|r| (r.l_total - r.l_ext - r.l_int).abs() < 1e-6));
        // 8 pairs at batch 4: two steps per epoch.
        assert_eq!(rep.epochs.len(), 3);
        assert!(rep.epochs.iter().all(|e| e.steps == 2 && e.samples == 8));
    }

    #[test]
    fn internal_off_logs_zero() {
        let c = TrainConfig {
            use_internal: false,
            ..small(4)
        };
        let rep = train::<f32>(&c, &data(1, 8), None, TrainOutputs::default()).unwrap();
        assert!(rep.log.iter().all(|r| r.l_int == 0.0 && r.alpha == 0.0 && r.l_total == r.l_ext));
    }

    #[test]
    fn same_seed_gives_identical_checkpoints() {
        let d = data(2, 8);
        let c = TrainConfig {
            mix_ratio: MixRatio::OneToOne,
            ..small(5)
        };
        let aux = data(3, 8);
        let dirs = [tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap()];
        for dir in &dirs {
            let out = TrainOutputs {
                dir: Some(dir.path().to_path_buf()),
                on_epoch: None,
            };
            train::<f32>(&c, &d, Some(&aux), out).unwrap();
        }
        let read = |i: usize, f: &str| fs::read(dirs[i].path().join(f)).unwrap();
        assert_eq!(read(0, "model.ckpt"), read(1, "model.ckpt"));
        assert_eq!(read(0, "train_log.csv"), read(1, "train_log.csv"));
        let log = String::from_utf8(read(0, "train_log.csv")).unwrap();
        assert!(log.starts_with(LOG_HEADER));
        assert_eq!(log.lines().count(), 6);
    }

    #[test]
    fn periodic_checkpoints_and_final_model() {
        let c = TrainConfig {
            checkpoint_every: 2,
            ..small(5)
        };
        let dir = tempfile::tempdir().unwrap();
        let out = TrainOutputs {
            dir: Some(dir.path().to_path_buf()),
            on_epoch: None,
        };
        let rep = train::<f32>(&c, &data(1, 8), None, out).unwrap();
        let ck = dir.path().join("checkpoints");
        assert!(ck.join("step_000002.ckpt").exists());
        assert!(ck.join("step_000004.ckpt").exists());
        assert!(!ck.join("step_000005.ckpt").exists());
        let loaded: DehazeUNet<f32> = load_checkpoint(&rep.checkpoint.unwrap()).unwrap();
        assert_eq!(loaded.params(), rep.net.params());
    }

    #[test]
    fn epoch_callback_sees_every_epoch() {
        let mut seen = Vec::new();
        let mut cb = |e: &EpochStats| seen.push(e.epoch);
        let out = TrainOutputs {
            dir: None,
            on_epoch: Some(&mut cb),
        };
        train::<f32>(&small(5), &data(1, 8), None, out).unwrap();
        assert_eq!(seen, vec![0, 1, 2]);
    }

    #[test]
    fn mixing_without_auxiliary_fails() {
        let c = TrainConfig {
            mix_ratio: MixRatio::ThreeToOne,
            ..small(2)
        };
        assert!(matches!(
            train::<f32>(&c, &data(1, 4), None, TrainOutputs::default()),
            Err(TrainError::EmptyAuxiliary(_))
        ));
    }

    #[test]
    fn non_finite_loss_names_the_step() {
        let c = TrainConfig {
            lr_initial: 1e30,
            lr_final: 1e30,
            optimizer: crate::trainer::AdamW {
                weight_decay: 0.0,
                ..Default::default()
            },
            ..small(50)
        };
        match train::<f32>(&c, &data(1, 4), None, TrainOutputs::default()) {
            Err(TrainError::NonFinite { step, .. }) => assert!(step >= 1),
            other => panic!("expected NonFinite, got {:?}", other.err()),
        }
    }

    #[test]
    fn internal_term_changes_the_gradient() {
        let c = small(1);
        let mut net = DehazeUNet::<f64>::new(c.net.clone(), &mut Rng::new(4));
        net.randomize_all(&mut Rng::new(5));
        let d = data(6, 4);
        let pairs: Vec<&Pair> = d.pairs().iter().collect();
        let mut rng = Rng::new(7);
        let rects: Vec<Rect> = pairs.iter().map(|_| c.aug.draw_crop(&mut rng, 16, 16).unwrap()).collect();
        let on = batch_gradients(&net, &c, &pairs, Some(&rects), 0.1).unwrap();
        let off = batch_gradients(&net, &c, &pairs, None, 0.1).unwrap();
        assert!(on.l_int.iter().all(|&v| v > 0.0));
        let differs = on
            .grads
            .iter()
            .flatten()
            .zip(off.grads.iter().flatten())
            .any(|(a, b)| a != b);
        assert!(differs);
    }
}
