use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};

use dehaze_core::hazesim::{synth_dataset, HazeMode};
use dehaze_core::imgdata::{gen_scene, MANIFEST};
use dehaze_core::nnet::{grad_check, DehazeUNet, Float, GradCheckOptions, NetConfig};
use dehaze_core::trainer::{
    ablate as run_ablation, evaluate_checkpoint, evaluate_hazy, train as run_training, write_ablation_csv,
    write_eval_csv, AblationConfig, EpochStats, TrainConfig, TrainOutputs,
};
use dehaze_core::xalign::{align_dataset, channel_histogram_csv, dataset_channel_means, ChannelStats, GammaTriple};
use dehaze_core::{Channel, Dataset, ImageFormat, Rng};

use crate::config::read_pairs;
use crate::error::{Failure, EXIT_NUMERIC};
use crate::{AblateArgs, AlignArgs, EvalArgs, GradcheckArgs, RunArgs, StatsArgs, SynthArgs, TrainArgs};

fn parse_arg<T: std::str::FromStr<Err = String>>(v: &str) -> Result<T, Failure> {
    v.parse().map_err(Failure::usage)
}

fn require_dataset(dir: &Path) -> Result<(), Failure> {
    if dir.join(MANIFEST).is_file() {
        Ok(())
    } else {
        Err(Failure::new(
            crate::error::EXIT_IO,
            format!("{}: no {MANIFEST} found", dir.display()),
        ))
    }
}

fn require_file(path: &Path) -> Result<(), Failure> {
    if path.is_file() {
        Ok(())
    } else {
        Err(Failure::new(crate::error::EXIT_IO, format!("{}: file not found", path.display())))
    }
}

/// Refuse an output directory that is, or lies inside, one of the inputs.
fn check_out(out: &Path, inputs: &[&Path]) -> Result<(), Failure> {
    let Ok(o) = out.canonicalize() else {
        return Ok(());
    };
    for i in inputs {
        if let Ok(c) = i.canonicalize() {
            if o.starts_with(&c) {
                return Err(Failure::usage(format!(
                    "--out {} would write into input {}",
                    out.display(),
                    i.display()
                )));
            }
        }
    }
    Ok(())
}

fn create_dir(dir: &Path) -> Result<(), Failure> {
    fs::create_dir_all(dir).map_err(|e| Failure::io(dir, e))
}

fn write_file(path: &Path, body: impl FnOnce(&mut BufWriter<File>) -> io::Result<()>) -> Result<(), Failure> {
    let file = File::create(path).map_err(|e| Failure::io(path, e))?;
    let mut w = BufWriter::new(file);
    body(&mut w).and_then(|()| w.flush()).map_err(|e| Failure::io(path, e))
}

fn echo_config(pairs: &[(String, String)], out: &Path) -> Result<(), Failure> {
    println!("# resolved config");
    for (k, v) in pairs {
        println!("{k}={v}");
    }
    write_file(&out.join("config.txt"), |w| {
        for (k, v) in pairs {
            writeln!(w, "{k}={v}")?;
        }
        Ok(())
    })
}

/// Training config from file, then `--seed`/`--steps`, then `--set`, in that
/// order. Keys in `extra` are returned separately instead of being applied.
fn resolve(run: &RunArgs, extra: &[&str]) -> Result<(TrainConfig, BTreeMap<String, String>), Failure> {
    let mut pairs = match &run.config {
        Some(p) => read_pairs(p)?,
        None => Vec::new(),
    };
    if let Some(s) = run.seed {
        pairs.push(("seed".into(), s.to_string()));
    }
    if let Some(s) = run.steps {
        pairs.push(("total_steps".into(), s.to_string()));
    }
    pairs.extend(run.set.iter().cloned());
    let mut config = TrainConfig::default();
    let mut extras = BTreeMap::new();
    for (k, v) in pairs {
        if extra.contains(&k.as_str()) {
            extras.insert(k, v);
        } else {
            config.set(&k, &v).map_err(Failure::usage)?;
        }
    }
    config.validate()?;
    Ok((config, extras))
}

fn config_echo(config: &TrainConfig, extras: &BTreeMap<String, String>) -> Vec<(String, String)> {
    let mut v: Vec<(String, String)> = config.to_pairs().into_iter().map(|(k, v)| (k.to_string(), v)).collect();
    v.extend(extras.iter().map(|(k, v)| (k.clone(), v.clone())));
    v
}

fn print_means(label: &str, s: &ChannelStats) {
    println!(
        "{label} mean r={:.6} g={:.6} b={:.6}",
        s.mean(Channel::R),
        s.mean(Channel::G),
        s.mean(Channel::B)
    );
}

pub fn synth(a: SynthArgs) -> Result<(), Failure> {
    let mode: HazeMode = parse_arg(&a.mode)?;
    let format: ImageFormat = parse_arg(&a.format)?;
    let (w, h) = (a.width.unwrap_or(a.size), a.height.unwrap_or(a.size));
    if a.n == 0 || w < 8 || h < 8 {
        return Err(Failure::usage("need --n >= 1 and images of at least 8x8"));
    }
    let data = synth_dataset(&mut Rng::new(a.seed), a.n, w, h, mode)?;
    let manifest = data.write_dir(&a.out, format)?;
    println!("{}", manifest.display());
    Ok(())
}

pub fn stats(a: StatsArgs) -> Result<(), Failure> {
    require_dataset(&a.data)?;
    if let Some(o) = &a.out {
        check_out(o, &[&a.data])?;
    }
    let data = Dataset::read_dir(&a.data)?;
    let hazy = dataset_channel_means(&data.hazy_images())?;
    let clean = dataset_channel_means(&data.clean_images())?;
    println!("pairs {} pixels {}", data.len(), hazy.sample_count);
    print_means("hazy", &hazy);
    print_means("clean", &clean);
    if let Some(o) = &a.out {
        create_dir(o)?;
        let path = o.join("stats.csv");
        channel_histogram_csv(&hazy, &clean, &path)?;
        println!("{}", path.display());
    }
    Ok(())
}

fn write_gamma_csv(path: &Path, g: &GammaTriple) -> Result<(), Failure> {
    write_file(path, |w| {
        writeln!(w, "channel,gamma")?;
        for (c, v) in ["r", "g", "b"].iter().zip(g.as_array()) {
            writeln!(w, "{c},{v:.17e}")?;
        }
        Ok(())
    })
}

pub fn align(a: AlignArgs) -> Result<(), Failure> {
    let format: ImageFormat = parse_arg(&a.format)?;
    require_dataset(&a.source)?;
    require_dataset(&a.target)?;
    check_out(&a.out, &[&a.source, &a.target])?;
    let source = Dataset::read_dir(&a.source)?;
    let target = Dataset::read_dir(&a.target)?;
    let before = dataset_channel_means(&source.hazy_images())?;
    let goal = dataset_channel_means(&target.hazy_images())?;
    let (aligned, gamma) = align_dataset(&source, &goal)?;
    let after = dataset_channel_means(&aligned.hazy_images())?;

    aligned.write_dir(&a.out, format)?;
    write_gamma_csv(&a.out.join("gamma.csv"), &gamma)?;
    channel_histogram_csv(&before, &goal, &a.out.join("stats_before.csv"))?;
    channel_histogram_csv(&after, &goal, &a.out.join("stats_after.csv"))?;
    write_file(&a.out.join("mean_gap.csv"), |w| {
        writeln!(w, "channel,source_mean,target_mean,aligned_mean,gap_before,gap_after")?;
        for (name, ch) in ["r", "g", "b"].iter().zip(Channel::ALL) {
            let (s, t, x) = (before.mean(ch), goal.mean(ch), after.mean(ch));
            writeln!(w, "{name},{s:.6},{t:.6},{x:.6},{:.6},{:.6}", (s - t).abs(), (x - t).abs())?;
        }
        Ok(())
    })?;

    println!("gamma {gamma}");
    for (name, ch) in ["r", "g", "b"].iter().zip(Channel::ALL) {
        let t = goal.mean(ch);
        println!(
            "{name} gap before {:.6} after {:.6}",
            (before.mean(ch) - t).abs(),
            (after.mean(ch) - t).abs()
        );
    }
    println!("{}", a.out.join(MANIFEST).display());
    Ok(())
}

fn print_epoch(e: &EpochStats) {
    println!(
        "epoch {} steps {} l_ext {:.6} l_int {:.6} l_total {:.6}",
        e.epoch, e.steps, e.l_ext, e.l_int, e.l_total
    );
}

pub fn train(a: TrainArgs) -> Result<(), Failure> {
    let (mut config, mut extras) = resolve(&a.run, &["data", "aux"])?;
    if a.fixed_aux_subset {
        config.fixed_aux_subset = true;
    }
    if let Some(d) = &a.data {
        extras.insert("data".into(), d.display().to_string());
    }
    if let Some(d) = &a.aux {
        extras.insert("aux".into(), d.display().to_string());
    }
    let data = PathBuf::from(extras.get("data").ok_or_else(|| Failure::usage("no dataset: pass --data or set data="))?);
    let aux = extras.get("aux").map(PathBuf::from);
    require_dataset(&data)?;
    let mut inputs = vec![data.as_path()];
    if let Some(x) = &aux {
        require_dataset(x)?;
        inputs.push(x);
    }
    check_out(&a.run.out, &inputs)?;

    create_dir(&a.run.out)?;
    echo_config(&config_echo(&config, &extras), &a.run.out)?;
    let target = Dataset::read_dir(&data)?;
    let aux = aux.map(|p| Dataset::read_dir(&p)).transpose()?;
    let mut cb = print_epoch;
    let outputs = TrainOutputs {
        dir: Some(a.run.out.clone()),
        on_epoch: Some(&mut cb),
    };
    let rep = run_training::<f32>(&config, &target, aux.as_ref(), outputs)?;
    if let Some(p) = rep.checkpoint {
        println!("{}", p.display());
    }
    Ok(())
}

pub fn eval(a: EvalArgs) -> Result<(), Failure> {
    require_file(&a.checkpoint)?;
    require_dataset(&a.data)?;
    if let Some(o) = &a.out {
        check_out(o, &[&a.data])?;
    }
    let data = Dataset::read_dir(&a.data)?;
    let rep = evaluate_checkpoint(&a.checkpoint, &data)?;
    let mut stdout = io::stdout().lock();
    write_eval_csv(&rep, &mut stdout).map_err(|e| Failure::io(Path::new("<stdout>"), e))?;
    if let Some(o) = &a.out {
        create_dir(o)?;
        write_file(&o.join("eval.csv"), |w| write_eval_csv(&rep, w))?;
    }
    println!("psnr_db mean {}", dehaze_core::metrics::format_metric(rep.mean_psnr));
    println!("ssim mean {:.6}", rep.mean_ssim);
    Ok(())
}

const ABLATION_KEYS: [&str; 5] = ["n_train", "n_test", "n_aux", "size", "mode"];

pub fn ablate(a: AblateArgs) -> Result<(), Failure> {
    let (base, mut extras) = resolve(&a.run, &ABLATION_KEYS)?;
    let mut cfg = AblationConfig {
        base,
        ..AblationConfig::default()
    };
    for (k, v) in &extras {
        let bad = |_| Failure::usage(format!("bad value '{v}' for '{k}'"));
        match k.as_str() {
            "n_train" => cfg.n_train = v.parse().map_err(bad)?,
            "n_test" => cfg.n_test = v.parse().map_err(bad)?,
            "n_aux" => cfg.n_aux = v.parse().map_err(bad)?,
            "size" => cfg.size = v.parse().map_err(bad)?,
            "mode" => cfg.mode = parse_arg(v)?,
            _ => unreachable!("only ablation keys are collected"),
        }
    }
    if cfg.size < 16 {
        return Err(Failure::usage("size must be >= 16 for SSIM scoring"));
    }
    extras.insert("n_train".into(), cfg.n_train.to_string());
    extras.insert("n_test".into(), cfg.n_test.to_string());
    extras.insert("n_aux".into(), cfg.n_aux.to_string());
    extras.insert("size".into(), cfg.size.to_string());
    extras.insert(
        "mode".into(),
        match cfg.mode {
            HazeMode::ConstantT => "constant_t",
            HazeMode::Depth => "depth",
        }
        .into(),
    );
    create_dir(&a.run.out)?;
    echo_config(&config_echo(&cfg.base, &extras), &a.run.out)?;

    let data = dehaze_core::trainer::ablation_data(&cfg)?;
    let hazy = evaluate_hazy(&data.test)?;
    println!("aux gamma {}", data.gamma);
    println!("hazy input psnr_db {:.6} ssim {:.6}", hazy.mean_psnr, hazy.mean_ssim);
    let rows = run_ablation(&cfg, |r| {
        println!(
            "arm sw_ssl={} rsct_3_1={} rsct_1_1={} psnr_db {:.6} ssim {:.6}",
            r.sw_ssl, r.rsct_3_1, r.rsct_1_1, r.report.mean_psnr, r.report.mean_ssim
        );
    })?;
    let path = a.run.out.join("ablation.csv");
    write_file(&path, |w| write_ablation_csv(&rows, w))?;
    let base_psnr = rows[0].report.mean_psnr;
    for r in &rows[1..] {
        let rel = if r.report.mean_psnr >= base_psnr { ">=" } else { "<" };
        println!(
            "ordering sw_ssl={} rsct_3_1={} rsct_1_1={}: {rel} baseline",
            r.sw_ssl, r.rsct_3_1, r.rsct_1_1
        );
    }
    println!("{}", path.display());
    Ok(())
}

fn check_with<F: Float>(a: &GradcheckArgs) -> Result<(), Failure> {
    if a.size < 8 {
        return Err(Failure::usage("--size must be >= 8"));
    }
    let mut rng = Rng::new(a.seed);
    let mut net = DehazeUNet::<F>::new(NetConfig::default(), &mut rng.split("init"));
    if !a.identity {
        net.randomize_all(&mut rng.split("randomize"));
    }
    let input = gen_scene(&mut rng.split("input"), a.size, a.size, 3);
    let opts = GradCheckOptions {
        param_samples: a.samples,
        seed: a.seed,
        ..GradCheckOptions::for_bits(a.bits)
    };
    let rep = grad_check(&net, &input, &opts)?;
    // 32-bit input gradients are reported only; see the README.
    let (limit, measured) = if a.bits == 32 {
        (1e-2, rep.max_param_error)
    } else {
        (1e-4, rep.max_error())
    };
    println!("bits {}", a.bits);
    println!("params_checked {} inputs_checked {}", rep.params_checked, rep.inputs_checked);
    println!("max_param_rel_err {:.3e} (worst {}[{}])", rep.max_param_error, rep.worst_param.0, rep.worst_param.1);
    println!("max_input_rel_err {:.3e}", rep.max_input_error);
    if measured < limit {
        println!("PASS {measured:.3e} < {limit:e}");
        Ok(())
    } else {
        println!("FAIL {measured:.3e} >= {limit:e}");
        Err(Failure::new(EXIT_NUMERIC, format!("gradient check failed: {measured:.3e} >= {limit:e}")))
    }
}

pub fn gradcheck(a: GradcheckArgs) -> Result<(), Failure> {
    match a.bits {
        32 => check_with::<f32>(&a),
        64 => check_with::<f64>(&a),
        b => Err(Failure::usage(format!("--bits must be 32 or 64, got {b}"))),
    }
}
