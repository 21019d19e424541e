use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use dehaze_core::imgdata::{Dataset, ImageFormat, Pair, Provenance};
use dehaze_core::nnet::{save_checkpoint, DehazeUNet, NetConfig};
use dehaze_core::Rng;

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_crossdehaze"))
        .args(args)
        .env_remove("CROSSDEHAZE_THREADS")
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn synth(dir: &Path, n: usize, size: usize, seed: u64) {
    let o = run(&[
        "synth", "--n", &n.to_string(), "--size", &size.to_string(), "--seed", &seed.to_string(), "--out", p(dir),
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
}

const SMALL: [&str; 6] = ["--set", "widths=4,8,8,8,4", "--set", "batch_size=4", "--steps", "3"];

#[test]
fn synth_writes_manifest_and_is_reproducible() {
    let t = tempfile::tempdir().unwrap();
    let (a, b) = (t.path().join("a"), t.path().join("b"));
    synth(&a, 10, 24, 7);
    synth(&b, 10, 24, 7);
    let manifest = fs::read_to_string(a.join("manifest.csv")).unwrap();
    assert_eq!(manifest.lines().count(), 11);
    for entry in fs::read_dir(&a).unwrap() {
        let name = entry.unwrap().file_name();
        assert_eq!(fs::read(a.join(&name)).unwrap(), fs::read(b.join(&name)).unwrap());
    }
}

#[test]
fn synth_depth_mode_and_bad_mode() {
    let t = tempfile::tempdir().unwrap();
    let o = run(&["synth", "--n", "2", "--mode", "depth", "--out", p(&t.path().join("d"))]);
    assert_eq!(code(&o), 0);
    let o = run(&["synth", "--n", "2", "--mode", "fog", "--out", p(&t.path().join("e"))]);
    assert_eq!(code(&o), 2);
}

#[test]
fn missing_arguments_are_usage_errors() {
    assert_eq!(code(&run(&["synth", "--n", "2"])), 2);
    assert_eq!(code(&run(&["nonsense"])), 2);
    assert_eq!(code(&run(&["--help"])), 0);
}

#[test]
fn stats_prints_means() {
    let t = tempfile::tempdir().unwrap();
    let d = t.path().join("d");
    synth(&d, 3, 16, 1);
    let o = run(&["stats", "--data", p(&d), "--out", p(&t.path().join("s"))]);
    assert_eq!(code(&o), 0);
    let s = stdout(&o);
    assert!(s.contains("pairs 3 pixels 768"));
    assert!(s.contains("hazy mean r="));
    assert!(t.path().join("s/stats.csv").exists());
}

#[test]
fn align_to_itself_gives_unit_gamma() {
    let t = tempfile::tempdir().unwrap();
    let d = t.path().join("d");
    let out = t.path().join("aligned");
    synth(&d, 4, 16, 2);
    let o = run(&["align", "--source", p(&d), "--target", p(&d), "--out", p(&out)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let s = stdout(&o);
    let gamma: Vec<f64> = s
        .lines()
        .find_map(|l| l.strip_prefix("gamma "))
        .unwrap()
        .split_whitespace()
        .map(|v| v.parse().unwrap())
        .collect();
    assert!(gamma.iter().all(|g| (g - 1.0).abs() < 1e-6), "{gamma:?}");
    assert!(s.contains("r gap before"));
    for f in ["gamma.csv", "stats_before.csv", "stats_after.csv", "mean_gap.csv"] {
        assert!(out.join(f).exists(), "{f}");
    }
    let manifest = fs::read_to_string(out.join("manifest.csv")).unwrap();
    assert!(manifest.lines().skip(1).all(|l| l.ends_with(",aligned")));
}

#[test]
fn out_inside_input_is_refused() {
    let t = tempfile::tempdir().unwrap();
    let d = t.path().join("d");
    synth(&d, 2, 16, 2);
    let o = run(&["align", "--source", p(&d), "--target", p(&d), "--out", p(&d)]);
    assert_eq!(code(&o), 2);
}

#[test]
fn eval_on_identical_pairs_prints_unit_ssim() {
    let t = tempfile::tempdir().unwrap();
    let d = t.path().join("d");
    synth(&d, 3, 16, 4);
    let src = Dataset::read_dir(&d).unwrap();
    let same = Dataset::new(
        src.pairs()
            .iter()
            .map(|q| Pair {
                id: q.id.clone(),
                hazy: q.clean.clone(),
                clean: q.clean.clone(),
                provenance: Provenance::Synthetic,
            })
            .collect(),
    )
    .unwrap();
    let same_dir = t.path().join("same");
    same.write_dir(&same_dir, ImageFormat::Imgf).unwrap();
    let ckpt = t.path().join("id.ckpt");
    save_checkpoint(&DehazeUNet::<f32>::new(NetConfig::default(), &mut Rng::new(0)), &ckpt).unwrap();

    let o = run(&["eval", "--checkpoint", p(&ckpt), "--data", p(&same_dir), "--out", p(&t.path().join("e"))]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let s = stdout(&o);
    assert!(s.contains("ssim mean 1.000000"), "{s}");
    assert!(s.contains("psnr_db mean inf"));
    assert!(s.contains("mean (3 inf excluded),inf,1.000000"));
    assert!(t.path().join("e/eval.csv").exists());
}

#[test]
fn eval_rejects_corrupt_checkpoint() {
    let t = tempfile::tempdir().unwrap();
    let d = t.path().join("d");
    synth(&d, 2, 16, 4);
    let ckpt = t.path().join("bad.ckpt");
    fs::write(&ckpt, b"not a checkpoint").unwrap();
    assert_eq!(code(&run(&["eval", "--checkpoint", p(&ckpt), "--data", p(&d)])), 3);
    let missing = t.path().join("none.ckpt");
    assert_eq!(code(&run(&["eval", "--checkpoint", p(&missing), "--data", p(&d)])), 3);
}

#[test]
fn train_echoes_config_and_replays_from_it() {
    let t = tempfile::tempdir().unwrap();
    let d = t.path().join("d");
    synth(&d, 8, 16, 5);
    let first = t.path().join("r1");
    let mut args = vec!["train", "--data", p(&d), "--out", p(&first), "--seed", "3"];
    args.extend(SMALL);
    let o = run(&args);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let s = stdout(&o);
    assert!(s.contains("# resolved config"));
    assert!(s.contains("widths=4,8,8,8,4"));
    assert!(s.contains("epoch 0 steps 2"));
    let log = fs::read_to_string(first.join("train_log.csv")).unwrap();
    assert_eq!(log.lines().next().unwrap(), "step,lr,alpha,l_ext,l_int,l_total");
    assert_eq!(log.lines().count(), 4);

    let second = t.path().join("r2");
    let cfg = first.join("config.txt");
    let o = run(&["train", "--config", p(&cfg), "--out", p(&second)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(
        fs::read(first.join("model.ckpt")).unwrap(),
        fs::read(second.join("model.ckpt")).unwrap()
    );
}

#[test]
fn train_config_errors() {
    let t = tempfile::tempdir().unwrap();
    let d = t.path().join("d");
    synth(&d, 4, 16, 5);
    let out = t.path().join("o");
    let o = run(&["train", "--data", p(&d), "--out", p(&out), "--set", "learning_rate=1"]);
    assert_eq!(code(&o), 2);
    let cfg = t.path().join("c.txt");
    fs::write(&cfg, "seed=1\nbogus_key=2\n").unwrap();
    assert_eq!(code(&run(&["train", "--config", p(&cfg), "--data", p(&d), "--out", p(&out)])), 2);
    let o = run(&["train", "--data", p(&d), "--out", p(&out), "--set", "mix_ratio=3:1"]);
    assert_eq!(code(&o), 2, "mixing without --aux");
    let o = run(&["train", "--data", p(&t.path().join("missing")), "--out", p(&out)]);
    assert_eq!(code(&o), 3);
}

#[test]
fn train_with_auxiliary_data() {
    let t = tempfile::tempdir().unwrap();
    let (d, x) = (t.path().join("d"), t.path().join("x"));
    synth(&d, 6, 16, 5);
    synth(&x, 6, 16, 6);
    let out = t.path().join("o");
    let mut args = vec![
        "train", "--data", p(&d), "--aux", p(&x), "--out", p(&out), "--set", "mix_ratio=1:1",
        "--fixed-aux-subset",
    ];
    args.extend(SMALL);
    let o = run(&args);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(stdout(&o).contains("fixed_aux_subset=true"));
}

#[test]
fn gradcheck_passes_in_64_bit() {
    let o = run(&["gradcheck", "--seed", "1", "--bits", "64"]);
    assert_eq!(code(&o), 0, "{}", stdout(&o));
    assert!(stdout(&o).contains("PASS"));
    assert_eq!(code(&run(&["gradcheck", "--bits", "16"])), 2);
}

#[test]
fn ablate_writes_four_rows() {
    let t = tempfile::tempdir().unwrap();
    let out = t.path().join("ab");
    let mut args = vec![
        "ablate", "--out", p(&out), "--set", "n_train=8", "--set", "n_test=2", "--set", "n_aux=8", "--set", "size=16",
    ];
    args.extend(SMALL);
    let o = run(&args);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let csv = fs::read_to_string(out.join("ablation.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines.len(), 5);
    assert_eq!(lines[0], "sw_ssl,rsct_3_1,rsct_1_1,psnr_db,ssim");
    assert!(lines[1].starts_with("false,false,false,"));
    assert!(lines[4].starts_with("true,false,true,"));
}

#[test]
fn thread_count_from_environment() {
    let t = tempfile::tempdir().unwrap();
    let o = Command::new(env!("CARGO_BIN_EXE_crossdehaze"))
        .args(["synth", "--n", "2", "--out", p(&t.path().join("d"))])
        .env("CROSSDEHAZE_THREADS", "1")
        .output()
        .unwrap();
    assert_eq!(code(&o), 0);
    assert_eq!(code(&run(&["--threads", "0", "synth", "--n", "2", "--out", p(&t.path().join("e"))])), 2);
}
