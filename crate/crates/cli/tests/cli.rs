use std::path::Path;
use std::process::{Command, Output};

use mmrinet::data::{save_volume, Volume};
use mmrinet::model::{load_checkpoint, MmriNet, ModelConfig};
use mmrinet::Tensor;
use serde_json::Value;

fn mmrinet(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mmrinet"))
        .args(args)
        .output()
        .expect("spawn mmrinet")
}

fn json(args: &[&str]) -> Value {
    let mut all = vec!["--json"];
    all.extend_from_slice(args);
    let out = mmrinet(&all);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    serde_json::from_slice(&out.stdout).expect("json output")
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

/// Three-channel mask volume with `f(c, z, y, x)` as foreground.
fn mask_volume(path: &Path, dims: [usize; 3], f: impl Fn(usize, usize, usize, usize) -> bool) {
    let [d, h, w] = dims;
    let t = Tensor::from_fn([3, d, h, w], |i| {
        let (c, r) = (i / (d * h * w), i % (d * h * w));
        f(c, r / (h * w), (r / w) % h, r % w) as u8 as f32
    });
    save_volume(&Volume::new(t, [1.0; 3]).unwrap(), path).unwrap();
}

#[test]
fn paramcount_shrinks_with_each_ablation() {
    let full = json(&["paramcount"]);
    let total = |v: &Value| v["total"].as_u64().unwrap();
    assert_eq!(total(&full), 2_727_890);
    assert_eq!(full["inference"].as_u64().unwrap(), total(&full) - full["aux_heads"].as_u64().unwrap());
    let mut prev = total(&full);
    let mut flags = vec!["paramcount"];
    for flag in ["--no-dpfr", "--no-pfa", "--no-deep-supervision"] {
        flags.push(flag);
        let t = total(&json(&flags));
        assert!(t < prev, "{flag}: {t} !< {prev}");
        prev = t;
    }
}

#[test]
fn paramcount_writes_files() {
    let dir = tempfile::tempdir().unwrap();
    let out = mmrinet(&["paramcount", "--no-pfa", "--out", p(dir.path())]);
    assert!(out.status.success());
    let txt = std::fs::read_to_string(dir.path().join("params.txt")).unwrap();
    assert!(txt.lines().any(|l| l == "pfa=0"), "{txt}");
    let j: Value = serde_json::from_str(&std::fs::read_to_string(dir.path().join("params.json")).unwrap()).unwrap();
    assert_eq!(j["config"]["pfa"], Value::Bool(false));
}

#[test]
fn invalid_input_exits_with_2() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.toml");
    std::fs::write(&cfg, "seed = 1\nlearning_rate = 0.1\n").unwrap();
    let out = mmrinet(&["paramcount", "--config", p(&cfg)]);
    assert_eq!(out.status.code(), Some(2), "{}", stderr(&out));
    assert!(stderr(&out).contains("learning_rate"));

    let out = mmrinet(&["train-toy", "--crop", "20", "--steps", "1", "--out", p(dir.path())]);
    assert_eq!(out.status.code(), Some(2), "{}", stderr(&out));

    let missing = dir.path().join("missing.mvol");
    let out = mmrinet(&["eval", "--pred", p(&missing), "--label", p(&missing)]);
    assert_eq!(out.status.code(), Some(2));

    let out = mmrinet(&["bench-scan", "--lengths", "0"]);
    assert_eq!(out.status.code(), Some(2));

    let out = mmrinet(&["synth", "--dims", "8,8", "--out", p(dir.path())]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn corrupted_gradient_exits_with_3_and_names_the_operator() {
    let out = mmrinet(&["gradcheck", "--scope", "op", "--corrupt", "selective_scan"]);
    let listing = String::from_utf8_lossy(&out.stdout);
    assert!(listing.lines().any(|l| l.starts_with("FAIL selective_scan ")), "{listing}");
    assert_eq!(out.status.code(), Some(3));
    assert_eq!(listing.lines().filter(|l| l.starts_with("FAIL")).count(), 1);
    assert!(stderr(&out).contains("selective_scan"));

    let out = mmrinet(&["gradcheck", "--corrupt", "no_such_op"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn op_gradcheck_passes() {
    let v = json(&["gradcheck", "--scope", "op"]);
    assert_eq!(v["passed"], Value::Bool(true));
    assert!(v["checks"].as_array().unwrap().len() >= 40);
}

#[test]
fn eval_identical_empty_and_half_overlap() {
    let dir = tempfile::tempdir().unwrap();
    let dims = [8, 8, 8];
    let label = dir.path().join("label.mvol");
    mask_volume(&label, dims, |_, z, y, x| (2..6).contains(&z) && (2..6).contains(&y) && (2..6).contains(&x));

    let same = json(&["eval", "--pred", p(&label), "--label", p(&label)]);
    assert_eq!(same["dice_avg"].as_f64(), Some(1.0));
    assert_eq!(same["hd95_avg"].as_f64(), Some(0.0));

    let empty = dir.path().join("empty.mvol");
    mask_volume(&empty, dims, |_, _, _, _| false);
    let e = json(&["eval", "--pred", p(&empty), "--label", p(&label)]);
    assert_eq!(e["dice_wt"].as_f64(), Some(0.0));
    let diag = (3.0f64 * 64.0).sqrt();
    assert!((e["hd95_wt"].as_f64().unwrap() - diag).abs() < 1e-12);
    let e = json(&["eval", "--pred", p(&empty), "--label", p(&label), "--empty-penalty", "373.13"]);
    assert_eq!(e["hd95_et"].as_f64(), Some(373.13));

    // the prediction covers the lower half of the cube in z
    let half = dir.path().join("half.mvol");
    mask_volume(&half, dims, |_, z, y, x| (2..4).contains(&z) && (2..6).contains(&y) && (2..6).contains(&x));
    let h = json(&["eval", "--pred", p(&half), "--label", p(&label)]);
    let dice = 2.0 * 32.0 / (32.0 + 64.0);
    assert!((h["dice_tc"].as_f64().unwrap() - dice).abs() < 1e-12);

    let both = json(&["eval", "--pred", p(&empty), "--label", p(&empty)]);
    assert_eq!(both["dice_avg"].as_f64(), Some(1.0));
    assert_eq!(both["hd95_avg"].as_f64(), Some(0.0));
}

#[test]
fn eval_writes_key_values() {
    let dir = tempfile::tempdir().unwrap();
    let label = dir.path().join("label.mvol");
    mask_volume(&label, [4, 4, 4], |c, z, _, _| c == 0 && z < 2);
    let out = mmrinet(&["eval", "--pred", p(&label), "--label", p(&label), "--out", p(dir.path())]);
    assert!(out.status.success());
    let txt = std::fs::read_to_string(dir.path().join("metrics.txt")).unwrap();
    assert!(txt.contains("dice_wt=1"), "{txt}");
}

#[test]
fn zero_steps_leave_the_initial_weights() {
    let dir = tempfile::tempdir().unwrap();
    let out = mmrinet(&["train-toy", "--crop", "16", "--steps", "0", "--seed", "5", "--out", p(dir.path())]);
    assert!(out.status.success(), "{}", stderr(&out));
    let ckpt = load_checkpoint(dir.path().join("checkpoint.mmri")).unwrap();
    let (_, init) = MmriNet::new::<f32>(ModelConfig::default(), 5).unwrap();
    assert_eq!(ckpt.store.params().len(), init.params().len());
    for (a, b) in ckpt.store.params().iter().zip(init.params()) {
        assert_eq!(a.name, b.name);
        assert_eq!(a.value.data(), b.value.data(), "{}", a.name);
    }
    let log = std::fs::read_to_string(dir.path().join("losses.tsv")).unwrap();
    assert_eq!(log, "step\tloss\n");
}

#[test]
fn training_is_bit_reproducible() {
    let run = || {
        let dir = tempfile::tempdir().unwrap();
        let out = mmrinet(&["train-toy", "--crop", "16", "--steps", "3", "--out", p(dir.path())]);
        assert!(out.status.success(), "{}", stderr(&out));
        let read = |f: &str| std::fs::read(dir.path().join(f)).unwrap();
        (read("losses.tsv"), read("checkpoint.mmri"), read("metrics.txt"))
    };
    let a = run();
    assert_eq!(String::from_utf8_lossy(&a.0).lines().count(), 4);
    assert!(a == run());
}

#[test]
fn train_then_infer_then_eval() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    assert!(mmrinet(&["synth", "--dims", "16", "--seed", "2", "--out", p(d)]).status.success());
    let run = d.join("run");
    let out = mmrinet(&[
        "train-toy",
        "--crop",
        "16",
        "--steps",
        "2",
        "--image",
        p(&d.join("image.mvol")),
        "--label",
        p(&d.join("label.mvol")),
        "--out",
        p(&run),
    ]);
    assert!(out.status.success(), "{}", stderr(&out));
    let pred = d.join("pred.mvol");
    let out = mmrinet(&[
        "infer",
        "--checkpoint",
        p(&run.join("checkpoint.mmri")),
        "--input",
        p(&d.join("image.mvol")),
        "--out",
        p(&pred),
    ]);
    assert!(out.status.success(), "{}", stderr(&out));
    let v = json(&["eval", "--pred", p(&pred), "--label", p(&d.join("label.mvol"))]);
    let dice = v["dice_avg"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&dice));
}

#[test]
fn bench_at_length_one() {
    let v = json(&["bench-scan", "--lengths", "1", "--runs", "1"]);
    let row = &v["rows"][0];
    assert_eq!(row["length"].as_u64(), Some(1));
    assert_eq!(row["scan_output_shape"], serde_json::json!([32, 1]));
    assert_eq!(row["attention_output_shape"], serde_json::json!([1, 16]));
}

#[test]
fn synth_writes_an_image_label_pair() {
    let dir = tempfile::tempdir().unwrap();
    let out = mmrinet(&["synth", "--dims", "8,12,16", "--out", p(dir.path())]);
    assert!(out.status.success());
    let img = mmrinet::data::load_volume(dir.path().join("image.mvol")).unwrap();
    let lab = mmrinet::data::load_volume(dir.path().join("label.mvol")).unwrap();
    assert_eq!(img.data.shape(), &[4, 8, 12, 16]);
    assert_eq!(lab.data.shape(), &[3, 8, 12, 16]);
}
