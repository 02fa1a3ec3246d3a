use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn reraw(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_reraw"))
        .args(args)
        .env("RERAW_WORKERS", "1")
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = reraw(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn synth(dir: &Path, count: &str) {
    ok(&["synth", "--out", s(dir), "--count", count, "--width", "136", "--height", "136", "--seed", "4"]);
}

#[test]
fn prepare_is_deterministic() {
    let t = tempfile::tempdir().unwrap();
    let data = t.path().join("data");
    synth(&data, "6");
    let m = data.join("dataset.toml");
    for name in ["a", "b"] {
        ok(&["prepare", "--manifest", s(&m), "--out", s(&t.path().join(name)), "--sampling", "stratified", "--seed", "7"]);
    }
    for f in ["index.json", "contexts.bin", "shard-0000.bin"] {
        assert_eq!(fs::read(t.path().join("a").join(f)).unwrap(), fs::read(t.path().join("b").join(f)).unwrap(), "{f}");
    }
    let index = fs::read_to_string(t.path().join("a/index.json")).unwrap();
    assert!(index.contains("\"stratified\""));
}

#[test]
fn patches_per_image_is_recorded() {
    let t = tempfile::tempdir().unwrap();
    let data = t.path().join("data");
    ok(&["synth", "--out", s(&data), "--count", "10", "--width", "136", "--height", "136", "--test-fraction", "0"]);
    let out = ok(&["prepare", "--manifest", s(&data.join("dataset.toml")), "--out", s(&t.path().join("p")), "--patches-per-image", "6"]);
    assert!(out.starts_with("60 patches from 10 images"), "{out}");
}

#[test]
fn missing_pairs_are_skipped_and_all_missing_is_an_input_error() {
    let t = tempfile::tempdir().unwrap();
    let data = t.path().join("data");
    ok(&["synth", "--out", s(&data), "--count", "3", "--width", "136", "--height", "136", "--test-fraction", "0"]);
    fs::remove_file(data.join("rgb/img_0001.png")).unwrap();
    let out = reraw(&["prepare", "--manifest", s(&data.join("dataset.toml")), "--out", s(&t.path().join("p"))]);
    assert!(out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("skipped img_0001"));

    fs::remove_dir_all(data.join("rgb")).unwrap();
    let out = reraw(&["prepare", "--manifest", s(&data.join("dataset.toml")), "--out", s(&t.path().join("q"))]);
    assert_eq!(out.status.code(), Some(2));

    let out = reraw(&["prepare", "--manifest", s(&t.path().join("nope.toml")), "--out", s(&t.path().join("r"))]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn config_violation_exits_with_invariant_code() {
    let t = tempfile::tempdir().unwrap();
    let data = t.path().join("data");
    synth(&data, "3");
    let p = t.path().join("p");
    ok(&["prepare", "--manifest", s(&data.join("dataset.toml")), "--out", s(&p), "--patches-per-image", "2"]);
    let cfg = t.path().join("bad.toml");
    fs::write(&cfg, "epochs = 3\nrestart_period_epochs = 2\n").unwrap();
    let out = reraw(&["train", "--data", s(&p), "--config", s(&cfg), "--out", s(&t.path().join("run"))]);
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&out.stderr).contains("restart_period_epochs"));
}

#[test]
fn train_convert_evaluate_pipeline() {
    let t = tempfile::tempdir().unwrap();
    let data = t.path().join("data");
    ok(&["synth", "--out", s(&data), "--count", "4", "--width", "136", "--height", "136", "--test-fraction", "0"]);
    let p = t.path().join("p");
    ok(&["prepare", "--manifest", s(&data.join("dataset.toml")), "--out", s(&p), "--patches-per-image", "4"]);
    let run = t.path().join("run");
    let out = ok(&[
        "train", "--data", s(&p), "--out", s(&run), "--desk", "--epochs", "2", "--restart-period", "1",
        "--batch-size", "8", "--heads", "1", "--no-context", "--no-scaling", "--loss", "l1",
    ]);
    assert!(out.contains("final validation loss"), "{out}");
    for f in ["final.ckpt", "epoch-0001.ckpt", "epoch-0002.ckpt", "metrics.csv", "train.toml"] {
        assert!(run.join(f).exists(), "{f}");
    }
    let metrics = fs::read_to_string(run.join("metrics.csv")).unwrap();
    assert!(metrics.starts_with("step,epoch,lr,train_loss,val_loss\n"));
    assert_eq!(metrics.lines().count(), 1 + 2 * 2);
    let cfg = fs::read_to_string(run.join("train.toml")).unwrap();
    assert!(cfg.contains("kind = \"l1\"") && cfg.contains("use_context_encoder = false"));

    let conv = t.path().join("conv");
    ok(&["convert", "--checkpoint", s(&run.join("final.ckpt")), "--out", s(&conv), s(&data.join("rgb"))]);
    let index = fs::read_to_string(conv.join("raws.json")).unwrap();
    assert!(index.contains("checkpoint_sha256"));
    for i in 0..4 {
        assert_eq!(fs::metadata(conv.join(format!("img_{i:04}.raw"))).unwrap().len(), 136 * 136 * 2);
    }

    let ev = t.path().join("eval");
    ok(&["evaluate", "--pred", s(&conv), "--target", s(&data.join("raw")), "--out", s(&ev)]);
    let csv = fs::read_to_string(ev.join("metrics.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "image_id,psnr_db,ssim");
    assert_eq!(lines.len(), 1 + 4 + 1);
    assert!(lines[5].starts_with("mean,"));
    assert!(ev.join("psnr_histogram.svg").exists());

    // Resume continues from the stored epoch; nothing left to do.
    let out = ok(&["train", "--data", s(&p), "--out", s(&t.path().join("resumed")), "--resume", s(&run.join("final.ckpt"))]);
    assert!(out.contains("final validation loss"));
}

#[test]
fn evaluating_targets_against_themselves_is_exact() {
    let t = tempfile::tempdir().unwrap();
    let data = t.path().join("data");
    synth(&data, "2");
    let ev = t.path().join("eval");
    let out = ok(&["evaluate", "--pred", s(&data.join("raw")), "--target", s(&data.join("raw")), "--out", s(&ev)]);
    assert!(out.contains("mean SSIM 1.00000"), "{out}");
    let csv = fs::read_to_string(ev.join("metrics.csv")).unwrap();
    assert!(csv.lines().last().unwrap().starts_with("mean,100,1"));
}

#[test]
fn stratified_population_has_higher_entropy() {
    let t = tempfile::tempdir().unwrap();
    let data = t.path().join("data");
    ok(&["synth", "--out", s(&data), "--count", "30", "--seed", "2", "--test-fraction", "0"]);
    let m = data.join("dataset.toml");
    for method in ["random", "stratified"] {
        ok(&["prepare", "--manifest", s(&m), "--out", s(&t.path().join(method)), "--sampling", method, "--seed", "1"]);
    }
    let st = t.path().join("stats");
    ok(&[
        "stats", "--manifest", s(&m), "--patches", s(&t.path().join("random")), "--patches",
        s(&t.path().join("stratified")), "--out", s(&st),
    ]);
    let summary = fs::read_to_string(st.join("summary.json")).unwrap();
    let entropies = |label: &str| -> Vec<f64> {
        let at = summary.find(&format!("\"label\": \"{label}\"")).unwrap();
        let rest = &summary[at..];
        let open = rest.find('[').unwrap();
        let close = rest.find(']').unwrap();
        rest[open + 1..close].split(',').map(|v| v.trim().parse().unwrap()).collect()
    };
    let (r, st_e) = (entropies("random"), entropies("stratified"));
    for c in 0..3 {
        assert!(st_e[c] > r[c], "channel {c}: {} <= {}", st_e[c], r[c]);
    }
    for f in ["histograms.csv", "histogram_red.svg", "histogram_green.svg", "histogram_blue.svg"] {
        assert!(st.join(f).exists(), "{f}");
    }
}

#[test]
fn unknown_sampling_method_is_rejected() {
    let out = reraw(&["prepare", "--manifest", "x", "--out", "y", "--sampling", "uniform"]);
    assert_eq!(out.status.code(), Some(2));
}
