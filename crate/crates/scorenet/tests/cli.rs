use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_scorenet"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn run_ok(args: &[&str]) -> Output {
    let out = run(args);
    assert!(
        out.status.success(),
        "expected success for {args:?}\nstdout: {}\nstderr: {}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn stdout(out: &Output) -> String {
    String::from_utf8(out.stdout.clone()).expect("utf-8 stdout")
}

fn stderr(out: &Output) -> String {
    String::from_utf8(out.stderr.clone()).expect("utf-8 stderr")
}

const TINY_CFG: &str = "\
[model]
embed_dim = 8
depth = 2
num_heads = 2
mlp_ratio = 2.0
patch_low = 2
patch_area = 2
patch_high = 4
downscale = 2
k = 4
coarse_depth = 1
scorer_pseudo_cls = 2
local_pseudo_cls = 1
variant = 2/1
sigma = 0.05
num_samples = 16
eval_samples = 16
num_classes = 2
channels = 3

[train]
batch_size = 8
epochs = 2
base_lr = 0.05
final_lr = 0.001
split = 0.6,0.2,0.2

[bench]
warmup = 1
iters = 2
height = 32
width = 32
model = both
";

fn write_tiny_cfg(dir: &Path) -> PathBuf {
    let path = dir.join("tiny.cfg");
    std::fs::write(&path, TINY_CFG).unwrap();
    path
}

fn gen_corpus(dir: &Path, seed: &str) -> PathBuf {
    let corpus = dir.join(format!("corpus{seed}"));
    run_ok(&[
        "gen-corpus",
        "--out",
        corpus.to_str().unwrap(),
        "--count",
        "12",
        "--classes",
        "2",
        "--height",
        "32",
        "--width",
        "32",
        "--seed",
        seed,
    ]);
    corpus
}

fn train_run(dir: &Path, corpus: &Path, cfg: &Path, name: &str, seed: &str) -> PathBuf {
    let out = dir.join(name);
    run_ok(&[
        "train",
        "--data",
        corpus.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
        "--config",
        cfg.to_str().unwrap(),
        "--seed",
        seed,
    ]);
    out
}

fn strip_seconds(csv: &str) -> String {
    csv.lines()
        .map(|line| {
            let mut cols: Vec<&str> = line.split(',').collect();
            cols.pop();
            cols.join(",")
        })
        .collect::<Vec<_>>()
        .join("\n")
}

#[test]
fn help_screens_match_golden_files() {
    let golden_dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/golden");
    let screens = [
        ("help_top.txt", vec!["--help"]),
        ("help_gen_corpus.txt", vec!["gen-corpus", "--help"]),
        ("help_train.txt", vec!["train", "--help"]),
        ("help_eval.txt", vec!["eval", "--help"]),
        ("help_augment.txt", vec!["augment", "--help"]),
        ("help_inspect.txt", vec!["inspect", "--help"]),
        ("help_bench.txt", vec!["bench", "--help"]),
        ("help_budget.txt", vec!["budget", "--help"]),
    ];
    for (file, args) in screens {
        let out = run_ok(&args);
        let want = std::fs::read_to_string(golden_dir.join(file))
            .unwrap_or_else(|e| panic!("golden file {file} unreadable: {e}"));
        assert_eq!(stdout(&out), want, "help text drifted for {args:?}");
    }
}

#[test]
fn gen_corpus_is_deterministic_per_seed() {
    let tmp = tempfile::tempdir().unwrap();
    let a = gen_corpus(tmp.path(), "11");
    let b_dir = tmp.path().join("again");
    std::fs::create_dir(&b_dir).unwrap();
    let b = gen_corpus(&b_dir, "11");
    let c = gen_corpus(tmp.path(), "12");

    let manifest_a = std::fs::read(a.join("manifest.csv")).unwrap();
    let manifest_b = std::fs::read(b.join("manifest.csv")).unwrap();
    assert_eq!(manifest_a, manifest_b);

    for entry in std::fs::read_dir(&a).unwrap() {
        let name = entry.unwrap().file_name();
        let bytes_a = std::fs::read(a.join(&name)).unwrap();
        let bytes_b = std::fs::read(b.join(&name)).unwrap();
        assert_eq!(bytes_a, bytes_b, "{name:?} differs between identical seeds");
    }

    let img_a = std::fs::read(a.join("000000.ppm")).unwrap();
    let img_c = std::fs::read(c.join("000000.ppm")).unwrap();
    assert_ne!(img_a, img_c, "different seeds should draw different corpora");
}

#[test]
fn train_replays_bitwise_and_writes_artifacts() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_tiny_cfg(tmp.path());
    let corpus = gen_corpus(tmp.path(), "7");
    let r1 = train_run(tmp.path(), &corpus, &cfg, "run1", "7");
    let r2 = train_run(tmp.path(), &corpus, &cfg, "run2", "7");

    for name in ["checkpoint.bin", "checkpoint.bin.cfg", "metrics.csv"] {
        assert!(r1.join(name).exists(), "{name} missing");
    }
    let m1 = std::fs::read_to_string(r1.join("metrics.csv")).unwrap();
    let m2 = std::fs::read_to_string(r2.join("metrics.csv")).unwrap();
    assert_eq!(
        strip_seconds(&m1),
        strip_seconds(&m2),
        "identical seeds must replay identical metrics"
    );
    assert!(m1.starts_with("epoch,split,loss,weighted_f1,f1_c0,f1_c1,seconds"));
    assert!(m1.lines().any(|l| l.contains(",test,")), "best checkpoint scores the test split");

    let c1 = std::fs::read(r1.join("checkpoint.bin")).unwrap();
    let c2 = std::fs::read(r2.join("checkpoint.bin")).unwrap();
    assert_eq!(c1, c2, "identical seeds must produce identical checkpoints");

    let sibling = std::fs::read_to_string(r1.join("checkpoint.bin.cfg")).unwrap();
    assert!(sibling.contains("[model]") && sibling.contains("embed_dim = 8"));

    let r3 = train_run(tmp.path(), &corpus, &cfg, "run3", "8");
    let m3 = std::fs::read_to_string(r3.join("metrics.csv")).unwrap();
    assert_ne!(strip_seconds(&m1), strip_seconds(&m3), "a new seed must change the run");
}

#[test]
fn eval_scores_the_requested_split() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_tiny_cfg(tmp.path());
    let corpus = gen_corpus(tmp.path(), "3");
    let train_out = train_run(tmp.path(), &corpus, &cfg, "run", "3");
    let ckpt = train_out.join("checkpoint.bin");

    let eval_dir = tmp.path().join("evalout");
    let out = run_ok(&[
        "eval",
        "--data",
        corpus.to_str().unwrap(),
        "--ckpt",
        ckpt.to_str().unwrap(),
        "--split",
        "val",
        "--out",
        eval_dir.to_str().unwrap(),
        "--seed",
        "3",
    ]);
    let text = stdout(&out);
    assert!(text.contains("epoch,split,loss,weighted_f1"));
    assert!(text.lines().any(|l| l.starts_with("0,val,")), "row for the val split:\n{text}");
    let csv = std::fs::read_to_string(eval_dir.join("eval.csv")).unwrap();
    assert!(csv.lines().count() == 2, "header plus one row:\n{csv}");
}

#[test]
fn augment_writes_mixed_images_and_labels() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_tiny_cfg(tmp.path());
    let corpus = gen_corpus(tmp.path(), "5");
    let train_out = train_run(tmp.path(), &corpus, &cfg, "run", "5");
    let ckpt = train_out.join("checkpoint.bin");

    let aug = tmp.path().join("aug");
    run_ok(&[
        "augment",
        "--data",
        corpus.to_str().unwrap(),
        "--out",
        aug.to_str().unwrap(),
        "--ckpt",
        ckpt.to_str().unwrap(),
        "--count",
        "4",
        "--seed",
        "9",
    ]);
    let labels = std::fs::read_to_string(aug.join("labels.csv")).unwrap();
    let mut lines = labels.lines();
    let header = lines.next().unwrap();
    assert_eq!(
        header,
        "path,lambda_eff,y0,y1,source_id,target_id,src_top,src_left,tgt_top,tgt_left,bbox_h,bbox_w"
    );
    let rows: Vec<&str> = lines.collect();
    assert_eq!(rows.len(), 4);
    for row in rows {
        let cols: Vec<&str> = row.split(',').collect();
        assert_eq!(cols.len(), 12);
        assert!(aug.join(cols[0]).exists(), "{} missing", cols[0]);
        let lambda: f32 = cols[1].parse().unwrap();
        assert!((0.0..=1.0).contains(&lambda));
        let y0: f32 = cols[2].parse().unwrap();
        let y1: f32 = cols[3].parse().unwrap();
        assert!((y0 + y1 - 1.0).abs() < 1e-4, "target weights sum to 1: {row}");
    }
}

#[test]
fn inspect_emits_overlay_outlines_and_distribution() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_tiny_cfg(tmp.path());
    let corpus = gen_corpus(tmp.path(), "2");
    let train_out = train_run(tmp.path(), &corpus, &cfg, "run", "2");
    let ckpt = train_out.join("checkpoint.bin");

    let inspect = tmp.path().join("inspect");
    let image = corpus.join("000001.ppm");
    run_ok(&[
        "inspect",
        "--image",
        image.to_str().unwrap(),
        "--ckpt",
        ckpt.to_str().unwrap(),
        "--out",
        inspect.to_str().unwrap(),
    ]);
    for name in ["overlay.ppm", "selected.ppm", "semantic.txt"] {
        assert!(inspect.join(name).exists(), "{name} missing");
    }
    let text = std::fs::read_to_string(inspect.join("semantic.txt")).unwrap();
    let mut lines = text.lines();
    let dims: Vec<usize> =
        lines.next().unwrap().split_whitespace().map(|t| t.parse().unwrap()).collect();
    let (gh, gw) = (dims[0], dims[1]);
    let probs: Vec<f64> = lines
        .flat_map(|l| l.split_whitespace())
        .map(|t| t.parse::<f64>().unwrap())
        .collect();
    assert_eq!(probs.len(), gh * gw);
    let sum: f64 = probs.iter().sum();
    assert!((sum - 1.0).abs() < 1e-6, "distribution sums to {sum}");
    assert!(probs.iter().all(|&p| p >= 0.0));
}

#[test]
fn budget_prints_the_cost_tuple() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_tiny_cfg(tmp.path());
    let out = run_ok(&[
        "budget",
        "--config",
        cfg.to_str().unwrap(),
        "--height",
        "32",
        "--width",
        "32",
    ]);
    let text = stdout(&out);
    assert!(text.contains("vanilla,scorer,local,coarse"));
    let row = text.lines().last().unwrap();
    let vals: Vec<u64> = row.split(',').map(|t| t.parse().unwrap()).collect();
    assert_eq!(vals.len(), 4);
    assert!(vals[0] > vals[1] + vals[2] + vals[3], "two-stage budget beats vanilla");
}

#[test]
fn bench_emits_throughput_csv() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_tiny_cfg(tmp.path());
    let bench_dir = tmp.path().join("bench");
    let out = run_ok(&[
        "bench",
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        bench_dir.to_str().unwrap(),
        "--seed",
        "1",
    ]);
    let text = stdout(&out);
    assert!(text.contains("model,H,W,images_per_sec,stddev,threads"));
    assert!(text.contains("\nscorenet,32,32,"));
    assert!(text.contains("\nvanilla,32,32,"));
    let csv = std::fs::read_to_string(bench_dir.join("bench.csv")).unwrap();
    assert_eq!(csv.lines().count(), 3, "header plus two model rows:\n{csv}");
}

#[test]
fn every_run_prints_seed_and_resolved_config_first() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_tiny_cfg(tmp.path());
    let out = run_ok(&[
        "budget",
        "--config",
        cfg.to_str().unwrap(),
        "--seed",
        "42",
    ]);
    let text = stdout(&out);
    assert!(text.starts_with("seed = 42\n"), "seed line leads:\n{text}");
    let header_end = text.find("\n---\n").expect("header delimiter");
    let header = &text[..header_end];
    for key in ["[model]", "embed_dim = 8", "[train]", "batch_size = 8", "[bench]"] {
        assert!(header.contains(key), "resolved config missing {key}:\n{header}");
    }
}

#[test]
fn usage_errors_exit_one_with_a_single_stderr_line() {
    let out = run(&["train", "--data", "/tmp/nowhere"]);
    assert_eq!(out.status.code(), Some(1));
    let err = stderr(&out);
    assert_eq!(err.lines().count(), 1, "one line only:\n{err}");
    assert!(err.starts_with("error[usage]: "), "{err}");

    let out = run(&["train", "--data", "x", "--out", "y", "--bogus"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).starts_with("error[usage]: "));
}

#[test]
fn missing_data_exits_two() {
    let tmp = tempfile::tempdir().unwrap();
    let out = run(&[
        "train",
        "--data",
        tmp.path().join("nowhere").to_str().unwrap(),
        "--out",
        tmp.path().join("out").to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(2));
    let err = stderr(&out);
    assert_eq!(err.lines().count(), 1);
    assert!(err.starts_with("error[io]: "), "{err}");
}

#[test]
fn bad_config_key_exits_one() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("bad.cfg");
    std::fs::write(&cfg, "[model]\nwarp_factor = 9\n").unwrap();
    let out = run(&["budget", "--config", cfg.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).starts_with("error[config]: "));
}

#[test]
fn divergent_training_exits_three_but_keeps_artifacts() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg_text = TINY_CFG.replace("base_lr = 0.05", "base_lr = 1000000000");
    let cfg = tmp.path().join("hot.cfg");
    std::fs::write(&cfg, cfg_text).unwrap();
    let corpus = gen_corpus(tmp.path(), "4");
    let out_dir = tmp.path().join("div");
    let out = run(&[
        "train",
        "--data",
        corpus.to_str().unwrap(),
        "--out",
        out_dir.to_str().unwrap(),
        "--config",
        cfg.to_str().unwrap(),
        "--seed",
        "4",
    ]);
    assert_eq!(out.status.code(), Some(3));
    assert!(stderr(&out).starts_with("error[numeric]: "));
    for name in ["checkpoint.bin", "checkpoint.bin.cfg", "metrics.csv"] {
        assert!(out_dir.join(name).exists(), "{name} should survive divergence");
    }
}
