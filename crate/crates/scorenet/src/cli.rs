//! Command-line front end: a single binary with subcommands for corpus
//! generation, training, evaluation, augmentation previews, attention
//! inspection, throughput benchmarks, and cost reporting.
//!
//! Exit codes: 0 success, 1 usage or configuration error, 2 data or
//! format error, 3 numeric failure. Every failure also prints a single
//! `error[kind]: message` line on stderr. Every run prints its resolved
//! configuration and seed before doing any work, in the same `key =
//! value` format the config file uses, so a printed header can be saved
//! and replayed as a config.

use std::ffi::OsString;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use clap::{value_parser, Arg, ArgMatches, Command};

use crate::corpus::{generate_corpus, read_corpus, stratified_split, write_corpus, Sample};
use crate::encoder::EncoderConfig;
use crate::error::{Error, Result};
use crate::harness::bench::{bench_two_stage, bench_vanilla, BenchResult, BENCH_CSV_HEADER};
use crate::harness::metrics::{metrics_csv, MetricsRow};
use crate::harness::train::{evaluate, train_with_progress, Augmentation, TrainConfig};
use crate::harness::budget::token_budget;
use crate::infer::{infer_forward, infer_semantic, VanillaParams};
use crate::model::{ScoreNetConfig, ScoreNetParams};
use crate::numerics::checkpoint::{load_checkpoint, save_checkpoint};
use crate::numerics::{RngStream, Tensor};
use crate::scoremix::{mix_pair, sample_masks, MixStrategy};
use crate::semantic::{AggregationMode, SemanticDistribution};

/// Everything a run needs, resolved from defaults, an optional config
/// file, and flags, in that order.
#[derive(Debug, Clone)]
pub struct RunConfig {
    pub model: ScoreNetConfig,
    pub train: TrainConfig,
    pub split: (f32, f32, f32),
    pub bench: BenchSettings,
}

#[derive(Debug, Clone)]
pub struct BenchSettings {
    pub warmup: usize,
    pub iters: usize,
    pub height: usize,
    pub width: usize,
    pub target: BenchTarget,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BenchTarget {
    Both,
    TwoStage,
    Vanilla,
}

impl BenchTarget {
    fn parse(s: &str) -> Result<Self> {
        match s {
            "both" => Ok(BenchTarget::Both),
            "scorenet" => Ok(BenchTarget::TwoStage),
            "vanilla" => Ok(BenchTarget::Vanilla),
            other => Err(Error::config(format!(
                "bench model '{other}' is not one of both|scorenet|vanilla"
            ))),
        }
    }

    fn name(&self) -> &'static str {
        match self {
            BenchTarget::Both => "both",
            BenchTarget::TwoStage => "scorenet",
            BenchTarget::Vanilla => "vanilla",
        }
    }
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            model: ScoreNetConfig::desk_default(),
            train: TrainConfig::default(),
            split: (0.7, 0.15, 0.15),
            bench: BenchSettings {
                warmup: 1,
                iters: 3,
                height: 512,
                width: 512,
                target: BenchTarget::Both,
            },
        }
    }
}

fn pu(section: &str, key: &str, val: &str) -> Result<usize> {
    val.parse().map_err(|_| {
        Error::config(format!("[{section}] {key} = {val} is not a non-negative integer"))
    })
}

fn pf(section: &str, key: &str, val: &str) -> Result<f32> {
    val.parse()
        .map_err(|_| Error::config(format!("[{section}] {key} = {val} is not a number")))
}

fn apply_key(run: &mut RunConfig, section: &str, key: &str, val: &str) -> Result<()> {
    match (section, key) {
        ("model", "embed_dim") => {
            let v = pu(section, key, val)?;
            run.model.scorer.embed_dim = v;
            run.model.local.embed_dim = v;
        }
        ("model", "depth") => {
            let v = pu(section, key, val)?;
            run.model.scorer.depth = v;
            run.model.local.depth = v;
        }
        ("model", "num_heads") => {
            let v = pu(section, key, val)?;
            run.model.scorer.num_heads = v;
            run.model.local.num_heads = v;
        }
        ("model", "mlp_ratio") => {
            let v = pf(section, key, val)?;
            run.model.scorer.mlp_ratio = v;
            run.model.local.mlp_ratio = v;
        }
        ("model", "patch_low") => run.model.scorer.patch_size = pu(section, key, val)?,
        ("model", "patch_area") => run.model.local.patch_size = pu(section, key, val)?,
        ("model", "patch_high") => run.model.patch_high = pu(section, key, val)?,
        ("model", "downscale") => run.model.downscale = pu(section, key, val)?,
        ("model", "k") => run.model.k = pu(section, key, val)?,
        ("model", "coarse_depth") => run.model.coarse_depth = pu(section, key, val)?,
        ("model", "scorer_pseudo_cls") => {
            run.model.scorer.num_pseudo_cls = pu(section, key, val)?
        }
        ("model", "local_pseudo_cls") => run.model.local.num_pseudo_cls = pu(section, key, val)?,
        ("model", "variant") => {
            let (x, y) = val.split_once('/').ok_or_else(|| {
                Error::config(format!("[model] variant = {val} is not of the form x/y"))
            })?;
            run.model.variant = (pu(section, "variant x", x)?, pu(section, "variant y", y)?);
        }
        ("model", "sigma") => run.model.sigma = pf(section, key, val)?,
        ("model", "num_samples") => run.model.num_samples = pu(section, key, val)?,
        ("model", "eval_samples") => run.model.eval_samples = pu(section, key, val)?,
        ("model", "num_classes") => run.model.num_classes = pu(section, key, val)?,
        ("model", "channels") => run.model.channels = pu(section, key, val)?,
        ("model", "cls_query_offset") => run.model.cls_query_offset = pu(section, key, val)?,
        ("model", "aggregation") => {
            run.model.aggregation = match val {
                "pre_softmax" => AggregationMode::PreSoftmax,
                "post_softmax" => AggregationMode::PostSoftmax,
                other => {
                    return Err(Error::config(format!(
                        "[model] aggregation = {other} is not pre_softmax or post_softmax"
                    )))
                }
            }
        }
        ("train", "batch_size") => run.train.batch_size = pu(section, key, val)?,
        ("train", "epochs") => run.train.epochs = pu(section, key, val)?,
        ("train", "base_lr") => run.train.base_lr = pf(section, key, val)?,
        ("train", "final_lr") => run.train.final_lr = pf(section, key, val)?,
        ("train", "momentum") => run.train.momentum = pf(section, key, val)?,
        ("train", "augmentation") => run.train.augmentation = Augmentation::parse(val)?,
        ("train", "data_fraction") => run.train.data_fraction = pf(section, key, val)?,
        ("train", "mix_probability") => run.train.mix_probability = pf(section, key, val)?,
        ("train", "split") => {
            let parts: Vec<&str> = val.split(',').map(str::trim).collect();
            if parts.len() != 3 {
                return Err(Error::config(format!(
                    "[train] split = {val} needs three comma-separated fractions"
                )));
            }
            run.split = (
                pf(section, "split train", parts[0])?,
                pf(section, "split val", parts[1])?,
                pf(section, "split test", parts[2])?,
            );
        }
        ("bench", "warmup") => run.bench.warmup = pu(section, key, val)?,
        ("bench", "iters") => run.bench.iters = pu(section, key, val)?,
        ("bench", "height") => run.bench.height = pu(section, key, val)?,
        ("bench", "width") => run.bench.width = pu(section, key, val)?,
        ("bench", "model") => run.bench.target = BenchTarget::parse(val)?,
        ("", k) => {
            return Err(Error::config(format!(
                "key {k} appears before any [section] header"
            )))
        }
        (s, k) => return Err(Error::config(format!("unknown key '{k}' in section [{s}]"))),
    }
    Ok(())
}

/// Applies `key = value` lines from a config file on top of `base`.
/// Blank lines and `#` comments are skipped; sections are `[model]`,
/// `[train]`, and `[bench]`; unknown sections or keys are rejected.
pub fn parse_config(text: &str, base: RunConfig) -> Result<RunConfig> {
    let mut run = base;
    let mut section = String::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        if let Some(body) = line.strip_prefix('[') {
            let name = body.strip_suffix(']').ok_or_else(|| {
                Error::config(format!("line {}: malformed section header '{line}'", lineno + 1))
            })?;
            if !matches!(name, "model" | "train" | "bench") {
                return Err(Error::config(format!(
                    "line {}: unknown section [{name}]",
                    lineno + 1
                )));
            }
            section = name.to_string();
            continue;
        }
        let (key, val) = line.split_once('=').ok_or_else(|| {
            Error::config(format!("line {}: expected 'key = value', got '{line}'", lineno + 1))
        })?;
        apply_key(&mut run, &section, key.trim(), val.trim())
            .map_err(|e| Error::config(format!("line {}: {e}", lineno + 1)))?;
    }
    Ok(run)
}

/// Renders the full resolved configuration in config-file syntax. The
/// file format shares the encoder dimensions between the scorer and
/// local stages, so rendering a config where they diverge would lose
/// information and is rejected.
pub fn render_config(run: &RunConfig) -> Result<String> {
    let m = &run.model;
    if m.scorer.embed_dim != m.local.embed_dim
        || m.scorer.depth != m.local.depth
        || m.scorer.num_heads != m.local.num_heads
        || m.scorer.mlp_ratio != m.local.mlp_ratio
    {
        return Err(Error::config(
            "config files share encoder dims between stages, but this config's scorer and local encoders differ",
        ));
    }
    let aggregation = match m.aggregation {
        AggregationMode::PreSoftmax => "pre_softmax",
        AggregationMode::PostSoftmax => "post_softmax",
    };
    let mut out = String::new();
    let _ = writeln!(out, "[model]");
    let _ = writeln!(out, "embed_dim = {}", m.scorer.embed_dim);
    let _ = writeln!(out, "depth = {}", m.scorer.depth);
    let _ = writeln!(out, "num_heads = {}", m.scorer.num_heads);
    let _ = writeln!(out, "mlp_ratio = {}", m.scorer.mlp_ratio);
    let _ = writeln!(out, "patch_low = {}", m.scorer.patch_size);
    let _ = writeln!(out, "patch_area = {}", m.local.patch_size);
    let _ = writeln!(out, "patch_high = {}", m.patch_high);
    let _ = writeln!(out, "downscale = {}", m.downscale);
    let _ = writeln!(out, "k = {}", m.k);
    let _ = writeln!(out, "coarse_depth = {}", m.coarse_depth);
    let _ = writeln!(out, "scorer_pseudo_cls = {}", m.scorer.num_pseudo_cls);
    let _ = writeln!(out, "local_pseudo_cls = {}", m.local.num_pseudo_cls);
    let _ = writeln!(out, "variant = {}/{}", m.variant.0, m.variant.1);
    let _ = writeln!(out, "sigma = {}", m.sigma);
    let _ = writeln!(out, "num_samples = {}", m.num_samples);
    let _ = writeln!(out, "eval_samples = {}", m.eval_samples);
    let _ = writeln!(out, "num_classes = {}", m.num_classes);
    let _ = writeln!(out, "channels = {}", m.channels);
    let _ = writeln!(out, "cls_query_offset = {}", m.cls_query_offset);
    let _ = writeln!(out, "aggregation = {aggregation}");
    let t = &run.train;
    let _ = writeln!(out, "[train]");
    let _ = writeln!(out, "batch_size = {}", t.batch_size);
    let _ = writeln!(out, "epochs = {}", t.epochs);
    let _ = writeln!(out, "base_lr = {}", t.base_lr);
    let _ = writeln!(out, "final_lr = {}", t.final_lr);
    let _ = writeln!(out, "momentum = {}", t.momentum);
    let _ = writeln!(out, "augmentation = {}", t.augmentation.name());
    let _ = writeln!(out, "data_fraction = {}", t.data_fraction);
    let _ = writeln!(out, "mix_probability = {}", t.mix_probability);
    let _ = writeln!(out, "split = {},{},{}", run.split.0, run.split.1, run.split.2);
    let b = &run.bench;
    let _ = writeln!(out, "[bench]");
    let _ = writeln!(out, "warmup = {}", b.warmup);
    let _ = writeln!(out, "iters = {}", b.iters);
    let _ = writeln!(out, "height = {}", b.height);
    let _ = writeln!(out, "width = {}", b.width);
    let _ = writeln!(out, "model = {}", b.target.name());
    Ok(out)
}

fn load_run_config(matches: &ArgMatches) -> Result<RunConfig> {
    match matches.get_one::<PathBuf>("config") {
        Some(path) => {
            let text = std::fs::read_to_string(path)?;
            parse_config(&text, RunConfig::default())
        }
        None => Ok(RunConfig::default()),
    }
}

fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Config(_) => 1,
        Error::Shape(_) | Error::Contract(_) | Error::Format { .. } | Error::Io(_) => 2,
        Error::Numeric(_) => 3,
    }
}

fn error_kind(err: &Error) -> &'static str {
    match err {
        Error::Config(_) => "config",
        Error::Shape(_) => "shape",
        Error::Contract(_) => "contract",
        Error::Numeric(_) => "numeric",
        Error::Format { .. } => "format",
        Error::Io(_) => "io",
    }
}

fn one_line(err: &Error) -> String {
    format!("error[{}]: {}", error_kind(err), err.to_string().replace('\n', "; "))
}

fn seed_arg() -> Arg {
    Arg::new("seed")
        .long("seed")
        .value_name("N")
        .help("Root seed for every random stream")
        .value_parser(value_parser!(u64))
        .default_value("0")
}

fn threads_arg() -> Arg {
    Arg::new("threads")
        .long("threads")
        .value_name("N")
        .help("Declared worker budget, recorded in reports; compute is sequential")
        .value_parser(value_parser!(usize))
        .default_value("1")
}

fn config_arg() -> Arg {
    Arg::new("config")
        .long("config")
        .value_name("FILE")
        .help("Config file ([model]/[train]/[bench] sections of key = value lines)")
        .value_parser(value_parser!(PathBuf))
}

fn out_arg(help: &'static str) -> Arg {
    Arg::new("out")
        .long("out")
        .value_name("DIR")
        .help(help)
        .value_parser(value_parser!(PathBuf))
}

fn build_command() -> Command {
    Command::new("scorenet")
        .about("Two-stage attention pipeline: region recommendation at low resolution, then fine local and coarse global encoding, with semantic mixing augmentation")
        .term_width(80)
        .subcommand_required(true)
        .arg_required_else_help(true)
        .disable_version_flag(true)
        .subcommand(
            Command::new("gen-corpus")
                .about("Generate a synthetic textured-blob classification corpus")
                .arg(out_arg("Directory for images, masks, and manifest.csv").required(true))
                .arg(seed_arg())
                .arg(
                    Arg::new("count")
                        .long("count")
                        .value_name("N")
                        .help("Number of images")
                        .value_parser(value_parser!(usize))
                        .default_value("500"),
                )
                .arg(
                    Arg::new("classes")
                        .long("classes")
                        .value_name("C")
                        .help("Number of classes (2 to 12)")
                        .value_parser(value_parser!(usize))
                        .default_value("4"),
                )
                .arg(
                    Arg::new("height")
                        .long("height")
                        .value_name("H")
                        .help("Image height in pixels")
                        .value_parser(value_parser!(usize))
                        .default_value("256"),
                )
                .arg(
                    Arg::new("width")
                        .long("width")
                        .value_name("W")
                        .help("Image width in pixels")
                        .value_parser(value_parser!(usize))
                        .default_value("256"),
                ),
        )
        .subcommand(
            Command::new("train")
                .about("Train on a corpus; writes checkpoint.bin, its .cfg sibling, and metrics.csv")
                .arg(
                    Arg::new("data")
                        .long("data")
                        .value_name("PATH")
                        .help("Corpus directory or manifest.csv path")
                        .value_parser(value_parser!(PathBuf))
                        .required(true),
                )
                .arg(out_arg("Directory for checkpoint and metrics").required(true))
                .arg(config_arg())
                .arg(seed_arg())
                .arg(threads_arg()),
        )
        .subcommand(
            Command::new("eval")
                .about("Evaluate a checkpoint on one split of a corpus")
                .arg(
                    Arg::new("data")
                        .long("data")
                        .value_name("PATH")
                        .help("Corpus directory or manifest.csv path")
                        .value_parser(value_parser!(PathBuf))
                        .required(true),
                )
                .arg(
                    Arg::new("ckpt")
                        .long("ckpt")
                        .value_name("FILE")
                        .help("Checkpoint written by train (reads FILE.cfg for the model shape)")
                        .value_parser(value_parser!(PathBuf))
                        .required(true),
                )
                .arg(
                    Arg::new("split")
                        .long("split")
                        .value_name("NAME")
                        .help("Which split to score")
                        .value_parser(["train", "val", "test"])
                        .default_value("test"),
                )
                .arg(out_arg("Optional directory for eval.csv"))
                .arg(config_arg())
                .arg(seed_arg())
                .arg(threads_arg()),
        )
        .subcommand(
            Command::new("augment")
                .about("Write mixed samples for a corpus plus a labels CSV")
                .arg(
                    Arg::new("data")
                        .long("data")
                        .value_name("PATH")
                        .help("Corpus directory or manifest.csv path")
                        .value_parser(value_parser!(PathBuf))
                        .required(true),
                )
                .arg(out_arg("Directory for mixed images and labels.csv").required(true))
                .arg(
                    Arg::new("ckpt")
                        .long("ckpt")
                        .value_name("FILE")
                        .help("Checkpoint guiding cut/paste locations; omit for uniform locations")
                        .value_parser(value_parser!(PathBuf)),
                )
                .arg(
                    Arg::new("count")
                        .long("count")
                        .value_name("N")
                        .help("Mixed samples to write (0 means one per corpus image)")
                        .value_parser(value_parser!(usize))
                        .default_value("0"),
                )
                .arg(config_arg())
                .arg(seed_arg()),
        )
        .subcommand(
            Command::new("inspect")
                .about("Render the patch-relevance overlay and selected-region outlines for one image")
                .arg(
                    Arg::new("image")
                        .long("image")
                        .value_name("FILE")
                        .help("Input image (PPM, P6)")
                        .value_parser(value_parser!(PathBuf))
                        .required(true),
                )
                .arg(
                    Arg::new("ckpt")
                        .long("ckpt")
                        .value_name("FILE")
                        .help("Checkpoint written by train (reads FILE.cfg for the model shape)")
                        .value_parser(value_parser!(PathBuf))
                        .required(true),
                )
                .arg(out_arg("Directory for overlay.ppm, selected.ppm, semantic.txt").required(true))
                .arg(config_arg())
                .arg(seed_arg()),
        )
        .subcommand(
            Command::new("bench")
                .about("Measure inference throughput on a random image")
                .arg(config_arg())
                .arg(out_arg("Optional directory for bench.csv"))
                .arg(seed_arg())
                .arg(threads_arg()),
        )
        .subcommand(
            Command::new("budget")
                .about("Print the attention-pair cost tuple for a config and image size")
                .arg(config_arg())
                .arg(
                    Arg::new("height")
                        .long("height")
                        .value_name("H")
                        .help("Image height in pixels")
                        .value_parser(value_parser!(usize))
                        .default_value("256"),
                )
                .arg(
                    Arg::new("width")
                        .long("width")
                        .value_name("W")
                        .help("Image width in pixels")
                        .value_parser(value_parser!(usize))
                        .default_value("256"),
                )
                .arg(seed_arg()),
        )
}

/// Entry point used by `main`; returns the process exit code.
pub fn run(args: impl IntoIterator<Item = OsString>) -> i32 {
    let matches = match build_command().try_get_matches_from(args) {
        Ok(m) => m,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                print!("{e}");
                return 0;
            }
            let msg = e.to_string();
            let first_paragraph: Vec<&str> = msg
                .lines()
                .take_while(|l| !l.trim().is_empty())
                .map(str::trim)
                .collect();
            let joined = first_paragraph.join(" ");
            eprintln!("error[usage]: {}", joined.trim_start_matches("error: "));
            return 1;
        }
    };
    let result = match matches.subcommand() {
        Some(("gen-corpus", m)) => cmd_gen_corpus(m),
        Some(("train", m)) => cmd_train(m),
        Some(("eval", m)) => cmd_eval(m),
        Some(("augment", m)) => cmd_augment(m),
        Some(("inspect", m)) => cmd_inspect(m),
        Some(("bench", m)) => cmd_bench(m),
        Some(("budget", m)) => cmd_budget(m),
        _ => unreachable!("subcommand_required"),
    };
    match result {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("{}", one_line(&e));
            exit_code(&e)
        }
    }
}

fn print_header(seed: u64, extras: &[(&str, String)], run: Option<&RunConfig>) -> Result<()> {
    println!("seed = {seed}");
    for (key, val) in extras {
        println!("{key} = {val}");
    }
    if let Some(run) = run {
        print!("{}", render_config(run)?);
    }
    println!("---");
    Ok(())
}

fn manifest_path(data: &Path) -> PathBuf {
    if data.is_dir() {
        data.join("manifest.csv")
    } else {
        data.to_path_buf()
    }
}

fn cmd_gen_corpus(m: &ArgMatches) -> Result<()> {
    let out = m.get_one::<PathBuf>("out").expect("required");
    let seed = *m.get_one::<u64>("seed").expect("defaulted");
    let count = *m.get_one::<usize>("count").expect("defaulted");
    let classes = *m.get_one::<usize>("classes").expect("defaulted");
    let height = *m.get_one::<usize>("height").expect("defaulted");
    let width = *m.get_one::<usize>("width").expect("defaulted");
    print_header(
        seed,
        &[
            ("out", out.display().to_string()),
            ("count", count.to_string()),
            ("classes", classes.to_string()),
            ("height", height.to_string()),
            ("width", width.to_string()),
        ],
        None,
    )?;
    let samples = generate_corpus(count, classes, height, width, seed)?;
    let manifest = write_corpus(out, &samples)?;
    println!("wrote {} images to {}", samples.len(), manifest.display());
    Ok(())
}

fn split_indices(
    samples: &[Sample],
    fractions: (f32, f32, f32),
    seed: u64,
) -> Result<(Vec<usize>, Vec<usize>, Vec<usize>)> {
    let labels: Vec<usize> = samples.iter().map(|s| s.label).collect();
    stratified_split(&labels, fractions, seed)
}

fn cmd_train(m: &ArgMatches) -> Result<()> {
    let data = m.get_one::<PathBuf>("data").expect("required");
    let out = m.get_one::<PathBuf>("out").expect("required");
    let seed = *m.get_one::<u64>("seed").expect("defaulted");
    let threads = *m.get_one::<usize>("threads").expect("defaulted");
    let run = load_run_config(m)?;
    print_header(
        seed,
        &[
            ("threads", threads.to_string()),
            ("data", data.display().to_string()),
            ("out", out.display().to_string()),
        ],
        Some(&run),
    )?;
    run.model.validate()?;
    run.train.validate()?;

    let samples = read_corpus(&manifest_path(data))?;
    let (train_idx, val_idx, test_idx) = split_indices(&samples, run.split, seed)?;
    println!(
        "splits: {} train / {} val / {} test",
        train_idx.len(),
        val_idx.len(),
        test_idx.len()
    );

    let mut rng = RngStream::new(seed, 0);
    let params = ScoreNetParams::init(&run.model, &mut rng)?;
    println!("{}", MetricsRow::csv_header(run.model.num_classes));
    let report = train_with_progress(
        &run.model,
        &run.train,
        &samples,
        &train_idx,
        &val_idx,
        params,
        &mut rng,
        |row| println!("{}", row.to_csv()),
    )?;

    std::fs::create_dir_all(out)?;
    let ckpt_path = out.join("checkpoint.bin");
    save_checkpoint(&ckpt_path, &report.best_params.to_named())?;
    std::fs::write(out.join("checkpoint.bin.cfg"), render_config(&run)?)?;

    let mut rows = report.metrics.clone();
    if !test_idx.is_empty() {
        let t0 = std::time::Instant::now();
        let test_eval = evaluate(&run.model, &report.best_params, &samples, &test_idx)?;
        let row = MetricsRow {
            epoch: report.best_epoch,
            split: "test".to_string(),
            loss: test_eval.loss,
            weighted_f1: test_eval.weighted_f1,
            per_class: test_eval.per_class.clone(),
            seconds: t0.elapsed().as_secs_f64(),
        };
        println!("{}", row.to_csv());
        rows.push(row);
    }
    std::fs::write(out.join("metrics.csv"), metrics_csv(&rows, run.model.num_classes))?;

    println!(
        "best epoch {} (val weighted F1 {:.4}); checkpoint at {}",
        report.best_epoch,
        report.best_val_f1,
        ckpt_path.display()
    );
    if let Some(step) = report.diverged_at_step {
        return Err(Error::numeric(format!(
            "training diverged at step {step}; checkpoint and metrics hold the last completed epoch"
        )));
    }
    Ok(())
}

/// Loads a checkpoint plus its model shape. The shape comes from
/// `--config` when given, otherwise from the checkpoint's `.cfg`
/// sibling written by train.
fn load_model(m: &ArgMatches, ckpt: &Path) -> Result<(RunConfig, ScoreNetParams)> {
    let run = if m.contains_id("config") && m.get_one::<PathBuf>("config").is_some() {
        load_run_config(m)?
    } else {
        let sibling = PathBuf::from(format!("{}.cfg", ckpt.display()));
        let text = std::fs::read_to_string(&sibling).map_err(|e| {
            Error::config(format!(
                "cannot read {} ({e}); pass --config to describe the checkpoint's model",
                sibling.display()
            ))
        })?;
        parse_config(&text, RunConfig::default())?
    };
    let named = load_checkpoint(ckpt)?;
    let params = ScoreNetParams::from_named(&named, &run.model)?;
    Ok((run, params))
}

fn cmd_eval(m: &ArgMatches) -> Result<()> {
    let data = m.get_one::<PathBuf>("data").expect("required");
    let ckpt = m.get_one::<PathBuf>("ckpt").expect("required");
    let split = m.get_one::<String>("split").expect("defaulted").clone();
    let seed = *m.get_one::<u64>("seed").expect("defaulted");
    let threads = *m.get_one::<usize>("threads").expect("defaulted");
    let (run, params) = load_model(m, ckpt)?;
    print_header(
        seed,
        &[
            ("threads", threads.to_string()),
            ("data", data.display().to_string()),
            ("ckpt", ckpt.display().to_string()),
            ("split", split.clone()),
        ],
        Some(&run),
    )?;

    let samples = read_corpus(&manifest_path(data))?;
    let (train_idx, val_idx, test_idx) = split_indices(&samples, run.split, seed)?;
    let indices = match split.as_str() {
        "train" => train_idx,
        "val" => val_idx,
        _ => test_idx,
    };
    let t0 = std::time::Instant::now();
    let eval = evaluate(&run.model, &params, &samples, &indices)?;
    let row = MetricsRow {
        epoch: 0,
        split,
        loss: eval.loss,
        weighted_f1: eval.weighted_f1,
        per_class: eval.per_class.clone(),
        seconds: t0.elapsed().as_secs_f64(),
    };
    println!("{}", MetricsRow::csv_header(run.model.num_classes));
    println!("{}", row.to_csv());
    if let Some(out) = m.get_one::<PathBuf>("out") {
        std::fs::create_dir_all(out)?;
        std::fs::write(out.join("eval.csv"), metrics_csv(&[row], run.model.num_classes))?;
    }
    Ok(())
}

fn uniform_grid(gh: usize, gw: usize) -> SemanticDistribution {
    SemanticDistribution { probs: vec![1.0 / (gh * gw) as f32; gh * gw], gh, gw }
}

fn cmd_augment(m: &ArgMatches) -> Result<()> {
    let data = m.get_one::<PathBuf>("data").expect("required");
    let out = m.get_one::<PathBuf>("out").expect("required");
    let seed = *m.get_one::<u64>("seed").expect("defaulted");
    let count = *m.get_one::<usize>("count").expect("defaulted");
    let (run, params) = match m.get_one::<PathBuf>("ckpt") {
        Some(ckpt) => {
            let (run, params) = load_model(m, ckpt)?;
            (run, Some(params))
        }
        None => (load_run_config(m)?, None),
    };
    print_header(
        seed,
        &[
            ("data", data.display().to_string()),
            ("out", out.display().to_string()),
            ("count", count.to_string()),
            ("guidance", if params.is_some() { "semantic" } else { "uniform" }.to_string()),
        ],
        Some(&run),
    )?;

    let samples = read_corpus(&manifest_path(data))?;
    if samples.is_empty() {
        return Err(Error::contract("corpus is empty"));
    }
    let cfg = &run.model;
    for s in &samples {
        if s.label >= cfg.num_classes {
            return Err(Error::contract(format!(
                "sample {} has label {} but the config declares {} classes",
                s.id, s.label, cfg.num_classes
            )));
        }
    }
    let cell = cfg.downscale * cfg.scorer.patch_size;
    let count = if count == 0 { samples.len() } else { count };
    std::fs::create_dir_all(out)?;

    let mut csv = String::from("path,lambda_eff");
    for c in 0..cfg.num_classes {
        let _ = write!(csv, ",y{c}");
    }
    csv.push_str(",source_id,target_id,src_top,src_left,tgt_top,tgt_left,bbox_h,bbox_w\n");

    let one_hot = |label: usize| {
        let mut v = vec![0f32; cfg.num_classes];
        v[label] = 1.0;
        v
    };
    for i in 0..count {
        let mut rng = RngStream::new(seed, i as u64);
        let target = &samples[i % samples.len()];
        let source = if samples.len() > 1 {
            let mut j = rng.range_usize(samples.len() - 1);
            if j >= i % samples.len() {
                j += 1;
            }
            &samples[j]
        } else {
            target
        };
        let lambda = rng.uniform();
        let (_, h, w) = target.image.dims3()?;
        let (p_src, p_tgt, strategy) = match &params {
            Some(p) => (
                infer_semantic(&source.image, cfg, p)?.semantic,
                infer_semantic(&target.image, cfg, p)?.semantic,
                MixStrategy::Semantic,
            ),
            None => {
                (uniform_grid(h / cell, w / cell), uniform_grid(h / cell, w / cell), MixStrategy::Uniform)
            }
        };
        let plan = sample_masks(&p_src, &p_tgt, lambda, strategy, cell, &mut rng)?;
        let mixed = mix_pair(
            &source.image,
            &one_hot(source.label),
            &target.image,
            &one_hot(target.label),
            &plan,
            source.id,
            target.id,
        )?;
        let name = format!("{i:06}.mix.ppm");
        crate::corpus::save_ppm(&out.join(&name), &mixed.x_m)?;
        let _ = write!(csv, "{name},{:.6}", mixed.lambda);
        for v in &mixed.y_m {
            let _ = write!(csv, ",{v:.6}");
        }
        let _ = writeln!(
            csv,
            ",{},{},{},{},{},{},{},{}",
            mixed.source_id,
            mixed.target_id,
            mixed.mask_src.top,
            mixed.mask_src.left,
            mixed.mask_tgt.top,
            mixed.mask_tgt.left,
            mixed.mask_tgt.height,
            mixed.mask_tgt.width
        );
    }
    let labels_path = out.join("labels.csv");
    std::fs::write(&labels_path, csv)?;
    println!("wrote {count} mixed samples and {}", labels_path.display());
    Ok(())
}

/// Nearest-neighbor upsamples the patch distribution to pixel
/// resolution, normalizes it by its peak, and alpha-blends the gray
/// level onto every channel.
fn render_overlay(image: &Tensor, semantic: &SemanticDistribution, cell: usize) -> Result<Tensor> {
    let (c, h, w) = image.dims3()?;
    let peak = semantic.probs.iter().cloned().fold(0f32, f32::max);
    if peak <= 0.0 {
        return Err(Error::numeric("patch distribution has no positive mass"));
    }
    let mut out = image.data().to_vec();
    for y in 0..h {
        for x in 0..w {
            let gy = (y / cell).min(semantic.gh - 1);
            let gx = (x / cell).min(semantic.gw - 1);
            let heat = semantic.probs[gy * semantic.gw + gx] / peak;
            for ch in 0..c {
                let i = ch * h * w + y * w + x;
                out[i] = 0.5 * out[i] + 0.5 * heat;
            }
        }
    }
    Tensor::new(&[c, h, w], out)
}

/// Draws a red two-pixel border around every selected grid cell.
fn render_outlines(
    image: &Tensor,
    selected: &[usize],
    grid: (usize, usize),
    cell: usize,
) -> Result<Tensor> {
    let (c, h, w) = image.dims3()?;
    if c != 3 {
        return Err(Error::shape(format!("outline rendering needs 3 channels, got {c}")));
    }
    let mut out = image.data().to_vec();
    let thickness = 2usize.min(cell);
    for &idx in selected {
        let (gy, gx) = (idx / grid.1, idx % grid.1);
        let y0 = gy * cell;
        let x0 = gx * cell;
        for dy in 0..cell.min(h - y0) {
            for dx in 0..cell.min(w - x0) {
                let on_border = dy < thickness
                    || dy >= cell - thickness
                    || dx < thickness
                    || dx >= cell - thickness;
                if on_border {
                    let y = y0 + dy;
                    let x = x0 + dx;
                    out[y * w + x] = 1.0;
                    out[h * w + y * w + x] = 0.0;
                    out[2 * h * w + y * w + x] = 0.0;
                }
            }
        }
    }
    Tensor::new(&[c, h, w], out)
}

fn cmd_inspect(m: &ArgMatches) -> Result<()> {
    let image_path = m.get_one::<PathBuf>("image").expect("required");
    let ckpt = m.get_one::<PathBuf>("ckpt").expect("required");
    let out = m.get_one::<PathBuf>("out").expect("required");
    let seed = *m.get_one::<u64>("seed").expect("defaulted");
    let (run, params) = load_model(m, ckpt)?;
    print_header(
        seed,
        &[
            ("image", image_path.display().to_string()),
            ("ckpt", ckpt.display().to_string()),
            ("out", out.display().to_string()),
        ],
        Some(&run),
    )?;

    let image = crate::corpus::load_ppm(image_path)?;
    let cfg = &run.model;
    let trace = infer_forward(&image, cfg, &params)?;
    if trace.selected.len() < cfg.k {
        println!(
            "notice: top-k clamped from {} to {} available patches",
            cfg.k,
            trace.selected.len()
        );
    }

    std::fs::create_dir_all(out)?;
    let cell = cfg.downscale * cfg.scorer.patch_size;
    let overlay = render_overlay(&image, &trace.semantic, cell)?;
    crate::corpus::save_ppm(&out.join("overlay.ppm"), &overlay)?;
    let outlined = render_outlines(&image, &trace.selected, trace.scorer_grid, cell)?;
    crate::corpus::save_ppm(&out.join("selected.ppm"), &outlined)?;

    let mut text = format!("{} {}\n", trace.semantic.gh, trace.semantic.gw);
    for row in 0..trace.semantic.gh {
        let cells: Vec<String> = (0..trace.semantic.gw)
            .map(|col| format!("{:.8}", trace.semantic.probs[row * trace.semantic.gw + col]))
            .collect();
        text.push_str(&cells.join(" "));
        text.push('\n');
    }
    std::fs::write(out.join("semantic.txt"), text)?;

    let sum: f64 = trace.semantic.probs.iter().map(|&p| p as f64).sum();
    let selected: Vec<String> = trace.selected.iter().map(|i| i.to_string()).collect();
    println!("semantic sum = {sum:.8}");
    println!("selected = {}", selected.join(","));
    println!("logits = {:?}", trace.logits);
    println!("wrote overlay.ppm, selected.ppm, semantic.txt to {}", out.display());
    Ok(())
}

fn cmd_bench(m: &ArgMatches) -> Result<()> {
    let seed = *m.get_one::<u64>("seed").expect("defaulted");
    let threads = *m.get_one::<usize>("threads").expect("defaulted");
    let run = load_run_config(m)?;
    print_header(seed, &[("threads", threads.to_string())], Some(&run))?;
    run.model.validate()?;

    let b = &run.bench;
    let cfg = &run.model;
    let mut rng = RngStream::new(seed, 0);
    let pixels: Vec<f32> =
        (0..cfg.channels * b.height * b.width).map(|_| rng.uniform()).collect();
    let image = Tensor::new(&[cfg.channels, b.height, b.width], pixels)?;

    let mut results: Vec<BenchResult> = Vec::new();
    if matches!(b.target, BenchTarget::Both | BenchTarget::TwoStage) {
        let params = ScoreNetParams::init(cfg, &mut rng)?;
        results.push(bench_two_stage(&image, cfg, &params, b.warmup, b.iters, threads)?);
    }
    if matches!(b.target, BenchTarget::Both | BenchTarget::Vanilla) {
        let vanilla_cfg = EncoderConfig {
            embed_dim: cfg.scorer.embed_dim,
            depth: cfg.scorer.depth,
            num_heads: cfg.scorer.num_heads,
            mlp_ratio: cfg.scorer.mlp_ratio,
            patch_size: cfg.local.patch_size,
            num_pseudo_cls: cfg.scorer.num_pseudo_cls,
        };
        let params =
            VanillaParams::init(&vanilla_cfg, cfg.channels, cfg.num_classes, &mut rng)?;
        results.push(bench_vanilla(&image, &vanilla_cfg, &params, b.warmup, b.iters, threads)?);
    }

    let mut csv = String::from(BENCH_CSV_HEADER);
    csv.push('\n');
    for r in &results {
        csv.push_str(&r.to_csv());
        csv.push('\n');
    }
    print!("{csv}");
    if let Some(out) = m.get_one::<PathBuf>("out") {
        std::fs::create_dir_all(out)?;
        std::fs::write(out.join("bench.csv"), csv)?;
    }
    Ok(())
}

fn cmd_budget(m: &ArgMatches) -> Result<()> {
    let seed = *m.get_one::<u64>("seed").expect("defaulted");
    let height = *m.get_one::<usize>("height").expect("defaulted");
    let width = *m.get_one::<usize>("width").expect("defaulted");
    let run = load_run_config(m)?;
    print_header(
        seed,
        &[("height", height.to_string()), ("width", width.to_string())],
        Some(&run),
    )?;
    let budget = token_budget(&run.model, height, width)?;
    println!("vanilla,scorer,local,coarse");
    println!("{},{},{},{}", budget.vanilla, budget.scorer, budget.local, budget.coarse);
    Ok(())
}
