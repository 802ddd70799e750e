use std::time::Instant;

use scorenet::corpus::generate_corpus;
use scorenet::harness::train::{evaluate, train_with_progress, TrainConfig};
use scorenet::model::{forward, ForwardMode, ScoreNetBinding, ScoreNetConfig, ScoreNetParams};
use scorenet::numerics::{RngStream, Tape};

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let mode = args.get(1).map(String::as_str).unwrap_or("time");

    let cfg = ScoreNetConfig::desk_default();
    let mut rng = RngStream::new(0, 0);

    if mode == "time" {
        let samples = generate_corpus(8, 4, 256, 256, 1).unwrap();
        let params = ScoreNetParams::init(&cfg, &mut rng).unwrap();

        let t0 = Instant::now();
        for s in &samples {
            let mut tape = Tape::new();
            let bind = ScoreNetBinding::bind(&mut tape, &params, true);
            let trace =
                forward(&mut tape, &s.image, &cfg, &bind, ForwardMode::Train, &mut rng).unwrap();
            let mut target = vec![0f32; 4];
            target[s.label] = 1.0;
            let loss = tape.cross_entropy_soft(trace.logits_node, &target).unwrap();
            let grads = tape.backward(loss).unwrap();
            std::hint::black_box(&grads);
        }
        let per_train = t0.elapsed().as_secs_f64() / samples.len() as f64;
        println!("train fwd+bwd per sample: {per_train:.3}s");

        let idx: Vec<usize> = (0..samples.len()).collect();
        let t1 = Instant::now();
        let ev = evaluate(&cfg, &params, &samples, &idx).unwrap();
        let per_eval = t1.elapsed().as_secs_f64() / samples.len() as f64;
        println!("infer per sample: {per_eval:.3}s  (loss {:.3})", ev.loss);

        let steps = 44 * 15;
        let train_cost = steps as f64 * 8.0 * per_train;
        let eval_cost = 15.0 * (350.0 + 75.0) * per_eval + 75.0 * per_eval;
        println!(
            "A7 extrapolation: train {:.0}s + eval {:.0}s = {:.1} min",
            train_cost,
            eval_cost,
            (train_cost + eval_cost) / 60.0
        );
        return;
    }

    // mode == "learn <base_lr> <epochs> <n> <side> [seed]"
    let base_lr: f32 = args[2].parse().unwrap();
    let epochs: usize = args[3].parse().unwrap();
    let n: usize = args[4].parse().unwrap();
    let side: usize = args[5].parse().unwrap();
    let seed: u64 = args.get(6).map(|s| s.parse().unwrap()).unwrap_or(0);

    let samples = generate_corpus(n, 4, side, side, 42).unwrap();
    let labels: Vec<usize> = samples.iter().map(|s| s.label).collect();
    let (tr, va, te) =
        scorenet::corpus::stratified_split(&labels, (0.7, 0.15, 0.15), seed).unwrap();
    println!("split {} / {} / {}", tr.len(), va.len(), te.len());

    let tcfg = TrainConfig { base_lr, epochs, ..TrainConfig::default() };
    let mut rng = RngStream::new(seed, 0);
    let params = ScoreNetParams::init(&cfg, &mut rng).unwrap();
    let t0 = Instant::now();
    let report = train_with_progress(&cfg, &tcfg, &samples, &tr, &va, params, &mut rng, |row| {
        println!("{}  [{:.0}s]", row.to_csv(), t0.elapsed().as_secs_f64());
    })
    .unwrap();
    println!("diverged: {:?}", report.diverged_at_step);
    let test = evaluate(&cfg, &report.best_params, &samples, &te).unwrap();
    println!(
        "best epoch {} val {:.4}; test f1 {:.4} in {:.1} min",
        report.best_epoch,
        report.best_val_f1,
        test.weighted_f1,
        t0.elapsed().as_secs_f64() / 60.0
    );

    let cell = cfg.patch_high;
    let mut hits = 0usize;
    let mut total = 0usize;
    for &i in &te {
        let s = &samples[i];
        let trace = scorenet::infer::infer_forward(&s.image, &cfg, &report.best_params).unwrap();
        let (_, h, w) = s.image.dims3().unwrap();
        let gw = w / cell;
        for &idx in &trace.selected {
            let (gy, gx) = (idx / gw, idx % gw);
            let mut any = false;
            'scan: for y in gy * cell..(gy + 1) * cell {
                for x in gx * cell..(gx + 1) * cell {
                    if s.blob_mask[y * w + x] != 0 {
                        any = true;
                        break 'scan;
                    }
                }
            }
            hits += usize::from(any);
            total += 1;
        }
    }
    println!("blob hit rate: {hits}/{total} = {:.3}", hits as f64 / total as f64);
}
