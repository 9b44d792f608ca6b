//! Train the full-size toy model on maze navigation, then evaluate a
//! held-out split. Flags: `--steps N --count N --eval N --batch N --seed N
//! --parallel` (all optional).

use sketchlm::dataset::{generate_dataset, TaskKind};
use sketchlm::eval::evaluate;
use sketchlm::taskgen::MazeSpec;
use sketchlm::train::{train_run, TrainConfig};
use std::time::Instant;

fn flag(args: &[String], name: &str) -> Option<String> {
    args.iter().position(|a| a == name).map(|i| args[i + 1].clone())
}

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let steps: usize = flag(&args, "--steps").map_or(300, |v| v.parse().unwrap());
    let count: usize = flag(&args, "--count").map_or(500, |v| v.parse().unwrap());
    let eval_count: usize = flag(&args, "--eval").map_or(100, |v| v.parse().unwrap());
    let batch: usize = flag(&args, "--batch").map_or(8, |v| v.parse().unwrap());
    let seed: u64 = flag(&args, "--seed").map_or(0, |v| v.parse().unwrap());
    let parallel = args.iter().any(|a| a == "--parallel");

    let spec = MazeSpec::default();
    let train_ds = generate_dataset(TaskKind::Maze, count, 0, 27, &spec).unwrap();
    let eval_ds = generate_dataset(TaskKind::Maze, eval_count, 1_000_000, 27, &spec).unwrap();

    let config = TrainConfig {
        seed,
        total_steps: steps,
        batch_size: batch,
        parallel_batch: parallel,
        ..TrainConfig::default()
    };
    println!(
        "training: {} samples, {} steps, batch {}, d_model {}, K {}",
        count, steps, batch, config.d_model, config.k
    );
    let t0 = Instant::now();
    let run = train_run(&config, &train_ds, None, None).unwrap();
    let train_secs = t0.elapsed().as_secs_f64();
    let first = run.metrics.first().unwrap();
    let last = run.metrics.last().unwrap();
    println!(
        "trained in {train_secs:.1}s ({:.3}s/step): l_total {:.4} -> {:.4} (ntp {:.4} -> {:.4}, sketch {:.4} -> {:.4})",
        train_secs / steps as f64,
        first.l_total,
        last.l_total,
        first.l_ntp,
        last.l_ntp,
        first.l_sketch,
        last.l_sketch,
    );

    let t1 = Instant::now();
    let metrics = evaluate(&run.state, &eval_ds, true).unwrap();
    println!(
        "eval in {:.1}s: accuracy {:.4}, recon_mse {:?}, mean latent len {:.1}",
        t1.elapsed().as_secs_f64(),
        metrics.answer_accuracy,
        metrics.sketch_recon_mse,
        metrics.mean_latent_segment_len
    );
}
