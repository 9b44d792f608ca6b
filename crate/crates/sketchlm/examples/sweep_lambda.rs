//! Sweep the reconstruction-loss weight at a reduced budget and print the
//! resulting table.

use sketchlm::dataset::{generate_dataset, TaskKind};
use sketchlm::eval::{sweep, SweepAxis};
use sketchlm::taskgen::MazeSpec;
use sketchlm::train::TrainConfig;

fn main() {
    let spec = MazeSpec { width: 4, height: 4, wall_density: 0.15, ..Default::default() };
    let train_ds = generate_dataset(TaskKind::Maze, 200, 0, 9, &spec).unwrap();
    let eval_ds = generate_dataset(TaskKind::Maze, 60, 100_000, 9, &spec).unwrap();

    let base = TrainConfig {
        total_steps: 150,
        batch_size: 4,
        k: 9,
        d_model: 32,
        n_layers: 2,
        n_heads: 4,
        d_ff: 128,
        max_seq_len: 256,
        d_enc: 16,
        parallel_batch: true,
        ..TrainConfig::default()
    };
    let values: Vec<String> =
        ["0.1", "0.5", "1.0"].iter().map(|s| s.to_string()).collect();
    let rows = sweep(SweepAxis::Lambda, &values, &base, &train_ds, &eval_ds).unwrap();
    println!("{:>8} {:>10} {:>12} {:>14}", "lambda", "accuracy", "recon_mse", "final_l_total");
    for r in &rows {
        println!(
            "{:>8} {:>10.4} {:>12.5} {:>14.4}",
            r.value,
            r.accuracy,
            r.recon_mse.unwrap_or(f64::NAN),
            r.final_l_total
        );
    }
}
