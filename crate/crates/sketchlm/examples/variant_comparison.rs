//! Train the interleaved, visual-only, and text-only variants on identical
//! data with identical seeds and report the three-way comparison.

use sketchlm::dataset::{generate_dataset, TaskKind};
use sketchlm::eval::{sweep, sweep_table, write_csv, SweepAxis};
use sketchlm::taskgen::MazeSpec;
use sketchlm::train::TrainConfig;

fn main() {
    let spec = MazeSpec { width: 4, height: 4, wall_density: 0.15, ..Default::default() };
    let train_ds = generate_dataset(TaskKind::Maze, 250, 0, 9, &spec).unwrap();
    let eval_ds = generate_dataset(TaskKind::Maze, 80, 100_000, 9, &spec).unwrap();

    let base = TrainConfig {
        total_steps: 200,
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
    let values: Vec<String> = ["unified", "visual-only", "text-only"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    let rows = sweep(SweepAxis::Variant, &values, &base, &train_ds, &eval_ds).unwrap();

    println!("{:>12} {:>10} {:>14} {:>16}", "variant", "accuracy", "mean_latents", "final_l_total");
    for r in &rows {
        println!(
            "{:>12} {:>10.4} {:>14.2} {:>16.4}",
            r.value, r.accuracy, r.mean_latent_len, r.final_l_total
        );
    }
    let out = std::env::temp_dir().join("sketchlm-variants.csv");
    write_csv(&sweep_table(&rows), &out).unwrap();
    println!("\ntable written to {}", out.display());
    println!("(the ordering at this scale is reported, not asserted)");
}
