//! Finite-difference check of the full joint training loss (next-token
//! cross-entropy plus latent reconstruction) in both latent input modes.

use sketchlm::eval::grad_check;
use sketchlm::train::TrainConfig;

fn main() {
    let config = TrainConfig {
        k: 3,
        lambda_sketch: 0.5,
        d_model: 16,
        n_layers: 2,
        n_heads: 2,
        d_ff: 32,
        max_seq_len: 160,
        d_enc: 8,
        ..TrainConfig::default()
    };
    let report = grad_check(&config).unwrap();
    for row in &report.rows {
        println!(
            "{:13} {:?}: max relative error {:.3e}",
            row.mode.name(),
            row.group,
            row.max_rel_err
        );
    }
    println!("elapsed {:.1}s", report.elapsed_secs);
}
