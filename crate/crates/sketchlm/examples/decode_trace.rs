//! Train a small model briefly, then decode one held-out maze and print the
//! hybrid trace: text segments plus latent-run summaries.

use sketchlm::dataset::{generate_dataset, TaskKind};
use sketchlm::decoder::{generate, DecodeConfig, TraceSegment};
use sketchlm::taskgen::MazeSpec;
use sketchlm::train::{train_run, TrainConfig};

fn main() {
    let spec = MazeSpec { width: 4, height: 4, wall_density: 0.15, ..Default::default() };
    let train_ds = generate_dataset(TaskKind::Maze, 300, 0, 9, &spec).unwrap();
    let holdout = generate_dataset(TaskKind::Maze, 5, 100_000, 9, &spec).unwrap();

    let config = TrainConfig {
        total_steps: 250,
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
    println!("training a small model ({} steps)...", config.total_steps);
    let run = train_run(&config, &train_ds, None, None).unwrap();
    let last = run.metrics.last().unwrap();
    println!("final losses: ntp {:.3}, sketch {:.3}\n", last.l_ntp, last.l_sketch);

    let vocab = train_ds.vocab();
    let cfg = DecodeConfig::greedy(config.k, config.max_seq_len);
    for sample in &holdout.samples {
        let trace = generate(
            &run.state.params,
            &sample.context_image,
            &sample.question,
            &vocab,
            &cfg,
        )
        .unwrap();
        println!("question: {}", sample.question);
        for seg in &trace.segments {
            match seg {
                TraceSegment::Text(ids) => println!("  text:   {}", vocab.decode(ids).unwrap()),
                TraceSegment::Latent(vs) => {
                    let mean_norm = vs
                        .iter()
                        .map(|v| v.iter().map(|x| x * x).sum::<f64>().sqrt())
                        .sum::<f64>()
                        / vs.len().max(1) as f64;
                    println!("  latent: {} vectors, mean norm {mean_norm:.3}", vs.len());
                }
            }
        }
        println!(
            "  answer: {:?} vs reference {:?}\n",
            trace.answer.as_deref().unwrap_or("-"),
            sample.answer
        );
    }
}
