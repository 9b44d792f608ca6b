//! Diagnostic: locate the worst finite-difference coordinate per latent
//! input mode and scan the loss along it.

use rand::SeedableRng;
use sketchlm::dataset::generate_dataset;
use sketchlm::model::ModelParams;
use sketchlm::objective::LatentInputMode;
use sketchlm::taskgen::MazeSpec;
use sketchlm::train::{prepare_sample, sample_loss_and_grad, TrainConfig};

fn main() {
    let eps: f64 = std::env::args()
        .nth(1)
        .and_then(|s| s.parse().ok())
        .unwrap_or(5e-5);
    let mode = match std::env::args().nth(2).as_deref() {
        Some("propagate") => LatentInputMode::Propagate,
        _ => LatentInputMode::TeacherForce,
    };
    let config = TrainConfig {
        k: 3,
        lambda_sketch: 0.5,
        latent_input_mode: mode,
        d_model: 16,
        n_layers: 2,
        n_heads: 2,
        d_ff: 32,
        max_seq_len: 160,
        d_enc: 8,
        ..TrainConfig::default()
    };
    let spec = MazeSpec { width: 4, height: 4, wall_density: 0.15, ..Default::default() };
    let ds = generate_dataset(sketchlm::dataset::TaskKind::Maze, 2, 0, config.k, &spec).unwrap();
    let vocab = ds.vocab();
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(config.seed);
    let params = ModelParams::init(
        config.model_config(vocab.size()),
        config.freeze_flags(),
        &mut rng,
    )
    .unwrap();
    let prepared: Vec<_> = ds
        .samples
        .iter()
        .map(|s| prepare_sample(s, &vocab, &params, config.variant, config.k).unwrap())
        .collect();
    let loss_cfg = config.loss_config();

    let f = |p: &ModelParams| -> f64 {
        prepared
            .iter()
            .map(|prep| sample_loss_and_grad(p, prep, &loss_cfg).unwrap().0)
            .sum::<f64>()
            / prepared.len() as f64
    };

    let mut grads = None;
    for prep in &prepared {
        let (_, _, _, g) = sample_loss_and_grad(&params, prep, &loss_cfg).unwrap();
        match &mut grads {
            None => grads = Some(g),
            Some(acc) => acc.add_assign(&g).unwrap(),
        }
    }
    let mut grads = grads.unwrap();
    grads.scale_in_place(1.0 / prepared.len() as f64);

    let mut worst = (String::new(), 0usize, 0.0f64, 0.0f64, 0.0f64);
    for (name, grad) in grads.iter() {
        if params.is_frozen(name) {
            continue;
        }
        for ci in 0..grad.len() {
            let mut p = params.clone();
            let orig = p.tensor_mut(name).unwrap().data()[ci];
            p.tensor_mut(name).unwrap().data_mut()[ci] = orig + eps;
            let up = f(&p);
            p.tensor_mut(name).unwrap().data_mut()[ci] = orig - eps;
            let down = f(&p);
            let fd = (up - down) / (2.0 * eps);
            let a = grad.data()[ci];
            let rel = (a - fd).abs() / a.abs().max(fd.abs()).max(1e-8);
            if rel > worst.2 {
                worst = (name.to_string(), ci, rel, a, fd);
            }
        }
    }
    println!(
        "mode {:?} eps {eps:.1e} worst: {}[{}] rel={:.3e} analytic={:.9e} fd={:.9e}",
        mode, worst.0, worst.1, worst.2, worst.3, worst.4
    );

    let (name, ci) = (worst.0.clone(), worst.1);
    let orig = params
        .named_tensors()
        .iter()
        .find(|(n, _)| *n == name)
        .map(|(_, t)| t.data()[ci])
        .unwrap();
    let mut prev: Option<f64> = None;
    for step in -6..=6 {
        let x = orig + step as f64 * eps / 2.0;
        let mut p = params.clone();
        p.tensor_mut(&name).unwrap().data_mut()[ci] = x;
        let v = f(&p);
        let delta = prev.map_or(0.0, |pv| v - pv);
        println!("  x-orig={:+.3e}  f={:.15e}  df={:+.3e}", x - orig, v, delta);
        prev = Some(v);
    }
}
