//! Cross-route consistency: the graph-built training forward must agree
//! with the plain full forward plus plain losses, and its gradients must
//! match central finite differences in both latent input modes.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sketchlm::autodiff::{finite_difference_check, Gradients, Graph};
use sketchlm::backbone::{forward_full, MixedSequence, SequenceElement};
use sketchlm::dataset::{generate_dataset, TaskKind};
use sketchlm::error::Result;
use sketchlm::model::ModelParams;
use sketchlm::objective::{
    self, loss_ntp, loss_sketch, loss_total, LatentInputMode, PlanEntry, SketchLossKind,
};
use sketchlm::taskgen::MazeSpec;
use sketchlm::tensor::Tensor;
use sketchlm::train::{prepare_sample, sample_loss_and_grad, PreparedSample, TrainConfig};

fn tiny_config(d_model: usize) -> TrainConfig {
    TrainConfig {
        seed: 11,
        k: 3,
        d_model,
        n_layers: 2,
        n_heads: 2,
        d_ff: 2 * d_model,
        max_seq_len: 128,
        d_enc: 8,
        ..Default::default()
    }
}

fn setup(cfg: &TrainConfig) -> (ModelParams, Vec<PreparedSample>) {
    let spec = MazeSpec { width: 4, height: 4, wall_density: 0.15, ..Default::default() };
    let ds = generate_dataset(TaskKind::Maze, 3, 50, cfg.k, &spec).unwrap();
    let vocab = ds.vocab();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let params =
        ModelParams::init(cfg.model_config(vocab.size()), cfg.freeze_flags(), &mut rng).unwrap();
    let prepared: Vec<PreparedSample> = ds
        .samples
        .iter()
        .map(|s| prepare_sample(s, &vocab, &params, cfg.variant, cfg.k).unwrap())
        .collect();
    (params, prepared)
}

/// Realize the teacher-forced sequence: context slots become V_e rows,
/// latent slots become the plan's target vectors.
fn realized_sequence(params: &ModelParams, prep: &PreparedSample) -> MixedSequence {
    let feats = {
        let mut t = sketchlm::tensor::matmul(&prep.context_patches, &params.e_v.weight).unwrap();
        let d = t.cols();
        for r in 0..t.rows() {
            for (o, &b) in t.data_mut()[r * d..(r + 1) * d]
                .iter_mut()
                .zip(params.e_v.bias.data())
            {
                *o += b;
            }
        }
        t
    };
    let ve = {
        let mut t = sketchlm::tensor::matmul(&feats, &params.proj.weight).unwrap();
        let d = t.cols();
        for r in 0..t.rows() {
            for (o, &b) in t.data_mut()[r * d..(r + 1) * d]
                .iter_mut()
                .zip(params.proj.bias.data())
            {
                *o += b;
            }
        }
        t
    };
    let mut elements = prep.template.elements.clone();
    for (p, e) in elements.iter_mut().enumerate() {
        if p < ve.rows() {
            *e = SequenceElement::Continuous(ve.row_slice(p).to_vec());
        } else if let SequenceElement::Continuous(_) = e {
            // Latent slot: plan entry at p-1 names (seg, j).
            if let PlanEntry::NextLatent { seg, j } = prep.plan.entries[p - 1] {
                *e = SequenceElement::Continuous(
                    prep.plan.targets[seg].vectors.row_slice(j - 1).to_vec(),
                );
            } else {
                panic!("continuous slot without a latent plan entry");
            }
        }
    }
    MixedSequence::new(elements)
}

#[test]
fn teacher_forced_graph_matches_plain_route() {
    let cfg = TrainConfig {
        latent_input_mode: LatentInputMode::TeacherForce,
        ..tiny_config(16)
    };
    let (params, prepared) = setup(&cfg);
    let loss_cfg = cfg.loss_config();
    for prep in &prepared {
        let (g_total, g_ntp, g_sketch, _) =
            sample_loss_and_grad(&params, prep, &loss_cfg).unwrap();

        let seq = realized_sequence(&params, prep);
        let out = forward_full(&seq, &params.backbone).unwrap();
        let p_ntp = loss_ntp(&out.logits, &prep.plan).unwrap();
        let p_sketch = loss_sketch(&out.hiddens, &prep.plan, SketchLossKind::Mse).unwrap();
        let p_total = loss_total(p_ntp, p_sketch, &loss_cfg).unwrap();

        assert!((g_ntp - p_ntp).abs() <= 1e-9, "ntp {g_ntp} vs {p_ntp}");
        assert!(
            (g_sketch - p_sketch).abs() <= 1e-9,
            "sketch {g_sketch} vs {p_sketch}"
        );
        assert!((g_total - p_total).abs() <= 1e-9);
    }
}

#[test]
fn propagate_mode_feeds_hiddens_back_bitwise() {
    let cfg = tiny_config(16);
    let (params, prepared) = setup(&cfg);
    let loss_cfg = cfg.loss_config();
    for prep in &prepared {
        let mut g = Graph::new();
        let bound = params.bind(&mut g).unwrap();
        let fwd = objective::train_forward(
            &mut g,
            &bound,
            &params.config.backbone,
            &objective::SampleInputs {
                context_patches: &prep.context_patches,
                sketch_features: &prep.sketch_features,
                rendered: &prep.rendered,
                plan: &prep.plan,
            },
            &loss_cfg,
            None,
        )
        .unwrap();
        for seg in &fwd.segments {
            assert_eq!(seg.input_nodes.len(), cfg.k);
            assert_eq!(seg.h_nodes.len(), cfg.k);
            for j in 0..cfg.k {
                // The element fed at latent slot j IS the hidden h_j.
                assert_eq!(seg.input_nodes[j], seg.h_nodes[j]);
                let a = g.value(seg.input_nodes[j]).data();
                let b = g.value(seg.h_nodes[j]).data();
                for (x, y) in a.iter().zip(b) {
                    assert_eq!(x.to_bits(), y.to_bits());
                }
            }
        }
    }
}

#[test]
fn teacher_force_inputs_equal_targets_bitwise() {
    let cfg = TrainConfig {
        latent_input_mode: LatentInputMode::TeacherForce,
        ..tiny_config(16)
    };
    let (params, prepared) = setup(&cfg);
    let loss_cfg = cfg.loss_config();
    let prep = &prepared[0];
    let mut g = Graph::new();
    let bound = params.bind(&mut g).unwrap();
    let fwd = objective::train_forward(
        &mut g,
        &bound,
        &params.config.backbone,
        &objective::SampleInputs {
            context_patches: &prep.context_patches,
            sketch_features: &prep.sketch_features,
            rendered: &prep.rendered,
            plan: &prep.plan,
        },
        &loss_cfg,
        None,
    )
    .unwrap();
    for (si, seg) in fwd.segments.iter().enumerate() {
        let target = g.value(seg.target_node).clone();
        for (j, &input) in seg.input_nodes.iter().enumerate() {
            let row = g.value(input);
            for (a, b) in row.data().iter().zip(target.row_slice(j)) {
                assert_eq!(a.to_bits(), b.to_bits(), "segment {si} row {j}");
            }
        }
        // In-graph targets equal the plan's precomputed targets (same
        // parameters, same arithmetic path).
        for (a, b) in target.data().iter().zip(prep.plan.targets[si].vectors.data()) {
            assert!((a - b).abs() <= 1e-12);
        }
    }
}

#[test]
fn crafted_targets_make_modes_agree_bitwise() {
    // Run propagate once, freeze its emitted latents as the targets, then
    // teacher-force with those targets: every forward value must match
    // bitwise, L_NTP included.
    let cfg = tiny_config(16);
    let (params, prepared) = setup(&cfg);
    let prep = &prepared[0];
    let base_cfg = cfg.loss_config();

    let mut g1 = Graph::new();
    let bound1 = params.bind(&mut g1).unwrap();
    let inputs = objective::SampleInputs {
        context_patches: &prep.context_patches,
        sketch_features: &prep.sketch_features,
        rendered: &prep.rendered,
        plan: &prep.plan,
    };
    let fwd1 = objective::train_forward(
        &mut g1,
        &bound1,
        &params.config.backbone,
        &inputs,
        &base_cfg,
        None,
    )
    .unwrap();
    let crafted: Vec<Tensor> = fwd1
        .segments
        .iter()
        .map(|seg| {
            let d = g1.value(seg.h_nodes[0]).cols();
            let mut rows = Vec::with_capacity(cfg.k * d);
            for &h in &seg.h_nodes {
                rows.extend_from_slice(g1.value(h).data());
            }
            Tensor::matrix(cfg.k, d, rows).unwrap()
        })
        .collect();

    let tf_cfg = sketchlm::objective::LossConfig {
        latent_input_mode: LatentInputMode::TeacherForce,
        ..base_cfg.clone()
    };
    let mut g2 = Graph::new();
    let bound2 = params.bind(&mut g2).unwrap();
    let fwd2 = objective::train_forward(
        &mut g2,
        &bound2,
        &params.config.backbone,
        &inputs,
        &tf_cfg,
        Some(&crafted),
    )
    .unwrap();

    let ntp1 = g1.value(fwd1.loss_ntp).item();
    let ntp2 = g2.value(fwd2.loss_ntp).item();
    assert_eq!(ntp1.to_bits(), ntp2.to_bits(), "modes must agree bitwise");
    // The sketch loss is 0 in both (hiddens equal targets exactly).
    let s2 = fwd2.loss_sketch.map(|n| g2.value(n).item()).unwrap();
    assert_eq!(s2, 0.0);
}

#[test]
fn ntp_prefix_agrees_across_modes_before_first_latent() {
    // Before any latent slot the two modes see identical inputs, so the
    // hiddens of the context and question region match bitwise.
    let cfg = tiny_config(16);
    let (params, prepared) = setup(&cfg);
    let prep = &prepared[0];
    let inputs = objective::SampleInputs {
        context_patches: &prep.context_patches,
        sketch_features: &prep.sketch_features,
        rendered: &prep.rendered,
        plan: &prep.plan,
    };

    let run = |mode: LatentInputMode| -> (Graph, objective::TrainForward) {
        let mut g = Graph::new();
        let bound = params.bind(&mut g).unwrap();
        let loss_cfg = sketchlm::objective::LossConfig {
            latent_input_mode: mode,
            ..cfg.loss_config()
        };
        let fwd = objective::train_forward(
            &mut g,
            &bound,
            &params.config.backbone,
            &inputs,
            &loss_cfg,
            None,
        )
        .unwrap();
        (g, fwd)
    };
    let (g1, f1) = run(LatentInputMode::Propagate);
    let (g2, f2) = run(LatentInputMode::TeacherForce);
    // h_1 of the first segment (the hidden at the sketch-start position)
    // precedes any latent input, so it is mode-independent.
    let a = g1.value(f1.segments[0].h_nodes[0]).data();
    let b = g2.value(f2.segments[0].h_nodes[0]).data();
    for (x, y) in a.iter().zip(b) {
        assert_eq!(x.to_bits(), y.to_bits());
    }
}

fn grad_check_mode(mode: LatentInputMode, lambda: f64) -> f64 {
    let cfg = TrainConfig {
        latent_input_mode: mode,
        lambda_sketch: lambda,
        d_model: 8,
        n_heads: 2,
        d_ff: 16,
        d_enc: 4,
        max_seq_len: 96,
        ..tiny_config(8)
    };
    let (params, prepared) = setup(&cfg);
    let prep = &prepared[0];
    let loss_cfg = cfg.loss_config();

    let trainable: Vec<(String, Tensor)> = params
        .named_tensors()
        .into_iter()
        .filter(|(n, _)| !params.is_frozen(n))
        .map(|(n, t)| (n, t.clone()))
        .collect();

    let eval = |ps: &[(String, Tensor)]| -> Result<f64> {
        let mut p = params.clone();
        for (name, tensor) in ps {
            *p.tensor_mut(name).unwrap() = tensor.clone();
        }
        let (total, _, _, _) = sample_loss_and_grad(&p, prep, &loss_cfg)?;
        Ok(total)
    };

    let analytic: Gradients = {
        let (_, _, _, grads) = sample_loss_and_grad(&params, prep, &loss_cfg).unwrap();
        grads
    };
    finite_difference_check(eval, &trainable, &analytic, 1e-4).unwrap()
}

#[test]
fn full_loss_gradients_match_finite_differences_propagate() {
    let err = grad_check_mode(LatentInputMode::Propagate, 0.5);
    assert!(err <= 1e-4, "max rel err {err}");
}

#[test]
fn full_loss_gradients_match_finite_differences_teacher_force() {
    let err = grad_check_mode(LatentInputMode::TeacherForce, 0.5);
    assert!(err <= 1e-4, "max rel err {err}");
}

#[test]
fn cosine_loss_gradients_match_finite_differences() {
    let cfg = TrainConfig {
        sketch_loss_kind: SketchLossKind::Cosine,
        d_model: 8,
        n_heads: 2,
        d_ff: 16,
        d_enc: 4,
        max_seq_len: 96,
        ..tiny_config(8)
    };
    let (params, prepared) = setup(&cfg);
    let prep = &prepared[0];
    let loss_cfg = cfg.loss_config();
    let trainable: Vec<(String, Tensor)> = params
        .named_tensors()
        .into_iter()
        .filter(|(n, _)| !params.is_frozen(n))
        .map(|(n, t)| (n, t.clone()))
        .collect();
    let eval = |ps: &[(String, Tensor)]| -> Result<f64> {
        let mut p = params.clone();
        for (name, tensor) in ps {
            *p.tensor_mut(name).unwrap() = tensor.clone();
        }
        Ok(sample_loss_and_grad(&p, prep, &loss_cfg)?.0)
    };
    let analytic = sample_loss_and_grad(&params, prep, &loss_cfg).unwrap().3;
    // Smaller eps than the mse checks: the cosine's curvature makes the
    // eps^2 truncation term the dominant error at 1e-4.
    let err = finite_difference_check(eval, &trainable, &analytic, 1e-5).unwrap();
    assert!(err <= 1e-4, "max rel err {err}");
}
