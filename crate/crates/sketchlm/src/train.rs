//! Optimization loop: Adam with a cosine schedule and two learning-rate
//! groups (backbone vs sketch projector), deterministic batching, and
//! resumable state.
//!
//! Determinism contract: everything is a function of the config seed. The
//! main RNG stream is consumed only by parameter init; per-epoch shuffles
//! derive their own stream from (seed, epoch), so a resumed run replays the
//! exact batch order of an uninterrupted one.

use crate::autodiff::{Gradients, Graph};
use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::model::{FreezeFlags, ModelConfig, ModelParams, ParamGroup};
use crate::objective::{
    self, LatentInputMode, LossConfig, SketchLossKind, SupervisionPlan, train_forward,
};
use crate::perception::build_sketch_target;
use crate::taskgen::{RenderedTrace, TraceSample, Variant};
use crate::tensor::Tensor;
use crate::vocab::Vocabulary;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub seed: u64,
    pub total_steps: usize,
    pub batch_size: usize,
    pub lr_backbone: f64,
    pub lr_sketch_proj: f64,
    pub lambda_sketch: f64,
    pub k: usize,
    pub variant: Variant,
    pub latent_input_mode: LatentInputMode,
    pub sketch_loss_kind: SketchLossKind,
    pub detach_latent_inputs: bool,
    pub freeze_e_v: bool,
    pub freeze_proj: bool,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub max_seq_len: usize,
    pub d_enc: usize,
    pub ctx_patch: usize,
    pub sketch_patch: usize,
    pub pos_on_latents: bool,
    /// Evaluate the per-sample graphs of a batch on worker threads. The
    /// gradient reduction stays in batch order, so results are bitwise
    /// identical either way.
    pub parallel_batch: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            seed: 0,
            total_steps: 1000,
            batch_size: 8,
            // Same 10x ratio as the paper-regime preset, rescaled because
            // nothing here is pretrained.
            lr_backbone: 3e-4,
            lr_sketch_proj: 1e-3,
            lambda_sketch: 0.5,
            k: 27,
            variant: Variant::Unified,
            latent_input_mode: LatentInputMode::Propagate,
            sketch_loss_kind: SketchLossKind::Mse,
            detach_latent_inputs: false,
            freeze_e_v: false,
            freeze_proj: false,
            d_model: 64,
            n_layers: 4,
            n_heads: 4,
            d_ff: 256,
            max_seq_len: 512,
            d_enc: 32,
            ctx_patch: 3,
            sketch_patch: 2,
            pos_on_latents: true,
            parallel_batch: false,
        }
    }
}

impl TrainConfig {
    /// Fine-tuning learning rates from the large-model regime: 1e-5 for the
    /// backbone, 1e-4 for the sketch projector.
    pub fn paper_regime() -> Self {
        TrainConfig { lr_backbone: 1e-5, lr_sketch_proj: 1e-4, ..Default::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if self.lr_backbone <= 0.0 || self.lr_sketch_proj <= 0.0 {
            return Err(Error::Contract("learning rates must be > 0".into()));
        }
        if self.lambda_sketch < 0.0 {
            return Err(Error::Contract("lambda_sketch must be >= 0".into()));
        }
        if self.batch_size == 0 || self.total_steps == 0 {
            return Err(Error::Contract("batch_size and total_steps must be > 0".into()));
        }
        if self.k == 0 {
            return Err(Error::Contract("k must be >= 1".into()));
        }
        Ok(())
    }

    pub fn loss_config(&self) -> LossConfig {
        LossConfig {
            lambda_sketch: self.lambda_sketch,
            sketch_loss_kind: self.sketch_loss_kind,
            latent_input_mode: self.latent_input_mode,
            detach_latent_inputs: self.detach_latent_inputs,
        }
    }

    pub fn model_config(&self, vocab_size: usize) -> ModelConfig {
        ModelConfig {
            backbone: crate::backbone::BackboneConfig {
                d_model: self.d_model,
                n_layers: self.n_layers,
                n_heads: self.n_heads,
                d_ff: self.d_ff,
                max_seq_len: self.max_seq_len,
                vocab_size,
                pos_on_latents: self.pos_on_latents,
            },
            d_enc: self.d_enc,
            ctx_patch: self.ctx_patch,
            sketch_patch: self.sketch_patch,
        }
    }

    pub fn freeze_flags(&self) -> FreezeFlags {
        FreezeFlags { e_v: self.freeze_e_v, proj: self.freeze_proj }
    }

    /// Plain-text key=value form; the inverse of `from_key_values`.
    pub fn to_key_values(&self) -> String {
        let mut s = String::new();
        let mut kv = |k: &str, v: String| {
            s.push_str(k);
            s.push('=');
            s.push_str(&v);
            s.push('\n');
        };
        kv("seed", self.seed.to_string());
        kv("total_steps", self.total_steps.to_string());
        kv("batch_size", self.batch_size.to_string());
        kv("lr_backbone", format!("{:e}", self.lr_backbone));
        kv("lr_sketch_proj", format!("{:e}", self.lr_sketch_proj));
        kv("lambda_sketch", self.lambda_sketch.to_string());
        kv("k", self.k.to_string());
        kv("variant", self.variant.name().to_string());
        kv("latent_input_mode", self.latent_input_mode.name().to_string());
        kv("sketch_loss_kind", self.sketch_loss_kind.name().to_string());
        kv("detach_latent_inputs", self.detach_latent_inputs.to_string());
        kv("freeze_e_v", self.freeze_e_v.to_string());
        kv("freeze_proj", self.freeze_proj.to_string());
        kv("d_model", self.d_model.to_string());
        kv("n_layers", self.n_layers.to_string());
        kv("n_heads", self.n_heads.to_string());
        kv("d_ff", self.d_ff.to_string());
        kv("max_seq_len", self.max_seq_len.to_string());
        kv("d_enc", self.d_enc.to_string());
        kv("ctx_patch", self.ctx_patch.to_string());
        kv("sketch_patch", self.sketch_patch.to_string());
        kv("pos_on_latents", self.pos_on_latents.to_string());
        kv("parallel_batch", self.parallel_batch.to_string());
        s
    }

    pub fn from_key_values(text: &str) -> Result<Self> {
        let mut cfg = TrainConfig::default();
        for (ln, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::Format(format!("config line {}: expected key=value, got {raw:?}", ln + 1))
            })?;
            let (key, value) = (key.trim(), value.trim());
            let bad = |e: String| Error::Format(format!("config line {}: {e}", ln + 1));
            macro_rules! parse {
                ($v:expr) => {
                    $v.parse().map_err(|e| bad(format!("{key}: {e}")))?
                };
            }
            match key {
                "profile" => match value {
                    "paper-regime" => {
                        cfg.lr_backbone = 1e-5;
                        cfg.lr_sketch_proj = 1e-4;
                    }
                    "toy" => {}
                    other => return Err(bad(format!("unknown profile {other:?}"))),
                },
                "seed" => cfg.seed = parse!(value),
                "total_steps" => cfg.total_steps = parse!(value),
                "batch_size" => cfg.batch_size = parse!(value),
                "lr_backbone" => cfg.lr_backbone = parse!(value),
                "lr_sketch_proj" => cfg.lr_sketch_proj = parse!(value),
                "lambda_sketch" => cfg.lambda_sketch = parse!(value),
                "k" => cfg.k = parse!(value),
                "variant" => cfg.variant = Variant::parse(value)?,
                "latent_input_mode" => cfg.latent_input_mode = LatentInputMode::parse(value)?,
                "sketch_loss_kind" => cfg.sketch_loss_kind = SketchLossKind::parse(value)?,
                "detach_latent_inputs" => cfg.detach_latent_inputs = parse!(value),
                "freeze_e_v" => cfg.freeze_e_v = parse!(value),
                "freeze_proj" => cfg.freeze_proj = parse!(value),
                "d_model" => cfg.d_model = parse!(value),
                "n_layers" => cfg.n_layers = parse!(value),
                "n_heads" => cfg.n_heads = parse!(value),
                "d_ff" => cfg.d_ff = parse!(value),
                "max_seq_len" => cfg.max_seq_len = parse!(value),
                "d_enc" => cfg.d_enc = parse!(value),
                "ctx_patch" => cfg.ctx_patch = parse!(value),
                "sketch_patch" => cfg.sketch_patch = parse!(value),
                "pos_on_latents" => cfg.pos_on_latents = parse!(value),
                "parallel_batch" => cfg.parallel_batch = parse!(value),
                other => return Err(bad(format!("unknown config key {other:?}"))),
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

/// base_lr * 0.5 * (1 + cos(pi * step / total_steps)).
pub fn cosine_lr(step: usize, total_steps: usize, base_lr: f64) -> Result<f64> {
    if step > total_steps {
        return Err(Error::Contract(format!(
            "cosine_lr: step {step} > total_steps {total_steps}"
        )));
    }
    Ok(base_lr * 0.5 * (1.0 + (std::f64::consts::PI * step as f64 / total_steps as f64).cos()))
}

/// One bias-corrected Adam update for a single tensor.
pub fn adam_update_tensor(
    param: &mut Tensor,
    grad: &Tensor,
    m: &mut Tensor,
    v: &mut Tensor,
    step: usize,
    lr: f64,
) -> Result<()> {
    if !param.same_dims(grad) || !param.same_dims(m) || !param.same_dims(v) {
        return Err(Error::Shape {
            context: "adam_update".into(),
            left: param.dims().to_vec(),
            right: grad.dims().to_vec(),
        });
    }
    debug_assert!(step >= 1);
    let bc1 = 1.0 - ADAM_BETA1.powi(step as i32);
    let bc2 = 1.0 - ADAM_BETA2.powi(step as i32);
    let (pd, gd, md, vd) = (param.data_mut(), grad.data(), m.data_mut(), v.data_mut());
    for i in 0..pd.len() {
        let g = gd[i];
        md[i] = ADAM_BETA1 * md[i] + (1.0 - ADAM_BETA1) * g;
        vd[i] = ADAM_BETA2 * vd[i] + (1.0 - ADAM_BETA2) * g * g;
        let mhat = md[i] / bc1;
        let vhat = vd[i] / bc2;
        pd[i] -= lr * mhat / (vhat.sqrt() + ADAM_EPS);
    }
    Ok(())
}

/// First/second moments for every trainable tensor, in trainable-name
/// order.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub names: Vec<String>,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
}

impl AdamState {
    pub fn new(params: &ModelParams) -> Self {
        let names = params.trainable_names();
        let shapes: Vec<Vec<usize>> = names
            .iter()
            .map(|n| {
                params
                    .named_tensors()
                    .iter()
                    .find(|(name, _)| name == n)
                    .map(|(_, t)| t.dims().to_vec())
                    .expect("trainable name exists")
            })
            .collect();
        AdamState {
            names,
            m: shapes.iter().map(|d| Tensor::zeros(d.clone())).collect(),
            v: shapes.iter().map(|d| Tensor::zeros(d.clone())).collect(),
        }
    }
}

/// One optimizer step over all trainable tensors with per-group rates.
pub fn adam_apply(
    params: &mut ModelParams,
    state: &mut AdamState,
    grads: &Gradients,
    step: usize,
    lr_backbone: f64,
    lr_sketch_proj: f64,
) -> Result<()> {
    for i in 0..state.names.len() {
        let name = state.names[i].clone();
        let grad = grads
            .get(&name)
            .ok_or_else(|| Error::Contract(format!("missing gradient for {name}")))?
            .clone();
        let lr = match ModelParams::group_of(&name) {
            ParamGroup::Backbone => lr_backbone,
            ParamGroup::SketchProj => lr_sketch_proj,
        };
        let param = params
            .tensor_mut(&name)
            .ok_or_else(|| Error::Contract(format!("missing parameter {name}")))?;
        adam_update_tensor(param, &grad, &mut state.m[i], &mut state.v[i], step, lr)?;
    }
    Ok(())
}

/// Model-side view of one training sample, computed once per run.
#[derive(Debug, Clone)]
pub struct PreparedSample {
    pub context_patches: Tensor,
    pub sketch_features: Vec<Tensor>,
    pub rendered: RenderedTrace,
    pub template: crate::backbone::MixedSequence,
    pub plan: SupervisionPlan,
}

pub fn prepare_sample(
    sample: &TraceSample,
    vocab: &Vocabulary,
    params: &ModelParams,
    variant: Variant,
    k: usize,
) -> Result<PreparedSample> {
    let cfg = &params.config;
    let rendered = crate::taskgen::render_variant(sample, variant, vocab, k)?;
    let context_patches = sample.context_image.patches(cfg.ctx_patch)?;
    let context_len = context_patches.rows();
    let mut sketch_features = Vec::with_capacity(rendered.sketch_steps.len());
    let mut targets = Vec::with_capacity(rendered.sketch_steps.len());
    for &step in &rendered.sketch_steps {
        let img = &sample.steps[step].sketch_image;
        sketch_features.push(params.e_s.encode(img)?);
        targets.push(build_sketch_target(img, &params.e_s, &params.proj_s, k)?);
    }
    let (template, plan) = objective::build_supervision_plan(
        context_len,
        cfg.backbone.d_model,
        &rendered,
        targets,
        k,
        cfg.backbone.max_seq_len,
    )?;
    Ok(PreparedSample { context_patches, sketch_features, rendered, template, plan })
}

/// Losses and gradients for one sample under the current parameters.
pub fn sample_loss_and_grad(
    params: &ModelParams,
    prep: &PreparedSample,
    loss_cfg: &LossConfig,
) -> Result<(f64, f64, f64, Gradients)> {
    let mut g = Graph::new();
    let bound = params.bind(&mut g)?;
    let fwd = train_forward(
        &mut g,
        &bound,
        &params.config.backbone,
        &objective::SampleInputs {
            context_patches: &prep.context_patches,
            sketch_features: &prep.sketch_features,
            rendered: &prep.rendered,
            plan: &prep.plan,
        },
        loss_cfg,
        None,
    )?;
    let (total, grads) = g.value_and_grad(fwd.loss_total)?;
    let ntp = g.value(fwd.loss_ntp).item();
    let sketch = fwd.loss_sketch.map_or(0.0, |n| g.value(n).item());
    Ok((total, ntp, sketch, grads))
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRow {
    pub step: usize,
    pub lr: f64,
    pub l_ntp: f64,
    pub l_sketch: f64,
    pub l_total: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub enum TrainOutcome {
    Completed,
    /// Loss or gradients went non-finite; `state` is the last good state.
    AbortedNan { step: usize },
}

/// Resumable training state; the checkpoint payload.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub config: TrainConfig,
    pub params: ModelParams,
    pub adam: AdamState,
    /// Completed optimizer steps.
    pub step: usize,
    pub rng_word_pos: u128,
    pub vocab_words: Vec<String>,
    pub data_task: String,
    pub data_seed_start: u64,
    pub data_count: usize,
}

pub struct TrainRun {
    pub state: TrainState,
    pub metrics: Vec<MetricsRow>,
    pub outcome: TrainOutcome,
}

/// Deterministic per-epoch sample order: Fisher-Yates under a stream
/// derived from (seed, epoch), independent of the main RNG so resumed runs
/// see identical batches.
pub fn epoch_order(seed: u64, epoch: u64, n: usize) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ epoch.wrapping_mul(0x9e3779b97f4a7c15));
    let mut order: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        let j = rng.gen_range(0..=i);
        order.swap(i, j);
    }
    order
}

/// Initialize a fresh training state for a dataset.
pub fn init_state(config: &TrainConfig, dataset: &Dataset) -> Result<TrainState> {
    config.validate()?;
    if dataset.samples.is_empty() {
        return Err(Error::Contract("empty dataset".into()));
    }
    if dataset.header.k != config.k {
        return Err(Error::Contract(format!(
            "dataset K={} but config k={}",
            dataset.header.k, config.k
        )));
    }
    let vocab = dataset.vocab();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let params = ModelParams::init(
        config.model_config(vocab.size()),
        config.freeze_flags(),
        &mut rng,
    )?;
    let adam = AdamState::new(&params);
    Ok(TrainState {
        config: config.clone(),
        params,
        adam,
        step: 0,
        rng_word_pos: rng.get_word_pos(),
        vocab_words: vocab.words().to_vec(),
        data_task: dataset.header.task.clone(),
        data_seed_start: dataset.header.seed_start,
        data_count: dataset.header.count,
    })
}

/// Run (or resume) training to `config.total_steps`, or to `stop_after`
/// completed steps for mid-run checkpointing. Deterministic given the seed:
/// same seed, same dataset, bitwise-identical final state.
pub fn train_run(
    config: &TrainConfig,
    dataset: &Dataset,
    resume: Option<TrainState>,
    stop_after: Option<usize>,
) -> Result<TrainRun> {
    let mut state = match resume {
        Some(s) => {
            if s.config != *config {
                return Err(Error::Contract(
                    "resume state was trained under a different config".into(),
                ));
            }
            s
        }
        None => init_state(config, dataset)?,
    };
    let vocab = dataset.vocab();
    let prepared: Vec<PreparedSample> = dataset
        .samples
        .iter()
        .map(|s| prepare_sample(s, &vocab, &state.params, config.variant, config.k))
        .collect::<Result<Vec<_>>>()?;
    let loss_cfg = config.loss_config();
    let n = prepared.len();

    let stop = stop_after.unwrap_or(config.total_steps).min(config.total_steps);
    let mut metrics = Vec::with_capacity(stop.saturating_sub(state.step));
    let mut cached_epoch: Option<(u64, Vec<usize>)> = None;

    for step in state.step..stop {
        let lr_factor = cosine_lr(step, config.total_steps, 1.0)?;
        let batch: Vec<usize> = (0..config.batch_size)
            .map(|i| {
                let c = step * config.batch_size + i;
                let epoch = (c / n) as u64;
                if cached_epoch.as_ref().map(|(e, _)| *e) != Some(epoch) {
                    cached_epoch = Some((epoch, epoch_order(config.seed, epoch, n)));
                }
                cached_epoch.as_ref().unwrap().1[c % n]
            })
            .collect();

        let results: Vec<Result<(f64, f64, f64, Gradients)>> = if config.parallel_batch {
            batch
                .par_iter()
                .map(|&i| sample_loss_and_grad(&state.params, &prepared[i], &loss_cfg))
                .collect()
        } else {
            batch
                .iter()
                .map(|&i| sample_loss_and_grad(&state.params, &prepared[i], &loss_cfg))
                .collect()
        };

        let mut sum_total = 0.0;
        let mut sum_ntp = 0.0;
        let mut sum_sketch = 0.0;
        let mut mean_grads: Option<Gradients> = None;
        let inv_b = 1.0 / config.batch_size as f64;
        let mut nan = false;
        for r in results {
            let (total, ntp, sketch, grads) = match r {
                Ok(v) => v,
                Err(Error::Numerical(_)) => {
                    nan = true;
                    break;
                }
                Err(e) => return Err(e),
            };
            if !total.is_finite() {
                nan = true;
                break;
            }
            sum_total += total;
            sum_ntp += ntp;
            sum_sketch += sketch;
            match &mut mean_grads {
                None => mean_grads = Some(grads),
                Some(acc) => acc.add_assign(&grads)?,
            }
        }
        if nan {
            return Ok(TrainRun {
                state,
                metrics,
                outcome: TrainOutcome::AbortedNan { step: step + 1 },
            });
        }
        let mut grads = mean_grads.expect("batch_size > 0");
        grads.scale_in_place(inv_b);
        if !grads_finite(&grads) {
            return Ok(TrainRun {
                state,
                metrics,
                outcome: TrainOutcome::AbortedNan { step: step + 1 },
            });
        }

        adam_apply(
            &mut state.params,
            &mut state.adam,
            &grads,
            step + 1,
            config.lr_backbone * lr_factor,
            config.lr_sketch_proj * lr_factor,
        )?;
        state.step = step + 1;
        metrics.push(MetricsRow {
            step: step + 1,
            lr: lr_factor,
            l_ntp: sum_ntp * inv_b,
            l_sketch: sum_sketch * inv_b,
            l_total: sum_total * inv_b,
        });
    }

    Ok(TrainRun { state, metrics, outcome: TrainOutcome::Completed })
}

fn grads_finite(grads: &Gradients) -> bool {
    grads.iter().all(|(_, t)| t.is_finite())
}
