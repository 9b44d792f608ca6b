//! Turns an interleaved trace into model inputs plus a per-position
//! supervision plan, and computes the joint loss.
//!
//! The plan encodes the autoregressive shift (the output at slot p
//! supervises slot p+1) and the sketch mask: positions whose successor is a
//! latent slot are paired with a reconstruction target vector and never
//! enter the cross-entropy. `train_forward` builds the whole training step
//! as one autodiff graph; inside sketch segments it feeds each position's
//! hidden state back in as the next input (propagate mode) or the
//! ground-truth target vector (teacher-force mode).

use crate::autodiff::{Graph, NodeId};
use crate::backbone::{BackboneConfig, MixedSequence, SequenceElement};
use crate::error::{Error, Result};
use crate::perception::SketchTarget;
use crate::taskgen::{RenderedSlot, RenderedTrace};
use crate::tensor::{self, Tensor};

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum PlanEntry {
    Ignore,
    NextDiscrete(u32),
    /// Successor slot is the j-th latent slot (1-based) of sketch segment
    /// `seg`; the hidden at this position is h_j, paired with v_{s,j}.
    NextLatent { seg: usize, j: usize },
}

#[derive(Debug, Clone)]
pub struct SupervisionPlan {
    pub entries: Vec<PlanEntry>,
    pub targets: Vec<SketchTarget>,
    pub k: usize,
    /// Positions of the V_e slots plus question tokens (the unsupervised
    /// prompt region).
    pub prefix_len: usize,
}

impl SupervisionPlan {
    pub fn num_segments(&self) -> usize {
        self.targets.len()
    }

    /// Positions with a discrete next-token target, ascending.
    pub fn ce_positions(&self) -> Vec<(usize, u32)> {
        self.entries
            .iter()
            .enumerate()
            .filter_map(|(p, e)| match e {
                PlanEntry::NextDiscrete(t) => Some((p, *t)),
                _ => None,
            })
            .collect()
    }

    /// Positions carrying h_j for a segment, in j order.
    pub fn latent_positions(&self, seg: usize) -> Vec<usize> {
        let mut out: Vec<(usize, usize)> = self
            .entries
            .iter()
            .enumerate()
            .filter_map(|(p, e)| match e {
                PlanEntry::NextLatent { seg: s, j } if *s == seg => Some((*j, p)),
                _ => None,
            })
            .collect();
        out.sort();
        out.into_iter().map(|(_, p)| p).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SketchLossKind {
    Mse,
    Cosine,
}

impl SketchLossKind {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "mse" => Ok(SketchLossKind::Mse),
            "cosine" => Ok(SketchLossKind::Cosine),
            other => Err(Error::Contract(format!("unknown sketch loss kind {other:?}"))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            SketchLossKind::Mse => "mse",
            SketchLossKind::Cosine => "cosine",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LatentInputMode {
    Propagate,
    TeacherForce,
}

impl LatentInputMode {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "propagate" => Ok(LatentInputMode::Propagate),
            "teacher-force" => Ok(LatentInputMode::TeacherForce),
            other => Err(Error::Contract(format!("unknown latent input mode {other:?}"))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            LatentInputMode::Propagate => "propagate",
            LatentInputMode::TeacherForce => "teacher-force",
        }
    }
}

#[derive(Debug, Clone)]
pub struct LossConfig {
    pub lambda_sketch: f64,
    pub sketch_loss_kind: SketchLossKind,
    pub latent_input_mode: LatentInputMode,
    /// Stop gradients at propagated latent inputs (ablation; default off:
    /// gradients flow through the propagation chain).
    pub detach_latent_inputs: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            lambda_sketch: 0.5,
            sketch_loss_kind: SketchLossKind::Mse,
            latent_input_mode: LatentInputMode::Propagate,
            detach_latent_inputs: false,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if self.lambda_sketch < 0.0 {
            return Err(Error::Contract("lambda_sketch must be >= 0".into()));
        }
        Ok(())
    }
}

/// Builds the mixed-sequence template and the per-position plan for one
/// rendered trace. `context_len` counts the V_e slots in front of the
/// question. Latent slots get zero-vector placeholders, filled per latent
/// input mode during training.
pub fn build_supervision_plan(
    context_len: usize,
    d_model: usize,
    rendered: &RenderedTrace,
    targets: Vec<SketchTarget>,
    k: usize,
    max_seq_len: usize,
) -> Result<(MixedSequence, SupervisionPlan)> {
    if targets.len() != rendered.sketch_steps.len() {
        return Err(Error::Contract(format!(
            "{} sketch targets for {} sketch segments",
            targets.len(),
            rendered.sketch_steps.len()
        )));
    }
    for (i, t) in targets.iter().enumerate() {
        if t.k() != k {
            return Err(Error::Contract(format!(
                "segment {i}: target has {} rows, expected K={k}",
                t.k()
            )));
        }
    }
    let n = context_len + rendered.question_ids.len() + rendered.slots.len();
    if n > max_seq_len {
        return Err(Error::Capacity {
            context: "trace length".into(),
            length: n,
            max: max_seq_len,
        });
    }

    let mut elements = Vec::with_capacity(n);
    for _ in 0..context_len {
        elements.push(SequenceElement::Continuous(vec![0.0; d_model]));
    }
    for &id in &rendered.question_ids {
        elements.push(SequenceElement::Discrete(id));
    }
    // Segment ordinal (0-based within this trace) per raw step index.
    let seg_of_step = |step: usize| -> usize {
        rendered
            .sketch_steps
            .iter()
            .position(|&s| s == step)
            .expect("latent slot for an unrendered step")
    };
    for slot in &rendered.slots {
        match slot {
            RenderedSlot::Tok(id) => elements.push(SequenceElement::Discrete(*id)),
            RenderedSlot::Latent { .. } => {
                elements.push(SequenceElement::Continuous(vec![0.0; d_model]))
            }
        }
    }

    let prefix_len = context_len + rendered.question_ids.len();
    let mut entries = vec![PlanEntry::Ignore; n];
    for (p, entry) in entries.iter_mut().enumerate() {
        let successor = p + 1;
        if successor >= n || successor < prefix_len {
            continue; // last slot, or still inside the prompt region
        }
        let slot = &rendered.slots[successor - prefix_len];
        *entry = match slot {
            RenderedSlot::Tok(id) => PlanEntry::NextDiscrete(*id),
            RenderedSlot::Latent { step, j } => {
                PlanEntry::NextLatent { seg: seg_of_step(*step), j: *j }
            }
        };
    }

    Ok((
        MixedSequence::new(elements),
        SupervisionPlan { entries, targets, k, prefix_len },
    ))
}

/// Mean cross-entropy over positions with a discrete next-token target.
/// Latent and ignored positions contribute nothing (the sketch mask).
pub fn loss_ntp(logits: &Tensor, plan: &SupervisionPlan) -> Result<f64> {
    let supervised = plan.ce_positions();
    if supervised.is_empty() {
        return Err(Error::Contract(
            "loss_ntp: plan has no discrete-supervised positions".into(),
        ));
    }
    let mut total = 0.0;
    for (p, t) in &supervised {
        total += tensor::softmax_cross_entropy_row(logits.row_slice(*p), *t as usize)?;
    }
    Ok(total / supervised.len() as f64)
}

/// Per-segment reconstruction loss against the plan's targets, averaged
/// over segments; 0.0 when the plan has no sketch segments.
pub fn loss_sketch(hiddens: &Tensor, plan: &SupervisionPlan, kind: SketchLossKind) -> Result<f64> {
    if plan.num_segments() == 0 {
        return Ok(0.0);
    }
    let d = hiddens.cols();
    let mut total = 0.0;
    for seg in 0..plan.num_segments() {
        let positions = plan.latent_positions(seg);
        let mut rows = Vec::with_capacity(positions.len() * d);
        for &p in &positions {
            rows.extend_from_slice(hiddens.row_slice(p));
        }
        let h = Tensor::matrix(positions.len(), d, rows)?;
        let target = &plan.targets[seg].vectors;
        total += match kind {
            SketchLossKind::Mse => tensor::mse_mean_rows(&h, target)?,
            SketchLossKind::Cosine => cosine_loss(&h, target)?,
        };
    }
    Ok(total / plan.num_segments() as f64)
}

fn cosine_loss(h: &Tensor, v: &Tensor) -> Result<f64> {
    if !h.same_dims(v) {
        return Err(Error::Shape {
            context: "cosine_loss".into(),
            left: h.dims().to_vec(),
            right: v.dims().to_vec(),
        });
    }
    let (k, d) = (h.rows(), h.cols());
    let mut mean_cos = 0.0;
    for r in 0..k {
        let a = &h.data()[r * d..(r + 1) * d];
        let b = &v.data()[r * d..(r + 1) * d];
        let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
        let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
        let denom = na * nb;
        if denom > 1e-12 {
            mean_cos += a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>() / denom;
        }
    }
    Ok(1.0 - mean_cos / k as f64)
}

/// L = L_NTP + lambda * L_Sketch. At lambda == 0 this is L_NTP itself,
/// bitwise.
pub fn loss_total(ntp: f64, sketch: f64, cfg: &LossConfig) -> Result<f64> {
    if !ntp.is_finite() || !sketch.is_finite() {
        return Err(Error::Numerical(format!(
            "loss components not finite: ntp={ntp}, sketch={sketch}"
        )));
    }
    if cfg.lambda_sketch == 0.0 {
        Ok(ntp)
    } else {
        Ok(ntp + cfg.lambda_sketch * sketch)
    }
}

/// Model parameters bound into a graph (params or frozen leaves).
pub struct BoundModel {
    pub d_model: usize,
    pub n_heads: usize,
    pub embed: NodeId,
    pub pos: NodeId,
    pub layers: Vec<BoundLayer>,
    pub final_ln_g: NodeId,
    pub final_ln_b: NodeId,
    pub w_out: NodeId,
    pub b_out: NodeId,
    pub e_v_w: NodeId,
    pub e_v_b: NodeId,
    pub proj_w: NodeId,
    pub proj_b: NodeId,
    pub proj_s_w: NodeId,
    pub proj_s_b: NodeId,
}

pub struct BoundLayer {
    pub wq: NodeId,
    pub bq: NodeId,
    pub wk: NodeId,
    pub wv: NodeId,
    pub bv: NodeId,
    pub wo: NodeId,
    pub bo: NodeId,
    pub ln1_g: NodeId,
    pub ln1_b: NodeId,
    pub ln2_g: NodeId,
    pub ln2_b: NodeId,
    pub w1: NodeId,
    pub b1: NodeId,
    pub w2: NodeId,
    pub b2: NodeId,
}

/// Diagnostics exposing the latent plumbing of one training forward, for
/// invariant checks.
pub struct SegmentDiag {
    /// Element node fed at latent slot j (before positional addition).
    pub input_nodes: Vec<NodeId>,
    /// Hidden node h_j (the output at the position preceding latent slot j);
    /// in propagate mode these are the same nodes as `input_nodes`.
    pub h_nodes: Vec<NodeId>,
    /// The in-graph target matrix node for this segment.
    pub target_node: NodeId,
}

pub struct TrainForward {
    pub loss_total: NodeId,
    pub loss_ntp: NodeId,
    /// Absent when the trace has no sketch segments.
    pub loss_sketch: Option<NodeId>,
    pub segments: Vec<SegmentDiag>,
}

/// Everything train_forward needs to know about one sample.
pub struct SampleInputs<'a> {
    /// Flattened context-image patches, one row per patch.
    pub context_patches: &'a Tensor,
    /// Frozen sketch-encoder features per rendered sketch segment.
    pub sketch_features: &'a [Tensor],
    pub rendered: &'a RenderedTrace,
    pub plan: &'a SupervisionPlan,
}

/// Builds the full training forward for one sample inside `g`: context
/// encoding, chunked causal transformer with latent feedback, in-graph
/// sketch targets (so proj_s trains through the reconstruction loss), and
/// the joint objective.
///
/// `fixed_targets` overrides the in-graph targets with constants (used by
/// equivalence tests).
pub fn train_forward(
    g: &mut Graph,
    bound: &BoundModel,
    config: &BackboneConfig,
    inputs: &SampleInputs<'_>,
    cfg: &LossConfig,
    fixed_targets: Option<&[Tensor]>,
) -> Result<TrainForward> {
    cfg.validate()?;
    let k = inputs.plan.k;
    let rendered = inputs.rendered;
    let n_segments = rendered.sketch_steps.len();
    if inputs.sketch_features.len() != n_segments {
        return Err(Error::Contract(format!(
            "{} sketch feature blocks for {} segments",
            inputs.sketch_features.len(),
            n_segments
        )));
    }

    // In-graph reconstruction targets: pool(proj_s(E_s features)).
    let mut target_nodes = Vec::with_capacity(n_segments);
    if let Some(fixed) = fixed_targets {
        if fixed.len() != n_segments {
            return Err(Error::Contract("fixed_targets length mismatch".into()));
        }
        for t in fixed {
            target_nodes.push(g.leaf(t.clone()));
        }
    } else {
        for feats in inputs.sketch_features {
            let f = g.leaf(feats.clone());
            let projected = g.matmul(f, bound.proj_s_w)?;
            let projected = g.add_row(projected, bound.proj_s_b)?;
            target_nodes.push(g.pool_groups(projected, k)?);
        }
    }

    // Context embedding chunk: V_e = proj(E_v(patches)).
    let patches = g.leaf(inputs.context_patches.clone());
    let feats = g.matmul(patches, bound.e_v_w)?;
    let feats = g.add_row(feats, bound.e_v_b)?;
    let ve = g.matmul(feats, bound.proj_w)?;
    let ve = g.add_row(ve, bound.proj_b)?;
    let context_len = g.value(ve).rows();

    let mut stream = StreamState::new(bound.layers.len());
    let mut pos_hidden: Vec<(NodeId, usize)> = Vec::new(); // per position

    // Context chunk.
    let positions: Vec<u32> = (0..context_len as u32).collect();
    let pos_rows = g.gather_rows(bound.pos, &positions)?;
    let x = g.add(ve, pos_rows)?;
    let hidden = transformer_chunk(g, bound, config, &mut stream, x)?;
    for r in 0..context_len {
        pos_hidden.push((hidden, r));
    }

    // Question + response: runs of discrete tokens form chunks; each latent
    // slot is processed singly so its input can depend on earlier hiddens.
    let mut segments: Vec<SegmentDiag> = (0..n_segments)
        .map(|s| SegmentDiag {
            input_nodes: Vec::with_capacity(k),
            h_nodes: Vec::with_capacity(k),
            target_node: target_nodes[s],
        })
        .collect();

    let mut pending_tokens: Vec<u32> = rendered.question_ids.clone();
    let mut last_hidden_row: Option<NodeId> = None;

    let flush_tokens = |g: &mut Graph,
                        stream: &mut StreamState,
                        pos_hidden: &mut Vec<(NodeId, usize)>,
                        last: &mut Option<NodeId>,
                        tokens: &mut Vec<u32>|
     -> Result<()> {
        if tokens.is_empty() {
            return Ok(());
        }
        let start = pos_hidden.len() as u32;
        let positions: Vec<u32> = (start..start + tokens.len() as u32).collect();
        let emb = g.gather_rows(bound.embed, tokens)?;
        let pos_rows = g.gather_rows(bound.pos, &positions)?;
        let x = g.add(emb, pos_rows)?;
        let hidden = transformer_chunk(g, bound, config, stream, x)?;
        let n = tokens.len();
        for r in 0..n {
            pos_hidden.push((hidden, r));
        }
        *last = Some(g.slice_rows(hidden, n - 1, 1)?);
        tokens.clear();
        Ok(())
    };

    let seg_of_step = |step: usize| -> usize {
        rendered
            .sketch_steps
            .iter()
            .position(|&s| s == step)
            .expect("latent slot for an unrendered step")
    };

    for slot in &rendered.slots {
        match slot {
            RenderedSlot::Tok(id) => pending_tokens.push(*id),
            RenderedSlot::Latent { step, j } => {
                flush_tokens(
                    g,
                    &mut stream,
                    &mut pos_hidden,
                    &mut last_hidden_row,
                    &mut pending_tokens,
                )?;
                let seg = seg_of_step(*step);
                // h_j: the hidden emitted at the position just before this
                // slot (the sketch-start token for j=1, else latent j-1).
                let h_j = last_hidden_row
                    .ok_or_else(|| Error::Contract("latent slot with no predecessor".into()))?;
                segments[seg].h_nodes.push(h_j);

                let element = match cfg.latent_input_mode {
                    LatentInputMode::Propagate => {
                        if cfg.detach_latent_inputs {
                            g.stop_grad(h_j)
                        } else {
                            h_j
                        }
                    }
                    LatentInputMode::TeacherForce => {
                        g.slice_rows(target_nodes[seg], j - 1, 1)?
                    }
                };
                segments[seg].input_nodes.push(element);

                let position = pos_hidden.len() as u32;
                let x = if config.pos_on_latents {
                    let pos_row = g.gather_rows(bound.pos, &[position])?;
                    g.add(element, pos_row)?
                } else {
                    element
                };
                let hidden = transformer_chunk(g, bound, config, &mut stream, x)?;
                pos_hidden.push((hidden, 0));
                last_hidden_row = Some(hidden);
            }
        }
    }
    flush_tokens(
        g,
        &mut stream,
        &mut pos_hidden,
        &mut last_hidden_row,
        &mut pending_tokens,
    )?;

    // Cross-entropy over discrete-supervised positions only: gather their
    // hidden rows, run the output head on just those rows. Latent positions
    // never reach the head, which is the sketch mask in structural form.
    let supervised = inputs.plan.ce_positions();
    if supervised.is_empty() {
        return Err(Error::Contract("plan has no discrete-supervised positions".into()));
    }
    let mut runs: Vec<NodeId> = Vec::new();
    let mut targets: Vec<u32> = Vec::with_capacity(supervised.len());
    let mut i = 0;
    while i < supervised.len() {
        let (p0, _) = supervised[i];
        let (node, row0) = pos_hidden[p0];
        let mut len = 1;
        while i + len < supervised.len() {
            let (pn, _) = supervised[i + len];
            let (n2, r2) = pos_hidden[pn];
            if n2 == node && r2 == row0 + len && pn == p0 + len {
                len += 1;
            } else {
                break;
            }
        }
        runs.push(g.slice_rows(node, row0, len)?);
        for (_, t) in &supervised[i..i + len] {
            targets.push(*t);
        }
        i += len;
    }
    let h_ce = if runs.len() == 1 { runs[0] } else { g.stack_rows(&runs)? };
    let logits = g.matmul(h_ce, bound.w_out)?;
    let logits = g.add_row(logits, bound.b_out)?;
    let ntp = g.ce_rows(logits, &targets)?;

    // Per-segment reconstruction losses, averaged over segments.
    let loss_sketch = if n_segments > 0 {
        let mut seg_losses = Vec::with_capacity(n_segments);
        for seg in &segments {
            let h = g.stack_rows(&seg.h_nodes)?;
            let l = match cfg.sketch_loss_kind {
                SketchLossKind::Mse => g.mse_mean_rows(h, seg.target_node)?,
                SketchLossKind::Cosine => g.cosine_mean_rows(h, seg.target_node)?,
            };
            seg_losses.push(l);
        }
        Some(g.mean_scalars(&seg_losses)?)
    } else {
        None
    };

    let loss_total = match loss_sketch {
        Some(ls) if cfg.lambda_sketch != 0.0 => g.add_scaled(ntp, ls, cfg.lambda_sketch),
        _ => ntp,
    };

    if !g.value(loss_total).item().is_finite() {
        return Err(Error::Numerical("training loss is not finite".into()));
    }

    Ok(TrainForward { loss_total, loss_ntp: ntp, loss_sketch, segments })
}

/// Per-layer key/value chunk lists for the growing sequence.
struct StreamState {
    keys: Vec<Vec<NodeId>>,
    values: Vec<Vec<NodeId>>,
}

impl StreamState {
    fn new(n_layers: usize) -> Self {
        StreamState {
            keys: vec![Vec::new(); n_layers],
            values: vec![Vec::new(); n_layers],
        }
    }
}

/// One pre-norm transformer pass over a chunk of new positions, attending
/// causally to everything processed so far. Returns the final post-norm
/// hidden rows for the chunk.
fn transformer_chunk(
    g: &mut Graph,
    bound: &BoundModel,
    config: &BackboneConfig,
    stream: &mut StreamState,
    mut x: NodeId,
) -> Result<NodeId> {
    for (li, layer) in bound.layers.iter().enumerate() {
        let normed = g.layer_norm(x, layer.ln1_g, layer.ln1_b)?;
        let q = g.matmul(normed, layer.wq)?;
        let q = g.add_row(q, layer.bq)?;
        let kc = g.matmul(normed, layer.wk)?;
        let vc = g.matmul(normed, layer.wv)?;
        let vc = g.add_row(vc, layer.bv)?;
        stream.keys[li].push(kc);
        stream.values[li].push(vc);
        let att = g.attention(q, &stream.keys[li], &stream.values[li], config.n_heads)?;
        let att = g.matmul(att, layer.wo)?;
        let att = g.add_row(att, layer.bo)?;
        x = g.add(x, att)?;

        let normed = g.layer_norm(x, layer.ln2_g, layer.ln2_b)?;
        let h1 = g.matmul(normed, layer.w1)?;
        let h1 = g.add_row(h1, layer.b1)?;
        let h1 = g.gelu(h1);
        let h2 = g.matmul(h1, layer.w2)?;
        let h2 = g.add_row(h2, layer.b2)?;
        x = g.add(x, h2)?;
    }
    g.layer_norm(x, bound.final_ln_g, bound.final_ln_b)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::taskgen::{self, Variant};
    use crate::vocab::{self, Vocabulary};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn vocab_for(samples: &[&taskgen::TraceSample]) -> Vocabulary {
        let lines: Vec<String> = samples
            .iter()
            .flat_map(|s| taskgen::sample_text_lines(s))
            .map(str::to_string)
            .collect();
        Vocabulary::build(&lines)
    }

    fn fake_targets(n: usize, k: usize, d: usize, seed: u64) -> Vec<SketchTarget> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| SketchTarget {
                vectors: Tensor::matrix(
                    k,
                    d,
                    (0..k * d).map(|_| rng.gen_range(-1.0..1.0)).collect(),
                )
                .unwrap(),
            })
            .collect()
    }

    fn sample_with_steps(steps: usize) -> taskgen::TraceSample {
        let spec = taskgen::MazeSpec { allow_degenerate: true, ..Default::default() };
        let mut seed = 0;
        loop {
            let s = taskgen::gen_maze(seed, &spec).unwrap();
            if s.steps.len() == steps {
                return s;
            }
            seed += 1;
        }
    }

    #[test]
    fn zero_sketch_steps_plan_is_all_discrete_or_ignore() {
        let sample = sample_with_steps(2);
        let v = vocab_for(&[&sample]);
        let rendered = taskgen::render_variant(&sample, Variant::TextOnly, &v, 3).unwrap();
        let (_, plan) = build_supervision_plan(4, 8, &rendered, vec![], 3, 256).unwrap();
        assert!(plan
            .entries
            .iter()
            .all(|e| !matches!(e, PlanEntry::NextLatent { .. })));
        assert_eq!(plan.num_segments(), 0);
    }

    #[test]
    fn one_segment_k2_hand_enumeration() {
        // Around a sketch segment with K=2 the plan reads:
        // position of <|sketch_start|> -> NextLatent(seg, 1)
        // position of latent 1         -> NextLatent(seg, 2)
        // position of latent 2         -> NextDiscrete(<|sketch_end|>)
        let sample = sample_with_steps(1);
        let v = vocab_for(&[&sample]);
        let k = 2;
        let rendered = taskgen::render_variant(&sample, Variant::Unified, &v, k).unwrap();
        let targets = fake_targets(1, k, 8, 0);
        let context_len = 4;
        let (template, plan) =
            build_supervision_plan(context_len, 8, &rendered, targets, k, 256).unwrap();

        let prefix = context_len + rendered.question_ids.len();
        let start_slot = rendered
            .slots
            .iter()
            .position(|s| matches!(s, RenderedSlot::Tok(vocab::SKETCH_START)))
            .unwrap()
            + prefix;
        assert_eq!(
            plan.entries[start_slot],
            PlanEntry::NextLatent { seg: 0, j: 1 }
        );
        assert_eq!(
            plan.entries[start_slot + 1],
            PlanEntry::NextLatent { seg: 0, j: 2 }
        );
        assert_eq!(
            plan.entries[start_slot + 2],
            PlanEntry::NextDiscrete(vocab::SKETCH_END)
        );
        // Latent slots carry continuous placeholders in the template.
        assert!(matches!(
            template.elements[start_slot + 1],
            SequenceElement::Continuous(_)
        ));
    }

    #[test]
    fn visual_only_plan_keeps_segments_no_think() {
        let sample = sample_with_steps(2);
        let v = vocab_for(&[&sample]);
        let k = 3;
        let rendered = taskgen::render_variant(&sample, Variant::VisualOnly, &v, k).unwrap();
        let targets = fake_targets(2, k, 8, 1);
        let (_, plan) = build_supervision_plan(4, 8, &rendered, targets, k, 256).unwrap();
        assert_eq!(plan.num_segments(), 2);
        for seg in 0..2 {
            assert_eq!(plan.latent_positions(seg).len(), k);
        }
        assert!(!plan
            .ce_positions()
            .iter()
            .any(|(_, t)| *t == vocab::THINK_START || *t == vocab::THINK_END));
    }

    #[test]
    fn capacity_and_target_mismatch_errors() {
        let sample = sample_with_steps(1);
        let v = vocab_for(&[&sample]);
        let rendered = taskgen::render_variant(&sample, Variant::Unified, &v, 2).unwrap();
        assert!(matches!(
            build_supervision_plan(4, 8, &rendered, fake_targets(1, 2, 8, 0), 2, 10),
            Err(Error::Capacity { .. })
        ));
        assert!(build_supervision_plan(4, 8, &rendered, vec![], 2, 256).is_err());
        assert!(build_supervision_plan(4, 8, &rendered, fake_targets(1, 3, 8, 0), 2, 256).is_err());
    }

    fn plan_for_loss_tests(k: usize, d: usize) -> (SupervisionPlan, usize) {
        let sample = sample_with_steps(2);
        let v = vocab_for(&[&sample]);
        let rendered = taskgen::render_variant(&sample, Variant::Unified, &v, k).unwrap();
        let targets = fake_targets(2, k, d, 7);
        let (template, plan) =
            build_supervision_plan(4, d, &rendered, targets, k, 512).unwrap();
        (plan, template.len())
    }

    #[test]
    fn perfect_logits_drive_ntp_to_zero() {
        let (plan, n) = plan_for_loss_tests(2, 8);
        let vocab_size = 32;
        let mut logits = Tensor::zeros(vec![n, vocab_size]);
        for (p, t) in plan.ce_positions() {
            for j in 0..vocab_size {
                logits.data_mut()[p * vocab_size + j] = if j == t as usize { 20.0 } else { 0.0 };
            }
        }
        assert!(loss_ntp(&logits, &plan).unwrap() <= 1e-6);
    }

    #[test]
    fn ntp_ignores_latent_positions_bitwise() {
        let (plan, n) = plan_for_loss_tests(3, 8);
        let vocab_size = 32;
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut logits = Tensor::matrix(
            n,
            vocab_size,
            (0..n * vocab_size).map(|_| rng.gen_range(-2.0..2.0)).collect(),
        )
        .unwrap();
        let before = loss_ntp(&logits, &plan).unwrap();
        for seg in 0..plan.num_segments() {
            for p in plan.latent_positions(seg) {
                for j in 0..vocab_size {
                    logits.data_mut()[p * vocab_size + j] = rng.gen_range(-100.0..100.0);
                }
            }
        }
        let after = loss_ntp(&logits, &plan).unwrap();
        assert_eq!(before.to_bits(), after.to_bits());
    }

    #[test]
    fn uniform_logits_give_log_vocab() {
        let (plan, n) = plan_for_loss_tests(2, 8);
        let logits = Tensor::zeros(vec![n, 32]);
        let l = loss_ntp(&logits, &plan).unwrap();
        assert!((l - 32.0f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn sketch_loss_zero_when_hiddens_equal_targets() {
        let (plan, n) = plan_for_loss_tests(2, 8);
        let mut hiddens = Tensor::zeros(vec![n, 8]);
        for seg in 0..plan.num_segments() {
            for (ji, p) in plan.latent_positions(seg).iter().enumerate() {
                let row = plan.targets[seg].vectors.row_slice(ji).to_vec();
                hiddens.data_mut()[p * 8..(p + 1) * 8].copy_from_slice(&row);
            }
        }
        assert_eq!(loss_sketch(&hiddens, &plan, SketchLossKind::Mse).unwrap(), 0.0);
    }

    #[test]
    fn sketch_loss_matches_scalar_oracle() {
        // One segment, K=2, d=2, hand values.
        let sample = sample_with_steps(1);
        let v = vocab_for(&[&sample]);
        let rendered = taskgen::render_variant(&sample, Variant::Unified, &v, 2).unwrap();
        let targets = vec![SketchTarget {
            vectors: Tensor::matrix(2, 2, vec![0.0, 0.0, 0.0, 2.0]).unwrap(),
        }];
        let (template, plan) = build_supervision_plan(4, 2, &rendered, targets, 2, 256).unwrap();
        let mut hiddens = Tensor::zeros(vec![template.len(), 2]);
        let ps = plan.latent_positions(0);
        hiddens.data_mut()[ps[0] * 2] = 1.0; // h_1 = (1,0) vs (0,0)
        hiddens.data_mut()[ps[1] * 2 + 1] = 0.0; // h_2 = (0,0) vs (0,2)
        let got = loss_sketch(&hiddens, &plan, SketchLossKind::Mse).unwrap();
        assert!((got - 2.5).abs() < 1e-15); // (1 + 4) / 2
    }

    #[test]
    fn sketch_loss_zero_segments_is_zero() {
        let sample = sample_with_steps(1);
        let v = vocab_for(&[&sample]);
        let rendered = taskgen::render_variant(&sample, Variant::TextOnly, &v, 2).unwrap();
        let (template, plan) = build_supervision_plan(4, 4, &rendered, vec![], 2, 256).unwrap();
        let hiddens = Tensor::zeros(vec![template.len(), 4]);
        assert_eq!(loss_sketch(&hiddens, &plan, SketchLossKind::Mse).unwrap(), 0.0);
    }

    #[test]
    fn doubling_identical_segments_keeps_sketch_loss() {
        // Mean-over-segments: two segments with identical per-segment losses
        // give the same value as one.
        let one = sample_with_steps(1);
        let two = sample_with_steps(2);
        let v = vocab_for(&[&one, &two]);
        let k = 2;
        let d = 4;
        let t = fake_targets(1, k, d, 9)[0].clone();
        let r1 = taskgen::render_variant(&one, Variant::Unified, &v, k).unwrap();
        let r2 = taskgen::render_variant(&two, Variant::Unified, &v, k).unwrap();
        let (tm1, p1) =
            build_supervision_plan(4, d, &r1, vec![t.clone()], k, 512).unwrap();
        let (tm2, p2) =
            build_supervision_plan(4, d, &r2, vec![t.clone(), t.clone()], k, 512).unwrap();
        let h1 = Tensor::zeros(vec![tm1.len(), d]);
        let h2 = Tensor::zeros(vec![tm2.len(), d]);
        let l1 = loss_sketch(&h1, &p1, SketchLossKind::Mse).unwrap();
        let l2 = loss_sketch(&h2, &p2, SketchLossKind::Mse).unwrap();
        assert!((l1 - l2).abs() < 1e-15);
    }

    #[test]
    fn total_loss_algebra() {
        let cfg0 = LossConfig { lambda_sketch: 0.0, ..Default::default() };
        let ntp = 1.0;
        assert_eq!(loss_total(ntp, 123.0, &cfg0).unwrap().to_bits(), ntp.to_bits());
        let cfg5 = LossConfig { lambda_sketch: 0.5, ..Default::default() };
        assert!((loss_total(1.0, 0.4, &cfg5).unwrap() - 1.2).abs() < 1e-15);
        let cfg1 = LossConfig { lambda_sketch: 1.0, ..Default::default() };
        assert!((loss_total(1.0, 1.0, &cfg1).unwrap() - 2.0).abs() < 1e-15);
        assert!(loss_total(f64::NAN, 0.0, &cfg1).is_err());
    }
}
