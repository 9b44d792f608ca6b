//! Inference-time two-mode state machine. Textual thinking mode samples
//! vocabulary tokens; visual sketching mode feeds the frontier hidden state
//! back in as the next input, emitting a latent vector per step until the
//! end delimiter is sampled or the 2*K cap forces an exit. Latents are
//! never decoded to pixels.
//!
//! The output head still runs on every sketch-mode step: sampling stays on
//! the full vocabulary and only the end delimiter is acted upon.

use crate::backbone::{forward_incremental, BackboneParams, Cache, MixedSequence, SequenceElement};
use crate::error::{Error, Result};
use crate::model::ModelParams;
use crate::perception::{encode_context_image, ToyImage};
use crate::vocab::{self, Vocabulary};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone, PartialEq)]
pub enum Sampling {
    Greedy,
    Temperature { t: f64, seed: u64 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecodeConfig {
    /// Latent run length used at training time (K).
    pub k_train: usize,
    pub max_total_len: usize,
    pub sampling: Sampling,
}

impl DecodeConfig {
    pub fn greedy(k_train: usize, max_total_len: usize) -> Self {
        DecodeConfig { k_train, max_total_len, sampling: Sampling::Greedy }
    }

    /// Latent runs may exceed the training length, but never twice it.
    pub fn cap(&self) -> usize {
        2 * self.k_train
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Text,
    Sketch,
}

/// Anything that can extend a sequence one element at a time. The real
/// model wraps the backbone with a cache; tests drive the state machine
/// with scripted mocks.
pub trait StepModel {
    fn vocab_size(&self) -> usize;
    /// Consume one element at the frontier, returning (hidden, logits).
    fn step(&mut self, elem: &SequenceElement) -> Result<(Vec<f64>, Vec<f64>)>;
}

pub struct BackboneStepModel<'a> {
    params: &'a BackboneParams,
    cache: Cache,
}

impl<'a> BackboneStepModel<'a> {
    pub fn new(params: &'a BackboneParams) -> Self {
        BackboneStepModel { params, cache: Cache::new(params) }
    }
}

impl StepModel for BackboneStepModel<'_> {
    fn vocab_size(&self) -> usize {
        self.params.config.vocab_size
    }

    fn step(&mut self, elem: &SequenceElement) -> Result<(Vec<f64>, Vec<f64>)> {
        let out = forward_incremental(&mut self.cache, &[elem.clone()], self.params)?;
        Ok((out.hiddens.row_slice(0).to_vec(), out.logits.row_slice(0).to_vec()))
    }
}

/// A mock whose sampled-token stream is fixed in advance; emits EOS once
/// the script runs out.
pub struct ScriptedModel {
    pub script: Vec<u32>,
    pub cursor: usize,
    pub vocab_size: usize,
    pub d_model: usize,
}

impl ScriptedModel {
    pub fn new(script: Vec<u32>, vocab_size: usize, d_model: usize) -> Self {
        ScriptedModel { script, cursor: 0, vocab_size, d_model }
    }
}

impl StepModel for ScriptedModel {
    fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    fn step(&mut self, _elem: &SequenceElement) -> Result<(Vec<f64>, Vec<f64>)> {
        let tok = self.script.get(self.cursor).copied().unwrap_or(vocab::EOS);
        self.cursor += 1;
        let mut logits = vec![0.0; self.vocab_size];
        logits[tok as usize] = 10.0;
        // Hiddens vary with the cursor so propagated latents are nontrivial.
        let hidden = (0..self.d_model)
            .map(|i| (self.cursor * 31 + i * 7) as f64 * 0.01)
            .collect();
        Ok((hidden, logits))
    }
}

/// One decode stream: the emitted sequence, the mode registers, and the
/// frontier output the next step will sample from.
#[derive(Clone)]
pub struct DecodeState {
    pub mode: Mode,
    pub sketch_count: usize,
    pub emitted: MixedSequence,
    pub prefix_len: usize,
    pub finished: bool,
    pub truncated: bool,
    pending_hidden: Vec<f64>,
    pending_logits: Vec<f64>,
    rng: Option<ChaCha8Rng>,
}

impl DecodeState {
    /// Feed the prompt (context vectors + question tokens) and arm the
    /// state machine on the last prompt position's output.
    pub fn begin(
        model: &mut dyn StepModel,
        prefix: Vec<SequenceElement>,
        cfg: &DecodeConfig,
    ) -> Result<Self> {
        if prefix.is_empty() {
            return Err(Error::Contract("decode needs a nonempty prefix".into()));
        }
        if prefix.len() >= cfg.max_total_len {
            return Err(Error::Capacity {
                context: "decode prefix".into(),
                length: prefix.len(),
                max: cfg.max_total_len,
            });
        }
        let mut pending = (Vec::new(), Vec::new());
        for e in &prefix {
            pending = model.step(e)?;
        }
        let rng = match cfg.sampling {
            Sampling::Greedy => None,
            Sampling::Temperature { seed, .. } => Some(ChaCha8Rng::seed_from_u64(seed)),
        };
        Ok(DecodeState {
            mode: Mode::Text,
            sketch_count: 0,
            prefix_len: prefix.len(),
            emitted: MixedSequence::new(prefix),
            finished: false,
            truncated: false,
            pending_hidden: pending.0,
            pending_logits: pending.1,
            rng,
        })
    }

    /// Replace the frontier output the next step samples from. For
    /// scripted state-machine harnesses that steer each transition.
    pub fn set_frontier(&mut self, hidden: Vec<f64>, logits: Vec<f64>) {
        self.pending_hidden = hidden;
        self.pending_logits = logits;
    }

    fn sample(&mut self, cfg: &DecodeConfig) -> u32 {
        match &cfg.sampling {
            Sampling::Greedy => {
                let mut best = 0;
                for (i, &v) in self.pending_logits.iter().enumerate() {
                    if v > self.pending_logits[best] {
                        best = i;
                    }
                }
                best as u32
            }
            Sampling::Temperature { t, .. } => {
                let mut probs: Vec<f64> =
                    self.pending_logits.iter().map(|v| v / t.max(1e-6)).collect();
                crate::tensor::softmax_row_inplace(&mut probs);
                let rng = self.rng.as_mut().expect("temperature sampling has an rng");
                let dart: f64 = rng.gen();
                let mut acc = 0.0;
                for (i, &p) in probs.iter().enumerate() {
                    acc += p;
                    if dart <= acc {
                        return i as u32;
                    }
                }
                (probs.len() - 1) as u32
            }
        }
    }
}

/// Advance one step: sample a token from the frontier logits, apply the
/// mode transition table, append the resulting element, and run the model
/// on it. Hitting `max_total_len` flags truncation instead of erroring.
pub fn decode_step(
    state: &mut DecodeState,
    model: &mut dyn StepModel,
    cfg: &DecodeConfig,
) -> Result<()> {
    if state.finished {
        return Err(Error::Contract("decode_step on a finished stream".into()));
    }
    let token = state.sample(cfg);
    let element = match state.mode {
        Mode::Text => {
            if token == vocab::SKETCH_START {
                state.mode = Mode::Sketch;
                state.sketch_count = 0;
            } else if token == vocab::EOS {
                state.finished = true;
            }
            SequenceElement::Discrete(token)
        }
        Mode::Sketch => {
            if token == vocab::SKETCH_END {
                state.mode = Mode::Text;
                state.sketch_count = 0;
                SequenceElement::Discrete(vocab::SKETCH_END)
            } else if state.sketch_count == cfg.cap() {
                // Forced exit: a real end token keeps traces well-formed.
                state.mode = Mode::Text;
                state.sketch_count = 0;
                SequenceElement::Discrete(vocab::SKETCH_END)
            } else {
                state.sketch_count += 1;
                SequenceElement::Continuous(state.pending_hidden.clone())
            }
        }
    };
    state.emitted.push(element);
    if state.emitted.len() >= cfg.max_total_len {
        if !state.finished {
            state.truncated = true;
        }
        state.finished = true;
        return Ok(());
    }
    if !state.finished {
        let (h, l) = model.step(state.emitted.elements.last().expect("just pushed"))?;
        state.pending_hidden = h;
        state.pending_logits = l;
    }
    Ok(())
}

/// Inference output: alternating text and latent segments (delimiters live
/// inside the text segments), plus the extracted answer.
#[derive(Debug, Clone, PartialEq)]
pub enum TraceSegment {
    Text(Vec<u32>),
    Latent(Vec<Vec<f64>>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReasoningTrace {
    pub segments: Vec<TraceSegment>,
    pub answer: Option<String>,
    pub truncated: bool,
}

impl ReasoningTrace {
    pub fn discrete_tokens(&self) -> Vec<u32> {
        self.segments
            .iter()
            .flat_map(|s| match s {
                TraceSegment::Text(ids) => ids.clone(),
                TraceSegment::Latent(_) => Vec::new(),
            })
            .collect()
    }

    pub fn latent_segments(&self) -> Vec<&Vec<Vec<f64>>> {
        self.segments
            .iter()
            .filter_map(|s| match s {
                TraceSegment::Latent(v) => Some(v),
                TraceSegment::Text(_) => None,
            })
            .collect()
    }

    /// Number of sketch delimiters in the trace (entries + exits).
    pub fn mode_switches(&self) -> usize {
        self.discrete_tokens()
            .iter()
            .filter(|&&t| t == vocab::SKETCH_START || t == vocab::SKETCH_END)
            .count()
    }

    pub fn total_len(&self) -> usize {
        self.segments
            .iter()
            .map(|s| match s {
                TraceSegment::Text(ids) => ids.len(),
                TraceSegment::Latent(v) => v.len(),
            })
            .sum()
    }
}

/// Split the post-prefix emitted elements into alternating segments.
pub fn trace_from_state(state: &DecodeState, vocab: &Vocabulary) -> ReasoningTrace {
    let mut segments: Vec<TraceSegment> = Vec::new();
    for e in &state.emitted.elements[state.prefix_len..] {
        match e {
            SequenceElement::Discrete(id) => match segments.last_mut() {
                Some(TraceSegment::Text(ids)) => ids.push(*id),
                _ => segments.push(TraceSegment::Text(vec![*id])),
            },
            SequenceElement::Continuous(v) => match segments.last_mut() {
                Some(TraceSegment::Latent(vs)) => vs.push(v.clone()),
                _ => segments.push(TraceSegment::Latent(vec![v.clone()])),
            },
        }
    }
    let trace = ReasoningTrace { segments, answer: None, truncated: state.truncated };
    let answer = extract_answer(&trace, vocab);
    ReasoningTrace { answer, ..trace }
}

/// Run a whole decode for an image-question pair. Greedy decoding is a
/// pure function of (params, image, question, cfg).
pub fn generate(
    params: &ModelParams,
    image: &ToyImage,
    question: &str,
    vocab: &Vocabulary,
    cfg: &DecodeConfig,
) -> Result<ReasoningTrace> {
    let ve = encode_context_image(image, &params.e_v, &params.proj)?;
    let mut prefix: Vec<SequenceElement> = (0..ve.rows())
        .map(|r| SequenceElement::Continuous(ve.row_slice(r).to_vec()))
        .collect();
    for id in vocab.encode(question)? {
        prefix.push(SequenceElement::Discrete(id));
    }
    let mut model = BackboneStepModel::new(&params.backbone);
    let mut state = DecodeState::begin(&mut model, prefix, cfg)?;
    while !state.finished {
        decode_step(&mut state, &mut model, cfg)?;
    }
    Ok(trace_from_state(&state, vocab))
}

/// Tokens strictly between the first answer-start and the next answer-end;
/// absent when the pair is missing, unclosed, or nested.
pub fn extract_answer(trace: &ReasoningTrace, vocab: &Vocabulary) -> Option<String> {
    let tokens = trace.discrete_tokens();
    extract_answer_tokens(&tokens, vocab)
}

pub fn extract_answer_tokens(tokens: &[u32], vocab: &Vocabulary) -> Option<String> {
    let start = tokens.iter().position(|&t| t == vocab::ANSWER_START)?;
    let rest = &tokens[start + 1..];
    let end = rest.iter().position(|&t| t == vocab::ANSWER_END)?;
    if rest[..end].contains(&vocab::ANSWER_START) {
        return None;
    }
    vocab.decode(&rest[..end]).ok()
}
