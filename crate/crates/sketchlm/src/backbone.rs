//! Decoder-only transformer over mixed discrete/continuous sequences.
//!
//! Hidden states are the final-layer, post-final-norm vectors: the only
//! vector that is simultaneously a logits source and a legal next-step
//! input, which is what lets sketch mode feed them back in. Latent tokens
//! attend and are attended to exactly like text tokens.
//!
//! Two forward routes exist on purpose: `forward_full` recomputes the whole
//! sequence with full attention matrices, `forward_incremental` extends a
//! per-layer key/value cache one position at a time. Tests hold them to
//! each other.

use crate::error::{Error, Result};
use crate::tensor::{self, Tensor};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub const INIT_STD: f64 = 0.08;
const LN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq)]
pub struct BackboneConfig {
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub max_seq_len: usize,
    pub vocab_size: usize,
    /// Whether positional vectors are added to continuous latent inputs.
    pub pos_on_latents: bool,
}

impl BackboneConfig {
    pub fn toy_default(vocab_size: usize) -> Self {
        BackboneConfig {
            d_model: 64,
            n_layers: 4,
            n_heads: 4,
            d_ff: 256,
            max_seq_len: 512,
            vocab_size,
            pos_on_latents: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.d_model % self.n_heads != 0 {
            return Err(Error::Contract(format!(
                "d_model {} must be divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        Ok(())
    }
}

/// One slot of a mixed sequence: a token id or a d_model vector.
#[derive(Debug, Clone, PartialEq)]
pub enum SequenceElement {
    Discrete(u32),
    Continuous(Vec<f64>),
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct MixedSequence {
    pub elements: Vec<SequenceElement>,
}

impl MixedSequence {
    pub fn new(elements: Vec<SequenceElement>) -> Self {
        MixedSequence { elements }
    }

    pub fn len(&self) -> usize {
        self.elements.len()
    }

    pub fn is_empty(&self) -> bool {
        self.elements.is_empty()
    }

    pub fn push(&mut self, e: SequenceElement) {
        self.elements.push(e);
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams {
    pub wq: Tensor,
    pub bq: Tensor,
    // No key bias: a constant added to every key shifts each query's
    // scores uniformly and softmax cancels it, so the parameter would be
    // inert.
    pub wk: Tensor,
    pub wv: Tensor,
    pub bv: Tensor,
    pub wo: Tensor,
    pub bo: Tensor,
    pub ln1_g: Tensor,
    pub ln1_b: Tensor,
    pub ln2_g: Tensor,
    pub ln2_b: Tensor,
    pub w1: Tensor,
    pub b1: Tensor,
    pub w2: Tensor,
    pub b2: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BackboneParams {
    pub config: BackboneConfig,
    pub embed: Tensor, // vocab x d_model
    pub pos: Tensor,   // max_seq_len x d_model
    pub layers: Vec<LayerParams>,
    pub final_ln_g: Tensor,
    pub final_ln_b: Tensor,
    pub w_out: Tensor, // d_model x vocab
    pub b_out: Tensor, // 1 x vocab
}

fn gaussian(rng: &mut ChaCha8Rng, rows: usize, cols: usize, std: f64) -> Tensor {
    let data = (0..rows * cols)
        .map(|_| rng.sample::<f64, _>(StandardNormal) * std)
        .collect();
    Tensor::matrix(rows, cols, data).expect("gaussian tensor")
}

impl BackboneParams {
    pub fn init(config: BackboneConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        config.validate()?;
        let d = config.d_model;
        // Residual-branch outputs get a depth-scaled init.
        let out_std = INIT_STD / (2.0 * config.n_layers as f64).sqrt();
        let layers = (0..config.n_layers)
            .map(|_| LayerParams {
                wq: gaussian(rng, d, d, INIT_STD),
                bq: Tensor::zeros(vec![1, d]),
                wk: gaussian(rng, d, d, INIT_STD),
                wv: gaussian(rng, d, d, INIT_STD),
                bv: Tensor::zeros(vec![1, d]),
                wo: gaussian(rng, d, d, out_std),
                bo: Tensor::zeros(vec![1, d]),
                ln1_g: Tensor::new(vec![1, d], vec![1.0; d]).unwrap(),
                ln1_b: Tensor::zeros(vec![1, d]),
                ln2_g: Tensor::new(vec![1, d], vec![1.0; d]).unwrap(),
                ln2_b: Tensor::zeros(vec![1, d]),
                w1: gaussian(rng, d, config.d_ff, INIT_STD),
                b1: Tensor::zeros(vec![1, config.d_ff]),
                w2: gaussian(rng, config.d_ff, d, out_std),
                b2: Tensor::zeros(vec![1, d]),
            })
            .collect();
        Ok(BackboneParams {
            embed: gaussian(rng, config.vocab_size, d, INIT_STD),
            pos: gaussian(rng, config.max_seq_len, d, INIT_STD),
            layers,
            final_ln_g: Tensor::new(vec![1, d], vec![1.0; d]).unwrap(),
            final_ln_b: Tensor::zeros(vec![1, d]),
            w_out: gaussian(rng, d, config.vocab_size, INIT_STD),
            b_out: Tensor::zeros(vec![1, config.vocab_size]),
            config,
        })
    }

    /// Named views of every tensor, in a stable order.
    pub fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out: Vec<(String, &Tensor)> = vec![
            ("embed".into(), &self.embed),
            ("pos".into(), &self.pos),
        ];
        for (i, l) in self.layers.iter().enumerate() {
            for (f, t) in [
                ("wq", &l.wq),
                ("bq", &l.bq),
                ("wk", &l.wk),
                ("wv", &l.wv),
                ("bv", &l.bv),
                ("wo", &l.wo),
                ("bo", &l.bo),
                ("ln1_g", &l.ln1_g),
                ("ln1_b", &l.ln1_b),
                ("ln2_g", &l.ln2_g),
                ("ln2_b", &l.ln2_b),
                ("w1", &l.w1),
                ("b1", &l.b1),
                ("w2", &l.w2),
                ("b2", &l.b2),
            ] {
                out.push((format!("layer{i}.{f}"), t));
            }
        }
        out.push(("final_ln_g".into(), &self.final_ln_g));
        out.push(("final_ln_b".into(), &self.final_ln_b));
        out.push(("w_out".into(), &self.w_out));
        out.push(("b_out".into(), &self.b_out));
        out
    }

    pub fn tensor_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        match name {
            "embed" => return Some(&mut self.embed),
            "pos" => return Some(&mut self.pos),
            "final_ln_g" => return Some(&mut self.final_ln_g),
            "final_ln_b" => return Some(&mut self.final_ln_b),
            "w_out" => return Some(&mut self.w_out),
            "b_out" => return Some(&mut self.b_out),
            _ => {}
        }
        let (prefix, field) = name.split_once('.')?;
        let idx: usize = prefix.strip_prefix("layer")?.parse().ok()?;
        let l = self.layers.get_mut(idx)?;
        Some(match field {
            "wq" => &mut l.wq,
            "bq" => &mut l.bq,
            "wk" => &mut l.wk,
            "wv" => &mut l.wv,
            "bv" => &mut l.bv,
            "wo" => &mut l.wo,
            "bo" => &mut l.bo,
            "ln1_g" => &mut l.ln1_g,
            "ln1_b" => &mut l.ln1_b,
            "ln2_g" => &mut l.ln2_g,
            "ln2_b" => &mut l.ln2_b,
            "w1" => &mut l.w1,
            "b1" => &mut l.b1,
            "w2" => &mut l.w2,
            "b2" => &mut l.b2,
            _ => return None,
        })
    }

    /// Cheap content hash used to detect stale caches.
    pub fn fingerprint(&self) -> u64 {
        let mut h: u64 = 0xcbf29ce484222325;
        let mut mix = |v: u64| {
            h ^= v;
            h = h.wrapping_mul(0x100000001b3);
        };
        for (_, t) in self.named_tensors() {
            mix(t.len() as u64);
            let data = t.data();
            let step = (data.len() / 16).max(1);
            for v in data.iter().step_by(step) {
                mix(v.to_bits());
            }
            if let Some(last) = data.last() {
                mix(last.to_bits());
            }
        }
        h
    }
}

/// Input embedding for one slot: token-table row or the vector itself, plus
/// the learned positional vector for that slot.
pub fn embed_element(
    params: &BackboneParams,
    elem: &SequenceElement,
    position: usize,
) -> Result<Vec<f64>> {
    let cfg = &params.config;
    if position >= cfg.max_seq_len {
        return Err(Error::Capacity {
            context: "embed position".into(),
            length: position + 1,
            max: cfg.max_seq_len,
        });
    }
    let pos_row = params.pos.row_slice(position);
    match elem {
        SequenceElement::Discrete(id) => {
            if *id as usize >= cfg.vocab_size {
                return Err(Error::Index {
                    context: "token id".into(),
                    index: *id as usize,
                    bound: cfg.vocab_size,
                });
            }
            Ok(params
                .embed
                .row_slice(*id as usize)
                .iter()
                .zip(pos_row)
                .map(|(e, p)| e + p)
                .collect())
        }
        SequenceElement::Continuous(v) => {
            if v.len() != cfg.d_model {
                return Err(Error::Shape {
                    context: "continuous element width".into(),
                    left: vec![cfg.d_model],
                    right: vec![v.len()],
                });
            }
            if cfg.pos_on_latents {
                Ok(v.iter().zip(pos_row).map(|(e, p)| e + p).collect())
            } else {
                Ok(v.clone())
            }
        }
    }
}

fn layer_norm_row(row: &[f64], gain: &[f64], bias: &[f64], out: &mut [f64]) {
    let d = row.len() as f64;
    let mean = row.iter().sum::<f64>() / d;
    let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d;
    let inv_std = 1.0 / (var + LN_EPS).sqrt();
    for j in 0..row.len() {
        out[j] = (row[j] - mean) * inv_std * gain[j] + bias[j];
    }
}

/// y = x @ w for a single row.
fn matvec_row(x: &[f64], w: &Tensor, out: &mut [f64]) {
    out.iter_mut().for_each(|o| *o = 0.0);
    let cols = w.cols();
    for (i, &xv) in x.iter().enumerate() {
        let w_row = &w.data()[i * cols..(i + 1) * cols];
        for (o, &wv) in out.iter_mut().zip(w_row) {
            *o += xv * wv;
        }
    }
}

/// y = x @ w + b for a single row.
fn linear_row(x: &[f64], w: &Tensor, b: &[f64], out: &mut [f64]) {
    out.copy_from_slice(b);
    let cols = w.cols();
    for (i, &xv) in x.iter().enumerate() {
        let w_row = &w.data()[i * cols..(i + 1) * cols];
        for (o, &wv) in out.iter_mut().zip(w_row) {
            *o += xv * wv;
        }
    }
}

/// Per-position outputs of the whole stack: final post-norm hidden states
/// and vocabulary logits.
#[derive(Debug, Clone)]
pub struct ForwardOutput {
    pub hiddens: Tensor, // N x d_model
    pub logits: Tensor,  // N x vocab
}

/// Whole-sequence forward pass with full causal attention matrices.
pub fn forward_full(seq: &MixedSequence, params: &BackboneParams) -> Result<ForwardOutput> {
    let cfg = &params.config;
    let n = seq.len();
    if n == 0 {
        return Err(Error::Contract("forward_full: empty sequence".into()));
    }
    if n > cfg.max_seq_len {
        return Err(Error::Capacity {
            context: "forward_full".into(),
            length: n,
            max: cfg.max_seq_len,
        });
    }
    let d = cfg.d_model;
    let mut x = vec![0.0; n * d];
    for (p, elem) in seq.elements.iter().enumerate() {
        x[p * d..(p + 1) * d].copy_from_slice(&embed_element(params, elem, p)?);
    }

    let dh = d / cfg.n_heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut normed = vec![0.0; n * d];
    for (li, layer) in params.layers.iter().enumerate() {
        // Attention block, pre-norm.
        for p in 0..n {
            layer_norm_row(
                &x[p * d..(p + 1) * d],
                layer.ln1_g.data(),
                layer.ln1_b.data(),
                &mut normed[p * d..(p + 1) * d],
            );
        }
        let normed_t = Tensor::matrix(n, d, normed.clone())?;
        let q = add_bias(tensor::matmul(&normed_t, &layer.wq)?, layer.bq.data());
        let k = tensor::matmul(&normed_t, &layer.wk)?;
        let v = add_bias(tensor::matmul(&normed_t, &layer.wv)?, layer.bv.data());

        let mut att = vec![0.0; n * d];
        let mut scores = vec![0.0; n];
        for h in 0..cfg.n_heads {
            let hc = h * dh;
            for i in 0..n {
                let q_row = &q.data()[i * d + hc..i * d + hc + dh];
                for (j, s) in scores[..=i].iter_mut().enumerate() {
                    let k_row = &k.data()[j * d + hc..j * d + hc + dh];
                    *s = tensor::dot(q_row, k_row) * scale;
                }
                tensor::softmax_row_inplace(&mut scores[..=i]);
                let o_row = &mut att[i * d + hc..i * d + hc + dh];
                for (j, &w) in scores[..=i].iter().enumerate() {
                    let v_row = &v.data()[j * d + hc..j * d + hc + dh];
                    for (o, &vv) in o_row.iter_mut().zip(v_row) {
                        *o += w * vv;
                    }
                }
            }
        }
        let att_t = Tensor::matrix(n, d, att)?;
        let proj = add_bias(tensor::matmul(&att_t, &layer.wo)?, layer.bo.data());
        for (o, &a) in x.iter_mut().zip(proj.data()) {
            *o += a;
        }

        // Feed-forward block, pre-norm.
        for p in 0..n {
            layer_norm_row(
                &x[p * d..(p + 1) * d],
                layer.ln2_g.data(),
                layer.ln2_b.data(),
                &mut normed[p * d..(p + 1) * d],
            );
        }
        let normed_t = Tensor::matrix(n, d, normed.clone())?;
        let mut h1 = add_bias(tensor::matmul(&normed_t, &layer.w1)?, layer.b1.data());
        for vv in h1.data_mut() {
            *vv = tensor::gelu(*vv);
        }
        let h2 = add_bias(tensor::matmul(&h1, &layer.w2)?, layer.b2.data());
        for (o, &a) in x.iter_mut().zip(h2.data()) {
            *o += a;
        }

        if !x.iter().all(|v| v.is_finite()) {
            return Err(Error::Numerical(format!(
                "non-finite activation after layer {li}"
            )));
        }
    }

    let mut hiddens = vec![0.0; n * d];
    for p in 0..n {
        layer_norm_row(
            &x[p * d..(p + 1) * d],
            params.final_ln_g.data(),
            params.final_ln_b.data(),
            &mut hiddens[p * d..(p + 1) * d],
        );
    }
    let hiddens = Tensor::matrix(n, d, hiddens)?;
    let logits = add_bias(tensor::matmul(&hiddens, &params.w_out)?, params.b_out.data());
    Ok(ForwardOutput { hiddens, logits })
}

fn add_bias(mut t: Tensor, bias: &[f64]) -> Tensor {
    let c = t.cols();
    for r in 0..t.rows() {
        for (o, &b) in t.data_mut()[r * c..(r + 1) * c].iter_mut().zip(bias) {
            *o += b;
        }
    }
    t
}

/// Per-layer key/value cache for incremental decoding. A cache belongs to
/// exactly one decode stream.
#[derive(Debug, Clone)]
pub struct Cache {
    fingerprint: u64,
    len: usize,
    keys: Vec<Vec<f64>>,   // per layer, len * d
    values: Vec<Vec<f64>>, // per layer, len * d
}

impl Cache {
    pub fn new(params: &BackboneParams) -> Self {
        Cache {
            fingerprint: params.fingerprint(),
            len: 0,
            keys: vec![Vec::new(); params.config.n_layers],
            values: vec![Vec::new(); params.config.n_layers],
        }
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }
}

/// Extends the cache with `new_elements` and returns outputs for exactly
/// those positions. Equals `forward_full` on the concatenation, restricted
/// to the new positions.
pub fn forward_incremental(
    cache: &mut Cache,
    new_elements: &[SequenceElement],
    params: &BackboneParams,
) -> Result<ForwardOutput> {
    if cache.fingerprint != params.fingerprint() {
        return Err(Error::Contract(
            "stale cache: parameters changed since the cache was built".into(),
        ));
    }
    let cfg = &params.config;
    if new_elements.is_empty() {
        return Err(Error::Contract("forward_incremental: no new elements".into()));
    }
    let total = cache.len + new_elements.len();
    if total > cfg.max_seq_len {
        return Err(Error::Capacity {
            context: "forward_incremental".into(),
            length: total,
            max: cfg.max_seq_len,
        });
    }
    let d = cfg.d_model;
    let dh = d / cfg.n_heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let vocab = cfg.vocab_size;

    let mut hiddens = vec![0.0; new_elements.len() * d];
    let mut logits = vec![0.0; new_elements.len() * vocab];

    let mut normed = vec![0.0; d];
    let mut q = vec![0.0; d];
    let mut krow = vec![0.0; d];
    let mut vrow = vec![0.0; d];
    let mut att = vec![0.0; d];
    let mut proj = vec![0.0; d];
    let mut ff1 = vec![0.0; cfg.d_ff];
    let mut ff2 = vec![0.0; d];

    for (idx, elem) in new_elements.iter().enumerate() {
        let pos = cache.len;
        let mut x = embed_element(params, elem, pos)?;
        for (li, layer) in params.layers.iter().enumerate() {
            layer_norm_row(&x, layer.ln1_g.data(), layer.ln1_b.data(), &mut normed);
            linear_row(&normed, &layer.wq, layer.bq.data(), &mut q);
            matvec_row(&normed, &layer.wk, &mut krow);
            linear_row(&normed, &layer.wv, layer.bv.data(), &mut vrow);
            cache.keys[li].extend_from_slice(&krow);
            cache.values[li].extend_from_slice(&vrow);

            let kv_len = pos + 1;
            let kdata = &cache.keys[li];
            let vdata = &cache.values[li];
            att.iter_mut().for_each(|o| *o = 0.0);
            let mut scores = vec![0.0; kv_len];
            for h in 0..cfg.n_heads {
                let hc = h * dh;
                let q_head = &q[hc..hc + dh];
                for (j, s) in scores.iter_mut().enumerate() {
                    let k_head = &kdata[j * d + hc..j * d + hc + dh];
                    *s = tensor::dot(q_head, k_head) * scale;
                }
                tensor::softmax_row_inplace(&mut scores);
                let o_head = &mut att[hc..hc + dh];
                for (j, &w) in scores.iter().enumerate() {
                    let v_head = &vdata[j * d + hc..j * d + hc + dh];
                    for (o, &vv) in o_head.iter_mut().zip(v_head) {
                        *o += w * vv;
                    }
                }
            }
            linear_row(&att, &layer.wo, layer.bo.data(), &mut proj);
            for (o, &a) in x.iter_mut().zip(&proj) {
                *o += a;
            }

            layer_norm_row(&x, layer.ln2_g.data(), layer.ln2_b.data(), &mut normed);
            linear_row(&normed, &layer.w1, layer.b1.data(), &mut ff1);
            for v in ff1.iter_mut() {
                *v = tensor::gelu(*v);
            }
            linear_row(&ff1, &layer.w2, layer.b2.data(), &mut ff2);
            for (o, &a) in x.iter_mut().zip(&ff2) {
                *o += a;
            }

            if !x.iter().all(|v| v.is_finite()) {
                return Err(Error::Numerical(format!(
                    "non-finite activation after layer {li}"
                )));
            }
        }
        let h_out = &mut hiddens[idx * d..(idx + 1) * d];
        layer_norm_row(&x, params.final_ln_g.data(), params.final_ln_b.data(), h_out);
        linear_row(
            &hiddens[idx * d..(idx + 1) * d],
            &params.w_out,
            params.b_out.data(),
            &mut logits[idx * vocab..(idx + 1) * vocab],
        );
        cache.len += 1;
    }

    Ok(ForwardOutput {
        hiddens: Tensor::matrix(new_elements.len(), d, hiddens)?,
        logits: Tensor::matrix(new_elements.len(), vocab, logits)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn tiny_params(seed: u64) -> BackboneParams {
        let cfg = BackboneConfig {
            d_model: 16,
            n_layers: 2,
            n_heads: 2,
            d_ff: 32,
            max_seq_len: 32,
            vocab_size: 11,
            pos_on_latents: true,
        };
        BackboneParams::init(cfg, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap()
    }

    fn random_mixed(rng: &mut ChaCha8Rng, len: usize, d: usize, vocab: u32) -> MixedSequence {
        let elements = (0..len)
            .map(|_| {
                if rng.gen_bool(0.5) {
                    SequenceElement::Discrete(rng.gen_range(0..vocab))
                } else {
                    SequenceElement::Continuous(
                        (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect(),
                    )
                }
            })
            .collect();
        MixedSequence::new(elements)
    }

    #[test]
    fn continuous_zero_at_position_zero_is_positional_row() {
        let params = tiny_params(1);
        let e = embed_element(
            &params,
            &SequenceElement::Continuous(vec![0.0; 16]),
            0,
        )
        .unwrap();
        assert_eq!(&e[..], params.pos.row_slice(0));
    }

    #[test]
    fn discrete_embedding_is_row_plus_positional() {
        let params = tiny_params(1);
        let e = embed_element(&params, &SequenceElement::Discrete(3), 0).unwrap();
        for (j, v) in e.iter().enumerate() {
            assert_eq!(
                v.to_bits(),
                (params.embed.row_slice(3)[j] + params.pos.row_slice(0)[j]).to_bits()
            );
        }
    }

    #[test]
    fn same_vector_at_two_positions_differs_by_positional_delta() {
        let params = tiny_params(2);
        let vec: Vec<f64> = (0..16).map(|i| i as f64 * 0.1).collect();
        let e2 = embed_element(&params, &SequenceElement::Continuous(vec.clone()), 2).unwrap();
        let e5 = embed_element(&params, &SequenceElement::Continuous(vec), 5).unwrap();
        for j in 0..16 {
            let want = params.pos.row_slice(2)[j] - params.pos.row_slice(5)[j];
            assert!(((e2[j] - e5[j]) - want).abs() < 1e-15);
        }
    }

    #[test]
    fn position_overflow_is_capacity_error() {
        let params = tiny_params(1);
        assert!(matches!(
            embed_element(&params, &SequenceElement::Discrete(0), 32),
            Err(Error::Capacity { .. })
        ));
    }

    #[test]
    fn single_element_shapes() {
        let params = tiny_params(3);
        let seq = MixedSequence::new(vec![SequenceElement::Discrete(1)]);
        let out = forward_full(&seq, &params).unwrap();
        assert_eq!(out.hiddens.dims(), &[1, 16]);
        assert_eq!(out.logits.dims(), &[1, 11]);
    }

    #[test]
    fn causality_prefix_property() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let params = tiny_params(4);
        let seq = random_mixed(&mut rng, 10, 16, 11);
        let full = forward_full(&seq, &params).unwrap();
        for p in [0usize, 3, 7] {
            let truncated = MixedSequence::new(seq.elements[..=p].to_vec());
            let part = forward_full(&truncated, &params).unwrap();
            for i in 0..=p {
                assert_eq!(
                    part.hiddens.row_slice(i),
                    full.hiddens.row_slice(i),
                    "hidden at {i} changed by suffix"
                );
                assert_eq!(part.logits.row_slice(i), full.logits.row_slice(i));
            }
        }
    }

    #[test]
    fn incremental_matches_full() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let params = tiny_params(5);
        for trial in 0..10 {
            let len = 3 + trial % 6;
            let seq = random_mixed(&mut rng, len, 16, 11);
            let full = forward_full(&seq, &params).unwrap();

            // One element at a time.
            let mut cache = Cache::new(&params);
            let mut got_h = Vec::new();
            let mut got_l = Vec::new();
            for e in &seq.elements {
                let out = forward_incremental(&mut cache, &[e.clone()], &params).unwrap();
                got_h.extend_from_slice(out.hiddens.data());
                got_l.extend_from_slice(out.logits.data());
            }
            for (a, b) in got_h.iter().zip(full.hiddens.data()) {
                assert!((a - b).abs() <= 1e-9);
            }
            for (a, b) in got_l.iter().zip(full.logits.data()) {
                assert!((a - b).abs() <= 1e-9);
            }

            // Split: k elements then the rest.
            let k = len / 2;
            let mut cache = Cache::new(&params);
            let _ = forward_incremental(&mut cache, &seq.elements[..k], &params).unwrap();
            let rest = forward_incremental(&mut cache, &seq.elements[k..], &params).unwrap();
            for (i, row) in (k..len).enumerate() {
                for (a, b) in rest.hiddens.row_slice(i).iter().zip(full.hiddens.row_slice(row)) {
                    assert!((a - b).abs() <= 1e-9);
                }
            }
        }
    }

    #[test]
    fn empty_cache_with_full_sequence_equals_forward_full() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let params = tiny_params(6);
        let seq = random_mixed(&mut rng, 8, 16, 11);
        let full = forward_full(&seq, &params).unwrap();
        let mut cache = Cache::new(&params);
        let inc = forward_incremental(&mut cache, &seq.elements, &params).unwrap();
        for (a, b) in inc.hiddens.data().iter().zip(full.hiddens.data()) {
            assert!((a - b).abs() <= 1e-9);
        }
    }

    #[test]
    fn stale_cache_is_rejected() {
        let params = tiny_params(7);
        let mut cache = Cache::new(&params);
        let other = tiny_params(8);
        let err =
            forward_incremental(&mut cache, &[SequenceElement::Discrete(0)], &other).unwrap_err();
        assert!(err.to_string().contains("stale"));
    }

    #[test]
    fn forward_is_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let params = tiny_params(9);
        let seq = random_mixed(&mut rng, 6, 16, 11);
        let a = forward_full(&seq, &params).unwrap();
        let b = forward_full(&seq, &params).unwrap();
        assert_eq!(a.hiddens.data(), b.hiddens.data());
        assert_eq!(a.logits.data(), b.logits.data());
    }
}
