//! Reverse-mode automatic differentiation over an append-only tape.
//!
//! Operations record themselves during the forward pass (values are computed
//! eagerly); `value_and_grad` replays the tape in reverse. Inputs always have
//! smaller ids than their outputs, so the tape is acyclic by construction.
//! Gradient accumulation walks nodes in descending id order, which makes the
//! backward pass bitwise deterministic.

use crate::error::{Error, Result};
use crate::tensor::{self, Tensor};

pub type NodeId = usize;

enum Op {
    Leaf,
    Param,
    MatMul { a: NodeId, b: NodeId },
    Add { a: NodeId, b: NodeId },
    /// x: [n,d] plus a broadcast row b: [1,d].
    AddRow { x: NodeId, b: NodeId },
    Scale { x: NodeId, c: f64 },
    Gelu { x: NodeId },
    /// Row-wise layer norm with learned gain/bias. `stats` caches
    /// (mean, inv_std) per row for the backward pass.
    LayerNorm { x: NodeId, gain: NodeId, bias: NodeId, stats: Vec<f64> },
    GatherRows { table: NodeId, ids: Vec<u32> },
    StackRows { parts: Vec<NodeId> },
    SliceRows { x: NodeId, start: usize },
    /// Causal multi-head attention for a chunk of queries against a list of
    /// key/value chunks covering sequence positions 0..total_keys. Query row
    /// i sits at absolute position q_offset + i and attends to keys at
    /// positions 0..=q_offset+i. `probs` caches softmax weights
    /// (head-major, padded to total_keys per query row).
    Attention {
        q: NodeId,
        keys: Vec<NodeId>,
        values: Vec<NodeId>,
        n_heads: usize,
        q_offset: usize,
        total_keys: usize,
        probs: Vec<f64>,
    },
    /// Mean over rows of -log softmax(logits_row)[target_row].
    CeRows { logits: NodeId, targets: Vec<u32>, probs: Vec<f64> },
    MseMeanRows { h: NodeId, v: NodeId },
    /// 1 - mean_j cos(h_j, v_j), rows paired.
    CosineMeanRows { h: NodeId, v: NodeId },
    /// Contiguous-group average pooling over rows: [m,d] -> [groups,d].
    PoolGroups { x: NodeId, groups: usize },
    MeanScalars { xs: Vec<NodeId> },
    /// a + c * b on scalars.
    AddScaled { a: NodeId, b: NodeId, c: f64 },
    StopGrad,
}

struct Node {
    op: Op,
    value: Tensor,
}

/// Named gradients, in parameter registration order.
#[derive(Debug, Clone)]
pub struct Gradients {
    entries: Vec<(String, Tensor)>,
}

impl Gradients {
    pub fn from_entries(entries: Vec<(String, Tensor)>) -> Self {
        Gradients { entries }
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Element-wise accumulate another gradient map with the same layout.
    pub fn add_assign(&mut self, other: &Gradients) -> Result<()> {
        if self.entries.len() != other.entries.len() {
            return Err(Error::Contract("gradient maps differ in layout".into()));
        }
        for ((na, ta), (nb, tb)) in self.entries.iter_mut().zip(&other.entries) {
            if na != nb || !ta.same_dims(tb) {
                return Err(Error::Contract(format!(
                    "gradient maps differ at entry {na} vs {nb}"
                )));
            }
            for (o, &v) in ta.data_mut().iter_mut().zip(tb.data()) {
                *o += v;
            }
        }
        Ok(())
    }

    pub fn scale_in_place(&mut self, c: f64) {
        for (_, t) in self.entries.iter_mut() {
            for v in t.data_mut() {
                *v *= c;
            }
        }
    }
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    params: Vec<(String, NodeId)>,
}

const LN_EPS: f64 = 1e-5;
const COS_EPS: f64 = 1e-12;

impl Graph {
    pub fn new() -> Self {
        Graph::default()
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id].value
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, op: Op, value: Tensor) -> NodeId {
        self.nodes.push(Node { op, value });
        self.nodes.len() - 1
    }

    /// Constant leaf; no gradient is tracked for it.
    pub fn leaf(&mut self, value: Tensor) -> NodeId {
        self.push(Op::Leaf, value)
    }

    /// Named trainable leaf.
    pub fn param(&mut self, name: &str, value: Tensor) -> NodeId {
        
        let id = self.push(Op::Param, value);
        self.params.push((name.to_string(), id));
        id
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = tensor::matmul(self.value(a), self.value(b))?;
        Ok(self.push(Op::MatMul { a, b }, v))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        if !self.value(a).same_dims(self.value(b)) {
            return Err(Error::Shape {
                context: "add".into(),
                left: self.value(a).dims().to_vec(),
                right: self.value(b).dims().to_vec(),
            });
        }
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x + y)
            .collect();
        let dims = self.value(a).dims().to_vec();
        Ok(self.push(Op::Add { a, b }, Tensor::new(dims, data)?))
    }

    pub fn add_row(&mut self, x: NodeId, b: NodeId) -> Result<NodeId> {
        let d = self.value(x).cols();
        if self.value(b).len() != d {
            return Err(Error::Shape {
                context: "add_row".into(),
                left: self.value(x).dims().to_vec(),
                right: self.value(b).dims().to_vec(),
            });
        }
        let n = self.value(x).rows();
        let mut data = self.value(x).data().to_vec();
        let bias = self.value(b).data();
        for r in 0..n {
            for (o, &bv) in data[r * d..(r + 1) * d].iter_mut().zip(bias) {
                *o += bv;
            }
        }
        Ok(self.push(Op::AddRow { x, b }, Tensor::new(vec![n, d], data)?))
    }

    pub fn scale(&mut self, x: NodeId, c: f64) -> NodeId {
        let data = self.value(x).data().iter().map(|v| v * c).collect();
        let dims = self.value(x).dims().to_vec();
        let v = Tensor::new(dims, data).expect("scale preserves shape");
        self.push(Op::Scale { x, c }, v)
    }

    pub fn gelu(&mut self, x: NodeId) -> NodeId {
        let data = self.value(x).data().iter().map(|&v| tensor::gelu(v)).collect();
        let dims = self.value(x).dims().to_vec();
        let v = Tensor::new(dims, data).expect("gelu preserves shape");
        self.push(Op::Gelu { x }, v)
    }

    pub fn layer_norm(&mut self, x: NodeId, gain: NodeId, bias: NodeId) -> Result<NodeId> {
        let (n, d) = (self.value(x).rows(), self.value(x).cols());
        if self.value(gain).len() != d || self.value(bias).len() != d {
            return Err(Error::Shape {
                context: "layer_norm gain/bias".into(),
                left: vec![d],
                right: vec![self.value(gain).len(), self.value(bias).len()],
            });
        }
        let mut out = vec![0.0; n * d];
        let mut stats = vec![0.0; 2 * n];
        {
            let xv = self.value(x).data();
            let g = self.value(gain).data();
            let b = self.value(bias).data();
            for r in 0..n {
                let row = &xv[r * d..(r + 1) * d];
                let mean = row.iter().sum::<f64>() / d as f64;
                let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
                let inv_std = 1.0 / (var + LN_EPS).sqrt();
                stats[2 * r] = mean;
                stats[2 * r + 1] = inv_std;
                let o = &mut out[r * d..(r + 1) * d];
                for j in 0..d {
                    o[j] = (row[j] - mean) * inv_std * g[j] + b[j];
                }
            }
        }
        let v = Tensor::new(vec![n, d], out)?;
        Ok(self.push(Op::LayerNorm { x, gain, bias, stats }, v))
    }

    pub fn gather_rows(&mut self, table: NodeId, ids: &[u32]) -> Result<NodeId> {
        let rows = self.value(table).rows();
        let d = self.value(table).cols();
        let mut data = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id as usize >= rows {
                return Err(Error::Index {
                    context: "gather_rows".into(),
                    index: id as usize,
                    bound: rows,
                });
            }
            data.extend_from_slice(self.value(table).row_slice(id as usize));
        }
        let v = Tensor::new(vec![ids.len(), d], data)?;
        Ok(self.push(Op::GatherRows { table, ids: ids.to_vec() }, v))
    }

    pub fn stack_rows(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        if parts.is_empty() {
            return Err(Error::Contract("stack_rows needs at least one part".into()));
        }
        let d = self.value(parts[0]).cols();
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            if self.value(p).cols() != d {
                return Err(Error::Shape {
                    context: "stack_rows column mismatch".into(),
                    left: vec![d],
                    right: self.value(p).dims().to_vec(),
                });
            }
            rows += self.value(p).rows();
            data.extend_from_slice(self.value(p).data());
        }
        let v = Tensor::new(vec![rows, d], data)?;
        Ok(self.push(Op::StackRows { parts: parts.to_vec() }, v))
    }

    pub fn slice_rows(&mut self, x: NodeId, start: usize, len: usize) -> Result<NodeId> {
        let (n, d) = (self.value(x).rows(), self.value(x).cols());
        if start + len > n {
            return Err(Error::Index {
                context: "slice_rows".into(),
                index: start + len,
                bound: n,
            });
        }
        let data = self.value(x).data()[start * d..(start + len) * d].to_vec();
        let v = Tensor::new(vec![len, d], data)?;
        Ok(self.push(Op::SliceRows { x, start }, v))
    }

    /// Causal multi-head attention. `keys`/`values` list per-chunk nodes that
    /// together cover positions 0..total; the queries occupy the final
    /// `q.rows()` positions (q_offset = total - q.rows()).
    pub fn attention(
        &mut self,
        q: NodeId,
        keys: &[NodeId],
        values: &[NodeId],
        n_heads: usize,
    ) -> Result<NodeId> {
        let (n, d) = (self.value(q).rows(), self.value(q).cols());
        if keys.len() != values.len() || keys.is_empty() {
            return Err(Error::Contract("attention: key/value chunk lists must match".into()));
        }
        if d % n_heads != 0 {
            return Err(Error::Contract(format!(
                "attention: d_model {d} not divisible by {n_heads} heads"
            )));
        }
        let total: usize = keys.iter().map(|&k| self.value(k).rows()).sum();
        let total_v: usize = values.iter().map(|&v| self.value(v).rows()).sum();
        if total != total_v || total < n {
            return Err(Error::Contract(format!(
                "attention: {total} key rows, {total_v} value rows, {n} query rows"
            )));
        }
        for &k in keys.iter().chain(values) {
            if self.value(k).cols() != d {
                return Err(Error::Shape {
                    context: "attention chunk width".into(),
                    left: vec![d],
                    right: self.value(k).dims().to_vec(),
                });
            }
        }
        let q_offset = total - n;
        let dh = d / n_heads;
        let scale = 1.0 / (dh as f64).sqrt();

        let mut probs = vec![0.0; n_heads * n * total];
        let mut out = vec![0.0; n * d];
        {
            let qv = self.value(q).data();
            // Chunk table: (node data pointer index, start position, rows).
            let kparts: Vec<(&[f64], usize)> = {
                let mut acc = Vec::with_capacity(keys.len());
                let mut pos = 0;
                for &k in keys {
                    acc.push((self.nodes[k].value.data(), pos));
                    pos += self.nodes[k].value.rows();
                }
                acc
            };
            let vparts: Vec<(&[f64], usize)> = {
                let mut acc = Vec::with_capacity(values.len());
                let mut pos = 0;
                for &v in values {
                    acc.push((self.nodes[v].value.data(), pos));
                    pos += self.nodes[v].value.rows();
                }
                acc
            };
            for h in 0..n_heads {
                let hc = h * dh;
                for i in 0..n {
                    let limit = q_offset + i + 1; // causal: keys 0..limit
                    let q_row = &qv[i * d + hc..i * d + hc + dh];
                    let p_row =
                        &mut probs[(h * n + i) * total..(h * n + i) * total + total];
                    // Scores.
                    for (kdata, start) in &kparts {
                        let rows = kdata.len() / d;
                        for r in 0..rows {
                            let pos = start + r;
                            if pos >= limit {
                                break;
                            }
                            let k_row = &kdata[r * d + hc..r * d + hc + dh];
                            p_row[pos] = tensor::dot(q_row, k_row) * scale;
                        }
                    }
                    tensor::softmax_row_inplace(&mut p_row[..limit]);
                    // Weighted sum of values.
                    let o_row = &mut out[i * d + hc..i * d + hc + dh];
                    for (vdata, start) in &vparts {
                        let rows = vdata.len() / d;
                        for r in 0..rows {
                            let pos = start + r;
                            if pos >= limit {
                                break;
                            }
                            let w = p_row[pos];
                            if w == 0.0 {
                                continue;
                            }
                            let v_row = &vdata[r * d + hc..r * d + hc + dh];
                            for (o, &vv) in o_row.iter_mut().zip(v_row) {
                                *o += w * vv;
                            }
                        }
                    }
                }
            }
        }
        let v = Tensor::new(vec![n, d], out)?;
        Ok(self.push(
            Op::Attention {
                q,
                keys: keys.to_vec(),
                values: values.to_vec(),
                n_heads,
                q_offset,
                total_keys: total,
                probs,
            },
            v,
        ))
    }

    /// Mean cross-entropy over rows; `targets[i]` indexes row i's logits.
    pub fn ce_rows(&mut self, logits: NodeId, targets: &[u32]) -> Result<NodeId> {
        let (n, vsz) = (self.value(logits).rows(), self.value(logits).cols());
        if targets.len() != n {
            return Err(Error::Contract(format!(
                "ce_rows: {n} logits rows vs {} targets",
                targets.len()
            )));
        }
        if n == 0 {
            return Err(Error::Contract("ce_rows: no supervised rows".into()));
        }
        let mut probs = self.value(logits).data().to_vec();
        let mut total = 0.0;
        for (i, &t) in targets.iter().enumerate() {
            if t as usize >= vsz {
                return Err(Error::Index {
                    context: "ce_rows target".into(),
                    index: t as usize,
                    bound: vsz,
                });
            }
            let row = &mut probs[i * vsz..(i + 1) * vsz];
            tensor::softmax_row_inplace(row);
            total -= row[t as usize].max(f64::MIN_POSITIVE).ln();
        }
        let v = Tensor::scalar(total / n as f64);
        Ok(self.push(Op::CeRows { logits, targets: targets.to_vec(), probs }, v))
    }

    pub fn mse_mean_rows(&mut self, h: NodeId, v: NodeId) -> Result<NodeId> {
        let val = tensor::mse_mean_rows(self.value(h), self.value(v))?;
        Ok(self.push(Op::MseMeanRows { h, v }, Tensor::scalar(val)))
    }

    pub fn cosine_mean_rows(&mut self, h: NodeId, v: NodeId) -> Result<NodeId> {
        if !self.value(h).same_dims(self.value(v)) {
            return Err(Error::Shape {
                context: "cosine_mean_rows".into(),
                left: self.value(h).dims().to_vec(),
                right: self.value(v).dims().to_vec(),
            });
        }
        let (k, d) = (self.value(h).rows(), self.value(h).cols());
        let mut mean_cos = 0.0;
        for r in 0..k {
            let a = &self.value(h).data()[r * d..(r + 1) * d];
            let b = &self.value(v).data()[r * d..(r + 1) * d];
            mean_cos += cosine(a, b);
        }
        mean_cos /= k as f64;
        Ok(self.push(Op::CosineMeanRows { h, v }, Tensor::scalar(1.0 - mean_cos)))
    }

    /// Contiguous-group mean pooling over rows.
    pub fn pool_groups(&mut self, x: NodeId, groups: usize) -> Result<NodeId> {
        let (m, d) = (self.value(x).rows(), self.value(x).cols());
        if groups == 0 || m % groups != 0 {
            return Err(Error::Divisibility { rows: m, groups });
        }
        let gsize = m / groups;
        let mut out = vec![0.0; groups * d];
        for gidx in 0..groups {
            let o = &mut out[gidx * d..(gidx + 1) * d];
            for r in gidx * gsize..(gidx + 1) * gsize {
                let row = &self.nodes[x].value.data()[r * d..(r + 1) * d];
                for (ov, &rv) in o.iter_mut().zip(row) {
                    *ov += rv;
                }
            }
            for ov in o.iter_mut() {
                *ov /= gsize as f64;
            }
        }
        let v = Tensor::new(vec![groups, d], out)?;
        Ok(self.push(Op::PoolGroups { x, groups }, v))
    }

    pub fn mean_scalars(&mut self, xs: &[NodeId]) -> Result<NodeId> {
        if xs.is_empty() {
            return Err(Error::Contract("mean_scalars: empty input".into()));
        }
        let total: f64 = xs.iter().map(|&x| self.value(x).item()).sum();
        let v = Tensor::scalar(total / xs.len() as f64);
        Ok(self.push(Op::MeanScalars { xs: xs.to_vec() }, v))
    }

    /// a + c*b on scalars.
    pub fn add_scaled(&mut self, a: NodeId, b: NodeId, c: f64) -> NodeId {
        let v = Tensor::scalar(self.value(a).item() + c * self.value(b).item());
        self.push(Op::AddScaled { a, b, c }, v)
    }

    /// Identity in the forward pass; blocks gradient flow.
    pub fn stop_grad(&mut self, x: NodeId) -> NodeId {
        let v = self.value(x).clone();
        self.push(Op::StopGrad, v)
    }

    /// Reverse-mode gradients of a scalar loss for every named parameter.
    /// Accumulation happens in descending node-id order, so repeated calls
    /// are bitwise identical.
    pub fn value_and_grad(&self, loss: NodeId) -> Result<(f64, Gradients)> {
        if self.value(loss).len() != 1 {
            return Err(Error::Contract(format!(
                "value_and_grad: loss must be scalar, got dims {:?}",
                self.value(loss).dims()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss] = Some(vec![1.0]);

        for id in (0..=loss).rev() {
            let g = match grads[id].take() {
                Some(g) => g,
                None => continue,
            };
            self.backward_node(id, &g, &mut grads);
            grads[id] = Some(g);
        }

        let entries = self
            .params
            .iter()
            .map(|(name, id)| {
                let dims = self.value(*id).dims().to_vec();
                let data = grads[*id]
                    .take()
                    .unwrap_or_else(|| vec![0.0; self.value(*id).len()]);
                (name.clone(), Tensor::new(dims, data).expect("gradient shape"))
            })
            .collect();
        Ok((self.value(loss).item(), Gradients { entries }))
    }

    fn accum(grads: &mut [Option<Vec<f64>>], id: NodeId, len: usize) -> &mut Vec<f64> {
        grads[id].get_or_insert_with(|| vec![0.0; len])
    }

    fn backward_node(&self, id: NodeId, g: &[f64], grads: &mut Vec<Option<Vec<f64>>>) {
        match &self.nodes[id].op {
            Op::Leaf | Op::Param | Op::StopGrad => {
                // StopGrad intentionally drops the upstream gradient.
            }
            Op::MatMul { a, b } => {
                let (m, k) = (self.value(*a).rows(), self.value(*a).cols());
                let n = self.value(*b).cols();
                {
                    let bdata = self.value(*b).data();
                    let da = Self::accum(grads, *a, m * k);
                    tensor::matmul_a_bt_into(g, bdata, da, m, n, k);
                }
                {
                    let adata = self.value(*a).data();
                    let db = Self::accum(grads, *b, k * n);
                    tensor::matmul_at_b_into(adata, g, db, m, k, n);
                }
            }
            Op::Add { a, b } => {
                for &t in &[*a, *b] {
                    let dt = Self::accum(grads, t, g.len());
                    for (o, &gv) in dt.iter_mut().zip(g) {
                        *o += gv;
                    }
                }
            }
            Op::AddRow { x, b } => {
                let d = self.value(*b).len();
                {
                    let dx = Self::accum(grads, *x, g.len());
                    for (o, &gv) in dx.iter_mut().zip(g) {
                        *o += gv;
                    }
                }
                let db = Self::accum(grads, *b, d);
                for row in g.chunks(d) {
                    for (o, &gv) in db.iter_mut().zip(row) {
                        *o += gv;
                    }
                }
            }
            Op::Scale { x, c } => {
                let dx = Self::accum(grads, *x, g.len());
                for (o, &gv) in dx.iter_mut().zip(g) {
                    *o += c * gv;
                }
            }
            Op::Gelu { x } => {
                let xv = self.value(*x).data();
                let dx = Self::accum(grads, *x, g.len());
                for ((o, &gv), &xi) in dx.iter_mut().zip(g).zip(xv) {
                    *o += gv * tensor::gelu_deriv(xi);
                }
            }
            Op::LayerNorm { x, gain, bias, stats } => {
                let (n, d) = (self.value(*x).rows(), self.value(*x).cols());
                let xv = self.value(*x).data();
                let gv = self.value(*gain).data();
                // dgain/dbias first (reads only g and cached stats).
                {
                    let dgain = Self::accum(grads, *gain, d);
                    for r in 0..n {
                        let (mean, inv_std) = (stats[2 * r], stats[2 * r + 1]);
                        let grow = &g[r * d..(r + 1) * d];
                        let xrow = &xv[r * d..(r + 1) * d];
                        for j in 0..d {
                            dgain[j] += grow[j] * (xrow[j] - mean) * inv_std;
                        }
                    }
                }
                {
                    let dbias = Self::accum(grads, *bias, d);
                    for row in g.chunks(d) {
                        for (o, &u) in dbias.iter_mut().zip(row) {
                            *o += u;
                        }
                    }
                }
                let dx = Self::accum(grads, *x, n * d);
                for r in 0..n {
                    let (mean, inv_std) = (stats[2 * r], stats[2 * r + 1]);
                    let grow = &g[r * d..(r + 1) * d];
                    let xrow = &xv[r * d..(r + 1) * d];
                    let mut sum_dxhat = 0.0;
                    let mut sum_dxhat_xhat = 0.0;
                    for j in 0..d {
                        let dxhat = grow[j] * gv[j];
                        let xhat = (xrow[j] - mean) * inv_std;
                        sum_dxhat += dxhat;
                        sum_dxhat_xhat += dxhat * xhat;
                    }
                    let inv_d = 1.0 / d as f64;
                    let dxrow = &mut dx[r * d..(r + 1) * d];
                    for j in 0..d {
                        let dxhat = grow[j] * gv[j];
                        let xhat = (xrow[j] - mean) * inv_std;
                        dxrow[j] += inv_std
                            * (dxhat - inv_d * sum_dxhat - xhat * inv_d * sum_dxhat_xhat);
                    }
                }
            }
            Op::GatherRows { table, ids } => {
                let d = self.value(*table).cols();
                let dt = Self::accum(grads, *table, self.value(*table).len());
                for (i, &tid) in ids.iter().enumerate() {
                    let src = &g[i * d..(i + 1) * d];
                    let dst = &mut dt[tid as usize * d..(tid as usize + 1) * d];
                    for (o, &u) in dst.iter_mut().zip(src) {
                        *o += u;
                    }
                }
            }
            Op::StackRows { parts } => {
                let mut offset = 0;
                for &p in parts {
                    let len = self.value(p).len();
                    let dp = Self::accum(grads, p, len);
                    for (o, &u) in dp.iter_mut().zip(&g[offset..offset + len]) {
                        *o += u;
                    }
                    offset += len;
                }
            }
            Op::SliceRows { x, start } => {
                let d = self.value(*x).cols();
                let dx = Self::accum(grads, *x, self.value(*x).len());
                for (o, &u) in dx[start * d..start * d + g.len()].iter_mut().zip(g) {
                    *o += u;
                }
            }
            Op::Attention { q, keys, values, n_heads, q_offset, total_keys, probs } => {
                self.backward_attention(
                    *q, keys, values, *n_heads, *q_offset, *total_keys, probs, g, grads,
                );
            }
            Op::CeRows { logits, targets, probs } => {
                let (n, vsz) = (self.value(*logits).rows(), self.value(*logits).cols());
                let scale = g[0] / n as f64;
                let dl = Self::accum(grads, *logits, n * vsz);
                for (i, &t) in targets.iter().enumerate() {
                    let prow = &probs[i * vsz..(i + 1) * vsz];
                    let drow = &mut dl[i * vsz..(i + 1) * vsz];
                    for (o, &p) in drow.iter_mut().zip(prow) {
                        *o += scale * p;
                    }
                    drow[t as usize] -= scale;
                }
            }
            Op::MseMeanRows { h, v } => {
                let k = self.value(*h).rows();
                let c = g[0] * 2.0 / k as f64;
                let hv = self.value(*h).data();
                let vv = self.value(*v).data();
                {
                    let dh = Self::accum(grads, *h, hv.len());
                    for ((o, &a), &b) in dh.iter_mut().zip(hv).zip(vv) {
                        *o += c * (a - b);
                    }
                }
                let dv = Self::accum(grads, *v, vv.len());
                for ((o, &a), &b) in dv.iter_mut().zip(hv).zip(vv) {
                    *o -= c * (a - b);
                }
            }
            Op::CosineMeanRows { h, v } => {
                let (k, d) = (self.value(*h).rows(), self.value(*h).cols());
                let hv = self.value(*h).data();
                let vv = self.value(*v).data();
                let c = -g[0] / k as f64; // d(1 - mean cos)/d cos_j = -1/k
                for r in 0..k {
                    let a = &hv[r * d..(r + 1) * d];
                    let b = &vv[r * d..(r + 1) * d];
                    let na = norm(a);
                    let nb = norm(b);
                    let denom = na * nb;
                    if denom <= COS_EPS {
                        continue;
                    }
                    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
                    let cos = dot / denom;
                    {
                        let dh = Self::accum(grads, *h, hv.len());
                        let drow = &mut dh[r * d..(r + 1) * d];
                        for j in 0..d {
                            drow[j] += c * (b[j] / denom - cos * a[j] / (na * na));
                        }
                    }
                    let dv = Self::accum(grads, *v, vv.len());
                    let drow = &mut dv[r * d..(r + 1) * d];
                    for j in 0..d {
                        drow[j] += c * (a[j] / denom - cos * b[j] / (nb * nb));
                    }
                }
            }
            Op::PoolGroups { x, groups } => {
                let (m, d) = (self.value(*x).rows(), self.value(*x).cols());
                let gsize = m / groups;
                let inv = 1.0 / gsize as f64;
                let dx = Self::accum(grads, *x, m * d);
                for gidx in 0..*groups {
                    let grow = &g[gidx * d..(gidx + 1) * d];
                    for r in gidx * gsize..(gidx + 1) * gsize {
                        let drow = &mut dx[r * d..(r + 1) * d];
                        for (o, &u) in drow.iter_mut().zip(grow) {
                            *o += u * inv;
                        }
                    }
                }
            }
            Op::MeanScalars { xs } => {
                let u = g[0] / xs.len() as f64;
                for &x in xs {
                    Self::accum(grads, x, 1)[0] += u;
                }
            }
            Op::AddScaled { a, b, c } => {
                Self::accum(grads, *a, 1)[0] += g[0];
                Self::accum(grads, *b, 1)[0] += c * g[0];
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn backward_attention(
        &self,
        q: NodeId,
        keys: &[NodeId],
        values: &[NodeId],
        n_heads: usize,
        q_offset: usize,
        total: usize,
        probs: &[f64],
        g: &[f64],
        grads: &mut Vec<Option<Vec<f64>>>,
    ) {
        let (n, d) = (self.value(q).rows(), self.value(q).cols());
        let dh = d / n_heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let qv = self.value(q).data();

        // (start position, rows) per chunk; keys and values share layout.
        // Chunks cover contiguous position ranges in order, so every pass
        // below walks them without per-position lookups.
        let layout: Vec<(usize, usize)> = {
            let mut acc = Vec::with_capacity(keys.len());
            let mut pos = 0;
            for &k in keys {
                let rows = self.value(k).rows();
                acc.push((pos, rows));
                pos += rows;
            }
            acc
        };

        let mut ds = vec![0.0; total];
        let mut dq_acc = vec![0.0; n * d];
        for h in 0..n_heads {
            let hc = h * dh;
            for i in 0..n {
                let limit = q_offset + i + 1;
                let p_row = &probs[(h * n + i) * total..(h * n + i) * total + limit];
                let g_row = &g[i * d + hc..i * d + hc + dh];
                let q_row = &qv[i * d + hc..i * d + hc + dh];

                // dP and the softmax Jacobian contraction.
                let mut row_dot = 0.0;
                for (ci, &(start, rows)) in layout.iter().enumerate() {
                    if start >= limit {
                        break;
                    }
                    let vdata = self.nodes[values[ci]].value.data();
                    let upto = rows.min(limit - start);
                    for local in 0..upto {
                        let v_row = &vdata[local * d + hc..local * d + hc + dh];
                        let dp = tensor::dot(g_row, v_row);
                        ds[start + local] = dp;
                        row_dot += dp * p_row[start + local];
                    }
                }
                for (pos, dsv) in ds[..limit].iter_mut().enumerate() {
                    *dsv = p_row[pos] * (*dsv - row_dot) * scale;
                }

                // Scatter dV, dK per chunk; accumulate dQ locally.
                for (ci, &(start, rows)) in layout.iter().enumerate() {
                    if start >= limit {
                        break;
                    }
                    let upto = rows.min(limit - start);
                    {
                        let vlen = self.nodes[values[ci]].value.len();
                        let dvn = Self::accum(grads, values[ci], vlen);
                        for local in 0..upto {
                            let w = p_row[start + local];
                            if w == 0.0 {
                                continue;
                            }
                            let dv_row = &mut dvn[local * d + hc..local * d + hc + dh];
                            for (o, &u) in dv_row.iter_mut().zip(g_row) {
                                *o += w * u;
                            }
                        }
                    }
                    {
                        let kv = self.nodes[keys[ci]].value.data();
                        let dq_row = &mut dq_acc[i * d + hc..i * d + hc + dh];
                        for local in 0..upto {
                            let dsv = ds[start + local];
                            if dsv == 0.0 {
                                continue;
                            }
                            let k_row = &kv[local * d + hc..local * d + hc + dh];
                            for (o, &u) in dq_row.iter_mut().zip(k_row) {
                                *o += dsv * u;
                            }
                        }
                    }
                    {
                        let klen = self.nodes[keys[ci]].value.len();
                        let dkn = Self::accum(grads, keys[ci], klen);
                        for local in 0..upto {
                            let dsv = ds[start + local];
                            if dsv == 0.0 {
                                continue;
                            }
                            let dk_row = &mut dkn[local * d + hc..local * d + hc + dh];
                            for (o, &u) in dk_row.iter_mut().zip(q_row) {
                                *o += dsv * u;
                            }
                        }
                    }
                }
            }
        }
        let dq = Self::accum(grads, q, n * d);
        for (o, &u) in dq.iter_mut().zip(&dq_acc) {
            *o += u;
        }
    }
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let denom = norm(a) * norm(b);
    if denom <= COS_EPS {
        0.0
    } else {
        a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>() / denom
    }
}

/// Central-difference gradient check. Evaluates `f` at per-coordinate
/// perturbations of `params` and returns the maximum relative error versus
/// the `analytic` gradients, with denominator max(|a|, |b|, 1e-8).
pub fn finite_difference_check<F>(
    f: F,
    params: &[(String, Tensor)],
    analytic: &Gradients,
    eps: f64,
) -> Result<f64>
where
    F: Fn(&[(String, Tensor)]) -> Result<f64>,
{
    if eps <= 0.0 {
        return Err(Error::Contract("finite_difference_check: eps must be > 0".into()));
    }
    let mut max_rel = 0.0;
    let mut work: Vec<(String, Tensor)> = params.to_vec();
    for (pi, (name, tensor)) in params.iter().enumerate() {
        let grad = analytic
            .get(name)
            .ok_or_else(|| Error::Contract(format!("no analytic gradient for {name}")))?
            .clone();
        for ci in 0..tensor.len() {
            let orig = tensor.data()[ci];
            work[pi].1.data_mut()[ci] = orig + eps;
            let up = f(&work)?;
            work[pi].1.data_mut()[ci] = orig - eps;
            let down = f(&work)?;
            work[pi].1.data_mut()[ci] = orig;
            let fd = (up - down) / (2.0 * eps);
            let a = grad.data()[ci];
            let rel = (a - fd).abs() / a.abs().max(fd.abs()).max(1e-8);
            if rel > max_rel {
                max_rel = rel;
            }
        }
    }
    Ok(max_rel)
}
