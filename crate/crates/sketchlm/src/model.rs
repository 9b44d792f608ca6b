//! The full trainable model: backbone plus the image-side encoders and
//! projectors, with stable parameter naming, freeze handling, and binding
//! into autodiff graphs.

use crate::autodiff::Graph;
use crate::backbone::{BackboneConfig, BackboneParams};
use crate::error::{Error, Result};
use crate::objective::{BoundLayer, BoundModel};
use crate::perception::{PatchEncoder, Projector};
use crate::tensor::Tensor;
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub backbone: BackboneConfig,
    pub d_enc: usize,
    pub ctx_patch: usize,
    pub sketch_patch: usize,
}

impl ModelConfig {
    pub fn toy_default(vocab_size: usize) -> Self {
        ModelConfig {
            backbone: BackboneConfig::toy_default(vocab_size),
            d_enc: 32,
            ctx_patch: 3,
            sketch_patch: 2,
        }
    }
}

/// Which encoders stay at their initialization. The sketch encoder is
/// always frozen; the sketch projector always trains.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FreezeFlags {
    pub e_v: bool,
    pub proj: bool,
}

impl Default for FreezeFlags {
    fn default() -> Self {
        // Nothing here is pretrained, so the context path trains by default.
        FreezeFlags { e_v: false, proj: false }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub config: ModelConfig,
    pub backbone: BackboneParams,
    pub e_v: PatchEncoder,
    pub proj: Projector,
    pub e_s: PatchEncoder,
    pub proj_s: Projector,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamGroup {
    Backbone,
    SketchProj,
}

impl ModelParams {
    pub fn init(config: ModelConfig, freeze: FreezeFlags, rng: &mut ChaCha8Rng) -> Result<Self> {
        let backbone = BackboneParams::init(config.backbone.clone(), rng)?;
        let d_model = config.backbone.d_model;
        let e_v = PatchEncoder::init(config.ctx_patch, config.d_enc, freeze.e_v, rng);
        let proj = Projector::init(config.d_enc, d_model, freeze.proj, rng);
        let e_s = PatchEncoder::init(config.sketch_patch, config.d_enc, true, rng);
        let proj_s = Projector::init(config.d_enc, d_model, false, rng);
        Ok(ModelParams { config, backbone, e_v, proj, e_s, proj_s })
    }

    pub fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out = self.backbone.named_tensors();
        out.push(("e_v.weight".into(), &self.e_v.weight));
        out.push(("e_v.bias".into(), &self.e_v.bias));
        out.push(("proj.weight".into(), &self.proj.weight));
        out.push(("proj.bias".into(), &self.proj.bias));
        out.push(("e_s.weight".into(), &self.e_s.weight));
        out.push(("e_s.bias".into(), &self.e_s.bias));
        out.push(("proj_s.weight".into(), &self.proj_s.weight));
        out.push(("proj_s.bias".into(), &self.proj_s.bias));
        out
    }

    pub fn tensor_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        match name {
            "e_v.weight" => Some(&mut self.e_v.weight),
            "e_v.bias" => Some(&mut self.e_v.bias),
            "proj.weight" => Some(&mut self.proj.weight),
            "proj.bias" => Some(&mut self.proj.bias),
            "e_s.weight" => Some(&mut self.e_s.weight),
            "e_s.bias" => Some(&mut self.e_s.bias),
            "proj_s.weight" => Some(&mut self.proj_s.weight),
            "proj_s.bias" => Some(&mut self.proj_s.bias),
            other => self.backbone.tensor_mut(other),
        }
    }

    pub fn is_frozen(&self, name: &str) -> bool {
        if name.starts_with("e_s.") {
            true
        } else if name.starts_with("e_v.") {
            self.e_v.frozen
        } else if name.starts_with("proj_s.") {
            false
        } else if name.starts_with("proj.") {
            self.proj.frozen
        } else {
            false
        }
    }

    pub fn group_of(name: &str) -> ParamGroup {
        if name.starts_with("proj_s.") {
            ParamGroup::SketchProj
        } else {
            ParamGroup::Backbone
        }
    }

    /// Names of the tensors that receive gradients, in registration order.
    pub fn trainable_names(&self) -> Vec<String> {
        self.named_tensors()
            .into_iter()
            .map(|(n, _)| n)
            .filter(|n| !self.is_frozen(n))
            .collect()
    }

    /// Bind every tensor into `g`: trainable tensors as named params,
    /// frozen ones as constant leaves.
    pub fn bind(&self, g: &mut Graph) -> Result<BoundModel> {
        let mut ids = std::collections::HashMap::new();
        for (name, tensor) in self.named_tensors() {
            let id = if self.is_frozen(&name) {
                g.leaf(tensor.clone())
            } else {
                g.param(&name, tensor.clone())
            };
            ids.insert(name, id);
        }
        let get = |name: &str| -> Result<crate::autodiff::NodeId> {
            ids.get(name)
                .copied()
                .ok_or_else(|| Error::Contract(format!("unbound tensor {name}")))
        };
        let layers = (0..self.config.backbone.n_layers)
            .map(|i| {
                Ok(BoundLayer {
                    wq: get(&format!("layer{i}.wq"))?,
                    bq: get(&format!("layer{i}.bq"))?,
                    wk: get(&format!("layer{i}.wk"))?,
                    wv: get(&format!("layer{i}.wv"))?,
                    bv: get(&format!("layer{i}.bv"))?,
                    wo: get(&format!("layer{i}.wo"))?,
                    bo: get(&format!("layer{i}.bo"))?,
                    ln1_g: get(&format!("layer{i}.ln1_g"))?,
                    ln1_b: get(&format!("layer{i}.ln1_b"))?,
                    ln2_g: get(&format!("layer{i}.ln2_g"))?,
                    ln2_b: get(&format!("layer{i}.ln2_b"))?,
                    w1: get(&format!("layer{i}.w1"))?,
                    b1: get(&format!("layer{i}.b1"))?,
                    w2: get(&format!("layer{i}.w2"))?,
                    b2: get(&format!("layer{i}.b2"))?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(BoundModel {
            d_model: self.config.backbone.d_model,
            n_heads: self.config.backbone.n_heads,
            embed: get("embed")?,
            pos: get("pos")?,
            layers,
            final_ln_g: get("final_ln_g")?,
            final_ln_b: get("final_ln_b")?,
            w_out: get("w_out")?,
            b_out: get("b_out")?,
            e_v_w: get("e_v.weight")?,
            e_v_b: get("e_v.bias")?,
            proj_w: get("proj.weight")?,
            proj_b: get("proj.bias")?,
            proj_s_w: get("proj_s.weight")?,
            proj_s_b: get("proj_s.bias")?,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn params() -> ModelParams {
        let mut cfg = ModelConfig::toy_default(16);
        cfg.backbone.d_model = 16;
        cfg.backbone.n_layers = 2;
        cfg.backbone.n_heads = 2;
        cfg.backbone.d_ff = 32;
        cfg.backbone.max_seq_len = 64;
        cfg.d_enc = 8;
        ModelParams::init(cfg, FreezeFlags::default(), &mut ChaCha8Rng::seed_from_u64(0)).unwrap()
    }

    #[test]
    fn every_named_tensor_is_addressable() {
        let mut p = params();
        let names: Vec<String> = p.named_tensors().iter().map(|(n, _)| n.clone()).collect();
        for n in names {
            assert!(p.tensor_mut(&n).is_some(), "no mutable access for {n}");
        }
    }

    #[test]
    fn sketch_encoder_is_always_frozen_projector_never() {
        let p = params();
        assert!(p.is_frozen("e_s.weight"));
        assert!(p.is_frozen("e_s.bias"));
        assert!(!p.is_frozen("proj_s.weight"));
        assert!(!p.is_frozen("embed"));
    }

    #[test]
    fn groups_split_on_sketch_projector() {
        assert_eq!(ModelParams::group_of("proj_s.weight"), ParamGroup::SketchProj);
        assert_eq!(ModelParams::group_of("proj.weight"), ParamGroup::Backbone);
        assert_eq!(ModelParams::group_of("layer0.wq"), ParamGroup::Backbone);
    }

    #[test]
    fn init_is_seed_deterministic() {
        let a = params();
        let b = params();
        for ((na, ta), (_, tb)) in a.named_tensors().iter().zip(b.named_tensors().iter()) {
            assert_eq!(ta.data(), tb.data(), "{na}");
        }
    }
}
