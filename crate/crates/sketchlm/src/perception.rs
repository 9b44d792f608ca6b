//! Image-side machinery: patch encoders for context images, the
//! training-only sketch encoder, and average pooling into reconstruction
//! targets.

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

/// Single-channel image with pixel values in [0, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct ToyImage {
    pub height: usize,
    pub width: usize,
    pub pixels: Vec<f64>,
}

impl ToyImage {
    pub fn new(height: usize, width: usize, pixels: Vec<f64>) -> Result<Self> {
        if pixels.len() != height * width {
            return Err(Error::Shape {
                context: "image pixel count".into(),
                left: vec![height, width],
                right: vec![pixels.len()],
            });
        }
        if !pixels.iter().all(|p| (0.0..=1.0).contains(p)) {
            return Err(Error::Contract("image pixels must lie in [0,1]".into()));
        }
        Ok(ToyImage { height, width, pixels })
    }

    pub fn blank(height: usize, width: usize) -> Self {
        ToyImage { height, width, pixels: vec![0.0; height * width] }
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.pixels[r * self.width + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.pixels[r * self.width + c] = v;
    }

    /// Fill the axis-aligned block [r0, r0+h) x [c0, c0+w).
    pub fn fill_block(&mut self, r0: usize, c0: usize, h: usize, w: usize, v: f64) {
        for r in r0..r0 + h {
            for c in c0..c0 + w {
                self.set(r, c, v);
            }
        }
    }

    /// Flattened patches in raster order: one row per patch, p*p columns.
    pub fn patches(&self, p: usize) -> Result<Tensor> {
        if p == 0 || self.height % p != 0 || self.width % p != 0 {
            return Err(Error::Shape {
                context: format!("patch size {p} must divide image dims"),
                left: vec![self.height, self.width],
                right: vec![p],
            });
        }
        let (ph, pw) = (self.height / p, self.width / p);
        let mut data = Vec::with_capacity(ph * pw * p * p);
        for pr in 0..ph {
            for pc in 0..pw {
                for dr in 0..p {
                    for dc in 0..p {
                        data.push(self.get(pr * p + dr, pc * p + dc));
                    }
                }
            }
        }
        Tensor::matrix(ph * pw, p * p, data)
    }
}

/// Linear patch embedder: flatten(patch) @ weight + bias.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchEncoder {
    pub patch_size: usize,
    pub weight: Tensor, // (p*p) x d_enc
    pub bias: Tensor,   // 1 x d_enc
    pub frozen: bool,
}

impl PatchEncoder {
    pub fn init(patch_size: usize, d_enc: usize, frozen: bool, rng: &mut ChaCha8Rng) -> Self {
        let fan_in = patch_size * patch_size;
        let std = 1.0 / (fan_in as f64).sqrt();
        let weight = gaussian(rng, fan_in, d_enc, std);
        PatchEncoder { patch_size, weight, bias: Tensor::zeros(vec![1, d_enc]), frozen }
    }

    pub fn d_enc(&self) -> usize {
        self.weight.cols()
    }

    /// Patch features for a whole image: one row per patch, raster order.
    pub fn encode(&self, img: &ToyImage) -> Result<Tensor> {
        let patches = img.patches(self.patch_size)?;
        linear(&patches, &self.weight, &self.bias)
    }
}

/// Linear map from encoder space into the backbone's embedding space.
#[derive(Debug, Clone, PartialEq)]
pub struct Projector {
    pub weight: Tensor, // d_enc x d_model
    pub bias: Tensor,   // 1 x d_model
    pub frozen: bool,
}

impl Projector {
    pub fn init(d_enc: usize, d_model: usize, frozen: bool, rng: &mut ChaCha8Rng) -> Self {
        let std = 1.0 / (d_enc as f64).sqrt();
        let weight = gaussian(rng, d_enc, d_model, std);
        Projector { weight, bias: Tensor::zeros(vec![1, d_model]), frozen }
    }

    pub fn apply(&self, features: &Tensor) -> Result<Tensor> {
        linear(features, &self.weight, &self.bias)
    }
}

/// The K pooled target vectors for one sketch image.
#[derive(Debug, Clone, PartialEq)]
pub struct SketchTarget {
    pub vectors: Tensor, // K x d_model
}

impl SketchTarget {
    pub fn k(&self) -> usize {
        self.vectors.rows()
    }
}

/// Context-image path: V_e = proj(E_v(img)), one vector per patch in raster
/// order.
pub fn encode_context_image(
    img: &ToyImage,
    encoder: &PatchEncoder,
    proj: &Projector,
) -> Result<Tensor> {
    let features = encoder.encode(img)?;
    proj.apply(&features)
}

/// Sketch-image path (training only): pool proj_s(E_s(img)) down to K rows.
pub fn build_sketch_target(
    img: &ToyImage,
    encoder: &PatchEncoder,
    proj: &Projector,
    k: usize,
) -> Result<SketchTarget> {
    let features = encoder.encode(img)?;
    let projected = proj.apply(&features)?;
    Ok(SketchTarget { vectors: average_pool_groups(&projected, k)? })
}

/// Row j of the result is the mean of contiguous input rows
/// [j*M/K, (j+1)*M/K).
pub fn average_pool_groups(features: &Tensor, k: usize) -> Result<Tensor> {
    let (m, d) = (features.rows(), features.cols());
    if k == 0 || m % k != 0 {
        return Err(Error::Divisibility { rows: m, groups: k });
    }
    let gsize = m / k;
    let mut out = vec![0.0; k * d];
    for g in 0..k {
        let dst = &mut out[g * d..(g + 1) * d];
        for r in g * gsize..(g + 1) * gsize {
            for (o, &v) in dst.iter_mut().zip(features.row_slice(r)) {
                *o += v;
            }
        }
        for o in dst.iter_mut() {
            *o /= gsize as f64;
        }
    }
    Tensor::matrix(k, d, out)
}

fn gaussian(rng: &mut ChaCha8Rng, rows: usize, cols: usize, std: f64) -> Tensor {
    let data = (0..rows * cols)
        .map(|_| rng.sample::<f64, _>(StandardNormal) * std)
        .collect();
    Tensor::matrix(rows, cols, data).expect("gaussian tensor")
}

fn linear(x: &Tensor, w: &Tensor, b: &Tensor) -> Result<Tensor> {
    let mut out = crate::tensor::matmul(x, w)?;
    let d = out.cols();
    for r in 0..out.rows() {
        for (o, &bv) in out.data_mut()[r * d..(r + 1) * d].iter_mut().zip(b.data()) {
            *o += bv;
        }
    }
    Ok(out)
}
