//! State encoder: frozen feature extractors, trainable projections for the
//! image, text and memory streams, concatenation and layer normalization.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::memory::Memory;
use crate::supernet::{ImageBlock, Position};
use crate::tensor::Matrix;
use crate::util::{hash_unit, stable_hash};

pub const LN_EPS: f64 = 1e-5;
pub const FEATURE_DIM: usize = 64;
pub const IMAGE_OUT: usize = 256;
pub const QUERY_OUT: usize = 128;
pub const MEMORY_OUT: usize = 128;

/// The controller's observation: query, image, patient context, memory and
/// the graph position.
#[derive(Clone, Debug)]
pub struct State {
    pub query: String,
    pub context: String,
    pub image: ImageBlock,
    pub memory: Memory,
    pub position: Position,
}

/// Frozen, deterministic maps from raw state components to fixed-size vectors.
pub trait FeatureExtractors: Send + Sync {
    fn image_dim(&self) -> usize;
    fn text_dim(&self) -> usize;
    fn memory_dim(&self) -> usize;
    fn image(&self, image: &ImageBlock) -> Vec<f64>;
    fn text(&self, query: &str, context: &str) -> Vec<f64>;
    fn memory(&self, tokens: &[String]) -> Vec<f64>;
}

/// Feature-hashing extractors: signed cell hashing for images, hashed
/// unigrams/bigrams for text, mean hashed token embeddings for memory.
#[derive(Clone, Copy, Debug)]
pub struct HashingExtractors {
    pub dim: usize,
}

impl Default for HashingExtractors {
    fn default() -> Self {
        Self { dim: FEATURE_DIM }
    }
}

fn signed_bucket(key: &[&[u8]], dim: usize) -> (usize, f64) {
    let h = stable_hash(key);
    let sign = if (h >> 63) == 0 { 1.0 } else { -1.0 };
    ((h % dim as u64) as usize, sign)
}

impl FeatureExtractors for HashingExtractors {
    fn image_dim(&self) -> usize {
        self.dim
    }
    fn text_dim(&self) -> usize {
        self.dim
    }
    fn memory_dim(&self) -> usize {
        self.dim
    }

    fn image(&self, image: &ImageBlock) -> Vec<f64> {
        let mut out = vec![0.0; self.dim];
        for (i, &v) in image.data.iter().enumerate() {
            let (b, s) = signed_bucket(&[b"img", &(i as u64).to_le_bytes()], self.dim);
            out[b] += s * v;
        }
        out
    }

    fn text(&self, query: &str, context: &str) -> Vec<f64> {
        let lower = format!("{} [sep] {}", query, context).to_lowercase();
        let toks: Vec<&str> = lower.split_whitespace().collect();
        let mut out = vec![0.0; self.dim];
        let mut n = 0usize;
        for t in &toks {
            let (b, s) = signed_bucket(&[b"uni", t.as_bytes()], self.dim);
            out[b] += s;
            n += 1;
        }
        for w in toks.windows(2) {
            let (b, s) = signed_bucket(&[b"bi", w[0].as_bytes(), w[1].as_bytes()], self.dim);
            out[b] += s;
            n += 1;
        }
        if n > 0 {
            let scale = 1.0 / (n as f64).sqrt();
            out.iter_mut().for_each(|v| *v *= scale);
        }
        out
    }

    fn memory(&self, tokens: &[String]) -> Vec<f64> {
        let mut out = vec![0.0; self.dim];
        if tokens.is_empty() {
            return out;
        }
        for t in tokens {
            let lower = t.to_lowercase();
            for (d, o) in out.iter_mut().enumerate() {
                *o += 2.0 * hash_unit(&[b"emb", lower.as_bytes(), &(d as u64).to_le_bytes()]) - 1.0;
            }
        }
        let inv = 1.0 / tokens.len() as f64;
        out.iter_mut().for_each(|v| *v *= inv);
        out
    }
}

/// Frozen extractor outputs for one state.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StateFeatures {
    pub image: Vec<f64>,
    pub text: Vec<f64>,
    pub memory: Vec<f64>,
}

pub fn extract_features(state: &State, extractors: &dyn FeatureExtractors) -> StateFeatures {
    StateFeatures {
        image: extractors.image(&state.image),
        text: extractors.text(&state.query, &state.context),
        memory: extractors.memory(&state.memory.render_context()),
    }
}

/// Borrowed view of the three trainable projections.
#[derive(Clone, Copy, Debug)]
pub struct EncoderParams<'a> {
    pub w_image: &'a Matrix,
    pub w_query: &'a Matrix,
    pub w_memory: &'a Matrix,
}

impl EncoderParams<'_> {
    pub fn output_dim(&self) -> usize {
        self.w_image.rows + self.w_query.rows + self.w_memory.rows
    }
}

/// Uniform(−1/√fan_in, 1/√fan_in) initialization.
pub fn init_projection<R: Rng>(rows: usize, cols: usize, rng: &mut R) -> Matrix {
    let bound = 1.0 / (cols as f64).sqrt();
    Matrix::from_fn(rows, cols, |_, _| rng.gen_range(-bound..bound))
}

/// `(z − mean) / sqrt(var + ε)` with population variance and no affine.
pub fn layer_norm(z: &[f64]) -> Vec<f64> {
    layer_norm_stats(z).0
}

fn layer_norm_stats(z: &[f64]) -> (Vec<f64>, f64) {
    let n = z.len() as f64;
    let mean = z.iter().sum::<f64>() / n;
    let var = z.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let inv_std = 1.0 / (var + LN_EPS).sqrt();
    (z.iter().map(|v| (v - mean) * inv_std).collect(), inv_std)
}

/// Intermediate values kept for the backward pass.
#[derive(Clone, Debug)]
pub struct EncoderCache {
    pub h: Vec<f64>,
    pub inv_std: f64,
}

pub(crate) fn check_dims(features: &StateFeatures, params: &EncoderParams) -> Result<()> {
    for (what, m, x) in [
        ("image projection", params.w_image, &features.image),
        ("query projection", params.w_query, &features.text),
        ("memory projection", params.w_memory, &features.memory),
    ] {
        if m.cols != x.len() {
            return Err(Error::DimensionMismatch {
                what,
                expected: m.cols,
                got: x.len(),
            });
        }
    }
    Ok(())
}

pub fn encode_features(features: &StateFeatures, params: &EncoderParams) -> Result<EncoderCache> {
    check_dims(features, params)?;
    let mut z = Vec::with_capacity(params.output_dim());
    z.extend(params.w_image.matvec(&features.image));
    z.extend(params.w_query.matvec(&features.text));
    z.extend(params.w_memory.matvec(&features.memory));
    let (h, inv_std) = layer_norm_stats(&z);
    Ok(EncoderCache { h, inv_std })
}

/// `h_t = LN(W_I ξ(I) ∥ W_Q ζ(q,C) ∥ W_M μ(M_t))`.
pub fn encode_state(state: &State, extractors: &dyn FeatureExtractors, params: &EncoderParams) -> Result<Vec<f64>> {
    Ok(encode_features(&extract_features(state, extractors), params)?.h)
}

/// Backpropagate `g_h` through LN and the projections, accumulating into the
/// three projection gradients.
pub(crate) fn encoder_backward(
    cache: &EncoderCache,
    g_h: &[f64],
    features: &StateFeatures,
    g_image: &mut Matrix,
    g_query: &mut Matrix,
    g_memory: &mut Matrix,
) {
    let n = g_h.len() as f64;
    let mean_g = g_h.iter().sum::<f64>() / n;
    let mean_gh = g_h.iter().zip(&cache.h).map(|(g, h)| g * h).sum::<f64>() / n;
    let g_z: Vec<f64> = g_h
        .iter()
        .zip(&cache.h)
        .map(|(g, h)| cache.inv_std * (g - mean_g - h * mean_gh))
        .collect();
    let (a, rest) = g_z.split_at(g_image.rows);
    let (b, c) = rest.split_at(g_query.rows);
    g_image.add_outer(1.0, a, &features.image);
    g_query.add_outer(1.0, b, &features.text);
    g_memory.add_outer(1.0, c, &features.memory);
}
