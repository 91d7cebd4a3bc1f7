//! Convolutional backbone with hand-written backpropagation.
//!
//! Each block is `conv(k x k, "same" padding) -> ReLU -> dropout ->
//! max-pool(2, stride 2)`; channel width doubles per block. The flattened
//! feature map is projected to `D` dimensions by a fully-connected layer and,
//! optionally, L2-normalised.
//!
//! Activations are stored channel-major as `(channels, height * width)`
//! matrices so convolutions reduce to one GEMM over an im2col buffer.

use image::RgbImage;
use ndarray::{linalg::general_mat_mul, Array1, Array2, ArrayView2, Axis};
use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::config::BackboneConfig;
use crate::preprocess::to_input;
use finpipe_core::EmbeddingVector;

/// All trainable tensors. Gradients reuse the same layout.
#[derive(Debug, Clone, PartialEq)]
pub struct Params {
    /// Per block: `(out_channels, in_channels * k * k)`.
    pub conv_w: Vec<Array2<f64>>,
    pub conv_b: Vec<Array1<f64>>,
    /// `(embedding_dim, feature_len)`.
    pub fc_w: Array2<f64>,
    pub fc_b: Array1<f64>,
}

impl Params {
    /// He-normal weights, zero biases.
    pub fn init<R: Rng>(cfg: &BackboneConfig, rng: &mut R) -> Self {
        let k2 = cfg.kernel_size * cfg.kernel_size;
        let mut conv_w = Vec::with_capacity(cfg.num_blocks);
        let mut conv_b = Vec::with_capacity(cfg.num_blocks);
        let mut in_ch = 3;
        for b in 0..cfg.num_blocks {
            let out_ch = cfg.block_channels(b);
            let fan_in = in_ch * k2;
            let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).unwrap();
            conv_w.push(Array2::from_shape_simple_fn((out_ch, fan_in), || normal.sample(rng)));
            conv_b.push(Array1::zeros(out_ch));
            in_ch = out_ch;
        }
        let f = cfg.feature_len();
        let normal = Normal::new(0.0, (1.0 / f as f64).sqrt()).unwrap();
        let fc_w = Array2::from_shape_simple_fn((cfg.embedding_dim, f), || normal.sample(rng));
        Params {
            conv_w,
            conv_b,
            fc_w,
            fc_b: Array1::zeros(cfg.embedding_dim),
        }
    }

    pub fn zeros_like(&self) -> Self {
        Params {
            conv_w: self.conv_w.iter().map(|w| Array2::zeros(w.raw_dim())).collect(),
            conv_b: self.conv_b.iter().map(|b| Array1::zeros(b.raw_dim())).collect(),
            fc_w: Array2::zeros(self.fc_w.raw_dim()),
            fc_b: Array1::zeros(self.fc_b.raw_dim()),
        }
    }

    /// Tensors in canonical order: `conv_w[0], conv_b[0], ..., fc_w, fc_b`.
    pub fn tensors(&self) -> Vec<&[f64]> {
        let mut out: Vec<&[f64]> = Vec::new();
        for (w, b) in self.conv_w.iter().zip(&self.conv_b) {
            out.push(w.as_slice().expect("contiguous"));
            out.push(b.as_slice().expect("contiguous"));
        }
        out.push(self.fc_w.as_slice().expect("contiguous"));
        out.push(self.fc_b.as_slice().expect("contiguous"));
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out: Vec<&mut [f64]> = Vec::new();
        for (w, b) in self.conv_w.iter_mut().zip(self.conv_b.iter_mut()) {
            out.push(w.as_slice_mut().expect("contiguous"));
            out.push(b.as_slice_mut().expect("contiguous"));
        }
        out.push(self.fc_w.as_slice_mut().expect("contiguous"));
        out.push(self.fc_b.as_slice_mut().expect("contiguous"));
        out
    }

    pub fn len(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn add_assign(&mut self, other: &Params) {
        for (a, b) in self.tensors_mut().into_iter().zip(other.tensors()) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
    }
}

// ------------------------------------------------------------------ layers

/// Padding before/after for "same" output size with an arbitrary kernel.
fn same_padding(k: usize) -> usize {
    (k - 1) / 2
}

/// `(c * k * k, h * w)` patch matrix.
fn im2col(input: ArrayView2<f64>, h: usize, w: usize, k: usize) -> Array2<f64> {
    let c = input.nrows();
    let pad = same_padding(k) as isize;
    let hw = h * w;
    let mut col = vec![0.0; c * k * k * hw];
    let src = input.as_standard_layout();
    let src = src.as_slice().expect("contiguous");
    for ch in 0..c {
        let plane = &src[ch * hw..(ch + 1) * hw];
        for ky in 0..k {
            for kx in 0..k {
                let row = (ch * k + ky) * k + kx;
                let dst = &mut col[row * hw..(row + 1) * hw];
                let dx = kx as isize - pad;
                let x0 = (-dx).max(0) as usize;
                let x1 = (w as isize - dx).min(w as isize).max(0) as usize;
                if x0 >= x1 {
                    continue;
                }
                for y in 0..h {
                    let sy = y as isize + ky as isize - pad;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let s = sy as usize * w;
                    let sx0 = (x0 as isize + dx) as usize;
                    dst[y * w + x0..y * w + x1].copy_from_slice(&plane[s + sx0..s + sx0 + (x1 - x0)]);
                }
            }
        }
    }
    Array2::from_shape_vec((c * k * k, hw), col).expect("shape")
}

/// Adjoint of [`im2col`].
fn col2im(col: &Array2<f64>, c: usize, h: usize, w: usize, k: usize) -> Array2<f64> {
    let pad = same_padding(k) as isize;
    let hw = h * w;
    let mut out = vec![0.0; c * hw];
    let col = col.as_standard_layout();
    let src = col.as_slice().expect("contiguous");
    for ch in 0..c {
        let plane = &mut out[ch * hw..(ch + 1) * hw];
        for ky in 0..k {
            for kx in 0..k {
                let row = (ch * k + ky) * k + kx;
                let s = &src[row * hw..(row + 1) * hw];
                let dx = kx as isize - pad;
                let x0 = (-dx).max(0) as usize;
                let x1 = (w as isize - dx).min(w as isize).max(0) as usize;
                if x0 >= x1 {
                    continue;
                }
                for y in 0..h {
                    let sy = y as isize + ky as isize - pad;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let base = sy as usize * w;
                    let sx0 = (x0 as isize + dx) as usize;
                    for (i, v) in s[y * w + x0..y * w + x1].iter().enumerate() {
                        plane[base + sx0 + i] += v;
                    }
                }
            }
        }
    }
    Array2::from_shape_vec((c, hw), out).expect("shape")
}

/// 2x2 max-pool with stride 2 (floor). Returns pooled values and, for each
/// pooled unit, the flat index of the winning input within its channel.
fn max_pool(act: &Array2<f64>, h: usize, w: usize) -> (Array2<f64>, Vec<u32>) {
    let (oh, ow) = (h / 2, w / 2);
    let c = act.nrows();
    let mut out = Array2::zeros((c, oh * ow));
    let mut arg = vec![0u32; c * oh * ow];
    for ch in 0..c {
        let plane = act.row(ch);
        let plane = plane.as_slice().expect("contiguous");
        let mut orow = out.row_mut(ch);
        for oy in 0..oh {
            for ox in 0..ow {
                let i0 = 2 * oy * w + 2 * ox;
                let mut best = i0;
                for idx in [i0 + 1, i0 + w, i0 + w + 1] {
                    if plane[idx] > plane[best] {
                        best = idx;
                    }
                }
                orow[oy * ow + ox] = plane[best];
                arg[ch * oh * ow + oy * ow + ox] = best as u32;
            }
        }
    }
    (out, arg)
}

/// Cached state of one block for backpropagation.
#[derive(Debug, Clone)]
pub struct BlockCache {
    input: Array2<f64>,
    h: usize,
    w: usize,
    /// Per conv output: 0 when zeroed by ReLU or dropout, otherwise the
    /// dropout scale applied.
    gate: Vec<f32>,
    argmax: Vec<u32>,
}

/// Everything needed to backpropagate one sample.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    blocks: Vec<BlockCache>,
    features: Array1<f64>,
    /// Pre-normalisation projection.
    pub projection: Array1<f64>,
    /// Final embedding (normalised when configured).
    pub embedding: Array1<f64>,
}

impl ForwardCache {
    /// Activation pattern (ReLU gates and pooling winners). Two inputs with
    /// equal signatures lie in the same piecewise-smooth region.
    pub fn signature(&self) -> Vec<u32> {
        let mut sig = Vec::new();
        for b in &self.blocks {
            sig.extend(b.gate.iter().map(|g| (*g > 0.0) as u32));
            sig.extend_from_slice(&b.argmax);
        }
        sig
    }
}

/// Backbone weights plus configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    pub config: BackboneConfig,
    pub params: Params,
}

impl Network {
    pub fn new<R: Rng>(config: BackboneConfig, rng: &mut R) -> Self {
        let params = Params::init(&config, rng);
        Network { config, params }
    }

    /// Forward pass over a `(3, h * w)` input. With `dropout_rng` set, dropout
    /// is active and masks are drawn from it; otherwise the pass is the
    /// deterministic inference pass.
    pub fn forward<R: Rng>(&self, input: &Array2<f64>, dropout_rng: Option<&mut R>) -> ForwardCache {
        let cfg = &self.config;
        let k = cfg.kernel_size;
        let (mut h, mut w) = cfg.input_size;
        let mut x = input.clone();
        let mut blocks = Vec::with_capacity(cfg.num_blocks);
        let p = cfg.dropout;
        let mut rng = dropout_rng;
        for b in 0..cfg.num_blocks {
            let col = im2col(x.view(), h, w, k);
            let weights = &self.params.conv_w[b];
            let mut act = Array2::zeros((weights.nrows(), h * w));
            general_mat_mul(1.0, weights, &col, 0.0, &mut act);
            drop(col);
            let bias = &self.params.conv_b[b];
            let mut gate = vec![0f32; act.len()];
            let scale = 1.0 / (1.0 - p);
            for (ch, mut row) in act.axis_iter_mut(Axis(0)).enumerate() {
                let off = ch * h * w;
                for (i, v) in row.iter_mut().enumerate() {
                    let z = *v + bias[ch];
                    let keep = match rng.as_deref_mut() {
                        Some(r) if p > 0.0 => r.gen::<f64>() >= p,
                        _ => true,
                    };
                    let g = if z > 0.0 && keep {
                        if rng.is_some() && p > 0.0 {
                            scale
                        } else {
                            1.0
                        }
                    } else {
                        0.0
                    };
                    gate[off + i] = g as f32;
                    *v = z * g;
                }
            }
            let (pooled, argmax) = max_pool(&act, h, w);
            blocks.push(BlockCache {
                input: x,
                h,
                w,
                gate,
                argmax,
            });
            x = pooled;
            h /= 2;
            w /= 2;
        }
        let features = Array1::from_iter(x.iter().copied());
        let projection = self.params.fc_w.dot(&features) + &self.params.fc_b;
        let embedding = if cfg.normalize_embeddings {
            let norm = projection.dot(&projection).sqrt();
            if norm > 0.0 {
                &projection / norm
            } else {
                projection.clone()
            }
        } else {
            projection.clone()
        };
        ForwardCache {
            blocks,
            features,
            projection,
            embedding,
        }
    }

    /// Accumulates into `grads` the parameter gradient of a scalar loss whose
    /// gradient with respect to this sample's embedding is `d_embedding`.
    pub fn backward(&self, cache: &ForwardCache, d_embedding: &Array1<f64>, grads: &mut Params) {
        let cfg = &self.config;
        let k = cfg.kernel_size;
        let d_proj = if cfg.normalize_embeddings {
            let norm = cache.projection.dot(&cache.projection).sqrt();
            if norm > 0.0 {
                let e = &cache.embedding;
                (d_embedding - &(e * e.dot(d_embedding))) / norm
            } else {
                d_embedding.clone()
            }
        } else {
            d_embedding.clone()
        };

        // Fully-connected layer.
        {
            let gw = grads.fc_w.as_slice_mut().expect("contiguous");
            let f = cache.features.as_slice().expect("contiguous");
            let flen = f.len();
            for (i, &dz) in d_proj.iter().enumerate() {
                if dz == 0.0 {
                    continue;
                }
                let row = &mut gw[i * flen..(i + 1) * flen];
                for (g, &fv) in row.iter_mut().zip(f) {
                    *g += dz * fv;
                }
            }
        }
        grads.fc_b += &d_proj;
        let mut d_out = self.params.fc_w.t().dot(&d_proj);

        for b in (0..cfg.num_blocks).rev() {
            let bc = &cache.blocks[b];
            let (h, w) = (bc.h, bc.w);
            let channels = self.params.conv_w[b].nrows();
            let pooled_len = (h / 2) * (w / 2);
            // Unpool and gate.
            let mut d_act = Array2::<f64>::zeros((channels, h * w));
            {
                let d_src = d_out.as_slice().expect("contiguous");
                let da = d_act.as_slice_mut().expect("contiguous");
                for ch in 0..channels {
                    for j in 0..pooled_len {
                        let idx = ch * pooled_len + j;
                        let target = ch * h * w + bc.argmax[idx] as usize;
                        da[target] += d_src[idx] * bc.gate[target] as f64;
                    }
                }
            }
            let col = im2col(bc.input.view(), h, w, k);
            general_mat_mul(1.0, &d_act, &col.t(), 1.0, &mut grads.conv_w[b]);
            grads.conv_b[b] += &d_act.sum_axis(Axis(1));
            if b > 0 {
                let mut d_col = Array2::zeros(col.raw_dim());
                drop(col);
                general_mat_mul(1.0, &self.params.conv_w[b].t(), &d_act, 0.0, &mut d_col);
                let d_in = col2im(&d_col, bc.input.nrows(), h, w, k);
                d_out = Array1::from_iter(d_in.iter().copied());
            }
        }
    }

    /// Deterministic inference embedding of an already-preprocessed input.
    pub fn embed_input(&self, input: &Array2<f64>) -> Array1<f64> {
        self.forward::<rand_chacha::ChaCha8Rng>(input, None).embedding
    }

    /// Letterboxes `image` to the input size and embeds it.
    pub fn embed(&self, image: &RgbImage) -> EmbeddingVector {
        let input = to_input(image, self.config.input_size);
        let e = self.embed_input(&input);
        let values = e.iter().map(|&v| v as f32).collect();
        EmbeddingVector::new(values, self.config.normalize_embeddings)
    }
}
