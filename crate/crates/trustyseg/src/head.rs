//! The decoder head: trusty-token concatenation, relationship descriptor,
//! Trusty Learner, and the three-layer attention-to-mask segmentor.
//!
//! The head works on a fixed feature width `d`. Class tokens (plus the
//! appended trusty token) are mixed by the learner's self-attention, then
//! each segmentor layer scores tokens against projected patch embeddings;
//! the attention logits themselves are the mask predictions. Presence
//! probabilities come from a linear head on the final tokens, and the
//! combined map is split into the single trusty channel and the per-class
//! raw channels.

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::embeddings::EmbeddingBundle;
use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::tensor_file::{read_tensor_file, write_tensor_file};

pub const LN_EPS: f64 = 1e-5;
pub const SEGMENTOR_LAYERS: usize = 3;

/// Multi-head self-attention block of the Trusty Learner.
#[derive(Debug, Clone)]
pub struct LearnerParams {
    pub n_heads: usize,
    pub query_w: Tensor,
    pub query_b: Tensor,
    pub key_w: Tensor,
    pub key_b: Tensor,
    pub value_w: Tensor,
    pub value_b: Tensor,
    pub out_w: Tensor,
    pub out_b: Tensor,
    pub norm_gain: Tensor,
    pub norm_bias: Tensor,
}

/// One segmentor layer: key/value projections for the mask attention and a
/// linear block, each with a shortcut and a normalization layer.
#[derive(Debug, Clone)]
pub struct AtmLayerParams {
    pub key_w: Tensor,
    pub key_b: Tensor,
    pub value_w: Tensor,
    pub value_b: Tensor,
    pub mlp_w: Tensor,
    pub mlp_b: Tensor,
    pub norm1_gain: Tensor,
    pub norm1_bias: Tensor,
    pub norm2_gain: Tensor,
    pub norm2_bias: Tensor,
}

/// Every trainable tensor of the head.
#[derive(Debug, Clone)]
pub struct HeadParams {
    pub trusty_token: Tensor,
    pub align_w: Tensor,
    pub align_b: Tensor,
    pub learner: LearnerParams,
    pub seg_layers: Vec<AtmLayerParams>,
    pub presence_w: Tensor,
    pub presence_b: Tensor,
    pub dim: usize,
}

fn gaussian(rng: &mut ChaCha8Rng, shape: Vec<usize>, std: f64) -> Tensor {
    let n = shape.iter().product();
    let values = (0..n)
        .map(|_| std * rng.sample::<f64, _>(StandardNormal))
        .collect();
    Tensor::param(shape, values).expect("shape/value count agree")
}

fn xavier(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
    let std = (2.0 / (rows + cols) as f64).sqrt();
    gaussian(rng, vec![rows, cols], std)
}

fn zeros_param(shape: Vec<usize>) -> Tensor {
    let n = shape.iter().product();
    Tensor::param(shape, vec![0.0; n]).expect("shape/value count agree")
}

fn ones_param(shape: Vec<usize>) -> Tensor {
    let n = shape.iter().product();
    Tensor::param(shape, vec![1.0; n]).expect("shape/value count agree")
}

impl HeadParams {
    /// Seeded initialization with the default three segmentor layers.
    pub fn init(seed: u64, dim: usize, n_heads: usize) -> Result<HeadParams> {
        HeadParams::init_with_layers(seed, dim, n_heads, SEGMENTOR_LAYERS)
    }

    pub fn init_with_layers(
        seed: u64,
        dim: usize,
        n_heads: usize,
        layers: usize,
    ) -> Result<HeadParams> {
        if n_heads == 0 || dim % n_heads != 0 {
            return Err(Error::HeadSplit {
                dim,
                heads: n_heads,
            });
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        // The trusty token starts as a unit vector, matching the scale of
        // the frozen text tokens: Gaussian(0, 0.02) then normalized once.
        let mut token: Vec<f64> = (0..dim)
            .map(|_| 0.02 * rng.sample::<f64, _>(StandardNormal))
            .collect();
        let norm = token.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm > 0.0 {
            for v in token.iter_mut() {
                *v /= norm;
            }
        }
        let trusty_token = Tensor::param(vec![1, dim], token)?;

        let learner = LearnerParams {
            n_heads,
            query_w: xavier(&mut rng, dim, dim),
            query_b: zeros_param(vec![dim]),
            key_w: xavier(&mut rng, dim, dim),
            key_b: zeros_param(vec![dim]),
            value_w: xavier(&mut rng, dim, dim),
            value_b: zeros_param(vec![dim]),
            out_w: xavier(&mut rng, dim, dim),
            out_b: zeros_param(vec![dim]),
            norm_gain: ones_param(vec![dim]),
            norm_bias: zeros_param(vec![dim]),
        };
        let seg_layers = (0..layers)
            .map(|_| AtmLayerParams {
                key_w: xavier(&mut rng, dim, dim),
                key_b: zeros_param(vec![dim]),
                value_w: xavier(&mut rng, dim, dim),
                value_b: zeros_param(vec![dim]),
                mlp_w: xavier(&mut rng, dim, dim),
                mlp_b: zeros_param(vec![dim]),
                norm1_gain: ones_param(vec![dim]),
                norm1_bias: zeros_param(vec![dim]),
                norm2_gain: ones_param(vec![dim]),
                norm2_bias: zeros_param(vec![dim]),
            })
            .collect();
        Ok(HeadParams {
            trusty_token,
            align_w: xavier(&mut rng, 2 * dim, dim),
            align_b: zeros_param(vec![dim]),
            learner,
            seg_layers,
            presence_w: xavier(&mut rng, dim, 1),
            presence_b: zeros_param(vec![1]),
            dim,
        })
    }

    /// Single-head learner whose projections are identity maps, used by the
    /// closed-form equivalence checks.
    pub fn with_identity_learner(mut self) -> HeadParams {
        let d = self.dim;
        self.learner = LearnerParams {
            n_heads: 1,
            query_w: Tensor::eye(d).with_grad(),
            query_b: zeros_param(vec![d]),
            key_w: Tensor::eye(d).with_grad(),
            key_b: zeros_param(vec![d]),
            value_w: Tensor::eye(d).with_grad(),
            value_b: zeros_param(vec![d]),
            out_w: Tensor::eye(d).with_grad(),
            out_b: zeros_param(vec![d]),
            norm_gain: ones_param(vec![d]),
            norm_bias: zeros_param(vec![d]),
        };
        self
    }

    /// Trainable tensors in a fixed order; [`HeadParams::map_tensors`]
    /// walks the same order.
    pub fn tensors(&self) -> Vec<&Tensor> {
        let mut out = vec![
            &self.trusty_token,
            &self.align_w,
            &self.align_b,
            &self.learner.query_w,
            &self.learner.query_b,
            &self.learner.key_w,
            &self.learner.key_b,
            &self.learner.value_w,
            &self.learner.value_b,
            &self.learner.out_w,
            &self.learner.out_b,
            &self.learner.norm_gain,
            &self.learner.norm_bias,
        ];
        for layer in &self.seg_layers {
            out.extend([
                &layer.key_w,
                &layer.key_b,
                &layer.value_w,
                &layer.value_b,
                &layer.mlp_w,
                &layer.mlp_b,
                &layer.norm1_gain,
                &layer.norm1_bias,
                &layer.norm2_gain,
                &layer.norm2_bias,
            ]);
        }
        out.push(&self.presence_w);
        out.push(&self.presence_b);
        out
    }

    /// Names matching [`HeadParams::tensors`] position by position.
    pub fn tensor_names(&self) -> Vec<String> {
        let mut out: Vec<String> = [
            "trusty_token",
            "align_w",
            "align_b",
            "learner.query_w",
            "learner.query_b",
            "learner.key_w",
            "learner.key_b",
            "learner.value_w",
            "learner.value_b",
            "learner.out_w",
            "learner.out_b",
            "learner.norm_gain",
            "learner.norm_bias",
        ]
        .into_iter()
        .map(String::from)
        .collect();
        for i in 0..self.seg_layers.len() {
            for field in [
                "key_w", "key_b", "value_w", "value_b", "mlp_w", "mlp_b", "norm1_gain",
                "norm1_bias", "norm2_gain", "norm2_bias",
            ] {
                out.push(format!("seg{i}.{field}"));
            }
        }
        out.push("presence_w".into());
        out.push("presence_b".into());
        out
    }

    /// Rebuilds the parameter set by applying `f` to every tensor, in the
    /// same order as [`HeadParams::tensors`].
    pub fn map_tensors<F>(&self, mut f: F) -> Result<HeadParams>
    where
        F: FnMut(&Tensor) -> Result<Tensor>,
    {
        Ok(HeadParams {
            trusty_token: f(&self.trusty_token)?,
            align_w: f(&self.align_w)?,
            align_b: f(&self.align_b)?,
            learner: LearnerParams {
                n_heads: self.learner.n_heads,
                query_w: f(&self.learner.query_w)?,
                query_b: f(&self.learner.query_b)?,
                key_w: f(&self.learner.key_w)?,
                key_b: f(&self.learner.key_b)?,
                value_w: f(&self.learner.value_w)?,
                value_b: f(&self.learner.value_b)?,
                out_w: f(&self.learner.out_w)?,
                out_b: f(&self.learner.out_b)?,
                norm_gain: f(&self.learner.norm_gain)?,
                norm_bias: f(&self.learner.norm_bias)?,
            },
            seg_layers: self
                .seg_layers
                .iter()
                .map(|layer| {
                    Ok(AtmLayerParams {
                        key_w: f(&layer.key_w)?,
                        key_b: f(&layer.key_b)?,
                        value_w: f(&layer.value_w)?,
                        value_b: f(&layer.value_b)?,
                        mlp_w: f(&layer.mlp_w)?,
                        mlp_b: f(&layer.mlp_b)?,
                        norm1_gain: f(&layer.norm1_gain)?,
                        norm1_bias: f(&layer.norm1_bias)?,
                        norm2_gain: f(&layer.norm2_gain)?,
                        norm2_bias: f(&layer.norm2_bias)?,
                    })
                })
                .collect::<Result<Vec<_>>>()?,
            presence_w: f(&self.presence_w)?,
            presence_b: f(&self.presence_b)?,
            dim: self.dim,
        })
    }

    pub fn clear_grads(&self) {
        for t in self.tensors() {
            t.clear_grad();
        }
    }
}

/// Which matrix feeds each attention slot of the Trusty Learner.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LearnerInput {
    /// Class tokens (plus trusty token when enabled).
    Text,
    /// Global image token broadcast to every row.
    Image,
    /// Hadamard product of tokens and the global image token.
    Product,
    /// Tokens and image token concatenated along features, then aligned.
    Concat,
    /// The relationship descriptor `[tokens * image, tokens]`, then aligned.
    Descriptor,
}

/// Ablation switches of the head forward pass.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct HeadConfig {
    pub use_trusty_token: bool,
    pub use_learner: bool,
    pub query_input: LearnerInput,
    pub key_input: LearnerInput,
    pub value_input: LearnerInput,
}

impl Default for HeadConfig {
    fn default() -> Self {
        HeadConfig {
            use_trusty_token: true,
            use_learner: true,
            query_input: LearnerInput::Descriptor,
            key_input: LearnerInput::Descriptor,
            value_input: LearnerInput::Descriptor,
        }
    }
}

/// Maps and presence scores of one forward pass.
///
/// `combined` multiplies each sigmoid mask by its presence probability; the
/// trusty channel (last row, present when the token is enabled) splits off
/// as `trusty_map` and the remaining class channels as `raw_maps`.
#[derive(Debug, Clone)]
pub struct SegOutputs {
    /// Pre-sigmoid mask scores, mean over segmentor layers; rows x patches.
    pub mask_logits: Tensor,
    /// Sigmoid of `mask_logits`.
    pub mask: Tensor,
    /// Per-token presence probabilities, length rows.
    pub presence: Tensor,
    /// Presence-weighted maps, shape [rows, grid_h, grid_w].
    pub combined: Tensor,
    /// Trusty channel, shape [grid_h, grid_w]; absent without the token.
    pub trusty_map: Option<Tensor>,
    /// Class channels, shape [classes, grid_h, grid_w].
    pub raw_maps: Tensor,
    pub grid: (usize, usize),
}

/// Appends the trusty token below the class text tokens.
pub fn append_trusty_token(text_tokens: &Tensor, trusty_token: &Tensor) -> Result<Tensor> {
    text_tokens.concat_rows(trusty_token)
}

/// Relationship descriptor: each row becomes `[row * g, row]`.
pub fn relation_descriptor(tokens: &Tensor, global_token: &Tensor) -> Result<Tensor> {
    let (rows, d) = tokens.dims2("relation_descriptor")?;
    let (_, gd) = global_token.dims2("relation_descriptor")?;
    if gd != d {
        return Err(Error::ShapeMismatch {
            op: "relation_descriptor",
            left: tokens.shape().to_vec(),
            right: global_token.shape().to_vec(),
        });
    }
    let product = tokens.mul(&global_token.broadcast_row(rows)?)?;
    product.concat_cols(tokens)
}

/// Scaled dot-product attention over `n_heads` column blocks.
pub fn multi_head_self_attention(
    query_in: &Tensor,
    key_in: &Tensor,
    value_in: &Tensor,
    p: &LearnerParams,
) -> Result<Tensor> {
    let (_, d) = query_in.dims2("multi_head_self_attention")?;
    if p.n_heads == 0 || d % p.n_heads != 0 {
        return Err(Error::HeadSplit {
            dim: d,
            heads: p.n_heads,
        });
    }
    let head_dim = d / p.n_heads;
    let q = query_in.linear(&p.query_w, &p.query_b)?;
    let k = key_in.linear(&p.key_w, &p.key_b)?;
    let v = value_in.linear(&p.value_w, &p.value_b)?;
    let scale = 1.0 / (head_dim as f64).sqrt();
    let mut merged: Option<Tensor> = None;
    for h in 0..p.n_heads {
        let (c0, c1) = (h * head_dim, (h + 1) * head_dim);
        let qh = q.slice_cols(c0, c1)?;
        let kh = k.slice_cols(c0, c1)?;
        let vh = v.slice_cols(c0, c1)?;
        let attn = qh
            .matmul(&kh.transpose()?)?
            .mul_scalar(scale)
            .softmax_rows()?;
        let oh = attn.matmul(&vh)?;
        merged = Some(match merged {
            None => oh,
            Some(acc) => acc.concat_cols(&oh)?,
        });
    }
    merged
        .expect("at least one head")
        .linear(&p.out_w, &p.out_b)
}

fn learner_block(
    query_in: &Tensor,
    key_in: &Tensor,
    value_in: &Tensor,
    residual: &Tensor,
    p: &LearnerParams,
) -> Result<Tensor> {
    let attended = multi_head_self_attention(query_in, key_in, value_in, p)?;
    attended
        .add(residual)?
        .layer_norm(&p.norm_gain, &p.norm_bias, LN_EPS)
}

/// Trusty Learner on the aligned relationship descriptor.
///
/// With one head and identity projections this reduces to
/// `Norm(Softmax(X X^T / sqrt(d)) X + X)` for `X = align(descriptor)`.
pub fn trusty_learner(descriptor: &Tensor, params: &HeadParams) -> Result<Tensor> {
    let x = descriptor.linear(&params.align_w, &params.align_b)?;
    learner_block(&x, &x, &x, &x, &params.learner)
}

/// One segmentor layer; returns the updated tokens and the mask logits.
pub fn atm_layer(
    tokens: &Tensor,
    patches: &Tensor,
    layer: &AtmLayerParams,
) -> Result<(Tensor, Tensor)> {
    let (_, d) = tokens.dims2("atm_layer")?;
    let key = patches.linear(&layer.key_w, &layer.key_b)?;
    let value = patches.linear(&layer.value_w, &layer.value_b)?;
    let logits = tokens
        .matmul(&key.transpose()?)?
        .mul_scalar(1.0 / (d as f64).sqrt());
    let update = logits.softmax_rows()?.matmul(&value)?;
    let mixed = update
        .add(tokens)?
        .layer_norm(&layer.norm1_gain, &layer.norm1_bias, LN_EPS)?;
    let next = mixed
        .add(&mixed.linear(&layer.mlp_w, &layer.mlp_b)?)?
        .layer_norm(&layer.norm2_gain, &layer.norm2_bias, LN_EPS)?;
    Ok((next, logits))
}

/// Runs the segmentor layers and assembles the output maps.
///
/// Mask logits are the mean of the per-layer attention logits; presence is a
/// sigmoid linear head on the final tokens; each combined channel is
/// `presence * mask`. When `split_trusty` is set the last channel is the
/// trusty map and the rest are the raw class maps.
pub fn segmentor_forward(
    tokens: &Tensor,
    patches: &Tensor,
    params: &HeadParams,
    grid: (usize, usize),
    split_trusty: bool,
) -> Result<SegOutputs> {
    let (rows, _) = tokens.dims2("segmentor_forward")?;
    let (n, _) = patches.dims2("segmentor_forward")?;
    if n != grid.0 * grid.1 {
        return Err(Error::InvalidShape {
            op: "segmentor_forward",
            shape: patches.shape().to_vec(),
            reason: format!("patch count {n} does not match grid {}x{}", grid.0, grid.1),
        });
    }
    if split_trusty && rows < 2 {
        return Err(Error::InvalidShape {
            op: "segmentor_forward",
            shape: tokens.shape().to_vec(),
            reason: "need at least one class row besides the trusty row".into(),
        });
    }
    let mut current = tokens.clone();
    let mut logits_sum: Option<Tensor> = None;
    for layer in &params.seg_layers {
        let (next, logits) = atm_layer(&current, patches, layer)?;
        current = next;
        logits_sum = Some(match logits_sum {
            None => logits,
            Some(acc) => acc.add(&logits)?,
        });
    }
    let mask_logits = logits_sum
        .expect("at least one segmentor layer")
        .mul_scalar(1.0 / params.seg_layers.len() as f64);
    let mask = mask_logits.sigmoid();
    let presence_col = current
        .linear(&params.presence_w, &params.presence_b)?
        .sigmoid();
    let combined_flat = mask.mul(&presence_col.broadcast_col(n)?)?;
    let combined = combined_flat.reshape(vec![rows, grid.0, grid.1])?;
    let (trusty_map, raw_flat) = if split_trusty {
        let trusty = combined_flat
            .slice_rows(rows - 1, rows)?
            .reshape(vec![grid.0, grid.1])?;
        (Some(trusty), combined_flat.slice_rows(0, rows - 1)?)
    } else {
        (None, combined_flat.clone())
    };
    let classes = raw_flat.shape()[0];
    let raw_maps = raw_flat.reshape(vec![classes, grid.0, grid.1])?;
    Ok(SegOutputs {
        mask_logits,
        mask,
        presence: presence_col.reshape(vec![rows])?,
        combined,
        trusty_map,
        raw_maps,
        grid,
    })
}

fn learner_source(
    input: LearnerInput,
    tokens: &Tensor,
    global_token: &Tensor,
    params: &HeadParams,
) -> Result<Tensor> {
    let (rows, _) = tokens.dims2("learner_source")?;
    match input {
        LearnerInput::Text => Ok(tokens.clone()),
        LearnerInput::Image => global_token.broadcast_row(rows),
        LearnerInput::Product => tokens.mul(&global_token.broadcast_row(rows)?),
        LearnerInput::Concat => tokens
            .concat_cols(&global_token.broadcast_row(rows)?)?
            .linear(&params.align_w, &params.align_b),
        LearnerInput::Descriptor => {
            relation_descriptor(tokens, global_token)?.linear(&params.align_w, &params.align_b)
        }
    }
}

/// Full head forward pass under the given ablation switches.
pub fn forward(
    params: &HeadParams,
    bundle: &EmbeddingBundle,
    cfg: &HeadConfig,
) -> Result<SegOutputs> {
    let tokens = if cfg.use_trusty_token {
        append_trusty_token(&bundle.text_tokens, &params.trusty_token)?
    } else {
        bundle.text_tokens.clone()
    };
    let mixed = if cfg.use_learner {
        let q = learner_source(cfg.query_input, &tokens, &bundle.global_token, params)?;
        let k = learner_source(cfg.key_input, &tokens, &bundle.global_token, params)?;
        let v = learner_source(cfg.value_input, &tokens, &bundle.global_token, params)?;
        learner_block(&q, &k, &v, &q, &params.learner)?
    } else {
        relation_descriptor(&tokens, &bundle.global_token)?
            .linear(&params.align_w, &params.align_b)?
    };
    segmentor_forward(
        &mixed,
        &bundle.patch_embeddings,
        params,
        bundle.grid,
        cfg.use_trusty_token,
    )
}

/// Replicates every entry of a rank-2 or rank-3 map into a `patch`-sized
/// square block. Value-level only; used when exporting imported data.
pub fn upsample_nearest(map: &Tensor, patch: usize) -> Result<Tensor> {
    if patch == 0 {
        return Err(Error::InvalidShape {
            op: "upsample_nearest",
            shape: map.shape().to_vec(),
            reason: "patch size must be at least 1".into(),
        });
    }
    let (channels, h, w) = match *map.shape() {
        [h, w] => (1, h, w),
        [c, h, w] => (c, h, w),
        _ => {
            return Err(Error::InvalidShape {
                op: "upsample_nearest",
                shape: map.shape().to_vec(),
                reason: "expected rank 2 or 3".into(),
            })
        }
    };
    let (oh, ow) = (h * patch, w * patch);
    let mut out = vec![0.0; channels * oh * ow];
    for c in 0..channels {
        for r in 0..oh {
            for q in 0..ow {
                out[c * oh * ow + r * ow + q] =
                    map.values()[c * h * w + (r / patch) * w + (q / patch)];
            }
        }
    }
    let shape = if map.rank() == 2 {
        vec![oh, ow]
    } else {
        vec![channels, oh, ow]
    };
    Tensor::from_vec(shape, out)
}

// ── parameter files ──────────────────────────────────────────────────

const HEAD_META: &str = "head.txt";

pub fn save_head_params(dir: &Path, params: &HeadParams) -> Result<()> {
    fs::create_dir_all(dir)?;
    fs::write(
        dir.join(HEAD_META),
        format!(
            "dim = {}\nn_heads = {}\nseg_layers = {}\n",
            params.dim,
            params.learner.n_heads,
            params.seg_layers.len()
        ),
    )?;
    for (name, tensor) in params.tensor_names().iter().zip(params.tensors()) {
        let file = dir.join(format!("{}.tgt", name.replace('.', "_")));
        write_tensor_file(&file, name, tensor)?;
    }
    Ok(())
}

pub fn load_head_params(dir: &Path) -> Result<HeadParams> {
    let meta = fs::read_to_string(dir.join(HEAD_META))?;
    let field = |key: &str| -> Result<usize> {
        meta.lines()
            .filter_map(|l| l.split_once('='))
            .find(|(k, _)| k.trim() == key)
            .and_then(|(_, v)| v.trim().parse().ok())
            .ok_or_else(|| Error::Dataset(format!("{}: missing `{key}`", dir.display())))
    };
    let template = HeadParams::init_with_layers(
        0,
        field("dim")?,
        field("n_heads")?,
        field("seg_layers")?,
    )?;
    let names = template.tensor_names();
    let mut i = 0;
    template.map_tensors(|current| {
        let file = dir.join(format!("{}.tgt", names[i].replace('.', "_")));
        let (_, loaded) = read_tensor_file(&file)?;
        if loaded.shape() != current.shape() {
            return Err(Error::ShapeMismatch {
                op: "load_head_params",
                left: loaded.shape().to_vec(),
                right: current.shape().to_vec(),
            });
        }
        i += 1;
        Tensor::param(loaded.shape().to_vec(), loaded.values().to_vec())
    })
}
