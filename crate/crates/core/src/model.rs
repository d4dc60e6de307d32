//! The learnable denoiser: a small convolutional sketch encoder with 2D
//! learnable positional embeddings feeding a bidirectional encoder-only
//! transformer over [sketch tokens; image tokens]. Convolutions are realized
//! as im2col gathers + matmuls so the whole forward pass stays inside the
//! fixed tape op set.

use std::io::{Read, Write};
use std::path::Path;

use crate::codec::TokenGrid;
use crate::error::{Error, Result};
use crate::netpbm::GrayImage;
use crate::substrate::{NodeId, Rng, Scalar, Tape, Tensor};

pub const CKPT_MAGIC: &[u8; 8] = b"PDDPCKPT";
pub const CKPT_VERSION: u32 = 1;

/// Sketch canvas edge; the conv encoder reduces it 64 -> 32 -> 16 -> 8.
pub const SKETCH_SIZE: usize = 64;
/// Sketch token count after flattening the 8x8 feature map.
pub const SKETCH_TOKENS: usize = 64;

const CONV_CH1: usize = 16;
const CONV_CH2: usize = 32;
const STREAM_INIT: u64 = 0x696e6974; // "init"

/// Single-channel 64x64 sketch, binarized to {0, 255} (strokes are 0).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SketchImage {
    pub pixels: Vec<u8>,
}

impl SketchImage {
    pub fn from_gray(img: &GrayImage) -> Result<Self> {
        if img.width != SKETCH_SIZE || img.height != SKETCH_SIZE {
            return Err(Error::dim(format!(
                "sketch must be {SKETCH_SIZE}x{SKETCH_SIZE}, got {}x{}",
                img.width, img.height
            )));
        }
        Ok(SketchImage {
            pixels: img
                .pixels
                .iter()
                .map(|&p| if p < 128 { 0 } else { 255 })
                .collect(),
        })
    }

    pub fn blank() -> Self {
        SketchImage {
            pixels: vec![255; SKETCH_SIZE * SKETCH_SIZE],
        }
    }

    pub fn to_gray(&self) -> GrayImage {
        GrayImage {
            width: SKETCH_SIZE,
            height: SKETCH_SIZE,
            pixels: self.pixels.clone(),
        }
    }

    pub fn stroke_count(&self) -> usize {
        self.pixels.iter().filter(|&&p| p == 0).count()
    }
}

/// Architecture hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct ModelConfig {
    /// Transformer width.
    pub d: usize,
    /// Sketch feature width before projection.
    pub d_s: usize,
    pub n_blocks: usize,
    pub n_heads: usize,
    /// Codebook size; the token table has C+1 rows (MASK embeds too).
    pub c: usize,
    /// Latent positions.
    pub k: usize,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d == 0 || self.d % self.n_heads != 0 {
            return Err(Error::contract(format!(
                "d={} must be a positive multiple of n_heads={}",
                self.d, self.n_heads
            )));
        }
        if self.d % 2 != 0 {
            return Err(Error::contract("d must be even for sinusoidal embeddings"));
        }
        if self.d_s == 0 || self.n_blocks == 0 || self.c < 2 || self.k == 0 {
            return Err(Error::contract(
                "d_s, n_blocks, k must be positive and c >= 2",
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BlockParams<S: Scalar = f32> {
    pub ln1_g: Tensor<S>,
    pub ln1_b: Tensor<S>,
    pub wq: Tensor<S>,
    pub bq: Tensor<S>,
    pub wk: Tensor<S>,
    pub bk: Tensor<S>,
    pub wv: Tensor<S>,
    pub bv: Tensor<S>,
    pub wo: Tensor<S>,
    pub bo: Tensor<S>,
    pub ln2_g: Tensor<S>,
    pub ln2_b: Tensor<S>,
    pub mlp1_w: Tensor<S>,
    pub mlp1_b: Tensor<S>,
    pub mlp2_w: Tensor<S>,
    pub mlp2_b: Tensor<S>,
}

/// All learnable weights, flat-addressable in a stable enumeration order
/// for gradient checks, Adam state alignment, and serialization.
#[derive(Debug, Clone, PartialEq)]
pub struct DenoiserParams<S: Scalar = f32> {
    pub config: ModelConfig,
    pub conv1_w: Tensor<S>,
    pub conv1_b: Tensor<S>,
    pub conv2_w: Tensor<S>,
    pub conv2_b: Tensor<S>,
    pub conv3_w: Tensor<S>,
    pub conv3_b: Tensor<S>,
    pub sketch_pos: Tensor<S>,
    pub proj_w: Tensor<S>,
    pub proj_b: Tensor<S>,
    pub tok_emb: Tensor<S>,
    pub img_pos: Tensor<S>,
    pub t_mlp1_w: Tensor<S>,
    pub t_mlp1_b: Tensor<S>,
    pub t_mlp2_w: Tensor<S>,
    pub t_mlp2_b: Tensor<S>,
    pub blocks: Vec<BlockParams<S>>,
    pub head_w: Tensor<S>,
    pub head_b: Tensor<S>,
}

/// Truncated-normal init (std 0.02) for embeddings and linear weights,
/// zeros for biases and the output head, ones for layer-norm gains.
/// Deterministic given the seed.
pub fn init_params<S: Scalar>(seed: u64, config: ModelConfig) -> Result<DenoiserParams<S>> {
    config.validate()?;
    let mut rng = Rng::new(seed, STREAM_INIT);
    let mut normal = |shape: Vec<usize>| -> Tensor<S> {
        let n: usize = shape.iter().product();
        let data = (0..n)
            .map(|_| S::from_f64(rng.trunc_normal(0.02)))
            .collect();
        Tensor {
            shape,
            data,
            requires_grad: true,
        }
    };
    let zeros = |shape: Vec<usize>| Tensor::<S>::zeros(shape).requires_grad();
    let ones = |shape: Vec<usize>| {
        let n: usize = shape.iter().product();
        Tensor::<S> {
            shape,
            data: vec![S::ONE; n],
            requires_grad: true,
        }
    };

    let ModelConfig {
        d,
        d_s,
        n_blocks,
        c,
        k,
        ..
    } = config;

    // Enumeration order below matches `named()`; the rng draws depend on it.
    let conv1_w = normal(vec![9, CONV_CH1]);
    let conv1_b = zeros(vec![CONV_CH1]);
    let conv2_w = normal(vec![9 * CONV_CH1, CONV_CH2]);
    let conv2_b = zeros(vec![CONV_CH2]);
    let conv3_w = normal(vec![9 * CONV_CH2, d_s]);
    let conv3_b = zeros(vec![d_s]);
    let sketch_pos = normal(vec![SKETCH_TOKENS, d_s]);
    let proj_w = normal(vec![d_s, d]);
    let proj_b = zeros(vec![d]);
    let tok_emb = normal(vec![c + 1, d]);
    let img_pos = normal(vec![k, d]);
    let t_mlp1_w = normal(vec![d, d]);
    let t_mlp1_b = zeros(vec![d]);
    let t_mlp2_w = normal(vec![d, d]);
    let t_mlp2_b = zeros(vec![d]);
    let blocks = (0..n_blocks)
        .map(|_| BlockParams {
            ln1_g: ones(vec![d]),
            ln1_b: zeros(vec![d]),
            wq: normal(vec![d, d]),
            bq: zeros(vec![d]),
            wk: normal(vec![d, d]),
            bk: zeros(vec![d]),
            wv: normal(vec![d, d]),
            bv: zeros(vec![d]),
            wo: normal(vec![d, d]),
            bo: zeros(vec![d]),
            ln2_g: ones(vec![d]),
            ln2_b: zeros(vec![d]),
            mlp1_w: normal(vec![d, 4 * d]),
            mlp1_b: zeros(vec![4 * d]),
            mlp2_w: normal(vec![4 * d, d]),
            mlp2_b: zeros(vec![d]),
        })
        .collect();

    Ok(DenoiserParams {
        config,
        conv1_w,
        conv1_b,
        conv2_w,
        conv2_b,
        conv3_w,
        conv3_b,
        sketch_pos,
        proj_w,
        proj_b,
        tok_emb,
        img_pos,
        t_mlp1_w,
        t_mlp1_b,
        t_mlp2_w,
        t_mlp2_b,
        blocks,
        // Zero-init head keeps the initial p0 uniform, which stabilizes the
        // early KL terms.
        head_w: zeros(vec![d, c]),
        head_b: zeros(vec![c]),
    })
}

impl<S: Scalar> DenoiserParams<S> {
    pub fn named(&self) -> Vec<(String, &Tensor<S>)> {
        let mut out: Vec<(String, &Tensor<S>)> = vec![
            ("conv1.w".into(), &self.conv1_w),
            ("conv1.b".into(), &self.conv1_b),
            ("conv2.w".into(), &self.conv2_w),
            ("conv2.b".into(), &self.conv2_b),
            ("conv3.w".into(), &self.conv3_w),
            ("conv3.b".into(), &self.conv3_b),
            ("sketch_pos".into(), &self.sketch_pos),
            ("proj.w".into(), &self.proj_w),
            ("proj.b".into(), &self.proj_b),
            ("tok_emb".into(), &self.tok_emb),
            ("img_pos".into(), &self.img_pos),
            ("t_mlp1.w".into(), &self.t_mlp1_w),
            ("t_mlp1.b".into(), &self.t_mlp1_b),
            ("t_mlp2.w".into(), &self.t_mlp2_w),
            ("t_mlp2.b".into(), &self.t_mlp2_b),
        ];
        for (i, b) in self.blocks.iter().enumerate() {
            out.push((format!("block{i}.ln1.g"), &b.ln1_g));
            out.push((format!("block{i}.ln1.b"), &b.ln1_b));
            out.push((format!("block{i}.attn.wq"), &b.wq));
            out.push((format!("block{i}.attn.bq"), &b.bq));
            out.push((format!("block{i}.attn.wk"), &b.wk));
            out.push((format!("block{i}.attn.bk"), &b.bk));
            out.push((format!("block{i}.attn.wv"), &b.wv));
            out.push((format!("block{i}.attn.bv"), &b.bv));
            out.push((format!("block{i}.attn.wo"), &b.wo));
            out.push((format!("block{i}.attn.bo"), &b.bo));
            out.push((format!("block{i}.ln2.g"), &b.ln2_g));
            out.push((format!("block{i}.ln2.b"), &b.ln2_b));
            out.push((format!("block{i}.mlp1.w"), &b.mlp1_w));
            out.push((format!("block{i}.mlp1.b"), &b.mlp1_b));
            out.push((format!("block{i}.mlp2.w"), &b.mlp2_w));
            out.push((format!("block{i}.mlp2.b"), &b.mlp2_b));
        }
        out.push(("head.w".into(), &self.head_w));
        out.push(("head.b".into(), &self.head_b));
        out
    }

    pub fn named_mut(&mut self) -> Vec<(String, &mut Tensor<S>)> {
        let mut out: Vec<(String, &mut Tensor<S>)> = vec![
            ("conv1.w".into(), &mut self.conv1_w),
            ("conv1.b".into(), &mut self.conv1_b),
            ("conv2.w".into(), &mut self.conv2_w),
            ("conv2.b".into(), &mut self.conv2_b),
            ("conv3.w".into(), &mut self.conv3_w),
            ("conv3.b".into(), &mut self.conv3_b),
            ("sketch_pos".into(), &mut self.sketch_pos),
            ("proj.w".into(), &mut self.proj_w),
            ("proj.b".into(), &mut self.proj_b),
            ("tok_emb".into(), &mut self.tok_emb),
            ("img_pos".into(), &mut self.img_pos),
            ("t_mlp1.w".into(), &mut self.t_mlp1_w),
            ("t_mlp1.b".into(), &mut self.t_mlp1_b),
            ("t_mlp2.w".into(), &mut self.t_mlp2_w),
            ("t_mlp2.b".into(), &mut self.t_mlp2_b),
        ];
        for (i, b) in self.blocks.iter_mut().enumerate() {
            out.push((format!("block{i}.ln1.g"), &mut b.ln1_g));
            out.push((format!("block{i}.ln1.b"), &mut b.ln1_b));
            out.push((format!("block{i}.attn.wq"), &mut b.wq));
            out.push((format!("block{i}.attn.bq"), &mut b.bq));
            out.push((format!("block{i}.attn.wk"), &mut b.wk));
            out.push((format!("block{i}.attn.bk"), &mut b.bk));
            out.push((format!("block{i}.attn.wv"), &mut b.wv));
            out.push((format!("block{i}.attn.bv"), &mut b.bv));
            out.push((format!("block{i}.attn.wo"), &mut b.wo));
            out.push((format!("block{i}.attn.bo"), &mut b.bo));
            out.push((format!("block{i}.ln2.g"), &mut b.ln2_g));
            out.push((format!("block{i}.ln2.b"), &mut b.ln2_b));
            out.push((format!("block{i}.mlp1.w"), &mut b.mlp1_w));
            out.push((format!("block{i}.mlp1.b"), &mut b.mlp1_b));
            out.push((format!("block{i}.mlp2.w"), &mut b.mlp2_w));
            out.push((format!("block{i}.mlp2.b"), &mut b.mlp2_b));
        }
        out.push(("head.w".into(), &mut self.head_w));
        out.push(("head.b".into(), &mut self.head_b));
        out
    }

    pub fn param_count(&self) -> usize {
        self.named().iter().map(|(_, t)| t.numel()).sum()
    }

    pub fn param_sizes(&self) -> Vec<usize> {
        self.named().iter().map(|(_, t)| t.numel()).collect()
    }

    pub fn cast<T: Scalar>(&self) -> DenoiserParams<T> {
        let cast_block = |b: &BlockParams<S>| BlockParams {
            ln1_g: b.ln1_g.cast(),
            ln1_b: b.ln1_b.cast(),
            wq: b.wq.cast(),
            bq: b.bq.cast(),
            wk: b.wk.cast(),
            bk: b.bk.cast(),
            wv: b.wv.cast(),
            bv: b.bv.cast(),
            wo: b.wo.cast(),
            bo: b.bo.cast(),
            ln2_g: b.ln2_g.cast(),
            ln2_b: b.ln2_b.cast(),
            mlp1_w: b.mlp1_w.cast(),
            mlp1_b: b.mlp1_b.cast(),
            mlp2_w: b.mlp2_w.cast(),
            mlp2_b: b.mlp2_b.cast(),
        };
        DenoiserParams {
            config: self.config,
            conv1_w: self.conv1_w.cast(),
            conv1_b: self.conv1_b.cast(),
            conv2_w: self.conv2_w.cast(),
            conv2_b: self.conv2_b.cast(),
            conv3_w: self.conv3_w.cast(),
            conv3_b: self.conv3_b.cast(),
            sketch_pos: self.sketch_pos.cast(),
            proj_w: self.proj_w.cast(),
            proj_b: self.proj_b.cast(),
            tok_emb: self.tok_emb.cast(),
            img_pos: self.img_pos.cast(),
            t_mlp1_w: self.t_mlp1_w.cast(),
            t_mlp1_b: self.t_mlp1_b.cast(),
            t_mlp2_w: self.t_mlp2_w.cast(),
            t_mlp2_b: self.t_mlp2_b.cast(),
            blocks: self.blocks.iter().map(cast_block).collect(),
            head_w: self.head_w.cast(),
            head_b: self.head_b.cast(),
        }
    }

    /// Insert every parameter as a tape leaf. `trainable` controls whether
    /// gradients flow (inference passes skip grad bookkeeping entirely).
    pub fn insert_into(&self, tape: &mut Tape<S>, trainable: bool) -> ParamNodes {
        let mut leaf = |t: &Tensor<S>| {
            if trainable {
                tape.leaf(t)
            } else {
                let mut frozen = t.clone();
                frozen.requires_grad = false;
                tape.leaf(&frozen)
            }
        };
        ParamNodes {
            conv1_w: leaf(&self.conv1_w),
            conv1_b: leaf(&self.conv1_b),
            conv2_w: leaf(&self.conv2_w),
            conv2_b: leaf(&self.conv2_b),
            conv3_w: leaf(&self.conv3_w),
            conv3_b: leaf(&self.conv3_b),
            sketch_pos: leaf(&self.sketch_pos),
            proj_w: leaf(&self.proj_w),
            proj_b: leaf(&self.proj_b),
            tok_emb: leaf(&self.tok_emb),
            img_pos: leaf(&self.img_pos),
            t_mlp1_w: leaf(&self.t_mlp1_w),
            t_mlp1_b: leaf(&self.t_mlp1_b),
            t_mlp2_w: leaf(&self.t_mlp2_w),
            t_mlp2_b: leaf(&self.t_mlp2_b),
            blocks: self
                .blocks
                .iter()
                .map(|b| BlockNodes {
                    ln1_g: leaf(&b.ln1_g),
                    ln1_b: leaf(&b.ln1_b),
                    wq: leaf(&b.wq),
                    bq: leaf(&b.bq),
                    wk: leaf(&b.wk),
                    bk: leaf(&b.bk),
                    wv: leaf(&b.wv),
                    bv: leaf(&b.bv),
                    wo: leaf(&b.wo),
                    bo: leaf(&b.bo),
                    ln2_g: leaf(&b.ln2_g),
                    ln2_b: leaf(&b.ln2_b),
                    mlp1_w: leaf(&b.mlp1_w),
                    mlp1_b: leaf(&b.mlp1_b),
                    mlp2_w: leaf(&b.mlp2_w),
                    mlp2_b: leaf(&b.mlp2_b),
                })
                .collect(),
            head_w: leaf(&self.head_w),
            head_b: leaf(&self.head_b),
        }
    }
}

pub struct BlockNodes {
    pub ln1_g: NodeId,
    pub ln1_b: NodeId,
    pub wq: NodeId,
    pub bq: NodeId,
    pub wk: NodeId,
    pub bk: NodeId,
    pub wv: NodeId,
    pub bv: NodeId,
    pub wo: NodeId,
    pub bo: NodeId,
    pub ln2_g: NodeId,
    pub ln2_b: NodeId,
    pub mlp1_w: NodeId,
    pub mlp1_b: NodeId,
    pub mlp2_w: NodeId,
    pub mlp2_b: NodeId,
}

pub struct ParamNodes {
    pub conv1_w: NodeId,
    pub conv1_b: NodeId,
    pub conv2_w: NodeId,
    pub conv2_b: NodeId,
    pub conv3_w: NodeId,
    pub conv3_b: NodeId,
    pub sketch_pos: NodeId,
    pub proj_w: NodeId,
    pub proj_b: NodeId,
    pub tok_emb: NodeId,
    pub img_pos: NodeId,
    pub t_mlp1_w: NodeId,
    pub t_mlp1_b: NodeId,
    pub t_mlp2_w: NodeId,
    pub t_mlp2_b: NodeId,
    pub blocks: Vec<BlockNodes>,
    pub head_w: NodeId,
    pub head_b: NodeId,
}

impl ParamNodes {
    /// Same enumeration order as `DenoiserParams::named`.
    pub fn ordered(&self) -> Vec<NodeId> {
        let mut out = vec![
            self.conv1_w,
            self.conv1_b,
            self.conv2_w,
            self.conv2_b,
            self.conv3_w,
            self.conv3_b,
            self.sketch_pos,
            self.proj_w,
            self.proj_b,
            self.tok_emb,
            self.img_pos,
            self.t_mlp1_w,
            self.t_mlp1_b,
            self.t_mlp2_w,
            self.t_mlp2_b,
        ];
        for b in &self.blocks {
            out.extend([
                b.ln1_g, b.ln1_b, b.wq, b.bq, b.wk, b.bk, b.wv, b.bv, b.wo, b.bo, b.ln2_g,
                b.ln2_b, b.mlp1_w, b.mlp1_b, b.mlp2_w, b.mlp2_b,
            ]);
        }
        out.extend([self.head_w, self.head_b]);
        out
    }
}

/// im2col index list for a 3x3 stride-2 pad-1 convolution over an HxW grid.
/// Out-of-bounds taps point at row H*W, which callers bind to a zero row.
fn conv_indices(h: usize, w: usize) -> Vec<usize> {
    let (oh, ow) = (h / 2, w / 2);
    let mut idx = Vec::with_capacity(oh * ow * 9);
    for oy in 0..oh {
        for ox in 0..ow {
            for dy in 0..3 {
                for dx in 0..3 {
                    let iy = (2 * oy + dy) as isize - 1;
                    let ix = (2 * ox + dx) as isize - 1;
                    if iy >= 0 && iy < h as isize && ix >= 0 && ix < w as isize {
                        idx.push(iy as usize * w + ix as usize);
                    } else {
                        idx.push(h * w);
                    }
                }
            }
        }
    }
    idx
}

fn conv_stage<S: Scalar>(
    tape: &mut Tape<S>,
    x: NodeId,
    h: usize,
    w: usize,
    cin: usize,
    weight: NodeId,
    bias: NodeId,
) -> Result<NodeId> {
    let zero_row = tape.constant(1, cin, vec![S::ZERO; cin]);
    let padded = tape.concat_rows(&[x, zero_row])?;
    let gathered = tape.gather_rows(padded, &conv_indices(h, w));
    let cols = tape.reshape(gathered, (h / 2) * (w / 2), 9 * cin)?;
    let lin = tape.matmul(cols, weight)?;
    let biased = tape.add(lin, bias)?;
    Ok(tape.gelu(biased))
}

/// Sketch encoder: three stride-2 conv stages with gelu produce an 8x8
/// feature map, 2D learnable positional embeddings are added, the map is
/// flattened row-major, and a linear projection lifts it to width d.
/// Returns the 64 x d sketch-token node.
pub fn encode_sketch<S: Scalar>(
    tape: &mut Tape<S>,
    nodes: &ParamNodes,
    sketch: &SketchImage,
) -> Result<NodeId> {
    if sketch.pixels.len() != SKETCH_SIZE * SKETCH_SIZE {
        return Err(Error::dim("sketch must be 64x64"));
    }
    let input: Vec<S> = sketch
        .pixels
        .iter()
        .map(|&p| if p < 128 { S::ONE } else { S::ZERO })
        .collect();
    let x0 = tape.constant(SKETCH_SIZE * SKETCH_SIZE, 1, input);
    let x1 = conv_stage(tape, x0, 64, 64, 1, nodes.conv1_w, nodes.conv1_b)?;
    let x2 = conv_stage(tape, x1, 32, 32, CONV_CH1, nodes.conv2_w, nodes.conv2_b)?;
    let x3 = conv_stage(tape, x2, 16, 16, CONV_CH2, nodes.conv3_w, nodes.conv3_b)?;
    let with_pos = tape.add(x3, nodes.sketch_pos)?;
    let projected = tape.matmul(with_pos, nodes.proj_w)?;
    tape.add(projected, nodes.proj_b)
}

fn sinusoidal_embedding(t: usize, d: usize) -> Vec<f64> {
    let mut emb = vec![0.0; d];
    for i in 0..d / 2 {
        let freq = (10_000.0f64).powf(-(2.0 * i as f64) / d as f64);
        let angle = t as f64 * freq;
        emb[2 * i] = angle.sin();
        emb[2 * i + 1] = angle.cos();
    }
    emb
}

/// Denoiser forward pass: embed the K image tokens (MASK included), add
/// image positional and broadcast timestep embeddings, prepend the sketch
/// tokens, run the pre-norm bidirectional blocks, and read logits over the
/// C clean classes at the K image positions.
pub fn denoise<S: Scalar>(
    tape: &mut Tape<S>,
    nodes: &ParamNodes,
    config: &ModelConfig,
    z_t: &TokenGrid,
    t: usize,
    sketch_tokens: NodeId,
) -> Result<NodeId> {
    let ModelConfig { d, n_heads, c, k, .. } = *config;
    if z_t.k() != k {
        return Err(Error::dim(format!(
            "z_t has {} positions, model wants {k}",
            z_t.k()
        )));
    }
    if z_t.c != c {
        return Err(Error::dim(format!("z_t C={} vs model C={c}", z_t.c)));
    }
    if t < 1 {
        return Err(Error::contract("timestep must be >= 1"));
    }
    if tape.rows(sketch_tokens) != SKETCH_TOKENS || tape.cols(sketch_tokens) != d {
        return Err(Error::dim("sketch tokens must be 64 x d"));
    }

    let ids: Vec<usize> = z_t.ids.iter().map(|&id| id as usize).collect();
    let tok = tape.gather_rows(nodes.tok_emb, &ids);
    let tok_pos = tape.add(tok, nodes.img_pos)?;

    let temb_const = tape.constant_f64(1, d, &sinusoidal_embedding(t, d));
    let t1 = tape.matmul(temb_const, nodes.t_mlp1_w)?;
    let t1b = tape.add(t1, nodes.t_mlp1_b)?;
    let t1a = tape.gelu(t1b);
    let t2 = tape.matmul(t1a, nodes.t_mlp2_w)?;
    let temb = tape.add(t2, nodes.t_mlp2_b)?;
    let img_in = tape.add(tok_pos, temb)?;

    let mut seq = tape.concat_rows(&[sketch_tokens, img_in])?;
    let dh = d / n_heads;
    let scale = 1.0 / (dh as f64).sqrt();

    for block in &nodes.blocks {
        // Attention sublayer, pre-norm, fully bidirectional.
        let normed = tape.layer_norm(seq, block.ln1_g, block.ln1_b)?;
        let q = tape.matmul(normed, block.wq)?;
        let q = tape.add(q, block.bq)?;
        let kx = tape.matmul(normed, block.wk)?;
        let kx = tape.add(kx, block.bk)?;
        let v = tape.matmul(normed, block.wv)?;
        let v = tape.add(v, block.bv)?;

        let mut heads = Vec::with_capacity(n_heads);
        for hidx in 0..n_heads {
            let (c0, c1) = (hidx * dh, (hidx + 1) * dh);
            let qh = tape.slice_cols(q, c0, c1);
            let kh = tape.slice_cols(kx, c0, c1);
            let vh = tape.slice_cols(v, c0, c1);
            let kt = tape.transpose(kh);
            let scores = tape.matmul(qh, kt)?;
            let scaled = tape.scale(scores, scale);
            let attn = tape.softmax_rows(scaled);
            heads.push(tape.matmul(attn, vh)?);
        }
        let merged = tape.concat_cols(&heads)?;
        let proj = tape.matmul(merged, block.wo)?;
        let proj = tape.add(proj, block.bo)?;
        seq = tape.add(seq, proj)?;

        // MLP sublayer, pre-norm, expansion 4.
        let normed2 = tape.layer_norm(seq, block.ln2_g, block.ln2_b)?;
        let m1 = tape.matmul(normed2, block.mlp1_w)?;
        let m1 = tape.add(m1, block.mlp1_b)?;
        let act = tape.gelu(m1);
        let m2 = tape.matmul(act, block.mlp2_w)?;
        let m2 = tape.add(m2, block.mlp2_b)?;
        seq = tape.add(seq, m2)?;
    }

    let img_rows = tape.slice_rows(seq, SKETCH_TOKENS, SKETCH_TOKENS + k);
    let logits = tape.matmul(img_rows, nodes.head_w)?;
    tape.add(logits, nodes.head_b)
}

/// The conditioning sequence s: 64 rows of d features.
#[derive(Debug, Clone, PartialEq)]
pub struct SketchTokens<S: Scalar = f32> {
    pub features: Tensor<S>,
}

/// Convenience wrapper running the sketch encoder on a throwaway tape.
pub fn sketch_tokens_value<S: Scalar>(
    params: &DenoiserParams<S>,
    sketch: &SketchImage,
) -> Result<SketchTokens<S>> {
    let mut tape: Tape<S> = Tape::new();
    let nodes = params.insert_into(&mut tape, false);
    let id = encode_sketch(&mut tape, &nodes, sketch)?;
    Ok(SketchTokens {
        features: Tensor::new(
            vec![SKETCH_TOKENS, params.config.d],
            tape.value(id).to_vec(),
        )?,
    })
}

// ── checkpoint format ──────────────────────────────────────────────────

/// Write magic, version, a length-prefixed JSON config block, then named
/// tensors as (name length, name, rank, dims..., little-endian f32 data).
pub fn write_checkpoint(
    path: &Path,
    config_json: &str,
    tensors: &[(String, Vec<usize>, Vec<f32>)],
) -> Result<()> {
    let mut out: Vec<u8> = Vec::new();
    out.extend_from_slice(CKPT_MAGIC);
    out.extend_from_slice(&CKPT_VERSION.to_le_bytes());
    out.extend_from_slice(&(config_json.len() as u32).to_le_bytes());
    out.extend_from_slice(config_json.as_bytes());
    for (name, shape, data) in tensors {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(shape.len() as u32).to_le_bytes());
        for &dim in shape {
            out.extend_from_slice(&(dim as u32).to_le_bytes());
        }
        for &v in data {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    let tmp = path.with_extension("tmp");
    {
        let mut f = std::fs::File::create(&tmp)?;
        f.write_all(&out)?;
        f.sync_all()?;
    }
    std::fs::rename(&tmp, path)?;
    Ok(())
}

pub fn read_checkpoint(path: &Path) -> Result<(String, Vec<(String, Vec<usize>, Vec<f32>)>)> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    if bytes.len() < 16 || &bytes[..8] != CKPT_MAGIC {
        return Err(Error::format("bad checkpoint magic"));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
    if version != CKPT_VERSION {
        return Err(Error::format(format!(
            "unsupported checkpoint version {version}"
        )));
    }
    fn take<'a>(bytes: &'a [u8], pos: &mut usize, n: usize) -> Result<&'a [u8]> {
        if *pos + n > bytes.len() {
            return Err(Error::format("truncated checkpoint file"));
        }
        let out = &bytes[*pos..*pos + n];
        *pos += n;
        Ok(out)
    }
    let mut pos = 12usize;
    let cfg_len = u32::from_le_bytes(take(&bytes, &mut pos, 4)?.try_into().unwrap()) as usize;
    let config_json = String::from_utf8(take(&bytes, &mut pos, cfg_len)?.to_vec())
        .map_err(|_| Error::format("config block is not UTF-8"))?;
    let mut tensors = Vec::new();
    while pos < bytes.len() {
        let name_len = u32::from_le_bytes(take(&bytes, &mut pos, 4)?.try_into().unwrap()) as usize;
        let name = String::from_utf8(take(&bytes, &mut pos, name_len)?.to_vec())
            .map_err(|_| Error::format("tensor name is not UTF-8"))?;
        let rank = u32::from_le_bytes(take(&bytes, &mut pos, 4)?.try_into().unwrap()) as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape
                .push(u32::from_le_bytes(take(&bytes, &mut pos, 4)?.try_into().unwrap()) as usize);
        }
        let numel: usize = shape.iter().product();
        let raw = take(&bytes, &mut pos, numel * 4)?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        tensors.push((name, shape, data));
    }
    Ok((config_json, tensors))
}

impl DenoiserParams<f32> {
    pub fn to_named_tensors(&self) -> Vec<(String, Vec<usize>, Vec<f32>)> {
        self.named()
            .into_iter()
            .map(|(name, t)| (name, t.shape.clone(), t.data.clone()))
            .collect()
    }

    pub fn from_named_tensors(
        config: ModelConfig,
        tensors: &[(String, Vec<usize>, Vec<f32>)],
    ) -> Result<Self> {
        let mut params = init_params::<f32>(0, config)?;
        let lookup: std::collections::BTreeMap<&str, (&Vec<usize>, &Vec<f32>)> = tensors
            .iter()
            .map(|(n, s, d)| (n.as_str(), (s, d)))
            .collect();
        for (name, tensor) in params.named_mut() {
            let (shape, data) = lookup
                .get(name.as_str())
                .ok_or_else(|| Error::format(format!("checkpoint missing tensor {name}")))?;
            if **shape != tensor.shape {
                return Err(Error::format(format!(
                    "tensor {name}: shape {:?} vs expected {:?}",
                    shape, tensor.shape
                )));
            }
            tensor.data = (*data).clone();
        }
        Ok(params)
    }
}
