//! Forward pass with per-module tracing.
//!
//! The forward pass works one image at a time on `tokens × d` matrices.
//! Batched entry points fan samples out over the rayon pool and collect in
//! sample order, so results never depend on scheduling.

use std::collections::BTreeMap;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::tensor::{kernels, Real, Tensor};

use super::config::ModelConfig;
use super::taps::{Module, TapId, TapRecord};
use super::weights::{BlockWeights, ModelWeights};

/// Every intermediate of one block for one image. Matrices are `tokens × width`.
#[derive(Debug, Clone, Default)]
pub struct BlockTrace<T> {
    pub input: Vec<T>,
    pub ln1_xhat: Vec<T>,
    pub ln1_rstd: Vec<T>,
    /// LN1 output.
    pub normed1: Vec<T>,
    /// `tokens × 3d`: queries, keys, values side by side.
    pub qkv: Vec<T>,
    /// `heads × tokens × tokens` attention weights.
    pub attn: Vec<T>,
    /// Concatenated head outputs before the output projection.
    pub context: Vec<T>,
    /// Attention output after the output projection.
    pub mha: Vec<T>,
    pub rc1: Vec<T>,
    pub ln2_xhat: Vec<T>,
    pub ln2_rstd: Vec<T>,
    pub normed2: Vec<T>,
    pub fc1: Vec<T>,
    pub act: Vec<T>,
    pub fc2: Vec<T>,
    pub rc2: Vec<T>,
}

impl<T: Real> BlockTrace<T> {
    /// Full `tokens × width` activation of a module.
    pub fn module_output(&self, module: Module) -> &[T] {
        match module {
            Module::LN1 => &self.normed1,
            Module::MHA => &self.mha,
            Module::RC1 => &self.rc1,
            Module::LN2 => &self.normed2,
            Module::FC1 => &self.fc1,
            Module::Act => &self.act,
            Module::FC2 => &self.fc2,
            Module::RC2 => &self.rc2,
        }
    }

    /// CLS row (token 0) of a module's output.
    pub fn cls(&self, module: Module, cfg: &ModelConfig) -> &[T] {
        &self.module_output(module)[..module.width(cfg)]
    }

    pub fn taps(&self, block: usize, cfg: &ModelConfig) -> Vec<TapRecord<T>> {
        Module::ALL
            .into_iter()
            .map(|m| TapRecord {
                tap: TapId::new(block, m),
                cls_embedding: self.cls(m, cfg).to_vec(),
            })
            .collect()
    }
}

/// Trace of a whole network on one image.
#[derive(Debug, Clone)]
pub struct ForwardTrace<T> {
    /// `n × channels·P·P` flattened patches.
    pub patches: Vec<T>,
    pub blocks: Vec<BlockTrace<T>>,
    pub head_xhat: Vec<T>,
    pub head_rstd: T,
    pub head_normed: Vec<T>,
    pub logits: Vec<T>,
}

fn check_image_shape<T: Real>(img: &Tensor<T>, cfg: &ModelConfig) -> Result<()> {
    let s = cfg.image_size;
    if img.shape() != [cfg.channels, s, s] {
        return Err(Error::Dimension(format!(
            "expected a {}x{s}x{s} image, got {:?}",
            cfg.channels,
            img.shape()
        )));
    }
    Ok(())
}

/// Cuts a `channels × H × W` image into `n` flattened patches, row-major over
/// the patch grid, each laid out `(channel, row, col)` to match the kernel.
pub(crate) fn extract_patches<T: Real>(img: &[T], cfg: &ModelConfig) -> Vec<T> {
    let (c, s, p, g) = (cfg.channels, cfg.image_size, cfg.patch_size, cfg.grid());
    let mut out = Vec::with_capacity(cfg.num_patches() * cfg.patch_len());
    for gy in 0..g {
        for gx in 0..g {
            for ch in 0..c {
                for py in 0..p {
                    let base = ch * s * s + (gy * p + py) * s + gx * p;
                    out.extend_from_slice(&img[base..base + p]);
                }
            }
        }
    }
    out
}

fn embed_patches<T: Real>(patches: &[T], w: &ModelWeights<T>, cfg: &ModelConfig) -> Vec<T> {
    let d = cfg.embed_dim;
    let n = cfg.num_patches();
    let e = &w.embedding;
    let mut proj = vec![T::zero(); n * d];
    kernels::matmul_bt(
        patches,
        e.conv_weight.data(),
        &mut proj,
        n,
        cfg.patch_len(),
        d,
    );
    let mut tokens = vec![T::zero(); (n + 1) * d];
    let pos = e.pos.data();
    for j in 0..d {
        tokens[j] = e.cls.data()[j] + pos[j];
    }
    for t in 0..n {
        for j in 0..d {
            let v = proj[t * d + j] + e.conv_bias.data()[j];
            tokens[(t + 1) * d + j] = v + pos[(t + 1) * d + j];
        }
    }
    tokens
}

/// Patch embedding: stride-`P` convolution, CLS prepended, positions added.
pub fn embed_image<T: Real>(
    img: &Tensor<T>,
    w: &ModelWeights<T>,
    cfg: &ModelConfig,
) -> Result<Tensor<T>> {
    check_image_shape(img, cfg)?;
    let patches = extract_patches(img.data(), cfg);
    Tensor::new(
        vec![cfg.num_tokens(), cfg.embed_dim],
        embed_patches(&patches, w, cfg),
    )
}

/// Runs one pre-norm block on a `tokens × d` matrix and keeps every intermediate.
pub fn trace_block<T: Real>(x: &[T], bw: &BlockWeights<T>, cfg: &ModelConfig) -> BlockTrace<T> {
    let mut tr = BlockTrace::default();
    trace_block_into(x, bw, cfg, &mut tr);
    tr
}

/// [`trace_block`] writing into an existing trace, reusing its buffers.
pub fn trace_block_into<T: Real>(
    x: &[T],
    bw: &BlockWeights<T>,
    cfg: &ModelConfig,
    tr: &mut BlockTrace<T>,
) {
    let BlockTrace {
        input,
        ln1_xhat,
        ln1_rstd,
        normed1,
        qkv,
        attn,
        context,
        mha,
        rc1,
        ln2_xhat,
        ln2_rstd,
        normed2,
        fc1,
        act,
        fc2,
        rc2,
    } = tr;
    input.clear();
    input.extend_from_slice(x);
    let d = cfg.embed_dim;
    let f = cfg.ffn_dim;
    let nt = x.len() / d;
    let heads = cfg.num_heads;
    let dh = cfg.head_dim();
    let eps = T::lit(cfg.ln_eps);

    ln1_xhat.resize(nt * d, T::zero());
    ln1_rstd.resize(nt, T::zero());
    normed1.resize(nt * d, T::zero());
    kernels::layer_norm(
        x,
        bw.ln1.gamma.data(),
        bw.ln1.beta.data(),
        eps,
        d,
        normed1,
        Some((ln1_xhat, ln1_rstd)),
    );

    qkv.resize(nt * 3 * d, T::zero());
    kernels::linear(
        &normed1,
        bw.qkv.weight.data(),
        bw.qkv.bias.data(),
        qkv,
        nt,
        d,
        3 * d,
    );

    let scale = T::one() / T::lit(dh as f64).sqrt();
    attn.resize(heads * nt * nt, T::zero());
    context.resize(nt * d, T::zero());
    let mut q = vec![T::zero(); nt * dh];
    let mut k = vec![T::zero(); nt * dh];
    let mut v = vec![T::zero(); nt * dh];
    let mut ctx = vec![T::zero(); nt * dh];
    for h in 0..heads {
        for t in 0..nt {
            let row = &qkv[t * 3 * d..(t + 1) * 3 * d];
            q[t * dh..(t + 1) * dh].copy_from_slice(&row[h * dh..(h + 1) * dh]);
            k[t * dh..(t + 1) * dh].copy_from_slice(&row[d + h * dh..d + (h + 1) * dh]);
            v[t * dh..(t + 1) * dh].copy_from_slice(&row[2 * d + h * dh..2 * d + (h + 1) * dh]);
        }
        let probs = &mut attn[h * nt * nt..(h + 1) * nt * nt];
        kernels::matmul_bt(&q, &k, probs, nt, dh, nt);
        for row in probs.chunks_exact_mut(nt) {
            row.iter_mut().for_each(|s| *s *= scale);
            kernels::softmax_row(row);
        }
        kernels::matmul(probs, &v, &mut ctx, nt, nt, dh);
        for t in 0..nt {
            context[t * d + h * dh..t * d + (h + 1) * dh]
                .copy_from_slice(&ctx[t * dh..(t + 1) * dh]);
        }
    }

    mha.resize(nt * d, T::zero());
    kernels::linear(
        &context,
        bw.attn_out.weight.data(),
        bw.attn_out.bias.data(),
        mha,
        nt,
        d,
        d,
    );
    rc1.clear();
    rc1.extend(x.iter().zip(mha.iter()).map(|(&a, &b)| a + b));

    ln2_xhat.resize(nt * d, T::zero());
    ln2_rstd.resize(nt, T::zero());
    normed2.resize(nt * d, T::zero());
    kernels::layer_norm(
        &rc1,
        bw.ln2.gamma.data(),
        bw.ln2.beta.data(),
        eps,
        d,
        normed2,
        Some((ln2_xhat, ln2_rstd)),
    );

    fc1.resize(nt * f, T::zero());
    kernels::linear(
        &normed2,
        bw.fc1.weight.data(),
        bw.fc1.bias.data(),
        fc1,
        nt,
        d,
        f,
    );
    act.clear();
    act.extend(fc1.iter().map(|&v| kernels::gelu(v)));
    fc2.resize(nt * d, T::zero());
    kernels::linear(
        &act,
        bw.fc2.weight.data(),
        bw.fc2.bias.data(),
        fc2,
        nt,
        f,
        d,
    );
    rc2.clear();
    rc2.extend(rc1.iter().zip(fc2.iter()).map(|(&a, &b)| a + b));
}

/// One transformer block. Returns the block output and the CLS embedding at
/// each of the eight taps, in dataflow order.
pub fn block_forward<T: Real>(
    x: &Tensor<T>,
    bw: &BlockWeights<T>,
    block: usize,
    cfg: &ModelConfig,
) -> Result<(Tensor<T>, Vec<TapRecord<T>>)> {
    if x.shape().len() != 2 || x.cols() != cfg.embed_dim {
        return Err(Error::Dimension(format!(
            "block input must be tokens x {}, got {:?}",
            cfg.embed_dim,
            x.shape()
        )));
    }
    let trace = trace_block(x.data(), bw, cfg);
    let taps = trace.taps(block, cfg);
    let y = Tensor::new(x.shape().to_vec(), trace.rc2)?;
    Ok((y, taps))
}

/// Final LayerNorm on the CLS row followed by the classifier.
fn head_forward<T: Real>(
    cls: &[T],
    w: &ModelWeights<T>,
    cfg: &ModelConfig,
) -> (Vec<T>, T, Vec<T>, Vec<T>) {
    let d = cfg.embed_dim;
    let c = cfg.num_classes;
    let mut xhat = vec![T::zero(); d];
    let mut rstd = vec![T::zero(); 1];
    let mut normed = vec![T::zero(); d];
    kernels::layer_norm(
        cls,
        w.head.ln_gamma.data(),
        w.head.ln_beta.data(),
        T::lit(cfg.ln_eps),
        d,
        &mut normed,
        Some((&mut xhat, &mut rstd)),
    );
    let mut logits = vec![T::zero(); c];
    kernels::linear(
        &normed,
        w.head.weight.data(),
        w.head.bias.data(),
        &mut logits,
        1,
        d,
        c,
    );
    (xhat, rstd[0], normed, logits)
}

/// Runs the blocks from `start` onward on `tokens` and the head, appending to `blocks`.
pub(crate) fn trace_from<T: Real>(
    patches: Vec<T>,
    mut blocks: Vec<BlockTrace<T>>,
    tokens: Vec<T>,
    start: usize,
    w: &ModelWeights<T>,
    cfg: &ModelConfig,
) -> ForwardTrace<T> {
    let mut x = tokens;
    for bw in &w.blocks[start..] {
        let tr = trace_block(&x, bw, cfg);
        x = tr.rc2.clone();
        blocks.push(tr);
    }
    let (head_xhat, head_rstd, head_normed, logits) = head_forward(&x[..cfg.embed_dim], w, cfg);
    ForwardTrace {
        patches,
        blocks,
        head_xhat,
        head_rstd,
        head_normed,
        logits,
    }
}

/// Full traced forward pass for one `channels × H × W` image given as a flat slice.
pub fn trace_image<T: Real>(img: &[T], w: &ModelWeights<T>, cfg: &ModelConfig) -> ForwardTrace<T> {
    debug_assert_eq!(img.len(), cfg.image_len());
    let patches = extract_patches(img, cfg);
    let tokens = embed_patches(&patches, w, cfg);
    trace_from(
        patches,
        Vec::with_capacity(cfg.num_blocks),
        tokens,
        0,
        w,
        cfg,
    )
}

/// Logits for one image resumed at block `start` from its `tokens × d` input.
pub fn forward_from<T: Real>(
    tokens: &[T],
    start: usize,
    w: &ModelWeights<T>,
    cfg: &ModelConfig,
) -> Result<Vec<T>> {
    if start > cfg.num_blocks || tokens.len() != cfg.num_tokens() * cfg.embed_dim {
        return Err(Error::Dimension(format!(
            "cannot resume at block {start} from {} values",
            tokens.len()
        )));
    }
    let mut scratch = BlockTrace::default();
    let mut x = tokens.to_vec();
    for bw in &w.blocks[start..] {
        trace_block_into(&x, bw, cfg, &mut scratch);
        std::mem::swap(&mut x, &mut scratch.rc2);
    }
    Ok(head_forward(&x[..cfg.embed_dim], w, cfg).3)
}

/// Per-tap CLS features (`B × width`) and logits (`B × classes`) for a batch.
#[derive(Debug, Clone, PartialEq)]
pub struct Collected<T = f32> {
    pub features: BTreeMap<TapId, Tensor<T>>,
    pub logits: Tensor<T>,
}

fn check_batch<T: Real>(batch: &Tensor<T>, cfg: &ModelConfig) -> Result<usize> {
    let s = cfg.image_size;
    let shape = batch.shape();
    if shape.len() != 4 || shape[1..] != [cfg.channels, s, s] {
        return Err(Error::Dimension(format!(
            "expected a Bx{}x{s}x{s} batch, got {shape:?}",
            cfg.channels
        )));
    }
    Ok(shape[0])
}

/// Forward pass over a batch that captures the CLS embedding at each requested tap.
pub fn forward_collect<T: Real>(
    batch: &Tensor<T>,
    w: &ModelWeights<T>,
    cfg: &ModelConfig,
    taps: &[TapId],
) -> Result<Collected<T>> {
    let b = check_batch(batch, cfg)?;
    for t in taps {
        t.validate(cfg)?;
    }
    let len = cfg.image_len();
    let per_sample: Vec<(Vec<Vec<T>>, Vec<T>)> = batch
        .data()
        .par_chunks_exact(len)
        .map(|img| {
            let tr = trace_image(img, w, cfg);
            let feats = taps
                .iter()
                .map(|t| tr.blocks[t.block].cls(t.module, cfg).to_vec())
                .collect();
            (feats, tr.logits)
        })
        .collect();

    let mut features = BTreeMap::new();
    for (i, tap) in taps.iter().enumerate() {
        let width = tap.width(cfg);
        let mut data = Vec::with_capacity(b * width);
        for (f, _) in &per_sample {
            data.extend_from_slice(&f[i]);
        }
        features.insert(*tap, Tensor::new(vec![b, width], data)?);
    }
    let mut logits = Vec::with_capacity(b * cfg.num_classes);
    for (_, l) in &per_sample {
        logits.extend_from_slice(l);
    }
    Ok(Collected {
        features,
        logits: Tensor::new(vec![b, cfg.num_classes], logits)?,
    })
}

/// Logits only.
pub fn forward<T: Real>(
    batch: &Tensor<T>,
    w: &ModelWeights<T>,
    cfg: &ModelConfig,
) -> Result<Tensor<T>> {
    Ok(forward_collect(batch, w, cfg, &[])?.logits)
}
