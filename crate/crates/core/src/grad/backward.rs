//! Hand-derived backward pass.
//!
//! Each sample is traced and differentiated on its own. Per-sample gradients
//! are summed inside fixed-size chunks, and the chunk sums are then added in
//! chunk order, so the result is the same for every thread count.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::tensor::{kernels, Real, Tensor};
use crate::vit::{trace_image, BlockTrace, BlockWeights, ForwardTrace, ModelConfig, ModelWeights};

/// Samples per gradient-accumulation chunk.
const CHUNK: usize = 8;

/// Adds the LayerNorm input gradient for rows of width `d` into `dx`.
///
/// `dxhat` is the gradient with respect to the normalized value (already
/// multiplied by gamma).
fn layer_norm_backward<T: Real>(dxhat: &[T], xhat: &[T], rstd: &[T], d: usize, dx: &mut [T]) {
    let inv_d = T::one() / T::lit(d as f64);
    for (r, &rs) in rstd.iter().enumerate() {
        let g = &dxhat[r * d..(r + 1) * d];
        let xh = &xhat[r * d..(r + 1) * d];
        let mut m1 = T::zero();
        let mut m2 = T::zero();
        for (&gv, &xv) in g.iter().zip(xh) {
            m1 += gv;
            m2 += gv * xv;
        }
        m1 *= inv_d;
        m2 *= inv_d;
        for ((o, &gv), &xv) in dx[r * d..(r + 1) * d].iter_mut().zip(g).zip(xh) {
            *o += rs * (gv - m1 - xv * m2);
        }
    }
}

/// LayerNorm parameter gradients and the `x̂` gradient, from the output gradient.
fn layer_norm_params<T: Real>(
    dout: &[T],
    xhat: &[T],
    gamma: &[T],
    d: usize,
    dgamma: &mut [T],
    dbeta: &mut [T],
) -> Vec<T> {
    let mut dxhat = vec![T::zero(); dout.len()];
    for ((drow, xrow), hrow) in dout
        .chunks_exact(d)
        .zip(xhat.chunks_exact(d))
        .zip(dxhat.chunks_exact_mut(d))
    {
        for j in 0..d {
            dgamma[j] += drow[j] * xrow[j];
            dbeta[j] += drow[j];
            hrow[j] = drow[j] * gamma[j];
        }
    }
    dxhat
}

/// Backward through one block. `dy` is the gradient of the block output;
/// returns the gradient of the block input.
fn block_backward<T: Real>(
    tr: &BlockTrace<T>,
    bw: &BlockWeights<T>,
    g: &mut BlockWeights<T>,
    dy: &[T],
    cfg: &ModelConfig,
) -> Vec<T> {
    let d = cfg.embed_dim;
    let f = cfg.ffn_dim;
    let nt = dy.len() / d;
    let heads = cfg.num_heads;
    let dh = cfg.head_dim();

    // FFN branch: y = r1 + fc2(gelu(fc1(ln2(r1)))).
    let mut drc1 = dy.to_vec();
    kernels::matmul_at_acc(&tr.act, dy, g.fc2.weight.data_mut(), nt, f, d);
    kernels::col_sum_acc(dy, g.fc2.bias.data_mut(), d);
    let mut dact = vec![T::zero(); nt * f];
    kernels::matmul_bt(dy, bw.fc2.weight.data(), &mut dact, nt, d, f);
    for (da, &z) in dact.iter_mut().zip(&tr.fc1) {
        *da *= kernels::gelu_grad(z);
    }
    kernels::matmul_at_acc(&tr.normed2, &dact, g.fc1.weight.data_mut(), nt, d, f);
    kernels::col_sum_acc(&dact, g.fc1.bias.data_mut(), f);
    let mut dnormed2 = vec![T::zero(); nt * d];
    kernels::matmul_bt(&dact, bw.fc1.weight.data(), &mut dnormed2, nt, f, d);
    let dxhat2 = layer_norm_params(
        &dnormed2,
        &tr.ln2_xhat,
        bw.ln2.gamma.data(),
        d,
        g.ln2.gamma.data_mut(),
        g.ln2.beta.data_mut(),
    );
    layer_norm_backward(&dxhat2, &tr.ln2_xhat, &tr.ln2_rstd, d, &mut drc1);

    // Attention branch: r1 = x + attn_out(mha(ln1(x))).
    let mut dx = drc1.clone();
    kernels::matmul_at_acc(&tr.context, &drc1, g.attn_out.weight.data_mut(), nt, d, d);
    kernels::col_sum_acc(&drc1, g.attn_out.bias.data_mut(), d);
    let mut dcontext = vec![T::zero(); nt * d];
    kernels::matmul_bt(&drc1, bw.attn_out.weight.data(), &mut dcontext, nt, d, d);

    let scale = T::one() / T::lit(dh as f64).sqrt();
    let row = 3 * d;
    let mut dqkv = vec![T::zero(); nt * row];
    let mut dp = vec![T::zero(); nt];
    for h in 0..heads {
        let (qo, ko, vo) = (h * dh, d + h * dh, 2 * d + h * dh);
        let probs = &tr.attn[h * nt * nt..(h + 1) * nt * nt];
        for i in 0..nt {
            let dc = &dcontext[i * d + qo..i * d + qo + dh];
            let p = &probs[i * nt..(i + 1) * nt];
            // dP_ij = dc_i · v_j, and dv_j += P_ij dc_i.
            for j in 0..nt {
                let v = &tr.qkv[j * row + vo..j * row + vo + dh];
                let mut s = T::zero();
                for (&a, &b) in dc.iter().zip(v) {
                    s += a * b;
                }
                dp[j] = s;
                let dv = &mut dqkv[j * row + vo..j * row + vo + dh];
                for (o, &a) in dv.iter_mut().zip(dc) {
                    *o += p[j] * a;
                }
            }
            let mut dot = T::zero();
            for (&pj, &dpj) in p.iter().zip(&dp) {
                dot += pj * dpj;
            }
            // dS_ij = P_ij (dP_ij − Σ_k P_ik dP_ik), scores S_ij = scale·q_i·k_j.
            for j in 0..nt {
                let ds = p[j] * (dp[j] - dot) * scale;
                for t in 0..dh {
                    let kj = tr.qkv[j * row + ko + t];
                    let qi = tr.qkv[i * row + qo + t];
                    dqkv[i * row + qo + t] += ds * kj;
                    dqkv[j * row + ko + t] += ds * qi;
                }
            }
        }
    }
    kernels::matmul_at_acc(&tr.normed1, &dqkv, g.qkv.weight.data_mut(), nt, d, row);
    kernels::col_sum_acc(&dqkv, g.qkv.bias.data_mut(), row);
    let mut dnormed1 = vec![T::zero(); nt * d];
    kernels::matmul_bt(&dqkv, bw.qkv.weight.data(), &mut dnormed1, nt, row, d);
    let dxhat1 = layer_norm_params(
        &dnormed1,
        &tr.ln1_xhat,
        bw.ln1.gamma.data(),
        d,
        g.ln1.gamma.data_mut(),
        g.ln1.beta.data_mut(),
    );
    layer_norm_backward(&dxhat1, &tr.ln1_xhat, &tr.ln1_rstd, d, &mut dx);
    dx
}

/// Softmax cross-entropy of one logit row; returns `(loss, dlogits)`.
fn xent<T: Real>(logits: &[T], label: usize) -> (f64, Vec<T>) {
    let mut p = logits.to_vec();
    kernels::softmax_row(&mut p);
    let max = logits.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
    let lse = max.widen()
        + logits
            .iter()
            .map(|&v| (v.widen() - max.widen()).exp())
            .sum::<f64>()
            .ln();
    p[label] -= T::one();
    (lse - logits[label].widen(), p)
}

/// Accumulates the gradient of one sample's cross-entropy into `g` and
/// returns its loss.
pub fn backward_sample<T: Real>(
    tr: &ForwardTrace<T>,
    label: usize,
    w: &ModelWeights<T>,
    g: &mut ModelWeights<T>,
    cfg: &ModelConfig,
) -> f64 {
    let d = cfg.embed_dim;
    let c = cfg.num_classes;
    let nt = cfg.num_tokens();
    let (loss, dlogits) = xent(&tr.logits, label);

    kernels::matmul_at_acc(&tr.head_normed, &dlogits, g.head.weight.data_mut(), 1, d, c);
    kernels::col_sum_acc(&dlogits, g.head.bias.data_mut(), c);
    let mut dnormed = vec![T::zero(); d];
    kernels::matmul_bt(&dlogits, w.head.weight.data(), &mut dnormed, 1, c, d);
    let dxhat = layer_norm_params(
        &dnormed,
        &tr.head_xhat,
        w.head.ln_gamma.data(),
        d,
        g.head.ln_gamma.data_mut(),
        g.head.ln_beta.data_mut(),
    );
    let mut dtokens = vec![T::zero(); nt * d];
    layer_norm_backward(&dxhat, &tr.head_xhat, &[tr.head_rstd], d, &mut dtokens[..d]);

    for (k, trace) in tr.blocks.iter().enumerate().rev() {
        dtokens = block_backward(trace, &w.blocks[k], &mut g.blocks[k], &dtokens, cfg);
    }

    let e = &mut g.embedding;
    for (o, &v) in e.cls.data_mut().iter_mut().zip(&dtokens[..d]) {
        *o += v;
    }
    for (o, &v) in e.pos.data_mut().iter_mut().zip(&dtokens) {
        *o += v;
    }
    let dproj = &dtokens[d..];
    kernels::col_sum_acc(dproj, e.conv_bias.data_mut(), d);
    kernels::matmul_at_acc(
        dproj,
        &tr.patches,
        e.conv_weight.data_mut(),
        nt - 1,
        d,
        cfg.patch_len(),
    );
    loss
}

fn check_inputs<T: Real>(batch: &Tensor<T>, labels: &[usize], cfg: &ModelConfig) -> Result<usize> {
    let s = cfg.image_size;
    let shape = batch.shape();
    if shape.len() != 4 || shape[1..] != [cfg.channels, s, s] {
        return Err(Error::Dimension(format!(
            "expected a Bx{}x{s}x{s} batch, got {shape:?}",
            cfg.channels
        )));
    }
    if shape[0] != labels.len() {
        return Err(Error::Dimension(format!(
            "{} images but {} labels",
            shape[0],
            labels.len()
        )));
    }
    if let Some(&l) = labels.iter().find(|&&l| l >= cfg.num_classes) {
        return Err(Error::Data(format!(
            "label {l} out of range for {} classes",
            cfg.num_classes
        )));
    }
    Ok(shape[0])
}

/// Mean cross-entropy over the batch and its gradient for every weight tensor.
pub fn loss_and_grads<T: Real>(
    batch: &Tensor<T>,
    labels: &[usize],
    w: &ModelWeights<T>,
    cfg: &ModelConfig,
) -> Result<(f64, ModelWeights<T>)> {
    let b = check_inputs(batch, labels, cfg)?;
    let len = cfg.image_len();
    let parts: Vec<(f64, ModelWeights<T>)> = batch
        .data()
        .par_chunks(CHUNK * len)
        .zip(labels.par_chunks(CHUNK))
        .map(|(imgs, labs)| {
            let mut g = w.zeros_like();
            let mut loss = 0.0;
            for (img, &label) in imgs.chunks_exact(len).zip(labs) {
                let tr = trace_image(img, w, cfg);
                loss += backward_sample(&tr, label, w, &mut g, cfg);
            }
            (loss, g)
        })
        .collect();
    let mut parts = parts.into_iter();
    let (mut loss, mut grads) = parts.next().expect("batch is non-empty");
    for (l, g) in parts {
        loss += l;
        grads.axpy(T::one(), &g);
    }
    grads.scale(T::one() / T::lit(b as f64));
    Ok((loss / b as f64, grads))
}

/// Mean cross-entropy without gradients.
pub fn batch_loss<T: Real>(
    batch: &Tensor<T>,
    labels: &[usize],
    w: &ModelWeights<T>,
    cfg: &ModelConfig,
) -> Result<f64> {
    let b = check_inputs(batch, labels, cfg)?;
    let len = cfg.image_len();
    let losses: Vec<f64> = batch
        .data()
        .par_chunks_exact(len)
        .zip(labels.par_iter())
        .map(|(img, &label)| xent(&trace_image(img, w, cfg).logits, label).0)
        .collect();
    Ok(losses.iter().sum::<f64>() / b as f64)
}

/// Cross-entropy of a single logit row.
pub fn cross_entropy<T: Real>(logits: &[T], label: usize) -> f64 {
    xent(logits, label).0
}
