use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

use super::config::ModelConfig;

#[derive(Debug, Clone, PartialEq)]
pub struct LayerNormWeights<T = f32> {
    pub gamma: Tensor<T>,
    pub beta: Tensor<T>,
}

/// Affine map `y = x·weight + bias` with `weight: in×out`.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearWeights<T = f32> {
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BlockWeights<T = f32> {
    pub ln1: LayerNormWeights<T>,
    pub qkv: LinearWeights<T>,
    pub attn_out: LinearWeights<T>,
    pub ln2: LayerNormWeights<T>,
    pub fc1: LinearWeights<T>,
    pub fc2: LinearWeights<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingWeights<T = f32> {
    /// Convolution kernel, `d × channels × P × P`.
    pub conv_weight: Tensor<T>,
    pub conv_bias: Tensor<T>,
    pub cls: Tensor<T>,
    /// `(n+1) × d`
    pub pos: Tensor<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct HeadWeights<T = f32> {
    pub ln_gamma: Tensor<T>,
    pub ln_beta: Tensor<T>,
    /// `d × num_classes`
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

/// Full parameter set. Also used as the container for gradients and
/// momentum buffers, which share its layout.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelWeights<T = f32> {
    pub embedding: EmbeddingWeights<T>,
    pub blocks: Vec<BlockWeights<T>>,
    pub head: HeadWeights<T>,
}

/// How a parameter tensor is initialized.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamRole {
    /// Weight matrices and embeddings.
    Weight,
    Bias,
    Gamma,
    Beta,
}

/// Canonical `(name, shape, role)` list for a configuration, in storage order.
pub fn param_layout(cfg: &ModelConfig) -> Vec<(String, Vec<usize>, ParamRole)> {
    use ParamRole::*;
    let d = cfg.embed_dim;
    let f = cfg.ffn_dim;
    let mut out = vec![
        (
            "embedding.conv_weight".to_string(),
            vec![d, cfg.channels, cfg.patch_size, cfg.patch_size],
            Weight,
        ),
        ("embedding.conv_bias".to_string(), vec![d], Bias),
        ("embedding.cls".to_string(), vec![d], Weight),
        (
            "embedding.pos".to_string(),
            vec![cfg.num_tokens(), d],
            Weight,
        ),
    ];
    for i in 0..cfg.num_blocks {
        let p = |s: &str| format!("blocks.{i}.{s}");
        out.extend([
            (p("ln1.gamma"), vec![d], Gamma),
            (p("ln1.beta"), vec![d], Beta),
            (p("qkv.weight"), vec![d, 3 * d], Weight),
            (p("qkv.bias"), vec![3 * d], Bias),
            (p("attn_out.weight"), vec![d, d], Weight),
            (p("attn_out.bias"), vec![d], Bias),
            (p("ln2.gamma"), vec![d], Gamma),
            (p("ln2.beta"), vec![d], Beta),
            (p("fc1.weight"), vec![d, f], Weight),
            (p("fc1.bias"), vec![f], Bias),
            (p("fc2.weight"), vec![f, d], Weight),
            (p("fc2.bias"), vec![d], Bias),
        ]);
    }
    out.extend([
        ("head.ln_gamma".to_string(), vec![d], Gamma),
        ("head.ln_beta".to_string(), vec![d], Beta),
        ("head.weight".to_string(), vec![d, cfg.num_classes], Weight),
        ("head.bias".to_string(), vec![cfg.num_classes], Bias),
    ]);
    out
}

impl<T: Real> ModelWeights<T> {
    /// Builds weights by calling `make(name, shape, role)` for every tensor in
    /// canonical order.
    pub fn build(
        cfg: &ModelConfig,
        mut make: impl FnMut(&str, &[usize], ParamRole) -> Tensor<T>,
    ) -> Self {
        let layout = param_layout(cfg);
        let mut it = layout.iter().map(|(n, s, r)| make(n, s, *r));
        let mut next = || it.next().expect("layout covers every tensor");
        let embedding = EmbeddingWeights {
            conv_weight: next(),
            conv_bias: next(),
            cls: next(),
            pos: next(),
        };
        let blocks = (0..cfg.num_blocks)
            .map(|_| BlockWeights {
                ln1: LayerNormWeights {
                    gamma: next(),
                    beta: next(),
                },
                qkv: LinearWeights {
                    weight: next(),
                    bias: next(),
                },
                attn_out: LinearWeights {
                    weight: next(),
                    bias: next(),
                },
                ln2: LayerNormWeights {
                    gamma: next(),
                    beta: next(),
                },
                fc1: LinearWeights {
                    weight: next(),
                    bias: next(),
                },
                fc2: LinearWeights {
                    weight: next(),
                    bias: next(),
                },
            })
            .collect();
        let head = HeadWeights {
            ln_gamma: next(),
            ln_beta: next(),
            weight: next(),
            bias: next(),
        };
        Self {
            embedding,
            blocks,
            head,
        }
    }

    pub fn zeros(cfg: &ModelConfig) -> Self {
        Self::build(cfg, |_, shape, _| Tensor::zeros(shape))
    }

    /// All-zero weights except unit LayerNorm gains.
    pub fn zeros_with_unit_gamma(cfg: &ModelConfig) -> Self {
        Self::build(cfg, |_, shape, role| match role {
            ParamRole::Gamma => Tensor::full(shape, T::one()),
            _ => Tensor::zeros(shape),
        })
    }

    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        z.tensors_mut().into_iter().for_each(|t| t.fill(T::zero()));
        z
    }

    /// Tensors in canonical order.
    pub fn tensors(&self) -> Vec<&Tensor<T>> {
        let e = &self.embedding;
        let mut out = vec![&e.conv_weight, &e.conv_bias, &e.cls, &e.pos];
        for b in &self.blocks {
            out.extend([
                &b.ln1.gamma,
                &b.ln1.beta,
                &b.qkv.weight,
                &b.qkv.bias,
                &b.attn_out.weight,
                &b.attn_out.bias,
                &b.ln2.gamma,
                &b.ln2.beta,
                &b.fc1.weight,
                &b.fc1.bias,
                &b.fc2.weight,
                &b.fc2.bias,
            ]);
        }
        let h = &self.head;
        out.extend([&h.ln_gamma, &h.ln_beta, &h.weight, &h.bias]);
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor<T>> {
        let e = &mut self.embedding;
        let mut out = vec![&mut e.conv_weight, &mut e.conv_bias, &mut e.cls, &mut e.pos];
        for b in &mut self.blocks {
            out.extend([
                &mut b.ln1.gamma,
                &mut b.ln1.beta,
                &mut b.qkv.weight,
                &mut b.qkv.bias,
                &mut b.attn_out.weight,
                &mut b.attn_out.bias,
                &mut b.ln2.gamma,
                &mut b.ln2.beta,
                &mut b.fc1.weight,
                &mut b.fc1.bias,
                &mut b.fc2.weight,
                &mut b.fc2.bias,
            ]);
        }
        let h = &mut self.head;
        out.extend([&mut h.ln_gamma, &mut h.ln_beta, &mut h.weight, &mut h.bias]);
        out
    }

    /// `(canonical name, tensor)` pairs in storage order.
    pub fn named_tensors(&self, cfg: &ModelConfig) -> Vec<(String, &Tensor<T>)> {
        param_layout(cfg)
            .into_iter()
            .map(|(n, _, _)| n)
            .zip(self.tensors())
            .collect()
    }

    pub fn param_count(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    /// Checks every tensor shape against `cfg`.
    pub fn validate(&self, cfg: &ModelConfig) -> Result<()> {
        cfg.validate()?;
        if self.blocks.len() != cfg.num_blocks {
            return Err(Error::Dimension(format!(
                "weights have {} blocks, config expects {}",
                self.blocks.len(),
                cfg.num_blocks
            )));
        }
        for ((name, shape, _), t) in param_layout(cfg).iter().zip(self.tensors()) {
            if t.shape() != shape.as_slice() {
                return Err(Error::Dimension(format!(
                    "{name}: expected shape {shape:?}, found {:?}",
                    t.shape()
                )));
            }
        }
        Ok(())
    }

    pub fn cast<U: Real>(&self) -> ModelWeights<U> {
        let ln = |l: &LayerNormWeights<T>| LayerNormWeights {
            gamma: l.gamma.cast(),
            beta: l.beta.cast(),
        };
        let lin = |l: &LinearWeights<T>| LinearWeights {
            weight: l.weight.cast(),
            bias: l.bias.cast(),
        };
        let e = &self.embedding;
        let h = &self.head;
        ModelWeights {
            embedding: EmbeddingWeights {
                conv_weight: e.conv_weight.cast(),
                conv_bias: e.conv_bias.cast(),
                cls: e.cls.cast(),
                pos: e.pos.cast(),
            },
            blocks: self
                .blocks
                .iter()
                .map(|b| BlockWeights {
                    ln1: ln(&b.ln1),
                    qkv: lin(&b.qkv),
                    attn_out: lin(&b.attn_out),
                    ln2: ln(&b.ln2),
                    fc1: lin(&b.fc1),
                    fc2: lin(&b.fc2),
                })
                .collect(),
            head: HeadWeights {
                ln_gamma: h.ln_gamma.cast(),
                ln_beta: h.ln_beta.cast(),
                weight: h.weight.cast(),
                bias: h.bias.cast(),
            },
        }
    }

    /// `self += factor · other`, tensor by tensor.
    pub fn axpy(&mut self, factor: T, other: &ModelWeights<T>) {
        for (a, b) in self.tensors_mut().into_iter().zip(other.tensors()) {
            for (x, &y) in a.data_mut().iter_mut().zip(b.data()) {
                *x += factor * y;
            }
        }
    }

    pub fn scale(&mut self, factor: T) {
        self.tensors_mut().into_iter().for_each(|t| t.scale(factor));
    }

    pub fn global_norm(&self) -> f64 {
        crate::tensor::global_norm(self.tensors())
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.is_finite())
    }
}
