use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::config::TunerConfig;
use crate::error::{Error, Result};
use crate::tensor::Mat;

#[derive(Debug, Clone, PartialEq)]
pub struct AttentionParams {
    pub wq: Mat,
    pub bq: Mat,
    pub wk: Mat,
    pub bk: Mat,
    pub wv: Mat,
    pub bv: Mat,
    pub wo: Mat,
    pub bo: Mat,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerNormParams {
    pub gain: Mat,
    pub bias: Mat,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeedForwardParams {
    pub w_in: Mat,
    pub b_in: Mat,
    pub w_out: Mat,
    pub b_out: Mat,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BlockParams {
    pub self_attn: AttentionParams,
    pub norm_self: LayerNormParams,
    pub cross_attn: Option<AttentionParams>,
    pub norm_cross: Option<LayerNormParams>,
    pub ffn: FeedForwardParams,
    pub norm_ffn: LayerNormParams,
}

/// Per-token `relu(h·w1 + b1)·w2 + b2`, shared by both backbone streams.
#[derive(Debug, Clone, PartialEq)]
pub struct ReductionParams {
    pub w1: Mat,
    pub b1: Mat,
    pub w2: Mat,
    pub b2: Mat,
}

/// Every trainable tensor of the tuner. Gradients use the same type.
#[derive(Debug, Clone, PartialEq)]
pub struct TunerParams {
    pub d_llm: usize,
    pub reduction: Option<ReductionParams>,
    pub blocks: Vec<BlockParams>,
}

struct Init {
    rng: ChaCha8Rng,
}

impl Init {
    fn xavier(&mut self, fan_in: usize, fan_out: usize) -> Mat {
        let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let data = (0..fan_in * fan_out)
            .map(|_| self.rng.random_range(-limit..limit) as f32 as f64)
            .collect();
        Mat::from_vec(fan_in, fan_out, data)
    }

    fn attention(&mut self, d: usize) -> AttentionParams {
        AttentionParams {
            wq: self.xavier(d, d),
            bq: Mat::zeros(1, d),
            wk: self.xavier(d, d),
            bk: Mat::zeros(1, d),
            wv: self.xavier(d, d),
            bv: Mat::zeros(1, d),
            wo: self.xavier(d, d),
            bo: Mat::zeros(1, d),
        }
    }
}

fn norm(d: usize) -> LayerNormParams {
    LayerNormParams {
        gain: Mat::from_vec(1, d, vec![1.0; d]),
        bias: Mat::zeros(1, d),
    }
}

impl TunerParams {
    /// Xavier-uniform projections, zero biases, unit layer-norm gains. All
    /// values are representable in `f32`.
    pub fn init(config: &TunerConfig, d_llm: usize) -> Result<Self> {
        config.validate(d_llm)?;
        let mut init = Init {
            rng: ChaCha8Rng::seed_from_u64(config.seed),
        };
        let d = config.d_model;
        let f = config.ffn_dim();
        let reduction = config.reduction.map(|r| ReductionParams {
            w1: init.xavier(d_llm, r.hidden_dim),
            b1: Mat::zeros(1, r.hidden_dim),
            w2: init.xavier(r.hidden_dim, r.out_dim),
            b2: Mat::zeros(1, r.out_dim),
        });
        let blocks = (0..config.n_blocks)
            .map(|_| {
                let self_attn = init.attention(d);
                let cross_attn = config.cross_attention.then(|| init.attention(d));
                BlockParams {
                    self_attn,
                    norm_self: norm(d),
                    norm_cross: config.cross_attention.then(|| norm(d)),
                    cross_attn,
                    ffn: FeedForwardParams {
                        w_in: init.xavier(d, f),
                        b_in: Mat::zeros(1, f),
                        w_out: init.xavier(f, d),
                        b_out: Mat::zeros(1, d),
                    },
                    norm_ffn: norm(d),
                }
            })
            .collect();
        Ok(Self {
            d_llm,
            reduction,
            blocks,
        })
    }

    /// Same structure, all zeros.
    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        z.for_each_mut(|_, m| m.fill(0.0));
        z
    }

    /// Visits every tensor in a fixed order with a stable dotted name.
    pub fn for_each(&self, mut f: impl FnMut(&str, &Mat)) {
        self.walk(&mut |name, m| f(name, m));
    }

    pub fn for_each_mut(&mut self, mut f: impl FnMut(&str, &mut Mat)) {
        self.walk_mut(&mut |name, m| f(name, m));
    }

    /// Borrowed tensors in visiting order.
    pub fn tensors(&self) -> Vec<(String, &Mat)> {
        let mut out = Vec::new();
        self.walk(&mut |n, m| out.push((n.to_string(), m)));
        out
    }

    fn walk<'a>(&'a self, f: &mut dyn FnMut(&str, &'a Mat)) {
        if let Some(r) = &self.reduction {
            f("reduction.w1", &r.w1);
            f("reduction.b1", &r.b1);
            f("reduction.w2", &r.w2);
            f("reduction.b2", &r.b2);
        }
        for (i, b) in self.blocks.iter().enumerate() {
            let mut attn = |prefix: &str, a: &'a AttentionParams| {
                for (n, m) in [
                    ("wq", &a.wq),
                    ("bq", &a.bq),
                    ("wk", &a.wk),
                    ("bk", &a.bk),
                    ("wv", &a.wv),
                    ("bv", &a.bv),
                    ("wo", &a.wo),
                    ("bo", &a.bo),
                ] {
                    f(&format!("blocks.{i}.{prefix}.{n}"), m);
                }
            };
            attn("self_attn", &b.self_attn);
            if let Some(c) = &b.cross_attn {
                attn("cross_attn", c);
            }
            f(&format!("blocks.{i}.norm_self.gain"), &b.norm_self.gain);
            f(&format!("blocks.{i}.norm_self.bias"), &b.norm_self.bias);
            if let Some(n) = &b.norm_cross {
                f(&format!("blocks.{i}.norm_cross.gain"), &n.gain);
                f(&format!("blocks.{i}.norm_cross.bias"), &n.bias);
            }
            f(&format!("blocks.{i}.ffn.w_in"), &b.ffn.w_in);
            f(&format!("blocks.{i}.ffn.b_in"), &b.ffn.b_in);
            f(&format!("blocks.{i}.ffn.w_out"), &b.ffn.w_out);
            f(&format!("blocks.{i}.ffn.b_out"), &b.ffn.b_out);
            f(&format!("blocks.{i}.norm_ffn.gain"), &b.norm_ffn.gain);
            f(&format!("blocks.{i}.norm_ffn.bias"), &b.norm_ffn.bias);
        }
    }

    fn walk_mut(&mut self, f: &mut dyn FnMut(&str, &mut Mat)) {
        if let Some(r) = &mut self.reduction {
            f("reduction.w1", &mut r.w1);
            f("reduction.b1", &mut r.b1);
            f("reduction.w2", &mut r.w2);
            f("reduction.b2", &mut r.b2);
        }
        for (i, b) in self.blocks.iter_mut().enumerate() {
            let mut attn = |prefix: &str, a: &mut AttentionParams| {
                for (n, m) in [
                    ("wq", &mut a.wq),
                    ("bq", &mut a.bq),
                    ("wk", &mut a.wk),
                    ("bk", &mut a.bk),
                    ("wv", &mut a.wv),
                    ("bv", &mut a.bv),
                    ("wo", &mut a.wo),
                    ("bo", &mut a.bo),
                ] {
                    f(&format!("blocks.{i}.{prefix}.{n}"), m);
                }
            };
            attn("self_attn", &mut b.self_attn);
            if let Some(c) = &mut b.cross_attn {
                attn("cross_attn", c);
            }
            f(&format!("blocks.{i}.norm_self.gain"), &mut b.norm_self.gain);
            f(&format!("blocks.{i}.norm_self.bias"), &mut b.norm_self.bias);
            if let Some(n) = &mut b.norm_cross {
                f(&format!("blocks.{i}.norm_cross.gain"), &mut n.gain);
                f(&format!("blocks.{i}.norm_cross.bias"), &mut n.bias);
            }
            f(&format!("blocks.{i}.ffn.w_in"), &mut b.ffn.w_in);
            f(&format!("blocks.{i}.ffn.b_in"), &mut b.ffn.b_in);
            f(&format!("blocks.{i}.ffn.w_out"), &mut b.ffn.w_out);
            f(&format!("blocks.{i}.ffn.b_out"), &mut b.ffn.b_out);
            f(&format!("blocks.{i}.norm_ffn.gain"), &mut b.norm_ffn.gain);
            f(&format!("blocks.{i}.norm_ffn.bias"), &mut b.norm_ffn.bias);
        }
    }

    /// `(name, rows, cols)` of every tensor.
    pub fn shapes(&self) -> Vec<(String, usize, usize)> {
        let mut out = Vec::new();
        self.for_each(|n, m| out.push((n.to_string(), m.rows(), m.cols())));
        out
    }

    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::new();
        self.for_each(|_, m| out.extend_from_slice(m.as_slice()));
        out
    }

    pub fn num_values(&self) -> usize {
        let mut n = 0;
        self.for_each(|_, m| n += m.len());
        n
    }

    /// Checks that `other` has exactly the same tensor names and shapes.
    pub fn check_same_layout(&self, other: &TunerParams) -> Result<()> {
        if self.shapes() != other.shapes() {
            return Err(Error::Data("tensor layouts differ".into()));
        }
        Ok(())
    }

    pub fn round_to_f32(&mut self) {
        self.for_each_mut(|_, m| m.round_to_f32());
    }

    /// Structural check against a config, used before forward/backward.
    pub fn matches(&self, config: &TunerConfig) -> bool {
        let d = config.d_model;
        let reduction_ok = match (&self.reduction, config.reduction) {
            (None, None) => true,
            (Some(p), Some(r)) => {
                p.w1.shape() == (self.d_llm, r.hidden_dim) && p.w2.shape() == (r.hidden_dim, r.out_dim)
            }
            _ => false,
        };
        reduction_ok
            && self.blocks.len() == config.n_blocks
            && self.blocks.iter().all(|b| {
                b.self_attn.wq.shape() == (d, d)
                    && b.cross_attn.is_some() == config.cross_attention
                    && b.ffn.w_in.shape() == (d, config.ffn_dim())
            })
    }
}
