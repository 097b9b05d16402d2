//! Forward pass with a recorded tape, and the exact analytic backward pass.
//!
//! Block layout (post-norm):
//!
//! ```text
//! h1 = LN(x  + SelfAttn(x))          queries, keys, values from x
//! h2 = LN(h1 + CrossAttn(h1, M))     queries from h1, keys/values from M
//! h3 = LN(h2 + FFN(h2))
//! ```
//!
//! `x` for the first block is the self-side backbone stream; later blocks
//! read the previous block output. `M` is the other backbone stream at
//! every block. Both streams pass through the shared reduction MLP first
//! when one is configured.

use super::config::TunerConfig;
use super::params::{AttentionParams, FeedForwardParams, ReductionParams, TunerParams};
use crate::error::{Error, Result};
use crate::ops::{affine, gelu, gelu_grad, layer_norm, layer_norm_backward, masked_softmax, LayerNormCache};
use crate::space_analysis::RepVector;
use crate::tensor::Mat;

#[derive(Debug, Clone)]
pub struct AttentionCache {
    q_in: Mat,
    kv_in: Mat,
    q: Mat,
    k: Mat,
    v: Mat,
    /// One `n_q × n_kv` probability matrix per head.
    probs: Vec<Mat>,
    context: Mat,
}

impl AttentionCache {
    pub fn probs(&self) -> &[Mat] {
        &self.probs
    }
}

#[derive(Debug, Clone)]
struct ReductionCache {
    input: Mat,
    pre: Mat,
    act: Mat,
}

#[derive(Debug, Clone)]
struct FeedForwardCache {
    input: Mat,
    pre: Mat,
    act: Mat,
}

#[derive(Debug, Clone)]
pub struct BlockCache {
    self_attn: AttentionCache,
    norm_self: LayerNormCache,
    cross: Option<(AttentionCache, LayerNormCache)>,
    ffn: FeedForwardCache,
    norm_ffn: LayerNormCache,
}

impl BlockCache {
    pub fn self_attention(&self) -> &AttentionCache {
        &self.self_attn
    }

    pub fn cross_attention(&self) -> Option<&AttentionCache> {
        self.cross.as_ref().map(|(c, _)| c)
    }
}

/// Everything the backward pass needs from a forward pass.
#[derive(Debug, Clone)]
pub struct ForwardTape {
    config: TunerConfig,
    d_llm: usize,
    mask: Vec<bool>,
    unmasked: usize,
    reduction: Option<(ReductionCache, ReductionCache)>,
    blocks: Vec<BlockCache>,
    output: Mat,
}

impl ForwardTape {
    pub fn output(&self) -> &Mat {
        &self.output
    }

    pub fn mask(&self) -> &[bool] {
        &self.mask
    }

    pub fn blocks(&self) -> &[BlockCache] {
        &self.blocks
    }
}

/// Upstream gradient for [`tuner_backward`].
#[derive(Debug, Clone)]
pub enum OutputGrad {
    /// Gradient with respect to every row of the block-stack output.
    Tokens(Mat),
    /// Gradient with respect to the mean-pooled vector.
    Pooled(Vec<f64>),
}

fn check_finite(m: &Mat, location: impl FnOnce() -> String) -> Result<()> {
    if m.all_finite() {
        Ok(())
    } else {
        Err(Error::numeric(location(), "non-finite activation"))
    }
}

fn attention_forward(
    q_in: &Mat,
    kv_in: &Mat,
    key_mask: &[bool],
    p: &AttentionParams,
    n_heads: usize,
) -> Result<(Mat, AttentionCache)> {
    let d = q_in.cols();
    let n_q = q_in.rows();
    let n_kv = kv_in.rows();
    if key_mask.len() != n_kv {
        return Err(Error::Data(format!(
            "key mask has {} entries for {n_kv} keys",
            key_mask.len()
        )));
    }
    if !key_mask.iter().any(|&m| m) {
        return Err(Error::Data("attention needs at least one unmasked key".into()));
    }
    let dk = d / n_heads;
    let scale = 1.0 / (dk as f64).sqrt();
    let q = affine(q_in, &p.wq, &p.bq);
    let k = affine(kv_in, &p.wk, &p.bk);
    let v = affine(kv_in, &p.wv, &p.bv);
    let mut context = Mat::zeros(n_q, d);
    let mut probs = Vec::with_capacity(n_heads);
    for h in 0..n_heads {
        let qh = q.cols_slice(h * dk, dk);
        let kh = k.cols_slice(h * dk, dk);
        let vh = v.cols_slice(h * dk, dk);
        let mut s = qh.matmul_t(&kh);
        s.scale(scale);
        for i in 0..n_q {
            masked_softmax(s.row_mut(i), |j| key_mask[j]);
        }
        context.set_cols(h * dk, &s.matmul(&vh));
        probs.push(s);
    }
    let out = affine(&context, &p.wo, &p.bo);
    Ok((
        out,
        AttentionCache {
            q_in: q_in.clone(),
            kv_in: kv_in.clone(),
            q,
            k,
            v,
            probs,
            context,
        },
    ))
}

/// Returns `(d_q_in, d_kv_in)` and accumulates parameter gradients into `g`.
fn attention_backward(
    dout: &Mat,
    p: &AttentionParams,
    c: &AttentionCache,
    g: &mut AttentionParams,
) -> (Mat, Mat) {
    let d = dout.cols();
    let n_heads = c.probs.len();
    let dk = d / n_heads;
    let scale = 1.0 / (dk as f64).sqrt();

    g.wo.add_assign(&c.context.t_matmul(dout));
    g.bo.add_assign(&dout.col_sums());
    let dcontext = dout.matmul_t(&p.wo);

    let mut dq = Mat::zeros(c.q.rows(), d);
    let mut dk_full = Mat::zeros(c.k.rows(), d);
    let mut dv = Mat::zeros(c.v.rows(), d);
    for (h, probs) in c.probs.iter().enumerate() {
        let dctx_h = dcontext.cols_slice(h * dk, dk);
        let vh = c.v.cols_slice(h * dk, dk);
        let qh = c.q.cols_slice(h * dk, dk);
        let kh = c.k.cols_slice(h * dk, dk);
        dv.set_cols(h * dk, &probs.t_matmul(&dctx_h));
        let dprobs = dctx_h.matmul_t(&vh);
        let mut dscores = Mat::zeros(probs.rows(), probs.cols());
        for i in 0..probs.rows() {
            let pr = probs.row(i);
            let dpr = dprobs.row(i);
            let inner: f64 = pr.iter().zip(dpr).map(|(a, b)| a * b).sum();
            for (j, o) in dscores.row_mut(i).iter_mut().enumerate() {
                *o = pr[j] * (dpr[j] - inner) * scale;
            }
        }
        dq.set_cols(h * dk, &dscores.matmul(&kh));
        dk_full.set_cols(h * dk, &dscores.t_matmul(&qh));
    }

    g.wq.add_assign(&c.q_in.t_matmul(&dq));
    g.bq.add_assign(&dq.col_sums());
    g.wk.add_assign(&c.kv_in.t_matmul(&dk_full));
    g.bk.add_assign(&dk_full.col_sums());
    g.wv.add_assign(&c.kv_in.t_matmul(&dv));
    g.bv.add_assign(&dv.col_sums());

    let dq_in = dq.matmul_t(&p.wq);
    let mut dkv_in = dk_full.matmul_t(&p.wk);
    dkv_in.add_assign(&dv.matmul_t(&p.wv));
    (dq_in, dkv_in)
}

fn reduction_forward(x: &Mat, p: &ReductionParams) -> (Mat, ReductionCache) {
    let pre = affine(x, &p.w1, &p.b1);
    let act = pre.map(|v| v.max(0.0));
    let out = affine(&act, &p.w2, &p.b2);
    (
        out,
        ReductionCache {
            input: x.clone(),
            pre,
            act,
        },
    )
}

fn reduction_backward(dout: &Mat, p: &ReductionParams, c: &ReductionCache, g: &mut ReductionParams) {
    g.w2.add_assign(&c.act.t_matmul(dout));
    g.b2.add_assign(&dout.col_sums());
    let mut dact = dout.matmul_t(&p.w2);
    for (d, &z) in dact.as_mut_slice().iter_mut().zip(c.pre.as_slice()) {
        if z <= 0.0 {
            *d = 0.0;
        }
    }
    g.w1.add_assign(&c.input.t_matmul(&dact));
    g.b1.add_assign(&dact.col_sums());
}

fn ffn_forward(x: &Mat, p: &FeedForwardParams) -> (Mat, FeedForwardCache) {
    let pre = affine(x, &p.w_in, &p.b_in);
    let act = pre.map(gelu);
    let out = affine(&act, &p.w_out, &p.b_out);
    (
        out,
        FeedForwardCache {
            input: x.clone(),
            pre,
            act,
        },
    )
}

fn ffn_backward(dout: &Mat, p: &FeedForwardParams, c: &FeedForwardCache, g: &mut FeedForwardParams) -> Mat {
    g.w_out.add_assign(&c.act.t_matmul(dout));
    g.b_out.add_assign(&dout.col_sums());
    let mut dpre = dout.matmul_t(&p.w_out);
    for (d, &z) in dpre.as_mut_slice().iter_mut().zip(c.pre.as_slice()) {
        *d *= gelu_grad(z);
    }
    g.w_in.add_assign(&c.input.t_matmul(&dpre));
    g.b_in.add_assign(&dpre.col_sums());
    dpre.matmul_t(&p.w_in)
}

/// Applies the reduction MLP to every token of `states`.
pub fn reduce_dims(states: &Mat, params: &TunerParams) -> Result<Mat> {
    let r = params
        .reduction
        .as_ref()
        .ok_or_else(|| Error::Config("no reduction MLP configured".into()))?;
    if states.cols() != r.w1.rows() {
        return Err(Error::Data(format!(
            "states have width {}, reduction expects {}",
            states.cols(),
            r.w1.rows()
        )));
    }
    Ok(reduction_forward(states, r).0)
}

/// Bidirectional multi-head attention of `x` over itself.
pub fn self_bi_attention(x: &Mat, mask: &[bool], p: &AttentionParams, n_heads: usize) -> Result<Mat> {
    check_heads(x.cols(), n_heads)?;
    Ok(attention_forward(x, x, mask, p, n_heads)?.0)
}

/// Queries from `s`, keys and values from `m`; `m_mask` masks `m`'s rows.
pub fn cross_bi_attention(
    s: &Mat,
    m: &Mat,
    m_mask: &[bool],
    p: &AttentionParams,
    n_heads: usize,
) -> Result<Mat> {
    check_heads(s.cols(), n_heads)?;
    if s.cols() != m.cols() {
        return Err(Error::Data("cross attention streams differ in width".into()));
    }
    Ok(attention_forward(s, m, m_mask, p, n_heads)?.0)
}

fn check_heads(d: usize, n_heads: usize) -> Result<()> {
    if n_heads == 0 || !d.is_multiple_of(n_heads) {
        return Err(Error::Config(format!("width {d} not divisible by {n_heads} heads")));
    }
    Ok(())
}

fn check_inputs(h_a: &Mat, h_u: &Mat, mask: &[bool], params: &TunerParams, config: &TunerConfig) -> Result<()> {
    config.validate(params.d_llm)?;
    if !params.matches(config) {
        return Err(Error::Data("parameters do not match the tuner config".into()));
    }
    if h_a.shape() != h_u.shape() {
        return Err(Error::Data(format!(
            "align and uniform states differ in shape: {:?} vs {:?}",
            h_a.shape(),
            h_u.shape()
        )));
    }
    if h_a.cols() != params.d_llm {
        return Err(Error::Data(format!(
            "states have width {}, tuner expects {}",
            h_a.cols(),
            params.d_llm
        )));
    }
    if mask.len() != h_a.rows() || h_a.rows() == 0 {
        return Err(Error::Data(format!(
            "mask has {} entries for {} tokens",
            mask.len(),
            h_a.rows()
        )));
    }
    if !mask.iter().any(|&m| m) {
        return Err(Error::Data("every token is masked".into()));
    }
    Ok(())
}

/// Runs the block stack and records the tape.
pub fn tuner_forward(
    h_a: &Mat,
    h_u: &Mat,
    mask: &[bool],
    params: &TunerParams,
    config: &TunerConfig,
) -> Result<(Mat, ForwardTape)> {
    check_inputs(h_a, h_u, mask, params, config)?;
    let heads = config.n_heads;
    let eps = config.layer_norm_eps;
    let (self_raw, cross_raw) = match config.connection_mode {
        super::ConnectionMode::AToU => (h_a, h_u),
        super::ConnectionMode::UToA => (h_u, h_a),
    };
    let (self_src, cross_src, reduction) = match &params.reduction {
        Some(r) => {
            let (s, sc) = reduction_forward(self_raw, r);
            let (c, cc) = reduction_forward(cross_raw, r);
            check_finite(&s, || "reduction MLP".into())?;
            check_finite(&c, || "reduction MLP".into())?;
            (s, c, Some((sc, cc)))
        }
        None => (self_raw.clone(), cross_raw.clone(), None),
    };

    let mut x = self_src.clone();
    let mut blocks = Vec::with_capacity(params.blocks.len());
    for (i, bp) in params.blocks.iter().enumerate() {
        let kv = if config.reread_self_source && i > 0 {
            &self_src
        } else {
            &x
        };
        let (a, self_cache) = attention_forward(&x, kv, mask, &bp.self_attn, heads)?;
        check_finite(&a, || format!("block {i} self attention"))?;
        let (h1, norm_self) = layer_norm(&x.add(&a), &bp.norm_self.gain, &bp.norm_self.bias, eps);

        let (h2, cross) = match (&bp.cross_attn, &bp.norm_cross) {
            (Some(cp), Some(np)) => {
                let (c, cc) = attention_forward(&h1, &cross_src, mask, cp, heads)?;
                check_finite(&c, || format!("block {i} cross attention"))?;
                let (h2, nc) = layer_norm(&h1.add(&c), &np.gain, &np.bias, eps);
                (h2, Some((cc, nc)))
            }
            _ => (h1, None),
        };

        let (f, ffn) = ffn_forward(&h2, &bp.ffn);
        check_finite(&f, || format!("block {i} feed-forward"))?;
        let (h3, norm_ffn) = layer_norm(&h2.add(&f), &bp.norm_ffn.gain, &bp.norm_ffn.bias, eps);
        check_finite(&h3, || format!("block {i} output norm"))?;
        blocks.push(BlockCache {
            self_attn: self_cache,
            norm_self,
            cross,
            ffn,
            norm_ffn,
        });
        x = h3;
    }
    let tape = ForwardTape {
        config: config.clone(),
        d_llm: params.d_llm,
        mask: mask.to_vec(),
        unmasked: mask.iter().filter(|&&m| m).count(),
        reduction,
        blocks,
        output: x.clone(),
    };
    Ok((x, tape))
}

/// Mean over unmasked rows of `m`.
pub fn masked_mean(m: &Mat, mask: &[bool]) -> Vec<f64> {
    let mut sum = vec![0.0; m.cols()];
    let mut count = 0usize;
    for (i, &keep) in mask.iter().enumerate() {
        if keep {
            count += 1;
            for (s, &v) in sum.iter_mut().zip(m.row(i)) {
                *s += v;
            }
        }
    }
    sum.into_iter().map(|s| s / count as f64).collect()
}

/// Dense (unnormalized) representation: mean pooling of the tuner output.
pub fn encode(
    h_a: &Mat,
    h_u: &Mat,
    mask: &[bool],
    params: &TunerParams,
    config: &TunerConfig,
) -> Result<RepVector> {
    let (out, _) = tuner_forward(h_a, h_u, mask, params, config)?;
    Ok(RepVector::raw(masked_mean(&out, mask)))
}

/// Pooled vector plus the tape for a later backward pass.
pub fn encode_with_tape(
    h_a: &Mat,
    h_u: &Mat,
    mask: &[bool],
    params: &TunerParams,
    config: &TunerConfig,
) -> Result<(Vec<f64>, ForwardTape)> {
    let (out, tape) = tuner_forward(h_a, h_u, mask, params, config)?;
    Ok((masked_mean(&out, mask), tape))
}

/// Exact gradients of every tuner parameter. Gradients with respect to the
/// backbone states are never produced.
pub fn tuner_backward(params: &TunerParams, tape: &ForwardTape, grad: &OutputGrad) -> Result<TunerParams> {
    let config = &tape.config;
    if params.d_llm != tape.d_llm || !params.matches(config) {
        return Err(Error::Data("tape was recorded with a different parameter layout".into()));
    }
    let (n, d) = tape.output.shape();
    let mut dx = match grad {
        OutputGrad::Tokens(m) => {
            if m.shape() != (n, d) {
                return Err(Error::Data(format!(
                    "output gradient shape {:?}, expected {:?}",
                    m.shape(),
                    (n, d)
                )));
            }
            m.clone()
        }
        OutputGrad::Pooled(g) => {
            if g.len() != d {
                return Err(Error::Data(format!(
                    "pooled gradient has {} entries, expected {d}",
                    g.len()
                )));
            }
            let mut m = Mat::zeros(n, d);
            let inv = 1.0 / tape.unmasked as f64;
            for (i, &keep) in tape.mask.iter().enumerate() {
                if keep {
                    for (o, &v) in m.row_mut(i).iter_mut().zip(g) {
                        *o = v * inv;
                    }
                }
            }
            m
        }
    };

    let mut grads = params.zeros_like();
    let mut d_self_src = Mat::zeros(n, d);
    let mut d_cross_src = Mat::zeros(n, d);
    for i in (0..params.blocks.len()).rev() {
        let bp = &params.blocks[i];
        let bc = &tape.blocks[i];
        let bg = &mut grads.blocks[i];

        let (dsum3, dgain, dbias) = layer_norm_backward(&dx, &bp.norm_ffn.gain, &bc.norm_ffn);
        bg.norm_ffn.gain.add_assign(&dgain);
        bg.norm_ffn.bias.add_assign(&dbias);
        let mut dh2 = dsum3.clone();
        dh2.add_assign(&ffn_backward(&dsum3, &bp.ffn, &bc.ffn, &mut bg.ffn));

        let dh1 = match (&bp.cross_attn, &bp.norm_cross, &bc.cross) {
            (Some(cp), Some(np), Some((cc, nc))) => {
                let (dsum2, dgain, dbias) = layer_norm_backward(&dh2, &np.gain, nc);
                let ng = bg.norm_cross.as_mut().expect("gradient layout mirrors params");
                ng.gain.add_assign(&dgain);
                ng.bias.add_assign(&dbias);
                let cg = bg.cross_attn.as_mut().expect("gradient layout mirrors params");
                let (dq_in, dkv_in) = attention_backward(&dsum2, cp, cc, cg);
                d_cross_src.add_assign(&dkv_in);
                let mut dh1 = dsum2;
                dh1.add_assign(&dq_in);
                dh1
            }
            _ => dh2,
        };

        let (dsum1, dgain, dbias) = layer_norm_backward(&dh1, &bp.norm_self.gain, &bc.norm_self);
        bg.norm_self.gain.add_assign(&dgain);
        bg.norm_self.bias.add_assign(&dbias);
        let (dq_in, dkv_in) = attention_backward(&dsum1, &bp.self_attn, &bc.self_attn, &mut bg.self_attn);
        let mut dprev = dsum1;
        dprev.add_assign(&dq_in);
        if config.reread_self_source && i > 0 {
            d_self_src.add_assign(&dkv_in);
        } else {
            dprev.add_assign(&dkv_in);
        }
        dx = dprev;
    }
    d_self_src.add_assign(&dx);

    if let (Some(rp), Some((sc, cc)), Some(rg)) = (&params.reduction, &tape.reduction, grads.reduction.as_mut()) {
        reduction_backward(&d_self_src, rp, sc, rg);
        reduction_backward(&d_cross_src, rp, cc, rg);
    }
    Ok(grads)
}
