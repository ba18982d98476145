//! Task-adaptive decoder: learnable queries select features from the compressed
//! backbone map through cross-attention.

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensorcore::{Bound, Graph, ParamId, ParamStore, Scalar, Tensor, Var};

use super::{ForwardTrace, ModelConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AttentionKind {
    SelfAttention,
    CrossAttention,
}

/// Attention weights of one sublayer, one `queries×keys` matrix per head
/// (per sample, then head, for batched passes).
#[derive(Clone, Debug)]
pub struct AttentionRecord<T> {
    pub block: usize,
    pub kind: AttentionKind,
    pub heads: Vec<Tensor<T>>,
}

#[derive(Clone, Copy, Debug)]
pub struct AttentionParams {
    pub wq: ParamId,
    pub bq: ParamId,
    pub wk: ParamId,
    pub bk: ParamId,
    pub wv: ParamId,
    pub bv: ParamId,
    pub wo: ParamId,
    pub bo: ParamId,
}

impl AttentionParams {
    fn init<T: Scalar>(store: &mut ParamStore<T>, prefix: &str, d: usize, rng: &mut impl Rng) -> Self {
        let mut w = |name: &str| store.uniform(format!("{prefix}.{name}"), d, d, d, rng);
        let (wq, wk, wv, wo) = (w("wq"), w("wk"), w("wv"), w("wo"));
        let mut b = |name: &str| store.zeros(format!("{prefix}.{name}"), 1, d);
        Self {
            wq,
            bq: b("bq"),
            wk,
            bk: b("bk"),
            wv,
            bv: b("bv"),
            wo,
            bo: b("bo"),
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct NormParams {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl NormParams {
    fn init<T: Scalar>(store: &mut ParamStore<T>, prefix: &str, d: usize) -> Self {
        Self {
            gain: store.ones(format!("{prefix}.gain"), 1, d),
            bias: store.zeros(format!("{prefix}.bias"), 1, d),
        }
    }

    fn apply<T: Scalar>(&self, g: &mut Graph<T>, p: &Bound, x: Var, eps: T) -> Result<Var> {
        g.layer_norm(x, p.var(self.gain), p.var(self.bias), eps)
    }
}

#[derive(Clone, Copy, Debug)]
pub struct FfnParams {
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
}

/// One decoder block. The first block has no self-attention sublayer.
#[derive(Clone, Copy, Debug)]
pub struct DecoderBlockParams {
    pub self_attn: Option<(AttentionParams, NormParams)>,
    pub cross_attn: AttentionParams,
    pub cross_norm: NormParams,
    pub ffn: FfnParams,
    pub ffn_norm: NormParams,
}

impl DecoderBlockParams {
    pub(crate) fn init<T: Scalar>(
        store: &mut ParamStore<T>,
        index: usize,
        cfg: &ModelConfig,
        rng: &mut impl Rng,
    ) -> Self {
        let d = cfg.d_model;
        let prefix = format!("decoder.{index}");
        let self_attn = (index > 0).then(|| {
            (
                AttentionParams::init(store, &format!("{prefix}.self_attn"), d, rng),
                NormParams::init(store, &format!("{prefix}.self_norm"), d),
            )
        });
        let cross_attn = AttentionParams::init(store, &format!("{prefix}.cross_attn"), d, rng);
        let cross_norm = NormParams::init(store, &format!("{prefix}.cross_norm"), d);
        let h = cfg.ffn_hidden;
        let ffn = FfnParams {
            w1: store.uniform(format!("{prefix}.ffn.w1"), d, h, d, rng),
            b1: store.zeros(format!("{prefix}.ffn.b1"), 1, h),
            w2: store.uniform(format!("{prefix}.ffn.w2"), h, d, h, rng),
            b2: store.zeros(format!("{prefix}.ffn.b2"), 1, d),
        };
        let ffn_norm = NormParams::init(store, &format!("{prefix}.ffn_norm"), d);
        Self {
            self_attn,
            cross_attn,
            cross_norm,
            ffn,
            ffn_norm,
        }
    }
}

/// Scaled dot-product multi-head attention over `batch` stacked samples.
///
/// `record` receives one `queries×keys` matrix per sample and head, sample-major.
#[allow(clippy::too_many_arguments)]
pub fn multi_head_attention<T: Scalar>(
    g: &mut Graph<T>,
    p: &Bound,
    attn: &AttentionParams,
    n_heads: usize,
    batch: usize,
    query: Var,
    key: Var,
    value: Var,
    record: Option<&mut Vec<Tensor<T>>>,
) -> Result<Var> {
    let d = g.shape(query)[1];
    if g.shape(key)[1] != d || g.shape(value) != g.shape(key) {
        return Err(Error::shape("attention", &g.shape(query), &g.shape(key)));
    }
    let q = g.pointwise_conv1d(query, p.var(attn.wq), p.var(attn.bq))?;
    let k = g.pointwise_conv1d(key, p.var(attn.wk), p.var(attn.bk))?;
    let v = g.pointwise_conv1d(value, p.var(attn.wv), p.var(attn.bv))?;
    let scale = T::one() / T::lit((d / n_heads) as f64).sqrt();
    let merged = g.attention(q, k, v, batch, n_heads, scale)?;
    if let Some(r) = record {
        let probs = g.attention_probs(merged).expect("attention node");
        let nq = g.shape(query)[0] / batch;
        let nk = probs.cols();
        *r = (0..batch * n_heads)
            .map(|i| Tensor::new(nq, nk, probs.data()[i * nq * nk..(i + 1) * nq * nk].to_vec()))
            .collect::<Result<_>>()?;
    }
    g.pointwise_conv1d(merged, p.var(attn.wo), p.var(attn.bo))
}

/// Inputs shared by every block: compressed features with and without the
/// positional embedding, and the query positional embedding, each stacked
/// over `batch` samples.
#[derive(Clone, Copy, Debug)]
pub struct DecoderContext {
    pub features: Var,
    pub features_pos: Var,
    pub query_pos: Var,
    pub batch: usize,
}

/// One block update: self-attention (skipped when `is_first`), cross-attention
/// over the features, feed-forward; each sublayer wrapped in residual + post-norm.
#[allow(clippy::too_many_arguments)]
pub fn task_adaptive_block<T: Scalar>(
    g: &mut Graph<T>,
    p: &Bound,
    cfg: &ModelConfig,
    index: usize,
    block: &DecoderBlockParams,
    is_first: bool,
    queries: Var,
    ctx: DecoderContext,
    mut trace: Option<&mut ForwardTrace<T>>,
) -> Result<Var> {
    let eps = T::lit(cfg.ln_eps);
    let mut q = queries;
    if g.shape(q) != g.shape(ctx.query_pos) {
        return Err(Error::shape("task_adaptive_block", &g.shape(q), &g.shape(ctx.query_pos)));
    }

    if !is_first {
        let (attn, norm) = block.self_attn.as_ref().ok_or_else(|| {
            Error::InvalidArgument(format!("decoder block {index} has no self-attention"))
        })?;
        let q_hat = g.add(q, ctx.query_pos)?;
        let mut weights = Vec::new();
        let record = trace.as_ref().map(|_| &mut weights);
        let sa = multi_head_attention(g, p, attn, cfg.n_heads, ctx.batch, q_hat, q_hat, q, record)?;
        if let Some(t) = trace.as_deref_mut() {
            t.self_attention_calls[index] += 1;
            t.attention.push(AttentionRecord {
                block: index,
                kind: AttentionKind::SelfAttention,
                heads: weights,
            });
        }
        let res = g.add(q, sa)?;
        q = norm.apply(g, p, res, eps)?;
    }

    let q_hat = g.add(q, ctx.query_pos)?;
    let mut weights = Vec::new();
    let record = trace.as_ref().map(|_| &mut weights);
    let ca = multi_head_attention(
        g,
        p,
        &block.cross_attn,
        cfg.n_heads,
        ctx.batch,
        q_hat,
        ctx.features_pos,
        ctx.features,
        record,
    )?;
    if let Some(t) = trace.as_deref_mut() {
        t.attention.push(AttentionRecord {
            block: index,
            kind: AttentionKind::CrossAttention,
            heads: weights,
        });
    }
    let res = g.add(q, ca)?;
    q = block.cross_norm.apply(g, p, res, eps)?;

    let hidden = g.pointwise_conv1d(q, p.var(block.ffn.w1), p.var(block.ffn.b1))?;
    let hidden = g.gelu(hidden);
    let ff = g.pointwise_conv1d(hidden, p.var(block.ffn.w2), p.var(block.ffn.b2))?;
    let res = g.add(q, ff)?;
    let out = block.ffn_norm.apply(g, p, res, eps)?;

    if let Some(t) = trace {
        t.blocks_run += 1;
    }
    Ok(out)
}
