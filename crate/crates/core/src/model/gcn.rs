//! AU-assisted graph network: a fully connected graph over the AU nodes whose
//! softly-selected aggregate is fused into the EXPR/VA nodes.

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensorcore::{Graph, ParamId, ParamStore, Scalar, Tensor, Var};

use super::{N_AU, N_FUSED};

#[derive(Clone, Copy, Debug)]
pub struct GcnParams {
    pub w_au: ParamId,
    /// Learnable mask vectors, one per fused node.
    pub mask: ParamId,
    pub w_fuse1: ParamId,
    pub w_fuse2: ParamId,
    pub adj_au: ParamId,
    pub adj_fuse: ParamId,
}

impl GcnParams {
    pub(crate) fn init<T: Scalar>(store: &mut ParamStore<T>, d: usize, rng: &mut impl Rng) -> Self {
        let w_au = store.uniform("gcn.w_au", d, d, d, rng);
        let mask = store.uniform("gcn.mask", N_FUSED, d, d, rng);
        let w_fuse1 = store.uniform("gcn.w_fuse1", d, d, d, rng);
        let w_fuse2 = store.uniform("gcn.w_fuse2", d, d, d, rng);
        // zero logits: uniform, fully connected graph
        let adj_au = store.zeros("gcn.adj_au", N_AU, N_AU);
        let adj_fuse = store.zeros("gcn.adj_fuse", N_FUSED, N_FUSED);
        Self {
            w_au,
            mask,
            w_fuse1,
            w_fuse2,
            adj_au,
            adj_fuse,
        }
    }
}

/// Node activation after graph propagation.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Gelu,
    Linear,
}

/// `act(row_softmax(adj_logits) · nodes · weight)`, with `nodes` holding one
/// `n`-row block per sample.
///
/// Returns the output and the effective adjacency.
pub fn gcn_layer<T: Scalar>(
    g: &mut Graph<T>,
    nodes: Var,
    adj_logits: Var,
    weight: Var,
    activation: Activation,
) -> Result<(Var, Var)> {
    let [rows, _] = g.shape(nodes);
    let [n, n2] = g.shape(adj_logits);
    if n != n2 || rows % n != 0 {
        return Err(Error::shape("gcn_layer", &g.shape(nodes), &g.shape(adj_logits)));
    }
    let adj = g.softmax_rows(adj_logits);
    let agg = g.matmul_blocks(adj, nodes)?;
    let out = g.matmul(agg, weight)?;
    let out = match activation {
        Activation::Gelu => g.gelu(out),
        Activation::Linear => out,
    };
    Ok((out, adj))
}

/// Soft selection of AU nodes by the mask vectors, added to the EXPR/VA features.
///
/// `S = row_softmax(M · g_auᵀ / sqrt(d))`, result `S · g_au + f_expr_va`, per
/// sample when the node matrices stack several samples. Returns the fused
/// features and `S` for every sample, stacked.
pub fn mask_and_fuse<T: Scalar>(
    g: &mut Graph<T>,
    au_nodes: Var,
    expr_va: Var,
    mask: Var,
) -> Result<(Var, Tensor<T>)> {
    let [au_rows, d] = g.shape(au_nodes);
    let [m, md] = g.shape(mask);
    let [ev_rows, ev_d] = g.shape(expr_va);
    if md != d || ev_d != d || ev_rows % m != 0 || au_rows % (ev_rows / m) != 0 {
        return Err(Error::shape("mask_and_fuse", &g.shape(mask), &g.shape(expr_va)));
    }
    let batch = ev_rows / m;
    let tiled = if batch == 1 {
        mask
    } else {
        let idx: Vec<usize> = (0..batch).flat_map(|_| 0..m).collect();
        g.select_rows(mask, &idx)?
    };
    let masked = g.attention(tiled, au_nodes, au_nodes, batch, 1, T::one() / T::lit(d as f64).sqrt())?;
    let selection = g.attention_probs(masked).expect("attention node").clone();
    Ok((g.add(masked, expr_va)?, selection))
}
