//! The multi-task network: channel compression, the task-adaptive query decoder,
//! the AU-assisted graph network and the per-node prediction heads.

pub mod checkpoint;
mod config;
mod decoder;
mod gcn;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub use config::{
    ModelConfig, AU_QUERIES, BACKBONE_CHANNELS, BACKBONE_PATCHES, EXPR_QUERIES, N_AU, N_EXPR,
    N_FUSED, N_QUERIES, N_VA, VA_QUERIES,
};
pub use decoder::{
    multi_head_attention, task_adaptive_block, AttentionKind, AttentionParams, AttentionRecord,
    DecoderBlockParams, DecoderContext, FfnParams, NormParams,
};
pub use gcn::{gcn_layer, mask_and_fuse, Activation, GcnParams};

use crate::data::PredictionRecord;
use crate::error::{Error, Result};
use crate::tensorcore::{Bound, Graph, ParamId, ParamStore, Scalar, Tensor, Var};

/// The 22 task queries. Their content starts at zero; only the positional
/// embedding is learned.
#[derive(Clone, Copy, Debug)]
pub struct QuerySet {
    pub pos_embed: ParamId,
}

impl QuerySet {
    pub fn content<T: Scalar>(d_model: usize) -> Tensor<T> {
        Tensor::zeros(N_QUERIES, d_model)
    }
}

/// Per-node affine heads: node `i` of a task maps `d → 1` with its own weights.
#[derive(Clone, Copy, Debug)]
pub struct HeadParams {
    pub au_w: ParamId,
    pub au_b: ParamId,
    pub expr_w: ParamId,
    pub expr_b: ParamId,
    pub va_w: ParamId,
    pub va_b: ParamId,
}

/// Where each parameter group lives inside the [`ParamStore`].
#[derive(Clone, Debug)]
pub struct ModelLayout {
    pub compress: [(ParamId, ParamId); 2],
    pub pos_embed_f: ParamId,
    pub queries: QuerySet,
    pub blocks: Vec<DecoderBlockParams>,
    pub gcn: GcnParams,
    pub heads: HeadParams,
}

/// Instrumentation collected during a forward pass.
#[derive(Clone, Debug, Default)]
pub struct ForwardTrace<T> {
    pub blocks_run: usize,
    /// Self-attention invocations per block index.
    pub self_attention_calls: Vec<usize>,
    pub attention: Vec<AttentionRecord<T>>,
    /// Query content entering the first block.
    pub initial_queries: Option<Tensor<T>>,
    /// Effective adjacency of each graph layer, in execution order.
    pub adjacency: Vec<Tensor<T>>,
    /// Mask selection scores (fused nodes × AU nodes).
    pub selection: Option<Tensor<T>>,
}

/// Graph handles of one sample's predictions (`1×12`, `1×8`, `1×2`).
#[derive(Clone, Copy, Debug)]
pub struct Outputs {
    pub au: Var,
    pub expr: Var,
    pub va: Var,
}

#[derive(Clone, Debug)]
pub struct Model<T> {
    config: ModelConfig,
    params: ParamStore<T>,
    layout: ModelLayout,
}

impl<T: Scalar> Model<T> {
    /// Builds a freshly initialized model; initialization is a pure function of `seed`.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let d = config.d_model;
        let compress = [
            (
                store.uniform(
                    "compress.0.weight",
                    config.in_channels,
                    config.conv_hidden,
                    config.in_channels,
                    &mut rng,
                ),
                store.zeros("compress.0.bias", 1, config.conv_hidden),
            ),
            (
                store.uniform("compress.1.weight", config.conv_hidden, d, config.conv_hidden, &mut rng),
                store.zeros("compress.1.bias", 1, d),
            ),
        ];
        let pos_embed_f = store.uniform("pos_embed_f", config.n_patches, d, d, &mut rng);
        let queries = QuerySet {
            pos_embed: store.uniform("queries.pos_embed", N_QUERIES, d, d, &mut rng),
        };
        let blocks = (0..config.n_blocks)
            .map(|i| DecoderBlockParams::init(&mut store, i, &config, &mut rng))
            .collect();
        let gcn = GcnParams::init(&mut store, d, &mut rng);
        let heads = HeadParams {
            au_w: store.uniform("head.au.weight", N_AU, d, d, &mut rng),
            au_b: store.zeros("head.au.bias", 1, N_AU),
            expr_w: store.uniform("head.expr.weight", N_EXPR, d, d, &mut rng),
            expr_b: store.zeros("head.expr.bias", 1, N_EXPR),
            va_w: store.uniform("head.va.weight", N_VA, d, d, &mut rng),
            va_b: store.zeros("head.va.bias", 1, N_VA),
        };
        debug_assert_eq!(store.numel(), config.param_count());
        Ok(Self {
            config,
            params: store,
            layout: ModelLayout {
                compress,
                pos_embed_f,
                queries,
                blocks,
                gcn,
                heads,
            },
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.params
    }

    pub fn layout(&self) -> &ModelLayout {
        &self.layout
    }

    /// Same architecture and parameter values in another precision.
    pub fn cast<U: Scalar>(&self) -> Model<U> {
        Model {
            config: self.config.clone(),
            params: self.params.cast(),
            layout: self.layout.clone(),
        }
    }

    fn check_channels(&self, channels: usize) -> Result<()> {
        if channels != self.config.in_channels {
            return Err(Error::Ingestion(format!(
                "channel dimension: expected {}, found {channels}",
                self.config.in_channels
            )));
        }
        Ok(())
    }

    fn compress_rows(&self, g: &mut Graph<T>, p: &Bound, features: Var) -> Result<Var> {
        let [(w0, b0), (w1, b1)] = self.layout.compress;
        let h = g.pointwise_conv1d(features, p.var(w0), p.var(b0))?;
        let h = g.gelu(h);
        g.pointwise_conv1d(h, p.var(w1), p.var(b1))
    }

    /// Two pointwise convolutions `in_channels → conv_hidden → d_model` with GELU between.
    pub fn compress_features(&self, g: &mut Graph<T>, p: &Bound, features: Var) -> Result<Var> {
        let [patches, channels] = g.shape(features);
        if patches != self.config.n_patches {
            return Err(Error::Ingestion(format!(
                "patch dimension: expected {}, found {patches}",
                self.config.n_patches
            )));
        }
        self.check_channels(channels)?;
        self.compress_rows(g, p, features)
    }

    /// Applies every decoder block in order, starting from zero query content.
    /// `compressed` stacks `batch` samples of `n_patches` rows each.
    pub fn run_decoder(
        &self,
        g: &mut Graph<T>,
        p: &Bound,
        compressed: Var,
        batch: usize,
        mut trace: Option<&mut ForwardTrace<T>>,
    ) -> Result<Var> {
        let pos_f = tile(g, p.var(self.layout.pos_embed_f), batch)?;
        let features_pos = g.add(compressed, pos_f)?;
        let ctx = DecoderContext {
            features: compressed,
            features_pos,
            query_pos: tile(g, p.var(self.layout.queries.pos_embed), batch)?,
            batch,
        };
        let content = QuerySet::content(self.config.d_model);
        if let Some(t) = trace.as_deref_mut() {
            t.self_attention_calls = vec![0; self.layout.blocks.len()];
            t.initial_queries = Some(content.clone());
        }
        let mut q = g.constant(Tensor::zeros(batch * N_QUERIES, self.config.d_model));
        for (i, block) in self.layout.blocks.iter().enumerate() {
            q = task_adaptive_block(
                g,
                p,
                &self.config,
                i,
                block,
                i == 0,
                q,
                ctx,
                trace.as_deref_mut(),
            )?;
        }
        Ok(q)
    }

    /// Splits the decoded queries of each sample into AU features and EXPR+VA features.
    pub fn split_queries(g: &mut Graph<T>, queries: Var, batch: usize) -> Result<(Var, Var)> {
        let au = g.select_rows(queries, &block_rows(batch, N_QUERIES, AU_QUERIES))?;
        let expr_va = g.select_rows(queries, &block_rows(batch, N_QUERIES, EXPR_QUERIES.start..VA_QUERIES.end))?;
        Ok((au, expr_va))
    }

    // node `i` of each sample dotted with row `i` of `weight`; `(B·n)×d → B×n`
    fn node_head(g: &mut Graph<T>, nodes: Var, weight: Var, bias: Var, batch: usize) -> Result<Var> {
        let n = g.shape(weight)[0];
        let w = tile(g, weight, batch)?;
        let prod = g.mul(nodes, w)?;
        let col = g.sum_cols(prod);
        let rows = g.reshape(col, batch, n)?;
        g.add_row(rows, bias)
    }

    /// Full pipeline for one sample.
    pub fn forward(
        &self,
        g: &mut Graph<T>,
        p: &Bound,
        features: Var,
        trace: Option<&mut ForwardTrace<T>>,
    ) -> Result<Outputs> {
        let compressed = self.compress_features(g, p, features)?;
        self.forward_compressed(g, p, compressed, 1, trace)
    }

    /// Pipeline for `batch` samples whose feature maps are stacked row-wise
    /// into one `(batch·n_patches) × in_channels` matrix. Outputs have one row
    /// per sample.
    pub fn forward_batch(&self, g: &mut Graph<T>, p: &Bound, stacked: Var, batch: usize) -> Result<Outputs> {
        let [rows, channels] = g.shape(stacked);
        let patches = self.config.n_patches;
        if batch == 0 || rows != batch * patches {
            return Err(Error::Ingestion(format!(
                "patch dimension: expected {batch}x{patches} stacked rows, found {rows}"
            )));
        }
        self.check_channels(channels)?;
        let compressed = self.compress_rows(g, p, stacked)?;
        self.forward_compressed(g, p, compressed, batch, None)
    }

    /// Everything after channel compression.
    pub fn forward_compressed(
        &self,
        g: &mut Graph<T>,
        p: &Bound,
        compressed: Var,
        batch: usize,
        mut trace: Option<&mut ForwardTrace<T>>,
    ) -> Result<Outputs> {
        let queries = self.run_decoder(g, p, compressed, batch, trace.as_deref_mut())?;
        let (f_au, f_expr_va) = Self::split_queries(g, queries, batch)?;

        let gcn = &self.layout.gcn;
        let (g_au, adj_au) =
            gcn_layer(g, f_au, p.var(gcn.adj_au), p.var(gcn.w_au), Activation::Gelu)?;
        let (fused, selection) = mask_and_fuse(g, g_au, f_expr_va, p.var(gcn.mask))?;
        let (fused1, adj1) =
            gcn_layer(g, fused, p.var(gcn.adj_fuse), p.var(gcn.w_fuse1), Activation::Gelu)?;
        let (fused2, adj2) =
            gcn_layer(g, fused1, p.var(gcn.adj_fuse), p.var(gcn.w_fuse2), Activation::Gelu)?;
        if let Some(t) = trace {
            t.adjacency = vec![g.value(adj_au).clone(), g.value(adj1).clone(), g.value(adj2).clone()];
            t.selection = Some(selection);
        }

        let h = &self.layout.heads;
        let au = Self::node_head(g, g_au, p.var(h.au_w), p.var(h.au_b), batch)?;
        let expr_nodes = g.select_rows(fused2, &block_rows(batch, N_FUSED, 0..N_EXPR))?;
        let expr = Self::node_head(g, expr_nodes, p.var(h.expr_w), p.var(h.expr_b), batch)?;
        let va_nodes = g.select_rows(fused2, &block_rows(batch, N_FUSED, N_EXPR..N_FUSED))?;
        let va = Self::node_head(g, va_nodes, p.var(h.va_w), p.var(h.va_b), batch)?;
        let va = g.tanh(va);
        Ok(Outputs { au, expr, va })
    }

    /// Inference for one feature map, without recording gradients.
    pub fn predict_tensor(&self, features: &Tensor<f32>) -> Result<([f32; N_AU], [f32; N_EXPR], [f32; N_VA])> {
        let mut g = Graph::new();
        let p = self.params.bind(&mut g, false);
        let x = g.constant(features.cast());
        let out = self.forward(&mut g, &p, x, None)?;
        let read = |v: Var, dst: &mut [f32]| {
            for (d, s) in dst.iter_mut().zip(g.value(v).data()) {
                *d = s.to_f32().unwrap_or(f32::NAN);
            }
        };
        let (mut au, mut expr, mut va) = ([0.0; N_AU], [0.0; N_EXPR], [0.0; N_VA]);
        read(out.au, &mut au);
        read(out.expr, &mut expr);
        read(out.va, &mut va);
        Ok((au, expr, va))
    }

    pub fn predict(&self, id: &str, features: &Tensor<f32>) -> Result<PredictionRecord> {
        let (au_logits, expr_logits, va) = self.predict_tensor(features)?;
        Ok(PredictionRecord {
            id: id.to_string(),
            au_logits,
            expr_logits,
            va,
        })
    }
}

/// Rows `range` of every `block`-row block, for `batch` blocks.
fn block_rows(batch: usize, block: usize, range: std::ops::Range<usize>) -> Vec<usize> {
    (0..batch).flat_map(|b| range.clone().map(move |r| b * block + r)).collect()
}

/// `x` repeated `batch` times row-wise.
fn tile<T: Scalar>(g: &mut Graph<T>, x: Var, batch: usize) -> Result<Var> {
    if batch == 1 {
        return Ok(x);
    }
    let rows = g.shape(x)[0];
    let idx: Vec<usize> = (0..batch).flat_map(|_| 0..rows).collect();
    g.select_rows(x, &idx)
}
