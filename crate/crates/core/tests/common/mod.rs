//! Helpers shared by the integration tests and the acceptance harness.
#![allow(dead_code)]

use affect_mtl::data::{Expression, LabelRecord, LabelSources};
use affect_mtl::losses::{ccc_var, loss_au, loss_expr, loss_total, loss_va, ClassWeights};
use affect_mtl::model::{Model, ModelConfig, N_AU, N_EXPR};
use affect_mtl::tensorcore::{Graph, Tensor, Var};
use affect_mtl::Result;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Central-difference step.
pub const H: f64 = 1e-5;
/// Largest accepted relative gradient error.
pub const GRAD_TOL: f64 = 1e-4;
/// Denominator floor of the relative error, so that gradients that are zero
/// analytically are compared in absolute terms.
pub const REL_FLOOR: f64 = 1e-2;
pub const INSTANCES: u64 = 20;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random(rng: &mut impl Rng, rows: usize, cols: usize) -> Tensor<f64> {
    let data = (0..rows * cols).map(|_| rng.gen_range(-1.0..1.0)).collect();
    Tensor::new(rows, cols, data).unwrap()
}

/// Entries with magnitude in `[0.5, 2]` and random sign.
pub fn away_from_zero(rng: &mut impl Rng, rows: usize, cols: usize) -> Tensor<f64> {
    let data = (0..rows * cols)
        .map(|_| {
            let m: f64 = rng.gen_range(0.5..2.0);
            if rng.gen_bool(0.5) {
                m
            } else {
                -m
            }
        })
        .collect();
    Tensor::new(rows, cols, data).unwrap()
}

pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

/// Weights for projecting a non-scalar output onto a scalar.
fn projection(rows: usize, cols: usize) -> Tensor<f64> {
    let data = (0..rows * cols).map(|i| (i as f64 * 0.731 + 0.29).sin() + 0.15).collect();
    Tensor::new(rows, cols, data).unwrap()
}

type Build<'a> = dyn Fn(&mut Graph<f64>, &[Var]) -> Result<Var> + 'a;

fn scalar_out(g: &mut Graph<f64>, vars: &[Var], f: &Build<'_>) -> Var {
    let out = f(g, vars).unwrap();
    let [r, c] = g.shape(out);
    if [r, c] == [1, 1] {
        return out;
    }
    let w = g.constant(projection(r, c));
    let prod = g.mul(out, w).unwrap();
    g.sum_all(prod)
}

/// Max relative error between backpropagated and central-difference
/// gradients of `f`, with respect to every element of every input.
pub fn gradcheck(inputs: &[Tensor<f64>], f: &Build<'_>) -> f64 {
    let eval = |inputs: &[Tensor<f64>]| {
        let mut g = Graph::new();
        let vars: Vec<Var> = inputs.iter().map(|t| g.constant(t.clone())).collect();
        let out = scalar_out(&mut g, &vars, f);
        g.value(out).item()
    };
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let out = scalar_out(&mut g, &vars, f);
    g.backward(out).unwrap();

    let mut worst: f64 = 0.0;
    let mut probe = inputs.to_vec();
    for (k, v) in vars.iter().enumerate() {
        let analytic = g.grad(*v).cloned().unwrap_or_else(|| Tensor::zeros(inputs[k].rows(), inputs[k].cols()));
        for j in 0..inputs[k].len() {
            let x = inputs[k].data()[j];
            probe[k].data_mut()[j] = x + H;
            let up = eval(&probe);
            probe[k].data_mut()[j] = x - H;
            let down = eval(&probe);
            probe[k].data_mut()[j] = x;
            worst = worst.max(rel_err(analytic.data()[j], (up - down) / (2.0 * H)));
        }
    }
    worst
}

pub type OpCase = fn(&mut ChaCha8Rng) -> f64;

fn check(inputs: Vec<Tensor<f64>>, f: impl Fn(&mut Graph<f64>, &[Var]) -> Result<Var>) -> f64 {
    gradcheck(&inputs, &f)
}

fn random_au(rng: &mut impl Rng) -> [bool; N_AU] {
    std::array::from_fn(|_| rng.gen_bool(0.4))
}

/// One randomized gradient check per differentiable op (and per loss).
pub fn op_cases() -> Vec<(&'static str, OpCase)> {
    vec![
        ("matmul", |r| check(vec![random(r, 3, 4), random(r, 4, 2)], |g, v| g.matmul(v[0], v[1]))),
        ("transpose", |r| check(vec![random(r, 3, 4)], |g, v| Ok(g.transpose(v[0])))),
        ("add", |r| check(vec![random(r, 3, 4), random(r, 3, 4)], |g, v| g.add(v[0], v[1]))),
        ("sub", |r| check(vec![random(r, 3, 4), random(r, 3, 4)], |g, v| g.sub(v[0], v[1]))),
        ("mul", |r| check(vec![random(r, 3, 4), random(r, 3, 4)], |g, v| g.mul(v[0], v[1]))),
        ("div", |r| check(vec![random(r, 3, 4), away_from_zero(r, 3, 4)], |g, v| g.div(v[0], v[1]))),
        ("scale", |r| check(vec![random(r, 3, 4)], |g, v| Ok(g.scale(v[0], -1.7)))),
        ("add_row", |r| check(vec![random(r, 3, 4), random(r, 1, 4)], |g, v| g.add_row(v[0], v[1]))),
        ("expand", |r| check(vec![random(r, 1, 1)], |g, v| g.expand(v[0], 3, 2))),
        ("softmax_rows", |r| check(vec![random(r, 3, 5)], |g, v| Ok(g.softmax_rows(v[0])))),
        ("log_softmax_rows", |r| check(vec![random(r, 3, 5)], |g, v| Ok(g.log_softmax_rows(v[0])))),
        ("layer_norm", |r| {
            check(vec![random(r, 3, 6), random(r, 1, 6), random(r, 1, 6)], |g, v| {
                g.layer_norm(v[0], v[1], v[2], 1e-5)
            })
        }),
        ("gelu", |r| check(vec![away_from_zero(r, 3, 4)], |g, v| Ok(g.gelu(v[0])))),
        ("tanh", |r| check(vec![random(r, 3, 4)], |g, v| Ok(g.tanh(v[0])))),
        ("sigmoid", |r| check(vec![away_from_zero(r, 3, 4)], |g, v| Ok(g.sigmoid(v[0])))),
        ("softplus", |r| check(vec![away_from_zero(r, 3, 4)], |g, v| Ok(g.softplus(v[0])))),
        ("concat_rows", |r| {
            check(vec![random(r, 2, 3), random(r, 1, 3)], |g, v| g.concat_rows(&[v[0], v[1], v[0]]))
        }),
        ("concat_cols", |r| {
            check(vec![random(r, 3, 2), random(r, 3, 1)], |g, v| g.concat_cols(&[v[1], v[0]]))
        }),
        ("slice_rows", |r| check(vec![random(r, 5, 3)], |g, v| g.slice_rows(v[0], 1, 4))),
        ("slice_cols", |r| check(vec![random(r, 3, 5)], |g, v| g.slice_cols(v[0], 2, 5))),
        ("select_rows", |r| check(vec![random(r, 4, 3)], |g, v| g.select_rows(v[0], &[3, 0, 3, 1]))),
        ("pick_cols", |r| check(vec![random(r, 3, 5)], |g, v| g.pick_cols(v[0], &[4, 1, 2]))),
        ("sum_all", |r| check(vec![random(r, 3, 4)], |g, v| Ok(g.sum_all(v[0])))),
        ("mean_all", |r| check(vec![random(r, 3, 4)], |g, v| Ok(g.mean_all(v[0])))),
        ("sum_cols", |r| check(vec![random(r, 3, 4)], |g, v| Ok(g.sum_cols(v[0])))),
        ("reshape", |r| check(vec![random(r, 3, 4)], |g, v| g.reshape(v[0], 2, 6))),
        ("attention", |r| {
            check(vec![random(r, 6, 4), random(r, 8, 4), random(r, 8, 4)], |g, v| {
                g.attention(v[0], v[1], v[2], 2, 2, 0.7)
            })
        }),
        ("matmul_blocks", |r| {
            check(vec![random(r, 2, 3), random(r, 6, 4)], |g, v| g.matmul_blocks(v[0], v[1]))
        }),
        ("pointwise_conv1d", |r| {
            check(vec![random(r, 5, 3), random(r, 3, 4), random(r, 1, 4)], |g, v| {
                g.pointwise_conv1d(v[0], v[1], v[2])
            })
        }),
        ("loss_au", |r| {
            let targets: Vec<Option<[bool; N_AU]>> =
                (0..4).map(|i| (i != 2).then(|| random_au(r))).collect();
            let weights: Vec<f64> = (0..N_AU).map(|_| r.gen_range(0.5..3.0)).collect();
            check(vec![random(r, 4, N_AU)], move |g, v| {
                let t: Vec<Option<&[bool]>> = targets.iter().map(|t| t.as_ref().map(|a| &a[..])).collect();
                Ok(loss_au(g, v[0], &t, &weights)?.value)
            })
        }),
        ("loss_expr", |r| {
            let targets: Vec<Option<usize>> = (0..5).map(|i| (i != 1).then(|| r.gen_range(0..N_EXPR))).collect();
            let weights: Vec<f64> = (0..N_EXPR).map(|_| r.gen_range(0.5..3.0)).collect();
            check(vec![random(r, 5, N_EXPR)], move |g, v| Ok(loss_expr(g, v[0], &targets, &weights)?.value))
        }),
        ("ccc_var", |r| check(vec![random(r, 6, 1), random(r, 6, 1)], |g, v| ccc_var(g, v[0], v[1]))),
        ("loss_va", |r| {
            let targets: Vec<Option<[f32; 2]>> = (0..5)
                .map(|i| (i != 3).then(|| [r.gen_range(-1.0..1.0), r.gen_range(-1.0..1.0)]))
                .collect();
            check(vec![random(r, 5, 2)], move |g, v| {
                let pred = g.tanh(v[0]);
                Ok(loss_va(g, pred, &targets)?.value)
            })
        }),
    ]
}

/// Width-reduced architecture for end-to-end checks.
pub fn small_config() -> ModelConfig {
    ModelConfig {
        n_patches: 8,
        in_channels: 12,
        conv_hidden: 16,
        d_model: 16,
        n_heads: 2,
        ffn_hidden: 32,
        n_blocks: 2,
        ln_eps: 1e-5,
    }
}

/// Labels with each task independently replaced by its sentinel with probability `p_invalid`.
pub fn random_label(rng: &mut impl Rng, id: String, p_invalid: f64) -> LabelRecord {
    LabelRecord {
        id,
        va: (!rng.gen_bool(p_invalid)).then(|| [rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)]),
        expr: (!rng.gen_bool(p_invalid)).then(|| Expression::from_code(rng.gen_range(0..N_EXPR)).unwrap()),
        au: (!rng.gen_bool(p_invalid)).then(|| random_au(rng)),
        source: LabelSources::default(),
    }
}

pub fn random_weights(rng: &mut impl Rng) -> ClassWeights {
    ClassWeights {
        au_pos_weight: std::array::from_fn(|_| rng.gen_range(0.5..4.0)),
        expr_weight: std::array::from_fn(|_| rng.gen_range(0.5..4.0)),
    }
}

/// Total loss of `model` on stacked features and labels.
pub fn batch_loss(model: &Model<f64>, x: &Tensor<f64>, labels: &[LabelRecord], weights: &ClassWeights) -> f64 {
    let mut g = Graph::new();
    let p = model.params().bind(&mut g, false);
    let x = g.constant(x.clone());
    let out = model.forward_batch(&mut g, &p, x, labels.len()).unwrap();
    let refs: Vec<&LabelRecord> = labels.iter().collect();
    let l = loss_total(&mut g, &out, &refs, weights).unwrap();
    g.value(l.total).item()
}

/// End-to-end check of `loss_total` through a small model: one random
/// element of every parameter tensor plus `extra` more random elements.
pub fn model_gradcheck(seed: u64, extra: usize) -> f64 {
    let cfg = small_config();
    let mut r = rng(seed);
    let mut model = Model::<f64>::new(cfg.clone(), seed).unwrap();
    let batch = 3;
    let x = random(&mut r, batch * cfg.n_patches, cfg.in_channels);
    let mut labels: Vec<LabelRecord> = (0..batch).map(|i| random_label(&mut r, format!("v/{i}"), 0.2)).collect();
    labels[0].va.get_or_insert([0.3, -0.4]);
    labels[1].va.get_or_insert([-0.6, 0.2]);
    let weights = random_weights(&mut r);

    let mut g = Graph::new();
    let p = model.params().bind(&mut g, true);
    let xv = g.constant(x.clone());
    let out = model.forward_batch(&mut g, &p, xv, batch).unwrap();
    let refs: Vec<&LabelRecord> = labels.iter().collect();
    let l = loss_total(&mut g, &out, &refs, &weights).unwrap();
    g.backward(l.total).unwrap();
    let grads = model.params().gradients(&mut g, &p);

    let sizes: Vec<usize> = model.params().tensors().iter().map(Tensor::len).collect();
    let mut coords: Vec<(usize, usize)> = sizes.iter().enumerate().map(|(t, &n)| (t, r.gen_range(0..n))).collect();
    for _ in 0..extra {
        let t = r.gen_range(0..sizes.len());
        coords.push((t, r.gen_range(0..sizes[t])));
    }
    let mut worst: f64 = 0.0;
    for (t, j) in coords {
        let orig = model.params().tensors()[t].data()[j];
        model.params_mut().tensors_mut()[t].data_mut()[j] = orig + H;
        let up = batch_loss(&model, &x, &labels, &weights);
        model.params_mut().tensors_mut()[t].data_mut()[j] = orig - H;
        let down = batch_loss(&model, &x, &labels, &weights);
        model.params_mut().tensors_mut()[t].data_mut()[j] = orig;
        worst = worst.max(rel_err(grads[t].data()[j], (up - down) / (2.0 * H)));
    }
    worst
}

/// Brute-force F1 from explicit confusion counts; 0 when nothing is positive.
pub fn f1_oracle(pred: &[bool], truth: &[bool]) -> f64 {
    let tp = pred.iter().zip(truth).filter(|(p, t)| **p && **t).count() as f64;
    let fp = pred.iter().zip(truth).filter(|(p, t)| **p && !**t).count() as f64;
    let fn_ = pred.iter().zip(truth).filter(|(p, t)| !**p && **t).count() as f64;
    if tp + fp + fn_ == 0.0 {
        0.0
    } else {
        2.0 * tp / (2.0 * tp + fp + fn_)
    }
}

/// CCC from raw moments, `2(E[xy] - E[x]E[y]) / (Var x + Var y + (E[x]-E[y])² + 1e-8)`.
pub fn ccc_oracle(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let e = |f: &dyn Fn(usize) -> f64| (0..x.len()).map(f).sum::<f64>() / n;
    let (mx, my) = (e(&|i| x[i]), e(&|i| y[i]));
    let cov = e(&|i| x[i] * y[i]) - mx * my;
    let vx = e(&|i| x[i] * x[i]) - mx * mx;
    let vy = e(&|i| y[i] * y[i]) - my * my;
    2.0 * cov / (vx + vy + (mx - my).powi(2) + 1e-8)
}

/// Random binary/multiclass/CCC instances compared against the oracles.
/// Returns the worst CCC deviation, or the first F1 mismatch.
pub fn metric_oracle_sweep(instances: u64) -> std::result::Result<f64, String> {
    use affect_mtl::losses::ccc;
    use affect_mtl::metrics::{f1_binary, f1_macro_expr};
    let mut worst: f64 = 0.0;
    for seed in 0..instances {
        let mut r = rng(seed);
        let n = r.gen_range(1..=50);
        let p_pos = r.gen_range(0.0..1.0);
        let pred: Vec<bool> = (0..n).map(|_| r.gen_bool(p_pos)).collect();
        let truth: Vec<bool> = (0..n).map(|_| r.gen_bool(p_pos)).collect();
        let got = f1_binary(&pred, &truth).map_err(|e| e.to_string())?;
        if got != f1_oracle(&pred, &truth) {
            return Err(format!("f1_binary seed {seed}: {got} vs {}", f1_oracle(&pred, &truth)));
        }

        let classes = r.gen_range(1..=N_EXPR);
        let pc: Vec<usize> = (0..n).map(|_| r.gen_range(0..classes)).collect();
        let tc: Vec<usize> = (0..n).map(|_| r.gen_range(0..classes)).collect();
        let (per_class, macro_f1) = f1_macro_expr(&pc, &tc).map_err(|e| e.to_string())?;
        let mut sum = 0.0;
        for (k, &got) in per_class.iter().enumerate() {
            let pk: Vec<bool> = pc.iter().map(|&c| c == k).collect();
            let tk: Vec<bool> = tc.iter().map(|&c| c == k).collect();
            let want = f1_oracle(&pk, &tk);
            if got != want {
                return Err(format!("f1_macro_expr seed {seed} class {k}: {got} vs {want}"));
            }
            sum += want;
        }
        if macro_f1 != sum / N_EXPR as f64 {
            return Err(format!("f1_macro_expr seed {seed}: macro {macro_f1} vs {}", sum / N_EXPR as f64));
        }

        let m = r.gen_range(2..=50);
        let rho: f64 = r.gen_range(-1.0..1.0);
        let x: Vec<f64> = (0..m).map(|_| r.gen_range(-1.0..1.0)).collect();
        let y: Vec<f64> = x
            .iter()
            .map(|&v| rho * v + (1.0 - rho.abs()) * r.gen_range(-1.0..1.0) + 0.1)
            .collect();
        let got = ccc(&x, &y).map_err(|e| e.to_string())?;
        worst = worst.max((got - ccc_oracle(&x, &y)).abs());
    }
    Ok(worst)
}

/// Replaces every parameter with uniform noise in `[-scale, scale]`.
pub fn randomize_params(model: &mut Model<f64>, seed: u64, scale: f64) {
    let mut r = rng(seed);
    for t in model.params_mut().tensors_mut() {
        for v in t.data_mut() {
            *v = r.gen_range(-scale..scale);
        }
    }
}

fn rows_sum_to_one(t: &Tensor<f64>, what: &str) -> std::result::Result<f64, String> {
    let mut worst: f64 = 0.0;
    for i in 0..t.rows() {
        let s: f64 = t.row(i).iter().sum();
        if t.row(i).iter().any(|&p| p < 0.0) {
            return Err(format!("{what}: negative weight in row {i}"));
        }
        worst = worst.max((s - 1.0).abs());
    }
    if worst > 1e-5 {
        return Err(format!("{what}: row sum off by {worst:e}"));
    }
    Ok(worst)
}

/// Forward pass of the full-size architecture with instrumentation; checks
/// block count, the missing self-attention of block 0, attention and
/// adjacency row sums, and the VA range. Returns the worst row-sum deviation.
pub fn architecture_check(model: &Model<f64>, seed: u64) -> std::result::Result<f64, String> {
    use affect_mtl::model::{AttentionKind, ForwardTrace, N_QUERIES, N_VA};
    let cfg = model.config();
    let mut r = rng(seed);
    let features = random(&mut r, cfg.n_patches, cfg.in_channels);
    let mut g = Graph::new();
    let p = model.params().bind(&mut g, false);
    let x = g.constant(features);
    let mut trace = ForwardTrace::default();
    let out = model.forward(&mut g, &p, x, Some(&mut trace)).map_err(|e| e.to_string())?;

    if trace.blocks_run != cfg.n_blocks {
        return Err(format!("{} blocks ran, expected {}", trace.blocks_run, cfg.n_blocks));
    }
    let mut expected_sa = vec![1; cfg.n_blocks];
    expected_sa[0] = 0;
    if trace.self_attention_calls != expected_sa {
        return Err(format!("self-attention calls per block {:?}", trace.self_attention_calls));
    }
    let q = trace.initial_queries.as_ref().ok_or("no query trace")?;
    if q.shape() != [N_QUERIES, cfg.d_model] {
        return Err(format!("query matrix {:?}", q.shape()));
    }
    let mut worst: f64 = 0.0;
    let mut cross = 0;
    for rec in &trace.attention {
        if rec.heads.len() != cfg.n_heads {
            return Err(format!("block {} recorded {} heads", rec.block, rec.heads.len()));
        }
        let keys = match rec.kind {
            AttentionKind::CrossAttention => {
                cross += 1;
                cfg.n_patches
            }
            AttentionKind::SelfAttention => N_QUERIES,
        };
        for h in &rec.heads {
            if h.shape() != [N_QUERIES, keys] {
                return Err(format!("block {} {:?} weights {:?}", rec.block, rec.kind, h.shape()));
            }
            worst = worst.max(rows_sum_to_one(h, "attention")?);
        }
    }
    if cross != cfg.n_blocks {
        return Err(format!("{cross} cross-attention sublayers recorded"));
    }
    if trace.adjacency.len() != 3 {
        return Err(format!("{} adjacency matrices recorded", trace.adjacency.len()));
    }
    for a in &trace.adjacency {
        worst = worst.max(rows_sum_to_one(a, "adjacency")?);
    }
    worst = worst.max(rows_sum_to_one(trace.selection.as_ref().ok_or("no selection trace")?, "mask selection")?);
    let va = g.value(out.va);
    if va.shape() != [1, N_VA] || va.data().iter().any(|v| !(-1.0..=1.0).contains(v)) {
        return Err(format!("VA output {:?}", va.data()));
    }
    Ok(worst)
}

/// Loss of fixed predictions, then of the same predictions with every
/// invalid-labelled output replaced by large noise; returns both.
pub fn masking_trial(seed: u64) -> (f64, f64) {
    use affect_mtl::model::Outputs;
    let mut r = rng(seed);
    let b = r.gen_range(5..12);
    let mut labels: Vec<LabelRecord> = (0..b).map(|i| random_label(&mut r, format!("v/{i}"), 0.3)).collect();
    labels[0].va = None;
    labels[1].expr = None;
    labels[2].au = None;
    labels[3].va.get_or_insert([0.2, -0.5]);
    labels[4].va.get_or_insert([-0.7, 0.1]);
    let weights = random_weights(&mut r);
    let au = random(&mut r, b, N_AU);
    let expr = random(&mut r, b, N_EXPR);
    let va = random(&mut r, b, 2);

    let loss = |au: &Tensor<f64>, expr: &Tensor<f64>, va: &Tensor<f64>| {
        let mut g = Graph::new();
        let out = Outputs {
            au: g.constant(au.clone()),
            expr: g.constant(expr.clone()),
            va: g.constant(va.clone()),
        };
        let refs: Vec<&LabelRecord> = labels.iter().collect();
        let l = loss_total(&mut g, &out, &refs, &weights).unwrap();
        g.value(l.total).item()
    };
    let before = loss(&au, &expr, &va);
    let (mut au2, mut expr2, mut va2) = (au.clone(), expr.clone(), va.clone());
    for (i, l) in labels.iter().enumerate() {
        let mut noise = |t: &mut Tensor<f64>| {
            for v in t.row_mut(i) {
                *v = r.gen_range(-100.0..100.0);
            }
        };
        if l.au.is_none() {
            noise(&mut au2);
        }
        if l.expr.is_none() {
            noise(&mut expr2);
        }
        if l.va.is_none() {
            noise(&mut va2);
        }
    }
    (before, loss(&au2, &expr2, &va2))
}

/// Writes a synthetic corpus shaped for [`small_config`] into `dir`.
pub fn small_corpus(dir: &std::path::Path, n: usize, videos: usize, seed: u64) -> (std::path::PathBuf, std::path::PathBuf) {
    use affect_mtl::cli::cmd_gen_synthetic;
    use affect_mtl::data::{FeatureShape, SyntheticConfig};
    let cfg = small_config();
    let synth = SyntheticConfig {
        shape: FeatureShape {
            patches: cfg.n_patches,
            channels: cfg.in_channels,
        },
        n_videos: videos,
        ..SyntheticConfig::default()
    };
    cmd_gen_synthetic(n, seed, &synth, dir).unwrap();
    (dir.join("features.aff"), dir.join("labels.csv"))
}

/// Short training run of the small architecture.
pub fn small_run(features: &std::path::Path, labels: &std::path::Path, out: &std::path::Path) -> affect_mtl::cli::RunConfig {
    use affect_mtl::cli::{Paths, RunConfig};
    use affect_mtl::training::TrainConfig;
    RunConfig {
        paths: Paths {
            features: Some(features.to_path_buf()),
            labels: Some(labels.to_path_buf()),
            output_dir: out.to_path_buf(),
            ..Paths::default()
        },
        train: TrainConfig {
            batch_size: 16,
            epochs: 3,
            warmup_epochs: 1,
            base_lr: 1e-3,
            seed: 11,
        },
        fold: None,
        model: small_config(),
    }
}

/// Six-fold plan over a 40-video synthetic corpus: checks the partition and
/// the video grouping, and returns the largest relative deviation of a fold's
/// frame count from the mean.
pub fn fold_protocol_check(seed: u64) -> std::result::Result<f64, String> {
    use affect_mtl::data::{gen_synthetic, kfold_split, video_prefix, FeatureShape, SyntheticConfig};
    use std::collections::HashMap;
    let synth = SyntheticConfig {
        shape: FeatureShape { patches: 1, channels: 1 },
        n_videos: 40,
        ..SyntheticConfig::default()
    };
    let corpus = gen_synthetic(2000, seed, &synth).map_err(|e| e.to_string())?;
    let ids: Vec<&str> = corpus.ids().collect();
    let plan = kfold_split(ids.iter().copied(), 6, seed).map_err(|e| e.to_string())?;
    if plan.folds.len() != ids.len() || ids.iter().any(|id| plan.fold_of(id).is_none_or(|f| f >= 6)) {
        return Err("fold plan is not a partition of the ids".into());
    }
    let mut video_fold: HashMap<&str, usize> = HashMap::new();
    for id in &ids {
        let fold = plan.fold_of(id).unwrap();
        let video = video_prefix(id).map_err(|e| e.to_string())?;
        if *video_fold.entry(video).or_insert(fold) != fold {
            return Err(format!("video {video} split across folds"));
        }
    }
    if video_fold.len() != 40 {
        return Err(format!("{} videos, expected 40", video_fold.len()));
    }
    let sizes = plan.fold_sizes();
    let mean = ids.len() as f64 / 6.0;
    let worst = sizes.iter().map(|&s| (s as f64 - mean).abs() / mean).fold(0.0, f64::max);
    if worst > 0.2 {
        return Err(format!("fold sizes {sizes:?} deviate {:.1}% from the mean", worst * 100.0));
    }
    Ok(worst)
}
