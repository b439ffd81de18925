//! Full network assembly: input projection, a stack of residual
//! attention blocks, a MIL aggregator, and a linear classifier.
//!
//! Bags are processed one at a time (shape `[N, D_in]`); batching across
//! bags is the trainer's job via gradient accumulation, so no padding
//! semantics exist anywhere in the model.

use std::fmt;
use std::str::FromStr;

use crate::attention::{caprmil_attention, AssignmentMap, AttentionParams, AGGREGATION_EPS};
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// LayerNorm epsilon used everywhere in the model.
pub const LN_EPS: f64 = 1e-5;

/// Temperatures are clamped to this floor after every optimizer step.
pub const TAU_MIN: f64 = 0.01;

/// MIL pooling head variant.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Aggregator {
    /// Plain average over patches.
    Mean,
    /// Attention pooling: a_n = softmax_n(wᵀ tanh(V h_n)).
    Attn,
    /// Gated attention pooling: a_n = softmax_n(wᵀ (tanh(V h_n) ⊙ σ(U h_n))).
    GAttn,
}

impl Aggregator {
    /// Stable numeric code used in the checkpoint header.
    pub fn code(self) -> u32 {
        match self {
            Aggregator::Mean => 0,
            Aggregator::Attn => 1,
            Aggregator::GAttn => 2,
        }
    }

    pub fn from_code(code: u32) -> Result<Self> {
        match code {
            0 => Ok(Aggregator::Mean),
            1 => Ok(Aggregator::Attn),
            2 => Ok(Aggregator::GAttn),
            other => Err(Error::format(format!("unknown aggregator code {other}"))),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Aggregator::Mean => "mean",
            Aggregator::Attn => "attn",
            Aggregator::GAttn => "gattn",
        }
    }
}

impl FromStr for Aggregator {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "mean" => Ok(Aggregator::Mean),
            "attn" => Ok(Aggregator::Attn),
            "gattn" => Ok(Aggregator::GAttn),
            other => Err(Error::config(format!(
                "unknown aggregator '{other}' (expected mean, attn, or gattn)"
            ))),
        }
    }
}

impl fmt::Display for Aggregator {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// All architecture hyperparameters.
///
/// `n_blocks = 0` is the mean-pooling baseline (projection → pool →
/// classifier with no attention blocks), kept in the same type so the
/// trainer, cost accounting, and checkpoints treat both architectures
/// uniformly.
#[derive(Debug, Clone, PartialEq)]
pub struct CaprmilConfig {
    pub d_in: usize,
    pub d_model: usize,
    pub n_blocks: usize,
    pub n_heads: usize,
    pub n_clusters: usize,
    pub mlp_ratio: usize,
    pub dropout_p: f64,
    pub aggregator: Aggregator,
    pub n_classes: usize,
    /// Hidden width of the Attn/GAttn pooling heads.
    pub attn_hidden: usize,
}

impl Default for CaprmilConfig {
    fn default() -> Self {
        CaprmilConfig {
            d_in: 1024,
            d_model: 128,
            n_blocks: 1,
            n_heads: 8,
            n_clusters: 4,
            mlp_ratio: 4,
            dropout_p: 0.1,
            aggregator: Aggregator::Mean,
            n_classes: 2,
            attn_hidden: 128,
        }
    }
}

impl CaprmilConfig {
    /// The mean-pooling baseline: projection and classifier only.
    pub fn mean_baseline() -> Self {
        CaprmilConfig {
            n_blocks: 0,
            aggregator: Aggregator::Mean,
            ..CaprmilConfig::default()
        }
    }

    /// Per-head width. `d_model / n_heads` rounded down: head counts that
    /// do not divide the width are accepted (the head-count sweep includes
    /// such cells), with the heads jointly spanning `inner() ≤ d_model`.
    pub fn d_head(&self) -> usize {
        self.d_model / self.n_heads
    }

    /// Concatenated width of all heads, `n_heads · d_head`.
    pub fn inner(&self) -> usize {
        self.n_heads * self.d_head()
    }

    pub fn validate(&self) -> Result<()> {
        fn positive(value: usize, name: &str) -> Result<()> {
            if value == 0 {
                return Err(Error::config(format!("{name} must be ≥ 1, got 0")));
            }
            Ok(())
        }
        positive(self.d_in, "d_in")?;
        positive(self.d_model, "d_model")?;
        positive(self.n_heads, "n_heads")?;
        positive(self.n_clusters, "n_clusters")?;
        positive(self.mlp_ratio, "mlp_ratio")?;
        positive(self.attn_hidden, "attn_hidden")?;
        if self.n_classes < 2 {
            return Err(Error::config(format!(
                "n_classes must be ≥ 2, got {}",
                self.n_classes
            )));
        }
        if self.n_heads > self.d_model {
            return Err(Error::config(format!(
                "n_heads ({}) exceeds d_model ({}): heads would be empty",
                self.n_heads, self.d_model
            )));
        }
        if !(0.0..1.0).contains(&self.dropout_p) {
            return Err(Error::config(format!(
                "dropout_p must lie in [0, 1), got {}",
                self.dropout_p
            )));
        }
        Ok(())
    }
}

/// Weight + bias of one affine map; `w` is `[fan_in, fan_out]`.
#[derive(Debug, Clone)]
pub struct LinearParams<T: Scalar> {
    pub w: Tensor<T>,
    pub b: Tensor<T>,
}

impl<T: Scalar> LinearParams<T> {
    pub fn apply(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        x.matmul(&self.w)?.add(&self.b)
    }
}

#[derive(Debug, Clone)]
pub struct LayerNormParams<T: Scalar> {
    pub gamma: Tensor<T>,
    pub beta: Tensor<T>,
}

impl<T: Scalar> LayerNormParams<T> {
    pub fn apply(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        x.layer_norm(&self.gamma, &self.beta, LN_EPS)
    }
}

/// One residual block: pre-norm attention sublayer + pre-norm MLP sublayer.
#[derive(Debug, Clone)]
pub struct BlockParams<T: Scalar> {
    pub ln1: LayerNormParams<T>,
    pub attn: AttentionParams<T>,
    pub ln2: LayerNormParams<T>,
    pub mlp_in: LinearParams<T>,
    pub mlp_out: LinearParams<T>,
}

/// Parameters of the MIL pooling head.
#[derive(Debug, Clone)]
pub enum AggregatorParams<T: Scalar> {
    Mean,
    Attn {
        v: LinearParams<T>,
        w: LinearParams<T>,
    },
    GAttn {
        v: LinearParams<T>,
        u: LinearParams<T>,
        w: LinearParams<T>,
    },
}

/// The complete named-parameter set of one model.
#[derive(Debug, Clone)]
pub struct ModelState<T: Scalar> {
    pub config: CaprmilConfig,
    pub proj: LinearParams<T>,
    pub proj_ln: LayerNormParams<T>,
    pub blocks: Vec<BlockParams<T>>,
    pub aggregator: AggregatorParams<T>,
    pub classifier: LinearParams<T>,
}

/// Orthonormal matrix `[rows, cols]` (row-major) from a seeded Gaussian via
/// modified Gram–Schmidt with a re-orthogonalization pass — computed in f64
/// so casting to f32 stays orthonormal well within 1e-6. If `cols ≤ rows`
/// the columns are orthonormal, otherwise the rows. Normalization by the
/// (positive) column norms fixes signs deterministically, which is the
/// QR-with-positive-diagonal convention.
fn orthogonal_init(rows: usize, cols: usize, rng: &mut Rng) -> Vec<f64> {
    let mut a: Vec<f64> = (0..rows * cols).map(|_| rng.normal()).collect();
    let (vecs, len, base): (usize, usize, fn(usize, usize, usize) -> usize) = if cols <= rows {
        (cols, rows, |j, k, cols| k * cols + j)
    } else {
        (rows, cols, |j, k, cols| j * cols + k)
    };
    for j in 0..vecs {
        for _pass in 0..2 {
            for i in 0..j {
                let mut dot = 0.0;
                for k in 0..len {
                    dot += a[base(i, k, cols)] * a[base(j, k, cols)];
                }
                for k in 0..len {
                    let qi = a[base(i, k, cols)];
                    a[base(j, k, cols)] -= dot * qi;
                }
            }
        }
        let norm = (0..len)
            .map(|k| a[base(j, k, cols)] * a[base(j, k, cols)])
            .sum::<f64>()
            .sqrt();
        for k in 0..len {
            a[base(j, k, cols)] /= norm;
        }
    }
    a
}

/// FNV-1a hash of a parameter name; used to give every tensor its own
/// deterministic random stream regardless of creation order.
pub(crate) fn name_tag(name: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in name.as_bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

fn uniform_leaf<T: Scalar>(seed: u64, name: &str, shape: &[usize], fan_in: usize) -> Tensor<T> {
    let bound = 1.0 / (fan_in as f64).sqrt();
    let mut rng = Rng::stream(seed, name_tag(name));
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| T::from_f64(rng.uniform_in(-bound, bound)))
        .collect();
    Tensor::leaf(data, shape).expect("init shape")
}

fn linear_init<T: Scalar>(seed: u64, name: &str, fan_in: usize, fan_out: usize) -> LinearParams<T> {
    LinearParams {
        w: uniform_leaf(seed, &format!("{name}.w"), &[fan_in, fan_out], fan_in),
        b: uniform_leaf(seed, &format!("{name}.b"), &[fan_out], fan_in),
    }
}

fn layer_norm_init<T: Scalar>(width: usize) -> LayerNormParams<T> {
    LayerNormParams {
        gamma: Tensor::leaf(vec![T::ONE; width], &[width]).expect("ln gamma"),
        beta: Tensor::leaf(vec![T::ZERO; width], &[width]).expect("ln beta"),
    }
}

/// Build a freshly initialized model: fan-in uniform linear layers,
/// identity LayerNorms, orthogonal cluster projection, τ = 0.5 per head.
/// Deterministic in `seed` — each parameter draws from its own stream keyed
/// by name, so two calls with the same seed are bit-identical.
pub fn init_model<T: Scalar>(config: &CaprmilConfig, seed: u64) -> Result<ModelState<T>> {
    config.validate()?;
    let d = config.d_model;
    let d_head = config.d_head();
    let inner = config.inner();
    let hidden = config.mlp_ratio * d;

    let blocks = (0..config.n_blocks)
        .map(|t| {
            let p = |field: &str| format!("block{t}.attn.{field}");
            let mut cluster_rng = Rng::stream(seed, name_tag(&p("w_cluster")));
            let w_cluster_data: Vec<T> = orthogonal_init(d_head, config.n_clusters, &mut cluster_rng)
                .into_iter()
                .map(T::from_f64)
                .collect();
            let attn = AttentionParams {
                w_x: uniform_leaf(seed, &p("w_x"), &[d, inner], d),
                b_x: uniform_leaf(seed, &p("b_x"), &[inner], d),
                w_f: uniform_leaf(seed, &p("w_f"), &[d, inner], d),
                b_f: uniform_leaf(seed, &p("b_f"), &[inner], d),
                w_cluster: Tensor::leaf(w_cluster_data, &[d_head, config.n_clusters])?,
                b_cluster: uniform_leaf(seed, &p("b_cluster"), &[config.n_clusters], d_head),
                tau: Tensor::leaf(vec![T::from_f64(0.5); config.n_heads], &[config.n_heads])?,
                w_q: uniform_leaf(seed, &p("w_q"), &[d_head, d_head], d_head),
                b_q: uniform_leaf(seed, &p("b_q"), &[d_head], d_head),
                w_k: uniform_leaf(seed, &p("w_k"), &[d_head, d_head], d_head),
                b_k: uniform_leaf(seed, &p("b_k"), &[d_head], d_head),
                w_v: uniform_leaf(seed, &p("w_v"), &[d_head, d_head], d_head),
                b_v: uniform_leaf(seed, &p("b_v"), &[d_head], d_head),
                w_out: uniform_leaf(seed, &p("w_out"), &[inner, d], inner),
                b_out: uniform_leaf(seed, &p("b_out"), &[d], inner),
                n_heads: config.n_heads,
                n_clusters: config.n_clusters,
                dropout_p: config.dropout_p,
            };
            Ok(BlockParams {
                ln1: layer_norm_init(d),
                attn,
                ln2: layer_norm_init(d),
                mlp_in: linear_init(seed, &format!("block{t}.mlp_in"), d, hidden),
                mlp_out: linear_init(seed, &format!("block{t}.mlp_out"), hidden, d),
            })
        })
        .collect::<Result<Vec<_>>>()?;

    let aggregator = match config.aggregator {
        Aggregator::Mean => AggregatorParams::Mean,
        Aggregator::Attn => AggregatorParams::Attn {
            v: linear_init(seed, "agg.v", d, config.attn_hidden),
            w: linear_init(seed, "agg.w", config.attn_hidden, 1),
        },
        Aggregator::GAttn => AggregatorParams::GAttn {
            v: linear_init(seed, "agg.v", d, config.attn_hidden),
            u: linear_init(seed, "agg.u", d, config.attn_hidden),
            w: linear_init(seed, "agg.w", config.attn_hidden, 1),
        },
    };

    Ok(ModelState {
        config: config.clone(),
        proj: linear_init(seed, "proj", config.d_in, d),
        proj_ln: layer_norm_init(d),
        blocks,
        aggregator,
        classifier: linear_init(seed, "classifier", d, config.n_classes),
    })
}

/// The (name, shape) of every parameter a model built from `config` will
/// have, in canonical order — derived by pure arithmetic, without allocating
/// any tensor. The checkpoint reader uses this to vet a file's records
/// before building anything, and `for_each_param` is tested to agree with it
/// exactly.
pub fn param_shapes(config: &CaprmilConfig) -> Vec<(String, Vec<usize>)> {
    let d = config.d_model;
    let dh = config.d_head();
    let inner = config.inner();
    let hidden = config.mlp_ratio * d;
    let m = config.n_clusters;
    let l = config.attn_hidden;

    let mut out: Vec<(String, Vec<usize>)> = Vec::new();
    let mut push = |name: String, shape: &[usize]| out.push((name, shape.to_vec()));
    push("proj.w".into(), &[config.d_in, d]);
    push("proj.b".into(), &[d]);
    push("proj.ln.gamma".into(), &[d]);
    push("proj.ln.beta".into(), &[d]);
    for t in 0..config.n_blocks {
        let mut p = |field: &str, shape: &[usize]| push(format!("block{t}.{field}"), shape);
        p("ln1.gamma", &[d]);
        p("ln1.beta", &[d]);
        p("attn.w_x", &[d, inner]);
        p("attn.b_x", &[inner]);
        p("attn.w_f", &[d, inner]);
        p("attn.b_f", &[inner]);
        p("attn.w_cluster", &[dh, m]);
        p("attn.b_cluster", &[m]);
        p("attn.tau", &[config.n_heads]);
        p("attn.w_q", &[dh, dh]);
        p("attn.b_q", &[dh]);
        p("attn.w_k", &[dh, dh]);
        p("attn.b_k", &[dh]);
        p("attn.w_v", &[dh, dh]);
        p("attn.b_v", &[dh]);
        p("attn.w_out", &[inner, d]);
        p("attn.b_out", &[d]);
        p("ln2.gamma", &[d]);
        p("ln2.beta", &[d]);
        p("mlp_in.w", &[d, hidden]);
        p("mlp_in.b", &[hidden]);
        p("mlp_out.w", &[hidden, d]);
        p("mlp_out.b", &[d]);
    }
    match config.aggregator {
        Aggregator::Mean => {}
        Aggregator::Attn => {
            push("agg.v.w".into(), &[d, l]);
            push("agg.v.b".into(), &[l]);
            push("agg.w.w".into(), &[l, 1]);
            push("agg.w.b".into(), &[1]);
        }
        Aggregator::GAttn => {
            push("agg.v.w".into(), &[d, l]);
            push("agg.v.b".into(), &[l]);
            push("agg.u.w".into(), &[d, l]);
            push("agg.u.b".into(), &[l]);
            push("agg.w.w".into(), &[l, 1]);
            push("agg.w.b".into(), &[1]);
        }
    }
    push("classifier.w".into(), &[d, config.n_classes]);
    push("classifier.b".into(), &[config.n_classes]);
    out
}

impl<T: Scalar> ModelState<T> {
    /// Visit every parameter in canonical order (the order the checkpoint
    /// format and the optimizer use).
    pub fn for_each_param(&self, mut f: impl FnMut(&str, &Tensor<T>)) {
        let mut visit = |name: String, t: &Tensor<T>| f(&name, t);
        visit("proj.w".into(), &self.proj.w);
        visit("proj.b".into(), &self.proj.b);
        visit("proj.ln.gamma".into(), &self.proj_ln.gamma);
        visit("proj.ln.beta".into(), &self.proj_ln.beta);
        for (t, b) in self.blocks.iter().enumerate() {
            let p = |field: &str| format!("block{t}.{field}");
            visit(p("ln1.gamma"), &b.ln1.gamma);
            visit(p("ln1.beta"), &b.ln1.beta);
            visit(p("attn.w_x"), &b.attn.w_x);
            visit(p("attn.b_x"), &b.attn.b_x);
            visit(p("attn.w_f"), &b.attn.w_f);
            visit(p("attn.b_f"), &b.attn.b_f);
            visit(p("attn.w_cluster"), &b.attn.w_cluster);
            visit(p("attn.b_cluster"), &b.attn.b_cluster);
            visit(p("attn.tau"), &b.attn.tau);
            visit(p("attn.w_q"), &b.attn.w_q);
            visit(p("attn.b_q"), &b.attn.b_q);
            visit(p("attn.w_k"), &b.attn.w_k);
            visit(p("attn.b_k"), &b.attn.b_k);
            visit(p("attn.w_v"), &b.attn.w_v);
            visit(p("attn.b_v"), &b.attn.b_v);
            visit(p("attn.w_out"), &b.attn.w_out);
            visit(p("attn.b_out"), &b.attn.b_out);
            visit(p("ln2.gamma"), &b.ln2.gamma);
            visit(p("ln2.beta"), &b.ln2.beta);
            visit(p("mlp_in.w"), &b.mlp_in.w);
            visit(p("mlp_in.b"), &b.mlp_in.b);
            visit(p("mlp_out.w"), &b.mlp_out.w);
            visit(p("mlp_out.b"), &b.mlp_out.b);
        }
        match &self.aggregator {
            AggregatorParams::Mean => {}
            AggregatorParams::Attn { v, w } => {
                visit("agg.v.w".into(), &v.w);
                visit("agg.v.b".into(), &v.b);
                visit("agg.w.w".into(), &w.w);
                visit("agg.w.b".into(), &w.b);
            }
            AggregatorParams::GAttn { v, u, w } => {
                visit("agg.v.w".into(), &v.w);
                visit("agg.v.b".into(), &v.b);
                visit("agg.u.w".into(), &u.w);
                visit("agg.u.b".into(), &u.b);
                visit("agg.w.w".into(), &w.w);
                visit("agg.w.b".into(), &w.b);
            }
        }
        visit("classifier.w".into(), &self.classifier.w);
        visit("classifier.b".into(), &self.classifier.b);
    }

    /// Same visitation order as [`for_each_param`](Self::for_each_param),
    /// with mutable access so the optimizer can swap updated tensors in.
    pub fn for_each_param_mut(&mut self, mut f: impl FnMut(&str, &mut Tensor<T>)) {
        let mut visit = |name: String, t: &mut Tensor<T>| f(&name, t);
        visit("proj.w".into(), &mut self.proj.w);
        visit("proj.b".into(), &mut self.proj.b);
        visit("proj.ln.gamma".into(), &mut self.proj_ln.gamma);
        visit("proj.ln.beta".into(), &mut self.proj_ln.beta);
        for (t, b) in self.blocks.iter_mut().enumerate() {
            let p = |field: &str| format!("block{t}.{field}");
            visit(p("ln1.gamma"), &mut b.ln1.gamma);
            visit(p("ln1.beta"), &mut b.ln1.beta);
            visit(p("attn.w_x"), &mut b.attn.w_x);
            visit(p("attn.b_x"), &mut b.attn.b_x);
            visit(p("attn.w_f"), &mut b.attn.w_f);
            visit(p("attn.b_f"), &mut b.attn.b_f);
            visit(p("attn.w_cluster"), &mut b.attn.w_cluster);
            visit(p("attn.b_cluster"), &mut b.attn.b_cluster);
            visit(p("attn.tau"), &mut b.attn.tau);
            visit(p("attn.w_q"), &mut b.attn.w_q);
            visit(p("attn.b_q"), &mut b.attn.b_q);
            visit(p("attn.w_k"), &mut b.attn.w_k);
            visit(p("attn.b_k"), &mut b.attn.b_k);
            visit(p("attn.w_v"), &mut b.attn.w_v);
            visit(p("attn.b_v"), &mut b.attn.b_v);
            visit(p("attn.w_out"), &mut b.attn.w_out);
            visit(p("attn.b_out"), &mut b.attn.b_out);
            visit(p("ln2.gamma"), &mut b.ln2.gamma);
            visit(p("ln2.beta"), &mut b.ln2.beta);
            visit(p("mlp_in.w"), &mut b.mlp_in.w);
            visit(p("mlp_in.b"), &mut b.mlp_in.b);
            visit(p("mlp_out.w"), &mut b.mlp_out.w);
            visit(p("mlp_out.b"), &mut b.mlp_out.b);
        }
        match &mut self.aggregator {
            AggregatorParams::Mean => {}
            AggregatorParams::Attn { v, w } => {
                visit("agg.v.w".into(), &mut v.w);
                visit("agg.v.b".into(), &mut v.b);
                visit("agg.w.w".into(), &mut w.w);
                visit("agg.w.b".into(), &mut w.b);
            }
            AggregatorParams::GAttn { v, u, w } => {
                visit("agg.v.w".into(), &mut v.w);
                visit("agg.v.b".into(), &mut v.b);
                visit("agg.u.w".into(), &mut u.w);
                visit("agg.u.b".into(), &mut u.b);
                visit("agg.w.w".into(), &mut w.w);
                visit("agg.w.b".into(), &mut w.b);
            }
        }
        visit("classifier.w".into(), &mut self.classifier.w);
        visit("classifier.b".into(), &mut self.classifier.b);
    }

    /// Snapshot of (name, tensor) pairs in canonical order.
    pub fn named_params(&self) -> Vec<(String, Tensor<T>)> {
        let mut out = Vec::new();
        self.for_each_param(|name, t| out.push((name.to_string(), t.clone())));
        out
    }

    /// Total scalar parameter count (runtime tensor walk).
    pub fn n_params(&self) -> usize {
        let mut n = 0;
        self.for_each_param(|_, t| n += t.len());
        n
    }

    /// Clear accumulated gradients on every parameter.
    pub fn zero_grads(&self) {
        self.for_each_param(|_, t| t.zero_grad());
    }

    /// Element-width conversion (used by the f64 gradient-check mode).
    pub fn cast<U: Scalar>(&self) -> ModelState<U> {
        let lin = |l: &LinearParams<T>| LinearParams {
            w: l.w.cast::<U>(),
            b: l.b.cast::<U>(),
        };
        let ln = |l: &LayerNormParams<T>| LayerNormParams {
            gamma: l.gamma.cast::<U>(),
            beta: l.beta.cast::<U>(),
        };
        ModelState {
            config: self.config.clone(),
            proj: lin(&self.proj),
            proj_ln: ln(&self.proj_ln),
            blocks: self
                .blocks
                .iter()
                .map(|b| BlockParams {
                    ln1: ln(&b.ln1),
                    attn: AttentionParams {
                        w_x: b.attn.w_x.cast(),
                        b_x: b.attn.b_x.cast(),
                        w_f: b.attn.w_f.cast(),
                        b_f: b.attn.b_f.cast(),
                        w_cluster: b.attn.w_cluster.cast(),
                        b_cluster: b.attn.b_cluster.cast(),
                        tau: b.attn.tau.cast(),
                        w_q: b.attn.w_q.cast(),
                        b_q: b.attn.b_q.cast(),
                        w_k: b.attn.w_k.cast(),
                        b_k: b.attn.b_k.cast(),
                        w_v: b.attn.w_v.cast(),
                        b_v: b.attn.b_v.cast(),
                        w_out: b.attn.w_out.cast(),
                        b_out: b.attn.b_out.cast(),
                        n_heads: b.attn.n_heads,
                        n_clusters: b.attn.n_clusters,
                        dropout_p: b.attn.dropout_p,
                    },
                    ln2: ln(&b.ln2),
                    mlp_in: lin(&b.mlp_in),
                    mlp_out: lin(&b.mlp_out),
                })
                .collect(),
            aggregator: match &self.aggregator {
                AggregatorParams::Mean => AggregatorParams::Mean,
                AggregatorParams::Attn { v, w } => AggregatorParams::Attn {
                    v: lin(v),
                    w: lin(w),
                },
                AggregatorParams::GAttn { v, u, w } => AggregatorParams::GAttn {
                    v: lin(v),
                    u: lin(u),
                    w: lin(w),
                },
            },
            classifier: lin(&self.classifier),
        }
    }
}

/// Input projection: `Dropout(GELU(LN(Linear(X))))`, in exactly that order.
pub fn project_input<T: Scalar>(
    x: &Tensor<T>,
    state: &ModelState<T>,
    rng: &mut Rng,
    training: bool,
) -> Result<Tensor<T>> {
    let shape = x.shape();
    if shape.len() != 2 || shape[1] != state.config.d_in {
        return Err(Error::shape(format!(
            "expected input [N, {}], got {shape:?}",
            state.config.d_in
        )));
    }
    state
        .proj
        .apply(x)?
        .layer_norm(&state.proj_ln.gamma, &state.proj_ln.beta, LN_EPS)?
        .gelu()
        .dropout(state.config.dropout_p, rng, training)
}

/// One pre-norm residual block:
/// `H′ = H + Dropout(Attention(LN(H)))`, then
/// `H″ = H′ + Dropout(MLP(LN(H′)))`.
pub fn caprmil_block<T: Scalar>(
    h: &Tensor<T>,
    block: &BlockParams<T>,
    dropout_p: f64,
    rng: &mut Rng,
    training: bool,
    want_map: bool,
) -> Result<(Tensor<T>, Option<AssignmentMap>)> {
    let normed = block.ln1.apply(h)?;
    let (attn_out, map) = caprmil_attention(&normed, &block.attn, rng, training, want_map)?;
    let h = h.add(&attn_out.dropout(dropout_p, rng, training)?)?;

    let normed = block.ln2.apply(&h)?;
    let mlp = block.mlp_out.apply(&block.mlp_in.apply(&normed)?.gelu())?;
    let h = h.add(&mlp.dropout(dropout_p, rng, training)?)?;
    Ok((h, map))
}

/// Pool patch representations `[N, D]` into a slide embedding `[D]`.
///
/// Returns the pooled embedding and, for the attention heads, the `[N]`
/// pooling weights (a probability vector over patches).
pub fn aggregate<T: Scalar>(
    h: &Tensor<T>,
    params: &AggregatorParams<T>,
) -> Result<(Tensor<T>, Option<Tensor<T>>)> {
    let (n, d) = (h.shape()[0], h.shape()[1]);
    let pool = |logits: Tensor<T>| -> Result<(Tensor<T>, Option<Tensor<T>>)> {
        let weights = logits.reshape(&[1, n])?.softmax(1)?;
        let z = weights.matmul(h)?.reshape(&[d])?;
        Ok((z, Some(weights.reshape(&[n])?)))
    };
    match params {
        AggregatorParams::Mean => Ok((h.mean_axis(0)?, None)),
        AggregatorParams::Attn { v, w } => pool(w.apply(&v.apply(h)?.tanh_op())?),
        AggregatorParams::GAttn { v, u, w } => {
            let gated = v.apply(h)?.tanh_op().mul(&u.apply(h)?.sigmoid())?;
            pool(w.apply(&gated)?)
        }
    }
}

/// Full forward pass for one bag: projection → blocks → pool → classify.
///
/// Returns unnormalized class logits `[C]` and, when `want_maps` is set,
/// one assignment snapshot per block.
pub fn forward<T: Scalar>(
    state: &ModelState<T>,
    x: &Tensor<T>,
    rng: &mut Rng,
    training: bool,
    want_maps: bool,
) -> Result<(Tensor<T>, Vec<AssignmentMap>)> {
    let mut h = project_input(x, state, rng, training)?;
    let mut maps = Vec::new();
    for block in &state.blocks {
        let (next, map) = caprmil_block(&h, block, state.config.dropout_p, rng, training, want_maps)?;
        h = next;
        if let Some(m) = map {
            maps.push(m);
        }
    }
    let (z, _) = aggregate(&h, &state.aggregator)?;
    let c = state.config.n_classes;
    let logits = z
        .reshape(&[1, state.config.d_model])?
        .matmul(&state.classifier.w)?
        .add(&state.classifier.b)?
        .reshape(&[c])?;
    Ok((logits, maps))
}

/// Re-export of the aggregation epsilon for callers inspecting tokens.
pub const MODEL_AGGREGATION_EPS: f64 = AGGREGATION_EPS;
