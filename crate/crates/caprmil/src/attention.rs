//! Context-aware slice attention over bag tokens.
//!
//! The head replaces quadratic patch-to-patch attention with four stages that
//! are each linear in the number of patches `N`:
//!
//! 1. **Soft clustering** — every patch is softly assigned to `M` slice
//!    tokens per head: `W = softmax(x̃ · W_cluster / τ)` with a per-head
//!    learnable temperature `τ` and a single cluster projection shared across
//!    heads. Rows of `W` are probability vectors over tokens.
//! 2. **Aggregation** — each token is the assignment-weighted average of the
//!    patch value features: `S[m] = Σ_n W[n,m] f̃[n] / (Σ_n W[n,m] + ε)`.
//! 3. **Token self-attention** — ordinary scaled dot-product attention among
//!    the `M` tokens (Q/K/V projections shared across heads), which is cheap
//!    because `M` is tiny.
//! 4. **Broadcast** — every patch receives the context-refreshed tokens mixed
//!    by its own assignment row: `O[n] = Σ_m W[n,m] S'[m]`, so each output
//!    patch lies in the convex hull of the attended tokens; heads are then
//!    concatenated and projected back to the model width.
//!
//! Cost is `O(M·N·D + M²·D)` per head group instead of `O(N²·D)`.

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Stabilizer added to the per-token assignment mass before dividing.
pub const AGGREGATION_EPS: f64 = 1e-8;

/// Parameters of one slice-attention head group.
///
/// Shapes use `D` for the model width, `H` for heads, `D_h` for the per-head
/// width (`D / H` rounded down), `inner = H · D_h`, and `M` for tokens.
#[derive(Debug, Clone)]
pub struct AttentionParams<T: Scalar> {
    /// Patch geometry projection `[D, inner]` and bias `[inner]`.
    pub w_x: Tensor<T>,
    pub b_x: Tensor<T>,
    /// Patch value projection `[D, inner]` and bias `[inner]`.
    pub w_f: Tensor<T>,
    pub b_f: Tensor<T>,
    /// Cluster projection `[D_h, M]`, shared by all heads; orthogonal at init.
    pub w_cluster: Tensor<T>,
    pub b_cluster: Tensor<T>,
    /// Per-head temperature `[H]`, strictly positive.
    pub tau: Tensor<T>,
    /// Token attention projections `[D_h, D_h]` with biases `[D_h]`,
    /// shared across heads.
    pub w_q: Tensor<T>,
    pub b_q: Tensor<T>,
    pub w_k: Tensor<T>,
    pub b_k: Tensor<T>,
    pub w_v: Tensor<T>,
    pub b_v: Tensor<T>,
    /// Output projection `[inner, D]` and bias `[D]`.
    pub w_out: Tensor<T>,
    pub b_out: Tensor<T>,
    pub n_heads: usize,
    pub n_clusters: usize,
    /// Dropout applied to the token-attention output and nowhere else inside
    /// the head (the surrounding block has its own residual dropout).
    pub dropout_p: f64,
}

impl<T: Scalar> AttentionParams<T> {
    /// Per-head width the projections were built with.
    pub fn d_head(&self) -> usize {
        self.w_cluster.shape()[0]
    }
}

/// Patch-to-token assignment snapshot from one forward pass.
///
/// `weights` is `[H, N, M]` row-major; every `[n, :]` row is a probability
/// vector. `mass` is `[H, M]`: the total assignment each token collected
/// (column sums of `weights`). Data is detached from the autodiff graph and
/// stored as `f64` regardless of the model's element type.
#[derive(Debug, Clone)]
pub struct AssignmentMap {
    pub n_heads: usize,
    pub n_patches: usize,
    pub n_clusters: usize,
    pub weights: Vec<f64>,
    pub mass: Vec<f64>,
}

impl AssignmentMap {
    /// Assignment weight of `patch` to `token` in `head`.
    pub fn weight(&self, head: usize, patch: usize, token: usize) -> f64 {
        self.weights[(head * self.n_patches + patch) * self.n_clusters + token]
    }

    /// Head-averaged assignment weight of `patch` to `token`.
    pub fn mean_weight(&self, patch: usize, token: usize) -> f64 {
        (0..self.n_heads)
            .map(|h| self.weight(h, patch, token))
            .sum::<f64>()
            / self.n_heads as f64
    }
}

/// Stage 1: project patches and softly assign them to tokens.
///
/// `hidden` is `[N, D]` (bags run one at a time). Returns the per-head
/// geometry features `x̃ [H, N, D_h]`, value features `f̃ [H, N, D_h]`, and
/// assignment weights `W = softmax(x̃ W_cluster / τ)` of shape `[H, N, M]`.
pub fn soft_cluster<T: Scalar>(
    hidden: &Tensor<T>,
    params: &AttentionParams<T>,
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
    let shape = hidden.shape();
    if shape.len() != 2 {
        return Err(Error::shape(format!(
            "attention expects [N, D] input, got {shape:?}"
        )));
    }
    let (n, d) = (shape[0], shape[1]);
    if params.w_x.shape()[0] != d {
        return Err(Error::shape(format!(
            "attention built for width {} applied to width {d}",
            params.w_x.shape()[0]
        )));
    }
    let heads = params.n_heads;
    let d_head = params.d_head();

    let split = |t: Tensor<T>| -> Result<Tensor<T>> {
        t.reshape(&[n, heads, d_head])?.permute(&[1, 0, 2])
    };
    let x_heads = split(hidden.matmul(&params.w_x)?.add(&params.b_x)?)?;
    let f_heads = split(hidden.matmul(&params.w_f)?.add(&params.b_f)?)?;

    let logits = x_heads
        .matmul(&params.w_cluster)?
        .add(&params.b_cluster)?;
    let tau_b = params.tau.reshape(&[heads, 1, 1])?;
    let weights = logits.div(&tau_b)?.softmax(2)?;
    Ok((x_heads, f_heads, weights))
}

/// Stage 2: assignment-weighted token aggregation.
///
/// Returns `(S, mass)` where `S` is `[H, M, D_h]` and `mass` is `[H, M]`,
/// with `S[m] = Σ_n W[n,m] f̃[n] / (mass[m] + eps)`.
pub fn aggregate_tokens<T: Scalar>(
    f_heads: &Tensor<T>,
    weights: &Tensor<T>,
    eps: f64,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let (h, m) = (weights.shape()[0], weights.shape()[2]);
    let numer = weights.permute(&[0, 2, 1])?.matmul(f_heads)?; // [H, M, D_h]
    let mass = weights.sum_axis(1)?; // [H, M]
    let denom = mass.add_scalar(T::from_f64(eps)).reshape(&[h, m, 1])?;
    Ok((numer.div(&denom)?, mass))
}

/// Stage 3: scaled dot-product self-attention among the `M` tokens.
pub fn token_self_attention<T: Scalar>(
    tokens: &Tensor<T>,
    params: &AttentionParams<T>,
    rng: &mut Rng,
    training: bool,
) -> Result<Tensor<T>> {
    let d_head = *tokens
        .shape()
        .last()
        .ok_or_else(|| Error::shape("token tensor has no feature axis"))?;
    let q = tokens.matmul(&params.w_q)?.add(&params.b_q)?;
    let k = tokens.matmul(&params.w_k)?.add(&params.b_k)?;
    let v = tokens.matmul(&params.w_v)?.add(&params.b_v)?;
    let scale = T::from_f64(1.0 / (d_head as f64).sqrt());
    let scores = q.matmul(&k.permute(&[0, 2, 1])?)?.scale(scale);
    let attn = scores.softmax(2)?;
    attn.matmul(&v)?.dropout(params.dropout_p, rng, training)
}

/// Stage 4: broadcast refreshed tokens back to patches and merge heads.
///
/// Per head, `O[n] = Σ_m W[n,m] S'[m]` — a convex combination. Heads are
/// concatenated to `[N, inner]` and projected by `W_out` to `[N, D]`.
pub fn broadcast_context<T: Scalar>(
    refreshed: &Tensor<T>,
    weights: &Tensor<T>,
    params: &AttentionParams<T>,
) -> Result<Tensor<T>> {
    let n = weights.shape()[1];
    let inner = params.w_out.shape()[0];
    let per_head = weights.matmul(refreshed)?; // [H, N, D_h]
    let merged = per_head.permute(&[1, 0, 2])?.reshape(&[n, inner])?;
    merged.matmul(&params.w_out)?.add(&params.b_out)
}

/// Full head: the four stages composed, with an optional detached snapshot
/// of the assignment weights for interpretability export.
///
/// `hidden` is `[N, D]`; returns `([N, D], Option<AssignmentMap>)`.
pub fn caprmil_attention<T: Scalar>(
    hidden: &Tensor<T>,
    params: &AttentionParams<T>,
    rng: &mut Rng,
    training: bool,
    want_map: bool,
) -> Result<(Tensor<T>, Option<AssignmentMap>)> {
    let (_x_heads, f_heads, weights) = soft_cluster(hidden, params)?;
    let (tokens, mass) = aggregate_tokens(&f_heads, &weights, AGGREGATION_EPS)?;
    let refreshed = token_self_attention(&tokens, params, rng, training)?;
    let out = broadcast_context(&refreshed, &weights, params)?;

    let map = want_map.then(|| AssignmentMap {
        n_heads: params.n_heads,
        n_patches: weights.shape()[1],
        n_clusters: params.n_clusters,
        weights: weights.data().iter().map(|&w| w.to_f64()).collect(),
        mass: mass.data().iter().map(|&w| w.to_f64()).collect(),
    });
    Ok((out, map))
}
