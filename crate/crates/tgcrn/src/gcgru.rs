//! Graph convolution-based gated recurrent unit.
//!
//! One recurrent cell: update and reset gates plus a candidate state, each
//! computed by a single-hop graph convolution over the time-aware
//! propagation matrix. Gate weights are factorized per node as the product
//! of a fused node+time embedding with a shared low-rank weight pool.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Graph, GraphRef};
use crate::scalar::{lit, Scalar};
use crate::tensor::{Tensor, TensorError};
use crate::timegraph::{TimeAwareGraph, TimeIndex};

/// Weight and bias pools for one cell.
///
/// Pools have first dimension `fused_dim = d_N + d_T`; a node's gate
/// weights are its fused embedding row times the pool, giving a
/// `(c_in + c_h) × c_h` matrix (stored flattened) and a `c_h` bias.
#[derive(Clone, Debug)]
pub struct CellParams<S> {
    pub w_update: Tensor<S>,
    pub w_reset: Tensor<S>,
    pub w_candidate: Tensor<S>,
    pub b_update: Tensor<S>,
    pub b_reset: Tensor<S>,
    pub b_candidate: Tensor<S>,
    pub c_in: usize,
    pub c_h: usize,
    pub fused_dim: usize,
}

impl<S: Scalar> CellParams<S> {
    /// Seeded uniform initialization on `[-1/sqrt(c_in+c_h), +1/sqrt(c_in+c_h)]`.
    pub fn init(fused_dim: usize, c_in: usize, c_h: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let k = c_in + c_h;
        let bound = 1.0 / (k as f64).sqrt();
        let mut draw = |rows: usize, cols: usize| {
            let data: Vec<S> =
                (0..rows * cols).map(|_| lit(rng.gen_range(-bound..=bound))).collect();
            Tensor::from_parts(vec![rows, cols], data)
        };
        CellParams {
            w_update: draw(fused_dim, k * c_h),
            w_reset: draw(fused_dim, k * c_h),
            w_candidate: draw(fused_dim, k * c_h),
            b_update: draw(fused_dim, c_h),
            b_reset: draw(fused_dim, c_h),
            b_candidate: draw(fused_dim, c_h),
            c_in,
            c_h,
            fused_dim,
        }
    }
}

/// Graph-node handles for one cell's pools within a recorded forward pass.
#[derive(Clone, Copy, Debug)]
pub struct CellParamRefs {
    pub w_update: GraphRef,
    pub w_reset: GraphRef,
    pub w_candidate: GraphRef,
    pub b_update: GraphRef,
    pub b_reset: GraphRef,
    pub b_candidate: GraphRef,
}

/// Hidden state and gate activations produced by one cell step.
#[derive(Clone, Copy, Debug)]
pub struct StepOutput {
    pub hidden: GraphRef,
    pub update_gate: GraphRef,
    pub reset_gate: GraphRef,
    pub candidate: GraphRef,
}

/// Per-node concatenation `[E_ν ; E_τ[slot]]`: the slot's time embedding
/// row broadcast to all node rows.
pub fn fused_embedding<S: Scalar>(
    g: &mut Graph<S>,
    node_table: GraphRef,
    time_table: GraphRef,
    slot: TimeIndex,
) -> Result<GraphRef, TensorError> {
    let (n, _) = g.value(node_table).dims2("fused_embedding")?;
    let time_row = g.gather_rows(time_table, &[slot.slot()])?;
    let ones = g.constant(Tensor::ones(vec![n, 1]));
    let broadcast = g.matmul(ones, time_row)?;
    g.concat(node_table, broadcast)
}

/// One-hop graph convolution with node-factorized weights:
/// `out_i = (prop · features)_i · (fused_i · pool_w) + fused_i · pool_b`.
pub fn graph_conv<S: Scalar>(
    g: &mut Graph<S>,
    prop: GraphRef,
    features: GraphRef,
    fused: GraphRef,
    pool_w: GraphRef,
    pool_b: GraphRef,
) -> Result<GraphRef, TensorError> {
    let (n, k) = g.value(features).dims2("graph_conv")?;
    let (_, kc) = g.value(pool_w).dims2("graph_conv")?;
    if kc % k != 0 {
        return Err(TensorError::ShapeMismatch {
            op: "graph_conv",
            left: g.value(features).shape().to_vec(),
            right: g.value(pool_w).shape().to_vec(),
        });
    }
    let c = kc / k;
    let support = g.matmul(prop, features)?;
    let weights_flat = g.matmul(fused, pool_w)?;
    let weights = g.reshape(weights_flat, vec![n, k, c])?;
    let conv = g.row_batch_matmul(support, weights)?;
    let bias = g.matmul(fused, pool_b)?;
    g.add(conv, bias)
}

/// One recurrent step over the time-aware graph.
///
/// `z = σ(conv([x;h]))`, `r = σ(conv([x;h]))`, `ĥ = tanh(conv([x;r⊙h]))`,
/// `h' = (1−z)⊙h + z⊙ĥ`. Non-finite activations surface as a numeric
/// failure naming the gate.
pub fn gcgru_step<S: Scalar>(
    g: &mut Graph<S>,
    x_t: GraphRef,
    hidden: GraphRef,
    graph: &TimeAwareGraph,
    fused: GraphRef,
    params: &CellParamRefs,
) -> Result<StepOutput, TensorError> {
    let prop = graph.propagation;

    let cat = g.concat(x_t, hidden)?;
    let z_pre = graph_conv(g, prop, cat, fused, params.w_update, params.b_update)
        .map_err(|e| name_gate(e, "update gate"))?;
    let update_gate = g.sigmoid(z_pre).map_err(|e| name_gate(e, "update gate"))?;

    let r_pre = graph_conv(g, prop, cat, fused, params.w_reset, params.b_reset)
        .map_err(|e| name_gate(e, "reset gate"))?;
    let reset_gate = g.sigmoid(r_pre).map_err(|e| name_gate(e, "reset gate"))?;

    let gated_hidden = g.hadamard(reset_gate, hidden)?;
    let cat_reset = g.concat(x_t, gated_hidden)?;
    let c_pre = graph_conv(g, prop, cat_reset, fused, params.w_candidate, params.b_candidate)
        .map_err(|e| name_gate(e, "candidate state"))?;
    let candidate = g.tanh(c_pre).map_err(|e| name_gate(e, "candidate state"))?;

    let neg_z = g.scale(update_gate, -S::one())?;
    let keep = g.add_scalar(neg_z, S::one())?;
    let kept = g.hadamard(keep, hidden)?;
    let injected = g.hadamard(update_gate, candidate)?;
    let hidden_next = g.add(kept, injected).map_err(|e| name_gate(e, "hidden update"))?;

    Ok(StepOutput { hidden: hidden_next, update_gate, reset_gate, candidate })
}

fn name_gate(e: TensorError, gate: &'static str) -> TensorError {
    match e {
        TensorError::NonFinite { .. } => TensorError::NonFinite { op: gate },
        other => other,
    }
}
