//! The full forecasting model: multi-layer encoder and decoder of GCGRU
//! cells over per-step time-aware graphs, an affine output head, the
//! joint error + time-discrepancy objective, and the checkpoint format.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, GraphRef, ParamId};
use crate::data::{Normalizer, WindowBatch};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::gcgru::{self, CellParamRefs, CellParams};
use crate::tensor::{Tensor as GenericTensor, TensorError};
use crate::timegraph::{
    self, EmbeddingTables, TimeAwareGraph, TimeDistanceSamples, TimeIndex, TimegraphError,
};
use crate::Tensor;

/// Errors raised while configuring, running, or persisting the model.
#[derive(Debug)]
pub enum ModelError {
    Config(String),
    /// A caller violated an operation contract (e.g. non-consecutive slots).
    Contract(String),
    Tensor(TensorError),
    Sampling(TimegraphError),
    Checkpoint(String),
    Io { path: String, source: std::io::Error },
}

impl fmt::Display for ModelError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ModelError::Config(m) => write!(f, "configuration error: {m}"),
            ModelError::Contract(m) => write!(f, "contract violation: {m}"),
            ModelError::Tensor(e) => write!(f, "tensor error: {e}"),
            ModelError::Sampling(e) => write!(f, "sampling error: {e}"),
            ModelError::Checkpoint(m) => write!(f, "checkpoint error: {m}"),
            ModelError::Io { path, source } => write!(f, "io error on {path}: {source}"),
        }
    }
}

impl std::error::Error for ModelError {}

impl From<TensorError> for ModelError {
    fn from(e: TensorError) -> Self {
        ModelError::Tensor(e)
    }
}

impl From<TimegraphError> for ModelError {
    fn from(e: TimegraphError) -> Self {
        ModelError::Sampling(e)
    }
}

/// Ablation switches mirroring the study variants.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Ablations {
    /// Static self-learning graph; disables time terms and the TDL loss.
    pub tagsl_off: bool,
    /// Graph from node affinity + trend only; drops PDF and the TDL loss.
    pub te_only: bool,
    /// Drop the time-discrepancy loss term.
    pub tdl_off: bool,
    /// Drop the periodic discriminant multiplier.
    pub pdf_off: bool,
    /// Replace the recursive decoder with one affine map to all horizons.
    pub encdec_off: bool,
}

/// Complete model hyperparameters; serialized canonically into checkpoints.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub num_nodes: usize,
    pub d_in: usize,
    pub d_out: usize,
    /// History length P.
    pub history: usize,
    /// Horizon length Q.
    pub horizon: usize,
    #[serde(default = "default_layers")]
    pub layers: usize,
    #[serde(default = "default_hidden")]
    pub hidden: usize,
    #[serde(default = "default_node_dim")]
    pub node_dim: usize,
    #[serde(default = "default_time_dim")]
    pub time_dim: usize,
    /// Saturation factor of the periodic discriminant.
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    /// Weight of the time-discrepancy loss.
    #[serde(default = "default_lambda")]
    pub lambda: f64,
    /// Adjacent sampling range; defaults to P/2.
    #[serde(default)]
    pub gamma_adjacent: Option<usize>,
    /// Mid-distance sampling range; defaults to the whole window.
    #[serde(default)]
    pub gamma_mid: Option<usize>,
    pub slots_per_day: usize,
    /// Predecessor of slot 0 wraps to the last slot when set.
    #[serde(default = "default_true")]
    pub wrap_predecessor: bool,
    #[serde(default)]
    pub ablations: Ablations,
    #[serde(default = "default_seed")]
    pub rng_seed: u64,
}

fn default_layers() -> usize {
    2
}
fn default_hidden() -> usize {
    64
}
fn default_node_dim() -> usize {
    64
}
fn default_time_dim() -> usize {
    32
}
fn default_alpha() -> f64 {
    0.3
}
fn default_lambda() -> f64 {
    0.1
}
fn default_true() -> bool {
    true
}
fn default_seed() -> u64 {
    1
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |m: String| Err(ModelError::Config(m));
        if self.num_nodes == 0 || self.d_in == 0 || self.d_out == 0 {
            return bad("num_nodes, d_in, and d_out must be positive".into());
        }
        if self.history == 0 || self.horizon == 0 || self.layers == 0 || self.hidden == 0 {
            return bad("history, horizon, layers, and hidden must be >= 1".into());
        }
        if self.node_dim == 0 || self.time_dim == 0 {
            return bad("node_dim and time_dim must be >= 1".into());
        }
        if self.alpha < 0.0 {
            return bad(format!("alpha must be >= 0, got {}", self.alpha));
        }
        if self.lambda < 0.0 {
            return bad(format!("lambda must be >= 0, got {}", self.lambda));
        }
        if self.slots_per_day == 0 {
            return bad("slots_per_day must be >= 1".into());
        }
        if self.ablations.tagsl_off && self.ablations.te_only {
            return bad("at most one of tagsl_off / te_only may be set".into());
        }
        Ok(())
    }

    /// Resolved adjacent sampling range (P/2, at least 1).
    pub fn gamma_adjacent(&self) -> usize {
        self.gamma_adjacent.unwrap_or((self.history / 2).max(1))
    }

    /// Resolved mid-distance range (whole window).
    pub fn gamma_mid(&self) -> usize {
        self.gamma_mid.unwrap_or(self.history + self.horizon)
    }

    /// Does this configuration train the time-discrepancy term?
    pub fn uses_tdl(&self) -> bool {
        !(self.ablations.tdl_off || self.ablations.te_only || self.ablations.tagsl_off)
            && self.lambda > 0.0
    }
}

// ── Parameter store ──────────────────────────────────────────────────

/// Named trainable tensors, addressed by stable [`ParamId`]s.
#[derive(Clone, Debug)]
pub struct ParamStore {
    entries: Vec<(String, Tensor)>,
}

impl ParamStore {
    fn new() -> Self {
        ParamStore { entries: Vec::new() }
    }

    fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        self.entries.push((name.into(), value.requiring_grad()));
        ParamId(self.entries.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.entries[id.0].1
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].0
    }

    pub fn set(&mut self, id: ParamId, value: Tensor) {
        debug_assert_eq!(self.entries[id.0].1.shape(), value.shape());
        self.entries[id.0].1 = value.requiring_grad();
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Tensor)> {
        self.entries.iter().enumerate().map(|(i, (n, t))| (ParamId(i), n.as_str(), t))
    }
}

#[derive(Clone, Copy, Debug)]
struct CellIds {
    w_update: ParamId,
    w_reset: ParamId,
    w_candidate: ParamId,
    b_update: ParamId,
    b_reset: ParamId,
    b_candidate: ParamId,
}

#[derive(Clone, Debug)]
#[allow(dead_code)]
struct ParamIds {
    node_table: ParamId,
    time_table: ParamId,
    encoder: Vec<CellIds>,
    decoder: Vec<CellIds>,
    head_weight: ParamId,
    head_bias: ParamId,
}

/// Graph-node handles for every parameter of one recorded forward pass.
struct Wiring {
    node_table: GraphRef,
    time_table: GraphRef,
    encoder: Vec<CellParamRefs>,
    decoder: Vec<CellParamRefs>,
    head_weight: GraphRef,
    head_bias: GraphRef,
}

/// Everything produced by one recorded batch forward pass.
pub struct BatchForward {
    pub graph: crate::Graph,
    /// Total objective (scalar node).
    pub loss: GraphRef,
    /// Mean absolute error term (scalar node).
    pub error_term: GraphRef,
    /// Time-discrepancy term before weighting, zero when disabled.
    pub time_term: Option<GraphRef>,
    /// Normalized predictions per sample and horizon step, each `[N, d_out]`.
    pub predictions: Vec<Vec<GraphRef>>,
}

impl BatchForward {
    pub fn loss_value(&self) -> f64 {
        self.graph.value(self.loss).item().expect("scalar loss")
    }

    pub fn error_value(&self) -> f64 {
        self.graph.value(self.error_term).item().expect("scalar error term")
    }

    pub fn time_value(&self) -> f64 {
        self.time_term.map_or(0.0, |t| self.graph.value(t).item().expect("scalar time term"))
    }
}

// ── The model ────────────────────────────────────────────────────────

/// Encoder-decoder forecaster over learned time-aware graphs.
#[derive(Debug)]
pub struct Tgcrn {
    config: ModelConfig,
    store: ParamStore,
    ids: ParamIds,
}

impl Tgcrn {
    /// Build a model with seeded parameter initialization.
    pub fn new(config: ModelConfig) -> Result<Self, ModelError> {
        config.validate()?;
        let seed = config.rng_seed;
        let mut store = ParamStore::new();

        let tables = EmbeddingTables::<f64>::init(
            config.num_nodes,
            config.node_dim,
            config.slots_per_day,
            config.time_dim,
            seed,
        );
        let node_table = store.add("node_table", tables.node_table);
        let time_table = store.add("time_table", tables.time_table);

        let fused_dim = config.node_dim + config.time_dim;
        let add_cell = |store: &mut ParamStore, scope: String, c_in: usize, cell_seed: u64| {
            let p = CellParams::<f64>::init(fused_dim, c_in, config.hidden, cell_seed);
            CellIds {
                w_update: store.add(format!("{scope}.w_update"), p.w_update),
                w_reset: store.add(format!("{scope}.w_reset"), p.w_reset),
                w_candidate: store.add(format!("{scope}.w_candidate"), p.w_candidate),
                b_update: store.add(format!("{scope}.b_update"), p.b_update),
                b_reset: store.add(format!("{scope}.b_reset"), p.b_reset),
                b_candidate: store.add(format!("{scope}.b_candidate"), p.b_candidate),
            }
        };

        let encoder: Vec<CellIds> = (0..config.layers)
            .map(|l| {
                let c_in = if l == 0 { config.d_in } else { config.hidden };
                add_cell(&mut store, format!("encoder.l{l}"), c_in, seed.wrapping_add(101 + l as u64))
            })
            .collect();
        let decoder: Vec<CellIds> = if config.ablations.encdec_off {
            Vec::new()
        } else {
            (0..config.layers)
                .map(|l| {
                    add_cell(
                        &mut store,
                        format!("decoder.l{l}"),
                        config.hidden,
                        seed.wrapping_add(201 + l as u64),
                    )
                })
                .collect()
        };

        let head_cols = if config.ablations.encdec_off {
            config.horizon * config.d_out
        } else {
            config.d_out
        };
        let mut head_rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(301));
        let bound = 1.0 / (config.hidden as f64).sqrt();
        let mut draw = |rows: usize, cols: usize| {
            let data: Vec<f64> =
                (0..rows * cols).map(|_| head_rng.gen_range(-bound..=bound)).collect();
            GenericTensor::from_parts(vec![rows, cols], data)
        };
        let head_weight = store.add("head.weight", draw(config.hidden, head_cols));
        let head_bias = store.add("head.bias", draw(1, head_cols));

        Ok(Tgcrn {
            config,
            store,
            ids: ParamIds { node_table, time_table, encoder, decoder, head_weight, head_bias },
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.store
    }

    pub fn set_param(&mut self, id: ParamId, value: Tensor) {
        self.store.set(id, value);
    }

    fn wire(&self, g: &mut crate::Graph) -> Wiring {
        let cell_refs = |g: &mut crate::Graph, ids: &CellIds, store: &ParamStore| CellParamRefs {
            w_update: g.param(ids.w_update, store.get(ids.w_update).clone()),
            w_reset: g.param(ids.w_reset, store.get(ids.w_reset).clone()),
            w_candidate: g.param(ids.w_candidate, store.get(ids.w_candidate).clone()),
            b_update: g.param(ids.b_update, store.get(ids.b_update).clone()),
            b_reset: g.param(ids.b_reset, store.get(ids.b_reset).clone()),
            b_candidate: g.param(ids.b_candidate, store.get(ids.b_candidate).clone()),
        };
        Wiring {
            node_table: g.param(self.ids.node_table, self.store.get(self.ids.node_table).clone()),
            time_table: g.param(self.ids.time_table, self.store.get(self.ids.time_table).clone()),
            encoder: self.ids.encoder.iter().map(|c| cell_refs(g, c, &self.store)).collect(),
            decoder: self.ids.decoder.iter().map(|c| cell_refs(g, c, &self.store)).collect(),
            head_weight: g.param(self.ids.head_weight, self.store.get(self.ids.head_weight).clone()),
            head_bias: g.param(self.ids.head_bias, self.store.get(self.ids.head_bias).clone()),
        }
    }
}

/// Per-forward caches for pieces shared across samples, steps, or layers.
struct ForwardCtx {
    fused_by_slot: BTreeMap<usize, GraphRef>,
    shared_adjacency: BTreeMap<usize, TimeAwareGraph>,
    static_adjacency: Option<TimeAwareGraph>,
    affinity: Option<GraphRef>,
}

impl ForwardCtx {
    fn new() -> Self {
        ForwardCtx {
            fused_by_slot: BTreeMap::new(),
            shared_adjacency: BTreeMap::new(),
            static_adjacency: None,
            affinity: None,
        }
    }
}

impl Tgcrn {
    fn fused_at(
        &self,
        g: &mut crate::Graph,
        w: &Wiring,
        ctx: &mut ForwardCtx,
        slot: TimeIndex,
    ) -> Result<GraphRef, TensorError> {
        if let Some(&f) = ctx.fused_by_slot.get(&slot.slot()) {
            return Ok(f);
        }
        let f = gcgru::fused_embedding(g, w.node_table, w.time_table, slot)?;
        ctx.fused_by_slot.insert(slot.slot(), f);
        Ok(f)
    }

    fn affinity(
        &self,
        g: &mut crate::Graph,
        w: &Wiring,
        ctx: &mut ForwardCtx,
    ) -> Result<GraphRef, TensorError> {
        if let Some(a) = ctx.affinity {
            return Ok(a);
        }
        let a = timegraph::static_affinity(g, w.node_table)?;
        ctx.affinity = Some(a);
        Ok(a)
    }

    /// Build (or reuse) the adjacency for one step. `layer1_input` feeds
    /// the periodic discriminant and is required whenever PDF is active.
    fn adjacency(
        &self,
        g: &mut crate::Graph,
        w: &Wiring,
        ctx: &mut ForwardCtx,
        slot: TimeIndex,
        layer1_input: GraphRef,
    ) -> Result<TimeAwareGraph, TensorError> {
        let ab = &self.config.ablations;
        if ab.tagsl_off {
            if let Some(static_graph) = ctx.static_adjacency {
                return Ok(static_graph);
            }
            let aff = self.affinity(g, w, ctx)?;
            let graph = timegraph::time_aware_adjacency(g, aff, None, None, 0.0, slot)?;
            ctx.static_adjacency = Some(graph);
            return Ok(graph);
        }

        let pdf_active = !(ab.te_only || ab.pdf_off) && self.config.alpha > 0.0;
        if !pdf_active {
            if let Some(&shared) = ctx.shared_adjacency.get(&slot.slot()) {
                return Ok(shared);
            }
        }
        let aff = self.affinity(g, w, ctx)?;
        let eta = timegraph::trend_factor(
            g,
            w.time_table,
            slot,
            self.config.slots_per_day,
            self.config.wrap_predecessor,
        )?;
        let graph = if pdf_active {
            let rho = timegraph::periodic_discriminant(g, layer1_input)?;
            timegraph::time_aware_adjacency(g, aff, Some(eta), Some(rho), self.config.alpha, slot)?
        } else {
            let shared = timegraph::time_aware_adjacency(g, aff, Some(eta), None, 0.0, slot)?;
            ctx.shared_adjacency.insert(slot.slot(), shared);
            shared
        };
        Ok(graph)
    }

    /// Unroll the encoder over one sample; returns the final hidden state
    /// of every layer.
    fn encode_sample(
        &self,
        g: &mut crate::Graph,
        w: &Wiring,
        ctx: &mut ForwardCtx,
        x_steps: &[GraphRef],
        slots: &[TimeIndex],
    ) -> Result<Vec<GraphRef>, ModelError> {
        let n = self.config.num_nodes;
        let zero_hidden = g.constant(GenericTensor::zeros(vec![n, self.config.hidden]));
        let mut hidden: Vec<GraphRef> = vec![zero_hidden; self.config.layers];
        for (t, (&x_t, &slot)) in x_steps.iter().zip(slots).enumerate() {
            let fused = self.fused_at(g, w, ctx, slot)?;
            let graph = self.adjacency(g, w, ctx, slot, x_t)?;
            let mut layer_input = x_t;
            for (l, cell) in w.encoder.iter().enumerate() {
                let out = gcgru::gcgru_step(g, layer_input, hidden[l], &graph, fused, cell)?;
                hidden[l] = out.hidden;
                layer_input = out.hidden;
            }
            let _ = t;
        }
        Ok(hidden)
    }

    /// Run the decoder for one sample; returns `[N, d_out]` per horizon step.
    fn decode_sample(
        &self,
        g: &mut crate::Graph,
        w: &Wiring,
        ctx: &mut ForwardCtx,
        enc_hidden: &[GraphRef],
        future_slots: &[TimeIndex],
    ) -> Result<Vec<GraphRef>, ModelError> {
        let top = *enc_hidden.last().expect("at least one layer");
        if self.config.ablations.encdec_off {
            // One affine map from the encoder top hidden to all horizons.
            let all = g.matmul(top, w.head_weight)?;
            let shifted = g.add(all, w.head_bias)?;
            let d_out = self.config.d_out;
            return (0..self.config.horizon)
                .map(|j| g.slice_cols(shifted, j * d_out, d_out).map_err(ModelError::from))
                .collect();
        }

        let mut hidden: Vec<GraphRef> = enc_hidden.to_vec();
        let mut step_input = top;
        let mut outputs = Vec::with_capacity(future_slots.len());
        for &slot in future_slots {
            let fused = self.fused_at(g, w, ctx, slot)?;
            let graph = self.adjacency(g, w, ctx, slot, step_input)?;
            let mut layer_input = step_input;
            for (l, cell) in w.decoder.iter().enumerate() {
                let out = gcgru::gcgru_step(g, layer_input, hidden[l], &graph, fused, cell)?;
                hidden[l] = out.hidden;
                layer_input = out.hidden;
            }
            step_input = *hidden.last().expect("at least one layer");
            let projected = g.matmul(step_input, w.head_weight)?;
            outputs.push(g.add(projected, w.head_bias)?);
        }
        Ok(outputs)
    }

    fn check_slots(&self, slots: &[TimeIndex]) -> Result<(), ModelError> {
        let s = self.config.slots_per_day;
        for pair in slots.windows(2) {
            if (pair[0].slot() + 1) % s != pair[1].slot() {
                return Err(ModelError::Contract(format!(
                    "window slots must be consecutive mod {s}: {} then {}",
                    pair[0].slot(),
                    pair[1].slot()
                )));
            }
        }
        Ok(())
    }

    /// Record a full batch forward pass: normalized predictions plus the
    /// joint loss `mean|y−ŷ| + λ·L_time`.
    pub fn forward_batch(
        &self,
        batch: &WindowBatch,
        normalizer: &Normalizer,
        samples: Option<&TimeDistanceSamples>,
    ) -> Result<BatchForward, ModelError> {
        let cfg = &self.config;
        let (p, q) = (cfg.history, cfg.horizon);
        let b = batch.batch_size();
        if b == 0 {
            return Err(ModelError::Contract("empty batch".into()));
        }

        let mut g = Graph::new();
        let w = self.wire(&mut g);
        let mut ctx = ForwardCtx::new();

        let mut predictions: Vec<Vec<GraphRef>> = Vec::with_capacity(b);
        let mut abs_err_sums: Vec<GraphRef> = Vec::with_capacity(b * q);
        for sample in 0..b {
            let slots = &batch.slots[sample];
            self.check_slots(slots)?;
            let x_steps: Vec<GraphRef> = (0..p)
                .map(|t| g.constant(normalizer.normalize(&batch.x_step(sample, t))))
                .collect();
            let enc_hidden = self.encode_sample(&mut g, &w, &mut ctx, &x_steps, &slots[..p])?;
            let y_steps = self.decode_sample(&mut g, &w, &mut ctx, &enc_hidden, &slots[p..])?;

            for (t, &y_hat) in y_steps.iter().enumerate() {
                let target = g.constant(normalizer.normalize(&batch.y_step(sample, t)));
                let diff = g.sub(y_hat, target)?;
                let abs = g.abs(diff)?;
                abs_err_sums.push(g.sum(abs)?);
            }
            predictions.push(y_steps);
        }

        let mut total = abs_err_sums[0];
        for &s in &abs_err_sums[1..] {
            total = g.add(total, s)?;
        }
        let count = (b * q * cfg.num_nodes * cfg.d_out) as f64;
        let error_term = g.scale(total, 1.0 / count)?;

        let (loss, time_term) = if cfg.uses_tdl() {
            let samples = samples.ok_or_else(|| {
                ModelError::Contract("time-discrepancy samples required when TDL is active".into())
            })?;
            let tdl = timegraph::time_discrepancy_loss(&mut g, w.time_table, samples)?;
            let weighted = g.scale(tdl, cfg.lambda)?;
            (g.add(error_term, weighted)?, Some(tdl))
        } else {
            (error_term, None)
        };

        Ok(BatchForward { graph: g, loss, error_term, time_term, predictions })
    }

    /// Forecast a batch; returns denormalized predictions `[B, Q, N, d_out]`.
    pub fn predict(
        &self,
        batch: &WindowBatch,
        normalizer: &Normalizer,
    ) -> Result<Tensor, ModelError> {
        let fwd = self.forward_no_loss(batch, normalizer)?;
        let (b, q) = (batch.batch_size(), self.config.horizon);
        let (n, d) = (self.config.num_nodes, self.config.d_out);
        let mut data = Vec::with_capacity(b * q * n * d);
        for sample in &fwd.predictions {
            for &step in sample {
                let denorm = normalizer.denormalize(fwd.graph.value(step));
                data.extend_from_slice(denorm.data());
            }
        }
        Ok(GenericTensor::from_parts(vec![b, q, n, d], data))
    }

    /// Forward pass without targets (prediction only); the loss fields are
    /// not meaningful and the error term is zero.
    fn forward_no_loss(
        &self,
        batch: &WindowBatch,
        normalizer: &Normalizer,
    ) -> Result<BatchForward, ModelError> {
        let cfg = &self.config;
        let p = cfg.history;
        let b = batch.batch_size();
        if b == 0 {
            return Err(ModelError::Contract("empty batch".into()));
        }
        let mut g = Graph::new();
        let w = self.wire(&mut g);
        let mut ctx = ForwardCtx::new();
        let mut predictions = Vec::with_capacity(b);
        for sample in 0..b {
            let slots = &batch.slots[sample];
            self.check_slots(slots)?;
            let x_steps: Vec<GraphRef> = (0..p)
                .map(|t| g.constant(normalizer.normalize(&batch.x_step(sample, t))))
                .collect();
            let enc_hidden = self.encode_sample(&mut g, &w, &mut ctx, &x_steps, &slots[..p])?;
            let y_steps = self.decode_sample(&mut g, &w, &mut ctx, &enc_hidden, &slots[p..])?;
            predictions.push(y_steps);
        }
        let zero = g.constant(GenericTensor::scalar(0.0));
        Ok(BatchForward { graph: g, loss: zero, error_term: zero, time_term: None, predictions })
    }

    /// Materialize the raw and normalized adjacency at one slot, feeding
    /// the periodic discriminant with the given normalized node state.
    pub fn adjacency_at(
        &self,
        slot: TimeIndex,
        node_state: &Tensor,
    ) -> Result<(Tensor, Tensor), ModelError> {
        if slot.slot() >= self.config.slots_per_day {
            return Err(ModelError::Contract(format!(
                "slot {} out of range for {} slots per day",
                slot.slot(),
                self.config.slots_per_day
            )));
        }
        let mut g = Graph::new();
        let w = self.wire(&mut g);
        let mut ctx = ForwardCtx::new();
        let state = g.constant(node_state.clone());
        let graph = self.adjacency(&mut g, &w, &mut ctx, slot, state)?;
        Ok((g.value(graph.raw).clone(), g.value(graph.propagation).clone()))
    }
}

// ── Checkpoint format ────────────────────────────────────────────────

const CHECKPOINT_MAGIC: &[u8; 6] = b"TGCRN1";

/// A deserialized checkpoint: the model config, every trainable parameter
/// in store order, and auxiliary named tensors (prefix `aux.`).
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub params: Vec<(String, Tensor)>,
    pub aux: Vec<(String, Tensor)>,
}

impl Checkpoint {
    pub fn of_model(model: &Tgcrn, aux: Vec<(String, Tensor)>) -> Checkpoint {
        Checkpoint {
            config: model.config.clone(),
            params: model
                .store
                .iter()
                .map(|(_, name, tensor)| (name.to_string(), tensor.detached()))
                .collect(),
            aux,
        }
    }

    pub fn aux_named(&self, name: &str) -> Option<&Tensor> {
        self.aux.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }
}

/// Serialize a checkpoint: magic bytes, canonical config JSON, then each
/// named tensor as (name length, name, rank, dims, little-endian f64 data).
pub fn write_checkpoint(path: &Path, cp: &Checkpoint) -> Result<(), ModelError> {
    let mut bytes = Vec::new();
    bytes.extend_from_slice(CHECKPOINT_MAGIC);
    let config = serde_json::to_string(&cp.config).expect("config serializes");
    bytes.extend_from_slice(&(config.len() as u32).to_le_bytes());
    bytes.extend_from_slice(config.as_bytes());
    let entries: Vec<&(String, Tensor)> = cp.params.iter().chain(cp.aux.iter()).collect();
    bytes.extend_from_slice(&(entries.len() as u32).to_le_bytes());
    for (name, tensor) in entries {
        bytes.extend_from_slice(&(name.len() as u32).to_le_bytes());
        bytes.extend_from_slice(name.as_bytes());
        bytes.extend_from_slice(&(tensor.rank() as u32).to_le_bytes());
        for &d in tensor.shape() {
            bytes.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for v in tensor.data() {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
    }
    fs::File::create(path)
        .and_then(|mut f| f.write_all(&bytes))
        .map_err(|source| ModelError::Io { path: path.display().to_string(), source })
}

/// Parse a checkpoint file.
pub fn read_checkpoint(path: &Path) -> Result<Checkpoint, ModelError> {
    let display = path.display().to_string();
    let bytes =
        fs::read(path).map_err(|source| ModelError::Io { path: display.clone(), source })?;
    let bad = |m: String| ModelError::Checkpoint(format!("{display}: {m}"));

    let mut cur = 0usize;
    let mut take = |n: usize| -> Result<&[u8], ModelError> {
        if cur + n > bytes.len() {
            return Err(ModelError::Checkpoint(format!("{display}: truncated at byte {cur}")));
        }
        let s = &bytes[cur..cur + n];
        cur += n;
        Ok(s)
    };
    let magic = take(6)?;
    if magic != CHECKPOINT_MAGIC {
        return Err(bad(format!("bad magic {magic:?}")));
    }
    let config_len = u32::from_le_bytes(take(4)?.try_into().unwrap()) as usize;
    let config_text = std::str::from_utf8(take(config_len)?)
        .map_err(|e| bad(format!("config is not UTF-8: {e}")))?;
    let config: ModelConfig =
        serde_json::from_str(config_text).map_err(|e| bad(format!("config JSON: {e}")))?;
    let count = u32::from_le_bytes(take(4)?.try_into().unwrap()) as usize;

    let mut params = Vec::new();
    let mut aux = Vec::new();
    for _ in 0..count {
        let name_len = u32::from_le_bytes(take(4)?.try_into().unwrap()) as usize;
        let name = std::str::from_utf8(take(name_len)?)
            .map_err(|e| bad(format!("name is not UTF-8: {e}")))?
            .to_string();
        let rank = u32::from_le_bytes(take(4)?.try_into().unwrap()) as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(u64::from_le_bytes(take(8)?.try_into().unwrap()) as usize);
        }
        let numel: usize = shape.iter().product();
        let mut data = Vec::with_capacity(numel);
        for chunk in take(numel * 8)?.chunks_exact(8) {
            data.push(f64::from_le_bytes(chunk.try_into().unwrap()));
        }
        let tensor = GenericTensor::from_vec(shape, data)
            .map_err(|e| bad(format!("tensor {name}: {e}")))?;
        if name.starts_with("aux.") {
            aux.push((name, tensor));
        } else {
            params.push((name, tensor));
        }
    }
    if cur != bytes.len() {
        return Err(bad(format!("{} trailing bytes", bytes.len() - cur)));
    }
    Ok(Checkpoint { config, params, aux })
}

impl Tgcrn {
    /// Rebuild a model from a checkpoint, restoring every parameter by name.
    pub fn from_checkpoint(cp: &Checkpoint) -> Result<Self, ModelError> {
        let mut model = Tgcrn::new(cp.config.clone())?;
        if cp.params.len() != model.store.len() {
            return Err(ModelError::Checkpoint(format!(
                "expected {} parameters, checkpoint has {}",
                model.store.len(),
                cp.params.len()
            )));
        }
        for (name, tensor) in &cp.params {
            let found = model
                .store
                .iter()
                .find(|(_, n, _)| n == name)
                .map(|(id, _, t)| (id, t.shape().to_vec()));
            let (id, shape) = found.ok_or_else(|| {
                ModelError::Checkpoint(format!("unknown parameter {name} in checkpoint"))
            })?;
            if shape != tensor.shape() {
                return Err(ModelError::Checkpoint(format!(
                    "parameter {name}: shape {:?} in checkpoint, model wants {shape:?}",
                    tensor.shape()
                )));
            }
            model.store.set(id, tensor.clone());
        }
        Ok(model)
    }
}

/// Joint objective on assembled tensors: `mean|y−ŷ| + λ·L_time`.
pub struct JointLoss {
    pub total: GraphRef,
    pub error_term: GraphRef,
    pub time_term: Option<GraphRef>,
}

/// Compute the joint loss for same-shape prediction/target nodes. The
/// time term is included only when a time table, samples, and a positive
/// `lambda` are all present.
pub fn joint_loss(
    g: &mut crate::Graph,
    y_hat: GraphRef,
    y: GraphRef,
    time_table: Option<GraphRef>,
    samples: Option<&TimeDistanceSamples>,
    lambda: f64,
) -> Result<JointLoss, TensorError> {
    let diff = g.sub(y, y_hat)?;
    let abs = g.abs(diff)?;
    let error_term = g.mean(abs)?;
    if lambda > 0.0 {
        if let (Some(tt), Some(s)) = (time_table, samples) {
            let tdl = timegraph::time_discrepancy_loss(g, tt, s)?;
            let weighted = g.scale(tdl, lambda)?;
            let total = g.add(error_term, weighted)?;
            return Ok(JointLoss { total, error_term, time_term: Some(tdl) });
        }
    }
    Ok(JointLoss { total: error_term, error_term, time_term: None })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{assemble_batch, generate_synthetic, Normalizer, SyntheticConfig};
    use crate::timegraph::{sample_time_distances, Sampled};

    fn tiny_config() -> ModelConfig {
        ModelConfig {
            num_nodes: 3,
            d_in: 1,
            d_out: 1,
            history: 2,
            horizon: 2,
            layers: 2,
            hidden: 4,
            node_dim: 3,
            time_dim: 3,
            alpha: 0.3,
            lambda: 0.1,
            gamma_adjacent: None,
            gamma_mid: None,
            slots_per_day: 12,
            wrap_predecessor: true,
            ablations: Ablations::default(),
            rng_seed: 9,
        }
    }

    fn tiny_data(cfg: &ModelConfig) -> (crate::data::Dataset, Normalizer, WindowBatch) {
        let syn = SyntheticConfig {
            nodes: cfg.num_nodes,
            days: 7,
            slots_per_day: cfg.slots_per_day,
            noise_std: 0.02,
            seed: 3,
        };
        let (ds, _) = generate_synthetic(&syn).unwrap();
        let splits = crate::data::make_windows(&ds, cfg.history, cfg.horizon, (0.8, 0.1, 0.1)).unwrap();
        let norm = Normalizer::fit(&ds, &splits.train).unwrap();
        let batch = assemble_batch(&ds, &splits.train.starts[..3], cfg.history, cfg.horizon);
        (ds, norm, batch)
    }

    fn param_by_name<'a>(cp: &'a Checkpoint, name: &str) -> &'a Tensor {
        &cp.params.iter().find(|(n, _)| n == name).unwrap_or_else(|| panic!("no param {name}")).1
    }

    /// Step-by-step transcription of the full forward pass using only the
    /// timegraph and gcgru primitives, independent of encode/decode.
    fn manual_forward(
        model: &Tgcrn,
        norm: &Normalizer,
        batch: &WindowBatch,
        sample: usize,
    ) -> Vec<Vec<f64>> {
        let cfg = model.config().clone();
        let cp = Checkpoint::of_model(model, Vec::new());
        let mut g = crate::Graph::new();
        let node = g.constant(param_by_name(&cp, "node_table").clone());
        let time = g.constant(param_by_name(&cp, "time_table").clone());
        let head_w = g.constant(param_by_name(&cp, "head.weight").clone());
        let head_b = g.constant(param_by_name(&cp, "head.bias").clone());
        let cell = |g: &mut crate::Graph, cp: &Checkpoint, scope: &str| CellParamRefs {
            w_update: g.constant(param_by_name(cp, &format!("{scope}.w_update")).clone()),
            w_reset: g.constant(param_by_name(cp, &format!("{scope}.w_reset")).clone()),
            w_candidate: g.constant(param_by_name(cp, &format!("{scope}.w_candidate")).clone()),
            b_update: g.constant(param_by_name(cp, &format!("{scope}.b_update")).clone()),
            b_reset: g.constant(param_by_name(cp, &format!("{scope}.b_reset")).clone()),
            b_candidate: g.constant(param_by_name(cp, &format!("{scope}.b_candidate")).clone()),
        };
        let enc: Vec<CellParamRefs> =
            (0..cfg.layers).map(|l| cell(&mut g, &cp, &format!("encoder.l{l}"))).collect();
        let dec: Vec<CellParamRefs> =
            (0..cfg.layers).map(|l| cell(&mut g, &cp, &format!("decoder.l{l}"))).collect();

        let slots = &batch.slots[sample];
        let adjacency = |g: &mut crate::Graph, slot: TimeIndex, state: GraphRef| {
            let aff = timegraph::static_affinity(g, node).unwrap();
            let eta =
                timegraph::trend_factor(g, time, slot, cfg.slots_per_day, cfg.wrap_predecessor)
                    .unwrap();
            let rho = timegraph::periodic_discriminant(g, state).unwrap();
            timegraph::time_aware_adjacency(g, aff, Some(eta), Some(rho), cfg.alpha, slot).unwrap()
        };

        let zero = g.constant(GenericTensor::zeros(vec![cfg.num_nodes, cfg.hidden]));
        let mut h = vec![zero; cfg.layers];
        for t in 0..cfg.history {
            let x = g.constant(norm.normalize(&batch.x_step(sample, t)));
            let graph = adjacency(&mut g, slots[t], x);
            let fused = gcgru::fused_embedding(&mut g, node, time, slots[t]).unwrap();
            let mut input = x;
            for l in 0..cfg.layers {
                let out = gcgru::gcgru_step(&mut g, input, h[l], &graph, fused, &enc[l]).unwrap();
                h[l] = out.hidden;
                input = out.hidden;
            }
        }
        let mut outputs = Vec::new();
        let mut step_input = h[cfg.layers - 1];
        for j in 0..cfg.horizon {
            let slot = slots[cfg.history + j];
            let graph = adjacency(&mut g, slot, step_input);
            let fused = gcgru::fused_embedding(&mut g, node, time, slot).unwrap();
            let mut input = step_input;
            for l in 0..cfg.layers {
                let out = gcgru::gcgru_step(&mut g, input, h[l], &graph, fused, &dec[l]).unwrap();
                h[l] = out.hidden;
                input = out.hidden;
            }
            step_input = h[cfg.layers - 1];
            let proj = g.matmul(step_input, head_w).unwrap();
            let y = g.add(proj, head_b).unwrap();
            outputs.push(norm.denormalize(g.value(y)).data().to_vec());
        }
        outputs
    }

    #[test]
    fn forward_matches_manual_transcription() {
        let cfg = tiny_config();
        let model = Tgcrn::new(cfg.clone()).unwrap();
        let (_, norm, batch) = tiny_data(&cfg);
        let pred = model.predict(&batch, &norm).unwrap();
        assert_eq!(pred.shape(), &[3, 2, 3, 1]);

        for sample in 0..2 {
            let want = manual_forward(&model, &norm, &batch, sample);
            for (j, step) in want.iter().enumerate() {
                for (i, w) in step.iter().enumerate() {
                    let got = pred.data()[((sample * cfg.horizon + j) * cfg.num_nodes) + i];
                    assert!(
                        (got - w).abs() < 1e-12,
                        "sample {sample} step {j} node {i}: {got} vs {w}"
                    );
                }
            }
        }
    }

    #[test]
    fn degenerate_single_step_single_layer() {
        let cfg = ModelConfig {
            history: 1,
            horizon: 1,
            layers: 1,
            gamma_adjacent: Some(1),
            ..tiny_config()
        };
        let model = Tgcrn::new(cfg.clone()).unwrap();
        let (_, norm, batch) = tiny_data(&cfg);
        let pred = model.predict(&batch, &norm).unwrap();
        assert_eq!(pred.shape(), &[3, 1, 3, 1]);
        let want = manual_forward(&model, &norm, &batch, 0);
        for (i, w) in want[0].iter().enumerate() {
            assert!((pred.data()[i] - w).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_head_gives_zero_forecast() {
        let cfg = tiny_config();
        let mut model = Tgcrn::new(cfg.clone()).unwrap();
        let ids: Vec<(ParamId, String)> = model
            .params()
            .iter()
            .filter(|(_, n, _)| n.starts_with("head."))
            .map(|(id, n, t)| (id, n.to_string(), t.shape().to_vec()))
            .map(|(id, n, s)| (id, format!("{n}:{s:?}")))
            .collect();
        for (id, _) in ids {
            let shape = model.params().get(id).shape().to_vec();
            model.set_param(id, GenericTensor::zeros(shape));
        }
        let (_, _, batch) = tiny_data(&cfg);
        // Identity normalizer so zero stays exactly zero after inversion.
        let norm = Normalizer { mean: vec![0.0], std: vec![1.0] };
        let pred = model.predict(&batch, &norm).unwrap();
        assert!(pred.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn encdec_off_is_single_affine_map() {
        let cfg = ModelConfig {
            ablations: Ablations { encdec_off: true, ..Default::default() },
            ..tiny_config()
        };
        let model = Tgcrn::new(cfg.clone()).unwrap();
        assert!(model.params().iter().all(|(_, n, _)| !n.starts_with("decoder.")));
        let (_, norm, batch) = tiny_data(&cfg);
        let pred = model.predict(&batch, &norm).unwrap();
        assert_eq!(pred.shape(), &[3, 2, 3, 1]);
        assert!(pred.data().iter().all(|v| v.is_finite()));
    }

    #[test]
    fn joint_loss_examples() {
        // Perfect forecast leaves only the weighted time term.
        let table = GenericTensor::from_parts(vec![8, 1], (0..8).map(|t| (t * t) as f64).collect());
        let samples = TimeDistanceSamples {
            anchors: vec![Sampled { slot: TimeIndex(0), row: 0, col: 0 }],
            adjacents: vec![Sampled { slot: TimeIndex(1), row: 0, col: 1 }],
            mids: vec![Sampled { slot: TimeIndex(3), row: 0, col: 3 }],
            distants: vec![Sampled { slot: TimeIndex(6), row: 1, col: 0 }],
        };
        let mut g = crate::Graph::new();
        let y = g.constant(GenericTensor::from_parts(vec![2], vec![1.0, 2.0]));
        let tt = g.constant(table);
        let jl = joint_loss(&mut g, y, y, Some(tt), Some(&samples), 0.5).unwrap();
        assert_eq!(g.value(jl.error_term).item().unwrap(), 0.0);
        assert!((g.value(jl.total).item().unwrap() - 0.5 * 10.0).abs() < 1e-12);

        // Lambda zero reduces to the mean absolute error.
        let mut g = crate::Graph::new();
        let y = g.constant(GenericTensor::from_parts(vec![2], vec![1.0, 2.0]));
        let y_hat = g.constant(GenericTensor::from_parts(vec![2], vec![2.0, 4.0]));
        let jl = joint_loss(&mut g, y_hat, y, None, None, 0.0).unwrap();
        assert_eq!(g.value(jl.total).item().unwrap(), 1.5);
        assert!(jl.time_term.is_none());

        // Shape mismatch is a dimension error.
        let mut g = crate::Graph::new();
        let a = g.constant(GenericTensor::<f64>::zeros(vec![2, 2]));
        let b = g.constant(GenericTensor::<f64>::zeros(vec![3, 2]));
        assert!(matches!(
            joint_loss(&mut g, a, b, None, None, 0.0),
            Err(TensorError::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn tdl_off_loss_equals_error_term_exactly() {
        let cfg = ModelConfig {
            ablations: Ablations { tdl_off: true, ..Default::default() },
            ..tiny_config()
        };
        let model = Tgcrn::new(cfg.clone()).unwrap();
        let (_, norm, batch) = tiny_data(&cfg);
        let fwd = model.forward_batch(&batch, &norm, None).unwrap();
        assert_eq!(fwd.loss, fwd.error_term);
        assert_eq!(fwd.time_value(), 0.0);
    }

    #[test]
    fn full_forward_includes_weighted_time_term() {
        let cfg = tiny_config();
        let model = Tgcrn::new(cfg.clone()).unwrap();
        let (_, norm, batch) = tiny_data(&cfg);
        let samples =
            sample_time_distances(&batch.slots, cfg.gamma_adjacent(), cfg.gamma_mid(), 5).unwrap();
        let fwd = model.forward_batch(&batch, &norm, Some(&samples)).unwrap();
        let want = fwd.error_value() + cfg.lambda * fwd.time_value();
        assert!((fwd.loss_value() - want).abs() < 1e-12);
        assert!(fwd.time_value() > 0.0);
    }

    #[test]
    fn forward_is_deterministic() {
        let cfg = tiny_config();
        let (_, norm, batch) = tiny_data(&cfg);
        let a = Tgcrn::new(cfg.clone()).unwrap().predict(&batch, &norm).unwrap();
        let b = Tgcrn::new(cfg).unwrap().predict(&batch, &norm).unwrap();
        assert_eq!(a.data(), b.data());
    }

    #[test]
    fn slot_discontinuity_is_a_contract_error() {
        let cfg = tiny_config();
        let model = Tgcrn::new(cfg.clone()).unwrap();
        let (_, norm, mut batch) = tiny_data(&cfg);
        batch.slots[0][1] = TimeIndex(0);
        batch.slots[0][0] = TimeIndex(5);
        let err = model.predict(&batch, &norm).unwrap_err();
        assert!(matches!(err, ModelError::Contract(_)), "got {err:?}");
    }

    #[test]
    fn default_graphs_vary_over_slots_but_not_with_tagsl_off() {
        let cfg = tiny_config();
        let model = Tgcrn::new(cfg.clone()).unwrap();
        let state = GenericTensor::from_parts(vec![3, 1], vec![0.5, -0.25, 1.5]);
        let (raw_a, _) = model.adjacency_at(TimeIndex(2), &state).unwrap();
        let (raw_b, _) = model.adjacency_at(TimeIndex(9), &state).unwrap();
        assert!(raw_a.frobenius_distance(&raw_b).unwrap() > 0.0);

        let static_cfg = ModelConfig {
            ablations: Ablations { tagsl_off: true, ..Default::default() },
            ..cfg
        };
        let static_model = Tgcrn::new(static_cfg).unwrap();
        let other_state = GenericTensor::from_parts(vec![3, 1], vec![9.0, 0.0, -3.0]);
        for (sa, sb) in [(0usize, 5usize), (3, 9), (1, 11)] {
            let (ra, pa) = static_model.adjacency_at(TimeIndex(sa), &state).unwrap();
            let (rb, pb) = static_model.adjacency_at(TimeIndex(sb), &other_state).unwrap();
            assert_eq!(ra.frobenius_distance(&rb).unwrap(), 0.0);
            assert_eq!(pa.frobenius_distance(&pb).unwrap(), 0.0);
        }
    }

    #[test]
    fn checkpoint_roundtrip_is_byte_exact() {
        let cfg = tiny_config();
        let model = Tgcrn::new(cfg).unwrap();
        let aux = vec![
            ("aux.normalizer_mean".to_string(), GenericTensor::from_parts(vec![1], vec![1.25])),
            ("aux.normalizer_std".to_string(), GenericTensor::from_parts(vec![1], vec![0.5])),
        ];
        let cp = Checkpoint::of_model(&model, aux);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        write_checkpoint(&path, &cp).unwrap();
        let loaded = read_checkpoint(&path).unwrap();
        assert_eq!(loaded, cp);
        let path2 = dir.path().join("model2.ckpt");
        write_checkpoint(&path2, &loaded).unwrap();
        assert_eq!(fs::read(&path).unwrap(), fs::read(&path2).unwrap());
    }

    #[test]
    fn checkpoint_restores_model_behaviour() {
        let cfg = tiny_config();
        let model = Tgcrn::new(cfg.clone()).unwrap();
        let (_, norm, batch) = tiny_data(&cfg);
        let want = model.predict(&batch, &norm).unwrap();

        let cp = Checkpoint::of_model(&model, Vec::new());
        let restored = Tgcrn::from_checkpoint(&cp).unwrap();
        let got = restored.predict(&batch, &norm).unwrap();
        assert_eq!(want.data(), got.data());
    }

    #[test]
    fn checkpoint_mismatches_are_explicit() {
        let cfg = tiny_config();
        let model = Tgcrn::new(cfg).unwrap();
        let mut cp = Checkpoint::of_model(&model, Vec::new());
        cp.params[0].1 = GenericTensor::zeros(vec![7, 7]);
        let err = Tgcrn::from_checkpoint(&cp).unwrap_err();
        assert!(matches!(err, ModelError::Checkpoint(_)));
        assert!(err.to_string().contains("node_table"));

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.ckpt");
        fs::write(&path, b"NOTCKPT").unwrap();
        assert!(matches!(read_checkpoint(&path), Err(ModelError::Checkpoint(_))));
    }

    #[test]
    fn config_validation() {
        let mut cfg = tiny_config();
        cfg.ablations.tagsl_off = true;
        cfg.ablations.te_only = true;
        assert!(matches!(Tgcrn::new(cfg), Err(ModelError::Config(_))));

        let mut cfg = tiny_config();
        cfg.alpha = -0.1;
        assert!(matches!(Tgcrn::new(cfg), Err(ModelError::Config(_))));

        let mut cfg = tiny_config();
        cfg.horizon = 0;
        assert!(matches!(Tgcrn::new(cfg), Err(ModelError::Config(_))));
    }
}
