//! The attention layer: sensory-gate projections, top-k pair curation, the
//! two gate heads, pseudo-time, three logit modes, and the multi-head
//! wrapper.
//!
//! For each curated query-key pair u = [q; k] the backbone produces a
//! content-target gate `phi = sigmoid(head1(u))` and a strictly positive
//! time-constant gate `omega = softplus(head2(u)) + epsilon`. The attention
//! logit is the state of `da/dt = -omega a + phi` started at `a0 = 0` and
//! read out at the query's pseudo-time, by explicit Euler steps, by the
//! closed form `(phi/omega)(1 - e^{-omega t})`, or directly at the steady
//! state `phi/omega`. Gates are computed once per pair per forward pass and
//! held frozen over the integration interval.

use serde::{Deserialize, Serialize};

use crate::cell::{make_backbone, make_sensory_gate, Backbone, BoundCell, BoundHead, SensoryGate};
use crate::cell::{cell_forward, head_output, ncp_cell_step};
use crate::error::{Error, Result};
use crate::tape::{Tape, Value};
use crate::tensor::{self, IndexTensor, Tensor};
use crate::wiring::size_for_dmodel;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// How attention logits are read off the gate dynamics.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Euler,
    Exact,
    Steady,
}

impl Mode {
    pub fn name(self) -> &'static str {
        match self {
            Mode::Euler => "euler",
            Mode::Exact => "exact",
            Mode::Steady => "steady",
        }
    }
}

/// Layer hyperparameters. Serialized as JSON with exactly these key names.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NacConfig {
    pub d_model: usize,
    pub heads: usize,
    pub top_k: usize,
    pub mode: Mode,
    /// Riemann output step, a scalar in [0.5, 1.0].
    pub delta_t: f64,
    /// Softplus floor for the time-constant gate; bounds phi/omega and the
    /// steady-state gradient gain by 1/epsilon.
    pub epsilon: f64,
    pub euler_steps: usize,
    pub sparsity: f64,
    pub seed: u64,
    /// Skip top-k selection and curate every query-key pair.
    #[serde(default)]
    pub pairwise_full: bool,
    /// Trunk units per head backbone; `None` derives the width from
    /// `d_model` via the standard sizing rule.
    #[serde(default)]
    pub backbone_units: Option<usize>,
    /// When set, `forward` rejects calls without per-position timestamps.
    #[serde(default)]
    pub time_varying: bool,
}

impl Default for NacConfig {
    fn default() -> Self {
        NacConfig {
            d_model: 64,
            heads: 4,
            top_k: 8,
            mode: Mode::Exact,
            delta_t: 1.0,
            epsilon: 1e-2,
            euler_steps: 6,
            sparsity: 0.5,
            seed: 0,
            pairwise_full: false,
            backbone_units: None,
            time_varying: false,
        }
    }
}

impl NacConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.heads == 0 || self.d_model % self.heads != 0 {
            return Err(Error::config(format!(
                "d_model ({}) must be a positive multiple of heads ({})",
                self.d_model, self.heads
            )));
        }
        if self.top_k < 1 {
            return Err(Error::config("top_k must be >= 1"));
        }
        if !(0.5..=1.0).contains(&self.delta_t) {
            return Err(Error::config(format!("delta_t must be in [0.5, 1.0], got {}", self.delta_t)));
        }
        if !(self.epsilon > 0.0) {
            return Err(Error::config("epsilon must be > 0"));
        }
        if self.euler_steps < 1 {
            return Err(Error::config("euler_steps must be >= 1"));
        }
        if !(0.0..1.0).contains(&self.sparsity) {
            return Err(Error::config(format!("sparsity must be in [0, 1), got {}", self.sparsity)));
        }
        Ok(())
    }

    pub fn d_head(&self) -> usize {
        self.d_model / self.heads
    }

    pub fn backbone_units(&self) -> usize {
        self.backbone_units.unwrap_or_else(|| size_for_dmodel(self.d_model).1)
    }
}

/// All learnable parameters of one layer.
#[derive(Debug, Clone)]
pub struct NacParams {
    pub q_gate: SensoryGate,
    pub k_gate: SensoryGate,
    pub v_gate: SensoryGate,
    /// One backbone per head, each with its own phi/omega heads.
    pub backbones: Vec<Backbone>,
    /// Pseudo-time affine scalars.
    pub t_a: Tensor,
    pub t_b: Tensor,
    /// Output projection back into the model dimension.
    pub w_o: Tensor,
    pub b_o: Tensor,
}

impl NacParams {
    pub fn init(config: &NacConfig) -> Result<Self> {
        config.validate()?;
        let d = config.d_model;
        let s = config.sparsity;
        let seed = config.seed;
        let q_gate = make_sensory_gate(d, s, seed.wrapping_add(1))?;
        let k_gate = make_sensory_gate(d, s, seed.wrapping_add(2))?;
        let v_gate = make_sensory_gate(d, s, seed.wrapping_add(3))?;
        let units = config.backbone_units();
        let mut backbones = Vec::with_capacity(config.heads);
        for h in 0..config.heads {
            backbones.push(make_backbone(
                2 * config.d_head(),
                units,
                s,
                seed.wrapping_add(0x10 + h as u64),
            )?);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(0x5000));
        let r = 1.0 / (d as f64).sqrt();
        let w_o: Vec<f64> = (0..d * d).map(|_| rng.gen_range(-r..r)).collect();
        Ok(NacParams {
            q_gate,
            k_gate,
            v_gate,
            backbones,
            t_a: Tensor::ones(&[1]),
            t_b: Tensor::zeros(&[1]),
            w_o: Tensor::from_vec(vec![d, d], w_o)?,
            b_o: Tensor::zeros(&[d]),
        })
    }

    pub fn visit(&self, f: &mut dyn FnMut(String, &Tensor)) {
        self.q_gate.visit("q_gate", f);
        self.k_gate.visit("k_gate", f);
        self.v_gate.visit("v_gate", f);
        for (h, bb) in self.backbones.iter().enumerate() {
            bb.visit(&format!("backbone.{h}"), f);
        }
        f("t_a".into(), &self.t_a);
        f("t_b".into(), &self.t_b);
        f("w_o".into(), &self.w_o);
        f("b_o".into(), &self.b_o);
    }

    pub fn visit_mut(&mut self, f: &mut dyn FnMut(String, &mut Tensor)) {
        self.q_gate.visit_mut("q_gate", f);
        self.k_gate.visit_mut("k_gate", f);
        self.v_gate.visit_mut("v_gate", f);
        for (h, bb) in self.backbones.iter_mut().enumerate() {
            bb.visit_mut(&format!("backbone.{h}"), f);
        }
        f("t_a".into(), &mut self.t_a);
        f("t_b".into(), &mut self.t_b);
        f("w_o".into(), &mut self.w_o);
        f("b_o".into(), &mut self.b_o);
    }

    pub fn bind(&self, tape: &mut Tape) -> BoundNac {
        BoundNac {
            q_gate: BoundGate::bind(&self.q_gate, tape),
            k_gate: BoundGate::bind(&self.k_gate, tape),
            v_gate: BoundGate::bind(&self.v_gate, tape),
            backbones: self.backbones.iter().map(|b| BoundBackbone::bind(b, tape)).collect(),
            t_a: tape.leaf(self.t_a.clone()),
            t_b: tape.leaf(self.t_b.clone()),
            w_o: tape.leaf(self.w_o.clone()),
            b_o: tape.leaf(self.b_o.clone()),
        }
    }
}

/// A sensory gate bound to the current tape.
pub struct BoundGate {
    pub cell: BoundCell,
    pub head: BoundHead,
    d_model: usize,
}

impl BoundGate {
    pub fn bind(gate: &SensoryGate, tape: &mut Tape) -> Self {
        let (cell, head) = gate.bind(tape);
        BoundGate { cell, head, d_model: gate.d_model }
    }

    /// `[B, T, d_model] -> [B, T, d_model]`, applied independently per token.
    pub fn forward(&self, tape: &mut Tape, x: &Value) -> Result<Value> {
        let (b, t, d) = dims3(x)?;
        if d != self.d_model {
            return Err(Error::dim(format!("gate width {} vs input {d}", self.d_model)));
        }
        let flat = tape.reshape(x, vec![b * t, d])?;
        let (y, _) = ncp_cell_step(tape, &self.cell, &self.head, &flat, None)?;
        tape.reshape(&y, vec![b, t, d])
    }

    pub fn collect(&self, prefix: &str, out: &mut Vec<(String, Value)>) {
        collect_cell(&self.cell, prefix, out);
        collect_head(&self.head, prefix, out);
    }
}

/// A backbone bound to the current tape.
pub struct BoundBackbone {
    pub cell: BoundCell,
    pub phi_head: BoundHead,
    pub omega_head: BoundHead,
    pub unfold_steps: usize,
}

impl BoundBackbone {
    pub fn bind(bb: &Backbone, tape: &mut Tape) -> Self {
        BoundBackbone {
            cell: bb.cell.bind(tape),
            phi_head: bb.phi_head.bind(tape),
            omega_head: bb.omega_head.bind(tape),
            unfold_steps: bb.unfold_steps,
        }
    }

    /// Pre-activation head scalars for pair vectors `u [P, 2 d_head]`.
    pub fn head_scalars(&self, tape: &mut Tape, u: &Value) -> Result<(Value, Value)> {
        let x = cell_forward(tape, &self.cell, u, self.unfold_steps)?;
        let phi = head_output(tape, &self.phi_head, &x)?;
        let omega = head_output(tape, &self.omega_head, &x)?;
        Ok((tape.mean_lastdim(&phi), tape.mean_lastdim(&omega)))
    }

    pub fn collect(&self, prefix: &str, out: &mut Vec<(String, Value)>) {
        collect_cell(&self.cell, &format!("{prefix}.trunk"), out);
        collect_head(&self.phi_head, &format!("{prefix}.phi"), out);
        collect_head(&self.omega_head, &format!("{prefix}.omega"), out);
    }
}

fn collect_cell(cell: &BoundCell, prefix: &str, out: &mut Vec<(String, Value)>) {
    out.push((format!("{prefix}.w_in"), cell.w_in.clone()));
    out.push((format!("{prefix}.b_in"), cell.b_in.clone()));
    out.push((format!("{prefix}.weight_in"), cell.weight_in.clone()));
    if let Some(w) = &cell.weight_rec {
        out.push((format!("{prefix}.weight_rec"), w.clone()));
    }
    out.push((format!("{prefix}.bias"), cell.bias.clone()));
}

fn collect_head(head: &BoundHead, prefix: &str, out: &mut Vec<(String, Value)>) {
    out.push((format!("{prefix}.w_out"), head.w_out.clone()));
    out.push((format!("{prefix}.b_out"), head.b_out.clone()));
}

/// Layer parameters bound to a tape for one pass; leaf names mirror
/// [`NacParams::visit`].
pub struct BoundNac {
    pub q_gate: BoundGate,
    pub k_gate: BoundGate,
    pub v_gate: BoundGate,
    pub backbones: Vec<BoundBackbone>,
    pub t_a: Value,
    pub t_b: Value,
    pub w_o: Value,
    pub b_o: Value,
}

impl BoundNac {
    pub fn collect_leaves(&self) -> Vec<(String, Value)> {
        let mut out = Vec::new();
        self.q_gate.collect("q_gate", &mut out);
        self.k_gate.collect("k_gate", &mut out);
        self.v_gate.collect("v_gate", &mut out);
        for (h, bb) in self.backbones.iter().enumerate() {
            bb.collect(&format!("backbone.{h}"), &mut out);
        }
        out.push(("t_a".into(), self.t_a.clone()));
        out.push(("t_b".into(), self.t_b.clone()));
        out.push(("w_o".into(), self.w_o.clone()));
        out.push(("b_o".into(), self.b_o.clone()));
        out
    }
}

fn dims3(x: &Value) -> Result<(usize, usize, usize)> {
    match x.shape() {
        [a, b, c] => Ok((*a, *b, *c)),
        other => Err(Error::dim(format!("expected rank-3 input, got {other:?}"))),
    }
}

fn dims4(x: &Value) -> Result<(usize, usize, usize, usize)> {
    match x.shape() {
        [a, b, c, d] => Ok((*a, *b, *c, *d)),
        other => Err(Error::dim(format!("expected rank-4 tensor, got {other:?}"))),
    }
}

// ── Projections ──────────────────────────────────────────────────────

/// Project the input through the three sensory gates and split heads:
/// `[B, T, d_model] -> (Q, K, V)` each `[B, H, T, D]`.
pub fn project_qkv(
    tape: &mut Tape,
    config: &NacConfig,
    bound: &BoundNac,
    x: &Value,
) -> Result<(Value, Value, Value)> {
    let (b, t, d) = dims3(x)?;
    if d != config.d_model {
        return Err(Error::dim(format!("input width {d} vs d_model {}", config.d_model)));
    }
    let heads = config.heads;
    let dh = config.d_head();
    let split = |tape: &mut Tape, v: &Value| -> Result<Value> {
        let grouped = tape.reshape(v, vec![b, t, heads, dh])?;
        tape.swap_axes12(&grouped)
    };
    let q = bound.q_gate.forward(tape, x)?;
    let k = bound.k_gate.forward(tape, x)?;
    let v = bound.v_gate.forward(tape, x)?;
    Ok((split(tape, &q)?, split(tape, &k)?, split(tape, &v)?))
}

// ── Pair curation ────────────────────────────────────────────────────

/// Curated query-key pairs.
pub struct PairSelection {
    /// Raw scores `Q K^T` `[B, H, Tq, Tk]`; absent on the all-pairs path,
    /// where no selection happens.
    pub scores: Option<Value>,
    pub k_eff: usize,
    /// Selected key indices per query `[B, H, Tq, K_eff]`. Natural order
    /// `0..Tk` on the all-pairs path.
    pub indices: IndexTensor,
    /// Concatenated pair tensor `[B, H, Tq, K_eff, 2 D]`, rows `[q; k]`.
    pub pairs: Value,
    /// True when every key is selected in natural order (pairwise-full, or
    /// a top-k budget of at least Tk).
    pub full: bool,
}

/// Score, select and concatenate query-key pairs.
///
/// When `pairwise_full` is set or the budget covers every key, selection is
/// bypassed: all pairs are built in natural key order and no scores are
/// computed. The two flags therefore produce bit-identical results. A
/// descending-score order would be a silent permutation of the softmax
/// accumulation and break that equivalence.
pub fn curate_pairs(
    tape: &mut Tape,
    q: &Value,
    k: &Value,
    top_k: usize,
    pairwise_full: bool,
) -> Result<PairSelection> {
    if top_k < 1 {
        return Err(Error::arg("top_k must be >= 1"));
    }
    let (b, h, tq, d) = dims4(q)?;
    let (kb, kh, tk, kd) = dims4(k)?;
    if (b, h, d) != (kb, kh, kd) {
        return Err(Error::dim(format!(
            "q {:?} and k {:?} disagree on batch/head/feature dims",
            q.shape(),
            k.shape()
        )));
    }
    let full = pairwise_full || top_k >= tk;
    let k_eff = if full { tk } else { top_k };

    let (scores, indices) = if full {
        let data: Vec<usize> = (0..b * h * tq).flat_map(|_| 0..tk).collect();
        (None, IndexTensor { shape: vec![b, h, tq, k_eff], data })
    } else {
        let kt = tape.transpose_last2(k)?;
        let s = tape.matmul(q, &kt)?;
        let (_, idx) = tensor::topk_lastdim(s.tensor(), k_eff)?;
        (Some(s), idx)
    };

    let idx_flat = IndexTensor { shape: vec![b, h, tq * k_eff], data: indices.data.clone() };
    let k_sel = tape.gather_rows(k, &idx_flat)?;
    let k_sel = tape.reshape(&k_sel, vec![b, h, tq, k_eff, d])?;
    let q_tiled = tape.tile_rows(q, k_eff)?;
    let pairs = tape.concat_lastdim(&q_tiled, &k_sel)?;
    Ok(PairSelection { scores, k_eff, indices, pairs, full })
}

// ── Gate heads ───────────────────────────────────────────────────────

/// Apply the two backbone heads to flattened pair vectors `[P, 2 d_head]`:
/// `phi = sigmoid(head1) in (0, 1)` and
/// `omega = softplus(head2) + epsilon >= epsilon`. Both come back `[P, 1]`.
pub fn gate_heads(
    tape: &mut Tape,
    backbone: &BoundBackbone,
    pairs_flat: &Value,
    epsilon: f64,
) -> Result<(Value, Value)> {
    let (phi_pre, omega_pre) = backbone.head_scalars(tape, pairs_flat)?;
    let phi = tape.sigmoid(&phi_pre);
    let softplus = tape.softplus(&omega_pre);
    let omega = tape.add_scalar(&softplus, epsilon);
    Ok((phi, omega))
}

// ── Pseudo-time ──────────────────────────────────────────────────────

/// `t_pseudo = sigmoid(t_a * t_raw + t_b)`, elementwise over positions.
pub fn pseudo_time(tape: &mut Tape, t_raw: &Value, t_a: &Value, t_b: &Value) -> Result<Value> {
    let scaled = tape.mul(t_raw, t_a)?;
    let shifted = tape.add(&scaled, t_b)?;
    Ok(tape.sigmoid(&shifted))
}

// ── Logit modes ──────────────────────────────────────────────────────

/// Closed form at `a0 = 0`: `a_t = (phi/omega)(1 - e^{-omega t})`.
/// Shapes broadcast; `t` is typically `[B, T, 1]` against `[B, T, K]` gates.
pub fn logits_exact(tape: &mut Tape, phi: &Value, omega: &Value, t: &Value) -> Result<Value> {
    let wt = tape.mul(omega, t)?;
    let neg = tape.neg(&wt);
    let e = tape.exp(&neg);
    let ne = tape.neg(&e);
    let one_minus = tape.add_scalar(&ne, 1.0);
    let a_star = tape.div(phi, omega)?;
    tape.mul(&a_star, &one_minus)
}

/// General closed form `a* + (a0 - a*) e^{-omega t}` for arbitrary `a0`.
pub fn logits_exact_from(
    tape: &mut Tape,
    phi: &Value,
    omega: &Value,
    t: &Value,
    a0: &Value,
) -> Result<Value> {
    let wt = tape.mul(omega, t)?;
    let neg = tape.neg(&wt);
    let e = tape.exp(&neg);
    let a_star = tape.div(phi, omega)?;
    let diff = tape.sub(a0, &a_star)?;
    let transient = tape.mul(&diff, &e)?;
    tape.add(&a_star, &transient)
}

/// Explicit Euler from `a0 = 0`: `n` iterations of
/// `a <- a + dt (phi - omega a)` with `dt = t / n`.
pub fn logits_euler(
    tape: &mut Tape,
    phi: &Value,
    omega: &Value,
    t: &Value,
    n: usize,
) -> Result<Value> {
    if n < 1 {
        return Err(Error::arg("euler_steps must be >= 1"));
    }
    let dt = tape.scale(t, 1.0 / n as f64);
    let mut a = tape.constant(Tensor::zeros(phi.shape()));
    for _ in 0..n {
        let decay = tape.mul(omega, &a)?;
        let delta = tape.sub(phi, &decay)?;
        let step = tape.mul(&dt, &delta)?;
        a = tape.add(&a, &step)?;
    }
    Ok(a)
}

/// Steady state `a* = phi / omega`; the scaled-dot analogue.
pub fn logits_steady(tape: &mut Tape, phi: &Value, omega: &Value) -> Result<Value> {
    tape.div(phi, omega)
}

// ── Output integration ───────────────────────────────────────────────

/// Softmax the logits over the selected keys and integrate against gathered
/// values: `out[q] = delta_t * sum_j alpha_j v_sel[q, j]`.
/// `logits [B, Tq, K]`, `v_sel [B, Tq, K, D] -> [B, Tq, D]`.
pub fn attention_output_selected(
    tape: &mut Tape,
    logits: &Value,
    v_sel: &Value,
    delta_t: f64,
) -> Result<Value> {
    let (b, tq, k) = dims3(logits)?;
    let alpha = tape.softmax_lastdim(logits)?;
    let arow = tape.reshape(&alpha, vec![b, tq, 1, k])?;
    let mixed = tape.matmul(&arow, v_sel)?;
    let d = v_sel.shape()[3];
    let out = tape.reshape(&mixed, vec![b, tq, d])?;
    Ok(tape.scale(&out, delta_t))
}

/// All-pairs variant: `logits [B, Tq, Tk]` against the raw `v [B, Tk, D]`.
/// Accumulates in natural key order, exactly like the selected path does
/// with natural indices.
pub fn attention_output_full(
    tape: &mut Tape,
    logits: &Value,
    v: &Value,
    delta_t: f64,
) -> Result<Value> {
    let alpha = tape.softmax_lastdim(logits)?;
    let out = tape.matmul(&alpha, v)?;
    Ok(tape.scale(&out, delta_t))
}

// ── Full layer ───────────────────────────────────────────────────────

/// One NAC layer: configuration plus parameters.
#[derive(Debug, Clone)]
pub struct NacLayer {
    pub config: NacConfig,
    pub params: NacParams,
}

impl NacLayer {
    pub fn init(config: NacConfig) -> Result<Self> {
        let params = NacParams::init(&config)?;
        Ok(NacLayer { config, params })
    }

    /// Convenience forward that binds parameters onto the tape internally.
    pub fn forward(
        &self,
        tape: &mut Tape,
        x: &Value,
        timestamps: Option<&Value>,
    ) -> Result<Value> {
        let bound = self.params.bind(tape);
        nac_forward(tape, &self.config, &bound, x, timestamps)
    }
}

/// Full multi-head forward pass: `[B, T, d_model] -> [B, T, d_model]`,
/// differentiable end to end on a recording tape.
pub fn nac_forward(
    tape: &mut Tape,
    config: &NacConfig,
    bound: &BoundNac,
    x: &Value,
    timestamps: Option<&Value>,
) -> Result<Value> {
    config.validate()?;
    let (b, t, _) = dims3(x)?;
    let t_raw = match timestamps {
        Some(ts) => {
            if ts.shape() != [b, t] {
                return Err(Error::dim(format!(
                    "timestamps shape {:?} vs expected [{b}, {t}]",
                    ts.shape()
                )));
            }
            ts.clone()
        }
        None => {
            if config.time_varying {
                return Err(Error::arg(
                    "config is time-varying but no timestamps were provided",
                ));
            }
            tape.constant(Tensor::ones(&[b, t]))
        }
    };
    let tp = pseudo_time(tape, &t_raw, &bound.t_a, &bound.t_b)?;
    let tp = tape.reshape(&tp, vec![b, t, 1])?;

    let (q, k, v) = project_qkv(tape, config, bound, x)?;
    let sel = curate_pairs(tape, &q, &k, config.top_k, config.pairwise_full)?;
    let k_eff = sel.k_eff;
    let dh = config.d_head();

    // Values for the selected keys, gathered once across heads.
    let v_sel = if sel.full {
        None
    } else {
        let idx_flat =
            IndexTensor { shape: vec![b, config.heads, t * k_eff], data: sel.indices.data.clone() };
        let g = tape.gather_rows(&v, &idx_flat)?;
        Some(tape.reshape(&g, vec![b, config.heads, t, k_eff, dh])?)
    };

    let mut head_outputs: Vec<Value> = Vec::with_capacity(config.heads);
    for h in 0..config.heads {
        let u_h = tape.index_axis1(&sel.pairs, h)?;
        let u_flat = tape.reshape(&u_h, vec![b * t * k_eff, 2 * dh])?;
        let (phi_col, omega_col) = gate_heads(tape, &bound.backbones[h], &u_flat, config.epsilon)?;
        let phi = tape.reshape(&phi_col, vec![b, t, k_eff])?;
        let omega = tape.reshape(&omega_col, vec![b, t, k_eff])?;

        let logits = match config.mode {
            Mode::Exact => logits_exact(tape, &phi, &omega, &tp)?,
            Mode::Euler => logits_euler(tape, &phi, &omega, &tp, config.euler_steps)?,
            Mode::Steady => logits_steady(tape, &phi, &omega)?,
        };

        let out_h = match &v_sel {
            None => {
                let v_h = tape.index_axis1(&v, h)?;
                attention_output_full(tape, &logits, &v_h, config.delta_t)?
            }
            Some(vs) => {
                let vs_h = tape.index_axis1(vs, h)?;
                attention_output_selected(tape, &logits, &vs_h, config.delta_t)?
            }
        };
        head_outputs.push(out_h);
    }

    let mut merged = head_outputs[0].clone();
    for part in &head_outputs[1..] {
        merged = tape.concat_lastdim(&merged, part)?;
    }
    let projected = tape.matmul(&merged, &bound.w_o)?;
    tape.add(&projected, &bound.b_o)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::oracle;

    fn rand_vec(n: usize, seed: u64, lo: f64, hi: f64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n).map(|_| rng.gen_range(lo..hi)).collect()
    }

    fn tiny_config() -> NacConfig {
        NacConfig {
            d_model: 8,
            heads: 2,
            top_k: 3,
            backbone_units: Some(10),
            seed: 5,
            ..NacConfig::default()
        }
    }

    #[test]
    fn config_validation() {
        assert!(NacConfig::default().validate().is_ok());
        assert!(NacConfig { d_model: 10, heads: 4, ..NacConfig::default() }.validate().is_err());
        assert!(NacConfig { delta_t: 0.4, ..NacConfig::default() }.validate().is_err());
        assert!(NacConfig { delta_t: 1.1, ..NacConfig::default() }.validate().is_err());
        assert!(NacConfig { epsilon: 0.0, ..NacConfig::default() }.validate().is_err());
        assert!(NacConfig { euler_steps: 0, ..NacConfig::default() }.validate().is_err());
        assert!(NacConfig { top_k: 0, ..NacConfig::default() }.validate().is_err());
    }

    #[test]
    fn config_json_key_names_are_stable() {
        let json = serde_json::to_value(NacConfig::default()).unwrap();
        for key in [
            "d_model", "heads", "top_k", "mode", "delta_t", "epsilon", "euler_steps",
            "sparsity", "seed", "pairwise_full", "backbone_units", "time_varying",
        ] {
            assert!(json.get(key).is_some(), "missing config key {key}");
        }
        assert_eq!(json["mode"], "exact");
    }

    #[test]
    fn project_qkv_shape_contract() {
        let config = tiny_config();
        let params = NacParams::init(&config).unwrap();
        let mut tape = Tape::inference();
        let bound = params.bind(&mut tape);
        let x = tape.leaf(Tensor::from_vec(vec![2, 5, 8], rand_vec(80, 1, -1.0, 1.0)).unwrap());
        let (q, k, v) = project_qkv(&mut tape, &config, &bound, &x).unwrap();
        for t in [&q, &k, &v] {
            assert_eq!(t.shape(), &[2, 2, 5, 4]);
        }
    }

    #[test]
    fn zero_weight_gates_give_constant_streams() {
        let config = tiny_config();
        let mut params = NacParams::init(&config).unwrap();
        for gate in [&mut params.q_gate, &mut params.k_gate, &mut params.v_gate] {
            for t in [&mut gate.cell.weight_in, &mut gate.cell.bias] {
                for v in t.data_mut() {
                    *v = 0.0;
                }
            }
            gate.head.b_out =
                Tensor::from_vec(vec![8], (0..8).map(|i| i as f64 / 10.0).collect()).unwrap();
        }
        let mut tape = Tape::inference();
        let bound = params.bind(&mut tape);
        let x = tape.leaf(Tensor::from_vec(vec![1, 4, 8], rand_vec(32, 2, -2.0, 2.0)).unwrap());
        let (q, _, _) = project_qkv(&mut tape, &config, &bound, &x).unwrap();
        // every position carries the head-split b_out
        for pos in 0..4 {
            for h in 0..2 {
                for d in 0..4 {
                    let got = q.tensor().data()[((h * 4) + pos) * 4 + d];
                    assert_eq!(got, (h * 4 + d) as f64 / 10.0);
                }
            }
        }
    }

    #[test]
    fn projection_matches_per_token_loop_oracle() {
        let config = tiny_config();
        let params = NacParams::init(&config).unwrap();
        let x = Tensor::from_vec(vec![2, 3, 8], rand_vec(48, 3, -1.0, 1.0)).unwrap();

        let mut tape = Tape::inference();
        let bound = params.bind(&mut tape);
        let xv = tape.leaf(x.clone());
        let batched = bound.q_gate.forward(&mut tape, &xv).unwrap();

        // per-token oracle: apply the same gate to each [1, 1, d] slice
        for b in 0..2 {
            for t in 0..3 {
                let token: Vec<f64> = (0..8).map(|d| x.data()[(b * 3 + t) * 8 + d]).collect();
                let mut tape2 = Tape::inference();
                let bound2 = params.q_gate.bind(&mut tape2);
                let g2 = BoundGate { cell: bound2.0, head: bound2.1, d_model: 8 };
                let tv = tape2.leaf(Tensor::from_vec(vec![1, 1, 8], token).unwrap());
                let y = g2.forward(&mut tape2, &tv).unwrap();
                for d in 0..8 {
                    assert_eq!(
                        y.tensor().data()[d].to_bits(),
                        batched.tensor().data()[(b * 3 + t) * 8 + d].to_bits()
                    );
                }
            }
        }
    }

    #[test]
    fn curate_full_budget_bit_identical_to_pairwise_full() {
        for seed in 0..5u64 {
            let q = Tensor::from_vec(vec![1, 2, 4, 3], rand_vec(24, seed * 2 + 1, -1.0, 1.0)).unwrap();
            let k = Tensor::from_vec(vec![1, 2, 4, 3], rand_vec(24, seed * 2 + 2, -1.0, 1.0)).unwrap();
            let mut tape = Tape::inference();
            let qv = tape.leaf(q);
            let kv = tape.leaf(k);
            let a = curate_pairs(&mut tape, &qv, &kv, 9, false).unwrap();
            let b = curate_pairs(&mut tape, &qv, &kv, 2, true).unwrap();
            assert_eq!(a.k_eff, 4);
            assert_eq!(b.k_eff, 4);
            assert!(a.full && b.full);
            assert_eq!(a.indices, b.indices);
            let bits = |v: &Value| v.tensor().data().iter().map(|x| x.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(&a.pairs), bits(&b.pairs));
        }
    }

    #[test]
    fn curate_single_key_pairs_everything_with_it() {
        let q = Tensor::from_vec(vec![1, 1, 3, 2], rand_vec(6, 7, -1.0, 1.0)).unwrap();
        let k = Tensor::from_vec(vec![1, 1, 1, 2], vec![0.5, -0.25]).unwrap();
        let mut tape = Tape::inference();
        let qv = tape.leaf(q.clone());
        let kv = tape.leaf(k);
        let sel = curate_pairs(&mut tape, &qv, &kv, 4, false).unwrap();
        assert_eq!(sel.k_eff, 1);
        for query in 0..3 {
            let row = &sel.pairs.tensor().data()[query * 4..(query + 1) * 4];
            assert_eq!(&row[..2], &q.data()[query * 2..(query + 1) * 2]);
            assert_eq!(&row[2..], &[0.5, -0.25]);
        }
    }

    #[test]
    fn curate_hand_case_matches_brute_force_sort() {
        // 2 queries x 3 keys, D = 2, hand-chosen vectors
        let q = Tensor::from_vec(vec![1, 1, 2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let k = Tensor::from_vec(vec![1, 1, 3, 2], vec![0.9, 0.1, -0.5, 2.0, 0.3, 0.3]).unwrap();
        let mut tape = Tape::inference();
        let qv = tape.leaf(q.clone());
        let kv = tape.leaf(k.clone());
        let sel = curate_pairs(&mut tape, &qv, &kv, 2, false).unwrap();
        // brute force: scores per query, sorted descending with index ties low-first
        for query in 0..2 {
            let mut scored: Vec<(f64, usize)> = (0..3)
                .map(|j| {
                    let s = q.data()[query * 2] * k.data()[j * 2]
                        + q.data()[query * 2 + 1] * k.data()[j * 2 + 1];
                    (s, j)
                })
                .collect();
            scored.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
            for slot in 0..2 {
                assert_eq!(sel.indices.data[query * 2 + slot], scored[slot].1);
            }
        }
        assert!(sel.scores.is_some());
    }

    #[test]
    fn gate_heads_zero_backbone_hits_closed_forms() {
        let mut bb = make_backbone(4, 10, 0.5, 3).unwrap();
        for t in [&mut bb.cell.weight_in, &mut bb.cell.weight_rec, &mut bb.cell.bias] {
            for v in t.data_mut() {
                *v = 0.0;
            }
        }
        let eps = 1e-2;
        let mut tape = Tape::inference();
        let bound = BoundBackbone::bind(&bb, &mut tape);
        let u = tape.leaf(Tensor::from_vec(vec![3, 4], rand_vec(12, 4, -2.0, 2.0)).unwrap());
        let (phi, omega) = gate_heads(&mut tape, &bound, &u, eps).unwrap();
        for &p in phi.tensor().data() {
            assert_eq!(p, 0.5);
        }
        for &w in omega.tensor().data() {
            assert!((w - (std::f64::consts::LN_2 + eps)).abs() < 1e-15);
        }
    }

    #[test]
    fn omega_is_floored_at_epsilon() {
        let bb = make_backbone(4, 10, 0.5, 11).unwrap();
        let eps = 1e-2;
        let mut tape = Tape::inference();
        let bound = BoundBackbone::bind(&bb, &mut tape);
        let u = tape.leaf(Tensor::from_vec(vec![2000, 4], rand_vec(8000, 12, -50.0, 50.0)).unwrap());
        let (_, omega) = gate_heads(&mut tape, &bound, &u, eps).unwrap();
        for &w in omega.tensor().data() {
            assert!(w >= eps);
        }
    }

    #[test]
    fn omega_monotone_in_preactivation() {
        // softplus is monotone: pushing the omega head bias up raises omega
        let bb = make_backbone(4, 10, 0.5, 13).unwrap();
        let u = Tensor::from_vec(vec![4, 4], rand_vec(16, 14, -1.0, 1.0)).unwrap();
        let eval = |b: &Backbone| {
            let mut tape = Tape::inference();
            let bound = BoundBackbone::bind(b, &mut tape);
            let uv = tape.leaf(u.clone());
            let (_, omega) = gate_heads(&mut tape, &bound, &uv, 1e-2).unwrap();
            omega.tensor().clone()
        };
        let base = eval(&bb);
        let mut raised = bb.clone();
        for v in raised.omega_head.b_out.data_mut() {
            *v += 0.5;
        }
        let up = eval(&raised);
        for (lo, hi) in base.data().iter().zip(up.data()) {
            assert!(hi > lo);
        }
    }

    #[test]
    fn pseudo_time_closed_forms() {
        let mut tape = Tape::inference();
        let t = tape.leaf(Tensor::from_vec(vec![1, 3], vec![0.0, 1.0, 7.5]).unwrap());
        let zero = tape.leaf(Tensor::zeros(&[1]));
        let one = tape.leaf(Tensor::ones(&[1]));

        // t_a = 0, t_b = 0: always 0.5
        let flat = pseudo_time(&mut tape, &t, &zero, &zero).unwrap();
        for &v in flat.tensor().data() {
            assert_eq!(v, 0.5);
        }
        // t_a = 1, t_b = 0, t = 1: sigmoid(1)
        let ramp = pseudo_time(&mut tape, &t, &one, &zero).unwrap();
        assert!((ramp.tensor().data()[1] - 0.731_058_578_630_004_9).abs() < 1e-12);
        // huge shift saturates to 1 through the clamped exp
        let big = tape.leaf(Tensor::from_vec(vec![1], vec![1e4]).unwrap());
        let sat = pseudo_time(&mut tape, &t, &one, &big).unwrap();
        for &v in sat.tensor().data() {
            assert_eq!(v, 1.0);
        }
    }

    #[test]
    fn exact_logits_closed_form_points() {
        let mut tape = Tape::inference();
        let phi = tape.leaf(Tensor::from_vec(vec![2], vec![1.0, 0.3]).unwrap());
        let omega = tape.leaf(Tensor::from_vec(vec![2], vec![1.0, 2.0]).unwrap());
        // t = 0 -> a = a0 = 0
        let t0 = tape.leaf(Tensor::zeros(&[2]));
        let a0 = logits_exact(&mut tape, &phi, &omega, &t0).unwrap();
        assert_eq!(a0.tensor().data(), &[0.0, 0.0]);
        // phi = omega = 1, t = ln 2 -> 0.5
        let tl = tape.leaf(Tensor::from_vec(vec![2], vec![2f64.ln(), 1.0]).unwrap());
        let a = logits_exact(&mut tape, &phi, &omega, &tl).unwrap();
        assert!((a.tensor().data()[0] - 0.5).abs() < 1e-15);
    }

    #[test]
    fn exact_logits_match_rk4_oracle() {
        let n = 300;
        let phi_v = rand_vec(n, 21, 0.01, 1.0);
        let omega_v: Vec<f64> = rand_vec(n, 22, 1e-2f64.ln(), 10f64.ln())
            .into_iter()
            .map(f64::exp)
            .collect();
        let t_v = rand_vec(n, 23, 0.01, 1.0);
        let mut tape = Tape::inference();
        let phi = tape.leaf(Tensor::from_vec(vec![n], phi_v.clone()).unwrap());
        let omega = tape.leaf(Tensor::from_vec(vec![n], omega_v.clone()).unwrap());
        let t = tape.leaf(Tensor::from_vec(vec![n], t_v.clone()).unwrap());
        let a = logits_exact(&mut tape, &phi, &omega, &t).unwrap();
        for i in 0..n {
            let ode = oracle::ScalarOde::single(omega_v[i], phi_v[i], 0.0, t_v[i]);
            let reference = oracle::integrate_rk4(&ode, 1024).unwrap().last().unwrap().1;
            assert!(
                (a.tensor().data()[i] - reference).abs() < 1e-8,
                "draw {i}: {} vs rk4 {reference}",
                a.tensor().data()[i]
            );
        }
    }

    #[test]
    fn euler_single_step_and_fixed_point() {
        let mut tape = Tape::inference();
        // one step, dt = 0.1, omega = 1, phi = 1, a0 = 0 -> 0.1
        let phi = tape.leaf(Tensor::scalar(1.0));
        let omega = tape.leaf(Tensor::scalar(1.0));
        let t = tape.leaf(Tensor::scalar(0.1));
        let a = logits_euler(&mut tape, &phi, &omega, &t, 1).unwrap();
        assert!((a.item() - 0.1).abs() < 1e-15);

        // starting at the equilibrium must stay there for any step count;
        // the zero-start path reaches phi/omega only in the limit, so check
        // the invariance through the general closed-form initial condition
        // fed into one Euler update by hand: a + dt (phi - omega a) = a.
        let a_star = 1.0;
        for n in [1usize, 3, 16] {
            let dt = 0.7 / n as f64;
            let mut state = a_star;
            for _ in 0..n {
                state += dt * (1.0 - 1.0 * state);
            }
            assert_eq!(state, a_star);
        }
    }

    #[test]
    fn euler_error_halves_per_doubling() {
        // draws stay in the asymptotic regime (omega * t <= 0.6) so the
        // first-order factor of 2 is visible already at N = 2 -> 4
        let n = 64;
        let phi_v = rand_vec(n, 31, 0.05, 1.0);
        let omega_v = rand_vec(n, 32, 0.05, 1.0);
        let t_v = rand_vec(n, 33, 0.1, 0.6);
        let mut tape = Tape::inference();
        let phi = tape.leaf(Tensor::from_vec(vec![n], phi_v).unwrap());
        let omega = tape.leaf(Tensor::from_vec(vec![n], omega_v).unwrap());
        let t = tape.leaf(Tensor::from_vec(vec![n], t_v).unwrap());
        let exact = logits_exact(&mut tape, &phi, &omega, &t).unwrap();
        let max_err = |steps: usize, tape: &mut Tape| {
            let e = logits_euler(tape, &phi, &omega, &t, steps).unwrap();
            e.tensor()
                .data()
                .iter()
                .zip(exact.tensor().data())
                .map(|(a, b)| (a - b).abs())
                .fold(0.0f64, f64::max)
        };
        let errs: Vec<f64> = [2, 4, 8, 16].iter().map(|&s| max_err(s, &mut tape)).collect();
        for w in errs.windows(2) {
            let ratio = w[0] / w[1];
            assert!((1.8..=2.2).contains(&ratio), "halving ratio {ratio}, errors {errs:?}");
        }
    }

    #[test]
    fn steady_state_cases() {
        let mut tape = Tape::inference();
        let phi = tape.leaf(Tensor::from_vec(vec![3], vec![0.4, 0.9, 0.05]).unwrap());
        let omega = tape.leaf(Tensor::from_vec(vec![3], vec![0.4, 0.3, 5.0]).unwrap());
        let a_star = logits_steady(&mut tape, &phi, &omega).unwrap();
        assert_eq!(a_star.tensor().data()[0], 1.0);

        // exact mode at t = 20/omega sits within e^{-20} |a*| of a*
        let t_data: Vec<f64> = omega.tensor().data().iter().map(|w| 20.0 / w).collect();
        let t = tape.leaf(Tensor::from_vec(vec![3], t_data).unwrap());
        let a = logits_exact(&mut tape, &phi, &omega, &t).unwrap();
        for (x, s) in a.tensor().data().iter().zip(a_star.tensor().data()) {
            assert!((x - s).abs() <= (-20.0f64).exp() * s.abs() + 1e-300);
        }
    }

    #[test]
    fn attention_output_singleton_and_uniform() {
        let mut tape = Tape::inference();
        // one selected key: output = delta_t * v
        let logits = tape.leaf(Tensor::from_vec(vec![1, 1, 1], vec![3.7]).unwrap());
        let v = tape.leaf(Tensor::from_vec(vec![1, 1, 1, 3], vec![1.0, -2.0, 0.5]).unwrap());
        let out = attention_output_selected(&mut tape, &logits, &v, 0.75).unwrap();
        assert_eq!(out.tensor().data(), &[0.75, -1.5, 0.375]);

        // equal logits over selected keys: output = delta_t * mean(v)
        let logits = tape.leaf(Tensor::full(&[1, 1, 4], 1.23));
        let vd = rand_vec(8, 41, -1.0, 1.0);
        let v = tape.leaf(Tensor::from_vec(vec![1, 1, 4, 2], vd.clone()).unwrap());
        let out = attention_output_selected(&mut tape, &logits, &v, 1.0).unwrap();
        for d in 0..2 {
            let mean = (0..4).map(|j| vd[j * 2 + d]).sum::<f64>() / 4.0;
            assert!((out.tensor().data()[d] - mean).abs() < 1e-12);
        }
    }

    #[test]
    fn steady_mode_with_scaled_dot_logits_matches_textbook_attention() {
        // delta_t = 1, all keys selected, logits injected as q.k/sqrt(d):
        // the output must equal a straightforward scaled-dot attention.
        let (tq, tk, d) = (4, 6, 3);
        let qd = rand_vec(tq * d, 51, -1.0, 1.0);
        let kd = rand_vec(tk * d, 52, -1.0, 1.0);
        let vd = rand_vec(tk * d, 53, -1.0, 1.0);
        let scale = 1.0 / (d as f64).sqrt();
        let mut logits = vec![0.0; tq * tk];
        for i in 0..tq {
            for j in 0..tk {
                logits[i * tk + j] =
                    (0..d).map(|c| qd[i * d + c] * kd[j * d + c]).sum::<f64>() * scale;
            }
        }
        let mut tape = Tape::inference();
        let lv = tape.leaf(Tensor::from_vec(vec![1, tq, tk], logits.clone()).unwrap());
        let vv = tape.leaf(Tensor::from_vec(vec![1, tk, d], vd.clone()).unwrap());
        let out = attention_output_full(&mut tape, &lv, &vv, 1.0).unwrap();

        // textbook oracle: softmax rows then weighted sum, straight loops
        for i in 0..tq {
            let row = &logits[i * tk..(i + 1) * tk];
            let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = row.iter().map(|&s| (s - m).exp()).collect();
            let z: f64 = exps.iter().sum();
            for c in 0..d {
                let want: f64 = (0..tk).map(|j| exps[j] / z * vd[j * d + c]).sum();
                let got = out.tensor().data()[i * d + c];
                assert!((got - want).abs() < 1e-9, "({i},{c}): {got} vs {want}");
            }
        }
    }

    #[test]
    fn forward_shapes_and_weights_sum() {
        let config = tiny_config();
        let layer = NacLayer::init(config).unwrap();
        let mut tape = Tape::inference();
        let x = tape.leaf(Tensor::from_vec(vec![2, 6, 8], rand_vec(96, 61, -1.0, 1.0)).unwrap());
        let y = layer.forward(&mut tape, &x, None).unwrap();
        assert_eq!(y.shape(), &[2, 6, 8]);
        assert!(y.tensor().is_finite());
    }

    #[test]
    fn forward_requires_timestamps_when_time_varying() {
        let config = NacConfig { time_varying: true, ..tiny_config() };
        let layer = NacLayer::init(config).unwrap();
        let mut tape = Tape::inference();
        let x = tape.leaf(Tensor::zeros(&[1, 4, 8]));
        assert!(matches!(
            layer.forward(&mut tape, &x, None),
            Err(Error::Argument(_))
        ));
        let ts = tape.leaf(Tensor::ones(&[1, 4]));
        assert!(layer.forward(&mut tape, &x, Some(&ts)).is_ok());
    }

    #[test]
    fn exact_mode_logits_are_bounded_by_steady_state() {
        // a0 = 0: 0 <= a_t <= phi/omega, monotone saturation
        let n = 500;
        let mut tape = Tape::inference();
        let phi = tape.leaf(Tensor::from_vec(vec![n], rand_vec(n, 71, 0.001, 1.0)).unwrap());
        let omega = tape.leaf(
            Tensor::from_vec(vec![n], rand_vec(n, 72, 1e-2f64.ln(), 10f64.ln()))
                .unwrap()
                .exp(),
        );
        let t = tape.leaf(Tensor::from_vec(vec![n], rand_vec(n, 73, 0.0, 1.0)).unwrap());
        let a = logits_exact(&mut tape, &phi, &omega, &t).unwrap();
        let a_star = logits_steady(&mut tape, &phi, &omega).unwrap();
        for (x, s) in a.tensor().data().iter().zip(a_star.tensor().data()) {
            assert!(*x >= 0.0 && x <= s);
        }
    }

    #[test]
    fn mode_consistency_exact_vs_steady_decay_bound() {
        let n = 400;
        let mut tape = Tape::inference();
        let phi = tape.leaf(Tensor::from_vec(vec![n], rand_vec(n, 81, 0.001, 1.0)).unwrap());
        let omega = tape.leaf(
            Tensor::from_vec(vec![n], rand_vec(n, 82, 1e-2f64.ln(), 10f64.ln()))
                .unwrap()
                .exp(),
        );
        let t = tape.leaf(Tensor::from_vec(vec![n], rand_vec(n, 83, 0.0, 1.0)).unwrap());
        let a = logits_exact(&mut tape, &phi, &omega, &t).unwrap();
        let a_star = logits_steady(&mut tape, &phi, &omega).unwrap();
        for i in 0..n {
            let gap = (a.tensor().data()[i] - a_star.tensor().data()[i]).abs();
            let bound = a_star.tensor().data()[i].abs()
                * (-omega.tensor().data()[i] * t.tensor().data()[i]).exp();
            assert!(gap <= bound + 1e-12);
        }
    }

    #[test]
    fn euler_iterates_stay_in_invariant_interval() {
        // dt * omega <= 1 keeps every iterate inside [0, a*] from a0 = 0;
        // the update is a convex move toward the equilibrium there.
        let n = 200;
        let steps = 6usize;
        let phi_v = rand_vec(n, 91, 0.01, 1.0);
        let omega_v: Vec<f64> =
            rand_vec(n, 92, 1e-2f64.ln(), 6f64.ln()).into_iter().map(f64::exp).collect();
        let t_v = rand_vec(n, 93, 0.01, 1.0);
        let mut tape = Tape::inference();
        let phi = tape.leaf(Tensor::from_vec(vec![n], phi_v.clone()).unwrap());
        let omega = tape.leaf(Tensor::from_vec(vec![n], omega_v.clone()).unwrap());
        for j in 1..=steps {
            let tj: Vec<f64> = t_v.iter().map(|t| t * j as f64 / steps as f64).collect();
            let t = tape.leaf(Tensor::from_vec(vec![n], tj).unwrap());
            let a = logits_euler(&mut tape, &phi, &omega, &t, j).unwrap();
            for i in 0..n {
                let a_star = phi_v[i] / omega_v[i];
                let dt = t_v[i] / steps as f64;
                assert!(dt * omega_v[i] <= 1.0);
                let v = a.tensor().data()[i];
                assert!(v >= -1e-12 && v <= a_star + 1e-12, "iterate {v} vs [0, {a_star}]");
            }
        }
    }

    #[test]
    fn euler_contracts_toward_equilibrium_below_stability_limit() {
        // for 1 < dt * omega < 2 iterates can overshoot a*, but the distance
        // to the equilibrium still shrinks every step, so nothing diverges
        let n = 200;
        let steps = 6usize;
        let phi_v = rand_vec(n, 94, 0.01, 1.0);
        let omega_v: Vec<f64> =
            rand_vec(n, 95, 1e-2f64.ln(), 10f64.ln()).into_iter().map(f64::exp).collect();
        let t_v = rand_vec(n, 96, 0.01, 1.0);
        let mut tape = Tape::inference();
        let phi = tape.leaf(Tensor::from_vec(vec![n], phi_v.clone()).unwrap());
        let omega = tape.leaf(Tensor::from_vec(vec![n], omega_v.clone()).unwrap());
        let mut prev_dist: Vec<f64> = phi_v.iter().zip(&omega_v).map(|(p, w)| p / w).collect();
        for j in 1..=steps {
            let tj: Vec<f64> = t_v.iter().map(|t| t * j as f64 / steps as f64).collect();
            let t = tape.leaf(Tensor::from_vec(vec![n], tj).unwrap());
            let a = logits_euler(&mut tape, &phi, &omega, &t, j).unwrap();
            for i in 0..n {
                let dt = t_v[i] / steps as f64;
                assert!(dt * omega_v[i] < 2.0);
                let a_star = phi_v[i] / omega_v[i];
                let dist = (a.tensor().data()[i] - a_star).abs();
                assert!(dist <= prev_dist[i] + 1e-12);
                prev_dist[i] = dist;
            }
        }
    }

    #[test]
    fn phi_gradient_of_exact_logits_matches_closed_form() {
        // layer-internal d a / d phi must equal (1 - e^{-wt}) / w
        let n = 64;
        let phi_v = rand_vec(n, 95, 0.05, 1.0);
        let omega_v: Vec<f64> =
            rand_vec(n, 96, 1e-2f64.ln(), 10f64.ln()).into_iter().map(f64::exp).collect();
        let t_v = rand_vec(n, 97, 0.01, 1.0);
        let mut tape = Tape::new();
        let phi = tape.leaf(Tensor::from_vec(vec![n], phi_v).unwrap());
        let omega = tape.leaf(Tensor::from_vec(vec![n], omega_v.clone()).unwrap());
        let t = tape.leaf(Tensor::from_vec(vec![n], t_v.clone()).unwrap());
        let a = logits_exact(&mut tape, &phi, &omega, &t).unwrap();
        let loss = tape.sum_all(&a);
        let grads = tape.backward(&loss).unwrap();
        let g_phi = grads.get(&phi).unwrap();
        for i in 0..n {
            let want = oracle::sensitivity_phi(omega_v[i], t_v[i]);
            let got = g_phi.data()[i];
            assert!(
                (got - want).abs() / (want.abs() + 1e-8) < 1e-12,
                "autodiff {got} vs closed form {want}"
            );
        }
    }

    #[test]
    fn delta_t_output_scales_linearly_bit_exact() {
        let base = tiny_config();
        let params = NacParams::init(&base).unwrap();
        let x = Tensor::from_vec(vec![1, 5, 8], rand_vec(40, 99, -1.0, 1.0)).unwrap();
        let run = |dt: f64| {
            let config = NacConfig { delta_t: dt, ..base.clone() };
            let mut tape = Tape::inference();
            let bound = params.bind(&mut tape);
            let xv = tape.leaf(x.clone());
            nac_forward(&mut tape, &config, &bound, &xv, None).unwrap().tensor().clone()
        };
        // the output projection is affine, so compare pre-projection scaling
        // through zeroed b_o and identity-free w_o: instead compare the
        // doubled half-step against the full step after removing the shared
        // affine tail by linearity of matmul.
        let half = run(0.5);
        let full = run(1.0);
        // out(dt) = (dt * M) W_o + b_o  =>  out(1.0) - b_o = 2 (out(0.5) - b_o)
        let b_o = &params.b_o;
        for j in 0..half.numel() {
            let bo = b_o.data()[j % 8];
            let lhs = full.data()[j] - bo;
            let rhs = 2.0 * (half.data()[j] - bo);
            assert_eq!(lhs.to_bits(), rhs.to_bits());
        }
    }
}
