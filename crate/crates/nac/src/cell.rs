//! The repurposed NCP cell: masked input/recurrent weights over a sparse
//! wiring, a tanh neuron update, group disabling, and per-head affine
//! readouts.
//!
//! One `step` is the algebraic update
//!
//! ```text
//! u~  = u (.) w_in + b_in
//! r   = x_prev (W_rec (.) M_rec)
//! s   = u~ (W_in (.) M_in)
//! x   = tanh(r + s + b) (.) mask_act
//! y   = x[I_out] (.) w_out + b_out
//! ```
//!
//! Masked weights never contribute regardless of their value, and disabled
//! neurons have state exactly 0 after every update. With `x_prev = 0` a step
//! is a pure function of `u`. Cells used on static inputs iterate the step a
//! fixed small number of times from `x = 0` so signals can traverse the
//! inter -> command -> motor pathway; state never persists across inputs.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tape::{Tape, Value};
use crate::tensor::Tensor;
use crate::wiring::{build_wiring, default_allowed_edges, size_for_dmodel, Group, Groups, WiringSpec};

/// How many step iterations a backbone runs on a static input: one hop each
/// for inter -> command -> motor.
pub const BACKBONE_UNFOLD_STEPS: usize = 3;

/// Affine readout over a fixed list of (non-disabled) neurons.
#[derive(Debug, Clone)]
pub struct OutputHead {
    pub indices: Vec<usize>,
    pub w_out: Tensor,
    pub b_out: Tensor,
}

impl OutputHead {
    fn new(indices: Vec<usize>) -> Self {
        let n = indices.len();
        OutputHead { indices, w_out: Tensor::ones(&[n]), b_out: Tensor::zeros(&[n]) }
    }
}

/// Trunk parameters of one cell. Weights under a zero mask are stored as
/// zero and stay inert whatever their value.
#[derive(Debug, Clone)]
pub struct CellParams {
    pub wiring: WiringSpec,
    pub disabled: Vec<Group>,
    /// Per-input affine scale/shift, both `[d_in]`.
    pub w_in: Tensor,
    pub b_in: Tensor,
    /// `[d_in, N]`, masked by `wiring.a_in`.
    pub weight_in: Tensor,
    /// `[N, N]`, masked by `wiring.a_rec`.
    pub weight_rec: Tensor,
    /// `[N]` neuron bias.
    pub bias: Tensor,
    /// `[N]` 0/1; zero for every neuron in a disabled group.
    pub mask_act: Tensor,
}

impl CellParams {
    /// Fan-in scaled uniform init: for target neuron j, weights and bias draw
    /// from U(-r, r) with r = 1/sqrt(unmasked in-edges of j). Per-input and
    /// per-output affines start at identity (w = 1, b = 0).
    pub fn new(wiring: WiringSpec, disabled: Vec<Group>, seed: u64) -> Self {
        let n = wiring.n_total();
        let d_in = wiring.d_in;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);

        let mut fan = vec![0usize; n];
        for j in 0..n {
            let from_in = (0..d_in).filter(|&c| wiring.a_in.data()[c * n + j] == 1.0).count();
            let from_rec = (0..n).filter(|&i| wiring.a_rec.data()[i * n + j] == 1.0).count();
            fan[j] = from_in + from_rec;
        }
        let radius = |j: usize| 1.0 / (fan[j].max(1) as f64).sqrt();

        let mut weight_in = vec![0.0; d_in * n];
        for c in 0..d_in {
            for j in 0..n {
                if wiring.a_in.data()[c * n + j] == 1.0 {
                    let r = radius(j);
                    weight_in[c * n + j] = rng.gen_range(-r..r);
                }
            }
        }
        let mut weight_rec = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..n {
                if wiring.a_rec.data()[i * n + j] == 1.0 {
                    let r = radius(j);
                    weight_rec[i * n + j] = rng.gen_range(-r..r);
                }
            }
        }
        // Nonzero bias keeps command/motor states informative in the first
        // unfold steps before upstream activity reaches them.
        let mut bias = vec![0.0; n];
        for (j, b) in bias.iter_mut().enumerate() {
            let r = radius(j);
            *b = rng.gen_range(-r..r);
        }

        let mut mask_act = vec![1.0; n];
        for &g in &disabled {
            for j in wiring.groups.range(g) {
                mask_act[j] = 0.0;
            }
        }

        CellParams {
            w_in: Tensor::ones(&[d_in]),
            b_in: Tensor::zeros(&[d_in]),
            weight_in: Tensor::from_vec(vec![d_in, n], weight_in).unwrap(),
            weight_rec: Tensor::from_vec(vec![n, n], weight_rec).unwrap(),
            bias: Tensor::from_vec(vec![n], bias).unwrap(),
            mask_act: Tensor::from_vec(vec![n], mask_act).unwrap(),
            wiring,
            disabled,
        }
    }

    pub fn n_total(&self) -> usize {
        self.wiring.n_total()
    }

    pub fn d_in(&self) -> usize {
        self.wiring.d_in
    }

    fn rec_mask_live(&self) -> bool {
        self.wiring.a_rec.data().iter().any(|&v| v != 0.0)
    }

    fn check_head(&self, head: &OutputHead) -> Result<()> {
        for &i in &head.indices {
            if i >= self.n_total() {
                return Err(Error::config(format!("head index {i} out of range")));
            }
            if self.mask_act.data()[i] == 0.0 {
                return Err(Error::config(format!(
                    "head reads neuron {i}, which belongs to a disabled group"
                )));
            }
        }
        Ok(())
    }

    /// Bind parameters onto a tape. Mask tensors are bound as constants;
    /// `weight_rec` is bound only when its mask has live entries.
    pub fn bind(&self, tape: &mut Tape) -> BoundCell {
        BoundCell {
            w_in: tape.leaf(self.w_in.clone()),
            b_in: tape.leaf(self.b_in.clone()),
            weight_in: tape.leaf(self.weight_in.clone()),
            weight_rec: if self.rec_mask_live() {
                Some(tape.leaf(self.weight_rec.clone()))
            } else {
                None
            },
            bias: tape.leaf(self.bias.clone()),
            m_in: tape.constant(self.wiring.a_in.clone()),
            m_rec: tape.constant(self.wiring.a_rec.clone()),
            mask_act: tape.constant(self.mask_act.clone()),
        }
    }

    /// Named trainable tensors. Fully-masked weight matrices are omitted:
    /// they can never influence an output.
    pub fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor)) {
        f(format!("{prefix}.w_in"), &self.w_in);
        f(format!("{prefix}.b_in"), &self.b_in);
        f(format!("{prefix}.weight_in"), &self.weight_in);
        if self.rec_mask_live() {
            f(format!("{prefix}.weight_rec"), &self.weight_rec);
        }
        f(format!("{prefix}.bias"), &self.bias);
    }

    pub fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor)) {
        f(format!("{prefix}.w_in"), &mut self.w_in);
        f(format!("{prefix}.b_in"), &mut self.b_in);
        f(format!("{prefix}.weight_in"), &mut self.weight_in);
        if self.wiring.a_rec.data().iter().any(|&v| v != 0.0) {
            f(format!("{prefix}.weight_rec"), &mut self.weight_rec);
        }
        f(format!("{prefix}.bias"), &mut self.bias);
    }
}

/// Cell parameters bound to a tape for one forward pass.
pub struct BoundCell {
    pub w_in: Value,
    pub b_in: Value,
    pub weight_in: Value,
    pub weight_rec: Option<Value>,
    pub bias: Value,
    pub m_in: Value,
    pub m_rec: Value,
    pub mask_act: Value,
}

pub struct BoundHead {
    pub indices: Vec<usize>,
    pub w_out: Value,
    pub b_out: Value,
}

impl OutputHead {
    pub fn bind(&self, tape: &mut Tape) -> BoundHead {
        BoundHead {
            indices: self.indices.clone(),
            w_out: tape.leaf(self.w_out.clone()),
            b_out: tape.leaf(self.b_out.clone()),
        }
    }

    pub fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor)) {
        f(format!("{prefix}.w_out"), &self.w_out);
        f(format!("{prefix}.b_out"), &self.b_out);
    }

    pub fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor)) {
        f(format!("{prefix}.w_out"), &mut self.w_out);
        f(format!("{prefix}.b_out"), &mut self.b_out);
    }
}

/// One neuron update. `u` is `[B, d_in]`, `x_prev` is `[B, N]` or `None`
/// for the all-zero state (the recurrent term is skipped entirely then).
pub fn cell_state_step(
    tape: &mut Tape,
    cell: &BoundCell,
    u: &Value,
    x_prev: Option<&Value>,
) -> Result<Value> {
    let scaled = tape.mul(u, &cell.w_in)?;
    let u_tilde = tape.add(&scaled, &cell.b_in)?;
    let w_in_masked = tape.mul(&cell.weight_in, &cell.m_in)?;
    let s = tape.matmul(&u_tilde, &w_in_masked)?;
    let drive = match (x_prev, &cell.weight_rec) {
        (Some(x), Some(w_rec)) => {
            let w_rec_masked = tape.mul(w_rec, &cell.m_rec)?;
            let r = tape.matmul(x, &w_rec_masked)?;
            tape.add(&r, &s)?
        }
        _ => s,
    };
    let pre = tape.add(&drive, &cell.bias)?;
    let act = tape.tanh(&pre);
    tape.mul(&act, &cell.mask_act)
}

/// Affine readout `y = x[I_out] (.) w_out + b_out`.
pub fn head_output(tape: &mut Tape, head: &BoundHead, x: &Value) -> Result<Value> {
    let picked = tape.index_lastdim(x, &head.indices)?;
    let scaled = tape.mul(&picked, &head.w_out)?;
    tape.add(&scaled, &head.b_out)
}

/// The full single-step cell contract: `(y, x)` from `(u, x_prev)`.
pub fn ncp_cell_step(
    tape: &mut Tape,
    cell: &BoundCell,
    head: &BoundHead,
    u: &Value,
    x_prev: Option<&Value>,
) -> Result<(Value, Value)> {
    let x = cell_state_step(tape, cell, u, x_prev)?;
    let y = head_output(tape, head, &x)?;
    Ok((y, x))
}

/// Iterate the step `steps` times from `x = 0` with a constant input drive.
pub fn cell_forward(tape: &mut Tape, cell: &BoundCell, u: &Value, steps: usize) -> Result<Value> {
    let mut x = cell_state_step(tape, cell, u, None)?;
    for _ in 1..steps {
        x = cell_state_step(tape, cell, u, Some(&x))?;
    }
    Ok(x)
}

// ── Sensory gate ─────────────────────────────────────────────────────

/// Projection cell with only sensory neurons active; used for the q, k and
/// v streams. Inputs map straight onto sensory neurons, so a single step
/// fully determines the output and the cell has no live recurrence.
#[derive(Debug, Clone)]
pub struct SensoryGate {
    pub cell: CellParams,
    pub head: OutputHead,
    pub d_model: usize,
}

/// Sensory share of a unit budget under the 60% assignment rule,
/// `ceil(0.6 * units)` in exact integer arithmetic.
pub fn sensory_capacity(units: usize) -> usize {
    (3 * units).div_ceil(5)
}

pub fn make_sensory_gate(d_model: usize, sparsity: f64, seed: u64) -> Result<SensoryGate> {
    let (units, _) = size_for_dmodel(d_model);
    make_sensory_gate_with_units(d_model, units, sparsity, seed)
}

/// Build a projection gate from a total unit budget. 60% of the budget is
/// the sensory capacity; the standard sizing rule picks the smallest budget
/// whose capacity is exactly `d_model`, so every sensory neuron is read by
/// the output head and none of the gate's wiring is dead. The remaining
/// units form the disabled inter/command/motor groups.
pub fn make_sensory_gate_with_units(
    d_model: usize,
    units: usize,
    sparsity: f64,
    seed: u64,
) -> Result<SensoryGate> {
    if d_model > sensory_capacity(units) {
        return Err(Error::config(format!(
            "a {units}-unit gate supports at most {} sensory outputs, need {d_model}",
            sensory_capacity(units)
        )));
    }
    let leftover = units.saturating_sub(d_model);
    let inter = (leftover / 3).max(1);
    let command = ((leftover - leftover / 3) / 2).max(1);
    let motor = (leftover - leftover / 3 - (leftover - leftover / 3) / 2).max(1);
    let groups = Groups { sensory: d_model, inter, command, motor };
    // No recurrent edges: every non-sensory group is disabled and nothing
    // feeds back into sensory neurons.
    let wiring = build_wiring(groups, d_model, Group::Sensory, &[], sparsity, seed)?;
    let cell =
        CellParams::new(wiring, vec![Group::Inter, Group::Command, Group::Motor], seed ^ 0x5e);
    let head = OutputHead::new((0..d_model).collect());
    cell.check_head(&head)?;
    Ok(SensoryGate { cell, head, d_model })
}

impl SensoryGate {
    pub fn bind(&self, tape: &mut Tape) -> (BoundCell, BoundHead) {
        (self.cell.bind(tape), self.head.bind(tape))
    }

    /// Apply per token: `[B, T, d_model] -> [B, T, d_model]`.
    pub fn forward(&self, tape: &mut Tape, x: &Value) -> Result<Value> {
        let (b, t, d) = match x.shape() {
            [b, t, d] => (*b, *t, *d),
            other => return Err(Error::dim(format!("gate expects [B, T, d], got {other:?}"))),
        };
        if d != self.d_model {
            return Err(Error::dim(format!("gate width {} vs input {d}", self.d_model)));
        }
        let (cell, head) = self.bind(tape);
        let flat = tape.reshape(x, vec![b * t, d])?;
        let (y, _) = ncp_cell_step(tape, &cell, &head, &flat, None)?;
        tape.reshape(&y, vec![b, t, d])
    }

    pub fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor)) {
        self.cell.visit(prefix, f);
        self.head.visit(prefix, f);
    }

    pub fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor)) {
        self.cell.visit_mut(prefix, f);
        self.head.visit_mut(prefix, f);
    }
}

// ── Backbone ─────────────────────────────────────────────────────────

/// Shared trunk over inter -> command -> motor pathways with two disjoint
/// scalar heads. Each head reads its own slice of motor neurons and reduces
/// by mean; head 1 feeds the content-target gate, head 2 the time-constant
/// gate.
#[derive(Debug, Clone)]
pub struct Backbone {
    pub cell: CellParams,
    pub phi_head: OutputHead,
    pub omega_head: OutputHead,
    pub unfold_steps: usize,
}

/// Split a unit budget into inter/command/motor (roughly 50/30/20), keeping
/// at least one neuron per group and two motor neurons for the heads.
fn split_backbone_units(units: usize) -> Result<(usize, usize, usize)> {
    if units < 4 {
        return Err(Error::config(format!(
            "backbone needs at least 4 units (1 inter, 1 command, 2 motor), got {units}"
        )));
    }
    let mut inter = ((units as f64) * 0.5).round() as usize;
    let mut command = ((units as f64) * 0.3).round() as usize;
    inter = inter.max(1);
    command = command.max(1);
    while units - inter - command < 2 {
        if inter > 1 {
            inter -= 1;
        } else {
            command -= 1;
        }
    }
    let motor = units - inter - command;
    Ok((inter, command, motor))
}

pub fn make_backbone(d_in: usize, units: usize, sparsity: f64, seed: u64) -> Result<Backbone> {
    let (inter, command, motor) = split_backbone_units(units)?;
    let groups = Groups { sensory: 1, inter, command, motor };
    let allowed: Vec<(Group, Group)> = default_allowed_edges()
        .into_iter()
        .filter(|(a, b)| *a != Group::Sensory && *b != Group::Sensory)
        .collect();
    let wiring = build_wiring(groups, d_in, Group::Inter, &allowed, sparsity, seed)?;
    let cell = CellParams::new(wiring, vec![Group::Sensory], seed ^ 0xbb);

    let motor_range = groups.range(Group::Motor);
    let motor_idx: Vec<usize> = motor_range.collect();
    let phi_take = motor_idx.len().div_ceil(2);
    let phi_head = OutputHead::new(motor_idx[..phi_take].to_vec());
    let omega_head = OutputHead::new(motor_idx[phi_take..].to_vec());
    cell.check_head(&phi_head)?;
    cell.check_head(&omega_head)?;
    Ok(Backbone { cell, phi_head, omega_head, unfold_steps: BACKBONE_UNFOLD_STEPS })
}

impl Backbone {
    /// Pre-activation head scalars for a batch of pair vectors
    /// `u [P, 2 d_head] -> (phi_pre [P, 1], omega_pre [P, 1])`.
    pub fn head_scalars(&self, tape: &mut Tape, u: &Value) -> Result<(Value, Value)> {
        let cell = self.cell.bind(tape);
        let phi = self.phi_head.bind(tape);
        let omega = self.omega_head.bind(tape);
        let x = cell_forward(tape, &cell, u, self.unfold_steps)?;
        let phi_out = head_output(tape, &phi, &x)?;
        let omega_out = head_output(tape, &omega, &x)?;
        Ok((tape.mean_lastdim(&phi_out), tape.mean_lastdim(&omega_out)))
    }

    pub fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor)) {
        self.cell.visit(&format!("{prefix}.trunk"), f);
        self.phi_head.visit(&format!("{prefix}.phi"), f);
        self.omega_head.visit(&format!("{prefix}.omega"), f);
    }

    pub fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor)) {
        self.cell.visit_mut(&format!("{prefix}.trunk"), f);
        self.phi_head.visit_mut(&format!("{prefix}.phi"), f);
        self.omega_head.visit_mut(&format!("{prefix}.omega"), f);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy_cell(seed: u64) -> (CellParams, OutputHead) {
        let groups = Groups { sensory: 1, inter: 1, command: 1, motor: 1 };
        let wiring =
            build_wiring(groups, 1, Group::Sensory, &default_allowed_edges(), 0.0, seed).unwrap();
        let cell = CellParams::new(wiring, vec![], seed);
        let head = OutputHead::new(vec![3]);
        (cell, head)
    }

    #[test]
    fn zero_weights_give_bias_only_output() {
        let (mut cell, mut head) = toy_cell(3);
        for t in [&mut cell.weight_in, &mut cell.weight_rec, &mut cell.bias] {
            for v in t.data_mut() {
                *v = 0.0;
            }
        }
        head.b_out = Tensor::from_vec(vec![1], vec![0.25]).unwrap();
        let mut tape = Tape::inference();
        let bound = cell.bind(&mut tape);
        let bhead = head.bind(&mut tape);
        let u = tape.leaf(Tensor::from_vec(vec![2, 1], vec![5.0, -3.0]).unwrap());
        let (y, x) = ncp_cell_step(&mut tape, &bound, &bhead, &u, None).unwrap();
        assert!(x.tensor().data().iter().all(|&v| v == 0.0));
        assert!(y.tensor().data().iter().all(|&v| v == 0.25));
    }

    #[test]
    fn disabled_neuron_state_is_exactly_zero() {
        let groups = Groups { sensory: 2, inter: 2, command: 2, motor: 2 };
        let wiring =
            build_wiring(groups, 2, Group::Sensory, &default_allowed_edges(), 0.0, 9).unwrap();
        let cell = CellParams::new(wiring, vec![Group::Inter, Group::Command, Group::Motor], 9);
        let mut tape = Tape::inference();
        let bound = cell.bind(&mut tape);
        let u = tape.leaf(Tensor::from_vec(vec![1, 2], vec![0.7, -1.9]).unwrap());
        let x1 = cell_state_step(&mut tape, &bound, &u, None).unwrap();
        let x2 = cell_state_step(&mut tape, &bound, &u, Some(&x1)).unwrap();
        for x in [&x1, &x2] {
            for j in 2..8 {
                assert_eq!(x.tensor().data()[j], 0.0, "disabled neuron {j} has nonzero state");
            }
        }
    }

    #[test]
    fn hand_computed_trace_matches() {
        // 4-neuron chain with handpicked weights: input 2.0 drives the
        // sensory neuron, recurrence pushes it along sensory->inter.
        let (mut cell, mut head) = toy_cell(1);
        let n = 4;
        for v in cell.weight_rec.data_mut() {
            *v = 0.0;
        }
        for v in cell.bias.data_mut() {
            *v = 0.0;
        }
        // input -> sensory weight 0.5
        cell.weight_in.data_mut()[0] = 0.5;
        // sensory(0) -> inter(1) weight 0.8; inter(1) -> command(2) 1.0;
        // command(2) -> motor(3) -0.6
        cell.weight_rec.data_mut()[n + 2] = 1.0;
        cell.weight_rec.data_mut()[2 * n + 3] = -0.6;
        cell.weight_rec.data_mut()[1] = 0.8;
        head.indices = vec![3];
        head.w_out = Tensor::from_vec(vec![1], vec![2.0]).unwrap();
        head.b_out = Tensor::from_vec(vec![1], vec![0.1]).unwrap();

        let mut tape = Tape::inference();
        let bound = cell.bind(&mut tape);
        let bhead = head.bind(&mut tape);
        let u = tape.leaf(Tensor::from_vec(vec![1, 1], vec![2.0]).unwrap());

        // step 1 from x=0: x0 = tanh(0.5*2) = tanh(1)
        let x1 = cell_state_step(&mut tape, &bound, &u, None).unwrap();
        let s0 = 1.0f64.tanh();
        assert!((x1.tensor().data()[0] - s0).abs() < 1e-15);
        assert_eq!(x1.tensor().data()[1], 0.0);

        // step 2: inter = tanh(0.8 * s0 + 0), sensory re-evaluates to s0
        let x2 = cell_state_step(&mut tape, &bound, &u, Some(&x1)).unwrap();
        let i1 = (0.8 * s0).tanh();
        assert!((x2.tensor().data()[1] - i1).abs() < 1e-15);

        // step 3: command = tanh(1.0 * i1)
        let x3 = cell_state_step(&mut tape, &bound, &u, Some(&x2)).unwrap();
        let c2 = i1.tanh();
        assert!((x3.tensor().data()[2] - c2).abs() < 1e-15);

        // step 4: motor = tanh(-0.6 * c2); y = 2 * motor + 0.1
        let (y, x4) = ncp_cell_step(&mut tape, &bound, &bhead, &u, Some(&x3)).unwrap();
        let m3 = (-0.6 * c2).tanh();
        assert!((x4.tensor().data()[3] - m3).abs() < 1e-15);
        assert!((y.tensor().data()[0] - (2.0 * m3 + 0.1)).abs() < 1e-15);
    }

    #[test]
    fn head_on_disabled_neuron_is_config_error() {
        let groups = Groups { sensory: 2, inter: 1, command: 1, motor: 1 };
        let wiring = build_wiring(groups, 2, Group::Sensory, &[], 0.0, 5).unwrap();
        let cell = CellParams::new(wiring, vec![Group::Motor], 5);
        let head = OutputHead::new(vec![4]); // the motor neuron, disabled
        assert!(matches!(cell.check_head(&head), Err(Error::Config(_))));
    }

    #[test]
    fn masked_weight_values_never_contribute() {
        let d_model = 6;
        let gate = make_sensory_gate(d_model, 0.5, 21).unwrap();
        let x = Tensor::from_vec(vec![1, 2, d_model], (0..12).map(|i| i as f64 / 6.0).collect())
            .unwrap();
        let run = |g: &SensoryGate| {
            let mut tape = Tape::inference();
            let xv = tape.leaf(x.clone());
            g.forward(&mut tape, &xv).unwrap().tensor().clone()
        };
        let base = run(&gate);

        let mut poked = gate.clone();
        let n = poked.cell.n_total();
        let mut poked_any = false;
        for c in 0..d_model {
            for j in 0..n {
                if poked.cell.wiring.a_in.data()[c * n + j] == 0.0 {
                    poked.cell.weight_in.data_mut()[c * n + j] = 1e9;
                    poked_any = true;
                }
            }
        }
        assert!(poked_any);
        assert_eq!(run(&poked), base);
    }

    #[test]
    fn sensory_gate_identity_like_params_match_direct_formula() {
        let d_model = 4;
        let gate = make_sensory_gate(d_model, 0.0, 2).unwrap();
        let mut g = gate.clone();
        let n = g.cell.n_total();
        // route channel c to sensory neuron c with weight 1, everything else 0
        for v in g.cell.weight_in.data_mut() {
            *v = 0.0;
        }
        for c in 0..d_model {
            g.cell.weight_in.data_mut()[c * n + c] = 0.7;
        }
        for v in g.cell.bias.data_mut() {
            *v = 0.0;
        }
        let x = Tensor::from_vec(vec![1, 1, d_model], vec![0.3, -1.2, 0.0, 2.5]).unwrap();
        let mut tape = Tape::inference();
        let xv = tape.leaf(x.clone());
        let y = g.forward(&mut tape, &xv).unwrap();
        for (o, i) in y.tensor().data().iter().zip(x.data()) {
            assert!((o - (0.7 * i).tanh()).abs() < 1e-15);
        }
    }

    #[test]
    fn sensory_gate_width_error() {
        assert!(matches!(
            make_sensory_gate_with_units(8, 4, 0.5, 1),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn gate_output_shape_contract() {
        let gate = make_sensory_gate(8, 0.5, 77).unwrap();
        let mut tape = Tape::inference();
        let x = tape.leaf(Tensor::zeros(&[3, 5, 8]));
        let y = gate.forward(&mut tape, &x).unwrap();
        assert_eq!(y.shape(), &[3, 5, 8]);
    }

    #[test]
    fn backbone_zero_trunk_heads_equal_b_out() {
        let mut bb = make_backbone(8, 12, 0.5, 4).unwrap();
        for t in [&mut bb.cell.weight_in, &mut bb.cell.weight_rec, &mut bb.cell.bias] {
            for v in t.data_mut() {
                *v = 0.0;
            }
        }
        for v in bb.phi_head.b_out.data_mut() {
            *v = 0.35;
        }
        for v in bb.omega_head.b_out.data_mut() {
            *v = -0.8;
        }
        let mut tape = Tape::inference();
        let u = tape.leaf(Tensor::from_vec(vec![2, 8], (0..16).map(|i| i as f64).collect()).unwrap());
        let (phi, omega) = bb.head_scalars(&mut tape, &u).unwrap();
        for &v in phi.tensor().data() {
            assert!((v - 0.35).abs() < 1e-15);
        }
        for &v in omega.tensor().data() {
            assert!((v - -0.8).abs() < 1e-15);
        }
    }

    #[test]
    fn backbone_heads_are_disjoint() {
        let bb = make_backbone(8, 12, 0.5, 4).unwrap();
        for i in &bb.phi_head.indices {
            assert!(!bb.omega_head.indices.contains(i));
        }

        // perturbing head-1 readout weights leaves head-2 output unchanged
        let u = Tensor::from_vec(vec![3, 8], (0..24).map(|i| (i as f64).sin()).collect()).unwrap();
        let eval = |b: &Backbone| {
            let mut tape = Tape::inference();
            let uv = tape.leaf(u.clone());
            let (p, o) = b.head_scalars(&mut tape, &uv).unwrap();
            (p.tensor().clone(), o.tensor().clone())
        };
        let (_, omega_base) = eval(&bb);
        let mut poked = bb.clone();
        for v in poked.phi_head.w_out.data_mut() {
            *v += 3.7;
        }
        let (phi_poked, omega_poked) = eval(&poked);
        assert_eq!(omega_poked, omega_base);
        assert!(phi_poked != eval(&bb).0);
    }

    #[test]
    fn trunk_weight_moves_both_heads() {
        // finite-difference on shared trunk weights: some live input edge
        // must shift both head outputs through the common state.
        let bb = make_backbone(6, 10, 0.3, 8).unwrap();
        let u = Tensor::from_vec(vec![1, 6], vec![0.4, -0.2, 1.1, 0.5, -0.7, 0.3]).unwrap();
        let eval = |b: &Backbone| {
            let mut tape = Tape::inference();
            let uv = tape.leaf(u.clone());
            let (p, o) = b.head_scalars(&mut tape, &uv).unwrap();
            (p.tensor().data()[0], o.tensor().data()[0])
        };
        let (p0, o0) = eval(&bb);
        let n = bb.cell.n_total();
        let mut found = false;
        for slot in 0..6 * n {
            if bb.cell.wiring.a_in.data()[slot] != 1.0 {
                continue;
            }
            let mut poked = bb.clone();
            poked.cell.weight_in.data_mut()[slot] += 1e-4;
            let (p1, o1) = eval(&poked);
            if (p1 - p0).abs() > 0.0 && (o1 - o0).abs() > 0.0 {
                found = true;
                break;
            }
        }
        assert!(found, "no trunk input weight moved both heads");
    }

    #[test]
    fn backbone_too_small_is_config_error() {
        assert!(matches!(make_backbone(4, 3, 0.0, 1), Err(Error::Config(_))));
    }

    #[test]
    fn stateless_step_is_pure_in_u() {
        let (cell, head) = toy_cell(6);
        let mut tape = Tape::inference();
        let bound = cell.bind(&mut tape);
        let bhead = head.bind(&mut tape);
        let u = tape.leaf(Tensor::from_vec(vec![1, 1], vec![0.9]).unwrap());
        let (y1, _) = ncp_cell_step(&mut tape, &bound, &bhead, &u, None).unwrap();
        let zeros = tape.constant(Tensor::zeros(&[1, cell.n_total()]));
        let (y2, _) = ncp_cell_step(&mut tape, &bound, &bhead, &u, Some(&zeros)).unwrap();
        assert_eq!(y1.tensor(), y2.tensor());
    }
}
