//! Sparse four-group wiring: sensory, inter, command, motor neurons.
//!
//! A wiring is a pair of binary adjacency masks sampled from an allowed
//! group-to-group edge map with a seeded Bernoulli(1-s) keep rule, plus a
//! repair pass that gives every reachable neuron at least one incoming edge.
//! Masks are immutable after construction.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::json;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Group {
    Sensory,
    Inter,
    Command,
    Motor,
}

impl Group {
    pub fn name(self) -> &'static str {
        match self {
            Group::Sensory => "sensory",
            Group::Inter => "inter",
            Group::Command => "command",
            Group::Motor => "motor",
        }
    }
}

/// Neuron counts per group. Neuron indices run sensory, inter, command,
/// motor, in that order.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Groups {
    pub sensory: usize,
    pub inter: usize,
    pub command: usize,
    pub motor: usize,
}

impl Groups {
    pub fn total(&self) -> usize {
        self.sensory + self.inter + self.command + self.motor
    }

    pub fn range(&self, g: Group) -> std::ops::Range<usize> {
        let s = self.sensory;
        let i = s + self.inter;
        let c = i + self.command;
        match g {
            Group::Sensory => 0..s,
            Group::Inter => s..i,
            Group::Command => i..c,
            Group::Motor => c..self.total(),
        }
    }

    pub fn group_of(&self, neuron: usize) -> Group {
        if neuron < self.sensory {
            Group::Sensory
        } else if neuron < self.sensory + self.inter {
            Group::Inter
        } else if neuron < self.sensory + self.inter + self.command {
            Group::Command
        } else {
            Group::Motor
        }
    }
}

/// Sparse wiring: input and recurrent binary masks plus the recipe that
/// produced them.
#[derive(Debug, Clone)]
pub struct WiringSpec {
    pub groups: Groups,
    pub d_in: usize,
    pub input_group: Group,
    pub sparsity: f64,
    pub seed: u64,
    pub allowed_rec: Vec<(Group, Group)>,
    /// Binary mask `[d_in, N]`: input channel -> neuron.
    pub a_in: Tensor,
    /// Binary mask `[N, N]`: entry (i, j) is the edge i -> j.
    pub a_rec: Tensor,
}

/// Canonical allowed recurrent edges: feedforward sensory->inter, then
/// inter->command with recurrent command<->command and command<->motor.
pub fn default_allowed_edges() -> Vec<(Group, Group)> {
    vec![
        (Group::Sensory, Group::Inter),
        (Group::Inter, Group::Command),
        (Group::Command, Group::Command),
        (Group::Command, Group::Motor),
        (Group::Motor, Group::Command),
    ]
}

/// Sample a wiring. Deterministic for a fixed `(groups, d_in, input_group,
/// allowed, s, seed)` tuple: each allowed slot is kept with probability
/// `1 - s`, scanned in row-major order, then a repair pass adds one random
/// in-edge to any stranded neuron.
pub fn build_wiring(
    groups: Groups,
    d_in: usize,
    input_group: Group,
    allowed_rec: &[(Group, Group)],
    sparsity: f64,
    seed: u64,
) -> Result<WiringSpec> {
    if groups.sensory < 1 || groups.inter < 1 || groups.command < 1 || groups.motor < 1 {
        return Err(Error::arg(format!("all group sizes must be >= 1, got {groups:?}")));
    }
    if d_in < 1 {
        return Err(Error::arg("d_in must be >= 1".to_string()));
    }
    if !(0.0..1.0).contains(&sparsity) {
        return Err(Error::arg(format!(
            "sparsity must be in [0, 1), got {sparsity} (s = 1 would strand every neuron)"
        )));
    }
    let n = groups.total();
    let keep = 1.0 - sparsity;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let input_range = groups.range(input_group);
    let mut a_in = vec![0.0; d_in * n];
    for c in 0..d_in {
        for j in input_range.clone() {
            if rng.gen::<f64>() < keep {
                a_in[c * n + j] = 1.0;
            }
        }
    }

    let mut a_rec = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            let pair = (groups.group_of(i), groups.group_of(j));
            if allowed_rec.contains(&pair) && rng.gen::<f64>() < keep {
                a_rec[i * n + j] = 1.0;
            }
        }
    }

    // Repair 1: any neuron with allowed in-edges but none realized gets one,
    // chosen uniformly among its allowed sources.
    for j in 0..n {
        let gj = groups.group_of(j);
        let mut allowed_in: Vec<usize> = (0..n)
            .filter(|&i| allowed_rec.contains(&(groups.group_of(i), gj)))
            .collect();
        let input_slots = if input_range.contains(&j) { d_in } else { 0 };
        let realized_rec = (0..n).filter(|&i| a_rec[i * n + j] == 1.0).count();
        let realized_in = (0..d_in).filter(|&c| a_in[c * n + j] == 1.0).count();
        if allowed_in.is_empty() && input_slots == 0 {
            continue;
        }
        if realized_rec + realized_in > 0 {
            continue;
        }
        let total_slots = allowed_in.len() + input_slots;
        let pick = rng.gen_range(0..total_slots);
        if pick < allowed_in.len() {
            let src = allowed_in.swap_remove(pick);
            a_rec[src * n + j] = 1.0;
        } else {
            let c = pick - allowed_in.len();
            a_in[c * n + j] = 1.0;
        }
    }

    // Repair 2: every input channel drives at least one neuron, so no input
    // dimension is silently ignored.
    if !input_range.is_empty() {
        for c in 0..d_in {
            if input_range.clone().all(|j| a_in[c * n + j] == 0.0) {
                let j = input_range.start + rng.gen_range(0..input_range.len());
                a_in[c * n + j] = 1.0;
            }
        }
    }

    // Repair 3: keep the funnel connected. Every inter neuron gets at least
    // one edge into command and every command neuron one into motor (where
    // those pairs are allowed); without this, sparsity can strand a neuron's
    // entire in-wiring behind a dead end and its weights never learn.
    for (src_group, dst_group) in [(Group::Inter, Group::Command), (Group::Command, Group::Motor)]
    {
        if !allowed_rec.contains(&(src_group, dst_group)) {
            continue;
        }
        let dst = groups.range(dst_group);
        for i in groups.range(src_group) {
            if dst.clone().all(|j| a_rec[i * n + j] == 0.0) {
                let j = dst.start + rng.gen_range(0..dst.len());
                a_rec[i * n + j] = 1.0;
            }
        }
    }

    Ok(WiringSpec {
        groups,
        d_in,
        input_group,
        sparsity,
        seed,
        allowed_rec: allowed_rec.to_vec(),
        a_in: Tensor::from_vec(vec![d_in, n], a_in)?,
        a_rec: Tensor::from_vec(vec![n, n], a_rec)?,
    })
}

impl WiringSpec {
    pub fn n_total(&self) -> usize {
        self.groups.total()
    }

    /// Realized density over allowed slots, before/after repair are nearly
    /// identical (repair adds at most N edges).
    pub fn realized_density(&self) -> f64 {
        let n = self.n_total();
        let mut allowed = 0usize;
        let mut kept = 0usize;
        for i in 0..n {
            for j in 0..n {
                if self.allowed_rec.contains(&(self.groups.group_of(i), self.groups.group_of(j))) {
                    allowed += 1;
                    if self.a_rec.data()[i * n + j] == 1.0 {
                        kept += 1;
                    }
                }
            }
        }
        let input_range = self.groups.range(self.input_group);
        for c in 0..self.d_in {
            for j in input_range.clone() {
                allowed += 1;
                if self.a_in.data()[c * n + j] == 1.0 {
                    kept += 1;
                }
            }
        }
        if allowed == 0 {
            return 0.0;
        }
        kept as f64 / allowed as f64
    }

    pub fn allowed_slot_count(&self) -> usize {
        let n = self.n_total();
        let mut allowed = self.d_in * self.groups.range(self.input_group).len();
        for i in 0..n {
            for j in 0..n {
                if self.allowed_rec.contains(&(self.groups.group_of(i), self.groups.group_of(j))) {
                    allowed += 1;
                }
            }
        }
        allowed
    }

    /// Dump as JSON for golden-file comparison: masks as 0/1 row arrays.
    pub fn to_json(&self) -> serde_json::Value {
        let n = self.n_total();
        let rows =
            |t: &Tensor, w: usize| -> Vec<Vec<u8>> {
                t.data().chunks(w).map(|r| r.iter().map(|&v| v as u8).collect()).collect()
            };
        json!({
            "groups": {
                "sensory": self.groups.sensory,
                "inter": self.groups.inter,
                "command": self.groups.command,
                "motor": self.groups.motor,
            },
            "s": self.sparsity,
            "seed": self.seed,
            "d_in": self.d_in,
            "input_group": self.input_group.name(),
            "allowed_edges": self.allowed_rec.iter()
                .map(|(a, b)| vec![a.name(), b.name()])
                .collect::<Vec<_>>(),
            "A_in": rows(&self.a_in, n),
            "A_rec": rows(&self.a_rec, n),
        })
    }
}

/// Unit sizing for a given model width: the sensory pool holding 60% of the
/// cell and the backbone pool extending it.
///
/// `units_sensory = ceil((d_model - 0.5) / 0.6)` and
/// `units_backbone = d_model + floor(d_model / 0.6)`, computed exactly in
/// integer arithmetic (both reduce to `10 * d_model / 6` terms).
pub fn size_for_dmodel(d_model: usize) -> (usize, usize) {
    let units_sensory = 10 * d_model / 6;
    let units_backbone = d_model + 10 * d_model / 6;
    (units_sensory, units_backbone)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy_groups() -> Groups {
        Groups { sensory: 4, inter: 3, command: 2, motor: 2 }
    }

    #[test]
    fn zero_sparsity_keeps_every_allowed_slot() {
        let w = build_wiring(toy_groups(), 4, Group::Sensory, &default_allowed_edges(), 0.0, 7)
            .unwrap();
        assert!((w.realized_density() - 1.0).abs() < 1e-12);
        // mask equals allowed map exactly
        let n = w.n_total();
        for i in 0..n {
            for j in 0..n {
                let allowed = w
                    .allowed_rec
                    .contains(&(w.groups.group_of(i), w.groups.group_of(j)));
                assert_eq!(w.a_rec.data()[i * n + j] == 1.0, allowed);
            }
        }
    }

    #[test]
    fn same_seed_same_masks() {
        let a = build_wiring(toy_groups(), 4, Group::Sensory, &default_allowed_edges(), 0.5, 42)
            .unwrap();
        let b = build_wiring(toy_groups(), 4, Group::Sensory, &default_allowed_edges(), 0.5, 42)
            .unwrap();
        assert_eq!(a.a_in, b.a_in);
        assert_eq!(a.a_rec, b.a_rec);
        let c = build_wiring(toy_groups(), 4, Group::Sensory, &default_allowed_edges(), 0.5, 43)
            .unwrap();
        assert!(c.a_rec != a.a_rec || c.a_in != a.a_in);
    }

    #[test]
    fn sparsity_one_is_rejected() {
        let err = build_wiring(toy_groups(), 4, Group::Sensory, &default_allowed_edges(), 1.0, 7);
        assert!(matches!(err, Err(Error::Argument(_))));
    }

    #[test]
    fn half_sparsity_density_in_band_and_no_stranded_neuron() {
        // exhaustive mask scan oracle on a (4,3,2,2) wiring
        let w = build_wiring(toy_groups(), 4, Group::Sensory, &default_allowed_edges(), 0.5, 5)
            .unwrap();
        let density = w.realized_density();
        assert!(
            (0.35..=0.65).contains(&density),
            "density {density} outside [0.35, 0.65]"
        );
        let n = w.n_total();
        for j in 0..n {
            let gj = w.groups.group_of(j);
            let has_allowed_rec = (0..n)
                .any(|i| w.allowed_rec.contains(&(w.groups.group_of(i), gj)));
            let is_input = w.groups.range(w.input_group).contains(&j);
            if !has_allowed_rec && !is_input {
                continue;
            }
            let in_rec = (0..n).filter(|&i| w.a_rec.data()[i * n + j] == 1.0).count();
            let in_inp = (0..w.d_in).filter(|&c| w.a_in.data()[c * n + j] == 1.0).count();
            assert!(in_rec + in_inp >= 1, "neuron {j} stranded");
        }
    }

    #[test]
    fn realized_sparsity_tracks_target_on_large_wiring() {
        let groups = Groups { sensory: 20, inter: 12, command: 8, motor: 6 };
        for (seed, s) in [(1u64, 0.3), (2, 0.5), (3, 0.7)] {
            let w =
                build_wiring(groups, 16, Group::Sensory, &default_allowed_edges(), s, seed).unwrap();
            assert!(w.allowed_slot_count() >= 100);
            let density = w.realized_density();
            assert!(
                (density - (1.0 - s)).abs() <= 0.05,
                "seed {seed}: density {density} vs target {}",
                1.0 - s
            );
        }
    }

    #[test]
    fn unit_sizing_matches_float_formulas() {
        for d in 1..=512 {
            let (sensory, backbone) = size_for_dmodel(d);
            let sensory_f = ((d as f64 - 0.5) / 0.6).ceil() as usize;
            let backbone_f = d + (d as f64 / 0.6).floor() as usize;
            assert_eq!(sensory, sensory_f, "sensory at d={d}");
            assert_eq!(backbone, backbone_f, "backbone at d={d}");
        }
        assert_eq!(size_for_dmodel(64), (106, 170));
        assert_eq!(size_for_dmodel(1), (1, 2));
    }
}
