//! Independent reference dynamics for the logit ODE `da/dt = -w a + phi`.
//!
//! Everything here is scalar f64 math with no dependency on the tensor or
//! tape machinery, so it can serve as the oracle side of every dynamics
//! check: high-accuracy RK4 integration, forward-invariant interval checks,
//! exponential decay bounds, accuracy thresholds, and closed-form trajectory
//! sensitivities. The attention layer never calls into this module.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Slack separating a genuine bound violation from f64 roundoff at the
/// interval boundary.
pub const VIOLATION_SLACK: f64 = 1e-9;

/// First-order linear dynamics with one or more incoming connections.
/// The effective rate/drive are the sums over connections; the state decays
/// toward a rate-weighted convex combination of per-connection equilibria.
#[derive(Debug, Clone)]
pub struct ScalarOde {
    /// Per-connection rates `f_j`, all strictly positive.
    pub rates: Vec<f64>,
    /// Per-connection drives `phi_j`.
    pub drives: Vec<f64>,
    pub a0: f64,
    pub horizon: f64,
}

impl ScalarOde {
    pub fn single(rate: f64, drive: f64, a0: f64, horizon: f64) -> Self {
        ScalarOde { rates: vec![rate], drives: vec![drive], a0, horizon }
    }

    pub fn validate(&self) -> Result<()> {
        if self.rates.is_empty() || self.rates.len() != self.drives.len() {
            return Err(Error::arg("rates and drives must be non-empty and equal-length"));
        }
        if self.rates.iter().any(|&f| !(f > 0.0)) {
            return Err(Error::arg("all rates must be > 0"));
        }
        if !(self.horizon > 0.0) {
            return Err(Error::arg("horizon must be > 0"));
        }
        Ok(())
    }

    pub fn effective_rate(&self) -> f64 {
        self.rates.iter().sum()
    }

    pub fn effective_drive(&self) -> f64 {
        self.drives.iter().sum()
    }

    /// Steady state of the effective dynamics.
    pub fn equilibrium(&self) -> f64 {
        self.effective_drive() / self.effective_rate()
    }

    pub fn per_connection_equilibria(&self) -> Vec<f64> {
        self.rates.iter().zip(&self.drives).map(|(&f, &p)| p / f).collect()
    }

    /// The forward-invariant interval `[min(0, A_min), max(0, A_max)]`.
    pub fn invariant_interval(&self) -> (f64, f64) {
        let eq = self.per_connection_equilibria();
        let lo = eq.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = eq.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        (lo.min(0.0), hi.max(0.0))
    }

    fn derivative(&self, a: f64) -> f64 {
        -self.effective_rate() * a + self.effective_drive()
    }

    /// Closed-form solution at time t under frozen coefficients.
    pub fn closed_form(&self, t: f64) -> f64 {
        let a_star = self.equilibrium();
        a_star + (self.a0 - a_star) * (-self.effective_rate() * t).exp()
    }
}

/// Classical fixed-step RK4 over `[0, horizon]`; returns `steps + 1`
/// `(t, a)` samples including both endpoints. Reference use only.
pub fn integrate_rk4(ode: &ScalarOde, steps: usize) -> Result<Vec<(f64, f64)>> {
    ode.validate()?;
    if steps < 16 {
        return Err(Error::arg(format!("rk4 oracle needs >= 16 steps, got {steps}")));
    }
    let h = ode.horizon / steps as f64;
    let mut a = ode.a0;
    let mut out = Vec::with_capacity(steps + 1);
    out.push((0.0, a));
    for n in 0..steps {
        let k1 = ode.derivative(a);
        let k2 = ode.derivative(a + 0.5 * h * k1);
        let k3 = ode.derivative(a + 0.5 * h * k2);
        let k4 = ode.derivative(a + h * k3);
        a += h * (k1 + 2.0 * k2 + 2.0 * k3 + k4) / 6.0;
        out.push(((n + 1) as f64 * h, a));
    }
    Ok(out)
}

/// One stability-property trial outcome. Passing means the violation
/// magnitude is within [`VIOLATION_SLACK`].
#[derive(Debug, Clone)]
pub struct TrialRecord {
    pub interval: (f64, f64),
    pub traj_min: f64,
    pub traj_max: f64,
    /// How far the trajectory escaped the interval; <= 0 when inside.
    pub violation: f64,
}

impl TrialRecord {
    pub fn pass(&self) -> bool {
        self.violation <= VIOLATION_SLACK
    }
}

/// Check the forward-invariant interval on a sampled trajectory. Trials
/// whose initial condition lies outside the interval are vacuous and
/// rejected.
pub fn check_state_bounds(ode: &ScalarOde, trajectory: &[(f64, f64)]) -> Result<TrialRecord> {
    ode.validate()?;
    let (lo, hi) = ode.invariant_interval();
    if ode.a0 < lo - VIOLATION_SLACK || ode.a0 > hi + VIOLATION_SLACK {
        return Err(Error::arg(format!(
            "a0 = {} outside invariant interval [{lo}, {hi}]; trial is vacuous",
            ode.a0
        )));
    }
    let mut traj_min = f64::INFINITY;
    let mut traj_max = f64::NEG_INFINITY;
    for &(_, a) in trajectory {
        traj_min = traj_min.min(a);
        traj_max = traj_max.max(a);
    }
    let violation = (lo - traj_min).max(traj_max - hi);
    Ok(TrialRecord { interval: (lo, hi), traj_min, traj_max, violation })
}

/// Exponential decay bound `|a_t - a*| <= |a0 - a*| e^{-w t}` at every
/// sample. Returns (pass, worst margin), margin <= 0 meaning the bound held
/// with room.
pub fn check_decay_bound(ode: &ScalarOde, trajectory: &[(f64, f64)]) -> (bool, f64) {
    let a_star = ode.equilibrium();
    let rate = ode.effective_rate();
    let offset = (ode.a0 - a_star).abs();
    let mut worst = f64::NEG_INFINITY;
    for &(t, a) in trajectory {
        let bound = offset * (-rate * t).exp();
        worst = worst.max((a - a_star).abs() - bound);
    }
    (worst <= VIOLATION_SLACK, worst)
}

/// Minimum time until `|a_t - a*| <= delta`, floored at zero.
pub fn time_to_tolerance(a0: f64, a_star: f64, rate: f64, delta: f64) -> Result<f64> {
    if !(delta > 0.0) {
        return Err(Error::arg("delta must be > 0"));
    }
    if !(rate > 0.0) {
        return Err(Error::arg("rate must be > 0"));
    }
    let offset = (a0 - a_star).abs();
    if delta >= offset {
        return Ok(0.0);
    }
    Ok((offset / delta).ln() / rate)
}

/// Closed-form trajectory sensitivity to the drive:
/// `d a_t / d phi = (1 - e^{-w t}) / w`.
pub fn sensitivity_phi(rate: f64, t: f64) -> f64 {
    (1.0 - (-rate * t).exp()) / rate
}

/// Closed-form trajectory sensitivity to the rate:
/// `d a_t / d w = -(phi / w^2)(1 - e^{-w t}) - (a0 - a*) t e^{-w t}`.
pub fn sensitivity_omega(phi: f64, rate: f64, a0: f64, t: f64) -> f64 {
    let a_star = phi / rate;
    -(phi / (rate * rate)) * (1.0 - (-rate * t).exp()) - (a0 - a_star) * t * (-rate * t).exp()
}

/// Magnitude scale of the rate sensitivity: the sum of the absolute values
/// of its two terms. The terms can cancel near zero, so finite-difference
/// comparisons measure error against this scale rather than the (possibly
/// vanishing) derivative itself.
pub fn sensitivity_omega_scale(phi: f64, rate: f64, a0: f64, t: f64) -> f64 {
    let a_star = phi / rate;
    (phi / (rate * rate)) * (1.0 - (-rate * t).exp()).abs()
        + ((a0 - a_star) * t * (-rate * t).exp()).abs()
}

// ── Randomized campaigns ─────────────────────────────────────────────

/// SplitMix64: cheap, well-mixed per-trial seed derivation.
pub fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E3779B97F4A7C15);
    let mut z = x;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58476D1CE4E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D049BB133111EB);
    z ^ (z >> 31)
}

/// Seed for trial `i` of a campaign with base seed `base`. Replaying a
/// single trial means running a 1-trial campaign with `base + i` as seed.
pub fn trial_seed(base: u64, i: u64) -> u64 {
    splitmix64(base.wrapping_add(i))
}

pub fn log_uniform(rng: &mut impl Rng, lo: f64, hi: f64) -> f64 {
    (rng.gen_range(lo.ln()..hi.ln())).exp()
}

/// Aggregated result of a randomized property campaign.
#[derive(Debug, Clone)]
pub struct CampaignResult {
    pub property: String,
    pub trials: u64,
    pub violations: u64,
    /// Most positive margin seen (<= slack means every trial passed).
    pub worst_margin: f64,
    pub seed: u64,
    /// Trial index of the worst margin, for replay.
    pub worst_trial: u64,
    /// Human-readable parameters of the worst trial.
    pub worst_params: String,
}

impl CampaignResult {
    pub fn pass(&self) -> bool {
        self.violations == 0
    }

    /// Command line that replays the worst trial on its own.
    pub fn replay_command(&self, suite: &str) -> String {
        format!(
            "nac verify --suite {suite} --trials 1 --seed {}",
            self.seed.wrapping_add(self.worst_trial)
        )
    }
}

fn run_campaign(
    property: &str,
    trials: u64,
    seed: u64,
    mut trial: impl FnMut(&mut ChaCha8Rng) -> (f64, String),
) -> CampaignResult {
    let mut worst_margin = f64::NEG_INFINITY;
    let mut worst_trial = 0;
    let mut worst_params = String::new();
    let mut violations = 0;
    for i in 0..trials {
        let mut rng = ChaCha8Rng::seed_from_u64(trial_seed(seed, i));
        let (margin, params) = trial(&mut rng);
        if margin > VIOLATION_SLACK {
            violations += 1;
        }
        if margin > worst_margin {
            worst_margin = margin;
            worst_trial = i;
            worst_params = params;
        }
    }
    CampaignResult {
        property: property.to_string(),
        trials,
        violations,
        worst_margin,
        seed,
        worst_trial,
        worst_params,
    }
}

/// Draw a single-connection trial per the stability theorem's precondition:
/// log-uniform rate in [1e-2, 10], drive in (0, 1), a0 inside the interval.
fn draw_single(rng: &mut ChaCha8Rng) -> ScalarOde {
    let rate = log_uniform(rng, 1e-2, 10.0);
    let drive = rng.gen_range(f64::MIN_POSITIVE..1.0);
    let a_star = drive / rate;
    let (lo, hi) = (0.0f64.min(a_star), 0.0f64.max(a_star));
    let a0 = rng.gen_range(lo..=hi);
    let horizon = rng.gen_range(0.5..2.0);
    ScalarOde::single(rate, drive, a0, horizon)
}

/// State-bound campaign, single-connection case.
pub fn bounds_single_campaign(trials: u64, seed: u64, steps: usize) -> CampaignResult {
    run_campaign("state-bounds-single", trials, seed, |rng| {
        let ode = draw_single(rng);
        let traj = integrate_rk4(&ode, steps).expect("valid draw");
        let rec = check_state_bounds(&ode, &traj).expect("a0 drawn inside interval");
        (rec.violation, format!("{ode:?}"))
    })
}

/// State-bound campaign, multi-connection case with 2..=8 connections.
pub fn bounds_multi_campaign(trials: u64, seed: u64, steps: usize) -> CampaignResult {
    run_campaign("state-bounds-multi", trials, seed, |rng| {
        let m = rng.gen_range(2..=8);
        let rates: Vec<f64> = (0..m).map(|_| log_uniform(rng, 1e-2, 10.0)).collect();
        let drives: Vec<f64> = (0..m).map(|_| rng.gen_range(f64::MIN_POSITIVE..1.0)).collect();
        let mut ode = ScalarOde { rates, drives, a0: 0.0, horizon: rng.gen_range(0.5..2.0) };
        let (lo, hi) = ode.invariant_interval();
        ode.a0 = rng.gen_range(lo..=hi);
        let traj = integrate_rk4(&ode, steps).expect("valid draw");
        let rec = check_state_bounds(&ode, &traj).expect("a0 drawn inside interval");
        (rec.violation, format!("{ode:?}"))
    })
}

/// Decay-bound campaign; also checks the uniform-bound form over the batch
/// via the worst initial offset.
pub fn decay_campaign(trials: u64, seed: u64, steps: usize) -> CampaignResult {
    // uniform bound constant over the batch: max |a0 - a*|
    let mut uniform_m = 0.0f64;
    for i in 0..trials {
        let mut rng = ChaCha8Rng::seed_from_u64(trial_seed(seed, i));
        let ode = draw_single(&mut rng);
        uniform_m = uniform_m.max((ode.a0 - ode.equilibrium()).abs());
    }
    run_campaign("decay-bound", trials, seed, |rng| {
        let ode = draw_single(rng);
        let traj = integrate_rk4(&ode, steps).expect("valid draw");
        let (_, margin) = check_decay_bound(&ode, &traj);
        // uniform form: |a_t - a*| <= M e^{-wt} with the batch-wide M
        let a_star = ode.equilibrium();
        let rate = ode.effective_rate();
        let uniform_margin = traj
            .iter()
            .map(|&(t, a)| (a - a_star).abs() - uniform_m * (-rate * t).exp())
            .fold(f64::NEG_INFINITY, f64::max);
        (margin.max(uniform_margin), format!("{ode:?}"))
    })
}

/// Exact error-law equality: the closed form satisfies
/// `|a_t - a*| = |a0 - a*| e^{-w t}` to 1e-12 of the trajectory's value
/// scale (the equilibrium can reach 1/rate = 100, where an absolute 1e-12
/// would be a handful of ulps).
pub fn exact_law_campaign(trials: u64, seed: u64) -> CampaignResult {
    run_campaign("exact-error-law", trials, seed, |rng| {
        let ode = draw_single(rng);
        let a_star = ode.equilibrium();
        let rate = ode.effective_rate();
        let scale = (a_star.abs() + (ode.a0 - a_star).abs()).max(1.0);
        let mut worst = f64::NEG_INFINITY;
        for k in 0..=32 {
            let t = ode.horizon * k as f64 / 32.0;
            let lhs = (ode.closed_form(t) - a_star).abs();
            let rhs = (ode.a0 - a_star).abs() * (-rate * t).exp();
            worst = worst.max((lhs - rhs).abs() / scale - 1e-12 + VIOLATION_SLACK);
        }
        (worst, format!("{ode:?}"))
    })
}

/// Accuracy-threshold campaign: integrating to `t_min` lands within delta.
///
/// The threshold is an equality point of the exact law, so the check grants
/// the RK4 trajectory its own integration-error allowance
/// (1e-8 x the initial offset scale); step count is floored at 1024, which
/// keeps the fourth-order bias around 1e-9 of that scale for these draws.
pub fn tolerance_campaign(trials: u64, seed: u64, steps: usize) -> CampaignResult {
    let steps = steps.max(1024);
    run_campaign("delta-accuracy-threshold", trials, seed, |rng| {
        let mut ode = draw_single(rng);
        let a_star = ode.equilibrium();
        let offset = (ode.a0 - a_star).abs();
        let delta = rng.gen_range(1e-4..1.0) * offset.max(1e-6);
        let rate = ode.effective_rate();
        let t_min = time_to_tolerance(ode.a0, a_star, rate, delta).expect("valid draw");
        if t_min == 0.0 {
            return (f64::NEG_INFINITY, format!("{ode:?} delta={delta} (already within)"));
        }
        ode.horizon = t_min;
        let traj = integrate_rk4(&ode, steps).expect("valid draw");
        let (_, a_end) = *traj.last().unwrap();
        let allowance = 1e-8 * offset.max(1.0);
        ((a_end - a_star).abs() - delta - allowance, format!("{ode:?} delta={delta}"))
    })
}

/// Oracle-vs-closed-form agreement: max |RK4 - closed form| < tol over the
/// whole trajectory.
pub fn agreement_campaign(trials: u64, seed: u64, steps: usize, tol: f64) -> CampaignResult {
    run_campaign("rk4-closed-form-agreement", trials, seed, |rng| {
        let rate = log_uniform(rng, 1e-2, 10.0);
        let drive = rng.gen_range(f64::MIN_POSITIVE..1.0);
        let t = rng.gen_range(0.0..1.0f64).max(1e-6);
        let ode = ScalarOde::single(rate, drive, 0.0, t);
        let traj = integrate_rk4(&ode, steps).expect("valid draw");
        let worst = traj
            .iter()
            .map(|&(ti, a)| (a - ode.closed_form(ti)).abs())
            .fold(f64::NEG_INFINITY, f64::max);
        (worst - tol + VIOLATION_SLACK, format!("{ode:?}"))
    })
}
