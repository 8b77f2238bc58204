//! Randomized property campaigns behind the `verify` command.
//!
//! Each suite turns a set of analytical guarantees into seeded trial
//! campaigns and reports one row per property:
//! `property,trials,violations,worst_margin,seed`. A campaign passes when
//! every margin stays within the violation slack; any failure carries a
//! replay command that reruns the worst trial alone.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::attention::{logits_exact, nac_forward, Mode, NacConfig, NacParams};
use crate::error::{Error, Result};
use crate::oracle::{
    self, bounds_multi_campaign, bounds_single_campaign, decay_campaign, exact_law_campaign,
    tolerance_campaign, CampaignResult, VIOLATION_SLACK,
};
use crate::tape::Tape;
use crate::tensor::{self, Tensor};

/// One report row of a `verify` run.
#[derive(Debug, Clone)]
pub struct PropertyRow {
    pub property: String,
    pub trials: u64,
    pub violations: u64,
    pub worst_margin: f64,
    pub seed: u64,
    /// Replay hint printed when the property failed.
    pub replay: Option<String>,
}

pub const CSV_HEADER: &str = "property,trials,violations,worst_margin,seed";

impl PropertyRow {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{:.3e},{}",
            self.property, self.trials, self.violations, self.worst_margin, self.seed
        )
    }

    pub fn pass(&self) -> bool {
        self.violations == 0
    }

    fn from_campaign(c: CampaignResult, suite: &str) -> Self {
        let replay = if c.pass() {
            None
        } else {
            Some(format!("{} | replay: {}", c.worst_params, c.replay_command(suite)))
        };
        PropertyRow {
            property: c.property,
            trials: c.trials,
            violations: c.violations,
            worst_margin: c.worst_margin,
            seed: c.seed,
            replay,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Suite {
    Bounds,
    Decay,
    Agreement,
    Gradcheck,
    Layer,
    All,
}

pub const SUITE_NAMES: [&str; 6] = ["bounds", "decay", "agreement", "gradcheck", "layer", "all"];

impl std::str::FromStr for Suite {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "bounds" => Ok(Suite::Bounds),
            "decay" => Ok(Suite::Decay),
            "agreement" => Ok(Suite::Agreement),
            "gradcheck" => Ok(Suite::Gradcheck),
            "layer" => Ok(Suite::Layer),
            "all" => Ok(Suite::All),
            other => Err(Error::arg(format!(
                "unknown suite {other:?}; valid suites: {}",
                SUITE_NAMES.join(", ")
            ))),
        }
    }
}

/// Run a suite at the given trial count and base seed.
pub fn run_suite(suite: Suite, trials: u64, seed: u64) -> Result<Vec<PropertyRow>> {
    if trials < 100 {
        return Err(Error::arg(format!("verify needs >= 100 trials, got {trials}")));
    }
    let mut rows = Vec::new();
    match suite {
        Suite::Bounds => {
            rows.push(PropertyRow::from_campaign(
                bounds_single_campaign(trials, seed, 1024),
                "bounds",
            ));
            rows.push(PropertyRow::from_campaign(
                bounds_multi_campaign(trials, seed.wrapping_add(1), 1024),
                "bounds",
            ));
        }
        Suite::Decay => {
            rows.push(PropertyRow::from_campaign(decay_campaign(trials, seed, 1024), "decay"));
            rows.push(PropertyRow::from_campaign(
                exact_law_campaign(trials, seed.wrapping_add(1)),
                "decay",
            ));
            rows.push(PropertyRow::from_campaign(
                tolerance_campaign(trials, seed.wrapping_add(2), 1024),
                "decay",
            ));
        }
        Suite::Agreement => {
            rows.push(PropertyRow::from_campaign(
                oracle::agreement_campaign(trials, seed, 1024, 1e-8),
                "agreement",
            ));
        }
        Suite::Gradcheck => {
            rows.push(sensitivity_gradcheck(trials, seed));
            rows.push(autodiff_sensitivity_check(trials, seed.wrapping_add(1)));
            rows.push(layer_gradcheck_row(seed.wrapping_add(2))?);
        }
        Suite::Layer => {
            rows.push(softmax_sum_property(trials, seed)?);
            rows.push(topk_sort_property(trials, seed.wrapping_add(1))?);
            rows.push(curation_equivalence_property(100.min(trials), seed.wrapping_add(2))?);
            rows.push(permutation_equivariance_property(
                100.min(trials),
                seed.wrapping_add(3),
            )?);
        }
        Suite::All => {
            for s in [Suite::Bounds, Suite::Decay, Suite::Agreement, Suite::Gradcheck, Suite::Layer]
            {
                rows.extend(run_suite(s, trials, seed)?);
            }
        }
    }
    Ok(rows)
}

// ── Gradient checks ──────────────────────────────────────────────────

/// Closed-form sensitivities against central finite differences of the
/// layer's exact-mode logit op, batched over all draws.
fn sensitivity_gradcheck(trials: u64, seed: u64) -> PropertyRow {
    let n = trials as usize;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let phi: Vec<f64> = (0..n).map(|_| rng.gen_range(0.01..1.0)).collect();
    let omega: Vec<f64> = (0..n).map(|_| oracle::log_uniform(&mut rng, 1e-2, 10.0)).collect();
    let t: Vec<f64> = (0..n).map(|_| rng.gen_range(0.01..1.0)).collect();
    let h = 1e-5;

    let eval = |phi_v: &[f64], omega_v: &[f64]| -> Vec<f64> {
        let mut tape = Tape::inference();
        let p = tape.leaf(Tensor::from_vec(vec![n], phi_v.to_vec()).unwrap());
        let w = tape.leaf(Tensor::from_vec(vec![n], omega_v.to_vec()).unwrap());
        let tt = tape.leaf(Tensor::from_vec(vec![n], t.clone()).unwrap());
        logits_exact(&mut tape, &p, &w, &tt).unwrap().tensor().data().to_vec()
    };
    let shift = |v: &[f64], d: f64| -> Vec<f64> { v.iter().map(|x| x + d).collect() };

    let phi_hi = eval(&shift(&phi, h), &omega);
    let phi_lo = eval(&shift(&phi, -h), &omega);
    let om_hi = eval(&phi, &shift(&omega, h));
    let om_lo = eval(&phi, &shift(&omega, -h));

    let mut worst = f64::NEG_INFINITY;
    let mut violations = 0;
    for i in 0..n {
        let fd_phi = (phi_hi[i] - phi_lo[i]) / (2.0 * h);
        let fd_om = (om_hi[i] - om_lo[i]) / (2.0 * h);
        let an_phi = oracle::sensitivity_phi(omega[i], t[i]);
        let an_om = oracle::sensitivity_omega(phi[i], omega[i], 0.0, t[i]);
        let rel_phi = (an_phi - fd_phi).abs() / (fd_phi.abs() + 1e-8);
        let scale = oracle::sensitivity_omega_scale(phi[i], omega[i], 0.0, t[i]);
        let rel_om = (an_om - fd_om).abs() / (scale + 1e-8);
        let margin = rel_phi.max(rel_om) - 1e-6;
        if margin > 0.0 {
            violations += 1;
        }
        worst = worst.max(margin);
    }
    PropertyRow {
        property: "sensitivities-vs-finite-differences".to_string(),
        trials,
        violations,
        worst_margin: worst,
        seed,
        replay: None,
    }
}

/// Autodiff gradients of the exact-mode logit op against the closed-form
/// sensitivities.
fn autodiff_sensitivity_check(trials: u64, seed: u64) -> PropertyRow {
    let n = trials as usize;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let phi: Vec<f64> = (0..n).map(|_| rng.gen_range(0.01..1.0)).collect();
    let omega: Vec<f64> = (0..n).map(|_| oracle::log_uniform(&mut rng, 1e-2, 10.0)).collect();
    let t: Vec<f64> = (0..n).map(|_| rng.gen_range(0.01..1.0)).collect();

    let mut tape = Tape::new();
    let p = tape.leaf(Tensor::from_vec(vec![n], phi.clone()).unwrap());
    let w = tape.leaf(Tensor::from_vec(vec![n], omega.clone()).unwrap());
    let tt = tape.leaf(Tensor::from_vec(vec![n], t.clone()).unwrap());
    let a = logits_exact(&mut tape, &p, &w, &tt).unwrap();
    let loss = tape.sum_all(&a);
    let grads = tape.backward(&loss).unwrap();
    let g_phi = grads.get(&p).unwrap();
    let g_om = grads.get(&w).unwrap();

    let mut worst = f64::NEG_INFINITY;
    let mut violations = 0;
    for i in 0..n {
        let an_phi = oracle::sensitivity_phi(omega[i], t[i]);
        let an_om = oracle::sensitivity_omega(phi[i], omega[i], 0.0, t[i]);
        let rel_phi = (g_phi.data()[i] - an_phi).abs() / (an_phi.abs() + 1e-8);
        let scale = oracle::sensitivity_omega_scale(phi[i], omega[i], 0.0, t[i]);
        let rel_om = (g_om.data()[i] - an_om).abs() / (scale + 1e-8);
        let margin = rel_phi.max(rel_om) - 1e-6;
        if margin > 0.0 {
            violations += 1;
        }
        worst = worst.max(margin);
    }
    PropertyRow {
        property: "autodiff-vs-closed-form-sensitivities".to_string(),
        trials,
        violations,
        worst_margin: worst,
        seed,
        replay: None,
    }
}

/// The standard gradcheck configuration: small enough that perturbing every
/// single parameter stays cheap.
pub fn gradcheck_config(seed: u64) -> NacConfig {
    NacConfig {
        d_model: 8,
        heads: 2,
        top_k: 3,
        backbone_units: Some(10),
        sparsity: 0.5,
        seed,
        ..NacConfig::default()
    }
}

/// Absolute resolution of a central difference at h = 1e-5 on this loss:
/// rounding of the O(1)-per-output loss evaluation, divided by 2h, lands
/// near 1e-8; the floor sits two decades above it. Components whose true
/// gradient is below this floor are checked absolutely (a real backward bug
/// shows up as an error at the gradient's own scale, far above the floor).
pub const GRADCHECK_ATOL: f64 = 2e-7;

/// Full-layer autodiff vs central finite differences (h = 1e-5), every
/// parameter: pass means `|analytic - fd| <= 1e-5 (|fd| + 1e-8) + atol`.
/// Returns (worst effective relative error, parameter count, violations).
pub fn layer_gradcheck(config: &NacConfig, seed: u64) -> Result<(f64, usize, u64)> {
    let params = NacParams::init(config)?;
    let (b, t) = (2usize, 5usize);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = Tensor::from_vec(
        vec![b, t, config.d_model],
        (0..b * t * config.d_model).map(|_| rng.gen_range(-1.0..1.0)).collect(),
    )?;
    let ts = Tensor::from_vec(vec![b, t], (0..b * t).map(|_| rng.gen_range(0.05..1.0)).collect())?;

    let loss_of = |p: &NacParams| -> Result<f64> {
        let mut tape = Tape::inference();
        let bound = p.bind(&mut tape);
        let xv = tape.constant(x.clone());
        let tv = tape.constant(ts.clone());
        let y = nac_forward(&mut tape, config, &bound, &xv, Some(&tv))?;
        Ok(y.tensor().sum())
    };

    // analytic gradients
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape);
    let xv = tape.constant(x.clone());
    let tv = tape.constant(ts.clone());
    let y = nac_forward(&mut tape, config, &bound, &xv, Some(&tv))?;
    let loss = tape.sum_all(&y);
    let grads = tape.backward(&loss)?;
    let by_name: std::collections::BTreeMap<String, Tensor> = bound
        .collect_leaves()
        .iter()
        .map(|(n, v)| (n.clone(), grads.get_or_zeros(v)))
        .collect();

    let h = 1e-5;
    let mut worst = f64::NEG_INFINITY;
    let mut count = 0usize;
    let mut violations = 0u64;
    let names: Vec<String> = by_name.keys().cloned().collect();
    for name in names {
        let numel = by_name[&name].numel();
        for i in 0..numel {
            let mut plus = params.clone();
            perturb(&mut plus, &name, i, h);
            let up = loss_of(&plus)?;
            let mut minus = params.clone();
            perturb(&mut minus, &name, i, -h);
            let down = loss_of(&minus)?;
            let fd = (up - down) / (2.0 * h);
            let an = by_name[&name].data()[i];
            let rel = ((an - fd).abs() - GRADCHECK_ATOL).max(0.0) / (fd.abs() + 1e-8);
            if rel >= 1e-5 {
                violations += 1;
            }
            worst = worst.max(rel);
            count += 1;
        }
    }
    Ok((worst, count, violations))
}

fn perturb(params: &mut NacParams, name: &str, index: usize, delta: f64) {
    let mut found = false;
    params.visit_mut(&mut |n, t| {
        if n == name {
            t.data_mut()[index] += delta;
            found = true;
        }
    });
    assert!(found, "no parameter named {name}");
}

fn layer_gradcheck_row(seed: u64) -> Result<PropertyRow> {
    let config = gradcheck_config(seed);
    let (worst, count, violations) = layer_gradcheck(&config, seed)?;
    Ok(PropertyRow {
        property: "layer-autodiff-vs-finite-differences".to_string(),
        trials: count as u64,
        violations,
        worst_margin: worst - 1e-5,
        seed,
        replay: None,
    })
}

// ── Layer-level properties ───────────────────────────────────────────

fn softmax_sum_property(trials: u64, seed: u64) -> Result<PropertyRow> {
    let mut worst = f64::NEG_INFINITY;
    let mut violations = 0;
    for i in 0..trials {
        let mut rng = ChaCha8Rng::seed_from_u64(oracle::trial_seed(seed, i));
        let rows = rng.gen_range(1..6);
        let k = rng.gen_range(1..9);
        let data: Vec<f64> = (0..rows * k).map(|_| rng.gen_range(-30.0..30.0)).collect();
        let logits = Tensor::from_vec(vec![rows, k], data)?;
        let alpha = tensor::softmax_lastdim(&logits)?;
        for row in alpha.data().chunks(k) {
            let margin = (row.iter().sum::<f64>() - 1.0).abs() - 1e-9;
            if margin > 0.0 {
                violations += 1;
            }
            worst = worst.max(margin);
        }
    }
    Ok(PropertyRow {
        property: "attention-weights-sum-to-one".to_string(),
        trials,
        violations,
        worst_margin: worst,
        seed,
        replay: None,
    })
}

fn topk_sort_property(trials: u64, seed: u64) -> Result<PropertyRow> {
    let mut violations = 0;
    for i in 0..trials {
        let mut rng = ChaCha8Rng::seed_from_u64(oracle::trial_seed(seed, i));
        let n = rng.gen_range(1..24);
        let k = rng.gen_range(1..=n);
        let data: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let x = Tensor::from_vec(vec![n], data.clone())?;
        let (vals, idx) = tensor::topk_lastdim(&x, k)?;
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&a, &b| data[b].total_cmp(&data[a]).then(a.cmp(&b)));
        let ok = (0..k).all(|j| idx.data[j] == order[j] && vals.data()[j] == data[order[j]]);
        if !ok {
            violations += 1;
        }
    }
    Ok(PropertyRow {
        property: "topk-matches-sort-oracle".to_string(),
        trials,
        violations,
        worst_margin: if violations == 0 { -1.0 } else { 1.0 },
        seed,
        replay: None,
    })
}

/// Budget >= Tk and the pairwise-full flag must produce bit-identical layer
/// outputs over random configurations.
fn curation_equivalence_property(trials: u64, seed: u64) -> Result<PropertyRow> {
    let mut violations = 0;
    for i in 0..trials {
        let mut rng = ChaCha8Rng::seed_from_u64(oracle::trial_seed(seed, i));
        let heads = [1usize, 2][rng.gen_range(0..2)];
        let d_model = heads * [2usize, 3, 4][rng.gen_range(0..3)];
        let t = rng.gen_range(2..7);
        let mode = [Mode::Exact, Mode::Euler, Mode::Steady][rng.gen_range(0..3)];
        let base = NacConfig {
            d_model,
            heads,
            mode,
            top_k: t + rng.gen_range(0..3),
            backbone_units: Some(8),
            sparsity: 0.3,
            seed: oracle::trial_seed(seed, i ^ 0xff),
            ..NacConfig::default()
        };
        let params = NacParams::init(&base)?;
        let x = Tensor::from_vec(
            vec![1, t, d_model],
            (0..t * d_model).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        )?;
        let run = |pairwise: bool| -> Result<Vec<u64>> {
            let config = NacConfig { pairwise_full: pairwise, ..base.clone() };
            let mut tape = Tape::inference();
            let bound = params.bind(&mut tape);
            let xv = tape.leaf(x.clone());
            let y = nac_forward(&mut tape, &config, &bound, &xv, None)?;
            Ok(y.tensor().data().iter().map(|v| v.to_bits()).collect())
        };
        if run(false)? != run(true)? {
            violations += 1;
        }
    }
    Ok(PropertyRow {
        property: "topk-budget-equals-pairwise-full".to_string(),
        trials,
        violations,
        worst_margin: if violations == 0 { -1.0 } else { 1.0 },
        seed,
        replay: None,
    })
}

/// Permuting key/value positions permutes outputs identically: each query
/// token keeps its output bit-for-bit on tie-free random inputs.
fn permutation_equivariance_property(trials: u64, seed: u64) -> Result<PropertyRow> {
    let mut violations = 0;
    for i in 0..trials {
        let mut rng = ChaCha8Rng::seed_from_u64(oracle::trial_seed(seed, i));
        let heads = [1usize, 2][rng.gen_range(0..2)];
        let d_model = heads * [2usize, 4][rng.gen_range(0..2)];
        let t = rng.gen_range(3..8);
        let config = NacConfig {
            d_model,
            heads,
            top_k: rng.gen_range(1..t.min(4)),
            backbone_units: Some(8),
            sparsity: 0.3,
            seed: oracle::trial_seed(seed, i ^ 0xaa),
            mode: [Mode::Exact, Mode::Euler, Mode::Steady][rng.gen_range(0..3)],
            ..NacConfig::default()
        };
        let params = NacParams::init(&config)?;
        let x: Vec<f64> = (0..t * d_model).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let ts: Vec<f64> = (0..t).map(|_| rng.gen_range(0.05..1.0)).collect();

        // random permutation of positions
        let mut perm: Vec<usize> = (0..t).collect();
        for j in (1..t).rev() {
            perm.swap(j, rng.gen_range(0..=j));
        }
        let mut xp = vec![0.0; x.len()];
        let mut tsp = vec![0.0; t];
        for (dst, &src) in perm.iter().enumerate() {
            xp[dst * d_model..(dst + 1) * d_model]
                .copy_from_slice(&x[src * d_model..(src + 1) * d_model]);
            tsp[dst] = ts[src];
        }

        let run = |xd: Vec<f64>, td: Vec<f64>| -> Result<Vec<u64>> {
            let mut tape = Tape::inference();
            let bound = params.bind(&mut tape);
            let xv = tape.leaf(Tensor::from_vec(vec![1, t, d_model], xd)?);
            let tv = tape.leaf(Tensor::from_vec(vec![1, t], td)?);
            let y = nac_forward(&mut tape, &config, &bound, &xv, Some(&tv))?;
            Ok(y.tensor().data().iter().map(|v| v.to_bits()).collect())
        };
        let base = run(x.clone(), ts.clone())?;
        let permuted = run(xp, tsp)?;
        let ok = perm.iter().enumerate().all(|(dst, &src)| {
            permuted[dst * d_model..(dst + 1) * d_model]
                == base[src * d_model..(src + 1) * d_model]
        });
        if !ok {
            violations += 1;
        }
    }
    Ok(PropertyRow {
        property: "key-permutation-equivariance".to_string(),
        trials,
        violations,
        worst_margin: if violations == 0 { -1.0 } else { 1.0 },
        seed,
        replay: None,
    })
}

/// Convenience: do all rows pass?
pub fn all_pass(rows: &[PropertyRow]) -> bool {
    rows.iter().all(|r| r.pass())
}

/// Margin slack shared with the oracle campaigns.
pub fn slack() -> f64 {
    VIOLATION_SLACK
}
