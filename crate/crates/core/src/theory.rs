//! Numerical checks of the convergence and incentive properties of the
//! mode-gated reward, run on synthetic universes with exact gradients.

use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::env::{
    clean_group_prob, dot, exact_policy_gradient, exact_value, generate_env, norm, vc_hessian_norm, EnvSpec,
    SyntheticUniverse, ValueKind, ValueTables,
};
use crate::error::Result;
use crate::grpo::{substream, GradientSource, Optimizer, OptimizerKind, TrainerConfig};
use crate::policy::SoftmaxPolicy;
use crate::reward::RewardConfig;
use crate::trace::TraceRow;
use crate::train::Trainer;
use crate::verifier::DateVerifier;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CheckStatus {
    Pass,
    Fail,
    Skipped,
    /// Measured and reported but outside the regime where it is asserted.
    Reported,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CheckEntry {
    pub name: String,
    pub status: CheckStatus,
    pub tolerance: f64,
    pub measured: BTreeMap<String, f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub env_seed: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub policy_hash: Option<String>,
    #[serde(skip_serializing_if = "String::is_empty")]
    pub detail: String,
    /// Seeds whose trial failed, kept for regression.
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub failing_seeds: Vec<u64>,
    /// Per-step `V_c` for trajectory checks.
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub trajectory: Vec<f64>,
}

impl CheckEntry {
    fn new(name: &str, tolerance: f64) -> Self {
        CheckEntry {
            name: name.into(),
            status: CheckStatus::Pass,
            tolerance,
            measured: BTreeMap::new(),
            env_seed: None,
            policy_hash: None,
            detail: String::new(),
            failing_seeds: vec![],
            trajectory: vec![],
        }
    }

    fn set(&mut self, key: &str, v: f64) {
        self.measured.insert(key.into(), v);
    }

    fn skipped(mut self, why: &str) -> Self {
        self.status = CheckStatus::Skipped;
        self.detail = why.into();
        self
    }

    fn pass_if(mut self, ok: bool) -> Self {
        self.status = if ok { CheckStatus::Pass } else { CheckStatus::Fail };
        self
    }

    pub fn get(&self, key: &str) -> f64 {
        self.measured.get(key).copied().unwrap_or(f64::NAN)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct TheoryReport {
    pub checks: Vec<CheckEntry>,
}

impl TheoryReport {
    pub fn all_passed(&self) -> bool {
        self.checks.iter().all(|c| c.status != CheckStatus::Fail)
    }

    pub fn render(&self) -> String {
        let mut s = format!("{:<28} {:<9} {}\n", "check", "status", "detail");
        for c in &self.checks {
            let status = format!("{:?}", c.status).to_lowercase();
            s.push_str(&format!("{:<28} {:<9} {}\n", c.name, status, c.detail));
        }
        s
    }
}

/// Per-instance pieces of the alignment inner product: `Σ π² Δf Δc`, the
/// weight `Z = Σ π²`, and the `Q ∝ π²` moments.
struct AlignmentTerms {
    inner: f64,
    z: f64,
    cov_q: f64,
    mean_shift: f64,
}

fn alignment_terms(p: &[f64], c: &[f64], f: &[f64]) -> AlignmentTerms {
    let c_bar: f64 = p.iter().zip(c).map(|(a, b)| a * b).sum();
    let f_bar: f64 = p.iter().zip(f).map(|(a, b)| a * b).sum();
    let inner = p.iter().zip(c).zip(f).map(|((pk, ck), fk)| pk * pk * (fk - f_bar) * (ck - c_bar)).sum();
    let z: f64 = p.iter().map(|pk| pk * pk).sum();
    let q: Vec<f64> = p.iter().map(|pk| pk * pk / z).collect();
    let eq_c: f64 = q.iter().zip(c).map(|(a, b)| a * b).sum();
    let eq_f: f64 = q.iter().zip(f).map(|(a, b)| a * b).sum();
    let cov_q = q.iter().zip(c).zip(f).map(|((qk, ck), fk)| qk * (fk - eq_f) * (ck - eq_c)).sum();
    AlignmentTerms { inner, z, cov_q, mean_shift: (eq_f - f_bar) * (eq_c - c_bar) }
}

/// Sign of `⟨∇V_f, ∇V_c⟩` and its covariance decomposition under
/// `Q ∝ π²`: `Σ π² Δf Δc = Z [Cov_Q(f, c) + (E_Q f − f̄)(E_Q c − c̄)]`.
pub fn check_alignment(tables: &ValueTables, policy: &SoftmaxPolicy) -> CheckEntry {
    let mut e = CheckEntry::new("alignment", 1e-10);
    e.policy_hash = Some(policy.snapshot_hash());
    let probs = policy.all_probs();
    let var_c: Vec<f64> = (0..probs.len()).map(|i| tables.instance_std(ValueKind::Vc, i, &probs[i])).collect();
    if var_c.iter().all(|&s| s < 1e-12) {
        return e.skipped("Var(c) = 0 on every instance");
    }
    let n2 = (probs.len() * probs.len()) as f64;
    let gf = exact_policy_gradient(ValueKind::Vf, policy, tables);
    let gc = exact_policy_gradient(ValueKind::Vc, policy, tables);
    let inner = dot(&gf, &gc);

    let (mut decomposed, mut cov_only, mut max_dev) = (0.0, 0.0, 0.0f64);
    for (i, p) in probs.iter().enumerate() {
        let t = alignment_terms(p, &tables.c[i], &tables.f[i]);
        let rhs = t.z * (t.cov_q + t.mean_shift);
        max_dev = max_dev.max((t.inner - rhs).abs());
        decomposed += rhs / n2;
        cov_only += t.z * t.cov_q / n2;
    }
    max_dev = max_dev.max((inner - decomposed).abs());

    let sigma_f =
        ((0..probs.len()).map(|i| tables.instance_std(ValueKind::Vf, i, &probs[i]).powi(2)).sum::<f64>() / probs.len() as f64)
            .sqrt();
    let gc_norm2 = dot(&gc, &gc);
    e.set("inner_product", inner);
    e.set("decomposition", decomposed);
    e.set("identity_deviation", max_dev);
    e.set("weighted_cov_q", cov_only);
    e.set("cov_q_only_deviation", (inner - cov_only).abs());
    e.set("sigma_f", sigma_f);
    e.set("gamma", inner.abs() / (sigma_f * gc_norm2));
    let ok = inner < 0.0 && max_dev <= e.tolerance;
    if !ok {
        e.detail = format!("inner {inner:.3e}, identity deviation {max_dev:.3e}");
    }
    e.pass_if(ok)
}

/// Randomized alignment suite over `(environment, policy)` seeds.
pub fn alignment_suite(base: &EnvSpec, reward_cfg: &RewardConfig, seeds: &[u64], logit_scale: f64) -> Result<CheckEntry> {
    let mut e = CheckEntry::new("alignment_suite", 1e-10);
    let (mut negative, mut ran, mut worst_dev) = (0usize, 0usize, 0.0f64);
    for &seed in seeds {
        let u = generate_env(&EnvSpec { seed, ..base.clone() })?;
        let t = ValueTables::new(&u, reward_cfg);
        let policy = u.random_policy(logit_scale, &mut substream(seed, 0xA11, 0));
        let c = check_alignment(&t, &policy);
        if c.status == CheckStatus::Skipped {
            continue;
        }
        ran += 1;
        worst_dev = worst_dev.max(c.get("identity_deviation"));
        if c.get("inner_product") < 0.0 {
            negative += 1;
        }
        if c.status == CheckStatus::Fail {
            e.failing_seeds.push(seed);
        }
    }
    e.set("trials", ran as f64);
    e.set("negative_inner_products", negative as f64);
    e.set("max_identity_deviation", worst_dev);
    if ran == 0 {
        return Ok(e.skipped("Var(c) = 0 for every seed"));
    }
    e.detail = format!("{negative}/{ran} negative, identity deviation ≤ {worst_dev:.1e}");
    let ok = e.failing_seeds.is_empty();
    Ok(e.pass_if(ok))
}

/// Exact gradients against central differences.
pub fn gradient_suite(base: &EnvSpec, reward_cfg: &RewardConfig, seeds: &[u64], h: f64) -> Result<CheckEntry> {
    let mut e = CheckEntry::new("gradient_fd", 1e-5);
    let mut worst = 0.0f64;
    for &seed in seeds {
        let u = generate_env(&EnvSpec { seed, ..base.clone() })?;
        let t = ValueTables::new(&u, reward_cfg);
        let policy = u.random_policy(1.0, &mut substream(seed, 0xFD, 0));
        let mut seed_worst = 0.0f64;
        for kind in [ValueKind::Vc, ValueKind::Vf, ValueKind::VrClean] {
            let exact = exact_policy_gradient(kind, &policy, &t);
            let fd = crate::env::finite_diff_gradient(|q| exact_value(kind, &q.all_probs(), &t).value, &policy, h);
            let diff: Vec<Vec<f64>> =
                exact.iter().zip(&fd).map(|(a, b)| a.iter().zip(b).map(|(x, y)| x - y).collect()).collect();
            let scale = norm(&exact);
            if scale > 1e-12 {
                seed_worst = seed_worst.max(norm(&diff) / scale);
            }
        }
        if seed_worst >= e.tolerance {
            e.failing_seeds.push(seed);
        }
        worst = worst.max(seed_worst);
    }
    e.set("policies", seeds.len() as f64);
    e.set("max_relative_error", worst);
    e.detail = format!("max relative error {worst:.2e}");
    let ok = e.failing_seeds.is_empty();
    Ok(e.pass_if(ok))
}

/// Step rule for exact-gradient trajectories.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ExactRun {
    pub optimizer: OptimizerKind,
    pub learning_rate: f64,
    pub max_steps: usize,
}

impl Default for ExactRun {
    fn default() -> Self {
        ExactRun { optimizer: OptimizerKind::Adam, learning_rate: 0.05, max_steps: 2000 }
    }
}

fn optimizer(run: &ExactRun, sizes: &[usize]) -> Optimizer {
    Optimizer::new(run.optimizer, run.learning_rate, 0.9, 0.95, 1e-8, sizes)
}

/// Mixed updates along `α ∇V_f + (1 − α) ∇V_r`. Records a violation when
/// the measured effective descent rate `α γ − (1 − α) ‖∇V_r‖ / ‖∇V_c‖` is
/// positive but `V_c` fails to drop. Runs stop once `V_c < stop_below`.
pub fn check_mixed_descent(
    tables: &ValueTables,
    policy: &SoftmaxPolicy,
    alpha: f64,
    run: &ExactRun,
    stop_below: f64,
) -> Result<CheckEntry> {
    let mut e = CheckEntry::new("mixed_descent", 0.0);
    e.policy_hash = Some(policy.snapshot_hash());
    e.set("alpha", alpha);
    e.set("learning_rate", run.learning_rate);
    let mut policy = policy.clone();
    let mut opt = optimizer(run, &policy.sizes());
    let (mut violations, mut positive_steps) = (0usize, 0usize);
    let (mut b_g, mut l_c, mut gamma0, mut min_rate) = (0.0f64, 0.0f64, f64::INFINITY, f64::INFINITY);
    let mut traj = vec![];

    for _ in 0..run.max_steps {
        let probs = policy.all_probs();
        let vc = exact_value(ValueKind::Vc, &probs, tables).value;
        traj.push(vc);
        if vc < stop_below {
            break;
        }
        let gc = exact_policy_gradient(ValueKind::Vc, &policy, tables);
        let gf = exact_policy_gradient(ValueKind::Vf, &policy, tables);
        let gr = exact_policy_gradient(ValueKind::VrClean, &policy, tables);
        let gc_norm = norm(&gc);
        let gamma = -dot(&gf, &gc) / (gc_norm * gc_norm);
        let rate = alpha * gamma - (1.0 - alpha) * norm(&gr) / gc_norm;
        b_g = b_g.max(norm(&gr));
        l_c = l_c.max(vc_hessian_norm(&probs, tables));
        gamma0 = gamma0.min(gamma);
        min_rate = min_rate.min(rate);

        let d: Vec<Vec<f64>> = gf
            .iter()
            .zip(&gr)
            .map(|(a, b)| a.iter().zip(b).map(|(x, y)| alpha * x + (1.0 - alpha) * y).collect())
            .collect();
        opt.step(&mut policy.logits, &d)?;
        let next = exact_value(ValueKind::Vc, &policy.all_probs(), tables).value;
        if rate > 0.0 {
            positive_steps += 1;
            if next >= vc {
                violations += 1;
            }
        }
    }
    let final_vc = *traj.last().unwrap_or(&0.0);
    let gate = if b_g > 0.0 { gamma0 / (l_c * b_g * b_g) } else { f64::INFINITY };
    e.set("steps", (traj.len() - 1) as f64);
    e.set("initial_v_c", traj[0]);
    e.set("final_v_c", final_vc);
    e.set("positive_rate_steps", positive_steps as f64);
    e.set("violations", violations as f64);
    e.set("min_rate", min_rate);
    e.set("gamma0", gamma0);
    e.set("b_g", b_g);
    e.set("l_c", l_c);
    e.set("step_size_gate", gate);
    e.trajectory = traj;
    e.detail = format!("{violations} violations over {positive_steps} positive-rate steps, final V_c {final_vc:.2e}");

    let asserted = alpha >= 1.0 || run.learning_rate <= gate;
    if !asserted {
        e.status = CheckStatus::Reported;
        e.detail = format!("not asserted: η {} exceeds gate {gate:.3e}; {}", run.learning_rate, e.detail);
        return Ok(e);
    }
    Ok(e.pass_if(violations == 0))
}

/// Pure-leakage (`α = 1`) descent on one random environment per seed:
/// `V_c` must fall on every step until it drops below `stop_below`.
pub fn descent_suite(
    base: &EnvSpec,
    reward_cfg: &RewardConfig,
    seeds: &[u64],
    run: &ExactRun,
    stop_below: f64,
) -> Result<CheckEntry> {
    let mut e = CheckEntry::new("monotone_descent", stop_below);
    let (mut worst_final, mut max_steps) = (0.0f64, 0.0f64);
    for &seed in seeds {
        let u = generate_env(&EnvSpec { seed, ..base.clone() })?;
        let t = ValueTables::new(&u, reward_cfg);
        let c = check_mixed_descent(&t, &SoftmaxPolicy::uniform(&u.sizes())?, 1.0, run, stop_below)?;
        let strictly = c.trajectory.windows(2).all(|w| w[1] < w[0]);
        let reached = c.get("final_v_c") < stop_below;
        if !(strictly && reached) {
            e.failing_seeds.push(seed);
        }
        worst_final = worst_final.max(c.get("final_v_c"));
        max_steps = max_steps.max(c.get("steps"));
    }
    e.set("environments", seeds.len() as f64);
    e.set("worst_final_v_c", worst_final);
    e.set("max_steps", max_steps);
    e.detail = format!(
        "{}/{} environments strictly decreasing to V_c < {stop_below:.0e}",
        seeds.len() - e.failing_seeds.len(),
        seeds.len()
    );
    let ok = e.failing_seeds.is_empty();
    Ok(e.pass_if(ok))
}

/// Least-squares slope of `ln y` against the index.
pub fn log_linear_slope(ys: &[f64]) -> Option<f64> {
    let pts: Vec<(f64, f64)> = ys.iter().enumerate().filter(|(_, &y)| y > 0.0).map(|(k, &y)| (k as f64, y.ln())).collect();
    if pts.len() < 2 {
        return None;
    }
    let n = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let sxy: f64 = pts.iter().map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = pts.iter().map(|(x, _)| (x - mx).powi(2)).sum();
    Some(sxy / sxx)
}

/// Pure-leakage exact run: `V_c(final) < target_ratio · V_c(0)` with a
/// negative fitted log-linear rate. Also measures the PL constant
/// `μ̂ = min ‖∇V_c‖² / (2 V_c)` along the trajectory.
pub fn check_linear_convergence(
    tables: &ValueTables,
    policy: &SoftmaxPolicy,
    run: &ExactRun,
    target_ratio: f64,
) -> Result<CheckEntry> {
    let mut e = CheckEntry::new("linear_convergence", target_ratio);
    e.policy_hash = Some(policy.snapshot_hash());
    let mut policy = policy.clone();
    let mut opt = optimizer(run, &policy.sizes());
    let v0 = exact_value(ValueKind::Vc, &policy.all_probs(), tables).value;
    if v0 == 0.0 {
        e.set("initial_v_c", 0.0);
        e.detail = "V_c(0) = 0".into();
        return Ok(e);
    }
    let mut traj = vec![v0];
    let mut mu_hat = f64::INFINITY;
    for _ in 0..run.max_steps {
        let vc = *traj.last().expect("non-empty");
        if vc < target_ratio * v0 {
            break;
        }
        let gc = exact_policy_gradient(ValueKind::Vc, &policy, tables);
        if vc > 1e-8 {
            mu_hat = mu_hat.min(dot(&gc, &gc) / (2.0 * vc));
        }
        let gf = exact_policy_gradient(ValueKind::Vf, &policy, tables);
        opt.step(&mut policy.logits, &gf)?;
        traj.push(exact_value(ValueKind::Vc, &policy.all_probs(), tables).value);
    }
    let fit: Vec<f64> = traj.iter().copied().take_while(|&v| v > 1e-12).collect();
    let slope = log_linear_slope(&fit).unwrap_or(f64::NAN);
    let final_vc = *traj.last().expect("non-empty");
    e.set("initial_v_c", v0);
    e.set("final_v_c", final_vc);
    e.set("ratio", final_vc / v0);
    e.set("steps", (traj.len() - 1) as f64);
    e.set("fitted_log_rate", slope);
    e.set("mu_hat", mu_hat);
    e.detail = format!("V_c ratio {:.2e} in {} steps, log-rate {slope:.4}", final_vc / v0, traj.len() - 1);
    e.trajectory = traj;
    Ok(e.pass_if(slope < 0.0 && final_vc < target_ratio * v0))
}

/// Mean `V_c` over the last quarter of the trace.
pub fn noise_floor(rows: &[TraceRow]) -> f64 {
    let tail = &rows[rows.len() - (rows.len() / 4).max(1)..];
    tail.iter().map(|r| r.v_c).sum::<f64>() / tail.len() as f64
}

/// Sampled training at `η` for `steps` and at `η/2` for `2·steps`; the
/// residual floor should shrink. Floors are averaged over `seeds`.
pub fn check_noise_floor(
    universe: &SyntheticUniverse,
    verifier: &dyn DateVerifier,
    cfg: &TrainerConfig,
    reward_cfg: &RewardConfig,
    seeds: &[u64],
    max_ratio: f64,
) -> Result<CheckEntry> {
    let mut e = CheckEntry::new("noise_floor", max_ratio);
    let eta = cfg.lr();
    let mut floors = [0.0f64; 2];
    for &seed in seeds {
        for (j, (lr, steps)) in [(eta, cfg.steps), (eta / 2.0, 2 * cfg.steps)].into_iter().enumerate() {
            let c = TrainerConfig { learning_rate: Some(lr), steps, seed, gradient: GradientSource::Sampled, ..cfg.clone() };
            let out = Trainer::new(c, reward_cfg.clone(), universe, verifier)?.run(&mut |_| Ok(()), None)?;
            floors[j] += noise_floor(&out.rows) / seeds.len() as f64;
        }
    }
    e.set("eta", eta);
    e.set("floor_eta", floors[0]);
    e.set("floor_half_eta", floors[1]);
    if floors[0] <= 0.0 {
        return Ok(e.skipped("zero floor at η"));
    }
    let ratio = floors[1] / floors[0];
    e.set("ratio", ratio);
    e.detail = format!("floor {:.3e} → {:.3e} (ratio {ratio:.3})", floors[0], floors[1]);
    Ok(e.pass_if(ratio < max_ratio))
}

/// `p̄0 ≥ (1 − min(V_c, 1))^G` on every row; when the run starts in the
/// high-leakage regime, the mode fraction must also rise.
pub fn check_curriculum(rows: &[TraceRow], group_size: usize, high_leak_below: f64) -> CheckEntry {
    let mut e = CheckEntry::new("curriculum", 1e-12);
    let Some((first, last)) = rows.first().zip(rows.last()) else {
        return e.skipped("empty trace");
    };
    let mut violations = 0;
    let mut min_slack = f64::INFINITY;
    for r in rows {
        let slack = r.p0_bar - (1.0 - r.v_c.min(1.0)).powi(group_size as i32);
        min_slack = min_slack.min(slack);
        if slack < -e.tolerance {
            violations += 1;
        }
    }
    let high_leak = first.mode_fraction < high_leak_below;
    e.set("bound_violations", violations as f64);
    e.set("min_slack", min_slack);
    e.set("initial_fraction", first.mode_fraction);
    e.set("final_fraction", last.mode_fraction);
    e.set("high_leakage_start", high_leak as u8 as f64);
    e.detail = format!(
        "mode fraction {:.1}% → {:.1}%, {violations} bound violations",
        100.0 * first.mode_fraction,
        100.0 * last.mode_fraction
    );
    e.pass_if(violations == 0 && (!high_leak || last.mode_fraction > first.mode_fraction))
}

/// Weights of the blended z-score: `A_mix = w_perf A_perf + w_leak A_leak`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ScaleWeights {
    pub w_perf: f64,
    pub w_leak: f64,
    pub s_perf: f64,
    pub s_leak: f64,
    pub s_mix: f64,
}

fn mean_std(x: &[f64]) -> (f64, f64) {
    let n = x.len() as f64;
    let m = x.iter().sum::<f64>() / n;
    (m, (x.iter().map(|v| (v - m).powi(2)).sum::<f64>() / n).sqrt())
}

pub fn scale_weights(r_leak: &[f64], r_perf: &[f64], alpha: f64) -> Option<ScaleWeights> {
    let (_, s_leak) = mean_std(r_leak);
    let (_, s_perf) = mean_std(r_perf);
    let mix: Vec<f64> = r_leak.iter().zip(r_perf).map(|(l, p)| alpha * l + (1.0 - alpha) * p).collect();
    let (_, s_mix) = mean_std(&mix);
    if s_leak < 1e-12 || s_perf < 1e-12 || s_mix < 1e-12 {
        return None;
    }
    Some(ScaleWeights { w_perf: (1.0 - alpha) * s_perf / s_mix, w_leak: alpha * s_leak / s_mix, s_perf, s_leak, s_mix })
}

/// Decomposition identity and the decline of `w_leak / w_perf` as the
/// performance scale grows.
pub fn check_scale_dominance(r_leak: &[f64], r_perf: &[f64], alpha: f64) -> CheckEntry {
    let mut e = CheckEntry::new("scale_dominance", 1e-10);
    let Some(w) = scale_weights(r_leak, r_perf, alpha) else {
        return e.skipped("zero reward variance");
    };
    let z = |x: &[f64]| -> Vec<f64> {
        let (m, s) = mean_std(x);
        x.iter().map(|v| (v - m) / s).collect()
    };
    let mix: Vec<f64> = r_leak.iter().zip(r_perf).map(|(l, p)| alpha * l + (1.0 - alpha) * p).collect();
    let (a_mix, a_perf, a_leak) = (z(&mix), z(r_perf), z(r_leak));
    let dev = a_mix
        .iter()
        .zip(a_perf.iter().zip(&a_leak))
        .map(|(m, (p, l))| (m - (w.w_perf * p + w.w_leak * l)).abs())
        .fold(0.0, f64::max);

    let sweep: Vec<f64> = [1.0, 2.0, 5.0, 10.0, 100.0]
        .iter()
        .filter_map(|&s| {
            let scaled: Vec<f64> = r_perf.iter().map(|p| s * p).collect();
            scale_weights(r_leak, &scaled, alpha).map(|w| w.w_leak / w.w_perf)
        })
        .collect();
    let declining = sweep.windows(2).all(|p| p[1] < p[0]);
    e.set("w_perf", w.w_perf);
    e.set("w_leak", w.w_leak);
    e.set("weight_ratio", w.w_leak / w.w_perf);
    e.set("identity_deviation", dev);
    e.set("sweep_declining", declining as u8 as f64);
    let ok = dev <= e.tolerance && declining;
    e.pass_if(ok)
}

/// Randomized decomposition identity over `trials` reward vectors.
pub fn scale_dominance_suite(trials: usize, group_size: usize, seed: u64) -> CheckEntry {
    let mut e = CheckEntry::new("scale_dominance_suite", 1e-10);
    let mut rng = substream(seed, 0x5CA1E, 0);
    let (mut worst, mut ran) = (0.0f64, 0usize);
    for t in 0..trials {
        let alpha = rng.random_range(0.05..0.95);
        let scale = 10f64.powf(rng.random_range(-2.0..2.0));
        let leak: Vec<f64> = (0..group_size).map(|_| (-0.5 * rng.random_range(0..7) as f64).exp()).collect();
        let perf: Vec<f64> = (0..group_size).map(|_| scale * rng.random::<f64>()).collect();
        let c = check_scale_dominance(&leak, &perf, alpha);
        if c.status == CheckStatus::Skipped {
            continue;
        }
        ran += 1;
        worst = worst.max(c.get("identity_deviation"));
        if c.status == CheckStatus::Fail {
            e.failing_seeds.push(t as u64);
        }
    }
    e.set("trials", ran as f64);
    e.set("max_identity_deviation", worst);
    e.detail = format!("{ran} trials, max deviation {worst:.1e}");
    let ok = e.failing_seeds.is_empty();
    e.pass_if(ok)
}

/// Expected objective under the mode gate, per instance
/// `p0 E[r_eff | clean] + (1 − p0) E[exp(−λc) | leaked]`, averaged.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct GatedObjective {
    pub j: f64,
    pub p0_bar: f64,
    pub clean_reward: f64,
    pub leaked_reward: f64,
    /// Expected per-member reward, with clean members in leakage-mode
    /// groups scored 1.
    pub member_average: f64,
}

pub fn gated_objective(probs: &[Vec<f64>], tables: &ValueTables, group_size: usize) -> GatedObjective {
    let n = probs.len() as f64;
    let (p0, p0_bar) = clean_group_prob(probs, tables, group_size);
    let (mut j, mut clean_r, mut leak_r, mut member) = (0.0, 0.0, 0.0, 0.0);
    for (i, p) in probs.iter().enumerate() {
        let mass = tables.clean_mass(i, p);
        let q = (1.0 - mass).max(0.0);
        let r = tables.instance_value(ValueKind::VrClean, i, p).unwrap_or(0.0);
        let f_leak = if q > 0.0 {
            p.iter().enumerate().filter(|&(k, _)| !tables.is_clean(i, k)).map(|(k, pk)| pk * tables.f[i][k]).sum::<f64>() / q
        } else {
            0.0
        };
        j += p0[i] * r + (1.0 - p0[i]) * f_leak;
        clean_r += r;
        leak_r += f_leak;
        let clean_in_leak_group = if p0[i] < 1.0 { (mass - p0[i]) / (1.0 - p0[i]) } else { 0.0 };
        member += p0[i] * r + (1.0 - p0[i]) * (clean_in_leak_group + (1.0 - clean_in_leak_group) * f_leak);
    }
    GatedObjective { j: j / n, p0_bar, clean_reward: clean_r / n, leaked_reward: leak_r / n, member_average: member / n }
}

/// Clean policy: all mass on each instance's best clean candidate. Leaky
/// policy: the same, mixed with `q` spread uniformly over leaked candidates.
pub fn adversarial_policies(tables: &ValueTables, q: f64) -> (Vec<Vec<f64>>, Vec<Vec<f64>>) {
    let mut clean = vec![];
    let mut leaky = vec![];
    for i in 0..tables.num_instances() {
        let n = tables.c[i].len();
        let best = (0..n)
            .filter(|&k| tables.is_clean(i, k))
            .max_by(|&a, &b| tables.r_eff[i][a].total_cmp(&tables.r_eff[i][b]))
            .expect("a clean candidate exists");
        let leaked: Vec<usize> = (0..n).filter(|&k| !tables.is_clean(i, k)).collect();
        let mut pc = vec![0.0; n];
        pc[best] = 1.0;
        let mut pl = pc.clone();
        if !leaked.is_empty() {
            pl[best] = 1.0 - q;
            for &k in &leaked {
                pl[k] = q / leaked.len() as f64;
            }
        }
        clean.push(pc);
        leaky.push(pl);
    }
    (clean, leaky)
}

/// Exact-penalty comparison across group sizes: `J(clean) = E[r_eff]`
/// exactly, `J(clean) > J(leaky)` when clean outputs out-earn leaked ones,
/// and the gap is non-decreasing in `G`.
pub fn check_exact_penalty(
    tables: &ValueTables,
    clean: &[Vec<f64>],
    leaky: &[Vec<f64>],
    group_sizes: &[usize],
) -> CheckEntry {
    let mut e = CheckEntry::new("exact_penalty", 1e-12);
    let q = crate::env::leak_mass(leaky, tables);
    if q.iter().all(|&v| v <= 0.0) {
        return e.skipped("leaky policy has no leak mass");
    }
    let expected_r = exact_value(ValueKind::VrClean, clean, tables).value;
    let mut gaps = vec![];
    let mut ok = true;
    for &g in group_sizes {
        let jc = gated_objective(clean, tables, g);
        let jl = gated_objective(leaky, tables, g);
        let gap = jc.j - jl.j;
        e.set(&format!("J_clean_G{g}"), jc.j);
        e.set(&format!("J_leaky_G{g}"), jl.j);
        e.set(&format!("gap_G{g}"), gap);
        e.set(&format!("member_average_gap_G{g}"), jc.member_average - jl.member_average);
        ok &= (jc.j - expected_r).abs() <= e.tolerance;
        if jl.clean_reward > jl.leaked_reward {
            ok &= gap > 0.0;
        }
        gaps.push(gap);
    }
    let monotone = gaps.windows(2).all(|w| w[1] >= w[0] - e.tolerance);
    let naive_gap = exact_value(ValueKind::VrClean, clean, tables).value - naive_perf(leaky, tables);
    e.set("naive_perf_gap", naive_gap);
    e.set("gap_non_decreasing", monotone as u8 as f64);
    e.detail = format!(
        "gaps {}",
        gaps.iter().map(|g| format!("{g:.4}")).collect::<Vec<_>>().join(", ")
    );
    e.pass_if(ok && monotone)
}

/// Unconditional expected effective reward, as a performance-only trainer
/// would see it.
fn naive_perf(probs: &[Vec<f64>], tables: &ValueTables) -> f64 {
    probs.iter().enumerate().map(|(i, p)| p.iter().zip(&tables.r_eff[i]).map(|(a, b)| a * b).sum::<f64>()).sum::<f64>()
        / probs.len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn two_outcome() -> ValueTables {
        ValueTables::from_parts(vec![vec![0, 1]], vec![vec![0.5, 0.9]], &RewardConfig::default())
    }

    #[test]
    fn two_outcome_alignment_is_negative() {
        let e = check_alignment(&two_outcome(), &SoftmaxPolicy::uniform(&[2]).unwrap());
        assert_eq!(e.status, CheckStatus::Pass);
        // Brute force: ∇V_f = (1/4)(f1 − f0)·(−1, 1), ∇V_c = (1/4)(−1, 1).
        let f1 = (-0.5f64).exp();
        assert_abs_diff_eq!(e.get("inner_product"), 2.0 * (f1 - 1.0) / 16.0, epsilon = 1e-15);
    }

    #[test]
    fn all_clean_alignment_is_skipped() {
        let t = ValueTables::from_parts(vec![vec![0, 0, 0]], vec![vec![0.1, 0.2, 0.3]], &RewardConfig::default());
        let e = check_alignment(&t, &SoftmaxPolicy::uniform(&[3]).unwrap());
        assert_eq!(e.status, CheckStatus::Skipped);
    }

    #[test]
    fn pure_leakage_descends() {
        let e = check_mixed_descent(&two_outcome(), &SoftmaxPolicy::uniform(&[2]).unwrap(), 1.0, &ExactRun::default(), 1e-6)
            .unwrap();
        assert_eq!(e.status, CheckStatus::Pass);
        assert!(e.get("final_v_c") < 1e-6);
        assert!(e.trajectory.windows(2).all(|w| w[1] < w[0]));
    }

    #[test]
    fn oversized_step_is_not_asserted() {
        let t = ValueTables::from_parts(vec![vec![0, 0, 2]], vec![vec![0.2, 0.9, 1.0]], &RewardConfig::default());
        let run = ExactRun { optimizer: OptimizerKind::Sgd, learning_rate: 1e6, max_steps: 5 };
        let e = check_mixed_descent(&t, &SoftmaxPolicy::uniform(&[3]).unwrap(), 0.5, &run, 1e-6).unwrap();
        assert_eq!(e.status, CheckStatus::Reported);
    }

    #[test]
    fn two_outcome_converges_geometrically() {
        let uniform = SoftmaxPolicy::uniform(&[2]).unwrap();
        let short = ExactRun { max_steps: 200, ..Default::default() };
        let e = check_linear_convergence(&two_outcome(), &uniform, &short, 1e-4).unwrap();
        assert!(e.get("fitted_log_rate") < 0.0);
        assert!(e.get("ratio") < 1e-2);
        let e = check_linear_convergence(&two_outcome(), &uniform, &ExactRun { max_steps: 500, ..short }, 1e-4).unwrap();
        assert_eq!(e.status, CheckStatus::Pass, "{}", e.detail);
    }

    #[test]
    fn converged_policy_passes_trivially() {
        let p = SoftmaxPolicy::new(vec![vec![0.0, f64::MIN / 2.0]]).unwrap();
        let e = check_linear_convergence(&two_outcome(), &p, &ExactRun::default(), 1e-4).unwrap();
        assert_eq!(e.status, CheckStatus::Pass);
    }

    #[test]
    fn curriculum_bound_on_clean_trace() {
        let rows: Vec<TraceRow> = (0..5).map(|s| TraceRow { step: s, p0_bar: 1.0, mode_fraction: 1.0, ..Default::default() }).collect();
        assert_eq!(check_curriculum(&rows, 12, 0.2).status, CheckStatus::Pass);
        let bad = vec![TraceRow { v_c: 0.01, p0_bar: 0.5, ..Default::default() }];
        assert_eq!(check_curriculum(&bad, 12, 0.2).status, CheckStatus::Fail);
    }

    #[test]
    fn scale_weight_examples() {
        let leak = [1.0, 0.0, 1.0, 0.0];
        let w = scale_weights(&leak, &leak, 0.5).unwrap();
        assert_abs_diff_eq!(w.w_perf, w.w_leak, epsilon = 1e-15);
        let perf: Vec<f64> = leak.iter().map(|v| 100.0 * (1.0 - v)).collect();
        let w = scale_weights(&leak, &perf, 0.5).unwrap();
        assert_abs_diff_eq!(w.w_leak / w.w_perf, 0.01, epsilon = 1e-15);
        assert_eq!(check_scale_dominance(&[1.0, 1.0], &[0.0, 1.0], 0.5).status, CheckStatus::Skipped);
    }

    #[test]
    fn exact_penalty_on_zero_leak_recovers_performance() {
        let t = ValueTables::from_parts(vec![vec![0, 0, 2]], vec![vec![0.9, 0.7, 1.0]], &RewardConfig::default());
        let (clean, leaky) = adversarial_policies(&t, 0.2);
        let jc = gated_objective(&clean, &t, 12);
        assert_eq!(jc.j, 0.9);
        let e = check_exact_penalty(&t, &clean, &leaky, &[2, 4, 8, 12]);
        assert_eq!(e.status, CheckStatus::Pass, "{}", e.detail);
        assert!(e.get("naive_perf_gap") < 0.0);
        assert!(e.get("gap_G12") > 0.0);
    }
}
