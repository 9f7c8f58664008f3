//! Group-relative policy optimization primitives: advantage shaping, the
//! clipped surrogate gradient, optimizers, and seeded group sampling.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::policy::SoftmaxPolicy;

/// Which optimizer applies the ascent direction.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    #[default]
    Adam,
    Sgd,
}

/// Where the update direction comes from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum GradientSource {
    /// Sampled groups through parse, audit and reward.
    #[default]
    Sampled,
    /// Exact expected gradient from the synthetic universe.
    Exact,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainerConfig {
    pub group_size: usize,
    pub batch_size: usize,
    /// Left unset, the run profile decides.
    pub learning_rate: Option<f64>,
    pub temperature: f64,
    pub clip_low: f64,
    pub clip_high: f64,
    pub kl_coeff: f64,
    pub advantage_zclip: f64,
    pub batch_baseline: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub steps: usize,
    pub seed: u64,
    /// Surrogate passes over each sampled batch. Ratios leave 1 only from
    /// the second pass on.
    pub update_epochs: usize,
    pub optimizer: OptimizerKind,
    pub gradient: GradientSource,
    /// Standard deviation of the initial logits; 0 starts uniform.
    pub init_logit_std: f64,
}

impl Default for TrainerConfig {
    fn default() -> Self {
        TrainerConfig {
            group_size: 12,
            batch_size: 8,
            learning_rate: None,
            temperature: 0.6,
            clip_low: 0.9,
            clip_high: 2.0,
            kl_coeff: 0.05,
            advantage_zclip: 5.0,
            batch_baseline: 0.1,
            adam_beta1: 0.9,
            adam_beta2: 0.95,
            adam_eps: 1e-8,
            steps: 100,
            seed: 0,
            update_epochs: 1,
            optimizer: OptimizerKind::Adam,
            gradient: GradientSource::Sampled,
            init_logit_std: 0.0,
        }
    }
}

pub const PAPER_LEARNING_RATE: f64 = 2e-5;
pub const TABULAR_LEARNING_RATE: f64 = 0.05;

impl TrainerConfig {
    pub fn lr(&self) -> f64 {
        self.learning_rate.unwrap_or(PAPER_LEARNING_RATE)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("trainer: {m}")));
        if self.group_size < 2 {
            return bad("group_size must be at least 2");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive");
        }
        if !(self.temperature > 0.0) {
            return bad("temperature must be positive");
        }
        if !(0.0 < self.clip_low && self.clip_low < 1.0 && 1.0 < self.clip_high) {
            return bad("need 0 < clip_low < 1 < clip_high");
        }
        if !(self.lr() > 0.0) || !self.lr().is_finite() {
            return bad("learning_rate must be positive");
        }
        if !(self.advantage_zclip > 0.0) {
            return bad("advantage_zclip must be positive");
        }
        if self.kl_coeff < 0.0 || self.batch_baseline < 0.0 {
            return bad("kl_coeff and batch_baseline must be non-negative");
        }
        if !(0.0..1.0).contains(&self.adam_beta1) || !(0.0..1.0).contains(&self.adam_beta2) || !(self.adam_eps > 0.0) {
            return bad("adam betas must lie in [0, 1) and eps must be positive");
        }
        if self.update_epochs == 0 {
            return bad("update_epochs must be positive");
        }
        if self.init_logit_std < 0.0 {
            return bad("init_logit_std must be non-negative");
        }
        Ok(())
    }
}

/// Population z-score with a zero-variance guard, then clip to ±`zclip`.
pub fn zscore_advantages(rewards: &[f64], zclip: f64) -> Result<Vec<f64>> {
    if rewards.len() < 2 {
        return Err(Error::DegenerateGroup(rewards.len()));
    }
    let n = rewards.len() as f64;
    let mean = rewards.iter().sum::<f64>() / n;
    let std = (rewards.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / n).sqrt();
    if std < 1e-8 {
        return Ok(vec![0.0; rewards.len()]);
    }
    Ok(rewards.iter().map(|r| ((r - mean) / std).clamp(-zclip, zclip)).collect())
}

/// `A_i + λ (r_i − batch_mean)`.
pub fn batch_baseline(advantages: &[f64], rewards: &[f64], batch_mean: f64, lambda: f64) -> Vec<f64> {
    advantages
        .iter()
        .zip(rewards)
        .map(|(a, r)| a + lambda * (r - batch_mean))
        .collect()
}

/// `A_i + β m_i (δ̄ − δ_i)` with `δ = new − ref` and `δ̄` the mean over
/// masked members.
pub fn kl_adjust(advantages: &[f64], new_lp: &[f64], ref_lp: &[f64], mask: &[f64], beta: f64) -> Vec<f64> {
    let delta: Vec<f64> = new_lp.iter().zip(ref_lp).map(|(n, r)| n - r).collect();
    let m_sum: f64 = mask.iter().sum();
    let mean = if m_sum > 0.0 {
        delta.iter().zip(mask).map(|(d, m)| d * m).sum::<f64>() / m_sum
    } else {
        0.0
    };
    advantages
        .iter()
        .zip(&delta)
        .zip(mask)
        .map(|((a, d), m)| a + beta * m * (mean - d))
        .collect()
}

/// One member's contribution to the surrogate.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SurrogateTerm {
    pub instance: usize,
    pub outcome: usize,
    pub advantage: f64,
    /// Log-probability at sampling time, at the sampling temperature.
    pub old_logprob: f64,
}

/// Gradient of the pessimistic clipped surrogate, averaged over terms.
/// Ratios use the sampling temperature; the score is untempered.
pub fn clipped_surrogate_gradient(
    policy: &SoftmaxPolicy,
    terms: &[SurrogateTerm],
    temperature: f64,
    clip_low: f64,
    clip_high: f64,
) -> Result<Vec<Vec<f64>>> {
    let mut grad: Vec<Vec<f64>> = policy.sizes().into_iter().map(|n| vec![0.0; n]).collect();
    if terms.is_empty() {
        return Ok(grad);
    }
    let probs = policy.all_probs();
    for t in terms {
        let ratio = (policy.log_prob(t.instance, t.outcome, temperature) - t.old_logprob).exp();
        let clipped = (t.advantage > 0.0 && ratio > clip_high) || (t.advantage < 0.0 && ratio < clip_low);
        if clipped {
            continue;
        }
        let w = ratio * t.advantage;
        let g = &mut grad[t.instance];
        for (k, p) in probs[t.instance].iter().enumerate() {
            g[k] -= w * p;
        }
        g[t.outcome] += w;
    }
    let n = terms.len() as f64;
    for v in grad.iter_mut().flatten() {
        *v /= n;
    }
    if grad.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::NumericalDivergence("non-finite surrogate gradient".into()));
    }
    Ok(grad)
}

/// Gradient-ascent optimizer over ragged logit tables.
#[derive(Debug, Clone)]
pub enum Optimizer {
    Sgd { lr: f64 },
    Adam { lr: f64, beta1: f64, beta2: f64, eps: f64, t: i32, m: Vec<Vec<f64>>, v: Vec<Vec<f64>> },
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, lr: f64, beta1: f64, beta2: f64, eps: f64, sizes: &[usize]) -> Self {
        match kind {
            OptimizerKind::Sgd => Optimizer::Sgd { lr },
            OptimizerKind::Adam => {
                let zeros: Vec<Vec<f64>> = sizes.iter().map(|&n| vec![0.0; n]).collect();
                Optimizer::Adam { lr, beta1, beta2, eps, t: 0, m: zeros.clone(), v: zeros }
            }
        }
    }

    pub fn from_config(cfg: &TrainerConfig, sizes: &[usize]) -> Self {
        Self::new(cfg.optimizer, cfg.lr(), cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps, sizes)
    }

    /// Move `params` along `grad` (ascent).
    pub fn step(&mut self, params: &mut [Vec<f64>], grad: &[Vec<f64>]) -> Result<()> {
        if grad.iter().flatten().any(|g| !g.is_finite()) {
            return Err(Error::NumericalDivergence("non-finite gradient".into()));
        }
        match self {
            Optimizer::Sgd { lr } => {
                for (p, g) in params.iter_mut().flatten().zip(grad.iter().flatten()) {
                    *p += *lr * g;
                }
            }
            Optimizer::Adam { lr, beta1, beta2, eps, t, m, v } => {
                *t += 1;
                let bc1 = 1.0 - beta1.powi(*t);
                let bc2 = 1.0 - beta2.powi(*t);
                let it = params.iter_mut().flatten().zip(grad.iter().flatten()).zip(m.iter_mut().flatten().zip(v.iter_mut().flatten()));
                for ((p, &g), (mi, vi)) in it {
                    *mi = *beta1 * *mi + (1.0 - *beta1) * g;
                    *vi = *beta2 * *vi + (1.0 - *beta2) * g * g;
                    *p += *lr * (*mi / bc1) / ((*vi / bc2).sqrt() + *eps);
                }
            }
        }
        if params.iter().flatten().any(|p| !p.is_finite()) {
            return Err(Error::NumericalDivergence("non-finite parameters after update".into()));
        }
        Ok(())
    }
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

/// Independent stream for `(seed, a, b)`, e.g. `(step, group)`.
pub fn substream(seed: u64, a: u64, b: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(splitmix64(splitmix64(a) ^ b.rotate_left(32)));
    rng
}

/// Draw an index from a probability vector by inversion.
pub fn sample_index(p: &[f64], rng: &mut impl Rng) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (k, &pk) in p.iter().enumerate() {
        acc += pk;
        if u < acc {
            return k;
        }
    }
    p.iter().rposition(|&pk| pk > 0.0).unwrap_or(p.len() - 1)
}

/// `G` i.i.d. draws at the given temperature with their log-probabilities.
pub fn sample_group(
    policy: &SoftmaxPolicy,
    instance: usize,
    group_size: usize,
    temperature: f64,
    rng: &mut impl Rng,
) -> (Vec<usize>, Vec<f64>) {
    let p = policy.tempered_probs(instance, temperature);
    let outcomes: Vec<usize> = (0..group_size).map(|_| sample_index(&p, rng)).collect();
    let lps = outcomes.iter().map(|&k| policy.log_prob(instance, k, temperature)).collect();
    (outcomes, lps)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    #[test]
    fn zscore_examples() {
        assert_eq!(zscore_advantages(&[1.0, 1.0, 1.0], 5.0).unwrap(), vec![0.0; 3]);
        assert_eq!(zscore_advantages(&[0.0, 1.0], 5.0).unwrap(), vec![-1.0, 1.0]);
        assert_eq!(zscore_advantages(&[0.0, 0.0, 1.0, 1.0], 5.0).unwrap(), vec![-1.0, -1.0, 1.0, 1.0]);
        assert!(matches!(zscore_advantages(&[1.0], 5.0), Err(Error::DegenerateGroup(1))));
        let mut spike = vec![0.0; 100];
        spike[0] = 1.0;
        assert_eq!(zscore_advantages(&spike, 5.0).unwrap()[0], 5.0);
    }

    #[test]
    fn baseline_examples() {
        assert_eq!(batch_baseline(&[-1.0, 1.0], &[0.0, 1.0], 0.5, 0.0), vec![-1.0, 1.0]);
        let a = batch_baseline(&[-1.0, 1.0], &[0.0, 1.0], 0.5, 0.1);
        assert_abs_diff_eq!(a[0], -1.05, epsilon = 1e-15);
        assert_abs_diff_eq!(a[1], 1.05, epsilon = 1e-15);
    }

    #[test]
    fn kl_examples() {
        let a = [0.3, -0.3];
        assert_eq!(kl_adjust(&a, &[0.2, 0.0], &[0.0, 0.0], &[1.0, 1.0], 0.0), a.to_vec());
        assert_eq!(kl_adjust(&a, &[0.1, 0.1], &[0.0, 0.0], &[1.0, 1.0], 0.05), a.to_vec());
        let got = kl_adjust(&a, &[0.2, 0.0], &[0.0, 0.0], &[1.0, 1.0], 0.05);
        assert_abs_diff_eq!(got[0], 0.3 - 0.005, epsilon = 1e-15);
        assert_abs_diff_eq!(got[1], -0.3 + 0.005, epsilon = 1e-15);
    }

    #[test]
    fn ratio_one_matches_reinforce() {
        let policy = SoftmaxPolicy::new(vec![vec![0.3, -0.2, 0.5]]).unwrap();
        let terms: Vec<SurrogateTerm> = [(0, 1.0), (2, -0.5), (1, 0.25)]
            .iter()
            .map(|&(k, a)| SurrogateTerm { instance: 0, outcome: k, advantage: a, old_logprob: policy.log_prob(0, k, 0.6) })
            .collect();
        let g = clipped_surrogate_gradient(&policy, &terms, 0.6, 0.9, 2.0).unwrap();
        let mut expected = vec![0.0; 3];
        for t in &terms {
            for (e, s) in expected.iter_mut().zip(policy.score(0, t.outcome)) {
                *e += t.advantage * s / 3.0;
            }
        }
        for (a, b) in g[0].iter().zip(&expected) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-15);
        }
    }

    #[test]
    fn clipping_zeroes_saturated_terms() {
        let policy = SoftmaxPolicy::new(vec![vec![2.0, 0.0]]).unwrap();
        // Old log-prob far below current: ratio ≫ clip_high.
        let t = SurrogateTerm { instance: 0, outcome: 0, advantage: 1.0, old_logprob: -5.0 };
        let g = clipped_surrogate_gradient(&policy, &[t], 1.0, 0.9, 2.0).unwrap();
        assert_eq!(g[0], vec![0.0, 0.0]);
        // Same ratio with negative advantage keeps the gradient.
        let t = SurrogateTerm { advantage: -1.0, ..t };
        let g = clipped_surrogate_gradient(&policy, &[t], 1.0, 0.9, 2.0).unwrap();
        assert!(g[0][0] < 0.0);
    }

    #[test]
    fn zero_advantages_leave_policy_unchanged() {
        let mut policy = SoftmaxPolicy::new(vec![vec![0.1, 0.2]]).unwrap();
        let before = policy.logits.clone();
        let t = SurrogateTerm { instance: 0, outcome: 0, advantage: 0.0, old_logprob: policy.log_prob(0, 0, 1.0) };
        let g = clipped_surrogate_gradient(&policy, &[t], 1.0, 0.9, 2.0).unwrap();
        let mut opt = Optimizer::new(OptimizerKind::Adam, 0.05, 0.9, 0.95, 1e-8, &policy.sizes());
        opt.step(&mut policy.logits, &g).unwrap();
        assert_eq!(policy.logits, before);
    }

    #[test]
    fn positive_advantage_raises_probability() {
        let mut policy = SoftmaxPolicy::uniform(&[2]).unwrap();
        let terms = [(0, 1.0), (1, -1.0)]
            .map(|(k, a)| SurrogateTerm { instance: 0, outcome: k, advantage: a, old_logprob: policy.log_prob(0, k, 1.0) });
        let g = clipped_surrogate_gradient(&policy, &terms, 1.0, 0.9, 2.0).unwrap();
        let mut opt = Optimizer::new(OptimizerKind::Sgd, 0.1, 0.9, 0.95, 1e-8, &policy.sizes());
        opt.step(&mut policy.logits, &g).unwrap();
        assert!(policy.probs(0)[0] > 0.5);
    }

    #[test]
    fn divergence_is_reported() {
        let mut p = vec![vec![0.0]];
        let mut opt = Optimizer::new(OptimizerKind::Sgd, 1.0, 0.9, 0.95, 1e-8, &[1]);
        assert!(matches!(opt.step(&mut p, &[vec![f64::NAN]]), Err(Error::NumericalDivergence(_))));
    }

    #[test]
    fn sampling_examples() {
        let peaked = SoftmaxPolicy::new(vec![vec![50.0, 0.0, 0.0]]).unwrap();
        let (o, _) = sample_group(&peaked, 0, 12, 0.6, &mut substream(1, 0, 0));
        assert!(o.iter().all(|&k| k == 0));

        let uniform = SoftmaxPolicy::uniform(&[4]).unwrap();
        let a = sample_group(&uniform, 0, 12, 0.6, &mut substream(9, 3, 4));
        let b = sample_group(&uniform, 0, 12, 0.6, &mut substream(9, 3, 4));
        assert_eq!(a, b);
        assert_ne!(a.0, sample_group(&uniform, 0, 12, 0.6, &mut substream(9, 3, 5)).0);

        // Chi-square goodness of fit at 10^5 draws, 3 dof, 0.1% critical value 16.27.
        let mut rng = substream(7, 0, 0);
        let (draws, _) = sample_group(&uniform, 0, 100_000, 0.6, &mut rng);
        let mut counts = [0f64; 4];
        draws.iter().for_each(|&k| counts[k] += 1.0);
        let chi2: f64 = counts.iter().map(|c| (c - 25_000.0).powi(2) / 25_000.0).sum();
        assert!(chi2 < 16.27, "chi2 = {chi2}");
    }

    #[test]
    fn config_invariants() {
        assert!(TrainerConfig::default().validate().is_ok());
        for bad in [
            TrainerConfig { group_size: 1, ..Default::default() },
            TrainerConfig { clip_low: 1.0, ..Default::default() },
            TrainerConfig { clip_high: 1.0, ..Default::default() },
            TrainerConfig { temperature: 0.0, ..Default::default() },
        ] {
            assert!(bad.validate().is_err());
        }
    }

    proptest! {
        #[test]
        fn zscore_moments(r in proptest::collection::vec(-10.0f64..10.0, 2..30)) {
            let a = zscore_advantages(&r, f64::INFINITY).unwrap();
            let n = a.len() as f64;
            let mean = a.iter().sum::<f64>() / n;
            let var = a.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
            prop_assert!(mean.abs() < 1e-10);
            if a.iter().any(|&x| x != 0.0) {
                prop_assert!((var.sqrt() - 1.0).abs() < 1e-8);
            }
            let clipped = zscore_advantages(&r, 1.5).unwrap();
            prop_assert!(clipped.iter().all(|x| x.abs() <= 1.5));
        }

        #[test]
        fn kl_adjustment_is_mean_zero(
            v in proptest::collection::vec((-3.0f64..0.0, -3.0f64..0.0), 1..20),
            beta in 0.0f64..1.0,
        ) {
            let (new, reff): (Vec<f64>, Vec<f64>) = v.into_iter().unzip();
            let zeros = vec![0.0; new.len()];
            let ones = vec![1.0; new.len()];
            let adj = kl_adjust(&zeros, &new, &reff, &ones, beta);
            prop_assert!(adj.iter().sum::<f64>().abs() < 1e-12);
        }
    }
}
