//! Tabular softmax policy: one logit vector per instance over that
//! instance's finite completion universe.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SoftmaxPolicy {
    pub logits: Vec<Vec<f64>>,
    /// Frozen copy taken at construction, used for the KL term.
    pub reference_logits: Vec<Vec<f64>>,
}

/// Numerically stable softmax of `z / temperature`.
pub fn softmax(z: &[f64], temperature: f64) -> Vec<f64> {
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut p: Vec<f64> = z.iter().map(|&v| ((v - max) / temperature).exp()).collect();
    let s: f64 = p.iter().sum();
    p.iter_mut().for_each(|x| *x /= s);
    p
}

/// `log softmax(z / temperature)[k]`.
pub fn log_softmax_at(z: &[f64], k: usize, temperature: f64) -> f64 {
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse: f64 = z.iter().map(|&v| ((v - max) / temperature).exp()).sum::<f64>().ln();
    (z[k] - max) / temperature - lse
}

impl SoftmaxPolicy {
    pub fn new(logits: Vec<Vec<f64>>) -> Result<Self> {
        if logits.is_empty() {
            return Err(Error::NoInstances);
        }
        if let Some(i) = logits.iter().position(|z| z.is_empty()) {
            return Err(Error::InvalidInput(format!("instance {i} has an empty universe")));
        }
        if logits.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput("non-finite logit".into()));
        }
        Ok(SoftmaxPolicy { reference_logits: logits.clone(), logits })
    }

    pub fn uniform(sizes: &[usize]) -> Result<Self> {
        Self::new(sizes.iter().map(|&n| vec![0.0; n]).collect())
    }

    pub fn num_instances(&self) -> usize {
        self.logits.len()
    }

    pub fn sizes(&self) -> Vec<usize> {
        self.logits.iter().map(Vec::len).collect()
    }

    pub fn probs(&self, instance: usize) -> Vec<f64> {
        softmax(&self.logits[instance], 1.0)
    }

    pub fn tempered_probs(&self, instance: usize, temperature: f64) -> Vec<f64> {
        softmax(&self.logits[instance], temperature)
    }

    pub fn all_probs(&self) -> Vec<Vec<f64>> {
        (0..self.num_instances()).map(|i| self.probs(i)).collect()
    }

    pub fn log_prob(&self, instance: usize, outcome: usize, temperature: f64) -> f64 {
        log_softmax_at(&self.logits[instance], outcome, temperature)
    }

    pub fn ref_log_prob(&self, instance: usize, outcome: usize, temperature: f64) -> f64 {
        log_softmax_at(&self.reference_logits[instance], outcome, temperature)
    }

    /// Score function `e_y − π` of the untempered policy.
    pub fn score(&self, instance: usize, outcome: usize) -> Vec<f64> {
        let mut s: Vec<f64> = self.probs(instance).iter().map(|p| -p).collect();
        s[outcome] += 1.0;
        s
    }

    /// Hex SHA-256 over the little-endian logit bytes.
    pub fn snapshot_hash(&self) -> String {
        let mut h = Sha256::new();
        for z in &self.logits {
            h.update((z.len() as u64).to_le_bytes());
            for v in z {
                h.update(v.to_le_bytes());
            }
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn extreme_logits_stay_finite() {
        let p = softmax(&[1000.0, 0.0, -1000.0], 1.0);
        assert_eq!(p[0], 1.0);
        assert!(p.iter().all(|x| x.is_finite()));
        assert!((log_softmax_at(&[1000.0, 0.0], 1, 1.0) + 1000.0).abs() < 1e-9);
    }

    #[test]
    fn rejects_bad_shapes() {
        assert!(SoftmaxPolicy::new(vec![]).is_err());
        assert!(SoftmaxPolicy::new(vec![vec![]]).is_err());
        assert!(SoftmaxPolicy::new(vec![vec![f64::NAN]]).is_err());
    }

    #[test]
    fn hash_tracks_logits() {
        let mut p = SoftmaxPolicy::uniform(&[3, 2]).unwrap();
        let h0 = p.snapshot_hash();
        assert_eq!(h0.len(), 64);
        p.logits[1][0] = 0.5;
        assert_ne!(p.snapshot_hash(), h0);
    }

    proptest! {
        #[test]
        fn probabilities_sum_to_one(z in proptest::collection::vec(-30.0f64..30.0, 1..40), t in 0.05f64..3.0) {
            for temp in [1.0, t] {
                let p = softmax(&z, temp);
                prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
                for (k, &pk) in p.iter().enumerate() {
                    prop_assert!((log_softmax_at(&z, k, temp).exp() - pk).abs() < 1e-12);
                }
            }
        }
    }
}
