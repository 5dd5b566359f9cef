//! Training objectives.

use serde::{Deserialize, Serialize};

use crate::diffcore::log_softmax;
use crate::error::{ensure_finite, Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    /// Weight of the score MSE; the domain loss gets `1 - alpha`.
    pub alpha: f64,
    /// GRL coefficient applied to the discriminator's gradient into the
    /// encoder.
    pub beta: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            alpha: 0.5,
            beta: 1.0,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::InvalidArgument(format!(
                "alpha must lie in [0, 1], got {}",
                self.alpha
            )));
        }
        if !(self.beta >= 0.0 && self.beta.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "beta must be finite and >= 0, got {}",
                self.beta
            )));
        }
        Ok(())
    }
}

/// Mean squared difference between scores and their supervision.
pub fn mse_liveness(rho: &[f64], y_tilde: &[f64]) -> Result<f64> {
    if rho.is_empty() {
        return Err(Error::InvalidArgument("empty batch".into()));
    }
    if rho.len() != y_tilde.len() {
        return Err(Error::ShapeMismatch {
            expected: vec![y_tilde.len()],
            actual: vec![rho.len()],
        });
    }
    ensure_finite("scores", rho)?;
    ensure_finite("targets", y_tilde)?;
    if rho.iter().chain(y_tilde).any(|v| !(0.0..=1.0).contains(v)) {
        return Err(Error::InvalidArgument("scores and targets must lie in [0, 1]".into()));
    }
    let sum: f64 = rho.iter().zip(y_tilde).map(|(r, y)| (r - y).powi(2)).sum();
    Ok(sum / rho.len() as f64)
}

/// Mean cross-entropy of the discriminator logits against domain ids.
pub fn adv_domain_loss<L: AsRef<[f64]>>(domain_logits: &[L], domain_ids: &[usize]) -> Result<f64> {
    if domain_logits.is_empty() {
        return Err(Error::InvalidArgument("empty batch".into()));
    }
    if domain_logits.len() != domain_ids.len() {
        return Err(Error::ShapeMismatch {
            expected: vec![domain_ids.len()],
            actual: vec![domain_logits.len()],
        });
    }
    let mut sum = 0.0;
    for (logits, &id) in domain_logits.iter().zip(domain_ids) {
        let logits = logits.as_ref();
        if id >= logits.len() {
            return Err(Error::DomainOutOfRange {
                id,
                domains: logits.len(),
            });
        }
        sum -= log_softmax(logits)?[id];
    }
    Ok(sum / domain_logits.len() as f64)
}

/// `alpha * l_mse + (1 - alpha) * l_adv`.
pub fn total_loss(l_mse: f64, l_adv: f64, cfg: &LossConfig) -> f64 {
    cfg.alpha * l_mse + (1.0 - cfg.alpha) * l_adv
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn mse_examples() {
        assert_eq!(mse_liveness(&[0.2, 0.9], &[0.2, 0.9]).unwrap(), 0.0);
        assert_eq!(mse_liveness(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 1.0);
        let v = mse_liveness(&[0.3, 0.7, 0.5], &[0.1, 0.9, 0.5]).unwrap();
        assert!((v - 0.08 / 3.0).abs() < 1e-15);
        assert!(mse_liveness(&[], &[]).is_err());
        assert!(mse_liveness(&[0.1], &[0.1, 0.2]).is_err());
        assert!(mse_liveness(&[1.1], &[0.1]).is_err());
    }

    #[test]
    fn adv_examples() {
        let confident = vec![vec![100.0, -100.0, -100.0], vec![-100.0, -100.0, 100.0]];
        assert!(adv_domain_loss(&confident, &[0, 2]).unwrap() < 1e-80);
        let uniform = vec![vec![0.5; 4]; 3];
        let v = adv_domain_loss(&uniform, &[0, 1, 3]).unwrap();
        assert!((v - 4f64.ln()).abs() < 1e-15);
        assert!(matches!(
            adv_domain_loss(&uniform, &[0, 4, 1]),
            Err(Error::DomainOutOfRange { id: 4, domains: 4 })
        ));
    }

    #[test]
    fn adv_matches_brute_force() {
        let logits = vec![
            vec![0.3, -1.2, 2.0],
            vec![1.5, 0.1, -0.4],
            vec![-0.7, -0.7, 0.9],
            vec![2.2, 1.1, 0.0],
            vec![0.0, 0.5, -2.5],
        ];
        let ids = [2, 0, 1, 1, 2];
        let mut brute = 0.0;
        for (z, &id) in logits.iter().zip(&ids) {
            let denom: f64 = z.iter().map(|v: &f64| v.exp()).sum();
            brute += -(z[id].exp() / denom).ln();
        }
        brute /= 5.0;
        assert!((adv_domain_loss(&logits, &ids).unwrap() - brute).abs() < 1e-14);
    }

    #[test]
    fn total_examples() {
        let cfg = LossConfig::default();
        assert!((total_loss(0.2, 0.4, &cfg) - 0.3).abs() < 1e-15);
        let one = LossConfig { alpha: 1.0, ..cfg };
        assert_eq!(total_loss(0.2, 0.4, &one), 0.2);
        let zero = LossConfig { alpha: 0.0, ..cfg };
        assert_eq!(total_loss(0.2, 0.4, &zero), 0.4);
        assert!(LossConfig { alpha: 1.5, ..cfg }.validate().is_err());
    }

    proptest! {
        #[test]
        fn mse_symmetric_and_permutation_invariant(
            pairs in prop::collection::vec((0.0f64..=1.0, 0.0f64..=1.0), 1..20),
            rot in 0usize..20,
        ) {
            let (a, b): (Vec<f64>, Vec<f64>) = pairs.iter().copied().unzip();
            let m = mse_liveness(&a, &b).unwrap();
            prop_assert!(m >= 0.0);
            prop_assert!((m - mse_liveness(&b, &a).unwrap()).abs() < 1e-15);
            let r = rot % a.len();
            let (mut ra, mut rb) = (a.clone(), b.clone());
            ra.rotate_left(r);
            rb.rotate_left(r);
            prop_assert!((m - mse_liveness(&ra, &rb).unwrap()).abs() < 1e-12);
        }

        #[test]
        fn total_monotone_in_components(
            alpha in 0.01f64..0.99, m in 0.0f64..5.0, a in 0.0f64..5.0, dm in 0.0f64..1.0, da in 0.0f64..1.0,
        ) {
            let cfg = LossConfig { alpha, beta: 1.0 };
            let base = total_loss(m, a, &cfg);
            prop_assert!(total_loss(m + dm, a, &cfg) >= base);
            prop_assert!(total_loss(m, a + da, &cfg) >= base);
        }
    }
}
