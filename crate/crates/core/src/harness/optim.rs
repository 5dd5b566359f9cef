//! Adam with decoupled weight decay, and the exponential learning-rate
//! schedule.

use serde::{Deserialize, Serialize};

use crate::diffcore::ParamSet;
use crate::error::{Error, Result};

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// First and second moment estimates plus the step counter.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub step: u64,
    pub m: ParamSet,
    pub v: ParamSet,
}

impl AdamState {
    pub fn new(params: &ParamSet) -> AdamState {
        AdamState {
            step: 0,
            m: params.zeros_like(),
            v: params.zeros_like(),
        }
    }
}

/// One Adam step. Weight decay is decoupled: each parameter additionally
/// loses `lr * weight_decay * param`.
pub fn adam_step(
    params: &mut ParamSet,
    grads: &ParamSet,
    state: &mut AdamState,
    lr: f64,
    weight_decay: f64,
) -> Result<()> {
    if !(lr > 0.0 && lr.is_finite()) {
        return Err(Error::InvalidArgument(format!("learning rate must be positive, got {lr}")));
    }
    if !(weight_decay >= 0.0 && weight_decay.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "weight decay must be nonnegative, got {weight_decay}"
        )));
    }
    params.expect_same_layout(grads)?;
    params.expect_same_layout(&state.m)?;
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - ADAM_BETA1.powi(t);
    let bc2 = 1.0 - ADAM_BETA2.powi(t);
    let names: Vec<String> = params.names().map(str::to_string).collect();
    for name in names {
        let g = grads.get(&name)?.data();
        let m = state.m.get_mut(&name)?.data_mut();
        for (mi, gi) in m.iter_mut().zip(g) {
            *mi = ADAM_BETA1 * *mi + (1.0 - ADAM_BETA1) * gi;
        }
        let v = state.v.get_mut(&name)?.data_mut();
        for (vi, gi) in v.iter_mut().zip(g) {
            *vi = ADAM_BETA2 * *vi + (1.0 - ADAM_BETA2) * gi * gi;
        }
        let (m, v) = (state.m.get(&name)?.data(), state.v.get(&name)?.data());
        let p = params.get_mut(&name)?.data_mut();
        for ((pi, mi), vi) in p.iter_mut().zip(m).zip(v) {
            let update = (mi / bc1) / ((vi / bc2).sqrt() + ADAM_EPS);
            *pi -= lr * update + lr * weight_decay * *pi;
        }
    }
    Ok(())
}

/// `lr0 * gamma^epoch`.
pub fn lr_schedule(epoch: usize, lr0: f64, gamma: f64) -> f64 {
    lr0 * gamma.powi(epoch as i32)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffcore::Tensor;

    fn scalar(v: f64) -> ParamSet {
        let mut p = ParamSet::new();
        p.insert("w", Tensor::vector(vec![v]).unwrap()).unwrap();
        p
    }

    #[test]
    fn zero_gradient_is_a_fixed_point() {
        let mut p = scalar(0.7);
        let g = scalar(0.0);
        let mut s = AdamState::new(&p);
        for _ in 0..5 {
            adam_step(&mut p, &g, &mut s, 1e-3, 0.0).unwrap();
        }
        assert_eq!(p.get("w").unwrap().data()[0], 0.7);
    }

    #[test]
    fn matches_hand_recursion() {
        // constant gradient 1: m_t = 1 - 0.9^t, v_t = 1 - 0.999^t, so the
        // bias-corrected ratio is 1 / (1 + eps) every step
        let lr = 0.01;
        let mut p = scalar(1.0);
        let g = scalar(1.0);
        let mut s = AdamState::new(&p);
        let mut expected = 1.0;
        let (mut m, mut v) = (0.0f64, 0.0f64);
        for t in 1..=3 {
            adam_step(&mut p, &g, &mut s, lr, 0.0).unwrap();
            m = 0.9 * m + 0.1;
            v = 0.999 * v + 0.001;
            let mhat = m / (1.0 - 0.9f64.powi(t));
            let vhat = v / (1.0 - 0.999f64.powi(t));
            expected -= lr * mhat / (vhat.sqrt() + 1e-8);
        }
        let got = p.get("w").unwrap().data()[0];
        assert!((got - expected).abs() < 1e-15, "{got} vs {expected}");
        assert!((got - (1.0 - 3.0 * lr / (1.0 + 1e-8))).abs() < 1e-12);
    }

    #[test]
    fn decay_only_shrinks_geometrically() {
        let mut p = scalar(1.0);
        let g = scalar(0.0);
        let mut s = AdamState::new(&p);
        adam_step(&mut p, &g, &mut s, 1e-4, 2e-4).unwrap();
        assert_eq!(p.get("w").unwrap().data()[0], 1.0 - 2e-8);
        adam_step(&mut p, &g, &mut s, 1e-4, 2e-4).unwrap();
        let expect = (1.0 - 2e-8) * (1.0 - 2e-8);
        assert!((p.get("w").unwrap().data()[0] - expect).abs() < 1e-16);
    }

    #[test]
    fn shape_mismatch_is_an_error() {
        let mut p = scalar(1.0);
        let mut g = ParamSet::new();
        g.insert("w", Tensor::vector(vec![1.0, 2.0]).unwrap()).unwrap();
        let mut s = AdamState::new(&p);
        assert!(adam_step(&mut p, &g, &mut s, 1e-3, 0.0).is_err());
        assert!(adam_step(&mut p, &scalar(1.0), &mut s, 0.0, 0.0).is_err());
    }

    #[test]
    fn schedule_examples() {
        assert_eq!(lr_schedule(0, 1e-4, 0.99), 1e-4);
        let v = lr_schedule(100, 1e-4, 0.99);
        assert!((v - 3.660323e-5).abs() < 1e-10, "{v}");
        assert_eq!(lr_schedule(37, 2e-3, 1.0), 2e-3);
    }
}
