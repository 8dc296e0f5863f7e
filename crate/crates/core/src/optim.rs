//! Adaptive-moment optimizer with decoupled weight decay.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::Params;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimizerConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub weight_decay: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            weight_decay: 0.01,
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        let betas_ok = (0.0..1.0).contains(&self.beta1) && (0.0..1.0).contains(&self.beta2);
        if !betas_ok || !(self.epsilon > 0.0) || !(self.weight_decay >= 0.0) {
            return Err(Error::invalid(format!("bad optimizer settings {self:?}")));
        }
        Ok(())
    }
}

/// First and second moments shaped like the parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamState<P> {
    pub m: P,
    pub v: P,
    pub step: u64,
}

impl<P: Params + Clone> AdamState<P> {
    pub fn new(params: &P) -> Self {
        let mut m = params.clone();
        m.zero();
        Self {
            v: m.clone(),
            m,
            step: 0,
        }
    }
}

/// `p <- p (1 - lr wd) - lr m_hat / (sqrt(v_hat) + eps)`
pub fn optimizer_step<P: Params>(
    params: &mut P,
    grads: &P,
    state: &mut AdamState<P>,
    lr: f64,
    cfg: &OptimizerConfig,
) -> Result<()> {
    if !(lr > 0.0) {
        return Err(Error::invalid("learning rate must be > 0"));
    }
    if !grads.is_finite() {
        return Err(Error::NonFinite("gradient".into()));
    }
    if grads.num_params() != params.num_params() {
        return Err(Error::shape("gradients and parameters differ in size"));
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    let decay = 1.0 - lr * cfg.weight_decay;
    let tensors = params
        .tensors_mut()
        .into_iter()
        .zip(grads.tensors())
        .zip(state.m.tensors_mut())
        .zip(state.v.tensors_mut());
    for (((p, g), m), v) in tensors {
        let it = p
            .as_mut_slice()
            .iter_mut()
            .zip(g.as_slice())
            .zip(m.as_mut_slice())
            .zip(v.as_mut_slice());
        for (((p, &g), m), v) in it {
            *m = cfg.beta1 * *m + (1.0 - cfg.beta1) * g;
            *v = cfg.beta2 * *v + (1.0 - cfg.beta2) * g * g;
            let update = (*m / bc1) / ((*v / bc2).sqrt() + cfg.epsilon);
            *p = *p * decay - lr * update;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numeric::Matrix;
    use proptest::prelude::*;

    #[derive(Debug, Clone, PartialEq)]
    struct Flat(Matrix);

    impl Params for Flat {
        fn tensors(&self) -> Vec<&Matrix> {
            vec![&self.0]
        }
        fn tensors_mut(&mut self) -> Vec<&mut Matrix> {
            vec![&mut self.0]
        }
    }

    fn flat(v: &[f64]) -> Flat {
        Flat(Matrix::from_vec(1, v.len(), v.to_vec()).unwrap())
    }

    #[test]
    fn zero_gradient_no_decay_is_identity() {
        let mut p = flat(&[1.0, -2.0, 3.5]);
        let before = p.clone();
        let mut s = AdamState::new(&p);
        let cfg = OptimizerConfig { weight_decay: 0.0, ..Default::default() };
        for _ in 0..10 {
            optimizer_step(&mut p, &flat(&[0.0; 3]), &mut s, 1e-3, &cfg).unwrap();
        }
        assert_eq!(p, before);
        assert_eq!(s.step, 10);
    }

    #[test]
    fn decoupled_decay_shrinks_geometrically() {
        let mut p = flat(&[2.0, -4.0]);
        let mut s = AdamState::new(&p);
        let cfg = OptimizerConfig { weight_decay: 0.1, ..Default::default() };
        let lr = 0.01;
        for step in 1..=5 {
            optimizer_step(&mut p, &flat(&[0.0, 0.0]), &mut s, lr, &cfg).unwrap();
            let f = (1.0 - lr * 0.1f64).powi(step);
            assert!((p.0.get(0, 0) - 2.0 * f).abs() < 1e-15);
            assert!((p.0.get(0, 1) + 4.0 * f).abs() < 1e-15);
        }
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut p = flat(&[0.0, 0.0]);
        let mut s = AdamState::new(&p);
        let cfg = OptimizerConfig { weight_decay: 0.0, ..Default::default() };
        optimizer_step(&mut p, &flat(&[3.0, -1e-4]), &mut s, 0.1, &cfg).unwrap();
        assert!((p.0.get(0, 0) + 0.1).abs() < 1e-9);
        assert!((p.0.get(0, 1) - 0.1).abs() < 1e-4);
    }

    #[test]
    fn rejects_non_finite() {
        let mut p = flat(&[0.0]);
        let mut s = AdamState::new(&p);
        let r = optimizer_step(&mut p, &flat(&[f64::NAN]), &mut s, 1e-3, &OptimizerConfig::default());
        assert!(matches!(r, Err(Error::NonFinite(_))));
        assert!(OptimizerConfig { beta1: 1.0, ..Default::default() }.validate().is_err());
    }

    proptest! {
        #[test]
        fn constant_gradient_step_bounded(g in -100.0f64..100.0, steps in 1usize..200) {
            let lr = 1e-3;
            let mut p = flat(&[0.0]);
            let mut s = AdamState::new(&p);
            let cfg = OptimizerConfig { weight_decay: 0.0, ..Default::default() };
            let mut prev = 0.0;
            for _ in 0..steps {
                optimizer_step(&mut p, &flat(&[g]), &mut s, lr, &cfg).unwrap();
                let now = p.0.get(0, 0);
                prop_assert!((now - prev).abs() <= lr * (1.0 + 1e-9));
                prev = now;
            }
        }
    }
}
