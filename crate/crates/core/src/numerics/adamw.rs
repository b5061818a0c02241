use serde::{Deserialize, Serialize};

use super::tensor::{Real, Tensor};
use crate::error::{LvrError, Result};

/// A named tensor tagged trainable or frozen.
#[derive(Clone, Debug, PartialEq)]
pub struct Param<S> {
    pub name: String,
    pub tensor: Tensor<S>,
    pub trainable: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig { lr: 1e-5, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.0 }
    }
}

#[derive(Clone, Debug)]
pub struct AdamWState<S> {
    pub config: AdamWConfig,
    first: Vec<Vec<S>>,
    second: Vec<Vec<S>>,
    step: u64,
}

impl<S: Real> AdamWState<S> {
    pub fn new(config: AdamWConfig, params: &[Param<S>]) -> Self {
        let zeros = |p: &Param<S>| if p.trainable { vec![S::zero(); p.tensor.len()] } else { Vec::new() };
        AdamWState {
            config,
            first: params.iter().map(zeros).collect(),
            second: params.iter().map(zeros).collect(),
            step: 0,
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// One decoupled-weight-decay Adam update. `grads[i]` belongs to `params[i]`;
    /// frozen tensors are skipped and may have `None`.
    pub fn step(&mut self, params: &mut [Param<S>], grads: &[Option<Vec<S>>]) -> Result<()> {
        self.step_with_lr(params, grads, self.config.lr)
    }

    pub fn step_with_lr(&mut self, params: &mut [Param<S>], grads: &[Option<Vec<S>>], lr: f64) -> Result<()> {
        if params.len() != self.first.len() || grads.len() != params.len() {
            return Err(LvrError::Contract("optimizer state does not match parameter list".into()));
        }
        for (p, g) in params.iter().zip(grads) {
            if !p.trainable {
                continue;
            }
            match g {
                None => return Err(LvrError::Contract(format!("missing gradient for trainable tensor {}", p.name))),
                Some(g) if g.len() != p.tensor.len() => {
                    return Err(LvrError::dim("adamw", format!("{}: grad len {} vs {}", p.name, g.len(), p.tensor.len())))
                }
                Some(g) if !g.iter().all(|x| x.is_finite()) => {
                    return Err(LvrError::Numeric(format!("non-finite gradient of {}", p.name)))
                }
                _ => {}
            }
        }
        self.step += 1;
        let c = &self.config;
        let t = self.step as i32;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        let (b1, b2) = (S::of(c.beta1), S::of(c.beta2));
        let (lr_s, eps, decay) = (S::of(lr), S::of(c.eps), S::of(1.0 - lr * c.weight_decay));
        let (bc1, bc2) = (S::of(bc1), S::of(bc2));
        for (i, p) in params.iter_mut().enumerate() {
            if !p.trainable {
                continue;
            }
            let g = grads[i].as_ref().expect("checked above");
            let (m, v) = (&mut self.first[i], &mut self.second[i]);
            for j in 0..g.len() {
                m[j] = b1 * m[j] + (S::one() - b1) * g[j];
                v[j] = b2 * v[j] + (S::one() - b2) * g[j] * g[j];
                let mhat = m[j] / bc1;
                let vhat = v[j] / bc2;
                let w = &mut p.tensor.data[j];
                *w = *w * decay - lr_s * mhat / (vhat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn params() -> Vec<Param<f64>> {
        vec![
            Param { name: "w".into(), tensor: Tensor::new(vec![2], vec![1.0, -1.0]).unwrap(), trainable: true },
            Param { name: "frozen".into(), tensor: Tensor::new(vec![1], vec![3.0]).unwrap(), trainable: false },
        ]
    }

    #[test]
    fn first_step_moves_by_lr_against_gradient_sign() {
        let mut p = params();
        let cfg = AdamWConfig { lr: 0.1, ..Default::default() };
        let mut st = AdamWState::new(cfg, &p);
        st.step(&mut p, &[Some(vec![0.5, -2.0]), None]).unwrap();
        assert!((p[0].tensor.data[0] - 0.9).abs() < 1e-6);
        assert!((p[0].tensor.data[1] + 0.9).abs() < 1e-6);
        assert_eq!(p[1].tensor.data, vec![3.0]);
        assert_eq!(st.steps_taken(), 1);
    }

    #[test]
    fn missing_trainable_grad_is_a_contract_error() {
        let mut p = params();
        let mut st = AdamWState::new(AdamWConfig::default(), &p);
        let err = st.step(&mut p, &[None, None]).unwrap_err();
        assert!(matches!(err, LvrError::Contract(_)));
    }

    #[test]
    fn zero_gradient_without_decay_leaves_weights_untouched() {
        let mut p = params();
        let mut st = AdamWState::new(AdamWConfig::default(), &p);
        let before = p.clone();
        st.step(&mut p, &[Some(vec![0.0, 0.0]), None]).unwrap();
        assert_eq!(p, before);
    }

    #[test]
    fn weight_decay_is_decoupled() {
        let mut p = params();
        let cfg = AdamWConfig { lr: 0.1, weight_decay: 0.5, ..Default::default() };
        let mut st = AdamWState::new(cfg, &p);
        st.step(&mut p, &[Some(vec![0.0, 0.0]), None]).unwrap();
        assert!((p[0].tensor.data[0] - 0.95).abs() < 1e-12);
    }
}
