//! SGD and Adam over the named parameter registry. Frozen tensors are never
//! touched; non-finite gradients abort the step.

use std::collections::BTreeMap;

use super::forward::ParamGrads;
use super::EncoderParams;
use crate::autograd::Tensor;
use crate::error::{Error, Result};

pub struct Sgd {
    pub lr: f64,
}

impl Sgd {
    pub fn new(lr: f64) -> Self {
        Sgd { lr }
    }

    pub fn step(&self, params: &mut EncoderParams, grads: &ParamGrads) -> Result<()> {
        for (name, grad) in grads.iter() {
            if params.is_frozen(name) {
                continue;
            }
            if !grad.is_finite() {
                return Err(Error::NonFinite { op: format!("sgd grad {name}") });
            }
            let tensor = params
                .get_mut(name)
                .ok_or_else(|| Error::Shape(format!("gradient for unknown tensor {name}")))?;
            for (w, g) in tensor.data_mut().iter_mut().zip(grad.data()) {
                *w -= self.lr * g;
            }
        }
        Ok(())
    }
}

pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Linear warmup steps; deeper post-norm stacks need them to get off
    /// the positional-marginal plateau.
    pub warmup_steps: u64,
    t: u64,
    m: BTreeMap<String, Tensor>,
    v: BTreeMap<String, Tensor>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            warmup_steps: 0,
            t: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    pub fn with_warmup(lr: f64, warmup_steps: u64) -> Self {
        Adam {
            warmup_steps,
            ..Adam::new(lr)
        }
    }

    fn current_lr(&self) -> f64 {
        if self.warmup_steps > 0 && self.t < self.warmup_steps {
            self.lr * (self.t as f64 + 1.0) / self.warmup_steps as f64
        } else {
            self.lr
        }
    }

    pub fn step(&mut self, params: &mut EncoderParams, grads: &ParamGrads) -> Result<()> {
        let lr_t = self.current_lr();
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for (name, grad) in grads.iter() {
            if params.is_frozen(name) {
                continue;
            }
            if !grad.is_finite() {
                return Err(Error::NonFinite { op: format!("adam grad {name}") });
            }
            let tensor = params
                .get_mut(name)
                .ok_or_else(|| Error::Shape(format!("gradient for unknown tensor {name}")))?;
            let m = self
                .m
                .entry(name.to_string())
                .or_insert_with(|| Tensor::zeros(grad.shape().to_vec()));
            let v = self
                .v
                .entry(name.to_string())
                .or_insert_with(|| Tensor::zeros(grad.shape().to_vec()));
            for (((w, g), mi), vi) in tensor
                .data_mut()
                .iter_mut()
                .zip(grad.data())
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                *mi = self.beta1 * *mi + (1.0 - self.beta1) * g;
                *vi = self.beta2 * *vi + (1.0 - self.beta2) * g * g;
                let mhat = *mi / bc1;
                let vhat = *vi / bc2;
                *w -= lr_t * mhat / (vhat.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::EncoderConfig;

    fn tiny_params() -> EncoderParams {
        EncoderParams::init(
            EncoderConfig {
                n_layers: 1,
                n_heads: 1,
                head_dim: 2,
                ffn_dim: 4,
                vocab_size: 8,
                max_seq: 8,
                ..EncoderConfig::default()
            },
            0,
        )
        .unwrap()
    }

    fn grad_for(name: &str, value: f64, like: &Tensor) -> ParamGrads {
        let t = Tensor::new(like.shape().to_vec(), vec![value; like.numel()]);
        ParamGrads::from_named(name, t)
    }

    #[test]
    fn sgd_moves_by_lr_times_grad() {
        let mut params = tiny_params();
        let before = params.get("span.start.b").unwrap().data()[0];
        let grads = grad_for("span.start.b", 2.0, params.get("span.start.b").unwrap());
        Sgd::new(0.1).step(&mut params, &grads).unwrap();
        let after = params.get("span.start.b").unwrap().data()[0];
        assert!((after - (before - 0.2)).abs() < 1e-15);
    }

    #[test]
    fn zero_lr_changes_nothing() {
        let mut params = tiny_params();
        let before = params.get("mlm.b").unwrap().clone();
        let grads = grad_for("mlm.b", 1.5, &before);
        Sgd::new(0.0).step(&mut params, &grads).unwrap();
        assert!(params.get("mlm.b").unwrap().bits_eq(&before));
    }

    #[test]
    fn adam_first_step_matches_closed_form() {
        // With m1 = (1-b1)g, v1 = (1-b2)g^2, the bias-corrected first step is
        // lr * g / (|g| + eps), i.e. lr * sign(g) up to eps.
        let mut params = tiny_params();
        let before = params.get("span.end.b").unwrap().data()[0];
        let grads = grad_for("span.end.b", 2.0, params.get("span.end.b").unwrap());
        let mut adam = Adam::new(0.01);
        adam.step(&mut params, &grads).unwrap();
        let after = params.get("span.end.b").unwrap().data()[0];
        let expected = before - 0.01 * 2.0 / (2.0 + 1e-8);
        assert!((after - expected).abs() < 1e-12, "{after} vs {expected}");
    }

    #[test]
    fn non_finite_grad_is_an_error() {
        let mut params = tiny_params();
        let grads = grad_for("span.end.b", f64::NAN, params.get("span.end.b").unwrap());
        assert!(matches!(
            Sgd::new(0.1).step(&mut params, &grads),
            Err(Error::NonFinite { .. })
        ));
    }

    #[test]
    fn frozen_tensors_are_untouched() {
        let mut params = tiny_params();
        params.set_frozen("mlm.b", true);
        let before = params.get("mlm.b").unwrap().clone();
        let grads = grad_for("mlm.b", 3.0, &before);
        let mut adam = Adam::new(0.1);
        adam.step(&mut params, &grads).unwrap();
        assert!(params.get("mlm.b").unwrap().bits_eq(&before));
    }
}
