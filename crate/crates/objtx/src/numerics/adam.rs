//! Adam with decoupled weight decay and bias correction.

use crate::error::{Error, Result};
use crate::numerics::graph::Gradients;
use crate::numerics::registry::ParamRegistry;
use crate::numerics::scalar::Scalar;
use crate::numerics::tensor::Tensor;

/// Optimizer state: first/second moment per parameter plus the step count.
/// Update math runs in f64 regardless of the parameter dtype.
#[derive(Clone, Debug)]
pub struct AdamState<S> {
    step: u64,
    m: Vec<Tensor<S>>,
    v: Vec<Tensor<S>>,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Decoupled decay coefficient; applied as `p -= lr * wd * p` before the
    /// moment update, and only to parameters flagged `decay`.
    pub weight_decay: f64,
}

impl<S: Scalar> AdamState<S> {
    pub fn new(registry: &ParamRegistry<S>, weight_decay: f64) -> Result<Self> {
        if weight_decay < 0.0 {
            return Err(Error::Config(format!(
                "weight_decay must be >= 0, got {weight_decay}"
            )));
        }
        let m = registry
            .iter()
            .map(|(_, e)| Tensor::zeros(e.value.shape()))
            .collect::<Result<Vec<_>>>()?;
        let v = m.clone();
        Ok(AdamState {
            step: 0,
            m,
            v,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
        })
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// One update over every parameter that received a gradient. Parameters
    /// with `None` gradient are untouched (no decay, no moment update).
    pub fn step(
        &mut self,
        registry: &mut ParamRegistry<S>,
        grads: &Gradients<S>,
        lr: f64,
    ) -> Result<()> {
        self.step_filtered(registry, grads, lr, None)
    }

    /// Like [`Self::step`] but restricted to parameters whose index is
    /// flagged true in `trainable` (used to freeze everything but one head).
    pub fn step_filtered(
        &mut self,
        registry: &mut ParamRegistry<S>,
        grads: &Gradients<S>,
        lr: f64,
        trainable: Option<&[bool]>,
    ) -> Result<()> {
        if grads.len() != registry.len() {
            return Err(Error::Usage(format!(
                "gradient vector covers {} params, registry has {}",
                grads.len(),
                registry.len()
            )));
        }
        if let Some(t) = trainable {
            if t.len() != registry.len() {
                return Err(Error::Usage(format!(
                    "trainable mask covers {} params, registry has {}",
                    t.len(),
                    registry.len()
                )));
            }
        }
        if !lr.is_finite() || lr < 0.0 {
            return Err(Error::Config(format!("learning rate {lr} invalid")));
        }
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);

        for i in 0..registry.len() {
            if let Some(tr) = trainable {
                if !tr[i] {
                    continue;
                }
            }
            let Some(grad) = grads[i].as_ref() else {
                continue;
            };
            let entry = registry.get_mut(crate::numerics::registry::ParamId(i));
            if grad.shape() != entry.value.shape() {
                return Err(Error::Shape(format!(
                    "gradient shape {:?} does not match parameter {:?} of {:?}",
                    grad.shape(),
                    entry.name,
                    entry.value.shape()
                )));
            }
            let decay = if entry.decay { self.weight_decay } else { 0.0 };
            let p = entry.value.data_mut();
            let m = self.m[i].data_mut();
            let v = self.v[i].data_mut();
            for e in 0..p.len() {
                let g = grad.data()[e].to_f64();
                let mut pe = p[e].to_f64();
                if decay != 0.0 {
                    pe -= lr * decay * pe;
                }
                let me = self.beta1 * m[e].to_f64() + (1.0 - self.beta1) * g;
                let ve = self.beta2 * v[e].to_f64() + (1.0 - self.beta2) * g * g;
                let mhat = me / bc1;
                let vhat = ve / bc2;
                pe -= lr * mhat / (vhat.sqrt() + self.eps);
                p[e] = S::from_f64(pe);
                m[e] = S::from_f64(me);
                v[e] = S::from_f64(ve);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::registry::ParamId;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    fn one_param(value: f64, decay: bool) -> (ParamRegistry<f64>, ParamId) {
        let mut reg = ParamRegistry::new();
        let id = reg.register("p", Tensor::scalar(value), decay).unwrap();
        (reg, id)
    }

    #[test]
    fn first_step_moves_by_lr_times_sign_of_gradient() {
        // With bias correction, step 1 gives delta = -lr * g / (|g| + eps),
        // i.e. almost exactly -lr * sign(g).
        let (mut reg, id) = one_param(1.0, false);
        let mut adam = AdamState::new(&reg, 0.0).unwrap();
        let grads = vec![Some(Tensor::scalar(0.04))];
        adam.step(&mut reg, &grads, 0.001).unwrap();
        let got = reg.value(id).data()[0];
        let want = 1.0 - 0.001 * 0.04 / (0.04 + 1e-8);
        assert!(close(got, want, 1e-15));
    }

    #[test]
    fn zero_gradient_with_decay_only_scales_parameter() {
        let (mut reg, id) = one_param(2.0, true);
        let mut adam = AdamState::new(&reg, 0.01).unwrap();
        let grads = vec![Some(Tensor::scalar(0.0))];
        adam.step(&mut reg, &grads, 0.1).unwrap();
        // decay first: p = 2 * (1 - 0.1 * 0.01); zero grad leaves moments 0
        assert!(close(reg.value(id).data()[0], 2.0 * (1.0 - 0.001), 1e-12));
    }

    #[test]
    fn decay_flag_false_means_no_decay() {
        let (mut reg, id) = one_param(2.0, false);
        let mut adam = AdamState::new(&reg, 0.01).unwrap();
        let grads = vec![Some(Tensor::scalar(0.0))];
        adam.step(&mut reg, &grads, 0.1).unwrap();
        assert!(close(reg.value(id).data()[0], 2.0, 1e-15));
    }

    #[test]
    fn none_gradient_leaves_parameter_and_moments_untouched() {
        let (mut reg, id) = one_param(3.0, true);
        let mut adam = AdamState::new(&reg, 0.5).unwrap();
        let grads = vec![None];
        adam.step(&mut reg, &grads, 0.1).unwrap();
        assert_eq!(reg.value(id).data()[0], 3.0);
        assert_eq!(adam.step_count(), 1);
    }

    #[test]
    fn converges_on_a_quadratic() {
        // minimize (p - 3)^2; gradient 2(p - 3)
        let (mut reg, id) = one_param(0.0, false);
        let mut adam = AdamState::new(&reg, 0.0).unwrap();
        for _ in 0..2000 {
            let p = reg.value(id).data()[0];
            let grads = vec![Some(Tensor::scalar(2.0 * (p - 3.0)))];
            adam.step(&mut reg, &grads, 0.05).unwrap();
        }
        assert!(close(reg.value(id).data()[0], 3.0, 1e-3));
    }

    #[test]
    fn filtered_step_freezes_masked_parameters() {
        let mut reg = ParamRegistry::<f64>::new();
        reg.register("a", Tensor::scalar(1.0), false).unwrap();
        reg.register("b", Tensor::scalar(1.0), false).unwrap();
        let mut adam = AdamState::new(&reg, 0.0).unwrap();
        let grads = vec![Some(Tensor::scalar(1.0)), Some(Tensor::scalar(1.0))];
        adam.step_filtered(&mut reg, &grads, 0.01, Some(&[false, true]))
            .unwrap();
        assert_eq!(reg.value(ParamId(0)).data()[0], 1.0);
        assert!(reg.value(ParamId(1)).data()[0] < 1.0);
    }

    #[test]
    fn mismatched_grad_vector_is_a_usage_error() {
        let (mut reg, _) = one_param(1.0, false);
        let mut adam = AdamState::new(&reg, 0.0).unwrap();
        let grads: Gradients<f64> = vec![];
        assert!(matches!(
            adam.step(&mut reg, &grads, 0.01),
            Err(Error::Usage(_))
        ));
    }
}
