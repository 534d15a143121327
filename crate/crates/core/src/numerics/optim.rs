//! AdamW with decoupled weight decay and the one-cycle LR schedule.

use crate::checkpoint::ParamSet;
use crate::numerics::{Real, Tensor};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-4,
        }
    }
}

/// AdamW: decoupled weight decay scales the parameter itself, never the
/// moment accumulators; moments use bias correction.
pub struct AdamW<T> {
    cfg: AdamWConfig,
    m: Vec<Tensor<T>>,
    v: Vec<Tensor<T>>,
    step: u64,
}

impl<T: Real> AdamW<T> {
    pub fn new(cfg: AdamWConfig) -> Self {
        AdamW {
            cfg,
            m: Vec::new(),
            v: Vec::new(),
            step: 0,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// One update over all parameters. `grads[i]` pairs with parameter `i` of
    /// the set; parameters without a gradient are left untouched.
    pub fn step(
        &mut self,
        params: &mut ParamSet<T>,
        grads: &[Option<Tensor<T>>],
        lr: f64,
    ) -> Result<()> {
        if lr <= 0.0 {
            return Err(Error::arg(format!("learning rate must be positive, got {lr}")));
        }
        if grads.len() != params.len() {
            return Err(Error::dim(format!(
                "{} gradients for {} parameters",
                grads.len(),
                params.len()
            )));
        }
        if self.m.is_empty() {
            for i in 0..params.len() {
                let shape = params.tensor_at(i).shape().to_vec();
                self.m.push(Tensor::zeros(shape.clone()));
                self.v.push(Tensor::zeros(shape));
            }
        }
        self.step += 1;
        let b1 = T::from_f64(self.cfg.beta1);
        let b2 = T::from_f64(self.cfg.beta2);
        let one_m_b1 = T::from_f64(1.0 - self.cfg.beta1);
        let one_m_b2 = T::from_f64(1.0 - self.cfg.beta2);
        let bc1 = T::from_f64(1.0 - self.cfg.beta1.powi(self.step as i32));
        let bc2 = T::from_f64(1.0 - self.cfg.beta2.powi(self.step as i32));
        let eps = T::from_f64(self.cfg.eps);
        let lr_t = T::from_f64(lr);
        let decay = T::from_f64(1.0 - lr * self.cfg.weight_decay);
        for i in 0..params.len() {
            let Some(g) = grads[i].as_ref() else { continue };
            if g.shape() != params.tensor_at(i).shape() {
                return Err(Error::dim(format!(
                    "gradient shape {:?} does not match parameter {:?} for {}",
                    g.shape(),
                    params.tensor_at(i).shape(),
                    params.name_at(i)
                )));
            }
            if !g.all_finite() {
                return Err(Error::train(format!(
                    "non-finite gradient for parameter {:?}",
                    params.name_at(i)
                )));
            }
            let mt = self.m[i].data_mut();
            let vt = self.v[i].data_mut();
            let pt = params.tensor_at_mut(i).data_mut();
            for (((p, &gv), m), v) in pt.iter_mut().zip(g.data()).zip(mt).zip(vt) {
                *p *= decay;
                *m = b1 * *m + one_m_b1 * gv;
                *v = b2 * *v + one_m_b2 * gv * gv;
                let mhat = *m / bc1;
                let vhat = *v / bc2;
                *p -= lr_t * mhat / (vhat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

/// One-cycle policy: linear warmup from max/25 to max over `warmup_steps`,
/// then cosine decay to max/1e4 at `total_steps`.
#[derive(Debug, Clone, Copy)]
pub struct LrSchedule {
    pub max_lr: f64,
    pub warmup_steps: u64,
    pub total_steps: u64,
}

const WARMUP_DIV: f64 = 25.0;
const FINAL_DIV: f64 = 1e4;

impl LrSchedule {
    pub fn new(max_lr: f64, warmup_steps: u64, total_steps: u64) -> Result<Self> {
        if max_lr <= 0.0 {
            return Err(Error::config(format!("max_lr must be positive, got {max_lr}")));
        }
        if warmup_steps == 0 || total_steps <= warmup_steps {
            return Err(Error::config(format!(
                "need 0 < warmup_steps < total_steps, got {warmup_steps}/{total_steps}"
            )));
        }
        Ok(LrSchedule {
            max_lr,
            warmup_steps,
            total_steps,
        })
    }

    pub fn lr(&self, step: u64) -> Result<f64> {
        if step > self.total_steps {
            return Err(Error::arg(format!(
                "step {step} beyond schedule total {}",
                self.total_steps
            )));
        }
        let start = self.max_lr / WARMUP_DIV;
        let end = self.max_lr / FINAL_DIV;
        if step <= self.warmup_steps {
            let t = step as f64 / self.warmup_steps as f64;
            Ok(start + (self.max_lr - start) * t)
        } else {
            let t = (step - self.warmup_steps) as f64 / (self.total_steps - self.warmup_steps) as f64;
            Ok(end + (self.max_lr - end) * 0.5 * (1.0 + (std::f64::consts::PI * t).cos()))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single_param(v: f32) -> ParamSet<f32> {
        let mut p = ParamSet::new();
        p.add("w", Tensor::scalar(v)).unwrap();
        p
    }

    #[test]
    fn zero_grad_zero_decay_leaves_params() {
        let mut params = single_param(0.7);
        let mut opt = AdamW::new(AdamWConfig {
            weight_decay: 0.0,
            ..AdamWConfig::default()
        });
        let g = Some(Tensor::scalar(0.0f32));
        for _ in 0..5 {
            opt.step(&mut params, &[g.clone()], 0.1).unwrap();
        }
        assert_eq!(params.get("w").unwrap().item().unwrap(), 0.7);
    }

    #[test]
    fn single_step_moves_by_about_lr() {
        // bias correction makes mhat/sqrt(vhat) = 1 on the first step
        let mut params = single_param(1.0);
        let mut opt = AdamW::new(AdamWConfig {
            weight_decay: 0.0,
            ..AdamWConfig::default()
        });
        opt.step(&mut params, &[Some(Tensor::scalar(1.0f32))], 0.1)
            .unwrap();
        let w = params.get("w").unwrap().item().unwrap();
        assert!((w - 0.9).abs() < 1e-4, "got {w}");
    }

    #[test]
    fn decay_only_is_geometric() {
        let lr = 0.05;
        let wd = 0.01;
        let mut params = single_param(2.0);
        let mut opt = AdamW::new(AdamWConfig {
            weight_decay: wd,
            ..AdamWConfig::default()
        });
        let mut expect = 2.0f64;
        for _ in 0..10 {
            opt.step(&mut params, &[Some(Tensor::scalar(0.0f32))], lr)
                .unwrap();
            expect *= 1.0 - lr * wd;
        }
        let w = params.get("w").unwrap().item().unwrap() as f64;
        assert!((w - expect).abs() < 1e-6, "got {w}, want {expect}");
    }

    #[test]
    fn nan_gradient_names_the_parameter() {
        let mut params = single_param(1.0);
        let mut opt = AdamW::new(AdamWConfig::default());
        let err = opt
            .step(&mut params, &[Some(Tensor::scalar(f32::NAN))], 0.1)
            .unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("\"w\""), "message should name the parameter: {msg}");
    }

    #[test]
    fn step_counter_increases_by_one() {
        let mut params = single_param(1.0);
        let mut opt = AdamW::new(AdamWConfig::default());
        for want in 1..=4u64 {
            opt.step(&mut params, &[Some(Tensor::scalar(0.1f32))], 0.01)
                .unwrap();
            assert_eq!(opt.step_count(), want);
        }
    }

    #[test]
    fn one_cycle_named_points() {
        let sched = LrSchedule::new(1e-4, 700, 2000).unwrap();
        assert!((sched.lr(700).unwrap() - 1e-4).abs() < 1e-12);
        assert!((sched.lr(0).unwrap() - 1e-4 / 25.0).abs() < 1e-12);
        assert!((sched.lr(2000).unwrap() - 1e-4 / 1e4).abs() < 1e-12);
        assert!(sched.lr(2001).is_err());
    }

    #[test]
    fn one_cycle_positive_and_non_increasing_after_warmup() {
        let sched = LrSchedule::new(3e-3, 10, 200).unwrap();
        let mut prev = f64::INFINITY;
        for step in 10..=200 {
            let lr = sched.lr(step).unwrap();
            assert!(lr > 0.0);
            assert!(lr <= prev + 1e-15);
            prev = lr;
        }
    }
}
