//! AdamW with decoupled weight decay and a cosine learning-rate schedule.

use std::f64::consts::PI;

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tape::Gradients;
use crate::tensor::Tensor;

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

#[derive(Clone, Debug)]
pub struct AdamW {
    lr: f64,
    weight_decay: f64,
    horizon: u64,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

/// `base * 0.5 * (1 + cos(pi * step / horizon))`.
pub fn cosine_lr(base: f64, step: u64, horizon: u64) -> f64 {
    base * 0.5 * (1.0 + (PI * step as f64 / horizon as f64).cos())
}

impl AdamW {
    pub fn new(store: &ParamStore, lr: f64, weight_decay: f64, horizon: u64) -> Self {
        let zeros: Vec<Vec<f64>> = store.iter().map(|(_, t)| vec![0.0; t.numel()]).collect();
        AdamW {
            lr,
            weight_decay,
            horizon: horizon.max(1),
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    /// Number of updates applied so far.
    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// Learning rate the next update will use.
    pub fn current_lr(&self) -> f64 {
        cosine_lr(self.lr, self.step.min(self.horizon), self.horizon)
    }

    /// Applies one update to the parameters of `store`. Parameters the loss
    /// never reached, and gradients for other stores, are ignored. A
    /// non-finite gradient aborts before anything is written.
    pub fn step(&mut self, store: &mut ParamStore, grads: &Gradients) -> Result<()> {
        if self.step >= self.horizon {
            return Err(Error::invalid(format!(
                "optimizer step {} beyond schedule horizon {}",
                self.step, self.horizon
            )));
        }
        for (id, g) in grads.params().filter(|(id, _)| store.owns(*id)) {
            if g.iter().any(|v| !v.is_finite()) {
                return Err(Error::NanGradient(store.name(id).to_string()));
            }
        }
        let lr = self.current_lr();
        let t = (self.step + 1) as i32;
        let bc1 = 1.0 - BETA1.powi(t);
        let bc2 = 1.0 - BETA2.powi(t);
        let owned: Vec<_> = grads.params().filter(|(id, _)| store.owns(*id)).collect();
        for (id, g) in owned {
            let i = id.index();
            let p = store.get(id);
            let mut w = p.to_vec();
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for j in 0..w.len() {
                m[j] = BETA1 * m[j] + (1.0 - BETA1) * g[j];
                v[j] = BETA2 * v[j] + (1.0 - BETA2) * g[j] * g[j];
                let mhat = m[j] / bc1;
                let vhat = v[j] / bc2;
                w[j] *= 1.0 - lr * self.weight_decay;
                w[j] -= lr * mhat / (vhat.sqrt() + ADAM_EPS);
            }
            let shape = p.shape().to_vec();
            store.set(id, Tensor::new(shape, w)?);
        }
        self.step += 1;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::Graph;
    use crate::tape::Tape;

    fn scalar_step(store: &mut ParamStore, opt: &mut AdamW, grad: f64) {
        let id = store.id("w").unwrap();
        let mut tape = Tape::new();
        let w = tape.param(store, id);
        let loss = tape.scale(&w, grad).unwrap();
        let loss = tape.sum(&loss).unwrap();
        let g = tape.backward(loss).unwrap();
        opt.step(store, &g).unwrap();
    }

    #[test]
    fn midpoint_uses_half_rate() {
        assert!((cosine_lr(0.2, 50, 100) - 0.1).abs() < 1e-15);
        assert_eq!(cosine_lr(0.2, 0, 100), 0.2);
    }

    #[test]
    fn zero_gradient_zero_decay_is_noop() {
        let mut store = ParamStore::new();
        store.add("w", Tensor::vector(vec![0.5]));
        let mut opt = AdamW::new(&store, 0.1, 0.0, 10);
        scalar_step(&mut store, &mut opt, 0.0);
        assert_eq!(store.by_name("w").unwrap().data(), &[0.5]);
    }

    #[test]
    fn two_steps_match_hand_recurrence() {
        let (lr, wd, horizon) = (0.01, 0.1, 10u64);
        let mut store = ParamStore::new();
        store.add("w", Tensor::vector(vec![0.3]));
        let mut opt = AdamW::new(&store, lr, wd, horizon);
        scalar_step(&mut store, &mut opt, 1.0);
        scalar_step(&mut store, &mut opt, 1.0);

        let (mut w, mut m, mut v) = (0.3f64, 0.0f64, 0.0f64);
        for step in 0..2u64 {
            let rate = lr * 0.5 * (1.0 + (std::f64::consts::PI * step as f64 / 10.0).cos());
            m = 0.9 * m + 0.1;
            v = 0.999 * v + 0.001;
            let mh = m / (1.0 - 0.9f64.powi(step as i32 + 1));
            let vh = v / (1.0 - 0.999f64.powi(step as i32 + 1));
            w -= rate * wd * w;
            w -= rate * mh / (vh.sqrt() + 1e-8);
        }
        assert!((store.by_name("w").unwrap().data()[0] - w).abs() < 1e-12);
    }

    #[test]
    fn nan_gradient_names_parameter() {
        let mut store = ParamStore::new();
        store.add("head.w", Tensor::vector(vec![0.5]));
        let mut opt = AdamW::new(&store, 0.1, 0.0, 10);
        let mut tape = Tape::new();
        let id = store.id("head.w").unwrap();
        let w = tape.param(&store, id);
        let loss = tape.sum(&w).unwrap();
        let g = tape.backward(loss).unwrap();
        let bad = g.with_param(id, vec![f64::NAN]);
        match opt.step(&mut store, &bad) {
            Err(Error::NanGradient(name)) => assert_eq!(name, "head.w"),
            other => panic!("unexpected {other:?}"),
        }
    }
}
