//! Adam with linear learning-rate warmup over named parameters.

use crate::nn::ParamSet;
use ndarray::ArrayD;
use std::collections::BTreeMap;

pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub warmup_steps: usize,
    step: usize,
    m: BTreeMap<String, ArrayD<f64>>,
    v: BTreeMap<String, ArrayD<f64>>,
}

impl Adam {
    pub fn new(lr: f64, warmup_steps: usize) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            warmup_steps,
            step: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    /// Linear warmup, then constant: `lr * min(1, step / warmup_steps)`
    /// with 1-based step numbering.
    pub fn effective_lr(&self, step_1based: usize) -> f64 {
        if self.warmup_steps == 0 {
            return self.lr;
        }
        self.lr * (step_1based as f64 / self.warmup_steps as f64).min(1.0)
    }

    pub fn steps_taken(&self) -> usize {
        self.step
    }

    /// Apply one update with the given gradients; only parameters for which
    /// `trainable(name)' holds are touched.
    pub fn step(
        &mut self,
        params: &mut ParamSet,
        grads: &BTreeMap<String, ArrayD<f64>>,
        trainable: &dyn Fn(&str) -> bool,
    ) {
        self.step += 1;
        let lr_t = self.effective_lr(self.step);
        let b1 = self.beta1;
        let b2 = self.beta2;
        let bc1 = 1.0 - b1.powi(self.step as i32);
        let bc2 = 1.0 - b2.powi(self.step as i32);
        for (name, g) in grads {
            if !trainable(name) {
                continue;
            }
            let p = params.get_mut(name);
            let m = self
                .m
                .entry(name.clone())
                .or_insert_with(|| ArrayD::zeros(p.raw_dim()));
            let v = self
                .v
                .entry(name.clone())
                .or_insert_with(|| ArrayD::zeros(p.raw_dim()));
            let (ps, ms, vs, gs) = (
                p.as_slice_mut().unwrap(),
                m.as_slice_mut().unwrap(),
                v.as_slice_mut().unwrap(),
                g.as_slice().unwrap(),
            );
            for i in 0..ps.len() {
                ms[i] = b1 * ms[i] + (1.0 - b1) * gs[i];
                vs[i] = b2 * vs[i] + (1.0 - b2) * gs[i] * gs[i];
                let mhat = ms[i] / bc1;
                let vhat = vs[i] / bc2;
                ps[i] -= lr_t * mhat / (vhat.sqrt() + self.eps);
            }
        }
    }
}

/// Merge-accumulate gradient maps (used for gradient accumulation across
/// micro-batches): `into += from * scale`.
pub fn accumulate_grads(
    into: &mut BTreeMap<String, ArrayD<f64>>,
    from: &BTreeMap<String, ArrayD<f64>>,
    scale: f64,
) {
    for (name, g) in from {
        match into.get_mut(name) {
            Some(acc) => *acc += &g.mapv(|x| x * scale),
            None => {
                into.insert(name.clone(), g.mapv(|x| x * scale));
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::IxDyn;

    #[test]
    fn warmup_schedule_is_linear_then_flat() {
        let adam = Adam::new(1e-3, 500);
        for s in [1usize, 100, 250, 499] {
            let want = 1e-3 * s as f64 / 500.0;
            assert!((adam.effective_lr(s) - want).abs() < 1e-12);
        }
        assert!((adam.effective_lr(500) - 1e-3).abs() < 1e-18);
        assert!((adam.effective_lr(10_000) - 1e-3).abs() < 1e-18);
    }

    #[test]
    fn adam_descends_a_quadratic_and_respects_freezing() {
        let mut params = ParamSet::new();
        params.insert("free.x", ArrayD::from_elem(IxDyn(&[2]), 3.0));
        params.insert("frozen.x", ArrayD::from_elem(IxDyn(&[2]), 3.0));
        let mut adam = Adam::new(0.05, 0);
        for _ in 0..200 {
            let mut grads = BTreeMap::new();
            // d/dx of 0.5 x^2 = x, for both namespaces
            grads.insert("free.x".to_string(), params.get("free.x").clone());
            grads.insert("frozen.x".to_string(), params.get("frozen.x").clone());
            adam.step(&mut params, &grads, &|n| n.starts_with("free."));
        }
        assert!(params.get("free.x")[[0]].abs() < 0.05, "free param converged");
        assert_eq!(params.get("frozen.x")[[0]], 3.0, "frozen param untouched");
    }

    #[test]
    fn accumulate_scales_and_sums() {
        let mut acc = BTreeMap::new();
        let mut g1 = BTreeMap::new();
        g1.insert("w".to_string(), ArrayD::from_elem(IxDyn(&[2]), 1.0));
        accumulate_grads(&mut acc, &g1, 0.5);
        accumulate_grads(&mut acc, &g1, 0.5);
        assert_eq!(acc["w"][[0]], 1.0);
    }
}
