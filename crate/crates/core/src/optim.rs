//! Adam optimizer and the halving learning-rate schedule.

use crate::autodiff::Arr;
use crate::params::ParamStore;
use std::collections::BTreeMap;

/// Adam with bias correction. Moment state is keyed by parameter name and
/// created lazily on the first step that touches a parameter.
#[derive(Debug, Clone)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    m: BTreeMap<String, Arr>,
    v: BTreeMap<String, Arr>,
    t: u64,
}

impl Adam {
    pub fn new(beta1: f64, beta2: f64) -> Self {
        Self {
            beta1,
            beta2,
            epsilon: 1e-8,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
            t: 0,
        }
    }

    /// Apply one update. Parameters without a gradient entry are untouched.
    pub fn step(&mut self, params: &mut ParamStore, grads: &BTreeMap<String, Arr>, lr: f64) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for (name, g) in grads {
            let p = params.get_mut(name);
            let m = self
                .m
                .entry(name.clone())
                .or_insert_with(|| Arr::zeros(g.raw_dim()));
            let v = self
                .v
                .entry(name.clone())
                .or_insert_with(|| Arr::zeros(g.raw_dim()));
            m.zip_mut_with(g, |m, &g| *m = self.beta1 * *m + (1.0 - self.beta1) * g);
            v.zip_mut_with(g, |v, &g| *v = self.beta2 * *v + (1.0 - self.beta2) * g * g);
            ndarray::Zip::from(p)
                .and(&*m)
                .and(&*v)
                .for_each(|p, &m, &v| {
                    let mh = m / bc1;
                    let vh = v / bc2;
                    *p -= lr * mh / (vh.sqrt() + self.epsilon);
                });
        }
    }
}

/// `lr(t) = base * 0.5^(t / interval)` with integer division.
pub fn lr_at(iteration: usize, base: f64, halving_interval: usize) -> f64 {
    base * 0.5f64.powi((iteration / halving_interval.max(1)) as i32)
}

/// Scale gradients in place so their global L2 norm is at most `max_norm`.
/// Returns the pre-clip norm.
pub fn clip_grad_norm(grads: &mut BTreeMap<String, Arr>, max_norm: f64) -> f64 {
    let total: f64 = grads
        .values()
        .map(|g| g.iter().map(|x| x * x).sum::<f64>())
        .sum::<f64>()
        .sqrt();
    if total > max_norm && total > 0.0 {
        let scale = max_norm / total;
        for g in grads.values_mut() {
            g.mapv_inplace(|x| x * scale);
        }
    }
    total
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::IxDyn;

    #[test]
    fn zero_gradient_leaves_weights_unchanged() {
        let mut params = ParamStore::new();
        params.init_uniform("w", &[3, 2], 3, 0);
        let before = params.get("w").clone();
        let mut opt = Adam::new(0.9, 0.999);
        let mut grads = BTreeMap::new();
        grads.insert("w".to_string(), Arr::zeros(IxDyn(&[3, 2])));
        for _ in 0..5 {
            opt.step(&mut params, &grads, 0.1);
        }
        assert_eq!(&before, params.get("w"));
    }

    #[test]
    fn schedule_halves_at_interval() {
        assert_eq!(lr_at(0, 0.001, 500), 0.001);
        assert_eq!(lr_at(499, 0.001, 500), 0.001);
        assert_eq!(lr_at(500, 0.001, 500), 0.0005);
        assert_eq!(lr_at(1000, 0.001, 500), 0.00025);
        assert_eq!(lr_at(5000, 0.001, 5000), 0.0005);
    }

    #[test]
    fn step_descends_on_quadratic() {
        // minimize f(w) = sum(w^2)
        let mut params = ParamStore::new();
        params.insert("w", Arr::from_elem(IxDyn(&[2]), 1.0));
        let mut opt = Adam::new(0.9, 0.999);
        for _ in 0..200 {
            let w = params.get("w").clone();
            let mut grads = BTreeMap::new();
            grads.insert("w".to_string(), w.mapv(|x| 2.0 * x));
            opt.step(&mut params, &grads, 0.05);
        }
        let f = params.get("w").iter().map(|x| x * x).sum::<f64>();
        assert!(f < 1e-2, "final value {f}");
    }

    #[test]
    fn clip_rescales_to_max_norm() {
        let mut grads = BTreeMap::new();
        grads.insert("a".to_string(), Arr::from_elem(IxDyn(&[4]), 3.0));
        let norm = clip_grad_norm(&mut grads, 1.0);
        assert!((norm - 6.0).abs() < 1e-12);
        let new_norm: f64 = grads["a"].iter().map(|x| x * x).sum::<f64>().sqrt();
        assert!((new_norm - 1.0).abs() < 1e-12);
    }
}
