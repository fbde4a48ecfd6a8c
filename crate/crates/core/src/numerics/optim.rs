use std::collections::BTreeMap;
use std::f64::consts::PI;

use super::{GradMap, ParameterSet};
use crate::error::{Error, Result};

/// Update rule. Weight decay is not applied by either scheme.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Scheme {
    Sgd,
    Adam { beta1: f64, beta2: f64, eps: f64 },
}

impl Scheme {
    pub fn adam() -> Self {
        Scheme::Adam {
            beta1: 0.9,
            beta2: 0.98,
            eps: 1e-8,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Optimizer {
    scheme: Scheme,
    step: u64,
    moments: BTreeMap<String, (Vec<f64>, Vec<f64>)>,
}

impl Optimizer {
    pub fn new(scheme: Scheme) -> Self {
        Self {
            scheme,
            step: 0,
            moments: BTreeMap::new(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Applies one update to every non-frozen entry of `params` that has a
    /// gradient. Frozen entries are never written.
    pub fn step(&mut self, params: &mut ParameterSet, grads: &GradMap, lr: f64) -> Result<()> {
        for (name, g) in grads {
            let p = params.get(name)?;
            if p.shape() != g.shape() {
                return Err(Error::Usage(format!(
                    "gradient for {name} has shape {:?}, parameter has {:?}",
                    g.shape(),
                    p.shape()
                )));
            }
        }
        self.step += 1;
        let t = self.step as i32;
        for (name, g) in grads {
            if params.is_frozen(name) {
                continue;
            }
            let values = params.get_mut(name)?.data_mut();
            match self.scheme {
                Scheme::Sgd => {
                    for (p, &gv) in values.iter_mut().zip(g.data()) {
                        *p -= lr * gv;
                    }
                }
                Scheme::Adam { beta1, beta2, eps } => {
                    let (m, v) = self
                        .moments
                        .entry(name.clone())
                        .or_insert_with(|| (vec![0.0; g.numel()], vec![0.0; g.numel()]));
                    let c1 = 1.0 - beta1.powi(t);
                    let c2 = 1.0 - beta2.powi(t);
                    for (i, (p, &gv)) in values.iter_mut().zip(g.data()).enumerate() {
                        m[i] = beta1 * m[i] + (1.0 - beta1) * gv;
                        v[i] = beta2 * v[i] + (1.0 - beta2) * gv * gv;
                        let mhat = m[i] / c1;
                        let vhat = v[i] / c2;
                        *p -= lr * mhat / (vhat.sqrt() + eps);
                    }
                }
            }
        }
        Ok(())
    }
}

/// Cosine-annealed learning rate for `epoch` in `0..epochs`.
pub fn cosine_lr(base: f64, epoch: usize, epochs: usize) -> f64 {
    if epochs <= 1 {
        return base;
    }
    0.5 * base * (1.0 + (PI * epoch as f64 / epochs as f64).cos())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Tensor;

    fn one(name: &str, v: f64) -> (ParameterSet, GradMap) {
        let mut p = ParameterSet::new();
        p.insert(name, Tensor::scalar(v)).unwrap();
        let mut g = GradMap::new();
        g.insert(name.to_string(), Tensor::scalar(1.0));
        (p, g)
    }

    #[test]
    fn sgd_definition() {
        let (mut p, g) = one("w", 1.0);
        Optimizer::new(Scheme::Sgd).step(&mut p, &g, 0.1).unwrap();
        assert!((p.get("w").unwrap().data()[0] - 0.9).abs() < 1e-15);
    }

    #[test]
    fn frozen_is_bit_unchanged() {
        let (mut p, g) = one("w", 0.123456789);
        p.freeze("w").unwrap();
        let before = p.get("w").unwrap().data()[0].to_bits();
        Optimizer::new(Scheme::adam()).step(&mut p, &g, 0.5).unwrap();
        assert_eq!(p.get("w").unwrap().data()[0].to_bits(), before);
    }

    #[test]
    fn adam_first_step_is_lr_sign() {
        for grad in [3.0, -0.02] {
            let (mut p, mut g) = one("w", 0.0);
            g.insert("w".into(), Tensor::scalar(grad));
            Optimizer::new(Scheme::adam()).step(&mut p, &g, 0.01).unwrap();
            let delta = p.get("w").unwrap().data()[0];
            assert!((delta + 0.01 * grad.signum()).abs() < 1e-8);
        }
    }

    #[test]
    fn shape_mismatch_is_usage_error() {
        let (mut p, mut g) = one("w", 0.0);
        g.insert("w".into(), Tensor::zeros(&[2]));
        let err = Optimizer::new(Scheme::Sgd).step(&mut p, &g, 0.1);
        assert!(matches!(err, Err(Error::Usage(_))));
    }

    #[test]
    fn cosine_schedule_endpoints() {
        assert_eq!(cosine_lr(1.0, 0, 20), 1.0);
        assert!((cosine_lr(1.0, 10, 20) - 0.5).abs() < 1e-12);
        assert!(cosine_lr(1.0, 19, 20) > 0.0);
    }
}
