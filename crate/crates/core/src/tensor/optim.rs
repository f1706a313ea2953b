use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{ParameterGroup, Scalar};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.lr > 0.0
            && self.lr.is_finite()
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.eps > 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!(
                "invalid optimizer settings {self:?}"
            )))
        }
    }
}

struct Moments<S> {
    first: Vec<S>,
    second: Vec<S>,
}

/// Adam with bias correction.
///
/// Moment buffers are allocated at construction for the groups that are
/// trainable at that moment; a group that becomes trainable later is
/// rejected by [`Adam::step`].
pub struct Adam<S: Scalar = f64> {
    config: AdamConfig,
    step: u64,
    moments: BTreeMap<(String, String), Moments<S>>,
}

impl<S: Scalar> Adam<S> {
    pub fn new(config: AdamConfig, groups: &[&ParameterGroup<S>]) -> Result<Self> {
        config.validate()?;
        let mut moments = BTreeMap::new();
        for group in groups.iter().filter(|g| g.trainable()) {
            for (name, t) in group.iter() {
                moments.insert(
                    (group.name().to_string(), name.to_string()),
                    Moments {
                        first: vec![S::zero(); t.numel()],
                        second: vec![S::zero(); t.numel()],
                    },
                );
            }
        }
        Ok(Adam {
            config,
            step: 0,
            moments,
        })
    }

    pub fn config(&self) -> &AdamConfig {
        &self.config
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    pub fn num_tracked(&self) -> usize {
        self.moments.len()
    }

    /// Updates trainable parameters from their gradients, then clears all
    /// gradients. Frozen groups are left untouched.
    pub fn step(&mut self, groups: &mut [&mut ParameterGroup<S>]) -> Result<()> {
        // Validate everything before mutating anything.
        for group in groups.iter().filter(|g| g.trainable()) {
            for (name, t) in group.iter() {
                let key = (group.name().to_string(), name.to_string());
                if !self.moments.contains_key(&key) {
                    return Err(Error::Contract(format!(
                        "{}/{name} became trainable after the optimizer was created",
                        group.name()
                    )));
                }
                if t.grad().is_none() {
                    return Err(Error::Contract(format!(
                        "trainable parameter {}/{name} has no gradient",
                        group.name()
                    )));
                }
            }
        }

        self.step += 1;
        let c = &self.config;
        let (b1, b2) = (S::lit(c.beta1), S::lit(c.beta2));
        let bc1 = S::lit(1.0 - c.beta1.powi(self.step as i32));
        let bc2 = S::lit(1.0 - c.beta2.powi(self.step as i32));
        let (lr, eps) = (S::lit(c.lr), S::lit(c.eps));

        for group in groups.iter_mut() {
            if group.trainable() {
                let gname = group.name().to_string();
                for (name, t) in group.iter_mut() {
                    let m = self
                        .moments
                        .get_mut(&(gname.clone(), name.to_string()))
                        .expect("checked above");
                    let grad = t.grad().expect("checked above").to_vec();
                    for (i, p) in t.data_mut().iter_mut().enumerate() {
                        let g = grad[i];
                        m.first[i] = b1 * m.first[i] + (S::one() - b1) * g;
                        m.second[i] = b2 * m.second[i] + (S::one() - b2) * g * g;
                        let mhat = m.first[i] / bc1;
                        let vhat = m.second[i] / bc2;
                        *p = *p - lr * mhat / (vhat.sqrt() + eps);
                    }
                }
            }
            group.clear_grads();
        }
        Ok(())
    }
}
