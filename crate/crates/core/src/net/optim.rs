use super::grad::Gradients;
use super::Network;
use crate::error::{Error, Result};

/// SGD with heavy-ball momentum: `v ← μ·v + g`, `θ ← θ − lr·v`.
#[derive(Clone, Debug)]
pub struct Sgd {
    pub learning_rate: f64,
    pub momentum: f64,
    velocity: Option<Vec<Vec<f64>>>,
}

impl Sgd {
    pub fn new(learning_rate: f64, momentum: f64) -> Self {
        Sgd {
            learning_rate,
            momentum,
            velocity: None,
        }
    }

    pub fn step(&mut self, net: &mut Network, grads: &Gradients) -> Result<()> {
        let shapes_match = {
            let params = net.params();
            params.len() == grads.tensors.len() && params.iter().zip(&grads.tensors).all(|(p, g)| p.len() == g.len())
        };
        if !shapes_match {
            return Err(Error::shape("gradients matching the parameter tensors", "mismatched gradient set"));
        }
        if !grads.is_finite() {
            return Err(Error::Divergence(format!(
                "non-finite gradient (norm {}) at learning rate {}",
                grads.l2_norm(),
                self.learning_rate
            )));
        }
        let velocity = self
            .velocity
            .get_or_insert_with(|| grads.tensors.iter().map(|g| vec![0.0; g.len()]).collect());
        for ((param, vel), grad) in net.params_mut().into_iter().zip(velocity.iter_mut()).zip(&grads.tensors) {
            for ((p, v), g) in param.iter_mut().zip(vel.iter_mut()).zip(grad) {
                *v = self.momentum * *v + g;
                *p -= self.learning_rate * *v;
            }
        }
        if !net.is_finite() {
            return Err(Error::Divergence("parameters became non-finite".into()));
        }
        Ok(())
    }
}
