use crate::error::{Error, Result};
use crate::model::MultimodalModel;
use crate::tensor::Tensor;

/// Gradient for the parameter at the given index of [`MultimodalModel::params`].
pub type Gradients = Vec<(usize, Tensor)>;

/// SGD with optional heavy-ball momentum (`v ← μv + g`, `p ← p − lr·v`).
#[derive(Clone, Debug)]
pub struct Sgd {
    lr: f64,
    momentum: f64,
    velocity: Vec<Option<Tensor>>,
}

impl Sgd {
    pub fn new(lr: f64, momentum: f64) -> Result<Self> {
        if !(lr > 0.0 && lr.is_finite()) {
            return Err(Error::Config(format!("learning rate must be > 0, got {lr}")));
        }
        if !(0.0..1.0).contains(&momentum) {
            return Err(Error::Config(format!("momentum must be in [0,1), got {momentum}")));
        }
        Ok(Sgd {
            lr,
            momentum,
            velocity: Vec::new(),
        })
    }

    pub fn lr(&self) -> f64 {
        self.lr
    }

    /// Applies one update. Parameters without an entry in `grads` are untouched.
    pub fn step(&mut self, model: &mut MultimodalModel, grads: &Gradients) -> Result<()> {
        let mut params = model.params_mut();
        if self.velocity.len() < params.len() {
            self.velocity.resize(params.len(), None);
        }
        for (idx, grad) in grads {
            let p = &mut params[*idx];
            if p.shape() != grad.shape() {
                return Err(Error::Internal(format!(
                    "gradient shape {:?} for parameter {idx} of shape {:?}",
                    grad.shape(),
                    p.shape()
                )));
            }
            let update: &Tensor = if self.momentum > 0.0 {
                let v = self.velocity[*idx].get_or_insert_with(|| Tensor::zeros(grad.shape()));
                for (vi, &gi) in v.data_mut().iter_mut().zip(grad.data()) {
                    *vi = self.momentum * *vi + gi;
                }
                v
            } else {
                grad
            };
            for (pi, &u) in p.data_mut().iter_mut().zip(update.data()) {
                *pi -= self.lr * u;
            }
            if !p.is_finite() {
                return Err(Error::Numeric(format!("parameter {idx} diverged")));
            }
        }
        Ok(())
    }
}
