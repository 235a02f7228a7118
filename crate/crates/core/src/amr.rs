//! Attribution-ratio regularization.
//!
//! The regularizer is the L1 distance between the normalized batch
//! attribution and the normalized target ratio. Its gradient passes through
//! `∂s/∂e`, so the attribution is computed with `create_graph` and the loss is
//! differentiated a second time. Only fusion and classifier parameters are
//! updated, by a plain SGD optimizer independent of the task optimizer.

use serde::{Deserialize, Serialize};

use crate::attribution::{attribution_vars, AttributedLogit};
use crate::baselines;
use crate::data::MultimodalBatch;
use crate::error::{Error, Result};
use crate::model::{ForwardOptions, MultimodalModel, ParamGroup};
use crate::optim::{Gradients, Sgd};
use crate::tensor::{Graph, Tensor, Var};

fn default_lambda() -> f64 {
    1.0
}

fn default_lr() -> f64 {
    1e-2
}

fn default_every() -> usize {
    1
}

/// Desired attribution ratio plus the settings of the auxiliary step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttributionTarget {
    pub ratios: Vec<f64>,
    #[serde(default = "default_lambda")]
    pub lambda: f64,
    #[serde(default = "default_lr")]
    pub lr: f64,
    #[serde(default = "default_every")]
    pub every_k_steps: usize,
    /// Penalize each sample's attribution instead of the batch mean.
    #[serde(default)]
    pub use_per_sample: bool,
    #[serde(default)]
    pub logit: AttributedLogit,
}

impl AttributionTarget {
    pub fn new(ratios: Vec<f64>, lambda: f64) -> Self {
        AttributionTarget {
            ratios,
            lambda,
            lr: default_lr(),
            every_k_steps: 1,
            use_per_sample: false,
            logit: AttributedLogit::Predicted,
        }
    }

    pub fn validate(&self, num_modalities: usize) -> Result<()> {
        if num_modalities < 2 {
            return Err(Error::Config(
                "attribution regularization needs at least two modalities".into(),
            ));
        }
        if self.ratios.len() != num_modalities {
            return Err(Error::Config(format!(
                "amr.ratios has {} entries for {num_modalities} modalities",
                self.ratios.len()
            )));
        }
        if self.ratios.iter().any(|&r| !(r > 0.0 && r.is_finite())) {
            return Err(Error::Config("amr.ratios must all be > 0".into()));
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::Config(format!("amr.lambda must be >= 0, got {}", self.lambda)));
        }
        if !(self.lr > 0.0) {
            return Err(Error::Config("amr.lr must be > 0".into()));
        }
        if self.every_k_steps == 0 {
            return Err(Error::Config("amr.every_k_steps must be >= 1".into()));
        }
        Ok(())
    }
}

/// Regularizer on graph vars.
///
/// `a` is either a length-M attribution or a `[batch × M]` matrix, in which
/// case the per-row penalties are averaged.
pub fn amr_loss(g: &mut Graph, a: Var, ratios: &[f64]) -> Result<Var> {
    let shape = g.shape(a).to_vec();
    let m = *shape.last().unwrap_or(&0);
    if m != ratios.len() || shape.is_empty() || shape.len() > 2 {
        return Err(Error::Input(format!(
            "attribution shape {shape:?} does not match {} ratios",
            ratios.len()
        )));
    }
    if ratios.iter().any(|r| !(r.is_finite() && *r > 0.0)) {
        return Err(Error::Input("ratios must be positive and finite".into()));
    }
    if g.value(a).data().iter().any(|v| !(*v >= 0.0)) {
        return Err(Error::Input("attribution entries must be nonnegative".into()));
    }
    let axis = shape.len() - 1;
    let total: f64 = ratios.iter().sum();
    let inv_total = 1.0 / total;
    let r: Vec<f64> = ratios.iter().map(|v| v * inv_total).collect();
    let rows = if shape.len() == 2 { shape[0] } else { 1 };
    let target = Tensor::new(shape.clone(), r.repeat(rows))?;

    let sums = g.sum(a, axis)?;
    let inv = g.recip(sums)?;
    let inv = g.expand(inv, axis, m)?;
    let normalized = g.mul(a, inv)?;
    let target = g.constant(target);
    let diff = g.sub(normalized, target)?;
    let dist = g.abs(diff)?;
    let per_row = g.sum(dist, axis)?;
    if shape.len() == 2 {
        g.mean(per_row, 0)
    } else {
        Ok(per_row)
    }
}

/// Regularizer on plain values.
pub fn amr_loss_value(a: &[f64], ratios: &[f64]) -> Result<f64> {
    let mut g = Graph::new();
    let v = g.constant(Tensor::vector(a.to_vec()));
    let l = amr_loss(&mut g, v, ratios)?;
    Ok(g.value(l).item())
}

#[derive(Clone, Debug, PartialEq)]
pub struct AmrStepReport {
    /// Unweighted regularizer value before the update.
    pub loss: f64,
    /// Batch attribution before the update.
    pub attribution: Vec<f64>,
    pub degenerate_count: usize,
}

/// Regularizer value and `λ`-weighted gradients for the fusion/classifier
/// group. Encoder parameters enter only as constants.
pub fn amr_gradients(
    model: &MultimodalModel,
    inputs: &[Tensor],
    labels: &[usize],
    target: &AttributionTarget,
) -> Result<(AmrStepReport, Gradients)> {
    let mut g = Graph::new();
    let params = model.bind(&mut g, |grp| grp == ParamGroup::FusionClassifier);
    let xs: Vec<Var> = inputs.iter().map(|x| g.constant(x.clone())).collect();
    let enc = model.encode(&mut g, &params, &xs, &ForwardOptions::default())?;
    let enc: Vec<Var> = enc
        .into_iter()
        .map(|e| {
            let v = g.value(e).clone();
            g.leaf(v)
        })
        .collect();
    let vars = attribution_vars(
        &mut g,
        model,
        &params,
        &enc,
        target.logit,
        Some(labels),
        true,
    )?;
    let a = if target.use_per_sample {
        vars.per_sample
    } else {
        vars.batch_mean
    };
    let loss = amr_loss(&mut g, a, &target.ratios)?;
    let report = AmrStepReport {
        loss: g.value(loss).item(),
        attribution: g.value(vars.batch_mean).data().to_vec(),
        degenerate_count: vars.degenerate_count,
    };
    let fc = model.param_groups().fusion_classifier;
    let wrt: Vec<Var> = fc.iter().map(|&i| params[i]).collect();
    let weighted = g.scale(loss, target.lambda)?;
    let grads = g.backward(weighted, &wrt, false)?;
    let grads = fc
        .into_iter()
        .zip(grads)
        .map(|(i, v)| (i, g.value(v).clone()))
        .collect();
    Ok((report, grads))
}

/// One regularizer update of the fusion/classifier group.
///
/// With `λ = 0` the loss is reported and no parameter changes.
pub fn amr_step(
    model: &mut MultimodalModel,
    inputs: &[Tensor],
    labels: &[usize],
    target: &AttributionTarget,
    optimizer: &mut Sgd,
) -> Result<AmrStepReport> {
    if target.lambda < 0.0 {
        return Err(Error::Config("amr.lambda must be >= 0".into()));
    }
    let (report, grads) = amr_gradients(model, inputs, labels, target)?;
    if target.lambda > 0.0 {
        optimizer.step(model, &grads)?;
    }
    Ok(report)
}

#[derive(Clone, Debug, PartialEq)]
pub struct CombinedStepReport {
    pub task_loss: f64,
    pub amr: AmrStepReport,
}

/// Naive task step on all parameters followed by a regularizer step on the
/// same batch.
pub fn combined_training_step(
    model: &mut MultimodalModel,
    batch: &MultimodalBatch,
    task_optimizer: &mut Sgd,
    target: &AttributionTarget,
    amr_optimizer: &mut Sgd,
) -> Result<CombinedStepReport> {
    let task_loss = baselines::naive_step(model, batch, task_optimizer)?;
    let amr = amr_step(model, &batch.inputs, &batch.labels, target, amr_optimizer)?;
    Ok(CombinedStepReport { task_loss, amr })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn loss(a: &[f64], r: &[f64]) -> f64 {
        amr_loss_value(a, r).unwrap()
    }

    #[test]
    fn loss_examples() {
        assert_eq!(loss(&[0.5, 0.5], &[1.0, 1.0]), 0.0);
        assert!((loss(&[0.74, 0.26], &[1.0, 1.0]) - 0.48).abs() < 1e-12);
        assert!((loss(&[0.2, 0.8], &[1.0, 3.0]) - 0.10).abs() < 1e-12);
        assert!(matches!(
            amr_loss_value(&[0.5, 0.5], &[1.0, 1.0, 1.0]),
            Err(Error::Input(_))
        ));
    }

    #[test]
    fn per_sample_rows_are_averaged() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::from_rows(&[vec![0.5, 0.5], vec![0.74, 0.26]]).unwrap());
        let l = amr_loss(&mut g, a, &[1.0, 1.0]).unwrap();
        assert!((g.value(l).item() - 0.24).abs() < 1e-12);
    }

    #[test]
    fn target_validation() {
        assert!(AttributionTarget::new(vec![1.0], 1.0).validate(1).is_err());
        assert!(AttributionTarget::new(vec![1.0, 1.0], -1.0).validate(2).is_err());
        assert!(AttributionTarget::new(vec![1.0, 0.0], 1.0).validate(2).is_err());
        assert!(AttributionTarget::new(vec![1.0, 1.0, 1.0], 1.0).validate(2).is_err());
        assert!(AttributionTarget::new(vec![1.0, 1.0], 0.0).validate(2).is_ok());
    }
}
