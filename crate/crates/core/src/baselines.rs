//! Comparison training strategies. Each one produces a task-loss update on
//! one batch; any of them can be followed by a regularizer step.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attribution::{attribute, AttributedLogit};
use crate::data::{Dataset, MultimodalBatch};
use crate::error::{Error, Result};
use crate::harness::{self, TrainConfig};
use crate::model::{DropoutMasks, ForwardOptions, MultimodalModel};
use crate::optim::{Gradients, Sgd};
use crate::tensor::{Graph, Tensor, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StrategyKind {
    Naive,
    Unimodal { modality: usize },
    Dropout { p: f64 },
    ModalityDropout { p: f64 },
    Umt { tau: f64, beta: f64, teacher_epochs: usize },
    Ogm { alpha: f64 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StrategyConfig {
    pub kind: StrategyKind,
    pub seed: u64,
}

impl StrategyConfig {
    pub fn naive(seed: u64) -> Self {
        StrategyConfig {
            kind: StrategyKind::Naive,
            seed,
        }
    }

    pub fn validate(&self, num_modalities: usize) -> Result<()> {
        match self.kind {
            StrategyKind::Naive => Ok(()),
            StrategyKind::Unimodal { modality } if modality >= num_modalities => Err(
                Error::Config(format!("unimodal modality {modality} out of range")),
            ),
            StrategyKind::Unimodal { .. } => Ok(()),
            StrategyKind::Dropout { p } | StrategyKind::ModalityDropout { p }
                if !(0.0..1.0).contains(&p) =>
            {
                Err(Error::Config(format!("dropout probability must be in [0,1), got {p}")))
            }
            StrategyKind::ModalityDropout { .. } if num_modalities < 2 => Err(Error::Config(
                "modality dropout needs at least two modalities".into(),
            )),
            StrategyKind::Dropout { .. } | StrategyKind::ModalityDropout { .. } => Ok(()),
            StrategyKind::Umt { tau, beta, .. } => {
                if !(tau > 0.0) || !(beta >= 0.0) {
                    return Err(Error::Config("umt needs tau > 0 and beta >= 0".into()));
                }
                Ok(())
            }
            StrategyKind::Ogm { alpha } if !(alpha >= 0.0) => {
                Err(Error::Config("ogm.alpha must be >= 0".into()))
            }
            StrategyKind::Ogm { .. } => Ok(()),
        }
    }

    /// Method name used in result tables.
    pub fn label(&self) -> String {
        match &self.kind {
            StrategyKind::Naive => "naive fusion".into(),
            StrategyKind::Unimodal { modality } => format!("unimodal m{modality}"),
            StrategyKind::Dropout { .. } => "dropout".into(),
            StrategyKind::ModalityDropout { .. } => "modality dropout".into(),
            StrategyKind::Umt { .. } => "UMT".into(),
            StrategyKind::Ogm { .. } => "OGM (simplified)".into(),
        }
    }
}

/// Cross-entropy gradients for every parameter.
pub fn task_gradients(
    model: &MultimodalModel,
    batch: &MultimodalBatch,
    opts: &ForwardOptions,
) -> Result<(f64, Gradients)> {
    let mut g = Graph::new();
    let params = model.bind(&mut g, |_| true);
    let xs: Vec<Var> = batch.inputs.iter().map(|x| g.constant(x.clone())).collect();
    let out = model.forward(&mut g, &params, &xs, opts)?;
    let loss = g.softmax_cross_entropy(out.logits, &batch.labels)?;
    collect_grads(&mut g, loss, &params)
}

fn collect_grads(g: &mut Graph, loss: Var, params: &[Var]) -> Result<(f64, Gradients)> {
    let value = g.value(loss).item();
    let grads = g.backward(loss, params, false)?;
    Ok((
        value,
        grads
            .into_iter()
            .enumerate()
            .map(|(i, v)| (i, g.value(v).clone()))
            .collect(),
    ))
}

/// Plain end-to-end step: one cross-entropy update of all parameters.
pub fn naive_step(model: &mut MultimodalModel, batch: &MultimodalBatch, optimizer: &mut Sgd) -> Result<f64> {
    let (loss, grads) = task_gradients(model, batch, &ForwardOptions::default())?;
    optimizer.step(model, &grads)?;
    Ok(loss)
}

/// Inverted-dropout mask: each unit kept with probability `1 − p` and scaled
/// by `1/(1 − p)`.
pub fn dropout_mask(shape: &[usize], p: f64, rng: &mut impl Rng) -> Result<Tensor> {
    if !(0.0..1.0).contains(&p) {
        return Err(Error::Config(format!("dropout probability must be in [0,1), got {p}")));
    }
    if p == 0.0 {
        return Ok(Tensor::ones(shape));
    }
    let keep = 1.0 / (1.0 - p);
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| if rng.random::<f64>() < p { 0.0 } else { keep })
        .collect();
    Tensor::new(shape.to_vec(), data)
}

/// Masks for every encoder hidden activation and the fused representation.
pub fn dropout_masks(
    model: &MultimodalModel,
    batch_size: usize,
    p: f64,
    rng: &mut impl Rng,
) -> Result<DropoutMasks> {
    let cfg = model.config();
    let encoder_hidden = (0..model.num_modalities())
        .map(|_| {
            cfg.encoder_hidden
                .iter()
                .map(|&w| dropout_mask(&[batch_size, w], p, rng))
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<Vec<_>>>()?;
    let fused = dropout_mask(&[batch_size, cfg.fused_width()], p, rng)?;
    Ok(DropoutMasks {
        encoder_hidden,
        fused,
    })
}

/// Keep-flags for `m` modalities, each dropped independently with
/// probability `p`; if every modality would drop, one is kept uniformly at
/// random.
pub fn modality_dropout_select(m: usize, p: f64, rng: &mut impl Rng) -> Vec<bool> {
    let mut keep: Vec<bool> = (0..m).map(|_| rng.random::<f64>() >= p).collect();
    if m > 0 && !keep.iter().any(|&k| k) {
        keep[rng.random_range(0..m)] = true;
    }
    keep
}

/// `τ² · mean_rows KL(softmax(teacher/τ) ‖ softmax(student/τ))`.
///
/// The teacher logits are detached.
pub fn distillation_kl(g: &mut Graph, teacher_logits: Var, student_logits: Var, tau: f64) -> Result<Var> {
    let t = g.detach(teacher_logits);
    let t = g.scale(t, 1.0 / tau)?;
    let log_pt = g.log_softmax(t)?;
    let pt = g.exp(log_pt)?;
    let s = g.scale(student_logits, 1.0 / tau)?;
    let log_ps = g.log_softmax(s)?;
    let diff = g.sub(log_pt, log_ps)?;
    let terms = g.mul(pt, diff)?;
    let per_row = g.sum(terms, 1)?;
    let kl = g.mean(per_row, 0)?;
    g.scale(kl, tau * tau)
}

/// A frozen single-modality teacher bound into the same graph.
pub struct Teacher<'a> {
    pub model: &'a MultimodalModel,
    pub params: &'a [Var],
}

/// Task cross-entropy plus `β · Σ_m τ² KL(teacher_m ‖ aux_head_m)`.
///
/// No gradient reaches the teachers.
#[allow(clippy::too_many_arguments)]
pub fn umt_loss(
    g: &mut Graph,
    student: &MultimodalModel,
    params: &[Var],
    teachers: &[Teacher],
    inputs: &[Var],
    labels: &[usize],
    tau: f64,
    beta: f64,
    opts: &ForwardOptions,
) -> Result<Var> {
    if teachers.len() != student.num_modalities() {
        return Err(Error::Config(format!(
            "umt needs one teacher per modality ({}), got {}",
            student.num_modalities(),
            teachers.len()
        )));
    }
    let out = student.forward(g, params, inputs, opts)?;
    let mut loss = g.softmax_cross_entropy(out.logits, labels)?;
    if beta == 0.0 {
        return Ok(loss);
    }
    let mut kl_total = None;
    for (m, teacher) in teachers.iter().enumerate() {
        let t_enc = teacher
            .model
            .encode(g, teacher.params, &inputs[m..=m], &ForwardOptions::default())?;
        let t_logits = teacher
            .model
            .head(g, teacher.params, &t_enc, &ForwardOptions::default())?;
        let aux = student.aux_logits(g, params, m, out.encodings[m])?;
        let kl = distillation_kl(g, t_logits, aux, tau)?;
        kl_total = Some(match kl_total {
            Some(acc) => g.add(acc, kl)?,
            None => kl,
        });
    }
    if let Some(kl) = kl_total {
        let weighted = g.scale(kl, beta)?;
        loss = g.add(loss, weighted)?;
    }
    Ok(loss)
}

/// Per-modality update coefficients from batch attribution.
///
/// `ρ^m = M · a^m`; `k^m = 1` when `ρ^m ≤ 1`, else `1 − tanh(α(ρ^m − 1))`.
pub fn ogm_coefficients(a: &[f64], alpha: f64) -> Vec<f64> {
    let m = a.len() as f64;
    a.iter()
        .map(|&am| {
            let rho = am * m;
            if rho <= 1.0 {
                1.0
            } else {
                1.0 - (alpha * (rho - 1.0)).tanh()
            }
        })
        .collect()
}

/// Scales modality `m`'s encoder gradients and its rows of the fusion weight
/// gradient by `k[m]`.
pub fn apply_ogm(model: &MultimodalModel, grads: &mut Gradients, k: &[f64]) {
    let info = model.param_info();
    let fusion = model.fusion_weight_index();
    let enc_dim = model.config().encoding_dim;
    for (idx, grad) in grads.iter_mut() {
        if let Some(m) = info[*idx].modality {
            grad.data_mut().iter_mut().for_each(|v| *v *= k[m]);
        } else if *idx == fusion {
            let cols = grad.cols();
            for (m, &km) in k.iter().enumerate() {
                let rows = m * enc_dim..(m + 1) * enc_dim;
                grad.data_mut()[rows.start * cols..rows.end * cols]
                    .iter_mut()
                    .for_each(|v| *v *= km);
            }
        }
    }
}

/// Mutable per-run state of a strategy: its RNG stream and any teachers.
pub struct StrategyRunner {
    config: StrategyConfig,
    rng: ChaCha8Rng,
    teachers: Vec<MultimodalModel>,
}

impl StrategyRunner {
    pub fn new(config: StrategyConfig) -> Self {
        let rng = ChaCha8Rng::seed_from_u64(config.seed);
        StrategyRunner {
            config,
            rng,
            teachers: Vec::new(),
        }
    }

    pub fn with_teachers(mut self, teachers: Vec<MultimodalModel>) -> Self {
        self.teachers = teachers;
        self
    }

    pub fn config(&self) -> &StrategyConfig {
        &self.config
    }

    /// One task update; returns the task loss.
    pub fn step(&mut self, model: &mut MultimodalModel, batch: &MultimodalBatch, optimizer: &mut Sgd) -> Result<f64> {
        let bsz = batch.labels.len();
        let (loss, grads) = match self.config.kind.clone() {
            StrategyKind::Naive | StrategyKind::Unimodal { .. } => {
                task_gradients(model, batch, &ForwardOptions::default())?
            }
            StrategyKind::Dropout { p } => {
                let masks = dropout_masks(model, bsz, p, &mut self.rng)?;
                let opts = ForwardOptions {
                    dropout: Some(&masks),
                    modality_keep: None,
                };
                task_gradients(model, batch, &opts)?
            }
            StrategyKind::ModalityDropout { p } => {
                let keep = modality_dropout_select(model.num_modalities(), p, &mut self.rng);
                let opts = ForwardOptions {
                    dropout: None,
                    modality_keep: Some(&keep),
                };
                task_gradients(model, batch, &opts)?
            }
            StrategyKind::Umt { tau, beta, .. } => {
                let mut g = Graph::new();
                let params = model.bind(&mut g, |_| true);
                let teacher_params: Vec<Vec<Var>> = self
                    .teachers
                    .iter()
                    .map(|t| t.bind(&mut g, |_| false))
                    .collect();
                let teachers: Vec<Teacher> = self
                    .teachers
                    .iter()
                    .zip(&teacher_params)
                    .map(|(model, params)| Teacher { model, params })
                    .collect();
                let xs: Vec<Var> = batch.inputs.iter().map(|x| g.constant(x.clone())).collect();
                let loss = umt_loss(
                    &mut g,
                    model,
                    &params,
                    &teachers,
                    &xs,
                    &batch.labels,
                    tau,
                    beta,
                    &ForwardOptions::default(),
                )?;
                collect_grads(&mut g, loss, &params)?
            }
            StrategyKind::Ogm { alpha } => {
                let report = attribute(model, &batch.inputs, AttributedLogit::Predicted, None)?;
                let k = ogm_coefficients(&report.batch_mean, alpha);
                let (loss, mut grads) = task_gradients(model, batch, &ForwardOptions::default())?;
                apply_ogm(model, &mut grads, &k);
                (loss, grads)
            }
        };
        optimizer.step(model, &grads)?;
        Ok(loss)
    }
}

/// Trains a single-modality model on modality `m` of `data`.
pub fn train_unimodal(
    template: &MultimodalModel,
    train: &Dataset,
    val: &Dataset,
    m: usize,
    config: &TrainConfig,
) -> Result<harness::TrainOutcome> {
    let model = template.unimodal_view(m)?;
    let train_m = train.modality(m)?;
    let val_m = val.modality(m)?;
    let mut cfg = config.clone();
    cfg.strategy = StrategyConfig::naive(config.strategy.seed);
    cfg.amr = None;
    harness::train(model, &train_m, &val_m, &cfg)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_dropout_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let m = dropout_mask(&[3, 4], 0.0, &mut rng).unwrap();
        assert!(m.data().iter().all(|&v| v == 1.0));
        assert!(dropout_mask(&[3], 1.0, &mut rng).is_err());
    }

    #[test]
    fn inverted_scaling_preserves_mean() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let m = dropout_mask(&[100_000], 0.5, &mut rng).unwrap();
        let mean = m.data().iter().sum::<f64>() / 1e5;
        assert!((mean - 1.0).abs() < 0.02, "{mean}");
    }

    #[test]
    fn modality_dropout_rules() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        assert_eq!(modality_dropout_select(3, 0.0, &mut rng), vec![true; 3]);
        // p so close to 1 that every draw drops both modalities.
        for _ in 0..100 {
            let keep = modality_dropout_select(2, 0.999_999_999, &mut rng);
            assert_eq!(keep.iter().filter(|&&k| k).count(), 1);
        }
    }

    #[test]
    fn ogm_closed_form() {
        assert_eq!(ogm_coefficients(&[0.5, 0.5], 1.0), vec![1.0, 1.0]);
        let k = ogm_coefficients(&[0.74, 0.26], 1.0);
        assert!((k[0] - (1.0 - 0.48f64.tanh())).abs() < 1e-12);
        assert!((k[0] - 0.5538).abs() < 1e-4);
        assert_eq!(k[1], 1.0);
        assert_eq!(ogm_coefficients(&[0.9, 0.1], 0.0), vec![1.0, 1.0]);
    }

    #[test]
    fn kl_examples() {
        let mut g = Graph::new();
        let t = g.constant(Tensor::from_rows(&[vec![0.3, -1.2, 2.0]]).unwrap());
        let s = g.leaf(Tensor::from_rows(&[vec![0.3, -1.2, 2.0]]).unwrap());
        let kl = distillation_kl(&mut g, t, s, 2.0).unwrap();
        assert!(g.value(kl).item().abs() < 1e-15);

        // Teacher logits [ln 2, ln 1] → p = [2/3, 1/3]; uniform student.
        let t = g.constant(Tensor::from_rows(&[vec![2f64.ln(), 0.0]]).unwrap());
        let s = g.leaf(Tensor::from_rows(&[vec![0.0, 0.0]]).unwrap());
        let kl = distillation_kl(&mut g, t, s, 1.0).unwrap();
        let p = [2.0 / 3.0, 1.0 / 3.0];
        let expected: f64 = p.iter().map(|&pi: &f64| pi * (pi / 0.5).ln()).sum();
        assert!((g.value(kl).item() - expected).abs() < 1e-12);
    }

    #[test]
    fn strategy_validation() {
        let bad = StrategyConfig {
            kind: StrategyKind::Dropout { p: 1.0 },
            seed: 0,
        };
        assert!(bad.validate(2).is_err());
        let bad = StrategyConfig {
            kind: StrategyKind::Unimodal { modality: 2 },
            seed: 0,
        };
        assert!(bad.validate(2).is_err());
        let ogm = StrategyConfig {
            kind: StrategyKind::Ogm { alpha: 1.0 },
            seed: 0,
        };
        assert_eq!(ogm.label(), "OGM (simplified)");
    }
}
