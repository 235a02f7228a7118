//! Training loop, evaluation metrics and the method × regularizer run matrix.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::amr::{amr_loss_value, amr_step, AttributionTarget};
use crate::attribution::{attribute, dominance_string, AttributedLogit};
use crate::baselines::{train_unimodal, StrategyConfig, StrategyKind, StrategyRunner};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::model::{ModelConfig, MultimodalModel};
use crate::optim::Sgd;
use crate::tensor::{Graph, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimizerConfig {
    pub lr: f64,
    pub momentum: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            lr: 0.05,
            momentum: 0.9,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub strategy: StrategyConfig,
    pub amr: Option<AttributionTarget>,
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: OptimizerConfig,
    /// Evaluate every this many steps; the final model is always evaluated.
    pub eval_every: usize,
    pub seed: u64,
}

impl TrainConfig {
    pub fn validate(&self, num_modalities: usize) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::Config("train.epochs must be >= 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("train.batch_size must be >= 1".into()));
        }
        if !(self.optimizer.lr > 0.0) {
            return Err(Error::Config("train.lr must be > 0".into()));
        }
        self.strategy.validate(num_modalities)?;
        let trained_modalities = match self.strategy.kind {
            StrategyKind::Unimodal { .. } => 1,
            _ => num_modalities,
        };
        if let Some(target) = &self.amr {
            target.validate(trained_modalities)?;
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub step: usize,
    pub accuracy: f64,
    #[serde(rename = "mAP")]
    pub map: f64,
    pub attribution: Vec<f64>,
    pub dominance: String,
    pub task_loss: f64,
    pub amr_loss: Option<f64>,
    pub degenerate_count: usize,
    pub split: String,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub model: MultimodalModel,
    pub history: Vec<MetricsReport>,
}

impl TrainOutcome {
    pub fn final_report(&self) -> &MetricsReport {
        self.history.last().expect("history always holds the final report")
    }
}

/// Fraction of rows whose argmax (lowest index on ties) equals the label.
pub fn accuracy(scores: &Tensor, labels: &[usize]) -> f64 {
    if labels.is_empty() {
        return 0.0;
    }
    let correct = labels
        .iter()
        .enumerate()
        .filter(|&(r, &l)| argmax(scores.row(r)) == l)
        .count();
    correct as f64 / labels.len() as f64
}

fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Average precision of one ranking: samples sorted by descending score,
/// ties broken by sample index. Returns `None` without positives.
pub fn average_precision(scores: &[f64], relevant: &[bool]) -> Option<f64> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (rank, &i) in order.iter().enumerate() {
        if relevant[i] {
            hits += 1;
            sum += hits as f64 / (rank + 1) as f64;
        }
    }
    (hits > 0).then(|| sum / hits as f64)
}

/// Macro-averaged average precision over classes with at least one positive.
pub fn mean_average_precision(scores: &Tensor, labels: &[usize]) -> Result<f64> {
    let (n, c) = (scores.rows(), scores.cols());
    if n != labels.len() {
        return Err(Error::Metric("score rows do not match labels".into()));
    }
    let mut total = 0.0;
    let mut classes = 0;
    for class in 0..c {
        let column: Vec<f64> = (0..n).map(|i| scores.at(i, class)).collect();
        let relevant: Vec<bool> = labels.iter().map(|&l| l == class).collect();
        if let Some(ap) = average_precision(&column, &relevant) {
            total += ap;
            classes += 1;
        }
    }
    if classes == 0 {
        return Err(Error::Metric("no class has a positive sample".into()));
    }
    Ok(total / classes as f64)
}

/// Metrics on `dataset` without dropout; parameters are not modified.
pub fn evaluate(
    model: &MultimodalModel,
    dataset: &Dataset,
    amr_target: Option<&AttributionTarget>,
) -> Result<MetricsReport> {
    let logits = model.predict_logits(dataset.features())?;
    let mut g = Graph::new();
    let l = g.constant(logits.clone());
    let probs = g.softmax(l)?;
    let ce = g.softmax_cross_entropy(l, dataset.labels())?;
    let probs = g.value(probs);
    let mode = amr_target.map_or(AttributedLogit::Predicted, |t| t.logit);
    let report = attribute(model, dataset.features(), mode, Some(dataset.labels()))?;
    let amr_loss = match amr_target {
        Some(t) if model.num_modalities() == t.ratios.len() => {
            Some(amr_loss_value(&report.batch_mean, &t.ratios)?)
        }
        _ => None,
    };
    Ok(MetricsReport {
        step: 0,
        accuracy: accuracy(probs, dataset.labels()),
        map: mean_average_precision(probs, dataset.labels())?,
        dominance: dominance_string(&report.batch_mean),
        attribution: report.batch_mean,
        task_loss: g.value(ce).item(),
        amr_loss,
        degenerate_count: report.degenerate_count,
        split: format!("{:?}", dataset.split).to_lowercase(),
    })
}

/// Runs the configured strategy (plus regularizer steps when enabled) and
/// records validation metrics.
pub fn train(
    mut model: MultimodalModel,
    train_set: &Dataset,
    val_set: &Dataset,
    config: &TrainConfig,
) -> Result<TrainOutcome> {
    config.validate(model.num_modalities())?;
    if train_set.modality_dims() != model.config().modality_dims
        || val_set.modality_dims() != model.config().modality_dims
    {
        return Err(Error::Config(
            "dataset modality widths do not match the model".into(),
        ));
    }
    if train_set.num_classes() != model.num_classes() {
        return Err(Error::Config("dataset class count does not match the model".into()));
    }

    let mut runner = StrategyRunner::new(config.strategy.clone());
    if let StrategyKind::Umt { teacher_epochs, .. } = config.strategy.kind {
        if !model.has_aux_heads() {
            return Err(Error::Config("umt needs a model with aux heads".into()));
        }
        let mut teacher_cfg = config.clone();
        teacher_cfg.epochs = teacher_epochs.max(1);
        teacher_cfg.eval_every = 0;
        let teachers = (0..model.num_modalities())
            .map(|m| train_unimodal(&model, train_set, val_set, m, &teacher_cfg).map(|o| o.model))
            .collect::<Result<Vec<_>>>()?;
        runner = runner.with_teachers(teachers);
    }

    let mut task_opt = Sgd::new(config.optimizer.lr, config.optimizer.momentum)?;
    let mut amr_opt = match &config.amr {
        Some(t) => Some(Sgd::new(t.lr, 0.0)?),
        None => None,
    };
    let mut history = Vec::new();
    let mut step = 0;
    for epoch in 0..config.epochs {
        let shuffle = config.seed.wrapping_add(epoch as u64);
        for batch in train_set.batches(config.batch_size, Some(shuffle))? {
            runner.step(&mut model, &batch, &mut task_opt)?;
            if let (Some(target), Some(opt)) = (&config.amr, amr_opt.as_mut()) {
                if step % target.every_k_steps == 0 {
                    amr_step(&mut model, &batch.inputs, &batch.labels, target, opt)?;
                }
            }
            step += 1;
            if config.eval_every > 0 && step % config.eval_every == 0 {
                let mut r = evaluate(&model, val_set, config.amr.as_ref())?;
                r.step = step;
                history.push(r);
            }
        }
    }
    if history.last().is_none_or(|r| r.step != step) {
        let mut r = evaluate(&model, val_set, config.amr.as_ref())?;
        r.step = step;
        history.push(r);
    }
    Ok(TrainOutcome { model, history })
}

/// One cell of the results matrix.
#[derive(Clone, Debug)]
pub struct RunSpec {
    pub method: String,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub data: Arc<(Dataset, Dataset)>,
}

impl RunSpec {
    pub fn amr_enabled(&self) -> bool {
        self.train.amr.is_some()
    }
}

#[derive(Clone, Debug)]
pub struct RunResult {
    pub method: String,
    pub amr_enabled: bool,
    pub seed: u64,
    pub outcome: std::result::Result<MetricsReport, String>,
}

/// Builds the model a run needs (a single-modality view for unimodal
/// strategies, aux heads for UMT) and trains it.
pub fn run_experiment(spec: &RunSpec) -> Result<TrainOutcome> {
    let mut model_cfg = spec.model.clone();
    model_cfg.aux_heads = matches!(spec.train.strategy.kind, StrategyKind::Umt { .. });
    let model = MultimodalModel::init(model_cfg)?;
    let (train_set, val_set) = &*spec.data;
    if let StrategyKind::Unimodal { modality } = spec.train.strategy.kind {
        spec.train.validate(model.num_modalities())?;
        let uni = model.unimodal_view(modality)?;
        let mut cfg = spec.train.clone();
        cfg.strategy = StrategyConfig::naive(cfg.strategy.seed);
        return train(uni, &train_set.modality(modality)?, &val_set.modality(modality)?, &cfg);
    }
    train(model, train_set, val_set, &spec.train)
}

/// Runs every spec, up to `jobs` at a time. A failing run is recorded in its
/// row and the others continue. Results keep the order of `specs`.
pub fn run_matrix(specs: &[RunSpec], jobs: usize) -> Vec<RunResult> {
    let run = |spec: &RunSpec| RunResult {
        method: spec.method.clone(),
        amr_enabled: spec.amr_enabled(),
        seed: spec.train.seed,
        outcome: run_experiment(spec)
            .map(|o| o.final_report().clone())
            .map_err(|e| e.to_string()),
    };
    if jobs <= 1 {
        return specs.iter().map(run).collect();
    }
    use rayon::prelude::*;
    match rayon::ThreadPoolBuilder::new().num_threads(jobs).build() {
        Ok(pool) => pool.install(|| specs.par_iter().map(run).collect()),
        Err(_) => specs.iter().map(run).collect(),
    }
}

/// Results CSV: `method,amr_enabled,mAP,accuracy,dominance,seed,status`.
///
/// When a (method, amr) pair has several successful runs an aggregate row
/// follows them with `mean±std` cells and seed `aggregate`.
pub fn results_csv(results: &[RunResult]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let io = |e: csv::Error| Error::Internal(e.to_string());
    w.write_record(["method", "amr_enabled", "mAP", "accuracy", "dominance", "seed", "status"])
        .map_err(io)?;
    let mut groups: Vec<(String, bool)> = Vec::new();
    for r in results {
        if !groups.contains(&(r.method.clone(), r.amr_enabled)) {
            groups.push((r.method.clone(), r.amr_enabled));
        }
    }
    for (method, amr) in groups {
        let rows: Vec<&RunResult> = results
            .iter()
            .filter(|r| r.method == method && r.amr_enabled == amr)
            .collect();
        for r in &rows {
            let amr_s = r.amr_enabled.to_string();
            let seed = r.seed.to_string();
            match &r.outcome {
                Ok(m) => w
                    .write_record([
                        method.as_str(),
                        &amr_s,
                        &format!("{:.6}", m.map),
                        &format!("{:.6}", m.accuracy),
                        &m.dominance,
                        &seed,
                        "ok",
                    ])
                    .map_err(io)?,
                Err(e) => w
                    .write_record([method.as_str(), &amr_s, "", "", "", &seed, &format!("failed: {e}")])
                    .map_err(io)?,
            }
        }
        let ok: Vec<&MetricsReport> = rows.iter().filter_map(|r| r.outcome.as_ref().ok()).collect();
        if ok.len() > 1 {
            let maps: Vec<f64> = ok.iter().map(|m| m.map).collect();
            let accs: Vec<f64> = ok.iter().map(|m| m.accuracy).collect();
            let m = ok[0].attribution.len();
            let mean_attr: Vec<f64> = (0..m)
                .map(|i| ok.iter().map(|r| r.attribution[i]).sum::<f64>() / ok.len() as f64)
                .collect();
            w.write_record([
                method.as_str(),
                &amr.to_string(),
                &mean_std(&maps),
                &mean_std(&accs),
                &dominance_string(&mean_attr),
                "aggregate",
                "ok",
            ])
            .map_err(io)?;
        }
    }
    let bytes = w.into_inner().map_err(|e| Error::Internal(e.to_string()))?;
    String::from_utf8(bytes).map_err(|e| Error::Internal(e.to_string()))
}

pub fn mean_and_std(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

fn mean_std(v: &[f64]) -> String {
    let (m, s) = mean_and_std(v);
    format!("{m:.6}±{s:.6}")
}
