//! Modality attribution at the encoding layer.
//!
//! For each sample the score `s` is one pre-softmax logit (the argmax by
//! default, held fixed). The attribution vector for modality `m` is
//! `(∂s/∂e^m) ⊙ e^m`; it is L2-pooled to a scalar per modality, normalized to
//! sum to one across modalities, then averaged over the batch.
//!
//! Every step is expressed in graph ops so callers that pass
//! `create_graph = true` can differentiate the attribution itself.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ForwardOptions, MultimodalModel};
use crate::tensor::{Graph, Tensor, Var};

/// Row sums below this are treated as degenerate and replaced by `1/M`.
pub const DEGENERATE_EPS: f64 = 1e-12;

/// Which logit is attributed.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttributedLogit {
    /// `max f(e)`, the predicted class.
    #[default]
    Predicted,
    /// The logit of the true label.
    TrueLabel,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AttributionReport {
    /// `[batch × M]`, rows sum to one.
    pub per_sample: Tensor,
    /// Column means of `per_sample`.
    pub batch_mean: Vec<f64>,
    /// `[batch × M]` pooled attributions before normalization.
    pub raw_pooled: Tensor,
    pub degenerate_count: usize,
}

impl AttributionReport {
    pub fn dominance(&self) -> String {
        dominance_string(&self.batch_mean)
    }
}

/// Graph-level result of the attribution pipeline.
#[derive(Clone, Debug)]
pub struct AttributionVars {
    pub per_modality: Vec<Var>,
    pub pooled: Var,
    pub per_sample: Var,
    pub batch_mean: Var,
    pub degenerate_count: usize,
}

/// `α^m = (∂s/∂e^m) ⊙ e^m` for every modality, each `[batch × encoding_dim]`.
///
/// `encodings` must be differentiable vars in `g`. `labels` is only read in
/// [`AttributedLogit::TrueLabel`] mode.
pub fn grad_times_input(
    g: &mut Graph,
    model: &MultimodalModel,
    params: &[Var],
    encodings: &[Var],
    mode: AttributedLogit,
    labels: Option<&[usize]>,
    create_graph: bool,
) -> Result<Vec<Var>> {
    let logits = model.head(g, params, encodings, &ForwardOptions::default())?;
    let picked = match mode {
        AttributedLogit::Predicted => g.max_with_argmax(logits, 1)?.0,
        AttributedLogit::TrueLabel => {
            let labels = labels
                .ok_or_else(|| Error::Input("true-label attribution needs labels".into()))?;
            let onehot = crate::tensor::one_hot(labels, model.num_classes())?;
            if onehot.rows() != g.shape(logits)[0] {
                return Err(Error::Input("label count does not match batch".into()));
            }
            let onehot = g.constant(onehot);
            let p = g.mul(logits, onehot)?;
            g.sum(p, 1)?
        }
    };
    // Samples are independent, so the gradient of the batch sum gives every
    // sample's own ∂s_i/∂e_i.
    let score = g.sum_all(picked)?;
    let grads = g.backward(score, encodings, create_graph)?;
    grads
        .into_iter()
        .zip(encodings)
        .map(|(d, &e)| g.mul(d, e))
        .collect()
}

/// L2-pools each `[batch × d]` attribution into a `[batch × M]` matrix.
pub fn pool_l2(g: &mut Graph, alphas: &[Var]) -> Result<Var> {
    let cols = alphas
        .iter()
        .map(|&a| {
            let n = g.l2_norm(a, 1)?;
            g.expand(n, 1, 1)
        })
        .collect::<Result<Vec<_>>>()?;
    if cols.len() == 1 {
        Ok(cols[0])
    } else {
        g.concat(&cols, 1)
    }
}

/// Divides each row by its sum; rows summing below [`DEGENERATE_EPS`] become
/// uniform and are counted.
pub fn normalize_per_sample(g: &mut Graph, pooled: Var) -> Result<(Var, usize)> {
    let value = g.value(pooled);
    if value.rank() != 2 {
        return Err(Error::Dimension("pooled attributions must be [batch × M]".into()));
    }
    if value.data().iter().any(|&v| v < 0.0) {
        return Err(Error::Internal("negative pooled attribution".into()));
    }
    let (rows, m) = (value.rows(), value.cols());
    let mut keep = Vec::with_capacity(rows);
    let mut fill = Vec::with_capacity(rows * m);
    let mut degenerate = 0;
    for r in 0..rows {
        let s: f64 = value.row(r).iter().sum();
        let ok = s >= DEGENERATE_EPS;
        degenerate += usize::from(!ok);
        keep.push(if ok { 1.0 } else { 0.0 });
        fill.extend(std::iter::repeat_n(if ok { 0.0 } else { 1.0 / m as f64 }, m));
    }
    let keep = g.constant(Tensor::vector(keep));
    let fill = g.constant(Tensor::new(vec![rows, m], fill)?);
    let sums = g.sum(pooled, 1)?;
    let inv = g.recip(sums)?;
    let inv = g.mul(inv, keep)?;
    let inv = g.expand(inv, 1, m)?;
    let scaled = g.mul(pooled, inv)?;
    Ok((g.add(scaled, fill)?, degenerate))
}

/// Column mean of normalized rows.
pub fn aggregate_batch(g: &mut Graph, per_sample: Var) -> Result<Var> {
    if g.shape(per_sample).first().copied().unwrap_or(0) == 0 {
        return Err(Error::Input("cannot aggregate an empty batch".into()));
    }
    g.mean(per_sample, 0)
}

/// Full pipeline on graph vars.
pub fn attribution_vars(
    g: &mut Graph,
    model: &MultimodalModel,
    params: &[Var],
    encodings: &[Var],
    mode: AttributedLogit,
    labels: Option<&[usize]>,
    create_graph: bool,
) -> Result<AttributionVars> {
    let per_modality =
        grad_times_input(g, model, params, encodings, mode, labels, create_graph)?;
    let pooled = pool_l2(g, &per_modality)?;
    let (per_sample, degenerate_count) = normalize_per_sample(g, pooled)?;
    let batch_mean = aggregate_batch(g, per_sample)?;
    Ok(AttributionVars {
        per_modality,
        pooled,
        per_sample,
        batch_mean,
        degenerate_count,
    })
}

/// Attribution report for raw inputs, without keeping any graph.
pub fn attribute(
    model: &MultimodalModel,
    inputs: &[Tensor],
    mode: AttributedLogit,
    labels: Option<&[usize]>,
) -> Result<AttributionReport> {
    let mut g = Graph::new();
    let params = model.bind(&mut g, |_| false);
    let xs: Vec<Var> = inputs.iter().map(|x| g.constant(x.clone())).collect();
    let enc = model.encode(&mut g, &params, &xs, &ForwardOptions::default())?;
    attribute_encodings(model, &enc.iter().map(|&e| g.value(e).clone()).collect::<Vec<_>>(), mode, labels)
}

/// Attribution report starting from given encodings; the encoder is not
/// involved at all.
pub fn attribute_encodings(
    model: &MultimodalModel,
    encodings: &[Tensor],
    mode: AttributedLogit,
    labels: Option<&[usize]>,
) -> Result<AttributionReport> {
    let mut g = Graph::new();
    let params = model.bind(&mut g, |_| false);
    let enc: Vec<Var> = encodings.iter().map(|e| g.leaf(e.clone())).collect();
    let vars = attribution_vars(&mut g, model, &params, &enc, mode, labels, false)?;
    Ok(AttributionReport {
        per_sample: g.value(vars.per_sample).clone(),
        batch_mean: g.value(vars.batch_mean).data().to_vec(),
        raw_pooled: g.value(vars.pooled).clone(),
        degenerate_count: vars.degenerate_count,
    })
}

/// Integer percentages joined by `/`; rounding residue goes to the largest
/// component so the entries sum to 100.
pub fn dominance_string(a: &[f64]) -> String {
    let mut pct: Vec<i64> = a.iter().map(|v| (v * 100.0).round() as i64).collect();
    let residue = 100 - pct.iter().sum::<i64>();
    if let Some(largest) = (0..a.len()).reduce(|best, i| if a[i] > a[best] { i } else { best }) {
        pct[largest] += residue;
    }
    pct.iter()
        .map(|p| p.to_string())
        .collect::<Vec<_>>()
        .join("/")
}
