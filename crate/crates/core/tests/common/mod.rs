#![allow(dead_code)]

use amrlab::model::{ModelConfig, MultimodalModel, ParamGroup};
use amrlab::tensor::Tensor;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

pub fn normal_tensor(rng: &mut impl Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n).map(|_| StandardNormal.sample(&mut *rng)).collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

pub fn uniform_tensor(rng: &mut impl Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(lo..hi)).collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

/// Small model with `m` modalities and random widths.
pub fn random_model_config(rng: &mut impl Rng, m: usize) -> ModelConfig {
    let hidden = |rng: &mut dyn rand::RngCore, max_layers: usize| -> Vec<usize> {
        let layers = rng.random_range(0..=max_layers);
        (0..layers).map(|_| rng.random_range(2..7)).collect()
    };
    ModelConfig {
        modality_dims: (0..m).map(|_| rng.random_range(1..6)).collect(),
        encoding_dim: rng.random_range(2..5),
        encoder_hidden: hidden(rng, 2),
        fusion: Default::default(),
        fusion_dim: if rng.random::<bool>() { Some(rng.random_range(2..7)) } else { None },
        classifier_hidden: hidden(rng, 1),
        num_classes: rng.random_range(2..5),
        init_seed: rng.random(),
        aux_heads: false,
    }
}

pub fn random_model(rng: &mut impl Rng, m: usize) -> MultimodalModel {
    MultimodalModel::init(random_model_config(rng, m)).unwrap()
}

pub fn random_inputs(rng: &mut impl Rng, model: &MultimodalModel, n: usize) -> Vec<Tensor> {
    model
        .config()
        .modality_dims
        .iter()
        .map(|&d| normal_tensor(rng, &[n, d]))
        .collect()
}

pub fn random_labels(rng: &mut impl Rng, n: usize, classes: usize) -> Vec<usize> {
    (0..n).map(|_| rng.random_range(0..classes)).collect()
}

/// `‖a − b‖ / max(‖a‖, ‖b‖)`, zero when both vanish.
pub fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let diff: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let scale = norm(a).max(norm(b));
    if scale < 1e-12 {
        norm(&diff)
    } else {
        norm(&diff) / scale
    }
}

/// Bit patterns of every parameter in `group`.
pub fn group_bits(model: &MultimodalModel, group: ParamGroup) -> Vec<Vec<u64>> {
    model
        .params()
        .iter()
        .zip(model.param_info())
        .filter(|(_, info)| info.group == group)
        .map(|(t, _)| t.data().iter().map(|v| v.to_bits()).collect())
        .collect()
}

pub fn all_bits(model: &MultimodalModel) -> Vec<Vec<u64>> {
    model
        .params()
        .iter()
        .map(|t| t.data().iter().map(|v| v.to_bits()).collect())
        .collect()
}

/// Zeroes modality `m`'s rows of the fusion weight.
pub fn zero_fusion_rows(model: &mut MultimodalModel, m: usize) {
    let e = model.config().encoding_dim;
    let w = &mut model.fusion_mut().weight;
    let cols = w.cols();
    for r in m * e..(m + 1) * e {
        for c in 0..cols {
            w.data_mut()[r * cols + c] = 0.0;
        }
    }
}
