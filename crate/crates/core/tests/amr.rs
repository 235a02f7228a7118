mod common;

use amrlab::amr::{amr_gradients, amr_loss, amr_loss_value, amr_step, combined_training_step, AttributionTarget};
use amrlab::attribution::{attribute, AttributedLogit};
use amrlab::baselines::{naive_step, StrategyConfig, StrategyKind, StrategyRunner};
use amrlab::data::MultimodalBatch;
use amrlab::model::{ModelConfig, MultimodalModel, ParamGroup};
use amrlab::optim::Sgd;
use amrlab::tensor::{Graph, Tensor};
use amrlab::Error;
use common::*;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn loss_at(model: &MultimodalModel, inputs: &[Tensor], labels: &[usize], target: &AttributionTarget) -> f64 {
    amr_gradients(model, inputs, labels, target).unwrap().0.loss
}

#[test]
fn spec_examples() {
    assert_eq!(amr_loss_value(&[0.5, 0.5], &[1.0, 1.0]).unwrap(), 0.0);
    assert!((amr_loss_value(&[0.74, 0.26], &[1.0, 1.0]).unwrap() - 0.48).abs() < 1e-12);
    assert!((amr_loss_value(&[0.2, 0.8], &[1.0, 3.0]).unwrap() - 0.10).abs() < 1e-12);
    assert!(matches!(amr_loss_value(&[0.5, 0.5], &[1.0, 1.0, 1.0]), Err(Error::Input(_))));
}

#[test]
fn gradient_through_second_order_path_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let mut checked = 0;
    while checked < 24 {
        let m = rng.random_range(2..4);
        let model = random_model(&mut rng, m);
        let n = rng.random_range(2..6);
        let inputs = random_inputs(&mut rng, &model, n);
        let labels = random_labels(&mut rng, n, model.num_classes());
        let ratios: Vec<f64> = (0..m).map(|_| rng.random_range(0.5..2.0)).collect();
        let mut target = AttributionTarget::new(ratios, 1.0);
        target.use_per_sample = checked % 3 == 0;
        let (report, grads) = amr_gradients(&model, &inputs, &labels, &target).unwrap();
        if report.degenerate_count > 0 {
            continue;
        }
        let h = 1e-6;
        let mut ad = Vec::new();
        let mut fd = Vec::new();
        for (idx, grad) in &grads {
            for k in 0..grad.numel() {
                let mut plus = model.clone();
                plus.params_mut()[*idx].data_mut()[k] += h;
                let mut minus = model.clone();
                minus.params_mut()[*idx].data_mut()[k] -= h;
                let d = (loss_at(&plus, &inputs, &labels, &target) - loss_at(&minus, &inputs, &labels, &target)) / (2.0 * h);
                fd.push(d);
                ad.push(grad.data()[k]);
            }
        }
        let err = rel_err(&ad, &fd);
        let norm = ad.iter().chain(&fd).map(|v| v * v).sum::<f64>().sqrt();
        if norm < 1e-4 {
            // Locally flat loss (e.g. one active modality per sample); the
            // comparison would only measure finite-difference noise.
            continue;
        }
        assert!(err < 1e-3, "model {checked}: rel err {err}");
        checked += 1;
    }
}

#[test]
fn gradients_cover_exactly_the_fusion_classifier_group() {
    let mut rng = ChaCha8Rng::seed_from_u64(32);
    let model = random_model(&mut rng, 3);
    let inputs = random_inputs(&mut rng, &model, 4);
    let labels = random_labels(&mut rng, 4, model.num_classes());
    let (_, grads) = amr_gradients(&model, &inputs, &labels, &AttributionTarget::new(vec![1.0; 3], 1.0)).unwrap();
    let idx: Vec<usize> = grads.iter().map(|g| g.0).collect();
    assert_eq!(idx, model.param_groups().fusion_classifier);
}

#[test]
fn ratio_scale_does_not_matter() {
    let mut rng = ChaCha8Rng::seed_from_u64(33);
    for _ in 0..10 {
        let model = random_model(&mut rng, 2);
        let inputs = random_inputs(&mut rng, &model, 5);
        let labels = random_labels(&mut rng, 5, model.num_classes());
        let (r1, g1) = amr_gradients(&model, &inputs, &labels, &AttributionTarget::new(vec![1.0, 1.0], 1.0)).unwrap();
        let (r7, g7) = amr_gradients(&model, &inputs, &labels, &AttributionTarget::new(vec![7.0, 7.0], 1.0)).unwrap();
        assert_eq!(r1.loss, r7.loss);
        for ((_, a), (_, b)) in g1.iter().zip(&g7) {
            assert_eq!(a, b);
        }
    }
}

/// Two scalar modalities, one unit each, straight into a linear classifier.
fn toy(w0: f64, w1: f64) -> MultimodalModel {
    let mut model = MultimodalModel::init(ModelConfig {
        modality_dims: vec![1, 1],
        encoding_dim: 1,
        encoder_hidden: vec![],
        fusion: Default::default(),
        fusion_dim: Some(2),
        classifier_hidden: vec![],
        num_classes: 2,
        init_seed: 0,
        aux_heads: false,
    })
    .unwrap();
    let info = model.param_info();
    let fusion = model.fusion_weight_index();
    for (i, (t, inf)) in model.params_mut().into_iter().zip(info).enumerate() {
        let data = t.data_mut();
        data.fill(0.0);
        if inf.group == ParamGroup::Encoder && inf.name.contains("weight") {
            data[0] = 1.0;
        }
        if i == fusion {
            // Row m feeds logit 0 with weight w_m.
            data.copy_from_slice(&[w0, 0.0, w1, 0.0]);
        }
    }
    let last = model.classifier_mut().last_mut().unwrap();
    last.weight.data_mut().copy_from_slice(&[1.0, 0.0, 0.0, 1.0]);
    model
}

#[test]
fn one_small_step_reduces_the_loss_on_a_dominated_toy() {
    let model = toy(0.9, 0.1);
    let inputs = [Tensor::new(vec![1, 1], vec![1.0]).unwrap(), Tensor::new(vec![1, 1], vec![1.0]).unwrap()];
    let labels = [0];
    let target = AttributionTarget::new(vec![1.0, 1.0], 1.0);
    let a = attribute(&model, &inputs, AttributedLogit::Predicted, None).unwrap().batch_mean;
    assert!((a[0] - 0.9).abs() < 1e-12 && (a[1] - 0.1).abs() < 1e-12, "{a:?}");
    let before = loss_at(&model, &inputs, &labels, &target);
    let (_, grads) = amr_gradients(&model, &inputs, &labels, &target).unwrap();
    let mut decreased = Vec::new();
    for lr in [1e-1, 3e-2, 1e-2, 3e-3, 1e-3, 1e-4] {
        let mut stepped = model.clone();
        Sgd::new(lr, 0.0).unwrap().step(&mut stepped, &grads).unwrap();
        decreased.push(loss_at(&stepped, &inputs, &labels, &target) < before);
    }
    assert!(decreased.iter().all(|&d| d), "{decreased:?}");
}

#[test]
fn zero_lambda_and_on_target_steps_change_nothing() {
    let mut rng = ChaCha8Rng::seed_from_u64(34);
    let mut model = random_model(&mut rng, 2);
    let inputs = random_inputs(&mut rng, &model, 5);
    let labels = random_labels(&mut rng, 5, model.num_classes());
    let before = all_bits(&model);
    let mut opt = Sgd::new(0.1, 0.0).unwrap();
    let rep = amr_step(&mut model, &inputs, &labels, &AttributionTarget::new(vec![1.0, 1.0], 0.0), &mut opt).unwrap();
    assert!(rep.loss > 0.0);
    assert_eq!(all_bits(&model), before);

    let mut balanced = toy(0.5, 0.5);
    let inputs = [Tensor::new(vec![1, 1], vec![1.0]).unwrap(), Tensor::new(vec![1, 1], vec![1.0]).unwrap()];
    let before = all_bits(&balanced);
    let rep = amr_step(&mut balanced, &inputs, &[0], &AttributionTarget::new(vec![1.0, 1.0], 1.0), &mut opt).unwrap();
    assert_eq!(rep.loss, 0.0);
    assert_eq!(all_bits(&balanced), before);
}

#[test]
fn combined_step_with_zero_lambda_matches_naive() {
    let mut rng = ChaCha8Rng::seed_from_u64(35);
    let model = random_model(&mut rng, 2);
    let (mut a, mut b) = (model.clone(), model);
    let (mut oa, mut ob) = (Sgd::new(0.05, 0.9).unwrap(), Sgd::new(0.05, 0.9).unwrap());
    let mut amr_opt = Sgd::new(0.01, 0.0).unwrap();
    let target = AttributionTarget::new(vec![1.0, 1.0], 0.0);
    for _ in 0..20 {
        let inputs = random_inputs(&mut rng, &a, 6);
        let labels = random_labels(&mut rng, 6, a.num_classes());
        let batch = MultimodalBatch { inputs, labels };
        let la = naive_step(&mut a, &batch, &mut oa).unwrap();
        let rb = combined_training_step(&mut b, &batch, &mut ob, &target, &mut amr_opt).unwrap();
        assert_eq!(la.to_bits(), rb.task_loss.to_bits());
        assert_eq!(all_bits(&a), all_bits(&b));
    }
}

#[test]
fn strategies_composed_with_amr_keep_the_encoder_out_of_the_amr_update() {
    let mut rng = ChaCha8Rng::seed_from_u64(36);
    let kinds = [
        StrategyKind::Naive,
        StrategyKind::Dropout { p: 0.3 },
        StrategyKind::ModalityDropout { p: 0.3 },
        StrategyKind::Ogm { alpha: 1.0 },
    ];
    for kind in kinds {
        let mut model = random_model(&mut rng, 2);
        let mut runner = StrategyRunner::new(StrategyConfig { kind: kind.clone(), seed: 3 });
        let mut task = Sgd::new(0.05, 0.9).unwrap();
        let mut aux = Sgd::new(0.01, 0.0).unwrap();
        let target = AttributionTarget::new(vec![1.0, 1.0], 1.0);
        for _ in 0..5 {
            let inputs = random_inputs(&mut rng, &model, 6);
            let labels = random_labels(&mut rng, 6, model.num_classes());
            runner.step(&mut model, &MultimodalBatch { inputs: inputs.clone(), labels: labels.clone() }, &mut task).unwrap();
            let enc = group_bits(&model, ParamGroup::Encoder);
            amr_step(&mut model, &inputs, &labels, &target, &mut aux).unwrap();
            assert_eq!(group_bits(&model, ParamGroup::Encoder), enc, "{kind:?}");
        }
    }
}

#[test]
fn target_validation() {
    assert!(matches!(AttributionTarget::new(vec![1.0], 1.0).validate(1), Err(Error::Config(_))));
    assert!(matches!(AttributionTarget::new(vec![1.0, 0.0], 1.0).validate(2), Err(Error::Config(_))));
    assert!(matches!(AttributionTarget::new(vec![1.0, 1.0], -1.0).validate(2), Err(Error::Config(_))));
    assert!(matches!(AttributionTarget::new(vec![1.0, 1.0, 1.0], 1.0).validate(2), Err(Error::Config(_))));
    assert!(AttributionTarget::new(vec![1.0, 2.0], 0.0).validate(2).is_ok());
}

#[test]
fn batched_loss_is_mean_of_row_losses() {
    let rows = [[0.7, 0.3], [0.2, 0.8], [0.5, 0.5]];
    let mut g = Graph::new();
    let a = g.constant(Tensor::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap());
    let l = amr_loss(&mut g, a, &[1.0, 1.0]).unwrap();
    let want = rows.iter().map(|r| amr_loss_value(r, &[1.0, 1.0]).unwrap()).sum::<f64>() / 3.0;
    assert!((g.value(l).item() - want).abs() < 1e-15);
}

proptest! {
    #[test]
    fn loss_is_bounded(a in proptest::collection::vec(0.0f64..10.0, 2..6), seed in 0u64..1000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        prop_assume!(a.iter().sum::<f64>() > 1e-9);
        let r: Vec<f64> = a.iter().map(|_| rng.random_range(0.01..10.0)).collect();
        let l = amr_loss_value(&a, &r).unwrap();
        prop_assert!((0.0..=2.0).contains(&l));
        prop_assert_eq!(amr_loss_value(&a, &a).unwrap(), 0.0);
    }
}
