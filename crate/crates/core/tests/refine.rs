use qnet_core::activations::{calibrate_model, CalibConfig};
use qnet_core::netmodel::{
    forward_fp, forward_quant_batch, quantize_weights, Conv2d, ForwardMode, Layer, Linear, NetworkModel,
    WeightQuantConfig,
};
use qnet_core::refine::{grad_check, objective, refine_scales, RefineConfig};
use qnet_core::synthetic::{fixture_model, random_conv_net, random_linear_net, random_tensor, Dist, SyntheticTask};
use qnet_core::{Error, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn single() -> WeightQuantConfig {
    WeightQuantConfig {
        tau: f64::INFINITY,
        ..Default::default()
    }
}

fn xs_for(m: &NetworkModel, n: usize, seed: u64) -> Vec<Tensor> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| random_tensor(&mut rng, m.input_shape().to_vec(), Dist::Gaussian))
        .collect()
}

#[test]
fn zero_epochs_or_rate_is_a_no_op() {
    let m = fixture_model(0);
    let q = quantize_weights(&m, &single()).unwrap();
    let xs = SyntheticTask::new(1).batch(&mut ChaCha8Rng::seed_from_u64(0), 16).0;
    let (cq, _) = calibrate_model(&q, &xs, &CalibConfig::default()).unwrap();
    let before = forward_quant_batch(&cq, &xs, ForwardMode::FloatSim).unwrap();
    let (r0, t0) = refine_scales(
        &m,
        &cq,
        &xs,
        &RefineConfig {
            epochs: 0,
            ..Default::default()
        },
    )
    .unwrap();
    assert_eq!(r0, cq);
    assert_eq!(t0.objective.len(), 1);
    assert!((t0.objective[0] - objective(&m, &cq, &xs).unwrap()).abs() <= 1e-9 * t0.objective[0]);
    let (r1, t1) = refine_scales(
        &m,
        &cq,
        &xs,
        &RefineConfig {
            epochs: 2,
            learning_rate: 0.0,
            ..Default::default()
        },
    )
    .unwrap();
    assert_eq!(t1.objective.len(), 3);
    assert_eq!(forward_quant_batch(&r1, &xs, ForwardMode::FloatSim).unwrap(), before);
    assert_eq!(
        forward_quant_batch(&r1, &xs, ForwardMode::IntegerExact).unwrap(),
        forward_quant_batch(&cq, &xs, ForwardMode::IntegerExact).unwrap()
    );
}

#[test]
fn empty_calibration_is_rejected() {
    let m = fixture_model(0);
    let q = quantize_weights(&m, &single()).unwrap();
    assert_eq!(
        refine_scales(&m, &q, &[], &RefineConfig::default()).unwrap_err(),
        Error::EmptyCalibration
    );
}

#[test]
fn single_kernel_recovers_closed_form_gamma() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let w = random_tensor(&mut rng, vec![1, 20], Dist::Gaussian);
    let m = NetworkModel::new(vec![20], vec![Layer::Linear(Linear { weight: w, bias: None })]).unwrap();
    let q = quantize_weights(&m, &single()).unwrap();
    let x = random_tensor(&mut rng, vec![20], Dist::Gaussian);
    let y = forward_fp(&m, &x, false).unwrap().output.data()[0] as f64;
    let yq = forward_fp(&q.dequantized_model().unwrap(), &x, false)
        .unwrap()
        .output
        .data()[0] as f64;
    let target = y / yq;
    let cfg = RefineConfig {
        epochs: 200,
        batch_size: 1,
        learning_rate: 0.25 / (yq * yq),
        ..Default::default()
    };
    let (r, trace) = refine_scales(&m, &q, &[x], &cfg).unwrap();
    let gamma = r.plan(0).unwrap().gammas()[0];
    assert!((gamma - target).abs() <= 1e-4 * target.abs(), "{gamma} vs {target}");
    assert!(trace.objective.last().unwrap() < &trace.objective[0]);
}

#[test]
fn gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let m = random_linear_net(&mut rng, &[10, 8, 6, 4]);
    let q = quantize_weights(
        &m,
        &WeightQuantConfig {
            tau: 0.0,
            ..Default::default()
        },
    )
    .unwrap();
    let x = random_tensor(&mut rng, vec![10], Dist::Gaussian);
    assert!(grad_check(&m, &q, &x, 1e-4).unwrap() < 1e-5);

    for seed in 0..5 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let m = random_conv_net(&mut rng);
        let q = quantize_weights(&m, &single()).unwrap();
        let x = random_tensor(&mut rng, m.input_shape().to_vec(), Dist::Gaussian);
        let e = grad_check(&m, &q, &x, 1e-5).unwrap();
        assert!(e < 1e-4, "seed {seed}: {e}");
    }
}

#[test]
fn zero_weights_give_zero_gradient() {
    let w = Tensor::zeros(vec![2, 1, 3, 3]).unwrap();
    let m = NetworkModel::new(
        vec![1, 4, 4],
        vec![
            Layer::Conv2d(Conv2d {
                weight: w,
                bias: Some(vec![0.1, 0.2]),
                stride: 1,
                padding: 1,
            }),
            Layer::Relu,
        ],
    )
    .unwrap();
    let q = quantize_weights(&m, &single()).unwrap();
    let x = xs_for(&m, 1, 0).remove(0);
    assert_eq!(grad_check(&m, &q, &x, 1e-3).unwrap(), 0.0);
    assert!(grad_check(&m, &q, &x, 1.0).is_err());
}

#[test]
fn refinement_only_touches_gamma_and_reduces_objective() {
    let m = fixture_model(0);
    let q = quantize_weights(&m, &WeightQuantConfig::default()).unwrap();
    let xs = SyntheticTask::new(2).batch(&mut ChaCha8Rng::seed_from_u64(1), 64).0;
    let cfg = RefineConfig {
        calib_size: 64,
        epochs: 5,
        ..Default::default()
    };
    let (r, trace) = refine_scales(&m, &q, &xs, &cfg).unwrap();
    assert_eq!(trace.objective.len(), 6);
    assert!(trace.objective[5] < trace.objective[0], "{:?}", trace.objective);
    for ((_, a), (_, b)) in q.weighted_plans().zip(r.weighted_plans()) {
        for (ga, gb) in a.weight_terms.iter().zip(&b.weight_terms) {
            for (ta, tb) in ga.iter().zip(gb) {
                assert_eq!(
                    (ta.values(), ta.alpha(), ta.delta()),
                    (tb.values(), tb.alpha(), tb.delta())
                );
            }
        }
    }
    let (r2, trace2) = refine_scales(&m, &q, &xs, &cfg).unwrap();
    assert_eq!((r, trace), (r2, trace2));
}

#[test]
fn tiny_full_batch_step_does_not_increase_objective() {
    let m = fixture_model(0);
    let q = quantize_weights(&m, &single()).unwrap();
    let xs = SyntheticTask::new(2).batch(&mut ChaCha8Rng::seed_from_u64(2), 64).0;
    let cfg = RefineConfig {
        epochs: 1,
        batch_size: 64,
        learning_rate: 1e-6,
        ..Default::default()
    };
    let (_, trace) = refine_scales(&m, &q, &xs, &cfg).unwrap();
    assert!(trace.objective[1] <= trace.objective[0]);
}
