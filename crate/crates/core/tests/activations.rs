use qnet_core::activations::{
    activation_mse, calibrate_activation_scale, calibrate_layer, calibrate_model, calibrate_residual_scale,
    collect_activations, collect_activations_capped, CalibConfig,
};
use qnet_core::netmodel::{quantize_weights, WeightQuantConfig};
use qnet_core::synthetic::{fixture_model, random_tensor, Dist, SyntheticTask};
use qnet_core::{Error, QuantScheme, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn calib(n: usize, seed: u64) -> Vec<Tensor> {
    let task = SyntheticTask::new(7);
    task.batch(&mut ChaCha8Rng::seed_from_u64(seed), n).0
}

/// Direct MSE over a dense scale grid, independent of the library grid.
fn dense_scan(x: &Tensor, scheme: QuantScheme, n: usize) -> f64 {
    let (lo, hi) = scheme.range();
    let am = x.data().iter().fold(0.0f64, |m, v| m.max(v.abs() as f64)) / hi as f64;
    (1..=n)
        .map(|k| {
            let a = am * k as f64 / n as f64;
            x.data()
                .iter()
                .map(|&v| {
                    let q = (v as f64 / a).round().clamp(lo as f64, hi as f64);
                    (v as f64 - a * q).powi(2)
                })
                .sum::<f64>()
                / x.len() as f64
        })
        .fold(f64::INFINITY, f64::min)
}

#[test]
fn single_sample_and_identical_samples() {
    let m = fixture_model(0);
    let xs = calib(1, 0);
    let s = collect_activations(&m, &xs).unwrap();
    assert_eq!(s.samples, 1);
    assert_eq!(s.layers[&0].data.shape(), &[1, 1, 16, 16]);
    let twice = collect_activations(&m, &[xs[0].clone(), xs[0].clone()]).unwrap();
    for acts in twice.layers.values() {
        let half = acts.data.len() / 2;
        assert_eq!(acts.data.data()[..half], acts.data.data()[half..]);
    }
}

#[test]
fn fixture_calibration_shapes() {
    let m = fixture_model(0);
    let s = collect_activations(&m, &calib(250, 1)).unwrap();
    assert_eq!(s.layers[&0].data.shape(), &[250, 1, 16, 16]);
    assert_eq!(s.layers[&3].data.shape(), &[250, 16, 8, 8]);
    assert_eq!(s.layers[&7].data.shape(), &[250, 512]);
    assert_eq!(s.layers[&9].data.shape(), &[250, 64]);
}

#[test]
fn empty_and_mismatched_sets_are_rejected() {
    let m = fixture_model(0);
    assert_eq!(collect_activations(&m, &[]), Err(Error::EmptyCalibration));
    let bad = Tensor::zeros(vec![1, 8, 8]).unwrap();
    assert!(matches!(
        collect_activations(&m, &[bad]),
        Err(Error::ShapeMismatch { .. })
    ));
}

#[test]
fn reservoir_keeps_cap_elements_deterministically() {
    let m = fixture_model(0);
    let xs = calib(20, 2);
    let a = collect_activations_capped(&m, &xs, 2000, 3).unwrap();
    let b = collect_activations_capped(&m, &xs, 2000, 3).unwrap();
    assert_eq!(a, b);
    let l0 = &a.layers[&0];
    assert!(l0.subsampled);
    assert_eq!(l0.data.shape(), &[2000]);
    assert_eq!(l0.sample_max.len(), 20);
    assert!(!a.layers[&9].subsampled);
}

#[test]
fn heavy_tails_are_saturated() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let x = random_tensor(&mut rng, vec![64, 256], Dist::LogNormal);
    let s = calibrate_activation_scale(&x, QuantScheme::unsigned(4), 50).unwrap();
    assert!(s.beta1 * 15.0 < x.max() as f64);
}

#[test]
fn coarse_grid_is_close_to_dense_scan() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    for dist in [Dist::Gaussian, Dist::Laplace, Dist::HeavyTail] {
        let x = random_tensor(&mut rng, vec![32, 128], dist);
        let s = calibrate_activation_scale(&x, QuantScheme::signed(4), 50).unwrap();
        let best = dense_scan(&x, QuantScheme::signed(4), 5000);
        assert!(s.mse <= 1.02 * best, "{dist:?}: {} vs {best}", s.mse);
    }
}

#[test]
fn residual_never_hurts_and_minmax_never_wins() {
    let m = fixture_model(3);
    let stats = collect_activations(&m, &calib(64, 4)).unwrap();
    let cfg = CalibConfig::default();
    for (&i, acts) in &stats.layers {
        let (a, rep) = calibrate_layer(i, acts, true, &cfg).unwrap();
        let two = rep.mse_residual.unwrap();
        assert!(two <= rep.mse, "layer {i}");
        assert!(rep.mse <= rep.minmax_mse, "layer {i}");
        assert_eq!(activation_mse(&acts.data, &a, true), two);
        assert_eq!(activation_mse(&acts.data, &a, false), rep.mse);
    }
}

#[test]
fn exact_activations_disable_residual() {
    let x = Tensor::new(vec![2, 3], vec![0.0, 0.5, 1.0, 1.5, 2.0, 7.5]).unwrap();
    let s = calibrate_activation_scale(&x, QuantScheme::unsigned(4), 50).unwrap();
    assert_eq!(s.mse, 0.0);
    assert_eq!(
        calibrate_residual_scale(&x, s.beta1, s.delta, QuantScheme::unsigned(4), 50).unwrap(),
        None
    );
}

#[test]
fn calibration_is_deterministic_and_gated_by_key_layers() {
    let m = fixture_model(0);
    let q = quantize_weights(&m, &WeightQuantConfig::default()).unwrap();
    let xs = calib(32, 5);
    let (a, ra) = calibrate_model(&q, &xs, &CalibConfig::default()).unwrap();
    let (b, rb) = calibrate_model(&q, &xs, &CalibConfig::default()).unwrap();
    assert_eq!(a, b);
    assert_eq!(ra, rb);
    let keys = q.key_layers();
    for r in &ra {
        assert_eq!(r.beta2.is_some(), keys.contains(&r.layer), "layer {}", r.layer);
    }
    assert!(a.is_calibrated());
    // Post-relu inputs get an unsigned scheme; the raw input stays signed.
    assert!(ra[0].scheme.is_signed());
    assert!(!ra[1].scheme.is_signed());
}

#[test]
fn held_out_error_stays_close_to_fit_error() {
    let m = fixture_model(1);
    let xs = calib(200, 6);
    let fit = collect_activations(&m, &xs[..100]).unwrap();
    let held = collect_activations(&m, &xs[100..]).unwrap();
    for (&i, acts) in &fit.layers {
        let (a, rep) = calibrate_layer(i, acts, true, &CalibConfig::default()).unwrap();
        let out = activation_mse(&held.layers[&i].data, &a, true);
        assert!(out <= 3.0 * rep.mse_residual.unwrap(), "layer {i}");
    }
}
