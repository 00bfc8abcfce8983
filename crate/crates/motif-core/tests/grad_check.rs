//! End-to-end gradient checks: analytic reverse-mode gradients through the
//! full detection loss (and the baseline loss) against central finite
//! differences over every parameter.

use motif_core::dataset::TargetTensor;
use motif_core::loss::{
    baseline_loss, baseline_loss_grad, detection_loss, detection_loss_grad, LossWeights,
};
use motif_core::model::store::ParameterStore;
use motif_core::model::tensor::Tensor;
use motif_core::model::{BaselineConfig, BaselineNet, DetectorConfig, DetectorNet};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// CQT-like ridges plus jitter. The jitter keeps max-pool tie margins and
/// leaky-ReLU pre-activations far from the finite-difference step size.
fn ridged_input(seed: u64, freq: usize, time: usize) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut x = Tensor::zeros(&[1, freq, time]);
    let mut ridges = Vec::new();
    for _ in 0..6 {
        ridges.push((
            rng.gen_range(2.0..freq as f64 - 2.0),
            rng.gen_range(0.1 * time as f64..0.9 * time as f64),
            rng.gen_range(0.05 * time as f64..0.2 * time as f64),
            rng.gen_range(2.0..6.0),
        ));
    }
    for b in 0..freq {
        for t in 0..time {
            let mut v = 0.05;
            for (rb, rt, st, sb) in &ridges {
                let db = (b as f64 - rb) / sb;
                let dt = (t as f64 - rt) / st;
                v += 0.4 * (-db * db - dt * dt).exp();
            }
            v += rng.gen_range(-0.02..0.02);
            *x.at3_mut(0, b, t) = v.clamp(0.0, 1.0);
        }
    }
    x
}

// The 1e-5 floor keeps the metric meaningful where the true gradient is
// near zero: central differences at h = 1e-5 carry ~1e-10 of cancellation
// noise at these loss magnitudes.
fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-5)
}

fn fd_check_detector(seed: u64) -> (f64, usize) {
    let cfg = DetectorConfig {
        n_anchors: 2,
        n_classes: 2,
        in_freq: 32,
        in_time: 120,
        channels: vec![2, 3, 4, 5, 6],
        convs_per_block: 1,
        ..Default::default()
    };
    let (net, mut ps) = DetectorNet::new(&cfg, seed).unwrap();
    let n_params = ps.count_params();
    assert!(n_params <= 5000, "grad-check model has {n_params} params");

    let x = ridged_input(seed ^ 0xabcd, 32, 120);
    let weights = LossWeights::default();
    let mut target = TargetTensor::empty(2, 11, 2);
    target.set_cell(0, 3, 0.4, -0.2, 1);
    target.set_cell(1, 7, 0.8, 0.3, 0);
    target.set_ignored(0, 4);
    target.set_ignored(1, 8);

    let (pred, tape) = net.forward_taped(&ps, &x).unwrap();
    let grad_pred = detection_loss_grad(&pred, &target, &weights).unwrap();
    let analytic = net.backward(&ps, &tape, &grad_pred);

    let h = 1e-5;
    let mut max_rel = 0.0f64;
    let mut worst = (0usize, 0usize, 0.0f64, 0.0f64);
    for ti in 0..ps.n_tensors() {
        for i in 0..ps.tensors()[ti].len() {
            let orig = ps.tensors()[ti].data()[i];
            ps.tensors_mut()[ti].data_mut()[i] = orig + h;
            let plus = detection_loss(&net.forward(&ps, &x).unwrap(), &target, &weights)
                .unwrap()
                .total;
            ps.tensors_mut()[ti].data_mut()[i] = orig - h;
            let minus = detection_loss(&net.forward(&ps, &x).unwrap(), &target, &weights)
                .unwrap()
                .total;
            ps.tensors_mut()[ti].data_mut()[i] = orig;
            let fd = (plus - minus) / (2.0 * h);
            let an = analytic.tensors()[ti].data()[i];
            let rel = relative_error(an, fd);
            if rel > max_rel {
                max_rel = rel;
                worst = (ti, i, an, fd);
            }
        }
    }
    if max_rel >= 1e-4 {
        eprintln!(
            "worst entry: tensor {} index {} analytic {:.6e} fd {:.6e}",
            worst.0, worst.1, worst.2, worst.3
        );
    }
    (max_rel, n_params)
}

#[test]
fn detector_gradients_match_finite_differences() {
    let (max_rel, n_params) = fd_check_detector(2024);
    assert!(
        max_rel < 1e-4,
        "max relative error {max_rel:.3e} over {n_params} params"
    );
}

#[test]
fn baseline_gradients_match_finite_differences() {
    let cfg = BaselineConfig {
        n_classes: 2,
        in_freq: 32,
        in_time: 120,
        channels: vec![2, 3],
        convs_per_block: 1,
        ..Default::default()
    };
    let (net, mut ps) = BaselineNet::new(&cfg, 5).unwrap();
    let x = ridged_input(91, 32, 120);
    let mut labels = Tensor::zeros(&[2, 120]);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for v in labels.data_mut() {
        *v = if rng.gen_bool(0.3) { 1.0 } else { 0.0 };
    }

    let (logits, tape) = net.forward_taped(&ps, &x).unwrap();
    let grad_logits = baseline_loss_grad(&logits, &labels).unwrap();
    let analytic = net.backward(&ps, &tape, &grad_logits);

    let h = 1e-5;
    let mut max_rel = 0.0f64;
    for ti in 0..ps.n_tensors() {
        for i in 0..ps.tensors()[ti].len() {
            let orig = ps.tensors()[ti].data()[i];
            ps.tensors_mut()[ti].data_mut()[i] = orig + h;
            let plus = baseline_loss(&net.forward(&ps, &x).unwrap(), &labels).unwrap();
            ps.tensors_mut()[ti].data_mut()[i] = orig - h;
            let minus = baseline_loss(&net.forward(&ps, &x).unwrap(), &labels).unwrap();
            ps.tensors_mut()[ti].data_mut()[i] = orig;
            let fd = (plus - minus) / (2.0 * h);
            let an = analytic.tensors()[ti].data()[i];
            max_rel = max_rel.max(relative_error(an, fd));
        }
    }
    assert!(max_rel < 1e-4, "max relative error {max_rel:.3e}");
}

#[test]
fn zero_output_gradient_means_zero_parameter_gradients() {
    let cfg = DetectorConfig {
        n_anchors: 2,
        n_classes: 2,
        in_freq: 32,
        in_time: 120,
        channels: vec![2, 3],
        convs_per_block: 1,
        ..Default::default()
    };
    let (net, ps) = DetectorNet::new(&cfg, 1).unwrap();
    let x = ridged_input(17, 32, 120);
    let (pred, tape) = net.forward_taped(&ps, &x).unwrap();
    let grads = net.backward(&ps, &tape, &Tensor::zeros(pred.shape()));
    for t in grads.tensors() {
        assert!(t.data().iter().all(|v| *v == 0.0));
    }
}

#[test]
fn single_linear_layer_gradient_closed_form() {
    // one 1x1 conv and nothing else: dL/dw = sum_t x_t * g_t, dL/db = sum g
    let mut ps = ParameterStore::new();
    let w = ps.register("w", Tensor::from_vec(&[1, 1, 1, 1], vec![0.7]));
    let b = ps.register("b", Tensor::from_vec(&[1], vec![0.1]));
    let conv = motif_core::model::layers::Conv2d {
        weight: w,
        bias: Some(b),
        in_ch: 1,
        out_ch: 1,
        kernel: 1,
    };
    let x = Tensor::from_vec(&[1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]);
    let gy = Tensor::from_vec(&[1, 2, 2], vec![0.5, -1.0, 0.25, 2.0]);
    let mut grads = ps.new_gradients();
    let gx = conv.backward(&ps, &x, &gy, &mut grads);
    let expect_w: f64 = x.data().iter().zip(gy.data()).map(|(a, b)| a * b).sum();
    let expect_b: f64 = gy.data().iter().sum();
    assert!((grads.tensor(w).data()[0] - expect_w).abs() < 1e-12);
    assert!((grads.tensor(b).data()[0] - expect_b).abs() < 1e-12);
    for (g, y) in gx.data().iter().zip(gy.data()) {
        assert!((g - 0.7 * y).abs() < 1e-12);
    }
}
