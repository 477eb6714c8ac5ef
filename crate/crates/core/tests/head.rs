use proptest::prelude::*;
use qhb_core::head::{softmax, DenseLayer, Optimizer, OptimizerKind, NUM_CLASSES};

fn logits() -> impl Strategy<Value = [f64; NUM_CLASSES]> {
    prop::array::uniform4(-30.0..30.0f64)
}

fn layer(n_in: usize, values: &[f64]) -> DenseLayer {
    let mut l = DenseLayer::zeros(n_in);
    l.weights.copy_from_slice(&values[..n_in * NUM_CLASSES]);
    l.bias.copy_from_slice(&values[n_in * NUM_CLASSES..]);
    l
}

fn loss(l: &DenseLayer, x: &[f64], label: usize) -> f64 {
    l.loss_and_backward(x, label).unwrap().loss
}

proptest! {
    #[test]
    fn softmax_sums_to_one_and_ignores_shifts(z in logits(), c in -100.0..100.0f64) {
        let p = softmax(&z);
        prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        let shifted = softmax(&z.map(|v| v + c));
        for (a, b) in p.iter().zip(&shifted) {
            prop_assert!((a - b).abs() < 1e-10);
        }
    }

    #[test]
    fn backward_matches_finite_differences(
        values in prop::collection::vec(-1.0..1.0f64, 4 * NUM_CLASSES + NUM_CLASSES),
        x in prop::collection::vec(-1.0..1.0f64, 4),
        label in 0usize..NUM_CLASSES,
    ) {
        let h = 1e-5;
        let l = layer(4, &values);
        let back = l.loss_and_backward(&x, label).unwrap();
        let mut analytic = back.d_weights.clone();
        analytic.extend_from_slice(&back.d_bias);
        for (i, a) in analytic.iter().enumerate() {
            let mut plus = values.clone();
            let mut minus = values.clone();
            plus[i] += h;
            minus[i] -= h;
            let fd = (loss(&layer(4, &plus), &x, label) - loss(&layer(4, &minus), &x, label)) / (2.0 * h);
            prop_assert!((a - fd).abs() < 1e-6, "param {}: {} vs {}", i, a, fd);
        }
        for (i, a) in back.cotangent.iter().enumerate() {
            let mut plus = x.clone();
            let mut minus = x.clone();
            plus[i] += h;
            minus[i] -= h;
            let fd = (loss(&l, &plus, label) - loss(&l, &minus, label)) / (2.0 * h);
            prop_assert!((a - fd).abs() < 1e-6, "input {}: {} vs {}", i, a, fd);
        }
    }

    #[test]
    fn zero_gradient_step_is_identity(
        params in prop::collection::vec(-5.0..5.0f64, 1..40),
        warmup in prop::collection::vec(-1.0..1.0f64, 40),
        adam in any::<bool>(),
    ) {
        let kind = if adam { OptimizerKind::Adam } else { OptimizerKind::Sgd };
        let n = params.len();
        let mut opt = Optimizer::new(kind, 0.01, n);
        let mut p = params.clone();
        let zero = vec![0.0; n];
        opt.step(&mut p, &zero).unwrap();
        prop_assert_eq!(&p, &params);
        opt.step(&mut p, &warmup[..n]).unwrap();
        prop_assert_eq!(opt.steps(), 2);
    }

    #[test]
    fn first_adam_step_moves_each_coordinate_by_lr(
        grads in prop::collection::vec(prop_oneof![-10.0..-1e-3f64, 1e-3..10.0f64], 1..20),
    ) {
        let mut opt = Optimizer::new(OptimizerKind::Adam, 0.01, grads.len());
        let mut p = vec![0.0; grads.len()];
        opt.step(&mut p, &grads).unwrap();
        for (d, g) in p.iter().zip(&grads) {
            prop_assert!((d + 0.01 * g.signum()).abs() < 1e-6);
        }
    }
}
