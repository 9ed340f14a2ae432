use equichk::diff::{self, fd_oracle, relative_error};
use equichk::identities::{check_first_order, CheckConfig};
use equichk::linalg::symmetric_eigen;
use equichk::transforms::{build_transform, TransformSpec};
use equichk::{
    build_model, compose, compose_k, invert_square, Architecture, Loss, Model, ModelSpec, Objective, Tensor,
};
use proptest::prelude::*;

fn matrix(rows: usize, cols: usize) -> impl Strategy<Value = Tensor> {
    prop::collection::vec(-2.0f64..2.0, rows * cols).prop_map(move |v| Tensor::from_vec([rows, cols], v).unwrap())
}

fn close(a: &Tensor, b: &Tensor, tol: f64) -> bool {
    relative_error(a, b, 1.0).unwrap() <= tol
}

fn model(arch: Architecture, input: Vec<f64>, seed: u64) -> Model {
    build_model(&ModelSpec::new(arch, Some(input), seed)).unwrap()
}

fn zoo() -> Vec<(Model, Loss)> {
    vec![
        (
            model(Architecture::HomogeneousReluMlp { widths: vec![3, 4, 2] }, vec![0.5, -1.0, 0.3], 1),
            Loss::square(&[0.2, -0.1]),
        ),
        (
            model(Architecture::DeepLinear { widths: vec![2, 3, 3, 1] }, vec![1.0, 0.4], 2),
            Loss::logistic(-1.0),
        ),
        (
            build_model(&ModelSpec::new(
                Architecture::FactoredLastLayer {
                    c: 3,
                    s: 2,
                    hidden: vec![2, 3],
                },
                None,
                3,
            ))
            .unwrap(),
            Loss::softmax_class(3, 0),
        ),
        (model(Architecture::ExpProbe { n: 2 }, vec![0.3, -0.6], 4), Loss::exponential(1.0)),
        (model(Architecture::EvenQuadratic, vec![1.0, -0.5, 0.8], 5), Loss::square(&[0.1])),
    ]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn compose_is_bilinear(f in matrix(3, 4), g in matrix(4, 2), h in matrix(4, 2), a in -3.0f64..3.0) {
        let lhs = compose(&g.scale(a).add(&h).unwrap(), &f).unwrap();
        let rhs = compose(&g, &f).unwrap().scale(a).add(&compose(&h, &f).unwrap()).unwrap();
        prop_assert!(close(&lhs, &rhs, 1e-13));
        let lhs = compose(&g, &f.scale(a)).unwrap();
        prop_assert!(close(&lhs, &compose(&g, &f).unwrap().scale(a), 1e-13));
    }

    #[test]
    fn compose_is_associative(f in matrix(2, 3), g in matrix(3, 4), h in matrix(4, 2)) {
        let left = compose(&compose(&h, &g).unwrap(), &f).unwrap();
        let right = compose(&h, &compose(&g, &f).unwrap()).unwrap();
        prop_assert!(close(&left, &right, 1e-13));
    }

    #[test]
    fn compose_k_on_first_axis_matches_transposed_compose(t in matrix(3, 2), m in matrix(4, 3)) {
        // contracting the leading axis of t with m equals m · t
        let a = compose_k(&t, &m, 1).unwrap();
        let b = compose(&t, &m).unwrap();
        prop_assert!(close(&a, &b, 1e-13));
    }

    #[test]
    fn inverse_round_trips(m in matrix(3, 3)) {
        if let Ok(inv) = invert_square(&m) {
            let id = compose(&inv, &m).unwrap();
            let cond = m.norm() * inv.norm();
            prop_assert!(id.distance(&Tensor::identity(3)).unwrap() <= 1e-12 * cond.max(1.0));
        }
    }

    #[test]
    fn positively_homogeneous_models(seed in 0u64..1000, s in 0.1f64..4.0) {
        for (arch, m) in [
            (Architecture::HomogeneousReluMlp { widths: vec![3, 5, 1] }, 2),
            (Architecture::DeepLinear { widths: vec![3, 2, 2, 1] }, 3),
            (Architecture::LinearProbe { n: 3 }, 1),
        ] {
            let mdl = model(arch, vec![0.7, -0.2, 1.1], seed);
            let theta: Vec<f64> = mdl.init.clone();
            let scaled: Vec<f64> = theta.iter().map(|t| s * t).collect();
            let y = mdl.forward(&theta).unwrap()[0];
            let ys = mdl.forward(&scaled).unwrap()[0];
            prop_assert!((ys - s.powi(m) * y).abs() <= 1e-12 * (1.0 + ys.abs()));
        }
    }

    #[test]
    fn exact_derivatives_agree_with_finite_differences(index in 0usize..5, seed in 0u64..1000) {
        use rand::SeedableRng;
        let (mdl, loss) = zoo().swap_remove(index);
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let theta = mdl.sample_position(&mut rng).unwrap();
        // the second-order stencil reaches ~1e-4 from θ; it must not cross a ReLU kink
        prop_assume!(mdl.kink_distance(&theta).is_none_or(|k| k > 1e-2));
        let obj = Objective::single(&mdl, &loss).unwrap();
        let exact = diff::derivatives(&obj, &theta).unwrap();
        let j = fd_oracle(&obj, &theta, 1, 1.0).unwrap();
        let h = fd_oracle(&obj, &theta, 2, 1.0).unwrap();
        prop_assert!(relative_error(&exact.jacobian, &j, 1.0).unwrap() <= 1e-6);
        prop_assert!(relative_error(&exact.hessian, &h, 1.0).unwrap() <= 1e-4);
    }

    #[test]
    fn chain_rule_for_loss_gradient(index in 0usize..5, seed in 0u64..1000) {
        use rand::SeedableRng;
        let (mdl, loss) = zoo().swap_remove(index);
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let theta = mdl.sample_position(&mut rng).unwrap();
        let obj = Objective::single(&mdl, &loss).unwrap();
        let direct = diff::jacobian(&obj, &theta).unwrap().reshape([mdl.d()]).unwrap();
        let jf = diff::jacobian(&mdl, &theta).unwrap();
        let y = mdl.forward(&theta).unwrap();
        let chained = compose(&loss.grad_tensor(&y), &jf).unwrap();
        prop_assert!(close(&direct, &chained, 1e-12));
    }

    #[test]
    fn softmax_curvature_is_psd(y in prop::collection::vec(-20.0f64..20.0, 4), class in 0usize..4) {
        let loss = Loss::softmax_class(4, class);
        let eig = symmetric_eigen(&loss.hess(&y), 4).unwrap();
        prop_assert!(eig.values.iter().all(|v| *v >= -1e-12));
        // constant shifts of the logits are flat directions
        let h = loss.hess(&y);
        for r in 0..4 {
            prop_assert!(h[r * 4..(r + 1) * 4].iter().sum::<f64>().abs() <= 1e-12);
        }
    }

    #[test]
    fn loss_derivatives_match_finite_differences(y in -3.0f64..3.0, label in prop::bool::ANY) {
        let label = if label { 1.0 } else { -1.0 };
        for loss in [Loss::square(&[0.4]), Loss::exponential(label), Loss::logistic(label)] {
            let exact = diff::derivatives(&loss, &[y]).unwrap();
            prop_assert!((exact.jacobian.data()[0] - loss.grad(&[y])[0]).abs() <= 1e-12);
            prop_assert!((exact.hessian.data()[0] - loss.hess(&[y])[0]).abs() <= 1e-12);
            let fd = fd_oracle(&loss, &[y], 1, 1.0).unwrap();
            prop_assert!(relative_error(&exact.jacobian, &fd, 1.0).unwrap() <= 1e-8);
        }
    }

    #[test]
    fn rescaling_is_a_first_order_symmetry(seed in 0u64..1000) {
        use rand::SeedableRng;
        let mdl = model(Architecture::HomogeneousReluMlp { widths: vec![2, 3, 1] }, vec![0.9, -0.4], 7);
        let t = build_transform(
            &TransformSpec::LayerRescaling { block1: "W1".into(), block2: "W2".into() },
            &mdl,
        ).unwrap();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let theta = mdl.sample_position(&mut rng).unwrap();
        let r = check_first_order(&mdl, &Loss::logistic(1.0), &t, &theta, &[0.0], &CheckConfig::default()).unwrap();
        prop_assert!(r.pass, "{:?}", r);
        prop_assert!(r.lhs_norm <= 1e-12 * (1.0 + r.scale));
    }
}
