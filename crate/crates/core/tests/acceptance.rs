//! Acceptance gate: one pass/fail line per criterion, nonzero exit on any
//! failure.

use std::time::Instant;

use equichk::diff::{self, fd_oracle, relative_error, GenericMap, Scalar};
use equichk::dynamics::{
    drift_theory, gradient_descent, gradient_flow, noether_drift_check, norm_growth_check, sgf, DescentConfig,
    DriftConfig, FlowConfig, NoiseMode, NoiseModel, NormGrowthStatus, QuadraticObjective, SgfConfig,
};
use equichk::identities::{
    check_eigen_alignment, check_last_layer_alignment, check_mirror, run_suite, sharpness_bound, stationary_null_count,
    CheckConfig, IdentityReport, Mutation, StationaryConfig, SuiteEntry, SuiteSpec,
};
use equichk::models::assembly_tolerance;
use equichk::transforms::{
    build_transform, derivative_certificates, noether_charge, DerivSlot, TransformKind,
    TransformSpec,
};
use equichk::{
    build_model, grad_and_hessian_of_loss, Architecture, Dataset, DiffConfig, DiffMode, Loss, LossFamily, Model,
    ModelSpec, Objective, Result, Sample,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<(bool, String)>;
type Criterion = (&'static str, fn() -> Outcome);

fn criterion_1() -> Outcome {
    let start = Instant::now();
    let mut worst = [0.0f64; 2];
    let mut count = 0;
    for (k, (diff, tol)) in [(DiffConfig::exact(), 1e-7), (DiffConfig::finite_difference(), 1e-4)]
        .into_iter()
        .enumerate()
    {
        let spec = SuiteSpec {
            positions: 20,
            diff,
            ..SuiteSpec::full_catalog()
        };
        let reports = run_suite(&spec)?;
        for r in reports
            .iter()
            .filter(|r| matches!(r.check_name.as_str(), "first_order" | "second_action" | "second_quadratic"))
        {
            count += 1;
            worst[k] = worst[k].max(r.rel_residual / tol);
        }
    }
    let secs = start.elapsed().as_secs_f64();
    Ok((
        worst[0] <= 1.0 && worst[1] <= 1.0 && secs < 60.0,
        format!(
            "{count} residuals, worst/tol exact {:.2e} fd {:.2e}, {secs:.1}s",
            worst[0], worst[1]
        ),
    ))
}

fn linear_probe(x: &[f64]) -> Result<Model> {
    build_model(&ModelSpec::new(Architecture::LinearProbe { n: x.len() }, Some(x.to_vec()), 0))
}

fn criterion_2() -> Outcome {
    let m = linear_probe(&[1.0, 2.0])?;
    let loss = Loss::square(&[2.0]);
    let theta = [3.0, -1.0];
    let cfg = CheckConfig::default();
    let ld = grad_and_hessian_of_loss(&m, &loss, &theta, &cfg.diff)?;
    let euler: f64 = ld.gradient.data().iter().zip(&theta).map(|(g, t)| g * t).sum();
    let action = ld.hessian.matvec(&theta)?;
    let quad: f64 = action.iter().zip(&theta).map(|(a, t)| a * t).sum();
    let (al, _) = check_eigen_alignment(&m, &loss, &theta, &cfg)?;
    let s = sharpness_bound(&m, &loss, &theta, &cfg)?;
    let errs = [
        (euler + 1.0).abs(),
        (action[0] - 1.0).abs(),
        (action[1] - 2.0).abs(),
        (quad - 1.0).abs(),
        (al.extra["alpha"] + 1.0).abs(),
        (s.bound - 0.1).abs(),
        (s.lambda_max - 5.0).abs(),
    ];
    let worst = errs.iter().copied().fold(0.0, f64::max);
    Ok((
        worst <= 1e-12 && s.bound <= s.lambda_max && al.pass,
        format!("Euler {euler}, action {action:?}, quadratic {quad}, α {}, bound {} ≤ λmax {}", al.extra["alpha"], s.bound, s.lambda_max),
    ))
}

fn deep_linear(widths: Vec<usize>, input: Vec<f64>, seed: u64) -> Result<Model> {
    build_model(&ModelSpec::new(Architecture::DeepLinear { widths }, Some(input), seed))
}

fn criterion_3() -> Outcome {
    let model = deep_linear(vec![2, 3, 2], vec![1.0, -0.5], 11)?;
    let obj = Objective::single(&model, &Loss::square(&[0.8, -0.3]))?;
    let rescale = build_transform(
        &TransformSpec::LayerRescaling {
            block1: "W1".into(),
            block2: "W2".into(),
        },
        &model,
    )?;
    let reparam = build_transform(
        &TransformSpec::LinearReparam {
            block_in: "W1".into(),
            block_out: "W2".into(),
            generator: vec![vec![0.5, 0.2, -0.1], vec![0.2, -0.3, 0.4], vec![-0.1, 0.4, 0.1]],
        },
        &model,
    )?;
    let charges = vec![noether_charge(&rescale)?, noether_charge(&reparam)?];
    let traj = gradient_flow(&obj, &model.init, &FlowConfig { t_end: 10.0, dt: 1e-2 }, &charges)?;
    let drift = charges
        .iter()
        .map(|c| traj.charge_drift(&c.name).unwrap_or(f64::INFINITY))
        .fold(0.0, f64::max);
    let gd = gradient_descent(
        &obj,
        &model.init,
        &DescentConfig { eta: 0.05, steps: 500 },
        &charges,
        &[rescale, reparam],
    )?;
    let orth = gd.summary["max_orthogonality"];
    let loss_drop = traj.losses[0] - traj.losses.last().copied().unwrap_or(0.0);
    Ok((
        drift <= 1e-8 && orth <= 1e-10 && loss_drop > 0.0,
        format!("GF charge drift {drift:.2e}, GD max normalized ⟨Δθ, X⟩ {orth:.2e}"),
    ))
}

fn classification_data() -> Result<Dataset> {
    Dataset::uniform(vec![
        Sample {
            input: vec![1.0, 0.5],
            target: vec![1.0],
        },
        Sample {
            input: vec![-0.8, 0.3],
            target: vec![-1.0],
        },
        Sample {
            input: vec![0.4, -1.0],
            target: vec![1.0],
        },
    ])
}

fn criterion_4() -> Outcome {
    // separable through the origin by w = (1, 0); the initial point is not
    let model = deep_linear(vec![2, 3, 1], vec![1.0, 0.5], 21)?;
    let obj = Objective::new(&model, LossFamily::Exponential, &classification_data()?)?;
    let traj = gradient_flow(&obj, &model.init, &FlowConfig { t_end: 20.0, dt: 1e-2 }, &[])?;
    let r = norm_growth_check(&obj, &traj, 1e-7)?;
    Ok((
        r.status == NormGrowthStatus::Ok && r.monotone && r.max_euler_rel <= 1e-7,
        format!(
            "status {:?}, t0 {:?}, max relative gap {:.2e}, monotone {}",
            r.status, r.t0, r.max_euler_rel, r.monotone
        ),
    ))
}

fn criterion_5() -> Outcome {
    let start = Instant::now();
    // inner-product form against trace form at random states
    let model = deep_linear(vec![2, 2, 1], vec![1.0, 0.0], 31)?;
    let samples = (0..4)
        .map(|i| {
            let a = f64::from(i) * 0.7;
            Sample {
                input: vec![a.cos(), a.sin()],
                target: vec![a.sin() - 0.3],
            }
        })
        .collect();
    let obj = Objective::new(&model, LossFamily::Square, &Dataset::uniform(samples)?)?;
    let rescale = build_transform(
        &TransformSpec::LayerRescaling {
            block1: "W1".into(),
            block2: "W2".into(),
        },
        &model,
    )?;
    let charge = noether_charge(&rescale)?;
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut worst: f64 = 0.0;
    for _ in 0..50 {
        let theta: Vec<f64> = (0..obj.d()).map(|_| rng.random_range(-1.5..1.5)).collect();
        let (t1, t2) = drift_theory(&obj, &charge, &theta, 0.01)?;
        worst = worst.max((t1 - t2).abs() / t1.abs().max(t2.abs()).max(1e-300));
    }

    // Monte-Carlo drift on f = w₂w₁x with x = 1 and targets ±1
    let mc_model = deep_linear(vec![1, 1, 1], vec![1.0], 0)?;
    let data = Dataset::uniform(vec![
        Sample {
            input: vec![1.0],
            target: vec![1.0],
        },
        Sample {
            input: vec![1.0],
            target: vec![-1.0],
        },
    ])?;
    let mc_obj = Objective::new(&mc_model, LossFamily::Square, &data)?;
    let mc_t = build_transform(
        &TransformSpec::LayerRescaling {
            block1: "W1".into(),
            block2: "W2".into(),
        },
        &mc_model,
    )?;
    let mc_charge = noether_charge(&mc_t)?;
    let noise = NoiseModel {
        mode: NoiseMode::ExactSde,
        sigma: 0.1,
        seed: 2024,
    };
    let cfg = SgfConfig {
        t_end: 0.5,
        dt: 1e-3,
        ensemble: 2000,
    };
    let ens = sgf(&mc_obj, &[1.0, 0.0], &noise, &cfg, std::slice::from_ref(&mc_charge))?;
    let rep = noether_drift_check(&ens, &mc_charge, &mc_obj, &DriftConfig::default())?;
    let secs = start.elapsed().as_secs_f64();
    let within = (rep.empirical - rep.theory).abs() <= 3.0 * rep.standard_error + rep.bias_budget;
    Ok((
        worst <= 1e-8 && rep.identity_max_rel <= 1e-8 && within && secs < 300.0,
        format!(
            "forms agree to {worst:.1e}; drift {:.5} vs theory {:.5} (SE {:.1e}, bias {:.1e}), {secs:.1}s",
            rep.empirical, rep.theory, rep.standard_error, rep.bias_budget
        ),
    ))
}

fn criterion_6() -> Outcome {
    let spec = SuiteSpec {
        positions: 20,
        ..SuiteSpec::full_catalog()
    };
    let reports = run_suite(&spec)?;
    let discrete: Vec<&IdentityReport> = reports
        .iter()
        .filter(|r| r.check_name.starts_with("discrete_") || r.check_name.starts_with("mirror_"))
        .collect();
    let worst = discrete.iter().map(|r| r.rel_residual).fold(0.0, f64::max);
    // f = θ₁² + θ₂ + θ₁²θ₂ is even in θ₁
    let parity = build_model(&ModelSpec::new(Architecture::EvenQuadratic, Some(vec![1.0, 1.0, 1.0]), 0))?;
    let (g, h) = check_mirror(&parity, &Loss::square(&[0.0]), &[vec![1.0, 0.0]], &[0.0, 5.0], &CheckConfig::default())?;
    let exact = g.abs_residual.max(h.abs_residual).max(h.extra["conjugation_residual"]);
    Ok((
        !discrete.is_empty() && worst <= 1e-10 && exact <= 1e-14,
        format!("{} discrete residuals, worst {worst:.2e}; parity case {exact:.1e}", discrete.len()),
    ))
}

fn criterion_7() -> Outcome {
    let model = build_model(&ModelSpec::new(
        Architecture::FactoredLastLayer {
            c: 3,
            s: 2,
            hidden: vec![3],
        },
        None,
        17,
    ))?;
    let loss = Loss::softmax_class(3, 2);
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let theta = model.sample_position(&mut rng)?;
    let r = check_last_layer_alignment(&model, &loss, &theta, 20, 77, &CheckConfig::default())?;
    let a = r.trials.iter().map(|t| t.rel_residual).fold(0.0, f64::max);
    let v = r.variance.iter().map(|t| t.rel_residual).fold(0.0, f64::max);
    Ok((
        r.trials.len() == 20 && r.variance.len() == 20 && a <= 1e-8 && v <= 1e-10,
        format!("20 trials, worst residual {a:.2e}, variance form {v:.2e}"),
    ))
}

fn criterion_8() -> Outcome {
    let model = deep_linear(vec![2, 2, 1], vec![1.0, -0.5], 41)?;
    let obj = Objective::single(&model, &Loss::square(&[0.6]))?;
    let traj = gradient_flow(&obj, &model.init, &FlowConfig { t_end: 200.0, dt: 2e-2 }, &[])?;
    let theta = traj.final_state().expect("recorded").to_vec();
    let symmetries = vec![
        build_transform(
            &TransformSpec::LayerRescaling {
                block1: "W1".into(),
                block2: "W2".into(),
            },
            &model,
        )?,
        build_transform(
            &TransformSpec::LinearReparam {
                block_in: "W1".into(),
                block_out: "W2".into(),
                generator: vec![vec![0.0, 1.0], vec![0.0, 0.0]],
            },
            &model,
        )?,
        build_transform(
            &TransformSpec::LinearReparam {
                block_in: "W1".into(),
                block_out: "W2".into(),
                generator: vec![vec![0.0, 0.0], vec![1.0, 0.0]],
            },
            &model,
        )?,
    ];
    let r = stationary_null_count(&obj, &symmetries, &theta, &StationaryConfig::default())?;
    Ok((
        r.null_count >= r.rank && r.reports.iter().all(|x| x.pass),
        format!(
            "‖∇L‖ {:.1e}, rank(X) {}, eigenvalues ≤ 1e-7: {}",
            r.grad_norm, r.rank, r.null_count
        ),
    ))
}

/// `x ↦ f(x)·g(x)` for scalar maps.
struct Product<'a>(&'a Model, &'a Model);

impl GenericMap for Product<'_> {
    fn input_dim(&self) -> usize {
        self.0.d()
    }
    fn output_dim(&self) -> usize {
        1
    }
    fn apply<S: Scalar>(&self, x: &[S]) -> Vec<S> {
        vec![self.0.forward_generic(x)[0] * self.1.forward_generic(x)[0]]
    }
}

fn product_rule_gap(f: &Model, g: &Model, theta: &[f64]) -> Result<f64> {
    let p = diff::derivatives(&Product(f, g), theta)?;
    let a = diff::derivatives(f, theta)?;
    let b = diff::derivatives(g, theta)?;
    let (fv, gv) = (f.forward(theta)?[0], g.forward(theta)?[0]);
    let d = theta.len();
    let (ja, jb, ha, hb) = (a.jacobian.data(), b.jacobian.data(), a.hessian.data(), b.hessian.data());
    let mut worst: f64 = 0.0;
    for i in 0..d {
        let first = ja[i] * gv + fv * jb[i];
        worst = worst.max((p.jacobian.data()[i] - first).abs());
        for j in 0..d {
            let second = ha[i * d + j] * gv + ja[i] * jb[j] + ja[j] * jb[i] + fv * hb[i * d + j];
            worst = worst.max((p.hessian.data()[i * d + j] - second).abs());
        }
    }
    Ok(worst)
}

fn criterion_9() -> Outcome {
    let catalog = SuiteSpec::full_catalog();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut chain: f64 = 0.0;
    let mut fd: f64 = 0.0;
    let mut cert: f64 = 0.0;
    let mut maps = 0;
    let mut scalar_models = Vec::new();
    for entry in &catalog.entries {
        let model = build_model(&entry.model)?;
        let theta = model.sample_position(&mut rng)?;
        let ld = grad_and_hessian_of_loss(&model, &entry.loss, &theta, &DiffConfig::exact())?;
        chain = chain.max(ld.assembly_error / assembly_tolerance(DiffMode::Exact));
        let all = diff::derivatives(&model, &theta)?;
        let j = fd_oracle(&model, &theta, 1, 1.0)?;
        let h = fd_oracle(&model, &theta, 2, 1.0)?;
        fd = fd.max(relative_error(&all.jacobian, &j, 1.0)?.max(relative_error(&all.hessian, &h, 1.0)?) / 1e-4);
        let y = model.forward(&theta)?;
        let lj = fd_oracle(&entry.loss, &y, 1, 1.0)?;
        fd = fd.max(relative_error(&ld.loss_grad, &lj.reshape([y.len()])?, 1.0)? / 1e-4);
        maps += 2;
        for ts in &entry.transforms {
            let t = build_transform(ts, &model)?;
            if t.kind == TransformKind::Continuous {
                let lambda = t.sample_lambda(&mut rng);
                for c in derivative_certificates(&t, &theta, &y, &lambda, 1.0)? {
                    cert = cert.max(c.residual / 1e-6);
                }
                maps += 1;
            }
        }
        if model.c() == 1 && model.d() == 6 {
            scalar_models.push(model);
        }
    }
    // product rule on pairs of scalar models sharing a parameter space
    let mut product: f64 = 0.0;
    let relu = build_model(&ModelSpec::new(
        Architecture::HomogeneousReluMlp { widths: vec![2, 2, 1] },
        Some(vec![0.7, -1.2]),
        3,
    ))?;
    let lin = deep_linear(vec![2, 2, 1], vec![1.5, 0.4], 4)?;
    for _ in 0..5 {
        let theta = relu.sample_position(&mut rng)?;
        product = product.max(product_rule_gap(&relu, &lin, &theta)?);
    }
    let e1 = rk4_endpoint_error(0.1)?;
    let e2 = rk4_endpoint_error(0.05)?;
    let ratio = e1 / e2;
    Ok((
        chain <= 1.0 && fd <= 1.0 && cert <= 1.0 && product <= 1e-12 && (12.0..=20.0).contains(&ratio),
        format!(
            "{maps} maps: chain/tol {chain:.1e}, fd/tol {fd:.1e}, certificates/tol {cert:.1e}, product rule {product:.1e}, RK4 ratio {ratio:.2}"
        ),
    ))
}

fn rk4_endpoint_error(dt: f64) -> Result<f64> {
    let q = QuadraticObjective::identity(1);
    let tr = gradient_flow(&q, &[1.0], &FlowConfig { t_end: 1.0, dt }, &[])?;
    Ok((tr.final_state().expect("recorded")[0] - (-1f64).exp()).abs())
}

/// Slots whose analytic derivative is identically zero cannot be perturbed
/// multiplicatively and are skipped.
fn criterion_10() -> Outcome {
    let catalog = SuiteSpec::full_catalog();
    let mut tried = 0;
    let mut undetected = Vec::new();
    for entry in &catalog.entries {
        let model = build_model(&entry.model)?;
        for ts in &entry.transforms {
            let t = build_transform(ts, &model)?;
            let mut rng = ChaCha8Rng::seed_from_u64(10);
            let theta = model.sample_position(&mut rng)?;
            let lambda = t.sample_lambda(&mut rng);
            let y = model.forward(&theta)?;
            let slots: Vec<DerivSlot> = match t.kind {
                TransformKind::Discrete => vec![DerivSlot::HTheta],
                TransformKind::Continuous => DerivSlot::ALL
                    .into_iter()
                    .filter(|s| {
                        let point = if s.is_h() { &theta } else { &y };
                        t.derivative(*s, point, &lambda).map(|d| d.max_abs() > 0.0).unwrap_or(false)
                    })
                    .collect(),
            };
            for slot in slots {
                tried += 1;
                let spec = SuiteSpec {
                    entries: vec![SuiteEntry {
                        model: entry.model.clone(),
                        loss: entry.loss.clone(),
                        transforms: vec![ts.clone()],
                    }],
                    positions: 2,
                    mutation: Some(Mutation {
                        transform: t.name.clone(),
                        slot,
                        factor: 1.01,
                    }),
                    ..SuiteSpec::full_catalog()
                };
                let caught = run_suite(&spec)?
                    .iter()
                    .any(|r| !r.pass && r.context.transform.as_deref().is_some_and(|n| n.starts_with(&t.name)));
                if !caught {
                    undetected.push(format!("{}/{}", t.name, slot.name()));
                }
            }
        }
    }
    Ok((
        undetected.is_empty(),
        if undetected.is_empty() {
            format!("{tried} single-slot perturbations, all detected")
        } else {
            format!("{tried} perturbations, undetected: {}", undetected.join(", "))
        },
    ))
}

fn main() {
    let criteria: [Criterion; 10] = [
        ("identity suite over the catalog", criterion_1),
        ("hand fixtures", criterion_2),
        ("charge conservation and step orthogonality", criterion_3),
        ("norm growth under exponential loss", criterion_4),
        ("Noether drift under noise", criterion_5),
        ("discrete and mirror symmetries", criterion_6),
        ("last-layer curvature", criterion_7),
        ("stationary null space", criterion_8),
        ("engine certificates", criterion_9),
        ("mutation sensitivity", criterion_10),
    ];
    let mut failed = 0;
    for (i, (name, run)) in criteria.iter().enumerate() {
        let (pass, detail) = match run() {
            Ok(v) => v,
            Err(e) => (false, format!("error: {e}")),
        };
        failed += usize::from(!pass);
        println!(
            "criterion {:>2} {} {name}: {detail}",
            i + 1,
            if pass { "PASS" } else { "FAIL" }
        );
    }
    if failed > 0 {
        println!("{failed} criteria failed");
        std::process::exit(1);
    }
}
