use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::*;

fn normal_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.sample(StandardNormal)).collect()).unwrap()
}

fn random_input(rng: &mut ChaCha8Rng, d: usize, n_obs: usize, n_int: usize, m_int: usize) -> ModelInput {
    let j = rng.random_range(0..d);
    let i = (j + rng.random_range(1..d)) % d;
    ModelInput::new(
        normal_tensor(rng, &[n_obs, d]),
        normal_tensor(rng, &[m_int, d]),
        (0..n_int).map(|_| rng.sample(StandardNormal)).collect(),
        RoleAssignment::new(j, i, d).unwrap(),
    )
    .unwrap()
}

/// Weights at a scale where activations are far from linear, so the checks are not vacuous.
fn scaled_params(config: &ModelConfig, seed: u64, scale: f64) -> ParamStore {
    let mut p = init_params(config, seed).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    for (name, t) in p.iter_mut() {
        let is_gain = name.ends_with(".g");
        for v in t.data_mut() {
            let noise: f64 = rng.sample(StandardNormal);
            *v = if is_gain { 1.0 + 0.1 * noise } else { scale * noise };
        }
    }
    p
}

fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn mog_diff(a: &MoGParams, b: &MoGParams) -> f64 {
    max_abs_diff(&a.means, &b.means)
        .max(max_abs_diff(&a.stds, &b.stds))
        .max(max_abs_diff(&a.weights, &b.weights))
}

fn variants() -> [AttentionVariant; 2] {
    [AttentionVariant::MaskedSelf, AttentionVariant::SelfPlusCross]
}

#[test]
fn config_validation() {
    assert!(ModelConfig::default().validate().is_ok());
    let bad = ModelConfig {
        d_model: 10,
        heads: 4,
        ..ModelConfig::default()
    };
    assert!(matches!(bad.validate(), Err(Error::Config(_))));
    assert!(init_params(&bad, 0).is_err());
    assert!(ModelConfig { n_comp: 0, ..ModelConfig::default() }.validate().is_err());
    assert!(ModelConfig { layers: 0, ..ModelConfig::default() }.validate().is_err());
    assert!(RoleAssignment::new(1, 1, 3).is_err());
    assert!(RoleAssignment::new(0, 3, 3).is_err());
}

#[test]
fn init_scheme() {
    let fan_in = ModelConfig::tiny(AttentionVariant::SelfPlusCross);
    let fixed = ModelConfig {
        init_std: Some(0.02),
        ..fan_in.clone()
    };
    for config in [fan_in, fixed] {
        let p = init_params(&config, 3).unwrap();
        for (name, t) in p.iter() {
            let data = t.data();
            if name.ends_with(".g") {
                assert!(data.iter().all(|v| *v == 1.0), "{name}");
            } else if name.ends_with(".b") || name.contains(".b1") || name.contains(".b2") {
                assert!(data.iter().all(|v| *v == 0.0), "{name}");
            } else {
                let want = config.init_std.unwrap_or(1.0 / (t.shape()[0] as f64).sqrt());
                let var = data.iter().map(|v| v * v).sum::<f64>() / data.len() as f64;
                assert!(data.len() < 64 || (var.sqrt() / want - 1.0).abs() < 0.3, "{name}: {}", var.sqrt());
            }
        }
    }
    assert!(ModelConfig { init_std: Some(0.0), ..ModelConfig::default() }.validate().is_err());
}

#[test]
fn embedding_shapes_and_unused_mlps() {
    let config = ModelConfig::tiny(AttentionVariant::SelfPlusCross);
    let params = scaled_params(&config, 1, 0.3);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let bundle = crate::bcm::make_task(
        &crate::bcm::GeneratorConfig {
            n_obs_min: 7,
            n_obs_max: 7,
            n_total: None,
            n_int: 5,
            ..crate::bcm::GeneratorConfig::default()
        },
        rng.random(),
    )
    .unwrap();
    let roles = RoleAssignment::from_bundle(&bundle).unwrap();
    let (z_obs, z_int) = embed(&bundle, &roles, &config, &params).unwrap();
    assert_eq!(z_obs.shape(), &[7, 2, 16]);
    assert_eq!(z_int.shape(), &[5, 2, 16]);

    let (_, grads) = loss_and_grad(&bundle, &config, &params).unwrap();
    // With D = 2 there is no marginal node; `int.outcome.w1` only ever sees the zeroed input.
    for (name, g) in grads.iter() {
        let zero = g.data().iter().all(|v| *v == 0.0);
        let expect_zero = name.contains(".marginal.") || name == "embed.int.outcome.w1";
        assert_eq!(expect_zero, zero, "{name}");
    }
}

#[test]
fn embedding_commutes_with_relabeling() {
    let config = ModelConfig::tiny(AttentionVariant::SelfPlusCross);
    let params = scaled_params(&config, 2, 0.3);
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let config_gen = crate::bcm::GeneratorConfig {
        family: crate::bcm::Family::three_node_linear(),
        n_obs_min: 6,
        n_obs_max: 6,
        n_total: None,
        n_int: 3,
        ..crate::bcm::GeneratorConfig::default()
    };
    let bundle = crate::bcm::make_task(&config_gen, rng.random()).unwrap();
    let perm = [2usize, 0, 1];
    let relabeled = permute_bundle_nodes(&bundle, &perm);
    let roles = RoleAssignment::from_bundle(&bundle).unwrap();
    let roles2 = RoleAssignment::from_bundle(&relabeled).unwrap();
    let (a, _) = embed(&bundle, &roles, &config, &params).unwrap();
    let (b, _) = embed(&relabeled, &roles2, &config, &params).unwrap();
    let dm = config.d_model;
    for r in 0..6 {
        for c in 0..3 {
            let x = &a.data()[(r * 3 + c) * dm..(r * 3 + c + 1) * dm];
            let y = &b.data()[(r * 3 + perm[c]) * dm..(r * 3 + perm[c] + 1) * dm];
            assert_eq!(x, y);
        }
    }
}

/// Moves node `c` to position `perm[c]`.
fn permute_bundle_nodes(bundle: &TaskBundle, perm: &[usize]) -> TaskBundle {
    let d = bundle.num_nodes();
    let remap = |t: &Tensor| {
        let n = t.shape()[0];
        let mut data = vec![0.0; n * d];
        for r in 0..n {
            for c in 0..d {
                data[r * d + perm[c]] = t.data()[r * d + c];
            }
        }
        Tensor::new(vec![n, d], data).unwrap()
    };
    TaskBundle {
        obs: remap(&bundle.obs),
        int_full: remap(&bundle.int_full),
        context: remap(&bundle.context),
        int_node: perm[bundle.int_node],
        outcome_node: perm[bundle.outcome_node],
        metadata: None,
        ..bundle.clone()
    }
}

fn permute_input_nodes(input: &ModelInput, perm: &[usize]) -> ModelInput {
    let d = input.num_nodes();
    let remap = |t: &Tensor| {
        let n = t.shape()[0];
        let mut data = vec![0.0; n * d];
        for r in 0..n {
            for c in 0..d {
                data[r * d + perm[c]] = t.data()[r * d + c];
            }
        }
        Tensor::new(vec![n, d], data).unwrap()
    };
    let roles = RoleAssignment::new(perm[input.roles.int_node], perm[input.roles.outcome_node], d).unwrap();
    ModelInput::new(remap(&input.obs), remap(&input.context), input.int_values.clone(), roles).unwrap()
}

fn shuffle_rows(t: &Tensor, order: &[usize]) -> Tensor {
    let d = t.shape()[1];
    let data = order.iter().flat_map(|&r| t.data()[r * d..(r + 1) * d].to_vec()).collect();
    Tensor::new(t.shape().to_vec(), data).unwrap()
}

#[test]
fn decoder_outputs_are_valid() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let config = ModelConfig::tiny(AttentionVariant::SelfPlusCross);
    for draw in 0..1000 {
        if draw % 100 == 0 {
            let params = scaled_params(&config, draw, 1.0);
            let h = normal_tensor(&mut rng, &[100, 16]);
            let mog = decode(&h, &config, &params).unwrap();
            assert!(mog.stds.iter().all(|s| *s > 0.0));
            for n in 0..mog.len() {
                let w: f64 = mog.weights[n * 3..(n + 1) * 3].iter().sum();
                assert!((w - 1.0).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn decoder_zero_heads() {
    let config = ModelConfig::tiny(AttentionVariant::SelfPlusCross);
    let mut params = scaled_params(&config, 4, 0.5);
    for head in ["dec.mean", "dec.std", "dec.logit"] {
        for part in ["w", "b"] {
            let name = format!("{head}.{part}");
            let shape = params.get(&name).unwrap().shape().to_vec();
            params.set(&name, Tensor::zeros(&shape)).unwrap();
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mog = decode(&normal_tensor(&mut rng, &[5, 16]), &config, &params).unwrap();
    assert!(mog.means.iter().all(|m| *m == 0.0));
    assert!(mog.stds.iter().all(|s| (s - std::f64::consts::LN_2).abs() < 1e-15));
    assert!(mog.weights.iter().all(|w| (w - 1.0 / 3.0).abs() < 1e-15));

    let single = ModelConfig { n_comp: 1, ..config.clone() };
    let p1 = scaled_params(&single, 5, 2.0);
    let mog = decode(&normal_tensor(&mut rng, &[5, 16]), &single, &p1).unwrap();
    assert!(mog.weights.iter().all(|w| *w == 1.0));
}

#[test]
fn loss_examples() {
    let outcomes = [0.3, -1.2, 2.0, 0.0];
    let unit = MoGParams::from_logits(1, outcomes.to_vec(), vec![1.0; 4], &[0.0; 4]).unwrap();
    assert!((loss(&unit, &outcomes).unwrap() - 4.0 * 0.918_938_533_204_672_7).abs() < 1e-12);

    let base = MoGParams::from_logits(2, vec![0.1, -0.4, 0.5, 0.2, -1.0, 0.0, 0.3, 0.3], vec![0.7, 1.3, 0.5, 2.0, 1.0, 1.0, 0.9, 0.4], &[0.2, -0.1, 0.0, 0.0, 1.0, 2.0, -3.0, 0.5]).unwrap();
    let mut padded = MoGParams {
        n_comp: 3,
        means: vec![],
        stds: vec![],
        weights: vec![],
    };
    for n in 0..4 {
        for k in 0..2 {
            padded.means.push(base.means[n * 2 + k]);
            padded.stds.push(base.stds[n * 2 + k]);
            padded.weights.push(base.weights[n * 2 + k]);
        }
        padded.means.push(10.0);
        padded.stds.push(0.1);
        padded.weights.push(0.0);
    }
    assert!((loss(&base, &outcomes).unwrap() - loss(&padded, &outcomes).unwrap()).abs() < 1e-12);

    let broken = MoGParams {
        stds: vec![1.0, 1.0, 1.0, 0.0],
        ..unit.clone()
    };
    match loss(&broken, &[0.3, -1.2, 2.0, 5.0]) {
        Err(Error::NonFinite(msg)) => assert!(msg.contains("query 3"), "{msg}"),
        other => panic!("{other:?}"),
    }
}

#[test]
fn traced_loss_matches_numeric_loss() {
    let config = ModelConfig::tiny(AttentionVariant::MaskedSelf);
    let params = scaled_params(&config, 6, 0.3);
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let input = random_input(&mut rng, 3, 9, 4, 2);
    let outcomes: Vec<f64> = (0..4).map(|_| rng.sample(StandardNormal)).collect();
    let mog = predict(&input, &config, &params).unwrap();
    let mut t = Trace::new();
    let v = trace_loss(&mut t, &input, &outcomes, &config, &params).unwrap();
    assert!((t.value(v).item().unwrap() - loss(&mog, &outcomes).unwrap()).abs() < 1e-12);
}

#[test]
fn full_model_gradient_matches_finite_differences() {
    for variant in variants() {
        let report = gradient_check(&ModelConfig::tiny(variant), 1).unwrap();
        assert!(report.max_rel_error < 1e-4, "{variant:?}: {report:?}");
        assert!(report.checked > 5000);
    }
}

/// Across seeds, every entry must agree up to the central-difference
/// roundoff floor `ulp(loss) / step` plus a 1e-4 relative term.
#[test]
fn gradient_agrees_up_to_difference_noise_over_seeds() {
    let step = 1e-5;
    for variant in variants() {
        let config = ModelConfig::tiny(variant);
        for seed in 1..4 {
            let (params, input, outcomes) = gradient_check_problem(&config, seed).unwrap();
            let eval = |p: &ParamStore| {
                let mut t = Trace::new();
                let v = trace_loss(&mut t, &input, &outcomes, &config, p).unwrap();
                t.value(v).item().unwrap()
            };
            let mut t = Trace::new();
            let v = trace_loss(&mut t, &input, &outcomes, &config, &params).unwrap();
            let loss = t.value(v).item().unwrap();
            let grads = t.backward(v, &params).unwrap();
            let floor = 8.0 * f64::EPSILON * loss.abs() / (2.0 * step);
            let mut probe = params.clone();
            for (name, g) in grads.iter() {
                for idx in (0..g.len()).step_by(3) {
                    let base = params.get(name).unwrap().clone();
                    let mut shifted = base.clone();
                    shifted.data_mut()[idx] += step;
                    probe.set(name, shifted.clone()).unwrap();
                    let plus = eval(&probe);
                    shifted.data_mut()[idx] -= 2.0 * step;
                    probe.set(name, shifted).unwrap();
                    let minus = eval(&probe);
                    probe.set(name, base).unwrap();
                    let numeric = (plus - minus) / (2.0 * step);
                    let a = g.data()[idx];
                    assert!((a - numeric).abs() <= 1e-4 * numeric.abs() + floor, "{variant:?} seed {seed} {name}[{idx}]: {a} vs {numeric}");
                }
            }
        }
    }
}

#[test]
fn observational_sample_permutation_invariance() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for variant in variants() {
        let config = ModelConfig::tiny(variant);
        let params = scaled_params(&config, 8, 0.3);
        for _ in 0..5 {
            let input = random_input(&mut rng, 3, 12, 5, 2);
            let mut order: Vec<usize> = (0..12).collect();
            order.shuffle(&mut rng);
            let shuffled = ModelInput {
                obs: shuffle_rows(&input.obs, &order),
                ..input.clone()
            };
            let a = predict(&input, &config, &params).unwrap();
            let b = predict(&shuffled, &config, &params).unwrap();
            assert!(mog_diff(&a, &b) < 1e-6);
        }
    }
}

#[test]
fn interventional_rows_are_independent() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for variant in variants() {
        let config = ModelConfig::tiny(variant);
        let params = scaled_params(&config, 9, 0.3);
        let input = random_input(&mut rng, 3, 10, 8, 0);
        let mut changed = input.clone();
        changed.int_values[5] += 1.7;
        let a = predict(&input, &config, &params).unwrap();
        let b = predict(&changed, &config, &params).unwrap();
        for n in 0..8 {
            let r = n * 3..(n + 1) * 3;
            let d = max_abs_diff(&a.means[r.clone()], &b.means[r.clone()]);
            if n == 5 {
                assert!(d > 1e-6);
            } else {
                assert!(d <= 1e-12, "row {n}: {d}");
            }
        }

        let mut dup = input.clone();
        dup.int_values[2] = dup.int_values[6];
        let c = predict(&dup, &config, &params).unwrap();
        assert!(max_abs_diff(&c.means[6..9], &c.means[18..21]) <= 1e-12);
    }
}

#[test]
fn observational_outputs_ignore_queries() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    for variant in variants() {
        let config = ModelConfig {
            layers: 2,
            ..ModelConfig::tiny(variant)
        };
        let params = scaled_params(&config, 10, 0.3);
        let input = random_input(&mut rng, 3, 10, 6, 1);
        let none = ModelInput {
            int_values: vec![],
            ..input.clone()
        };
        let a = layer_outputs(&input, &config, &params).unwrap();
        let b = layer_outputs(&none, &config, &params).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert!(max_abs_diff(x.0.data(), y.0.data()) <= 1e-12);
        }
    }
}

#[test]
fn marginal_nodes_are_exchangeable_and_roles_travel() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for variant in variants() {
        let config = ModelConfig::tiny(variant);
        let params = scaled_params(&config, 11, 0.3);
        let input = ModelInput::new(
            normal_tensor(&mut rng, &[9, 4]),
            normal_tensor(&mut rng, &[0, 4]),
            vec![0.3, -1.1, 0.8],
            RoleAssignment::new(0, 1, 4).unwrap(),
        )
        .unwrap();
        let base = predict(&input, &config, &params).unwrap();
        let swapped = predict(&permute_input_nodes(&input, &[0, 1, 3, 2]), &config, &params).unwrap();
        assert!(mog_diff(&base, &swapped) < 1e-6);
        let relabeled = predict(&permute_input_nodes(&input, &[1, 0, 2, 3]), &config, &params).unwrap();
        assert!(mog_diff(&base, &relabeled) < 1e-6);
    }
}

#[test]
fn model_wrapper_and_layer_api() {
    let config = ModelConfig::tiny(AttentionVariant::SelfPlusCross);
    let model = Model::init(config.clone(), 12).unwrap();
    assert!(Model::from_parts(config.clone(), model.params.clone()).is_ok());
    let other = init_params(&ModelConfig { n_comp: 2, ..config.clone() }, 0).unwrap();
    assert!(Model::from_parts(config.clone(), other).is_err());

    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let input = random_input(&mut rng, 3, 6, 2, 0);
    let outs = layer_outputs(&input, &config, &model.params).unwrap();
    let (o, i) = encoder_layer(&outs[0].0, outs[0].1.as_ref().unwrap(), 0, &config, &model.params).unwrap();
    assert_eq!(o, outs[1].0);
    assert_eq!(&i, outs[1].1.as_ref().unwrap());
}


