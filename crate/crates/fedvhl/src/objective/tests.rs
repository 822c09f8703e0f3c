use super::*;
use crate::nn::{finite_diff_grad, Activation};
use crate::seeding::{rng_for, Role};
use ndarray::arr2;
use rand::Rng;

fn toy_spec() -> MlpSpec {
    MlpSpec::new(vec![3, 5, 4], 2, 2, Activation::Tanh).unwrap()
}

fn toy_batches(seed: u64) -> (Array2<f64>, Vec<usize>, Array2<f64>, Vec<usize>) {
    let mut rng = rng_for(seed, Role::ModelInit, &[7]);
    let nat = Array2::from_shape_fn((4, 3), |_| rng.gen_range(-1.0..1.0));
    let nat_y = vec![0usize, 1, 0, 1];
    let virt = Array2::from_shape_fn((3, 3), |_| rng.gen_range(-1.0..1.0));
    let virt_y = vec![0usize, 1, 1];
    (nat, nat_y, virt, virt_y)
}

#[test]
fn off_mode_is_plain_cross_entropy() {
    let spec = toy_spec();
    let mut rng = rng_for(1, Role::ModelInit, &[]);
    let params = ModelParams::init(&spec, &mut rng);
    let (nat, nat_y, _, _) = toy_batches(1);
    let cfg = VhlConfig {
        mode: VhlMode::Off,
        ..VhlConfig::default()
    };
    let empty = Array2::zeros((0, 3));
    let (loss, grad, diag) =
        vhl_step_loss(&spec, &params, nat.view(), &nat_y, empty.view(), &[], &cfg).unwrap();

    let trace = forward(&spec, &params, nat.view()).unwrap();
    let (ce, lg) = cross_entropy(trace.logits.view(), &nat_y).unwrap();
    let expect = backward(&spec, &params, &trace, lg.view(), None).unwrap();
    assert_eq!(loss, ce);
    assert_eq!(grad.max_abs_diff(&expect), 0.0);
    assert_eq!(diag.penalty, 0.0);
}

#[test]
fn off_mode_rejects_virtual_rows() {
    let spec = toy_spec();
    let params = ModelParams::zeros(&spec);
    let (nat, nat_y, virt, virt_y) = toy_batches(2);
    let cfg = VhlConfig {
        mode: VhlMode::Off,
        ..VhlConfig::default()
    };
    assert!(matches!(
        vhl_step_loss(&spec, &params, nat.view(), &nat_y, virt.view(), &virt_y, &cfg),
        Err(Error::Config(_))
    ));
}

#[test]
fn lambda_zero_full_equals_naive_exactly() {
    let spec = toy_spec();
    let mut rng = rng_for(3, Role::ModelInit, &[]);
    let params = ModelParams::init(&spec, &mut rng);
    let (nat, nat_y, virt, virt_y) = toy_batches(3);
    for weighting in [CeWeighting::JointMean, CeWeighting::SeparateMean] {
        let full = VhlConfig {
            mode: VhlMode::Full,
            lambda: 0.0,
            ce_weighting: weighting,
            ..VhlConfig::default()
        };
        let naive = VhlConfig {
            mode: VhlMode::Naive,
            ce_weighting: weighting,
            ..VhlConfig::default()
        };
        let (lf, gf, _) =
            vhl_step_loss(&spec, &params, nat.view(), &nat_y, virt.view(), &virt_y, &full).unwrap();
        let (ln, gn, _) =
            vhl_step_loss(&spec, &params, nat.view(), &nat_y, virt.view(), &virt_y, &naive).unwrap();
        assert_eq!(lf, ln);
        assert_eq!(gf.max_abs_diff(&gn), 0.0);
    }
}

#[test]
fn full_mode_matches_compositional_oracle() {
    // Total loss re-assembled by calling the three kernel operations alone.
    let spec = toy_spec();
    let mut rng = rng_for(4, Role::ModelInit, &[]);
    let params = ModelParams::init(&spec, &mut rng);
    let (nat, nat_y, virt, virt_y) = toy_batches(4);
    let cfg = VhlConfig {
        mode: VhlMode::Full,
        lambda: 1.0,
        ce_weighting: CeWeighting::SeparateMean,
        temperature: 0.07,
        ..VhlConfig::default()
    };
    let (loss, _, diag) =
        vhl_step_loss(&spec, &params, nat.view(), &nat_y, virt.view(), &virt_y, &cfg).unwrap();

    let mut joint = Array2::zeros((7, 3));
    joint.slice_mut(s![..4, ..]).assign(&nat);
    joint.slice_mut(s![4.., ..]).assign(&virt);
    let trace = forward(&spec, &params, joint.view()).unwrap();
    let (ce_nat, _) = cross_entropy(trace.logits.slice(s![..4, ..]), &nat_y).unwrap();
    let offset: Vec<usize> = virt_y.iter().map(|&j| 2 + j).collect();
    let (ce_virt, _) = cross_entropy(trace.logits.slice(s![4.., ..]), &offset).unwrap();
    let layer = spec.default_calibration_layer();
    let pen = calibration_penalty(
        trace.features(layer).slice(s![..4, ..]),
        &nat_y,
        trace.features(layer).slice(s![4.., ..]),
        &virt_y,
        0.07,
    )
    .unwrap();
    assert!((loss - (ce_nat + ce_virt + pen.value)).abs() < 1e-12);
    assert_eq!(diag.ce_natural, ce_nat);
    assert_eq!(diag.ce_virtual, ce_virt);
    assert_eq!(diag.penalty, pen.value);
}

#[test]
fn joint_mean_weighting_averages_over_concatenation() {
    let spec = toy_spec();
    let mut rng = rng_for(5, Role::ModelInit, &[]);
    let params = ModelParams::init(&spec, &mut rng);
    let (nat, nat_y, virt, virt_y) = toy_batches(5);
    let cfg = VhlConfig {
        mode: VhlMode::Naive,
        ce_weighting: CeWeighting::JointMean,
        ..VhlConfig::default()
    };
    let (loss, grad, _) =
        vhl_step_loss(&spec, &params, nat.view(), &nat_y, virt.view(), &virt_y, &cfg).unwrap();

    // Oracle: one cross-entropy over the concatenated batch.
    let mut joint = Array2::zeros((7, 3));
    joint.slice_mut(s![..4, ..]).assign(&nat);
    joint.slice_mut(s![4.., ..]).assign(&virt);
    let trace = forward(&spec, &params, joint.view()).unwrap();
    let mut labels = nat_y.clone();
    labels.extend(virt_y.iter().map(|&j| 2 + j));
    let (ce, lg) = cross_entropy(trace.logits.view(), &labels).unwrap();
    let expect = backward(&spec, &params, &trace, lg.view(), None).unwrap();
    assert!((loss - ce).abs() < 1e-12);
    assert!(grad.max_abs_diff(&expect) < 1e-12);
}

#[test]
fn full_gradient_matches_finite_differences() {
    let spec = toy_spec();
    let mut rng = rng_for(6, Role::ModelInit, &[]);
    let params = ModelParams::init(&spec, &mut rng);
    let (nat, nat_y, virt, virt_y) = toy_batches(6);
    let cfg = VhlConfig {
        mode: VhlMode::Full,
        lambda: 0.8,
        temperature: 0.3,
        ..VhlConfig::default()
    };
    let layer = cfg.resolve_layer(&spec).unwrap();
    let (_, analytic, _) =
        vhl_step_loss(&spec, &params, nat.view(), &nat_y, virt.view(), &virt_y, &cfg).unwrap();

    // The detached objective holds the penalty's virtual-side features at
    // their base-parameter values while everything else varies.
    let mut joint = Array2::zeros((7, 3));
    joint.slice_mut(s![..4, ..]).assign(&nat);
    joint.slice_mut(s![4.., ..]).assign(&virt);
    let base = forward(&spec, &params, joint.view()).unwrap();
    let fd = finite_diff_grad(
        &spec,
        &params,
        |p| {
            let trace = forward(&spec, p, joint.view())?;
            let mut labels = nat_y.clone();
            labels.extend(virt_y.iter().map(|&j| 2 + j));
            let (ce, _) = cross_entropy(trace.logits.view(), &labels)?;
            let pen = calibration_penalty(
                trace.features(layer).slice(s![..4, ..]),
                &nat_y,
                base.features(layer).slice(s![4.., ..]),
                &virt_y,
                cfg.temperature,
            )?;
            Ok(ce + cfg.lambda * pen.value)
        },
        1e-5,
    )
    .unwrap();
    let diff = analytic
        .flatten()
        .iter()
        .zip(fd.flatten())
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        .sqrt();
    let norm = fd.flatten().iter().map(|v| v * v).sum::<f64>().sqrt();
    assert!(diff / norm.max(1e-8) < 1e-5, "rel err {}", diff / norm);
}

#[test]
fn vfa_gradient_matches_finite_differences() {
    let spec = toy_spec();
    let mut rng = rng_for(7, Role::ModelInit, &[]);
    let params = ModelParams::init(&spec, &mut rng);
    let (nat, nat_y, _, _) = toy_batches(7);
    let layer = spec.default_calibration_layer();
    let width = spec.layer_width(layer).unwrap();
    let vfeat = Array2::from_shape_fn((4, width), |_| rng.gen_range(-1.0..1.0));
    let vlabels = vec![0usize, 0, 1, 1];
    let cfg = VhlConfig {
        mode: VhlMode::Vfa,
        lambda: 0.5,
        temperature: 0.25,
        ..VhlConfig::default()
    };
    let (_, analytic, diag) =
        vhl_step_loss(&spec, &params, nat.view(), &nat_y, vfeat.view(), &vlabels, &cfg).unwrap();
    assert!(!diag.alignment_missing);

    let fd = finite_diff_grad(
        &spec,
        &params,
        |p| {
            let trace = forward(&spec, p, nat.view())?;
            let (ce, _) = cross_entropy(trace.logits.view(), &nat_y)?;
            let pen = calibration_penalty(
                trace.features(layer).view(),
                &nat_y,
                vfeat.view(),
                &vlabels,
                cfg.temperature,
            )?;
            Ok(ce + cfg.lambda * pen.value)
        },
        1e-5,
    )
    .unwrap();
    let diff = analytic
        .flatten()
        .iter()
        .zip(fd.flatten())
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        .sqrt();
    let norm = fd.flatten().iter().map(|v| v * v).sum::<f64>().sqrt();
    assert!(diff / norm.max(1e-8) < 1e-5, "rel err {}", diff / norm);
}

#[test]
fn calibration_matches_direct_supcon_oracle() {
    // 2 natural + 2 virtual rows, hand-set features.
    let nat = arr2(&[[0.9, 0.1], [0.2, 1.2]]);
    let virt = arr2(&[[1.1, -0.2], [-0.1, 0.8]]);
    let tau = 0.07;
    let pen = calibration_penalty(nat.view(), &[0, 1], virt.view(), &[0, 1], tau).unwrap();
    assert!(pen.has_alignment);

    // Straight-line evaluation: 4 rows, anchors are the two natural rows,
    // each with exactly one positive (its aligned virtual row).
    let rows: [[f64; 2]; 4] = [
        [0.9, 0.1],
        [0.2, 1.2],
        [1.1, -0.2],
        [-0.1, 0.8],
    ];
    let labels = [0usize, 1, 0, 1];
    let mut z = [[0.0f64; 2]; 4];
    for i in 0..4 {
        let r = (rows[i][0] * rows[i][0] + rows[i][1] * rows[i][1]).sqrt();
        z[i] = [rows[i][0] / r, rows[i][1] / r];
    }
    let dot = |a: [f64; 2], b: [f64; 2]| a[0] * b[0] + a[1] * b[1];
    let mut expect = 0.0;
    for i in 0..2 {
        let p = (0..4).find(|&j| j != i && labels[j] == labels[i]).unwrap();
        let denom: f64 = (0..4)
            .filter(|&j| j != i)
            .map(|j| (dot(z[i], z[j]) / tau).exp())
            .sum();
        expect += -((dot(z[i], z[p]) / tau).exp() / denom).ln();
    }
    expect /= 2.0;
    assert!((pen.value - expect).abs() < 1e-10, "{} vs {expect}", pen.value);
}

#[test]
fn calibration_without_shared_class_is_flagged_zero() {
    let nat = arr2(&[[1.0, 0.0]]);
    let virt = arr2(&[[0.0, 1.0]]);
    let pen = calibration_penalty(nat.view(), &[0], virt.view(), &[1], 0.07).unwrap();
    assert!(!pen.has_alignment);
    assert_eq!(pen.value, 0.0);
    assert!(pen.natural_grad.iter().all(|&v| v == 0.0));
}

#[test]
fn calibration_gradient_is_smallest_at_exact_alignment() {
    // One natural row exactly on its aligned virtual feature per class.
    // At tau = 0.07 the orthogonal negative classes are out of softmax
    // range (their weight is ~e^{-14}), so the aligned gradient sits at a
    // tiny repulsion floor; any substantial angular perturbation adds an
    // attraction term orders of magnitude above it.
    let tau = 0.07;
    let mut rng = rng_for(13, Role::ModelInit, &[2]);
    let virt = arr2(&[[10.0, 0.0, 0.0], [0.0, 10.0, 0.0], [0.0, 0.0, 10.0]]);
    let labels = [0usize, 1, 2];
    let base = calibration_penalty(virt.view(), &labels, virt.view(), &labels, tau).unwrap();
    let base_norm = base.natural_grad.iter().map(|v| v * v).sum::<f64>().sqrt();
    for trial in 0..5 {
        let mut nat = virt.clone();
        nat.mapv_inplace(|v| v + rng.gen_range(-8.0..8.0));
        let p = calibration_penalty(nat.view(), &labels, virt.view(), &labels, tau).unwrap();
        let norm = p.natural_grad.iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!(
            norm > base_norm,
            "trial {trial}: perturbed norm {norm} <= aligned norm {base_norm}"
        );
    }
}

#[test]
fn calibration_step_pulls_natural_toward_virtual() {
    // A single descent step on the penalty strictly reduces the mean
    // distance between normalized natural features and their aligned
    // virtual class features, across 20 seeds.
    let tau = 0.5;
    let step = 0.01;
    for seed in 0..20u64 {
        let mut rng = rng_for(seed, Role::ModelInit, &[3]);
        let classes = 3usize;
        let per_virtual = 3usize;
        let mut nat = Array2::zeros((classes, 4));
        for mut row in nat.rows_mut() {
            for v in row.iter_mut() {
                *v = rng.gen_range(-1.0..1.0f64);
            }
        }
        let nat_y: Vec<usize> = (0..classes).collect();
        let mut virt = Array2::zeros((classes * per_virtual, 4));
        let mut virt_y = Vec::new();
        for c in 0..classes {
            for s in 0..per_virtual {
                for k in 0..4 {
                    let center = if k == c { 5.0 } else { 0.0 };
                    virt[[c * per_virtual + s, k]] = center + rng.gen_range(-0.3..0.3);
                }
                let _ = s;
                virt_y.push(c);
            }
        }

        let mean_aligned_distance = |nat: &Array2<f64>| -> f64 {
            let normalize = |row: ndarray::ArrayView1<f64>| -> Vec<f64> {
                let r = row.iter().map(|v| v * v).sum::<f64>().sqrt();
                row.iter().map(|v| v / r).collect()
            };
            let mut total = 0.0;
            let mut count = 0usize;
            for (i, &y) in nat_y.iter().enumerate() {
                let zi = normalize(nat.row(i));
                for (j, &vy) in virt_y.iter().enumerate() {
                    if vy == y {
                        let zj = normalize(virt.row(j));
                        total += zi
                            .iter()
                            .zip(&zj)
                            .map(|(a, b)| (a - b) * (a - b))
                            .sum::<f64>()
                            .sqrt();
                        count += 1;
                    }
                }
            }
            total / count as f64
        };

        let before = mean_aligned_distance(&nat);
        let pen = calibration_penalty(nat.view(), &nat_y, virt.view(), &virt_y, tau).unwrap();
        let mut moved = nat.clone();
        moved.zip_mut_with(&pen.natural_grad, |x, &g| *x -= step * g);
        let after = mean_aligned_distance(&moved);
        assert!(
            after < before,
            "seed {seed}: distance went {before} -> {after}"
        );
    }
}

#[test]
fn vfa_rejects_feature_width_mismatch() {
    let spec = toy_spec();
    let params = ModelParams::zeros(&spec);
    let (nat, nat_y, _, _) = toy_batches(8);
    let vfeat = Array2::zeros((2, 3));
    let cfg = VhlConfig {
        mode: VhlMode::Vfa,
        ..VhlConfig::default()
    };
    assert!(matches!(
        vhl_step_loss(&spec, &params, nat.view(), &nat_y, vfeat.view(), &[0, 1], &cfg),
        Err(Error::ShapeMismatch { .. })
    ));
}

#[test]
fn full_mode_needs_virtual_samples_and_head() {
    let (nat, nat_y, virt, virt_y) = toy_batches(9);
    let cfg = VhlConfig {
        mode: VhlMode::Full,
        ..VhlConfig::default()
    };
    let spec = toy_spec();
    let params = ModelParams::zeros(&spec);
    let empty = Array2::zeros((0, 3));
    assert!(matches!(
        vhl_step_loss(&spec, &params, nat.view(), &nat_y, empty.view(), &[], &cfg),
        Err(Error::Config(_))
    ));

    let headless = MlpSpec::new(vec![3, 5, 4], 2, 0, Activation::Tanh).unwrap();
    let hp = ModelParams::zeros(&headless);
    assert!(matches!(
        vhl_step_loss(&headless, &hp, nat.view(), &nat_y, virt.view(), &virt_y, &cfg),
        Err(Error::Config(_))
    ));
}

#[test]
fn bad_calibration_layer_is_config_error() {
    let spec = toy_spec();
    let cfg = VhlConfig {
        calibration_layer: Some(5),
        ..VhlConfig::default()
    };
    assert!(matches!(cfg.resolve_layer(&spec), Err(Error::Config(_))));
    let zero = VhlConfig {
        calibration_layer: Some(0),
        ..VhlConfig::default()
    };
    assert!(matches!(zero.resolve_layer(&spec), Err(Error::Config(_))));
}
