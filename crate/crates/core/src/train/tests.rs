use super::*;
use crate::nn::{HiddenActivation, MlpSpec, OutputActivation};
use crate::occupancy::occupancy_canonical;
use crate::simdata::{generate_stick_dataset, ExperimentConfig, NetConfig, Regime, Split};
use crate::skeleton::{rotation_2d, BoneTransformSet, RigidTransform};

fn mini_config(width: usize) -> ExperimentConfig {
    ExperimentConfig {
        frames: 2,
        test_frames: 1,
        samples_per_frame: 16,
        occupancy_net: NetConfig {
            hidden_widths: vec![width, width],
            hidden_activation: HiddenActivation::Softplus,
        },
        skinning_net: NetConfig {
            hidden_widths: vec![width, width],
            hidden_activation: HiddenActivation::Softplus,
        },
        ..ExperimentConfig::stick(Regime::Extrapolation)
    }
}

#[test]
fn bce_examples() {
    assert!((loss_bce(0.5, true) - std::f64::consts::LN_2).abs() < 1e-15);
    assert!(loss_bce(1.0, true) <= 1e-6);
    assert!(loss_bce(0.0, false) <= 1e-6);
    // Hand arithmetic: (-ln 0.9 - ln 0.8) / 2.
    let m = loss_bce_mean(&[(0.9, true), (0.2, false)]);
    assert!((m - 0.164252).abs() < 1e-6);
    assert!(loss_bce(0.3, true) > 0.0);
    let h = 1e-6;
    for (o, l) in [(0.3, true), (0.7, false), (0.01, false)] {
        let fd = (loss_bce(o + h, l) - loss_bce(o - h, l)) / (2.0 * h);
        assert!((fd - loss_bce_grad(o, l)).abs() < 1e-6 * fd.abs().max(1.0));
    }
    assert_eq!(loss_bce_grad(1.0, false), 0.0);
}

fn constant_field(v_logit: f64, dim: usize) -> Mlp {
    let spec = MlpSpec::new(dim, 1, vec![4], HiddenActivation::Softplus, OutputActivation::Sigmoid);
    let mut net = Mlp::zeros(spec).unwrap();
    net.bias_mut(1)[0] = v_logit;
    net
}

#[test]
fn bone_loss_examples() {
    let pts: Vec<Vector<2>> = (0..20).map(|i| Vector::<2>::new(-1.0 + 0.1 * i as f64, 0.0)).collect();
    let sure = constant_field(40.0, 2);
    assert!(loss_bootstrap_bone(&sure, &[], &pts, 1.0, None).unwrap() < 1e-6);
    let half = constant_field(0.0, 2);
    let l = loss_bootstrap_bone(&half, &[], &pts, 1.0, None).unwrap();
    assert!((l - std::f64::consts::LN_2).abs() < 1e-15);
}

#[test]
fn bone_loss_decreases_under_its_own_gradient() {
    let cfg = mini_config(16);
    let mut model = ModelParams::init(&cfg, 3).unwrap();
    let skeleton = crate::simdata::skeleton_info(&cfg);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let pts = sample_bone_points::<2, _>(&skeleton, 128, &mut rng);
    let settings = TrainSettings {
        learning_rate: 1e-3,
        ..TrainSettings::default()
    };
    let mut adam = Adam::new(model.occupancy.num_params());
    let mut last = f64::INFINITY;
    for _ in 0..50 {
        let mut g = MlpGrad::zeros_like(&model.occupancy);
        let l = loss_bootstrap_bone(&model.occupancy, &[], &pts, 1.0, Some(&mut g)).unwrap();
        assert!(l < last, "{l} !< {last}");
        last = l;
        adam.step(model.occupancy.params_mut(), g.as_slice(), &settings);
    }
}

#[test]
fn bone_points_lie_on_bones() {
    let cfg = ExperimentConfig::stick(Regime::Extrapolation);
    let skeleton = crate::simdata::skeleton_info(&cfg);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for p in sample_bone_points::<2, _>(&skeleton, 500, &mut rng) {
        assert_eq!(p[1], 0.0);
        assert!(p[0].abs() <= 1.0);
    }
}

#[test]
fn joint_loss_examples() {
    let (l, _) = loss_bootstrap_joint(&[vec![0.5, 0.5]], &[[0, 1]]);
    assert_eq!(l, 0.0);
    let (l, _) = loss_bootstrap_joint(&[vec![0.0, 0.5, 0.5]], &[[1, 2]]);
    assert_eq!(l, 0.0);
    let third = 1.0 / 3.0;
    let (l, g) = loss_bootstrap_joint(&[vec![third; 3]], &[[0, 1]]);
    let expected = ((third - 0.5).powi(2) * 2.0 + third * third) / 3.0;
    assert!((l - expected).abs() < 1e-15);
    assert!((l - 0.055556).abs() < 1e-6);
    assert!((g[0][2] - 2.0 * third / 3.0).abs() < 1e-15);
}

#[test]
fn bootstrap_switches_off() {
    let s = TrainSettings {
        epochs: 5,
        bootstrap_epochs: 2,
        ..TrainSettings::default()
    };
    assert_eq!(s.bootstrap_coefficients(1), (1.0, 1.0));
    assert_eq!(s.bootstrap_coefficients(2), (1.0, 1.0));
    assert_eq!(s.bootstrap_coefficients(3), (0.0, 0.0));
    assert!(TrainSettings {
        bootstrap_epochs: 6,
        ..s.clone()
    }
    .validate()
    .is_err());
}

#[test]
fn zero_epochs_is_identity() {
    let cfg = mini_config(8);
    let data = generate_stick_dataset(&cfg, Split::Train).unwrap();
    let model = ModelParams::init(&cfg, 0).unwrap();
    let settings = TrainSettings {
        epochs: 0,
        bootstrap_epochs: 0,
        ..TrainSettings::default()
    };
    let out = train(model.clone(), &data, None, &settings, None).unwrap();
    assert_eq!(out.model, model);
    assert!(out.metrics.is_empty());
}

#[test]
fn training_is_bit_reproducible() {
    let cfg = mini_config(8);
    let data = generate_stick_dataset(&cfg, Split::Train).unwrap();
    let settings = TrainSettings {
        epochs: 2,
        batch_size: 8,
        learning_rate: 1e-3,
        ..TrainSettings::default()
    };
    let a = train(ModelParams::init(&cfg, 1).unwrap(), &data, None, &settings, None).unwrap();
    let b = train(ModelParams::init(&cfg, 1).unwrap(), &data, None, &settings, None).unwrap();
    assert_eq!(a.model, b.model);
    assert_ne!(a.model, ModelParams::init(&cfg, 1).unwrap());
    let base = BackLbsParams::init(&cfg, 1).unwrap();
    let c = train(base.clone(), &data, None, &settings, None).unwrap();
    let d = train(base, &data, None, &settings, None).unwrap();
    assert_eq!(c.model, d.model);
}

#[test]
fn checkpoints_and_metrics_are_written() {
    let cfg = mini_config(8);
    let data = generate_stick_dataset(&cfg, Split::Train).unwrap();
    let val = generate_stick_dataset(&cfg, Split::Test).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let settings = TrainSettings {
        epochs: 2,
        batch_size: 16,
        ..TrainSettings::default()
    };
    let out = train(ModelParams::init(&cfg, 2).unwrap(), &data, Some(&val), &settings, Some(dir.path())).unwrap();
    let csv = std::fs::read_to_string(dir.path().join("metrics.csv")).unwrap();
    assert!(csv.starts_with(METRICS_HEADER));
    assert_eq!(csv.lines().count(), 3);
    assert_eq!(out.metrics[1].loss_bone, 0.0);
    assert!(out.metrics[0].loss_bone > 0.0);
    match LoadedModel::load(&dir.path().join(LAST_CHECKPOINT)).unwrap() {
        LoadedModel::Forward(m) => assert_eq!(m, out.model),
        LoadedModel::Baseline(_) => panic!("wrong kind"),
    }
}

#[test]
fn divergence_keeps_last_good_checkpoint() {
    let cfg = mini_config(8);
    let data = generate_stick_dataset(&cfg, Split::Train).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let settings = TrainSettings {
        epochs: 1,
        batch_size: 16,
        ..TrainSettings::default()
    };
    let good = train(ModelParams::init(&cfg, 2).unwrap(), &data, None, &settings, Some(dir.path())).unwrap();
    let before = std::fs::read(dir.path().join(LAST_CHECKPOINT)).unwrap();
    let mut poisoned = good.model.clone();
    poisoned.occupancy.params_mut()[0] = f64::NAN;
    let err = train(poisoned, &data, None, &settings, Some(dir.path()));
    assert!(err.is_err());
    assert_eq!(std::fs::read(dir.path().join(LAST_CHECKPOINT)).unwrap(), before);
}

#[test]
fn baseline_reduces_to_canonical_cases() {
    let cfg = mini_config(8);
    let mut base = BackLbsParams::init(&cfg, 4).unwrap();
    base.occupancy.weights_mut(2).iter_mut().for_each(|w| *w *= 5.0);
    let ident = BoneTransformSet::<2>::identity(2, 1);
    let x = Vector::<2>::new(0.3, -0.05);
    let direct = occupancy_canonical(&base.occupancy, &x, &[]).unwrap().get();
    assert!((baseline_backlbs_forward(&base, &x, &ident).unwrap() - direct).abs() < 1e-15);

    base.weights = Mlp::zeros(base.weights.spec().clone()).unwrap();
    base.weights.bias_mut(2)[1] = 200.0;
    let bones = BoneTransformSet::new(
        vec![
            RigidTransform::identity(),
            RigidTransform::rotation_about(&Vector::<2>::zeros(), rotation_2d(0.8)),
        ],
        vec![0.8],
    )
    .unwrap();
    let xq = Vector::<2>::new(0.4, 0.5);
    let expected = occupancy_canonical(&base.occupancy, &bones.transforms[1].apply_inverse(&xq), &[]).unwrap();
    assert!((baseline_backlbs_forward(&base, &xq, &bones).unwrap() - expected.get()).abs() < 1e-12);
}

/// Central differences of the whole objective, relative error with a small floor.
fn check_objective_gradient<M: ArticulatedModel<2> + Clone>(model: &M, data: &Dataset<2>) -> (usize, usize, f64) {
    let batch: Vec<(usize, usize)> = (0..data.frames[0].points.len()).map(|i| (0, i)).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let bone_points = sample_bone_points::<2, _>(&data.manifest.skeleton, 8, &mut rng);
    let coeffs = (1.0, 1.0);
    let (_, gf, gw) = batch_objective(model, data, &batch, &bone_points, coeffs, true).unwrap();
    let value = |m: &M| {
        batch_objective(m, data, &batch, &bone_points, coeffs, false)
            .unwrap()
            .0
            .total(coeffs)
    };
    let h = 1e-5;
    let (mut ok, mut total, mut worst) = (0, 0, 0.0f64);
    for net in 0..2 {
        let analytic = if net == 0 { &gf } else { &gw };
        for k in 0..analytic.len() {
            let mut p = model.clone();
            let bump = |p: &mut M, v: f64| {
                let (f, w) = p.nets_mut();
                if net == 0 {
                    f.params_mut()[k] += v
                } else {
                    w.params_mut()[k] += v
                }
            };
            bump(&mut p, h);
            let up = value(&p);
            bump(&mut p, -2.0 * h);
            let down = value(&p);
            let fd = (up - down) / (2.0 * h);
            let a = analytic.as_slice()[k];
            let err = (a - fd).abs() / a.abs().max(fd.abs()).max(1e-7);
            worst = worst.max(err);
            ok += (err < 1e-3) as usize;
            total += 1;
        }
    }
    (ok, total, worst)
}

#[test]
fn baseline_objective_gradient_matches_finite_differences() {
    let cfg = mini_config(8);
    let data = generate_stick_dataset(&cfg, Split::Train).unwrap();
    let (ok, total, worst) = check_objective_gradient(&BackLbsParams::init(&cfg, 5).unwrap(), &data);
    assert_eq!(ok, total, "worst {worst}");
}

#[test]
fn forward_objective_gradient_matches_finite_differences() {
    let mut cfg = mini_config(8);
    let mut solver = cfg.solver_settings();
    solver.epsilon = 1e-12;
    solver.dedup_radius = 1e-6;
    cfg.solver = Some(solver);
    let data = generate_stick_dataset(&cfg, Split::Train).unwrap();
    let (ok, total, worst) = check_objective_gradient(&ModelParams::init(&cfg, 6).unwrap(), &data);
    assert!(ok as f64 >= 0.95 * total as f64 && worst < 1e-2, "{ok}/{total}, worst {worst}");
}

#[test]
fn overfits_a_single_frame() {
    let cfg = ExperimentConfig {
        frames: 1,
        samples_per_frame: 500,
        occupancy_net: NetConfig {
            hidden_widths: vec![64, 64, 64],
            hidden_activation: HiddenActivation::Relu,
        },
        skinning_net: NetConfig {
            hidden_widths: vec![16, 16],
            hidden_activation: HiddenActivation::Softplus,
        },
        ..ExperimentConfig::stick(Regime::Extrapolation)
    };
    let data = generate_stick_dataset(&cfg, Split::Train).unwrap();
    let settings = TrainSettings {
        epochs: 1000,
        batch_size: 100,
        learning_rate: 3e-3,
        ..TrainSettings::default()
    };
    let out = train(ModelParams::init(&cfg, 0).unwrap(), &data, None, &settings, None).unwrap();
    let last = out.metrics.last().unwrap().loss_bce;
    assert!(last < 0.05, "final training BCE {last}");
}
