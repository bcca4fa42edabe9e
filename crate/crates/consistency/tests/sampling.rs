use cfgcd_autodiff::Tensor;
use cfgcd_consistency::{
    generate_consistency, guided_teacher_output, student_forward, train_guided_teacher, ConsistencyError,
    ConsistencyModel, ConsistencyParam, GuidanceMode, GuidedInitConfig,
};
use cfgcd_nets::{Condition, DenoiserNet, NetConfig};
use cfgcd_schedules::NoiseSchedule;
use cfgcd_teacher::{cfg_combine, guided_eps, initial_noise, EpsModel, QueryCounter};
use cfgcd_toyworld::{make_dataset, WorldConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn schedule() -> NoiseSchedule {
    NoiseSchedule::vp_linear(1000, 1e-4, 0.02).unwrap()
}

fn student(mode: GuidanceMode) -> ConsistencyModel {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let net = DenoiserNet::new(NetConfig::new(4, 3, vec![16]).with_w_branch(mode.has_w_branch()), &mut rng).unwrap();
    let param = ConsistencyParam::new(0.6, 1e-3, 1.0, schedule()).unwrap();
    ConsistencyModel::new(net, param, mode).unwrap()
}

fn prompts() -> Vec<Condition> {
    (0..9).map(|i| Condition::Class(i % 3)).collect()
}

#[test]
fn query_counts_per_mode() {
    let cases = [
        (GuidanceMode::Unguided, None, 1),
        (GuidanceMode::Direct { w: 3.0 }, None, 2),
        (GuidanceMode::Direct { w: 3.0 }, Some(5.0), 2),
        (GuidanceMode::Fixed { w: 3.0 }, Some(3.0), 1),
        (GuidanceMode::Fixed { w: 3.0 }, None, 1),
        (GuidanceMode::variable_default(), Some(4.0), 1),
        (GuidanceMode::variable_default(), Some(6.0), 1),
    ];
    for (mode, w, want) in cases {
        let (x, q) = generate_consistency(&student(mode), &prompts(), w, 0).unwrap();
        assert_eq!(q, want, "{mode:?} at {w:?}");
        assert_eq!(x.shape(), [9, 4]);
    }
}

#[test]
fn guidance_contract_errors() {
    let fixed = student(GuidanceMode::Fixed { w: 3.0 });
    assert!(matches!(
        generate_consistency(&fixed, &prompts(), Some(4.0), 0),
        Err(ConsistencyError::GuidanceMismatch { trained, requested }) if trained == 3.0 && requested == 4.0
    ));
    let unguided = student(GuidanceMode::Unguided);
    assert!(generate_consistency(&unguided, &prompts(), Some(1.0), 0).is_ok());
    assert!(generate_consistency(&unguided, &prompts(), Some(3.0), 0).is_err());
    let var = student(GuidanceMode::variable_default());
    assert!(generate_consistency(&var, &prompts(), None, 0).is_err());
    assert!(matches!(
        generate_consistency(&var, &prompts(), Some(6.5), 0),
        Err(ConsistencyError::GuidanceOutOfRange { .. })
    ));
    assert!(generate_consistency(&var, &prompts(), Some(-0.5), 0).is_err());
    assert!(generate_consistency(&var, &[], Some(1.0), 0).is_err());
}

#[test]
fn samples_are_seeded_and_share_teacher_noise() {
    for mode in [GuidanceMode::Unguided, GuidanceMode::Fixed { w: 2.0 }] {
        let m = student(mode);
        let (a, _) = generate_consistency(&m, &prompts(), None, 17).unwrap();
        let (b, _) = generate_consistency(&m, &prompts(), None, 17).unwrap();
        let (c, _) = generate_consistency(&m, &prompts(), None, 18).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
        let z = initial_noise(17, 9, 4);
        let direct = student_forward(&m, &z, &[1.0; 9], &prompts(), None, &mut QueryCounter::new()).unwrap();
        assert_eq!(a, direct);
    }
}

#[test]
fn direct_mode_is_guidance_on_student_outputs() {
    let m = student(GuidanceMode::Direct { w: 3.0 });
    let z = initial_noise(4, 9, 4);
    let t = [1.0; 9];
    let mut q = QueryCounter::new();
    let c = student_forward(&m, &z, &t, &prompts(), None, &mut q).unwrap();
    let u = student_forward(&m, &z, &t, &[Condition::Null; 9], None, &mut q).unwrap();
    for w in [3.0, 0.0, 1.0, 4.5] {
        let (x, _) = generate_consistency(&m, &prompts(), Some(w), 4).unwrap();
        assert_eq!(x, cfg_combine(&c, &u, w).unwrap(), "w = {w}");
    }
    let (x1, _) = generate_consistency(&m, &prompts(), Some(1.0), 4).unwrap();
    assert_eq!(x1, c);
}

#[test]
fn variable_mode_feeds_strength_to_network() {
    let m = student(GuidanceMode::variable_default());
    let (a, _) = generate_consistency(&m, &prompts(), Some(2.0), 3).unwrap();
    let (b, _) = generate_consistency(&m, &prompts(), Some(5.0), 3).unwrap();
    assert_ne!(a, b);
    let z = initial_noise(3, 9, 4);
    let want = student_forward(&m, &z, &[1.0; 9], &prompts(), Some(&[2.0; 9]), &mut QueryCounter::new()).unwrap();
    assert_eq!(a, want);
}

#[test]
fn guided_teacher_output_identities() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let teacher = DenoiserNet::new(NetConfig::new(4, 3, vec![16, 16]), &mut rng).unwrap();
    let z = Tensor::new(6, 4, (0..24).map(|_| rng.random_range(-2.0..2.0)).collect()).unwrap();
    let t = [0.1, 0.2, 0.5, 0.7, 0.9, 1.0];
    let cond: Vec<Condition> = (0..6).map(|i| Condition::Class(i % 3)).collect();
    let c = teacher.eps(&z, &t, &cond).unwrap();
    let u = teacher.eps(&z, &t, &[Condition::Null; 6]).unwrap();

    let mut q = QueryCounter::new();
    assert_eq!(guided_teacher_output(&teacher, &z, &t, &cond, 1.0, &mut q).unwrap(), c);
    assert_eq!(q.count(), 1);
    assert_eq!(guided_teacher_output(&teacher, &z, &t, &cond, 0.0, &mut q).unwrap(), u);
    assert_eq!(q.count(), 3);
    assert_eq!(guided_teacher_output(&teacher, &z, &t, &cond, 3.0, &mut q).unwrap(), cfg_combine(&c, &u, 3.0).unwrap());
}

#[test]
fn guided_initialization_learns_the_guided_teacher() {
    let ds = make_dataset(WorldConfig { samples_per_class: 100, ..WorldConfig::default() }, 0).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let teacher = DenoiserNet::new(NetConfig::new(8, 8, vec![32, 32]), &mut rng).unwrap();
    let config = GuidedInitConfig { iterations: 300, batch: 64, ..GuidedInitConfig::default() };
    let trained = train_guided_teacher(&teacher, &ds, &schedule(), &config, 0).unwrap();
    assert!(trained.has_w_branch());
    let untrained =
        train_guided_teacher(&teacher, &ds, &schedule(), &GuidedInitConfig { iterations: 0, ..config.clone() }, 0)
            .unwrap();

    let mut eval = ChaCha8Rng::seed_from_u64(4);
    let b = ds.batch(&mut eval, 256);
    let t: Vec<f64> = (0..256).map(|_| eval.random_range(0.05..1.0)).collect();
    let w: Vec<f64> = (0..256).map(|_| eval.random_range(0.0..6.0)).collect();
    let cond: Vec<Condition> = b.captions.iter().map(|&c| Condition::Class(c)).collect();
    let target = guided_eps(&teacher, &b.z0, &t, &cond, &w, &mut QueryCounter::new()).unwrap();
    let err = |net: &DenoiserNet| {
        let p = net.forward(&b.z0, &t, &cond, Some(&w)).unwrap();
        p.data().iter().zip(target.data()).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / p.len() as f64
    };
    let (before, after) = (err(&untrained), err(&trained));
    assert!(after < 0.5 * before, "regression error {before:.4} -> {after:.4}");
    assert_eq!(trained, train_guided_teacher(&teacher, &ds, &schedule(), &config, 0).unwrap());
    assert!(train_guided_teacher(
        &teacher,
        &ds,
        &schedule(),
        &GuidedInitConfig { w_min: 3.0, w_max: 2.0, ..config },
        0
    )
    .is_err());
}
