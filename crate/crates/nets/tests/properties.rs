use cfgcd_autodiff::Tensor;
use cfgcd_nets::{Condition, DenoiserNet, NetConfig};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn null_inputs_ignore_class_rows(seed in 0u64..1000, z in prop::collection::vec(-3.0f64..3.0, 12), t in prop::collection::vec(0.0f64..1.0, 3)) {
        let cfg = NetConfig::new(4, 5, vec![8, 8]);
        let a = DenoiserNet::new(cfg, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        let mut b = a.clone();
        let table = b.param_mut("cond.table").unwrap();
        for r in 0..5 {
            for x in table.row_mut(r) {
                *x += 1.0 + r as f64;
            }
        }
        let z = Tensor::new(3, 4, z).unwrap();
        let null = [Condition::Null; 3];
        prop_assert_eq!(a.forward(&z, &t, &null, None).unwrap(), b.forward(&z, &t, &null, None).unwrap());
        let cls = [Condition::Class(1); 3];
        prop_assert_ne!(a.forward(&z, &t, &cls, None).unwrap(), b.forward(&z, &t, &cls, None).unwrap());
    }

    #[test]
    fn output_shape_equals_latent_shape(n in 1usize..20, seed in 0u64..100) {
        let cfg = NetConfig::new(3, 2, vec![5]);
        let net = DenoiserNet::new(cfg, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        let z = Tensor::full(n, 3, 0.2);
        let out = net.forward(&z, &vec![0.5; n], &vec![Condition::Class(1); n], None).unwrap();
        prop_assert_eq!(out.shape(), [n, 3]);
    }

    #[test]
    fn parameter_count_is_pure(d in 1usize..10, k in 1usize..10, h in prop::collection::vec(1usize..20, 1..4), wb in any::<bool>()) {
        let cfg = NetConfig::new(d, k, h).with_w_branch(wb);
        let a = DenoiserNet::new(cfg.clone(), &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let b = DenoiserNet::new(cfg.clone(), &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        prop_assert_eq!(a.param_count(), b.param_count());
        prop_assert_eq!(a.param_count(), cfg.param_count());
    }
}
