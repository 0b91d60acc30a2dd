use ndgrad::check::{differentiable_ops, gradient_check};
use proptest::prelude::*;
use rand::rngs::StdRng;
use rand::SeedableRng;

#[test]
fn every_op_matches_central_differences() {
    for (name, make) in differentiable_ops() {
        for seed in 0..20u64 {
            let mut rng = StdRng::seed_from_u64(seed * 7919 + 1);
            let inst = make(&mut rng);
            let err = gradient_check(&inst, &mut rng, 1e-6).unwrap();
            assert!(err < 1e-4, "{name} seed {seed}: relative error {err}");
        }
    }
}

proptest! {
    #[test]
    fn softmax_is_a_probability_vector(logits in prop::collection::vec(-30.0f32..30.0, 1..12), mask_bits in any::<u16>()) {
        let n = logits.len();
        let mut mask: Vec<bool> = (0..n).map(|i| mask_bits & (1 << i) != 0).collect();
        mask[0] = true;
        let tape = ndgrad::Tape::<f32>::new();
        let x = tape.constant(ndgrad::Tensor::new(vec![n], logits).unwrap());
        let p = tape.softmax(x, Some(&mask)).unwrap();
        let pv = tape.value(p);
        let total: f64 = pv.data().iter().map(|v| *v as f64).sum();
        prop_assert!((total - 1.0).abs() < 1e-6);
        for (v, m) in pv.data().iter().zip(&mask) {
            prop_assert!(*v >= 0.0);
            if !m { prop_assert_eq!(*v, 0.0); }
        }
    }
}
