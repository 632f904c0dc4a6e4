//! Randomised invariants.

use proptest::prelude::*;
use xnet_core::metrics::{confusion, metrics_from_counts};
use xnet_core::nn::{conv_param_count, dsc_param_count};
use xnet_core::{Graph, Tensor};

proptest! {
    #[test]
    fn softmax_slices_sum_to_one(
        dims in prop::collection::vec(1usize..5, 3),
        axis in 0usize..3,
        seed in any::<u64>(),
        scale in 0.1f64..20.0,
    ) {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let x = Tensor::<f64>::randn(&dims, scale, &mut rng);
        let mut g = Graph::new();
        let v = g.input(x).unwrap();
        let s = g.softmax(v, axis).unwrap();
        let y = g.value(s).data();
        let inner: usize = dims[axis + 1..].iter().product();
        let outer: usize = dims[..axis].iter().product();
        for o in 0..outer {
            for i in 0..inner {
                let sum: f64 = (0..dims[axis]).map(|k| y[(o * dims[axis] + k) * inner + i]).sum();
                prop_assert!((sum - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn dice_and_iou_are_linked(
        pairs in prop::collection::vec((0u8..2, 0u8..2), 1..400),
    ) {
        let (pred, gt): (Vec<u8>, Vec<u8>) = pairs.into_iter().unzip();
        let m = metrics_from_counts(&confusion(&pred, &gt).unwrap());
        prop_assert!((m.dice - 2.0 * m.iou / (1.0 + m.iou)).abs() < 1e-12);
        prop_assert!((0.0..=1.0).contains(&m.dice) && m.iou <= m.dice + 1e-15);
    }

    #[test]
    fn separable_is_cheaper_than_standard(ci in 1usize..512, co in 2usize..512, half in 1usize..4) {
        let k = 2 * half + 1;
        prop_assert!(dsc_param_count(ci, co, k) < conv_param_count(ci, co, k));
    }
}
