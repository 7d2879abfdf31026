//! Property tests for the cross-cutting invariants.

use proptest::prelude::*;

use collagan::losses;
use collagan::metrics::{dice, nmse, ssim_scalar, BinaryMask};
use collagan::phantom::normalize;
use collagan::tensor::snapshot::Snapshot;
use collagan::tensor::{Graph, Tensor};

fn image_strategy(h: usize, w: usize) -> impl Strategy<Value = Tensor> {
    prop::collection::vec(-2.0f64..2.0, h * w)
        .prop_map(move |data| Tensor::new(vec![1, 1, h, w], data).unwrap())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn ssim_map_is_symmetric_and_bounded(
        x in image_strategy(9, 9),
        y in image_strategy(9, 9),
    ) {
        let mut g = Graph::new();
        let (xv, yv) = (g.constant(x), g.constant(y));
        let ab = losses::ssim_map(&mut g, xv, yv).unwrap();
        let ba = losses::ssim_map(&mut g, yv, xv).unwrap();
        for (a, b) in g.value(ab).data().iter().zip(g.value(ba).data()) {
            prop_assert!((a - b).abs() < 1e-12);
            prop_assert!(a.abs() <= 1.0 + 1e-9);
        }
    }

    #[test]
    fn ssim_scalar_agrees_with_graph_map(
        x in image_strategy(8, 8),
        y in image_strategy(8, 8),
    ) {
        let mut g = Graph::new();
        let (xv, yv) = (g.constant(x.clone()), g.constant(y.clone()));
        let map = losses::ssim_map(&mut g, xv, yv).unwrap();
        let mean = g.value(map).data().iter().sum::<f64>() / g.value(map).numel() as f64;
        prop_assert!((ssim_scalar(&x, &y).unwrap() - mean).abs() < 1e-9);
    }

    #[test]
    fn dice_is_symmetric_and_permutation_invariant(
        bits in prop::collection::vec((any::<bool>(), any::<bool>()), 32),
        seed in any::<u64>(),
    ) {
        let (a_bits, b_bits): (Vec<bool>, Vec<bool>) = bits.into_iter().unzip();
        let a = BinaryMask::new(vec![a_bits.len()], a_bits.clone());
        let b = BinaryMask::new(vec![b_bits.len()], b_bits.clone());
        let d = dice(&a, &b).unwrap();
        prop_assert_eq!(d, dice(&b, &a).unwrap());
        // Rotate both masks by the same offset: Dice is unchanged.
        let k = (seed as usize) % a_bits.len();
        let rot = |v: &[bool]| -> Vec<bool> {
            v.iter().cycle().skip(k).take(v.len()).copied().collect()
        };
        let ra = BinaryMask::new(vec![a_bits.len()], rot(&a_bits));
        let rb = BinaryMask::new(vec![b_bits.len()], rot(&b_bits));
        prop_assert_eq!(d, dice(&ra, &rb).unwrap());
    }

    #[test]
    fn nmse_scaling_behavior(
        x in prop::collection::vec(0.1f64..2.0, 16),
        eps in 0.01f64..0.5,
    ) {
        let t = Tensor::new(vec![16], x).unwrap();
        let scaled = t.map(|v| (1.0 + eps) * v);
        prop_assert!((nmse(&t, &scaled).unwrap() - eps * eps).abs() < 1e-9);
        // Exact at a power-of-two scale factor.
        let doubled = t.map(|v| 2.0 * v);
        prop_assert_eq!(nmse(&t, &doubled).unwrap(), 1.0);
    }

    #[test]
    fn normalize_is_idempotent_and_keeps_zeros(
        mut data in prop::collection::vec(0.0f64..3.0, 64),
        zero_every in 2usize..6,
    ) {
        for (i, v) in data.iter_mut().enumerate() {
            if i % zero_every == 0 {
                *v = 0.0;
            } else if *v == 0.0 {
                *v = 0.5;
            }
        }
        let spread: Vec<f64> = data.iter().copied().filter(|&v| v != 0.0).collect();
        prop_assume!(spread.len() > 1);
        let mean = spread.iter().sum::<f64>() / spread.len() as f64;
        prop_assume!(spread.iter().any(|v| (v - mean).abs() > 1e-6));

        let t = Tensor::new(vec![1, 8, 8], data).unwrap();
        let n = normalize(&t).unwrap();
        prop_assert_eq!(normalize(&n).unwrap(), n.clone());
        for (orig, out) in t.data().iter().zip(n.data()) {
            if *orig == 0.0 {
                prop_assert_eq!(*out, 0.0);
            }
        }
    }

    #[test]
    fn concat_slice_round_trip_and_gradient_routing(
        a in image_strategy(4, 4),
        b in image_strategy(4, 4),
    ) {
        let mut g = Graph::new();
        let av = g.leaf(a.clone(), true);
        let bv = g.leaf(b.clone(), true);
        let cat = g.concat(&[av, bv], 1).unwrap();
        let sa = g.slice(cat, 1, 0, 1).unwrap();
        let sb = g.slice(cat, 1, 1, 1).unwrap();
        prop_assert_eq!(g.value(sa), &a);
        prop_assert_eq!(g.value(sb), &b);
        let loss = g.mean_sq(sb);
        g.backward(loss).unwrap();
        // All gradient mass routes to the second operand.
        prop_assert!(g.grad(av).is_none() || g.grad(av).unwrap().iter().all(|&v| v == 0.0));
        let gb = g.grad(bv).unwrap();
        for (gv, &bv_) in gb.iter().zip(b.data()) {
            prop_assert!((gv - 2.0 * bv_ / 16.0).abs() < 1e-12);
        }
    }

    #[test]
    fn snapshot_round_trip_is_bitwise(
        data in prop::collection::vec(any::<f64>().prop_filter("finite", |v| v.is_finite()), 1..32),
        name in "[a-z/_]{1,12}",
    ) {
        let mut snap = Snapshot::new();
        let len = data.len();
        snap.insert(name, Tensor::new(vec![len], data).unwrap());
        let decoded = Snapshot::from_bytes(&snap.to_bytes()).unwrap();
        prop_assert_eq!(snap, decoded);
    }
}
