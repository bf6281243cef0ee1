use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use ufa_fuse::tensor::{softmax_over_set, Shape, Tensor};

fn values(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(-2.0..2.0)).collect()
}

type Combine = fn(&Tensor<f64>, &Tensor<f64>) -> Tensor<f64>;

// d/db of sum(w * op(a, b)) with b broadcast, against the same objective on a
// pre-tiled copy of b whose gradient is summed back over the tiled positions.
fn broadcast_matches_tiling(full: Shape, small: Shape, seed: u64, op: Combine) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let a = Tensor::new(full, values(&mut rng, full.numel())).unwrap();
    let w = Tensor::new(full, values(&mut rng, full.numel())).unwrap();
    let bv: Vec<f64> = values(&mut rng, small.numel()).iter().map(|v| v.abs() + 0.5).collect();
    let src = |n: usize, c: usize, h: usize, x: usize| {
        small.index(n.min(small.n - 1), c.min(small.c - 1), h.min(small.h - 1), x.min(small.w - 1))
    };

    let b = Tensor::parameter(small, bv.clone()).unwrap();
    op(&a, &b).mul(&w).unwrap().sum().backward().unwrap();
    let got = b.grad().unwrap();

    let tiled = Tensor::parameter(full, Tensor::from_fn(full, |n, c, h, x| bv[src(n, c, h, x)]).into_data()).unwrap();
    op(&a, &tiled).mul(&w).unwrap().sum().backward().unwrap();
    let tg = tiled.grad().unwrap();
    let mut want = vec![0.0; small.numel()];
    for n in 0..full.n {
        for c in 0..full.c {
            for h in 0..full.h {
                for x in 0..full.w {
                    want[src(n, c, h, x)] += tg[full.index(n, c, h, x)];
                }
            }
        }
    }
    got.iter().zip(&want).map(|(g, w)| (g - w).abs() / w.abs().max(1.0)).fold(0.0, f64::max)
}

const OPS: [(&str, Combine); 7] = [
    ("add", |a, b| a.add(b).unwrap()),
    ("sub", |a, b| a.sub(b).unwrap()),
    ("mul", |a, b| a.mul(b).unwrap()),
    ("div", |a, b| a.div(b).unwrap()),
    ("add small-first", |a, b| b.add(a).unwrap()),
    ("sub small-first", |a, b| b.sub(a).unwrap()),
    ("div small-first", |a, b| b.div(&a.abs().add_scalar(0.5)).unwrap()),
];

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn broadcast_gradient_equals_tiled_gradient(
        n in 1usize..3, c in 1usize..5, h in 1usize..6, w in 1usize..6,
        per_channel in any::<bool>(), seed in any::<u64>(),
    ) {
        let full = Shape::new(n, c, h, w);
        let small = if per_channel { Shape::new(n, c, 1, 1) } else { Shape::new(n, 1, h, w) };
        for (name, op) in OPS {
            let err = broadcast_matches_tiling(full, small, seed, op);
            prop_assert!(err <= 1e-6, "{name} {full} <- {small}: {err}");
        }
    }

    #[test]
    fn softmax_stays_finite_and_normalized_at_large_logits(
        k in 2usize..5, scale in 1.0f64..1e4, seed in any::<u64>(),
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let s = Shape::new(1, 2, 3, 3);
        let xs: Vec<Tensor<f32>> = (0..k)
            .map(|_| Tensor::from_fn(s, |_, _, _, _| (rng.gen_range(-1.0..1.0) * scale) as f32))
            .collect();
        let ys = softmax_over_set(&xs).unwrap();
        for i in 0..s.numel() {
            let total: f64 = ys.iter().map(|y| y.data()[i] as f64).sum();
            prop_assert!(ys.iter().all(|y| y.data()[i].is_finite() && y.data()[i] >= 0.0));
            prop_assert!((total - 1.0).abs() <= 1e-5, "sum {total}");
        }
    }
}
