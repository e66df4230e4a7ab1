//! Property tests over the metrics, guidance and autodiff.

use clickadapt::adapt::subsample_clicks;
use clickadapt::eval::{clicks_at_q, fill_curve, iou};
use clickadapt::guidance::{encode_guidance, Click};
use clickadapt::{mas_penalty, Graph, ImportanceSet, ParamSet, Tensor};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn mask(n: usize) -> impl Strategy<Value = Tensor> {
    prop::collection::vec(prop::bool::ANY, n * n)
        .prop_map(move |v| Tensor::new(vec![n, n], v.into_iter().map(f64::from).collect()).unwrap())
}

fn curve() -> impl Strategy<Value = (Vec<f64>, usize)> {
    (1usize..25).prop_flat_map(|budget| (prop::collection::vec(0.0..=1.0f64, budget + 1), Just(budget)))
}

proptest! {
    #[test]
    fn clicks_at_q_is_monotone_in_q((c, budget) in curve(), q1 in 0.0..=1.0f64, q2 in 0.0..=1.0f64) {
        let (lo, hi) = if q1 <= q2 { (q1, q2) } else { (q2, q1) };
        let a = clicks_at_q(&c, lo, budget).unwrap();
        let b = clicks_at_q(&c, hi, budget).unwrap();
        prop_assert!(a <= b);
        prop_assert!(b <= budget);
    }

    #[test]
    fn clicks_at_q_hits_reach_the_target((c, budget) in curve(), q in 0.0..=1.0f64) {
        let k = clicks_at_q(&c, q, budget).unwrap();
        prop_assert!(c[..k].iter().all(|&v| v < q));
        prop_assert!(k == budget || c[k] >= q);
    }

    #[test]
    fn filled_curve_has_budget_plus_one_entries(c in prop::collection::vec(0.0..=1.0f64, 1..30), budget in 1usize..25) {
        let f = fill_curve(&c, budget);
        prop_assert_eq!(f.len(), budget + 1);
        let n = c.len().min(budget + 1);
        prop_assert_eq!(&f[..n], &c[..n]);
    }

    #[test]
    fn iou_is_symmetric_and_bounded(a in mask(6), b in mask(6)) {
        let ab = iou(&a, &b).unwrap();
        prop_assert_eq!(ab, iou(&b, &a).unwrap());
        prop_assert!((0.0..=1.0).contains(&ab));
        prop_assert_eq!(iou(&a, &a).unwrap(), 1.0);
    }

    #[test]
    fn guidance_disks_are_bounded(row in 0usize..20, col in 0usize..20, radius in 0usize..5, positive in prop::bool::ANY) {
        let click = if positive { Click::positive(row, col) } else { Click::negative(row, col) };
        let g = encode_guidance(&[click], 20, 20, radius).unwrap();
        let (on, off) = if positive { (0, 1) } else { (1, 0) };
        prop_assert!(g.set_count(on) >= 1);
        prop_assert!(g.set_count(on) <= (2 * radius + 1).pow(2));
        prop_assert_eq!(g.set_count(off), 0);
    }

    #[test]
    fn subsample_takes_half_rounded_up(n in 0usize..30, seed in 0u64..1000) {
        let clicks: Vec<Click> = (0..n).map(|i| Click::positive(i, i)).collect();
        let picked = subsample_clicks(&clicks, 0.5, &mut ChaCha8Rng::seed_from_u64(seed));
        prop_assert_eq!(picked.len(), n.div_ceil(2));
        prop_assert!(picked.windows(2).all(|w| w[0].row < w[1].row));
    }

    #[test]
    fn mas_penalty_is_nonnegative(
        t in prop::collection::vec(-5.0..5.0f64, 6),
        s in prop::collection::vec(-5.0..5.0f64, 6),
        w in prop::collection::vec(0.0..5.0f64, 6),
    ) {
        let set = |v: Vec<f64>| -> ParamSet { [("w".to_string(), Tensor::new(vec![6], v).unwrap())].into_iter().collect() };
        let omega = ImportanceSet::from_params(set(w)).unwrap();
        prop_assert!(mas_penalty(&set(t), &set(s), &omega).unwrap() >= 0.0);
    }

    /// The gradient of `a·f + b·h` is `a·∇f + b·∇h`.
    #[test]
    fn backprop_is_linear(
        x in prop::collection::vec(-2.0..2.0f64, 8),
        a in -3.0..3.0f64,
        b in -3.0..3.0f64,
    ) {
        let grad = |ca: f64, cb: f64| -> Vec<f64> {
            let mut g = Graph::new();
            let v = g.param("x", Tensor::new(vec![8], x.clone()).unwrap());
            let sq = g.square(v);
            let f = g.sum(sq);
            let s = g.sigmoid(v);
            let h = g.mean(s);
            let fa = g.scale(f, ca).unwrap();
            let hb = g.scale(h, cb).unwrap();
            let total = g.add(fa, hb).unwrap();
            g.backward(total).unwrap().get("x").unwrap().data().to_vec()
        };
        let (gf, gh, gl) = (grad(1.0, 0.0), grad(0.0, 1.0), grad(a, b));
        for i in 0..8 {
            prop_assert!((gl[i] - (a * gf[i] + b * gh[i])).abs() <= 1e-12);
        }
    }
}
