use latent_mpm::autodiff::{grad, Tensor};
use latent_mpm::neural::LOG_FLOOR;
use proptest::prelude::*;

fn row(values: Vec<f64>) -> Tensor {
    Tensor::row_vector(values)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn clamp_min_gradient_is_zero_or_one(x in prop::collection::vec(-1.0..1.0f64, 1..16), lo in -0.5..0.5f64) {
        let r = grad(&[vec![row(x.clone())]], |t, v| {
            let c = t.clamp_min(v[0][0], lo);
            Ok(t.sum(c))
        })
        .unwrap();
        for (g, x) in r.groups[0][0].data.iter().zip(&x) {
            prop_assert_eq!(*g, if *x > lo { 1.0 } else { 0.0 });
        }
    }

    #[test]
    fn clamp_range_gradient_is_zero_or_one(x in prop::collection::vec(-2.0..2.0f64, 1..16)) {
        let r = grad(&[vec![row(x.clone())]], |t, v| {
            let c = t.clamp_range(v[0][0], -1.0, 1.0);
            Ok(t.sum(c))
        })
        .unwrap();
        for (g, x) in r.groups[0][0].data.iter().zip(&x) {
            prop_assert_eq!(*g, if x.abs() < 1.0 { 1.0 } else { 0.0 });
        }
    }

    #[test]
    fn floored_log_passes_gradient_only_above_floor(x in prop::collection::vec(-1e-3..1.0f64, 1..16)) {
        let r = grad(&[vec![row(x.clone())]], |t, v| {
            let c = t.clamp_min(v[0][0], LOG_FLOOR);
            let l = t.log(c);
            Ok(t.sum(l))
        })
        .unwrap();
        for (g, x) in r.groups[0][0].data.iter().zip(&x) {
            let want = if *x > LOG_FLOOR { 1.0 / x } else { 0.0 };
            prop_assert!((g - want).abs() <= 1e-12 * want.abs());
        }
    }

    #[test]
    fn identical_programs_give_identical_gradients(
        a in prop::collection::vec(0.5..2.0f64, 18),
        b in prop::collection::vec(-1.0..1.0f64, 18),
    ) {
        let run = || {
            grad(&[vec![Tensor::new(2, 9, a.clone()), Tensor::new(2, 9, b.clone())]], |t, v| {
                let m = t.matmul3(v[0][0], v[0][1]);
                let d = t.det3(m);
                let e = t.gelu(m);
                let s = t.sum_cols(e);
                let p = t.mul(s, d);
                Ok(t.sum(p))
            })
            .unwrap()
        };
        let (x, y) = (run(), run());
        prop_assert_eq!(x.loss.to_bits(), y.loss.to_bits());
        for (p, q) in x.groups[0].iter().zip(&y.groups[0]) {
            prop_assert!(p.data.iter().zip(&q.data).all(|(u, v)| u.to_bits() == v.to_bits()));
        }
    }
}
