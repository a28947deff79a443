use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::error::Error;

const CASES: usize = 100;

fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    Tensor::from_fn(shape.to_vec(), |_| rng.random_range(lo..hi))
}

/// Runs `build` on random inputs of the given shapes and compares the
/// gradient of `sum(out ⊙ r)` (random `r`) against central differences.
fn check_primitive<F>(label: &str, shapes: &[&[usize]], range: (f64, f64), build: F)
where
    F: Fn(&mut Graph<f64>, &[Var]) -> crate::error::Result<Var>,
{
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed ^ label.len() as u64);
    let mut worst = 0.0f64;
    for case in 0..CASES {
        let mut params = ParamStore::new();
        for (i, shape) in shapes.iter().enumerate() {
            params.insert(format!("in{i}"), random_tensor(&mut rng, shape, range.0, range.1));
        }
        // Weights for the scalar readout are drawn once per case.
        let probe = {
            let mut g = Graph::new();
            let vars = g.bind_frozen(&params);
            let inputs: Vec<Var> = (0..shapes.len())
                .map(|i| vars.get(&format!("in{i}")).unwrap())
                .collect();
            let out = build(&mut g, &inputs).unwrap();
            random_tensor(&mut rng, g.shape(out), -1.0, 1.0)
        };
        let report = finite_difference_check(
            |g, vars| {
                let inputs: Vec<Var> = (0..shapes.len())
                    .map(|i| vars.get(&format!("in{i}")).unwrap())
                    .collect();
                let out = build(g, &inputs)?;
                let r = g.constant(probe.clone());
                let weighted = g.mul(out, r)?;
                Ok(g.sum(weighted))
            },
            &params,
            1e-5,
            1e-6,
            Coverage::All,
        )
        .unwrap();
        worst = worst.max(report.max_rel_err());
        assert!(
            report.passed(),
            "{label} case {case}: max rel err {} ({:?})",
            report.max_rel_err(),
            report.params
        );
    }
    assert!(worst < 1e-6, "{label}: {worst}");
}

#[test]
fn gradcheck_matmul() {
    check_primitive("matmul", &[&[3, 4], &[4, 2]], (-1.0, 1.0), |g, x| g.matmul(x[0], x[1]));
}

#[test]
fn gradcheck_add_mul() {
    check_primitive("add", &[&[2, 3], &[2, 3]], (-1.0, 1.0), |g, x| g.add(x[0], x[1]));
    check_primitive("mul", &[&[2, 3], &[2, 3]], (-1.0, 1.0), |g, x| g.mul(x[0], x[1]));
    check_primitive("mul_self", &[&[5]], (-1.0, 1.0), |g, x| g.mul(x[0], x[0]));
    check_primitive("scale", &[&[4]], (-1.0, 1.0), |g, x| Ok(g.scale(x[0], -2.5)));
}

#[test]
fn gradcheck_unary() {
    check_primitive("exp", &[&[6]], (-2.0, 2.0), |g, x| Ok(g.exp(x[0])));
    check_primitive("log", &[&[6]], (0.5, 2.0), |g, x| Ok(g.log(x[0])));
    check_primitive("sigmoid", &[&[6]], (-4.0, 4.0), |g, x| Ok(g.sigmoid(x[0])));
    check_primitive("swish", &[&[6]], (-4.0, 4.0), |g, x| Ok(g.swish(x[0])));
}

#[test]
fn gradcheck_reductions() {
    check_primitive("sum", &[&[3, 2]], (-1.0, 1.0), |g, x| Ok(g.sum(x[0])));
    check_primitive("sum_axis0", &[&[3, 4]], (-1.0, 1.0), |g, x| g.sum_axis(x[0], 0));
    check_primitive("sum_axis1", &[&[2, 3, 2]], (-1.0, 1.0), |g, x| g.sum_axis(x[0], 1));
    check_primitive("mean_axis0", &[&[5, 3]], (-1.0, 1.0), |g, x| g.mean_axis(x[0], 0));
    check_primitive("mean_axis1", &[&[5, 3]], (-1.0, 1.0), |g, x| g.mean_axis(x[0], 1));
}

#[test]
fn gradcheck_softmax_family() {
    check_primitive("softmax1", &[&[3, 5]], (-3.0, 3.0), |g, x| g.softmax(x[0], 1));
    check_primitive("softmax0", &[&[4, 2]], (-3.0, 3.0), |g, x| g.softmax(x[0], 0));
    check_primitive("log_softmax1", &[&[3, 5]], (-3.0, 3.0), |g, x| g.log_softmax(x[0], 1));
    check_primitive("log_softmax0", &[&[4, 2]], (-3.0, 3.0), |g, x| g.log_softmax(x[0], 0));
}

#[test]
fn gradcheck_layer_norm() {
    check_primitive("layer_norm", &[&[4, 6], &[6], &[6]], (-2.0, 2.0), |g, x| {
        g.layer_norm(x[0], x[1], x[2], 1e-5)
    });
}

#[test]
fn gradcheck_indexing() {
    check_primitive("gather_rows", &[&[4, 3]], (-1.0, 1.0), |g, x| {
        g.gather_rows(x[0], &[3, 0, 3, 1])
    });
    check_primitive("masked_select", &[&[4, 3]], (-1.0, 1.0), |g, x| {
        g.masked_select(x[0], &[true, false, true, true])
    });
    check_primitive("transpose", &[&[2, 5]], (-1.0, 1.0), |g, x| g.transpose(x[0]));
    check_primitive("slice", &[&[3, 6]], (-1.0, 1.0), |g, x| g.slice(x[0], 1, 2, 5));
    check_primitive("slice_rows", &[&[5, 2]], (-1.0, 1.0), |g, x| g.slice(x[0], 0, 1, 3));
    check_primitive("concat", &[&[2, 3], &[2, 1]], (-1.0, 1.0), |g, x| {
        g.concat(&[x[0], x[1], x[0]], 1)
    });
    check_primitive("concat_rows", &[&[2, 3], &[1, 3]], (-1.0, 1.0), |g, x| {
        g.concat(&[x[0], x[1]], 0)
    });
    check_primitive("reshape", &[&[2, 6]], (-1.0, 1.0), |g, x| g.reshape(x[0], &[3, 4]));
    check_primitive("expand_rows", &[&[4]], (-1.0, 1.0), |g, x| g.expand_rows(x[0], 3));
}

#[test]
fn gradcheck_depthwise_conv() {
    check_primitive("dwconv", &[&[7, 3], &[5, 3]], (-1.0, 1.0), |g, x| {
        g.depthwise_conv1d(x[0], x[1])
    });
    check_primitive("dwconv_short", &[&[2, 2], &[5, 2]], (-1.0, 1.0), |g, x| {
        g.depthwise_conv1d(x[0], x[1])
    });
}

#[test]
fn softmax_of_zeros_is_uniform() {
    let mut g = Graph::<f64>::new();
    let x = g.constant(Tensor::zeros([3]));
    let y = g.softmax(x, 0).unwrap();
    for &p in g.value(y).data() {
        assert!((p - 1.0 / 3.0).abs() < 1e-15);
    }
}

#[test]
fn softmax_rows_are_distributions() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for _ in 0..CASES {
        let mut g = Graph::<f32>::new();
        let x = g.constant(Tensor::from_fn([4, 9], |_| rng.random_range(-20.0..20.0)));
        let y = g.softmax(x, 1).unwrap();
        let t = g.value(y);
        for r in 0..4 {
            assert!(t.row(r).iter().all(|&p| p >= 0.0));
            let total: f32 = t.row(r).iter().sum();
            assert!((total - 1.0).abs() < 1e-6, "{total}");
        }
    }
}

#[test]
fn log_softmax_matches_log_of_softmax() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for _ in 0..CASES {
        let mut g = Graph::<f64>::new();
        let x = g.constant(random_tensor(&mut rng, &[3, 7], -5.0, 5.0));
        let ls = g.log_softmax(x, 1).unwrap();
        let s = g.softmax(x, 1).unwrap();
        let logged = g.log(s);
        assert!(g.value(ls).max_abs_diff(g.value(logged)) < 1e-6);
    }
}

#[test]
fn identity_matmul() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let m = random_tensor(&mut rng, &[3, 3], -1.0, 1.0);
    let mut g = Graph::new();
    let i = g.constant(Tensor::identity(3));
    let mv = g.constant(m.clone());
    let out = g.matmul(i, mv).unwrap();
    assert_eq!(g.value(out), &m);
}

#[test]
fn sum_gradient_is_ones() {
    let mut g = Graph::<f64>::new();
    let x = g.param("x", Tensor::new([4], vec![0.1, -2.0, 3.0, 7.0]).unwrap());
    let s = g.sum(x);
    let grads = g.backward(s).unwrap();
    assert_eq!(grads.get("x").unwrap().data(), &[1.0, 1.0, 1.0, 1.0]);
}

#[test]
fn mean_of_squares_gradient() {
    // d/dx mean(x∘x) = 2x/n = x for n = 2
    let mut g = Graph::<f64>::new();
    let x = g.param("x", Tensor::new([2], vec![1.0, 2.0]).unwrap());
    let sq = g.mul(x, x).unwrap();
    let m = g.mean_axis(sq, 0).unwrap();
    let grads = g.backward(m).unwrap();
    assert_eq!(grads.get("x").unwrap().data(), &[1.0, 2.0]);
}

#[test]
fn shared_parameter_gradients_add() {
    let mut g = Graph::<f64>::new();
    let a = g.param("w", Tensor::new([1], vec![2.0]).unwrap());
    let b = g.param("w", Tensor::new([1], vec![2.0]).unwrap());
    let s = g.add(a, b).unwrap();
    let root = g.sum(s);
    let grads = g.backward(root).unwrap();
    assert_eq!(grads.get("w").unwrap().data(), &[2.0]);
}

#[test]
fn non_scalar_root_is_rejected() {
    let mut g = Graph::<f64>::new();
    let x = g.param("x", Tensor::zeros([2]));
    assert!(matches!(g.backward(x), Err(Error::NonScalarRoot(_))));
}

#[test]
fn shape_mismatch_names_operation() {
    let mut g = Graph::<f32>::new();
    let a = g.constant(Tensor::zeros([2, 3]));
    let b = g.constant(Tensor::zeros([2, 3]));
    match g.matmul(a, b) {
        Err(Error::Shape { op, shapes }) => {
            assert_eq!(op, "matmul");
            assert_eq!(shapes, vec![vec![2, 3], vec![2, 3]]);
        }
        other => panic!("unexpected {other:?}"),
    }
    let c = g.constant(Tensor::zeros([3]));
    assert!(matches!(g.add(a, c), Err(Error::Shape { op: "add", .. })));
    assert!(g.slice(a, 1, 2, 4).is_err());
    assert!(g.gather_rows(a, &[2]).is_err());
}

#[test]
fn constants_do_not_record_gradients() {
    let mut g = Graph::<f32>::new();
    let a = g.constant(Tensor::full([2], 1.0));
    let b = g.exp(a);
    assert!(!g.requires_grad(b));
    let w = g.param("w", Tensor::full([2], 1.0));
    let c = g.mul(b, w).unwrap();
    assert!(g.requires_grad(c));
}

#[test]
fn repeated_runs_are_bit_identical() {
    let run = || {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut params = ParamStore::<f32>::new();
        params.insert("w", Tensor::from_fn([6, 5], |_| rng.random_range(-1.0..1.0)));
        params.insert("x", Tensor::from_fn([4, 6], |_| rng.random_range(-1.0..1.0)));
        let mut g = Graph::new();
        let v = g.bind(&params);
        let h = g.matmul(v.get("x").unwrap(), v.get("w").unwrap()).unwrap();
        let s = g.log_softmax(h, 1).unwrap();
        let root = g.sum(s);
        let value = g.value(root).item();
        (value, g.backward(root).unwrap().into_map())
    };
    let (v1, g1) = run();
    let (v2, g2) = run();
    assert_eq!(v1.to_bits(), v2.to_bits());
    assert_eq!(g1, g2);
}
