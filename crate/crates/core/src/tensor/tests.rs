use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::error::Error;

type G = Graph<f64>;

fn random(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
}

/// Builds `sum(weights * op(inputs))` from flat inputs, compares the tape
/// gradient with central differences and returns the worst relative error.
fn gradient_error<F>(shapes: &[Vec<usize>], flat: &[f64], build: F) -> f64
where
    F: Fn(&mut G, &[NodeId]) -> NodeId,
{
    let sizes: Vec<usize> = shapes.iter().map(|s| s.iter().product()).collect();
    let wrng = ChaCha8Rng::seed_from_u64(99);
    let forward = |g: &mut G, x: &[f64], trainable: bool, wrng: &mut ChaCha8Rng| {
        let mut ids = Vec::new();
        let mut at = 0;
        for (shape, &n) in shapes.iter().zip(&sizes) {
            let data = x[at..at + n].to_vec();
            at += n;
            ids.push(if trainable {
                g.variable(shape, data).unwrap()
            } else {
                g.constant(shape, data).unwrap()
            });
        }
        let out = build(g, &ids);
        let n_out = g.value(out).len();
        let shape = g.shape(out).to_vec();
        let w = g.constant(&shape, random(wrng, n_out)).unwrap();
        let prod = g.mul(out, w).unwrap();
        (g.sum(prod).unwrap(), ids)
    };

    let mut g = G::new();
    let (root, ids) = forward(&mut g, flat, true, &mut wrng.clone());
    g.backward(root).unwrap();
    let analytic: Vec<f64> = ids.iter().flat_map(|&id| g.grad_or_zeros(id)).collect();

    let numeric = finite_diff_grad(
        |x| {
            let mut g = G::new();
            let (root, _) = forward(&mut g, x, false, &mut wrng.clone());
            g.value(root)[0]
        },
        flat,
        1e-5,
    );
    max_relative_error(&analytic, &numeric, 1e-6)
}

fn away_from_zero(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n)
        .map(|_| {
            let v: f64 = rng.gen_range(0.1..1.0);
            if rng.gen::<bool>() {
                v
            } else {
                -v
            }
        })
        .collect()
}

#[test]
fn relu_example() {
    let mut g = G::new();
    let x = g.constant(&[3], vec![-1.0, 0.0, 2.0]).unwrap();
    let y = g.elementwise(Elementwise::Relu, x, None).unwrap();
    assert_eq!(g.value(y), &[0.0, 0.0, 2.0]);
}

#[test]
fn add_zeros_is_identity() {
    let mut g = G::new();
    let x = g.constant(&[2, 2], vec![1.5, -2.0, 3.25, 0.0]).unwrap();
    let z = g.constant(&[2, 2], vec![0.0; 4]).unwrap();
    let y = g.elementwise(Elementwise::Add, x, Some(z)).unwrap();
    assert_eq!(g.value(y), g.value(x));
}

#[test]
fn mul_example() {
    let mut g = G::new();
    let a = g.constant(&[2], vec![2.0, 3.0]).unwrap();
    let b = g.constant(&[2], vec![4.0, 5.0]).unwrap();
    let y = g.elementwise(Elementwise::Mul, a, Some(b)).unwrap();
    assert_eq!(g.value(y), &[8.0, 15.0]);
}

#[test]
fn binary_shape_mismatch_names_both_shapes() {
    let mut g = G::new();
    let a = g.constant(&[2, 3], vec![0.0; 6]).unwrap();
    let b = g.constant(&[3, 2], vec![0.0; 6]).unwrap();
    let err = g.add(a, b).unwrap_err();
    assert!(matches!(err, Error::Shape { .. }));
    let msg = err.to_string();
    assert!(msg.contains("[2, 3]") && msg.contains("[3, 2]"), "{msg}");
}

#[test]
fn scalar_broadcasts_against_tensor() {
    let mut g = G::new();
    let a = g.variable(&[3], vec![1.0, 2.0, 3.0]).unwrap();
    let c = g.variable(&[1], vec![2.0]).unwrap();
    let y = g.mul(c, a).unwrap();
    assert_eq!(g.value(y), &[2.0, 4.0, 6.0]);
    let s = g.sum(y).unwrap();
    g.backward(s).unwrap();
    assert_eq!(g.grad(c).unwrap(), &[6.0]);
    assert_eq!(g.grad(a).unwrap(), &[2.0, 2.0, 2.0]);
}

#[test]
fn matvec_examples() {
    let mut g = G::new();
    let eye = g.constant(&[2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
    let x = g.constant(&[2], vec![3.0, 7.0]).unwrap();
    let y = g.matvec(eye, x).unwrap();
    assert_eq!(g.value(y), &[3.0, 7.0]);

    let w = g.constant(&[2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
    let ones = g.constant(&[2], vec![1.0, 1.0]).unwrap();
    let y = g.matvec(w, ones).unwrap();
    assert_eq!(g.value(y), &[3.0, 7.0]);

    let zero = g.constant(&[3, 2], vec![0.0; 6]).unwrap();
    let y = g.matvec(zero, x).unwrap();
    assert_eq!(g.value(y), &[0.0, 0.0, 0.0]);
}

#[test]
fn matvec_dimension_mismatch() {
    let mut g = G::new();
    let w = g.constant(&[2, 3], vec![0.0; 6]).unwrap();
    let x = g.constant(&[2], vec![0.0; 2]).unwrap();
    assert!(matches!(g.matvec(w, x), Err(Error::Shape { .. })));
}

#[test]
fn backward_of_sum_is_ones() {
    let mut g = G::new();
    let x = g.variable(&[2, 3], vec![0.3, -1.0, 2.0, 5.0, 0.0, 1.0]).unwrap();
    let s = g.sum(x).unwrap();
    g.backward(s).unwrap();
    assert_eq!(g.grad(x).unwrap(), &[1.0; 6]);
}

#[test]
fn backward_of_mean_square() {
    // d/dx mean((x - c)^2) = 2 (x - c) / n
    let mut g = G::new();
    let x = g.variable(&[2], vec![1.0, 2.0]).unwrap();
    let c = g.constant(&[2], vec![0.0, 0.0]).unwrap();
    let d = g.sub(x, c).unwrap();
    let sq = g.mul(d, d).unwrap();
    let m = g.mean(sq).unwrap();
    g.backward(m).unwrap();
    assert_eq!(g.grad(x).unwrap(), &[1.0, 2.0]);
}

#[test]
fn detached_leaf_has_zero_grad() {
    let mut g = G::new();
    let x = g.variable(&[2], vec![1.0, 2.0]).unwrap();
    let p = g.variable(&[3], vec![4.0, 5.0, 6.0]).unwrap();
    let s = g.sum(x).unwrap();
    g.backward(s).unwrap();
    assert!(g.grad(p).is_none());
    assert_eq!(g.grad_or_zeros(p), vec![0.0; 3]);
}

#[test]
fn backward_rejects_non_scalar_root() {
    let mut g = G::new();
    let x = g.variable(&[2], vec![1.0, 2.0]).unwrap();
    assert!(matches!(g.backward(x), Err(Error::Usage(_))));
}

#[test]
fn backward_twice_doubles_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut g = G::new();
    let x = g.variable(&[2, 4, 3], random(&mut rng, 24)).unwrap();
    let w = g.variable(&[3, 2, 2], random(&mut rng, 12)).unwrap();
    let b = g.variable(&[3], random(&mut rng, 3)).unwrap();
    let y = g.causal_conv(x, w, b, 2).unwrap();
    let y = g.exp(y).unwrap();
    let s = g.mean(y).unwrap();
    g.backward(s).unwrap();
    let once: Vec<f64> = g.grad(w).unwrap().to_vec();
    g.backward(s).unwrap();
    let twice = g.grad(w).unwrap();
    for (a, b) in once.iter().zip(twice) {
        assert_eq!(2.0 * a, *b);
    }
    g.zero_grad();
    assert!(g.grad(w).is_none());
}

#[test]
fn foreign_node_is_rejected() {
    let mut g = G::new();
    let _ = g.constant(&[1], vec![1.0]).unwrap();
    assert!(matches!(g.relu(NodeId(7)), Err(Error::Usage(_))));
}

#[test]
fn parents_precede_children() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut g = G::new();
    let x = g.variable(&[3, 5, 2], random(&mut rng, 30)).unwrap();
    let w = g.variable(&[3, 3], random(&mut rng, 9)).unwrap();
    let y = g.linear(x, w, None, 0).unwrap();
    let y = g.softmax(y, 0).unwrap();
    let y = g.mul(y, x).unwrap();
    let _ = g.select(y, 1, 4).unwrap();
    for i in 0..g.len() {
        for p in g.parents(NodeId(i)) {
            assert!(p.index() < i);
        }
    }
}

#[test]
fn forward_is_bitwise_deterministic() {
    let run = || {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut g = G::new();
        let x = g.constant(&[4, 9, 3], random(&mut rng, 108)).unwrap();
        let w = g.constant(&[5, 4, 3], random(&mut rng, 60)).unwrap();
        let b = g.constant(&[5], random(&mut rng, 5)).unwrap();
        let y = g.causal_conv(x, w, b, 2).unwrap();
        let y = g.softmax(y, 1).unwrap();
        g.value(y).to_vec()
    };
    let (a, b) = (run(), run());
    assert!(a.iter().zip(&b).all(|(x, y)| x.to_bits() == y.to_bits()));
}

#[test]
fn dropout_is_identity_outside_training() {
    let mut g = G::new();
    let x = g.constant(&[4], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
    assert_eq!(g.dropout(x, 0.5).unwrap(), x);

    let mut t = G::training(1);
    let x = t.constant(&[1000], vec![1.0; 1000]).unwrap();
    let y = t.dropout(x, 0.5).unwrap();
    let v = t.value(y);
    assert!(v.iter().all(|&e| e == 0.0 || e == 2.0));
    let kept = v.iter().filter(|&&e| e > 0.0).count();
    assert!((400..600).contains(&kept));
}

#[test]
fn softmax_rejects_non_finite_input() {
    let mut g = G::new();
    let x = g.constant(&[2], vec![0.0, f64::NAN]).unwrap();
    assert!(matches!(g.softmax(x, 0), Err(Error::Numeric(_))));
}

// Gradient checks, one per differentiable op, on random tensors of at most
// 64 elements.

const TOL: f64 = 1e-4;

#[test]
fn gradcheck_binary_ops() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for op in [Elementwise::Add, Elementwise::Sub, Elementwise::Mul] {
        for shapes in [
            vec![vec![3, 4], vec![3, 4]],
            vec![vec![1], vec![2, 5]],
            vec![vec![6], vec![1]],
        ] {
            let n: usize = shapes.iter().map(|s| s.iter().product::<usize>()).sum();
            let flat = random(&mut rng, n);
            let err = gradient_error(&shapes, &flat, |g, ids| {
                g.elementwise(op, ids[0], Some(ids[1])).unwrap()
            });
            assert!(err < TOL, "{op:?} {shapes:?}: {err}");
        }
    }
}

#[test]
fn gradcheck_unary_ops() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let shapes = vec![vec![4, 5]];
    let flat = away_from_zero(&mut rng, 20);
    let err = gradient_error(&shapes, &flat, |g, ids| g.relu(ids[0]).unwrap());
    assert!(err < TOL, "relu {err}");
    let err = gradient_error(&shapes, &flat, |g, ids| g.exp(ids[0]).unwrap());
    assert!(err < TOL, "exp {err}");
    let positive: Vec<f64> = flat.iter().map(|v| v.abs() + 0.5).collect();
    let err = gradient_error(&shapes, &positive, |g, ids| g.sqrt(ids[0]).unwrap());
    assert!(err < TOL, "sqrt {err}");
    let err = gradient_error(&shapes, &flat, |g, ids| g.scale(ids[0], -1.75).unwrap());
    assert!(err < TOL, "scale {err}");
    let err = gradient_error(&shapes, &flat, |g, ids| g.mean(ids[0]).unwrap());
    assert!(err < TOL, "mean {err}");
    let err = gradient_error(&shapes, &flat, |g, ids| g.reshape(ids[0], &[2, 10]).unwrap());
    assert!(err < TOL, "reshape {err}");
}

#[test]
fn gradcheck_matvec_and_linear() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let shapes = vec![vec![4, 6], vec![6]];
    let flat = random(&mut rng, 30);
    let err = gradient_error(&shapes, &flat, |g, ids| g.matvec(ids[0], ids[1]).unwrap());
    assert!(err < TOL, "matvec {err}");

    for axis in 0..3 {
        let mut xs = vec![3, 4, 2];
        let n_in = xs[axis];
        let shapes = vec![std::mem::take(&mut xs), vec![3, n_in], vec![3]];
        let n: usize = shapes.iter().map(|s| s.iter().product::<usize>()).sum();
        let flat = random(&mut rng, n);
        let err = gradient_error(&shapes, &flat, |g, ids| {
            g.linear(ids[0], ids[1], Some(ids[2]), axis).unwrap()
        });
        assert!(err < TOL, "linear axis {axis}: {err}");
    }
}

#[test]
fn gradcheck_softmax() {
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    for axis in 0..3 {
        let shapes = vec![vec![3, 4, 5]];
        let flat: Vec<f64> = random(&mut rng, 60).iter().map(|v| 2.0 * v).collect();
        let err = gradient_error(&shapes, &flat, |g, ids| g.softmax(ids[0], axis).unwrap());
        assert!(err < TOL, "softmax axis {axis}: {err}");
    }
}

#[test]
fn gradcheck_causal_conv() {
    let mut rng = ChaCha8Rng::seed_from_u64(15);
    for (c_in, c_out, k, d, t, b) in [(2, 3, 2, 1, 6, 2), (3, 2, 3, 2, 5, 1), (1, 1, 4, 3, 8, 3)] {
        let shapes = vec![vec![c_in, t, b], vec![c_out, c_in, k], vec![c_out]];
        let n: usize = shapes.iter().map(|s| s.iter().product::<usize>()).sum();
        let flat = random(&mut rng, n);
        let err = gradient_error(&shapes, &flat, |g, ids| {
            g.causal_conv(ids[0], ids[1], ids[2], d).unwrap()
        });
        assert!(err < TOL, "conv {c_in}x{c_out} k{k} d{d}: {err}");
    }
}

#[test]
fn gradcheck_select_and_composition() {
    let mut rng = ChaCha8Rng::seed_from_u64(16);
    let shapes = vec![vec![3, 5, 2]];
    let flat = random(&mut rng, 30);
    let err = gradient_error(&shapes, &flat, |g, ids| g.select(ids[0], 1, 4).unwrap());
    assert!(err < TOL, "select {err}");

    // Attention-style composition: softmax(W x) * x, node reused twice.
    let shapes = vec![vec![3, 4, 2], vec![3, 3], vec![3]];
    let flat = random(&mut rng, 24 + 9 + 3);
    let err = gradient_error(&shapes, &flat, |g, ids| {
        let s = g.linear(ids[0], ids[1], Some(ids[2]), 0).unwrap();
        let a = g.softmax(s, 0).unwrap();
        g.mul(a, ids[0]).unwrap()
    });
    assert!(err < TOL, "composition {err}");
}

#[test]
fn dropout_gradient_follows_mask() {
    let mut g = G::training(4);
    let x = g.variable(&[50], vec![1.0; 50]).unwrap();
    let y = g.dropout(x, 0.3).unwrap();
    let s = g.sum(y).unwrap();
    g.backward(s).unwrap();
    assert_eq!(g.grad(x).unwrap(), g.value(y));
}

#[test]
fn f32_graph_runs() {
    let mut g = Graph::<f32>::new();
    let w = g.variable(&[2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
    let x = g.constant(&[2], vec![1.0, 1.0]).unwrap();
    let y = g.matvec(w, x).unwrap();
    assert_eq!(g.value(y), &[3.0f32, 7.0]);
    let s = g.sum(y).unwrap();
    g.backward(s).unwrap();
    assert_eq!(g.grad(w).unwrap(), &[1.0f32, 1.0, 1.0, 1.0]);
}

#[test]
fn fused_axpy_matches_sequential_axpys_bitwise() {
    use super::kernels::{axpy, fused_axpy, Tap};
    let mut rng = ChaCha8Rng::seed_from_u64(41);
    for _ in 0..200 {
        let n = rng.gen_range(1..300);
        let init: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let sources: Vec<(f64, Vec<f64>, usize)> = (0..rng.gen_range(0..12))
            .map(|_| {
                let dst = rng.gen_range(0..n + 3);
                let len = rng.gen_range(0..n + 5);
                let src = (0..len).map(|_| rng.gen_range(-1.0..1.0)).collect();
                (rng.gen_range(-2.0..2.0), src, dst)
            })
            .collect();
        let mut expected = init.clone();
        for (w, src, dst) in &sources {
            if *dst < n {
                axpy(&mut expected[*dst..], *w, src);
            }
        }
        let taps: Vec<Tap<f64>> = sources
            .iter()
            .map(|(w, src, dst)| Tap {
                weight: *w,
                src,
                dst: *dst,
            })
            .collect();
        let mut got = init;
        fused_axpy(&mut got, &taps);
        let bits = |v: &[f64]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&got), bits(&expected));
    }
}
