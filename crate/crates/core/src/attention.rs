//! Spatial and temporal attention over a `[features, steps, batch]` window.
//!
//! Spatial attention scores the features of each time step with a square
//! linear map and softmax-normalizes across features; temporal attention
//! scores the steps of each series with a square map shared by all series
//! and normalizes across time. Both return the input scaled elementwise by
//! its weights, keeping the input shape.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::{Bindings, Initializer, ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::{Graph, NodeId};

#[derive(Clone, Debug)]
pub struct SpatialAttentionParams {
    /// `[features, features]`
    pub weight: ParamId,
    /// `[features]`
    pub bias: ParamId,
    pub features: usize,
}

#[derive(Clone, Debug)]
pub struct TemporalAttentionParams {
    /// `[window, window]`
    pub weight: ParamId,
    /// `[window]`
    pub bias: ParamId,
    pub window: usize,
}

impl SpatialAttentionParams {
    pub fn init<S: Scalar>(
        store: &mut ParamStore<S>,
        init: &mut Initializer,
        name: &str,
        features: usize,
    ) -> Result<Self> {
        let weight = init.weight(store, &format!("{name}.weight"), &[features, features], features)?;
        let bias = init.bias(store, &format!("{name}.bias"), features)?;
        Ok(SpatialAttentionParams { weight, bias, features })
    }
}

impl TemporalAttentionParams {
    pub fn init<S: Scalar>(
        store: &mut ParamStore<S>,
        init: &mut Initializer,
        name: &str,
        window: usize,
    ) -> Result<Self> {
        let weight = init.weight(store, &format!("{name}.weight"), &[window, window], window)?;
        let bias = init.bias(store, &format!("{name}.bias"), window)?;
        Ok(TemporalAttentionParams { weight, bias, window })
    }
}

/// Reweighted window plus the weights that produced it, both shaped like
/// the input.
#[derive(Clone, Copy, Debug)]
pub struct Attended {
    pub weighted: NodeId,
    pub weights: NodeId,
}

fn check_window<S: Scalar>(g: &Graph<S>, x: NodeId, axis: usize, expected: usize) -> Result<()> {
    let shape = g.shape(x);
    if shape.len() != 3 || shape[axis] != expected {
        let mut want = shape.to_vec();
        if want.len() == 3 {
            want[axis] = expected;
        }
        return Err(Error::shape("attention", shape, &want));
    }
    Ok(())
}

fn attend<S: Scalar>(g: &mut Graph<S>, x: NodeId, w: NodeId, b: NodeId, axis: usize) -> Result<Attended> {
    let scores = g.linear(x, w, Some(b), axis)?;
    let weights = g.softmax(scores, axis)?;
    let weighted = g.mul(weights, x)?;
    Ok(Attended { weighted, weights })
}

/// Per step `t`: `alpha_t = softmax(W_c x_t + b_c)`, output `alpha_t * x_t`.
pub fn spatial_attention<S: Scalar>(
    g: &mut Graph<S>,
    bind: &Bindings,
    window: NodeId,
    p: &SpatialAttentionParams,
) -> Result<Attended> {
    check_window(g, window, 0, p.features)?;
    attend(g, window, bind[p.weight], bind[p.bias], 0)
}

/// Per series `i`: `beta_i = softmax(W_d x_i + b_d)`, output `beta_i * x_i`.
pub fn temporal_attention<S: Scalar>(
    g: &mut Graph<S>,
    bind: &Bindings,
    window: NodeId,
    p: &TemporalAttentionParams,
) -> Result<Attended> {
    check_window(g, window, 1, p.window)?;
    attend(g, window, bind[p.weight], bind[p.bias], 1)
}

/// Attention weights of one window, each `[features x steps]` row-major.
/// A branch without the corresponding block leaves its field empty.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct AttentionWeights {
    pub alpha: Option<Vec<f64>>,
    pub beta: Option<Vec<f64>>,
}

#[cfg(test)]
mod tests {
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::tensor::{finite_diff_grad, max_relative_error};

    fn random(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
        (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
    }

    fn spatial_store(c: usize, w: Vec<f64>, b: Vec<f64>) -> (ParamStore<f64>, SpatialAttentionParams) {
        let mut store = ParamStore::new();
        let weight = store.register("w", &[c, c], w).unwrap();
        let bias = store.register("b", &[c], b).unwrap();
        (
            store,
            SpatialAttentionParams {
                weight,
                bias,
                features: c,
            },
        )
    }

    fn temporal_store(t: usize, w: Vec<f64>, b: Vec<f64>) -> (ParamStore<f64>, TemporalAttentionParams) {
        let mut store = ParamStore::new();
        let weight = store.register("w", &[t, t], w).unwrap();
        let bias = store.register("b", &[t], b).unwrap();
        (
            store,
            TemporalAttentionParams {
                weight,
                bias,
                window: t,
            },
        )
    }

    fn identity(n: usize) -> Vec<f64> {
        (0..n * n).map(|i| if i % (n + 1) == 0 { 1.0 } else { 0.0 }).collect()
    }

    #[test]
    fn zero_spatial_scores_give_uniform_weights() {
        let (c, t) = (4, 5);
        let (store, p) = spatial_store(c, vec![0.0; c * c], vec![0.0; c]);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let data = random(&mut rng, c * t);
        let mut g = Graph::new();
        let bind = store.bind(&mut g, false).unwrap();
        let x = g.constant(&[c, t, 1], data.clone()).unwrap();
        let a = spatial_attention(&mut g, &bind, x, &p).unwrap();
        assert!(g.value(a.weights).iter().all(|&w| w == 0.25));
        for (y, x) in g.value(a.weighted).iter().zip(&data) {
            assert_eq!(*y, x / 4.0);
        }
    }

    #[test]
    fn spatial_identity_scores() {
        let (store, p) = spatial_store(2, identity(2), vec![0.0; 2]);
        let mut g = Graph::new();
        let bind = store.bind(&mut g, false).unwrap();
        let ln3 = 3f64.ln();
        let x = g.constant(&[2, 1, 1], vec![0.0, ln3]).unwrap();
        let a = spatial_attention(&mut g, &bind, x, &p).unwrap();
        let alpha = g.value(a.weights);
        assert!((alpha[0] - 0.25).abs() < 1e-15 && (alpha[1] - 0.75).abs() < 1e-15);
        let out = g.value(a.weighted);
        assert_eq!(out[0], 0.0);
        assert!((out[1] - 0.75 * ln3).abs() < 1e-15);
    }

    #[test]
    fn zero_temporal_scores_give_uniform_weights() {
        let (c, t) = (3, 8);
        let (store, p) = temporal_store(t, vec![0.0; t * t], vec![0.0; t]);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let data = random(&mut rng, c * t);
        let mut g = Graph::new();
        let bind = store.bind(&mut g, false).unwrap();
        let x = g.constant(&[c, t, 1], data.clone()).unwrap();
        let a = temporal_attention(&mut g, &bind, x, &p).unwrap();
        assert!(g.value(a.weights).iter().all(|&w| w == 0.125));
        for (y, x) in g.value(a.weighted).iter().zip(&data) {
            assert_eq!(*y, x / 8.0);
        }
    }

    #[test]
    fn temporal_equal_scores() {
        let (store, p) = temporal_store(2, identity(2), vec![0.0; 2]);
        let mut g = Graph::new();
        let bind = store.bind(&mut g, false).unwrap();
        let ln2 = 2f64.ln();
        let x = g.constant(&[1, 2, 1], vec![ln2, ln2]).unwrap();
        let a = temporal_attention(&mut g, &bind, x, &p).unwrap();
        assert_eq!(g.value(a.weights), &[0.5, 0.5]);
        assert_eq!(g.value(a.weighted), &[0.5 * ln2, 0.5 * ln2]);
    }

    #[test]
    fn weights_are_stochastic_on_random_inputs() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..50 {
            let c = rng.gen_range(1..6);
            let t = rng.gen_range(1..10);
            let b = rng.gen_range(1..4);
            let (ss, sp) = spatial_store(c, random(&mut rng, c * c), random(&mut rng, c));
            let (ts, tp) = temporal_store(t, random(&mut rng, t * t), random(&mut rng, t));
            let data: Vec<f64> = random(&mut rng, c * t * b).iter().map(|v| 3.0 * v).collect();

            let mut g = Graph::new();
            let bind = ss.bind(&mut g, false).unwrap();
            let x = g.constant(&[c, t, b], data.clone()).unwrap();
            let a = spatial_attention(&mut g, &bind, x, &sp).unwrap();
            assert_eq!(g.shape(a.weighted), &[c, t, b]);
            let alpha = g.value(a.weights);
            for col in 0..t * b {
                let total: f64 = (0..c).map(|k| alpha[k * t * b + col]).sum();
                assert!((total - 1.0).abs() < 1e-12);
            }

            let mut g = Graph::new();
            let bind = ts.bind(&mut g, false).unwrap();
            let x = g.constant(&[c, t, b], data).unwrap();
            let a = temporal_attention(&mut g, &bind, x, &tp).unwrap();
            let beta = g.value(a.weights);
            for i in 0..c {
                for bb in 0..b {
                    let total: f64 = (0..t).map(|s| beta[(i * t + s) * b + bb]).sum();
                    assert!((total - 1.0).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let (store, p) = spatial_store(3, vec![0.0; 9], vec![0.0; 3]);
        let mut g = Graph::new();
        let bind = store.bind(&mut g, false).unwrap();
        let x = g.constant(&[4, 2, 1], vec![0.0; 8]).unwrap();
        assert!(matches!(
            spatial_attention(&mut g, &bind, x, &p),
            Err(Error::Shape { .. })
        ));
        let (store, p) = temporal_store(3, vec![0.0; 9], vec![0.0; 3]);
        let bind = store.bind(&mut g, false).unwrap();
        assert!(matches!(
            temporal_attention(&mut g, &bind, x, &p),
            Err(Error::Shape { .. })
        ));
    }

    #[test]
    fn spatial_attention_is_permutation_equivariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let (c, t) = (3, 5);
        let perm = [2usize, 0, 1];
        for _ in 0..20 {
            let w = random(&mut rng, 9);
            let b = random(&mut rng, 3);
            let x = random(&mut rng, c * t);
            // Row i of the permuted problem is row perm[i] of the original.
            let wp: Vec<f64> = (0..9).map(|idx| w[perm[idx / 3] * 3 + perm[idx % 3]]).collect();
            let bp: Vec<f64> = (0..3).map(|i| b[perm[i]]).collect();
            let xp: Vec<f64> = (0..c * t).map(|idx| x[perm[idx / t] * t + idx % t]).collect();

            let run = |w: Vec<f64>, b: Vec<f64>, x: Vec<f64>| {
                let (store, p) = spatial_store(c, w, b);
                let mut g = Graph::new();
                let bind = store.bind(&mut g, false).unwrap();
                let xn = g.constant(&[c, t, 1], x).unwrap();
                let a = spatial_attention(&mut g, &bind, xn, &p).unwrap();
                g.value(a.weighted).to_vec()
            };
            let base = run(w, b, x);
            let permuted = run(wp, bp, xp);
            for idx in 0..c * t {
                let orig = base[perm[idx / t] * t + idx % t];
                assert!((permuted[idx] - orig).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn attention_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let (c, t, b) = (3, 4, 2);
        let x = random(&mut rng, c * t * b);
        let readout = random(&mut rng, c * t * b);
        for temporal in [false, true] {
            let m = if temporal { t } else { c };
            let params = random(&mut rng, m * m + m);
            let eval = |flat: &[f64], grad: bool| {
                let mut store = ParamStore::new();
                let weight = store.register("w", &[m, m], flat[..m * m].to_vec()).unwrap();
                let bias = store.register("b", &[m], flat[m * m..m * m + m].to_vec()).unwrap();
                let mut g = Graph::new();
                let bind = store.bind(&mut g, grad).unwrap();
                let xn = if grad {
                    g.variable(&[c, t, b], flat[m * m + m..].to_vec()).unwrap()
                } else {
                    g.constant(&[c, t, b], flat[m * m + m..].to_vec()).unwrap()
                };
                let a = if temporal {
                    temporal_attention(
                        &mut g,
                        &bind,
                        xn,
                        &TemporalAttentionParams {
                            weight,
                            bias,
                            window: t,
                        },
                    )
                    .unwrap()
                } else {
                    spatial_attention(
                        &mut g,
                        &bind,
                        xn,
                        &SpatialAttentionParams {
                            weight,
                            bias,
                            features: c,
                        },
                    )
                    .unwrap()
                };
                let r = g.constant(&[c, t, b], readout.clone()).unwrap();
                let p = g.mul(a.weighted, r).unwrap();
                let s = g.sum(p).unwrap();
                let value = g.value(s)[0];
                let grads = if grad {
                    g.backward(s).unwrap();
                    let mut all = store.gradients(&g, &bind).concat();
                    all.extend(g.grad_or_zeros(xn));
                    all
                } else {
                    vec![]
                };
                (value, grads)
            };
            let mut flat = params.clone();
            flat.extend(&x);
            let (_, analytic) = eval(&flat, true);
            let numeric = finite_diff_grad(|v| eval(v, false).0, &flat, 1e-5);
            let err = max_relative_error(&analytic, &numeric, 1e-6);
            assert!(err < 1e-4, "temporal={temporal}: {err}");
        }
    }
}
