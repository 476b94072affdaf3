//! Forward pass: drift-aware embedding, residual temporal self-attention,
//! graph attention over pooled device states, fused prediction heads and the
//! embedding curvature. Intermediate activations are cached for the exact
//! backward pass.

use ndarray::{Array1, Array2, Array3, ArrayView1};

use super::{Batch, HyperParams, ModelParams, StgatError};
use crate::clockdyn::T0;
use crate::detector::{logistic, P_CLAMP};

pub(crate) struct GatCache {
    pub neighbors: Vec<Vec<usize>>,
    pub alpha: Vec<Vec<f64>>,
    /// Transformed pooled states `W h`, one row per node.
    pub wh: Array2<f64>,
}

pub(crate) struct Cache {
    /// Embedding input after drift injection, `N x T x F`.
    pub u: Array3<f64>,
    /// Per-layer inputs, `layers + 1` entries; the last is the final state.
    pub states: Vec<Array3<f64>>,
    /// Per-layer softmax rows, `N x T x T`.
    pub attn: Vec<Array3<f64>>,
    pub q: Vec<Array3<f64>>,
    pub k: Vec<Array3<f64>>,
    pub v: Vec<Array3<f64>>,
    /// Mean-pooled final states, `N x d`.
    pub pooled: Array2<f64>,
    pub gat: Option<GatCache>,
    /// Graph-fused vector per device, `N x d`.
    pub g: Array2<f64>,
}

pub struct ForwardOutput {
    pub logits: Array2<f64>,
    pub p_hat: Array2<f64>,
    pub delta_hat: Array2<f64>,
    pub x_hat: Array3<f64>,
    /// Curvature of the drift-to-embedding map; constant over steps for the
    /// affine embedding.
    pub curvature: f64,
    pub k_vals: Array2<f64>,
    /// Rollover head inputs `[drift, velocity, acceleration, flag]`.
    pub over_inputs: Array3<f64>,
    pub over_logits: Array2<f64>,
    pub p_over: Array2<f64>,
    pub(crate) cache: Cache,
}

/// Row-wise softmax with max subtraction.
fn softmax_row(row: &mut [f64]) {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

/// Rollover head inputs from a drift-estimate sequence and proximity flags:
/// first differences for velocity, second differences for acceleration,
/// zeros where predecessors are missing.
pub fn predict_overflow_inputs(delta_hat: &[f64], proximity: &[u8]) -> Vec<[f64; 4]> {
    assert_eq!(delta_hat.len(), proximity.len());
    let mut out = Vec::with_capacity(delta_hat.len());
    for t in 0..delta_hat.len() {
        let v = if t >= 1 {
            delta_hat[t] - delta_hat[t - 1]
        } else {
            0.0
        };
        let v_prev = if t >= 2 {
            delta_hat[t - 1] - delta_hat[t - 2]
        } else {
            0.0
        };
        let a = if t >= 2 { v - v_prev } else { 0.0 };
        out.push([delta_hat[t], v, a, f64::from(proximity[t])]);
    }
    out
}

/// Curvature of the combined drift-to-embedding map `C = W_proj W_emb`:
/// the Frobenius norm of `C^T C - I`. With the drift embedding ablated the
/// map is zero and the curvature is the constant `||I_4||_F = 2`.
pub(crate) fn embedding_curvature_and_map(
    params: &ModelParams,
    hyper: &HyperParams,
) -> (f64, Option<Array2<f64>>) {
    if !hyper.use_drift_embedding {
        return (2.0, None);
    }
    let c = params.w_proj.dot(&params.w_emb);
    let m = c.t().dot(&c) - Array2::<f64>::eye(4);
    let k = m.iter().map(|v| v * v).sum::<f64>().sqrt();
    (k, Some(c))
}

/// Head input: [temporal state, graph vector, |temporal state|].
fn concat_features(h: ArrayView1<f64>, g: ArrayView1<f64>) -> Array1<f64> {
    let d = h.len();
    let mut f = Array1::zeros(2 * d + g.len());
    for c in 0..d {
        f[c] = h[c];
        f[d + g.len() + c] = h[c].abs();
    }
    for c in 0..g.len() {
        f[d + c] = g[c];
    }
    f
}

/// Neighborhoods used by the graph attention: graph neighbors, with a
/// self-loop for isolated nodes so the softmax is well defined.
pub(crate) fn gat_neighborhoods(graph: &crate::datagen::DeviceGraph) -> Vec<Vec<usize>> {
    graph
        .neighbors()
        .into_iter()
        .enumerate()
        .map(|(i, list)| {
            if list.is_empty() {
                vec![i]
            } else {
                list.into_iter().map(|(j, _)| j).collect()
            }
        })
        .collect()
}

pub fn forward(
    batch: &Batch,
    params: &ModelParams,
    hyper: &HyperParams,
) -> Result<ForwardOutput, StgatError> {
    batch.validate(params)?;
    let n = batch.n_devices();
    let t_len = batch.n_steps();
    let f_dim = batch.n_features();
    let d = params.d_model;
    let scale = 1.0 / (d as f64).sqrt();

    // Drift injection: u = x + W_emb d (or plain x when ablated).
    let mut u = batch.x.clone();
    if hyper.use_drift_embedding {
        for i in 0..n {
            for t in 0..t_len {
                for r in 0..f_dim {
                    let mut acc = 0.0;
                    for c in 0..4 {
                        acc += params.w_emb[(r, c)] * batch.d[(i, t, c)];
                    }
                    u[(i, t, r)] += acc;
                }
            }
        }
    }

    // Projection to the model dimension: Z = U W_proj^T per device.
    let mut h0 = Array3::zeros((n, t_len, d));
    for i in 0..n {
        let ui = u.index_axis(ndarray::Axis(0), i);
        let zi = ui.dot(&params.w_proj.t());
        h0.index_axis_mut(ndarray::Axis(0), i).assign(&zi);
    }

    // Residual temporal self-attention stack, independent per device.
    let l = params.layers.len();
    let mut states = Vec::with_capacity(l + 1);
    states.push(h0);
    let mut attn_cache = Vec::with_capacity(l);
    let mut q_cache = Vec::with_capacity(l);
    let mut k_cache = Vec::with_capacity(l);
    let mut v_cache = Vec::with_capacity(l);
    for layer in &params.layers {
        let h_in = states.last().unwrap();
        let mut h_out = Array3::zeros((n, t_len, d));
        let mut attn = Array3::zeros((n, t_len, t_len));
        let mut qs = Array3::zeros((n, t_len, d));
        let mut ks = Array3::zeros((n, t_len, d));
        let mut vs = Array3::zeros((n, t_len, d));
        for i in 0..n {
            let hi = h_in.index_axis(ndarray::Axis(0), i);
            let q = hi.dot(&layer.wq);
            let k = hi.dot(&layer.wk);
            let v = hi.dot(&layer.wv);
            let mut scores = q.dot(&k.t());
            scores.mapv_inplace(|s| s * scale);
            for mut row in scores.rows_mut() {
                softmax_row(row.as_slice_mut().expect("contiguous row"));
            }
            let out = scores.dot(&v) + &hi;
            h_out.index_axis_mut(ndarray::Axis(0), i).assign(&out);
            attn.index_axis_mut(ndarray::Axis(0), i).assign(&scores);
            qs.index_axis_mut(ndarray::Axis(0), i).assign(&q);
            ks.index_axis_mut(ndarray::Axis(0), i).assign(&k);
            vs.index_axis_mut(ndarray::Axis(0), i).assign(&v);
        }
        states.push(h_out);
        attn_cache.push(attn);
        q_cache.push(qs);
        k_cache.push(ks);
        v_cache.push(vs);
    }

    // Node features for the graph step: window mean of the final states.
    let h_final = states.last().unwrap();
    let mut pooled = Array2::zeros((n, d));
    for i in 0..n {
        let hi = h_final.index_axis(ndarray::Axis(0), i);
        let mean = hi.mean_axis(ndarray::Axis(0)).expect("nonempty window");
        pooled.row_mut(i).assign(&mean);
    }

    // Graph attention fusion over pooled states.
    let (g, gat_cache) = if hyper.use_graph_attention {
        let neighbors = gat_neighborhoods(&batch.graph);
        let wh = pooled.dot(&params.gat_w.t());
        let a_src = params.gat_a.slice(ndarray::s![..d]);
        let a_dst = params.gat_a.slice(ndarray::s![d..]);
        let mut alpha = Vec::with_capacity(n);
        let mut g = Array2::<f64>::zeros((n, d));
        for i in 0..n {
            let src_term = a_src.dot(&wh.row(i));
            let mut logits: Vec<f64> = neighbors[i]
                .iter()
                .map(|&j| src_term + a_dst.dot(&wh.row(j)))
                .collect();
            softmax_row(&mut logits);
            let mut s = vec![0.0; d];
            for (&j, &a) in neighbors[i].iter().zip(&logits) {
                for (c, acc) in s.iter_mut().enumerate() {
                    *acc += a * wh[(j, c)];
                }
            }
            for c in 0..d {
                g[(i, c)] = s[c].tanh();
            }
            alpha.push(logits);
        }
        (g, Some(GatCache { neighbors, alpha, wh }))
    } else {
        (pooled.clone(), None)
    };

    // Fused per-step heads.
    let mut logits = Array2::zeros((n, t_len));
    let mut p_hat = Array2::zeros((n, t_len));
    let mut delta_hat = Array2::zeros((n, t_len));
    let mut x_hat = Array3::zeros((n, t_len, f_dim));
    for i in 0..n {
        let gi = g.row(i);
        for t in 0..t_len {
            let h_it = h_final.index_axis(ndarray::Axis(0), i);
            let f = concat_features(h_it.row(t), gi);
            let logit = params.cls_w.dot(&f) + params.cls_b;
            logits[(i, t)] = logit;
            // Saturated logits would round the logistic to exactly 0 or 1;
            // keep the posterior strictly inside the unit interval.
            p_hat[(i, t)] = logistic(logit).clamp(P_CLAMP, 1.0 - P_CLAMP);
            delta_hat[(i, t)] = params.drift_w.dot(&f) + params.drift_b;
            let rec = params.rec_w.dot(&f) + &params.rec_b;
            x_hat
                .index_axis_mut(ndarray::Axis(0), i)
                .row_mut(t)
                .assign(&rec);
        }
    }

    let (curvature, _) = embedding_curvature_and_map(params, hyper);
    let k_vals = Array2::from_elem((n, t_len), curvature);

    // Rollover head inputs from the drift estimates and proximity flags.
    let threshold = T0 as f64 - hyper.overflow_margin_s;
    let mut over_inputs = Array3::zeros((n, t_len, 4));
    let mut over_logits = Array2::zeros((n, t_len));
    let mut p_over = Array2::zeros((n, t_len));
    for i in 0..n {
        let dh: Vec<f64> = (0..t_len).map(|t| delta_hat[(i, t)]).collect();
        let flags: Vec<u8> = (0..t_len)
            .map(|t| u8::from(batch.tau[(i, t)] >= threshold))
            .collect();
        for (t, inp) in predict_overflow_inputs(&dh, &flags).into_iter().enumerate() {
            let z: f64 = params.w_over.iter().zip(&inp).map(|(w, x)| w * x).sum();
            over_logits[(i, t)] = z;
            p_over[(i, t)] = logistic(z);
            for c in 0..4 {
                over_inputs[(i, t, c)] = inp[c];
            }
        }
    }

    Ok(ForwardOutput {
        logits,
        p_hat,
        delta_hat,
        x_hat,
        curvature,
        k_vals,
        over_inputs,
        over_logits,
        p_over,
        cache: Cache {
            u,
            states,
            attn: attn_cache,
            q: q_cache,
            k: k_cache,
            v: v_cache,
            pooled,
            gat: gat_cache,
            g,
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::{DeviceGraph, GraphTopology};
    use approx::assert_relative_eq;
    use ndarray::{Array2, Array3};
    use rand::Rng;

    fn hyper(d_model: usize, n_layers: usize) -> HyperParams {
        HyperParams {
            d_model,
            n_layers,
            seed: 3,
            ..Default::default()
        }
    }

    fn random_batch(n: usize, t: usize, f: usize, graph: DeviceGraph, seed: u64) -> Batch {
        let mut rng = crate::rng::substream(seed, 0, crate::rng::StreamKind::Physical);
        let mut rand_arr3 = |shape: (usize, usize, usize)| {
            Array3::from_shape_simple_fn(shape, || rng.random::<f64>() * 2.0 - 1.0)
        };
        let x = rand_arr3((n, t, f));
        let mut d = rand_arr3((n, t, 4));
        for i in 0..n {
            for step in 0..t {
                d[(i, step, 3)] = f64::from(step % 7 == 0);
            }
        }
        let mut rng2 = crate::rng::substream(seed, 1, crate::rng::StreamKind::Physical);
        let labels = Array2::from_shape_simple_fn((n, t), || f64::from(rng2.random::<f64>() > 0.8));
        let delta_true =
            Array2::from_shape_simple_fn((n, t), || rng2.random::<f64>() * 0.01 - 0.005);
        let tau = Array2::from_shape_fn((n, t), |(i, step)| (i * 1000 + step) as f64);
        Batch {
            x,
            d,
            graph,
            labels,
            delta_true,
            tau,
        }
    }

    fn ring(n: usize) -> DeviceGraph {
        crate::datagen::build_graph(n, &GraphTopology::Ring, 1).unwrap()
    }

    #[test]
    fn single_step_window_is_value_plus_residual() {
        let h = hyper(8, 1);
        let params = ModelParams::init(5, &h);
        let batch = random_batch(2, 1, 5, ring(2), 9);
        let out = forward(&batch, &params, &h).unwrap();
        // With one key the softmax weight is 1: H' = z Wv + z.
        let u0 = out.cache.u.index_axis(ndarray::Axis(0), 0);
        let z = u0.dot(&params.w_proj.t());
        let expected = z.dot(&params.layers[0].wv) + &z;
        let got = out.cache.states[1].index_axis(ndarray::Axis(0), 0);
        for c in 0..8 {
            assert_relative_eq!(got[(0, c)], expected[(0, c)], max_relative = 1e-12);
        }
    }

    #[test]
    fn identical_rows_give_uniform_attention() {
        let h = hyper(8, 1);
        let params = ModelParams::init(4, &h);
        let mut batch = random_batch(1, 6, 4, ring(1), 4);
        // Make every step identical.
        for t in 1..6 {
            for f in 0..4 {
                batch.x[(0, t, f)] = batch.x[(0, 0, f)];
            }
            for c in 0..4 {
                batch.d[(0, t, c)] = batch.d[(0, 0, c)];
            }
        }
        let out = forward(&batch, &params, &h).unwrap();
        let attn = out.cache.attn[0].index_axis(ndarray::Axis(0), 0);
        for t in 0..6 {
            for s in 0..6 {
                assert_relative_eq!(attn[(t, s)], 1.0 / 6.0, max_relative = 1e-9);
            }
        }
    }

    #[test]
    fn attention_rows_are_distributions() {
        let h = hyper(16, 2);
        let params = ModelParams::init(5, &h);
        for seed in 0..20 {
            let batch = random_batch(3, 12, 5, ring(3), seed);
            let out = forward(&batch, &params, &h).unwrap();
            for layer in &out.cache.attn {
                for i in 0..3 {
                    let a = layer.index_axis(ndarray::Axis(0), i);
                    for row in a.rows() {
                        let sum: f64 = row.sum();
                        assert!((sum - 1.0).abs() < 1e-9, "row sum {sum}");
                        assert!(row.iter().all(|&w| w >= 0.0));
                    }
                }
            }
            if let Some(gat) = &out.cache.gat {
                for alphas in &gat.alpha {
                    let sum: f64 = alphas.iter().sum();
                    assert!((sum - 1.0).abs() < 1e-9, "gat sum {sum}");
                    assert!(alphas.iter().all(|&w| w >= 0.0));
                }
            }
        }
    }

    #[test]
    fn single_neighbor_gets_full_attention() {
        let h = hyper(8, 1);
        let params = ModelParams::init(5, &h);
        // Path graph 0 - 1: node 0 has exactly one neighbor, node 1.
        let graph = DeviceGraph {
            n_nodes: 2,
            edges: vec![(0, 1, 1.0)],
            symmetric: true,
        };
        let batch = random_batch(2, 5, 5, graph, 12);
        let out = forward(&batch, &params, &h).unwrap();
        let gat = out.cache.gat.as_ref().unwrap();
        assert_eq!(gat.alpha[0], vec![1.0]);
        // g_0 = tanh(W hbar_1).
        let wh1 = gat.wh.row(1);
        for c in 0..8 {
            assert_relative_eq!(out.cache.g[(0, c)], wh1[c].tanh(), max_relative = 1e-12);
        }
    }

    #[test]
    fn identical_neighbor_features_give_uniform_alpha() {
        let h = hyper(8, 1);
        let params = ModelParams::init(5, &h);
        let mut batch = random_batch(4, 5, 5, ring(4), 8);
        // Same inputs for every device: pooled states coincide.
        for i in 1..4 {
            for t in 0..5 {
                for f in 0..5 {
                    batch.x[(i, t, f)] = batch.x[(0, t, f)];
                }
                for c in 0..4 {
                    batch.d[(i, t, c)] = batch.d[(0, t, c)];
                }
            }
        }
        let out = forward(&batch, &params, &h).unwrap();
        let gat = out.cache.gat.as_ref().unwrap();
        for alphas in &gat.alpha {
            assert_eq!(alphas.len(), 2);
            for &a in alphas {
                assert_relative_eq!(a, 0.5, max_relative = 1e-9);
            }
        }
    }

    #[test]
    fn zero_heads_give_half_posterior() {
        let h = hyper(8, 1);
        let mut params = ModelParams::init(5, &h);
        params.cls_w.fill(0.0);
        params.cls_b = 0.0;
        let batch = random_batch(2, 6, 5, ring(2), 5);
        let out = forward(&batch, &params, &h).unwrap();
        assert!(out.p_hat.iter().all(|&p| p == 0.5));
    }

    #[test]
    fn posterior_is_strictly_inside_unit_interval() {
        let h = hyper(16, 2);
        let params = ModelParams::init(5, &h);
        let batch = random_batch(4, 10, 5, ring(4), 77);
        let out = forward(&batch, &params, &h).unwrap();
        assert!(out.p_hat.iter().all(|&p| p > 0.0 && p < 1.0));
    }

    #[test]
    fn graph_ablation_isolates_devices() {
        let mut h = hyper(8, 1);
        h.use_graph_attention = false;
        let params = ModelParams::init(5, &h);
        let batch_a = random_batch(3, 6, 5, ring(3), 21);
        let mut batch_b = batch_a.clone();
        // Perturb device 2's inputs; device 0 outputs must be bit-identical.
        for t in 0..6 {
            for f in 0..5 {
                batch_b.x[(2, t, f)] += 3.5;
            }
        }
        let out_a = forward(&batch_a, &params, &h).unwrap();
        let out_b = forward(&batch_b, &params, &h).unwrap();
        for t in 0..6 {
            assert_eq!(out_a.p_hat[(0, t)], out_b.p_hat[(0, t)]);
            assert_eq!(out_a.delta_hat[(0, t)], out_b.delta_hat[(0, t)]);
        }
        assert_ne!(out_a.p_hat[(2, 0)], out_b.p_hat[(2, 0)]);
    }

    #[test]
    fn drift_ablation_ignores_drift_inputs() {
        let mut h = hyper(8, 1);
        h.use_drift_embedding = false;
        let params = ModelParams::init(5, &h);
        let batch_a = random_batch(2, 6, 5, ring(2), 31);
        let mut batch_b = batch_a.clone();
        for t in 0..6 {
            for c in 0..3 {
                batch_b.d[(0, t, c)] += 7.0;
            }
        }
        let out_a = forward(&batch_a, &params, &h).unwrap();
        let out_b = forward(&batch_b, &params, &h).unwrap();
        assert_eq!(out_a.p_hat, out_b.p_hat);
        assert_eq!(out_a.x_hat, out_b.x_hat);
    }

    #[test]
    fn device_permutation_is_equivariant() {
        let h = hyper(8, 2);
        let params = ModelParams::init(5, &h);
        let batch = random_batch(4, 6, 5, ring(4), 13);
        let out = forward(&batch, &params, &h).unwrap();

        // Relabel devices through the permutation perm[i] = new id of i.
        let perm = [2usize, 0, 3, 1];
        let mut x = batch.x.clone();
        let mut d = batch.d.clone();
        let mut labels = batch.labels.clone();
        let mut delta = batch.delta_true.clone();
        let mut tau = batch.tau.clone();
        for i in 0..4 {
            let ni = perm[i];
            x.index_axis_mut(ndarray::Axis(0), ni)
                .assign(&batch.x.index_axis(ndarray::Axis(0), i));
            d.index_axis_mut(ndarray::Axis(0), ni)
                .assign(&batch.d.index_axis(ndarray::Axis(0), i));
            labels.row_mut(ni).assign(&batch.labels.row(i));
            delta.row_mut(ni).assign(&batch.delta_true.row(i));
            tau.row_mut(ni).assign(&batch.tau.row(i));
        }
        let permuted = Batch {
            x,
            d,
            graph: batch.graph.permuted(&perm),
            labels,
            delta_true: delta,
            tau,
        };
        let out_p = forward(&permuted, &params, &h).unwrap();
        for i in 0..4 {
            for t in 0..6 {
                assert_relative_eq!(
                    out.p_hat[(i, t)],
                    out_p.p_hat[(perm[i], t)],
                    max_relative = 1e-9
                );
                assert_relative_eq!(
                    out.delta_hat[(i, t)],
                    out_p.delta_hat[(perm[i], t)],
                    max_relative = 1e-9,
                    epsilon = 1e-12
                );
            }
        }
    }

    #[test]
    fn curvature_of_orthonormal_and_scaled_maps() {
        let h = hyper(8, 1);
        let mut params = ModelParams::init(5, &h);
        // Combined map C = W_proj W_emb equal to the first four columns of
        // the identity: orthonormal columns, so K = 0.
        params.w_emb = Array2::from_shape_fn((5, 4), |(r, c)| f64::from(r == c));
        params.w_proj = Array2::from_shape_fn((8, 5), |(r, c)| f64::from(r == c));
        let (k, _) = embedding_curvature_and_map(&params, &h);
        assert!(k.abs() < 1e-12);

        // Doubling the map gives C^T C = 4I and K = ||3 I_4||_F = 6.
        params.w_emb.mapv_inplace(|v| 2.0 * v);
        let (k2, _) = embedding_curvature_and_map(&params, &h);
        assert_relative_eq!(k2, 6.0, max_relative = 1e-12);

        // Ablated drift embedding: zero Jacobian, constant curvature 2.
        let mut h_off = h;
        h_off.use_drift_embedding = false;
        let (k3, map) = embedding_curvature_and_map(&params, &h_off);
        assert_eq!(k3, 2.0);
        assert!(map.is_none());
    }

    #[test]
    fn overflow_input_conventions() {
        let flags = vec![0u8; 5];
        let constant = predict_overflow_inputs(&[2.0; 5], &flags);
        for inp in &constant {
            assert_eq!(inp[1], 0.0);
            assert_eq!(inp[2], 0.0);
        }
        let ramp: Vec<f64> = (0..5).map(|t| t as f64).collect();
        let out = predict_overflow_inputs(&ramp, &flags);
        for (t, inp) in out.iter().enumerate() {
            if t >= 1 {
                assert_eq!(inp[1], 1.0);
            }
            if t >= 2 {
                assert_eq!(inp[2], 0.0);
            }
        }
        // Proximity flag within the margin.
        let h = hyper(8, 1);
        let params = ModelParams::init(5, &h);
        let mut batch = random_batch(1, 3, 5, ring(1), 2);
        batch.tau[(0, 2)] = T0 as f64 - 1.0;
        let out = forward(&batch, &params, &h).unwrap();
        assert_eq!(out.over_inputs[(0, 2, 3)], 1.0);
        assert_eq!(out.over_inputs[(0, 0, 3)], 0.0);
    }

    #[test]
    fn shape_violations_are_rejected() {
        let h = hyper(8, 1);
        let params = ModelParams::init(5, &h);
        let mut batch = random_batch(2, 4, 5, ring(2), 1);
        batch.labels[(0, 0)] = 0.5;
        assert!(matches!(
            forward(&batch, &params, &h),
            Err(StgatError::BadLabel(_))
        ));
        let other = ModelParams::init(6, &h);
        let batch2 = random_batch(2, 4, 5, ring(2), 1);
        assert!(matches!(
            forward(&batch2, &other, &h),
            Err(StgatError::ShapeMismatch(_))
        ));
    }
}
