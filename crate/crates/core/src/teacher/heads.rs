//! Action heads on top of the frozen encoder.
//!
//! Three heads cover the two representation paths:
//!
//! * a regression head mapping mean-pooled image features plus proprio to an
//!   action;
//! * a flow head predicting a velocity field over actions, integrated with a
//!   configurable number of Euler steps at deployment;
//! * a cross-attention read-out that queries the last two key/value cache
//!   layers directly, for the path that never materializes hidden states.
//!
//! Head forward passes are recorded on the tape because heads are trained and
//! later adapted; the frozen encoder feeding them is not.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::kvbridge::rope::RotaryTable;
use crate::rng::stream;
use crate::scalar::{sc, Scalar};
use crate::tensorkit::{BoundParams, NodeId, ParamStore, Tape, Tensor, TensorError};

// ---------------------------------------------------------------------------
// shared three-layer perceptron
// ---------------------------------------------------------------------------

fn mlp3_init<S: Scalar>(
    d_in: usize,
    hidden: usize,
    d_out: usize,
    seed: u64,
    purpose: &str,
) -> ParamStore<S> {
    let mut store = ParamStore::new();
    let mut idx = 0u64;
    let mut draw = |rows: usize, cols: usize| {
        let t = Tensor::randn(
            &mut stream(seed, purpose, idx),
            rows,
            cols,
            1.0 / (rows as f64).sqrt(),
        );
        idx += 1;
        t
    };
    store.insert("w1", draw(d_in, hidden)).expect("unique");
    store.insert("b1", Tensor::zeros(1, hidden)).expect("unique");
    store.insert("w2", draw(hidden, hidden)).expect("unique");
    store.insert("b2", Tensor::zeros(1, hidden)).expect("unique");
    store.insert("w3", draw(hidden, d_out)).expect("unique");
    store.insert("b3", Tensor::zeros(1, d_out)).expect("unique");
    store
}

/// Tape forward of the shared trunk: two tanh layers, linear output. `x` is
/// `batch x d_in`; every batch row flows through the same weights.
pub fn mlp3_forward<S: Scalar>(
    tape: &mut Tape<S>,
    bound: &BoundParams,
    x: NodeId,
) -> Result<NodeId, TensorError> {
    let mut h = tape.matmul(x, bound.id("w1")?)?;
    h = tape.add_row(h, bound.id("b1")?)?;
    h = tape.tanh(h);
    h = tape.matmul(h, bound.id("w2")?)?;
    h = tape.add_row(h, bound.id("b2")?)?;
    h = tape.tanh(h);
    h = tape.matmul(h, bound.id("w3")?)?;
    tape.add_row(h, bound.id("b3")?)
}

/// Gradient-free evaluation of the same trunk, bit-identical to the tape
/// path because both use the same kernels in the same order.
pub fn mlp3_eval<S: Scalar>(store: &ParamStore<S>, x: &Tensor<S>) -> Result<Tensor<S>, TensorError> {
    let mut h = x.matmul(store.get("w1")?)?.add_row_broadcast(store.get("b1")?)?;
    h = h.map(|e| e.tanh());
    h = h.matmul(store.get("w2")?)?.add_row_broadcast(store.get("b2")?)?;
    h = h.map(|e| e.tanh());
    h.matmul(store.get("w3")?)?.add_row_broadcast(store.get("b3")?)
}

// ---------------------------------------------------------------------------
// feature pooling and the regression head
// ---------------------------------------------------------------------------

/// Mean over image rows only; text rows never reach the action pathway.
pub fn pool_features<S: Scalar>(z: &Tensor<S>, image_mask: &[bool]) -> Tensor<S> {
    let d = z.cols();
    let mut out = Tensor::zeros(1, d);
    let mut count = 0usize;
    for (r, &keep) in image_mask.iter().enumerate() {
        if keep {
            for (o, &v) in out.row_mut(0).iter_mut().zip(z.row(r)) {
                *o += v;
            }
            count += 1;
        }
    }
    let inv = sc::<S>(1.0 / count.max(1) as f64);
    out.map(|v| v * inv)
}

/// `pooled features ++ proprio` as one input row.
pub fn feature_head_input<S: Scalar>(
    z: &Tensor<S>,
    image_mask: &[bool],
    q: &[f64],
) -> Result<Tensor<S>, TensorError> {
    let pooled = pool_features(z, image_mask);
    let qrow = Tensor::row_from_f64(q);
    Tensor::hstack(&[&pooled, &qrow])
}

pub fn feature_head_init<S: Scalar>(
    d_model: usize,
    q_dim: usize,
    hidden: usize,
    action_dim: usize,
    seed: u64,
) -> ParamStore<S> {
    mlp3_init(d_model + q_dim, hidden, action_dim, seed, "feature_head")
}

// ---------------------------------------------------------------------------
// flow head
// ---------------------------------------------------------------------------

/// Flow-time draw concentrated toward the action end of the path: inverse
/// CDF of the density proportional to `sqrt(t)`, so `t = u^(2/3)` with mean
/// 0.6.
pub fn flow_time_from_uniform(u: f64) -> f64 {
    u.powf(2.0 / 3.0)
}

/// The field relaxes the sample toward a context anchor. The network
/// predicts the displacement `d = gate(t) * (anchor(ctx) - x)`; the velocity
/// is that displacement spread over the remaining time, `v = d / (1 - t)`,
/// with the divisor applied analytically by the integrator rather than
/// learned. On a straight corruption path the ideal anchor is the expert
/// action, independent of flow time, and the ideal gate is the constant 1,
/// so the anchor trunk faces the same fitting problem as the plain
/// regression head and the integration collapses onto the anchor for every
/// step count. The gate starts at 1 (hidden output weights zero, output
/// bias one), so a fresh head already lands on its anchor, and zeroing
/// every parameter zeroes the field.
pub fn flow_head_init<S: Scalar>(
    d_model: usize,
    q_dim: usize,
    hidden: usize,
    action_dim: usize,
    seed: u64,
) -> ParamStore<S> {
    let mut store = mlp3_init(d_model + q_dim, hidden, action_dim, seed, "flow_head");
    let gate_hidden = 8;
    store
        .insert(
            "xg.w1",
            Tensor::randn(&mut stream(seed, "flow_head_gate", 0), 1, gate_hidden, 1.0),
        )
        .expect("unique");
    store
        .insert("xg.b1", Tensor::zeros(1, gate_hidden))
        .expect("unique");
    store
        .insert("xg.w2", Tensor::zeros(gate_hidden, action_dim))
        .expect("unique");
    store
        .insert("xg.b2", Tensor::filled(1, action_dim, S::one()))
        .expect("unique");
    store
}

/// Taped displacement, batched over rows; `times` is one column, one flow
/// time per row, entering as a gradient-free leaf. The matching velocity
/// target for time `t` is the displacement target `a - x_t`, which keeps
/// every training sample's scale bounded regardless of how close `t` is
/// to 1.
pub fn flow_displacement_tape<S: Scalar>(
    tape: &mut Tape<S>,
    bound: &BoundParams,
    x: NodeId,
    times: &Tensor<S>,
    ctx: NodeId,
) -> Result<NodeId, TensorError> {
    let tid = tape.leaf(times.clone());
    let trunk = mlp3_forward(tape, bound, ctx)?;
    let mut g = tape.matmul(tid, bound.id("xg.w1")?)?;
    g = tape.add_row(g, bound.id("xg.b1")?)?;
    g = tape.tanh(g);
    g = tape.matmul(g, bound.id("xg.w2")?)?;
    g = tape.add_row(g, bound.id("xg.b2")?)?;
    let diff = tape.sub(trunk, x)?;
    tape.mul(diff, g)
}

/// Gradient-free displacement, same kernels and order as the taped path.
pub fn flow_displacement_eval<S: Scalar>(
    store: &ParamStore<S>,
    x: &Tensor<S>,
    times: &Tensor<S>,
    ctx: &Tensor<S>,
) -> Result<Tensor<S>, TensorError> {
    let trunk = mlp3_eval(store, ctx)?;
    let mut g = times
        .matmul(store.get("xg.w1")?)?
        .add_row_broadcast(store.get("xg.b1")?)?;
    g = g.map(|e| e.tanh());
    g = g
        .matmul(store.get("xg.w2")?)?
        .add_row_broadcast(store.get("xg.b2")?)?;
    let mut out = g.clone();
    for i in 0..out.rows() {
        for j in 0..out.cols() {
            let diff = trunk.get(i, j) - x.get(i, j);
            out.set(i, j, diff * g.get(i, j));
        }
    }
    Ok(out)
}

/// Noise seed for the flow integrator at one control step. Pinning the
/// stream here keeps deployments with different step counts comparable and
/// makes replays exact.
pub fn flow_noise<S: Scalar>(episode_seed: u64, step: usize, action_dim: usize) -> Tensor<S> {
    Tensor::randn(
        &mut stream(episode_seed, "flow", step as u64),
        1,
        action_dim,
        1.0,
    )
}

/// Euler integration of the learned velocity field from `noise` at time 0 to
/// an action at time 1, over uniform sub-intervals with left-endpoint times.
/// The velocity at time `k/steps` is the displacement over the remaining
/// time, so the Euler weight `dt / (1 - k/steps)` reduces to the exact
/// reciprocal `1 / (steps - k)`. With an all-zero field the output equals
/// the noise; with a unit gate every step count lands on the anchor.
pub fn flow_denoise<S: Scalar>(
    store: &ParamStore<S>,
    ctx: &Tensor<S>,
    q: &[f64],
    noise: &Tensor<S>,
    steps: usize,
) -> Result<Tensor<S>, TensorError> {
    if steps == 0 {
        return Err(TensorError::Invalid {
            op: "flow_denoise",
            detail: "steps must be positive".into(),
        });
    }
    let qrow = Tensor::row_from_f64(q);
    let cq = Tensor::hstack(&[ctx, &qrow])?;
    let mut x = noise.clone();
    for k in 0..steps {
        let t = k as f64 / steps as f64;
        let times = Tensor::row_from_f64(&[t]);
        let d = flow_displacement_eval(store, &x, &times, &cq)?;
        let w = sc::<S>(1.0 / (steps - k) as f64);
        x = x.add(&d.map(|e| e * w));
    }
    Ok(x)
}

// ---------------------------------------------------------------------------
// key/value read-out head
// ---------------------------------------------------------------------------

/// Geometry of the cache read-out. Mirrors the encoder's attention geometry:
/// the same number of query heads sharing one key/value head per layer.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct KvHeadConfig {
    pub d_model: usize,
    pub q_heads: usize,
    pub head_dim: usize,
    pub hidden: usize,
    pub q_dim: usize,
    pub action_dim: usize,
    /// Cache layers the two read-out blocks attend to, innermost first.
    pub cache_layers: [usize; 2],
    /// Sequence position of the read-out query, one past the last token.
    pub query_position: usize,
}

impl KvHeadConfig {
    pub fn for_backbone(bb: &super::BackboneConfig, action_dim: usize) -> KvHeadConfig {
        KvHeadConfig {
            d_model: bb.d_model,
            q_heads: bb.q_heads,
            head_dim: bb.head_dim,
            hidden: 64,
            q_dim: 4,
            action_dim,
            cache_layers: [bb.layers - 2, bb.layers - 1],
            query_position: bb.query_position(),
        }
    }
}

pub fn kv_head_init<S: Scalar>(cfg: &KvHeadConfig, seed: u64) -> ParamStore<S> {
    let mut store = ParamStore::new();
    let mut idx = 0u64;
    let mut draw = |rows: usize, cols: usize| {
        let t = Tensor::randn(
            &mut stream(seed, "kv_head", idx),
            rows,
            cols,
            1.0 / (rows as f64).sqrt(),
        );
        idx += 1;
        t
    };
    let d = cfg.d_model;
    let att = cfg.q_heads * cfg.head_dim;
    store.insert("in_w1", draw(cfg.q_dim, d)).expect("unique");
    store.insert("in_b1", Tensor::zeros(1, d)).expect("unique");
    store.insert("in_w2", draw(d, d)).expect("unique");
    store.insert("in_b2", Tensor::zeros(1, d)).expect("unique");
    for j in 0..2 {
        store.insert(&format!("att{j}.wq"), draw(d, att)).expect("unique");
        store.insert(&format!("att{j}.wo"), draw(att, d)).expect("unique");
        store.insert(&format!("att{j}.w1"), draw(d, cfg.hidden)).expect("unique");
        store
            .insert(&format!("att{j}.b1"), Tensor::zeros(1, cfg.hidden))
            .expect("unique");
        store.insert(&format!("att{j}.w2"), draw(cfg.hidden, d)).expect("unique");
        store
            .insert(&format!("att{j}.b2"), Tensor::zeros(1, d))
            .expect("unique");
    }
    store.insert("out_w", draw(d, cfg.action_dim)).expect("unique");
    store
        .insert("out_b", Tensor::zeros(1, cfg.action_dim))
        .expect("unique");
    store
}

/// One cache layer's rows, already in the rotated frame, mounted as tape
/// inputs.
pub struct CacheLeaves {
    pub k: NodeId,
    pub v: NodeId,
}

/// Tape forward of the read-out head. `layers` carries the two cache layers
/// named by `cfg.cache_layers`, in that order; keys must be in the rotated
/// frame because queries are rotated before scoring.
pub fn kv_head_forward<S: Scalar>(
    tape: &mut Tape<S>,
    bound: &BoundParams,
    cfg: &KvHeadConfig,
    rope: &RotaryTable<S>,
    q_proprio: NodeId,
    layers: &[CacheLeaves; 2],
) -> Result<NodeId, TensorError> {
    // Proprio embedding is the initial query-token state.
    let mut x = tape.matmul(q_proprio, bound.id("in_w1")?)?;
    x = tape.add_row(x, bound.id("in_b1")?)?;
    x = tape.tanh(x);
    x = tape.matmul(x, bound.id("in_w2")?)?;
    x = tape.add_row(x, bound.id("in_b2")?)?;

    let (qcos, qsin) = rope
        .window(cfg.query_position, 1)
        .map_err(|_| TensorError::Invalid {
            op: "kv_head_forward",
            detail: format!(
                "rotary table lacks position {}",
                cfg.query_position
            ),
        })?;
    let scale = sc::<S>(1.0 / (cfg.head_dim as f64).sqrt());
    for (j, leaves) in layers.iter().enumerate() {
        let h = tape.layernorm_rows(x);
        let qfull = tape.matmul(h, bound.id(&format!("att{j}.wq"))?)?;
        let kt = tape.transpose(leaves.k);
        let mut heads = Vec::with_capacity(cfg.q_heads);
        for hh in 0..cfg.q_heads {
            let mut qh = tape.slice_cols(qfull, hh * cfg.head_dim, cfg.head_dim)?;
            qh = tape.rotate_half(qh, qcos.clone(), qsin.clone(), false)?;
            let mut scores = tape.matmul(qh, kt)?;
            scores = tape.scale(scores, scale);
            let att = tape.softmax_rows(scores);
            heads.push(tape.matmul(att, leaves.v)?);
        }
        let concat = tape.concat_cols(&heads)?;
        let o = tape.matmul(concat, bound.id(&format!("att{j}.wo"))?)?;
        x = tape.add(x, o)?;
        let h2 = tape.layernorm_rows(x);
        let mut m = tape.matmul(h2, bound.id(&format!("att{j}.w1"))?)?;
        m = tape.add_row(m, bound.id(&format!("att{j}.b1"))?)?;
        m = tape.tanh(m);
        m = tape.matmul(m, bound.id(&format!("att{j}.w2"))?)?;
        m = tape.add_row(m, bound.id(&format!("att{j}.b2"))?)?;
        x = tape.add(x, m)?;
    }
    let hn = tape.layernorm_rows(x);
    let out = tape.matmul(hn, bound.id("out_w")?)?;
    tape.add_row(out, bound.id("out_b")?)
}

/// Gradient-free read-out evaluation for deployment.
pub fn kv_head_eval<S: Scalar>(
    store: &ParamStore<S>,
    cfg: &KvHeadConfig,
    rope: &RotaryTable<S>,
    q_proprio: &[f64],
    k_layers: [&Tensor<S>; 2],
    v_layers: [&Tensor<S>; 2],
) -> Result<Tensor<S>, TensorError> {
    let mut tape = Tape::new();
    let bound = BoundParams::bind(&mut tape, store);
    let q = tape.leaf(Tensor::row_from_f64(q_proprio));
    let layers = [
        CacheLeaves {
            k: tape.leaf(k_layers[0].clone()),
            v: tape.leaf(v_layers[0].clone()),
        },
        CacheLeaves {
            k: tape.leaf(k_layers[1].clone()),
            v: tape.leaf(v_layers[1].clone()),
        },
    ];
    let out = kv_head_forward(&mut tape, &bound, cfg, rope, q, &layers)?;
    Ok(tape.value(out).clone())
}

/// Uniform draw helper for flow-time sampling.
pub fn draw_flow_time(rng: &mut ChaCha8Rng) -> f64 {
    flow_time_from_uniform(rng.gen_range(0.0..1.0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::teacher::{Backbone, BackboneConfig};
    use crate::tensorkit::GradMap;

    #[test]
    fn tape_and_plain_trunk_agree_bitwise() {
        let store: ParamStore<f64> = feature_head_init(32, 4, 64, 2, 3);
        let x = Tensor::randn(&mut stream(0, "t", 0), 5, 36, 1.0);
        let plain = mlp3_eval(&store, &x).unwrap();
        let mut tape = Tape::new();
        let bound = BoundParams::bind(&mut tape, &store);
        let xid = tape.leaf(x);
        let out = mlp3_forward(&mut tape, &bound, xid).unwrap();
        assert_eq!(tape.value(out).data(), plain.data());
    }

    #[test]
    fn pooling_ignores_text_rows_so_text_changes_cannot_move_the_action() {
        let store: ParamStore<f64> = feature_head_init(32, 4, 64, 2, 3);
        let mask = {
            let mut m = vec![true; 8];
            m.extend([false, false]);
            m
        };
        let mut z = Tensor::randn(&mut stream(1, "t", 0), 10, 32, 1.0);
        let q = [0.1, -0.2, 0.0, 0.3];
        let a1 = mlp3_eval(&store, &feature_head_input(&z, &mask, &q).unwrap()).unwrap();
        for r in 8..10 {
            for c in 0..32 {
                z.set(r, c, z.get(r, c) + 5.0);
            }
        }
        let a2 = mlp3_eval(&store, &feature_head_input(&z, &mask, &q).unwrap()).unwrap();
        assert_eq!(a1.data(), a2.data());
    }

    #[test]
    fn zero_features_and_proprio_exercise_only_the_bias_pathway() {
        let mut store: ParamStore<f64> = feature_head_init(32, 4, 64, 2, 9);
        *store.get_mut("b1").unwrap() = Tensor::filled(1, 64, 0.3);
        *store.get_mut("b3").unwrap() = Tensor::filled(1, 2, -0.1);
        let x = Tensor::zeros(1, 36);
        let out = mlp3_eval(&store, &x).unwrap();
        // x = 0 so layer 1 yields tanh(b1); push that through the rest.
        let h1 = Tensor::<f64>::filled(1, 64, 0.3f64.tanh());
        let h2 = h1
            .matmul(store.get("w2").unwrap())
            .unwrap()
            .add_row_broadcast(store.get("b2").unwrap())
            .unwrap()
            .map(f64::tanh);
        let expect = h2
            .matmul(store.get("w3").unwrap())
            .unwrap()
            .add_row_broadcast(store.get("b3").unwrap())
            .unwrap();
        assert_eq!(out.data(), expect.data());
    }

    #[test]
    fn flow_time_matches_the_target_density() {
        let mut rng = stream(7, "flow_time_test", 0);
        let n = 20000;
        let mut sum = 0.0;
        let mut below = 0usize;
        for _ in 0..n {
            let t = draw_flow_time(&mut rng);
            assert!((0.0..=1.0).contains(&t));
            sum += t;
            if t <= 0.25 {
                below += 1;
            }
        }
        let mean = sum / n as f64;
        assert!((mean - 0.6).abs() < 0.01, "mean {mean}");
        let cdf = below as f64 / n as f64;
        assert!((cdf - 0.125).abs() < 0.01, "cdf(0.25) {cdf}");
    }

    #[test]
    fn zero_velocity_field_returns_the_noise_unchanged() {
        let mut store: ParamStore<f64> = flow_head_init(32, 4, 64, 2, 1);
        let names: Vec<String> = store.names().to_vec();
        for name in &names {
            let t = store.get_mut(name).unwrap();
            *t = Tensor::zeros(t.rows(), t.cols());
        }
        let ctx = Tensor::randn(&mut stream(2, "t", 0), 1, 32, 1.0);
        let noise = flow_noise::<f64>(5, 3, 2);
        for steps in [1, 4, 10] {
            let out = flow_denoise(&store, &ctx, &[0.0; 4], &noise, steps).unwrap();
            assert_eq!(out.data(), noise.data());
        }
    }

    #[test]
    fn fresh_gate_lands_on_the_anchor_at_every_step_count() {
        let store: ParamStore<f64> = flow_head_init(32, 4, 64, 2, 1);
        let ctx = Tensor::randn(&mut stream(2, "t", 2), 1, 32, 1.0);
        let q = [0.1, -0.2, 0.0, 0.3];
        let cq = Tensor::hstack(&[&ctx, &Tensor::row_from_f64(&q)]).unwrap();
        let anchor = mlp3_eval(&store, &cq).unwrap();
        for (step_idx, steps) in [1usize, 2, 7, 10].into_iter().enumerate() {
            let noise = flow_noise::<f64>(5, step_idx, 2);
            let out = flow_denoise(&store, &ctx, &q, &noise, steps).unwrap();
            for j in 0..2 {
                assert!(
                    (out.get(0, j) - anchor.get(0, j)).abs() < 1e-9,
                    "steps {steps} col {j}"
                );
            }
        }
    }

    #[test]
    fn single_step_integration_is_one_euler_update_from_time_zero() {
        let store: ParamStore<f64> = flow_head_init(32, 4, 64, 2, 1);
        let ctx = Tensor::randn(&mut stream(2, "t", 1), 1, 32, 1.0);
        let q = [0.2, 0.0, -0.1, 0.05];
        let noise = flow_noise::<f64>(5, 0, 2);
        let out = flow_denoise(&store, &ctx, &q, &noise, 1).unwrap();
        let qrow = Tensor::row_from_f64(&q);
        let cq = Tensor::hstack(&[&ctx, &qrow]).unwrap();
        let times = Tensor::row_from_f64(&[0.0]);
        let d = flow_displacement_eval(&store, &noise, &times, &cq).unwrap();
        let expect = noise.add(&d);
        assert_eq!(out.data(), expect.data());
    }

    #[test]
    fn taped_and_plain_displacement_agree_bitwise() {
        let mut store: ParamStore<f64> = flow_head_init(8, 2, 16, 2, 9);
        let mut rng = stream(9, "wake", 0);
        let names: Vec<String> = store.names().to_vec();
        for name in &names {
            let t = store.get_mut(name).unwrap();
            *t = Tensor::randn(&mut rng, t.rows(), t.cols(), 0.3);
        }
        let n = 4;
        let x = Tensor::randn(&mut stream(9, "x", 0), n, 2, 1.0);
        let times = Tensor::randn(&mut stream(9, "u", 0), n, 1, 0.3).map(|e: f64| e.abs());
        let ctx = Tensor::randn(&mut stream(9, "c", 0), n, 10, 1.0);
        let plain = flow_displacement_eval(&store, &x, &times, &ctx).unwrap();
        let mut tape = Tape::new();
        let bound = BoundParams::bind(&mut tape, &store);
        let (xi, ci) = (tape.leaf(x), tape.leaf(ctx));
        let out = flow_displacement_tape(&mut tape, &bound, xi, &times, ci).unwrap();
        assert_eq!(tape.value(out).data(), plain.data());
    }

    #[test]
    fn displacement_gradients_match_finite_differences() {
        let mut store: ParamStore<f64> = flow_head_init(6, 2, 10, 2, 11);
        let mut rng = stream(11, "wake", 0);
        let names: Vec<String> = store.names().to_vec();
        for name in &names {
            let t = store.get_mut(name).unwrap();
            *t = Tensor::randn(&mut rng, t.rows(), t.cols(), 0.3);
        }
        let n = 3;
        let x = Tensor::randn(&mut stream(11, "x", 0), n, 2, 1.0);
        let times = Tensor::randn(&mut stream(11, "u", 0), n, 1, 0.3).map(|e: f64| e.abs());
        let ctx = Tensor::randn(&mut stream(11, "c", 0), n, 8, 1.0);
        let target = Tensor::randn(&mut stream(11, "y", 0), n, 2, 1.0);

        let flatten = |s: &ParamStore<f64>| -> Vec<f64> {
            let mut flat = Vec::new();
            for (_, t) in s.iter() {
                flat.extend(t.to_f64_vec());
            }
            flat
        };
        let loss_at = |flat: &[f64]| -> f64 {
            let mut s = store.clone();
            let mut off = 0usize;
            for name in &names {
                let t = s.get_mut(name).unwrap();
                let (r, c) = t.shape();
                *t = Tensor::from_f64_vec(r, c, &flat[off..off + r * c]).unwrap();
                off += r * c;
            }
            let v = flow_displacement_eval(&s, &x, &times, &ctx).unwrap();
            let mut tape = Tape::new();
            let (a, b) = (tape.leaf(v), tape.leaf(target.clone()));
            let l = tape.mse_mean(a, b).unwrap();
            tape.value(l).get(0, 0)
        };

        let mut tape = Tape::new();
        let bound = BoundParams::bind(&mut tape, &store);
        let (xi, ci) = (tape.leaf(x.clone()), tape.leaf(ctx.clone()));
        let v = flow_displacement_tape(&mut tape, &bound, xi, &times, ci).unwrap();
        let y = tape.leaf(target.clone());
        let loss = tape.mse_mean(v, y).unwrap();
        let grads = tape.backward(loss).unwrap();
        let mut gm = GradMap::new();
        bound.pull(&grads, &mut gm);
        let mut analytic = Vec::new();
        for (name, t) in store.iter() {
            match gm.get(name) {
                Some(g) => analytic.extend(g.to_f64_vec()),
                None => analytic.extend(std::iter::repeat(0.0).take(t.numel())),
            }
        }
        let numeric = crate::tensorkit::fd_grad(&loss_at, &flatten(&store), 1e-5);
        let report = crate::tensorkit::check_against_fd(&analytic, &numeric, 1e-4);
        assert!(report.max_rel < 1e-6, "max rel {}", report.max_rel);
    }

    #[test]
    fn flow_noise_streams_are_step_and_episode_specific() {
        let a = flow_noise::<f64>(1, 0, 2);
        let b = flow_noise::<f64>(1, 1, 2);
        let c = flow_noise::<f64>(2, 0, 2);
        let a2 = flow_noise::<f64>(1, 0, 2);
        assert_eq!(a.data(), a2.data());
        assert_ne!(a.data(), b.data());
        assert_ne!(a.data(), c.data());
    }

    fn toy_cache(seed: u64) -> ([Tensor<f64>; 2], [Tensor<f64>; 2]) {
        let k = [
            Tensor::randn(&mut stream(seed, "k", 0), 10, 8, 1.0),
            Tensor::randn(&mut stream(seed, "k", 1), 10, 8, 1.0),
        ];
        let v = [
            Tensor::randn(&mut stream(seed, "v", 0), 10, 8, 1.0),
            Tensor::randn(&mut stream(seed, "v", 1), 10, 8, 1.0),
        ];
        (k, v)
    }

    #[test]
    fn readout_depends_on_cache_content_and_is_deterministic() {
        let bb = BackboneConfig::default();
        let cfg = KvHeadConfig::for_backbone(&bb, 2);
        let store: ParamStore<f64> = kv_head_init(&cfg, 4);
        let rope = RotaryTable::new(11, 8, 10000.0).unwrap();
        let (k, v) = toy_cache(0);
        let q = [0.1, 0.2, 0.0, -0.1];
        let a1 = kv_head_eval(&store, &cfg, &rope, &q, [&k[0], &k[1]], [&v[0], &v[1]]).unwrap();
        let a2 = kv_head_eval(&store, &cfg, &rope, &q, [&k[0], &k[1]], [&v[0], &v[1]]).unwrap();
        assert_eq!(a1.data(), a2.data());
        assert_eq!(a1.shape(), (1, 2));
        let (k2, v2) = toy_cache(9);
        let b = kv_head_eval(&store, &cfg, &rope, &q, [&k2[0], &k2[1]], [&v2[0], &v2[1]]).unwrap();
        assert_ne!(a1.data(), b.data());
    }

    #[test]
    fn readout_head_layers_follow_the_last_two_backbone_layers() {
        let bb = BackboneConfig::default();
        let cfg = KvHeadConfig::for_backbone(&bb, 2);
        assert_eq!(cfg.cache_layers, [2, 3]);
        assert_eq!(cfg.query_position, 10);
        let _ = Backbone::<f64>::new(bb, 0).unwrap();
    }

    #[test]
    fn readout_gradients_reach_every_parameter() {
        let bb = BackboneConfig::default();
        let cfg = KvHeadConfig::for_backbone(&bb, 2);
        let store: ParamStore<f64> = kv_head_init(&cfg, 4);
        let rope = RotaryTable::new(11, 8, 10000.0).unwrap();
        let (k, v) = toy_cache(1);
        let mut tape = Tape::new();
        let bound = BoundParams::bind(&mut tape, &store);
        let q = tape.leaf(Tensor::row_from_f64(&[0.1, 0.2, 0.0, -0.1]));
        let layers = [
            CacheLeaves {
                k: tape.leaf(k[0].clone()),
                v: tape.leaf(v[0].clone()),
            },
            CacheLeaves {
                k: tape.leaf(k[1].clone()),
                v: tape.leaf(v[1].clone()),
            },
        ];
        let out = kv_head_forward(&mut tape, &bound, &cfg, &rope, q, &layers).unwrap();
        let target = tape.leaf(Tensor::row_from_f64(&[0.5, -0.5]));
        let loss = tape.mse_mean(out, target).unwrap();
        let grads = tape.backward(loss).unwrap();
        let mut gm = GradMap::new();
        bound.pull(&grads, &mut gm);
        for name in store.names() {
            let g = gm.get(name).unwrap_or_else(|| panic!("no grad for {name}"));
            assert!(g.data().iter().any(|&x| x != 0.0), "{name} grad all zero");
        }
    }
}
