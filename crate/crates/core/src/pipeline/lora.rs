//! Low-rank adaptation of a trained action head to chained representations.
//!
//! The base head stays frozen; each wide weight gains an additive product of
//! two thin factors, with the second factor zero so adaptation starts from
//! exactly the original head. Training regresses the head's own
//! clean-representation actions from a mixture of predictor-chained and
//! clean inputs under feature-scaled noise, which teaches tolerance to
//! chaining error without moving the targets.

use rand::seq::SliceRandom;
use rand::Rng;

use crate::bridge::{self, BridgeInput, BridgeParams};
use crate::kvbridge::{
    chain_kv_delta, kv_bridge_forward, rotate_cache, EmbeddingPair, KvBridgeParams,
};
use crate::rng::{normal_vec, stream};
use crate::scalar::{sc, Scalar};
use crate::scheduler::BridgeKind;
use crate::teacher::bc::{ActionHead, Policy};
use crate::teacher::heads::{self, CacheLeaves};
use crate::teacher::KvCacheSnapshot;
use crate::tensorkit::{
    AdamHyper, AdamW, BoundParams, GradMap, NodeId, ParamStore, Tape, Tensor,
};

use super::{unflatten_cache, Dataset, DatasetVariant, FeatureView, KvView, PipelineError};

#[derive(Debug, Clone)]
pub struct LoraConfig {
    pub rank: usize,
    /// Noise scale as a fraction of the clean features' global standard
    /// deviation.
    pub noise_std: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for LoraConfig {
    fn default() -> Self {
        LoraConfig {
            rank: 4,
            noise_std: 0.05,
            epochs: 20,
            batch_size: 64,
            lr: 1e-3,
            seed: 0,
        }
    }
}

/// Factor pairs keyed `{weight}.a` / `{weight}.b`, plus which base weights
/// they attach to.
#[derive(Debug, Clone)]
pub struct LoraAdapter<S: Scalar> {
    pub factors: ParamStore<S>,
    pub rank: usize,
    pub adapted: Vec<String>,
}

#[derive(Debug, Clone)]
pub struct LoraReport {
    /// Action error of the frozen head on held-out chained inputs.
    pub mse_before: f64,
    /// Same error after merging the trained factors.
    pub mse_after: f64,
    pub feature_std: f64,
    pub train_records: usize,
    pub eval_records: usize,
}

// ---------------------------------------------------------------------------
// factor plumbing
// ---------------------------------------------------------------------------

/// Wide weights only: both dimensions must exceed the rank, otherwise the
/// product could express the full update and the factorization buys nothing.
fn adapted_names<S: Scalar>(store: &ParamStore<S>, rank: usize) -> Result<Vec<String>, PipelineError> {
    if rank == 0 {
        return Err(PipelineError::Rank("rank must be positive".into()));
    }
    let mut names = Vec::new();
    let mut widest = 0usize;
    for (name, t) in store.iter() {
        let m = t.rows().min(t.cols());
        widest = widest.max(m);
        if m > rank {
            names.push(name.to_string());
        }
    }
    if names.is_empty() {
        return Err(PipelineError::Rank(format!(
            "rank {rank} is not below any weight's smaller dimension (widest is {widest})"
        )));
    }
    names.sort();
    Ok(names)
}

fn init_factors<S: Scalar>(
    store: &ParamStore<S>,
    names: &[String],
    rank: usize,
    seed: u64,
) -> LoraAdapter<S> {
    let mut factors = ParamStore::new();
    for (i, name) in names.iter().enumerate() {
        let w = store.get(name).expect("adapted names come from this store");
        let std = 1.0 / (w.rows() as f64).sqrt();
        factors
            .insert(
                &format!("{name}.a"),
                Tensor::randn(&mut stream(seed, "lora", i as u64), w.rows(), rank, std),
            )
            .expect("unique");
        factors
            .insert(&format!("{name}.b"), Tensor::zeros(rank, w.cols()))
            .expect("unique");
    }
    LoraAdapter {
        factors,
        rank,
        adapted: names.to_vec(),
    }
}

/// Merge `W + A B` back into a plain store; untouched weights are copied.
/// With zero factors the result equals the base bit for bit.
pub fn apply_lora<S: Scalar>(
    base: &ParamStore<S>,
    adapter: &LoraAdapter<S>,
) -> Result<ParamStore<S>, PipelineError> {
    let mut out = base.clone();
    for name in &adapter.adapted {
        let a = adapter.factors.get(&format!("{name}.a"))?;
        let b = adapter.factors.get(&format!("{name}.b"))?;
        let merged = base.get(name)?.add(&a.matmul(b)?);
        *out.get_mut(name)? = merged;
    }
    Ok(out)
}

/// The same head with the trained factors merged in.
pub fn adapted_head<S: Scalar>(
    head: &ActionHead<S>,
    adapter: &LoraAdapter<S>,
) -> Result<ActionHead<S>, PipelineError> {
    Ok(match head {
        ActionHead::Regression(store) => ActionHead::Regression(apply_lora(store, adapter)?),
        ActionHead::Flow { store, steps } => ActionHead::Flow {
            store: apply_lora(store, adapter)?,
            steps: *steps,
        },
        ActionHead::KvReadout { store, cfg } => ActionHead::KvReadout {
            store: apply_lora(store, adapter)?,
            cfg: cfg.clone(),
        },
    })
}

/// Mount the base weights and point every adapted name at `W + A B` so the
/// head's forward sees effective weights while gradients reach only the
/// factors.
fn bind_adapted<S: Scalar>(
    tape: &mut Tape<S>,
    base: &ParamStore<S>,
    adapter: &LoraAdapter<S>,
) -> Result<(BoundParams, BoundParams), PipelineError> {
    let mut bound = BoundParams::bind(tape, base);
    let fac = BoundParams::bind(tape, &adapter.factors);
    for name in &adapter.adapted {
        let a = fac.id(&format!("{name}.a"))?;
        let b = fac.id(&format!("{name}.b"))?;
        let prod = tape.matmul(a, b)?;
        let eff = tape.add(bound.id(name)?, prod)?;
        bound.redirect(name, eff)?;
    }
    Ok((bound, fac))
}

// ---------------------------------------------------------------------------
// adaptation
// ---------------------------------------------------------------------------

/// Every `EVAL_STRIDE`-th record is held out for the before/after error.
const EVAL_STRIDE: usize = 10;

struct FeatureSamples<S: Scalar> {
    /// Head input rows, `features ++ proprio`, after mixing and noise.
    xs: Vec<Tensor<S>>,
    /// Base-head actions on the clean features.
    labels: Vec<Tensor<S>>,
    /// Chained features without noise, for the held-out error.
    chained: Vec<Tensor<S>>,
    feature_std: f64,
}

struct KvSamples<S: Scalar> {
    /// Rotated cache layers after mixing and noise, `[k0, v0, k1, v1]`.
    xs: Vec<[Tensor<S>; 4]>,
    qs: Vec<Vec<f64>>,
    labels: Vec<Tensor<S>>,
    /// Chained rotated layers without noise.
    chained: Vec<[Tensor<S>; 4]>,
    feature_std: f64,
}

fn global_std(sums: (f64, f64, usize)) -> f64 {
    let (s, s2, n) = sums;
    let n = n.max(1) as f64;
    let mean = s / n;
    (s2 / n - mean * mean).max(0.0).sqrt()
}

fn accumulate<S: Scalar>(acc: &mut (f64, f64, usize), t: &Tensor<S>) {
    for v in t.data() {
        let x = v.to_f64_c();
        acc.0 += x;
        acc.1 += x * x;
        acc.2 += 1;
    }
}

/// Adapt a feature-pathway head on a feature dataset.
fn feature_samples<S: Scalar>(
    policy: &Policy<S>,
    params: &BridgeParams<S>,
    ds: &Dataset,
    cfg: &LoraConfig,
) -> Result<FeatureSamples<S>, PipelineError> {
    let d = &ds.header.dims;
    let mut mask = vec![false; d.tokens];
    mask[..d.n_img].fill(true);
    let img_mask = vec![true; d.n_img];
    let img_rows: Vec<usize> = (0..d.n_img).collect();

    let mut clean = Vec::with_capacity(ds.len());
    let mut chained = Vec::with_capacity(ds.len());
    let mut labels = Vec::with_capacity(ds.len());
    let mut acc = (0.0, 0.0, 0usize);
    for i in 0..ds.len() {
        let v: FeatureView<S> = ds.feature_view(i)?;
        let clean_feat = heads::pool_features(&v.target, &mask);
        let z_img = v.input.take_rows(&img_rows);
        let delta = bridge::bridge_forward(
            params,
            &BridgeInput {
                z_img: &z_img,
                s: &v.s,
                q: &v.q,
                a_prev: &v.a_prev,
            },
        )?;
        let pred_feat = heads::pool_features(&z_img.add(&delta), &img_mask);
        let label = match &policy.head {
            ActionHead::Regression(store) => {
                let x = Tensor::hstack(&[&clean_feat, &Tensor::row_from_f64(&v.q)])?;
                heads::mlp3_eval(store, &x)?
            }
            ActionHead::Flow { store, steps } => {
                let zero = Tensor::zeros(1, d.action_dim);
                heads::flow_denoise(store, &clean_feat, &v.q, &zero, *steps)?
            }
            ActionHead::KvReadout { .. } => {
                return Err(PipelineError::Variant(
                    "cache read-out head over a feature dataset".into(),
                ))
            }
        };
        accumulate(&mut acc, &clean_feat);
        chained.push(Tensor::hstack(&[&pred_feat, &Tensor::row_from_f64(&v.q)])?);
        clean.push(Tensor::hstack(&[&clean_feat, &Tensor::row_from_f64(&v.q)])?);
        labels.push(label);
    }
    let feature_std = global_std(acc);

    let mut mix = stream(cfg.seed, "lora_mix", 0);
    let mut noise = stream(cfg.seed, "lora_noise", 0);
    let scale = cfg.noise_std * feature_std;
    let feat_cols = d.d_model;
    let mut xs = Vec::with_capacity(ds.len());
    for i in 0..ds.len() {
        let mut x = if mix.gen_bool(0.5) {
            chained[i].clone()
        } else {
            clean[i].clone()
        };
        // Proprio stays exact; only the representation half is perturbed.
        let n = normal_vec(&mut noise, feat_cols);
        for (j, nj) in n.iter().enumerate() {
            let v = x.get(0, j);
            x.set(0, j, v + sc::<S>(nj * scale));
        }
        xs.push(x);
    }
    Ok(FeatureSamples {
        xs,
        labels,
        chained,
        feature_std,
    })
}

fn kv_samples<S: Scalar>(
    policy: &Policy<S>,
    params: &KvBridgeParams<S>,
    ds: &Dataset,
    cfg: &LoraConfig,
) -> Result<KvSamples<S>, PipelineError> {
    let head_cfg = match &policy.head {
        ActionHead::KvReadout { cfg, .. } => cfg.clone(),
        _ => {
            return Err(PipelineError::Variant(
                "feature head over a cache dataset".into(),
            ))
        }
    };
    let [l0, l1] = head_cfg.cache_layers;
    let table = &policy.backbone.rope;
    let pick = |c: &KvCacheSnapshot<S>| -> [Tensor<S>; 4] {
        [
            c.k[l0].clone(),
            c.v[l0].clone(),
            c.k[l1].clone(),
            c.v[l1].clone(),
        ]
    };

    let mut clean = Vec::with_capacity(ds.len());
    let mut chained = Vec::with_capacity(ds.len());
    let mut labels = Vec::with_capacity(ds.len());
    let mut qs = Vec::with_capacity(ds.len());
    let mut acc = (0.0, 0.0, 0usize);
    for i in 0..ds.len() {
        let v: KvView<S> = ds.kv_view(i)?;
        let input = unflatten_cache(&v.input_flat, &params.cfg)?;
        let emb = EmbeddingPair {
            e: v.e.clone(),
            delta_e: v.delta_e.clone(),
        };
        let deltas = kv_bridge_forward(params, &emb, &input, &v.q, &v.a_prev)?;
        let pred_rot = rotate_cache(&chain_kv_delta(&input, &deltas)?, table)?;
        let clean_rot = rotate_cache(&unflatten_cache(&v.target_flat, &params.cfg)?, table)?;
        let label = policy.act_from_cache(
            [&clean_rot.k[l0], &clean_rot.k[l1]],
            [&clean_rot.v[l0], &clean_rot.v[l1]],
            &v.q,
        )?;
        let cl = pick(&clean_rot);
        for t in &cl {
            accumulate(&mut acc, t);
        }
        clean.push(cl);
        chained.push(pick(&pred_rot));
        labels.push(Tensor::row_from_f64(&label));
        qs.push(v.q);
    }
    let feature_std = global_std(acc);

    let mut mix = stream(cfg.seed, "lora_mix", 0);
    let mut noise = stream(cfg.seed, "lora_noise", 0);
    let scale = cfg.noise_std * feature_std;
    let mut xs = Vec::with_capacity(ds.len());
    for i in 0..ds.len() {
        let mut x = if mix.gen_bool(0.5) {
            chained[i].clone()
        } else {
            clean[i].clone()
        };
        for t in &mut x {
            let n = normal_vec(&mut noise, t.numel());
            for (v, nj) in t.data_mut().iter_mut().zip(n) {
                *v = *v + sc::<S>(nj * scale);
            }
        }
        xs.push(x);
    }
    Ok(KvSamples {
        xs,
        qs,
        labels,
        chained,
        feature_std,
    })
}

fn split(n: usize) -> (Vec<usize>, Vec<usize>) {
    let mut train = Vec::new();
    let mut eval = Vec::new();
    for i in 0..n {
        if i % EVAL_STRIDE == 0 {
            eval.push(i);
        } else {
            train.push(i);
        }
    }
    (train, eval)
}

/// Freeze the policy's action head and train low-rank factors so its actions
/// survive predictor-chained representations. Targets are the head's own
/// actions on clean representations, so an already-robust head has nothing
/// to unlearn.
pub fn lora_adapt<S: Scalar>(
    policy: &Policy<S>,
    predictor: &BridgeKind<S>,
    ds: &Dataset,
    cfg: &LoraConfig,
) -> Result<(LoraAdapter<S>, LoraReport), PipelineError> {
    match (predictor, ds.header.variant) {
        (BridgeKind::Feature(p), DatasetVariant::Feature) => feature_adapt(policy, p, ds, cfg),
        (BridgeKind::Kv(p), DatasetVariant::Kv) => kv_adapt(policy, p, ds, cfg),
        (_, v) => Err(PipelineError::Variant(format!(
            "predictor kind does not match a {v} dataset"
        ))),
    }
}

fn head_store<S: Scalar>(head: &ActionHead<S>) -> &ParamStore<S> {
    match head {
        ActionHead::Regression(store) => store,
        ActionHead::Flow { store, .. } => store,
        ActionHead::KvReadout { store, .. } => store,
    }
}

fn feature_adapt<S: Scalar>(
    policy: &Policy<S>,
    params: &BridgeParams<S>,
    ds: &Dataset,
    cfg: &LoraConfig,
) -> Result<(LoraAdapter<S>, LoraReport), PipelineError> {
    let base = head_store(&policy.head);
    let names = adapted_names(base, cfg.rank)?;
    let mut adapter = init_factors(base, &names, cfg.rank, cfg.seed);
    let samples = feature_samples(policy, params, ds, cfg)?;
    let (train, eval) = split(samples.xs.len());
    if train.is_empty() {
        return Err(PipelineError::Data("no adaptation records".into()));
    }

    let flow_steps = match &policy.head {
        ActionHead::Flow { steps, .. } => Some(*steps),
        _ => None,
    };
    let forward = |tape: &mut Tape<S>, bound: &BoundParams, x: NodeId| -> Result<NodeId, PipelineError> {
        match flow_steps {
            None => Ok(heads::mlp3_forward(tape, bound, x)?),
            Some(steps) => {
                // Deterministic deployment path: integrate from the zero
                // point with the adapted field.
                let rows = tape.value(x).rows();
                let action_dim = base.get("w3")?.cols();
                let mut pos = tape.leaf(Tensor::zeros(rows, action_dim));
                for k in 0..steps {
                    let t = k as f64 / steps as f64;
                    let times = Tensor::filled(rows, 1, sc::<S>(t));
                    let d = heads::flow_displacement_tape(tape, bound, pos, &times, x)?;
                    let ds = tape.scale(d, sc::<S>(1.0 / (steps - k) as f64));
                    pos = tape.add(pos, ds)?;
                }
                Ok(pos)
            }
        }
    };

    let hyper = AdamHyper {
        weight_decay: 0.0,
        ..AdamHyper::default()
    };
    let mut opt = AdamW::new(&adapter.factors, hyper);
    for epoch in 0..cfg.epochs {
        let mut order = train.clone();
        order.shuffle(&mut stream(cfg.seed, "lora_shuffle", epoch as u64));
        for chunk in order.chunks(cfg.batch_size) {
            let x_rows: Vec<&Tensor<S>> = chunk.iter().map(|&i| &samples.xs[i]).collect();
            let y_rows: Vec<&Tensor<S>> = chunk.iter().map(|&i| &samples.labels[i]).collect();
            let mut tape = Tape::new();
            let (bound, fac) = bind_adapted(&mut tape, base, &adapter)?;
            let x = tape.leaf(Tensor::vstack(&x_rows)?);
            let y = tape.leaf(Tensor::vstack(&y_rows)?);
            let pred = forward(&mut tape, &bound, x)?;
            let loss = tape.mse_mean(pred, y)?;
            let loss_val = tape.value(loss).get(0, 0).to_f64_c();
            if !loss_val.is_finite() {
                return Err(PipelineError::Numeric(format!(
                    "adapter loss {loss_val} at epoch {epoch}"
                )));
            }
            let grads = tape.backward(loss)?;
            let mut gm = GradMap::new();
            fac.pull(&grads, &mut gm);
            opt.step(&mut adapter.factors, &gm, cfg.lr)?;
        }
    }

    let eval_mse = |store: &ParamStore<S>| -> Result<f64, PipelineError> {
        let mut sum = 0.0;
        let mut n = 0usize;
        for &i in &eval {
            let x = &samples.chained[i];
            let out = match flow_steps {
                None => heads::mlp3_eval(store, x)?,
                Some(steps) => {
                    let feat = x.take_cols(0, ds.header.dims.d_model)?;
                    let q: Vec<f64> = x.row(0)[ds.header.dims.d_model..]
                        .iter()
                        .map(|v| v.to_f64_c())
                        .collect();
                    let zero = Tensor::zeros(1, ds.header.dims.action_dim);
                    heads::flow_denoise(store, &feat, &q, &zero, steps)?
                }
            };
            for (a, b) in out.data().iter().zip(samples.labels[i].data()) {
                let d = a.to_f64_c() - b.to_f64_c();
                sum += d * d;
                n += 1;
            }
        }
        Ok(sum / n.max(1) as f64)
    };
    let mse_before = eval_mse(base)?;
    let merged = apply_lora(base, &adapter)?;
    let mse_after = eval_mse(&merged)?;

    Ok((
        adapter,
        LoraReport {
            mse_before,
            mse_after,
            feature_std: samples.feature_std,
            train_records: train.len(),
            eval_records: eval.len(),
        },
    ))
}

fn kv_adapt<S: Scalar>(
    policy: &Policy<S>,
    params: &KvBridgeParams<S>,
    ds: &Dataset,
    cfg: &LoraConfig,
) -> Result<(LoraAdapter<S>, LoraReport), PipelineError> {
    let (base, head_cfg) = match &policy.head {
        ActionHead::KvReadout { store, cfg } => (store, cfg.clone()),
        _ => {
            return Err(PipelineError::Variant(
                "feature head over a cache dataset".into(),
            ))
        }
    };
    let names = adapted_names(base, cfg.rank)?;
    let mut adapter = init_factors(base, &names, cfg.rank, cfg.seed);
    let samples = kv_samples(policy, params, ds, cfg)?;
    let (train, eval) = split(samples.xs.len());
    if train.is_empty() {
        return Err(PipelineError::Data("no adaptation records".into()));
    }
    let table = &policy.backbone.rope;

    let hyper = AdamHyper {
        weight_decay: 0.0,
        ..AdamHyper::default()
    };
    let mut opt = AdamW::new(&adapter.factors, hyper);
    for epoch in 0..cfg.epochs {
        let mut order = train.clone();
        order.shuffle(&mut stream(cfg.seed, "lora_shuffle", epoch as u64));
        for chunk in order.chunks(cfg.batch_size) {
            let mut tape = Tape::new();
            let (bound, fac) = bind_adapted(&mut tape, base, &adapter)?;
            let mut acc = None;
            for &i in chunk {
                let [k0, v0, k1, v1] = &samples.xs[i];
                let layers = [
                    CacheLeaves {
                        k: tape.leaf(k0.clone()),
                        v: tape.leaf(v0.clone()),
                    },
                    CacheLeaves {
                        k: tape.leaf(k1.clone()),
                        v: tape.leaf(v1.clone()),
                    },
                ];
                let q = tape.leaf(Tensor::row_from_f64(&samples.qs[i]));
                let out = heads::kv_head_forward(&mut tape, &bound, &head_cfg, table, q, &layers)?;
                let y = tape.leaf(samples.labels[i].clone());
                let li = tape.mse_mean(out, y)?;
                acc = Some(match acc {
                    None => li,
                    Some(a) => tape.add(a, li)?,
                });
            }
            let total = acc.expect("chunks are non-empty");
            let loss = tape.scale(total, sc::<S>(1.0 / chunk.len() as f64));
            let loss_val = tape.value(loss).get(0, 0).to_f64_c();
            if !loss_val.is_finite() {
                return Err(PipelineError::Numeric(format!(
                    "adapter loss {loss_val} at epoch {epoch}"
                )));
            }
            let grads = tape.backward(loss)?;
            let mut gm = GradMap::new();
            fac.pull(&grads, &mut gm);
            opt.step(&mut adapter.factors, &gm, cfg.lr)?;
        }
    }

    let eval_mse = |store: &ParamStore<S>| -> Result<f64, PipelineError> {
        let mut sum = 0.0;
        let mut n = 0usize;
        for &i in &eval {
            let [k0, v0, k1, v1] = &samples.chained[i];
            let out = heads::kv_head_eval(
                store,
                &head_cfg,
                table,
                &samples.qs[i],
                [k0, k1],
                [v0, v1],
            )?;
            for (a, b) in out.data().iter().zip(samples.labels[i].data()) {
                let d = a.to_f64_c() - b.to_f64_c();
                sum += d * d;
                n += 1;
            }
        }
        Ok(sum / n.max(1) as f64)
    };
    let mse_before = eval_mse(base)?;
    let merged = apply_lora(base, &adapter)?;
    let mse_after = eval_mse(&merged)?;

    Ok((
        adapter,
        LoraReport {
            mse_before,
            mse_after,
            feature_std: samples.feature_std,
            train_records: train.len(),
            eval_records: eval.len(),
        },
    ))
}
