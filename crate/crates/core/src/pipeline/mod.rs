//! Predictor training pipeline: synchronous collection, supervised first
//! round, on-policy collection under the deployment schedule, refinement,
//! and low-rank head adaptation.
//!
//! Collection reuses the episode engine's traces so every stored sample is
//! exactly what the runtime computed; the collectors never re-derive
//! representations. Samples are quantized to fp32 at assembly, which makes
//! in-memory training and training from a written file see identical
//! values.

pub mod dataset;
mod lora;

use std::collections::BTreeMap;

use rayon::prelude::*;
use thiserror::Error;

use crate::bridge::{
    self, bridge_forward_tape, bridge_loss_tape, BridgeConfig, BridgeError, BridgeInput,
    BridgeParams,
};
use crate::env::TaskSpec;
use crate::kvbridge::{
    kv_bridge_forward, kv_bridge_forward_tape, kv_bridge_loss_tape, EmbeddingPair, KvBridgeConfig,
    KvBridgeError, KvBridgeParams,
};
use crate::rng::{derive_seed, stream};
use crate::scalar::{sc, Scalar};
use crate::scheduler::{
    run_episode, BridgeKind, EpisodeLog, EpisodeTrace, PolicyBundle, RunOptions, SchedulePolicy,
    SchedulerError,
};
use crate::teacher::bc::BcError;
use crate::tensorkit::{
    clip_grad_norm, cosine_f64, cosine_lr, AdamHyper, AdamW, BoundParams, GradMap, ParamStore,
    Tape, Tensor, TensorError,
};
use rand::seq::SliceRandom;

pub use dataset::{
    concat_datasets, read_dataset, write_dataset, Dataset, DatasetDims, DatasetHeader,
    DatasetVariant, FeatureView, KvView, Record, DATASET_FORMAT, DATASET_VERSION,
};
pub use lora::{adapted_head, apply_lora, lora_adapt, LoraAdapter, LoraConfig, LoraReport};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("dataset header: {0}")]
    Header(String),
    #[error("dataset record {record}: {detail}")]
    Corrupt { record: usize, detail: String },
    #[error("dataset variant: {0}")]
    Variant(String),
    #[error("collecting policy shows gate success {sr:.4}, floor is {floor:.2}")]
    Gate { sr: f64, floor: f64 },
    #[error("collection schedule: {0}")]
    Schedule(String),
    #[error("training data: {0}")]
    Data(String),
    #[error("numeric failure: {0}")]
    Numeric(String),
    #[error("adapter rank: {0}")]
    Rank(String),
    #[error(transparent)]
    Scheduler(#[from] SchedulerError),
    #[error(transparent)]
    Bridge(#[from] BridgeError),
    #[error(transparent)]
    KvBridge(#[from] KvBridgeError),
    #[error(transparent)]
    Policy(#[from] BcError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

// ---------------------------------------------------------------------------
// collection
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct CollectConfig {
    pub episodes: usize,
    pub seed: u64,
    /// Minimum gate success rate the collecting policy must have shown.
    pub gate_floor: f64,
}

impl Default for CollectConfig {
    fn default() -> Self {
        CollectConfig {
            episodes: 100,
            seed: 0,
            gate_floor: 0.9,
        }
    }
}

fn bundle_dims<S: Scalar>(bundle: &PolicyBundle<S>) -> (DatasetVariant, DatasetDims) {
    match &bundle.bridge {
        BridgeKind::Feature(p) => (
            DatasetVariant::Feature,
            DatasetDims {
                tokens: p.cfg.ctx_rows,
                n_img: p.cfg.n_img,
                d_model: p.cfg.d_model,
                layers: 0,
                d_k: 0,
                d_v: 0,
                d_e: 0,
                q_dim: p.cfg.q_dim,
                action_dim: p.cfg.action_dim,
            },
        ),
        BridgeKind::Kv(p) => (
            DatasetVariant::Kv,
            DatasetDims {
                tokens: p.cfg.s_rows,
                n_img: p.cfg.img_rows,
                d_model: 0,
                layers: p.cfg.layers,
                d_k: p.cfg.d_k,
                d_v: p.cfg.d_v,
                d_e: p.cfg.d_e,
                q_dim: p.cfg.q_dim,
                action_dim: p.cfg.action_dim,
            },
        ),
    }
}

fn push_values<S: Scalar>(values: &mut Vec<f32>, parts: &[&Tensor<S>], q: &[f64], a: &[f64]) {
    for p in parts {
        values.extend(p.to_f32_vec());
    }
    values.extend(q.iter().map(|&v| v as f32));
    values.extend(a.iter().map(|&v| v as f32));
}

/// Adjacent-step pairs from episodes driven with the encoder at every step.
/// Each record holds the fresh representation at one step, the fresh
/// representation one step later, and the conditioning observed at the
/// predicted step.
pub fn collect_sync<S: Scalar>(
    bundle: &PolicyBundle<S>,
    spec: &TaskSpec,
    cfg: &CollectConfig,
) -> Result<(Dataset, Vec<EpisodeLog>), PipelineError> {
    collect(bundle, spec, &SchedulePolicy::Sync, cfg)
}

/// On-policy chained samples: the robot follows the deployed schedule at
/// period `f`, and the encoder runs as a pure observer to label every
/// chained step with its fresh target. Actions are untouched by the
/// observer, so the episode stream equals a plain evaluation at the same
/// seeds.
pub fn collect_dagger<S: Scalar>(
    bundle: &PolicyBundle<S>,
    spec: &TaskSpec,
    f: usize,
    cfg: &CollectConfig,
) -> Result<(Dataset, Vec<EpisodeLog>), PipelineError> {
    if f < 2 {
        return Err(PipelineError::Schedule(format!(
            "chained collection needs a period of at least 2, got {f}"
        )));
    }
    collect(bundle, spec, &SchedulePolicy::Fixed { f }, cfg)
}

fn collect<S: Scalar>(
    bundle: &PolicyBundle<S>,
    spec: &TaskSpec,
    schedule: &SchedulePolicy,
    cfg: &CollectConfig,
) -> Result<(Dataset, Vec<EpisodeLog>), PipelineError> {
    if bundle.policy.gate_sr < cfg.gate_floor {
        return Err(PipelineError::Gate {
            sr: bundle.policy.gate_sr,
            floor: cfg.gate_floor,
        });
    }
    let (variant, dims) = bundle_dims(bundle);
    let sync = matches!(schedule, SchedulePolicy::Sync);

    let runs: Vec<Result<(EpisodeLog, Option<EpisodeTrace<S>>), SchedulerError>> = (0..cfg
        .episodes)
        .into_par_iter()
        .map(|e| {
            let ep_seed = derive_seed(cfg.seed, "episode", e as u64);
            run_episode(
                bundle,
                schedule,
                spec,
                ep_seed,
                RunOptions {
                    oracle: false,
                    trace: true,
                },
            )
        })
        .collect();

    let mut logs = Vec::with_capacity(cfg.episodes);
    let mut records = Vec::new();
    for (e, run) in runs.into_iter().enumerate() {
        let (log, trace) = run?;
        logs.push(log);
        let trace = trace.expect("collection always traces");
        match trace {
            EpisodeTrace::Feature(steps) => {
                if sync {
                    for t in 0..steps.len().saturating_sub(1) {
                        let (a, b) = (&steps[t], &steps[t + 1]);
                        let mut values = Vec::with_capacity(dims.record_len(variant));
                        push_values(&mut values, &[&a.input, &b.input, &a.s], &b.q, &b.a_prev);
                        records.push(Record {
                            episode: e as u32,
                            step: (t + 1) as u32,
                            offset: 1,
                            values,
                        });
                    }
                } else {
                    for (t, st) in steps.iter().enumerate() {
                        if st.offset == 0 {
                            continue;
                        }
                        let oracle = st.oracle.as_ref().expect("traced chained steps are labeled");
                        let mut values = Vec::with_capacity(dims.record_len(variant));
                        push_values(&mut values, &[&st.input, oracle, &st.s], &st.q, &st.a_prev);
                        records.push(Record {
                            episode: e as u32,
                            step: t as u32,
                            offset: st.offset as u32,
                            values,
                        });
                    }
                }
            }
            EpisodeTrace::Kv(steps) => {
                if sync {
                    for t in 0..steps.len().saturating_sub(1) {
                        let (a, b) = (&steps[t], &steps[t + 1]);
                        let emb = b.emb.as_ref().expect("traced steps carry embeddings");
                        let (fin, ftg) = (a.input_pre.flatten()?, b.input_pre.flatten()?);
                        let mut values = Vec::with_capacity(dims.record_len(variant));
                        push_values(
                            &mut values,
                            &[&fin, &ftg, &emb.e, &emb.delta_e],
                            &b.q,
                            &b.a_prev,
                        );
                        records.push(Record {
                            episode: e as u32,
                            step: (t + 1) as u32,
                            offset: 1,
                            values,
                        });
                    }
                } else {
                    for (t, st) in steps.iter().enumerate() {
                        if st.offset == 0 {
                            continue;
                        }
                        let oracle = st
                            .oracle_pre
                            .as_ref()
                            .expect("traced chained steps are labeled");
                        let emb = st.emb.as_ref().expect("chained steps carry embeddings");
                        let (fin, ftg) = (st.input_pre.flatten()?, oracle.flatten()?);
                        let mut values = Vec::with_capacity(dims.record_len(variant));
                        push_values(
                            &mut values,
                            &[&fin, &ftg, &emb.e, &emb.delta_e],
                            &st.q,
                            &st.a_prev,
                        );
                        records.push(Record {
                            episode: e as u32,
                            step: t as u32,
                            offset: st.offset as u32,
                            values,
                        });
                    }
                }
            }
        }
    }

    let mut by_offset: BTreeMap<usize, usize> = BTreeMap::new();
    for r in &records {
        *by_offset.entry(r.offset as usize).or_insert(0) += 1;
    }
    let collection_f = match schedule {
        SchedulePolicy::Fixed { f } => *f,
        _ => 1,
    };
    let ds = Dataset {
        header: DatasetHeader {
            format: DATASET_FORMAT.to_string(),
            version: DATASET_VERSION,
            variant,
            dims,
            encoder: bundle.policy.backbone.fingerprint(),
            head: bundle.policy.head.kind().to_string(),
            gate_sr: bundle.policy.gate_sr,
            schedule: schedule.to_string(),
            collection_f,
            seed: cfg.seed,
            episodes: cfg.episodes,
            records: records.len(),
            by_offset,
        },
        records,
    };
    ds.validate()?;
    Ok((ds, logs))
}

// ---------------------------------------------------------------------------
// supervised rounds
// ---------------------------------------------------------------------------

const LONG_HORIZON_LR: f64 = 3e-5;
/// One validation episode out of every this many, chosen by position in the
/// sorted episode list.
const VAL_STRIDE: usize = 10;

#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub clip: f64,
    pub seed: u64,
    /// Refinement on long-horizon mixtures drops the learning rate to a
    /// fixed fine-tuning value instead of `lr`.
    pub long_horizon: bool,
}

impl TrainConfig {
    /// First supervised round at toy scale.
    pub fn r0(variant: DatasetVariant) -> TrainConfig {
        TrainConfig {
            epochs: match variant {
                DatasetVariant::Feature => 50,
                DatasetVariant::Kv => 25,
            },
            batch_size: 64,
            lr: 3e-4,
            weight_decay: 1e-4,
            clip: 1.0,
            seed: 0,
            long_horizon: false,
        }
    }

    /// Refinement round; resumes from a first-round predictor.
    pub fn r1(variant: DatasetVariant) -> TrainConfig {
        TrainConfig {
            epochs: match variant {
                DatasetVariant::Feature => 30,
                DatasetVariant::Kv => 15,
            },
            ..TrainConfig::r0(variant)
        }
    }
}

#[derive(Debug, Clone)]
pub struct EpochStat {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_cosine: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct TrainReport {
    /// Best validation chaining fidelity seen, when a validation split
    /// existed.
    pub best_val_cosine: Option<f64>,
    pub best_epoch: Option<usize>,
    pub history: Vec<EpochStat>,
    pub train_records: usize,
    pub val_records: usize,
}

/// Sorted distinct episodes, every `VAL_STRIDE`-th held out. With fewer than
/// two episodes everything trains and validation is skipped.
fn split_records(ds: &Dataset) -> (Vec<usize>, Vec<usize>) {
    let episodes = ds.episode_ids();
    if episodes.len() < 2 {
        return ((0..ds.len()).collect(), Vec::new());
    }
    let val_eps: std::collections::HashSet<u32> = episodes
        .iter()
        .enumerate()
        .filter_map(|(i, &e)| (i % VAL_STRIDE == 0).then_some(e))
        .collect();
    let mut train = Vec::new();
    let mut val = Vec::new();
    for (i, r) in ds.records.iter().enumerate() {
        if val_eps.contains(&r.episode) {
            val.push(i);
        } else {
            train.push(i);
        }
    }
    (train, val)
}

fn shuffled(idx: &[usize], seed: u64, epoch: usize) -> Vec<usize> {
    let mut order: Vec<usize> = idx.to_vec();
    order.shuffle(&mut stream(seed, "pipeline_shuffle", epoch as u64));
    order
}

/// First supervised round from zero-initialized parameters. The predictor
/// geometry is read off the dataset manifest; with zero epochs the returned
/// parameters are exactly the initializer's output.
pub fn train_r0<S: Scalar>(
    ds: &Dataset,
    cfg: &TrainConfig,
) -> Result<(BridgeKind<S>, TrainReport), PipelineError> {
    ds.validate()?;
    let d = &ds.header.dims;
    match ds.header.variant {
        DatasetVariant::Feature => {
            let bcfg = BridgeConfig {
                n_img: d.n_img,
                ctx_rows: d.tokens,
                d_model: d.d_model,
                q_dim: d.q_dim,
                action_dim: d.action_dim,
                ..BridgeConfig::default()
            };
            let params = BridgeParams::init(bcfg, cfg.seed)?;
            train_feature(params, ds, cfg)
        }
        DatasetVariant::Kv => {
            let bcfg = KvBridgeConfig {
                layers: d.layers,
                s_rows: d.tokens,
                img_rows: d.n_img,
                d_e: d.d_e,
                d_k: d.d_k,
                d_v: d.d_v,
                q_dim: d.q_dim,
                action_dim: d.action_dim,
                ..KvBridgeConfig::default()
            };
            let params = KvBridgeParams::init(bcfg, cfg.seed)?;
            train_kv(params, ds, cfg)
        }
    }
}

/// Refinement: resume from a first-round predictor on the synchronous set
/// concatenated with on-policy chained samples. The resumed weights pass
/// through fp32 first, so refining in process equals refining from the
/// written checkpoint; the best-checkpoint selection starts over.
pub fn train_r1<S: Scalar>(
    r0: &BridgeKind<S>,
    sync: &Dataset,
    dagger: Option<&Dataset>,
    cfg: &TrainConfig,
) -> Result<(BridgeKind<S>, TrainReport), PipelineError> {
    let parts: Vec<&Dataset> = match dagger {
        Some(dg) => vec![sync, dg],
        None => vec![sync],
    };
    refine(r0, &parts, cfg)
}

fn refine<S: Scalar>(
    r0: &BridgeKind<S>,
    parts: &[&Dataset],
    cfg: &TrainConfig,
) -> Result<(BridgeKind<S>, TrainReport), PipelineError> {
    let combined = concat_datasets(parts)?;
    combined.validate()?;
    match (r0, combined.header.variant) {
        (BridgeKind::Feature(p), DatasetVariant::Feature) => {
            let resumed = BridgeParams {
                cfg: p.cfg.clone(),
                store: p.store.quantize_f32(),
            };
            train_feature(resumed, &combined, cfg)
        }
        (BridgeKind::Kv(p), DatasetVariant::Kv) => {
            let resumed = KvBridgeParams {
                cfg: p.cfg.clone(),
                store: p.store.quantize_f32(),
            };
            train_kv(resumed, &combined, cfg)
        }
        (_, v) => Err(PipelineError::Variant(format!(
            "resumed predictor does not match a {v} dataset"
        ))),
    }
}

/// The `{synchronous only, chained only, mixed}` comparison on one resumed
/// predictor. Rows come back in that order.
pub fn mixing_ablation<S: Scalar>(
    r0: &BridgeKind<S>,
    sync: &Dataset,
    dagger: &Dataset,
    cfg: &TrainConfig,
) -> Result<Vec<(String, BridgeKind<S>, TrainReport)>, PipelineError> {
    let runs: [(&str, Vec<&Dataset>); 3] = [
        ("sync_only", vec![sync]),
        ("dagger_only", vec![dagger]),
        ("mixed", vec![sync, dagger]),
    ];
    let mut rows = Vec::with_capacity(3);
    for (name, parts) in runs {
        let (kind, report) = refine(r0, &parts, cfg)?;
        rows.push((name.to_string(), kind, report));
    }
    Ok(rows)
}

fn effective_lr0(cfg: &TrainConfig) -> f64 {
    if cfg.long_horizon {
        LONG_HORIZON_LR
    } else {
        cfg.lr
    }
}

fn train_feature<S: Scalar>(
    mut params: BridgeParams<S>,
    ds: &Dataset,
    cfg: &TrainConfig,
) -> Result<(BridgeKind<S>, TrainReport), PipelineError> {
    let (train, val) = split_records(ds);
    if train.is_empty() {
        return Err(PipelineError::Data("no training records".into()));
    }
    let n_img = params.cfg.n_img;
    let tokens = params.cfg.ctx_rows;
    let img_idx: Vec<usize> = (0..n_img).collect();
    let mut mask = vec![false; tokens];
    mask[..n_img].fill(true);
    let alpha = params.cfg.alpha;

    let hyper = AdamHyper {
        weight_decay: cfg.weight_decay,
        ..AdamHyper::default()
    };
    let mut opt = AdamW::new(&params.store, hyper);
    let lr0 = effective_lr0(cfg);

    let mut history = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(f64, usize, ParamStore<S>)> = None;
    for epoch in 0..cfg.epochs {
        let lr = cosine_lr(epoch as u64, cfg.epochs as u64, lr0);
        let mut epoch_loss = 0.0;
        let mut batches = 0usize;
        for chunk in shuffled(&train, cfg.seed, epoch).chunks(cfg.batch_size) {
            let mut tape = Tape::new();
            let bound = BoundParams::bind(&mut tape, &params.store);
            let mut acc = None;
            for &i in chunk {
                let v: FeatureView<S> = ds.feature_view(i)?;
                let mut cond = v.q.clone();
                cond.extend_from_slice(&v.a_prev);
                let z_in = tape.leaf(v.input);
                let z_tg = tape.leaf(v.target);
                let s_id = tape.leaf(v.s);
                let c_id = tape.leaf(Tensor::row_from_f64(&cond));
                let z_img = tape.gather_rows(z_in, &img_idx)?;
                let delta =
                    bridge_forward_tape(&mut tape, &bound, &params.cfg, z_img, s_id, c_id)?;
                let pred = tape.scatter_add_rows(z_in, delta, &img_idx)?;
                let li = bridge_loss_tape(&mut tape, pred, z_tg, &mask, alpha)?;
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
                    "loss {loss_val} at epoch {epoch}"
                )));
            }
            epoch_loss += loss_val;
            batches += 1;
            let grads = tape.backward(loss)?;
            let mut gm = GradMap::new();
            bound.pull(&grads, &mut gm);
            clip_grad_norm(&mut gm, cfg.clip)?;
            opt.step(&mut params.store, &gm, lr)?;
        }

        let val_cosine = if val.is_empty() {
            None
        } else {
            Some(feature_val_cosine(&params, ds, &val)?)
        };
        if let Some(c) = val_cosine {
            if best.as_ref().map(|(b, _, _)| c > *b).unwrap_or(true) {
                best = Some((c, epoch, params.store.clone()));
            }
        }
        history.push(EpochStat {
            epoch,
            train_loss: epoch_loss / batches.max(1) as f64,
            val_cosine,
        });
    }

    let report = TrainReport {
        best_val_cosine: best.as_ref().map(|(c, _, _)| *c),
        best_epoch: best.as_ref().map(|(_, e, _)| *e),
        history,
        train_records: train.len(),
        val_records: val.len(),
    };
    if let Some((_, _, store)) = best {
        params.store = store;
    }
    Ok((BridgeKind::Feature(params), report))
}

/// Mean per-row cosine between predicted and fresh image rows over a record
/// subset.
fn feature_val_cosine<S: Scalar>(
    params: &BridgeParams<S>,
    ds: &Dataset,
    idx: &[usize],
) -> Result<f64, PipelineError> {
    let n_img = params.cfg.n_img;
    let sums: Result<Vec<(f64, usize)>, PipelineError> = idx
        .par_iter()
        .map(|&i| {
            let v: FeatureView<S> = ds.feature_view(i)?;
            let img_rows: Vec<usize> = (0..n_img).collect();
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
            let pred = z_img.add(&delta);
            let mut sum = 0.0;
            for r in 0..n_img {
                sum += cosine_f64(pred.row(r), v.target.row(r));
            }
            Ok((sum, n_img))
        })
        .collect();
    let mut total = 0.0;
    let mut count = 0usize;
    for (s, c) in sums? {
        total += s;
        count += c;
    }
    Ok(total / count.max(1) as f64)
}

fn train_kv<S: Scalar>(
    mut params: KvBridgeParams<S>,
    ds: &Dataset,
    cfg: &TrainConfig,
) -> Result<(BridgeKind<S>, TrainReport), PipelineError> {
    let (train, val) = split_records(ds);
    if train.is_empty() {
        return Err(PipelineError::Data("no training records".into()));
    }
    let kcfg = params.cfg.clone();
    let lane = kcfg.d_k + kcfg.d_v;
    let alpha = kcfg.alpha;

    let hyper = AdamHyper {
        weight_decay: cfg.weight_decay,
        ..AdamHyper::default()
    };
    let mut opt = AdamW::new(&params.store, hyper);
    let lr0 = effective_lr0(cfg);

    let mut history = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(f64, usize, ParamStore<S>)> = None;
    for epoch in 0..cfg.epochs {
        let lr = cosine_lr(epoch as u64, cfg.epochs as u64, lr0);
        let mut epoch_loss = 0.0;
        let mut batches = 0usize;
        for chunk in shuffled(&train, cfg.seed, epoch).chunks(cfg.batch_size) {
            let mut tape = Tape::new();
            let bound = BoundParams::bind(&mut tape, &params.store);
            let mut acc = None;
            for &i in chunk {
                let v: KvView<S> = ds.kv_view(i)?;
                let mut cond = v.q.clone();
                cond.extend_from_slice(&v.a_prev);
                let f_in = tape.leaf(v.input_flat);
                let f_tg = tape.leaf(v.target_flat);
                let de = tape.leaf(v.delta_e);
                let e = tape.leaf(v.e);
                let c_id = tape.leaf(Tensor::row_from_f64(&cond));
                let outs = kv_bridge_forward_tape(&mut tape, &bound, &kcfg, f_in, de, e, c_id)?;
                let mut tgts = Vec::with_capacity(kcfg.layers);
                for l in 0..kcfg.layers {
                    let tg = tape.slice_cols(f_tg, l * lane, lane)?;
                    let fin = tape.slice_cols(f_in, l * lane, lane)?;
                    tgts.push(tape.sub(tg, fin)?);
                }
                let li = kv_bridge_loss_tape(&mut tape, &outs, &tgts, alpha)?;
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
                    "loss {loss_val} at epoch {epoch}"
                )));
            }
            epoch_loss += loss_val;
            batches += 1;
            let grads = tape.backward(loss)?;
            let mut gm = GradMap::new();
            bound.pull(&grads, &mut gm);
            clip_grad_norm(&mut gm, cfg.clip)?;
            opt.step(&mut params.store, &gm, lr)?;
        }

        let val_cosine = if val.is_empty() {
            None
        } else {
            Some(kv_val_cosine(&params, ds, &val)?)
        };
        if let Some(c) = val_cosine {
            if best.as_ref().map(|(b, _, _)| c > *b).unwrap_or(true) {
                best = Some((c, epoch, params.store.clone()));
            }
        }
        history.push(EpochStat {
            epoch,
            train_loss: epoch_loss / batches.max(1) as f64,
            val_cosine,
        });
    }

    let report = TrainReport {
        best_val_cosine: best.as_ref().map(|(c, _, _)| *c),
        best_epoch: best.as_ref().map(|(_, e, _)| *e),
        history,
        train_records: train.len(),
        val_records: val.len(),
    };
    if let Some((_, _, store)) = best {
        params.store = store;
    }
    Ok((BridgeKind::Kv(params), report))
}

/// Mean per-row cosine between predicted and fresh cache rows, keys and
/// values of every layer weighted alike.
fn kv_val_cosine<S: Scalar>(
    params: &KvBridgeParams<S>,
    ds: &Dataset,
    idx: &[usize],
) -> Result<f64, PipelineError> {
    let kcfg = &params.cfg;
    let lane = kcfg.d_k + kcfg.d_v;
    let sums: Result<Vec<(f64, usize)>, PipelineError> = idx
        .par_iter()
        .map(|&i| {
            let v: KvView<S> = ds.kv_view(i)?;
            let emb = EmbeddingPair {
                e: v.e.clone(),
                delta_e: v.delta_e.clone(),
            };
            let input = unflatten_cache(&v.input_flat, kcfg)?;
            let deltas = kv_bridge_forward(params, &emb, &input, &v.q, &v.a_prev)?;
            let mut sum = 0.0;
            let mut count = 0usize;
            for l in 0..kcfg.layers {
                let tk = v.target_flat.take_cols(l * lane, kcfg.d_k)?;
                let tv = v.target_flat.take_cols(l * lane + kcfg.d_k, kcfg.d_v)?;
                let pk = input.k[l].add(&deltas.k[l]);
                let pv = input.v[l].add(&deltas.v[l]);
                for r in 0..kcfg.s_rows {
                    sum += cosine_f64(pk.row(r), tk.row(r));
                    sum += cosine_f64(pv.row(r), tv.row(r));
                    count += 2;
                }
            }
            Ok((sum, count))
        })
        .collect();
    let mut total = 0.0;
    let mut count = 0usize;
    for (s, c) in sums? {
        total += s;
        count += c;
    }
    Ok(total / count.max(1) as f64)
}

/// Rebuild the per-layer unrotated cache from its flat column layout.
fn unflatten_cache<S: Scalar>(
    flat: &Tensor<S>,
    cfg: &KvBridgeConfig,
) -> Result<crate::teacher::KvCacheSnapshot<S>, PipelineError> {
    let lane = cfg.d_k + cfg.d_v;
    let mut k = Vec::with_capacity(cfg.layers);
    let mut v = Vec::with_capacity(cfg.layers);
    for l in 0..cfg.layers {
        k.push(flat.take_cols(l * lane, cfg.d_k)?);
        v.push(flat.take_cols(l * lane + cfg.d_k, cfg.d_v)?);
    }
    Ok(crate::teacher::KvCacheSnapshot {
        k,
        v,
        rope_applied: false,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scheduler::{evaluate, StepKind};
    use crate::teacher::bc::{ActionHead, BcConfig, PolicyKind};
    use crate::teacher::{Backbone, BackboneConfig};
    use crate::tensorkit::store_hash;

    fn tiny_bc() -> BcConfig {
        BcConfig {
            episodes: 20,
            epochs: 3,
            head_hidden: 32,
            gate_episodes: 10,
            gate_sr: 0.0,
            ..BcConfig::default()
        }
    }

    fn feature_bundle(seed: u64) -> (PolicyBundle<f64>, TaskSpec) {
        let spec = TaskSpec::default();
        let bb: Backbone<f64> = Backbone::new(BackboneConfig::default(), 7).unwrap();
        let policy =
            crate::teacher::bc::train_policy(bb, &spec, PolicyKind::Regression, &tiny_bc(), seed)
                .unwrap();
        let params = BridgeParams::init(BridgeConfig::default(), seed).unwrap();
        (
            PolicyBundle {
                policy,
                bridge: BridgeKind::Feature(params),
            },
            spec,
        )
    }

    fn tiny_collect() -> CollectConfig {
        CollectConfig {
            episodes: 3,
            seed: 5,
            gate_floor: 0.0,
        }
    }

    fn q32(x: f64) -> f64 {
        x as f32 as f64
    }

    #[test]
    fn collection_refuses_a_policy_below_the_gate_floor() {
        let (bundle, spec) = feature_bundle(3);
        let cfg = CollectConfig {
            gate_floor: 2.0,
            ..tiny_collect()
        };
        match collect_sync(&bundle, &spec, &cfg) {
            Err(PipelineError::Gate { .. }) => {}
            other => panic!("expected gate error, got {:?}", other.map(|_| ())),
        }
    }

    #[test]
    fn on_policy_collection_needs_a_real_period() {
        let (bundle, spec) = feature_bundle(3);
        for f in [0usize, 1] {
            match collect_dagger(&bundle, &spec, f, &tiny_collect()) {
                Err(PipelineError::Schedule(_)) => {}
                other => panic!("expected schedule error for f={f}, got {:?}", other.map(|_| ())),
            }
        }
    }

    #[test]
    fn sync_records_restate_the_traced_encoder_outputs() {
        let (bundle, spec) = feature_bundle(3);
        let (ds, logs) = collect_sync(&bundle, &spec, &tiny_collect()).unwrap();
        ds.validate().unwrap();
        assert_eq!(logs.len(), 3);
        assert_eq!(ds.header.by_offset.get(&1), Some(&ds.len()));
        assert_eq!(ds.header.encoder, bundle.policy.backbone.fingerprint());
        assert_eq!(ds.header.head, "regression");
        assert_eq!(ds.header.schedule, "sync");
        assert_eq!(ds.header.collection_f, 1);

        let ep_seed = derive_seed(5, "episode", 1);
        let (_, trace) = run_episode(
            &bundle,
            &SchedulePolicy::Sync,
            &spec,
            ep_seed,
            RunOptions {
                oracle: false,
                trace: true,
            },
        )
        .unwrap();
        let steps = match trace.unwrap() {
            EpisodeTrace::Feature(s) => s,
            EpisodeTrace::Kv(_) => unreachable!(),
        };
        for i in 0..ds.len() {
            if ds.records[i].episode != 1 {
                continue;
            }
            let v: FeatureView<f64> = ds.feature_view(i).unwrap();
            let t = ds.records[i].step as usize;
            assert_eq!(v.offset, 1);
            for r in 0..v.input.rows() {
                for c in 0..v.input.cols() {
                    assert_eq!(v.input.get(r, c), q32(steps[t - 1].input.get(r, c)));
                    assert_eq!(v.target.get(r, c), q32(steps[t].input.get(r, c)));
                    assert_eq!(v.s.get(r, c), q32(steps[t - 1].s.get(r, c)));
                }
            }
            let want_q: Vec<f64> = steps[t].q.iter().map(|&x| q32(x)).collect();
            let want_a: Vec<f64> = steps[t].a_prev.iter().map(|&x| q32(x)).collect();
            assert_eq!(v.q, want_q);
            assert_eq!(v.a_prev, want_a);
        }
    }

    #[test]
    fn on_policy_offset_one_inputs_are_the_fresh_encoder_outputs() {
        let (bundle, spec) = feature_bundle(3);
        let (ds, _) = collect_dagger(&bundle, &spec, 3, &tiny_collect()).unwrap();
        ds.validate().unwrap();
        assert!(ds.header.by_offset.keys().all(|&o| o == 1 || o == 2));
        assert_eq!(ds.header.schedule, "fixed:3");
        assert_eq!(ds.header.collection_f, 3);

        let ep_seed = derive_seed(5, "episode", 0);
        let (_, trace) = run_episode(
            &bundle,
            &"fixed:3".parse().unwrap(),
            &spec,
            ep_seed,
            RunOptions {
                oracle: false,
                trace: true,
            },
        )
        .unwrap();
        let steps = match trace.unwrap() {
            EpisodeTrace::Feature(s) => s,
            EpisodeTrace::Kv(_) => unreachable!(),
        };
        let mut seen_offset_one = 0usize;
        for i in 0..ds.len() {
            if ds.records[i].episode != 0 {
                continue;
            }
            let v: FeatureView<f64> = ds.feature_view(i).unwrap();
            let t = ds.records[i].step as usize;
            let oracle = steps[t].oracle.as_ref().unwrap();
            for r in 0..v.target.rows() {
                for c in 0..v.target.cols() {
                    assert_eq!(v.target.get(r, c), q32(oracle.get(r, c)));
                }
            }
            if v.offset == 1 {
                seen_offset_one += 1;
                assert_eq!(steps[t - 1].kind, StepKind::Vlm);
                for r in 0..v.input.rows() {
                    for c in 0..v.input.cols() {
                        assert_eq!(v.input.get(r, c), q32(steps[t - 1].input.get(r, c)));
                    }
                }
            }
        }
        assert!(seen_offset_one > 0);
    }

    #[test]
    fn collection_leaves_the_action_stream_untouched() {
        let (bundle, spec) = feature_bundle(3);
        let (_, logs) = collect_dagger(&bundle, &spec, 3, &tiny_collect()).unwrap();
        let (plain, _) = evaluate(
            &bundle,
            &"fixed:3".parse().unwrap(),
            &spec,
            3,
            5,
            RunOptions::plain(),
        )
        .unwrap();
        assert_eq!(logs.len(), plain.len());
        for (a, b) in logs.iter().zip(&plain) {
            assert_eq!(a.success, b.success);
            assert_eq!(a.length, b.length);
            assert_eq!(a.steps.len(), b.steps.len());
            for (sa, sb) in a.steps.iter().zip(&b.steps) {
                assert_eq!(sa.action, sb.action);
            }
        }
    }

    #[test]
    fn zero_epoch_training_returns_the_zero_initialized_predictor() {
        let (bundle, spec) = feature_bundle(3);
        let (ds, _) = collect_sync(&bundle, &spec, &tiny_collect()).unwrap();
        let tc = TrainConfig {
            epochs: 0,
            ..TrainConfig::r0(DatasetVariant::Feature)
        };
        let (kind, report) = train_r0(&ds, &tc).unwrap();
        let got = match kind {
            BridgeKind::Feature(p) => p,
            BridgeKind::Kv(_) => unreachable!(),
        };
        let d = &ds.header.dims;
        let want = BridgeParams::init(
            BridgeConfig {
                n_img: d.n_img,
                ctx_rows: d.tokens,
                d_model: d.d_model,
                q_dim: d.q_dim,
                action_dim: d.action_dim,
                ..BridgeConfig::default()
            },
            tc.seed,
        )
        .unwrap();
        assert_eq!(
            store_hash(&got.store, "bridge"),
            store_hash(&want.store, "bridge")
        );
        assert!(report.best_epoch.is_none());
        assert!(report.history.is_empty());
    }

    #[test]
    fn short_training_reports_finite_losses_and_a_validation_score() {
        let (bundle, spec) = feature_bundle(3);
        let (ds, _) = collect_sync(&bundle, &spec, &tiny_collect()).unwrap();
        let tc = TrainConfig {
            epochs: 2,
            ..TrainConfig::r0(DatasetVariant::Feature)
        };
        let (_, report) = train_r0(&ds, &tc).unwrap();
        assert_eq!(report.history.len(), 2);
        assert!(report.history.iter().all(|h| h.train_loss.is_finite()));
        assert!(report.best_val_cosine.is_some());
        assert_eq!(report.train_records + report.val_records, ds.len());
        assert!(report.val_records > 0);
    }

    #[test]
    fn an_empty_on_policy_set_refines_exactly_like_sync_only() {
        let (bundle, spec) = feature_bundle(3);
        let (ds, _) = collect_sync(&bundle, &spec, &tiny_collect()).unwrap();
        let tc = TrainConfig {
            epochs: 1,
            ..TrainConfig::r0(DatasetVariant::Feature)
        };
        let (r0, _) = train_r0(&ds, &tc).unwrap();
        let tc1 = TrainConfig {
            epochs: 1,
            ..TrainConfig::r1(DatasetVariant::Feature)
        };
        let empty = Dataset {
            header: DatasetHeader {
                schedule: "fixed:3".into(),
                collection_f: 3,
                episodes: 0,
                records: 0,
                by_offset: BTreeMap::new(),
                ..ds.header.clone()
            },
            records: Vec::new(),
        };
        let (a, ra) = train_r1(&r0, &ds, None, &tc1).unwrap();
        let (b, rb) = train_r1(&r0, &ds, Some(&empty), &tc1).unwrap();
        let (pa, pb) = match (a, b) {
            (BridgeKind::Feature(x), BridgeKind::Feature(y)) => (x, y),
            _ => unreachable!(),
        };
        assert_eq!(
            store_hash(&pa.store, "bridge"),
            store_hash(&pb.store, "bridge")
        );
        assert_eq!(ra.history.len(), rb.history.len());
        for (ha, hb) in ra.history.iter().zip(&rb.history) {
            assert_eq!(ha.train_loss, hb.train_loss);
        }
    }

    fn foreign_kv_dataset() -> Dataset {
        Dataset {
            header: DatasetHeader {
                format: DATASET_FORMAT.into(),
                version: DATASET_VERSION,
                variant: DatasetVariant::Kv,
                dims: DatasetDims {
                    tokens: 3,
                    n_img: 2,
                    d_model: 0,
                    layers: 2,
                    d_k: 4,
                    d_v: 4,
                    d_e: 4,
                    q_dim: 2,
                    action_dim: 2,
                },
                encoder: "enc".into(),
                head: "kv_readout".into(),
                gate_sr: 1.0,
                schedule: "sync".into(),
                collection_f: 1,
                seed: 0,
                episodes: 0,
                records: 0,
                by_offset: BTreeMap::new(),
            },
            records: Vec::new(),
        }
    }

    #[test]
    fn refinement_rejects_a_dataset_from_the_other_pathway() {
        let (bundle, spec) = feature_bundle(3);
        let (ds, _) = collect_sync(&bundle, &spec, &tiny_collect()).unwrap();
        let tc = TrainConfig {
            epochs: 0,
            ..TrainConfig::r0(DatasetVariant::Feature)
        };
        let (r0, _) = train_r0(&ds, &tc).unwrap();
        let kv = foreign_kv_dataset();
        match train_r1(&r0, &kv, None, &tc) {
            Err(PipelineError::Variant(_)) => {}
            other => panic!("expected variant error, got {:?}", other.map(|_| ())),
        }
        match lora_adapt(
            &bundle.policy,
            &bundle.bridge,
            &kv,
            &LoraConfig::default(),
        ) {
            Err(PipelineError::Variant(_)) => {}
            other => panic!("expected variant error, got {:?}", other.map(|_| ())),
        }
    }

    #[test]
    fn adapter_rank_must_fit_under_some_weight() {
        let (bundle, spec) = feature_bundle(3);
        let (ds, _) = collect_sync(&bundle, &spec, &tiny_collect()).unwrap();
        for rank in [0usize, 1000] {
            match lora_adapt(
                &bundle.policy,
                &bundle.bridge,
                &ds,
                &LoraConfig {
                    rank,
                    ..LoraConfig::default()
                },
            ) {
                Err(PipelineError::Rank(_)) => {}
                other => panic!("expected rank error for {rank}, got {:?}", other.map(|_| ())),
            }
        }
    }

    #[test]
    fn zero_factor_adapter_changes_nothing_and_training_never_hurts() {
        let (bundle, spec) = feature_bundle(3);
        let (ds, _) = collect_sync(&bundle, &spec, &tiny_collect()).unwrap();
        let base = match &bundle.policy.head {
            ActionHead::Regression(s) => s.clone(),
            _ => unreachable!(),
        };
        let (adapter, report) = lora_adapt(
            &bundle.policy,
            &bundle.bridge,
            &ds,
            &LoraConfig {
                epochs: 0,
                ..LoraConfig::default()
            },
        )
        .unwrap();
        let merged = apply_lora(&base, &adapter).unwrap();
        assert_eq!(store_hash(&merged, "head"), store_hash(&base, "head"));
        assert_eq!(report.mse_before, report.mse_after);
        assert!(report.mse_before > 0.0);

        let (_, trained) = lora_adapt(
            &bundle.policy,
            &bundle.bridge,
            &ds,
            &LoraConfig {
                epochs: 4,
                ..LoraConfig::default()
            },
        )
        .unwrap();
        assert!(
            trained.mse_after <= trained.mse_before,
            "after {} before {}",
            trained.mse_after,
            trained.mse_before
        );
    }
}
