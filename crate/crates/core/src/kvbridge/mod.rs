//! Cache-space delta predictor.
//!
//! The second predictor variant works directly on the encoder's per-layer
//! key/value cache instead of its output features. Each step it sees a cheap
//! fresh vision embedding, the change in that embedding since the last step,
//! the previous cache in pre-rotation coordinates, and the proprio/action
//! conditioning, and emits per-layer key and value deltas. Keys live in the
//! cache post-rotation, so the surrounding machinery inverts the rotary map
//! before predicting and re-applies it afterwards; [`rope`] holds the exact
//! inverse pair and the frame-tagging types that keep the two coordinate
//! systems from mixing.
//!
//! The trunk reuses the conditioned block structure of [`crate::bridge`]: the
//! flattened cache rows are the sequence, the fresh embedding is the
//! cross-attention context, and the embedding delta enters as a residual
//! added to the image-row positions of the trunk input. All per-layer output
//! heads start at exact zero, so an untrained predictor is the copy baseline.

pub mod rope;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::bridge::{attention, modulate, TrainStage};
use crate::rng::stream;
use crate::scalar::Scalar;
use crate::teacher::KvCacheSnapshot;
use crate::tensorkit::{
    load_checkpoint, save_checkpoint, BoundParams, NodeId, ParamStore, Tape, Tensor, TensorError,
};
use rope::{RopeError, RotaryTable};

#[derive(Debug, Error)]
pub enum KvBridgeError {
    #[error("input does not match the predictor manifest: {0}")]
    Manifest(String),
    #[error("cache is in post-rotation coordinates; invert before predicting")]
    RotatedCache,
    #[error("layer counts differ: {got} vs {want}")]
    LayerMismatch { got: usize, want: usize },
    #[error("alpha must be non-negative, got {0}")]
    BadAlpha(f64),
    #[error("checkpoint: {0}")]
    Format(String),
    #[error(transparent)]
    Rope(#[from] RopeError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

// ---------------------------------------------------------------------------
// cheap vision
// ---------------------------------------------------------------------------

/// Seed of the frozen projection standing in for a fast vision encoder.
/// Constant so every component sees the same embedding space.
const CHEAP_VISION_SEED: u64 = 0x76697a;

/// Frozen random projection of the scene-token rows. Deterministic in the
/// input; the weights never train.
pub fn cheap_vision<S: Scalar>(scene_tokens: &Tensor<S>) -> Tensor<S> {
    let d = scene_tokens.cols();
    let w = Tensor::<S>::randn(
        &mut stream(CHEAP_VISION_SEED, "cheap_vision", 0),
        d,
        d,
        1.0 / (d as f64).sqrt(),
    );
    scene_tokens.matmul(&w).expect("square projection matches input width")
}

/// Fresh embedding plus its change since the previous step. At a backbone
/// step the previous embedding refreshes, so the pair is always consistent:
/// `delta_e = e - e_prev` by construction.
#[derive(Debug, Clone)]
pub struct EmbeddingPair<S: Scalar> {
    pub e: Tensor<S>,
    pub delta_e: Tensor<S>,
}

impl<S: Scalar> EmbeddingPair<S> {
    pub fn new(e: Tensor<S>, e_prev: &Tensor<S>) -> Result<Self, KvBridgeError> {
        if e.shape() != e_prev.shape() {
            return Err(KvBridgeError::Manifest(format!(
                "embedding {:?} vs previous {:?}",
                e.shape(),
                e_prev.shape()
            )));
        }
        let delta_e = e.sub(e_prev);
        Ok(EmbeddingPair { e, delta_e })
    }

    /// First step of an episode: no previous embedding, delta is zero.
    pub fn initial(e: Tensor<S>) -> Self {
        let delta_e = Tensor::zeros(e.rows(), e.cols());
        EmbeddingPair { e, delta_e }
    }
}

// ---------------------------------------------------------------------------
// configuration and parameters
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KvBridgeConfig {
    /// Encoder layers whose caches are predicted.
    pub layers: usize,
    /// Prefix rows per layer (token count).
    pub s_rows: usize,
    /// Leading rows of the prefix that receive the embedding-delta residual.
    pub img_rows: usize,
    /// Width of the cheap-vision embedding.
    pub d_e: usize,
    pub d_k: usize,
    pub d_v: usize,
    pub d_b: usize,
    pub blocks: usize,
    pub heads: usize,
    pub mlp_hidden: usize,
    pub cond_hidden: usize,
    pub q_dim: usize,
    pub action_dim: usize,
    pub rope_base: f64,
    pub alpha: f64,
}

impl Default for KvBridgeConfig {
    fn default() -> Self {
        KvBridgeConfig {
            layers: 4,
            s_rows: 10,
            img_rows: 8,
            d_e: 16,
            d_k: 8,
            d_v: 8,
            d_b: 32,
            blocks: 2,
            heads: 4,
            mlp_hidden: 128,
            cond_hidden: 32,
            q_dim: 4,
            action_dim: 2,
            rope_base: 10000.0,
            alpha: 1.0,
        }
    }
}

impl KvBridgeConfig {
    pub fn validate(&self) -> Result<(), KvBridgeError> {
        if self.d_b % self.heads != 0 {
            return Err(KvBridgeError::Manifest(format!(
                "width {} not divisible by {} heads",
                self.d_b, self.heads
            )));
        }
        if self.img_rows > self.s_rows {
            return Err(KvBridgeError::Manifest(format!(
                "{} image rows exceed {} prefix rows",
                self.img_rows, self.s_rows
            )));
        }
        if self.d_k % 2 != 0 {
            return Err(KvBridgeError::Manifest(format!(
                "key width {} must be even for the rotary map",
                self.d_k
            )));
        }
        if self.alpha < 0.0 {
            return Err(KvBridgeError::BadAlpha(self.alpha));
        }
        Ok(())
    }

    /// Columns of one flattened cache row.
    pub fn flat_cols(&self) -> usize {
        self.layers * (self.d_k + self.d_v)
    }

    fn cond_dim(&self) -> usize {
        self.q_dim + self.action_dim
    }

    fn mod_cols(&self) -> usize {
        self.blocks * 9 * self.d_b
    }

    pub fn rotary_table<S: Scalar>(&self) -> Result<RotaryTable<S>, RopeError> {
        RotaryTable::new(self.s_rows, self.d_k, self.rope_base)
    }
}

#[derive(Debug, Clone)]
pub struct KvBridgeParams<S: Scalar> {
    pub cfg: KvBridgeConfig,
    pub store: ParamStore<S>,
}

impl<S: Scalar> KvBridgeParams<S> {
    /// Fresh predictor: conditioner output layer and every per-layer head are
    /// exact zeros, so all deltas start at the zero matrix.
    pub fn init(cfg: KvBridgeConfig, seed: u64) -> Result<Self, KvBridgeError> {
        cfg.validate()?;
        let mut store = ParamStore::new();
        let mut k = 0u64;
        let mut draw = |rows: usize, cols: usize, std: f64| -> Tensor<S> {
            let t = Tensor::randn(&mut stream(seed, "kv_bridge", k), rows, cols, std);
            k += 1;
            t
        };
        let fan = |n: usize| 1.0 / (n as f64).sqrt();
        let ins = |store: &mut ParamStore<S>, name: &str, t: Tensor<S>| {
            store.insert(name, t).expect("unique param names");
        };
        ins(&mut store, "in.w", draw(cfg.flat_cols(), cfg.d_b, fan(cfg.flat_cols())));
        ins(&mut store, "in.b", Tensor::zeros(1, cfg.d_b));
        ins(&mut store, "pos", draw(cfg.s_rows, cfg.d_b, 0.02));
        ins(&mut store, "de.w", draw(cfg.d_e, cfg.d_b, fan(cfg.d_e)));
        ins(&mut store, "de.b", Tensor::zeros(1, cfg.d_b));
        for j in 0..cfg.blocks {
            let d = cfg.d_b;
            for (nm, rows) in [("self", d), ("cross", cfg.d_e)] {
                ins(&mut store, &format!("blk{j}.{nm}.wq"), draw(d, d, fan(d)));
                ins(&mut store, &format!("blk{j}.{nm}.wk"), draw(rows, d, fan(rows)));
                ins(&mut store, &format!("blk{j}.{nm}.wv"), draw(rows, d, fan(rows)));
                ins(&mut store, &format!("blk{j}.{nm}.wo"), draw(d, d, fan(d)));
            }
            ins(&mut store, &format!("blk{j}.mlp.w1"), draw(d, cfg.mlp_hidden, fan(d)));
            ins(&mut store, &format!("blk{j}.mlp.b1"), Tensor::zeros(1, cfg.mlp_hidden));
            ins(
                &mut store,
                &format!("blk{j}.mlp.w2"),
                draw(cfg.mlp_hidden, d, fan(cfg.mlp_hidden)),
            );
            ins(&mut store, &format!("blk{j}.mlp.b2"), Tensor::zeros(1, d));
        }
        ins(
            &mut store,
            "cond.w1",
            draw(cfg.cond_dim(), cfg.cond_hidden, fan(cfg.cond_dim())),
        );
        ins(&mut store, "cond.b1", Tensor::zeros(1, cfg.cond_hidden));
        ins(&mut store, "cond.w2", Tensor::zeros(cfg.cond_hidden, cfg.mod_cols()));
        ins(&mut store, "cond.b2", Tensor::zeros(1, cfg.mod_cols()));
        for l in 0..cfg.layers {
            ins(
                &mut store,
                &format!("head{l}.w"),
                Tensor::zeros(cfg.d_b, cfg.d_k + cfg.d_v),
            );
            ins(&mut store, &format!("head{l}.b"), Tensor::zeros(1, cfg.d_k + cfg.d_v));
        }
        Ok(KvBridgeParams { cfg, store })
    }
}

// ---------------------------------------------------------------------------
// forward
// ---------------------------------------------------------------------------

/// Per-layer key and value deltas in pre-rotation coordinates.
#[derive(Debug, Clone)]
pub struct KvDeltas<S: Scalar> {
    pub k: Vec<Tensor<S>>,
    pub v: Vec<Tensor<S>>,
}

/// Taped forward for training. `flat_kv` is the flattened pre-rotation cache
/// (`s_rows x flat_cols`), `delta_e`/`e` the embedding pair, `cond` the
/// `1 x (q_dim + action_dim)` conditioning row. Returns one
/// `s_rows x (d_k + d_v)` node per layer.
pub fn kv_bridge_forward_tape<S: Scalar>(
    tape: &mut Tape<S>,
    bound: &BoundParams,
    cfg: &KvBridgeConfig,
    flat_kv: NodeId,
    delta_e: NodeId,
    e: NodeId,
    cond: NodeId,
) -> Result<Vec<NodeId>, TensorError> {
    let head_dim = cfg.d_b / cfg.heads;
    let mut x = tape.matmul(flat_kv, bound.id("in.w")?)?;
    x = tape.add_row(x, bound.id("in.b")?)?;
    x = tape.add(x, bound.id("pos")?)?;

    let mut de = tape.matmul(delta_e, bound.id("de.w")?)?;
    de = tape.add_row(de, bound.id("de.b")?)?;
    let img_idx: Vec<usize> = (0..cfg.img_rows).collect();
    x = tape.scatter_add_rows(x, de, &img_idx)?;

    let mut c = tape.matmul(cond, bound.id("cond.w1")?)?;
    c = tape.add_row(c, bound.id("cond.b1")?)?;
    c = tape.tanh(c);
    c = tape.matmul(c, bound.id("cond.w2")?)?;
    c = tape.add_row(c, bound.id("cond.b2")?)?;

    for j in 0..cfg.blocks {
        let base = j * 9 * cfg.d_b;
        let part = |tape: &mut Tape<S>, i: usize| {
            tape.slice_cols(c, base + i * cfg.d_b, cfg.d_b)
        };
        let (sh1, sc1, g1) = (part(tape, 0)?, part(tape, 1)?, part(tape, 2)?);
        let (sh2, sc2, g2) = (part(tape, 3)?, part(tape, 4)?, part(tape, 5)?);
        let (sh3, sc3, g3) = (part(tape, 6)?, part(tape, 7)?, part(tape, 8)?);

        let h = modulate(tape, x, sh1, sc1)?;
        let a = attention(tape, bound, &format!("blk{j}.self"), h, h, cfg.heads, head_dim)?;
        let a = tape.mul_row(a, g1)?;
        x = tape.add(x, a)?;

        let h = modulate(tape, x, sh2, sc2)?;
        let a = attention(tape, bound, &format!("blk{j}.cross"), h, e, cfg.heads, head_dim)?;
        let a = tape.mul_row(a, g2)?;
        x = tape.add(x, a)?;

        let h = modulate(tape, x, sh3, sc3)?;
        let mut m = tape.matmul(h, bound.id(&format!("blk{j}.mlp.w1"))?)?;
        m = tape.add_row(m, bound.id(&format!("blk{j}.mlp.b1"))?)?;
        m = tape.tanh(m);
        m = tape.matmul(m, bound.id(&format!("blk{j}.mlp.w2"))?)?;
        m = tape.add_row(m, bound.id(&format!("blk{j}.mlp.b2"))?)?;
        let m = tape.mul_row(m, g3)?;
        x = tape.add(x, m)?;
    }

    let h = tape.layernorm_rows(x);
    let mut outs = Vec::with_capacity(cfg.layers);
    for l in 0..cfg.layers {
        let o = tape.matmul(h, bound.id(&format!("head{l}.w"))?)?;
        outs.push(tape.add_row(o, bound.id(&format!("head{l}.b"))?)?);
    }
    Ok(outs)
}

/// Deterministic delta prediction from a pre-rotation cache snapshot. Shares
/// the taped graph, so training and deployment use one arithmetic path.
pub fn kv_bridge_forward<S: Scalar>(
    params: &KvBridgeParams<S>,
    emb: &EmbeddingPair<S>,
    kv_prev: &KvCacheSnapshot<S>,
    q: &[f64],
    a_prev: &[f64],
) -> Result<KvDeltas<S>, KvBridgeError> {
    let cfg = &params.cfg;
    if kv_prev.rope_applied {
        return Err(KvBridgeError::RotatedCache);
    }
    if kv_prev.layers() != cfg.layers {
        return Err(KvBridgeError::LayerMismatch {
            got: kv_prev.layers(),
            want: cfg.layers,
        });
    }
    if emb.e.shape() != (cfg.img_rows, cfg.d_e) || emb.delta_e.shape() != emb.e.shape() {
        return Err(KvBridgeError::Manifest(format!(
            "embedding pair {:?}/{:?}, manifest wants {:?}",
            emb.e.shape(),
            emb.delta_e.shape(),
            (cfg.img_rows, cfg.d_e)
        )));
    }
    if q.len() != cfg.q_dim || a_prev.len() != cfg.action_dim {
        return Err(KvBridgeError::Manifest(format!(
            "conditioning dims ({}, {}), manifest wants ({}, {})",
            q.len(),
            a_prev.len(),
            cfg.q_dim,
            cfg.action_dim
        )));
    }
    let flat = kv_prev.flatten()?;
    if flat.shape() != (cfg.s_rows, cfg.flat_cols()) {
        return Err(KvBridgeError::Manifest(format!(
            "cache {:?}, manifest wants {:?}",
            flat.shape(),
            (cfg.s_rows, cfg.flat_cols())
        )));
    }
    let mut cond = Vec::with_capacity(cfg.cond_dim());
    cond.extend_from_slice(q);
    cond.extend_from_slice(a_prev);

    let mut tape = Tape::new();
    let bound = BoundParams::bind(&mut tape, &params.store);
    let fk = tape.leaf(flat);
    let de = tape.leaf(emb.delta_e.clone());
    let ei = tape.leaf(emb.e.clone());
    let ci = tape.leaf(Tensor::row_from_f64(&cond));
    let outs = kv_bridge_forward_tape(&mut tape, &bound, cfg, fk, de, ei, ci)?;
    let mut k = Vec::with_capacity(cfg.layers);
    let mut v = Vec::with_capacity(cfg.layers);
    for o in outs {
        let full = tape.value(o);
        k.push(full.take_cols(0, cfg.d_k)?);
        v.push(full.take_cols(cfg.d_k, cfg.d_v)?);
    }
    Ok(KvDeltas { k, v })
}

/// Advance a pre-rotation cache by predicted deltas and return the
/// post-rotation snapshot the attention consumer expects: keys re-rotated at
/// their row positions, values untouched by the rotary map.
pub fn apply_kv_delta<S: Scalar>(
    kv_prev: &KvCacheSnapshot<S>,
    deltas: &KvDeltas<S>,
    table: &RotaryTable<S>,
) -> Result<KvCacheSnapshot<S>, KvBridgeError> {
    rotate_cache(&chain_kv_delta(kv_prev, deltas)?, table)
}

/// The unrotated successor cache: deltas added, keys left in the predictor's
/// frame. `apply_kv_delta` is this followed by `rotate_cache`; the runtime
/// keeps both forms so the next prediction can chain on the unrotated one.
pub fn chain_kv_delta<S: Scalar>(
    kv_prev: &KvCacheSnapshot<S>,
    deltas: &KvDeltas<S>,
) -> Result<KvCacheSnapshot<S>, KvBridgeError> {
    if kv_prev.rope_applied {
        return Err(KvBridgeError::RotatedCache);
    }
    if deltas.k.len() != kv_prev.layers() || deltas.v.len() != kv_prev.layers() {
        return Err(KvBridgeError::LayerMismatch {
            got: deltas.k.len().max(deltas.v.len()),
            want: kv_prev.layers(),
        });
    }
    let mut k_out = Vec::with_capacity(kv_prev.layers());
    let mut v_out = Vec::with_capacity(kv_prev.layers());
    for l in 0..kv_prev.layers() {
        if deltas.k[l].shape() != kv_prev.k[l].shape()
            || deltas.v[l].shape() != kv_prev.v[l].shape()
        {
            return Err(KvBridgeError::Manifest(format!(
                "layer {l} delta shapes {:?}/{:?} vs cache {:?}/{:?}",
                deltas.k[l].shape(),
                deltas.v[l].shape(),
                kv_prev.k[l].shape(),
                kv_prev.v[l].shape()
            )));
        }
        k_out.push(kv_prev.k[l].add(&deltas.k[l]));
        v_out.push(kv_prev.v[l].add(&deltas.v[l]));
    }
    Ok(KvCacheSnapshot {
        k: k_out,
        v: v_out,
        rope_applied: false,
    })
}

/// Rotate every key layer to sequence positions `0..rows`. Values pass
/// through untouched.
pub fn rotate_cache<S: Scalar>(
    cache: &KvCacheSnapshot<S>,
    table: &RotaryTable<S>,
) -> Result<KvCacheSnapshot<S>, KvBridgeError> {
    if cache.rope_applied {
        return Err(KvBridgeError::RotatedCache);
    }
    let mut k_out = Vec::with_capacity(cache.layers());
    for k in &cache.k {
        k_out.push(table.apply(k, 0)?);
    }
    Ok(KvCacheSnapshot {
        k: k_out,
        v: cache.v.clone(),
        rope_applied: true,
    })
}

// ---------------------------------------------------------------------------
// loss
// ---------------------------------------------------------------------------

/// Mean over layers of the per-layer row loss: squared error over entries
/// plus `alpha` times mean row (1 - cosine), computed on the concatenated
/// `k ++ v` rows of each layer in pre-rotation coordinates.
pub fn kv_bridge_loss_tape<S: Scalar>(
    tape: &mut Tape<S>,
    pred_layers: &[NodeId],
    target_layers: &[NodeId],
    alpha: f64,
) -> Result<NodeId, KvBridgeError> {
    if alpha < 0.0 {
        return Err(KvBridgeError::BadAlpha(alpha));
    }
    if pred_layers.len() != target_layers.len() || pred_layers.is_empty() {
        return Err(KvBridgeError::LayerMismatch {
            got: pred_layers.len(),
            want: target_layers.len().max(1),
        });
    }
    let mut acc: Option<NodeId> = None;
    for (&p, &t) in pred_layers.iter().zip(target_layers) {
        let mse = tape.mse_mean(p, t)?;
        let cos = tape.cos_row_loss_mean(p, t)?;
        let cos = tape.scale(cos, crate::scalar::sc::<S>(alpha));
        let layer = tape.add(mse, cos)?;
        acc = Some(match acc {
            None => layer,
            Some(a) => tape.add(a, layer)?,
        });
    }
    let total = acc.expect("at least one layer");
    Ok(tape.scale(total, crate::scalar::sc::<S>(1.0 / pred_layers.len() as f64)))
}

/// Loss value without gradients. `pred` and `target` are per-layer
/// `s_rows x (d_k + d_v)` matrices in pre-rotation coordinates.
pub fn kv_bridge_loss<S: Scalar>(
    pred: &[Tensor<S>],
    target: &[Tensor<S>],
    alpha: f64,
) -> Result<S, KvBridgeError> {
    let mut tape = Tape::new();
    let p: Vec<NodeId> = pred.iter().map(|t| tape.leaf(t.clone())).collect();
    let t: Vec<NodeId> = target.iter().map(|t| tape.leaf(t.clone())).collect();
    let loss = kv_bridge_loss_tape(&mut tape, &p, &t, alpha)?;
    Ok(tape.value(loss).get(0, 0))
}

// ---------------------------------------------------------------------------
// persistence
// ---------------------------------------------------------------------------

const MODULE: &str = "kv_bridge";

pub fn save_kv_bridge<S: Scalar>(
    path: &std::path::Path,
    params: &KvBridgeParams<S>,
    stage: TrainStage,
) -> Result<(), KvBridgeError> {
    let meta = serde_json::json!({
        "config": params.cfg,
        "stage": stage,
    });
    save_checkpoint(&params.store, MODULE, &meta, path)?;
    Ok(())
}

pub fn load_kv_bridge<S: Scalar>(
    path: &std::path::Path,
) -> Result<(KvBridgeParams<S>, TrainStage), KvBridgeError> {
    let (store, header) = load_checkpoint::<S>(path)?;
    if header.module != MODULE {
        return Err(KvBridgeError::Format(format!(
            "checkpoint module {:?}, expected {MODULE:?}",
            header.module
        )));
    }
    let cfg: KvBridgeConfig = serde_json::from_value(
        header
            .meta
            .get("config")
            .cloned()
            .ok_or_else(|| KvBridgeError::Format("missing config".into()))?,
    )
    .map_err(|e| KvBridgeError::Format(e.to_string()))?;
    let stage: TrainStage = serde_json::from_value(
        header
            .meta
            .get("stage")
            .cloned()
            .ok_or_else(|| KvBridgeError::Format("missing stage".into()))?,
    )
    .map_err(|e| KvBridgeError::Format(e.to_string()))?;
    cfg.validate()?;
    Ok((KvBridgeParams { cfg, store }, stage))
}

// ---------------------------------------------------------------------------
