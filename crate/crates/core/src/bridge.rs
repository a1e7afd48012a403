//! Feature-space delta predictor.
//!
//! A small conditioned transformer that runs between backbone calls and
//! predicts how the image-token rows of the representation move from one
//! step to the next. It self-attends over the image rows, cross-attends to
//! the stable context snapshot from the last backbone call, and is modulated
//! by an embedding of the current proprio state and previous action. Both the
//! output projection and the modulation gates start at exact zero, so an
//! untrained predictor reproduces feature caching: delta is the zero matrix.
//!
//! Text rows never pass through the predictor. They are copied verbatim from
//! the last backbone call by [`apply_delta`], and the training loss masks
//! them out so their gradient is exactly zero.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rng::stream;
use crate::scalar::{sc, Scalar};
use crate::tensorkit::{
    load_checkpoint, save_checkpoint, BoundParams, NodeId, ParamStore, Tape, Tensor, TensorError,
};

#[derive(Debug, Error)]
pub enum BridgeError {
    #[error("input does not match the predictor manifest: {0}")]
    Manifest(String),
    #[error("image mask selects no rows")]
    EmptyMask,
    #[error("alpha must be non-negative, got {0}")]
    BadAlpha(f64),
    #[error("checkpoint: {0}")]
    Format(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// Which refinement pass produced a set of weights.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum TrainStage {
    R0,
    R1,
}

impl std::fmt::Display for TrainStage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            TrainStage::R0 => "R0",
            TrainStage::R1 => "R1",
        })
    }
}

impl std::str::FromStr for TrainStage {
    type Err = BridgeError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "R0" => Ok(TrainStage::R0),
            "R1" => Ok(TrainStage::R1),
            other => Err(BridgeError::Format(format!("unknown stage {other:?}"))),
        }
    }
}

// ---------------------------------------------------------------------------
// configuration and parameters
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BridgeConfig {
    /// Image-token rows the predictor operates on.
    pub n_img: usize,
    /// Rows in the stable context snapshot (full token count of the encoder).
    pub ctx_rows: usize,
    /// Width of the representation being predicted.
    pub d_model: usize,
    /// Internal width of the predictor.
    pub d_b: usize,
    pub blocks: usize,
    pub heads: usize,
    pub mlp_hidden: usize,
    pub cond_hidden: usize,
    pub q_dim: usize,
    pub action_dim: usize,
    /// Weight of the per-row cosine term in the training loss.
    pub alpha: f64,
}

impl Default for BridgeConfig {
    fn default() -> Self {
        BridgeConfig {
            n_img: 8,
            ctx_rows: 10,
            d_model: 32,
            d_b: 32,
            blocks: 2,
            heads: 4,
            mlp_hidden: 128,
            cond_hidden: 32,
            q_dim: 4,
            action_dim: 2,
            alpha: 1.0,
        }
    }
}

impl BridgeConfig {
    pub fn validate(&self) -> Result<(), BridgeError> {
        if self.d_b % self.heads != 0 {
            return Err(BridgeError::Manifest(format!(
                "width {} not divisible by {} heads",
                self.d_b, self.heads
            )));
        }
        if self.n_img == 0 || self.ctx_rows < self.n_img {
            return Err(BridgeError::Manifest(format!(
                "need 0 < n_img <= ctx_rows, got {} and {}",
                self.n_img, self.ctx_rows
            )));
        }
        if self.alpha < 0.0 {
            return Err(BridgeError::BadAlpha(self.alpha));
        }
        Ok(())
    }

    fn cond_dim(&self) -> usize {
        self.q_dim + self.action_dim
    }

    /// Modulation vector width: shift, scale, gate for each of the three
    /// sublayers in every block.
    fn mod_cols(&self) -> usize {
        self.blocks * 9 * self.d_b
    }
}

#[derive(Debug, Clone)]
pub struct BridgeParams<S: Scalar> {
    pub cfg: BridgeConfig,
    pub store: ParamStore<S>,
}

impl<S: Scalar> BridgeParams<S> {
    /// Fresh predictor. The conditioner's output layer and the final
    /// projection are exact zeros, so every modulation gate starts closed and
    /// the forward pass returns the zero matrix.
    pub fn init(cfg: BridgeConfig, seed: u64) -> Result<Self, BridgeError> {
        cfg.validate()?;
        let mut store = ParamStore::new();
        let mut k = 0u64;
        let mut draw = |rows: usize, cols: usize, std: f64| -> Tensor<S> {
            let t = Tensor::randn(&mut stream(seed, "bridge", k), rows, cols, std);
            k += 1;
            t
        };
        let fan = |n: usize| 1.0 / (n as f64).sqrt();

        let ins = |store: &mut ParamStore<S>, name: &str, t: Tensor<S>| {
            store.insert(name, t).expect("unique param names");
        };
        ins(&mut store, "in.w", draw(cfg.d_model, cfg.d_b, fan(cfg.d_model)));
        ins(&mut store, "in.b", Tensor::zeros(1, cfg.d_b));
        ins(&mut store, "pos", draw(cfg.n_img, cfg.d_b, 0.02));
        for j in 0..cfg.blocks {
            let d = cfg.d_b;
            for (nm, rows) in [("self", d), ("cross", cfg.d_model)] {
                // Queries always come from the running state; keys and values
                // come from the state (self) or the context snapshot (cross).
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
        ins(&mut store, "out.w", Tensor::zeros(cfg.d_b, cfg.d_model));
        ins(&mut store, "out.b", Tensor::zeros(1, cfg.d_model));
        Ok(BridgeParams { cfg, store })
    }
}

// ---------------------------------------------------------------------------
// forward
// ---------------------------------------------------------------------------

/// One prediction step's inputs. `s` must be the snapshot from the most
/// recent backbone call, never a predicted matrix.
#[derive(Debug, Clone)]
pub struct BridgeInput<'a, S: Scalar> {
    /// Image-token rows of the most recent representation.
    pub z_img: &'a Tensor<S>,
    /// Stable context, all rows.
    pub s: &'a Tensor<S>,
    pub q: &'a [f64],
    /// Zero vector on the first step of an episode.
    pub a_prev: &'a [f64],
}

/// The image-row slice of a full feature matrix, in mask order.
pub fn image_rows<S: Scalar>(full: &Tensor<S>, mask: &[bool]) -> Result<Tensor<S>, BridgeError> {
    if full.rows() != mask.len() {
        return Err(BridgeError::Manifest(format!(
            "mask covers {} rows, matrix has {}",
            mask.len(),
            full.rows()
        )));
    }
    let idx: Vec<usize> = mask
        .iter()
        .enumerate()
        .filter_map(|(i, &m)| m.then_some(i))
        .collect();
    if idx.is_empty() {
        return Err(BridgeError::EmptyMask);
    }
    Ok(full.take_rows(&idx))
}

/// The complementary slice: rows at unmasked positions.
pub fn text_rows<S: Scalar>(full: &Tensor<S>, mask: &[bool]) -> Result<Tensor<S>, BridgeError> {
    let inverted: Vec<bool> = mask.iter().map(|m| !m).collect();
    image_rows(full, &inverted)
}

pub(crate) fn modulate<S: Scalar>(
    tape: &mut Tape<S>,
    x: NodeId,
    shift: NodeId,
    scale: NodeId,
) -> Result<NodeId, TensorError> {
    let h = tape.layernorm_rows(x);
    let unit_plus = tape.add_const(scale, S::one());
    let h = tape.mul_row(h, unit_plus)?;
    tape.add_row(h, shift)
}

pub(crate) fn attention<S: Scalar>(
    tape: &mut Tape<S>,
    bound: &BoundParams,
    prefix: &str,
    x: NodeId,
    kv_src: NodeId,
    heads: usize,
    head_dim: usize,
) -> Result<NodeId, TensorError> {
    let qf = tape.matmul(x, bound.id(&format!("{prefix}.wq"))?)?;
    let kf = tape.matmul(kv_src, bound.id(&format!("{prefix}.wk"))?)?;
    let vf = tape.matmul(kv_src, bound.id(&format!("{prefix}.wv"))?)?;
    let scale = sc::<S>(1.0 / (head_dim as f64).sqrt());
    let mut outs = Vec::with_capacity(heads);
    for h in 0..heads {
        let qh = tape.slice_cols(qf, h * head_dim, head_dim)?;
        let kh = tape.slice_cols(kf, h * head_dim, head_dim)?;
        let vh = tape.slice_cols(vf, h * head_dim, head_dim)?;
        let kt = tape.transpose(kh);
        let mut scores = tape.matmul(qh, kt)?;
        scores = tape.scale(scores, scale);
        let att = tape.softmax_rows(scores);
        outs.push(tape.matmul(att, vh)?);
    }
    let concat = tape.concat_cols(&outs)?;
    tape.matmul(concat, bound.id(&format!("{prefix}.wo"))?)
}

/// Taped forward pass for training. `z_img` is the image rows, `s` the full
/// context snapshot, `cond` the `1 x (q_dim + action_dim)` row `q ++ a_prev`.
pub fn bridge_forward_tape<S: Scalar>(
    tape: &mut Tape<S>,
    bound: &BoundParams,
    cfg: &BridgeConfig,
    z_img: NodeId,
    s: NodeId,
    cond: NodeId,
) -> Result<NodeId, TensorError> {
    let head_dim = cfg.d_b / cfg.heads;
    let mut x = tape.matmul(z_img, bound.id("in.w")?)?;
    x = tape.add_row(x, bound.id("in.b")?)?;
    x = tape.add(x, bound.id("pos")?)?;

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
        let a = attention(tape, bound, &format!("blk{j}.cross"), h, s, cfg.heads, head_dim)?;
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
    let out = tape.matmul(h, bound.id("out.w")?)?;
    tape.add_row(out, bound.id("out.b")?)
}

/// Deterministic delta prediction. Runs the same graph as the taped builder
/// on a private tape, so training and deployment share one arithmetic path.
pub fn bridge_forward<S: Scalar>(
    params: &BridgeParams<S>,
    input: &BridgeInput<'_, S>,
) -> Result<Tensor<S>, BridgeError> {
    let cfg = &params.cfg;
    if input.z_img.shape() != (cfg.n_img, cfg.d_model) {
        return Err(BridgeError::Manifest(format!(
            "image rows {:?}, manifest wants {:?}",
            input.z_img.shape(),
            (cfg.n_img, cfg.d_model)
        )));
    }
    if input.s.shape() != (cfg.ctx_rows, cfg.d_model) {
        return Err(BridgeError::Manifest(format!(
            "context {:?}, manifest wants {:?}",
            input.s.shape(),
            (cfg.ctx_rows, cfg.d_model)
        )));
    }
    if input.q.len() != cfg.q_dim || input.a_prev.len() != cfg.action_dim {
        return Err(BridgeError::Manifest(format!(
            "conditioning dims ({}, {}), manifest wants ({}, {})",
            input.q.len(),
            input.a_prev.len(),
            cfg.q_dim,
            cfg.action_dim
        )));
    }
    if !input.z_img.is_finite() || !input.s.is_finite() {
        return Err(BridgeError::Manifest("non-finite input features".into()));
    }
    let mut cond = Vec::with_capacity(cfg.cond_dim());
    cond.extend_from_slice(input.q);
    cond.extend_from_slice(input.a_prev);

    let mut tape = Tape::new();
    let bound = BoundParams::bind(&mut tape, &params.store);
    let z = tape.leaf(input.z_img.clone());
    let s = tape.leaf(input.s.clone());
    let c = tape.leaf(Tensor::row_from_f64(&cond));
    let out = bridge_forward_tape(&mut tape, &bound, cfg, z, s, c)?;
    Ok(tape.value(out).clone())
}

/// Advance the full feature matrix by one predicted step. Image rows (all
/// rows above the text block) receive the delta; text rows are replaced by
/// `text_cache` bit for bit, regardless of what the input carried.
pub fn apply_delta<S: Scalar>(
    prev_full: &Tensor<S>,
    delta: &Tensor<S>,
    text_cache: &Tensor<S>,
) -> Result<Tensor<S>, BridgeError> {
    let n_img = delta.rows();
    let n_txt = text_cache.rows();
    if prev_full.rows() != n_img + n_txt
        || prev_full.cols() != delta.cols()
        || prev_full.cols() != text_cache.cols()
    {
        return Err(BridgeError::Manifest(format!(
            "apply_delta shapes: full {:?}, delta {:?}, text {:?}",
            prev_full.shape(),
            delta.shape(),
            text_cache.shape()
        )));
    }
    let mut out = prev_full.clone();
    for i in 0..n_img {
        for (j, v) in out.row_mut(i).iter_mut().enumerate() {
            *v = *v + delta.get(i, j);
        }
    }
    for i in 0..n_txt {
        out.row_mut(n_img + i).copy_from_slice(text_cache.row(i));
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// loss
// ---------------------------------------------------------------------------

/// Taped training loss on full feature matrices: mean squared error over the
/// masked entries plus `alpha` times the mean over masked rows of one minus
/// cosine similarity. Rows outside the mask never enter the graph, so their
/// gradient is exactly zero.
pub fn bridge_loss_tape<S: Scalar>(
    tape: &mut Tape<S>,
    pred_full: NodeId,
    target_full: NodeId,
    mask: &[bool],
    alpha: f64,
) -> Result<NodeId, BridgeError> {
    if alpha < 0.0 {
        return Err(BridgeError::BadAlpha(alpha));
    }
    let idx: Vec<usize> = mask
        .iter()
        .enumerate()
        .filter_map(|(i, &m)| m.then_some(i))
        .collect();
    if idx.is_empty() {
        return Err(BridgeError::EmptyMask);
    }
    let p = tape.gather_rows(pred_full, &idx)?;
    let t = tape.gather_rows(target_full, &idx)?;
    let mse = tape.mse_mean(p, t)?;
    let cos = tape.cos_row_loss_mean(p, t)?;
    let cos = tape.scale(cos, sc::<S>(alpha));
    Ok(tape.add(mse, cos)?)
}

/// Loss value without gradients, same arithmetic as the taped version.
pub fn bridge_loss<S: Scalar>(
    pred_full: &Tensor<S>,
    target_full: &Tensor<S>,
    mask: &[bool],
    alpha: f64,
) -> Result<S, BridgeError> {
    if pred_full.shape() != target_full.shape() || pred_full.rows() != mask.len() {
        return Err(BridgeError::Manifest(format!(
            "loss shapes: pred {:?}, target {:?}, mask {}",
            pred_full.shape(),
            target_full.shape(),
            mask.len()
        )));
    }
    let mut tape = Tape::new();
    let p = tape.leaf(pred_full.clone());
    let t = tape.leaf(target_full.clone());
    let loss = bridge_loss_tape(&mut tape, p, t, mask, alpha)?;
    Ok(tape.value(loss).get(0, 0))
}

// ---------------------------------------------------------------------------
// persistence
// ---------------------------------------------------------------------------

const MODULE: &str = "bridge";

pub fn save_bridge<S: Scalar>(
    path: &std::path::Path,
    params: &BridgeParams<S>,
    stage: TrainStage,
) -> Result<(), BridgeError> {
    let meta = serde_json::json!({
        "config": params.cfg,
        "stage": stage,
    });
    save_checkpoint(&params.store, MODULE, &meta, path)?;
    Ok(())
}

pub fn load_bridge<S: Scalar>(
    path: &std::path::Path,
) -> Result<(BridgeParams<S>, TrainStage), BridgeError> {
    let (store, header) = load_checkpoint::<S>(path)?;
    if header.module != MODULE {
        return Err(BridgeError::Format(format!(
            "checkpoint module {:?}, expected {MODULE:?}",
            header.module
        )));
    }
    let cfg: BridgeConfig = serde_json::from_value(
        header
            .meta
            .get("config")
            .cloned()
            .ok_or_else(|| BridgeError::Format("missing config".into()))?,
    )
    .map_err(|e| BridgeError::Format(e.to_string()))?;
    let stage: TrainStage = serde_json::from_value(
        header
            .meta
            .get("stage")
            .cloned()
            .ok_or_else(|| BridgeError::Format("missing stage".into()))?,
    )
    .map_err(|e| BridgeError::Format(e.to_string()))?;
    cfg.validate()?;
    Ok((BridgeParams { cfg, store }, stage))
}

// ---------------------------------------------------------------------------
