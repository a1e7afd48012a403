//! Closed-loop runtime. One engine instance per episode decides at each
//! control step whether to run the full encoder or the delta predictor,
//! maintains the chained representation, and records a step-level log.
//!
//! Both chaining variants share one loop. The feature variant carries the
//! encoder's final hidden states and splices cached text rows back in after
//! every predicted delta. The cache variant carries unrotated key/value
//! pairs, adds predicted deltas in that frame, and re-rotates the keys for
//! the read-out head. An encoder step always resets the chained state to the
//! fresh output; the first step of an episode is always an encoder step.
//!
//! The caching baseline is not a separate code path: it runs the same loop
//! with the predicted delta replaced by an exact zero of the same shape, so
//! an untrained predictor and the baseline produce bit-identical logs.

use std::fmt;
use std::io::{BufRead, Write};
use std::path::Path;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bridge::{self, BridgeError, BridgeInput, BridgeParams};
use crate::env::{Env, EnvError, TaskSpec};
use crate::kvbridge::rope::RotaryTable;
use crate::kvbridge::{
    self, cheap_vision, chain_kv_delta, rotate_cache, EmbeddingPair, KvBridgeError,
    KvBridgeParams, KvDeltas,
};
use crate::rng::derive_seed;
use crate::scalar::Scalar;
use crate::teacher::bc::{ActionHead, BcError, Policy};
use crate::teacher::{KvCacheSnapshot, TeacherError};
use crate::tensorkit::{cosine_f64, Tensor, TensorError};

#[derive(Debug, thiserror::Error)]
pub enum SchedulerError {
    #[error("manifest: {0}")]
    Manifest(String),
    #[error("schedule: {0}")]
    Schedule(String),
    #[error("log: {0}")]
    Log(String),
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error(transparent)]
    Teacher(#[from] TeacherError),
    #[error(transparent)]
    Policy(#[from] BcError),
    #[error(transparent)]
    Bridge(#[from] BridgeError),
    #[error(transparent)]
    KvBridge(#[from] KvBridgeError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

// ---------------------------------------------------------------------------
// schedule policies
// ---------------------------------------------------------------------------

/// When the full encoder runs. `Sync` is `Fixed { f: 1 }` by construction;
/// `Cache` follows the `Fixed` step pattern with the delta forced to zero.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum SchedulePolicy {
    Sync,
    Fixed { f: usize },
    Cache { f: usize },
    PhaseAware(PhaseThresholds),
}

/// Motion-dependent call period: large previous translations pick the short
/// period, near-stationary ones the long period.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhaseThresholds {
    pub tau_nav: f64,
    pub tau_manip: f64,
    pub f_high: usize,
    pub f_med: usize,
    pub f_low: usize,
}

impl PhaseThresholds {
    /// Default thresholds as fractions of the actuation limit; the split
    /// tracks the expert's action-magnitude tertiles on the base task.
    pub fn for_a_max(a_max: f64) -> PhaseThresholds {
        PhaseThresholds {
            tau_nav: 0.5 * a_max,
            tau_manip: 0.15 * a_max,
            f_high: 2,
            f_med: 3,
            f_low: 4,
        }
    }

    fn period_for(&self, a_prev: &[f64]) -> usize {
        let mag = (a_prev[0] * a_prev[0] + a_prev[1] * a_prev[1]).sqrt();
        if mag > self.tau_nav {
            self.f_high
        } else if mag > self.tau_manip {
            self.f_med
        } else {
            self.f_low
        }
    }
}

impl SchedulePolicy {
    pub fn validate(&self) -> Result<(), SchedulerError> {
        match self {
            SchedulePolicy::Sync => Ok(()),
            SchedulePolicy::Fixed { f } | SchedulePolicy::Cache { f } => {
                if *f == 0 {
                    Err(SchedulerError::Schedule("period must be at least 1".into()))
                } else {
                    Ok(())
                }
            }
            SchedulePolicy::PhaseAware(p) => {
                if !(p.tau_nav > p.tau_manip && p.tau_manip > 0.0) {
                    return Err(SchedulerError::Schedule(format!(
                        "thresholds must satisfy tau_nav > tau_manip > 0, got {} / {}",
                        p.tau_nav, p.tau_manip
                    )));
                }
                if p.f_high == 0 || p.f_med == 0 || p.f_low == 0 {
                    return Err(SchedulerError::Schedule("periods must be at least 1".into()));
                }
                Ok(())
            }
        }
    }

    /// True when non-encoder steps consult the trained predictor (as opposed
    /// to reusing the stale representation unchanged).
    pub fn uses_bridge(&self) -> bool {
        matches!(
            self,
            SchedulePolicy::Fixed { .. } | SchedulePolicy::PhaseAware(_)
        )
    }
}

impl fmt::Display for SchedulePolicy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SchedulePolicy::Sync => write!(f, "sync"),
            SchedulePolicy::Fixed { f: p } => write!(f, "fixed:{p}"),
            SchedulePolicy::Cache { f: p } => write!(f, "cache:{p}"),
            SchedulePolicy::PhaseAware(_) => write!(f, "phase"),
        }
    }
}

impl FromStr for SchedulePolicy {
    type Err = SchedulerError;

    /// `sync`, `fixed:F`, `cache:F`, or `phase`. `phase` uses the default
    /// thresholds for a unit actuation limit; callers with another limit
    /// construct the variant directly.
    fn from_str(s: &str) -> Result<SchedulePolicy, SchedulerError> {
        let bad = |d: &str| SchedulerError::Schedule(format!("unrecognized schedule {d:?}"));
        let policy = match s {
            "sync" => SchedulePolicy::Sync,
            "phase" => SchedulePolicy::PhaseAware(PhaseThresholds::for_a_max(1.0)),
            _ => {
                let (kind, period) = s.split_once(':').ok_or_else(|| bad(s))?;
                let f: usize = period.parse().map_err(|_| bad(s))?;
                match kind {
                    "fixed" => SchedulePolicy::Fixed { f },
                    "cache" => SchedulePolicy::Cache { f },
                    _ => return Err(bad(s)),
                }
            }
        };
        policy.validate()?;
        Ok(policy)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum StepKind {
    #[serde(rename = "VLM")]
    Vlm,
    #[serde(rename = "BRIDGE")]
    Bridge,
}

/// Per-episode decision state: how many steps the current representation has
/// chained, and the period in force until the next encoder step.
#[derive(Debug, Clone)]
pub struct ScheduleState {
    /// Steps since the last encoder call; 0 before the first one.
    since: usize,
    /// Period adopted at the last encoder step. Phase-aware switches only
    /// take effect here, so periods are never cut short mid-stride.
    current_f: usize,
}

impl ScheduleState {
    pub fn new() -> ScheduleState {
        ScheduleState {
            since: 0,
            current_f: 1,
        }
    }
}

impl Default for ScheduleState {
    fn default() -> Self {
        ScheduleState::new()
    }
}

impl SchedulePolicy {
    /// One decision per control step, in step order. Returns the step kind
    /// and the offset of the representation the step will act on (0 = fresh).
    pub fn decide(&self, st: &mut ScheduleState, a_prev: &[f64]) -> (StepKind, usize) {
        let period = match self {
            SchedulePolicy::Sync => 1,
            SchedulePolicy::Fixed { f } | SchedulePolicy::Cache { f } => *f,
            SchedulePolicy::PhaseAware(_) => st.current_f,
        };
        if st.since == 0 || st.since >= period {
            if let SchedulePolicy::PhaseAware(p) = self {
                st.current_f = p.period_for(a_prev);
            }
            st.since = 1;
            (StepKind::Vlm, 0)
        } else {
            let offset = st.since;
            st.since += 1;
            (StepKind::Bridge, offset)
        }
    }
}

// ---------------------------------------------------------------------------
// episode logs
// ---------------------------------------------------------------------------

/// One control step. Fidelity fields are present only when the episode ran
/// with the oracle observer enabled.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub t: usize,
    pub kind: StepKind,
    pub offset: usize,
    pub action: Vec<f64>,
    pub q: Vec<f64>,
    /// Mean row cosine of the representation the action used against the
    /// observer's fresh one.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub cos_deploy: Option<f64>,
    /// Same comparison for the unmodified stale representation; what the
    /// caching baseline would have deployed.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub cos_copy: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeLog {
    pub seed: u64,
    pub steps: Vec<StepRecord>,
    pub success: bool,
    pub length: usize,
    pub backbone_calls: usize,
}

/// Terminal JSONL line; separated from `EpisodeLog` so the step records can
/// stream as individual lines.
#[derive(Debug, Serialize, Deserialize)]
struct TerminalLine {
    seed: u64,
    success: bool,
    length: usize,
    backbone_calls: usize,
}

/// One line per step record, then one terminal line per episode.
pub fn write_logs_jsonl(path: &Path, logs: &[EpisodeLog]) -> Result<(), SchedulerError> {
    let file = std::fs::File::create(path)?;
    let mut out = std::io::BufWriter::new(file);
    for log in logs {
        for step in &log.steps {
            serde_json::to_writer(&mut out, step).map_err(|e| SchedulerError::Log(e.to_string()))?;
            out.write_all(b"\n")?;
        }
        let terminal = TerminalLine {
            seed: log.seed,
            success: log.success,
            length: log.length,
            backbone_calls: log.backbone_calls,
        };
        serde_json::to_writer(&mut out, &terminal)
            .map_err(|e| SchedulerError::Log(e.to_string()))?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_logs_jsonl(path: &Path) -> Result<Vec<EpisodeLog>, SchedulerError> {
    let file = std::fs::File::open(path)?;
    let reader = std::io::BufReader::new(file);
    let mut logs = Vec::new();
    let mut steps: Vec<StepRecord> = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let value: serde_json::Value = serde_json::from_str(&line)
            .map_err(|e| SchedulerError::Log(format!("line {}: {e}", idx + 1)))?;
        if value.get("success").is_some() {
            let terminal: TerminalLine = serde_json::from_value(value)
                .map_err(|e| SchedulerError::Log(format!("line {}: {e}", idx + 1)))?;
            logs.push(EpisodeLog {
                seed: terminal.seed,
                steps: std::mem::take(&mut steps),
                success: terminal.success,
                length: terminal.length,
                backbone_calls: terminal.backbone_calls,
            });
        } else {
            let step: StepRecord = serde_json::from_value(value)
                .map_err(|e| SchedulerError::Log(format!("line {}: {e}", idx + 1)))?;
            steps.push(step);
        }
    }
    if !steps.is_empty() {
        return Err(SchedulerError::Log(
            "trailing step records with no terminal line".into(),
        ));
    }
    Ok(logs)
}

// ---------------------------------------------------------------------------
// policy bundle
// ---------------------------------------------------------------------------

/// The trained predictor matching the policy's representation pathway.
#[derive(Debug, Clone)]
pub enum BridgeKind<S: Scalar> {
    Feature(BridgeParams<S>),
    Kv(KvBridgeParams<S>),
}

/// Frozen encoder, gated action head, and the delta predictor that chains
/// between encoder calls.
#[derive(Debug, Clone)]
pub struct PolicyBundle<S: Scalar> {
    pub policy: Policy<S>,
    pub bridge: BridgeKind<S>,
}

impl<S: Scalar> PolicyBundle<S> {
    /// Cross-checks the three manifests once; `run_episode` relies on this
    /// instead of re-validating shapes per step.
    pub fn validate(&self, spec: &TaskSpec) -> Result<(), SchedulerError> {
        let bb = &self.policy.backbone.cfg;
        let fail = |d: String| Err(SchedulerError::Manifest(d));
        if bb.n_img != spec.n_img || bb.n_txt != spec.n_txt || bb.d_obs != spec.d_obs {
            return fail(format!(
                "encoder tokens {}x{}+{} vs task {}x{}+{}",
                bb.n_img, bb.d_obs, bb.n_txt, spec.n_img, spec.d_obs, spec.n_txt
            ));
        }
        match (&self.bridge, &self.policy.head) {
            (BridgeKind::Feature(p), ActionHead::Regression(_))
            | (BridgeKind::Feature(p), ActionHead::Flow { .. }) => {
                let c = &p.cfg;
                if c.n_img != bb.n_img
                    || c.ctx_rows != bb.n_tokens()
                    || c.d_model != bb.d_model
                    || c.action_dim != spec.action_dim
                {
                    return fail(format!(
                        "feature predictor {}x{} over {} context rows vs encoder {}x{}",
                        c.n_img,
                        c.d_model,
                        c.ctx_rows,
                        bb.n_img,
                        bb.d_model
                    ));
                }
                Ok(())
            }
            (BridgeKind::Kv(p), ActionHead::KvReadout { cfg, .. }) => {
                let c = &p.cfg;
                if c.layers != bb.layers
                    || c.s_rows != bb.n_tokens()
                    || c.img_rows != bb.n_img
                    || c.d_e != bb.d_obs
                    || c.d_k != bb.head_dim
                    || c.d_v != bb.head_dim
                    || c.rope_base != bb.rope_base
                    || c.action_dim != spec.action_dim
                {
                    return fail(format!(
                        "cache predictor {} layers of {}+{} vs encoder {} layers of {}+{}",
                        c.layers, c.d_k, c.d_v, bb.layers, bb.head_dim, bb.head_dim
                    ));
                }
                if cfg.cache_layers.iter().any(|&l| l >= bb.layers) {
                    return fail(format!(
                        "read-out layers {:?} exceed encoder depth {}",
                        cfg.cache_layers, bb.layers
                    ));
                }
                Ok(())
            }
            (BridgeKind::Feature(_), ActionHead::KvReadout { .. }) => fail(
                "feature predictor paired with a cache read-out head".into(),
            ),
            (BridgeKind::Kv(_), _) => fail(
                "cache predictor paired with a hidden-state head".into(),
            ),
        }
    }
}

// ---------------------------------------------------------------------------
// per-episode runtime state
// ---------------------------------------------------------------------------

struct FeatureRuntime<S: Scalar> {
    /// Full fresh output of the last encoder call.
    fresh: Tensor<S>,
    /// Stable context captured at the same call.
    s: Tensor<S>,
    /// Text rows captured at the same call; re-spliced after every delta.
    text: Tensor<S>,
    /// Current chained representation, full token matrix.
    chained: Tensor<S>,
}

struct KvRuntime<S: Scalar> {
    /// Chained cache in the unrotated frame.
    pre: KvCacheSnapshot<S>,
    /// Rotated view of `pre`; what the read-out head consumes.
    rot: KvCacheSnapshot<S>,
    /// Rotated cache of the last encoder call, untouched; the copy baseline.
    fresh_rot: KvCacheSnapshot<S>,
    e_prev: Tensor<S>,
}

/// Optional per-step capture for dataset builders and boundary checks. The
/// tensors are exactly the ones the loop used, not recomputations.
#[derive(Debug, Clone)]
pub enum EpisodeTrace<S: Scalar> {
    Feature(Vec<FeatureStepTrace<S>>),
    Kv(Vec<KvStepTrace<S>>),
}

#[derive(Debug, Clone)]
pub struct FeatureStepTrace<S: Scalar> {
    pub kind: StepKind,
    pub offset: usize,
    pub q: Vec<f64>,
    pub a_prev: Vec<f64>,
    /// Full representation entering the step: the fresh output on encoder
    /// steps, the predictor's input on chained steps.
    pub input: Tensor<S>,
    /// Stable context in force at this step.
    pub s: Tensor<S>,
    /// Observer's fresh output for the same observation, when enabled.
    pub oracle: Option<Tensor<S>>,
}

#[derive(Debug, Clone)]
pub struct KvStepTrace<S: Scalar> {
    pub kind: StepKind,
    pub offset: usize,
    pub q: Vec<f64>,
    pub a_prev: Vec<f64>,
    /// Unrotated cache entering the step.
    pub input_pre: KvCacheSnapshot<S>,
    /// Embedding pair observed at this step; the first step pairs the
    /// initial embedding against itself, so its delta is exactly zero.
    pub emb: Option<EmbeddingPair<S>>,
    /// Observer's fresh unrotated cache, when enabled.
    pub oracle_pre: Option<KvCacheSnapshot<S>>,
}

#[derive(Debug, Clone, Copy)]
pub struct RunOptions {
    /// Run the encoder as a pure observer on chained steps and record
    /// per-step fidelity. Never affects actions.
    pub oracle: bool,
    /// Capture per-step representations alongside the log.
    pub trace: bool,
}

impl RunOptions {
    pub fn plain() -> RunOptions {
        RunOptions {
            oracle: false,
            trace: false,
        }
    }

    pub fn oracle() -> RunOptions {
        RunOptions {
            oracle: true,
            trace: false,
        }
    }
}

// ---------------------------------------------------------------------------
// episode execution
// ---------------------------------------------------------------------------

fn mean_row_cosine<S: Scalar>(a: &Tensor<S>, b: &Tensor<S>) -> f64 {
    let mut sum = 0.0;
    for i in 0..a.rows() {
        sum += cosine_f64(a.row(i), b.row(i));
    }
    sum / a.rows() as f64
}

fn cache_cosine<S: Scalar>(a: &KvCacheSnapshot<S>, b: &KvCacheSnapshot<S>) -> f64 {
    let mut sum = 0.0;
    let mut n = 0usize;
    for l in 0..a.layers() {
        for (x, y) in [(&a.k[l], &b.k[l]), (&a.v[l], &b.v[l])] {
            for i in 0..x.rows() {
                sum += cosine_f64(x.row(i), y.row(i));
                n += 1;
            }
        }
    }
    sum / n as f64
}

fn zero_like<S: Scalar>(t: &Tensor<S>) -> Tensor<S> {
    Tensor::zeros(t.rows(), t.cols())
}

/// Run one episode under the given schedule. Deterministic from the seed:
/// the same bundle, schedule, spec, and seed reproduce the log bit for bit,
/// with or without the oracle observer.
pub fn run_episode<S: Scalar>(
    bundle: &PolicyBundle<S>,
    schedule: &SchedulePolicy,
    spec: &TaskSpec,
    seed: u64,
    opts: RunOptions,
) -> Result<(EpisodeLog, Option<EpisodeTrace<S>>), SchedulerError> {
    schedule.validate()?;
    bundle.validate(spec)?;
    let policy = &bundle.policy;
    let mask = spec.image_mask();
    let force_zero = matches!(schedule, SchedulePolicy::Sync | SchedulePolicy::Cache { .. });

    let mut env = Env::reset(spec, seed)?;
    let mut st = ScheduleState::new();
    let mut a_prev = vec![0.0; spec.action_dim];
    let mut steps: Vec<StepRecord> = Vec::new();
    let mut feat_rt: Option<FeatureRuntime<S>> = None;
    let mut kv_rt: Option<KvRuntime<S>> = None;
    let mut feat_trace: Vec<FeatureStepTrace<S>> = Vec::new();
    let mut kv_trace: Vec<KvStepTrace<S>> = Vec::new();
    let mut backbone_calls = 0usize;
    let is_kv = matches!(bundle.bridge, BridgeKind::Kv(_));
    let kv_table: Option<RotaryTable<S>> = match &bundle.bridge {
        BridgeKind::Kv(p) => Some(p.cfg.rotary_table().map_err(KvBridgeError::from)?),
        BridgeKind::Feature(_) => None,
    };

    loop {
        let t = env.step_index();
        let obs = env.observe();
        let tokens: Tensor<S> = obs.all_tokens().cast();
        let (kind, offset) = schedule.decide(&mut st, &a_prev);

        let mut cos_deploy = None;
        let mut cos_copy = None;
        let action: Vec<f64>;

        if is_kv {
            let params = match &bundle.bridge {
                BridgeKind::Kv(p) => p,
                BridgeKind::Feature(_) => unreachable!("variant fixed above"),
            };
            let table = kv_table.as_ref().expect("built for the cache variant");
            let e_now = cheap_vision(&obs.scene_tokens.cast::<S>());
            match kind {
                StepKind::Vlm => {
                    let out = policy.backbone.forward(&tokens)?;
                    backbone_calls += 1;
                    if opts.trace {
                        let emb = match &kv_rt {
                            Some(rt) => EmbeddingPair::new(e_now.clone(), &rt.e_prev)?,
                            None => EmbeddingPair::new(e_now.clone(), &e_now)?,
                        };
                        kv_trace.push(KvStepTrace {
                            kind,
                            offset,
                            q: obs.q.clone(),
                            a_prev: a_prev.clone(),
                            input_pre: out.cache_pre.clone(),
                            emb: Some(emb),
                            oracle_pre: None,
                        });
                    }
                    kv_rt = Some(KvRuntime {
                        pre: out.cache_pre,
                        rot: out.cache.clone(),
                        fresh_rot: out.cache,
                        e_prev: e_now,
                    });
                    if opts.oracle {
                        cos_deploy = Some(1.0);
                        cos_copy = Some(1.0);
                    }
                }
                StepKind::Bridge => {
                    let rt = kv_rt.as_mut().expect("first step is an encoder step");
                    let emb = EmbeddingPair::new(e_now.clone(), &rt.e_prev)?;
                    let deltas = if force_zero {
                        KvDeltas {
                            k: rt.pre.k.iter().map(zero_like).collect(),
                            v: rt.pre.v.iter().map(zero_like).collect(),
                        }
                    } else {
                        kvbridge::kv_bridge_forward(params, &emb, &rt.pre, &obs.q, &a_prev)?
                    };
                    let input_pre = if opts.trace {
                        Some(rt.pre.clone())
                    } else {
                        None
                    };
                    let pre_next = chain_kv_delta(&rt.pre, &deltas)?;
                    let rot_next = rotate_cache(&pre_next, table)?;
                    rt.pre = pre_next;
                    rt.rot = rot_next;
                    rt.e_prev = e_now;
                    let mut oracle_pre = None;
                    if opts.oracle || opts.trace {
                        let out = policy.backbone.forward(&tokens)?;
                        if opts.oracle {
                            cos_deploy = Some(cache_cosine(&rt.rot, &out.cache));
                            cos_copy = Some(cache_cosine(&rt.fresh_rot, &out.cache));
                        }
                        if opts.trace {
                            oracle_pre = Some(out.cache_pre);
                        }
                    }
                    if opts.trace {
                        kv_trace.push(KvStepTrace {
                            kind,
                            offset,
                            q: obs.q.clone(),
                            a_prev: a_prev.clone(),
                            input_pre: input_pre.expect("captured above"),
                            emb: Some(emb),
                            oracle_pre,
                        });
                    }
                }
            }
            let rt = kv_rt.as_ref().expect("set on the first step");
            let head_cfg = match &policy.head {
                ActionHead::KvReadout { cfg, .. } => cfg,
                _ => unreachable!("bundle validation pairs head and predictor"),
            };
            let [l0, l1] = head_cfg.cache_layers;
            action = policy.act_from_cache(
                [&rt.rot.k[l0], &rt.rot.k[l1]],
                [&rt.rot.v[l0], &rt.rot.v[l1]],
                &obs.q,
            )?;
        } else {
            let params = match &bundle.bridge {
                BridgeKind::Feature(p) => p,
                BridgeKind::Kv(_) => unreachable!("variant fixed above"),
            };
            match kind {
                StepKind::Vlm => {
                    let out = policy.backbone.forward(&tokens)?;
                    backbone_calls += 1;
                    let text = bridge::text_rows(&out.z, &mask)?;
                    if opts.trace {
                        feat_trace.push(FeatureStepTrace {
                            kind,
                            offset,
                            q: obs.q.clone(),
                            a_prev: a_prev.clone(),
                            input: out.z.clone(),
                            s: out.s.clone(),
                            oracle: None,
                        });
                    }
                    feat_rt = Some(FeatureRuntime {
                        fresh: out.z.clone(),
                        s: out.s,
                        text,
                        chained: out.z,
                    });
                    if opts.oracle {
                        cos_deploy = Some(1.0);
                        cos_copy = Some(1.0);
                    }
                }
                StepKind::Bridge => {
                    let rt = feat_rt.as_mut().expect("first step is an encoder step");
                    let z_img = bridge::image_rows(&rt.chained, &mask)?;
                    let delta = if force_zero {
                        zero_like(&z_img)
                    } else {
                        bridge::bridge_forward(
                            params,
                            &BridgeInput {
                                z_img: &z_img,
                                s: &rt.s,
                                q: &obs.q,
                                a_prev: &a_prev,
                            },
                        )?
                    };
                    let input = if opts.trace {
                        Some(rt.chained.clone())
                    } else {
                        None
                    };
                    rt.chained = bridge::apply_delta(&rt.chained, &delta, &rt.text)?;
                    let mut oracle = None;
                    if opts.oracle || opts.trace {
                        let out = policy.backbone.forward(&tokens)?;
                        if opts.oracle {
                            let used = bridge::image_rows(&rt.chained, &mask)?;
                            let stale = bridge::image_rows(&rt.fresh, &mask)?;
                            let fresh_img = bridge::image_rows(&out.z, &mask)?;
                            cos_deploy = Some(mean_row_cosine(&used, &fresh_img));
                            cos_copy = Some(mean_row_cosine(&stale, &fresh_img));
                        }
                        if opts.trace {
                            oracle = Some(out.z);
                        }
                    }
                    if opts.trace {
                        feat_trace.push(FeatureStepTrace {
                            kind,
                            offset,
                            q: obs.q.clone(),
                            a_prev: a_prev.clone(),
                            input: input.expect("captured above"),
                            s: rt.s.clone(),
                            oracle,
                        });
                    }
                }
            }
            let rt = feat_rt.as_ref().expect("set on the first step");
            action = policy.act_from_features(&rt.chained, &obs.q, seed, t)?;
        }

        steps.push(StepRecord {
            t,
            kind,
            offset,
            action: action.clone(),
            q: obs.q.clone(),
            cos_deploy,
            cos_copy,
        });
        let outcome = env.step(&action)?;
        a_prev = action;
        if outcome.done {
            break;
        }
    }

    let log = EpisodeLog {
        seed,
        steps,
        success: env.success(),
        length: env.step_index(),
        backbone_calls,
    };
    let trace = if opts.trace {
        Some(if is_kv {
            EpisodeTrace::Kv(kv_trace)
        } else {
            EpisodeTrace::Feature(feat_trace)
        })
    } else {
        None
    };
    Ok((log, trace))
}

// ---------------------------------------------------------------------------
// aggregation
// ---------------------------------------------------------------------------

/// Order-independent reduction over one evaluation batch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalAggregate {
    pub episodes: usize,
    /// Undefined (and flagged) when `episodes` is 0.
    pub success_rate: Option<f64>,
    pub successes: usize,
    /// Mean length over successful episodes only; `None` without successes.
    pub mean_success_length: Option<f64>,
    pub total_steps: usize,
    pub backbone_calls: usize,
    /// Offset -> (mean deployed cosine, count); empty without oracle records.
    pub cosine_by_offset: Vec<(usize, f64, usize)>,
}

pub fn aggregate(logs: &[EpisodeLog]) -> EvalAggregate {
    let episodes = logs.len();
    let successes = logs.iter().filter(|l| l.success).count();
    let total_steps: usize = logs.iter().map(|l| l.length).sum();
    let backbone_calls: usize = logs.iter().map(|l| l.backbone_calls).sum();
    let success_lengths: Vec<usize> = logs
        .iter()
        .filter(|l| l.success)
        .map(|l| l.length)
        .collect();
    let mut by_offset: std::collections::BTreeMap<usize, (f64, usize)> =
        std::collections::BTreeMap::new();
    for log in logs {
        for step in &log.steps {
            if let Some(c) = step.cos_deploy {
                let e = by_offset.entry(step.offset).or_insert((0.0, 0));
                e.0 += c;
                e.1 += 1;
            }
        }
    }
    EvalAggregate {
        episodes,
        success_rate: if episodes == 0 {
            None
        } else {
            Some(successes as f64 / episodes as f64)
        },
        successes,
        mean_success_length: if success_lengths.is_empty() {
            None
        } else {
            Some(success_lengths.iter().sum::<usize>() as f64 / success_lengths.len() as f64)
        },
        total_steps,
        backbone_calls,
        cosine_by_offset: by_offset
            .into_iter()
            .map(|(o, (s, n))| (o, s / n as f64, n))
            .collect(),
    }
}

/// Evaluate over derived episode seeds, episodes in parallel. Logs come back
/// in seed order regardless of completion order.
pub fn evaluate<S: Scalar>(
    bundle: &PolicyBundle<S>,
    schedule: &SchedulePolicy,
    spec: &TaskSpec,
    n_episodes: usize,
    seed: u64,
    opts: RunOptions,
) -> Result<(Vec<EpisodeLog>, EvalAggregate), SchedulerError> {
    let logs: Result<Vec<EpisodeLog>, SchedulerError> = (0..n_episodes)
        .into_par_iter()
        .map(|e| {
            let ep_seed = derive_seed(seed, "episode", e as u64);
            run_episode(bundle, schedule, spec, ep_seed, opts).map(|(log, _)| log)
        })
        .collect();
    let logs = logs?;
    let agg = aggregate(&logs);
    Ok((logs, agg))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bridge::BridgeConfig;
    use crate::kvbridge::KvBridgeConfig;
    use crate::teacher::bc::{BcConfig, PolicyKind};
    use crate::teacher::{Backbone, BackboneConfig};

    fn pattern(policy: &SchedulePolicy, steps: usize, a_prev: &[f64]) -> Vec<StepKind> {
        let mut st = ScheduleState::new();
        (0..steps).map(|_| policy.decide(&mut st, a_prev).0).collect()
    }

    #[test]
    fn fixed_three_repeats_encoder_then_two_chained_steps() {
        use StepKind::*;
        let p: SchedulePolicy = "fixed:3".parse().unwrap();
        assert_eq!(pattern(&p, 6, &[0.0, 0.0]), vec![Vlm, Bridge, Bridge, Vlm, Bridge, Bridge]);
        let calls = pattern(&p, 10, &[0.0, 0.0])
            .iter()
            .filter(|k| **k == Vlm)
            .count();
        assert_eq!(calls, 10usize.div_ceil(3));
    }

    #[test]
    fn sync_and_fixed_one_always_call_the_encoder() {
        for s in ["sync", "fixed:1", "cache:1"] {
            let p: SchedulePolicy = s.parse().unwrap();
            assert!(pattern(&p, 5, &[0.0, 0.0]).iter().all(|k| *k == StepKind::Vlm));
        }
    }

    #[test]
    fn phase_period_follows_the_previous_translation_magnitude() {
        let p = SchedulePolicy::PhaseAware(PhaseThresholds::for_a_max(1.0));
        // Large motion from the start: the short period applies immediately.
        let mut st = ScheduleState::new();
        let fast = [0.9, 0.0];
        let kinds: Vec<StepKind> = (0..6).map(|_| p.decide(&mut st, &fast).0).collect();
        use StepKind::*;
        assert_eq!(kinds, vec![Vlm, Bridge, Vlm, Bridge, Vlm, Bridge]);
        // Stationary start picks the long period; the switch to the short
        // one waits for the next encoder step instead of cutting the stride.
        let mut st2 = ScheduleState::new();
        let k2: Vec<StepKind> = (0..9)
            .map(|i| p.decide(&mut st2, if i == 0 { &[0.0, 0.0] } else { &fast }).0)
            .collect();
        assert_eq!(k2, vec![Vlm, Bridge, Bridge, Bridge, Vlm, Bridge, Vlm, Bridge, Vlm]);
    }

    #[test]
    fn schedule_strings_round_trip() {
        for s in ["sync", "fixed:3", "cache:4", "phase"] {
            let p: SchedulePolicy = s.parse().unwrap();
            assert_eq!(p.to_string(), s);
        }
        assert!("fixed:0".parse::<SchedulePolicy>().is_err());
        assert!("weekly".parse::<SchedulePolicy>().is_err());
        assert!("fixed:x".parse::<SchedulePolicy>().is_err());
    }

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

    fn kv_bundle(seed: u64) -> (PolicyBundle<f64>, TaskSpec) {
        let spec = TaskSpec::default();
        let bb: Backbone<f64> = Backbone::new(BackboneConfig::default(), 7).unwrap();
        let policy =
            crate::teacher::bc::train_policy(bb, &spec, PolicyKind::KvReadout, &tiny_bc(), seed)
                .unwrap();
        let params = KvBridgeParams::init(KvBridgeConfig::default(), seed).unwrap();
        (
            PolicyBundle {
                policy,
                bridge: BridgeKind::Kv(params),
            },
            spec,
        )
    }

    #[test]
    fn sync_episode_logs_only_encoder_steps_with_unit_cosine() {
        let (bundle, spec) = feature_bundle(3);
        let (log, _) =
            run_episode(&bundle, &SchedulePolicy::Sync, &spec, 11, RunOptions::oracle()).unwrap();
        assert_eq!(log.backbone_calls, log.length);
        for step in &log.steps {
            assert_eq!(step.kind, StepKind::Vlm);
            assert_eq!(step.offset, 0);
            assert_eq!(step.cos_deploy, Some(1.0));
            assert_eq!(step.cos_copy, Some(1.0));
        }
    }

    #[test]
    fn untrained_predictor_and_caching_baseline_log_identically() {
        let (bundle, spec) = feature_bundle(4);
        for f in [2, 3] {
            let (a, _) = run_episode(
                &bundle,
                &SchedulePolicy::Fixed { f },
                &spec,
                21,
                RunOptions::plain(),
            )
            .unwrap();
            let (b, _) = run_episode(
                &bundle,
                &SchedulePolicy::Cache { f },
                &spec,
                21,
                RunOptions::plain(),
            )
            .unwrap();
            assert_eq!(a, b);
        }
    }

    #[test]
    fn kv_untrained_predictor_matches_caching_baseline() {
        let (bundle, spec) = kv_bundle(5);
        let (a, _) = run_episode(
            &bundle,
            &SchedulePolicy::Fixed { f: 3 },
            &spec,
            33,
            RunOptions::plain(),
        )
        .unwrap();
        let (b, _) = run_episode(
            &bundle,
            &SchedulePolicy::Cache { f: 3 },
            &spec,
            33,
            RunOptions::plain(),
        )
        .unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn first_chained_input_is_the_fresh_output_bit_for_bit() {
        let (bundle, spec) = feature_bundle(6);
        let opts = RunOptions {
            oracle: false,
            trace: true,
        };
        let (_, trace) =
            run_episode(&bundle, &SchedulePolicy::Fixed { f: 3 }, &spec, 9, opts).unwrap();
        let Some(EpisodeTrace::Feature(steps)) = trace else {
            panic!("feature trace expected")
        };
        let mut fresh: Option<&Tensor<f64>> = None;
        let mut checked = 0;
        for st in &steps {
            match st.kind {
                StepKind::Vlm => fresh = Some(&st.input),
                StepKind::Bridge if st.offset == 1 => {
                    assert_eq!(st.input.data(), fresh.unwrap().data());
                    checked += 1;
                }
                _ => {}
            }
        }
        assert!(checked > 0);
    }

    #[test]
    fn oracle_observer_never_changes_the_actions() {
        let (bundle, spec) = feature_bundle(8);
        let sched = SchedulePolicy::Fixed { f: 3 };
        let (plain, _) = run_episode(&bundle, &sched, &spec, 14, RunOptions::plain()).unwrap();
        let (watched, _) = run_episode(&bundle, &sched, &spec, 14, RunOptions::oracle()).unwrap();
        assert_eq!(plain.length, watched.length);
        for (a, b) in plain.steps.iter().zip(&watched.steps) {
            assert_eq!(a.action, b.action);
            assert_eq!(a.q, b.q);
        }
    }

    #[test]
    fn logs_survive_the_jsonl_round_trip() {
        let (bundle, spec) = feature_bundle(9);
        let mut logs = Vec::new();
        for seed in [1u64, 2] {
            logs.push(
                run_episode(
                    &bundle,
                    &SchedulePolicy::Fixed { f: 2 },
                    &spec,
                    seed,
                    RunOptions::oracle(),
                )
                .unwrap()
                .0,
            );
        }
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("episodes.jsonl");
        write_logs_jsonl(&path, &logs).unwrap();
        let back = read_logs_jsonl(&path).unwrap();
        assert_eq!(back, logs);
    }

    #[test]
    fn evaluation_counts_encoder_calls_by_the_ceiling_rule() {
        let (bundle, spec) = feature_bundle(10);
        let (logs, agg) = evaluate(
            &bundle,
            &SchedulePolicy::Fixed { f: 3 },
            &spec,
            4,
            77,
            RunOptions::plain(),
        )
        .unwrap();
        let expected: usize = logs.iter().map(|l| l.length.div_ceil(3)).sum();
        assert_eq!(agg.backbone_calls, expected);
        assert_eq!(agg.episodes, 4);
        let (_, empty) = evaluate(
            &bundle,
            &SchedulePolicy::Sync,
            &spec,
            0,
            77,
            RunOptions::plain(),
        )
        .unwrap();
        assert_eq!(empty.success_rate, None);
    }

    #[test]
    fn mismatched_bundles_are_rejected() {
        let (mut bundle, spec) = feature_bundle(12);
        bundle.bridge = BridgeKind::Feature(
            BridgeParams::init(
                BridgeConfig {
                    d_model: 16,
                    ..BridgeConfig::default()
                },
                1,
            )
            .unwrap(),
        );
        assert!(matches!(
            bundle.validate(&spec),
            Err(SchedulerError::Manifest(_))
        ));
        let (kv, _) = kv_bundle(13);
        let crossed = PolicyBundle {
            policy: bundle.policy.clone(),
            bridge: kv.bridge.clone(),
        };
        assert!(matches!(
            crossed.validate(&spec),
            Err(SchedulerError::Manifest(_))
        ));
    }
}
