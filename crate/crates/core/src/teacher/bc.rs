//! Behavior cloning of the scripted expert through the frozen encoder.
//!
//! The resulting policy is the system that later stages accelerate, so a
//! success gate protects everything downstream: a head that cannot reach the
//! configured success rate when the encoder runs at every step would make
//! subsequent comparisons meaningless, and training aborts instead.

use serde_json::json;
use thiserror::Error;

use super::heads::{
    self, flow_noise, CacheLeaves, KvHeadConfig,
};
use super::{Backbone, BackboneConfig, TeacherError};
use crate::env::{Env, EnvError, TaskSpec};
use crate::rng::{derive_seed, stream};
use crate::scalar::Scalar;
use crate::tensorkit::{
    clip_grad_norm, cosine_lr, load_checkpoint, save_checkpoint, store_hash, AdamHyper, AdamW,
    BoundParams, GradMap, ParamStore, Tape, Tensor, TensorError,
};
use rand::seq::SliceRandom;

#[derive(Debug, Error)]
pub enum BcError {
    #[error("cloned policy reached {got:.4} success over {episodes} episodes, gate is {need:.2}")]
    GateFailed { got: f64, need: f64, episodes: usize },
    #[error("policy file: {0}")]
    Format(String),
    #[error(transparent)]
    Teacher(#[from] TeacherError),
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// Which action pathway the policy deploys.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PolicyKind {
    Regression,
    Flow,
    KvReadout,
}

impl std::fmt::Display for PolicyKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            PolicyKind::Regression => "regression",
            PolicyKind::Flow => "flow",
            PolicyKind::KvReadout => "kv_readout",
        };
        f.write_str(s)
    }
}

impl std::str::FromStr for PolicyKind {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "regression" => Ok(PolicyKind::Regression),
            "flow" => Ok(PolicyKind::Flow),
            "kv_readout" => Ok(PolicyKind::KvReadout),
            other => Err(format!("unknown policy kind {other:?}")),
        }
    }
}

#[derive(Debug, Clone)]
pub enum ActionHead<S: Scalar> {
    Regression(ParamStore<S>),
    Flow {
        store: ParamStore<S>,
        steps: usize,
    },
    KvReadout {
        store: ParamStore<S>,
        cfg: KvHeadConfig,
    },
}

impl<S: Scalar> ActionHead<S> {
    pub fn kind(&self) -> PolicyKind {
        match self {
            ActionHead::Regression(_) => PolicyKind::Regression,
            ActionHead::Flow { .. } => PolicyKind::Flow,
            ActionHead::KvReadout { .. } => PolicyKind::KvReadout,
        }
    }

    pub fn store(&self) -> &ParamStore<S> {
        match self {
            ActionHead::Regression(s) => s,
            ActionHead::Flow { store, .. } => store,
            ActionHead::KvReadout { store, .. } => store,
        }
    }

    pub fn store_mut(&mut self) -> &mut ParamStore<S> {
        match self {
            ActionHead::Regression(s) => s,
            ActionHead::Flow { store, .. } => store,
            ActionHead::KvReadout { store, .. } => store,
        }
    }
}

/// Frozen encoder plus trained action head.
#[derive(Debug, Clone)]
pub struct Policy<S: Scalar> {
    pub backbone: Backbone<S>,
    pub head: ActionHead<S>,
    pub task: TaskSpec,
    /// Success rate measured at the gate, kept for manifests.
    pub gate_sr: f64,
}

impl<S: Scalar> Policy<S> {
    /// Action from final hidden states, for the feature pathway. The flow
    /// variant draws its integration noise from the episode/step so the same
    /// state always denoises identically.
    pub fn act_from_features(
        &self,
        z: &Tensor<S>,
        q: &[f64],
        episode_seed: u64,
        step: usize,
    ) -> Result<Vec<f64>, BcError> {
        let mask = self.task.image_mask();
        match &self.head {
            ActionHead::Regression(store) => {
                let input = heads::feature_head_input(z, &mask, q)?;
                Ok(heads::mlp3_eval(store, &input)?.to_f64_vec())
            }
            ActionHead::Flow { store, steps } => {
                let ctx = heads::feature_head_input(z, &mask, q)?;
                let noise = flow_noise::<S>(episode_seed, step, self.task.action_dim);
                Ok(heads::flow_denoise(store, &ctx, &[], &noise, *steps)?.to_f64_vec())
            }
            ActionHead::KvReadout { .. } => Err(BcError::Format(
                "cache read-out policy cannot act from hidden states".into(),
            )),
        }
    }

    /// Action from the two cache layers the read-out head attends to, keys
    /// already in the rotated frame.
    pub fn act_from_cache(
        &self,
        k_layers: [&Tensor<S>; 2],
        v_layers: [&Tensor<S>; 2],
        q: &[f64],
    ) -> Result<Vec<f64>, BcError> {
        match &self.head {
            ActionHead::KvReadout { store, cfg } => Ok(heads::kv_head_eval(
                store,
                cfg,
                &self.backbone.rope,
                q,
                k_layers,
                v_layers,
            )?
            .to_f64_vec()),
            _ => Err(BcError::Format(
                "feature policy cannot act from the cache".into(),
            )),
        }
    }

    /// Full encoder pass then the head; the every-step deployment mode.
    pub fn act_sync(
        &self,
        tokens: &Tensor<S>,
        q: &[f64],
        episode_seed: u64,
        step: usize,
    ) -> Result<Vec<f64>, BcError> {
        let out = self.backbone.forward(tokens)?;
        match &self.head {
            ActionHead::KvReadout { cfg, .. } => {
                let [l0, l1] = cfg.cache_layers;
                self.act_from_cache(
                    [&out.cache.k[l0], &out.cache.k[l1]],
                    [&out.cache.v[l0], &out.cache.v[l1]],
                    q,
                )
            }
            _ => self.act_from_features(&out.z, q, episode_seed, step),
        }
    }
}

/// Everything the trainers need, gathered once per collection pass.
pub struct BcDataset<S: Scalar> {
    /// `pooled image features ++ proprio`, one row per expert step.
    pub feat_inputs: Tensor<S>,
    /// Expert actions, row-aligned with `feat_inputs`.
    pub actions: Tensor<S>,
    /// Rotated-frame cache rows for the two read-out layers.
    pub caches: Vec<([Tensor<S>; 2], [Tensor<S>; 2])>,
    pub qs: Vec<Vec<f64>>,
}

impl<S: Scalar> BcDataset<S> {
    pub fn len(&self) -> usize {
        self.feat_inputs.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Roll the expert and encode every visited state.
///
/// `noise_std` perturbs the executed action while the stored label stays the
/// clean expert action. Cloning from exactly the expert's state distribution
/// compounds small errors at deployment; the perturbation walks collection
/// into the neighborhood the clone will actually visit.
///
/// Collection runs with the success check disabled so every episode spans the
/// full horizon. Expert rollouts terminate the moment they enter the goal
/// radius, which starves the dataset of exactly the slow final-approach states
/// where a clone otherwise stalls; letting the noisy rollout orbit the goal
/// under clean labels covers that region densely.
pub fn collect_bc_data<S: Scalar>(
    backbone: &Backbone<S>,
    cache_layers: [usize; 2],
    spec: &TaskSpec,
    seed: u64,
    episodes: usize,
    noise_std: f64,
) -> Result<BcDataset<S>, BcError> {
    let mask = spec.image_mask();
    // Sub-resolution radius: keeps the spec valid while making the success
    // check unreachable, so collection episodes always run max_steps.
    let collect_spec = TaskSpec {
        success_radius: 1e-12,
        ..spec.clone()
    };
    let mut feat_rows: Vec<Tensor<S>> = Vec::new();
    let mut act_rows: Vec<Tensor<S>> = Vec::new();
    let mut caches = Vec::new();
    let mut qs = Vec::new();
    for e in 0..episodes {
        let ep_seed = derive_seed(seed, "bc_episode", e as u64);
        let mut env = Env::reset(&collect_spec, ep_seed)?;
        let mut noise_rng = stream(ep_seed, "bc_collect_noise", 0);
        loop {
            let obs = env.observe();
            let tokens: Tensor<S> = obs.all_tokens().cast();
            let out = backbone.forward(&tokens)?;
            let label = env.expert_action();
            feat_rows.push(heads::feature_head_input(&out.z, &mask, &obs.q)?);
            act_rows.push(Tensor::row_from_f64(&label));
            let [l0, l1] = cache_layers;
            caches.push((
                [out.cache.k[l0].clone(), out.cache.k[l1].clone()],
                [out.cache.v[l0].clone(), out.cache.v[l1].clone()],
            ));
            qs.push(obs.q.clone());
            let taken: Vec<f64> = if noise_std > 0.0 {
                let noise = crate::rng::normal_vec(&mut noise_rng, label.len());
                label
                    .iter()
                    .zip(&noise)
                    .map(|(a, n)| a + noise_std * n)
                    .collect()
            } else {
                label.clone()
            };
            if env.step(&taken)?.done {
                break;
            }
        }
    }
    let feat_refs: Vec<&Tensor<S>> = feat_rows.iter().collect();
    let act_refs: Vec<&Tensor<S>> = act_rows.iter().collect();
    Ok(BcDataset {
        feat_inputs: Tensor::vstack(&feat_refs)?,
        actions: Tensor::vstack(&act_refs)?,
        caches,
        qs,
    })
}

/// Knobs for cloning and its gate.
#[derive(Debug, Clone)]
pub struct BcConfig {
    pub episodes: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub clip: f64,
    pub weight_decay: f64,
    pub gate_sr: f64,
    pub gate_episodes: usize,
    /// Euler steps the flow variant deploys with.
    pub flow_steps: usize,
    /// Exploration noise during collection; labels stay clean.
    pub noise_std: f64,
    /// Width of the two hidden layers in the feature and flow heads.
    pub head_hidden: usize,
}

impl Default for BcConfig {
    fn default() -> Self {
        BcConfig {
            episodes: 2400,
            epochs: 40,
            batch_size: 64,
            lr: 3e-3,
            clip: 1.0,
            weight_decay: 1e-4,
            gate_sr: 0.9,
            gate_episodes: 200,
            flow_steps: 1,
            noise_std: 0.3,
            head_hidden: 192,
        }
    }
}

fn shuffled_indices(n: usize, seed: u64, epoch: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut stream(seed, "bc_shuffle", epoch as u64));
    idx
}

/// Minibatch regression of expert actions from pooled features.
fn train_regression<S: Scalar>(
    data: &BcDataset<S>,
    cfg: &BcConfig,
    seed: u64,
    d_model: usize,
    q_dim: usize,
    action_dim: usize,
) -> Result<ParamStore<S>, BcError> {
    let mut store = heads::feature_head_init(d_model, q_dim, cfg.head_hidden, action_dim, seed);
    let hyper = AdamHyper {
        weight_decay: cfg.weight_decay,
        ..AdamHyper::default()
    };
    let mut opt = AdamW::new(&store, hyper);
    let n = data.len();
    for epoch in 0..cfg.epochs {
        let lr = cosine_lr(epoch as u64, cfg.epochs as u64, cfg.lr);
        for chunk in shuffled_indices(n, seed, epoch).chunks(cfg.batch_size) {
            let x = data.feat_inputs.take_rows(chunk);
            let y = data.actions.take_rows(chunk);
            let mut tape = Tape::new();
            let bound = BoundParams::bind(&mut tape, &store);
            let xid = tape.leaf(x);
            let out = heads::mlp3_forward(&mut tape, &bound, xid)?;
            let yid = tape.leaf(y);
            let loss = tape.mse_mean(out, yid)?;
            let grads = tape.backward(loss)?;
            let mut gm = GradMap::new();
            bound.pull(&grads, &mut gm);
            clip_grad_norm(&mut gm, cfg.clip)?;
            opt.step(&mut store, &gm, lr)?;
        }
    }
    Ok(store)
}

/// Velocity-field training: corrupt each expert action along a straight path
/// from Gaussian noise and regress the constant path velocity.
fn train_flow<S: Scalar>(
    data: &BcDataset<S>,
    cfg: &BcConfig,
    seed: u64,
    d_model: usize,
    q_dim: usize,
    action_dim: usize,
) -> Result<ParamStore<S>, BcError> {
    let mut store = heads::flow_head_init(d_model, q_dim, cfg.head_hidden, action_dim, seed);
    let hyper = AdamHyper {
        weight_decay: cfg.weight_decay,
        ..AdamHyper::default()
    };
    let mut opt = AdamW::new(&store, hyper);
    let n = data.len();
    for epoch in 0..cfg.epochs {
        let lr = cosine_lr(epoch as u64, cfg.epochs as u64, cfg.lr);
        let mut noise_rng = stream(seed, "flow_train_noise", epoch as u64);
        for chunk in shuffled_indices(n, seed, epoch).chunks(cfg.batch_size) {
            let ctx = data.feat_inputs.take_rows(chunk);
            let x1 = data.actions.take_rows(chunk);
            let b = chunk.len();
            let x0 = Tensor::<S>::randn(&mut noise_rng, b, action_dim, 1.0);
            let mut times = Tensor::<S>::zeros(b, 1);
            let mut xt = Tensor::<S>::zeros(b, action_dim);
            for i in 0..b {
                let t = heads::draw_flow_time(&mut noise_rng);
                times.set(i, 0, crate::scalar::sc(t));
                let tt = crate::scalar::sc::<S>(t);
                for j in 0..action_dim {
                    let v = (S::one() - tt) * x0.get(i, j) + tt * x1.get(i, j);
                    xt.set(i, j, v);
                }
            }
            // Matching the field's displacement form, each sample's velocity
            // error is weighted by the remaining time: the regressed target
            // is a - x_t = (1-t) * (a - x0), so no sample's contribution
            // grows with 1/(1-t) and times near 1 stay harmless.
            let target = x1.sub(&xt);
            let mut tape = Tape::new();
            let bound = BoundParams::bind(&mut tape, &store);
            let xid = tape.leaf(xt);
            let cid = tape.leaf(ctx);
            let out = heads::flow_displacement_tape(&mut tape, &bound, xid, &times, cid)?;
            let yid = tape.leaf(target);
            let loss = tape.mse_mean(out, yid)?;
            let grads = tape.backward(loss)?;
            let mut gm = GradMap::new();
            bound.pull(&grads, &mut gm);
            clip_grad_norm(&mut gm, cfg.clip)?;
            opt.step(&mut store, &gm, lr)?;
        }
    }
    Ok(store)
}

/// Per-sample cross-attention training with gradient accumulation; the
/// attention context differs per sample, so samples cannot share one graph.
fn train_kv_readout<S: Scalar>(
    data: &BcDataset<S>,
    cfg: &BcConfig,
    seed: u64,
    head_cfg: &KvHeadConfig,
    rope: &crate::kvbridge::rope::RotaryTable<S>,
) -> Result<ParamStore<S>, BcError> {
    let mut store = heads::kv_head_init(head_cfg, seed);
    let hyper = AdamHyper {
        weight_decay: cfg.weight_decay,
        ..AdamHyper::default()
    };
    let mut opt = AdamW::new(&store, hyper);
    let n = data.len();
    for epoch in 0..cfg.epochs {
        let lr = cosine_lr(epoch as u64, cfg.epochs as u64, cfg.lr);
        for chunk in shuffled_indices(n, seed, epoch).chunks(cfg.batch_size) {
            let mut gm = GradMap::new();
            for &i in chunk {
                let (k, v) = &data.caches[i];
                let mut tape = Tape::new();
                let bound = BoundParams::bind(&mut tape, &store);
                let qid = tape.leaf(Tensor::row_from_f64(&data.qs[i]));
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
                let out = heads::kv_head_forward(&mut tape, &bound, head_cfg, rope, qid, &layers)?;
                let yid = tape.leaf(data.actions.row_tensor(i));
                let loss = tape.mse_mean(out, yid)?;
                let grads = tape.backward(loss)?;
                bound.pull(&grads, &mut gm);
            }
            gm.scale_all(crate::scalar::sc::<S>(1.0 / chunk.len() as f64));
            clip_grad_norm(&mut gm, cfg.clip)?;
            opt.step(&mut store, &gm, lr)?;
        }
    }
    Ok(store)
}

/// Success rate of the policy running the encoder at every step, over
/// episodes drawn from a stream disjoint from the training episodes.
pub fn eval_policy_sync<S: Scalar>(
    policy: &Policy<S>,
    spec: &TaskSpec,
    seed: u64,
    episodes: usize,
) -> Result<f64, BcError> {
    let mut wins = 0usize;
    for e in 0..episodes {
        let ep_seed = derive_seed(seed, "bc_eval", e as u64);
        let mut env = Env::reset(spec, ep_seed)?;
        loop {
            let obs = env.observe();
            let tokens: Tensor<S> = obs.all_tokens().cast();
            let a = policy.act_sync(&tokens, &obs.q, ep_seed, env.step_index())?;
            let out = env.step(&a)?;
            if out.done {
                if out.success {
                    wins += 1;
                }
                break;
            }
        }
    }
    Ok(wins as f64 / episodes as f64)
}

/// Clone the expert into the requested head and verify the gate.
pub fn train_policy<S: Scalar>(
    backbone: Backbone<S>,
    spec: &TaskSpec,
    kind: PolicyKind,
    cfg: &BcConfig,
    seed: u64,
) -> Result<Policy<S>, BcError> {
    let kv_cfg = KvHeadConfig::for_backbone(&backbone.cfg, spec.action_dim);
    let data = collect_bc_data(
        &backbone,
        kv_cfg.cache_layers,
        spec,
        seed,
        cfg.episodes,
        cfg.noise_std,
    )?;
    let d = backbone.cfg.d_model;
    let head = match kind {
        PolicyKind::Regression => ActionHead::Regression(train_regression(
            &data,
            cfg,
            seed,
            d,
            4,
            spec.action_dim,
        )?),
        PolicyKind::Flow => ActionHead::Flow {
            store: train_flow(&data, cfg, seed, d, 4, spec.action_dim)?,
            steps: cfg.flow_steps,
        },
        PolicyKind::KvReadout => ActionHead::KvReadout {
            store: train_kv_readout(&data, cfg, seed, &kv_cfg, &backbone.rope)?,
            cfg: kv_cfg,
        },
    };
    let mut policy = Policy {
        backbone,
        head,
        task: spec.clone(),
        gate_sr: 0.0,
    };
    let sr = eval_policy_sync(&policy, spec, seed, cfg.gate_episodes)?;
    if sr < cfg.gate_sr {
        return Err(BcError::GateFailed {
            got: sr,
            need: cfg.gate_sr,
            episodes: cfg.gate_episodes,
        });
    }
    policy.gate_sr = sr;
    Ok(policy)
}

// ---------------------------------------------------------------------------
// serialization
// ---------------------------------------------------------------------------

/// Policy checkpoint: head weights as payload, everything reconstructible in
/// the meta block. The encoder itself is regenerated from its seed and
/// config, then verified against the recorded fingerprint.
pub fn save_policy<S: Scalar>(path: &std::path::Path, policy: &Policy<S>) -> Result<(), BcError> {
    let head_meta = match &policy.head {
        ActionHead::Flow { steps, .. } => json!({ "flow_steps": steps }),
        ActionHead::KvReadout { cfg, .. } => json!({ "kv_cfg": cfg }),
        ActionHead::Regression(_) => json!({}),
    };
    let task = &policy.task;
    let meta = json!({
        "kind": policy.head.kind().to_string(),
        "backbone_cfg": policy.backbone.cfg,
        "backbone_seed": policy.backbone.seed,
        "backbone_fingerprint": policy.backbone.fingerprint(),
        "task": {
            "distractors": task.distractors,
            "n_img": task.n_img,
            "n_txt": task.n_txt,
            "d_obs": task.d_obs,
            "dt": task.dt,
            "damping": task.damping,
            "a_max": task.a_max,
            "success_radius": task.success_radius,
            "max_steps": task.max_steps,
            "goal_switch_prob": task.goal_switch_prob,
            "action_dim": task.action_dim,
        },
        "gate_sr": policy.gate_sr,
        "head": head_meta,
    });
    save_checkpoint(policy.head.store(), "policy", &meta, path)?;
    Ok(())
}

fn task_from_meta(m: &serde_json::Value) -> Result<TaskSpec, BcError> {
    let g = |k: &str| -> Result<f64, BcError> {
        m.get(k)
            .and_then(serde_json::Value::as_f64)
            .ok_or_else(|| BcError::Format(format!("task meta missing {k}")))
    };
    Ok(TaskSpec {
        distractors: g("distractors")? as usize,
        n_img: g("n_img")? as usize,
        n_txt: g("n_txt")? as usize,
        d_obs: g("d_obs")? as usize,
        dt: g("dt")?,
        damping: g("damping")?,
        a_max: g("a_max")?,
        success_radius: g("success_radius")?,
        max_steps: g("max_steps")? as usize,
        goal_switch_prob: g("goal_switch_prob")?,
        action_dim: g("action_dim")? as usize,
    })
}

pub fn load_policy<S: Scalar>(path: &std::path::Path) -> Result<Policy<S>, BcError> {
    let (store, header) = load_checkpoint::<S>(path)?;
    if header.module != "policy" {
        return Err(BcError::Format(format!(
            "expected a policy checkpoint, found module {:?}",
            header.module
        )));
    }
    let meta = &header.meta;
    let kind: PolicyKind = meta
        .get("kind")
        .and_then(serde_json::Value::as_str)
        .ok_or_else(|| BcError::Format("missing policy kind".into()))?
        .parse()
        .map_err(BcError::Format)?;
    let cfg: BackboneConfig = serde_json::from_value(
        meta.get("backbone_cfg")
            .cloned()
            .ok_or_else(|| BcError::Format("missing backbone config".into()))?,
    )
    .map_err(|e| BcError::Format(e.to_string()))?;
    let seed = meta
        .get("backbone_seed")
        .and_then(serde_json::Value::as_u64)
        .ok_or_else(|| BcError::Format("missing backbone seed".into()))?;
    let backbone: Backbone<S> = Backbone::new(cfg, seed)?;
    let recorded = meta
        .get("backbone_fingerprint")
        .and_then(serde_json::Value::as_str)
        .ok_or_else(|| BcError::Format("missing backbone fingerprint".into()))?;
    let actual = backbone.fingerprint();
    if recorded != actual {
        return Err(BcError::Format(format!(
            "backbone fingerprint mismatch: file says {recorded}, rebuilt {actual}"
        )));
    }
    let task = task_from_meta(
        meta.get("task")
            .ok_or_else(|| BcError::Format("missing task spec".into()))?,
    )?;
    let gate_sr = meta
        .get("gate_sr")
        .and_then(serde_json::Value::as_f64)
        .unwrap_or(0.0);
    let head = match kind {
        PolicyKind::Regression => ActionHead::Regression(store),
        PolicyKind::Flow => {
            let steps = meta
                .pointer("/head/flow_steps")
                .and_then(serde_json::Value::as_u64)
                .ok_or_else(|| BcError::Format("missing flow_steps".into()))?;
            ActionHead::Flow {
                store,
                steps: steps as usize,
            }
        }
        PolicyKind::KvReadout => {
            let cfg: KvHeadConfig = serde_json::from_value(
                meta.pointer("/head/kv_cfg")
                    .cloned()
                    .ok_or_else(|| BcError::Format("missing kv head config".into()))?,
            )
            .map_err(|e| BcError::Format(e.to_string()))?;
            ActionHead::KvReadout { store, cfg }
        }
    };
    Ok(Policy {
        backbone,
        head,
        task,
        gate_sr,
    })
}

/// Content hash of the head weights, for lineage manifests.
pub fn policy_head_hash<S: Scalar>(policy: &Policy<S>) -> String {
    store_hash(policy.head.store(), "policy")
}
