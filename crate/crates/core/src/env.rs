//! Point-mass reaching environment.
//!
//! A 2-D agent under damped semi-implicit Euler dynamics must reach a target
//! among static distractors inside the arena `[-1, 1]^2`. Observations are
//! already tokenized: one row per scene entity (agent, target, distractors,
//! padding) plus instruction rows that restate the target's location, so the
//! downstream encoder sees an image-token/text-token split.
//!
//! All randomness is pre-drawn at reset from a seed-derived stream; stepping
//! the environment never touches a generator, which makes episodes exactly
//! replayable from `(spec, seed, action sequence)`.

use thiserror::Error;

use crate::rng::stream;
use crate::Tensor64;
use rand::Rng;

/// Entity-type one-hot slots in a token row.
const TYPE_AGENT: usize = 0;
const TYPE_TARGET: usize = 1;
const TYPE_DISTRACTOR: usize = 2;
const TYPE_PADDING: usize = 3;
const TYPE_INSTRUCTION: usize = 4;
const N_TYPES: usize = 5;

/// Token layout: type one-hot, absolute position, position relative to the
/// agent, then a fixed per-slot random tag filling the rest of the row.
const FIXED_FEATURES: usize = N_TYPES + 2 + 2;

/// Seed for the per-slot tag vectors. The tags are part of the observation
/// encoding itself and must be identical in every run, so this is a constant
/// rather than a configured seed.
const TOKEN_TAG_SEED: u64 = 0x746f6b;
const TAG_STD: f64 = 0.5;

/// Scripted-expert PD gains.
const KP: f64 = 6.0;
const KD: f64 = 3.0;

/// Placement margins, in units of the success radius.
const MIN_SEPARATION_SR: f64 = 2.0;
const AGENT_TARGET_SR: f64 = 4.0;
/// Minimum hop distance of a relocating target.
const SWITCH_MIN_DIST: f64 = 0.3;
/// A pre-drawn goal switch lands in this fraction band of `max_steps`.
const SWITCH_BAND: (f64, f64) = (0.2, 0.5);

const PLACEMENT_MARGIN: f64 = 0.8;
const MAX_PLACEMENT_TRIES: usize = 1000;

#[derive(Debug, Error)]
pub enum EnvError {
    #[error("task spec: {0}")]
    Config(String),
    #[error("episode is over; reset before stepping")]
    EpisodeOver,
    #[error("action has {got} components, spec requires {want}")]
    BadAction { got: usize, want: usize },
    #[error("could not place {0} entities with the required separation")]
    Placement(usize),
}

/// Static description of one task family.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskSpec {
    pub distractors: usize,
    pub n_img: usize,
    pub n_txt: usize,
    pub d_obs: usize,
    pub dt: f64,
    pub damping: f64,
    pub a_max: f64,
    pub success_radius: f64,
    pub max_steps: usize,
    /// Probability that the target relocates once mid-episode.
    pub goal_switch_prob: f64,
    /// Action width; components beyond the first two are inert and exist so
    /// wider action heads can be exercised.
    pub action_dim: usize,
}

impl Default for TaskSpec {
    fn default() -> Self {
        TaskSpec {
            distractors: 3,
            n_img: 8,
            n_txt: 2,
            d_obs: 16,
            dt: 0.1,
            damping: 0.9,
            a_max: 1.0,
            success_radius: 0.05,
            max_steps: 60,
            goal_switch_prob: 0.0,
            action_dim: 2,
        }
    }
}

impl TaskSpec {
    /// The base task with mid-episode target relocation enabled.
    pub fn with_goal_switch() -> Self {
        TaskSpec {
            goal_switch_prob: 0.3,
            ..TaskSpec::default()
        }
    }

    pub fn tokens_total(&self) -> usize {
        self.n_img + self.n_txt
    }

    /// True at image-token positions, false at instruction positions.
    pub fn image_mask(&self) -> Vec<bool> {
        let mut m = vec![true; self.n_img];
        m.extend(std::iter::repeat(false).take(self.n_txt));
        m
    }

    pub fn validate(&self) -> Result<(), EnvError> {
        if self.n_img < 2 {
            return Err(EnvError::Config("n_img must be at least 2".into()));
        }
        if self.distractors + 2 > self.n_img {
            return Err(EnvError::Config(format!(
                "{} distractors need {} scene slots but n_img is {}",
                self.distractors,
                self.distractors + 2,
                self.n_img
            )));
        }
        if self.n_txt < 1 {
            return Err(EnvError::Config("n_txt must be at least 1".into()));
        }
        if self.d_obs < FIXED_FEATURES + 1 {
            return Err(EnvError::Config(format!(
                "d_obs must be at least {}",
                FIXED_FEATURES + 1
            )));
        }
        if !(self.dt > 0.0) || !(self.a_max > 0.0) || !(self.success_radius > 0.0) {
            return Err(EnvError::Config("dt, a_max, success_radius must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.damping) {
            return Err(EnvError::Config("damping must lie in [0, 1]".into()));
        }
        if !(0.0..=1.0).contains(&self.goal_switch_prob) {
            return Err(EnvError::Config("goal_switch_prob must lie in [0, 1]".into()));
        }
        if self.max_steps == 0 {
            return Err(EnvError::Config("max_steps must be positive".into()));
        }
        if self.action_dim < 2 {
            return Err(EnvError::Config("action_dim must be at least 2".into()));
        }
        Ok(())
    }
}

/// Tokenized observation at one control step.
#[derive(Debug, Clone)]
pub struct Observation {
    /// `n_img x d_obs` entity rows.
    pub scene_tokens: Tensor64,
    /// `n_txt x d_obs` instruction rows; constant within an episode except
    /// across a goal switch.
    pub instruction_tokens: Tensor64,
    /// Proprioceptive state `[pos_x, pos_y, vel_x, vel_y]`.
    pub q: Vec<f64>,
}

impl Observation {
    /// All token rows, scene first, as one `(n_img + n_txt) x d_obs` matrix.
    pub fn all_tokens(&self) -> Tensor64 {
        Tensor64::vstack(&[&self.scene_tokens, &self.instruction_tokens]).expect("equal widths")
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepOutcome {
    pub step_index: usize,
    pub done: bool,
    pub success: bool,
}

#[derive(Debug, Clone)]
struct SwitchPlan {
    step: Option<usize>,
    new_target: [f64; 2],
}

/// Live environment instance.
#[derive(Debug, Clone)]
pub struct Env {
    spec: TaskSpec,
    agent_pos: [f64; 2],
    agent_vel: [f64; 2],
    target: [f64; 2],
    distractors: Vec<[f64; 2]>,
    plan: SwitchPlan,
    step_index: usize,
    done: bool,
    success: bool,
}

fn dist(a: [f64; 2], b: [f64; 2]) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt()
}

impl Env {
    /// Build an episode. Every random quantity, including whether and when
    /// the goal switches, is drawn here.
    pub fn reset(spec: &TaskSpec, seed: u64) -> Result<Env, EnvError> {
        spec.validate()?;
        let mut rng = stream(seed, "env_reset", 0);
        let draw_pos = |rng: &mut rand_chacha::ChaCha8Rng| -> [f64; 2] {
            [
                rng.gen_range(-PLACEMENT_MARGIN..PLACEMENT_MARGIN),
                rng.gen_range(-PLACEMENT_MARGIN..PLACEMENT_MARGIN),
            ]
        };

        let sep = MIN_SEPARATION_SR * spec.success_radius;
        let agent = draw_pos(&mut rng);
        let mut placed: Vec<[f64; 2]> = vec![agent];

        let place = |rng: &mut rand_chacha::ChaCha8Rng,
                         placed: &[[f64; 2]],
                         extra: Option<([f64; 2], f64)>|
         -> Result<[f64; 2], EnvError> {
            for _ in 0..MAX_PLACEMENT_TRIES {
                let p = draw_pos(rng);
                let clear = placed.iter().all(|&q| dist(p, q) >= sep)
                    && extra.map_or(true, |(q, d)| dist(p, q) >= d);
                if clear {
                    return Ok(p);
                }
            }
            Err(EnvError::Placement(placed.len() + 1))
        };

        let target = place(
            &mut rng,
            &placed,
            Some((agent, AGENT_TARGET_SR * spec.success_radius)),
        )?;
        placed.push(target);
        let mut distractors = Vec::with_capacity(spec.distractors);
        for _ in 0..spec.distractors {
            let p = place(&mut rng, &placed, None)?;
            placed.push(p);
            distractors.push(p);
        }

        // The switch plan is always drawn so the stream layout does not
        // depend on the probability parameter.
        let roll: f64 = rng.gen_range(0.0..1.0);
        let lo = (SWITCH_BAND.0 * spec.max_steps as f64).floor().max(1.0) as usize;
        let hi = (SWITCH_BAND.1 * spec.max_steps as f64).ceil() as usize;
        let switch_at = rng.gen_range(lo..hi.max(lo + 1));
        let new_target = place(&mut rng, &placed, Some((target, SWITCH_MIN_DIST)))?;
        let plan = SwitchPlan {
            step: (roll < spec.goal_switch_prob).then_some(switch_at),
            new_target,
        };

        Ok(Env {
            spec: spec.clone(),
            agent_pos: agent,
            agent_vel: [0.0, 0.0],
            target,
            distractors,
            plan,
            step_index: 0,
            done: false,
            success: false,
        })
    }

    pub fn spec(&self) -> &TaskSpec {
        &self.spec
    }

    pub fn step_index(&self) -> usize {
        self.step_index
    }

    pub fn done(&self) -> bool {
        self.done
    }

    pub fn success(&self) -> bool {
        self.success
    }

    pub fn agent_pos(&self) -> [f64; 2] {
        self.agent_pos
    }

    pub fn target_pos(&self) -> [f64; 2] {
        self.target
    }

    /// Step at which the pre-drawn goal switch fires, if any.
    pub fn switch_step(&self) -> Option<usize> {
        self.plan.step
    }

    fn tag(slot: usize, width: usize) -> Vec<f64> {
        crate::rng::normal_vec(&mut stream(TOKEN_TAG_SEED, "token_tag", slot as u64), width)
            .into_iter()
            .map(|v| v * TAG_STD)
            .collect()
    }

    fn token_row(&self, ty: usize, abs: [f64; 2], rel: [f64; 2], slot: usize) -> Vec<f64> {
        let d = self.spec.d_obs;
        let mut row = vec![0.0; d];
        row[ty] = 1.0;
        row[N_TYPES] = abs[0];
        row[N_TYPES + 1] = abs[1];
        row[N_TYPES + 2] = rel[0];
        row[N_TYPES + 3] = rel[1];
        let tag = Env::tag(slot, d - FIXED_FEATURES);
        row[FIXED_FEATURES..].copy_from_slice(&tag);
        row
    }

    /// Observation for the current step. Scene slots: agent, target,
    /// distractors, then padding rows that never change.
    pub fn observe(&self) -> Observation {
        let spec = &self.spec;
        let a = self.agent_pos;
        let mut scene = Vec::with_capacity(spec.n_img * spec.d_obs);
        scene.extend(self.token_row(TYPE_AGENT, a, [0.0, 0.0], 0));
        scene.extend(self.token_row(
            TYPE_TARGET,
            self.target,
            [self.target[0] - a[0], self.target[1] - a[1]],
            1,
        ));
        for (k, &d) in self.distractors.iter().enumerate() {
            scene.extend(self.token_row(TYPE_DISTRACTOR, d, [d[0] - a[0], d[1] - a[1]], 2 + k));
        }
        for slot in 2 + self.distractors.len()..spec.n_img {
            scene.extend(self.token_row(TYPE_PADDING, [0.0, 0.0], [0.0, 0.0], slot));
        }
        let mut text = Vec::with_capacity(spec.n_txt * spec.d_obs);
        for j in 0..spec.n_txt {
            text.extend(self.token_row(
                TYPE_INSTRUCTION,
                self.target,
                [0.0, 0.0],
                spec.n_img + j,
            ));
        }
        Observation {
            scene_tokens: Tensor64::from_f64_vec(spec.n_img, spec.d_obs, &scene).expect("layout"),
            instruction_tokens: Tensor64::from_f64_vec(spec.n_txt, spec.d_obs, &text)
                .expect("layout"),
            q: vec![a[0], a[1], self.agent_vel[0], self.agent_vel[1]],
        }
    }

    /// Scripted PD expert toward the current target, zero in inert action
    /// components.
    pub fn expert_action(&self) -> Vec<f64> {
        let mut a = vec![0.0; self.spec.action_dim];
        for i in 0..2 {
            let raw = KP * (self.target[i] - self.agent_pos[i]) - KD * self.agent_vel[i];
            a[i] = raw.clamp(-self.spec.a_max, self.spec.a_max);
        }
        a
    }

    /// Advance one control step. The action is clamped componentwise to
    /// `a_max` before integration; positions are clamped to the arena.
    pub fn step(&mut self, action: &[f64]) -> Result<StepOutcome, EnvError> {
        if self.done {
            return Err(EnvError::EpisodeOver);
        }
        if action.len() != self.spec.action_dim {
            return Err(EnvError::BadAction {
                got: action.len(),
                want: self.spec.action_dim,
            });
        }
        let spec = &self.spec;
        for i in 0..2 {
            let a = action[i].clamp(-spec.a_max, spec.a_max);
            self.agent_vel[i] = spec.damping * self.agent_vel[i] + spec.dt * a;
            self.agent_pos[i] = (self.agent_pos[i] + spec.dt * self.agent_vel[i]).clamp(-1.0, 1.0);
        }
        self.step_index += 1;

        // A switch scheduled for this index fires before the success check:
        // arriving at the old target exactly as the goal moves does not count.
        if self.plan.step == Some(self.step_index) {
            self.target = self.plan.new_target;
        }
        if dist(self.agent_pos, self.target) < spec.success_radius {
            self.done = true;
            self.success = true;
        } else if self.step_index >= spec.max_steps {
            self.done = true;
        }
        Ok(StepOutcome {
            step_index: self.step_index,
            done: self.done,
            success: self.success,
        })
    }
}

/// Deterministic reconstruction of an episode from its seed and actions.
#[derive(Debug, Clone)]
pub struct ReplayTrace {
    /// Proprio at each decision step, index-aligned with `actions`.
    pub qs: Vec<Vec<f64>>,
    pub success: bool,
    pub length: usize,
}

pub fn replay_episode(
    spec: &TaskSpec,
    seed: u64,
    actions: &[Vec<f64>],
) -> Result<ReplayTrace, EnvError> {
    let mut env = Env::reset(spec, seed)?;
    let mut qs = Vec::with_capacity(actions.len());
    for action in actions {
        qs.push(env.observe().q);
        let out = env.step(action)?;
        if out.done {
            break;
        }
    }
    Ok(ReplayTrace {
        qs,
        success: env.success(),
        length: env.step_index(),
    })
}

/// Roll the scripted expert; used by gating checks and tests.
pub fn run_expert_episode(spec: &TaskSpec, seed: u64) -> Result<StepOutcome, EnvError> {
    let mut env = Env::reset(spec, seed)?;
    loop {
        let a = env.expert_action();
        let out = env.step(&a)?;
        if out.done {
            return Ok(out);
        }
    }
}
