//! Frozen token encoder standing in for a large vision-language backbone.
//!
//! The encoder is a small pre-LN transformer whose weights are drawn once
//! from a seed and never trained. Downstream components treat it as an
//! expensive oracle: its final hidden states are the features slower parts
//! of the system try to predict, and its per-layer key/value projections are
//! the cache the alternative representation path edits.
//!
//! Attention is multi-query: several query heads share a single key/value
//! head, so the cache per layer is one `tokens x head_dim` pair regardless of
//! the query head count. Keys are cached after rotary position encoding when
//! that is enabled, which matches how serving stacks store them.
//!
//! Everything here is plain tensor math. Nothing differentiates through the
//! encoder, so it never touches the recording tape.

pub mod bc;
pub mod heads;

use thiserror::Error;

use crate::kvbridge::rope::{RopeError, RotaryTable};
use crate::rng::stream;
use crate::scalar::Scalar;
use crate::tensorkit::{store_hash, ParamStore, Tensor, TensorError};

#[derive(Debug, Error)]
pub enum TeacherError {
    #[error("backbone config: {0}")]
    Config(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Rope(#[from] RopeError),
}

/// Shape and behavior of the frozen encoder.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct BackboneConfig {
    pub d_model: usize,
    pub layers: usize,
    pub n_img: usize,
    pub n_txt: usize,
    pub d_obs: usize,
    pub q_heads: usize,
    /// Width of the single shared key/value head.
    pub head_dim: usize,
    pub mlp_hidden: usize,
    pub rope_enabled: bool,
    pub rope_base: f64,
    /// Residual-stream snapshot is taken after this block (0-indexed).
    pub stable_layer_index: usize,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        BackboneConfig {
            d_model: 32,
            layers: 4,
            n_img: 8,
            n_txt: 2,
            d_obs: 16,
            q_heads: 4,
            head_dim: 8,
            mlp_hidden: 128,
            rope_enabled: true,
            rope_base: 10000.0,
            stable_layer_index: 2,
        }
    }
}

impl BackboneConfig {
    pub fn n_tokens(&self) -> usize {
        self.n_img + self.n_txt
    }

    /// Position index used by read-out queries that sit past the sequence.
    pub fn query_position(&self) -> usize {
        self.n_tokens()
    }

    pub fn validate(&self) -> Result<(), TeacherError> {
        if self.d_model == 0 || self.q_heads == 0 || self.head_dim == 0 {
            return Err(TeacherError::Config("zero-sized dimension".into()));
        }
        if self.head_dim % 2 != 0 {
            return Err(TeacherError::Config(
                "head_dim must be even for rotary encoding".into(),
            ));
        }
        if self.layers < 2 {
            return Err(TeacherError::Config(
                "at least two blocks are required so read-out heads have two cache layers".into(),
            ));
        }
        if self.stable_layer_index >= self.layers {
            return Err(TeacherError::Config(format!(
                "stable_layer_index {} out of range for {} layers",
                self.stable_layer_index, self.layers
            )));
        }
        if self.n_img < 1 || self.n_txt < 1 {
            return Err(TeacherError::Config("need image and text tokens".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct Block<S: Scalar> {
    pub wq: Tensor<S>,
    pub wk: Tensor<S>,
    pub wv: Tensor<S>,
    pub wo: Tensor<S>,
    pub w1: Tensor<S>,
    pub w2: Tensor<S>,
}

/// Frozen encoder weights, reproducible from `(config, seed)`.
#[derive(Debug, Clone)]
pub struct Backbone<S: Scalar> {
    pub cfg: BackboneConfig,
    pub seed: u64,
    pub embed: Tensor<S>,
    pub pos: Tensor<S>,
    pub blocks: Vec<Block<S>>,
    pub rope: RotaryTable<S>,
}

/// Per-layer key/value rows as a serving cache would hold them: keys carry
/// the rotary encoding whenever the encoder applies one.
#[derive(Debug, Clone)]
pub struct KvCacheSnapshot<S: Scalar> {
    pub k: Vec<Tensor<S>>,
    pub v: Vec<Tensor<S>>,
    pub rope_applied: bool,
}

impl<S: Scalar> KvCacheSnapshot<S> {
    pub fn layers(&self) -> usize {
        self.k.len()
    }

    /// All layer K rows then V rows concatenated column-wise into one
    /// `tokens x layers*(dk+dv)` matrix; the layout consumed by modules that
    /// treat the cache as a flat feature field.
    pub fn flatten(&self) -> Result<Tensor<S>, TensorError> {
        let mut parts: Vec<&Tensor<S>> = Vec::with_capacity(2 * self.k.len());
        for l in 0..self.k.len() {
            parts.push(&self.k[l]);
            parts.push(&self.v[l]);
        }
        Tensor::hstack(&parts)
    }
}

/// One full encoder pass.
#[derive(Debug, Clone)]
pub struct BackboneOutput<S: Scalar> {
    /// Final hidden states after the closing normalization, `tokens x d_model`.
    pub z: Tensor<S>,
    /// Residual stream after the configured stable block.
    pub s: Tensor<S>,
    pub cache: KvCacheSnapshot<S>,
    /// The same key/value pairs before any rotary rotation; delta predictors
    /// chain in this frame.
    pub cache_pre: KvCacheSnapshot<S>,
    /// Residual stream entering each block; kept because consistency checks
    /// recompute cache projections from it.
    pub layer_inputs: Vec<Tensor<S>>,
}

impl<S: Scalar> Backbone<S> {
    pub fn new(cfg: BackboneConfig, seed: u64) -> Result<Backbone<S>, TeacherError> {
        cfg.validate()?;
        let mut idx = 0u64;
        let mut draw = |rows: usize, cols: usize, std: f64| {
            let t = Tensor::randn(&mut stream(seed, "teacher_backbone", idx), rows, cols, std);
            idx += 1;
            t
        };
        let d = cfg.d_model;
        let att = cfg.q_heads * cfg.head_dim;
        let embed = draw(cfg.d_obs, d, 1.0 / (cfg.d_obs as f64).sqrt());
        let pos = draw(cfg.n_tokens(), d, 0.3);
        let mut blocks = Vec::with_capacity(cfg.layers);
        for _ in 0..cfg.layers {
            blocks.push(Block {
                wq: draw(d, att, 1.0 / (d as f64).sqrt()),
                wk: draw(d, cfg.head_dim, 1.0 / (d as f64).sqrt()),
                wv: draw(d, cfg.head_dim, 1.0 / (d as f64).sqrt()),
                wo: draw(att, d, 1.0 / (att as f64).sqrt()),
                w1: draw(d, cfg.mlp_hidden, 1.0 / (d as f64).sqrt()),
                w2: draw(cfg.mlp_hidden, d, 1.0 / (cfg.mlp_hidden as f64).sqrt()),
            });
        }
        let rope = RotaryTable::new(cfg.n_tokens() + 1, cfg.head_dim, cfg.rope_base)?;
        Ok(Backbone {
            cfg,
            seed,
            embed,
            pos,
            blocks,
            rope,
        })
    }

    /// Token embedding plus learned positions; the residual stream entering
    /// block 0.
    pub fn embed_tokens(&self, tokens: &Tensor<S>) -> Result<Tensor<S>, TeacherError> {
        if tokens.shape() != (self.cfg.n_tokens(), self.cfg.d_obs) {
            return Err(TeacherError::Config(format!(
                "expected {} x {} token matrix, got {:?}",
                self.cfg.n_tokens(),
                self.cfg.d_obs,
                tokens.shape()
            )));
        }
        Ok(tokens.matmul(&self.embed)?.add(&self.pos))
    }

    /// Full pass over one token matrix.
    pub fn forward(&self, tokens: &Tensor<S>) -> Result<BackboneOutput<S>, TeacherError> {
        let cfg = &self.cfg;
        let n = cfg.n_tokens();
        let mut x = self.embed_tokens(tokens)?;
        let mut cache = KvCacheSnapshot {
            k: Vec::with_capacity(cfg.layers),
            v: Vec::with_capacity(cfg.layers),
            rope_applied: cfg.rope_enabled,
        };
        let mut cache_pre = KvCacheSnapshot {
            k: Vec::with_capacity(cfg.layers),
            v: Vec::with_capacity(cfg.layers),
            rope_applied: false,
        };
        let mut layer_inputs = Vec::with_capacity(cfg.layers);
        let mut s = None;
        for (l, blk) in self.blocks.iter().enumerate() {
            layer_inputs.push(x.clone());
            let h = x.layernorm_rows();
            let q = h.matmul(&blk.wq)?;
            let mut k = h.matmul(&blk.wk)?;
            let v = h.matmul(&blk.wv)?;
            cache_pre.k.push(k.clone());
            cache_pre.v.push(v.clone());
            if cfg.rope_enabled {
                k = self.rope.apply(&k, 0)?;
            }
            let mut heads: Vec<Tensor<S>> = Vec::with_capacity(cfg.q_heads);
            let kt = transpose(&k);
            let scale = crate::scalar::sc::<S>(1.0 / (cfg.head_dim as f64).sqrt());
            for hh in 0..cfg.q_heads {
                let mut qh = slice_cols(&q, hh * cfg.head_dim, cfg.head_dim);
                if cfg.rope_enabled {
                    qh = self.rope.apply(&qh, 0)?;
                }
                let scores = qh.matmul(&kt)?.map(|e| e * scale);
                let att = scores.softmax_rows();
                heads.push(att.matmul(&v)?);
            }
            let head_refs: Vec<&Tensor<S>> = heads.iter().collect();
            let concat = Tensor::hstack(&head_refs)?;
            x = x.add(&concat.matmul(&blk.wo)?);
            let h2 = x.layernorm_rows();
            let m = h2.matmul(&blk.w1)?.map(|e| e.tanh()).matmul(&blk.w2)?;
            x = x.add(&m);
            cache.k.push(k);
            cache.v.push(v);
            if l == cfg.stable_layer_index {
                s = Some(x.clone());
            }
        }
        debug_assert_eq!(layer_inputs.len(), cfg.layers);
        debug_assert_eq!(x.shape(), (n, cfg.d_model));
        Ok(BackboneOutput {
            z: x.layernorm_rows(),
            s: s.expect("stable index validated against layer count"),
            cache,
            cache_pre,
            layer_inputs,
        })
    }

    /// Parameters as a named store; the basis for content hashing and for
    /// writing the encoder into checkpoint files.
    pub fn to_store(&self) -> ParamStore<S> {
        let mut store = ParamStore::new();
        store.insert("embed", self.embed.clone()).expect("unique");
        store.insert("pos", self.pos.clone()).expect("unique");
        for (l, b) in self.blocks.iter().enumerate() {
            for (tag, t) in [
                ("wq", &b.wq),
                ("wk", &b.wk),
                ("wv", &b.wv),
                ("wo", &b.wo),
                ("w1", &b.w1),
                ("w2", &b.w2),
            ] {
                store
                    .insert(&format!("block{l}.{tag}"), (*t).clone())
                    .expect("unique");
            }
        }
        store
    }

    /// Content hash of the frozen weights.
    pub fn fingerprint(&self) -> String {
        store_hash(&self.to_store(), "backbone")
    }
}

fn transpose<S: Scalar>(t: &Tensor<S>) -> Tensor<S> {
    let (m, n) = t.shape();
    let mut out = Tensor::zeros(n, m);
    for i in 0..m {
        for j in 0..n {
            out.set(j, i, t.get(i, j));
        }
    }
    out
}

fn slice_cols<S: Scalar>(t: &Tensor<S>, start: usize, len: usize) -> Tensor<S> {
    let (m, _) = t.shape();
    let mut out = Tensor::zeros(m, len);
    for i in 0..m {
        out.row_mut(i).copy_from_slice(&t.row(i)[start..start + len]);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::{Env, TaskSpec};
    use crate::tensorkit::cosine_f64;

    fn obs_tokens(env: &Env) -> Tensor<f64> {
        env.observe().all_tokens()
    }

    #[test]
    fn forward_is_deterministic_and_shaped() {
        let bb: Backbone<f64> = Backbone::new(BackboneConfig::default(), 11).unwrap();
        let env = Env::reset(&TaskSpec::default(), 0).unwrap();
        let t = obs_tokens(&env);
        let a = bb.forward(&t).unwrap();
        let b = bb.forward(&t).unwrap();
        assert_eq!(a.z.data(), b.z.data());
        assert_eq!(a.z.shape(), (10, 32));
        assert_eq!(a.s.shape(), (10, 32));
        assert_eq!(a.cache.layers(), 4);
        for l in 0..4 {
            assert_eq!(a.cache.k[l].shape(), (10, 8));
            assert_eq!(a.cache.v[l].shape(), (10, 8));
        }
        assert!(a.cache.rope_applied);
    }

    #[test]
    fn different_seeds_give_different_encoders() {
        let a: Backbone<f64> = Backbone::new(BackboneConfig::default(), 1).unwrap();
        let b: Backbone<f64> = Backbone::new(BackboneConfig::default(), 2).unwrap();
        assert_ne!(a.embed.data(), b.embed.data());
        assert_ne!(a.fingerprint(), b.fingerprint());
        let c: Backbone<f64> = Backbone::new(BackboneConfig::default(), 1).unwrap();
        assert_eq!(a.fingerprint(), c.fingerprint());
    }

    #[test]
    fn cached_keys_are_the_rotated_projections_of_the_layer_inputs() {
        let bb: Backbone<f64> = Backbone::new(BackboneConfig::default(), 7).unwrap();
        let env = Env::reset(&TaskSpec::default(), 3).unwrap();
        let out = bb.forward(&obs_tokens(&env)).unwrap();
        for l in 0..bb.cfg.layers {
            let h = out.layer_inputs[l].layernorm_rows();
            let k = bb.rope.apply(&h.matmul(&bb.blocks[l].wk).unwrap(), 0).unwrap();
            let v = h.matmul(&bb.blocks[l].wv).unwrap();
            assert_eq!(out.cache.k[l].data(), k.data(), "layer {l} keys");
            assert_eq!(out.cache.v[l].data(), v.data(), "layer {l} values");
        }
    }

    #[test]
    fn rope_disabled_stores_plain_projections() {
        let cfg = BackboneConfig {
            rope_enabled: false,
            ..BackboneConfig::default()
        };
        let bb: Backbone<f64> = Backbone::new(cfg, 7).unwrap();
        let env = Env::reset(&TaskSpec::default(), 3).unwrap();
        let out = bb.forward(&obs_tokens(&env)).unwrap();
        assert!(!out.cache.rope_applied);
        let h = out.layer_inputs[0].layernorm_rows();
        let k = h.matmul(&bb.blocks[0].wk).unwrap();
        assert_eq!(out.cache.k[0].data(), k.data());
    }

    #[test]
    fn embedding_feeds_block_zero() {
        let bb: Backbone<f64> = Backbone::new(BackboneConfig::default(), 5).unwrap();
        let env = Env::reset(&TaskSpec::default(), 9).unwrap();
        let t = obs_tokens(&env);
        let out = bb.forward(&t).unwrap();
        assert_eq!(out.layer_inputs[0].data(), bb.embed_tokens(&t).unwrap().data());
    }

    #[test]
    fn stable_index_out_of_range_rejected() {
        let cfg = BackboneConfig {
            stable_layer_index: 4,
            ..BackboneConfig::default()
        };
        assert!(matches!(
            Backbone::<f64>::new(cfg, 0),
            Err(TeacherError::Config(_))
        ));
    }

    #[test]
    fn cache_flatten_layout_is_k_then_v_per_layer() {
        let bb: Backbone<f64> = Backbone::new(BackboneConfig::default(), 2).unwrap();
        let env = Env::reset(&TaskSpec::default(), 1).unwrap();
        let out = bb.forward(&obs_tokens(&env)).unwrap();
        let flat = out.cache.flatten().unwrap();
        assert_eq!(flat.shape(), (10, 4 * 16));
        for l in 0..4 {
            for j in 0..8 {
                assert_eq!(flat.get(3, l * 16 + j), out.cache.k[l].get(3, j));
                assert_eq!(flat.get(3, l * 16 + 8 + j), out.cache.v[l].get(3, j));
            }
        }
    }

    /// Consecutive-step feature stability along expert episodes: text rows
    /// barely move, and the mid-stack snapshot is measured against the final
    /// layer so regressions in either direction show up.
    #[test]
    fn text_rows_are_temporally_stable_along_episodes() {
        let bb: Backbone<f64> = Backbone::new(BackboneConfig::default(), 11).unwrap();
        let spec = TaskSpec::default();
        let mut text_cos = Vec::new();
        let mut img_cos = Vec::new();
        for seed in 0..10 {
            let mut env = Env::reset(&spec, seed).unwrap();
            let mut prev = bb.forward(&obs_tokens(&env)).unwrap();
            loop {
                let a = env.expert_action();
                let done = env.step(&a).unwrap().done;
                let cur = bb.forward(&obs_tokens(&env)).unwrap();
                for r in 0..10 {
                    let c = cosine_f64(prev.z.row(r), cur.z.row(r));
                    if r < 8 {
                        img_cos.push(c);
                    } else {
                        text_cos.push(c);
                    }
                }
                prev = cur;
                if done {
                    break;
                }
            }
        }
        let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
        let (mt, mi) = (mean(&text_cos), mean(&img_cos));
        assert!(mt > 0.999, "text-row consecutive cosine {mt}");
        assert!(mi > 0.95, "image-row consecutive cosine {mi}");
    }
}
