//! Parameter storage and optimization.
//!
//! [`ParamStore`] keeps named tensors in declaration order; that order is the
//! serialization order of checkpoints and must stay stable across runs.
//! [`AdamW`] implements decoupled weight decay; the learning rate is supplied
//! per step so any schedule can drive it.

use std::collections::HashMap;

use super::{Tensor, TensorError};
use crate::scalar::{sc, Scalar};

/// Named parameters in stable declaration order.
#[derive(Debug, Clone)]
pub struct ParamStore<S> {
    names: Vec<String>,
    tensors: Vec<Tensor<S>>,
    index: HashMap<String, usize>,
}

impl<S: Scalar> Default for ParamStore<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> ParamStore<S> {
    pub fn new() -> Self {
        ParamStore {
            names: Vec::new(),
            tensors: Vec::new(),
            index: HashMap::new(),
        }
    }

    pub fn insert(&mut self, name: &str, t: Tensor<S>) -> Result<(), TensorError> {
        if self.index.contains_key(name) {
            return Err(TensorError::DuplicateParam(name.to_string()));
        }
        self.index.insert(name.to_string(), self.tensors.len());
        self.names.push(name.to_string());
        self.tensors.push(t);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<S>, TensorError> {
        self.index
            .get(name)
            .map(|&i| &self.tensors[i])
            .ok_or_else(|| TensorError::UnknownParam(name.to_string()))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor<S>, TensorError> {
        match self.index.get(name) {
            Some(&i) => Ok(&mut self.tensors[i]),
            None => Err(TensorError::UnknownParam(name.to_string())),
        }
    }

    pub fn contains(&self, name: &str) -> bool {
        self.index.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn numel(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    /// Entries in declaration order.
    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<S>)> {
        self.names
            .iter()
            .map(String::as_str)
            .zip(self.tensors.iter())
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    /// All values quantized through `f32`, the checkpoint storage precision.
    pub fn quantize_f32(&self) -> ParamStore<S> {
        let mut out = ParamStore::new();
        for (name, t) in self.iter() {
            out.insert(name, t.quantize_f32()).expect("unique names");
        }
        out
    }

    pub fn all_finite(&self) -> bool {
        self.tensors.iter().all(Tensor::is_finite)
    }
}

/// Parameters mounted onto a tape as leaves, keyed by store name.
///
/// One binding is valid for one tape; after `backward`, [`BoundParams::pull`]
/// routes node gradients back into a name-keyed [`GradMap`] so the optimizer
/// never sees tape node ids.
pub struct BoundParams {
    ids: HashMap<String, super::tape::NodeId>,
}

impl BoundParams {
    pub fn bind<S: Scalar>(tape: &mut super::tape::Tape<S>, store: &ParamStore<S>) -> BoundParams {
        let mut ids = HashMap::new();
        for (name, t) in store.iter() {
            ids.insert(name.to_string(), tape.leaf(t.clone()));
        }
        BoundParams { ids }
    }

    pub fn id(&self, name: &str) -> Result<super::tape::NodeId, TensorError> {
        self.ids
            .get(name)
            .copied()
            .ok_or_else(|| TensorError::UnknownParam(name.to_string()))
    }

    /// Point a name at a different node, typically a computed view of the
    /// original weight. Later look-ups resolve to the new node, and `pull`
    /// reads that node's gradient, so redirect a binding only when its
    /// gradients are pulled elsewhere or intentionally discarded.
    pub fn redirect(
        &mut self,
        name: &str,
        id: super::tape::NodeId,
    ) -> Result<(), TensorError> {
        match self.ids.get_mut(name) {
            Some(slot) => {
                *slot = id;
                Ok(())
            }
            None => Err(TensorError::UnknownParam(name.to_string())),
        }
    }

    /// Accumulate this tape's parameter gradients into `grads`. Parameters
    /// the loss never touched contribute nothing.
    pub fn pull<S: Scalar>(&self, tape_grads: &super::tape::Grads<S>, grads: &mut GradMap<S>) {
        for (name, &id) in &self.ids {
            if let Some(g) = tape_grads.get(id) {
                grads.accumulate(name, g);
            }
        }
    }
}

/// Accumulated gradients keyed by parameter name.
#[derive(Debug, Clone, Default)]
pub struct GradMap<S> {
    map: HashMap<String, Tensor<S>>,
}

impl<S: Scalar> GradMap<S> {
    pub fn new() -> Self {
        GradMap {
            map: HashMap::new(),
        }
    }

    /// Add `g` into the slot for `name`, creating it on first use.
    pub fn accumulate(&mut self, name: &str, g: &Tensor<S>) {
        match self.map.get_mut(name) {
            Some(t) => {
                debug_assert_eq!(t.shape(), g.shape());
                for (o, &v) in t.data_mut().iter_mut().zip(g.data()) {
                    *o = *o + v;
                }
            }
            None => {
                self.map.insert(name.to_string(), g.clone());
            }
        }
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<S>> {
        self.map.get(name)
    }

    pub fn scale_all(&mut self, c: S) {
        for t in self.map.values_mut() {
            for v in t.data_mut() {
                *v = *v * c;
            }
        }
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    /// Global L2 norm over every stored gradient, accumulated at `f64`.
    pub fn global_norm(&self) -> f64 {
        self.map
            .values()
            .map(Tensor::sq_norm_f64)
            .sum::<f64>()
            .sqrt()
    }
}

/// Scale all gradients so their global L2 norm does not exceed `max_norm`.
/// Returns the pre-clip norm. A non-finite norm aborts: optimizer state must
/// never ingest NaN or infinity.
pub fn clip_grad_norm<S: Scalar>(grads: &mut GradMap<S>, max_norm: f64) -> Result<f64, TensorError> {
    let norm = grads.global_norm();
    if !norm.is_finite() {
        return Err(TensorError::NonFinite {
            context: "gradient norm before clipping".into(),
        });
    }
    if norm > max_norm && norm > 0.0 {
        grads.scale_all(sc(max_norm / norm));
    }
    Ok(norm)
}

/// Half-cosine decay from `lr0` at step 0 to zero at `t_max`, clamped at zero
/// beyond `t_max`.
pub fn cosine_lr(step: u64, t_max: u64, lr0: f64) -> f64 {
    if t_max == 0 || step >= t_max {
        return 0.0;
    }
    lr0 * 0.5 * (1.0 + (std::f64::consts::PI * step as f64 / t_max as f64).cos())
}

/// AdamW hyperparameters. Decay is decoupled: it scales parameters directly
/// and never enters the moment estimates.
#[derive(Debug, Clone, Copy)]
pub struct AdamHyper {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamHyper {
    fn default() -> Self {
        AdamHyper {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-4,
        }
    }
}

/// AdamW state aligned with a specific [`ParamStore`] layout.
pub struct AdamW<S> {
    hyper: AdamHyper,
    step: u64,
    m: Vec<Tensor<S>>,
    v: Vec<Tensor<S>>,
}

impl<S: Scalar> AdamW<S> {
    pub fn new(store: &ParamStore<S>, hyper: AdamHyper) -> Self {
        let m = store
            .iter()
            .map(|(_, t)| Tensor::zeros(t.rows(), t.cols()))
            .collect();
        let v = store
            .iter()
            .map(|(_, t)| Tensor::zeros(t.rows(), t.cols()))
            .collect();
        AdamW {
            hyper,
            step: 0,
            m,
            v,
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// One update over every parameter in the store. Parameters without an
    /// entry in `grads` are treated as having a zero gradient: their moments
    /// decay and weight decay still applies.
    pub fn step(
        &mut self,
        store: &mut ParamStore<S>,
        grads: &GradMap<S>,
        lr: f64,
    ) -> Result<(), TensorError> {
        self.step += 1;
        let h = self.hyper;
        let b1: S = sc(h.beta1);
        let b2: S = sc(h.beta2);
        let one = S::one();
        let bc1: S = sc(1.0 - h.beta1.powi(self.step as i32));
        let bc2: S = sc(1.0 - h.beta2.powi(self.step as i32));
        let lr_s: S = sc(lr);
        let eps: S = sc(h.eps);
        let decay: S = sc(lr * h.weight_decay);
        let zero = S::zero();

        let names = store.names().to_vec();
        for (slot, name) in names.iter().enumerate() {
            let g_opt = grads.get(name).cloned();
            let p = store.get_mut(name)?;
            let m = &mut self.m[slot];
            let v = &mut self.v[slot];
            if let Some(g) = &g_opt {
                if g.shape() != p.shape() {
                    return Err(TensorError::Invalid {
                        op: "adamw",
                        detail: format!(
                            "gradient shape {:?} for parameter {name:?} of shape {:?}",
                            g.shape(),
                            p.shape()
                        ),
                    });
                }
                if !g.is_finite() {
                    return Err(TensorError::NonFinite {
                        context: format!("gradient of {name:?}"),
                    });
                }
            }
            for i in 0..p.numel() {
                let g = g_opt.as_ref().map_or(zero, |t| t.data()[i]);
                let pm = &mut m.data_mut()[i];
                *pm = b1 * *pm + (one - b1) * g;
                let pv = &mut v.data_mut()[i];
                *pv = b2 * *pv + (one - b2) * g * g;
                let mhat = *pm / bc1;
                let vhat = *pv / bc2;
                let pd = &mut p.data_mut()[i];
                *pd = *pd - decay * *pd - lr_s * mhat / (vhat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn single_step_moves_against_gradient() {
        let mut store = ParamStore::new();
        store.insert("p", Tensor::scalar(1.0f64)).unwrap();
        let mut opt = AdamW::new(
            &store,
            AdamHyper {
                weight_decay: 0.0,
                ..AdamHyper::default()
            },
        );
        let mut grads = GradMap::new();
        grads.accumulate("p", &Tensor::scalar(1.0));
        opt.step(&mut store, &grads, 0.1).unwrap();
        let p = store.get("p").unwrap().get(0, 0);
        assert!(p < 1.0, "positive gradient must decrease the parameter, got {p}");
    }

    #[test]
    fn quadratic_bowl_descends_monotonically_after_warmup() {
        // loss = sum(p^2) in four coordinates; gradient 2p.
        let mut store = ParamStore::new();
        store
            .insert("p", Tensor::from_f64_vec(1, 4, &[1.0, -2.0, 0.5, 3.0]).unwrap())
            .unwrap();
        let mut opt = AdamW::new(
            &store,
            AdamHyper {
                weight_decay: 0.0,
                ..AdamHyper::default()
            },
        );
        let loss = |s: &ParamStore<f64>| s.get("p").unwrap().sq_norm_f64();
        let mut losses = vec![loss(&store)];
        for _ in 0..10 {
            let mut grads = GradMap::new();
            grads.accumulate("p", &store.get("p").unwrap().scale(2.0));
            opt.step(&mut store, &grads, 0.05).unwrap();
            losses.push(loss(&store));
        }
        for w in losses.windows(2).skip(2) {
            assert!(w[1] < w[0], "loss must decrease after warm-up: {losses:?}");
        }
    }

    #[test]
    fn weight_decay_shrinks_parameters_without_gradient() {
        let mut store = ParamStore::new();
        store.insert("p", Tensor::scalar(2.0f64)).unwrap();
        let mut opt = AdamW::new(
            &store,
            AdamHyper {
                weight_decay: 0.1,
                ..AdamHyper::default()
            },
        );
        opt.step(&mut store, &GradMap::new(), 0.5).unwrap();
        let p = store.get("p").unwrap().get(0, 0);
        assert!((p - (2.0 - 0.5 * 0.1 * 2.0)).abs() < 1e-12);
    }

    #[test]
    fn nan_gradient_is_rejected() {
        let mut store = ParamStore::new();
        store.insert("p", Tensor::scalar(1.0f64)).unwrap();
        let mut opt = AdamW::new(&store, AdamHyper::default());
        let mut grads = GradMap::new();
        grads.accumulate("p", &Tensor::scalar(f64::NAN));
        assert!(matches!(
            opt.step(&mut store, &grads, 0.1),
            Err(TensorError::NonFinite { .. })
        ));
    }

    #[test]
    fn cosine_lr_endpoints() {
        assert_eq!(cosine_lr(0, 100, 3e-4), 3e-4);
        let mid = cosine_lr(50, 100, 3e-4);
        assert!((mid - 1.5e-4).abs() < 1e-12);
        assert_eq!(cosine_lr(100, 100, 3e-4), 0.0);
        assert_eq!(cosine_lr(250, 100, 3e-4), 0.0);
    }

    #[test]
    fn clip_rejects_nan() {
        let mut grads: GradMap<f64> = GradMap::new();
        grads.accumulate("p", &Tensor::scalar(f64::NAN));
        assert!(clip_grad_norm(&mut grads, 1.0).is_err());
    }

    #[test]
    fn clip_leaves_small_gradients_untouched() {
        let mut grads: GradMap<f64> = GradMap::new();
        grads.accumulate("p", &Tensor::from_f64_vec(1, 2, &[0.3, 0.4]).unwrap());
        let norm = clip_grad_norm(&mut grads, 1.0).unwrap();
        assert!((norm - 0.5).abs() < 1e-12);
        assert_eq!(grads.get("p").unwrap().to_f64_vec(), vec![0.3, 0.4]);
    }

    proptest! {
        #[test]
        fn clipped_norm_never_exceeds_max(
            vals in proptest::collection::vec(-100.0f64..100.0, 8),
            max_norm in 0.1f64..5.0,
        ) {
            let mut grads: GradMap<f64> = GradMap::new();
            grads.accumulate("a", &Tensor::from_f64_vec(1, 4, &vals[..4]).unwrap());
            grads.accumulate("b", &Tensor::from_f64_vec(1, 4, &vals[4..]).unwrap());
            let before = grads.global_norm();
            let reported = clip_grad_norm(&mut grads, max_norm).unwrap();
            prop_assert!((reported - before).abs() < 1e-9);
            prop_assert!(grads.global_norm() <= max_norm * (1.0 + 1e-9));
        }

        #[test]
        fn cosine_lr_is_monotone_nonincreasing(t_max in 1u64..500) {
            let mut prev = f64::INFINITY;
            for step in 0..=t_max {
                let lr = cosine_lr(step, t_max, 1.0);
                prop_assert!(lr <= prev + 1e-15);
                prev = lr;
            }
        }
    }
}
