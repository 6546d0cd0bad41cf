//! Herding exemplar selection and the replay buffer.

use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::{Instance, Label, Span, Task, TypeId};
use crate::error::{contract, Error, Result};
use crate::head::Pathway;
use crate::model::{ModelState, TokenCache};
use crate::numeric::Scalar;
use crate::Real;

pub const DEFAULT_BUFFER_SIZE: usize = 20;

/// Greedy herding: each step picks the unselected feature that keeps the
/// running mean of the selection closest to the overall mean. Returns
/// `min(m, n)` indices in selection order; ties go to the lowest index.
pub fn herding_select<S: Scalar>(features: &[Vec<S>], m: usize) -> Result<Vec<usize>> {
    let n = features.len();
    if n == 0 || m == 0 {
        return Ok(Vec::new());
    }
    let d = features[0].len();
    if let Some(bad) = features.iter().position(|f| f.len() != d) {
        return Err(contract!("feature {bad} has dim {}, expected {d}", features[bad].len()));
    }
    let inv_n = S::one() / S::lit(n as f64);
    let mut mu = vec![S::zero(); d];
    for f in features {
        for (a, &v) in mu.iter_mut().zip(f) {
            *a = *a + v;
        }
    }
    for a in &mut mu {
        *a = *a * inv_n;
    }

    let mut taken = vec![false; n];
    let mut sum = vec![S::zero(); d];
    let mut order = Vec::with_capacity(m.min(n));
    for k in 1..=m.min(n) {
        let inv_k = S::one() / S::lit(k as f64);
        let mut best: Option<(usize, S)> = None;
        for (i, f) in features.iter().enumerate() {
            if taken[i] {
                continue;
            }
            let dist = mu
                .iter()
                .zip(&sum)
                .zip(f)
                .map(|((&u, &s), &x)| {
                    let diff = u - (s + x) * inv_k;
                    diff * diff
                })
                .fold(S::zero(), |a, b| a + b);
            if best.is_none_or(|(_, b)| dist < b) {
                best = Some((i, dist));
            }
        }
        let (pick, _) = best.expect("an unselected index remains");
        taken[pick] = true;
        for (s, &x) in sum.iter_mut().zip(&features[pick]) {
            *s = *s + x;
        }
        order.push(pick);
    }
    Ok(order)
}

/// A stored training sentence (with its task-view targets) selected for
/// the mention `span` of type `type_id`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Exemplar {
    pub type_id: TypeId,
    pub span: Span,
    pub instance: Instance,
    /// Span feature at selection time.
    pub feature: Vec<Real>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MemoryBuffer {
    capacity: usize,
    per_type: BTreeMap<TypeId, Vec<Exemplar>>,
}

impl MemoryBuffer {
    pub fn new(capacity: usize) -> Self {
        Self {
            capacity,
            per_type: BTreeMap::new(),
        }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    /// Total stored exemplars.
    pub fn len(&self) -> usize {
        self.per_type.values().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn types(&self) -> impl Iterator<Item = TypeId> + '_ {
        self.per_type.keys().copied()
    }

    pub fn exemplars(&self, type_id: TypeId) -> &[Exemplar] {
        self.per_type.get(&type_id).map_or(&[], Vec::as_slice)
    }

    pub fn iter(&self) -> impl Iterator<Item = &Exemplar> {
        self.per_type.values().flatten()
    }

    /// Stores the exemplar list of a newly trained type.
    pub fn insert(&mut self, type_id: TypeId, exemplars: Vec<Exemplar>) -> Result<()> {
        if exemplars.len() > self.capacity {
            return Err(Error::Capacity(format!(
                "{} exemplars for type {} exceed capacity {}",
                exemplars.len(),
                type_id.0,
                self.capacity
            )));
        }
        if self.per_type.contains_key(&type_id) {
            return Err(contract!("type {} already has exemplars", type_id.0));
        }
        if let Some(e) = exemplars.iter().find(|e| e.type_id != type_id) {
            return Err(contract!("exemplar of type {} filed under {}", e.type_id.0, type_id.0));
        }
        self.per_type.insert(type_id, exemplars);
        Ok(())
    }

    /// Uniform draw over all stored exemplars; `None` when empty.
    pub fn sample_replay<R: Rng + ?Sized>(&self, rng: &mut R) -> Option<&Exemplar> {
        let n = self.len();
        if n == 0 {
            return None;
        }
        self.iter().nth(rng.random_range(0..n))
    }

    /// Selects exemplars for every type of `task` from its training view,
    /// using `model`'s span features on `pathway`.
    pub fn build(&mut self, model: &ModelState, task: &Task, pathway: Pathway, cache: &mut TokenCache) -> Result<()> {
        let mut mentions: BTreeMap<TypeId, Vec<(usize, Span, Vec<Real>)>> =
            task.types.iter().map(|&c| (c, Vec::new())).collect();
        if self.capacity > 0 {
            for (i, inst) in task.train.iter().enumerate() {
                let wanted: Vec<usize> = inst
                    .targets
                    .iter()
                    .enumerate()
                    .filter(|(_, (_, l))| l.event().is_some_and(|c| mentions.contains_key(&c)))
                    .map(|(r, _)| r)
                    .collect();
                if wanted.is_empty() {
                    continue;
                }
                cache.ensure(&model.encoder, inst, pathway)?;
                let (_, features) = model.outputs(inst, pathway, cache.get(inst, pathway))?;
                for r in wanted {
                    let (span, label) = inst.targets[r];
                    if let Label::Event(c) = label {
                        if let Some(list) = mentions.get_mut(&c) {
                            list.push((i, span, features.row(r).to_vec()));
                        }
                    }
                }
            }
        }
        for (c, list) in mentions {
            if list.is_empty() && self.capacity > 0 {
                log::warn!("type {} has no training mentions; storing no exemplars", c.0);
            }
            let feats: Vec<Vec<Real>> = list.iter().map(|(_, _, f)| f.clone()).collect();
            let picks = herding_select(&feats, self.capacity)?;
            let exemplars = picks
                .into_iter()
                .map(|p| {
                    let (i, span, ref feature) = list[p];
                    Exemplar {
                        type_id: c,
                        span,
                        instance: task.train[i].clone(),
                        feature: feature.clone(),
                    }
                })
                .collect();
            self.insert(c, exemplars)?;
        }
        Ok(())
    }
}
