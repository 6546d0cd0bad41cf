//! Micro-F1 scoring with unseen types as gold negatives, old/new group
//! breakdown, permutation averaging and the metrics CSV.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::data::{Instance, Label, Span, TypeId};
use crate::error::{contract, Error, Result};
use crate::head::Pathway;
use crate::model::{ModelState, TokenCache};
use crate::Real;

/// Identifies a target span: `(instance id, span)`.
pub type SpanKey = (usize, Span);

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Counts {
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct Prf {
    pub precision: Real,
    pub recall: Real,
    pub f1: Real,
}

impl Counts {
    pub fn add(&mut self, other: Counts) {
        self.tp += other.tp;
        self.fp += other.fp;
        self.fn_ += other.fn_;
    }

    /// Gold positive mentions.
    pub fn gold(&self) -> usize {
        self.tp + self.fn_
    }

    pub fn prf(&self) -> Prf {
        let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as Real / b as Real };
        let precision = ratio(self.tp, self.tp + self.fp);
        let recall = ratio(self.tp, self.tp + self.fn_);
        let f1 = if precision + recall == 0.0 {
            0.0
        } else {
            2.0 * precision * recall / (precision + recall)
        };
        Prf { precision, recall, f1 }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Scored {
    pub counts: Counts,
    pub micro: Prf,
    /// One-vs-rest counts for every type that was predicted or gold.
    pub per_type: BTreeMap<TypeId, Counts>,
}

/// Scores predictions against gold spans. Gold mentions of types outside
/// `seen` count as `Other`; `Other` is never a positive.
pub fn micro_f1(
    predictions: &BTreeMap<SpanKey, Label>,
    gold: &[(SpanKey, Label)],
    seen: &BTreeSet<TypeId>,
) -> Result<Scored> {
    let mut counts = Counts::default();
    let mut per_type: BTreeMap<TypeId, Counts> = BTreeMap::new();
    for (key, label) in gold {
        let pred = *predictions
            .get(key)
            .ok_or_else(|| contract!("no prediction for instance {} span {:?}", key.0, key.1))?;
        let gold_type = label.event().filter(|c| seen.contains(c));
        match (pred.event(), gold_type) {
            (Some(p), Some(g)) if p == g => {
                counts.tp += 1;
                per_type.entry(g).or_default().tp += 1;
            }
            (p, g) => {
                if let Some(p) = p {
                    counts.fp += 1;
                    per_type.entry(p).or_default().fp += 1;
                }
                if let Some(g) = g {
                    counts.fn_ += 1;
                    per_type.entry(g).or_default().fn_ += 1;
                }
            }
        }
    }
    Ok(Scored {
        counts,
        micro: counts.prf(),
        per_type,
    })
}

/// Pooled counts over the types in `group`.
pub fn group_counts(per_type: &BTreeMap<TypeId, Counts>, group: &BTreeSet<TypeId>) -> Counts {
    let mut total = Counts::default();
    for (c, n) in per_type {
        if group.contains(c) {
            total.add(*n);
        }
    }
    total
}

/// `(old, new)` group F1; a group without gold mentions is `None`.
pub fn old_new_breakdown(
    per_type: &BTreeMap<TypeId, Counts>,
    current: &[TypeId],
    previous: &BTreeSet<TypeId>,
) -> (Option<Real>, Option<Real>) {
    let group_f1 = |g: &BTreeSet<TypeId>| {
        let n = group_counts(per_type, g);
        (n.gold() > 0).then(|| n.prf().f1)
    };
    let new: BTreeSet<TypeId> = current.iter().copied().collect();
    (group_f1(previous), group_f1(&new))
}

/// Predicts every target span of `instances` and scores against `seen`.
pub fn score_model(
    model: &ModelState,
    instances: &[Instance],
    seen: &BTreeSet<TypeId>,
    pathway: Pathway,
    cache: &mut TokenCache,
) -> Result<Scored> {
    let mut predictions = BTreeMap::new();
    let mut gold = Vec::new();
    for inst in instances {
        cache.ensure(&model.encoder, inst, pathway)?;
        for p in model.predict(inst, pathway, cache.get(inst, pathway))? {
            predictions.insert((inst.id, p.span), p.label);
        }
        gold.extend(inst.targets.iter().map(|(s, l)| ((inst.id, *s), *l)));
    }
    micro_f1(&predictions, &gold, seen)
}

#[derive(Clone, Debug, PartialEq)]
pub struct StageMetrics {
    /// 1-based stage number.
    pub stage: usize,
    pub split: String,
    pub seen_type_count: usize,
    pub precision: Real,
    pub recall: Real,
    pub f1: Real,
    pub old_f1: Option<Real>,
    pub new_f1: Option<Real>,
    pub per_type: BTreeMap<TypeId, Counts>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct RunMetrics {
    pub permutation_seed: u64,
    pub stages: Vec<StageMetrics>,
}

pub const METRICS_HEADER: &str = "stage,split,seen_type_count,precision,recall,f1,old_f1,new_f1";

impl RunMetrics {
    pub fn final_f1(&self) -> Option<Real> {
        self.stages.last().map(|s| s.f1)
    }

    pub fn f1_curve(&self) -> Vec<Real> {
        self.stages.iter().map(|s| s.f1).collect()
    }

    pub fn to_csv(&self) -> String {
        let opt = |v: Option<Real>| v.map_or(String::new(), |x| x.to_string());
        let mut out = String::from(METRICS_HEADER);
        out.push('\n');
        for s in &self.stages {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{},{}",
                s.stage,
                s.split,
                s.seen_type_count,
                s.precision,
                s.recall,
                s.f1,
                opt(s.old_f1),
                opt(s.new_f1)
            );
        }
        out
    }

    /// Parses a metrics CSV back; per-type counts are not stored there.
    pub fn from_csv(text: &str) -> Result<Self> {
        let mut lines = text.lines().enumerate();
        match lines.next() {
            Some((_, h)) if h.trim() == METRICS_HEADER => {}
            _ => {
                return Err(Error::Parse {
                    line: 1,
                    message: format!("expected header `{METRICS_HEADER}`"),
                })
            }
        }
        let mut stages = Vec::new();
        for (n, line) in lines {
            if line.trim().is_empty() {
                continue;
            }
            let bad = |message: String| Error::Parse { line: n + 1, message };
            let fields: Vec<&str> = line.split(',').collect();
            if fields.len() != 8 {
                return Err(bad(format!("expected 8 fields, found {}", fields.len())));
            }
            let num = |i: usize| -> Result<Real> {
                let v: Real = fields[i]
                    .parse()
                    .map_err(|_| bad(format!("field {} is not a number: {:?}", i + 1, fields[i])))?;
                if !(0.0..=1.0).contains(&v) {
                    return Err(bad(format!("field {} out of [0, 1]: {v}", i + 1)));
                }
                Ok(v)
            };
            let opt = |i: usize| -> Result<Option<Real>> {
                if fields[i].is_empty() {
                    Ok(None)
                } else {
                    num(i).map(Some)
                }
            };
            let int = |i: usize| -> Result<usize> {
                fields[i]
                    .parse()
                    .map_err(|_| bad(format!("field {} is not an integer: {:?}", i + 1, fields[i])))
            };
            stages.push(StageMetrics {
                stage: int(0)?,
                split: fields[1].to_string(),
                seen_type_count: int(2)?,
                precision: num(3)?,
                recall: num(4)?,
                f1: num(5)?,
                old_f1: opt(6)?,
                new_f1: opt(7)?,
                per_type: BTreeMap::new(),
            });
        }
        Ok(Self {
            permutation_seed: 0,
            stages,
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AveragedStage {
    pub stage: usize,
    pub f1: Real,
    /// Mean over the runs where the group is present.
    pub old_f1: Option<Real>,
    pub new_f1: Option<Real>,
}

/// Per-stage arithmetic mean over runs.
pub fn permutation_average(runs: &[RunMetrics]) -> Result<Vec<AveragedStage>> {
    let Some(first) = runs.first() else {
        return Err(Error::Argument("no runs to average".into()));
    };
    let stages = first.stages.len();
    if let Some(r) = runs.iter().find(|r| r.stages.len() != stages) {
        return Err(contract!(
            "run with seed {} has {} stages, expected {stages}",
            r.permutation_seed,
            r.stages.len()
        ));
    }
    let mean_opt = |vals: Vec<Real>| (!vals.is_empty()).then(|| vals.iter().sum::<Real>() / vals.len() as Real);
    Ok((0..stages)
        .map(|i| AveragedStage {
            stage: first.stages[i].stage,
            f1: runs.iter().map(|r| r.stages[i].f1).sum::<Real>() / runs.len() as Real,
            old_f1: mean_opt(runs.iter().filter_map(|r| r.stages[i].old_f1).collect()),
            new_f1: mean_opt(runs.iter().filter_map(|r| r.stages[i].new_f1).collect()),
        })
        .collect())
}
