//! Per-task training with replay and distillation, and the stream driver.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{Instance, Ontology, Task, TaskStream, TypeId};
use crate::distill::{feature_kd_on_tape, prediction_kd_on_tape, TeacherSnapshot};
use crate::encoder::{FrozenEncoder, Lexicon};
use crate::error::{Error, Result};
use crate::eval::{old_new_breakdown, score_model, RunMetrics, Scored, StageMetrics};
use crate::head::Pathway;
use crate::memory::MemoryBuffer;
use crate::model::{ModelState, TokenCache};
use crate::numeric::{AdamW, AdamWConfig, GradMap, Tape};
use crate::prompts::{init_task_prompts, random_prompt, SynonymMap};
use crate::Real;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub grad_accumulation: usize,
    pub replay_interval: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub buffer_size: usize,
    pub temperature: f64,
    pub use_prompts: bool,
    pub use_epo: bool,
    pub use_einit: bool,
    pub use_replay: bool,
    pub use_kd: bool,
    pub prompts_frozen: bool,
    /// Fixed value for both loss weights instead of the type-count ratio.
    pub loss_weight: Option<f64>,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-4,
            weight_decay: 1e-2,
            grad_accumulation: 8,
            replay_interval: 10,
            max_epochs: 20,
            patience: 5,
            buffer_size: 20,
            temperature: 2.0,
            use_prompts: true,
            use_epo: true,
            use_einit: true,
            use_replay: true,
            use_kd: true,
            prompts_frozen: false,
            loss_weight: None,
            seed: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("learning_rate", self.learning_rate),
            ("temperature", self.temperature),
            ("grad_accumulation", self.grad_accumulation as f64),
            ("replay_interval", self.replay_interval as f64),
            ("max_epochs", self.max_epochs as f64),
            ("patience", self.patience as f64),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("train.{name} must be positive, got {v}")));
            }
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::Config(format!("train.weight_decay must be >= 0, got {}", self.weight_decay)));
        }
        if let Some(w) = self.loss_weight {
            if !(w >= 0.0 && w.is_finite()) {
                return Err(Error::Config(format!("train.loss_weight must be >= 0, got {w}")));
            }
        }
        Ok(())
    }

    pub fn pathway(&self) -> Pathway {
        Pathway {
            prompts: self.use_prompts,
            entangled: self.use_prompts && self.use_epo,
        }
    }

    pub fn optimizer(&self) -> AdamWConfig {
        AdamWConfig {
            learning_rate: self.learning_rate,
            weight_decay: self.weight_decay,
            ..AdamWConfig::default()
        }
    }

    fn weights(&self, n_old: usize, n_new: usize) -> Result<(Real, Real)> {
        match self.loss_weight {
            Some(w) => Ok((w, w)),
            None => compute_weights(n_old, n_new),
        }
    }
}

/// `α = β = n_old / (n_old + n_new)`.
pub fn compute_weights(n_old: usize, n_new: usize) -> Result<(Real, Real)> {
    if n_old + n_new == 0 {
        return Err(Error::Argument("no old or new types".into()));
    }
    let w = n_old as Real / (n_old + n_new) as Real;
    Ok((w, w))
}

/// Loss components of one training step; absent terms are 0.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossRecord {
    pub step: usize,
    pub l_c: Real,
    pub l_er: Real,
    pub l_pd: Real,
    pub l_fd: Real,
    pub total: Real,
}

pub const LOSS_HEADER: &str = "step,L_C,L_ER,L_PD,L_FD,total";

pub fn loss_log_csv(records: &[LossRecord]) -> String {
    let mut out = String::from(LOSS_HEADER);
    out.push('\n');
    for r in records {
        let _ = writeln!(out, "{},{},{},{},{},{}", r.step, r.l_c, r.l_er, r.l_pd, r.l_fd, r.total);
    }
    out
}

/// Everything one step's objective depends on besides the model.
#[derive(Clone, Copy, Debug)]
pub struct StepInputs<'a> {
    pub instance: &'a Instance,
    /// Replayed sentence, present only on replay steps.
    pub exemplar: Option<&'a Instance>,
    pub teacher: Option<&'a TeacherSnapshot>,
    pub alpha: Real,
    pub beta: Real,
    pub temperature: Real,
    pub pathway: Pathway,
}

/// `L_C + α L_ER + β (L_PD + L_FD)` and its gradient. Replay terms need an
/// exemplar and `α > 0`; distillation terms additionally need a teacher and
/// `β > 0`. The cache must already hold every sentence involved.
pub fn combined_loss(model: &ModelState, inputs: &StepInputs<'_>, cache: &TokenCache) -> Result<(LossRecord, GradMap<Real>)> {
    let pathway = inputs.pathway;
    let mut tape = Tape::new();
    let inst = inputs.instance;
    let gold = model.gold_classes(inst)?;
    let fwd = model.forward(&mut tape, &inst.tokens, &inst.spans(), pathway, true, cache.get(inst, pathway))?;
    let l_c = tape.cross_entropy(fwd.logits, &gold)?;
    let mut total = l_c;
    let mut rec = LossRecord {
        l_c: tape.scalar(l_c),
        ..LossRecord::default()
    };

    if let Some(ex) = inputs.exemplar.filter(|_| inputs.alpha > 0.0) {
        let gold = model.gold_classes(ex)?;
        let cached = cache.get(ex, pathway);
        let f = model.forward(&mut tape, &ex.tokens, &ex.spans(), pathway, true, cached)?;
        let l_er = tape.cross_entropy(f.logits, &gold)?;
        rec.l_er = tape.scalar(l_er);
        let w = tape.scale(l_er, inputs.alpha);
        total = tape.add(total, w)?;

        if let Some(teacher) = inputs.teacher.filter(|_| inputs.beta > 0.0) {
            let (t_logits, t_features) = teacher.outputs(ex, pathway, cached)?;
            let l_pd = prediction_kd_on_tape(&mut tape, f.logits, &t_logits, inputs.temperature)?;
            let l_fd = feature_kd_on_tape(&mut tape, f.features, t_features)?;
            rec.l_pd = tape.scalar(l_pd);
            rec.l_fd = tape.scalar(l_fd);
            let kd = tape.add(l_pd, l_fd)?;
            let w = tape.scale(kd, inputs.beta);
            total = tape.add(total, w)?;
        }
    }
    rec.total = tape.scalar(total);
    let grads = tape.backward(total)?;
    Ok((rec, grads))
}

/// Patience-based early stopping on a strictly improving score.
#[derive(Clone, Debug)]
pub struct EarlyStopping {
    patience: usize,
    best: Option<Real>,
    best_epoch: usize,
    since_best: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Verdict {
    Improved,
    Continue,
    Stop,
}

impl EarlyStopping {
    pub fn new(patience: usize) -> Self {
        Self {
            patience,
            best: None,
            best_epoch: 0,
            since_best: 0,
        }
    }

    pub fn observe(&mut self, epoch: usize, score: Real) -> Verdict {
        if self.best.is_none_or(|b| score > b) {
            self.best = Some(score);
            self.best_epoch = epoch;
            self.since_best = 0;
            return Verdict::Improved;
        }
        self.since_best += 1;
        if self.since_best >= self.patience {
            Verdict::Stop
        } else {
            Verdict::Continue
        }
    }

    pub fn best(&self) -> Option<Real> {
        self.best
    }

    pub fn best_epoch(&self) -> usize {
        self.best_epoch
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TaskReport {
    pub task: usize,
    pub dev_history: Vec<Real>,
    pub best_epoch: usize,
    pub optimizer_steps: u64,
    pub alpha: Real,
    pub beta: Real,
}

/// Word-embedding resources for name-based prompt initialisation.
#[derive(Clone, Debug, Default)]
pub struct PromptInit {
    pub lexicon: Lexicon,
    pub synonyms: SynonymMap,
}

/// Mutable training state across a task stream.
#[derive(Clone, Debug)]
pub struct Learner {
    pub config: TrainConfig,
    pub model: ModelState,
    pub memory: MemoryBuffer,
    pub teacher: Option<TeacherSnapshot>,
    pub loss_log: Vec<LossRecord>,
    prompt_init: PromptInit,
    cache: TokenCache,
    init_rng: ChaCha8Rng,
    shuffle_rng: ChaCha8Rng,
    replay_rng: ChaCha8Rng,
    global_step: usize,
}

impl Learner {
    pub fn new(encoder: Arc<FrozenEncoder>, config: TrainConfig, prompt_init: PromptInit) -> Result<Self> {
        config.validate()?;
        let mut init_rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut model = ModelState::new(encoder, &mut init_rng);
        model.bank.set_trainable(!config.prompts_frozen);
        let memory = MemoryBuffer::new(if config.use_replay { config.buffer_size } else { 0 });
        Ok(Self {
            shuffle_rng: ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(1)),
            replay_rng: ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(2)),
            config,
            model,
            memory,
            teacher: None,
            loss_log: Vec::new(),
            prompt_init,
            cache: TokenCache::new(),
            init_rng,
            global_step: 0,
        })
    }

    pub fn pathway(&self) -> Pathway {
        self.config.pathway()
    }

    /// Adds classifier rows and prompts for `task`'s types.
    pub fn extend_for(&mut self, task: &Task, ontology: &Ontology) -> Result<()> {
        let dim = self.model.head.dim();
        let prompts: Vec<Vec<Real>> = if self.config.use_einit {
            let names: Vec<&str> = task.types.iter().map(|&c| ontology.name(c)).collect();
            init_task_prompts(&names, &self.prompt_init.lexicon, &self.prompt_init.synonyms, &mut self.init_rng)?
                .into_iter()
                .map(|(v, _)| v)
                .collect()
        } else {
            task.types.iter().map(|_| random_prompt(&mut self.init_rng, dim)).collect()
        };
        if prompts.iter().any(|p| p.len() != dim) {
            return Err(Error::Config(format!("prompt lexicon dimension differs from encoder width {dim}")));
        }
        self.model.head.extend_classifier(&task.types, &mut self.init_rng)?;
        self.model.bank.extend(&task.types, &prompts, task.index)?;
        self.model.check_alignment()
    }

    /// Trains on one task: extend, epochs with dev early stopping, restore
    /// the best epoch, then fill memory and snapshot the teacher.
    pub fn train_task(&mut self, task: &Task, ontology: &Ontology, seen: &BTreeSet<TypeId>) -> Result<TaskReport> {
        if task.train.is_empty() {
            return Err(Error::Data(format!("task {} has no training sentences", task.index)));
        }
        let n_old = self.model.num_classes() - 1;
        let (alpha, beta) = self.config.weights(n_old, task.types.len())?;
        self.extend_for(task, ontology)?;

        let pathway = self.pathway();
        for inst in &task.train {
            self.cache.ensure(&self.model.encoder, inst, pathway)?;
        }
        let exemplars: Vec<Instance> = self.memory.iter().map(|e| e.instance.clone()).collect();
        for inst in &exemplars {
            self.cache.ensure(&self.model.encoder, inst, pathway)?;
        }

        let mut optimizer = AdamW::new(self.config.optimizer());
        let mut stopper = EarlyStopping::new(self.config.patience);
        let mut best = self.model.clone();
        let mut history = Vec::new();
        let mut order: Vec<usize> = (0..task.train.len()).collect();
        let mut step = 0usize;
        for epoch in 1..=self.config.max_epochs {
            order.shuffle(&mut self.shuffle_rng);
            let mut acc: GradMap<Real> = GradMap::new();
            let mut pending = 0usize;
            for &i in &order {
                let replay = self.config.use_replay && step.is_multiple_of(self.config.replay_interval);
                let exemplar = if replay {
                    self.memory.sample_replay(&mut self.replay_rng).map(|e| e.instance.clone())
                } else {
                    None
                };
                let inputs = StepInputs {
                    instance: &task.train[i],
                    exemplar: exemplar.as_ref(),
                    teacher: if self.config.use_kd { self.teacher.as_ref() } else { None },
                    alpha,
                    beta,
                    temperature: self.config.temperature,
                    pathway,
                };
                let (mut rec, grads) = combined_loss(&self.model, &inputs, &self.cache)?;
                rec.step = self.global_step;
                self.loss_log.push(rec);
                self.global_step += 1;
                step += 1;

                for (name, g) in grads {
                    match acc.get_mut(name) {
                        Some(a) => a.add_assign(&g)?,
                        None => {
                            acc.insert(name, g);
                        }
                    }
                }
                pending += 1;
                if pending == self.config.grad_accumulation {
                    let scale = 1.0 / pending as Real;
                    for g in acc.values_mut() {
                        g.scale_in_place(scale);
                    }
                    optimizer.step(&mut self.model, &acc)?;
                    acc.clear();
                    pending = 0;
                }
            }

            let f1 = score_model(&self.model, &task.dev, seen, pathway, &mut self.cache)?.micro.f1;
            history.push(f1);
            log::debug!("task {} epoch {epoch}: dev F1 {f1:.4}", task.index);
            match stopper.observe(epoch, f1) {
                Verdict::Improved => best = self.model.clone(),
                Verdict::Continue => {}
                Verdict::Stop => break,
            }
        }
        self.model = best;

        self.memory.build(&self.model, task, pathway, &mut self.cache)?;
        if self.config.use_kd {
            self.teacher = Some(TeacherSnapshot::of(&self.model));
        }
        Ok(TaskReport {
            task: task.index,
            dev_history: history,
            best_epoch: stopper.best_epoch(),
            optimizer_steps: optimizer.steps_taken(),
            alpha,
            beta,
        })
    }

    /// Scores the current model on `instances` against `seen`.
    pub fn evaluate(&mut self, instances: &[Instance], seen: &BTreeSet<TypeId>) -> Result<Scored> {
        let pathway = self.pathway();
        score_model(&self.model, instances, seen, pathway, &mut self.cache)
    }
}


/// Result of a full pass over a task stream.
#[derive(Clone, Debug)]
pub struct StreamOutcome {
    pub metrics: RunMetrics,
    pub reports: Vec<TaskReport>,
    pub learner: Learner,
}

/// Trains the tasks in order, scoring the full test split after each.
pub fn run_stream(
    stream: &TaskStream,
    encoder: Arc<FrozenEncoder>,
    config: TrainConfig,
    prompt_init: PromptInit,
) -> Result<StreamOutcome> {
    stream.validate()?;
    let mut learner = Learner::new(encoder, config, prompt_init)?;
    let mut metrics = RunMetrics {
        permutation_seed: stream.permutation_seed,
        stages: Vec::with_capacity(stream.len()),
    };
    let mut reports = Vec::with_capacity(stream.len());
    let mut previous = BTreeSet::new();
    for (t, task) in stream.tasks.iter().enumerate() {
        let seen = stream.seen_through(t);
        let report = learner.train_task(task, &stream.ontology, &seen)?;
        let scored = learner.evaluate(&stream.test, &seen)?;
        let (old_f1, new_f1) = old_new_breakdown(&scored.per_type, &task.types, &previous);
        log::info!(
            "stage {}: {} types seen, test F1 {:.4}, best dev epoch {}",
            t + 1,
            seen.len(),
            scored.micro.f1,
            report.best_epoch
        );
        metrics.stages.push(StageMetrics {
            stage: t + 1,
            split: "test".into(),
            seen_type_count: seen.len(),
            precision: scored.micro.precision,
            recall: scored.micro.recall,
            f1: scored.micro.f1,
            old_f1,
            new_f1,
            per_type: scored.per_type,
        });
        reports.push(report);
        previous = seen;
    }
    Ok(StreamOutcome {
        metrics,
        reports,
        learner,
    })
}
