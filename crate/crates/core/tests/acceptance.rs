//! Acceptance suite. Runs every criterion, prints one PASS/FAIL line each,
//! and exits nonzero if any fails.

mod common;

use std::collections::BTreeSet;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::sync::Arc;
use std::time::{Duration, Instant};

use common::{brute_force_herding, naive_softmax};
use emp_core::data::{build_task_stream, gen_synthetic, Instance, Label, Span, SyntheticConfig, TypeId};
use emp_core::distill::{feature_kd, prediction_kd, TeacherSnapshot};
use emp_core::encoder::{EncoderConfig, FrozenEncoder};
use emp_core::eval::{micro_f1, RunMetrics};
use emp_core::experiment::{cmd_run, Checkpoint, ExperimentConfig, Resources, Variant, VariantOutcome, CHECKPOINT_FILE, METRICS_FILE};
use emp_core::head::Pathway;
use emp_core::model::{ModelState, TokenCache};
use emp_core::numeric::{grad_check, GradMap, ParamAccess, Tape, Tensor};
use emp_core::prompts::random_prompt;
use emp_core::trainer::{combined_loss, compute_weights, run_stream, Learner, PromptInit, StepInputs, TrainConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

type Verdict = Result<String, String>;

fn check(cond: bool, detail: String) -> Verdict {
    if cond {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn fail<E: std::fmt::Display>(e: E) -> String {
    format!("error: {e}")
}

// ---------------------------------------------------------------- 1

fn gradient_correctness() -> Verdict {
    let start = Instant::now();
    let encoder = Arc::new(
        FrozenEncoder::new(EncoderConfig {
            vocab_size: 64,
            embedding_dim: 16,
            num_layers: 2,
            num_heads: 2,
            feedforward_dim: 32,
            max_sequence_length: 16,
            seed: 21,
        })
        .map_err(fail)?,
    );
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut model = ModelState::new(Arc::clone(&encoder), &mut rng);
    let (t0, t1) = (TypeId(0), TypeId(1));
    model.head.extend_classifier(&[t0], &mut rng).map_err(fail)?;
    model.bank.extend(&[t0], &[random_prompt(&mut rng, 16)], 0).map_err(fail)?;
    let teacher = TeacherSnapshot::of(&model);
    model.head.extend_classifier(&[t1], &mut rng).map_err(fail)?;
    model.bank.extend(&[t1], &[random_prompt(&mut rng, 16)], 1).map_err(fail)?;
    // Move the student away from the teacher so distillation is non-trivial.
    let noise = Normal::new(0.0, 0.05).unwrap();
    for name in model.param_names() {
        if let Some(t) = model.param_mut(name) {
            t.data_mut().iter_mut().for_each(|v| *v += noise.sample(&mut rng));
        }
    }
    if model.bank.len() != 3 {
        return Err(format!("expected 3 prompts, found {}", model.bank.len()));
    }

    let sentence = Instance {
        id: 0,
        tokens: vec![3, 17, 5, 40, 22, 9, 31, 12],
        targets: vec![
            (Span::new(0, 0), Label::Other),
            (Span::new(2, 4), Label::Event(t1)),
            (Span::new(5, 5), Label::Event(t0)),
            (Span::new(7, 7), Label::Other),
        ],
    };
    let exemplar = Instance {
        id: 1,
        tokens: vec![8, 2, 33, 19, 6, 50, 27, 1],
        targets: vec![(Span::new(1, 1), Label::Other), (Span::new(3, 3), Label::Event(t0))],
    };
    let (alpha, beta) = compute_weights(1, 1).map_err(fail)?;
    let inputs = StepInputs {
        instance: &sentence,
        exemplar: Some(&exemplar),
        teacher: Some(&teacher),
        alpha,
        beta,
        temperature: 2.0,
        pathway: Pathway::FULL,
    };
    let cache = TokenCache::new();
    let (rec, grads) = combined_loss(&model, &inputs, &cache).map_err(fail)?;
    if rec.l_er == 0.0 || rec.l_pd == 0.0 || rec.l_fd == 0.0 {
        return Err(format!("a loss term is inactive: {rec:?}"));
    }
    let names: BTreeSet<&str> = model.param_names().into_iter().collect();
    let covered: BTreeSet<&str> = grads.keys().copied().collect();
    if covered != names {
        return Err(format!("gradient covers {covered:?}, trainable {names:?}"));
    }
    let report = grad_check(&mut model, 1e-5, |m: &ModelState, want| {
        let (rec, grads) = combined_loss(m, &inputs, &cache)?;
        Ok((rec.total, if want { grads } else { GradMap::new() }))
    })
    .map_err(fail)?;
    let secs = start.elapsed().as_secs_f64();
    check(
        report.max_relative_error < 1e-4 && secs < 60.0,
        format!(
            "max rel err {:.2e} over {} coordinates (worst {}), {secs:.1} s",
            report.max_relative_error,
            report.coordinates_checked,
            report.worst_param.map_or("none".into(), |(n, i)| format!("{n}[{i}]"))
        ),
    )
}

// ---------------------------------------------------------------- 2

fn herding_oracle() -> Verdict {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut compared = 0;
    for case in 0..100 {
        let n = rng.random_range(1..=50);
        let d = rng.random_range(1..=8);
        let f: Vec<Vec<f64>> = (0..n)
            .map(|_| (0..d).map(|_| rng.random_range(-3.0..3.0)).collect())
            .collect();
        let full = herding_select(&f, n)?;
        let oracle = brute_force_herding(&f, n);
        if full != oracle {
            return Err(format!("case {case}: {full:?} vs oracle {oracle:?}"));
        }
        let mut sorted = full.clone();
        sorted.sort();
        if sorted != (0..n).collect::<Vec<_>>() {
            return Err(format!("case {case}: m = n is not a permutation"));
        }
        let m = rng.random_range(0..=n);
        let part = herding_select(&f, m)?;
        if part != full[..m] {
            return Err(format!("case {case}: m={m} is not a prefix of m'={n}"));
        }
        compared += 1;
    }
    let secs = start.elapsed().as_secs_f64();
    check(secs < 10.0, format!("{compared} random sets match exactly, prefixes hold, {secs:.2} s"))
}

fn herding_select(f: &[Vec<f64>], m: usize) -> Result<Vec<usize>, String> {
    emp_core::memory::herding_select(f, m).map_err(fail)
}

// ---------------------------------------------------------------- 3

struct Small {
    corpus: emp_core::data::Corpus,
    encoder: Arc<FrozenEncoder>,
    init: PromptInit,
}

fn small() -> Small {
    let syn = gen_synthetic(&SyntheticConfig {
        n_types: 4,
        train_per_type: 24,
        dev_per_type: 4,
        test_per_type: 8,
        vocab_size: 120,
        embedding_dim: 16,
        ..SyntheticConfig::default()
    })
    .unwrap();
    let encoder = FrozenEncoder::with_lexicon(
        EncoderConfig {
            vocab_size: 128,
            embedding_dim: 16,
            num_layers: 2,
            num_heads: 2,
            feedforward_dim: 32,
            max_sequence_length: 24,
            seed: 9,
        },
        &syn.lexicon,
    )
    .unwrap();
    Small {
        corpus: syn.corpus,
        encoder: Arc::new(encoder),
        init: PromptInit {
            lexicon: syn.lexicon,
            synonyms: syn.synonyms,
        },
    }
}

fn small_train() -> TrainConfig {
    TrainConfig {
        learning_rate: 1e-3,
        max_epochs: 3,
        buffer_size: 4,
        ..TrainConfig::default()
    }
}

fn frozen_encoder() -> Verdict {
    let s = small();
    let stream = build_task_stream(&s.corpus, 2, 1).map_err(fail)?;
    let before = s.encoder.checksum();
    let out = run_stream(&stream, Arc::clone(&s.encoder), small_train(), s.init.clone()).map_err(fail)?;
    let after = out.learner.model.encoder.checksum();
    let trainable: BTreeSet<&str> = out.learner.model.param_names().into_iter().collect();

    // One more full step with replay and distillation active.
    let learner = &out.learner;
    let exemplar = learner.memory.iter().next().map(|e| e.instance.clone());
    let mut cache = TokenCache::new();
    let task = &stream.tasks[1];
    cache.ensure(&learner.model.encoder, &task.train[0], learner.pathway()).map_err(fail)?;
    let inputs = StepInputs {
        instance: &task.train[0],
        exemplar: exemplar.as_ref(),
        teacher: learner.teacher.as_ref(),
        alpha: 0.5,
        beta: 0.5,
        temperature: 2.0,
        pathway: learner.pathway(),
    };
    let (_, grads) = combined_loss(&learner.model, &inputs, &cache).map_err(fail)?;
    let foreign: Vec<&str> = grads.keys().copied().filter(|k| !trainable.contains(k)).collect();
    check(
        before == after && foreign.is_empty() && exemplar.is_some(),
        format!(
            "checksum {before:016x} before, {after:016x} after 2 tasks; gradient names {:?}, non-trainable {foreign:?}",
            grads.keys().collect::<Vec<_>>()
        ),
    )
}

// ---------------------------------------------------------------- 4

fn kd_properties() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let mut worst_gap = f64::INFINITY;
    let mut worst_same = 0.0f64;
    let mut worst_scale = 0.0f64;
    let mut worst_oracle = 0.0f64;
    for _ in 0..1000 {
        let k = rng.random_range(2..10);
        let t: Vec<f64> = (0..k).map(|_| rng.random_range(-8.0..8.0)).collect();
        let s: Vec<f64> = (0..k + rng.random_range(0..3)).map(|_| rng.random_range(-8.0..8.0)).collect();
        let q = naive_softmax(&t.iter().map(|v| v / 2.0).collect::<Vec<_>>());
        let h: f64 = -q.iter().map(|p| p * p.ln()).sum::<f64>();
        let l = prediction_kd(&t, &s, 2.0).map_err(fail)?;
        worst_gap = worst_gap.min(l - h);
        worst_same = worst_same.max((prediction_kd(&t, &t, 2.0).map_err(fail)? - h).abs());

        let p = naive_softmax(&s[..k].iter().map(|v| v / 2.0).collect::<Vec<_>>());
        let oracle: f64 = -q.iter().zip(&p).map(|(a, b)| a * b.ln()).sum::<f64>();
        worst_oracle = worst_oracle.max((l - oracle).abs());
        let student = Tensor::matrix(1, s.len(), s.clone()).unwrap();
        let teacher = Tensor::matrix(1, k, t.clone()).unwrap();
        let mut tape = Tape::new();
        let sv = tape.constant(&student);
        let lv = tape.soft_cross_entropy(sv, &teacher, 2.0).map_err(fail)?;
        worst_oracle = worst_oracle.max((tape.scalar(lv) - oracle).abs());

        let d = rng.random_range(2..12);
        let a: Vec<f64> = (0..d).map(|_| rng.random_range(-2.0..2.0)).collect();
        let b: Vec<f64> = (0..d).map(|_| rng.random_range(-2.0..2.0)).collect();
        let c = 10f64.powf(rng.random_range(-3.0..3.0));
        let scaled: Vec<f64> = b.iter().map(|v| v * c).collect();
        let diff = (feature_kd(&a, &b).map_err(fail)? - feature_kd(&a, &scaled).map_err(fail)?).abs();
        worst_scale = worst_scale.max(diff);
    }
    check(
        worst_gap >= -1e-12 && worst_same < 1e-9 && worst_scale < 1e-12 && worst_oracle < 1e-12,
        format!(
            "min L_PD-H {worst_gap:.3e}, coincident |L_PD-H| {worst_same:.1e}, L_FD scale drift {worst_scale:.1e}, \
             T=2 oracle gap {worst_oracle:.1e}"
        ),
    )
}

// ---------------------------------------------------------------- 5-7

const SEEDS: [u64; 5] = [1, 2, 3, 4, 5];

fn trend_config() -> ExperimentConfig {
    let mut c = ExperimentConfig::default();
    c.synthetic = SyntheticConfig {
        embedding_dim: 32,
        ..SyntheticConfig::default()
    };
    c.encoder = EncoderConfig {
        vocab_size: 512,
        embedding_dim: 32,
        num_layers: 1,
        num_heads: 2,
        feedforward_dim: 64,
        max_sequence_length: 32,
        seed: 13,
    };
    c.experiment.n_tasks = 5;
    c.experiment.permutation_seeds = SEEDS.to_vec();
    c
}

struct Trend {
    outcomes: Vec<VariantOutcome>,
    elapsed: Duration,
}

impl Trend {
    fn runs(&self, v: Variant) -> Result<Vec<&RunMetrics>, String> {
        let o = self
            .outcomes
            .iter()
            .find(|o| o.variant == v)
            .ok_or_else(|| format!("{v} was not run"))?;
        if let Some((seed, Err(e))) = o.runs.iter().find(|(_, r)| r.is_err()) {
            return Err(format!("{v} seed {seed} failed: {e}"));
        }
        Ok(o.metrics())
    }

    fn finals(&self, v: Variant) -> Result<Vec<f64>, String> {
        Ok(self.runs(v)?.iter().map(|m| m.final_f1().unwrap_or(0.0)).collect())
    }

    fn mean_final(&self, v: Variant) -> Result<f64, String> {
        let f = self.finals(v)?;
        Ok(f.iter().sum::<f64>() / f.len() as f64)
    }
}

fn run_trend(dir: &Path) -> Result<Trend, String> {
    let start = Instant::now();
    let variants = [
        Variant::Emp,
        Variant::Kcn,
        Variant::BertEd,
        Variant::Buffer(0),
        Variant::Buffer(10),
        Variant::WoEinit,
        Variant::WoEpo,
        Variant::WoKd,
        Variant::Discrete,
    ];
    let outcomes = cmd_run(&trend_config(), dir, &variants).map_err(fail)?;
    let elapsed = start.elapsed();
    for o in &outcomes {
        let f: Vec<String> = o
            .runs
            .iter()
            .map(|(_, r)| r.as_ref().map_or("err".into(), |m| format!("{:.3}", m.final_f1().unwrap_or(0.0))))
            .collect();
        println!("      {:<10} final F1 per seed [{}]", o.variant.label(), f.join(", "));
    }
    Ok(Trend { outcomes, elapsed })
}

fn forgetting_trend(t: &Trend) -> Verdict {
    let emp = t.mean_final(Variant::Emp)?;
    let kcn = t.mean_final(Variant::Kcn)?;
    let bert = t.mean_final(Variant::BertEd)?;
    let mins = t.elapsed.as_secs_f64() / 60.0;
    check(
        emp >= kcn && kcn >= bert && emp - bert >= 0.10,
        format!(
            "mean final F1 EMP {:.2} >= KCN {:.2} >= BERT-ED {:.2}, gap {:.2} pts; all trend runs {mins:.1} min",
            100.0 * emp,
            100.0 * kcn,
            100.0 * bert,
            100.0 * (emp - bert)
        ),
    )
}

fn buffer_sweep(t: &Trend) -> Verdict {
    let b0 = t.mean_final(Variant::Buffer(0))?;
    let b10 = t.mean_final(Variant::Buffer(10))?;
    let b20 = t.mean_final(Variant::Emp)?;
    check(
        b10 >= b0 - 0.01 && b20 >= b10 - 0.01,
        format!(
            "mean final F1 buffer 0: {:.2}, 10: {:.2}, 20: {:.2}",
            100.0 * b0,
            100.0 * b10,
            100.0 * b20
        ),
    )
}

fn ablation_structure(t: &Trend) -> Verdict {
    let emp = t.finals(Variant::Emp)?;
    let mut ok = true;
    let mut parts = Vec::new();
    for v in emp_core::experiment::ABLATIONS {
        let abl = t.finals(v)?;
        let wins = emp.iter().zip(&abl).filter(|(e, a)| e >= a).count();
        ok &= wins >= 4 && abl.len() == SEEDS.len();
        parts.push(format!(
            "{} {}/5 (mean {:.2})",
            v.label(),
            wins,
            100.0 * abl.iter().sum::<f64>() / abl.len() as f64
        ));
    }
    check(ok, format!("EMP >= ablation per seed: {}", parts.join(", ")))
}

// ---------------------------------------------------------------- 8

fn protocol_invariants() -> Verdict {
    let s = small();
    let stream = build_task_stream(&s.corpus, 2, 5).map_err(fail)?;
    stream.validate().map_err(fail)?;
    let covered: BTreeSet<TypeId> = stream.tasks.iter().flat_map(|t| t.types.iter().copied()).collect();
    let total: usize = stream.tasks.iter().map(|t| t.types.len()).sum();
    if covered.len() != s.corpus.ontology.len() || total != covered.len() {
        return Err("task type sets overlap or miss types".into());
    }
    if stream.test != s.corpus.test {
        return Err("stream test split differs from the full test split".into());
    }

    let mut learner = Learner::new(Arc::clone(&s.encoder), small_train(), s.init.clone()).map_err(fail)?;
    let mut n_seen = 0;
    for (t, task) in stream.tasks.iter().enumerate() {
        let seen = stream.seen_through(t);
        learner.train_task(task, &stream.ontology, &seen).map_err(fail)?;
        n_seen += task.types.len();
        if learner.model.bank.len() != 1 + n_seen || learner.model.num_classes() != 1 + seen.len() {
            return Err(format!(
                "stage {}: {} prompts, {} classifier rows, {} seen types",
                t + 1,
                learner.model.bank.len(),
                learner.model.num_classes(),
                seen.len()
            ));
        }
        // Every test mention of a seen type is scored; others are negatives.
        let scored = learner.evaluate(&stream.test, &seen).map_err(fail)?;
        let gold_seen = stream
            .test
            .iter()
            .flat_map(|i| &i.targets)
            .filter(|(_, l)| l.event().is_some_and(|c| seen.contains(&c)))
            .count();
        if scored.counts.gold() != gold_seen {
            return Err(format!("stage {}: scored {} gold mentions, expected {gold_seen}", t + 1, scored.counts.gold()));
        }
    }

    // Constructed fixture: an unseen-type mention is a gold negative.
    let key = |i| (i, Span::new(0, 0));
    let gold = vec![(key(0), Label::Event(TypeId(0))), (key(1), Label::Event(TypeId(3)))];
    let seen: BTreeSet<TypeId> = [TypeId(0)].into();
    let mut pred = std::collections::BTreeMap::from([(key(0), Label::Event(TypeId(0))), (key(1), Label::Other)]);
    let right = micro_f1(&pred, &gold, &seen).map_err(fail)?.micro.f1;
    pred.insert(key(1), Label::Event(TypeId(0)));
    let wrong = micro_f1(&pred, &gold, &seen).map_err(fail)?;
    check(
        right == 1.0 && wrong.counts.fp == 1 && wrong.counts.fn_ == 0,
        format!(
            "prompts = 1 + seen and classifier rows = 1 + seen at every stage; tasks disjoint and covering; \
             unseen mention predicted Other F1 {right}, predicted seen type fp {}",
            wrong.counts.fp
        ),
    )
}

// ---------------------------------------------------------------- 9

fn determinism() -> Verdict {
    let mut c = ExperimentConfig::default();
    c.synthetic = SyntheticConfig {
        n_types: 4,
        train_per_type: 20,
        dev_per_type: 4,
        test_per_type: 8,
        vocab_size: 120,
        embedding_dim: 16,
        ..SyntheticConfig::default()
    };
    c.encoder = EncoderConfig {
        vocab_size: 128,
        embedding_dim: 16,
        num_layers: 1,
        num_heads: 2,
        feedforward_dim: 32,
        max_sequence_length: 24,
        seed: 2,
    };
    c.train = small_train();
    c.experiment.n_tasks = 2;
    c.experiment.permutation_seeds = vec![1, 2];
    let variants = [Variant::Emp, Variant::Kcn];
    let a = tempfile::tempdir().map_err(fail)?;
    let b = tempfile::tempdir().map_err(fail)?;
    cmd_run(&c, a.path(), &variants).map_err(fail)?;
    cmd_run(&c, b.path(), &variants).map_err(fail)?;
    let mut files = 0;
    for v in variants {
        for seed in &c.experiment.permutation_seeds {
            let rel = Path::new(&v.label()).join(format!("perm_{seed}")).join(METRICS_FILE);
            let x = std::fs::read(a.path().join(&rel)).map_err(fail)?;
            let y = std::fs::read(b.path().join(&rel)).map_err(fail)?;
            if x != y {
                return Err(format!("{} differs between runs", rel.display()));
            }
            files += 1;
        }
    }

    let path = a.path().join("emp").join("perm_1").join(CHECKPOINT_FILE);
    let text = std::fs::read_to_string(&path).map_err(fail)?;
    let ckpt = Checkpoint::from_json(&text).map_err(fail)?;
    let encoder = Resources::prepare(&c).map_err(fail)?.encoder;
    let (model, memory) = ckpt.restore(encoder).map_err(fail)?;
    let again = Checkpoint::capture(&model, &memory);
    let mut bitwise = true;
    for name in model.param_names() {
        let t = ckpt.arrays.get(name).ok_or(format!("missing {name}"))?;
        let restored = model.param(name).ok_or(format!("missing {name}"))?;
        bitwise &= t.data().iter().zip(restored.data()).all(|(x, y)| x.to_bits() == y.to_bits());
    }
    check(
        bitwise && again.to_json() == text && again.memory == ckpt.memory,
        format!(
            "{files} metrics files byte-identical across two runs; checkpoint of {} arrays and {} exemplars round-trips bit-exactly",
            ckpt.arrays.len(),
            memory.len()
        ),
    )
}

// ----------------------------------------------------------------

fn guarded<F: FnOnce() -> Verdict>(f: F) -> Verdict {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(v) => v,
        Err(p) => Err(format!(
            "panicked: {}",
            p.downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default()
        )),
    }
}

fn main() {
    let start = Instant::now();
    let mut results: Vec<(usize, &str, Verdict)> = Vec::new();
    let mut report = |id: usize, name: &'static str, v: Verdict| {
        let (tag, detail) = match &v {
            Ok(d) => ("PASS", d),
            Err(d) => ("FAIL", d),
        };
        println!("[{tag}] criterion {id} {name}: {detail}");
        results.push((id, name, v));
    };
    println!("acceptance: running 9 criteria");
    report(1, "gradient correctness", guarded(gradient_correctness));
    report(2, "herding oracle", guarded(herding_oracle));
    report(3, "frozen encoder", guarded(frozen_encoder));
    report(4, "distillation properties", guarded(kd_properties));

    let dir = tempfile::tempdir().expect("temp dir");
    println!("      trend experiments: 9 methods x 5 permutations");
    match catch_unwind(AssertUnwindSafe(|| run_trend(dir.path()))) {
        Ok(Ok(trend)) => {
            report(5, "forgetting mitigation trend", guarded(|| forgetting_trend(&trend)));
            report(6, "buffer-size sweep", guarded(|| buffer_sweep(&trend)));
            report(7, "ablation structure", guarded(|| ablation_structure(&trend)));
        }
        other => {
            let e = match other {
                Ok(Err(e)) => e,
                _ => "trend runs panicked".to_string(),
            };
            for (id, name) in [(5, "forgetting mitigation trend"), (6, "buffer-size sweep"), (7, "ablation structure")] {
                report(id, name, Err(e.clone()));
            }
        }
    }
    report(8, "protocol invariants", guarded(protocol_invariants));
    report(9, "determinism", guarded(determinism));

    let failed: Vec<usize> = results.iter().filter(|(_, _, v)| v.is_err()).map(|(id, _, _)| *id).collect();
    println!(
        "acceptance: {} passed, {} failed in {:.1} s",
        results.len() - failed.len(),
        failed.len(),
        start.elapsed().as_secs_f64()
    );
    if !failed.is_empty() {
        std::process::exit(1);
    }
}
