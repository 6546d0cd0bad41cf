//! Experiment driver behind the command-line tool: configuration, data
//! generation, stream runs with checkpoints, and report aggregation.

use std::collections::BTreeMap;
use std::fmt::{self, Write as _};
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::data::{build_task_stream, gen_synthetic, load_corpus, load_ontology, ontology_text, Corpus, SyntheticConfig};
use crate::encoder::{load_embedding_lexicon, EncoderConfig, FrozenEncoder, Lexicon};
use crate::error::{Error, Result};
use crate::eval::{permutation_average, RunMetrics};
use crate::head::{SpanHead, CLS_BIAS, CLS_WEIGHT, SPAN_MLP};
use crate::memory::MemoryBuffer;
use crate::mlp::{Activation, Mlp};
use crate::model::{ModelState, PROMPTS, PROMPT_MLP};
use crate::numeric::{ParamAccess, Tensor};
use crate::prompts::{load_synonyms, PromptBank, PromptEntry, SynonymMap};
use crate::trainer::{loss_log_csv, run_stream, PromptInit, TrainConfig};
use crate::Real;

pub const CORPUS_FILE: &str = "corpus.jsonl";
pub const ONTOLOGY_FILE: &str = "ontology.txt";
pub const LEXICON_FILE: &str = "lexicon.txt";
pub const SYNONYMS_FILE: &str = "synonyms.txt";
pub const MANIFEST_FILE: &str = "manifest.toml";
pub const METRICS_FILE: &str = "metrics.csv";
pub const LOSSES_FILE: &str = "losses.csv";
pub const CHECKPOINT_FILE: &str = "checkpoint.json";
pub const FAILURES_FILE: &str = "failures.txt";
pub const REPORT_TABLE_FILE: &str = "report_table.csv";
pub const REPORT_PLOT_FILE: &str = "report_plot.csv";
pub const REPORT_BUFFER_FILE: &str = "report_buffer.csv";

/// Where the corpus comes from. Relative paths resolve against the config
/// file's directory. Without `corpus` a synthetic corpus is generated.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    pub corpus: Option<PathBuf>,
    pub ontology: Option<PathBuf>,
    pub lexicon: Option<PathBuf>,
    pub synonyms: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentSection {
    pub n_tasks: usize,
    pub permutation_seeds: Vec<u64>,
    pub methods: Vec<String>,
    pub buffer_sizes: Vec<usize>,
}

impl Default for ExperimentSection {
    fn default() -> Self {
        Self {
            n_tasks: 5,
            permutation_seeds: vec![1, 2, 3, 4, 5],
            methods: vec!["emp".into()],
            buffer_sizes: vec![0, 10, 20],
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub data: DataSection,
    pub synthetic: SyntheticConfig,
    pub encoder: EncoderConfig,
    pub train: TrainConfig,
    pub experiment: ExperimentSection,
}

impl ExperimentConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let config: Self = toml::from_str(text).map_err(|e| Error::Config(e.message().to_string()))?;
        config.validate()?;
        Ok(config)
    }

    /// Reads a config file and resolves its data paths against its folder.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut config = Self::parse(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })?;
        let base = path.parent().unwrap_or(Path::new("."));
        for p in [
            &mut config.data.corpus,
            &mut config.data.ontology,
            &mut config.data.lexicon,
            &mut config.data.synonyms,
        ]
        .into_iter()
        .flatten()
        {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        Ok(config)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serialises")
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        self.train.validate()?;
        if self.experiment.permutation_seeds.is_empty() {
            return Err(Error::Config("experiment.permutation_seeds is empty".into()));
        }
        if self.experiment.n_tasks == 0 {
            return Err(Error::Config("experiment.n_tasks must be positive".into()));
        }
        for m in &self.experiment.methods {
            m.parse::<Variant>()?;
        }
        if self.data.corpus.is_none() {
            if self.synthetic.embedding_dim != self.encoder.embedding_dim {
                return Err(Error::Config(format!(
                    "synthetic.embedding_dim {} differs from encoder.embedding_dim {}",
                    self.synthetic.embedding_dim, self.encoder.embedding_dim
                )));
            }
            if self.synthetic.vocab_size > self.encoder.vocab_size {
                return Err(Error::Config(format!(
                    "synthetic.vocab_size {} exceeds encoder.vocab_size {}",
                    self.synthetic.vocab_size, self.encoder.vocab_size
                )));
            }
        }
        Ok(())
    }
}

/// A training configuration to run: the full method, a baseline, an
/// ablation, or a buffer-size sweep point.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Variant {
    Emp,
    BertEd,
    Kcn,
    WoEinit,
    WoEpo,
    WoKd,
    Discrete,
    Upperbound,
    Buffer(usize),
}

pub const ABLATIONS: [Variant; 4] = [Variant::WoEinit, Variant::WoEpo, Variant::WoKd, Variant::Discrete];

impl Variant {
    pub fn label(&self) -> String {
        match self {
            Variant::Emp => "emp".into(),
            Variant::BertEd => "bert_ed".into(),
            Variant::Kcn => "kcn".into(),
            Variant::WoEinit => "wo_einit".into(),
            Variant::WoEpo => "wo_epo".into(),
            Variant::WoKd => "wo_kd".into(),
            Variant::Discrete => "discrete".into(),
            Variant::Upperbound => "upperbound".into(),
            Variant::Buffer(m) => format!("buffer_{m}"),
        }
    }

    /// The training configuration of this variant on top of `base`.
    pub fn apply(&self, base: &TrainConfig) -> TrainConfig {
        let mut c = base.clone();
        match *self {
            Variant::Emp | Variant::Upperbound => {}
            Variant::BertEd => {
                c.use_prompts = false;
                c.use_replay = false;
                c.use_kd = false;
            }
            Variant::Kcn => c.use_prompts = false,
            Variant::WoEinit => c.use_einit = false,
            Variant::WoEpo => c.use_epo = false,
            Variant::WoKd => c.use_kd = false,
            Variant::Discrete => c.prompts_frozen = true,
            Variant::Buffer(m) => c.buffer_size = m,
        }
        c
    }

    pub fn n_tasks(&self, configured: usize) -> usize {
        if *self == Variant::Upperbound {
            1
        } else {
            configured
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.label())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "emp" => Variant::Emp,
            "bert_ed" => Variant::BertEd,
            "kcn" => Variant::Kcn,
            "wo_einit" => Variant::WoEinit,
            "wo_epo" => Variant::WoEpo,
            "wo_kd" => Variant::WoKd,
            "discrete" => Variant::Discrete,
            "upperbound" => Variant::Upperbound,
            other => match other.strip_prefix("buffer_").and_then(|m| m.parse().ok()) {
                Some(m) => Variant::Buffer(m),
                None => {
                    return Err(Error::Config(format!(
                        "unknown method {other:?}; expected emp, bert_ed, kcn, wo_einit, wo_epo, wo_kd, \
                         discrete, upperbound or buffer_<m>"
                    )))
                }
            },
        })
    }
}

fn write_file(path: &Path, contents: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, contents).map_err(|e| Error::io(path, e))
}

fn read_file(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

/// Writes a synthetic corpus with its ontology, lexicon, synonym map and a
/// manifest of the generating config into `out`.
pub fn cmd_gen_data(config: &ExperimentConfig, out: &Path) -> Result<()> {
    let syn = gen_synthetic(&config.synthetic)?;
    write_file(&out.join(CORPUS_FILE), &syn.corpus.to_jsonl())?;
    write_file(&out.join(ONTOLOGY_FILE), &ontology_text(&syn.corpus.ontology))?;
    write_file(&out.join(LEXICON_FILE), &syn.lexicon.to_text())?;
    write_file(&out.join(SYNONYMS_FILE), &syn.synonyms.to_text())?;
    let mut manifest = config.clone();
    manifest.data = DataSection {
        corpus: Some(CORPUS_FILE.into()),
        ontology: Some(ONTOLOGY_FILE.into()),
        lexicon: Some(LEXICON_FILE.into()),
        synonyms: Some(SYNONYMS_FILE.into()),
    };
    write_file(&out.join(MANIFEST_FILE), &manifest.to_toml())
}

/// Corpus, encoder and prompt-initialisation resources for a run.
#[derive(Clone, Debug)]
pub struct Resources {
    pub corpus: Corpus,
    pub encoder: Arc<FrozenEncoder>,
    pub prompt_init: PromptInit,
}

impl Resources {
    pub fn prepare(config: &ExperimentConfig) -> Result<Self> {
        config.validate()?;
        let dim = config.encoder.embedding_dim;
        let (corpus, lexicon, synonyms) = match &config.data.corpus {
            None => {
                let syn = gen_synthetic(&config.synthetic)?;
                (syn.corpus, syn.lexicon, syn.synonyms)
            }
            Some(path) => {
                let ontology = config.data.ontology.as_ref().map(load_ontology).transpose()?;
                let corpus = load_corpus(path, ontology)?;
                let lexicon = match &config.data.lexicon {
                    Some(p) => load_embedding_lexicon(p, dim)?,
                    None => Lexicon::new(dim),
                };
                let synonyms = match &config.data.synonyms {
                    Some(p) => load_synonyms(p)?,
                    None => SynonymMap::default(),
                };
                (corpus, lexicon, synonyms)
            }
        };
        let max_token = [&corpus.train, &corpus.dev, &corpus.test]
            .into_iter()
            .flatten()
            .flat_map(|i| i.tokens.iter().copied())
            .max();
        if let Some(t) = max_token {
            if t as usize >= config.encoder.vocab_size {
                return Err(Error::Config(format!(
                    "corpus token id {t} is outside encoder.vocab_size {}",
                    config.encoder.vocab_size
                )));
            }
        }
        let encoder = if lexicon.is_empty() {
            FrozenEncoder::new(config.encoder.clone())?
        } else {
            FrozenEncoder::with_lexicon(config.encoder.clone(), &lexicon)?
        };
        Ok(Self {
            corpus,
            encoder: Arc::new(encoder),
            prompt_init: PromptInit { lexicon, synonyms },
        })
    }
}

/// Outcome of one variant over all permutation seeds.
#[derive(Clone, Debug)]
pub struct VariantOutcome {
    pub variant: Variant,
    /// `(seed, metrics or error message)` in seed order.
    pub runs: Vec<(u64, std::result::Result<RunMetrics, String>)>,
}

impl VariantOutcome {
    pub fn metrics(&self) -> Vec<&RunMetrics> {
        self.runs.iter().filter_map(|(_, r)| r.as_ref().ok()).collect()
    }
}

/// Runs every variant over every permutation seed, writing metrics, loss
/// logs and checkpoints under `out/<variant>/perm_<seed>/`. A failing run
/// is recorded in `failures.txt` and the remaining runs continue.
pub fn cmd_run(config: &ExperimentConfig, out: &Path, variants: &[Variant]) -> Result<Vec<VariantOutcome>> {
    let res = Resources::prepare(config)?;
    write_file(&out.join(MANIFEST_FILE), &config.to_toml())?;
    let mut failures = String::new();
    let mut outcomes = Vec::with_capacity(variants.len());
    for &variant in variants {
        let train = variant.apply(&config.train);
        let n_tasks = variant.n_tasks(config.experiment.n_tasks);
        let mut runs = Vec::new();
        for &seed in &config.experiment.permutation_seeds {
            let dir = out.join(variant.label()).join(format!("perm_{seed}"));
            log::info!("running {variant} with permutation seed {seed}");
            let result = run_one(&res, &train, n_tasks, seed, &dir);
            if let Err(e) = &result {
                log::error!("{variant} seed {seed} failed: {e}");
                let _ = writeln!(failures, "{variant}\tperm_{seed}\t{e}");
            }
            runs.push((seed, result.map_err(|e| e.to_string())));
        }
        outcomes.push(VariantOutcome { variant, runs });
    }
    write_file(&out.join(FAILURES_FILE), &failures)?;
    Ok(outcomes)
}

fn run_one(res: &Resources, train: &TrainConfig, n_tasks: usize, seed: u64, dir: &Path) -> Result<RunMetrics> {
    let stream = build_task_stream(&res.corpus, n_tasks, seed)?;
    let outcome = run_stream(&stream, Arc::clone(&res.encoder), train.clone(), res.prompt_init.clone())?;
    let learner = &outcome.learner;
    let checkpoint = Checkpoint::capture(&learner.model, &learner.memory);
    write_file(&dir.join(METRICS_FILE), &outcome.metrics.to_csv())?;
    write_file(&dir.join(LOSSES_FILE), &loss_log_csv(&learner.loss_log))?;
    write_file(&dir.join(CHECKPOINT_FILE), &checkpoint.to_json())?;
    Ok(outcome.metrics)
}

pub const CHECKPOINT_VERSION: u32 = 1;

/// Serialised trainable state: named flat arrays, the prompt bank layout
/// and the exemplar memory. The frozen encoder is identified by its config
/// and checksum rather than stored.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub version: u32,
    pub encoder: EncoderConfig,
    pub encoder_checksum: u64,
    pub arrays: BTreeMap<String, Tensor<Real>>,
    pub prompt_entries: Vec<PromptEntry>,
    pub prompts_trainable: bool,
    pub memory: MemoryBuffer,
}

impl Checkpoint {
    pub fn capture(model: &ModelState, memory: &MemoryBuffer) -> Self {
        let arrays = model
            .param_names()
            .into_iter()
            .filter_map(|n| model.param(n).map(|t| (n.to_string(), t.clone())))
            .collect();
        Self {
            version: CHECKPOINT_VERSION,
            encoder: model.encoder.config().clone(),
            encoder_checksum: model.encoder.checksum(),
            arrays,
            prompt_entries: model.bank.entries().to_vec(),
            prompts_trainable: model.bank.is_trainable(),
            memory: memory.clone(),
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("checkpoint serialises")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let c: Self = serde_json::from_str(text).map_err(|e| Error::Parse {
            line: e.line(),
            message: e.to_string(),
        })?;
        if c.version != CHECKPOINT_VERSION {
            return Err(Error::Config(format!(
                "checkpoint version {} is not supported (expected {CHECKPOINT_VERSION})",
                c.version
            )));
        }
        Ok(c)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json(&read_file(path.as_ref())?)
    }

    fn array(&self, name: &str) -> Result<Tensor<Real>> {
        self.arrays
            .get(name)
            .cloned()
            .ok_or_else(|| Error::Config(format!("checkpoint lacks array {name:?}")))
    }

    /// Rebuilds the model and memory on top of `encoder`, which must match
    /// the recorded checksum.
    pub fn restore(&self, encoder: Arc<FrozenEncoder>) -> Result<(ModelState, MemoryBuffer)> {
        if encoder.checksum() != self.encoder_checksum {
            return Err(Error::Config("checkpoint was written with a different encoder".into()));
        }
        let mlp = |names: [&str; 4]| -> Result<Mlp> {
            Ok(Mlp {
                w1: self.array(names[0])?,
                b1: self.array(names[1])?,
                w2: self.array(names[2])?,
                b2: self.array(names[3])?,
                activation: Activation::Tanh,
            })
        };
        let classes = self.prompt_entries.iter().map(|e| e.label).collect();
        let head = SpanHead::from_parts(mlp(SPAN_MLP)?, self.array(CLS_WEIGHT)?, self.array(CLS_BIAS)?, classes)?;
        let bank = PromptBank::from_parts(self.prompt_entries.clone(), self.array(PROMPTS)?, self.prompts_trainable)?;
        let model = ModelState {
            encoder,
            head,
            prompt_mlp: mlp(PROMPT_MLP)?,
            bank,
        };
        model.check_alignment()?;
        Ok((model, self.memory.clone()))
    }
}

/// Per-method permutation averages read back from a run directory.
#[derive(Clone, Debug, PartialEq)]
pub struct Report {
    pub table: String,
    pub plot: String,
    pub buffer: String,
}

/// Aggregates `run_dir/<method>/perm_*/metrics.csv` into a per-stage table
/// (F1 × 100), old/new plot data and buffer-size curve, written next to the
/// method folders.
pub fn cmd_report(run_dir: &Path) -> Result<Report> {
    let mut methods: BTreeMap<String, Vec<(String, RunMetrics)>> = BTreeMap::new();
    let entries = fs::read_dir(run_dir).map_err(|e| Error::io(run_dir, e))?;
    let mut dirs: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir())
        .collect();
    dirs.sort();
    for dir in dirs {
        let label = dir.file_name().and_then(|n| n.to_str()).unwrap_or_default().to_string();
        let mut perms: Vec<PathBuf> = fs::read_dir(&dir)
            .map_err(|e| Error::io(&dir, e))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.join(METRICS_FILE).is_file())
            .collect();
        perms.sort();
        for p in perms {
            let path = p.join(METRICS_FILE);
            let metrics = RunMetrics::from_csv(&read_file(&path)?).map_err(|e| match e {
                Error::Parse { line, message } => Error::Report(format!("{} line {line}: {message}", path.display())),
                other => other,
            })?;
            let perm = p.file_name().and_then(|n| n.to_str()).unwrap_or_default().to_string();
            methods.entry(label.clone()).or_default().push((perm, metrics));
        }
    }
    if methods.is_empty() {
        return Err(Error::Report(format!("no {METRICS_FILE} files under {}", run_dir.display())));
    }

    let mut gaps = Vec::new();
    let mut averaged = BTreeMap::new();
    for (label, runs) in &methods {
        let expected = runs.iter().map(|(_, r)| r.stages.len()).max().unwrap_or(0);
        for (perm, r) in runs {
            let stages: Vec<usize> = r.stages.iter().map(|s| s.stage).collect();
            let want: Vec<usize> = (1..=expected).collect();
            if stages != want {
                let missing: Vec<String> = want
                    .iter()
                    .filter(|s| !stages.contains(s))
                    .map(|s| s.to_string())
                    .collect();
                gaps.push(format!("{label}/{perm}: stages [{}] missing", missing.join(" ")));
            }
        }
        if gaps.is_empty() {
            let runs: Vec<RunMetrics> = runs.iter().map(|(_, r)| r.clone()).collect();
            averaged.insert(label.clone(), permutation_average(&runs)?);
        }
    }
    if !gaps.is_empty() {
        return Err(Error::Report(gaps.join("; ")));
    }

    let width = averaged.values().map(Vec::len).max().unwrap_or(0);
    let pct = |v: Real| format!("{:.2}", 100.0 * v);
    let opt = |v: Option<Real>| v.map_or(String::new(), pct);

    let mut table = String::from("method");
    for s in 1..=width {
        let _ = write!(table, ",stage_{s}");
    }
    table.push('\n');
    let mut plot = String::from("method,stage,f1,old_f1,new_f1\n");
    let mut curve: Vec<(usize, Real)> = Vec::new();
    for (label, stages) in &averaged {
        table.push_str(label);
        for s in stages {
            let _ = write!(table, ",{}", pct(s.f1));
            let _ = writeln!(plot, "{label},{},{},{},{}", s.stage, pct(s.f1), opt(s.old_f1), opt(s.new_f1));
        }
        table.push('\n');
        if let Ok(Variant::Buffer(m)) = label.parse::<Variant>() {
            if let Some(last) = stages.last() {
                curve.push((m, last.f1));
            }
        }
    }
    curve.sort_by_key(|(m, _)| *m);
    let mut buffer = String::from("buffer_size,final_f1\n");
    for (m, f1) in curve {
        let _ = writeln!(buffer, "{m},{}", pct(f1));
    }

    write_file(&run_dir.join(REPORT_TABLE_FILE), &table)?;
    write_file(&run_dir.join(REPORT_PLOT_FILE), &plot)?;
    write_file(&run_dir.join(REPORT_BUFFER_FILE), &buffer)?;
    Ok(Report { table, plot, buffer })
}
