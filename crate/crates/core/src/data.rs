//! Corpus records, class-incremental task streams and the synthetic corpus
//! generator.

use std::collections::{BTreeSet, HashMap};
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::encoder::Lexicon;
use crate::error::{Error, Result};
use crate::init::normal_vec;
use crate::prompts::SynonymMap;
use crate::Real;

/// Index of an event type in the ontology.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct TypeId(pub u32);

/// Gold or predicted label of a target span.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Label {
    Other,
    Event(TypeId),
}

impl Label {
    pub fn event(self) -> Option<TypeId> {
        match self {
            Label::Other => None,
            Label::Event(t) => Some(t),
        }
    }
}

/// Inclusive token span `start..=end`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Span {
    pub start: usize,
    pub end: usize,
}

impl Span {
    pub fn new(start: usize, end: usize) -> Self {
        Self { start, end }
    }
}

/// One sentence with its labelled target spans.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Instance {
    pub id: usize,
    pub tokens: Vec<u32>,
    pub targets: Vec<(Span, Label)>,
}

impl Instance {
    pub fn validate(&self) -> Result<()> {
        for (span, _) in &self.targets {
            if span.start > span.end || span.end >= self.tokens.len() {
                return Err(Error::Data(format!(
                    "instance {}: span ({}, {}) outside sentence of length {}",
                    self.id,
                    span.start,
                    span.end,
                    self.tokens.len()
                )));
            }
        }
        Ok(())
    }

    pub fn spans(&self) -> Vec<(usize, usize)> {
        self.targets.iter().map(|(s, _)| (s.start, s.end)).collect()
    }

    pub fn has_event_in(&self, types: &BTreeSet<TypeId>) -> bool {
        self.targets
            .iter()
            .any(|(_, l)| l.event().is_some_and(|t| types.contains(&t)))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Dev,
    Test,
}

/// Ordered event-type names; position is the [`TypeId`].
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Ontology {
    names: Vec<String>,
    index: HashMap<String, TypeId>,
}

pub const OTHER_NAME: &str = "Other";

impl Ontology {
    pub fn new(names: Vec<String>) -> Result<Self> {
        let mut index = HashMap::new();
        for (i, n) in names.iter().enumerate() {
            if n.is_empty() || n == OTHER_NAME {
                return Err(Error::Data(format!("invalid event type name {n:?}")));
            }
            if index.insert(n.clone(), TypeId(i as u32)).is_some() {
                return Err(Error::Data(format!("duplicate event type {n:?}")));
            }
        }
        Ok(Self { names, index })
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn name(&self, id: TypeId) -> &str {
        &self.names[id.0 as usize]
    }

    pub fn id(&self, name: &str) -> Option<TypeId> {
        self.index.get(name).copied()
    }

    pub fn ids(&self) -> impl Iterator<Item = TypeId> {
        (0..self.names.len() as u32).map(TypeId)
    }

    pub fn label_name(&self, label: Label) -> &str {
        match label {
            Label::Other => OTHER_NAME,
            Label::Event(t) => self.name(t),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Corpus {
    pub ontology: Ontology,
    pub train: Vec<Instance>,
    pub dev: Vec<Instance>,
    pub test: Vec<Instance>,
}

#[derive(Serialize, Deserialize)]
struct Record {
    tokens: Vec<u32>,
    spans: Vec<(usize, usize, String)>,
    split: Split,
}

impl Corpus {
    pub fn split(&self, split: Split) -> &[Instance] {
        match split {
            Split::Train => &self.train,
            Split::Dev => &self.dev,
            Split::Test => &self.test,
        }
    }

    /// Line-delimited JSON records, train then dev then test.
    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for split in [Split::Train, Split::Dev, Split::Test] {
            for inst in self.split(split) {
                let rec = Record {
                    tokens: inst.tokens.clone(),
                    spans: inst
                        .targets
                        .iter()
                        .map(|(s, l)| (s.start, s.end, self.ontology.label_name(*l).to_string()))
                        .collect(),
                    split,
                };
                out.push_str(&serde_json::to_string(&rec).expect("record serialises"));
                out.push('\n');
            }
        }
        out
    }

    /// Parses line-delimited records. Without an explicit ontology the type
    /// set is the sorted set of names seen.
    pub fn from_jsonl(text: &str, ontology: Option<Ontology>) -> Result<Self> {
        let mut records = Vec::new();
        for (n, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let rec: Record = serde_json::from_str(line).map_err(|e| Error::Parse {
                line: n + 1,
                message: e.to_string(),
            })?;
            records.push((n + 1, rec));
        }
        let ontology = match ontology {
            Some(o) => o,
            None => {
                let names: BTreeSet<&str> = records
                    .iter()
                    .flat_map(|(_, r)| r.spans.iter().map(|s| s.2.as_str()))
                    .filter(|n| *n != OTHER_NAME)
                    .collect();
                Ontology::new(names.into_iter().map(String::from).collect())?
            }
        };
        let mut corpus = Corpus {
            ontology,
            ..Corpus::default()
        };
        for (id, (line, rec)) in records.into_iter().enumerate() {
            let mut targets = Vec::with_capacity(rec.spans.len());
            for (i, j, name) in rec.spans {
                let label = if name == OTHER_NAME {
                    Label::Other
                } else {
                    Label::Event(corpus.ontology.id(&name).ok_or_else(|| {
                        Error::Data(format!("line {line}: type {name:?} not in ontology"))
                    })?)
                };
                targets.push((Span::new(i, j), label));
            }
            let inst = Instance {
                id,
                tokens: rec.tokens,
                targets,
            };
            inst.validate()
                .map_err(|e| Error::Data(format!("line {line}: {e}")))?;
            match rec.split {
                Split::Train => corpus.train.push(inst),
                Split::Dev => corpus.dev.push(inst),
                Split::Test => corpus.test.push(inst),
            }
        }
        Ok(corpus)
    }
}

pub fn load_corpus(path: impl AsRef<Path>, ontology: Option<Ontology>) -> Result<Corpus> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Corpus::from_jsonl(&text, ontology)
}

/// One event type name per line.
pub fn load_ontology(path: impl AsRef<Path>) -> Result<Ontology> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ontology::new(
        text.lines()
            .map(str::trim)
            .filter(|l| !l.is_empty())
            .map(String::from)
            .collect(),
    )
}

pub fn ontology_text(ontology: &Ontology) -> String {
    ontology.names().iter().fold(String::new(), |mut s, n| {
        writeln!(s, "{n}").expect("write to string");
        s
    })
}

/// One class-incremental task: its new types and its data views.
#[derive(Clone, Debug)]
pub struct Task {
    pub index: usize,
    pub types: Vec<TypeId>,
    /// Sentences with a trigger of this task; only this task's triggers and
    /// true negatives (`Other`) remain as targets.
    pub train: Vec<Instance>,
    /// Dev sentences mentioning any type seen so far, all targets kept.
    pub dev: Vec<Instance>,
}

#[derive(Clone, Debug)]
pub struct TaskStream {
    pub permutation_seed: u64,
    pub ontology: Ontology,
    pub tasks: Vec<Task>,
    /// The full, unpartitioned test split.
    pub test: Vec<Instance>,
}

impl TaskStream {
    pub fn len(&self) -> usize {
        self.tasks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tasks.is_empty()
    }

    /// Types learned up to and including task `t` (0-based).
    pub fn seen_through(&self, t: usize) -> BTreeSet<TypeId> {
        self.tasks[..=t].iter().flat_map(|k| k.types.iter().copied()).collect()
    }

    /// Checks pairwise disjointness and full ontology coverage.
    pub fn validate(&self) -> Result<()> {
        let mut seen = BTreeSet::new();
        for task in &self.tasks {
            for t in &task.types {
                if !seen.insert(*t) {
                    return Err(Error::Data(format!("type {t:?} appears in two tasks")));
                }
            }
        }
        if seen.len() != self.ontology.len() {
            return Err(Error::Data(format!(
                "tasks cover {} of {} types",
                seen.len(),
                self.ontology.len()
            )));
        }
        Ok(())
    }
}

/// Partitions the ontology into `n_tasks` near-equal disjoint groups: a
/// seeded shuffle, then contiguous chunks, with remainder types going one
/// per task from the front.
pub fn partition_ontology(n_types: usize, n_tasks: usize, seed: u64) -> Result<Vec<Vec<TypeId>>> {
    if n_tasks == 0 || n_tasks > n_types {
        return Err(Error::Config(format!(
            "cannot split {n_types} types into {n_tasks} tasks"
        )));
    }
    let mut order: Vec<TypeId> = (0..n_types as u32).map(TypeId).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    order.shuffle(&mut rng);
    let (base, rem) = (n_types / n_tasks, n_types % n_tasks);
    let mut groups = Vec::with_capacity(n_tasks);
    let mut at = 0;
    for t in 0..n_tasks {
        let size = base + usize::from(t < rem);
        groups.push(order[at..at + size].to_vec());
        at += size;
    }
    Ok(groups)
}

pub fn build_task_stream(corpus: &Corpus, n_tasks: usize, permutation_seed: u64) -> Result<TaskStream> {
    let groups = partition_ontology(corpus.ontology.len(), n_tasks, permutation_seed)?;
    let mut seen = BTreeSet::new();
    let mut tasks = Vec::with_capacity(n_tasks);
    for (index, types) in groups.into_iter().enumerate() {
        let current: BTreeSet<TypeId> = types.iter().copied().collect();
        seen.extend(current.iter().copied());
        let train = corpus
            .train
            .iter()
            .filter(|inst| inst.has_event_in(&current))
            .map(|inst| Instance {
                id: inst.id,
                tokens: inst.tokens.clone(),
                targets: inst
                    .targets
                    .iter()
                    .filter(|(_, l)| match l {
                        Label::Other => true,
                        Label::Event(t) => current.contains(t),
                    })
                    .copied()
                    .collect(),
            })
            .collect();
        let dev = corpus
            .dev
            .iter()
            .filter(|inst| inst.has_event_in(&seen))
            .cloned()
            .collect();
        tasks.push(Task {
            index,
            types,
            train,
            dev,
        });
    }
    let stream = TaskStream {
        permutation_seed,
        ontology: corpus.ontology.clone(),
        tasks,
        test: corpus.test.clone(),
    };
    stream.validate()?;
    Ok(stream)
}

/// Parameters of the synthetic corpus.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticConfig {
    pub n_types: usize,
    pub train_per_type: usize,
    pub dev_per_type: usize,
    pub test_per_type: usize,
    pub vocab_size: usize,
    pub embedding_dim: usize,
    pub triggers_per_type: usize,
    /// Spread of trigger embeddings around their type centre, relative to
    /// the centre norm. 0 puts every trigger exactly on its centre.
    pub noise: Real,
    pub min_len: usize,
    pub max_len: usize,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            n_types: 10,
            train_per_type: 200,
            dev_per_type: 20,
            test_per_type: 40,
            vocab_size: 400,
            embedding_dim: 64,
            triggers_per_type: 4,
            noise: 1.5,
            min_len: 6,
            max_len: 10,
            seed: 7,
        }
    }
}

/// Type names with single-token, multi-token and out-of-lexicon cases.
const BASE_NAMES: [&str; 20] = [
    "attack",
    "transport",
    "meet",
    "die",
    "elect",
    "transfer money",
    "arrest jail",
    "injure",
    "extraditing",
    "declare bankruptcy",
    "marry",
    "sue",
    "convict",
    "demonstrate",
    "phone write",
    "start organization",
    "end position",
    "acquit",
    "appeal",
    "pardon",
];

/// Out-of-lexicon name words and the in-lexicon synonym used for them.
const OOV_SYNONYMS: [(&str, &str); 1] = [("extraditing", "extradite")];

/// Synthetic corpus with the lexicon and synonym map that describe it.
#[derive(Clone, Debug)]
pub struct SyntheticCorpus {
    pub corpus: Corpus,
    pub lexicon: Lexicon,
    pub synonyms: SynonymMap,
}

fn type_name(k: usize) -> String {
    if k < BASE_NAMES.len() {
        BASE_NAMES[k].to_string()
    } else {
        format!("event{k}")
    }
}

/// Generates a seeded corpus where each event type owns a cluster of
/// trigger tokens around a type centre in embedding space. Type-name words
/// sit on the centre (multi-word names average to it), so name-based prompt
/// initialisation carries real signal. Filler tokens are drawn independently
/// and serve as `Other` spans.
pub fn gen_synthetic(config: &SyntheticConfig) -> Result<SyntheticCorpus> {
    let c = config;
    if c.n_types == 0 || c.embedding_dim == 0 || c.triggers_per_type == 0 {
        return Err(Error::Config("synthetic sizes must be positive".into()));
    }
    if c.min_len < 2 || c.min_len > c.max_len {
        return Err(Error::Config(format!(
            "sentence length range {}..={} is infeasible",
            c.min_len, c.max_len
        )));
    }
    if !(c.noise >= 0.0 && c.noise.is_finite()) {
        return Err(Error::Config(format!("noise must be non-negative, got {}", c.noise)));
    }
    let names: Vec<String> = (0..c.n_types).map(type_name).collect();
    let name_words: Vec<Vec<String>> = names
        .iter()
        .map(|n| {
            n.split_whitespace()
                .map(|w| {
                    OOV_SYNONYMS
                        .iter()
                        .find(|(oov, _)| *oov == w)
                        .map_or(w.to_string(), |(_, syn)| syn.to_string())
                })
                .collect()
        })
        .collect();
    let n_name_words: usize = name_words.iter().map(Vec::len).sum();
    let n_triggers = c.n_types * c.triggers_per_type;
    const MIN_FILLERS: usize = 16;
    if c.vocab_size < n_name_words + n_triggers + MIN_FILLERS {
        return Err(Error::Config(format!(
            "vocab_size {} too small: need {} name words + {} triggers + {} fillers",
            c.vocab_size, n_name_words, n_triggers, MIN_FILLERS
        )));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(c.seed);
    let e = c.embedding_dim;
    let unit = 1.0 / (e as Real).sqrt();
    let centres: Vec<Vec<Real>> = (0..c.n_types).map(|_| normal_vec(&mut rng, e, unit)).collect();

    let mut lexicon = Lexicon::new(e);
    for (k, words) in name_words.iter().enumerate() {
        if words.len() == 1 {
            lexicon.insert(&words[0], centres[k].clone())?;
            continue;
        }
        // Offsets that cancel, so the word average is exactly the centre.
        let mut offsets: Vec<Vec<Real>> = (0..words.len() - 1)
            .map(|_| normal_vec(&mut rng, e, 0.5 * unit))
            .collect();
        let last: Vec<Real> = (0..e).map(|d| -offsets.iter().map(|o| o[d]).sum::<Real>()).collect();
        offsets.push(last);
        for (w, off) in words.iter().zip(&offsets) {
            let v: Vec<Real> = centres[k].iter().zip(off).map(|(a, b)| a + b).collect();
            lexicon.insert(w, v)?;
        }
    }
    let mut trigger_ids = vec![Vec::with_capacity(c.triggers_per_type); c.n_types];
    for (k, centre) in centres.iter().enumerate() {
        for i in 0..c.triggers_per_type {
            let noise = normal_vec(&mut rng, e, c.noise * unit);
            let v = centre.iter().zip(&noise).map(|(a, b)| a + b).collect();
            trigger_ids[k].push(lexicon.len() as u32);
            lexicon.insert(&format!("trg{k}_{i}"), v)?;
        }
    }
    let first_filler = lexicon.len() as u32;
    for i in 0..(c.vocab_size - lexicon.len()) {
        lexicon.insert(&format!("w{i}"), normal_vec(&mut rng, e, unit))?;
    }
    let n_fillers = c.vocab_size as u32 - first_filler;

    let ontology = Ontology::new(names)?;
    let mut corpus = Corpus {
        ontology,
        ..Corpus::default()
    };
    let mut next_id = 0;
    for (split, per_type) in [
        (Split::Train, c.train_per_type),
        (Split::Dev, c.dev_per_type),
        (Split::Test, c.test_per_type),
    ] {
        let mut instances = Vec::with_capacity(per_type * c.n_types);
        for k in 0..c.n_types {
            for _ in 0..per_type {
                let len = rng.random_range(c.min_len..=c.max_len);
                let mut tokens: Vec<u32> = (0..len)
                    .map(|_| first_filler + rng.random_range(0..n_fillers))
                    .collect();
                let mut positions: Vec<usize> = (0..len).collect();
                positions.shuffle(&mut rng);
                let mut slots = positions.into_iter();
                let mut targets = Vec::new();
                let mut events = vec![k];
                if c.n_types > 1 && rng.random_bool(0.3) {
                    events.push((k + rng.random_range(1..c.n_types)) % c.n_types);
                }
                for ev in events {
                    let pos = slots.next().expect("len >= 2");
                    let choices = &trigger_ids[ev];
                    tokens[pos] = choices[rng.random_range(0..choices.len())];
                    targets.push((Span::new(pos, pos), Label::Event(TypeId(ev as u32))));
                }
                let n_other = rng.random_range(1..=3usize);
                for pos in slots.take(n_other) {
                    targets.push((Span::new(pos, pos), Label::Other));
                }
                targets.sort();
                instances.push(Instance { id: 0, tokens, targets });
            }
        }
        instances.shuffle(&mut rng);
        for inst in &mut instances {
            inst.id = next_id;
            next_id += 1;
        }
        match split {
            Split::Train => corpus.train = instances,
            Split::Dev => corpus.dev = instances,
            Split::Test => corpus.test = instances,
        }
    }
    let mut synonyms = SynonymMap::default();
    for (oov, syn) in OOV_SYNONYMS {
        if name_words.iter().flatten().any(|w| w == syn) {
            synonyms.insert(oov, syn);
        }
    }
    Ok(SyntheticCorpus {
        corpus,
        lexicon,
        synonyms,
    })
}
