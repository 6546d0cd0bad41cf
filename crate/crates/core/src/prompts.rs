//! Episodic memory prompts: one trainable vector per learned event type plus
//! a distinguished `Other` prompt at index 0, accumulated task by task.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::{Label, TypeId};
use crate::encoder::{Lexicon, INIT_STD};
use crate::error::{contract, Error, Result};
use crate::init::normal_vec;
use crate::mlp::Mlp;
use crate::numeric::{Tape, Tensor, Var};
use crate::Real;

/// Maps out-of-lexicon words to in-lexicon synonyms.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct SynonymMap(BTreeMap<String, String>);

impl SynonymMap {
    pub fn insert(&mut self, oov: &str, synonym: &str) {
        self.0.insert(oov.to_string(), synonym.to_string());
    }

    pub fn get(&self, word: &str) -> Option<&str> {
        self.0.get(word).map(String::as_str)
    }

    /// `oov_token synonym_token` per line.
    pub fn parse(text: &str) -> Result<Self> {
        let mut map = Self::default();
        for (n, line) in text.lines().enumerate() {
            let fields: Vec<&str> = line.split_whitespace().collect();
            match fields.as_slice() {
                [] => {}
                [oov, syn] => map.insert(oov, syn),
                _ => {
                    return Err(Error::Parse {
                        line: n + 1,
                        message: format!("expected `oov synonym`, got {line:?}"),
                    })
                }
            }
        }
        Ok(map)
    }

    pub fn to_text(&self) -> String {
        self.0.iter().fold(String::new(), |mut s, (k, v)| {
            writeln!(s, "{k} {v}").expect("write to string");
            s
        })
    }
}

pub fn load_synonyms(path: impl AsRef<Path>) -> Result<SynonymMap> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    SynonymMap::parse(&text)
}

/// How a type prompt was initialised.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PromptSource {
    SingleToken,
    Averaged,
    Synonym,
    Random,
}

pub fn random_prompt<R: Rng + ?Sized>(rng: &mut R, dim: usize) -> Vec<Real> {
    normal_vec(rng, dim, INIT_STD)
}

/// Name-based prompt initialisation. A single in-lexicon word copies its
/// embedding; several words average their embeddings; out-of-lexicon words
/// are first replaced by their synonym. Names that still miss the lexicon
/// get a seeded random vector.
pub fn init_task_prompts<R: Rng + ?Sized>(
    type_names: &[&str],
    lexicon: &Lexicon,
    synonyms: &SynonymMap,
    rng: &mut R,
) -> Result<Vec<(Vec<Real>, PromptSource)>> {
    let dim = lexicon.dim();
    let mut out = Vec::with_capacity(type_names.len());
    for name in type_names {
        let words: Vec<&str> = name.split_whitespace().collect();
        if words.is_empty() {
            return Err(Error::Argument("empty event type name".into()));
        }
        let mut used_synonym = false;
        let mut vectors = Vec::with_capacity(words.len());
        for w in &words {
            if let Some(v) = lexicon.get(w) {
                vectors.push(v);
            } else if let Some(v) = synonyms.get(w).and_then(|s| lexicon.get(s)) {
                used_synonym = true;
                vectors.push(v);
            } else {
                break;
            }
        }
        if vectors.len() < words.len() {
            log::warn!("no lexicon entry or synonym for type name {name:?}; using a random prompt");
            out.push((random_prompt(rng, dim), PromptSource::Random));
            continue;
        }
        let n = vectors.len() as Real;
        let avg = (0..dim)
            .map(|d| vectors.iter().map(|v| v[d]).sum::<Real>() / n)
            .collect();
        let source = match (used_synonym, words.len()) {
            (true, _) => PromptSource::Synonym,
            (false, 1) => PromptSource::SingleToken,
            (false, _) => PromptSource::Averaged,
        };
        out.push((avg, source));
    }
    Ok(out)
}

/// Seeded random vector for the `Other` prompt.
pub fn init_other_prompt<R: Rng + ?Sized>(rng: &mut R, dim: usize) -> Vec<Real> {
    random_prompt(rng, dim)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptEntry {
    pub label: Label,
    /// Task that introduced the prompt; `None` for `Other`.
    pub task: Option<usize>,
}

/// Append-only prompt matrix; row `k` is the prompt for class `k`.
#[derive(Clone, Debug, PartialEq)]
pub struct PromptBank {
    entries: Vec<PromptEntry>,
    vectors: Tensor<Real>,
    trainable: bool,
}

impl PromptBank {
    pub fn new(other_prompt: Vec<Real>) -> Self {
        let dim = other_prompt.len();
        Self {
            entries: vec![PromptEntry {
                label: Label::Other,
                task: None,
            }],
            vectors: Tensor::matrix(1, dim, other_prompt).expect("single row"),
            trainable: true,
        }
    }

    pub fn from_parts(entries: Vec<PromptEntry>, vectors: Tensor<Real>, trainable: bool) -> Result<Self> {
        if entries.first().map(|e| e.label) != Some(Label::Other) {
            return Err(contract!("prompt bank must start with the Other prompt"));
        }
        if vectors.shape().len() != 2 || vectors.rows() != entries.len() {
            return Err(contract!(
                "{} prompt entries but vectors of shape {:?}",
                entries.len(),
                vectors.shape()
            ));
        }
        Ok(Self {
            entries,
            vectors,
            trainable,
        })
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.vectors.cols()
    }

    pub fn entries(&self) -> &[PromptEntry] {
        &self.entries
    }

    pub fn vectors(&self) -> &Tensor<Real> {
        &self.vectors
    }

    pub fn vectors_mut(&mut self) -> &mut Tensor<Real> {
        &mut self.vectors
    }

    pub fn is_trainable(&self) -> bool {
        self.trainable
    }

    pub fn set_trainable(&mut self, trainable: bool) {
        self.trainable = trainable;
    }

    /// Class index of a label: `Other` is 0, then types in accumulation order.
    pub fn class_of(&self, label: Label) -> Option<usize> {
        self.entries.iter().position(|e| e.label == label)
    }

    pub fn label_of(&self, class: usize) -> Option<Label> {
        self.entries.get(class).map(|e| e.label)
    }

    /// Appends new type prompts after the existing ones.
    pub fn extend(&mut self, types: &[TypeId], prompts: &[Vec<Real>], task: usize) -> Result<()> {
        if types.len() != prompts.len() {
            return Err(contract!("{} types but {} prompts", types.len(), prompts.len()));
        }
        for (i, t) in types.iter().enumerate() {
            if self.class_of(Label::Event(*t)).is_some() || types[..i].contains(t) {
                return Err(contract!("type {t:?} already has a prompt"));
            }
        }
        if types.is_empty() {
            return Ok(());
        }
        let rows = Tensor::from_rows(prompts)?;
        if rows.cols() != self.dim() {
            return Err(contract!("prompt dim {} vs bank dim {}", rows.cols(), self.dim()));
        }
        self.vectors.append_rows(&rows)?;
        self.entries.extend(types.iter().map(|t| PromptEntry {
            label: Label::Event(*t),
            task: Some(task),
        }));
        Ok(())
    }
}

/// Prompt-side logits `MLP(prompt_reps) · span_reps`, shape `S×P`.
pub fn prompt_logits_on_tape<'a>(
    tape: &mut Tape<'a, Real>,
    prompt_reps: Var,
    span_reps: Var,
    mlp: &'a Mlp,
    names: Option<crate::mlp::MlpNames>,
) -> Result<Var> {
    let encoded = mlp.on_tape(tape, prompt_reps, names)?;
    tape.matmul_bt(span_reps, encoded)
}

/// Forward-only prompt logits for one span representation.
pub fn prompt_logits(prompt_reps: &Tensor<Real>, span_rep: &[Real], mlp: &Mlp) -> Result<Vec<Real>> {
    if prompt_reps.cols() != mlp.input_dim() || span_rep.len() != mlp.output_dim() {
        return Err(contract!(
            "prompt reps {:?}, span rep of {} and MLP {}→{}",
            prompt_reps.shape(),
            span_rep.len(),
            mlp.input_dim(),
            mlp.output_dim()
        ));
    }
    let mut tape = Tape::new();
    let p = tape.constant(prompt_reps);
    let s = tape.constant_owned(Tensor::matrix(1, span_rep.len(), span_rep.to_vec())?);
    let out = prompt_logits_on_tape(&mut tape, p, s, mlp, None)?;
    Ok(tape.value(out).data().to_vec())
}
