//! The trainable model: span head, prompt MLP and prompt bank on top of a
//! shared frozen encoder.

use std::collections::HashMap;
use std::sync::Arc;

use rand::Rng;

use crate::data::{Instance, Label};
use crate::encoder::FrozenEncoder;
use crate::error::{contract, Error, Result};
use crate::head::{argmax, combined_logits_on_tape, Pathway, SpanHead, SpanPrediction, CLS_BIAS, CLS_WEIGHT, SPAN_MLP};
use crate::mlp::{Mlp, MlpNames};
use crate::numeric::{ParamAccess, ParamName, Tape, Tensor, Var};
use crate::prompts::{init_other_prompt, PromptBank};
use crate::Real;

pub const PROMPT_MLP: MlpNames = ["pmlp.w1", "pmlp.b1", "pmlp.w2", "pmlp.b2"];
pub const PROMPTS: ParamName = "prompts";

#[derive(Clone, Debug)]
pub struct ModelState {
    pub encoder: Arc<FrozenEncoder>,
    pub head: SpanHead,
    pub prompt_mlp: Mlp,
    pub bank: PromptBank,
}

/// Handles produced by one forward pass over a sentence.
#[derive(Clone, Copy, Debug)]
pub struct Forward {
    /// `S×K` combined logits.
    pub logits: Var,
    /// `S×e` span features feeding the classifier.
    pub features: Var,
}

impl ModelState {
    /// Untrained model knowing only the `Other` class.
    pub fn new<R: Rng + ?Sized>(encoder: Arc<FrozenEncoder>, rng: &mut R) -> Self {
        let e = encoder.dim();
        let head = SpanHead::new(rng, e);
        let prompt_mlp = Mlp::glorot(rng, e, e, e);
        let bank = PromptBank::new(init_other_prompt(rng, e));
        Self {
            encoder,
            head,
            prompt_mlp,
            bank,
        }
    }

    pub fn num_classes(&self) -> usize {
        self.head.num_classes()
    }

    /// Checks that classifier rows and prompts share one class ordering.
    pub fn check_alignment(&self) -> Result<()> {
        let bank: Vec<Label> = self.bank.entries().iter().map(|e| e.label).collect();
        if bank != self.head.classes() {
            return Err(contract!("classifier and prompt bank class orders differ"));
        }
        Ok(())
    }

    pub fn class_of(&self, label: Label) -> Option<usize> {
        self.bank.class_of(label)
    }

    /// Gold class indices for an instance; every label must be known.
    pub fn gold_classes(&self, instance: &Instance) -> Result<Vec<usize>> {
        instance
            .targets
            .iter()
            .map(|(_, l)| {
                self.class_of(*l).ok_or_else(|| {
                    Error::Data(format!("instance {}: label {l:?} not seen yet", instance.id))
                })
            })
            .collect()
    }

    /// Records a forward pass. With `trainable` the head, prompt MLP and (if
    /// the bank is trainable) prompts are parameters; otherwise constants.
    /// `cached_tokens` may supply precomputed encoder output for the plain
    /// pathway, where prompts do not touch the encoder.
    pub fn forward<'a>(
        &'a self,
        tape: &mut Tape<'a, Real>,
        tokens: &[u32],
        spans: &[(usize, usize)],
        pathway: Pathway,
        trainable: bool,
        cached_tokens: Option<&'a Tensor<Real>>,
    ) -> Result<Forward> {
        let (token_reps, prompt_reps) = if pathway.prompts {
            let prompts = if trainable && self.bank.is_trainable() {
                tape.param(PROMPTS, self.bank.vectors())
            } else {
                tape.constant(self.bank.vectors())
            };
            let enc = self.encoder.encode_on_tape(tape, tokens, Some(prompts))?;
            (enc.tokens, enc.prompts)
        } else {
            let reps = match cached_tokens {
                Some(t) => tape.constant(t),
                None => self.encoder.encode_on_tape(tape, tokens, None)?.tokens,
            };
            (reps, None)
        };
        let features = self.head.span_reps_on_tape(tape, token_reps, spans, trainable)?;
        let entangled = if pathway.entangled { prompt_reps } else { None };
        let logits = combined_logits_on_tape(
            tape,
            &self.head,
            features,
            entangled,
            Some((&self.prompt_mlp, trainable.then_some(PROMPT_MLP))),
            trainable,
        )?;
        Ok(Forward { logits, features })
    }

    /// Forward-only outputs `(logits S×K, features S×e)`.
    pub fn outputs(
        &self,
        instance: &Instance,
        pathway: Pathway,
        cached_tokens: Option<&Tensor<Real>>,
    ) -> Result<(Tensor<Real>, Tensor<Real>)> {
        let mut tape = Tape::new();
        let out = self.forward(&mut tape, &instance.tokens, &instance.spans(), pathway, false, cached_tokens)?;
        Ok((tape.value(out.logits).clone(), tape.value(out.features).clone()))
    }

    /// Argmax predictions for every target span of `instance`.
    pub fn predict(
        &self,
        instance: &Instance,
        pathway: Pathway,
        cached_tokens: Option<&Tensor<Real>>,
    ) -> Result<Vec<SpanPrediction>> {
        if instance.targets.is_empty() {
            return Ok(Vec::new());
        }
        let (logits, features) = self.outputs(instance, pathway, cached_tokens)?;
        instance
            .targets
            .iter()
            .enumerate()
            .map(|(r, (span, _))| {
                let row = logits.row(r).to_vec();
                let class = argmax(&row);
                let feature = features.row(r).to_vec();
                let norm = feature.iter().map(|v| v * v).sum::<Real>().sqrt();
                let normalized_feature = feature.iter().map(|v| v / norm.max(Real::MIN_POSITIVE)).collect();
                Ok(SpanPrediction {
                    span: *span,
                    logits: row,
                    class,
                    label: self.bank.label_of(class).ok_or_else(|| contract!("class {class} has no label"))?,
                    feature,
                    normalized_feature,
                })
            })
            .collect()
    }

    /// Number of trainable scalars (head, classifier, prompt MLP, prompts).
    pub fn parameter_count(&self) -> usize {
        self.param_names()
            .into_iter()
            .filter_map(|n| self.param(n))
            .map(Tensor::len)
            .sum()
    }
}

/// Encoder outputs for prompt-free forward passes, keyed by instance id.
/// The encoder is frozen, so each sentence needs encoding only once.
#[derive(Clone, Debug, Default)]
pub struct TokenCache {
    map: HashMap<usize, Tensor<Real>>,
}

impl TokenCache {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    /// Encodes `instance` if the pathway allows caching and it is missing.
    pub fn ensure(&mut self, encoder: &FrozenEncoder, instance: &Instance, pathway: Pathway) -> Result<()> {
        if pathway.prompts || self.map.contains_key(&instance.id) {
            return Ok(());
        }
        let (reps, _) = encoder.encode(&instance.tokens, &[])?;
        self.map.insert(instance.id, reps);
        Ok(())
    }

    /// Cached reps for `instance`; always `None` on the prompted pathway.
    pub fn get(&self, instance: &Instance, pathway: Pathway) -> Option<&Tensor<Real>> {
        if pathway.prompts {
            None
        } else {
            self.map.get(&instance.id)
        }
    }
}

impl ParamAccess<Real> for ModelState {
    fn param_names(&self) -> Vec<ParamName> {
        let mut names: Vec<ParamName> = SPAN_MLP.to_vec();
        names.extend([CLS_WEIGHT, CLS_BIAS]);
        names.extend(PROMPT_MLP);
        names.push(PROMPTS);
        names
    }

    fn param(&self, name: ParamName) -> Option<&Tensor<Real>> {
        if let Some(i) = SPAN_MLP.iter().position(|n| *n == name) {
            return Some(self.head.span_mlp.tensors()[i]);
        }
        if let Some(i) = PROMPT_MLP.iter().position(|n| *n == name) {
            return Some(self.prompt_mlp.tensors()[i]);
        }
        match name {
            CLS_WEIGHT => Some(&self.head.weight),
            CLS_BIAS => Some(&self.head.bias),
            PROMPTS => Some(self.bank.vectors()),
            _ => None,
        }
    }

    fn param_mut(&mut self, name: ParamName) -> Option<&mut Tensor<Real>> {
        if let Some(i) = SPAN_MLP.iter().position(|n| *n == name) {
            return Some(self.head.span_mlp.tensor_mut(i));
        }
        if let Some(i) = PROMPT_MLP.iter().position(|n| *n == name) {
            return Some(self.prompt_mlp.tensor_mut(i));
        }
        match name {
            CLS_WEIGHT => Some(&mut self.head.weight),
            CLS_BIAS => Some(&mut self.head.bias),
            PROMPTS => Some(self.bank.vectors_mut()),
            _ => None,
        }
    }
}
