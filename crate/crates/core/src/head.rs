//! Span representation, the growing linear classifier and the combined
//! classifier + prompt logits loss.

use rand::Rng;

use crate::data::{Label, Span, TypeId};
use crate::encoder::INIT_STD;
use crate::error::{contract, Error, Result};
use crate::init::normal_vec;
use crate::mlp::{Mlp, MlpNames};
use crate::numeric::{ParamName, Tape, Tensor, Var};
use crate::prompts::prompt_logits_on_tape;
use crate::Real;

pub const SPAN_MLP: MlpNames = ["span.w1", "span.b1", "span.w2", "span.b2"];
pub const CLS_WEIGHT: ParamName = "cls.weight";
pub const CLS_BIAS: ParamName = "cls.bias";

/// Span MLP plus a linear classifier whose row 0 is `Other`.
#[derive(Clone, Debug, PartialEq)]
pub struct SpanHead {
    pub span_mlp: Mlp,
    pub weight: Tensor<Real>,
    pub bias: Tensor<Real>,
    classes: Vec<Label>,
}

/// Classification result for one target span.
#[derive(Clone, Debug, PartialEq)]
pub struct SpanPrediction {
    pub span: Span,
    pub logits: Vec<Real>,
    pub class: usize,
    pub label: Label,
    pub feature: Vec<Real>,
    pub normalized_feature: Vec<Real>,
}

impl SpanHead {
    /// Fresh head over `dim`-wide token representations with only the
    /// `Other` row.
    pub fn new<R: Rng + ?Sized>(rng: &mut R, dim: usize) -> Self {
        Self {
            span_mlp: Mlp::glorot(rng, 2 * dim, dim, dim),
            weight: Tensor::matrix(1, dim, normal_vec(rng, dim, INIT_STD)).expect("one row"),
            bias: Tensor::zeros(&[1]),
            classes: vec![Label::Other],
        }
    }

    pub fn from_parts(span_mlp: Mlp, weight: Tensor<Real>, bias: Tensor<Real>, classes: Vec<Label>) -> Result<Self> {
        if weight.rows() != classes.len() || bias.len() != classes.len() {
            return Err(contract!(
                "{} classes but classifier {:?} / bias {:?}",
                classes.len(),
                weight.shape(),
                bias.shape()
            ));
        }
        Ok(Self {
            span_mlp,
            weight,
            bias,
            classes,
        })
    }

    pub fn dim(&self) -> usize {
        self.weight.cols()
    }

    pub fn num_classes(&self) -> usize {
        self.classes.len()
    }

    pub fn classes(&self) -> &[Label] {
        &self.classes
    }

    /// Appends one randomly initialised row (std 0.02) per new type.
    pub fn extend_classifier<R: Rng + ?Sized>(&mut self, new_types: &[TypeId], rng: &mut R) -> Result<()> {
        for (i, t) in new_types.iter().enumerate() {
            if self.classes.contains(&Label::Event(*t)) || new_types[..i].contains(t) {
                return Err(contract!("classifier already has a row for {t:?}"));
            }
        }
        let dim = self.dim();
        for t in new_types {
            let row = Tensor::matrix(1, dim, normal_vec(rng, dim, INIT_STD))?;
            self.weight.append_rows(&row)?;
            self.bias.append_values(&[0.0])?;
            self.classes.push(Label::Event(*t));
        }
        Ok(())
    }

    /// `S×e` span features `MLP([x_i; x_j])` for every span.
    pub fn span_reps_on_tape<'a>(
        &'a self,
        tape: &mut Tape<'a, Real>,
        token_reps: Var,
        spans: &[(usize, usize)],
        trainable: bool,
    ) -> Result<Var> {
        let len = tape.value(token_reps).rows();
        for &(i, j) in spans {
            if i > j || j >= len {
                return Err(Error::Span(format!("({i}, {j}) in a sentence of length {len}")));
            }
        }
        if spans.is_empty() {
            return Err(Error::Span("no target spans".into()));
        }
        let pairs = tape.gather_pairs(token_reps, spans)?;
        self.span_mlp
            .on_tape(tape, pairs, trainable.then_some(SPAN_MLP))
    }

    /// Affine classifier logits, `S×K`.
    pub fn classify_on_tape<'a>(&'a self, tape: &mut Tape<'a, Real>, span_reps: Var, trainable: bool) -> Result<Var> {
        let (w, b) = if trainable {
            (tape.param(CLS_WEIGHT, &self.weight), tape.param(CLS_BIAS, &self.bias))
        } else {
            (tape.constant(&self.weight), tape.constant(&self.bias))
        };
        let logits = tape.matmul_bt(span_reps, w)?;
        tape.add_row(logits, b)
    }

    /// Forward-only span feature.
    pub fn span_representation(&self, token_reps: &Tensor<Real>, span: (usize, usize)) -> Result<Vec<Real>> {
        let mut tape = Tape::new();
        let x = tape.constant(token_reps);
        let h = self.span_reps_on_tape(&mut tape, x, &[span], false)?;
        Ok(tape.value(h).data().to_vec())
    }

    /// Forward-only classifier logits for one span feature.
    pub fn classify(&self, span_rep: &[Real]) -> Result<Vec<Real>> {
        let mut tape = Tape::new();
        let h = tape.constant_owned(Tensor::matrix(1, span_rep.len(), span_rep.to_vec())?);
        let out = self.classify_on_tape(&mut tape, h, false)?;
        Ok(tape.value(out).data().to_vec())
    }
}

/// Elementwise sum of classifier and prompt logits.
pub fn combined_logits(p: &[Real], p_c: &[Real]) -> Result<Vec<Real>> {
    if p.len() != p_c.len() {
        return Err(contract!("logit lengths {} and {} differ", p.len(), p_c.len()));
    }
    Ok(p.iter().zip(p_c).map(|(a, b)| a + b).collect())
}

/// Index of the largest logit, lowest index on ties.
pub fn argmax(logits: &[Real]) -> usize {
    let mut best = 0;
    for (i, &v) in logits.iter().enumerate() {
        if v > logits[best] {
            best = i;
        }
    }
    best
}

/// Which parts of the model a forward pass uses.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Pathway {
    /// Prompt vectors are appended to the encoder input.
    pub prompts: bool,
    /// Prompt logits are added to the classifier logits.
    pub entangled: bool,
}

impl Pathway {
    pub const PLAIN: Self = Self {
        prompts: false,
        entangled: false,
    };
    pub const FULL: Self = Self {
        prompts: true,
        entangled: true,
    };
}

/// Combined logits `p + p_c` (or `p` alone without the prompt pathway).
pub fn combined_logits_on_tape<'a>(
    tape: &mut Tape<'a, Real>,
    head: &'a SpanHead,
    span_reps: Var,
    prompt_reps: Option<Var>,
    prompt_mlp: Option<(&'a Mlp, Option<MlpNames>)>,
    trainable: bool,
) -> Result<Var> {
    let p = head.classify_on_tape(tape, span_reps, trainable)?;
    match (prompt_reps, prompt_mlp) {
        (Some(reps), Some((mlp, names))) => {
            if tape.value(reps).rows() != head.num_classes() {
                return Err(contract!(
                    "{} prompts for {} classes",
                    tape.value(reps).rows(),
                    head.num_classes()
                ));
            }
            let pc = prompt_logits_on_tape(tape, reps, span_reps, mlp, names)?;
            tape.add(p, pc)
        }
        _ => Ok(p),
    }
}

/// Mean cross-entropy of the combined logits against gold classes.
pub fn detection_loss<'a>(
    tape: &mut Tape<'a, Real>,
    head: &'a SpanHead,
    span_reps: Var,
    prompt_reps: Option<Var>,
    prompt_mlp: Option<(&'a Mlp, Option<MlpNames>)>,
    gold: &[usize],
    trainable: bool,
) -> Result<Var> {
    if let Some(&g) = gold.iter().find(|&&g| g >= head.num_classes()) {
        return Err(contract!("gold class {g} but only {} classes", head.num_classes()));
    }
    let logits = combined_logits_on_tape(tape, head, span_reps, prompt_reps, prompt_mlp, trainable)?;
    tape.cross_entropy(logits, gold)
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::numeric::cross_entropy;

    fn head(dim: usize) -> SpanHead {
        SpanHead::new(&mut ChaCha8Rng::seed_from_u64(1), dim)
    }

    fn token_reps() -> Tensor<Real> {
        Tensor::matrix(4, 3, (0..12).map(|v| (v as Real * 0.37).sin()).collect()).unwrap()
    }

    #[test]
    fn single_token_span_uses_token_twice() {
        let h = head(3);
        let reps = token_reps();
        let feat = h.span_representation(&reps, (2, 2)).unwrap();
        let mut tape = Tape::new();
        let doubled: Vec<Real> = reps.row(2).iter().chain(reps.row(2)).copied().collect();
        let x = tape.constant_owned(Tensor::matrix(1, 6, doubled).unwrap());
        let y = h.span_mlp.on_tape(&mut tape, x, None).unwrap();
        assert_eq!(tape.value(y).data(), feat.as_slice());
        assert_eq!(feat, h.span_representation(&reps, (2, 2)).unwrap());
    }

    #[test]
    fn bad_spans_are_rejected() {
        let h = head(3);
        assert!(matches!(h.span_representation(&token_reps(), (3, 2)), Err(Error::Span(_))));
        assert!(matches!(h.span_representation(&token_reps(), (1, 4)), Err(Error::Span(_))));
    }

    #[test]
    fn zero_classifier_gives_zero_logits() {
        let mut h = head(3);
        h.extend_classifier(&[TypeId(0), TypeId(1)], &mut ChaCha8Rng::seed_from_u64(2))
            .unwrap();
        h.weight = Tensor::zeros(&[3, 3]);
        assert_eq!(h.classify(&[0.3, 0.1, -2.0]).unwrap(), vec![0.0; 3]);
    }

    #[test]
    fn extension_appends_rows_and_keeps_old_logits() {
        let mut h = head(3);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        h.extend_classifier(&[TypeId(5), TypeId(6), TypeId(7)], &mut rng).unwrap();
        let before = h.clone();
        let x = [0.4, -0.2, 0.9];
        let old_logits = h.classify(&x).unwrap();
        h.extend_classifier(&[TypeId(1), TypeId(2)], &mut rng).unwrap();
        assert_eq!(h.num_classes(), 6);
        assert_eq!(&h.weight.data()[..12], before.weight.data());
        assert_eq!(&h.classify(&x).unwrap()[..4], old_logits.as_slice());
        assert!(h.extend_classifier(&[TypeId(6)], &mut rng).is_err());
        let snapshot = h.clone();
        h.extend_classifier(&[], &mut rng).unwrap();
        assert_eq!(h, snapshot);
    }

    #[test]
    fn combined_logit_examples() {
        assert_eq!(combined_logits(&[1.0, 2.0], &[0.5, -1.0]).unwrap(), vec![1.5, 1.0]);
        assert_eq!(combined_logits(&[1.0, 2.0], &[0.0, 0.0]).unwrap(), vec![1.0, 2.0]);
        let flipped = combined_logits(&[1.0, 0.0], &[0.0, 2.0]).unwrap();
        assert_eq!(argmax(&[1.0, 0.0]), 0);
        assert_eq!(argmax(&flipped), 1);
        assert!(combined_logits(&[1.0], &[1.0, 2.0]).is_err());
        assert_eq!(argmax(&[2.0, 2.0, 1.0]), 0);
    }

    #[test]
    fn loss_without_prompts_is_plain_cross_entropy() {
        let mut h = head(3);
        h.extend_classifier(&[TypeId(0), TypeId(1)], &mut ChaCha8Rng::seed_from_u64(4))
            .unwrap();
        let feat = [0.2, -0.7, 1.1];
        let mut tape = Tape::new();
        let x = tape.constant_owned(Tensor::matrix(1, 3, feat.to_vec()).unwrap());
        let l = detection_loss(&mut tape, &h, x, None, None, &[2], false).unwrap();
        let direct = cross_entropy(&h.classify(&feat).unwrap(), 2).unwrap();
        assert_eq!(tape.scalar(l), direct);

        let mut tape = Tape::new();
        let x = tape.constant_owned(Tensor::matrix(1, 3, feat.to_vec()).unwrap());
        assert!(detection_loss(&mut tape, &h, x, None, None, &[3], false).is_err());
    }

    #[test]
    fn uniform_combined_logits_give_log_k() {
        let mut h = head(2);
        h.extend_classifier(&[TypeId(0), TypeId(1)], &mut ChaCha8Rng::seed_from_u64(5))
            .unwrap();
        h.weight = Tensor::zeros(&[3, 2]);
        let mlp = Mlp::identity(2);
        let prompts = Tensor::zeros(&[3, 2]);
        for gold in 0..3 {
            let mut tape = Tape::new();
            let x = tape.constant_owned(Tensor::matrix(1, 2, vec![0.3, 0.8]).unwrap());
            let p = tape.constant(&prompts);
            let l = detection_loss(&mut tape, &h, x, Some(p), Some((&mlp, None)), &[gold], false).unwrap();
            assert!((tape.scalar(l) - 3f64.ln()).abs() < 1e-12);
        }
    }
}
