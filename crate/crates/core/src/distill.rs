//! Teacher snapshots and the prediction- and feature-level distillation
//! losses.

use crate::data::Instance;
use crate::error::{contract, Error, Result};
use crate::head::Pathway;
use crate::model::ModelState;
use crate::numeric::{cosine_similarity, log_softmax, softmax_temperature, Tape, Tensor, Var};
use crate::Real;

pub const DEFAULT_TEMPERATURE: Real = 2.0;

/// Frozen copy of the model as it stood at the end of the previous stage.
#[derive(Clone, Debug)]
pub struct TeacherSnapshot {
    model: ModelState,
}

impl TeacherSnapshot {
    pub fn of(model: &ModelState) -> Self {
        Self { model: model.clone() }
    }

    pub fn num_classes(&self) -> usize {
        self.model.num_classes()
    }

    pub fn model(&self) -> &ModelState {
        &self.model
    }

    /// Teacher `(combined logits S×K', span features S×e)`.
    pub fn outputs(
        &self,
        instance: &Instance,
        pathway: Pathway,
        cached_tokens: Option<&Tensor<Real>>,
    ) -> Result<(Tensor<Real>, Tensor<Real>)> {
        self.model.outputs(instance, pathway, cached_tokens)
    }
}

/// Soft cross-entropy `-Σ q log p` between `q = softmax(teacher / T)` and
/// `p = softmax(student[..K'] / T)`, `K'` being the teacher width.
pub fn prediction_kd(teacher: &[Real], student: &[Real], temperature: Real) -> Result<Real> {
    if teacher.len() > student.len() || teacher.is_empty() {
        return Err(contract!(
            "teacher has {} classes, student {}",
            teacher.len(),
            student.len()
        ));
    }
    let q = softmax_temperature(teacher, temperature)?;
    let scaled: Vec<Real> = student[..teacher.len()].iter().map(|v| v / temperature).collect();
    let logp = log_softmax(&scaled);
    Ok(-q.iter().zip(&logp).map(|(a, b)| a * b).sum::<Real>())
}

/// `1 - cos(a/|a|, b/|b|)`, in `[0, 2]`.
pub fn feature_kd(teacher: &[Real], student: &[Real]) -> Result<Real> {
    let normalize = |v: &[Real]| -> Result<Vec<Real>> {
        let n = v.iter().map(|x| x * x).sum::<Real>().sqrt();
        if n == 0.0 {
            return Err(Error::Degenerate("zero span feature".into()));
        }
        Ok(v.iter().map(|x| x / n).collect())
    };
    Ok(1.0 - cosine_similarity(&normalize(teacher)?, &normalize(student)?)?)
}

/// Mean over rows of [`prediction_kd`], recorded on the student tape.
pub fn prediction_kd_on_tape(
    tape: &mut Tape<'_, Real>,
    student_logits: Var,
    teacher_logits: &Tensor<Real>,
    temperature: Real,
) -> Result<Var> {
    tape.soft_cross_entropy(student_logits, teacher_logits, temperature)
}

/// Mean over rows of [`feature_kd`], recorded on the student tape.
pub fn feature_kd_on_tape<'a>(
    tape: &mut Tape<'a, Real>,
    student_features: Var,
    teacher_features: Tensor<Real>,
) -> Result<Var> {
    let teacher = tape.constant_owned(teacher_features);
    let cos = tape.cosine_rows(student_features, teacher)?;
    let mean = tape.mean(cos);
    let neg = tape.scale(mean, -1.0);
    Ok(tape.add_scalar(neg, 1.0))
}
