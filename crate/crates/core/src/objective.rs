//! Prototype probabilities and the four training losses.
//!
//! Every loss comes in two forms: a plain evaluation over matrices, and a
//! `*_graph` builder that records the student side on a [`Tape`] while the
//! teacher side enters only as constant weights. Teacher quantities can
//! therefore never receive gradient.

use std::rc::Rc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::memory::SopSet;
use crate::model::MaskSpec;
use crate::numerics::{
    cross_entropy, entropy, matmul, matmul_nt, normalize_rows_in_place, softmax_rows, Matrix,
    NumericsError, Scalar, Tape, Var,
};
use crate::seed;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ObjectiveError {
    #[error("embedding dimension {found} does not match prototypes ({expected})")]
    DimMismatch { expected: usize, found: usize },
    #[error("temperature must be positive, got {0}")]
    NonPositiveTemperature(f64),
    #[error("no valid (teacher, student) view pairs: {0}")]
    EmptyViews(String),
    #[error("mask layout does not match patch rows: {0}")]
    MaskLengthMismatch(String),
    #[error("loss weights must be nonnegative")]
    NegativeWeight,
    #[error(transparent)]
    Numerics(#[from] NumericsError),
}

fn check_tau<T: Scalar>(tau: T) -> Result<(), ObjectiveError> {
    if tau > T::zero() {
        Ok(())
    } else {
        Err(ObjectiveError::NonPositiveTemperature(tau.as_f64()))
    }
}

/// Per-row distributions over prototypes.
#[derive(Clone, Debug, PartialEq)]
pub struct SopProbabilities<T> {
    pub probs: Matrix<T>,
}

impl<T: Scalar> SopProbabilities<T> {
    pub fn mean_entropy(&self) -> T {
        let n = self.probs.rows().max(1);
        self.probs.row_iter().map(entropy).sum::<T>() / T::from_usize(n).unwrap()
    }
}

/// `softmax(U Dᵀ / tau) Y`.
pub fn sop_probs<T: Scalar>(
    u: &Matrix<T>,
    sop: &SopSet<T>,
    tau: T,
) -> Result<SopProbabilities<T>, ObjectiveError> {
    check_tau(tau)?;
    if u.cols() != sop.d.cols() {
        return Err(ObjectiveError::DimMismatch {
            expected: sop.d.cols(),
            found: u.cols(),
        });
    }
    let logits = matmul_nt(u, &sop.d)?;
    let member = softmax_rows(&logits, tau)?;
    Ok(SopProbabilities {
        probs: matmul(&member, &sop.y)?,
    })
}

/// Student-side [`sop_probs`] recorded on a tape; `D` and `Y` are constants.
pub fn sop_probs_graph<T: Scalar>(
    tape: &mut Tape<T>,
    u: Var,
    sop: &SopSet<T>,
    tau: T,
) -> Result<Var, ObjectiveError> {
    check_tau(tau)?;
    if tape.shape(u).1 != sop.d.cols() {
        return Err(ObjectiveError::DimMismatch {
            expected: sop.d.cols(),
            found: tape.shape(u).1,
        });
    }
    let d = tape.constant(sop.d.clone());
    let y = tape.constant(sop.y.clone());
    let logits = tape.matmul_nt(u, d)?;
    let member = tape.softmax(logits, tau)?;
    Ok(tape.matmul(member, y)?)
}

/// Number of (teacher global view, student view) pairs with distinct views.
fn pair_count(teachers: usize, students: usize) -> usize {
    (0..teachers)
        .map(|g| (0..students).filter(|&v| v != g).count())
        .sum()
}

fn check_views<T: Scalar>(
    student: &[&Matrix<T>],
    teacher: &[&Matrix<T>],
) -> Result<(usize, usize), ObjectiveError> {
    if teacher.len() != 2 {
        return Err(ObjectiveError::EmptyViews(format!(
            "expected 2 teacher views, got {}",
            teacher.len()
        )));
    }
    let pairs = pair_count(teacher.len(), student.len());
    if pairs == 0 {
        return Err(ObjectiveError::EmptyViews("no student views".into()));
    }
    let shape = teacher[0].shape();
    for m in student.iter().chain(teacher) {
        if m.shape() != shape {
            return Err(ObjectiveError::DimMismatch {
                expected: shape.1,
                found: m.cols(),
            });
        }
    }
    if shape.0 == 0 {
        return Err(ObjectiveError::EmptyViews("empty batch".into()));
    }
    Ok((pairs, shape.0))
}

/// Cross-view cross-entropy between teacher and student distributions.
///
/// Student view `v` is paired with teacher global view `g` for every
/// `v != g`; the loss is the mean over pairs and over the batch. Student
/// views 0 and 1 are the two global crops.
pub fn cls_loss<T: Scalar>(
    student_probs: &[SopProbabilities<T>],
    teacher_probs: &[SopProbabilities<T>],
) -> Result<T, ObjectiveError> {
    let s: Vec<&Matrix<T>> = student_probs.iter().map(|p| &p.probs).collect();
    let t: Vec<&Matrix<T>> = teacher_probs.iter().map(|p| &p.probs).collect();
    cross_view_loss(&s, &t)
}

fn cross_view_loss<T: Scalar>(
    student: &[&Matrix<T>],
    teacher: &[&Matrix<T>],
) -> Result<T, ObjectiveError> {
    let (pairs, batch) = check_views(student, teacher)?;
    let mut total = T::zero();
    for (g, tg) in teacher.iter().enumerate() {
        for (v, sv) in student.iter().enumerate() {
            if v == g {
                continue;
            }
            for b in 0..batch {
                total += cross_entropy(tg.row(b), sv.row(b))?;
            }
        }
    }
    Ok(total / T::from_usize(pairs * batch).unwrap())
}

/// Constant weights turning the cross-view loss into `Σ W ⊙ log P` over the
/// student views stacked view-major.
fn cross_view_weights<T: Scalar>(
    views: usize,
    teacher: &[&Matrix<T>],
) -> Result<Matrix<T>, ObjectiveError> {
    let placeholder: Vec<&Matrix<T>> = (0..views).map(|_| teacher[0]).collect();
    let (pairs, batch) = check_views(&placeholder, teacher)?;
    let k = teacher[0].cols();
    let scale = -T::one() / T::from_usize(pairs * batch).unwrap();
    let mut w = Matrix::zeros(views * batch, k);
    for (g, tg) in teacher.iter().enumerate() {
        for v in (0..views).filter(|&v| v != g) {
            for b in 0..batch {
                let dst = w.row_mut(v * batch + b);
                for (d, &p) in dst.iter_mut().zip(tg.row(b)) {
                    *d += scale * p;
                }
            }
        }
    }
    Ok(w)
}

/// [`cls_loss`] on a tape. `student_probs` stacks the student views
/// view-major (`views * batch` rows).
pub fn cls_loss_graph<T: Scalar>(
    tape: &mut Tape<T>,
    student_probs: Var,
    views: usize,
    teacher_probs: &[SopProbabilities<T>],
) -> Result<Var, ObjectiveError> {
    let t: Vec<&Matrix<T>> = teacher_probs.iter().map(|p| &p.probs).collect();
    let w = cross_view_weights(views, &t)?;
    if w.shape() != tape.shape(student_probs) {
        return Err(ObjectiveError::EmptyViews(format!(
            "student rows {:?} do not match {views} views of the teacher batch",
            tape.shape(student_probs)
        )));
    }
    let logp = tape.log(student_probs);
    Ok(tape.weighted_sum(logp, Rc::new(w))?)
}

fn check_masks<T: Scalar>(
    teacher: &[&Matrix<T>],
    student: &[&Matrix<T>],
    masks: &[Vec<MaskSpec>],
) -> Result<usize, ObjectiveError> {
    if teacher.len() != student.len() || teacher.len() != masks.len() {
        return Err(ObjectiveError::MaskLengthMismatch(format!(
            "{} teacher views, {} student views, {} mask sets",
            teacher.len(),
            student.len(),
            masks.len()
        )));
    }
    let mut patches = None;
    for ((t, s), m) in teacher.iter().zip(student).zip(masks) {
        if t.shape() != s.shape() {
            return Err(ObjectiveError::MaskLengthMismatch(format!(
                "teacher {:?} vs student {:?}",
                t.shape(),
                s.shape()
            )));
        }
        let l = m.first().map_or(0, |mm| mm.len());
        if m.iter().any(|mm| mm.len() != l) || m.len() * l != t.rows() {
            return Err(ObjectiveError::MaskLengthMismatch(format!(
                "{} masks of length {l} for {} patch rows",
                m.len(),
                t.rows()
            )));
        }
        if *patches.get_or_insert(l) != l {
            return Err(ObjectiveError::MaskLengthMismatch(
                "views disagree on patch count".into(),
            ));
        }
    }
    Ok(patches.unwrap_or(0))
}

/// Masked patch reconstruction loss.
///
/// For each global view, cross-entropy between the teacher (unmasked input)
/// and the student (masked input) summed over masked positions and divided
/// by that view's masked-token count across the batch; views are summed.
/// Rows are image-major: row `b * L + l` is patch `l` of image `b`.
pub fn sop_mim_loss<T: Scalar>(
    teacher_patch_probs: &[Matrix<T>],
    student_patch_probs: &[Matrix<T>],
    masks: &[Vec<MaskSpec>],
) -> Result<T, ObjectiveError> {
    let t: Vec<&Matrix<T>> = teacher_patch_probs.iter().collect();
    let s: Vec<&Matrix<T>> = student_patch_probs.iter().collect();
    let l = check_masks(&t, &s, masks)?;
    let mut total = T::zero();
    for ((tv, sv), mv) in t.iter().zip(&s).zip(masks) {
        let count: usize = mv.iter().map(MaskSpec::count).sum();
        if count == 0 {
            continue;
        }
        let mut view = T::zero();
        for (b, m) in mv.iter().enumerate() {
            for (pos, _) in m.mask.iter().enumerate().filter(|(_, &x)| x) {
                let r = b * l + pos;
                view += cross_entropy(tv.row(r), sv.row(r))?;
            }
        }
        total += view / T::from_usize(count).unwrap();
    }
    Ok(total)
}

/// Rows of the masked positions, view-major then image-major, together
/// with each row's per-view normalizer.
pub fn masked_rows(masks: &[Vec<MaskSpec>]) -> Vec<(usize, usize, usize)> {
    let mut out = Vec::new();
    for (v, mv) in masks.iter().enumerate() {
        let count: usize = mv.iter().map(MaskSpec::count).sum();
        for (b, m) in mv.iter().enumerate() {
            for (pos, _) in m.mask.iter().enumerate().filter(|(_, &x)| x) {
                out.push((v, b * m.len() + pos, count));
            }
        }
    }
    out
}

/// [`sop_mim_loss`] on a tape. `student_masked_probs` holds only the masked
/// rows in [`masked_rows`] order; `teacher_patch_probs` are full per-view
/// matrices.
pub fn mim_loss_graph<T: Scalar>(
    tape: &mut Tape<T>,
    student_masked_probs: Var,
    teacher_patch_probs: &[Matrix<T>],
    masks: &[Vec<MaskSpec>],
) -> Result<Var, ObjectiveError> {
    let rows = masked_rows(masks);
    let k = tape.shape(student_masked_probs).1;
    if tape.shape(student_masked_probs).0 != rows.len() {
        return Err(ObjectiveError::MaskLengthMismatch(format!(
            "{} student rows for {} masked positions",
            tape.shape(student_masked_probs).0,
            rows.len()
        )));
    }
    let mut w = Matrix::zeros(rows.len(), k);
    for (i, &(v, r, count)) in rows.iter().enumerate() {
        let t = teacher_patch_probs
            .get(v)
            .ok_or_else(|| ObjectiveError::MaskLengthMismatch("missing teacher view".into()))?;
        if t.cols() != k || r >= t.rows() {
            return Err(ObjectiveError::MaskLengthMismatch("teacher rows".into()));
        }
        let scale = -T::one() / T::from_usize(count).unwrap();
        for (d, &p) in w.row_mut(i).iter_mut().zip(t.row(r)) {
            *d = scale * p;
        }
    }
    let logp = tape.log(student_masked_probs);
    Ok(tape.weighted_sum(logp, Rc::new(w))?)
}

/// Learnable prototypes of the parametric baselines, with teacher-logit
/// centering.
#[derive(Clone, Debug, PartialEq)]
pub struct PrototypeBaseline<T> {
    /// `K × d`, unit rows.
    pub theta: Matrix<T>,
    /// Running mean of teacher logits, length `K`.
    pub center: Vec<T>,
    pub center_momentum: T,
    pub centering: bool,
}

impl<T: Scalar> PrototypeBaseline<T> {
    pub fn new(num_prototypes: usize, dim: usize, seed: u64, center_momentum: T) -> Self {
        use rand::Rng;
        let mut rng = seed::rng_for(seed, "prototypes", &[num_prototypes as u64]);
        let mut theta = Matrix::from_fn(num_prototypes, dim, |_, _| {
            T::lit(rng.sample::<f64, _>(rand_distr::StandardNormal))
        });
        normalize_rows_in_place(&mut theta).expect("gaussian rows are nonzero");
        Self {
            theta,
            center: vec![T::zero(); num_prototypes],
            center_momentum,
            centering: true,
        }
    }

    pub fn num_prototypes(&self) -> usize {
        self.theta.rows()
    }

    fn check_dim(&self, z: &Matrix<T>) -> Result<(), ObjectiveError> {
        if z.cols() != self.theta.cols() {
            return Err(ObjectiveError::DimMismatch {
                expected: self.theta.cols(),
                found: z.cols(),
            });
        }
        Ok(())
    }

    /// Cosine logits `z θᵀ`.
    pub fn logits(&self, z: &Matrix<T>) -> Result<Matrix<T>, ObjectiveError> {
        self.check_dim(z)?;
        Ok(matmul_nt(z, &self.theta)?)
    }

    /// `softmax(z θᵀ / tau)`.
    pub fn student_probs(&self, z: &Matrix<T>, tau: T) -> Result<Matrix<T>, ObjectiveError> {
        check_tau(tau)?;
        Ok(softmax_rows(&self.logits(z)?, tau)?)
    }

    /// `softmax((z θᵀ - center) / tau)`; centering skipped when disabled.
    pub fn teacher_probs(&self, z: &Matrix<T>, tau: T) -> Result<Matrix<T>, ObjectiveError> {
        check_tau(tau)?;
        let mut logits = self.logits(z)?;
        if self.centering {
            for r in 0..logits.rows() {
                for (v, &c) in logits.row_mut(r).iter_mut().zip(&self.center) {
                    *v -= c;
                }
            }
        }
        Ok(softmax_rows(&logits, tau)?)
    }

    /// `center <- m * center + (1 - m) * mean_rows(z θᵀ)` over all given views.
    pub fn update_center(&mut self, teacher_views: &[&Matrix<T>]) -> Result<(), ObjectiveError> {
        let k = self.num_prototypes();
        let mut mean = vec![T::zero(); k];
        let mut n = 0usize;
        for z in teacher_views {
            let l = self.logits(z)?;
            for row in l.row_iter() {
                for (m, &v) in mean.iter_mut().zip(row) {
                    *m += v;
                }
            }
            n += l.rows();
        }
        if n == 0 {
            return Ok(());
        }
        let inv = T::one() / T::from_usize(n).unwrap();
        let m = self.center_momentum;
        for (c, s) in self.center.iter_mut().zip(mean) {
            *c = m * *c + (T::one() - m) * s * inv;
        }
        Ok(())
    }

    /// Re-projects prototypes onto the unit sphere after an optimizer step.
    pub fn renormalize(&mut self) -> Result<(), ObjectiveError> {
        normalize_rows_in_place(&mut self.theta)?;
        Ok(())
    }
}

/// Student probabilities against learnable prototypes recorded on a tape.
pub fn prototype_probs_graph<T: Scalar>(
    tape: &mut Tape<T>,
    u: Var,
    theta: Var,
    tau: T,
) -> Result<Var, ObjectiveError> {
    check_tau(tau)?;
    let logits = tape.matmul_nt(u, theta)?;
    Ok(tape.softmax(logits, tau)?)
}

/// Cross-view loss with learnable prototypes and centered teacher logits.
pub fn parametric_cls_loss<T: Scalar>(
    student_views: &[Matrix<T>],
    teacher_views: &[Matrix<T>],
    baseline: &PrototypeBaseline<T>,
    tau_s: T,
    tau_t: T,
) -> Result<T, ObjectiveError> {
    let s = student_views
        .iter()
        .map(|z| baseline.student_probs(z, tau_s))
        .collect::<Result<Vec<_>, _>>()?;
    let t = teacher_views
        .iter()
        .map(|z| baseline.teacher_probs(z, tau_t))
        .collect::<Result<Vec<_>, _>>()?;
    let s: Vec<&Matrix<T>> = s.iter().collect();
    let t: Vec<&Matrix<T>> = t.iter().collect();
    cross_view_loss(&s, &t)
}

/// Masked patch loss against a learnable patch tokenizer `phi`.
pub fn parametric_mim_loss<T: Scalar>(
    teacher_patches: &[Matrix<T>],
    student_masked_patches: &[Matrix<T>],
    phi: &PrototypeBaseline<T>,
    masks: &[Vec<MaskSpec>],
    tau_s: T,
    tau_t: T,
) -> Result<T, ObjectiveError> {
    let t = teacher_patches
        .iter()
        .map(|z| phi.teacher_probs(z, tau_t))
        .collect::<Result<Vec<_>, _>>()?;
    let s = student_masked_patches
        .iter()
        .map(|z| phi.student_probs(z, tau_s))
        .collect::<Result<Vec<_>, _>>()?;
    sop_mim_loss(&t, &s, masks)
}

/// Weights of the two pretext losses.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub lambda1: f64,
    pub lambda2: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda1: 1.0,
            lambda2: 1.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<(), ObjectiveError> {
        if self.lambda1 >= 0.0 && self.lambda2 >= 0.0 {
            Ok(())
        } else {
            Err(ObjectiveError::NegativeWeight)
        }
    }
}

/// `lambda1 * cls + lambda2 * patch`.
pub fn total_loss<T: Scalar>(cls: T, patch: T, w: LossWeights) -> T {
    T::lit(w.lambda1) * cls + T::lit(w.lambda2) * patch
}
