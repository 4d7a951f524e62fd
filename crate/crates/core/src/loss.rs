//! Training losses: the two adversarial pairs, the two cycle terms, the
//! segmentation term, and their weighted sum. All losses reduce by mean so
//! the weights transfer across image sizes.

use crate::error::Result;
use crate::tensor::{
    add, add_scalar, l1_diff, log_sigmoid, mean, mul, mul_scalar, neg, nll_weighted, Tensor,
};

/// Adversarial objective family. `Log` is the classic cross-entropy form;
/// `LeastSquares` regresses real patches to 1 and fake patches to 0.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GanForm {
    Log,
    LeastSquares,
}

/// Weights of the five-term training objective.
#[derive(Clone, Copy, Debug)]
pub struct LossWeights {
    pub adv_source: f32,  // translation into the target modality
    pub adv_target: f32,  // translation back into the source modality
    pub cycle_source: f32,
    pub cycle_target: f32,
    pub seg: f32,
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [self.adv_source, self.adv_target, self.cycle_source, self.cycle_target, self.seg];
        if all.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(crate::error::Error::Config(
                "loss weights must be finite and non-negative".into(),
            ));
        }
        Ok(())
    }
}

impl Default for LossWeights {
    /// The published operating point: adversarial 1, cycle 10, seg 1.
    fn default() -> Self {
        LossWeights {
            adv_source: 1.0,
            adv_target: 1.0,
            cycle_source: 10.0,
            cycle_target: 10.0,
            seg: 1.0,
        }
    }
}

/// Mean of (t - 1)^2.
fn mean_sq_toward_one(t: &Tensor) -> Tensor {
    let d = add_scalar(t, -1.0);
    mean(&mul(&d, &d).expect("same shape"))
}

/// Mean of t^2.
fn mean_sq(t: &Tensor) -> Tensor {
    mean(&mul(t, t).expect("same shape"))
}

/// Discriminator objective on raw patch scores. Log form:
/// -mean log sigmoid(d_real) - mean log(1 - sigmoid(d_fake)), using
/// log(1 - sigmoid(x)) = log sigmoid(-x) for stability. Least-squares form:
/// mean (d_real - 1)^2 + mean d_fake^2.
pub fn gan_loss_discriminator(d_real: &Tensor, d_fake: &Tensor, form: GanForm) -> Result<Tensor> {
    let out = match form {
        GanForm::Log => add(
            &neg(&mean(&log_sigmoid(d_real))),
            &neg(&mean(&log_sigmoid(&neg(d_fake)))),
        )?,
        GanForm::LeastSquares => add(&mean_sq_toward_one(d_real), &mean_sq(d_fake))?,
    };
    Ok(out)
}

/// Generator objective on the discriminator's scores for generated images.
/// Log form is non-saturating: -mean log sigmoid(d_fake) rather than
/// +mean log(1 - sigmoid(d_fake)); both share the same optimum but this one
/// keeps gradients alive early in training.
pub fn gan_loss_generator(d_fake: &Tensor, form: GanForm) -> Tensor {
    match form {
        GanForm::Log => neg(&mean(&log_sigmoid(d_fake))),
        GanForm::LeastSquares => mean_sq_toward_one(d_fake),
    }
}

/// Mean absolute error between a cycle-reconstructed image and the
/// original.
pub fn cycle_loss(reconstructed: &Tensor, original: &Tensor) -> Result<Tensor> {
    l1_diff(reconstructed, original)
}

/// Class-weighted cross entropy from per-pixel log-probabilities.
pub fn seg_loss(log_probs: &Tensor, labels: &[u8], class_weights: &[f32]) -> Result<Tensor> {
    nll_weighted(log_probs, labels, class_weights)
}

/// Weighted sum of the five scalar components. The gradient reaching each
/// component is exactly its weight.
pub fn total_loss(
    adv_source: &Tensor,
    adv_target: &Tensor,
    cycle_source: &Tensor,
    cycle_target: &Tensor,
    seg: &Tensor,
    w: &LossWeights,
) -> Result<Tensor> {
    let mut acc = mul_scalar(adv_source, w.adv_source);
    acc = add(&acc, &mul_scalar(adv_target, w.adv_target))?;
    acc = add(&acc, &mul_scalar(cycle_source, w.cycle_source))?;
    acc = add(&acc, &mul_scalar(cycle_target, w.cycle_target))?;
    add(&acc, &mul_scalar(seg, w.seg))
}
