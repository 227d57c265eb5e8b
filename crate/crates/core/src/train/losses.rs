use crate::attacks::{distance_on_tape, DistanceMetric};
use crate::error::{Error, Result};
use crate::nn::{Bound, Mode, NetworkDef, Tap};
use crate::tensor::{Scalar, Tape, Tensor, Var};

/// Weights of the adversarial, pixel and feature terms.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub alpha: f64,
    pub gamma: f64,
    pub lambda: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            alpha: 5e-3,
            gamma: 1e-2,
            lambda: 1.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, w) in [("alpha", self.alpha), ("gamma", self.gamma), ("lambda", self.lambda)] {
            if !w.is_finite() || w < 0.0 {
                return Err(Error::invalid(format!("loss weight {name} must be >= 0, got {w}")));
            }
        }
        Ok(())
    }

    /// Scales `gamma` so the pixel term keeps its per-pixel weight on
    /// `side`-pixel square crops instead of [`REFERENCE_CROP`] ones. The
    /// image loss is a per-image Euclidean norm, which grows with the square
    /// root of the pixel count while the other two terms are means.
    pub fn rescaled_for_crop(self, side: usize) -> Self {
        Self {
            gamma: self.gamma * REFERENCE_CROP as f64 / side.max(1) as f64,
            ..self
        }
    }
}

/// Side of the square training crops the default weights were tuned on.
pub const REFERENCE_CROP: usize = 128;

/// `alpha * l_adv + gamma * l_img + lambda * l_feat`.
pub fn loss_total(w: &LossWeights, l_adv: f64, l_img: f64, l_feat: f64) -> f64 {
    w.alpha * l_adv + w.gamma * l_img + w.lambda * l_feat
}

/// Feature loss between clean `x` and purified `xp` at `tap`, recorded on
/// the tape. `f_bound` must be a binding of `f` on the same tape.
pub fn loss_feat_on_tape<T: Scalar>(
    tape: &mut Tape<T>,
    f: &NetworkDef<T>,
    f_bound: &Bound,
    x: Var,
    xp: Var,
    tap: &Tap,
    metric: DistanceMetric,
) -> Result<Var> {
    if tape.shape(x) != tape.shape(xp) {
        return Err(Error::shape(
            "loss_feat",
            format!("{:?} vs {:?}", tape.shape(x), tape.shape(xp)),
        ));
    }
    let taps = std::slice::from_ref(tap);
    let fa = f.forward_to_taps(tape, f_bound, x, Mode::Eval, taps)?.taps[0];
    let fb = f.forward_to_taps(tape, f_bound, xp, Mode::Eval, taps)?.taps[0];
    distance_on_tape(tape, fa, fb, metric)
}

/// Value of the feature loss; the same computation as
/// [`crate::attacks::feature_distortion`].
pub fn loss_feat<T: Scalar>(
    f: &NetworkDef<T>,
    x: &Tensor<T>,
    xp: &Tensor<T>,
    tap: &Tap,
    metric: DistanceMetric,
) -> Result<f64> {
    let mut tape = Tape::new();
    let bound = f.bind(&mut tape, false);
    let a = tape.constant(x.clone());
    let b = tape.constant(xp.clone());
    let l = loss_feat_on_tape(&mut tape, f, &bound, a, b, tap, metric)?;
    Ok(tape.value(l).item().as_f64())
}

/// Per-image Euclidean norm of `xp - x`, averaged over the batch.
pub fn loss_img_on_tape<T: Scalar>(tape: &mut Tape<T>, xp: Var, x: Var) -> Result<Var> {
    distance_on_tape(tape, xp, x, DistanceMetric::L2)
}

pub fn loss_img<T: Scalar>(xp: &Tensor<T>, x: &Tensor<T>) -> Result<f64> {
    let mut tape = Tape::new();
    let a = tape.constant(xp.clone());
    let b = tape.constant(x.clone());
    let l = loss_img_on_tape(&mut tape, a, b)?;
    Ok(tape.value(l).item().as_f64())
}

/// Shape of the adversarial objective.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum GanForm {
    /// Scores are compared with the batch mean of the other side.
    #[default]
    RelativisticAverage,
    /// Standard non-saturating GAN on raw scores.
    Vanilla,
}

fn check_scores<T: Scalar>(tape: &Tape<T>, real: Var, fake: Var) -> Result<()> {
    if tape.shape(real) != tape.shape(fake) {
        return Err(Error::shape(
            "gan_loss",
            format!("{:?} vs {:?}", tape.shape(real), tape.shape(fake)),
        ));
    }
    for v in [real, fake] {
        tape.value(v).check_finite("critic score")?;
    }
    Ok(())
}

/// `mean(-log sigmoid(s))` computed as `mean(softplus(-s))`.
fn mean_neg_log_sigmoid<T: Scalar>(tape: &mut Tape<T>, s: Var) -> Var {
    let n = tape.neg(s);
    let sp = tape.softplus(n);
    tape.mean(sp)
}

/// Generator side: `mean(-log sigmoid(C(fake) - mean C(real)))`.
pub fn loss_adv_on_tape<T: Scalar>(tape: &mut Tape<T>, real: Var, fake: Var, form: GanForm) -> Result<Var> {
    check_scores(tape, real, fake)?;
    let z = match form {
        GanForm::RelativisticAverage => {
            let m = tape.mean(real);
            tape.sub(fake, m)?
        }
        GanForm::Vanilla => fake,
    };
    Ok(mean_neg_log_sigmoid(tape, z))
}

/// Critic side: `-log sigmoid(C(real) - mean C(fake)) - log sigmoid(-(C(fake) - mean C(real)))`,
/// each term averaged over the batch.
pub fn critic_loss_on_tape<T: Scalar>(tape: &mut Tape<T>, real: Var, fake: Var, form: GanForm) -> Result<Var> {
    check_scores(tape, real, fake)?;
    let (zr, zf) = match form {
        GanForm::RelativisticAverage => {
            let mf = tape.mean(fake);
            let mr = tape.mean(real);
            (tape.sub(real, mf)?, tape.sub(fake, mr)?)
        }
        GanForm::Vanilla => (real, fake),
    };
    let a = mean_neg_log_sigmoid(tape, zr);
    let nf = tape.neg(zf);
    let b = mean_neg_log_sigmoid(tape, nf);
    tape.add(a, b)
}

/// Critic scores for real and purified batches in train mode, with the
/// batch-norm statistics of both passes.
pub(crate) fn critic_scores<T: Scalar>(
    tape: &mut Tape<T>,
    critic: &NetworkDef<T>,
    bound: &Bound,
    real: Var,
    fake: Var,
) -> Result<(Var, Var, Vec<(usize, crate::tensor::BatchStats<T>)>)> {
    let r = critic.forward(tape, bound, real, Mode::Train)?;
    let f = critic.forward(tape, bound, fake, Mode::Train)?;
    let (ro, fo) = (r.out(), f.out());
    let mut stats = r.batch_stats;
    stats.extend(f.batch_stats);
    Ok((ro, fo, stats))
}

fn score_loss(real: &[f64], fake: &[f64], critic: bool, form: GanForm) -> Result<f64> {
    let mut tape = Tape::<f64>::new();
    let r = tape.constant(Tensor::new(vec![real.len(), 1], real.to_vec())?);
    let f = tape.constant(Tensor::new(vec![fake.len(), 1], fake.to_vec())?);
    let l = if critic {
        critic_loss_on_tape(&mut tape, r, f, form)?
    } else {
        loss_adv_on_tape(&mut tape, r, f, form)?
    };
    Ok(tape.value(l).item())
}

/// Generator adversarial loss from precomputed critic scores.
pub fn loss_adv_from_scores(real: &[f64], fake: &[f64]) -> Result<f64> {
    score_loss(real, fake, false, GanForm::RelativisticAverage)
}

/// Critic loss from precomputed critic scores.
pub fn critic_loss_from_scores(real: &[f64], fake: &[f64]) -> Result<f64> {
    score_loss(real, fake, true, GanForm::RelativisticAverage)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::LN_2;

    #[test]
    fn equal_scores() {
        let c = [0.7; 4];
        assert!((loss_adv_from_scores(&c, &c).unwrap() - LN_2).abs() < 1e-12);
        assert!((critic_loss_from_scores(&c, &c).unwrap() - 2.0 * LN_2).abs() < 1e-12);
        // spread scores with equal batches sit above ln 2 by convexity
        let s = [0.3, -1.2, 2.0, 0.0];
        assert!(loss_adv_from_scores(&s, &s).unwrap() > LN_2);
    }

    #[test]
    fn rescaled_pixel_weight() {
        let w = LossWeights::default().rescaled_for_crop(16);
        assert_eq!(w.gamma, 0.08);
        assert_eq!((w.alpha, w.lambda), (5e-3, 1.0));
        assert_eq!(
            LossWeights::default().rescaled_for_crop(REFERENCE_CROP),
            LossWeights::default()
        );
    }

    #[test]
    fn limits() {
        let real = [0.0, 0.1, -0.1];
        let far = [1e3, 1e3, 1e3];
        assert!(loss_adv_from_scores(&real, &far).unwrap() < 1e-12);
        let low = [-1e3, -1e3, -1e3];
        assert!(critic_loss_from_scores(&real, &low).unwrap() < 1e-12);
        assert!(loss_adv_from_scores(&real, &[f64::NAN, 0.0, 0.0]).is_err());
        assert!(loss_adv_from_scores(&real, &[0.0]).is_err());
    }

    #[test]
    fn total_weights() {
        let w = LossWeights::default();
        assert!((loss_total(&w, 1.0, 1.0, 1.0) - 1.015).abs() < 1e-15);
        let zero = LossWeights {
            alpha: 0.0,
            gamma: 0.0,
            lambda: 0.0,
        };
        assert_eq!(loss_total(&zero, 3.0, 4.0, 5.0), 0.0);
        assert!(LossWeights { alpha: -1.0, ..w }.validate().is_err());
    }

    #[test]
    fn img_loss_single_pixel() {
        let x: Tensor<f64> = Tensor::zeros(vec![1, 3, 4, 4]);
        let mut d = vec![0.0; 48];
        d[17] = 1.0;
        let xp = Tensor::new(vec![1, 3, 4, 4], d).unwrap();
        assert_eq!(loss_img(&xp, &x).unwrap(), 1.0);
        assert_eq!(loss_img(&x, &x).unwrap(), 0.0);
    }
}
