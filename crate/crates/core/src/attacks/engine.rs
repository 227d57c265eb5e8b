use super::distortion::{distance_on_tape, DistanceMetric};
use super::diversity::diversity_index_map;
use super::{linf_project, AttackSpec, Method};
use crate::error::{Error, Result};
use crate::nn::{purify, Mode, NetworkDef, Tap};
use crate::tensor::{Scalar, SeededRng, Tape, Tensor, Var};

/// A differentiable objective of the input batch that an attack ascends.
pub trait LossModel<T: Scalar> {
    /// Records the scalar objective for input `x` on `tape`.
    fn loss(&self, tape: &mut Tape<T>, x: Var) -> Result<Var>;
}

/// Mean cross-entropy of a classifier against fixed labels.
pub struct CrossEntropyLoss<'a, T: Scalar> {
    pub net: &'a NetworkDef<T>,
    pub labels: &'a [usize],
}

impl<T: Scalar> LossModel<T> for CrossEntropyLoss<'_, T> {
    fn loss(&self, tape: &mut Tape<T>, x: Var) -> Result<Var> {
        let bound = self.net.bind(tape, false);
        let out = self.net.forward(tape, &bound, x, Mode::Eval)?;
        tape.cross_entropy(out.out(), self.labels)
    }
}

/// Feature distortion against the clean batch's tap activations. No label
/// or task output is consulted.
pub struct FeatureLoss<'a, T: Scalar> {
    net: &'a NetworkDef<T>,
    tap: Tap,
    metric: DistanceMetric,
    clean: Tensor<T>,
}

impl<'a, T: Scalar> FeatureLoss<'a, T> {
    pub fn new(net: &'a NetworkDef<T>, clean: &Tensor<T>, tap: &Tap, metric: DistanceMetric) -> Result<Self> {
        let clean = net
            .infer_taps(clean, std::slice::from_ref(tap))?
            .pop()
            .expect("one tap requested");
        Ok(Self {
            net,
            tap: tap.clone(),
            metric,
            clean,
        })
    }
}

impl<T: Scalar> LossModel<T> for FeatureLoss<'_, T> {
    fn loss(&self, tape: &mut Tape<T>, x: Var) -> Result<Var> {
        let bound = self.net.bind(tape, false);
        let out = self
            .net
            .forward_to_taps(tape, &bound, x, Mode::Eval, std::slice::from_ref(&self.tap))?;
        let clean = tape.constant(self.clean.clone());
        distance_on_tape(tape, clean, out.taps[0], self.metric)
    }
}

/// Result of an attack run.
#[derive(Debug, Clone)]
pub struct AttackOutcome<T: Scalar> {
    pub adversarial: Tensor<T>,
    /// Final accumulated momentum for MI-FGSM and DIM.
    pub momentum: Option<Tensor<T>>,
    /// Objective value at each iterate `x'_0 ..= x'_T`, when tracing.
    pub trace: Vec<f64>,
}

fn loss_and_grad<T: Scalar>(
    model: &dyn LossModel<T>,
    x: &Tensor<T>,
    diversity: Option<Vec<Option<usize>>>,
) -> Result<(f64, Tensor<T>)> {
    let mut tape = Tape::new();
    let leaf = tape.leaf(x.clone(), true);
    let input = match diversity {
        Some(index) => tape.gather(leaf, index, x.shape())?,
        None => leaf,
    };
    let loss = model.loss(&mut tape, input)?;
    let value = tape.value(loss).item().as_f64();
    let grads = tape.backward(loss)?;
    Ok((value, grads.wrt(leaf)))
}

fn add_scaled_sign<T: Scalar>(x: &Tensor<T>, dir: &Tensor<T>, step: T) -> Result<Tensor<T>> {
    x.zip_map(dir, |v, d| v + step * crate::tensor::sign_of(d))
}

/// Per-sample l1 normalization; all-zero samples stay zero.
fn l1_normalize<T: Scalar>(g: &Tensor<T>) -> Tensor<T> {
    let per = g.sample_len();
    let norms: Vec<T> = (0..g.batch())
        .map(|i| g.sample(i).iter().map(|v| v.abs()).sum())
        .collect();
    Tensor::from_fn(g.shape().to_vec(), |k| {
        let n = norms[k / per];
        if n > T::zero() {
            g.data()[k] / n
        } else {
            T::zero()
        }
    })
}

#[derive(Debug, Clone, Copy)]
enum Start {
    Clean,
    Uniform(f64),
    SignStep(f64),
}

struct Plan {
    start: Start,
    step: f64,
    iterations: usize,
    momentum: Option<f64>,
    diversity: f64,
}

fn plan(spec: &AttackSpec) -> Plan {
    let eps = spec.epsilon;
    match spec.method {
        Method::Fgsm => Plan {
            start: Start::Clean,
            step: eps,
            iterations: 1,
            momentum: None,
            diversity: 0.0,
        },
        Method::Rfgsm => {
            let alpha = eps / 3.0;
            Plan {
                start: Start::SignStep(alpha),
                step: eps - alpha,
                iterations: 1,
                momentum: None,
                diversity: 0.0,
            }
        }
        Method::Ifgsm => Plan {
            start: Start::Clean,
            step: spec.step,
            iterations: spec.iterations,
            momentum: None,
            diversity: 0.0,
        },
        Method::Mifgsm | Method::Dim => Plan {
            start: Start::Clean,
            step: spec.step,
            iterations: spec.iterations,
            momentum: Some(spec.momentum),
            diversity: if spec.method == Method::Dim {
                spec.diversity_prob
            } else {
                0.0
            },
        },
        Method::Ssp | Method::Bpda => Plan {
            start: Start::Uniform(spec.init_radius()),
            step: spec.step,
            iterations: spec.iterations,
            momentum: None,
            diversity: 0.0,
        },
    }
}

/// Shared sign-gradient ascent loop with l-infinity projection. When a
/// purifier is given the objective is evaluated at the purified iterate and
/// its gradient is used unchanged for the iterate (straight-through).
fn ascend<T: Scalar>(
    x: &Tensor<T>,
    spec: &AttackSpec,
    model: &dyn LossModel<T>,
    purifier: Option<&NetworkDef<T>>,
    trace: bool,
) -> Result<AttackOutcome<T>> {
    spec.validate()?;
    let plan = plan(spec);
    let mut rng = SeededRng::new(spec.seed);
    let start = match plan.start {
        Start::Clean => x.clone(),
        Start::Uniform(r) => {
            let noise = rng.uniform_tensor::<T>(x.shape().to_vec(), -r, r);
            x.zip_map(&noise, |a, b| a + b)?
        }
        Start::SignStep(alpha) => {
            let a = T::lit(alpha);
            let noise = rng.normal_tensor::<T>(x.shape().to_vec(), 0.0, 1.0);
            add_scaled_sign(x, &noise, a)?
        }
    };
    let mut adv = linf_project(&start, x, spec.epsilon)?;
    let mut momentum = plan.momentum.map(|_| Tensor::zeros(x.shape().to_vec()));
    let mut values = Vec::new();
    let step = T::lit(plan.step);
    for _ in 0..plan.iterations {
        let diversity = if plan.diversity > 0.0 {
            diversity_index_map(x.shape(), plan.diversity, &mut rng)?
        } else {
            None
        };
        let (value, grad) = match purifier {
            Some(p) => loss_and_grad(model, &purify(p, &adv)?, diversity)?,
            None => loss_and_grad(model, &adv, diversity)?,
        };
        if !value.is_finite() || !grad.is_finite() {
            return Err(Error::NonFinite(format!("{} attack gradient", spec.method)));
        }
        if trace {
            values.push(value);
        }
        let dir = match (momentum.as_mut(), plan.momentum) {
            (Some(g), Some(mu)) => {
                let normalized = l1_normalize(&grad);
                let mu = T::lit(mu);
                *g = g.zip_map(&normalized, |a, b| mu * a + b)?;
                g.clone()
            }
            _ => grad,
        };
        adv = linf_project(&add_scaled_sign(&adv, &dir, step)?, x, spec.epsilon)?;
    }
    if trace {
        let at = match purifier {
            Some(p) => purify(p, &adv)?,
            None => adv.clone(),
        };
        let mut tape = Tape::new();
        let v = tape.constant(at);
        let l = model.loss(&mut tape, v)?;
        values.push(tape.value(l).item().as_f64());
    }
    Ok(AttackOutcome {
        adversarial: adv,
        momentum,
        trace: values,
    })
}

fn expect_method(spec: &AttackSpec, allowed: &[Method]) -> Result<()> {
    if allowed.contains(&spec.method) {
        Ok(())
    } else {
        Err(Error::invalid(format!(
            "attack spec has method {}, expected one of {:?}",
            spec.method, allowed
        )))
    }
}

fn supervised<T: Scalar>(
    method: Method,
    classifier: &NetworkDef<T>,
    x: &Tensor<T>,
    labels: &[usize],
    spec: &AttackSpec,
) -> Result<AttackOutcome<T>> {
    expect_method(spec, &[method])?;
    if labels.len() != x.batch() {
        return Err(Error::shape(
            "attack",
            format!("{} labels for batch of {}", labels.len(), x.batch()),
        ));
    }
    let model = CrossEntropyLoss {
        net: classifier,
        labels,
    };
    ascend(x, spec, &model, None, false)
}

/// Single signed-gradient step of size epsilon.
pub fn fgsm<T: Scalar>(
    classifier: &NetworkDef<T>,
    x: &Tensor<T>,
    labels: &[usize],
    spec: &AttackSpec,
) -> Result<Tensor<T>> {
    Ok(supervised(Method::Fgsm, classifier, x, labels, spec)?.adversarial)
}

/// Random signed step of epsilon/3, then a gradient step with the rest of
/// the budget.
pub fn rfgsm<T: Scalar>(
    classifier: &NetworkDef<T>,
    x: &Tensor<T>,
    labels: &[usize],
    spec: &AttackSpec,
) -> Result<Tensor<T>> {
    Ok(supervised(Method::Rfgsm, classifier, x, labels, spec)?.adversarial)
}

pub fn ifgsm<T: Scalar>(
    classifier: &NetworkDef<T>,
    x: &Tensor<T>,
    labels: &[usize],
    spec: &AttackSpec,
) -> Result<Tensor<T>> {
    Ok(supervised(Method::Ifgsm, classifier, x, labels, spec)?.adversarial)
}

/// Momentum iterative attack. The returned outcome carries the final
/// accumulated momentum.
pub fn mifgsm<T: Scalar>(
    classifier: &NetworkDef<T>,
    x: &Tensor<T>,
    labels: &[usize],
    spec: &AttackSpec,
) -> Result<AttackOutcome<T>> {
    supervised(Method::Mifgsm, classifier, x, labels, spec)
}

/// Momentum iterative attack with the input diversity transform applied
/// before each gradient evaluation.
pub fn dim<T: Scalar>(
    classifier: &NetworkDef<T>,
    x: &Tensor<T>,
    labels: &[usize],
    spec: &AttackSpec,
) -> Result<Tensor<T>> {
    Ok(supervised(Method::Dim, classifier, x, labels, spec)?.adversarial)
}

/// Self-supervised perturbation: uniform random start, then sign ascent on
/// the feature distortion at `spec.tap`.
pub fn ssp_attack<T: Scalar>(extractor: &NetworkDef<T>, x: &Tensor<T>, spec: &AttackSpec) -> Result<Tensor<T>> {
    Ok(ssp_attack_traced(extractor, x, spec, false)?.adversarial)
}

/// [`ssp_attack`] that optionally records the distortion at every iterate.
pub fn ssp_attack_traced<T: Scalar>(
    extractor: &NetworkDef<T>,
    x: &Tensor<T>,
    spec: &AttackSpec,
    trace: bool,
) -> Result<AttackOutcome<T>> {
    expect_method(spec, &[Method::Ssp])?;
    let model = FeatureLoss::new(extractor, x, &spec.tap, spec.metric)?;
    ascend(x, spec, &model, None, trace)
}

/// Model attacked through a purifier.
pub enum BpdaTarget<'a, T: Scalar> {
    /// Cross-entropy ascent on a classifier, starting from the clean input.
    Classifier {
        net: &'a NetworkDef<T>,
        labels: &'a [usize],
    },
    /// Feature-distortion ascent with a random start.
    Features { net: &'a NetworkDef<T> },
}

/// Attack whose forward pass runs through `purifier` and whose backward
/// pass treats the purifier as the identity.
pub fn bpda_attack<T: Scalar>(
    purifier: &NetworkDef<T>,
    target: BpdaTarget<'_, T>,
    x: &Tensor<T>,
    spec: &AttackSpec,
) -> Result<Tensor<T>> {
    expect_method(spec, &[Method::Bpda])?;
    let outcome = match target {
        BpdaTarget::Classifier { net, labels } => {
            let model = CrossEntropyLoss { net, labels };
            let mut inner = spec.clone();
            inner.method = Method::Ifgsm;
            ascend(x, &inner, &model, Some(purifier), false)?
        }
        BpdaTarget::Features { net } => {
            let model = FeatureLoss::new(net, x, &spec.tap, spec.metric)?;
            ascend(x, spec, &model, Some(purifier), false)?
        }
    };
    Ok(outcome.adversarial)
}

/// Dispatches on `spec.method`. Supervised methods need `classifier` and
/// `labels`; SSP needs `extractor`; BPDA needs `extractor` and `purifier`
/// and runs the feature-distortion variant.
pub fn run_attack<T: Scalar>(
    spec: &AttackSpec,
    x: &Tensor<T>,
    labels: Option<&[usize]>,
    classifier: Option<&NetworkDef<T>>,
    extractor: Option<&NetworkDef<T>>,
    purifier: Option<&NetworkDef<T>>,
) -> Result<Tensor<T>> {
    let need = |what: &str| Error::invalid(format!("{} attack needs {what}", spec.method));
    match spec.method {
        Method::Ssp => ssp_attack(extractor.ok_or_else(|| need("a feature extractor"))?, x, spec),
        Method::Bpda => bpda_attack(
            purifier.ok_or_else(|| need("a purifier"))?,
            BpdaTarget::Features {
                net: extractor.ok_or_else(|| need("a feature extractor"))?,
            },
            x,
            spec,
        ),
        m => {
            let net = classifier.ok_or_else(|| need("a classifier"))?;
            let labels = labels.ok_or_else(|| need("labels"))?;
            Ok(supervised(m, net, x, labels, spec)?.adversarial)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{build_feature_extractor, build_toy_classifier, ClassifierConfig, FeatureExtractorConfig};

    fn small_classifier() -> NetworkDef<f64> {
        build_toy_classifier(&ClassifierConfig {
            widths: vec![4, 4],
            num_classes: 3,
            seed: 11,
            ..Default::default()
        })
        .unwrap()
    }

    fn small_extractor() -> NetworkDef<f64> {
        build_feature_extractor(&FeatureExtractorConfig {
            widths: vec![4, 4, 4],
            depths: vec![1, 1, 3],
            num_classes: 3,
            seed: 12,
            ..Default::default()
        })
        .unwrap()
    }

    fn batch() -> Tensor<f64> {
        SeededRng::new(4).uniform_tensor(vec![2, 3, 8, 8], 0.0, 1.0)
    }

    #[test]
    fn ssp_zero_iterations_is_projected_start() {
        let f = small_extractor();
        let x = batch();
        let eps = 16.0 / 255.0;
        let spec = AttackSpec::new(Method::Ssp, eps).with_iterations(0).with_seed(3);
        let adv = ssp_attack(&f, &x, &spec).unwrap();
        assert_ne!(adv, x);
        assert!(super::super::linf_distance(&adv, &x) <= eps / 2.0 + 1e-12);
        let mut rng = SeededRng::new(3);
        let noise: Tensor<f64> = rng.uniform_tensor(vec![2, 3, 8, 8], -eps / 2.0, eps / 2.0);
        let manual = linf_project(&x.zip_map(&noise, |a, b| a + b).unwrap(), &x, eps).unwrap();
        assert_eq!(adv, manual);
    }

    #[test]
    fn method_mismatch_rejected() {
        let f = small_extractor();
        let spec = AttackSpec::new(Method::Fgsm, 0.1);
        assert!(ssp_attack(&f, &batch(), &spec).is_err());
    }

    #[test]
    fn epsilon_zero_returns_input() {
        let t = small_classifier();
        let f = small_extractor();
        let x = batch();
        for m in [
            Method::Fgsm,
            Method::Rfgsm,
            Method::Ifgsm,
            Method::Mifgsm,
            Method::Dim,
            Method::Ssp,
        ] {
            let spec = AttackSpec::new(m, 0.0).with_step(1.6 / 255.0).with_iterations(2);
            let adv = run_attack(&spec, &x, Some(&[0, 1]), Some(&t), Some(&f), None).unwrap();
            assert_eq!(adv, x, "{m}");
        }
    }

    #[test]
    fn fgsm_increases_loss() {
        let t = small_classifier();
        let x = batch();
        let labels = [0, 2];
        let ce = |x: &Tensor<f64>| {
            let mut tape = Tape::new();
            let v = tape.constant(x.clone());
            let l = CrossEntropyLoss {
                net: &t,
                labels: &labels,
            }
            .loss(&mut tape, v)
            .unwrap();
            tape.value(l).item()
        };
        let adv = fgsm(&t, &x, &labels, &AttackSpec::new(Method::Fgsm, 4.0 / 255.0)).unwrap();
        assert!(ce(&adv) > ce(&x));
    }

    #[test]
    fn deterministic_given_seed() {
        let t = small_classifier();
        let x = batch();
        let spec = AttackSpec::new(Method::Dim, 8.0 / 255.0).with_seed(5);
        let a = dim(&t, &x, &[1, 1], &spec).unwrap();
        let b = dim(&t, &x, &[1, 1], &spec).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn bpda_identity_purifier_matches_plain_attacks() {
        let t = small_classifier();
        let f = small_extractor();
        let id = NetworkDef::<f64>::identity(3);
        let x = batch();
        let labels = [2, 0];
        let spec = AttackSpec::new(Method::Bpda, 8.0 / 255.0)
            .with_iterations(4)
            .with_seed(1);
        let through = bpda_attack(
            &id,
            BpdaTarget::Classifier {
                net: &t,
                labels: &labels,
            },
            &x,
            &spec,
        )
        .unwrap();
        let mut plain = spec.clone();
        plain.method = Method::Ifgsm;
        assert_eq!(through, ifgsm(&t, &x, &labels, &plain).unwrap());

        let through = bpda_attack(&id, BpdaTarget::Features { net: &f }, &x, &spec).unwrap();
        let mut plain = spec.clone();
        plain.method = Method::Ssp;
        assert_eq!(through, ssp_attack(&f, &x, &plain).unwrap());
    }

    #[test]
    fn wrong_label_count_rejected() {
        let t = small_classifier();
        let spec = AttackSpec::new(Method::Ifgsm, 0.1);
        assert!(ifgsm(&t, &batch(), &[0], &spec).is_err());
        assert!(ifgsm(&t, &batch(), &[0, 7], &spec).is_err());
    }
}
