//! Feature-distortion objective, l-infinity projection, the self-supervised
//! perturbation attack, supervised sign-gradient baselines and the
//! straight-through (BPDA) variant that attacks through a purifier.

mod distortion;
mod diversity;
mod engine;

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::nn::{Tap, DEFAULT_TAP};
use crate::tensor::{Scalar, Tensor};

pub use distortion::{distance_on_tape, feature_distortion, DistanceMetric};
pub use diversity::{diversity_index_map, input_diversity_transform, DIVERSITY_MIN_SCALE};
pub use engine::{
    bpda_attack, dim, fgsm, ifgsm, mifgsm, rfgsm, run_attack, ssp_attack, ssp_attack_traced, AttackOutcome, BpdaTarget,
    CrossEntropyLoss, FeatureLoss, LossModel,
};

/// Attack family.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Method {
    Fgsm,
    Rfgsm,
    Ifgsm,
    Mifgsm,
    Dim,
    Ssp,
    /// Straight-through attack through a purifier.
    Bpda,
}

impl Method {
    pub const ALL: [Method; 7] = [
        Method::Fgsm,
        Method::Rfgsm,
        Method::Ifgsm,
        Method::Mifgsm,
        Method::Dim,
        Method::Ssp,
        Method::Bpda,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Method::Fgsm => "fgsm",
            Method::Rfgsm => "rfgsm",
            Method::Ifgsm => "ifgsm",
            Method::Mifgsm => "mifgsm",
            Method::Dim => "dim",
            Method::Ssp => "ssp",
            Method::Bpda => "bpda",
        }
    }

    /// Whether the method needs class labels.
    pub fn uses_labels(self) -> bool {
        !matches!(self, Method::Ssp)
    }

    /// Whether the method optimizes feature distortion (and so takes a tap).
    pub fn uses_features(self) -> bool {
        matches!(self, Method::Ssp)
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.name() == s.to_ascii_lowercase())
            .ok_or_else(|| Error::invalid(format!("unknown attack method `{s}`")))
    }
}

/// Everything that determines one attack run. Budgets are in `[0, 1]`
/// pixel units.
#[derive(Debug, Clone, PartialEq)]
pub struct AttackSpec {
    pub method: Method,
    pub epsilon: f64,
    /// Per-iteration step size.
    pub step: f64,
    pub iterations: usize,
    /// Momentum decay for MI-FGSM and DIM.
    pub momentum: f64,
    /// Probability of applying the diversity transform (DIM).
    pub diversity_prob: f64,
    /// Feature tap for the self-supervised attack.
    pub tap: Tap,
    pub metric: DistanceMetric,
    /// Half-width of the uniform random start for the self-supervised
    /// attack; `None` means `epsilon / 2`.
    pub init_radius: Option<f64>,
    pub seed: u64,
}

impl AttackSpec {
    /// Defaults for `method` at budget `epsilon`: 10 iterations with step
    /// 1.6/255 for the iterative baselines, 100 for the self-supervised
    /// attack, momentum 1, diversity probability 0.7.
    pub fn new(method: Method, epsilon: f64) -> Self {
        let iterations = match method {
            Method::Fgsm | Method::Rfgsm => 1,
            Method::Ssp => 100,
            _ => 10,
        };
        let step = match method {
            Method::Fgsm | Method::Rfgsm => epsilon,
            _ => 1.6 / 255.0,
        };
        Self {
            method,
            epsilon,
            step,
            iterations,
            momentum: if matches!(method, Method::Mifgsm | Method::Dim) {
                1.0
            } else {
                0.0
            },
            diversity_prob: if method == Method::Dim { 0.7 } else { 0.0 },
            tap: Tap::from(DEFAULT_TAP),
            metric: DistanceMetric::Mae,
            init_radius: None,
            seed: 0,
        }
    }

    pub fn with_step(mut self, step: f64) -> Self {
        self.step = step;
        self
    }

    pub fn with_iterations(mut self, iterations: usize) -> Self {
        self.iterations = iterations;
        self
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn with_tap(mut self, tap: Tap) -> Self {
        self.tap = tap;
        self
    }

    pub fn with_metric(mut self, metric: DistanceMetric) -> Self {
        self.metric = metric;
        self
    }

    pub fn init_radius(&self) -> f64 {
        self.init_radius.unwrap_or(self.epsilon / 2.0)
    }

    /// Checks the budget contract. `epsilon = 0` is accepted and yields the
    /// clean input; otherwise `0 < step <= epsilon`. Zero iterations are
    /// accepted only for the self-supervised attack, where they return the
    /// projected random start.
    pub fn validate(&self) -> Result<()> {
        if !self.epsilon.is_finite() || self.epsilon < 0.0 {
            return Err(Error::invalid(format!("epsilon must be >= 0, got {}", self.epsilon)));
        }
        if !self.step.is_finite() || self.step <= 0.0 {
            return Err(Error::invalid(format!("step must be > 0, got {}", self.step)));
        }
        if self.epsilon > 0.0 && self.step > self.epsilon * (1.0 + 1e-9) {
            return Err(Error::invalid(format!(
                "step {} exceeds epsilon {}",
                self.step, self.epsilon
            )));
        }
        if self.iterations == 0 && self.method != Method::Ssp {
            return Err(Error::invalid("iterations must be >= 1"));
        }
        if !(0.0..=1.0).contains(&self.diversity_prob) {
            return Err(Error::invalid(format!(
                "diversity probability must be in [0, 1], got {}",
                self.diversity_prob
            )));
        }
        if !self.momentum.is_finite() || self.momentum < 0.0 {
            return Err(Error::invalid("momentum must be >= 0"));
        }
        if let Some(r) = self.init_radius {
            if !r.is_finite() || r < 0.0 {
                return Err(Error::invalid("init radius must be >= 0"));
            }
        }
        Ok(())
    }

    /// Compact, reproducible description of every field.
    pub fn digest(&self) -> String {
        format!(
            "{}|eps={:.6}|step={:.6}|iters={}|mu={}|p={}|tap={}|metric={}|r={:.6}|seed={}",
            self.method,
            self.epsilon * 255.0,
            self.step * 255.0,
            self.iterations,
            self.momentum,
            self.diversity_prob,
            self.tap.name(),
            self.metric,
            self.init_radius() * 255.0,
            self.seed
        )
    }
}

/// Clamps `x_adv` into the l-infinity ball of radius `epsilon` around `x`,
/// then into the valid pixel range `[0, 1]`.
pub fn linf_project<T: Scalar>(x_adv: &Tensor<T>, x: &Tensor<T>, epsilon: f64) -> Result<Tensor<T>> {
    if !(epsilon >= 0.0) {
        return Err(Error::invalid(format!("epsilon must be >= 0, got {epsilon}")));
    }
    let e = T::lit(epsilon);
    x_adv.zip_map(x, |a, c| a.max(c - e).min(c + e).max(T::zero()).min(T::one()))
}

/// Largest absolute elementwise difference.
pub fn linf_distance<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> f64 {
    a.max_abs_diff(b).as_f64()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::SeededRng;

    #[test]
    fn projection_examples() {
        let x: Tensor<f32> = SeededRng::new(0).uniform_tensor(vec![2, 3, 4, 4], 0.0, 1.0);
        let noisy: Tensor<f32> = SeededRng::new(1).uniform_tensor(vec![2, 3, 4, 4], 0.0, 1.0);
        assert_eq!(linf_project(&noisy, &x, 0.0).unwrap(), x);

        let eps = 0.05;
        let e = eps as f32;
        let pushed = x.map(|v| v + 2.0 * e);
        let out = linf_project(&pushed, &x, eps).unwrap();
        let expected = x.map(|v| (v + e).min(1.0));
        assert_eq!(out, expected);
        assert!(linf_project(&x, &x, -0.1).is_err());
    }

    #[test]
    fn projection_bound_random_trials() {
        let mut rng = SeededRng::new(2);
        for _ in 0..10_000 {
            let eps = rng.uniform(0.0, 0.2);
            let x: Tensor<f32> = rng.uniform_tensor(vec![6], 0.0, 1.0);
            let adv: Tensor<f32> = rng.uniform_tensor(vec![6], -0.5, 1.5);
            let p = linf_project(&adv, &x, eps).unwrap();
            assert!(linf_distance(&p, &x) <= eps + 2f64.powi(-20));
            assert!(p.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
        }
    }

    #[test]
    fn spec_validation() {
        let ok = AttackSpec::new(Method::Ifgsm, 16.0 / 255.0);
        ok.validate().unwrap();
        assert!(ok.clone().with_step(0.5).validate().is_err());
        assert!(ok.clone().with_iterations(0).validate().is_err());
        AttackSpec::new(Method::Ssp, 16.0 / 255.0)
            .with_iterations(0)
            .validate()
            .unwrap();
        let mut bad_p = AttackSpec::new(Method::Dim, 0.1);
        bad_p.diversity_prob = 1.5;
        assert!(bad_p.validate().is_err());
        AttackSpec::new(Method::Ssp, 0.0).validate().unwrap();
    }

    #[test]
    fn method_round_trip() {
        for m in Method::ALL {
            assert_eq!(m.name().parse::<Method>().unwrap(), m);
        }
        assert!("pgd".parse::<Method>().is_err());
    }

    #[test]
    fn paper_defaults() {
        let s = AttackSpec::new(Method::Ssp, 16.0 / 255.0);
        assert_eq!((s.iterations, s.step), (100, 1.6 / 255.0));
        let m = AttackSpec::new(Method::Mifgsm, 16.0 / 255.0);
        assert_eq!((m.iterations, m.momentum), (10, 1.0));
        assert_eq!(AttackSpec::new(Method::Dim, 0.1).diversity_prob, 0.7);
    }
}
