use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::nn::{Mode, NetworkDef, Tap};
use crate::tensor::{Scalar, Tape, Tensor, Var};

/// Distance between two feature (or pixel) tensors.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub enum DistanceMetric {
    /// Mean absolute error over all elements.
    #[default]
    Mae,
    /// Per-sample Euclidean norm, averaged over the batch.
    L2,
    /// Per-sample `1 - cos(a, b)`, averaged over the batch.
    Cosine,
}

impl fmt::Display for DistanceMetric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            DistanceMetric::Mae => "mae",
            DistanceMetric::L2 => "l2",
            DistanceMetric::Cosine => "cosine",
        })
    }
}

impl FromStr for DistanceMetric {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "mae" | "l1" => Ok(DistanceMetric::Mae),
            "l2" => Ok(DistanceMetric::L2),
            "cosine" | "cos" => Ok(DistanceMetric::Cosine),
            _ => Err(Error::invalid(format!("unknown distance metric `{s}`"))),
        }
    }
}

const COSINE_EPS: f64 = 1e-12;

/// Records `metric(a, b)` on the tape as a scalar.
pub fn distance_on_tape<T: Scalar>(tape: &mut Tape<T>, a: Var, b: Var, metric: DistanceMetric) -> Result<Var> {
    if tape.shape(a) != tape.shape(b) {
        return Err(Error::shape(
            "distance",
            format!("{:?} vs {:?}", tape.shape(a), tape.shape(b)),
        ));
    }
    match metric {
        DistanceMetric::Mae => {
            let d = tape.sub(a, b)?;
            let d = tape.abs(d);
            Ok(tape.mean(d))
        }
        DistanceMetric::L2 => {
            let d = tape.sub(a, b)?;
            let sq = tape.mul(d, d)?;
            let per = tape.sum_per_sample(sq);
            let norms = tape.sqrt(per);
            Ok(tape.mean(norms))
        }
        DistanceMetric::Cosine => {
            let ab = tape.mul(a, b)?;
            let dot = tape.sum_per_sample(ab);
            let aa = tape.mul(a, a)?;
            let na = tape.sum_per_sample(aa);
            let bb = tape.mul(b, b)?;
            let nb = tape.sum_per_sample(bb);
            let prod = tape.mul(na, nb)?;
            let norm = tape.sqrt(prod);
            let eps = tape.constant(Tensor::scalar(T::lit(COSINE_EPS)));
            let denom = tape.add(norm, eps)?;
            let cos = tape.div(dot, denom)?;
            let one = tape.constant(Tensor::scalar(T::one()));
            let dist = tape.sub(one, cos)?;
            Ok(tape.mean(dist))
        }
    }
}

/// Distance between the tap activations of `x` and `x_adv`.
pub fn feature_distortion<T: Scalar>(
    net: &NetworkDef<T>,
    x: &Tensor<T>,
    x_adv: &Tensor<T>,
    tap: &Tap,
    metric: DistanceMetric,
) -> Result<f64> {
    if x.shape() != x_adv.shape() {
        return Err(Error::shape(
            "feature_distortion",
            format!("{:?} vs {:?}", x.shape(), x_adv.shape()),
        ));
    }
    let mut tape = Tape::new();
    let bound = net.bind(&mut tape, false);
    let xa = tape.constant(x.clone());
    let xb = tape.constant(x_adv.clone());
    let fa = net.forward_to_taps(&mut tape, &bound, xa, Mode::Eval, std::slice::from_ref(tap))?;
    let fb = net.forward_to_taps(&mut tape, &bound, xb, Mode::Eval, std::slice::from_ref(tap))?;
    let d = distance_on_tape(&mut tape, fa.taps[0], fb.taps[0], metric)?;
    Ok(tape.value(d).item().as_f64())
}
