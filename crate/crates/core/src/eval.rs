//! Metrics, experiment drivers and the CSV evaluation report.

use std::collections::HashSet;
use std::path::Path;

use crate::attacks::{run_attack, AttackSpec, DistanceMetric, Method};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::io::write_atomic;
use crate::nn::{purify, NetworkDef, Tap};
use crate::tensor::{SeededRng, Tensor};

/// Samples per forward/attack chunk.
pub const EVAL_CHUNK: usize = 50;

/// Row-wise argmax of `[N, K]` scores; ties go to the lowest index.
pub fn argmax_rows(logits: &Tensor<f32>) -> Vec<usize> {
    let k = logits.sample_len();
    (0..logits.batch())
        .map(|i| {
            let row = logits.sample(i);
            (1..k).fold(0, |best, j| if row[j] > row[best] { j } else { best })
        })
        .collect()
}

/// Whether `label` is among the `k` largest entries of `row`, ranking ties
/// by lowest index.
fn in_top_k(row: &[f32], label: usize, k: usize) -> bool {
    let v = row[label];
    let ahead = row
        .iter()
        .enumerate()
        .filter(|&(j, &s)| s > v || (s == v && j < label))
        .count();
    ahead < k
}

/// Logits of `x`, computed in chunks.
pub fn logits(net: &NetworkDef<f32>, x: &Tensor<f32>) -> Result<Tensor<f32>> {
    let n = x.batch();
    let mut parts = Vec::new();
    for start in (0..n).step_by(EVAL_CHUNK) {
        let idx: Vec<usize> = (start..(start + EVAL_CHUNK).min(n)).collect();
        parts.push(net.infer(&x.select(&idx))?);
    }
    Tensor::stack_batches(&parts)
}

pub fn predict(net: &NetworkDef<f32>, x: &Tensor<f32>) -> Result<Vec<usize>> {
    Ok(argmax_rows(&logits(net, x)?))
}

pub fn top_k_from_logits(logits: &Tensor<f32>, labels: &[usize], k: usize) -> Result<f64> {
    if k == 0 {
        return Err(Error::invalid("k must be >= 1"));
    }
    if logits.batch() != labels.len() || labels.is_empty() {
        return Err(Error::shape(
            "top_k_accuracy",
            format!("{} rows for {} labels", logits.batch(), labels.len()),
        ));
    }
    let hits = labels
        .iter()
        .enumerate()
        .filter(|&(i, &l)| in_top_k(logits.sample(i), l, k))
        .count();
    Ok(hits as f64 / labels.len() as f64)
}

pub fn top_k_accuracy(net: &NetworkDef<f32>, x: &Tensor<f32>, labels: &[usize], k: usize) -> Result<f64> {
    top_k_from_logits(&logits(net, x)?, labels, k)
}

/// Fraction of samples whose predicted class changes from `clean` to `adv`.
pub fn fooling_rate(net: &NetworkDef<f32>, clean: &Tensor<f32>, adv: &Tensor<f32>) -> Result<f64> {
    if clean.shape() != adv.shape() || clean.batch() == 0 {
        return Err(Error::shape(
            "fooling_rate",
            format!("{:?} vs {:?}", clean.shape(), adv.shape()),
        ));
    }
    let a = predict(net, clean)?;
    let b = predict(net, adv)?;
    Ok(a.iter().zip(&b).filter(|(p, q)| p != q).count() as f64 / a.len() as f64)
}

/// Models an attack may draw on.
#[derive(Clone, Copy)]
pub struct AttackModels<'a> {
    /// Source model for label-based attacks.
    pub classifier: Option<&'a NetworkDef<f32>>,
    pub extractor: Option<&'a NetworkDef<f32>>,
    /// Purifier attacked through by BPDA.
    pub purifier: Option<&'a NetworkDef<f32>>,
}

/// Runs `spec` over the whole set in chunks of [`EVAL_CHUNK`]. Chunk `i`
/// uses a seed derived from `spec.seed` and `i`, so the result does not
/// depend on anything but the spec and the data.
pub fn attack_dataset(
    spec: &AttackSpec,
    x: &Tensor<f32>,
    labels: &[usize],
    models: AttackModels<'_>,
) -> Result<Tensor<f32>> {
    let n = x.batch();
    let mut parts = Vec::new();
    for (chunk, start) in (0..n).step_by(EVAL_CHUNK).enumerate() {
        let idx: Vec<usize> = (start..(start + EVAL_CHUNK).min(n)).collect();
        let mut s = spec.clone();
        s.seed = SeededRng::derive(spec.seed, chunk as u64).next_u64();
        let xl: Vec<usize> = idx.iter().map(|&i| labels[i]).collect();
        let labels = (!xl.is_empty() && labels.len() == n).then_some(xl.as_slice());
        parts.push(run_attack(
            &s,
            &x.select(&idx),
            labels,
            models.classifier,
            models.extractor,
            models.purifier,
        )?);
    }
    Tensor::stack_batches(&parts)
}

/// Clamped purifier output, computed in chunks.
pub fn purify_all(purifier: &NetworkDef<f32>, x: &Tensor<f32>) -> Result<Tensor<f32>> {
    let n = x.batch();
    let mut parts = Vec::new();
    for start in (0..n).step_by(EVAL_CHUNK) {
        let idx: Vec<usize> = (start..(start + EVAL_CHUNK).min(n)).collect();
        parts.push(purify(purifier, &x.select(&idx))?);
    }
    Tensor::stack_batches(&parts)
}

/// Randomized purification: uniform noise of the given magnitude, clamp to
/// `[0, 1]`, then purify.
pub fn dynamic_defense_purify(
    purifier: &NetworkDef<f32>,
    x: &Tensor<f32>,
    magnitude: f64,
    seed: u64,
) -> Result<Tensor<f32>> {
    if !(magnitude >= 0.0) {
        return Err(Error::invalid(format!("noise magnitude must be >= 0, got {magnitude}")));
    }
    if magnitude == 0.0 {
        return purify_all(purifier, x);
    }
    let noise: Tensor<f32> = SeededRng::new(seed).uniform_tensor(x.shape().to_vec(), -magnitude, magnitude);
    let noisy = x.zip_map(&noise, |a, b| (a + b).clamp(0.0, 1.0))?;
    purify_all(purifier, &noisy)
}

/// Per-sample distance between tap activations of `x` and `x_adv`.
pub fn per_sample_distortion(
    net: &NetworkDef<f32>,
    x: &Tensor<f32>,
    x_adv: &Tensor<f32>,
    tap: &Tap,
    metric: DistanceMetric,
) -> Result<Vec<f64>> {
    if x.shape() != x_adv.shape() {
        return Err(Error::shape(
            "per_sample_distortion",
            format!("{:?} vs {:?}", x.shape(), x_adv.shape()),
        ));
    }
    (0..x.batch())
        .map(|i| crate::attacks::feature_distortion(net, &x.select(&[i]), &x_adv.select(&[i]), tap, metric))
        .collect()
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

#[derive(Debug, Clone, PartialEq)]
pub struct CurvePoint {
    pub iterations: usize,
    pub mean_distortion: f64,
    pub fooling_rate: f64,
    /// Distortion of every sample, for resampling.
    pub per_sample: Vec<f64>,
}

/// Runs `template` with each iteration count of `grid` and records mean
/// feature distortion at `tap` on `source` and the fooling rate on the
/// held-out `target`. Label-based methods attack `source` as a classifier.
pub fn distortion_curve(
    source: &NetworkDef<f32>,
    target: &NetworkDef<f32>,
    template: &AttackSpec,
    data: &Dataset,
    tap: &Tap,
    grid: &[usize],
) -> Result<Vec<CurvePoint>> {
    let models = AttackModels {
        classifier: Some(source),
        extractor: Some(source),
        purifier: None,
    };
    grid.iter()
        .map(|&t| {
            let spec = template.clone().with_iterations(t);
            let adv = attack_dataset(&spec, &data.images, &data.labels, models)?;
            let per_sample = per_sample_distortion(source, &data.images, &adv, tap, template.metric)?;
            Ok(CurvePoint {
                iterations: t,
                mean_distortion: mean(&per_sample),
                fooling_rate: fooling_rate(target, &data.images, &adv)?,
                per_sample,
            })
        })
        .collect()
}

/// Fraction of bootstrap resamples (drawn with `seed`) in which the mean
/// of each curve point is at least that of the previous one.
pub fn bootstrap_monotone_fraction(curve: &[CurvePoint], resamples: usize, seed: u64) -> f64 {
    let n = curve.first().map_or(0, |c| c.per_sample.len());
    if n == 0 || resamples == 0 {
        return 0.0;
    }
    let mut rng = SeededRng::new(seed);
    let ok = (0..resamples)
        .filter(|_| {
            let idx: Vec<usize> = (0..n).map(|_| rng.below(n)).collect();
            let means: Vec<f64> = curve
                .iter()
                .map(|c| idx.iter().map(|&i| c.per_sample[i]).sum::<f64>() / n as f64)
                .collect();
            means.windows(2).all(|w| w[1] >= w[0])
        })
        .count();
    ok as f64 / resamples as f64
}

/// Self-supervised attack at each tap of `source`, scored by fooling rate
/// on `target`.
pub fn layer_sweep(
    source: &NetworkDef<f32>,
    target: &NetworkDef<f32>,
    data: &Dataset,
    taps: &[Tap],
    template: &AttackSpec,
) -> Result<Vec<(Tap, f64)>> {
    let models = AttackModels {
        classifier: None,
        extractor: Some(source),
        purifier: None,
    };
    taps.iter()
        .map(|tap| {
            let mut spec = template.clone().with_tap(tap.clone());
            spec.method = Method::Ssp;
            let adv = attack_dataset(&spec, &data.images, &data.labels, models)?;
            Ok((tap.clone(), fooling_rate(target, &data.images, &adv)?))
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReportRow {
    pub model: String,
    pub attack: String,
    pub defense: String,
    pub metric: String,
    pub value: f64,
    pub n: usize,
    pub seed: u64,
}

/// Evaluation results keyed by `(model, attack, defense, metric)`.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct EvalReport {
    rows: Vec<ReportRow>,
}

impl EvalReport {
    pub const CSV_HEADER: &'static str = "model,attack,defense,metric,value,n,seed";

    pub fn new() -> Self {
        Self::default()
    }

    pub fn rows(&self) -> &[ReportRow] {
        &self.rows
    }

    /// Adds a row. Rates must lie in `[0, 1]`, `n` must be positive and the
    /// key must be new.
    pub fn push(&mut self, row: ReportRow) -> Result<()> {
        if row.n == 0 {
            return Err(Error::invalid("report row with zero samples"));
        }
        if row.metric.starts_with("top") || row.metric.ends_with("rate") {
            if !(0.0..=1.0).contains(&row.value) {
                return Err(Error::invalid(format!("rate {} outside [0, 1]", row.value)));
            }
        }
        let key = |r: &ReportRow| (r.model.clone(), r.attack.clone(), r.defense.clone(), r.metric.clone());
        if self.rows.iter().any(|r| key(r) == key(&row)) {
            return Err(Error::invalid(format!("duplicate report row {:?}", key(&row))));
        }
        self.rows.push(row);
        Ok(())
    }

    /// Value of the row with this key.
    pub fn value(&self, attack: &str, defense: &str, metric: &str) -> Option<f64> {
        self.rows
            .iter()
            .find(|r| r.attack == attack && r.defense == defense && r.metric == metric)
            .map(|r| r.value)
    }

    pub fn to_csv(&self) -> String {
        let quote = |s: &str| {
            if s.contains([',', '"', '\n']) {
                format!("\"{}\"", s.replace('"', "\"\""))
            } else {
                s.to_string()
            }
        };
        let mut out = format!("{}\n", Self::CSV_HEADER);
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{},{},{},{},{}\n",
                quote(&r.model),
                quote(&r.attack),
                quote(&r.defense),
                quote(&r.metric),
                r.value,
                r.n,
                r.seed
            ));
        }
        out
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        write_atomic(path, self.to_csv().as_bytes())
    }
}

/// Defense column of a table: a name and an optional purifier.
pub struct Defense<'a> {
    pub name: String,
    pub purifier: Option<&'a NetworkDef<f32>>,
}

/// Top-1 accuracy of `classifier` for every defense under no attack and
/// under each attack. Attacks draw on `models`; BPDA attacks are crafted
/// through each defense's purifier (the identity when undefended).
pub fn defense_table(
    model_id: &str,
    classifier: &NetworkDef<f32>,
    defenses: &[Defense<'_>],
    attacks: &[AttackSpec],
    data: &Dataset,
    models: AttackModels<'_>,
) -> Result<EvalReport> {
    if data.is_empty() {
        return Err(Error::invalid("empty evaluation set"));
    }
    let mut report = EvalReport::new();
    let n = data.len();
    let identity = NetworkDef::<f32>::identity(data.image_shape()[0]);
    let shared: Vec<Option<Tensor<f32>>> = attacks
        .iter()
        .map(|s| {
            if s.method == Method::Bpda {
                Ok(None)
            } else {
                attack_dataset(s, &data.images, &data.labels, models).map(Some)
            }
        })
        .collect::<Result<_>>()?;
    let mut names = HashSet::new();
    for d in defenses {
        if !names.insert(d.name.as_str()) {
            return Err(Error::invalid(format!("duplicate defense `{}`", d.name)));
        }
        let defend = |x: &Tensor<f32>| match d.purifier {
            Some(p) => purify_all(p, x),
            None => Ok(x.clone()),
        };
        let mut cell = |attack: String, seed: u64, x: &Tensor<f32>| -> Result<()> {
            let acc = top_k_accuracy(classifier, &defend(x)?, &data.labels, 1)?;
            report.push(ReportRow {
                model: model_id.to_string(),
                attack,
                defense: d.name.clone(),
                metric: "top1".into(),
                value: acc,
                n,
                seed,
            })
        };
        cell("none".into(), 0, &data.images)?;
        for (spec, adv) in attacks.iter().zip(&shared) {
            match adv {
                Some(adv) => cell(spec.digest(), spec.seed, adv)?,
                None => {
                    let through = AttackModels {
                        purifier: Some(d.purifier.unwrap_or(&identity)),
                        ..models
                    };
                    let adv = attack_dataset(spec, &data.images, &data.labels, through)?;
                    cell(spec.digest(), spec.seed, &adv)?
                }
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn argmax_ties_lowest() {
        let l = Tensor::new(vec![2, 3], vec![1.0, 3.0, 3.0, 2.0, 2.0, 2.0]).unwrap();
        assert_eq!(argmax_rows(&l), vec![1, 0]);
        assert_eq!(top_k_from_logits(&l, &[2, 1], 1).unwrap(), 0.0);
        assert_eq!(top_k_from_logits(&l, &[2, 1], 2).unwrap(), 1.0);
        assert_eq!(top_k_from_logits(&l, &[2, 2], 3).unwrap(), 1.0);
        assert!(top_k_from_logits(&l, &[0, 0], 0).is_err());
    }

    #[test]
    fn report_invariants() {
        let row = |attack: &str, value| ReportRow {
            model: "t".into(),
            attack: attack.into(),
            defense: "none".into(),
            metric: "top1".into(),
            value,
            n: 10,
            seed: 0,
        };
        let mut r = EvalReport::new();
        r.push(row("a", 0.5)).unwrap();
        assert!(r.push(row("a", 0.4)).is_err());
        assert!(r.push(row("b", 1.5)).is_err());
        assert!(r.push(ReportRow { n: 0, ..row("c", 0.1) }).is_err());
        r.push(row("x,y", 0.25)).unwrap();
        assert_eq!(
            r.to_csv(),
            "model,attack,defense,metric,value,n,seed\nt,a,none,top1,0.5,10,0\nt,\"x,y\",none,top1,0.25,10,0\n"
        );
    }
}
