//! Central finite differences against reverse-mode gradients, in f64.

use std::sync::Mutex;

use nrp_core::attacks::{distance_on_tape, DistanceMetric};
use nrp_core::nn::{
    build_critic, build_feature_extractor, build_purifier, build_toy_classifier, ClassifierConfig, CriticConfig,
    FeatureExtractorConfig, Mode, NetworkDef, PurifierConfig, Tap,
};
use nrp_core::tensor::{SeededRng, Tape, Tensor, Var};
use nrp_core::train::{critic_loss_on_tape, loss_adv_on_tape, loss_img_on_tape, GanForm};
use nrp_core::Result;

const H: f64 = 1e-6;
pub const TOL: f64 = 1e-5;
/// Coordinates probed per input tensor.
const PROBES: usize = 40;

/// Largest relative error seen by [`check`] so far in this process.
pub static WORST: Mutex<f64> = Mutex::new(0.0);

type Build = dyn Fn(&mut Tape<f64>, &[Var]) -> Result<Var>;

/// Reduces any output to a scalar with fixed random weights.
fn scalar_objective(tape: &mut Tape<f64>, out: Var) -> Result<Var> {
    let shape = tape.shape(out).to_vec();
    let r: Tensor<f64> = SeededRng::new(12345).uniform_tensor(shape, -1.0, 1.0);
    let rv = tape.constant(r);
    let m = tape.mul(out, rv)?;
    Ok(tape.sum(m))
}

fn eval(inputs: &[Tensor<f64>], f: &Build) -> f64 {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
    let out = f(&mut tape, &vars).unwrap();
    let s = scalar_objective(&mut tape, out).unwrap();
    tape.value(s).item()
}

/// Relative error `|a - n| / (|a| + |n|)` over probed coordinates of every
/// input that `differentiable` marks.
fn check(name: &str, inputs: Vec<Tensor<f64>>, differentiable: &[bool], f: &Build) -> f64 {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs
        .iter()
        .zip(differentiable)
        .map(|(t, &d)| tape.leaf(t.clone(), d))
        .collect();
    let out = f(&mut tape, &vars).unwrap();
    let s = scalar_objective(&mut tape, out).unwrap();
    let grads = tape.backward(s).unwrap();
    let mut rng = SeededRng::new(99);
    let (mut diff, mut norm) = (0.0f64, 0.0f64);
    for (k, (&v, &d)) in vars.iter().zip(differentiable).enumerate() {
        if !d {
            continue;
        }
        let analytic = grads.wrt(v);
        let n = inputs[k].numel();
        let coords: Vec<usize> = if n <= PROBES {
            (0..n).collect()
        } else {
            (0..PROBES).map(|_| rng.below(n)).collect()
        };
        for i in coords {
            let bump = |delta: f64| {
                let mut moved = inputs.clone();
                let mut data = moved[k].data().to_vec();
                data[i] += delta;
                moved[k] = Tensor::new(moved[k].shape().to_vec(), data).unwrap();
                eval(&moved, f)
            };
            let numeric = (bump(H) - bump(-H)) / (2.0 * H);
            let a = analytic.data()[i];
            diff += (a - numeric).powi(2);
            norm += a.powi(2) + numeric.powi(2);
        }
    }
    let rel = if norm == 0.0 { 0.0 } else { diff.sqrt() / norm.sqrt() };
    {
        let mut w = WORST.lock().unwrap_or_else(|e| e.into_inner());
        *w = w.max(rel);
    }
    assert!(rel < TOL, "{name}: relative error {rel:e}");
    assert!(norm > 0.0, "{name}: gradient vanished everywhere");
    rel
}

fn rand_t(rng: &mut SeededRng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    rng.uniform_tensor(shape.to_vec(), lo, hi)
}

/// Values with magnitude in `[0.2, 1]` and random sign, away from kinks at 0.
fn away_from_zero(rng: &mut SeededRng, shape: &[usize]) -> Tensor<f64> {
    let t: Tensor<f64> = rng.uniform_tensor(shape.to_vec(), 0.2, 1.0);
    t.map(|v| if rng_sign(v) { v } else { -v })
}

fn rng_sign(v: f64) -> bool {
    ((v * 1e6) as u64) % 2 == 0
}

fn shape4(rng: &mut SeededRng) -> Vec<usize> {
    vec![1 + rng.below(3), 1 + rng.below(3), 2 + rng.below(4), 2 + rng.below(4)]
}

pub fn elementwise_binary() {
    let mut rng = SeededRng::new(1);
    for trial in 0..3 {
        let s = shape4(&mut rng);
        let a = rand_t(&mut rng, &s, -1.0, 1.0);
        let b = rand_t(&mut rng, &s, 0.5, 1.5);
        let c = rand_t(&mut rng, &[], -1.0, 1.0);
        check(
            &format!("add#{trial}"),
            vec![a.clone(), b.clone()],
            &[true, true],
            &|t, v| t.add(v[0], v[1]),
        );
        check(
            &format!("sub#{trial}"),
            vec![a.clone(), b.clone()],
            &[true, true],
            &|t, v| t.sub(v[0], v[1]),
        );
        check(
            &format!("mul#{trial}"),
            vec![a.clone(), b.clone()],
            &[true, true],
            &|t, v| t.mul(v[0], v[1]),
        );
        check(
            &format!("div#{trial}"),
            vec![a.clone(), b.clone()],
            &[true, true],
            &|t, v| t.div(v[0], v[1]),
        );
        check(
            &format!("sub_scalar#{trial}"),
            vec![a.clone(), c.clone()],
            &[true, true],
            &|t, v| t.sub(v[0], v[1]),
        );
        check(
            &format!("div_scalar#{trial}"),
            vec![c.map(|x| x + 2.0), b.clone()],
            &[true, true],
            &|t, v| t.div(v[0], v[1]),
        );
    }
}

pub fn elementwise_unary() {
    let mut rng = SeededRng::new(2);
    for trial in 0..3 {
        let s = shape4(&mut rng);
        let a = rand_t(&mut rng, &s, -2.0, 2.0);
        let nz = away_from_zero(&mut rng, &s);
        let pos = rand_t(&mut rng, &s, 0.3, 2.0);
        let n = a.numel();
        let one = |name: &str, x: &Tensor<f64>, f: &Build| {
            check(&format!("{name}#{trial}"), vec![x.clone()], &[true], f);
        };
        one("scale", &a, &|t, v| Ok(t.scale(v[0], -1.7)));
        one("neg", &a, &|t, v| Ok(t.neg(v[0])));
        one("sigmoid", &a, &|t, v| Ok(t.sigmoid(v[0])));
        one("softplus", &a, &|t, v| Ok(t.softplus(v[0])));
        one("abs", &nz, &|t, v| Ok(t.abs(v[0])));
        one("sqrt", &pos, &|t, v| Ok(t.sqrt(v[0])));
        one("leaky_relu", &nz, &|t, v| Ok(t.leaky_relu(v[0], 0.2)));
        // interior of the clamp range only
        one("clamp", &a.map(|x| x * 0.2), &|t, v| Ok(t.clamp(v[0], -0.5, 0.5)));
        one("mean", &a, &|t, v| Ok(t.mean(v[0])));
        one("sum", &a, &|t, v| Ok(t.sum(v[0])));
        one("sum_per_sample", &a, &|t, v| Ok(t.sum_per_sample(v[0])));
        one("reshape", &a, &move |t, v| t.reshape(v[0], &[n]));
        one("global_avg_pool", &a, &|t, v| t.global_avg_pool(v[0]));
    }
}

pub fn sign_has_zero_gradient() {
    let mut rng = SeededRng::new(3);
    let x = away_from_zero(&mut rng, &[2, 3]);
    let mut tape = Tape::new();
    let v = tape.leaf(x, true);
    let s = tape.sign(v);
    let p = tape.mul(s, v).unwrap();
    let l = tape.sum(p);
    let g = tape.backward(l).unwrap();
    // d/dx sum(sign(x) * x) = sign(x) away from zero, none from the sign node
    assert_eq!(g.wrt(v), tape.value(s).clone());
}

pub fn convolution() {
    let mut rng = SeededRng::new(4);
    for &(k, stride, pad) in &[(3, 1, 1), (3, 2, 1), (1, 1, 0), (2, 2, 0), (3, 1, 0)] {
        let (n, c, o) = (1 + rng.below(2), 1 + rng.below(3), 1 + rng.below(3));
        let hw = 4 + rng.below(3);
        let x = rand_t(&mut rng, &[n, c, hw, hw], -1.0, 1.0);
        let w = rand_t(&mut rng, &[o, c, k, k], -1.0, 1.0);
        let b = rand_t(&mut rng, &[o], -1.0, 1.0);
        check(
            &format!("conv k{k} s{stride} p{pad}"),
            vec![x.clone(), w.clone(), b],
            &[true, true, true],
            &move |t, v| t.conv2d(v[0], v[1], Some(v[2]), stride, pad),
        );
        check(&format!("conv nobias k{k}"), vec![x, w], &[true, true], &move |t, v| {
            t.conv2d(v[0], v[1], None, stride, pad)
        });
    }
}

pub fn pooling_concat_dense_gather() {
    let mut rng = SeededRng::new(5);
    // distinct values keep each pooling window's maximum unique
    let perm = rng.permutation(2 * 2 * 4 * 6);
    let x = Tensor::new(vec![2, 2, 4, 6], perm.iter().map(|&p| p as f64 * 0.01).collect()).unwrap();
    check("max_pool2", vec![x], &[true], &|t, v| t.max_pool2(v[0]));

    let a = rand_t(&mut rng, &[2, 1, 3, 3], -1.0, 1.0);
    let b = rand_t(&mut rng, &[2, 3, 3, 3], -1.0, 1.0);
    check("concat", vec![a.clone(), b], &[true, true], &|t, v| {
        t.concat(&[v[0], v[1]])
    });

    let x = rand_t(&mut rng, &[3, 5], -1.0, 1.0);
    let w = rand_t(&mut rng, &[4, 5], -1.0, 1.0);
    let bias = rand_t(&mut rng, &[4], -1.0, 1.0);
    check("dense", vec![x, w, bias], &[true, true, true], &|t, v| {
        t.dense(v[0], v[1], Some(v[2]))
    });

    let index: Vec<Option<usize>> = (0..18)
        .map(|i| if i % 4 == 0 { None } else { Some((i * 7) % 18) })
        .collect();
    check("gather", vec![a], &[true], &move |t, v| {
        t.gather(v[0], index.clone(), &[2, 1, 3, 3])
    });
}

pub fn batch_norm_and_cross_entropy() {
    let mut rng = SeededRng::new(6);
    for trial in 0..3 {
        let s = vec![2 + rng.below(3), 1 + rng.below(3), 2 + rng.below(3), 2 + rng.below(3)];
        let c = s[1];
        let x = rand_t(&mut rng, &s, -1.0, 1.0);
        let g = rand_t(&mut rng, &[c], 0.5, 1.5);
        let b = rand_t(&mut rng, &[c], -0.5, 0.5);
        check(
            &format!("bn_train#{trial}"),
            vec![x.clone(), g.clone(), b.clone()],
            &[true, true, true],
            &|t, v| Ok(t.batch_norm_train(v[0], v[1], v[2], 1e-5)?.0),
        );
        let rm: Vec<f64> = (0..c).map(|i| 0.1 * i as f64).collect();
        let rv: Vec<f64> = (0..c).map(|i| 0.5 + 0.2 * i as f64).collect();
        check(
            &format!("bn_eval#{trial}"),
            vec![x, g, b],
            &[true, true, true],
            &move |t, v| t.batch_norm_eval(v[0], v[1], v[2], &rm, &rv, 1e-5),
        );
        let n = 1 + rng.below(4);
        let k = 2 + rng.below(4);
        let logits = rand_t(&mut rng, &[n, k], -2.0, 2.0);
        let labels: Vec<usize> = (0..n).map(|_| rng.below(k)).collect();
        check(
            &format!("cross_entropy#{trial}"),
            vec![logits],
            &[true],
            &move |t, v| t.cross_entropy(v[0], &labels),
        );
    }
}

pub fn distances_and_gan_losses() {
    let mut rng = SeededRng::new(7);
    let a = rand_t(&mut rng, &[3, 2, 3, 3], -1.0, 1.0);
    let b = a
        .zip_map(&away_from_zero(&mut rng, &[3, 2, 3, 3]), |x, d| x + 0.5 * d)
        .unwrap();
    for m in [DistanceMetric::Mae, DistanceMetric::L2, DistanceMetric::Cosine] {
        check(
            &format!("distance {m}"),
            vec![a.clone(), b.clone()],
            &[true, true],
            &move |t, v| distance_on_tape(t, v[0], v[1], m),
        );
    }
    check("loss_img", vec![b.clone(), a.clone()], &[true, true], &|t, v| {
        loss_img_on_tape(t, v[0], v[1])
    });
    let real = rand_t(&mut rng, &[5, 1], -2.0, 2.0);
    let fake = rand_t(&mut rng, &[5, 1], -2.0, 2.0);
    for form in [GanForm::RelativisticAverage, GanForm::Vanilla] {
        check(
            &format!("loss_adv {form:?}"),
            vec![real.clone(), fake.clone()],
            &[true, true],
            &move |t, v| loss_adv_on_tape(t, v[0], v[1], form),
        );
        check(
            &format!("critic_loss {form:?}"),
            vec![real.clone(), fake.clone()],
            &[true, true],
            &move |t, v| critic_loss_on_tape(t, v[0], v[1], form),
        );
    }
}

/// Input and parameter gradients of a full network pass.
fn check_network(name: &str, net: &NetworkDef<f64>, x: Tensor<f64>, mode: Mode, tap: Option<Tap>) {
    let mut inputs = vec![x];
    inputs.extend(net.params().iter().cloned());
    let flags = vec![true; inputs.len()];
    let net = net.clone();
    check(name, inputs, &flags, &move |t, v| {
        let bound = nrp_core::nn::Bound::from_vars(v[1..].to_vec());
        match &tap {
            Some(tap) => Ok(net
                .forward_to_taps(t, &bound, v[0], mode, std::slice::from_ref(tap))?
                .taps[0]),
            None => Ok(net.forward(t, &bound, v[0], mode)?.out()),
        }
    });
}

pub fn full_networks() {
    let mut rng = SeededRng::new(8);
    let x = rand_t(&mut rng, &[2, 3, 8, 8], 0.0, 1.0);
    let f: NetworkDef<f64> = build_feature_extractor(&FeatureExtractorConfig {
        widths: vec![3, 4, 4],
        depths: vec![1, 2, 2],
        num_classes: 3,
        ..Default::default()
    })
    .unwrap();
    check_network("extractor output", &f, x.clone(), Mode::Eval, None);
    check_network("extractor tap", &f, x.clone(), Mode::Eval, Some(Tap::from("b3c2")));
    let p: NetworkDef<f64> = build_purifier(&PurifierConfig {
        width: 3,
        growth: 2,
        basic_blocks: 1,
        ..Default::default()
    })
    .unwrap();
    check_network("purifier", &p, x.clone(), Mode::Train, None);
    let c: NetworkDef<f64> = build_critic(&CriticConfig {
        widths: vec![3, 4, 4],
        strides: vec![1, 2, 2],
        ..Default::default()
    })
    .unwrap();
    check_network("critic train", &c, x.clone(), Mode::Train, None);
    check_network("critic eval", &c, x.clone(), Mode::Eval, None);
    let t: NetworkDef<f64> = build_toy_classifier(&ClassifierConfig {
        widths: vec![3, 4],
        num_classes: 3,
        ..Default::default()
    })
    .unwrap();
    check_network("classifier", &t, x, Mode::Eval, None);
}

/// Every group of the suite, by name.
pub const GROUPS: &[(&str, fn())] = &[
    ("elementwise_binary", elementwise_binary),
    ("elementwise_unary", elementwise_unary),
    ("sign_has_zero_gradient", sign_has_zero_gradient),
    ("convolution", convolution),
    ("pooling_concat_dense_gather", pooling_concat_dense_gather),
    ("batch_norm_and_cross_entropy", batch_norm_and_cross_entropy),
    ("distances_and_gan_losses", distances_and_gan_losses),
    ("full_networks", full_networks),
];
