use nrp_core::attacks::{AttackSpec, CrossEntropyLoss, LossModel};
use nrp_core::nn::{GraphBuilder, LayerKind, NetRole, NetworkDef};
use nrp_core::tensor::{Tape, Tensor};

/// Logits `W x` for a two-coordinate input `[N, 2, 1, 1]`.
pub fn linear_model(w: [f64; 4]) -> NetworkDef<f64> {
    let mut b = GraphBuilder::<f64>::new(NetRole::Classifier);
    let wi = b.param("w", Tensor::new(vec![2, 2], w.to_vec()).unwrap());
    let out = b.layer("fc", LayerKind::Dense { weight: wi, bias: None }, vec![b.input()]);
    b.finish(out)
}

pub fn softmax_grad(w: &[f64; 4], x: [f64; 2], y: usize, n: usize) -> [f64; 2] {
    let z = [w[0] * x[0] + w[1] * x[1], w[2] * x[0] + w[3] * x[1]];
    let m = z[0].max(z[1]);
    let e = [(z[0] - m).exp(), (z[1] - m).exp()];
    let s = e[0] + e[1];
    let d = [e[0] / s - (y == 0) as u8 as f64, e[1] / s - (y == 1) as u8 as f64];
    // cross-entropy is averaged over the batch
    [
        (w[0] * d[0] + w[2] * d[1]) / n as f64,
        (w[1] * d[0] + w[3] * d[1]) / n as f64,
    ]
}

pub fn engine_grad(net: &NetworkDef<f64>, x: &Tensor<f64>, labels: &[usize]) -> Tensor<f64> {
    let mut tape = Tape::new();
    let v = tape.leaf(x.clone(), true);
    let l = CrossEntropyLoss { net, labels }.loss(&mut tape, v).unwrap();
    tape.backward(l).unwrap().wrt(v)
}

/// Running sum of per-sample l1-normalized gradients along the attack
/// trajectory, recomputed step by step.
pub fn brute_force_momentum(
    net: &NetworkDef<f64>,
    x: &Tensor<f64>,
    labels: &[usize],
    spec: &AttackSpec,
) -> (Tensor<f64>, Tensor<f64>) {
    let n = x.batch();
    let mut adv = x.data().to_vec();
    let mut acc = vec![0.0f64; adv.len()];
    for _ in 0..spec.iterations {
        let g = engine_grad(net, &Tensor::new(x.shape().to_vec(), adv.clone()).unwrap(), labels);
        for i in 0..n {
            let norm: f64 = g.sample(i).iter().map(|v| v.abs()).sum();
            for j in 0..2 {
                let k = 2 * i + j;
                let normalized = if norm > 0.0 { g.data()[k] / norm } else { 0.0 };
                acc[k] = spec.momentum * acc[k] + normalized;
                let s = if acc[k] > 0.0 {
                    1.0
                } else if acc[k] < 0.0 {
                    -1.0
                } else {
                    0.0
                };
                let xk = x.data()[k];
                adv[k] = (adv[k] + spec.step * s)
                    .max(xk - spec.epsilon)
                    .min(xk + spec.epsilon)
                    .max(0.0)
                    .min(1.0);
            }
        }
    }
    (
        Tensor::new(x.shape().to_vec(), acc).unwrap(),
        Tensor::new(x.shape().to_vec(), adv).unwrap(),
    )
}
