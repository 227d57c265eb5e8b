//! Declarative network graphs and the builders for the feature extractor,
//! purifier, critic and toy classifier.

mod builders;
mod graph;

pub use builders::{
    build_critic, build_feature_extractor, build_purifier, build_toy_classifier, ClassifierConfig, CriticConfig,
    FeatureExtractorConfig, PurifierConfig, CONVS_PER_DENSE_BLOCK, DEFAULT_TAP, DENSE_BLOCKS_PER_BASIC, LEAKY_SLOPE,
};
pub use graph::{
    leaky_relu_gain, Bound, ForwardOutput, GraphBuilder, Layer, LayerKind, Mode, NetRole, NetworkDef, Tap, BN_EPS,
    BN_MOMENTUM,
};

use crate::error::Result;
use crate::tensor::{Scalar, Tensor};

/// Runs `purifier` in eval mode and clamps the result to `[0, 1]`.
pub fn purify<T: Scalar>(purifier: &NetworkDef<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
    Ok(purifier.infer(x)?.map(|v| v.max(T::zero()).min(T::one())))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{SeededRng, Tape, Tensor};

    fn batch(n: usize, hw: usize, seed: u64) -> Tensor<f32> {
        SeededRng::new(seed).uniform_tensor(vec![n, 3, hw, hw], 0.0, 1.0)
    }

    #[test]
    fn extractor_tap_shapes_and_order() {
        let f = build_feature_extractor::<f32>(&FeatureExtractorConfig::default()).unwrap();
        assert_eq!(f.tap_names(), ["b1c1", "b1c2", "b2c1", "b2c2", "b3c1", "b3c2", "b3c3"]);
        let taps = f.infer_taps(&batch(4, 32, 0), &[Tap::from(DEFAULT_TAP)]).unwrap();
        // widths[2] channels, two 2x poolings before block 3
        assert_eq!(taps[0].shape(), &[4, 32, 8, 8]);
        let zeros = f.infer(&Tensor::zeros(vec![2, 3, 32, 32])).unwrap();
        assert!(zeros.is_finite());
        assert_eq!(zeros.shape(), &[2, 10]);
    }

    #[test]
    fn unknown_tap_rejected() {
        let f = build_feature_extractor::<f32>(&FeatureExtractorConfig::default()).unwrap();
        let err = f.infer_taps(&batch(1, 32, 0), &[Tap::from("b9c9")]).unwrap_err();
        assert!(matches!(err, crate::Error::UnknownTap(ref t) if t == "b9c9"));
    }

    #[test]
    fn purifier_shape_and_structure() {
        let cfg = PurifierConfig {
            width: 8,
            growth: 4,
            basic_blocks: 1,
            ..Default::default()
        };
        let p = build_purifier::<f32>(&cfg).unwrap();
        for hw in [5, 8, 13] {
            let x = batch(2, hw, 1);
            assert_eq!(p.infer(&x).unwrap().shape(), x.shape());
        }
        assert!(!p.has_conv_free_path());
        let default = build_purifier::<f32>(&PurifierConfig::default()).unwrap();
        assert_eq!(default.param_count(), PurifierConfig::default().expected_param_count());
        assert_eq!(
            default.params().len(),
            PurifierConfig::default().expected_tensor_count()
        );
    }

    #[test]
    fn global_skip_is_detected() {
        let mut b = GraphBuilder::<f32>::new(NetRole::Purifier);
        let mut rng = SeededRng::new(0);
        let c = b.conv("c", 0, 3, 3, 3, 1, true, 1.0, &mut rng);
        let cat = b.layer("skip", LayerKind::Concat, vec![0, c]);
        let net = b.finish(cat);
        assert!(net.has_conv_free_path());
        assert!(matches!(net.validate(), Err(crate::Error::Graph(_))));
    }

    #[test]
    fn critic_scores_and_determinism() {
        let c = build_critic::<f32>(&CriticConfig::default()).unwrap();
        let x = batch(8, 32, 2);
        let a = c.infer(&x).unwrap();
        assert_eq!(a.shape(), &[8, 1]);
        assert_eq!(a, c.infer(&x).unwrap());
    }

    #[test]
    fn classifier_logits_softmax() {
        let cfg = ClassifierConfig::default();
        let t = build_toy_classifier::<f64>(&cfg).unwrap();
        let x: Tensor<f64> = SeededRng::new(3).uniform_tensor(vec![5, 3, 32, 32], 0.0, 1.0);
        let logits = t.infer(&x).unwrap();
        assert_eq!(logits.shape(), &[5, cfg.num_classes]);
        for row in logits.data().chunks(cfg.num_classes) {
            let mx = row.iter().cloned().fold(f64::MIN, f64::max);
            let z: f64 = row.iter().map(|v| (v - mx).exp()).sum();
            let total: f64 = row.iter().map(|v| (v - mx).exp() / z).sum();
            assert!((total - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn zero_taps_returns_only_output() {
        let f = build_feature_extractor::<f32>(&FeatureExtractorConfig::default()).unwrap();
        let mut tape = Tape::new();
        let bound = f.bind(&mut tape, false);
        let x = tape.constant(batch(1, 32, 4));
        let out = f.forward_with_taps(&mut tape, &bound, x, Mode::Eval, &[]).unwrap();
        assert!(out.taps.is_empty());
        assert!(out.output.is_some());
    }

    #[test]
    fn tap_equals_truncated_network() {
        let f = build_feature_extractor::<f32>(&FeatureExtractorConfig::default()).unwrap();
        let x = batch(3, 32, 5);
        let tap = Tap::from(DEFAULT_TAP);
        let mut tape = Tape::new();
        let bound = f.bind(&mut tape, false);
        let xv = tape.constant(x.clone());
        let full = f
            .forward_with_taps(&mut tape, &bound, xv, Mode::Eval, &[tap.clone()])
            .unwrap();
        let from_full = tape.value(full.taps[0]).clone();
        let truncated = f.truncated(&tap).unwrap();
        assert!(truncated.layers().len() < f.layers().len());
        assert_eq!(truncated.infer(&x).unwrap(), from_full);
    }

    #[test]
    fn identity_network_is_exact() {
        let id = NetworkDef::<f32>::identity(3);
        let x = batch(2, 7, 6);
        assert_eq!(id.infer(&x).unwrap(), x);
        id.validate().unwrap();
    }

    #[test]
    fn running_stats_update() {
        let mut c = build_critic::<f64>(&CriticConfig::default()).unwrap();
        let x: Tensor<f64> = SeededRng::new(9).uniform_tensor(vec![4, 3, 16, 16], 0.0, 1.0);
        let before = c.buffers().to_vec();
        let mut tape = Tape::new();
        let bound = c.bind(&mut tape, false);
        let xv = tape.constant(x);
        let out = c.forward(&mut tape, &bound, xv, Mode::Train).unwrap();
        assert_eq!(out.batch_stats.len(), 5);
        c.update_running_stats(&out.batch_stats);
        assert_ne!(before, c.buffers());
    }
}
