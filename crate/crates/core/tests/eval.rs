use nrp_core::attacks::{linf_distance, AttackSpec, Method};
use nrp_core::data::{synthetic, Dataset, SyntheticSpec};
use nrp_core::eval::{
    attack_dataset, bootstrap_monotone_fraction, defense_table, distortion_curve, dynamic_defense_purify, fooling_rate,
    layer_sweep, logits, predict, purify_all, top_k_accuracy, AttackModels, Defense,
};
use nrp_core::nn::{
    build_feature_extractor, build_purifier, build_toy_classifier, ClassifierConfig, FeatureExtractorConfig,
    GraphBuilder, LayerKind, NetRole, NetworkDef, PurifierConfig, Tap,
};
use nrp_core::tensor::Tensor;

fn data(count: usize, size: usize) -> Dataset {
    synthetic(&SyntheticSpec {
        count,
        size,
        seed: 9,
        ..Default::default()
    })
    .unwrap()
}

fn classifier() -> NetworkDef<f32> {
    build_toy_classifier(&ClassifierConfig {
        widths: vec![4, 8],
        ..Default::default()
    })
    .unwrap()
}

fn extractor() -> NetworkDef<f32> {
    build_feature_extractor(&FeatureExtractorConfig {
        widths: vec![4, 6, 8],
        depths: vec![1, 1, 3],
        ..Default::default()
    })
    .unwrap()
}

#[test]
fn top_k_matches_recount() {
    let d = data(100, 8);
    let net = classifier();
    let z = logits(&net, &d.images).unwrap();
    let classes = z.shape()[1];
    for k in [1, 2, 3, classes] {
        let mut hits = 0;
        for (i, &y) in d.labels.iter().enumerate() {
            let row = &z.data()[i * classes..(i + 1) * classes];
            // rank = number of classes that strictly beat the label, ties to lower index
            let rank = (0..classes)
                .filter(|&c| row[c] > row[y] || (row[c] == row[y] && c < y))
                .count();
            hits += (rank < k) as usize;
        }
        let got = top_k_accuracy(&net, &d.images, &d.labels, k).unwrap();
        assert_eq!(got, hits as f64 / 100.0, "k = {k}");
    }
    assert_eq!(top_k_accuracy(&net, &d.images, &d.labels, classes).unwrap(), 1.0);
    let one = d.slice(0, 1);
    let pred = predict(&net, &one.images).unwrap()[0];
    assert_eq!(top_k_accuracy(&net, &one.images, &[pred], 1).unwrap(), 1.0);
}

/// Predicts the larger of two input coordinates.
fn argmax_model() -> NetworkDef<f32> {
    let mut b = GraphBuilder::<f32>::new(NetRole::Classifier);
    let w = b.param("w", Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap());
    let out = b.layer("fc", LayerKind::Dense { weight: w, bias: None }, vec![b.input()]);
    b.finish(out)
}

#[test]
fn fooling_rate_cases_and_recount() {
    let net = argmax_model();
    let clean = Tensor::new(vec![3, 2, 1, 1], vec![0.9, 0.1, 0.2, 0.7, 0.6, 0.5]).unwrap();
    let flipped = Tensor::new(vec![3, 2, 1, 1], vec![0.1, 0.9, 0.7, 0.2, 0.4, 0.5]).unwrap();
    assert_eq!(fooling_rate(&net, &clean, &clean).unwrap(), 0.0);
    assert_eq!(fooling_rate(&net, &clean, &flipped).unwrap(), 1.0);

    let d = data(100, 8);
    let net = classifier();
    let adv: Tensor<f32> = d.images.map(|v| (v * 0.7 + 0.1).min(1.0));
    let (a, b) = (predict(&net, &d.images).unwrap(), predict(&net, &adv).unwrap());
    let changed = a.iter().zip(&b).filter(|(p, q)| p != q).count();
    assert_eq!(fooling_rate(&net, &d.images, &adv).unwrap(), changed as f64 / 100.0);
}

#[test]
fn distortion_curve_rows_and_bootstrap() {
    let d = data(40, 12);
    let (f, t) = (extractor(), classifier());
    let spec = AttackSpec::new(Method::Ssp, 16.0 / 255.0).with_seed(3);
    let single = distortion_curve(&f, &t, &spec, &d, &spec.tap, &[1]).unwrap();
    assert_eq!(single.len(), 1);
    assert_eq!(single[0].per_sample.len(), 40);

    let grid = [1, 2, 5, 10, 20];
    let ssp = distortion_curve(&f, &t, &spec, &d, &spec.tap, &grid).unwrap();
    let frac = bootstrap_monotone_fraction(&ssp, 200, 1);
    assert!(frac >= 0.9, "monotone on {frac} of resamples");

    let ifgsm = AttackSpec::new(Method::Ifgsm, 16.0 / 255.0).with_seed(3);
    let reference = distortion_curve(&f, &t, &ifgsm, &d, &spec.tap, &grid).unwrap();
    for (s, i) in ssp.iter().zip(&reference) {
        println!(
            "T={:>3} ssp distortion {:.4} fooling {:.3} | ifgsm distortion {:.4} fooling {:.3}",
            s.iterations, s.mean_distortion, s.fooling_rate, i.mean_distortion, i.fooling_rate
        );
    }
}

#[test]
fn layer_sweep_composition() {
    let d = data(24, 12);
    let (f, t) = (extractor(), classifier());
    let spec = AttackSpec::new(Method::Ssp, 16.0 / 255.0)
        .with_iterations(4)
        .with_seed(8);
    let tap = Tap::new("b2c1");
    let swept = layer_sweep(&f, &t, &d, std::slice::from_ref(&tap), &spec).unwrap();
    let models = AttackModels {
        classifier: None,
        extractor: Some(&f),
        purifier: None,
    };
    let adv = attack_dataset(&spec.clone().with_tap(tap.clone()), &d.images, &d.labels, models).unwrap();
    assert!(linf_distance(&adv, &d.images) <= 16.0 / 255.0 + 2f64.powi(-20));
    assert_eq!(swept, vec![(tap, fooling_rate(&t, &d.images, &adv).unwrap())]);

    let taps: Vec<Tap> = f.tap_names().into_iter().map(Tap::new).collect();
    let a = layer_sweep(&f, &t, &d, &taps, &spec).unwrap();
    let b = layer_sweep(&f, &t, &d, &taps, &spec).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.len(), taps.len());
}

#[test]
fn defense_table_layout() {
    let d = data(20, 8);
    let (f, t) = (extractor(), classifier());
    let p = build_purifier(&PurifierConfig {
        width: 4,
        growth: 2,
        basic_blocks: 1,
        ..Default::default()
    })
    .unwrap();
    let defenses = [
        Defense {
            name: "none".into(),
            purifier: None,
        },
        Defense {
            name: "p".into(),
            purifier: Some(&p),
        },
    ];
    let attacks = [
        AttackSpec::new(Method::Fgsm, 8.0 / 255.0),
        AttackSpec::new(Method::Ssp, 8.0 / 255.0).with_iterations(2),
        AttackSpec::new(Method::Bpda, 8.0 / 255.0).with_iterations(2),
    ];
    let models = AttackModels {
        classifier: Some(&f),
        extractor: Some(&f),
        purifier: None,
    };
    let report = defense_table("t", &t, &defenses, &attacks, &d, models).unwrap();
    assert_eq!(report.rows().len(), (attacks.len() + 1) * defenses.len());
    assert_eq!(
        report.value("none", "none", "top1"),
        Some(top_k_accuracy(&t, &d.images, &d.labels, 1).unwrap())
    );
    let purified = purify_all(&p, &d.images).unwrap();
    assert_eq!(
        report.value("none", "p", "top1"),
        Some(top_k_accuracy(&t, &purified, &d.labels, 1).unwrap())
    );
    let csv = report.to_csv();
    assert_eq!(csv.lines().count(), 1 + report.rows().len());
}

#[test]
fn dynamic_defense() {
    let d = data(6, 8);
    let p = build_purifier(&PurifierConfig {
        width: 4,
        growth: 2,
        basic_blocks: 1,
        ..Default::default()
    })
    .unwrap();
    let plain = purify_all(&p, &d.images).unwrap();
    assert_eq!(dynamic_defense_purify(&p, &d.images, 0.0, 5).unwrap(), plain);
    let a = dynamic_defense_purify(&p, &d.images, 8.0 / 255.0, 5).unwrap();
    assert_eq!(a, dynamic_defense_purify(&p, &d.images, 8.0 / 255.0, 5).unwrap());
    assert_ne!(a, dynamic_defense_purify(&p, &d.images, 8.0 / 255.0, 6).unwrap());
    assert_ne!(a, plain);
    assert!(dynamic_defense_purify(&p, &d.images, -1.0, 5).is_err());
}
