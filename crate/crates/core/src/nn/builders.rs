//! Constructors for the four networks used by the toolkit.

use super::graph::{leaky_relu_gain, GraphBuilder, LayerKind, NetRole, NetworkDef};
use crate::error::{Error, Result};
use crate::tensor::{Scalar, SeededRng};

/// Tap used by the attack and feature loss unless configured otherwise:
/// the last convolution of the third block.
pub const DEFAULT_TAP: &str = "b3c3";

pub const LEAKY_SLOPE: f64 = 0.2;

/// VGG-style plain convolution stack sized for 32x32 inputs.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureExtractorConfig {
    pub in_channels: usize,
    /// Channel width of each block.
    pub widths: Vec<usize>,
    /// Number of 3x3 convolutions per block.
    pub depths: Vec<usize>,
    /// Width of the classification head used to train the extractor.
    pub num_classes: usize,
    pub slope: f64,
    pub seed: u64,
}

impl Default for FeatureExtractorConfig {
    fn default() -> Self {
        Self {
            in_channels: 3,
            widths: vec![8, 16, 32],
            depths: vec![2, 2, 3],
            num_classes: 10,
            slope: LEAKY_SLOPE,
            seed: 1,
        }
    }
}

/// Builds the feature extractor. Taps `b{block}c{conv}` follow the
/// activation of every convolution; blocks are separated by 2x2 max pooling.
pub fn build_feature_extractor<T: Scalar>(cfg: &FeatureExtractorConfig) -> Result<NetworkDef<T>> {
    if cfg.widths.is_empty()
        || cfg.widths.len() != cfg.depths.len()
        || cfg.depths.contains(&0)
        || cfg.widths.contains(&0)
        || cfg.num_classes < 2
    {
        return Err(Error::invalid(format!("bad feature extractor config {cfg:?}")));
    }
    let mut rng = SeededRng::new(cfg.seed);
    let gain = leaky_relu_gain(cfg.slope);
    let mut b = GraphBuilder::<T>::new(NetRole::FeatureExtractor);
    let mut h = b.input();
    let mut cin = cfg.in_channels;
    for (bi, (&w, &d)) in cfg.widths.iter().zip(&cfg.depths).enumerate() {
        if bi > 0 {
            h = b.layer(format!("pool{bi}"), LayerKind::MaxPool2, vec![h]);
        }
        for ci in 0..d {
            let name = format!("b{}c{}", bi + 1, ci + 1);
            h = b.conv(&format!("{name}.conv"), h, cin, w, 3, 1, true, gain, &mut rng);
            h = b.leaky_relu(&name, h, cfg.slope);
            b.tap(name, h);
            cin = w;
        }
    }
    h = b.layer("gap", LayerKind::GlobalAvgPool, vec![h]);
    let out = b.dense("head", h, cin, cfg.num_classes, 1.0, &mut rng);
    let net = b.finish(out);
    net.validate()?;
    Ok(net)
}

/// Dense-block restoration network without a global input skip.
#[derive(Debug, Clone, PartialEq)]
pub struct PurifierConfig {
    pub channels: usize,
    /// Feature width carried between dense blocks.
    pub width: usize,
    /// Channels added by each inner convolution of a dense block.
    pub growth: usize,
    pub basic_blocks: usize,
    pub slope: f64,
    pub seed: u64,
}

impl Default for PurifierConfig {
    fn default() -> Self {
        Self {
            channels: 3,
            width: 32,
            growth: 16,
            basic_blocks: 2,
            slope: LEAKY_SLOPE,
            seed: 2,
        }
    }
}

pub const DENSE_BLOCKS_PER_BASIC: usize = 3;
pub const CONVS_PER_DENSE_BLOCK: usize = 5;

impl PurifierConfig {
    /// Parameter count from the layer dimensions.
    pub fn expected_param_count(&self) -> usize {
        let conv = |cin: usize, cout: usize| cin * cout * 9 + cout;
        let mut dense = 0;
        for i in 0..CONVS_PER_DENSE_BLOCK {
            let cin = self.width + i * self.growth;
            let cout = if i + 1 == CONVS_PER_DENSE_BLOCK {
                self.width
            } else {
                self.growth
            };
            dense += conv(cin, cout);
        }
        conv(self.channels, self.width)
            + self.basic_blocks * DENSE_BLOCKS_PER_BASIC * dense
            + conv(self.width, self.channels)
    }

    /// Number of parameter tensors (weight and bias per convolution).
    pub fn expected_tensor_count(&self) -> usize {
        2 * (2 + self.basic_blocks * DENSE_BLOCKS_PER_BASIC * CONVS_PER_DENSE_BLOCK)
    }
}

/// Head convolution, `basic_blocks` x 3 dense blocks of five convolutions
/// each (every convolution sees the concatenation of the block input and all
/// earlier outputs in the block), then a tail convolution back to image
/// channels.
pub fn build_purifier<T: Scalar>(cfg: &PurifierConfig) -> Result<NetworkDef<T>> {
    if cfg.basic_blocks == 0 || cfg.width == 0 || cfg.growth == 0 || cfg.channels == 0 {
        return Err(Error::invalid(format!("bad purifier config {cfg:?}")));
    }
    let mut rng = SeededRng::new(cfg.seed);
    let gain = leaky_relu_gain(cfg.slope);
    let mut b = GraphBuilder::<T>::new(NetRole::Purifier);
    let mut h = b.conv("head", b.input(), cfg.channels, cfg.width, 3, 1, true, gain, &mut rng);
    for bb in 0..cfg.basic_blocks {
        for db in 0..DENSE_BLOCKS_PER_BASIC {
            let block_in = h;
            let mut feats = vec![block_in];
            for ci in 0..CONVS_PER_DENSE_BLOCK {
                let name = format!("rb{}.db{}.conv{}", bb + 1, db + 1, ci + 1);
                let src = if feats.len() == 1 {
                    block_in
                } else {
                    b.layer(format!("{name}.cat"), LayerKind::Concat, feats.clone())
                };
                let cin = cfg.width + ci * cfg.growth;
                let last = ci + 1 == CONVS_PER_DENSE_BLOCK;
                let cout = if last { cfg.width } else { cfg.growth };
                let c = b.conv(&name, src, cin, cout, 3, 1, true, gain, &mut rng);
                let a = b.leaky_relu(&format!("{name}.act"), c, cfg.slope);
                if last {
                    h = a;
                } else {
                    feats.push(a);
                }
            }
        }
    }
    let out = b.conv("tail", h, cfg.width, cfg.channels, 3, 1, true, 1.0, &mut rng);
    let net = b.finish(out);
    net.validate()?;
    Ok(net)
}

/// Conv/batch-norm/leaky-relu blocks, global pooling and a linear score.
#[derive(Debug, Clone, PartialEq)]
pub struct CriticConfig {
    pub channels: usize,
    pub widths: Vec<usize>,
    pub strides: Vec<usize>,
    pub slope: f64,
    pub seed: u64,
}

impl Default for CriticConfig {
    fn default() -> Self {
        Self {
            channels: 3,
            widths: vec![8, 16, 16, 32, 32],
            strides: vec![1, 2, 2, 2, 2],
            slope: LEAKY_SLOPE,
            seed: 3,
        }
    }
}

/// Emits one unnormalized score per image, shape `[N, 1]`.
pub fn build_critic<T: Scalar>(cfg: &CriticConfig) -> Result<NetworkDef<T>> {
    if cfg.widths.is_empty() || cfg.widths.len() != cfg.strides.len() || cfg.strides.contains(&0) {
        return Err(Error::invalid(format!("bad critic config {cfg:?}")));
    }
    let mut rng = SeededRng::new(cfg.seed);
    let gain = leaky_relu_gain(cfg.slope);
    let mut b = GraphBuilder::<T>::new(NetRole::Critic);
    let mut h = b.input();
    let mut cin = cfg.channels;
    for (i, (&w, &s)) in cfg.widths.iter().zip(&cfg.strides).enumerate() {
        let name = format!("block{}", i + 1);
        h = b.conv(&format!("{name}.conv"), h, cin, w, 3, s, false, gain, &mut rng);
        h = b.batch_norm(&format!("{name}.bn"), h, w);
        h = b.leaky_relu(&format!("{name}.act"), h, cfg.slope);
        b.tap(name, h);
        cin = w;
    }
    h = b.layer("gap", LayerKind::GlobalAvgPool, vec![h]);
    let out = b.dense("score", h, cin, 1, 1.0, &mut rng);
    let net = b.finish(out);
    net.validate()?;
    Ok(net)
}

/// Small convolutional classifier standing in for the attacked model.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassifierConfig {
    pub channels: usize,
    pub widths: Vec<usize>,
    pub num_classes: usize,
    pub slope: f64,
    pub seed: u64,
}

impl Default for ClassifierConfig {
    fn default() -> Self {
        Self {
            channels: 3,
            widths: vec![16, 32, 32],
            num_classes: 10,
            slope: LEAKY_SLOPE,
            seed: 4,
        }
    }
}

/// Emits logits of shape `[N, num_classes]`.
pub fn build_toy_classifier<T: Scalar>(cfg: &ClassifierConfig) -> Result<NetworkDef<T>> {
    if cfg.widths.is_empty() || cfg.num_classes < 2 {
        return Err(Error::invalid(format!("bad classifier config {cfg:?}")));
    }
    let mut rng = SeededRng::new(cfg.seed);
    let gain = leaky_relu_gain(cfg.slope);
    let mut b = GraphBuilder::<T>::new(NetRole::Classifier);
    let mut h = b.input();
    let mut cin = cfg.channels;
    for (i, &w) in cfg.widths.iter().enumerate() {
        let name = format!("conv{}", i + 1);
        h = b.conv(&name, h, cin, w, 3, 1, true, gain, &mut rng);
        h = b.leaky_relu(&format!("{name}.act"), h, cfg.slope);
        b.tap(name, h);
        if i + 1 < cfg.widths.len() {
            h = b.layer(format!("pool{}", i + 1), LayerKind::MaxPool2, vec![h]);
        }
        cin = w;
    }
    h = b.layer("gap", LayerKind::GlobalAvgPool, vec![h]);
    let out = b.dense("logits", h, cin, cfg.num_classes, 1.0, &mut rng);
    let net = b.finish(out);
    net.validate()?;
    Ok(net)
}
