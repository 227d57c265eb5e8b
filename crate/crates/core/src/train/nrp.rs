use std::fmt;
use std::str::FromStr;

use super::losses::{
    critic_loss_on_tape, critic_scores, loss_adv_on_tape, loss_feat_on_tape, loss_img_on_tape, GanForm, LossWeights,
};
use crate::attacks::{fgsm, linf_project, ssp_attack, AttackSpec, DistanceMetric, Method};
use crate::data::{random_crop, Dataset};
use crate::error::{Error, Result};
use crate::nn::{Mode, NetRole, NetworkDef, Tap, DEFAULT_TAP};
use crate::tensor::{Adam, AdamConfig, Optimizer, SeededRng, Tape, Tensor};

/// Training variant.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub enum Ablation {
    #[default]
    Full,
    /// Feature loss weight forced to zero.
    NoFeat,
    /// Pixel loss weight forced to zero.
    NoPixel,
    /// Non-relativistic GAN objective.
    VanillaGan,
    /// Trained on Gaussian noise instead of self-supervised perturbations.
    Gaussian,
    /// Trained on FGSM adversaries of a labelled classifier.
    Fgsm,
}

impl Ablation {
    pub const ALL: [Ablation; 6] = [
        Ablation::Full,
        Ablation::NoFeat,
        Ablation::NoPixel,
        Ablation::VanillaGan,
        Ablation::Gaussian,
        Ablation::Fgsm,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Ablation::Full => "full",
            Ablation::NoFeat => "no-feat",
            Ablation::NoPixel => "no-pixel",
            Ablation::VanillaGan => "vanilla-gan",
            Ablation::Gaussian => "gaussian",
            Ablation::Fgsm => "fgsm",
        }
    }

    pub fn weights(self, base: LossWeights) -> LossWeights {
        match self {
            Ablation::NoFeat => LossWeights { lambda: 0.0, ..base },
            Ablation::NoPixel => LossWeights { gamma: 0.0, ..base },
            _ => base,
        }
    }

    pub fn gan_form(self) -> GanForm {
        match self {
            Ablation::VanillaGan => GanForm::Vanilla,
            _ => GanForm::RelativisticAverage,
        }
    }

    pub fn adversary(self) -> AdversaryMode {
        match self {
            Ablation::Gaussian => AdversaryMode::Gaussian,
            Ablation::Fgsm => AdversaryMode::Fgsm,
            _ => AdversaryMode::Ssp,
        }
    }
}

impl fmt::Display for Ablation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Ablation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.to_ascii_lowercase();
        let s = match s.as_str() {
            "gaussian-purifier" => "gaussian",
            "fgsm-purifier" => "fgsm",
            other => other,
        };
        Ablation::ALL
            .into_iter()
            .find(|a| a.name() == s)
            .ok_or_else(|| Error::invalid(format!("unknown ablation `{s}`")))
    }
}

/// How training inputs are corrupted.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AdversaryMode {
    Ssp,
    Gaussian,
    Fgsm,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub batch: usize,
    /// Square training crop; `None` trains on full images.
    pub crop: Option<usize>,
    pub generator_lr: f64,
    pub critic_lr: f64,
    pub steps: usize,
    pub ablation: Ablation,
    /// Weights before the ablation override.
    pub weights: LossWeights,
    /// Budgets drawn uniformly per batch.
    pub epsilons: Vec<f64>,
    /// Iterations of the training-time self-supervised attack.
    pub attack_iterations: usize,
    pub tap: Tap,
    pub metric: DistanceMetric,
    /// Checkpoint hook interval in steps; 0 calls it only at the end.
    pub checkpoint_every: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch: 16,
            crop: None,
            generator_lr: 1e-4,
            critic_lr: 1e-4,
            steps: 1000,
            ablation: Ablation::Full,
            weights: LossWeights::default(),
            epsilons: [4.0, 8.0, 12.0, 16.0].iter().map(|e| e / 255.0).collect(),
            attack_iterations: 5,
            tap: Tap::from(DEFAULT_TAP),
            metric: DistanceMetric::Mae,
            checkpoint_every: 0,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn effective_weights(&self) -> LossWeights {
        self.ablation.weights(self.weights)
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch < 2 {
            return Err(Error::invalid("batch must be >= 2 for critic batch norm"));
        }
        if self.epsilons.is_empty() || self.epsilons.iter().any(|&e| !(e > 0.0 && e <= 1.0)) {
            return Err(Error::invalid("training budgets must lie in (0, 1]"));
        }
        if self.attack_iterations == 0 {
            return Err(Error::invalid("training attack needs at least one iteration"));
        }
        for lr in [self.generator_lr, self.critic_lr] {
            if !(lr > 0.0 && lr.is_finite()) {
                return Err(Error::invalid(format!("learning rate must be > 0, got {lr}")));
            }
        }
        self.weights.validate()
    }

    /// Per-iteration step of the training-time attack: 2.5 budgets spread
    /// over the iterations, capped at the budget.
    pub fn attack_step(&self, epsilon: f64) -> f64 {
        (2.5 * epsilon / self.attack_iterations as f64).min(epsilon)
    }

    /// Attack spec used for a batch at budget `epsilon`.
    pub fn attack_spec(&self, epsilon: f64, seed: u64) -> AttackSpec {
        AttackSpec::new(Method::Ssp, epsilon)
            .with_iterations(self.attack_iterations)
            .with_step(self.attack_step(epsilon))
            .with_tap(self.tap.clone())
            .with_metric(self.metric)
            .with_seed(seed)
    }
}

/// Corrupts a clean batch for training. `spec` supplies budget, seed and
/// the self-supervised attack settings. Only [`AdversaryMode::Fgsm`] reads
/// `labels` and `classifier`.
pub fn make_training_adversary(
    mode: AdversaryMode,
    x: &Tensor<f32>,
    labels: &[usize],
    spec: &AttackSpec,
    extractor: &NetworkDef<f32>,
    classifier: Option<&NetworkDef<f32>>,
) -> Result<Tensor<f32>> {
    let eps = spec.epsilon;
    match mode {
        AdversaryMode::Ssp => {
            let mut s = spec.clone();
            s.method = Method::Ssp;
            ssp_attack(extractor, x, &s)
        }
        AdversaryMode::Gaussian => {
            let mut rng = SeededRng::new(spec.seed);
            let noise: Tensor<f32> = rng.normal_tensor(x.shape().to_vec(), 0.0, eps);
            let noisy = x.zip_map(&noise, |a, n| a + n)?;
            linf_project(&noisy, x, eps)
        }
        AdversaryMode::Fgsm => {
            let net = classifier.ok_or_else(|| Error::invalid("fgsm adversary needs a classifier"))?;
            let s = AttackSpec::new(Method::Fgsm, eps).with_seed(spec.seed);
            fgsm(net, x, labels, &s)
        }
    }
}

/// One logged training step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainRecord {
    pub step: usize,
    pub epsilon: f64,
    pub l_adv: f64,
    pub l_img: f64,
    pub l_feat: f64,
    pub total: f64,
    pub critic_loss: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainLog {
    /// Weights actually used, after the ablation override.
    pub weights: LossWeights,
    pub records: Vec<TrainRecord>,
}

impl TrainLog {
    pub const CSV_HEADER: &'static str = "step,l_adv,l_img,l_feat,total,critic_loss";

    pub fn to_csv(&self) -> String {
        let mut s = format!("{}\n", Self::CSV_HEADER);
        for r in &self.records {
            s.push_str(&format!(
                "{},{},{},{},{},{}\n",
                r.step, r.l_adv, r.l_img, r.l_feat, r.total, r.critic_loss
            ));
        }
        s
    }
}

/// Frozen models the training loop reads.
pub struct TrainModels<'a> {
    pub extractor: &'a NetworkDef<f32>,
    /// Needed only by the FGSM ablation.
    pub classifier: Option<&'a NetworkDef<f32>>,
}

struct Sampler {
    order: Vec<usize>,
    cursor: usize,
    epoch: u64,
    seed: u64,
}

impl Sampler {
    fn next(&mut self, n: usize, batch: usize) -> Vec<usize> {
        if self.cursor + batch > self.order.len() {
            self.order = SeededRng::derive(self.seed, 100 + self.epoch).permutation(n);
            self.epoch += 1;
            self.cursor = 0;
        }
        let b = self.order[self.cursor..self.cursor + batch].to_vec();
        self.cursor += batch;
        b
    }
}

/// Purifier training: per step, draw a batch, corrupt it, update the
/// purifier on the weighted loss and then the critic on the purified batch.
/// The feature extractor is never modified.
pub fn train_nrp(
    models: &TrainModels<'_>,
    purifier: &mut NetworkDef<f32>,
    critic: &mut NetworkDef<f32>,
    data: &Dataset,
    cfg: &TrainConfig,
) -> Result<TrainLog> {
    train_nrp_with_hook(models, purifier, critic, data, cfg, &mut |_, _, _| Ok(()))
}

/// [`train_nrp`] calling `hook(step, purifier, critic)` every
/// `cfg.checkpoint_every` steps and after the last one. On a non-finite
/// loss both networks are restored to their state before the failing
/// step and an error is returned.
pub fn train_nrp_with_hook(
    models: &TrainModels<'_>,
    purifier: &mut NetworkDef<f32>,
    critic: &mut NetworkDef<f32>,
    data: &Dataset,
    cfg: &TrainConfig,
    hook: &mut dyn FnMut(usize, &NetworkDef<f32>, &NetworkDef<f32>) -> Result<()>,
) -> Result<TrainLog> {
    cfg.validate()?;
    if data.len() < cfg.batch {
        return Err(Error::invalid(format!(
            "dataset of {} samples is smaller than batch {}",
            data.len(),
            cfg.batch
        )));
    }
    if purifier.role != NetRole::Purifier || critic.role != NetRole::Critic {
        return Err(Error::invalid("train_nrp expects a purifier and a critic"));
    }
    let weights = cfg.effective_weights();
    let form = cfg.ablation.gan_form();
    let mode = cfg.ablation.adversary();
    if mode == AdversaryMode::Fgsm && models.classifier.is_none() {
        return Err(Error::invalid("fgsm ablation needs a classifier"));
    }
    let mut gen_opt = Adam::new(AdamConfig::with_lr(cfg.generator_lr));
    let mut critic_opt = Adam::new(AdamConfig::with_lr(cfg.critic_lr));
    let mut sampler = Sampler {
        order: Vec::new(),
        cursor: 0,
        epoch: 0,
        seed: cfg.seed,
    };
    let mut crop_rng = SeededRng::derive(cfg.seed, 1);
    let mut eps_rng = SeededRng::derive(cfg.seed, 2);
    let mut attack_rng = SeededRng::derive(cfg.seed, 3);
    let mut log = TrainLog {
        weights,
        records: Vec::with_capacity(cfg.steps),
    };

    for step in 1..=cfg.steps {
        let idx = sampler.next(data.len(), cfg.batch);
        let (x, labels) = data.batch(&idx);
        let x = match cfg.crop {
            Some(c) => random_crop(&x, c, &mut crop_rng)?,
            None => x,
        };
        let eps = cfg.epsilons[eps_rng.below(cfg.epsilons.len())];
        let spec = cfg.attack_spec(eps, attack_rng.next_u64());
        let x_adv = make_training_adversary(mode, &x, &labels, &spec, models.extractor, models.classifier)?;

        let snapshot = (purifier.clone(), critic.clone());
        let result = train_step(
            models.extractor,
            purifier,
            critic,
            &x,
            &x_adv,
            cfg,
            weights,
            form,
            &mut gen_opt,
            &mut critic_opt,
        );
        let (l_adv, l_img, l_feat, total, critic_loss) = match result {
            Ok(v) => v,
            Err(e) => {
                (*purifier, *critic) = snapshot;
                return Err(match e {
                    Error::NonFinite(what) => Error::NonFinite(format!("{what} at step {step}")),
                    other => other,
                });
            }
        };
        log.records.push(TrainRecord {
            step,
            epsilon: eps,
            l_adv,
            l_img,
            l_feat,
            total,
            critic_loss,
        });
        if (cfg.checkpoint_every > 0 && step % cfg.checkpoint_every == 0) || step == cfg.steps {
            hook(step, purifier, critic)?;
        }
    }
    Ok(log)
}

#[allow(clippy::too_many_arguments)]
fn train_step(
    extractor: &NetworkDef<f32>,
    purifier: &mut NetworkDef<f32>,
    critic: &mut NetworkDef<f32>,
    x: &Tensor<f32>,
    x_adv: &Tensor<f32>,
    cfg: &TrainConfig,
    weights: LossWeights,
    form: GanForm,
    gen_opt: &mut Adam<f32>,
    critic_opt: &mut Adam<f32>,
) -> Result<(f64, f64, f64, f64, f64)> {
    // purifier update; critic and extractor enter as constants
    let mut tape = Tape::new();
    let pb = purifier.bind(&mut tape, true);
    let cb = critic.bind(&mut tape, false);
    let fb = extractor.bind(&mut tape, false);
    let xv = tape.constant(x.clone());
    let xa = tape.constant(x_adv.clone());
    let xp = purifier.forward(&mut tape, &pb, xa, Mode::Train)?.out();
    let l_feat = loss_feat_on_tape(&mut tape, extractor, &fb, xv, xp, &cfg.tap, cfg.metric)?;
    let l_img = loss_img_on_tape(&mut tape, xp, xv)?;
    let (cr, cf, _) = critic_scores(&mut tape, critic, &cb, xv, xp)?;
    let l_adv = loss_adv_on_tape(&mut tape, cr, cf, form)?;
    let mut terms = Vec::new();
    for (w, v) in [(weights.alpha, l_adv), (weights.gamma, l_img), (weights.lambda, l_feat)] {
        if w > 0.0 {
            terms.push(tape.scale(v, w as f32));
        }
    }
    let value = |t: &Tape<f32>, v| t.value(v).item() as f64;
    let (va, vi, vf) = (value(&tape, l_adv), value(&tape, l_img), value(&tape, l_feat));
    for (name, v) in [("l_adv", va), ("l_img", vi), ("l_feat", vf)] {
        if !v.is_finite() {
            return Err(Error::NonFinite(name.into()));
        }
    }
    let (total, grads) = match terms.split_first() {
        None => (
            0.0,
            purifier
                .params()
                .iter()
                .map(|p| Tensor::zeros(p.shape().to_vec()))
                .collect::<Vec<_>>(),
        ),
        Some((&first, rest)) => {
            let mut t = first;
            for &r in rest {
                t = tape.add(t, r)?;
            }
            let total = value(&tape, t);
            let g = tape.backward(t)?;
            (total, pb.vars().iter().map(|&v| g.wrt(v)).collect())
        }
    };
    if grads.iter().any(|g| !g.is_finite()) {
        return Err(Error::NonFinite("purifier gradient".into()));
    }
    gen_opt.step(purifier.params_mut(), &grads)?;

    // critic update against the updated purifier
    let purified = purifier.infer(x_adv)?;
    let mut tape = Tape::new();
    let cb = critic.bind(&mut tape, true);
    let xv = tape.constant(x.clone());
    let xp = tape.constant(purified);
    let (cr, cf, stats) = critic_scores(&mut tape, critic, &cb, xv, xp)?;
    let cl = critic_loss_on_tape(&mut tape, cr, cf, form)?;
    let critic_loss = value(&tape, cl);
    if !critic_loss.is_finite() {
        return Err(Error::NonFinite("critic loss".into()));
    }
    let g = tape.backward(cl)?;
    let grads: Vec<_> = cb.vars().iter().map(|&v| g.wrt(v)).collect();
    if grads.iter().any(|g| !g.is_finite()) {
        return Err(Error::NonFinite("critic gradient".into()));
    }
    critic_opt.step(critic.params_mut(), &grads)?;
    critic.update_running_stats(&stats);
    Ok((va, vi, vf, total, critic_loss))
}
