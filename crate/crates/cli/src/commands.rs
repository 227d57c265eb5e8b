use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use nrp_core::attacks::{AttackSpec, DistanceMetric, Method};
use nrp_core::data::{load_cifar10, load_imgb, save_imgb, synthetic, Dataset, SyntheticSpec};
use nrp_core::eval::{
    attack_dataset, defense_table, distortion_curve, dynamic_defense_purify, layer_sweep, AttackModels, Defense,
};
use nrp_core::io::{write_atomic, write_meta, Config};
use nrp_core::nn::{CriticConfig, PurifierConfig, Tap, DEFAULT_TAP};
use nrp_core::train::{
    train_nrp_with_hook, train_supervised, Ablation, LossWeights, SupervisedConfig, TrainConfig, TrainModels,
};

use crate::settings::{load_net, parse_list, save_net, Arch, Settings};

fn defaults(pairs: &[(&str, &str)]) -> Config {
    let mut c = Config::new();
    for (k, v) in pairs {
        c.set(*k, *v);
    }
    c
}

const DATA_DEFAULTS: [(&str, &str); 4] = [("count", "1000"), ("size", "32"), ("data-seed", "0"), ("classes", "10")];

fn with_data_defaults(pairs: &[(&str, &str)]) -> Config {
    let mut c = defaults(&DATA_DEFAULTS);
    for (k, v) in pairs {
        c.set(*k, *v);
    }
    c
}

fn path(s: &Settings, key: &str) -> Result<PathBuf> {
    Ok(PathBuf::from(s.str(key)?))
}

fn opt_path(s: &Settings, key: &str) -> Option<PathBuf> {
    s.opt_str(key).map(PathBuf::from)
}

/// Dataset named by the `data`/`format` settings, or the synthetic task.
fn load_data(s: &Settings) -> Result<Dataset> {
    let classes: usize = s.get("classes")?;
    let source = opt_path(s, "data");
    let format = match (s.opt_str("format"), &source) {
        (Some(f), _) => f,
        (None, None) => "synthetic".into(),
        (None, Some(p)) if p.is_dir() || p.extension().is_some_and(|e| e == "bin") => "cifar10".into(),
        (None, Some(_)) => "imgb".into(),
    };
    let need_source = || source.clone().context("--data is required for this format");
    Ok(match format.as_str() {
        "synthetic" => synthetic(&SyntheticSpec {
            count: s.get("count")?,
            size: s.get("size")?,
            num_classes: classes,
            seed: s.get("data-seed")?,
            ..Default::default()
        })?,
        "imgb" => load_imgb(&need_source()?, classes)?,
        "cifar10" => load_cifar10(&need_source()?, !s.has("test-split"))?,
        other => bail!("unknown data format `{other}`"),
    })
}

/// `in` as an IMGB file when given, otherwise the data settings.
fn load_eval_data(s: &Settings) -> Result<Dataset> {
    match opt_path(s, "in") {
        Some(p) => Ok(load_imgb(&p, s.get("classes")?)?),
        None => load_data(s),
    }
}

fn write_csv(path: &Path, text: &str, s: &Settings) -> Result<()> {
    write_atomic(path, text.as_bytes())?;
    write_meta(path, &s.cfg)?;
    Ok(())
}

pub fn synth(file: Option<&Path>, flags: Config) -> Result<()> {
    let s = Settings::resolve(with_data_defaults(&[]), file, flags)?;
    s.echo("synth");
    let out = path(&s, "out")?;
    let ds = load_data(&s)?;
    save_imgb(&ds, &out)?;
    write_meta(&out, &s.cfg)?;
    println!("wrote {} images to {}", ds.len(), out.display());
    Ok(())
}

pub fn train_supervised_cmd(kind: &str, file: Option<&Path>, flags: Config) -> Result<()> {
    let s = Settings::resolve(
        with_data_defaults(&[("epochs", "5"), ("batch", "32"), ("lr", "0.002"), ("seed", "0")]),
        file,
        flags,
    )?;
    s.echo(&format!("train-{kind}"));
    let out = path(&s, "out")?;
    let data = load_data(&s)?;
    let mut arch_cfg = Config::new();
    if let Some(w) = s.opt_str("widths") {
        arch_cfg.set("arch.widths", w);
    }
    if let Some(d) = s.opt_str("depths") {
        if kind != "extractor" {
            bail!("--depths applies to the extractor only");
        }
        arch_cfg.set("arch.depths", d);
    }
    arch_cfg.set("arch.classes", data.num_classes.to_string());
    let arch = Arch::from_config(kind, &arch_cfg)?;
    let mut net = arch.build()?;
    let cfg = SupervisedConfig {
        epochs: s.get("epochs")?,
        batch: s.get("batch")?,
        lr: s.get("lr")?,
        seed: s.get("seed")?,
    };
    let history = train_supervised(&mut net, &data, &cfg)?;
    for (i, l) in history.iter().enumerate() {
        println!("epoch {} loss {l:.5}", i + 1);
    }
    save_net(&net, &arch, &out, &s)?;
    println!("saved {kind} to {}", out.display());
    Ok(())
}

/// Rejects `tap`/`metric` for label-based methods and `step`/`iters` for
/// single-step ones.
fn check_attack_combination(method: Method, given: &Config) -> Result<()> {
    let feature = matches!(method, Method::Ssp | Method::Bpda);
    for key in ["tap", "metric"] {
        if given.get(key).is_some() && !feature {
            bail!("--{key} is only valid with --method ssp or bpda, not {method}");
        }
    }
    if matches!(method, Method::Fgsm | Method::Rfgsm) {
        for key in ["step", "iters"] {
            if given.get(key).is_some() {
                bail!("--{key} is not valid with the single-step method {method}");
            }
        }
    }
    Ok(())
}

/// Attack spec from settings; budgets are given on the 0-255 scale.
fn attack_spec(method: Method, s: &Settings) -> Result<AttackSpec> {
    let eps = s.get::<f64>("epsilon")? / 255.0;
    let mut spec = AttackSpec::new(method, eps).with_seed(s.get("seed")?);
    if s.has("step") {
        spec.step = s.get::<f64>("step")? / 255.0;
    }
    if s.has("iters") {
        spec.iterations = s.get("iters")?;
    }
    if s.has("tap") {
        spec.tap = Tap::new(s.str("tap")?);
    }
    if s.has("metric") {
        spec.metric = s.get::<DistanceMetric>("metric")?;
    }
    if eps == 0.0 && !s.has("step") {
        spec.step = 1.0 / 255.0;
    }
    spec.validate()?;
    Ok(spec)
}

pub fn attack(file: Option<&Path>, flags: Config) -> Result<()> {
    let given = match file {
        Some(p) => Config::load(p)?.overlay(&flags),
        None => flags.clone(),
    };
    let method: Method = given.get("method").unwrap_or("ssp").parse()?;
    check_attack_combination(method, &given)?;
    let mut d = defaults(&[
        ("method", method.name()),
        ("epsilon", "16"),
        ("seed", "0"),
        ("classes", "10"),
    ]);
    if matches!(method, Method::Ssp | Method::Bpda) {
        d.set("tap", DEFAULT_TAP);
        d.set("metric", "mae");
    }
    let s = Settings::resolve(d, file, flags)?;
    s.echo("attack");
    let spec = attack_spec(method, &s)?;
    println!("# spec {}", spec.digest());
    println!(
        "# resolved epsilon={} step={} iterations={}",
        spec.epsilon, spec.step, spec.iterations
    );
    let input = path(&s, "in")?;
    let out = path(&s, "out")?;
    let data = load_imgb(&input, s.get("classes")?)?;
    let extractor = opt_path(&s, "extractor")
        .map(|p| load_net("extractor", &p))
        .transpose()?;
    let classifier = opt_path(&s, "classifier")
        .map(|p| load_net("classifier", &p))
        .transpose()?;
    let purifier = opt_path(&s, "purifier").map(|p| load_net("purifier", &p)).transpose()?;
    let models = AttackModels {
        classifier: classifier.as_ref(),
        extractor: extractor.as_ref(),
        purifier: purifier.as_ref(),
    };
    let adv = attack_dataset(&spec, &data.images, &data.labels, models)?;
    let result = Dataset::new(adv, data.labels.clone(), data.num_classes)?;
    save_imgb(&result, &out)?;
    write_meta(&out, &s.cfg)?;
    println!("wrote {} adversarial images to {}", result.len(), out.display());
    Ok(())
}

pub fn train_nrp_cmd(file: Option<&Path>, flags: Config) -> Result<()> {
    let s = Settings::resolve(
        with_data_defaults(&[
            ("ablation", "full"),
            ("alpha", "0.005"),
            ("gamma", "0.01"),
            ("lambda", "1"),
            ("lr", "0.0001"),
            ("batch", "16"),
            ("steps", "1000"),
            ("seed", "0"),
            ("attack-iters", "5"),
            ("tap", DEFAULT_TAP),
            ("checkpoint-every", "0"),
        ]),
        file,
        flags,
    )?;
    s.echo("train-nrp");
    let out = path(&s, "out")?;
    let critic_out = opt_path(&s, "critic-out").unwrap_or_else(|| suffixed(&out, ".critic"));
    let log_path = opt_path(&s, "log").unwrap_or_else(|| suffixed(&out, ".log.csv"));
    let ablation: Ablation = s.get("ablation")?;
    let extractor = load_net("extractor", &path(&s, "extractor")?)?;
    let classifier = opt_path(&s, "classifier").map(|p| load_net("classifier", &p)).transpose()?;
    let data = load_data(&s)?;
    let mut pcfg = PurifierConfig {
        channels: data.image_shape()[0],
        ..Default::default()
    };
    if s.has("width") {
        pcfg.width = s.get("width")?;
    }
    if s.has("growth") {
        pcfg.growth = s.get("growth")?;
    }
    if s.has("blocks") {
        pcfg.basic_blocks = s.get("blocks")?;
    }
    let p_arch = Arch::Purifier(pcfg);
    let c_arch = Arch::Critic(CriticConfig {
        channels: data.image_shape()[0],
        ..Default::default()
    });
    let mut purifier = p_arch.build()?;
    let mut critic = c_arch.build()?;
    let lr: f64 = s.get("lr")?;
    let cfg = TrainConfig {
        batch: s.get("batch")?,
        crop: if s.has("crop") { Some(s.get("crop")?) } else { None },
        generator_lr: lr,
        critic_lr: lr,
        steps: s.get("steps")?,
        ablation,
        weights: LossWeights {
            alpha: s.get("alpha")?,
            gamma: s.get("gamma")?,
            lambda: s.get("lambda")?,
        },
        attack_iterations: s.get("attack-iters")?,
        tap: Tap::new(s.str("tap")?),
        checkpoint_every: s.get("checkpoint-every")?,
        seed: s.get("seed")?,
        ..Default::default()
    };
    let w = cfg.effective_weights();
    println!(
        "# effective weights alpha={} gamma={} lambda={}",
        w.alpha, w.gamma, w.lambda
    );
    // FGSM training adversaries use the extractor's own head unless a classifier is given
    let models = TrainModels {
        extractor: &extractor,
        classifier: Some(classifier.as_ref().unwrap_or(&extractor)),
    };
    let mut hook = |step: usize, p: &nrp_core::nn::NetworkDef<f32>, c: &nrp_core::nn::NetworkDef<f32>| {
        save_net(p, &p_arch, &out, &s).map_err(|e| nrp_core::Error::InvalidArgument(e.to_string()))?;
        save_net(c, &c_arch, &critic_out, &s).map_err(|e| nrp_core::Error::InvalidArgument(e.to_string()))?;
        println!("checkpoint at step {step}");
        Ok(())
    };
    let log = train_nrp_with_hook(&models, &mut purifier, &mut critic, &data, &cfg, &mut hook)?;
    if let Some(last) = log.records.last() {
        println!(
            "step {} l_adv {:.5} l_img {:.5} l_feat {:.5} total {:.5} critic {:.5}",
            last.step, last.l_adv, last.l_img, last.l_feat, last.total, last.critic_loss
        );
    }
    let mut meta = s.cfg.clone();
    meta.set("effective.alpha", w.alpha.to_string());
    meta.set("effective.gamma", w.gamma.to_string());
    meta.set("effective.lambda", w.lambda.to_string());
    write_atomic(&log_path, log.to_csv().as_bytes())?;
    write_meta(&log_path, &meta)?;
    println!(
        "saved purifier to {} and critic to {}",
        out.display(),
        critic_out.display()
    );
    Ok(())
}

fn suffixed(p: &Path, suffix: &str) -> PathBuf {
    let mut s = p.as_os_str().to_os_string();
    s.push(suffix);
    PathBuf::from(s)
}

pub fn purify_cmd(file: Option<&Path>, flags: Config) -> Result<()> {
    let s = Settings::resolve(
        defaults(&[("noise", "0"), ("seed", "0"), ("classes", "10")]),
        file,
        flags,
    )?;
    s.echo("purify");
    let purifier = load_net("purifier", &path(&s, "purifier")?)?;
    let data = load_imgb(&path(&s, "in")?, s.get("classes")?)?;
    let out = path(&s, "out")?;
    let noise = s.get::<f64>("noise")? / 255.0;
    let cleaned = dynamic_defense_purify(&purifier, &data.images, noise, s.get("seed")?)?;
    let result = Dataset::new(cleaned, data.labels.clone(), data.num_classes)?;
    save_imgb(&result, &out)?;
    write_meta(&out, &s.cfg)?;
    println!("wrote {} purified images to {}", result.len(), out.display());
    Ok(())
}

pub fn eval_cmd(file: Option<&Path>, flags: Config) -> Result<()> {
    let s = Settings::resolve(
        with_data_defaults(&[
            ("methods", "ssp"),
            ("epsilon", "16"),
            ("seed", "0"),
            ("model-id", "classifier"),
        ]),
        file,
        flags,
    )?;
    s.echo("eval");
    let classifier = load_net("classifier", &path(&s, "classifier")?)?;
    let extractor = opt_path(&s, "extractor")
        .map(|p| load_net("extractor", &p))
        .transpose()?;
    let mut purifiers = Vec::new();
    if let Some(list) = s.opt_str("defenses") {
        for item in list.split(',').filter(|x| !x.is_empty()) {
            let (name, p) = item
                .split_once('=')
                .with_context(|| format!("defense `{item}` is not name=checkpoint"))?;
            purifiers.push((name.to_string(), load_net("purifier", Path::new(p))?));
        }
    }
    let mut defenses = vec![Defense {
        name: "none".into(),
        purifier: None,
    }];
    defenses.extend(purifiers.iter().map(|(n, p)| Defense {
        name: n.clone(),
        purifier: Some(p),
    }));
    let methods: Vec<Method> = s.list("methods")?;
    let budgets: Vec<f64> = s.list("epsilon")?;
    let seed: u64 = s.get("seed")?;
    let mut specs = Vec::new();
    for &m in &methods {
        for &e in &budgets {
            let mut spec = AttackSpec::new(m, e / 255.0).with_seed(seed);
            if s.has("iters") && !matches!(m, Method::Fgsm | Method::Rfgsm) {
                spec.iterations = s.get("iters")?;
            }
            spec.validate()?;
            specs.push(spec);
        }
    }
    let data = load_eval_data(&s)?;
    let models = AttackModels {
        classifier: Some(extractor.as_ref().unwrap_or(&classifier)),
        extractor: extractor.as_ref(),
        purifier: None,
    };
    let report = defense_table(&s.str("model-id")?, &classifier, &defenses, &specs, &data, models)?;
    let out = path(&s, "out")?;
    write_csv(&out, &report.to_csv(), &s)?;
    for r in report.rows() {
        println!("{:<10} {:<60} {:.4}", r.defense, r.attack, r.value);
    }
    println!("wrote report to {}", out.display());
    Ok(())
}

pub fn curve_cmd(file: Option<&Path>, flags: Config) -> Result<()> {
    let s = Settings::resolve(
        with_data_defaults(&[
            ("method", "ssp"),
            ("epsilon", "16"),
            ("grid", "1,2,5,10,20,50,100"),
            ("tap", DEFAULT_TAP),
            ("seed", "0"),
        ]),
        file,
        flags,
    )?;
    s.echo("distortion-curve");
    let method: Method = s.get("method")?;
    if method == Method::Bpda {
        bail!("distortion-curve does not support bpda");
    }
    let extractor = load_net("extractor", &path(&s, "extractor")?)?;
    let classifier = load_net("classifier", &path(&s, "classifier")?)?;
    let mut spec = AttackSpec::new(method, s.get::<f64>("epsilon")? / 255.0).with_seed(s.get("seed")?);
    spec.tap = Tap::new(s.str("tap")?);
    if s.has("step") {
        spec.step = s.get::<f64>("step")? / 255.0;
    }
    let grid: Vec<usize> = s.list("grid")?;
    let data = load_eval_data(&s)?;
    let curve = distortion_curve(&extractor, &classifier, &spec, &data, &spec.tap, &grid)?;
    let mut csv = String::from("iterations,mean_distortion,fooling_rate\n");
    for p in &curve {
        csv.push_str(&format!("{},{},{}\n", p.iterations, p.mean_distortion, p.fooling_rate));
        println!(
            "T={:<4} distortion {:.5} fooling {:.4}",
            p.iterations, p.mean_distortion, p.fooling_rate
        );
    }
    let out = path(&s, "out")?;
    write_csv(&out, &csv, &s)?;
    Ok(())
}

pub fn sweep_cmd(file: Option<&Path>, flags: Config) -> Result<()> {
    let s = Settings::resolve(
        with_data_defaults(&[("epsilon", "16"), ("iters", "20"), ("seed", "0")]),
        file,
        flags,
    )?;
    s.echo("layer-sweep");
    let extractor = load_net("extractor", &path(&s, "extractor")?)?;
    let classifier = load_net("classifier", &path(&s, "classifier")?)?;
    let taps: Vec<Tap> = match s.opt_str("taps") {
        Some(t) => parse_list::<String>(&t)?.into_iter().map(Tap::new).collect(),
        None => extractor.tap_names().into_iter().map(Tap::new).collect(),
    };
    let mut spec = AttackSpec::new(Method::Ssp, s.get::<f64>("epsilon")? / 255.0)
        .with_seed(s.get("seed")?)
        .with_iterations(s.get("iters")?);
    if s.has("step") {
        spec.step = s.get::<f64>("step")? / 255.0;
    }
    spec.validate()?;
    let data = load_eval_data(&s)?;
    let rows = layer_sweep(&extractor, &classifier, &data, &taps, &spec)?;
    let mut csv = String::from("tap,fooling_rate\n");
    for (tap, rate) in &rows {
        csv.push_str(&format!("{},{}\n", tap.name(), rate));
        println!("{:<8} {:.4}", tap.name(), rate);
    }
    let out = path(&s, "out")?;
    write_csv(&out, &csv, &s)?;
    Ok(())
}
