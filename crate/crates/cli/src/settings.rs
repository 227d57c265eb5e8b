//! Layered settings and network architecture descriptions stored next to
//! checkpoints.

use std::path::Path;
use std::str::FromStr;

use anyhow::{anyhow, bail, Context, Result};
use nrp_core::io::{load_checkpoint, meta_path, save_checkpoint, write_meta, Config};
use nrp_core::nn::{
    build_critic, build_feature_extractor, build_purifier, build_toy_classifier, ClassifierConfig, CriticConfig,
    FeatureExtractorConfig, NetworkDef, PurifierConfig,
};

/// Resolved settings: defaults, then the config file, then flags.
pub struct Settings {
    pub cfg: Config,
}

impl Settings {
    pub fn resolve(defaults: Config, file: Option<&Path>, flags: Config) -> Result<Self> {
        let file_cfg = match file {
            Some(p) => Config::load(p)?,
            None => Config::new(),
        };
        Ok(Self {
            cfg: defaults.overlay(&file_cfg).overlay(&flags),
        })
    }

    pub fn has(&self, key: &str) -> bool {
        self.cfg.get(key).is_some()
    }

    pub fn str(&self, key: &str) -> Result<String> {
        self.cfg
            .get(key)
            .map(str::to_string)
            .ok_or_else(|| anyhow!("missing setting `{key}`"))
    }

    pub fn opt_str(&self, key: &str) -> Option<String> {
        self.cfg.get(key).map(str::to_string)
    }

    pub fn get<V: FromStr>(&self, key: &str) -> Result<V>
    where
        V::Err: std::fmt::Display,
    {
        self.cfg
            .get_parsed(key)?
            .ok_or_else(|| anyhow!("missing setting `{key}`"))
    }

    pub fn list<V: FromStr>(&self, key: &str) -> Result<Vec<V>>
    where
        V::Err: std::fmt::Display,
    {
        parse_list(&self.str(key)?).with_context(|| format!("setting `{key}`"))
    }

    /// Prints every resolved setting, one `key=value` per line.
    pub fn echo(&self, command: &str) {
        println!("# {command}");
        print!("{}", self.cfg.to_text());
    }
}

pub fn parse_list<V: FromStr>(s: &str) -> Result<Vec<V>>
where
    V::Err: std::fmt::Display,
{
    s.split(',')
        .filter(|p| !p.trim().is_empty())
        .map(|p| p.trim().parse::<V>().map_err(|e| anyhow!("`{p}`: {e}")))
        .collect()
}

fn join<V: ToString>(v: &[V]) -> String {
    v.iter().map(ToString::to_string).collect::<Vec<_>>().join(",")
}

/// Builder parameters of one of the four network kinds.
#[derive(Debug, Clone, PartialEq)]
pub enum Arch {
    Extractor(FeatureExtractorConfig),
    Classifier(ClassifierConfig),
    Purifier(PurifierConfig),
    Critic(CriticConfig),
}

impl Arch {
    pub fn kind(&self) -> &'static str {
        match self {
            Arch::Extractor(_) => "extractor",
            Arch::Classifier(_) => "classifier",
            Arch::Purifier(_) => "purifier",
            Arch::Critic(_) => "critic",
        }
    }

    pub fn build(&self) -> Result<NetworkDef<f32>> {
        Ok(match self {
            Arch::Extractor(c) => build_feature_extractor(c)?,
            Arch::Classifier(c) => build_toy_classifier(c)?,
            Arch::Purifier(c) => build_purifier(c)?,
            Arch::Critic(c) => build_critic(c)?,
        })
    }

    /// Architecture keys, prefixed with `arch.`.
    pub fn to_config(&self) -> Config {
        let mut c = Config::new();
        c.set("arch", self.kind());
        match self {
            Arch::Extractor(e) => {
                c.set("arch.widths", join(&e.widths));
                c.set("arch.depths", join(&e.depths));
                c.set("arch.classes", e.num_classes.to_string());
                c.set("arch.seed", e.seed.to_string());
            }
            Arch::Classifier(e) => {
                c.set("arch.widths", join(&e.widths));
                c.set("arch.classes", e.num_classes.to_string());
                c.set("arch.seed", e.seed.to_string());
            }
            Arch::Purifier(p) => {
                c.set("arch.width", p.width.to_string());
                c.set("arch.growth", p.growth.to_string());
                c.set("arch.blocks", p.basic_blocks.to_string());
                c.set("arch.seed", p.seed.to_string());
            }
            Arch::Critic(k) => {
                c.set("arch.widths", join(&k.widths));
                c.set("arch.strides", join(&k.strides));
                c.set("arch.seed", k.seed.to_string());
            }
        }
        c
    }

    /// Reads `arch.*` keys, falling back to the builder defaults of `kind`.
    pub fn from_config(kind: &str, c: &Config) -> Result<Self> {
        let list = |key: &str| -> Result<Option<Vec<usize>>> { c.get(key).map(parse_list).transpose() };
        let num = |key: &str| -> Result<Option<u64>> { Ok(c.get_parsed::<u64>(key)?) };
        Ok(match kind {
            "extractor" => {
                let mut e = FeatureExtractorConfig::default();
                if let Some(w) = list("arch.widths")? {
                    e.widths = w;
                }
                if let Some(d) = list("arch.depths")? {
                    e.depths = d;
                }
                if let Some(n) = num("arch.classes")? {
                    e.num_classes = n as usize;
                }
                if let Some(s) = num("arch.seed")? {
                    e.seed = s;
                }
                Arch::Extractor(e)
            }
            "classifier" => {
                let mut e = ClassifierConfig::default();
                if let Some(w) = list("arch.widths")? {
                    e.widths = w;
                }
                if let Some(n) = num("arch.classes")? {
                    e.num_classes = n as usize;
                }
                if let Some(s) = num("arch.seed")? {
                    e.seed = s;
                }
                Arch::Classifier(e)
            }
            "purifier" => {
                let mut p = PurifierConfig::default();
                if let Some(v) = num("arch.width")? {
                    p.width = v as usize;
                }
                if let Some(v) = num("arch.growth")? {
                    p.growth = v as usize;
                }
                if let Some(v) = num("arch.blocks")? {
                    p.basic_blocks = v as usize;
                }
                if let Some(s) = num("arch.seed")? {
                    p.seed = s;
                }
                Arch::Purifier(p)
            }
            "critic" => {
                let mut k = CriticConfig::default();
                if let Some(w) = list("arch.widths")? {
                    k.widths = w;
                }
                if let Some(s) = list("arch.strides")? {
                    k.strides = s;
                }
                if let Some(s) = num("arch.seed")? {
                    k.seed = s;
                }
                Arch::Critic(k)
            }
            other => bail!("unknown architecture `{other}`"),
        })
    }
}

/// Loads a checkpoint whose architecture is described by its `.meta`
/// sidecar (builder defaults when there is none).
pub fn load_net(kind: &str, path: &Path) -> Result<NetworkDef<f32>> {
    let meta = meta_path(path);
    let cfg = if meta.exists() {
        Config::load(&meta)?
    } else {
        Config::new()
    };
    if let Some(found) = cfg.get("arch") {
        if found != kind {
            bail!("{} holds a {found}, expected a {kind}", path.display());
        }
    }
    let mut net = Arch::from_config(kind, &cfg)?.build()?;
    load_checkpoint(&mut net, path).with_context(|| format!("loading {kind} from {}", path.display()))?;
    Ok(net)
}

/// Saves a checkpoint with a sidecar holding the run settings and the
/// architecture.
pub fn save_net(net: &NetworkDef<f32>, arch: &Arch, path: &Path, settings: &Settings) -> Result<()> {
    save_checkpoint(net, path)?;
    write_meta(path, &settings.cfg.overlay(&arch.to_config()))?;
    Ok(())
}
