//! Run configuration: flat `key = value` text with dotted keys and `#`
//! comments.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::align::{AlignSite, AlignmentConfig, Strategy};
use crate::error::{Error, Result};
use crate::flow::Geometry;
use crate::harness::optim::AdamWConfig;

pub const SEED_ENV: &str = "FLOWBACK_SEED";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DatasetKind {
    Gauss2d,
    Rings2d,
    Toyimg8,
    File,
}

impl FromStr for DatasetKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gauss2d" => Ok(Self::Gauss2d),
            "rings2d" => Ok(Self::Rings2d),
            "toyimg8" => Ok(Self::Toyimg8),
            "file" => Ok(Self::File),
            _ => Err(Error::Config(format!("unknown dataset {s:?}"))),
        }
    }
}

impl DatasetKind {
    pub fn name(self) -> &'static str {
        match self {
            Self::Gauss2d => "gauss2d",
            Self::Rings2d => "rings2d",
            Self::Toyimg8 => "toyimg8",
            Self::File => "file",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EncoderKind {
    Stub,
    File,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub dataset: DatasetKind,
    pub data_classes: usize,
    pub data_size: usize,
    pub data_seed: u64,
    pub data_patch: usize,
    pub data_path: Option<PathBuf>,

    pub blocks: usize,
    pub layers: usize,
    pub width: usize,
    pub heads: usize,
    pub ff_mult: usize,
    pub zero_head: bool,

    pub optim: AdamWConfig,
    pub batch: usize,
    pub steps: usize,
    pub ema_decay: f64,
    pub null_label_prob: f64,
    pub checkpoint_every: usize,
    pub threads: usize,

    pub sigma_noise: f64,

    pub strategy: Strategy,
    /// `None` selects [`AlignmentConfig::default_sites`].
    pub sites: Option<Vec<AlignSite>>,
    pub lambda: f64,
    pub feature_dim: usize,
    pub proj_hidden: usize,
    pub encoder: EncoderKind,
    pub features_path: Option<PathBuf>,

    pub seed: u64,
    pub cfg_scale: f64,
    pub denoise: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            dataset: DatasetKind::Gauss2d,
            data_classes: 4,
            data_size: 4096,
            data_seed: 7,
            data_patch: 2,
            data_path: None,
            blocks: 4,
            layers: 2,
            width: 32,
            heads: 2,
            ff_mult: 2,
            zero_head: true,
            optim: AdamWConfig::default(),
            batch: 64,
            steps: 200,
            ema_decay: 0.9999,
            null_label_prob: 0.1,
            checkpoint_every: 0,
            threads: 1,
            sigma_noise: 0.2,
            strategy: Strategy::Reverse,
            sites: None,
            lambda: 0.1,
            feature_dim: 8,
            proj_hidden: 32,
            encoder: EncoderKind::Stub,
            features_path: None,
            seed: 0,
            cfg_scale: 1.0,
            denoise: true,
        }
    }
}

fn parse<T: FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| Error::Config(format!("bad value {v:?} for {key}")))
}

fn parse_bool(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(Error::Config(format!("bad boolean {v:?} for {key}"))),
    }
}

fn opt_path(v: &str) -> Option<PathBuf> {
    (!v.is_empty() && v != "none").then(|| PathBuf::from(v))
}

impl RunConfig {
    /// Parses config text on top of the defaults.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        cfg.apply_text(text)?;
        Ok(cfg)
    }

    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value", n + 1)))?;
            self.set(k.trim(), v.trim())?;
        }
        Ok(())
    }

    /// Reads `path` (if any), then the `FLOWBACK_SEED` environment
    /// variable, then `overrides` (`key=value`).
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let mut cfg = match path {
            Some(p) => Self::parse(&std::fs::read_to_string(p)?)?,
            None => Self::default(),
        };
        if let Ok(seed) = std::env::var(SEED_ENV) {
            cfg.set("seed", seed.trim())?;
        }
        for o in overrides {
            let (k, v) = o
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("override {o:?} is not key=value")))?;
            cfg.set(k.trim(), v.trim())?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        match key {
            "dataset" => self.dataset = parse(key, v)?,
            "data.classes" => self.data_classes = parse(key, v)?,
            "data.size" => self.data_size = parse(key, v)?,
            "data.seed" => self.data_seed = parse(key, v)?,
            "data.patch" => self.data_patch = parse(key, v)?,
            "data.path" => self.data_path = opt_path(v),
            "model.blocks" => self.blocks = parse(key, v)?,
            "model.layers" => self.layers = parse(key, v)?,
            "model.width" => self.width = parse(key, v)?,
            "model.heads" => self.heads = parse(key, v)?,
            "model.ff_mult" => self.ff_mult = parse(key, v)?,
            "model.zero_head" => self.zero_head = parse_bool(key, v)?,
            "optim.kind" => {
                if v != "adamw" {
                    return Err(Error::Config(format!("unsupported optimizer {v:?}")));
                }
            }
            "optim.lr" => self.optim.lr = parse(key, v)?,
            "optim.beta1" => self.optim.beta1 = parse(key, v)?,
            "optim.beta2" => self.optim.beta2 = parse(key, v)?,
            "optim.eps" => self.optim.eps = parse(key, v)?,
            "optim.weight_decay" => self.optim.weight_decay = parse(key, v)?,
            "train.batch" => self.batch = parse(key, v)?,
            "train.steps" => self.steps = parse(key, v)?,
            "train.ema_decay" => self.ema_decay = parse(key, v)?,
            "train.null_label_prob" => self.null_label_prob = parse(key, v)?,
            "train.checkpoint_every" => self.checkpoint_every = parse(key, v)?,
            "train.threads" => self.threads = parse(key, v)?,
            "noise.sigma" => self.sigma_noise = parse(key, v)?,
            "align.strategy" => self.strategy = v.parse()?,
            "align.sites" => {
                self.sites = match v {
                    "auto" => None,
                    "" | "none" => Some(vec![]),
                    _ => Some(
                        v.split(',')
                            .map(|s| s.trim().parse())
                            .collect::<Result<_>>()?,
                    ),
                }
            }
            "align.lambda" => self.lambda = parse(key, v)?,
            "align.feature_dim" => self.feature_dim = parse(key, v)?,
            "align.proj_hidden" => self.proj_hidden = parse(key, v)?,
            "align.encoder" => {
                self.encoder = match v {
                    "stub" => EncoderKind::Stub,
                    "file" => EncoderKind::File,
                    _ => return Err(Error::Config(format!("unknown encoder {v:?}"))),
                }
            }
            "align.features_path" => self.features_path = opt_path(v),
            "seed" => self.seed = parse(key, v)?,
            "sample.cfg_scale" => self.cfg_scale = parse(key, v)?,
            "sample.denoise" => self.denoise = parse_bool(key, v)?,
            _ => return Err(Error::Config(format!("unknown key {key:?}"))),
        }
        Ok(())
    }

    /// `(tokens, channels)` of the configured dataset. File datasets carry
    /// their own geometry and report `None`.
    pub fn data_shape(&self) -> Option<(usize, usize)> {
        match self.dataset {
            DatasetKind::Gauss2d | DatasetKind::Rings2d => Some((2, 1)),
            DatasetKind::Toyimg8 => {
                let p = self.data_patch;
                Some(((8 / p) * (8 / p), p * p))
            }
            DatasetKind::File => None,
        }
    }

    pub fn geometry(&self, tokens: usize, channels: usize) -> Geometry {
        Geometry {
            tokens,
            channels,
            width: self.width,
            layers: self.layers,
            heads: self.heads,
            ff_mult: self.ff_mult,
            classes: self.data_classes,
        }
    }

    pub fn alignment(&self) -> AlignmentConfig {
        AlignmentConfig {
            strategy: self.strategy,
            sites: self
                .sites
                .clone()
                .unwrap_or_else(|| AlignmentConfig::default_sites(self.blocks, self.layers)),
            lambda: self.lambda,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let pos = |name: &str, v: usize| {
            if v == 0 {
                Err(Error::Config(format!("{name} must be positive")))
            } else {
                Ok(())
            }
        };
        pos("data.classes", self.data_classes)?;
        pos("data.size", self.data_size)?;
        pos("model.blocks", self.blocks)?;
        pos("train.batch", self.batch)?;
        pos("train.threads", self.threads)?;
        pos("align.feature_dim", self.feature_dim)?;
        pos("align.proj_hidden", self.proj_hidden)?;
        if self.dataset == DatasetKind::Toyimg8
            && (self.data_patch == 0 || 8 % self.data_patch != 0)
        {
            return Err(Error::Config("data.patch must divide 8".into()));
        }
        if self.dataset == DatasetKind::File && self.data_path.is_none() {
            return Err(Error::Config("dataset = file needs data.path".into()));
        }
        if self.encoder == EncoderKind::File && self.features_path.is_none() {
            return Err(Error::Config(
                "align.encoder = file needs align.features_path".into(),
            ));
        }
        if !(0.0..=1.0).contains(&self.null_label_prob) {
            return Err(Error::Config(
                "train.null_label_prob must lie in [0, 1]".into(),
            ));
        }
        if !(self.optim.lr > 0.0)
            || !(0.0..1.0).contains(&self.optim.beta1)
            || !(0.0..1.0).contains(&self.optim.beta2)
        {
            return Err(Error::Config("optimizer settings out of range".into()));
        }
        if !(0.0..1.0).contains(&self.ema_decay) {
            return Err(Error::Config("train.ema_decay must lie in [0, 1)".into()));
        }
        if !(self.sigma_noise >= 0.0) {
            return Err(Error::Config("noise.sigma must be >= 0".into()));
        }
        if !(self.cfg_scale >= 1.0) {
            return Err(Error::Config("sample.cfg_scale must be >= 1".into()));
        }
        if let Some((d, c)) = self.data_shape() {
            self.geometry(d, c).validate()?;
        }
        self.alignment().validate(self.blocks, self.layers)
    }

    /// Canonical text form; parsing it gives back an equal config.
    pub fn to_text(&self) -> String {
        let path = |p: &Option<PathBuf>| {
            p.as_ref()
                .map_or("none".to_owned(), |p| p.display().to_string())
        };
        let sites = match &self.sites {
            None => "auto".to_owned(),
            Some(s) if s.is_empty() => "none".to_owned(),
            Some(s) => s
                .iter()
                .map(ToString::to_string)
                .collect::<Vec<_>>()
                .join(","),
        };
        let mut out = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(out, "{k} = {v}");
        };
        kv("dataset", self.dataset.name().into());
        kv("data.classes", self.data_classes.to_string());
        kv("data.size", self.data_size.to_string());
        kv("data.seed", self.data_seed.to_string());
        kv("data.patch", self.data_patch.to_string());
        kv("data.path", path(&self.data_path));
        kv("model.blocks", self.blocks.to_string());
        kv("model.layers", self.layers.to_string());
        kv("model.width", self.width.to_string());
        kv("model.heads", self.heads.to_string());
        kv("model.ff_mult", self.ff_mult.to_string());
        kv("model.zero_head", self.zero_head.to_string());
        kv("optim.kind", "adamw".into());
        kv("optim.lr", format!("{:?}", self.optim.lr));
        kv("optim.beta1", format!("{:?}", self.optim.beta1));
        kv("optim.beta2", format!("{:?}", self.optim.beta2));
        kv("optim.eps", format!("{:?}", self.optim.eps));
        kv(
            "optim.weight_decay",
            format!("{:?}", self.optim.weight_decay),
        );
        kv("train.batch", self.batch.to_string());
        kv("train.steps", self.steps.to_string());
        kv("train.ema_decay", format!("{:?}", self.ema_decay));
        kv(
            "train.null_label_prob",
            format!("{:?}", self.null_label_prob),
        );
        kv("train.checkpoint_every", self.checkpoint_every.to_string());
        kv("train.threads", self.threads.to_string());
        kv("noise.sigma", format!("{:?}", self.sigma_noise));
        kv("align.strategy", self.strategy.to_string());
        kv("align.sites", sites);
        kv("align.lambda", format!("{:?}", self.lambda));
        kv("align.feature_dim", self.feature_dim.to_string());
        kv("align.proj_hidden", self.proj_hidden.to_string());
        kv(
            "align.encoder",
            match self.encoder {
                EncoderKind::Stub => "stub",
                EncoderKind::File => "file",
            }
            .into(),
        );
        kv("align.features_path", path(&self.features_path));
        kv("seed", self.seed.to_string());
        kv("sample.cfg_scale", format!("{:?}", self.cfg_scale));
        kv("sample.denoise", self.denoise.to_string());
        out
    }
}
