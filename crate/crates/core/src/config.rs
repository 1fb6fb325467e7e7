//! Run configuration: model, training and augmentation settings as flat
//! `key = value` text.
//!
//! `#` starts a comment. A `preset` line is applied before every other key,
//! wherever it appears. Unknown and repeated keys are errors. [`RunConfig::echo`]
//! writes every key, so parsing the echo reproduces the configuration exactly.

use std::fmt::Display;
use std::str::FromStr;

use crate::data::AugmentConfig;
use crate::error::{Error, Result};
use crate::geometry::PriorKind;
use crate::model::{DmPlacement, EncoderDa, ModelConfig, RmInjection};
use crate::tokenizer::SoftSplitSpec;
use crate::trainer::TrainConfig;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Preset {
    /// Full-size model and the long schedule.
    Full,
    /// 64×128 input, d = 96, two encoder blocks, 500 steps without augmentation.
    Tiny,
}

impl Preset {
    pub fn as_str(self) -> &'static str {
        match self {
            Preset::Full => "full",
            Preset::Tiny => "tiny",
        }
    }
}

impl FromStr for Preset {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(Preset::Full),
            "tiny" => Ok(Preset::Tiny),
            _ => Err(Error::Config(format!("unknown preset `{s}` (expected full or tiny)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub preset: Preset,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub augment: AugmentConfig,
    /// Seed of the parameter initialization.
    pub init_seed: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self::preset(Preset::Full)
    }
}

macro_rules! named_enum {
    ($ty:ty { $($name:literal => $variant:expr),+ $(,)? }) => {
        impl ConfigValue for $ty {
            fn parse_value(s: &str) -> std::result::Result<Self, String> {
                match s {
                    $($name => Ok($variant),)+
                    _ => Err(format!("expected one of: {}", [$($name),+].join(", "))),
                }
            }
            fn show(&self) -> String {
                $(if *self == $variant { return $name.to_string(); })+
                unreachable!()
            }
        }
    };
}

trait ConfigValue: Sized {
    fn parse_value(s: &str) -> std::result::Result<Self, String>;
    fn show(&self) -> String;
}

fn parse_plain<T: FromStr>(s: &str) -> std::result::Result<T, String>
where
    T::Err: Display,
{
    s.parse().map_err(|e: T::Err| e.to_string())
}

macro_rules! plain {
    ($($t:ty),*) => {$(
        impl ConfigValue for $t {
            fn parse_value(s: &str) -> std::result::Result<Self, String> { parse_plain(s) }
            fn show(&self) -> String { self.to_string() }
        }
    )*};
}
plain!(usize, u64, f64);

impl ConfigValue for bool {
    fn parse_value(s: &str) -> std::result::Result<Self, String> {
        match s {
            "true" | "1" | "yes" | "on" => Ok(true),
            "false" | "0" | "no" | "off" => Ok(false),
            _ => Err("expected true or false".into()),
        }
    }
    fn show(&self) -> String {
        self.to_string()
    }
}

named_enum!(PriorKind { "cosine" => PriorKind::Cosine, "sine" => PriorKind::Sine, "blank" => PriorKind::Blank });
named_enum!(DmPlacement { "decoder" => DmPlacement::Decoder, "encoder" => DmPlacement::Encoder });
named_enum!(EncoderDa { "off" => EncoderDa::Off, "replace" => EncoderDa::Replace, "parallel" => EncoderDa::Parallel });
named_enum!(RmInjection { "add" => RmInjection::Add, "concat" => RmInjection::Concat });

impl ConfigValue for Option<f64> {
    fn parse_value(s: &str) -> std::result::Result<Self, String> {
        if s == "none" || s == "off" {
            Ok(None)
        } else {
            parse_plain(s).map(Some)
        }
    }
    fn show(&self) -> String {
        self.map_or_else(|| "none".into(), |v| v.to_string())
    }
}

/// Comma-separated lists; an empty value is an empty list.
impl ConfigValue for Vec<usize> {
    fn parse_value(s: &str) -> std::result::Result<Self, String> {
        if s.is_empty() {
            return Ok(Vec::new());
        }
        s.split(',').map(|p| parse_plain(p.trim())).collect()
    }
    fn show(&self) -> String {
        self.iter().map(ToString::to_string).collect::<Vec<_>>().join(",")
    }
}

impl<const N: usize> ConfigValue for [usize; N] {
    fn parse_value(s: &str) -> std::result::Result<Self, String> {
        let v = Vec::<usize>::parse_value(s)?;
        v.try_into().map_err(|v: Vec<usize>| format!("expected {N} values, got {}", v.len()))
    }
    fn show(&self) -> String {
        self.to_vec().show()
    }
}

/// Pair written `HxW`.
impl ConfigValue for (usize, usize) {
    fn parse_value(s: &str) -> std::result::Result<Self, String> {
        parse_size(s).map_err(|e| e.to_string())
    }
    fn show(&self) -> String {
        format!("{}x{}", self.0, self.1)
    }
}

/// Windows written `k/s/p` and separated by commas.
impl ConfigValue for [SoftSplitSpec; 3] {
    fn parse_value(s: &str) -> std::result::Result<Self, String> {
        let specs = s
            .split(',')
            .map(|w| {
                let p: Vec<usize> = w.trim().split('/').map(parse_plain).collect::<std::result::Result<_, _>>()?;
                match p[..] {
                    [k, o, pad] => SoftSplitSpec::new(k, o, pad).map_err(|e| e.to_string()),
                    _ => Err(format!("window `{w}` is not k/s/p")),
                }
            })
            .collect::<std::result::Result<Vec<_>, _>>()?;
        specs.try_into().map_err(|v: Vec<_>| format!("expected 3 windows, got {}", v.len()))
    }
    fn show(&self) -> String {
        self.iter().map(|w| format!("{}/{}/{}", w.kernel, w.overlap, w.padding)).collect::<Vec<_>>().join(",")
    }
}

/// Parses `HxW`.
pub fn parse_size(s: &str) -> Result<(usize, usize)> {
    let err = || Error::Config(format!("size `{s}` is not HxW"));
    let (h, w) = s.split_once(['x', 'X']).ok_or_else(err)?;
    Ok((h.trim().parse().map_err(|_| err())?, w.trim().parse().map_err(|_| err())?))
}

/// Generates the key table: each entry maps a key to a field path.
macro_rules! schema {
    ($($key:literal => $($field:ident).+ ;)+) => {
        /// Every accepted key, in echo order.
        pub const KEYS: &[&str] = &["preset", $($key),+];

        impl RunConfig {
            fn set_field(&mut self, key: &str, value: &str) -> Result<()> {
                match key {
                    $($key => {
                        self.$($field).+ = ConfigValue::parse_value(value)
                            .map_err(|e| Error::Config(format!("`{key} = {value}`: {e}")))?;
                    })+
                    _ => return Err(Error::Config(format!("unknown key `{key}`"))),
                }
                Ok(())
            }

            fn field_lines(&self) -> Vec<(&'static str, String)> {
                vec![$(($key, self.$($field).+.show())),+]
            }
        }
    };
}

schema! {
    "height" => model.height;
    "width" => model.width;
    "t2t" => model.t2t;
    "rt2t" => model.rt2t;
    "token_dim" => model.token_dim;
    "embed_dim" => model.embed_dim;
    "encoder_depth" => model.encoder_depth;
    "heads" => model.heads;
    "mlp_ratio" => model.mlp_ratio;
    "dropout" => model.dropout;
    "use_dm" => model.use_dm;
    "use_da" => model.use_da;
    "use_rm" => model.use_rm;
    "use_pe" => model.use_pe;
    "prior" => model.prior;
    "fold_channels" => model.fold_channels;
    "regulator_widths" => model.regulator_widths;
    "normalize_fold" => model.normalize_fold;
    "skip_fusion" => model.skip_fusion;
    "dm_placement" => model.dm_placement;
    "encoder_da" => model.encoder_da;
    "rm_injection" => model.rm_injection;
    "init_seed" => init_seed;
    "batch_size" => train.batch_size;
    "total_steps" => train.total_steps;
    "base_lr" => train.base_lr;
    "decay_steps" => train.decay_steps;
    "decay_factor" => train.decay_factor;
    "beta1" => train.beta1;
    "beta2" => train.beta2;
    "adam_eps" => train.adam_eps;
    "seed" => train.seed;
    "checkpoint_every" => train.checkpoint_every;
    "log_every" => train.log_every;
    "grad_clip" => train.grad_clip;
    "augment" => augment.enabled;
    "resize_to" => augment.resize_to;
    "crop_to" => augment.crop_to;
    "hflip_prob" => augment.hflip_prob;
}

impl RunConfig {
    pub fn preset(p: Preset) -> Self {
        match p {
            Preset::Full => Self {
                preset: p,
                model: ModelConfig::default(),
                train: TrainConfig::default(),
                augment: AugmentConfig::default(),
                init_seed: 0,
            },
            Preset::Tiny => {
                let model = ModelConfig::tiny();
                let augment = AugmentConfig {
                    enabled: false,
                    resize_to: (model.height + model.height / 8, model.width + model.width / 8),
                    crop_to: (model.height, model.width),
                    hflip_prob: 0.5,
                };
                let train = TrainConfig {
                    total_steps: 500,
                    base_lr: 1e-3,
                    decay_steps: vec![350, 450],
                    checkpoint_every: 100,
                    log_every: 25,
                    ..TrainConfig::default()
                };
                Self { preset: p, model, train, augment, init_seed: 0 }
            }
        }
    }

    /// Applies one `key = value` assignment on top of the current values.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        if key == "preset" {
            let p: Preset = value.parse()?;
            *self = Self::preset(p);
            return Ok(());
        }
        self.set_field(key, value)
    }

    /// Parses config text; the preset is applied first.
    pub fn parse(text: &str) -> Result<Self> {
        let mut pairs: Vec<(String, String)> = Vec::new();
        for (no, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`, got `{}`", no + 1, raw.trim())))?;
            let (k, v) = (k.trim().to_string(), v.trim().to_string());
            if !KEYS.contains(&k.as_str()) {
                return Err(Error::Config(format!("line {}: unknown key `{k}`", no + 1)));
            }
            if pairs.iter().any(|(pk, _)| *pk == k) {
                return Err(Error::Config(format!("line {}: key `{k}` given twice", no + 1)));
            }
            pairs.push((k, v));
        }
        let mut cfg = Self::default();
        if let Some((_, p)) = pairs.iter().find(|(k, _)| k == "preset") {
            cfg.set("preset", p)?;
        }
        for (k, v) in pairs.iter().filter(|(k, _)| k != "preset") {
            cfg.set(k, v)?;
        }
        Ok(cfg)
    }

    /// Applies `key=value` overrides in order.
    pub fn apply_overrides<S: AsRef<str>>(&mut self, overrides: &[S]) -> Result<()> {
        for o in overrides {
            let o = o.as_ref();
            let (k, v) = o.split_once('=').ok_or_else(|| Error::Config(format!("override `{o}` is not key=value")))?;
            self.set(k.trim(), v.trim())?;
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        if self.augment.enabled {
            self.augment.validate()?;
            if self.augment.crop_to != (self.model.height, self.model.width) {
                return Err(Error::Config(format!(
                    "crop_to {} must equal the model input {}x{}",
                    self.augment.crop_to.show(),
                    self.model.height,
                    self.model.width
                )));
            }
        }
        Ok(())
    }

    /// Every key with its resolved value.
    pub fn echo(&self) -> String {
        let mut s = format!("preset = {}\n", self.preset.as_str());
        for (k, v) in self.field_lines() {
            s.push_str(&format!("{k} = {v}\n"));
        }
        s
    }
}
