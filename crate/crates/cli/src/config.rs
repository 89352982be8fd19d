//! Flat `key = value` run configuration.
//!
//! Every subcommand has a settings record whose fields double as config-file
//! keys and as `--key` flags. Values resolve in the order: built-in default,
//! `STYLESWAP_SEED` (seed only), config file, flags.

use std::fmt;
use std::path::{Path, PathBuf};

use styleswap_core::inversion::StyleSpace;

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("unknown config key `{key}`")]
    UnknownKey { key: String },
    #[error("invalid value `{value}` for `{key}`: {reason}")]
    InvalidValue { key: String, value: String, reason: String },
    #[error("missing required key `{key}`")]
    MissingKey { key: &'static str },
    #[error("line {line}: expected `key = value`, found `{text}`")]
    Syntax { line: usize, text: String },
    #[error("cannot read config file {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, ConfigError>;

/// Conversion between a typed setting and its textual form.
pub trait Value: Sized {
    fn parse(s: &str) -> std::result::Result<Self, String>;
    fn render(&self) -> String;
}

macro_rules! from_str_value {
    ($($t:ty),*) => {$(
        impl Value for $t {
            fn parse(s: &str) -> std::result::Result<Self, String> {
                s.parse().map_err(|e| format!("{e}"))
            }
            fn render(&self) -> String {
                self.to_string()
            }
        }
    )*};
}

from_str_value!(u64, usize, f64, bool, String);

impl Value for PathBuf {
    fn parse(s: &str) -> std::result::Result<Self, String> {
        if s.is_empty() {
            return Err("empty path".into());
        }
        Ok(PathBuf::from(s))
    }
    fn render(&self) -> String {
        self.display().to_string()
    }
}

/// `none` or an empty value clears an optional setting.
impl<T: Value> Value for Option<T> {
    fn parse(s: &str) -> std::result::Result<Self, String> {
        if s.is_empty() || s == "none" {
            Ok(None)
        } else {
            T::parse(s).map(Some)
        }
    }
    fn render(&self) -> String {
        self.as_ref().map_or_else(|| "none".into(), Value::render)
    }
}

/// Comma-separated list.
impl Value for Vec<usize> {
    fn parse(s: &str) -> std::result::Result<Self, String> {
        let v: std::result::Result<Vec<usize>, _> = s.split(',').map(|p| p.trim().parse::<usize>()).collect();
        match v {
            Ok(v) if !v.is_empty() => Ok(v),
            Ok(_) => Err("empty list".into()),
            Err(e) => Err(e.to_string()),
        }
    }
    fn render(&self) -> String {
        self.iter().map(|c| c.to_string()).collect::<Vec<_>>().join(",")
    }
}

impl Value for StyleSpace {
    fn parse(s: &str) -> std::result::Result<Self, String> {
        match s {
            "w" => Ok(StyleSpace::W),
            "w_plus" | "w+" => Ok(StyleSpace::WPlus),
            _ => Err("expected `w` or `w_plus`".into()),
        }
    }
    fn render(&self) -> String {
        match self {
            StyleSpace::W => "w".into(),
            StyleSpace::WPlus => "w_plus".into(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InversionMode {
    OneToOne,
    OneToMany,
}

impl Value for InversionMode {
    fn parse(s: &str) -> std::result::Result<Self, String> {
        match s {
            "one2one" => Ok(InversionMode::OneToOne),
            "one2many" => Ok(InversionMode::OneToMany),
            _ => Err("expected `one2one` or `one2many`".into()),
        }
    }
    fn render(&self) -> String {
        match self {
            InversionMode::OneToOne => "one2one".into(),
            InversionMode::OneToMany => "one2many".into(),
        }
    }
}

/// Settings record of one subcommand.
pub trait Settings: Default {
    /// `(key, help)` for every field, in declaration order.
    const KEYS: &'static [(&'static str, &'static str)];

    fn set(&mut self, key: &str, value: &str) -> Result<()>;

    /// Every field rendered as text, in declaration order.
    fn entries(&self) -> Vec<(&'static str, String)>;

    /// Checks required keys and cross-field constraints.
    fn check(&self) -> Result<()> {
        Ok(())
    }

    /// Renders the record as a config file that parses back to it.
    fn to_config_text(&self) -> String {
        self.entries().into_iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }
}

fn invalid(key: &str, value: &str, reason: String) -> ConfigError {
    ConfigError::InvalidValue {
        key: key.into(),
        value: value.into(),
        reason,
    }
}

macro_rules! settings {
    (
        $(#[$meta:meta])*
        pub struct $name:ident {
            $( $(#[doc = $doc:literal])* $field:ident : $ty:ty = $default:expr, )*
        }
    ) => {
        $(#[$meta])*
        #[derive(Debug, Clone, PartialEq)]
        pub struct $name {
            $( $(#[doc = $doc])* pub $field: $ty, )*
        }

        impl Default for $name {
            fn default() -> Self {
                Self { $( $field: $default, )* }
            }
        }

        impl $name {
            const FIELDS: &'static [(&'static str, &'static str)] = &[
                $( (stringify!($field), concat!($($doc),*)), )*
            ];

            fn set_field(&mut self, key: &str, value: &str) -> Result<()> {
                match key {
                    $( stringify!($field) => {
                        self.$field = <$ty as Value>::parse(value).map_err(|r| invalid(key, value, r))?;
                    } )*
                    _ => return Err(ConfigError::UnknownKey { key: key.into() }),
                }
                Ok(())
            }

            fn field_entries(&self) -> Vec<(&'static str, String)> {
                vec![ $( (stringify!($field), Value::render(&self.$field)), )* ]
            }
        }
    };
}

macro_rules! impl_settings {
    ($name:ident $(, $check:item)?) => {
        impl Settings for $name {
            const KEYS: &'static [(&'static str, &'static str)] = $name::FIELDS;
            fn set(&mut self, key: &str, value: &str) -> Result<()> {
                self.set_field(key, value)
            }
            fn entries(&self) -> Vec<(&'static str, String)> {
                self.field_entries()
            }
            $($check)?
        }
    };
}

fn required<T>(v: &Option<T>, key: &'static str) -> Result<()> {
    match v {
        Some(_) => Ok(()),
        None => Err(ConfigError::MissingKey { key }),
    }
}

settings! {
    pub struct SynthSettings {
        /// Output dataset directory.
        out: Option<PathBuf> = None,
        /// Number of identities.
        identities: usize = 20,
        /// Frames per identity.
        frames: usize = 50,
        /// Image side in pixels.
        resolution: usize = 32,
        /// Dataset seed.
        seed: u64 = 0,
    }
}

impl_settings!(SynthSettings, fn check(&self) -> Result<()> { required(&self.out, "out") });

settings! {
    pub struct PretrainSettings {
        /// Output embedder archive.
        out: Option<PathBuf> = None,
        /// Image side in pixels.
        resolution: usize = 32,
        /// Pre-training seed.
        seed: u64 = 0,
        /// Steps per identity network.
        identity_steps: u64 = 3000,
        /// Steps of the pose regressor.
        pose_steps: u64 = 2000,
        /// Identities in the training pool.
        pool_identities: usize = 1000,
        /// Images per step.
        batch_size: usize = 32,
        /// Adam learning rate.
        learning_rate: f64 = 1e-3,
    }
}

impl_settings!(PretrainSettings, fn check(&self) -> Result<()> { required(&self.out, "out") });

settings! {
    pub struct TrainSettings {
        /// Dataset directory written by `synth-data`.
        data: Option<PathBuf> = None,
        /// Embedder archive written by `pretrain-embedder`.
        embedders: Option<PathBuf> = None,
        /// Run directory.
        out: Option<PathBuf> = None,
        /// Checkpoint to resume from.
        resume: Option<PathBuf> = None,
        /// Generator channels per block, 4x4 first.
        channels: Vec<usize> = vec![128, 128, 64, 64],
        /// Style vector length.
        style_dim: usize = 64,
        /// Total optimizer steps.
        steps: u64 = 20_000,
        /// Pairs per step.
        batch_size: usize = 16,
        /// Adam learning rate.
        learning_rate: f64 = 1e-4,
        /// Identity loss weight.
        lambda_id: f64 = 10.0,
        /// Feature-matching loss weight.
        lambda_fm: f64 = 100.0,
        /// Reconstruction loss weight.
        lambda_rec: f64 = 100.0,
        /// Mask loss weight.
        lambda_mask: f64 = 1.0,
        /// Steps between R1 penalties.
        r1_interval: u64 = 16,
        /// R1 weight.
        r1_gamma: f64 = 1.0,
        /// Training seed.
        seed: u64 = 0,
        /// First step of the mask stage; `none` means half of `steps`.
        mask_stage_start: Option<u64> = None,
        /// Steps between checkpoints; 0 disables them.
        checkpoint_interval: u64 = 5000,
        /// Steps between sample grids; 0 disables them.
        sample_interval: u64 = 1000,
        /// First matched discriminator layer; `none` picks the default.
        n_d: Option<usize> = None,
    }
}

impl_settings!(TrainSettings, fn check(&self) -> Result<()> {
    required(&self.data, "data")?;
    required(&self.embedders, "embedders")?;
    required(&self.out, "out")
});

settings! {
    pub struct SwapSettings {
        /// Model checkpoint.
        ckpt: Option<PathBuf> = None,
        /// Source image.
        source: Option<PathBuf> = None,
        /// Target image or directory of frames.
        target: Option<PathBuf> = None,
        /// Styles file written by `invert`.
        styles: Option<PathBuf> = None,
        /// Output directory.
        out: Option<PathBuf> = None,
    }
}

impl_settings!(SwapSettings, fn check(&self) -> Result<()> {
    required(&self.ckpt, "ckpt")?;
    required(&self.source, "source")?;
    required(&self.target, "target")?;
    required(&self.out, "out")
});

settings! {
    pub struct InvertSettings {
        /// Model checkpoint.
        ckpt: Option<PathBuf> = None,
        /// Source image.
        source: Option<PathBuf> = None,
        /// `one2one` or `one2many`.
        mode: InversionMode = InversionMode::OneToOne,
        /// Target image, required by `one2one`.
        target: Option<PathBuf> = None,
        /// Directory of distractor PNGs, searched recursively.
        pool: Option<PathBuf> = None,
        /// Output styles file.
        out: Option<PathBuf> = None,
        /// Optimization steps; `none` means 200 for one2one and 50 for one2many.
        iterations: Option<usize> = None,
        /// Adam step size.
        step_size: f64 = 0.01,
        /// `w` or `w_plus`.
        space: StyleSpace = StyleSpace::WPlus,
        /// Reconstruction weight of the objective.
        lambda_rec: f64 = 100.0,
        /// Identity weight of the objective.
        lambda_id: f64 = 10.0,
        /// Distractor sampling seed.
        seed: u64 = 0,
    }
}

impl_settings!(InvertSettings, fn check(&self) -> Result<()> {
    required(&self.ckpt, "ckpt")?;
    required(&self.source, "source")?;
    required(&self.pool, "pool")?;
    required(&self.out, "out")?;
    if self.mode == InversionMode::OneToOne {
        required(&self.target, "target")?;
    }
    Ok(())
});

impl InvertSettings {
    pub fn resolved_iterations(&self) -> usize {
        self.iterations.unwrap_or(match self.mode {
            InversionMode::OneToOne => 200,
            InversionMode::OneToMany => 50,
        })
    }
}

settings! {
    pub struct EvalSettings {
        /// Model checkpoint.
        ckpt: Option<PathBuf> = None,
        /// Dataset directory written by `synth-data`.
        data: Option<PathBuf> = None,
        /// Embedder archive written by `pretrain-embedder`.
        embedders: Option<PathBuf> = None,
        /// Output report file.
        out: Option<PathBuf> = None,
        /// Cross-identity swaps to score.
        swaps: usize = 200,
        /// Held-out frames for self-reconstruction.
        recon_frames: usize = 100,
        /// Pair sampling seed.
        seed: u64 = 0,
        /// Images per forward pass.
        batch_size: usize = 50,
    }
}

impl_settings!(EvalSettings, fn check(&self) -> Result<()> {
    required(&self.ckpt, "ckpt")?;
    required(&self.data, "data")?;
    required(&self.embedders, "embedders")?;
    required(&self.out, "out")
});

/// Parses `key = value` lines; blank lines and `#` comments are skipped.
pub fn parse_lines(text: &str) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let Some((k, v)) = line.split_once('=') else {
            return Err(ConfigError::Syntax {
                line: i + 1,
                text: raw.to_string(),
            });
        };
        let key = k.trim();
        if key.is_empty() {
            return Err(ConfigError::Syntax {
                line: i + 1,
                text: raw.to_string(),
            });
        }
        out.push((key.to_string(), v.trim().to_string()));
    }
    Ok(out)
}

pub fn read_file(path: &Path) -> Result<Vec<(String, String)>> {
    let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    parse_lines(&text)
}

/// Builds a settings record from the seed environment value, file entries
/// and flag entries, later sources winning.
pub fn resolve<S: Settings>(env_seed: Option<&str>, file: &[(String, String)], flags: &[(String, String)]) -> Result<S> {
    let mut s = S::default();
    if let Some(seed) = env_seed {
        if S::KEYS.iter().any(|(k, _)| *k == "seed") {
            s.set("seed", seed).map_err(|e| match e {
                ConfigError::InvalidValue { value, reason, .. } => ConfigError::InvalidValue {
                    key: "STYLESWAP_SEED".into(),
                    value,
                    reason,
                },
                other => other,
            })?;
        }
    }
    for (k, v) in file.iter().chain(flags) {
        s.set(k, v)?;
    }
    s.check()?;
    Ok(s)
}

impl fmt::Display for InversionMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.render())
    }
}
