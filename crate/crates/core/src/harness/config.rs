//! Flat `key = value` experiment configuration. Unknown keys are hard
//! errors; every run embeds the fully resolved config and its hash in the
//! report so runs are comparable.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::frames::DisambiguationStrategy;
use crate::net::{ModelConfig, OffsetNorm};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("line {line}: expected `key = value`, got {text:?}")]
    Syntax { line: usize, text: String },
    #[error("line {line}: unknown key {key:?}")]
    UnknownKey { line: usize, key: String },
    #[error("key {key}: cannot parse {value:?}: {reason}")]
    BadValue {
        key: String,
        value: String,
        reason: String,
    },
    #[error("invalid config: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Protocol {
    Zz,
    Zso3,
    So3so3,
}

impl Protocol {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "zz" => Some(Self::Zz),
            "zso3" => Some(Self::Zso3),
            "so3so3" => Some(Self::So3so3),
            _ => None,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Self::Zz => "zz",
            Self::Zso3 => "zso3",
            Self::So3so3 => "so3so3",
        }
    }

    /// Rotation mode applied to training samples.
    pub fn train_mode(&self) -> crate::linalg3::RotationMode {
        match self {
            Self::Zz | Self::Zso3 => crate::linalg3::RotationMode::ZAxis,
            Self::So3so3 => crate::linalg3::RotationMode::FullSo3,
        }
    }

    /// Rotation mode applied to evaluation samples.
    pub fn eval_mode(&self) -> crate::linalg3::RotationMode {
        match self {
            Self::Zz => crate::linalg3::RotationMode::ZAxis,
            Self::Zso3 | Self::So3so3 => crate::linalg3::RotationMode::FullSo3,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Sampling {
    Fps,
    Rs,
}

/// Full experiment configuration with reference defaults.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub seed: u64,
    pub data_dir: String,
    pub out_dir: String,
    pub protocol: Protocol,
    pub epochs: usize,
    pub batch_train: usize,
    pub batch_eval: usize,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub lambda_reg: f64,
    pub target_acc: f64,
    pub n_points: usize,
    pub raw_points: usize,
    pub k_lrf: usize,
    pub k_group: usize,
    pub sa1_size: usize,
    pub sa2_size: usize,
    pub width1: usize,
    pub width2: usize,
    pub attn_dim: usize,
    pub ait_blocks: usize,
    pub t_alpha: f64,
    pub t: f64,
    pub proj_dim: usize,
    pub classes: usize,
    pub train_per_class: usize,
    pub test_per_class: usize,
    pub sampling: Sampling,
    pub disambiguation: DisambiguationStrategy,
    pub disambiguate: bool,
    pub offset_norm: OffsetNorm,
    pub use_e_sa: bool,
    pub use_e_ca: bool,
    pub sa_on_global: bool,
    pub sequential_attn: bool,
    pub reg_local: bool,
    pub reg_global: bool,
    pub augment: bool,
    pub translate_range: f64,
    pub scale_low: f64,
    pub scale_high: f64,
    pub noise_sigma: f64,
    pub noise_outliers: usize,
    pub parallel: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            seed: 7,
            data_dir: "data".into(),
            out_dir: "out".into(),
            protocol: Protocol::Zz,
            epochs: 60,
            batch_train: 32,
            batch_eval: 16,
            lr: 1e-2,
            momentum: 0.9,
            weight_decay: 1e-4,
            lambda_reg: 1.0,
            target_acc: 0.0,
            n_points: 1024,
            raw_points: 2048,
            k_lrf: 32,
            k_group: 32,
            sa1_size: 512,
            sa2_size: 128,
            width1: 128,
            width2: 256,
            attn_dim: 64,
            ait_blocks: 2,
            t_alpha: 15.0,
            t: 0.017,
            proj_dim: 64,
            classes: 8,
            train_per_class: 300,
            test_per_class: 60,
            sampling: Sampling::Fps,
            disambiguation: DisambiguationStrategy::DReverseSmallest,
            disambiguate: true,
            offset_norm: OffsetNorm::Pct,
            use_e_sa: true,
            use_e_ca: true,
            sa_on_global: false,
            sequential_attn: false,
            reg_local: true,
            reg_global: true,
            augment: true,
            translate_range: 0.2,
            scale_low: 0.67,
            scale_high: 1.5,
            noise_sigma: 0.0,
            noise_outliers: 0,
            parallel: false,
        }
    }
}

macro_rules! set_keys {
    ($self:ident, $key:ident, $value:ident, $line:ident; $($name:literal => $field:ident : $kind:tt),+ $(,)?) => {
        match $key {
            $($name => set_keys!(@assign $self, $field, $key, $value, $kind),)+
            _ => {
                return Err(ConfigError::UnknownKey {
                    line: $line,
                    key: $key.to_string(),
                })
            }
        }
    };
    (@assign $self:ident, $field:ident, $key:ident, $value:ident, parse) => {
        $self.$field = $value.parse().map_err(|e| ConfigError::BadValue {
            key: $key.into(),
            value: $value.into(),
            reason: format!("{e}"),
        })?
    };
    (@assign $self:ident, $field:ident, $key:ident, $value:ident, string) => {
        $self.$field = $value.to_string()
    };
    (@assign $self:ident, $field:ident, $key:ident, $value:ident, $parser:path) => {
        $self.$field = $parser($value).ok_or_else(|| ConfigError::BadValue {
            key: $key.into(),
            value: $value.into(),
            reason: "unrecognized variant".into(),
        })?
    };
}

impl TrainConfig {
    pub fn from_file(path: &Path) -> Result<Self, ConfigError> {
        Self::from_text(&std::fs::read_to_string(path)?)
    }

    pub fn from_text(text: &str) -> Result<Self, ConfigError> {
        let mut config = Self::default();
        for (lineno, raw) in text.lines().enumerate() {
            let line = lineno + 1;
            let body = raw.split('#').next().unwrap_or("").trim();
            if body.is_empty() {
                continue;
            }
            let (key, value) = body.split_once('=').ok_or_else(|| ConfigError::Syntax {
                line,
                text: body.to_string(),
            })?;
            config.set(key.trim(), value.trim(), line)?;
        }
        config.validate()?;
        Ok(config)
    }

    pub fn set(&mut self, key: &str, value: &str, line: usize) -> Result<(), ConfigError> {
        fn parse_sampling(s: &str) -> Option<Sampling> {
            match s {
                "fps" => Some(Sampling::Fps),
                "rs" => Some(Sampling::Rs),
                _ => None,
            }
        }
        set_keys!(self, key, value, line;
            "seed" => seed: parse,
            "data_dir" => data_dir: string,
            "out_dir" => out_dir: string,
            "protocol" => protocol: Protocol::parse,
            "epochs" => epochs: parse,
            "batch_train" => batch_train: parse,
            "batch_eval" => batch_eval: parse,
            "lr" => lr: parse,
            "momentum" => momentum: parse,
            "weight_decay" => weight_decay: parse,
            "lambda_reg" => lambda_reg: parse,
            "target_acc" => target_acc: parse,
            "n_points" => n_points: parse,
            "raw_points" => raw_points: parse,
            "k_lrf" => k_lrf: parse,
            "k_group" => k_group: parse,
            "sa1_size" => sa1_size: parse,
            "sa2_size" => sa2_size: parse,
            "width1" => width1: parse,
            "width2" => width2: parse,
            "attn_dim" => attn_dim: parse,
            "ait_blocks" => ait_blocks: parse,
            "t_alpha" => t_alpha: parse,
            "t" => t: parse,
            "proj_dim" => proj_dim: parse,
            "classes" => classes: parse,
            "train_per_class" => train_per_class: parse,
            "test_per_class" => test_per_class: parse,
            "sampling" => sampling: parse_sampling,
            "disambiguation" => disambiguation: DisambiguationStrategy::parse,
            "disambiguate" => disambiguate: parse,
            "offset_norm" => offset_norm: OffsetNorm::parse,
            "use_e_sa" => use_e_sa: parse,
            "use_e_ca" => use_e_ca: parse,
            "sa_on_global" => sa_on_global: parse,
            "sequential_attn" => sequential_attn: parse,
            "reg_local" => reg_local: parse,
            "reg_global" => reg_global: parse,
            "augment" => augment: parse,
            "translate_range" => translate_range: parse,
            "scale_low" => scale_low: parse,
            "scale_high" => scale_high: parse,
            "noise_sigma" => noise_sigma: parse,
            "noise_outliers" => noise_outliers: parse,
            "parallel" => parallel: parse,
        );
        Ok(())
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let err = |m: String| Err(ConfigError::Invalid(m));
        if self.attn_dim == 0 || self.attn_dim % 2 != 0 {
            return err(format!("attn_dim must be positive and even, got {}", self.attn_dim));
        }
        if !(self.sa2_size <= self.sa1_size && self.sa1_size <= self.n_points) {
            return err(format!(
                "sizes must satisfy sa2 <= sa1 <= n_points, got {} / {} / {}",
                self.sa2_size, self.sa1_size, self.n_points
            ));
        }
        if self.n_points > self.raw_points {
            return err(format!(
                "n_points {} exceeds raw_points {}",
                self.n_points, self.raw_points
            ));
        }
        if self.k_lrf + 1 > self.n_points || self.k_group > self.sa1_size {
            return err("neighborhood sizes exceed available points".into());
        }
        if self.classes == 0 || self.classes > crate::cloud::FAMILY_COUNT {
            return err(format!(
                "classes must be in 1..={}, got {}",
                crate::cloud::FAMILY_COUNT,
                self.classes
            ));
        }
        for (name, v) in [
            ("lr", self.lr),
            ("t_alpha", self.t_alpha),
            ("t", self.t),
            ("scale_low", self.scale_low),
            ("scale_high", self.scale_high),
        ] {
            if v <= 0.0 {
                return err(format!("{name} must be positive, got {v}"));
            }
        }
        if self.scale_low > self.scale_high {
            return err("scale_low must not exceed scale_high".into());
        }
        for (name, v) in [
            ("epochs", self.epochs),
            ("batch_train", self.batch_train),
            ("batch_eval", self.batch_eval),
            ("train_per_class", self.train_per_class),
            ("test_per_class", self.test_per_class),
            ("ait_blocks", self.ait_blocks),
            ("proj_dim", self.proj_dim),
            ("width1", self.width1),
            ("width2", self.width2),
        ] {
            if v == 0 {
                return err(format!("{name} must be positive"));
            }
        }
        Ok(())
    }

    /// The architecture part of the config.
    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            n_points: self.n_points,
            sa1_size: self.sa1_size,
            sa2_size: self.sa2_size,
            width1: self.width1,
            width2: self.width2,
            k_group: self.k_group,
            k_lrf: self.k_lrf,
            attn_dim: self.attn_dim,
            ait_blocks: self.ait_blocks,
            t_alpha: self.t_alpha,
            temperature: self.t,
            proj_dim: self.proj_dim,
            n_classes: self.classes,
            offset_norm: self.offset_norm,
            use_e_sa: self.use_e_sa,
            use_e_ca: self.use_e_ca,
            sa_on_global: self.sa_on_global,
            sequential_attn: self.sequential_attn,
        }
    }

    /// Canonical resolved `key = value` map used for hashing and reports.
    pub fn resolved(&self) -> BTreeMap<String, String> {
        let mut m = BTreeMap::new();
        let json = serde_json::to_value(self).expect("config serializes");
        if let serde_json::Value::Object(obj) = json {
            for (k, v) in obj {
                let text = match v {
                    serde_json::Value::String(s) => s,
                    other => other.to_string(),
                };
                m.insert(k, text);
            }
        }
        m
    }

    pub fn config_hash(&self) -> String {
        let mut text = String::new();
        for (k, v) in self.resolved() {
            text.push_str(&k);
            text.push('=');
            text.push_str(&v);
            text.push('\n');
        }
        format!("{:016x}", fnv1a64(text.as_bytes()))
    }
}

fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut hash: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        hash ^= b as u64;
        hash = hash.wrapping_mul(0x0000_0100_0000_01b3);
    }
    hash
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_parse_and_validate() {
        let c = TrainConfig::from_text("").unwrap();
        assert_eq!(c, TrainConfig::default());
        assert_eq!(c.n_points, 1024);
        assert_eq!(c.batch_train, 32);
        assert_eq!(c.batch_eval, 16);
        assert_eq!(c.t_alpha, 15.0);
        assert_eq!(c.t, 0.017);
        assert_eq!(c.translate_range, 0.2);
        assert_eq!(c.scale_low, 0.67);
        assert_eq!(c.scale_high, 1.5);
        assert_eq!(c.momentum, 0.9);
        assert_eq!(c.weight_decay, 1e-4);
    }

    #[test]
    fn parses_overrides_and_comments() {
        let text = "\n# comment\nseed = 42\nprotocol = zso3  # inline\nepochs = 10\nsampling = rs\ndisambiguation = c\n";
        let c = TrainConfig::from_text(text).unwrap();
        assert_eq!(c.seed, 42);
        assert_eq!(c.protocol, Protocol::Zso3);
        assert_eq!(c.epochs, 10);
        assert_eq!(c.sampling, Sampling::Rs);
        assert_eq!(
            c.disambiguation,
            DisambiguationStrategy::CPermuteSmallestTwo
        );
    }

    #[test]
    fn unknown_keys_are_hard_errors() {
        let err = TrainConfig::from_text("no_such_key = 1\n").unwrap_err();
        assert!(matches!(err, ConfigError::UnknownKey { line: 1, .. }));
    }

    #[test]
    fn bad_values_and_invalid_combinations_error() {
        assert!(matches!(
            TrainConfig::from_text("epochs = banana\n"),
            Err(ConfigError::BadValue { .. })
        ));
        assert!(matches!(
            TrainConfig::from_text("attn_dim = 63\n"),
            Err(ConfigError::Invalid(_))
        ));
        assert!(matches!(
            TrainConfig::from_text("sa1_size = 2048\n"),
            Err(ConfigError::Invalid(_))
        ));
    }

    #[test]
    fn hash_tracks_content() {
        let a = TrainConfig::from_text("seed = 1\n").unwrap();
        let b = TrainConfig::from_text("seed = 1\n").unwrap();
        let c = TrainConfig::from_text("seed = 2\n").unwrap();
        assert_eq!(a.config_hash(), b.config_hash());
        assert_ne!(a.config_hash(), c.config_hash());
        // Resolved map embeds every field.
        assert_eq!(a.resolved().len(), 41);
    }
}
