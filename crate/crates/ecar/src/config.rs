//! Line-oriented `key = value` configuration.
//!
//! Every key has a documented default; unknown keys are rejected; the
//! canonical dump round-trips through the parser. Each key also has a
//! same-named command-line override flag ([`ConfigFlags`]); precedence is
//! flags over file over defaults.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{EcarError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WeightMode {
    GradNorm,
    Uniform,
}

impl WeightMode {
    pub fn as_str(&self) -> &'static str {
        match self {
            WeightMode::GradNorm => "gradnorm",
            WeightMode::Uniform => "uniform",
        }
    }

    pub fn parse(s: &str) -> Result<WeightMode> {
        match s {
            "gradnorm" => Ok(WeightMode::GradNorm),
            "uniform" => Ok(WeightMode::Uniform),
            other => Err(EcarError::validation(format!(
                "weight_mode must be gradnorm|uniform, got {other}"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ContinuationMode {
    /// Each stage integrates the full local time interval from its renoised
    /// noise-chain start; stages couple only through the conditioning.
    ConditioningOnly,
    /// Each stage re-enters at `reentry_tau` from the renoised previous
    /// flow output.
    RenoiseContinuation,
}

impl ContinuationMode {
    pub fn as_str(&self) -> &'static str {
        match self {
            ContinuationMode::ConditioningOnly => "conditioning_only",
            ContinuationMode::RenoiseContinuation => "renoise_continuation",
        }
    }

    pub fn parse(s: &str) -> Result<ContinuationMode> {
        match s {
            "conditioning_only" => Ok(ContinuationMode::ConditioningOnly),
            "renoise_continuation" => Ok(ContinuationMode::RenoiseContinuation),
            other => Err(EcarError::validation(format!(
                "mode must be conditioning_only|renoise_continuation, got {other}"
            ))),
        }
    }
}

trait ConfigValue: Sized {
    fn parse_config(s: &str) -> std::result::Result<Self, String>;
    fn to_config_string(&self) -> String;
}

impl ConfigValue for usize {
    fn parse_config(s: &str) -> std::result::Result<Self, String> {
        s.parse().map_err(|e| format!("{e}"))
    }
    fn to_config_string(&self) -> String {
        self.to_string()
    }
}

impl ConfigValue for u64 {
    fn parse_config(s: &str) -> std::result::Result<Self, String> {
        s.parse().map_err(|e| format!("{e}"))
    }
    fn to_config_string(&self) -> String {
        self.to_string()
    }
}

impl ConfigValue for f32 {
    fn parse_config(s: &str) -> std::result::Result<Self, String> {
        s.parse().map_err(|e| format!("{e}"))
    }
    fn to_config_string(&self) -> String {
        format!("{self:?}")
    }
}

impl ConfigValue for f64 {
    fn parse_config(s: &str) -> std::result::Result<Self, String> {
        s.parse().map_err(|e| format!("{e}"))
    }
    fn to_config_string(&self) -> String {
        format!("{self:?}")
    }
}

impl ConfigValue for bool {
    fn parse_config(s: &str) -> std::result::Result<Self, String> {
        match s {
            "true" => Ok(true),
            "false" => Ok(false),
            other => Err(format!("expected true|false, got {other}")),
        }
    }
    fn to_config_string(&self) -> String {
        self.to_string()
    }
}

impl ConfigValue for WeightMode {
    fn parse_config(s: &str) -> std::result::Result<Self, String> {
        WeightMode::parse(s).map_err(|e| e.to_string())
    }
    fn to_config_string(&self) -> String {
        self.as_str().to_string()
    }
}

impl ConfigValue for ContinuationMode {
    fn parse_config(s: &str) -> std::result::Result<Self, String> {
        ContinuationMode::parse(s).map_err(|e| e.to_string())
    }
    fn to_config_string(&self) -> String {
        self.as_str().to_string()
    }
}

macro_rules! config_keys {
    ($(($field:ident, $key:literal, $ty:ty, $default:expr, $default_str:literal, $doc:literal)),+ $(,)?) => {
        /// Full pipeline configuration. Field order is the canonical dump order.
        #[derive(Debug, Clone, PartialEq)]
        pub struct Config {
            $(#[doc = $doc] pub $field: $ty),+
        }

        impl Default for Config {
            fn default() -> Self {
                Config { $($field: $default),+ }
            }
        }

        impl Config {
            /// (key, default, documentation) for every key.
            pub fn key_docs() -> Vec<(&'static str, &'static str, &'static str)> {
                vec![$(($key, $default_str, $doc)),+]
            }

            pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
                match key {
                    $($key => {
                        self.$field = ConfigValue::parse_config(value)
                            .map_err(|e| EcarError::validation(format!("key {key}: {e}")))?;
                        Ok(())
                    })+
                    _ => Err(EcarError::validation(format!("unknown config key: {key}"))),
                }
            }

            /// Canonical text form; parses back to an equal config.
            pub fn dump(&self) -> String {
                let mut out = String::new();
                $(writeln!(out, "{} = {}", $key, self.$field.to_config_string()).unwrap();)+
                out
            }
        }

        /// One command-line override flag per config key (same name).
        #[derive(Debug, Clone, Default, clap::Args)]
        pub struct ConfigFlags {
            $(
                #[arg(long = $key, value_name = "VALUE",
                      help = concat!($doc, " [default: ", $default_str, "]"))]
                pub $field: Option<String>,
            )+
        }

        impl ConfigFlags {
            /// Apply the present flags on top of `cfg` (flags win).
            pub fn apply(&self, cfg: &mut Config) -> Result<()> {
                $(if let Some(v) = &self.$field { cfg.set($key, v)?; })+
                Ok(())
            }
        }
    };
}

config_keys![
    // schedule
    (stages, "stages", usize, 3, "3", "number of resolution stages"),
    (final_res, "final_res", usize, 32, "32", "final (data) resolution, square"),
    (channels, "channels", usize, 3, "3", "image channels"),
    // autoregressive model
    (ar_width, "ar_width", usize, 48, "48", "AR transformer width"),
    (ar_layers, "ar_layers", usize, 1, "1", "AR transformer layers"),
    (ar_heads, "ar_heads", usize, 2, "2", "AR attention heads"),
    (token_dim, "token_dim", usize, 16, "16", "continuous token dimensionality D"),
    // velocity model
    (vel_width, "vel_width", usize, 48, "48", "velocity network width"),
    (vel_blocks, "vel_blocks", usize, 2, "2", "velocity network blocks"),
    (vel_heads, "vel_heads", usize, 1, "1", "velocity attention heads"),
    (vel_per_stage, "vel_per_stage", bool, false, "false", "per-stage velocity weight copies"),
    // trainer
    (lr, "lr", f32, 3e-4, "0.0003", "AdamW learning rate"),
    (weight_decay, "weight_decay", f32, 0.0, "0.0", "decoupled weight decay"),
    (batch_size, "batch_size", usize, 2, "2", "training batch size"),
    (train_steps, "train_steps", usize, 5000, "5000", "optimizer steps"),
    (cfg_dropout, "cfg_dropout", f64, 0.1, "0.1", "probability of replacing the class with the null class"),
    (gradnorm_alpha, "gradnorm_alpha", f64, 1.5, "1.5", "stage-weight balancing asymmetry"),
    (gradnorm_rate, "gradnorm_rate", f64, 0.1, "0.1", "stage-weight multiplicative update rate"),
    (weight_mode, "weight_mode", WeightMode, WeightMode::GradNorm, "gradnorm", "stage weighting: gradnorm|uniform"),
    (seed, "seed", u64, 0, "0", "master seed"),
    (checkpoint_every, "checkpoint_every", usize, 1000, "1000", "checkpoint interval in steps"),
    // sampler
    (sample_steps, "sample_steps", usize, 250, "250", "total integration steps across stages"),
    (cfg_scale, "cfg_scale", f32, 1.0, "1.0", "classifier-free guidance scale"),
    (renoise_blend, "renoise_blend", f32, std::f32::consts::FRAC_1_SQRT_2, "0.70710677", "upsample-renoise blend coefficient"),
    (mode, "mode", ContinuationMode, ContinuationMode::ConditioningOnly, "conditioning_only", "stage continuation: conditioning_only|renoise_continuation"),
    (reentry_tau, "reentry_tau", f64, 0.5, "0.5", "re-entry local time for renoise_continuation"),
    // data synthesis
    (num_classes, "num_classes", usize, 4, "4", "number of synthetic classes"),
    (samples_per_class, "samples_per_class", usize, 512, "512", "dataset samples per class"),
    (phase_jitter, "phase_jitter", f32, 0.0, "0.0", "pattern phase jitter fraction"),
    (pos_jitter, "pos_jitter", f32, 2.0, "2.0", "disk position jitter in pixels"),
    (hue_jitter, "hue_jitter", f32, 0.08, "0.08", "per-channel color jitter"),
];

impl Config {
    pub fn parse(text: &str) -> Result<Config> {
        let mut cfg = Config::default();
        cfg.apply_text(text)?;
        Ok(cfg)
    }

    /// Apply `key = value` lines on top of the current values.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(EcarError::validation(format!(
                    "line {}: expected `key = value`, got `{raw}`",
                    lineno + 1
                )));
            };
            self.set(key.trim(), value.trim())?;
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Config> {
        let text = std::fs::read_to_string(path).map_err(|e| EcarError::io(path, e))?;
        Config::parse(&text)
    }

    pub fn validate(&self) -> Result<()> {
        if self.lr <= 0.0 {
            return Err(EcarError::validation("lr must be positive"));
        }
        if !(0.0..1.0).contains(&self.cfg_dropout) {
            return Err(EcarError::validation("cfg_dropout must lie in [0,1)"));
        }
        if self.gradnorm_alpha < 0.0 {
            return Err(EcarError::validation("gradnorm_alpha must be >= 0"));
        }
        if !(0.0..=1.0).contains(&self.renoise_blend) {
            return Err(EcarError::validation("renoise_blend must lie in [0,1]"));
        }
        if !(0.0 < self.reentry_tau && self.reentry_tau < 1.0) {
            return Err(EcarError::validation("reentry_tau must lie in (0,1)"));
        }
        if self.cfg_scale < 0.0 {
            return Err(EcarError::validation("cfg_scale must be >= 0"));
        }
        if self.sample_steps < self.stages {
            return Err(EcarError::validation("sample_steps must be >= stages"));
        }
        if self.batch_size == 0 {
            return Err(EcarError::validation("batch_size must be positive"));
        }
        if self.num_classes == 0 {
            return Err(EcarError::validation("num_classes must be positive"));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dump_round_trips() {
        let mut cfg = Config::default();
        cfg.ar_width = 96;
        cfg.lr = 2.5e-4;
        cfg.weight_mode = WeightMode::Uniform;
        cfg.mode = ContinuationMode::RenoiseContinuation;
        let text = cfg.dump();
        let back = Config::parse(&text).unwrap();
        assert_eq!(cfg, back);
    }

    #[test]
    fn unknown_key_rejected() {
        let err = Config::parse("no_such_key = 1").unwrap_err();
        assert!(err.to_string().contains("unknown config key"));
    }

    #[test]
    fn comments_and_blanks_ignored() {
        let cfg = Config::parse("# comment\n\nstages = 2\n").unwrap();
        assert_eq!(cfg.stages, 2);
    }

    #[test]
    fn defaults_are_valid() {
        Config::default().validate().unwrap();
    }

    #[test]
    fn documented_defaults_match_actual_defaults() {
        let dump = Config::default().dump();
        for ((key, default_str, doc), line) in Config::key_docs().iter().zip(dump.lines()) {
            assert!(!doc.is_empty(), "{key} lacks documentation");
            assert_eq!(line, &format!("{key} = {default_str}"), "documented default drifted");
        }
        assert_eq!(Config::key_docs().len(), dump.lines().count());
    }

    #[test]
    fn flags_override_file_values() {
        let mut cfg = Config::parse("stages = 2\nar_width = 128\n").unwrap();
        let flags = ConfigFlags { stages: Some("4".into()), ..Default::default() };
        flags.apply(&mut cfg).unwrap();
        assert_eq!(cfg.stages, 4, "flag wins over file");
        assert_eq!(cfg.ar_width, 128, "file value survives");
    }

    #[test]
    fn bad_value_mentions_key() {
        let err = Config::parse("stages = many").unwrap_err();
        assert!(err.to_string().contains("stages"));
    }
}
