//! Experiment configuration files.
//!
//! One `key = value` pair per line; blank lines and text after `#` are
//! ignored. Keys are namespaced by section:
//!
//! | key | value |
//! |-----|-------|
//! | `vit.image_size`, `vit.patch_size`, `vit.embed_dim`, `vit.depth`, `vit.heads`, `vit.mlp_ratio` | integer |
//! | `vit.decoder_channels` | comma-separated integers |
//! | `train.epochs`, `train.batch_size`, `train.seed` | integer |
//! | `train.lr_max`, `train.lr_min`, `train.weight_decay`, `train.adam_beta1`, `train.adam_beta2`, `train.adam_eps` | real |
//! | `train.deterministic` | `true` / `false` |
//! | `loss.lambda`, `loss.ce_epsilon` | real |
//! | `loss.boundary_mode` | `signed` / `absolute` |
//! | `loss.schedule` | `constant` or `ramp:<epochs>` |
//! | `augment.flip_prob`, `augment.rotation_range_deg`, `augment.gamma_min`, `augment.gamma_max`, `augment.elastic_prob`, `augment.elastic_alpha`, `augment.elastic_sigma`, `augment.elastic_reference_size`, `augment.clahe_clip`, `augment.norm_mean`, `augment.norm_std` | real (`inf` allowed for the clip) |
//! | `augment.clahe_tiles` | integer |
//! | `augment.norm_auto` | `true` / `false` |
//!
//! Unknown keys and malformed values are errors that name the line.

use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::imgproc::AugmentConfig;
use crate::train::{LambdaSchedule, LossConfig, TrainConfig};
use crate::vit::ViTConfig;

#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentConfig {
    pub vit: ViTConfig,
    pub train: TrainConfig,
    pub loss: LossConfig,
    pub augment: AugmentConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            vit: ViTConfig::base16(),
            train: TrainConfig::default(),
            loss: LossConfig::default(),
            augment: AugmentConfig::default(),
        }
    }
}

fn parse<T: FromStr>(line: usize, key: &str, value: &str) -> Result<T> {
    value.parse().map_err(|_| Error::Config {
        line,
        key: key.to_string(),
        msg: format!("cannot parse `{value}`"),
    })
}

fn parse_schedule(line: usize, key: &str, value: &str) -> Result<LambdaSchedule> {
    if value == "constant" {
        return Ok(LambdaSchedule::Constant);
    }
    match value.strip_prefix("ramp:") {
        Some(n) => Ok(LambdaSchedule::Ramp { epochs: parse(line, key, n)? }),
        None => Err(Error::Config {
            line,
            key: key.to_string(),
            msg: format!("expected `constant` or `ramp:<epochs>`, got `{value}`"),
        }),
    }
}

impl ExperimentConfig {
    /// Applies one assignment; `line` is only used for error messages.
    pub fn set(&mut self, line: usize, key: &str, value: &str) -> Result<()> {
        let v = value;
        match key {
            "vit.image_size" => self.vit.image_size = parse(line, key, v)?,
            "vit.patch_size" => self.vit.patch_size = parse(line, key, v)?,
            "vit.embed_dim" => self.vit.embed_dim = parse(line, key, v)?,
            "vit.depth" => self.vit.depth = parse(line, key, v)?,
            "vit.heads" => self.vit.heads = parse(line, key, v)?,
            "vit.mlp_ratio" => self.vit.mlp_ratio = parse(line, key, v)?,
            "vit.decoder_channels" => {
                self.vit.decoder_channels = v
                    .split(',')
                    .filter(|s| !s.trim().is_empty())
                    .map(|s| parse(line, key, s.trim()))
                    .collect::<Result<_>>()?
            }
            "train.epochs" => self.train.epochs = parse(line, key, v)?,
            "train.batch_size" => self.train.batch_size = parse(line, key, v)?,
            "train.seed" => self.train.seed = parse(line, key, v)?,
            "train.lr_max" => self.train.lr_max = parse(line, key, v)?,
            "train.lr_min" => self.train.lr_min = parse(line, key, v)?,
            "train.weight_decay" => self.train.weight_decay = parse(line, key, v)?,
            "train.adam_beta1" => self.train.adam_beta1 = parse(line, key, v)?,
            "train.adam_beta2" => self.train.adam_beta2 = parse(line, key, v)?,
            "train.adam_eps" => self.train.adam_eps = parse(line, key, v)?,
            "train.deterministic" => self.train.deterministic = parse(line, key, v)?,
            "loss.lambda" => self.loss.lambda = parse(line, key, v)?,
            "loss.ce_epsilon" => self.loss.ce_epsilon = parse(line, key, v)?,
            "loss.boundary_mode" => self.loss.boundary_mode = parse(line, key, v)?,
            "loss.schedule" => self.loss.schedule = parse_schedule(line, key, v)?,
            "augment.flip_prob" => self.augment.flip_prob = parse(line, key, v)?,
            "augment.rotation_range_deg" => self.augment.rotation_range_deg = parse(line, key, v)?,
            "augment.gamma_min" => self.augment.gamma_range.0 = parse(line, key, v)?,
            "augment.gamma_max" => self.augment.gamma_range.1 = parse(line, key, v)?,
            "augment.elastic_prob" => self.augment.elastic_prob = parse(line, key, v)?,
            "augment.elastic_alpha" => self.augment.elastic_alpha = parse(line, key, v)?,
            "augment.elastic_sigma" => self.augment.elastic_sigma = parse(line, key, v)?,
            "augment.elastic_reference_size" => self.augment.elastic_reference_size = parse(line, key, v)?,
            "augment.clahe_clip" => self.augment.clahe_clip = parse(line, key, v)?,
            "augment.clahe_tiles" => self.augment.clahe_tiles = parse(line, key, v)?,
            "augment.norm_mean" => self.augment.norm_mean = parse(line, key, v)?,
            "augment.norm_std" => self.augment.norm_std = parse(line, key, v)?,
            "augment.norm_auto" => self.augment.norm_auto = parse(line, key, v)?,
            _ => {
                return Err(Error::Config { line, key: key.to_string(), msg: "unknown key".into() });
            }
        }
        Ok(())
    }

    /// Parses a config on top of the defaults.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((k, v)) = line.split_once('=') else {
                return Err(Error::Config { line: i + 1, key: line.to_string(), msg: "expected `key = value`".into() });
            };
            cfg.set(i + 1, k.trim(), v.trim())?;
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    /// Cross-field validation of every section.
    pub fn validate(&self) -> Result<()> {
        self.vit.validate()?;
        self.train.validate()?;
        self.loss.validate()?;
        self.augment.validate()
    }

    /// Canonical text form; parsing it reproduces `self` exactly.
    pub fn render(&self) -> String {
        let (v, t, l, a) = (&self.vit, &self.train, &self.loss, &self.augment);
        let channels: Vec<String> = v.decoder_channels.iter().map(|c| c.to_string()).collect();
        let schedule = match l.schedule {
            LambdaSchedule::Constant => "constant".to_string(),
            LambdaSchedule::Ramp { epochs } => format!("ramp:{epochs}"),
        };
        let mut out = String::new();
        let mut put = |k: &str, val: String| {
            let _ = writeln!(out, "{k} = {val}");
        };
        put("vit.image_size", v.image_size.to_string());
        put("vit.patch_size", v.patch_size.to_string());
        put("vit.embed_dim", v.embed_dim.to_string());
        put("vit.depth", v.depth.to_string());
        put("vit.heads", v.heads.to_string());
        put("vit.mlp_ratio", v.mlp_ratio.to_string());
        put("vit.decoder_channels", channels.join(","));
        put("train.epochs", t.epochs.to_string());
        put("train.batch_size", t.batch_size.to_string());
        put("train.seed", t.seed.to_string());
        put("train.lr_max", t.lr_max.to_string());
        put("train.lr_min", t.lr_min.to_string());
        put("train.weight_decay", t.weight_decay.to_string());
        put("train.adam_beta1", t.adam_beta1.to_string());
        put("train.adam_beta2", t.adam_beta2.to_string());
        put("train.adam_eps", t.adam_eps.to_string());
        put("train.deterministic", t.deterministic.to_string());
        put("loss.lambda", l.lambda.to_string());
        put("loss.ce_epsilon", l.ce_epsilon.to_string());
        put("loss.boundary_mode", l.boundary_mode.to_string());
        put("loss.schedule", schedule);
        put("augment.flip_prob", a.flip_prob.to_string());
        put("augment.rotation_range_deg", a.rotation_range_deg.to_string());
        put("augment.gamma_min", a.gamma_range.0.to_string());
        put("augment.gamma_max", a.gamma_range.1.to_string());
        put("augment.elastic_prob", a.elastic_prob.to_string());
        put("augment.elastic_alpha", a.elastic_alpha.to_string());
        put("augment.elastic_sigma", a.elastic_sigma.to_string());
        put("augment.elastic_reference_size", a.elastic_reference_size.to_string());
        put("augment.clahe_clip", a.clahe_clip.to_string());
        put("augment.clahe_tiles", a.clahe_tiles.to_string());
        put("augment.norm_mean", a.norm_mean.to_string());
        put("augment.norm_std", a.norm_std.to_string());
        put("augment.norm_auto", a.norm_auto.to_string());
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sdt::BoundaryLossMode;
    use proptest::prelude::*;

    #[test]
    fn defaults_round_trip() {
        let c = ExperimentConfig::default();
        assert_eq!(ExperimentConfig::parse(&c.render()).unwrap(), c);
        c.validate().unwrap();
    }

    #[test]
    fn comments_and_overrides() {
        let text = "# tiny run\nvit.image_size = 64\nvit.decoder_channels = 8, 4,2 # trailing\n\nloss.boundary_mode=absolute\nloss.schedule = ramp:10\naugment.clahe_clip = inf\n";
        let c = ExperimentConfig::parse(text).unwrap();
        assert_eq!(c.vit.image_size, 64);
        assert_eq!(c.vit.decoder_channels, vec![8, 4, 2]);
        assert_eq!(c.loss.boundary_mode, BoundaryLossMode::Absolute);
        assert_eq!(c.loss.schedule, LambdaSchedule::Ramp { epochs: 10 });
        assert!(c.augment.clahe_clip.is_infinite());
    }

    #[test]
    fn unknown_key_names_key_and_line() {
        let err = ExperimentConfig::parse("vit.depth = 2\n\ntrain.learning_rate = 3\n").unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("line 3") && msg.contains("train.learning_rate"), "{msg}");
    }

    #[test]
    fn bad_value_rejected() {
        assert!(ExperimentConfig::parse("train.epochs = many").is_err());
        assert!(ExperimentConfig::parse("loss.schedule = sometimes").is_err());
        assert!(ExperimentConfig::parse("just words").is_err());
    }

    proptest! {
        #[test]
        fn render_parse_round_trip(lambda in 0.0f64..10.0, lr in 1e-6f64..1e-2, seed in any::<u64>(), clip in 0.5f64..8.0, ramp in proptest::option::of(1usize..50)) {
            let mut c = ExperimentConfig::default();
            c.loss.lambda = lambda;
            c.train.lr_max = lr;
            c.train.seed = seed;
            c.augment.clahe_clip = clip;
            if let Some(e) = ramp {
                c.loss.schedule = LambdaSchedule::Ramp { epochs: e };
            }
            prop_assert_eq!(ExperimentConfig::parse(&c.render()).unwrap(), c);
        }
    }
}
