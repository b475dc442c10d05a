//! `key = value` run configuration.
//!
//! Blank lines and `#` comments are ignored. Every key has a default, and
//! the fully resolved set is echoed into the manifest.

use std::collections::BTreeMap;
use std::path::PathBuf;

use ace_core::model::ModelSpec;
use ace_core::pyramid::ImageShape;
use ace_core::trainer::TrainConfig;
use ace_core::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Config {
    pub data_dir: Option<PathBuf>,
    /// Leading training records used, in file order.
    pub train_count: usize,
    pub batch_size: usize,
    pub epochs: usize,
    /// Seed of the training noise stream.
    pub seed: u64,
    /// Seed of the parameter initialization (run 1 only).
    pub init_seed: u64,
    pub hardcoded: Vec<usize>,
    pub learning_rate: f64,
    pub half_life: f64,
    /// Write a checkpoint every this many epochs; 0 keeps only the final one.
    pub checkpoint_every: usize,
    /// Integer side reduction applied to the 32x32 images.
    pub downscale: usize,
    pub residual_hidden: usize,
    pub coarse_hidden: usize,
    pub classifier_widths: [usize; 3],
}

impl Default for Config {
    fn default() -> Self {
        let t = TrainConfig::desk();
        let m = ModelSpec::default();
        Config {
            data_dir: None,
            train_count: 1000,
            batch_size: t.batch_size,
            epochs: t.epochs,
            seed: t.seed,
            init_seed: 7,
            hardcoded: t.hardcoded,
            learning_rate: t.learning_rate,
            half_life: t.half_life,
            checkpoint_every: 10,
            downscale: 1,
            residual_hidden: m.residual_hidden,
            coarse_hidden: m.coarse_hidden,
            classifier_widths: m.classifier_widths,
        }
    }
}

fn bad(line: usize, detail: impl std::fmt::Display) -> Error {
    Error::format("config", format!("line {line}: {detail}"))
}

fn list(v: &[usize]) -> String {
    v.iter()
        .map(|x| x.to_string())
        .collect::<Vec<_>>()
        .join(",")
}

impl Config {
    pub fn parse(text: &str) -> Result<Config> {
        let mut c = Config::default();
        let mut seen = std::collections::BTreeSet::new();
        for (k, raw) in text.lines().enumerate() {
            let n = k + 1;
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| bad(n, format!("expected key = value, got {line:?}")))?;
            let (key, value) = (key.trim(), value.trim());
            if !seen.insert(key.to_string()) {
                return Err(bad(n, format!("duplicate key {key:?}")));
            }
            let int = |v: &str| {
                v.parse::<usize>()
                    .map_err(|e| bad(n, format!("{key}: {e}")))
            };
            let real = |v: &str| v.parse::<f64>().map_err(|e| bad(n, format!("{key}: {e}")));
            let ints = |v: &str| -> Result<Vec<usize>> {
                if v.is_empty() {
                    return Ok(Vec::new());
                }
                v.split(',').map(|s| int(s.trim())).collect()
            };
            match key {
                "data_dir" => c.data_dir = Some(PathBuf::from(value)),
                "train_count" => c.train_count = int(value)?,
                "batch_size" => c.batch_size = int(value)?,
                "epochs" => c.epochs = int(value)?,
                "seed" => c.seed = int(value)? as u64,
                "init_seed" => c.init_seed = int(value)? as u64,
                "hardcoded" => c.hardcoded = ints(value)?,
                "learning_rate" => c.learning_rate = real(value)?,
                "half_life" => c.half_life = real(value)?,
                "checkpoint_every" => c.checkpoint_every = int(value)?,
                "downscale" => c.downscale = int(value)?,
                "residual_hidden" => c.residual_hidden = int(value)?,
                "coarse_hidden" => c.coarse_hidden = int(value)?,
                "classifier_widths" => {
                    c.classifier_widths = ints(value)?
                        .try_into()
                        .map_err(|_| bad(n, "classifier_widths needs exactly 3 entries"))?
                }
                other => return Err(bad(n, format!("unknown key {other:?}"))),
            }
        }
        if c.downscale == 0 || 32 % c.downscale != 0 || 32 / c.downscale < 2 {
            return Err(Error::format(
                "config",
                format!(
                    "downscale {} must divide 32 and leave at least 2 pixels",
                    c.downscale
                ),
            ));
        }
        Ok(c)
    }

    pub fn train_config(&self, run: u32) -> TrainConfig {
        TrainConfig {
            batch_size: self.batch_size,
            epochs: self.epochs,
            seed: self.seed,
            hardcoded: self.hardcoded.clone(),
            run,
            learning_rate: self.learning_rate,
            half_life: self.half_life,
        }
    }

    pub fn model_spec(&self) -> ModelSpec {
        ModelSpec {
            image: ImageShape {
                channels: 3,
                side: 32 / self.downscale,
            },
            residual_hidden: self.residual_hidden,
            coarse_hidden: self.coarse_hidden,
            classifier_widths: self.classifier_widths,
            ..ModelSpec::default()
        }
    }

    /// Resolved values as text. The data directory is left out: the data
    /// enters the manifest through its content hash instead.
    pub fn echo(&self) -> BTreeMap<String, String> {
        [
            ("train_count", self.train_count.to_string()),
            ("batch_size", self.batch_size.to_string()),
            ("epochs", self.epochs.to_string()),
            ("seed", self.seed.to_string()),
            ("init_seed", self.init_seed.to_string()),
            ("hardcoded", list(&self.hardcoded)),
            ("learning_rate", format!("{:e}", self.learning_rate)),
            ("half_life", format!("{:e}", self.half_life)),
            ("checkpoint_every", self.checkpoint_every.to_string()),
            ("downscale", self.downscale.to_string()),
            ("residual_hidden", self.residual_hidden.to_string()),
            ("coarse_hidden", self.coarse_hidden.to_string()),
            ("classifier_widths", list(&self.classifier_widths)),
        ]
        .into_iter()
        .map(|(k, v)| (k.to_string(), v))
        .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_is_the_desk_profile() {
        let c = Config::parse("# nothing\n\n").unwrap();
        assert_eq!(c, Config::default());
        assert_eq!(
            (c.train_count, c.batch_size, c.epochs, c.seed),
            (1000, 100, 30, 7)
        );
        assert_eq!(c.hardcoded, vec![8]);
        assert_eq!(c.model_spec(), ModelSpec::default());
    }

    #[test]
    fn values_and_comments() {
        let c = Config::parse(
            "epochs = 3  # short\nhardcoded = 8, 1020,2016\nclassifier_widths=4,4,8\ndownscale = 4\n",
        )
        .unwrap();
        assert_eq!(c.epochs, 3);
        assert_eq!(c.hardcoded, vec![8, 1020, 2016]);
        assert_eq!(c.model_spec().image.side, 8);
        assert_eq!(c.echo()["classifier_widths"], "4,4,8");
        assert!(Config::parse("hardcoded =").unwrap().hardcoded.is_empty());
    }

    #[test]
    fn rejections() {
        for text in [
            "epochs",
            "epochs = x",
            "epochs = 1\nepochs = 2",
            "colour = red",
            "classifier_widths = 1,2",
            "downscale = 3",
            "downscale = 32",
        ] {
            assert!(Config::parse(text).is_err(), "{text:?}");
        }
    }
}
