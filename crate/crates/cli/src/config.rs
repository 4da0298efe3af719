//! TOML run configuration shared by `train` and `gradcheck`.
//!
//! ```toml
//! [model]
//! embed_dim = 32
//! [training]
//! steps = 500
//! [dataset]
//! seed = 3
//! ```
//!
//! Every key is optional. Dataset image dimensions follow `[model]`.

use std::fs;
use std::path::Path;

use anyhow::{anyhow, Context, Result};
use gablab_core::dataset::SyntheticLocalityDataset;
use gablab_core::train::TrainConfig;
use gablab_core::vit::ViTConfig;
use serde::Deserialize;

#[derive(Clone, Debug, PartialEq, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetSection {
    pub seed: u64,
    pub blob_radius: f32,
    pub samples_per_epoch: usize,
}

impl Default for DatasetSection {
    fn default() -> Self {
        let d = SyntheticLocalityDataset::default();
        Self { seed: d.seed, blob_radius: d.blob_radius, samples_per_epoch: d.samples_per_epoch }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub model: ViTConfig,
    pub training: TrainConfig,
    pub dataset: DatasetSection,
}

impl RunConfig {
    pub fn dataset(&self) -> SyntheticLocalityDataset {
        SyntheticLocalityDataset {
            seed: self.dataset.seed,
            height: self.model.image_height,
            width: self.model.image_width,
            channels: self.model.channels,
            num_classes: self.model.num_classes,
            blob_radius: self.dataset.blob_radius,
            samples_per_epoch: self.dataset.samples_per_epoch,
        }
    }

    /// Parses and validates `text`; errors carry the offending line when
    /// the key appears in the file.
    pub fn parse(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| anyhow!("invalid config: {e}"))?;
        let checks: [(&str, Result<(), gablab_core::Error>); 3] = [
            ("model", cfg.model.validate()),
            ("training", cfg.training.validate()),
            ("dataset", cfg.dataset().validate()),
        ];
        for (section, outcome) in checks {
            if let Err(e) = outcome {
                let msg = e.to_string();
                return Err(match locate(text, section, &msg) {
                    Some((line, key)) => anyhow!("invalid config: line {line}, [{section}] {key}: {msg}"),
                    None => anyhow!("invalid config: [{section}]: {msg}"),
                });
            }
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).with_context(|| format!("cannot read config {}", path.display()))?;
        Self::parse(&text).with_context(|| format!("in {}", path.display()))
    }
}

/// 1-based line of the first key in `[section]` named in `message`.
fn locate(text: &str, section: &str, message: &str) -> Option<(usize, String)> {
    let mut current = String::new();
    let mut best: Option<(usize, usize, String)> = None;
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if let Some(name) = line.strip_prefix('[').and_then(|l| l.strip_suffix(']')) {
            current = name.trim().to_string();
            continue;
        }
        if current != section {
            continue;
        }
        let Some((key, _)) = line.split_once('=') else { continue };
        let key = key.trim();
        let found = message.match_indices(key).find(|(at, _)| {
            let before = message[..*at].chars().next_back();
            let after = message[at + key.len()..].chars().next();
            let word = |c: Option<char>| c.is_none_or(|c| !(c.is_alphanumeric() || c == '_'));
            word(before) && word(after)
        });
        if let Some((at, _)) = found {
            if best.as_ref().is_none_or(|b| at < b.0) {
                best = Some((at, i + 1, key.to_string()));
            }
        }
    }
    best.map(|(_, line, key)| (line, key))
}
