//! Run configuration file: TOML sections `[model] [schedule] [train] [data]
//! [sample]` behind a versioned header line.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::DataConfig;
use crate::denoiser::DenoiserConfig;
use crate::error::{Error, Result};
use crate::sampler::SampleConfig;
use crate::schedule::Schedule;
use crate::trainer::TrainConfig;

pub const CONFIG_HEADER: &str = "# vqlcmd-config 1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub model: DenoiserConfig,
    #[serde(default)]
    pub schedule: Schedule,
    #[serde(default)]
    pub train: TrainConfig,
    pub data: DataConfig,
    #[serde(default)]
    pub sample: SampleConfig,
}

impl RunConfig {
    /// Model sized to `data`, with the data's class count.
    pub fn for_data(model_preset: &str, data: DataConfig, embed_dim: usize) -> Result<Self> {
        let mut model = DenoiserConfig::preset(model_preset, data.seq_len, data.categories, embed_dim)?;
        model.num_classes = data.num_classes();
        let cfg = RunConfig {
            model,
            schedule: Schedule::default(),
            train: TrainConfig::default(),
            data,
            sample: SampleConfig::default(),
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn desk() -> Self {
        Self::for_data("desk", DataConfig::desk(), 16).expect("desk config is valid")
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.schedule.validate()?;
        self.train.validate()?;
        self.sample.validate()?;
        let (m, d) = (&self.model, &self.data);
        if m.seq_len != d.seq_len || m.categories != d.categories {
            return Err(Error::Config(format!(
                "model expects M={} K={}, data provides M={} K={}",
                m.seq_len, m.categories, d.seq_len, d.categories
            )));
        }
        if d.num_classes() > 0 && m.num_classes != d.num_classes() {
            return Err(Error::Config(format!(
                "data has {} classes, model has {}",
                d.num_classes(),
                m.num_classes
            )));
        }
        Ok(())
    }

    pub fn to_text(&self) -> String {
        let body = toml::to_string(self).expect("config serializes");
        format!("{CONFIG_HEADER}\n{body}")
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        match lines.next() {
            Some(first) if first.trim() == CONFIG_HEADER => {}
            Some(first) => {
                return Err(Error::Format(format!(
                    "config must start with {CONFIG_HEADER:?}, found {first:?}"
                )))
            }
            None => return Err(Error::Format("empty config".into())),
        }
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_text(&std::fs::read_to_string(path)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        Ok(std::fs::write(path, self.to_text())?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn text_round_trip() {
        let mut cfg = RunConfig::desk();
        cfg.schedule = Schedule::with_shift(-0.75);
        cfg.train.lr = 3e-4;
        let text = cfg.to_text();
        assert!(text.starts_with(CONFIG_HEADER));
        assert_eq!(RunConfig::from_text(&text).unwrap(), cfg);
    }

    #[test]
    fn header_and_fields_are_checked() {
        let text = RunConfig::desk().to_text();
        let body = text.split_once('\n').unwrap().1;
        assert!(matches!(RunConfig::from_text(body), Err(Error::Format(_))));
        let extra = format!("{text}\n[extra]\nx = 1\n");
        assert!(matches!(RunConfig::from_text(&extra), Err(Error::Config(_))));
        let mismatched = text.replacen("seq_len = 16", "seq_len = 9", 1);
        assert!(RunConfig::from_text(&mismatched).is_err());
    }

    #[test]
    fn sections_default() {
        let cfg = RunConfig::desk();
        let minimal = format!(
            "{CONFIG_HEADER}\n[model]\n{}\n[data]\n{}",
            toml::to_string(&cfg.model).unwrap(),
            toml::to_string(&cfg.data).unwrap()
        );
        assert_eq!(RunConfig::from_text(&minimal).unwrap(), cfg);
    }
}
