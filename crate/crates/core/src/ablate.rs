//! Ablation grids: the same base run with one component removed at a time.

use std::fmt;
use std::str::FromStr;

use crate::config::RunConfig;
use crate::data::DataConfig;
use crate::error::{Error, Result};
use crate::eval::evaluate;
use crate::sampler::SampleConfig;
use crate::trainer::{fit, TrainState};

/// Shift used by the full model when the base config leaves it at 0.
pub const ABLATION_SHIFT: f64 = -2.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Preset {
    /// full vs no consistency matching.
    Collapse,
    /// random dropping at 0.2 vs none, on a chain-structured spec.
    Dropping,
    /// full, no-cm, no-ns, no-rd, fixed-embeddings.
    Table3,
}

impl FromStr for Preset {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "collapse" => Ok(Preset::Collapse),
            "dropping" => Ok(Preset::Dropping),
            "table3" => Ok(Preset::Table3),
            other => Err(Error::Config(format!("unknown ablation preset {other:?}"))),
        }
    }
}

impl fmt::Display for Preset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Preset::Collapse => "collapse",
            Preset::Dropping => "dropping",
            Preset::Table3 => "table3",
        })
    }
}

impl Preset {
    /// Data the preset is meant for when no base config is given.
    pub fn default_data(self) -> DataConfig {
        match self {
            Preset::Dropping => DataConfig::markov(),
            _ => DataConfig::desk(),
        }
    }

    /// Named variants of `base`.
    pub fn runs(self, base: &RunConfig) -> Vec<(&'static str, RunConfig)> {
        let with = |f: &dyn Fn(&mut RunConfig)| {
            let mut c = base.clone();
            f(&mut c);
            c
        };
        match self {
            Preset::Collapse => vec![("full", base.clone()), ("no-cm", with(&|c| c.train.beta_cm = 0.0))],
            Preset::Dropping => vec![
                ("rd-0.2", with(&|c| c.train.drop_rate = 0.2)),
                ("rd-0", with(&|c| c.train.drop_rate = 0.0)),
            ],
            Preset::Table3 => {
                let shifted = with(&|c| {
                    if c.schedule.shift == 0.0 {
                        c.schedule.shift = ABLATION_SHIFT;
                    }
                });
                let from = |f: &dyn Fn(&mut RunConfig)| {
                    let mut c = shifted.clone();
                    f(&mut c);
                    c
                };
                vec![
                    ("full", shifted.clone()),
                    ("no-cm", from(&|c| c.train.beta_cm = 0.0)),
                    ("no-ns", from(&|c| c.schedule.shift = 0.0)),
                    ("no-rd", from(&|c| c.train.drop_rate = 0.0)),
                    ("fixed-embeddings", from(&|c| c.train.freeze_embeddings = true)),
                ]
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationRow {
    pub run: String,
    pub seed: u64,
    pub tv_marginal: f64,
    pub tv_joint: Option<f64>,
    pub collapse_ratio: f64,
    pub nll_bound: f64,
    pub final_loss: f64,
}

impl fmt::Display for AblationRow {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "run={} seed={} tv_marginal={} tv_joint={} collapse_ratio={} nll_bound={} final_loss={}",
            self.run,
            self.seed,
            self.tv_marginal,
            self.tv_joint.map_or("none".into(), |v| v.to_string()),
            self.collapse_ratio,
            self.nll_bound,
            self.final_loss
        )
    }
}

/// Trains and evaluates `cfg` with training and sampling seed `seed`.
pub fn run_one(name: &str, cfg: &RunConfig, seed: u64, num_samples: usize, sample: &SampleConfig) -> Result<AblationRow> {
    let mut cfg = cfg.clone();
    cfg.train.seed = seed;
    let spec = cfg.data.build()?;
    let mut state = TrainState::<f32>::new(cfg)?;
    let losses = fit(&mut state, &spec, &mut ())?;
    let sample = SampleConfig {
        seed,
        ..sample.clone()
    };
    let report = evaluate(&state, &spec, num_samples, &sample, None)?;
    Ok(AblationRow {
        run: name.to_string(),
        seed,
        tv_marginal: report.mean_tv_marginal(),
        tv_joint: report.tv_joint,
        collapse_ratio: report.collapse.collapse_ratio,
        nll_bound: report.nll_bound,
        final_loss: losses.last().map_or(f64::NAN, |l| l.total),
    })
}

/// Every variant of the preset for every seed, in run-major order.
pub fn run_preset(
    preset: Preset,
    base: &RunConfig,
    seeds: &[u64],
    num_samples: usize,
    sample: &SampleConfig,
    mut progress: impl FnMut(&AblationRow),
) -> Result<Vec<AblationRow>> {
    let mut rows = Vec::new();
    for (name, cfg) in preset.runs(base) {
        for &seed in seeds {
            let row = run_one(name, &cfg, seed, num_samples, sample)?;
            progress(&row);
            rows.push(row);
        }
    }
    Ok(rows)
}

/// Per-run means of (tv_marginal, collapse_ratio), in first-seen order.
pub fn summarize(rows: &[AblationRow]) -> Vec<(String, f64, f64)> {
    let mut names: Vec<&str> = Vec::new();
    for r in rows {
        if !names.contains(&r.run.as_str()) {
            names.push(&r.run);
        }
    }
    names
        .into_iter()
        .map(|n| {
            let sel: Vec<&AblationRow> = rows.iter().filter(|r| r.run == n).collect();
            let k = sel.len() as f64;
            (
                n.to_string(),
                sel.iter().map(|r| r.tv_marginal).sum::<f64>() / k,
                sel.iter().map(|r| r.collapse_ratio).sum::<f64>() / k,
            )
        })
        .collect()
}
