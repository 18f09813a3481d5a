//! Reverse-process generation: ancestral and DDIM steps, classifier-free
//! guidance, and the full sampling loop over a uniform time grid.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::autodiff::Graph;
use crate::denoiser::{predicted_embedding, Denoiser, ParamSet};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::schedule::Schedule;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StepMode {
    Ancestral,
    Ddim,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DecodeMode {
    Sample,
    Argmax,
}

/// Where guidance extrapolates: normalized log-probabilities or raw logits.
/// The two agree after the softmax.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GuidanceSpace {
    LogProb,
    Logit,
}

macro_rules! text_enum {
    ($t:ty, $($name:literal => $v:expr),+) => {
        impl FromStr for $t {
            type Err = Error;
            fn from_str(s: &str) -> Result<Self> {
                match s {
                    $($name => Ok($v),)+
                    other => Err(Error::Config(format!("unknown {} {other:?}", stringify!($t)))),
                }
            }
        }
        impl fmt::Display for $t {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                let s = match self { $(x if *x == $v => $name,)+ _ => unreachable!() };
                f.write_str(s)
            }
        }
    };
}

text_enum!(StepMode, "ancestral" => StepMode::Ancestral, "ddim" => StepMode::Ddim);
text_enum!(DecodeMode, "sample" => DecodeMode::Sample, "argmax" => DecodeMode::Argmax);
text_enum!(GuidanceSpace, "logprob" => GuidanceSpace::LogProb, "logit" => GuidanceSpace::Logit);

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SampleConfig {
    pub steps: usize,
    pub mode: StepMode,
    pub guidance: f64,
    pub guidance_space: GuidanceSpace,
    pub decode: DecodeMode,
    pub seed: u64,
    /// Sample with the EMA weights instead of the live ones.
    pub use_ema: bool,
    /// Chains advanced together through one batched forward pass.
    pub chunk: usize,
}

impl Default for SampleConfig {
    fn default() -> Self {
        SampleConfig {
            steps: 50,
            mode: StepMode::Ancestral,
            guidance: 0.0,
            guidance_space: GuidanceSpace::LogProb,
            decode: DecodeMode::Sample,
            seed: 0,
            use_ema: false,
            chunk: 256,
        }
    }
}

impl SampleConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(Error::Config("sampling needs at least one step".into()));
        }
        if !(self.guidance >= 0.0) {
            return Err(Error::Config(format!("guidance scale must be >= 0, got {}", self.guidance)));
        }
        if self.chunk == 0 {
            return Err(Error::Config("sampling chunk must be positive".into()));
        }
        Ok(())
    }
}

fn check_len<T>(a: &[T], b: &[T], op: &'static str) -> Result<()> {
    if a.len() != b.len() {
        return Err(Error::Dimension {
            op,
            lhs: vec![a.len()],
            rhs: vec![b.len()],
        });
    }
    Ok(())
}

/// Euler step of the probability-flow ODE with a fixed endpoint prediction:
/// `z_s = alpha_s psi + (sigma_s / sigma_t)(z_t - alpha_t psi)`.
pub fn ddim_step<T: Scalar>(z_t: &[T], psi_ref: &[T], s: f64, t: f64, schedule: &Schedule) -> Result<Vec<T>> {
    check_len(z_t, psi_ref, "ddim_step")?;
    let (sc, tc) = (schedule.clamp(s), schedule.clamp(t));
    if sc > tc {
        return Err(Error::Ordering { s: sc, t: tc });
    }
    if sc == tc {
        return Ok(z_t.to_vec());
    }
    let a_s = schedule.alpha_sigma(sc);
    let a_t = schedule.alpha_sigma(tc);
    let ratio = a_s.sigma / a_t.sigma;
    Ok(z_t
        .iter()
        .zip(psi_ref)
        .map(|(&z, &p)| {
            let (z, p) = (z.f64(), p.f64());
            T::c(a_s.alpha * p + ratio * (z - a_t.alpha * p))
        })
        .collect())
}

/// One draw from the Gaussian reverse kernel with mean built from `psi_hat`.
pub fn ancestral_step<T: Scalar, R: Rng + ?Sized>(
    z_t: &[T],
    psi_hat: &[T],
    s: f64,
    t: f64,
    schedule: &Schedule,
    rng: &mut R,
) -> Result<Vec<T>> {
    check_len(z_t, psi_hat, "ancestral_step")?;
    let k = schedule.posterior(s, t)?;
    if k.post_var == 0.0 && k.post_coef_z == 1.0 && k.post_coef_x == 0.0 {
        return Ok(z_t.to_vec());
    }
    let std = k.post_var.sqrt();
    Ok(z_t
        .iter()
        .zip(psi_hat)
        .map(|(&z, &p)| {
            let eps: f64 = rng.sample(StandardNormal);
            T::c(k.post_coef_z * z.f64() + k.post_coef_x * p.f64() + std * eps)
        })
        .collect())
}

fn log_softmax_rows(x: &[f64], k: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(x.len());
    for row in x.chunks_exact(k) {
        let mx = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = mx + row.iter().map(|v| (v - mx).exp()).sum::<f64>().ln();
        out.extend(row.iter().map(|v| v - lse));
    }
    out
}

/// Guided logits `(1 + w) cond - w uncond`, renormalized. With `w = 0` the
/// conditional logits are returned untouched.
pub fn cfg_logits<T: Scalar>(cond: &Tensor<T>, uncond: &Tensor<T>, omega: f64, space: GuidanceSpace) -> Result<Tensor<T>> {
    if cond.shape() != uncond.shape() {
        return Err(Error::Dimension {
            op: "cfg_logits",
            lhs: cond.shape().to_vec(),
            rhs: uncond.shape().to_vec(),
        });
    }
    if !(omega >= 0.0) {
        return Err(Error::contract(format!("guidance scale must be >= 0, got {omega}")));
    }
    if omega == 0.0 {
        return Ok(cond.clone());
    }
    let k = cond.last_dim();
    let as_f64 = |t: &Tensor<T>| t.data().iter().map(|v| v.f64()).collect::<Vec<_>>();
    let (c, u) = match space {
        GuidanceSpace::LogProb => (log_softmax_rows(&as_f64(cond), k), log_softmax_rows(&as_f64(uncond), k)),
        GuidanceSpace::Logit => (as_f64(cond), as_f64(uncond)),
    };
    let mixed: Vec<f64> = c.iter().zip(&u).map(|(a, b)| (1.0 + omega) * a - omega * b).collect();
    let data = log_softmax_rows(&mixed, k).into_iter().map(T::c).collect();
    Tensor::new(cond.shape().to_vec(), data)
}

/// Per-row token choice; logits cover only the `K` real categories, so the
/// mask id can never be emitted.
pub fn decode<T: Scalar, R: Rng + ?Sized>(logits: &Tensor<T>, mode: DecodeMode, rng: &mut R) -> Vec<usize> {
    let k = logits.last_dim();
    logits
        .data()
        .chunks_exact(k)
        .map(|row| match mode {
            DecodeMode::Argmax => {
                let mut best = 0;
                for (j, v) in row.iter().enumerate() {
                    if *v > row[best] {
                        best = j;
                    }
                }
                best
            }
            DecodeMode::Sample => {
                let mx = row.iter().map(|v| v.f64()).fold(f64::NEG_INFINITY, f64::max);
                let w: Vec<f64> = row.iter().map(|v| (v.f64() - mx).exp()).collect();
                let total: f64 = w.iter().sum();
                let mut u = rng.gen::<f64>() * total;
                for (j, wj) in w.iter().enumerate() {
                    if u < *wj {
                        return j;
                    }
                    u -= wj;
                }
                // rounding fallthrough: last category with positive weight
                w.iter().rposition(|&x| x > 0.0).unwrap_or(k - 1)
            }
        })
        .collect()
}

/// Mean entropy (nats) of the per-token predictive distributions at one step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepTrace {
    pub t: f64,
    pub mean_entropy: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SampleOutput {
    pub tokens: Vec<Vec<usize>>,
    pub trace: Vec<StepTrace>,
}

fn mean_entropy(probs: &[f64], k: usize) -> f64 {
    let rows = probs.len() / k;
    let h: f64 = probs.iter().filter(|&&p| p > 0.0).map(|&p| -p * p.ln()).sum();
    h / rows as f64
}

/// Model weights and embedding table used for generation.
pub struct Generator<'a, T: Scalar> {
    pub model: &'a Denoiser<T>,
    pub params: &'a ParamSet<T>,
    pub table: &'a Tensor<T>,
    pub schedule: &'a Schedule,
}

impl<T: Scalar> Generator<'_, T> {
    /// Guided logits for a batch of chains sharing time `t`.
    fn logits(&self, z: &Tensor<T>, t: f64, chains: usize, class: Option<usize>, cfg: &SampleConfig) -> Result<Tensor<T>> {
        let times = vec![t; chains];
        let null = self.model.cfg.null_class();
        match (class, null) {
            (Some(c), Some(null)) if cfg.guidance > 0.0 => {
                let cond = self.model.logits_with(self.params, z, &times, Some(&vec![c; chains]))?;
                let uncond = self.model.logits_with(self.params, z, &times, Some(&vec![null; chains]))?;
                cfg_logits(&cond, &uncond, cfg.guidance, cfg.guidance_space)
            }
            (Some(c), Some(_)) => self.model.logits_with(self.params, z, &times, Some(&vec![c; chains])),
            (Some(c), None) => Err(Error::contract(format!("class {c} given to an unconditional model"))),
            (None, _) => self.model.logits_with(self.params, z, &times, None),
        }
    }

    fn run_chunk(&self, chains: usize, class: Option<usize>, cfg: &SampleConfig, rng: &mut ChaCha8Rng, trace: bool) -> Result<SampleOutput> {
        let mcfg = &self.model.cfg;
        let rows = chains * mcfg.seq_len;
        let d = mcfg.embed_dim;
        let k = mcfg.categories;
        let grid = self.schedule.time_grid(cfg.steps)?;
        let mut z = Tensor::from_fn(&[rows, d], |_| T::c(rng.sample::<f64, _>(StandardNormal)));
        let mut steps = Vec::new();
        for n in (1..=cfg.steps).rev() {
            let (s, t) = (grid[n - 1], grid[n]);
            let logits = self.logits(&z, t, chains, class, cfg)?;
            let g = Graph::new();
            let probs = g.constant_tensor(&logits).softmax_last()?;
            if trace {
                let p: Vec<f64> = probs.value().iter().map(|v| v.f64()).collect();
                steps.push(StepTrace { t, mean_entropy: mean_entropy(&p, k) });
            }
            let psi_hat = predicted_embedding(probs, g.constant_tensor(self.table))?.value();
            let next = match cfg.mode {
                StepMode::Ddim => ddim_step(z.data(), &psi_hat, s, t, self.schedule)?,
                StepMode::Ancestral => ancestral_step(z.data(), &psi_hat, s, t, self.schedule, rng)?,
            };
            if let Some(bad) = next.iter().position(|v| !v.is_finite()) {
                return Err(Error::numeric(format!("sampling step {n}"), format!("non-finite state at {bad}")));
            }
            z = Tensor::new(vec![rows, d], next)?;
        }
        let logits = self.logits(&z, grid[0], chains, class, cfg)?;
        let flat = decode(&logits, cfg.decode, rng);
        Ok(SampleOutput {
            tokens: flat.chunks(mcfg.seq_len).map(<[usize]>::to_vec).collect(),
            trace: steps,
        })
    }

    /// Draws `num` sequences. Chains are advanced `cfg.chunk` at a time from
    /// one seeded stream, so the output depends only on the config and seed.
    pub fn sample(&self, num: usize, class: Option<usize>, cfg: &SampleConfig) -> Result<SampleOutput> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut out = SampleOutput {
            tokens: Vec::with_capacity(num),
            trace: Vec::new(),
        };
        let mut done = 0;
        while done < num {
            let chains = cfg.chunk.min(num - done);
            let part = self.run_chunk(chains, class, cfg, &mut rng, done == 0)?;
            if done == 0 {
                out.trace = part.trace;
            }
            out.tokens.extend(part.tokens);
            done += chains;
        }
        Ok(out)
    }
}
