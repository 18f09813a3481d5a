//! Distribution-level evaluation against a synthetic spec's exact law.

use std::fmt::Write as _;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rand::Rng;

use crate::autodiff::Graph;
use crate::codebook::CollapseMetrics;
use crate::data::{sequence_index, SyntheticSpec};
use crate::denoiser::predicted_embedding;
use crate::error::{Error, Result};
use crate::losses::{prior_kl, recon_loss, vlb_diffusion_loss};
use crate::sampler::{Generator, SampleConfig};
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::trainer::TrainState;

pub const REPORT_HEADER: &str = "vqlcmd-eval 1";

/// Largest sequence space enumerated for the joint distance.
pub const JOINT_LIMIT: u64 = 1_000_000;

/// `0.5 * sum |p - q|`.
pub fn tv_distance(p: &[f64], q: &[f64]) -> Result<f64> {
    if p.len() != q.len() {
        return Err(Error::Dimension {
            op: "tv_distance",
            lhs: vec![p.len()],
            rhs: vec![q.len()],
        });
    }
    for (name, v) in [("p", p), ("q", q)] {
        let s: f64 = v.iter().sum();
        if (s - 1.0).abs() > 1e-6 || v.iter().any(|x| !(*x >= 0.0)) {
            return Err(Error::contract(format!("{name} is not a distribution (sum {s})")));
        }
    }
    Ok((0.5 * p.iter().zip(q).map(|(a, b)| (a - b).abs()).sum::<f64>()).min(1.0))
}

/// Per-position empirical frequencies of `samples`.
pub fn empirical_marginals(samples: &[Vec<usize>], seq_len: usize, categories: usize) -> Result<Vec<Vec<f64>>> {
    if samples.is_empty() {
        return Err(Error::contract("no samples to evaluate"));
    }
    let mut counts = vec![vec![0usize; categories]; seq_len];
    for s in samples {
        if s.len() != seq_len {
            return Err(Error::Dimension {
                op: "samples",
                lhs: vec![s.len()],
                rhs: vec![seq_len],
            });
        }
        for (pos, &x) in s.iter().enumerate() {
            if x >= categories {
                return Err(Error::Index {
                    position: pos,
                    id: x,
                    limit: categories,
                });
            }
            counts[pos][x] += 1;
        }
    }
    let n = samples.len() as f64;
    Ok(counts.into_iter().map(|r| r.into_iter().map(|c| c as f64 / n).collect()).collect())
}

/// Per-position marginal TV of `samples` against the spec.
pub fn marginal_tv(samples: &[Vec<usize>], spec: &SyntheticSpec) -> Result<Vec<f64>> {
    let emp = empirical_marginals(samples, spec.seq_len, spec.categories)?;
    spec.marginals().iter().zip(&emp).map(|(p, q)| tv_distance(p, q)).collect()
}

/// Exact joint TV by enumerating all `K^M` sequences, if that is at most
/// [`JOINT_LIMIT`].
pub fn joint_tv(samples: &[Vec<usize>], spec: &SyntheticSpec) -> Result<Option<f64>> {
    let Some(size) = spec.support_size().filter(|&n| n <= JOINT_LIMIT) else {
        return Ok(None);
    };
    empirical_marginals(samples, spec.seq_len, spec.categories)?;
    let mut counts = vec![0u32; size as usize];
    for s in samples {
        counts[sequence_index(s, spec.categories) as usize] += 1;
    }
    let n = samples.len() as f64;
    let mut tv = 0.0;
    for (i, &c) in counts.iter().enumerate() {
        let seq = crate::data::sequence_at(i as u64, spec.seq_len, spec.categories);
        let p = spec.true_logprob(&seq)?.exp();
        tv += (p - c as f64 / n).abs();
    }
    Ok(Some((0.5 * tv).min(1.0)))
}

/// Mean single-draw variational bound (nats per sequence): reconstruction
/// summed over tokens, the diffusion term at a uniform time, and the prior KL.
pub fn nll_bound<T: Scalar>(state: &TrainState<T>, spec: &SyntheticSpec, num: usize, seed: u64, use_ema: bool) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let batch = spec.gen_batch(num, &mut rng);
    let schedule = state.schedule();
    let model = &state.model;
    let params = if use_ema { &state.ema } else { &state.model.params };
    let table = if use_ema { &state.codebook.ema_table } else { &state.codebook.table };
    let m = spec.seq_len;
    let d = model.cfg.embed_dim;
    let classes = batch.classes.as_deref();
    let mut total = 0.0;
    for (b, seq) in batch.tokens.iter().enumerate() {
        let class = classes.map(|c| vec![c[b]]);
        let g = Graph::new();
        let p = params.bind(&g, false);
        let tv = g.constant_tensor(table);
        let psi = tv.embedding(seq)?;
        let psi_v = psi.value();
        let noisy = |t: f64, rng: &mut ChaCha8Rng| -> Result<Tensor<T>> {
            let a = schedule.alpha_sigma(t);
            let data = psi_v
                .iter()
                .map(|&x| T::c(a.alpha * x.f64() + a.sigma * rng.sample::<f64, _>(StandardNormal)))
                .collect();
            Tensor::new(vec![m, d], data)
        };
        let t = schedule.t_min + (schedule.t_max - schedule.t_min) * rng.gen::<f64>();
        let z_t = g.constant_tensor(&noisy(t, &mut rng)?);
        let logits = model.forward(&p, z_t, &[t], class.as_deref(), None)?;
        let psi_hat = predicted_embedding(logits.softmax_last()?, tv)?.value();
        let vlb = vlb_diffusion_loss(&psi_v, &psi_hat, t, schedule)?;
        let z0 = g.constant_tensor(&noisy(schedule.t_min, &mut rng)?);
        let rec_logits = model.forward(&p, z0, &[schedule.t_min], class.as_deref(), None)?;
        let recon = recon_loss(rec_logits, seq)?.item().f64() * m as f64;
        total += recon + vlb + prior_kl(&psi_v, schedule);
    }
    Ok(total / num as f64)
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub num_samples: usize,
    pub tv_marginal: Vec<f64>,
    pub tv_joint: Option<f64>,
    pub nll_bound: f64,
    pub collapse: CollapseMetrics,
    pub sample: SampleConfig,
    pub class: Option<usize>,
}

impl EvalReport {
    pub fn mean_tv_marginal(&self) -> f64 {
        self.tv_marginal.iter().sum::<f64>() / self.tv_marginal.len() as f64
    }

    pub fn to_text(&self) -> String {
        let mut s = format!("{REPORT_HEADER}\n");
        let s_ = &mut s;
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(s_, "{k}={v}");
        };
        kv("num_samples", self.num_samples.to_string());
        kv("tv_marginal_mean", self.mean_tv_marginal().to_string());
        kv(
            "tv_marginal",
            self.tv_marginal.iter().map(f64::to_string).collect::<Vec<_>>().join(" "),
        );
        kv("tv_joint", self.tv_joint.map_or("none".into(), |v| v.to_string()));
        kv("nll_bound", self.nll_bound.to_string());
        kv("mean_norm", self.collapse.mean_norm.to_string());
        kv("mean_pairwise_distance", self.collapse.mean_pairwise_distance.to_string());
        kv("collapse_ratio", self.collapse.collapse_ratio.to_string());
        kv("class", self.class.map_or("none".into(), |c| c.to_string()));
        let c = &self.sample;
        kv("sample.steps", c.steps.to_string());
        kv("sample.mode", c.mode.to_string());
        kv("sample.guidance", c.guidance.to_string());
        kv("sample.guidance_space", c.guidance_space.to_string());
        kv("sample.decode", c.decode.to_string());
        kv("sample.seed", c.seed.to_string());
        kv("sample.use_ema", c.use_ema.to_string());
        kv("sample.chunk", c.chunk.to_string());
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        if lines.next().map(str::trim) != Some(REPORT_HEADER) {
            return Err(Error::Format(format!("eval report must start with {REPORT_HEADER:?}")));
        }
        let mut map = std::collections::HashMap::new();
        for line in lines.filter(|l| !l.trim().is_empty()) {
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Format(format!("expected key=value, got {line:?}")))?;
            map.insert(k.trim(), v.trim());
        }
        let get = |k: &str| map.get(k).copied().ok_or_else(|| Error::Format(format!("missing key {k}")));
        fn num<V: std::str::FromStr>(k: &str, v: &str) -> Result<V> {
            v.parse().map_err(|_| Error::Format(format!("bad value for {k}: {v:?}")))
        }
        let opt = |k: &str| -> Result<Option<String>> {
            let v = get(k)?;
            Ok((v != "none").then(|| v.to_string()))
        };
        let tv_marginal = get("tv_marginal")?
            .split_whitespace()
            .map(|v| num("tv_marginal", v))
            .collect::<Result<Vec<f64>>>()?;
        Ok(EvalReport {
            num_samples: num("num_samples", get("num_samples")?)?,
            tv_marginal,
            tv_joint: opt("tv_joint")?.map(|v| num("tv_joint", &v)).transpose()?,
            nll_bound: num("nll_bound", get("nll_bound")?)?,
            collapse: CollapseMetrics {
                mean_norm: num("mean_norm", get("mean_norm")?)?,
                mean_pairwise_distance: num("mean_pairwise_distance", get("mean_pairwise_distance")?)?,
                collapse_ratio: num("collapse_ratio", get("collapse_ratio")?)?,
            },
            sample: SampleConfig {
                steps: num("sample.steps", get("sample.steps")?)?,
                mode: get("sample.mode")?.parse()?,
                guidance: num("sample.guidance", get("sample.guidance")?)?,
                guidance_space: get("sample.guidance_space")?.parse()?,
                decode: get("sample.decode")?.parse()?,
                seed: num("sample.seed", get("sample.seed")?)?,
                use_ema: num("sample.use_ema", get("sample.use_ema")?)?,
                chunk: num("sample.chunk", get("sample.chunk")?)?,
            },
            class: opt("class")?.map(|v| num("class", &v)).transpose()?,
        })
    }
}

/// Draws `num_samples` from the trained state and scores them against `spec`.
pub fn evaluate<T: Scalar>(
    state: &TrainState<T>,
    spec: &SyntheticSpec,
    num_samples: usize,
    cfg: &SampleConfig,
    class: Option<usize>,
) -> Result<EvalReport> {
    let gen = Generator {
        model: &state.model,
        params: if cfg.use_ema { &state.ema } else { &state.model.params },
        table: if cfg.use_ema { &state.codebook.ema_table } else { &state.codebook.table },
        schedule: state.schedule(),
    };
    let samples = gen.sample(num_samples, class, cfg)?.tokens;
    Ok(EvalReport {
        num_samples,
        tv_marginal: marginal_tv(&samples, spec)?,
        tv_joint: joint_tv(&samples, spec)?,
        nll_bound: nll_bound(state, spec, 64, cfg.seed ^ 0x5eed, cfg.use_ema)?,
        collapse: state.collapse_metrics(),
        sample: cfg.clone(),
        class,
    })
}
