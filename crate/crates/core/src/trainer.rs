//! Joint training of the denoiser and the codebook: noising with random
//! dropping, an EMA teacher advanced by one DDIM step, loss assembly, Adam
//! and EMA updates, and checkpoint conversion.

use std::fmt;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::checkpoint::{CheckpointError, RawCheckpoint};
use crate::codebook::{ema_blend, random_drop, Codebook, CollapseMetrics};
use crate::config::RunConfig;
use crate::data::{Batch, SyntheticSpec};
use crate::denoiser::{predicted_embedding, Denoiser, ParamSet};
use crate::error::{Error, Result};
use crate::losses::{
    cm_loss, diffusion_loss, prior_kl, recon_loss, total_loss, vlb_diffusion_loss, weighted_total, LossBreakdown,
    DEFAULT_BETA_CM, DEFAULT_BETA_DM,
};
use crate::sampler::ddim_step;
use crate::scalar::Scalar;
use crate::schedule::Schedule;
use crate::tensor::Tensor;

pub const ADAM_B1: f64 = 0.9;
pub const ADAM_B2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub beta_dm: f64,
    pub beta_cm: f64,
    pub drop_rate: f64,
    /// EMA rate for the teacher weights and the codebook shadow.
    pub eta: f64,
    pub lr: f64,
    pub batch: usize,
    /// Total step count the run trains to.
    pub steps: u64,
    pub seed: u64,
    /// Probability of replacing a class id with the null label.
    pub cond_drop_prob: f64,
    /// 0 disables logging.
    pub log_every: u64,
    /// 0 disables periodic checkpoints.
    pub checkpoint_every: u64,
    pub freeze_embeddings: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            beta_dm: DEFAULT_BETA_DM,
            beta_cm: DEFAULT_BETA_CM,
            drop_rate: 0.2,
            eta: 0.99,
            lr: 1e-3,
            batch: 32,
            steps: 2000,
            seed: 0,
            cond_drop_prob: 0.1,
            log_every: 100,
            checkpoint_every: 0,
            freeze_embeddings: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("drop_rate", self.drop_rate),
            ("eta", self.eta),
            ("cond_drop_prob", self.cond_drop_prob),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::Config(format!("{name} must lie in [0, 1], got {v}")));
            }
        }
        for (name, v) in [("lr", self.lr), ("beta_dm", self.beta_dm), ("beta_cm", self.beta_cm)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be finite and >= 0, got {v}")));
            }
        }
        if self.batch == 0 {
            return Err(Error::Config("batch must be positive".into()));
        }
        Ok(())
    }
}

/// Adam moments for an ordered list of tensors.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam<T> {
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
    pub t: u64,
}

impl<T: Scalar> Adam<T> {
    pub fn new(shapes: &[Vec<usize>]) -> Self {
        Adam {
            m: shapes.iter().map(|s| Tensor::zeros(s)).collect(),
            v: shapes.iter().map(|s| Tensor::zeros(s)).collect(),
            t: 0,
        }
    }

    /// One bias-corrected update. `grads[i] = None` skips tensor `i`
    /// entirely (frozen). All gradients are checked before anything moves.
    pub fn update(&mut self, params: &mut [&mut Tensor<T>], grads: &[Option<Vec<T>>], lr: f64) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(Error::contract(format!(
                "optimizer holds {} tensors, got {} params and {} grads",
                self.m.len(),
                params.len(),
                grads.len()
            )));
        }
        for (i, g) in grads.iter().enumerate() {
            if let Some(g) = g {
                if g.len() != params[i].numel() {
                    return Err(Error::Dimension {
                        op: "optimizer",
                        lhs: vec![g.len()],
                        rhs: params[i].shape().to_vec(),
                    });
                }
                if let Some(j) = g.iter().position(|x| !x.is_finite()) {
                    return Err(Error::numeric("optimizer", format!("non-finite gradient in tensor {i} at {j}")));
                }
            }
        }
        self.t += 1;
        let c1 = 1.0 - ADAM_B1.powi(self.t as i32);
        let c2 = 1.0 - ADAM_B2.powi(self.t as i32);
        for (i, g) in grads.iter().enumerate() {
            let Some(g) = g else { continue };
            let p = params[i].data_mut();
            let m = self.m[i].data_mut();
            let v = self.v[i].data_mut();
            for j in 0..g.len() {
                let gj = g[j].f64();
                let mj = ADAM_B1 * m[j].f64() + (1.0 - ADAM_B1) * gj;
                let vj = ADAM_B2 * v[j].f64() + (1.0 - ADAM_B2) * gj * gj;
                m[j] = T::c(mj);
                v[j] = T::c(vj);
                let step = lr * (mj / c1) / ((vj / c2).sqrt() + ADAM_EPS);
                p[j] = T::c(p[j].f64() - step);
            }
        }
        Ok(())
    }
}

/// `t ~ U[t_min, t_max]`, then `s ~ U[t_min, t]`.
pub fn sample_times<R: Rng + ?Sized>(schedule: &Schedule, rng: &mut R) -> (f64, f64) {
    let t = schedule.t_min + (schedule.t_max - schedule.t_min) * rng.gen::<f64>();
    let s = schedule.t_min + (t - schedule.t_min) * rng.gen::<f64>();
    (t, s.min(t))
}

/// Every random quantity a training step consumes, drawn up front.
#[derive(Debug, Clone, PartialEq)]
pub struct StepNoise<T> {
    pub t: Vec<f64>,
    pub s: Vec<f64>,
    /// `[B*M*D]` noise for the diffusion branch.
    pub eps: Vec<T>,
    /// `[B*M*D]` noise for the reconstruction branch.
    pub eps_rec: Vec<T>,
    /// Flattened tokens after random dropping.
    pub dropped: Vec<usize>,
    /// Class ids after null-label dropping.
    pub classes: Option<Vec<usize>>,
    pub dropout_seed: u64,
}

impl<T: Scalar> StepNoise<T> {
    pub fn draw<R: Rng + ?Sized>(
        batch: &Batch,
        model: &Denoiser<T>,
        schedule: &Schedule,
        cfg: &TrainConfig,
        rng: &mut R,
    ) -> Self {
        let b = batch.len();
        let d = model.cfg.embed_dim;
        let rows: usize = batch.tokens.iter().map(Vec::len).sum();
        let (t, s): (Vec<f64>, Vec<f64>) = (0..b).map(|_| sample_times(schedule, rng)).unzip();
        let mut normal = |n: usize| -> Vec<T> { (0..n).map(|_| T::c(rng.sample(StandardNormal))).collect() };
        let eps = normal(rows * d);
        let eps_rec = normal(rows * d);
        let (dropped, _) = random_drop(&batch.flat_tokens(), cfg.drop_rate, model.cfg.categories, rng);
        let classes = model.cfg.null_class().map(|null| {
            let given = batch.classes.clone().unwrap_or_else(|| vec![null; b]);
            given
                .into_iter()
                .map(|c| if rng.gen::<f64>() < cfg.cond_drop_prob { null } else { c })
                .collect()
        });
        StepNoise {
            t,
            s,
            eps,
            eps_rec,
            dropped,
            classes,
            dropout_seed: rng.next_u64(),
        }
    }
}

/// Per-row `[B*M*D]` broadcast of a per-sequence coefficient.
fn per_row(times: &[f64], m: usize, d: usize, f: impl Fn(f64) -> f64) -> Vec<f64> {
    times.iter().flat_map(|&t| std::iter::repeat(f(t)).take(m * d)).collect()
}

fn noised<'g, T: Scalar>(psi: Var<'g, T>, eps: &[T], times: &[f64], m: usize, schedule: &Schedule) -> Result<Var<'g, T>> {
    let g = psi.graph();
    let shape = psi.shape();
    let d = shape[1];
    let alpha = per_row(times, m, d, |t| schedule.alpha_sigma(t).alpha);
    let sigma = per_row(times, m, d, |t| schedule.alpha_sigma(t).sigma);
    let a = g.constant(&shape, alpha.into_iter().map(T::c).collect())?;
    let se: Vec<T> = sigma.iter().zip(eps).map(|(s, &e)| T::c(s * e.f64())).collect();
    psi.mul(a)?.add(g.constant(&shape, se)?)
}

/// Teacher log-probabilities at `(z_s, s)`: the student's `z_t` advanced by
/// one DDIM step toward the EMA embedding of the undropped tokens, scored by
/// the EMA weights. Nothing here is differentiated.
pub fn teacher_logits<T: Scalar>(
    model: &Denoiser<T>,
    ema: &ParamSet<T>,
    codebook: &Codebook<T>,
    schedule: &Schedule,
    batch: &Batch,
    noise: &StepNoise<T>,
) -> Result<Tensor<T>> {
    let m = model.cfg.seq_len;
    let d = model.cfg.embed_dim;
    let g = Graph::new();
    let psi_drop = g.constant_tensor(&codebook.table).embedding(&noise.dropped)?;
    let z_t = noised(psi_drop, &noise.eps, &noise.t, m, schedule)?.value();
    let psi_ema = codebook.embed(&batch.flat_tokens(), true)?;
    let mut z_s = Vec::with_capacity(z_t.len());
    let chunk = m * d;
    for (b, (zt, pe)) in z_t.chunks(chunk).zip(psi_ema.data().chunks(chunk)).enumerate() {
        z_s.extend(ddim_step(zt, pe, noise.s[b], noise.t[b], schedule)?);
    }
    let z_s = Tensor::new(vec![z_t.len() / d, d], z_s)?;
    model.logits_with(ema, &z_s, &noise.s, noise.classes.as_deref())
}

/// Graph nodes of one training objective.
pub struct Objective<'g, T: Scalar> {
    pub total: Var<'g, T>,
    pub recon: Var<'g, T>,
    pub dm: Var<'g, T>,
    pub cm: Var<'g, T>,
    pub psi: Var<'g, T>,
    pub psi_hat: Var<'g, T>,
}

/// Differentiable objective for fixed noise and fixed teacher output. `p`
/// are the denoiser parameters and `table` the codebook; either may be
/// constants.
#[allow(clippy::too_many_arguments)]
pub fn step_objective<'g, T: Scalar>(
    model: &Denoiser<T>,
    schedule: &Schedule,
    cfg: &TrainConfig,
    p: &[Var<'g, T>],
    table: Var<'g, T>,
    batch: &Batch,
    noise: &StepNoise<T>,
    teacher: &Tensor<T>,
) -> Result<Objective<'g, T>> {
    let g = table.graph();
    let m = model.cfg.seq_len;
    let tokens = batch.flat_tokens();
    let classes = noise.classes.as_deref();
    let mut dropout = ChaCha8Rng::seed_from_u64(noise.dropout_seed);

    let psi = table.embedding(&tokens)?;
    let z_t = noised(table.embedding(&noise.dropped)?, &noise.eps, &noise.t, m, schedule)?;
    let logits = model.forward(p, z_t, &noise.t, classes, Some(&mut dropout))?;
    let psi_hat = predicted_embedding(logits.softmax_last()?, table)?;
    let dm = diffusion_loss(psi, psi_hat)?;
    let cm = cm_loss(g.constant_tensor(teacher), logits)?;

    let t_rec = vec![schedule.t_min; batch.len()];
    let z_rec = noised(psi, &noise.eps_rec, &t_rec, m, schedule)?;
    let rec_logits = model.forward(p, z_rec, &t_rec, classes, Some(&mut dropout))?;
    let recon = recon_loss(rec_logits, &tokens)?;
    let total = weighted_total(recon, dm, cm, cfg.beta_dm, cfg.beta_cm)?;
    Ok(Objective {
        total,
        recon,
        dm,
        cm,
        psi,
        psi_hat,
    })
}

/// Source of training batches, driven by the trainer's rng.
pub trait BatchSource {
    fn next_batch(&self, batch: usize, rng: &mut ChaCha8Rng) -> Batch;
}

impl BatchSource for SyntheticSpec {
    fn next_batch(&self, batch: usize, rng: &mut ChaCha8Rng) -> Batch {
        self.gen_batch(batch, rng)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainState<T: Scalar> {
    pub config: RunConfig,
    pub model: Denoiser<T>,
    pub ema: ParamSet<T>,
    pub codebook: Codebook<T>,
    /// Moments for the denoiser tensors followed by the codebook table.
    pub adam: Adam<T>,
    pub step: u64,
    pub rng: ChaCha8Rng,
}

fn rng_blob(rng: &ChaCha8Rng) -> Vec<u8> {
    let mut out = rng.get_seed().to_vec();
    out.extend_from_slice(&rng.get_stream().to_le_bytes());
    out.extend_from_slice(&rng.get_word_pos().to_le_bytes());
    out
}

fn rng_from_blob(b: &[u8]) -> std::result::Result<ChaCha8Rng, CheckpointError> {
    if b.len() != 56 {
        return Err(CheckpointError::Truncated { context: "rng state" });
    }
    let mut rng = ChaCha8Rng::from_seed(b[..32].try_into().expect("32 bytes"));
    rng.set_stream(u64::from_le_bytes(b[32..40].try_into().expect("8 bytes")));
    rng.set_word_pos(u128::from_le_bytes(b[40..56].try_into().expect("16 bytes")));
    Ok(rng)
}

impl<T: Scalar> TrainState<T> {
    /// Fresh state; all initial randomness derives from `config.train.seed`.
    pub fn new(config: RunConfig) -> Result<Self> {
        config.validate()?;
        let seed = config.train.seed;
        let model = Denoiser::new(config.model.clone(), seed)?;
        let codebook = Codebook::init_gaussian(config.model.categories, config.model.embed_dim, seed.wrapping_add(1))?;
        let mut shapes: Vec<Vec<usize>> = model.params.tensors.iter().map(|t| t.shape().to_vec()).collect();
        shapes.push(codebook.table.shape().to_vec());
        Ok(TrainState {
            ema: model.params.frozen_copy(),
            adam: Adam::new(&shapes),
            model,
            codebook,
            step: 0,
            rng: ChaCha8Rng::seed_from_u64(seed.wrapping_add(2)),
            config,
        })
    }

    pub fn schedule(&self) -> &Schedule {
        &self.config.schedule
    }

    /// One optimization step on `batch`, consuming the state's rng.
    pub fn train_step(&mut self, batch: &Batch) -> Result<LossBreakdown> {
        let cfg = self.config.train.clone();
        let schedule = self.config.schedule.clone();
        let noise = StepNoise::draw(batch, &self.model, &schedule, &cfg, &mut self.rng);
        let teacher = teacher_logits(&self.model, &self.ema, &self.codebook, &schedule, batch, &noise)?;

        let g = Graph::new();
        let p = self.model.params.bind(&g, true);
        let table = if cfg.freeze_embeddings {
            g.constant_tensor(&self.codebook.table)
        } else {
            g.param(&self.codebook.table)
        };
        let obj = step_objective(&self.model, &schedule, &cfg, &p, table, batch, &noise, &teacher)?;
        let mut parts = total_loss(
            obj.recon.item().f64(),
            obj.dm.item().f64(),
            obj.cm.item().f64(),
            cfg.beta_dm,
            cfg.beta_cm,
        )
        .map_err(|e| Error::numeric(format!("train step {}", self.step), format!("{e}")))?;
        (parts.vlb_diffusion, parts.prior_kl) = self.diagnostics(&obj, &noise.t)?;
        g.backward(obj.total)?;

        let mut grads: Vec<Option<Vec<T>>> = p
            .iter()
            .zip(&self.model.params.tensors)
            .map(|(v, t)| Some(g.grad(*v).unwrap_or_else(|| vec![T::zero(); t.numel()])))
            .collect();
        grads.push(if cfg.freeze_embeddings {
            None
        } else {
            Some(g.grad(table).unwrap_or_else(|| vec![T::zero(); self.codebook.table.numel()]))
        });
        drop(g);
        let mut targets: Vec<&mut Tensor<T>> = self.model.params.tensors.iter_mut().collect();
        targets.push(&mut self.codebook.table);
        self.adam
            .update(&mut targets, &grads, cfg.lr)
            .map_err(|e| Error::numeric(format!("train step {}", self.step), format!("{e}; losses {parts:?}")))?;

        for (e, live) in self.ema.tensors.iter_mut().zip(&self.model.params.tensors) {
            ema_blend(e, live, cfg.eta)?;
        }
        self.codebook.ema_update(cfg.eta)?;
        self.step += 1;
        Ok(parts)
    }

    /// Per-sequence means of the diffusion VLB term and the prior KL.
    fn diagnostics(&self, obj: &Objective<'_, T>, times: &[f64]) -> Result<(f64, f64)> {
        let schedule = self.schedule();
        let chunk = self.config.model.seq_len * self.config.model.embed_dim;
        let psi = obj.psi.value();
        let psi_hat = obj.psi_hat.value();
        let b = times.len() as f64;
        let mut vlb = 0.0;
        let mut prior = 0.0;
        for (i, (a, h)) in psi.chunks(chunk).zip(psi_hat.chunks(chunk)).enumerate() {
            vlb += vlb_diffusion_loss(a, h, times[i], schedule)?;
            prior += prior_kl(a, schedule);
        }
        Ok((vlb / b, prior / b))
    }

    pub fn collapse_metrics(&self) -> CollapseMetrics {
        self.codebook.collapse_metrics()
    }

    pub fn to_checkpoint(&self) -> RawCheckpoint {
        let mut c = RawCheckpoint {
            step: self.step,
            rng: rng_blob(&self.rng),
            config: self.config.to_text(),
            ..Default::default()
        };
        let names = &self.model.params.names;
        for (n, t) in names.iter().zip(&self.model.params.tensors) {
            c.push(&format!("theta.{n}"), t);
        }
        for (n, t) in names.iter().zip(&self.ema.tensors) {
            c.push(&format!("ema.{n}"), t);
        }
        c.push("codebook.table", &self.codebook.table);
        c.push("codebook.ema", &self.codebook.ema_table);
        let slots: Vec<&str> = names.iter().map(String::as_str).chain(["codebook.table"]).collect();
        for (n, t) in slots.iter().zip(&self.adam.m) {
            c.push(&format!("adam.m.{n}"), t);
        }
        for (n, t) in slots.iter().zip(&self.adam.v) {
            c.push(&format!("adam.v.{n}"), t);
        }
        c
    }

    pub fn from_checkpoint(c: &RawCheckpoint) -> Result<Self> {
        let config = RunConfig::from_text(&c.config)?;
        let shapes = Denoiser::<T>::param_shapes(&config.model);
        let load = |prefix: &str| -> Result<ParamSet<T>> {
            let mut tensors = Vec::with_capacity(shapes.len());
            for (n, s) in &shapes {
                tensors.push(c.get::<T>(&format!("{prefix}.{n}"), Some(s))?);
            }
            Ok(ParamSet {
                names: shapes.iter().map(|(n, _)| n.clone()).collect(),
                tensors,
            })
        };
        let mut theta = load("theta")?;
        theta.tensors.iter_mut().for_each(|t| t.set_requires_grad(true));
        let ema = load("ema")?.frozen_copy();
        let k = config.model.categories;
        let table_shape = [k + 1, config.model.embed_dim];
        let mut codebook = Codebook::from_table(k, c.get::<T>("codebook.table", Some(&table_shape))?)?;
        codebook.ema_table = c.get::<T>("codebook.ema", Some(&table_shape))?;
        let slots: Vec<(String, Vec<usize>)> = shapes
            .iter()
            .cloned()
            .chain([("codebook.table".to_string(), table_shape.to_vec())])
            .collect();
        let moments = |which: &str| -> Result<Vec<Tensor<T>>> {
            slots
                .iter()
                .map(|(n, s)| Ok(c.get::<T>(&format!("adam.{which}.{n}"), Some(s))?))
                .collect()
        };
        let adam = Adam {
            m: moments("m")?,
            v: moments("v")?,
            t: c.step,
        };
        Ok(TrainState {
            model: Denoiser::from_params(config.model.clone(), theta)?,
            ema,
            codebook,
            adam,
            step: c.step,
            rng: rng_from_blob(&c.rng)?,
            config,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        Ok(std::fs::write(path, self.to_checkpoint().encode())?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path)?;
        Self::from_checkpoint(&RawCheckpoint::decode(&bytes)?)
    }
}

/// One structured log line.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LogRecord {
    pub step: u64,
    pub loss: LossBreakdown,
    pub collapse: CollapseMetrics,
}

impl fmt::Display for LogRecord {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let l = &self.loss;
        let c = &self.collapse;
        write!(
            f,
            "step={} total={} recon={} dm={} cm={} vlb_diffusion={} prior_kl={} mean_norm={} mean_pairwise_distance={} collapse_ratio={}",
            self.step, l.total, l.recon, l.dm, l.cm, l.vlb_diffusion, l.prior_kl, c.mean_norm, c.mean_pairwise_distance, c.collapse_ratio
        )
    }
}

/// Receives periodic logs and checkpoint opportunities from [`fit`].
pub trait Observer<T: Scalar> {
    fn on_log(&mut self, _record: &LogRecord) -> Result<()> {
        Ok(())
    }
    fn on_checkpoint(&mut self, _state: &TrainState<T>) -> Result<()> {
        Ok(())
    }
}

impl<T: Scalar> Observer<T> for () {}

/// Trains until `state.step` reaches `config.train.steps`, returning the
/// losses of the steps it ran.
pub fn fit<T: Scalar>(
    state: &mut TrainState<T>,
    source: &dyn BatchSource,
    observer: &mut dyn Observer<T>,
) -> Result<Vec<LossBreakdown>> {
    let mut losses = Vec::new();
    let target = state.config.train.steps;
    while state.step < target {
        let batch = source.next_batch(state.config.train.batch, &mut state.rng);
        let loss = state.train_step(&batch)?;
        losses.push(loss);
        let (log_every, ckpt_every) = (state.config.train.log_every, state.config.train.checkpoint_every);
        if log_every > 0 && (state.step % log_every == 0 || state.step == target) {
            observer.on_log(&LogRecord {
                step: state.step,
                loss,
                collapse: state.collapse_metrics(),
            })?;
        }
        if ckpt_every > 0 && state.step % ckpt_every == 0 {
            observer.on_checkpoint(state)?;
        }
    }
    Ok(losses)
}
