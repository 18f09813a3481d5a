//! Bidirectional transformer mapping noisy embeddings, time and an optional
//! class label to per-token logits over the `K` categories.
//!
//! Conditioning (time features plus class embedding) enters every block
//! through adaptive layer normalization: `(1 + a) LayerNorm(h) + b`, where
//! `a` and `b` are linear projections of the condition. The projections start
//! at zero, so an untrained block sees plain layer normalization.

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DenoiserConfig {
    pub layers: usize,
    pub heads: usize,
    pub width: usize,
    /// Embedding dimension `D` of the codebook.
    pub embed_dim: usize,
    /// Number of categories `K` (logit count per token).
    pub categories: usize,
    /// Sequence length `M`.
    pub seq_len: usize,
    /// 0 for unconditional models; otherwise id `num_classes` is the null label.
    pub num_classes: usize,
    pub attn_dropout: f64,
    pub mlp_ratio: usize,
    pub positional: bool,
}

impl DenoiserConfig {
    pub fn desk(seq_len: usize, categories: usize, embed_dim: usize) -> Self {
        DenoiserConfig {
            layers: 4,
            heads: 4,
            width: 128,
            embed_dim,
            categories,
            seq_len,
            num_classes: 0,
            attn_dropout: 0.1,
            mlp_ratio: 4,
            positional: true,
        }
    }

    pub fn base(seq_len: usize, categories: usize, embed_dim: usize) -> Self {
        DenoiserConfig {
            layers: 15,
            heads: 8,
            width: 512,
            ..Self::desk(seq_len, categories, embed_dim)
        }
    }

    pub fn large_conditional(seq_len: usize, categories: usize, embed_dim: usize) -> Self {
        DenoiserConfig {
            layers: 24,
            heads: 16,
            width: 768,
            num_classes: 1000,
            ..Self::desk(seq_len, categories, embed_dim)
        }
    }

    pub fn preset(name: &str, seq_len: usize, categories: usize, embed_dim: usize) -> Result<Self> {
        match name {
            "desk" => Ok(Self::desk(seq_len, categories, embed_dim)),
            "base" => Ok(Self::base(seq_len, categories, embed_dim)),
            "large-conditional" => Ok(Self::large_conditional(seq_len, categories, embed_dim)),
            other => Err(Error::Config(format!("unknown model preset {other:?}"))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.layers == 0 || self.heads == 0 || self.width == 0 {
            return fail("layers, heads and width must be positive".into());
        }
        if self.width % self.heads != 0 {
            return fail(format!("width {} not divisible by heads {}", self.width, self.heads));
        }
        if self.width % 2 != 0 || self.width < 2 {
            return fail("width must be even".into());
        }
        if self.categories < 2 || self.embed_dim == 0 || self.seq_len == 0 || self.mlp_ratio == 0 {
            return fail("need K >= 2, D >= 1, M >= 1, mlp_ratio >= 1".into());
        }
        if !(0.0..1.0).contains(&self.attn_dropout) {
            return fail(format!("attention dropout {} outside [0, 1)", self.attn_dropout));
        }
        Ok(())
    }

    pub fn null_class(&self) -> Option<usize> {
        (self.num_classes > 0).then_some(self.num_classes)
    }
}

#[derive(Debug, Clone, Copy)]
enum Init {
    Normal(f64),
    Zeros,
    /// Row `i` set to the sinusoid features of position `i`.
    Positions,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdaLayout {
    pub wa: usize,
    pub ba: usize,
    pub wb: usize,
    pub bb: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BlockLayout {
    pub ada_attn: AdaLayout,
    pub wq: usize,
    pub wk: usize,
    pub wv: usize,
    pub wo: usize,
    pub bo: usize,
    pub ada_mlp: AdaLayout,
    pub w1: usize,
    pub b1: usize,
    pub w2: usize,
    pub b2: usize,
}

/// Positions of each weight inside the flat parameter list.
#[derive(Debug, Clone, PartialEq)]
pub struct Layout {
    pub w_in: usize,
    pub b_in: usize,
    /// Learned `[M, W]` position table, present when `cfg.positional`.
    pub pos: Option<usize>,
    pub time_w1: usize,
    pub time_b1: usize,
    pub time_w2: usize,
    pub time_b2: usize,
    pub class_table: Option<usize>,
    pub blocks: Vec<BlockLayout>,
    pub ada_out: AdaLayout,
    pub w_out: usize,
    pub b_out: usize,
    /// Learned `[M, K]` per-position logit offset, present when `cfg.positional`.
    pub pos_out: Option<usize>,
}

struct LayoutBuilder {
    specs: Vec<(String, Vec<usize>, Init)>,
}

impl LayoutBuilder {
    fn add(&mut self, name: String, shape: &[usize], init: Init) -> usize {
        self.specs.push((name, shape.to_vec(), init));
        self.specs.len() - 1
    }

    fn ada(&mut self, prefix: &str, w: usize) -> AdaLayout {
        AdaLayout {
            wa: self.add(format!("{prefix}.scale.weight"), &[w, w], Init::Zeros),
            ba: self.add(format!("{prefix}.scale.bias"), &[w], Init::Zeros),
            wb: self.add(format!("{prefix}.shift.weight"), &[w, w], Init::Zeros),
            bb: self.add(format!("{prefix}.shift.bias"), &[w], Init::Zeros),
        }
    }
}

fn fan_in(n: usize) -> Init {
    Init::Normal((n as f64).powf(-0.5))
}

fn build_layout(cfg: &DenoiserConfig) -> (Layout, Vec<(String, Vec<usize>, Init)>) {
    let w = cfg.width;
    let hidden = w * cfg.mlp_ratio;
    let mut b = LayoutBuilder { specs: Vec::new() };
    let w_in = b.add("input.weight".into(), &[cfg.embed_dim, w], fan_in(cfg.embed_dim));
    let b_in = b.add("input.bias".into(), &[w], Init::Zeros);
    let pos = cfg
        .positional
        .then(|| b.add("position.embedding".into(), &[cfg.seq_len, w], Init::Positions));
    let time_w1 = b.add("time.fc1.weight".into(), &[w, w], fan_in(w));
    let time_b1 = b.add("time.fc1.bias".into(), &[w], Init::Zeros);
    let time_w2 = b.add("time.fc2.weight".into(), &[w, w], fan_in(w));
    let time_b2 = b.add("time.fc2.bias".into(), &[w], Init::Zeros);
    let class_table = (cfg.num_classes > 0)
        .then(|| b.add("class.embedding".into(), &[cfg.num_classes + 1, w], Init::Normal(1.0)));
    let blocks = (0..cfg.layers)
        .map(|i| {
            let p = format!("block{i}");
            BlockLayout {
                ada_attn: b.ada(&format!("{p}.ada_attn"), w),
                wq: b.add(format!("{p}.attn.q"), &[w, w], fan_in(w)),
                wk: b.add(format!("{p}.attn.k"), &[w, w], fan_in(w)),
                wv: b.add(format!("{p}.attn.v"), &[w, w], fan_in(w)),
                wo: b.add(format!("{p}.attn.out.weight"), &[w, w], fan_in(w)),
                bo: b.add(format!("{p}.attn.out.bias"), &[w], Init::Zeros),
                ada_mlp: b.ada(&format!("{p}.ada_mlp"), w),
                w1: b.add(format!("{p}.mlp.fc1.weight"), &[w, hidden], fan_in(w)),
                b1: b.add(format!("{p}.mlp.fc1.bias"), &[hidden], Init::Zeros),
                w2: b.add(format!("{p}.mlp.fc2.weight"), &[hidden, w], fan_in(hidden)),
                b2: b.add(format!("{p}.mlp.fc2.bias"), &[w], Init::Zeros),
            }
        })
        .collect();
    let ada_out = b.ada("ada_out", w);
    let w_out = b.add("output.weight".into(), &[w, cfg.categories], fan_in(w));
    let b_out = b.add("output.bias".into(), &[cfg.categories], Init::Zeros);
    let pos_out = cfg
        .positional
        .then(|| b.add("output.position_bias".into(), &[cfg.seq_len, cfg.categories], Init::Zeros));
    let layout = Layout {
        w_in,
        b_in,
        pos,
        time_w1,
        time_b1,
        time_w2,
        time_b2,
        class_table,
        blocks,
        ada_out,
        w_out,
        b_out,
        pos_out,
    };
    (layout, b.specs)
}

/// Named, ordered parameter tensors.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamSet<T> {
    pub names: Vec<String>,
    pub tensors: Vec<Tensor<T>>,
}

impl<T: Scalar> ParamSet<T> {
    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn numel(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    pub fn bind<'g>(&self, g: &'g Graph<T>, trainable: bool) -> Vec<Var<'g, T>> {
        self.tensors
            .iter()
            .map(|t| if trainable { g.param(t) } else { g.constant_tensor(t) })
            .collect()
    }

    pub fn frozen_copy(&self) -> Self {
        let mut out = self.clone();
        out.tensors.iter_mut().for_each(|t| t.set_requires_grad(false));
        out
    }
}

/// Sinusoidal features `[sin(x f_0..), cos(x f_0..)]` with geometric frequencies.
pub fn sinusoid(x: f64, width: usize) -> Vec<f64> {
    let half = width / 2;
    let mut out = vec![0.0; width];
    for i in 0..half {
        let freq = (-(10_000f64).ln() * i as f64 / half as f64).exp();
        out[i] = (x * freq).sin();
        out[half + i] = (x * freq).cos();
    }
    out
}

/// Time features; `t` in `[0, 1]` is scaled by 1000 before the sinusoids.
pub fn time_embed(t: f64, width: usize) -> Vec<f64> {
    sinusoid(1000.0 * t, width)
}

/// Adaptive layer norm: `(1 + cond W_a + b_a) LayerNorm(h) + cond W_b + b_b`.
///
/// `h` is `[G*rows, W]`, `cond` is `[G, C]`; each group of `rows` rows shares
/// one condition row.
pub fn adaln<'g, T: Scalar>(
    h: Var<'g, T>,
    cond: Var<'g, T>,
    wa: Var<'g, T>,
    ba: Var<'g, T>,
    wb: Var<'g, T>,
    bb: Var<'g, T>,
    rows: usize,
) -> Result<Var<'g, T>> {
    let a = cond.matmul(wa)?.add_tiled(ba)?;
    let b = cond.matmul(wb)?.add_tiled(bb)?;
    h.layer_norm()?.group_mul(a.add_scalar(T::one()), rows)?.group_add(b, rows)
}

/// `[R, K] x [K, D]` average of the first `K` codebook rows weighted by `probs`.
pub fn predicted_embedding<'g, T: Scalar>(probs: Var<'g, T>, table: Var<'g, T>) -> Result<Var<'g, T>> {
    let shape = probs.shape();
    let k = *shape.last().expect("non-empty");
    let bad_row = probs.with_value(|p| {
        p.chunks_exact(k)
            .position(|r| (r.iter().map(|v| v.f64()).sum::<f64>() - 1.0).abs() > 1e-5)
    });
    if let Some(r) = bad_row {
        return Err(Error::contract(format!("probability row {r} does not sum to 1")));
    }
    probs.matmul(table.slice_rows(0, k)?)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Denoiser<T> {
    pub cfg: DenoiserConfig,
    pub layout: Layout,
    pub params: ParamSet<T>,
}

impl<T: Scalar> Denoiser<T> {
    pub fn new(cfg: DenoiserConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let (layout, specs) = build_layout(&cfg);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut names = Vec::with_capacity(specs.len());
        let mut tensors = Vec::with_capacity(specs.len());
        for (name, shape, init) in specs {
            let t = match init {
                Init::Zeros => Tensor::zeros(&shape),
                Init::Normal(std) => Tensor::from_fn(&shape, |_| T::c(rng.sample::<f64, _>(StandardNormal) * std)),
                Init::Positions => {
                    let data = (0..shape[0]).flat_map(|i| sinusoid(i as f64, shape[1])).map(T::c).collect();
                    Tensor::new(shape.clone(), data)?
                }
            };
            names.push(name);
            tensors.push(t.with_grad());
        }
        Ok(Denoiser {
            cfg,
            layout,
            params: ParamSet { names, tensors },
        })
    }

    /// Expected `(name, shape)` table for a config, in parameter order.
    pub fn param_shapes(cfg: &DenoiserConfig) -> Vec<(String, Vec<usize>)> {
        build_layout(cfg).1.into_iter().map(|(n, s, _)| (n, s)).collect()
    }

    pub fn from_params(cfg: DenoiserConfig, params: ParamSet<T>) -> Result<Self> {
        cfg.validate()?;
        let (layout, specs) = build_layout(&cfg);
        if specs.len() != params.len() {
            return Err(Error::contract(format!(
                "expected {} parameter tensors, got {}",
                specs.len(),
                params.len()
            )));
        }
        for ((name, shape, _), (pn, t)) in specs.iter().zip(params.names.iter().zip(&params.tensors)) {
            if name != pn || shape.as_slice() != t.shape() {
                return Err(Error::Dimension {
                    op: "denoiser parameters",
                    lhs: shape.clone(),
                    rhs: t.shape().to_vec(),
                });
            }
        }
        Ok(Denoiser { cfg, layout, params })
    }

    /// Logits `[B*M, K]` for `z` of shape `[B*M, D]` with one time (and
    /// optionally one class) per sequence. `dropout_rng` switches on training
    /// mode; `None` is deterministic evaluation.
    #[allow(clippy::too_many_arguments)]
    pub fn forward<'g>(
        &self,
        p: &[Var<'g, T>],
        z: Var<'g, T>,
        times: &[f64],
        classes: Option<&[usize]>,
        mut dropout_rng: Option<&mut dyn RngCore>,
    ) -> Result<Var<'g, T>> {
        let cfg = &self.cfg;
        let g = z.graph();
        let batch = times.len();
        let m = cfg.seq_len;
        let w = cfg.width;
        let heads = cfg.heads;
        let dh = w / heads;
        let zshape = z.shape();
        if batch == 0 || zshape != [batch * m, cfg.embed_dim] {
            return Err(Error::Dimension {
                op: "denoiser input",
                lhs: zshape,
                rhs: vec![batch * m, cfg.embed_dim],
            });
        }
        if let Some(bad) = z.with_value(|v| v.iter().position(|x| !x.is_finite())) {
            return Err(Error::numeric("denoiser input", format!("non-finite entry at {bad}")));
        }
        let l = &self.layout;

        // condition: time MLP plus class embedding, one row per sequence
        let tfeat: Vec<T> = times.iter().flat_map(|&t| time_embed(t, w)).map(T::c).collect();
        let tfeat = g.constant(&[batch, w], tfeat)?;
        let mut cond = tfeat
            .matmul(p[l.time_w1])?
            .add_tiled(p[l.time_b1])?
            .silu()
            .matmul(p[l.time_w2])?
            .add_tiled(p[l.time_b2])?;
        if let Some(ct) = l.class_table {
            let null = cfg.num_classes;
            let ids: Vec<usize> = match classes {
                Some(c) if c.len() != batch => {
                    return Err(Error::Dimension {
                        op: "class ids",
                        lhs: vec![c.len()],
                        rhs: vec![batch],
                    })
                }
                Some(c) => c.to_vec(),
                None => vec![null; batch],
            };
            if let Some((position, &id)) = ids.iter().enumerate().find(|(_, &id)| id > null) {
                return Err(Error::Index {
                    position,
                    id,
                    limit: null + 1,
                });
            }
            cond = cond.add(p[ct].embedding(&ids)?)?;
        }
        let cond = cond.silu();

        let mut h = z.matmul(p[l.w_in])?.add_tiled(p[l.b_in])?;
        if let Some(pos) = l.pos {
            h = h.add_tiled(p[pos])?;
        }

        let scale = T::c(1.0 / (dh as f64).sqrt());
        for (li, blk) in l.blocks.iter().enumerate() {
            let a = &blk.ada_attn;
            let x = adaln(h, cond, p[a.wa], p[a.ba], p[a.wb], p[a.bb], m)?;
            let q = x.matmul(p[blk.wq])?.split_heads(batch, m, heads)?;
            let k = x.matmul(p[blk.wk])?.split_heads(batch, m, heads)?;
            let v = x.matmul(p[blk.wv])?.split_heads(batch, m, heads)?;
            let mut attn = q.bmm(k, true)?.scale(scale).softmax_last()?;
            if let Some(rng) = dropout_rng.as_deref_mut() {
                if cfg.attn_dropout > 0.0 {
                    let keep = 1.0 - cfg.attn_dropout;
                    let inv = T::c(1.0 / keep);
                    let mask: Vec<T> = (0..attn.numel())
                        .map(|_| if rng.gen::<f64>() < keep { inv } else { T::zero() })
                        .collect();
                    attn = attn.mul(g.constant(&attn.shape(), mask)?)?;
                }
            }
            let o = attn
                .bmm(v, false)?
                .merge_heads(batch, heads)?
                .matmul(p[blk.wo])?
                .add_tiled(p[blk.bo])?;
            h = h.add(o)?;

            let a = &blk.ada_mlp;
            let x = adaln(h, cond, p[a.wa], p[a.ba], p[a.wb], p[a.bb], m)?;
            let mlp = x
                .matmul(p[blk.w1])?
                .add_tiled(p[blk.b1])?
                .gelu()
                .matmul(p[blk.w2])?
                .add_tiled(p[blk.b2])?;
            h = h.add(mlp)?;
            if let Some(bad) = h.with_value(|v| v.iter().position(|x| !x.is_finite())) {
                return Err(Error::numeric(
                    format!("denoiser layer {li}"),
                    format!("non-finite activation at {bad}"),
                ));
            }
        }
        let a = &l.ada_out;
        let logits = adaln(h, cond, p[a.wa], p[a.ba], p[a.wb], p[a.bb], m)?
            .matmul(p[l.w_out])?
            .add_tiled(p[l.b_out])?;
        match l.pos_out {
            Some(po) => logits.add_tiled(p[po]),
            None => Ok(logits),
        }
    }

    /// Evaluation-mode logits without gradient tracking, using `params`
    /// (either these weights or an EMA copy with the same layout).
    pub fn logits_with(
        &self,
        params: &ParamSet<T>,
        z: &Tensor<T>,
        times: &[f64],
        classes: Option<&[usize]>,
    ) -> Result<Tensor<T>> {
        let g = Graph::new();
        let p = params.bind(&g, false);
        let zv = g.constant_tensor(z);
        Ok(self.forward(&p, zv, times, classes, None)?.to_tensor())
    }

    pub fn logits(&self, z: &Tensor<T>, times: &[f64], classes: Option<&[usize]>) -> Result<Tensor<T>> {
        self.logits_with(&self.params, z, times, classes)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::codebook::Codebook;

    fn tiny(num_classes: usize, positional: bool) -> DenoiserConfig {
        DenoiserConfig {
            layers: 2,
            heads: 2,
            width: 8,
            embed_dim: 3,
            categories: 5,
            seq_len: 4,
            num_classes,
            attn_dropout: 0.1,
            mlp_ratio: 2,
            positional,
        }
    }

    fn randn(shape: &[usize], seed: u64) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(shape, |_| rng.sample(StandardNormal))
    }

    #[test]
    fn config_validation() {
        let mut c = tiny(0, true);
        c.width = 9;
        assert!(c.validate().is_err());
        assert!(DenoiserConfig::preset("base", 16, 8, 16).unwrap().validate().is_ok());
        assert!(DenoiserConfig::preset("nope", 16, 8, 16).is_err());
    }

    #[test]
    fn time_embed_properties() {
        let a = time_embed(0.3, 16);
        assert_eq!(a, time_embed(0.3, 16));
        let zero = time_embed(0.0, 16);
        assert!(zero[..8].iter().all(|&v| v == 0.0));
        assert!(zero[8..].iter().all(|&v| v == 1.0));
        let b = time_embed(0.7, 16);
        let differ = a.iter().zip(&b).filter(|(x, y)| (*x - *y).abs() > 1e-9).count();
        assert!(differ >= 8);
    }

    #[test]
    fn adaln_cases() {
        let g = Graph::<f64>::new();
        let h = g.leaf(&randn(&[4, 6], 1));
        let cond = g.leaf(&randn(&[2, 6], 2));
        let zw = g.constant(&[6, 6], vec![0.0; 36]).unwrap();
        let zb = g.constant(&[6], vec![0.0; 6]).unwrap();
        let plain = h.layer_norm().unwrap().value();
        assert_eq!(adaln(h, cond, zw, zb, zw, zb, 2).unwrap().value(), plain);

        let c = g.constant(&[6], vec![0.5; 6]).unwrap();
        let out = adaln(h, cond, zw, zb, zw, c, 2).unwrap().value();
        for (o, p) in out.iter().zip(&plain) {
            assert!((o - (p + 0.5)).abs() < 1e-15);
        }

        // loop oracle
        let (wa, ba, wb, bb) = (randn(&[6, 6], 3), randn(&[6], 4), randn(&[6, 6], 5), randn(&[6], 6));
        let out = adaln(h, cond, g.leaf(&wa), g.leaf(&ba), g.leaf(&wb), g.leaf(&bb), 2).unwrap().value();
        let cv = cond.value();
        for r in 0..4 {
            let grp = r / 2;
            for j in 0..6 {
                let mut a = ba.data()[j];
                let mut b = bb.data()[j];
                for i in 0..6 {
                    a += cv[grp * 6 + i] * wa.data()[i * 6 + j];
                    b += cv[grp * 6 + i] * wb.data()[i * 6 + j];
                }
                let expect = (1.0 + a) * plain[r * 6 + j] + b;
                assert!((out[r * 6 + j] - expect).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn forward_shape_and_determinism() {
        let model = Denoiser::<f32>::new(tiny(0, true), 0).unwrap();
        let z = randn(&[8, 3], 9).cast::<f32>();
        let a = model.logits(&z, &[0.2, 0.9], None).unwrap();
        assert_eq!(a.shape(), &[8, 5]);
        assert_eq!(a, model.logits(&z, &[0.2, 0.9], None).unwrap());
        assert!(model.logits(&z, &[0.2], None).is_err());
    }

    #[test]
    fn softmax_rows_of_logits_sum_to_one() {
        let model = Denoiser::<f32>::new(tiny(0, true), 4).unwrap();
        let z = randn(&[4, 3], 1).cast::<f32>();
        let g = Graph::new();
        let p = model.params.bind(&g, false);
        let probs = model.forward(&p, g.constant_tensor(&z), &[0.5], None, None).unwrap().softmax_last().unwrap();
        for row in probs.value().chunks(5) {
            assert!((row.iter().sum::<f32>() - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn position_parameters_follow_the_flag() {
        let with = Denoiser::<f64>::new(tiny(0, true), 1).unwrap();
        let pos = with.layout.pos.expect("position table");
        let table = &with.params.tensors[pos];
        assert_eq!(table.shape(), &[4, 8]);
        assert_eq!(table.row(3), sinusoid(3.0, 8).as_slice());
        let bias = with.layout.pos_out.expect("position logit bias");
        assert_eq!(with.params.tensors[bias].shape(), &[4, 5]);
        assert!(with.params.tensors[bias].data().iter().all(|&v| v == 0.0));

        let without = Denoiser::<f64>::new(tiny(0, false), 1).unwrap();
        assert!(without.layout.pos.is_none() && without.layout.pos_out.is_none());
        assert_eq!(without.params.len() + 2, with.params.len());

        // a per-position logit offset moves only that position's logits
        let mut shifted = with.clone();
        shifted.params.tensors[bias].data_mut()[2 * 5 + 1] = 0.5;
        let z = randn(&[8, 3], 4);
        let a = with.logits(&z, &[0.3, 0.7], None).unwrap();
        let b = shifted.logits(&z, &[0.3, 0.7], None).unwrap();
        for r in 0..8 {
            for k in 0..5 {
                let expect = if r % 4 == 2 && k == 1 { 0.5 } else { 0.0 };
                assert!((b.row(r)[k] - a.row(r)[k] - expect).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn permutation_equivariance_without_positions() {
        let model = Denoiser::<f64>::new(tiny(0, false), 2).unwrap();
        let z = randn(&[4, 3], 3);
        let perm = [2usize, 0, 3, 1];
        let zp = Tensor::from_fn(&[4, 3], |i| z.data()[perm[i / 3] * 3 + i % 3]);
        let a = model.logits(&z, &[0.4], None).unwrap();
        let b = model.logits(&zp, &[0.4], None).unwrap();
        for (r, &src) in perm.iter().enumerate() {
            for k in 0..5 {
                assert!((b.row(r)[k] - a.row(src)[k]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn class_changes_logits_with_nonzero_projection() {
        let mut model = Denoiser::<f64>::new(tiny(3, true), 5).unwrap();
        let idx = model.layout.blocks[0].ada_attn.wb;
        model.params.tensors[idx] = randn(&[8, 8], 77).with_grad();
        let z = randn(&[4, 3], 6);
        let a = model.logits(&z, &[0.5], Some(&[0])).unwrap();
        let b = model.logits(&z, &[0.5], Some(&[1])).unwrap();
        assert_ne!(a, b);
        assert!(model.logits(&z, &[0.5], Some(&[4])).is_err());
        // null label is id num_classes and is also the default
        let n = model.logits(&z, &[0.5], Some(&[3])).unwrap();
        assert_eq!(n, model.logits(&z, &[0.5], None).unwrap());
    }

    #[test]
    fn dropout_only_in_training_mode() {
        let model = Denoiser::<f64>::new(tiny(0, true), 8).unwrap();
        let z = randn(&[4, 3], 2);
        let g = Graph::new();
        let p = model.params.bind(&g, false);
        let zv = g.constant_tensor(&z);
        let mut r1 = ChaCha8Rng::seed_from_u64(1);
        let mut r2 = ChaCha8Rng::seed_from_u64(1);
        let a = model.forward(&p, zv, &[0.5], None, Some(&mut r1)).unwrap().value();
        let b = model.forward(&p, zv, &[0.5], None, Some(&mut r2)).unwrap().value();
        let e = model.forward(&p, zv, &[0.5], None, None).unwrap().value();
        assert_eq!(a, b);
        assert_ne!(a, e);
    }

    #[test]
    fn predicted_embedding_cases() {
        let g = Graph::<f64>::new();
        let table = g.constant(&[3, 2], vec![1.0, 0.0, 0.0, 1.0, 9.0, 9.0]).unwrap();
        let onehot = g.constant(&[1, 2], vec![0.0, 1.0]).unwrap();
        assert_eq!(predicted_embedding(onehot, table).unwrap().value(), vec![0.0, 1.0]);
        let uniform = g.constant(&[1, 2], vec![0.5, 0.5]).unwrap();
        assert_eq!(predicted_embedding(uniform, table).unwrap().value(), vec![0.5, 0.5]);
        let bad = g.constant(&[1, 2], vec![0.5, 0.6]).unwrap();
        assert!(matches!(predicted_embedding(bad, table), Err(Error::Contract(_))));

        let cb = Codebook::<f64>::init_gaussian(5, 3, 1).unwrap();
        let logits = randn(&[4, 5], 3);
        let probs = g.leaf(&logits).softmax_last().unwrap();
        let t = g.leaf(&cb.table);
        let out = predicted_embedding(probs, t).unwrap().value();
        let pv = probs.value();
        for i in 0..4 {
            for d in 0..3 {
                let mut s = 0.0;
                let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
                for k in 0..5 {
                    s += pv[i * 5 + k] * cb.table.row(k)[d];
                    lo = lo.min(cb.table.row(k)[d]);
                    hi = hi.max(cb.table.row(k)[d]);
                }
                assert!((out[i * 3 + d] - s).abs() < 1e-12);
                assert!(out[i * 3 + d] >= lo - 1e-12 && out[i * 3 + d] <= hi + 1e-12);
            }
        }
    }

    #[test]
    fn param_table_round_trip() {
        let cfg = tiny(2, true);
        let model = Denoiser::<f32>::new(cfg.clone(), 1).unwrap();
        let shapes = Denoiser::<f32>::param_shapes(&cfg);
        assert_eq!(shapes.len(), model.params.len());
        let again = Denoiser::from_params(cfg, model.params.clone()).unwrap();
        assert_eq!(again, model);
    }
}
