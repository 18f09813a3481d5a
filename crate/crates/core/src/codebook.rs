//! Learnable embedding table with a trailing `[mask]` row and an EMA shadow.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::Graph;

#[derive(Debug, Clone, PartialEq)]
pub struct Codebook<T> {
    categories: usize,
    dim: usize,
    pub table: Tensor<T>,
    pub ema_table: Tensor<T>,
}

/// Positions kept (`true`) or replaced with the mask token (`false`).
#[derive(Debug, Clone, PartialEq)]
pub struct DropMask {
    pub bits: Vec<bool>,
    pub rate: f64,
}

impl DropMask {
    pub fn kept(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CollapseMetrics {
    pub mean_norm: f64,
    pub mean_pairwise_distance: f64,
    /// `mean_pairwise_distance / mean_norm`; smaller means more collapsed.
    pub collapse_ratio: f64,
}

impl<T: Scalar> Codebook<T> {
    /// Entries i.i.d. `N(0, D^{-1/2})` (standard deviation `D^{-1/2}`).
    pub fn init_gaussian(categories: usize, dim: usize, seed: u64) -> Result<Self> {
        if categories < 2 || dim < 1 {
            return Err(Error::contract(format!(
                "codebook needs K >= 2 and D >= 1, got K={categories} D={dim}"
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let std = (dim as f64).powf(-0.5);
        let table = Tensor::from_fn(&[categories + 1, dim], |_| {
            T::c(rng.sample::<f64, _>(StandardNormal) * std)
        })
        .with_grad();
        let mut ema_table = table.clone();
        ema_table.set_requires_grad(false);
        Ok(Codebook {
            categories,
            dim,
            table,
            ema_table,
        })
    }

    pub fn from_table(categories: usize, table: Tensor<T>) -> Result<Self> {
        let shape = table.shape().to_vec();
        if shape.len() != 2 || shape[0] != categories + 1 || categories < 2 {
            return Err(Error::Dimension {
                op: "codebook",
                lhs: shape,
                rhs: vec![categories + 1],
            });
        }
        let mut ema_table = table.clone();
        ema_table.set_requires_grad(false);
        Ok(Codebook {
            categories,
            dim: shape[1],
            table: table.with_grad(),
            ema_table,
        })
    }

    pub fn categories(&self) -> usize {
        self.categories
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Id of the `[mask]` row.
    pub fn mask_id(&self) -> usize {
        self.categories
    }

    /// `[M, D]` embeddings of `tokens` from the live or EMA table.
    pub fn embed(&self, tokens: &[usize], use_ema: bool) -> Result<Tensor<T>> {
        let g = Graph::new();
        let table = if use_ema { &self.ema_table } else { &self.table };
        Ok(g.constant_tensor(table).embedding(tokens)?.to_tensor())
    }

    /// `ema <- eta * ema + (1 - eta) * table`.
    pub fn ema_update(&mut self, eta: f64) -> Result<()> {
        ema_blend(&mut self.ema_table, &self.table, eta)
    }

    pub fn collapse_metrics(&self) -> CollapseMetrics {
        collapse_metrics(&self.table, self.categories)
    }
}

pub(crate) fn ema_blend<T: Scalar>(ema: &mut Tensor<T>, live: &Tensor<T>, eta: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&eta) {
        return Err(Error::contract(format!("EMA rate must lie in [0, 1], got {eta}")));
    }
    if ema.shape() != live.shape() {
        return Err(Error::Dimension {
            op: "ema_update",
            lhs: ema.shape().to_vec(),
            rhs: live.shape().to_vec(),
        });
    }
    // incremental form: a shadow that already equals the live value stays bit-exact
    let take = T::c(1.0 - eta);
    for (e, &p) in ema.data_mut().iter_mut().zip(live.data()) {
        *e = *e + take * (p - *e);
    }
    Ok(())
}

/// Metrics over the first `categories` rows of `table` (mask row excluded).
pub fn collapse_metrics<T: Scalar>(table: &Tensor<T>, categories: usize) -> CollapseMetrics {
    let rows: Vec<Vec<f64>> = (0..categories)
        .map(|k| table.row(k).iter().map(|v| v.f64()).collect())
        .collect();
    let mean_norm = rows
        .iter()
        .map(|r| r.iter().map(|v| v * v).sum::<f64>().sqrt())
        .sum::<f64>()
        / categories as f64;
    let mut total = 0.0;
    let mut pairs = 0usize;
    for i in 0..categories {
        for j in i + 1..categories {
            total += rows[i]
                .iter()
                .zip(&rows[j])
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                .sqrt();
            pairs += 1;
        }
    }
    let mean_pairwise_distance = if pairs == 0 { 0.0 } else { total / pairs as f64 };
    let collapse_ratio = if mean_norm > 0.0 {
        mean_pairwise_distance / mean_norm
    } else {
        0.0
    };
    CollapseMetrics {
        mean_norm,
        mean_pairwise_distance,
        collapse_ratio,
    }
}

/// Replaces each position by `mask_id` independently with probability `rate`.
pub fn random_drop<R: Rng + ?Sized>(tokens: &[usize], rate: f64, mask_id: usize, rng: &mut R) -> (Vec<usize>, DropMask) {
    let rate = rate.clamp(0.0, 1.0);
    let bits: Vec<bool> = tokens
        .iter()
        .map(|_| {
            // rate 0 and 1 never consult the rng outcome
            let u: f64 = rng.gen();
            u >= rate
        })
        .collect();
    let dropped = tokens
        .iter()
        .zip(&bits)
        .map(|(&x, &keep)| if keep { x } else { mask_id })
        .collect();
    (dropped, DropMask { bits, rate })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gaussian_init_moments() {
        let cb = Codebook::<f64>::init_gaussian(1023, 256, 7).unwrap();
        let data = cb.table.data();
        let n = data.len() as f64;
        let mean = data.iter().sum::<f64>() / n;
        let std = (data.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
        assert!((std - 0.0625).abs() < 0.0625 * 0.05, "std {std}");
        assert!(mean.abs() < 3.0 * 0.0625 / n.sqrt(), "mean {mean}");
        assert_eq!(cb.table.data(), cb.ema_table.data());
        assert!(cb.table.requires_grad() && !cb.ema_table.requires_grad());
    }

    #[test]
    fn init_is_seeded_and_validated() {
        let a = Codebook::<f32>::init_gaussian(8, 4, 3).unwrap();
        let b = Codebook::<f32>::init_gaussian(8, 4, 3).unwrap();
        assert_eq!(a.table.data(), b.table.data());
        assert!(Codebook::<f32>::init_gaussian(1, 4, 3).is_err());
        assert!(Codebook::<f32>::init_gaussian(4, 0, 3).is_err());
    }

    #[test]
    fn embed_reads_rows() {
        let cb = Codebook::<f32>::init_gaussian(4, 3, 1).unwrap();
        let e = cb.embed(&[2, 4, 2], false).unwrap();
        assert_eq!(e.row(0), cb.table.row(2));
        assert_eq!(e.row(1), cb.table.row(4));
        assert!(matches!(cb.embed(&[5], true), Err(Error::Index { id: 5, .. })));
    }

    #[test]
    fn ema_update_cases() {
        let mut cb = Codebook::<f64>::init_gaussian(3, 2, 1).unwrap();
        let old = cb.ema_table.clone();
        cb.table.data_mut().iter_mut().for_each(|v| *v += 1.0);
        cb.ema_update(1.0).unwrap();
        assert_eq!(cb.ema_table, old);
        cb.ema_update(0.99).unwrap();
        for ((e, o), n) in cb.ema_table.data().iter().zip(old.data()).zip(cb.table.data()) {
            assert!((e - (0.99 * o + 0.01 * n)).abs() < 1e-15);
        }
        cb.ema_update(0.0).unwrap();
        assert_eq!(cb.ema_table.data(), cb.table.data());
        assert!(cb.ema_update(1.5).is_err());
    }

    #[test]
    fn ema_gap_shrinks_geometrically() {
        let mut cb = Codebook::<f64>::init_gaussian(3, 2, 2).unwrap();
        cb.table.data_mut().iter_mut().for_each(|v| *v += 0.5);
        let gap = |cb: &Codebook<f64>| {
            cb.table.data().iter().zip(cb.ema_table.data()).map(|(a, b)| (a - b).abs()).sum::<f64>()
        };
        let mut prev = gap(&cb);
        for _ in 0..10 {
            cb.ema_update(0.99).unwrap();
            let g = gap(&cb);
            assert!((g / prev - 0.99).abs() < 1e-9);
            prev = g;
        }
    }

    #[test]
    fn drop_rates() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let tokens: Vec<usize> = (0..50).map(|i| i % 5).collect();
        let (same, mask) = random_drop(&tokens, 0.0, 5, &mut rng);
        assert_eq!(same, tokens);
        assert!(mask.bits.iter().all(|&b| b));
        let (all, mask) = random_drop(&tokens, 1.0, 5, &mut rng);
        assert!(all.iter().all(|&x| x == 5));
        assert_eq!(mask.kept(), 0);

        let tokens = vec![1usize; 100_000];
        let (dropped, _) = random_drop(&tokens, 0.2, 7, &mut rng);
        let frac = dropped.iter().filter(|&&x| x == 7).count() as f64 / 1e5;
        assert!((frac - 0.2).abs() < 0.01, "{frac}");
        assert!(dropped.iter().all(|&x| x == 1 || x == 7));
    }

    #[test]
    fn collapse_metric_cases() {
        let t = Tensor::<f64>::new(vec![4, 2], vec![1., 2., 1., 2., 1., 2., 9., 9.]).unwrap();
        let m = collapse_metrics(&t, 3);
        assert_eq!(m.mean_pairwise_distance, 0.0);
        assert_eq!(m.collapse_ratio, 0.0);

        let t = Tensor::<f64>::new(vec![4, 3], vec![1., 0., 0., 0., 1., 0., 0., 0., 1., 5., 5., 5.]).unwrap();
        let m = collapse_metrics(&t, 3);
        assert!((m.mean_norm - 1.0).abs() < 1e-15);
        assert!((m.mean_pairwise_distance - 2f64.sqrt()).abs() < 1e-15);
        assert!((m.collapse_ratio - 2f64.sqrt()).abs() < 1e-15);
    }

    #[test]
    fn collapse_metrics_match_double_loop_and_are_scale_free() {
        let cb = Codebook::<f64>::init_gaussian(6, 4, 9).unwrap();
        let m = cb.collapse_metrics();
        let mut dist = Vec::new();
        for i in 0..6 {
            for j in 0..6 {
                if i < j {
                    let d: f64 = (0..4).map(|c| (cb.table.row(i)[c] - cb.table.row(j)[c]).powi(2)).sum();
                    dist.push(d.sqrt());
                }
            }
        }
        let oracle = dist.iter().sum::<f64>() / dist.len() as f64;
        assert!((m.mean_pairwise_distance - oracle).abs() < 1e-12);

        let mut scaled = cb.table.clone();
        scaled.data_mut().iter_mut().for_each(|v| *v *= 37.0);
        let s = collapse_metrics(&scaled, 6);
        assert!((s.collapse_ratio - m.collapse_ratio).abs() < 1e-12);
    }
}
