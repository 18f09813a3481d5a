//! Synthetic token distributions with exact likelihoods and marginals.

use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DataKind {
    Factorized,
    MarkovGrid,
    TemplateMixture,
}

impl FromStr for DataKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "factorized" => Ok(DataKind::Factorized),
            "markov-grid" => Ok(DataKind::MarkovGrid),
            "template-mixture" => Ok(DataKind::TemplateMixture),
            other => Err(Error::Config(format!("unknown data kind {other:?}"))),
        }
    }
}

/// Recipe for a random synthetic spec. `sharpness` scales the Gaussian
/// logits behind every probability row: 0 is uniform, larger is peakier.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub kind: DataKind,
    pub seq_len: usize,
    pub categories: usize,
    pub sharpness: f64,
    #[serde(default)]
    pub templates: usize,
    #[serde(default)]
    pub corruption: f64,
    pub seed: u64,
}

impl DataConfig {
    /// 4x4 grid of 8 categories.
    pub fn desk() -> Self {
        DataConfig {
            kind: DataKind::Factorized,
            seq_len: 16,
            categories: 8,
            sharpness: 1.5,
            templates: 0,
            corruption: 0.0,
            seed: 17,
        }
    }

    /// Small enough for exact joint enumeration (4^6 sequences).
    pub fn enumerable() -> Self {
        DataConfig {
            seq_len: 6,
            categories: 4,
            sharpness: 2.0,
            ..Self::desk()
        }
    }

    pub fn markov() -> Self {
        DataConfig {
            kind: DataKind::MarkovGrid,
            sharpness: 2.5,
            ..Self::desk()
        }
    }

    pub fn templates() -> Self {
        DataConfig {
            kind: DataKind::TemplateMixture,
            templates: 4,
            corruption: 0.2,
            ..Self::desk()
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "desk" => Ok(Self::desk()),
            "enumerable" => Ok(Self::enumerable()),
            "markov" => Ok(Self::markov()),
            "templates" => Ok(Self::templates()),
            other => Err(Error::Config(format!("unknown data preset {other:?}"))),
        }
    }

    /// Class labels the spec provides (template index), or 0.
    pub fn num_classes(&self) -> usize {
        match self.kind {
            DataKind::TemplateMixture => self.templates,
            _ => 0,
        }
    }

    pub fn build(&self) -> Result<SyntheticSpec> {
        let (m, k) = (self.seq_len, self.categories);
        if m == 0 || k < 2 {
            return Err(Error::Config(format!("data needs M >= 1 and K >= 2, got M={m} K={k}")));
        }
        if !self.sharpness.is_finite() || self.sharpness < 0.0 {
            return Err(Error::Config(format!("sharpness must be >= 0, got {}", self.sharpness)));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let row = |rng: &mut ChaCha8Rng| -> Vec<f64> {
            let logits: Vec<f64> = (0..k).map(|_| self.sharpness * rng.sample::<f64, _>(StandardNormal)).collect();
            let mx = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let w: Vec<f64> = logits.iter().map(|l| (l - mx).exp()).collect();
            let z: f64 = w.iter().sum();
            w.into_iter().map(|x| x / z).collect()
        };
        let law = match self.kind {
            DataKind::Factorized => Law::Factorized {
                rows: (0..m).map(|_| row(&mut rng)).collect(),
            },
            DataKind::MarkovGrid => Law::Markov {
                initial: row(&mut rng),
                transition: (0..k).map(|_| row(&mut rng)).collect(),
            },
            DataKind::TemplateMixture => {
                if self.templates == 0 {
                    return Err(Error::Config("template-mixture needs templates >= 1".into()));
                }
                Law::Templates {
                    weights: vec![1.0 / self.templates as f64; self.templates],
                    templates: (0..self.templates)
                        .map(|_| (0..m).map(|_| rng.gen_range(0..k)).collect())
                        .collect(),
                    corruption: self.corruption,
                }
            }
        };
        SyntheticSpec::new(m, k, law)
    }
}

/// Exact generative law of a synthetic spec.
#[derive(Debug, Clone, PartialEq)]
pub enum Law {
    /// Independent positions.
    Factorized { rows: Vec<Vec<f64>> },
    /// First-order chain over positions in raster order.
    Markov { initial: Vec<f64>, transition: Vec<Vec<f64>> },
    /// Pick template `c` (the class), then resample each token uniformly
    /// with probability `corruption`.
    Templates {
        weights: Vec<f64>,
        templates: Vec<Vec<usize>>,
        corruption: f64,
    },
}


#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSpec {
    pub seq_len: usize,
    pub categories: usize,
    pub law: Law,
}

/// Token sequences plus optional class ids, one per sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub tokens: Vec<Vec<usize>>,
    pub classes: Option<Vec<usize>>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn flat_tokens(&self) -> Vec<usize> {
        self.tokens.concat()
    }
}

fn check_row(row: &[f64], k: usize, what: &str) -> Result<()> {
    let sum: f64 = row.iter().sum();
    if row.len() != k || row.iter().any(|p| !(*p >= 0.0)) || (sum - 1.0).abs() > 1e-9 {
        return Err(Error::Config(format!("{what} is not a probability row over {k} categories")));
    }
    Ok(())
}

fn draw<R: Rng + ?Sized>(row: &[f64], rng: &mut R) -> usize {
    let mut u: f64 = rng.gen();
    for (j, p) in row.iter().enumerate() {
        if u < *p {
            return j;
        }
        u -= p;
    }
    row.iter().rposition(|&p| p > 0.0).unwrap_or(0)
}

impl SyntheticSpec {
    pub fn new(seq_len: usize, categories: usize, law: Law) -> Result<Self> {
        let k = categories;
        match &law {
            Law::Factorized { rows } => {
                if rows.len() != seq_len {
                    return Err(Error::Config(format!("expected {seq_len} rows, got {}", rows.len())));
                }
                for (i, r) in rows.iter().enumerate() {
                    check_row(r, k, &format!("row {i}"))?;
                }
            }
            Law::Markov { initial, transition } => {
                check_row(initial, k, "initial distribution")?;
                if transition.len() != k {
                    return Err(Error::Config("transition matrix must be K x K".into()));
                }
                for (i, r) in transition.iter().enumerate() {
                    check_row(r, k, &format!("transition row {i}"))?;
                }
            }
            Law::Templates {
                weights,
                templates,
                corruption,
            } => {
                check_row(weights, weights.len(), "template weights")?;
                if templates.len() != weights.len()
                    || templates.iter().any(|t| t.len() != seq_len || t.iter().any(|&x| x >= k))
                {
                    return Err(Error::Config("templates must be length-M sequences of valid ids".into()));
                }
                if !(0.0..=1.0).contains(corruption) {
                    return Err(Error::Config(format!("corruption must lie in [0, 1], got {corruption}")));
                }
            }
        }
        Ok(SyntheticSpec {
            seq_len,
            categories,
            law,
        })
    }

    pub fn num_classes(&self) -> usize {
        match &self.law {
            Law::Templates { weights, .. } => weights.len(),
            _ => 0,
        }
    }

    fn draw_one<R: Rng + ?Sized>(&self, rng: &mut R) -> (Vec<usize>, Option<usize>) {
        let k = self.categories;
        match &self.law {
            Law::Factorized { rows } => (rows.iter().map(|r| draw(r, rng)).collect(), None),
            Law::Markov { initial, transition } => {
                let mut seq = Vec::with_capacity(self.seq_len);
                seq.push(draw(initial, rng));
                for i in 1..self.seq_len {
                    let prev = seq[i - 1];
                    seq.push(draw(&transition[prev], rng));
                }
                (seq, None)
            }
            Law::Templates {
                weights,
                templates,
                corruption,
            } => {
                let c = draw(weights, rng);
                let seq = templates[c]
                    .iter()
                    .map(|&x| if rng.gen::<f64>() < *corruption { rng.gen_range(0..k) } else { x })
                    .collect();
                (seq, Some(c))
            }
        }
    }

    /// `batch` i.i.d. sequences; class ids are present iff the spec has classes.
    pub fn gen_batch<R: Rng + ?Sized>(&self, batch: usize, rng: &mut R) -> Batch {
        let mut tokens = Vec::with_capacity(batch);
        let mut classes = Vec::new();
        for _ in 0..batch {
            let (seq, c) = self.draw_one(rng);
            tokens.push(seq);
            classes.extend(c);
        }
        Batch {
            tokens,
            classes: (self.num_classes() > 0).then_some(classes),
        }
    }

    /// Exact `ln p(tokens)`; `-inf` for sequences outside the support.
    pub fn true_logprob(&self, tokens: &[usize]) -> Result<f64> {
        if tokens.len() != self.seq_len {
            return Err(Error::Dimension {
                op: "true_logprob",
                lhs: vec![tokens.len()],
                rhs: vec![self.seq_len],
            });
        }
        if let Some((position, &id)) = tokens.iter().enumerate().find(|(_, &x)| x >= self.categories) {
            return Err(Error::Index {
                position,
                id,
                limit: self.categories,
            });
        }
        let k = self.categories as f64;
        Ok(match &self.law {
            Law::Factorized { rows } => rows.iter().zip(tokens).map(|(r, &x)| r[x].ln()).sum(),
            Law::Markov { initial, transition } => {
                initial[tokens[0]].ln() + tokens.windows(2).map(|w| transition[w[0]][w[1]].ln()).sum::<f64>()
            }
            Law::Templates {
                weights,
                templates,
                corruption,
            } => {
                let p: f64 = weights
                    .iter()
                    .zip(templates)
                    .map(|(w, tpl)| {
                        w * tpl
                            .iter()
                            .zip(tokens)
                            .map(|(&a, &b)| (1.0 - corruption) * f64::from(u8::from(a == b)) + corruption / k)
                            .product::<f64>()
                    })
                    .sum();
                p.ln()
            }
        })
    }

    /// Exact per-position marginals, `M` rows of `K`.
    pub fn marginals(&self) -> Vec<Vec<f64>> {
        let k = self.categories;
        match &self.law {
            Law::Factorized { rows } => rows.clone(),
            Law::Markov { initial, transition } => {
                let mut out = vec![initial.clone()];
                for _ in 1..self.seq_len {
                    let prev = out.last().expect("non-empty");
                    let next = (0..k).map(|j| (0..k).map(|i| prev[i] * transition[i][j]).sum()).collect();
                    out.push(next);
                }
                out
            }
            Law::Templates {
                weights,
                templates,
                corruption,
            } => (0..self.seq_len)
                .map(|pos| {
                    let mut row = vec![corruption / k as f64; k];
                    for (w, tpl) in weights.iter().zip(templates) {
                        row[tpl[pos]] += w * (1.0 - corruption);
                    }
                    row
                })
                .collect(),
        }
    }

    /// Size of the sequence space, if it fits in `u64`.
    pub fn support_size(&self) -> Option<u64> {
        (self.categories as u64).checked_pow(self.seq_len as u32)
    }
}

/// Decodes index `i` of the lexicographic enumeration of `K^M` sequences
/// (first position most significant).
pub fn sequence_at(mut i: u64, seq_len: usize, categories: usize) -> Vec<usize> {
    let mut seq = vec![0; seq_len];
    for slot in seq.iter_mut().rev() {
        *slot = (i % categories as u64) as usize;
        i /= categories as u64;
    }
    seq
}

/// Inverse of [`sequence_at`].
pub fn sequence_index(seq: &[usize], categories: usize) -> u64 {
    seq.iter().fold(0u64, |acc, &x| acc * categories as u64 + x as u64)
}
