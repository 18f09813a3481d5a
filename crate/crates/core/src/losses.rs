//! Training objectives and likelihood diagnostics. Every trained loss is
//! mean-reduced over tokens so the default weights carry across sequence
//! lengths and batch sizes.

use crate::autodiff::Var;
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::schedule::Schedule;

/// Default weight of the simplified diffusion loss.
pub const DEFAULT_BETA_DM: f64 = 0.005;
/// Default weight of the consistency-matching loss.
pub const DEFAULT_BETA_CM: f64 = 1.0;

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossBreakdown {
    pub recon: f64,
    pub dm: f64,
    pub cm: f64,
    pub total: f64,
    pub vlb_diffusion: f64,
    pub prior_kl: f64,
}

/// Mean negative log-probability of the true token per row of `logits`.
pub fn recon_loss<'g, T: Scalar>(logits: Var<'g, T>, tokens: &[usize]) -> Result<Var<'g, T>> {
    Ok(logits.log_softmax_last()?.gather_last(tokens)?.mean().scale(-T::one()))
}

/// Mean squared error over all coordinates.
pub fn diffusion_loss<'g, T: Scalar>(psi: Var<'g, T>, psi_hat: Var<'g, T>) -> Result<Var<'g, T>> {
    Ok(psi.sub(psi_hat)?.square()?.mean())
}

fn same_len<T>(a: &[T], b: &[T], op: &'static str) -> Result<()> {
    if a.len() != b.len() {
        return Err(Error::Dimension {
            op,
            lhs: vec![a.len()],
            rhs: vec![b.len()],
        });
    }
    Ok(())
}

/// Single-sample estimate `-1/2 SNR'(t) ||psi - psi_hat||^2`; nonnegative.
pub fn vlb_diffusion_loss<T: Scalar>(psi: &[T], psi_hat: &[T], t: f64, schedule: &Schedule) -> Result<f64> {
    same_len(psi, psi_hat, "vlb_diffusion_loss")?;
    let sse: f64 = psi.iter().zip(psi_hat).map(|(a, b)| (a.f64() - b.f64()).powi(2)).sum();
    Ok(-0.5 * schedule.snr_prime(t) * sse)
}

/// Mean over rows of `KL(softmax(teacher) || softmax(student))`.
///
/// The teacher is detached: no gradient reaches whatever produced it.
pub fn cm_loss<'g, T: Scalar>(teacher_logits: Var<'g, T>, student_logits: Var<'g, T>) -> Result<Var<'g, T>> {
    let ts = teacher_logits.shape();
    let ss = student_logits.shape();
    if ts != ss {
        return Err(Error::Dimension {
            op: "cm_loss",
            lhs: ts,
            rhs: ss,
        });
    }
    let k = *ts.last().expect("non-empty shape");
    let g = student_logits.graph();
    let teacher_logp = teacher_logits.detach().log_softmax_last()?.value();
    let probs: Vec<T> = teacher_logp.iter().map(|v| v.exp()).collect();
    let rows = probs.len() / k;
    let neg_entropy: f64 = probs
        .iter()
        .zip(&teacher_logp)
        .map(|(p, lp)| p.f64() * lp.f64())
        .sum();
    if !neg_entropy.is_finite() {
        return Err(Error::numeric("cm_loss", "teacher probabilities are not finite"));
    }
    let p = g.constant(&ts, probs)?;
    let cross = student_logits.log_softmax_last()?.mul(p)?.sum();
    Ok(cross
        .scale(T::c(-1.0 / rows as f64))
        .add_scalar(T::c(neg_entropy / rows as f64)))
}

/// `KL(N(alpha_1 psi, sigma_1^2 I) || N(0, I))` summed over coordinates at
/// the clamped end time.
pub fn prior_kl<T: Scalar>(psi: &[T], schedule: &Schedule) -> f64 {
    prior_kl_at(psi, schedule.alpha_sigma(schedule.t_max).alpha_sq)
}

/// Prior KL for a variance-preserving end point with signal power `alpha_sq`.
pub fn prior_kl_at<T: Scalar>(psi: &[T], alpha_sq: f64) -> f64 {
    // sigma^2 - 1 - ln sigma^2 with sigma^2 = 1 - alpha^2, computed without cancellation
    let x = -alpha_sq;
    let var_term = x - x.ln_1p();
    psi.iter()
        .map(|v| 0.5 * (alpha_sq * v.f64().powi(2) + var_term))
        .sum()
}

/// Weighted objective `recon + beta_dm * dm + beta_cm * cm`.
pub fn total_loss(recon: f64, dm: f64, cm: f64, beta_dm: f64, beta_cm: f64) -> Result<LossBreakdown> {
    for (name, v) in [("recon", recon), ("dm", dm), ("cm", cm)] {
        if !v.is_finite() {
            return Err(Error::numeric("total_loss", format!("{name} loss is {v}")));
        }
    }
    Ok(LossBreakdown {
        recon,
        dm,
        cm,
        total: recon + beta_dm * dm + beta_cm * cm,
        vlb_diffusion: 0.0,
        prior_kl: 0.0,
    })
}

/// Graph-level counterpart of [`total_loss`].
pub fn weighted_total<'g, T: Scalar>(
    recon: Var<'g, T>,
    dm: Var<'g, T>,
    cm: Var<'g, T>,
    beta_dm: f64,
    beta_cm: f64,
) -> Result<Var<'g, T>> {
    recon.add(dm.scale(T::c(beta_dm)))?.add(cm.scale(T::c(beta_cm)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::Graph;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn kl_brute(p_logits: &[f64], q_logits: &[f64]) -> f64 {
        let norm = |l: &[f64]| {
            let z: f64 = l.iter().map(|v| v.exp()).sum();
            l.iter().map(|v| v.exp() / z).collect::<Vec<_>>()
        };
        let (p, q) = (norm(p_logits), norm(q_logits));
        p.iter().zip(&q).map(|(a, b)| a * (a / b).ln()).sum()
    }

    #[test]
    fn recon_cases() {
        let g = Graph::<f64>::new();
        let uniform = g.constant(&[3, 4], vec![0.2; 12]).unwrap();
        let l = recon_loss(uniform, &[0, 1, 3]).unwrap().item();
        assert!((l - 4f64.ln()).abs() < 1e-12);
        let sharp = g.constant(&[1, 3], vec![0.0, 20.0, 0.0]).unwrap();
        assert!(recon_loss(sharp, &[1]).unwrap().item() < 1e-8);
        assert!(matches!(recon_loss(sharp, &[3]), Err(Error::Index { .. })));

        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let logits: Vec<f64> = (0..15).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let x = [4usize, 0, 2];
        let expect: f64 = (0..3)
            .map(|r| {
                let row = &logits[r * 5..(r + 1) * 5];
                let lse = row.iter().map(|v| v.exp()).sum::<f64>().ln();
                lse - row[x[r]]
            })
            .sum::<f64>()
            / 3.0;
        let got = recon_loss(g.constant(&[3, 5], logits).unwrap(), &x).unwrap().item();
        assert!((got - expect).abs() < 1e-12);
    }

    #[test]
    fn diffusion_cases() {
        let g = Graph::<f64>::new();
        let a = g.constant(&[2, 3], vec![0.5, 1.0, -2.0, 0.0, 3.0, 1.5]).unwrap();
        assert_eq!(diffusion_loss(a, a).unwrap().item(), 0.0);
        let zero = g.constant(&[2, 3], vec![0.0; 6]).unwrap();
        let ones = g.constant(&[2, 3], vec![1.0; 6]).unwrap();
        assert_eq!(diffusion_loss(zero, ones).unwrap().item(), 1.0);
        let expect = [0.5f64, 1.0, -2.0, 0.0, 3.0, 1.5].iter().map(|v| (v - 1.0).powi(2)).sum::<f64>() / 6.0;
        assert!((diffusion_loss(a, ones).unwrap().item() - expect).abs() < 1e-15);
        let short = g.constant(&[3], vec![0.0; 3]).unwrap();
        assert!(diffusion_loss(a, short).is_err());
    }

    #[test]
    fn vlb_cases() {
        let s = Schedule::with_shift(1.0);
        let psi = [0.3f64, -0.2, 0.9, 1.1];
        let hat = [0.1f64, 0.0, 1.0, 1.0];
        assert_eq!(vlb_diffusion_loss(&psi, &psi, 0.4, &s).unwrap(), 0.0);
        let sse: f64 = psi.iter().zip(&hat).map(|(a, b)| (a - b) * (a - b)).sum();
        let got = vlb_diffusion_loss(&psi, &hat, 0.4, &s).unwrap();
        assert!((got - (-0.5 * s.snr_prime(0.4) * sse)).abs() < 1e-12);
        for i in 0..50 {
            assert!(vlb_diffusion_loss(&psi, &hat, i as f64 / 49.0, &s).unwrap() >= 0.0);
        }
        assert!(vlb_diffusion_loss(&psi, &hat[..2], 0.4, &s).is_err());
    }

    #[test]
    fn cm_cases() {
        let g = Graph::<f64>::new();
        let same = g.constant(&[2, 3], vec![0.1, 0.5, -1.0, 2.0, 0.0, 0.3]).unwrap();
        assert!(cm_loss(same, same).unwrap().item().abs() < 1e-15);

        let teacher = g.constant(&[1, 2], vec![0.0, 0.0]).unwrap();
        let student = g.constant(&[1, 2], vec![3f64.ln(), 0.0]).unwrap();
        let brute = 0.5 * (0.5f64 / 0.75).ln() + 0.5 * (0.5f64 / 0.25).ln();
        assert!((cm_loss(teacher, student).unwrap().item() - brute).abs() < 1e-12);

        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..1000 {
            let p: Vec<f64> = (0..6).map(|_| rng.gen_range(-4.0..4.0)).collect();
            let q: Vec<f64> = (0..6).map(|_| rng.gen_range(-4.0..4.0)).collect();
            let expect = (kl_brute(&p[..3], &q[..3]) + kl_brute(&p[3..], &q[3..])) / 2.0;
            let got = cm_loss(g.constant(&[2, 3], p).unwrap(), g.constant(&[2, 3], q).unwrap())
                .unwrap()
                .item();
            assert!(got >= -1e-12);
            assert!((got - expect).abs() < 1e-10);
        }
    }

    #[test]
    fn cm_teacher_gets_no_gradient() {
        let g = Graph::<f64>::new();
        let tt = crate::Tensor::new(vec![1, 3], vec![0.2, 0.1, -0.4]).unwrap().with_grad();
        let st = crate::Tensor::new(vec![1, 3], vec![1.0, 0.1, -0.4]).unwrap().with_grad();
        let (t, s) = (g.leaf(&tt), g.leaf(&st));
        g.backward(cm_loss(t, s).unwrap()).unwrap();
        assert!(g.grad(t).is_none());
        assert!(g.grad(s).is_some());
    }

    #[test]
    fn prior_kl_cases() {
        let s = Schedule::default();
        // scalar Gaussian KL oracle per coordinate
        let psi = [1.0f64, -0.5, 0.25];
        let a = s.alpha_sigma(s.t_max);
        let oracle: f64 = psi
            .iter()
            .map(|v| 0.5 * ((a.alpha * v).powi(2) + a.sigma_sq - 1.0 - a.sigma_sq.ln()))
            .sum();
        let got = prior_kl(&psi, &s);
        assert!((got - oracle).abs() < 1e-12);
        assert!(got < 1e-6);
        assert_eq!(prior_kl_at(&[0.0f32; 4], 0.0), 0.0);
        assert!(prior_kl(&[0.0f32; 4], &s) < 1e-18);
    }

    #[test]
    fn total_cases() {
        let b = total_loss(1.5, 2.0, 0.25, 0.0, 0.0).unwrap();
        assert_eq!(b.total, 1.5);
        let b = total_loss(1.5, 2.0, 0.25, DEFAULT_BETA_DM, DEFAULT_BETA_CM).unwrap();
        assert!((b.total - (1.5 + 0.005 * 2.0 + 0.25)).abs() < 1e-15);
        match total_loss(1.0, f64::NAN, 0.0, 1.0, 1.0) {
            Err(Error::Numeric { detail, .. }) => assert!(detail.contains("dm")),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn mean_reduction_is_invariant_to_duplication() {
        let g = Graph::<f64>::new();
        let l = [0.3, -0.1, 2.0, 0.4, 0.0, -1.0];
        let l2: Vec<f64> = l.iter().chain(l.iter()).copied().collect();
        let a = recon_loss(g.constant(&[2, 3], l.to_vec()).unwrap(), &[0, 2]).unwrap().item();
        let b = recon_loss(g.constant(&[4, 3], l2.clone()).unwrap(), &[0, 2, 0, 2]).unwrap().item();
        assert!((a - b).abs() < 1e-15);
        let t = g.constant(&[2, 3], vec![0.0; 6]).unwrap();
        let t2 = g.constant(&[4, 3], vec![0.0; 12]).unwrap();
        let a = cm_loss(t, g.constant(&[2, 3], l.to_vec()).unwrap()).unwrap().item();
        let b = cm_loss(t2, g.constant(&[4, 3], l2).unwrap()).unwrap().item();
        assert!((a - b).abs() < 1e-15);
    }
}
