//! Chart-label machinery: relaxed categorical sampling, entropies and the
//! mutual-information regularizer. Natural logarithms throughout.

use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::rng::Rng;

/// Floor applied to probabilities before taking logarithms of targets.
pub const PROB_FLOOR: f64 = 1e-12;

fn check_tau(tau: f64) -> Result<()> {
    if tau > 0.0 && tau.is_finite() {
        Ok(())
    } else {
        Err(Error::InvalidArgument(format!("temperature must be positive, got {tau}")))
    }
}

/// `softmax((logits + g) / tau)` row-wise, with `g` supplied.
pub fn gumbel_softmax_with_noise(t: &mut Tape, logits: Var, noise: &Tensor, tau: f64) -> Result<Var> {
    check_tau(tau)?;
    let g = t.constant(noise.clone());
    let s = t.add(logits, g)?;
    let s = t.scale(s, 1.0 / tau);
    Ok(t.softmax(s))
}

/// Relaxed one-hot draw `softmax((logits + g) / tau)` with `g` i.i.d.
/// Gumbel(0, 1). Logits need not be normalized.
pub fn gumbel_softmax_sample(t: &mut Tape, logits: Var, tau: f64, rng: &mut Rng) -> Result<Var> {
    check_tau(tau)?;
    let noise = rng.gumbel_tensor(t.shape(logits));
    gumbel_softmax_with_noise(t, logits, &noise, tau)
}

/// Plain-number relaxed draw for one row of logits.
pub fn gumbel_softmax_row(logits: &[f64], tau: f64, rng: &mut Rng) -> Result<Vec<f64>> {
    check_tau(tau)?;
    let mut y: Vec<f64> = logits.iter().map(|l| (l + rng.gumbel()) / tau).collect();
    crate::autodiff::softmax_in_place(&mut y);
    Ok(y)
}

/// `H[p] = -Σ p log p` with `0 log 0 = 0`.
pub fn entropy(p: &[f64]) -> f64 {
    -p.iter().filter(|&&v| v > 0.0).map(|&v| v * v.ln()).sum::<f64>()
}

/// `H[p|q] = -Σ p log q`. Errors if `q` vanishes where `p` does not.
pub fn cross_entropy(p: &[f64], q: &[f64]) -> Result<f64> {
    if p.len() != q.len() {
        return Err(Error::SizeMismatch {
            what: "cross-entropy support",
            left: p.len(),
            right: q.len(),
        });
    }
    let mut s = 0.0;
    for (&a, &b) in p.iter().zip(q) {
        if a > 0.0 {
            if b <= 0.0 {
                return Err(Error::NonFinite(
                    "cross-entropy: q has zero mass where p is positive".into(),
                ));
            }
            s -= a * b.ln();
        }
    }
    Ok(s)
}

/// `D_KL(p ‖ q)` with `q` floored at [`PROB_FLOOR`].
pub fn kl_floored(p: &[f64], q: &[f64]) -> f64 {
    p.iter()
        .zip(q)
        .filter(|(&a, _)| a > 0.0)
        .map(|(&a, &b)| a * (a.ln() - b.max(PROB_FLOOR).ln()))
        .sum()
}

/// Per-cloud mean of per-point posteriors.
pub fn marginal(posteriors: &[Vec<f64>]) -> Result<Vec<f64>> {
    let first = posteriors.first().ok_or(Error::Empty("posterior batch"))?;
    let mut q = vec![0.0; first.len()];
    for p in posteriors {
        if p.len() != q.len() {
            return Err(Error::SizeMismatch {
                what: "posterior length",
                left: p.len(),
                right: q.len(),
            });
        }
        for (a, b) in q.iter_mut().zip(p) {
            *a += b;
        }
    }
    let m = posteriors.len() as f64;
    q.iter_mut().for_each(|a| *a /= m);
    Ok(q)
}

/// `Σ_j { μ H[q̄] − λ H[π_j] }` over the points of one cloud, where `q̄` is
/// the mean posterior of those points.
pub fn mi_regularizer(posteriors: &[Vec<f64>], mu: f64, lambda: f64) -> Result<f64> {
    let q = marginal(posteriors)?;
    let hm = entropy(&q);
    Ok(posteriors.iter().map(|p| mu * hm - lambda * entropy(p)).sum())
}

/// Empirical mutual information `H[q̄] − mean_j H[π_j]` between chart label
/// and point.
pub fn mutual_information(posteriors: &[Vec<f64>]) -> Result<f64> {
    let q = marginal(posteriors)?;
    let mean_h = posteriors.iter().map(|p| entropy(p)).sum::<f64>() / posteriors.len() as f64;
    Ok(entropy(&q) - mean_h)
}

/// Row entropies `[B, 1]` of `softmax(logits)`, computed stably from logits.
pub fn entropy_from_logits(t: &mut Tape, logits: Var) -> Result<Var> {
    let lp = t.log_softmax(logits);
    let p = t.softmax(logits);
    let pl = t.mul(p, lp)?;
    let s = t.sum_axis(pl, 1)?;
    Ok(t.neg(s))
}

/// Entropy of each row of a probability matrix `[B, n]`, with the
/// logarithm's argument floored at [`PROB_FLOOR`].
pub fn entropy_of_probs(t: &mut Tape, p: Var) -> Result<Var> {
    let c = t.clamp(p, PROB_FLOOR, f64::INFINITY);
    let l = t.log(c);
    let pl = t.mul(p, l)?;
    let s = t.sum_axis(pl, 1)?;
    Ok(t.neg(s))
}

/// Mean posterior per cloud, `[clouds, n]`, from per-point logits stacked
/// cloud by cloud.
pub fn cloud_marginals(t: &mut Tape, logits: Var, clouds: usize, points: usize) -> Result<Var> {
    let n = t.shape(logits)[1];
    let p = t.softmax(logits);
    let p = t.reshape(p, &[clouds, points, n])?;
    let q = t.mean_axis(p, 1)?;
    t.reshape(q, &[clouds, n])
}

/// Tape version of [`mi_regularizer`] summed over `clouds` clouds of
/// `points` points each. Returns a scalar.
pub fn mi_regularizer_tape(
    t: &mut Tape,
    logits: Var,
    clouds: usize,
    points: usize,
    mu: f64,
    lambda: f64,
) -> Result<Var> {
    if clouds == 0 || points == 0 {
        return Err(Error::Empty("posterior batch"));
    }
    let q = cloud_marginals(t, logits, clouds, points)?;
    let hq = entropy_of_probs(t, q)?;
    let hq = t.sum(hq);
    let hq = t.scale(hq, mu * points as f64);
    let hp = entropy_from_logits(t, logits)?;
    let hp = t.sum(hp);
    let hp = t.scale(hp, lambda);
    t.sub(hq, hp)
}

/// Chart-generator objective `Σ_X D_KL(p_K ‖ q̄_X)` with the target `q̄`
/// treated as a constant and floored at [`PROB_FLOOR`].
pub fn chart_generator_kl(t: &mut Tape, generator_logits: Var, target: &Tensor) -> Result<Var> {
    let floored = target.map(|v| v.max(PROB_FLOOR).ln());
    let lq = t.constant(floored);
    let lp = t.log_softmax(generator_logits);
    let p = t.softmax(generator_logits);
    let d = t.sub(lp, lq)?;
    let kl = t.mul(p, d)?;
    Ok(t.sum(kl))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{grad_check, ParamStore};
    use crate::rng::Rng;
    use proptest::prelude::{prop_assert, proptest};

    fn softmax(l: &[f64]) -> Vec<f64> {
        let m = l.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = l.iter().map(|v| (v - m).exp()).collect();
        let s: f64 = e.iter().sum();
        e.iter().map(|v| v / s).collect()
    }

    #[test]
    fn zero_noise_low_temperature_is_one_hot() {
        let store = ParamStore::new();
        let mut t = Tape::new(&store);
        let l = t.constant(Tensor::from_rows(&[[0.1, 0.5, 0.3]]).unwrap());
        let y = gumbel_softmax_with_noise(&mut t, l, &Tensor::zeros(&[1, 3]), 1e-3).unwrap();
        let y = t.value(y).data().to_vec();
        assert!((y[1] - 1.0).abs() < 1e-12 && y[0] < 1e-12 && y[2] < 1e-12);
    }

    #[test]
    fn uniform_logits_zero_noise_is_uniform() {
        let store = ParamStore::new();
        let mut t = Tape::new(&store);
        let l = t.constant(Tensor::full(&[2, 4], 0.7));
        let y = gumbel_softmax_with_noise(&mut t, l, &Tensor::zeros(&[2, 4]), 0.1).unwrap();
        assert!(t.value(y).data().iter().all(|&v| (v - 0.25).abs() < 1e-15));
    }

    #[test]
    fn non_positive_temperature_is_rejected() {
        let store = ParamStore::new();
        let mut t = Tape::new(&store);
        let l = t.constant(Tensor::zeros(&[1, 2]));
        let mut rng = Rng::new(0);
        assert!(gumbel_softmax_sample(&mut t, l, 0.0, &mut rng).is_err());
        assert!(gumbel_softmax_sample(&mut t, l, -1.0, &mut rng).is_err());
    }

    #[test]
    fn argmax_frequencies_match_categorical() {
        let logits = [0.3f64.ln(), 0.5f64.ln(), 0.15f64.ln(), 0.05f64.ln()];
        let probs = softmax(&logits);
        let n = 100_000;
        let rows = Tensor::from_rows(&vec![logits.to_vec(); n]).unwrap();
        let store = ParamStore::new();
        let mut t = Tape::new(&store);
        let l = t.constant(rows);
        let mut rng = Rng::new(7);
        let y = gumbel_softmax_sample(&mut t, l, 0.1, &mut rng).unwrap();
        let mut counts = [0usize; 4];
        for row in t.value(y).data().chunks(4) {
            let k = (0..4).max_by(|&a, &b| row[a].total_cmp(&row[b])).unwrap();
            counts[k] += 1;
        }
        for k in 0..4 {
            let mean = n as f64 * probs[k];
            let sd = (n as f64 * probs[k] * (1.0 - probs[k])).sqrt();
            assert!((counts[k] as f64 - mean).abs() <= 3.0 * sd, "{k}: {} vs {mean}", counts[k]);
        }
    }

    #[test]
    fn relaxed_sample_gradients_at_fixed_noise() {
        let mut rng = Rng::new(8);
        let noise = rng.gumbel_tensor(&[3, 4]);
        let w = rng.normal_tensor(&[3, 4]);
        let store = ParamStore::new();
        let x = rng.normal_tensor(&[3, 4]);
        let err = grad_check(&store, &x, 1e-5, |t, l| {
            let y = gumbel_softmax_with_noise(t, l, &noise, 0.5)?;
            let w = t.constant(w.clone());
            let p = t.mul(y, w)?;
            Ok(t.sum(p))
        })
        .unwrap();
        assert!(err < 1e-4, "{err}");
    }

    #[test]
    fn entropy_examples() {
        assert!((entropy(&[0.25; 4]) - 4f64.ln()).abs() < 1e-15);
        assert_eq!(entropy(&[0.0, 1.0, 0.0]), 0.0);
        let direct = -(0.25 * 0.25f64.ln() + 0.75 * 0.75f64.ln());
        assert!((entropy(&[0.25, 0.75]) - direct).abs() < 1e-15);
    }

    #[test]
    fn cross_entropy_examples() {
        let h = cross_entropy(&[0.5, 0.5], &[0.25, 0.75]).unwrap();
        assert!((h + 0.5 * 0.25f64.ln() + 0.5 * 0.75f64.ln()).abs() < 1e-15);
        assert!((cross_entropy(&[0.2, 0.8], &[0.5, 0.5]).unwrap() - 2f64.ln()).abs() < 1e-15);
        assert!(cross_entropy(&[0.5, 0.5], &[1.0, 0.0]).is_err());
        assert!(cross_entropy(&[1.0, 0.0], &[1.0, 0.0]).is_ok());
    }

    #[test]
    fn mi_regularizer_examples() {
        let n = 4;
        let one_hot: Vec<Vec<f64>> = (0..8)
            .map(|j| (0..n).map(|k| if k == j % n { 1.0 } else { 0.0 }).collect())
            .collect();
        let v = mi_regularizer(&one_hot, 0.3, 1.1).unwrap();
        assert!((v / 8.0 - 0.3 * 4f64.ln()).abs() < 1e-12);

        let uniform = vec![vec![0.25; 4]; 5];
        let v = mi_regularizer(&uniform, 0.3, 1.1).unwrap();
        assert!((v / 5.0 - (0.3 - 1.1) * 4f64.ln()).abs() < 1e-12);

        assert!(mi_regularizer(&[], 1.0, 1.0).is_err());
    }

    #[test]
    fn mi_regularizer_matches_brute_force() {
        let mut rng = Rng::new(9);
        let post: Vec<Vec<f64>> = (0..5)
            .map(|_| softmax(&[rng.normal(), rng.normal(), rng.normal()]))
            .collect();
        let (mu, lambda) = (0.05, 1.0);
        let mut q = [0.0; 3];
        for p in &post {
            for k in 0..3 {
                q[k] += p[k] / 5.0;
            }
        }
        let hq: f64 = -q.iter().map(|v| v * v.ln()).sum::<f64>();
        let mut want = 0.0;
        for p in &post {
            let hp: f64 = -p.iter().map(|v| v * v.ln()).sum::<f64>();
            want += mu * hq - lambda * hp;
        }
        assert!((mi_regularizer(&post, mu, lambda).unwrap() - want).abs() < 1e-12);
    }

    #[test]
    fn tape_regularizer_matches_plain() {
        let mut rng = Rng::new(10);
        let logits = rng.normal_tensor(&[2 * 6, 3]);
        let store = ParamStore::new();
        let mut t = Tape::new(&store);
        let l = t.constant(logits.clone());
        let v = mi_regularizer_tape(&mut t, l, 2, 6, 0.05, 1.0).unwrap();
        let mut want = 0.0;
        for c in 0..2 {
            let post: Vec<Vec<f64>> = (0..6).map(|j| softmax(logits.row(c * 6 + j))).collect();
            want += mi_regularizer(&post, 0.05, 1.0).unwrap();
        }
        assert!((t.value(v).item() - want).abs() < 1e-12);
        let h = entropy_from_logits(&mut t, l).unwrap();
        for r in 0..12 {
            assert!((t.value(h).data()[r] - entropy(&softmax(logits.row(r)))).abs() < 1e-12);
        }
    }

    #[test]
    fn tape_regularizer_gradients() {
        let store = ParamStore::new();
        for seed in 0..10 {
            let mut r2 = Rng::new(seed);
            let x = r2.normal_tensor(&[8, 3]);
            let err = grad_check(&store, &x, 1e-5, |t, l| mi_regularizer_tape(t, l, 2, 4, 0.05, 1.1)).unwrap();
            assert!(err < 1e-4, "{err}");
        }
    }

    #[test]
    fn chart_generator_kl_examples() {
        let store = ParamStore::new();
        let mut rng = Rng::new(12);
        // p_K equal to the target gives zero
        let l = rng.normal_tensor(&[2, 3]);
        let target = Tensor::from_rows(&[softmax(l.row(0)), softmax(l.row(1))]).unwrap();
        let mut t = Tape::new(&store);
        let lv = t.constant(l);
        let kl = chart_generator_kl(&mut t, lv, &target).unwrap();
        assert!(t.value(kl).item().abs() < 1e-12);

        // uniform p_K against a one-hot target with floor
        let n = 4.0f64;
        let target = Tensor::from_rows(&[[1.0, 0.0, 0.0, 0.0]]).unwrap();
        let lv = t.constant(Tensor::zeros(&[1, 4]));
        let kl = chart_generator_kl(&mut t, lv, &target).unwrap();
        let want = (1.0 / n) * ((1.0 / n).ln() - 0.0) + 3.0 * (1.0 / n) * ((1.0 / n).ln() - PROB_FLOOR.ln());
        assert!((t.value(kl).item() - want).abs() < 1e-12);

        // random pairs against direct summation
        let l = rng.normal_tensor(&[3, 5]);
        let q: Vec<Vec<f64>> = (0..3)
            .map(|_| softmax(&(0..5).map(|_| rng.normal()).collect::<Vec<_>>()))
            .collect();
        let target = Tensor::from_rows(&q).unwrap();
        let lv = t.constant(l.clone());
        let kl = chart_generator_kl(&mut t, lv, &target).unwrap();
        let want: f64 = (0..3).map(|r| kl_floored(&softmax(l.row(r)), &q[r])).sum();
        assert!((t.value(kl).item() - want).abs() < 1e-12);
    }

    proptest! {
        #[test]
        fn relaxed_labels_stay_on_simplex(
            logits in proptest::collection::vec(-20.0f64..20.0, 1..8),
            tau in 0.01f64..5.0,
            seed in 0u64..1000,
        ) {
            let mut rng = Rng::new(seed);
            let y = gumbel_softmax_row(&logits, tau, &mut rng).unwrap();
            prop_assert!(y.iter().all(|&v| v >= 0.0));
            prop_assert!((y.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }

        #[test]
        fn empirical_mi_is_nonnegative(
            raw in proptest::collection::vec(proptest::collection::vec(-5.0f64..5.0, 3), 1..20),
            lambda in 0.0f64..3.0,
        ) {
            let post: Vec<Vec<f64>> = raw.iter().map(|l| softmax(l)).collect();
            let m = post.len() as f64;
            let r = mi_regularizer(&post, lambda, lambda).unwrap();
            let mi = mutual_information(&post).unwrap();
            prop_assert!(mi >= -1e-12);
            prop_assert!((r - lambda * m * mi).abs() < 1e-9 * (1.0 + r.abs()));
            let unit = mi_regularizer(&post, 1.0, 1.0).unwrap();
            prop_assert!((r - lambda * unit).abs() < 1e-9 * (1.0 + r.abs()));
        }
    }
}
