//! Per-joint action distributions: a 3-way categorical for skeleton edits
//! and diagonal Gaussians with a shared, state-independent log-std.

use rand::Rng;
use rand_distr::StandardNormal;

/// `ln(2 * pi)`.
pub const LN_2PI: f64 = 1.837_877_066_409_345_5;

pub fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|l| (l - max).exp()).sum::<f64>().ln();
    logits.iter().map(|l| l - lse).collect()
}

pub fn categorical_entropy(logp: &[f64]) -> f64 {
    -logp.iter().map(|lp| lp.exp() * lp).sum::<f64>()
}

/// Index with the largest logit; ties go to the lowest index.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate().skip(1) {
        if *v > values[best] {
            best = i;
        }
    }
    best
}

pub fn sample_categorical<R: Rng + ?Sized>(logp: &[f64], rng: &mut R) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, lp) in logp.iter().enumerate() {
        acc += lp.exp();
        if u < acc {
            return i;
        }
    }
    logp.len() - 1
}

pub fn gaussian_log_prob(a: &[f64], mean: &[f64], log_std: &[f64]) -> f64 {
    a.iter()
        .zip(mean)
        .zip(log_std)
        .map(|((a, m), ls)| {
            let z = (a - m) * (-ls).exp();
            -0.5 * z * z - ls - 0.5 * LN_2PI
        })
        .sum()
}

/// Entropy of one diagonal Gaussian: `sum_d (0.5 ln(2 pi e) + ln sigma_d)`.
pub fn gaussian_entropy(log_std: &[f64]) -> f64 {
    log_std.iter().map(|ls| 0.5 * (LN_2PI + 1.0) + ls).sum()
}

pub fn sample_gaussian<R: Rng + ?Sized>(mean: &[f64], log_std: &[f64], rng: &mut R) -> Vec<f64> {
    mean.iter()
        .zip(log_std)
        .map(|(m, ls)| {
            let eps: f64 = rng.sample(StandardNormal);
            m + ls.exp() * eps
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn uniform_logits() {
        let lp = log_softmax(&[0.0, 0.0, 0.0]);
        for v in &lp {
            assert!((v.exp() - 1.0 / 3.0).abs() < 1e-15);
        }
        assert!((categorical_entropy(&lp) - 3f64.ln()).abs() < 1e-15);
        assert_eq!(argmax(&[0.0, 0.0, 0.0]), 0);
        assert_eq!(argmax(&[0.0, 1.0, 1.0]), 1);
    }

    #[test]
    fn gaussian_entropy_closed_form() {
        let ls = [0.1f64.ln(); 4];
        let expected = 0.5 * 4.0 * (2.0 * std::f64::consts::PI * std::f64::consts::E * 0.01).ln();
        assert!((gaussian_entropy(&ls) - expected).abs() < 1e-12);
    }

    #[test]
    fn gaussian_density_at_mean() {
        let lp = gaussian_log_prob(&[0.3], &[0.3], &[0.0]);
        assert!((lp + 0.5 * LN_2PI).abs() < 1e-15);
    }

    #[test]
    fn categorical_sampling_frequencies() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let lp = log_softmax(&[0.0, 0.0, 0.0]);
        let mut counts = [0usize; 3];
        for _ in 0..30_000 {
            counts[sample_categorical(&lp, &mut rng)] += 1;
        }
        for c in counts {
            assert!((c as f64 / 30_000.0 - 1.0 / 3.0).abs() < 0.015);
        }
    }
}
