//! Rounding, step-size quantization, the interval pmf with a quantization
//! step, and the two rounding relaxations (additive uniform noise and
//! stochastic Gumbel annealing).

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Probabilities are clamped to this value before taking logarithms.
pub const PMF_FLOOR: f64 = 1e-9;
/// Fractional parts are kept inside `[EPS, 1 - EPS]` before `atanh`.
pub const FRAC_EPS: f64 = 1e-4;
/// Upper bound on the annealing temperature.
pub const TAU_CAP: f64 = 0.5;

/// Nearest integer, ties away from zero. Used by every quantizer in the crate.
#[inline]
pub fn round_half_away(v: f64) -> i64 {
    v.round() as i64
}

pub fn check_step(delta: f64) -> Result<()> {
    if delta > 0.0 && delta.is_finite() {
        Ok(())
    } else {
        Err(Error::Domain(format!("quantization step must be positive, got {delta}")))
    }
}

pub fn quantize(v: &[f64], delta: f64) -> Result<Vec<i32>> {
    check_step(delta)?;
    Ok(v.iter().map(|&x| round_half_away(x / delta) as i32).collect())
}

pub fn dequantize(s: &[i32], delta: f64) -> Result<Vec<f64>> {
    check_step(delta)?;
    Ok(s.iter().map(|&k| delta * k as f64).collect())
}

/// `F(delta*s + delta/2) - F(delta*s - delta/2)` for each symbol, floored at
/// [`PMF_FLOOR`].
pub fn pmf_delta(cdf: impl Fn(f64) -> f64, s: &[i32], delta: f64) -> Result<Vec<f64>> {
    check_step(delta)?;
    Ok(s.iter()
        .map(|&k| {
            let c = delta * k as f64;
            (cdf(c + 0.5 * delta) - cdf(c - 0.5 * delta)).max(PMF_FLOOR)
        })
        .collect())
}

/// Adds i.i.d. `U(-0.5, 0.5)` noise.
pub fn aun_relax(v: &[f64], rng: &mut impl Rng) -> Vec<f64> {
    v.iter().map(|&x| x + rng.gen_range(-0.5..0.5)).collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SgaConfig {
    pub tau0: f64,
    pub decay: f64,
    pub offset_k: f64,
    pub tau_min: f64,
}

impl Default for SgaConfig {
    fn default() -> Self {
        Self::full_budget()
    }
}

impl SgaConfig {
    pub fn full_budget() -> Self {
        Self {
            tau0: 0.5,
            decay: 1e-3,
            offset_k: 700.0,
            tau_min: 1e-3,
        }
    }

    /// Schedule used when editing is terminated early (50 to 200 iterations).
    pub fn short_budget() -> Self {
        Self {
            offset_k: 100.0,
            ..Self::full_budget()
        }
    }

    /// The full-budget schedule compressed in time so that `iterations`
    /// steps traverse the same temperature range as 2000 steps would.
    pub fn rescaled(iterations: usize) -> Self {
        let r = 2000.0 / iterations.max(1) as f64;
        let base = Self::full_budget();
        Self {
            decay: base.decay * r,
            offset_k: base.offset_k / r,
            ..base
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.tau0 > 0.0 && self.decay > 0.0 && self.tau_min > 0.0 {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid SGA schedule {self:?}")))
        }
    }
}

/// Annealing temperature at iteration `k`; non-increasing in `k`.
pub fn temperature(k: usize, cfg: &SgaConfig) -> f64 {
    let t = cfg.tau0 * (-cfg.decay * (k as f64 - cfg.offset_k)).exp();
    t.min(TAU_CAP).max(cfg.tau_min)
}

fn clamped_frac(f: f64) -> f64 {
    f.clamp(FRAC_EPS, 1.0 - FRAC_EPS)
}

/// Logits `(-atanh(v - floor v) / tau, -atanh(ceil v - v) / tau)`.
fn sga_logits(v: f64, tau: f64) -> (f64, f64) {
    let f = v - v.floor();
    (
        -clamped_frac(f).atanh() / tau,
        -clamped_frac(1.0 - f).atanh() / tau,
    )
}

/// Probabilities of rounding `v` down and up.
pub fn sga_probs(v: f64, tau: f64) -> (f64, f64) {
    if v == v.floor() {
        return (1.0, 0.0);
    }
    let (lf, lc) = sga_logits(v, tau);
    let p_floor = 1.0 / (1.0 + (lc - lf).exp());
    (p_floor, 1.0 - p_floor)
}

/// One relaxed sample together with its derivative with respect to `v`
/// (the Gumbel noise held fixed).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SoftSample {
    pub value: f64,
    pub dvalue: f64,
}

/// Logistic noise `g_ceil - g_floor` for the two-way Gumbel-softmax.
pub fn gumbel_difference(rng: &mut impl Rng) -> f64 {
    let gumbel = |u: f64| -(-u.ln()).ln();
    let a: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
    let b: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
    gumbel(a) - gumbel(b)
}

/// Gumbel-softmax combination of `floor v` and `ceil v` for a fixed noise
/// realization `noise = g_ceil - g_floor`.
pub fn sga_soft(v: f64, tau: f64, noise: f64) -> SoftSample {
    let lo = v.floor();
    let f = v - lo;
    if f == 0.0 {
        return SoftSample { value: v, dvalue: 0.0 };
    }
    let (lf, lc) = sga_logits(v, tau);
    let z = (lc - lf + noise) / tau;
    let w_ceil = sigmoid(z);
    // d(lc - lf)/dv, zero where a fractional part is clamped.
    let fc = 1.0 - f;
    let dlf = if (FRAC_EPS..=1.0 - FRAC_EPS).contains(&f) { -1.0 / (tau * (1.0 - f * f)) } else { 0.0 };
    let dlc = if (FRAC_EPS..=1.0 - FRAC_EPS).contains(&fc) { 1.0 / (tau * (1.0 - fc * fc)) } else { 0.0 };
    let dz = (dlc - dlf) / tau;
    SoftSample {
        value: lo + w_ceil,
        dvalue: w_ceil * (1.0 - w_ceil) * dz,
    }
}

/// Hard Gumbel-max selection between `floor v` and `ceil v`; the soft sample
/// is its tempered relaxation.
pub fn sga_select(v: f64, tau: f64, noise: f64) -> f64 {
    if v == v.floor() {
        return v;
    }
    let (lf, lc) = sga_logits(v, tau);
    if lc + noise > lf {
        v.ceil()
    } else {
        v.floor()
    }
}

pub fn sga_sample(v: &[f64], tau: f64, rng: &mut impl Rng) -> Vec<f64> {
    v.iter()
        .map(|&x| sga_soft(x, tau, gumbel_difference(rng)).value)
        .collect()
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + libm::exp(-x))
    } else {
        let e = libm::exp(x);
        e / (1.0 + e)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn normal_cdf(x: f64) -> f64 {
        0.5 * libm::erfc(-x / std::f64::consts::SQRT_2)
    }

    #[test]
    fn rounding_ties_go_away_from_zero() {
        assert_eq!(round_half_away(0.5), 1);
        assert_eq!(round_half_away(-0.5), -1);
        assert_eq!(round_half_away(2.4), 2);
        assert_eq!(round_half_away(0.6 / 0.5), 1);
    }

    #[test]
    fn quantize_with_step() {
        assert_eq!(quantize(&[0.3], 0.5).unwrap(), vec![1]);
        assert_eq!(dequantize(&[1], 0.5).unwrap(), vec![0.5]);
        assert_eq!(quantize(&[-0.75], 0.5).unwrap(), vec![-2]);
        assert_eq!(dequantize(&[-2], 0.5).unwrap(), vec![-1.0]);
        let v = [0.2, -1.7, 3.5, 8.49];
        let plain: Vec<i32> = v.iter().map(|&x| round_half_away(x) as i32).collect();
        assert_eq!(quantize(&v, 1.0).unwrap(), plain);
        assert!(quantize(&v, 0.0).is_err());
        assert!(dequantize(&[1], -1.0).is_err());
    }

    #[test]
    fn dequantized_value_within_half_step() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..1000 {
            let d = rng.gen_range(0.1..4.0);
            let v = rng.gen_range(-50.0..50.0);
            let r = dequantize(&quantize(&[v], d).unwrap(), d).unwrap()[0];
            assert!((r - v).abs() <= d / 2.0 + 1e-12);
        }
    }

    #[test]
    fn pmf_delta_matches_normal_interval() {
        let p = pmf_delta(normal_cdf, &[1], 0.5).unwrap()[0];
        assert!((p - 0.174666).abs() < 1e-6, "{p}");
        let sum: f64 = pmf_delta(normal_cdf, &(-20..=20).collect::<Vec<_>>(), 0.5)
            .unwrap()
            .iter()
            .sum();
        // Clamped tail entries contribute at most 41 * PMF_FLOOR.
        assert!((sum - 1.0).abs() < 1e-9 + 41.0 * PMF_FLOOR, "{sum}");
        let s: Vec<i32> = (-3..=3).collect();
        let unit = pmf_delta(normal_cdf, &s, 1.0).unwrap();
        for (k, p) in s.iter().zip(unit) {
            let base = normal_cdf(*k as f64 + 0.5) - normal_cdf(*k as f64 - 0.5);
            assert!((p - base).abs() < 1e-15);
        }
    }

    #[test]
    fn pmf_sums_to_one_before_clamping() {
        let sum: f64 = (-20..=20)
            .map(|k| {
                let c = 0.5 * k as f64;
                normal_cdf(c + 0.25) - normal_cdf(c - 0.25)
            })
            .sum();
        assert!((sum - 1.0).abs() < 1e-9);
    }

    #[test]
    fn aun_noise_is_bounded_seeded_and_centered() {
        let v = vec![3.0; 1000];
        let a = aun_relax(&v, &mut ChaCha8Rng::seed_from_u64(4));
        let b = aun_relax(&v, &mut ChaCha8Rng::seed_from_u64(4));
        assert_eq!(a, b);
        assert!(a.iter().all(|x| (-0.5..0.5).contains(&(x - 3.0))));
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let zeros = vec![0.0; 1_000_000];
        let mean = aun_relax(&zeros, &mut rng).iter().sum::<f64>() / 1e6;
        assert!(mean.abs() < 3e-3, "{mean}");
    }

    #[test]
    fn sga_probabilities() {
        assert_eq!(sga_probs(3.0, 0.5), (1.0, 0.0));
        let (pf, pc) = sga_probs(2.5, 0.3);
        assert!((pf - 0.5).abs() < 1e-12 && (pc - 0.5).abs() < 1e-12);
        let (pf, _) = sga_probs(1.25, 0.5);
        let expected = 0.6 / (0.6 + 1.0 / 7.0);
        assert!((pf - expected).abs() < 1e-6, "{pf} vs {expected}");
        assert!((pf - 0.807692).abs() < 1e-6);
    }

    #[test]
    fn sga_sample_hardens_at_low_temperature() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let hits = (0..10_000)
            .filter(|_| (sga_sample(&[1.2], 1e-4, &mut rng)[0] - 1.0).abs() < 1e-3)
            .count();
        assert!(hits as f64 / 1e4 > 0.999, "{hits}");
    }

    #[test]
    fn sga_sample_keeps_integers_and_is_seeded() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        assert_eq!(sga_sample(&[4.0, -2.0], 0.5, &mut rng), vec![4.0, -2.0]);
        let v = [0.3, 1.7, -2.2];
        let a = sga_sample(&v, 0.4, &mut ChaCha8Rng::seed_from_u64(8));
        let b = sga_sample(&v, 0.4, &mut ChaCha8Rng::seed_from_u64(8));
        assert_eq!(a, b);
    }

    #[test]
    fn sga_derivative_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        for _ in 0..200 {
            let v: f64 = rng.gen_range(-5.0..5.0);
            if (v - v.round()).abs() < 0.01 {
                continue;
            }
            let tau = rng.gen_range(0.05..0.5);
            let noise = gumbel_difference(&mut rng);
            let s = sga_soft(v, tau, noise);
            let h = 1e-7;
            let fd = (sga_soft(v + h, tau, noise).value - sga_soft(v - h, tau, noise).value) / (2.0 * h);
            assert!((fd - s.dvalue).abs() <= 1e-4 * (1.0 + fd.abs()), "v={v} tau={tau}: {fd} vs {}", s.dvalue);
        }
    }

    fn mean_and_se(xs: &[f64]) -> (f64, f64) {
        let n = xs.len() as f64;
        let m = xs.iter().sum::<f64>() / n;
        let var = xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0);
        (m, (var / n).sqrt())
    }

    #[test]
    fn gumbel_selection_is_unbiased_for_sga_probabilities() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for (v, tau) in [(1.25, 0.5), (0.4, 0.5), (-2.7, 0.3)] {
            let (pf, pc) = sga_probs(v, tau);
            let expected = pf * v.floor() + pc * v.ceil();
            let draws: Vec<f64> = (0..100_000)
                .map(|_| sga_select(v, tau, gumbel_difference(&mut rng)))
                .collect();
            let (m, se) = mean_and_se(&draws);
            assert!((m - expected).abs() < 3.0 * se, "v={v}: {m} vs {expected} (se {se})");
        }
    }

    #[test]
    fn soft_sample_mean_matches_probabilities_once_annealed() {
        // The tempered relaxation is biased towards 1/2 at high temperature;
        // the expectation identity is checked where annealing has hardened it.
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        for v in [0.4, 1.45, -0.6] {
            let tau = 0.05;
            let (pf, pc) = sga_probs(v, tau);
            let expected = pf * v.floor() + pc * v.ceil();
            let draws = sga_sample(&vec![v; 100_000], tau, &mut rng);
            let (m, se) = mean_and_se(&draws);
            assert!((m - expected).abs() < 3.0 * se.max(1e-12), "v={v}: {m} vs {expected} (se {se})");
        }
    }

    #[test]
    fn temperature_schedule() {
        let cfg = SgaConfig::full_budget();
        assert!((temperature(700, &cfg) - 0.5).abs() < 1e-15);
        assert!((temperature(1700, &cfg) - 0.5 * (-1.0f64).exp()).abs() < 1e-12);
        assert!((temperature(1700, &cfg) - 0.18394).abs() < 1e-5);
        assert_eq!(temperature(0, &cfg), 0.5);
        let mut last = f64::INFINITY;
        for k in 0..20_000 {
            let t = temperature(k, &cfg);
            assert!(t <= last && t >= cfg.tau_min);
            last = t;
        }
        let short = SgaConfig::short_budget();
        assert!((temperature(100, &short) - 0.5).abs() < 1e-15);
        let r = SgaConfig::rescaled(500);
        assert!((temperature(500, &r) - temperature(2000, &cfg)).abs() < 1e-12);
    }
}
