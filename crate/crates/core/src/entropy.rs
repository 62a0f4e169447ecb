//! The two priors: a learned per-channel factorized cdf for the hyper-latent
//! and a zero-mean Gaussian conditional for the main latent.

use std::f64::consts::{LN_2, SQRT_2};

use rand::Rng;

use crate::quantization::{sigmoid, PMF_FLOOR};

/// Layer widths of the per-channel cdf network.
pub const PRIOR_FILTERS: [usize; 6] = [1, 3, 3, 3, 3, 1];
const PRIOR_LAYERS: usize = PRIOR_FILTERS.len() - 1;
const PRIOR_INIT_SCALE: f64 = 10.0;

/// Lower bound on the conditional scale.
pub const SIGMA_FLOOR: f64 = 0.11;

#[inline]
fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        libm::log1p(libm::exp(x))
    }
}

#[inline]
fn dsigmoid(x: f64) -> f64 {
    let s = sigmoid(x);
    s * (1.0 - s)
}

/// Learned monotone cdf per channel, `F_c(x) = sigmoid(L_c(x))` where `L_c`
/// composes positive-slope affine maps with `x + a * tanh(x)` nonlinearities.
#[derive(Clone, Debug, PartialEq)]
pub struct FactorizedPrior {
    pub channels: usize,
    /// Per layer `[channels, out, in]`, passed through softplus.
    pub matrices: Vec<Vec<f64>>,
    /// Per layer `[channels, out]`.
    pub biases: Vec<Vec<f64>>,
    /// Per hidden layer `[channels, out]`, passed through tanh.
    pub factors: Vec<Vec<f64>>,
}

impl FactorizedPrior {
    pub fn new(channels: usize, rng: &mut impl Rng) -> Self {
        let scale = PRIOR_INIT_SCALE.powf(1.0 / PRIOR_LAYERS as f64);
        let mut matrices = Vec::new();
        let mut biases = Vec::new();
        let mut factors = Vec::new();
        for k in 0..PRIOR_LAYERS {
            let (fin, fout) = (PRIOR_FILTERS[k], PRIOR_FILTERS[k + 1]);
            let init = (1.0 / scale / fout as f64).exp_m1().ln();
            matrices.push(vec![init; channels * fout * fin]);
            biases.push((0..channels * fout).map(|_| rng.gen_range(-0.5..0.5)).collect());
            if k + 1 < PRIOR_LAYERS {
                factors.push(vec![0.0; channels * fout]);
            }
        }
        Self {
            channels,
            matrices,
            biases,
            factors,
        }
    }

    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        for p in z.params_mut() {
            p.fill(0.0);
        }
        z
    }

    pub fn params(&self) -> Vec<&Vec<f64>> {
        self.matrices
            .iter()
            .chain(&self.biases)
            .chain(&self.factors)
            .collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Vec<f64>> {
        self.matrices
            .iter_mut()
            .chain(self.biases.iter_mut())
            .chain(self.factors.iter_mut())
            .collect()
    }

    /// Runs the cdf network for channel `c`, returning every layer input.
    fn trace(&self, c: usize, x: f64) -> (f64, Vec<Vec<f64>>) {
        let mut h = vec![x];
        let mut inputs = Vec::with_capacity(PRIOR_LAYERS);
        for k in 0..PRIOR_LAYERS {
            let (fin, fout) = (PRIOR_FILTERS[k], PRIOR_FILTERS[k + 1]);
            let m = &self.matrices[k][c * fout * fin..(c + 1) * fout * fin];
            let b = &self.biases[k][c * fout..(c + 1) * fout];
            let mut out: Vec<f64> = (0..fout)
                .map(|o| (0..fin).map(|i| softplus(m[o * fin + i]) * h[i]).sum::<f64>() + b[o])
                .collect();
            if k + 1 < PRIOR_LAYERS {
                let f = &self.factors[k][c * fout..(c + 1) * fout];
                for (v, a) in out.iter_mut().zip(f) {
                    *v += libm::tanh(*a) * libm::tanh(*v);
                }
            }
            inputs.push(std::mem::replace(&mut h, out));
        }
        (h[0], inputs)
    }

    pub fn logit(&self, c: usize, x: f64) -> f64 {
        self.trace(c, x).0
    }

    pub fn cdf(&self, c: usize, x: f64) -> f64 {
        sigmoid(self.logit(c, x))
    }

    /// Backpropagates `g` (gradient w.r.t. the logit) to the input and, when
    /// `grad` is given, into the parameter gradients.
    pub fn logit_backward(&self, c: usize, x: f64, g: f64, mut grad: Option<&mut FactorizedPrior>) -> f64 {
        let (_, inputs) = self.trace(c, x);
        let mut gh = vec![g];
        for k in (0..PRIOR_LAYERS).rev() {
            let (fin, fout) = (PRIOR_FILTERS[k], PRIOR_FILTERS[k + 1]);
            let hin = &inputs[k];
            let m = &self.matrices[k][c * fout * fin..(c + 1) * fout * fin];
            let b = &self.biases[k][c * fout..(c + 1) * fout];
            // Recompute the pre-activation to undo the nonlinearity.
            let pre: Vec<f64> = (0..fout)
                .map(|o| (0..fin).map(|i| softplus(m[o * fin + i]) * hin[i]).sum::<f64>() + b[o])
                .collect();
            let mut gv = gh.clone();
            if k + 1 < PRIOR_LAYERS {
                let f = &self.factors[k][c * fout..(c + 1) * fout];
                for o in 0..fout {
                    let t = libm::tanh(pre[o]);
                    let a = libm::tanh(f[o]);
                    if let Some(gr) = grad.as_deref_mut() {
                        gr.factors[k][c * fout + o] += gh[o] * t * (1.0 - a * a);
                    }
                    gv[o] = gh[o] * (1.0 + a * (1.0 - t * t));
                }
            }
            if let Some(gr) = grad.as_deref_mut() {
                for o in 0..fout {
                    gr.biases[k][c * fout + o] += gv[o];
                    for i in 0..fin {
                        gr.matrices[k][c * fout * fin + o * fin + i] += gv[o] * hin[i] * sigmoid(m[o * fin + i]);
                    }
                }
            }
            gh = (0..fin)
                .map(|i| (0..fout).map(|o| gv[o] * softplus(m[o * fin + i])).sum())
                .collect();
        }
        gh[0]
    }

    /// Probability of the bin `[center - delta/2, center + delta/2]`, unclamped.
    pub fn pmf(&self, c: usize, center: f64, delta: f64) -> f64 {
        let lu = self.logit(c, center + 0.5 * delta);
        let ll = self.logit(c, center - 0.5 * delta);
        interval_from_logits(lu, ll)
    }

    /// `-log2(max(pmf, floor))` and its derivatives with respect to the bin
    /// center and width; parameter gradients are accumulated into `grad`
    /// scaled by `g_bits`.
    pub fn bits_backward(
        &self,
        c: usize,
        center: f64,
        delta: f64,
        g_bits: f64,
        grad: Option<&mut FactorizedPrior>,
    ) -> BitsGrad {
        let (upper, lower) = (center + 0.5 * delta, center - 0.5 * delta);
        let lu = self.logit(c, upper);
        let ll = self.logit(c, lower);
        let p = interval_from_logits(lu, ll);
        if p <= PMF_FLOOR {
            return BitsGrad {
                bits: -PMF_FLOOR.log2(),
                d_center: 0.0,
                d_delta: 0.0,
            };
        }
        let dbits_dp = -1.0 / (p * LN_2);
        let g_lu = dbits_dp * dsigmoid(lu);
        let g_ll = -dbits_dp * dsigmoid(ll);
        if let Some(gr) = grad {
            self.logit_backward(c, upper, g_lu * g_bits, Some(&mut *gr));
            self.logit_backward(c, lower, g_ll * g_bits, Some(gr));
        }
        let du = self.logit_backward(c, upper, g_lu, None);
        let dl = self.logit_backward(c, lower, g_ll, None);
        BitsGrad {
            bits: -p.log2(),
            d_center: du + dl,
            d_delta: 0.5 * (du - dl),
        }
    }

    /// Smallest and largest `x` with tail mass above `tail` on either side,
    /// found by bisection on the monotone logit.
    pub fn quantiles(&self, c: usize, tail: f64) -> (f64, f64) {
        let target = (tail / (1.0 - tail)).ln();
        let solve = |t: f64| {
            let (mut lo, mut hi) = (-1.0, 1.0);
            while self.logit(c, lo) > t && lo > -1e6 {
                lo *= 2.0;
            }
            while self.logit(c, hi) < t && hi < 1e6 {
                hi *= 2.0;
            }
            for _ in 0..200 {
                let mid = 0.5 * (lo + hi);
                if self.logit(c, mid) < t {
                    lo = mid;
                } else {
                    hi = mid;
                }
            }
            0.5 * (lo + hi)
        };
        (solve(target), solve(-target))
    }
}

/// `sigmoid(lu) - sigmoid(ll)` evaluated on the side where it does not cancel.
#[inline]
fn interval_from_logits(lu: f64, ll: f64) -> f64 {
    let sign = if lu + ll > 0.0 { -1.0 } else { 1.0 };
    (sigmoid(sign * lu) - sigmoid(sign * ll)).abs()
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BitsGrad {
    pub bits: f64,
    pub d_center: f64,
    pub d_delta: f64,
}

#[inline]
fn normal_pdf(t: f64) -> f64 {
    const INV_SQRT_2PI: f64 = 0.398_942_280_401_432_7;
    INV_SQRT_2PI * libm::exp(-0.5 * t * t)
}

/// Standard normal cdf via the platform-independent `erfc`.
#[inline]
pub fn normal_cdf(t: f64) -> f64 {
    0.5 * libm::erfc(-t / SQRT_2)
}

/// Probability of the bin of width `delta` centred at `center` under
/// `N(0, sigma^2)`, unclamped.
pub fn gaussian_pmf(center: f64, delta: f64, sigma: f64) -> f64 {
    let c = center.abs();
    0.5 * libm::erfc((c - 0.5 * delta) / (sigma * SQRT_2)) - 0.5 * libm::erfc((c + 0.5 * delta) / (sigma * SQRT_2))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GaussianBitsGrad {
    pub bits: f64,
    pub d_center: f64,
    pub d_delta: f64,
    pub d_sigma: f64,
}

/// `-log2(max(pmf, floor))` under the Gaussian conditional with derivatives.
pub fn gaussian_bits(center: f64, delta: f64, sigma: f64) -> GaussianBitsGrad {
    let p = gaussian_pmf(center, delta, sigma);
    if p <= PMF_FLOOR {
        return GaussianBitsGrad {
            bits: -PMF_FLOOR.log2(),
            d_center: 0.0,
            d_delta: 0.0,
            d_sigma: 0.0,
        };
    }
    let u = (center + 0.5 * delta) / sigma;
    let l = (center - 0.5 * delta) / sigma;
    let (pu, pl) = (normal_pdf(u), normal_pdf(l));
    let k = -1.0 / (p * LN_2);
    GaussianBitsGrad {
        bits: -p.log2(),
        d_center: k * (pu - pl) / sigma,
        d_delta: k * 0.5 * (pu + pl) / sigma,
        d_sigma: k * (l * pl - u * pu) / sigma,
    }
}
