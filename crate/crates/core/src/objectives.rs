//! Rate and distortion terms and their weighted combination.
//!
//! Conventions: distortion is a per-pixel mean on the `[0, 255]` scale,
//! rate is bits per pixel, and a loss is `rate_weight * bpp + sum(lambda_i * d_i)`.

use std::collections::BTreeMap;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::entropy::gaussian_bits;
use crate::error::{Error, Result};
use crate::models::{Decoder, ModelParams, Y_DOWNSAMPLE, Z_DOWNSAMPLE};
use crate::quantization::{check_step, round_half_away};
use crate::tensor::Tensor;

pub const MSE_ID: &str = "mse";
pub const GRADIENT_PROXY_ID: &str = "grad-l1";
/// PSNR reported for a lossless reconstruction.
pub const PSNR_SENTINEL: f64 = 99.0;
pub const RATE_WEIGHT_HIGH: f64 = 4.0;
pub const RATE_WEIGHT_LOW: f64 = 0.25;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct QuantSteps {
    pub delta_y: f64,
    pub delta_z: f64,
}

impl Default for QuantSteps {
    fn default() -> Self {
        Self {
            delta_y: 1.0,
            delta_z: 1.0,
        }
    }
}

impl QuantSteps {
    pub fn validate(&self) -> Result<()> {
        check_step(self.delta_y)?;
        check_step(self.delta_z)
    }
}

/// Per-pixel importance weights in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct RoiMap {
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl RoiMap {
    pub fn new(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::Dimension(format!(
                "ROI map {height}x{width} needs {} values, got {}",
                height * width,
                data.len()
            )));
        }
        if let Some(v) = data.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::Domain(format!("ROI weight {v} outside [0, 1]")));
        }
        Ok(Self { height, width, data })
    }

    pub fn constant(height: usize, width: usize, value: f64) -> Result<Self> {
        Self::new(height, width, vec![value; height * width])
    }

    /// `inside` for columns left of the midline, `outside` elsewhere.
    pub fn half_plane(height: usize, width: usize, inside: f64, outside: f64) -> Result<Self> {
        let data = (0..height * width)
            .map(|i| if i % width < width / 2 { inside } else { outside })
            .collect();
        Self::new(height, width, data)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn at(&self, y: usize, x: usize) -> f64 {
        self.data[y * self.width + x]
    }

    /// Nearest-neighbour resampling.
    pub fn resample(&self, height: usize, width: usize) -> RoiMap {
        if height == self.height && width == self.width {
            return self.clone();
        }
        let mut data = Vec::with_capacity(height * width);
        for y in 0..height {
            let sy = (y * self.height / height).min(self.height - 1);
            for x in 0..width {
                let sx = (x * self.width / width).min(self.width - 1);
                data.push(self.at(sy, sx));
            }
        }
        RoiMap { height, width, data }
    }
}

fn check_same_shape(x: &Tensor, x_bar: &Tensor) -> Result<()> {
    if x.shape() != x_bar.shape() {
        return Err(Error::Dimension(format!(
            "distortion between {:?} and {:?}",
            x.shape(),
            x_bar.shape()
        )));
    }
    Ok(())
}

pub fn mse_distortion(x: &Tensor, x_bar: &Tensor) -> Result<f64> {
    check_same_shape(x, x_bar)?;
    let n = x.len().max(1) as f64;
    Ok(x.data().iter().zip(x_bar.data()).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / n)
}

pub fn psnr(mse: f64) -> f64 {
    if mse <= 0.0 {
        PSNR_SENTINEL
    } else {
        (10.0 * (255.0 * 255.0 / mse).log10()).min(PSNR_SENTINEL)
    }
}

/// Mean over all pixels and channels of `m * (x - x_bar)^2`; `m` is not
/// renormalized.
pub fn roi_weighted_distortion(x: &Tensor, x_bar: &Tensor, m: &RoiMap) -> Result<f64> {
    Ok(roi_weighted_with_grad(x, x_bar, m, false)?.0)
}

fn roi_weighted_with_grad(x: &Tensor, x_bar: &Tensor, m: &RoiMap, want_grad: bool) -> Result<(f64, Option<Tensor>)> {
    check_same_shape(x, x_bar)?;
    let [_, _, h, w] = x.shape();
    if m.height != h || m.width != w {
        return Err(Error::Dimension(format!(
            "ROI map {}x{} against image {h}x{w}",
            m.height, m.width
        )));
    }
    let n = x.len() as f64;
    let plane = h * w;
    let mut grad = want_grad.then(|| Tensor::zeros(x.shape()));
    let mut sum = 0.0;
    for (i, (a, b)) in x.data().iter().zip(x_bar.data()).enumerate() {
        let wgt = m.data[i % plane];
        let d = b - a;
        sum += wgt * d * d;
        if let Some(g) = grad.as_mut() {
            g.data_mut()[i] = 2.0 * wgt * d / n;
        }
    }
    Ok((sum / n, grad))
}

/// A distortion measure usable in an objective.
pub trait Distortion: Send + Sync {
    fn id(&self) -> &str;
    /// Whether [`Distortion::gradient`] is available.
    fn differentiable(&self) -> bool;
    fn value(&self, x: &Tensor, x_bar: &Tensor, roi: Option<&RoiMap>) -> Result<f64>;
    /// Value and gradient with respect to `x_bar`.
    fn gradient(&self, x: &Tensor, x_bar: &Tensor, roi: Option<&RoiMap>) -> Result<(f64, Tensor)>;
}

/// Pixel-wise squared error; honours an ROI map.
#[derive(Clone, Copy, Debug, Default)]
pub struct Mse;

impl Distortion for Mse {
    fn id(&self) -> &str {
        MSE_ID
    }

    fn differentiable(&self) -> bool {
        true
    }

    fn value(&self, x: &Tensor, x_bar: &Tensor, roi: Option<&RoiMap>) -> Result<f64> {
        match roi {
            Some(m) => roi_weighted_distortion(x, x_bar, m),
            None => mse_distortion(x, x_bar),
        }
    }

    fn gradient(&self, x: &Tensor, x_bar: &Tensor, roi: Option<&RoiMap>) -> Result<(f64, Tensor)> {
        if let Some(m) = roi {
            let (v, g) = roi_weighted_with_grad(x, x_bar, m, true)?;
            return Ok((v, g.expect("requested")));
        }
        check_same_shape(x, x_bar)?;
        let n = x.len() as f64;
        let g = x_bar.zip_map(x, |b, a| 2.0 * (b - a) / n);
        Ok((mse_distortion(x, x_bar)?, g))
    }
}

/// Perceptual proxy: L1 difference of gradient magnitudes of `[0, 1]`-scaled
/// images, summed over three dyadic scales (2x2 average pooling between
/// scales). ROI maps are ignored.
#[derive(Clone, Copy, Debug)]
pub struct GradientProxy {
    pub scales: usize,
}

impl Default for GradientProxy {
    fn default() -> Self {
        Self { scales: 3 }
    }
}

const GRAD_EPS: f64 = 1e-6;

fn avg_pool2(t: &Tensor) -> Tensor {
    let [b, c, h, w] = t.shape();
    let (oh, ow) = (h / 2, w / 2);
    let mut out = Tensor::zeros([b, c, oh, ow]);
    for p in 0..b * c {
        let src = &t.data()[p * h * w..(p + 1) * h * w];
        let dst = &mut out.data_mut()[p * oh * ow..(p + 1) * oh * ow];
        for y in 0..oh {
            for x in 0..ow {
                let i = 2 * y * w + 2 * x;
                dst[y * ow + x] = 0.25 * (src[i] + src[i + 1] + src[i + w] + src[i + w + 1]);
            }
        }
    }
    out
}

fn avg_pool2_backward(g: &Tensor, shape: [usize; 4]) -> Tensor {
    let [b, c, h, w] = shape;
    let (oh, ow) = (h / 2, w / 2);
    let mut out = Tensor::zeros(shape);
    for p in 0..b * c {
        let src = &g.data()[p * oh * ow..(p + 1) * oh * ow];
        let dst = &mut out.data_mut()[p * h * w..(p + 1) * h * w];
        for y in 0..oh {
            for x in 0..ow {
                let v = 0.25 * src[y * ow + x];
                let i = 2 * y * w + 2 * x;
                dst[i] += v;
                dst[i + 1] += v;
                dst[i + w] += v;
                dst[i + w + 1] += v;
            }
        }
    }
    out
}

/// Gradient magnitude over the `(h-1) x (w-1)` forward-difference grid.
fn grad_magnitude(t: &Tensor) -> Vec<f64> {
    let [b, c, h, w] = t.shape();
    let mut out = Vec::with_capacity(b * c * (h - 1) * (w - 1));
    for p in 0..b * c {
        let s = &t.data()[p * h * w..(p + 1) * h * w];
        for y in 0..h - 1 {
            for x in 0..w - 1 {
                let i = y * w + x;
                let dx = s[i + 1] - s[i];
                let dy = s[i + w] - s[i];
                out.push((dx * dx + dy * dy + GRAD_EPS).sqrt());
            }
        }
    }
    out
}

impl GradientProxy {
    fn evaluate(&self, x: &Tensor, x_bar: &Tensor, want_grad: bool) -> Result<(f64, Option<Tensor>)> {
        check_same_shape(x, x_bar)?;
        let mut a = x.map(|v| v / 255.0);
        let mut b = x_bar.map(|v| v / 255.0);
        let mut total = 0.0;
        // Gradients w.r.t. each scale's pooled `b`, propagated back at the end.
        let mut shapes = Vec::new();
        let mut scale_grads = Vec::new();
        for s in 0..self.scales {
            if s > 0 {
                a = avg_pool2(&a);
                b = avg_pool2(&b);
            }
            let [_, _, h, w] = b.shape();
            if h < 2 || w < 2 {
                break;
            }
            let ga = grad_magnitude(&a);
            let gb = grad_magnitude(&b);
            let n = ga.len() as f64;
            total += ga.iter().zip(&gb).map(|(p, q)| (p - q).abs()).sum::<f64>() / n;
            shapes.push(b.shape());
            if want_grad {
                let mut g = Tensor::zeros(b.shape());
                let planes = b.shape()[0] * b.shape()[1];
                let mut k = 0;
                for p in 0..planes {
                    let src = &b.data()[p * h * w..(p + 1) * h * w];
                    let dst = &mut g.data_mut()[p * h * w..(p + 1) * h * w];
                    for y in 0..h - 1 {
                        for x in 0..w - 1 {
                            let d = gb[k] - ga[k];
                            let sign = if d > 0.0 {
                                1.0
                            } else if d < 0.0 {
                                -1.0
                            } else {
                                0.0
                            };
                            let i = y * w + x;
                            let dx = src[i + 1] - src[i];
                            let dy = src[i + w] - src[i];
                            let f = sign / (n * gb[k]);
                            dst[i + 1] += f * dx;
                            dst[i + w] += f * dy;
                            dst[i] -= f * (dx + dy);
                            k += 1;
                        }
                    }
                }
                scale_grads.push(g);
            }
        }
        if !want_grad {
            return Ok((total, None));
        }
        let mut acc: Option<Tensor> = None;
        for s in (0..scale_grads.len()).rev() {
            let mut g = scale_grads[s].clone();
            if let Some(prev) = acc.take() {
                g.add_assign(&prev);
            }
            acc = Some(if s > 0 { avg_pool2_backward(&g, shapes[s - 1]) } else { g });
        }
        let mut g = acc.unwrap_or_else(|| Tensor::zeros(x.shape()));
        g.scale(1.0 / 255.0);
        Ok((total, Some(g)))
    }
}

impl Distortion for GradientProxy {
    fn id(&self) -> &str {
        GRADIENT_PROXY_ID
    }

    fn differentiable(&self) -> bool {
        true
    }

    fn value(&self, x: &Tensor, x_bar: &Tensor, _roi: Option<&RoiMap>) -> Result<f64> {
        Ok(self.evaluate(x, x_bar, false)?.0)
    }

    fn gradient(&self, x: &Tensor, x_bar: &Tensor, _roi: Option<&RoiMap>) -> Result<(f64, Tensor)> {
        let (v, g) = self.evaluate(x, x_bar, true)?;
        Ok((v, g.expect("requested")))
    }
}

/// Distortion plugins keyed by id.
#[derive(Clone)]
pub struct DistortionRegistry {
    plugins: BTreeMap<String, Arc<dyn Distortion>>,
}

impl Default for DistortionRegistry {
    fn default() -> Self {
        let mut r = Self {
            plugins: BTreeMap::new(),
        };
        r.register(Arc::new(Mse));
        r.register(Arc::new(GradientProxy::default()));
        r
    }
}

impl DistortionRegistry {
    pub fn register(&mut self, plugin: Arc<dyn Distortion>) {
        self.plugins.insert(plugin.id().to_string(), plugin);
    }

    pub fn get(&self, id: &str) -> Result<&Arc<dyn Distortion>> {
        self.plugins
            .get(id)
            .ok_or_else(|| Error::Config(format!("unknown distortion plugin '{id}'")))
    }

    pub fn ids(&self) -> impl Iterator<Item = &str> {
        self.plugins.keys().map(String::as_str)
    }
}

pub fn perceptual_distortion(x: &Tensor, x_bar: &Tensor, plugin_id: &str, registry: &DistortionRegistry) -> Result<f64> {
    registry.get(plugin_id)?.value(x, x_bar, None)
}

/// What an edit optimizes for.
#[derive(Clone, Debug, PartialEq)]
pub struct EditTarget {
    /// `(distortion id, weight)` pairs.
    pub lambda_targets: Vec<(String, f64)>,
    pub roi_map: Option<RoiMap>,
    pub rate_target_bpp: Option<f64>,
    pub rate_weight_high: f64,
    pub rate_weight_low: f64,
}

impl EditTarget {
    pub fn mse(lambda: f64) -> Self {
        Self {
            lambda_targets: vec![(MSE_ID.to_string(), lambda)],
            roi_map: None,
            rate_target_bpp: None,
            rate_weight_high: RATE_WEIGHT_HIGH,
            rate_weight_low: RATE_WEIGHT_LOW,
        }
    }

    pub fn roi(lambda: f64, roi_map: RoiMap) -> Self {
        Self {
            roi_map: Some(roi_map),
            ..Self::mse(lambda)
        }
    }

    /// MSE plus perceptual proxy under rate control.
    pub fn multi_distortion(lambda_d: f64, lambda_p: f64, rate_target_bpp: f64) -> Self {
        Self {
            lambda_targets: vec![
                (MSE_ID.to_string(), lambda_d),
                (GRADIENT_PROXY_ID.to_string(), lambda_p),
            ],
            rate_target_bpp: Some(rate_target_bpp),
            ..Self::mse(lambda_d)
        }
    }

    pub fn validate(&self, registry: &DistortionRegistry) -> Result<()> {
        for (id, w) in &self.lambda_targets {
            registry.get(id)?;
            if !(*w >= 0.0 && w.is_finite()) {
                return Err(Error::Config(format!("weight {w} for '{id}' must be finite and >= 0")));
            }
        }
        if let Some(t) = self.rate_target_bpp {
            if !(t > 0.0 && t.is_finite()) {
                return Err(Error::Config(format!("rate target {t} must be positive")));
            }
        }
        if !(self.rate_weight_high > self.rate_weight_low && self.rate_weight_low > 0.0) {
            return Err(Error::Config(format!(
                "rate weights need high > low > 0, got {} and {}",
                self.rate_weight_high, self.rate_weight_low
            )));
        }
        Ok(())
    }

    /// Multiplier of the rate term given the current rate; 1 without a target.
    pub fn rate_weight(&self, current_bpp: f64) -> f64 {
        match self.rate_target_bpp {
            Some(_) => rate_control_weight(current_bpp, self),
            None => 1.0,
        }
    }

    /// Weight of the MSE term, if any.
    pub fn mse_weight(&self) -> f64 {
        self.lambda_targets
            .iter()
            .filter(|(id, _)| id == MSE_ID)
            .map(|(_, w)| w)
            .sum()
    }
}

/// `lambda_a` above the target rate, `lambda_b` at or below it.
pub fn rate_control_weight(current_bpp: f64, target: &EditTarget) -> f64 {
    match target.rate_target_bpp {
        Some(t) if current_bpp > t => target.rate_weight_high,
        _ => target.rate_weight_low,
    }
}

/// Hard-quantized rate with a per-location breakdown.
#[derive(Clone, Debug, PartialEq)]
pub struct RateReport {
    pub y_bits: f64,
    pub z_bits: f64,
    /// Bits per latent location `[B, 1, H/16, W/16]`: `y` bits of every
    /// channel plus an even share of the covering `z` location's bits.
    pub bit_map: Tensor,
    pub pixels: usize,
}

impl RateReport {
    pub fn total_bits(&self) -> f64 {
        self.y_bits + self.z_bits
    }

    pub fn bpp(&self) -> f64 {
        self.total_bits() / self.pixels as f64
    }

    /// Bits per pixel inside the pixel region where `mask(py, px)` holds,
    /// attributing each latent location's bits to its 16x16 pixel block.
    pub fn region_bpp(&self, mask: impl Fn(usize, usize) -> bool) -> f64 {
        let [_, _, h, w] = self.bit_map.shape();
        let (mut bits, mut pixels) = (0.0, 0usize);
        for b in 0..self.bit_map.batch() {
            for ly in 0..h {
                for lx in 0..w {
                    let share = self.bit_map.at(b, 0, ly, lx) / (Y_DOWNSAMPLE * Y_DOWNSAMPLE) as f64;
                    for py in ly * Y_DOWNSAMPLE..(ly + 1) * Y_DOWNSAMPLE {
                        for px in lx * Y_DOWNSAMPLE..(lx + 1) * Y_DOWNSAMPLE {
                            if mask(py, px) {
                                bits += share;
                                pixels += 1;
                            }
                        }
                    }
                }
            }
        }
        if pixels == 0 {
            0.0
        } else {
            bits / pixels as f64
        }
    }
}

/// Rate of already-quantized symbols under step sizes `steps`.
pub fn rate_of_symbols(sy: &[i32], y_shape: [usize; 4], sz: &[i32], z_shape: [usize; 4], steps: QuantSteps, decoder: &Decoder) -> Result<RateReport> {
    steps.validate()?;
    let z_hat = Tensor::from_vec(z_shape, sz.iter().map(|&s| s as f64 * steps.delta_z).collect())?;
    let y_hat = Tensor::from_vec(y_shape, sy.iter().map(|&s| s as f64 * steps.delta_y).collect())?;
    let (_, sigma) = decoder.hyper_synthesize(&z_hat)?;
    if sigma.shape() != y_shape {
        return Err(Error::Dimension(format!(
            "y shape {y_shape:?} does not match hyper-synthesis output {:?}",
            sigma.shape()
        )));
    }
    let [b, m, h, w] = y_shape;
    let [_, mz, hz, wz] = z_shape;
    let mut bit_map = Tensor::zeros([b, 1, h, w]);
    let mut y_bits = 0.0;
    for bi in 0..b {
        for c in 0..m {
            for i in 0..h * w {
                let idx = (bi * m + c) * h * w + i;
                let bits = gaussian_bits(y_hat.data()[idx], steps.delta_y, sigma.data()[idx]).bits;
                y_bits += bits;
                bit_map.data_mut()[bi * h * w + i] += bits;
            }
        }
    }
    let mut z_bits = 0.0;
    for bi in 0..b {
        for c in 0..mz {
            for zy in 0..hz {
                for zx in 0..wz {
                    let idx = ((bi * mz + c) * hz + zy) * wz + zx;
                    let bits = decoder
                        .prior
                        .bits_backward(c, z_hat.data()[idx], steps.delta_z, 0.0, None)
                        .bits;
                    z_bits += bits;
                    let share = bits / (Z_DOWNSAMPLE * Z_DOWNSAMPLE) as f64;
                    for ly in zy * Z_DOWNSAMPLE..((zy + 1) * Z_DOWNSAMPLE).min(h) {
                        for lx in zx * Z_DOWNSAMPLE..((zx + 1) * Z_DOWNSAMPLE).min(w) {
                            bit_map.data_mut()[(bi * h + ly) * w + lx] += share;
                        }
                    }
                }
            }
        }
    }
    Ok(RateReport {
        y_bits,
        z_bits,
        bit_map,
        pixels: b * h * w * Y_DOWNSAMPLE * Y_DOWNSAMPLE,
    })
}

pub fn quantize_tensor(t: &Tensor, delta: f64) -> Vec<i32> {
    t.data()
        .iter()
        .map(|&v| round_half_away(v / delta).clamp(i32::MIN as i64, i32::MAX as i64) as i32)
        .collect()
}

/// Hard-quantizes `y` and `z` with `steps` and measures the exact rate.
pub fn rate_bits(y: &Tensor, z: &Tensor, steps: QuantSteps, model: &ModelParams) -> Result<RateReport> {
    steps.validate()?;
    let sy = quantize_tensor(y, steps.delta_y);
    let sz = quantize_tensor(z, steps.delta_z);
    rate_of_symbols(&sy, y.shape(), &sz, z.shape(), steps, &model.decoder)
}

/// Reported numbers of a hard-quantized reconstruction.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub rate_bpp: f64,
    pub mse: f64,
    pub psnr: f64,
    pub perceptual: Option<f64>,
    /// `w * bpp + sum(lambda_i * d_i)` under the edit target; `w` is the rate
    /// control weight at this rate, 1 without a rate target.
    pub rd_cost: f64,
}

/// Clamps a reconstruction to the displayable range.
pub fn clamp_pixels(x_bar: &Tensor) -> Tensor {
    x_bar.map(|v| v.clamp(0.0, 255.0))
}

pub fn compute_metrics(x: &Tensor, x_bar: &Tensor, rate: &RateReport, target: &EditTarget, registry: &DistortionRegistry) -> Result<Metrics> {
    let x_bar = clamp_pixels(x_bar);
    let mse = mse_distortion(x, &x_bar)?;
    let mut rd_cost = target.rate_weight(rate.bpp()) * rate.bpp();
    let mut perceptual = None;
    for (id, w) in &target.lambda_targets {
        let d = registry.get(id)?.value(x, &x_bar, target.roi_map.as_ref())?;
        if id == GRADIENT_PROXY_ID {
            perceptual = Some(d);
        }
        rd_cost += w * d;
    }
    Ok(Metrics {
        rate_bpp: rate.bpp(),
        mse,
        psnr: psnr(mse),
        perceptual,
        rd_cost,
    })
}

/// Continuous latents at which the objective is evaluated: `y` and `z` are
/// already on their (relaxed) quantization grids.
#[derive(Clone, Debug)]
pub struct RelaxedLatents<'a> {
    pub y: &'a Tensor,
    pub z: &'a Tensor,
    pub steps: QuantSteps,
}

#[derive(Clone, Debug)]
pub struct ObjectiveGrad {
    pub loss: f64,
    pub bpp: f64,
    pub rate_weight: f64,
    /// Unweighted value of each target term, in target order.
    pub distortions: Vec<f64>,
    pub g_y: Tensor,
    pub g_z: Tensor,
    /// Partial derivative with respect to the `y` bin width.
    pub g_delta_y: f64,
}

/// Rate in bits of relaxed latents plus the partials the loss needs.
struct RelaxedRate {
    bits: f64,
    g_y: Tensor,
    g_z: Tensor,
    g_delta_y: f64,
}

fn relaxed_rate(lat: &RelaxedLatents, decoder: &Decoder, g_bits: f64, mut grad: Option<&mut Decoder>) -> Result<RelaxedRate> {
    let hyper = decoder.hyper_pass(lat.z);
    let sigma = &hyper.sigma;
    if sigma.shape() != lat.y.shape() {
        return Err(Error::Dimension(format!(
            "y shape {:?} does not match hyper-synthesis output {:?}",
            lat.y.shape(),
            sigma.shape()
        )));
    }
    let mut bits = 0.0;
    let mut g_y = Tensor::zeros(lat.y.shape());
    let mut g_sigma = Tensor::zeros(lat.y.shape());
    let mut g_delta_y = 0.0;
    for (i, (&c, &s)) in lat.y.data().iter().zip(sigma.data()).enumerate() {
        let r = gaussian_bits(c, lat.steps.delta_y, s);
        bits += r.bits;
        g_y.data_mut()[i] = g_bits * r.d_center;
        g_sigma.data_mut()[i] = g_bits * r.d_sigma;
        g_delta_y += g_bits * r.d_delta;
    }
    let mut g_z = hyper.backward(decoder, &g_sigma, grad.as_deref_mut().map(|d| &mut d.hyper_synthesis));
    let [b, mz, hz, wz] = lat.z.shape();
    let plane = hz * wz;
    let mut prior_grad = grad.map(|d| &mut d.prior);
    for bi in 0..b {
        for c in 0..mz {
            for i in 0..plane {
                let idx = (bi * mz + c) * plane + i;
                let r = decoder.prior.bits_backward(
                    c,
                    lat.z.data()[idx],
                    lat.steps.delta_z,
                    g_bits,
                    prior_grad.as_deref_mut(),
                );
                bits += r.bits;
                g_z.data_mut()[idx] += g_bits * r.d_center;
            }
        }
    }
    Ok(RelaxedRate {
        bits,
        g_y,
        g_z,
        g_delta_y,
    })
}

/// Evaluates `rate_weight * bpp + sum(lambda_i * d_i)` at relaxed latents and
/// its gradient with respect to the latents and the `y` bin width. Decoder
/// parameter gradients are accumulated into `grad` when given. The rate
/// weight follows [`EditTarget::rate_weight`] at `rate_weight_bpp`, or the
/// current bpp when that is `None`.
pub fn combined_objective(
    x: &Tensor,
    lat: &RelaxedLatents,
    decoder: &Decoder,
    target: &EditTarget,
    registry: &DistortionRegistry,
    rate_weight_bpp: Option<f64>,
    mut grad: Option<&mut Decoder>,
) -> Result<ObjectiveGrad> {
    lat.steps.validate()?;
    let pixels = (x.batch() * x.height() * x.width()) as f64;
    // The bits themselves do not depend on the weight, so one pass suffices
    // once the weight is known; a weight depending on the current rate needs
    // the rate first.
    let rate_weight = match rate_weight_bpp {
        Some(bpp) => target.rate_weight(bpp),
        None if target.rate_target_bpp.is_some() => {
            let probe = relaxed_rate(lat, decoder, 0.0, None)?;
            target.rate_weight(probe.bits / pixels)
        }
        None => 1.0,
    };
    let rate = relaxed_rate(lat, decoder, rate_weight / pixels, grad.as_deref_mut())?;
    let bpp = rate.bits / pixels;

    let pass = decoder.synthesis_pass(lat.y);
    let x_bar = pass.output();
    if x_bar.shape() != x.shape() {
        return Err(Error::Dimension(format!(
            "reconstruction {:?} does not match image {:?}",
            x_bar.shape(),
            x.shape()
        )));
    }
    let mut loss = rate_weight * bpp;
    let mut distortions = Vec::with_capacity(target.lambda_targets.len());
    let mut g_xbar = Tensor::zeros(x.shape());
    let mut any = false;
    for (id, w) in &target.lambda_targets {
        let plugin = registry.get(id)?;
        if *w == 0.0 {
            distortions.push(plugin.value(x, &x_bar, target.roi_map.as_ref())?);
            continue;
        }
        if !plugin.differentiable() {
            return Err(Error::Config(format!("distortion '{id}' is not differentiable")));
        }
        let (d, mut g) = plugin.gradient(x, &x_bar, target.roi_map.as_ref())?;
        distortions.push(d);
        loss += w * d;
        g.scale(*w);
        g_xbar.add_assign(&g);
        any = true;
    }
    let mut g_y = rate.g_y;
    if any {
        let g = pass.backward(decoder, &g_xbar, grad.map(|d| &mut d.synthesis));
        g_y.add_assign(&g);
    }
    Ok(ObjectiveGrad {
        loss,
        bpp,
        rate_weight,
        distortions,
        g_y,
        g_z: rate.g_z,
        g_delta_y: rate.g_delta_y,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::entropy::gaussian_pmf;
    use crate::models::Arch;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn tiny_model() -> ModelParams {
        ModelParams::new(
            Arch {
                n: 4,
                m: 6,
                m_hyper: 3,
                image_channels: 3,
            },
            0.015,
            21,
        )
        .unwrap()
    }

    fn random(shape: [usize; 4], lo: f64, hi: f64, rng: &mut ChaCha8Rng) -> Tensor {
        let n = shape.iter().product();
        Tensor::from_vec(shape, (0..n).map(|_| rng.gen_range(lo..hi)).collect()).unwrap()
    }

    #[test]
    fn mse_and_psnr_examples() {
        let a = Tensor::from_vec([1, 1, 1, 2], vec![2.0, 4.0]).unwrap();
        let b = Tensor::from_vec([1, 1, 1, 2], vec![0.0, 4.0]).unwrap();
        assert_eq!(mse_distortion(&a, &b).unwrap(), 2.0);
        assert_eq!(mse_distortion(&a, &a).unwrap(), 0.0);
        assert_eq!(psnr(0.0), PSNR_SENTINEL);
        assert!((psnr(255.0 * 255.0 / 10.0) - 10.0).abs() < 1e-12);
        let c = Tensor::zeros([1, 1, 2, 1]);
        assert!(matches!(mse_distortion(&a, &c), Err(Error::Dimension(_))));
    }

    #[test]
    fn roi_weighting() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = random([1, 3, 4, 6], 0.0, 255.0, &mut rng);
        let xb = random([1, 3, 4, 6], 0.0, 255.0, &mut rng);
        let mse = mse_distortion(&x, &xb).unwrap();
        let ones = RoiMap::constant(4, 6, 1.0).unwrap();
        assert_eq!(roi_weighted_distortion(&x, &xb, &ones).unwrap(), mse);
        let zeros = RoiMap::constant(4, 6, 0.0).unwrap();
        assert_eq!(roi_weighted_distortion(&x, &xb, &zeros).unwrap(), 0.0);
        let c = RoiMap::constant(4, 6, 0.375).unwrap();
        assert_eq!(roi_weighted_distortion(&x, &xb, &c).unwrap(), 0.375 * mse);
        // Error confined to the right half, ROI on the left half.
        let mut right = x.clone();
        for ch in 0..3 {
            for y in 0..4 {
                for xx in 3..6 {
                    right.data_mut()[(ch * 4 + y) * 6 + xx] += 10.0;
                }
            }
        }
        let half = RoiMap::half_plane(4, 6, 1.0, 0.0).unwrap();
        assert_eq!(roi_weighted_distortion(&x, &right, &half).unwrap(), 0.0);
        assert!(matches!(RoiMap::constant(2, 2, 1.5), Err(Error::Domain(_))));
    }

    #[test]
    fn roi_resample_nearest() {
        let m = RoiMap::new(2, 2, vec![0.0, 1.0, 0.5, 0.25]).unwrap();
        let r = m.resample(4, 4);
        assert_eq!(r.at(0, 0), 0.0);
        assert_eq!(r.at(1, 3), 1.0);
        assert_eq!(r.at(3, 1), 0.5);
        assert_eq!(r.at(2, 2), 0.25);
    }

    #[test]
    fn proxy_identity_symmetry_and_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = random([1, 3, 16, 16], 0.0, 255.0, &mut rng);
        let xb = random([1, 3, 16, 16], 0.0, 255.0, &mut rng);
        let p = GradientProxy::default();
        assert_eq!(p.value(&x, &x, None).unwrap(), 0.0);
        let d1 = p.value(&x, &xb, None).unwrap();
        let d2 = p.value(&xb, &x, None).unwrap();
        assert!((d1 - d2).abs() < 1e-15 && d1 > 0.0);
        let (v, g) = p.gradient(&x, &xb, None).unwrap();
        assert_eq!(v, d1);
        let dir = random(x.shape(), -1.0, 1.0, &mut rng);
        let h = 1e-3;
        let shift = |s: f64| {
            let mut t = xb.clone();
            for (a, d) in t.data_mut().iter_mut().zip(dir.data()) {
                *a += s * d;
            }
            p.value(&x, &t, None).unwrap()
        };
        let numeric = (shift(h) - shift(-h)) / (2.0 * h);
        let analytic: f64 = g.data().iter().zip(dir.data()).map(|(a, b)| a * b).sum();
        assert!((numeric - analytic).abs() <= 1e-3 * numeric.abs(), "{analytic} vs {numeric}");
    }

    #[test]
    fn registry_lookup() {
        let r = DistortionRegistry::default();
        assert!(r.get(MSE_ID).is_ok());
        assert!(r.get(GRADIENT_PROXY_ID).is_ok());
        assert!(matches!(r.get("lpips"), Err(Error::Config(_))));
        let x = Tensor::zeros([1, 3, 8, 8]);
        assert!(perceptual_distortion(&x, &x, "nope", &r).is_err());
    }

    #[test]
    fn rate_control_examples() {
        let t = EditTarget {
            rate_target_bpp: Some(1.0),
            ..EditTarget::mse(0.015)
        };
        assert_eq!(rate_control_weight(1.2, &t), 4.0);
        assert_eq!(rate_control_weight(0.8, &t), 0.25);
        assert_eq!(rate_control_weight(1.0, &t), 0.25);
        assert_eq!(EditTarget::mse(0.015).rate_weight(5.0), 1.0);
    }

    #[test]
    fn bits_are_negative_log2() {
        let bits: f64 = [0.5f64, 0.25].iter().map(|p| -p.log2()).sum();
        assert_eq!(bits, 3.0);
    }

    #[test]
    fn rate_report_consistency() {
        let model = tiny_model();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let y = random([1, 6, 4, 4], -4.0, 4.0, &mut rng);
        let z = random([1, 3, 1, 1], -3.0, 3.0, &mut rng);
        let r = rate_bits(&y, &z, QuantSteps::default(), &model).unwrap();
        assert!(r.total_bits() >= 0.0);
        let map_sum = r.bit_map.sum();
        assert!((map_sum - r.total_bits()).abs() <= 1e-6 * r.total_bits());
        assert_eq!(r.pixels, 64 * 64);
        assert!((r.region_bpp(|_, _| true) - r.bpp()).abs() < 1e-12);
        // Coarser y bins on the same Gaussian carry less information.
        let (_, sigma) = model.hyper_synthesize(&z.map(|v| round_half_away(v) as f64)).unwrap();
        let expected_rate = |delta: f64| -> f64 {
            sigma
                .data()
                .iter()
                .map(|&s| {
                    (-60..=60)
                        .map(|k| {
                            let p = gaussian_pmf(k as f64 * delta, delta, s);
                            if p > 0.0 {
                                -p * p.log2()
                            } else {
                                0.0
                            }
                        })
                        .sum::<f64>()
                })
                .sum()
        };
        assert!(expected_rate(2.0) < expected_rate(1.0));
    }

    #[test]
    fn rate_loss_matches_independent_recomputation() {
        let model = tiny_model();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = random([1, 3, 64, 64], 0.0, 255.0, &mut rng);
        let y = random([1, 6, 4, 4], -4.0, 4.0, &mut rng);
        let z = random([1, 3, 1, 1], -3.0, 3.0, &mut rng);
        let lat = RelaxedLatents {
            y: &y,
            z: &z,
            steps: QuantSteps::default(),
        };
        let reg = DistortionRegistry::default();
        let target = EditTarget::mse(0.0);
        let o = combined_objective(&x, &lat, &model.decoder, &target, &reg, None, None).unwrap();
        let (_, sigma) = model.hyper_synthesize(&z).unwrap();
        let mut bits = 0.0;
        for (c, s) in y.data().iter().zip(sigma.data()) {
            bits -= gaussian_pmf(*c, 1.0, *s).max(1e-9).log2();
        }
        for (c, v) in z.data().iter().enumerate() {
            bits -= model.decoder.prior.pmf(c, *v, 1.0).max(1e-9).log2();
        }
        assert!((o.loss - bits / 4096.0).abs() < 1e-12);
        let x_bar = model.synthesize(&y).unwrap();
        let t2 = EditTarget::mse(0.015);
        let o2 = combined_objective(&x, &lat, &model.decoder, &t2, &reg, None, None).unwrap();
        let mse = mse_distortion(&x, &x_bar).unwrap();
        assert!((o2.loss - (bits / 4096.0 + 0.015 * mse)).abs() < 1e-9);
        // A zero-weight extra term changes nothing.
        let mut t3 = t2.clone();
        t3.lambda_targets.push((GRADIENT_PROXY_ID.into(), 0.0));
        let o3 = combined_objective(&x, &lat, &model.decoder, &t3, &reg, None, None).unwrap();
        assert!((o3.loss - o2.loss).abs() < 1e-12);
        // Scaling every weight scales the loss.
        let o4 = combined_objective(&x, &lat, &model.decoder, &EditTarget::mse(0.045), &reg, None, None).unwrap();
        let rate_only = bits / 4096.0;
        assert!(((o4.loss - rate_only) - 3.0 * (o2.loss - rate_only)).abs() < 1e-9);
    }

    #[test]
    fn objective_gradient_matches_finite_differences() {
        let model = tiny_model();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = random([1, 3, 64, 64], 0.0, 255.0, &mut rng);
        let y = random([1, 6, 4, 4], -4.0, 4.0, &mut rng);
        let z = random([1, 3, 1, 1], -3.0, 3.0, &mut rng);
        let reg = DistortionRegistry::default();
        let mut target = EditTarget::multi_distortion(0.015, 0.5, 1.0);
        target.rate_target_bpp = None;
        let steps = QuantSteps {
            delta_y: 1.3,
            delta_z: 0.7,
        };
        let eval = |y: &Tensor, z: &Tensor, dy: f64| {
            let lat = RelaxedLatents {
                y,
                z,
                steps: QuantSteps { delta_y: dy, ..steps },
            };
            combined_objective(&x, &lat, &model.decoder, &target, &reg, None, None).unwrap()
        };
        let o = eval(&y, &z, steps.delta_y);
        let h = 1e-5;
        for i in [0, 17, 50, 95] {
            let mut p = y.clone();
            let mut m = y.clone();
            p.data_mut()[i] += h;
            m.data_mut()[i] -= h;
            let num = (eval(&p, &z, steps.delta_y).loss - eval(&m, &z, steps.delta_y).loss) / (2.0 * h);
            assert!((num - o.g_y.data()[i]).abs() <= 1e-3 * num.abs().max(1e-4), "y[{i}] {num} vs {}", o.g_y.data()[i]);
        }
        for i in 0..3 {
            let mut p = z.clone();
            let mut m = z.clone();
            p.data_mut()[i] += h;
            m.data_mut()[i] -= h;
            let num = (eval(&y, &p, steps.delta_y).loss - eval(&y, &m, steps.delta_y).loss) / (2.0 * h);
            assert!((num - o.g_z.data()[i]).abs() <= 1e-3 * num.abs().max(1e-4), "z[{i}] {num} vs {}", o.g_z.data()[i]);
        }
        let num = (eval(&y, &z, steps.delta_y + h).loss - eval(&y, &z, steps.delta_y - h).loss) / (2.0 * h);
        assert!((num - o.g_delta_y).abs() <= 1e-3 * num.abs().max(1e-4));
    }
}
