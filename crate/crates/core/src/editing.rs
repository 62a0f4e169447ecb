//! Inference-time editing of the latent code.
//!
//! Starting from the amortized encoder's `(y, z)`, the latents and the `y`
//! quantization step are optimized under a relaxed quantizer; the `z` step
//! is chosen by an exhaustive search over a fixed candidate set.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::models::{Decoder, ModelParams};
use crate::objectives::{
    clamp_pixels, combined_objective, compute_metrics, quantize_tensor, rate_of_symbols, DistortionRegistry, EditTarget,
    Metrics, QuantSteps, RateReport, RelaxedLatents, RoiMap,
};
use crate::optim::Adam;
use crate::quantization::{gumbel_difference, sga_soft, temperature, SgaConfig};
use crate::tensor::Tensor;

pub const DEFAULT_ITERATIONS: usize = 2000;
pub const DEFAULT_LEARNING_RATE: f64 = 5e-3;
/// `log2` bound of the `y` step: `delta_y` stays within `[2^-2, 2^2]`.
pub const LOG2_DELTA_Y_BOUND: f64 = 2.0;

/// `2^-1.5, 2^-1, ..., 2^1.5`.
pub fn delta_z_candidates() -> Vec<f64> {
    (0..7).map(|i| 2f64.powf(-1.5 + 0.5 * i as f64)).collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Relaxation {
    Sga,
    Aun,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EncoderVariant {
    Base,
    Finetuned,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Budget {
    Full,
    Short(usize),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EditConfig {
    pub iterations: usize,
    pub learning_rate: f64,
    pub sga: SgaConfig,
    pub delta_z_candidates: Vec<f64>,
    pub grid_search_enabled: bool,
    /// Learn `delta_y`; with this off (and no grid search) the edit is the
    /// naive variant with unit steps.
    pub adapt_delta_y: bool,
    pub relaxation: Relaxation,
    pub encoder: EncoderVariant,
    pub seed: u64,
    pub record_journal: bool,
}

impl Default for EditConfig {
    fn default() -> Self {
        Self::enhanced()
    }
}

impl EditConfig {
    pub fn enhanced() -> Self {
        Self {
            iterations: DEFAULT_ITERATIONS,
            learning_rate: DEFAULT_LEARNING_RATE,
            sga: SgaConfig::full_budget(),
            delta_z_candidates: delta_z_candidates(),
            grid_search_enabled: true,
            adapt_delta_y: true,
            relaxation: Relaxation::Sga,
            encoder: EncoderVariant::Base,
            seed: 0,
            record_journal: false,
        }
    }

    pub fn naive() -> Self {
        Self {
            grid_search_enabled: false,
            adapt_delta_y: false,
            ..Self::enhanced()
        }
    }

    pub fn with_budget(self, budget: Budget) -> Self {
        match budget {
            Budget::Full => Self {
                iterations: DEFAULT_ITERATIONS,
                sga: SgaConfig::full_budget(),
                ..self
            },
            Budget::Short(n) => Self {
                iterations: n,
                sga: SgaConfig::short_budget(),
                ..self
            },
        }
    }

    /// `iterations` steps on the full-budget schedule compressed in time.
    pub fn with_rescaled_iterations(self, iterations: usize) -> Self {
        Self {
            iterations,
            sga: SgaConfig::rescaled(iterations),
            ..self
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.sga.validate()?;
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!("learning rate {} must be positive", self.learning_rate)));
        }
        if self.grid_search_enabled {
            if self.delta_z_candidates.is_empty() {
                return Err(Error::Config("empty delta_z candidate set".into()));
            }
            if self.delta_z_candidates.iter().any(|&d| !(d > 0.0 && d.is_finite())) {
                return Err(Error::Config("delta_z candidates must be positive".into()));
            }
            if self.delta_z_candidates.windows(2).any(|w| w[0] >= w[1]) {
                return Err(Error::Config("delta_z candidates must be strictly increasing".into()));
            }
        }
        Ok(())
    }
}

/// The editable variables of one image.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentState {
    pub y: Tensor,
    pub z: Tensor,
    pub log_delta_y: f64,
    /// Fixed within one grid-search branch.
    pub delta_z: f64,
    pub optimizer: Option<Adam>,
    pub seed: u64,
    pub k: usize,
}

impl LatentState {
    pub fn delta_y(&self) -> f64 {
        self.log_delta_y.exp()
    }

    pub fn steps(&self) -> QuantSteps {
        QuantSteps {
            delta_y: self.delta_y(),
            delta_z: self.delta_z,
        }
    }
}

pub fn init_state(x: &Tensor, model: &ModelParams, variant: EncoderVariant) -> Result<LatentState> {
    let encoder = match variant {
        EncoderVariant::Base => &model.encoder,
        EncoderVariant::Finetuned => {
            &model
                .finetuned
                .as_ref()
                .ok_or_else(|| Error::Config("model has no fine-tuned encoder".into()))?
                .encoder
        }
    };
    let (y, z) = model.analyze_with(encoder, x)?;
    Ok(LatentState {
        y,
        z,
        log_delta_y: 0.0,
        delta_z: 1.0,
        optimizer: None,
        seed: 0,
        k: 0,
    })
}

/// One noise realization for every latent element.
#[derive(Clone, Debug, PartialEq)]
pub struct Noise {
    pub y: Vec<f64>,
    pub z: Vec<f64>,
}

impl Noise {
    /// Logistic noise for SGA, `U(-0.5, 0.5)` for AUN.
    pub fn draw(relaxation: Relaxation, ny: usize, nz: usize, rng: &mut impl Rng) -> Self {
        let mut one = |_| match relaxation {
            Relaxation::Sga => gumbel_difference(rng),
            Relaxation::Aun => rng.gen_range(-0.5..0.5),
        };
        let y = (0..ny).map(&mut one).collect();
        let z = (0..nz).map(&mut one).collect();
        Self { y, z }
    }
}

struct Relaxed {
    value: Tensor,
    dv: Vec<f64>,
    ddelta: Vec<f64>,
}

/// Relaxed dequantized values `delta * q(v / delta)` and their derivatives.
fn relax(v: &Tensor, delta: f64, tau: f64, relaxation: Relaxation, noise: &[f64]) -> Relaxed {
    let n = v.len();
    let mut value = Tensor::zeros(v.shape());
    let mut dv = Vec::with_capacity(n);
    let mut ddelta = Vec::with_capacity(n);
    for (i, (&x, &g)) in v.data().iter().zip(noise).enumerate() {
        match relaxation {
            Relaxation::Sga => {
                let u = x / delta;
                let s = sga_soft(u, tau, g);
                value.data_mut()[i] = delta * s.value;
                dv.push(s.dvalue);
                ddelta.push(s.value - u * s.dvalue);
            }
            Relaxation::Aun => {
                value.data_mut()[i] = x + delta * g;
                dv.push(1.0);
                ddelta.push(g);
            }
        }
    }
    Relaxed { value, dv, ddelta }
}

/// Relaxed loss and its gradient with respect to the editable variables.
#[derive(Clone, Debug)]
pub struct EditGrad {
    pub loss: f64,
    pub bpp: f64,
    pub distortions: Vec<f64>,
    pub g_y: Tensor,
    pub g_z: Tensor,
    pub g_log_delta_y: f64,
}

/// The edit loss at `(y, z, log_delta_y)` for a fixed noise realization. A
/// rate target weights the rate term by the hard-quantized rate.
#[allow(clippy::too_many_arguments)]
pub fn edit_objective(
    x: &Tensor,
    y: &Tensor,
    z: &Tensor,
    log_delta_y: f64,
    delta_z: f64,
    decoder: &Decoder,
    target: &EditTarget,
    registry: &DistortionRegistry,
    relaxation: Relaxation,
    tau: f64,
    noise: &Noise,
) -> Result<EditGrad> {
    if noise.y.len() != y.len() || noise.z.len() != z.len() {
        return Err(Error::Dimension("noise realization does not match latents".into()));
    }
    let delta_y = log_delta_y.exp();
    let ry = relax(y, delta_y, tau, relaxation, &noise.y);
    let rz = relax(z, delta_z, tau, relaxation, &noise.z);
    let lat = RelaxedLatents {
        y: &ry.value,
        z: &rz.value,
        steps: QuantSteps { delta_y, delta_z },
    };
    // Rate control switches on the rate of the hard-quantized latents.
    let hard_bpp = match target.rate_target_bpp {
        Some(_) => {
            let steps = QuantSteps { delta_y, delta_z };
            let sy = quantize_tensor(y, delta_y);
            let sz = quantize_tensor(z, delta_z);
            let r = rate_of_symbols(&sy, y.shape(), &sz, z.shape(), steps, decoder)?;
            Some(r.bpp())
        }
        None => None,
    };
    let o = combined_objective(x, &lat, decoder, target, registry, hard_bpp, None)?;
    let mut g_delta = o.g_delta_y;
    let mut g_y = o.g_y;
    for (i, g) in g_y.data_mut().iter_mut().enumerate() {
        g_delta += *g * ry.ddelta[i];
        *g *= ry.dv[i];
    }
    let mut g_z = o.g_z;
    for (g, d) in g_z.data_mut().iter_mut().zip(&rz.dv) {
        *g *= d;
    }
    Ok(EditGrad {
        loss: o.loss,
        bpp: o.bpp,
        distortions: o.distortions,
        g_y,
        g_z,
        g_log_delta_y: g_delta * delta_y,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct JournalRow {
    pub iteration: usize,
    pub temperature: f64,
    pub loss: f64,
    pub bpp: f64,
    /// Value of the first target term.
    pub distortion: f64,
    pub delta_y: f64,
    pub delta_z: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CandidateCost {
    pub delta_z: f64,
    pub rd_cost: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EditResult {
    pub symbols_y: Vec<i32>,
    pub symbols_z: Vec<i32>,
    pub y_shape: [usize; 4],
    pub z_shape: [usize; 4],
    pub steps: QuantSteps,
    pub metrics: Metrics,
    pub rate: RateReport,
    /// Reconstruction from the hard-quantized symbols, clamped to `[0, 255]`.
    pub reconstruction: Tensor,
    /// Relaxed loss after each iteration.
    pub loss_trace: Vec<f64>,
    pub candidate_costs: Vec<CandidateCost>,
    pub journal: Vec<JournalRow>,
}

impl EditResult {
    pub fn y_hat(&self) -> Tensor {
        dequantized(&self.symbols_y, self.y_shape, self.steps.delta_y)
    }

    pub fn z_hat(&self) -> Tensor {
        dequantized(&self.symbols_z, self.z_shape, self.steps.delta_z)
    }
}

fn dequantized(s: &[i32], shape: [usize; 4], delta: f64) -> Tensor {
    Tensor::from_vec(shape, s.iter().map(|&v| v as f64 * delta).collect()).expect("shape matches symbols")
}

/// Rounds a step to the precision the bitstream header stores.
pub fn storable_step(delta: f64) -> f64 {
    delta as f32 as f64
}

/// Hard quantization with `steps` and evaluation with exact pmfs.
pub fn finalize(x: &Tensor, model: &ModelParams, y: &Tensor, z: &Tensor, steps: QuantSteps, target: &EditTarget, registry: &DistortionRegistry) -> Result<EditResult> {
    let steps = QuantSteps {
        delta_y: storable_step(steps.delta_y),
        delta_z: steps.delta_z,
    };
    steps.validate()?;
    let symbols_y = quantize_tensor(y, steps.delta_y);
    let symbols_z = quantize_tensor(z, steps.delta_z);
    let rate = rate_of_symbols(&symbols_y, y.shape(), &symbols_z, z.shape(), steps, &model.decoder)?;
    let y_hat = dequantized(&symbols_y, y.shape(), steps.delta_y);
    let reconstruction = clamp_pixels(&model.synthesize(&y_hat)?);
    let metrics = compute_metrics(x, &reconstruction, &rate, target, registry)?;
    Ok(EditResult {
        symbols_y,
        symbols_z,
        y_shape: y.shape(),
        z_shape: z.shape(),
        steps,
        metrics,
        rate,
        reconstruction,
        loss_trace: Vec::new(),
        candidate_costs: Vec::new(),
        journal: Vec::new(),
    })
}

fn check_target(x: &Tensor, target: &EditTarget, registry: &DistortionRegistry) -> Result<()> {
    target.validate(registry)?;
    if let Some(m) = &target.roi_map {
        if m.height() != x.height() || m.width() != x.width() {
            return Err(Error::Dimension(format!(
                "ROI map {}x{} does not match image {}x{}",
                m.height(),
                m.width(),
                x.height(),
                x.width()
            )));
        }
    }
    Ok(())
}

/// Runs `config.iterations` optimizer steps from `state` with its current
/// `delta_z`, then finalizes.
pub fn edit_once(x: &Tensor, mut state: LatentState, model: &ModelParams, target: &EditTarget, registry: &DistortionRegistry, config: &EditConfig) -> Result<EditResult> {
    config.validate()?;
    check_target(x, target, registry)?;
    let (lo, hi) = (
        -LOG2_DELTA_Y_BOUND * std::f64::consts::LN_2,
        LOG2_DELTA_Y_BOUND * std::f64::consts::LN_2,
    );
    state.seed = config.seed;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut opt = state
        .optimizer
        .take()
        .unwrap_or_else(|| Adam::new(state.y.len() + state.z.len() + 1, config.learning_rate));
    let mut trace = Vec::with_capacity(config.iterations);
    let mut journal = Vec::new();
    for _ in 0..config.iterations {
        let k = state.k;
        let tau = temperature(k, &config.sga);
        let noise = Noise::draw(config.relaxation, state.y.len(), state.z.len(), &mut rng);
        let g = edit_objective(
            x,
            &state.y,
            &state.z,
            state.log_delta_y,
            state.delta_z,
            &model.decoder,
            target,
            registry,
            config.relaxation,
            tau,
            &noise,
        )?;
        if !g.loss.is_finite() {
            return Err(Error::NanLoss { iteration: k });
        }
        trace.push(g.loss);
        if config.record_journal {
            journal.push(JournalRow {
                iteration: k,
                temperature: tau,
                loss: g.loss,
                bpp: g.bpp,
                distortion: g.distortions.first().copied().unwrap_or(0.0),
                delta_y: state.delta_y(),
                delta_z: state.delta_z,
            });
        }
        let g_log = [if config.adapt_delta_y { g.g_log_delta_y } else { 0.0 }];
        let mut log_d = [state.log_delta_y];
        opt.step(
            [state.y.data_mut(), state.z.data_mut(), &mut log_d[..]],
            [g.g_y.data(), g.g_z.data(), &g_log[..]],
        );
        if config.adapt_delta_y {
            state.log_delta_y = log_d[0].clamp(lo, hi);
        }
        state.k += 1;
    }
    let mut result = finalize(x, model, &state.y, &state.z, state.steps(), target, registry)?;
    result.loss_trace = trace;
    result.journal = journal;
    Ok(result)
}

/// Edits `x` toward `target`, searching `delta_z` over the candidate set when
/// enabled (each branch independent, full budget) or fixing it to 1.
pub fn edit(x: &Tensor, model: &ModelParams, target: &EditTarget, registry: &DistortionRegistry, config: &EditConfig) -> Result<EditResult> {
    config.validate()?;
    check_target(x, target, registry)?;
    let init = init_state(x, model, config.encoder)?;
    if !config.grid_search_enabled {
        return edit_once(x, init, model, target, registry, config);
    }
    let branches: Vec<Result<EditResult>> = config
        .delta_z_candidates
        .par_iter()
        .map(|&dz| {
            let state = LatentState {
                delta_z: dz,
                ..init.clone()
            };
            edit_once(x, state, model, target, registry, config)
        })
        .collect();
    let mut best: Option<EditResult> = None;
    let mut costs = Vec::with_capacity(branches.len());
    for r in branches {
        let r = r?;
        costs.push(CandidateCost {
            delta_z: r.steps.delta_z,
            rd_cost: r.metrics.rd_cost,
        });
        if best.as_ref().map_or(true, |b| r.metrics.rd_cost < b.metrics.rd_cost) {
            best = Some(r);
        }
    }
    let mut best = best.expect("non-empty candidate set");
    best.candidate_costs = costs;
    Ok(best)
}

/// Hard quantization of the amortized latents with unit steps.
pub fn baseline(x: &Tensor, model: &ModelParams, variant: EncoderVariant, target: &EditTarget, registry: &DistortionRegistry) -> Result<EditResult> {
    let s = init_state(x, model, variant)?;
    finalize(x, model, &s.y, &s.z, QuantSteps::default(), target, registry)
}

/// Edit with ROI-weighted distortion; the map is resampled to the image size.
pub fn edit_roi(x: &Tensor, model: &ModelParams, roi_map: &RoiMap, base_lambda: f64, registry: &DistortionRegistry, config: &EditConfig) -> Result<EditResult> {
    let roi = roi_map.resample(x.height(), x.width());
    edit(x, model, &EditTarget::roi(base_lambda, roi), registry, config)
}

/// Edit trading MSE against the perceptual proxy under rate control.
pub fn edit_multidistortion(
    x: &Tensor,
    model: &ModelParams,
    lambda_d: f64,
    lambda_p: f64,
    rate_target_bpp: f64,
    registry: &DistortionRegistry,
    config: &EditConfig,
) -> Result<EditResult> {
    let target = EditTarget::multi_distortion(lambda_d, lambda_p, rate_target_bpp);
    edit(x, model, &target, registry, config)
}

#[derive(Clone, Debug, PartialEq)]
pub struct TraceSummary {
    pub best_so_far: Vec<f64>,
    /// Fraction of steps that set a new best value.
    pub improving_fraction: f64,
    pub first: f64,
    pub best: f64,
}

pub fn cost_trace_summary(trace: &[f64]) -> Result<TraceSummary> {
    let (&first, rest) = trace
        .split_first()
        .ok_or_else(|| Error::Domain("empty cost trace".into()))?;
    let mut best = first;
    let mut best_so_far = vec![first];
    let mut improved = 0usize;
    for &v in rest {
        if v < best {
            best = v;
            improved += 1;
        }
        best_so_far.push(best);
    }
    Ok(TraceSummary {
        best_so_far,
        improving_fraction: if rest.is_empty() { 0.0 } else { improved as f64 / rest.len() as f64 },
        first,
        best,
    })
}

pub fn write_journal_csv(path: &Path, rows: &[JournalRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
    for r in rows {
        w.serialize(r).map_err(|e| Error::Format(e.to_string()))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}
