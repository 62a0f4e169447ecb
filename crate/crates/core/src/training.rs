//! Amortized training of the hyperprior model and encoder-only fine-tuning.

use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::models::{AnalysisPass, Encoder, FinetunedEncoder, ModelParams};
use crate::objectives::{combined_objective, DistortionRegistry, EditTarget, QuantSteps, RelaxedLatents};
use crate::optim::Adam;
use crate::tensor::Tensor;

/// Rate-distortion weights models are trained at.
pub const LAMBDA_LADDER: [f64; 7] = [0.0016, 0.0032, 0.0075, 0.015, 0.03, 0.045, 0.08];
pub const BASE_LAMBDA: f64 = 0.015;
pub const FINETUNE_LAMBDA: f64 = 0.075;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lambda0: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub patch_size: usize,
    pub seed: u64,
    /// Per-epoch CSV log (`epoch,loss,bpp,mse`).
    pub log_path: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lambda0: BASE_LAMBDA,
            epochs: 1,
            batch_size: 16,
            learning_rate: 1e-4,
            patch_size: 64,
            seed: 0,
            log_path: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !LAMBDA_LADDER.contains(&self.lambda0) {
            return Err(Error::Config(format!("lambda0 {} is not in {:?}", self.lambda0, LAMBDA_LADDER)));
        }
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be positive".into()));
        }
        self.validate_common()
    }

    fn validate_common(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be positive".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!("learning rate {} must be positive", self.learning_rate)));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    /// Mean over batches of `bpp + lambda * mse`.
    pub loss: f64,
    pub bpp: f64,
    pub mse: f64,
}

#[derive(Clone, Debug)]
pub struct TrainReport {
    pub model: ModelParams,
    pub log: Vec<EpochLog>,
}

/// Uniform noise for the additive relaxation of one batch.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchNoise {
    pub y: Vec<f64>,
    pub z: Vec<f64>,
}

impl BatchNoise {
    pub fn draw(ny: usize, nz: usize, rng: &mut impl Rng) -> Self {
        Self {
            y: (0..ny).map(|_| rng.gen_range(-0.5..0.5)).collect(),
            z: (0..nz).map(|_| rng.gen_range(-0.5..0.5)).collect(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BatchLoss {
    pub loss: f64,
    pub bpp: f64,
    pub mse: f64,
}

fn add_noise(t: &Tensor, u: &[f64]) -> Result<Tensor> {
    if t.len() != u.len() {
        return Err(Error::Dimension(format!("{} noise values for {} latents", u.len(), t.len())));
    }
    let mut out = t.clone();
    out.data_mut().iter_mut().zip(u).for_each(|(v, n)| *v += n);
    Ok(out)
}

/// Noisy-latent loss of `encoder` + `model.decoder` on `batch` at unit
/// steps, with parameter gradients accumulated when requested.
pub fn batch_loss(
    model: &ModelParams,
    encoder: &Encoder,
    batch: &Tensor,
    lambda: f64,
    noise: &BatchNoise,
    grads: Option<(&mut Encoder, Option<&mut crate::models::Decoder>)>,
) -> Result<BatchLoss> {
    let registry = DistortionRegistry::default();
    let target = EditTarget::mse(lambda);
    let pass = AnalysisPass::run(encoder, batch);
    let y = add_noise(pass.y(), &noise.y)?;
    let z = add_noise(pass.z(), &noise.z)?;
    let lat = RelaxedLatents {
        y: &y,
        z: &z,
        steps: QuantSteps::default(),
    };
    let (enc_grad, dec_grad) = match grads {
        Some((e, d)) => (Some(e), d),
        None => (None, None),
    };
    let g = combined_objective(batch, &lat, &model.decoder, &target, &registry, None, dec_grad)?;
    if let Some(eg) = enc_grad {
        pass.backward(encoder, &g.g_y, &g.g_z, eg);
    }
    Ok(BatchLoss {
        loss: g.loss,
        bpp: g.bpp,
        mse: g.distortions[0],
    })
}

/// Random `size x size` crops (any channel count) from `images`.
pub fn random_patches(images: &[Tensor], size: usize, count: usize, seed: u64) -> Result<Vec<Tensor>> {
    let usable: Vec<&Tensor> = images.iter().filter(|t| t.height() >= size && t.width() >= size).collect();
    if usable.is_empty() {
        return Err(Error::Dimension(format!("no image is at least {size}x{size}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let img = usable[rng.gen_range(0..usable.len())];
        let (oy, ox) = (rng.gen_range(0..=img.height() - size), rng.gen_range(0..=img.width() - size));
        let c = img.channels();
        let mut data = Vec::with_capacity(c * size * size);
        for ch in 0..c {
            for i in 0..size {
                for j in 0..size {
                    data.push(img.at(0, ch, oy + i, ox + j));
                }
            }
        }
        out.push(Tensor::from_vec([1, c, size, size], data)?);
    }
    Ok(out)
}

fn check_dataset(dataset: &[Tensor], patch: usize) -> Result<()> {
    if dataset.is_empty() {
        return Err(Error::Config("empty training set".into()));
    }
    for (i, p) in dataset.iter().enumerate() {
        if p.shape() != [1, 3, patch, patch] {
            return Err(Error::Dimension(format!("patch {i} has shape {:?}, expected [1, 3, {patch}, {patch}]", p.shape())));
        }
        if p.data().iter().any(|v| !(0.0..=255.0).contains(v)) {
            return Err(Error::Domain(format!("patch {i} has pixels outside [0, 255]")));
        }
    }
    Ok(())
}

fn batches(len: usize, batch: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..len).collect();
    order.shuffle(rng);
    order.chunks(batch).map(<[usize]>::to_vec).collect()
}

fn write_log(path: &Path, log: &[EpochLog]) -> Result<()> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for row in log {
        w.serialize(row).map_err(|e| Error::Format(e.to_string()))?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Format(e.to_string()))?;
    crate::checkpoint::write_atomic(path, &bytes)
}

enum Trainee<'a> {
    Full(&'a mut ModelParams),
    EncoderOnly(&'a ModelParams, &'a mut Encoder),
}

fn run_epochs(mut who: Trainee, dataset: &[Tensor], lambda: f64, cfg: &TrainConfig) -> Result<Vec<EpochLog>> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let size = match &who {
        Trainee::Full(m) => m.encoder.params().iter().chain(m.decoder.params().iter()).map(|p| p.len()).sum(),
        Trainee::EncoderOnly(_, e) => e.params().iter().map(|p| p.len()).sum(),
    };
    let mut opt = Adam::new(size, cfg.learning_rate);
    let mut log = Vec::with_capacity(cfg.epochs);
    for epoch in 1..=cfg.epochs {
        let (mut loss, mut bpp, mut mse, mut n) = (0.0, 0.0, 0.0, 0usize);
        for idx in batches(dataset.len(), cfg.batch_size, &mut rng) {
            let items: Vec<Tensor> = idx.iter().map(|&i| dataset[i].clone()).collect();
            let batch = Tensor::stack(&items)?;
            let b = match &mut who {
                Trainee::Full(m) => {
                    let (ny, nz) = latent_sizes(m, &batch);
                    let noise = BatchNoise::draw(ny, nz, &mut rng);
                    let mut ge = m.encoder.zeros_like();
                    let mut gd = m.decoder.zeros_like();
                    let b = batch_loss(m, &m.encoder, &batch, lambda, &noise, Some((&mut ge, Some(&mut gd))))?;
                    if !b.loss.is_finite() {
                        return Err(Error::NanTraining { epoch });
                    }
                    let ModelParams { encoder, decoder, .. } = &mut **m;
                    let params = encoder.params_mut().into_iter().chain(decoder.params_mut()).map(|p| p.as_mut_slice());
                    let g: Vec<&Vec<f64>> = ge.params().into_iter().chain(gd.params()).collect();
                    opt.step(params, g.into_iter().map(|v| v.as_slice()));
                    m.encoder.project();
                    m.decoder.project();
                    b
                }
                Trainee::EncoderOnly(m, enc) => {
                    let (ny, nz) = latent_sizes(m, &batch);
                    let noise = BatchNoise::draw(ny, nz, &mut rng);
                    let mut ge = enc.zeros_like();
                    let b = batch_loss(m, enc, &batch, lambda, &noise, Some((&mut ge, None)))?;
                    if !b.loss.is_finite() {
                        return Err(Error::NanTraining { epoch });
                    }
                    opt.step(
                        enc.params_mut().into_iter().map(|p| p.as_mut_slice()),
                        ge.params().into_iter().map(|v| v.as_slice()),
                    );
                    enc.project();
                    b
                }
            };
            loss += b.loss;
            bpp += b.bpp;
            mse += b.mse;
            n += 1;
        }
        let n = n as f64;
        log.push(EpochLog {
            epoch,
            loss: loss / n,
            bpp: bpp / n,
            mse: mse / n,
        });
        if let Some(p) = &cfg.log_path {
            write_log(p, &log)?;
        }
    }
    Ok(log)
}

fn latent_sizes(m: &ModelParams, batch: &Tensor) -> (usize, usize) {
    let (b, h, w) = (batch.batch(), batch.height(), batch.width());
    (
        b * m.arch.m * (h / crate::models::Y_DOWNSAMPLE) * (w / crate::models::Y_DOWNSAMPLE),
        b * m.arch.m_hyper * (h / crate::models::TOTAL_DOWNSAMPLE) * (w / crate::models::TOTAL_DOWNSAMPLE),
    )
}

/// Trains `model` in place of a fresh initialization on `dataset`
/// (`[1, 3, P, P]` patches on the 0-255 scale).
pub fn train_amortized(mut model: ModelParams, dataset: &[Tensor], cfg: &TrainConfig) -> Result<TrainReport> {
    cfg.validate()?;
    check_dataset(dataset, cfg.patch_size)?;
    model.lambda = cfg.lambda0;
    model.finetuned = None;
    let log = run_epochs(Trainee::Full(&mut model), dataset, cfg.lambda0, cfg)?;
    Ok(TrainReport { model, log })
}

/// Trains a copy of the base encoder against `lambda_prime` with the decoder
/// frozen and attaches it as the fine-tuned encoder. Zero epochs attach an
/// unchanged copy.
pub fn finetune_encoder(model: &ModelParams, lambda_prime: f64, dataset: &[Tensor], cfg: &TrainConfig) -> Result<TrainReport> {
    if !(lambda_prime > 0.0 && lambda_prime.is_finite()) {
        return Err(Error::Config(format!("lambda' {lambda_prime} must be positive")));
    }
    cfg.validate_common()?;
    check_dataset(dataset, cfg.patch_size)?;
    let mut encoder = model.encoder.clone();
    let log = run_epochs(Trainee::EncoderOnly(model, &mut encoder), dataset, lambda_prime, cfg)?;
    let mut out = model.clone();
    out.finetuned = Some(FinetunedEncoder {
        encoder,
        lambda: lambda_prime,
    });
    Ok(TrainReport { model: out, log })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::entropy::gaussian_pmf;
    use crate::models::Arch;

    fn tiny() -> ModelParams {
        ModelParams::new(
            Arch {
                n: 4,
                m: 6,
                m_hyper: 3,
                image_channels: 3,
            },
            BASE_LAMBDA,
            2,
        )
        .unwrap()
    }

    fn patches(n: usize, seed: u64) -> Vec<Tensor> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| {
                let (a, b) = (rng.gen_range(0.05..0.3), rng.gen_range(0.0..6.0));
                let data = (0..3 * 64 * 64)
                    .map(|i| {
                        let (c, r, col) = (i / 4096, (i / 64) % 64, i % 64);
                        (128.0 + 90.0 * (a * (r + col) as f64 + b + c as f64).sin()).clamp(0.0, 255.0)
                    })
                    .collect();
                Tensor::from_vec([1, 3, 64, 64], data).unwrap()
            })
            .collect()
    }

    #[test]
    fn batch_loss_matches_independent_recomputation() {
        let m = tiny();
        let batch = Tensor::stack(&patches(2, 1)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (ny, nz) = latent_sizes(&m, &batch);
        let noise = BatchNoise::draw(ny, nz, &mut rng);
        let got = batch_loss(&m, &m.encoder, &batch, 0.015, &noise, None).unwrap();

        let (y, z) = m.analyze(&batch).unwrap();
        let y = add_noise(&y, &noise.y).unwrap();
        let z = add_noise(&z, &noise.z).unwrap();
        let (_, sigma) = m.hyper_synthesize(&z).unwrap();
        let mut nats = 0.0;
        for (&v, &s) in y.data().iter().zip(sigma.data()) {
            nats -= gaussian_pmf(v, 1.0, s).ln();
        }
        let plane = z.height() * z.width();
        for (i, &v) in z.data().iter().enumerate() {
            nats -= m.decoder.prior.pmf((i / plane) % z.channels(), v, 1.0).ln();
        }
        let bpp = nats / std::f64::consts::LN_2 / (2.0 * 64.0 * 64.0);
        let xb = m.synthesize(&y).unwrap();
        let mse = crate::objectives::mse_distortion(&batch, &xb).unwrap();
        let want = bpp + 0.015 * mse;
        assert!((got.loss - want).abs() <= 1e-6 * want.abs().max(1.0), "{} vs {want}", got.loss);
        assert!((got.mse - mse).abs() < 1e-9);
    }

    #[test]
    fn smoke_epoch_is_finite_and_reproducible() {
        let data = patches(8, 4);
        let cfg = TrainConfig {
            batch_size: 4,
            learning_rate: 1e-3,
            ..TrainConfig::default()
        };
        let a = train_amortized(tiny(), &data, &cfg).unwrap();
        let b = train_amortized(tiny(), &data, &cfg).unwrap();
        assert!(a.log[0].loss.is_finite());
        assert_eq!(a.log, b.log);
        assert_eq!(a.model, b.model);
        assert_ne!(a.model.model_id(), tiny().model_id());
    }

    #[test]
    fn finetune_freezes_decoder() {
        let data = patches(4, 5);
        let m = tiny();
        let cfg = TrainConfig {
            batch_size: 2,
            learning_rate: 1e-3,
            ..TrainConfig::default()
        };
        let ft = finetune_encoder(&m, FINETUNE_LAMBDA, &data, &cfg).unwrap().model;
        assert_eq!(ft.decoder, m.decoder);
        assert_eq!(ft.decoder_id(), m.decoder_id());
        assert_eq!(ft.encoder, m.encoder);
        let f = ft.finetuned.as_ref().unwrap();
        assert_ne!(f.encoder, m.encoder);
        assert_eq!(f.lambda, FINETUNE_LAMBDA);
        assert_ne!(ft.model_id(), m.model_id());

        let none = finetune_encoder(&m, FINETUNE_LAMBDA, &data, &TrainConfig { epochs: 0, ..cfg }).unwrap();
        assert_eq!(none.model.finetuned.unwrap().encoder, m.encoder);
        assert!(none.log.is_empty());
    }

    #[test]
    fn config_and_data_validation() {
        let data = patches(2, 6);
        let bad = TrainConfig {
            lambda0: 0.02,
            ..TrainConfig::default()
        };
        assert!(matches!(train_amortized(tiny(), &data, &bad), Err(Error::Config(_))));
        let zero = TrainConfig {
            epochs: 0,
            ..TrainConfig::default()
        };
        assert!(matches!(train_amortized(tiny(), &data, &zero), Err(Error::Config(_))));
        let mut hot = data.clone();
        hot[0].data_mut()[0] = 300.0;
        assert!(matches!(train_amortized(tiny(), &hot, &TrainConfig::default()), Err(Error::Domain(_))));
        let nan = TrainConfig {
            learning_rate: 1e300,
            batch_size: 1,
            epochs: 3,
            ..TrainConfig::default()
        };
        match train_amortized(tiny(), &data, &nan) {
            Err(Error::NanTraining { epoch }) => assert!(epoch >= 1),
            Err(Error::Numeric(_)) => {}
            other => panic!("expected divergence, got {:?}", other.map(|r| r.log)),
        }
    }

    #[test]
    fn patches_are_crops() {
        let img = patches(1, 7).remove(0);
        let p = random_patches(&[img.clone()], 16, 3, 9).unwrap();
        assert_eq!(p.len(), 3);
        assert_eq!(p[0].shape(), [1, 3, 16, 16]);
        assert!(p[0].data().iter().all(|v| img.data().contains(v)));
        assert!(random_patches(&[img], 65, 1, 0).is_err());
    }
}
