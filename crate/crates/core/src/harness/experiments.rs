//! Experiment drivers: training, R-D sweeps, ROI and multi-distortion runs,
//! latent histograms and ablations. Independent jobs run on the current
//! rayon pool and are merged in job order, so results do not depend on the
//! worker count.

use std::collections::HashSet;
use std::fs::OpenOptions;
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::config::RunConfig;
use super::io::load_dir;
use crate::editing::{baseline, edit, edit_multidistortion, edit_roi, Budget, EditConfig, EditResult, EncoderVariant, Relaxation};
use crate::error::{Error, Result};
use crate::models::ModelParams;
use crate::objectives::{DistortionRegistry, EditTarget, RoiMap, GRADIENT_PROXY_ID};
use crate::tensor::Tensor;
use crate::training::{finetune_encoder, random_patches, train_amortized, TrainReport};

#[derive(Clone, Debug, PartialEq)]
pub struct NamedImage {
    pub name: String,
    pub image: Tensor,
}

pub fn load_images(dir: &Path) -> Result<Vec<NamedImage>> {
    Ok(load_dir(dir)?
        .into_iter()
        .map(|(name, image)| NamedImage { name, image })
        .collect())
}

pub fn training_patches(dir: &Path, cfg: &RunConfig) -> Result<Vec<Tensor>> {
    let images: Vec<Tensor> = load_dir(dir)?.into_iter().map(|(_, t)| t).collect();
    random_patches(&images, cfg.train.patch_size, cfg.train.patches, cfg.seed)
}

/// Trains a fresh model from `cfg.train` on patches of the images in `dir`.
pub fn train_model(cfg: &RunConfig, dir: &Path, log: Option<PathBuf>) -> Result<TrainReport> {
    let patches = training_patches(dir, cfg)?;
    let model = ModelParams::new(cfg.train.arch, cfg.train.lambda0, cfg.seed)?;
    train_amortized(model, &patches, &cfg.train_config(log))
}

/// Continues training `model` for `cfg.train.epochs` more epochs.
pub fn resume_training(model: ModelParams, cfg: &RunConfig, dir: &Path, log: Option<PathBuf>) -> Result<TrainReport> {
    let patches = training_patches(dir, cfg)?;
    train_amortized(model, &patches, &cfg.train_config(log))
}

pub fn finetune_model(model: &ModelParams, cfg: &RunConfig, dir: &Path, log: Option<PathBuf>) -> Result<TrainReport> {
    let patches = training_patches(dir, cfg)?;
    let tc = crate::training::TrainConfig {
        epochs: cfg.train.finetune_epochs,
        ..cfg.train_config(log)
    };
    finetune_encoder(model, cfg.train.finetune_lambda, &patches, &tc)
}

/// One point of a rate-distortion curve.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RdRow {
    pub image: String,
    pub lambda: f64,
    pub bpp: f64,
    pub psnr: f64,
    pub mse: f64,
    pub rd_cost: f64,
    pub delta_y: f64,
    pub delta_z: f64,
}

impl RdRow {
    pub fn from_result(image: &str, lambda: f64, r: &EditResult) -> Self {
        Self {
            image: image.to_string(),
            lambda,
            bpp: r.metrics.rate_bpp,
            psnr: r.metrics.psnr,
            mse: r.metrics.mse,
            rd_cost: r.metrics.rd_cost,
            delta_y: r.steps.delta_y,
            delta_z: r.steps.delta_z,
        }
    }
}

/// Name used for aggregate rows in R-D tables.
pub const MEAN_ROW: &str = "mean";

/// Per-lambda means over images. PSNR is the mean of per-image PSNR, not
/// the PSNR of the mean MSE.
pub fn aggregate(rows: &[RdRow]) -> Vec<RdRow> {
    let mut lambdas: Vec<f64> = Vec::new();
    for r in rows {
        if !lambdas.contains(&r.lambda) {
            lambdas.push(r.lambda);
        }
    }
    lambdas
        .into_iter()
        .map(|l| {
            let sel: Vec<&RdRow> = rows.iter().filter(|r| r.lambda == l && r.image != MEAN_ROW).collect();
            let n = sel.len() as f64;
            let mean = |f: fn(&RdRow) -> f64| sel.iter().map(|r| f(r)).sum::<f64>() / n;
            RdRow {
                image: MEAN_ROW.to_string(),
                lambda: l,
                bpp: mean(|r| r.bpp),
                psnr: mean(|r| r.psnr),
                mse: mean(|r| r.mse),
                rd_cost: mean(|r| r.rd_cost),
                delta_y: mean(|r| r.delta_y),
                delta_z: mean(|r| r.delta_z),
            }
        })
        .collect()
}

pub fn read_csv<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
    r.deserialize()
        .map(|row| row.map_err(|e| Error::Format(format!("{}: {e}", path.display()))))
        .collect()
}

pub fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for row in rows {
        w.serialize(row).map_err(|e| Error::Format(e.to_string()))?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Format(e.to_string()))?;
    crate::checkpoint::write_atomic(path, &bytes)
}

fn append_row<T: Serialize>(path: &Path, row: &T) -> Result<()> {
    let fresh = !path.exists() || std::fs::metadata(path).map(|m| m.len() == 0).unwrap_or(true);
    let file = OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| Error::io(path, e))?;
    let mut w = csv::WriterBuilder::new().has_headers(fresh).from_writer(file);
    w.serialize(row).map_err(|e| Error::Format(e.to_string()))?;
    w.flush().map_err(|e| Error::io(path, e))
}

/// Edits every image toward every `lambda` (MSE targets). Completed
/// `(image, lambda)` pairs found in `journal` are not rerun; new ones are
/// appended as they finish. Rows come back in image-then-lambda order.
pub fn rd_sweep(
    images: &[NamedImage],
    model: &ModelParams,
    lambdas: &[f64],
    config: &EditConfig,
    journal: Option<&Path>,
) -> Result<Vec<RdRow>> {
    if lambdas.iter().any(|&l| !(l > 0.0 && l.is_finite())) {
        return Err(Error::Config("lambdas must be positive".into()));
    }
    let done: Vec<RdRow> = match journal {
        Some(p) if p.exists() => read_csv(p)?,
        _ => Vec::new(),
    };
    let have: HashSet<(String, u64)> = done.iter().map(|r| (r.image.clone(), r.lambda.to_bits())).collect();
    let jobs: Vec<(usize, f64)> = (0..images.len())
        .flat_map(|i| lambdas.iter().map(move |&l| (i, l)))
        .filter(|(i, l)| !have.contains(&(images[*i].name.clone(), l.to_bits())))
        .collect();
    let lock = Mutex::new(());
    let registry = DistortionRegistry::default();
    let fresh: Vec<RdRow> = jobs
        .par_iter()
        .map(|&(i, l)| {
            let img = &images[i];
            let r = edit(&img.image, model, &EditTarget::mse(l), &registry, config)?;
            let row = RdRow::from_result(&img.name, l, &r);
            if let Some(p) = journal {
                let _g = lock.lock().expect("journal lock");
                append_row(p, &row)?;
            }
            Ok(row)
        })
        .collect::<Result<_>>()?;
    let mut out = Vec::with_capacity(images.len() * lambdas.len());
    for img in images {
        for &l in lambdas {
            let row = done
                .iter()
                .chain(&fresh)
                .find(|r| r.image == img.name && r.lambda == l)
                .expect("every job is done or journaled");
            out.push(row.clone());
        }
    }
    Ok(out)
}

/// Unit-width histogram with integer-centred bins `[k - 0.5, k + 0.5)`;
/// values beyond the outer bins land in them.
#[derive(Clone, Debug, PartialEq)]
pub struct Histogram {
    pub half_range: i32,
    pub counts: Vec<u64>,
}

impl Histogram {
    pub fn new(values: &[f64], half_range: i32) -> Self {
        let mut counts = vec![0u64; (2 * half_range + 1) as usize];
        for &v in values {
            let k = (v + 0.5).floor().clamp(-half_range as f64, half_range as f64) as i32;
            counts[(k + half_range) as usize] += 1;
        }
        Self { half_range, counts }
    }

    pub fn count(&self, bin: i32) -> u64 {
        self.counts[(bin + self.half_range) as usize]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn mass(&self, bin: i32) -> f64 {
        self.count(bin) as f64 / self.total().max(1) as f64
    }
}

/// `(y_hat - mu) / sigma` for every latent, with `mu`, `sigma` from the
/// hyperprior at the result's own `z_hat`.
pub fn normalized_latents(result: &EditResult, model: &ModelParams) -> Result<Vec<f64>> {
    let (mu, sigma) = model.hyper_synthesize(&result.z_hat())?;
    let y = result.y_hat();
    Ok(y.data()
        .iter()
        .zip(mu.data())
        .zip(sigma.data())
        .map(|((v, m), s)| (v - m) / s)
        .collect())
}

pub const HISTOGRAM_HALF_RANGE: i32 = 10;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HistogramRow {
    pub bin: i32,
    pub pre_edit: u64,
    pub naive: u64,
    pub enhanced: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Bin0Row {
    pub image: String,
    pub pre_edit: f64,
    pub naive: f64,
    pub enhanced: f64,
}

pub struct HistogramReport {
    pub rows: Vec<HistogramRow>,
    pub bin0: Vec<Bin0Row>,
}

/// Normalized-latent histograms before editing and after naive and enhanced
/// edits toward `lambda`, pooled over images, plus per-image bin-0 mass.
pub fn histogram_experiment(images: &[NamedImage], model: &ModelParams, lambda: f64, config: &EditConfig) -> Result<HistogramReport> {
    let registry = DistortionRegistry::default();
    let target = EditTarget::mse(lambda);
    let naive_cfg = EditConfig {
        grid_search_enabled: false,
        adapt_delta_y: false,
        ..config.clone()
    };
    let enhanced_cfg = EditConfig {
        grid_search_enabled: true,
        adapt_delta_y: true,
        ..config.clone()
    };
    let per_image: Vec<[Histogram; 3]> = images
        .par_iter()
        .map(|img| {
            let pre = baseline(&img.image, model, config.encoder, &target, &registry)?;
            let naive = edit(&img.image, model, &target, &registry, &naive_cfg)?;
            let enh = edit(&img.image, model, &target, &registry, &enhanced_cfg)?;
            let h = |r: &EditResult| Ok(Histogram::new(&normalized_latents(r, model)?, HISTOGRAM_HALF_RANGE));
            Ok([h(&pre)?, h(&naive)?, h(&enh)?])
        })
        .collect::<Result<_>>()?;
    let rows = (-HISTOGRAM_HALF_RANGE..=HISTOGRAM_HALF_RANGE)
        .map(|bin| HistogramRow {
            bin,
            pre_edit: per_image.iter().map(|h| h[0].count(bin)).sum(),
            naive: per_image.iter().map(|h| h[1].count(bin)).sum(),
            enhanced: per_image.iter().map(|h| h[2].count(bin)).sum(),
        })
        .collect();
    let bin0 = images
        .iter()
        .zip(&per_image)
        .map(|(img, h)| Bin0Row {
            image: img.name.clone(),
            pre_edit: h[0].mass(0),
            naive: h[1].mass(0),
            enhanced: h[2].mass(0),
        })
        .collect();
    Ok(HistogramReport { rows, bin0 })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoiReport {
    pub bpp: f64,
    pub bpp_inside: f64,
    pub bpp_outside: f64,
    pub mse_inside: f64,
    pub mse_outside: f64,
    pub psnr: f64,
}

fn masked_mse(x: &Tensor, xb: &Tensor, inside: &dyn Fn(usize, usize) -> bool) -> f64 {
    let (mut s, mut n) = (0.0, 0usize);
    for c in 0..x.channels() {
        for py in 0..x.height() {
            for px in 0..x.width() {
                if inside(py, px) {
                    let d = x.at(0, c, py, px) - xb.at(0, c, py, px);
                    s += d * d;
                    n += 1;
                }
            }
        }
    }
    if n == 0 {
        0.0
    } else {
        s / n as f64
    }
}

/// ROI edit; "inside" is where the (resampled) map is at least one half.
pub fn roi_experiment(x: &Tensor, model: &ModelParams, roi_map: &RoiMap, base_lambda: f64, config: &EditConfig) -> Result<(RoiReport, EditResult)> {
    let registry = DistortionRegistry::default();
    let r = edit_roi(x, model, roi_map, base_lambda, &registry, config)?;
    let m = roi_map.resample(x.height(), x.width());
    let inside = |py: usize, px: usize| m.at(py, px) >= 0.5;
    let outside = |py: usize, px: usize| m.at(py, px) < 0.5;
    let report = RoiReport {
        bpp: r.metrics.rate_bpp,
        bpp_inside: r.rate.region_bpp(inside),
        bpp_outside: r.rate.region_bpp(outside),
        mse_inside: masked_mse(x, &r.reconstruction, &inside),
        mse_outside: masked_mse(x, &r.reconstruction, &outside),
        psnr: r.metrics.psnr,
    };
    Ok((report, r))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MdRow {
    pub image: String,
    pub lambda_d: f64,
    pub lambda_p: f64,
    pub target_bpp: f64,
    pub bpp: f64,
    pub mse: f64,
    pub psnr: f64,
    pub perceptual: f64,
}

/// Multi-distortion edits of every image for each `lambda_p`, in image then
/// `lambda_p` order. Without `target_bpp` each image targets its own rate
/// before editing.
pub fn md_sweep(
    images: &[NamedImage],
    model: &ModelParams,
    lambda_d: f64,
    lambda_ps: &[f64],
    target_bpp: Option<f64>,
    config: &EditConfig,
) -> Result<Vec<MdRow>> {
    let registry = DistortionRegistry::default();
    let targets: Vec<f64> = match target_bpp {
        Some(t) => vec![t; images.len()],
        None => images
            .par_iter()
            .map(|img| {
                let b = baseline(&img.image, model, config.encoder, &EditTarget::mse(lambda_d), &registry)?;
                Ok(b.metrics.rate_bpp)
            })
            .collect::<Result<_>>()?,
    };
    let jobs: Vec<(usize, f64)> = (0..images.len())
        .flat_map(|i| lambda_ps.iter().map(move |&l| (i, l)))
        .collect();
    jobs.par_iter()
        .map(|&(i, lp)| {
            let img = &images[i];
            let target_bpp = targets[i];
            let r = edit_multidistortion(&img.image, model, lambda_d, lp, target_bpp, &registry, config)?;
            Ok(MdRow {
                image: img.name.clone(),
                lambda_d,
                lambda_p: lp,
                target_bpp,
                bpp: r.metrics.rate_bpp,
                mse: r.metrics.mse,
                psnr: r.metrics.psnr,
                perceptual: r.metrics.perceptual.ok_or_else(|| {
                    Error::Config(format!("multi-distortion target lacks '{GRADIENT_PROXY_ID}'"))
                })?,
            })
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AblationMode {
    AdaptiveDelta,
    SgaVsAun,
    Budget,
    EncoderFt,
    NoGridSearch,
}

impl std::str::FromStr for AblationMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "adaptive_delta" => Ok(Self::AdaptiveDelta),
            "sga_vs_aun" => Ok(Self::SgaVsAun),
            "budget" => Ok(Self::Budget),
            "encoder_ft" => Ok(Self::EncoderFt),
            "no_grid_search" => Ok(Self::NoGridSearch),
            _ => Err(Error::Config(format!(
                "unknown ablation '{s}' (adaptive_delta, sga_vs_aun, budget, encoder_ft, no_grid_search)"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub image: String,
    pub variant: String,
    pub seed: u64,
    pub iterations: usize,
    pub lambda: f64,
    pub rd_cost: f64,
    pub bpp: f64,
    pub psnr: f64,
    pub delta_y: f64,
    pub delta_z: f64,
}

/// `better` is expected to have median cost at most that of `worse`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    /// Image name, or `all` when pooled.
    pub scope: String,
    pub better: String,
    pub worse: String,
    pub median_better: f64,
    pub median_worse: f64,
    pub holds: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub mode: AblationMode,
    pub rows: Vec<AblationRow>,
    pub comparisons: Vec<Comparison>,
    pub pass: bool,
}

pub fn median(v: &[f64]) -> f64 {
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    let n = s.len();
    if n == 0 {
        f64::NAN
    } else if n % 2 == 1 {
        s[n / 2]
    } else {
        0.5 * (s[n / 2 - 1] + s[n / 2])
    }
}

struct Variant {
    name: String,
    config: EditConfig,
}

fn run_variants(images: &[NamedImage], model: &ModelParams, lambda: f64, variants: &[Variant], seeds: &[u64]) -> Result<Vec<AblationRow>> {
    let registry = DistortionRegistry::default();
    let target = EditTarget::mse(lambda);
    let jobs: Vec<(usize, usize, u64)> = (0..images.len())
        .flat_map(|i| (0..variants.len()).flat_map(move |v| seeds.iter().map(move |&s| (i, v, s))))
        .collect();
    jobs.par_iter()
        .map(|&(i, v, seed)| {
            let cfg = EditConfig {
                seed,
                ..variants[v].config.clone()
            };
            let r = edit(&images[i].image, model, &target, &registry, &cfg)?;
            Ok(AblationRow {
                image: images[i].name.clone(),
                variant: variants[v].name.clone(),
                seed,
                iterations: cfg.iterations,
                lambda,
                rd_cost: r.metrics.rd_cost,
                bpp: r.metrics.rate_bpp,
                psnr: r.metrics.psnr,
                delta_y: r.steps.delta_y,
                delta_z: r.steps.delta_z,
            })
        })
        .collect()
}

fn compare(rows: &[AblationRow], scope: Option<&str>, better: &str, worse: &str) -> Comparison {
    let costs = |v: &str| -> Vec<f64> {
        rows.iter()
            .filter(|r| r.variant == v && scope.map_or(true, |s| r.image == s))
            .map(|r| r.rd_cost)
            .collect()
    };
    let (b, w) = (median(&costs(better)), median(&costs(worse)));
    Comparison {
        scope: scope.unwrap_or("all").to_string(),
        better: better.to_string(),
        worse: worse.to_string(),
        median_better: b,
        median_worse: w,
        holds: b <= w,
    }
}

/// Paired comparison for `mode`. `base` supplies the iteration budget and
/// seeds start at `base.seed`; `lambda0` is the model's training weight.
pub fn ablate(mode: AblationMode, images: &[NamedImage], model: &ModelParams, lambda0: f64, base: &EditConfig, seeds: usize) -> Result<AblationReport> {
    let seeds: Vec<u64> = (0..seeds.max(1) as u64).map(|s| base.seed + s).collect();
    let enhanced = EditConfig {
        grid_search_enabled: true,
        adapt_delta_y: true,
        relaxation: Relaxation::Sga,
        encoder: EncoderVariant::Base,
        ..base.clone()
    };
    let v = |name: &str, config: EditConfig| Variant {
        name: name.to_string(),
        config,
    };
    let (lambda, variants, pairs): (f64, Vec<Variant>, Vec<(&str, &str)>) = match mode {
        AblationMode::AdaptiveDelta => (
            lambda0 / 8.0,
            vec![
                v("enhanced", enhanced.clone()),
                v(
                    "naive",
                    EditConfig {
                        grid_search_enabled: false,
                        adapt_delta_y: false,
                        ..enhanced.clone()
                    },
                ),
            ],
            vec![("enhanced", "naive")],
        ),
        AblationMode::SgaVsAun => (
            5.0 * lambda0,
            vec![
                v("sga", enhanced.clone()),
                v(
                    "aun",
                    EditConfig {
                        relaxation: Relaxation::Aun,
                        ..enhanced.clone()
                    },
                ),
            ],
            vec![("sga", "aun")],
        ),
        AblationMode::EncoderFt => {
            if model.finetuned.is_none() {
                return Err(Error::Config("encoder_ft needs a checkpoint with a fine-tuned encoder".into()));
            }
            let short = enhanced.clone().with_budget(Budget::Short(200));
            (
                5.0 * lambda0,
                vec![
                    v(
                        "finetuned",
                        EditConfig {
                            encoder: EncoderVariant::Finetuned,
                            ..short.clone()
                        },
                    ),
                    v("base", short),
                ],
                vec![("finetuned", "base")],
            )
        }
        AblationMode::NoGridSearch => (
            lambda0,
            vec![
                v("searched", enhanced.clone()),
                v(
                    "fixed",
                    EditConfig {
                        grid_search_enabled: false,
                        ..enhanced.clone()
                    },
                ),
            ],
            vec![("searched", "fixed")],
        ),
        AblationMode::Budget => {
            let full = enhanced.iterations;
            let mut vs: Vec<Variant> = [50usize, 100, 200]
                .into_iter()
                .filter(|&n| n < full)
                .map(|n| v(&format!("iters_{n}"), enhanced.clone().with_budget(Budget::Short(n))))
                .collect();
            vs.push(v(&format!("iters_{full}"), enhanced.clone()));
            (5.0 * lambda0, vs, Vec::new())
        }
    };
    let rows = run_variants(images, model, lambda, &variants, &seeds)?;
    let mut comparisons = Vec::new();
    if mode == AblationMode::Budget {
        // Each longer budget should do no worse than the next shorter one.
        for w in variants.windows(2) {
            comparisons.push(compare(&rows, None, &w[1].name, &w[0].name));
        }
    } else {
        for (b, w) in pairs {
            if mode == AblationMode::AdaptiveDelta {
                for img in images {
                    comparisons.push(compare(&rows, Some(&img.name), b, w));
                }
            } else {
                comparisons.push(compare(&rows, None, b, w));
            }
        }
    }
    let pass = comparisons.iter().all(|c| c.holds);
    Ok(AblationReport {
        mode,
        rows,
        comparisons,
        pass,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(image: &str, lambda: f64, bpp: f64, mse: f64) -> RdRow {
        RdRow {
            image: image.into(),
            lambda,
            bpp,
            psnr: crate::objectives::psnr(mse),
            mse,
            rd_cost: bpp + lambda * mse,
            delta_y: 1.0,
            delta_z: 1.0,
        }
    }

    #[test]
    fn aggregate_psnr_is_mean_of_psnr() {
        let rows = vec![row("a", 0.1, 1.0, 10.0), row("b", 0.1, 3.0, 1000.0)];
        let agg = aggregate(&rows);
        assert_eq!(agg.len(), 1);
        let mean_psnr = (rows[0].psnr + rows[1].psnr) / 2.0;
        assert!((agg[0].psnr - mean_psnr).abs() < 1e-12);
        let psnr_of_mean = crate::objectives::psnr(505.0);
        assert!((agg[0].psnr - psnr_of_mean).abs() > 1.0);
        assert_eq!(agg[0].bpp, 2.0);
        assert_eq!(agg[0].image, MEAN_ROW);
    }

    #[test]
    fn histogram_bins() {
        let h = Histogram::new(&[0.0; 17], 3);
        assert_eq!(h.count(0), 17);
        assert_eq!(h.mass(0), 1.0);
        let h = Histogram::new(&[-0.5, 0.49, 0.5, -0.51, 7.0, -9.0, 2.2], 3);
        assert_eq!(h.total(), 7);
        assert_eq!((h.count(-1), h.count(0), h.count(1)), (1, 2, 1));
        assert_eq!((h.count(3), h.count(-3), h.count(2)), (1, 1, 1));
    }

    #[test]
    fn medians() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), 2.5);
        assert!(median(&[]).is_nan());
    }

    #[test]
    fn ablation_names() {
        for m in ["adaptive_delta", "sga_vs_aun", "budget", "encoder_ft", "no_grid_search"] {
            let mode: AblationMode = m.parse().unwrap();
            assert_eq!(serde_json::to_string(&mode).unwrap(), format!("\"{m}\""));
        }
        assert!("x".parse::<AblationMode>().is_err());
    }
}
