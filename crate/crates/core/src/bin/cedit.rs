use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use cedit::checkpoint;
use cedit::codec::{self, EntropyCoder, ProcessCoder, RawCoder};
use cedit::editing::edit;
use cedit::harness::config::{output_dir, Manifest, RunConfig};
use cedit::harness::experiments::{
    ablate, aggregate, histogram_experiment, load_images, md_sweep, rd_sweep, roi_experiment, write_csv, AblationMode, NamedImage, RdRow,
};
use cedit::harness::io::{image_name, load_image, load_roi_map, save_image, save_roi_map};
use cedit::harness::plot;
use cedit::models::{id_hex, ModelParams};
use cedit::objectives::{mse_distortion, psnr, DistortionRegistry, EditTarget, RoiMap};
use cedit::training::LAMBDA_LADDER;
use cedit::{Error, Result};

#[derive(Parser)]
#[command(name = "cedit", version, about = "Per-image latent editing for a learned image codec")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// TOML run configuration.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Configuration override, e.g. `edit.iterations=500`. Repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads (0 = all cores).
    #[arg(long, global = true)]
    jobs: Option<usize>,
    /// Output directory (default: $CEDIT_HOME/<command>).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model on random patches of the images in a directory.
    Train {
        #[arg(long)]
        data: PathBuf,
        /// Continue training this checkpoint instead of a fresh model.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Fine-tune the encoder of a trained model with the decoder frozen.
    FinetuneEncoder {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
    },
    /// Edit one image toward one or more MSE targets.
    Edit {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        image: PathBuf,
        #[arg(long = "lambda", value_delimiter = ',')]
        lambdas: Vec<f64>,
        /// Use the seven-value training ladder as targets.
        #[arg(long)]
        ladder: bool,
        /// Record and plot the per-iteration trace.
        #[arg(long)]
        journal: bool,
    },
    /// Edit one image and write a bitstream.
    Compress {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        lambda: Option<f64>,
        #[arg(long)]
        output: PathBuf,
        /// External entropy coder executable; raw varints when absent.
        #[arg(long)]
        coder: Option<PathBuf>,
    },
    /// Decode a bitstream with the decoder half of a checkpoint.
    Decompress {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
        /// Report PSNR against this image.
        #[arg(long)]
        original: Option<PathBuf>,
        #[arg(long)]
        coder: Option<PathBuf>,
    },
    /// Rate-distortion sweep over a directory of images (resumable).
    RdSweep {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        images: PathBuf,
        /// Targets; default is lambda0 times {1/8, 1/4, 1/2, 1, 5}.
        #[arg(long = "lambda", value_delimiter = ',')]
        lambdas: Vec<f64>,
    },
    /// Region-of-interest edit.
    Roi {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        image: PathBuf,
        /// Grayscale PNG; the left half-plane map when absent.
        #[arg(long)]
        roi_map: Option<PathBuf>,
        #[arg(long, default_value_t = 1.0)]
        inside: f64,
        #[arg(long, default_value_t = 0.0)]
        outside: f64,
        #[arg(long)]
        lambda: Option<f64>,
    },
    /// Multi-distortion sweep over the perceptual weight at a rate target.
    MdSweep {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        images: PathBuf,
        #[arg(long)]
        lambda_d: Option<f64>,
        #[arg(long = "lambda-p", value_delimiter = ',', default_values_t = vec![0.1, 0.5, 1.0])]
        lambda_p: Vec<f64>,
        /// Defaults to each image's rate before editing.
        #[arg(long)]
        target_bpp: Option<f64>,
    },
    /// Normalized-latent histograms before and after editing.
    Histogram {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        images: PathBuf,
        /// Default: lambda0 / 8.
        #[arg(long)]
        lambda: Option<f64>,
    },
    /// Paired ablation study.
    Ablate {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        images: PathBuf,
        #[arg(long)]
        mode: String,
        #[arg(long, default_value_t = 5)]
        seeds: usize,
    },
    /// Re-render a plot from its CSV.
    Plot {
        #[arg(long, value_enum)]
        kind: PlotKind,
        #[arg(long)]
        csv: PathBuf,
        #[arg(long)]
        svg: PathBuf,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum PlotKind {
    Rd,
    Histogram,
    Journal,
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Train { .. } => "train",
            Command::FinetuneEncoder { .. } => "finetune-encoder",
            Command::Edit { .. } => "edit",
            Command::Compress { .. } => "compress",
            Command::Decompress { .. } => "decompress",
            Command::RdSweep { .. } => "rd-sweep",
            Command::Roi { .. } => "roi",
            Command::MdSweep { .. } => "md-sweep",
            Command::Histogram { .. } => "histogram",
            Command::Ablate { .. } => "ablate",
            Command::Plot { .. } => "plot",
        }
    }
}

struct Run {
    command: &'static str,
    cfg: RunConfig,
    out: PathBuf,
    inputs: Vec<String>,
    outputs: Vec<String>,
    model_id: Option<String>,
}

impl Run {
    fn model(&mut self, path: &Path) -> Result<ModelParams> {
        let m = checkpoint::load(path)?;
        self.inputs.push(path.display().to_string());
        self.model_id = Some(id_hex(&m.model_id()));
        Ok(m)
    }

    fn input(&mut self, p: &Path) {
        self.inputs.push(p.display().to_string());
    }

    fn output(&mut self, name: &str) -> PathBuf {
        let p = self.out.join(name);
        self.outputs.push(p.display().to_string());
        p
    }

    fn finish(self) -> Result<()> {
        let m = Manifest {
            command: self.command.to_string(),
            config_hash: self.cfg.hash(),
            model_id: self.model_id,
            seed: self.cfg.seed,
            config: self.cfg,
            inputs: self.inputs,
            outputs: self.outputs,
        };
        let p = m.write(&self.out)?;
        eprintln!("manifest: {}", p.display());
        Ok(())
    }
}

fn coder(program: &Option<PathBuf>) -> Box<dyn EntropyCoder> {
    match program {
        Some(p) => Box::new(ProcessCoder::new(p)),
        None => Box::new(RawCoder),
    }
}

fn lambda_tag(l: f64) -> String {
    format!("{l}").replace('.', "p")
}

fn dispatch(cli: Cli) -> Result<()> {
    let c = &cli.common;
    let mut overrides = c.overrides.clone();
    if let Some(s) = c.seed {
        overrides.push(format!("seed={s}"));
    }
    if let Some(j) = c.jobs {
        overrides.push(format!("jobs={j}"));
    }
    let cfg = RunConfig::load(c.config.as_deref(), &overrides)?;
    let command = cli.command.name();
    if let Command::Plot { kind, csv, svg } = &cli.command {
        return match kind {
            PlotKind::Rd => plot::rd_curve(csv, svg),
            PlotKind::Histogram => plot::histogram(csv, svg),
            PlotKind::Journal => plot::journal(csv, svg),
        };
    }
    let out = output_dir(c.out.as_deref(), command);
    std::fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.jobs)
        .build()
        .map_err(|e| Error::Config(e.to_string()))?;
    let mut run = Run {
        command,
        cfg: cfg.clone(),
        out,
        inputs: Vec::new(),
        outputs: Vec::new(),
        model_id: None,
    };
    pool.install(|| execute(&cli.command, &cfg, &mut run))?;
    run.finish()
}

fn execute(command: &Command, cfg: &RunConfig, run: &mut Run) -> Result<()> {
    use cedit::harness::experiments as ex;
    let registry = DistortionRegistry::default();
    let edit_cfg = cfg.edit_config();
    match command {
        Command::Train { data, resume } => {
            run.input(data);
            let log = run.output("train_log.csv");
            let report = match resume {
                Some(p) => {
                    let m = run.model(p)?;
                    ex::resume_training(m, cfg, data, Some(log))?
                }
                None => ex::train_model(cfg, data, Some(log))?,
            };
            let path = run.output("model.cedm");
            checkpoint::save(&report.model, &path)?;
            run.model_id = Some(id_hex(&report.model.model_id()));
            if let Some(last) = report.log.last() {
                println!("epoch {} loss {:.5} bpp {:.4} mse {:.3}", last.epoch, last.loss, last.bpp, last.mse);
            }
            println!("{}", path.display());
        }
        Command::FinetuneEncoder { model, data } => {
            let m = run.model(model)?;
            run.input(data);
            let log = run.output("finetune_log.csv");
            let report = ex::finetune_model(&m, cfg, data, Some(log))?;
            let path = run.output("model.cedm");
            checkpoint::save(&report.model, &path)?;
            run.model_id = Some(id_hex(&report.model.model_id()));
            println!("{}", path.display());
        }
        Command::Edit {
            model,
            image,
            lambdas,
            ladder,
            journal,
        } => {
            let m = run.model(model)?;
            run.input(image);
            let x = load_image(image)?;
            let mut targets = lambdas.clone();
            if *ladder {
                targets.extend(LAMBDA_LADDER);
            }
            if targets.is_empty() {
                targets.push(m.lambda);
            }
            let name = image_name(image);
            let ec = cedit::editing::EditConfig {
                record_journal: *journal,
                ..edit_cfg
            };
            let mut rows = Vec::new();
            for &l in &targets {
                let r = edit(&x, &m, &EditTarget::mse(l), &registry, &ec)?;
                let tag = lambda_tag(l);
                save_image(&run.output(&format!("{name}_{tag}.png")), &r.reconstruction)?;
                if *journal {
                    let p = run.output(&format!("journal_{tag}.csv"));
                    cedit::editing::write_journal_csv(&p, &r.journal)?;
                    plot::journal(&p, &run.output(&format!("journal_{tag}.svg")))?;
                }
                let row = RdRow::from_result(&name, l, &r);
                println!("lambda {l} bpp {:.4} psnr {:.2}", row.bpp, row.psnr);
                rows.push(row);
            }
            write_csv(&run.output("edit.csv"), &rows)?;
        }
        Command::Compress {
            model,
            image,
            lambda,
            output,
            coder: prog,
        } => {
            let m = run.model(model)?;
            run.input(image);
            let x = load_image(image)?;
            let l = lambda.unwrap_or(m.lambda);
            let coder = coder(prog);
            let c = codec::compress(&x, &m, &EditTarget::mse(l), &registry, &edit_cfg, coder.as_ref())?;
            checkpoint::write_atomic(output, &c.bytes)?;
            run.outputs.push(output.display().to_string());
            let t = codec::table_rate(&codec::symbol_streams(&c.result, &m)?)?;
            let pixels = (x.height() * x.width()) as f64;
            println!(
                "{} bytes ({:.4} bpp), theoretical {:.4} bpp (tables {:.4}), psnr {:.2}",
                c.bytes.len(),
                c.bytes.len() as f64 * 8.0 / pixels,
                c.result.metrics.rate_bpp,
                t.total_bits() / pixels,
                c.result.metrics.psnr
            );
        }
        Command::Decompress {
            model,
            input,
            output,
            original,
            coder: prog,
        } => {
            let m = run.model(model)?;
            run.input(input);
            let bytes = std::fs::read(input).map_err(|e| Error::io(input, e))?;
            let d = codec::decompress(&bytes, &m, coder(prog).as_ref())?;
            save_image(output, &d.reconstruction)?;
            run.outputs.push(output.display().to_string());
            if let Some(o) = original {
                run.input(o);
                let x = load_image(o)?;
                println!("psnr {:.2}", psnr(mse_distortion(&x, &d.reconstruction)?));
            }
        }
        Command::RdSweep { model, images, lambdas } => {
            let m = run.model(model)?;
            run.input(images);
            let imgs = load_images(images)?;
            let targets = if lambdas.is_empty() {
                [0.125, 0.25, 0.5, 1.0, 5.0].iter().map(|f| f * m.lambda).collect()
            } else {
                lambdas.clone()
            };
            let journal = run.output("journal.csv");
            let mut rows = rd_sweep(&imgs, &m, &targets, &edit_cfg, Some(&journal))?;
            rows.extend(aggregate(&rows));
            let csv = run.output("rd.csv");
            write_csv(&csv, &rows)?;
            plot::rd_curve(&csv, &run.output("rd.svg"))?;
            for r in rows.iter().filter(|r| r.image == ex::MEAN_ROW) {
                println!("lambda {} mean bpp {:.4} mean psnr {:.2}", r.lambda, r.bpp, r.psnr);
            }
        }
        Command::Roi {
            model,
            image,
            roi_map,
            inside,
            outside,
            lambda,
        } => {
            let m = run.model(model)?;
            run.input(image);
            let x = load_image(image)?;
            let map = match roi_map {
                Some(p) => {
                    run.input(p);
                    load_roi_map(p)?
                }
                None => RoiMap::half_plane(x.height(), x.width(), *inside, *outside)?,
            };
            save_roi_map(&run.output("roi_map.png"), &map)?;
            let (report, r) = roi_experiment(&x, &m, &map, lambda.unwrap_or(m.lambda), &edit_cfg)?;
            save_image(&run.output("reconstruction.png"), &r.reconstruction)?;
            write_csv(&run.output("roi.csv"), &[report.clone()])?;
            println!(
                "bpp inside {:.4} outside {:.4}; mse inside {:.2} outside {:.2}",
                report.bpp_inside, report.bpp_outside, report.mse_inside, report.mse_outside
            );
        }
        Command::MdSweep {
            model,
            images,
            lambda_d,
            lambda_p,
            target_bpp,
        } => {
            let m = run.model(model)?;
            run.input(images);
            let imgs = load_images(images)?;
            let rows = md_sweep(&imgs, &m, lambda_d.unwrap_or(m.lambda), lambda_p, *target_bpp, &edit_cfg)?;
            write_csv(&run.output("md.csv"), &rows)?;
            for r in &rows {
                println!("{} lambda_p {} bpp {:.4} mse {:.2} proxy {:.4}", r.image, r.lambda_p, r.bpp, r.mse, r.perceptual);
            }
        }
        Command::Histogram { model, images, lambda } => {
            let m = run.model(model)?;
            run.input(images);
            let imgs: Vec<NamedImage> = load_images(images)?;
            let rep = histogram_experiment(&imgs, &m, lambda.unwrap_or(m.lambda / 8.0), &edit_cfg)?;
            let csv = run.output("histogram.csv");
            write_csv(&csv, &rep.rows)?;
            write_csv(&run.output("bin0.csv"), &rep.bin0)?;
            plot::histogram(&csv, &run.output("histogram.svg"))?;
            for b in &rep.bin0 {
                println!("{} bin-0 mass pre {:.4} naive {:.4} enhanced {:.4}", b.image, b.pre_edit, b.naive, b.enhanced);
            }
        }
        Command::Ablate {
            model,
            images,
            mode,
            seeds,
        } => {
            let mode: AblationMode = mode.parse()?;
            let m = run.model(model)?;
            run.input(images);
            let imgs = load_images(images)?;
            let rep = ablate(mode, &imgs, &m, m.lambda, &edit_cfg, *seeds)?;
            let tag = serde_json::to_string(&mode).map_err(|e| Error::Format(e.to_string()))?;
            let tag = tag.trim_matches('"');
            write_csv(&run.output(&format!("ablation_{tag}.csv")), &rep.rows)?;
            write_csv(&run.output(&format!("ablation_{tag}_summary.csv")), &rep.comparisons)?;
            for cmp in &rep.comparisons {
                println!(
                    "{}: {} {:.5} vs {} {:.5} -> {}",
                    cmp.scope,
                    cmp.better,
                    cmp.median_better,
                    cmp.worse,
                    cmp.median_worse,
                    if cmp.holds { "holds" } else { "violated" }
                );
            }
            println!("{}", if rep.pass { "PASS" } else { "FAIL" });
        }
        Command::Plot { .. } => unreachable!("handled before the run starts"),
    }
    Ok(())
}

fn main() -> ExitCode {
    match dispatch(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            let mut src = std::error::Error::source(&e);
            while let Some(s) = src {
                eprintln!("  caused by: {s}");
                src = s.source();
            }
            ExitCode::FAILURE
        }
    }
}
