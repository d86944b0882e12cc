mod config;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use attnflow_core::dataio::{dequantize, downscale_area, pgm_encode, tile_grid, write_file, Dataset};
use attnflow_core::flowmodel::{bits_per_dim, FlowModel};
use attnflow_core::numkit::Tensor;
use attnflow_core::par::Execution;
use attnflow_core::training::{load_checkpoint, Trainer, CHECKPOINT_FILE, METRICS_FILE};
use attnflow_core::verify::{run_suite, write_reports, SuiteOptions};
use attnflow_core::{Error, ErrorClass, Result};

use config::RunConfig;

const CONFIG_ECHO: &str = "config.txt";

#[derive(Parser)]
#[command(name = "attnflow", version, about = "Normalizing flows with invertible attention")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Dequant {
    /// `(k + u) / 256` with seeded uniform `u`.
    Uniform,
    /// `k / 256`.
    None,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model; writes config echo, metrics, checkpoint and sample grids to OUT.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Overrides `[data] source`.
        #[arg(long)]
        data: Option<String>,
        #[arg(long)]
        out: PathBuf,
        /// Overrides both the model and training seeds.
        #[arg(long)]
        seed: Option<u64>,
        /// Continue from OUT/checkpoint.afck.
        #[arg(long)]
        resume: bool,
    },
    /// Draw samples from a checkpoint into a PGM grid.
    Sample {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long, default_value_t = 16)]
        n: usize,
        /// Defaults to the model's configured temperature.
        #[arg(long)]
        temperature: Option<f64>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Conditioning images for conditional models.
        #[arg(long)]
        data: Option<String>,
    },
    /// Print the mean bits/dim of a dataset under a checkpoint.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: String,
        #[arg(long, default_value_t = 256)]
        batch: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, value_enum, default_value_t = Dequant::Uniform)]
        dequant: Dequant,
    },
    /// Encode and decode a dataset; prints the max error and writes a grid.
    Reconstruct {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: String,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 16)]
        n: usize,
    },
    /// Run the numerical oracle suite; exits 3 if any check fails.
    Verify {
        #[arg(long, default_value = "all")]
        suite: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// CSV report path.
        #[arg(long)]
        report: Option<PathBuf>,
        #[arg(long)]
        roundtrip_seeds: Option<usize>,
        #[arg(long)]
        jacobian_seeds: Option<usize>,
        #[arg(long)]
        model_seeds: Option<usize>,
    },
}

fn exit_code(class: ErrorClass) -> u8 {
    match class {
        ErrorClass::Usage => 1,
        ErrorClass::Data => 2,
        ErrorClass::Numerical => 3,
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli.command) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(e.class()))
        }
    }
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::Io {
        path: path.display().to_string(),
        source: e,
    })
}

/// Dataset `source` shaped for `model`: toy images at the model resolution,
/// IDX images block-downscaled to the model height when they divide evenly.
fn load_data(source: &str, model: &FlowModel) -> Result<Dataset> {
    let data = config::DataConfig {
        source: source.to_string(),
        resolution: model.config().input_height,
        ..config::DataConfig::default()
    };
    let loaded = data.load()?;
    let (want, got) = (model.input_shape(1).h(), loaded.image_shape().h());
    if got > want && got % want == 0 {
        loaded.downscaled(got / want)
    } else {
        Ok(loaded)
    }
}

fn grid(x: &Tensor) -> Result<Vec<u8>> {
    let n = x.shape().b();
    let cols = (n as f64).sqrt().ceil().max(1.0) as usize;
    let rows = n.div_ceil(cols).max(1);
    pgm_encode(&tile_grid(x, rows, cols)?)
}

fn conditions(model: &FlowModel, data: Option<&Dataset>, n: usize, seed: u64) -> Result<Option<Tensor>> {
    if !model.config().conditional {
        return Ok(None);
    }
    let data = data.ok_or_else(|| Error::Config("conditional model needs --data for conditioning images".into()))?;
    let idx: Vec<usize> = (0..n).map(|i| i % data.len().max(1)).collect();
    let x = data.batch(&idx, &mut ChaCha8Rng::seed_from_u64(seed))?;
    downscale_area(&x, 2).map(Some)
}

fn run(cmd: Command) -> Result<u8> {
    match cmd {
        Command::Train {
            config,
            data,
            out,
            seed,
            resume,
        } => {
            let mut cfg = match &config {
                Some(p) => RunConfig::parse(&read_text(p)?)?,
                None => RunConfig::default(),
            };
            if let Some(s) = data {
                cfg.data.source = s;
            }
            if let Some(s) = seed {
                cfg.model.seed = s;
                cfg.train.seed = s;
            }
            cfg.validate()?;
            let dataset = cfg.data.load()?;
            let exec = Execution::from_env()?;
            let mut trainer = if resume {
                let mut t = load_checkpoint(out.join(CHECKPOINT_FILE))?;
                if t.model.config() != &cfg.model {
                    return Err(Error::Config("checkpoint model config differs from --config".into()));
                }
                t.config.iters = cfg.train.iters;
                t
            } else {
                let metrics = out.join(METRICS_FILE);
                if metrics.exists() {
                    fs::remove_file(&metrics).map_err(|e| Error::Io {
                        path: metrics.display().to_string(),
                        source: e,
                    })?;
                }
                Trainer::new(FlowModel::build(cfg.model.clone())?, cfg.train.clone())?
            };
            write_file(out.join(CONFIG_ECHO), cfg.to_text().as_bytes())?;
            let mut write_samples = |t: &Trainer, dir: &Path| -> Result<()> {
                if !t.model.is_initialized() {
                    return Ok(());
                }
                let n = 16;
                let mut rng = ChaCha8Rng::seed_from_u64(t.config.seed);
                let cond = conditions(&t.model, Some(&dataset), n, t.config.seed)?;
                let x = t.model.sample(n, t.model.config().temperature, &mut rng, cond.as_ref())?;
                write_file(dir.join(format!("samples-{:06}.pgm", t.iter)), &grid(&x)?)
            };
            let rows = trainer.run_with(&dataset, exec, Some(&out), &mut write_samples)?;
            if let Some(last) = rows.last() {
                println!("iter {} nll {:.6} bits/dim {:.6}", last.iter, last.nll, last.bpd);
            }
            Ok(0)
        }
        Command::Sample {
            ckpt,
            n,
            temperature,
            out,
            seed,
            data,
        } => {
            let model = load_checkpoint(&ckpt)?.model;
            let dataset = data.map(|s| load_data(&s, &model)).transpose()?;
            let cond = conditions(&model, dataset.as_ref(), n, seed)?;
            let tau = temperature.unwrap_or(model.config().temperature);
            let x = model.sample(n, tau, &mut ChaCha8Rng::seed_from_u64(seed), cond.as_ref())?;
            write_file(&out, &grid(&x)?)?;
            Ok(0)
        }
        Command::Eval {
            ckpt,
            data,
            batch,
            seed,
            dequant,
        } => {
            if batch == 0 {
                return Err(Error::Config("--batch must be positive".into()));
            }
            let model = load_checkpoint(&ckpt)?.model;
            let dataset = load_data(&data, &model)?;
            let want = model.input_shape(1);
            if dataset.image_shape() != want {
                return Err(Error::Config(format!(
                    "dataset images are {} but the model expects {want}",
                    dataset.image_shape()
                )));
            }
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut total = 0.0;
            for start in (0..dataset.len()).step_by(batch) {
                let count = batch.min(dataset.len() - start);
                let levels = dataset.levels.batch_slice(start, count);
                let x = match dequant {
                    Dequant::Uniform => dequantize(&levels, &mut rng)?,
                    Dequant::None => levels.map(|k| k / 256.0),
                };
                let cond = if model.config().conditional {
                    Some(downscale_area(&x, 2)?)
                } else {
                    None
                };
                total += model.log_prob(&x, cond.as_ref())?.sum();
            }
            if dataset.is_empty() {
                return Err(Error::Format(format!("{data}: no images")));
            }
            let bpd = bits_per_dim(total / dataset.len() as f64, model.config().dims());
            println!("bits/dim = {bpd:.10}");
            Ok(0)
        }
        Command::Reconstruct { ckpt, data, out, n } => {
            let model = load_checkpoint(&ckpt)?.model;
            let dataset = load_data(&data, &model)?;
            let n = n.min(dataset.len());
            let idx: Vec<usize> = (0..n).collect();
            let x = dataset.batch(&idx, &mut ChaCha8Rng::seed_from_u64(0))?;
            let cond = if model.config().conditional {
                Some(downscale_area(&x, 2)?)
            } else {
                None
            };
            let (back, err) = model.reconstruct(&x, cond.as_ref())?;
            let pair = Tensor::concat_batch(&[x, back])?;
            // originals on the top rows, reconstructions below
            let cols = n.max(1);
            write_file(&out, &pgm_encode(&tile_grid(&pair, 2, cols)?)?)?;
            println!("max reconstruction error = {err:e}");
            Ok(0)
        }
        Command::Verify {
            suite,
            seed,
            report,
            roundtrip_seeds,
            jacobian_seeds,
            model_seeds,
        } => {
            let defaults = SuiteOptions::default();
            let opts = SuiteOptions {
                seed,
                roundtrip_seeds: roundtrip_seeds.unwrap_or(defaults.roundtrip_seeds),
                jacobian_seeds: jacobian_seeds.unwrap_or(defaults.jacobian_seeds),
                model_seeds: model_seeds.unwrap_or(defaults.model_seeds),
                exec: Execution::from_env()?,
                ..defaults
            };
            let reports = run_suite(&suite, &opts)?;
            if let Some(path) = &report {
                write_reports(&reports, path)?;
            }
            let failed: Vec<_> = reports.iter().filter(|r| !r.passed).collect();
            for r in &failed {
                println!(
                    "FAIL {} {} measured={:e} tolerance={:e} seed={} {}",
                    r.subject, r.check, r.measured, r.tolerance, r.seed, r.detail
                );
            }
            println!("{} of {} checks passed", reports.len() - failed.len(), reports.len());
            Ok(if failed.is_empty() { 0 } else { 3 })
        }
    }
}
