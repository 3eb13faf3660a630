use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use lucas_core::harness::drive::{drive, zero_shot};
use lucas_core::harness::eval::evaluate;
use lucas_core::harness::serve::Server;
use lucas_core::harness::session::to_rgb8;
use lucas_core::harness::{dehair_step, train, HarnessError, LucasConfig, Model, RenderMode, TrainingData};
use lucas_core::synth::write_dataset;

#[derive(Parser)]
#[command(name = "lucas", version, about = "Layered face and hair avatars on synthetic captures")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// TOML config; the built-in toy setup when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the seed of the command's config table.
    #[arg(long)]
    seed: Option<u64>,
}

impl Common {
    fn load(&self) -> Result<LucasConfig, HarnessError> {
        match &self.config {
            Some(p) => LucasConfig::load(p),
            None => Ok(LucasConfig::toy()),
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic multi-view dataset.
    SynthData {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: PathBuf,
    },
    /// Fit the bald head model and write dehaired neutral geometry.
    Dehair {
        #[command(flatten)]
        common: Common,
        /// Dataset directory; dehaired geometry is written into it.
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        k: Option<usize>,
        #[arg(long)]
        lambda_lap: Option<f64>,
    },
    /// Train a model and write a checkpoint directory.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score a checkpoint on the held-out views.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "mesh")]
        mode: String,
        /// Identities to score (names or indices); the training set by default.
        #[arg(long, value_delimiter = ',')]
        identities: Vec<String>,
    },
    /// Drive a target identity with a source performance.
    Drive {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        source: String,
        #[arg(long)]
        target: String,
        #[arg(long, default_value = "mesh")]
        mode: String,
        #[arg(long, value_delimiter = ',', default_value = "0")]
        cameras: Vec<usize>,
        /// Writes one PPM image per frame and camera here.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Also score against the target's ground truth under the source drivers.
        #[arg(long)]
        score: bool,
    },
    /// Serve live driving sessions over WebSocket.
    Serve {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        port: Option<u16>,
        #[arg(long)]
        host: Option<String>,
    },
}

fn parse_mode(s: &str) -> Result<RenderMode, HarnessError> {
    match s {
        "mesh" => Ok(RenderMode::Mesh),
        "gaussian" => Ok(RenderMode::Gaussian),
        _ => Err(HarnessError::Config(format!("mode must be mesh or gaussian, got {s:?}"))),
    }
}

fn write_ppm(path: &Path, rgb: &lucas_core::tensor::Tensor) -> Result<(), HarnessError> {
    let s = rgb.shape();
    let mut bytes = format!("P6\n{} {}\n255\n", s[2], s[1]).into_bytes();
    bytes.extend(to_rgb8(rgb));
    std::fs::write(path, bytes).map_err(|e| HarnessError::Io {
        path: path.display().to_string(),
        source: e,
    })
}

fn run(cli: Cli) -> Result<(), HarnessError> {
    match cli.command {
        Command::SynthData { common, out } => {
            let mut cfg = common.load()?.synth;
            if let Some(s) = common.seed {
                cfg.seed = s;
            }
            let summary = write_dataset(&out, &cfg)?;
            println!(
                "wrote {} identities, {} frames, {} views to {}",
                summary.identities.len(),
                summary.frames,
                summary.views,
                out.display()
            );
        }
        Command::Dehair { common, data, k, lambda_lap } => {
            let mut settings = common.load()?.dehair;
            settings.k = k.unwrap_or(settings.k);
            settings.lambda_lap = lambda_lap.unwrap_or(settings.lambda_lap);
            let summary = dehair_step::run_dehair(&data, &settings)?;
            for r in &summary.records {
                println!(
                    "{} coverage={:.3} rmse={:.4} hidden_rmse={:.4}{}",
                    r.name,
                    r.coverage,
                    r.rmse,
                    r.hidden_rmse,
                    if r.stitch_warning { " stitch_warning" } else { "" }
                );
            }
            println!("k_used={} rmse={:.4}", summary.k_used, summary.rmse);
        }
        Command::Train { common, data, out } => {
            let mut cfg = common.load()?.train;
            if let Some(s) = common.seed {
                cfg.seed = s;
            }
            let td = TrainingData::open(&data)?;
            let (_, report) = train(&cfg, &td, Some(&out))?;
            println!(
                "trained {} steps in {:.1}s, {} parameters, probe L1 {:.5} -> {:.5}",
                report.steps_run,
                report.seconds,
                report.param_count,
                report.first_probe().unwrap_or(f64::NAN),
                report.last_probe().unwrap_or(f64::NAN)
            );
        }
        Command::Eval { checkpoint, data, mode, identities, .. } => {
            let (model, _) = Model::load(&checkpoint)?;
            let td = TrainingData::open(&data)?;
            let ids: Vec<usize> = identities.iter().map(|k| td.resolve(k)).collect::<Result<_, _>>()?;
            let summary = evaluate(&model, &td, (!ids.is_empty()).then_some(ids.as_slice()), parse_mode(&mode)?)?;
            for r in &summary.records {
                println!("{}", r.to_line(&td.identities[r.view.identity].name));
            }
            println!(
                "mean psnr={:.4} ssim={:.4} hair_l1={:.5} views={}",
                summary.mean_psnr,
                summary.mean_ssim,
                summary.hair_l1,
                summary.records.len()
            );
        }
        Command::Drive { checkpoint, data, source, target, mode, cameras, out, score, .. } => {
            let (model, _) = Model::load(&checkpoint)?;
            let td = TrainingData::open(&data)?;
            let (s, t) = (td.resolve(&source)?, td.resolve(&target)?);
            let frames: Vec<usize> = (0..td.dataset.frames).collect();
            let driven = drive(&model, &td, s, t, &frames, &cameras, parse_mode(&mode)?)?;
            if let Some(dir) = &out {
                std::fs::create_dir_all(dir).map_err(|e| HarnessError::Io {
                    path: dir.display().to_string(),
                    source: e,
                })?;
                for d in &driven {
                    write_ppm(&dir.join(format!("f{:04}_c{}.ppm", d.frame, d.camera)), &d.render.rgb)?;
                }
            }
            println!("rendered {} frames", driven.len());
            if score {
                let r = zero_shot(&model, &td, s, t, &frames, &cameras)?;
                println!(
                    "driven psnr={:.3} neutral baseline psnr={:.3} margin={:.3} views={}",
                    r.driven_psnr,
                    r.baseline_psnr,
                    r.margin(),
                    r.views
                );
            }
        }
        Command::Serve { common, checkpoint, data, port, host } => {
            let cfg = common.load()?.serve;
            let (model, _) = Model::load(&checkpoint)?;
            let td = TrainingData::open(&data)?;
            let host = host.unwrap_or(cfg.host);
            let server = Server::bind(model, td, &host, port.unwrap_or(cfg.port), cfg.fov)?;
            println!("listening on ws://{}", server.local_addr());
            server.run()?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
