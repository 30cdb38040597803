use std::net::{IpAddr, SocketAddr};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use lcx::bundle;
use lcx::gradcam;
use lcx::imageio;
use lcx::latent;
use lcx::pipeline::{Pipeline, PipelineConfig, Stage};
use lcx::render;
use lcx::service::{self, GridMode, ServiceConfig};
use lcx::{LcxError, Result};

#[derive(Parser)]
#[command(name = "lcx", version, about = "Latent counterfactual explanations for image classifiers")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Pipeline config (JSON).
    #[arg(long)]
    config: PathBuf,
    /// Rerun stages even when up-to-date.
    #[arg(long)]
    force: bool,
    /// Override the config's global seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory; defaults to the config's `output_dir`, then `lcx-out`.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic dataset.
    Data(Common),
    /// Train the style generator.
    TrainGan(Common),
    /// Train the encoder against the generator.
    TrainEncoder(Common),
    /// Train the black-box classifier.
    TrainClassifier(Common),
    /// Fit the latent direction and assemble the bundle.
    FitDirection(Common),
    /// Explain one image with the bundle.
    Explain {
        #[command(flatten)]
        common: Common,
        /// Grayscale PNG at the bundle resolution.
        #[arg(long)]
        image: PathBuf,
        /// Comma-separated lambdas (must include 0).
        #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
        lambdas: Option<Vec<f64>>,
    },
    /// Evaluate the bundle and write strips, series and report.json.
    Report(Common),
    /// Run every stage in order.
    Run(Common),
    /// Serve the HTTP API over a bundle.
    Serve {
        #[arg(long)]
        bundle: PathBuf,
        #[arg(long, default_value_t = 8080)]
        port: u16,
        #[arg(long, default_value = "127.0.0.1")]
        host: IpAddr,
        #[arg(long, default_value_t = 64)]
        cache_mb: usize,
        /// `strict` requires 0 in every lambda list.
        #[arg(long, default_value = "strict", value_parser = parse_grid_mode)]
        grid_mode: GridMode,
        /// Number of test images offered by /images.
        #[arg(long, default_value_t = 200)]
        catalog_limit: usize,
    },
}

fn parse_grid_mode(s: &str) -> std::result::Result<GridMode, String> {
    match s {
        "strict" => Ok(GridMode::Strict),
        "free" => Ok(GridMode::Free),
        _ => Err(format!("expected `strict` or `free`, got `{s}`")),
    }
}

fn open_pipeline(c: &Common) -> Result<Pipeline> {
    let mut config = PipelineConfig::load(&c.config)?;
    if let Some(seed) = c.seed {
        config.seed = seed;
    }
    let out = c
        .out
        .clone()
        .or_else(|| config.output_dir.clone())
        .unwrap_or_else(|| PathBuf::from("lcx-out"));
    Pipeline::open(config, out)
}

fn stage(c: &Common, stage: Stage) -> Result<()> {
    let mut p = open_pipeline(c)?;
    p.run_stage(stage, c.force)?;
    Ok(())
}

fn explain(c: &Common, image: &Path, lambdas: Option<Vec<f64>>) -> Result<()> {
    let p = open_pipeline(c)?;
    if p.record(Stage::Direction).is_none() {
        return Err(LcxError::Dependency {
            stage: "explain".into(),
            missing: "direction".into(),
        });
    }
    let (bundle, digest) = bundle::load_bundle(&p.bundle_dir())?;
    let bytes = std::fs::read(image).map_err(|e| LcxError::Io {
        path: image.to_path_buf(),
        source: e,
    })?;
    let x = imageio::decode_gray_png(&bytes)?;
    let lambdas = lambdas.unwrap_or_else(|| p.config.report.lambdas.clone());
    let stem = image.file_stem().and_then(|s| s.to_str()).unwrap_or("input").to_string();
    let exp = bundle.explain(&x, &lambdas, &stem)?;
    let dir = p.out.join("explain").join(&stem);
    latent::export_series(&exp.series, Some(&exp.reconstruction), Some(&digest), &dir)?;
    let heatmap = gradcam::gradcam(&bundle.classifier, &bundle.classifier_spec, &x, &p.config.gradcam_layer())?;
    let overlay = gradcam::overlay_png(&x, &heatmap)?;
    std::fs::write(dir.join("gradcam.png"), overlay).map_err(|e| LcxError::Io {
        path: dir.join("gradcam.png"),
        source: e,
    })?;
    render::export_strip(&exp.series, Some(&heatmap), &dir.join("strip.png"))?;
    println!(
        "{}: psnr {:.2} dB, prediction drift {:.4}, wrote {}",
        stem,
        exp.reconstruction.psnr,
        exp.reconstruction.prediction_drift,
        dir.display()
    );
    Ok(())
}

fn serve(bundle: &Path, addr: SocketAddr, cache_mb: usize, grid_mode: GridMode, limit: usize) -> Result<()> {
    let config = ServiceConfig {
        cache_bytes: cache_mb << 20,
        grid_mode,
        ..ServiceConfig::default()
    };
    let state = service::load_state(bundle, config, limit)?;
    let rt = tokio::runtime::Runtime::new().map_err(|e| LcxError::Io {
        path: PathBuf::from("<runtime>"),
        source: e,
    })?;
    rt.block_on(service::serve(state, addr)).map_err(|e| LcxError::Io {
        path: PathBuf::from(addr.to_string()),
        source: e,
    })
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Data(c) => stage(&c, Stage::Data),
        Command::TrainGan(c) => stage(&c, Stage::Gan),
        Command::TrainEncoder(c) => stage(&c, Stage::Encoder),
        Command::TrainClassifier(c) => stage(&c, Stage::Classifier),
        Command::FitDirection(c) => stage(&c, Stage::Direction),
        Command::Report(c) => stage(&c, Stage::Report),
        Command::Run(c) => open_pipeline(&c)?.run_all(c.force).map(|_| ()),
        Command::Explain { common, image, lambdas } => explain(&common, &image, lambdas),
        Command::Serve {
            bundle,
            port,
            host,
            cache_mb,
            grid_mode,
            catalog_limit,
        } => serve(&bundle, SocketAddr::new(host, port), cache_mb, grid_mode, catalog_limit),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            if let LcxError::TrainingFailure {
                last_checkpoint: Some(p),
                ..
            } = &e
            {
                eprintln!("last checkpoint: {}", p.display());
            }
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
