use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use ghnerf_cli::commands::{self, parse_mode, parse_split, RenderArgs, RenderCameras, TrainOverrides};
use ghnerf_cli::scene::CameraSpec;
use ghnerf_cli::service::{self, ServiceConfig};
use ghnerf_cli::Scene;
use ghnerf_core::model::HumanSource;
use ghnerf_core::trainer::EvalOptions;

#[derive(Parser)]
#[command(name = "ghnerf", version, about = "Generalizable human radiance fields with joint heatmaps")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render the synthetic multi-view dataset.
    GenerateData {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model; writes checkpoint, metrics log and summary to --out.
    Train(TrainArgs),
    /// Score a checkpoint on a dataset split and print a JSON report.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long, default_value = "held-out-cameras")]
        split: String,
        /// "guided" or "uniform:<n>".
        #[arg(long, default_value = "guided")]
        sampling: String,
        #[arg(long, default_value_t = 3)]
        source_views: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Render images, overlays and keypoints for one camera or an orbit.
    Render {
        #[command(flatten)]
        scene: SceneArgs,
        #[arg(long, default_value_t = 0)]
        subject: usize,
        #[arg(long, default_value_t = 0)]
        frame: usize,
        /// Dataset camera index.
        #[arg(long, conflicts_with_all = ["orbit", "position"])]
        camera: Option<usize>,
        /// Number of cameras on a ring around the scene.
        #[arg(long, conflicts_with = "position")]
        orbit: Option<usize>,
        #[arg(long, num_args = 3, requires = "look_at")]
        position: Option<Vec<f64>>,
        #[arg(long, num_args = 3)]
        look_at: Option<Vec<f64>>,
        #[arg(long, num_args = 3, default_values_t = [0.0, 1.0, 0.0])]
        up: Vec<f64>,
        #[arg(long, default_value_t = 40.0)]
        fov: f64,
        #[arg(long, default_value_t = 64)]
        width: u32,
        #[arg(long, default_value_t = 64)]
        height: u32,
        #[arg(long)]
        out: PathBuf,
    },
    /// Serve /meta, /render and /healthz over HTTP.
    Serve {
        #[command(flatten)]
        scene: SceneArgs,
        #[arg(long, default_value = "127.0.0.1:8080")]
        bind: String,
        /// Allowed CORS origin; any origin when omitted.
        #[arg(long)]
        cors_origin: Option<String>,
        #[arg(long, default_value_t = 2)]
        workers: usize,
    },
}

#[derive(Args)]
struct SceneArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long, default_value = "guided")]
    sampling: String,
    #[arg(long, default_value_t = 3)]
    source_views: usize,
    #[arg(long, default_value_t = 128 * 128)]
    max_pixels: u64,
}

impl SceneArgs {
    fn load(&self) -> anyhow::Result<Scene> {
        let mut scene = Scene::load(&self.checkpoint, &self.dataset)?;
        scene.mode = parse_mode(&self.sampling)?;
        scene.source_views = self.source_views;
        scene.max_pixels = self.max_pixels;
        Ok(scene)
    }
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    dataset: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    steps: Option<u64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    rays: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    lr_halving_period: Option<u64>,
    #[arg(long)]
    source_views: Option<usize>,
    #[arg(long)]
    lambda_p: Option<f64>,
    #[arg(long)]
    lambda_h: Option<f64>,
    #[arg(long)]
    lambda_c: Option<f64>,
    #[arg(long)]
    coord_loss: Option<bool>,
    #[arg(long)]
    perceptual_loss: Option<bool>,
    #[arg(long)]
    dense_feature_mode: Option<bool>,
    /// encoder, tied, external or none.
    #[arg(long)]
    human: Option<String>,
    #[arg(long)]
    condition_image: Option<bool>,
}

impl TrainArgs {
    fn overrides(&self) -> anyhow::Result<TrainOverrides> {
        let human = match self.human.as_deref() {
            None => None,
            Some(s) => Some(serde_json::from_value::<HumanSource>(serde_json::Value::String(s.into()))
                .map_err(|_| anyhow::anyhow!("--human must be encoder, tied, external or none, got {s:?}"))?),
        };
        Ok(TrainOverrides {
            dataset: self.dataset.clone(),
            steps: self.steps,
            seed: self.seed,
            rays: self.rays,
            lr: self.lr,
            lr_halving_period: self.lr_halving_period,
            source_views: self.source_views,
            lambda_p: self.lambda_p,
            lambda_h: self.lambda_h,
            lambda_c: self.lambda_c,
            coord_loss: self.coord_loss,
            perceptual_loss: self.perceptual_loss,
            dense_feature_mode: self.dense_feature_mode,
            human,
            condition_image: self.condition_image,
        })
    }
}

fn vec3(v: &[f64]) -> [f64; 3] {
    [v[0], v[1], v[2]]
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::GenerateData { config, seed, out } => {
            commands::generate_data(config.as_deref(), seed, &out)?;
        }
        Command::Train(args) => {
            let summary = commands::train(args.config.as_deref(), &args.overrides()?, &args.out)?;
            println!("{}", serde_json::to_string_pretty(&summary)?);
        }
        Command::Eval {
            checkpoint,
            dataset,
            split,
            sampling,
            source_views,
            out,
        } => {
            let opts = EvalOptions {
                split: parse_split(&split)?,
                mode: parse_mode(&sampling)?,
                source_views,
                ..EvalOptions::default()
            };
            let report = commands::eval(&checkpoint, &dataset, &opts, out.as_deref())?;
            println!("{}", serde_json::to_string_pretty(&report)?);
        }
        Command::Render {
            scene,
            subject,
            frame,
            camera,
            orbit,
            position,
            look_at,
            up,
            fov,
            width,
            height,
            out,
        } => {
            let scene = scene.load()?;
            let cameras = match (camera, orbit, position) {
                (Some(c), _, _) => RenderCameras::Dataset(c),
                (_, Some(n), _) => RenderCameras::Orbit(n),
                (_, _, Some(p)) => RenderCameras::Spec(CameraSpec::LookAt {
                    position: vec3(&p),
                    look_at: vec3(look_at.as_deref().expect("clap requires --look-at")),
                    up: vec3(&up),
                    fov_deg: fov,
                }),
                _ => RenderCameras::Dataset(0),
            };
            let args = RenderArgs {
                cameras,
                width,
                height,
                subject,
                frame,
                fov_deg: fov,
            };
            for stem in commands::render(&scene, &args, &out)? {
                println!("{}", out.join(stem).display());
            }
        }
        Command::Serve {
            scene,
            bind,
            cors_origin,
            workers,
        } => {
            let scene = scene.load()?;
            let config = ServiceConfig { cors_origin, workers };
            tokio::runtime::Runtime::new()?.block_on(service::serve(scene, &bind, &config))?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
