use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, Context};
use ghnerf_core::ghtf;
use ghnerf_core::model::{HumanSource, SamplingMode};
use ghnerf_core::synthdata::{generate_dataset, save_heatmaps, Dataset, DatasetConfig, DatasetManifest};
use ghnerf_core::trainer::{evaluate, load_checkpoint, train_on, EvalOptions, EvalReport, Split, StepLog, TrainConfig};
use serde::Serialize;

use crate::scene::{heatmap_overlay, keypoint_image, orbit_cameras, depth_image, CameraSpec, RenderRequest, Scene};

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> anyhow::Result<T> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

fn write_json(path: &Path, value: &impl Serialize) -> anyhow::Result<()> {
    let text = serde_json::to_vec_pretty(value)?;
    ghtf::write_atomic(path, &text).with_context(|| format!("writing {}", path.display()))
}

pub fn generate_data(config: Option<&Path>, seed: Option<u64>, out: &Path) -> anyhow::Result<DatasetManifest> {
    let mut cfg: DatasetConfig = match config {
        Some(p) => read_json(p)?,
        None => DatasetConfig::default(),
    };
    if let Some(s) = seed {
        cfg.seed = s;
    }
    let manifest = generate_dataset(&cfg, out).with_context(|| format!("generating dataset in {}", out.display()))?;
    log::info!(
        "wrote {} subjects x {} frames x {} cameras to {}",
        manifest.subjects.len(),
        cfg.frames,
        manifest.cameras.len(),
        out.display()
    );
    Ok(manifest)
}

/// Per-field overrides applied on top of a JSON training config.
#[derive(Debug, Clone, Default)]
pub struct TrainOverrides {
    pub dataset: Option<PathBuf>,
    pub steps: Option<u64>,
    pub seed: Option<u64>,
    pub rays: Option<usize>,
    pub lr: Option<f64>,
    pub lr_halving_period: Option<u64>,
    pub source_views: Option<usize>,
    pub lambda_p: Option<f64>,
    pub lambda_h: Option<f64>,
    pub lambda_c: Option<f64>,
    pub coord_loss: Option<bool>,
    pub perceptual_loss: Option<bool>,
    pub dense_feature_mode: Option<bool>,
    pub human: Option<HumanSource>,
    pub condition_image: Option<bool>,
}

impl TrainOverrides {
    pub fn apply(&self, cfg: &mut TrainConfig) {
        macro_rules! set {
            ($($field:ident => $($target:ident).+),* $(,)?) => {
                $(if let Some(v) = self.$field.clone() { cfg.$($target).+ = v; })*
            };
        }
        set!(
            dataset => dataset,
            steps => steps,
            seed => seed,
            rays => rays,
            lr => lr,
            lr_halving_period => lr_halving_period,
            source_views => source_views,
            lambda_p => loss.lambda_p,
            lambda_h => loss.lambda_h,
            lambda_c => loss.lambda_c,
            coord_loss => coord_loss,
            perceptual_loss => perceptual_loss,
            dense_feature_mode => dense_feature_mode,
            human => model.human,
            condition_image => model.condition_image,
        );
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct TrainSummary {
    pub steps: u64,
    pub seconds: f64,
    pub final_step: Option<StepLog>,
    pub checkpoint: PathBuf,
}

pub fn train(config: Option<&Path>, overrides: &TrainOverrides, out: &Path) -> anyhow::Result<TrainSummary> {
    let mut cfg: TrainConfig = match config {
        Some(p) => read_json(p)?,
        None => TrainConfig::default(),
    };
    overrides.apply(&mut cfg);
    if !cfg.dataset.join("manifest.json").is_file() {
        bail!("dataset not found: {} has no manifest.json", cfg.dataset.display());
    }
    let dataset = Dataset::open(&cfg.dataset).with_context(|| format!("opening dataset {}", cfg.dataset.display()))?;
    std::fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    write_json(&out.join("train_config.json"), &cfg)?;
    log::info!("training with {}", serde_json::to_string(&cfg)?);
    let start = Instant::now();
    let total = cfg.steps;
    let run = train_on(&cfg, &dataset, Some(out), |s| {
        if (s.step + 1) % 100 == 0 || s.step + 1 == total {
            log::info!("step {}/{total} total {:.5} l_col {:.5} l_heat {:.5} lr {:.2e}", s.step + 1, s.total, s.l_col, s.l_heat, s.lr);
        }
    })?;
    let summary = TrainSummary {
        steps: run.checkpoint.step,
        seconds: start.elapsed().as_secs_f64(),
        final_step: run.log.last().copied(),
        checkpoint: out.join(ghnerf_core::trainer::CHECKPOINT_FILE),
    };
    write_json(&out.join("summary.json"), &summary)?;
    Ok(summary)
}

pub fn parse_mode(text: &str) -> anyhow::Result<SamplingMode> {
    match text {
        "guided" => Ok(SamplingMode::Guided),
        _ => match text.strip_prefix("uniform:").and_then(|n| n.parse::<usize>().ok()) {
            Some(n) if n > 0 => Ok(SamplingMode::Uniform(n)),
            _ => bail!("sampling mode must be \"guided\" or \"uniform:<n>\", got {text:?}"),
        },
    }
}

pub fn eval(checkpoint: &Path, dataset: &Path, opts: &EvalOptions, out: Option<&Path>) -> anyhow::Result<EvalReport> {
    let ckpt = load_checkpoint(checkpoint).with_context(|| format!("loading checkpoint {}", checkpoint.display()))?;
    let ds = Dataset::open(dataset).with_context(|| format!("opening dataset {}", dataset.display()))?;
    let model = ckpt.model()?;
    let report = evaluate(&model, &ds, opts)?;
    if let Some(p) = out {
        write_json(p, &report)?;
    }
    Ok(report)
}

pub fn parse_split(text: &str) -> anyhow::Result<Split> {
    Ok(match text {
        "held-out-cameras" => Split::HeldOutCameras,
        "held-out-subjects" => Split::HeldOutSubjects,
        "train" => Split::Train,
        _ => bail!("split must be held-out-cameras, held-out-subjects or train, got {text:?}"),
    })
}

/// Where `render` places its camera(s).
#[derive(Debug, Clone)]
pub enum RenderCameras {
    /// One dataset camera by index.
    Dataset(usize),
    Spec(CameraSpec),
    /// A ring of this many cameras around the scene.
    Orbit(usize),
}

#[derive(Debug, Clone)]
pub struct RenderArgs {
    pub cameras: RenderCameras,
    pub width: u32,
    pub height: u32,
    pub subject: usize,
    pub frame: usize,
    pub fov_deg: f64,
}

/// Render and write `rgb`, `depth`, `heatmaps` overlay, `keypoints`
/// annotation, keypoint JSON and the raw heatmap tensor per camera.
/// Returns the written image stems.
pub fn render(scene: &Scene, args: &RenderArgs, out: &Path) -> anyhow::Result<Vec<String>> {
    std::fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let specs: Vec<(String, CameraSpec)> = match &args.cameras {
        RenderCameras::Dataset(i) => {
            let cam = scene
                .dataset
                .cameras
                .get(*i)
                .with_context(|| format!("dataset has no camera {i}"))?;
            vec![("view".into(), CameraSpec::Record(cam.to_record()))]
        }
        RenderCameras::Spec(s) => vec![("view".into(), s.clone())],
        RenderCameras::Orbit(n) => orbit_cameras(&scene.dataset, *n, args.width, args.height, args.fov_deg)?
            .into_iter()
            .enumerate()
            .map(|(i, c)| (format!("orbit_{i:03}"), CameraSpec::Record(c.to_record())))
            .collect(),
    };
    let mut stems = Vec::new();
    for (stem, camera) in specs {
        let req = RenderRequest {
            camera,
            width: args.width,
            height: args.height,
            layers: vec!["rgb".into()],
            subject: args.subject,
            frame: args.frame,
            source_views: None,
        };
        let view = scene.render(&req)?;
        let o = &view.output;
        let path = |suffix: &str| out.join(format!("{stem}{suffix}"));
        o.rgb.save_png(&path(".rgb.png"))?;
        depth_image(o).save_png(&path(".depth.png"))?;
        heatmap_overlay(o).save_png(&path(".heatmaps.png"))?;
        keypoint_image(o, &view.keypoints).save_png(&path(".keypoints.png"))?;
        save_heatmaps(&path(".heat.ghtf"), &o.heatmaps)?;
        write_json(&path(".keypoints.json"), &scene.keypoint_list(&view.keypoints))?;
        stems.push(stem);
    }
    Ok(stems)
}
