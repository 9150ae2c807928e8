use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde_json::json;

use eigencam::cam::{eigen_cam, overlay, ActivationMap, CamConfig, CamError};
use eigencam::harness::{self, localize_feature_map, ActivationSource, EvalConfig, HarnessError, PipelineError};
use eigencam::io::{self, FormatError};
use eigencam::linalg::MAX_COMPONENT;
use eigencam::localize::{self, cam_similarity, BoundingBox, LocalizeError};
use eigencam::refnet::{forward_to_tap, ModelError, ModelGraph};
use eigencam::tensor::{FeatureMap, RasterImage, Tensor};

#[derive(Parser)]
#[command(name = "eigencam", version, about = "Principal-component class activation maps and box localization")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render the CAM over an image and save the raw map next to it.
    Explain {
        image: PathBuf,
        #[command(flatten)]
        source: SourceArgs,
        #[command(flatten)]
        cam: CamArgs,
        /// Overlay opacity in [0, 1].
        #[arg(long, default_value_t = 0.5)]
        alpha: f64,
        /// Overlay image path; the raw map goes to `<out>.cam.fmap`.
        #[arg(long)]
        out: PathBuf,
    },
    /// Box the largest CAM segment. Prints JSON; `--out` also writes an annotated image.
    Localize {
        image: PathBuf,
        #[command(flatten)]
        source: SourceArgs,
        #[command(flatten)]
        cam: CamArgs,
        #[arg(long, default_value_t = localize::DEFAULT_THRESHOLD)]
        threshold: f64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Score every record of a JSON Lines manifest.
    Evaluate {
        manifest: PathBuf,
        #[command(flatten)]
        source: SourceArgs,
        #[command(flatten)]
        cam: CamArgs,
        #[arg(long, default_value_t = localize::DEFAULT_THRESHOLD)]
        threshold: f64,
        #[arg(long, default_value_t = localize::DEFAULT_IOU_THRESHOLD)]
        iou_threshold: f64,
        /// Count misclassified records as misses.
        #[arg(long)]
        gate_on_classification: bool,
        #[arg(long, default_value_t = 1)]
        jobs: usize,
        /// Write the report here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Correlate the CAMs of two images (e.g. clean and perturbed).
    Compare {
        image_a: PathBuf,
        image_b: PathBuf,
        #[command(flatten)]
        source: SourceArgs,
        #[command(flatten)]
        cam: CamArgs,
        #[arg(long, default_value_t = localize::DEFAULT_THRESHOLD)]
        threshold: f64,
    },
    /// Run the reference network to a layer and save its output as FMAP.
    DumpActivations {
        image: PathBuf,
        #[command(flatten)]
        source: SourceArgs,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Args)]
struct SourceArgs {
    /// Model directory (model.json plus weight files).
    #[arg(long, conflicts_with = "fmap")]
    model: Option<PathBuf>,
    /// Layer whose output feeds the CAM; defaults to the last spatial layer.
    #[arg(long, requires = "model", conflicts_with = "fmap")]
    tap: Option<usize>,
    /// Precomputed activations. `compare` takes two.
    #[arg(long)]
    fmap: Vec<PathBuf>,
}

#[derive(Args)]
struct CamArgs {
    /// Which singular vector to project on (1 = dominant).
    #[arg(long, default_value_t = 1)]
    component: usize,
    /// Subtract per-channel means first.
    #[arg(long)]
    center: bool,
}

impl CamArgs {
    fn config(&self) -> Result<CamConfig, Failure> {
        if self.component == 0 || self.component > MAX_COMPONENT {
            return Err(Failure::Usage(format!("--component must be in 1..={MAX_COMPONENT}")));
        }
        Ok(CamConfig::default().with_component(self.component).centered(self.center))
    }
}

enum Failure {
    Usage(String),
    Io(String),
    Numeric(String),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Usage(_) => 2,
            Failure::Io(_) => 3,
            Failure::Numeric(_) => 4,
        }
    }

    fn message(&self) -> &str {
        match self {
            Failure::Usage(m) | Failure::Io(m) | Failure::Numeric(m) => m,
        }
    }
}

impl From<FormatError> for Failure {
    fn from(e: FormatError) -> Self {
        Failure::Io(format!("io-formats: {e}"))
    }
}

impl From<CamError> for Failure {
    fn from(e: CamError) -> Self {
        let msg = format!("cam-engine: {e}");
        match e {
            CamError::DegenerateActivations | CamError::NoConvergence { .. } => Failure::Numeric(msg),
            _ => Failure::Usage(msg),
        }
    }
}

impl From<LocalizeError> for Failure {
    fn from(e: LocalizeError) -> Self {
        Failure::Usage(format!("localizer: {e}"))
    }
}

impl From<ModelError> for Failure {
    fn from(e: ModelError) -> Self {
        let msg = format!("refnet: {e}");
        match e {
            ModelError::TapNotFeatureMap { .. } | ModelError::TapOutOfRange { .. } | ModelError::NoClassifierHead => {
                Failure::Usage(msg)
            }
            _ => Failure::Io(msg),
        }
    }
}

impl From<PipelineError> for Failure {
    fn from(e: PipelineError) -> Self {
        match e {
            PipelineError::Cam(e) => e.into(),
            PipelineError::Localize(e) => e.into(),
        }
    }
}

impl From<HarnessError> for Failure {
    fn from(e: HarnessError) -> Self {
        let msg = format!("evaluate: {e}");
        match e {
            HarnessError::Cam { source, .. } => match source {
                CamError::DegenerateActivations | CamError::NoConvergence { .. } => Failure::Numeric(msg),
                _ => Failure::Usage(msg),
            },
            HarnessError::Model { source, .. } => match Failure::from(source) {
                Failure::Usage(_) => Failure::Usage(msg),
                _ => Failure::Io(msg),
            },
            HarnessError::MissingClassificationFlag { .. } | HarnessError::Jobs(_) => Failure::Usage(msg),
            HarnessError::Localize(e) => e.into(),
            HarnessError::Format { .. } | HarnessError::NotFeatureMap { .. } | HarnessError::MissingActivationSource { .. } => {
                Failure::Io(msg)
            }
        }
    }
}

fn check_fraction(name: &str, v: f64, lo: f64, hi: f64) -> Result<(), Failure> {
    if (lo..=hi).contains(&v) {
        Ok(())
    } else {
        Err(Failure::Usage(format!("--{name} {v} not in [{lo}, {hi}]")))
    }
}

fn check_threshold(t: f64) -> Result<(), Failure> {
    check_fraction("threshold", t, localize::MIN_THRESHOLD, localize::MAX_THRESHOLD)
}

/// Activation source after flag validation, before any file is touched.
enum Source {
    Model { dir: PathBuf, tap: Option<usize> },
    Fmaps(Vec<PathBuf>),
    None,
}

impl SourceArgs {
    fn resolve(&self, fmaps_allowed: usize, required: bool) -> Result<Source, Failure> {
        if self.tap.is_some() && self.model.is_none() {
            return Err(Failure::Usage("--tap needs --model".into()));
        }
        if let Some(dir) = &self.model {
            return Ok(Source::Model {
                dir: dir.clone(),
                tap: self.tap,
            });
        }
        if self.fmap.is_empty() {
            return if required {
                Err(Failure::Usage("an activation source is required: --model DIR or --fmap FILE".into()))
            } else {
                Ok(Source::None)
            };
        }
        if self.fmap.len() != fmaps_allowed {
            return Err(Failure::Usage(format!(
                "expected {fmaps_allowed} --fmap argument(s), got {}",
                self.fmap.len()
            )));
        }
        Ok(Source::Fmaps(self.fmap.clone()))
    }
}

struct LoadedModel {
    graph: ModelGraph,
    tap: usize,
}

fn load_model(dir: &Path, tap: Option<usize>) -> Result<LoadedModel, Failure> {
    let graph = io::read_model(dir)?;
    let tap = match tap {
        Some(t) => t,
        None => graph
            .last_feature_layer()
            .ok_or_else(|| Failure::Usage("refnet: model has no spatial layer to tap".into()))?,
    };
    if tap >= graph.layers().len() {
        return Err(ModelError::TapOutOfRange {
            tap,
            layers: graph.layers().len(),
        }
        .into());
    }
    let shapes = graph.infer_shapes(None)?;
    if !shapes[tap].is_spatial() {
        return Err(ModelError::TapNotFeatureMap { tap }.into());
    }
    Ok(LoadedModel { graph, tap })
}

fn read_feature_map(path: &Path) -> Result<FeatureMap, Failure> {
    let t = io::read_fmap(path)?;
    FeatureMap::from_tensor(t).map_err(|e| Failure::Io(format!("io-formats: {}: {e}", path.display())))
}

fn activations(model: &LoadedModel, image: &RasterImage) -> Result<FeatureMap, Failure> {
    let input = image.to_tensor_with_channels(model.graph.input_channels());
    Ok(forward_to_tap(&model.graph, &input, model.tap)?)
}

fn feature_maps(source: &Source, images: &[&RasterImage]) -> Result<Vec<FeatureMap>, Failure> {
    match source {
        Source::Model { dir, tap } => {
            let model = load_model(dir, *tap)?;
            images.iter().map(|img| activations(&model, img)).collect()
        }
        Source::Fmaps(paths) => paths.iter().map(|p| read_feature_map(p)).collect(),
        Source::None => unreachable!("source is required here"),
    }
}

fn cam_at(fm: &FeatureMap, cfg: &CamConfig, image: &RasterImage) -> Result<ActivationMap, Failure> {
    Ok(eigen_cam(fm, cfg)?.quantize(image.height(), image.width()))
}

fn draw_box(image: &RasterImage, b: &BoundingBox) -> RasterImage {
    let (h, w) = (image.height(), image.width());
    let mut pixels = Vec::with_capacity(h * w * 3);
    for y in 0..h {
        for x in 0..w {
            let inside = (b.xmin..=b.xmax).contains(&x) && (b.ymin..=b.ymax).contains(&y);
            let edge = x < b.xmin + 2 || x + 2 > b.xmax || y < b.ymin + 2 || y + 2 > b.ymax;
            if inside && edge {
                pixels.extend_from_slice(&[0, 255, 0]);
            } else {
                pixels.extend_from_slice(&image.rgb(y, x));
            }
        }
    }
    RasterImage::new(h, w, 3, pixels).expect("rgb buffer")
}

fn print_json(value: &serde_json::Value) {
    println!("{}", serde_json::to_string_pretty(value).expect("json value"));
}

fn sidecar_path(out: &Path) -> PathBuf {
    let mut s = out.as_os_str().to_owned();
    s.push(".cam.fmap");
    PathBuf::from(s)
}

fn run(cli: Cli) -> Result<(), Failure> {
    match cli.command {
        Command::Explain {
            image,
            source,
            cam,
            alpha,
            out,
        } => {
            let cfg = cam.config()?;
            check_fraction("alpha", alpha, 0.0, 1.0)?;
            let source = source.resolve(1, true)?;
            let img = io::read_image(&image)?;
            let fm = feature_maps(&source, &[&img])?.remove(0);
            let map = cam_at(&fm, &cfg, &img)?;
            let rendered = overlay(&img, map.quantized.as_ref().expect("quantized"), alpha)?;
            io::write_image(&out, &rendered)?;
            let raw = Tensor::new(vec![map.raw.height(), map.raw.width()], map.raw.data().to_vec())
                .map_err(|e| Failure::Numeric(format!("cam-engine: {e}")))?;
            let sidecar = sidecar_path(&out);
            io::write_fmap(&sidecar, &raw)?;
            print_json(&json!({
                "overlay": out,
                "cam": sidecar,
                "component": map.component,
                "sigma": map.sigma,
            }));
        }
        Command::Localize {
            image,
            source,
            cam,
            threshold,
            out,
        } => {
            let cfg = cam.config()?;
            check_threshold(threshold)?;
            let source = source.resolve(1, true)?;
            let img = io::read_image(&image)?;
            let fm = feature_maps(&source, &[&img])?.remove(0);
            let loc = localize_feature_map(&fm, img.height(), img.width(), &cfg, threshold)?;
            if let Some(out) = &out {
                io::write_image(out, &draw_box(&img, &loc.bbox))?;
            }
            print_json(&json!({
                "box": loc.bbox,
                "threshold": threshold,
                "fallback": loc.fallback,
            }));
        }
        Command::Evaluate {
            manifest,
            source,
            cam,
            threshold,
            iou_threshold,
            gate_on_classification,
            jobs,
            out,
        } => {
            let cfg = EvalConfig {
                cam: cam.config()?,
                threshold_fraction: threshold,
                iou_threshold,
                gate_on_classification,
                jobs,
            };
            check_threshold(threshold)?;
            check_fraction("iou-threshold", iou_threshold, 0.0, 1.0)?;
            if jobs == 0 {
                return Err(Failure::Usage("--jobs must be at least 1".into()));
            }
            let source = match source.resolve(0, false) {
                Err(_) => return Err(Failure::Usage("evaluate reads activations from --model or from each record's \"fmap\"".into())),
                Ok(s) => s,
            };
            let report = match source {
                Source::Model { dir, tap } => {
                    let model = load_model(&dir, tap)?;
                    let src = ActivationSource::Model {
                        model: &model.graph,
                        tap: model.tap,
                    };
                    harness::evaluate_manifest(&manifest, src, &cfg)?
                }
                _ => harness::evaluate_manifest(&manifest, ActivationSource::RecordFmap, &cfg)?,
            };
            let text = report.to_json();
            match out {
                Some(path) => {
                    std::fs::write(&path, &text).map_err(|source| FormatError::Io {
                        path: path.clone(),
                        source,
                    })?;
                    eprintln!(
                        "{} records, error rate {:.4}, report written to {}",
                        report.aggregate.count,
                        report.aggregate.error_rate,
                        path.display()
                    );
                }
                None => print!("{text}"),
            }
        }
        Command::Compare {
            image_a,
            image_b,
            source,
            cam,
            threshold,
        } => {
            let cfg = cam.config()?;
            check_threshold(threshold)?;
            let source = source.resolve(2, true)?;
            let a = io::read_image(&image_a)?;
            let b = io::read_image(&image_b)?;
            if a.height() != b.height() || a.width() != b.width() {
                return Err(LocalizeError::DimensionMismatch {
                    a: (a.height(), a.width()),
                    b: (b.height(), b.width()),
                }
                .into());
            }
            let fms = feature_maps(&source, &[&a, &b])?;
            let ma = cam_at(&fms[0], &cfg, &a)?;
            let mb = cam_at(&fms[1], &cfg, &b)?;
            let sim = cam_similarity(ma.quantized.as_ref().expect("quantized"), mb.quantized.as_ref().expect("quantized"), threshold)?;
            print_json(&json!({
                "pearson": if sim.undefined { None } else { Some(sim.pearson) },
                "mask_iou": sim.mask_iou,
                "undefined": sim.undefined,
            }));
        }
        Command::DumpActivations { image, source, out } => {
            let (dir, tap) = match source.resolve(0, true)? {
                Source::Model { dir, tap } => (dir, tap),
                _ => return Err(Failure::Usage("dump-activations needs --model".into())),
            };
            let model = load_model(&dir, tap)?;
            let img = io::read_image(&image)?;
            let fm = activations(&model, &img)?;
            io::write_fmap(&out, fm.as_tensor())?;
            print_json(&json!({
                "out": out,
                "tap": model.tap,
                "dims": [fm.channels(), fm.height(), fm.width()],
            }));
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message());
            ExitCode::from(f.code())
        }
    }
}
