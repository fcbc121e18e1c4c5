//! Command-line front end. Data goes to stdout, logs to stderr; failures
//! print one JSON line `{"error": kind, "message": ...}` on stderr and exit
//! with 1 (usage), 2 (I/O) or 3 (data).

use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use crate::boxes::{BoxRecord, Detection, OrientedBox};
use crate::evaluation::{self, FluxUnit, HistogramRange};
use crate::flux::{flux_batch, FluxRecord, DM2_PER_M2};
use crate::pipeline::{run_pipeline, PipelineConfig};
use crate::splat_io::{filter_scene, read_splat_ply, write_splat_ply, CropBox, ParseOptions, SceneSplat, SplatIoError};
use crate::surface::{build_surface_elements, read_elements_csv, write_elements_csv, OrientationStrategy, SurfaceElement};
use crate::synthetic::{elements_to_splat, gen_benchmark_scene, BenchmarkConfig};
use crate::variational::{self, FeatureMatrix};
use crate::Vec3;

#[derive(Debug, Parser)]
#[command(name = "splat-closure", version, about = "Surface-closure scoring of 3D boxes over Gaussian splat scenes")]
pub struct Cli {
    /// Suppress log output.
    #[arg(long, global = true)]
    pub quiet: bool,
    /// Worker threads for batch flux and scoring; results do not depend on it.
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    /// Pipeline configuration (TOML or JSON); explicit flags take precedence.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Seed for every random choice.
    #[arg(long, global = true, default_value_t = 0)]
    pub seed: u64,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Summarize a splat PLY file.
    Inspect {
        #[arg(long)]
        splat: PathBuf,
        #[command(flatten)]
        parse: ParseArgs,
    },
    /// Drop low-opacity Gaussians and optionally crop to a box.
    Filter {
        #[arg(long)]
        splat: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0.3)]
        opacity_min: f64,
        /// `minx,miny,minz,maxx,maxy,maxz`
        #[arg(long, value_parser = parse_crop)]
        crop: Option<CropBox>,
        #[command(flatten)]
        parse: ParseArgs,
    },
    /// Build surface elements from a splat and write them as CSV.
    Surf {
        #[arg(long)]
        splat: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, default_value_t = 0.3)]
        opacity_min: f64,
        #[arg(long, value_enum, default_value_t = OrientationArg::Center)]
        orientation: OrientationArg,
        #[command(flatten)]
        parse: ParseArgs,
    },
    /// Per-box flux report as JSON.
    Flux {
        #[command(flatten)]
        source: ElementSource,
        #[arg(long)]
        boxes: PathBuf,
        #[command(flatten)]
        closure: ClosureArgs,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Rescore candidates by closure, gate by support, then NMS.
    Score {
        #[command(flatten)]
        source: ElementSource,
        #[arg(long)]
        boxes: PathBuf,
        #[command(flatten)]
        closure: ClosureArgs,
        #[command(flatten)]
        pipeline: PipelineArgs,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Like `score`, with geometric box refinement before NMS.
    Refine {
        #[command(flatten)]
        source: ElementSource,
        #[arg(long)]
        boxes: PathBuf,
        #[command(flatten)]
        closure: ClosureArgs,
        #[command(flatten)]
        pipeline: PipelineArgs,
        #[arg(long)]
        max_iterations: Option<usize>,
        #[arg(long)]
        coverage_weight: Option<f64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Generate a labeled synthetic scene into a directory.
    Synth {
        #[arg(long, default_value_t = 3)]
        objects: usize,
        /// Clutter elements per object element.
        #[arg(long, default_value_t = 0.0)]
        clutter: f64,
        #[arg(long, default_value_t = 0.0)]
        jitter: f64,
        #[arg(long, default_value_t = 2000)]
        elements_per_object: usize,
        #[arg(long)]
        fragments: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// AP/AR of detections against ground truth.
    Eval {
        #[arg(long)]
        dets: PathBuf,
        #[arg(long)]
        gt: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Histogram of per-box flux magnitude as `edge,count` CSV.
    Hist {
        #[command(flatten)]
        source: ElementSource,
        #[arg(long)]
        boxes: PathBuf,
        #[arg(long, default_value_t = 20)]
        bins: usize,
        #[arg(long, value_enum, default_value_t = UnitArg::Normalized)]
        unit: UnitArg,
        /// Upper edge; values above it land in the last bin. Defaults to the largest value.
        #[arg(long)]
        max: Option<f64>,
        #[arg(long, value_enum, default_value_t = OrientationArg::Center)]
        orientation: OrientationArg,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Residual injection and ELBO terms on matrix files (CSV, or binary for `.bin`).
    Elbo {
        #[arg(long)]
        features: PathBuf,
        #[arg(long)]
        reconstruction: PathBuf,
        #[arg(long)]
        mu: PathBuf,
        #[arg(long)]
        sigma: PathBuf,
        /// Added as `alpha * residual` to the features before the terms are computed.
        #[arg(long)]
        residual: Option<PathBuf>,
        #[arg(long, default_value_t = variational::DEFAULT_ALPHA)]
        alpha: f64,
        /// Where to write the injected features.
        #[arg(long)]
        injected_out: Option<PathBuf>,
    },
}

#[derive(Debug, Args)]
pub struct ParseArgs {
    /// Accept quaternions of any non-zero norm.
    #[arg(long)]
    pub lenient_quaternions: bool,
}

impl ParseArgs {
    fn options(&self) -> ParseOptions {
        if self.lenient_quaternions {
            ParseOptions {
                quaternion_tolerance: None,
            }
        } else {
            ParseOptions::default()
        }
    }
}

#[derive(Debug, Args)]
pub struct ElementSource {
    #[arg(long, required_unless_present = "elements", conflicts_with = "elements")]
    pub splat: Option<PathBuf>,
    /// Element CSV with columns x,y,z,nx,ny,nz,area,flatness.
    #[arg(long)]
    pub elements: Option<PathBuf>,
    /// Applied to `--splat` input only.
    #[arg(long, default_value_t = 0.3)]
    pub opacity_min: f64,
    #[command(flatten)]
    pub parse: ParseArgs,
}

#[derive(Debug, Args)]
pub struct ClosureArgs {
    /// Closure weight in (0, 1] [default: 0.5].
    #[arg(long)]
    pub gamma: Option<f64>,
    /// Score with normalized flux.
    #[arg(long)]
    pub normalized: bool,
    #[arg(long, value_enum)]
    pub orientation: Option<OrientationArg>,
    /// Test field direction `x,y,z` [default: 1,1,1].
    #[arg(long, value_parser = parse_vec3)]
    pub field: Option<Vec3>,
}

#[derive(Debug, Args)]
pub struct PipelineArgs {
    /// Minimum enclosed elements [default: 16].
    #[arg(long)]
    pub min_support: Option<usize>,
    /// NMS IoU threshold [default: 0.25].
    #[arg(long)]
    pub nms_iou: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum OrientationArg {
    /// Normals point away from the box (or scene) center.
    Center,
    /// Canonical sign with one seeded flip per instance.
    Flip,
    /// Keep stored signs.
    Keep,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum UnitArg {
    Scene,
    Dm2,
    Normalized,
}

fn parse_floats<const N: usize>(s: &str) -> Result<[f64; N], String> {
    let parts: Vec<f64> = s
        .split(',')
        .map(|p| p.trim().parse::<f64>().map_err(|e| format!("{p:?}: {e}")))
        .collect::<Result<_, _>>()?;
    let arr: [f64; N] = parts
        .try_into()
        .map_err(|v: Vec<f64>| format!("expected {N} comma-separated numbers, got {}", v.len()))?;
    if arr.iter().all(|v| v.is_finite()) {
        Ok(arr)
    } else {
        Err("values must be finite".into())
    }
}

fn parse_vec3(s: &str) -> Result<Vec3, String> {
    parse_floats::<3>(s).map(Vec3::from)
}

fn parse_crop(s: &str) -> Result<CropBox, String> {
    let v = parse_floats::<6>(s)?;
    CropBox::new(Vec3::new(v[0], v[1], v[2]), Vec3::new(v[3], v[4], v[5])).map_err(|e| e.to_string())
}

/// Failure classes, each with its own exit code.
#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Io(String),
    Data(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Io(_) => 2,
            CliError::Data(_) => 3,
        }
    }

    fn kind(&self) -> &'static str {
        match self {
            CliError::Usage(_) => "usage",
            CliError::Io(_) => "io",
            CliError::Data(_) => "data",
        }
    }

    fn message(&self) -> &str {
        match self {
            CliError::Usage(m) | CliError::Io(m) | CliError::Data(m) => m,
        }
    }

    /// Single-line JSON.
    pub fn to_line(&self) -> String {
        serde_json::json!({ "error": self.kind(), "message": self.message() }).to_string()
    }
}

fn data(e: impl std::fmt::Display) -> CliError {
    CliError::Data(e.to_string())
}

fn io_at(path: &Path) -> impl Fn(std::io::Error) -> CliError + '_ {
    move |e| CliError::Io(format!("{}: {e}", path.display()))
}

impl From<SplatIoError> for CliError {
    fn from(e: SplatIoError) -> Self {
        match e {
            SplatIoError::Io(e) => CliError::Io(e.to_string()),
            other => data(other),
        }
    }
}

/// Writes through a sibling temporary file and renames it into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), CliError> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(io_at(path))?;
    tmp.write_all(bytes).map_err(io_at(path))?;
    #[cfg(unix)]
    {
        use std::os::unix::fs::PermissionsExt;
        fs::set_permissions(tmp.path(), fs::Permissions::from_mode(0o644)).map_err(io_at(path))?;
    }
    tmp.persist(path).map_err(|e| io_at(path)(e.error))?;
    Ok(())
}

fn read_bytes(path: &Path) -> Result<Vec<u8>, CliError> {
    fs::read(path).map_err(io_at(path))
}

fn read_splat(path: &Path, parse: &ParseArgs) -> Result<SceneSplat, CliError> {
    read_splat_ply(path, &parse.options()).map_err(|e| match e {
        SplatIoError::Io(e) => io_at(path)(e),
        other => CliError::Data(format!("{}: {other}", path.display())),
    })
}

fn read_boxes(path: &Path) -> Result<Vec<BoxRecord>, CliError> {
    serde_json::from_slice(&read_bytes(path)?).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
}

fn read_detections(path: &Path) -> Result<Vec<Detection>, CliError> {
    read_boxes(path)?
        .iter()
        .enumerate()
        .map(|(i, r)| r.to_detection().map_err(|e| CliError::Data(format!("{} record {i}: {e}", path.display()))))
        .collect()
}

fn read_oriented(path: &Path) -> Result<Vec<OrientedBox>, CliError> {
    Ok(read_detections(path)?.into_iter().map(|d| d.bbox).collect())
}

fn load_elements(source: &ElementSource, strategy: &OrientationStrategy) -> Result<Vec<SurfaceElement>, CliError> {
    if let Some(path) = &source.elements {
        let bytes = read_bytes(path)?;
        return read_elements_csv(bytes.as_slice()).map_err(|e| CliError::Data(format!("{}: {e}", path.display())));
    }
    let path = source.splat.as_ref().ok_or_else(|| CliError::Usage("--splat or --elements is required".into()))?;
    let scene = read_splat(path, &source.parse)?;
    let kept = filter_scene(&scene, source.opacity_min, None)?;
    log::info!("{}: {} of {} Gaussians pass opacity {}", path.display(), kept.len(), scene.len(), source.opacity_min);
    build_surface_elements(&kept, strategy).map_err(data)
}

fn strategy(arg: OrientationArg, seed: u64, center: Vec3) -> OrientationStrategy {
    match arg {
        OrientationArg::Center => OrientationStrategy::CenterAligned {
            reference_center: center,
        },
        OrientationArg::Flip => OrientationStrategy::FirstElementRandomFlip { seed },
        OrientationArg::Keep => OrientationStrategy::Keep,
    }
}

fn load_config(path: Option<&Path>) -> Result<PipelineConfig, CliError> {
    let Some(path) = path else {
        return Ok(PipelineConfig::default());
    };
    let text = fs::read_to_string(path).map_err(io_at(path))?;
    let parsed = if path.extension().is_some_and(|e| e == "json") {
        serde_json::from_str(&text).map_err(data)
    } else {
        toml::from_str(&text).map_err(data)
    };
    parsed.map_err(|e| CliError::Data(format!("{}: {}", path.display(), e.message())))
}

fn apply_closure(config: &mut PipelineConfig, closure: &ClosureArgs, seed: u64) {
    if let Some(g) = closure.gamma {
        config.gamma = g;
    }
    if closure.normalized {
        config.use_normalized_flux = true;
    }
    if let Some(o) = closure.orientation {
        config.orientation = strategy(o, seed, Vec3::zeros());
    }
    if let Some(f) = closure.field {
        config.field = f.into();
    }
}

fn apply_pipeline(config: &mut PipelineConfig, args: &PipelineArgs) {
    if let Some(m) = args.min_support {
        config.min_support = m;
    }
    if let Some(t) = args.nms_iou {
        config.nms_iou = t;
    }
}

fn to_json<T: Serialize>(value: &T) -> Result<Vec<u8>, CliError> {
    let mut bytes = serde_json::to_vec_pretty(value).map_err(data)?;
    bytes.push(b'\n');
    Ok(bytes)
}

fn emit(out: Option<&Path>, bytes: &[u8], stdout: &mut dyn Write) -> Result<(), CliError> {
    match out {
        Some(path) => write_atomic(path, bytes),
        None => stdout.write_all(bytes).map_err(|e| CliError::Io(e.to_string())),
    }
}

#[derive(Serialize)]
struct FluxRow {
    index: usize,
    #[serde(flatten)]
    report: FluxRecord,
    /// `|flux|` in dm², reading scene units as metres.
    flux_dm2: f64,
    exceeds_one_dm2: bool,
}

#[derive(Serialize)]
struct Range {
    min: f64,
    max: f64,
    mean: f64,
}

impl Range {
    fn of(values: impl Iterator<Item = f64>) -> Option<Self> {
        let (mut min, mut max, mut sum, mut n) = (f64::INFINITY, f64::NEG_INFINITY, 0.0, 0usize);
        for v in values {
            min = min.min(v);
            max = max.max(v);
            sum += v;
            n += 1;
        }
        (n > 0).then(|| Range {
            min,
            max,
            mean: sum / n as f64,
        })
    }
}

#[derive(Serialize)]
struct Inspection {
    path: String,
    vertex_count: usize,
    properties: Vec<String>,
    comments: Vec<String>,
    bounds: Option<[[f64; 3]; 2]>,
    opacity: Option<Range>,
    scale: Option<Range>,
    below_default_opacity: usize,
}

fn read_matrix(path: &Path) -> Result<FeatureMatrix, CliError> {
    let bytes = read_bytes(path)?;
    let parsed = if path.extension().is_some_and(|e| e == "bin") {
        variational::read_matrix_bin(bytes.as_slice())
    } else {
        variational::read_matrix_csv(bytes.as_slice())
    };
    parsed.map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
}

fn execute(cli: &Cli, stdout: &mut dyn Write) -> Result<(), CliError> {
    let seed = cli.seed;
    match &cli.command {
        Command::Inspect { splat, parse } => {
            let scene = read_splat(splat, parse)?;
            let report = Inspection {
                path: splat.display().to_string(),
                vertex_count: scene.len(),
                properties: scene.layout.properties.iter().map(|p| p.name.clone()).collect(),
                comments: scene.layout.comments.clone(),
                bounds: scene.bounds.map(|b| [b.min.into(), b.max.into()]),
                opacity: Range::of(scene.primitives.iter().map(|p| p.opacity())),
                scale: Range::of(scene.primitives.iter().flat_map(|p| p.scales().iter().copied().collect::<Vec<_>>())),
                below_default_opacity: scene.primitives.iter().filter(|p| p.opacity() < 0.3).count(),
            };
            emit(None, &to_json(&report)?, stdout)
        }
        Command::Filter {
            splat,
            out,
            opacity_min,
            crop,
            parse,
        } => {
            let scene = read_splat(splat, parse)?;
            let kept = filter_scene(&scene, *opacity_min, crop.as_ref())?;
            log::info!("kept {} of {} Gaussians", kept.len(), scene.len());
            write_atomic(out, &write_splat_ply(&kept)?)
        }
        Command::Surf {
            splat,
            out,
            opacity_min,
            orientation,
            parse,
        } => {
            let scene = filter_scene(&read_splat(splat, parse)?, *opacity_min, None)?;
            let center = scene.bounds.map_or(Vec3::zeros(), |b| (b.min + b.max) * 0.5);
            let elements = build_surface_elements(&scene, &strategy(*orientation, seed, center)).map_err(data)?;
            let degenerate = elements.iter().filter(|e| e.degenerate).count();
            log::info!("{} elements, {degenerate} with tied smallest scales", elements.len());
            let mut buf = Vec::new();
            write_elements_csv(&mut buf, &elements).map_err(data)?;
            emit(out.as_deref(), &buf, stdout)
        }
        Command::Flux {
            source,
            boxes,
            closure,
            out,
        } => {
            let mut config = load_config(cli.config.as_deref())?;
            apply_closure(&mut config, closure, seed);
            config.validate().map_err(|e| CliError::Usage(e.to_string()))?;
            let elements = load_elements(source, &config.orientation)?;
            let boxes = read_oriented(boxes)?;
            let reports = flux_batch(&elements, &boxes, &config.flux_field().map_err(data)?, &config.orientation);
            let rows: Vec<FluxRow> = reports
                .iter()
                .enumerate()
                .map(|(index, r)| {
                    let flux_dm2 = r.flux.abs() * DM2_PER_M2;
                    let mut report = FluxRecord::new(r, config.gamma).map_err(data)?;
                    report.closure_score = config.closure_of(r);
                    Ok(FluxRow {
                        index,
                        report,
                        flux_dm2,
                        exceeds_one_dm2: flux_dm2 > 1.0,
                    })
                })
                .collect::<Result<_, CliError>>()?;
            emit(out.as_deref(), &to_json(&rows)?, stdout)
        }
        Command::Score {
            source,
            boxes,
            closure,
            pipeline,
            out,
        } => {
            let mut config = load_config(cli.config.as_deref())?;
            apply_closure(&mut config, closure, seed);
            apply_pipeline(&mut config, pipeline);
            config.refine.enabled = false;
            score(source, boxes, &config, out.as_deref(), stdout)
        }
        Command::Refine {
            source,
            boxes,
            closure,
            pipeline,
            max_iterations,
            coverage_weight,
            out,
        } => {
            let mut config = load_config(cli.config.as_deref())?;
            apply_closure(&mut config, closure, seed);
            apply_pipeline(&mut config, pipeline);
            config.refine.enabled = true;
            if let Some(m) = max_iterations {
                config.refine.max_iterations = *m;
            }
            if let Some(w) = coverage_weight {
                config.refine.coverage_weight = *w;
            }
            score(source, boxes, &config, out.as_deref(), stdout)
        }
        Command::Synth {
            objects,
            clutter,
            jitter,
            elements_per_object,
            fragments,
            out,
        } => {
            let config = BenchmarkConfig {
                objects: *objects,
                clutter_ratio: *clutter,
                jitter: *jitter,
                seed,
                fragments: *fragments,
                elements_per_object: *elements_per_object,
                ..Default::default()
            };
            let scene = gen_benchmark_scene(&config).map_err(data)?;
            let mut elements_csv = Vec::new();
            write_elements_csv(&mut elements_csv, &scene.elements).map_err(data)?;
            let gt: Vec<BoxRecord> = scene.gt_boxes.iter().map(BoxRecord::from).collect();
            let ply = write_splat_ply(&elements_to_splat(&scene.elements, 0.01, 2.0))?;
            let files = [
                ("elements.csv", elements_csv),
                ("gt_boxes.json", to_json(&gt)?),
                ("metadata.json", to_json(&scene.metadata())?),
                ("scene.ply", ply),
            ];
            fs::create_dir_all(out).map_err(io_at(out))?;
            for (name, bytes) in &files {
                write_atomic(&out.join(name), bytes)?;
            }
            log::info!("wrote {} elements, {} objects to {}", scene.elements.len(), scene.gt_boxes.len(), out.display());
            Ok(())
        }
        Command::Eval { dets, gt, out } => {
            let dets = read_detections(dets)?;
            let gt = read_oriented(gt)?;
            let report = evaluation::evaluate(&dets, &gt).map_err(data)?;
            emit(out.as_deref(), &to_json(&report)?, stdout)
        }
        Command::Hist {
            source,
            boxes,
            bins,
            unit,
            max,
            orientation,
            out,
        } => {
            let mut config = load_config(cli.config.as_deref())?;
            config.orientation = strategy(*orientation, seed, Vec3::zeros());
            let elements = load_elements(source, &config.orientation)?;
            let boxes = read_oriented(boxes)?;
            let unit = match unit {
                UnitArg::Scene => FluxUnit::Scene,
                UnitArg::Dm2 => FluxUnit::SquareDecimetre,
                UnitArg::Normalized => FluxUnit::Normalized,
            };
            let range = max.map_or(HistogramRange::Auto, HistogramRange::Fixed);
            let field = config.flux_field().map_err(data)?;
            let hist = evaluation::flux_histogram(&elements, &boxes, *bins, unit, range, &field, &config.orientation)
                .map_err(data)?;
            let mut buf = Vec::new();
            hist.write_csv(&mut buf).map_err(data)?;
            emit(out.as_deref(), &buf, stdout)
        }
        Command::Elbo {
            features,
            reconstruction,
            mu,
            sigma,
            residual,
            alpha,
            injected_out,
        } => {
            let mut f = read_matrix(features)?;
            if let Some(r) = residual {
                f = variational::inject_residual(&f, &read_matrix(r)?, *alpha).map_err(data)?;
            }
            if let Some(path) = injected_out {
                let mut buf = Vec::new();
                let written = if path.extension().is_some_and(|e| e == "bin") {
                    variational::write_matrix_bin(&mut buf, &f)
                } else {
                    variational::write_matrix_csv(&mut buf, &f)
                };
                written.map_err(data)?;
                write_atomic(path, &buf)?;
            }
            let terms = variational::elbo_terms(&f, &read_matrix(reconstruction)?, &read_matrix(mu)?, &read_matrix(sigma)?)
                .map_err(data)?;
            let report = serde_json::json!({ "recon": terms.recon, "kl": terms.kl, "loss": terms.loss });
            emit(None, &to_json(&report)?, stdout)
        }
    }
}

fn score(
    source: &ElementSource,
    boxes: &Path,
    config: &PipelineConfig,
    out: Option<&Path>,
    stdout: &mut dyn Write,
) -> Result<(), CliError> {
    config.validate().map_err(|e| CliError::Usage(e.to_string()))?;
    let elements = load_elements(source, &config.orientation)?;
    let candidates = read_detections(boxes)?;
    let kept = run_pipeline(&elements, &candidates, config).map_err(data)?;
    log::info!("{} of {} candidates kept", kept.len(), candidates.len());
    let records: Vec<_> = kept.iter().map(|p| p.record()).collect();
    emit(out, &to_json(&records)?, stdout)
}

fn init_logging(quiet: bool) {
    let level = if quiet { log::LevelFilter::Off } else { log::LevelFilter::Info };
    let mut builder = env_logger::Builder::new();
    builder.filter_level(level).format_timestamp(None).target(env_logger::Target::Stderr);
    if !quiet {
        builder.parse_default_env();
    }
    let _ = builder.try_init();
}

/// Parses `args` (program name first) and runs; returns the exit code.
pub fn run<I, T>(args: I, stdout: &mut dyn Write, stderr: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                let _ = write!(stdout, "{e}");
                return 0;
            }
            let message = e.to_string();
            let first = message.lines().next().unwrap_or("invalid arguments");
            let err = CliError::Usage(first.trim_start_matches("error: ").to_string());
            let _ = writeln!(stderr, "{}", err.to_line());
            return err.exit_code();
        }
    };
    init_logging(cli.quiet);
    // buffered so the worker pool never touches the caller's stream
    let mut buf = Vec::new();
    let result = match cli.threads {
        Some(0) => Err(CliError::Usage("--threads must be at least 1".into())),
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build()
            .map_err(|e| CliError::Usage(e.to_string()))
            .and_then(|pool| pool.install(|| execute(&cli, &mut buf))),
        None => execute(&cli, &mut buf),
    };
    let flushed = |()| {
        stdout
            .write_all(&buf)
            .and_then(|()| stdout.flush())
            .map_err(|e| CliError::Io(e.to_string()))
    };
    match result.and_then(flushed) {
        Ok(()) => 0,
        Err(e) => {
            let _ = writeln!(stderr, "{}", e.to_line());
            e.exit_code()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn call(args: &[&str]) -> (i32, String, String) {
        let mut out = Vec::new();
        let mut err = Vec::new();
        let code = run(std::iter::once("splat-closure").chain(args.iter().copied()), &mut out, &mut err);
        (code, String::from_utf8(out).unwrap(), String::from_utf8(err).unwrap())
    }

    #[test]
    fn usage_errors_exit_1() {
        let (code, _, err) = call(&["flux", "--bogus"]);
        assert_eq!(code, 1);
        assert_eq!(err.lines().count(), 1);
        let v: serde_json::Value = serde_json::from_str(&err).unwrap();
        assert_eq!(v["error"], "usage");
        assert_eq!(call(&["--help"]).0, 0);
    }

    #[test]
    fn missing_input_exits_2() {
        let (code, _, err) = call(&["--quiet", "inspect", "--splat", "/nonexistent/scene.ply"]);
        assert_eq!(code, 2, "{err}");
    }

    #[test]
    fn bad_data_exits_3() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("bad.ply");
        fs::write(&p, b"ply\nformat ascii 1.0\nend_header\n").unwrap();
        let (code, _, err) = call(&["--quiet", "inspect", "--splat", p.to_str().unwrap()]);
        assert_eq!(code, 3, "{err}");
    }

    #[test]
    fn parses_vectors() {
        assert_eq!(parse_vec3("1, 2,3").unwrap(), Vec3::new(1.0, 2.0, 3.0));
        assert!(parse_vec3("1,2").is_err());
        assert!(parse_crop("1,1,1,0,0,0").is_err());
    }
}
