use std::fmt;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use mega4d::codec;
use mega4d::dataset::{Dataset, Manifest};
use mega4d::metrics::{frame_metrics, MetricsReport};
use mega4d::render::{participation_ratio, rasterize, RenderConfig};
use mega4d::synth::{synth, SynthConfig};
use mega4d::train::{train, TrainConfig, TrainLog};
use mega4d::nalgebra::Vector3;
use mega4d::{Camera, Error, Model};

#[derive(Parser, Debug)]
#[command(name = "mega4d", version, about = "Memory-efficient 4D Gaussian splatting on the CPU")]
struct Cli {
    /// Seed for every random choice the command makes.
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic multi-view video dataset.
    Synth {
        #[arg(long, default_value = "orbit-3cam-8frames-64px")]
        preset: String,
        #[arg(long)]
        out: PathBuf,
        /// Number of ground-truth Gaussians.
        #[arg(long, default_value_t = 30)]
        gaussians: usize,
    },
    /// Train a model on a dataset directory.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 3000)]
        iters: usize,
        #[arg(long, default_value_t = 0.2)]
        lambda: f64,
        #[arg(long, default_value_t = 5e-4)]
        kappa: f64,
        #[arg(long)]
        no_deform: bool,
        #[arg(long)]
        no_entropy: bool,
        #[arg(long)]
        no_color_net: bool,
        /// Initial Gaussian count.
        #[arg(long)]
        init_count: Option<usize>,
        /// Mean NDC positional gradient that triggers densification.
        #[arg(long)]
        densify_threshold: Option<f64>,
        /// Upper bound on the Gaussian count during densification.
        #[arg(long)]
        max_gaussians: Option<usize>,
        /// Training log path (default: MODEL with a .log extension).
        #[arg(long)]
        log: Option<PathBuf>,
    },
    /// Render one image.
    Render {
        #[arg(long)]
        model: PathBuf,
        /// Dataset providing the cameras and background.
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        camera: usize,
        #[arg(long)]
        time: f64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write the compressed archive of a model; prints its size report.
    Compress {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Expand an archive to a JSON model.
    Decompress {
        #[arg(long)]
        archive: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Render every dataset frame and report PSNR / DSSIM.
    Eval {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Also write the (8-bit) renders here.
        #[arg(long)]
        renders: Option<PathBuf>,
    },
    /// Participation ratio over time (and optionally the count trajectory
    /// of a training log) as CSV.
    Analyze {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        times: usize,
        #[arg(long)]
        out: PathBuf,
        /// Dataset whose camera supplies the view for deformation.
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        camera: usize,
        #[arg(long, default_value_t = 0.05)]
        threshold: f64,
        /// Training log to convert into a count trajectory.
        #[arg(long)]
        log: Option<PathBuf>,
        #[arg(long, requires = "log")]
        counts_out: Option<PathBuf>,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Kind {
    Usage,
    Io,
    Manifest,
    Model,
    Compute,
}

impl Kind {
    fn label(self) -> &'static str {
        match self {
            Kind::Usage => "usage",
            Kind::Io => "io",
            Kind::Manifest => "manifest",
            Kind::Model => "model",
            Kind::Compute => "compute",
        }
    }

    fn exit_code(self) -> u8 {
        match self {
            Kind::Usage => 2,
            Kind::Io => 3,
            Kind::Manifest => 4,
            Kind::Model => 5,
            Kind::Compute => 6,
        }
    }
}

struct CliError {
    kind: Kind,
    msg: String,
}

impl CliError {
    fn new(kind: Kind, msg: impl Into<String>) -> Self {
        Self { kind, msg: msg.into() }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let one_line = self.msg.split_whitespace().collect::<Vec<_>>().join(" ");
        write!(f, "error[{}]: {one_line}", self.kind.label())
    }
}

fn kind_of(e: &Error) -> Kind {
    match e {
        Error::Io(_) => Kind::Io,
        Error::Manifest(_) | Error::Image { .. } => Kind::Manifest,
        Error::BadMagic(_)
        | Error::UnsupportedVersion(_)
        | Error::CrcMismatch { .. }
        | Error::Corrupt(_)
        | Error::Json(_)
        | Error::Fp16(_) => Kind::Model,
        Error::InvalidParameter(_) | Error::Config(_) => Kind::Usage,
        Error::Dimension(_) | Error::State(_) | Error::Empty(_) => Kind::Compute,
    }
}

/// Wraps a library error with the path it concerns.
fn at(path: &Path) -> impl Fn(Error) -> CliError + '_ {
    move |e| CliError::new(kind_of(&e), format!("{}: {e}", path.display()))
}

fn io_at(path: &Path) -> impl Fn(std::io::Error) -> CliError + '_ {
    move |e| CliError::new(Kind::Io, format!("{}: {e}", path.display()))
}

fn load_model(path: &Path) -> Result<Model, CliError> {
    if !path.is_file() {
        return Err(CliError::new(Kind::Io, format!("{}: model file not found", path.display())));
    }
    Model::load(path).map_err(|e| {
        let kind = match kind_of(&e) {
            Kind::Io => Kind::Io,
            _ => Kind::Model,
        };
        CliError::new(kind, format!("{}: {e}", path.display()))
    })
}

fn load_dataset(dir: &Path) -> Result<Dataset, CliError> {
    Dataset::load(dir).map_err(at(dir))
}

fn write_text(path: &Path, text: &str) -> Result<(), CliError> {
    std::fs::write(path, text).map_err(io_at(path))
}

fn evenly_spaced(n: usize) -> Vec<f64> {
    match n {
        1 => vec![0.5],
        _ => (0..n).map(|k| k as f64 / (n - 1) as f64).collect(),
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Synth { preset, out, gaussians } => {
            let cfg = SynthConfig { gaussians, seed: cli.seed, ..SynthConfig::preset(&preset).map_err(|e| CliError::new(Kind::Usage, e.to_string()))? };
            let m = synth(&cfg, &out).map_err(at(&out))?;
            println!("wrote {} frames to {}", m.frames.len(), out.display());
        }
        Command::Train { data, out, iters, lambda, kappa, no_deform, no_entropy, no_color_net, init_count, densify_threshold, max_gaussians, log } => {
            let ds = load_dataset(&data)?;
            let mut cfg = TrainConfig::with_iterations(iters);
            cfg.lambda = lambda;
            cfg.kappa = if no_entropy { 0.0 } else { kappa };
            cfg.use_deform = !no_deform;
            cfg.use_color_net = !no_color_net;
            cfg.seed = cli.seed;
            if let Some(n) = init_count {
                cfg.init.count = n;
            }
            if let Some(g) = densify_threshold {
                cfg.densify.grad_threshold = g;
            }
            if max_gaussians.is_some() {
                cfg.densify.max_gaussians = max_gaussians;
            }
            let result = train(&ds, &cfg).map_err(|e| CliError::new(kind_of(&e), e.to_string()))?;
            result.model.save_json(&out).map_err(at(&out))?;
            let log_path = log.unwrap_or_else(|| out.with_extension("log"));
            write_text(&log_path, &result.log.to_text())?;
            let last = result.log.records.last();
            println!(
                "trained {} iterations: {} gaussians, final l1 {}",
                iters,
                result.model.cloud.len(),
                last.map_or("n/a".into(), |r| format!("{:.5}", r.l1))
            );
        }
        Command::Render { model, data, camera, time, out } => {
            let m = load_model(&model)?;
            let manifest = Manifest::load(&data).map_err(at(&data))?;
            let cam = manifest.camera(camera, time).map_err(|e| CliError::new(Kind::Usage, e.to_string()))?;
            let cfg = RenderConfig { background: manifest.background, ..RenderConfig::default() };
            let img = rasterize(&m.cloud, &m.predictors, &cam, &cfg).map_err(|e| CliError::new(kind_of(&e), e.to_string()))?;
            img.write_ppm(&out).map_err(at(&out))?;
        }
        Command::Compress { model, out } => {
            let m = load_model(&model)?;
            let bytes = m.save_archive(&out).map_err(at(&out))?;
            let report = codec::size_report(&bytes).map_err(at(&out))?;
            println!("{}", serde_json::to_string_pretty(&report).expect("report serializes"));
        }
        Command::Decompress { archive, out } => {
            let bytes = std::fs::read(&archive).map_err(io_at(&archive))?;
            let (cloud, predictors) = codec::decode(&bytes).map_err(at(&archive))?;
            Model::new(cloud, predictors).save_json(&out).map_err(at(&out))?;
        }
        Command::Eval { model, data, out, renders } => {
            let m = load_model(&model)?;
            let ds = load_dataset(&data)?;
            let cfg = RenderConfig { background: ds.manifest.background, ..RenderConfig::default() };
            if let Some(dir) = &renders {
                std::fs::create_dir_all(dir).map_err(io_at(dir))?;
            }
            let mut frames = Vec::with_capacity(ds.views.len());
            for v in &ds.views {
                let img = rasterize(&m.cloud, &m.predictors, &v.camera, &cfg)
                    .map_err(|e| CliError::new(kind_of(&e), e.to_string()))?
                    .quantized();
                if let Some(dir) = &renders {
                    let name = Path::new(&v.name).file_name().map(PathBuf::from).unwrap_or_else(|| PathBuf::from(&v.name));
                    let p = dir.join(name);
                    img.write_ppm(&p).map_err(at(&p))?;
                }
                frames.push(frame_metrics(&v.name, &img, &v.image).map_err(|e| CliError::new(kind_of(&e), e.to_string()))?);
            }
            let report = MetricsReport::from_frames(frames);
            write_text(&out, &serde_json::to_string_pretty(&report).expect("report serializes"))?;
            println!(
                "mean PSNR {} dB, DSSIM1 {:.5}, DSSIM2 {:.5}",
                report.mean_psnr.map_or("inf".into(), |p| format!("{p:.3}")),
                report.mean_dssim1,
                report.mean_dssim2
            );
        }
        Command::Analyze { model, times, out, data, camera, threshold, log, counts_out } => {
            if times == 0 {
                return Err(CliError::new(Kind::Usage, "--times must be at least 1"));
            }
            let m = load_model(&model)?;
            let view = match &data {
                Some(d) => Manifest::load(d)
                    .map_err(at(d))?
                    .camera(camera, 0.0)
                    .map_err(|e| CliError::new(Kind::Usage, e.to_string()))?,
                None => default_view(),
            };
            let ts = evenly_spaced(times);
            let ratios = participation_ratio(&m.cloud, &m.predictors, &view, &ts, threshold)
                .map_err(|e| CliError::new(kind_of(&e), e.to_string()))?;
            let total = m.cloud.len();
            let mut csv = String::from("time,participating,total,ratio\n");
            for (t, r) in ts.iter().zip(&ratios) {
                csv.push_str(&format!("{t},{},{total},{r}\n", (r * total as f64).round() as usize));
            }
            write_text(&out, &csv)?;
            if let Some(log_path) = log {
                let text = std::fs::read_to_string(&log_path).map_err(io_at(&log_path))?;
                let parsed = TrainLog::from_text(&text).map_err(at(&log_path))?;
                if let Some(cpath) = counts_out {
                    let mut c = String::from("iteration,count\n");
                    for (i, n) in parsed.count_trajectory() {
                        c.push_str(&format!("{i},{n}\n"));
                    }
                    write_text(&cpath, &c)?;
                }
            }
        }
    }
    Ok(())
}

/// Viewpoint used for deformation queries when no dataset is given.
fn default_view() -> Camera {
    Camera::look_at(
        Vector3::new(0.0, 0.0, -3.5),
        Vector3::zeros(),
        Vector3::new(0.0, 1.0, 0.0),
        64.0,
        64.0,
        64,
        64,
        0.0,
    )
    .expect("fixed camera is valid")
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                print!("{e}");
                return ExitCode::SUCCESS;
            }
            let msg = e.to_string();
            let first = msg.lines().find(|l| !l.trim().is_empty()).unwrap_or("invalid arguments");
            let first = first.trim_start_matches("error: ");
            eprintln!("{}", CliError::new(Kind::Usage, first));
            return ExitCode::from(Kind::Usage.exit_code());
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{e}");
            ExitCode::from(e.kind.exit_code())
        }
    }
}
