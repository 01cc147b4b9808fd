//! Acceptance suite: one PASS/FAIL line per criterion, nonzero exit if any
//! fails. Runs the three benchmark trainings, so expect 10-20 minutes on
//! one core. Set `MEGA4D_ACCEPTANCE_LOG=info` for training progress.

mod common;

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::Instant;

use mega4d::codec::{encode, size_report};
use mega4d::color::{param_count_per_gaussian, ColorLayout};
use mega4d::dataset::Dataset;
use mega4d::loss::l1_loss;
use mega4d::metrics::psnr;
use mega4d::render::{participation_ratio, rasterize, RenderConfig};
use mega4d::synth::{synth, SynthConfig};
use mega4d::train::{train, TrainConfig, TrainLog, TrainOutput};

const BENCHMARK_PRESET: &str = "orbit-3cam-8frames-64px";
const ITERATIONS: usize = 3000;
const SEED: u64 = 0;
/// Positional-gradient threshold for the 64 px benchmark, shared by all arms.
const BENCHMARK_DENSIFY_THRESHOLD: f64 = 1e-3;

const SLICE_TOLERANCE: f64 = 1e-6;
const GRADIENT_TOLERANCE: f64 = 1e-3;
const GRADIENT_BUDGET_S: f64 = 300.0;
const RASTER_TOLERANCE: f64 = 1e-6;
const MIN_ATTRIBUTE_RATIO: f64 = 16.0;
const MAX_COUNT_FRACTION: f64 = 0.5;
const MAX_L1_FACTOR: f64 = 1.5;
const TRAINING_BUDGET_S: f64 = 1800.0;
const MIN_TRAIN_PSNR: f64 = 30.0;
const MIN_DEFLATE_SAVING: f64 = 0.05;
const MIN_FP16_PSNR: f64 = 45.0;

type Verdict = Result<(bool, String), String>;

struct Suite {
    results: Vec<(String, bool)>,
}

impl Suite {
    fn run(&mut self, name: &str, f: impl FnOnce() -> Verdict) {
        let start = Instant::now();
        let (pass, detail) = match catch_unwind(AssertUnwindSafe(f)) {
            Ok(Ok(v)) => v,
            Ok(Err(e)) => (false, format!("error: {e}")),
            Err(p) => (false, format!("panic: {}", panic_text(&p))),
        };
        let tag = if pass { "PASS" } else { "FAIL" };
        println!("[{tag}] {name}: {detail} ({:.1} s)", start.elapsed().as_secs_f64());
        self.results.push((name.to_string(), pass));
    }
}

fn panic_text(p: &Box<dyn std::any::Any + Send>) -> String {
    p.downcast_ref::<String>()
        .cloned()
        .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
        .unwrap_or_else(|| "unknown".into())
}

struct Run {
    out: TrainOutput,
    seconds: f64,
}

struct Benchmark {
    data: Dataset,
    full: Run,
    baseline: Run,
    entropy_only: Run,
}

fn benchmark_config(kappa: f64, deform: bool) -> TrainConfig {
    let mut cfg = TrainConfig::with_iterations(ITERATIONS);
    cfg.kappa = kappa;
    cfg.use_deform = deform;
    cfg.seed = SEED;
    cfg.densify.grad_threshold = BENCHMARK_DENSIFY_THRESHOLD;
    cfg
}

fn timed_train(data: &Dataset, cfg: &TrainConfig, label: &str) -> Result<Run, String> {
    eprintln!("training {label} ({} iterations)...", cfg.iterations);
    let start = Instant::now();
    let out = train(data, cfg).map_err(|e| e.to_string())?;
    let seconds = start.elapsed().as_secs_f64();
    eprintln!("  {label}: {} gaussians in {seconds:.0} s", out.model.cloud.len());
    Ok(Run { out, seconds })
}

fn build_benchmark(dir: &std::path::Path) -> Result<Benchmark, String> {
    let cfg = SynthConfig::preset(BENCHMARK_PRESET).map_err(|e| e.to_string())?;
    synth(&cfg, dir).map_err(|e| e.to_string())?;
    let data = Dataset::load(dir).map_err(|e| e.to_string())?;
    let full = timed_train(&data, &benchmark_config(5e-4, true), "kappa=5e-4 + deformation")?;
    let baseline = timed_train(&data, &benchmark_config(0.0, false), "kappa=0, no deformation")?;
    let entropy_only = timed_train(&data, &benchmark_config(5e-4, false), "kappa=5e-4, no deformation")?;
    Ok(Benchmark { data, full, baseline, entropy_only })
}

fn render_cfg(data: &Dataset) -> RenderConfig {
    RenderConfig { background: data.manifest.background, ..RenderConfig::default() }
}

/// Mean L1 of the model over every training view.
fn mean_l1(run: &Run, data: &Dataset) -> Result<f64, String> {
    let m = &run.out.model;
    let mut total = 0.0;
    for v in &data.views {
        let img = rasterize(&m.cloud, &m.predictors, &v.camera, &render_cfg(data)).map_err(|e| e.to_string())?;
        total += l1_loss(&img, &v.image).map_err(|e| e.to_string())?;
    }
    Ok(total / data.views.len() as f64)
}

/// Participation averaged over every rig camera and frame time.
fn mean_participation(run: &Run, data: &Dataset) -> Result<f64, String> {
    let m = &run.out.model;
    let times = data.times();
    let mut all = Vec::new();
    for c in 0..data.manifest.cameras.len() {
        let cam = data.manifest.camera(c, 0.0).map_err(|e| e.to_string())?;
        all.extend(participation_ratio(&m.cloud, &m.predictors, &cam, &times, 0.05).map_err(|e| e.to_string())?);
    }
    Ok(all.iter().sum::<f64>() / all.len() as f64)
}

fn count_shape(log: &TrainLog) -> (bool, bool) {
    let (grow, shrink): (Vec<_>, Vec<_>) =
        log.records.iter().map(|r| (r.iteration, r.count)).partition(|&(it, _)| it < log.densify_until);
    let shrink: Vec<_> = grow.last().into_iter().copied().chain(shrink).collect();
    (grow.windows(2).all(|w| w[1].1 >= w[0].1), shrink.windows(2).all(|w| w[1].1 <= w[0].1))
}

fn main() {
    // answer libtest-style listing without running the suite
    if std::env::args().any(|a| a == "--list") {
        println!("acceptance: test");
        return;
    }
    let level = std::env::var("MEGA4D_ACCEPTANCE_LOG").unwrap_or_else(|_| "error".into());
    let _ = env_logger::Builder::new().parse_filters(&format!("mega4d={level}")).is_test(false).try_init();
    let mut suite = Suite { results: Vec::new() };

    suite.run("1 slice equals conditional 4D Gaussian", || {
        let start = Instant::now();
        let worst = common::geometry::slice_oracle_error(200, 5);
        let secs = start.elapsed().as_secs_f64();
        Ok((worst < SLICE_TOLERANCE && secs < 10.0, format!("200 gaussians, max relative error {worst:.2e}")))
    });

    suite.run("2 analytic gradients match finite differences", || {
        let start = Instant::now();
        let report = common::gradients::suite();
        let secs = start.elapsed().as_secs_f64();
        let mut pass = secs < GRADIENT_BUDGET_S;
        for (name, w) in &report {
            pass &= w.err < GRADIENT_TOLERANCE;
            println!("    {name}: {w}");
        }
        let worst = report.iter().map(|(_, w)| w.err).fold(0.0, f64::max);
        Ok((pass, format!("worst relative error {worst:.2e}, {secs:.0} s of {GRADIENT_BUDGET_S:.0} s")))
    });

    suite.run("3 tiled renderer equals per-pixel compositor", || {
        let worst = common::raster::equivalence_error(20, 2024);
        let workers = common::raster::worker_count_independent(7);
        Ok((
            worst < RASTER_TOLERANCE && workers,
            format!("20 scenes, max channel difference {worst:.2e}, worker-count independent: {workers}"),
        ))
    });

    suite.run("4 zero-initialized heads render like disabled networks", || {
        let same = common::raster::identity_at_init(99);
        Ok((same, format!("bit-identical: {same}")))
    });

    suite.run("5 per-Gaussian parameter and byte accounting", || {
        let sh = param_count_per_gaussian(ColorLayout::REFERENCE_4DGS);
        let ours = param_count_per_gaussian(ColorLayout::DcAc);
        let ratio = sh as f64 / ours as f64;
        let cloud = common::random_cloud(10, &mut <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(1));
        let rep = size_report(&encode(&cloud, &Default::default()).map_err(|e| e.to_string())?)
            .map_err(|e| e.to_string())?;
        let pass = sh == 161
            && ours == 20
            && format!("{ratio:.2}") == "8.05"
            && rep.attribute_bytes_per_gaussian == 40
            && rep.baseline_bytes_per_gaussian == 644
            && rep.attribute_ratio >= MIN_ATTRIBUTE_RATIO;
        Ok((
            pass,
            format!(
                "params {sh}/{ours} = {ratio:.2}; bytes {}/{} = {:.2}",
                rep.baseline_bytes_per_gaussian, rep.attribute_bytes_per_gaussian, rep.attribute_ratio
            ),
        ))
    });

    let dir = tempfile::tempdir().expect("temporary directory");
    let bench = build_benchmark(dir.path());
    let bench = match &bench {
        Ok(b) => Some(b),
        Err(e) => {
            println!("benchmark training failed: {e}");
            None
        }
    };
    let need = || bench.ok_or_else(|| "benchmark unavailable".to_string());

    suite.run("6 entropy loss with deformation shrinks the model", || {
        let b = need()?;
        let (n_full, n_base) = (b.full.out.model.cloud.len(), b.baseline.out.model.cloud.len());
        let (l1_full, l1_base) = (mean_l1(&b.full, &b.data)?, mean_l1(&b.baseline, &b.data)?);
        let frac = n_full as f64 / n_base as f64;
        let secs = b.full.seconds + b.baseline.seconds;
        let pass = frac <= MAX_COUNT_FRACTION && l1_full <= MAX_L1_FACTOR * l1_base && secs < TRAINING_BUDGET_S;
        Ok((
            pass,
            format!(
                "gaussians {n_full} vs {n_base} ({:.1}%, need <= {:.0}%); mean L1 {l1_full:.5} vs {l1_base:.5} ({:.2}x, need <= {MAX_L1_FACTOR}x); {secs:.0} s",
                100.0 * frac,
                100.0 * MAX_COUNT_FRACTION,
                l1_full / l1_base
            ),
        ))
    });

    suite.run("7 deformation raises participation", || {
        let b = need()?;
        let (full, eo) = (mean_participation(&b.full, &b.data)?, mean_participation(&b.entropy_only, &b.data)?);
        Ok((full > eo, format!("deformation+entropy {full:.3} vs entropy-only {eo:.3}")))
    });

    suite.run("8 training views reach the PSNR floor", || {
        let b = need()?;
        let m = &b.full.out.model;
        let mut scores = Vec::new();
        for v in &b.data.views {
            let img = rasterize(&m.cloud, &m.predictors, &v.camera, &render_cfg(&b.data)).map_err(|e| e.to_string())?;
            scores.push(psnr(&img, &v.image, 1.0).map_err(|e| e.to_string())?);
        }
        let mean = scores.iter().sum::<f64>() / scores.len() as f64;
        let min = scores.iter().copied().fold(f64::INFINITY, f64::min);
        Ok((
            mean >= MIN_TRAIN_PSNR,
            format!("{} views, mean PSNR {mean:.2} dB (min {min:.2} dB), {ITERATIONS} iterations", scores.len()),
        ))
    });

    suite.run("9 archive roundtrip, DEFLATE saving and FP16 fidelity", || {
        let roundtrip = common::codec::roundtrip_random_clouds(100, 31);
        let b = need()?;
        let m = &b.full.out.model;
        let rep = size_report(&encode(&m.cloud, &m.predictors).map_err(|e| e.to_string())?).map_err(|e| e.to_string())?;
        let half = m.rounded_fp16().map_err(|e| e.to_string())?;
        let mut worst = f64::INFINITY;
        for v in &b.data.views {
            let cfg = render_cfg(&b.data);
            let a = rasterize(&m.cloud, &m.predictors, &v.camera, &cfg).map_err(|e| e.to_string())?;
            let h = rasterize(&half.cloud, &half.predictors, &v.camera, &cfg).map_err(|e| e.to_string())?;
            worst = worst.min(psnr(&h, &a, 1.0).map_err(|e| e.to_string())?);
        }
        let pass = roundtrip.is_ok() && rep.deflate_saving >= MIN_DEFLATE_SAVING && worst >= MIN_FP16_PSNR;
        Ok((
            pass,
            format!(
                "100 clouds: {}; DEFLATE saves {:.1}% of {} payload bytes; FP16 vs FP32 render min PSNR {worst:.2} dB",
                roundtrip.err().unwrap_or_else(|| "bit-exact".into()),
                100.0 * rep.deflate_saving,
                rep.payload_bytes
            ),
        ))
    });

    suite.run("10 count grows while densifying, then only shrinks", || {
        let b = need()?;
        let log = &b.full.out.log;
        let (grow, shrink) = count_shape(log);
        let at = log.count_at_densify_until().unwrap_or(0);
        let last = log.records.last().map_or(0, |r| r.count);
        Ok((
            grow && shrink,
            format!(
                "non-decreasing before iteration {}: {grow}; non-increasing from it on: {shrink}; {} -> {at} -> {last}",
                log.densify_until,
                log.records.first().map_or(0, |r| r.count)
            ),
        ))
    });

    let failed: Vec<&str> = suite.results.iter().filter(|r| !r.1).map(|r| r.0.as_str()).collect();
    println!("{} of {} criteria passed", suite.results.len() - failed.len(), suite.results.len());
    if !failed.is_empty() {
        std::process::exit(1);
    }
}
