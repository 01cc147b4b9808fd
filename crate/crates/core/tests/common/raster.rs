use mega4d::color::ColorPredictor;
use mega4d::deform::{DeformConfig, DeformPredictor};
use mega4d::render::{backward, rasterize, render, Predictors, RenderConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Largest per-channel difference between the tiled renderer and the
/// per-pixel reference over `scenes` random scenes. Every third scene uses
/// random networks; every fourth uses 8 px tiles.
pub fn equivalence_error(scenes: usize, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for k in 0..scenes {
        let n = rng.random_range(1..80);
        let cloud = super::random_cloud(n, &mut rng);
        let preds = if k % 3 == 2 { super::random_predictors(&mut rng, 0.3) } else { Predictors::default() };
        let size = [24, 32, 37][k % 3];
        let cam = super::camera(size, rng.random_range(0.0..1.0));
        let mut cfg = RenderConfig {
            background: std::array::from_fn(|_| rng.random_range(0.0..1.0)),
            ..RenderConfig::default()
        };
        if k % 4 == 3 {
            cfg.tile_size = 8;
        }
        let tiled = rasterize(&cloud, &preds, &cam, &cfg).unwrap();
        let naive = super::naive_render(&cloud, &preds, &cam, &cfg, None);
        let err = tiled.data.iter().zip(&naive.data).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        worst = worst.max(err);
    }
    worst
}

/// Renders and backpropagates one scene on pools of 1, 2, 3 and 8 workers
/// and reports whether images and gradients are bit-identical.
pub fn worker_count_independent(seed: u64) -> bool {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cloud = super::random_cloud(300, &mut rng);
    let preds = super::random_predictors(&mut rng, 0.2);
    let cam = super::camera(48, 0.4);
    let target = super::random_image(48, 48, &mut rng);
    let run = |threads: usize| {
        let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap();
        pool.install(|| {
            let r = render(&cloud, &preds, &cam, &RenderConfig::default(), None).unwrap();
            let d: Vec<f64> = r.image.data.iter().zip(&target.data).map(|(a, b)| a - b).collect();
            let g = backward(&cloud, &preds, &r.cache, &d).unwrap();
            (r.image, g)
        })
    };
    let reference = run(1);
    [2, 3, 8].iter().all(|&threads| run(threads) == reference)
}

/// Whether freshly built networks (zero heads) render bit-identically to
/// the pipeline with both networks disabled.
pub fn identity_at_init(seed: u64) -> bool {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..5).all(|k| {
        let cloud = super::random_cloud(60, &mut rng);
        let preds = Predictors {
            color: Some(ColorPredictor::new(64, &mut rng).unwrap()),
            deform: Some(DeformPredictor::new(DeformConfig::default(), &mut rng).unwrap()),
        };
        let cam = super::camera(40, k as f64 / 4.0);
        let cfg = RenderConfig::default();
        let with = rasterize(&cloud, &preds, &cam, &cfg).unwrap();
        let without = rasterize(&cloud, &Predictors::default(), &cam, &cfg).unwrap();
        with.data.iter().zip(&without.data).all(|(a, b)| a.to_bits() == b.to_bits())
    })
}
