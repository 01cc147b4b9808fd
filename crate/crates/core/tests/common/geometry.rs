use mega4d::gauss::{covariance4, slice, temporal_opacity, Quaternion};
use mega4d::nalgebra::{Matrix3, Matrix4, Vector3, Vector4};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn hamilton(a: [f64; 4], b: [f64; 4]) -> [f64; 4] {
    [
        a[0] * b[0] - a[1] * b[1] - a[2] * b[2] - a[3] * b[3],
        a[0] * b[1] + a[1] * b[0] + a[2] * b[3] - a[3] * b[2],
        a[0] * b[2] - a[1] * b[3] + a[2] * b[0] + a[3] * b[1],
        a[0] * b[3] + a[1] * b[2] - a[2] * b[1] + a[3] * b[0],
    ]
}

fn unit(q: Quaternion) -> [f64; 4] {
    let a = q.to_array();
    let n = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    a.map(|x| x / n)
}

/// `p ↦ q_l ⊗ p ⊗ q_r` as a matrix, built column by column.
pub fn rotor_by_products(q_l: Quaternion, q_r: Quaternion) -> Matrix4<f64> {
    let (l, r) = (unit(q_l), unit(q_r));
    let mut m = Matrix4::zeros();
    for j in 0..4 {
        let mut e = [0.0; 4];
        e[j] = 1.0;
        let col = hamilton(hamilton(l, e), r);
        for i in 0..4 {
            m[(i, j)] = col[i];
        }
    }
    m
}

/// Worst relative error of `slice` against the conditional distribution of
/// the full 4D Gaussian over `count` random Gaussians and several times.
pub fn slice_oracle_error(count: usize, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..count {
        let g = super::random_gaussian(&mut rng);
        let rot = rotor_by_products(g.q_l, g.q_r);
        let d = Matrix4::from_diagonal(&Vector4::from(g.s4.map(|s| (2.0 * s).exp())));
        let sigma = rot * d * rot.transpose();
        worst = worst.max((covariance4(&g).unwrap() - sigma).abs().max() / sigma.abs().max());
        let inv4 = sigma.try_inverse().unwrap();
        let u = sigma.fixed_view::<3, 3>(0, 0).into_owned();
        let v = sigma.fixed_view::<3, 1>(0, 3).into_owned();
        let w = sigma[(3, 3)];
        let cond_cov: Matrix3<f64> = u - v * v.transpose() / w;
        let mu3 = Vector3::new(g.mu4[0], g.mu4[1], g.mu4[2]);
        for _ in 0..5 {
            let t = rng.random_range(0.0..1.0);
            let s = slice(&g, t).unwrap();
            let cond_mean = mu3 + v * ((t - g.mu4[3]) / w);
            worst = worst.max((s.mu3_t - cond_mean).norm() / cond_mean.norm().max(1e-3));
            worst = worst.max((s.sigma3 - cond_cov).abs().max() / cond_cov.abs().max());
            // unnormalized densities agree pointwise, so σ(t) carries all of the time dependence
            let inv3 = s.sigma3.try_inverse().unwrap();
            for _ in 0..3 {
                let x = cond_mean + Vector3::from_fn(|_, _| rng.random_range(-0.2..0.2));
                let dx4 = Vector4::new(x.x - g.mu4[0], x.y - g.mu4[1], x.z - g.mu4[2], t - g.mu4[3]);
                let joint = (-0.5 * (dx4.transpose() * inv4 * dx4)[0]).exp();
                let dx3 = x - s.mu3_t;
                let factored = s.temporal_opacity * (-0.5 * (dx3.transpose() * inv3 * dx3)[0]).exp();
                if joint > 1e-200 {
                    worst = worst.max((joint - factored).abs() / joint);
                }
            }
            let sigma_t = (-(t - g.mu4[3]).powi(2) / (2.0 * w)).exp();
            worst = worst.max((temporal_opacity(&g, t).unwrap() - sigma_t).abs() / sigma_t.max(1e-300));
        }
    }
    worst
}
