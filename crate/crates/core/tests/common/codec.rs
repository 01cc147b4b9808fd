use mega4d::codec::{decode, encode, round_model};
use mega4d::gauss::GaussianCloud;
use mega4d::render::Predictors;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Bitwise equality of every stored value, so `-0.0` and `0.0` differ.
pub fn same_bits(a: &GaussianCloud, b: &GaussianCloud) -> bool {
    let bits = |c: &GaussianCloud| -> Vec<u64> {
        let mut v = Vec::new();
        for i in 0..c.len() {
            let g = c.get(i);
            v.extend(g.mu4.iter().chain(&g.q_l.to_array()).chain(&g.q_r.to_array()).chain(&g.s4));
            v.extend(g.c_dc.iter().chain(std::iter::once(&g.o_logit)));
        }
        v.into_iter().map(f64::to_bits).collect()
    };
    a.len() == b.len() && bits(a) == bits(b)
}

pub fn same_network_bits(a: &Predictors, b: &Predictors) -> bool {
    let bits = |p: &Predictors| -> Vec<u64> {
        let mut v: Vec<u64> = Vec::new();
        if let Some(c) = &p.color {
            v.extend(c.phi.params().map(|x| x.to_bits()));
        }
        if let Some(d) = &p.deform {
            v.extend(d.params().map(|x| x.to_bits()));
        }
        v
    };
    a.color.is_some() == b.color.is_some() && a.deform.is_some() == b.deform.is_some() && bits(a) == bits(b)
}

/// Encodes `count` random clouds (sizes 0..2000, with and without
/// networks) and checks each decodes to exactly its binary16 rounding.
/// Returns the first failing cloud index.
pub fn roundtrip_random_clouds(count: usize, seed: u64) -> Result<(), String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for k in 0..count {
        let n = if k == 0 { 0 } else { rng.random_range(1..2000) };
        let mut cloud = super::random_cloud(n, &mut rng);
        if k % 10 == 9 {
            // exercise saturation and signed zeros
            let mut g = cloud.get(0);
            g.mu4[0] = 1e6;
            g.s4[1] = -0.0;
            g.c_dc[2] = -7e5;
            cloud.set(0, g);
        }
        let preds = match k % 3 {
            0 => Predictors::default(),
            1 => super::random_predictors(&mut rng, 0.5),
            _ => Predictors { color: super::random_predictors(&mut rng, 0.5).color, deform: None },
        };
        let bytes = encode(&cloud, &preds).map_err(|e| format!("cloud {k}: {e}"))?;
        let (c2, p2) = decode(&bytes).map_err(|e| format!("cloud {k}: {e}"))?;
        let (rc, rp) = round_model(&cloud, &preds).unwrap();
        if !same_bits(&c2, &rc) || !same_network_bits(&p2, &rp) {
            return Err(format!("cloud {k} ({n} gaussians) did not round-trip"));
        }
        if encode(&cloud, &preds).unwrap() != bytes {
            return Err(format!("cloud {k}: encoding is not deterministic"));
        }
    }
    Ok(())
}
