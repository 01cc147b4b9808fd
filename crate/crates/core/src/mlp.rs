//! Dense multilayer perceptron with a hand-written backward pass.
//!
//! Used for both shared predictors: the AC color network and the
//! deformation network. Forward returns an explicit [`MlpCache`] so many
//! inputs can be evaluated against the same weights and backpropagated
//! later in any order.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Activation {
    None,
    Relu,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dense {
    pub in_dim: usize,
    pub out_dim: usize,
    /// Row-major `out_dim × in_dim`.
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
    pub activation: Activation,
}

impl Dense {
    pub fn zeros(in_dim: usize, out_dim: usize, activation: Activation) -> Self {
        Self {
            in_dim,
            out_dim,
            weight: vec![0.0; in_dim * out_dim],
            bias: vec![0.0; out_dim],
            activation,
        }
    }

    /// Uniform `±sqrt(6 / fan_in)` weights (He-uniform), zero bias.
    pub fn random<R: Rng>(in_dim: usize, out_dim: usize, activation: Activation, rng: &mut R) -> Self {
        let bound = (6.0 / in_dim as f64).sqrt();
        let weight = (0..in_dim * out_dim)
            .map(|_| rng.random_range(-bound..bound))
            .collect();
        Self { in_dim, out_dim, weight, bias: vec![0.0; out_dim], activation }
    }

    pub fn param_count(&self) -> usize {
        self.weight.len() + self.bias.len()
    }

    fn forward_into(&self, input: &[f64], pre: &mut Vec<f64>, out: &mut Vec<f64>) {
        pre.clear();
        out.clear();
        for o in 0..self.out_dim {
            let row = &self.weight[o * self.in_dim..(o + 1) * self.in_dim];
            let z = self.bias[o] + dot(row, input);
            pre.push(z);
            out.push(match self.activation {
                Activation::None => z,
                Activation::Relu => z.max(0.0),
            });
        }
    }
}

/// Dot product with four independent accumulators.
fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0; 4];
    let (ca, cb) = (a.chunks_exact(4), b.chunks_exact(4));
    let tail: f64 = ca.remainder().iter().zip(cb.remainder()).map(|(x, y)| x * y).sum();
    for (x, y) in ca.zip(cb) {
        for k in 0..4 {
            acc[k] += x[k] * y[k];
        }
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    pub layers: Vec<Dense>,
}

/// Per-layer inputs and pre-activations of one forward evaluation.
#[derive(Debug, Clone, Default)]
pub struct MlpCache {
    inputs: Vec<Vec<f64>>,
    pre: Vec<Vec<f64>>,
    output: Vec<f64>,
}

impl MlpCache {
    pub fn output(&self) -> &[f64] {
        &self.output
    }
}

/// Gradient buffers shaped like an [`Mlp`].
#[derive(Debug, Clone, PartialEq)]
pub struct MlpGrad {
    pub weight: Vec<Vec<f64>>,
    pub bias: Vec<Vec<f64>>,
}

impl MlpGrad {
    pub fn zeros_like(mlp: &Mlp) -> Self {
        Self {
            weight: mlp.layers.iter().map(|l| vec![0.0; l.weight.len()]).collect(),
            bias: mlp.layers.iter().map(|l| vec![0.0; l.bias.len()]).collect(),
        }
    }

    pub fn add_assign(&mut self, other: &MlpGrad) {
        for (a, b) in self.weight.iter_mut().zip(&other.weight) {
            a.iter_mut().zip(b).for_each(|(x, y)| *x += y);
        }
        for (a, b) in self.bias.iter_mut().zip(&other.bias) {
            a.iter_mut().zip(b).for_each(|(x, y)| *x += y);
        }
    }

    pub fn is_zero(&self) -> bool {
        self.weight.iter().chain(&self.bias).all(|v| v.iter().all(|&x| x == 0.0))
    }

    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for (w, b) in self.weight.iter().zip(&self.bias) {
            out.extend_from_slice(w);
            out.extend_from_slice(b);
        }
        out
    }
}

impl Mlp {
    /// Builds `dims[0] → dims[1] → … → dims[n]` with ReLU on all hidden
    /// layers and a linear head. The head is zero-initialized when
    /// `zero_head` is set.
    pub fn new<R: Rng>(dims: &[usize], zero_head: bool, rng: &mut R) -> Result<Self> {
        if dims.len() < 2 || dims.iter().any(|&d| d == 0) {
            return Err(Error::Config(format!("invalid mlp dims {dims:?}")));
        }
        let n = dims.len() - 1;
        let layers = (0..n)
            .map(|i| {
                let act = if i + 1 == n { Activation::None } else { Activation::Relu };
                if i + 1 == n && zero_head {
                    Dense::zeros(dims[i], dims[i + 1], act)
                } else {
                    Dense::random(dims[i], dims[i + 1], act, rng)
                }
            })
            .collect();
        Ok(Self { layers })
    }

    pub fn from_layers(layers: Vec<Dense>) -> Result<Self> {
        let mlp = Self { layers };
        mlp.validate()?;
        Ok(mlp)
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers.is_empty() {
            return Err(Error::Config("mlp has no layers".into()));
        }
        for (i, l) in self.layers.iter().enumerate() {
            if l.weight.len() != l.in_dim * l.out_dim || l.bias.len() != l.out_dim {
                return Err(Error::Config(format!("layer {i} buffers do not match its shape")));
            }
        }
        for (i, pair) in self.layers.windows(2).enumerate() {
            if pair[0].out_dim != pair[1].in_dim {
                return Err(Error::Config(format!(
                    "layer {i} outputs {} but layer {} expects {}",
                    pair[0].out_dim,
                    i + 1,
                    pair[1].in_dim
                )));
            }
        }
        Ok(())
    }

    pub fn in_dim(&self) -> usize {
        self.layers[0].in_dim
    }

    pub fn out_dim(&self) -> usize {
        self.layers.last().map(|l| l.out_dim).unwrap_or(0)
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(Dense::param_count).sum()
    }

    pub fn zero_head(&mut self) {
        if let Some(l) = self.layers.last_mut() {
            l.weight.iter_mut().for_each(|w| *w = 0.0);
            l.bias.iter_mut().for_each(|b| *b = 0.0);
        }
    }

    pub fn forward(&self, input: &[f64]) -> Result<MlpCache> {
        if input.len() != self.in_dim() {
            return Err(Error::Config(format!(
                "mlp expects {} inputs, got {}",
                self.in_dim(),
                input.len()
            )));
        }
        let mut cache = MlpCache {
            inputs: Vec::with_capacity(self.layers.len()),
            pre: Vec::with_capacity(self.layers.len()),
            output: Vec::new(),
        };
        let mut x = input.to_vec();
        for layer in &self.layers {
            let mut pre = Vec::with_capacity(layer.out_dim);
            let mut out = Vec::with_capacity(layer.out_dim);
            layer.forward_into(&x, &mut pre, &mut out);
            cache.inputs.push(x);
            cache.pre.push(pre);
            x = out;
        }
        cache.output = x;
        Ok(cache)
    }

    /// Accumulates parameter gradients into `grad` and returns the gradient
    /// w.r.t. the network input.
    pub fn backward(&self, cache: &MlpCache, d_out: &[f64], grad: &mut MlpGrad) -> Result<Vec<f64>> {
        if cache.inputs.len() != self.layers.len() {
            return Err(Error::State("mlp backward without a matching forward cache".into()));
        }
        if d_out.len() != self.out_dim() {
            return Err(Error::Dimension(format!(
                "mlp output gradient has {} entries, expected {}",
                d_out.len(),
                self.out_dim()
            )));
        }
        let mut g = d_out.to_vec();
        for (li, layer) in self.layers.iter().enumerate().rev() {
            if layer.activation == Activation::Relu {
                for (gi, &z) in g.iter_mut().zip(&cache.pre[li]) {
                    if z <= 0.0 {
                        *gi = 0.0;
                    }
                }
            }
            let input = &cache.inputs[li];
            let gw = &mut grad.weight[li];
            let gb = &mut grad.bias[li];
            let mut g_in = vec![0.0; layer.in_dim];
            for (o, &go) in g.iter().enumerate() {
                if go == 0.0 {
                    continue;
                }
                gb[o] += go;
                let row = o * layer.in_dim;
                let w_row = &layer.weight[row..row + layer.in_dim];
                let gw_row = &mut gw[row..row + layer.in_dim];
                for i in 0..layer.in_dim {
                    gw_row[i] += go * input[i];
                    g_in[i] += go * w_row[i];
                }
            }
            g = g_in;
        }
        Ok(g)
    }

    /// Visits every parameter mutably in layer order (weights, then bias).
    pub fn params_mut(&mut self) -> impl Iterator<Item = &mut f64> {
        self.layers
            .iter_mut()
            .flat_map(|l| l.weight.iter_mut().chain(l.bias.iter_mut()))
    }

    pub fn params(&self) -> impl Iterator<Item = &f64> {
        self.layers.iter().flat_map(|l| l.weight.iter().chain(l.bias.iter()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn dense_oracle(mlp: &Mlp, x: &[f64]) -> Vec<f64> {
        let mut a = x.to_vec();
        for l in &mlp.layers {
            let mut next = vec![0.0; l.out_dim];
            for o in 0..l.out_dim {
                let mut s = l.bias[o];
                for i in 0..l.in_dim {
                    s += l.weight[o * l.in_dim + i] * a[i];
                }
                next[o] = if l.activation == Activation::Relu { s.max(0.0) } else { s };
            }
            a = next;
        }
        a
    }

    #[test]
    fn forward_matches_matrix_product() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mlp = Mlp::new(&[5, 7, 4, 2], false, &mut rng).unwrap();
        let x = [0.3, -0.2, 0.9, 0.1, -0.7];
        let got = mlp.forward(&x).unwrap();
        for (a, b) in got.output().iter().zip(dense_oracle(&mlp, &x)) {
            assert!((a - b).abs() <= 1e-12 * (1.0 + b.abs()));
        }
    }

    #[test]
    fn zero_upstream_gives_zero_grads() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mlp = Mlp::new(&[3, 8, 2], false, &mut rng).unwrap();
        let cache = mlp.forward(&[0.1, 0.2, 0.3]).unwrap();
        let mut grad = MlpGrad::zeros_like(&mlp);
        let gin = mlp.backward(&cache, &[0.0, 0.0], &mut grad).unwrap();
        assert!(grad.is_zero());
        assert!(gin.iter().all(|&g| g == 0.0));
    }

    #[test]
    fn gradients_match_finite_differences() {
        for dims in [vec![4, 6, 3], vec![2, 5, 5, 1], vec![6, 3]] {
            let mut rng = ChaCha8Rng::seed_from_u64(11);
            let mut mlp = Mlp::new(&dims, false, &mut rng).unwrap();
            for b in mlp.layers.iter_mut().flat_map(|l| l.bias.iter_mut()) {
                *b = rng.random_range(-0.3..0.3);
            }
            let x: Vec<f64> = (0..dims[0]).map(|i| 0.1 + 0.2 * i as f64).collect();
            let up: Vec<f64> = (0..*dims.last().unwrap()).map(|i| 1.0 - 0.3 * i as f64).collect();
            let loss = |m: &Mlp, x: &[f64]| -> f64 {
                m.forward(x).unwrap().output().iter().zip(&up).map(|(a, b)| a * b).sum()
            };
            let cache = mlp.forward(&x).unwrap();
            let mut grad = MlpGrad::zeros_like(&mlp);
            let gin = mlp.backward(&cache, &up, &mut grad).unwrap();
            let analytic = grad.flatten();
            let h = 1e-6;
            let n = mlp.param_count();
            for k in 0..n {
                let mut p = mlp.clone();
                *p.params_mut().nth(k).unwrap() += h;
                let mut m = mlp.clone();
                *m.params_mut().nth(k).unwrap() -= h;
                let fd = (loss(&p, &x) - loss(&m, &x)) / (2.0 * h);
                assert!((fd - analytic[k]).abs() < 1e-6 * (1.0 + fd.abs()), "param {k}: {fd} vs {}", analytic[k]);
            }
            for i in 0..x.len() {
                let mut xp = x.clone();
                xp[i] += h;
                let mut xm = x.clone();
                xm[i] -= h;
                let fd = (loss(&mlp, &xp) - loss(&mlp, &xm)) / (2.0 * h);
                assert!((fd - gin[i]).abs() < 1e-6 * (1.0 + fd.abs()));
            }
        }
    }

    #[test]
    fn rejects_bad_shapes() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mlp = Mlp::new(&[3, 2], true, &mut rng).unwrap();
        assert!(matches!(mlp.forward(&[1.0]), Err(Error::Config(_))));
        let bad = Mlp { layers: vec![Dense::zeros(3, 4, Activation::Relu), Dense::zeros(5, 1, Activation::None)] };
        assert!(bad.validate().is_err());
        assert!(Mlp::new(&[3], false, &mut rng).is_err());
    }
}
