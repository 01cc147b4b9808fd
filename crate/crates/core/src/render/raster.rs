//! Tile binning and front-to-back alpha compositing, forward and backward.

use rayon::prelude::*;

use super::RenderConfig;

/// Screen-space data the compositor needs for one splat.
#[derive(Debug, Clone, Copy)]
pub(crate) struct RasterSplat {
    pub mean: [f64; 2],
    /// Inverse 2D covariance `[a, b, c]` of `[[a, b], [b, c]]`.
    pub conic: [f64; 3],
    pub alpha_base: f64,
    pub rgb: [f64; 3],
    pub depth: f64,
    /// Gaussian index, the sort tie-breaker.
    pub index: usize,
    /// Inclusive pixel bounds `[x0, y0, x1, y1]`.
    pub bounds: [usize; 4],
}

/// Per-splat gradient produced by the compositor.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub(crate) struct SplatGrad {
    pub mean: [f64; 2],
    /// Full symmetric conic gradient `[g00, g01, g11]` (`g10 = g01`).
    pub conic: [f64; 3],
    pub alpha_base: f64,
    pub rgb: [f64; 3],
}

impl SplatGrad {
    fn add(&mut self, o: &SplatGrad) {
        self.mean[0] += o.mean[0];
        self.mean[1] += o.mean[1];
        for k in 0..3 {
            self.conic[k] += o.conic[k];
            self.rgb[k] += o.rgb[k];
        }
        self.alpha_base += o.alpha_base;
    }
}

#[derive(Debug, Clone)]
pub(crate) struct TileGrid {
    pub tile_size: usize,
    pub tiles_x: usize,
    /// Splat positions per tile, sorted by `(depth, index)`.
    pub lists: Vec<Vec<u32>>,
}

impl TileGrid {
    pub fn build(splats: &[RasterSplat], width: usize, height: usize, tile_size: usize) -> Self {
        let tiles_x = width.div_ceil(tile_size);
        let tiles_y = height.div_ceil(tile_size);
        let mut lists = vec![Vec::new(); tiles_x * tiles_y];
        for (k, s) in splats.iter().enumerate() {
            let [x0, y0, x1, y1] = s.bounds;
            for ty in y0 / tile_size..=y1 / tile_size {
                for tx in x0 / tile_size..=x1 / tile_size {
                    lists[ty * tiles_x + tx].push(k as u32);
                }
            }
        }
        for list in &mut lists {
            list.sort_by(|&a, &b| {
                let (sa, sb) = (&splats[a as usize], &splats[b as usize]);
                sa.depth.total_cmp(&sb.depth).then(sa.index.cmp(&sb.index))
            });
        }
        Self { tile_size, tiles_x, lists }
    }

    fn tile_rect(&self, tile: usize, width: usize, height: usize) -> (usize, usize, usize, usize) {
        let tx = tile % self.tiles_x;
        let ty = tile / self.tiles_x;
        let x0 = tx * self.tile_size;
        let y0 = ty * self.tile_size;
        (x0, y0, (x0 + self.tile_size).min(width), (y0 + self.tile_size).min(height))
    }
}

/// Gaussian falloff and opacity of a splat at a pixel center. Returns
/// `(alpha, falloff, clamped)`.
#[inline]
pub(crate) fn splat_alpha(s: &RasterSplat, px: f64, py: f64, cfg: &RenderConfig) -> (f64, f64, bool) {
    let dx = px - s.mean[0];
    let dy = py - s.mean[1];
    let q = s.conic[0] * dx * dx + 2.0 * s.conic[1] * dx * dy + s.conic[2] * dy * dy;
    let g = (-0.5 * q).exp();
    let raw = s.alpha_base * g;
    if raw > cfg.max_alpha {
        (cfg.max_alpha, g, true)
    } else {
        (raw, g, false)
    }
}

#[derive(Debug, Clone)]
pub(crate) struct Composite {
    pub color: Vec<f64>,
    pub final_t: Vec<f64>,
    /// Position in the tile list where compositing stopped, per pixel.
    pub last: Vec<u32>,
}

pub(crate) fn composite_forward(
    splats: &[RasterSplat],
    grid: &TileGrid,
    width: usize,
    height: usize,
    cfg: &RenderConfig,
) -> Composite {
    let per_tile: Vec<Vec<(usize, [f64; 3], f64, u32)>> = (0..grid.lists.len())
        .into_par_iter()
        .map(|tile| {
            let (x0, y0, x1, y1) = grid.tile_rect(tile, width, height);
            let list = &grid.lists[tile];
            let mut out = Vec::with_capacity((x1 - x0) * (y1 - y0));
            for y in y0..y1 {
                for x in x0..x1 {
                    let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
                    let mut t = 1.0;
                    let mut c = [0.0; 3];
                    let mut last = list.len() as u32;
                    for (pos, &k) in list.iter().enumerate() {
                        let s = &splats[k as usize];
                        let (alpha, _, _) = splat_alpha(s, px, py, cfg);
                        if alpha < cfg.min_alpha {
                            continue;
                        }
                        let next_t = t * (1.0 - alpha);
                        if next_t < cfg.min_transmittance {
                            last = pos as u32;
                            break;
                        }
                        for ch in 0..3 {
                            c[ch] += s.rgb[ch] * alpha * t;
                        }
                        t = next_t;
                    }
                    for ch in 0..3 {
                        c[ch] += t * cfg.background[ch];
                    }
                    out.push((y * width + x, c, t, last));
                }
            }
            out
        })
        .collect();

    let mut comp = Composite {
        color: vec![0.0; width * height * 3],
        final_t: vec![0.0; width * height],
        last: vec![0; width * height],
    };
    for (p, c, t, last) in per_tile.into_iter().flatten() {
        comp.color[p * 3..p * 3 + 3].copy_from_slice(&c);
        comp.final_t[p] = t;
        comp.last[p] = last;
    }
    comp
}

/// Backward of [`composite_forward`]. Per-splat gradients are reduced in
/// tile order, so the result does not depend on the worker count.
pub(crate) fn composite_backward(
    splats: &[RasterSplat],
    grid: &TileGrid,
    comp: &Composite,
    d_image: &[f64],
    width: usize,
    height: usize,
    cfg: &RenderConfig,
) -> Vec<SplatGrad> {
    let per_tile: Vec<Vec<(u32, SplatGrad)>> = (0..grid.lists.len())
        .into_par_iter()
        .map(|tile| {
            let (x0, y0, x1, y1) = grid.tile_rect(tile, width, height);
            let list = &grid.lists[tile];
            let mut acc = vec![SplatGrad::default(); list.len()];
            let mut touched = vec![false; list.len()];
            let mut contrib: Vec<(usize, f64, f64, f64, bool)> = Vec::new();
            for y in y0..y1 {
                for x in x0..x1 {
                    let p = y * width + x;
                    let g = [d_image[p * 3], d_image[p * 3 + 1], d_image[p * 3 + 2]];
                    if g == [0.0; 3] {
                        continue;
                    }
                    let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
                    // replay the forward pass to recover exact transmittances
                    contrib.clear();
                    let mut t = 1.0;
                    for (pos, &k) in list[..comp.last[p] as usize].iter().enumerate() {
                        let (alpha, falloff, clamped) = splat_alpha(&splats[k as usize], px, py, cfg);
                        if alpha < cfg.min_alpha {
                            continue;
                        }
                        contrib.push((pos, alpha, t, falloff, clamped));
                        t *= 1.0 - alpha;
                    }
                    let mut rest = [t * cfg.background[0], t * cfg.background[1], t * cfg.background[2]];
                    for &(pos, alpha, t_k, falloff, clamped) in contrib.iter().rev() {
                        let s = &splats[list[pos] as usize];
                        let a = &mut acc[pos];
                        touched[pos] = true;
                        let mut d_alpha = 0.0;
                        for ch in 0..3 {
                            a.rgb[ch] += g[ch] * alpha * t_k;
                            d_alpha += g[ch] * (s.rgb[ch] * t_k - rest[ch] / (1.0 - alpha));
                            rest[ch] += s.rgb[ch] * alpha * t_k;
                        }
                        if clamped {
                            continue;
                        }
                        a.alpha_base += d_alpha * falloff;
                        let d_q = d_alpha * (-0.5 * alpha);
                        let dx = px - s.mean[0];
                        let dy = py - s.mean[1];
                        a.mean[0] -= d_q * 2.0 * (s.conic[0] * dx + s.conic[1] * dy);
                        a.mean[1] -= d_q * 2.0 * (s.conic[1] * dx + s.conic[2] * dy);
                        a.conic[0] += d_q * dx * dx;
                        a.conic[1] += d_q * dx * dy;
                        a.conic[2] += d_q * dy * dy;
                    }
                }
            }
            list.iter()
                .zip(acc)
                .zip(touched)
                .filter_map(|((&k, a), hit)| hit.then_some((k, a)))
                .collect()
        })
        .collect();

    let mut out = vec![SplatGrad::default(); splats.len()];
    for (k, g) in per_tile.into_iter().flatten() {
        out[k as usize].add(&g);
    }
    out
}
