//! Per-channel wrapping delta coding and 4D Morton ordering.

use crate::error::{Error, Result};

fn check_stride(len: usize, stride: usize) -> Result<()> {
    if stride == 0 || len % stride != 0 {
        return Err(Error::Dimension(format!("stream of {len} codes is not divisible by stride {stride}")));
    }
    Ok(())
}

/// `out[i] = codes[i] - codes[i - stride]` (wrapping); the first `stride`
/// codes are kept as-is.
pub fn delta_encode(codes: &[u16], stride: usize) -> Result<Vec<u16>> {
    check_stride(codes.len(), stride)?;
    Ok(codes
        .iter()
        .enumerate()
        .map(|(i, &c)| if i < stride { c } else { c.wrapping_sub(codes[i - stride]) })
        .collect())
}

pub fn delta_decode(deltas: &[u16], stride: usize) -> Result<Vec<u16>> {
    check_stride(deltas.len(), stride)?;
    let mut out = Vec::with_capacity(deltas.len());
    for (i, &d) in deltas.iter().enumerate() {
        let v = if i < stride { d } else { d.wrapping_add(out[i - stride]) };
        out.push(v);
    }
    Ok(out)
}

/// Spreads the 16 bits of `v` so that bit `k` lands at bit `4k`.
fn spread4(v: u16) -> u64 {
    let mut x = v as u64;
    x = (x | (x << 24)) & 0x0000_00FF_0000_00FF;
    x = (x | (x << 12)) & 0x000F_000F_000F_000F;
    x = (x | (x << 6)) & 0x0303_0303_0303_0303;
    x = (x | (x << 3)) & 0x1111_1111_1111_1111;
    x
}

/// Interleaves four 16-bit coordinates, axis 0 in the lowest bit.
pub fn morton4(q: [u16; 4]) -> u64 {
    spread4(q[0]) | (spread4(q[1]) << 1) | (spread4(q[2]) << 2) | (spread4(q[3]) << 3)
}

/// Quantizes each axis to 16 bits over the point set's bounding box.
pub fn quantize_points(points: &[[f64; 4]]) -> Vec<[u16; 4]> {
    let mut lo = [f64::INFINITY; 4];
    let mut hi = [f64::NEG_INFINITY; 4];
    for p in points {
        for a in 0..4 {
            lo[a] = lo[a].min(p[a]);
            hi[a] = hi[a].max(p[a]);
        }
    }
    points
        .iter()
        .map(|p| {
            std::array::from_fn(|a| {
                let span = hi[a] - lo[a];
                if span > 0.0 && span.is_finite() {
                    (((p[a] - lo[a]) / span) * 65535.0).round().clamp(0.0, 65535.0) as u16
                } else {
                    0
                }
            })
        })
        .collect()
}

/// Storage order: position `k` holds original index `perm[k]`. Sorted by
/// Morton code, ties by index.
pub fn morton_permutation(points: &[[f64; 4]]) -> Vec<usize> {
    let codes: Vec<u64> = quantize_points(points).into_iter().map(morton4).collect();
    let mut perm: Vec<usize> = (0..points.len()).collect();
    perm.sort_by_key(|&i| (codes[i], i));
    perm
}
