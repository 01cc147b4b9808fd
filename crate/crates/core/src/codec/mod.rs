//! Compressed model archive: binary16 attributes in Morton order, per-channel
//! delta coding, raw DEFLATE and a CRC32 trailer.
//!
//! ```text
//! "MEG4" | version u16 | count u64 | DEFLATE(payload) | crc32(payload) u32
//! payload = permutation u32×N
//!         | mu4 | q_l | q_r | s4 | c_dc | o_logit   (binary16 deltas)
//!         | color network | deformation network
//! ```
//!
//! All integers are little-endian. A network section starts with a u32
//! layer count (0 when the network is absent); each layer is `in u32,
//! out u32, activation u8, weights, biases` with binary16 values. The
//! deformation section adds the three frequency counts (u8) after its
//! count of sub-networks, followed by the three encoders and the fusion
//! network.

pub mod delta;
pub mod fp16;

use std::io::{Read, Write};
use std::path::Path;

use flate2::read::DeflateDecoder;
use flate2::write::DeflateEncoder;
use flate2::Compression;

use crate::color::ColorPredictor;
use crate::deform::{DeformConfig, DeformPredictor};
use crate::error::{Error, Result};
use crate::gauss::GaussianCloud;
use crate::mlp::{Activation, Dense, Mlp};
use crate::render::Predictors;

pub use delta::{delta_decode, delta_encode, morton4, morton_permutation};
pub use fp16::{from_fp16, round16, to_fp16, FP16_MAX};

pub const MAGIC: [u8; 4] = *b"MEG4";
pub const VERSION: u16 = 1;
/// Magic + version + count.
pub const HEADER_BYTES: usize = 4 + 2 + 8;
pub const CRC_BYTES: usize = 4;

/// Attribute streams in storage order with their channel counts.
pub const ATTRIBUTES: [(&str, usize); 6] =
    [("mu4", 4), ("q_l", 4), ("q_r", 4), ("s4", 4), ("c_dc", 3), ("o_logit", 1)];

/// Channels per Gaussian across all attribute streams.
pub const CHANNELS_PER_GAUSSIAN: usize = 20;

fn attribute_rows(cloud: &GaussianCloud, attr: usize, i: usize) -> Vec<f64> {
    match attr {
        0 => cloud.mu4[i].to_vec(),
        1 => cloud.q_l[i].to_vec(),
        2 => cloud.q_r[i].to_vec(),
        3 => cloud.s4[i].to_vec(),
        4 => cloud.c_dc[i].to_vec(),
        _ => vec![cloud.o_logit[i]],
    }
}

struct Writer {
    buf: Vec<u8>,
    saturated: usize,
}

impl Writer {
    fn u8(&mut self, v: u8) {
        self.buf.push(v);
    }

    fn u32(&mut self, v: u32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    fn u16s(&mut self, codes: &[u16]) {
        for c in codes {
            self.buf.extend_from_slice(&c.to_le_bytes());
        }
    }

    fn f16s(&mut self, values: &[f64]) -> Result<()> {
        let mut codes = Vec::with_capacity(values.len());
        fp16::encode_slice(values, &mut codes, &mut self.saturated)?;
        self.u16s(&codes);
        Ok(())
    }

    fn len_u32(&mut self, n: usize, what: &str) -> Result<()> {
        let v = u32::try_from(n).map_err(|_| Error::InvalidParameter(format!("{what} {n} exceeds u32")))?;
        self.u32(v);
        Ok(())
    }

    fn mlp(&mut self, mlp: &Mlp) -> Result<()> {
        self.len_u32(mlp.layers.len(), "layer count")?;
        for l in &mlp.layers {
            self.len_u32(l.in_dim, "layer width")?;
            self.len_u32(l.out_dim, "layer width")?;
            self.u8(match l.activation {
                Activation::None => 0,
                Activation::Relu => 1,
            });
            self.f16s(&l.weight)?;
            self.f16s(&l.bias)?;
        }
        Ok(())
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len()).ok_or_else(|| {
            Error::Corrupt(format!("payload truncated at byte {} (needed {n} more)", self.pos))
        })?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u16s(&mut self, n: usize) -> Result<Vec<u16>> {
        let bytes = self.take(n.checked_mul(2).ok_or_else(|| Error::Corrupt("length overflow".into()))?)?;
        Ok(bytes.chunks_exact(2).map(|c| u16::from_le_bytes([c[0], c[1]])).collect())
    }

    fn f16s(&mut self, n: usize) -> Result<Vec<f64>> {
        Ok(self.u16s(n)?.into_iter().map(from_fp16).collect())
    }

    fn mlp(&mut self) -> Result<Option<Mlp>> {
        let n = self.u32()? as usize;
        if n == 0 {
            return Ok(None);
        }
        let mut layers = Vec::with_capacity(n.min(64));
        for _ in 0..n {
            let in_dim = self.u32()? as usize;
            let out_dim = self.u32()? as usize;
            let activation = match self.u8()? {
                0 => Activation::None,
                1 => Activation::Relu,
                a => return Err(Error::Corrupt(format!("unknown activation code {a}"))),
            };
            let count = in_dim
                .checked_mul(out_dim)
                .ok_or_else(|| Error::Corrupt("layer size overflow".into()))?;
            let weight = self.f16s(count)?;
            let bias = self.f16s(out_dim)?;
            layers.push(Dense { in_dim, out_dim, weight, bias, activation });
        }
        Mlp::from_layers(layers).map(Some).map_err(|e| Error::Corrupt(e.to_string()))
    }
}

/// Byte ranges of the uncompressed payload.
#[derive(Debug, Default)]
struct Layout {
    permutation: usize,
    attributes: [usize; 6],
    color: usize,
    deform: usize,
}

fn encode_payload(cloud: &GaussianCloud, preds: &Predictors) -> Result<(Vec<u8>, Layout, usize)> {
    cloud.validate()?;
    preds.validate()?;
    let n = cloud.len();
    let mut w = Writer { buf: Vec::new(), saturated: 0 };
    let mut layout = Layout::default();

    let perm = morton_permutation(&cloud.mu4);
    for &i in &perm {
        w.len_u32(i, "gaussian index")?;
    }
    layout.permutation = w.buf.len();

    for (a, &(_, stride)) in ATTRIBUTES.iter().enumerate() {
        let start = w.buf.len();
        let mut codes = Vec::with_capacity(n * stride);
        for &i in &perm {
            fp16::encode_slice(&attribute_rows(cloud, a, i), &mut codes, &mut w.saturated)?;
        }
        w.u16s(&delta_encode(&codes, stride)?);
        layout.attributes[a] = w.buf.len() - start;
    }

    let start = w.buf.len();
    match &preds.color {
        Some(cp) => w.mlp(&cp.phi)?,
        None => w.u32(0),
    }
    layout.color = w.buf.len() - start;

    let start = w.buf.len();
    match &preds.deform {
        Some(dp) => {
            w.len_u32(dp.encoders.len() + 1, "network count")?;
            for f in [dp.config.freq_pos, dp.config.freq_dir, dp.config.freq_time] {
                w.u8(u8::try_from(f).map_err(|_| Error::InvalidParameter(format!("frequency count {f} exceeds u8")))?);
            }
            for e in &dp.encoders {
                w.mlp(e)?;
            }
            w.mlp(&dp.fusion)?;
        }
        None => w.u32(0),
    }
    layout.deform = w.buf.len() - start;
    Ok((w.buf, layout, w.saturated))
}

fn decode_payload(payload: &[u8], n: usize) -> Result<(GaussianCloud, Predictors, Layout)> {
    let mut r = Reader { buf: payload, pos: 0 };
    let mut layout = Layout::default();
    let mut perm = Vec::with_capacity(n.min(payload.len() / 4));
    let mut seen = vec![false; n.min(payload.len() / 4 + 1)];
    for _ in 0..n {
        let i = r.u32()? as usize;
        if i >= n || seen.get(i).copied().unwrap_or(true) {
            return Err(Error::Corrupt(format!("permutation entry {i} is out of range or repeated")));
        }
        seen[i] = true;
        perm.push(i);
    }
    layout.permutation = r.pos;

    let mut cloud = GaussianCloud::with_capacity(n);
    cloud.mu4.resize(n, [0.0; 4]);
    cloud.q_l.resize(n, [0.0; 4]);
    cloud.q_r.resize(n, [0.0; 4]);
    cloud.s4.resize(n, [0.0; 4]);
    cloud.c_dc.resize(n, [0.0; 3]);
    cloud.o_logit.resize(n, 0.0);
    for (a, &(_, stride)) in ATTRIBUTES.iter().enumerate() {
        let start = r.pos;
        let codes = delta_decode(&r.u16s(n * stride)?, stride)?;
        for (k, &i) in perm.iter().enumerate() {
            let v: Vec<f64> = codes[k * stride..(k + 1) * stride].iter().map(|&c| from_fp16(c)).collect();
            match a {
                0 => cloud.mu4[i].copy_from_slice(&v),
                1 => cloud.q_l[i].copy_from_slice(&v),
                2 => cloud.q_r[i].copy_from_slice(&v),
                3 => cloud.s4[i].copy_from_slice(&v),
                4 => cloud.c_dc[i].copy_from_slice(&v),
                _ => cloud.o_logit[i] = v[0],
            }
        }
        layout.attributes[a] = r.pos - start;
    }

    let start = r.pos;
    let color = r.mlp()?.map(|phi| ColorPredictor { phi });
    layout.color = r.pos - start;

    let start = r.pos;
    let nets = r.u32()? as usize;
    let deform = if nets == 0 {
        None
    } else {
        if nets != 4 {
            return Err(Error::Corrupt(format!("deformation section lists {nets} networks, expected 4")));
        }
        let freqs = [r.u8()? as usize, r.u8()? as usize, r.u8()? as usize];
        let mut mlps = Vec::with_capacity(4);
        for _ in 0..4 {
            mlps.push(r.mlp()?.ok_or_else(|| Error::Corrupt("empty deformation sub-network".into()))?);
        }
        let fusion = mlps.pop().expect("four networks");
        let config = DeformConfig {
            freq_pos: freqs[0],
            freq_dir: freqs[1],
            freq_time: freqs[2],
            encoder_width: mlps[0].out_dim(),
            hidden: fusion.layers[0].out_dim,
        };
        Some(DeformPredictor { config, encoders: mlps, fusion })
    };
    layout.deform = r.pos - start;
    if r.pos != payload.len() {
        return Err(Error::Corrupt(format!("{} trailing payload bytes", payload.len() - r.pos)));
    }
    let preds = Predictors { color, deform };
    preds.validate().map_err(|e| Error::Corrupt(e.to_string()))?;
    cloud.validate().map_err(|e| Error::Corrupt(e.to_string()))?;
    Ok((cloud, preds, layout))
}

/// Serializes a model. Values outside the binary16 range are saturated and
/// reported through the log.
pub fn encode(cloud: &GaussianCloud, preds: &Predictors) -> Result<Vec<u8>> {
    let (payload, _, saturated) = encode_payload(cloud, preds)?;
    if saturated > 0 {
        log::warn!("{saturated} values exceeded the binary16 range and were saturated to ±{FP16_MAX}");
    }
    let mut out = Vec::with_capacity(HEADER_BYTES + payload.len() / 2);
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(cloud.len() as u64).to_le_bytes());
    let mut enc = DeflateEncoder::new(out, Compression::best());
    enc.write_all(&payload)?;
    let mut out = enc.finish()?;
    out.extend_from_slice(&crc32fast::hash(&payload).to_le_bytes());
    Ok(out)
}

struct Parsed {
    count: usize,
    compressed: usize,
    payload: Vec<u8>,
}

fn parse(bytes: &[u8]) -> Result<Parsed> {
    if bytes.len() < 4 {
        return Err(Error::Corrupt(format!("archive is only {} bytes", bytes.len())));
    }
    let magic: [u8; 4] = bytes[0..4].try_into().expect("4 bytes");
    if magic != MAGIC {
        return Err(Error::BadMagic(magic));
    }
    if bytes.len() < HEADER_BYTES + CRC_BYTES {
        return Err(Error::Corrupt(format!("archive is only {} bytes", bytes.len())));
    }
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    if version != VERSION {
        return Err(Error::UnsupportedVersion(version));
    }
    let count = u64::from_le_bytes(bytes[6..14].try_into().expect("8 bytes"));
    let count = usize::try_from(count).map_err(|_| Error::Corrupt(format!("count {count} too large")))?;
    let body = &bytes[HEADER_BYTES..bytes.len() - CRC_BYTES];
    let stored = u32::from_le_bytes(bytes[bytes.len() - CRC_BYTES..].try_into().expect("4 bytes"));
    let mut payload = Vec::new();
    let mut dec = DeflateDecoder::new(body);
    dec.read_to_end(&mut payload)
        .map_err(|e| Error::Corrupt(format!("DEFLATE stream: {e}")))?;
    let consumed = dec.total_in() as usize;
    if consumed != body.len() {
        return Err(Error::Corrupt(format!("{} bytes after the DEFLATE stream", body.len() - consumed)));
    }
    let computed = crc32fast::hash(&payload);
    if computed != stored {
        return Err(Error::CrcMismatch { stored, computed });
    }
    Ok(Parsed { count, compressed: body.len(), payload })
}

pub fn decode(bytes: &[u8]) -> Result<(GaussianCloud, Predictors)> {
    let p = parse(bytes)?;
    let (cloud, preds, _) = decode_payload(&p.payload, p.count)?;
    Ok((cloud, preds))
}

pub fn save_model(cloud: &GaussianCloud, preds: &Predictors, path: impl AsRef<Path>) -> Result<Vec<u8>> {
    let bytes = encode(cloud, preds)?;
    std::fs::write(path, &bytes)?;
    Ok(bytes)
}

pub fn load_model(path: impl AsRef<Path>) -> Result<(GaussianCloud, Predictors)> {
    decode(&std::fs::read(path)?)
}

/// True when `bytes` starts with the archive magic.
pub fn is_archive(bytes: &[u8]) -> bool {
    bytes.len() >= 4 && bytes[0..4] == MAGIC
}

/// Rounds every stored value to its binary16 neighbour, which is exactly
/// what [`decode`]`(`[`encode`]`(..))` returns.
pub fn round_model(cloud: &GaussianCloud, preds: &Predictors) -> Result<(GaussianCloud, Predictors)> {
    let r = |v: &mut f64| -> Result<()> {
        *v = round16(*v)?;
        Ok(())
    };
    let mut c = cloud.clone();
    for row in c.mu4.iter_mut().chain(c.q_l.iter_mut()).chain(c.q_r.iter_mut()).chain(c.s4.iter_mut()) {
        row.iter_mut().try_for_each(r)?;
    }
    for row in c.c_dc.iter_mut() {
        row.iter_mut().try_for_each(r)?;
    }
    c.o_logit.iter_mut().try_for_each(r)?;
    let mut p = preds.clone();
    if let Some(cp) = p.color.as_mut() {
        cp.phi.params_mut().try_for_each(r)?;
    }
    if let Some(dp) = p.deform.as_mut() {
        dp.params_mut().try_for_each(r)?;
    }
    Ok((c, p))
}

#[derive(Debug, Clone, PartialEq, serde::Serialize)]
pub struct SectionSize {
    pub name: String,
    pub bytes: usize,
}

/// Byte accounting of an archive. `sections` partition the uncompressed
/// payload.
#[derive(Debug, Clone, PartialEq, serde::Serialize)]
pub struct SizeReport {
    pub count: usize,
    pub header_bytes: usize,
    pub sections: Vec<SectionSize>,
    pub payload_bytes: usize,
    pub compressed_bytes: usize,
    pub crc_bytes: usize,
    pub total_bytes: usize,
    /// Attribute bytes per Gaussian before DEFLATE (binary16).
    pub attribute_bytes_per_gaussian: usize,
    /// FP32 4D spherical-harmonics baseline per Gaussian.
    pub baseline_bytes_per_gaussian: usize,
    pub attribute_ratio: f64,
    /// `1 - compressed / payload`.
    pub deflate_saving: f64,
}

pub fn size_report(bytes: &[u8]) -> Result<SizeReport> {
    let p = parse(bytes)?;
    let (_, _, layout) = decode_payload(&p.payload, p.count)?;
    let mut sections = vec![SectionSize { name: "permutation".into(), bytes: layout.permutation }];
    for (&(name, _), &b) in ATTRIBUTES.iter().zip(&layout.attributes) {
        sections.push(SectionSize { name: name.into(), bytes: b });
    }
    sections.push(SectionSize { name: "color_network".into(), bytes: layout.color });
    sections.push(SectionSize { name: "deform_network".into(), bytes: layout.deform });
    let attribute_bytes_per_gaussian = CHANNELS_PER_GAUSSIAN * 2;
    let baseline_bytes_per_gaussian =
        crate::color::param_count_per_gaussian(crate::color::ColorLayout::REFERENCE_4DGS) * 4;
    Ok(SizeReport {
        count: p.count,
        header_bytes: HEADER_BYTES,
        sections,
        payload_bytes: p.payload.len(),
        compressed_bytes: p.compressed,
        crc_bytes: CRC_BYTES,
        total_bytes: bytes.len(),
        attribute_bytes_per_gaussian,
        baseline_bytes_per_gaussian,
        attribute_ratio: baseline_bytes_per_gaussian as f64 / attribute_bytes_per_gaussian as f64,
        deflate_saving: if p.payload.is_empty() { 0.0 } else { 1.0 - p.compressed as f64 / p.payload.len() as f64 },
    })
}
