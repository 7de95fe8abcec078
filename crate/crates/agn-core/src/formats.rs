//! On-disk formats: the AGNV volume container, AGNC checkpoints, and PGM
//! probability/mask images. All multi-byte values are little-endian; tensor
//! payloads are stored as f32.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use crate::error::{AgnError, Result};
use crate::params::ParamSet;
use crate::phantom::PhantomVolume;
use crate::tensor::Tensor;

pub const VOLUME_MAGIC: &[u8; 4] = b"AGNV";
pub const CHECKPOINT_MAGIC: &[u8; 4] = b"AGNC";
pub const FORMAT_VERSION: u8 = 1;

fn fmt_err(path: &Path, reason: impl Into<String>) -> AgnError {
    AgnError::Format {
        path: path.display().to_string(),
        reason: reason.into(),
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(fmt_err(
                self.path,
                format!(
                    "truncated: needed {n} bytes for {what} at offset {}, file has {}",
                    self.pos,
                    self.buf.len()
                ),
            ));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn f32_vec(&mut self, n: usize, what: &str) -> Result<Vec<f64>> {
        let b = self.take(4 * n, what)?;
        Ok(b.chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
            .collect())
    }

    fn header(&mut self, magic: &[u8; 4]) -> Result<()> {
        let m = self.take(4, "magic")?;
        if m != magic {
            return Err(fmt_err(self.path, format!("bad magic {m:?}, expected {magic:?}")));
        }
        let v = self.take(4, "version")?;
        if v[0] != FORMAT_VERSION {
            return Err(fmt_err(self.path, format!("unsupported version {}", v[0])));
        }
        Ok(())
    }

    fn done(&self) -> Result<()> {
        if self.pos != self.buf.len() {
            return Err(fmt_err(
                self.path,
                format!("{} trailing bytes after payload", self.buf.len() - self.pos),
            ));
        }
        Ok(())
    }
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| AgnError::io(path.display().to_string(), e))
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    std::fs::write(path, bytes).map_err(|e| AgnError::io(path.display().to_string(), e))
}

fn push_f32(out: &mut Vec<u8>, values: &[f64]) {
    for &v in values {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
}

// ---- volumes -------------------------------------------------------------

pub fn save_volume(path: &Path, vol: &PhantomVolume) -> Result<()> {
    vol.validate()?;
    let (n, h, w) = vol.dims();
    let mut out = Vec::with_capacity(20 + 5 * n * h * w);
    out.extend_from_slice(VOLUME_MAGIC);
    out.push(FORMAT_VERSION);
    out.extend_from_slice(&[0, 0, 0]);
    for d in [n, h, w] {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    push_f32(&mut out, vol.hu.data());
    out.extend(vol.mask.data().iter().map(|&v| v as u8));
    write_file(path, &out)
}

pub fn load_volume(path: &Path) -> Result<PhantomVolume> {
    let bytes = read_file(path)?;
    let mut r = Reader {
        buf: &bytes,
        pos: 0,
        path,
    };
    r.header(VOLUME_MAGIC)?;
    let n = r.u32("slice count")? as usize;
    let h = r.u32("height")? as usize;
    let w = r.u32("width")? as usize;
    if n == 0 || h == 0 || w == 0 {
        return Err(fmt_err(path, format!("degenerate volume shape {n}x{h}x{w}")));
    }
    let hu = r.f32_vec(n * h * w, "HU payload")?;
    let mask_bytes = r.take(n * h * w, "mask payload")?;
    if let Some(bad) = mask_bytes.iter().find(|&&b| b > 1) {
        return Err(fmt_err(path, format!("mask byte {bad} is not 0/1")));
    }
    r.done()?;
    let vol = PhantomVolume {
        hu: Tensor::new(vec![n, h, w], hu)?,
        mask: Tensor::new(vec![n, h, w], mask_bytes.iter().map(|&b| b as f64).collect())?,
        seed: 0,
    };
    vol.validate().map_err(|e| fmt_err(path, e.to_string()))?;
    Ok(vol)
}

// ---- checkpoints ----------------------------------------------------------

fn push_entry(out: &mut Vec<u8>, name: &str, dims: &[usize], values: &[f64]) {
    out.extend_from_slice(&(name.len() as u32).to_le_bytes());
    out.extend_from_slice(name.as_bytes());
    out.extend_from_slice(&(dims.len() as u32).to_le_bytes());
    for &d in dims {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    push_f32(out, values);
}

/// Serializes every parameter group (weights, bias, Adam moments, batch-norm
/// running statistics, step counts) plus caller-supplied `meta.*` scalars.
pub fn save_checkpoint(path: &Path, params: &ParamSet, meta: &[(String, f64)]) -> Result<()> {
    let mut body = Vec::new();
    let mut count: u32 = 0;
    let mut emit = |body: &mut Vec<u8>, name: String, dims: &[usize], values: &[f64]| {
        push_entry(body, &name, dims, values);
        count += 1;
    };
    for p in params.iter() {
        emit(&mut body, format!("{}.w", p.name), p.weights.shape(), p.weights.data());
        emit(&mut body, format!("{}.w.m", p.name), &[p.adam_m.len()], &p.adam_m);
        emit(&mut body, format!("{}.w.v", p.name), &[p.adam_v.len()], &p.adam_v);
        if let Some(b) = &p.bias {
            emit(&mut body, format!("{}.b", p.name), b.shape(), b.data());
            emit(&mut body, format!("{}.b.m", p.name), &[p.bias_m.len()], &p.bias_m);
            emit(&mut body, format!("{}.b.v", p.name), &[p.bias_v.len()], &p.bias_v);
        }
        if let Some(rm) = &p.running_mean {
            emit(&mut body, format!("{}.rm", p.name), &[rm.len()], rm);
        }
        if let Some(rv) = &p.running_var {
            emit(&mut body, format!("{}.rv", p.name), &[rv.len()], rv);
        }
        emit(&mut body, format!("{}.step", p.name), &[1], &[p.step_count as f64]);
    }
    for (key, value) in meta {
        emit(&mut body, format!("meta.{key}"), &[1], &[*value]);
    }
    let mut out = Vec::with_capacity(12 + body.len());
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.push(FORMAT_VERSION);
    out.extend_from_slice(&[0, 0, 0]);
    out.extend_from_slice(&count.to_le_bytes());
    out.extend_from_slice(&body);
    write_file(path, &out)
}

fn parse_checkpoint(path: &Path, bytes: &[u8]) -> Result<BTreeMap<String, (Vec<usize>, Vec<f64>)>> {
    let mut r = Reader {
        buf: bytes,
        pos: 0,
        path,
    };
    r.header(CHECKPOINT_MAGIC)?;
    let count = r.u32("entry count")?;
    let mut entries = BTreeMap::new();
    for i in 0..count {
        let name_len = r.u32("name length")? as usize;
        let name = std::str::from_utf8(r.take(name_len, "entry name")?)
            .map_err(|_| fmt_err(path, format!("entry {i} name is not UTF-8")))?
            .to_string();
        let rank = r.u32("rank")? as usize;
        if rank > 8 {
            return Err(fmt_err(path, format!("entry {name:?} has implausible rank {rank}")));
        }
        let mut dims = Vec::with_capacity(rank);
        for _ in 0..rank {
            dims.push(r.u32("dimension")? as usize);
        }
        let len = dims.iter().product::<usize>();
        let values = r.f32_vec(len, &format!("payload of {name:?}"))?;
        if entries.insert(name.clone(), (dims, values)).is_some() {
            return Err(fmt_err(path, format!("duplicate entry {name:?}")));
        }
    }
    r.done()?;
    Ok(entries)
}

/// Loads a checkpoint into an architecture-matched `ParamSet`. Every group in
/// `params` must be covered and every non-`meta.` entry consumed; the first
/// offender is named in the error. Returns the `meta.*` scalars.
pub fn load_checkpoint(path: &Path, params: &mut ParamSet) -> Result<BTreeMap<String, f64>> {
    let bytes = read_file(path)?;
    let mut entries = parse_checkpoint(path, &bytes)?;
    let mut take_vec = |name: String, want_len: usize| -> Result<Vec<f64>> {
        let (dims, values) = entries
            .remove(&name)
            .ok_or_else(|| fmt_err(path, format!("missing entry {name:?}")))?;
        let len = dims.iter().product::<usize>();
        if len != want_len {
            return Err(AgnError::ParamMismatch(format!(
                "{name}: checkpoint has {len} values ({dims:?}), model expects {want_len}"
            )));
        }
        Ok(values)
    };
    for p in params.iter_mut() {
        let n = p.name.clone();
        let w = take_vec(format!("{n}.w"), p.weights.len())?;
        p.weights.data_mut().copy_from_slice(&w);
        p.adam_m = take_vec(format!("{n}.w.m"), p.adam_m.len())?;
        p.adam_v = take_vec(format!("{n}.w.v"), p.adam_v.len())?;
        if let Some(b) = p.bias.as_mut() {
            let blen = b.len();
            b.data_mut().copy_from_slice(&take_vec(format!("{n}.b"), blen)?);
        }
        if p.bias.is_some() {
            p.bias_m = take_vec(format!("{n}.b.m"), p.bias_m.len())?;
            p.bias_v = take_vec(format!("{n}.b.v"), p.bias_v.len())?;
        }
        if let Some(rm) = p.running_mean.as_mut() {
            *rm = take_vec(format!("{n}.rm"), rm.len())?;
        }
        if let Some(rv) = p.running_var.as_mut() {
            *rv = take_vec(format!("{n}.rv"), rv.len())?;
        }
        p.step_count = take_vec(format!("{n}.step"), 1)?[0] as u64;
    }
    let mut meta = BTreeMap::new();
    for (name, (_, values)) in entries {
        match name.strip_prefix("meta.") {
            Some(key) if values.len() == 1 => {
                meta.insert(key.to_string(), values[0]);
            }
            _ => {
                return Err(AgnError::ParamMismatch(format!(
                    "checkpoint entry {name:?} does not match any model parameter"
                )))
            }
        }
    }
    Ok(meta)
}

/// Reads only the `meta.*` scalars of a checkpoint (enough to rebuild the
/// model before a full [`load_checkpoint`]).
pub fn peek_meta(path: &Path) -> Result<BTreeMap<String, f64>> {
    let bytes = read_file(path)?;
    let entries = parse_checkpoint(path, &bytes)?;
    Ok(entries
        .into_iter()
        .filter_map(|(name, (_, values))| {
            let key = name.strip_prefix("meta.")?;
            (values.len() == 1).then(|| (key.to_string(), values[0]))
        })
        .collect())
}

// ---- PGM images -----------------------------------------------------------

/// Writes an [h, w] map with values in [0, 1] as a binary PGM (maxval 255,
/// round half-up).
pub fn write_pgm(path: &Path, image: &Tensor) -> Result<()> {
    let (h, w) = image.dims2()?;
    let mut out = Vec::with_capacity(32 + h * w);
    write!(out, "P5\n{w} {h}\n255\n").expect("in-memory write");
    out.extend(
        image
            .data()
            .iter()
            .map(|&v| (v * 255.0 + 0.5).floor().clamp(0.0, 255.0) as u8),
    );
    write_file(path, &out)
}
