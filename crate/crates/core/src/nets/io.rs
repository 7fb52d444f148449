//! Self-describing little-endian weight files.
//!
//! ```text
//! magic     8 bytes  "LEBAWGT\0"
//! version   u8       1
//! spec      arch u8 (0 = mlp, 1 = tinycnn), layer count u32, widths u32...,
//!           kernel u32 (0 for mlp), input C/H/W u32 x3, classes u32, seed u64
//! params    count u32, then per parameter:
//!           name length u16, UTF-8 name, rank u8, dims u32..., values f64...
//! ```

use std::fs;
use std::path::Path;

use crate::error::{io_err, Error, Result};
use crate::Tensor;

use super::model::{Model, Param};
use super::spec::{Arch, ModelSpec};

pub const MAGIC: &[u8; 8] = b"LEBAWGT\0";
pub const VERSION: u8 = 1;

fn put_u32(out: &mut Vec<u8>, v: usize) {
    out.extend_from_slice(&(v as u32).to_le_bytes());
}

pub fn encode_weights(model: &Model) -> Vec<u8> {
    let spec = model.spec();
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.push(VERSION);
    let (tag, layers, kernel) = match &spec.arch {
        Arch::Mlp { hidden } => (0u8, hidden, 0),
        Arch::TinyCnn { channels, kernel } => (1u8, channels, *kernel),
    };
    out.push(tag);
    put_u32(&mut out, layers.len());
    for &l in layers {
        put_u32(&mut out, l);
    }
    put_u32(&mut out, kernel);
    let (c, h, w) = spec.input_shape;
    for d in [c, h, w, spec.classes] {
        put_u32(&mut out, d);
    }
    out.extend_from_slice(&spec.seed.to_le_bytes());
    put_u32(&mut out, model.params().len());
    for p in model.params() {
        out.extend_from_slice(&(p.name.len() as u16).to_le_bytes());
        out.extend_from_slice(p.name.as_bytes());
        out.push(p.value.rank() as u8);
        for &d in p.value.shape() {
            put_u32(&mut out, d);
        }
        out.extend_from_slice(&p.value.to_le_bytes());
    }
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn fail<T>(&self, msg: impl Into<String>) -> Result<T> {
        Err(Error::Parse {
            offset: self.pos,
            msg: msg.into(),
        })
    }

    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return self.fail(format!("truncated {what}"));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        let b = self.take(2, what)?;
        Ok(u16::from_le_bytes([b[0], b[1]]))
    }

    fn u32(&mut self, what: &str) -> Result<usize> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes(b.try_into().expect("4 bytes")) as usize)
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        let b = self.take(8, what)?;
        Ok(u64::from_le_bytes(b.try_into().expect("8 bytes")))
    }

    /// A count that must be satisfiable by the bytes left, to avoid huge
    /// allocations on corrupt input.
    fn count(&mut self, what: &str, elem: usize) -> Result<usize> {
        let at = self.pos;
        let n = self.u32(what)?;
        if n.saturating_mul(elem) > self.buf.len() - self.pos {
            self.pos = at;
            return self.fail(format!("{what} {n} exceeds remaining file size"));
        }
        Ok(n)
    }
}

/// Parse a weight file into its spec and parameters.
pub fn decode_weights(buf: &[u8]) -> Result<(ModelSpec, Vec<Param>)> {
    let mut r = Reader { buf, pos: 0 };
    if r.take(MAGIC.len(), "magic")? != MAGIC {
        r.pos = 0;
        return r.fail("bad magic");
    }
    let version = r.u8("version")?;
    if version != VERSION {
        r.pos -= 1;
        return r.fail(format!("unsupported version {version}"));
    }
    let tag = r.u8("arch tag")?;
    let n_layers = r.count("layer count", 4)?;
    let layers = (0..n_layers)
        .map(|_| r.u32("layer width"))
        .collect::<Result<Vec<_>>>()?;
    let kernel = r.u32("kernel size")?;
    let arch = match tag {
        0 => Arch::Mlp { hidden: layers },
        1 => Arch::TinyCnn {
            channels: layers,
            kernel,
        },
        t => {
            r.pos = MAGIC.len() + 1;
            return r.fail(format!("unknown arch tag {t}"));
        }
    };
    let (c, h, w) = (r.u32("channels")?, r.u32("height")?, r.u32("width")?);
    let classes = r.u32("classes")?;
    let seed = r.u64("seed")?;
    let spec = ModelSpec {
        arch,
        input_shape: (c, h, w),
        classes,
        seed,
    };

    let n_params = r.count("parameter count", 3)?;
    let mut params = Vec::with_capacity(n_params);
    for _ in 0..n_params {
        let len = r.u16("name length")? as usize;
        let at = r.pos;
        let name = match std::str::from_utf8(r.take(len, "name")?) {
            Ok(s) => s.to_owned(),
            Err(_) => {
                r.pos = at;
                return r.fail("parameter name is not UTF-8");
            }
        };
        let rank = r.u8("rank")? as usize;
        let shape = (0..rank)
            .map(|_| r.u32("dimension"))
            .collect::<Result<Vec<_>>>()?;
        let n = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
        let at = r.pos;
        let Some(n) = n.filter(|&n| n > 0 && n.saturating_mul(8) <= buf.len() - r.pos) else {
            return r.fail(format!("bad shape {shape:?} for `{name}`"));
        };
        let data = r
            .take(n * 8, "values")?
            .chunks_exact(8)
            .map(|b| f64::from_le_bytes(b.try_into().expect("8 bytes")))
            .collect();
        let value = Tensor::new(&shape, data).map_err(|e| Error::Parse {
            offset: at,
            msg: e.to_string(),
        })?;
        params.push(Param { name, value });
    }
    if r.pos != buf.len() {
        return r.fail("trailing bytes after last parameter");
    }
    Ok((spec, params))
}

pub fn save_weights(model: &Model, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_weights(model)).map_err(io_err(path))
}

/// Load weights, requiring the file to describe exactly `spec`.
pub fn load_weights(spec: &ModelSpec, path: impl AsRef<Path>) -> Result<Model> {
    let (found, params) = read_weights(path)?;
    if found != *spec {
        return Err(Error::Incompatible(format!(
            "file describes {} {:?} x{} seed {}, expected {} {:?} x{} seed {}",
            found.arch,
            found.input_shape,
            found.classes,
            found.seed,
            spec.arch,
            spec.input_shape,
            spec.classes,
            spec.seed
        )));
    }
    Model::from_params(found, params)
}

/// Load a weight file using the spec stored in it.
pub fn load_model(path: impl AsRef<Path>) -> Result<Model> {
    let (spec, params) = read_weights(path)?;
    Model::from_params(spec, params)
}

fn read_weights(path: impl AsRef<Path>) -> Result<(ModelSpec, Vec<Param>)> {
    let path = path.as_ref();
    let buf = fs::read(path).map_err(io_err(path))?;
    decode_weights(&buf)
}
