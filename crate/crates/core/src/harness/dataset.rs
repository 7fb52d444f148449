//! Dataset ingestion: big-endian IDX files and raw tensor files.

use std::fs;
use std::path::Path;

use crate::error::{contract, io_err, Error, Result};
use crate::nets::{LabeledDataset, Model};
use crate::Tensor;

/// Magic of the raw tensor files this crate writes (adversarial image dumps).
pub const RAW_MAGIC: &[u8; 8] = b"LEBATNS\0";

fn parse_err<T>(offset: usize, msg: impl Into<String>) -> Result<T> {
    Err(Error::Parse {
        offset,
        msg: msg.into(),
    })
}

/// Parsed IDX header: element type code and dimensions.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct IdxHeader {
    pub type_code: u8,
    pub dims: Vec<usize>,
}

impl IdxHeader {
    pub fn data_offset(&self) -> usize {
        4 + 4 * self.dims.len()
    }
}

pub fn parse_idx_header(buf: &[u8]) -> Result<IdxHeader> {
    if buf.len() < 4 {
        return parse_err(0, "truncated IDX magic");
    }
    if buf[0] != 0 || buf[1] != 0 {
        return parse_err(0, "IDX magic must start with two zero bytes");
    }
    let type_code = buf[2];
    if type_code != 0x08 {
        return parse_err(2, format!("unsupported IDX element type {type_code:#04x}"));
    }
    let ndims = buf[3] as usize;
    if ndims == 0 {
        return parse_err(3, "IDX file with zero dimensions");
    }
    let mut dims = Vec::with_capacity(ndims);
    for i in 0..ndims {
        let at = 4 + 4 * i;
        let Some(b) = buf.get(at..at + 4) else {
            return parse_err(at, "truncated IDX dimension");
        };
        dims.push(u32::from_be_bytes(b.try_into().expect("4 bytes")) as usize);
    }
    let header = IdxHeader { type_code, dims };
    let need: usize = header.dims.iter().product();
    let have = buf.len() - header.data_offset();
    if have != need {
        return parse_err(
            header.data_offset(),
            format!("IDX payload holds {have} bytes, header declares {need}"),
        );
    }
    Ok(header)
}

/// Images as `[N, 1, H, W]` scaled to `[0, 1]`.
pub fn parse_idx_images(buf: &[u8]) -> Result<Tensor> {
    let h = parse_idx_header(buf)?;
    let (n, rows, cols) = match h.dims[..] {
        [n, r, c] => (n, r, c),
        _ => return parse_err(3, format!("expected 3 image dimensions, got {}", h.dims.len())),
    };
    let data = buf[h.data_offset()..]
        .iter()
        .map(|&b| f64::from(b) / 255.0)
        .collect();
    Tensor::new(&[n, 1, rows, cols], data)
}

pub fn parse_idx_labels(buf: &[u8]) -> Result<Vec<usize>> {
    let h = parse_idx_header(buf)?;
    if h.dims.len() != 1 {
        return parse_err(3, format!("expected 1 label dimension, got {}", h.dims.len()));
    }
    Ok(buf[h.data_offset()..].iter().map(|&b| b as usize).collect())
}

pub fn encode_raw_tensor(t: &Tensor) -> Vec<u8> {
    let mut out = RAW_MAGIC.to_vec();
    out.push(t.rank() as u8);
    for &d in t.shape() {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    out.extend_from_slice(&t.to_le_bytes());
    out
}

pub fn decode_raw_tensor(buf: &[u8]) -> Result<Tensor> {
    if buf.len() < 9 || &buf[..8] != RAW_MAGIC {
        return parse_err(0, "bad raw tensor magic");
    }
    let rank = buf[8] as usize;
    let mut shape = Vec::with_capacity(rank);
    for i in 0..rank {
        let at = 9 + 4 * i;
        let Some(b) = buf.get(at..at + 4) else {
            return parse_err(at, "truncated raw tensor dimension");
        };
        shape.push(u32::from_le_bytes(b.try_into().expect("4 bytes")) as usize);
    }
    let at = 9 + 4 * rank;
    let n: usize = shape.iter().product();
    if buf.len() - at != n * 8 {
        return parse_err(at, format!("raw tensor payload is {} bytes, expected {}", buf.len() - at, n * 8));
    }
    let data = buf[at..]
        .chunks_exact(8)
        .map(|b| f64::from_le_bytes(b.try_into().expect("8 bytes")))
        .collect();
    Tensor::new(&shape, data).map_err(|e| Error::Parse {
        offset: at,
        msg: e.to_string(),
    })
}

fn read(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(io_err(path))
}

/// Load images (IDX or raw `[N, C, H, W]` tensor) and IDX labels.
///
/// `limit` keeps the first `limit` samples.
pub fn load_dataset(
    images: impl AsRef<Path>,
    labels: impl AsRef<Path>,
    classes: usize,
    limit: Option<usize>,
) -> Result<LabeledDataset> {
    let ibuf = read(images.as_ref())?;
    let x = if ibuf.starts_with(RAW_MAGIC) {
        decode_raw_tensor(&ibuf)?
    } else {
        parse_idx_images(&ibuf)?
    };
    let y = parse_idx_labels(&read(labels.as_ref())?)?;
    if x.shape()[0] != y.len() {
        return contract(format!(
            "{} images but {} labels",
            x.shape()[0],
            y.len()
        ));
    }
    if let Some(i) = y.iter().position(|&l| l >= classes) {
        return contract(format!("label {} at index {i} outside 0..{classes}", y[i]));
    }
    let n = limit.map_or(y.len(), |l| l.min(y.len()));
    let idx: Vec<usize> = (0..n).collect();
    LabeledDataset::new(x, y, classes)?.subset(&idx)
}

/// The standard file names inside a dataset directory.
pub fn split_paths(dir: &Path, split: &str) -> (std::path::PathBuf, std::path::PathBuf) {
    (
        dir.join(format!("{split}-images-idx3-ubyte")),
        dir.join(format!("{split}-labels-idx1-ubyte")),
    )
}

/// Images a victim classifies correctly, with their dataset indices.
#[derive(Clone, Debug, Default)]
pub struct AttackSet {
    pub indices: Vec<usize>,
    pub images: Vec<Tensor>,
    pub labels: Vec<usize>,
}

impl AttackSet {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// Walk `data` from `skip` onward and keep up to `limit` images the victim
/// gets right.
pub fn attack_set(
    victim: &Model,
    data: &LabeledDataset,
    skip: usize,
    limit: usize,
) -> Result<AttackSet> {
    let mut set = AttackSet::default();
    for i in skip..data.len() {
        if set.len() >= limit {
            break;
        }
        let x = data.image(i)?;
        let y = data.labels()[i];
        if victim.logits(&x)?.argmax() == y {
            set.indices.push(i);
            set.images.push(x);
            set.labels.push(y);
        }
    }
    if set.is_empty() {
        log::warn!("attack set is empty: the victim misclassifies every candidate image");
    }
    Ok(set)
}
