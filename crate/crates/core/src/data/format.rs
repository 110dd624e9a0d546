//! On-disk dataset container (`.skds`).
//!
//! Little-endian throughout:
//!
//! ```text
//! magic  "SKDS"
//! u32    version (= 1)
//! u32    channels, frames, joints, num_classes, count
//! u8     split tag (0 = train, 1 = test)
//! count  class names:    u32 length + utf8 bytes each
//! u32    vocabulary length + joint-vocabulary table text
//! count  records: u32 label | u8 ndim (= 3) | 3 x u32 dims | dims f64 payload
//! ```
//!
//! Readers report version mismatches and truncation as format errors carrying
//! the byte offset of the failure.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use ndarray::Array3;

use crate::error::{Error, Result};
use crate::selector::JointVocabulary;

use super::{DatasetSplit, SkeletonSequence, SplitTag};

const MAGIC: &[u8; 4] = b"SKDS";
const VERSION: u32 = 1;

struct Counter<R> {
    inner: R,
    offset: u64,
}

impl<R: Read> Counter<R> {
    fn new(inner: R) -> Self {
        Self { inner, offset: 0 }
    }

    fn read_exact(&mut self, buf: &mut [u8], what: &str) -> Result<()> {
        let at = self.offset;
        self.inner.read_exact(buf).map_err(|e| Error::Format {
            offset: at,
            message: format!("truncated while reading {what}: {e}"),
        })?;
        self.offset += buf.len() as u64;
        Ok(())
    }

    fn read_u8(&mut self, what: &str) -> Result<u8> {
        let mut b = [0u8; 1];
        self.read_exact(&mut b, what)?;
        Ok(b[0])
    }

    fn read_u32(&mut self, what: &str) -> Result<u32> {
        let mut b = [0u8; 4];
        self.read_exact(&mut b, what)?;
        Ok(u32::from_le_bytes(b))
    }

    fn read_string(&mut self, what: &str) -> Result<String> {
        let at = self.offset;
        let len = self.read_u32(what)? as usize;
        let mut buf = vec![0u8; len];
        self.read_exact(&mut buf, what)?;
        String::from_utf8(buf).map_err(|e| Error::Format {
            offset: at,
            message: format!("{what} is not valid utf-8: {e}"),
        })
    }
}

fn write_u32<W: Write>(w: &mut W, v: u32) -> Result<()> {
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

fn write_string<W: Write>(w: &mut W, s: &str) -> Result<()> {
    write_u32(w, s.len() as u32)?;
    w.write_all(s.as_bytes())?;
    Ok(())
}

/// Writes a split. The tensor payload round-trips bitwise.
pub fn save(split: &DatasetSplit, path: &Path) -> Result<()> {
    split.validate()?;
    let (c, t, v) = split.dims().ok_or_else(|| {
        Error::Argument("cannot save an empty split".into())
    })?;
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)?;
        }
    }
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MAGIC)?;
    write_u32(&mut w, VERSION)?;
    for dim in [c, t, v, split.num_classes(), split.sequences.len()] {
        write_u32(&mut w, dim as u32)?;
    }
    w.write_all(&[match split.tag {
        SplitTag::Train => 0u8,
        SplitTag::Test => 1u8,
    }])?;
    for name in &split.class_names {
        write_string(&mut w, name)?;
    }
    write_string(&mut w, &split.vocab.to_table_string())?;
    for seq in &split.sequences {
        write_u32(&mut w, seq.label as u32)?;
        w.write_all(&[3u8])?;
        let dims = seq.data.dim();
        for d in [dims.0, dims.1, dims.2] {
            write_u32(&mut w, d as u32)?;
        }
        for &e in seq.data.iter() {
            w.write_all(&e.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Reads a split written by [`save`].
pub fn load(path: &Path) -> Result<DatasetSplit> {
    let mut r = Counter::new(BufReader::new(File::open(path)?));
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic, "magic")?;
    if &magic != MAGIC {
        return Err(Error::Format {
            offset: 0,
            message: format!("bad magic {magic:?}, expected {MAGIC:?}"),
        });
    }
    let version = r.read_u32("version")?;
    if version != VERSION {
        return Err(Error::Format {
            offset: 4,
            message: format!("unsupported version {version}, reader supports {VERSION}"),
        });
    }
    let c = r.read_u32("channels")? as usize;
    let t = r.read_u32("frames")? as usize;
    let v = r.read_u32("joints")? as usize;
    let num_classes = r.read_u32("num_classes")? as usize;
    let count = r.read_u32("count")? as usize;
    let tag = match r.read_u8("split tag")? {
        0 => SplitTag::Train,
        1 => SplitTag::Test,
        other => {
            return Err(Error::Format {
                offset: r.offset - 1,
                message: format!("unknown split tag {other}"),
            })
        }
    };
    let mut class_names = Vec::with_capacity(num_classes);
    for i in 0..num_classes {
        class_names.push(r.read_string(&format!("class name {i}"))?);
    }
    let vocab_text = r.read_string("vocabulary")?;
    let vocab = JointVocabulary::from_table_str(&vocab_text)?;

    let mut sequences = Vec::with_capacity(count);
    for i in 0..count {
        let label = r.read_u32(&format!("record {i} label"))? as usize;
        let ndim = r.read_u8(&format!("record {i} ndim"))?;
        if ndim != 3 {
            return Err(Error::Format {
                offset: r.offset - 1,
                message: format!("record {i} has {ndim} dims, expected 3"),
            });
        }
        let at = r.offset;
        let dims = [
            r.read_u32(&format!("record {i} dim 0"))? as usize,
            r.read_u32(&format!("record {i} dim 1"))? as usize,
            r.read_u32(&format!("record {i} dim 2"))? as usize,
        ];
        if dims != [c, t, v] {
            return Err(Error::Format {
                offset: at,
                message: format!("record {i} shape {dims:?} differs from header ({c},{t},{v})"),
            });
        }
        let n = c * t * v;
        let mut payload = vec![0u8; n * 8];
        r.read_exact(&mut payload, &format!("record {i} payload"))?;
        let values: Vec<f64> = payload
            .chunks_exact(8)
            .map(|b| f64::from_le_bytes(b.try_into().expect("chunk of 8")))
            .collect();
        let data = Array3::from_shape_vec((c, t, v), values).map_err(|e| Error::Format {
            offset: at,
            message: e.to_string(),
        })?;
        sequences.push(SkeletonSequence { data, label });
    }
    let split = DatasetSplit {
        sequences,
        tag,
        class_names,
        vocab,
    };
    split.validate()?;
    Ok(split)
}
