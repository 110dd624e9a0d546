//! Self-describing checkpoint container (`.skcp`).
//!
//! Little-endian layout:
//!
//! ```text
//! magic  "SKCP"
//! u32    version (= 1)
//! u32    config-hash length + hex string
//! u32    model-config length + JSON string
//! u32    joints, then joints^2 f64 adjacency entries
//! u32    tensor count, then per tensor:
//!        u32 name length + utf8 | u8 ndim | ndim x u32 dims | f64 payload
//! ```

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use ndarray::{Array1, Array2};

use crate::error::{Error, Result};
use crate::graph::SkeletonGraph;
use crate::model::{LayerWeights, ModelConfig};

const MAGIC: &[u8; 4] = b"SKCP";
const VERSION: u32 = 1;

struct Counter<R> {
    inner: R,
    offset: u64,
}

impl<R: Read> Counter<R> {
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

    fn read_f64_vec(&mut self, n: usize, what: &str) -> Result<Vec<f64>> {
        let mut buf = vec![0u8; n * 8];
        self.read_exact(&mut buf, what)?;
        Ok(buf
            .chunks_exact(8)
            .map(|b| f64::from_le_bytes(b.try_into().expect("chunk of 8")))
            .collect())
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

/// Writes weights, graph, and the run's config hash.
pub fn save(
    weights: &LayerWeights,
    graph: &SkeletonGraph,
    config_hash: &str,
    path: &Path,
) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)?;
        }
    }
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MAGIC)?;
    write_u32(&mut w, VERSION)?;
    write_string(&mut w, config_hash)?;
    let config_json = serde_json::to_string(&weights.config)
        .map_err(|e| Error::Serialization(e.to_string()))?;
    write_string(&mut w, &config_json)?;
    let v = graph.num_joints();
    write_u32(&mut w, v as u32)?;
    for &a in graph.adjacency().iter() {
        w.write_all(&a.to_le_bytes())?;
    }
    let entries = weights.tensor_entries();
    write_u32(&mut w, entries.len() as u32)?;
    for (name, shape, data) in entries {
        write_string(&mut w, &name)?;
        w.write_all(&[shape.len() as u8])?;
        for d in &shape {
            write_u32(&mut w, *d as u32)?;
        }
        for e in data {
            w.write_all(&e.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

/// A loaded checkpoint.
#[derive(Debug)]
pub struct Checkpoint {
    pub weights: LayerWeights,
    pub graph: SkeletonGraph,
    pub config_hash: String,
}

/// Reads a checkpoint written by [`save`].
pub fn load(path: &Path) -> Result<Checkpoint> {
    let mut r = Counter {
        inner: BufReader::new(File::open(path)?),
        offset: 0,
    };
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
    let config_hash = r.read_string("config hash")?;
    let config_json = r.read_string("model config")?;
    let config: ModelConfig =
        serde_json::from_str(&config_json).map_err(|e| Error::Serialization(e.to_string()))?;

    let v = r.read_u32("joints")? as usize;
    let adj_values = r.read_f64_vec(v * v, "adjacency")?;
    let adjacency = Array2::from_shape_vec((v, v), adj_values)
        .map_err(|e| Error::Serialization(e.to_string()))?;
    let graph = SkeletonGraph::new(adjacency)?;

    let count = r.read_u32("tensor count")? as usize;
    let mut weights = LayerWeights::init(config)?;
    let expected = weights.tensor_names();
    if count != expected.len() {
        return Err(Error::Format {
            offset: r.offset,
            message: format!("{count} tensors stored, model needs {}", expected.len()),
        });
    }
    for expected_name in expected {
        let name = r.read_string("tensor name")?;
        if name != expected_name {
            return Err(Error::Format {
                offset: r.offset,
                message: format!("tensor `{name}` out of order, expected `{expected_name}`"),
            });
        }
        let ndim = r.read_u8("tensor ndim")? as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(r.read_u32("tensor dim")? as usize);
        }
        let n: usize = shape.iter().product();
        let data = r.read_f64_vec(n, &format!("tensor `{name}` payload"))?;
        assign_tensor(&mut weights, &name, &shape, data, r.offset)?;
    }
    Ok(Checkpoint {
        weights,
        graph,
        config_hash,
    })
}

fn assign_tensor(
    weights: &mut LayerWeights,
    name: &str,
    shape: &[usize],
    data: Vec<f64>,
    offset: u64,
) -> Result<()> {
    let bad_shape = |expected: &[usize]| Error::Format {
        offset,
        message: format!("tensor `{name}` has shape {shape:?}, expected {expected:?}"),
    };
    let as2 = |data: Vec<f64>| -> Result<Array2<f64>> {
        if shape.len() != 2 {
            return Err(bad_shape(&[0, 0]));
        }
        Array2::from_shape_vec((shape[0], shape[1]), data)
            .map_err(|e| Error::Serialization(e.to_string()))
    };
    let as1 = |data: Vec<f64>| -> Result<Array1<f64>> {
        if shape.len() != 1 {
            return Err(bad_shape(&[0]));
        }
        Ok(Array1::from_vec(data))
    };
    if let Some(rest) = name.strip_prefix("gcn.") {
        let layer: usize = rest
            .strip_suffix(".w")
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::Format {
                offset,
                message: format!("unrecognized tensor `{name}`"),
            })?;
        let t = as2(data)?;
        if t.dim() != weights.gcn[layer].dim() {
            return Err(bad_shape(&[weights.gcn[layer].nrows(), weights.gcn[layer].ncols()]));
        }
        weights.gcn[layer] = t;
        return Ok(());
    }
    if let Some(rest) = name.strip_prefix("temporal.") {
        let layer: usize = rest
            .strip_suffix(".k")
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::Format {
                offset,
                message: format!("unrecognized tensor `{name}`"),
            })?;
        let t = as2(data)?;
        if t.dim() != weights.temporal[layer].dim() {
            return Err(bad_shape(&[
                weights.temporal[layer].nrows(),
                weights.temporal[layer].ncols(),
            ]));
        }
        weights.temporal[layer] = t;
        return Ok(());
    }
    match name {
        "classifier.w" => weights.classifier_w = as2(data)?,
        "classifier.b" => weights.classifier_b = as1(data)?,
        "proj.w" => weights.proj_w = as2(data)?,
        "proj.b" => weights.proj_b = as1(data)?,
        "aux.w" => weights.aux_w = as2(data)?,
        "aux.b" => weights.aux_b = as1(data)?,
        "align.w" => weights.align_w = as2(data)?,
        "align.b" => weights.align_b = as1(data)?,
        other => {
            return Err(Error::Format {
                offset,
                message: format!("unrecognized tensor `{other}`"),
            })
        }
    }
    Ok(())
}

/// Hex SHA-256 of a canonical config string; stored in every checkpoint so
/// runs can be matched to their exact configuration.
pub fn config_hash(canonical: &str) -> String {
    use sha2::{Digest, Sha256};
    let mut hasher = Sha256::new();
    hasher.update(canonical.as_bytes());
    let out = hasher.finalize();
    let mut s = String::with_capacity(64);
    for b in out {
        s.push_str(&format!("{b:02x}"));
    }
    s
}
