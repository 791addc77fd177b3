//! Model container format (all integers little-endian):
//!
//! ```text
//! magic        8 bytes   "CLPRUNE\0"
//! version      u32       FORMAT_VERSION
//! header_len   u64
//! header       JSON      {"input_shape", "layers", "clusters"}
//! entries      u32
//! entry*       name_len u32, name utf-8, weights tensor, bias tensor
//! tensor       rank u32, dims u64 * rank, values f64 * prod(dims)
//! ```
//!
//! Entries are written in name order and the file must end after the last
//! entry. A pretty-printed copy of the header plus parameter shapes is
//! written next to the container as `<file>.json`.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{GraphError, LayerSpec, ModelGraph, Params, Result};
use crate::cluster::ClusterSpec;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"CLPRUNE\0";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Header {
    input_shape: Vec<usize>,
    layers: Vec<LayerSpec>,
    #[serde(default)]
    clusters: Option<ClusterSpec>,
}

#[derive(Serialize)]
struct Sidecar<'a> {
    format_version: u32,
    input_shape: &'a [usize],
    layers: &'a [LayerSpec],
    clusters: Option<&'a ClusterSpec>,
    parameter_shapes: BTreeMap<&'a str, (Vec<usize>, Vec<usize>)>,
}

pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

fn put_tensor(out: &mut Vec<u8>, t: &Tensor) {
    out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
    for &d in t.shape() {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    for v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

pub(crate) fn encode(model: &ModelGraph, clusters: Option<&ClusterSpec>) -> Result<Vec<u8>> {
    let header = serde_json::to_vec(&Header {
        input_shape: model.input_shape().to_vec(),
        layers: model.layers().to_vec(),
        clusters: clusters.cloned(),
    })?;
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend_from_slice(&header);
    out.extend_from_slice(&(model.params().len() as u32).to_le_bytes());
    for (name, p) in model.params() {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        put_tensor(&mut out, &p.weights);
        put_tensor(&mut out, &p.bias);
    }
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn fail<T>(&self, detail: impl Into<String>) -> Result<T> {
        Err(GraphError::Parse {
            offset: self.pos as u64,
            detail: detail.into(),
        })
    }

    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        match self.pos.checked_add(n) {
            Some(end) if end <= self.bytes.len() => {
                let s = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            _ => self.fail(format!(
                "truncated {what}: need {n} bytes, {} left",
                self.bytes.len() - self.pos
            )),
        }
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    fn len(&mut self, what: &str) -> Result<usize> {
        let at = self.pos;
        let v = self.u64(what)?;
        usize::try_from(v).ok().filter(|&n| n <= self.bytes.len()).ok_or(GraphError::Parse {
            offset: at as u64,
            detail: format!("{what} {v} exceeds file size"),
        })
    }

    fn tensor(&mut self) -> Result<Tensor> {
        let rank = self.u32("tensor rank")? as usize;
        if rank > 8 {
            return self.fail(format!("implausible tensor rank {rank}"));
        }
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(self.len("tensor extent")?);
        }
        let count = shape
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .filter(|&c| c.checked_mul(8).is_some_and(|b| b <= self.bytes.len()));
        let Some(count) = count else {
            return self.fail(format!("tensor {shape:?} larger than file"));
        };
        let raw = self.take(count * 8, "tensor values")?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Ok(Tensor::new(shape, data)?)
    }
}

pub(crate) fn decode(bytes: &[u8]) -> Result<(ModelGraph, Option<ClusterSpec>)> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(8, "magic")? != MAGIC {
        r.pos = 0;
        return r.fail("bad magic bytes");
    }
    let version = r.u32("version")?;
    if version != FORMAT_VERSION {
        return Err(GraphError::Version {
            found: version,
            expected: FORMAT_VERSION,
        });
    }
    let header_len = r.len("header length")?;
    let header_at = r.pos;
    let header_bytes = r.take(header_len, "header")?;
    let header: Header = serde_json::from_slice(header_bytes).map_err(|e| GraphError::Parse {
        offset: header_at as u64,
        detail: format!("header json: {e}"),
    })?;
    let entries = r.u32("entry count")?;
    let mut params = BTreeMap::new();
    for _ in 0..entries {
        let name_len = r.u32("name length")? as usize;
        let at = r.pos;
        let name = std::str::from_utf8(r.take(name_len, "name")?)
            .map_err(|_| GraphError::Parse {
                offset: at as u64,
                detail: "layer name is not utf-8".into(),
            })?
            .to_string();
        let weights = r.tensor()?;
        let bias = r.tensor()?;
        params.insert(name, Params { weights, bias });
    }
    if r.pos != bytes.len() {
        return r.fail(format!("{} trailing bytes", bytes.len() - r.pos));
    }
    let model = ModelGraph::new(header.input_shape, header.layers, params)?;
    Ok((model, header.clusters))
}

pub fn save_checkpoint(model: &ModelGraph, clusters: Option<&ClusterSpec>, path: &Path) -> Result<()> {
    fs::write(path, encode(model, clusters)?)?;
    let sidecar = Sidecar {
        format_version: FORMAT_VERSION,
        input_shape: model.input_shape(),
        layers: model.layers(),
        clusters,
        parameter_shapes: model
            .params()
            .iter()
            .map(|(n, p)| (n.as_str(), (p.weights.shape().to_vec(), p.bias.shape().to_vec())))
            .collect(),
    };
    let mut json = serde_json::to_vec_pretty(&sidecar)?;
    json.push(b'\n');
    fs::write(sidecar_path(path), json)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<(ModelGraph, Option<ClusterSpec>)> {
    decode(&fs::read(path)?)
}

pub fn save_model(model: &ModelGraph, path: &Path) -> Result<()> {
    save_checkpoint(model, None, path)
}

pub fn load_model(path: &Path) -> Result<ModelGraph> {
    Ok(load_checkpoint(path)?.0)
}
