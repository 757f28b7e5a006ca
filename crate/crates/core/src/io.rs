//! Persistence: tensor records and artifact files.
//!
//! Tensor record layout (little-endian):
//!   magic "CMLT" | version u32 | rank u32 | extents u64[rank] | dtype u32 | payload
//!
//! An artifact file bundles a JSON manifest with named tensor records:
//!   magic "CMLA" | version u32 | manifest_len u64 | manifest JSON |
//!   count u32 | { name_len u32 | name utf8 | tensor record }*
//!
//! Readers track byte offsets so integrity failures name the position of
//! the first violation.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const TENSOR_MAGIC: &[u8; 4] = b"CMLT";
pub const ARTIFACT_MAGIC: &[u8; 4] = b"CMLA";
pub const FORMAT_VERSION: u32 = 1;
const DTYPE_F32: u32 = 0;

struct CountingReader<R> {
    inner: R,
    offset: u64,
}

impl<R: Read> CountingReader<R> {
    fn new(inner: R) -> Self {
        CountingReader { inner, offset: 0 }
    }

    fn read_exact_at(&mut self, buf: &mut [u8], what: &str) -> Result<()> {
        let at = self.offset;
        self.inner
            .read_exact(buf)
            .map_err(|e| Error::artifact_at(format!("truncated while reading {what}: {e}"), at))?;
        self.offset += buf.len() as u64;
        Ok(())
    }

    fn read_u32(&mut self, what: &str) -> Result<u32> {
        let mut b = [0u8; 4];
        self.read_exact_at(&mut b, what)?;
        Ok(u32::from_le_bytes(b))
    }

    fn read_u64(&mut self, what: &str) -> Result<u64> {
        let mut b = [0u8; 8];
        self.read_exact_at(&mut b, what)?;
        Ok(u64::from_le_bytes(b))
    }
}

pub fn write_tensor<W: Write>(w: &mut W, t: &Tensor) -> Result<()> {
    w.write_all(TENSOR_MAGIC)?;
    w.write_all(&FORMAT_VERSION.to_le_bytes())?;
    w.write_all(&(t.rank() as u32).to_le_bytes())?;
    for &e in t.shape() {
        w.write_all(&(e as u64).to_le_bytes())?;
    }
    w.write_all(&DTYPE_F32.to_le_bytes())?;
    for &v in t.data() {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

fn read_tensor_counting<R: Read>(r: &mut CountingReader<R>) -> Result<Tensor> {
    let start = r.offset;
    let mut magic = [0u8; 4];
    r.read_exact_at(&mut magic, "tensor magic")?;
    if &magic != TENSOR_MAGIC {
        return Err(Error::artifact_at(
            format!("bad tensor magic {magic:?}, expected {TENSOR_MAGIC:?}"),
            start,
        ));
    }
    let version = r.read_u32("tensor version")?;
    if version != FORMAT_VERSION {
        return Err(Error::artifact_at(format!("unsupported tensor version {version}"), start + 4));
    }
    let rank = r.read_u32("tensor rank")? as usize;
    if rank > 8 {
        return Err(Error::artifact_at(format!("implausible rank {rank}"), start + 8));
    }
    let mut shape = Vec::with_capacity(rank);
    let mut numel: u64 = 1;
    for i in 0..rank {
        let e = r.read_u64(&format!("extent {i}"))?;
        numel = numel.saturating_mul(e);
        shape.push(e as usize);
    }
    if numel > (1 << 32) {
        return Err(Error::artifact_at(format!("implausible element count {numel}"), r.offset));
    }
    let dtype = r.read_u32("dtype tag")?;
    if dtype != DTYPE_F32 {
        return Err(Error::artifact_at(format!("unsupported dtype tag {dtype}"), r.offset - 4));
    }
    let mut data = vec![0.0f32; numel as usize];
    for (i, v) in data.iter_mut().enumerate() {
        let at = r.offset;
        let mut b = [0u8; 4];
        r.read_exact_at(&mut b, "tensor payload")?;
        let x = f32::from_le_bytes(b);
        if !x.is_finite() {
            return Err(Error::artifact_at(
                format!("non-finite scalar {x} at element {i}"),
                at,
            ));
        }
        *v = x;
    }
    Ok(Tensor::from_raw(shape, data))
}

pub fn read_tensor<R: Read>(r: &mut R) -> Result<Tensor> {
    read_tensor_counting(&mut CountingReader::new(r))
}

/// A manifest plus named tensors; the unit of persistence for
/// checkpoints, subspaces, probes, and datasets' binary side.
#[derive(Debug, Clone)]
pub struct Artifact {
    pub manifest: serde_json::Value,
    pub tensors: Vec<(String, Tensor)>,
}

impl Artifact {
    pub fn new(manifest: serde_json::Value) -> Self {
        Artifact { manifest, tensors: Vec::new() }
    }

    pub fn push(&mut self, name: impl Into<String>, t: Tensor) {
        self.tensors.push((name.into(), t));
    }

    pub fn tensor(&self, name: &str) -> Result<&Tensor> {
        self.tensors
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
            .ok_or_else(|| Error::artifact(format!("missing tensor record '{name}'")))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        w.write_all(ARTIFACT_MAGIC)?;
        w.write_all(&FORMAT_VERSION.to_le_bytes())?;
        let manifest = serde_json::to_vec(&self.manifest)?;
        w.write_all(&(manifest.len() as u64).to_le_bytes())?;
        w.write_all(&manifest)?;
        w.write_all(&(self.tensors.len() as u32).to_le_bytes())?;
        for (name, t) in &self.tensors {
            w.write_all(&(name.len() as u32).to_le_bytes())?;
            w.write_all(name.as_bytes())?;
            write_tensor(&mut w, t)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = File::open(path).map_err(|e| {
            Error::artifact(format!("cannot open {}: {e}", path.display()))
        })?;
        let mut r = CountingReader::new(BufReader::new(file));
        let mut magic = [0u8; 4];
        r.read_exact_at(&mut magic, "artifact magic")?;
        if &magic != ARTIFACT_MAGIC {
            return Err(Error::artifact_at(
                format!("bad artifact magic {magic:?} in {}", path.display()),
                0,
            ));
        }
        let version = r.read_u32("artifact version")?;
        if version != FORMAT_VERSION {
            return Err(Error::artifact_at(format!("unsupported artifact version {version}"), 4));
        }
        let mlen = r.read_u64("manifest length")? as usize;
        if mlen > (1 << 30) {
            return Err(Error::artifact_at(format!("implausible manifest length {mlen}"), 8));
        }
        let mut mbytes = vec![0u8; mlen];
        r.read_exact_at(&mut mbytes, "manifest")?;
        let manifest: serde_json::Value = serde_json::from_slice(&mbytes)
            .map_err(|e| Error::artifact_at(format!("manifest is not valid JSON: {e}"), 16))?;
        let count = r.read_u32("tensor count")? as usize;
        let mut tensors = Vec::with_capacity(count);
        for i in 0..count {
            let nlen = r.read_u32(&format!("name length of record {i}"))? as usize;
            if nlen > 4096 {
                return Err(Error::artifact_at(format!("implausible name length {nlen}"), r.offset - 4));
            }
            let mut nbytes = vec![0u8; nlen];
            r.read_exact_at(&mut nbytes, "record name")?;
            let name = String::from_utf8(nbytes)
                .map_err(|_| Error::artifact_at("record name is not UTF-8", r.offset))?;
            let t = read_tensor_counting(&mut r)?;
            tensors.push((name, t));
        }
        Ok(Artifact { manifest, tensors })
    }
}
