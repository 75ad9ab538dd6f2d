//! Weight checkpoints (`DMVW`) and text-embedding files (`TEMB`).

use std::fs;
use std::path::Path;

use crate::config::{Configurable, KeyValues};
use crate::error::{Error, Result};
use crate::nn::ParamSet;
use crate::sgtt::{SgttConfig, SgttFlow};
use crate::tensor::Tensor;
use crate::vae::{DyMeshVae, VaeConfig};

const CKPT_MAGIC: &[u8; 4] = b"DMVW";
const CKPT_VERSION: u32 = 1;
const TEMB_MAGIC: &[u8; 4] = b"TEMB";

/// Config text and named tensors as stored on disk.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: KeyValues,
    pub params: ParamSet,
}

fn put_u32(out: &mut Vec<u8>, v: usize) {
    out.extend_from_slice(&(v as u32).to_le_bytes());
}

pub fn encode_checkpoint(config: &KeyValues, params: &ParamSet) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(CKPT_MAGIC);
    put_u32(&mut out, CKPT_VERSION as usize);
    let text = config.to_text();
    put_u32(&mut out, text.len());
    out.extend_from_slice(text.as_bytes());
    put_u32(&mut out, params.len());
    for (name, t) in params.names().iter().zip(params.tensors()) {
        put_u32(&mut out, name.len());
        out.extend_from_slice(name.as_bytes());
        put_u32(&mut out, t.shape().len());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn fail(&self, detail: impl Into<String>) -> Error {
        Error::Parse {
            path: self.path.to_path_buf(),
            offset: self.pos as u64,
            detail: detail.into(),
        }
    }

    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| self.fail(format!("truncated while reading {what}")))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")) as usize)
    }

    fn u64(&mut self, what: &str) -> Result<usize> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")) as usize)
    }

    fn f64s(&mut self, n: usize, what: &str) -> Result<Vec<f64>> {
        let bytes = self.take(n.checked_mul(8).ok_or_else(|| self.fail("size overflow"))?, what)?;
        Ok(bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect())
    }

    fn magic(&mut self, magic: &[u8; 4]) -> Result<()> {
        if self.take(4, "magic")? != magic {
            self.pos = 0;
            return Err(self.fail(format!("bad magic, expected {}", String::from_utf8_lossy(magic))));
        }
        Ok(())
    }

    fn finish(&self) -> Result<()> {
        if self.pos != self.bytes.len() {
            return Err(self.fail(format!("{} trailing bytes", self.bytes.len() - self.pos)));
        }
        Ok(())
    }
}

pub fn decode_checkpoint(bytes: &[u8], path: &Path) -> Result<Checkpoint> {
    let mut r = Reader { bytes, pos: 0, path };
    r.magic(CKPT_MAGIC)?;
    let version = r.u32("version")?;
    if version != CKPT_VERSION as usize {
        return Err(r.fail(format!("unsupported version {version}")));
    }
    let len = r.u32("config length")?;
    let text = std::str::from_utf8(r.take(len, "config")?).map_err(|_| r.fail("config is not UTF-8"))?;
    let config = KeyValues::parse(text, path)?;
    let count = r.u32("tensor count")?;
    let mut params = ParamSet::new();
    for _ in 0..count {
        let len = r.u32("name length")?;
        let name = std::str::from_utf8(r.take(len, "name")?)
            .map_err(|_| r.fail("tensor name is not UTF-8"))?
            .to_string();
        let rank = r.u32("rank")?;
        let shape = (0..rank).map(|_| r.u64("dimension")).collect::<Result<Vec<_>>>()?;
        let n = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d)).ok_or_else(|| r.fail("size overflow"))?;
        let data = r.f64s(n, "tensor values")?;
        let at = r.pos;
        params.insert(name, Tensor::new(shape, data)?).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            offset: at as u64,
            detail: e.to_string(),
        })?;
    }
    r.finish()?;
    Ok(Checkpoint { config, params })
}

pub fn read_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes, path)
}

fn with_kind(kind: &str, cfg: KeyValues) -> KeyValues {
    let mut kv = KeyValues::new();
    kv.set("model", kind);
    kv.merge(&cfg);
    kv
}

fn split_kind(ckpt: &Checkpoint, want: &str, path: &Path) -> Result<KeyValues> {
    match ckpt.config.get("model") {
        Some(k) if k == want => {}
        other => {
            return Err(Error::Schema {
                path: path.to_path_buf(),
                line: 1,
                detail: format!("expected a {want} checkpoint, found model={}", other.unwrap_or("<none>")),
            })
        }
    }
    let mut kv = KeyValues::new();
    for (k, v) in ckpt.config.iter().filter(|(k, _)| *k != "model") {
        kv.set(k, v);
    }
    Ok(kv)
}

pub fn save_vae(path: &Path, model: &DyMeshVae) -> Result<()> {
    let bytes = encode_checkpoint(&with_kind("vae", model.cfg.to_kv()), &model.params);
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load_vae(path: &Path) -> Result<DyMeshVae> {
    let ckpt = read_checkpoint(path)?;
    let mut cfg = VaeConfig::default();
    cfg.apply(&split_kind(&ckpt, "vae", path)?)?;
    DyMeshVae::from_params(cfg, &ckpt.params)
}

pub fn save_flow(path: &Path, model: &SgttFlow) -> Result<()> {
    let bytes = encode_checkpoint(&with_kind("sgtt", model.cfg.to_kv()), &model.params);
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load_flow(path: &Path) -> Result<SgttFlow> {
    let ckpt = read_checkpoint(path)?;
    let mut cfg = SgttConfig::default();
    cfg.apply(&split_kind(&ckpt, "sgtt", path)?)?;
    SgttFlow::from_params(cfg, &ckpt.params)
}

/// `[count, dim]` embedding rows.
pub fn encode_temb(t: &Tensor) -> Result<Vec<u8>> {
    let (count, dim) = t.dims2()?;
    let mut out = Vec::with_capacity(12 + 8 * t.len());
    out.extend_from_slice(TEMB_MAGIC);
    put_u32(&mut out, count);
    put_u32(&mut out, dim);
    for v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

pub fn decode_temb(bytes: &[u8], path: &Path) -> Result<Tensor> {
    let mut r = Reader { bytes, pos: 0, path };
    r.magic(TEMB_MAGIC)?;
    let count = r.u32("count")?;
    let dim = r.u32("dim")?;
    if count == 0 || dim == 0 {
        return Err(r.fail("empty embedding"));
    }
    let data = r.f64s(count * dim, "values")?;
    r.finish()?;
    if data.iter().any(|v| !v.is_finite()) {
        return Err(r.fail("non-finite embedding value"));
    }
    Tensor::new([count, dim], data)
}

pub fn read_temb(path: &Path) -> Result<Tensor> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_temb(&bytes, path)
}

pub fn write_temb(path: &Path, t: &Tensor) -> Result<()> {
    fs::write(path, encode_temb(t)?).map_err(|e| Error::io(path, e))
}
