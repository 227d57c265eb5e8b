//! Persistence: atomic writes, `NRPC` checkpoints, `key=value` config files
//! and metadata sidecars.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::nn::NetworkDef;
use crate::tensor::{DType, Scalar, Tensor};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"NRPC";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Writes `bytes` to a temporary file next to `path`, then renames it over
/// `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| Error::io(dir, e))?;
    tmp.write_all(bytes).map_err(|e| Error::io(path, e))?;
    tmp.as_file().sync_all().map_err(|e| Error::io(path, e))?;
    tmp.persist(path).map_err(|e| Error::io(path, e.error))?;
    Ok(())
}

pub fn encode_checkpoint<T: Scalar>(net: &NetworkDef<T>) -> Vec<u8> {
    let tensors = net.named_tensors();
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for (name, t) in tensors {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        out.push(T::DTYPE.code());
        for v in t.data() {
            v.write_le(&mut out);
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Format("checkpoint truncated".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

/// Tensors of a checkpoint, in file order.
pub fn decode_checkpoint<T: Scalar>(bytes: &[u8]) -> Result<Vec<(String, Tensor<T>)>> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4).ok() != Some(CHECKPOINT_MAGIC) {
        return Err(Error::Format("missing NRPC magic".into()));
    }
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Format(format!("unsupported checkpoint version {version}")));
    }
    let count = r.u32()?;
    let mut out = Vec::new();
    for _ in 0..count {
        let len = r.u32()? as usize;
        let name =
            String::from_utf8(r.take(len)?.to_vec()).map_err(|_| Error::Format("tensor name is not UTF-8".into()))?;
        let rank = r.u32()? as usize;
        let shape = (0..rank)
            .map(|_| r.u64().map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let code = r.take(1)?[0];
        if code != T::DTYPE.code() {
            let found = [DType::F32, DType::F64].into_iter().find(|d| d.code() == code);
            return Err(Error::Format(format!(
                "tensor `{name}` has dtype {found:?} (code {code}), expected {:?}",
                T::DTYPE
            )));
        }
        let n: usize = shape.iter().product();
        let raw = r.take(n * T::BYTES)?;
        let data = raw.chunks_exact(T::BYTES).map(T::read_le).collect();
        out.push((name, Tensor::new(shape, data)?));
    }
    if r.pos != bytes.len() {
        return Err(Error::Format("trailing bytes after checkpoint".into()));
    }
    Ok(out)
}

/// Replaces every parameter and buffer of `net` from checkpoint bytes. The
/// file must hold exactly the network's tensor names and shapes; the first
/// offending name is reported.
pub fn apply_checkpoint<T: Scalar>(net: &mut NetworkDef<T>, bytes: &[u8]) -> Result<()> {
    let mut stored: BTreeMap<String, Tensor<T>> = BTreeMap::new();
    for (name, t) in decode_checkpoint(bytes)? {
        if stored.insert(name.clone(), t).is_some() {
            return Err(Error::Format(format!("duplicate tensor `{name}`")));
        }
    }
    let names: Vec<String> = net.named_tensors().iter().map(|(n, _)| n.to_string()).collect();
    let mut staged = net.clone();
    for name in &names {
        let t = stored.remove(name).ok_or_else(|| Error::CheckpointMismatch {
            name: name.clone(),
            detail: "missing from checkpoint".into(),
        })?;
        staged.set_tensor(name, t)?;
    }
    if let Some(extra) = stored.keys().next() {
        return Err(Error::CheckpointMismatch {
            name: extra.clone(),
            detail: "not part of the network".into(),
        });
    }
    *net = staged;
    Ok(())
}

pub fn save_checkpoint<T: Scalar>(net: &NetworkDef<T>, path: &Path) -> Result<()> {
    write_atomic(path, &encode_checkpoint(net))
}

pub fn load_checkpoint<T: Scalar>(net: &mut NetworkDef<T>, path: &Path) -> Result<()> {
    apply_checkpoint(net, &fs::read(path).map_err(|e| Error::io(path, e))?)
}

/// Ordered `key=value` settings. Later layers override earlier ones.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Config {
    entries: BTreeMap<String, String>,
}

impl Config {
    pub fn new() -> Self {
        Self::default()
    }

    /// Parses `key=value` lines; blank lines and `#` comments are skipped.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::new();
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Format(format!("line {}: expected key=value", i + 1)))?;
            let k = k.trim();
            if k.is_empty() {
                return Err(Error::Format(format!("line {}: empty key", i + 1)));
            }
            cfg.set(k, v.trim());
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&fs::read_to_string(path).map_err(|e| Error::io(path, e))?)
    }

    pub fn set(&mut self, key: impl Into<String>, value: impl Into<String>) {
        self.entries.insert(key.into(), value.into());
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries.get(key).map(String::as_str)
    }

    /// Parsed value of `key`, if present.
    pub fn get_parsed<V: std::str::FromStr>(&self, key: &str) -> Result<Option<V>>
    where
        V::Err: std::fmt::Display,
    {
        self.get(key)
            .map(|v| {
                v.parse()
                    .map_err(|e| Error::invalid(format!("config key `{key}` = `{v}`: {e}")))
            })
            .transpose()
    }

    /// `self` with every entry of `over` applied on top.
    pub fn overlay(&self, over: &Config) -> Config {
        let mut out = self.clone();
        out.entries.extend(over.entries.clone());
        out
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &str)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v.as_str()))
    }

    pub fn to_text(&self) -> String {
        self.iter().map(|(k, v)| format!("{k}={v}\n")).collect()
    }
}

/// `<path>.meta`.
pub fn meta_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_os_string();
    s.push(".meta");
    PathBuf::from(s)
}

/// Writes the resolved configuration next to an artifact.
pub fn write_meta(artifact: &Path, cfg: &Config) -> Result<()> {
    write_atomic(&meta_path(artifact), cfg.to_text().as_bytes())
}
