//! `cgf-ckpt-v1` checkpoint container.
//!
//! Layout: a UTF-8 header, then a little-endian `f64` payload.
//!
//! ```text
//! cgf-ckpt-v1
//! meta <key>=<value>          (zero or more)
//! param <name> <d0>x<d1>... <byte offset into payload>
//! end
//! <payload>
//! ```

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::Tensor;

pub const CHECKPOINT_VERSION: &str = "cgf-ckpt-v1";

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    pub meta: Vec<(String, String)>,
    pub params: Vec<(String, Tensor)>,
}

impl Checkpoint {
    pub fn from_store(store: &ParamStore, meta: Vec<(String, String)>) -> Self {
        Checkpoint {
            meta,
            params: store
                .iter()
                .map(|(_, name, t)| (name.to_string(), Tensor::new(t.shape(), t.values().to_vec()).unwrap()))
                .collect(),
        }
    }

    pub fn meta(&self, key: &str) -> Option<&str> {
        self.meta.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut header = format!("{CHECKPOINT_VERSION}\n");
        for (k, v) in &self.meta {
            if k.contains(['=', '\n']) || v.contains('\n') {
                return Err(Error::Checkpoint(format!("unencodable meta entry {k}")));
            }
            header.push_str(&format!("meta {k}={v}\n"));
        }
        let mut offset = 0usize;
        for (name, t) in &self.params {
            if name.is_empty() || name.contains(char::is_whitespace) {
                return Err(Error::Checkpoint(format!("unencodable parameter name {name:?}")));
            }
            let dims: Vec<String> = t.shape().iter().map(|d| d.to_string()).collect();
            header.push_str(&format!("param {name} {} {offset}\n", dims.join("x")));
            offset += 8 * t.numel();
        }
        header.push_str("end\n");
        let mut out = header.into_bytes();
        out.reserve(offset);
        for (_, t) in &self.params {
            for v in t.values() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| Error::Checkpoint(m.to_string());
        let mut pos = 0;
        let mut next_line = || -> Result<&str> {
            let rest = &bytes[pos..];
            let nl = rest.iter().position(|&b| b == b'\n').ok_or_else(|| bad("truncated header"))?;
            pos += nl + 1;
            std::str::from_utf8(&rest[..nl]).map_err(|_| bad("header is not UTF-8"))
        };
        if next_line()? != CHECKPOINT_VERSION {
            return Err(bad("missing cgf-ckpt-v1 version tag"));
        }
        let mut meta = Vec::new();
        let mut entries = Vec::new();
        loop {
            let line = next_line()?;
            if line == "end" {
                break;
            }
            if let Some(kv) = line.strip_prefix("meta ") {
                let (k, v) = kv.split_once('=').ok_or_else(|| bad("malformed meta line"))?;
                meta.push((k.to_string(), v.to_string()));
            } else if let Some(rest) = line.strip_prefix("param ") {
                let fields: Vec<&str> = rest.split(' ').collect();
                let [name, dims, off] = fields[..] else {
                    return Err(bad("malformed param line"));
                };
                let shape = dims
                    .split('x')
                    .map(|d| d.parse::<usize>())
                    .collect::<Result<Vec<_>, _>>()
                    .map_err(|_| bad("malformed shape"))?;
                let off: usize = off.parse().map_err(|_| bad("malformed offset"))?;
                entries.push((name.to_string(), shape, off));
            } else {
                return Err(bad("unknown header line"));
            }
        }
        let payload = &bytes[pos..];
        let mut params = Vec::with_capacity(entries.len());
        for (name, shape, off) in entries {
            let n: usize = shape.iter().product();
            let end = off + 8 * n;
            let raw = payload
                .get(off..end)
                .ok_or_else(|| Error::Checkpoint(format!("payload too short for {name}")))?;
            let values = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            params.push((name, Tensor::new(&shape, values)?));
        }
        Ok(Checkpoint { meta, params })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path)?;
        f.write_all(&self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut bytes)?;
        Self::from_bytes(&bytes)
    }

    /// Copies every stored tensor into `store`; names and shapes must match exactly.
    pub fn restore_into(&self, store: &mut ParamStore) -> Result<()> {
        if self.params.len() != store.len() {
            return Err(Error::Checkpoint(format!(
                "checkpoint has {} parameters, model expects {}",
                self.params.len(),
                store.len()
            )));
        }
        for (name, t) in &self.params {
            let id = store
                .id(name)
                .ok_or_else(|| Error::Checkpoint(format!("unknown parameter {name}")))?;
            let dst = store.get_mut(id);
            if dst.shape() != t.shape() {
                return Err(Error::Checkpoint(format!(
                    "{name}: checkpoint shape {:?} vs model shape {:?}",
                    t.shape(),
                    dst.shape()
                )));
            }
            dst.values_mut().copy_from_slice(t.values());
        }
        Ok(())
    }
}
