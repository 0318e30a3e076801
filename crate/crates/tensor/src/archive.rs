//! Checkpoint archive: a tar file holding
//!
//! * `manifest.txt`: one line per tensor, `name<TAB>d0xd1x..<TAB>offset<TAB>count`,
//!   offsets and counts in elements;
//! * `payload.bin`: the concatenated tensors as little-endian `f32`;
//! * any number of text records (`*.txt`), typically `key=value` lines.
//!
//! Tar headers carry fixed metadata so equal contents give equal bytes.

use std::collections::BTreeMap;
use std::io::Read;
use std::path::Path;

use crate::error::{Result, TensorError};
use crate::params::ParamStore;
use crate::tensor::Tensor;

const MANIFEST: &str = "manifest.txt";
const PAYLOAD: &str = "payload.bin";

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Archive {
    pub tensors: ParamStore<f32>,
    pub records: BTreeMap<String, String>,
}

fn append(builder: &mut tar::Builder<Vec<u8>>, name: &str, bytes: &[u8]) -> Result<()> {
    let mut header = tar::Header::new_gnu();
    header.set_size(bytes.len() as u64);
    header.set_mode(0o644);
    header.set_mtime(0);
    header.set_uid(0);
    header.set_gid(0);
    header.set_cksum();
    builder.append_data(&mut header, name, bytes)?;
    Ok(())
}

pub fn parse_key_values(text: &str) -> BTreeMap<String, String> {
    text.lines()
        .filter(|l| !l.trim().is_empty() && !l.starts_with('#'))
        .filter_map(|l| l.split_once('='))
        .map(|(k, v)| (k.trim().to_string(), v.trim().to_string()))
        .collect()
}

pub fn format_key_values<'a>(kv: impl IntoIterator<Item = (&'a String, &'a String)>) -> String {
    kv.into_iter().map(|(k, v)| format!("{k}={v}\n")).collect()
}

impl Archive {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut manifest = String::new();
        let mut payload = Vec::with_capacity(self.tensors.num_elements() * 4);
        let mut offset = 0usize;
        for (name, t) in self.tensors.iter() {
            if name.contains(['\t', '\n']) {
                return Err(TensorError::Archive(format!("bad tensor name {name:?}")));
            }
            let dims: Vec<String> = t.shape().iter().map(|d| d.to_string()).collect();
            manifest.push_str(&format!("{name}\t{}\t{offset}\t{}\n", dims.join("x"), t.len()));
            for &x in t.data() {
                payload.extend_from_slice(&x.to_le_bytes());
            }
            offset += t.len();
        }
        let mut builder = tar::Builder::new(Vec::new());
        append(&mut builder, MANIFEST, manifest.as_bytes())?;
        append(&mut builder, PAYLOAD, &payload)?;
        for (name, text) in &self.records {
            if name == MANIFEST || name == PAYLOAD {
                return Err(TensorError::Archive(format!("reserved record name {name}")));
            }
            append(&mut builder, name, text.as_bytes())?;
        }
        Ok(builder.into_inner()?)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut ar = tar::Archive::new(bytes);
        let mut files = BTreeMap::new();
        for entry in ar.entries()? {
            let mut e = entry?;
            let name = e.path()?.to_string_lossy().into_owned();
            let mut buf = Vec::new();
            e.read_to_end(&mut buf)?;
            files.insert(name, buf);
        }
        let manifest = files
            .remove(MANIFEST)
            .ok_or_else(|| TensorError::Archive("no manifest".into()))?;
        let payload = files
            .remove(PAYLOAD)
            .ok_or_else(|| TensorError::Archive("no payload".into()))?;
        let manifest = String::from_utf8(manifest).map_err(|e| TensorError::Archive(e.to_string()))?;
        let mut tensors = ParamStore::new();
        for line in manifest.lines() {
            let parts: Vec<&str> = line.split('\t').collect();
            let [name, dims, offset, count] = parts[..] else {
                return Err(TensorError::Archive(format!("bad manifest line {line:?}")));
            };
            let bad = |_| TensorError::Archive(format!("bad manifest line {line:?}"));
            let shape: Vec<usize> = if dims.is_empty() {
                vec![]
            } else {
                dims.split('x').map(|d| d.parse().map_err(bad)).collect::<Result<_>>()?
            };
            let offset: usize = offset.parse().map_err(bad)?;
            let count: usize = count.parse().map_err(bad)?;
            let bytes = payload
                .get(offset * 4..(offset + count) * 4)
                .ok_or_else(|| TensorError::Archive(format!("payload too short for {name}")))?;
            let data = bytes
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            tensors.insert(name, Tensor::new(&shape, data)?);
        }
        let records = files
            .into_iter()
            .map(|(k, v)| {
                String::from_utf8(v)
                    .map(|s| (k, s))
                    .map_err(|e| TensorError::Archive(e.to_string()))
            })
            .collect::<Result<_>>()?;
        Ok(Self { tensors, records })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        if let Some(dir) = path.parent() {
            if !dir.as_os_str().is_empty() {
                std::fs::create_dir_all(dir)?;
            }
        }
        std::fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }

    pub fn record(&self, name: &str) -> Result<&str> {
        self.records
            .get(name)
            .map(|s| s.as_str())
            .ok_or_else(|| TensorError::Missing(name.to_string()))
    }
}
