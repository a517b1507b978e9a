//! Parameter checkpoints: a flat little-endian `f64` payload beside a text
//! manifest listing name, shape, dtype and byte offset of every tensor.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use fuseg_tensor::{ParamStore, Tensor};

use crate::error::{Error, Result};

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub store: ParamStore,
    pub step: u64,
    pub config_hash: String,
}

fn paths(base: &Path) -> (PathBuf, PathBuf) {
    (base.with_extension("bin"), base.with_extension("manifest"))
}

/// Writes `path` via a temporary sibling and a rename.
fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

impl Checkpoint {
    pub fn manifest(&self) -> String {
        let mut out = format!(
            "format_version {FORMAT_VERSION}\nstep {}\nconfig_hash {}\ntensors {}\n",
            self.step,
            self.config_hash,
            self.store.len()
        );
        let mut offset = 0usize;
        for (name, t) in self.store.iter() {
            let shape: Vec<String> = t.shape().iter().map(usize::to_string).collect();
            let shape = shape.join("x");
            out.push_str(&format!("tensor {name} shape {shape} dtype f64le offset {offset}\n"));
            offset += t.numel() * 8;
        }
        out
    }

    pub fn payload(&self) -> Vec<u8> {
        let mut bytes = Vec::with_capacity(self.store.num_scalars() * 8);
        for t in self.store.values() {
            for v in t.data() {
                bytes.extend_from_slice(&v.to_le_bytes());
            }
        }
        bytes
    }

    /// Saves to `<base>.bin` and `<base>.manifest`. The manifest is renamed
    /// into place last, so a reader never sees it ahead of its payload.
    pub fn save(&self, base: &Path) -> Result<()> {
        if let Some(dir) = base.parent() {
            if !dir.as_os_str().is_empty() {
                fs::create_dir_all(dir)?;
            }
        }
        let (bin, manifest) = paths(base);
        write_atomic(&bin, &self.payload())?;
        write_atomic(&manifest, self.manifest().as_bytes())
    }

    pub fn load(base: &Path) -> Result<Self> {
        let (bin, manifest) = paths(base);
        let text = fs::read_to_string(&manifest)?;
        let bytes = fs::read(&bin)?;
        Self::parse(&text, &bytes)
    }

    pub fn parse(manifest: &str, bytes: &[u8]) -> Result<Self> {
        let bad = |msg: String| Error::Checkpoint(msg);
        let mut lines = manifest.lines();
        let mut header = |key: &str| -> Result<String> {
            let line = lines.next().ok_or_else(|| bad(format!("manifest ends before `{key}`")))?;
            line.strip_prefix(key)
                .and_then(|r| r.strip_prefix(' '))
                .map(str::to_string)
                .ok_or_else(|| bad(format!("expected `{key}`, found `{line}`")))
        };
        let version: u32 = header("format_version")?.parse().map_err(|_| bad("bad format_version".into()))?;
        if version != FORMAT_VERSION {
            return Err(bad(format!("unsupported format version {version}")));
        }
        let step: u64 = header("step")?.parse().map_err(|_| bad("bad step".into()))?;
        let config_hash = header("config_hash")?;
        let count: usize = header("tensors")?.parse().map_err(|_| bad("bad tensor count".into()))?;
        let mut store = ParamStore::new();
        let mut expected = 0usize;
        for line in lines.by_ref().take(count) {
            let f: Vec<&str> = line.split(' ').collect();
            if f.len() != 8 || f[0] != "tensor" || f[2] != "shape" || f[4] != "dtype" || f[5] != "f64le" || f[6] != "offset" {
                return Err(bad(format!("malformed tensor line `{line}`")));
            }
            let shape: Vec<usize> = f[3]
                .split('x')
                .map(|d| d.parse().map_err(|_| bad(format!("bad shape in `{line}`"))))
                .collect::<Result<_>>()?;
            let offset: usize = f[7].parse().map_err(|_| bad(format!("bad offset in `{line}`")))?;
            if offset != expected {
                return Err(bad(format!("tensor `{}` at offset {offset}, expected {expected}", f[1])));
            }
            let n: usize = shape.iter().product();
            let end = offset + n * 8;
            let chunk = bytes
                .get(offset..end)
                .ok_or_else(|| bad(format!("payload too short for `{}`", f[1])))?;
            let data = chunk
                .chunks_exact(8)
                .map(|b| f64::from_le_bytes(b.try_into().expect("8 bytes")))
                .collect();
            store.add(f[1], Tensor::new(&shape, data)?)?;
            expected = end;
        }
        if store.len() != count {
            return Err(bad(format!("manifest lists {} of {count} tensors", store.len())));
        }
        if expected != bytes.len() {
            return Err(bad(format!("payload has {} bytes, manifest covers {expected}", bytes.len())));
        }
        Ok(Self { store, step, config_hash })
    }
}
