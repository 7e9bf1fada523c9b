//! Flat checkpoint files: a magic line, a little-endian u64 header length, a
//! JSON header (metadata plus name → shape → byte offset) and the raw f64
//! payload. Serialization is byte-exact, so two checkpoints of the same
//! parameters compare equal as byte strings.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::backbone::{Backbone, BackboneConfig};
use crate::error::{Error, Result};
use crate::tensor::{Param, Parameterized, Tensor};

const MAGIC: &[u8] = b"PROMPTSEG-CKPT-1\n";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Entry {
    name: String,
    shape: Vec<usize>,
    offset: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Header {
    meta: serde_json::Value,
    tensors: Vec<Entry>,
}

/// A decoded checkpoint: metadata plus named tensors in file order.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub meta: serde_json::Value,
    pub tensors: Vec<(String, Tensor)>,
}

pub fn to_bytes(params: &[&Param], meta: &serde_json::Value) -> Result<Vec<u8>> {
    let mut offset = 0;
    let mut tensors = Vec::with_capacity(params.len());
    for p in params {
        tensors.push(Entry {
            name: p.name.clone(),
            shape: p.tensor.shape().to_vec(),
            offset,
        });
        offset += p.tensor.numel() * 8;
    }
    let header = serde_json::to_vec(&Header {
        meta: meta.clone(),
        tensors,
    })?;
    let mut out = Vec::with_capacity(MAGIC.len() + 8 + header.len() + offset);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend_from_slice(&header);
    for p in params {
        for v in p.tensor.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn from_bytes(bytes: &[u8]) -> Result<Checkpoint> {
    let bad = |m: &str| Error::Checkpoint(m.to_string());
    let rest = bytes.strip_prefix(MAGIC).ok_or_else(|| bad("bad magic"))?;
    if rest.len() < 8 {
        return Err(bad("truncated header length"));
    }
    let len = u64::from_le_bytes(rest[..8].try_into().expect("8 bytes")) as usize;
    let rest = &rest[8..];
    if rest.len() < len {
        return Err(bad("truncated header"));
    }
    let header: Header = serde_json::from_slice(&rest[..len])?;
    let payload = &rest[len..];
    let mut tensors = Vec::with_capacity(header.tensors.len());
    for e in header.tensors {
        let n: usize = e.shape.iter().product();
        let end = e.offset + n * 8;
        if end > payload.len() {
            return Err(bad(&format!("tensor {} runs past the payload", e.name)));
        }
        let data = payload[e.offset..end]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        tensors.push((e.name, Tensor::new(&e.shape, data)?));
    }
    Ok(Checkpoint {
        meta: header.meta,
        tensors,
    })
}

pub fn save(path: &Path, params: &[&Param], meta: &serde_json::Value) -> Result<()> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir)?;
        }
    }
    fs::write(path, to_bytes(params, meta)?)?;
    Ok(())
}

pub fn load(path: &Path) -> Result<Checkpoint> {
    from_bytes(&fs::read(path)?)
}

impl Checkpoint {
    /// Copies values into `target` by name. Every parameter of `target` must
    /// be present with a matching shape; extra entries are an error too.
    /// `requires_grad` flags on the target are left as they were.
    pub fn apply_to(&self, target: &mut impl Parameterized) -> Result<()> {
        let mut seen = 0;
        let mut failure = None;
        target.visit_mut(&mut |p| {
            if failure.is_some() {
                return;
            }
            match self.tensors.iter().find(|(n, _)| *n == p.name) {
                Some((_, t)) if t.shape() == p.tensor.shape() => {
                    p.tensor.data_mut().copy_from_slice(t.data());
                    seen += 1;
                }
                Some((_, t)) => {
                    failure = Some(Error::Checkpoint(format!(
                        "{}: shape {:?} in file, {:?} expected",
                        p.name,
                        t.shape(),
                        p.tensor.shape()
                    )))
                }
                None => failure = Some(Error::Checkpoint(format!("{} missing from checkpoint", p.name))),
            }
        });
        if let Some(e) = failure {
            return Err(e);
        }
        if seen != self.tensors.len() {
            return Err(Error::Checkpoint(format!(
                "checkpoint holds {} tensors, target has {seen}",
                self.tensors.len()
            )));
        }
        Ok(())
    }
}

/// Serializes a backbone with its config in the header metadata.
pub fn backbone_bytes(backbone: &Backbone) -> Result<Vec<u8>> {
    let meta = serde_json::json!({ "kind": "backbone", "config": backbone.config });
    to_bytes(&backbone.params(), &meta)
}

pub fn save_backbone(path: &Path, backbone: &Backbone) -> Result<()> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir)?;
        }
    }
    fs::write(path, backbone_bytes(backbone)?)?;
    Ok(())
}

/// Restores a frozen backbone from a file written by [`save_backbone`].
pub fn load_backbone(path: &Path) -> Result<Backbone> {
    let ckpt = load(path)?;
    if ckpt.meta.get("kind").and_then(|k| k.as_str()) != Some("backbone") {
        return Err(Error::Checkpoint(format!("{} is not a backbone checkpoint", path.display())));
    }
    let config: BackboneConfig = serde_json::from_value(ckpt.meta["config"].clone())?;
    let mut backbone = Backbone::new(config, 0)?;
    ckpt.apply_to(&mut backbone)?;
    Ok(backbone)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> Backbone {
        Backbone::new(
            BackboneConfig {
                image_size: 16,
                ..Default::default()
            },
            7,
        )
        .unwrap()
    }

    #[test]
    fn backbone_round_trip_is_byte_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bb.ckpt");
        let bb = small();
        save_backbone(&path, &bb).unwrap();
        let back = load_backbone(&path).unwrap();
        assert_eq!(back.checksum(), bb.checksum());
        assert_eq!(backbone_bytes(&back).unwrap(), fs::read(&path).unwrap());
        assert!(back.params().iter().all(|p| !p.tensor.requires_grad()));
    }

    #[test]
    fn corrupt_files_are_rejected() {
        let bb = small();
        let bytes = backbone_bytes(&bb).unwrap();
        assert!(matches!(from_bytes(&bytes[..10]), Err(Error::Checkpoint(_))));
        assert!(from_bytes(&bytes[..bytes.len() - 8]).is_err());
        let mut other = Backbone::new(BackboneConfig::default(), 7).unwrap();
        let err = from_bytes(&bytes).unwrap().apply_to(&mut other).unwrap_err();
        assert!(err.to_string().contains("shape"), "{err}");
    }

    #[test]
    fn values_survive_including_special_bits() {
        let p = Param::new("x", Tensor::new(&[2, 2], vec![-0.0, 1e-300, f64::MAX, 0.1]).unwrap());
        let meta = serde_json::json!({});
        let c = from_bytes(&to_bytes(&[&p], &meta).unwrap()).unwrap();
        let got: Vec<u64> = c.tensors[0].1.data().iter().map(|v| v.to_bits()).collect();
        let want: Vec<u64> = p.tensor.data().iter().map(|v| v.to_bits()).collect();
        assert_eq!(got, want);
    }
}
