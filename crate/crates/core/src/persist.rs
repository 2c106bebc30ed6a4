//! Versioned checkpoint container and atomic file writes.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic        8 bytes   "PVAECKPT"
//! version      u32
//! header_len   u64
//! header       header_len bytes of JSON (see `Header`)
//! payload      f32 values of every entry, in header order
//! ```

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::nn::{hex, Param, ParamStore};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"PVAECKPT";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ComponentTag {
    Backbone,
    Vae,
    StyleTable,
    Scorer,
    CharLm,
    EvalClassifier,
}

impl ComponentTag {
    pub fn as_str(self) -> &'static str {
        match self {
            ComponentTag::Backbone => "backbone",
            ComponentTag::Vae => "vae",
            ComponentTag::StyleTable => "style_table",
            ComponentTag::Scorer => "scorer",
            ComponentTag::CharLm => "char_lm",
            ComponentTag::EvalClassifier => "eval_classifier",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Component {
    pub tag: ComponentTag,
    pub params: Vec<Param>,
    /// Component-specific settings (dimensions, character tables, ...).
    pub meta: serde_json::Value,
}

impl Component {
    pub fn from_store(tag: ComponentTag, store: &ParamStore, meta: serde_json::Value) -> Self {
        Self {
            tag,
            params: store.params().to_vec(),
            meta,
        }
    }

    pub fn checksum(&self) -> String {
        let mut s = ParamStore::new();
        for p in &self.params {
            s.add(p.name.clone(), p.value.clone());
        }
        s.checksum()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub components: Vec<Component>,
    pub config: serde_json::Value,
    pub vocab: Option<Vec<String>>,
    pub seed: u64,
}

#[derive(Serialize, Deserialize)]
struct EntryHeader {
    name: String,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct ComponentHeader {
    tag: ComponentTag,
    meta: serde_json::Value,
    entries: Vec<EntryHeader>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    format_version: u32,
    seed: u64,
    config: serde_json::Value,
    vocab: Option<Vec<String>>,
    components: Vec<ComponentHeader>,
}

impl Checkpoint {
    pub fn new(config: serde_json::Value, vocab: Option<Vec<String>>, seed: u64) -> Self {
        Self {
            components: Vec::new(),
            config,
            vocab,
            seed,
        }
    }

    /// Adds or replaces the component with the same tag.
    pub fn put(&mut self, c: Component) {
        self.components.retain(|x| x.tag != c.tag);
        self.components.push(c);
    }

    pub fn component(&self, tag: ComponentTag) -> Option<&Component> {
        self.components.iter().find(|c| c.tag == tag)
    }

    pub fn require(&self, tag: ComponentTag) -> Result<&Component> {
        self.component(tag).ok_or_else(|| {
            Error::Checkpoint(format!("checkpoint has no '{}' component", tag.as_str()))
        })
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = Header {
            format_version: FORMAT_VERSION,
            seed: self.seed,
            config: self.config.clone(),
            vocab: self.vocab.clone(),
            components: self
                .components
                .iter()
                .map(|c| ComponentHeader {
                    tag: c.tag,
                    meta: c.meta.clone(),
                    entries: c
                        .params
                        .iter()
                        .map(|p| EntryHeader {
                            name: p.name.clone(),
                            shape: p.value.shape().to_vec(),
                        })
                        .collect(),
                })
                .collect(),
        };
        let json = serde_json::to_vec(&header)?;
        let mut out = Vec::with_capacity(json.len() + 20);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for c in &self.components {
            for p in &c.params {
                for v in p.value.data() {
                    out.extend_from_slice(&v.to_le_bytes());
                }
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let err = |m: String| Error::Checkpoint(m);
        if bytes.len() < 20 {
            return Err(err("file too short for the checkpoint preamble".into()));
        }
        if &bytes[..8] != MAGIC {
            return Err(err("not a checkpoint (bad magic)".into()));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
        if version != FORMAT_VERSION {
            return Err(err(format!(
                "unsupported checkpoint format version {version} (expected {FORMAT_VERSION})"
            )));
        }
        let hlen = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
        let body = &bytes[20..];
        if body.len() < hlen {
            return Err(err(format!(
                "truncated header section ({} of {hlen} bytes)",
                body.len()
            )));
        }
        let header: Header = serde_json::from_slice(&body[..hlen])
            .map_err(|e| err(format!("corrupt header section: {e}")))?;
        if header.format_version != FORMAT_VERSION {
            return Err(err(format!("header version {} mismatch", header.format_version)));
        }
        let mut payload = &body[hlen..];
        let mut components = Vec::with_capacity(header.components.len());
        for ch in header.components {
            let mut params = Vec::with_capacity(ch.entries.len());
            for e in ch.entries {
                let n: usize = e.shape.iter().product();
                let need = n * 4;
                if payload.len() < need {
                    return Err(err(format!(
                        "truncated payload in section '{}' at entry '{}'",
                        ch.tag.as_str(),
                        e.name
                    )));
                }
                let data = payload[..need]
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                    .collect();
                payload = &payload[need..];
                params.push(Param {
                    name: e.name,
                    value: Tensor::new(e.shape, data)?,
                });
            }
            components.push(Component {
                tag: ch.tag,
                params,
                meta: ch.meta,
            });
        }
        if !payload.is_empty() {
            return Err(err(format!("{} trailing bytes after payload", payload.len())));
        }
        Ok(Self {
            components,
            config: header.config,
            vocab: header.vocab,
            seed: header.seed,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes()?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    /// Loads, then keeps only the requested components (all must exist).
    pub fn load_components(path: &Path, tags: &[ComponentTag]) -> Result<Self> {
        let mut ck = Self::load(path)?;
        for &t in tags {
            ck.require(t)?;
        }
        ck.components.retain(|c| tags.contains(&c.tag));
        Ok(ck)
    }
}

/// Writes through a temporary sibling file and renames it into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let tmp = path.with_extension(format!(
        "{}.tmp",
        path.extension().and_then(|e| e.to_str()).unwrap_or("")
    ));
    {
        let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
        f.write_all(bytes).map_err(|e| Error::io(&tmp, e))?;
        f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    }
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(hex(&Sha256::digest(&bytes)))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Checkpoint {
        let mut store = ParamStore::new();
        store.add("a.w", Tensor::new(vec![2, 3], vec![1.0, -2.5, 3.25, 0.0, 1e-7, -0.0]).unwrap());
        store.add("a.b", Tensor::vector(&[f32::MIN_POSITIVE, 7.0]));
        let mut ck = Checkpoint::new(serde_json::json!({"x": 1}), Some(vec!["<pad>".into()]), 42);
        ck.put(Component::from_store(ComponentTag::Vae, &store, serde_json::json!({"d": 3})));
        let mut s2 = ParamStore::new();
        s2.add("s", Tensor::vector(&[0.5, 0.25]));
        ck.put(Component::from_store(ComponentTag::StyleTable, &s2, serde_json::Value::Null));
        ck
    }

    #[test]
    fn round_trip_is_bitwise() {
        let ck = sample();
        let back = Checkpoint::from_bytes(&ck.to_bytes().unwrap()).unwrap();
        assert_eq!(back, ck);
        assert_eq!(
            back.component(ComponentTag::Vae).unwrap().checksum(),
            ck.component(ComponentTag::Vae).unwrap().checksum()
        );
    }

    #[test]
    fn truncation_names_the_missing_section() {
        let bytes = sample().to_bytes().unwrap();
        let cut = &bytes[..bytes.len() - 4];
        let e = Checkpoint::from_bytes(cut).unwrap_err().to_string();
        assert!(e.contains("style_table"), "{e}");
        let e = Checkpoint::from_bytes(&bytes[..30]).unwrap_err().to_string();
        assert!(e.contains("header"), "{e}");
    }

    #[test]
    fn version_mismatch_is_rejected() {
        let mut bytes = sample().to_bytes().unwrap();
        bytes[8] = 99;
        let e = Checkpoint::from_bytes(&bytes).unwrap_err().to_string();
        assert!(e.contains("version"), "{e}");
    }

    #[test]
    fn partial_load_by_tag() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("ck.bin");
        sample().save(&p).unwrap();
        let ck = Checkpoint::load_components(&p, &[ComponentTag::StyleTable]).unwrap();
        assert_eq!(ck.components.len(), 1);
        assert!(Checkpoint::load_components(&p, &[ComponentTag::Scorer]).is_err());
    }
}
