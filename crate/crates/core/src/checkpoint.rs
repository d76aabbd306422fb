//! Model container format.
//!
//! ```text
//! WEATHERCL-CKPT 1\n
//! <header byte length>\n
//! <JSON header>
//! <payload: every parameter as little-endian f32, in header order>
//! ```
//!
//! The header records `kind` (`backbone` or `projector`), `version_tag`, the
//! model config and `{name, shape, dtype}` for each parameter.

use std::fs;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::backbone::{Backbone, BackboneConfig};
use crate::error::{Error, Result};
use crate::params::ParamSet;
use crate::projector::{PrincipalProjector, ProjectorConfig};
use crate::tensor::Tensor;

const MAGIC: &str = "WEATHERCL-CKPT 1";
const DTYPE: &str = "f32le";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    Backbone,
    Projector,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: String,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Header {
    pub kind: ModelKind,
    pub version_tag: usize,
    pub config: serde_json::Value,
    pub params: Vec<ParamEntry>,
}

fn corrupt(msg: impl Into<String>) -> Error {
    Error::CorruptCheckpoint(msg.into())
}

pub fn encode(kind: ModelKind, version_tag: usize, config: &impl Serialize, params: &ParamSet) -> Result<Vec<u8>> {
    let header = Header {
        kind,
        version_tag,
        config: serde_json::to_value(config)?,
        params: params
            .iter()
            .map(|p| ParamEntry {
                name: p.name.clone(),
                shape: p.tensor.shape().to_vec(),
                dtype: DTYPE.into(),
            })
            .collect(),
    };
    let json = serde_json::to_vec(&header)?;
    let mut out = format!("{MAGIC}\n{}\n", json.len()).into_bytes();
    out.extend_from_slice(&json);
    for p in params.iter() {
        for v in p.tensor.data() {
            out.extend_from_slice(&(*v as f32).to_le_bytes());
        }
    }
    Ok(out)
}

fn take_line<'a>(bytes: &'a [u8], at: &mut usize) -> Result<&'a str> {
    let rest = &bytes[*at..];
    let end = rest
        .iter()
        .position(|b| *b == b'\n')
        .ok_or_else(|| corrupt("truncated preamble"))?;
    *at += end + 1;
    std::str::from_utf8(&rest[..end]).map_err(|_| corrupt("preamble is not text"))
}

pub fn decode(bytes: &[u8]) -> Result<(Header, ParamSet)> {
    let mut at = 0;
    if take_line(bytes, &mut at)? != MAGIC {
        return Err(corrupt("not a checkpoint (bad magic)"));
    }
    let len: usize = take_line(bytes, &mut at)?
        .parse()
        .map_err(|_| corrupt("bad header length"))?;
    let json = bytes
        .get(at..at + len)
        .ok_or_else(|| corrupt("truncated header"))?;
    let header: Header =
        serde_json::from_slice(json).map_err(|e| corrupt(format!("header: {e}")))?;
    at += len;
    let mut set = ParamSet::new();
    for p in &header.params {
        if p.dtype != DTYPE {
            return Err(corrupt(format!("unsupported dtype {}", p.dtype)));
        }
        let n: usize = p.shape.iter().product();
        let raw = bytes
            .get(at..at + 4 * n)
            .ok_or_else(|| corrupt(format!("payload too short for {}", p.name)))?;
        at += 4 * n;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
            .collect();
        set.push(p.name.clone(), Tensor::new(p.shape.clone(), data)?);
    }
    if at != bytes.len() {
        return Err(corrupt(format!("{} trailing payload bytes", bytes.len() - at)));
    }
    Ok((header, set))
}

fn read(path: &Path, want: ModelKind) -> Result<(Header, ParamSet)> {
    if !path.is_file() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    let (header, params) = decode(&fs::read(path)?)?;
    if header.kind != want {
        return Err(corrupt(format!("expected a {want:?} checkpoint, found {:?}", header.kind)));
    }
    Ok((header, params))
}

fn config_of<T: DeserializeOwned>(header: &Header) -> Result<T> {
    serde_json::from_value(header.config.clone()).map_err(|e| corrupt(format!("config: {e}")))
}

pub fn save_backbone(path: &Path, model: &Backbone) -> Result<()> {
    let bytes = encode(ModelKind::Backbone, model.version_tag(), model.config(), model.params())?;
    fs::write(path, bytes)?;
    Ok(())
}

pub fn load_backbone(path: &Path) -> Result<Backbone> {
    let (header, params) = read(path, ModelKind::Backbone)?;
    let config: BackboneConfig = config_of(&header)?;
    let mut model = Backbone::new(config, 0).map_err(|e| corrupt(e.to_string()))?;
    model.load_params(params)?;
    model.set_version_tag(header.version_tag);
    Ok(model)
}

pub fn save_projector(path: &Path, projector: &PrincipalProjector, version_tag: usize) -> Result<()> {
    let bytes = encode(ModelKind::Projector, version_tag, projector.config(), projector.params())?;
    fs::write(path, bytes)?;
    Ok(())
}

pub fn load_projector(path: &Path) -> Result<PrincipalProjector> {
    let (header, params) = read(path, ModelKind::Projector)?;
    let config: ProjectorConfig = config_of(&header)?;
    PrincipalProjector::from_params(config, params).map_err(|e| match e {
        Error::CorruptCheckpoint(_) => e,
        other => corrupt(other.to_string()),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rounded_model() -> Backbone {
        let mut m = Backbone::new(BackboneConfig::desk(), 3).unwrap();
        m.params_mut().round_to_f32();
        m.set_version_tag(2);
        m
    }

    #[test]
    fn backbone_round_trip_is_exact_after_f32_rounding() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let m = rounded_model();
        save_backbone(&path, &m).unwrap();
        let back = load_backbone(&path).unwrap();
        assert_eq!(back.hash(), m.hash());
        assert_eq!(back.version_tag(), 2);
        assert_eq!(back.config(), m.config());
    }

    #[test]
    fn projector_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.ckpt");
        let p = PrincipalProjector::new(ProjectorConfig::new(16, 4), 1).unwrap();
        save_projector(&path, &p, 1).unwrap();
        let back = load_projector(&path).unwrap();
        assert!(back.is_frozen());
        let mut rounded = p.params().clone();
        rounded.round_to_f32();
        assert_eq!(back.params(), &rounded);
        assert_eq!(load_backbone(&path).unwrap_err().code(), "corrupt-checkpoint");
    }

    #[test]
    fn damaged_files_are_rejected() {
        let m = rounded_model();
        let bytes = encode(ModelKind::Backbone, 1, m.config(), m.params()).unwrap();
        assert!(decode(&bytes[..bytes.len() - 4]).is_err());
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(decode(&extra).is_err());
        assert!(decode(b"hello\n").is_err());

        // Header claims a different width than the payload holds.
        let mut other = Backbone::new(BackboneConfig { base_channels: 8, ..BackboneConfig::desk() }, 0).unwrap();
        other.params_mut().round_to_f32();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.ckpt");
        let mismatched = encode(ModelKind::Backbone, 1, other.config(), m.params()).unwrap();
        fs::write(&path, mismatched).unwrap();
        assert_eq!(load_backbone(&path).unwrap_err().code(), "corrupt-checkpoint");
        assert_eq!(load_backbone(&dir.path().join("none")).unwrap_err().code(), "missing-file");
    }
}
