//! Tensor fragments on disk: a JSON manifest next to a raw little-endian
//! `f32` payload (`<name>.json` + `<name>.bin`).

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DTYPE: &str = "f32";
pub const BYTE_ORDER: &str = "little";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FragmentKind {
    Codebook,
    Weights,
    Tensor,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Manifest {
    pub kind: FragmentKind,
    #[serde(rename = "K", default, skip_serializing_if = "Option::is_none")]
    pub k: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub t: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub r: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub positions: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub shape: Option<Vec<usize>>,
    pub dtype: String,
    pub byte_order: String,
}

impl Manifest {
    pub fn codebook(k: usize, t: usize, r: usize, positions: usize) -> Self {
        Self::prompt(FragmentKind::Codebook, k, t, r, positions)
    }

    pub fn weights(k: usize, t: usize, r: usize, positions: usize) -> Self {
        Self::prompt(FragmentKind::Weights, k, t, r, positions)
    }

    fn prompt(kind: FragmentKind, k: usize, t: usize, r: usize, positions: usize) -> Self {
        Self {
            kind,
            k: Some(k),
            t: Some(t),
            r: Some(r),
            positions: Some(positions),
            shape: None,
            dtype: DTYPE.into(),
            byte_order: BYTE_ORDER.into(),
        }
    }

    pub fn tensor(shape: &[usize]) -> Self {
        Self {
            kind: FragmentKind::Tensor,
            k: None,
            t: None,
            r: None,
            positions: None,
            shape: Some(shape.to_vec()),
            dtype: DTYPE.into(),
            byte_order: BYTE_ORDER.into(),
        }
    }

    fn field(&self, name: &str, v: Option<usize>) -> Result<usize> {
        v.ok_or_else(|| Error::Format(format!("{:?} manifest is missing {name}", self.kind)))
    }

    /// Logical shape of the payload.
    pub fn shape(&self) -> Result<Vec<usize>> {
        match self.kind {
            FragmentKind::Codebook => {
                Ok(vec![self.field("K", self.k)?, self.field("r", self.r)?, self.field("t", self.t)?])
            }
            FragmentKind::Weights => {
                Ok(vec![self.field("positions", self.positions)?, self.field("K", self.k)?, self.field("r", self.r)?])
            }
            FragmentKind::Tensor => {
                self.shape.clone().ok_or_else(|| Error::Format("tensor manifest is missing shape".into()))
            }
        }
    }

    pub fn numel(&self) -> Result<usize> {
        Ok(self.shape()?.iter().product())
    }

    fn validate(&self) -> Result<()> {
        if self.dtype != DTYPE {
            return Err(Error::Format(format!("unsupported dtype {:?}, expected \"f32\"", self.dtype)));
        }
        if self.byte_order != BYTE_ORDER {
            return Err(Error::Format(format!("unsupported byte order {:?}, expected \"little\"", self.byte_order)));
        }
        self.shape().map(|_| ())
    }
}

pub fn write_fragment(dir: &Path, name: &str, manifest: &Manifest, data: &[f32]) -> Result<()> {
    manifest.validate()?;
    if manifest.numel()? != data.len() {
        return Err(Error::Format(format!(
            "fragment {name}: manifest describes {} values, got {}",
            manifest.numel()?,
            data.len()
        )));
    }
    fs::create_dir_all(dir)?;
    let mut json = serde_json::to_string_pretty(manifest)?;
    json.push('\n');
    fs::write(dir.join(format!("{name}.json")), json)?;
    let bytes: Vec<u8> = data.iter().flat_map(|v| v.to_le_bytes()).collect();
    fs::write(dir.join(format!("{name}.bin")), bytes)?;
    Ok(())
}

pub fn read_fragment(dir: &Path, name: &str) -> Result<(Manifest, Vec<f32>)> {
    let text = fs::read_to_string(dir.join(format!("{name}.json")))?;
    let manifest: Manifest =
        serde_json::from_str(&text).map_err(|e| Error::Format(format!("fragment {name}: bad manifest: {e}")))?;
    manifest.validate()?;
    let bytes = fs::read(dir.join(format!("{name}.bin")))?;
    let expected = manifest.numel()? * 4;
    if bytes.len() != expected {
        return Err(Error::Format(format!("fragment {name}: expected {expected} bytes, found {}", bytes.len())));
    }
    let data = bytes.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
    Ok((manifest, data))
}

pub fn fragment_exists(dir: &Path, name: &str) -> bool {
    dir.join(format!("{name}.json")).exists()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn manifest_layout() {
        let m = Manifest::codebook(24, 32, 20, 60);
        let v: serde_json::Value = serde_json::to_value(&m).unwrap();
        assert_eq!(
            v,
            serde_json::json!({"kind":"codebook","K":24,"t":32,"r":20,"positions":60,"dtype":"f32","byte_order":"little"})
        );
    }

    #[test]
    fn round_trip_and_corruption() {
        let dir = tempfile::tempdir().unwrap();
        let m = Manifest::weights(2, 3, 2, 3);
        let data: Vec<f32> = (0..12).map(|i| i as f32 * 0.5 - 1.0).collect();
        write_fragment(dir.path(), "w", &m, &data).unwrap();
        let (m2, d2) = read_fragment(dir.path(), "w").unwrap();
        assert_eq!(m2, m);
        assert_eq!(d2, data);

        let bin = dir.path().join("w.bin");
        let bytes = fs::read(&bin).unwrap();
        fs::write(&bin, &bytes[..bytes.len() - 3]).unwrap();
        assert!(matches!(read_fragment(dir.path(), "w"), Err(Error::Format(_))));

        let mut f64_manifest = m.clone();
        f64_manifest.dtype = "f64".into();
        assert!(write_fragment(dir.path(), "x", &f64_manifest, &data).is_err());
        fs::write(dir.path().join("w.json"), serde_json::to_string(&f64_manifest).unwrap()).unwrap();
        fs::write(&bin, &bytes).unwrap();
        assert!(matches!(read_fragment(dir.path(), "w"), Err(Error::Format(_))));

        fs::write(dir.path().join("w.json"), "{not json").unwrap();
        assert!(matches!(read_fragment(dir.path(), "w"), Err(Error::Format(_))));
    }
}
