//! On-disk array archive: a directory holding `manifest.txt` (text index and
//! metadata) and `arrays.bin` (little-endian `f64` payloads back to back).
//!
//! Manifest lines:
//!
//! ```text
//! flowback-archive 1
//! meta <key> <value>
//! array <name> <offset> <dims>
//! ```
//!
//! `offset` counts `f64` elements; `dims` is comma-separated, `-` for a
//! scalar.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::graph::ParamSet;
use crate::tensor::Tensor;

const HEADER: &str = "flowback-archive 1";

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Archive {
    meta: BTreeMap<String, String>,
    arrays: BTreeMap<String, Tensor>,
}

fn check_token(kind: &str, s: &str) -> Result<()> {
    if s.is_empty() || s.chars().any(char::is_whitespace) {
        return Err(Error::Archive(format!(
            "{kind} {s:?} must be non-empty without whitespace"
        )));
    }
    Ok(())
}

impl Archive {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn set_meta(&mut self, key: &str, value: impl ToString) -> Result<()> {
        check_token("meta key", key)?;
        let value = value.to_string();
        if value.contains('\n') {
            return Err(Error::Archive(format!("meta {key} spans lines")));
        }
        self.meta.insert(key.to_owned(), value);
        Ok(())
    }

    pub fn meta(&self, key: &str) -> Option<&str> {
        self.meta.get(key).map(String::as_str)
    }

    pub fn metas(&self) -> impl Iterator<Item = (&String, &String)> {
        self.meta.iter()
    }

    pub fn insert(&mut self, name: &str, t: Tensor) -> Result<()> {
        check_token("array name", name)?;
        self.arrays.insert(name.to_owned(), t);
        Ok(())
    }

    pub fn array(&self, name: &str) -> Option<&Tensor> {
        self.arrays.get(name)
    }

    pub fn require(&self, name: &str) -> Result<&Tensor> {
        self.array(name)
            .ok_or_else(|| Error::Archive(format!("missing array {name}")))
    }

    pub fn arrays(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.arrays.iter()
    }

    /// Stores every parameter under `prefix`.
    pub fn insert_params(&mut self, prefix: &str, params: &ParamSet) -> Result<()> {
        for (name, t) in params.iter() {
            self.insert(&format!("{prefix}{name}"), t.clone())?;
        }
        Ok(())
    }

    /// Collects arrays whose name starts with `prefix`, with the prefix removed.
    pub fn params(&self, prefix: &str) -> ParamSet {
        let mut ps = ParamSet::new();
        for (name, t) in &self.arrays {
            if let Some(rest) = name.strip_prefix(prefix) {
                ps.insert(rest, t.clone());
            }
        }
        ps
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        let mut manifest = format!("{HEADER}\n");
        let mut bin = Vec::new();
        for (k, v) in &self.meta {
            manifest.push_str(&format!("meta {k} {v}\n"));
        }
        let mut offset = 0usize;
        for (name, t) in &self.arrays {
            let dims = if t.shape().is_empty() {
                "-".to_owned()
            } else {
                t.shape()
                    .iter()
                    .map(usize::to_string)
                    .collect::<Vec<_>>()
                    .join(",")
            };
            manifest.push_str(&format!("array {name} {offset} {dims}\n"));
            for v in t.data() {
                bin.extend_from_slice(&v.to_le_bytes());
            }
            offset += t.len();
        }
        fs::write(dir.join("arrays.bin"), bin)?;
        fs::write(dir.join("manifest.txt"), manifest)?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let manifest = fs::read_to_string(dir.join("manifest.txt"))?;
        let bin = fs::read(dir.join("arrays.bin"))?;
        if bin.len() % 8 != 0 {
            return Err(Error::Archive(
                "arrays.bin is not a whole number of f64".into(),
            ));
        }
        let values: Vec<f64> = bin
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        let mut lines = manifest.lines();
        if lines.next().map(str::trim) != Some(HEADER) {
            return Err(Error::Archive(format!(
                "{} is not a flowback archive",
                dir.display()
            )));
        }
        let mut out = Archive::new();
        for (n, line) in lines.enumerate() {
            let bad = || Error::Archive(format!("manifest line {}: {line:?}", n + 2));
            if line.trim().is_empty() {
                continue;
            }
            let (kind, rest) = line.split_once(' ').ok_or_else(bad)?;
            match kind {
                "meta" => {
                    let (k, v) = rest.split_once(' ').unwrap_or((rest, ""));
                    out.meta.insert(k.to_owned(), v.to_owned());
                }
                "array" => {
                    let parts: Vec<&str> = rest.split(' ').collect();
                    let [name, offset, dims] = parts[..] else {
                        return Err(bad());
                    };
                    let offset: usize = offset.parse().map_err(|_| bad())?;
                    let shape: Vec<usize> = if dims == "-" {
                        vec![]
                    } else {
                        dims.split(',')
                            .map(|d| d.parse().map_err(|_| bad()))
                            .collect::<Result<_>>()?
                    };
                    let len: usize = shape.iter().product();
                    let data = values.get(offset..offset + len).ok_or_else(bad)?.to_vec();
                    out.arrays
                        .insert(name.to_owned(), Tensor::new(shape, data)?);
                }
                _ => return Err(bad()),
            }
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrip_preserves_bits() {
        let dir = tempfile::tempdir().unwrap();
        let mut a = Archive::new();
        a.set_meta("patches", 4).unwrap();
        a.set_meta("note", "two words").unwrap();
        a.insert(
            "x",
            Tensor::matrix(2, 2, vec![0.1, -0.0, f64::MIN_POSITIVE, 1e300]).unwrap(),
        )
        .unwrap();
        a.insert("s", Tensor::scalar(std::f64::consts::PI)).unwrap();
        a.save(dir.path()).unwrap();
        let b = Archive::load(dir.path()).unwrap();
        assert_eq!(a, b);
        assert_eq!(
            b.array("x").unwrap().data()[1].to_bits(),
            (-0.0f64).to_bits()
        );
        assert_eq!(b.meta("note"), Some("two words"));
    }

    #[test]
    fn rejects_bad_names_and_corrupt_manifests() {
        let mut a = Archive::new();
        assert!(a.insert("has space", Tensor::scalar(1.0)).is_err());
        let dir = tempfile::tempdir().unwrap();
        fs::write(
            dir.path().join("manifest.txt"),
            "flowback-archive 1\narray x 0 4\n",
        )
        .unwrap();
        fs::write(dir.path().join("arrays.bin"), [0u8; 16]).unwrap();
        assert!(Archive::load(dir.path()).is_err());
    }
}
