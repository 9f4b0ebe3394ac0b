use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use super::ParamSet;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

const MAGIC: &str = "warpsynth-tensors 1";

/// Named tensors plus string metadata, saved as a text manifest
/// (`<base>.manifest`) next to a flat little-endian `f64` buffer (`<base>.bin`).
#[derive(Clone, Debug, Default, PartialEq)]
pub struct TensorStore {
    pub meta: BTreeMap<String, String>,
    entries: Vec<(String, Tensor)>,
}

fn format_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Format(msg.into()))
}

fn paths(base: &Path) -> (PathBuf, PathBuf) {
    (base.with_extension("manifest"), base.with_extension("bin"))
}

impl TensorStore {
    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) -> Result<()> {
        let name = name.into();
        if name.is_empty() || name.contains(char::is_whitespace) {
            return format_err(format!("tensor name `{name}` must be non-empty without whitespace"));
        }
        if self.get(&name).is_some() {
            return format_err(format!("duplicate tensor `{name}`"));
        }
        self.entries.push((name, t));
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn require(&self, name: &str) -> Result<&Tensor> {
        self.get(name).ok_or_else(|| Error::Format(format!("missing tensor `{name}`")))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(n, _)| n.as_str())
    }

    pub fn meta_value(&self, key: &str) -> Result<&str> {
        self.meta.get(key).map(String::as_str).ok_or_else(|| Error::Format(format!("missing metadata `{key}`")))
    }

    /// Stores every parameter as `<prefix>.<name>`.
    pub fn insert_params(&mut self, prefix: &str, p: &ParamSet) -> Result<()> {
        for (n, t) in p.names().iter().zip(p.tensors()) {
            self.insert(format!("{prefix}.{n}"), t.clone())?;
        }
        Ok(())
    }

    /// Reads back what [`TensorStore::insert_params`] wrote, checking shapes.
    pub fn load_params(&self, prefix: &str, p: &mut ParamSet) -> Result<()> {
        let values =
            p.names().iter().map(|n| self.require(&format!("{prefix}.{n}")).cloned()).collect::<Result<Vec<_>>>()?;
        p.assign(values)
    }

    pub fn save(&self, base: &Path) -> Result<()> {
        let (manifest, bin) = paths(base);
        let mut text = format!("{MAGIC}\n");
        for (k, v) in &self.meta {
            if k.contains(char::is_whitespace) || v.contains('\n') {
                return format_err(format!("metadata `{k}` is not representable"));
            }
            text.push_str(&format!("meta {k} {v}\n"));
        }
        let mut bytes = Vec::with_capacity(self.entries.iter().map(|(_, t)| t.len() * 8).sum());
        for (name, t) in &self.entries {
            let shape = if t.shape().is_empty() {
                "scalar".to_string()
            } else {
                t.shape().iter().map(usize::to_string).collect::<Vec<_>>().join("x")
            };
            text.push_str(&format!("tensor {name} f64 {shape} {}\n", bytes.len()));
            for v in t.data() {
                bytes.extend_from_slice(&v.to_le_bytes());
            }
        }
        fs::File::create(&bin)?.write_all(&bytes)?;
        fs::write(&manifest, text)?;
        Ok(())
    }

    pub fn load(base: &Path) -> Result<Self> {
        let (manifest, bin) = paths(base);
        let text = fs::read_to_string(&manifest)?;
        let bytes = fs::read(&bin)?;
        let mut lines = text.lines();
        if lines.next() != Some(MAGIC) {
            return format_err(format!("{} is not a tensor manifest", manifest.display()));
        }
        let mut store = TensorStore::default();
        for line in lines.filter(|l| !l.trim().is_empty()) {
            let mut it = line.splitn(3, ' ');
            match (it.next(), it.next(), it.next()) {
                (Some("meta"), Some(k), v) => {
                    store.meta.insert(k.to_string(), v.unwrap_or("").to_string());
                }
                (Some("tensor"), Some(name), Some(rest)) => {
                    let fields: Vec<&str> = rest.split(' ').collect();
                    let [dtype, shape, offset] = fields[..] else {
                        return format_err(format!("bad tensor line `{line}`"));
                    };
                    if dtype != "f64" {
                        return format_err(format!("unsupported dtype `{dtype}`"));
                    }
                    let shape: Vec<usize> = if shape == "scalar" {
                        Vec::new()
                    } else {
                        shape
                            .split('x')
                            .map(str::parse)
                            .collect::<std::result::Result<_, _>>()
                            .map_err(|_| Error::Format(format!("bad shape in `{line}`")))?
                    };
                    let offset: usize = offset.parse().map_err(|_| Error::Format(format!("bad offset in `{line}`")))?;
                    let n: usize = shape.iter().product();
                    let raw = bytes
                        .get(offset..offset + 8 * n)
                        .ok_or_else(|| Error::Format(format!("`{name}` extends past the end of {}", bin.display())))?;
                    let data =
                        raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk"))).collect();
                    store.insert(name, Tensor::new(shape, data)?)?;
                }
                _ => return format_err(format!("unrecognized manifest line `{line}`")),
            }
        }
        Ok(store)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let mut s = TensorStore::default();
        s.meta.insert("epoch".into(), "3".into());
        s.meta.insert("config".into(), "EqSim+Com".into());
        s.insert("a.w", Tensor::from_fn(&[2, 3], |i| i as f64 * 0.1 - 1e-300)).unwrap();
        s.insert("s", Tensor::scalar(f64::MIN_POSITIVE)).unwrap();
        assert!(s.insert("s", Tensor::scalar(0.0)).is_err());
        let base = dir.path().join("ckpt");
        s.save(&base).unwrap();
        let back = TensorStore::load(&base).unwrap();
        assert_eq!(back, s);
        assert_eq!(back.meta_value("epoch").unwrap(), "3");

        let mut p = ParamSet::default();
        p.push("w", Tensor::zeros(&[2, 3]));
        back.load_params("a", &mut p).unwrap();
        assert_eq!(p.tensors()[0], *s.get("a.w").unwrap());
        let mut wrong = ParamSet::default();
        wrong.push("w", Tensor::zeros(&[3, 2]));
        assert!(back.load_params("a", &mut wrong).is_err());
    }

    #[test]
    fn truncated_buffer_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let mut s = TensorStore::default();
        s.insert("x", Tensor::ones(&[4])).unwrap();
        let base = dir.path().join("t");
        s.save(&base).unwrap();
        fs::write(base.with_extension("bin"), [0u8; 16]).unwrap();
        assert!(matches!(TensorStore::load(&base), Err(Error::Format(_))));
    }
}
