use std::fs;
use std::path::{Path, PathBuf};

use super::{Dataset, Example, Target};
use crate::error::{Error, Result};
use crate::model::parse_value;
use crate::scalar::Scalar;
use crate::tensor::{read_stf1, read_stf1_header};

/// List of `(STF1 file, label)` records with a declared token-tensor shape.
///
/// Text form: one `path<TAB>label` line per record. Relative paths resolve
/// against the manifest's directory. A `#shape TxHxWxD` line declares the
/// shape; other `#` lines are comments.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FeatureManifest {
    pub shape: Vec<usize>,
    pub entries: Vec<(PathBuf, usize)>,
}

impl FeatureManifest {
    pub fn parse(text: &str, base: &Path, shape: Option<Vec<usize>>) -> Result<Self> {
        let mut declared = shape;
        let mut entries = Vec::new();
        for (no, line) in text.lines().enumerate() {
            let line = line.trim_end_matches('\r');
            if let Some(rest) = line.strip_prefix("#shape") {
                let dims = rest
                    .trim()
                    .split('x')
                    .map(|d| parse_value::<usize>("#shape", d.trim()))
                    .collect::<Result<Vec<_>>>()?;
                declared.get_or_insert(dims);
                continue;
            }
            if line.trim().is_empty() || line.starts_with('#') {
                continue;
            }
            let (path, label) = line.split_once('\t').ok_or_else(|| {
                Error::Config(format!(
                    "manifest line {}: expected `path<TAB>label`",
                    no + 1
                ))
            })?;
            let label = parse_value::<usize>("label", label.trim())?;
            let path = PathBuf::from(path);
            let path = if path.is_relative() {
                base.join(path)
            } else {
                path
            };
            entries.push((path, label));
        }
        let shape = match declared {
            Some(s) => s,
            None if entries.is_empty() => Vec::new(),
            None => {
                return Err(Error::Config(
                    "manifest declares no token shape (`#shape TxHxWxD`)".into(),
                ))
            }
        };
        Ok(FeatureManifest { shape, entries })
    }

    pub fn read(path: &Path, shape: Option<Vec<usize>>) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let base = path.parent().unwrap_or(Path::new("."));
        Self::parse(&text, base, shape)
    }

    pub fn to_text(&self) -> String {
        let dims: Vec<String> = self.shape.iter().map(|d| d.to_string()).collect();
        let mut s = format!("#shape {}\n", dims.join("x"));
        for (p, l) in &self.entries {
            s.push_str(&format!("{}\t{l}\n", p.display()));
        }
        s
    }
}

/// Shape-validated, lazily loaded feature dataset.
#[derive(Clone, Debug)]
pub struct FeatureDataset {
    manifest: FeatureManifest,
    classes: Option<usize>,
}

/// Checks every file's header against the manifest; payloads load on access.
/// With `classes` given, labels must lie below it.
pub fn load_features(manifest: FeatureManifest, classes: Option<usize>) -> Result<FeatureDataset> {
    for (path, label) in &manifest.entries {
        let header = read_stf1_header(path)?;
        if header.shape != manifest.shape {
            return Err(Error::format(
                path,
                format!(
                    "shape mismatch: file is {:?}, manifest declares {:?}",
                    header.shape, manifest.shape
                ),
            ));
        }
        if let Some(k) = classes {
            if *label >= k {
                return Err(Error::format(path, format!("label {label} not below {k}")));
            }
        }
    }
    Ok(FeatureDataset { manifest, classes })
}

impl FeatureDataset {
    pub fn manifest(&self) -> &FeatureManifest {
        &self.manifest
    }

    pub fn classes(&self) -> Option<usize> {
        self.classes
    }
}

impl<T: Scalar> Dataset<T> for FeatureDataset {
    fn len(&self) -> usize {
        self.manifest.entries.len()
    }

    fn get(&self, index: usize) -> Result<Example<T>> {
        let (path, label) = self.manifest.entries.get(index).ok_or_else(|| {
            Error::InvalidArgument(format!("index {index} of {}", self.manifest.entries.len()))
        })?;
        let input = read_stf1::<T>(path)?;
        if input.shape() != self.manifest.shape.as_slice() {
            return Err(Error::format(
                path,
                "shape changed since the manifest was checked",
            ));
        }
        Ok(Example {
            input,
            target: Target::Class(*label),
        })
    }
}
