use std::collections::{BTreeMap, HashSet};
use std::fs::File;
use std::io::Write;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManifestEntry {
    /// Image path; relative paths in the CSV are resolved against the
    /// manifest's directory.
    pub path: PathBuf,
    pub label: String,
    pub label_id: usize,
}

/// Labeled image list. Class ids follow lexicographic order of the names.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DatasetManifest {
    pub entries: Vec<ManifestEntry>,
    pub class_names: Vec<String>,
}

impl DatasetManifest {
    /// Builds a manifest from `(path, label)` pairs, assigning class ids.
    pub fn from_pairs(pairs: Vec<(PathBuf, String)>) -> Result<Self> {
        if pairs.is_empty() {
            return Err(Error::Manifest("manifest has no entries".into()));
        }
        let mut seen = HashSet::new();
        let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
        for (path, label) in &pairs {
            if label.is_empty() {
                return Err(Error::Manifest(format!("empty class label for {}", path.display())));
            }
            if label.contains('\n') {
                return Err(Error::Manifest(format!("class label {label:?} contains a newline")));
            }
            if !seen.insert(path) {
                return Err(Error::Manifest(format!("duplicate path {}", path.display())));
            }
            *counts.entry(label).or_default() += 1;
        }
        let class_names: Vec<String> = counts.keys().map(|s| s.to_string()).collect();
        let entries = pairs
            .into_iter()
            .map(|(path, label)| {
                let label_id = class_names.binary_search(&label).expect("label was counted");
                ManifestEntry {
                    path,
                    label,
                    label_id,
                }
            })
            .collect();
        Ok(DatasetManifest {
            entries,
            class_names,
        })
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    /// Entry counts per class id.
    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.class_names.len()];
        for e in &self.entries {
            counts[e.label_id] += 1;
        }
        counts
    }

    /// Sub-manifest over `indices`, keeping this manifest's class table.
    pub fn subset(&self, indices: &[usize]) -> DatasetManifest {
        DatasetManifest {
            entries: indices.iter().map(|&i| self.entries[i].clone()).collect(),
            class_names: self.class_names.clone(),
        }
    }
}

/// Reads a `path,label` CSV.
pub fn load_manifest(path: impl AsRef<Path>) -> Result<DatasetManifest> {
    let path = path.as_ref();
    let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
    let file = File::open(path)
        .map_err(|e| Error::Manifest(format!("cannot open {}: {e}", path.display())))?;
    let mut reader = csv::ReaderBuilder::new().has_headers(true).from_reader(file);
    let headers = reader
        .headers()
        .map_err(|e| Error::Manifest(format!("{}: {e}", path.display())))?;
    if headers.len() != 2 || &headers[0] != "path" || &headers[1] != "label" {
        return Err(Error::Manifest(format!(
            "{}: header must be `path,label`",
            path.display()
        )));
    }
    let mut pairs = Vec::new();
    for (line, record) in reader.records().enumerate() {
        let record = record.map_err(|e| Error::Manifest(format!("{}: {e}", path.display())))?;
        if record.len() != 2 {
            return Err(Error::Manifest(format!(
                "{}: row {} has {} fields",
                path.display(),
                line + 2,
                record.len()
            )));
        }
        let p = Path::new(&record[0]);
        let resolved = if p.is_absolute() { p.to_path_buf() } else { base.join(p) };
        pairs.push((resolved, record[1].to_string()));
    }
    DatasetManifest::from_pairs(pairs)
        .map_err(|e| Error::Manifest(format!("{}: {e}", path.display())))
}

/// Writes `entries` as a `path,label` CSV. Paths are written as stored.
pub fn write_manifest(path: impl AsRef<Path>, entries: &[ManifestEntry]) -> Result<()> {
    let path = path.as_ref();
    let mut out = String::from("path,label\n");
    for e in entries {
        out.push_str(&format!("{},{}\n", e.path.display(), e.label));
    }
    File::create(path)
        .and_then(|mut f| f.write_all(out.as_bytes()))
        .map_err(|e| Error::io(path, e))
}
