use std::collections::HashSet;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};

pub const HEADER: &str = "slide_id,patient_id,label,feature_path";

#[derive(Clone, Debug, PartialEq)]
pub struct ManifestEntry {
    pub slide_id: String,
    pub patient_id: String,
    pub label: usize,
    /// Path as written in the manifest; relative paths resolve against the manifest directory.
    pub feature_path: PathBuf,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Manifest {
    pub class_names: Vec<String>,
    pub feature_dim: usize,
    pub entries: Vec<ManifestEntry>,
    pub base_dir: PathBuf,
}

impl Manifest {
    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn resolve(&self, entry: &ManifestEntry) -> PathBuf {
        if entry.feature_path.is_absolute() {
            entry.feature_path.clone()
        } else {
            self.base_dir.join(&entry.feature_path)
        }
    }

    pub fn labels(&self) -> Vec<usize> {
        self.entries.iter().map(|e| e.label).collect()
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::new();
        writeln!(s, "#classes={}", self.class_names.join(",")).unwrap();
        writeln!(s, "#dim={}", self.feature_dim).unwrap();
        writeln!(s, "{HEADER}").unwrap();
        for e in &self.entries {
            writeln!(
                s,
                "{},{},{},{}",
                e.slide_id,
                e.patient_id,
                self.class_names[e.label],
                e.feature_path.display()
            )
            .unwrap();
        }
        s
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }
}

/// Parses manifest text without touching the filesystem.
pub fn parse_manifest(text: &str, path: &Path) -> Result<Manifest> {
    let err = |line: usize, message: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        message,
    };

    let mut class_names: Option<Vec<String>> = None;
    let mut feature_dim: Option<usize> = None;
    let mut saw_header = false;
    let mut entries = Vec::new();
    let mut seen = HashSet::new();

    for (idx, raw) in text.lines().enumerate() {
        let line_no = idx + 1;
        let line = raw.trim_end_matches('\r');
        if line.trim().is_empty() {
            continue;
        }
        if let Some(rest) = line.strip_prefix('#') {
            if let Some(v) = rest.strip_prefix("classes=") {
                let names: Vec<String> = v.split(',').map(|s| s.trim().to_string()).collect();
                if names.iter().any(String::is_empty) {
                    return Err(err(line_no, "empty class name".into()));
                }
                if names.len() < 2 {
                    return Err(err(line_no, format!("need at least 2 classes, got {}", names.len())));
                }
                let uniq: HashSet<&String> = names.iter().collect();
                if uniq.len() != names.len() {
                    return Err(err(line_no, "duplicate class name".into()));
                }
                class_names = Some(names);
            } else if let Some(v) = rest.strip_prefix("dim=") {
                let d: usize = v
                    .trim()
                    .parse()
                    .map_err(|_| err(line_no, format!("invalid dim {v:?}")))?;
                if d == 0 {
                    return Err(err(line_no, "dim must be positive".into()));
                }
                feature_dim = Some(d);
            }
            continue;
        }
        if !saw_header {
            let cols: Vec<&str> = line.split(',').map(str::trim).collect();
            for want in ["slide_id", "patient_id", "label", "feature_path"] {
                if !cols.contains(&want) {
                    return Err(err(line_no, format!("missing column {want:?}")));
                }
            }
            if cols != ["slide_id", "patient_id", "label", "feature_path"] {
                return Err(err(line_no, format!("expected header {HEADER:?}")));
            }
            saw_header = true;
            continue;
        }
        let classes = class_names
            .as_ref()
            .ok_or_else(|| err(line_no, "missing #classes= line before data".into()))?;
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        if fields.len() != 4 {
            return Err(err(line_no, format!("expected 4 columns, got {}", fields.len())));
        }
        if fields.iter().any(|f| f.is_empty()) {
            return Err(err(line_no, "empty field".into()));
        }
        let label = classes
            .iter()
            .position(|c| c == fields[2])
            .ok_or_else(|| err(line_no, format!("unknown label {:?}", fields[2])))?;
        if !seen.insert(fields[0].to_string()) {
            return Err(err(line_no, format!("duplicate slide_id {:?}", fields[0])));
        }
        entries.push(ManifestEntry {
            slide_id: fields[0].to_string(),
            patient_id: fields[1].to_string(),
            label,
            feature_path: PathBuf::from(fields[3]),
        });
    }

    let class_names = class_names.ok_or_else(|| err(0, "missing #classes= line".into()))?;
    let feature_dim = feature_dim.ok_or_else(|| err(0, "missing #dim= line".into()))?;
    if !saw_header {
        return Err(err(0, format!("missing header {HEADER:?}")));
    }
    Ok(Manifest {
        class_names,
        feature_dim,
        entries,
        base_dir: path.parent().map(Path::to_path_buf).unwrap_or_default(),
    })
}

/// Reads and validates a manifest, including that every feature file exists.
pub fn load_manifest(path: &Path) -> Result<Manifest> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let manifest = parse_manifest(&text, path)?;
    for e in &manifest.entries {
        let p = manifest.resolve(e);
        if !p.is_file() {
            return Err(Error::NotFound(p));
        }
    }
    Ok(manifest)
}
