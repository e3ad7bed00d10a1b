use std::fmt;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imageio::is_supported_extension;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Label {
    Real,
    Fake,
}

impl Label {
    /// 1.0 for fake (the positive class), 0.0 for real.
    pub fn target(self) -> f64 {
        match self {
            Label::Real => 0.0,
            Label::Fake => 1.0,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Label::Real => "real",
            Label::Fake => "fake",
        }
    }
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    #[default]
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Split::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::arg(format!("unknown split {s:?}")))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestRecord {
    /// Relative paths resolve against the manifest's base directory.
    pub path: String,
    pub id: String,
    pub label: Label,
    pub source: String,
    #[serde(default)]
    pub split: Split,
}

/// JSON-lines image index.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct DatasetManifest {
    pub records: Vec<ManifestRecord>,
    /// Directory that relative record paths are resolved against.
    pub base: Option<PathBuf>,
}

impl DatasetManifest {
    pub fn new(records: Vec<ManifestRecord>, base: Option<PathBuf>) -> Self {
        Self { records, base }
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn resolve(&self, record: &ManifestRecord) -> PathBuf {
        let p = Path::new(&record.path);
        match &self.base {
            Some(base) if p.is_relative() => base.join(p),
            _ => p.to_path_buf(),
        }
    }

    /// Records of one split, in manifest order.
    pub fn split(&self, split: Split) -> DatasetManifest {
        self.filtered(|r| r.split == split)
    }

    pub fn filtered(&self, mut keep: impl FnMut(&ManifestRecord) -> bool) -> DatasetManifest {
        DatasetManifest {
            records: self.records.iter().filter(|r| keep(r)).cloned().collect(),
            base: self.base.clone(),
        }
    }

    /// Ids whose file does not exist.
    pub fn missing(&self) -> Vec<String> {
        self.records
            .iter()
            .filter(|r| !self.resolve(r).exists())
            .map(|r| r.id.clone())
            .collect()
    }

    pub fn check_unique_ids(&self) -> Result<()> {
        let mut seen = std::collections::HashSet::new();
        for (i, r) in self.records.iter().enumerate() {
            if !seen.insert(r.id.as_str()) {
                return Err(Error::Format {
                    record: i,
                    message: format!("duplicate id {:?}", r.id),
                });
            }
        }
        Ok(())
    }

    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for r in &self.records {
            out.push_str(&serde_json::to_string(r).expect("records serialize"));
            out.push('\n');
        }
        out
    }

    pub fn from_jsonl(text: &str, base: Option<PathBuf>) -> Result<Self> {
        let mut records = Vec::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let r: ManifestRecord = serde_json::from_str(line).map_err(|e| Error::Format {
                record: records.len(),
                message: format!("line {}: {e}", i + 1),
            })?;
            records.push(r);
        }
        let m = Self { records, base };
        m.check_unique_ids()?;
        Ok(m)
    }

    /// Loads a manifest; relative paths resolve against its directory.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let base = path.parent().map(Path::to_path_buf);
        let m = Self::from_jsonl(&text, base)?;
        let missing = m.missing();
        if !missing.is_empty() {
            log::warn!("{} manifest records point at missing files, first: {}", missing.len(), missing[0]);
        }
        Ok(m)
    }

    /// Writes the manifest. When it lands in a directory other than its base,
    /// relative record paths are rewritten as absolute paths so they still
    /// resolve.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let dest_dir = path.parent().unwrap_or(Path::new(""));
        let out = match &self.base {
            Some(base) if !same_dir(base, dest_dir) => {
                let base = std::path::absolute(base).map_err(|e| Error::io(base, e))?;
                let records = self
                    .records
                    .iter()
                    .map(|r| {
                        let mut r = r.clone();
                        if Path::new(&r.path).is_relative() {
                            r.path = base.join(&r.path).to_string_lossy().into_owned();
                        }
                        r
                    })
                    .collect();
                DatasetManifest::new(records, None)
            }
            _ => self.clone(),
        };
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(out.to_jsonl().as_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn count(&self, label: Label) -> usize {
        self.records.iter().filter(|r| r.label == label).count()
    }
}

fn collect_files(dir: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
    let entries = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    for entry in entries {
        let entry = entry.map_err(|e| Error::io(dir, e))?;
        let p = entry.path();
        if p.is_dir() {
            collect_files(&p, out)?;
        } else if is_supported_extension(&p) {
            out.push(p);
        }
    }
    Ok(())
}

fn slash_path(p: &Path) -> String {
    p.components()
        .map(|c| c.as_os_str().to_string_lossy().into_owned())
        .collect::<Vec<_>>()
        .join("/")
}

/// Indexes `root/real/**` and `root/fake/**`. The label comes from the top
/// directory, the source from the second-level directory (or `"unknown"`
/// for files directly under the class directory). Records are sorted by path
/// and `id` is the root-relative path with `/` separators.
fn same_dir(a: &Path, b: &Path) -> bool {
    let norm = |p: &Path| {
        let p = if p.as_os_str().is_empty() { Path::new(".") } else { p };
        p.canonicalize().ok()
    };
    match (norm(a), norm(b)) {
        (Some(x), Some(y)) => x == y,
        _ => a == b,
    }
}

pub fn build_manifest(root: impl AsRef<Path>) -> Result<DatasetManifest> {
    let root = root.as_ref();
    let mut records = Vec::new();
    let mut found_class = false;
    for label in [Label::Real, Label::Fake] {
        let dir = root.join(label.name());
        if !dir.is_dir() {
            continue;
        }
        found_class = true;
        let mut files = Vec::new();
        collect_files(&dir, &mut files)?;
        for f in files {
            let rel = f.strip_prefix(root).expect("walked under root");
            let rel_in_class = f.strip_prefix(&dir).expect("walked under class dir");
            let mut comps = rel_in_class.components();
            let source = if rel_in_class.components().count() > 1 {
                comps.next().map(|c| c.as_os_str().to_string_lossy().into_owned())
            } else {
                None
            };
            let id = slash_path(rel);
            records.push(ManifestRecord {
                path: id.clone(),
                id,
                label,
                source: source.unwrap_or_else(|| "unknown".into()),
                split: Split::Train,
            });
        }
    }
    if !found_class {
        return Err(Error::Layout(format!(
            "{} contains neither real/ nor fake/",
            root.display()
        )));
    }
    records.sort_by(|a, b| a.path.cmp(&b.path));
    Ok(DatasetManifest {
        records,
        base: Some(root.to_path_buf()),
    })
}
