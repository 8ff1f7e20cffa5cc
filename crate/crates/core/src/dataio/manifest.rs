use std::collections::HashMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{read_embeddings, EmbeddingMatrix, Split};
use crate::error::{Error, Result};

/// One space of a dataset. `path` may contain `{split}`, which is replaced
/// by the split's entry in [`SplitPaths`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpaceEntry {
    pub id: String,
    pub path: String,
    pub dim: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitPaths {
    pub train: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub val: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub test: Option<String>,
}

impl SplitPaths {
    pub fn get(&self, split: Split) -> Option<&str> {
        match split {
            Split::Train => Some(&self.train),
            Split::Val => self.val.as_deref(),
            Split::Test => self.test.as_deref(),
        }
    }
}

/// Marks a deliberately corrupted ("fragile") group of spaces.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeakPairEntry {
    pub spaces: Vec<String>,
    pub strength: f64,
}

/// Dataset description. Relative paths resolve against the manifest's directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub spaces: Vec<SpaceEntry>,
    pub splits: SplitPaths,
    /// Label file template: one `sample_id<TAB>label` line per sample.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub labels: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub common_dim: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub weak_pair: Option<WeakPairEntry>,
    #[serde(skip)]
    pub base_dir: PathBuf,
}

fn expand(template: &str, split_value: &str) -> String {
    template.replace("{split}", split_value)
}

impl Manifest {
    /// Parse and validate: dims positive, ids unique, referenced files present.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut manifest: Manifest = serde_json::from_str(&text)?;
        manifest.base_dir = path
            .parent()
            .map(Path::to_path_buf)
            .unwrap_or_else(|| PathBuf::from("."));
        manifest.validate()?;
        Ok(manifest)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }

    pub fn validate(&self) -> Result<()> {
        if self.spaces.is_empty() {
            return Err(Error::invalid("manifest lists no spaces"));
        }
        let mut seen = std::collections::HashSet::new();
        for s in &self.spaces {
            if s.dim == 0 {
                return Err(Error::invalid(format!("space `{}` has dim 0", s.id)));
            }
            if !seen.insert(s.id.as_str()) {
                return Err(Error::invalid(format!("duplicate space id `{}`", s.id)));
            }
        }
        if self.common_dim == Some(0) {
            return Err(Error::invalid("common_dim must be positive"));
        }
        for split in Split::ALL {
            if self.splits.get(split).is_none() {
                continue;
            }
            for i in 0..self.spaces.len() {
                let p = self.space_path(i, split).expect("split present");
                if !p.is_file() {
                    return Err(Error::invalid(format!(
                        "space `{}` {split} file {} does not exist",
                        self.spaces[i].id,
                        p.display()
                    )));
                }
            }
            if let Some(p) = self.labels_path(split) {
                if !p.is_file() {
                    return Err(Error::invalid(format!(
                        "{split} label file {} does not exist",
                        p.display()
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn space_index(&self, id: &str) -> Option<usize> {
        self.spaces.iter().position(|s| s.id == id)
    }

    pub fn space_path(&self, index: usize, split: Split) -> Option<PathBuf> {
        let value = self.splits.get(split)?;
        Some(self.base_dir.join(expand(&self.spaces[index].path, value)))
    }

    pub fn labels_path(&self, split: Split) -> Option<PathBuf> {
        let value = self.splits.get(split)?;
        let template = self.labels.as_ref()?;
        Some(self.base_dir.join(expand(template, value)))
    }

    pub fn has_split(&self, split: Split) -> bool {
        self.splits.get(split).is_some()
    }

    pub fn all_dims_equal(&self) -> bool {
        self.spaces.windows(2).all(|w| w[0].dim == w[1].dim)
    }

    /// Read every space for `split`, checking declared dims and split tags.
    pub fn load_split(&self, split: Split) -> Result<Vec<EmbeddingMatrix>> {
        if !self.has_split(split) {
            return Err(Error::invalid(format!("manifest has no {split} split")));
        }
        self.spaces
            .iter()
            .enumerate()
            .map(|(i, entry)| {
                let path = self.space_path(i, split).expect("split present");
                let mut e = read_embeddings(&path)?;
                if e.dim() != entry.dim {
                    return Err(Error::shape(format!(
                        "space `{}` declares dim {} but {} has {}",
                        entry.id,
                        entry.dim,
                        path.display(),
                        e.dim()
                    )));
                }
                e.space_id = entry.id.clone();
                e.split = split;
                Ok(e)
            })
            .collect()
    }

    pub fn load_labels(&self, split: Split) -> Result<Option<HashMap<String, usize>>> {
        let Some(path) = self.labels_path(split) else {
            return Ok(None);
        };
        read_labels(&path).map(Some)
    }
}

pub fn read_labels(path: &Path) -> Result<HashMap<String, usize>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut out = HashMap::new();
    for (lineno, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let (id, label) = line.split_once('\t').ok_or_else(|| {
            Error::invalid(format!("{}:{}: expected `id<TAB>label`", path.display(), lineno + 1))
        })?;
        let label = label.trim().parse().map_err(|_| {
            Error::invalid(format!("{}:{}: bad label `{label}`", path.display(), lineno + 1))
        })?;
        out.insert(id.to_owned(), label);
    }
    Ok(out)
}

pub fn write_labels(path: &Path, ids: &[String], labels: &[usize]) -> Result<()> {
    let mut text = String::new();
    for (id, l) in ids.iter().zip(labels) {
        text.push_str(id);
        text.push('\t');
        text.push_str(&l.to_string());
        text.push('\n');
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}
