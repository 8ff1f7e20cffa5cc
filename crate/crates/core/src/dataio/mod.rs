//! Embedding persistence, manifests, synthetic matched spaces and
//! correspondence corruption.

pub mod container;
mod manifest;
mod synth;

use std::collections::HashMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::seed::rng_for;

pub use container::{Dtype, Record};
pub use manifest::{Manifest, SpaceEntry, SplitPaths, WeakPairEntry};
pub use synth::{generate_synthetic, Distortion, SynthOutput, SynthSpec, WeakPair};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::invalid(format!("unknown split `{other}`"))),
        }
    }
}

/// `N` matched sample representations of one space.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingMatrix {
    pub space_id: String,
    pub split: Split,
    pub data: Matrix,
    pub sample_ids: Vec<String>,
}

impl EmbeddingMatrix {
    pub fn new(
        space_id: impl Into<String>,
        split: Split,
        data: Matrix,
        sample_ids: Vec<String>,
    ) -> Result<Self> {
        if sample_ids.len() != data.nrows() {
            return Err(Error::shape(format!(
                "{} sample ids for {} rows",
                sample_ids.len(),
                data.nrows()
            )));
        }
        let mut seen = std::collections::HashSet::with_capacity(sample_ids.len());
        if let Some(dup) = sample_ids.iter().find(|id| !seen.insert(id.as_str())) {
            return Err(Error::invalid(format!("duplicate sample id `{dup}`")));
        }
        Ok(Self {
            space_id: space_id.into(),
            split,
            data,
            sample_ids,
        })
    }

    /// Sequential ids `s0, s1, ...`.
    pub fn with_default_ids(space_id: impl Into<String>, split: Split, data: Matrix) -> Self {
        let ids = (0..data.nrows()).map(|i| format!("s{i}")).collect();
        Self {
            space_id: space_id.into(),
            split,
            data,
            sample_ids: ids,
        }
    }

    pub fn rows(&self) -> usize {
        self.data.nrows()
    }

    pub fn dim(&self) -> usize {
        self.data.ncols()
    }

    /// Rows reordered so that output row `i` is input row `order[i]`.
    pub fn reordered(&self, order: &[usize]) -> Self {
        let data = select_rows(&self.data, order);
        let sample_ids = order.iter().map(|&i| self.sample_ids[i].clone()).collect();
        Self {
            space_id: self.space_id.clone(),
            split: self.split,
            data,
            sample_ids,
        }
    }
}

pub fn select_rows(m: &Matrix, order: &[usize]) -> Matrix {
    Matrix::from_fn(order.len(), m.ncols(), |i, j| m[(order[i], j)])
}

/// Embeddings are stored as `f32`; entries round-trip bit-exactly when
/// they are representable in single precision.
pub fn write_embeddings(e: &EmbeddingMatrix, path: &Path) -> Result<()> {
    let record = Record {
        data: e.data.clone(),
        row_ids: e.sample_ids.clone(),
        meta: Some(serde_json::json!({
            "space_id": e.space_id,
            "split": e.split,
        })),
    };
    container::write_record(path, &record, Dtype::F32)
}

pub fn read_embeddings(path: &Path) -> Result<EmbeddingMatrix> {
    let record = container::read_record(path)?;
    let meta = record.meta.unwrap_or(serde_json::Value::Null);
    let space_id = meta
        .get("space_id")
        .and_then(|v| v.as_str())
        .map(str::to_owned)
        .unwrap_or_else(|| {
            path.file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_default()
        });
    let split = match meta.get("split").and_then(|v| v.as_str()) {
        Some(s) => s.parse()?,
        None => Split::Train,
    };
    let ids = if record.row_ids.is_empty() {
        (0..record.data.nrows()).map(|i| format!("s{i}")).collect()
    } else {
        record.row_ids
    };
    EmbeddingMatrix::new(space_id, split, record.data, ids)
}

/// Row correspondence: row `i` of one space matches row `permutation[i]` of another.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Correspondence {
    permutation: Vec<usize>,
}

impl Correspondence {
    pub fn identity(n: usize) -> Self {
        Self {
            permutation: (0..n).collect(),
        }
    }

    pub fn new(permutation: Vec<usize>) -> Result<Self> {
        let n = permutation.len();
        let mut hit = vec![false; n];
        for &p in &permutation {
            if p >= n || std::mem::replace(&mut hit[p], true) {
                return Err(Error::Correspondence(format!(
                    "not a bijection on 0..{n} (entry {p})"
                )));
            }
        }
        Ok(Self { permutation })
    }

    /// Match rows of `from` to rows of `to` by sample id.
    pub fn from_ids(from: &[String], to: &[String]) -> Result<Self> {
        if from.len() != to.len() {
            return Err(Error::Correspondence(format!(
                "{} ids vs {} ids",
                from.len(),
                to.len()
            )));
        }
        let index: HashMap<&str, usize> =
            to.iter().enumerate().map(|(i, s)| (s.as_str(), i)).collect();
        let permutation = from
            .iter()
            .map(|id| {
                index
                    .get(id.as_str())
                    .copied()
                    .ok_or_else(|| Error::Correspondence(format!("sample id `{id}` has no match")))
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(permutation)
    }

    pub fn len(&self) -> usize {
        self.permutation.len()
    }

    pub fn is_empty(&self) -> bool {
        self.permutation.is_empty()
    }

    pub fn as_slice(&self) -> &[usize] {
        &self.permutation
    }

    pub fn target_of(&self, i: usize) -> usize {
        self.permutation[i]
    }
}

/// Permute exactly `⌊fraction·N⌋` randomly chosen entries among themselves.
pub fn corrupt_correspondence(c: &Correspondence, fraction: f64, seed: u64) -> Result<Correspondence> {
    corrupt_correspondence_with_block(c, fraction, seed).map(|(out, _)| out)
}

/// As [`corrupt_correspondence`], also returning the sorted block of
/// selected positions (which may include accidental fixed points).
pub fn corrupt_correspondence_with_block(
    c: &Correspondence,
    fraction: f64,
    seed: u64,
) -> Result<(Correspondence, Vec<usize>)> {
    if !(0.0..=1.0).contains(&fraction) {
        return Err(Error::invalid(format!("fraction {fraction} outside [0, 1]")));
    }
    let n = c.len();
    let k = (fraction * n as f64).floor() as usize;
    let mut rng = rng_for(seed, "corrupt-correspondence");
    let mut chosen = rand::seq::index::sample(&mut rng, n, k).into_vec();
    chosen.sort_unstable();
    let mut shuffled = chosen.clone();
    shuffled.shuffle(&mut rng);
    let mut permutation = c.permutation.clone();
    for (&dst, &src) in chosen.iter().zip(&shuffled) {
        permutation[dst] = c.permutation[src];
    }
    Ok((Correspondence { permutation }, chosen))
}

/// Collapse rows to one mean row per label, in ascending label order.
///
/// For data without per-sample pairing across spaces (only shared labels),
/// applying this to every space gives row-aligned identity-level matches.
/// Output sample ids are `id<label>`.
pub fn identity_means(e: &EmbeddingMatrix, labels: &HashMap<String, usize>) -> Result<EmbeddingMatrix> {
    let mut groups: std::collections::BTreeMap<usize, Vec<usize>> = Default::default();
    for (i, id) in e.sample_ids.iter().enumerate() {
        let label = labels
            .get(id)
            .ok_or_else(|| Error::Correspondence(format!("no label for sample `{id}`")))?;
        groups.entry(*label).or_default().push(i);
    }
    if groups.is_empty() {
        return Err(Error::invalid(format!("space `{}` has no rows", e.space_id)));
    }
    let mut data = Matrix::zeros(groups.len(), e.dim());
    for (r, rows) in groups.values().enumerate() {
        let mut acc = data.row_mut(r);
        for &i in rows {
            acc += e.data.row(i);
        }
        acc /= rows.len() as f64;
    }
    let ids = groups.keys().map(|l| format!("id{l}")).collect();
    EmbeddingMatrix::new(e.space_id.clone(), e.split, data, ids)
}

/// Reorder every space to the sample order of the first one.
pub fn align_by_ids(spaces: &[EmbeddingMatrix]) -> Result<Vec<EmbeddingMatrix>> {
    let Some(first) = spaces.first() else {
        return Ok(Vec::new());
    };
    spaces
        .iter()
        .map(|s| {
            let c = Correspondence::from_ids(&first.sample_ids, &s.sample_ids)?;
            Ok(s.reordered(c.as_slice()))
        })
        .collect()
}

/// Verify that all spaces share the same sample ids in the same order.
pub fn check_aligned(spaces: &[EmbeddingMatrix]) -> Result<()> {
    let Some(first) = spaces.first() else {
        return Ok(());
    };
    for s in &spaces[1..] {
        if s.rows() != first.rows() {
            return Err(Error::Correspondence(format!(
                "space `{}` has {} rows, `{}` has {}",
                s.space_id,
                s.rows(),
                first.space_id,
                first.rows()
            )));
        }
        if s.sample_ids != first.sample_ids {
            return Err(Error::Correspondence(format!(
                "sample ids of `{}` do not match `{}`",
                s.space_id, first.space_id
            )));
        }
    }
    Ok(())
}
