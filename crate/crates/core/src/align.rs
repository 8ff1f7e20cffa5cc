//! Orthogonal alignment: direct pairwise maps, the GPA universe, incremental
//! addition of new spaces, and translation through the universe.
//!
//! All maps act on row vectors. A space's universe map sends `x ↦ x·Ω_m`,
//! so translating from space `n` to space `m` is `x·Ω_n·Ω_mᵀ`.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dataio::container::{self, Dtype, Record};
use crate::dataio::{check_aligned, EmbeddingMatrix};
use crate::error::{Error, Result};
use crate::linalg::{orthogonal_procrustes, Matrix, OrthogonalMap};

fn check_common_dim(spaces: &[EmbeddingMatrix]) -> Result<usize> {
    let first = spaces
        .first()
        .ok_or_else(|| Error::invalid("no spaces given"))?;
    for s in spaces {
        if s.dim() != first.dim() {
            return Err(Error::shape(format!(
                "space `{}` has dim {}, `{}` has {}; project to a common dim first",
                s.space_id,
                s.dim(),
                first.space_id,
                first.dim()
            )));
        }
    }
    Ok(first.dim())
}

/// Directly fitted maps for every ordered pair of spaces.
#[derive(Debug, Clone)]
pub struct PairwiseMaps {
    space_ids: Vec<String>,
    /// Keyed by `(target, source)`.
    maps: BTreeMap<(String, String), OrthogonalMap>,
}

impl PairwiseMaps {
    pub fn len(&self) -> usize {
        self.maps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.maps.is_empty()
    }

    pub fn space_ids(&self) -> &[String] {
        &self.space_ids
    }

    /// The map sending rows of `source` toward `target`.
    pub fn get(&self, target: &str, source: &str) -> Result<&OrthogonalMap> {
        self.maps
            .get(&(target.to_owned(), source.to_owned()))
            .ok_or_else(|| Error::Lookup(format!("{source}->{target}")))
    }

    pub fn translate(&self, x: &Matrix, from: &str, to: &str) -> Result<Matrix> {
        if from == to {
            if !self.space_ids.iter().any(|s| s == from) {
                return Err(Error::Lookup(from.to_owned()));
            }
            return Ok(x.clone());
        }
        Ok(self.get(to, from)?.apply(x))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&(String, String), &OrthogonalMap)> {
        self.maps.iter()
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct PairwiseEntry {
    target: String,
    source: String,
    file: String,
}

#[derive(Debug, Serialize, Deserialize)]
struct PairwiseIndex {
    kind: String,
    space_ids: Vec<String>,
    maps: Vec<PairwiseEntry>,
}

const PAIRWISE_KIND: &str = "pairwise-maps";

impl PairwiseMaps {
    /// Write `pairwise.json` and one `map_<t>_<s>.mwal` per ordered pair (space indices).
    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let pos = |id: &str| self.space_ids.iter().position(|s| s == id).expect("known space");
        let mut entries = Vec::with_capacity(self.maps.len());
        for ((target, source), map) in &self.maps {
            let file = format!("map_{}_{}.mwal", pos(target), pos(source));
            container::write_matrix(&dir.join(&file), map.matrix())?;
            entries.push(PairwiseEntry {
                target: target.clone(),
                source: source.clone(),
                file,
            });
        }
        let index = PairwiseIndex {
            kind: PAIRWISE_KIND.into(),
            space_ids: self.space_ids.clone(),
            maps: entries,
        };
        let path = dir.join("pairwise.json");
        std::fs::write(&path, serde_json::to_string_pretty(&index)? + "\n")
            .map_err(|e| Error::io(&path, e))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join("pairwise.json");
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let index: PairwiseIndex = serde_json::from_str(&text)?;
        if index.kind != PAIRWISE_KIND {
            return Err(Error::invalid(format!(
                "{} describes a `{}`, not pairwise maps",
                path.display(),
                index.kind
            )));
        }
        let mut maps = BTreeMap::new();
        for e in index.maps {
            for id in [&e.target, &e.source] {
                if !index.space_ids.contains(id) {
                    return Err(Error::Lookup(id.clone()));
                }
            }
            let m = OrthogonalMap::new(container::read_matrix(&dir.join(&e.file))?)?;
            maps.insert((e.target, e.source), m);
        }
        Ok(Self {
            space_ids: index.space_ids,
            maps,
        })
    }
}

/// `M(M−1)` independent orthogonal Procrustes solves.
pub fn fit_pairwise(spaces: &[EmbeddingMatrix]) -> Result<PairwiseMaps> {
    check_aligned(spaces)?;
    check_common_dim(spaces)?;
    let mut maps = BTreeMap::new();
    for target in spaces {
        for source in spaces {
            if target.space_id == source.space_id {
                continue;
            }
            let map = orthogonal_procrustes(&source.data, &target.data)?;
            maps.insert((target.space_id.clone(), source.space_id.clone()), map);
        }
    }
    Ok(PairwiseMaps {
        space_ids: spaces.iter().map(|s| s.space_id.clone()).collect(),
        maps,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum InitMode {
    /// Align every space to the first one.
    #[default]
    FirstSpace,
    /// Align every space to the mean of the raw matrices.
    MeanOfRaw,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GpaConfig {
    pub max_iters: usize,
    pub dispersion_rel_tol: f64,
    /// Largest per-map Frobenius change still considered moving.
    #[serde(default = "default_map_tol")]
    pub map_tol: f64,
    #[serde(default)]
    pub init_mode: InitMode,
}

fn default_map_tol() -> f64 {
    1e-11
}

impl Default for GpaConfig {
    fn default() -> Self {
        Self {
            max_iters: 200,
            dispersion_rel_tol: 1e-9,
            map_tol: default_map_tol(),
            init_mode: InitMode::FirstSpace,
        }
    }
}

impl GpaConfig {
    fn validate(&self) -> Result<()> {
        if self.max_iters == 0 {
            return Err(Error::invalid("max_iters must be at least 1"));
        }
        if !(self.dispersion_rel_tol > 0.0) {
            return Err(Error::invalid("dispersion_rel_tol must be positive"));
        }
        Ok(())
    }
}

/// The GPA consensus frame: one orthogonal map per space plus the centroid
/// of the mapped training data.
#[derive(Debug, Clone, PartialEq)]
pub struct Universe {
    consensus: Matrix,
    sample_ids: Vec<String>,
    maps: Vec<OrthogonalMap>,
    space_ids: Vec<String>,
    fit_log: Vec<f64>,
    final_dispersion: f64,
}

fn mapped_mean(xs: &[&Matrix], maps: &[OrthogonalMap]) -> Matrix {
    let mut acc = Matrix::zeros(xs[0].nrows(), xs[0].ncols());
    for (x, map) in xs.iter().zip(maps) {
        acc += map.apply(x);
    }
    acc / xs.len() as f64
}

/// `Σ_m ‖X_m·Ω_m − U‖²_F`.
pub fn dispersion(xs: &[&Matrix], maps: &[OrthogonalMap], consensus: &Matrix) -> f64 {
    xs.iter()
        .zip(maps)
        .map(|(x, map)| (map.apply(x) - consensus).norm_squared())
        .sum()
}

/// Alternate consensus averaging and per-space Procrustes solves until the
/// relative dispersion improvement drops below tolerance and the maps have
/// stopped moving.
///
/// Near the fixed point the evaluated dispersion is dominated by rounding;
/// rounds whose evaluated dispersion ties or exceeds the last logged value by
/// rounding only are applied but not logged, so `fit_log` is nonincreasing.
pub fn fit_gpa(spaces: &[EmbeddingMatrix], cfg: &GpaConfig) -> Result<Universe> {
    cfg.validate()?;
    check_aligned(spaces)?;
    check_common_dim(spaces)?;
    if spaces.len() < 2 {
        return Err(Error::invalid("GPA needs at least two spaces"));
    }
    let xs: Vec<&Matrix> = spaces.iter().map(|s| &s.data).collect();
    let scale: f64 = xs.iter().map(|x| x.norm_squared()).sum();

    let anchor = match cfg.init_mode {
        InitMode::FirstSpace => xs[0].clone(),
        InitMode::MeanOfRaw => {
            let d = xs[0].ncols();
            mapped_mean(&xs, &vec![OrthogonalMap::identity(d); xs.len()])
        }
    };
    let mut maps = xs
        .iter()
        .map(|x| orthogonal_procrustes(x, &anchor))
        .collect::<Result<Vec<_>>>()?;
    let mut consensus = mapped_mean(&xs, &maps);
    let mut current = dispersion(&xs, &maps, &consensus);
    if !current.is_finite() {
        return Err(Error::Numerical("initial dispersion is not finite".into()));
    }
    let mut fit_log = vec![current];
    let rounding = 1e-12 * scale;

    for iter in 0..cfg.max_iters {
        let next_maps = xs
            .iter()
            .map(|x| orthogonal_procrustes(x, &consensus))
            .collect::<Result<Vec<_>>>()?;
        let next_consensus = mapped_mean(&xs, &next_maps);
        let next = dispersion(&xs, &next_maps, &next_consensus);
        if !next.is_finite() {
            return Err(Error::Numerical(format!(
                "dispersion became non-finite at iteration {iter}"
            )));
        }
        let last_logged = *fit_log.last().expect("log starts non-empty");
        if next > last_logged + rounding {
            // Cannot happen in exact arithmetic; keep the better state.
            break;
        }
        let map_change = maps
            .iter()
            .zip(&next_maps)
            .map(|(a, b)| (a.matrix() - b.matrix()).norm())
            .fold(0.0, f64::max);
        let improvement = if current > 0.0 {
            (current - next) / current
        } else {
            0.0
        };
        maps = next_maps;
        consensus = next_consensus;
        current = next;
        if current < last_logged {
            fit_log.push(current);
        }
        if improvement < cfg.dispersion_rel_tol && map_change < cfg.map_tol {
            break;
        }
    }

    Ok(Universe {
        consensus,
        sample_ids: spaces[0].sample_ids.clone(),
        maps,
        space_ids: spaces.iter().map(|s| s.space_id.clone()).collect(),
        fit_log,
        final_dispersion: current,
    })
}

#[derive(Debug, Serialize, Deserialize)]
struct UniverseIndex {
    kind: String,
    space_ids: Vec<String>,
    d: usize,
    dispersion_final: f64,
    fit_log: Vec<f64>,
    consensus: String,
    maps: Vec<String>,
}

const UNIVERSE_KIND: &str = "gpa-universe";

impl Universe {
    /// Assemble from parts; maps must be orthogonal and match the consensus width.
    pub fn from_parts(
        consensus: Matrix,
        sample_ids: Vec<String>,
        space_ids: Vec<String>,
        maps: Vec<OrthogonalMap>,
        fit_log: Vec<f64>,
    ) -> Result<Self> {
        if maps.len() != space_ids.len() {
            return Err(Error::shape(format!(
                "{} maps for {} spaces",
                maps.len(),
                space_ids.len()
            )));
        }
        if let Some(m) = maps.iter().find(|m| m.dim() != consensus.ncols()) {
            return Err(Error::shape(format!(
                "map of dim {} vs consensus dim {}",
                m.dim(),
                consensus.ncols()
            )));
        }
        if !sample_ids.is_empty() && sample_ids.len() != consensus.nrows() {
            return Err(Error::shape("sample ids do not match consensus rows"));
        }
        let final_dispersion = fit_log.last().copied().unwrap_or(f64::NAN);
        Ok(Self {
            consensus,
            sample_ids,
            maps,
            space_ids,
            fit_log,
            final_dispersion,
        })
    }

    pub fn dim(&self) -> usize {
        self.consensus.ncols()
    }

    pub fn consensus(&self) -> &Matrix {
        &self.consensus
    }

    pub fn sample_ids(&self) -> &[String] {
        &self.sample_ids
    }

    pub fn space_ids(&self) -> &[String] {
        &self.space_ids
    }

    pub fn maps(&self) -> &[OrthogonalMap] {
        &self.maps
    }

    pub fn fit_log(&self) -> &[f64] {
        &self.fit_log
    }

    /// Dispersion of the stored maps against the stored consensus.
    pub fn final_dispersion(&self) -> f64 {
        self.final_dispersion
    }

    pub fn index_of(&self, space: &str) -> Result<usize> {
        self.space_ids
            .iter()
            .position(|s| s == space)
            .ok_or_else(|| Error::Lookup(space.to_owned()))
    }

    pub fn map(&self, space: &str) -> Result<&OrthogonalMap> {
        Ok(&self.maps[self.index_of(space)?])
    }

    /// The composed map sending rows of `source` toward `target`: `Ω_source·Ω_targetᵀ`.
    pub fn induced_map(&self, target: &str, source: &str) -> Result<OrthogonalMap> {
        let t = self.map(target)?;
        let s = self.map(source)?;
        Ok(s.then(&t.transpose()))
    }

    fn check_width(&self, x: &Matrix) -> Result<()> {
        if x.ncols() != self.dim() {
            return Err(Error::shape(format!(
                "input has {} columns, universe dim is {}",
                x.ncols(),
                self.dim()
            )));
        }
        Ok(())
    }

    pub fn to_universe(&self, x: &Matrix, space: &str) -> Result<Matrix> {
        self.check_width(x)?;
        Ok(self.map(space)?.apply(x))
    }

    pub fn from_universe(&self, u: &Matrix, space: &str) -> Result<Matrix> {
        self.check_width(u)?;
        Ok(u * self.map(space)?.matrix().transpose())
    }

    pub fn translate(&self, x: &Matrix, from: &str, to: &str) -> Result<Matrix> {
        self.check_width(x)?;
        if from == to {
            self.index_of(from)?;
            return Ok(x.clone());
        }
        let u = self.to_universe(x, from)?;
        self.from_universe(&u, to)
    }

    /// Register a new space by a single Procrustes solve against the stored
    /// consensus. Existing maps and the consensus are left untouched.
    pub fn gpa_add(&self, new_space: &EmbeddingMatrix) -> Result<Universe> {
        if new_space.dim() != self.dim() {
            return Err(Error::shape(format!(
                "new space `{}` has dim {}, universe dim is {}",
                new_space.space_id,
                new_space.dim(),
                self.dim()
            )));
        }
        if self.space_ids.contains(&new_space.space_id) {
            return Err(Error::invalid(format!(
                "space `{}` is already registered",
                new_space.space_id
            )));
        }
        if new_space.rows() != self.consensus.nrows() {
            return Err(Error::Correspondence(format!(
                "new space has {} rows, consensus has {}",
                new_space.rows(),
                self.consensus.nrows()
            )));
        }
        if !self.sample_ids.is_empty() && new_space.sample_ids != self.sample_ids {
            return Err(Error::Correspondence(format!(
                "sample ids of `{}` do not match the universe fit data",
                new_space.space_id
            )));
        }
        let map = orthogonal_procrustes(&new_space.data, &self.consensus)?;
        let mut out = self.clone();
        out.maps.push(map);
        out.space_ids.push(new_space.space_id.clone());
        Ok(out)
    }

    /// Write `universe.json`, `consensus.mwal` and one `map<i>.mwal` per space.
    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let consensus = Record {
            data: self.consensus.clone(),
            row_ids: self.sample_ids.clone(),
            meta: None,
        };
        container::write_record(&dir.join("consensus.mwal"), &consensus, Dtype::F64)?;
        let mut names = Vec::with_capacity(self.maps.len());
        for (i, (map, id)) in self.maps.iter().zip(&self.space_ids).enumerate() {
            let name = format!("map{i}.mwal");
            let rec = Record {
                data: map.matrix().clone(),
                row_ids: Vec::new(),
                meta: Some(serde_json::json!({ "space_id": id })),
            };
            container::write_record(&dir.join(&name), &rec, Dtype::F64)?;
            names.push(name);
        }
        let index = UniverseIndex {
            kind: UNIVERSE_KIND.into(),
            space_ids: self.space_ids.clone(),
            d: self.dim(),
            dispersion_final: self.final_dispersion(),
            fit_log: self.fit_log.clone(),
            consensus: "consensus.mwal".into(),
            maps: names,
        };
        let path = dir.join("universe.json");
        let text = serde_json::to_string_pretty(&index)? + "\n";
        std::fs::write(&path, text).map_err(|e| Error::io(&path, e))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join("universe.json");
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let index: UniverseIndex = serde_json::from_str(&text)?;
        if index.kind != UNIVERSE_KIND {
            return Err(Error::invalid(format!(
                "{} describes a `{}`, not a universe",
                path.display(),
                index.kind
            )));
        }
        let consensus = container::read_record(&dir.join(&index.consensus))?;
        let maps = index
            .maps
            .iter()
            .map(|name| OrthogonalMap::new(container::read_matrix(&dir.join(name))?))
            .collect::<Result<Vec<_>>>()?;
        let mut u = Self::from_parts(
            consensus.data,
            consensus.row_ids,
            index.space_ids,
            maps,
            index.fit_log,
        )?;
        u.final_dispersion = index.dispersion_final;
        if u.dim() != index.d {
            return Err(Error::shape(format!(
                "index declares d = {}, consensus has {}",
                index.d,
                u.dim()
            )));
        }
        Ok(u)
    }
}
