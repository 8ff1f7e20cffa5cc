//! Preprocessing states and fitted-model artifacts on disk.
//!
//! Layout of a model directory:
//! `model.json`, `preprocess/<space>.json` (+ `<space>.pca.mwal`), and one of
//! `pairwise/`, `universe/`, `gcca/`, `universe/` + `corrector/`.

use std::path::Path;

use anyhow::{Context, Result};
use mwal_core::dataio::container;
use mwal_core::gcca::{gcca_embed, SharedBasisModel};
use mwal_core::gcpa::{gcpa_to_universe, Corrector};
use mwal_core::linalg::{pca_apply, pca_fit, standardize_apply, standardize_fit, PcaState, StandardizerState};
use mwal_core::{EmbeddingMatrix, Matrix, PairwiseMaps, Universe};
use serde::{Deserialize, Serialize};

use crate::config::{as_config, config_error, Method, Standardize};

const MIN_SCALE: f64 = 1e-12;

/// Everything applied to one space's raw rows before alignment.
#[derive(Debug, Clone, PartialEq)]
pub struct SpacePrep {
    pub id: String,
    pub input_dim: usize,
    pub standardizer: Option<StandardizerState>,
    pub pca: Option<PcaState>,
}

#[derive(Serialize, Deserialize)]
struct PrepFile {
    id: String,
    input_dim: usize,
    standardizer: Option<StandardizerState>,
    pca: Option<PcaFile>,
}

#[derive(Serialize, Deserialize)]
struct PcaFile {
    mean: Vec<f64>,
    explained_variance: Vec<f64>,
    components: String,
}

fn fit_standardizer(x: &Matrix, mode: Standardize) -> Result<Option<StandardizerState>> {
    Ok(match mode {
        Standardize::None => None,
        Standardize::PerDimension => Some(standardize_fit(x)?),
        Standardize::Global => {
            let mut s = standardize_fit(x)?;
            let n = x.nrows() as f64;
            let mut energy = 0.0;
            for (j, col) in x.column_iter().enumerate() {
                energy += col.iter().map(|v| (v - s.mean[j]).powi(2)).sum::<f64>() / n;
            }
            let rms = (energy / x.ncols() as f64).sqrt();
            let scale = if rms > MIN_SCALE { rms } else { 1.0 };
            s.scale.iter_mut().for_each(|v| *v = scale);
            Some(s)
        }
    })
}

impl SpacePrep {
    pub fn fit(train: &EmbeddingMatrix, mode: Standardize, pca_dim: Option<usize>) -> Result<Self> {
        let standardizer = fit_standardizer(&train.data, mode)?;
        let pca = match pca_dim {
            Some(k) => {
                let x = match &standardizer {
                    Some(s) => standardize_apply(s, &train.data)?,
                    None => train.data.clone(),
                };
                Some(pca_fit(&x, k).map_err(|e| {
                    config_error(format!(
                        "space `{}`: cannot project to common_dim {k}: {e}",
                        train.space_id
                    ))
                })?)
            }
            None => None,
        };
        Ok(Self {
            id: train.space_id.clone(),
            input_dim: train.dim(),
            standardizer,
            pca,
        })
    }

    pub fn apply(&self, x: &Matrix) -> Result<Matrix> {
        if x.ncols() != self.input_dim {
            return Err(config_error(format!(
                "space `{}` expects dim {}, input has {}",
                self.id,
                self.input_dim,
                x.ncols()
            )));
        }
        let mut y = match &self.standardizer {
            Some(s) => standardize_apply(s, x)?,
            None => x.clone(),
        };
        if let Some(p) = &self.pca {
            y = pca_apply(p, &y)?;
        }
        Ok(y)
    }

    pub fn apply_to(&self, e: &EmbeddingMatrix) -> Result<EmbeddingMatrix> {
        Ok(EmbeddingMatrix {
            data: self.apply(&e.data)?,
            ..e.clone()
        })
    }

    fn save(&self, dir: &Path, index: usize) -> Result<()> {
        let pca = match &self.pca {
            Some(p) => {
                let file = format!("space{index}.pca.mwal");
                container::write_matrix(&dir.join(&file), &p.components)?;
                Some(PcaFile {
                    mean: p.mean.clone(),
                    explained_variance: p.explained_variance.clone(),
                    components: file,
                })
            }
            None => None,
        };
        let f = PrepFile {
            id: self.id.clone(),
            input_dim: self.input_dim,
            standardizer: self.standardizer.clone(),
            pca,
        };
        write_json(&dir.join(format!("space{index}.json")), &f)
    }

    fn load(dir: &Path, index: usize) -> Result<Self> {
        let f: PrepFile = read_json(&dir.join(format!("space{index}.json")))?;
        let pca = match f.pca {
            Some(p) => Some(PcaState {
                mean: p.mean,
                components: container::read_matrix(&dir.join(&p.components))?,
                explained_variance: p.explained_variance,
            }),
            None => None,
        };
        Ok(Self {
            id: f.id,
            input_dim: f.input_dim,
            standardizer: f.standardizer,
            pca,
        })
    }
}

/// PCA target for a set of spaces: none when widths agree, else `common_dim`.
pub fn pca_target(train: &[EmbeddingMatrix], common_dim: Option<usize>) -> Result<Option<usize>> {
    let first = train.first().ok_or_else(|| config_error("manifest lists no spaces"))?;
    Ok(match train.iter().find(|s| s.dim() != first.dim()) {
        None => None,
        Some(odd) => Some(common_dim.ok_or_else(|| {
            config_error(format!(
                "space `{}` has dim {} but `{}` has {}; set common_dim to project them",
                odd.space_id,
                odd.dim(),
                first.space_id,
                first.dim()
            ))
        })?),
    })
}

/// Fit preprocessing for all spaces; PCA only when their dims differ.
pub fn fit_preprocessing(
    train: &[EmbeddingMatrix],
    standardize: Standardize,
    pca_dim: Option<usize>,
) -> Result<Vec<SpacePrep>> {
    train
        .iter()
        .map(|s| SpacePrep::fit(s, standardize, pca_dim))
        .collect()
}

pub enum Fitted {
    Na,
    Pw(PairwiseMaps),
    Gpa(Universe),
    Gcca(SharedBasisModel),
    Gcpa(Universe, Corrector),
}

impl Fitted {
    /// Coordinates in the method's shared space, if it has one.
    pub fn shared(&self, x: &Matrix, space: &str, rescale: bool) -> Result<Option<Matrix>> {
        Ok(match self {
            Fitted::Na => Some(x.clone()),
            Fitted::Pw(_) => None,
            Fitted::Gpa(u) => Some(u.to_universe(x, space).map_err(as_config)?),
            Fitted::Gcca(m) => Some(gcca_embed(m, x, space).map_err(as_config)?),
            Fitted::Gcpa(u, c) => Some(gcpa_to_universe(u, c, x, space, rescale).map_err(as_config)?),
        })
    }

    /// Rows of `from` expressed in the coordinates of `to`.
    pub fn translate(&self, x: &Matrix, from: &str, to: &str) -> Result<Matrix> {
        match self {
            Fitted::Pw(p) => p.translate(x, from, to).map_err(as_config),
            Fitted::Gpa(u) | Fitted::Gcpa(u, _) => u.translate(x, from, to).map_err(as_config),
            Fitted::Na => Ok(x.clone()),
            Fitted::Gcca(_) => Err(config_error(
                "gcca has no map between input spaces; evaluate in its shared coordinates",
            )),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModelInfo {
    pub method: Method,
    pub space_ids: Vec<String>,
    pub dim: usize,
    pub standardize: Standardize,
    /// PCA target shared by every space, when the inputs differed in width.
    pub pca_dim: Option<usize>,
    pub rescale_gpa_norm: bool,
}

pub struct Model {
    pub info: ModelInfo,
    pub preps: Vec<SpacePrep>,
    pub fitted: Fitted,
}

impl Model {
    pub fn prep(&self, space: &str) -> Result<&SpacePrep> {
        self.preps
            .iter()
            .find(|p| p.id == space)
            .ok_or_else(|| config_error(format!("model has no space `{space}`")))
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        let prep_dir = dir.join("preprocess");
        std::fs::create_dir_all(&prep_dir)?;
        for (i, p) in self.preps.iter().enumerate() {
            p.save(&prep_dir, i)?;
        }
        match &self.fitted {
            Fitted::Na => {}
            Fitted::Pw(p) => p.save(&dir.join("pairwise"))?,
            Fitted::Gpa(u) => u.save(&dir.join("universe"))?,
            Fitted::Gcca(m) => m.save(&dir.join("gcca"))?,
            Fitted::Gcpa(u, c) => {
                u.save(&dir.join("universe"))?;
                c.save(&dir.join("corrector"))?;
            }
        }
        write_json(&dir.join("model.json"), &self.info)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let info: ModelInfo = read_json(&dir.join("model.json"))
            .map_err(|e| config_error(format!("{} is not a model directory: {e:#}", dir.display())))?;
        let preps = (0..info.space_ids.len())
            .map(|i| SpacePrep::load(&dir.join("preprocess"), i))
            .collect::<Result<Vec<_>>>()?;
        let fitted = match info.method {
            Method::Na => Fitted::Na,
            Method::Pw => Fitted::Pw(PairwiseMaps::load(&dir.join("pairwise"))?),
            Method::Gpa => Fitted::Gpa(Universe::load(&dir.join("universe"))?),
            Method::Gcca => Fitted::Gcca(SharedBasisModel::load(&dir.join("gcca"))?),
            Method::Gcpa => Fitted::Gcpa(
                Universe::load(&dir.join("universe"))?,
                Corrector::load(&dir.join("corrector"))?,
            ),
        };
        Ok(Self {
            info,
            preps,
            fitted,
        })
    }
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)? + "\n";
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?)
}
