//! Shared-basis multiset CCA solved spectrally.
//!
//! Each space is reduced to its thin SVD `X_m = U_m Σ_m V_mᵀ`. The block
//! matrix `S` with `S_mm = (M−1)I` and `S_mn = −U_mᵀU_n` turns the total
//! pairwise mismatch `Σ_{i<j} ‖U_iΦ_i − U_jΦ_j‖²` into `Tr(ΦᵀSΦ)`, so the
//! constrained minimiser (`ΦᵀΦ = I_R`) is the bottom-`R` eigenbasis of `S`.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dataio::container::{self, Dtype, Record};
use crate::dataio::{check_aligned, EmbeddingMatrix};
use crate::error::{Error, Result};
use crate::linalg::{sym_eig_smallest, thin_svd, Matrix, DEFAULT_SVD_REL_TOL};

/// Which feature-side map [`gcca_embed`] applies.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum FeatureMapKind {
    /// `Q̃_m = V_m Σ_m⁻¹ Φ_m`, reproducing `U_mΦ_m` exactly on the fit data.
    #[default]
    Exact,
    /// `Q_m = V_m Φ_m`, equal up to the per-direction SVD scaling.
    Scaled,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GccaOptions {
    pub rank: usize,
    #[serde(default = "default_svd_tol")]
    pub svd_tol: f64,
    /// Optional cap on each space's retained SVD rank.
    #[serde(default)]
    pub max_space_rank: Option<usize>,
    #[serde(default)]
    pub feature_map: FeatureMapKind,
}

fn default_svd_tol() -> f64 {
    DEFAULT_SVD_REL_TOL
}

impl GccaOptions {
    pub fn new(rank: usize) -> Self {
        Self {
            rank,
            svd_tol: DEFAULT_SVD_REL_TOL,
            max_space_rank: None,
            feature_map: FeatureMapKind::Exact,
        }
    }
}

/// Per-space SVD factors kept from the fit.
#[derive(Debug, Clone)]
pub struct SpaceFactors {
    pub left: Matrix,
    pub singular: Vec<f64>,
    pub right: Matrix,
}

#[derive(Debug, Clone)]
pub struct SharedBasisModel {
    space_ids: Vec<String>,
    input_dims: Vec<usize>,
    rank: usize,
    eigenvalues: Vec<f64>,
    /// `Φ*_m`, `r_m × R`.
    projections: Vec<Matrix>,
    /// `Q̃_m` (or `Q_m`), `d_m × R`.
    feature_maps: Vec<Matrix>,
    feature_map_kind: FeatureMapKind,
    /// Present on freshly fitted models, absent after loading.
    factors: Option<Vec<SpaceFactors>>,
}

/// Block matrix `S` over a list of orthonormal bases.
pub fn block_matrix(bases: &[&Matrix]) -> Matrix {
    let m = bases.len();
    let sizes: Vec<usize> = bases.iter().map(|u| u.ncols()).collect();
    let offsets: Vec<usize> = sizes
        .iter()
        .scan(0, |acc, &r| {
            let o = *acc;
            *acc += r;
            Some(o)
        })
        .collect();
    let total: usize = sizes.iter().sum();
    let mut s = Matrix::zeros(total, total);
    for i in 0..m {
        for j in 0..m {
            let block = if i == j {
                Matrix::identity(sizes[i], sizes[i]) * (m as f64 - 1.0)
            } else {
                -(bases[i].transpose() * bases[j])
            };
            s.view_mut((offsets[i], offsets[j]), (sizes[i], sizes[j]))
                .copy_from(&block);
        }
    }
    s
}

/// `Σ_{i<j} ‖U_iΦ_i − U_jΦ_j‖²_F`, evaluated directly.
pub fn pairwise_mismatch(bases: &[&Matrix], projections: &[Matrix]) -> f64 {
    let ys: Vec<Matrix> = bases.iter().zip(projections).map(|(u, p)| *u * p).collect();
    let mut total = 0.0;
    for i in 0..ys.len() {
        for j in i + 1..ys.len() {
            total += (&ys[i] - &ys[j]).norm_squared();
        }
    }
    total
}

/// Split stacked rows into consecutive blocks of the given heights.
pub fn split_blocks(stacked: &Matrix, heights: &[usize]) -> Vec<Matrix> {
    let mut offset = 0;
    heights
        .iter()
        .map(|&h| {
            let block = stacked.rows(offset, h).into_owned();
            offset += h;
            block
        })
        .collect()
}

pub fn fit_gcca(spaces: &[EmbeddingMatrix], opts: &GccaOptions) -> Result<SharedBasisModel> {
    if spaces.len() < 2 {
        return Err(Error::invalid("GCCA needs at least two spaces"));
    }
    check_aligned(spaces)?;
    let factors = spaces
        .iter()
        .map(|s| {
            let svd = thin_svd(&s.data, opts.max_space_rank, opts.svd_tol)?;
            Ok(SpaceFactors {
                left: svd.left,
                singular: svd.singular,
                right: svd.right,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let ranks: Vec<usize> = factors.iter().map(|f| f.left.ncols()).collect();
    let total: usize = ranks.iter().sum();
    if opts.rank == 0 || opts.rank > total {
        return Err(Error::InvalidRank {
            requested: opts.rank,
            available: total,
        });
    }
    let bases: Vec<&Matrix> = factors.iter().map(|f| &f.left).collect();
    let s = block_matrix(&bases);
    let (eigenvalues, stacked) = sym_eig_smallest(&s, opts.rank)?;
    let projections = split_blocks(&stacked, &ranks);
    let feature_maps = factors
        .iter()
        .zip(&projections)
        .map(|(f, phi)| match opts.feature_map {
            FeatureMapKind::Exact => {
                let mut scaled = phi.clone();
                for (i, sigma) in f.singular.iter().enumerate() {
                    scaled.row_mut(i).unscale_mut(*sigma);
                }
                &f.right * scaled
            }
            FeatureMapKind::Scaled => &f.right * phi,
        })
        .collect();
    Ok(SharedBasisModel {
        space_ids: spaces.iter().map(|s| s.space_id.clone()).collect(),
        input_dims: spaces.iter().map(|s| s.dim()).collect(),
        rank: opts.rank,
        eigenvalues,
        projections,
        feature_maps,
        feature_map_kind: opts.feature_map,
        factors: Some(factors),
    })
}

#[derive(Debug, Serialize, Deserialize)]
struct GccaIndex {
    kind: String,
    space_ids: Vec<String>,
    input_dims: Vec<usize>,
    retained_ranks: Vec<usize>,
    #[serde(rename = "R")]
    rank: usize,
    eigenvalues: Vec<f64>,
    feature_map: FeatureMapKind,
    maps: Vec<String>,
    projections: Vec<String>,
}

const GCCA_KIND: &str = "gcca-shared-basis";

impl SharedBasisModel {
    pub fn rank(&self) -> usize {
        self.rank
    }

    pub fn space_ids(&self) -> &[String] {
        &self.space_ids
    }

    pub fn eigenvalues(&self) -> &[f64] {
        &self.eigenvalues
    }

    pub fn retained_ranks(&self) -> Vec<usize> {
        self.projections.iter().map(|p| p.nrows()).collect()
    }

    pub fn projections(&self) -> &[Matrix] {
        &self.projections
    }

    pub fn feature_maps(&self) -> &[Matrix] {
        &self.feature_maps
    }

    pub fn factors(&self) -> Option<&[SpaceFactors]> {
        self.factors.as_deref()
    }

    pub fn index_of(&self, space: &str) -> Result<usize> {
        self.space_ids
            .iter()
            .position(|s| s == space)
            .ok_or_else(|| Error::Lookup(space.to_owned()))
    }

    /// Stacked `Φ* = [Φ*_1; …; Φ*_M]`.
    pub fn stacked_projection(&self) -> Matrix {
        let total: usize = self.projections.iter().map(|p| p.nrows()).sum();
        let mut out = Matrix::zeros(total, self.rank);
        let mut offset = 0;
        for p in &self.projections {
            out.view_mut((offset, 0), p.shape()).copy_from(p);
            offset += p.nrows();
        }
        out
    }

    /// Sample-side embeddings `U_mΦ*_m` of the fit data.
    pub fn fit_embeddings(&self) -> Result<Vec<Matrix>> {
        let factors = self
            .factors
            .as_ref()
            .ok_or_else(|| Error::invalid("model was loaded without fit factors"))?;
        Ok(factors
            .iter()
            .zip(&self.projections)
            .map(|(f, p)| &f.left * p)
            .collect())
    }

    /// The GCCA objective at the fitted solution.
    pub fn objective(&self) -> Result<f64> {
        let factors = self
            .factors
            .as_ref()
            .ok_or_else(|| Error::invalid("model was loaded without fit factors"))?;
        let bases: Vec<&Matrix> = factors.iter().map(|f| &f.left).collect();
        Ok(pairwise_mismatch(&bases, &self.projections))
    }

    /// `S` rebuilt from the stored factors.
    pub fn block_matrix(&self) -> Result<Matrix> {
        let factors = self
            .factors
            .as_ref()
            .ok_or_else(|| Error::invalid("model was loaded without fit factors"))?;
        let bases: Vec<&Matrix> = factors.iter().map(|f| &f.left).collect();
        Ok(block_matrix(&bases))
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut maps = Vec::new();
        let mut projections = Vec::new();
        for (i, (q, p)) in self.feature_maps.iter().zip(&self.projections).enumerate() {
            let q_name = format!("map{i}.mwal");
            let p_name = format!("phi{i}.mwal");
            let meta = Some(serde_json::json!({ "space_id": self.space_ids[i] }));
            container::write_record(
                &dir.join(&q_name),
                &Record {
                    data: q.clone(),
                    row_ids: Vec::new(),
                    meta: meta.clone(),
                },
                Dtype::F64,
            )?;
            container::write_record(
                &dir.join(&p_name),
                &Record {
                    data: p.clone(),
                    row_ids: Vec::new(),
                    meta,
                },
                Dtype::F64,
            )?;
            maps.push(q_name);
            projections.push(p_name);
        }
        let index = GccaIndex {
            kind: GCCA_KIND.into(),
            space_ids: self.space_ids.clone(),
            input_dims: self.input_dims.clone(),
            retained_ranks: self.retained_ranks(),
            rank: self.rank,
            eigenvalues: self.eigenvalues.clone(),
            feature_map: self.feature_map_kind,
            maps,
            projections,
        };
        let path = dir.join("gcca.json");
        std::fs::write(&path, serde_json::to_string_pretty(&index)? + "\n")
            .map_err(|e| Error::io(&path, e))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join("gcca.json");
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let index: GccaIndex = serde_json::from_str(&text)?;
        if index.kind != GCCA_KIND {
            return Err(Error::invalid(format!(
                "{} describes a `{}`, not a GCCA model",
                path.display(),
                index.kind
            )));
        }
        let feature_maps = index
            .maps
            .iter()
            .map(|n| container::read_matrix(&dir.join(n)))
            .collect::<Result<Vec<_>>>()?;
        let projections = index
            .projections
            .iter()
            .map(|n| container::read_matrix(&dir.join(n)))
            .collect::<Result<Vec<_>>>()?;
        for (i, q) in feature_maps.iter().enumerate() {
            if q.shape() != (index.input_dims[i], index.rank) {
                return Err(Error::shape(format!(
                    "feature map {i} is {:?}, expected {}x{}",
                    q.shape(),
                    index.input_dims[i],
                    index.rank
                )));
            }
        }
        Ok(Self {
            space_ids: index.space_ids,
            input_dims: index.input_dims,
            rank: index.rank,
            eigenvalues: index.eigenvalues,
            projections,
            feature_maps,
            feature_map_kind: index.feature_map,
            factors: None,
        })
    }
}

/// `x · Q̃_space`.
pub fn gcca_embed(model: &SharedBasisModel, x: &Matrix, space: &str) -> Result<Matrix> {
    let i = model.index_of(space)?;
    let q = &model.feature_maps[i];
    if x.ncols() != q.nrows() {
        return Err(Error::shape(format!(
            "space `{space}` expects {} columns, got {}",
            q.nrows(),
            x.ncols()
        )));
    }
    Ok(x * q)
}

/// Top-`R` left singular vectors of `G = [Y_1 | … | Y_M]`, `Y_m = X_m·Q̃_m`.
pub fn shared_subspace(model: &SharedBasisModel, spaces: &[EmbeddingMatrix]) -> Result<Matrix> {
    let g = concat_embeddings(model, spaces)?;
    Ok(thin_svd(&g, Some(model.rank), 0.0)?.left)
}

/// `G = [Y_1 | … | Y_M]` in model space order.
pub fn concat_embeddings(model: &SharedBasisModel, spaces: &[EmbeddingMatrix]) -> Result<Matrix> {
    check_aligned(spaces)?;
    let ys = spaces
        .iter()
        .map(|s| gcca_embed(model, &s.data, &s.space_id))
        .collect::<Result<Vec<_>>>()?;
    let n = ys.first().map_or(0, |y| y.nrows());
    let r = model.rank;
    let mut g = Matrix::zeros(n, r * ys.len());
    for (k, y) in ys.iter().enumerate() {
        g.view_mut((0, k * r), (n, r)).copy_from(y);
    }
    Ok(g)
}
