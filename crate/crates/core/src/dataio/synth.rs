//! Seeded synthetic matched spaces with known ground truth.
//!
//! A labelled latent `Z` (Gaussian mixture in `latent_dim` dims) is
//! zero-padded to `dim`, optionally distorted per space, rotated by a
//! per-space random orthogonal map, and perturbed by isotropic noise.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::manifest::{write_labels, Manifest, SpaceEntry, SplitPaths, WeakPairEntry};
use super::{write_embeddings, EmbeddingMatrix, Split};
use crate::error::{Error, Result};
use crate::linalg::{random_orthogonal, Matrix, OrthogonalMap};
use crate::seed::rng_for;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum Distortion {
    /// Spaces share one frame (no rotation).
    None,
    /// Each space is a random rotation of the padded latent.
    #[default]
    OrthogonalOnly,
    /// A per-space non-orthogonal linear map `I + s·G/√d` before rotation.
    Linear,
    /// Each space zeroes a random `strength` fraction of latent dims.
    PerSpaceDropout,
}

/// Row corruption applied to the train split of selected spaces.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeakPair {
    pub spaces: Vec<usize>,
    /// Fraction of train rows receiving a random sign-flip mask.
    pub strength: f64,
}

fn default_classes() -> usize {
    5
}

fn default_separation() -> f64 {
    2.0
}

fn default_distortion_strength() -> f64 {
    0.5
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub num_spaces: usize,
    /// Train rows.
    pub samples: usize,
    #[serde(default)]
    pub val_samples: usize,
    #[serde(default)]
    pub test_samples: usize,
    pub dim: usize,
    pub latent_dim: usize,
    #[serde(default = "default_classes")]
    pub num_classes: usize,
    /// Standard deviation of the class centres relative to unit within-class spread.
    #[serde(default = "default_separation")]
    pub class_separation: f64,
    #[serde(default)]
    pub noise_sigma: f64,
    #[serde(default)]
    pub distortion: Distortion,
    #[serde(default = "default_distortion_strength")]
    pub distortion_strength: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub weak_pair: Option<WeakPair>,
    #[serde(default)]
    pub seed: u64,
}

impl SynthSpec {
    pub fn new(num_spaces: usize, samples: usize, dim: usize, latent_dim: usize) -> Self {
        Self {
            num_spaces,
            samples,
            val_samples: 0,
            test_samples: 0,
            dim,
            latent_dim,
            num_classes: default_classes(),
            class_separation: default_separation(),
            noise_sigma: 0.0,
            distortion: Distortion::OrthogonalOnly,
            distortion_strength: default_distortion_strength(),
            weak_pair: None,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidSpec(m));
        if self.num_spaces < 2 {
            return bad(format!("num_spaces {} < 2", self.num_spaces));
        }
        if self.samples == 0 || self.dim == 0 || self.latent_dim == 0 {
            return bad("samples, dim and latent_dim must be positive".into());
        }
        if self.latent_dim > self.dim {
            return bad(format!("latent_dim {} > dim {}", self.latent_dim, self.dim));
        }
        if self.num_classes == 0 {
            return bad("num_classes must be positive".into());
        }
        for (name, v) in [
            ("noise_sigma", self.noise_sigma),
            ("class_separation", self.class_separation),
            ("distortion_strength", self.distortion_strength),
        ] {
            if !v.is_finite() || v < 0.0 {
                return bad(format!("{name} = {v} must be finite and non-negative"));
            }
        }
        if self.distortion == Distortion::PerSpaceDropout && self.distortion_strength > 1.0 {
            return bad("dropout strength must be in [0, 1]".into());
        }
        if let Some(w) = &self.weak_pair {
            if !(0.0..=1.0).contains(&w.strength) {
                return bad(format!("weak_pair strength {} outside [0, 1]", w.strength));
            }
            if let Some(&m) = w.spaces.iter().find(|&&m| m >= self.num_spaces) {
                return bad(format!("weak_pair space {m} out of range"));
            }
        }
        Ok(())
    }

    fn total_rows(&self) -> usize {
        self.samples + self.val_samples + self.test_samples
    }
}

/// Generated spaces per split plus the ground truth used to build them.
#[derive(Debug, Clone)]
pub struct SynthOutput {
    pub train: Vec<EmbeddingMatrix>,
    pub val: Vec<EmbeddingMatrix>,
    pub test: Vec<EmbeddingMatrix>,
    pub train_labels: Vec<usize>,
    pub val_labels: Vec<usize>,
    pub test_labels: Vec<usize>,
    pub rotations: Vec<OrthogonalMap>,
}

impl SynthOutput {
    pub fn split(&self, split: Split) -> &[EmbeddingMatrix] {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }

    pub fn labels(&self, split: Split) -> &[usize] {
        match split {
            Split::Train => &self.train_labels,
            Split::Val => &self.val_labels,
            Split::Test => &self.test_labels,
        }
    }

    /// Write `<dir>/<split>/space<m>.mwal`, label files and `manifest.json`.
    pub fn write(&self, spec: &SynthSpec, dir: &Path) -> Result<Manifest> {
        let mut splits = SplitPaths {
            train: "train".into(),
            val: None,
            test: None,
        };
        for split in Split::ALL {
            let spaces = self.split(split);
            if spaces.first().is_none_or(|s| s.rows() == 0) {
                continue;
            }
            match split {
                Split::Val => splits.val = Some("val".into()),
                Split::Test => splits.test = Some("test".into()),
                Split::Train => {}
            }
            let sub = dir.join(split.as_str());
            std::fs::create_dir_all(&sub).map_err(|e| Error::io(&sub, e))?;
            for s in spaces {
                write_embeddings(s, &sub.join(format!("{}.mwal", s.space_id)))?;
            }
            write_labels(&sub.join("labels.tsv"), &spaces[0].sample_ids, self.labels(split))?;
        }
        let manifest = Manifest {
            spaces: self
                .train
                .iter()
                .map(|s| SpaceEntry {
                    id: s.space_id.clone(),
                    path: format!("{{split}}/{}.mwal", s.space_id),
                    dim: s.dim(),
                })
                .collect(),
            splits,
            labels: Some("{split}/labels.tsv".into()),
            common_dim: None,
            weak_pair: spec.weak_pair.as_ref().map(|w| WeakPairEntry {
                spaces: w.spaces.iter().map(|&m| space_id(m)).collect(),
                strength: w.strength,
            }),
            base_dir: dir.to_path_buf(),
        };
        manifest.save(&dir.join("manifest.json"))?;
        Ok(manifest)
    }
}

pub fn space_id(m: usize) -> String {
    format!("space{m}")
}

fn gaussian<R: Rng>(rows: usize, cols: usize, rng: &mut R) -> Matrix {
    Matrix::from_fn(rows, cols, |_, _| rng.sample(StandardNormal))
}

/// Draw labelled latent rows and build every space.
pub fn generate_synthetic(spec: &SynthSpec) -> Result<SynthOutput> {
    spec.validate()?;
    let n = spec.total_rows();
    let (d, k) = (spec.dim, spec.latent_dim);

    let mut latent_rng = rng_for(spec.seed, "synth/latent");
    let centres = gaussian(spec.num_classes, k, &mut latent_rng) * spec.class_separation;
    let labels: Vec<usize> = (0..n)
        .map(|_| latent_rng.random_range(0..spec.num_classes))
        .collect();
    let within = gaussian(n, k, &mut latent_rng);
    let padded = Matrix::from_fn(n, d, |i, j| {
        if j < k {
            centres[(labels[i], j)] + within[(i, j)]
        } else {
            0.0
        }
    });

    let mut rotations = Vec::with_capacity(spec.num_spaces);
    let mut full = Vec::with_capacity(spec.num_spaces);
    for m in 0..spec.num_spaces {
        let mut rng = rng_for(spec.seed, &format!("synth/space{m}"));
        let rotation = match spec.distortion {
            Distortion::None => OrthogonalMap::identity(d),
            _ => random_orthogonal(d, &mut rng),
        };
        let distorted = match spec.distortion {
            Distortion::None | Distortion::OrthogonalOnly => padded.clone(),
            Distortion::Linear => {
                let g = gaussian(d, d, &mut rng);
                let a = Matrix::identity(d, d) + g * (spec.distortion_strength / (d as f64).sqrt());
                &padded * a
            }
            Distortion::PerSpaceDropout => {
                let drop = (spec.distortion_strength * k as f64).floor() as usize;
                let mut dims: Vec<usize> = (0..k).collect();
                dims.shuffle(&mut rng);
                let mut x = padded.clone();
                for &j in &dims[..drop] {
                    x.column_mut(j).fill(0.0);
                }
                x
            }
        };
        let mut x = rotation.apply(&distorted);
        if spec.noise_sigma > 0.0 {
            let mut noise_rng = rng_for(spec.seed, &format!("synth/noise{m}"));
            x += gaussian(n, d, &mut noise_rng) * spec.noise_sigma;
        }
        rotations.push(rotation);
        full.push(x);
    }

    if let Some(w) = &spec.weak_pair {
        let hit = (w.strength * spec.samples as f64).floor() as usize;
        for &m in &w.spaces {
            let mut rng = rng_for(spec.seed, &format!("synth/weak{m}"));
            let rows = rand::seq::index::sample(&mut rng, spec.samples, hit).into_vec();
            for i in rows {
                for j in 0..d {
                    if rng.random::<bool>() {
                        full[m][(i, j)] = -full[m][(i, j)];
                    }
                }
            }
        }
    }

    let ranges = [
        (Split::Train, 0..spec.samples),
        (Split::Val, spec.samples..spec.samples + spec.val_samples),
        (Split::Test, spec.samples + spec.val_samples..n),
    ];
    let mut per_split: Vec<Vec<EmbeddingMatrix>> = Vec::with_capacity(3);
    let mut per_labels = Vec::with_capacity(3);
    for (split, range) in ranges {
        let ids: Vec<String> = range.clone().map(|i| format!("s{i}")).collect();
        let spaces = full
            .iter()
            .enumerate()
            .map(|(m, x)| EmbeddingMatrix {
                space_id: space_id(m),
                split,
                data: x.rows(range.start, range.len()).into_owned(),
                sample_ids: ids.clone(),
            })
            .collect();
        per_split.push(spaces);
        per_labels.push(labels[range].to_vec());
    }
    let test = per_split.pop().expect("three splits");
    let val = per_split.pop().expect("three splits");
    let train = per_split.pop().expect("three splits");
    let test_labels = per_labels.pop().expect("three splits");
    let val_labels = per_labels.pop().expect("three splits");
    let train_labels = per_labels.pop().expect("three splits");
    Ok(SynthOutput {
        train,
        val,
        test,
        train_labels,
        val_labels,
        test_labels,
        rotations,
    })
}
