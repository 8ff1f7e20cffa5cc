use std::collections::BTreeMap;
use std::path::Path;

use anyhow::{Context, Result};
use mwal_core::align::dispersion;
use mwal_core::dataio::{
    align_by_ids, container, generate_synthetic, read_embeddings, Dtype, Manifest, Record, SynthSpec,
};
use mwal_core::gcca::{fit_gcca, GccaOptions};
use mwal_core::seed::derive_seed;
use mwal_core::{fit_corrector, fit_gpa, fit_pairwise, Correspondence, EmbeddingMatrix, Split, Universe};
use serde::Serialize;

use crate::config::{as_config, config_error, sha256_hex, Method, RunConfig};
use crate::model::{fit_preprocessing, pca_target, write_json, Fitted, Model, ModelInfo, SpacePrep};

/// Provenance written next to every command's outputs.
#[derive(Serialize)]
pub struct RunMeta {
    pub tool: &'static str,
    pub command: &'static str,
    pub cli_version: &'static str,
    pub core_version: &'static str,
    pub seed: u64,
    pub sub_seeds: BTreeMap<String, u64>,
    pub config_hash: String,
    pub config: serde_json::Value,
}

impl RunMeta {
    pub fn new(command: &'static str, seed: u64, config: serde_json::Value, hash: String) -> Self {
        Self {
            tool: "mwal",
            command,
            cli_version: env!("CARGO_PKG_VERSION"),
            core_version: mwal_core::VERSION,
            seed,
            sub_seeds: BTreeMap::new(),
            config_hash: hash,
            config,
        }
    }

    pub fn for_config(command: &'static str, cfg: &RunConfig) -> Self {
        let value = serde_json::to_value(cfg).expect("config serializes");
        Self::new(command, cfg.seed, value, cfg.hash())
    }

    pub fn sub_seed(mut self, purpose: &str) -> Self {
        self.sub_seeds.insert(purpose.to_owned(), derive_seed(self.seed, purpose));
        self
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        write_json(&dir.join(format!("run-{}.json", self.command)), self)
    }
}

pub fn load_manifest(path: &Path) -> Result<Manifest> {
    Manifest::load(path).map_err(|e| config_error(format!("manifest {}: {e}", path.display())))
}

/// Spaces of one split, reordered to the sample order of the first space.
pub fn load_aligned(manifest: &Manifest, split: Split) -> Result<Vec<EmbeddingMatrix>> {
    if !manifest.has_split(split) {
        return Err(config_error(format!("manifest has no {split} split")));
    }
    let spaces = manifest.load_split(split).map_err(as_config)?;
    align_by_ids(&spaces).map_err(as_config)
}

/// Labels in row order, if the manifest provides them.
pub fn labels_for(manifest: &Manifest, split: Split, ids: &[String]) -> Result<Option<Vec<usize>>> {
    let Some(map) = manifest.load_labels(split).map_err(as_config)? else {
        return Ok(None);
    };
    ids.iter()
        .map(|id| {
            map.get(id)
                .copied()
                .ok_or_else(|| config_error(format!("no {split} label for sample `{id}`")))
        })
        .collect::<Result<Vec<_>>>()
        .map(Some)
}

pub fn synth(spec_path: &Path, seed: Option<u64>, out: &Path) -> Result<()> {
    let text = std::fs::read_to_string(spec_path)
        .map_err(|e| config_error(format!("cannot read spec {}: {e}", spec_path.display())))?;
    let mut spec: SynthSpec = serde_json::from_str(&text)
        .map_err(|e| config_error(format!("invalid spec {}: {e}", spec_path.display())))?;
    if let Some(s) = seed {
        spec.seed = s;
    }
    spec.validate().map_err(as_config)?;
    let data = generate_synthetic(&spec)?;
    std::fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let manifest = data.write(&spec, out)?;
    let value = serde_json::to_value(&spec)?;
    let hash = sha256_hex(&serde_json::to_vec(&spec)?);
    RunMeta::new("synth", spec.seed, value, hash).write(out)?;
    println!(
        "wrote {} spaces ({} train rows) to {}",
        manifest.spaces.len(),
        spec.samples,
        out.join("manifest.json").display()
    );
    Ok(())
}

#[derive(Serialize)]
pub struct GpaSummary {
    pub iterations: usize,
    pub fit_log: Vec<f64>,
    pub final_dispersion: f64,
    /// Final dispersion over the total energy `Σ‖X_m‖²`.
    pub relative_dispersion: f64,
}

impl GpaSummary {
    fn of(u: &Universe, energy: f64) -> Self {
        Self {
            iterations: u.fit_log().len().saturating_sub(1),
            fit_log: u.fit_log().to_vec(),
            final_dispersion: u.final_dispersion(),
            relative_dispersion: u.final_dispersion() / energy,
        }
    }
}

#[derive(Serialize)]
pub struct GccaSummary {
    pub rank: usize,
    pub retained_ranks: Vec<usize>,
    pub eigenvalues: Vec<f64>,
    pub objective: f64,
}

#[derive(Serialize)]
pub struct GcpaSummary {
    pub tau: f64,
    pub lambda: f64,
    pub hidden: Vec<usize>,
    pub loss_log: Vec<f64>,
}

#[derive(Serialize)]
pub struct FitReport {
    pub method: Method,
    pub space_ids: Vec<String>,
    pub samples: usize,
    pub input_dims: Vec<usize>,
    pub dim: usize,
    pub pca_dim: Option<usize>,
    pub data_energy: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub gpa: Option<GpaSummary>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub gcca: Option<GccaSummary>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub gcpa: Option<GcpaSummary>,
}

/// Preprocessed train spaces plus their fitted preprocessing.
pub fn preprocess(
    train: &[EmbeddingMatrix],
    cfg: &RunConfig,
    manifest_common_dim: Option<usize>,
) -> Result<(Vec<SpacePrep>, Vec<EmbeddingMatrix>, Option<usize>)> {
    let pca_dim = pca_target(train, cfg.common_dim.or(manifest_common_dim))?;
    let preps = fit_preprocessing(train, cfg.standardize, pca_dim)?;
    let spaces = preps
        .iter()
        .zip(train)
        .map(|(p, s)| p.apply_to(s))
        .collect::<Result<Vec<_>>>()?;
    Ok((preps, spaces, pca_dim))
}

pub fn gcpa_train_config(cfg: &RunConfig) -> mwal_core::TrainConfig {
    let mut train = cfg.gcpa.train.clone();
    train.seed = derive_seed(cfg.seed, "gcpa/train");
    train
}

/// Fit everything in memory; nothing touches the disk.
pub fn fit_model(
    train: &[EmbeddingMatrix],
    cfg: &RunConfig,
    manifest_common_dim: Option<usize>,
) -> Result<(Model, FitReport)> {
    let (preps, spaces, pca_dim) = preprocess(train, cfg, manifest_common_dim)?;
    let dim = spaces[0].dim();
    let energy: f64 = spaces.iter().map(|s| s.data.norm_squared()).sum();
    let mut report = FitReport {
        method: cfg.method,
        space_ids: spaces.iter().map(|s| s.space_id.clone()).collect(),
        samples: spaces[0].rows(),
        input_dims: train.iter().map(|s| s.dim()).collect(),
        dim,
        pca_dim,
        data_energy: energy,
        gpa: None,
        gcca: None,
        gcpa: None,
    };
    let fitted = match cfg.method {
        Method::Na => Fitted::Na,
        Method::Pw => Fitted::Pw(fit_pairwise(&spaces).map_err(as_config)?),
        Method::Gpa => {
            let u = fit_gpa(&spaces, &cfg.gpa).map_err(as_config)?;
            report.gpa = Some(GpaSummary::of(&u, energy));
            Fitted::Gpa(u)
        }
        Method::Gcca => {
            let mut opts = GccaOptions::new(cfg.gcca.rank.unwrap_or(dim));
            opts.feature_map = cfg.gcca.feature_map;
            let m = fit_gcca(&spaces, &opts).map_err(as_config)?;
            report.gcca = Some(GccaSummary {
                rank: m.rank(),
                retained_ranks: m.retained_ranks(),
                eigenvalues: m.eigenvalues().to_vec(),
                objective: m.objective()?,
            });
            Fitted::Gcca(m)
        }
        Method::Gcpa => {
            let u = fit_gpa(&spaces, &cfg.gpa).map_err(as_config)?;
            let c = fit_corrector(&u, &spaces, &gcpa_train_config(cfg), cfg.gcpa.trust())
                .map_err(as_config)?;
            report.gpa = Some(GpaSummary::of(&u, energy));
            report.gcpa = Some(GcpaSummary {
                tau: c.trust.tau,
                lambda: c.trust.lambda,
                hidden: c.mlp.widths(),
                loss_log: c.loss_log.clone(),
            });
            Fitted::Gcpa(u, c)
        }
    };
    let info = ModelInfo {
        method: cfg.method,
        space_ids: report.space_ids.clone(),
        dim,
        standardize: cfg.standardize,
        pca_dim,
        rescale_gpa_norm: cfg.gcpa.rescale_gpa_norm,
    };
    Ok((
        Model {
            info,
            preps,
            fitted,
        },
        report,
    ))
}

pub fn fit(manifest_path: &Path, cfg: &RunConfig, out: &Path) -> Result<()> {
    let manifest = load_manifest(manifest_path)?;
    let train = load_aligned(&manifest, Split::Train)?;
    let (model, report) = fit_model(&train, cfg, manifest.common_dim)?;
    model.save(out)?;
    write_json(&out.join("fit_report.json"), &report)?;
    let mut meta = RunMeta::for_config("fit", cfg);
    if cfg.method == Method::Gcpa {
        meta = meta.sub_seed("gcpa/train");
    }
    meta.write(out)?;
    match (&report.gpa, &report.gcca) {
        (Some(g), _) => println!(
            "{}: {} spaces, dim {}, relative dispersion {:.3e} after {} iterations",
            cfg.method.as_str(),
            report.space_ids.len(),
            report.dim,
            g.relative_dispersion,
            g.iterations
        ),
        (_, Some(g)) => println!(
            "gcca: {} spaces, rank {}, objective {:.6}",
            report.space_ids.len(),
            g.rank,
            g.objective
        ),
        _ => println!(
            "{}: {} spaces, dim {}",
            cfg.method.as_str(),
            report.space_ids.len(),
            report.dim
        ),
    }
    Ok(())
}

#[derive(Serialize)]
struct AddReport {
    space_id: String,
    rows: usize,
    input_dim: usize,
    /// `‖X_new·Ω_new − C‖²` against the stored consensus.
    residual: f64,
    relative_residual: f64,
}

pub fn add(model_dir: &Path, space_file: &Path, space_id: &str, out: &Path) -> Result<()> {
    let mut model = Model::load(model_dir)?;
    let universe = match &model.fitted {
        Fitted::Gpa(u) | Fitted::Gcpa(u, _) => u,
        _ => {
            return Err(config_error(format!(
                "add needs a gpa or gcpa model, {} holds {}",
                model_dir.display(),
                model.info.method.as_str()
            )))
        }
    };
    if model.info.space_ids.iter().any(|s| s == space_id) {
        return Err(config_error(format!("space `{space_id}` is already registered")));
    }
    let mut raw = read_embeddings(space_file).map_err(as_config)?;
    raw.space_id = space_id.to_owned();
    raw.split = Split::Train;
    if model.info.pca_dim.is_none() && raw.dim() != model.info.dim {
        return Err(config_error(format!(
            "space `{space_id}` has dim {}, the universe has {}",
            raw.dim(),
            model.info.dim
        )));
    }
    let order = Correspondence::from_ids(universe.sample_ids(), &raw.sample_ids).map_err(as_config)?;
    let raw = raw.reordered(order.as_slice());
    let prep = SpacePrep::fit(&raw, model.info.standardize, model.info.pca_dim)?;
    let x = prep.apply_to(&raw)?;
    let grown = universe.gpa_add(&x).map_err(as_config)?;
    let residual = dispersion(&[&x.data], &grown.maps()[grown.maps().len() - 1..], grown.consensus());
    let report = AddReport {
        space_id: space_id.to_owned(),
        rows: x.rows(),
        input_dim: raw.dim(),
        residual,
        relative_residual: residual / x.data.norm_squared(),
    };
    model.fitted = match model.fitted {
        Fitted::Gcpa(_, c) => Fitted::Gcpa(grown, c),
        _ => Fitted::Gpa(grown),
    };
    model.preps.push(prep);
    model.info.space_ids.push(space_id.to_owned());
    model.save(out)?;
    write_json(&out.join(format!("add_report_{space_id}.json")), &report)?;
    let value = serde_json::json!({ "model": model.info, "space_id": space_id });
    let hash = sha256_hex(&serde_json::to_vec(&value)?);
    RunMeta::new("add", 0, value, hash).write(out)?;
    println!(
        "added `{space_id}` ({} rows), relative residual {:.3e}",
        report.rows, report.relative_residual
    );
    Ok(())
}

pub fn translate(model_dir: &Path, input: &Path, from: &str, to: &str, out: &Path) -> Result<()> {
    let model = Model::load(model_dir)?;
    let src = model.prep(from)?;
    model.prep(to)?;
    let e = read_embeddings(input).map_err(as_config)?;
    let x = src.apply(&e.data)?;
    let y = model.fitted.translate(&x, from, to)?;
    let rows = y.nrows();
    let record = Record {
        data: y,
        row_ids: e.sample_ids,
        meta: Some(serde_json::json!({ "space_id": to, "split": e.split, "translated_from": from })),
    };
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent)?;
    }
    container::write_record(out, &record, Dtype::F64)?;
    println!("translated {rows} rows {from} -> {to}");
    Ok(())
}
