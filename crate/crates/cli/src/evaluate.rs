use std::collections::BTreeSet;
use std::path::Path;

use anyhow::{Context, Result};
use mwal_core::eval::{
    agreement_metrics, cluster_eval, drift_metric, linear_probe_stitch, mean_average_precision, percentile,
    rank1_retrieval_detailed, AgreementReport, ClusterReport, DirectedAccuracy, DriftReport, PairScore,
    RetrievalReport,
};
use mwal_core::gcpa::gcpa_to_universe;
use mwal_core::seed::derive_seed;
use mwal_core::{fit_corrector, fit_gpa, Correspondence, EmbeddingMatrix, Matrix, OrthogonalMap, Split, Trust};
use serde::Serialize;

use crate::commands::{gcpa_train_config, labels_for, load_aligned, load_manifest, preprocess, RunMeta};
use crate::config::{as_config, config_error, Method, RunConfig};
use crate::model::{write_json, Fitted, Model};

/// Test (and optionally train) spaces, preprocessed with the model's states.
struct EvalData {
    ids: Vec<String>,
    test: Vec<Matrix>,
    test_labels: Option<Vec<usize>>,
    train: Option<(Vec<Matrix>, Vec<usize>)>,
}

fn prepare(model: &Model, spaces: Vec<EmbeddingMatrix>) -> Result<Vec<Matrix>> {
    let by_id: Vec<&str> = spaces.iter().map(|s| s.space_id.as_str()).collect();
    model
        .info
        .space_ids
        .iter()
        .map(|id| {
            let k = by_id
                .iter()
                .position(|s| s == id)
                .ok_or_else(|| config_error(format!("manifest has no space `{id}`")))?;
            model.prep(id)?.apply(&spaces[k].data)
        })
        .collect()
}

fn label_list(labels: &[usize]) -> usize {
    labels.iter().collect::<BTreeSet<_>>().len()
}

/// Query rows of `q` placed next to gallery rows of `g`, in whatever frame the
/// method compares them.
fn pair_views(model: &Model, shared: &Option<Vec<Matrix>>, x: &[Matrix], q: usize, g: usize) -> Result<(Matrix, Matrix)> {
    if let Some(s) = shared {
        return Ok((s[q].clone(), s[g].clone()));
    }
    let ids = &model.info.space_ids;
    Ok((model.fitted.translate(&x[q], &ids[q], &ids[g])?, x[g].clone()))
}

fn shared_views(model: &Model, x: &[Matrix], rescale: bool) -> Result<Option<Vec<Matrix>>> {
    model
        .info
        .space_ids
        .iter()
        .zip(x)
        .map(|(id, m)| model.fitted.shared(m, id, rescale))
        .collect::<Result<Option<Vec<_>>>>()
}

fn retrieval(model: &Model, shared: &Option<Vec<Matrix>>, x: &[Matrix], labels: Option<&[usize]>) -> Result<RetrievalReport> {
    let n = x[0].nrows();
    let identity: Vec<usize> = (0..n).collect();
    let labels = labels.unwrap_or(&identity);
    let truth = Correspondence::identity(n);
    let ids = &model.info.space_ids;
    let mut pairs = Vec::new();
    for q in 0..x.len() {
        for g in 0..x.len() {
            if q == g {
                continue;
            }
            let (qm, gm) = pair_views(model, shared, x, q, g)?;
            let r1 = rank1_retrieval_detailed(&qm, &gm, &truth)?;
            let map = mean_average_precision(&qm, &gm, labels, labels)?;
            pairs.push(PairScore {
                query: ids[q].clone(),
                gallery: ids[g].clone(),
                rank1: r1.accuracy,
                map: map.map,
                tied_queries: r1.tied_queries,
            });
        }
    }
    Ok(RetrievalReport::from_pairs(pairs)?)
}

#[derive(Serialize)]
struct ProbeTable {
    mean: f64,
    worst: f64,
    results: Vec<DirectedAccuracy>,
}

impl ProbeTable {
    fn to_tsv(&self) -> String {
        let mut out = String::from("from\tto\taccuracy\n");
        for r in &self.results {
            out.push_str(&format!("{}\t{}\t{:.6}\n", r.from, r.to, r.accuracy));
        }
        out
    }
}

/// Classifier trained on space `to`, scored on space `from`'s test rows moved into `to`'s frame.
fn probe(model: &Model, data: &EvalData, rescale: bool, cfg: &RunConfig) -> Result<Option<ProbeTable>> {
    let (Some((train, train_labels)), Some(test_labels)) = (&data.train, &data.test_labels) else {
        return Ok(None);
    };
    let shared_train = shared_views(model, train, rescale)?;
    let shared_test = shared_views(model, &data.test, rescale)?;
    let ids = &model.info.space_ids;
    let mut results = Vec::new();
    for from in 0..ids.len() {
        for to in 0..ids.len() {
            if from == to {
                continue;
            }
            let (src, moved) = match (&shared_train, &shared_test) {
                (Some(tr), Some(te)) => (tr[to].clone(), te[from].clone()),
                _ => (
                    train[to].clone(),
                    model.fitted.translate(&data.test[from], &ids[from], &ids[to])?,
                ),
            };
            let accuracy =
                linear_probe_stitch(&src, train_labels, &moved, test_labels, &cfg.eval.probe_config)?;
            results.push(DirectedAccuracy {
                from: ids[from].clone(),
                to: ids[to].clone(),
                accuracy,
            });
        }
    }
    let mean = results.iter().map(|r| r.accuracy).sum::<f64>() / results.len() as f64;
    let worst = results.iter().map(|r| r.accuracy).fold(f64::INFINITY, f64::min);
    Ok(Some(ProbeTable {
        mean,
        worst,
        results,
    }))
}

/// Views of every space in one frame: the shared one, or the first space's.
fn common_frame(model: &Model, shared: &Option<Vec<Matrix>>, x: &[Matrix]) -> Result<Vec<Matrix>> {
    if let Some(s) = shared {
        return Ok(s.clone());
    }
    let ids = &model.info.space_ids;
    x.iter()
        .zip(ids)
        .map(|(m, id)| model.fitted.translate(m, id, &ids[0]))
        .collect()
}

#[derive(Serialize)]
struct SpaceDrift {
    space: String,
    mean: f64,
    median: f64,
}

#[derive(Serialize)]
struct DriftSummary {
    spaces: Vec<SpaceDrift>,
    mean: f64,
    median: f64,
}

fn drift(model: &Model, x: &[Matrix]) -> Result<Option<DriftSummary>> {
    let Fitted::Gcpa(u, c) = &model.fitted else {
        return Ok(None);
    };
    let mut spaces = Vec::new();
    let mut pooled = Vec::new();
    for (id, m) in model.info.space_ids.iter().zip(x) {
        let before = u.to_universe(m, id).map_err(as_config)?;
        let after = gcpa_to_universe(u, c, m, id, false).map_err(as_config)?;
        let DriftReport {
            per_sample,
            mean,
            median,
        } = drift_metric(&before, &after)?;
        pooled.extend(per_sample);
        spaces.push(SpaceDrift {
            space: id.clone(),
            mean,
            median,
        });
    }
    Ok(Some(DriftSummary {
        spaces,
        mean: pooled.iter().sum::<f64>() / pooled.len() as f64,
        median: percentile(&pooled, 50.0)?,
    }))
}

#[derive(Serialize)]
struct CycleTriple {
    a: String,
    b: String,
    c: String,
    deviation: f64,
}

#[derive(Serialize)]
struct CycleReport {
    method: Method,
    max_deviation: f64,
    mean_deviation: f64,
    triples: Vec<CycleTriple>,
}

/// `‖O_{a→b}·O_{b→c} − O_{a→c}‖_F` over all ordered triples of distinct spaces.
fn cycle(model: &Model) -> Result<Option<CycleReport>> {
    let ids = &model.info.space_ids;
    let map = |from: &str, to: &str| -> Result<OrthogonalMap> {
        match &model.fitted {
            Fitted::Pw(p) => Ok(p.get(to, from).map_err(as_config)?.clone()),
            Fitted::Gpa(u) => u.induced_map(to, from).map_err(as_config),
            _ => unreachable!(),
        }
    };
    if !matches!(model.fitted, Fitted::Pw(_) | Fitted::Gpa(_)) || ids.len() < 3 {
        return Ok(None);
    }
    let mut triples = Vec::new();
    for a in ids {
        for b in ids {
            for c in ids {
                if a == b || b == c || a == c {
                    continue;
                }
                let composed = map(a, b)?.then(&map(b, c)?);
                let direct = map(a, c)?;
                triples.push(CycleTriple {
                    a: a.clone(),
                    b: b.clone(),
                    c: c.clone(),
                    deviation: (composed.matrix() - direct.matrix()).norm(),
                });
            }
        }
    }
    let devs: Vec<f64> = triples.iter().map(|t| t.deviation).collect();
    Ok(Some(CycleReport {
        method: model.info.method,
        max_deviation: devs.iter().copied().fold(0.0, f64::max),
        mean_deviation: devs.iter().sum::<f64>() / devs.len() as f64,
        triples,
    }))
}

#[derive(Serialize)]
struct AgreementSummary {
    delta_plus: f64,
    gamma_90: f64,
}

#[derive(Serialize)]
struct EvalSummary {
    method: Method,
    test_samples: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    mean_rank1: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    mean_map: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    probe_mean: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    ari_mean: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    nmi_mean: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    agreement: Option<AgreementSummary>,
    #[serde(skip_serializing_if = "Option::is_none")]
    drift_mean: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    cycle_max_deviation: Option<f64>,
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

pub fn kmeans_seeds(cfg: &RunConfig) -> Vec<u64> {
    (0..cfg.eval.cluster_seeds)
        .map(|i| derive_seed(cfg.seed, &format!("eval/kmeans/{i}")))
        .collect()
}

pub fn eval(model_dir: &Path, manifest_path: &Path, cfg: &RunConfig, method: Option<Method>, out: &Path) -> Result<()> {
    let model = Model::load(model_dir)?;
    if let Some(m) = method.filter(|&m| m != model.info.method) {
        return Err(config_error(format!(
            "--method {} does not match the {} model in {}",
            m.as_str(),
            model.info.method.as_str(),
            model_dir.display()
        )));
    }
    let manifest = load_manifest(manifest_path)?;
    if !manifest.has_split(Split::Test) {
        return Err(config_error("manifest has no test split; evaluation runs on test only"));
    }
    let test = load_aligned(&manifest, Split::Test)?;
    let test_ids = test[0].sample_ids.clone();
    let test_labels = labels_for(&manifest, Split::Test, &test_ids)?;
    let train = if cfg.eval.probe && test_labels.is_some() {
        let spaces = load_aligned(&manifest, Split::Train)?;
        let ids = spaces[0].sample_ids.clone();
        match labels_for(&manifest, Split::Train, &ids)? {
            Some(l) => Some((prepare(&model, spaces)?, l)),
            None => None,
        }
    } else {
        None
    };
    let data = EvalData {
        ids: test_ids,
        test: prepare(&model, test)?,
        test_labels,
        train,
    };
    let rescale = cfg.gcpa.rescale_gpa_norm || model.info.rescale_gpa_norm;
    let shared = shared_views(&model, &data.test, rescale)?;
    let e = &cfg.eval;

    std::fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let mut summary = EvalSummary {
        method: model.info.method,
        test_samples: data.ids.len(),
        mean_rank1: None,
        mean_map: None,
        probe_mean: None,
        ari_mean: None,
        nmi_mean: None,
        agreement: None,
        drift_mean: None,
        cycle_max_deviation: None,
    };
    if e.retrieval {
        let r = retrieval(&model, &shared, &data.test, data.test_labels.as_deref())?;
        write_json(&out.join("retrieval.json"), &r)?;
        write_text(&out.join("retrieval.tsv"), &r.to_tsv())?;
        summary.mean_rank1 = Some(r.mean_rank1);
        summary.mean_map = Some(r.mean_map);
    }
    if e.probe {
        if let Some(p) = probe(&model, &data, rescale, cfg)? {
            write_json(&out.join("probe.json"), &p)?;
            write_text(&out.join("probe.tsv"), &p.to_tsv())?;
            summary.probe_mean = Some(p.mean);
        }
    }
    if e.cluster {
        if let Some(labels) = &data.test_labels {
            let k = label_list(labels);
            if k >= 2 {
                let views: Vec<(String, Matrix)> = model
                    .info
                    .space_ids
                    .iter()
                    .cloned()
                    .zip(shared.clone().unwrap_or_else(|| data.test.clone()))
                    .collect();
                let c: ClusterReport = cluster_eval(&views, labels, k, &kmeans_seeds(cfg))?;
                write_json(&out.join("clusters.json"), &c)?;
                summary.ari_mean = Some(c.ari_mean);
                summary.nmi_mean = Some(c.nmi_mean);
            }
        }
    }
    if e.agreement && data.test.len() == 3 {
        let views = common_frame(&model, &shared, &data.test)?;
        let a: AgreementReport = agreement_metrics(&views, true)?;
        write_json(&out.join("agreement.json"), &a)?;
        summary.agreement = Some(AgreementSummary {
            delta_plus: a.delta_plus,
            gamma_90: a.gamma_90,
        });
    }
    if e.drift {
        if let Some(d) = drift(&model, &data.test)? {
            write_json(&out.join("drift.json"), &d)?;
            summary.drift_mean = Some(d.mean);
        }
    }
    if let Some(c) = cycle(&model)? {
        write_json(&out.join("cycle.json"), &c)?;
        summary.cycle_max_deviation = Some(c.max_deviation);
    }
    write_json(&out.join("eval_summary.json"), &summary)?;
    let mut meta = RunMeta::for_config("eval", cfg);
    for i in 0..e.cluster_seeds {
        meta = meta.sub_seed(&format!("eval/kmeans/{i}"));
    }
    meta.write(out)?;
    println!("{}", serde_json::to_string_pretty(&summary)?);
    Ok(())
}

#[derive(Serialize)]
struct SweepRow {
    tau: f64,
    lambda: f64,
    final_loss: f64,
    mean_rank1: f64,
    mean_map: f64,
    drift_mean: f64,
    drift_median: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    delta_plus: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    gamma_90: Option<f64>,
}

pub fn sweep(manifest_path: &Path, cfg: &RunConfig, out: &Path) -> Result<()> {
    let manifest = load_manifest(manifest_path)?;
    if !manifest.has_split(Split::Test) {
        return Err(config_error("manifest has no test split; the sweep scores on test"));
    }
    let train = load_aligned(&manifest, Split::Train)?;
    let test = load_aligned(&manifest, Split::Test)?;
    let test_labels = labels_for(&manifest, Split::Test, &test[0].sample_ids)?;
    let (preps, spaces, _) = preprocess(&train, cfg, manifest.common_dim)?;
    let x: Vec<Matrix> = preps
        .iter()
        .zip(&test)
        .map(|(p, s)| p.apply(&s.data))
        .collect::<Result<_>>()?;
    let universe = fit_gpa(&spaces, &cfg.gpa).map_err(as_config)?;
    let ids: Vec<String> = spaces.iter().map(|s| s.space_id.clone()).collect();
    let before: Vec<Matrix> = ids
        .iter()
        .zip(&x)
        .map(|(id, m)| universe.to_universe(m, id).map_err(as_config))
        .collect::<Result<_>>()?;
    let train_cfg = gcpa_train_config(cfg);
    let n = x[0].nrows();
    let identity: Vec<usize> = (0..n).collect();
    let labels = test_labels.as_deref().unwrap_or(&identity);
    let truth = Correspondence::identity(n);

    let mut rows = Vec::new();
    for &tau in &cfg.sweep.taus {
        for &lambda in &cfg.sweep.lambdas {
            let trust = Trust { tau, lambda };
            let c = fit_corrector(&universe, &spaces, &train_cfg, trust).map_err(as_config)?;
            let views: Vec<Matrix> = ids
                .iter()
                .zip(&x)
                .map(|(id, m)| gcpa_to_universe(&universe, &c, m, id, cfg.gcpa.rescale_gpa_norm).map_err(as_config))
                .collect::<Result<_>>()?;
            let mut pairs = Vec::new();
            for q in 0..views.len() {
                for g in 0..views.len() {
                    if q != g {
                        let r1 = rank1_retrieval_detailed(&views[q], &views[g], &truth)?;
                        let map = mean_average_precision(&views[q], &views[g], labels, labels)?;
                        pairs.push(PairScore {
                            query: ids[q].clone(),
                            gallery: ids[g].clone(),
                            rank1: r1.accuracy,
                            map: map.map,
                            tied_queries: r1.tied_queries,
                        });
                    }
                }
            }
            let r = RetrievalReport::from_pairs(pairs)?;
            let mut drifts = Vec::new();
            for (b, a) in before.iter().zip(&views) {
                drifts.extend(drift_metric(b, a)?.per_sample);
            }
            let agreement = if views.len() == 3 {
                Some(agreement_metrics(&views, true)?)
            } else {
                None
            };
            rows.push(SweepRow {
                tau,
                lambda,
                final_loss: *c.loss_log.last().expect("loss log is never empty"),
                mean_rank1: r.mean_rank1,
                mean_map: r.mean_map,
                drift_mean: drifts.iter().sum::<f64>() / drifts.len() as f64,
                drift_median: percentile(&drifts, 50.0)?,
                delta_plus: agreement.as_ref().map(|a| a.delta_plus),
                gamma_90: agreement.as_ref().map(|a| a.gamma_90),
            });
        }
    }

    std::fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let mut tsv = String::from("tau\tlambda\tfinal_loss\tmean_rank1\tmean_map\tdrift_mean\tdrift_median\tdelta_plus\tgamma_90\n");
    let opt = |v: Option<f64>| v.map_or_else(|| "NA".to_owned(), |v| format!("{v:.6}"));
    for r in &rows {
        tsv.push_str(&format!(
            "{}\t{}\t{:.6}\t{:.6}\t{:.6}\t{:.6}\t{:.6}\t{}\t{}\n",
            r.tau,
            r.lambda,
            r.final_loss,
            r.mean_rank1,
            r.mean_map,
            r.drift_mean,
            r.drift_median,
            opt(r.delta_plus),
            opt(r.gamma_90)
        ));
    }
    write_text(&out.join("sweep.tsv"), &tsv)?;
    write_json(&out.join("sweep.json"), &rows)?;
    RunMeta::for_config("sweep", cfg).sub_seed("gcpa/train").write(out)?;
    print!("{tsv}");
    Ok(())
}
