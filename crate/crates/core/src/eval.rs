//! Evaluation protocols: cross-space retrieval, linear-probe stitching,
//! clustering agreement with labels, multi-view agreement and drift.
//!
//! All functions are pure. Cosine similarity is used wherever rows are
//! compared; ties in rankings go to the lowest gallery index.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt::Write as _;

use nalgebra::DVector;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::dataio::Correspondence;
use crate::error::{Error, Result};
use crate::linalg::{row_normalize, Matrix};
use crate::seed::rng_for;

const NORM_EPS: f64 = 1e-12;

fn unit_rows(x: &Matrix) -> Matrix {
    row_normalize(x, NORM_EPS).0
}

fn check_nonempty(x: &Matrix, what: &str) -> Result<()> {
    if x.nrows() == 0 || x.ncols() == 0 {
        return Err(Error::invalid(format!("{what} is empty")));
    }
    Ok(())
}

fn cosine_matrix(query: &Matrix, gallery: &Matrix) -> Result<Matrix> {
    check_nonempty(query, "query")?;
    check_nonempty(gallery, "gallery")?;
    if query.ncols() != gallery.ncols() {
        return Err(Error::shape(format!(
            "query has {} columns, gallery {}",
            query.ncols(),
            gallery.ncols()
        )));
    }
    Ok(unit_rows(query) * unit_rows(gallery).transpose())
}

/// Gallery indices sorted by descending similarity, ties by lowest index.
fn ranking(sims: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..sims.len()).collect();
    order.sort_by(|&a, &b| sims[b].total_cmp(&sims[a]).then(a.cmp(&b)));
    order
}

/// Rank-1 outcome with the number of queries whose top score was tied.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RankOne {
    pub accuracy: f64,
    pub tied_queries: usize,
}

/// Fraction of queries whose highest-cosine gallery row is `truth.target_of(i)`.
pub fn rank1_retrieval(query: &Matrix, gallery: &Matrix, truth: &Correspondence) -> Result<f64> {
    Ok(rank1_retrieval_detailed(query, gallery, truth)?.accuracy)
}

pub fn rank1_retrieval_detailed(
    query: &Matrix,
    gallery: &Matrix,
    truth: &Correspondence,
) -> Result<RankOne> {
    let sims = cosine_matrix(query, gallery)?;
    if truth.len() != query.nrows() {
        return Err(Error::shape(format!(
            "correspondence covers {} queries, got {}",
            truth.len(),
            query.nrows()
        )));
    }
    if truth.as_slice().iter().any(|&t| t >= gallery.nrows()) {
        return Err(Error::invalid("correspondence points past the gallery"));
    }
    let mut hits = 0usize;
    let mut tied = 0usize;
    for i in 0..sims.nrows() {
        let row = sims.row(i);
        let mut best = 0;
        let mut ties = 0;
        for j in 1..row.len() {
            if row[j] > row[best] {
                best = j;
                ties = 0;
            } else if row[j] == row[best] {
                ties += 1;
            }
        }
        if ties > 0 {
            tied += 1;
        }
        if best == truth.target_of(i) {
            hits += 1;
        }
    }
    Ok(RankOne {
        accuracy: hits as f64 / query.nrows() as f64,
        tied_queries: tied,
    })
}

/// mAP over the queries whose label occurs in the gallery.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MapScore {
    pub map: f64,
    pub evaluated: usize,
    /// Queries skipped because their label has no gallery match.
    pub excluded: usize,
}

/// Average precision of one ranked relevance list.
pub fn average_precision(relevant_in_rank_order: &[bool]) -> Option<f64> {
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (k, rel) in relevant_in_rank_order.iter().enumerate() {
        if *rel {
            hits += 1;
            sum += hits as f64 / (k + 1) as f64;
        }
    }
    (hits > 0).then(|| sum / hits as f64)
}

pub fn mean_average_precision<L: PartialEq>(
    query: &Matrix,
    gallery: &Matrix,
    query_labels: &[L],
    gallery_labels: &[L],
) -> Result<MapScore> {
    let sims = cosine_matrix(query, gallery)?;
    if query_labels.len() != query.nrows() || gallery_labels.len() != gallery.nrows() {
        return Err(Error::shape("label count does not match row count"));
    }
    let mut total = 0.0;
    let mut evaluated = 0;
    let mut excluded = 0;
    for (i, ql) in query_labels.iter().enumerate() {
        let row: Vec<f64> = sims.row(i).iter().copied().collect();
        let rel: Vec<bool> = ranking(&row)
            .into_iter()
            .map(|j| gallery_labels[j] == *ql)
            .collect();
        match average_precision(&rel) {
            Some(ap) => {
                total += ap;
                evaluated += 1;
            }
            None => excluded += 1,
        }
    }
    if evaluated == 0 {
        return Err(Error::invalid("no query label occurs in the gallery"));
    }
    Ok(MapScore {
        map: total / evaluated as f64,
        evaluated,
        excluded,
    })
}

/// Keep the first `min count` rows of every label, in id order.
///
/// Used to balance galleries before mAP when labels have uneven support.
pub fn balanced_subsample<L: Ord + Clone>(ids: &[String], labels: &[L]) -> Result<Vec<usize>> {
    if ids.len() != labels.len() {
        return Err(Error::shape("ids and labels differ in length"));
    }
    let mut groups: BTreeMap<L, Vec<usize>> = BTreeMap::new();
    for (i, l) in labels.iter().enumerate() {
        groups.entry(l.clone()).or_default().push(i);
    }
    let Some(min) = groups.values().map(Vec::len).min() else {
        return Ok(Vec::new());
    };
    let mut keep = Vec::new();
    for rows in groups.values_mut() {
        rows.sort_by(|&a, &b| ids[a].cmp(&ids[b]).then(a.cmp(&b)));
        keep.extend_from_slice(&rows[..min]);
    }
    keep.sort_unstable();
    Ok(keep)
}

/// Scores for one ordered pair (query space → gallery space).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairScore {
    pub query: String,
    pub gallery: String,
    pub rank1: f64,
    pub map: f64,
    pub tied_queries: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalReport {
    pub pairs: Vec<PairScore>,
    pub mean_rank1: f64,
    pub worst_rank1: f64,
    pub best_rank1: f64,
    pub mean_map: f64,
    pub worst_map: f64,
    pub best_map: f64,
}

impl RetrievalReport {
    /// Aggregate mean, worst and best over already scored pairs.
    pub fn from_pairs(pairs: Vec<PairScore>) -> Result<Self> {
        if pairs.is_empty() {
            return Err(Error::invalid("no retrieval pairs"));
        }
        let agg = |f: fn(&PairScore) -> f64| {
            let vals: Vec<f64> = pairs.iter().map(f).collect();
            let mean = vals.iter().sum::<f64>() / vals.len() as f64;
            let lo = vals.iter().copied().fold(f64::INFINITY, f64::min);
            let hi = vals.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            (mean, lo, hi)
        };
        let (mean_rank1, worst_rank1, best_rank1) = agg(|p| p.rank1);
        let (mean_map, worst_map, best_map) = agg(|p| p.map);
        Ok(Self {
            pairs,
            mean_rank1,
            worst_rank1,
            best_rank1,
            mean_map,
            worst_map,
            best_map,
        })
    }

    pub fn to_tsv(&self) -> String {
        let mut out = String::from("query\tgallery\trank1\tmap\ttied_queries\n");
        for p in &self.pairs {
            let _ = writeln!(
                out,
                "{}\t{}\t{:.6}\t{:.6}\t{}",
                p.query, p.gallery, p.rank1, p.map, p.tied_queries
            );
        }
        out
    }
}

/// Retrieval over every ordered pair of row-aligned views.
///
/// The true match of query row `i` is gallery row `i`. Without labels, each
/// sample is its own class, so mAP reduces to the mean reciprocal rank.
pub fn retrieval_report(views: &[(String, Matrix)], labels: Option<&[usize]>) -> Result<RetrievalReport> {
    if views.len() < 2 {
        return Err(Error::invalid("retrieval needs at least two views"));
    }
    let n = views[0].1.nrows();
    if views.iter().any(|(_, v)| v.nrows() != n) {
        return Err(Error::shape("views differ in row count"));
    }
    let identity: Vec<usize> = (0..n).collect();
    let labels = labels.unwrap_or(&identity);
    let truth = Correspondence::identity(n);
    let mut pairs = Vec::new();
    for (qi, (qname, q)) in views.iter().enumerate() {
        for (gi, (gname, g)) in views.iter().enumerate() {
            if qi == gi {
                continue;
            }
            let r1 = rank1_retrieval_detailed(q, g, &truth)?;
            let map = mean_average_precision(q, g, labels, labels)?;
            pairs.push(PairScore {
                query: qname.clone(),
                gallery: gname.clone(),
                rank1: r1.accuracy,
                map: map.map,
                tied_queries: r1.tied_queries,
            });
        }
    }
    RetrievalReport::from_pairs(pairs)
}

/// Map arbitrary labels to `0..K` in sorted order.
pub fn encode_labels<L: Ord + Clone>(labels: &[L]) -> (Vec<usize>, Vec<L>) {
    let classes: Vec<L> = labels.iter().cloned().collect::<BTreeSet<_>>().into_iter().collect();
    let index: BTreeMap<&L, usize> = classes.iter().enumerate().map(|(i, l)| (l, i)).collect();
    (labels.iter().map(|l| index[l]).collect(), classes)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ProbeConfig {
    pub iterations: usize,
    pub l2: f64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            iterations: 400,
            l2: 1e-3,
        }
    }
}

/// Multinomial logistic regression with a bias column.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearProbe {
    /// `(d + 1) × K`; the last row is the bias.
    pub weights: Matrix,
}

fn with_bias(x: &Matrix) -> Matrix {
    let mut out = Matrix::from_element(x.nrows(), x.ncols() + 1, 1.0);
    out.columns_mut(0, x.ncols()).copy_from(x);
    out
}

fn softmax_rows(mut logits: Matrix) -> Matrix {
    for mut row in logits.row_iter_mut() {
        let max = row.max();
        row.apply(|v| *v = (*v - max).exp());
        let s = row.sum();
        row.unscale_mut(s);
    }
    logits
}

impl LinearProbe {
    /// Full-batch gradient descent from zero weights.
    ///
    /// The step is `1 / L` with `L = ½·mean‖x̃‖² + l2`, an upper bound on the
    /// curvature of the softmax loss, so the run is stable on any scale.
    pub fn fit(x: &Matrix, labels: &[usize], num_classes: usize, cfg: &ProbeConfig) -> Result<Self> {
        check_nonempty(x, "probe training set")?;
        if labels.len() != x.nrows() {
            return Err(Error::shape("label count does not match row count"));
        }
        if num_classes < 2 || labels.iter().any(|&l| l >= num_classes) {
            return Err(Error::invalid("labels must lie in 0..num_classes with num_classes ≥ 2"));
        }
        let xb = with_bias(x);
        let n = x.nrows() as f64;
        let mut onehot = Matrix::zeros(x.nrows(), num_classes);
        for (i, &l) in labels.iter().enumerate() {
            onehot[(i, l)] = 1.0;
        }
        let curvature = 0.5 * xb.norm_squared() / n + cfg.l2;
        let step = 1.0 / curvature;
        let mut w = Matrix::zeros(xb.ncols(), num_classes);
        for _ in 0..cfg.iterations {
            let p = softmax_rows(&xb * &w);
            let mut grad = xb.transpose() * (p - &onehot) / n;
            grad += &w * cfg.l2;
            w -= grad * step;
        }
        Ok(Self { weights: w })
    }

    pub fn predict(&self, x: &Matrix) -> Result<Vec<usize>> {
        if x.ncols() + 1 != self.weights.nrows() {
            return Err(Error::shape(format!(
                "probe expects {} features, got {}",
                self.weights.nrows() - 1,
                x.ncols()
            )));
        }
        let logits = with_bias(x) * &self.weights;
        Ok(logits
            .row_iter()
            .map(|r| {
                let mut best = 0;
                for j in 1..r.len() {
                    if r[j] > r[best] {
                        best = j;
                    }
                }
                best
            })
            .collect())
    }

    pub fn accuracy(&self, x: &Matrix, labels: &[usize]) -> Result<f64> {
        if labels.len() != x.nrows() || labels.is_empty() {
            return Err(Error::shape("label count does not match row count"));
        }
        let pred = self.predict(x)?;
        let hits = pred.iter().zip(labels).filter(|(p, l)| p == l).count();
        Ok(hits as f64 / labels.len() as f64)
    }
}

/// Train on the source split, score on the target split mapped into source coordinates.
pub fn linear_probe_stitch(
    train_src: &Matrix,
    train_labels: &[usize],
    test_tgt_mapped: &Matrix,
    test_labels: &[usize],
    cfg: &ProbeConfig,
) -> Result<f64> {
    let train_set: BTreeSet<usize> = train_labels.iter().copied().collect();
    if !test_labels.iter().any(|l| train_set.contains(l)) {
        return Err(Error::invalid("train and test label sets are disjoint"));
    }
    let k = train_labels
        .iter()
        .chain(test_labels)
        .copied()
        .max()
        .unwrap_or(0)
        + 1;
    let probe = LinearProbe::fit(train_src, train_labels, k.max(2), cfg)?;
    probe.accuracy(test_tgt_mapped, test_labels)
}

/// One directed stitching accuracy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DirectedAccuracy {
    pub from: String,
    pub to: String,
    pub accuracy: f64,
}

/// Mean of the `2M` directed accuracies between `new_space` and each base space.
pub fn avg_new(results: &[DirectedAccuracy], new_space: &str, base_spaces: &[String]) -> Result<f64> {
    if base_spaces.is_empty() {
        return Err(Error::invalid("no base spaces"));
    }
    let lookup: HashMap<(&str, &str), f64> = results
        .iter()
        .map(|r| ((r.from.as_str(), r.to.as_str()), r.accuracy))
        .collect();
    let mut total = 0.0;
    for base in base_spaces {
        for (from, to) in [(new_space, base.as_str()), (base.as_str(), new_space)] {
            total += lookup.get(&(from, to)).ok_or_else(|| {
                Error::invalid(format!("missing directed accuracy {from} → {to}"))
            })?;
        }
    }
    Ok(total / (2 * base_spaces.len()) as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct KMeansConfig {
    pub max_iters: usize,
    /// Stop once inertia improves by less than this fraction.
    pub rel_tol: f64,
}

impl Default for KMeansConfig {
    fn default() -> Self {
        Self {
            max_iters: 300,
            rel_tol: 1e-6,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct KMeansResult {
    pub assignments: Vec<usize>,
    pub centroids: Matrix,
    pub inertia: f64,
    pub iterations: usize,
}

fn sq_dist(x: &Matrix, i: usize, c: &Matrix, j: usize) -> f64 {
    x.row(i)
        .iter()
        .zip(c.row(j).iter())
        .map(|(a, b)| (a - b) * (a - b))
        .sum()
}

fn assign(x: &Matrix, centroids: &Matrix) -> (Vec<usize>, f64) {
    let mut inertia = 0.0;
    let assignments = (0..x.nrows())
        .map(|i| {
            let mut best = 0;
            let mut best_d = f64::INFINITY;
            for j in 0..centroids.nrows() {
                let d = sq_dist(x, i, centroids, j);
                if d < best_d {
                    best_d = d;
                    best = j;
                }
            }
            inertia += best_d;
            best
        })
        .collect();
    (assignments, inertia)
}

/// Lloyd's algorithm from a k-means++ seeding.
pub fn kmeans(x: &Matrix, k: usize, seed: u64, cfg: &KMeansConfig) -> Result<KMeansResult> {
    check_nonempty(x, "k-means input")?;
    if k == 0 || k > x.nrows() {
        return Err(Error::invalid(format!(
            "k = {k} must lie in 1..={}",
            x.nrows()
        )));
    }
    let mut rng = rng_for(seed, "kmeans++");
    let n = x.nrows();
    let mut centroids = Matrix::zeros(k, x.ncols());
    let first = rng.random_range(0..n);
    centroids.row_mut(0).copy_from(&x.row(first));
    let mut closest: Vec<f64> = (0..n).map(|i| sq_dist(x, i, &centroids, 0)).collect();
    for c in 1..k {
        let total: f64 = closest.iter().sum();
        let pick = if total > 0.0 {
            let target = rng.random::<f64>() * total;
            let mut acc = 0.0;
            let mut pick = n - 1;
            for (i, d) in closest.iter().enumerate() {
                acc += d;
                if acc > target {
                    pick = i;
                    break;
                }
            }
            pick
        } else {
            rng.random_range(0..n)
        };
        centroids.row_mut(c).copy_from(&x.row(pick));
        for (i, d) in closest.iter_mut().enumerate() {
            *d = d.min(sq_dist(x, i, &centroids, c));
        }
    }

    let (mut assignments, mut inertia) = assign(x, &centroids);
    let mut iterations = 0;
    while iterations < cfg.max_iters {
        iterations += 1;
        let mut sums = Matrix::zeros(k, x.ncols());
        let mut counts = vec![0usize; k];
        for (i, &a) in assignments.iter().enumerate() {
            let mut row = sums.row_mut(a);
            row += x.row(i);
            counts[a] += 1;
        }
        for j in 0..k {
            // Empty clusters keep their previous centroid.
            if counts[j] > 0 {
                centroids.row_mut(j).copy_from(&(sums.row(j) / counts[j] as f64));
            }
        }
        let (next, next_inertia) = assign(x, &centroids);
        let improved = inertia - next_inertia;
        assignments = next;
        let prev = inertia;
        inertia = next_inertia;
        if improved <= cfg.rel_tol * prev.max(f64::MIN_POSITIVE) {
            break;
        }
    }
    Ok(KMeansResult {
        assignments,
        centroids,
        inertia,
        iterations,
    })
}

fn contingency(a: &[usize], b: &[usize]) -> Result<(Vec<Vec<f64>>, Vec<f64>, Vec<f64>)> {
    if a.len() != b.len() || a.is_empty() {
        return Err(Error::shape("label vectors must be nonempty and equal in length"));
    }
    let (ea, _) = encode_labels(a);
    let (eb, _) = encode_labels(b);
    let ka = ea.iter().max().unwrap() + 1;
    let kb = eb.iter().max().unwrap() + 1;
    let mut table = vec![vec![0.0; kb]; ka];
    for (i, j) in ea.iter().zip(&eb) {
        table[*i][*j] += 1.0;
    }
    let rows = table.iter().map(|r| r.iter().sum()).collect();
    let cols = (0..kb).map(|j| table.iter().map(|r| r[j]).sum()).collect();
    Ok((table, rows, cols))
}

fn comb2(x: f64) -> f64 {
    x * (x - 1.0) / 2.0
}

/// Adjusted Rand index; two identical trivial partitions score 1.
pub fn adjusted_rand_index(a: &[usize], b: &[usize]) -> Result<f64> {
    let (table, rows, cols) = contingency(a, b)?;
    let n = a.len() as f64;
    let index: f64 = table.iter().flatten().map(|&v| comb2(v)).sum();
    let sa: f64 = rows.iter().map(|&v| comb2(v)).sum();
    let sb: f64 = cols.iter().map(|&v| comb2(v)).sum();
    let expected = sa * sb / comb2(n).max(f64::MIN_POSITIVE);
    let max = 0.5 * (sa + sb);
    if (max - expected).abs() < 1e-15 {
        return Ok(if rows.len() == cols.len() && index == max { 1.0 } else { 0.0 });
    }
    Ok((index - expected) / (max - expected))
}

fn entropy(counts: &[f64], n: f64) -> f64 {
    counts
        .iter()
        .filter(|&&c| c > 0.0)
        .map(|&c| {
            let p = c / n;
            -p * p.ln()
        })
        .sum()
}

/// Normalised mutual information with arithmetic-mean normalisation.
///
/// Two single-cluster partitions score 1; one single cluster against a
/// multi-class partition scores 0.
pub fn normalized_mutual_info(a: &[usize], b: &[usize]) -> Result<f64> {
    let (table, rows, cols) = contingency(a, b)?;
    let n = a.len() as f64;
    let ha = entropy(&rows, n);
    let hb = entropy(&cols, n);
    if ha == 0.0 && hb == 0.0 {
        return Ok(1.0);
    }
    let mut mi = 0.0;
    for (i, row) in table.iter().enumerate() {
        for (j, &nij) in row.iter().enumerate() {
            if nij > 0.0 {
                mi += nij / n * (n * nij / (rows[i] * cols[j])).ln();
            }
        }
    }
    Ok((mi / (0.5 * (ha + hb))).clamp(0.0, 1.0))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterScore {
    pub space: String,
    pub seed: u64,
    pub ari: f64,
    pub nmi: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterReport {
    pub runs: Vec<ClusterScore>,
    pub ari_mean: f64,
    pub ari_std: f64,
    pub nmi_mean: f64,
    pub nmi_std: f64,
}

fn mean_std(v: &[f64]) -> (f64, f64) {
    let m = v.iter().sum::<f64>() / v.len() as f64;
    let var = v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / v.len() as f64;
    (m, var.sqrt())
}

/// k-means per space per seed; aggregates are mean ± std across spaces of
/// each space's seed-averaged score.
pub fn cluster_eval(
    spaces: &[(String, Matrix)],
    labels: &[usize],
    k: usize,
    seeds: &[u64],
) -> Result<ClusterReport> {
    if k < 2 {
        return Err(Error::invalid("k must be at least 2"));
    }
    if spaces.is_empty() || seeds.is_empty() {
        return Err(Error::invalid("need at least one space and one seed"));
    }
    let mut runs = Vec::new();
    let mut ari_per_space = Vec::new();
    let mut nmi_per_space = Vec::new();
    for (name, x) in spaces {
        if x.nrows() != labels.len() {
            return Err(Error::shape(format!("space `{name}` does not match the labels")));
        }
        let mut ari_sum = 0.0;
        let mut nmi_sum = 0.0;
        for &seed in seeds {
            let fit = kmeans(x, k, seed, &KMeansConfig::default())?;
            let ari = adjusted_rand_index(labels, &fit.assignments)?;
            let nmi = normalized_mutual_info(labels, &fit.assignments)?;
            ari_sum += ari;
            nmi_sum += nmi;
            runs.push(ClusterScore {
                space: name.clone(),
                seed,
                ari,
                nmi,
            });
        }
        ari_per_space.push(ari_sum / seeds.len() as f64);
        nmi_per_space.push(nmi_sum / seeds.len() as f64);
    }
    let (ari_mean, ari_std) = mean_std(&ari_per_space);
    let (nmi_mean, nmi_std) = mean_std(&nmi_per_space);
    Ok(ClusterReport {
        runs,
        ari_mean,
        ari_std,
        nmi_mean,
        nmi_std,
    })
}

/// `q`-th percentile (0..=100) with linear interpolation between order statistics.
pub fn percentile(values: &[f64], q: f64) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::invalid("percentile of an empty set"));
    }
    if !(0.0..=100.0).contains(&q) {
        return Err(Error::invalid(format!("percentile {q} outside [0, 100]")));
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let pos = q / 100.0 * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    Ok(sorted[lo] + (pos - lo as f64) * (sorted[hi] - sorted[lo]))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgreementReport {
    /// Mean pairwise cosine distance of each sample's three views.
    pub d_plus: Vec<f64>,
    /// Length of the mean of each sample's three unit views.
    pub gamma: Vec<f64>,
    pub delta_plus: f64,
    pub gamma_90: f64,
}

/// Agreement of three row-aligned views; `normalize` row-normalises first.
pub fn agreement_metrics(views: &[Matrix], normalize: bool) -> Result<AgreementReport> {
    if views.len() != 3 {
        return Err(Error::invalid(format!(
            "agreement needs exactly 3 views, got {}",
            views.len()
        )));
    }
    let shape = views[0].shape();
    if views.iter().any(|v| v.shape() != shape) {
        return Err(Error::shape("views differ in shape"));
    }
    check_nonempty(&views[0], "view")?;
    let views: Vec<Matrix> = if normalize {
        views.iter().map(unit_rows).collect()
    } else {
        views.to_vec()
    };
    let mut d_plus = Vec::with_capacity(shape.0);
    let mut gamma = Vec::with_capacity(shape.0);
    for i in 0..shape.0 {
        let [a, b, c] = [0, 1, 2].map(|m| views[m].row(i));
        let d = ((1.0 - a.dot(&b)) + (1.0 - a.dot(&c)) + (1.0 - b.dot(&c))) / 3.0;
        d_plus.push(d);
        gamma.push(((a + b + c) / 3.0).norm());
    }
    let delta_plus = d_plus.iter().sum::<f64>() / d_plus.len() as f64;
    let gamma_90 = percentile(&gamma, 90.0)?;
    Ok(AgreementReport {
        d_plus,
        gamma,
        delta_plus,
        gamma_90,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DriftReport {
    pub per_sample: Vec<f64>,
    pub mean: f64,
    pub median: f64,
}

/// Per-row `1 − ⟨norm(after_i), norm(before_i)⟩`.
pub fn drift_metric(before: &Matrix, after: &Matrix) -> Result<DriftReport> {
    if before.shape() != after.shape() {
        return Err(Error::shape(format!(
            "before {:?} vs after {:?}",
            before.shape(),
            after.shape()
        )));
    }
    check_nonempty(before, "drift input")?;
    let (b, a) = (unit_rows(before), unit_rows(after));
    let per_sample: Vec<f64> = (0..b.nrows())
        .map(|i| 1.0 - a.row(i).dot(&b.row(i)))
        .collect();
    let mean = per_sample.iter().sum::<f64>() / per_sample.len() as f64;
    let median = percentile(&per_sample, 50.0)?;
    Ok(DriftReport {
        per_sample,
        mean,
        median,
    })
}

/// Mean of each view's unit rows; used for concatenated or averaged summaries.
pub fn mean_unit_direction(rows: &[DVector<f64>]) -> DVector<f64> {
    let d = rows.first().map_or(0, |r| r.len());
    let sum = rows
        .iter()
        .fold(DVector::zeros(d), |acc, r| acc + r / r.norm().max(NORM_EPS));
    sum / rows.len().max(1) as f64
}
