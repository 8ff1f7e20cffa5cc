//! Geometry-corrected refinement of a GPA universe.
//!
//! Every matched sample gets a consensus direction, the normalised mean of
//! its unit universe directions across spaces. A single residual map
//! `T(u) = norm(û + Δ(û))`, shared by all spaces, is trained to pull
//! directions toward their consensus while a hinge penalty keeps the
//! corrected direction within a cosine-drift budget `τ` of the GPA one.

use std::path::Path;

use nalgebra::DVector;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::align::Universe;
use crate::dataio::container::{self, Dtype, Record};
use crate::dataio::{check_aligned, select_rows, EmbeddingMatrix};
use crate::error::{Error, Result};
use crate::linalg::{row_normalize, row_norms, Matrix};
use crate::seed::rng_for;

/// Rows whose summed unit directions are shorter than this are degenerate.
pub const CONSENSUS_EPS: f64 = 1e-8;

const NORM_EPS: f64 = 1e-12;

/// Per-sample unit consensus directions.
#[derive(Debug, Clone, PartialEq)]
pub struct ConsensusSet {
    pub directions: Matrix,
    pub degenerate: Vec<bool>,
}

impl ConsensusSet {
    pub fn valid_rows(&self) -> impl Iterator<Item = usize> + '_ {
        self.degenerate
            .iter()
            .enumerate()
            .filter(|(_, d)| !**d)
            .map(|(i, _)| i)
    }
}

/// `c_i = norm(mean_m norm(u_{m,i}))`; rows with `‖Σ_m û_{m,i}‖ < eps` are flagged.
pub fn consensus_directions(universe_points: &[Matrix], eps: f64) -> Result<ConsensusSet> {
    let first = universe_points
        .first()
        .ok_or_else(|| Error::invalid("no point sets given"))?;
    if universe_points.len() < 2 {
        return Err(Error::invalid("consensus needs at least two spaces"));
    }
    let shape = first.shape();
    if let Some(bad) = universe_points.iter().find(|p| p.shape() != shape) {
        return Err(Error::shape(format!(
            "point sets differ in shape: {:?} vs {:?}",
            bad.shape(),
            shape
        )));
    }
    let mut sum = Matrix::zeros(shape.0, shape.1);
    for p in universe_points {
        sum += row_normalize(p, NORM_EPS).0;
    }
    let mut directions = sum.clone();
    let mut degenerate = vec![false; shape.0];
    for (i, flag) in degenerate.iter_mut().enumerate() {
        let norm = sum.row(i).norm();
        if norm < eps {
            *flag = true;
        } else {
            directions.row_mut(i).unscale_mut(norm);
        }
    }
    Ok(ConsensusSet {
        directions,
        degenerate,
    })
}

/// One affine layer acting on row vectors: `x·W + b`.
#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub weight: Matrix,
    pub bias: DVector<f64>,
}

impl Layer {
    fn forward(&self, x: &Matrix) -> Matrix {
        let mut out = x * &self.weight;
        for mut row in out.row_iter_mut() {
            row += self.bias.transpose();
        }
        out
    }

    fn param_count(&self) -> usize {
        self.weight.len() + self.bias.len()
    }
}

/// Residual MLP `Δ`: tanh hidden layers, linear output.
#[derive(Debug, Clone, PartialEq)]
pub struct ResidualMlp {
    pub layers: Vec<Layer>,
}

struct Trace {
    /// Inputs to each layer (`activations[0]` is the normalised input).
    activations: Vec<Matrix>,
    z_norms: Vec<f64>,
    y: Matrix,
}

impl ResidualMlp {
    /// Hidden layers drawn `N(0, 1/fan_in)`, all biases and the output layer zero.
    pub fn near_identity<R: Rng>(dim: usize, hidden: &[usize], rng: &mut R) -> Self {
        let mut widths = vec![dim];
        widths.extend_from_slice(hidden);
        widths.push(dim);
        let last = widths.len() - 2;
        let layers = widths
            .windows(2)
            .enumerate()
            .map(|(k, w)| {
                let weight = if k == last {
                    Matrix::zeros(w[0], w[1])
                } else {
                    let s = 1.0 / (w[0] as f64).sqrt();
                    Matrix::from_fn(w[0], w[1], |_, _| s * rng.sample::<f64, _>(StandardNormal))
                };
                Layer {
                    weight,
                    bias: DVector::zeros(w[1]),
                }
            })
            .collect();
        Self { layers }
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].weight.nrows()
    }

    pub fn widths(&self) -> Vec<usize> {
        let mut w = vec![self.input_dim()];
        w.extend(self.layers.iter().map(|l| l.weight.ncols()));
        w
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(Layer::param_count).sum()
    }

    /// Parameters flattened layer by layer: weight (column-major), then bias.
    pub fn flat_params(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        for l in &self.layers {
            out.extend(l.weight.iter());
            out.extend(l.bias.iter());
        }
        out
    }

    pub fn set_flat_params(&mut self, params: &[f64]) {
        assert_eq!(params.len(), self.param_count(), "parameter count");
        let mut at = 0;
        for l in &mut self.layers {
            let n = l.weight.len();
            l.weight.as_mut_slice().copy_from_slice(&params[at..at + n]);
            at += n;
            let n = l.bias.len();
            l.bias.as_mut_slice().copy_from_slice(&params[at..at + n]);
            at += n;
        }
    }

    fn residual(&self, unit: &Matrix) -> (Vec<Matrix>, Matrix) {
        let mut activations = vec![unit.clone()];
        let mut h = unit.clone();
        let last = self.layers.len() - 1;
        for (k, layer) in self.layers.iter().enumerate() {
            let pre = layer.forward(&h);
            if k == last {
                return (activations, pre);
            }
            h = pre.map(f64::tanh);
            activations.push(h.clone());
        }
        unreachable!("network has at least one layer")
    }

    fn trace(&self, u: &Matrix) -> Trace {
        let (unit, _) = row_normalize(u, NORM_EPS);
        let (activations, delta) = self.residual(&unit);
        let z = &unit + delta;
        let z_norms: Vec<f64> = z.row_iter().map(|r| r.norm()).collect();
        let mut y = z;
        for (i, n) in z_norms.iter().enumerate() {
            if *n >= NORM_EPS {
                y.row_mut(i).unscale_mut(*n);
            }
        }
        Trace {
            activations,
            z_norms,
            y,
        }
    }

    /// Gradient of a loss with respect to all parameters, given `∂L/∂y`.
    fn backward(&self, trace: &Trace, grad_y: &Matrix) -> Vec<f64> {
        // Through y = z / ‖z‖.
        let mut grad = Matrix::zeros(grad_y.nrows(), grad_y.ncols());
        for i in 0..grad_y.nrows() {
            let n = trace.z_norms[i];
            if n < NORM_EPS {
                continue;
            }
            let y = trace.y.row(i);
            let g = grad_y.row(i);
            let radial = g.dot(&y);
            grad.row_mut(i).copy_from(&((g - y * radial) / n));
        }
        let mut grads: Vec<(Matrix, DVector<f64>)> = Vec::with_capacity(self.layers.len());
        for k in (0..self.layers.len()).rev() {
            let input = &trace.activations[k];
            let gw = input.transpose() * &grad;
            let gb = DVector::from_iterator(grad.ncols(), grad.column_iter().map(|c| c.sum()));
            grads.push((gw, gb));
            if k > 0 {
                let mut back = &grad * self.layers[k].weight.transpose();
                back.zip_apply(input, |g, h| *g *= 1.0 - h * h);
                grad = back;
            }
        }
        grads.reverse();
        let mut out = Vec::with_capacity(self.param_count());
        for (gw, gb) in grads {
            out.extend(gw.iter());
            out.extend(gb.iter());
        }
        out
    }
}

/// Minibatch settings for corrector training.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Hidden widths of `Δ`; empty means two layers of width `2d`.
    #[serde(default)]
    pub hidden: Vec<usize>,
    #[serde(default)]
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 60,
            batch_size: 64,
            learning_rate: 0.25,
            hidden: Vec::new(),
            seed: 0,
        }
    }
}

impl TrainConfig {
    fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::invalid("epochs and batch_size must be positive"));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::invalid("learning_rate must be positive"));
        }
        if self.hidden.contains(&0) {
            return Err(Error::invalid("hidden widths must be positive"));
        }
        Ok(())
    }

    fn hidden_for(&self, dim: usize) -> Vec<usize> {
        if self.hidden.is_empty() {
            vec![2 * dim, 2 * dim]
        } else {
            self.hidden.clone()
        }
    }
}

/// Trust-region hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Trust {
    /// Drift tolerance below which no penalty applies.
    pub tau: f64,
    /// Penalty weight once drift exceeds `tau`.
    pub lambda: f64,
}

impl Default for Trust {
    fn default() -> Self {
        Self {
            tau: 0.10,
            lambda: 1.0,
        }
    }
}

impl Trust {
    fn validate(&self) -> Result<()> {
        if !(self.tau >= 0.0 && self.lambda >= 0.0 && self.tau.is_finite() && self.lambda.is_finite()) {
            return Err(Error::invalid("tau and lambda must be finite and non-negative"));
        }
        Ok(())
    }
}

/// The trained shared correction.
#[derive(Debug, Clone, PartialEq)]
pub struct Corrector {
    pub mlp: ResidualMlp,
    pub trust: Trust,
    pub seed: u64,
    /// Mean training loss before training (index 0) and after each epoch.
    pub loss_log: Vec<f64>,
}

/// Mean loss and its two components.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossBreakdown {
    pub total: f64,
    pub align: f64,
    pub trust: f64,
    /// Fraction of rows whose drift exceeds `tau`.
    pub active_fraction: f64,
}

impl Corrector {
    /// Untrained corrector with a zero output layer, i.e. `T(u) = norm(u)`.
    pub fn new(dim: usize, hidden: &[usize], trust: Trust, seed: u64) -> Self {
        let mut rng = rng_for(seed, "gcpa/init");
        Self {
            mlp: ResidualMlp::near_identity(dim, hidden, &mut rng),
            trust,
            seed,
            loss_log: Vec::new(),
        }
    }

    pub fn dim(&self) -> usize {
        self.mlp.input_dim()
    }

    fn check_dim(&self, u: &Matrix) -> Result<()> {
        if u.ncols() != self.dim() {
            return Err(Error::shape(format!(
                "corrector expects {} columns, got {}",
                self.dim(),
                u.ncols()
            )));
        }
        Ok(())
    }

    /// `T(u) = norm(norm(u) + Δ(norm(u)))`, row-wise.
    pub fn forward(&self, u: &Matrix) -> Result<Matrix> {
        self.check_dim(u)?;
        Ok(self.mlp.trace(u).y)
    }

    fn loss_terms(&self, trace: &Trace, u_unit: &Matrix, c: &Matrix) -> (LossBreakdown, Vec<bool>) {
        let b = c.nrows() as f64;
        let mut align = 0.0;
        let mut trust = 0.0;
        let mut active = vec![false; c.nrows()];
        for (i, flag) in active.iter_mut().enumerate() {
            let y = trace.y.row(i);
            align += 1.0 - y.dot(&c.row(i));
            let drift = 1.0 - y.dot(&u_unit.row(i));
            if drift > self.trust.tau {
                trust += drift - self.trust.tau;
                *flag = true;
            }
        }
        let active_count = active.iter().filter(|a| **a).count() as f64;
        let breakdown = LossBreakdown {
            total: align / b + self.trust.lambda * trust / b,
            align: align / b,
            trust: trust / b,
            active_fraction: active_count / b,
        };
        (breakdown, active)
    }

    /// `mean(1 − ⟨y, c⟩) + λ·mean(max(0, (1 − ⟨y, û⟩) − τ))` with `y = T(u)`.
    pub fn loss(&self, u: &Matrix, c: &Matrix) -> Result<LossBreakdown> {
        self.check_dim(u)?;
        if u.shape() != c.shape() {
            return Err(Error::shape(format!(
                "batch {:?} vs targets {:?}",
                u.shape(),
                c.shape()
            )));
        }
        let trace = self.mlp.trace(u);
        Ok(self.loss_terms(&trace, &trace.activations[0], c).0)
    }

    /// Loss and its gradient with respect to the flattened parameters.
    pub fn loss_and_grad(&self, u: &Matrix, c: &Matrix) -> Result<(LossBreakdown, Vec<f64>)> {
        self.check_dim(u)?;
        if u.shape() != c.shape() {
            return Err(Error::shape("batch and targets differ in shape"));
        }
        let trace = self.mlp.trace(u);
        let unit = &trace.activations[0];
        let (breakdown, active) = self.loss_terms(&trace, unit, c);
        let b = c.nrows() as f64;
        let mut grad_y = -c / b;
        for (i, on) in active.iter().enumerate() {
            if *on {
                let pull = unit.row(i) * (self.trust.lambda / b);
                let mut row = grad_y.row_mut(i);
                row -= pull;
            }
        }
        Ok((breakdown, self.mlp.backward(&trace, &grad_y)))
    }
}

/// Map each space's training rows into the universe, in universe space order.
fn universe_points(universe: &Universe, spaces: &[EmbeddingMatrix]) -> Result<Vec<Matrix>> {
    check_aligned(spaces)?;
    spaces
        .iter()
        .map(|s| universe.to_universe(&s.data, &s.space_id))
        .collect()
}

/// Train the shared corrector on all spaces' universe points pooled together.
///
/// Consensus directions are computed once from the GPA universe; degenerate
/// rows are left out. Plain minibatch gradient descent with a fixed learning
/// rate and a seeded shuffle, so a given seed reproduces `loss_log` exactly.
pub fn fit_corrector(
    universe: &Universe,
    spaces: &[EmbeddingMatrix],
    cfg: &TrainConfig,
    trust: Trust,
) -> Result<Corrector> {
    cfg.validate()?;
    trust.validate()?;
    let points = universe_points(universe, spaces)?;
    let consensus = consensus_directions(&points, CONSENSUS_EPS)?;
    let rows: Vec<usize> = consensus.valid_rows().collect();
    if rows.is_empty() {
        return Err(Error::Numerical("every consensus row is degenerate".into()));
    }
    let d = universe.dim();
    let n_valid = rows.len();
    let mut inputs = Matrix::zeros(n_valid * points.len(), d);
    let mut targets = Matrix::zeros(n_valid * points.len(), d);
    for (m, p) in points.iter().enumerate() {
        for (k, &i) in rows.iter().enumerate() {
            inputs.row_mut(m * n_valid + k).copy_from(&p.row(i));
            targets
                .row_mut(m * n_valid + k)
                .copy_from(&consensus.directions.row(i));
        }
    }

    let mut corrector = Corrector::new(d, &cfg.hidden_for(d), trust, cfg.seed);
    let mut rng = rng_for(cfg.seed, "gcpa/shuffle");
    let mut order: Vec<usize> = (0..inputs.nrows()).collect();
    let mut params = corrector.mlp.flat_params();
    corrector.loss_log.push(corrector.loss(&inputs, &targets)?.total);

    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for batch in order.chunks(cfg.batch_size) {
            let u = select_rows(&inputs, batch);
            let c = select_rows(&targets, batch);
            let (_, grad) = corrector.loss_and_grad(&u, &c)?;
            for (p, g) in params.iter_mut().zip(&grad) {
                *p -= cfg.learning_rate * g;
            }
            corrector.mlp.set_flat_params(&params);
        }
        let loss = corrector.loss(&inputs, &targets)?.total;
        if !loss.is_finite() {
            return Err(Error::Numerical(format!(
                "training loss is not finite after epoch {epoch}"
            )));
        }
        corrector.loss_log.push(loss);
    }
    Ok(corrector)
}

/// `T(x·Ω_space)`; with `rescale`, each row keeps its GPA norm.
pub fn gcpa_to_universe(
    universe: &Universe,
    corrector: &Corrector,
    x: &Matrix,
    space: &str,
    rescale: bool,
) -> Result<Matrix> {
    let u = universe.to_universe(x, space)?;
    let mut y = corrector.forward(&u)?;
    if rescale {
        let norms = row_norms(&u);
        for (i, n) in norms.iter().enumerate() {
            y.row_mut(i).scale_mut(*n);
        }
    }
    Ok(y)
}

/// Both sides of the consensus identities for one sample's unit directions:
/// `(1/M)Σ⟨û_m, c⟩ = (1/M)‖Σû_m‖` and `Σ_{m<n}⟨û_m, û_n⟩ = (‖Σû_m‖² − M)/2`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ConsensusIdentities {
    pub mean_cosine_to_consensus: f64,
    pub mean_resultant_length: f64,
    pub pairwise_cosine_sum: f64,
    pub resultant_energy: f64,
}

pub fn consensus_identities(unit_vectors: &[DVector<f64>]) -> Result<ConsensusIdentities> {
    let first = unit_vectors
        .first()
        .ok_or_else(|| Error::invalid("no vectors given"))?;
    let m = unit_vectors.len() as f64;
    for v in unit_vectors {
        if v.len() != first.len() {
            return Err(Error::shape("vectors differ in length"));
        }
        if (v.norm() - 1.0).abs() > 1e-10 {
            return Err(Error::invalid(format!(
                "vector has norm {}, expected unit",
                v.norm()
            )));
        }
    }
    let sum = unit_vectors
        .iter()
        .fold(DVector::zeros(first.len()), |acc, v| acc + v);
    let resultant = sum.norm();
    let c = if resultant > 0.0 {
        &sum / resultant
    } else {
        DVector::zeros(first.len())
    };
    let mean_cos = unit_vectors.iter().map(|v| v.dot(&c)).sum::<f64>() / m;
    let mut pairwise = 0.0;
    for a in 0..unit_vectors.len() {
        for b in a + 1..unit_vectors.len() {
            pairwise += unit_vectors[a].dot(&unit_vectors[b]);
        }
    }
    Ok(ConsensusIdentities {
        mean_cosine_to_consensus: mean_cos,
        mean_resultant_length: resultant / m,
        pairwise_cosine_sum: pairwise,
        resultant_energy: (resultant * resultant - m) / 2.0,
    })
}

#[derive(Debug, Serialize, Deserialize)]
struct CorrectorIndex {
    kind: String,
    arch: Vec<usize>,
    activation: String,
    tau: f64,
    lambda: f64,
    seed: u64,
    loss_log: Vec<f64>,
    layers: Vec<[String; 2]>,
}

const CORRECTOR_KIND: &str = "gcpa-corrector";

impl Corrector {
    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut layers = Vec::new();
        for (k, l) in self.mlp.layers.iter().enumerate() {
            let w = format!("weight{k}.mwal");
            let b = format!("bias{k}.mwal");
            container::write_matrix(&dir.join(&w), &l.weight)?;
            let bias = Matrix::from_row_slice(1, l.bias.len(), l.bias.as_slice());
            container::write_record(
                &dir.join(&b),
                &Record {
                    data: bias,
                    row_ids: Vec::new(),
                    meta: None,
                },
                Dtype::F64,
            )?;
            layers.push([w, b]);
        }
        let index = CorrectorIndex {
            kind: CORRECTOR_KIND.into(),
            arch: self.mlp.widths(),
            activation: "tanh".into(),
            tau: self.trust.tau,
            lambda: self.trust.lambda,
            seed: self.seed,
            loss_log: self.loss_log.clone(),
            layers,
        };
        let path = dir.join("corrector.json");
        std::fs::write(&path, serde_json::to_string_pretty(&index)? + "\n")
            .map_err(|e| Error::io(&path, e))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join("corrector.json");
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let index: CorrectorIndex = serde_json::from_str(&text)?;
        if index.kind != CORRECTOR_KIND {
            return Err(Error::invalid(format!(
                "{} describes a `{}`, not a corrector",
                path.display(),
                index.kind
            )));
        }
        let layers = index
            .layers
            .iter()
            .map(|[w, b]| {
                let weight = container::read_matrix(&dir.join(w))?;
                let bias = container::read_matrix(&dir.join(b))?;
                Ok(Layer {
                    weight,
                    bias: DVector::from_iterator(bias.len(), bias.iter().copied()),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let mlp = ResidualMlp { layers };
        if mlp.widths() != index.arch {
            return Err(Error::shape(format!(
                "weights give widths {:?}, index declares {:?}",
                mlp.widths(),
                index.arch
            )));
        }
        Ok(Self {
            mlp,
            trust: Trust {
                tau: index.tau,
                lambda: index.lambda,
            },
            seed: index.seed,
            loss_log: index.loss_log,
        })
    }
}
