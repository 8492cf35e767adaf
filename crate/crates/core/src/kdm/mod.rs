//! Knowledge-guided disentanglement: variational estimation of a contrastive
//! log-ratio upper bound on the mutual information between representations
//! and known version-variant factors, plus the knowledge-tradeoff stabilizers
//! (gated fusion and pseudo-label classification).

pub mod kmeans;

use std::collections::BTreeMap;

use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;

use crate::autodiff::{Tape, Var};
use crate::encoder::LinearParams;
use crate::error::{DiscoverError, Result};
use crate::opt::Adam;
use crate::synthcover::Corpus;

/// Soft bound on predicted log-variances.
pub const LOGVAR_BOUND: f64 = 8.0;

/// Number of meaningful statistics in an F0 summary vector (the rest of the
/// vector is zero padding).
pub const F0_SUMMARY_STATS: usize = 14;

/// Per-recording version-variant factors: `o` is the F0 summary, `t` the
/// timbre vector.
#[derive(Debug, Clone)]
pub struct KnowledgeBank {
    ids: Vec<u32>,
    index: BTreeMap<u32, usize>,
    pub o: Vec<Vec<f64>>,
    pub t: Vec<Vec<f64>>,
}

/// Fixed-dimension summary of a variable-length F0 contour: mean, standard
/// deviation, deciles 10%..90%, delta mean, delta standard deviation, voiced
/// fraction, zero-padded to `dim`.
pub fn f0_summary(contour: &[f64], dim: usize) -> Result<Vec<f64>> {
    if dim < F0_SUMMARY_STATS {
        return Err(DiscoverError::Config(format!(
            "kdm.knowledge_dim must be at least {F0_SUMMARY_STATS}, got {dim}"
        )));
    }
    if contour.is_empty() {
        return Err(DiscoverError::Input("empty f0 contour".into()));
    }
    let n = contour.len() as f64;
    let mean = contour.iter().sum::<f64>() / n;
    let std = (contour.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n).sqrt();

    let mut sorted = contour.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let quantile = |p: f64| -> f64 {
        let pos = p * (sorted.len() - 1) as f64;
        let lo = pos.floor() as usize;
        let hi = pos.ceil() as usize;
        let frac = pos - lo as f64;
        sorted[lo] * (1.0 - frac) + sorted[hi] * frac
    };

    let deltas: Vec<f64> = contour.windows(2).map(|w| w[1] - w[0]).collect();
    let (dmean, dstd) = if deltas.is_empty() {
        (0.0, 0.0)
    } else {
        let dn = deltas.len() as f64;
        let dm = deltas.iter().sum::<f64>() / dn;
        let ds = (deltas.iter().map(|v| (v - dm) * (v - dm)).sum::<f64>() / dn).sqrt();
        (dm, ds)
    };
    let voiced = contour.iter().filter(|v| v.is_finite() && **v > 0.0).count() as f64 / n;

    let mut out = vec![mean, std];
    for decile in 1..=9 {
        out.push(quantile(decile as f64 / 10.0));
    }
    out.push(dmean);
    out.push(dstd);
    out.push(voiced);
    out.resize(dim, 0.0);
    Ok(out)
}

/// Standardize each dimension to zero mean / unit variance over the bank.
/// Constant dimensions (zero padding, constant stats) map to zero. Mutual
/// information is invariant under this affine re-parameterization; the
/// estimators train far better on standardized targets.
fn standardize(rows: &mut [Vec<f64>]) {
    if rows.is_empty() {
        return;
    }
    let n = rows.len() as f64;
    let dim = rows[0].len();
    for k in 0..dim {
        let mean = rows.iter().map(|r| r[k]).sum::<f64>() / n;
        let var = rows.iter().map(|r| (r[k] - mean) * (r[k] - mean)).sum::<f64>() / n;
        let scale = if var.sqrt() > 1e-9 { 1.0 / var.sqrt() } else { 0.0 };
        for r in rows.iter_mut() {
            r[k] = (r[k] - mean) * scale;
        }
    }
}

impl KnowledgeBank {
    /// Build the bank from corpus ground truth, standardized per dimension.
    pub fn from_corpus(corpus: &Corpus, knowledge_dim: usize) -> Result<Self> {
        let mut ids = Vec::new();
        let mut o = Vec::new();
        let mut t = Vec::new();
        for rec in &corpus.recordings {
            ids.push(rec.recording_id);
            o.push(f0_summary(&rec.f0_contour, knowledge_dim)?);
            t.push(rec.timbre.clone());
        }
        standardize(&mut o);
        standardize(&mut t);
        Self::from_arrays(ids, o, t)
    }

    /// Build the bank from precomputed per-recording arrays (the hook for
    /// external F0/timbre extractors).
    pub fn from_arrays(ids: Vec<u32>, o: Vec<Vec<f64>>, t: Vec<Vec<f64>>) -> Result<Self> {
        if ids.len() != o.len() || ids.len() != t.len() {
            return Err(DiscoverError::Bank(
                "ids, o, and t must have one entry per recording".into(),
            ));
        }
        for row in o.iter().chain(t.iter()) {
            if row.iter().any(|v| !v.is_finite()) {
                return Err(DiscoverError::Bank(
                    "knowledge bank contains non-finite values".into(),
                ));
            }
        }
        let index = ids
            .iter()
            .enumerate()
            .map(|(i, id)| (*id, i))
            .collect::<BTreeMap<_, _>>();
        if index.len() != ids.len() {
            return Err(DiscoverError::Bank("duplicate recording ids".into()));
        }
        Ok(KnowledgeBank { ids, index, o, t })
    }

    /// Load precomputed knowledge arrays (the hook for external F0/timbre
    /// extractors): `knowledge_o.f32` and `knowledge_t.f32` in the corpus
    /// directory, rank-2 arrays with one row per recording in corpus order,
    /// in the standard binary array layout.
    pub fn from_precomputed_dir(dir: &std::path::Path, ids: Vec<u32>) -> Result<Self> {
        let read = |name: &str| -> Result<Vec<Vec<f64>>> {
            let (rank, rows, cols, data) =
                crate::synthcover::io::read_array(&dir.join(name))?;
            if rank != 2 || rows as usize != ids.len() {
                return Err(DiscoverError::Bank(format!(
                    "{name}: expected a rank-2 array with {} rows",
                    ids.len()
                )));
            }
            Ok((0..rows as usize)
                .map(|i| {
                    data[i * cols as usize..(i + 1) * cols as usize]
                        .iter()
                        .map(|v| *v as f64)
                        .collect()
                })
                .collect())
        };
        let o = read("knowledge_o.f32")?;
        let t = read("knowledge_t.f32")?;
        Self::from_arrays(ids, o, t)
    }

    pub fn ids(&self) -> &[u32] {
        &self.ids
    }

    pub fn get(&self, id: u32) -> Result<(&[f64], &[f64])> {
        let idx = self
            .index
            .get(&id)
            .ok_or_else(|| DiscoverError::Bank(format!("no knowledge entry for recording {id}")))?;
        Ok((&self.o[*idx], &self.t[*idx]))
    }
}

/// Variational estimator for one knowledge kind: a density head `q(z|x)`
/// (hidden layer + mean and soft-clamped log-variance heads over the
/// representation) plus the shared knowledge trunk `q(z)` used by the
/// tradeoff mechanisms.
#[derive(Debug, Clone)]
pub struct VariationalEstimator {
    pub name: String,
    pub x_dim: usize,
    pub z_dim: usize,
    pub hidden_dim: usize,
    pub hidden: LinearParams,
    pub mean: LinearParams,
    pub logvar: LinearParams,
    pub trunk1: LinearParams,
    pub trunk2: LinearParams,
}

impl VariationalEstimator {
    pub fn new(name: &str, x_dim: usize, z_dim: usize, hidden_dim: usize, seed: u64) -> Self {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        VariationalEstimator {
            name: name.to_string(),
            x_dim,
            z_dim,
            hidden_dim,
            hidden: LinearParams::new(x_dim, hidden_dim, &mut rng),
            mean: LinearParams::new(hidden_dim, z_dim, &mut rng),
            logvar: LinearParams::new(hidden_dim, z_dim, &mut rng),
            trunk1: LinearParams::new(z_dim, hidden_dim, &mut rng),
            trunk2: LinearParams::new(hidden_dim, x_dim, &mut rng),
        }
    }

    /// Density parameters: trained by the estimator likelihood objective in
    /// the auxiliary step, frozen during the main step.
    pub fn density_named_arrays(&self) -> Vec<(String, &Array2<f64>)> {
        let p = &self.name;
        vec![
            (format!("est.{p}.hidden.w"), &self.hidden.w),
            (format!("est.{p}.hidden.b"), &self.hidden.b),
            (format!("est.{p}.mean.w"), &self.mean.w),
            (format!("est.{p}.mean.b"), &self.mean.b),
            (format!("est.{p}.logvar.w"), &self.logvar.w),
            (format!("est.{p}.logvar.b"), &self.logvar.b),
        ]
    }

    pub fn density_named_arrays_mut(&mut self) -> Vec<(String, &mut Array2<f64>)> {
        let p = self.name.clone();
        vec![
            (format!("est.{p}.hidden.w"), &mut self.hidden.w),
            (format!("est.{p}.hidden.b"), &mut self.hidden.b),
            (format!("est.{p}.mean.w"), &mut self.mean.w),
            (format!("est.{p}.mean.b"), &mut self.mean.b),
            (format!("est.{p}.logvar.w"), &mut self.logvar.w),
            (format!("est.{p}.logvar.b"), &mut self.logvar.b),
        ]
    }

    /// Knowledge-trunk parameters: trained through the tradeoff paths in the
    /// main step.
    pub fn trunk_named_arrays(&self) -> Vec<(String, &Array2<f64>)> {
        let p = &self.name;
        vec![
            (format!("est.{p}.trunk1.w"), &self.trunk1.w),
            (format!("est.{p}.trunk1.b"), &self.trunk1.b),
            (format!("est.{p}.trunk2.w"), &self.trunk2.w),
            (format!("est.{p}.trunk2.b"), &self.trunk2.b),
        ]
    }

    pub fn trunk_named_arrays_mut(&mut self) -> Vec<(String, &mut Array2<f64>)> {
        let p = self.name.clone();
        vec![
            (format!("est.{p}.trunk1.w"), &mut self.trunk1.w),
            (format!("est.{p}.trunk1.b"), &mut self.trunk1.b),
            (format!("est.{p}.trunk2.w"), &mut self.trunk2.w),
            (format!("est.{p}.trunk2.b"), &mut self.trunk2.b),
        ]
    }

    /// Knowledge-trunk projection `q(z)` of a knowledge vector into the
    /// representation space.
    pub fn trunk_forward(&self, z: &[f64]) -> Result<Vec<f64>> {
        if z.len() != self.z_dim {
            return Err(DiscoverError::Input(format!(
                "knowledge vector length {} does not match estimator z dim {}",
                z.len(),
                self.z_dim
            )));
        }
        let mut tape = Tape::new();
        let vars = EstimatorVars::leaves(&mut tape, self);
        let zv = tape.leaf_row(z);
        let q = vars.trunk(&mut tape, zv);
        Ok(tape.value(q).row(0).to_vec())
    }
}

/// Tape handles for one estimator's parameters.
pub struct EstimatorVars {
    pub hidden_w: Var,
    pub hidden_b: Var,
    pub mean_w: Var,
    pub mean_b: Var,
    pub logvar_w: Var,
    pub logvar_b: Var,
    pub trunk1_w: Var,
    pub trunk1_b: Var,
    pub trunk2_w: Var,
    pub trunk2_b: Var,
}

impl EstimatorVars {
    pub fn leaves(tape: &mut Tape, p: &VariationalEstimator) -> Self {
        EstimatorVars {
            hidden_w: tape.leaf(p.hidden.w.clone()),
            hidden_b: tape.leaf(p.hidden.b.clone()),
            mean_w: tape.leaf(p.mean.w.clone()),
            mean_b: tape.leaf(p.mean.b.clone()),
            logvar_w: tape.leaf(p.logvar.w.clone()),
            logvar_b: tape.leaf(p.logvar.b.clone()),
            trunk1_w: tape.leaf(p.trunk1.w.clone()),
            trunk1_b: tape.leaf(p.trunk1.b.clone()),
            trunk2_w: tape.leaf(p.trunk2.w.clone()),
            trunk2_b: tape.leaf(p.trunk2.b.clone()),
        }
    }

    /// Mean and log-variance heads over a batch of representations.
    /// Log-variances are soft-clamped into `[-LOGVAR_BOUND, LOGVAR_BOUND]`.
    pub fn density(&self, tape: &mut Tape, x: Var) -> (Var, Var) {
        let h = tape.matmul(x, self.hidden_w);
        let h = tape.add_row(h, self.hidden_b);
        let h = tape.tanh(h);
        let mu = tape.matmul(h, self.mean_w);
        let mu = tape.add_row(mu, self.mean_b);
        let raw = tape.matmul(h, self.logvar_w);
        let raw = tape.add_row(raw, self.logvar_b);
        let squashed = tape.scale(raw, 1.0 / LOGVAR_BOUND);
        let squashed = tape.tanh(squashed);
        let logvar = tape.scale(squashed, LOGVAR_BOUND);
        (mu, logvar)
    }

    /// Knowledge trunk `q(z)` over a batch of knowledge vectors.
    pub fn trunk(&self, tape: &mut Tape, z: Var) -> Var {
        let h = tape.matmul(z, self.trunk1_w);
        let h = tape.add_row(h, self.trunk1_b);
        let h = tape.tanh(h);
        let q = tape.matmul(h, self.trunk2_w);
        tape.add_row(q, self.trunk2_b)
    }
}

fn batch_to_array(batch: &[Vec<f64>], dim: usize, what: &str) -> Result<Array2<f64>> {
    if batch.is_empty() {
        return Err(DiscoverError::Batch(format!("empty {what} batch")));
    }
    let mut out = Array2::zeros((batch.len(), dim));
    for (i, row) in batch.iter().enumerate() {
        if row.len() != dim {
            return Err(DiscoverError::Input(format!(
                "{what} row {i} has length {}, expected {dim}",
                row.len()
            )));
        }
        for (j, v) in row.iter().enumerate() {
            if !v.is_finite() {
                return Err(DiscoverError::Numeric(format!(
                    "{what} row {i} contains non-finite values"
                )));
            }
            out[(i, j)] = *v;
        }
    }
    Ok(out)
}

/// Log of the diagonal-Gaussian density of `z` under the estimator's heads
/// applied to `x`. Can exceed zero: densities are not probabilities.
pub fn estimator_loglik(x: &[f64], z: &[f64], est: &VariationalEstimator) -> Result<f64> {
    let x_arr = batch_to_array(std::slice::from_ref(&x.to_vec()), est.x_dim, "x")?;
    let z_arr = batch_to_array(std::slice::from_ref(&z.to_vec()), est.z_dim, "z")?;
    let mut tape = Tape::new();
    let vars = EstimatorVars::leaves(&mut tape, est);
    let xv = tape.leaf(x_arr);
    let (mu, logvar) = vars.density(&mut tape, xv);
    let ll = tape.gauss_loglik_mean(mu, logvar, z_arr);
    Ok(tape.scalar(ll))
}

/// Batch estimate of the contrastive log-ratio upper bound between paired
/// `x` and `z` samples.
pub fn vclub_upper(
    x_batch: &[Vec<f64>],
    z_batch: &[Vec<f64>],
    est: &VariationalEstimator,
) -> Result<f64> {
    if x_batch.len() < 2 {
        return Err(DiscoverError::Batch(format!(
            "the bound needs a batch of at least 2, got {}",
            x_batch.len()
        )));
    }
    if x_batch.len() != z_batch.len() {
        return Err(DiscoverError::Batch(
            "x and z batches must be paired by index".into(),
        ));
    }
    let x_arr = batch_to_array(x_batch, est.x_dim, "x")?;
    let z_arr = batch_to_array(z_batch, est.z_dim, "z")?;
    let mut tape = Tape::new();
    let vars = EstimatorVars::leaves(&mut tape, est);
    let xv = tape.leaf(x_arr);
    let (mu, logvar) = vars.density(&mut tape, xv);
    let bound = tape.club(mu, logvar, z_arr);
    Ok(tape.scalar(bound))
}

/// Total mutual-information loss: the sum of the F0 and timbre bounds for the
/// given recordings.
pub fn mi_loss(
    x_batch: &[Vec<f64>],
    recording_ids: &[u32],
    bank: &KnowledgeBank,
    est_o: &VariationalEstimator,
    est_t: &VariationalEstimator,
) -> Result<f64> {
    if x_batch.len() != recording_ids.len() {
        return Err(DiscoverError::Batch(
            "one recording id per representation required".into(),
        ));
    }
    let mut o_batch = Vec::with_capacity(recording_ids.len());
    let mut t_batch = Vec::with_capacity(recording_ids.len());
    for id in recording_ids {
        let (o, t) = bank.get(*id)?;
        o_batch.push(o.to_vec());
        t_batch.push(t.to_vec());
    }
    Ok(vclub_upper(x_batch, &o_batch, est_o)? + vclub_upper(x_batch, &t_batch, est_t)?)
}

/// One maximum-likelihood update of the estimator's density parameters on a
/// batch of detached representations. Returns the loss `-mean loglik`.
pub fn train_estimator_step(
    x_batch: &[Vec<f64>],
    z_batch: &[Vec<f64>],
    est: &mut VariationalEstimator,
    opt: &mut Adam,
) -> Result<f64> {
    if x_batch.len() != z_batch.len() || x_batch.is_empty() {
        return Err(DiscoverError::Batch(
            "estimator training needs non-empty paired batches".into(),
        ));
    }
    let x_arr = batch_to_array(x_batch, est.x_dim, "x")?;
    let z_arr = batch_to_array(z_batch, est.z_dim, "z")?;
    let mut tape = Tape::new();
    let vars = EstimatorVars::leaves(&mut tape, est);
    let xv = tape.leaf(x_arr);
    let (mu, logvar) = vars.density(&mut tape, xv);
    let ll = tape.gauss_loglik_mean(mu, logvar, z_arr);
    let loss = tape.scale(ll, -1.0);
    let loss_value = tape.scalar(loss);
    if !loss_value.is_finite() {
        return Err(DiscoverError::Training(format!(
            "estimator {} likelihood loss diverged to {loss_value}",
            est.name
        )));
    }
    let grads = tape.backward(loss);
    let var_list = [
        vars.hidden_w,
        vars.hidden_b,
        vars.mean_w,
        vars.mean_b,
        vars.logvar_w,
        vars.logvar_b,
    ];
    let mut updates = Vec::new();
    for ((name, param), var) in est.density_named_arrays_mut().into_iter().zip(var_list) {
        let (r, c) = param.dim();
        let grad = grads.get_or_zeros(var, r, c);
        updates.push((name, param, grad));
    }
    opt.step(updates);
    Ok(loss_value)
}

/// Gate over concatenated `(e, q(z))`: a scalar tradeoff in (0, 1) per sample.
#[derive(Debug, Clone)]
pub struct GateParams {
    pub linear: LinearParams,
}

impl GateParams {
    pub fn new(rep_dim: usize, seed: u64) -> Self {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let mut linear = LinearParams::new(2 * rep_dim, 1, &mut rng);
        // start near a = 0.98 so the task path dominates until the gate
        // learns that the knowledge projection is worth blending in
        linear.b.fill(4.0);
        GateParams { linear }
    }

    pub fn named_arrays(&self) -> Vec<(String, &Array2<f64>)> {
        vec![
            ("gate.w".into(), &self.linear.w),
            ("gate.b".into(), &self.linear.b),
        ]
    }

    pub fn named_arrays_mut(&mut self) -> Vec<(String, &mut Array2<f64>)> {
        vec![
            ("gate.w".into(), &mut self.linear.w),
            ("gate.b".into(), &mut self.linear.b),
        ]
    }
}

/// Result of gated fusion.
#[derive(Debug, Clone)]
pub struct FusedRepresentation {
    pub fused: Vec<f64>,
    /// The tradeoff weight, strictly inside (0, 1).
    pub gate: f64,
}

/// Fuse a task-oriented representation with the trunk projection of a
/// knowledge vector: `e* = a*e + (1-a)*q(z)` with `a = sigmoid(g(e, q(z)))`.
pub fn tradeoff_fuse(
    e: &[f64],
    z: &[f64],
    est: &VariationalEstimator,
    gate: &GateParams,
) -> Result<FusedRepresentation> {
    if e.len() != est.x_dim {
        return Err(DiscoverError::Input(format!(
            "representation length {} does not match estimator dim {}",
            e.len(),
            est.x_dim
        )));
    }
    if gate.linear.w.nrows() != 2 * e.len() {
        return Err(DiscoverError::Input(format!(
            "gate expects input dim {}, got representations of dim {}",
            gate.linear.w.nrows(),
            2 * e.len()
        )));
    }
    let q = est.trunk_forward(z)?;
    let mut u = gate.linear.b[(0, 0)];
    for (k, v) in e.iter().chain(q.iter()).enumerate() {
        u += v * gate.linear.w[(k, 0)];
    }
    let a = 1.0 / (1.0 + (-u).exp());
    let fused = e
        .iter()
        .zip(q.iter())
        .map(|(ev, qv)| a * ev + (1.0 - a) * qv)
        .collect();
    Ok(FusedRepresentation { fused, gate: a })
}

/// Pseudo-labels for the timbre bank, produced once before training.
#[derive(Debug, Clone)]
pub struct PseudoLabelSet {
    pub labels: BTreeMap<u32, usize>,
    pub centroids: Vec<Vec<f64>>,
    pub n_clusters: usize,
}

/// Cluster the timbre vectors of the given recordings into pseudo-classes.
pub fn make_pseudo_labels(
    ids: &[u32],
    timbres: &[Vec<f64>],
    n_clusters: usize,
    seed: u64,
) -> Result<PseudoLabelSet> {
    if ids.len() != timbres.len() {
        return Err(DiscoverError::Input(
            "one timbre vector per recording id required".into(),
        ));
    }
    let result = kmeans::kmeans(timbres, n_clusters, seed, 100)?;
    let labels = ids
        .iter()
        .zip(result.labels.iter())
        .map(|(id, l)| (*id, *l))
        .collect();
    Ok(PseudoLabelSet {
        labels,
        centroids: result.centroids,
        n_clusters,
    })
}

/// Cross-entropy of the knowledge classifier over trunk outputs `q(z)`
/// against pseudo-labels.
pub fn knowledge_cls_loss(
    z_batch: &[Vec<f64>],
    labels: &[usize],
    est: &VariationalEstimator,
    classifier: &LinearParams,
) -> Result<f64> {
    if z_batch.len() != labels.len() || z_batch.is_empty() {
        return Err(DiscoverError::Batch(
            "one label per knowledge vector required".into(),
        ));
    }
    let n_classes = classifier.w.ncols();
    for l in labels {
        if *l >= n_classes {
            return Err(DiscoverError::Input(format!(
                "pseudo-label {l} out of range for {n_classes} classes"
            )));
        }
    }
    let z_arr = batch_to_array(z_batch, est.z_dim, "z")?;
    let mut tape = Tape::new();
    let vars = EstimatorVars::leaves(&mut tape, est);
    let zv = tape.leaf(z_arr);
    let q = vars.trunk(&mut tape, zv);
    let w = tape.leaf(classifier.w.clone());
    let b = tape.leaf(classifier.b.clone());
    let logits = tape.matmul(q, w);
    let logits = tape.add_row(logits, b);
    let loss = tape.softmax_cross_entropy(logits, labels.to_vec());
    Ok(tape.scalar(loss))
}
