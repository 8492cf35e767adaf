//! Alternating two-objective training: the main step descends the task +
//! transition + MI + pseudo-label + adversarial objective over the encoder,
//! task classifier, gate, knowledge trunks, and knowledge classifier; the
//! auxiliary step trains the discriminator and the estimator density heads on
//! detached representations. One auxiliary step (configurable ratio) runs
//! before each main step on the same batch.

use std::collections::BTreeMap;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::Serialize;

use crate::autodiff::{Tape, Var};
use crate::config::Config;
use crate::encoder::{ClassifierParams, EncoderParams, EncoderVars, LinearParams};
use crate::error::{DiscoverError, Result};
use crate::gadm::{
    build_mask, variant_gradient, DiscriminatorParams, DiscriminatorVars, TransitionMetric,
};
use crate::kdm::{
    make_pseudo_labels, EstimatorVars, KnowledgeBank, PseudoLabelSet, VariationalEstimator,
};
use crate::opt::Adam;
use crate::retrieval::{evaluate, SplitPart};
use crate::synthcover::{derive_seed, Corpus, CorpusSplit};

/// A batch of positive query-target pairs; recordings are interleaved
/// `[q0, t0, q1, t1, ...]` and `labels` carries the train-class per entry.
#[derive(Debug, Clone)]
pub struct PairBatch {
    pub pairs: Vec<(u32, u32)>,
    pub recording_ids: Vec<u32>,
    pub labels: Vec<usize>,
}

/// Sample `batch_size / 2` intra-song, inter-version pairs from the train
/// recordings, without repeating a song within the batch.
pub fn sample_pairs(
    corpus: &Corpus,
    train_ids: &[u32],
    class_of_song: &BTreeMap<u32, usize>,
    batch_size: usize,
    rng: &mut ChaCha20Rng,
) -> Result<PairBatch> {
    if batch_size < 2 || !batch_size.is_multiple_of(2) {
        return Err(DiscoverError::Sampling(
            "batch size must be even and at least 2".into(),
        ));
    }
    let train_set: std::collections::BTreeSet<u32> = train_ids.iter().copied().collect();
    let mut by_song: BTreeMap<u32, Vec<u32>> = BTreeMap::new();
    for v in &corpus.versions {
        if train_set.contains(&v.recording_id) {
            by_song.entry(v.song_id).or_default().push(v.recording_id);
        }
    }
    let mut multi: Vec<(u32, Vec<u32>)> = by_song
        .into_iter()
        .filter(|(_, recs)| recs.len() >= 2)
        .collect();
    let n_pairs = batch_size / 2;
    if multi.len() < n_pairs {
        return Err(DiscoverError::Sampling(format!(
            "need {n_pairs} songs with >= 2 train versions, found {}",
            multi.len()
        )));
    }
    for i in (1..multi.len()).rev() {
        let j = rng.gen_range(0..=i);
        multi.swap(i, j);
    }

    let mut pairs = Vec::with_capacity(n_pairs);
    let mut recording_ids = Vec::with_capacity(batch_size);
    let mut labels = Vec::with_capacity(batch_size);
    for (song_id, recs) in multi.into_iter().take(n_pairs) {
        let a = rng.gen_range(0..recs.len());
        let b = loop {
            let b = rng.gen_range(0..recs.len());
            if b != a {
                break b;
            }
        };
        let class = *class_of_song
            .get(&song_id)
            .ok_or_else(|| DiscoverError::Sampling(format!("song {song_id} has no train class")))?;
        pairs.push((recs[a], recs[b]));
        recording_ids.push(recs[a]);
        recording_ids.push(recs[b]);
        labels.push(class);
        labels.push(class);
    }
    Ok(PairBatch {
        pairs,
        recording_ids,
        labels,
    })
}

/// Loss terms of one main step. Disabled terms are exactly zero.
#[derive(Debug, Clone, Copy, Default, Serialize)]
pub struct MainLosses {
    pub l_task: f64,
    pub l_trans: f64,
    pub l_mi: f64,
    pub l_zcls: f64,
    pub l_adv: f64,
    pub l_1: f64,
}

/// Loss terms of one auxiliary step. Disabled terms are exactly zero.
#[derive(Debug, Clone, Copy, Default, Serialize)]
pub struct AuxLosses {
    pub l_d1: f64,
    pub l_q: f64,
    pub l_2: f64,
}

/// Everything trained or derived during a run.
#[derive(Debug, Clone)]
pub struct TrainState {
    pub config: Config,
    pub encoder: EncoderParams,
    pub classifier: ClassifierParams,
    pub gate: crate::kdm::GateParams,
    pub est_o: VariationalEstimator,
    pub est_t: VariationalEstimator,
    pub knowledge_cls: LinearParams,
    pub disc: DiscriminatorParams,
    pub opt_main: Adam,
    pub opt_aux: Adam,
    pub epoch: usize,
    pub class_of_song: BTreeMap<u32, usize>,
    pub pseudo: Option<PseudoLabelSet>,
}

impl TrainState {
    /// Initialize all parameters for a split. The class count is the number
    /// of distinct song ids in the train split.
    pub fn new(config: &Config, corpus: &Corpus, split: &CorpusSplit) -> Result<TrainState> {
        config.validate()?;
        let train_songs = corpus.song_ids_of(&split.train);
        if train_songs.is_empty() {
            return Err(DiscoverError::Split("train split has no songs".into()));
        }
        let class_of_song: BTreeMap<u32, usize> = train_songs
            .iter()
            .enumerate()
            .map(|(i, s)| (*s, i))
            .collect();
        let s = config.train.seed;
        let dim = config.encoder.dim;
        Ok(TrainState {
            config: config.clone(),
            encoder: EncoderParams::new(
                config.data.feature_dim,
                config.encoder.hidden,
                dim,
                derive_seed(s, "enc", 0),
            ),
            classifier: ClassifierParams::new(dim, class_of_song.len(), derive_seed(s, "cls", 0)),
            gate: crate::kdm::GateParams::new(dim, derive_seed(s, "gate", 0)),
            est_o: VariationalEstimator::new(
                "o",
                dim,
                config.kdm.knowledge_dim,
                config.kdm.estimator_hidden,
                derive_seed(s, "est_o", 0),
            ),
            est_t: VariationalEstimator::new(
                "t",
                dim,
                config.data.timbre_dim,
                config.kdm.estimator_hidden,
                derive_seed(s, "est_t", 0),
            ),
            knowledge_cls: {
                let mut rng = ChaCha20Rng::seed_from_u64(derive_seed(s, "kcls", 0));
                LinearParams::new(dim, config.kdm.clusters, &mut rng)
            },
            disc: crate::gadm::init_discriminator(
                dim,
                config.gadm.disc_hidden,
                derive_seed(s, "disc", 0),
            ),
            opt_main: Adam::new(config.train.lr, config.train.weight_decay),
            opt_aux: Adam::new(config.train.lr, config.train.weight_decay),
            epoch: 0,
            class_of_song,
            pseudo: None,
        })
    }

    pub(crate) fn uses_gate(&self) -> bool {
        let k = &self.config.kdm;
        k.enabled && k.tradeoff && k.knowledge.uses_f0()
    }

    pub(crate) fn uses_pseudo(&self) -> bool {
        let k = &self.config.kdm;
        k.enabled && k.tradeoff && k.knowledge.uses_timbre()
    }

    /// Checksum over the auxiliary-side parameters (discriminator and
    /// estimator density heads); the main step must leave it unchanged.
    pub fn aux_param_checksum(&self) -> u64 {
        checksum_arrays(
            self.disc
                .named_arrays()
                .into_iter()
                .chain(self.est_o.density_named_arrays())
                .chain(self.est_t.density_named_arrays()),
        )
    }

    /// Checksum over the main-side parameters (encoder, task classifier,
    /// gate, knowledge trunks, knowledge classifier); the auxiliary step must
    /// leave it unchanged.
    pub fn main_param_checksum(&self) -> u64 {
        let kcls: Vec<(String, &Array2<f64>)> = vec![
            ("kcls.w".into(), &self.knowledge_cls.w),
            ("kcls.b".into(), &self.knowledge_cls.b),
        ];
        checksum_arrays(
            self.encoder
                .named_arrays()
                .into_iter()
                .chain(self.classifier.named_arrays())
                .chain(self.gate.named_arrays())
                .chain(self.est_o.trunk_named_arrays())
                .chain(self.est_t.trunk_named_arrays())
                .chain(kcls),
        )
    }

    /// Plain (detached) representations of a list of recordings.
    pub fn encode_plain(&self, corpus: &Corpus, ids: &[u32]) -> Result<Vec<Vec<f64>>> {
        ids.iter()
            .map(|id| {
                let rec = corpus
                    .recording(*id)
                    .ok_or_else(|| DiscoverError::Input(format!("recording {id} missing")))?;
                crate::encoder::encode(&rec.features, &self.encoder)
            })
            .collect()
    }
}

fn checksum_arrays<'a, I: Iterator<Item = (String, &'a Array2<f64>)>>(arrays: I) -> u64 {
    use sha2::{Digest, Sha256};
    let mut hasher = Sha256::new();
    for (name, arr) in arrays {
        hasher.update(name.as_bytes());
        for v in arr.iter() {
            hasher.update(v.to_le_bytes());
        }
    }
    let out = hasher.finalize();
    u64::from_le_bytes(out[..8].try_into().unwrap())
}

/// Per-recording masks for an interleaved pair batch, built from detached
/// transition-cost gradients. Degenerate pairs fall back to an identity mask.
fn pair_masks(
    x_values: &[Vec<f64>],
    metric: TransitionMetric,
    percentile: f64,
) -> Result<Vec<Vec<f64>>> {
    let mut masks = Vec::with_capacity(x_values.len());
    for p in 0..x_values.len() / 2 {
        let (q, t) = (&x_values[2 * p], &x_values[2 * p + 1]);
        for (a, b) in [(q, t), (t, q)] {
            let grad = variant_gradient(a, b, metric)?;
            if grad.degenerate {
                masks.push(vec![1.0; a.len()]);
            } else {
                masks.push(build_mask(&grad.g, percentile)?.m);
            }
        }
    }
    Ok(masks)
}

fn rows_to_array(rows: &[Vec<f64>]) -> Array2<f64> {
    let cols = rows[0].len();
    let mut out = Array2::zeros((rows.len(), cols));
    for (i, r) in rows.iter().enumerate() {
        for (j, v) in r.iter().enumerate() {
            out[(i, j)] = *v;
        }
    }
    out
}

fn finite_or_training_error(terms: &[(&str, f64)]) -> Result<()> {
    if terms.iter().any(|(_, v)| !v.is_finite()) {
        let detail: Vec<String> = terms.iter().map(|(k, v)| format!("{k}={v}")).collect();
        return Err(DiscoverError::Training(format!(
            "non-finite loss: {}",
            detail.join(", ")
        )));
    }
    Ok(())
}

/// Forward and backward pass of the main objective `L_1` without applying
/// any update: returns the loss terms and the gradient of every task-side
/// parameter participating in the objective.
pub fn main_objective(
    corpus: &Corpus,
    batch: &PairBatch,
    state: &TrainState,
) -> Result<(MainLosses, BTreeMap<String, Array2<f64>>)> {
    main_objective_impl(corpus, batch, state, None)
}

/// Gradient-check entry point: evaluate the main objective with externally
/// supplied per-recording masks. Masks are constants of the objective by
/// construction, so finite differences of this function match the tape.
pub fn main_objective_with_masks(
    corpus: &Corpus,
    batch: &PairBatch,
    state: &TrainState,
    masks: &[Vec<f64>],
) -> Result<(MainLosses, BTreeMap<String, Array2<f64>>)> {
    main_objective_impl(corpus, batch, state, Some(masks))
}

fn main_objective_impl(
    corpus: &Corpus,
    batch: &PairBatch,
    state: &TrainState,
    mask_override: Option<&[Vec<f64>]>,
) -> Result<(MainLosses, BTreeMap<String, Array2<f64>>)> {
    let config = state.config.clone();
    let lambda1 = config.train.lambda1;
    let n = batch.recording_ids.len();

    let bank = KnowledgeBank::from_corpus(corpus, config.kdm.knowledge_dim)?;
    let mut o_rows = Vec::with_capacity(n);
    let mut t_rows = Vec::with_capacity(n);
    for id in &batch.recording_ids {
        let (o, t) = bank.get(*id)?;
        o_rows.push(o.to_vec());
        t_rows.push(t.to_vec());
    }

    let mut tape = Tape::new();
    let enc_vars = EncoderVars::leaves(&mut tape, &state.encoder);
    let feature_vars: Vec<Var> = batch
        .recording_ids
        .iter()
        .map(|id| {
            let rec = corpus
                .recording(*id)
                .ok_or_else(|| DiscoverError::Input(format!("recording {id} missing")))?;
            Ok(tape.leaf(rec.features.clone()))
        })
        .collect::<Result<_>>()?;
    let x_batch = enc_vars.encode_batch(&mut tape, &feature_vars, false);

    // masks come from detached values; the mask itself carries no gradient
    let x_values: Vec<Vec<f64>> = (0..n)
        .map(|i| tape.value(x_batch).row(i).to_vec())
        .collect();
    let (xhat, l_trans) = if config.gadm.enabled {
        let masks = match mask_override {
            Some(m) => m.to_vec(),
            None => pair_masks(&x_values, config.gadm.metric, config.gadm.percentile)?,
        };
        let xhat = tape.mul_const(x_batch, rows_to_array(&masks));
        let mut costs = Vec::with_capacity(batch.pairs.len());
        for p in 0..batch.pairs.len() {
            let a = tape.row(xhat, 2 * p);
            let b = tape.row(xhat, 2 * p + 1);
            let c = match config.gadm.metric {
                TransitionMetric::Euclidean => tape.euclidean(a, b),
                TransitionMetric::Manhattan => tape.manhattan(a, b),
                TransitionMetric::Cosine => tape.cosine_dist(a, b),
            };
            costs.push(c);
        }
        (xhat, Some(tape.average_scalars(costs)))
    } else {
        (x_batch, None)
    };

    // knowledge-gated fusion feeds the task classifier; retrieval keeps raw x
    let est_o_vars = EstimatorVars::leaves(&mut tape, &state.est_o);
    let est_t_vars = EstimatorVars::leaves(&mut tape, &state.est_t);
    let e_star = if state.uses_gate() {
        let o_leaf = tape.leaf(rows_to_array(&o_rows));
        let q_o = est_o_vars.trunk(&mut tape, o_leaf);
        let gate_w = tape.leaf(state.gate.linear.w.clone());
        let gate_b = tape.leaf(state.gate.linear.b.clone());
        let cat = tape.concat_cols(xhat, q_o);
        let u = tape.matmul(cat, gate_w);
        let u = tape.add_row(u, gate_b);
        let a = tape.sigmoid(u);
        let one_minus = tape.affine(a, -1.0, 1.0);
        let left = tape.col_mul(a, xhat);
        let right = tape.col_mul(one_minus, q_o);
        Some((tape.add(left, right), gate_w, gate_b))
    } else {
        None
    };

    let cls_w = tape.leaf(state.classifier.linear.w.clone());
    let cls_b = tape.leaf(state.classifier.linear.b.clone());
    let task_input = e_star.as_ref().map(|(v, _, _)| *v).unwrap_or(xhat);
    let logits = tape.matmul(task_input, cls_w);
    let logits = tape.add_row(logits, cls_b);
    let l_task = tape.softmax_cross_entropy(logits, batch.labels.clone());

    // MI upper bounds through frozen density heads; gradients reach x only
    let l_mi = if config.kdm.enabled {
        let mut parts = Vec::new();
        if config.kdm.knowledge.uses_f0() {
            let (mu, lv) = est_o_vars.density(&mut tape, x_batch);
            parts.push(tape.club(mu, lv, rows_to_array(&o_rows)));
        }
        if config.kdm.knowledge.uses_timbre() {
            let (mu, lv) = est_t_vars.density(&mut tape, x_batch);
            parts.push(tape.club(mu, lv, rows_to_array(&t_rows)));
        }
        let mut total = parts[0];
        for p in &parts[1..] {
            total = tape.add(total, *p);
        }
        Some(total)
    } else {
        None
    };

    let l_zcls = if state.uses_pseudo() {
        let pseudo = state.pseudo.as_ref().ok_or_else(|| {
            DiscoverError::Training("pseudo labels not initialized before main step".into())
        })?;
        let labels: Vec<usize> = batch
            .recording_ids
            .iter()
            .map(|id| {
                pseudo.labels.get(id).copied().ok_or_else(|| {
                    DiscoverError::Training(format!("recording {id} has no pseudo label"))
                })
            })
            .collect::<Result<_>>()?;
        let t_leaf = tape.leaf(rows_to_array(&t_rows));
        let q_t = est_t_vars.trunk(&mut tape, t_leaf);
        let kcls_w = tape.leaf(state.knowledge_cls.w.clone());
        let kcls_b = tape.leaf(state.knowledge_cls.b.clone());
        let logits = tape.matmul(q_t, kcls_w);
        let logits = tape.add_row(logits, kcls_b);
        Some((tape.softmax_cross_entropy(logits, labels), kcls_w, kcls_b))
    } else {
        None
    };

    // adversarial term: by default the encoder is trained to fool the
    // discriminator with -log D(x); in paper-literal mode the printed -L_D2
    // is minimized instead
    let l_adv = if config.gadm.enabled {
        let disc_vars = DiscriminatorVars::leaves(&mut tape, &state.disc);
        let u_x = disc_vars.forward(&mut tape, x_batch);
        let term = if config.gadm.paper_literal {
            let l_d2 = tape.log_one_minus_sigmoid(u_x);
            let l_d2 = tape.mean_all(l_d2);
            tape.scale(l_d2, -1.0)
        } else {
            let log_d = tape.log_sigmoid(u_x);
            let mean = tape.mean_all(log_d);
            tape.scale(mean, -1.0)
        };
        Some(term)
    } else {
        None
    };

    // L_1 = L_task + L_trans + lambda1 * L_MI + L_zcls + L_adv
    let mut objective = l_task;
    if let Some(t) = l_trans {
        objective = tape.add(objective, t);
    }
    if let Some(mi) = l_mi {
        let weighted = tape.scale(mi, lambda1);
        objective = tape.add(objective, weighted);
    }
    if let Some((z, _, _)) = l_zcls {
        objective = tape.add(objective, z);
    }
    if let Some(a) = l_adv {
        objective = tape.add(objective, a);
    }

    let losses = MainLosses {
        l_task: tape.scalar(l_task),
        l_trans: l_trans.map(|v| tape.scalar(v)).unwrap_or(0.0),
        l_mi: l_mi.map(|v| tape.scalar(v)).unwrap_or(0.0),
        l_zcls: l_zcls
            .as_ref()
            .map(|(v, _, _)| tape.scalar(*v))
            .unwrap_or(0.0),
        l_adv: l_adv.map(|v| tape.scalar(v)).unwrap_or(0.0),
        l_1: tape.scalar(objective),
    };
    finite_or_training_error(&[
        ("L_task", losses.l_task),
        ("L_trans", losses.l_trans),
        ("L_MI", losses.l_mi),
        ("L_zcls", losses.l_zcls),
        ("L_adv", losses.l_adv),
        ("L_1", losses.l_1),
    ])?;

    let grads = tape.backward(objective);
    let mut named: BTreeMap<String, Array2<f64>> = BTreeMap::new();

    let enc_var_list = [
        enc_vars.frame_w,
        enc_vars.frame_b,
        enc_vars.dense1_w,
        enc_vars.dense1_b,
        enc_vars.dense2_w,
        enc_vars.dense2_b,
        enc_vars.ln_gamma,
        enc_vars.ln_beta,
    ];
    for ((name, param), var) in state.encoder.named_arrays().into_iter().zip(enc_var_list) {
        named.insert(name, grads.get_or_zeros(var, param.nrows(), param.ncols()));
    }
    {
        let w = &state.classifier.linear.w;
        named.insert(
            "classifier.w".into(),
            grads.get_or_zeros(cls_w, w.nrows(), w.ncols()),
        );
        let b = &state.classifier.linear.b;
        named.insert(
            "classifier.b".into(),
            grads.get_or_zeros(cls_b, b.nrows(), b.ncols()),
        );
    }
    if let Some((_, gate_w, gate_b)) = e_star {
        let w = &state.gate.linear.w;
        named.insert("gate.w".into(), grads.get_or_zeros(gate_w, w.nrows(), w.ncols()));
        let b = &state.gate.linear.b;
        named.insert("gate.b".into(), grads.get_or_zeros(gate_b, b.nrows(), b.ncols()));
        // the F0 trunk learns through the fusion path
        let trunk_vars = [
            est_o_vars.trunk1_w,
            est_o_vars.trunk1_b,
            est_o_vars.trunk2_w,
            est_o_vars.trunk2_b,
        ];
        for ((name, param), var) in state.est_o.trunk_named_arrays().into_iter().zip(trunk_vars) {
            named.insert(name, grads.get_or_zeros(var, param.nrows(), param.ncols()));
        }
    }
    if let Some((_, kcls_w, kcls_b)) = l_zcls {
        let w = &state.knowledge_cls.w;
        named.insert("kcls.w".into(), grads.get_or_zeros(kcls_w, w.nrows(), w.ncols()));
        let b = &state.knowledge_cls.b;
        named.insert("kcls.b".into(), grads.get_or_zeros(kcls_b, b.nrows(), b.ncols()));
        // the timbre trunk learns through the pseudo-label path
        let trunk_vars = [
            est_t_vars.trunk1_w,
            est_t_vars.trunk1_b,
            est_t_vars.trunk2_w,
            est_t_vars.trunk2_b,
        ];
        for ((name, param), var) in state.est_t.trunk_named_arrays().into_iter().zip(trunk_vars) {
            named.insert(name, grads.get_or_zeros(var, param.nrows(), param.ncols()));
        }
    }
    Ok((losses, named))
}

/// One main optimization step: descends `L_1` over the task-side parameters
/// with the discriminator and estimator density heads frozen.
pub fn main_step(corpus: &Corpus, batch: &PairBatch, state: &mut TrainState) -> Result<MainLosses> {
    let (losses, mut grads) = main_objective(corpus, batch, state)?;
    let TrainState {
        encoder,
        classifier,
        gate,
        est_o,
        est_t,
        knowledge_cls,
        opt_main,
        ..
    } = state;
    let mut updates: Vec<(String, &mut Array2<f64>, Array2<f64>)> = Vec::new();
    for (name, param) in encoder
        .named_arrays_mut()
        .into_iter()
        .chain(classifier.named_arrays_mut())
        .chain(gate.named_arrays_mut())
        .chain(est_o.trunk_named_arrays_mut())
        .chain(est_t.trunk_named_arrays_mut())
        .chain([
            ("kcls.w".to_string(), &mut knowledge_cls.w),
            ("kcls.b".to_string(), &mut knowledge_cls.b),
        ])
    {
        if let Some(g) = grads.remove(&name) {
            updates.push((name, param, g));
        }
    }
    opt_main.step(updates);
    Ok(losses)
}

/// Forward and backward pass of the auxiliary objective `L_2` without
/// applying any update: returns the loss terms and the gradient of every
/// adversary-side parameter participating in the objective.
pub fn aux_objective(
    corpus: &Corpus,
    batch: &PairBatch,
    state: &TrainState,
) -> Result<(AuxLosses, BTreeMap<String, Array2<f64>>)> {
    let config = state.config.clone();
    let lambda2 = config.train.lambda2;

    // encoder frozen: representations and masked representations are values
    let x_values = state.encode_plain(corpus, &batch.recording_ids)?;
    let x_arr = rows_to_array(&x_values);

    let mut tape = Tape::new();
    let mut l_d1_node = None;
    if config.gadm.enabled {
        let masks = pair_masks(&x_values, config.gadm.metric, config.gadm.percentile)?;
        let xhat_values: Vec<Vec<f64>> = x_values
            .iter()
            .zip(masks.iter())
            .map(|(x, m)| x.iter().zip(m).map(|(a, b)| a * b).collect())
            .collect();
        let disc_vars = DiscriminatorVars::leaves(&mut tape, &state.disc);
        let x_leaf = tape.leaf(x_arr.clone());
        let xhat_leaf = tape.leaf(rows_to_array(&xhat_values));
        let u_x = disc_vars.forward(&mut tape, x_leaf);
        let u_xhat = disc_vars.forward(&mut tape, xhat_leaf);
        let log_pos = tape.log_sigmoid(u_xhat);
        let log_pos = tape.mean_all(log_pos);
        let log_neg = tape.log_one_minus_sigmoid(u_x);
        let log_neg = tape.mean_all(log_neg);
        let l_d1 = tape.add(log_pos, log_neg);
        l_d1_node = Some((l_d1, disc_vars));
    }

    let est_o_vars = EstimatorVars::leaves(&mut tape, &state.est_o);
    let est_t_vars = EstimatorVars::leaves(&mut tape, &state.est_t);
    let mut l_q_node = None;
    if config.kdm.enabled {
        let bank = KnowledgeBank::from_corpus(corpus, config.kdm.knowledge_dim)?;
        let mut parts = Vec::new();
        let x_leaf = tape.leaf(x_arr);
        if config.kdm.knowledge.uses_f0() {
            let o_rows: Vec<Vec<f64>> = batch
                .recording_ids
                .iter()
                .map(|id| bank.get(*id).map(|(o, _)| o.to_vec()))
                .collect::<Result<_>>()?;
            let (mu, lv) = est_o_vars.density(&mut tape, x_leaf);
            let ll = tape.gauss_loglik_mean(mu, lv, rows_to_array(&o_rows));
            parts.push(tape.scale(ll, -1.0));
        }
        if config.kdm.knowledge.uses_timbre() {
            let t_rows: Vec<Vec<f64>> = batch
                .recording_ids
                .iter()
                .map(|id| bank.get(*id).map(|(_, t)| t.to_vec()))
                .collect::<Result<_>>()?;
            let (mu, lv) = est_t_vars.density(&mut tape, x_leaf);
            let ll = tape.gauss_loglik_mean(mu, lv, rows_to_array(&t_rows));
            parts.push(tape.scale(ll, -1.0));
        }
        let mut total = parts[0];
        for p in &parts[1..] {
            total = tape.add(total, *p);
        }
        l_q_node = Some(total);
    }

    // L_2: in the default convention the discriminator ascends L_D1, so the
    // descended objective carries -L_D1; paper-literal keeps the printed sign
    let mut objective = None;
    if let Some((l_d1, _)) = &l_d1_node {
        let signed = if config.gadm.paper_literal {
            *l_d1
        } else {
            tape.scale(*l_d1, -1.0)
        };
        objective = Some(signed);
    }
    if let Some(l_q) = l_q_node {
        let weighted = tape.scale(l_q, lambda2);
        objective = Some(match objective {
            Some(o) => tape.add(o, weighted),
            None => weighted,
        });
    }
    let objective = objective.ok_or_else(|| {
        DiscoverError::Training("auxiliary step has no active loss terms".into())
    })?;

    let losses = AuxLosses {
        l_d1: l_d1_node
            .as_ref()
            .map(|(v, _)| tape.scalar(*v))
            .unwrap_or(0.0),
        l_q: l_q_node.map(|v| tape.scalar(v)).unwrap_or(0.0),
        l_2: tape.scalar(objective),
    };
    finite_or_training_error(&[
        ("L_D1", losses.l_d1),
        ("L_q", losses.l_q),
        ("L_2", losses.l_2),
    ])?;

    let grads = tape.backward(objective);
    let mut named: BTreeMap<String, Array2<f64>> = BTreeMap::new();
    if let Some((_, disc_vars)) = l_d1_node {
        let var_list = [
            disc_vars.l1_w,
            disc_vars.l1_b,
            disc_vars.l2_w,
            disc_vars.l2_b,
            disc_vars.out_w,
            disc_vars.out_b,
        ];
        for ((name, param), var) in state.disc.named_arrays().into_iter().zip(var_list) {
            named.insert(name, grads.get_or_zeros(var, param.nrows(), param.ncols()));
        }
    }
    if config.kdm.enabled {
        if config.kdm.knowledge.uses_f0() {
            let var_list = [
                est_o_vars.hidden_w,
                est_o_vars.hidden_b,
                est_o_vars.mean_w,
                est_o_vars.mean_b,
                est_o_vars.logvar_w,
                est_o_vars.logvar_b,
            ];
            for ((name, param), var) in
                state.est_o.density_named_arrays().into_iter().zip(var_list)
            {
                named.insert(name, grads.get_or_zeros(var, param.nrows(), param.ncols()));
            }
        }
        if config.kdm.knowledge.uses_timbre() {
            let var_list = [
                est_t_vars.hidden_w,
                est_t_vars.hidden_b,
                est_t_vars.mean_w,
                est_t_vars.mean_b,
                est_t_vars.logvar_w,
                est_t_vars.logvar_b,
            ];
            for ((name, param), var) in
                state.est_t.density_named_arrays().into_iter().zip(var_list)
            {
                named.insert(name, grads.get_or_zeros(var, param.nrows(), param.ncols()));
            }
        }
    }
    Ok((losses, named))
}

/// One auxiliary step: trains the discriminator (per the configured sign
/// convention) and both estimator density heads on detached representations.
pub fn aux_step(corpus: &Corpus, batch: &PairBatch, state: &mut TrainState) -> Result<AuxLosses> {
    let (losses, mut grads) = aux_objective(corpus, batch, state)?;
    let TrainState {
        est_o,
        est_t,
        disc,
        opt_aux,
        ..
    } = state;
    let mut updates: Vec<(String, &mut Array2<f64>, Array2<f64>)> = Vec::new();
    for (name, param) in disc
        .named_arrays_mut()
        .into_iter()
        .chain(est_o.density_named_arrays_mut())
        .chain(est_t.density_named_arrays_mut())
    {
        if let Some(g) = grads.remove(&name) {
            updates.push((name, param, g));
        }
    }
    opt_aux.step(updates);
    Ok(losses)
}

/// One line of the training history.
#[derive(Debug, Clone, Serialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub l_task: f64,
    pub l_trans: f64,
    pub l_mi: f64,
    pub l_zcls: f64,
    pub l_adv: f64,
    pub l_1: f64,
    pub l_d1: f64,
    pub l_q: f64,
    pub l_2: f64,
    pub val_map: f64,
}

/// Outcome of a training run. `diverged` carries the abort diagnostics when a
/// loss went non-finite; `state` is then the last good state.
#[derive(Debug)]
pub struct TrainOutcome {
    pub state: TrainState,
    pub best_state: TrainState,
    pub best_val_map: f64,
    pub history: Vec<EpochRecord>,
    pub diverged: Option<String>,
}

/// Train on the given corpus and split: one auxiliary step (times the
/// configured ratio) then one main step per batch; per-epoch validation MAP;
/// the best-MAP state is kept alongside the final one.
pub fn train(config: &Config, corpus: &Corpus, split: &CorpusSplit) -> Result<TrainOutcome> {
    let mut state = TrainState::new(config, corpus, split)?;

    if state.uses_pseudo() {
        let bank = KnowledgeBank::from_corpus(corpus, config.kdm.knowledge_dim)?;
        let train_set: std::collections::BTreeSet<u32> = split.train.iter().copied().collect();
        let mut ids = Vec::new();
        let mut timbres = Vec::new();
        for (i, id) in bank.ids().iter().enumerate() {
            if train_set.contains(id) {
                ids.push(*id);
                timbres.push(bank.t[i].clone());
            }
        }
        state.pseudo = Some(make_pseudo_labels(
            &ids,
            &timbres,
            config.kdm.clusters,
            derive_seed(config.train.seed, "pseudo", 0),
        )?);
    }

    let mut history = Vec::new();
    if config.train.epochs == 0 {
        let best_state = state.clone();
        return Ok(TrainOutcome {
            state,
            best_state,
            best_val_map: 0.0,
            history,
            diverged: None,
        });
    }

    let mut rng = ChaCha20Rng::seed_from_u64(derive_seed(config.train.seed, "pairs", 0));
    let batches_per_epoch =
        split.train.len().div_ceil(config.train.batch_size);
    let batches_per_epoch = batches_per_epoch.max(1);

    let mut best_val_map = f64::NEG_INFINITY;
    let mut best_state = state.clone();
    let mut diverged = None;

    'training: for epoch in 0..config.train.epochs {
        state.epoch = epoch;
        let mut sums = EpochRecord {
            epoch,
            l_task: 0.0,
            l_trans: 0.0,
            l_mi: 0.0,
            l_zcls: 0.0,
            l_adv: 0.0,
            l_1: 0.0,
            l_d1: 0.0,
            l_q: 0.0,
            l_2: 0.0,
            val_map: 0.0,
        };
        for _ in 0..batches_per_epoch {
            let batch = sample_pairs(
                corpus,
                &split.train,
                &state.class_of_song,
                config.train.batch_size,
                &mut rng,
            )?;
            let mut aux = AuxLosses::default();
            let has_aux = config.gadm.enabled || config.kdm.enabled;
            for _ in 0..if has_aux { config.train.aux_ratio } else { 0 } {
                aux = match aux_step(corpus, &batch, &mut state) {
                    Ok(l) => l,
                    Err(DiscoverError::Training(msg)) => {
                        diverged = Some(msg);
                        break 'training;
                    }
                    Err(e) => return Err(e),
                };
            }
            let main = match main_step(corpus, &batch, &mut state) {
                Ok(l) => l,
                Err(DiscoverError::Training(msg)) => {
                    diverged = Some(msg);
                    break 'training;
                }
                Err(e) => return Err(e),
            };
            sums.l_task += main.l_task;
            sums.l_trans += main.l_trans;
            sums.l_mi += main.l_mi;
            sums.l_zcls += main.l_zcls;
            sums.l_adv += main.l_adv;
            sums.l_1 += main.l_1;
            sums.l_d1 += aux.l_d1;
            sums.l_q += aux.l_q;
            sums.l_2 += aux.l_2;
        }
        let nb = batches_per_epoch as f64;
        sums.l_task /= nb;
        sums.l_trans /= nb;
        sums.l_mi /= nb;
        sums.l_zcls /= nb;
        sums.l_adv /= nb;
        sums.l_1 /= nb;
        sums.l_d1 /= nb;
        sums.l_q /= nb;
        sums.l_2 /= nb;

        let (report, _) = evaluate(&state.encoder, corpus, split, SplitPart::Valid)?;
        sums.val_map = report.map;
        if report.map > best_val_map {
            best_val_map = report.map;
            best_state = state.clone();
        }
        history.push(sums);
    }

    if best_val_map == f64::NEG_INFINITY {
        best_val_map = 0.0;
        best_state = state.clone();
    }
    Ok(TrainOutcome {
        state,
        best_state,
        best_val_map,
        history,
        diverged,
    })
}


#[cfg(test)]
mod sign_convention_tests {
    use super::*;
    use crate::gadm::discriminator_losses;

    /// The printed-sign mode uses -L_D2 as the encoder's adversarial term and
    /// +L_D1 in the descended auxiliary objective; the default mode uses the
    /// non-saturating fooling term and ascends L_D1.
    #[test]
    fn paper_literal_mode_flips_the_printed_signs() {
        let (mut config, corpus, split) = super::tests::tiny_setup();
        config.kdm.enabled = false; // isolate the adversarial terms
        let mut rng = ChaCha20Rng::seed_from_u64(41);

        let batch = {
            let state = TrainState::new(&config, &corpus, &split).unwrap();
            sample_pairs(&corpus, &split.train, &state.class_of_song, 8, &mut rng).unwrap()
        };

        let losses_for = |literal: bool| {
            let mut cfg = config.clone();
            cfg.gadm.paper_literal = literal;
            let state = TrainState::new(&cfg, &corpus, &split).unwrap();
            let (main, _) = main_objective(&corpus, &batch, &state).unwrap();
            let (aux, _) = aux_objective(&corpus, &batch, &state).unwrap();

            // independent recomputation of the printed losses from scores
            let x = state.encode_plain(&corpus, &batch.recording_ids).unwrap();
            let masks =
                pair_masks(&x, cfg.gadm.metric, cfg.gadm.percentile).unwrap();
            let xhat: Vec<Vec<f64>> = x
                .iter()
                .zip(&masks)
                .map(|(xv, m)| xv.iter().zip(m).map(|(a, b)| a * b).collect())
                .collect();
            let (l_d1, l_d2) = discriminator_losses(&x, &xhat, &state.disc).unwrap();
            (main, aux, l_d1, l_d2, state)
        };

        let (main_lit, aux_lit, l_d1, l_d2, state) = losses_for(true);
        assert!((main_lit.l_adv - (-l_d2)).abs() < 1e-9);
        assert!((aux_lit.l_2 - (l_d1 + state.config.train.lambda2 * aux_lit.l_q)).abs() < 1e-9);

        let (main_def, aux_def, l_d1_def, _, state_def) = losses_for(false);
        // default: encoder descends -log D(x), discriminator ascends L_D1
        let mean_log_d: f64 = state_def
            .encode_plain(&corpus, &batch.recording_ids)
            .unwrap()
            .iter()
            .map(|xv| state_def.disc.score(xv).clamp(1e-7, 1.0 - 1e-7).ln())
            .sum::<f64>()
            / batch.recording_ids.len() as f64;
        assert!((main_def.l_adv - (-mean_log_d)).abs() < 1e-9);
        assert!(
            (aux_def.l_2 - (-l_d1_def + state_def.config.train.lambda2 * aux_def.l_q)).abs()
                < 1e-9
        );
    }
}

#[cfg(test)]
mod oracle_tests {
    use super::*;
    use crate::encoder::{classify, softmax};

    /// Capacity sanity oracle: ten recordings are classified perfectly after
    /// at most five hundred overfitting steps.
    #[test]
    fn overfitting_ten_recordings_reaches_full_accuracy() {
        let (mut config, corpus, split) = super::tests::tiny_setup();
        config.train.batch_size = 10;
        config.train.lr = 5e-3;
        config.train.epochs = 0;
        let outcome = train(&config, &corpus, &split).unwrap();
        let mut state = outcome.state;
        let mut rng = ChaCha20Rng::seed_from_u64(77);
        let batch = sample_pairs(&corpus, &split.train, &state.class_of_song, 10, &mut rng).unwrap();

        let accuracy = |state: &TrainState| {
            let mut correct = 0;
            for (id, label) in batch.recording_ids.iter().zip(batch.labels.iter()) {
                let x = state.encode_plain(&corpus, &[*id]).unwrap();
                // classification consumes the fused representation during
                // training; for the capacity check the raw path suffices
                let probs = softmax(&classify(&x[0], &state.classifier).unwrap());
                let argmax = probs
                    .iter()
                    .enumerate()
                    .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                    .unwrap()
                    .0;
                if argmax == *label {
                    correct += 1;
                }
            }
            correct
        };

        let mut steps = 0;
        for _ in 0..500 {
            aux_step(&corpus, &batch, &mut state).unwrap();
            main_step(&corpus, &batch, &mut state).unwrap();
            steps += 1;
            if accuracy(&state) == 10 {
                break;
            }
        }
        assert_eq!(
            accuracy(&state),
            10,
            "training accuracy below 100% after {steps} steps"
        );
    }
}
