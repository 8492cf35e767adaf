//! Encoder: variable-length feature sequences to fixed-dimension normalized
//! representations, plus the song classification head.
//!
//! The backbone is a per-frame dense layer, mean pooling over time, and two
//! dense layers. Each representation is normalized to zero mean / unit
//! variance before a learned elementwise affine, so retrieval always operates
//! on normalized vectors.

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;

use crate::autodiff::{Tape, Var};
use crate::error::{DiscoverError, Result};

/// Dense layer parameters: weights `(in, out)` and a bias row `(1, out)`.
#[derive(Debug, Clone)]
pub struct LinearParams {
    pub w: Array2<f64>,
    pub b: Array2<f64>,
}

pub(crate) fn init_normal(rng: &mut ChaCha20Rng, rows: usize, cols: usize, scale: f64) -> Array2<f64> {
    Array2::from_shape_fn((rows, cols), |_| {
        let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
        let u2: f64 = rng.gen_range(0.0..1.0);
        scale * (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
    })
}

pub(crate) fn zeros_row(cols: usize) -> Array2<f64> {
    Array2::zeros((1, cols))
}

impl LinearParams {
    pub fn new(input: usize, output: usize, rng: &mut ChaCha20Rng) -> Self {
        LinearParams {
            w: init_normal(rng, input, output, 1.0 / (input as f64).sqrt()),
            b: zeros_row(output),
        }
    }
}

/// All encoder parameters.
#[derive(Debug, Clone)]
pub struct EncoderParams {
    pub frame: LinearParams,
    pub dense1: LinearParams,
    pub dense2: LinearParams,
    /// Learned affine applied after normalization.
    pub ln_gamma: Array2<f64>,
    pub ln_beta: Array2<f64>,
    pub feature_dim: usize,
    pub hidden: usize,
    pub dim: usize,
}

impl EncoderParams {
    pub fn new(feature_dim: usize, hidden: usize, dim: usize, seed: u64) -> Self {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        EncoderParams {
            frame: LinearParams::new(feature_dim, hidden, &mut rng),
            dense1: LinearParams::new(hidden, hidden, &mut rng),
            dense2: LinearParams::new(hidden, dim, &mut rng),
            ln_gamma: Array2::ones((1, dim)),
            ln_beta: zeros_row(dim),
            feature_dim,
            hidden,
            dim,
        }
    }

    pub fn named_arrays(&self) -> Vec<(String, &Array2<f64>)> {
        vec![
            ("encoder.frame.w".into(), &self.frame.w),
            ("encoder.frame.b".into(), &self.frame.b),
            ("encoder.dense1.w".into(), &self.dense1.w),
            ("encoder.dense1.b".into(), &self.dense1.b),
            ("encoder.dense2.w".into(), &self.dense2.w),
            ("encoder.dense2.b".into(), &self.dense2.b),
            ("encoder.ln_gamma".into(), &self.ln_gamma),
            ("encoder.ln_beta".into(), &self.ln_beta),
        ]
    }

    pub fn named_arrays_mut(&mut self) -> Vec<(String, &mut Array2<f64>)> {
        vec![
            ("encoder.frame.w".into(), &mut self.frame.w),
            ("encoder.frame.b".into(), &mut self.frame.b),
            ("encoder.dense1.w".into(), &mut self.dense1.w),
            ("encoder.dense1.b".into(), &mut self.dense1.b),
            ("encoder.dense2.w".into(), &mut self.dense2.w),
            ("encoder.dense2.b".into(), &mut self.dense2.b),
            ("encoder.ln_gamma".into(), &mut self.ln_gamma),
            ("encoder.ln_beta".into(), &mut self.ln_beta),
        ]
    }
}

/// Tape handles for the encoder parameters.
pub struct EncoderVars {
    pub frame_w: Var,
    pub frame_b: Var,
    pub dense1_w: Var,
    pub dense1_b: Var,
    pub dense2_w: Var,
    pub dense2_b: Var,
    pub ln_gamma: Var,
    pub ln_beta: Var,
}

impl EncoderVars {
    pub fn leaves(tape: &mut Tape, p: &EncoderParams) -> Self {
        EncoderVars {
            frame_w: tape.leaf(p.frame.w.clone()),
            frame_b: tape.leaf(p.frame.b.clone()),
            dense1_w: tape.leaf(p.dense1.w.clone()),
            dense1_b: tape.leaf(p.dense1.b.clone()),
            dense2_w: tape.leaf(p.dense2.w.clone()),
            dense2_b: tape.leaf(p.dense2.b.clone()),
            ln_gamma: tape.leaf(p.ln_gamma.clone()),
            ln_beta: tape.leaf(p.ln_beta.clone()),
        }
    }

    /// Pooled hidden vector `(1, hidden)` for one recording's frames.
    fn pool_frames(&self, tape: &mut Tape, features: Var) -> Var {
        let h = tape.matmul(features, self.frame_w);
        let h = tape.add_row(h, self.frame_b);
        let h = tape.tanh(h);
        tape.mean_rows(h)
    }

    /// Encode a batch of recordings into `(N, dim)` representations.
    /// `pre_affine = true` stops after normalization, before gamma/beta.
    pub fn encode_batch(
        &self,
        tape: &mut Tape,
        features: &[Var],
        pre_affine: bool,
    ) -> Var {
        let pooled: Vec<Var> = features
            .iter()
            .map(|f| self.pool_frames(tape, *f))
            .collect();
        let batch = tape.stack_rows(pooled);
        let h = tape.matmul(batch, self.dense1_w);
        let h = tape.add_row(h, self.dense1_b);
        let h = tape.tanh(h);
        let h = tape.matmul(h, self.dense2_w);
        let h = tape.add_row(h, self.dense2_b);
        let normed = tape.layer_norm_rows(h);
        if pre_affine {
            return normed;
        }
        let scaled = tape.mul_row(normed, self.ln_gamma);
        tape.add_row(scaled, self.ln_beta)
    }
}

fn check_features(features: &Array2<f64>, params: &EncoderParams) -> Result<()> {
    if features.nrows() == 0 {
        return Err(DiscoverError::Input("empty feature sequence".into()));
    }
    if features.ncols() != params.feature_dim {
        return Err(DiscoverError::Input(format!(
            "feature dim {} does not match encoder input dim {}",
            features.ncols(),
            params.feature_dim
        )));
    }
    Ok(())
}

/// Encode one feature sequence into a fixed-dimension representation.
pub fn encode(features: &Array2<f64>, params: &EncoderParams) -> Result<Vec<f64>> {
    check_features(features, params)?;
    let mut tape = Tape::new();
    let vars = EncoderVars::leaves(&mut tape, params);
    let f = tape.leaf(features.clone());
    let out = vars.encode_batch(&mut tape, &[f], false);
    Ok(tape.value(out).row(0).to_vec())
}

/// Encode one sequence but stop before the learned affine; used by the
/// normalization contract tests.
pub fn encode_pre_affine(features: &Array2<f64>, params: &EncoderParams) -> Result<Vec<f64>> {
    check_features(features, params)?;
    let mut tape = Tape::new();
    let vars = EncoderVars::leaves(&mut tape, params);
    let f = tape.leaf(features.clone());
    let out = vars.encode_batch(&mut tape, &[f], true);
    Ok(tape.value(out).row(0).to_vec())
}

/// Task classifier over representations.
#[derive(Debug, Clone)]
pub struct ClassifierParams {
    pub linear: LinearParams,
    pub class_count: usize,
}

impl ClassifierParams {
    pub fn new(dim: usize, class_count: usize, seed: u64) -> Self {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        ClassifierParams {
            linear: LinearParams::new(dim, class_count, &mut rng),
            class_count,
        }
    }

    pub fn named_arrays(&self) -> Vec<(String, &Array2<f64>)> {
        vec![
            ("classifier.w".into(), &self.linear.w),
            ("classifier.b".into(), &self.linear.b),
        ]
    }

    pub fn named_arrays_mut(&mut self) -> Vec<(String, &mut Array2<f64>)> {
        vec![
            ("classifier.w".into(), &mut self.linear.w),
            ("classifier.b".into(), &mut self.linear.b),
        ]
    }
}

/// Logits of the classification head for one representation.
pub fn classify(x: &[f64], params: &ClassifierParams) -> Result<Vec<f64>> {
    if x.len() != params.linear.w.nrows() {
        return Err(DiscoverError::Input(format!(
            "representation length {} does not match classifier input {}",
            x.len(),
            params.linear.w.nrows()
        )));
    }
    let mut logits = vec![0.0; params.class_count];
    for (c, l) in logits.iter_mut().enumerate() {
        *l = params.linear.b[(0, c)]
            + x.iter()
                .enumerate()
                .map(|(k, v)| v * params.linear.w[(k, c)])
                .sum::<f64>();
    }
    if logits.iter().any(|v| !v.is_finite()) {
        return Err(DiscoverError::Numeric(
            "classifier produced non-finite logits".into(),
        ));
    }
    Ok(logits)
}

/// Numerically stable softmax.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|v| (v - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|v| v / sum).collect()
}
