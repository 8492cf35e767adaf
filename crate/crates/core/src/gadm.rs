//! Gradient-based adversarial disentanglement.
//!
//! The distance between representations of two versions of one song is read
//! as the transition cost caused by entangled version-variant factors. Its
//! gradient with respect to the query representation scores each element's
//! contribution; high-gradient elements get softmax-derived attenuation in a
//! mask, and a discriminator aligns the masked and unmasked populations.

use ndarray::Array2;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::encoder::LinearParams;
use crate::error::{DiscoverError, Result};

/// Metric used as the transition cost between paired representations.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TransitionMetric {
    Euclidean,
    Manhattan,
    Cosine,
}

impl TransitionMetric {
    pub fn as_str(self) -> &'static str {
        match self {
            TransitionMetric::Euclidean => "euclidean",
            TransitionMetric::Manhattan => "manhattan",
            TransitionMetric::Cosine => "cosine",
        }
    }
}

fn check_dims(x: &[f64], x_plus: &[f64]) -> Result<()> {
    if x.len() != x_plus.len() || x.is_empty() {
        return Err(DiscoverError::Input(format!(
            "transition cost needs equal non-empty dims, got {} and {}",
            x.len(),
            x_plus.len()
        )));
    }
    Ok(())
}

fn norm(x: &[f64]) -> f64 {
    x.iter().map(|v| v * v).sum::<f64>().sqrt()
}

/// Transition cost between two representations (non-negative, symmetric).
pub fn transition_cost(x: &[f64], x_plus: &[f64], metric: TransitionMetric) -> Result<f64> {
    check_dims(x, x_plus)?;
    match metric {
        TransitionMetric::Euclidean => Ok(x
            .iter()
            .zip(x_plus)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt()),
        TransitionMetric::Manhattan => {
            Ok(x.iter().zip(x_plus).map(|(a, b)| (a - b).abs()).sum())
        }
        TransitionMetric::Cosine => {
            let (nx, ny) = (norm(x), norm(x_plus));
            if nx == 0.0 || ny == 0.0 {
                return Err(DiscoverError::Numeric(
                    "cosine transition cost is undefined for a zero vector".into(),
                ));
            }
            let dot: f64 = x.iter().zip(x_plus).map(|(a, b)| a * b).sum();
            Ok(1.0 - dot / (nx * ny))
        }
    }
}

/// Gradient of the transition cost with respect to `x`, with `x_plus` held
/// constant. The result is detached: no gradient flows through it downstream.
/// `degenerate` is set for the euclidean metric at `x == x_plus`, where the
/// cost is not differentiable and a zero vector is returned.
#[derive(Debug, Clone)]
pub struct VariantGradient {
    pub g: Vec<f64>,
    pub degenerate: bool,
}

pub fn variant_gradient(
    x: &[f64],
    x_plus: &[f64],
    metric: TransitionMetric,
) -> Result<VariantGradient> {
    check_dims(x, x_plus)?;
    match metric {
        TransitionMetric::Euclidean => {
            let c = transition_cost(x, x_plus, metric)?;
            if c == 0.0 {
                return Ok(VariantGradient {
                    g: vec![0.0; x.len()],
                    degenerate: true,
                });
            }
            Ok(VariantGradient {
                g: x.iter().zip(x_plus).map(|(a, b)| (a - b) / c).collect(),
                degenerate: false,
            })
        }
        TransitionMetric::Manhattan => Ok(VariantGradient {
            g: x.iter().zip(x_plus).map(|(a, b)| (a - b).signum()).collect(),
            degenerate: false,
        }),
        TransitionMetric::Cosine => {
            let (nx, ny) = (norm(x), norm(x_plus));
            if nx == 0.0 || ny == 0.0 {
                return Err(DiscoverError::Numeric(
                    "cosine gradient is undefined for a zero vector".into(),
                ));
            }
            let dot: f64 = x.iter().zip(x_plus).map(|(a, b)| a * b).sum();
            let g = x
                .iter()
                .zip(x_plus)
                .map(|(a, b)| dot * a / (nx * nx * nx * ny) - b / (nx * ny))
                .collect();
            Ok(VariantGradient {
                g,
                degenerate: false,
            })
        }
    }
}

/// Per-element attenuation mask built from a transition-cost gradient.
#[derive(Debug, Clone)]
pub struct GradientMask {
    pub m: Vec<f64>,
    /// Threshold value: the p-th largest percentile of the gradient.
    pub threshold: f64,
    pub percentile: f64,
}

/// Build the mask: elements with gradient >= the p-th-largest-percentile
/// threshold receive `1 - softmax(gradient)` (computed over the included
/// set), all others stay at exactly 1.
pub fn build_mask(g: &[f64], percentile: f64) -> Result<GradientMask> {
    if g.is_empty() {
        return Err(DiscoverError::Input("empty gradient vector".into()));
    }
    if g.iter().any(|v| !v.is_finite()) {
        return Err(DiscoverError::Input(
            "gradient vector contains non-finite values".into(),
        ));
    }
    if !(percentile > 0.0 && percentile <= 100.0) {
        return Err(DiscoverError::Input(format!(
            "percentile must lie in (0, 100], got {percentile}"
        )));
    }

    let mut sorted = g.to_vec();
    sorted.sort_by(|a, b| b.partial_cmp(a).unwrap());
    let k = ((percentile / 100.0) * g.len() as f64).ceil() as usize;
    let k = k.clamp(1, g.len());
    let threshold = sorted[k - 1];

    // ties at the threshold are all included (>= comparison)
    let included: Vec<usize> = (0..g.len()).filter(|&i| g[i] >= threshold).collect();
    let max = included
        .iter()
        .map(|&i| g[i])
        .fold(f64::NEG_INFINITY, f64::max);
    let denom: f64 = included.iter().map(|&i| (g[i] - max).exp()).sum();

    let mut m = vec![1.0; g.len()];
    for &i in &included {
        m[i] = 1.0 - (g[i] - max).exp() / denom;
    }
    Ok(GradientMask {
        m,
        threshold,
        percentile,
    })
}

/// Elementwise product of a representation with its mask. The mask is a
/// constant: gradients reach the encoder only through `x`.
pub fn decompose(x: &[f64], mask: &GradientMask) -> Result<Vec<f64>> {
    if x.len() != mask.m.len() {
        return Err(DiscoverError::Input(format!(
            "mask length {} does not match representation length {}",
            mask.m.len(),
            x.len()
        )));
    }
    Ok(x.iter().zip(mask.m.iter()).map(|(a, b)| a * b).collect())
}

/// Small feed-forward binary scorer with a sigmoid head.
#[derive(Debug, Clone)]
pub struct DiscriminatorParams {
    pub l1: LinearParams,
    pub l2: LinearParams,
    pub out: LinearParams,
}

impl DiscriminatorParams {
    pub fn new(dim: usize, hidden: usize, rng: &mut ChaCha20Rng) -> Self {
        DiscriminatorParams {
            l1: LinearParams::new(dim, hidden, rng),
            l2: LinearParams::new(hidden, hidden, rng),
            out: LinearParams::new(hidden, 1, rng),
        }
    }

    pub fn named_arrays(&self) -> Vec<(String, &Array2<f64>)> {
        vec![
            ("disc.l1.w".into(), &self.l1.w),
            ("disc.l1.b".into(), &self.l1.b),
            ("disc.l2.w".into(), &self.l2.w),
            ("disc.l2.b".into(), &self.l2.b),
            ("disc.out.w".into(), &self.out.w),
            ("disc.out.b".into(), &self.out.b),
        ]
    }

    pub fn named_arrays_mut(&mut self) -> Vec<(String, &mut Array2<f64>)> {
        vec![
            ("disc.l1.w".into(), &mut self.l1.w),
            ("disc.l1.b".into(), &mut self.l1.b),
            ("disc.l2.w".into(), &mut self.l2.w),
            ("disc.l2.b".into(), &mut self.l2.b),
            ("disc.out.w".into(), &mut self.out.w),
            ("disc.out.b".into(), &mut self.out.b),
        ]
    }

    /// Probability that `x` lies on the masked (positive) hypersphere.
    pub fn score(&self, x: &[f64]) -> f64 {
        let mut tape = Tape::new();
        let vars = DiscriminatorVars::leaves(&mut tape, self);
        let input = tape.leaf_row(x);
        let logits = vars.forward(&mut tape, input);
        let p = tape.sigmoid(logits);
        tape.scalar(p)
    }
}

/// Tape handles for the discriminator parameters.
pub struct DiscriminatorVars {
    pub l1_w: Var,
    pub l1_b: Var,
    pub l2_w: Var,
    pub l2_b: Var,
    pub out_w: Var,
    pub out_b: Var,
}

impl DiscriminatorVars {
    pub fn leaves(tape: &mut Tape, p: &DiscriminatorParams) -> Self {
        DiscriminatorVars {
            l1_w: tape.leaf(p.l1.w.clone()),
            l1_b: tape.leaf(p.l1.b.clone()),
            l2_w: tape.leaf(p.l2.w.clone()),
            l2_b: tape.leaf(p.l2.b.clone()),
            out_w: tape.leaf(p.out.w.clone()),
            out_b: tape.leaf(p.out.b.clone()),
        }
    }

    /// Logits (pre-sigmoid) for a batch of representations.
    pub fn forward(&self, tape: &mut Tape, x: Var) -> Var {
        let h = tape.matmul(x, self.l1_w);
        let h = tape.add_row(h, self.l1_b);
        let h = tape.tanh(h);
        let h = tape.matmul(h, self.l2_w);
        let h = tape.add_row(h, self.l2_b);
        let h = tape.tanh(h);
        let u = tape.matmul(h, self.out_w);
        tape.add_row(u, self.out_b)
    }
}

/// Discriminator losses over paired batches, computed from scores:
/// `L_D1 = mean[log D(x_hat) + log(1 - D(x))]`, `L_D2 = mean[log(1 - D(x))]`.
/// Scores are floored/ceiled at 1e-7 from the ends of (0, 1) before the logs.
pub fn discriminator_losses(
    x_batch: &[Vec<f64>],
    xhat_batch: &[Vec<f64>],
    disc: &DiscriminatorParams,
) -> Result<(f64, f64)> {
    if x_batch.len() != xhat_batch.len() || x_batch.is_empty() {
        return Err(DiscoverError::Batch(
            "discriminator batches must be non-empty and equal-sized".into(),
        ));
    }
    let clip = |p: f64| p.clamp(1e-7, 1.0 - 1e-7);
    let mut l_d1 = 0.0;
    let mut l_d2 = 0.0;
    for (x, xhat) in x_batch.iter().zip(xhat_batch) {
        let d_x = clip(disc.score(x));
        let d_xhat = clip(disc.score(xhat));
        l_d1 += d_xhat.ln() + (1.0 - d_x).ln();
        l_d2 += (1.0 - d_x).ln();
    }
    let n = x_batch.len() as f64;
    Ok((l_d1 / n, l_d2 / n))
}

/// Transition cost between the two masked representations of a pair.
pub fn transition_loss(xhat: &[f64], xhat_plus: &[f64], metric: TransitionMetric) -> Result<f64> {
    transition_cost(xhat, xhat_plus, metric)
}

/// Helper used by training: initialize a discriminator from a seed.
pub fn init_discriminator(dim: usize, hidden: usize, seed: u64) -> DiscriminatorParams {
    use rand::SeedableRng;
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    DiscriminatorParams::new(dim, hidden, &mut rng)
}
