//! Soft-to-hard scalar quantization with trainable kernels, occurrence
//! entropy, the bitrate lower bound, and the adaptive blending-weight
//! controller that steers training toward a target bitrate.

use crate::error::{Error, Result};

/// Quantization kernels and the softmax sharpness used for soft assignment.
#[derive(Debug, Clone, PartialEq)]
pub struct Codebook {
    pub kernels: Vec<f64>,
    pub alpha: f64,
}

/// Default initial softmax scale.
pub const DEFAULT_ALPHA: f64 = 300.0;

impl Codebook {
    pub fn new(kernels: Vec<f64>, alpha: f64) -> Result<Self> {
        if kernels.is_empty() {
            return Err(Error::Invalid("codebook needs at least one kernel".into()));
        }
        if !alpha.is_finite() || alpha <= 0.0 {
            return Err(Error::Invalid(format!("alpha must be positive, got {alpha}")));
        }
        if kernels.iter().any(|k| !k.is_finite()) {
            return Err(Error::Invalid("kernels must be finite".into()));
        }
        Ok(Self { kernels, alpha })
    }

    /// `k` kernels evenly spaced over `[lo, hi]`.
    pub fn uniform(k: usize, lo: f64, hi: f64, alpha: f64) -> Result<Self> {
        if k == 0 {
            return Err(Error::Invalid("codebook needs at least one kernel".into()));
        }
        let kernels = if k == 1 {
            vec![(lo + hi) / 2.0]
        } else {
            (0..k)
                .map(|i| lo + (hi - lo) * i as f64 / (k - 1) as f64)
                .collect()
        };
        Self::new(kernels, alpha)
    }

    pub fn len(&self) -> usize {
        self.kernels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.kernels.is_empty()
    }
}

/// Soft and hard assignment of one code value.
#[derive(Debug, Clone)]
pub struct Assignment {
    /// Softmax membership over kernels; sums to one.
    pub soft: Vec<f64>,
    /// Index of the winning kernel (argmax of `soft`, lowest index on ties).
    pub hard_index: usize,
    /// Soft-quantized value `a . kernels`.
    pub soft_value: f64,
    /// The winning kernel's value.
    pub hard_value: f64,
}

impl Assignment {
    pub fn hard_one_hot(&self) -> Vec<f64> {
        let mut v = vec![0.0; self.soft.len()];
        v[self.hard_index] = 1.0;
        v
    }
}

/// Softmax of the negatively scaled squared distances between `z` and every
/// kernel. Max subtraction keeps the result a valid distribution under any
/// finite `alpha * d`.
pub fn soft_assign(z: f64, cb: &Codebook) -> Assignment {
    let logits: Vec<f64> = cb
        .kernels
        .iter()
        .map(|b| -cb.alpha * (z - b) * (z - b))
        .collect();
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    let soft: Vec<f64> = exps.iter().map(|e| e / sum).collect();
    let mut hard_index = 0;
    for (k, &p) in soft.iter().enumerate() {
        if p > soft[hard_index] {
            hard_index = k;
        }
    }
    let soft_value = soft.iter().zip(&cb.kernels).map(|(a, b)| a * b).sum();
    Assignment {
        hard_index,
        soft_value,
        hard_value: cb.kernels[hard_index],
        soft,
    }
}

/// Soft during training, hard at test time.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum QuantizeMode {
    Soft,
    Hard,
}

/// Quantizes a code vector elementwise, returning the quantized values and
/// the per-element assignments (whose hard indices feed entropy coding).
pub fn quantize_vector(z: &[f64], cb: &Codebook, mode: QuantizeMode) -> (Vec<f64>, Vec<Assignment>) {
    let assignments: Vec<Assignment> = z.iter().map(|&v| soft_assign(v, cb)).collect();
    let values = assignments
        .iter()
        .map(|a| match mode {
            QuantizeMode::Soft => a.soft_value,
            QuantizeMode::Hard => a.hard_value,
        })
        .collect();
    (values, assignments)
}

/// Backpropagates through `h = softmax(-alpha d) . kernels` for one code
/// value.
///
/// `upstream_h` is dL/dh; `upstream_soft`, when present, is dL/da (used by
/// the entropy regularizer). Kernel gradients accumulate into `grad_kernels`;
/// the return value is dL/dz.
pub fn backprop_soft(
    z: f64,
    cb: &Codebook,
    assignment: &Assignment,
    upstream_h: f64,
    upstream_soft: Option<&[f64]>,
    grad_kernels: &mut [f64],
) -> f64 {
    let a = &assignment.soft;
    let k = cb.len();
    debug_assert_eq!(grad_kernels.len(), k);

    // Total upstream into each soft probability.
    let u: Vec<f64> = (0..k)
        .map(|i| {
            upstream_h * cb.kernels[i] + upstream_soft.map(|s| s[i]).unwrap_or(0.0)
        })
        .collect();
    let mean: f64 = u.iter().zip(a).map(|(ui, ai)| ui * ai).sum();
    let mut gz = 0.0;
    for i in 0..k {
        let g_logit = a[i] * (u[i] - mean);
        let d_logit_d_beta = 2.0 * cb.alpha * (z - cb.kernels[i]);
        grad_kernels[i] += g_logit * d_logit_d_beta + upstream_h * a[i];
        gz -= g_logit * d_logit_d_beta;
    }
    gz
}

/// Shannon entropy in bits of a probability vector (0 log 0 = 0).
pub fn entropy_bits(probs: &[f64]) -> f64 {
    probs
        .iter()
        .filter(|&&p| p > 0.0)
        .map(|&p| -p * p.log2())
        .sum()
}

/// Kernel occurrence probabilities with their entropy and the feature rate
/// needed to turn entropy into a bitrate.
#[derive(Debug, Clone)]
pub struct AssignmentStats {
    pub probs: Vec<f64>,
    pub entropy_bits: f64,
    /// Quantized features per second.
    pub feature_rate: f64,
}

impl AssignmentStats {
    /// Training-time estimator: occurrence probabilities are the mean soft
    /// assignments, keeping the entropy differentiable.
    pub fn from_soft(assignments: &[Assignment], feature_rate: f64) -> Result<Self> {
        let first = assignments
            .first()
            .ok_or_else(|| Error::Invalid("no assignments".into()))?;
        let k = first.soft.len();
        let mut probs = vec![0.0; k];
        for a in assignments {
            for (p, s) in probs.iter_mut().zip(&a.soft) {
                *p += s;
            }
        }
        let n = assignments.len() as f64;
        for p in &mut probs {
            *p /= n;
        }
        let entropy = entropy_bits(&probs);
        Ok(Self {
            probs,
            entropy_bits: entropy,
            feature_rate,
        })
    }

    /// Test-time estimator: empirical frequencies of the hard indices.
    pub fn from_hard<I>(indices: I, k: usize, feature_rate: f64) -> Result<Self>
    where
        I: IntoIterator<Item = usize>,
    {
        let mut counts = vec![0u64; k];
        let mut total = 0u64;
        for i in indices {
            if i >= k {
                return Err(Error::Invalid(format!("index {i} out of range for K={k}")));
            }
            counts[i] += 1;
            total += 1;
        }
        if total == 0 {
            return Err(Error::Invalid("no assignments".into()));
        }
        let probs: Vec<f64> = counts.iter().map(|&c| c as f64 / total as f64).collect();
        let entropy = entropy_bits(&probs);
        Ok(Self {
            probs,
            entropy_bits: entropy,
            feature_rate,
        })
    }

    /// `|h| * H(h)`: the entropy lower bound on the bitrate, in bits/second.
    pub fn bitrate_lower_bound(&self) -> f64 {
        self.feature_rate * self.entropy_bits
    }
}

/// Quantized features per second for a codec emitting `code_len` values per
/// module per frame, with frames `hop` samples apart.
pub fn feature_rate(code_len: usize, module_count: usize, sample_rate: u32, hop: usize) -> f64 {
    (code_len * module_count) as f64 * sample_rate as f64 / hop as f64
}

/// Bang-bang controller for the entropy-regularizer blending weight.
#[derive(Debug, Clone)]
pub struct RateController {
    pub target_bps: f64,
    pub blend_weight: f64,
    pub step: f64,
}

impl RateController {
    /// Weight starts at 0.0 and moves in steps of 0.015.
    pub fn new(target_bps: f64) -> Self {
        Self {
            target_bps,
            blend_weight: 0.0,
            step: 0.015,
        }
    }

    /// Raises the weight when the measured bitrate overshoots the target and
    /// lowers it otherwise, clamped at zero.
    pub fn update(&mut self, measured_bps: f64) {
        if measured_bps > self.target_bps {
            self.blend_weight += self.step;
        } else {
            self.blend_weight = (self.blend_weight - self.step).max(0.0);
        }
    }
}

/// One rate-controlled training step on a batch of code values: soft-assigns
/// the batch, measures the soft-entropy bitrate, steps the controller, and
/// descends the kernels on `mean SSE + blend_weight * H`.
///
/// Returns the measured bitrate before the controller update.
pub fn rate_control_step(
    batch: &[f64],
    cb: &mut Codebook,
    ctrl: &mut RateController,
    feature_rate: f64,
    lr: f64,
) -> Result<f64> {
    let assignments: Vec<Assignment> = batch.iter().map(|&z| soft_assign(z, cb)).collect();
    let stats = AssignmentStats::from_soft(&assignments, feature_rate)?;
    let measured = stats.bitrate_lower_bound();
    ctrl.update(measured);

    let n = batch.len() as f64;
    let ln2_inv = 1.0 / std::f64::consts::LN_2;
    // dH/da_ck = -(log2 p_k + 1/ln 2) / n, scaled by the blend weight.
    let upstream_soft: Vec<f64> = stats
        .probs
        .iter()
        .map(|&p| -ctrl.blend_weight * (p.log2() + ln2_inv) / n)
        .collect();
    let mut grad = vec![0.0; cb.len()];
    for (z, a) in batch.iter().zip(&assignments) {
        let upstream_h = 2.0 * (a.soft_value - z) / n;
        backprop_soft(*z, cb, a, upstream_h, Some(&upstream_soft), &mut grad);
    }
    for (k, g) in cb.kernels.iter_mut().zip(&grad) {
        *k -= lr * g;
    }
    Ok(measured)
}
