//! A desk-scale linear codec exercising the full pipeline: matrix
//! analysis/synthesis modules cascaded by residual coding, soft-to-hard
//! quantization with rate-controlled training, a greedy noise-to-mask bit
//! allocator, and a gradient harness that optimizes a reconstruction until
//! its noise falls under the masking curve.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::audio::{frame_signal, overlap_add, AudioClip, Frame};
use crate::bitstream::{read_stream, write_stream, DecodedStream, StreamGeometry};
use crate::error::{Error, Result};
use crate::loss::{LossConfig, LossEvaluator, PamOutputs};
use crate::pam::{GlobalMask, PamAnalyzer};
use crate::quant::{
    backprop_soft, feature_rate, quantize_vector, soft_assign, Assignment, AssignmentStats,
    Codebook, QuantizeMode, RateController,
};
use crate::spectrum::PowerSpectrumDb;

/// Noise-power reduction per allocated bit: one bit halves the quantization
/// step, quartering the noise power (10 log10 4 ~= 6.02 dB).
pub const BIT_STEP_FACTOR: f64 = 4.0;

/// Row-major matrix with explicit dimensions.
#[derive(Debug, Clone, PartialEq)]
pub struct Mat {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Mat {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn matvec(&self, x: &[f64]) -> Vec<f64> {
        debug_assert_eq!(x.len(), self.cols);
        (0..self.rows)
            .map(|r| self.row(r).iter().zip(x).map(|(a, b)| a * b).sum())
            .collect()
    }

    /// `self^T x`.
    pub fn matvec_t(&self, x: &[f64]) -> Vec<f64> {
        debug_assert_eq!(x.len(), self.rows);
        let mut out = vec![0.0; self.cols];
        for r in 0..self.rows {
            let row = self.row(r);
            let xr = x[r];
            for (o, a) in out.iter_mut().zip(row) {
                *o += xr * a;
            }
        }
        out
    }

    /// Accumulates the outer product `coeff * x y^T`.
    pub fn add_outer(&mut self, x: &[f64], y: &[f64], coeff: f64) {
        debug_assert_eq!(x.len(), self.rows);
        debug_assert_eq!(y.len(), self.cols);
        for r in 0..self.rows {
            let base = r * self.cols;
            let xr = coeff * x[r];
            for (c, yv) in y.iter().enumerate() {
                self.data[base + c] += xr * yv;
            }
        }
    }
}

/// Orthonormalizes `count` pseudorandom rows of length `dim` (modified
/// Gram-Schmidt).
fn random_orthonormal_rows(count: usize, dim: usize, rng: &mut impl Rng) -> Mat {
    assert!(count <= dim);
    let mut rows: Vec<Vec<f64>> = (0..count)
        .map(|_| (0..dim).map(|_| rng.gen::<f64>() - 0.5).collect())
        .collect();
    for i in 0..count {
        for j in 0..i {
            let dot: f64 = rows[i].iter().zip(&rows[j]).map(|(a, b)| a * b).sum();
            let other = rows[j].clone();
            for (a, b) in rows[i].iter_mut().zip(&other) {
                *a -= dot * b;
            }
        }
        let norm: f64 = rows[i].iter().map(|v| v * v).sum::<f64>().sqrt();
        for a in &mut rows[i] {
            *a /= norm;
        }
    }
    Mat {
        rows: count,
        cols: dim,
        data: rows.into_iter().flatten().collect(),
    }
}

/// One analysis/synthesis stage: a frame maps to a half-length code, gets
/// quantized, and maps back.
#[derive(Debug, Clone)]
pub struct LinearCodecModule {
    pub analysis: Mat,
    pub synthesis: Mat,
    pub codebook: Codebook,
}

impl LinearCodecModule {
    pub fn new(analysis: Mat, synthesis: Mat, codebook: Codebook) -> Result<Self> {
        if analysis.rows == 0 || analysis.cols == 0 {
            return Err(Error::Invalid("empty analysis matrix".into()));
        }
        if synthesis.rows != analysis.cols || synthesis.cols != analysis.rows {
            return Err(Error::Shape(format!(
                "synthesis is {}x{} but analysis is {}x{}",
                synthesis.rows, synthesis.cols, analysis.rows, analysis.cols
            )));
        }
        if analysis.rows * 2 != analysis.cols {
            return Err(Error::Invalid(format!(
                "code length {} must be half the frame length {}",
                analysis.rows, analysis.cols
            )));
        }
        Ok(Self {
            analysis,
            synthesis,
            codebook,
        })
    }

    /// Random orthonormal analysis rows with the transpose as synthesis, so
    /// an unquantized round trip is the orthogonal projection onto the
    /// analysis row space.
    pub fn random(frame_len: usize, kernels: usize, alpha: f64, rng: &mut impl Rng) -> Result<Self> {
        let code_len = frame_len / 2;
        let analysis = random_orthonormal_rows(code_len, frame_len, rng);
        let mut synthesis = Mat::zeros(frame_len, code_len);
        for r in 0..code_len {
            for c in 0..frame_len {
                synthesis.data[c * code_len + r] = analysis.data[r * frame_len + c];
            }
        }
        let codebook = Codebook::uniform(kernels, -1.0, 1.0, alpha)?;
        Self::new(analysis, synthesis, codebook)
    }

    pub fn frame_len(&self) -> usize {
        self.analysis.cols
    }

    pub fn code_len(&self) -> usize {
        self.analysis.rows
    }

    pub fn encode(&self, frame: &[f64]) -> Vec<f64> {
        self.analysis.matvec(frame)
    }

    pub fn decode(&self, code: &[f64]) -> Vec<f64> {
        self.synthesis.matvec(code)
    }
}

/// How the cascade quantizes codes during encoding.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StackQuantize {
    /// Bypass quantization (diagnostics and linear-algebra checks).
    None,
    /// Differentiable soft assignment (training path).
    Soft,
    /// Hard assignment (test path, emits kernel indices).
    Hard,
}

/// Everything one cascade encoding pass produces.
#[derive(Debug, Clone)]
pub struct StackEncode {
    /// Quantized (or raw, under `None`) codes per module.
    pub codes: Vec<Vec<f64>>,
    /// Kernel indices per module (hard path; empty otherwise).
    pub indices: Vec<Vec<usize>>,
    /// Residual target each module coded.
    pub targets: Vec<Vec<f64>>,
    /// Per-module reconstructions.
    pub recons: Vec<Vec<f64>>,
}

impl StackEncode {
    /// Sum of per-module reconstructions.
    pub fn reconstruction(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.recons[0].len()];
        for r in &self.recons {
            for (o, v) in out.iter_mut().zip(r) {
                *o += v;
            }
        }
        out
    }

    /// Concatenated code vector in cascade order.
    pub fn concatenated(&self) -> Vec<f64> {
        self.codes.iter().flatten().copied().collect()
    }
}

/// A cascade of codec modules, each coding the residual its predecessors
/// left behind.
#[derive(Debug, Clone)]
pub struct ResidualStack {
    pub modules: Vec<LinearCodecModule>,
}

impl ResidualStack {
    pub fn new(modules: Vec<LinearCodecModule>) -> Result<Self> {
        let first = modules
            .first()
            .ok_or_else(|| Error::Invalid("stack needs at least one module".into()))?;
        let (t, c) = (first.frame_len(), first.code_len());
        for (i, m) in modules.iter().enumerate() {
            if m.frame_len() != t || m.code_len() != c {
                return Err(Error::Shape(format!(
                    "module {i} geometry {}x{} differs from module 0's {c}x{t}",
                    m.code_len(),
                    m.frame_len()
                )));
            }
        }
        Ok(Self { modules })
    }

    pub fn random(
        module_count: usize,
        frame_len: usize,
        kernels: usize,
        alpha: f64,
        seed: u64,
    ) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let modules = (0..module_count)
            .map(|_| LinearCodecModule::random(frame_len, kernels, alpha, &mut rng))
            .collect::<Result<_>>()?;
        Self::new(modules)
    }

    pub fn frame_len(&self) -> usize {
        self.modules[0].frame_len()
    }

    pub fn code_len(&self) -> usize {
        self.modules[0].code_len()
    }

    pub fn len(&self) -> usize {
        self.modules.len()
    }

    pub fn is_empty(&self) -> bool {
        self.modules.is_empty()
    }

    /// Sequential residual encoding: module i codes
    /// `s - sum_(j<i) recon_j`.
    pub fn encode(&self, frame: &[f64], mode: StackQuantize) -> Result<StackEncode> {
        if frame.len() != self.frame_len() {
            return Err(Error::Shape(format!(
                "frame has {} samples, stack expects {}",
                frame.len(),
                self.frame_len()
            )));
        }
        let mut residual = frame.to_vec();
        let mut out = StackEncode {
            codes: Vec::with_capacity(self.len()),
            indices: Vec::with_capacity(self.len()),
            targets: Vec::with_capacity(self.len()),
            recons: Vec::with_capacity(self.len()),
        };
        for module in &self.modules {
            out.targets.push(residual.clone());
            let raw = module.encode(&residual);
            let (code, idx) = match mode {
                StackQuantize::None => (raw, Vec::new()),
                StackQuantize::Soft => {
                    let (values, _) = quantize_vector(&raw, &module.codebook, QuantizeMode::Soft);
                    (values, Vec::new())
                }
                StackQuantize::Hard => {
                    let (values, assignments) =
                        quantize_vector(&raw, &module.codebook, QuantizeMode::Hard);
                    (values, assignments.iter().map(|a| a.hard_index).collect())
                }
            };
            let recon = module.decode(&code);
            for (r, v) in residual.iter_mut().zip(&recon) {
                *r -= v;
            }
            out.codes.push(code);
            out.indices.push(idx);
            out.recons.push(recon);
        }
        Ok(out)
    }

    /// Sums per-module syntheses of already-quantized codes.
    pub fn decode_codes(&self, codes: &[Vec<f64>]) -> Result<Vec<f64>> {
        if codes.len() != self.len() {
            return Err(Error::Shape(format!(
                "{} code vectors for a {}-module stack",
                codes.len(),
                self.len()
            )));
        }
        let mut out = vec![0.0; self.frame_len()];
        for (module, code) in self.modules.iter().zip(codes) {
            if code.len() != module.code_len() {
                return Err(Error::Shape(format!(
                    "code has {} values, module expects {}",
                    code.len(),
                    module.code_len()
                )));
            }
            let recon = module.decode(code);
            for (o, v) in out.iter_mut().zip(&recon) {
                *o += v;
            }
        }
        Ok(out)
    }

    /// Maps kernel indices back to kernel values and decodes.
    pub fn decode_indices(&self, indices: &[Vec<usize>]) -> Result<Vec<f64>> {
        let codes: Vec<Vec<f64>> = self
            .modules
            .iter()
            .zip(indices)
            .map(|(m, idx)| {
                idx.iter()
                    .map(|&i| {
                        m.codebook
                            .kernels
                            .get(i)
                            .copied()
                            .ok_or_else(|| Error::Invalid(format!("kernel index {i} out of range")))
                    })
                    .collect::<Result<Vec<f64>>>()
            })
            .collect::<Result<_>>()?;
        self.decode_codes(&codes)
    }
}

/// Hyperparameters for sequential cascade training.
#[derive(Debug, Clone)]
pub struct TrainConfig {
    /// Epochs for the first module.
    pub epochs_first: usize,
    /// Epochs for each later module.
    pub epochs_rest: usize,
    /// Learning rate for the first module.
    pub lr_first: f64,
    /// Learning rate for later modules.
    pub lr_rest: f64,
    pub batch_size: usize,
    pub momentum: f64,
    /// Global-norm gradient clip per batch. The noise-modulation term's
    /// subgradient spans orders of magnitude, which fixed-step descent cannot
    /// absorb unclipped.
    pub clip_norm: Option<f64>,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs_first: 50,
            epochs_rest: 30,
            lr_first: 2e-4,
            lr_rest: 2e-5,
            batch_size: 128,
            momentum: 0.0,
            clip_norm: Some(1e2),
            seed: 0,
        }
    }
}

/// One training-log row.
#[derive(Debug, Clone, serde::Serialize)]
pub struct TrainLogEntry {
    pub module: usize,
    pub epoch: usize,
    pub l1: f64,
    pub l2: f64,
    pub l3: f64,
    pub l4: f64,
    pub total: f64,
    pub entropy_bits: f64,
    pub measured_bps: f64,
    pub blend_weight: f64,
}

/// Writes the training log as CSV.
pub fn write_train_log_csv(mut out: impl Write, log: &[TrainLogEntry]) -> std::io::Result<()> {
    writeln!(
        out,
        "module,epoch,l1,l2,l3,l4,total,entropy_bits,measured_bps,blend_weight"
    )?;
    for e in log {
        writeln!(
            out,
            "{},{},{},{},{},{},{},{},{},{}",
            e.module,
            e.epoch,
            e.l1,
            e.l2,
            e.l3,
            e.l4,
            e.total,
            e.entropy_bits,
            e.measured_bps,
            e.blend_weight
        )?;
    }
    Ok(())
}

/// Trains the stack module by module with gradient descent on the configured
/// loss blend plus the rate-controlled entropy regularizer. Earlier modules
/// are frozen while a later one trains on their residuals (soft path).
///
/// `hop` is the frame stride used to convert entropy to bits/second. Masking
/// data is computed once per frame from the original signal.
pub fn train_stack(
    frames: &[Vec<f64>],
    stack: &mut ResidualStack,
    loss_cfg: &LossConfig,
    ctrl: &mut RateController,
    tcfg: &TrainConfig,
    sample_rate: u32,
    hop: usize,
) -> Result<Vec<TrainLogEntry>> {
    if frames.is_empty() {
        return Err(Error::Invalid("no training frames".into()));
    }
    let t = stack.frame_len();
    for (i, f) in frames.iter().enumerate() {
        if f.len() != t {
            return Err(Error::Shape(format!(
                "training frame {i} has {} samples, stack expects {t}",
                f.len()
            )));
        }
    }
    let mut cfg = loss_cfg.clone();
    cfg.module_count = 1;
    let evaluator = LossEvaluator::new(cfg, t, sample_rate)?;
    let pam_outputs: Option<Vec<PamOutputs>> = if evaluator.config().needs_pam() {
        let pam = PamAnalyzer::new(t, sample_rate)?;
        Some(
            frames
                .iter()
                .map(|f| PamOutputs::analyze(evaluator.analyzer(), &pam, f))
                .collect::<Result<_>>()?,
        )
    } else {
        None
    };

    let per_module_rate = feature_rate(stack.code_len(), 1, sample_rate, hop);
    let mut rng = ChaCha8Rng::seed_from_u64(tcfg.seed);
    let mut log = Vec::new();
    let mut frozen_bps = 0.0;

    for mi in 0..stack.len() {
        // Residual targets under the frozen prefix of the stack.
        let targets: Vec<Vec<f64>> = frames
            .iter()
            .map(|f| {
                if mi == 0 {
                    Ok(f.clone())
                } else {
                    let prefix = ResidualStack::new(stack.modules[..mi].to_vec())?;
                    let enc = prefix.encode(f, StackQuantize::Soft)?;
                    let mut r = f.clone();
                    for (rv, sv) in r.iter_mut().zip(&enc.reconstruction()) {
                        *rv -= sv;
                    }
                    Ok(r)
                }
            })
            .collect::<Result<_>>()?;

        let (epochs, lr) = if mi == 0 {
            (tcfg.epochs_first, tcfg.lr_first)
        } else {
            (tcfg.epochs_rest, tcfg.lr_rest)
        };
        let code_len = stack.code_len();
        let mut v_analysis = Mat::zeros(code_len, t);
        let mut v_synthesis = Mat::zeros(t, code_len);
        let mut v_kernels = vec![0.0; stack.modules[mi].codebook.len()];

        for epoch in 0..epochs {
            let mut order: Vec<usize> = (0..frames.len()).collect();
            order.shuffle(&mut rng);
            let mut epoch_loss = [0.0f64; 5]; // l1..l4, total
            let mut epoch_entropy = 0.0;
            let mut epoch_measured = 0.0;
            let mut batches = 0.0;

            for chunk in order.chunks(tcfg.batch_size.max(1)) {
                let module = &stack.modules[mi];
                // Forward pass over the batch.
                struct Forward {
                    frame_idx: usize,
                    raw: Vec<f64>,
                    assignments: Vec<Assignment>,
                    quantized: Vec<f64>,
                    recon: Vec<f64>,
                }
                let mut fwd = Vec::with_capacity(chunk.len());
                for &fi in chunk {
                    let raw = module.encode(&targets[fi]);
                    let (quantized, assignments) =
                        quantize_vector(&raw, &module.codebook, QuantizeMode::Soft);
                    let recon = module.decode(&quantized);
                    fwd.push(Forward {
                        frame_idx: fi,
                        raw,
                        assignments,
                        quantized,
                        recon,
                    });
                }

                // Batch soft-usage statistics drive the rate controller.
                let all: Vec<Assignment> = fwd
                    .iter()
                    .flat_map(|f| f.assignments.iter().cloned())
                    .collect();
                let stats = AssignmentStats::from_soft(&all, per_module_rate)?;
                let measured = frozen_bps + stats.bitrate_lower_bound();
                ctrl.update(measured);

                let samples = all.len() as f64;
                let ln2_inv = 1.0 / std::f64::consts::LN_2;
                let upstream_soft: Vec<f64> = stats
                    .probs
                    .iter()
                    .map(|&p| -ctrl.blend_weight * (p.log2() + ln2_inv) / samples)
                    .collect();

                // Backward pass.
                let mut g_analysis = Mat::zeros(code_len, t);
                let mut g_synthesis = Mat::zeros(t, code_len);
                let mut g_kernels = vec![0.0; module.codebook.len()];
                let scale = 1.0 / chunk.len() as f64;
                for f in &fwd {
                    let pam = pam_outputs.as_ref().map(|p| &p[f.frame_idx]);
                    let (loss, grads) = evaluator.frame_gradient(
                        &targets[f.frame_idx],
                        std::slice::from_ref(&f.recon),
                        pam,
                    )?;
                    if !loss.total.is_finite() {
                        return Err(Error::Numeric(format!(
                            "training diverged at module {mi} epoch {epoch} (loss {})",
                            loss.total
                        )));
                    }
                    epoch_loss[0] += loss.l1;
                    epoch_loss[1] += loss.l2;
                    epoch_loss[2] += loss.l3;
                    epoch_loss[3] += loss.l4;
                    epoch_loss[4] += loss.total;

                    let g_recon = &grads[0];
                    // synthesis: recon = S h.
                    g_synthesis.add_outer(g_recon, &f.quantized, scale);
                    let g_h = { // dL/dh = S^T g_recon
                        let m = &stack.modules[mi];
                        m.synthesis.matvec_t(g_recon)
                    };
                    let mut g_z = vec![0.0; code_len];
                    for c in 0..code_len {
                        g_z[c] = backprop_soft(
                            f.raw[c],
                            &stack.modules[mi].codebook,
                            &f.assignments[c],
                            g_h[c] * scale,
                            Some(&upstream_soft),
                            &mut g_kernels,
                        );
                    }
                    g_analysis.add_outer(&g_z, &targets[f.frame_idx], 1.0);
                }

                if let Some(clip) = tcfg.clip_norm {
                    let norm2: f64 = g_analysis.data.iter().map(|v| v * v).sum::<f64>()
                        + g_synthesis.data.iter().map(|v| v * v).sum::<f64>()
                        + g_kernels.iter().map(|v| v * v).sum::<f64>();
                    let norm = norm2.sqrt();
                    if norm > clip {
                        let s = clip / norm;
                        g_analysis.data.iter_mut().for_each(|v| *v *= s);
                        g_synthesis.data.iter_mut().for_each(|v| *v *= s);
                        g_kernels.iter_mut().for_each(|v| *v *= s);
                    }
                }

                let module = &mut stack.modules[mi];
                for (v, g) in v_analysis.data.iter_mut().zip(&g_analysis.data) {
                    *v = tcfg.momentum * *v - lr * g;
                }
                for (p, v) in module.analysis.data.iter_mut().zip(&v_analysis.data) {
                    *p += v;
                }
                for (v, g) in v_synthesis.data.iter_mut().zip(&g_synthesis.data) {
                    *v = tcfg.momentum * *v - lr * g;
                }
                for (p, v) in module.synthesis.data.iter_mut().zip(&v_synthesis.data) {
                    *p += v;
                }
                for ((v, g), k) in v_kernels
                    .iter_mut()
                    .zip(&g_kernels)
                    .zip(module.codebook.kernels.iter_mut())
                {
                    *v = tcfg.momentum * *v - lr * g;
                    *k += *v;
                }

                epoch_entropy += stats.entropy_bits;
                epoch_measured += measured;
                batches += 1.0;
            }

            let frames_f = frames.len() as f64;
            log.push(TrainLogEntry {
                module: mi,
                epoch,
                l1: epoch_loss[0] / frames_f,
                l2: epoch_loss[1] / frames_f,
                l3: epoch_loss[2] / frames_f,
                l4: epoch_loss[3] / frames_f,
                total: epoch_loss[4] / frames_f,
                entropy_bits: epoch_entropy / batches,
                measured_bps: epoch_measured / batches,
                blend_weight: ctrl.blend_weight,
            });
        }

        // Freeze this module's rate contribution for the rest of training.
        let module = &stack.modules[mi];
        let mut all = Vec::new();
        for target in &targets {
            let raw = module.encode(target);
            for &z in &raw {
                all.push(soft_assign(z, &module.codebook));
            }
        }
        let stats = AssignmentStats::from_soft(&all, per_module_rate)?;
        frozen_bps += stats.bitrate_lower_bound();
    }
    Ok(log)
}

/// Per-band bit assignment with the max-NMR trace of the greedy loop.
#[derive(Debug, Clone)]
pub struct BitAllocation {
    pub bits_per_band: Vec<u32>,
    pub budget: u32,
    /// Max NMR (linear power ratio) before any bits, then after each bit.
    pub nmr_trace: Vec<f64>,
}

/// Greedy allocator: repeatedly gives one bit to the critical band with the
/// highest noise-to-mask ratio, each bit quartering that band's noise power,
/// until the budget is spent or every band is masked (NMR <= 1).
///
/// The signal's own power stands in for the zero-bit quantization noise.
pub fn greedy_nmr_allocate(
    psd: &PowerSpectrumDb,
    mask: &GlobalMask,
    band_of_bin: &[usize],
    budget: u32,
) -> Result<BitAllocation> {
    let bins = psd.values.len();
    if mask.m.len() != bins || band_of_bin.len() != bins {
        return Err(Error::Shape(format!(
            "psd/mask/band maps disagree: {} vs {} vs {}",
            bins,
            mask.m.len(),
            band_of_bin.len()
        )));
    }
    let bands = band_of_bin.iter().copied().max().unwrap_or(0) + 1;
    let mut noise = vec![0.0f64; bands];
    let mut mask_power = vec![0.0f64; bands];
    for f in 0..bins {
        noise[band_of_bin[f]] += 10f64.powf(0.1 * psd.values[f]);
        mask_power[band_of_bin[f]] += 10f64.powf(0.1 * mask.m[f]);
    }
    let nmr = |noise: &[f64], b: usize| -> f64 {
        if mask_power[b] > 0.0 {
            noise[b] / mask_power[b]
        } else {
            0.0
        }
    };
    let max_band = |noise: &[f64]| -> usize {
        let mut best = 0;
        for b in 1..bands {
            if nmr(noise, b) > nmr(noise, best) {
                best = b;
            }
        }
        best
    };

    let mut bits = vec![0u32; bands];
    let mut trace = vec![nmr(&noise, max_band(&noise))];
    for _ in 0..budget {
        let b = max_band(&noise);
        if nmr(&noise, b) <= 1.0 {
            break;
        }
        bits[b] += 1;
        noise[b] /= BIT_STEP_FACTOR;
        trace.push(nmr(&noise, max_band(&noise)));
    }
    Ok(BitAllocation {
        bits_per_band: bits,
        budget,
        nmr_trace: trace,
    })
}

/// Writes a bit allocation as CSV (`band,bits` rows, then the trace).
pub fn write_allocation_csv(mut out: impl Write, alloc: &BitAllocation) -> std::io::Result<()> {
    writeln!(out, "band,bits")?;
    for (b, bits) in alloc.bits_per_band.iter().enumerate() {
        writeln!(out, "{b},{bits}")?;
    }
    writeln!(out, "iteration,max_nmr")?;
    for (i, nmr) in alloc.nmr_trace.iter().enumerate() {
        writeln!(out, "{i},{nmr}")?;
    }
    Ok(())
}

/// Synthetic degradations for the optimization harness.
#[derive(Debug, Clone, Copy)]
pub enum Degradation {
    /// Uniform amplitude quantization to `bits` bits over [-1, 1].
    UniformQuant { bits: u32 },
    /// Additive white Gaussian noise at the given signal-to-noise ratio.
    WhiteNoiseSnr { snr_db: f64 },
}

impl Degradation {
    /// Parses `quant:<bits>` or `snr:<db>`.
    pub fn parse(spec: &str) -> Result<Self> {
        let (kind, value) = spec
            .split_once(':')
            .ok_or_else(|| Error::Invalid(format!("degradation `{spec}` is not kind:value")))?;
        match kind {
            "quant" => Ok(Self::UniformQuant {
                bits: value
                    .parse()
                    .map_err(|_| Error::Invalid(format!("bad bit count `{value}`")))?,
            }),
            "snr" => Ok(Self::WhiteNoiseSnr {
                snr_db: value
                    .parse()
                    .map_err(|_| Error::Invalid(format!("bad SNR `{value}`")))?,
            }),
            other => Err(Error::Invalid(format!("unknown degradation `{other}`"))),
        }
    }
}

/// Applies a degradation to a frame. The RNG is only consulted for noise.
pub fn degrade(frame: &[f64], degradation: &Degradation, rng: &mut impl Rng) -> Vec<f64> {
    match degradation {
        Degradation::UniformQuant { bits } => {
            let levels = (1u64 << (*bits).min(62)) as f64 - 1.0;
            frame
                .iter()
                .map(|&x| {
                    let u = ((x + 1.0) / 2.0 * levels).round() / levels;
                    (u * 2.0 - 1.0).clamp(-1.0, 1.0)
                })
                .collect()
        }
        Degradation::WhiteNoiseSnr { snr_db } => {
            let power: f64 =
                frame.iter().map(|v| v * v).sum::<f64>() / frame.len() as f64;
            let sigma = (power / 10f64.powf(snr_db / 10.0)).sqrt();
            frame
                .iter()
                .map(|&x| {
                    // Box-Muller.
                    let u1: f64 = rng.gen::<f64>().max(1e-12);
                    let u2: f64 = rng.gen();
                    let g = (-2.0 * u1.ln()).sqrt()
                        * (2.0 * std::f64::consts::PI * u2).cos();
                    x + sigma * g
                })
                .collect()
        }
    }
}

/// One audibility-trace row of the optimization harness.
#[derive(Debug, Clone, serde::Serialize)]
pub struct TraceRow {
    pub step: usize,
    pub audible_bins: usize,
    pub max_nmr: f64,
    pub total_loss: f64,
}

/// Writes an audibility trace as CSV.
pub fn write_trace_csv(mut out: impl Write, trace: &[TraceRow]) -> std::io::Result<()> {
    writeln!(out, "step,audible_bins,max_nmr,total_loss")?;
    for row in trace {
        writeln!(
            out,
            "{},{},{},{}",
            row.step, row.audible_bins, row.max_nmr, row.total_loss
        )?;
    }
    Ok(())
}

/// Gradient-descent options for [`optimize_reconstruction`].
#[derive(Debug, Clone, Copy)]
pub struct OptimizeOptions {
    pub steps: usize,
    /// Fixed step size, or the initial trial step when line search is on.
    pub lr: f64,
    /// Heavy-ball momentum; only applied in fixed-step mode.
    pub momentum: f64,
    /// Backtracking line search on the total loss. The noise-to-mask term's
    /// subgradient varies over orders of magnitude across bins, so a fixed
    /// step either diverges or crawls; backtracking keeps descent stable.
    pub line_search: bool,
}

impl Default for OptimizeOptions {
    fn default() -> Self {
        Self {
            steps: 2000,
            lr: 1e-3,
            momentum: 0.0,
            line_search: true,
        }
    }
}

/// Descends the configured loss over a free reconstruction starting from a
/// degraded frame, tracing how many bins stay audible (noise above mask) at
/// every step. Masking data comes from the reference frame and stays fixed.
/// The trace has exactly `steps + 1` rows, the first describing the starting
/// point.
pub fn optimize_reconstruction(
    reference: &[f64],
    degraded: &[f64],
    evaluator: &LossEvaluator,
    pam: &PamOutputs,
    opts: &OptimizeOptions,
) -> Result<(Vec<f64>, Vec<TraceRow>)> {
    let mut current = degraded.to_vec();
    let mut velocity = vec![0.0; current.len()];
    let mut step_size = opts.lr;
    let mut trace = Vec::with_capacity(opts.steps + 1);
    for step in 0..opts.steps {
        let (loss, grads) =
            evaluator.frame_gradient(reference, std::slice::from_ref(&current), Some(pam))?;
        if !loss.total.is_finite() {
            return Err(Error::Numeric(format!(
                "optimization diverged at step {step}"
            )));
        }
        trace.push(TraceRow {
            step,
            audible_bins: loss.audible_bins,
            max_nmr: loss.max_nmr,
            total_loss: loss.total,
        });
        let g = &grads[0];
        if opts.line_search {
            let gnorm2: f64 = g.iter().map(|v| v * v).sum();
            let lambda = evaluator.config().lambda;
            if loss.l4 > 0.0 {
                // Nonsmooth regime: the max-of-ratios term is convex in the
                // reconstruction, so a Polyak subgradient step sized to the
                // remaining gap makes progress where backtracking stalls at
                // argmax ties. The target sits slightly below the mask so the
                // worst bin actually crosses into inaudibility instead of
                // converging onto the boundary from above.
                let gap = lambda * (loss.l4 + 0.3);
                let eta = 1.5 * gap / gnorm2.max(1e-300);
                for (c, gv) in current.iter_mut().zip(g) {
                    *c -= eta * gv;
                }
            } else {
                let mut eta = step_size;
                for _ in 0..60 {
                    let candidate: Vec<f64> =
                        current.iter().zip(g).map(|(c, gv)| c - eta * gv).collect();
                    let cl = evaluator
                        .frame_loss(reference, std::slice::from_ref(&candidate), Some(pam))?
                        .total;
                    if cl <= loss.total - 1e-4 * eta * gnorm2 {
                        current = candidate;
                        step_size = eta * 2.0;
                        break;
                    }
                    eta *= 0.5;
                    step_size = eta;
                }
            }
        } else {
            for ((c, v), gv) in current.iter_mut().zip(&mut velocity).zip(g) {
                *v = opts.momentum * *v - opts.lr * gv;
                *c += *v;
            }
        }
    }
    let last = evaluator.frame_loss(reference, std::slice::from_ref(&current), Some(pam))?;
    trace.push(TraceRow {
        step: opts.steps,
        audible_bins: last.audible_bins,
        max_nmr: last.max_nmr,
        total_loss: last.total,
    });
    Ok((current, trace))
}

/// A trained stack plus the framing it was trained under.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub stack: ResidualStack,
    pub sample_rate: u32,
    pub overlap: usize,
}

const CHECKPOINT_MAGIC: [u8; 4] = *b"PCKP";
const CHECKPOINT_VERSION: u16 = 1;

impl Checkpoint {
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        w.write_all(&CHECKPOINT_MAGIC)?;
        w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
        w.write_all(&self.sample_rate.to_le_bytes())?;
        w.write_all(&(self.stack.frame_len() as u32).to_le_bytes())?;
        w.write_all(&(self.overlap as u32).to_le_bytes())?;
        w.write_all(&(self.stack.len() as u32).to_le_bytes())?;
        for m in &self.stack.modules {
            for &v in &m.analysis.data {
                w.write_all(&v.to_le_bytes())?;
            }
            for &v in &m.synthesis.data {
                w.write_all(&v.to_le_bytes())?;
            }
            w.write_all(&(m.codebook.len() as u32).to_le_bytes())?;
            for &v in &m.codebook.kernels {
                w.write_all(&v.to_le_bytes())?;
            }
            w.write_all(&m.codebook.alpha.to_le_bytes())?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let mut r = BufReader::new(File::open(path)?);
        let mut buf = Vec::new();
        r.read_to_end(&mut buf)?;
        let mut pos = 0usize;
        let take = |pos: &mut usize, n: usize| -> Result<&[u8]> {
            if *pos + n > buf.len() {
                return Err(Error::Stream("truncated checkpoint".into()));
            }
            let s = &buf[*pos..*pos + n];
            *pos += n;
            Ok(s)
        };
        if take(&mut pos, 4)? != CHECKPOINT_MAGIC {
            return Err(Error::Stream("not a percept checkpoint (bad magic)".into()));
        }
        let version = u16::from_le_bytes(take(&mut pos, 2)?.try_into().unwrap());
        if version != CHECKPOINT_VERSION {
            return Err(Error::Stream(format!(
                "checkpoint version {version} is not supported (expected {CHECKPOINT_VERSION})"
            )));
        }
        let sample_rate = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap());
        let frame_len = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap()) as usize;
        let overlap = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap()) as usize;
        let modules = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap()) as usize;
        let code_len = frame_len / 2;
        let read_f64s = |pos: &mut usize, n: usize| -> Result<Vec<f64>> {
            let mut out = Vec::with_capacity(n);
            for _ in 0..n {
                out.push(f64::from_le_bytes(take(pos, 8)?.try_into().unwrap()));
            }
            Ok(out)
        };
        let mut mods = Vec::with_capacity(modules);
        for _ in 0..modules {
            let analysis = Mat {
                rows: code_len,
                cols: frame_len,
                data: read_f64s(&mut pos, code_len * frame_len)?,
            };
            let synthesis = Mat {
                rows: frame_len,
                cols: code_len,
                data: read_f64s(&mut pos, frame_len * code_len)?,
            };
            let k = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap()) as usize;
            let kernels = read_f64s(&mut pos, k)?;
            let alpha = f64::from_le_bytes(take(&mut pos, 8)?.try_into().unwrap());
            mods.push(LinearCodecModule::new(
                analysis,
                synthesis,
                Codebook::new(kernels, alpha)?,
            )?);
        }
        Ok(Self {
            stack: ResidualStack::new(mods)?,
            sample_rate,
            overlap,
        })
    }
}

/// Encodes a clip to a bitstream with the checkpoint's stack (hard path).
pub fn encode_clip(ckpt: &Checkpoint, clip: &AudioClip) -> Result<Vec<u8>> {
    if clip.sample_rate != ckpt.sample_rate {
        return Err(Error::Shape(format!(
            "clip rate {} differs from checkpoint rate {}",
            clip.sample_rate, ckpt.sample_rate
        )));
    }
    let t = ckpt.stack.frame_len();
    let frames = frame_signal(clip, t, ckpt.overlap)?;
    let mut indices = Vec::with_capacity(frames.len());
    for frame in &frames {
        let enc = ckpt.stack.encode(&frame.samples, StackQuantize::Hard)?;
        indices.push(enc.indices);
    }
    let geometry = StreamGeometry {
        sample_rate: clip.sample_rate,
        frame_len: t as u32,
        overlap: ckpt.overlap as u32,
        code_len: ckpt.stack.code_len() as u32,
        clip_len: clip.len() as u64,
    };
    let kernels: Vec<Vec<f64>> = ckpt
        .stack
        .modules
        .iter()
        .map(|m| m.codebook.kernels.clone())
        .collect();
    write_stream(&geometry, &kernels, &indices)
}

/// Checks that a parsed stream matches the checkpoint it is decoded with.
fn check_compatibility(ckpt: &Checkpoint, stream: &DecodedStream) -> Result<()> {
    let g = &stream.geometry;
    if g.frame_len as usize != ckpt.stack.frame_len()
        || g.code_len as usize != ckpt.stack.code_len()
        || g.sample_rate != ckpt.sample_rate
        || g.overlap as usize != ckpt.overlap
        || stream.kernels.len() != ckpt.stack.len()
    {
        return Err(Error::Stream(
            "bitstream geometry does not match the checkpoint".into(),
        ));
    }
    for (sk, module) in stream.kernels.iter().zip(&ckpt.stack.modules) {
        if sk.len() != module.codebook.len()
            || sk
                .iter()
                .zip(&module.codebook.kernels)
                .any(|(a, b)| *a != *b as f32)
        {
            return Err(Error::Stream(
                "bitstream kernels were produced by a different model".into(),
            ));
        }
    }
    Ok(())
}

/// Decodes a bitstream back to audio using the checkpoint's synthesis.
pub fn decode_clip(ckpt: &Checkpoint, bytes: &[u8]) -> Result<AudioClip> {
    let stream = read_stream(bytes)?;
    check_compatibility(ckpt, &stream)?;
    let g = stream.geometry;
    let t = g.frame_len as usize;
    let hop = t - g.overlap as usize;
    let clip_len = g.clip_len as usize;
    let mut frames = Vec::with_capacity(stream.indices.len());
    for (k, frame_indices) in stream.indices.iter().enumerate() {
        let samples = ckpt.stack.decode_indices(frame_indices)?;
        let start = k * hop;
        frames.push(Frame {
            samples,
            start_index: start,
            valid_len: t.min(clip_len.saturating_sub(start)),
        });
    }
    let clip = overlap_add(&frames, g.overlap as usize, g.sample_rate)?;
    let mut samples = clip.samples;
    samples.truncate(clip_len);
    AudioClip::new(samples, g.sample_rate)
}
