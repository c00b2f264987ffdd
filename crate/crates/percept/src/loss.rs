//! Loss terms for perceptually calibrated coding: time-domain SSE, mel-band
//! SSE, audibility-weighted spectral SSE, and the noise-modulation term that
//! penalizes the worst unmasked noise bin. All terms come with exact
//! sample-domain gradients, including the chain through residual-module
//! targets.

use rustfft::num_complex::Complex64;
use serde::Serialize;

use crate::audio::{frame_signal, AudioClip};
use crate::error::{Error, Result};
use crate::pam::{GlobalMask, PamAnalyzer, PerceptualWeights};
use crate::spectrum::{MelFilterbank, MelNorm, SpectrumAnalyzer};

/// Loss blends, from plain SSE to the full perceptual set.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ModelPreset {
    /// Time-domain SSE only.
    A,
    /// SSE plus mel-band SSE.
    B,
    /// SSE, mel, and priority weighting.
    C,
    /// SSE, mel, priority weighting, and noise modulation.
    D,
}

impl ModelPreset {
    pub fn parse(name: &str) -> Result<Self> {
        match name.to_ascii_lowercase().as_str() {
            "model-a" | "a" => Ok(Self::A),
            "model-b" | "b" => Ok(Self::B),
            "model-c" | "c" => Ok(Self::C),
            "model-d" | "d" => Ok(Self::D),
            other => Err(Error::Invalid(format!("unknown preset `{other}`"))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Self::A => "model-a",
            Self::B => "model-b",
            Self::C => "model-c",
            Self::D => "model-d",
        }
    }
}

/// Which terms are enabled and how the frequency-domain ones are blended.
#[derive(Debug, Clone)]
pub struct LossConfig {
    /// Blend weight applied to every enabled frequency-domain term.
    pub lambda: f64,
    pub time_sse: bool,
    pub mel_sse: bool,
    pub priority: bool,
    pub noise_modulation: bool,
    pub mel_bands: usize,
    pub module_count: usize,
}

impl LossConfig {
    pub fn preset(preset: ModelPreset) -> Self {
        let (mel, pri, nm) = match preset {
            ModelPreset::A => (false, false, false),
            ModelPreset::B => (true, false, false),
            ModelPreset::C => (true, true, false),
            ModelPreset::D => (true, true, true),
        };
        Self {
            lambda: 0.1,
            time_sse: true,
            mel_sse: mel,
            priority: pri,
            noise_modulation: nm,
            mel_bands: 128,
            module_count: 1,
        }
    }

    /// True when any enabled term needs the masking model's outputs.
    pub fn needs_pam(&self) -> bool {
        self.priority || self.noise_modulation
    }
}

/// Masking-model outputs consumed by the losses. Weights and mask derive from
/// the reference frame only and are treated as constants by the gradients.
#[derive(Debug, Clone)]
pub struct PamOutputs {
    pub weights: PerceptualWeights,
    pub mask: GlobalMask,
    /// SPL referencing of the power spectrum the mask was computed from; the
    /// noise-modulation ratio is only meaningful when the loss evaluator
    /// shares it.
    pub norm_offset: f64,
}

impl PamOutputs {
    /// Runs the masking pipeline on one reference frame.
    pub fn analyze(
        analyzer: &SpectrumAnalyzer,
        pam: &PamAnalyzer,
        reference: &[f64],
    ) -> Result<Self> {
        let psd = analyzer.psd_spl(reference)?;
        let frame = pam.analyze(&psd)?;
        Ok(Self {
            weights: frame.weights,
            mask: frame.mask,
            norm_offset: psd.norm_offset,
        })
    }
}

/// Loss values for one frame.
#[derive(Debug, Clone, Serialize)]
pub struct FrameLoss {
    pub l1: f64,
    pub l2: f64,
    pub l3: f64,
    pub l4: f64,
    pub total: f64,
    /// Largest noise-to-mask power ratio (populated when masking data was
    /// supplied, even if the noise-modulation term is disabled).
    pub max_nmr: f64,
    /// Bin attaining `max_nmr`, lowest index on ties.
    pub nmr_argmax_bin: Option<usize>,
    /// Bins whose noise power exceeds the mask.
    pub audible_bins: usize,
}

/// Mean losses over a batch of frames.
#[derive(Debug, Clone, Serialize)]
pub struct AggregateLoss {
    pub l1: f64,
    pub l2: f64,
    pub l3: f64,
    pub l4: f64,
    pub total: f64,
    pub max_nmr: f64,
    pub worst_frame: usize,
    pub mean_audible_bins: f64,
}

/// Per-frame breakdown plus the batch aggregate.
#[derive(Debug, Clone, Serialize)]
pub struct LossReport {
    pub aggregate: AggregateLoss,
    pub per_frame: Vec<FrameLoss>,
}

impl LossReport {
    pub fn from_frames(per_frame: Vec<FrameLoss>) -> Result<Self> {
        if per_frame.is_empty() {
            return Err(Error::Invalid("no frames to aggregate".into()));
        }
        let n = per_frame.len() as f64;
        let mean = |f: fn(&FrameLoss) -> f64| per_frame.iter().map(f).sum::<f64>() / n;
        let worst_frame = per_frame
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.max_nmr.partial_cmp(&b.1.max_nmr).unwrap())
            .map(|(i, _)| i)
            .unwrap_or(0);
        let aggregate = AggregateLoss {
            l1: mean(|f| f.l1),
            l2: mean(|f| f.l2),
            l3: mean(|f| f.l3),
            l4: mean(|f| f.l4),
            total: mean(|f| f.total),
            max_nmr: per_frame[worst_frame].max_nmr,
            worst_frame,
            mean_audible_bins: mean(|f| f.audible_bins as f64),
        };
        Ok(Self {
            aggregate,
            per_frame,
        })
    }
}

/// Evaluates the configured loss blend and its gradients for a fixed frame
/// geometry.
pub struct LossEvaluator {
    cfg: LossConfig,
    analyzer: SpectrumAnalyzer,
    /// Built only when the mel term is enabled.
    mel: Option<MelFilterbank>,
}

struct NmrStats {
    max_nmr: f64,
    argmax: Option<usize>,
    audible: usize,
    /// Linear mask power aligned with raw `|E|^2`, i.e. with the SPL offset
    /// removed so the referencing cancels in the ratio.
    mask_lin: Vec<f64>,
    error_spectrum: Vec<Complex64>,
}

impl LossEvaluator {
    pub fn new(cfg: LossConfig, frame_len: usize, sample_rate: u32) -> Result<Self> {
        if cfg.lambda < 0.0 {
            return Err(Error::Invalid("lambda must be nonnegative".into()));
        }
        if cfg.module_count == 0 {
            return Err(Error::Invalid("module count must be >= 1".into()));
        }
        let analyzer = SpectrumAnalyzer::new(frame_len, sample_rate)?;
        let mel = if cfg.mel_sse {
            Some(MelFilterbank::new(
                sample_rate,
                frame_len,
                cfg.mel_bands,
                MelNorm::Peak,
            )?)
        } else {
            None
        };
        Ok(Self { cfg, analyzer, mel })
    }

    fn mel(&self) -> Result<&MelFilterbank> {
        self.mel
            .as_ref()
            .ok_or_else(|| Error::Invalid("mel term is disabled in this configuration".into()))
    }

    pub fn config(&self) -> &LossConfig {
        &self.cfg
    }

    pub fn analyzer(&self) -> &SpectrumAnalyzer {
        &self.analyzer
    }

    fn check_shapes(&self, reference: &[f64], modules: &[Vec<f64>]) -> Result<()> {
        let t = self.analyzer.frame_len();
        if reference.len() != t {
            return Err(Error::Shape(format!(
                "reference frame has {} samples, expected {t}",
                reference.len()
            )));
        }
        if modules.is_empty() {
            return Err(Error::Shape("at least one module output required".into()));
        }
        if modules.len() != self.cfg.module_count {
            return Err(Error::Shape(format!(
                "{} module outputs but config expects {}",
                modules.len(),
                self.cfg.module_count
            )));
        }
        for (i, m) in modules.iter().enumerate() {
            if m.len() != t {
                return Err(Error::Shape(format!(
                    "module {i} output has {} samples, expected {t}",
                    m.len()
                )));
            }
        }
        Ok(())
    }

    /// Residual target each module codes: `s^(i) = s - sum_(j<i) shat^(j)`.
    fn targets(&self, reference: &[f64], modules: &[Vec<f64>]) -> Vec<Vec<f64>> {
        let mut targets = Vec::with_capacity(modules.len());
        let mut residual = reference.to_vec();
        for m in modules {
            targets.push(residual.clone());
            for (r, v) in residual.iter_mut().zip(m) {
                *r -= v;
            }
        }
        targets
    }

    /// Time-domain SSE summed over modules, each against its residual target.
    pub fn loss_sse_time(&self, reference: &[f64], modules: &[Vec<f64>]) -> Result<f64> {
        self.check_shapes(reference, modules)?;
        let targets = self.targets(reference, modules);
        Ok(modules
            .iter()
            .zip(&targets)
            .map(|(m, t)| m.iter().zip(t).map(|(a, b)| (a - b) * (a - b)).sum::<f64>())
            .sum())
    }

    /// Mel-band SSE summed over modules.
    pub fn loss_mel(&self, reference: &[f64], modules: &[Vec<f64>]) -> Result<f64> {
        self.check_shapes(reference, modules)?;
        let mel = self.mel()?;
        let targets = self.targets(reference, modules);
        let mut total = 0.0;
        for (m, t) in modules.iter().zip(&targets) {
            let y = mel.apply_power(&power_of(&self.analyzer.magnitude(t)?.values))?;
            let yh = mel.apply_power(&power_of(&self.analyzer.magnitude(m)?.values))?;
            total += y
                .values
                .iter()
                .zip(&yh.values)
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>();
        }
        Ok(total)
    }

    /// Audibility-weighted magnitude-spectrum SSE summed over modules.
    pub fn loss_priority(
        &self,
        reference: &[f64],
        modules: &[Vec<f64>],
        weights: &PerceptualWeights,
    ) -> Result<f64> {
        self.check_shapes(reference, modules)?;
        if weights.w.len() != self.analyzer.bins() {
            return Err(Error::Shape(format!(
                "weight vector has {} bins, expected {}",
                weights.w.len(),
                self.analyzer.bins()
            )));
        }
        let targets = self.targets(reference, modules);
        let mut total = 0.0;
        for (m, t) in modules.iter().zip(&targets) {
            let x = self.analyzer.magnitude(t)?;
            let xh = self.analyzer.magnitude(m)?;
            total += x
                .values
                .iter()
                .zip(&xh.values)
                .zip(&weights.w)
                .map(|((a, b), w)| w * (a - b) * (a - b))
                .sum::<f64>();
        }
        Ok(total)
    }

    fn nmr_stats(&self, reference: &[f64], modules: &[Vec<f64>], pam: &PamOutputs) -> Result<NmrStats> {
        if pam.mask.m.len() != self.analyzer.bins() {
            return Err(Error::Shape(format!(
                "mask has {} bins, expected {}",
                pam.mask.m.len(),
                self.analyzer.bins()
            )));
        }
        if (pam.norm_offset - self.analyzer.norm_offset()).abs() > 1e-9 {
            return Err(Error::Shape(
                "mask SPL referencing differs from the loss analyzer's".into(),
            ));
        }
        let mut error = reference.to_vec();
        for m in modules {
            for (e, v) in error.iter_mut().zip(m) {
                *e -= v;
            }
        }
        let spectrum = self.analyzer.complex_spectrum(&error)?;
        // n_f / m_f in linear power with the shared SPL offset cancelled.
        let mask_lin: Vec<f64> = pam
            .mask
            .m
            .iter()
            .map(|&m| 10f64.powf(0.1 * (m - pam.norm_offset)))
            .collect();
        let mut max_nmr = f64::NEG_INFINITY;
        let mut argmax = None;
        let mut audible = 0;
        for (f, (c, ml)) in spectrum.iter().zip(&mask_lin).enumerate() {
            let ratio = c.norm_sqr() / ml;
            if ratio > 1.0 {
                audible += 1;
            }
            if ratio > max_nmr {
                max_nmr = ratio;
                argmax = Some(f);
            }
        }
        Ok(NmrStats {
            max_nmr,
            argmax,
            audible,
            mask_lin,
            error_spectrum: spectrum,
        })
    }

    /// Worst rectified noise-to-mask ratio of the stack's total error,
    /// alongside its argmax bin.
    pub fn loss_noise_modulation(
        &self,
        reference: &[f64],
        modules: &[Vec<f64>],
        pam: &PamOutputs,
    ) -> Result<(f64, Option<usize>)> {
        self.check_shapes(reference, modules)?;
        let stats = self.nmr_stats(reference, modules, pam)?;
        let value = (stats.max_nmr - 1.0).max(0.0);
        let argmax = if value > 0.0 { stats.argmax } else { None };
        Ok((value, argmax))
    }

    fn blend(&self, l1: f64, l2: f64, l3: f64, l4: f64) -> f64 {
        let mut total = 0.0;
        if self.cfg.time_sse {
            total += l1;
        }
        let mut freq = 0.0;
        if self.cfg.mel_sse {
            freq += l2;
        }
        if self.cfg.priority {
            freq += l3;
        }
        if self.cfg.noise_modulation {
            freq += l4;
        }
        total + self.cfg.lambda * freq
    }

    /// Evaluates every enabled term and the blended total for one frame.
    ///
    /// `pam` is required when priority weighting or noise modulation is
    /// enabled; when provided, noise-to-mask statistics are reported even for
    /// presets that do not include the term.
    pub fn frame_loss(
        &self,
        reference: &[f64],
        modules: &[Vec<f64>],
        pam: Option<&PamOutputs>,
    ) -> Result<FrameLoss> {
        self.check_shapes(reference, modules)?;
        if self.cfg.needs_pam() && pam.is_none() {
            return Err(Error::Invalid(
                "this preset needs masking-model outputs; none were supplied".into(),
            ));
        }
        let l1 = self.loss_sse_time(reference, modules)?;
        let l2 = if self.cfg.mel_sse {
            self.loss_mel(reference, modules)?
        } else {
            0.0
        };
        let l3 = if self.cfg.priority {
            self.loss_priority(reference, modules, &pam.unwrap().weights)?
        } else {
            0.0
        };
        let (l4, max_nmr, argmax, audible) = match pam {
            Some(p) => {
                let stats = self.nmr_stats(reference, modules, p)?;
                let value = (stats.max_nmr - 1.0).max(0.0);
                (
                    if self.cfg.noise_modulation { value } else { 0.0 },
                    stats.max_nmr,
                    stats.argmax,
                    stats.audible,
                )
            }
            None => (0.0, 0.0, None, 0),
        };
        Ok(FrameLoss {
            l1,
            l2,
            l3,
            l4,
            total: self.blend(l1, l2, l3, l4),
            max_nmr,
            nmr_argmax_bin: argmax,
            audible_bins: audible,
        })
    }

    /// Loss and the exact gradient of the blended total with respect to every
    /// module's samples. All dependency paths are included: a module's output
    /// also shifts the residual targets of every later module. The
    /// noise-modulation subgradient is routed through the argmax bin (lowest
    /// index on ties) and is zero when all noise is masked.
    pub fn frame_gradient(
        &self,
        reference: &[f64],
        modules: &[Vec<f64>],
        pam: Option<&PamOutputs>,
    ) -> Result<(FrameLoss, Vec<Vec<f64>>)> {
        let loss = self.frame_loss(reference, modules, pam)?;
        let t = self.analyzer.frame_len();
        let n = modules.len();
        let lambda = self.cfg.lambda;
        let mut grads = vec![vec![0.0; t]; n];
        let targets = self.targets(reference, modules);

        // Time SSE: module i's gradient collects 2*e_j for every j >= i,
        // where e_j is the cumulative reconstruction error after module j.
        if self.cfg.time_sse {
            let mut acc = vec![0.0; t];
            for i in (0..n).rev() {
                for ((a, m), tg) in acc.iter_mut().zip(&modules[i]).zip(&targets[i]) {
                    *a += 2.0 * (m - tg);
                }
                for (g, a) in grads[i].iter_mut().zip(&acc) {
                    *g += a;
                }
            }
        }

        // Spectral terms: per module, combine the mel and priority cotangents
        // on the complex spectrum, run one adjoint for the module side and one
        // for the target side, then scatter the target side to earlier
        // modules with a minus sign.
        if self.cfg.mel_sse || self.cfg.priority {
            let weights = pam.map(|p| &p.weights);
            let mut target_adjoints: Vec<Option<Vec<f64>>> = vec![None; n];
            for j in 0..n {
                let spec_hat = self.analyzer.complex_spectrum(&modules[j])?;
                let spec_ref = self.analyzer.complex_spectrum(&targets[j])?;
                let bins = spec_hat.len();

                // d(loss)/d(power) for each side.
                let mut gp_hat = vec![0.0; bins];
                let mut gp_ref = vec![0.0; bins];
                // d(loss)/d(magnitude) likewise.
                let mut gm_hat = vec![0.0; bins];
                let mut gm_ref = vec![0.0; bins];

                if self.cfg.mel_sse {
                    let mel = self.mel()?;
                    let p_hat = power_of_complex(&spec_hat);
                    let p_ref = power_of_complex(&spec_ref);
                    let y_hat = mel.apply_power(&p_hat)?;
                    let y_ref = mel.apply_power(&p_ref)?;
                    for l in 0..y_hat.values.len() {
                        let d = y_hat.values[l] - y_ref.values[l];
                        if d != 0.0 {
                            mel.accumulate_adjoint(l, 2.0 * lambda * d, &mut gp_hat);
                            mel.accumulate_adjoint(l, -2.0 * lambda * d, &mut gp_ref);
                        }
                    }
                }
                if self.cfg.priority {
                    let w = &weights.unwrap().w;
                    for f in 0..bins {
                        let xh = spec_hat[f].norm();
                        let xr = spec_ref[f].norm();
                        let d = xh - xr;
                        gm_hat[f] += 2.0 * lambda * w[f] * d;
                        gm_ref[f] -= 2.0 * lambda * w[f] * d;
                    }
                }

                let hat_cot = complex_cotangent(&spec_hat, &gp_hat, &gm_hat);
                let adj_hat = self.analyzer.adjoint(&hat_cot)?;
                for (g, a) in grads[j].iter_mut().zip(&adj_hat) {
                    *g += a;
                }
                if j > 0 {
                    let ref_cot = complex_cotangent(&spec_ref, &gp_ref, &gm_ref);
                    target_adjoints[j] = Some(self.analyzer.adjoint(&ref_cot)?);
                }
            }
            // grad(module i) -= sum_(j>i) target_adjoint_j
            let mut suffix = vec![0.0; t];
            for i in (0..n.saturating_sub(1)).rev() {
                if let Some(adj) = &target_adjoints[i + 1] {
                    for (s, a) in suffix.iter_mut().zip(adj) {
                        *s += a;
                    }
                }
                for (g, s) in grads[i].iter_mut().zip(&suffix) {
                    *g -= s;
                }
            }
        }

        // Noise modulation: subgradient through the argmax bin of the total
        // error spectrum; identical for every module.
        if self.cfg.noise_modulation {
            let stats = self.nmr_stats(reference, modules, pam.unwrap())?;
            if stats.max_nmr > 1.0 {
                if let Some(f) = stats.argmax {
                    let mut cot = vec![Complex64::new(0.0, 0.0); self.analyzer.bins()];
                    let c = stats.error_spectrum[f];
                    let scale = lambda / stats.mask_lin[f];
                    cot[f] = Complex64::new(2.0 * scale * c.re, 2.0 * scale * c.im);
                    let adj = self.analyzer.adjoint(&cot)?;
                    for g in &mut grads {
                        for (gi, a) in g.iter_mut().zip(&adj) {
                            *gi -= a;
                        }
                    }
                }
            }
        }

        Ok((loss, grads))
    }

    /// Frames both clips and evaluates the loss per frame, computing masking
    /// data from the reference frame where needed.
    pub fn clip_report(
        &self,
        pam: Option<&PamAnalyzer>,
        reference: &AudioClip,
        test: &AudioClip,
        overlap: usize,
    ) -> Result<LossReport> {
        if reference.sample_rate != test.sample_rate {
            return Err(Error::Shape(format!(
                "sample rates differ: {} vs {}",
                reference.sample_rate, test.sample_rate
            )));
        }
        if reference.len() != test.len() {
            return Err(Error::Shape(format!(
                "clip lengths differ: {} vs {}",
                reference.len(),
                test.len()
            )));
        }
        if self.cfg.needs_pam() && pam.is_none() {
            return Err(Error::Invalid(
                "this preset needs a masking analyzer; none was supplied".into(),
            ));
        }
        let t = self.analyzer.frame_len();
        let ref_frames = frame_signal(reference, t, overlap)?;
        let test_frames = frame_signal(test, t, overlap)?;
        let mut per_frame = Vec::with_capacity(ref_frames.len());
        for (rf, tf) in ref_frames.iter().zip(&test_frames) {
            let outputs = match pam {
                Some(p) => Some(PamOutputs::analyze(&self.analyzer, p, &rf.samples)?),
                None => None,
            };
            per_frame.push(self.frame_loss(
                &rf.samples,
                std::slice::from_ref(&tf.samples),
                outputs.as_ref(),
            )?);
        }
        LossReport::from_frames(per_frame)
    }
}

fn power_of(magnitudes: &[f64]) -> Vec<f64> {
    magnitudes.iter().map(|&m| m * m).collect()
}

fn power_of_complex(spectrum: &[Complex64]) -> Vec<f64> {
    spectrum.iter().map(|c| c.norm_sqr()).collect()
}

/// Combines power-domain and magnitude-domain cotangents into the complex
/// cotangent `dL/dRe + i dL/dIm`. A zero-magnitude bin contributes nothing
/// (subgradient choice at the magnitude kink).
fn complex_cotangent(spectrum: &[Complex64], g_power: &[f64], g_mag: &[f64]) -> Vec<Complex64> {
    spectrum
        .iter()
        .zip(g_power.iter().zip(g_mag))
        .map(|(c, (gp, gm))| {
            let mut re = 2.0 * gp * c.re;
            let mut im = 2.0 * gp * c.im;
            let mag = c.norm();
            if mag > 0.0 {
                re += gm * c.re / mag;
                im += gm * c.im / mag;
            }
            Complex64::new(re, im)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::spectrum::DB_FLOOR;
    use approx::assert_abs_diff_eq;
    use std::f64::consts::PI;

    const T: usize = 512;
    const RATE: u32 = 44100;

    fn rng(seed: u64) -> impl FnMut() -> f64 {
        let mut state = seed.wrapping_mul(0x9E3779B97F4A7C15).wrapping_add(1);
        move || {
            state = state
                .wrapping_mul(6364136223846793005)
                .wrapping_add(1442695040888963407);
            (state >> 11) as f64 / (1u64 << 53) as f64 - 0.5
        }
    }

    fn evaluator(preset: ModelPreset, modules: usize) -> LossEvaluator {
        let mut cfg = LossConfig::preset(preset);
        cfg.module_count = modules;
        LossEvaluator::new(cfg, T, RATE).unwrap()
    }

    fn pam_for(reference: &[f64]) -> PamOutputs {
        let analyzer = SpectrumAnalyzer::new(T, RATE).unwrap();
        let pam = PamAnalyzer::new(T, RATE).unwrap();
        PamOutputs::analyze(&analyzer, &pam, reference).unwrap()
    }

    fn tone_rich_frame(seed: u64) -> Vec<f64> {
        let mut r = rng(seed);
        (0..T)
            .map(|t| {
                let th = 2.0 * PI * t as f64 / T as f64;
                0.5 * (th * 23.0).sin() + 0.3 * (th * 57.0).sin() + 0.2 * (th * 90.0).sin()
                    + 0.01 * r()
            })
            .collect()
    }

    #[test]
    fn sse_zero_on_identity() {
        let ev = evaluator(ModelPreset::A, 1);
        let s = tone_rich_frame(1);
        assert_eq!(ev.loss_sse_time(&s, &[s.clone()]).unwrap(), 0.0);
    }

    #[test]
    fn sse_single_sample_delta() {
        let ev = evaluator(ModelPreset::A, 1);
        let s = vec![0.0; T];
        let mut m = s.clone();
        m[100] = 0.25;
        assert_abs_diff_eq!(
            ev.loss_sse_time(&s, &[m]).unwrap(),
            0.0625,
            epsilon = 1e-15
        );
    }

    #[test]
    fn sse_two_modules_sum_of_errors() {
        // Construct modules so module 1 errs by e1 and module 2 by e2.
        let ev = evaluator(ModelPreset::A, 2);
        let mut r = rng(2);
        let s: Vec<f64> = (0..T).map(|_| r()).collect();
        let e1: Vec<f64> = (0..T).map(|_| 0.1 * r()).collect();
        let e2: Vec<f64> = (0..T).map(|_| 0.05 * r()).collect();
        let m1: Vec<f64> = s.iter().zip(&e1).map(|(a, b)| a + b).collect();
        // target_2 = s - m1 = -e1; module 2 = -e1 + e2.
        let m2: Vec<f64> = e1.iter().zip(&e2).map(|(a, b)| -a + b).collect();
        let expect: f64 = e1.iter().map(|v| v * v).sum::<f64>()
            + e2.iter().map(|v| v * v).sum::<f64>();
        assert_abs_diff_eq!(
            ev.loss_sse_time(&s, &[m1, m2]).unwrap(),
            expect,
            epsilon = 1e-12
        );
    }

    #[test]
    fn mel_loss_matches_definition() {
        let ev = evaluator(ModelPreset::B, 1);
        let mut r = rng(3);
        let s = tone_rich_frame(3);
        let m: Vec<f64> = s.iter().map(|v| v + 0.02 * r()).collect();
        let got = ev.loss_mel(&s, &[m.clone()]).unwrap();

        let an = SpectrumAnalyzer::new(T, RATE).unwrap();
        let fb = MelFilterbank::new(RATE, T, 128, MelNorm::Peak).unwrap();
        let y = fb
            .apply_power(&power_of(&an.magnitude(&s).unwrap().values))
            .unwrap();
        let yh = fb
            .apply_power(&power_of(&an.magnitude(&m).unwrap().values))
            .unwrap();
        let expect: f64 = y
            .values
            .iter()
            .zip(&yh.values)
            .map(|(a, b)| (a - b) * (a - b))
            .sum();
        assert_abs_diff_eq!(got, expect, epsilon = 1e-9 * expect.max(1.0));
    }

    #[test]
    fn mel_weighs_low_frequencies_more() {
        // Equal-energy errors: one confined below 1 kHz, one above 10 kHz.
        let ev = evaluator(ModelPreset::B, 1);
        let s = vec![0.0; T];
        let mut r = rng(4);
        let bin_hz = RATE as f64 / T as f64;
        let make_band_noise = |lo_hz: f64, hi_hz: f64, r: &mut dyn FnMut() -> f64| -> Vec<f64> {
            let mut x = vec![0.0; T];
            for f in 1..T / 2 {
                let hz = f as f64 * bin_hz;
                if hz >= lo_hz && hz < hi_hz {
                    let (a, ph) = (r() + 0.6, r() * 2.0 * PI);
                    for (t, v) in x.iter_mut().enumerate() {
                        *v += a * (2.0 * PI * f as f64 * t as f64 / T as f64 + ph).sin();
                    }
                }
            }
            let e: f64 = x.iter().map(|v| v * v).sum::<f64>().sqrt();
            x.iter().map(|v| v / e).collect()
        };
        let low = make_band_noise(100.0, 1000.0, &mut r);
        let high = make_band_noise(10000.0, 22000.0, &mut r);
        let loss_low = ev.loss_mel(&s, &[low]).unwrap();
        let loss_high = ev.loss_mel(&s, &[high]).unwrap();
        assert!(
            loss_high < loss_low,
            "high-band {loss_high} should contribute less than low-band {loss_low}"
        );
    }

    #[test]
    fn priority_zero_weights_zero_loss() {
        let ev = evaluator(ModelPreset::C, 1);
        let s = tone_rich_frame(5);
        let m = vec![0.0; T];
        let w = PerceptualWeights { w: vec![0.0; 257] };
        assert_eq!(ev.loss_priority(&s, &[m], &w).unwrap(), 0.0);
    }

    #[test]
    fn priority_identical_spectra_zero() {
        let ev = evaluator(ModelPreset::C, 1);
        let s = tone_rich_frame(6);
        let w = PerceptualWeights { w: vec![1.0; 257] };
        assert_eq!(ev.loss_priority(&s, &[s.clone()], &w).unwrap(), 0.0);
    }

    #[test]
    fn priority_single_bin_arithmetic() {
        // Reference silent, module a sinusoid whose on-bin magnitude is 3;
        // weight 2 at that bin only: loss = 2 * 3^2 = 18.
        let ev = evaluator(ModelPreset::C, 1);
        let s = vec![0.0; T];
        let amp = 12.0 / T as f64; // Hann on-bin magnitude = amp * T / 4 = 3
        let m: Vec<f64> = (0..T)
            .map(|t| amp * (2.0 * PI * 50.0 * t as f64 / T as f64).sin())
            .collect();
        let mut w = vec![0.0; 257];
        w[50] = 2.0;
        let got = ev
            .loss_priority(&s, &[m], &PerceptualWeights { w })
            .unwrap();
        assert_abs_diff_eq!(got, 18.0, epsilon = 1e-9);
    }

    #[test]
    fn priority_weight_length_mismatch() {
        let ev = evaluator(ModelPreset::C, 1);
        let s = vec![0.0; T];
        let w = PerceptualWeights { w: vec![0.0; 10] };
        assert!(ev.loss_priority(&s, &[s.clone()], &w).is_err());
    }

    /// Builds pam outputs whose mask gives exactly the requested noise-to-mask
    /// ratios for the spectrum of `error`.
    fn pam_with_ratios(
        an: &SpectrumAnalyzer,
        error: &[f64],
        ratios: &[f64],
    ) -> PamOutputs {
        let spec = an.complex_spectrum(error).unwrap();
        let offset = an.norm_offset();
        let m: Vec<f64> = spec
            .iter()
            .zip(ratios)
            .map(|(c, r)| offset + 10.0 * (c.norm_sqr() / r).log10())
            .collect();
        PamOutputs {
            weights: PerceptualWeights {
                w: vec![0.0; ratios.len()],
            },
            mask: GlobalMask { m },
            norm_offset: offset,
        }
    }

    #[test]
    fn noise_modulation_ratio_vector() {
        // Frame length 4 gives exactly three bins; pin NMR = (0.5, 2.0, 1.5).
        let cfg = LossConfig {
            module_count: 1,
            ..LossConfig::preset(ModelPreset::D)
        };
        let cfg = LossConfig { mel_bands: 3, ..cfg };
        let ev = LossEvaluator::new(cfg, 4, 8).unwrap();
        let s = vec![0.9, -0.3, 0.7, 0.2];
        let modules = vec![vec![0.0; 4]];
        let pam = pam_with_ratios(ev.analyzer(), &s, &[0.5, 2.0, 1.5]);
        let (l4, argmax) = ev.loss_noise_modulation(&s, &modules, &pam).unwrap();
        assert_abs_diff_eq!(l4, 1.0, epsilon = 1e-12);
        assert_eq!(argmax, Some(1));
    }

    #[test]
    fn noise_modulation_zero_when_masked() {
        let ev = evaluator(ModelPreset::D, 1);
        let s = tone_rich_frame(7);
        let mut pam = pam_for(&s);
        // Push the mask far above any possible noise.
        for m in &mut pam.mask.m {
            *m = 200.0;
        }
        let (l4, argmax) = ev
            .loss_noise_modulation(&s, &[vec![0.0; T]], &pam)
            .unwrap();
        assert_eq!(l4, 0.0);
        assert_eq!(argmax, None);
    }

    #[test]
    fn noise_modulation_floor_mask_large_finite_ratio() {
        let ev = evaluator(ModelPreset::D, 1);
        let s = tone_rich_frame(8);
        let mut pam = pam_for(&s);
        for m in &mut pam.mask.m {
            *m = DB_FLOOR;
        }
        let (l4, _) = ev
            .loss_noise_modulation(&s, &[vec![0.0; T]], &pam)
            .unwrap();
        assert!(l4.is_finite() && l4 > 1e6);
    }

    #[test]
    fn noise_modulation_power_scaling() {
        let ev = evaluator(ModelPreset::D, 1);
        let s = tone_rich_frame(9);
        let pam = pam_for(&s);
        let m_half: Vec<f64> = s.iter().map(|v| v * 0.5).collect();
        let (l4_full, _) = ev
            .loss_noise_modulation(&s, &[vec![0.0; T]], &pam)
            .unwrap();
        let (l4_half, _) = ev.loss_noise_modulation(&s, &[m_half], &pam).unwrap();
        // Halving the error amplitude quarters every noise power.
        assert_abs_diff_eq!(
            (l4_half + 1.0) * 4.0,
            l4_full + 1.0,
            epsilon = 1e-6 * (l4_full + 1.0)
        );
    }

    #[test]
    fn blend_arithmetic() {
        let ev = evaluator(ModelPreset::D, 1);
        assert_abs_diff_eq!(ev.blend(1.0, 2.0, 3.0, 4.0), 1.9, epsilon = 1e-15);
        let ev_a = evaluator(ModelPreset::A, 1);
        assert_eq!(ev_a.blend(1.0, 2.0, 3.0, 4.0), 1.0);
        let ev_c = evaluator(ModelPreset::C, 1);
        assert_abs_diff_eq!(ev_c.blend(1.0, 2.0, 3.0, 4.0), 1.5, epsilon = 1e-15);
    }

    #[test]
    fn model_a_equals_sse_and_ignores_pam() {
        let ev = evaluator(ModelPreset::A, 1);
        let s = tone_rich_frame(10);
        let m = vec![0.0; T];
        let loss = ev.frame_loss(&s, &[m.clone()], None).unwrap();
        assert_eq!(loss.total, ev.loss_sse_time(&s, &[m]).unwrap());
        assert_eq!(loss.max_nmr, 0.0);
    }

    #[test]
    fn model_d_reduces_to_l1_when_frequency_terms_zero() {
        let ev = evaluator(ModelPreset::D, 1);
        let s = tone_rich_frame(11);
        let pam = pam_for(&s);
        let loss = ev.frame_loss(&s, &[s.clone()], Some(&pam)).unwrap();
        assert_eq!(loss.l1, 0.0);
        assert_eq!(loss.l2, 0.0);
        assert_eq!(loss.l3, 0.0);
        assert_eq!(loss.l4, 0.0);
        assert_eq!(loss.total, 0.0);
    }

    #[test]
    fn missing_pam_rejected() {
        let ev = evaluator(ModelPreset::D, 1);
        let s = tone_rich_frame(12);
        assert!(ev.frame_loss(&s, &[s.clone()], None).is_err());
    }

    #[test]
    fn priority_sandwich_bounds() {
        let ev = evaluator(ModelPreset::C, 1);
        let s = tone_rich_frame(13);
        let mut r = rng(13);
        let m: Vec<f64> = s.iter().map(|v| v + 0.05 * r()).collect();
        let pam = pam_for(&s);
        let l3 = ev.loss_priority(&s, &[m.clone()], &pam.weights).unwrap();

        let an = SpectrumAnalyzer::new(T, RATE).unwrap();
        let x = an.magnitude(&s).unwrap().values;
        let xh = an.magnitude(&m).unwrap().values;
        let sse: f64 = x.iter().zip(&xh).map(|(a, b)| (a - b) * (a - b)).sum();
        let wmin = pam.weights.w.iter().cloned().fold(f64::MAX, f64::min);
        let wmax = pam.weights.w.iter().cloned().fold(f64::MIN, f64::max);
        assert!(l3 <= wmax * sse * (1.0 + 1e-12));
        assert!(l3 >= wmin * sse * (1.0 - 1e-12));
    }

    #[test]
    fn l4_invariant_to_fully_masked_noise() {
        // Start from a masked configuration and add more noise that stays
        // below the mask at every bin: l4 stays exactly 0.
        let ev = evaluator(ModelPreset::D, 1);
        let s = tone_rich_frame(14);
        let pam = pam_for(&s);
        // Small white error, scaled until fully masked.
        let mut r = rng(15);
        let noise: Vec<f64> = (0..T).map(|_| r()).collect();
        let mut scale = 1e-3;
        let masked_module = loop {
            let m: Vec<f64> = s.iter().zip(&noise).map(|(a, b)| a - scale * b).collect();
            let loss = ev.frame_loss(&s, &[m.clone()], Some(&pam)).unwrap();
            if loss.max_nmr < 0.5 {
                break m;
            }
            scale *= 0.5;
            assert!(scale > 1e-15);
        };
        let base = ev
            .frame_loss(&s, &[masked_module.clone()], Some(&pam))
            .unwrap();
        assert_eq!(base.l4, 0.0);
        // Shrink the same masked error further: still zero.
        let smaller: Vec<f64> = s
            .iter()
            .zip(&masked_module)
            .map(|(a, b)| a - 0.5 * (a - b))
            .collect();
        let again = ev.frame_loss(&s, &[smaller], Some(&pam)).unwrap();
        assert_eq!(again.l4, 0.0);
    }

    #[test]
    fn monotone_in_unmasked_bin_error() {
        // Reference silent; module error is a tone on one bin with the mask
        // fixed; growing the tone never decreases l3, l4, or the total.
        let cfg = LossConfig {
            module_count: 1,
            ..LossConfig::preset(ModelPreset::D)
        };
        let ev = LossEvaluator::new(cfg, T, RATE).unwrap();
        let s = vec![0.0; T];
        let offset = ev.analyzer().norm_offset();
        let pam = PamOutputs {
            weights: PerceptualWeights { w: vec![0.5; 257] },
            mask: GlobalMask {
                m: vec![offset; 257],
            },
            norm_offset: offset,
        };
        let mut last = None;
        for k in 1..8 {
            let amp = k as f64 * 0.01;
            let m: Vec<f64> = (0..T)
                .map(|t| amp * (2.0 * PI * 70.0 * t as f64 / T as f64).sin())
                .collect();
            let loss = ev.frame_loss(&s, &[m], Some(&pam)).unwrap();
            if let Some((l3, l4, total)) = last {
                assert!(loss.l3 >= l3);
                assert!(loss.l4 >= l4);
                assert!(loss.total >= total);
            }
            last = Some((loss.l3, loss.l4, loss.total));
        }
    }

    #[test]
    fn gradient_of_plain_sse_is_exact() {
        let ev = evaluator(ModelPreset::A, 1);
        let s = tone_rich_frame(16);
        let mut r = rng(16);
        let m: Vec<f64> = s.iter().map(|v| v + 0.1 * r()).collect();
        let (_, grads) = ev.frame_gradient(&s, &[m.clone()], None).unwrap();
        for t in 0..T {
            assert_eq!(grads[0][t], 2.0 * (m[t] - s[t]));
        }
    }

    #[test]
    fn gradient_zero_at_reference() {
        let ev = evaluator(ModelPreset::C, 1);
        let s = tone_rich_frame(17);
        let pam = pam_for(&s);
        let (_, grads) = ev.frame_gradient(&s, &[s.clone()], Some(&pam)).unwrap();
        assert!(grads[0].iter().all(|&g| g == 0.0));
    }

    /// Central-difference oracle for the full blended loss.
    fn fd_gradient(
        ev: &LossEvaluator,
        s: &[f64],
        modules: &[Vec<f64>],
        pam: Option<&PamOutputs>,
        module: usize,
        h: f64,
    ) -> Vec<f64> {
        let mut grad = vec![0.0; s.len()];
        let mut work = modules.to_vec();
        for t in 0..s.len() {
            work[module][t] = modules[module][t] + h;
            let plus = ev.frame_loss(s, &work, pam).unwrap().total;
            work[module][t] = modules[module][t] - h;
            let minus = ev.frame_loss(s, &work, pam).unwrap().total;
            work[module][t] = modules[module][t];
            grad[t] = (plus - minus) / (2.0 * h);
        }
        grad
    }

    fn norm_rel_err(a: &[f64], b: &[f64]) -> f64 {
        let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum();
        let scale: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt()
            + b.iter().map(|x| x * x).sum::<f64>().sqrt();
        diff.sqrt() / scale.max(1e-12)
    }

    #[test]
    fn gradient_matches_finite_differences_model_d() {
        let ev = evaluator(ModelPreset::D, 1);
        let mut checked = 0;
        let mut seed = 100u64;
        while checked < 3 {
            seed += 1;
            let s = tone_rich_frame(seed);
            let mut r = rng(seed ^ 0xABCD);
            let m: Vec<f64> = s.iter().map(|v| v + 0.05 * r()).collect();
            let pam = pam_for(&s);
            let loss = ev.frame_loss(&s, &[m.clone()], Some(&pam)).unwrap();
            // Stay away from the max kink and from ties.
            if (loss.max_nmr - 1.0).abs() < 0.05 {
                continue;
            }
            let (_, grads) = ev.frame_gradient(&s, &[m.clone()], Some(&pam)).unwrap();
            let fd = fd_gradient(&ev, &s, &[m], Some(&pam), 0, 1e-5);
            let err = norm_rel_err(&grads[0], &fd);
            assert!(err <= 1e-5, "seed {seed}: rel err {err}");
            checked += 1;
        }
    }

    #[test]
    fn gradient_matches_finite_differences_two_modules() {
        // The cross-module path: module 1 shifts module 2's target.
        let ev = evaluator(ModelPreset::D, 2);
        let s = tone_rich_frame(200);
        let mut r = rng(201);
        let m1: Vec<f64> = s.iter().map(|v| v * 0.9 + 0.02 * r()).collect();
        let m2: Vec<f64> = s.iter().zip(&m1).map(|(a, b)| (a - b) * 0.8 + 0.01 * r()).collect();
        let pam = pam_for(&s);
        let modules = vec![m1, m2];
        let (_, grads) = ev.frame_gradient(&s, &modules, Some(&pam)).unwrap();
        for module in 0..2 {
            let fd = fd_gradient(&ev, &s, &modules, Some(&pam), module, 1e-5);
            let err = norm_rel_err(&grads[module], &fd);
            assert!(err <= 1e-5, "module {module}: rel err {err}");
        }
    }

    #[test]
    fn clip_report_identity_is_zero() {
        let ev = evaluator(ModelPreset::D, 1);
        let pam = PamAnalyzer::new(T, RATE).unwrap();
        let samples: Vec<f64> = (0..2000)
            .map(|t| 0.4 * (2.0 * PI * 440.0 * t as f64 / RATE as f64).sin())
            .collect();
        let clip = AudioClip::new(samples, RATE).unwrap();
        let report = ev.clip_report(Some(&pam), &clip, &clip.clone(), 32).unwrap();
        assert_eq!(report.aggregate.total, 0.0);
        assert!(report.per_frame.iter().all(|f| f.total == 0.0));
        serde_json::to_string(&report).unwrap();
    }

    #[test]
    fn clip_report_rejects_rate_mismatch() {
        let ev = evaluator(ModelPreset::A, 1);
        let a = AudioClip::new(vec![0.0; 1000], 44100).unwrap();
        let b = AudioClip::new(vec![0.0; 1000], 32000).unwrap();
        assert!(ev.clip_report(None, &a, &b, 32).is_err());
    }
}
