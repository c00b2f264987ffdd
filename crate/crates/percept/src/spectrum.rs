//! FFT magnitude spectra, SPL-referenced log power spectral density, and the
//! triangular mel filterbank. Also exposes the adjoint of the windowed FFT so
//! spectral losses can push exact gradients back to time-domain samples.

use std::f64::consts::PI;
use std::io::Write;
use std::sync::Arc;

use rustfft::num_complex::Complex64;
use rustfft::{Fft, FftPlanner};

use crate::error::{Error, Result};

/// Hard floor for log-domain spectra, in dB.
pub const DB_FLOOR: f64 = -200.0;

/// SPL level a full-scale on-bin sinusoid is referenced to, in dB.
pub const FULL_SCALE_SPL_DB: f64 = 96.0;

/// Analysis window applied before the FFT.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Window {
    /// Periodic Hann window, the default analysis window.
    Hann,
    /// No windowing; used for diagnostics and impulse checks.
    Rect,
}

/// One-sided magnitude spectrum (`fft_len / 2 + 1` bins).
#[derive(Debug, Clone)]
pub struct MagnitudeSpectrum {
    pub values: Vec<f64>,
    pub bin_hz: f64,
}

/// One-sided log power spectral density in dB SPL.
///
/// `norm_offset` is the dB constant added to `10*log10(|X|^2)` so that a
/// full-scale sinusoid peaks at [`FULL_SCALE_SPL_DB`]; keeping it on the type
/// lets downstream consumers verify that two spectra share referencing.
#[derive(Debug, Clone)]
pub struct PowerSpectrumDb {
    pub values: Vec<f64>,
    pub bin_hz: f64,
    pub norm_offset: f64,
}

/// Mel-band energies.
#[derive(Debug, Clone)]
pub struct MelSpectrum {
    pub values: Vec<f64>,
}

impl MelSpectrum {
    pub fn band_count(&self) -> usize {
        self.values.len()
    }
}

/// Windowed FFT front end for a fixed frame length and sample rate.
///
/// Plans and the window are immutable after construction and can be shared
/// across threads.
pub struct SpectrumAnalyzer {
    frame_len: usize,
    sample_rate: u32,
    window: Vec<f64>,
    forward: Arc<dyn Fft<f64>>,
    inverse: Arc<dyn Fft<f64>>,
    norm_offset: f64,
}

impl SpectrumAnalyzer {
    /// Hann-windowed analyzer, the configuration used by the masking pipeline
    /// and the spectral losses.
    pub fn new(frame_len: usize, sample_rate: u32) -> Result<Self> {
        Self::with_window(frame_len, sample_rate, Window::Hann)
    }

    pub fn with_window(frame_len: usize, sample_rate: u32, window: Window) -> Result<Self> {
        if frame_len < 2 || frame_len % 2 != 0 {
            return Err(Error::Invalid(format!(
                "frame length must be even and >= 2, got {frame_len}"
            )));
        }
        if sample_rate == 0 {
            return Err(Error::Invalid("sample rate must be positive".into()));
        }
        let window: Vec<f64> = match window {
            Window::Hann => (0..frame_len)
                .map(|t| 0.5 - 0.5 * (2.0 * PI * t as f64 / frame_len as f64).cos())
                .collect(),
            Window::Rect => vec![1.0; frame_len],
        };
        // A unit-amplitude on-bin sinusoid peaks at sum(w)/2 in magnitude;
        // anchor that to FULL_SCALE_SPL_DB.
        let peak_mag = window.iter().sum::<f64>() / 2.0;
        let norm_offset = FULL_SCALE_SPL_DB - 20.0 * peak_mag.log10();
        let mut planner = FftPlanner::new();
        Ok(Self {
            frame_len,
            sample_rate,
            window,
            forward: planner.plan_fft_forward(frame_len),
            inverse: planner.plan_fft_inverse(frame_len),
            norm_offset,
        })
    }

    pub fn frame_len(&self) -> usize {
        self.frame_len
    }

    pub fn sample_rate(&self) -> u32 {
        self.sample_rate
    }

    /// Number of one-sided spectrum bins, `frame_len / 2 + 1`.
    pub fn bins(&self) -> usize {
        self.frame_len / 2 + 1
    }

    pub fn bin_hz(&self) -> f64 {
        self.sample_rate as f64 / self.frame_len as f64
    }

    pub fn norm_offset(&self) -> f64 {
        self.norm_offset
    }

    pub fn window(&self) -> &[f64] {
        &self.window
    }

    fn check_len(&self, frame: &[f64]) -> Result<()> {
        if frame.len() != self.frame_len {
            return Err(Error::Shape(format!(
                "frame has {} samples, analyzer expects {}",
                frame.len(),
                self.frame_len
            )));
        }
        Ok(())
    }

    /// One-sided complex spectrum of the windowed frame.
    pub fn complex_spectrum(&self, frame: &[f64]) -> Result<Vec<Complex64>> {
        self.check_len(frame)?;
        let mut buf: Vec<Complex64> = frame
            .iter()
            .zip(&self.window)
            .map(|(s, w)| Complex64::new(s * w, 0.0))
            .collect();
        self.forward.process(&mut buf);
        buf.truncate(self.bins());
        Ok(buf)
    }

    /// One-sided magnitude spectrum of the windowed frame.
    pub fn magnitude(&self, frame: &[f64]) -> Result<MagnitudeSpectrum> {
        let spec = self.complex_spectrum(frame)?;
        Ok(MagnitudeSpectrum {
            values: spec.iter().map(|c| c.norm()).collect(),
            bin_hz: self.bin_hz(),
        })
    }

    /// SPL-referenced log power spectral density, floored at [`DB_FLOOR`].
    pub fn psd_spl(&self, frame: &[f64]) -> Result<PowerSpectrumDb> {
        let mag = self.magnitude(frame)?;
        Ok(PowerSpectrumDb {
            values: mag
                .values
                .iter()
                .map(|&m| (self.norm_offset + 20.0 * m.log10()).max(DB_FLOOR))
                .collect(),
            bin_hz: self.bin_hz(),
            norm_offset: self.norm_offset,
        })
    }

    /// Adjoint of [`Self::complex_spectrum`]: maps a cotangent on the one-sided
    /// complex bins to the gradient with respect to the unwindowed frame
    /// samples. The cotangent convention is `grad[f] = dL/dRe + i*dL/dIm`.
    pub fn adjoint(&self, grad_bins: &[Complex64]) -> Result<Vec<f64>> {
        if grad_bins.len() != self.bins() {
            return Err(Error::Shape(format!(
                "gradient has {} bins, analyzer expects {}",
                grad_bins.len(),
                self.bins()
            )));
        }
        let mut buf = vec![Complex64::new(0.0, 0.0); self.frame_len];
        buf[..grad_bins.len()].copy_from_slice(grad_bins);
        self.inverse.process(&mut buf);
        Ok(buf
            .iter()
            .zip(&self.window)
            .map(|(c, w)| c.re * w)
            .collect())
    }
}

/// Mel filterbank normalization.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum MelNorm {
    /// Unit-peak triangles; adjacent filters sum to one between the first and
    /// last centers.
    #[default]
    Peak,
    /// Triangles scaled to unit area in Hz, giving near-equal band energies on
    /// a flat power spectrum.
    Area,
}

fn hz_to_mel(hz: f64) -> f64 {
    2595.0 * (1.0 + hz / 700.0).log10()
}

fn mel_to_hz(mel: f64) -> f64 {
    700.0 * (10f64.powf(mel / 2595.0) - 1.0)
}

/// Triangular filterbank mapping a one-sided power spectrum to mel bands.
#[derive(Debug, Clone)]
pub struct MelFilterbank {
    weights: Vec<f64>, // row-major, bands x bins
    bands: usize,
    bins: usize,
}

impl MelFilterbank {
    /// Builds `bands` triangular filters spanning 0 Hz to Nyquist.
    pub fn new(sample_rate: u32, fft_len: usize, bands: usize, norm: MelNorm) -> Result<Self> {
        let bins = fft_len / 2 + 1;
        if bands == 0 {
            return Err(Error::Invalid("mel band count must be >= 1".into()));
        }
        if bands > bins {
            return Err(Error::Invalid(format!(
                "{bands} mel bands exceed the {bins} spectrum bins"
            )));
        }
        let nyquist = sample_rate as f64 / 2.0;
        let mel_max = hz_to_mel(nyquist);
        let mel_points: Vec<f64> = (0..bands + 2)
            .map(|i| mel_max * i as f64 / (bands + 1) as f64)
            .collect();
        let bin_hz = sample_rate as f64 / fft_len as f64;

        let mut weights = vec![0.0; bands * bins];
        for l in 0..bands {
            let (lo, center, hi) = (mel_points[l], mel_points[l + 1], mel_points[l + 2]);
            let scale = match norm {
                MelNorm::Peak => 1.0,
                MelNorm::Area => 2.0 / (mel_to_hz(hi) - mel_to_hz(lo)),
            };
            for f in 0..bins {
                let mel = hz_to_mel(f as f64 * bin_hz);
                let w = if mel >= lo && mel < center {
                    (mel - lo) / (center - lo)
                } else if mel >= center && mel <= hi {
                    (hi - mel) / (hi - center)
                } else {
                    0.0
                };
                weights[l * bins + f] = w * scale;
            }
        }
        Ok(Self {
            weights,
            bands,
            bins,
        })
    }

    pub fn bands(&self) -> usize {
        self.bands
    }

    pub fn bins(&self) -> usize {
        self.bins
    }

    pub fn row(&self, band: usize) -> &[f64] {
        &self.weights[band * self.bins..(band + 1) * self.bins]
    }

    /// Applies the filterbank to a linear power spectrum.
    pub fn apply_power(&self, power: &[f64]) -> Result<MelSpectrum> {
        if power.len() != self.bins {
            return Err(Error::Shape(format!(
                "power spectrum has {} bins, filterbank expects {}",
                power.len(),
                self.bins
            )));
        }
        let values = (0..self.bands)
            .map(|l| {
                self.row(l)
                    .iter()
                    .zip(power)
                    .map(|(w, p)| w * p)
                    .sum::<f64>()
            })
            .collect();
        Ok(MelSpectrum { values })
    }

    /// Accumulates `coeff * row(band)` into `grad`, the power-spectrum
    /// cotangent of [`Self::apply_power`].
    pub fn accumulate_adjoint(&self, band: usize, coeff: f64, grad: &mut [f64]) {
        for (g, w) in grad.iter_mut().zip(self.row(band)) {
            *g += coeff * w;
        }
    }
}

/// Writes a spectrum as `bin,hz,value` CSV rows.
pub fn write_spectrum_csv(
    mut out: impl Write,
    bin_hz: f64,
    values: &[f64],
) -> std::io::Result<()> {
    writeln!(out, "bin,hz,value")?;
    for (i, v) in values.iter().enumerate() {
        writeln!(out, "{i},{:.6},{v}", i as f64 * bin_hz)?;
    }
    Ok(())
}
