//! Simultaneous-masking model: absolute threshold of hearing, tonal and noise
//! masker detection with decimation, two-slope spreading, individual and
//! global masking thresholds, and the audibility weight vector derived from
//! the signal-to-mask ratio.

use std::io::Write;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::spectrum::{PowerSpectrumDb, DB_FLOOR};

/// Critical-band rate (Bark) of a frequency in Hz.
pub fn bark(hz: f64) -> f64 {
    13.0 * (0.00076 * hz).atan() + 3.5 * ((hz / 7500.0) * (hz / 7500.0)).atan()
}

/// Absolute threshold of hearing in dB SPL at `hz` (closed form; diverges at
/// 0 Hz, callers clamp the DC bin).
pub fn ath_db(hz: f64) -> f64 {
    let k = hz / 1000.0;
    3.64 * k.powf(-0.8) - 6.5 * (-0.6 * (k - 3.3) * (k - 3.3)).exp() + 1e-3 * k.powi(4)
}

/// Absolute threshold of hearing sampled on a spectrum's bin grid.
#[derive(Debug, Clone)]
pub struct AbsoluteThreshold {
    pub q: Vec<f64>,
    pub bin_hz: f64,
}

/// Builds the threshold for `bins` bins spaced `bin_hz` apart. The DC bin is
/// clamped to the first nonzero bin's value.
pub fn absolute_threshold(bin_hz: f64, bins: usize) -> Result<AbsoluteThreshold> {
    if bin_hz <= 0.0 || bins == 0 {
        return Err(Error::Invalid(
            "absolute threshold needs positive bin spacing and at least one bin".into(),
        ));
    }
    let mut q: Vec<f64> = (0..bins).map(|f| ath_db(f as f64 * bin_hz)).collect();
    if bins > 1 {
        q[0] = q[1];
    }
    Ok(AbsoluteThreshold { q, bin_hz })
}

/// Masker class.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum MaskerKind {
    Tonal,
    Noise,
}

/// A detected masker: a spectral peak or a critical band's residual noise.
#[derive(Debug, Clone, Serialize)]
pub struct Masker {
    pub bin: usize,
    pub level_db: f64,
    pub kind: MaskerKind,
    pub bark: f64,
}

/// Maskers surviving decimation, sorted by bin.
#[derive(Debug, Clone, Default)]
pub struct MaskerSet {
    pub maskers: Vec<Masker>,
}

impl MaskerSet {
    pub fn tonal(&self) -> impl Iterator<Item = &Masker> {
        self.maskers.iter().filter(|m| m.kind == MaskerKind::Tonal)
    }

    pub fn noise(&self) -> impl Iterator<Item = &Masker> {
        self.maskers.iter().filter(|m| m.kind == MaskerKind::Noise)
    }

    pub fn len(&self) -> usize {
        self.maskers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.maskers.is_empty()
    }
}

/// Per-masker threshold curves: one column per surviving masker.
#[derive(Debug, Clone, Default)]
pub struct IndividualThresholds {
    /// `tonal[r][f]` is the threshold the r-th tonal masker imposes at bin f.
    pub tonal: Vec<Vec<f64>>,
    /// `noise[b][f]` likewise for noise maskers.
    pub noise: Vec<Vec<f64>>,
}

/// Global masking threshold in dB SPL, one value per bin.
#[derive(Debug, Clone)]
pub struct GlobalMask {
    pub m: Vec<f64>,
}

/// Nonnegative audibility weights, larger where signal power exceeds the mask.
#[derive(Debug, Clone)]
pub struct PerceptualWeights {
    pub w: Vec<f64>,
}

/// Two-slope spreading function with level-dependent skirts, evaluated on the
/// Bark distance from masker to maskee.
#[derive(Debug, Clone)]
pub struct SpreadingFunction {
    /// Half-open Bark support `[lower, upper)`; no masking outside it.
    pub bark_range: (f64, f64),
    pub lower_far_slope: f64,
    pub lower_far_level_coeff: f64,
    pub lower_far_offset: f64,
    pub lower_near_level_coeff: f64,
    pub lower_near_offset: f64,
    pub upper_near_slope: f64,
    pub upper_far_level_coeff: f64,
    pub upper_far_slope: f64,
}

impl Default for SpreadingFunction {
    fn default() -> Self {
        Self {
            bark_range: (-3.0, 8.0),
            lower_far_slope: 17.0,
            lower_far_level_coeff: -0.4,
            lower_far_offset: 11.0,
            lower_near_level_coeff: 0.4,
            lower_near_offset: 6.0,
            upper_near_slope: -17.0,
            upper_far_level_coeff: 0.15,
            upper_far_slope: -17.0,
        }
    }
}

impl SpreadingFunction {
    /// Spread in dB at Bark distance `dz` for a masker at `level_db`, or
    /// `None` outside the supported range.
    pub fn evaluate(&self, dz: f64, level_db: f64) -> Option<f64> {
        if dz < self.bark_range.0 || dz >= self.bark_range.1 {
            return None;
        }
        Some(if dz < -1.0 {
            self.lower_far_slope * dz + self.lower_far_level_coeff * level_db
                + self.lower_far_offset
        } else if dz < 0.0 {
            (self.lower_near_level_coeff * level_db + self.lower_near_offset) * dz
        } else if dz < 1.0 {
            self.upper_near_slope * dz
        } else {
            (self.upper_far_level_coeff * level_db + self.upper_far_slope) * dz
                - self.upper_far_level_coeff * level_db
        })
    }
}

/// Offset applied to a masker's level when forming its threshold curve:
/// `threshold = level - bark_slope * z(masker) + spread - constant`.
#[derive(Debug, Clone, Copy)]
pub struct MaskingOffset {
    pub bark_slope: f64,
    pub constant: f64,
}

/// Prominence-neighborhood zone: peaks below `max_hz` are examined out to
/// `width_bins` (at the reference FFT size).
#[derive(Debug, Clone, Copy)]
pub struct NeighborhoodZone {
    pub max_hz: f64,
    pub width_bins: usize,
}

/// Tunable masking-model constants.
#[derive(Debug, Clone)]
pub struct PamConfig {
    pub tonal_offset: MaskingOffset,
    pub noise_offset: MaskingOffset,
    /// A local maximum must exceed its neighborhood by this much to count as
    /// tonal.
    pub tonal_prominence_db: f64,
    /// Maskers closer than this (in Bark) are decimated to the strongest.
    pub decimation_window_bark: f64,
    pub spreading: SpreadingFunction,
    /// Neighborhood widths by frequency zone, ordered by `max_hz`.
    pub zones: Vec<NeighborhoodZone>,
    /// FFT size the zone widths are tabulated for; widths scale with the
    /// actual frame length.
    pub reference_fft_len: usize,
}

impl Default for PamConfig {
    fn default() -> Self {
        Self {
            tonal_offset: MaskingOffset {
                bark_slope: 0.275,
                constant: 6.025,
            },
            noise_offset: MaskingOffset {
                bark_slope: 0.175,
                constant: 2.025,
            },
            tonal_prominence_db: 7.0,
            decimation_window_bark: 0.5,
            spreading: SpreadingFunction::default(),
            zones: vec![
                NeighborhoodZone {
                    max_hz: 2500.0,
                    width_bins: 2,
                },
                NeighborhoodZone {
                    max_hz: 5500.0,
                    width_bins: 3,
                },
                NeighborhoodZone {
                    max_hz: f64::INFINITY,
                    width_bins: 6,
                },
            ],
            reference_fft_len: 512,
        }
    }
}

/// Number of critical bands covered by the Bark scale.
pub const CRITICAL_BAND_COUNT: usize = 25;

/// Maps each bin to its critical band, `floor(bark)` clamped to the band count.
pub fn critical_band_map(bin_hz: f64, bins: usize) -> Vec<usize> {
    (0..bins)
        .map(|f| (bark(f as f64 * bin_hz).floor() as usize).min(CRITICAL_BAND_COUNT - 1))
        .collect()
}

/// Masking-model pipeline for a fixed spectrum geometry.
pub struct PamAnalyzer {
    config: PamConfig,
    bin_hz: f64,
    bins: usize,
    bark_of_bin: Vec<f64>,
    band_of_bin: Vec<usize>,
    width_of_bin: Vec<usize>,
    ath: AbsoluteThreshold,
}

/// Everything the model derives from one frame's power spectrum.
#[derive(Debug, Clone)]
pub struct PamFrame {
    pub maskers: MaskerSet,
    pub thresholds: IndividualThresholds,
    pub mask: GlobalMask,
    pub weights: PerceptualWeights,
}

impl PamAnalyzer {
    pub fn new(frame_len: usize, sample_rate: u32) -> Result<Self> {
        Self::with_config(frame_len, sample_rate, PamConfig::default())
    }

    pub fn with_config(frame_len: usize, sample_rate: u32, config: PamConfig) -> Result<Self> {
        if frame_len < 2 || frame_len % 2 != 0 {
            return Err(Error::Invalid(format!(
                "frame length must be even and >= 2, got {frame_len}"
            )));
        }
        if config.zones.is_empty() {
            return Err(Error::Invalid("at least one neighborhood zone".into()));
        }
        let bins = frame_len / 2 + 1;
        let bin_hz = sample_rate as f64 / frame_len as f64;
        let bark_of_bin: Vec<f64> = (0..bins).map(|f| bark(f as f64 * bin_hz)).collect();
        let band_of_bin = critical_band_map(bin_hz, bins);
        let scale = frame_len as f64 / config.reference_fft_len as f64;
        let width_of_bin: Vec<usize> = (0..bins)
            .map(|f| {
                let hz = f as f64 * bin_hz;
                let zone = config
                    .zones
                    .iter()
                    .find(|z| hz < z.max_hz)
                    .unwrap_or(config.zones.last().unwrap());
                ((zone.width_bins as f64 * scale).round() as usize).max(2)
            })
            .collect();
        let ath = absolute_threshold(bin_hz, bins)?;
        Ok(Self {
            config,
            bin_hz,
            bins,
            bark_of_bin,
            band_of_bin,
            width_of_bin,
            ath,
        })
    }

    pub fn bins(&self) -> usize {
        self.bins
    }

    pub fn bin_hz(&self) -> f64 {
        self.bin_hz
    }

    pub fn absolute_threshold(&self) -> &AbsoluteThreshold {
        &self.ath
    }

    pub fn band_of_bin(&self) -> &[usize] {
        &self.band_of_bin
    }

    fn check_psd(&self, psd: &PowerSpectrumDb) -> Result<()> {
        if psd.values.len() != self.bins {
            return Err(Error::Shape(format!(
                "psd has {} bins, analyzer expects {}",
                psd.values.len(),
                self.bins
            )));
        }
        Ok(())
    }

    /// Detects tonal and noise maskers and decimates them: below-threshold
    /// maskers are dropped, and of any pair closer than the decimation window
    /// only the stronger survives.
    pub fn detect_maskers(&self, psd: &PowerSpectrumDb) -> Result<MaskerSet> {
        self.check_psd(psd)?;
        let p = &psd.values;
        let mut consumed = vec![false; self.bins];
        let mut maskers = Vec::new();

        // Tonal: local maxima exceeding their zone neighborhood by the
        // prominence margin; level is the power sum of the peak and its two
        // immediate neighbors.
        for k in 2..self.bins.saturating_sub(1) {
            if !(p[k] > p[k - 1] && p[k] >= p[k + 1]) {
                continue;
            }
            let width = self.width_of_bin[k];
            if k < width || k + width >= self.bins {
                continue;
            }
            let prominent = (2..=width).all(|j| {
                p[k] - p[k - j] >= self.config.tonal_prominence_db
                    && p[k] - p[k + j] >= self.config.tonal_prominence_db
            });
            if !prominent {
                continue;
            }
            let level = power_sum_db(&[p[k - 1], p[k], p[k + 1]]);
            for j in k - width..=k + width {
                consumed[j] = true;
            }
            maskers.push(Masker {
                bin: k,
                level_db: level,
                kind: MaskerKind::Tonal,
                bark: self.bark_of_bin[k],
            });
        }

        // Noise: per critical band, the power sum of bins not consumed by a
        // tonal masker, placed at the band's geometric-mean bin.
        for band in 0..CRITICAL_BAND_COUNT {
            let member_bins: Vec<usize> = (0..self.bins)
                .filter(|&f| self.band_of_bin[f] == band)
                .collect();
            if member_bins.is_empty() {
                continue;
            }
            let free: Vec<usize> = member_bins
                .iter()
                .copied()
                .filter(|&f| !consumed[f])
                .collect();
            if free.is_empty() {
                continue;
            }
            let level = power_sum_db(&free.iter().map(|&f| p[f]).collect::<Vec<_>>());
            let log_mean = member_bins
                .iter()
                .map(|&f| ((f + 1) as f64).ln())
                .sum::<f64>()
                / member_bins.len() as f64;
            let bin = (log_mean.exp().round() as usize).saturating_sub(1).min(self.bins - 1);
            maskers.push(Masker {
                bin,
                level_db: level,
                kind: MaskerKind::Noise,
                bark: self.bark_of_bin[bin],
            });
        }

        // Decimation pass 1: below the absolute threshold at the masker bin.
        maskers.retain(|m| m.level_db >= self.ath.q[m.bin]);

        // Decimation pass 2: Bark-sorted sweep keeping the stronger of any
        // pair inside the decimation window (lower bin wins ties).
        maskers.sort_by(|a, b| {
            a.bark
                .partial_cmp(&b.bark)
                .unwrap()
                .then(a.bin.cmp(&b.bin))
        });
        let mut kept: Vec<Masker> = Vec::with_capacity(maskers.len());
        for m in maskers {
            let conflict = kept
                .last()
                .map(|k| (m.bark - k.bark).abs() < self.config.decimation_window_bark)
                .unwrap_or(false);
            if conflict {
                let last = kept.last().unwrap();
                if m.level_db > last.level_db {
                    kept.pop();
                    kept.push(m);
                }
            } else {
                kept.push(m);
            }
        }
        kept.sort_by_key(|m| m.bin);
        Ok(MaskerSet { maskers: kept })
    }

    /// Threshold curve each surviving masker imposes across all bins.
    pub fn individual_thresholds(&self, maskers: &MaskerSet) -> IndividualThresholds {
        let column = |m: &Masker, offset: &MaskingOffset| -> Vec<f64> {
            let z_m = m.bark;
            (0..self.bins)
                .map(|f| {
                    let dz = self.bark_of_bin[f] - z_m;
                    match self.config.spreading.evaluate(dz, m.level_db) {
                        Some(sf) => m.level_db - offset.bark_slope * z_m + sf - offset.constant,
                        None => DB_FLOOR,
                    }
                })
                .collect()
        };
        IndividualThresholds {
            tonal: maskers
                .tonal()
                .map(|m| column(m, &self.config.tonal_offset))
                .collect(),
            noise: maskers
                .noise()
                .map(|m| column(m, &self.config.noise_offset))
                .collect(),
        }
    }

    /// Power-sums the absolute threshold with every individual threshold.
    pub fn global_mask(&self, thresholds: &IndividualThresholds) -> GlobalMask {
        global_mask(thresholds, &self.ath)
    }

    /// Full per-frame pipeline: maskers, thresholds, global mask, weights.
    pub fn analyze(&self, psd: &PowerSpectrumDb) -> Result<PamFrame> {
        let maskers = self.detect_maskers(psd)?;
        let thresholds = self.individual_thresholds(&maskers);
        let mask = self.global_mask(&thresholds);
        let weights = perceptual_weights(psd, &mask)?;
        Ok(PamFrame {
            maskers,
            thresholds,
            mask,
            weights,
        })
    }
}

fn power_sum_db(levels: &[f64]) -> f64 {
    let sum: f64 = levels.iter().map(|&l| 10f64.powf(0.1 * l)).sum();
    if sum <= 0.0 {
        DB_FLOOR
    } else {
        (10.0 * sum.log10()).max(DB_FLOOR)
    }
}

/// Global masking threshold: per-bin power sum of the absolute threshold and
/// all individual masker thresholds.
pub fn global_mask(thresholds: &IndividualThresholds, q: &AbsoluteThreshold) -> GlobalMask {
    if thresholds.tonal.is_empty() && thresholds.noise.is_empty() {
        return GlobalMask { m: q.q.clone() };
    }
    let bins = q.q.len();
    let m = (0..bins)
        .map(|f| {
            let mut acc = 10f64.powf(0.1 * q.q[f]);
            for col in thresholds.tonal.iter().chain(thresholds.noise.iter()) {
                acc += 10f64.powf(0.1 * col[f]);
            }
            10.0 * acc.log10()
        })
        .collect();
    GlobalMask { m }
}

/// Audibility weights `w = log10(10^(0.1 p) / 10^(0.1 m) + 1)`, evaluated in
/// the level-difference domain for stability.
pub fn perceptual_weights(p: &PowerSpectrumDb, m: &GlobalMask) -> Result<PerceptualWeights> {
    if p.values.len() != m.m.len() {
        return Err(Error::Shape(format!(
            "psd has {} bins but mask has {}",
            p.values.len(),
            m.m.len()
        )));
    }
    let w = p
        .values
        .iter()
        .zip(&m.m)
        .map(|(&pf, &mf)| (10f64.powf(0.1 * (pf - mf)) + 1.0).log10())
        .collect();
    Ok(PerceptualWeights { w })
}

/// Writes `bin,hz,psd_db,ath_db,mask_db` rows for one frame.
pub fn write_mask_csv(
    mut out: impl Write,
    psd: &PowerSpectrumDb,
    ath: &AbsoluteThreshold,
    mask: &GlobalMask,
) -> std::io::Result<()> {
    writeln!(out, "bin,hz,psd_db,ath_db,mask_db")?;
    for f in 0..psd.values.len() {
        writeln!(
            out,
            "{f},{:.6},{},{},{}",
            f as f64 * psd.bin_hz,
            psd.values[f],
            ath.q[f],
            mask.m[f]
        )?;
    }
    Ok(())
}

/// Writes `bin,hz,kind,level_db,bark` rows for the surviving maskers.
pub fn write_maskers_csv(
    mut out: impl Write,
    maskers: &MaskerSet,
    bin_hz: f64,
) -> std::io::Result<()> {
    writeln!(out, "bin,hz,kind,level_db,bark")?;
    for m in &maskers.maskers {
        let kind = match m.kind {
            MaskerKind::Tonal => "tonal",
            MaskerKind::Noise => "noise",
        };
        writeln!(
            out,
            "{},{:.6},{kind},{},{}",
            m.bin,
            m.bin as f64 * bin_hz,
            m.level_db,
            m.bark
        )?;
    }
    Ok(())
}

/// Writes per-bin individual threshold columns (`t<r>` tonal, `n<b>` noise).
pub fn write_thresholds_csv(
    mut out: impl Write,
    thresholds: &IndividualThresholds,
    bin_hz: f64,
    bins: usize,
) -> std::io::Result<()> {
    let mut header = String::from("bin,hz");
    for r in 0..thresholds.tonal.len() {
        header.push_str(&format!(",t{r}"));
    }
    for b in 0..thresholds.noise.len() {
        header.push_str(&format!(",n{b}"));
    }
    writeln!(out, "{header}")?;
    for f in 0..bins {
        let mut row = format!("{f},{:.6}", f as f64 * bin_hz);
        for col in thresholds.tonal.iter().chain(thresholds.noise.iter()) {
            row.push_str(&format!(",{}", col[f]));
        }
        writeln!(out, "{row}")?;
    }
    Ok(())
}

/// Serializes one frame's analysis to a JSON value.
pub fn frame_to_json(psd: &PowerSpectrumDb, frame: &PamFrame) -> serde_json::Value {
    serde_json::json!({
        "bin_hz": psd.bin_hz,
        "norm_offset_db": psd.norm_offset,
        "psd_db": psd.values,
        "maskers": frame.maskers.maskers,
        "tonal_thresholds": frame.thresholds.tonal,
        "noise_thresholds": frame.thresholds.noise,
        "mask_db": frame.mask.m,
        "weights": frame.weights.w,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::spectrum::SpectrumAnalyzer;
    use approx::assert_abs_diff_eq;
    use std::f64::consts::PI;

    fn sinusoid(frame_len: usize, bin: usize, amp: f64) -> Vec<f64> {
        (0..frame_len)
            .map(|t| amp * (2.0 * PI * bin as f64 * t as f64 / frame_len as f64).sin())
            .collect()
    }

    fn psd_of(frame: &[f64], rate: u32) -> PowerSpectrumDb {
        SpectrumAnalyzer::new(frame.len(), rate)
            .unwrap()
            .psd_spl(frame)
            .unwrap()
    }

    #[test]
    fn ath_at_1khz() {
        assert_abs_diff_eq!(ath_db(1000.0), 3.37, epsilon = 0.01);
    }

    #[test]
    fn ath_minimum_between_3_and_4_khz() {
        let ath = absolute_threshold(44100.0 / 512.0, 257).unwrap();
        let argmin = ath
            .q
            .iter()
            .enumerate()
            .min_by(|a, b| a.1.partial_cmp(b.1).unwrap())
            .unwrap()
            .0;
        let hz = argmin as f64 * ath.bin_hz;
        assert!((3000.0..=4000.0).contains(&hz), "minimum at {hz} Hz");
    }

    #[test]
    fn ath_increasing_above_6khz() {
        let ath = absolute_threshold(44100.0 / 512.0, 257).unwrap();
        for f in 0..256 {
            let hz = f as f64 * ath.bin_hz;
            if hz > 6000.0 {
                assert!(ath.q[f + 1] > ath.q[f], "not increasing at {hz} Hz");
            }
        }
    }

    #[test]
    fn ath_dc_clamped() {
        let ath = absolute_threshold(86.13, 257).unwrap();
        assert_eq!(ath.q[0], ath.q[1]);
        assert!(ath.q[0].is_finite());
    }

    #[test]
    fn bark_scale_landmarks() {
        assert!(bark(0.0).abs() < 1e-12);
        assert_abs_diff_eq!(bark(1000.0), 8.51, epsilon = 0.05);
        for hz in (0..22000).step_by(100) {
            assert!(bark(hz as f64 + 100.0) > bark(hz as f64));
        }
    }

    #[test]
    fn spreading_zero_at_origin_and_continuous() {
        let sf = SpreadingFunction::default();
        for level in [20.0, 60.0, 96.0] {
            assert_eq!(sf.evaluate(0.0, level), Some(0.0));
            for knee in [-1.0, 1.0] {
                let below = sf.evaluate(knee - 1e-9, level).unwrap();
                let above = sf.evaluate(knee + 1e-9, level).unwrap();
                assert!((below - above).abs() < 1e-6);
            }
        }
        assert_eq!(sf.evaluate(-3.1, 60.0), None);
        assert_eq!(sf.evaluate(8.0, 60.0), None);
    }

    #[test]
    fn silent_frame_no_maskers() {
        let pam = PamAnalyzer::new(512, 44100).unwrap();
        let psd = psd_of(&vec![0.0; 512], 44100);
        let set = pam.detect_maskers(&psd).unwrap();
        assert!(set.is_empty());
    }

    #[test]
    fn single_sinusoid_one_tonal_masker() {
        let pam = PamAnalyzer::new(512, 44100).unwrap();
        let psd = psd_of(&sinusoid(512, 40, 1.0), 44100);
        let set = pam.detect_maskers(&psd).unwrap();
        let tonal: Vec<_> = set.tonal().collect();
        assert_eq!(tonal.len(), 1);
        assert_eq!(tonal[0].bin, 40);
        assert_eq!(set.len(), 1, "sidelobe-free spectrum adds no noise maskers");
    }

    #[test]
    fn close_tones_decimated_to_one() {
        // Two equal tones ~0.3 Bark apart must both pass prominence (8 bins
        // apart, outside each other's ±6 neighborhood) yet decimate to one.
        let pam = PamAnalyzer::new(512, 44100).unwrap();
        let bin_hz = 44100.0 / 512.0;
        let (k1, k2) = (122usize, 130usize);
        let dz = bark(k2 as f64 * bin_hz) - bark(k1 as f64 * bin_hz);
        assert!((0.25..0.35).contains(&dz), "constructed gap {dz} Bark");
        let frame: Vec<f64> = (0..512)
            .map(|t| {
                let th = 2.0 * PI * t as f64 / 512.0;
                0.5 * (th * k1 as f64).sin() + 0.5 * (th * k2 as f64).sin()
            })
            .collect();
        let psd = psd_of(&frame, 44100);
        let set = pam.detect_maskers(&psd).unwrap();
        let tonal: Vec<_> = set.tonal().collect();
        assert_eq!(tonal.len(), 1, "one of the pair must survive decimation");
        assert!(tonal[0].bin == k1 || tonal[0].bin == k2);
    }

    #[test]
    fn tonal_masker_level_is_three_bin_power_sum() {
        let pam = PamAnalyzer::new(512, 44100).unwrap();
        let psd = psd_of(&sinusoid(512, 40, 1.0), 44100);
        let set = pam.detect_maskers(&psd).unwrap();
        let expect = power_sum_db(&[psd.values[39], psd.values[40], psd.values[41]]);
        assert_abs_diff_eq!(set.maskers[0].level_db, expect, epsilon = 1e-12);
    }

    #[test]
    fn no_maskers_zero_threshold_columns() {
        let pam = PamAnalyzer::new(512, 44100).unwrap();
        let thr = pam.individual_thresholds(&MaskerSet::default());
        assert!(thr.tonal.is_empty() && thr.noise.is_empty());
    }

    #[test]
    fn threshold_at_masker_bin_is_offset_formula() {
        let pam = PamAnalyzer::new(512, 44100).unwrap();
        let psd = psd_of(&sinusoid(512, 64, 1.0), 44100);
        let set = pam.detect_maskers(&psd).unwrap();
        let thr = pam.individual_thresholds(&set);
        let m = &set.maskers[0];
        let expect = m.level_db - 0.275 * m.bark - 6.025;
        assert_abs_diff_eq!(thr.tonal[0][m.bin], expect, epsilon = 1e-12);
    }

    #[test]
    fn threshold_decays_away_from_masker() {
        let pam = PamAnalyzer::new(512, 44100).unwrap();
        let psd = psd_of(&sinusoid(512, 64, 1.0), 44100);
        let set = pam.detect_maskers(&psd).unwrap();
        let thr = pam.individual_thresholds(&set);
        let col = &thr.tonal[0];
        let peak_bin = set.maskers[0].bin;
        for f in 1..257 {
            if col[f] == DB_FLOOR || col[f - 1] == DB_FLOOR {
                continue;
            }
            if f <= peak_bin {
                assert!(col[f] >= col[f - 1], "rising side violated at bin {f}");
            } else {
                assert!(col[f] <= col[f - 1], "falling side violated at bin {f}");
            }
        }
    }

    #[test]
    fn global_mask_no_maskers_equals_ath_exactly() {
        let ath = absolute_threshold(86.13, 257).unwrap();
        let mask = global_mask(&IndividualThresholds::default(), &ath);
        assert_eq!(mask.m, ath.q);
    }

    #[test]
    fn global_mask_equal_power_doubling() {
        let ath = AbsoluteThreshold {
            q: vec![10.0],
            bin_hz: 1.0,
        };
        let thr = IndividualThresholds {
            tonal: vec![vec![10.0]],
            noise: vec![],
        };
        let mask = global_mask(&thr, &ath);
        assert_abs_diff_eq!(mask.m[0], 13.010299956639813, epsilon = 1e-12);
    }

    #[test]
    fn global_mask_monotone_in_maskers() {
        let ath = absolute_threshold(86.13, 64).unwrap();
        let col_a: Vec<f64> = (0..64).map(|f| 30.0 - f as f64 * 0.3).collect();
        let col_b: Vec<f64> = (0..64).map(|f| 12.0 + (f as f64 * 0.31).sin()).collect();
        let one = global_mask(
            &IndividualThresholds {
                tonal: vec![col_a.clone()],
                noise: vec![],
            },
            &ath,
        );
        let two = global_mask(
            &IndividualThresholds {
                tonal: vec![col_a],
                noise: vec![col_b],
            },
            &ath,
        );
        for f in 0..64 {
            assert!(two.m[f] >= one.m[f]);
            assert!(one.m[f] >= ath.q[f]);
        }
    }

    #[test]
    fn global_mask_permutation_invariant() {
        let ath = absolute_threshold(86.13, 32).unwrap();
        let cols: Vec<Vec<f64>> = (0..4)
            .map(|c| (0..32).map(|f| 20.0 + c as f64 * 3.0 - f as f64 * 0.2).collect())
            .collect();
        let fwd = global_mask(
            &IndividualThresholds {
                tonal: cols.clone(),
                noise: vec![],
            },
            &ath,
        );
        let rev = global_mask(
            &IndividualThresholds {
                tonal: cols.into_iter().rev().collect(),
                noise: vec![],
            },
            &ath,
        );
        for f in 0..32 {
            assert_abs_diff_eq!(fwd.m[f], rev.m[f], epsilon = 1e-10);
        }
    }

    #[test]
    fn weights_formula_points() {
        let p = PowerSpectrumDb {
            values: vec![50.0, 60.0, -200.0],
            bin_hz: 1.0,
            norm_offset: 0.0,
        };
        let m = GlobalMask {
            m: vec![50.0, 30.0, 40.0],
        };
        let w = perceptual_weights(&p, &m).unwrap().w;
        assert_abs_diff_eq!(w[0], 2f64.log10(), epsilon = 1e-12); // p == m
        assert_abs_diff_eq!(w[1], 1001f64.log10(), epsilon = 1e-12); // +30 dB
        assert!(w[2] < 1e-15); // deeply masked
    }

    #[test]
    fn weights_monotone() {
        let mk = |p: f64, m: f64| {
            perceptual_weights(
                &PowerSpectrumDb {
                    values: vec![p],
                    bin_hz: 1.0,
                    norm_offset: 0.0,
                },
                &GlobalMask { m: vec![m] },
            )
            .unwrap()
            .w[0]
        };
        assert!(mk(51.0, 40.0) > mk(50.0, 40.0));
        assert!(mk(50.0, 41.0) < mk(50.0, 40.0));
    }

    #[test]
    fn weights_length_mismatch_rejected() {
        let p = PowerSpectrumDb {
            values: vec![0.0; 3],
            bin_hz: 1.0,
            norm_offset: 0.0,
        };
        let m = GlobalMask { m: vec![0.0; 4] };
        assert!(perceptual_weights(&p, &m).is_err());
    }

    #[test]
    fn silent_frame_pipeline_mask_equals_ath() {
        let pam = PamAnalyzer::new(512, 44100).unwrap();
        let psd = psd_of(&vec![0.0; 512], 44100);
        let frame = pam.analyze(&psd).unwrap();
        assert_eq!(frame.mask.m, pam.absolute_threshold().q);
        assert!(frame.weights.w.iter().all(|&w| w < 1e-15));
    }

    #[test]
    fn tonal_rich_frame_maskers_sit_on_local_maxima() {
        // A handful of spaced tones plus a soft noise floor.
        let mut state = 17u64;
        let mut rand = || {
            state = state.wrapping_mul(6364136223846793005).wrapping_add(1);
            (state >> 11) as f64 / (1u64 << 53) as f64 - 0.5
        };
        let frame: Vec<f64> = (0..512)
            .map(|t| {
                let th = 2.0 * PI * t as f64 / 512.0;
                0.4 * (th * 23.0).sin()
                    + 0.3 * (th * 57.0).sin()
                    + 0.25 * (th * 141.0).sin()
                    + 0.002 * rand()
            })
            .collect();
        let pam = PamAnalyzer::new(512, 44100).unwrap();
        let psd = psd_of(&frame, 44100);
        let set = pam.detect_maskers(&psd).unwrap();
        assert!(set.tonal().count() >= 2);
        for m in set.tonal() {
            assert!(psd.values[m.bin] > psd.values[m.bin - 1]);
            assert!(psd.values[m.bin] >= psd.values[m.bin + 1]);
        }
        for f in 0..257 {
            assert!(pam.analyze(&psd).unwrap().mask.m[f] >= pam.absolute_threshold().q[f]);
        }
    }

    #[test]
    fn critical_band_map_covers_range() {
        let map = critical_band_map(86.13, 257);
        assert_eq!(map[0], 0);
        assert!(*map.last().unwrap() >= 20);
        for w in map.windows(2) {
            assert!(w[1] >= w[0]);
        }
    }

    #[test]
    fn csv_and_json_exports_parse() {
        let pam = PamAnalyzer::new(512, 44100).unwrap();
        let psd = psd_of(&sinusoid(512, 40, 1.0), 44100);
        let frame = pam.analyze(&psd).unwrap();

        let mut buf = Vec::new();
        write_mask_csv(&mut buf, &psd, pam.absolute_threshold(), &frame.mask).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("bin,hz,psd_db,ath_db,mask_db"));
        assert_eq!(text.lines().count(), 258);

        let mut buf = Vec::new();
        write_maskers_csv(&mut buf, &frame.maskers, psd.bin_hz).unwrap();
        assert!(String::from_utf8(buf).unwrap().contains("tonal"));

        let mut buf = Vec::new();
        write_thresholds_csv(&mut buf, &frame.thresholds, psd.bin_hz, 257).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap().lines().count(), 258);

        let json = frame_to_json(&psd, &frame);
        assert!(json["mask_db"].as_array().unwrap().len() == 257);
        serde_json::to_string(&json).unwrap();
    }
}
