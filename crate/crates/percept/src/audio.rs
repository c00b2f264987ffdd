//! Audio containers, framing with raised-cosine cross-fades, overlap-add
//! reconstruction, and mono WAV (RIFF) reading/writing.

use std::f64::consts::PI;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};

/// A mono time-domain signal with its sample rate.
#[derive(Debug, Clone, PartialEq)]
pub struct AudioClip {
    pub samples: Vec<f64>,
    pub sample_rate: u32,
}

impl AudioClip {
    /// Validates that the rate is positive and every sample is finite.
    pub fn new(samples: Vec<f64>, sample_rate: u32) -> Result<Self> {
        if sample_rate == 0 {
            return Err(Error::Invalid("sample rate must be positive".into()));
        }
        if let Some(i) = samples.iter().position(|s| !s.is_finite()) {
            return Err(Error::Invalid(format!(
                "sample {i} is not finite ({})",
                samples[i]
            )));
        }
        Ok(Self {
            samples,
            sample_rate,
        })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Clip duration in seconds.
    pub fn seconds(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }
}

/// A fixed-length analysis frame cut from a clip.
///
/// `valid_len` marks how many leading samples came from the source clip;
/// a zero-padded trailing frame has `valid_len < samples.len()`.
#[derive(Debug, Clone, PartialEq)]
pub struct Frame {
    pub samples: Vec<f64>,
    pub start_index: usize,
    pub valid_len: usize,
}

impl Frame {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}

/// Raised-cosine fade-in curve of the given width; `fade_in[j] + fade_in[w-1-j] == 1`.
fn raised_cosine_fade(width: usize) -> Vec<f64> {
    (0..width)
        .map(|j| {
            let x = PI * (j as f64 + 0.5) / (2.0 * width as f64);
            x.sin() * x.sin()
        })
        .collect()
}

/// Cuts `clip` into frames of `frame_len` samples spaced `frame_len - overlap`
/// apart, cross-fading each frame's leading and trailing `overlap` samples with
/// a raised cosine so that overlapping frames sum back to the original signal.
///
/// A trailing remainder shorter than a hop is zero-padded to `frame_len` with
/// the true sample count recorded in [`Frame::valid_len`]. A clip shorter than
/// one frame is an error.
pub fn frame_signal(clip: &AudioClip, frame_len: usize, overlap: usize) -> Result<Vec<Frame>> {
    if frame_len == 0 || overlap >= frame_len {
        return Err(Error::Invalid(format!(
            "need frame_len > overlap >= 0, got frame_len={frame_len} overlap={overlap}"
        )));
    }
    let n = clip.len();
    if n < frame_len {
        return Err(Error::Invalid(format!(
            "clip of {n} samples is shorter than one {frame_len}-sample frame"
        )));
    }
    let hop = frame_len - overlap;
    // Smallest frame count whose coverage reaches the end of the clip.
    let frames = if (n - frame_len) % hop == 0 {
        (n - frame_len) / hop + 1
    } else {
        (n - frame_len) / hop + 2
    };

    let fade_in = raised_cosine_fade(overlap);
    let mut out = Vec::with_capacity(frames);
    for k in 0..frames {
        let start = k * hop;
        let valid_len = frame_len.min(n.saturating_sub(start));
        let mut samples = vec![0.0; frame_len];
        samples[..valid_len].copy_from_slice(&clip.samples[start..start + valid_len]);
        for (j, g) in fade_in.iter().enumerate() {
            samples[j] *= g;
            samples[frame_len - 1 - j] *= g;
        }
        out.push(Frame {
            samples,
            start_index: start,
            valid_len,
        });
    }
    Ok(out)
}

/// Reassembles frames produced by [`frame_signal`].
///
/// Frames are summed at their recorded offsets and divided by the accumulated
/// fade envelope, which is exactly 1 wherever fades overlap and compensates the
/// one-sided fades at the clip edges, so the round trip reproduces the input.
pub fn overlap_add(frames: &[Frame], overlap: usize, sample_rate: u32) -> Result<AudioClip> {
    let first = frames
        .first()
        .ok_or_else(|| Error::Invalid("no frames to overlap-add".into()))?;
    let frame_len = first.len();
    if overlap >= frame_len {
        return Err(Error::Invalid(format!(
            "overlap {overlap} not smaller than frame length {frame_len}"
        )));
    }
    let mut total = 0usize;
    for (i, f) in frames.iter().enumerate() {
        if f.len() != frame_len {
            return Err(Error::Shape(format!(
                "frame {i} has length {}, expected {frame_len}",
                f.len()
            )));
        }
        total = total.max(f.start_index + f.valid_len);
    }

    let fade_in = raised_cosine_fade(overlap);
    let mut window = vec![1.0; frame_len];
    for (j, g) in fade_in.iter().enumerate() {
        window[j] = *g;
        window[frame_len - 1 - j] = *g;
    }

    let mut sum = vec![0.0; total];
    let mut envelope = vec![0.0; total];
    for f in frames {
        for j in 0..f.valid_len {
            sum[f.start_index + j] += f.samples[j];
            envelope[f.start_index + j] += window[j];
        }
    }
    for (s, e) in sum.iter_mut().zip(&envelope) {
        if *e > 0.0 {
            *s /= *e;
        }
    }
    AudioClip::new(sum, sample_rate)
}

const RIFF_FORMAT_PCM: u16 = 1;
const RIFF_FORMAT_FLOAT: u16 = 3;

/// Sample encodings supported for WAV output.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WavFormat {
    Pcm16,
    Float32,
}

fn read_exact_or(r: &mut impl Read, buf: &mut [u8], what: &str) -> Result<()> {
    r.read_exact(buf)
        .map_err(|_| Error::Wav(format!("truncated file while reading {what}")))
}

fn take_u16(b: &[u8], off: usize) -> u16 {
    u16::from_le_bytes([b[off], b[off + 1]])
}

fn take_u32(b: &[u8], off: usize) -> u32 {
    u32::from_le_bytes([b[off], b[off + 1], b[off + 2], b[off + 3]])
}

/// Reads a mono PCM16 or IEEE float32 WAV file, normalizing amplitudes to
/// [-1, 1]. Multichannel input and other codecs are rejected.
pub fn read_wav(path: impl AsRef<Path>) -> Result<AudioClip> {
    let path = path.as_ref();
    let mut r = BufReader::new(
        File::open(path).map_err(|e| Error::Wav(format!("{}: {e}", path.display())))?,
    );

    let mut hdr = [0u8; 12];
    read_exact_or(&mut r, &mut hdr, "RIFF header")?;
    if &hdr[0..4] != b"RIFF" || &hdr[8..12] != b"WAVE" {
        return Err(Error::Wav(format!(
            "{}: not a RIFF/WAVE file",
            path.display()
        )));
    }

    let mut format: Option<(u16, u32, u16, u16)> = None; // (codec, rate, channels, bits)
    let mut data: Option<Vec<u8>> = None;
    loop {
        let mut chunk_hdr = [0u8; 8];
        match r.read_exact(&mut chunk_hdr) {
            Ok(()) => {}
            Err(_) => break,
        }
        let id = [chunk_hdr[0], chunk_hdr[1], chunk_hdr[2], chunk_hdr[3]];
        let size = take_u32(&chunk_hdr, 4) as usize;
        let mut body = vec![0u8; size];
        read_exact_or(&mut r, &mut body, "chunk body")?;
        if size % 2 == 1 {
            let mut pad = [0u8; 1];
            let _ = r.read_exact(&mut pad);
        }
        match &id {
            b"fmt " => {
                if body.len() < 16 {
                    return Err(Error::Wav("fmt chunk shorter than 16 bytes".into()));
                }
                format = Some((
                    take_u16(&body, 0),
                    take_u32(&body, 4),
                    take_u16(&body, 2),
                    take_u16(&body, 14),
                ));
            }
            b"data" => data = Some(body),
            _ => {}
        }
        if format.is_some() && data.is_some() {
            break;
        }
    }

    let (codec, rate, channels, bits) =
        format.ok_or_else(|| Error::Wav("missing fmt chunk".into()))?;
    let data = data.ok_or_else(|| Error::Wav("missing data chunk".into()))?;
    if channels != 1 {
        return Err(Error::Wav(format!(
            "{channels}-channel audio is unsupported; supply mono input"
        )));
    }

    let samples = match (codec, bits) {
        (RIFF_FORMAT_PCM, 16) => data
            .chunks_exact(2)
            .map(|c| i16::from_le_bytes([c[0], c[1]]) as f64 / 32768.0)
            .collect(),
        (RIFF_FORMAT_FLOAT, 32) => data
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
            .collect(),
        _ => {
            return Err(Error::Wav(format!(
                "unsupported codec: format tag {codec}, {bits}-bit"
            )))
        }
    };
    AudioClip::new(samples, rate)
}

/// Writes a mono WAV file in the requested sample format.
///
/// PCM16 samples are scaled by 32768 and clamped to the i16 range, so a
/// write/read round trip is within one least significant bit.
pub fn write_wav(clip: &AudioClip, path: impl AsRef<Path>, format: WavFormat) -> Result<()> {
    let path = path.as_ref();
    let mut w = BufWriter::new(
        File::create(path).map_err(|e| Error::Wav(format!("{}: {e}", path.display())))?,
    );

    let (codec, bits): (u16, u16) = match format {
        WavFormat::Pcm16 => (RIFF_FORMAT_PCM, 16),
        WavFormat::Float32 => (RIFF_FORMAT_FLOAT, 32),
    };
    let bytes_per_sample = (bits / 8) as u32;
    let data_len = clip.len() as u32 * bytes_per_sample;
    let byte_rate = clip.sample_rate * bytes_per_sample;

    w.write_all(b"RIFF")?;
    w.write_all(&(36 + data_len).to_le_bytes())?;
    w.write_all(b"WAVE")?;
    w.write_all(b"fmt ")?;
    w.write_all(&16u32.to_le_bytes())?;
    w.write_all(&codec.to_le_bytes())?;
    w.write_all(&1u16.to_le_bytes())?;
    w.write_all(&clip.sample_rate.to_le_bytes())?;
    w.write_all(&byte_rate.to_le_bytes())?;
    w.write_all(&(bytes_per_sample as u16).to_le_bytes())?;
    w.write_all(&bits.to_le_bytes())?;
    w.write_all(b"data")?;
    w.write_all(&data_len.to_le_bytes())?;
    match format {
        WavFormat::Pcm16 => {
            for &s in &clip.samples {
                let v = (s * 32768.0).round().clamp(-32768.0, 32767.0) as i16;
                w.write_all(&v.to_le_bytes())?;
            }
        }
        WavFormat::Float32 => {
            for &s in &clip.samples {
                w.write_all(&(s as f32).to_le_bytes())?;
            }
        }
    }
    w.flush()?;
    Ok(())
}
