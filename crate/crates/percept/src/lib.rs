//! Psychoacoustic analysis and perceptually calibrated coding tools.
//!
//! The crate covers five areas:
//!
//! - [`audio`]: clip/frame containers, cross-faded framing, overlap-add, and
//!   mono WAV I/O.
//! - [`spectrum`]: windowed FFT magnitudes, SPL-referenced power spectra, and
//!   the mel filterbank.
//! - [`pam`]: the masking model — absolute threshold of hearing, tonal/noise
//!   masker detection, individual and global masking thresholds, and the
//!   audibility weight vector.
//! - [`loss`]: time-domain, mel, priority-weighted, and noise-modulation loss
//!   terms with exact sample-domain gradients.
//! - [`quant`] and [`codec`]: soft-to-hard scalar quantization with entropy
//!   rate control and Huffman coding, plus a linear residual codec, a greedy
//!   noise-to-mask bit allocator, and a reconstruction optimization harness.

pub mod audio;
pub mod bitstream;
pub mod codec;
pub mod error;
pub mod huffman;
pub mod loss;
pub mod pam;
pub mod quant;
pub mod spectrum;

pub use error::{Error, Result};
