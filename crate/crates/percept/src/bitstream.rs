//! Serialized bitstream: a header carrying the frame geometry, per-module
//! kernel tables and Huffman code lengths, followed by the Huffman-coded
//! kernel indices for every frame in cascade order. Round trips are
//! bit-exact.

use crate::error::{Error, Result};
use crate::huffman::{BitReader, BitWriter, HuffmanTable};

const MAGIC: [u8; 4] = *b"PCBS";
const VERSION: u16 = 1;

/// Frame geometry a stream was produced under.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StreamGeometry {
    pub sample_rate: u32,
    pub frame_len: u32,
    pub overlap: u32,
    pub code_len: u32,
    /// Original clip length in samples, for trimming after overlap-add.
    pub clip_len: u64,
}

/// A parsed stream: geometry, per-module kernel values, and the kernel
/// indices as `indices[frame][module][code]`.
#[derive(Debug, Clone)]
pub struct DecodedStream {
    pub geometry: StreamGeometry,
    pub kernels: Vec<Vec<f32>>,
    pub indices: Vec<Vec<Vec<usize>>>,
}

/// Serializes kernel indices produced by a hard-quantizing encoder.
///
/// `kernels[m]` holds module m's codebook (stored as f32); `frames[f][m]` the
/// indices for frame f, module m, each of length `code_len`. Huffman tables
/// are built per module from the whole clip's empirical frequencies.
pub fn write_stream(
    geometry: &StreamGeometry,
    kernels: &[Vec<f64>],
    frames: &[Vec<Vec<usize>>],
) -> Result<Vec<u8>> {
    let modules = kernels.len();
    if modules == 0 {
        return Err(Error::Invalid("stream needs at least one module".into()));
    }
    let mut freqs: Vec<Vec<u64>> = kernels.iter().map(|k| vec![0u64; k.len()]).collect();
    for (fi, frame) in frames.iter().enumerate() {
        if frame.len() != modules {
            return Err(Error::Shape(format!(
                "frame {fi} has {} module code vectors, expected {modules}",
                frame.len()
            )));
        }
        for (m, codes) in frame.iter().enumerate() {
            if codes.len() != geometry.code_len as usize {
                return Err(Error::Shape(format!(
                    "frame {fi} module {m} has {} indices, expected {}",
                    codes.len(),
                    geometry.code_len
                )));
            }
            for &i in codes {
                if i >= kernels[m].len() {
                    return Err(Error::Invalid(format!(
                        "index {i} out of range for module {m} (K={})",
                        kernels[m].len()
                    )));
                }
                freqs[m][i] += 1;
            }
        }
    }

    let tables: Vec<HuffmanTable> = freqs
        .iter()
        .map(|f| HuffmanTable::from_frequencies(f))
        .collect::<Result<_>>()?;

    let mut out = Vec::new();
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&geometry.sample_rate.to_le_bytes());
    out.extend_from_slice(&geometry.frame_len.to_le_bytes());
    out.extend_from_slice(&geometry.overlap.to_le_bytes());
    out.extend_from_slice(&geometry.code_len.to_le_bytes());
    out.extend_from_slice(&(modules as u32).to_le_bytes());
    out.extend_from_slice(&(frames.len() as u32).to_le_bytes());
    out.extend_from_slice(&geometry.clip_len.to_le_bytes());
    for (m, k) in kernels.iter().enumerate() {
        out.extend_from_slice(&(k.len() as u32).to_le_bytes());
        for &v in k {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
        out.extend_from_slice(tables[m].lengths());
    }

    let mut writer = BitWriter::new();
    for frame in frames {
        for (m, codes) in frame.iter().enumerate() {
            tables[m].encode_into(codes, &mut writer)?;
        }
    }
    let (payload, bit_len) = writer.finish();
    out.extend_from_slice(&bit_len.to_le_bytes());
    out.extend_from_slice(&payload);
    Ok(out)
}

struct ByteReader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> ByteReader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Stream(format!(
                "truncated stream: wanted {n} bytes at offset {}",
                self.pos
            )));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f32(&mut self) -> Result<f32> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

/// Parses and entropy-decodes a stream produced by [`write_stream`].
pub fn read_stream(bytes: &[u8]) -> Result<DecodedStream> {
    let mut r = ByteReader { bytes, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err(Error::Stream("not a percept bitstream (bad magic)".into()));
    }
    let version = r.u16()?;
    if version != VERSION {
        return Err(Error::Stream(format!(
            "bitstream version {version} is not supported (expected {VERSION})"
        )));
    }
    let sample_rate = r.u32()?;
    let frame_len = r.u32()?;
    let overlap = r.u32()?;
    let code_len = r.u32()?;
    let modules = r.u32()? as usize;
    let frame_count = r.u32()? as usize;
    let clip_len = r.u64()?;

    let mut kernels = Vec::with_capacity(modules);
    let mut tables = Vec::with_capacity(modules);
    for _ in 0..modules {
        let k = r.u32()? as usize;
        let mut kv = Vec::with_capacity(k);
        for _ in 0..k {
            kv.push(r.f32()?);
        }
        let lengths = r.take(k)?.to_vec();
        tables.push(HuffmanTable::from_lengths(lengths)?);
        kernels.push(kv);
    }

    let bit_len = r.u64()?;
    let payload = &bytes[r.pos..];
    let mut bits = BitReader::new(payload, bit_len)?;
    let mut indices = Vec::with_capacity(frame_count);
    for _ in 0..frame_count {
        let mut frame = Vec::with_capacity(modules);
        for table in &tables {
            frame.push(table.decode_from(&mut bits, code_len as usize)?);
        }
        indices.push(frame);
    }

    Ok(DecodedStream {
        geometry: StreamGeometry {
            sample_rate,
            frame_len,
            overlap,
            code_len,
            clip_len,
        },
        kernels,
        indices,
    })
}
