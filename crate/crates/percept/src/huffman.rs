//! Canonical Huffman coding over kernel indices, with MSB-first bit packing.
//! Tables serialize as one code length per symbol and rebuild canonically on
//! the decode side.

use std::collections::BinaryHeap;

use crate::error::{Error, Result};

/// MSB-first bit accumulator.
#[derive(Debug, Default)]
pub struct BitWriter {
    bytes: Vec<u8>,
    bit_len: u64,
}

impl BitWriter {
    pub fn new() -> Self {
        Self::default()
    }

    /// Appends the low `len` bits of `code`, most significant first.
    pub fn push_bits(&mut self, code: u64, len: u8) {
        for i in (0..len).rev() {
            let bit = (code >> i) & 1;
            let slot = (self.bit_len % 8) as u8;
            if slot == 0 {
                self.bytes.push(0);
            }
            if bit == 1 {
                *self.bytes.last_mut().unwrap() |= 1 << (7 - slot);
            }
            self.bit_len += 1;
        }
    }

    pub fn bit_len(&self) -> u64 {
        self.bit_len
    }

    /// Zero-padded bytes plus the exact bit count.
    pub fn finish(self) -> (Vec<u8>, u64) {
        (self.bytes, self.bit_len)
    }
}

/// MSB-first bit cursor over a byte slice.
pub struct BitReader<'a> {
    bytes: &'a [u8],
    bit_len: u64,
    pos: u64,
}

impl<'a> BitReader<'a> {
    pub fn new(bytes: &'a [u8], bit_len: u64) -> Result<Self> {
        if bit_len > bytes.len() as u64 * 8 {
            return Err(Error::Stream(format!(
                "bit length {bit_len} exceeds the {} available bits",
                bytes.len() * 8
            )));
        }
        Ok(Self {
            bytes,
            bit_len,
            pos: 0,
        })
    }

    pub fn read_bit(&mut self) -> Result<u8> {
        if self.pos >= self.bit_len {
            return Err(Error::Stream("bitstream exhausted".into()));
        }
        let byte = self.bytes[(self.pos / 8) as usize];
        let bit = (byte >> (7 - (self.pos % 8))) & 1;
        self.pos += 1;
        Ok(bit)
    }

    pub fn remaining(&self) -> u64 {
        self.bit_len - self.pos
    }
}

/// Canonical Huffman table over `K` symbols. Unused symbols carry length 0.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HuffmanTable {
    lengths: Vec<u8>,
    codes: Vec<u64>,
}

impl HuffmanTable {
    /// Builds optimal code lengths from frequencies, then assigns canonical
    /// codes (sorted by length, then symbol). A single used symbol gets a
    /// one-bit code.
    pub fn from_frequencies(freqs: &[u64]) -> Result<Self> {
        if freqs.is_empty() {
            return Err(Error::Invalid("empty symbol alphabet".into()));
        }
        let used: Vec<usize> = (0..freqs.len()).filter(|&s| freqs[s] > 0).collect();
        if used.is_empty() {
            return Err(Error::Invalid("all symbol frequencies are zero".into()));
        }
        let mut lengths = vec![0u8; freqs.len()];
        if used.len() == 1 {
            lengths[used[0]] = 1;
            return Self::from_lengths(lengths);
        }

        // Standard heap construction; ties broken by insertion order for
        // determinism.
        #[derive(PartialEq, Eq)]
        struct Node {
            freq: u64,
            order: usize,
            id: usize,
        }
        impl Ord for Node {
            fn cmp(&self, other: &Self) -> std::cmp::Ordering {
                other
                    .freq
                    .cmp(&self.freq)
                    .then(other.order.cmp(&self.order))
            }
        }
        impl PartialOrd for Node {
            fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
                Some(self.cmp(other))
            }
        }

        let mut heap = BinaryHeap::new();
        // children[id] = (left, right); leaves are symbol indices.
        let mut children: Vec<(usize, usize)> = Vec::new();
        let leaf_count = used.len();
        for (order, &s) in used.iter().enumerate() {
            heap.push(Node {
                freq: freqs[s],
                order,
                id: s,
            });
        }
        let mut next_order = leaf_count;
        let mut next_id = freqs.len();
        while heap.len() > 1 {
            let a = heap.pop().unwrap();
            let b = heap.pop().unwrap();
            children.push((a.id, b.id));
            heap.push(Node {
                freq: a.freq + b.freq,
                order: next_order,
                id: next_id,
            });
            next_order += 1;
            next_id += 1;
        }
        let root = heap.pop().unwrap().id;
        // Depth-first walk assigning depths as code lengths.
        let mut stack = vec![(root, 0u8)];
        while let Some((id, depth)) = stack.pop() {
            if id < freqs.len() {
                lengths[id] = depth;
            } else {
                let (l, r) = children[id - freqs.len()];
                stack.push((l, depth + 1));
                stack.push((r, depth + 1));
            }
        }
        Self::from_lengths(lengths)
    }

    /// Rebuilds the canonical codes from stored lengths.
    pub fn from_lengths(lengths: Vec<u8>) -> Result<Self> {
        if lengths.is_empty() {
            return Err(Error::Invalid("empty symbol alphabet".into()));
        }
        if lengths.iter().all(|&l| l == 0) {
            return Err(Error::Stream("huffman table has no coded symbols".into()));
        }
        let max_len = *lengths.iter().max().unwrap();
        if max_len > 63 {
            return Err(Error::Stream(format!(
                "huffman code length {max_len} exceeds 63 bits"
            )));
        }
        // Kraft check guards against corrupt serialized tables.
        let kraft: f64 = lengths
            .iter()
            .filter(|&&l| l > 0)
            .map(|&l| 2f64.powi(-(l as i32)))
            .sum();
        if kraft > 1.0 + 1e-12 {
            return Err(Error::Stream(format!(
                "huffman lengths violate the Kraft inequality (sum {kraft})"
            )));
        }
        let mut symbols: Vec<usize> = (0..lengths.len()).filter(|&s| lengths[s] > 0).collect();
        symbols.sort_by_key(|&s| (lengths[s], s));
        let mut codes = vec![0u64; lengths.len()];
        let mut code = 0u64;
        let mut prev_len = 0u8;
        for &s in &symbols {
            code <<= lengths[s] - prev_len;
            codes[s] = code;
            code += 1;
            prev_len = lengths[s];
        }
        Ok(Self { lengths, codes })
    }

    pub fn symbol_count(&self) -> usize {
        self.lengths.len()
    }

    pub fn lengths(&self) -> &[u8] {
        &self.lengths
    }

    pub fn code(&self, symbol: usize) -> Option<(u64, u8)> {
        let len = *self.lengths.get(symbol)?;
        if len == 0 {
            return None;
        }
        Some((self.codes[symbol], len))
    }

    /// Mean code length in bits under the given frequencies.
    pub fn average_length(&self, freqs: &[u64]) -> f64 {
        let total: u64 = freqs.iter().sum();
        if total == 0 {
            return 0.0;
        }
        freqs
            .iter()
            .zip(&self.lengths)
            .map(|(&f, &l)| f as f64 * l as f64)
            .sum::<f64>()
            / total as f64
    }

    /// `sum 2^-len` over coded symbols; exactly 1 for a full binary tree.
    pub fn kraft_sum(&self) -> f64 {
        self.lengths
            .iter()
            .filter(|&&l| l > 0)
            .map(|&l| 2f64.powi(-(l as i32)))
            .sum()
    }

    pub fn encode_into(&self, indices: &[usize], writer: &mut BitWriter) -> Result<()> {
        for &s in indices {
            let (code, len) = self.code(s).ok_or_else(|| {
                Error::Invalid(format!("symbol {s} has no code in this table"))
            })?;
            writer.push_bits(code, len);
        }
        Ok(())
    }

    /// Encodes a symbol sequence; returns the packed bytes and exact bit count.
    pub fn encode(&self, indices: &[usize]) -> Result<(Vec<u8>, u64)> {
        let mut w = BitWriter::new();
        self.encode_into(indices, &mut w)?;
        Ok(w.finish())
    }

    pub fn decode_from(&self, reader: &mut BitReader, count: usize) -> Result<Vec<usize>> {
        // Canonical decode: extend the read prefix bit by bit; a prefix of
        // length l matches when it falls inside [first_code[l],
        // first_code[l] + bucket[l].len()).
        let max_len = *self.lengths.iter().max().unwrap();
        let mut by_length: Vec<Vec<usize>> = vec![Vec::new(); max_len as usize + 1];
        let mut symbols: Vec<usize> =
            (0..self.lengths.len()).filter(|&s| self.lengths[s] > 0).collect();
        symbols.sort_by_key(|&s| (self.lengths[s], s));
        for &s in &symbols {
            by_length[self.lengths[s] as usize].push(s);
        }
        let first_code: Vec<u64> = by_length
            .iter()
            .map(|bucket| bucket.first().map(|&s| self.codes[s]).unwrap_or(0))
            .collect();

        let mut out = Vec::with_capacity(count);
        for _ in 0..count {
            let mut code = 0u64;
            let mut len = 0u8;
            loop {
                code = (code << 1) | reader.read_bit()? as u64;
                len += 1;
                if len > max_len {
                    return Err(Error::Stream("invalid huffman prefix".into()));
                }
                let bucket = &by_length[len as usize];
                if !bucket.is_empty()
                    && code >= first_code[len as usize]
                    && ((code - first_code[len as usize]) as usize) < bucket.len()
                {
                    out.push(bucket[(code - first_code[len as usize]) as usize]);
                    break;
                }
            }
        }
        Ok(out)
    }

    /// Decodes exactly `count` symbols from a packed buffer.
    pub fn decode(&self, bytes: &[u8], bit_len: u64, count: usize) -> Result<Vec<usize>> {
        let mut r = BitReader::new(bytes, bit_len)?;
        self.decode_from(&mut r, count)
    }
}
