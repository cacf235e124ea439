//! Entropy-coded file format for quantized codes.
//!
//! A stream is a fixed header (geometry, codebook sizes, the content hash of
//! the model that produced it, and one canonical Huffman table per source)
//! followed by the payload: for every frame, for every source, P Huffman
//! codes, padded to a byte boundary per (frame, source) block. Canonical
//! tables serialize as code lengths only; bit patterns are reconstructed on
//! decode. All integers are little-endian.

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use ndarray::Array2;
use std::io::Read;
use thiserror::Error;

use crate::quantizer::UsageHistogram;

pub const MAGIC: &[u8; 4] = b"SANC";
pub const FORMAT_VERSION: u16 = 1;

#[derive(Error, Debug)]
pub enum BitstreamError {
    #[error("bad magic bytes (not a codec stream)")]
    BadMagic,
    #[error("unsupported format version {0}")]
    UnsupportedVersion(u16),
    #[error("stream is truncated")]
    Truncated,
    #[error("invalid Huffman code in payload")]
    InvalidCode,
    #[error("model hash mismatch: stream was produced by a different checkpoint")]
    HashMismatch,
    #[error("histogram has no mass; cannot build a code")]
    EmptyHistogram,
    #[error("Huffman code length {0} exceeds 64 bits")]
    CodeTooLong(usize),
    #[error("symbol index {index} out of range for {symbols} symbols")]
    IndexOutOfRange { index: usize, symbols: usize },
    #[error("invalid header field: {0}")]
    BadHeader(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

/// Canonical prefix code: a length and bit pattern per symbol. Patterns are
/// read and written most-significant bit first.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HuffmanTable {
    pub lengths: Vec<u8>,
    pub codes: Vec<u64>,
}

/// Build a canonical Huffman table from a usage histogram. Zero-frequency
/// symbols still receive (maximum-length) codes so any index can be encoded;
/// ties merge the lowest-numbered nodes first, so tables are reproducible.
pub fn build_huffman(hist: &UsageHistogram) -> Result<HuffmanTable, BitstreamError> {
    let q = hist.q.as_slice().expect("contiguous");
    build_huffman_from_freqs(q)
}

pub(crate) fn build_huffman_from_freqs(q: &[f64]) -> Result<HuffmanTable, BitstreamError> {
    let n = q.len();
    let min_positive = q.iter().copied().filter(|&v| v > 0.0).fold(f64::INFINITY, f64::min);
    if !min_positive.is_finite() {
        return Err(BitstreamError::EmptyHistogram);
    }
    if n == 1 {
        return Ok(HuffmanTable {
            lengths: vec![1],
            codes: vec![0],
        });
    }
    // Zero-frequency symbols get a weight far below any real one; they sink
    // to the bottom of the tree and take the longest codes.
    let floor = min_positive * 1e-9;
    let weights: Vec<f64> = q.iter().map(|&v| if v > 0.0 { v } else { floor }).collect();

    // Huffman tree over (weight, node id); lowest id wins ties.
    #[derive(Clone, Copy)]
    struct Node {
        weight: f64,
        id: usize,
        left: Option<usize>,
        right: Option<usize>,
    }
    let mut nodes: Vec<Node> = weights
        .iter()
        .enumerate()
        .map(|(i, &w)| Node {
            weight: w,
            id: i,
            left: None,
            right: None,
        })
        .collect();
    let mut active: Vec<usize> = (0..n).collect();
    while active.len() > 1 {
        // two smallest by (weight, id)
        let key = |i: usize| (nodes[i].weight, nodes[i].id);
        let mut first = active[0];
        for &c in &active[1..] {
            if (key(c).0, key(c).1) < (key(first).0, key(first).1) {
                first = c;
            }
        }
        let mut second = usize::MAX;
        for &c in &active {
            if c == first {
                continue;
            }
            if second == usize::MAX || (key(c).0, key(c).1) < (key(second).0, key(second).1) {
                second = c;
            }
        }
        let id = nodes.len();
        nodes.push(Node {
            weight: nodes[first].weight + nodes[second].weight,
            id,
            left: Some(first),
            right: Some(second),
        });
        active.retain(|&c| c != first && c != second);
        active.push(id);
    }

    // leaf depths
    let mut lengths = vec![0u8; n];
    let mut stack = vec![(active[0], 0usize)];
    while let Some((i, depth)) = stack.pop() {
        match (nodes[i].left, nodes[i].right) {
            (Some(l), Some(r)) => {
                stack.push((l, depth + 1));
                stack.push((r, depth + 1));
            }
            _ => {
                if depth > 64 {
                    return Err(BitstreamError::CodeTooLong(depth));
                }
                lengths[i] = depth.max(1) as u8;
            }
        }
    }
    canonical_from_lengths(lengths)
}

/// Assign canonical bit patterns to a set of code lengths: symbols sorted by
/// (length, index) receive consecutive codes.
pub(crate) fn canonical_from_lengths(lengths: Vec<u8>) -> Result<HuffmanTable, BitstreamError> {
    let mut order: Vec<usize> = (0..lengths.len()).collect();
    order.sort_by_key(|&i| (lengths[i], i));
    let mut codes = vec![0u64; lengths.len()];
    let mut code = 0u64;
    let mut prev_len = 0u8;
    for &sym in &order {
        let len = lengths[sym];
        if len == 0 {
            return Err(BitstreamError::BadHeader("zero code length".into()));
        }
        if len > 64 {
            return Err(BitstreamError::CodeTooLong(len as usize));
        }
        code <<= len - prev_len;
        codes[sym] = code;
        code += 1;
        prev_len = len;
    }
    Ok(HuffmanTable { lengths, codes })
}

impl HuffmanTable {
    /// Kraft sum of the code lengths; at most 1 for a prefix-free code.
    pub fn kraft_sum(&self) -> f64 {
        self.lengths.iter().map(|&l| 2f64.powi(-(l as i32))).sum()
    }

    /// Expected code length in bits under a usage histogram.
    pub fn expected_length(&self, hist: &UsageHistogram) -> f64 {
        self.lengths
            .iter()
            .zip(hist.q.iter())
            .map(|(&l, &q)| q * l as f64)
            .sum()
    }
}

struct BitWriter {
    bytes: Vec<u8>,
    bit: u8,
}

impl BitWriter {
    fn new() -> Self {
        Self {
            bytes: Vec::new(),
            bit: 0,
        }
    }

    fn write_code(&mut self, code: u64, len: u8) {
        for i in (0..len).rev() {
            let b = ((code >> i) & 1) as u8;
            if self.bit == 0 {
                self.bytes.push(0);
            }
            let last = self.bytes.last_mut().expect("pushed");
            *last |= b << (7 - self.bit);
            self.bit = (self.bit + 1) % 8;
        }
    }

    fn align(&mut self) {
        self.bit = 0;
    }
}

struct BitReader<'a> {
    bytes: &'a [u8],
    byte: usize,
    bit: u8,
}

impl<'a> BitReader<'a> {
    fn new(bytes: &'a [u8]) -> Self {
        Self { bytes, byte: 0, bit: 0 }
    }

    fn read_bit(&mut self) -> Result<u64, BitstreamError> {
        if self.byte >= self.bytes.len() {
            return Err(BitstreamError::Truncated);
        }
        let b = (self.bytes[self.byte] >> (7 - self.bit)) & 1;
        self.bit += 1;
        if self.bit == 8 {
            self.bit = 0;
            self.byte += 1;
        }
        Ok(b as u64)
    }

    fn align(&mut self) {
        if self.bit != 0 {
            self.bit = 0;
            self.byte += 1;
        }
    }
}

/// Canonical decoding tables: first code and symbol offset per length.
struct CanonicalDecoder {
    sorted_symbols: Vec<usize>,
    first_code: [u64; 65],
    count: [u64; 65],
    offset: [usize; 65],
    max_len: u8,
}

impl CanonicalDecoder {
    fn new(table: &HuffmanTable) -> Self {
        let mut order: Vec<usize> = (0..table.lengths.len()).collect();
        order.sort_by_key(|&i| (table.lengths[i], i));
        let mut count = [0u64; 65];
        for &l in &table.lengths {
            count[l as usize] += 1;
        }
        let mut first_code = [0u64; 65];
        let mut offset = [0usize; 65];
        let mut code = 0u64;
        let mut off = 0usize;
        let max_len = table.lengths.iter().copied().max().unwrap_or(0);
        for len in 1..=max_len as usize {
            code <<= 1;
            first_code[len] = code;
            offset[len] = off;
            code += count[len];
            off += count[len] as usize;
        }
        Self {
            sorted_symbols: order,
            first_code,
            count,
            offset,
            max_len,
        }
    }

    fn decode(&self, reader: &mut BitReader<'_>) -> Result<usize, BitstreamError> {
        let mut code = 0u64;
        for len in 1..=self.max_len as usize {
            code = (code << 1) | reader.read_bit()?;
            if self.count[len] > 0 {
                let rel = code.wrapping_sub(self.first_code[len]);
                if code >= self.first_code[len] && rel < self.count[len] {
                    return Ok(self.sorted_symbols[self.offset[len] + rel as usize]);
                }
            }
        }
        Err(BitstreamError::InvalidCode)
    }
}

/// Everything a decoder needs besides the model checkpoint. `model_hash`
/// ties the stream to the checkpoint whose codebooks produced the indices.
#[derive(Debug, Clone, PartialEq)]
pub struct CodecHeader {
    pub version: u16,
    pub sample_rate: u32,
    pub frame_size: u32,
    pub hop: u32,
    pub num_streams: u8,
    pub vq_dim: u8,
    pub code_length: u32,
    pub codebook_size: u32,
    pub model_hash: [u8; 32],
    pub frame_count: u32,
    pub original_length: u64,
    pub tables: Vec<HuffmanTable>,
}

impl CodecHeader {
    pub fn validate(&self) -> Result<(), BitstreamError> {
        if self.version != FORMAT_VERSION {
            return Err(BitstreamError::UnsupportedVersion(self.version));
        }
        if self.num_streams == 0 || self.code_length == 0 || self.codebook_size == 0 {
            return Err(BitstreamError::BadHeader("zero dimension".into()));
        }
        if self.frame_size == 0 || self.hop == 0 || self.hop >= self.frame_size {
            return Err(BitstreamError::BadHeader(format!(
                "hop {} must be in 1..frame_size {}",
                self.hop, self.frame_size
            )));
        }
        if self.tables.len() != self.num_streams as usize {
            return Err(BitstreamError::BadHeader(format!(
                "{} tables for {} streams",
                self.tables.len(),
                self.num_streams
            )));
        }
        for t in &self.tables {
            if t.lengths.len() != self.codebook_size as usize {
                return Err(BitstreamError::BadHeader("table size != codebook size".into()));
            }
        }
        Ok(())
    }

    pub fn verify_hash(&self, expected: &[u8; 32]) -> Result<(), BitstreamError> {
        if &self.model_hash != expected {
            return Err(BitstreamError::HashMismatch);
        }
        Ok(())
    }

    fn write(&self, out: &mut Vec<u8>) -> Result<(), BitstreamError> {
        out.extend_from_slice(MAGIC);
        out.write_u16::<LittleEndian>(self.version)?;
        out.write_u32::<LittleEndian>(self.sample_rate)?;
        out.write_u32::<LittleEndian>(self.frame_size)?;
        out.write_u32::<LittleEndian>(self.hop)?;
        out.write_u8(self.num_streams)?;
        out.write_u8(self.vq_dim)?;
        out.write_u32::<LittleEndian>(self.code_length)?;
        out.write_u32::<LittleEndian>(self.codebook_size)?;
        out.extend_from_slice(&self.model_hash);
        out.write_u32::<LittleEndian>(self.frame_count)?;
        out.write_u64::<LittleEndian>(self.original_length)?;
        for t in &self.tables {
            out.extend_from_slice(&t.lengths);
        }
        Ok(())
    }

    fn read(input: &mut &[u8]) -> Result<Self, BitstreamError> {
        let mut magic = [0u8; 4];
        input.read_exact(&mut magic).map_err(|_| BitstreamError::Truncated)?;
        if &magic != MAGIC {
            return Err(BitstreamError::BadMagic);
        }
        let version = input.read_u16::<LittleEndian>().map_err(|_| BitstreamError::Truncated)?;
        if version != FORMAT_VERSION {
            return Err(BitstreamError::UnsupportedVersion(version));
        }
        let sample_rate = input.read_u32::<LittleEndian>().map_err(|_| BitstreamError::Truncated)?;
        let frame_size = input.read_u32::<LittleEndian>().map_err(|_| BitstreamError::Truncated)?;
        let hop = input.read_u32::<LittleEndian>().map_err(|_| BitstreamError::Truncated)?;
        let num_streams = input.read_u8().map_err(|_| BitstreamError::Truncated)?;
        let vq_dim = input.read_u8().map_err(|_| BitstreamError::Truncated)?;
        let code_length = input.read_u32::<LittleEndian>().map_err(|_| BitstreamError::Truncated)?;
        let codebook_size = input.read_u32::<LittleEndian>().map_err(|_| BitstreamError::Truncated)?;
        let mut model_hash = [0u8; 32];
        input.read_exact(&mut model_hash).map_err(|_| BitstreamError::Truncated)?;
        let frame_count = input.read_u32::<LittleEndian>().map_err(|_| BitstreamError::Truncated)?;
        let original_length = input.read_u64::<LittleEndian>().map_err(|_| BitstreamError::Truncated)?;
        let mut tables = Vec::with_capacity(num_streams as usize);
        for _ in 0..num_streams {
            let mut lengths = vec![0u8; codebook_size as usize];
            input.read_exact(&mut lengths).map_err(|_| BitstreamError::Truncated)?;
            tables.push(canonical_from_lengths(lengths)?);
        }
        let header = Self {
            version,
            sample_rate,
            frame_size,
            hop,
            num_streams,
            vq_dim,
            code_length,
            codebook_size,
            model_hash,
            frame_count,
            original_length,
            tables,
        };
        header.validate()?;
        Ok(header)
    }
}

/// Serialize quantized indices behind a header. `stream_indices` holds one
/// (frame_count x P) index matrix per source stream.
pub fn encode_stream(
    header: &CodecHeader,
    stream_indices: &[Array2<usize>],
) -> Result<Vec<u8>, BitstreamError> {
    header.validate()?;
    if stream_indices.len() != header.num_streams as usize {
        return Err(BitstreamError::BadHeader(format!(
            "{} index streams for {} sources",
            stream_indices.len(),
            header.num_streams
        )));
    }
    for idx in stream_indices {
        if idx.dim() != (header.frame_count as usize, header.code_length as usize) {
            return Err(BitstreamError::BadHeader(format!(
                "index shape {:?}, expected ({}, {})",
                idx.dim(),
                header.frame_count,
                header.code_length
            )));
        }
    }
    let mut out = Vec::new();
    header.write(&mut out)?;
    let mut writer = BitWriter::new();
    for f in 0..header.frame_count as usize {
        for (k, idx) in stream_indices.iter().enumerate() {
            let table = &header.tables[k];
            for p in 0..header.code_length as usize {
                let sym = idx[(f, p)];
                if sym >= table.lengths.len() {
                    return Err(BitstreamError::IndexOutOfRange {
                        index: sym,
                        symbols: table.lengths.len(),
                    });
                }
                writer.write_code(table.codes[sym], table.lengths[sym]);
            }
            writer.align(); // byte-aligned per (frame, source) block
        }
    }
    out.extend_from_slice(&writer.bytes);
    Ok(out)
}

/// Decoded counterpart of [`encode_stream`].
#[derive(Debug)]
pub struct DecodedStream {
    pub header: CodecHeader,
    pub stream_indices: Vec<Array2<usize>>,
}

pub fn decode_stream(bytes: &[u8]) -> Result<DecodedStream, BitstreamError> {
    let mut cursor = bytes;
    let header = CodecHeader::read(&mut cursor)?;
    let decoders: Vec<CanonicalDecoder> = header.tables.iter().map(CanonicalDecoder::new).collect();
    let frames = header.frame_count as usize;
    let p = header.code_length as usize;
    let mut stream_indices: Vec<Array2<usize>> =
        (0..header.num_streams).map(|_| Array2::zeros((frames, p))).collect();
    let mut reader = BitReader::new(cursor);
    for f in 0..frames {
        for k in 0..header.num_streams as usize {
            for c in 0..p {
                stream_indices[k][(f, c)] = decoders[k].decode(&mut reader)?;
            }
            reader.align();
        }
    }
    Ok(DecodedStream {
        header,
        stream_indices,
    })
}

/// Nominal bitrate in bits per second for a target total entropy of
/// `xi_total_bits` per code vector: `sample_rate * P * xi / hop` (P code
/// vectors per frame, one frame every `hop` samples).
pub fn theoretical_bitrate(xi_total_bits: f64, code_length: usize, sample_rate: u32, hop: usize) -> f64 {
    sample_rate as f64 * code_length as f64 * xi_total_bits / hop as f64
}
