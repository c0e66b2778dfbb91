//! Canonical Huffman coding over a small integer alphabet.
//!
//! Only code lengths are stored; codes are assigned canonically (shorter
//! first, then by symbol value). Bits are written most significant first.

use std::cmp::Reverse;
use std::collections::BinaryHeap;

use crate::error::{Error, Result};

/// Longest code the builder will emit.
pub const MAX_CODE_LEN: u8 = 24;

/// Code length per symbol; zero means the symbol does not occur.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct HuffmanTable {
    lengths: Vec<u8>,
}

impl HuffmanTable {
    pub fn from_lengths(lengths: Vec<u8>) -> Result<Self> {
        if lengths.iter().any(|&l| l > MAX_CODE_LEN) {
            return Err(Error::format("Huffman code length exceeds limit"));
        }
        let used = lengths.iter().filter(|&&l| l > 0).count();
        if used == 0 {
            return Err(Error::format("Huffman table has no symbols"));
        }
        // Kraft sum over 2^MAX_CODE_LEN units
        let kraft: u64 = lengths
            .iter()
            .filter(|&&l| l > 0)
            .map(|&l| 1u64 << (MAX_CODE_LEN - l))
            .sum();
        let full = 1u64 << MAX_CODE_LEN;
        let single = used == 1 && lengths.iter().any(|&l| l == 1);
        if kraft != full && !single {
            return Err(Error::format("Huffman code lengths violate the Kraft equality"));
        }
        Ok(Self { lengths })
    }

    /// Builds length-limited optimal lengths from symbol counts.
    pub fn from_frequencies(freqs: &[u64]) -> Result<Self> {
        let used: Vec<usize> = (0..freqs.len()).filter(|&s| freqs[s] > 0).collect();
        if used.is_empty() {
            return Err(Error::format("cannot build a Huffman table for an empty input"));
        }
        let mut lengths = vec![0u8; freqs.len()];
        if used.len() == 1 {
            lengths[used[0]] = 1;
            return Ok(Self { lengths });
        }
        let mut f: Vec<u64> = freqs.to_vec();
        loop {
            let l = huffman_lengths(&f);
            if l.iter().all(|&x| x <= MAX_CODE_LEN as usize) {
                for (dst, src) in lengths.iter_mut().zip(l) {
                    *dst = src as u8;
                }
                return Ok(Self { lengths });
            }
            for v in f.iter_mut().filter(|v| **v > 0) {
                *v = (*v).div_ceil(2);
            }
        }
    }

    pub fn lengths(&self) -> &[u8] {
        &self.lengths
    }

    /// `(code, length)` per symbol in canonical order.
    pub fn codes(&self) -> Vec<(u32, u8)> {
        let mut order: Vec<usize> = (0..self.lengths.len()).filter(|&s| self.lengths[s] > 0).collect();
        order.sort_by_key(|&s| (self.lengths[s], s));
        let mut codes = vec![(0u32, 0u8); self.lengths.len()];
        let mut code = 0u32;
        let mut prev_len = 0u8;
        for (k, &s) in order.iter().enumerate() {
            let len = self.lengths[s];
            if k > 0 {
                code = (code + 1) << (len - prev_len);
            } else {
                code <<= len;
            }
            codes[s] = (code, len);
            prev_len = len;
        }
        codes
    }

    /// Total encoded length of `symbols` in bits.
    pub fn encoded_bits(&self, symbols: &[u8]) -> u64 {
        symbols.iter().map(|&s| self.lengths[s as usize] as u64).sum()
    }
}

// Textbook construction: repeatedly merge the two lightest subtrees.
// Ties break on the smallest contained symbol, so the result is deterministic.
fn huffman_lengths(freqs: &[u64]) -> Vec<usize> {
    let mut parent: Vec<usize> = Vec::new();
    let mut heap = BinaryHeap::new();
    for (s, &f) in freqs.iter().enumerate() {
        if f > 0 {
            heap.push(Reverse((f, s, parent.len())));
            parent.push(usize::MAX);
        }
    }
    let leaves: Vec<usize> = (0..freqs.len()).filter(|&s| freqs[s] > 0).collect();
    while heap.len() > 1 {
        let Reverse((fa, sa, a)) = heap.pop().expect("two nodes");
        let Reverse((fb, sb, b)) = heap.pop().expect("two nodes");
        let node = parent.len();
        parent.push(usize::MAX);
        parent[a] = node;
        parent[b] = node;
        heap.push(Reverse((fa + fb, sa.min(sb), node)));
    }
    let mut lengths = vec![0usize; freqs.len()];
    for (leaf, &s) in leaves.iter().enumerate() {
        let mut depth = 0;
        let mut n = leaf;
        while parent[n] != usize::MAX {
            n = parent[n];
            depth += 1;
        }
        lengths[s] = depth;
    }
    lengths
}

/// MSB-first bit writer.
#[derive(Default)]
struct BitWriter {
    bytes: Vec<u8>,
    bits: u64,
}

impl BitWriter {
    fn push(&mut self, code: u32, len: u8) {
        for i in (0..len).rev() {
            let bit = (code >> i) & 1;
            if self.bits % 8 == 0 {
                self.bytes.push(0);
            }
            if bit == 1 {
                let last = self.bytes.last_mut().expect("byte pushed");
                *last |= 0x80 >> (self.bits % 8);
            }
            self.bits += 1;
        }
    }
}

/// Huffman-coded symbols: the packed bits and their exact count.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EncodedBits {
    pub bytes: Vec<u8>,
    pub n_bits: u64,
}

/// Builds a table from the observed frequencies over an alphabet of
/// `alphabet` symbols and encodes `symbols` with it.
pub fn huffman_encode(symbols: &[u8], alphabet: usize) -> Result<(HuffmanTable, EncodedBits)> {
    let mut freqs = vec![0u64; alphabet];
    for &s in symbols {
        let slot = freqs
            .get_mut(s as usize)
            .ok_or_else(|| Error::format(format!("symbol {s} outside alphabet of {alphabet}")))?;
        *slot += 1;
    }
    let table = HuffmanTable::from_frequencies(&freqs)?;
    let bits = encode_with(&table, symbols)?;
    Ok((table, bits))
}

pub fn encode_with(table: &HuffmanTable, symbols: &[u8]) -> Result<EncodedBits> {
    let codes = table.codes();
    let mut w = BitWriter::default();
    for &s in symbols {
        match codes.get(s as usize) {
            Some(&(code, len)) if len > 0 => w.push(code, len),
            _ => return Err(Error::format(format!("symbol {s} has no code"))),
        }
    }
    Ok(EncodedBits {
        bytes: w.bytes,
        n_bits: w.bits,
    })
}

/// Decodes exactly `n` symbols from the first `n_bits` bits of `bytes`.
pub fn huffman_decode(table: &HuffmanTable, bytes: &[u8], n_bits: u64, n: usize) -> Result<Vec<u8>> {
    if n_bits > bytes.len() as u64 * 8 {
        return Err(Error::format(format!(
            "bit count {n_bits} exceeds the {} available bytes",
            bytes.len()
        )));
    }
    // canonical decoding tables: per length, first code and index into sorted symbols
    let mut sorted: Vec<usize> = (0..table.lengths.len()).filter(|&s| table.lengths[s] > 0).collect();
    sorted.sort_by_key(|&s| (table.lengths[s], s));
    let max_len = MAX_CODE_LEN as usize;
    let mut count = vec![0u32; max_len + 1];
    for &s in &sorted {
        count[table.lengths[s] as usize] += 1;
    }
    let mut first_code = vec![0u32; max_len + 1];
    let mut first_index = vec![0u32; max_len + 1];
    let (mut code, mut index) = (0u32, 0u32);
    for len in 1..=max_len {
        code = (code + count[len - 1]) << 1;
        first_code[len] = code;
        first_index[len] = index;
        index += count[len];
    }

    let mut out = Vec::with_capacity(n);
    let mut pos = 0u64;
    while out.len() < n {
        let mut code = 0u32;
        let mut len = 0usize;
        loop {
            if pos >= n_bits {
                return Err(Error::format(format!(
                    "Huffman data ended after {} of {n} symbols",
                    out.len()
                )));
            }
            let bit = (bytes[(pos / 8) as usize] >> (7 - pos % 8)) & 1;
            pos += 1;
            code = (code << 1) | bit as u32;
            len += 1;
            if len > max_len {
                return Err(Error::format("invalid Huffman code"));
            }
            let offset = code.wrapping_sub(first_code[len]);
            if code >= first_code[len] && offset < count[len] {
                out.push(sorted[(first_index[len] + offset) as usize] as u8);
                break;
            }
        }
    }
    if pos != n_bits {
        return Err(Error::format(format!("{} unused bits after Huffman data", n_bits - pos)));
    }
    Ok(out)
}
