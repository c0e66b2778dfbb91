//! The `.siedd` container.
//!
//! ```text
//! "SIED" | version u16 | payload length u64 | CRC-32 of payload u32 | XZ(payload)
//! ```
//!
//! The payload holds the video metadata, model and training configuration,
//! the full-precision encoder, and one record per frame group. Quantized
//! trunk codes are Huffman coded (or bit-packed when that is smaller);
//! every real is a little-endian IEEE-754 single. `docs/format.md` has the
//! field-by-field layout.

pub mod huffman;

use std::io::{Read, Write};
use std::path::Path;

use byteorder::{ByteOrder, LittleEndian as LE};
use serde::{Deserialize, Serialize};

use crate::coords::PosEncoding;
use crate::error::{Error, Result};
use crate::model::{ModelConfig, SharedEncoder, SieddModel, VideoMeta};
use crate::nn::{LinearLayer, Mlp};
use crate::quant::{
    dequantize_groups, unpack_codes, QuantConfig, QuantMethod, QuantizedGroup, QuantizedModel,
    QuantizedTensor, StoredTrunkLayer, StoredWeight,
};
use crate::tensor::Tensor2D;
use crate::trainer::TrainConfig;
use huffman::{huffman_decode, huffman_encode, HuffmanTable};

pub const MAGIC: &[u8; 4] = b"SIED";
pub const VERSION: u16 = 1;
/// Bytes before the compressed payload.
pub const HEADER_LEN: usize = 4 + 2 + 8 + 4;

const XZ_PRESET: u32 = 6;
const CODES_PACKED: u8 = 0;
const CODES_HUFFMAN: u8 = 1;
const WEIGHT_RAW: u8 = 0;
const WEIGHT_QUANTIZED: u8 = 1;

/// The training settings recorded in the file for provenance.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainDigest {
    pub group_size: u32,
    pub anchors: u32,
    pub batch_size: u32,
    pub stage1_iters: u32,
    pub stage2_iters: u32,
    pub lr_stage1: f32,
    pub lr_stage2: f32,
    pub seed: u64,
}

impl TrainDigest {
    pub fn new(cfg: &TrainConfig, anchors: usize, batch_size: usize) -> Self {
        Self {
            group_size: cfg.group_size as u32,
            anchors: anchors as u32,
            batch_size: batch_size as u32,
            stage1_iters: cfg.stage1_iters as u32,
            stage2_iters: cfg.stage2_iters as u32,
            lr_stage1: cfg.stage1_opt.lr,
            lr_stage2: cfg.stage2_opt.lr,
            seed: cfg.seed,
        }
    }
}

/// Everything a `.siedd` file stores.
#[derive(Clone, Debug, PartialEq)]
pub struct SieddBitstream {
    pub meta: VideoMeta,
    pub config: ModelConfig,
    pub train: TrainDigest,
    pub encoder: Mlp,
    pub quantized: QuantizedModel,
}

impl SieddBitstream {
    pub fn new(model: &SieddModel, quantized: QuantizedModel, train: TrainDigest) -> Self {
        Self {
            meta: model.meta,
            config: model.config.clone(),
            train,
            encoder: model.encoder.mlp.clone(),
            quantized,
        }
    }

    /// The decodable model, trunks dequantized.
    pub fn to_model(&self) -> Result<SieddModel> {
        Ok(SieddModel {
            config: self.config.clone(),
            meta: self.meta,
            encoder: SharedEncoder {
                mlp: self.encoder.clone(),
            },
            groups: dequantize_groups(&self.quantized.groups, self.config.omega)?,
        })
    }
}

/// Byte counts of the payload sections (before the outer compression).
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SectionSizes {
    pub header: usize,
    pub encoder: usize,
    pub groups: Vec<usize>,
    pub payload: usize,
    pub file: usize,
}

struct Writer {
    buf: Vec<u8>,
}

impl Writer {
    fn u8(&mut self, v: u8) {
        self.buf.push(v);
    }

    fn u32(&mut self, v: usize) -> Result<()> {
        let v = u32::try_from(v).map_err(|_| Error::format(format!("{v} does not fit in 32 bits")))?;
        self.buf.extend_from_slice(&v.to_le_bytes());
        Ok(())
    }

    fn u64(&mut self, v: u64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    fn f32(&mut self, v: f32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    fn f32s(&mut self, v: &[f32]) {
        for &x in v {
            self.f32(x);
        }
    }

    fn bytes(&mut self, v: &[u8]) {
        self.buf.extend_from_slice(v);
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::format(format!("payload truncated while reading {what}")));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(LE::read_u16(self.take(2, what)?))
    }

    fn u32(&mut self, what: &str) -> Result<usize> {
        Ok(LE::read_u32(self.take(4, what)?) as usize)
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(LE::read_u64(self.take(8, what)?))
    }

    fn f32(&mut self, what: &str) -> Result<f32> {
        Ok(LE::read_f32(self.take(4, what)?))
    }

    fn f32s(&mut self, n: usize, what: &str) -> Result<Vec<f32>> {
        let bytes = n
            .checked_mul(4)
            .ok_or_else(|| Error::format(format!("absurd length for {what}")))?;
        let raw = self.take(bytes, what)?;
        let mut out = vec![0.0f32; n];
        LE::read_f32_into(raw, &mut out);
        if out.iter().any(|v| !v.is_finite()) {
            return Err(Error::format(format!("non-finite value in {what}")));
        }
        Ok(out)
    }
}

fn write_linear(w: &mut Writer, l: &LinearLayer) -> Result<()> {
    w.u32(l.out_dim())?;
    w.u32(l.in_dim())?;
    w.f32s(l.weight.data());
    w.f32s(&l.bias);
    Ok(())
}

fn read_linear(r: &mut Reader, what: &str) -> Result<LinearLayer> {
    let out = r.u32(what)?;
    let inp = r.u32(what)?;
    let n = out
        .checked_mul(inp)
        .ok_or_else(|| Error::format(format!("absurd shape for {what}")))?;
    let weight = Tensor2D::from_vec(out, inp, r.f32s(n, what)?)?;
    let bias = r.f32s(out, what)?;
    LinearLayer::new(weight, bias).map_err(|e| Error::format(e.to_string()))
}

fn write_quantized(w: &mut Writer, q: &QuantizedTensor) -> Result<()> {
    w.u32(q.rows)?;
    w.u32(q.cols)?;
    w.u8(q.bits);
    w.u8(method_tag(q.method));
    w.u32(q.group_size)?;
    w.f32s(&q.scales);
    w.f32s(&q.zeros);
    let packed = q.packed_codes();
    let coded = if q.codes.is_empty() {
        None
    } else {
        Some(huffman_encode(&q.codes, 1 << q.bits)?)
    };
    match coded {
        Some((table, bits)) if bits.bytes.len() + table.lengths().len() < packed.len() => {
            w.u8(CODES_HUFFMAN);
            w.bytes(table.lengths());
            w.u64(bits.n_bits);
            w.bytes(&bits.bytes);
        }
        _ => {
            w.u8(CODES_PACKED);
            w.bytes(&packed);
        }
    }
    Ok(())
}

fn read_quantized(r: &mut Reader) -> Result<QuantizedTensor> {
    let rows = r.u32("quantized shape")?;
    let cols = r.u32("quantized shape")?;
    let bits = r.u8("quantized bits")?;
    let method = method_from_tag(r.u8("quantization method")?)?;
    let group_size = r.u32("quantization group size")?;
    if !(2..=8).contains(&bits) || group_size == 0 {
        return Err(Error::format(format!("bad quantization header: {bits} bits, group {group_size}")));
    }
    let n = rows
        .checked_mul(cols)
        .ok_or_else(|| Error::format("absurd quantized shape"))?;
    let groups = n.div_ceil(group_size);
    let scales = r.f32s(groups, "scales")?;
    let zeros = r.f32s(groups, "zero points")?;
    let codes = match r.u8("code storage")? {
        CODES_PACKED => {
            let bytes = r.take((n * bits as usize).div_ceil(8), "packed codes")?;
            unpack_codes(bytes, bits, n)?
        }
        CODES_HUFFMAN => {
            let table = HuffmanTable::from_lengths(r.take(1 << bits, "Huffman table")?.to_vec())?;
            let n_bits = r.u64("Huffman bit count")?;
            let len = usize::try_from(n_bits.div_ceil(8)).map_err(|_| Error::format("absurd Huffman length"))?;
            // every symbol takes at least one bit
            if (n as u64) > n_bits {
                return Err(Error::format("Huffman bit count too small for the code count"));
            }
            huffman_decode(&table, r.take(len, "Huffman data")?, n_bits, n)?
        }
        other => return Err(Error::format(format!("unknown code storage tag {other}"))),
    };
    let q = QuantizedTensor {
        rows,
        cols,
        bits,
        group_size,
        method,
        codes,
        scales,
        zeros,
    };
    q.validate()?;
    Ok(q)
}

fn method_tag(m: QuantMethod) -> u8 {
    match m {
        QuantMethod::Uniform => 0,
        QuantMethod::Hqq => 1,
    }
}

fn method_from_tag(t: u8) -> Result<QuantMethod> {
    match t {
        0 => Ok(QuantMethod::Uniform),
        1 => Ok(QuantMethod::Hqq),
        other => Err(Error::format(format!("unknown quantization method tag {other}"))),
    }
}

fn write_payload(b: &SieddBitstream) -> Result<(Vec<u8>, SectionSizes)> {
    let mut w = Writer { buf: Vec::new() };
    let m = &b.meta;
    w.u32(m.height)?;
    w.u32(m.width)?;
    w.u32(m.frames)?;
    w.f32(m.fps);

    let c = &b.config;
    w.u32(c.dim)?;
    w.u32(c.enc_hidden_layers)?;
    w.u32(c.dec_hidden_layers)?;
    w.f32(c.omega);
    w.u32(c.patch)?;
    w.u32(c.pos_encoding.n_freqs())?;
    w.u8(c.pos_encoding.include_input() as u8);
    w.u32(c.pos_encoding.out_dim())?;

    let t = &b.train;
    for v in [t.group_size, t.anchors, t.batch_size, t.stage1_iters, t.stage2_iters] {
        w.u32(v as usize)?;
    }
    w.f32(t.lr_stage1);
    w.f32(t.lr_stage2);
    w.u64(t.seed);

    match &b.quantized.quant {
        None => w.u8(0),
        Some(q) => {
            w.u8(1);
            w.u8(q.bits);
            w.u8(method_tag(q.method));
            w.u32(q.group_size)?;
            w.u32(q.hqq_iters)?;
            w.f32(q.hqq_p);
            w.f32(q.hqq_beta);
            w.f32(q.hqq_kappa);
        }
    }
    let header = w.buf.len();

    w.u32(b.encoder.layers().len())?;
    for l in b.encoder.layers() {
        write_linear(&mut w, l)?;
    }
    let encoder = w.buf.len() - header;

    let mut groups = Vec::with_capacity(b.quantized.groups.len());
    w.u32(b.quantized.groups.len())?;
    for g in &b.quantized.groups {
        let start = w.buf.len();
        let first = *g
            .frames
            .first()
            .ok_or_else(|| Error::State("cannot store a group without frames".into()))?;
        if g.frames.iter().enumerate().any(|(k, &f)| f != first + k) {
            return Err(Error::State("group frames must be contiguous".into()));
        }
        w.u32(first)?;
        w.u32(g.frames.len())?;
        w.u32(g.trunk.len())?;
        for l in &g.trunk {
            match &l.weight {
                StoredWeight::Raw(t) => {
                    w.u8(WEIGHT_RAW);
                    write_linear(&mut w, &LinearLayer::new(t.clone(), l.bias.clone())?)?;
                }
                StoredWeight::Quantized(q) => {
                    w.u8(WEIGHT_QUANTIZED);
                    w.u32(l.bias.len())?;
                    w.f32s(&l.bias);
                    write_quantized(&mut w, q)?;
                }
            }
        }
        for h in &g.heads {
            write_linear(&mut w, h)?;
        }
        groups.push(w.buf.len() - start);
    }
    let payload = w.buf.len();
    Ok((
        w.buf,
        SectionSizes {
            header,
            encoder,
            groups,
            payload,
            file: 0,
        },
    ))
}

fn read_payload(buf: &[u8]) -> Result<(SieddBitstream, SectionSizes)> {
    let mut r = Reader { buf, pos: 0 };
    let meta = VideoMeta {
        height: r.u32("height")?,
        width: r.u32("width")?,
        frames: r.u32("frame count")?,
        fps: r.f32("fps")?,
    };
    let dim = r.u32("model dimension")?;
    let enc_hidden_layers = r.u32("encoder depth")?;
    let dec_hidden_layers = r.u32("decoder depth")?;
    let omega = r.f32("omega")?;
    let patch = r.u32("patch")?;
    let n_freqs = r.u32("frequencies")?;
    let include_input = r.u8("include-input flag")? != 0;
    let pe_dim = r.u32("encoding width")?;
    let pos_encoding = PosEncoding::new(n_freqs, include_input).map_err(|e| Error::format(e.to_string()))?;
    if pos_encoding.out_dim() != pe_dim {
        return Err(Error::format(format!(
            "encoding width {pe_dim} inconsistent with {n_freqs} frequencies"
        )));
    }
    let config = ModelConfig {
        dim,
        enc_hidden_layers,
        dec_hidden_layers,
        omega,
        patch,
        pos_encoding,
    };
    config.validate().map_err(|e| Error::format(e.to_string()))?;
    if meta.height == 0 || meta.width == 0 || meta.height % patch != 0 || meta.width % patch != 0 {
        return Err(Error::format(format!(
            "stored size {}x{} incompatible with patch {patch}",
            meta.height, meta.width
        )));
    }

    let train = TrainDigest {
        group_size: r.u32("group size")? as u32,
        anchors: r.u32("anchor count")? as u32,
        batch_size: r.u32("batch size")? as u32,
        stage1_iters: r.u32("stage-1 iterations")? as u32,
        stage2_iters: r.u32("stage-2 iterations")? as u32,
        lr_stage1: r.f32("learning rate")?,
        lr_stage2: r.f32("learning rate")?,
        seed: r.u64("seed")?,
    };

    let quant = match r.u8("quantization flag")? {
        0 => None,
        1 => {
            let q = QuantConfig {
                bits: r.u8("bits")?,
                method: method_from_tag(r.u8("method")?)?,
                group_size: r.u32("group size")?,
                hqq_iters: r.u32("hqq iterations")?,
                hqq_p: r.f32("hqq p")?,
                hqq_beta: r.f32("hqq beta")?,
                hqq_kappa: r.f32("hqq kappa")?,
            };
            q.validate().map_err(|e| Error::format(e.to_string()))?;
            Some(q)
        }
        other => return Err(Error::format(format!("unknown quantization flag {other}"))),
    };
    let header = r.pos;

    let n_enc = r.u32("encoder depth")?;
    if n_enc != enc_hidden_layers + 1 {
        return Err(Error::format(format!("{n_enc} encoder layers for depth {enc_hidden_layers}")));
    }
    let enc_layers = (0..n_enc)
        .map(|_| read_linear(&mut r, "encoder layer"))
        .collect::<Result<Vec<_>>>()?;
    let encoder = Mlp::from_layers(enc_layers, omega, false).map_err(|e| Error::format(e.to_string()))?;
    if encoder.in_dim() != pe_dim || encoder.out_dim() != dim {
        return Err(Error::format("encoder shape disagrees with the configuration"));
    }
    let encoder_size = r.pos - header;

    let n_groups = r.u32("group count")?;
    let mut groups = Vec::new();
    let mut group_sizes = Vec::new();
    let mut next_frame = 0usize;
    for g in 0..n_groups {
        let start = r.pos;
        let first = r.u32("first frame")?;
        let n_heads = r.u32("head count")?;
        if first != next_frame || n_heads == 0 || first + n_heads > meta.frames {
            return Err(Error::format(format!(
                "group {g} covers frames {first}..{} (expected to start at {next_frame} within {})",
                first.saturating_add(n_heads),
                meta.frames
            )));
        }
        next_frame = first + n_heads;
        let n_trunk = r.u32("trunk depth")?;
        if n_trunk != dec_hidden_layers {
            return Err(Error::format(format!("group {g} has {n_trunk} trunk layers")));
        }
        let mut trunk = Vec::with_capacity(n_trunk);
        for _ in 0..n_trunk {
            let layer = match r.u8("weight storage")? {
                WEIGHT_RAW => {
                    let l = read_linear(&mut r, "trunk layer")?;
                    StoredTrunkLayer {
                        weight: StoredWeight::Raw(l.weight),
                        bias: l.bias,
                    }
                }
                WEIGHT_QUANTIZED => {
                    let nb = r.u32("bias length")?;
                    let bias = r.f32s(nb, "trunk bias")?;
                    let q = read_quantized(&mut r)?;
                    if q.rows != nb {
                        return Err(Error::format("trunk bias length disagrees with weight"));
                    }
                    StoredTrunkLayer {
                        weight: StoredWeight::Quantized(q),
                        bias,
                    }
                }
                other => return Err(Error::format(format!("unknown weight storage tag {other}"))),
            };
            if layer_shape(&layer) != (dim, dim) {
                return Err(Error::format(format!("group {g} trunk layer is not {dim}x{dim}")));
            }
            trunk.push(layer);
        }
        let heads = (0..n_heads)
            .map(|_| {
                let h = read_linear(&mut r, "head")?;
                if h.in_dim() != dim || h.out_dim() != config.out_channels() {
                    return Err(Error::format(format!("group {g} head has the wrong shape")));
                }
                Ok(h)
            })
            .collect::<Result<Vec<_>>>()?;
        groups.push(QuantizedGroup {
            frames: (first..first + n_heads).collect(),
            trunk,
            heads,
        });
        group_sizes.push(r.pos - start);
    }
    if next_frame != meta.frames {
        return Err(Error::format(format!("groups cover {next_frame} of {} frames", meta.frames)));
    }
    if r.pos != buf.len() {
        return Err(Error::format(format!("{} trailing payload bytes", buf.len() - r.pos)));
    }
    Ok((
        SieddBitstream {
            meta,
            config,
            train,
            encoder,
            quantized: QuantizedModel { quant, groups },
        },
        SectionSizes {
            header,
            encoder: encoder_size,
            groups: group_sizes,
            payload: buf.len(),
            file: 0,
        },
    ))
}

fn layer_shape(l: &StoredTrunkLayer) -> (usize, usize) {
    match &l.weight {
        StoredWeight::Raw(t) => t.shape(),
        StoredWeight::Quantized(q) => (q.rows, q.cols),
    }
}

/// Complete file bytes for a bitstream.
pub fn serialize(b: &SieddBitstream) -> Result<Vec<u8>> {
    Ok(serialize_with_sizes(b)?.0)
}

pub fn serialize_with_sizes(b: &SieddBitstream) -> Result<(Vec<u8>, SectionSizes)> {
    let (payload, mut sizes) = write_payload(b)?;
    let mut out = Vec::with_capacity(HEADER_LEN + payload.len() / 2);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(payload.len() as u64).to_le_bytes());
    out.extend_from_slice(&crc32fast::hash(&payload).to_le_bytes());
    let mut enc = xz2::write::XzEncoder::new(out, XZ_PRESET);
    enc.write_all(&payload)
        .map_err(|e| Error::format(format!("compression failed: {e}")))?;
    let out = enc
        .finish()
        .map_err(|e| Error::format(format!("compression failed: {e}")))?;
    sizes.file = out.len();
    Ok((out, sizes))
}

/// Parses and verifies file bytes.
pub fn deserialize(bytes: &[u8]) -> Result<SieddBitstream> {
    Ok(deserialize_with_sizes(bytes)?.0)
}

pub fn deserialize_with_sizes(bytes: &[u8]) -> Result<(SieddBitstream, SectionSizes)> {
    if bytes.len() < HEADER_LEN {
        return Err(Error::format(format!("file of {} bytes is shorter than the header", bytes.len())));
    }
    if &bytes[..4] != MAGIC {
        return Err(Error::format("not a SIEDD file (bad magic)"));
    }
    let mut r = Reader { buf: bytes, pos: 4 };
    let version = r.u16("version")?;
    if version != VERSION {
        return Err(Error::Version {
            found: version,
            expected: VERSION,
        });
    }
    let payload_len = r.u64("payload length")?;
    let stored = LE::read_u32(r.take(4, "checksum")?);
    let mut payload = Vec::new();
    xz2::read::XzDecoder::new(&bytes[HEADER_LEN..])
        .take(payload_len.saturating_add(1))
        .read_to_end(&mut payload)
        .map_err(|e| Error::format(format!("payload decompression failed: {e}")))?;
    if payload.len() as u64 != payload_len {
        return Err(Error::format(format!(
            "payload is {} bytes, header declares {payload_len}",
            payload.len()
        )));
    }
    let computed = crc32fast::hash(&payload);
    if computed != stored {
        return Err(Error::Checksum { stored, computed });
    }
    let (b, mut sizes) = read_payload(&payload)?;
    sizes.file = bytes.len();
    Ok((b, sizes))
}

/// Writes a file, removing it again if writing fails part way.
pub fn write_file(path: &Path, b: &SieddBitstream) -> Result<usize> {
    let bytes = serialize(b)?;
    let result = std::fs::File::create(path).and_then(|mut f| {
        f.write_all(&bytes)?;
        f.sync_all()
    });
    if let Err(e) = result {
        let _ = std::fs::remove_file(path);
        return Err(Error::io(path, e));
    }
    Ok(bytes.len())
}

pub fn read_file(path: &Path) -> Result<(SieddBitstream, SectionSizes)> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    deserialize_with_sizes(&bytes)
}
