//! End-to-end compression: edit, build tables, entropy-code, and back.
//!
//! Each latent payload is `u32 BE primary length`, the coded primary stream,
//! then the coded escape stream (absent when nothing escaped).

use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;

use crate::bitstream::{
    self, build_cdf_tables, delta_z_index, escape_count, latent_streams, merge_streams, theoretical_rate_report,
    y_table_ids, z_table_ids, Header, LatentStreams, SymbolStream, TableSet, ESCAPE_NIBBLES, NIBBLE_TABLE,
    VERSION_RANGE_CODED, VERSION_RAW,
};
use crate::editing::{edit, storable_step, EditConfig, EditResult};
use crate::error::{Error, Result};
use crate::models::{id_hex, ModelParams, TOTAL_DOWNSAMPLE, Y_DOWNSAMPLE, Z_DOWNSAMPLE};
use crate::objectives::{clamp_pixels, DistortionRegistry, EditTarget, QuantSteps};
use crate::tensor::Tensor;

/// Boundary to an entropy coder over [`TableSet`] tables.
pub trait EntropyCoder: Send + Sync {
    /// Header version byte identifying the payload coding.
    fn version(&self) -> u8;
    fn encode(&self, stream: &SymbolStream, tables: &TableSet) -> Result<Vec<u8>>;
    /// Decodes `table_ids.len()` symbols, the i-th with table `table_ids[i]`.
    fn decode(&self, bytes: &[u8], tables: &TableSet, table_ids: &[u32]) -> Result<Vec<i32>>;
}

/// Zigzag LEB128 varints; no compression. Keeps the container testable
/// without a range coder.
#[derive(Clone, Copy, Debug, Default)]
pub struct RawCoder;

impl EntropyCoder for RawCoder {
    fn version(&self) -> u8 {
        VERSION_RAW
    }

    fn encode(&self, stream: &SymbolStream, tables: &TableSet) -> Result<Vec<u8>> {
        let mut out = Vec::with_capacity(stream.len());
        for (&s, &t) in stream.symbols.iter().zip(&stream.table_ids) {
            tables.get(t)?.index_of(s)?;
            let mut v = ((s << 1) ^ (s >> 31)) as u32;
            loop {
                let byte = (v & 0x7F) as u8;
                v >>= 7;
                if v == 0 {
                    out.push(byte);
                    break;
                }
                out.push(byte | 0x80);
            }
        }
        Ok(out)
    }

    fn decode(&self, bytes: &[u8], tables: &TableSet, table_ids: &[u32]) -> Result<Vec<i32>> {
        let mut out = Vec::with_capacity(table_ids.len());
        let mut pos = 0;
        for &t in table_ids {
            let mut v = 0u32;
            let mut shift = 0;
            loop {
                let byte = *bytes.get(pos).ok_or(Error::Truncated {
                    offset: pos,
                    what: "varint payload",
                })?;
                pos += 1;
                if shift > 28 {
                    return Err(Error::Format("varint too long".into()));
                }
                v |= ((byte & 0x7F) as u32) << shift;
                shift += 7;
                if byte & 0x80 == 0 {
                    break;
                }
            }
            let s = ((v >> 1) as i32) ^ -((v & 1) as i32);
            tables.get(t)?.index_of(s)?;
            out.push(s);
        }
        if pos != bytes.len() {
            return Err(Error::Format("trailing bytes in varint payload".into()));
        }
        Ok(out)
    }
}

/// Runs an external coder executable over files:
///
/// - `PROGRAM encode TABLES SYMBOLS OUT` reads a table blob and a symbol file
///   and writes the payload;
/// - `PROGRAM decode TABLES PAYLOAD IDS OUT` reads a symbol file of table ids
///   (symbols zero) and writes the decoded symbol file.
///
/// Symbol files use [`SymbolStream::to_bytes`].
#[derive(Clone, Debug)]
pub struct ProcessCoder {
    pub program: PathBuf,
    pub version: u8,
}

impl ProcessCoder {
    pub fn new(program: impl Into<PathBuf>) -> Self {
        Self {
            program: program.into(),
            version: VERSION_RANGE_CODED,
        }
    }

    fn run(&self, args: &[&Path], mode: &str) -> Result<()> {
        let out = Command::new(&self.program)
            .arg(mode)
            .args(args)
            .output()
            .map_err(|e| Error::io(&self.program, e))?;
        if !out.status.success() {
            return Err(Error::Coder(format!(
                "{} {mode} exited with {}: {}",
                self.program.display(),
                out.status,
                String::from_utf8_lossy(&out.stderr).trim()
            )));
        }
        Ok(())
    }
}

fn write(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn read(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

impl EntropyCoder for ProcessCoder {
    fn version(&self) -> u8 {
        self.version
    }

    fn encode(&self, stream: &SymbolStream, tables: &TableSet) -> Result<Vec<u8>> {
        let dir = tempfile::tempdir().map_err(|e| Error::io(std::env::temp_dir(), e))?;
        let (t, s, o) = (dir.path().join("tables.bin"), dir.path().join("symbols.bin"), dir.path().join("out.bin"));
        write(&t, &tables.to_blob())?;
        write(&s, &stream.to_bytes())?;
        self.run(&[&t, &s, &o], "encode")?;
        read(&o)
    }

    fn decode(&self, bytes: &[u8], tables: &TableSet, table_ids: &[u32]) -> Result<Vec<i32>> {
        let dir = tempfile::tempdir().map_err(|e| Error::io(std::env::temp_dir(), e))?;
        let p = dir.path();
        let (t, i, ids, o) = (p.join("tables.bin"), p.join("in.bin"), p.join("ids.bin"), p.join("out.bin"));
        write(&t, &tables.to_blob())?;
        write(&i, bytes)?;
        let request = SymbolStream {
            symbols: vec![0; table_ids.len()],
            table_ids: table_ids.to_vec(),
        };
        write(&ids, &request.to_bytes())?;
        self.run(&[&t, &i, &ids, &o], "decode")?;
        let decoded = SymbolStream::from_bytes(&read(&o)?)?;
        if decoded.table_ids != table_ids {
            return Err(Error::Coder("decoder returned symbols for different tables".into()));
        }
        Ok(decoded.symbols)
    }
}

fn encode_latent(streams: &LatentStreams, tables: &TableSet, coder: &dyn EntropyCoder) -> Result<Vec<u8>> {
    let primary = coder.encode(&streams.primary, tables)?;
    let mut out = Vec::with_capacity(4 + primary.len());
    out.extend_from_slice(&(primary.len() as u32).to_be_bytes());
    out.extend_from_slice(&primary);
    if !streams.escapes.is_empty() {
        out.extend_from_slice(&coder.encode(&streams.escapes, tables)?);
    }
    Ok(out)
}

fn decode_latent(bytes: &[u8], table_ids: &[u32], tables: &TableSet, coder: &dyn EntropyCoder) -> Result<Vec<i32>> {
    if bytes.len() < 4 {
        return Err(Error::Truncated {
            offset: bytes.len(),
            what: "payload segment length",
        });
    }
    let n = u32::from_be_bytes(bytes[..4].try_into().expect("4 bytes")) as usize;
    let primary_bytes = bytes.get(4..4 + n).ok_or(Error::Truncated {
        offset: bytes.len(),
        what: "primary segment",
    })?;
    let primary = coder.decode(primary_bytes, tables, table_ids)?;
    let escaped = escape_count(&primary, table_ids, tables)?;
    let rest = &bytes[4 + n..];
    let escapes = if escaped > 0 {
        coder.decode(rest, tables, &vec![NIBBLE_TABLE; escaped * ESCAPE_NIBBLES])?
    } else if !rest.is_empty() {
        return Err(Error::Format("escape segment present without escapes".into()));
    } else {
        Vec::new()
    };
    merge_streams(&primary, table_ids, &escapes, tables)
}

/// Coder-ready symbol streams of an edit result.
#[derive(Clone, Debug)]
pub struct EncodedStreams {
    pub tables: TableSet,
    pub z: LatentStreams,
    pub y: LatentStreams,
}

pub fn symbol_streams(result: &EditResult, model: &ModelParams) -> Result<EncodedStreams> {
    let tables = build_cdf_tables(&model.decoder, result.steps)?;
    let z_ids = z_table_ids(&tables, result.z_shape);
    let z = latent_streams(&result.symbols_z, &z_ids, &tables)?;
    let (_, sigma) = model.decoder.hyper_synthesize(&result.z_hat())?;
    let y_ids = y_table_ids(&tables, &sigma);
    let y = latent_streams(&result.symbols_y, &y_ids, &tables)?;
    Ok(EncodedStreams { tables, z, y })
}

/// Ideal code length of every stream under the fixed-precision tables.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TableRate {
    pub z_bits: f64,
    pub y_bits: f64,
    /// Symbols in the primary streams.
    pub symbols: usize,
    /// Sum over primary symbols of the per-symbol table quantization bound.
    pub quantization_bound: f64,
}

impl TableRate {
    pub fn total_bits(&self) -> f64 {
        self.z_bits + self.y_bits
    }
}

pub fn table_rate(streams: &EncodedStreams) -> Result<TableRate> {
    let t = &streams.tables;
    let bits = |s: &LatentStreams| -> Result<f64> {
        Ok(theoretical_rate_report(&s.primary, t)? + theoretical_rate_report(&s.escapes, t)?)
    };
    let mut bound = 0.0;
    for s in [&streams.z.primary, &streams.y.primary] {
        for &id in &s.table_ids {
            bound += bitstream::table_quantization_bound(t.get(id)?.symbol_count());
        }
    }
    Ok(TableRate {
        z_bits: bits(&streams.z)?,
        y_bits: bits(&streams.y)?,
        symbols: streams.z.primary.len() + streams.y.primary.len(),
        quantization_bound: bound,
    })
}

/// Writes the container for an edit result.
pub fn encode_result(result: &EditResult, model: &ModelParams, coder: &dyn EntropyCoder) -> Result<Vec<u8>> {
    let streams = symbol_streams(result, model)?;
    let z_bytes = encode_latent(&streams.z, &streams.tables, coder)?;
    let y_bytes = encode_latent(&streams.y, &streams.tables, coder)?;
    let [_, _, h, w] = result.y_shape;
    let (height, width) = (h * Y_DOWNSAMPLE, w * Y_DOWNSAMPLE);
    if height > u16::MAX as usize || width > u16::MAX as usize || result.y_shape[0] != 1 {
        return Err(Error::Dimension(format!("cannot store a {height}x{width} batch of {}", result.y_shape[0])));
    }
    if storable_step(result.steps.delta_y) != result.steps.delta_y {
        return Err(Error::Domain("delta_y is not representable in binary32".into()));
    }
    let header = Header {
        version: coder.version(),
        model_id: model.decoder_id(),
        height: height as u16,
        width: width as u16,
        delta_z_index: delta_z_index(result.steps.delta_z)?,
        delta_y: result.steps.delta_y as f32,
        z_payload_len: z_bytes.len() as u32,
        y_payload_len: y_bytes.len() as u32,
    };
    bitstream::serialize(&header, &z_bytes, &y_bytes)
}

pub struct Compressed {
    pub bytes: Vec<u8>,
    pub result: EditResult,
}

/// Edits `x` and writes the container.
pub fn compress(
    x: &Tensor,
    model: &ModelParams,
    target: &EditTarget,
    registry: &DistortionRegistry,
    config: &EditConfig,
    coder: &dyn EntropyCoder,
) -> Result<Compressed> {
    let result = edit(x, model, target, registry, config)?;
    let bytes = encode_result(&result, model, coder)?;
    Ok(Compressed { bytes, result })
}

#[derive(Clone, Debug, PartialEq)]
pub struct Decompressed {
    pub header: Header,
    pub steps: QuantSteps,
    pub symbols_y: Vec<i32>,
    pub symbols_z: Vec<i32>,
    /// Clamped to `[0, 255]`.
    pub reconstruction: Tensor,
}

/// Decodes a container. Only the decoder half of `model` is used.
pub fn decompress(bytes: &[u8], model: &ModelParams, coder: &dyn EntropyCoder) -> Result<Decompressed> {
    let (header, z_bytes, y_bytes) = bitstream::parse(bytes)?;
    let decoder_id = model.decoder_id();
    if header.model_id != decoder_id {
        return Err(Error::ModelMismatch {
            stream: id_hex(&header.model_id),
            checkpoint: id_hex(&decoder_id),
        });
    }
    if header.version != coder.version() {
        return Err(Error::Format(format!(
            "stream version {} needs a different entropy coder (have version {})",
            header.version,
            coder.version()
        )));
    }
    let (h, w) = (header.height as usize, header.width as usize);
    if h == 0 || w == 0 || h % TOTAL_DOWNSAMPLE != 0 || w % TOTAL_DOWNSAMPLE != 0 {
        return Err(Error::Format(format!("image size {h}x{w} is not codable")));
    }
    let steps = header.steps();
    let tables = build_cdf_tables(&model.decoder, steps)?;
    let z_shape = [1, model.arch.m_hyper, h / TOTAL_DOWNSAMPLE, w / TOTAL_DOWNSAMPLE];
    let y_shape = [1, model.arch.m, h / Y_DOWNSAMPLE, w / Y_DOWNSAMPLE];
    debug_assert_eq!(z_shape[2] * Z_DOWNSAMPLE, y_shape[2]);
    let z_ids = z_table_ids(&tables, z_shape);
    let symbols_z = decode_latent(z_bytes, &z_ids, &tables, coder)?;
    let z_hat = Tensor::from_vec(z_shape, symbols_z.iter().map(|&s| s as f64 * steps.delta_z).collect())?;
    let (_, sigma) = model.decoder.hyper_synthesize(&z_hat)?;
    let y_ids = y_table_ids(&tables, &sigma);
    let symbols_y = decode_latent(y_bytes, &y_ids, &tables, coder)?;
    let y_hat = Tensor::from_vec(y_shape, symbols_y.iter().map(|&s| s as f64 * steps.delta_y).collect())?;
    let reconstruction = clamp_pixels(&model.decoder.synthesize(&y_hat)?);
    Ok(Decompressed {
        header,
        steps,
        symbols_y,
        symbols_z,
        reconstruction,
    })
}
