//! Container format, fixed-precision cdf tables and symbol streams.
//!
//! The `.cedt` layout is a 30-byte header followed by the `z` payload and the
//! `y` payload:
//!
//! | bytes | field                                   |
//! |-------|-----------------------------------------|
//! | 4     | magic `CEDT`                            |
//! | 1     | version (payload coding)                |
//! | 8     | decoder id                              |
//! | 2     | height, big-endian                      |
//! | 2     | width, big-endian                       |
//! | 1     | `delta_z` index into the candidate set  |
//! | 4     | `delta_y`, binary32 little-endian       |
//! | 4     | `z` payload length, big-endian          |
//! | 4     | `y` payload length, big-endian          |

use serde::{Deserialize, Serialize};

use crate::editing::delta_z_candidates;
use crate::entropy::{gaussian_pmf, FactorizedPrior, SIGMA_FLOOR};
use crate::error::{Error, Result};
use crate::models::Decoder;
use crate::objectives::QuantSteps;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"CEDT";
pub const HEADER_LEN: usize = 30;
/// Payloads produced by a range coder over the cdf tables.
pub const VERSION_RANGE_CODED: u8 = 1;
/// Payloads holding zigzag varints; lets the pipeline run without a range coder.
pub const VERSION_RAW: u8 = 2;

pub const PRECISION_BITS: u32 = 16;
pub const TOTAL_MASS: u32 = 1 << PRECISION_BITS;
/// Largest magnitude a table covers before escape coding takes over.
pub const SYMBOL_LIMIT: i32 = 255;
/// Most symbols a single table may hold (escape included).
pub const MAX_TABLE_SYMBOLS: usize = 4096;
pub const SIGMA_BUCKETS: usize = 64;
pub const SIGMA_MAX: f64 = 256.0;
/// `y` tables span `+-TAIL_SIGMAS * sigma / delta_y`.
pub const TAIL_SIGMAS: f64 = 16.0;
/// Tail mass left outside each `z` table.
pub const Z_TAIL_MASS: f64 = 1e-9;
/// An escaped value is sent as this many uniform nibbles.
pub const ESCAPE_NIBBLES: usize = 8;
/// Table id of the uniform nibble table.
pub const NIBBLE_TABLE: u32 = 0;

#[derive(Clone, Debug, PartialEq)]
pub struct Header {
    pub version: u8,
    pub model_id: [u8; 8],
    pub height: u16,
    pub width: u16,
    pub delta_z_index: u8,
    pub delta_y: f32,
    pub z_payload_len: u32,
    pub y_payload_len: u32,
}

impl Header {
    pub fn serialize(&self) -> [u8; HEADER_LEN] {
        let mut b = [0u8; HEADER_LEN];
        b[..4].copy_from_slice(MAGIC);
        b[4] = self.version;
        b[5..13].copy_from_slice(&self.model_id);
        b[13..15].copy_from_slice(&self.height.to_be_bytes());
        b[15..17].copy_from_slice(&self.width.to_be_bytes());
        b[17] = self.delta_z_index;
        b[18..22].copy_from_slice(&self.delta_y.to_le_bytes());
        b[22..26].copy_from_slice(&self.z_payload_len.to_be_bytes());
        b[26..30].copy_from_slice(&self.y_payload_len.to_be_bytes());
        b
    }

    pub fn parse(bytes: &[u8]) -> Result<Header> {
        if bytes.len() < 4 {
            return Err(Error::Truncated {
                offset: bytes.len(),
                what: "magic",
            });
        }
        if &bytes[..4] != MAGIC {
            return Err(Error::Format("bad magic; not a .cedt stream".into()));
        }
        if bytes.len() < HEADER_LEN {
            return Err(Error::Truncated {
                offset: bytes.len(),
                what: "header",
            });
        }
        let version = bytes[4];
        if version != VERSION_RANGE_CODED && version != VERSION_RAW {
            return Err(Error::Format(format!("unknown version {version}")));
        }
        let h = Header {
            version,
            model_id: bytes[5..13].try_into().expect("8 bytes"),
            height: u16::from_be_bytes([bytes[13], bytes[14]]),
            width: u16::from_be_bytes([bytes[15], bytes[16]]),
            delta_z_index: bytes[17],
            delta_y: f32::from_le_bytes(bytes[18..22].try_into().expect("4 bytes")),
            z_payload_len: u32::from_be_bytes(bytes[22..26].try_into().expect("4 bytes")),
            y_payload_len: u32::from_be_bytes(bytes[26..30].try_into().expect("4 bytes")),
        };
        if h.delta_z_index as usize >= delta_z_candidates().len() {
            return Err(Error::Format(format!("delta_z index {} out of range", h.delta_z_index)));
        }
        if !(h.delta_y.is_finite() && h.delta_y > 0.0) {
            return Err(Error::Format(format!("invalid delta_y {}", h.delta_y)));
        }
        Ok(h)
    }

    pub fn steps(&self) -> QuantSteps {
        QuantSteps {
            delta_y: self.delta_y as f64,
            delta_z: delta_z_candidates()[self.delta_z_index as usize],
        }
    }
}

/// Index of `delta_z` in the candidate set.
pub fn delta_z_index(delta_z: f64) -> Result<u8> {
    delta_z_candidates()
        .iter()
        .position(|&c| c == delta_z)
        .map(|i| i as u8)
        .ok_or_else(|| Error::Config(format!("delta_z {delta_z} is not in the candidate set")))
}

pub fn serialize(header: &Header, z_bytes: &[u8], y_bytes: &[u8]) -> Result<Vec<u8>> {
    if header.z_payload_len as usize != z_bytes.len() || header.y_payload_len as usize != y_bytes.len() {
        return Err(Error::Format("header payload lengths do not match payloads".into()));
    }
    let mut out = Vec::with_capacity(HEADER_LEN + z_bytes.len() + y_bytes.len());
    out.extend_from_slice(&header.serialize());
    out.extend_from_slice(z_bytes);
    out.extend_from_slice(y_bytes);
    Ok(out)
}

pub fn parse(bytes: &[u8]) -> Result<(Header, &[u8], &[u8])> {
    let h = Header::parse(bytes)?;
    let z_end = HEADER_LEN + h.z_payload_len as usize;
    let y_end = z_end + h.y_payload_len as usize;
    if bytes.len() < z_end {
        return Err(Error::Truncated {
            offset: bytes.len(),
            what: "z payload",
        });
    }
    if bytes.len() < y_end {
        return Err(Error::Truncated {
            offset: bytes.len(),
            what: "y payload",
        });
    }
    if bytes.len() > y_end {
        return Err(Error::Format(format!("{} trailing bytes", bytes.len() - y_end)));
    }
    Ok((h, &bytes[HEADER_LEN..z_end], &bytes[z_end..y_end]))
}

/// Cumulative frequency table over `[s_min, s_max]`, optionally followed by
/// an escape symbol `s_max + 1`. `cum[0] = 0`, `cum[len] = 2^16` and every
/// symbol has mass at least 1.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CdfTable {
    pub s_min: i32,
    pub s_max: i32,
    pub escape: bool,
    pub cum: Vec<u32>,
}

impl CdfTable {
    /// Quantizes probabilities of `s_min, s_min + 1, ...` to integer counts.
    /// With `escape`, the remaining mass goes to the escape symbol.
    pub fn from_probabilities(s_min: i32, probs: &[f64], escape: bool) -> Result<CdfTable> {
        let n = probs.len() + escape as usize;
        if probs.is_empty() || n > MAX_TABLE_SYMBOLS {
            return Err(Error::RangeOverflow {
                min: s_min as i64,
                max: s_min as i64 + probs.len() as i64 - 1,
            });
        }
        let mut p: Vec<f64> = probs.iter().map(|&v| if v.is_finite() { v.max(0.0) } else { 0.0 }).collect();
        if escape {
            p.push((1.0 - probs.iter().sum::<f64>()).max(0.0));
        }
        let total: f64 = p.iter().sum();
        let scale = if total > 0.0 { TOTAL_MASS as f64 / total } else { 0.0 };
        let targets: Vec<f64> = p.iter().map(|v| v * scale).collect();
        let mut counts: Vec<i64> = targets.iter().map(|&t| (t.round() as i64).max(1)).collect();
        // Settle the residue one count at a time on the symbol furthest from
        // its exact target, so no count drifts far; lowest index wins ties.
        let mut diff = TOTAL_MASS as i64 - counts.iter().sum::<i64>();
        while diff != 0 {
            let pick = if diff < 0 {
                (0..n)
                    .filter(|&i| counts[i] > 1)
                    .max_by(|&a, &b| {
                        let (da, db) = (counts[a] as f64 - targets[a], counts[b] as f64 - targets[b]);
                        da.total_cmp(&db).then(b.cmp(&a))
                    })
            } else {
                (0..n).min_by(|&a, &b| {
                    let (da, db) = (counts[a] as f64 - targets[a], counts[b] as f64 - targets[b]);
                    da.total_cmp(&db).then(a.cmp(&b))
                })
            };
            let i = pick.ok_or(Error::RangeOverflow {
                min: s_min as i64,
                max: s_min as i64 + probs.len() as i64 - 1,
            })?;
            counts[i] += diff.signum();
            diff -= diff.signum();
        }
        let mut cum = Vec::with_capacity(n + 1);
        let mut acc = 0u32;
        cum.push(0);
        for c in counts {
            acc += c as u32;
            cum.push(acc);
        }
        debug_assert_eq!(acc, TOTAL_MASS);
        Ok(CdfTable {
            s_min,
            s_max: s_min + probs.len() as i32 - 1,
            escape,
            cum,
        })
    }

    pub fn uniform(n: usize) -> Result<CdfTable> {
        Self::from_probabilities(0, &vec![1.0 / n as f64; n], false)
    }

    pub fn symbol_count(&self) -> usize {
        self.cum.len() - 1
    }

    pub fn escape_symbol(&self) -> Option<i32> {
        self.escape.then_some(self.s_max + 1)
    }

    /// Index of `symbol` in the alphabet, escape included.
    pub fn index_of(&self, symbol: i32) -> Result<usize> {
        let hi = self.s_max + self.escape as i32;
        if symbol < self.s_min || symbol > hi {
            return Err(Error::Accounting {
                symbol,
                min: self.s_min,
                max: hi,
            });
        }
        Ok((symbol - self.s_min) as usize)
    }

    pub fn mass(&self, symbol: i32) -> Result<u32> {
        let i = self.index_of(symbol)?;
        Ok(self.cum[i + 1] - self.cum[i])
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.cum.len() >= 2
            && self.cum[0] == 0
            && *self.cum.last().expect("non-empty") == TOTAL_MASS
            && self.cum.windows(2).all(|w| w[1] > w[0])
            && self.s_max >= self.s_min
            && (self.s_max - self.s_min) as usize + 1 + self.escape as usize == self.symbol_count();
        if ok {
            Ok(())
        } else {
            Err(Error::Format("malformed cdf table".into()))
        }
    }
}

/// All tables needed to code one image: the nibble table, one table per `z`
/// channel, then one per sigma bucket.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TableSet {
    pub tables: Vec<CdfTable>,
    pub z_channels: usize,
}

const BLOB_MAGIC: &[u8; 4] = b"CDFT";
const BLOB_VERSION: u16 = 1;

impl TableSet {
    pub fn z_table(&self, channel: usize) -> u32 {
        1 + channel as u32
    }

    pub fn y_table(&self, bucket: usize) -> u32 {
        (1 + self.z_channels + bucket) as u32
    }

    pub fn get(&self, id: u32) -> Result<&CdfTable> {
        self.tables
            .get(id as usize)
            .ok_or_else(|| Error::Format(format!("table id {id} out of range ({} tables)", self.tables.len())))
    }

    /// Flat serialization handed to entropy coders. All integers are
    /// little-endian:
    ///
    /// `"CDFT" u16 version, u32 z_channels, u32 table_count`, then per table
    /// `i32 s_min, u16 symbol_count (escape included), u8 flags (bit 0:
    /// escape), u16 interior cumulative counts cum[1..symbol_count]`.
    pub fn to_blob(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(BLOB_MAGIC);
        out.extend_from_slice(&BLOB_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.z_channels as u32).to_le_bytes());
        out.extend_from_slice(&(self.tables.len() as u32).to_le_bytes());
        for t in &self.tables {
            out.extend_from_slice(&t.s_min.to_le_bytes());
            out.extend_from_slice(&(t.symbol_count() as u16).to_le_bytes());
            out.push(t.escape as u8);
            for &c in &t.cum[1..t.symbol_count()] {
                out.extend_from_slice(&(c as u16).to_le_bytes());
            }
        }
        out
    }

    pub fn from_blob(blob: &[u8]) -> Result<TableSet> {
        let mut r = Reader { bytes: blob, pos: 0 };
        if r.take(4, "table blob magic")? != BLOB_MAGIC {
            return Err(Error::Format("bad table blob magic".into()));
        }
        let version = r.u16()?;
        if version != BLOB_VERSION {
            return Err(Error::Format(format!("unsupported table blob version {version}")));
        }
        let z_channels = r.u32()? as usize;
        let count = r.u32()? as usize;
        let mut tables = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let s_min = r.u32()? as i32;
            let n = r.u16()? as usize;
            let escape = match r.take(1, "table flags")?[0] {
                0 => false,
                1 => true,
                f => return Err(Error::Format(format!("unknown table flags {f}"))),
            };
            if n == 0 || (escape && n < 2) {
                return Err(Error::Format("table without symbols".into()));
            }
            let mut cum = Vec::with_capacity(n + 1);
            cum.push(0);
            for _ in 1..n {
                cum.push(r.u16()? as u32);
            }
            cum.push(TOTAL_MASS);
            let t = CdfTable {
                s_min,
                s_max: s_min + (n - escape as usize) as i32 - 1,
                escape,
                cum,
            };
            t.validate()?;
            tables.push(t);
        }
        if r.pos != blob.len() {
            return Err(Error::Format("trailing bytes in table blob".into()));
        }
        Ok(TableSet { tables, z_channels })
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &'static str) -> Result<&'a [u8]> {
        let s = self.bytes.get(self.pos..self.pos + n).ok_or(Error::Truncated {
            offset: self.bytes.len(),
            what,
        })?;
        self.pos += n;
        Ok(s)
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, "table blob")?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, "table blob")?.try_into().expect("4 bytes")))
    }
}

/// Representative scale of every bucket, log-spaced over
/// `[SIGMA_FLOOR, SIGMA_MAX]`.
pub fn sigma_buckets() -> Vec<f64> {
    let (lo, hi) = (libm::log(SIGMA_FLOOR), libm::log(SIGMA_MAX));
    (0..SIGMA_BUCKETS)
        .map(|i| libm::exp(lo + (hi - lo) * i as f64 / (SIGMA_BUCKETS - 1) as f64))
        .collect()
}

/// Bucket nearest to `sigma` in log scale; ties go up. Out-of-range scales
/// take the end buckets.
pub fn sigma_bucket(sigma: f64, buckets: &[f64]) -> usize {
    buckets
        .windows(2)
        .take_while(|w| sigma >= libm::sqrt(w[0] * w[1]))
        .count()
}

fn y_table(sigma: f64, delta_y: f64) -> Result<CdfTable> {
    let reach = libm::ceil(TAIL_SIGMAS * sigma / delta_y).clamp(1.0, SYMBOL_LIMIT as f64) as i32;
    let probs: Vec<f64> = (-reach..=reach)
        .map(|s| gaussian_pmf(s as f64 * delta_y, delta_y, sigma))
        .collect();
    CdfTable::from_probabilities(-reach, &probs, true)
}

fn z_table(prior: &FactorizedPrior, channel: usize, delta_z: f64) -> Result<CdfTable> {
    let (q_lo, q_hi) = prior.quantiles(channel, Z_TAIL_MASS);
    let lo = libm::floor(q_lo / delta_z).clamp(-SYMBOL_LIMIT as f64, SYMBOL_LIMIT as f64) as i32;
    let hi = libm::ceil(q_hi / delta_z).clamp(-SYMBOL_LIMIT as f64, SYMBOL_LIMIT as f64) as i32;
    let hi = hi.max(lo);
    let probs: Vec<f64> = (lo..=hi)
        .map(|s| prior.pmf(channel, s as f64 * delta_z, delta_z))
        .collect();
    CdfTable::from_probabilities(lo, &probs, true)
}

/// Tables for one `(decoder, steps)` pair. The decoder side rebuilds them
/// from the header alone; `y` table selection then needs only the decoded
/// `z` (through [`y_table_ids`]).
pub fn build_cdf_tables(decoder: &Decoder, steps: QuantSteps) -> Result<TableSet> {
    steps.validate()?;
    let mut tables = vec![CdfTable::uniform(16)?];
    let z_channels = decoder.prior.channels;
    for c in 0..z_channels {
        tables.push(z_table(&decoder.prior, c, steps.delta_z)?);
    }
    for s in sigma_buckets() {
        tables.push(y_table(s, steps.delta_y)?);
    }
    Ok(TableSet { tables, z_channels })
}

pub fn z_table_ids(tables: &TableSet, z_shape: [usize; 4]) -> Vec<u32> {
    let [b, c, h, w] = z_shape;
    (0..b * c * h * w).map(|i| tables.z_table((i / (h * w)) % c)).collect()
}

pub fn y_table_ids(tables: &TableSet, sigma: &Tensor) -> Vec<u32> {
    let buckets = sigma_buckets();
    sigma
        .data()
        .iter()
        .map(|&s| tables.y_table(sigma_bucket(s, &buckets)))
        .collect()
}

/// Symbols paired with the table each is coded with.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct SymbolStream {
    pub symbols: Vec<i32>,
    pub table_ids: Vec<u32>,
}

impl SymbolStream {
    pub fn len(&self) -> usize {
        self.symbols.len()
    }

    pub fn is_empty(&self) -> bool {
        self.symbols.is_empty()
    }

    pub fn push(&mut self, symbol: i32, table: u32) {
        self.symbols.push(symbol);
        self.table_ids.push(table);
    }

    /// Flat file form: `"SYMS"`, little-endian `u32` count, then `count`
    /// pairs of little-endian `i32` symbol and `u32` table id.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(8 + 8 * self.len());
        out.extend_from_slice(b"SYMS");
        out.extend_from_slice(&(self.len() as u32).to_le_bytes());
        for (s, t) in self.symbols.iter().zip(&self.table_ids) {
            out.extend_from_slice(&s.to_le_bytes());
            out.extend_from_slice(&t.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<SymbolStream> {
        if bytes.len() < 8 || &bytes[..4] != b"SYMS" {
            return Err(Error::Format("not a symbol file".into()));
        }
        let n = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes")) as usize;
        if bytes.len() != 8 + 8 * n {
            return Err(Error::Truncated {
                offset: bytes.len(),
                what: "symbol file body",
            });
        }
        let mut s = SymbolStream::default();
        for c in bytes[8..].chunks_exact(8) {
            s.push(
                i32::from_le_bytes(c[..4].try_into().expect("4 bytes")),
                u32::from_le_bytes(c[4..].try_into().expect("4 bytes")),
            );
        }
        Ok(s)
    }
}

/// A latent tensor's symbols split into the primary stream (one symbol per
/// element, table known in advance) and the escape stream (nibbles of every
/// escaped value, in element order).
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct LatentStreams {
    pub primary: SymbolStream,
    pub escapes: SymbolStream,
}

/// Maps latent symbols to coder symbols, escaping out-of-range values.
pub fn latent_streams(symbols: &[i32], table_ids: &[u32], tables: &TableSet) -> Result<LatentStreams> {
    if symbols.len() != table_ids.len() {
        return Err(Error::Dimension("symbols and table ids differ in length".into()));
    }
    let mut out = LatentStreams::default();
    for (&s, &t) in symbols.iter().zip(table_ids) {
        let table = tables.get(t)?;
        if (table.s_min..=table.s_max).contains(&s) {
            out.primary.push(s, t);
            continue;
        }
        let esc = table.escape_symbol().ok_or(Error::Accounting {
            symbol: s,
            min: table.s_min,
            max: table.s_max,
        })?;
        out.primary.push(esc, t);
        let bits = s as u32;
        for k in (0..ESCAPE_NIBBLES).rev() {
            out.escapes.push(((bits >> (4 * k)) & 0xF) as i32, NIBBLE_TABLE);
        }
    }
    Ok(out)
}

/// Number of escaped values in a decoded primary stream.
pub fn escape_count(primary: &[i32], table_ids: &[u32], tables: &TableSet) -> Result<usize> {
    let mut n = 0;
    for (&s, &t) in primary.iter().zip(table_ids) {
        if tables.get(t)?.escape_symbol() == Some(s) {
            n += 1;
        }
    }
    Ok(n)
}

/// Inverse of [`latent_streams`].
pub fn merge_streams(primary: &[i32], table_ids: &[u32], escapes: &[i32], tables: &TableSet) -> Result<Vec<i32>> {
    let mut nibbles = escapes.iter();
    let mut out = Vec::with_capacity(primary.len());
    for (&s, &t) in primary.iter().zip(table_ids) {
        let table = tables.get(t)?;
        if table.escape_symbol() == Some(s) {
            let mut bits = 0u32;
            for _ in 0..ESCAPE_NIBBLES {
                let n = *nibbles.next().ok_or(Error::Truncated {
                    offset: escapes.len(),
                    what: "escape nibbles",
                })?;
                if !(0..16).contains(&n) {
                    return Err(Error::Format(format!("escape nibble {n} out of range")));
                }
                bits = (bits << 4) | n as u32;
            }
            out.push(bits as i32);
        } else {
            table.index_of(s)?;
            out.push(s);
        }
    }
    if nibbles.next().is_some() {
        return Err(Error::Format("unused escape nibbles".into()));
    }
    Ok(out)
}

/// Ideal code length `sum(-log2(mass / 2^16))` of a stream; no coder needed.
pub fn theoretical_rate_report(stream: &SymbolStream, tables: &TableSet) -> Result<f64> {
    let mut bits = 0.0;
    for (&s, &t) in stream.symbols.iter().zip(&stream.table_ids) {
        let m = tables.get(t)?.mass(s)?;
        bits += PRECISION_BITS as f64 - (m as f64).log2();
    }
    Ok(bits)
}

/// Per-symbol bound on the excess code length caused by integer counts for a
/// table of `symbols` entries: `log2(1 + 2 * symbols / 2^16)`.
pub fn table_quantization_bound(symbols: usize) -> f64 {
    (1.0 + 2.0 * symbols as f64 / TOTAL_MASS as f64).log2()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::entropy::normal_cdf;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn header() -> Header {
        Header {
            version: VERSION_RAW,
            model_id: [1, 2, 3, 4, 5, 6, 7, 8],
            height: 512,
            width: 768,
            delta_z_index: 5,
            delta_y: 1.37,
            z_payload_len: 3,
            y_payload_len: 2,
        }
    }

    #[test]
    fn header_round_trip_and_layout() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..50 {
            let h = Header {
                version: if rng.gen() { VERSION_RAW } else { VERSION_RANGE_CODED },
                model_id: rng.gen(),
                height: rng.gen(),
                width: rng.gen(),
                delta_z_index: rng.gen_range(0..7),
                delta_y: rng.gen_range(0.25f32..4.0),
                z_payload_len: rng.gen(),
                y_payload_len: rng.gen(),
            };
            assert_eq!(Header::parse(&h.serialize()).unwrap(), h);
        }
        let b = header().serialize();
        assert_eq!(&b[13..17], &[0x02, 0x00, 0x03, 0x00]);
        assert_eq!(&b[18..22], &1.37f32.to_le_bytes());
    }

    #[test]
    fn parse_rejects_bad_streams() {
        let h = header();
        let bytes = serialize(&h, &[1, 2, 3], &[4, 5]).unwrap();
        let (back, z, y) = parse(&bytes).unwrap();
        assert_eq!((back, z, y), (h, &[1u8, 2, 3][..], &[4u8, 5][..]));
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(parse(&bad), Err(Error::Format(_))));
        let mut bad = bytes.clone();
        bad[4] = 9;
        assert!(matches!(parse(&bad), Err(Error::Format(_))));
        match parse(&bytes[..bytes.len() - 1]) {
            Err(Error::Truncated { offset, .. }) => assert_eq!(offset, bytes.len() - 1),
            other => panic!("{other:?}"),
        }
        assert!(matches!(parse(&bytes[..10]), Err(Error::Truncated { offset: 10, .. })));
        let mut bad = bytes;
        bad[17] = 7;
        assert!(parse(&bad).is_err());
    }

    #[test]
    fn delta_field_overhead() {
        // One index byte and one binary32; conceptually 3 + 32 bits.
        let conceptual_bits: f64 = 3.0 + 32.0;
        let bpp = conceptual_bits / (512.0 * 768.0);
        assert!((bpp - 8.9e-5).abs() < 1e-6);
        let stored = 8.0 * 5.0 / (512.0 * 768.0);
        assert!(stored - bpp <= 5.0 / (512.0 * 768.0) + 1e-12);
        let whole = 8.0 * HEADER_LEN as f64 / (512.0 * 768.0);
        assert!(whole < 1e-3);
    }

    #[test]
    fn uniform_table_counts() {
        let t = CdfTable::from_probabilities(0, &[0.25; 4], false).unwrap();
        assert_eq!(t.cum, vec![0, 16384, 32768, 49152, 65536]);
        assert_eq!(theoretical_rate_report(&SymbolStream::default(), &TableSet { tables: vec![t], z_channels: 0 }).unwrap(), 0.0);
    }

    #[test]
    fn gaussian_table_matches_oracle() {
        let probs: Vec<f64> = (-16..=16).map(|s| gaussian_pmf(s as f64, 1.0, 1.0)).collect();
        let t = CdfTable::from_probabilities(-16, &probs, true).unwrap();
        let oracle = normal_cdf(0.5) - normal_cdf(-0.5);
        assert!((oracle - 0.382925).abs() < 1e-6);
        // 24 floored tail symbols hand back about 24 counts, spread over the
        // 9 symbols with real mass: 2.37 counts off at symbol 0.
        let err = t.mass(0).unwrap() as f64 - oracle * 65536.0;
        assert!((err + 2.3677).abs() < 1e-3, "{err}");
        let floored = (0..t.symbol_count()).filter(|&i| t.cum[i + 1] - t.cum[i] == 1).count();
        assert_eq!(floored, 25);
        assert!(err.abs() <= 0.5 + floored as f64 / 9.0);
        t.validate().unwrap();
    }

    #[test]
    fn tiny_masses_are_floored_and_total_is_exact() {
        let mut probs = vec![1e-12; 300];
        probs[150] = 1.0;
        let t = CdfTable::from_probabilities(-150, &probs, true).unwrap();
        t.validate().unwrap();
        assert!((0..t.symbol_count()).all(|i| t.cum[i + 1] > t.cum[i]));
        assert!(CdfTable::from_probabilities(0, &vec![0.0; MAX_TABLE_SYMBOLS + 1], false).is_err());
    }

    #[test]
    fn half_mass_costs_one_bit() {
        let t = CdfTable::from_probabilities(0, &[0.5, 0.5], false).unwrap();
        let set = TableSet { tables: vec![t], z_channels: 0 };
        let mut s = SymbolStream::default();
        s.push(1, 0);
        assert_eq!(theoretical_rate_report(&s, &set).unwrap(), 1.0);
        s.push(2, 0);
        assert!(matches!(theoretical_rate_report(&s, &set), Err(Error::Accounting { symbol: 2, .. })));
    }

    #[test]
    fn blob_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut tables = vec![CdfTable::uniform(16).unwrap()];
        for _ in 0..20 {
            let n = rng.gen_range(1..300);
            let probs: Vec<f64> = (0..n).map(|_| rng.gen_range(0.0..1.0)).collect();
            let total: f64 = probs.iter().sum::<f64>() * rng.gen_range(1.0..1.2);
            let probs: Vec<f64> = probs.iter().map(|p| p / total).collect();
            tables.push(CdfTable::from_probabilities(rng.gen_range(-300..0), &probs, rng.gen()).unwrap());
        }
        let set = TableSet { tables, z_channels: 3 };
        let blob = set.to_blob();
        assert_eq!(TableSet::from_blob(&blob).unwrap(), set);
        assert!(TableSet::from_blob(&blob[..blob.len() - 1]).is_err());
        let mut bad = blob;
        bad[0] = 0;
        assert!(TableSet::from_blob(&bad).is_err());
    }

    #[test]
    fn escapes_round_trip() {
        let probs = vec![0.2; 4];
        let t = CdfTable::from_probabilities(-2, &probs, true).unwrap();
        let set = TableSet {
            tables: vec![CdfTable::uniform(16).unwrap(), t],
            z_channels: 0,
        };
        let symbols = vec![0, -2, 1, 2, -3, 1000, i32::MIN, i32::MAX, 1];
        let ids = vec![1; symbols.len()];
        let s = latent_streams(&symbols, &ids, &set).unwrap();
        assert_eq!(s.primary.len(), symbols.len());
        assert_eq!(s.escapes.len(), 5 * ESCAPE_NIBBLES);
        assert_eq!(escape_count(&s.primary.symbols, &ids, &set).unwrap(), 5);
        let back = merge_streams(&s.primary.symbols, &ids, &s.escapes.symbols, &set).unwrap();
        assert_eq!(back, symbols);
        assert!(merge_streams(&s.primary.symbols, &ids, &s.escapes.symbols[1..], &set).is_err());
    }

    #[test]
    fn symbol_file_round_trip() {
        let mut s = SymbolStream::default();
        s.push(-5, 3);
        s.push(7, 0);
        let b = s.to_bytes();
        assert_eq!(&b[..8], b"SYMS\x02\x00\x00\x00");
        assert_eq!(SymbolStream::from_bytes(&b).unwrap(), s);
        assert!(SymbolStream::from_bytes(&b[..b.len() - 1]).is_err());
    }

    #[test]
    fn sigma_bucket_selection() {
        let b = sigma_buckets();
        assert_eq!(b.len(), SIGMA_BUCKETS);
        assert!((b[0] - SIGMA_FLOOR).abs() < 1e-12 && (b[63] - SIGMA_MAX).abs() < 1e-9);
        assert_eq!(sigma_bucket(0.11, &b), 0);
        assert_eq!(sigma_bucket(1e9, &b), 63);
        assert_eq!(sigma_bucket(0.01, &b), 0);
        let ratio = b[1] / b[0];
        for s in [0.2, 1.0, 3.7, 100.0] {
            let i = sigma_bucket(s, &b);
            assert!((s / b[i]).ln().abs() <= ratio.ln() / 2.0 + 1e-12, "{s} -> {}", b[i]);
        }
    }
}
