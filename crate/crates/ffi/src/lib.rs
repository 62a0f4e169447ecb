//! C ABI over the `cedit` library.
//!
//! Objects are opaque handles released with their `_free` function. Every
//! fallible call returns a [`CeditStatus`]; on failure the message is kept
//! per thread and read with [`cedit_last_error`]. Byte buffers returned to C
//! are [`CeditBytes`] and must be released with [`cedit_bytes_free`].
//!
//! An external entropy coder plugs in through [`cedit_coder_new`]: it
//! receives the serialized table blob and a symbol stream and writes its
//! payload through [`cedit_sink_write`].

#![allow(clippy::missing_safety_doc)]

use std::cell::RefCell;
use std::ffi::{c_char, c_void, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use cedit::bitstream::{self, Header, SymbolStream, TableSet, HEADER_LEN};
use cedit::codec::{self, EntropyCoder, RawCoder};
use cedit::editing::{edit, EditConfig, EditResult, EncoderVariant, Relaxation};
use cedit::models::ModelParams;
use cedit::objectives::{DistortionRegistry, EditTarget, QuantSteps};
use cedit::tensor::Tensor;
use cedit::Error;

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CeditStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Io = 3,
    Format = 4,
    ModelMismatch = 5,
    Numeric = 6,
    Coder = 7,
    Accounting = 8,
    Panic = 9,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).expect("nul bytes removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(e: &Error) -> CeditStatus {
    match e {
        Error::Io { .. } => CeditStatus::Io,
        Error::Format(_) | Error::Truncated { .. } => CeditStatus::Format,
        Error::ModelMismatch { .. } => CeditStatus::ModelMismatch,
        Error::Numeric(_) | Error::NanLoss { .. } | Error::NanTraining { .. } => CeditStatus::Numeric,
        Error::Coder(_) => CeditStatus::Coder,
        Error::Accounting { .. } | Error::RangeOverflow { .. } => CeditStatus::Accounting,
        Error::Dimension(_) | Error::Domain(_) | Error::Config(_) => CeditStatus::InvalidArgument,
    }
}

enum Fail {
    Null(&'static str),
    Arg(String),
    Lib(Error),
}

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail::Lib(e)
    }
}

fn guard(f: impl FnOnce() -> Result<(), Fail>) -> CeditStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            LAST_ERROR.with(|e| *e.borrow_mut() = None);
            CeditStatus::Ok
        }
        Ok(Err(Fail::Null(what))) => {
            set_error(format!("null pointer: {what}"));
            CeditStatus::NullPointer
        }
        Ok(Err(Fail::Arg(msg))) => {
            set_error(msg);
            CeditStatus::InvalidArgument
        }
        Ok(Err(Fail::Lib(e))) => {
            set_error(e.to_string());
            status_of(&e)
        }
        Err(p) => {
            let msg = p
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| p.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            set_error(format!("panic: {msg}"));
            CeditStatus::Panic
        }
    }
}

unsafe fn opt_ref<'a, T>(p: *const T, what: &'static str) -> Result<&'a T, Fail> {
    p.as_ref().ok_or(Fail::Null(what))
}

unsafe fn slice<'a, T>(p: *const T, len: usize, what: &'static str) -> Result<&'a [T], Fail> {
    if len == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(Fail::Null(what));
    }
    Ok(std::slice::from_raw_parts(p, len))
}

unsafe fn put<T>(out: *mut T, v: T, what: &'static str) -> Result<(), Fail> {
    if out.is_null() {
        return Err(Fail::Null(what));
    }
    out.write(v);
    Ok(())
}

/// Message of the last failed call on this thread, or null. Valid until the
/// next call on the same thread.
#[no_mangle]
pub extern "C" fn cedit_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Library-owned bytes.
#[repr(C)]
pub struct CeditBytes {
    pub data: *mut u8,
    pub len: usize,
}

impl CeditBytes {
    fn from_vec(v: Vec<u8>) -> Self {
        let b = v.into_boxed_slice();
        let len = b.len();
        let data = Box::into_raw(b) as *mut u8;
        Self { data, len }
    }

    fn empty() -> Self {
        Self {
            data: ptr::null_mut(),
            len: 0,
        }
    }
}

#[no_mangle]
pub unsafe extern "C" fn cedit_bytes_free(bytes: *mut CeditBytes) {
    if let Some(b) = bytes.as_mut() {
        if !b.data.is_null() {
            drop(Box::from_raw(ptr::slice_from_raw_parts_mut(b.data, b.len)));
        }
        *b = CeditBytes::empty();
    }
}

pub struct CeditModel(ModelParams);

#[no_mangle]
pub unsafe extern "C" fn cedit_model_load(path: *const c_char, out: *mut *mut CeditModel) -> CeditStatus {
    guard(|| {
        if path.is_null() {
            return Err(Fail::Null("path"));
        }
        let p = CStr::from_ptr(path).to_str().map_err(|_| Fail::Arg("path is not UTF-8".into()))?;
        let m = cedit::checkpoint::load(std::path::Path::new(p))?;
        put(out, Box::into_raw(Box::new(CeditModel(m))), "out")
    })
}

#[no_mangle]
pub unsafe extern "C" fn cedit_model_from_bytes(data: *const u8, len: usize, out: *mut *mut CeditModel) -> CeditStatus {
    guard(|| {
        let m = cedit::checkpoint::from_bytes(slice(data, len, "data")?)?;
        put(out, Box::into_raw(Box::new(CeditModel(m))), "out")
    })
}

#[no_mangle]
pub unsafe extern "C" fn cedit_model_free(model: *mut CeditModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Writes the 8-byte identifier a bitstream records (the decoder hash).
#[no_mangle]
pub unsafe extern "C" fn cedit_model_decoder_id(model: *const CeditModel, out: *mut u8) -> CeditStatus {
    guard(|| {
        let m = opt_ref(model, "model")?;
        if out.is_null() {
            return Err(Fail::Null("out"));
        }
        ptr::copy_nonoverlapping(m.0.decoder_id().as_ptr(), out, 8);
        Ok(())
    })
}

/// Callback that codes `n` symbols; writes its payload with
/// [`cedit_sink_write`] and returns 0 on success.
pub type CeditEncodeFn = Option<
    unsafe extern "C" fn(
        ctx: *mut c_void,
        tables: *const u8,
        tables_len: usize,
        symbols: *const i32,
        table_ids: *const u32,
        n: usize,
        sink: *mut CeditSink,
    ) -> i32,
>;

/// Callback that decodes `n` symbols (the i-th with table `table_ids[i]`)
/// into `symbols_out`; returns 0 on success.
pub type CeditDecodeFn = Option<
    unsafe extern "C" fn(
        ctx: *mut c_void,
        tables: *const u8,
        tables_len: usize,
        payload: *const u8,
        payload_len: usize,
        table_ids: *const u32,
        n: usize,
        symbols_out: *mut i32,
    ) -> i32,
>;

pub struct CeditSink(Vec<u8>);

#[no_mangle]
pub unsafe extern "C" fn cedit_sink_write(sink: *mut CeditSink, data: *const u8, len: usize) -> CeditStatus {
    guard(|| {
        let s = sink.as_mut().ok_or(Fail::Null("sink"))?;
        s.0.extend_from_slice(slice(data, len, "data")?);
        Ok(())
    })
}

pub struct CeditCoder {
    version: u8,
    encode: unsafe extern "C" fn(*mut c_void, *const u8, usize, *const i32, *const u32, usize, *mut CeditSink) -> i32,
    decode: unsafe extern "C" fn(*mut c_void, *const u8, usize, *const u8, usize, *const u32, usize, *mut i32) -> i32,
    ctx: *mut c_void,
}

// The registering side promises the callbacks may be called from any thread.
unsafe impl Send for CeditCoder {}
unsafe impl Sync for CeditCoder {}

impl EntropyCoder for CeditCoder {
    fn version(&self) -> u8 {
        self.version
    }

    fn encode(&self, stream: &SymbolStream, tables: &TableSet) -> cedit::Result<Vec<u8>> {
        let blob = tables.to_blob();
        let mut sink = CeditSink(Vec::new());
        let rc = unsafe {
            (self.encode)(
                self.ctx,
                blob.as_ptr(),
                blob.len(),
                stream.symbols.as_ptr(),
                stream.table_ids.as_ptr(),
                stream.len(),
                &mut sink,
            )
        };
        if rc != 0 {
            return Err(Error::Coder(format!("encode callback returned {rc}")));
        }
        Ok(sink.0)
    }

    fn decode(&self, bytes: &[u8], tables: &TableSet, table_ids: &[u32]) -> cedit::Result<Vec<i32>> {
        let blob = tables.to_blob();
        let mut out = vec![0i32; table_ids.len()];
        let rc = unsafe {
            (self.decode)(
                self.ctx,
                blob.as_ptr(),
                blob.len(),
                bytes.as_ptr(),
                bytes.len(),
                table_ids.as_ptr(),
                table_ids.len(),
                out.as_mut_ptr(),
            )
        };
        if rc != 0 {
            return Err(Error::Coder(format!("decode callback returned {rc}")));
        }
        for (&s, &t) in out.iter().zip(table_ids) {
            tables.get(t)?.index_of(s)?;
        }
        Ok(out)
    }
}

/// Registers an entropy coder. `version` is the stream version byte it
/// produces (1 for range-coded streams). `ctx` is passed back unchanged.
#[no_mangle]
pub unsafe extern "C" fn cedit_coder_new(
    version: u8,
    encode: CeditEncodeFn,
    decode: CeditDecodeFn,
    ctx: *mut c_void,
    out: *mut *mut CeditCoder,
) -> CeditStatus {
    guard(|| {
        let (Some(encode), Some(decode)) = (encode, decode) else {
            return Err(Fail::Null("callback"));
        };
        if version != bitstream::VERSION_RANGE_CODED && version != bitstream::VERSION_RAW {
            return Err(Fail::Arg(format!("unknown stream version {version}")));
        }
        put(
            out,
            Box::into_raw(Box::new(CeditCoder {
                version,
                encode,
                decode,
                ctx,
            })),
            "out",
        )
    })
}

#[no_mangle]
pub unsafe extern "C" fn cedit_coder_free(coder: *mut CeditCoder) {
    if !coder.is_null() {
        drop(Box::from_raw(coder));
    }
}

unsafe fn coder_or_raw<'a>(coder: *const CeditCoder) -> &'a dyn EntropyCoder {
    match coder.as_ref() {
        Some(c) => c,
        None => &RawCoder,
    }
}

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum CeditRelaxation {
    Sga = 0,
    Aun = 1,
}

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CeditEditParams {
    pub lambda: f64,
    pub iterations: u32,
    pub learning_rate: f64,
    pub seed: u64,
    pub grid_search: bool,
    pub adapt_delta_y: bool,
    pub relaxation: CeditRelaxation,
    /// Start from the fine-tuned encoder.
    pub finetuned_encoder: bool,
    /// Compress the full-budget temperature schedule into `iterations`.
    pub rescale_schedule: bool,
}

impl CeditEditParams {
    fn config(&self) -> Result<(EditTarget, EditConfig), Fail> {
        if !(self.lambda > 0.0 && self.lambda.is_finite()) {
            return Err(Fail::Arg(format!("lambda {} must be positive", self.lambda)));
        }
        let base = EditConfig {
            learning_rate: self.learning_rate,
            grid_search_enabled: self.grid_search,
            adapt_delta_y: self.adapt_delta_y,
            relaxation: match self.relaxation {
                CeditRelaxation::Sga => Relaxation::Sga,
                CeditRelaxation::Aun => Relaxation::Aun,
            },
            encoder: if self.finetuned_encoder {
                EncoderVariant::Finetuned
            } else {
                EncoderVariant::Base
            },
            seed: self.seed,
            ..EditConfig::enhanced()
        };
        let n = self.iterations as usize;
        let cfg = if self.rescale_schedule {
            base.with_rescaled_iterations(n)
        } else {
            EditConfig { iterations: n, ..base }
        };
        Ok((EditTarget::mse(self.lambda), cfg))
    }
}

#[no_mangle]
pub unsafe extern "C" fn cedit_edit_params_default(out: *mut CeditEditParams) -> CeditStatus {
    guard(|| {
        let d = EditConfig::enhanced();
        put(
            out,
            CeditEditParams {
                lambda: 0.015,
                iterations: d.iterations as u32,
                learning_rate: d.learning_rate,
                seed: 0,
                grid_search: true,
                adapt_delta_y: true,
                relaxation: CeditRelaxation::Sga,
                finetuned_encoder: false,
                rescale_schedule: true,
            },
            "out",
        )
    })
}

fn image_from_rgb(pixels: &[u8], height: usize, width: usize) -> Result<Tensor, Fail> {
    if pixels.len() != height * width * 3 {
        return Err(Fail::Arg(format!(
            "{} bytes for a {height}x{width} RGB image",
            pixels.len()
        )));
    }
    let mut data = vec![0.0; pixels.len()];
    for (i, px) in pixels.chunks_exact(3).enumerate() {
        for c in 0..3 {
            data[c * height * width + i] = px[c] as f64;
        }
    }
    Ok(Tensor::from_vec([1, 3, height, width], data)?)
}

fn rgb_from_image(t: &Tensor) -> Vec<u8> {
    let (h, w) = (t.height(), t.width());
    let mut out = Vec::with_capacity(h * w * 3);
    for y in 0..h {
        for x in 0..w {
            for c in 0..3 {
                out.push(t.at(0, c, y, x).round().clamp(0.0, 255.0) as u8);
            }
        }
    }
    out
}

pub struct CeditResult(EditResult);

#[repr(C)]
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct CeditMetrics {
    pub bpp: f64,
    pub mse: f64,
    pub psnr: f64,
    pub rd_cost: f64,
    pub delta_y: f64,
    pub delta_z: f64,
}

/// Edits an interleaved 8-bit RGB image (`height * width * 3` bytes).
#[no_mangle]
pub unsafe extern "C" fn cedit_edit(
    model: *const CeditModel,
    rgb: *const u8,
    height: usize,
    width: usize,
    params: *const CeditEditParams,
    out: *mut *mut CeditResult,
) -> CeditStatus {
    guard(|| {
        let m = opt_ref(model, "model")?;
        let p = opt_ref(params, "params")?;
        let x = image_from_rgb(slice(rgb, height * width * 3, "rgb")?, height, width)?;
        let (target, cfg) = p.config()?;
        let r = edit(&x, &m.0, &target, &DistortionRegistry::default(), &cfg)?;
        put(out, Box::into_raw(Box::new(CeditResult(r))), "out")
    })
}

#[no_mangle]
pub unsafe extern "C" fn cedit_result_free(result: *mut CeditResult) {
    if !result.is_null() {
        drop(Box::from_raw(result));
    }
}

#[no_mangle]
pub unsafe extern "C" fn cedit_result_metrics(result: *const CeditResult, out: *mut CeditMetrics) -> CeditStatus {
    guard(|| {
        let r = &opt_ref(result, "result")?.0;
        put(
            out,
            CeditMetrics {
                bpp: r.metrics.rate_bpp,
                mse: r.metrics.mse,
                psnr: r.metrics.psnr,
                rd_cost: r.metrics.rd_cost,
                delta_y: r.steps.delta_y,
                delta_z: r.steps.delta_z,
            },
            "out",
        )
    })
}

/// Interleaved RGB reconstruction, `height * width * 3` bytes.
#[no_mangle]
pub unsafe extern "C" fn cedit_result_reconstruction(result: *const CeditResult, out: *mut CeditBytes) -> CeditStatus {
    guard(|| {
        let r = &opt_ref(result, "result")?.0;
        put(out, CeditBytes::from_vec(rgb_from_image(&r.reconstruction)), "out")
    })
}

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CeditLatent {
    Z = 0,
    Y = 1,
}

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CeditStreamKind {
    /// One symbol per latent; out-of-range values carry the escape symbol.
    Primary = 0,
    /// Nibbles of escaped values, coded with the uniform table 0.
    Escapes = 1,
}

/// Symbol file (`SYMS` format) of one stream of a result, as handed to an
/// entropy coder, plus the table blob those table ids refer to.
#[no_mangle]
pub unsafe extern "C" fn cedit_result_stream(
    result: *const CeditResult,
    model: *const CeditModel,
    latent: CeditLatent,
    kind: CeditStreamKind,
    symbols_out: *mut CeditBytes,
    tables_out: *mut CeditBytes,
) -> CeditStatus {
    guard(|| {
        let r = &opt_ref(result, "result")?.0;
        let m = &opt_ref(model, "model")?.0;
        if symbols_out.is_null() || tables_out.is_null() {
            return Err(Fail::Null("out"));
        }
        let s = codec::symbol_streams(r, m)?;
        let l = match latent {
            CeditLatent::Z => &s.z,
            CeditLatent::Y => &s.y,
        };
        let stream = match kind {
            CeditStreamKind::Primary => &l.primary,
            CeditStreamKind::Escapes => &l.escapes,
        };
        symbols_out.write(CeditBytes::from_vec(stream.to_bytes()));
        tables_out.write(CeditBytes::from_vec(s.tables.to_blob()));
        Ok(())
    })
}

/// Writes the container for `result`; `coder` may be null for the raw
/// varint coding.
#[no_mangle]
pub unsafe extern "C" fn cedit_result_encode(
    result: *const CeditResult,
    model: *const CeditModel,
    coder: *const CeditCoder,
    out: *mut CeditBytes,
) -> CeditStatus {
    guard(|| {
        let r = &opt_ref(result, "result")?.0;
        let m = &opt_ref(model, "model")?.0;
        let bytes = codec::encode_result(r, m, coder_or_raw(coder))?;
        put(out, CeditBytes::from_vec(bytes), "out")
    })
}

/// Edit and encode in one call.
#[no_mangle]
pub unsafe extern "C" fn cedit_compress(
    model: *const CeditModel,
    rgb: *const u8,
    height: usize,
    width: usize,
    params: *const CeditEditParams,
    coder: *const CeditCoder,
    out: *mut CeditBytes,
) -> CeditStatus {
    guard(|| {
        let m = opt_ref(model, "model")?;
        let p = opt_ref(params, "params")?;
        let x = image_from_rgb(slice(rgb, height * width * 3, "rgb")?, height, width)?;
        let (target, cfg) = p.config()?;
        let c = codec::compress(&x, &m.0, &target, &DistortionRegistry::default(), &cfg, coder_or_raw(coder))?;
        put(out, CeditBytes::from_vec(c.bytes), "out")
    })
}

/// Decodes a container to interleaved RGB.
#[no_mangle]
pub unsafe extern "C" fn cedit_decompress(
    model: *const CeditModel,
    data: *const u8,
    len: usize,
    coder: *const CeditCoder,
    rgb_out: *mut CeditBytes,
    height: *mut usize,
    width: *mut usize,
) -> CeditStatus {
    guard(|| {
        let m = opt_ref(model, "model")?;
        if rgb_out.is_null() || height.is_null() || width.is_null() {
            return Err(Fail::Null("out"));
        }
        let d = codec::decompress(slice(data, len, "data")?, &m.0, coder_or_raw(coder))?;
        height.write(d.reconstruction.height());
        width.write(d.reconstruction.width());
        rgb_out.write(CeditBytes::from_vec(rgb_from_image(&d.reconstruction)));
        Ok(())
    })
}

#[repr(C)]
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct CeditHeader {
    pub version: u8,
    pub model_id: [u8; 8],
    pub height: u16,
    pub width: u16,
    pub delta_z_index: u8,
    pub delta_y: f32,
    pub z_payload_len: u32,
    pub y_payload_len: u32,
}

pub const CEDIT_HEADER_LEN: usize = 30;
const _: () = assert!(CEDIT_HEADER_LEN == HEADER_LEN);

impl From<Header> for CeditHeader {
    fn from(h: Header) -> Self {
        Self {
            version: h.version,
            model_id: h.model_id,
            height: h.height,
            width: h.width,
            delta_z_index: h.delta_z_index,
            delta_y: h.delta_y,
            z_payload_len: h.z_payload_len,
            y_payload_len: h.y_payload_len,
        }
    }
}

impl From<CeditHeader> for Header {
    fn from(h: CeditHeader) -> Self {
        Self {
            version: h.version,
            model_id: h.model_id,
            height: h.height,
            width: h.width,
            delta_z_index: h.delta_z_index,
            delta_y: h.delta_y,
            z_payload_len: h.z_payload_len,
            y_payload_len: h.y_payload_len,
        }
    }
}

/// Writes `CEDIT_HEADER_LEN` bytes to `out`.
#[no_mangle]
pub unsafe extern "C" fn cedit_header_serialize(header: *const CeditHeader, out: *mut u8) -> CeditStatus {
    guard(|| {
        let h = Header::from(*opt_ref(header, "header")?);
        let b = h.serialize();
        Header::parse(&b)?;
        if out.is_null() {
            return Err(Fail::Null("out"));
        }
        ptr::copy_nonoverlapping(b.as_ptr(), out, HEADER_LEN);
        Ok(())
    })
}

#[no_mangle]
pub unsafe extern "C" fn cedit_header_parse(data: *const u8, len: usize, out: *mut CeditHeader) -> CeditStatus {
    guard(|| {
        let h = Header::parse(slice(data, len, "data")?)?;
        put(out, h.into(), "out")
    })
}

pub struct CeditTables(TableSet);

/// Tables for a model at the steps a header stores.
#[no_mangle]
pub unsafe extern "C" fn cedit_tables_build(
    model: *const CeditModel,
    delta_y: f32,
    delta_z_index: u8,
    out: *mut *mut CeditTables,
) -> CeditStatus {
    guard(|| {
        let m = opt_ref(model, "model")?;
        let cands = cedit::editing::delta_z_candidates();
        let dz = *cands
            .get(delta_z_index as usize)
            .ok_or_else(|| Fail::Arg(format!("delta_z index {delta_z_index} out of range")))?;
        let t = bitstream::build_cdf_tables(
            &m.0.decoder,
            QuantSteps {
                delta_y: delta_y as f64,
                delta_z: dz,
            },
        )?;
        put(out, Box::into_raw(Box::new(CeditTables(t))), "out")
    })
}

#[no_mangle]
pub unsafe extern "C" fn cedit_tables_from_blob(data: *const u8, len: usize, out: *mut *mut CeditTables) -> CeditStatus {
    guard(|| {
        let t = TableSet::from_blob(slice(data, len, "data")?)?;
        put(out, Box::into_raw(Box::new(CeditTables(t))), "out")
    })
}

#[no_mangle]
pub unsafe extern "C" fn cedit_tables_blob(tables: *const CeditTables, out: *mut CeditBytes) -> CeditStatus {
    guard(|| {
        let t = opt_ref(tables, "tables")?;
        put(out, CeditBytes::from_vec(t.0.to_blob()), "out")
    })
}

#[no_mangle]
pub unsafe extern "C" fn cedit_tables_count(tables: *const CeditTables, out: *mut usize) -> CeditStatus {
    guard(|| {
        let t = opt_ref(tables, "tables")?;
        put(out, t.0.tables.len(), "out")
    })
}

#[no_mangle]
pub unsafe extern "C" fn cedit_tables_free(tables: *mut CeditTables) {
    if !tables.is_null() {
        drop(Box::from_raw(tables));
    }
}

/// Ideal code length in bits of `n` symbols under their tables.
#[no_mangle]
pub unsafe extern "C" fn cedit_theoretical_bits(
    tables: *const CeditTables,
    symbols: *const i32,
    table_ids: *const u32,
    n: usize,
    bits: *mut f64,
) -> CeditStatus {
    guard(|| {
        let t = opt_ref(tables, "tables")?;
        let stream = SymbolStream {
            symbols: slice(symbols, n, "symbols")?.to_vec(),
            table_ids: slice(table_ids, n, "table_ids")?.to_vec(),
        };
        put(bits, bitstream::theoretical_rate_report(&stream, &t.0)?, "bits")
    })
}
