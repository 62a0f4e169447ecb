use std::os::unix::fs::PermissionsExt;

use cedit::codec::{decompress, encode_result, symbol_streams, table_rate, EntropyCoder, ProcessCoder, RawCoder};
use cedit::editing::{baseline, edit, EditConfig, EncoderVariant};
use cedit::models::{Arch, ModelParams};
use cedit::objectives::{DistortionRegistry, EditTarget};
use cedit::tensor::Tensor;
use cedit::Error;

fn image(seed: u64) -> Tensor {
    let mut data = Vec::with_capacity(3 * 64 * 64);
    for c in 0..3 {
        for i in 0..64 {
            for j in 0..64 {
                let v = 128.0
                    + 60.0 * ((i as f64 * 0.11 + c as f64 + seed as f64).sin())
                    + 40.0 * ((j as f64 * 0.23 - seed as f64).cos());
                data.push(v.clamp(0.0, 255.0));
            }
        }
    }
    Tensor::from_vec([1, 3, 64, 64], data).unwrap()
}

fn model(seed: u64) -> ModelParams {
    ModelParams::new(Arch::desk(), 0.015, seed).unwrap()
}

fn short_edit() -> EditConfig {
    EditConfig {
        grid_search_enabled: false,
        ..EditConfig::enhanced().with_rescaled_iterations(15)
    }
}

#[test]
fn raw_round_trip_is_bit_exact() {
    let m = model(3);
    let x = image(1);
    let reg = DistortionRegistry::default();
    let r = edit(&x, &m, &EditTarget::mse(0.015), &reg, &short_edit()).unwrap();
    let bytes = encode_result(&r, &m, &RawCoder).unwrap();
    let d = decompress(&bytes, &m, &RawCoder).unwrap();
    assert_eq!(d.symbols_y, r.symbols_y);
    assert_eq!(d.symbols_z, r.symbols_z);
    assert_eq!(d.steps, r.steps);
    assert_eq!(d.reconstruction, r.reconstruction);
    assert_eq!((d.header.height, d.header.width), (64, 64));
}

#[test]
fn decoder_never_reads_the_encoder() {
    let m = model(4);
    let x = image(2);
    let reg = DistortionRegistry::default();
    let r = baseline(&x, &m, EncoderVariant::Base, &EditTarget::mse(0.015), &reg).unwrap();
    let bytes = encode_result(&r, &m, &RawCoder).unwrap();
    let mut stripped = m.clone();
    for p in stripped.encoder.params_mut() {
        p.iter_mut().for_each(|v| *v = f64::NAN);
    }
    stripped.finetuned = None;
    let d = decompress(&bytes, &stripped, &RawCoder).unwrap();
    assert_eq!(d.reconstruction, r.reconstruction);
}

#[test]
fn wrong_decoder_is_rejected() {
    let x = image(3);
    let reg = DistortionRegistry::default();
    let a = model(5);
    let r = baseline(&x, &a, EncoderVariant::Base, &EditTarget::mse(0.015), &reg).unwrap();
    let bytes = encode_result(&r, &a, &RawCoder).unwrap();
    assert!(matches!(decompress(&bytes, &model(6), &RawCoder), Err(Error::ModelMismatch { .. })));
}

#[test]
fn damaged_streams_fail_cleanly() {
    let m = model(7);
    let x = image(4);
    let reg = DistortionRegistry::default();
    let r = baseline(&x, &m, EncoderVariant::Base, &EditTarget::mse(0.015), &reg).unwrap();
    let bytes = encode_result(&r, &m, &RawCoder).unwrap();
    for cut in [0, 10, 29, bytes.len() - 1] {
        assert!(decompress(&bytes[..cut], &m, &RawCoder).is_err(), "cut at {cut}");
    }
    let mut v1 = bytes.clone();
    v1[4] = 1;
    assert!(matches!(decompress(&v1, &m, &RawCoder), Err(Error::Format(_))));
}

#[test]
fn external_process_coder_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let script = dir.path().join("passthrough.sh");
    std::fs::write(
        &script,
        "#!/bin/sh\nset -e\ncase \"$1\" in\n  encode) cp \"$3\" \"$4\" ;;\n  decode) cp \"$3\" \"$5\" ;;\n  *) exit 2 ;;\nesac\n",
    )
    .unwrap();
    std::fs::set_permissions(&script, std::fs::Permissions::from_mode(0o755)).unwrap();
    let coder = ProcessCoder::new(&script);
    assert_eq!(coder.version(), 1);

    let m = model(8);
    let x = image(5);
    let reg = DistortionRegistry::default();
    let mut r = baseline(&x, &m, EncoderVariant::Base, &EditTarget::mse(0.015), &reg).unwrap();
    r.symbols_y[0] = 100_000;
    let bytes = encode_result(&r, &m, &coder).unwrap();
    let d = decompress(&bytes, &m, &coder).unwrap();
    assert_eq!(d.symbols_y, r.symbols_y);
    assert_eq!(d.symbols_z, r.symbols_z);

    let broken = ProcessCoder::new(dir.path().join("missing"));
    assert!(matches!(broken.encode(&Default::default(), &symbol_streams(&r, &m).unwrap().tables), Err(Error::Io { .. })));
    let failing = dir.path().join("fail.sh");
    std::fs::write(&failing, "#!/bin/sh\necho nope >&2\nexit 3\n").unwrap();
    std::fs::set_permissions(&failing, std::fs::Permissions::from_mode(0o755)).unwrap();
    let err = encode_result(&r, &m, &ProcessCoder::new(&failing)).unwrap_err();
    assert!(matches!(err, Error::Coder(ref s) if s.contains("nope")), "{err}");
}

#[test]
fn table_rate_tracks_exact_rate() {
    let m = model(9);
    let x = image(6);
    let reg = DistortionRegistry::default();
    let r = baseline(&x, &m, EncoderVariant::Base, &EditTarget::mse(0.015), &reg).unwrap();
    let t = table_rate(&symbol_streams(&r, &m).unwrap()).unwrap();
    let exact = r.rate.total_bits();
    let rel = (t.total_bits() - exact).abs() / exact;
    assert!(rel < 0.05, "relative gap {rel}");
}

