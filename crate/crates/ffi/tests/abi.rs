use std::ffi::{c_char, CString};
use std::ptr;

use opstego::layout::{capacity_bpp, LayoutConfig};
use opstego_ffi::*;

fn small_model(seed: u64) -> *mut OpstegoModel {
    let mut m = ptr::null_mut();
    let st = unsafe { opstego_model_new(4, 1, 16, 16, 4, seed, &mut m) };
    assert_eq!(st, OpstegoStatus::Ok);
    assert!(!m.is_null());
    m
}

fn last_error() -> String {
    let n = unsafe { opstego_last_error(ptr::null_mut(), 0) };
    let mut buf = vec![0 as c_char; n + 1];
    let m = unsafe { opstego_last_error(buf.as_mut_ptr(), buf.len()) };
    assert_eq!(m, n);
    let bytes: Vec<u8> = buf[..n].iter().map(|&c| c as u8).collect();
    String::from_utf8(bytes).unwrap()
}

fn dims(m: *const OpstegoModel) -> (usize, usize, usize) {
    let (mut h, mut w, mut b) = (0, 0, 0);
    assert_eq!(unsafe { opstego_model_dims(m, &mut h, &mut w, &mut b) }, OpstegoStatus::Ok);
    (h, w, b)
}

#[test]
fn dims_match_configuration() {
    let m = small_model(1);
    let (h, w, b) = dims(m);
    assert_eq!((h, w), (16, 16));
    assert_eq!(b, LayoutConfig::new(4, 1, 16, 16).bit_len());
    unsafe { opstego_model_free(m) };
}

#[test]
fn capacity_forwards_the_layout_rule() {
    for (l, n) in [(16, 1), (32, 1), (48, 3), (32, 15)] {
        let mut out = 0.0;
        assert_eq!(unsafe { opstego_capacity_bpp(l, n, &mut out) }, OpstegoStatus::Ok);
        let want = capacity_bpp(&LayoutConfig::new(l as usize, n, 64, 64)).unwrap();
        assert_eq!(out, want);
    }
    let mut out = 0.0;
    assert_eq!(unsafe { opstego_capacity_bpp(0, 1, &mut out) }, OpstegoStatus::Config);
    assert!(!last_error().is_empty());
}

#[test]
fn conceal_then_recover_round_trips_buffers() {
    let m = small_model(2);
    let (h, w, b) = dims(m);
    let cover: Vec<u8> = (0..h * w * 3).map(|i| (i * 7 % 251) as u8).collect();
    let bits: Vec<u8> = (0..b).map(|i| (i % 3 == 0) as u8).collect();
    let mut stego = vec![0u8; cover.len()];
    let st = unsafe {
        opstego_conceal(m, cover.as_ptr(), cover.len(), bits.as_ptr(), bits.len(), stego.as_mut_ptr(), stego.len())
    };
    assert_eq!(st, OpstegoStatus::Ok, "{}", last_error());
    let mut out = vec![7u8; b];
    let st = unsafe { opstego_recover(m, stego.as_ptr(), stego.len(), out.as_mut_ptr(), out.len()) };
    assert_eq!(st, OpstegoStatus::Ok);
    assert!(out.iter().all(|&x| x <= 1));

    let mut again = vec![0u8; b];
    unsafe { opstego_recover(m, stego.as_ptr(), stego.len(), again.as_mut_ptr(), again.len()) };
    assert_eq!(out, again);
    unsafe { opstego_model_free(m) };
}

#[test]
fn save_and_load_preserve_behaviour() {
    let dir = tempfile::tempdir().unwrap();
    let path = CString::new(dir.path().join("m.ckpt").to_str().unwrap()).unwrap();
    let m = small_model(3);
    assert_eq!(unsafe { opstego_model_save(m, path.as_ptr()) }, OpstegoStatus::Ok);
    let mut l = ptr::null_mut();
    assert_eq!(unsafe { opstego_model_load(path.as_ptr(), &mut l) }, OpstegoStatus::Ok);
    let (h, w, b) = dims(l);
    let cover = vec![128u8; h * w * 3];
    let bits = vec![1u8; b];
    let mut s1 = vec![0u8; cover.len()];
    let mut s2 = vec![0u8; cover.len()];
    unsafe {
        opstego_conceal(m, cover.as_ptr(), cover.len(), bits.as_ptr(), b, s1.as_mut_ptr(), s1.len());
        opstego_conceal(l, cover.as_ptr(), cover.len(), bits.as_ptr(), b, s2.as_mut_ptr(), s2.len());
        opstego_model_free(m);
        opstego_model_free(l);
    }
    assert_eq!(s1, s2);
}

#[test]
fn errors_map_to_status_codes() {
    let mut m = ptr::null_mut();
    let missing = CString::new("/nonexistent/dir/model.ckpt").unwrap();
    assert_eq!(unsafe { opstego_model_load(missing.as_ptr(), &mut m) }, OpstegoStatus::Io);
    assert!(m.is_null());
    assert!(!last_error().is_empty());

    assert_eq!(unsafe { opstego_model_load(ptr::null(), &mut m) }, OpstegoStatus::NullPointer);
    assert_eq!(last_error(), "path is null");

    assert_eq!(unsafe { opstego_model_new(4, 1, 15, 16, 4, 0, &mut m) }, OpstegoStatus::Config);

    let dir = tempfile::tempdir().unwrap();
    let junk = dir.path().join("junk.ckpt");
    std::fs::write(&junk, b"not a checkpoint").unwrap();
    let junk = CString::new(junk.to_str().unwrap()).unwrap();
    assert_eq!(unsafe { opstego_model_load(junk.as_ptr(), &mut m) }, OpstegoStatus::Format);

    let model = small_model(4);
    let (h, w, b) = dims(model);
    let cover = vec![0u8; h * w * 3];
    let mut stego = vec![0u8; cover.len()];
    let short = vec![0u8; b - 1];
    let st = unsafe {
        opstego_conceal(model, cover.as_ptr(), cover.len(), short.as_ptr(), short.len(), stego.as_mut_ptr(), stego.len())
    };
    assert_eq!(st, OpstegoStatus::Layout);
    let st = unsafe { opstego_conceal(model, cover.as_ptr(), 5, short.as_ptr(), b, stego.as_mut_ptr(), stego.len()) };
    assert_eq!(st, OpstegoStatus::InvalidArgument);
    let bad = vec![2u8; b];
    let st = unsafe {
        opstego_conceal(model, cover.as_ptr(), cover.len(), bad.as_ptr(), b, stego.as_mut_ptr(), stego.len())
    };
    assert_ne!(st, OpstegoStatus::Ok);
    let mut out = vec![0u8; b];
    assert_eq!(
        unsafe { opstego_recover(ptr::null(), cover.as_ptr(), cover.len(), out.as_mut_ptr(), b) },
        OpstegoStatus::NullPointer
    );
    assert_eq!(
        unsafe { opstego_recover(model, cover.as_ptr(), cover.len(), ptr::null_mut(), b) },
        OpstegoStatus::NullPointer
    );
    assert_eq!(unsafe { opstego_model_dims(model, ptr::null_mut(), ptr::null_mut(), ptr::null_mut()) }, OpstegoStatus::NullPointer);

    let st = unsafe { opstego_recover(model, cover.as_ptr(), cover.len(), out.as_mut_ptr(), b) };
    assert_eq!(st, OpstegoStatus::Ok);
    assert_eq!(last_error(), "");
    unsafe {
        opstego_model_free(model);
        opstego_model_free(ptr::null_mut());
    }
}

#[test]
fn last_error_truncates_with_terminator() {
    unsafe { opstego_capacity_bpp(1, 1, ptr::null_mut()) };
    let full = last_error();
    assert_eq!(full, "out is null");
    let mut buf = [1 as c_char; 4];
    let n = unsafe { opstego_last_error(buf.as_mut_ptr(), buf.len()) };
    assert_eq!(n, full.len());
    assert_eq!(buf[3], 0);
    assert_eq!(&buf[..3].iter().map(|&c| c as u8).collect::<Vec<_>>(), b"out");
}

#[test]
fn header_declares_every_export() {
    let h = std::fs::read_to_string(concat!(env!("CARGO_MANIFEST_DIR"), "/include/opstego.h")).unwrap();
    for f in [
        "opstego_model_load",
        "opstego_model_new",
        "opstego_model_save",
        "opstego_model_free",
        "opstego_model_dims",
        "opstego_capacity_bpp",
        "opstego_conceal",
        "opstego_recover",
        "opstego_last_error",
        "typedef struct OpstegoModel OpstegoModel",
        "OPSTEGO_STATUS_NULL_POINTER = 1",
    ] {
        assert!(h.contains(f), "header lacks {f}");
    }
}
