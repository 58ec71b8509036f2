use std::ffi::{CStr, CString};
use std::path::{Path, PathBuf};
use std::process::Command;
use std::ptr;

use sealmr_ffi::*;

const HK: &str = "000102030405060708090a0b0c0d0e0f";
const PK: &str = "f0e0d0c0b0a090807060504030201000";

fn cs(s: &str) -> CString {
    CString::new(s).unwrap()
}

fn codec(payload: bool) -> *mut SealmrCodec {
    let (hk, pk) = (cs(HK), cs(PK));
    let mut out = ptr::null_mut();
    let pk_ptr = if payload { pk.as_ptr() } else { ptr::null() };
    assert_eq!(unsafe { sealmr_codec_new(hk.as_ptr(), pk_ptr, &mut out) }, SealmrStatus::Ok);
    out
}

fn take(buf: &mut SealmrBuffer) -> Vec<u8> {
    let v = unsafe { std::slice::from_raw_parts(buf.data, buf.len) }.to_vec();
    unsafe { sealmr_buffer_free(buf) };
    assert!(buf.data.is_null());
    v
}

fn last_error() -> String {
    let p = sealmr_last_error();
    assert!(!p.is_null());
    unsafe { CStr::from_ptr(p) }.to_string_lossy().into_owned()
}

fn empty() -> SealmrBuffer {
    SealmrBuffer { data: ptr::null_mut(), len: 0 }
}

fn seal(c: *const SealmrCodec, header: &str, payload: &[u8]) -> Vec<u8> {
    let h = cs(header);
    let mut out = empty();
    let st = unsafe { sealmr_codec_seal(c, h.as_ptr(), payload.as_ptr(), payload.len(), &mut out) };
    assert_eq!(st, SealmrStatus::Ok, "{}", last_error());
    take(&mut out)
}

#[test]
fn seal_then_open_round_trips() {
    let c = codec(true);
    let frame = seal(c, r#"{"msg_type":"MAP_DATATYPE","job_id":"j1","dest_id":2}"#, b"hello");
    let (mut h, mut p) = (empty(), empty());
    assert_eq!(unsafe { sealmr_codec_open(c, frame.as_ptr(), frame.len(), &mut h, &mut p) }, SealmrStatus::Ok);
    let header: serde_json::Value = serde_json::from_slice(&take(&mut h)).unwrap();
    assert_eq!(header, serde_json::json!({"msg_type": 5, "job_id": "j1", "dest_id": 2}));
    assert_eq!(take(&mut p), b"hello");
    unsafe { sealmr_codec_free(c) };
}

#[test]
fn header_only_codec_routes_but_cannot_read_payloads() {
    let full = codec(true);
    let router = codec(false);
    let frame = seal(full, r#"{"msg_type":7,"job_id":"j","stage":"map","target":0}"#, b"");
    let mut h = empty();
    assert_eq!(unsafe { sealmr_codec_open_header(router, frame.as_ptr(), frame.len(), &mut h) }, SealmrStatus::Ok);
    assert!(String::from_utf8(take(&mut h)).unwrap().contains(r#""stage":"map""#));
    let (mut h, mut p) = (empty(), empty());
    let st = unsafe { sealmr_codec_open(router, frame.as_ptr(), frame.len(), &mut h, &mut p) };
    assert_eq!(st, SealmrStatus::MissingPayloadKey);
    unsafe {
        sealmr_codec_free(full);
        sealmr_codec_free(router);
    }
}

#[test]
fn every_single_byte_flip_is_rejected() {
    let c = codec(true);
    let frame = seal(c, r#"{"msg_type":"RESULT","job_id":"j"}"#, b"{\"key\":\"a\",\"value\":1}");
    for i in 0..frame.len() {
        let mut bad = frame.clone();
        bad[i] ^= 0x80;
        let (mut h, mut p) = (empty(), empty());
        let st = unsafe { sealmr_codec_open(c, bad.as_ptr(), bad.len(), &mut h, &mut p) };
        assert!(matches!(st, SealmrStatus::AuthFailure | SealmrStatus::MalformedFrame), "byte {i}: {st:?}");
        assert!(h.data.is_null() && p.data.is_null());
    }
    unsafe { sealmr_codec_free(c) };
}

#[test]
fn errors_carry_codes_and_messages() {
    let mut out = ptr::null_mut();
    let bad = cs("abcd");
    assert_eq!(unsafe { sealmr_codec_new(bad.as_ptr(), ptr::null(), &mut out) }, SealmrStatus::InvalidKey);
    assert!(last_error().contains("header key"));
    assert_eq!(unsafe { sealmr_codec_new(ptr::null(), ptr::null(), &mut out) }, SealmrStatus::NullPointer);

    let c = codec(true);
    let mut buf = empty();
    for header in [r#"{"msg_type":"MAP_DATATYPE","job_id":"j"}"#, r#"{"job_id":"j"}"#, "[1]", r#"{"msg_type":99}"#] {
        let h = cs(header);
        let st = unsafe { sealmr_codec_seal(c, h.as_ptr(), ptr::null(), 0, &mut buf) };
        assert_eq!(st, SealmrStatus::InvalidHeader, "{header}");
    }
    assert!(last_error().contains("msg_type"));
    unsafe { sealmr_codec_free(c) };
}

#[test]
fn aes_ctr_known_answer() {
    let key: [u8; 16] = hex::decode("2b7e151628aed2a6abf7158809cf4f3c").unwrap().try_into().unwrap();
    let ctr: [u8; 16] = hex::decode("f0f1f2f3f4f5f6f7f8f9fafbfcfdfeff").unwrap().try_into().unwrap();
    let mut data = hex::decode("6bc1bee22e409f96e93d7e117393172a").unwrap();
    let st = unsafe { sealmr_aes_ctr_apply(key.as_ptr(), ctr.as_ptr(), data.as_mut_ptr(), data.len()) };
    assert_eq!(st, SealmrStatus::Ok);
    assert_eq!(hex::encode(data), "874d6191b620e3261bef6864990db6ce");
}

#[test]
fn store_registers_matches_and_unregisters() {
    let mut s = ptr::null_mut();
    assert_eq!(unsafe { sealmr_store_new(&mut s) }, SealmrStatus::Ok);
    let mut ids = Vec::new();
    for (owner, constraints) in [
        (3, r#"[{"attr":"msg_type","op":"EQ","value":5},{"attr":"dest_id","op":"EQ","value":1}]"#),
        (1, r#"[{"attr":"msg_type","op":"EQ","value":5},{"attr":"dest_id","op":"LE","value":1}]"#),
        (9, r#"[{"attr":"msg_type","op":"EQ","value":6}]"#),
    ] {
        let c = cs(constraints);
        let mut id = 0;
        assert_eq!(unsafe { sealmr_store_register(s, owner, c.as_ptr(), &mut id) }, SealmrStatus::Ok);
        ids.push(id);
    }
    assert_eq!(unsafe { sealmr_store_len(s) }, 3);

    let h = cs(r#"{"msg_type":5,"job_id":"j","dest_id":1}"#);
    let mut owners = [0u64; 4];
    let mut n = 0;
    assert_eq!(unsafe { sealmr_store_match(s, h.as_ptr(), owners.as_mut_ptr(), 4, &mut n) }, SealmrStatus::Ok);
    assert_eq!(&owners[..n], &[1, 3]);
    assert_eq!(unsafe { sealmr_store_match(s, h.as_ptr(), owners.as_mut_ptr(), 1, &mut n) }, SealmrStatus::BufferTooSmall);
    assert_eq!(n, 2);

    assert_eq!(unsafe { sealmr_store_unregister(s, ids[0]) }, SealmrStatus::Ok);
    assert_eq!(unsafe { sealmr_store_unregister(s, ids[0]) }, SealmrStatus::NotFound);
    assert_eq!(unsafe { sealmr_store_match(s, h.as_ptr(), owners.as_mut_ptr(), 4, &mut n) }, SealmrStatus::Ok);
    assert_eq!(&owners[..n], &[1]);

    let no_type = cs(r#"[{"attr":"dest_id","op":"EQ","value":1}]"#);
    let mut id = 0;
    let st = unsafe { sealmr_store_register(s, 1, no_type.as_ptr(), &mut id) };
    assert_eq!(st, SealmrStatus::InvalidSubscription);
    let junk = cs("not json");
    assert_eq!(unsafe { sealmr_store_register(s, 1, junk.as_ptr(), &mut id) }, SealmrStatus::InvalidJson);
    unsafe { sealmr_store_free(s) };
}

#[test]
fn null_handles_are_tolerated() {
    unsafe {
        sealmr_codec_free(ptr::null_mut());
        sealmr_store_free(ptr::null_mut());
        sealmr_buffer_free(ptr::null_mut());
        assert_eq!(sealmr_store_len(ptr::null()), 0);
    }
    let v = unsafe { CStr::from_ptr(sealmr_version()) };
    assert_eq!(v.to_str().unwrap(), env!("CARGO_PKG_VERSION"));
}

const C_PROGRAM: &str = r#"
#include <stdio.h>
#include <string.h>
#include "sealmr.h"

int main(void) {
    SealmrCodec *c = NULL;
    if (sealmr_codec_new("000102030405060708090a0b0c0d0e0f", "0f0e0d0c0b0a09080706050403020100", &c) != SEALMR_STATUS_OK) return 1;
    SealmrBuffer frame = {0}, h = {0}, p = {0};
    const char *msg = "hello from C";
    if (sealmr_codec_seal(c, "{\"msg_type\":\"MAP_DATATYPE\",\"job_id\":\"c\",\"dest_id\":0}",
                          (const uint8_t *)msg, strlen(msg), &frame) != SEALMR_STATUS_OK) return 2;
    if (sealmr_codec_open(c, frame.data, frame.len, &h, &p) != SEALMR_STATUS_OK) return 3;
    if (p.len != strlen(msg) || memcmp(p.data, msg, p.len) != 0) return 4;
    frame.data[frame.len - 1] ^= 1;
    SealmrBuffer h2 = {0}, p2 = {0};
    if (sealmr_codec_open(c, frame.data, frame.len, &h2, &p2) != SEALMR_STATUS_AUTH_FAILURE) return 5;
    if (sealmr_last_error() == NULL) return 6;
    SealmrStore *s = NULL;
    uint64_t id = 0, owners[2];
    size_t n = 0;
    sealmr_store_new(&s);
    sealmr_store_register(s, 42, "[{\"attr\":\"msg_type\",\"op\":\"EQ\",\"value\":5}]", &id);
    if (sealmr_store_match(s, "{\"msg_type\":5,\"dest_id\":0}", owners, 2, &n) != SEALMR_STATUS_OK || n != 1 || owners[0] != 42) return 7;
    sealmr_buffer_free(&frame);
    sealmr_buffer_free(&h);
    sealmr_buffer_free(&p);
    sealmr_store_free(s);
    sealmr_codec_free(c);
    printf("ok\n");
    return 0;
}
"#;

fn include_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("include")
}

fn cc() -> Option<String> {
    ["cc", "gcc", "clang"]
        .into_iter()
        .find(|c| Command::new(c).arg("--version").output().is_ok_and(|o| o.status.success()))
        .map(str::to_owned)
}

#[test]
fn generated_header_declares_the_api() {
    let header = std::fs::read_to_string(include_dir().join("sealmr.h")).unwrap();
    for name in [
        "sealmr_codec_new",
        "sealmr_codec_seal",
        "sealmr_codec_open",
        "sealmr_codec_open_header",
        "sealmr_store_register",
        "sealmr_store_match",
        "sealmr_aes_ctr_apply",
        "sealmr_last_error",
        "SEALMR_STATUS_AUTH_FAILURE",
        "typedef struct SealmrCodec SealmrCodec",
    ] {
        assert!(header.contains(name), "header lacks {name}");
    }
}

#[test]
fn c_program_links_against_static_library() {
    let Some(cc) = cc() else {
        eprintln!("no C compiler found; skipping");
        return;
    };
    let dir = tempfile::tempdir().unwrap();
    let src = dir.path().join("smoke.c");
    std::fs::write(&src, C_PROGRAM).unwrap();
    let profile_dir = std::env::current_exe().unwrap().parent().unwrap().parent().unwrap().to_path_buf();
    let lib = profile_dir.join("libsealmr_ffi.a");
    let exe = dir.path().join("smoke");
    let mut cmd = Command::new(&cc);
    cmd.arg("-std=c99").arg("-Wall").arg("-Werror").arg("-I").arg(include_dir()).arg(&src);
    if lib.exists() {
        cmd.arg(&lib).args(["-lpthread", "-ldl", "-lm", "-o"]).arg(&exe);
    } else {
        eprintln!("{} not built; checking the header compiles only", lib.display());
        cmd.arg("-c").arg("-o").arg(dir.path().join("smoke.o"));
    }
    let out = cmd.output().unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    if lib.exists() {
        let run = Command::new(&exe).output().unwrap();
        assert!(run.status.success(), "C smoke test exited with {:?}", run.status.code());
        assert_eq!(String::from_utf8_lossy(&run.stdout).trim(), "ok");
    }
}
