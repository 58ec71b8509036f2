//! C ABI over the sealmr envelope codec and subscription matcher.
//!
//! Conventions:
//! - Every fallible call returns a [`SealmrStatus`]. On failure a message
//!   is stored per thread and can be read with [`sealmr_last_error`].
//! - Handles are opaque pointers created by `*_new` and released by the
//!   matching `*_free`. Passing NULL to a `*_free` is a no-op.
//! - Byte results are returned in a [`SealmrBuffer`] owned by the caller
//!   and released with [`sealmr_buffer_free`].
//! - Headers cross the boundary as UTF-8 JSON objects whose values are
//!   integers or strings, e.g. `{"msg_type":5,"job_id":"j","dest_id":0}`.
//!   `msg_type` may also be given by name (`"MAP_DATATYPE"`).

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{self, AssertUnwindSafe};
use std::ptr;

use serde_json::{Map, Value};

use sealmr::router::{ConnId, Constraint, SubId, Subscription, SubscriptionStore};
use sealmr::wire::{self, attr, AttrValue, Envelope, Header, MessageType, NonceSource, SymmetricKey, WireError};

/// Result codes shared by every entry point.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SealmrStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidUtf8 = 2,
    InvalidJson = 3,
    InvalidKey = 4,
    InvalidHeader = 5,
    AuthFailure = 6,
    MalformedFrame = 7,
    MissingPayloadKey = 8,
    InvalidSubscription = 9,
    NotFound = 10,
    BufferTooSmall = 11,
    Panic = 12,
}

/// Heap bytes handed to the caller. Release with [`sealmr_buffer_free`].
#[repr(C)]
pub struct SealmrBuffer {
    pub data: *mut u8,
    pub len: usize,
}

impl SealmrBuffer {
    fn empty() -> Self {
        SealmrBuffer { data: ptr::null_mut(), len: 0 }
    }

    fn from_vec(v: Vec<u8>) -> Self {
        let boxed = v.into_boxed_slice();
        let len = boxed.len();
        SealmrBuffer { data: Box::into_raw(boxed) as *mut u8, len }
    }
}

/// Keys plus a nonce source for sealing and opening envelopes.
pub struct SealmrCodec {
    header_key: SymmetricKey,
    payload_key: Option<SymmetricKey>,
    nonces: NonceSource,
}

/// Subscription store with the router's matching semantics.
pub struct SealmrStore {
    inner: SubscriptionStore,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

struct Failure(SealmrStatus, String);

type Outcome = Result<(), Failure>;

fn fail<T>(status: SealmrStatus, msg: impl Into<String>) -> Result<T, Failure> {
    Err(Failure(status, msg.into()))
}

impl From<WireError> for Failure {
    fn from(e: WireError) -> Self {
        let status = match e {
            WireError::AuthFailure => SealmrStatus::AuthFailure,
            WireError::MissingPayloadKey => SealmrStatus::MissingPayloadKey,
            WireError::ParseFailure(_) | WireError::UnknownType(_) => SealmrStatus::MalformedFrame,
        };
        Failure(status, e.to_string())
    }
}

fn set_last_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).expect("interior NULs replaced");
    LAST_ERROR.with(|slot| *slot.borrow_mut() = Some(c));
}

fn guard(f: impl FnOnce() -> Outcome) -> SealmrStatus {
    match panic::catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => SealmrStatus::Ok,
        Ok(Err(Failure(status, msg))) => {
            set_last_error(msg);
            status
        }
        Err(_) => {
            set_last_error("internal panic".into());
            SealmrStatus::Panic
        }
    }
}

fn non_null<T>(p: *const T, what: &str) -> Result<(), Failure> {
    if p.is_null() {
        fail(SealmrStatus::NullPointer, format!("{what} is NULL"))
    } else {
        Ok(())
    }
}

unsafe fn c_str<'a>(p: *const c_char, what: &str) -> Result<&'a str, Failure> {
    non_null(p, what)?;
    CStr::from_ptr(p)
        .to_str()
        .or_else(|_| fail(SealmrStatus::InvalidUtf8, format!("{what} is not UTF-8")))
}

unsafe fn bytes<'a>(p: *const u8, len: usize, what: &str) -> Result<&'a [u8], Failure> {
    if len == 0 {
        return Ok(&[]);
    }
    non_null(p, what)?;
    Ok(std::slice::from_raw_parts(p, len))
}

fn parse_key(hex: &str, what: &str) -> Result<SymmetricKey, Failure> {
    SymmetricKey::from_hex(hex).or_else(|e| fail(SealmrStatus::InvalidKey, format!("{what}: {e}")))
}

/// Parses a header JSON object. Ordering of keys does not matter; the
/// canonical encoding sorts attributes.
pub fn header_from_json(text: &str) -> Result<Header, String> {
    let value: Value = serde_json::from_str(text).map_err(|e| format!("header JSON: {e}"))?;
    let obj = value.as_object().ok_or("header JSON must be an object")?;
    let ty = match obj.get(attr::MSG_TYPE) {
        Some(Value::Number(n)) => n
            .as_u64()
            .and_then(|c| u8::try_from(c).ok())
            .and_then(|c| MessageType::from_code(c).ok())
            .ok_or_else(|| format!("unknown msg_type {n}"))?,
        Some(Value::String(s)) => MessageType::from_name(s).ok_or_else(|| format!("unknown msg_type {s:?}"))?,
        _ => return Err("header needs a msg_type".into()),
    };
    let mut header = Header::new(ty);
    for (name, v) in obj {
        if name == attr::MSG_TYPE {
            continue;
        }
        match v {
            Value::Number(n) => header.set(name, n.as_i64().ok_or_else(|| format!("{name}: not a 64-bit integer"))?),
            Value::String(s) => header.set(name, s.as_str()),
            _ => return Err(format!("{name}: values must be integers or strings")),
        }
    }
    header.validate().map_err(|e| e.to_string())?;
    Ok(header)
}

/// Renders a header as a JSON object with `msg_type` as its integer code.
pub fn header_to_json(header: &Header) -> String {
    let obj: Map<String, Value> = header
        .attrs()
        .map(|(k, v)| {
            let v = match v {
                AttrValue::Int(i) => Value::from(*i),
                AttrValue::Str(s) => Value::from(s.as_str()),
            };
            (k.to_owned(), v)
        })
        .collect();
    Value::Object(obj).to_string()
}

/// Last error message on this thread, or NULL. The pointer stays valid
/// until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn sealmr_last_error() -> *const c_char {
    LAST_ERROR.with(|slot| slot.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn sealmr_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr() as *const c_char
}

/// # Safety
/// `buf` must be NULL or point to a buffer filled by this library.
#[no_mangle]
pub unsafe extern "C" fn sealmr_buffer_free(buf: *mut SealmrBuffer) {
    if buf.is_null() || (*buf).data.is_null() {
        return;
    }
    let b = &mut *buf;
    drop(Box::from_raw(ptr::slice_from_raw_parts_mut(b.data, b.len)));
    *b = SealmrBuffer::empty();
}

/// Creates a codec from hex keys. `payload_key_hex` may be NULL for a
/// header-only codec that can route but not read payloads.
///
/// # Safety
/// String arguments must be NULL or NUL-terminated; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn sealmr_codec_new(
    header_key_hex: *const c_char,
    payload_key_hex: *const c_char,
    out: *mut *mut SealmrCodec,
) -> SealmrStatus {
    guard(|| {
        non_null(out, "out")?;
        let header_key = parse_key(c_str(header_key_hex, "header key")?, "header key")?;
        let payload_key = if payload_key_hex.is_null() {
            None
        } else {
            Some(parse_key(c_str(payload_key_hex, "payload key")?, "payload key")?)
        };
        let codec = SealmrCodec { header_key, payload_key, nonces: NonceSource::new() };
        *out = Box::into_raw(Box::new(codec));
        Ok(())
    })
}

/// # Safety
/// `codec` must be NULL or a handle from [`sealmr_codec_new`] not yet freed.
#[no_mangle]
pub unsafe extern "C" fn sealmr_codec_free(codec: *mut SealmrCodec) {
    if !codec.is_null() {
        drop(Box::from_raw(codec));
    }
}

/// Seals `payload` under `header_json` into a wire frame.
///
/// # Safety
/// `codec` must be live, `header_json` NUL-terminated, `payload` readable
/// for `payload_len` bytes (or NULL when the length is 0), `out` writable.
#[no_mangle]
pub unsafe extern "C" fn sealmr_codec_seal(
    codec: *const SealmrCodec,
    header_json: *const c_char,
    payload: *const u8,
    payload_len: usize,
    out: *mut SealmrBuffer,
) -> SealmrStatus {
    guard(|| {
        non_null(codec, "codec")?;
        non_null(out, "out")?;
        let codec = &*codec;
        let header = header_from_json(c_str(header_json, "header")?).or_else(|e| fail(SealmrStatus::InvalidHeader, e))?;
        let payload = bytes(payload, payload_len, "payload")?;
        let payload_key = codec.payload_key.as_ref().ok_or(WireError::MissingPayloadKey)?;
        let env = wire::seal_envelope(header.msg_type(), &header, payload, &codec.header_key, payload_key, &codec.nonces);
        *out = SealmrBuffer::from_vec(env.to_bytes());
        Ok(())
    })
}

/// Verifies and decrypts a frame. On success `header_json_out` holds the
/// header as JSON (not NUL-terminated) and `payload_out` the payload.
///
/// # Safety
/// `codec` must be live, `frame` readable for `frame_len` bytes, and both
/// output pointers writable.
#[no_mangle]
pub unsafe extern "C" fn sealmr_codec_open(
    codec: *const SealmrCodec,
    frame: *const u8,
    frame_len: usize,
    header_json_out: *mut SealmrBuffer,
    payload_out: *mut SealmrBuffer,
) -> SealmrStatus {
    guard(|| {
        non_null(codec, "codec")?;
        non_null(header_json_out, "header_json_out")?;
        non_null(payload_out, "payload_out")?;
        let codec = &*codec;
        let env = Envelope::from_bytes(bytes(frame, frame_len, "frame")?)?;
        let payload_key = codec.payload_key.as_ref().ok_or(WireError::MissingPayloadKey)?;
        let (header, payload) = wire::open_envelope(&env, &codec.header_key, payload_key)?;
        *header_json_out = SealmrBuffer::from_vec(header_to_json(&header).into_bytes());
        *payload_out = SealmrBuffer::from_vec(payload);
        Ok(())
    })
}

/// Verifies a frame and decrypts only its header.
///
/// # Safety
/// As for [`sealmr_codec_open`].
#[no_mangle]
pub unsafe extern "C" fn sealmr_codec_open_header(
    codec: *const SealmrCodec,
    frame: *const u8,
    frame_len: usize,
    header_json_out: *mut SealmrBuffer,
) -> SealmrStatus {
    guard(|| {
        non_null(codec, "codec")?;
        non_null(header_json_out, "header_json_out")?;
        let env = Envelope::from_bytes(bytes(frame, frame_len, "frame")?)?;
        let header = wire::open_header(&env, &(*codec).header_key)?;
        *header_json_out = SealmrBuffer::from_vec(header_to_json(&header).into_bytes());
        Ok(())
    })
}

/// Applies the AES-128-CTR keystream in place. `key` and `counter` are
/// 16 bytes each; the counter block is incremented big-endian.
///
/// # Safety
/// `key` and `counter` must be readable for 16 bytes and `data` writable
/// for `len` bytes.
#[no_mangle]
pub unsafe extern "C" fn sealmr_aes_ctr_apply(
    key: *const u8,
    counter: *const u8,
    data: *mut u8,
    len: usize,
) -> SealmrStatus {
    guard(|| {
        non_null(key, "key")?;
        non_null(counter, "counter")?;
        if len == 0 {
            return Ok(());
        }
        non_null(data, "data")?;
        let key = SymmetricKey::from_bytes(*(key as *const [u8; wire::KEY_LEN]));
        let counter = &*(counter as *const [u8; wire::NONCE_LEN]);
        wire::aes_ctr_apply(&key, counter, std::slice::from_raw_parts_mut(data, len));
        Ok(())
    })
}

/// # Safety
/// `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn sealmr_store_new(out: *mut *mut SealmrStore) -> SealmrStatus {
    guard(|| {
        non_null(out, "out")?;
        *out = Box::into_raw(Box::new(SealmrStore { inner: SubscriptionStore::new() }));
        Ok(())
    })
}

/// # Safety
/// `store` must be NULL or a handle from [`sealmr_store_new`] not yet freed.
#[no_mangle]
pub unsafe extern "C" fn sealmr_store_free(store: *mut SealmrStore) {
    if !store.is_null() {
        drop(Box::from_raw(store));
    }
}

/// Registers a subscription for `owner`. `constraints_json` is an array of
/// `{"attr": name, "op": "EQ"|"LT"|"LE"|"GT"|"GE", "value": int|string}`
/// and must include a `msg_type` constraint.
///
/// # Safety
/// `store` must be live, `constraints_json` NUL-terminated, `sub_id_out`
/// writable.
#[no_mangle]
pub unsafe extern "C" fn sealmr_store_register(
    store: *mut SealmrStore,
    owner: u64,
    constraints_json: *const c_char,
    sub_id_out: *mut u64,
) -> SealmrStatus {
    guard(|| {
        non_null(store, "store")?;
        non_null(sub_id_out, "sub_id_out")?;
        let constraints: Vec<Constraint> = serde_json::from_str(c_str(constraints_json, "constraints")?)
            .or_else(|e| fail(SealmrStatus::InvalidJson, format!("constraints JSON: {e}")))?;
        let store = &mut (*store).inner;
        let sub_id = store.fresh_id();
        let id = store
            .register(Subscription { sub_id, owner: ConnId(owner), constraints })
            .or_else(|e| fail(SealmrStatus::InvalidSubscription, e.to_string()))?;
        *sub_id_out = id.0;
        Ok(())
    })
}

/// # Safety
/// `store` must be live.
#[no_mangle]
pub unsafe extern "C" fn sealmr_store_unregister(store: *mut SealmrStore, sub_id: u64) -> SealmrStatus {
    guard(|| {
        non_null(store, "store")?;
        match (*store).inner.unregister(SubId(sub_id)) {
            Some(_) => Ok(()),
            None => fail(SealmrStatus::NotFound, format!("no subscription {sub_id}")),
        }
    })
}

/// Number of live subscriptions, or 0 for a NULL store.
///
/// # Safety
/// `store` must be NULL or live.
#[no_mangle]
pub unsafe extern "C" fn sealmr_store_len(store: *const SealmrStore) -> usize {
    if store.is_null() {
        0
    } else {
        (*store).inner.len()
    }
}

/// Writes the distinct owners whose subscriptions match `header_json`, in
/// ascending order, into `owners` (capacity `cap`). `count_out` receives
/// the number of matches; if it exceeds `cap` the call returns
/// `BufferTooSmall` and nothing is written.
///
/// # Safety
/// `store` must be live, `header_json` NUL-terminated, `owners` writable
/// for `cap` elements (may be NULL when `cap` is 0), `count_out` writable.
#[no_mangle]
pub unsafe extern "C" fn sealmr_store_match(
    store: *const SealmrStore,
    header_json: *const c_char,
    owners: *mut u64,
    cap: usize,
    count_out: *mut usize,
) -> SealmrStatus {
    guard(|| {
        non_null(store, "store")?;
        non_null(count_out, "count_out")?;
        let header = header_from_json(c_str(header_json, "header")?).or_else(|e| fail(SealmrStatus::InvalidHeader, e))?;
        let hits: Vec<u64> = (*store).inner.match_header(&header).into_iter().map(|c| c.0).collect();
        *count_out = hits.len();
        if hits.len() > cap {
            return fail(SealmrStatus::BufferTooSmall, format!("{} owners match, capacity {cap}", hits.len()));
        }
        if !hits.is_empty() {
            non_null(owners, "owners")?;
            ptr::copy_nonoverlapping(hits.as_ptr(), owners, hits.len());
        }
        Ok(())
    })
}
