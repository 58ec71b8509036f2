//! Message types, canonical header encoding and the encrypted envelope.
//!
//! Every message that leaves a sealed region travels as an [`Envelope`]:
//! a plaintext one-byte type tag, an AES-128-CTR encrypted header (readable
//! by the router), an AES-128-CTR encrypted payload (readable only by the
//! client and the workers) and a 16-byte authentication tag covering the
//! whole frame.
//!
//! Frame layout, all integers big-endian:
//!
//! ```text
//! [1 msg_type][4 header_ct len][header_ct][4 payload_ct len][payload_ct]
//! [16 nonce_header][16 nonce_payload][16 auth_tag]
//! ```

use std::fmt;
use std::sync::atomic::{AtomicU32, Ordering};

use aes::cipher::{KeyIvInit, StreamCipher};
use hmac::{Hmac, Mac};
use rand::RngCore;
use sha2::Sha256;
use thiserror::Error;

type Aes128Ctr = ctr::Ctr128BE<aes::Aes128>;
type HmacSha256 = Hmac<Sha256>;

pub const NONCE_LEN: usize = 16;
pub const TAG_LEN: usize = 16;
pub const KEY_LEN: usize = 16;
/// Bytes a frame adds on top of the two ciphertexts.
pub const FRAME_OVERHEAD: usize = 1 + 4 + 4 + NONCE_LEN * 2 + TAG_LEN;

const MAC_KEY_LABEL: &[u8] = b"sealmr envelope mac v1";

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum WireError {
    #[error("authentication failed")]
    AuthFailure,
    #[error("malformed input: {0}")]
    ParseFailure(String),
    #[error("unknown message type tag {0:#04x}")]
    UnknownType(u8),
    #[error("payload key not available in this region")]
    MissingPayloadKey,
}

fn parse_err(msg: impl Into<String>) -> WireError {
    WireError::ParseFailure(msg.into())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
#[repr(u8)]
pub enum MessageType {
    JobOpening = 0x01,
    JobDetails = 0x02,
    MapCodeType = 0x03,
    ReduceCodeType = 0x04,
    MapDataType = 0x05,
    ReduceDataType = 0x06,
    Eos = 0x07,
    Result = 0x08,
}

impl MessageType {
    pub const ALL: [MessageType; 8] = [
        MessageType::JobOpening,
        MessageType::JobDetails,
        MessageType::MapCodeType,
        MessageType::ReduceCodeType,
        MessageType::MapDataType,
        MessageType::ReduceDataType,
        MessageType::Eos,
        MessageType::Result,
    ];

    pub fn code(self) -> u8 {
        self as u8
    }

    pub fn from_code(code: u8) -> Result<Self, WireError> {
        Self::ALL
            .into_iter()
            .find(|t| t.code() == code)
            .ok_or(WireError::UnknownType(code))
    }

    pub fn name(self) -> &'static str {
        match self {
            MessageType::JobOpening => "JOB_OPENING",
            MessageType::JobDetails => "JOB_DETAILS",
            MessageType::MapCodeType => "MAP_CODETYPE",
            MessageType::ReduceCodeType => "REDUCE_CODETYPE",
            MessageType::MapDataType => "MAP_DATATYPE",
            MessageType::ReduceDataType => "REDUCE_DATATYPE",
            MessageType::Eos => "EOS",
            MessageType::Result => "RESULT",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|t| t.name() == name)
    }

    /// Data messages are the only ones that carry `dest_id`.
    pub fn is_data(self) -> bool {
        matches!(self, MessageType::MapDataType | MessageType::ReduceDataType)
    }
}

impl fmt::Display for MessageType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Well-known header attribute names.
pub mod attr {
    pub const MSG_TYPE: &str = "msg_type";
    pub const DEST_ID: &str = "dest_id";
    pub const KEY_HINT: &str = "key_hint";
    pub const JOB_ID: &str = "job_id";
    pub const WORKER_ID: &str = "worker_id";
    /// Which stream an EOS closes: `map`, `reduce` or `result`.
    pub const STAGE: &str = "stage";
    /// Receiver index of an EOS inside its stage.
    pub const TARGET: &str = "target";
    /// Reducer index that produced a RESULT or result EOS.
    pub const SOURCE: &str = "source";
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, serde::Serialize, serde::Deserialize)]
#[serde(untagged)]
pub enum AttrValue {
    Int(i64),
    Str(String),
}

impl From<i64> for AttrValue {
    fn from(v: i64) -> Self {
        AttrValue::Int(v)
    }
}

impl From<usize> for AttrValue {
    fn from(v: usize) -> Self {
        AttrValue::Int(v as i64)
    }
}

impl From<u64> for AttrValue {
    fn from(v: u64) -> Self {
        AttrValue::Int(v as i64)
    }
}

impl From<&str> for AttrValue {
    fn from(v: &str) -> Self {
        AttrValue::Str(v.to_owned())
    }
}

impl From<String> for AttrValue {
    fn from(v: String) -> Self {
        AttrValue::Str(v)
    }
}

impl fmt::Display for AttrValue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            AttrValue::Int(i) => write!(f, "{i}"),
            AttrValue::Str(s) => write!(f, "{s:?}"),
        }
    }
}

/// Publication header: attribute pairs kept sorted by name.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Header {
    attrs: Vec<(String, AttrValue)>,
}

impl Header {
    pub fn new(msg_type: MessageType) -> Self {
        Header {
            attrs: vec![(attr::MSG_TYPE.to_owned(), AttrValue::Int(msg_type.code() as i64))],
        }
    }

    /// Sets (or replaces) an attribute.
    pub fn set(&mut self, name: &str, value: impl Into<AttrValue>) {
        let value = value.into();
        match self.attrs.binary_search_by(|(n, _)| n.as_str().cmp(name)) {
            Ok(i) => self.attrs[i].1 = value,
            Err(i) => self.attrs.insert(i, (name.to_owned(), value)),
        }
    }

    pub fn with(mut self, name: &str, value: impl Into<AttrValue>) -> Self {
        self.set(name, value);
        self
    }

    pub fn get(&self, name: &str) -> Option<&AttrValue> {
        self.attrs
            .binary_search_by(|(n, _)| n.as_str().cmp(name))
            .ok()
            .map(|i| &self.attrs[i].1)
    }

    pub fn get_int(&self, name: &str) -> Option<i64> {
        match self.get(name) {
            Some(AttrValue::Int(i)) => Some(*i),
            _ => None,
        }
    }

    pub fn get_str(&self, name: &str) -> Option<&str> {
        match self.get(name) {
            Some(AttrValue::Str(s)) => Some(s),
            _ => None,
        }
    }

    pub fn msg_type(&self) -> MessageType {
        // msg_type is set by the constructor and validated by the decoder.
        let code = self.get_int(attr::MSG_TYPE).expect("header without msg_type");
        MessageType::from_code(code as u8).expect("header with invalid msg_type")
    }

    pub fn attrs(&self) -> impl Iterator<Item = (&str, &AttrValue)> {
        self.attrs.iter().map(|(n, v)| (n.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.attrs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.attrs.is_empty()
    }

    /// Checks that `msg_type` is a known code and that `dest_id` is present
    /// exactly on data messages.
    pub fn validate(&self) -> Result<(), WireError> {
        let code = self
            .get_int(attr::MSG_TYPE)
            .ok_or_else(|| parse_err("header lacks an integer msg_type"))?;
        let code = u8::try_from(code).map_err(|_| WireError::UnknownType(0xff))?;
        let ty = MessageType::from_code(code)?;
        match (ty.is_data(), self.get_int(attr::DEST_ID).is_some(), self.get(attr::DEST_ID)) {
            (true, false, _) => Err(parse_err(format!("{ty} header without integer dest_id"))),
            (false, _, Some(_)) => Err(parse_err(format!("{ty} header must not carry dest_id"))),
            _ => Ok(()),
        }
    }
}

/// Canonical encoding: attributes in ascending name order, so equal headers
/// always produce identical bytes.
///
/// ```text
/// [u8 count] { [u8 name_len][name] [u8 kind] (kind 0: i64 BE | kind 1: [u32 BE len][utf8]) }*
/// ```
pub fn encode_header(h: &Header) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 * h.attrs.len() + 1);
    assert!(h.attrs.len() <= u8::MAX as usize, "too many header attributes");
    out.push(h.attrs.len() as u8);
    for (name, value) in &h.attrs {
        assert!(name.len() <= u8::MAX as usize, "attribute name too long");
        out.push(name.len() as u8);
        out.extend_from_slice(name.as_bytes());
        match value {
            AttrValue::Int(i) => {
                out.push(0);
                out.extend_from_slice(&i.to_be_bytes());
            }
            AttrValue::Str(s) => {
                out.push(1);
                out.extend_from_slice(&(s.len() as u32).to_be_bytes());
                out.extend_from_slice(s.as_bytes());
            }
        }
    }
    out
}

pub fn decode_header(bytes: &[u8]) -> Result<Header, WireError> {
    let mut r = Reader::new(bytes);
    let count = r.u8()? as usize;
    let mut attrs: Vec<(String, AttrValue)> = Vec::with_capacity(count);
    for _ in 0..count {
        let name_len = r.u8()? as usize;
        let name = std::str::from_utf8(r.take(name_len)?)
            .map_err(|_| parse_err("attribute name is not utf-8"))?
            .to_owned();
        if name.is_empty() {
            return Err(parse_err("empty attribute name"));
        }
        if let Some((prev, _)) = attrs.last() {
            if prev.as_str() >= name.as_str() {
                return Err(parse_err("attributes not in canonical order"));
            }
        }
        let value = match r.u8()? {
            0 => AttrValue::Int(i64::from_be_bytes(r.array::<8>()?)),
            1 => {
                let len = r.u32()? as usize;
                let s = std::str::from_utf8(r.take(len)?)
                    .map_err(|_| parse_err("attribute value is not utf-8"))?;
                AttrValue::Str(s.to_owned())
            }
            k => return Err(parse_err(format!("unknown attribute kind {k}"))),
        };
        attrs.push((name, value));
    }
    r.finish()?;
    let header = Header { attrs };
    header.validate()?;
    Ok(header)
}

/// The unit of MapReduce data flow. `value` holds JSON text.
#[derive(Debug, Clone, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct KeyValue {
    pub key: String,
    pub value: String,
}

impl KeyValue {
    pub fn new(key: impl Into<String>, value: &serde_json::Value) -> Result<Self, WireError> {
        let key = key.into();
        if key.is_empty() {
            return Err(parse_err("empty key"));
        }
        Ok(KeyValue { key, value: value.to_string() })
    }

    /// Checks both invariants: non-empty key, value parses as JSON.
    pub fn parse(key: impl Into<String>, value: impl Into<String>) -> Result<Self, WireError> {
        let kv = KeyValue { key: key.into(), value: value.into() };
        if kv.key.is_empty() {
            return Err(parse_err("empty key"));
        }
        serde_json::from_str::<serde_json::Value>(&kv.value)
            .map_err(|e| parse_err(format!("value is not JSON: {e}")))?;
        Ok(kv)
    }

    pub fn json(&self) -> serde_json::Value {
        serde_json::from_str(&self.value).expect("KeyValue holds validated JSON")
    }
}

/// 128-bit AES key. The bytes never appear in `Debug` output.
#[derive(Clone, PartialEq, Eq)]
pub struct SymmetricKey([u8; KEY_LEN]);

impl SymmetricKey {
    pub fn from_bytes(bytes: [u8; KEY_LEN]) -> Self {
        SymmetricKey(bytes)
    }

    pub fn from_hex(s: &str) -> Result<Self, WireError> {
        let bytes = hex::decode(s.trim()).map_err(|e| parse_err(format!("key hex: {e}")))?;
        let bytes: [u8; KEY_LEN] = bytes
            .try_into()
            .map_err(|_| parse_err("key must be exactly 128 bits"))?;
        Ok(SymmetricKey(bytes))
    }

    pub fn random() -> Self {
        let mut bytes = [0u8; KEY_LEN];
        rand::thread_rng().fill_bytes(&mut bytes);
        SymmetricKey(bytes)
    }

    /// Hex form for handing keys to child processes.
    pub fn to_hex(&self) -> String {
        hex::encode(self.0)
    }

    pub(crate) fn bytes(&self) -> &[u8; KEY_LEN] {
        &self.0
    }

    fn mac_key(&self) -> [u8; 32] {
        let mut mac = HmacSha256::new_from_slice(&self.0).expect("hmac accepts any key length");
        mac.update(MAC_KEY_LABEL);
        mac.finalize().into_bytes().into()
    }
}

impl fmt::Debug for SymmetricKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("SymmetricKey(..)")
    }
}

impl Drop for SymmetricKey {
    fn drop(&mut self) {
        self.0.fill(0);
    }
}

/// Per-sender source of initial counter blocks.
///
/// Layout: 8 random prefix bytes, a 32-bit message sequence number and a
/// 32-bit block counter starting at zero, so each message owns a disjoint
/// range of 2^32 keystream blocks.
#[derive(Debug)]
pub struct NonceSource {
    prefix: [u8; 8],
    seq: AtomicU32,
}

impl NonceSource {
    pub fn new() -> Self {
        let mut prefix = [0u8; 8];
        rand::thread_rng().fill_bytes(&mut prefix);
        Self::with_prefix(prefix)
    }

    pub fn with_prefix(prefix: [u8; 8]) -> Self {
        NonceSource { prefix, seq: AtomicU32::new(0) }
    }

    pub fn next(&self) -> [u8; NONCE_LEN] {
        let seq = self.seq.fetch_add(1, Ordering::Relaxed);
        assert!(seq != u32::MAX, "nonce space exhausted for this sender");
        let mut n = [0u8; NONCE_LEN];
        n[..8].copy_from_slice(&self.prefix);
        n[8..12].copy_from_slice(&seq.to_be_bytes());
        n
    }
}

impl Default for NonceSource {
    fn default() -> Self {
        Self::new()
    }
}

/// AES-128-CTR keystream application with a 128-bit big-endian counter block.
pub fn aes_ctr_apply(key: &SymmetricKey, initial_counter: &[u8; NONCE_LEN], data: &mut [u8]) {
    let mut cipher = Aes128Ctr::new(key.bytes().into(), initial_counter.into());
    cipher.apply_keystream(data);
}

#[derive(Clone, PartialEq, Eq)]
pub struct Envelope {
    pub msg_type: MessageType,
    pub header_ct: Vec<u8>,
    pub payload_ct: Vec<u8>,
    pub nonce_header: [u8; NONCE_LEN],
    pub nonce_payload: [u8; NONCE_LEN],
    pub auth_tag: [u8; TAG_LEN],
}

impl fmt::Debug for Envelope {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Envelope")
            .field("msg_type", &self.msg_type)
            .field("header_ct_len", &self.header_ct.len())
            .field("payload_ct_len", &self.payload_ct.len())
            .finish()
    }
}

impl Envelope {
    pub fn wire_len(&self) -> usize {
        FRAME_OVERHEAD + self.header_ct.len() + self.payload_ct.len()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.wire_len());
        self.write_unauthenticated(&mut out);
        out.extend_from_slice(&self.auth_tag);
        out
    }

    fn write_unauthenticated(&self, out: &mut Vec<u8>) {
        out.push(self.msg_type.code());
        out.extend_from_slice(&(self.header_ct.len() as u32).to_be_bytes());
        out.extend_from_slice(&self.header_ct);
        out.extend_from_slice(&(self.payload_ct.len() as u32).to_be_bytes());
        out.extend_from_slice(&self.payload_ct);
        out.extend_from_slice(&self.nonce_header);
        out.extend_from_slice(&self.nonce_payload);
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, WireError> {
        let mut r = Reader::new(bytes);
        let msg_type = MessageType::from_code(r.u8()?)?;
        let hlen = r.u32()? as usize;
        let header_ct = r.take(hlen)?.to_vec();
        let plen = r.u32()? as usize;
        let payload_ct = r.take(plen)?.to_vec();
        let nonce_header = r.array::<NONCE_LEN>()?;
        let nonce_payload = r.array::<NONCE_LEN>()?;
        let auth_tag = r.array::<TAG_LEN>()?;
        r.finish()?;
        Ok(Envelope { msg_type, header_ct, payload_ct, nonce_header, nonce_payload, auth_tag })
    }

    fn compute_tag(&self, header_key: &SymmetricKey) -> [u8; TAG_LEN] {
        let mut mac = HmacSha256::new_from_slice(&header_key.mac_key()).expect("hmac key");
        let mut buf = Vec::with_capacity(self.wire_len());
        self.write_unauthenticated(&mut buf);
        mac.update(&buf);
        let full = mac.finalize().into_bytes();
        let mut tag = [0u8; TAG_LEN];
        tag.copy_from_slice(&full[..TAG_LEN]);
        tag
    }

    fn verify_tag(&self, header_key: &SymmetricKey) -> Result<(), WireError> {
        let mut mac = HmacSha256::new_from_slice(&header_key.mac_key()).expect("hmac key");
        let mut buf = Vec::with_capacity(self.wire_len());
        self.write_unauthenticated(&mut buf);
        mac.update(&buf);
        mac.verify_truncated_left(&self.auth_tag).map_err(|_| WireError::AuthFailure)
    }
}

/// Encrypts header and payload under their own keys and authenticates the
/// frame with a MAC key derived from the header key (so the router, which
/// holds only the header key, can also reject tampered frames).
pub fn seal_envelope(
    msg_type: MessageType,
    header: &Header,
    payload: &[u8],
    header_key: &SymmetricKey,
    payload_key: &SymmetricKey,
    nonce_source: &NonceSource,
) -> Envelope {
    debug_assert_eq!(header.msg_type(), msg_type);
    debug_assert!(header.validate().is_ok(), "invalid header shape: {header:?}");
    let nonce_header = nonce_source.next();
    let nonce_payload = nonce_source.next();
    let mut header_ct = encode_header(header);
    aes_ctr_apply(header_key, &nonce_header, &mut header_ct);
    let mut payload_ct = payload.to_vec();
    aes_ctr_apply(payload_key, &nonce_payload, &mut payload_ct);
    let mut env = Envelope {
        msg_type,
        header_ct,
        payload_ct,
        nonce_header,
        nonce_payload,
        auth_tag: [0u8; TAG_LEN],
    };
    env.auth_tag = env.compute_tag(header_key);
    env
}

/// Verifies the tag, then decrypts header and payload.
pub fn open_envelope(
    env: &Envelope,
    header_key: &SymmetricKey,
    payload_key: &SymmetricKey,
) -> Result<(Header, Vec<u8>), WireError> {
    let header = open_header(env, header_key)?;
    let mut payload = env.payload_ct.clone();
    aes_ctr_apply(payload_key, &env.nonce_payload, &mut payload);
    Ok((header, payload))
}

/// Router-side opening: verifies the tag and decrypts the header only.
pub fn open_header(env: &Envelope, header_key: &SymmetricKey) -> Result<Header, WireError> {
    env.verify_tag(header_key)?;
    let mut hbytes = env.header_ct.clone();
    aes_ctr_apply(header_key, &env.nonce_header, &mut hbytes);
    let header = decode_header(&hbytes)?;
    if header.msg_type() != env.msg_type {
        return Err(parse_err("framing tag disagrees with header msg_type"));
    }
    Ok(header)
}

/// Plaintext framing used by the no-crypto baseline: same layout, zero
/// nonces and tag, header and payload in the clear.
pub fn frame_plain(msg_type: MessageType, header: &Header, payload: &[u8]) -> Envelope {
    Envelope {
        msg_type,
        header_ct: encode_header(header),
        payload_ct: payload.to_vec(),
        nonce_header: [0u8; NONCE_LEN],
        nonce_payload: [0u8; NONCE_LEN],
        auth_tag: [0u8; TAG_LEN],
    }
}

pub fn unframe_plain(env: &Envelope) -> Result<(Header, Vec<u8>), WireError> {
    let header = decode_header(&env.header_ct)?;
    if header.msg_type() != env.msg_type {
        return Err(parse_err("framing tag disagrees with header msg_type"));
    }
    Ok((header, env.payload_ct.clone()))
}

const BLOB_DOMAIN: &[u8] = b"sealmr control blob";

fn blob_tag(header_key: &SymmetricKey, nonce: &[u8], ct: &[u8]) -> HmacSha256 {
    let mut mac = HmacSha256::new_from_slice(&header_key.mac_key()).expect("hmac key");
    mac.update(BLOB_DOMAIN);
    mac.update(nonce);
    mac.update(ct);
    mac
}

/// Control-plane blob (subscriptions): `[16 nonce][ciphertext][16 tag]`
/// under the header key.
pub fn seal_blob(plaintext: &[u8], header_key: &SymmetricKey, nonce_source: &NonceSource) -> Vec<u8> {
    let nonce = nonce_source.next();
    let mut ct = plaintext.to_vec();
    aes_ctr_apply(header_key, &nonce, &mut ct);
    let tag = blob_tag(header_key, &nonce, &ct).finalize().into_bytes();
    let mut out = Vec::with_capacity(NONCE_LEN + ct.len() + TAG_LEN);
    out.extend_from_slice(&nonce);
    out.extend_from_slice(&ct);
    out.extend_from_slice(&tag[..TAG_LEN]);
    out
}

pub fn open_blob(blob: &[u8], header_key: &SymmetricKey) -> Result<Vec<u8>, WireError> {
    if blob.len() < NONCE_LEN + TAG_LEN {
        return Err(parse_err("control blob too short"));
    }
    let (nonce, rest) = blob.split_at(NONCE_LEN);
    let (ct, tag) = rest.split_at(rest.len() - TAG_LEN);
    blob_tag(header_key, nonce, ct)
        .verify_truncated_left(tag)
        .map_err(|_| WireError::AuthFailure)?;
    let mut pt = ct.to_vec();
    aes_ctr_apply(header_key, nonce.try_into().expect("nonce length"), &mut pt);
    Ok(pt)
}

pub fn frame_plain_blob(plaintext: &[u8]) -> Vec<u8> {
    let mut out = vec![0u8; NONCE_LEN];
    out.extend_from_slice(plaintext);
    out.extend_from_slice(&[0u8; TAG_LEN]);
    out
}

pub fn unframe_plain_blob(blob: &[u8]) -> Result<Vec<u8>, WireError> {
    if blob.len() < NONCE_LEN + TAG_LEN {
        return Err(parse_err("control blob too short"));
    }
    Ok(blob[NONCE_LEN..blob.len() - TAG_LEN].to_vec())
}

/// Small bounds-checked cursor shared by the decoders.
pub(crate) struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    pub(crate) fn new(buf: &'a [u8]) -> Self {
        Reader { buf, pos: 0 }
    }

    pub(crate) fn take(&mut self, n: usize) -> Result<&'a [u8], WireError> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| parse_err("truncated input"))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    pub(crate) fn u8(&mut self) -> Result<u8, WireError> {
        Ok(self.take(1)?[0])
    }

    pub(crate) fn u32(&mut self) -> Result<u32, WireError> {
        Ok(u32::from_be_bytes(self.array::<4>()?))
    }

    pub(crate) fn u64(&mut self) -> Result<u64, WireError> {
        Ok(u64::from_be_bytes(self.array::<8>()?))
    }

    pub(crate) fn array<const N: usize>(&mut self) -> Result<[u8; N], WireError> {
        Ok(self.take(N)?.try_into().expect("length checked"))
    }

    pub(crate) fn rest(&mut self) -> &'a [u8] {
        let s = &self.buf[self.pos..];
        self.pos = self.buf.len();
        s
    }

    pub(crate) fn finish(&self) -> Result<(), WireError> {
        if self.pos == self.buf.len() {
            Ok(())
        } else {
            Err(parse_err("trailing bytes"))
        }
    }
}
