//! Simulated trusted-execution boundary.
//!
//! A [`SealedContext`] exclusively owns the deployment keys and the
//! plaintext state of a process. Plaintext is only reachable inside the
//! closures passed to [`SealedContext::enter`] and friends; whatever those
//! closures emit is sealed before it leaves. Values that are allowed to cross
//! the boundary in the clear must implement [`Egress`], which keeps every
//! declassification point greppable.
//!
//! The API mirrors enclave entry/exit so that a hardware backend could
//! replace the simulation without touching callers.

use std::fmt;
use std::str::FromStr;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{RwLock, RwLockReadGuard, RwLockWriteGuard};
use std::time::Instant;

use serde::Serialize;
use thiserror::Error;

use crate::wire::{
    self, Envelope, Header, MessageType, NonceSource, SymmetricKey, WireError,
};

pub const HEADER_KEY_ENV: &str = "SEALMR_HEADER_KEY";
pub const PAYLOAD_KEY_ENV: &str = "SEALMR_PAYLOAD_KEY";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize)]
pub enum SealMode {
    /// Guarded region plus encryption.
    Sealed,
    /// Plaintext wire, no region bookkeeping: the native baseline.
    PassthroughNoCrypto,
    /// Encryption without the guarded-region bookkeeping.
    PassthroughCrypto,
}

impl SealMode {
    pub const ALL: [SealMode; 3] =
        [SealMode::PassthroughNoCrypto, SealMode::PassthroughCrypto, SealMode::Sealed];

    pub fn as_str(self) -> &'static str {
        match self {
            SealMode::Sealed => "sealed",
            SealMode::PassthroughNoCrypto => "plain",
            SealMode::PassthroughCrypto => "crypto-only",
        }
    }

    pub fn encrypts(self) -> bool {
        !matches!(self, SealMode::PassthroughNoCrypto)
    }

    pub fn guarded(self) -> bool {
        matches!(self, SealMode::Sealed)
    }
}

impl fmt::Display for SealMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for SealMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "sealed" => Ok(SealMode::Sealed),
            "plain" => Ok(SealMode::PassthroughNoCrypto),
            "crypto-only" | "crypto" => Ok(SealMode::PassthroughCrypto),
            other => Err(format!("unknown seal mode {other:?} (expected sealed, plain or crypto-only)")),
        }
    }
}

/// Process-wide behaviour selected by a [`SealMode`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RegionConfig {
    pub mode: SealMode,
    pub encrypt: bool,
    pub bookkeeping: bool,
}

pub fn toggle(mode: SealMode) -> RegionConfig {
    RegionConfig { mode, encrypt: mode.encrypts(), bookkeeping: mode.guarded() }
}

/// Key material handed to a context at construction. The router gets only
/// the header key.
#[derive(Debug, Clone)]
pub struct RegionKeys {
    header: SymmetricKey,
    payload: Option<SymmetricKey>,
}

impl RegionKeys {
    pub fn new(header: SymmetricKey, payload: Option<SymmetricKey>) -> Self {
        RegionKeys { header, payload }
    }

    /// Fresh header and payload keys for a local deployment.
    pub fn random() -> Self {
        RegionKeys { header: SymmetricKey::random(), payload: Some(SymmetricKey::random()) }
    }

    /// Environment variables that reproduce these keys in a child process.
    pub fn to_env(&self) -> Vec<(&'static str, String)> {
        let mut v = vec![(HEADER_KEY_ENV, self.header.to_hex())];
        if let Some(p) = &self.payload {
            v.push((PAYLOAD_KEY_ENV, p.to_hex()));
        }
        v
    }

    pub fn router_only(&self) -> RegionKeys {
        RegionKeys { header: self.header.clone(), payload: None }
    }

    /// Reads `SEALMR_HEADER_KEY` and (when `need_payload`) `SEALMR_PAYLOAD_KEY`.
    /// In plain mode missing keys are replaced by zero keys, which are never used.
    pub fn from_env(mode: SealMode, need_payload: bool) -> Result<Self, RegionError> {
        let read = |name: &str| -> Result<Option<SymmetricKey>, RegionError> {
            match std::env::var(name) {
                Ok(v) => SymmetricKey::from_hex(&v)
                    .map(Some)
                    .map_err(|e| RegionError::Config(format!("{name}: {e}"))),
                Err(_) => Ok(None),
            }
        };
        let header = read(HEADER_KEY_ENV)?;
        let payload = if need_payload { read(PAYLOAD_KEY_ENV)? } else { None };
        let zero = || SymmetricKey::from_bytes([0u8; 16]);
        if !mode.encrypts() {
            return Ok(RegionKeys {
                header: header.unwrap_or_else(zero),
                payload: need_payload.then(|| payload.unwrap_or_else(zero)),
            });
        }
        let header = header
            .ok_or_else(|| RegionError::Config(format!("{HEADER_KEY_ENV} is not set")))?;
        if need_payload && payload.is_none() {
            return Err(RegionError::Config(format!("{PAYLOAD_KEY_ENV} is not set")));
        }
        Ok(RegionKeys { header, payload })
    }
}

#[derive(Debug, Error)]
pub enum RegionError {
    #[error(transparent)]
    Wire(#[from] WireError),
    #[error("region fault: {0}")]
    RegionFault(String),
    #[error("region configuration: {0}")]
    Config(String),
}

/// Error raised by a region function; the context turns it into
/// [`RegionError::RegionFault`] and discards pending emissions.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RegionFault(pub String);

impl RegionFault {
    pub fn new(msg: impl fmt::Display) -> Self {
        RegionFault(msg.to_string())
    }
}

impl fmt::Display for RegionFault {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for RegionFault {}

/// Values that may leave a region unencrypted.
pub trait Egress {}

impl Egress for () {}
impl Egress for bool {}
impl Egress for usize {}
impl Egress for u64 {}
impl Egress for i64 {}
impl<T: Egress> Egress for Option<T> {}
impl<T: Egress> Egress for Vec<T> {}
impl<T: Egress> Egress for std::collections::BTreeSet<T> {}
impl<A: Egress, B: Egress> Egress for (A, B) {}
impl Egress for MessageType {}

/// A decrypted message, only ever handed to region functions.
pub struct Opened {
    pub header: Header,
    pub payload: Vec<u8>,
    scrub: bool,
}

impl Opened {
    pub fn msg_type(&self) -> MessageType {
        self.header.msg_type()
    }
}

impl Drop for Opened {
    fn drop(&mut self) {
        if self.scrub {
            self.payload.fill(0);
        }
    }
}

/// Collects the messages a region function wants to publish.
#[derive(Default)]
pub struct Emitter {
    out: Vec<(MessageType, Header, Vec<u8>)>,
}

impl Emitter {
    pub fn emit(&mut self, header: Header, payload: Vec<u8>) {
        let ty = header.msg_type();
        self.out.push((ty, header, payload));
    }

    pub fn len(&self) -> usize {
        self.out.len()
    }

    pub fn is_empty(&self) -> bool {
        self.out.is_empty()
    }
}

#[derive(Debug, Default)]
struct Counters {
    entries: AtomicU64,
    nanos_inside: AtomicU64,
    bytes_sealed: AtomicU64,
    bytes_unsealed: AtomicU64,
    auth_failures: AtomicU64,
    parse_failures: AtomicU64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct RegionMetrics {
    pub entries: u64,
    pub nanos_inside: u64,
    pub bytes_sealed: u64,
    pub bytes_unsealed: u64,
    pub auth_failures: u64,
    pub parse_failures: u64,
}

pub struct SealedContext<S> {
    region_id: String,
    config: RegionConfig,
    keys: RegionKeys,
    nonces: NonceSource,
    state: RwLock<S>,
    counters: Counters,
}

impl<S> fmt::Debug for SealedContext<S> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("SealedContext")
            .field("region_id", &self.region_id)
            .field("mode", &self.config.mode)
            .finish_non_exhaustive()
    }
}

struct EntryGuard<'a> {
    counters: &'a Counters,
    started: Option<Instant>,
}

impl Drop for EntryGuard<'_> {
    fn drop(&mut self) {
        if let Some(t) = self.started {
            self.counters.nanos_inside.fetch_add(t.elapsed().as_nanos() as u64, Ordering::Relaxed);
        }
    }
}

impl<S> SealedContext<S> {
    pub fn new(region_id: impl Into<String>, config: RegionConfig, keys: RegionKeys, state: S) -> Self {
        SealedContext {
            region_id: region_id.into(),
            config,
            keys,
            nonces: NonceSource::new(),
            state: RwLock::new(state),
            counters: Counters::default(),
        }
    }

    pub fn region_id(&self) -> &str {
        &self.region_id
    }

    pub fn mode(&self) -> SealMode {
        self.config.mode
    }

    pub fn metrics(&self) -> RegionMetrics {
        let c = &self.counters;
        RegionMetrics {
            entries: c.entries.load(Ordering::Relaxed),
            nanos_inside: c.nanos_inside.load(Ordering::Relaxed),
            bytes_sealed: c.bytes_sealed.load(Ordering::Relaxed),
            bytes_unsealed: c.bytes_unsealed.load(Ordering::Relaxed),
            auth_failures: c.auth_failures.load(Ordering::Relaxed),
            parse_failures: c.parse_failures.load(Ordering::Relaxed),
        }
    }

    fn entry(&self) -> EntryGuard<'_> {
        if self.config.bookkeeping {
            self.counters.entries.fetch_add(1, Ordering::Relaxed);
            EntryGuard { counters: &self.counters, started: Some(Instant::now()) }
        } else {
            EntryGuard { counters: &self.counters, started: None }
        }
    }

    fn write_state(&self) -> RwLockWriteGuard<'_, S> {
        self.state.write().unwrap_or_else(|e| e.into_inner())
    }

    fn read_state(&self) -> RwLockReadGuard<'_, S> {
        self.state.read().unwrap_or_else(|e| e.into_inner())
    }

    fn note_failure(&self, e: &WireError) {
        match e {
            WireError::AuthFailure => self.counters.auth_failures.fetch_add(1, Ordering::Relaxed),
            _ => self.counters.parse_failures.fetch_add(1, Ordering::Relaxed),
        };
    }

    fn open(&self, env: &Envelope) -> Result<Opened, WireError> {
        let result = if self.config.encrypt {
            let pk = self.keys.payload.as_ref().ok_or(WireError::MissingPayloadKey)?;
            wire::open_envelope(env, &self.keys.header, pk)
        } else {
            wire::unframe_plain(env)
        };
        match result {
            Ok((header, payload)) => {
                if self.config.bookkeeping {
                    self.counters
                        .bytes_unsealed
                        .fetch_add((env.header_ct.len() + env.payload_ct.len()) as u64, Ordering::Relaxed);
                }
                Ok(Opened { header, payload, scrub: self.config.bookkeeping })
            }
            Err(e) => {
                self.note_failure(&e);
                Err(e)
            }
        }
    }

    fn seal_all(&self, emitter: Emitter) -> Result<Vec<Envelope>, WireError> {
        let mut out = Vec::with_capacity(emitter.out.len());
        for (ty, header, mut payload) in emitter.out {
            let env = if self.config.encrypt {
                let pk = self.keys.payload.as_ref().ok_or(WireError::MissingPayloadKey)?;
                wire::seal_envelope(ty, &header, &payload, &self.keys.header, pk, &self.nonces)
            } else {
                wire::frame_plain(ty, &header, &payload)
            };
            if self.config.bookkeeping {
                self.counters
                    .bytes_sealed
                    .fetch_add((env.header_ct.len() + env.payload_ct.len()) as u64, Ordering::Relaxed);
                payload.fill(0);
            }
            out.push(env);
        }
        Ok(out)
    }

    /// Opens `env`, runs `f` over the plaintext and seals everything `f`
    /// emitted. A fault discards all emissions.
    pub fn enter<F>(&self, env: &Envelope, f: F) -> Result<Vec<Envelope>, RegionError>
    where
        F: FnOnce(&mut S, Opened, &mut Emitter) -> Result<(), RegionFault>,
    {
        self.enter_with(env, |s, o, e| f(s, o, e)).map(|((), envs)| envs)
    }

    /// Like [`enter`](Self::enter) but also returns a declassified value.
    pub fn enter_with<R, F>(&self, env: &Envelope, f: F) -> Result<(R, Vec<Envelope>), RegionError>
    where
        R: Egress,
        F: FnOnce(&mut S, Opened, &mut Emitter) -> Result<R, RegionFault>,
    {
        let _guard = self.entry();
        let opened = self.open(env)?;
        let mut emitter = Emitter::default();
        let r = {
            let mut state = self.write_state();
            f(&mut state, opened, &mut emitter).map_err(|e| RegionError::RegionFault(e.0))?
        };
        Ok((r, self.seal_all(emitter)?))
    }

    /// Entry without an inbound message (e.g. originating a publication).
    pub fn call<R, F>(&self, f: F) -> Result<(R, Vec<Envelope>), RegionError>
    where
        R: Egress,
        F: FnOnce(&mut S, &mut Emitter) -> Result<R, RegionFault>,
    {
        let _guard = self.entry();
        let mut emitter = Emitter::default();
        let r = {
            let mut state = self.write_state();
            f(&mut state, &mut emitter).map_err(|e| RegionError::RegionFault(e.0))?
        };
        Ok((r, self.seal_all(emitter)?))
    }

    /// Router path: verifies the frame and decrypts only the header. The
    /// payload stays encrypted; this context may not even hold its key.
    pub fn enter_header<R, F>(&self, env: &Envelope, f: F) -> Result<R, RegionError>
    where
        R: Egress,
        F: FnOnce(&S, &Header) -> R,
    {
        let _guard = self.entry();
        let header = self.open_header(env)?;
        let state = self.read_state();
        Ok(f(&state, &header))
    }

    fn open_header(&self, env: &Envelope) -> Result<Header, WireError> {
        let result = if self.config.encrypt {
            wire::open_header(env, &self.keys.header)
        } else {
            wire::unframe_plain(env).map(|(h, _)| h)
        };
        match result {
            Ok(h) => {
                if self.config.bookkeeping {
                    self.counters.bytes_unsealed.fetch_add(env.header_ct.len() as u64, Ordering::Relaxed);
                }
                Ok(h)
            }
            Err(e) => {
                self.note_failure(&e);
                Err(e)
            }
        }
    }

    /// Seals a control blob (subscriptions) under the header key.
    pub fn seal_control(&self, plaintext: &[u8]) -> Vec<u8> {
        let _guard = self.entry();
        if self.config.encrypt {
            wire::seal_blob(plaintext, &self.keys.header, &self.nonces)
        } else {
            wire::frame_plain_blob(plaintext)
        }
    }

    /// Opens a control blob and hands the plaintext to `f` together with
    /// mutable state (subscription registration).
    pub fn enter_control<R, F>(&self, blob: &[u8], f: F) -> Result<R, RegionError>
    where
        R: Egress,
        F: FnOnce(&mut S, &[u8]) -> Result<R, RegionFault>,
    {
        let _guard = self.entry();
        let opened = if self.config.encrypt {
            wire::open_blob(blob, &self.keys.header)
        } else {
            wire::unframe_plain_blob(blob)
        };
        let mut plaintext = opened.inspect_err(|e| self.note_failure(e))?;
        let r = {
            let mut state = self.write_state();
            f(&mut state, &plaintext).map_err(|e| RegionError::RegionFault(e.0))
        };
        if self.config.bookkeeping {
            plaintext.fill(0);
        }
        r
    }

    /// Read-only access for re-entrant region functions.
    pub fn inspect<R: Egress>(&self, f: impl FnOnce(&S) -> R) -> R {
        let _guard = self.entry();
        f(&self.read_state())
    }

    /// Mutating access without message I/O.
    pub fn update<R: Egress>(&self, f: impl FnOnce(&mut S) -> R) -> R {
        let _guard = self.entry();
        f(&mut self.write_state())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::wire::attr;

    fn keys() -> RegionKeys {
        RegionKeys::new(
            SymmetricKey::from_bytes([3u8; 16]),
            Some(SymmetricKey::from_bytes([5u8; 16])),
        )
    }

    fn ctx(mode: SealMode) -> SealedContext<u64> {
        SealedContext::new("test", toggle(mode), keys(), 0)
    }

    fn counter_msg(ctx: &SealedContext<u64>, n: i64) -> Envelope {
        let (_, mut envs) = ctx
            .call(|_, em| {
                em.emit(Header::new(MessageType::Result).with(attr::JOB_ID, "t"), n.to_string().into_bytes());
                Ok(())
            })
            .unwrap();
        envs.pop().unwrap()
    }

    fn read_back(ctx: &SealedContext<u64>, env: &Envelope) -> (Header, Vec<u8>) {
        let mut got = None;
        ctx.enter(env, |_, o, _| {
            got = Some((o.header.clone(), o.payload.clone()));
            Ok(())
        })
        .unwrap();
        got.unwrap()
    }

    #[test]
    fn identity_region_function() {
        for mode in SealMode::ALL {
            let c = ctx(mode);
            let env = counter_msg(&c, 41);
            let (h, p) = read_back(&c, &env);
            let out = c
                .enter(&env, |_, o, em| {
                    em.emit(o.header.clone(), o.payload.clone());
                    Ok(())
                })
                .unwrap();
            assert_eq!(out.len(), 1);
            assert_eq!(read_back(&c, &out[0]), (h, p));
        }
    }

    #[test]
    fn increment_inside_region() {
        let c = ctx(SealMode::Sealed);
        let env = counter_msg(&c, 41);
        // oracle: plaintext arithmetic on a copy outside the region
        let expected = 41i64 + 1;
        let out = c
            .enter(&env, |_, o, em| {
                let n: i64 = std::str::from_utf8(&o.payload).unwrap().parse().unwrap();
                em.emit(o.header.clone(), (n + 1).to_string().into_bytes());
                Ok(())
            })
            .unwrap();
        let (_, p) = read_back(&c, &out[0]);
        assert_eq!(String::from_utf8(p).unwrap(), expected.to_string());
        assert!(!out[0].to_bytes().windows(2).any(|w| w == b"42"));
    }

    #[test]
    fn fault_emits_nothing() {
        let c = ctx(SealMode::Sealed);
        let env = counter_msg(&c, 1);
        let r = c.enter(&env, |_, o, em| {
            em.emit(o.header.clone(), vec![1, 2, 3]);
            Err(RegionFault::new("boom"))
        });
        assert!(matches!(r, Err(RegionError::RegionFault(m)) if m == "boom"));
    }

    #[test]
    fn auth_failure_propagates_and_is_counted() {
        let c = ctx(SealMode::Sealed);
        let mut env = counter_msg(&c, 1);
        env.payload_ct[0] ^= 0x80;
        let r = c.enter(&env, |_, _, _| Ok(()));
        assert!(matches!(r, Err(RegionError::Wire(WireError::AuthFailure))));
        assert_eq!(c.metrics().auth_failures, 1);
    }

    #[test]
    fn router_context_cannot_open_payload() {
        let full = ctx(SealMode::Sealed);
        let router = SealedContext::new("router", toggle(SealMode::Sealed), keys().router_only(), ());
        let env = counter_msg(&full, 9);
        let ty = router.enter_header(&env, |_, h| h.msg_type()).unwrap();
        assert_eq!(ty, MessageType::Result);
        let r = router.enter(&env, |_, _, _| Ok(()));
        assert!(matches!(r, Err(RegionError::Wire(WireError::MissingPayloadKey))));
    }

    #[test]
    fn plain_mode_is_readable_sealed_is_not() {
        let payload = b"the cat sat".to_vec();
        let emit = |c: &SealedContext<u64>| {
            c.call(|_, em| {
                em.emit(Header::new(MessageType::MapDataType).with(attr::DEST_ID, 0i64), payload.clone());
                Ok(())
            })
            .unwrap()
            .1
            .pop()
            .unwrap()
            .to_bytes()
        };
        let contains = |hay: &[u8], needle: &[u8]| hay.windows(needle.len()).any(|w| w == needle);
        assert!(contains(&emit(&ctx(SealMode::PassthroughNoCrypto)), b"cat"));
        assert!(!contains(&emit(&ctx(SealMode::Sealed)), b"cat"));
        assert!(!contains(&emit(&ctx(SealMode::PassthroughCrypto)), b"cat"));
    }

    #[test]
    fn bookkeeping_only_in_sealed_mode() {
        let sealed = ctx(SealMode::Sealed);
        let crypto = ctx(SealMode::PassthroughCrypto);
        for c in [&sealed, &crypto] {
            let env = counter_msg(c, 5);
            read_back(c, &env);
        }
        assert_eq!(sealed.metrics().entries, 2);
        assert!(sealed.metrics().bytes_sealed > 0 && sealed.metrics().bytes_unsealed > 0);
        assert_eq!(crypto.metrics().entries, 0);
        assert_eq!(crypto.metrics().bytes_sealed, 0);
    }

    #[test]
    fn control_blob_round_trip() {
        for mode in SealMode::ALL {
            let c = ctx(mode);
            let blob = c.seal_control(b"{\"a\":1}");
            let got = c.enter_control(&blob, |s, p| {
                *s += p.len() as u64;
                Ok(*s)
            });
            assert_eq!(got.unwrap(), 7);
        }
    }

    #[test]
    fn mode_strings() {
        assert_eq!("sealed".parse::<SealMode>().unwrap(), SealMode::Sealed);
        assert_eq!("plain".parse::<SealMode>().unwrap(), SealMode::PassthroughNoCrypto);
        assert_eq!("crypto-only".parse::<SealMode>().unwrap(), SealMode::PassthroughCrypto);
        assert!("enclave".parse::<SealMode>().is_err());
        for m in SealMode::ALL {
            assert_eq!(m.as_str().parse::<SealMode>().unwrap(), m);
        }
        let cfg = toggle(SealMode::PassthroughCrypto);
        assert!(cfg.encrypt && !cfg.bookkeeping);
    }
}
