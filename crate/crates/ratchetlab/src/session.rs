//! Glue layer: canonical public-key encoding, wire envelopes, the
//! X3DH-to-Double-Ratchet session lifecycle, and human-comparable safety
//! codes for detecting key substitution.
//!
//! Wire layout (big-endian counters, documented in docs/wire.md):
//!
//! ```text
//! initial = 0x01 0x01 || enc(IK_a,33) || enc(EK_a,33) || spk_id(4)
//!           || opk_flag(1) || [opk_id(4)] || clen(4) || ciphertext
//! normal  = 0x01 0x02 || enc(ratchet_pub,33) || prev_len(4) || index(4)
//!           || clen(4) || ciphertext
//! ```

use rand_core::{CryptoRng, RngCore};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::crypto::{CryptoError, KeyPair, PublicKey};
use crate::ratchet::{RatchetError, RatchetHeader, RatchetState};
use crate::registry::{LogicalTime, PrekeyRegistry, RegistryError};
use crate::x3dh::{self, InitialMessage, ResponderKeys, X3dhError};

pub const WIRE_VERSION: u8 = 0x01;
pub const KIND_INITIAL: u8 = 0x01;
pub const KIND_NORMAL: u8 = 0x02;
const KEY_TYPE_BYTE: u8 = 0x05;
const ENCODED_KEY_LEN: usize = 33;

/// Iterations of the fingerprint hash per identity half.
pub const SAFETY_CODE_ITERATIONS: u32 = 5200;

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
pub enum WireError {
    #[error("input truncated")]
    Truncated,
    #[error("unsupported version byte")]
    BadVersion,
    #[error("unsupported kind byte")]
    BadKind,
    #[error("bad public-key encoding")]
    BadKeyEncoding,
    #[error("length field inconsistent with input")]
    BadLength,
    #[error("trailing bytes after message")]
    TrailingBytes,
}

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
pub enum SessionError {
    #[error(transparent)]
    Wire(#[from] WireError),
    #[error(transparent)]
    Registry(#[from] RegistryError),
    #[error(transparent)]
    X3dh(#[from] X3dhError),
    #[error(transparent)]
    Ratchet(#[from] RatchetError),
    #[error(transparent)]
    Crypto(#[from] CryptoError),
    #[error("no session established with this peer")]
    NoSession,
    #[error("wrong envelope kind for this operation")]
    WrongKind,
}

/// Canonical public-key encoding: a 0x05 type byte followed by the 32 raw
/// key bytes.
pub fn encode_public(key: &PublicKey) -> [u8; ENCODED_KEY_LEN] {
    let mut out = [0u8; ENCODED_KEY_LEN];
    out[0] = KEY_TYPE_BYTE;
    out[1..].copy_from_slice(key.as_bytes());
    out
}

pub fn decode_public(raw: &[u8]) -> Result<PublicKey, WireError> {
    if raw.len() != ENCODED_KEY_LEN {
        return Err(WireError::BadKeyEncoding);
    }
    if raw[0] != KEY_TYPE_BYTE {
        return Err(WireError::BadKeyEncoding);
    }
    Ok(PublicKey(raw[1..].try_into().unwrap()))
}

/// A parsed wire message.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Envelope {
    Initial(InitialMessage),
    Normal {
        header: RatchetHeader,
        ciphertext: Vec<u8>,
    },
}

impl Envelope {
    pub fn seal(&self) -> Vec<u8> {
        match self {
            Envelope::Initial(msg) => seal_initial(msg),
            Envelope::Normal { header, ciphertext } => seal_normal(header, ciphertext),
        }
    }

    pub fn open(raw: &[u8]) -> Result<Envelope, WireError> {
        if raw.len() < 2 {
            return Err(WireError::Truncated);
        }
        if raw[0] != WIRE_VERSION {
            return Err(WireError::BadVersion);
        }
        match raw[1] {
            KIND_INITIAL => Ok(Envelope::Initial(open_initial(raw)?)),
            KIND_NORMAL => {
                let (header, ciphertext) = open_normal(raw)?;
                Ok(Envelope::Normal { header, ciphertext })
            }
            _ => Err(WireError::BadKind),
        }
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], WireError> {
        let end = self.pos.checked_add(n).ok_or(WireError::Truncated)?;
        if end > self.buf.len() {
            return Err(WireError::Truncated);
        }
        let out = &self.buf[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32, WireError> {
        Ok(u32::from_be_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u8(&mut self) -> Result<u8, WireError> {
        Ok(self.take(1)?[0])
    }

    fn finish_ciphertext(mut self) -> Result<Vec<u8>, WireError> {
        let clen = self.u32()? as usize;
        let ct = self.take(clen)?.to_vec();
        if self.pos != self.buf.len() {
            return Err(WireError::TrailingBytes);
        }
        Ok(ct)
    }
}

pub fn seal_initial(msg: &InitialMessage) -> Vec<u8> {
    let mut out = vec![WIRE_VERSION, KIND_INITIAL];
    out.extend_from_slice(&encode_public(&msg.sender_identity_pub));
    out.extend_from_slice(&encode_public(&msg.ephemeral_pub));
    out.extend_from_slice(&msg.spk_id.to_be_bytes());
    match msg.opk_id {
        Some(id) => {
            out.push(0x01);
            out.extend_from_slice(&id.to_be_bytes());
        }
        None => out.push(0x00),
    }
    out.extend_from_slice(&(msg.ciphertext.len() as u32).to_be_bytes());
    out.extend_from_slice(&msg.ciphertext);
    out
}

pub fn open_initial(raw: &[u8]) -> Result<InitialMessage, WireError> {
    let mut r = Reader { buf: raw, pos: 0 };
    if r.u8()? != WIRE_VERSION {
        return Err(WireError::BadVersion);
    }
    if r.u8()? != KIND_INITIAL {
        return Err(WireError::BadKind);
    }
    let sender_identity_pub = decode_public(r.take(ENCODED_KEY_LEN)?)?;
    let ephemeral_pub = decode_public(r.take(ENCODED_KEY_LEN)?)?;
    let spk_id = r.u32()?;
    let opk_id = match r.u8()? {
        0x00 => None,
        0x01 => Some(r.u32()?),
        _ => return Err(WireError::BadLength),
    };
    let ciphertext = r.finish_ciphertext()?;
    Ok(InitialMessage {
        sender_identity_pub,
        ephemeral_pub,
        spk_id,
        opk_id,
        ciphertext,
    })
}

pub fn seal_normal(header: &RatchetHeader, ciphertext: &[u8]) -> Vec<u8> {
    let mut out = vec![WIRE_VERSION, KIND_NORMAL];
    out.extend_from_slice(&header.encode());
    out.extend_from_slice(&(ciphertext.len() as u32).to_be_bytes());
    out.extend_from_slice(ciphertext);
    out
}

pub fn open_normal(raw: &[u8]) -> Result<(RatchetHeader, Vec<u8>), WireError> {
    let mut r = Reader { buf: raw, pos: 0 };
    if r.u8()? != WIRE_VERSION {
        return Err(WireError::BadVersion);
    }
    if r.u8()? != KIND_NORMAL {
        return Err(WireError::BadKind);
    }
    let ratchet_pub = decode_public(r.take(ENCODED_KEY_LEN)?)?;
    let prev_chain_len = r.u32()?;
    let msg_index = r.u32()?;
    let ciphertext = r.finish_ciphertext()?;
    Ok((
        RatchetHeader {
            ratchet_pub,
            prev_chain_len,
            msg_index,
        },
        ciphertext,
    ))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Initiated,
    Responded,
}

/// An established two-party session: the ratchet state plus enough context
/// to verify who it is with.
pub struct Session {
    pub peer: String,
    pub ratchet: RatchetState,
    pub established_via: Role,
    pub ik_remote: PublicKey,
}

impl Session {
    pub fn encrypt(&mut self, plaintext: &[u8]) -> Result<Envelope, SessionError> {
        let (header, ciphertext) = self.ratchet.encrypt(plaintext)?;
        Ok(Envelope::Normal { header, ciphertext })
    }

    pub fn decrypt<R: RngCore + CryptoRng>(
        &mut self,
        envelope: &Envelope,
        rng: &mut R,
    ) -> Result<Vec<u8>, SessionError> {
        match envelope {
            Envelope::Normal { header, ciphertext } => {
                Ok(self.ratchet.decrypt(header, ciphertext, rng)?)
            }
            Envelope::Initial(_) => Err(SessionError::WrongKind),
        }
    }
}

/// Fetches the peer's bundle, runs the initiator side of X3DH, and starts
/// the Double Ratchet against the peer's signed prekey. The returned
/// envelope carries the first plaintext as the session's message #0.
pub fn establish_outbound<R: RngCore + CryptoRng>(
    own_user_id: &str,
    own_identity: &KeyPair,
    registry: &mut PrekeyRegistry,
    peer_id: &str,
    first_plaintext: &[u8],
    now: LogicalTime,
    rng: &mut R,
) -> Result<(Session, Envelope), SessionError> {
    let bundle = registry.fetch_bundle(own_user_id, peer_id, now)?;
    establish_outbound_with_bundle(own_identity, &bundle, peer_id, first_plaintext, rng)
}

/// Same as [`establish_outbound`] but with a caller-supplied bundle; this
/// is the seam where the simulator's adversary substitutes bundles.
///
/// The initial ciphertext plays a dual role: its payload is the sealed
/// ratchet message #0, so the responder learns the initiator's first
/// ratchet public key from the handshake itself and can reply immediately.
pub fn establish_outbound_with_bundle<R: RngCore + CryptoRng>(
    own_identity: &KeyPair,
    bundle: &crate::registry::PrekeyBundle,
    peer_id: &str,
    first_plaintext: &[u8],
    rng: &mut R,
) -> Result<(Session, Envelope), SessionError> {
    let keys = x3dh::initiate_keys(own_identity, bundle, rng)?;
    let mut ratchet =
        RatchetState::init_initiator(&keys.sk, &bundle.spk_pub, keys.ad.clone(), rng)?;
    let (header, ciphertext) = ratchet.encrypt(first_plaintext)?;
    let message_zero = seal_normal(&header, &ciphertext);
    let (_, msg) = x3dh::complete_initiate(keys, &message_zero);
    Ok((
        Session {
            peer: peer_id.to_string(),
            ratchet,
            established_via: Role::Initiated,
            ik_remote: bundle.identity_pub,
        },
        Envelope::Initial(msg),
    ))
}

/// Responder side: runs X3DH from the stored private prekeys, unwraps
/// ratchet message #0 (which carries the initiator's ratchet key and the
/// first plaintext), and performs the responder's first DH-ratchet step.
/// Any failure leaves no session behind.
pub fn establish_inbound<R: RngCore + CryptoRng>(
    keys: &mut ResponderKeys,
    peer_id: &str,
    envelope: &Envelope,
    rng: &mut R,
) -> Result<(Session, Vec<u8>), SessionError> {
    let Envelope::Initial(msg) = envelope else {
        return Err(SessionError::NoSession);
    };
    let spk_pair = keys
        .spk_lookup
        .get(&msg.spk_id)
        .cloned()
        .ok_or(X3dhError::MissingKey)?;
    let (sk, ad, message_zero) = x3dh::respond(keys, msg)?;
    let mut ratchet = RatchetState::init_responder(&sk, spk_pair, ad);
    let (header, ciphertext) = open_normal(&message_zero)?;
    let first_plaintext = ratchet.decrypt(&header, &ciphertext, rng)?;
    Ok((
        Session {
            peer: peer_id.to_string(),
            ratchet,
            established_via: Role::Responded,
            ik_remote: msg.sender_identity_pub,
        },
        first_plaintext,
    ))
}

/// A 60-decimal-digit fingerprint of both identities. Both parties compute
/// the identical string; a mismatch means someone substituted a key.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SafetyCode {
    pub digits: String,
}

impl std::fmt::Display for SafetyCode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        for (i, chunk) in self.digits.as_bytes().chunks(5).enumerate() {
            if i > 0 {
                f.write_str(" ")?;
            }
            f.write_str(std::str::from_utf8(chunk).unwrap())?;
        }
        Ok(())
    }
}

fn fingerprint_half(identity_pub: &PublicKey, user_id: &str) -> String {
    let mut digest = {
        let mut h = Sha256::new();
        h.update([0x00]);
        h.update(encode_public(identity_pub));
        h.update(user_id.as_bytes());
        h.finalize()
    };
    for _ in 0..SAFETY_CODE_ITERATIONS {
        digest = Sha256::digest(&digest);
    }
    // Six groups of five digits from five-byte windows.
    let mut half = String::with_capacity(30);
    for window in digest.chunks(5).take(6) {
        let mut value: u64 = 0;
        for b in window {
            value = (value << 8) | *b as u64;
        }
        half.push_str(&format!("{:05}", value % 100_000));
    }
    half
}

/// Computes the shared safety code for an identity pair. Symmetric: both
/// sides pass their own key first and get the same 60 digits.
pub fn safety_code(
    own_identity_pub: &PublicKey,
    own_user_id: &str,
    peer_identity_pub: &PublicKey,
    peer_user_id: &str,
) -> SafetyCode {
    let own = fingerprint_half(own_identity_pub, own_user_id);
    let peer = fingerprint_half(peer_identity_pub, peer_user_id);
    let (lo, hi) = if own <= peer { (own, peer) } else { (peer, own) };
    SafetyCode {
        digits: format!("{lo}{hi}"),
    }
}
