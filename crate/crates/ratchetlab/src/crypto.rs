//! Cryptographic primitives: X25519 Diffie-Hellman, HKDF-SHA256, HMAC-SHA256,
//! an encrypt-then-MAC AEAD built from AES-256-CBC + HMAC, prekey signatures,
//! and a small-modulus Diffie-Hellman oracle for pedagogy.
//!
//! Everything here is a pure function of its inputs plus an injected entropy
//! source; there is no shared mutable state.

use aes::cipher::{block_padding::Pkcs7, BlockDecryptMut, BlockEncryptMut, KeyIvInit};
use curve25519_dalek::constants::ED25519_BASEPOINT_TABLE;
use curve25519_dalek::montgomery::MontgomeryPoint;
use curve25519_dalek::scalar::Scalar;
use ed25519_dalek::hazmat::{raw_sign, raw_verify, ExpandedSecretKey};
use ed25519_dalek::VerifyingKey;
use hkdf::Hkdf;
use hmac::{Hmac, Mac};
use rand_core::{CryptoRng, RngCore};
use serde::{Deserialize, Serialize};
use sha2::{Sha256, Sha512};
use zeroize::Zeroize;

type Aes256CbcEnc = cbc::Encryptor<aes::Aes256>;
type Aes256CbcDec = cbc::Decryptor<aes::Aes256>;
type HmacSha256 = Hmac<Sha256>;

/// Domain-separation constants. These are the interoperability contract:
/// any reimplementation must use the same byte strings to talk to this one.
pub mod consts {
    /// HKDF info for deriving the X3DH master secret from concatenated DH outputs.
    pub const INFO_X3DH_SK: &[u8] = b"x3dh-sk-v1";
    /// HKDF info for a root-chain step of the Double Ratchet.
    pub const INFO_ROOT_STEP: &[u8] = b"root-step-v1";
    /// Reserved for the symmetric chain step (the chain itself advances via
    /// HMAC with the [`CHAIN_LABEL_NEXT`] byte; this label is part of the
    /// published constant set for forward compatibility).
    pub const INFO_CHAIN_STEP: &[u8] = b"chain-step-v1";
    /// HKDF info for expanding a chain output into 80 bytes of message-key material.
    pub const INFO_MSG_KEY: &[u8] = b"msg-key-v1";
    /// HKDF info for deriving the signing-nonce prefix from an identity private key.
    pub const INFO_SIG_KEY: &[u8] = b"sig-key-v1";
    /// Prefix prepended to DH1 || DH2 || ... before the X3DH KDF.
    pub const X3DH_PREFIX: [u8; 32] = [0xFF; 32];
    /// Salt used wherever no salt is otherwise specified.
    pub const ZERO_SALT: [u8; 32] = [0x00; 32];
    /// HMAC label deriving message-key input material from a chain key.
    pub const CHAIN_LABEL_MSG: [u8; 1] = [0x01];
    /// HMAC label deriving the next chain key from a chain key.
    pub const CHAIN_LABEL_NEXT: [u8; 1] = [0x02];
}

/// Length of the packed message-key material consumed by the AEAD:
/// 32-byte AES-256 key, 32-byte HMAC key, 16-byte IV.
pub const AEAD_KEY_LEN: usize = 80;

/// HKDF-SHA256 output bound (255 blocks of 32 bytes).
pub const KDF_MAX_OUT: usize = 8160;

const TAG_LEN: usize = 32;
const IV_LEN: usize = 16;
const BLOCK_LEN: usize = 16;

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
pub enum CryptoError {
    #[error("entropy source failed")]
    Entropy,
    #[error("shared secret is all zero (low-order peer point)")]
    NonContributory,
    #[error("bad parameters: {0}")]
    Parameter(&'static str),
    #[error("requested KDF output too long")]
    KdfOutputTooLong,
    #[error("authentication failed")]
    Authentication,
    #[error("malformed ciphertext")]
    Malformed,
    #[error("padding invalid after tag verification")]
    Padding,
}

pub(crate) mod hexarr {
    //! Serde helpers rendering fixed byte arrays as hex strings.
    use serde::{de::Error, Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer, const N: usize>(
        bytes: &[u8; N],
        s: S,
    ) -> Result<S::Ok, S::Error> {
        s.serialize_str(&hex::encode(bytes))
    }

    pub fn deserialize<'de, D: Deserializer<'de>, const N: usize>(
        d: D,
    ) -> Result<[u8; N], D::Error> {
        let text = String::deserialize(d)?;
        let raw = hex::decode(&text).map_err(D::Error::custom)?;
        raw.try_into()
            .map_err(|_| D::Error::custom("wrong byte length"))
    }
}

/// A clamped X25519 secret scalar.
#[derive(Clone, Serialize, Deserialize)]
pub struct PrivateKey(#[serde(with = "hexarr")] [u8; 32]);

impl PrivateKey {
    /// Builds a private key from raw bytes, applying X25519 clamping.
    pub fn from_bytes(mut bytes: [u8; 32]) -> Self {
        bytes[0] &= 248;
        bytes[31] &= 127;
        bytes[31] |= 64;
        PrivateKey(bytes)
    }

    pub fn as_bytes(&self) -> &[u8; 32] {
        &self.0
    }

    /// Clamping invariant, checkable on any generated key.
    pub fn is_clamped(&self) -> bool {
        self.0[0] & 7 == 0 && self.0[31] & 128 == 0 && self.0[31] & 64 == 64
    }
}

impl Drop for PrivateKey {
    fn drop(&mut self) {
        self.0.zeroize();
    }
}

impl std::fmt::Debug for PrivateKey {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str("PrivateKey(..)")
    }
}

/// A 32-byte X25519 group element (Montgomery u-coordinate).
#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct PublicKey(#[serde(with = "hexarr")] pub [u8; 32]);

impl PublicKey {
    pub fn as_bytes(&self) -> &[u8; 32] {
        &self.0
    }
}

impl std::fmt::Debug for PublicKey {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "PublicKey({})", hex::encode(&self.0[..8]))
    }
}

/// A matched private/public pair. `public` is always the basepoint
/// multiplication of `private`.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct KeyPair {
    pub private: PrivateKey,
    pub public: PublicKey,
}

impl KeyPair {
    /// Rebuilds the pair from a secret scalar (clamping applied).
    pub fn from_private(private: PrivateKey) -> Self {
        let public = PublicKey(x25519_dalek::x25519(
            *private.as_bytes(),
            x25519_dalek::X25519_BASEPOINT_BYTES,
        ));
        KeyPair { private, public }
    }
}

/// A 32-byte DH output. Zeroed on drop.
#[derive(Clone, PartialEq, Eq)]
pub struct SharedSecret(pub(crate) [u8; 32]);

impl SharedSecret {
    pub fn from_bytes(bytes: [u8; 32]) -> Self {
        SharedSecret(bytes)
    }

    pub fn as_bytes(&self) -> &[u8; 32] {
        &self.0
    }
}

impl Drop for SharedSecret {
    fn drop(&mut self) {
        self.0.zeroize();
    }
}

impl std::fmt::Debug for SharedSecret {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str("SharedSecret(..)")
    }
}

/// A 64-byte signature over an encoded public key.
#[derive(Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Signature(#[serde(with = "hexarr")] pub [u8; 64]);

impl Signature {
    pub fn from_slice(raw: &[u8]) -> Result<Self, CryptoError> {
        let arr: [u8; 64] = raw.try_into().map_err(|_| CryptoError::Malformed)?;
        Ok(Signature(arr))
    }

    pub fn as_bytes(&self) -> &[u8; 64] {
        &self.0
    }
}

impl std::fmt::Debug for Signature {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Signature({})", hex::encode(&self.0[..8]))
    }
}

/// Generates a fresh clamped key pair from the given entropy source.
pub fn generate_keypair<R: RngCore + CryptoRng>(rng: &mut R) -> Result<KeyPair, CryptoError> {
    let mut seed = [0u8; 32];
    rng.try_fill_bytes(&mut seed)
        .map_err(|_| CryptoError::Entropy)?;
    let pair = KeyPair::from_private(PrivateKey::from_bytes(seed));
    seed.zeroize();
    Ok(pair)
}

/// X25519 Diffie-Hellman. Rejects all-zero outputs so that low-order peer
/// points cannot collapse the shared secret.
///
/// ```
/// use rand::{rngs::StdRng, SeedableRng};
/// use ratchetlab::crypto::{dh, generate_keypair};
///
/// let mut rng = StdRng::seed_from_u64(1);
/// let alice = generate_keypair(&mut rng).unwrap();
/// let bob = generate_keypair(&mut rng).unwrap();
/// assert_eq!(
///     dh(&alice.private, &bob.public).unwrap().as_bytes(),
///     dh(&bob.private, &alice.public).unwrap().as_bytes(),
/// );
/// ```
pub fn dh(own: &PrivateKey, peer: &PublicKey) -> Result<SharedSecret, CryptoError> {
    let out = x25519_dalek::x25519(*own.as_bytes(), *peer.as_bytes());
    if out.iter().all(|b| *b == 0) {
        return Err(CryptoError::NonContributory);
    }
    Ok(SharedSecret(out))
}

/// Parameters for the pedagogical small-modulus Diffie-Hellman exchange.
/// Never used as key material anywhere in the library.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ToyDhParams {
    pub base: u64,
    pub modulus: u64,
}

impl ToyDhParams {
    pub fn new(base: u64, modulus: u64) -> Result<Self, CryptoError> {
        if modulus > 1 << 31 || base > 1 << 31 {
            return Err(CryptoError::Parameter("parameters exceed 2^31"));
        }
        if !is_prime(modulus) {
            return Err(CryptoError::Parameter("modulus is not prime"));
        }
        if base < 2 || base >= modulus {
            return Err(CryptoError::Parameter("base must satisfy 2 <= B < G"));
        }
        Ok(ToyDhParams { base, modulus })
    }
}

fn is_prime(n: u64) -> bool {
    if n < 2 {
        return false;
    }
    if n % 2 == 0 {
        return n == 2;
    }
    let mut d = 3u64;
    while d * d <= n {
        if n % d == 0 {
            return false;
        }
        d += 2;
    }
    true
}

fn mod_pow(mut base: u64, mut exp: u64, modulus: u64) -> u64 {
    let mut acc: u64 = 1;
    base %= modulus;
    while exp > 0 {
        if exp & 1 == 1 {
            acc = ((acc as u128 * base as u128) % modulus as u128) as u64;
        }
        base = ((base as u128 * base as u128) % modulus as u128) as u64;
        exp >>= 1;
    }
    acc
}

/// Runs both sides of the textbook modular-exponentiation exchange and
/// returns (X, Y, S) where X = B^x mod G, Y = B^y mod G, S = B^(xy) mod G.
///
/// ```
/// use ratchetlab::crypto::{toy_dh_roundtrip, ToyDhParams};
///
/// let params = ToyDhParams::new(5, 23).unwrap();
/// assert_eq!(toy_dh_roundtrip(params, 4, 3).unwrap(), (4, 10, 18));
/// ```
pub fn toy_dh_roundtrip(
    params: ToyDhParams,
    x: u64,
    y: u64,
) -> Result<(u64, u64, u64), CryptoError> {
    let g = params.modulus;
    if x < 1 || x >= g - 1 || y < 1 || y >= g - 1 {
        return Err(CryptoError::Parameter("exponent out of range"));
    }
    let big_x = mod_pow(params.base, x, g);
    let big_y = mod_pow(params.base, y, g);
    let s_x = mod_pow(big_y, x, g);
    let s_y = mod_pow(big_x, y, g);
    debug_assert_eq!(s_x, s_y);
    Ok((big_x, big_y, s_x))
}

/// HKDF-SHA256 extract-and-expand.
pub fn kdf(ikm: &[u8], salt: &[u8], info: &[u8], out_len: usize) -> Result<Vec<u8>, CryptoError> {
    if out_len > KDF_MAX_OUT {
        return Err(CryptoError::KdfOutputTooLong);
    }
    let hk = Hkdf::<Sha256>::new(Some(salt), ikm);
    let mut out = vec![0u8; out_len];
    hk.expand(info, &mut out)
        .map_err(|_| CryptoError::KdfOutputTooLong)?;
    Ok(out)
}

/// Convenience KDF(x): HKDF with zero salt, fixed info, 32-byte output.
pub fn kdf32(ikm: &[u8], info: &[u8]) -> [u8; 32] {
    let out = kdf(ikm, &consts::ZERO_SALT, info, 32).expect("32 is within the HKDF bound");
    out.try_into().unwrap()
}

pub fn hmac_sha256(key: &[u8], data: &[u8]) -> [u8; 32] {
    let mut mac = HmacSha256::new_from_slice(key).expect("HMAC accepts any key length");
    mac.update(data);
    mac.finalize().into_bytes().into()
}

/// Encrypt-then-MAC AEAD: AES-256-CBC with PKCS#7 padding, then a full
/// 32-byte HMAC-SHA256 tag over `associated_data || iv || cbc_output`.
/// Wire layout: `iv(16) || cbc_output || tag(32)`.
pub fn aead_encrypt(
    key_material: &[u8; AEAD_KEY_LEN],
    plaintext: &[u8],
    associated_data: &[u8],
) -> Vec<u8> {
    let enc_key = &key_material[0..32];
    let mac_key = &key_material[32..64];
    let iv = &key_material[64..80];

    let cipher = Aes256CbcEnc::new(enc_key.into(), iv.into());
    let body = cipher.encrypt_padded_vec_mut::<Pkcs7>(plaintext);

    let mut out = Vec::with_capacity(IV_LEN + body.len() + TAG_LEN);
    out.extend_from_slice(iv);
    out.extend_from_slice(&body);

    let mut mac = HmacSha256::new_from_slice(mac_key).unwrap();
    mac.update(associated_data);
    mac.update(iv);
    mac.update(&body);
    out.extend_from_slice(&mac.finalize().into_bytes());
    out
}

/// Inverse of [`aead_encrypt`]. The tag is checked (constant time) before
/// any decryption happens.
pub fn aead_decrypt(
    key_material: &[u8; AEAD_KEY_LEN],
    ciphertext: &[u8],
    associated_data: &[u8],
) -> Result<Vec<u8>, CryptoError> {
    if ciphertext.len() < IV_LEN + BLOCK_LEN + TAG_LEN {
        return Err(CryptoError::Malformed);
    }
    let enc_key = &key_material[0..32];
    let mac_key = &key_material[32..64];

    let (iv, rest) = ciphertext.split_at(IV_LEN);
    let (body, tag) = rest.split_at(rest.len() - TAG_LEN);
    if body.len() % BLOCK_LEN != 0 {
        return Err(CryptoError::Malformed);
    }

    let mut mac = HmacSha256::new_from_slice(mac_key).unwrap();
    mac.update(associated_data);
    mac.update(iv);
    mac.update(body);
    mac.verify_slice(tag)
        .map_err(|_| CryptoError::Authentication)?;

    let cipher = Aes256CbcDec::new(enc_key.into(), iv.into());
    cipher
        .decrypt_padded_vec_mut::<Pkcs7>(body)
        .map_err(|_| CryptoError::Padding)
}

fn signing_parts(identity: &KeyPair) -> (ExpandedSecretKey, VerifyingKey) {
    // The signing scalar is the identity DH scalar, negated when needed so
    // the Edwards public point always compresses with sign bit zero. The
    // verifier can then recover it from the Montgomery identity key alone.
    let mut scalar = Scalar::from_bytes_mod_order(*identity.private.as_bytes());
    let mut point = &scalar * ED25519_BASEPOINT_TABLE;
    if point.compress().as_bytes()[31] & 0x80 != 0 {
        scalar = -scalar;
        point = &scalar * ED25519_BASEPOINT_TABLE;
    }
    let hash_prefix: [u8; 32] = kdf32(identity.private.as_bytes(), consts::INFO_SIG_KEY);
    let esk = ExpandedSecretKey {
        scalar,
        hash_prefix,
    };
    let vk = VerifyingKey::from_bytes(point.compress().as_bytes()).expect("valid Edwards point");
    (esk, vk)
}

/// Signs an encoded signed-prekey with the identity key. Deterministic.
pub fn sign_prekey(identity: &KeyPair, encoded_spk: &[u8]) -> Signature {
    let (esk, vk) = signing_parts(identity);
    Signature(raw_sign::<Sha512>(&esk, encoded_spk, &vk).to_bytes())
}

/// Verifies a prekey signature under an identity public key. Malformed
/// signatures yield `false`, never an error.
pub fn verify_prekey(identity_pub: &PublicKey, encoded_spk: &[u8], sig: &[u8]) -> bool {
    let Ok(sig) = Signature::from_slice(sig) else {
        return false;
    };
    let Some(edwards) = MontgomeryPoint(*identity_pub.as_bytes()).to_edwards(0) else {
        return false;
    };
    let Ok(vk) = VerifyingKey::from_bytes(edwards.compress().as_bytes()) else {
        return false;
    };
    raw_verify::<Sha512>(&vk, encoded_spk, &ed25519_dalek::Signature::from_bytes(&sig.0)).is_ok()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::rngs::StdRng;
    use rand::SeedableRng;

    fn pair_from_seed(seed: u8) -> KeyPair {
        KeyPair::from_private(PrivateKey::from_bytes([seed; 32]))
    }

    #[test]
    fn keypair_deterministic_under_fixed_seed() {
        let mut r1 = StdRng::from_seed([0u8; 32]);
        let mut r2 = StdRng::from_seed([0u8; 32]);
        let a = generate_keypair(&mut r1).unwrap();
        let b = generate_keypair(&mut r2).unwrap();
        assert_eq!(a.public, b.public);
        assert!(a.private.is_clamped());
    }

    #[test]
    fn distinct_seeds_distinct_keys() {
        let a = pair_from_seed(1);
        let b = pair_from_seed(2);
        assert_ne!(a.public, b.public);
    }

    #[test]
    fn basepoint_vector_seed_77() {
        // Expected value computed with an independent X25519 implementation
        // (RFC 7748 ladder) over the clamped scalar 0x77 * 32.
        let pair = pair_from_seed(0x77);
        assert_eq!(
            hex::encode(pair.public.as_bytes()),
            "1cf579aba45a10ba1d1ef06d91fca2aa9ed0a1150515653155405d0b18cb9a67"
        );
    }

    #[test]
    fn dh_symmetry() {
        let a = pair_from_seed(3);
        let b = pair_from_seed(4);
        let s1 = dh(&a.private, &b.public).unwrap();
        let s2 = dh(&b.private, &a.public).unwrap();
        assert_eq!(s1.as_bytes(), s2.as_bytes());
    }

    #[test]
    fn dh_rfc7748_vector() {
        // RFC 7748 section 5.2, first test vector.
        let scalar: [u8; 32] =
            hex::decode("a546e36bf0527c9d3b16154b82465edd62144c0ac1fc5a18506a2244ba449ac4")
                .unwrap()
                .try_into()
                .unwrap();
        let point: [u8; 32] =
            hex::decode("e6db6867583030db3594c1a424b15f7c726624ec26b3353b10a903a6d0ab1c4c")
                .unwrap()
                .try_into()
                .unwrap();
        let out = x25519_dalek::x25519(scalar, point);
        assert_eq!(
            hex::encode(out),
            "c3da55379de9c6908e94ea4df28d084f32eccf03491c71f754b4075577a28552"
        );
    }

    #[test]
    fn dh_rejects_low_order_point() {
        let a = pair_from_seed(5);
        // The identity element and an order-8 point, both from the standard
        // list of small-order Curve25519 points.
        let zero = PublicKey([0u8; 32]);
        assert_eq!(dh(&a.private, &zero), Err(CryptoError::NonContributory));
        let order8: [u8; 32] =
            hex::decode("e0eb7a7c3b41b8ae1656e3faf19fc46ada098deb9c32b1fd866205165f49b800")
                .unwrap()
                .try_into()
                .unwrap();
        assert_eq!(
            dh(&a.private, &PublicKey(order8)),
            Err(CryptoError::NonContributory)
        );
    }

    #[test]
    fn toy_dh_worked_example() {
        // Checked by hand: 5^4 mod 23 = 4, 5^3 mod 23 = 10, 5^12 mod 23 = 18.
        let params = ToyDhParams::new(5, 23).unwrap();
        assert_eq!(toy_dh_roundtrip(params, 4, 3).unwrap(), (4, 10, 18));
    }

    #[test]
    fn toy_dh_exponent_one() {
        let params = ToyDhParams::new(5, 23).unwrap();
        assert_eq!(toy_dh_roundtrip(params, 1, 1).unwrap(), (5, 5, 5));
    }

    #[test]
    fn toy_dh_rejects_nonprime_modulus() {
        assert_eq!(
            ToyDhParams::new(5, 24),
            Err(CryptoError::Parameter("modulus is not prime"))
        );
    }

    #[test]
    fn hkdf_rfc5869_case_1() {
        let ikm = [0x0b; 22];
        let salt: Vec<u8> = (0x00..=0x0c).collect();
        let info: Vec<u8> = (0xf0..=0xf9).collect();
        let okm = kdf(&ikm, &salt, &info, 42).unwrap();
        assert_eq!(
            hex::encode(&okm),
            "3cb25f25faacd57a90434f64d0362f2a2d2d0a90cf1a5a4c5db02d56ecc4c5bf\
             34007208d5b887185865"
        );
    }

    #[test]
    fn kdf_info_separates_outputs() {
        let a = kdf(b"ikm", b"salt", b"info-a", 32).unwrap();
        let b = kdf(b"ikm", b"salt", b"info-b", 32).unwrap();
        assert_ne!(a, b);
        assert_eq!(a, kdf(b"ikm", b"salt", b"info-a", 32).unwrap());
    }

    #[test]
    fn kdf_output_bound() {
        assert!(kdf(b"x", b"", b"", KDF_MAX_OUT).is_ok());
        assert_eq!(
            kdf(b"x", b"", b"", KDF_MAX_OUT + 1),
            Err(CryptoError::KdfOutputTooLong)
        );
    }

    #[test]
    fn hmac_rfc4231_case_1() {
        let tag = hmac_sha256(&[0x0b; 20], b"Hi There");
        assert_eq!(
            hex::encode(tag),
            "b0344c61d8db38535ca8afceaf0bf12b881dc200c9833da726e9376c2e32cff7"
        );
    }

    #[test]
    fn hmac_deterministic_and_bit_sensitive() {
        let t1 = hmac_sha256(b"key", b"data");
        assert_eq!(t1, hmac_sha256(b"key", b"data"));
        assert_ne!(t1, hmac_sha256(b"key", b"dat\x60")); // one bit flipped in 'a'
    }

    fn test_mk(seed: u8) -> [u8; AEAD_KEY_LEN] {
        let mut mk = [0u8; AEAD_KEY_LEN];
        for (i, b) in mk.iter_mut().enumerate() {
            *b = seed.wrapping_add(i as u8);
        }
        mk
    }

    #[test]
    fn aead_round_trip() {
        let mk = test_mk(9);
        let ct = aead_encrypt(&mk, b"hello world", b"ad");
        assert_eq!(aead_decrypt(&mk, &ct, b"ad").unwrap(), b"hello world");
    }

    #[test]
    fn aead_ad_binding() {
        let mk = test_mk(9);
        let ct = aead_encrypt(&mk, b"hello", b"ad");
        assert_eq!(
            aead_decrypt(&mk, &ct, b"ae"),
            Err(CryptoError::Authentication)
        );
    }

    #[test]
    fn aead_empty_plaintext() {
        let mk = test_mk(1);
        let ct = aead_encrypt(&mk, b"", b"");
        // one IV, one padding block, one tag
        assert_eq!(ct.len(), IV_LEN + BLOCK_LEN + TAG_LEN);
        assert_eq!(aead_decrypt(&mk, &ct, b"").unwrap(), b"");
    }

    #[test]
    fn aead_truncated_tag_is_malformed() {
        let mk = test_mk(2);
        let ct = aead_encrypt(&mk, b"", b"");
        assert_eq!(
            aead_decrypt(&mk, &ct[..ct.len() - 1], b""),
            Err(CryptoError::Malformed)
        );
        assert_eq!(
            aead_decrypt(&mk, &ct[..IV_LEN + BLOCK_LEN + TAG_LEN - 1], b""),
            Err(CryptoError::Malformed)
        );
    }

    #[test]
    fn aead_single_bit_flip_rejected() {
        let mk = test_mk(3);
        let ct = aead_encrypt(&mk, b"payload bytes", b"ad");
        for i in 0..ct.len() {
            let mut bad = ct.clone();
            bad[i] ^= 0x01;
            assert_eq!(
                aead_decrypt(&mk, &bad, b"ad"),
                Err(CryptoError::Authentication),
                "flip at byte {i} must be rejected"
            );
        }
    }

    #[test]
    fn prekey_signature_round_trip() {
        let identity = pair_from_seed(10);
        let spk = pair_from_seed(11);
        let encoded = crate::session::encode_public(&spk.public);
        let sig = sign_prekey(&identity, &encoded);
        assert!(verify_prekey(&identity.public, &encoded, sig.as_bytes()));
    }

    #[test]
    fn prekey_signature_wrong_identity_fails() {
        let identity = pair_from_seed(10);
        let other = pair_from_seed(12);
        let encoded = crate::session::encode_public(&pair_from_seed(11).public);
        let sig = sign_prekey(&identity, &encoded);
        assert!(!verify_prekey(&other.public, &encoded, sig.as_bytes()));
    }

    #[test]
    fn prekey_signature_bit_flip_fails() {
        let identity = pair_from_seed(10);
        let encoded = crate::session::encode_public(&pair_from_seed(11).public);
        let sig = sign_prekey(&identity, &encoded);
        for i in [0usize, 17, 63] {
            let mut bad = *sig.as_bytes();
            bad[i] ^= 0x40;
            assert!(!verify_prekey(&identity.public, &encoded, &bad));
        }
    }

    #[test]
    fn prekey_signature_bad_length_is_false() {
        let identity = pair_from_seed(10);
        assert!(!verify_prekey(&identity.public, b"msg", &[0u8; 63]));
        assert!(!verify_prekey(&identity.public, b"msg", &[]));
    }

    #[test]
    fn prekey_signatures_verify_for_many_identities() {
        // The sign-bit normalization must work regardless of which half of
        // the scalar space the identity lands in.
        let mut rng = StdRng::from_seed([42u8; 32]);
        for _ in 0..64 {
            let identity = generate_keypair(&mut rng).unwrap();
            let spk = generate_keypair(&mut rng).unwrap();
            let encoded = crate::session::encode_public(&spk.public);
            let sig = sign_prekey(&identity, &encoded);
            assert!(verify_prekey(&identity.public, &encoded, sig.as_bytes()));
        }
    }
}
