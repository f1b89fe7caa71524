//! Extended triple Diffie-Hellman session establishment: the initiator
//! verifies the served signed prekey, combines three (or, with a one-time
//! prekey, four) DH outputs into a master secret, and the responder mirrors
//! the computation from its private prekeys.
//!
//! When a one-time prekey is present the derivation uses four DH outputs;
//! without one it uses three. Master-secret input is always
//! `0xFF*32 || DH1 || DH2 || DH3 [|| DH4]`.

use std::collections::BTreeMap;

use rand_core::{CryptoRng, RngCore};
use zeroize::Zeroize;

use crate::crypto::{
    aead_decrypt, aead_encrypt, consts, dh, generate_keypair, kdf, verify_prekey, CryptoError,
    KeyPair, PublicKey, SharedSecret, AEAD_KEY_LEN,
};
use crate::registry::PrekeyBundle;
use crate::session::encode_public;

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
pub enum X3dhError {
    /// The signed-prekey signature failed to verify; the protocol aborts
    /// before any message is produced.
    #[error("prekey signature verification failed, protocol aborted")]
    SignatureInvalid,
    /// Initial-ciphertext decryption failed; the responder erases the
    /// derived secret and terminates.
    #[error("initial ciphertext rejected, protocol terminated")]
    Terminated,
    #[error("no private key for the referenced prekey id")]
    MissingKey,
    #[error(transparent)]
    Crypto(#[from] CryptoError),
}

/// What the initiator keeps after a successful establishment. Contains no
/// ephemeral or DH secrets; those are erased before this value exists.
pub struct InitiatorOutput {
    pub sk: SharedSecret,
    pub ad: Vec<u8>,
    pub ephemeral_pub: PublicKey,
    pub used_spk_id: u32,
    pub used_opk_id: Option<u32>,
    pub initial_ciphertext: Vec<u8>,
}

/// The four-item initial message. Every field is public data.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct InitialMessage {
    pub sender_identity_pub: PublicKey,
    pub ephemeral_pub: PublicKey,
    pub spk_id: u32,
    pub opk_id: Option<u32>,
    pub ciphertext: Vec<u8>,
}

/// The responder's private counterparts of everything it published.
#[derive(Clone)]
pub struct ResponderKeys {
    pub identity: KeyPair,
    pub spk_lookup: BTreeMap<u32, KeyPair>,
    pub opk_lookup: BTreeMap<u32, KeyPair>,
}

impl ResponderKeys {
    pub fn new(identity: KeyPair) -> Self {
        ResponderKeys {
            identity,
            spk_lookup: BTreeMap::new(),
            opk_lookup: BTreeMap::new(),
        }
    }
}

/// AD = Encode(IK_initiator) || Encode(IK_responder), initiator first.
pub fn build_associated_data(ik_initiator: &PublicKey, ik_responder: &PublicKey) -> Vec<u8> {
    let mut ad = encode_public(ik_initiator).to_vec();
    ad.extend_from_slice(&encode_public(ik_responder));
    ad
}

fn derive_sk(dh_outputs: &[&SharedSecret]) -> SharedSecret {
    let mut ikm = consts::X3DH_PREFIX.to_vec();
    for out in dh_outputs {
        ikm.extend_from_slice(out.as_bytes());
    }
    let sk = crate::crypto::kdf32(&ikm, consts::INFO_X3DH_SK);
    ikm.zeroize();
    SharedSecret::from_bytes(sk)
}

/// Key for the initial ciphertext: a PRF of the master secret, never the
/// master secret itself.
pub(crate) fn first_message_key(sk: &SharedSecret) -> [u8; AEAD_KEY_LEN] {
    let mut info = consts::INFO_X3DH_SK.to_vec();
    info.push(0x01);
    let out = kdf(sk.as_bytes(), &consts::ZERO_SALT, &info, AEAD_KEY_LEN)
        .expect("80 bytes is within the HKDF bound");
    out.try_into().unwrap()
}

/// Master secret and public metadata after the DH phase, before the
/// initial payload is sealed. The session layer uses this split to embed
/// the first ratchet message as the initial payload.
pub struct InitiatorKeys {
    pub sk: SharedSecret,
    pub ad: Vec<u8>,
    pub sender_identity_pub: PublicKey,
    pub ephemeral_pub: PublicKey,
    pub used_spk_id: u32,
    pub used_opk_id: Option<u32>,
}

/// DH phase of the initiator side: verify the bundle, run the DH set, and
/// derive the master secret. The ephemeral private key and raw DH outputs
/// are erased before this returns.
pub fn initiate_keys<R: RngCore + CryptoRng>(
    own_identity: &KeyPair,
    bundle: &PrekeyBundle,
    rng: &mut R,
) -> Result<InitiatorKeys, X3dhError> {
    let encoded_spk = encode_public(&bundle.spk_pub);
    if !verify_prekey(
        &bundle.identity_pub,
        &encoded_spk,
        bundle.spk_signature.as_bytes(),
    ) {
        return Err(X3dhError::SignatureInvalid);
    }

    let ephemeral = generate_keypair(rng).map_err(CryptoError::from)?;

    let dh1 = dh(&own_identity.private, &bundle.spk_pub)?;
    let dh2 = dh(&ephemeral.private, &bundle.identity_pub)?;
    let dh3 = dh(&ephemeral.private, &bundle.spk_pub)?;
    let (sk, used_opk_id) = match &bundle.opk {
        Some((opk_id, opk_pub)) => {
            let dh4 = dh(&ephemeral.private, opk_pub)?;
            (derive_sk(&[&dh1, &dh2, &dh3, &dh4]), Some(*opk_id))
        }
        None => (derive_sk(&[&dh1, &dh2, &dh3]), None),
    };
    // DH outputs are erased on drop; the ephemeral private key dies with
    // `ephemeral` at the end of this function. Only `sk` survives.
    drop((dh1, dh2, dh3));

    let ad = build_associated_data(&own_identity.public, &bundle.identity_pub);
    Ok(InitiatorKeys {
        sk,
        ad,
        sender_identity_pub: own_identity.public,
        ephemeral_pub: ephemeral.public,
        used_spk_id: bundle.spk_id,
        used_opk_id,
    })
}

/// Sealing phase: encrypt the initial payload under a key derived from the
/// master secret and assemble the four-item initial message.
pub fn complete_initiate(
    keys: InitiatorKeys,
    first_payload: &[u8],
) -> (InitiatorOutput, InitialMessage) {
    let mut mk = first_message_key(&keys.sk);
    let ciphertext = aead_encrypt(&mk, first_payload, &keys.ad);
    mk.zeroize();
    debug_assert!(mk.iter().all(|b| *b == 0));

    let message = InitialMessage {
        sender_identity_pub: keys.sender_identity_pub,
        ephemeral_pub: keys.ephemeral_pub,
        spk_id: keys.used_spk_id,
        opk_id: keys.used_opk_id,
        ciphertext: ciphertext.clone(),
    };
    (
        InitiatorOutput {
            sk: keys.sk,
            ad: keys.ad,
            ephemeral_pub: keys.ephemeral_pub,
            used_spk_id: keys.used_spk_id,
            used_opk_id: keys.used_opk_id,
            initial_ciphertext: ciphertext,
        },
        message,
    )
}

/// Initiator side, in one call: verify the bundle, run the DH set, derive
/// the master secret, and produce the initial message carrying the first
/// payload.
pub fn initiate<R: RngCore + CryptoRng>(
    own_identity: &KeyPair,
    bundle: &PrekeyBundle,
    first_plaintext: &[u8],
    rng: &mut R,
) -> Result<(InitiatorOutput, InitialMessage), X3dhError> {
    let keys = initiate_keys(own_identity, bundle, rng)?;
    Ok(complete_initiate(keys, first_plaintext))
}

/// Responder side: mirror the DH set from private prekeys, derive the same
/// master secret, and open the initial ciphertext. On success the used
/// one-time prekey private key is deleted; on failure the derived secret is
/// erased and nothing else changes.
pub fn respond(
    keys: &mut ResponderKeys,
    msg: &InitialMessage,
) -> Result<(SharedSecret, Vec<u8>, Vec<u8>), X3dhError> {
    let spk = keys
        .spk_lookup
        .get(&msg.spk_id)
        .ok_or(X3dhError::MissingKey)?;
    let opk = match msg.opk_id {
        Some(id) => Some(keys.opk_lookup.get(&id).ok_or(X3dhError::MissingKey)?),
        None => None,
    };

    let dh1 = dh(&spk.private, &msg.sender_identity_pub)?;
    let dh2 = dh(&keys.identity.private, &msg.ephemeral_pub)?;
    let dh3 = dh(&spk.private, &msg.ephemeral_pub)?;
    let sk = match opk {
        Some(opk_pair) => {
            let dh4 = dh(&opk_pair.private, &msg.ephemeral_pub)?;
            derive_sk(&[&dh1, &dh2, &dh3, &dh4])
        }
        None => derive_sk(&[&dh1, &dh2, &dh3]),
    };
    drop((dh1, dh2, dh3));

    let ad = build_associated_data(&msg.sender_identity_pub, &keys.identity.public);
    let mut mk = first_message_key(&sk);
    let opened = aead_decrypt(&mk, &msg.ciphertext, &ad);
    mk.zeroize();
    debug_assert!(mk.iter().all(|b| *b == 0));
    let plaintext = match opened {
        Ok(pt) => pt,
        Err(_) => {
            drop(sk); // zeroed on drop; no session material retained
            return Err(X3dhError::Terminated);
        }
    };

    if let Some(id) = msg.opk_id {
        keys.opk_lookup.remove(&id); // single use
    }
    Ok((sk, ad, plaintext))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::crypto::sign_prekey;
    use crate::crypto::Signature;
    use rand::rngs::StdRng;
    use rand::SeedableRng;

    struct Fixture {
        adam: KeyPair,
        bud: ResponderKeys,
        bundle: PrekeyBundle,
        rng: StdRng,
    }

    fn fixture(with_opk: bool) -> Fixture {
        let mut rng = StdRng::from_seed([7u8; 32]);
        let adam = generate_keypair(&mut rng).unwrap();
        let bud_identity = generate_keypair(&mut rng).unwrap();
        let spk = generate_keypair(&mut rng).unwrap();
        let opk = generate_keypair(&mut rng).unwrap();

        let mut bud = ResponderKeys::new(bud_identity.clone());
        bud.spk_lookup.insert(1, spk.clone());
        bud.opk_lookup.insert(9, opk.clone());

        let bundle = PrekeyBundle {
            identity_pub: bud_identity.public,
            spk_id: 1,
            spk_pub: spk.public,
            spk_signature: sign_prekey(&bud_identity, &encode_public(&spk.public)),
            opk: with_opk.then_some((9, opk.public)),
        };
        Fixture {
            adam,
            bud,
            bundle,
            rng,
        }
    }

    #[test]
    fn agreement_with_opk() {
        let mut fx = fixture(true);
        let (out, msg) = initiate(&fx.adam, &fx.bundle, b"hi bud", &mut fx.rng).unwrap();
        assert_eq!(msg.opk_id, Some(9));
        let (sk, ad, pt) = respond(&mut fx.bud, &msg).unwrap();
        assert_eq!(sk.as_bytes(), out.sk.as_bytes());
        assert_eq!(ad, out.ad);
        assert_eq!(pt, b"hi bud");
    }

    #[test]
    fn agreement_without_opk() {
        let mut fx = fixture(false);
        let (out, msg) = initiate(&fx.adam, &fx.bundle, b"hi", &mut fx.rng).unwrap();
        assert_eq!(msg.opk_id, None);
        let (sk, _, _) = respond(&mut fx.bud, &msg).unwrap();
        assert_eq!(sk.as_bytes(), out.sk.as_bytes());
    }

    #[test]
    fn opk_and_no_opk_secrets_differ() {
        let mut with = fixture(true);
        let mut without = fixture(false);
        let (a, _) = initiate(&with.adam, &with.bundle, b"x", &mut with.rng).unwrap();
        let (b, _) = initiate(&without.adam, &without.bundle, b"x", &mut without.rng).unwrap();
        assert_ne!(a.sk.as_bytes(), b.sk.as_bytes());
    }

    #[test]
    fn corrupted_signature_aborts_before_emitting() {
        let mut fx = fixture(true);
        let mut sig = *fx.bundle.spk_signature.as_bytes();
        sig[10] ^= 0x01;
        fx.bundle.spk_signature = Signature(sig);
        match initiate(&fx.adam, &fx.bundle, b"hi", &mut fx.rng) {
            Err(X3dhError::SignatureInvalid) => {}
            Err(other) => panic!("unexpected error: {other}"),
            Ok(_) => panic!("forged signature must abort the protocol"),
        }
    }

    #[test]
    fn tampered_ciphertext_terminates_and_keeps_opk() {
        let mut fx = fixture(true);
        let (_, mut msg) = initiate(&fx.adam, &fx.bundle, b"hi", &mut fx.rng).unwrap();
        msg.ciphertext[20] ^= 0x01;
        assert_eq!(respond(&mut fx.bud, &msg).unwrap_err(), X3dhError::Terminated);
        // Termination must not consume the one-time prekey.
        assert!(fx.bud.opk_lookup.contains_key(&9));
    }

    #[test]
    fn replay_after_opk_deletion_is_missing_key() {
        let mut fx = fixture(true);
        let (_, msg) = initiate(&fx.adam, &fx.bundle, b"hi", &mut fx.rng).unwrap();
        respond(&mut fx.bud, &msg).unwrap();
        assert_eq!(respond(&mut fx.bud, &msg).unwrap_err(), X3dhError::MissingKey);
    }

    #[test]
    fn unknown_spk_id_is_missing_key() {
        let mut fx = fixture(false);
        let (_, mut msg) = initiate(&fx.adam, &fx.bundle, b"hi", &mut fx.rng).unwrap();
        msg.spk_id = 42;
        assert_eq!(respond(&mut fx.bud, &msg).unwrap_err(), X3dhError::MissingKey);
    }

    #[test]
    fn associated_data_layout() {
        let fx = fixture(true);
        let ad = build_associated_data(&fx.adam.public, &fx.bud.identity.public);
        assert_eq!(ad.len(), 66);
        assert_eq!(ad[0], 0x05);
        assert_eq!(ad[33], 0x05);
        let flipped = build_associated_data(&fx.bud.identity.public, &fx.adam.public);
        assert_ne!(ad, flipped);
        let same = build_associated_data(&fx.adam.public, &fx.adam.public);
        assert_eq!(&same[..33], &same[33..]);
    }
}
