//! `ratchetlab` — a workbench for asynchronous end-to-end encrypted
//! messaging: X25519 key agreement, prekey bundles, the X3DH handshake,
//! the Double Ratchet, a sealed wire format, and a deterministic
//! simulator with a built-in active adversary.
//!
//! The crate is organized bottom-up:
//!
//! - [`crypto`] — X25519, HKDF/HMAC, the CBC+HMAC AEAD, prekey
//!   signatures, and a toy discrete-log walkthrough.
//! - [`registry`] — the server-side prekey directory with rotation,
//!   one-time-prekey pools, and a metadata ledger.
//! - [`x3dh`] — the asynchronous handshake that turns a fetched bundle
//!   into a shared secret plus an authenticated first message.
//! - [`ratchet`] — the Double Ratchet state machine: per-message keys,
//!   Diffie-Hellman ratchet steps, out-of-order tolerance.
//! - [`session`] — wire envelopes, session lifecycle, and safety codes.
//! - [`sim`] — scripted multi-party runs, transport faults, the
//!   adversary Mark, and metadata reporting.
//!
//! # A complete exchange
//!
//! Two users register, one initiates, both converse:
//!
//! ```
//! use rand::{rngs::StdRng, SeedableRng};
//! use ratchetlab::crypto::{generate_keypair, sign_prekey};
//! use ratchetlab::registry::{OneTimePrekeyRecord, PrekeyRegistry, SignedPrekeyInput};
//! use ratchetlab::session::{encode_public, establish_inbound, establish_outbound, Envelope};
//! use ratchetlab::x3dh::ResponderKeys;
//!
//! let mut rng = StdRng::seed_from_u64(7);
//! let mut registry = PrekeyRegistry::new();
//!
//! // Bud publishes identity, a signed prekey, and one-time prekeys.
//! let bud_identity = generate_keypair(&mut rng)?;
//! let mut bud_keys = ResponderKeys::new(bud_identity.clone());
//! let spk = generate_keypair(&mut rng)?;
//! bud_keys.spk_lookup.insert(0, spk.clone());
//! let opk = generate_keypair(&mut rng)?;
//! bud_keys.opk_lookup.insert(0, opk.clone());
//! registry.register(
//!     "bud",
//!     bud_identity.public,
//!     SignedPrekeyInput {
//!         spk_id: 0,
//!         public: spk.public,
//!         signature: sign_prekey(&bud_identity, &encode_public(&spk.public)),
//!     },
//!     vec![OneTimePrekeyRecord { opk_id: 0, public: opk.public }],
//!     0,
//! )?;
//!
//! // Adam establishes and sends in one shot — Bud can be offline.
//! let adam_identity = generate_keypair(&mut rng)?;
//! let adam_spk = generate_keypair(&mut rng)?;
//! registry.register(
//!     "adam",
//!     adam_identity.public,
//!     SignedPrekeyInput {
//!         spk_id: 0,
//!         public: adam_spk.public,
//!         signature: sign_prekey(&adam_identity, &encode_public(&adam_spk.public)),
//!     },
//!     vec![],
//!     0,
//! )?;
//! let (mut adam, first) = establish_outbound(
//!     "adam", &adam_identity, &mut registry, "bud", b"hello, bud", 0, &mut rng,
//! )?;
//!
//! // Bud comes online, processes the initial envelope, and replies.
//! let (mut bud, plaintext) = establish_inbound(&mut bud_keys, "adam", &first, &mut rng)?;
//! assert_eq!(plaintext, b"hello, bud");
//! let reply = bud.encrypt(b"hello, adam")?;
//! assert_eq!(adam.decrypt(&reply, &mut rng)?, b"hello, adam");
//! # Ok::<(), Box<dyn std::error::Error>>(())
//! ```
//!
//! # Scripted simulation
//!
//! The simulator replays a JSON scenario deterministically:
//!
//! ```
//! use ratchetlab::sim::{Scenario, Simulator, verify_expectations};
//!
//! let scenario = Scenario::from_json(r#"{
//!     "parties": ["adam", "bud"],
//!     "seed": 42,
//!     "script": [
//!         {"send": {"from": "adam", "to": "bud", "text": "hi"}},
//!         {"send": {"from": "bud", "to": "adam", "text": "hi back"}}
//!     ]
//! }"#)?;
//! let transcript = Simulator::run(&scenario)?;
//! assert!(verify_expectations(&scenario, &transcript).is_ok());
//! assert_eq!(transcript.received_texts("bud"), vec!["hi"]);
//! # Ok::<(), Box<dyn std::error::Error>>(())
//! ```

pub mod crypto;
pub mod ratchet;
pub mod registry;
pub mod session;
pub mod sim;
pub mod x3dh;
