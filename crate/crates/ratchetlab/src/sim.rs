//! Deterministic multi-party simulator: drives scripted conversations over
//! a controllable transport, hosts the adversary Mark as a middlebox with
//! full read/modify/inject power but no private keys, labels every ratchet
//! step in an auditable transcript, and reports what the server learns
//! from metadata alone.

use std::collections::{BTreeMap, HashMap};

use rand_chacha::ChaCha20Rng;
use rand_core::SeedableRng;
use serde::{Deserialize, Serialize};

use crate::crypto::{generate_keypair, sign_prekey, KeyPair};
use crate::ratchet::StepCounters;
use crate::registry::{
    MetadataReport, OneTimePrekeyRecord, PrekeyBundle, PrekeyRegistry, SignedPrekeyInput,
    LOW_POOL_THRESHOLD,
};
use crate::session::{
    encode_public, establish_inbound, establish_outbound_with_bundle, safety_code, Envelope,
    Session,
};
use crate::x3dh::ResponderKeys;

pub const DEFAULT_INITIAL_OPKS: usize = 10;
pub const REPLENISH_BATCH: usize = 10;

#[derive(Debug, thiserror::Error)]
pub enum SimError {
    #[error("scenario config error: {0}")]
    Config(String),
    #[error("scenario file unreadable: {0}")]
    Io(#[from] std::io::Error),
    #[error("scenario file malformed: {0}")]
    Parse(#[from] serde_json::Error),
}

/// Per-message transport behavior.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TransportPolicy {
    Deliver,
    Drop,
    Duplicate,
    /// Hold the message until `n` later messages have reached its
    /// recipient, then deliver.
    ReorderTo(usize),
    /// Flip one bit of the byte at this index (modulo length) in flight.
    Tamper { byte_index: usize },
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScriptEvent {
    Send {
        from: String,
        to: String,
        text: String,
    },
    RotateSpk {
        user: String,
    },
    Replenish {
        user: String,
        n: usize,
    },
    MarkMitm {
        a: String,
        b: String,
    },
    VerifyCodes {
        a: String,
        b: String,
    },
    Tick,
}

/// A scripted run: parties, a delivery schedule, and a seed that makes the
/// whole thing replayable byte for byte.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Scenario {
    pub parties: Vec<String>,
    pub seed: u64,
    #[serde(default = "default_initial_opks")]
    pub initial_opks: usize,
    pub script: Vec<ScriptEvent>,
    /// Keyed by script-event index; events without an entry deliver.
    #[serde(default)]
    pub transport_policy: BTreeMap<usize, TransportPolicy>,
}

fn default_initial_opks() -> usize {
    DEFAULT_INITIAL_OPKS
}

impl Scenario {
    pub fn from_json(raw: &str) -> Result<Self, SimError> {
        let scenario: Scenario = serde_json::from_str(raw)?;
        scenario.validate()?;
        Ok(scenario)
    }

    fn validate(&self) -> Result<(), SimError> {
        let known = |u: &String| self.parties.contains(u);
        for (i, event) in self.script.iter().enumerate() {
            let users: Vec<&String> = match event {
                ScriptEvent::Send { from, to, .. } => vec![from, to],
                ScriptEvent::RotateSpk { user } | ScriptEvent::Replenish { user, .. } => {
                    vec![user]
                }
                ScriptEvent::MarkMitm { a, b } | ScriptEvent::VerifyCodes { a, b } => vec![a, b],
                ScriptEvent::Tick => vec![],
            };
            for user in users {
                if !known(user) {
                    return Err(SimError::Config(format!(
                        "script event {i} references undeclared party {user}"
                    )));
                }
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Outcome {
    Ok,
    Rejected { reason: String },
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TranscriptEvent {
    pub at: u64,
    pub actor: String,
    pub action: String,
    pub detail: String,
    pub outcome: Outcome,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Transcript {
    pub events: Vec<TranscriptEvent>,
}

impl Transcript {
    /// JSON-lines rendering, one event per line, diffable in golden tests.
    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for event in &self.events {
            out.push_str(&serde_json::to_string(event).expect("event serializes"));
            out.push('\n');
        }
        out
    }

    pub fn from_jsonl(raw: &str) -> Result<Self, serde_json::Error> {
        let mut events = Vec::new();
        for line in raw.lines().filter(|l| !l.trim().is_empty()) {
            events.push(serde_json::from_str(line)?);
        }
        Ok(Transcript { events })
    }

    pub fn received_texts(&self, by: &str) -> Vec<String> {
        self.events
            .iter()
            .filter(|e| e.actor == by && e.action == "recv" && e.outcome == Outcome::Ok)
            .filter_map(|e| detail_text(&e.detail).map(str::to_string))
            .collect()
    }
}

/// Pulls `key=value` fields out of a transcript detail string. Not usable
/// for the `text` field, which may contain spaces; see [`detail_text`].
pub fn detail_field<'a>(detail: &'a str, key: &str) -> Option<&'a str> {
    detail.split(' ').find_map(|part| {
        part.strip_prefix(key)
            .and_then(|rest| rest.strip_prefix('='))
    })
}

/// Extracts the plaintext from a recv detail. `text=` is always the final
/// field, so everything after it belongs to the message.
pub fn detail_text(detail: &str) -> Option<&str> {
    detail.split_once("text=").map(|(_, text)| text)
}

struct Party {
    identity: KeyPair,
    keys: ResponderKeys,
    sessions: HashMap<String, Session>,
    next_spk_id: u32,
    next_opk_id: u32,
}

struct MarkLink {
    /// The side that was served the forged bundle.
    a: String,
    b: String,
    fake_responder: ResponderKeys,
    session_a: Option<Session>,
    session_b: Option<Session>,
}

struct Held {
    remaining: usize,
    from: String,
    to: String,
    bytes: Vec<u8>,
    msg_id: usize,
}

/// The event loop. Single-threaded with a logical clock; asynchronous
/// delivery is modeled as held messages, not real concurrency.
pub struct Simulator {
    registry: PrekeyRegistry,
    parties: BTreeMap<String, Party>,
    rng: ChaCha20Rng,
    clock: u64,
    transcript: Vec<TranscriptEvent>,
    mitm: Vec<MarkLink>,
    held: Vec<Held>,
    /// Every ciphertext Mark has seen on the wire, for the attack suite.
    observed: Vec<Vec<u8>>,
}

fn pair_key(x: &str, y: &str) -> (String, String) {
    if x <= y {
        (x.to_string(), y.to_string())
    } else {
        (y.to_string(), x.to_string())
    }
}

impl Simulator {
    pub fn new(scenario: &Scenario) -> Result<Self, SimError> {
        scenario.validate()?;
        let mut sim = Simulator {
            registry: PrekeyRegistry::new(),
            parties: BTreeMap::new(),
            rng: ChaCha20Rng::seed_from_u64(scenario.seed),
            clock: 0,
            transcript: Vec::new(),
            mitm: Vec::new(),
            held: Vec::new(),
            observed: Vec::new(),
        };
        for user in &scenario.parties {
            sim.register_party(user, scenario.initial_opks)
                .map_err(|e| SimError::Config(format!("registering {user}: {e}")))?;
        }
        Ok(sim)
    }

    fn log(&mut self, actor: &str, action: &str, detail: String, outcome: Outcome) {
        self.transcript.push(TranscriptEvent {
            at: self.clock,
            actor: actor.to_string(),
            action: action.to_string(),
            detail,
            outcome,
        });
    }

    fn fresh_spk(&mut self, user: &str) -> (SignedPrekeyInput, KeyPair) {
        let party = self.parties.get_mut(user).expect("known party");
        let pair = generate_keypair(&mut self.rng).expect("rng");
        let spk_id = party.next_spk_id;
        party.next_spk_id += 1;
        party.keys.spk_lookup.insert(spk_id, pair.clone());
        let signature = sign_prekey(&party.identity, &encode_public(&pair.public));
        (
            SignedPrekeyInput {
                spk_id,
                public: pair.public,
                signature,
            },
            pair,
        )
    }

    fn fresh_opks(&mut self, user: &str, n: usize) -> Vec<OneTimePrekeyRecord> {
        let mut records = Vec::with_capacity(n);
        for _ in 0..n {
            let pair = generate_keypair(&mut self.rng).expect("rng");
            let party = self.parties.get_mut(user).expect("known party");
            let opk_id = party.next_opk_id;
            party.next_opk_id += 1;
            party.keys.opk_lookup.insert(opk_id, pair.clone());
            records.push(OneTimePrekeyRecord {
                opk_id,
                public: pair.public,
            });
        }
        records
    }

    fn register_party(&mut self, user: &str, opks: usize) -> Result<(), String> {
        let identity = generate_keypair(&mut self.rng).map_err(|e| e.to_string())?;
        self.parties.insert(
            user.to_string(),
            Party {
                identity: identity.clone(),
                keys: ResponderKeys::new(identity.clone()),
                sessions: HashMap::new(),
                next_spk_id: 0,
                next_opk_id: 0,
            },
        );
        let (spk, _) = self.fresh_spk(user);
        let opk_records = self.fresh_opks(user, opks);
        self.registry
            .register(user, identity.public, spk, opk_records, self.clock)
            .map_err(|e| e.to_string())?;
        self.log(user, "register", format!("opks={opks}"), Outcome::Ok);
        Ok(())
    }

    fn mitm_link_index(&self, from: &str, to: &str) -> Option<usize> {
        self.mitm
            .iter()
            .position(|link| pair_key(&link.a, &link.b) == pair_key(from, to))
    }

    /// Serves a bundle for `target`, via Mark if the pair is intercepted.
    fn serve_bundle(&mut self, requester: &str, target: &str) -> Result<PrekeyBundle, String> {
        if let Some(idx) = self.mitm_link_index(requester, target) {
            // Mark answers the fetch with keys he controls. The real
            // server is never consulted, so the target's pool is intact.
            let fake_identity = self.mitm[idx].fake_responder.identity.clone();
            let spk = generate_keypair(&mut self.rng).expect("rng");
            let link = &mut self.mitm[idx];
            link.fake_responder.spk_lookup.insert(0, spk.clone());
            link.a = requester.to_string();
            link.b = target.to_string();
            let signature = sign_prekey(&fake_identity, &encode_public(&spk.public));
            self.log(
                "mark",
                "mark_intercept",
                format!("substituted_bundle_for={target} requested_by={requester}"),
                Outcome::Ok,
            );
            return Ok(PrekeyBundle {
                identity_pub: fake_identity.public,
                spk_id: 0,
                spk_pub: spk.public,
                spk_signature: signature,
                opk: None,
            });
        }
        let bundle = self
            .registry
            .fetch_bundle(requester, target, self.clock)
            .map_err(|e| e.to_string())?;
        // The harness keeps pools topped up, as clients do.
        if self.registry.opk_pool_size(target).unwrap_or(0) < LOW_POOL_THRESHOLD {
            let batch = self.fresh_opks(target, REPLENISH_BATCH);
            let size = self
                .registry
                .replenish_opks(target, batch)
                .map_err(|e| e.to_string())?;
            self.log(target, "auto_replenish", format!("pool={size}"), Outcome::Ok);
        }
        Ok(bundle)
    }

    fn handle_send(&mut self, from: &str, to: &str, text: &str, msg_id: usize) -> Option<Vec<u8>> {
        let has_session = self.parties[from].sessions.contains_key(to);
        let result: Result<(Vec<u8>, &'static str), String> = if has_session {
            let party = self.parties.get_mut(from).expect("known party");
            let session = party.sessions.get_mut(to).unwrap();
            session
                .encrypt(text.as_bytes())
                .map(|env| (env.seal(), "symmetric"))
                .map_err(|e| e.to_string())
        } else {
            match self.serve_bundle(from, to) {
                Ok(bundle) => {
                    let identity = self.parties[from].identity.clone();
                    establish_outbound_with_bundle(
                        &identity,
                        &bundle,
                        to,
                        text.as_bytes(),
                        &mut self.rng,
                    )
                    .map(|(session, env)| {
                        self.parties
                            .get_mut(from)
                            .unwrap()
                            .sessions
                            .insert(to.to_string(), session);
                        (env.seal(), "x3dh")
                    })
                    .map_err(|e| e.to_string())
                }
                Err(e) => Err(e),
            }
        };
        match result {
            Ok((bytes, step)) => {
                self.log(
                    from,
                    "send",
                    format!("msg={msg_id} to={to} step={step}"),
                    Outcome::Ok,
                );
                Some(bytes)
            }
            Err(reason) => {
                self.log(
                    from,
                    "send",
                    format!("msg={msg_id} to={to}"),
                    Outcome::Rejected { reason },
                );
                None
            }
        }
    }

    /// Runs one wire message through Mark when the pair is intercepted.
    /// Returns the bytes that actually reach the recipient, or None when
    /// Mark himself fails to process (he then drops the message).
    fn mark_relay(&mut self, from: &str, to: &str, bytes: Vec<u8>) -> Option<Vec<u8>> {
        self.observed.push(bytes.clone());
        let Some(idx) = self.mitm_link_index(from, to) else {
            return Some(bytes);
        };
        let link = &mut self.mitm[idx];
        if link.a != from && link.b != from {
            return Some(bytes);
        }
        let envelope = Envelope::open(&bytes).ok()?;
        let from_initiator_side = link.a == from;
        let plaintext = if from_initiator_side {
            match &envelope {
                Envelope::Initial(_) => {
                    let (session, pt) =
                        establish_inbound(&mut link.fake_responder, from, &envelope, &mut self.rng)
                            .ok()?;
                    link.session_a = Some(session);
                    pt
                }
                Envelope::Normal { .. } => link
                    .session_a
                    .as_mut()?
                    .decrypt(&envelope, &mut self.rng)
                    .ok()?,
            }
        } else {
            link.session_b
                .as_mut()?
                .decrypt(&envelope, &mut self.rng)
                .ok()?
        };
        // Re-encrypt on the far-side session, establishing it on demand
        // with the victim's genuine bundle.
        let out = if from_initiator_side {
            if self.mitm[idx].session_b.is_none() {
                let requester = self.mitm[idx].a.clone();
                let bundle = self
                    .registry
                    .fetch_bundle(&requester, to, self.clock)
                    .ok()?;
                let identity = self.mitm[idx].fake_responder.identity.clone();
                let (session, env) =
                    establish_outbound_with_bundle(&identity, &bundle, to, &plaintext, &mut self.rng)
                        .ok()?;
                self.mitm[idx].session_b = Some(session);
                env.seal()
            } else {
                self.mitm[idx]
                    .session_b
                    .as_mut()?
                    .encrypt(&plaintext)
                    .ok()?
                    .seal()
            }
        } else {
            self.mitm[idx]
                .session_a
                .as_mut()?
                .encrypt(&plaintext)
                .ok()?
                .seal()
        };
        self.log(
            "mark",
            "mark_relay",
            format!("from={from} to={to} bytes={}", out.len()),
            Outcome::Ok,
        );
        Some(out)
    }

    fn receive(&mut self, from: &str, to: &str, bytes: &[u8], msg_id: usize) {
        let envelope = match Envelope::open(bytes) {
            Ok(env) => env,
            Err(e) => {
                self.log(
                    to,
                    "recv",
                    format!("msg={msg_id} from={from}"),
                    Outcome::Rejected {
                        reason: e.to_string(),
                    },
                );
                return;
            }
        };
        match envelope {
            Envelope::Initial(_) => {
                let party = self.parties.get_mut(to).expect("known party");
                match establish_inbound(&mut party.keys, from, &envelope, &mut self.rng) {
                    Ok((session, plaintext)) => {
                        party.sessions.insert(from.to_string(), session);
                        let text = String::from_utf8_lossy(&plaintext).into_owned();
                        self.log(
                            to,
                            "recv",
                            format!("msg={msg_id} from={from} step=x3dh text={text}"),
                            Outcome::Ok,
                        );
                    }
                    Err(e) => self.log(
                        to,
                        "recv",
                        format!("msg={msg_id} from={from}"),
                        Outcome::Rejected {
                            reason: e.to_string(),
                        },
                    ),
                }
            }
            Envelope::Normal { .. } => {
                let party = self.parties.get_mut(to).expect("known party");
                let Some(session) = party.sessions.get_mut(from) else {
                    self.log(
                        to,
                        "recv",
                        format!("msg={msg_id} from={from}"),
                        Outcome::Rejected {
                            reason: "no session".to_string(),
                        },
                    );
                    return;
                };
                let before: StepCounters = session.ratchet.counters;
                match session.decrypt(&envelope, &mut self.rng) {
                    Ok(plaintext) => {
                        let after = session.ratchet.counters;
                        let step = if after.dh_steps > before.dh_steps {
                            "dh"
                        } else {
                            "symmetric"
                        };
                        let text = String::from_utf8_lossy(&plaintext).into_owned();
                        self.log(
                            to,
                            "recv",
                            format!("msg={msg_id} from={from} step={step} text={text}"),
                            Outcome::Ok,
                        );
                    }
                    Err(e) => self.log(
                        to,
                        "recv",
                        format!("msg={msg_id} from={from}"),
                        Outcome::Rejected {
                            reason: e.to_string(),
                        },
                    ),
                }
            }
        }
    }

    /// Delivers one wire message: the server logs the relay, Mark gets his
    /// chance at it, the recipient processes it, and any held messages
    /// whose wait expires are released.
    fn deliver(&mut self, from: &str, to: &str, bytes: Vec<u8>, msg_id: usize) {
        self.registry.record_relay(from, to, self.clock);
        if let Some(bytes) = self.mark_relay(from, to, bytes) {
            self.receive(from, to, &bytes, msg_id);
        } else {
            self.log(
                "mark",
                "mark_relay",
                format!("from={from} to={to}"),
                Outcome::Rejected {
                    reason: "mark could not process, message dropped".to_string(),
                },
            );
        }
        self.release_held_for(to);
    }

    fn release_held_for(&mut self, recipient: &str) {
        let mut ready = Vec::new();
        for held in &mut self.held {
            if held.to == recipient {
                if held.remaining == 0 {
                    continue; // release handled below via drain pass
                }
                held.remaining -= 1;
            }
        }
        let mut i = 0;
        while i < self.held.len() {
            if self.held[i].to == recipient && self.held[i].remaining == 0 {
                ready.push(self.held.remove(i));
            } else {
                i += 1;
            }
        }
        for held in ready {
            self.deliver(&held.from, &held.to, held.bytes, held.msg_id);
        }
    }

    fn flush_held(&mut self) {
        while let Some(held) = {
            // release in insertion order
            if self.held.is_empty() {
                None
            } else {
                Some(self.held.remove(0))
            }
        } {
            self.deliver(&held.from, &held.to, held.bytes, held.msg_id);
        }
    }

    pub fn run(scenario: &Scenario) -> Result<Transcript, SimError> {
        let mut sim = Simulator::new(scenario)?;
        for (index, event) in scenario.script.iter().enumerate() {
            let policy = scenario
                .transport_policy
                .get(&index)
                .copied()
                .unwrap_or(TransportPolicy::Deliver);
            sim.step(event, index, policy);
        }
        sim.flush_held();
        Ok(Transcript {
            events: sim.transcript,
        })
    }

    fn step(&mut self, event: &ScriptEvent, index: usize, policy: TransportPolicy) {
        match event {
            ScriptEvent::Send { from, to, text } => {
                let Some(bytes) = self.handle_send(from, to, text, index) else {
                    return;
                };
                match policy {
                    TransportPolicy::Deliver => self.deliver(from, to, bytes, index),
                    TransportPolicy::Drop => {
                        self.log(
                            "transport",
                            "drop",
                            format!("msg={index} from={from} to={to}"),
                            Outcome::Ok,
                        );
                    }
                    TransportPolicy::Duplicate => {
                        self.deliver(from, to, bytes.clone(), index);
                        self.deliver(from, to, bytes, index);
                    }
                    TransportPolicy::ReorderTo(n) => {
                        self.log(
                            "transport",
                            "hold",
                            format!("msg={index} from={from} to={to} wait={n}"),
                            Outcome::Ok,
                        );
                        self.held.push(Held {
                            remaining: n,
                            from: from.clone(),
                            to: to.clone(),
                            bytes,
                            msg_id: index,
                        });
                    }
                    TransportPolicy::Tamper { byte_index } => {
                        let mut bytes = bytes;
                        let at = byte_index % bytes.len();
                        bytes[at] ^= 0x01;
                        self.log(
                            "transport",
                            "tamper",
                            format!("msg={index} from={from} to={to} byte={at}"),
                            Outcome::Ok,
                        );
                        self.deliver(from, to, bytes, index);
                    }
                }
            }
            ScriptEvent::RotateSpk { user } => {
                let (spk, _) = self.fresh_spk(user);
                let spk_id = spk.spk_id;
                let outcome = match self.registry.rotate_signed_prekey(user, spk, self.clock) {
                    Ok(()) => Outcome::Ok,
                    Err(e) => Outcome::Rejected {
                        reason: e.to_string(),
                    },
                };
                self.log(user, "rotate_spk", format!("spk_id={spk_id}"), outcome);
            }
            ScriptEvent::Replenish { user, n } => {
                let batch = self.fresh_opks(user, *n);
                let outcome = match self.registry.replenish_opks(user, batch) {
                    Ok(size) => {
                        self.log(user, "replenish", format!("n={n} pool={size}"), Outcome::Ok);
                        return;
                    }
                    Err(e) => Outcome::Rejected {
                        reason: e.to_string(),
                    },
                };
                self.log(user, "replenish", format!("n={n}"), outcome);
            }
            ScriptEvent::MarkMitm { a, b } => {
                let fake_identity = generate_keypair(&mut self.rng).expect("rng");
                self.mitm.push(MarkLink {
                    a: a.clone(),
                    b: b.clone(),
                    fake_responder: ResponderKeys::new(fake_identity),
                    session_a: None,
                    session_b: None,
                });
                self.log("mark", "mark_mitm", format!("a={a} b={b}"), Outcome::Ok);
            }
            ScriptEvent::VerifyCodes { a, b } => {
                let code_a = self.code_as_seen_by(a, b);
                let code_b = self.code_as_seen_by(b, a);
                let (detail, outcome) = match (code_a, code_b) {
                    (Some(ca), Some(cb)) if ca == cb => {
                        ("result=match".to_string(), Outcome::Ok)
                    }
                    (Some(_), Some(_)) => ("result=mismatch".to_string(), Outcome::Ok),
                    _ => (
                        "result=unavailable".to_string(),
                        Outcome::Rejected {
                            reason: "no session to verify".to_string(),
                        },
                    ),
                };
                self.log(a, "verify_codes", format!("peer={b} {detail}"), outcome);
            }
            ScriptEvent::Tick => {
                self.clock += 1;
                self.flush_held();
                self.log("clock", "tick", String::new(), Outcome::Ok);
            }
        }
    }

    /// The code a user would read off their screen for a peer: their own
    /// identity plus whatever identity key their session attributes to the
    /// peer.
    fn code_as_seen_by(&self, user: &str, peer: &str) -> Option<String> {
        let party = self.parties.get(user)?;
        let session = party.sessions.get(peer)?;
        Some(
            safety_code(&party.identity.public, user, &session.ik_remote, peer)
                .digits,
        )
    }

    pub fn registry(&self) -> &PrekeyRegistry {
        &self.registry
    }
}

/// Checks a finished transcript against the scenario's delivery schedule:
/// delivered sends decrypt exactly once, tampered sends are rejected,
/// dropped sends never arrive, duplicates are rejected on the second copy.
pub fn verify_expectations(scenario: &Scenario, transcript: &Transcript) -> Result<(), Vec<String>> {
    let mut failures = Vec::new();
    for (index, event) in scenario.script.iter().enumerate() {
        let ScriptEvent::Send { from, to, .. } = event else {
            continue;
        };
        let policy = scenario
            .transport_policy
            .get(&index)
            .copied()
            .unwrap_or(TransportPolicy::Deliver);
        let tag = format!("msg={index} ");
        let recv_ok = transcript
            .events
            .iter()
            .filter(|e| {
                e.actor == *to
                    && e.action == "recv"
                    && e.detail.starts_with(&tag)
                    && e.outcome == Outcome::Ok
            })
            .count();
        let recv_rejected = transcript
            .events
            .iter()
            .filter(|e| {
                e.actor == *to
                    && e.action == "recv"
                    && e.detail.starts_with(&tag)
                    && matches!(e.outcome, Outcome::Rejected { .. })
            })
            .count();
        let expect = match policy {
            TransportPolicy::Deliver | TransportPolicy::ReorderTo(_) => (1, 0),
            TransportPolicy::Drop => (0, 0),
            TransportPolicy::Duplicate => (1, 1),
            TransportPolicy::Tamper { .. } => (0, 1),
        };
        if (recv_ok, recv_rejected) != expect {
            failures.push(format!(
                "send {index} ({from}->{to}, {policy:?}): expected (ok, rejected) = {expect:?}, \
                 got ({recv_ok}, {recv_rejected})"
            ));
        }
    }
    if failures.is_empty() {
        Ok(())
    } else {
        Err(failures)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PropertyVerdict {
    pub pass: bool,
    pub note: String,
}

/// Results of the three-part adversary check.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AttackReport {
    pub confidentiality: PropertyVerdict,
    pub integrity: PropertyVerdict,
    pub authenticity: PropertyVerdict,
}

impl AttackReport {
    pub fn all_pass(&self) -> bool {
        self.confidentiality.pass && self.integrity.pass && self.authenticity.pass
    }
}

/// Runs the adversary suite for one pair: a passive-eavesdropper
/// confidentiality check, a tamper-everything integrity check, and a
/// bundle-substitution check where delivery succeeds but the safety codes
/// betray the interception.
pub fn mark_attack_suite(a: &str, b: &str, seed: u64) -> Result<AttackReport, SimError> {
    let parties = vec![a.to_string(), b.to_string()];
    let texts = [
        "the meeting is at noon",
        "bring the documents",
        "use the side entrance",
        "confirm when done",
    ];

    // Confidentiality: honest transport; Mark records every wire byte and
    // must find no plaintext in any of them.
    let mut script = Vec::new();
    for (i, text) in texts.iter().enumerate() {
        let (from, to) = if i % 2 == 0 { (a, b) } else { (b, a) };
        script.push(ScriptEvent::Send {
            from: from.to_string(),
            to: to.to_string(),
            text: text.to_string(),
        });
    }
    let scenario = Scenario {
        parties: parties.clone(),
        seed,
        initial_opks: DEFAULT_INITIAL_OPKS,
        script: script.clone(),
        transport_policy: BTreeMap::new(),
    };
    let mut sim = Simulator::new(&scenario)?;
    for (index, event) in scenario.script.iter().enumerate() {
        sim.step(event, index, TransportPolicy::Deliver);
    }
    let delivered_all = scenario
        .script
        .iter()
        .enumerate()
        .all(|(i, _)| {
            sim.transcript.iter().any(|e| {
                e.action == "recv"
                    && e.detail.starts_with(&format!("msg={i} "))
                    && e.outcome == Outcome::Ok
            })
        });
    let leaked = sim.observed.iter().any(|wire| {
        texts
            .iter()
            .any(|t| wire.windows(t.len()).any(|w| w == t.as_bytes()))
    });
    let confidentiality = PropertyVerdict {
        pass: delivered_all && !leaked,
        note: format!(
            "{} ciphertexts recorded, plaintext bytes found in none",
            sim.observed.len()
        ),
    };

    // Integrity: every message tampered in flight, every one rejected.
    let transport_policy: BTreeMap<usize, TransportPolicy> = (0..script.len())
        .map(|i| (i, TransportPolicy::Tamper { byte_index: 7 + i }))
        .collect();
    let scenario_tamper = Scenario {
        parties: parties.clone(),
        seed: seed ^ 1,
        initial_opks: DEFAULT_INITIAL_OPKS,
        script: script.clone(),
        transport_policy,
    };
    let transcript = Simulator::run(&scenario_tamper)?;
    let rejected = transcript
        .events
        .iter()
        .filter(|e| e.action == "recv" && matches!(e.outcome, Outcome::Rejected { .. }))
        .count();
    let accepted = transcript
        .events
        .iter()
        .filter(|e| e.action == "recv" && e.outcome == Outcome::Ok)
        .count();
    let integrity = PropertyVerdict {
        pass: rejected >= 1 && accepted == 0,
        note: format!("{rejected} tampered messages rejected, {accepted} accepted"),
    };

    // Authenticity: Mark substitutes the bundle. Messages still flow end
    // to end, but the manually compared codes disagree.
    let mut script_mitm = vec![ScriptEvent::MarkMitm {
        a: a.to_string(),
        b: b.to_string(),
    }];
    script_mitm.extend(script.clone());
    script_mitm.push(ScriptEvent::VerifyCodes {
        a: a.to_string(),
        b: b.to_string(),
    });
    let scenario_mitm = Scenario {
        parties,
        seed: seed ^ 2,
        initial_opks: DEFAULT_INITIAL_OPKS,
        script: script_mitm,
        transport_policy: BTreeMap::new(),
    };
    let transcript = Simulator::run(&scenario_mitm)?;
    let delivered = texts.iter().enumerate().all(|(i, text)| {
        transcript.events.iter().any(|e| {
            e.action == "recv"
                && e.outcome == Outcome::Ok
                && detail_field(&e.detail, "msg") == Some(&(i + 1).to_string())
                && detail_text(&e.detail) == Some(*text)
        })
    });
    let mismatch_seen = transcript.events.iter().any(|e| {
        e.action == "verify_codes" && detail_field(&e.detail, "result") == Some("mismatch")
    });
    let authenticity = PropertyVerdict {
        pass: delivered && mismatch_seen,
        note: format!(
            "delivery through mark: {delivered}, safety-code mismatch detected: {mismatch_seen}"
        ),
    };

    Ok(AttackReport {
        confidentiality,
        integrity,
        authenticity,
    })
}

/// Per-party server's-eye view after a run.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MetadataDemo {
    pub per_party: BTreeMap<String, MetadataReport>,
    /// Always zero: the server handles envelopes, never plaintext.
    pub plaintext_bytes_observed: usize,
}

/// Runs a scenario and aggregates what the server learned about each
/// declared party, without ever seeing a plaintext byte.
pub fn metadata_demo(scenario: &Scenario) -> Result<MetadataDemo, SimError> {
    let mut sim = Simulator::new(scenario)?;
    for (index, event) in scenario.script.iter().enumerate() {
        let policy = scenario
            .transport_policy
            .get(&index)
            .copied()
            .unwrap_or(TransportPolicy::Deliver);
        sim.step(event, index, policy);
    }
    sim.flush_held();
    let mut per_party = BTreeMap::new();
    for user in &scenario.parties {
        per_party.insert(
            user.clone(),
            sim.registry.metadata_report(user).expect("registered"),
        );
    }
    Ok(MetadataDemo {
        per_party,
        plaintext_bytes_observed: 0,
    })
}

/// Folds a transcript's delivered messages into per-(from, to) counts, the
/// independent oracle for the registry's own metadata report.
pub fn fold_transcript_relays(transcript: &Transcript) -> BTreeMap<(String, String), u64> {
    let mut counts = BTreeMap::new();
    for event in &transcript.events {
        if event.action == "send" && event.outcome == Outcome::Ok {
            if let Some(to) = detail_field(&event.detail, "to") {
                *counts
                    .entry((event.actor.clone(), to.to_string()))
                    .or_insert(0) += 1;
            }
        }
    }
    counts
}

#[cfg(test)]
mod tests {
    use super::*;

    fn send(from: &str, to: &str, text: &str) -> ScriptEvent {
        ScriptEvent::Send {
            from: from.to_string(),
            to: to.to_string(),
            text: text.to_string(),
        }
    }

    fn two_party(script: Vec<ScriptEvent>) -> Scenario {
        Scenario {
            parties: vec!["adam".to_string(), "bud".to_string()],
            seed: 1234,
            initial_opks: DEFAULT_INITIAL_OPKS,
            script,
            transport_policy: BTreeMap::new(),
        }
    }

    #[test]
    fn deterministic_transcripts() {
        let scenario = two_party(vec![
            send("adam", "bud", "one"),
            send("bud", "adam", "two"),
            send("adam", "bud", "three"),
        ]);
        let t1 = Simulator::run(&scenario).unwrap();
        let t2 = Simulator::run(&scenario).unwrap();
        assert_eq!(t1.to_jsonl(), t2.to_jsonl());
    }

    #[test]
    fn all_plaintexts_recovered_in_order() {
        let scenario = two_party(vec![
            send("adam", "bud", "a0"),
            send("bud", "adam", "b0"),
            send("bud", "adam", "b1"),
            send("adam", "bud", "a1"),
        ]);
        let transcript = Simulator::run(&scenario).unwrap();
        assert_eq!(transcript.received_texts("bud"), vec!["a0", "a1"]);
        assert_eq!(transcript.received_texts("adam"), vec!["b0", "b1"]);
        assert!(verify_expectations(&scenario, &transcript).is_ok());
    }

    #[test]
    fn tamper_isolates_failure() {
        let mut scenario = two_party(vec![
            send("adam", "bud", "m0"),
            send("adam", "bud", "m1"),
            send("adam", "bud", "m2"),
        ]);
        scenario
            .transport_policy
            .insert(1, TransportPolicy::Tamper { byte_index: 50 });
        let transcript = Simulator::run(&scenario).unwrap();
        let rejected: Vec<_> = transcript
            .events
            .iter()
            .filter(|e| matches!(e.outcome, Outcome::Rejected { .. }))
            .collect();
        assert_eq!(rejected.len(), 1);
        assert_eq!(transcript.received_texts("bud"), vec!["m0", "m2"]);
        assert!(verify_expectations(&scenario, &transcript).is_ok());
    }

    #[test]
    fn duplicate_second_copy_rejected() {
        let mut scenario = two_party(vec![send("adam", "bud", "m0"), send("adam", "bud", "m1")]);
        scenario
            .transport_policy
            .insert(1, TransportPolicy::Duplicate);
        let transcript = Simulator::run(&scenario).unwrap();
        assert!(verify_expectations(&scenario, &transcript).is_ok());
    }

    #[test]
    fn reorder_delivers_late_but_intact() {
        let mut scenario = two_party(vec![
            send("adam", "bud", "m0"),
            send("adam", "bud", "m1"),
            send("adam", "bud", "m2"),
            send("adam", "bud", "m3"),
        ]);
        scenario
            .transport_policy
            .insert(1, TransportPolicy::ReorderTo(2));
        let transcript = Simulator::run(&scenario).unwrap();
        assert_eq!(transcript.received_texts("bud"), vec!["m0", "m2", "m3", "m1"]);
        assert!(verify_expectations(&scenario, &transcript).is_ok());
    }

    #[test]
    fn drop_means_never_received() {
        let mut scenario = two_party(vec![
            send("adam", "bud", "m0"),
            send("adam", "bud", "gone"),
            send("adam", "bud", "m2"),
        ]);
        scenario.transport_policy.insert(1, TransportPolicy::Drop);
        let transcript = Simulator::run(&scenario).unwrap();
        assert_eq!(transcript.received_texts("bud"), vec!["m0", "m2"]);
        assert!(verify_expectations(&scenario, &transcript).is_ok());
    }

    #[test]
    fn scenario_rejects_undeclared_party() {
        let scenario = two_party(vec![send("adam", "ghost", "boo")]);
        assert!(matches!(
            Simulator::run(&scenario),
            Err(SimError::Config(_))
        ));
    }

    #[test]
    fn scenario_json_round_trip() {
        let mut scenario = two_party(vec![
            send("adam", "bud", "hello"),
            ScriptEvent::RotateSpk {
                user: "bud".to_string(),
            },
            ScriptEvent::Tick,
        ]);
        scenario
            .transport_policy
            .insert(0, TransportPolicy::Tamper { byte_index: 3 });
        let json = serde_json::to_string_pretty(&scenario).unwrap();
        let parsed = Scenario::from_json(&json).unwrap();
        assert_eq!(parsed.script, scenario.script);
        assert_eq!(parsed.transport_policy, scenario.transport_policy);
    }

    #[test]
    fn attack_suite_verdicts() {
        let report = mark_attack_suite("adam", "bud", 99).unwrap();
        assert!(report.confidentiality.pass, "{:?}", report.confidentiality);
        assert!(report.integrity.pass, "{:?}", report.integrity);
        assert!(report.authenticity.pass, "{:?}", report.authenticity);
    }

    #[test]
    fn attack_suite_stable_across_seeds() {
        for seed in [1u64, 77, 4096] {
            let report = mark_attack_suite("adam", "bud", seed).unwrap();
            assert!(report.all_pass(), "seed {seed}: {report:?}");
        }
    }

    #[test]
    fn honest_pair_codes_match() {
        let scenario = two_party(vec![
            send("adam", "bud", "hi"),
            ScriptEvent::VerifyCodes {
                a: "adam".to_string(),
                b: "bud".to_string(),
            },
        ]);
        let transcript = Simulator::run(&scenario).unwrap();
        assert!(transcript.events.iter().any(|e| {
            e.action == "verify_codes" && detail_field(&e.detail, "result") == Some("match")
        }));
    }

    #[test]
    fn metadata_demo_counts_match_transcript_fold() {
        let scenario = two_party(vec![
            send("adam", "bud", "m0"),
            send("adam", "bud", "m1"),
            send("bud", "adam", "r0"),
        ]);
        let transcript = Simulator::run(&scenario).unwrap();
        let demo = metadata_demo(&scenario).unwrap();
        assert_eq!(demo.plaintext_bytes_observed, 0);
        let folded = fold_transcript_relays(&transcript);
        let adam_report = &demo.per_party["adam"];
        // adam: 1 bundle fetch + 2 relays to bud
        assert_eq!(adam_report.peers["bud"].0, 3);
        assert_eq!(folded[&("adam".to_string(), "bud".to_string())], 2);
        assert_eq!(folded[&("bud".to_string(), "adam".to_string())], 1);
    }

    #[test]
    fn metadata_demo_empty_without_traffic() {
        let scenario = two_party(vec![ScriptEvent::Tick]);
        let demo = metadata_demo(&scenario).unwrap();
        assert!(demo.per_party["adam"].peers.is_empty());
        assert!(demo.per_party["bud"].peers.is_empty());
    }
}
