//! In-memory key-server simulator: identity keys, rotating signed prekeys,
//! a consumable pool of one-time prekeys, served prekey bundles, and a
//! metadata log showing what the server learns without reading a single
//! plaintext byte.
//!
//! The registry only ever holds [`PublicKey`]s; there is no code path by
//! which a private key can enter it.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::crypto::{verify_prekey, PublicKey, Signature};
use crate::session::encode_public;

/// Integer tick clock supplied by the caller. No wall time anywhere.
pub type LogicalTime = u64;

/// How many ticks a retired signed prekey stays resolvable before purge.
pub const DEFAULT_RETENTION_WINDOW: LogicalTime = 2;

/// Pool size below which the harness triggers a replenish.
pub const LOW_POOL_THRESHOLD: usize = 5;

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
pub enum RegistryError {
    #[error("user id already registered")]
    DuplicateUser,
    #[error("unknown user")]
    UnknownUser,
    #[error("signed prekey signature does not verify under the identity key")]
    BadSignature,
    #[error("one-time prekey id already in the live pool")]
    DuplicateOpkId,
    #[error("signed prekey id already used")]
    DuplicateSpkId,
}

/// Upload form of a signed prekey: what a client sends to the server.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SignedPrekeyInput {
    pub spk_id: u32,
    pub public: PublicKey,
    pub signature: Signature,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SignedPrekeyRecord {
    pub spk_id: u32,
    pub public: PublicKey,
    pub signature: Signature,
    pub published_at: LogicalTime,
    pub retired_at: Option<LogicalTime>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct OneTimePrekeyRecord {
    pub opk_id: u32,
    pub public: PublicKey,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MetadataAction {
    Register,
    Rotate,
    FetchBundle,
    RelayMessage,
}

/// One line of what the server can see: who did what, with whom, when.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MetadataEvent {
    pub actor: String,
    pub action: MetadataAction,
    pub peer: Option<String>,
    pub at: LogicalTime,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct UserRecord {
    pub user_id: String,
    pub identity_pub: PublicKey,
    pub signed_prekeys: Vec<SignedPrekeyRecord>,
    pub one_time_pool: Vec<OneTimePrekeyRecord>,
    pub metadata_log: Vec<MetadataEvent>,
}

impl UserRecord {
    pub fn active_spk(&self) -> &SignedPrekeyRecord {
        self.signed_prekeys
            .iter()
            .find(|r| r.retired_at.is_none())
            .expect("exactly one active signed prekey")
    }
}

/// Server-served tuple an initiator needs to run X3DH.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PrekeyBundle {
    pub identity_pub: PublicKey,
    pub spk_id: u32,
    pub spk_pub: PublicKey,
    pub spk_signature: Signature,
    pub opk: Option<(u32, PublicKey)>,
}

/// Per-peer aggregation of the metadata log.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct MetadataReport {
    /// peer id -> (event count, last contact tick)
    pub peers: BTreeMap<String, (u64, LogicalTime)>,
}

/// The key server. Commands apply atomically in call order; callers that
/// want concurrency put this behind their own lock.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct PrekeyRegistry {
    users: BTreeMap<String, UserRecord>,
    #[serde(default = "default_retention")]
    retention_window: LogicalTime,
}

fn default_retention() -> LogicalTime {
    DEFAULT_RETENTION_WINDOW
}

impl PrekeyRegistry {
    pub fn new() -> Self {
        Self::with_retention(DEFAULT_RETENTION_WINDOW)
    }

    pub fn with_retention(retention_window: LogicalTime) -> Self {
        PrekeyRegistry {
            users: BTreeMap::new(),
            retention_window,
        }
    }

    fn verify_spk(identity_pub: &PublicKey, spk: &SignedPrekeyInput) -> Result<(), RegistryError> {
        let encoded = encode_public(&spk.public);
        if verify_prekey(identity_pub, &encoded, spk.signature.as_bytes()) {
            Ok(())
        } else {
            Err(RegistryError::BadSignature)
        }
    }

    pub fn register(
        &mut self,
        user_id: &str,
        identity_pub: PublicKey,
        spk: SignedPrekeyInput,
        opks: Vec<OneTimePrekeyRecord>,
        now: LogicalTime,
    ) -> Result<(), RegistryError> {
        if self.users.contains_key(user_id) {
            return Err(RegistryError::DuplicateUser);
        }
        Self::verify_spk(&identity_pub, &spk)?;
        let mut seen = std::collections::BTreeSet::new();
        for opk in &opks {
            if !seen.insert(opk.opk_id) {
                return Err(RegistryError::DuplicateOpkId);
            }
        }
        let record = UserRecord {
            user_id: user_id.to_string(),
            identity_pub,
            signed_prekeys: vec![SignedPrekeyRecord {
                spk_id: spk.spk_id,
                public: spk.public,
                signature: spk.signature,
                published_at: now,
                retired_at: None,
            }],
            one_time_pool: opks,
            metadata_log: vec![MetadataEvent {
                actor: user_id.to_string(),
                action: MetadataAction::Register,
                peer: None,
                at: now,
            }],
        };
        self.users.insert(user_id.to_string(), record);
        Ok(())
    }

    pub fn rotate_signed_prekey(
        &mut self,
        user_id: &str,
        new_spk: SignedPrekeyInput,
        now: LogicalTime,
    ) -> Result<(), RegistryError> {
        let retention = self.retention_window;
        let user = self
            .users
            .get_mut(user_id)
            .ok_or(RegistryError::UnknownUser)?;
        Self::verify_spk(&user.identity_pub, &new_spk)?;
        if user.signed_prekeys.iter().any(|r| r.spk_id == new_spk.spk_id) {
            return Err(RegistryError::DuplicateSpkId);
        }
        for record in &mut user.signed_prekeys {
            if record.retired_at.is_none() {
                record.retired_at = Some(now);
            }
        }
        user.signed_prekeys.push(SignedPrekeyRecord {
            spk_id: new_spk.spk_id,
            public: new_spk.public,
            signature: new_spk.signature,
            published_at: now,
            retired_at: None,
        });
        // Old keys are kept around long enough to decode late messages,
        // then dropped.
        user.signed_prekeys
            .retain(|r| match r.retired_at {
                Some(retired) => now <= retired + retention,
                None => true,
            });
        user.metadata_log.push(MetadataEvent {
            actor: user_id.to_string(),
            action: MetadataAction::Rotate,
            peer: None,
            at: now,
        });
        Ok(())
    }

    pub fn replenish_opks(
        &mut self,
        user_id: &str,
        opks: Vec<OneTimePrekeyRecord>,
    ) -> Result<usize, RegistryError> {
        let user = self
            .users
            .get_mut(user_id)
            .ok_or(RegistryError::UnknownUser)?;
        let mut live: std::collections::BTreeSet<u32> =
            user.one_time_pool.iter().map(|o| o.opk_id).collect();
        for opk in &opks {
            if !live.insert(opk.opk_id) {
                return Err(RegistryError::DuplicateOpkId);
            }
        }
        user.one_time_pool.extend(opks);
        Ok(user.one_time_pool.len())
    }

    /// Serves a bundle for `target`, consuming one one-time prekey if any
    /// remain (lowest id first), and logs the fetch against the requester.
    pub fn fetch_bundle(
        &mut self,
        requester: &str,
        target: &str,
        now: LogicalTime,
    ) -> Result<PrekeyBundle, RegistryError> {
        let user = self
            .users
            .get_mut(target)
            .ok_or(RegistryError::UnknownUser)?;
        let spk = user
            .signed_prekeys
            .iter()
            .find(|r| r.retired_at.is_none())
            .expect("exactly one active signed prekey")
            .clone();
        let opk = if user.one_time_pool.is_empty() {
            None
        } else {
            let min_idx = user
                .one_time_pool
                .iter()
                .enumerate()
                .min_by_key(|(_, o)| o.opk_id)
                .map(|(i, _)| i)
                .unwrap();
            let record = user.one_time_pool.remove(min_idx);
            Some((record.opk_id, record.public))
        };
        let bundle = PrekeyBundle {
            identity_pub: user.identity_pub,
            spk_id: spk.spk_id,
            spk_pub: spk.public,
            spk_signature: spk.signature,
            opk,
        };
        if let Some(requester_record) = self.users.get_mut(requester) {
            requester_record.metadata_log.push(MetadataEvent {
                actor: requester.to_string(),
                action: MetadataAction::FetchBundle,
                peer: Some(target.to_string()),
                at: now,
            });
        }
        Ok(bundle)
    }

    /// Logs a message relay between two users. The server never sees inside
    /// the envelope; it still learns who talked to whom, and when.
    pub fn record_relay(&mut self, from: &str, to: &str, now: LogicalTime) {
        if let Some(user) = self.users.get_mut(from) {
            user.metadata_log.push(MetadataEvent {
                actor: from.to_string(),
                action: MetadataAction::RelayMessage,
                peer: Some(to.to_string()),
                at: now,
            });
        }
    }

    pub fn metadata_report(&self, user_id: &str) -> Result<MetadataReport, RegistryError> {
        let user = self.users.get(user_id).ok_or(RegistryError::UnknownUser)?;
        Ok(fold_metadata(&user.metadata_log))
    }

    pub fn user(&self, user_id: &str) -> Option<&UserRecord> {
        self.users.get(user_id)
    }

    pub fn opk_pool_size(&self, user_id: &str) -> Result<usize, RegistryError> {
        Ok(self
            .users
            .get(user_id)
            .ok_or(RegistryError::UnknownUser)?
            .one_time_pool
            .len())
    }

    pub fn export_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("registry state serializes")
    }

    pub fn import_json(snapshot: &str) -> Result<Self, serde_json::Error> {
        serde_json::from_str(snapshot)
    }
}

/// Independent fold over a metadata log; the report operation must agree
/// with this on every input.
pub fn fold_metadata(log: &[MetadataEvent]) -> MetadataReport {
    let mut report = MetadataReport::default();
    for event in log {
        if let Some(peer) = &event.peer {
            let entry = report.peers.entry(peer.clone()).or_insert((0, event.at));
            entry.0 += 1;
            entry.1 = entry.1.max(event.at);
        }
    }
    report
}
