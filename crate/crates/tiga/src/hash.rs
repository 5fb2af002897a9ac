//! Incremental XOR-aggregated log hashes, including the per-key variant
//! that lets commuting entries on disjoint keys leave reply hashes equal.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};
use sha1::{Digest as _, Sha1};

use crate::types::{Key, Timestamp, TxnId, Txn};

/// A 160-bit value: entry digest or XOR accumulator.
#[derive(Clone, Copy, Default, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Hash160(pub [u8; 20]);

impl Hash160 {
    pub const ZERO: Hash160 = Hash160([0; 20]);

    pub fn is_zero(&self) -> bool {
        self.0 == [0; 20]
    }
}

impl fmt::Debug for Hash160 {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for b in &self.0[..6] {
            write!(f, "{b:02x}")?;
        }
        Ok(())
    }
}

impl std::ops::BitXor for Hash160 {
    type Output = Hash160;

    fn bitxor(mut self, rhs: Hash160) -> Hash160 {
        self ^= rhs;
        self
    }
}

impl std::ops::BitXorAssign for Hash160 {
    fn bitxor_assign(&mut self, rhs: Hash160) {
        for (a, b) in self.0.iter_mut().zip(rhs.0.iter()) {
            *a ^= b;
        }
    }
}

fn sha1(bytes: &[u8]) -> Hash160 {
    Hash160(Sha1::digest(bytes).into())
}

/// Digest of a log entry: SHA-1 over big-endian coordinator id (32 bits),
/// sequence (64 bits) and timestamp clock time (64 bits).
pub fn digest(id: TxnId, t: Timestamp) -> Hash160 {
    let mut buf = [0u8; 20];
    buf[..4].copy_from_slice(&id.coord.to_be_bytes());
    buf[4..12].copy_from_slice(&id.seq.to_be_bytes());
    buf[12..].copy_from_slice(&t.time_us.to_be_bytes());
    sha1(&buf)
}

pub fn entry_digest(txn: &Txn) -> Hash160 {
    digest(txn.id, txn.t)
}

/// XOR adds and removes alike.
pub fn toggle(h: Hash160, d: Hash160) -> Hash160 {
    h ^ d
}

/// Accumulator over every entry currently in a log.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct LogHash(pub Hash160);

impl LogHash {
    pub fn toggle(&mut self, d: Hash160) {
        self.0 ^= d;
    }

    pub fn value(&self) -> Hash160 {
        self.0
    }
}

/// Per-key accumulators of appended write transactions.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct PerKeyHashes {
    table: BTreeMap<Key, Hash160>,
}

impl PerKeyHashes {
    /// Adds or removes `txn` at its current timestamp. Read-only
    /// transactions leave the table untouched.
    pub fn toggle(&mut self, txn: &Txn) {
        if txn.is_read_only() {
            return;
        }
        let d = entry_digest(txn);
        for (key, _) in txn.accesses() {
            let slot = self.table.entry(key).or_default();
            *slot ^= d;
            if slot.is_zero() {
                self.table.remove(&key);
            }
        }
    }

    pub fn get(&self, key: Key) -> Hash160 {
        self.table.get(&key).copied().unwrap_or_default()
    }

    /// Reply hash for `txn` over `keys`, with the table as it stands after
    /// `txn` is appended. When `include_self` is set the caller has not
    /// appended `txn` yet and its digest is folded in here.
    pub fn reply_hash(&self, txn: &Txn, keys: &[Key], include_self: bool) -> Hash160 {
        let own = if include_self && !txn.is_read_only() {
            entry_digest(txn)
        } else {
            Hash160::ZERO
        };
        let mut h = Hash160::ZERO;
        for &key in keys {
            let acc = self.get(key) ^ own;
            let mut buf = [0u8; 28];
            buf[..8].copy_from_slice(&key.to_be_bytes());
            buf[8..].copy_from_slice(&acc.0);
            h ^= sha1(&buf);
        }
        h
    }
}

/// Reply hash of the commutative variant for a transaction whose append is
/// already reflected in `table`.
pub fn reply_hash_commutative(txn: &Txn, table: &PerKeyHashes) -> Hash160 {
    let keys: Vec<Key> = txn.accesses().into_iter().map(|(k, _)| k).collect();
    table.reply_hash(txn, &keys, false)
}
