//! In-memory LRU key cache. Recency order is total: every get or put of
//! an existing id moves it to most-recent, so eviction victims are never
//! ambiguous.

use std::collections::{HashMap, VecDeque};

use crate::crypto::SymmetricKey;
use crate::protocol::ClientId;

pub(super) struct LruKeyCache {
    capacity: usize,
    entries: HashMap<ClientId, SymmetricKey>,
    // Front is least-recent, back is most-recent.
    order: VecDeque<ClientId>,
    hits: u64,
    misses: u64,
    evictions: u64,
}

impl LruKeyCache {
    pub(super) fn new(capacity: usize) -> Self {
        assert!(capacity >= 1, "cache capacity must be positive");
        LruKeyCache {
            capacity,
            entries: HashMap::with_capacity(capacity),
            order: VecDeque::with_capacity(capacity),
            hits: 0,
            misses: 0,
            evictions: 0,
        }
    }

    fn promote(&mut self, id: &ClientId) {
        if let Some(pos) = self.order.iter().position(|x| x == id) {
            self.order.remove(pos);
        }
        self.order.push_back(id.clone());
    }

    /// Look up a key, counting the hit or miss and promoting on hit.
    pub(super) fn get(&mut self, id: &ClientId) -> Option<SymmetricKey> {
        if let Some(key) = self.entries.get(id).cloned() {
            self.hits += 1;
            self.promote(id);
            Some(key)
        } else {
            self.misses += 1;
            None
        }
    }

    /// Insert or replace an entry as most-recent. Returns the evicted
    /// least-recent entry when the insert pushed the cache over capacity.
    pub(super) fn insert(
        &mut self,
        id: ClientId,
        key: SymmetricKey,
    ) -> Option<(ClientId, SymmetricKey)> {
        let existing = self.entries.insert(id.clone(), key).is_some();
        self.promote(&id);
        if existing || self.entries.len() <= self.capacity {
            return None;
        }
        let victim = self.order.pop_front().expect("over-capacity cache is non-empty");
        let victim_key = self
            .entries
            .remove(&victim)
            .expect("order and entries stay in sync");
        self.evictions += 1;
        Some((victim, victim_key))
    }

    pub(super) fn entries(&self) -> impl Iterator<Item = (&ClientId, &SymmetricKey)> {
        self.entries.iter()
    }

    pub(super) fn len(&self) -> usize {
        self.entries.len()
    }

    pub(super) fn counters(&self) -> (u64, u64, u64) {
        (self.hits, self.misses, self.evictions)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn id(s: &str) -> ClientId {
        ClientId::new(s).unwrap()
    }

    fn key(b: u8) -> SymmetricKey {
        SymmetricKey::from_bytes([b; 32])
    }

    #[test]
    fn get_after_put_hits() {
        let mut cache = LruKeyCache::new(4);
        cache.insert(id("a"), key(1));
        assert_eq!(cache.get(&id("a")), Some(key(1)));
        assert_eq!(cache.counters(), (1, 0, 0));
    }

    #[test]
    fn get_promotes_against_eviction() {
        let mut cache = LruKeyCache::new(2);
        cache.insert(id("a"), key(1));
        cache.insert(id("b"), key(2));
        assert!(cache.get(&id("a")).is_some());
        let evicted = cache.insert(id("c"), key(3)).expect("must evict");
        assert_eq!(evicted.0, id("b"));
        assert_eq!(cache.len(), 2);
        assert_eq!(cache.counters(), (1, 0, 1));
    }

    #[test]
    fn replacement_does_not_evict() {
        let mut cache = LruKeyCache::new(2);
        cache.insert(id("a"), key(1));
        cache.insert(id("b"), key(2));
        assert!(cache.insert(id("a"), key(9)).is_none());
        assert_eq!(cache.get(&id("a")), Some(key(9)));
        assert_eq!(cache.len(), 2);
    }

    #[test]
    fn size_never_exceeds_capacity() {
        let mut cache = LruKeyCache::new(3);
        for i in 0..100u8 {
            cache.insert(id(&format!("c{i}")), key(i));
            assert!(cache.len() <= 3);
        }
        assert_eq!(cache.counters().2, 97);
    }
}
