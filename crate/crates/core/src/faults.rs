//! One-shot drop hooks for exercising the checksum identities.
//!
//! Each stage (fetch hand-off, store write, queue hand-off) consults the
//! injector once per event. An armed hook silently drops one matching event
//! and disarms itself.

use parking_lot::Mutex;

use crate::types::RecordKey;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FaultStage {
    /// Between counting raw events and handing them to the persister.
    Fetch,
    /// Inside the store, after the record was accepted for writing.
    Store,
    /// Between the store and the notification queue.
    Dispatch,
}

#[derive(Debug, Default)]
pub struct FaultInjector {
    fetch: Mutex<Option<Option<RecordKey>>>,
    store: Mutex<Option<Option<RecordKey>>>,
    dispatch: Mutex<Option<Option<RecordKey>>>,
}

impl FaultInjector {
    pub fn new() -> Self {
        Self::default()
    }

    fn slot(&self, stage: FaultStage) -> &Mutex<Option<Option<RecordKey>>> {
        match stage {
            FaultStage::Fetch => &self.fetch,
            FaultStage::Store => &self.store,
            FaultStage::Dispatch => &self.dispatch,
        }
    }

    /// Arms a drop of `target`, or of the first event seen when `None`.
    pub fn arm(&self, stage: FaultStage, target: Option<RecordKey>) {
        *self.slot(stage).lock() = Some(target);
    }

    pub fn disarm_all(&self) {
        for stage in [FaultStage::Fetch, FaultStage::Store, FaultStage::Dispatch] {
            *self.slot(stage).lock() = None;
        }
    }

    pub fn is_armed(&self, stage: FaultStage) -> bool {
        self.slot(stage).lock().is_some()
    }

    /// Returns true if the event at `key` must be dropped at `stage`.
    pub fn should_drop(&self, stage: FaultStage, key: &RecordKey) -> bool {
        let mut slot = self.slot(stage).lock();
        let hit = match slot.as_ref() {
            None => false,
            Some(None) => true,
            Some(Some(target)) => target == key,
        };
        if hit {
            *slot = None;
        }
        hit
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn key(h: u64) -> RecordKey {
        RecordKey {
            chain_id: "c".into(),
            block_height: h,
            tx_index: 0,
            log_index: 0,
        }
    }

    #[test]
    fn drops_exactly_once() {
        let f = FaultInjector::new();
        assert!(!f.should_drop(FaultStage::Fetch, &key(1)));
        f.arm(FaultStage::Fetch, Some(key(2)));
        assert!(!f.should_drop(FaultStage::Store, &key(2)));
        assert!(!f.should_drop(FaultStage::Fetch, &key(1)));
        assert!(f.should_drop(FaultStage::Fetch, &key(2)));
        assert!(!f.should_drop(FaultStage::Fetch, &key(2)));
        f.arm(FaultStage::Dispatch, None);
        assert!(f.should_drop(FaultStage::Dispatch, &key(9)));
        assert!(!f.is_armed(FaultStage::Dispatch));
    }
}
