use std::collections::BTreeMap;

use crate::cache::CacheCounters;
use crate::comm::{ByteTotals, Pattern};

/// Cumulative communication counters for one (array, kernel) pair.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct Counts {
    pub calls: u64,
    pub messages: u64,
    /// calls in which at least one message moved
    pub epochs: u64,
    pub inter_bytes: u64,
    pub host_device_bytes: u64,
    pub none: u64,
    pub p2p: u64,
    pub allgather: u64,
}

impl Counts {
    pub fn add(&mut self, o: &Counts) {
        self.calls += o.calls;
        self.messages += o.messages;
        self.epochs += o.epochs;
        self.inter_bytes += o.inter_bytes;
        self.host_device_bytes += o.host_device_bytes;
        self.none += o.none;
        self.p2p += o.p2p;
        self.allgather += o.allgather;
    }

    pub(crate) fn record(&mut self, bytes: ByteTotals, pattern: Pattern) {
        self.calls += 1;
        self.messages += bytes.messages;
        if bytes.messages > 0 {
            self.epochs += 1;
        }
        self.inter_bytes += bytes.inter_process;
        self.host_device_bytes += bytes.host_device;
        match pattern {
            Pattern::None => self.none += 1,
            Pattern::PointToPoint => self.p2p += 1,
            Pattern::AllGather => self.allgather += 1,
        }
    }
}

/// Snapshot of all counters; keys are `(array, kernel)`.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct CommStats {
    pub entries: BTreeMap<(String, String), Counts>,
    pub cache: CacheCounters,
}

impl CommStats {
    pub fn arrays(&self) -> Vec<&str> {
        let mut v: Vec<&str> = self.entries.keys().map(|(a, _)| a.as_str()).collect();
        v.dedup();
        v
    }

    pub fn get(&self, array: &str, kernel: &str) -> Counts {
        self.entries
            .get(&(array.to_string(), kernel.to_string()))
            .copied()
            .unwrap_or_default()
    }

    pub fn array_total(&self, array: &str) -> Counts {
        let mut c = Counts::default();
        for ((a, _), v) in &self.entries {
            if a == array {
                c.add(v);
            }
        }
        c
    }

    pub fn total(&self) -> Counts {
        let mut c = Counts::default();
        for v in self.entries.values() {
            c.add(v);
        }
        c
    }

    pub(crate) fn entry(&mut self, array: &str, kernel: &str) -> &mut Counts {
        self.entries
            .entry((array.to_string(), kernel.to_string()))
            .or_default()
    }
}
