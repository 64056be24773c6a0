use std::fmt;

use serde::{Deserialize, Serialize};

macro_rules! id_type {
    ($(#[$meta:meta])* $name:ident, $prefix:literal) => {
        $(#[$meta])*
        #[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
        #[serde(transparent)]
        pub struct $name(pub u64);

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                write!(f, concat!($prefix, "{}"), self.0)
            }
        }
    };
}

id_type!(
    /// Position of a trajectory in the append-only log.
    TrajectoryId,
    "t"
);
id_type!(SnapshotId, "s");
id_type!(DisruptionId, "d");

/// Monotonic id source; the first id handed out is 0.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct IdSeq(u64);

impl IdSeq {
    pub fn starting_at(next: u64) -> Self {
        IdSeq(next)
    }

    pub fn next_raw(&mut self) -> u64 {
        let id = self.0;
        self.0 += 1;
        id
    }

    pub fn peek(&self) -> u64 {
        self.0
    }
}
