//! Small id newtypes shared across modules.

use std::fmt;

use serde::{Deserialize, Serialize};

macro_rules! id_type {
    ($(#[$doc:meta])* $name:ident) => {
        $(#[$doc])*
        #[derive(
            Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize,
        )]
        #[serde(transparent)]
        pub struct $name(pub u64);

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                write!(f, "{}", self.0)
            }
        }
    };
}

id_type!(
    /// Generation request id, unique per run.
    RequestId
);
id_type!(
    /// Trajectory id, unique per run.
    TrajectoryId
);
id_type!(
    /// Consumption group id assigned by the sample buffer.
    GroupId
);

/// Agent policy version; advances by exactly one per completed train step.
#[derive(
    Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default, Serialize, Deserialize,
)]
#[serde(transparent)]
pub struct PolicyVersion(pub u64);

impl PolicyVersion {
    pub fn next(self) -> PolicyVersion {
        PolicyVersion(self.0 + 1)
    }

    /// Version gap `newer - self`, saturating at zero.
    pub fn gap_from(self, newer: PolicyVersion) -> u64 {
        newer.0.saturating_sub(self.0)
    }
}

impl fmt::Display for PolicyVersion {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "v{}", self.0)
    }
}
