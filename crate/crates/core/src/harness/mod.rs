//! Rank runtime, synthetic workloads, reference oracles and the end-to-end
//! run driver.

pub mod oracle;
pub mod pipeline;
pub mod runtime;
pub mod verify;
pub mod workload;
