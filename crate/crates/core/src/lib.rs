//! Scientific data manager for irregular mesh applications.
//!
//! The pieces fit together as a run does:
//!
//! - [`catalog`] keeps the run, group, import, execution and history tables.
//! - [`partition`] turns a partitioning vector plus an edge list into each
//!   rank's local index set by passing edge blocks around a ring.
//! - [`history`] saves those index sets to a file and replays them on later
//!   runs with the same mesh and rank count.
//! - [`dataio`] imports arrays and writes and reads result datasets through
//!   map-array views at three file organization levels.
//! - [`harness`] runs logical ranks as threads and drives end-to-end runs.

pub mod catalog;
pub mod dataio;
pub mod error;
pub mod harness;
pub mod history;
pub mod partition;

pub use catalog::{Catalog, DataGroupDescriptor, DataType, FileOrgLevel, GroupKind, GroupSpec, IndexHistoryRecord};
pub use dataio::{DataHandle, DatasetRegion, Element, IoStats};
pub use error::{Result, SdmError};
pub use harness::runtime::{run_ranks, CommStats, RankContext};
pub use history::{index_registry, partition_index_with_history, AsyncTicket, Replay};
pub use partition::{
    block_range, distribute_edges, localize_vector, DistributionStats, EdgeList, LocalIndexSet, MapArray,
    PartitioningVector,
};
