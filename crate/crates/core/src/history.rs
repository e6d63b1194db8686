//! History files: a completed index distribution saved to disk so later
//! runs with the same problem size and rank count can skip redistribution.
//!
//! Layout (little-endian, integers 8 bytes unless noted):
//!
//! ```text
//! header:  "SDMH" | version u32 | total_nodes | total_edges | nprocs u32
//! rank 0:  local_edges | (edge id, edge1, edge2) * local_edges
//!          | owned_node_count | node_map * local_nodes
//! rank 1:  ...
//! ```
//!
//! Section offsets and per-rank counts are kept in the catalog's index
//! tables; the catalog row is inserted only after every section is on disk.

use std::fs::{self, File, OpenOptions};
use std::os::unix::fs::FileExt;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Condvar, Mutex};
use std::thread::{self, JoinHandle};

use crate::catalog::{Catalog, IndexHistoryRecord, PendingWrite};
use crate::error::{Result, SdmError};
use crate::harness::runtime::{run_ranks, RankContext};
use crate::partition::{
    block_range, distribute_edges, localize_vector, EdgeList, LocalIndexSet, MapArray, PartitioningVector,
};

pub const MAGIC: &[u8; 4] = b"SDMH";
pub const VERSION: u32 = 1;
pub const HEADER_LEN: u64 = 4 + 4 + 8 + 8 + 4;

/// Size in bytes of one rank's section.
pub fn section_len(local_edges: usize, local_nodes: usize) -> u64 {
    8 + 24 * local_edges as u64 + 8 + 8 * local_nodes as u64
}

pub fn history_file_name(app: &str, total_nodes: usize, total_edges: usize, nprocs: usize) -> String {
    format!("{app}_n{total_nodes}_e{total_edges}_p{nprocs}.sdmh")
}

fn encode_header(total_nodes: usize, total_edges: usize, nprocs: usize) -> Vec<u8> {
    let mut b = Vec::with_capacity(HEADER_LEN as usize);
    b.extend_from_slice(MAGIC);
    b.extend_from_slice(&VERSION.to_le_bytes());
    b.extend_from_slice(&(total_nodes as u64).to_le_bytes());
    b.extend_from_slice(&(total_edges as u64).to_le_bytes());
    b.extend_from_slice(&(nprocs as u32).to_le_bytes());
    b
}

fn encode_section(set: &LocalIndexSet) -> Vec<u8> {
    let mut b = Vec::with_capacity(section_len(set.local_edges(), set.local_nodes()) as usize);
    let mut put = |v: usize| b.extend_from_slice(&(v as u64).to_le_bytes());
    put(set.local_edges());
    for (&e, &(a, c)) in set.held_edges.as_slice().iter().zip(&set.held_edge_endpoints) {
        put(e);
        put(a);
        put(c);
    }
    put(set.owned_node_count);
    for &g in set.node_map.as_slice() {
        put(g);
    }
    b
}

#[derive(Default)]
struct Completion {
    outcome: Mutex<Option<Result<(), String>>>,
    done: Condvar,
    path: PathBuf,
}

impl Completion {
    fn new(path: PathBuf) -> Self {
        Completion {
            path,
            ..Default::default()
        }
    }

    fn complete(&self, outcome: Result<(), String>) {
        *self.outcome.lock().unwrap_or_else(|e| e.into_inner()) = Some(outcome);
        self.done.notify_all();
    }

    fn wait_outcome(&self) -> Result<()> {
        let mut g = self.outcome.lock().unwrap_or_else(|e| e.into_inner());
        while g.is_none() {
            g = self.done.wait(g).unwrap_or_else(|e| e.into_inner());
        }
        match g.as_ref().unwrap() {
            Ok(()) => Ok(()),
            Err(reason) => Err(SdmError::HistoryWrite {
                path: self.path.clone(),
                reason: reason.clone(),
            }),
        }
    }
}

impl PendingWrite for Completion {
    fn wait(&self) -> Result<()> {
        self.wait_outcome()
    }
}

/// Completion token for an asynchronous history write.
#[derive(Clone)]
pub struct AsyncTicket {
    completion: Arc<Completion>,
}

impl AsyncTicket {
    /// Blocks until the history file is durable and its catalog row exists.
    pub fn wait(&self) -> Result<()> {
        self.completion.wait_outcome()
    }

    pub fn is_complete(&self) -> bool {
        self.completion
            .outcome
            .lock()
            .unwrap_or_else(|e| e.into_inner())
            .is_some()
    }

    pub fn path(&self) -> &Path {
        &self.completion.path
    }
}

impl std::fmt::Debug for AsyncTicket {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("AsyncTicket")
            .field("path", &self.completion.path)
            .field("complete", &self.is_complete())
            .finish()
    }
}

/// Collectively saves this distribution as a history file.
///
/// Rank 0 must pass the catalog. Each rank writes its own section on a
/// background thread; the returned ticket completes once all sections are
/// synced and rank 0's coordinator has inserted the catalog row.
pub fn index_registry(
    ctx: &RankContext,
    catalog: Option<&Catalog>,
    history_dir: &Path,
    set: &LocalIndexSet,
) -> Result<AsyncTicket> {
    let nprocs = ctx.nprocs();
    if set.nprocs != nprocs || set.rank != ctx.rank() {
        return Err(SdmError::Validation(format!(
            "index set belongs to rank {} of {}, caller is rank {} of {nprocs}",
            set.rank,
            set.nprocs,
            ctx.rank()
        )));
    }
    ctx.agree("history problem size", (set.total_nodes as u64) << 32 ^ set.total_edges as u64)?;

    let counts = ctx.allgather((set.local_edges(), set.local_nodes()))?;
    let mut offsets = Vec::with_capacity(nprocs);
    let mut end = HEADER_LEN;
    for &(e, n) in &counts {
        offsets.push(end);
        end += section_len(e, n);
    }

    // Rank 0 checks the key, then creates the file at its final size.
    let prepared = if ctx.is_root() {
        Some(prepare_file(catalog, history_dir, set, end))
    } else {
        None
    };
    let path: PathBuf = ctx.share_root_result(prepared)?;

    let section = encode_section(set);
    let offset = offsets[ctx.rank()];
    let write_path = path.clone();
    let writer: JoinHandle<Result<()>> = thread::spawn(move || {
        let f = OpenOptions::new()
            .write(true)
            .open(&write_path)
            .map_err(|e| SdmError::io(&write_path, e))?;
        f.write_all_at(&section, offset)
            .and_then(|_| f.sync_data())
            .map_err(|e| SdmError::io(&write_path, e))
    });

    let writers = ctx.gather(writer)?;
    let completion = match (writers, catalog) {
        (Some(writers), Some(catalog)) => {
            let completion = Arc::new(Completion::new(path.clone()));
            let record = IndexHistoryRecord {
                total_nodes: set.total_nodes,
                total_edges: set.total_edges,
                nprocs,
                history_path: catalog.stored_path(&path),
                per_rank_edge_counts: counts.iter().map(|c| c.0).collect(),
                per_rank_node_counts: counts.iter().map(|c| c.1).collect(),
                per_rank_byte_offsets: offsets,
            };
            let coordinator = Arc::clone(&completion);
            let catalog_for_insert = catalog.clone();
            thread::spawn(move || {
                let outcome = finish_registry(writers, &path, &catalog_for_insert, record);
                coordinator.complete(outcome.map_err(|e| e.to_string()));
            });
            catalog.set_pending(completion.clone())?;
            Some(completion)
        }
        _ => None,
    };
    let completion = ctx.broadcast(0, completion)?;
    Ok(AsyncTicket { completion })
}

fn prepare_file(catalog: Option<&Catalog>, dir: &Path, set: &LocalIndexSet, total_len: u64) -> Result<PathBuf> {
    let catalog = catalog.ok_or_else(|| SdmError::State("rank 0 needs the catalog to register an index history".into()))?;
    if catalog
        .lookup_index_history(set.total_nodes, set.total_edges, set.nprocs)?
        .is_some()
    {
        return Err(SdmError::Conflict(format!(
            "an index history for nodes={} edges={} nprocs={} already exists",
            set.total_nodes, set.total_edges, set.nprocs
        )));
    }
    fs::create_dir_all(dir).map_err(|e| SdmError::io(dir, e))?;
    let path = dir.join(history_file_name(
        catalog.app_name(),
        set.total_nodes,
        set.total_edges,
        set.nprocs,
    ));
    let f = File::create(&path).map_err(|e| SdmError::io(&path, e))?;
    f.write_all_at(&encode_header(set.total_nodes, set.total_edges, set.nprocs), 0)
        .and_then(|_| f.set_len(total_len))
        .map_err(|e| SdmError::io(&path, e))?;
    Ok(path)
}

fn finish_registry(
    writers: Vec<JoinHandle<Result<()>>>,
    path: &Path,
    catalog: &Catalog,
    record: IndexHistoryRecord,
) -> Result<()> {
    let mut first_err = None;
    for (rank, w) in writers.into_iter().enumerate() {
        let outcome = w.join().unwrap_or_else(|_| {
            Err(SdmError::RankFailed {
                rank,
                message: "history section writer panicked".into(),
            })
        });
        if let Err(e) = outcome {
            first_err.get_or_insert(e);
        }
    }
    if let Some(e) = first_err {
        return Err(e);
    }
    File::open(path)
        .and_then(|f| f.sync_all())
        .map_err(|e| SdmError::io(path, e))?;
    catalog.insert_index_history(record)
}

/// Outcome of trying to replay a history.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Replay {
    Hit(LocalIndexSet),
    /// The history was built for a different rank count; the caller must
    /// run [`distribute_edges`] instead.
    Fallback { recorded_nprocs: usize, current_nprocs: usize },
}

/// Collective catalog lookup for the current job size. Rank 0 queries the
/// catalog; every rank receives the record with its path resolved.
pub fn lookup_for_job(
    ctx: &RankContext,
    catalog: Option<&Catalog>,
    total_nodes: usize,
    total_edges: usize,
) -> Result<Option<IndexHistoryRecord>> {
    let local = ctx.is_root().then(|| {
        let catalog = catalog.ok_or_else(|| SdmError::State("rank 0 needs the catalog".into()))?;
        Ok(catalog
            .lookup_index_history(total_nodes, total_edges, ctx.nprocs())?
            .map(|mut r| {
                r.history_path = catalog.resolve_path(&r.history_path);
                r
            }))
    });
    ctx.share_root_result(local)
}

/// Rebuilds `rank`'s index set from a history file with one contiguous
/// read of its section and no communication. `record.history_path` must
/// already be resolved (see [`lookup_for_job`]).
pub fn partition_index_with_history(
    record: &IndexHistoryRecord,
    rank: usize,
    nprocs: usize,
    pv: &PartitioningVector,
) -> Result<Replay> {
    if record.nprocs != nprocs {
        return Ok(Replay::Fallback {
            recorded_nprocs: record.nprocs,
            current_nprocs: nprocs,
        });
    }
    record.validate()?;
    if rank >= nprocs {
        return Err(SdmError::Validation(format!("rank {rank} outside job of {nprocs}")));
    }
    let path = &record.history_path;
    let corrupt = |reason: String| SdmError::HistoryCorrupt {
        path: path.clone(),
        reason,
    };
    if pv.total_nodes() != record.total_nodes {
        return Err(SdmError::Validation(format!(
            "partitioning vector covers {} nodes, history was built for {}",
            pv.total_nodes(),
            record.total_nodes
        )));
    }

    let f = File::open(path).map_err(|e| corrupt(format!("cannot open: {e}")))?;
    let mut header = [0u8; HEADER_LEN as usize];
    f.read_exact_at(&mut header, 0)
        .map_err(|e| corrupt(format!("header: {e}")))?;
    if header[..4] != MAGIC[..] {
        return Err(corrupt("bad magic".into()));
    }
    let version = u32::from_le_bytes(header[4..8].try_into().unwrap());
    let nodes = u64::from_le_bytes(header[8..16].try_into().unwrap()) as usize;
    let edges = u64::from_le_bytes(header[16..24].try_into().unwrap()) as usize;
    let procs = u32::from_le_bytes(header[24..28].try_into().unwrap()) as usize;
    if version != VERSION {
        return Err(corrupt(format!("unsupported version {version}")));
    }
    if (nodes, edges, procs) != record.key() {
        return Err(corrupt(format!(
            "header key ({nodes}, {edges}, {procs}) does not match catalog key {:?}",
            record.key()
        )));
    }

    let local_edges = record.per_rank_edge_counts[rank];
    let local_nodes = record.per_rank_node_counts[rank];
    let mut section = vec![0u8; section_len(local_edges, local_nodes) as usize];
    f.read_exact_at(&mut section, record.per_rank_byte_offsets[rank])
        .map_err(|e| corrupt(format!("section of rank {rank}: {e}")))?;

    let mut words = section
        .chunks_exact(8)
        .map(|c| u64::from_le_bytes(c.try_into().unwrap()) as usize);
    let mut next = || words.next().expect("section length checked above");

    if next() != local_edges {
        return Err(corrupt(format!("section of rank {rank} has the wrong edge count")));
    }
    let mut held = Vec::with_capacity(local_edges);
    let mut endpoints = Vec::with_capacity(local_edges);
    for _ in 0..local_edges {
        let (e, a, b) = (next(), next(), next());
        if e >= edges || a >= nodes || b >= nodes {
            return Err(corrupt(format!("edge record ({e}, {a}, {b}) out of range")));
        }
        held.push(e);
        endpoints.push((a, b));
    }
    let owned_node_count = next();
    if owned_node_count > local_nodes {
        return Err(corrupt("owned node count exceeds node map length".into()));
    }
    let node_map: Vec<usize> = (0..local_nodes).map(|_| next()).collect();

    let owned = localize_vector(pv, rank);
    if owned[..] != node_map[..owned_node_count] {
        return Err(SdmError::Validation(format!(
            "rank {rank}: partitioning vector differs from the one this history was built with"
        )));
    }

    Ok(Replay::Hit(LocalIndexSet {
        rank,
        nprocs,
        total_nodes: nodes,
        total_edges: edges,
        held_edges: MapArray::new(held, edges).map_err(|e| corrupt(e.to_string()))?,
        held_edge_endpoints: endpoints,
        node_map: MapArray::new(node_map, nodes).map_err(|e| corrupt(e.to_string()))?,
        owned_node_count,
    }))
}

/// Builds and registers one history per requested rank count, ahead of the
/// runs that will use them. `pv_for(n)` supplies the partitioning vector
/// for `n` ranks.
pub fn precreate_histories<F>(
    catalog: &Catalog,
    mesh: &EdgeList,
    nprocs_list: &[usize],
    history_dir: &Path,
    pv_for: F,
) -> Result<()>
where
    F: Fn(usize) -> PartitioningVector,
{
    for &n in nprocs_list {
        let pv = pv_for(n);
        let tickets = run_ranks(n, |ctx| {
            let block = mesh.block(block_range(mesh.len(), ctx.rank(), n));
            let (set, _) = distribute_edges(ctx, block, &pv)?;
            index_registry(ctx, ctx.is_root().then_some(catalog), history_dir, &set)
        })?;
        tickets[0].wait()?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::workload::worked_example;

    fn registered(dir: &Path, nprocs: usize) -> (Catalog, Vec<LocalIndexSet>) {
        let (mesh, _) = worked_example();
        let pv = if nprocs == 2 {
            worked_example().1
        } else {
            PartitioningVector::slabs(5, nprocs)
        };
        let cat = Catalog::initialize("demo", dir.join("cat"), nprocs).unwrap();
        let sets = run_ranks(nprocs, |ctx| {
            let block = mesh.block(block_range(mesh.len(), ctx.rank(), nprocs));
            let (set, _) = distribute_edges(ctx, block, &pv)?;
            let ticket = index_registry(ctx, ctx.is_root().then_some(&cat), &dir.join("hist"), &set)?;
            ticket.wait()?;
            Ok(set)
        })
        .unwrap();
        (cat, sets)
    }

    #[test]
    fn worked_example_history_layout() {
        let dir = tempfile::tempdir().unwrap();
        let (cat, _) = registered(dir.path(), 2);
        let rec = cat.lookup_index_history(5, 4, 2).unwrap().unwrap();
        assert_eq!(rec.per_rank_edge_counts, vec![2, 3]);
        assert_eq!(rec.per_rank_node_counts, vec![3, 4]);
        assert_eq!(rec.per_rank_byte_offsets, vec![28, 28 + section_len(2, 3)]);
        let path = cat.resolve_path(&rec.history_path);
        let len = fs::metadata(&path).unwrap().len();
        assert_eq!(len, 28 + section_len(2, 3) + section_len(3, 4));
        let bytes = fs::read(&path).unwrap();
        assert_eq!(&bytes[..4], b"SDMH");
        // rank 0 section: 2 edges, first is edge 0 = (0, 1)
        let w = |i: usize| u64::from_le_bytes(bytes[28 + 8 * i..36 + 8 * i].try_into().unwrap());
        assert_eq!([w(0), w(1), w(2), w(3)], [2, 0, 0, 1]);
    }

    #[test]
    fn replay_matches_distribution() {
        let dir = tempfile::tempdir().unwrap();
        let (cat, sets) = registered(dir.path(), 2);
        let mut rec = cat.lookup_index_history(5, 4, 2).unwrap().unwrap();
        rec.history_path = cat.resolve_path(&rec.history_path);
        let pv = worked_example().1;
        for set in &sets {
            let replay = partition_index_with_history(&rec, set.rank, 2, &pv).unwrap();
            assert_eq!(replay, Replay::Hit(set.clone()));
        }
    }

    #[test]
    fn single_rank_history_holds_whole_mesh() {
        let dir = tempfile::tempdir().unwrap();
        let (cat, _) = registered(dir.path(), 1);
        let rec = cat.lookup_index_history(5, 4, 1).unwrap().unwrap();
        assert_eq!(rec.per_rank_edge_counts, vec![4]);
        assert_eq!(rec.per_rank_node_counts, vec![5]);
    }

    #[test]
    fn second_registry_conflicts() {
        let dir = tempfile::tempdir().unwrap();
        let (cat, sets) = registered(dir.path(), 2);
        let err = run_ranks(2, |ctx| {
            index_registry(ctx, ctx.is_root().then_some(&cat), &dir.path().join("hist"), &sets[ctx.rank()])
        })
        .unwrap_err();
        assert!(matches!(err, SdmError::Conflict(_)), "{err}");
    }

    #[test]
    fn nprocs_mismatch_signals_fallback() {
        let dir = tempfile::tempdir().unwrap();
        let (cat, _) = registered(dir.path(), 2);
        let rec = cat.lookup_index_history(5, 4, 2).unwrap().unwrap();
        let pv = PartitioningVector::slabs(5, 4);
        assert_eq!(
            partition_index_with_history(&rec, 0, 4, &pv).unwrap(),
            Replay::Fallback {
                recorded_nprocs: 2,
                current_nprocs: 4
            }
        );
        assert_eq!(cat.lookup_index_history(5, 4, 4).unwrap(), None);
    }

    #[test]
    fn truncated_history_is_corrupt() {
        let dir = tempfile::tempdir().unwrap();
        let (cat, _) = registered(dir.path(), 2);
        let mut rec = cat.lookup_index_history(5, 4, 2).unwrap().unwrap();
        rec.history_path = cat.resolve_path(&rec.history_path);
        let f = OpenOptions::new().write(true).open(&rec.history_path).unwrap();
        f.set_len(60).unwrap();
        let pv = worked_example().1;
        let err = partition_index_with_history(&rec, 1, 2, &pv).unwrap_err();
        assert!(matches!(err, SdmError::HistoryCorrupt { .. }), "{err}");
        fs::remove_file(&rec.history_path).unwrap();
        let err = partition_index_with_history(&rec, 0, 2, &pv).unwrap_err();
        assert!(matches!(err, SdmError::HistoryCorrupt { .. }), "{err}");
    }

    #[test]
    fn finalize_waits_for_pending_write() {
        let dir = tempfile::tempdir().unwrap();
        let (mesh, pv) = worked_example();
        let cat = Catalog::initialize("demo", dir.path().join("cat"), 2).unwrap();
        let tickets = run_ranks(2, |ctx| {
            let block = mesh.block(block_range(4, ctx.rank(), 2));
            let (set, _) = distribute_edges(ctx, block, &pv)?;
            index_registry(ctx, ctx.is_root().then_some(&cat), &dir.path().join("hist"), &set)
        })
        .unwrap();
        cat.finalize().unwrap();
        assert!(tickets.iter().all(AsyncTicket::is_complete));
        let reopened = Catalog::initialize("demo", dir.path().join("cat"), 2).unwrap();
        let rec = reopened.lookup_index_history(5, 4, 2).unwrap().unwrap();
        let path = reopened.resolve_path(&rec.history_path);
        assert_eq!(
            fs::metadata(path).unwrap().len(),
            HEADER_LEN + section_len(2, 3) + section_len(3, 4)
        );
    }

    #[test]
    fn precreate_for_several_rank_counts() {
        let dir = tempfile::tempdir().unwrap();
        let (mesh, _) = worked_example();
        let cat = Catalog::initialize("demo", dir.path().join("cat"), 1).unwrap();
        precreate_histories(&cat, &mesh, &[1, 2, 4], &dir.path().join("hist"), |n| {
            PartitioningVector::slabs(5, n)
        })
        .unwrap();
        assert_eq!(cat.index_histories().unwrap().len(), 3);
        assert!(cat.lookup_index_history(5, 4, 4).unwrap().is_some());
        assert!(cat.lookup_index_history(5, 4, 3).unwrap().is_none());
    }
}
