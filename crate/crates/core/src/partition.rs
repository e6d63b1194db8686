//! Index distribution: turn a replicated partitioning vector and a
//! block-imported edge list into per-rank edge and node map arrays.
//!
//! An edge is held by every rank that owns at least one of its endpoints,
//! so an edge whose endpoints have different owners is held twice (a ghost
//! edge on both ranks). Edges travel around the ring once; each rank scans
//! every block exactly once and appends matches to a buffer that doubles
//! when full, so no separate sizing pass is needed.

use std::fs;
use std::ops::Range;
use std::path::Path;

use crate::error::{Result, SdmError};
use crate::harness::runtime::RankContext;

/// Contiguous share of `total_items` for `rank`: sizes differ by at most
/// one and the first `total_items % nprocs` ranks take the extra item.
pub fn block_range(total_items: usize, rank: usize, nprocs: usize) -> Range<usize> {
    assert!(nprocs >= 1, "nprocs must be at least 1");
    assert!(rank < nprocs, "rank {rank} outside job of {nprocs}");
    let base = total_items / nprocs;
    let extra = total_items % nprocs;
    let lo = rank * base + rank.min(extra);
    let hi = lo + base + usize::from(rank < extra);
    lo..hi
}

/// Mesh connectivity as two parallel arrays of global node ids.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct EdgeList {
    pub edge1: Vec<usize>,
    pub edge2: Vec<usize>,
}

impl EdgeList {
    pub fn new(edge1: Vec<usize>, edge2: Vec<usize>) -> Result<Self> {
        if edge1.len() != edge2.len() {
            return Err(SdmError::Validation(format!(
                "edge1 has {} entries but edge2 has {}",
                edge1.len(),
                edge2.len()
            )));
        }
        Ok(EdgeList { edge1, edge2 })
    }

    pub fn from_pairs(pairs: &[(usize, usize)]) -> Self {
        let (edge1, edge2) = pairs.iter().copied().unzip();
        EdgeList { edge1, edge2 }
    }

    pub fn len(&self) -> usize {
        self.edge1.len()
    }

    pub fn is_empty(&self) -> bool {
        self.edge1.is_empty()
    }

    pub fn edge(&self, e: usize) -> (usize, usize) {
        (self.edge1[e], self.edge2[e])
    }

    pub fn validate(&self, total_nodes: usize) -> Result<()> {
        for e in 0..self.len() {
            let (a, b) = self.edge(e);
            if a >= total_nodes || b >= total_nodes {
                return Err(SdmError::Validation(format!(
                    "edge {e} = ({a}, {b}) references a node outside [0, {total_nodes})"
                )));
            }
        }
        Ok(())
    }

    /// The slice of edges in `range`, tagged with their global ids.
    pub fn block(&self, range: Range<usize>) -> EdgeBlock {
        EdgeBlock {
            first: range.start,
            edge1: self.edge1[range.clone()].to_vec(),
            edge2: self.edge2[range].to_vec(),
        }
    }
}

/// A run of consecutive global edges `first..first + len`.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct EdgeBlock {
    pub first: usize,
    pub edge1: Vec<usize>,
    pub edge2: Vec<usize>,
}

impl EdgeBlock {
    pub fn len(&self) -> usize {
        self.edge1.len()
    }

    pub fn is_empty(&self) -> bool {
        self.edge1.is_empty()
    }

    fn validate(&self, total_nodes: usize) -> Result<()> {
        if self.edge1.len() != self.edge2.len() {
            return Err(SdmError::Validation("edge block arrays differ in length".into()));
        }
        for (i, (&a, &b)) in self.edge1.iter().zip(&self.edge2).enumerate() {
            if a >= total_nodes || b >= total_nodes {
                return Err(SdmError::Validation(format!(
                    "edge {} = ({a}, {b}) references a node outside [0, {total_nodes})",
                    self.first + i
                )));
            }
        }
        Ok(())
    }
}

/// Owner rank of every global node, replicated on all ranks.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PartitioningVector {
    owner: Vec<u32>,
    nprocs: usize,
}

impl PartitioningVector {
    pub fn new(owner: Vec<u32>, nprocs: usize) -> Result<Self> {
        if nprocs == 0 {
            return Err(SdmError::Validation("nprocs must be at least 1".into()));
        }
        if let Some((g, &r)) = owner.iter().enumerate().find(|(_, &r)| r as usize >= nprocs) {
            return Err(SdmError::Validation(format!(
                "node {g} assigned to rank {r}, but the job has {nprocs} ranks"
            )));
        }
        Ok(PartitioningVector { owner, nprocs })
    }

    /// Contiguous slabs: node `g` goes to rank `g * nprocs / total_nodes`.
    pub fn slabs(total_nodes: usize, nprocs: usize) -> Self {
        let owner = (0..total_nodes)
            .map(|g| (g * nprocs / total_nodes.max(1)) as u32)
            .collect();
        PartitioningVector { owner, nprocs }
    }

    /// Reads a partitioner output file: one little-endian `i32` per node.
    pub fn read_file(path: &Path, nprocs: usize) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| SdmError::io(path, e))?;
        if bytes.len() % 4 != 0 {
            return Err(SdmError::Validation(format!(
                "{}: length {} is not a multiple of 4",
                path.display(),
                bytes.len()
            )));
        }
        let mut owner = Vec::with_capacity(bytes.len() / 4);
        for (g, chunk) in bytes.chunks_exact(4).enumerate() {
            let r = i32::from_le_bytes(chunk.try_into().unwrap());
            if r < 0 {
                return Err(SdmError::Validation(format!(
                    "{}: node {g} has negative owner {r}",
                    path.display()
                )));
            }
            owner.push(r as u32);
        }
        Self::new(owner, nprocs)
    }

    pub fn write_file(&self, path: &Path) -> Result<()> {
        let bytes: Vec<u8> = self
            .owner
            .iter()
            .flat_map(|&r| (r as i32).to_le_bytes())
            .collect();
        fs::write(path, bytes).map_err(|e| SdmError::io(path, e))
    }

    pub fn owner(&self, node: usize) -> usize {
        self.owner[node] as usize
    }

    pub fn owners(&self) -> &[u32] {
        &self.owner
    }

    pub fn total_nodes(&self) -> usize {
        self.owner.len()
    }

    pub fn nprocs(&self) -> usize {
        self.nprocs
    }

    fn holds(&self, rank: usize, a: usize, b: usize) -> bool {
        self.owner(a) == rank || self.owner(b) == rank
    }
}

/// Ascending list of the nodes owned by `rank`.
pub fn localize_vector(pv: &PartitioningVector, rank: usize) -> Vec<usize> {
    pv.owner
        .iter()
        .enumerate()
        .filter(|(_, &r)| r as usize == rank)
        .map(|(g, _)| g)
        .collect()
}

/// Local-to-global index mapping for one rank.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct MapArray {
    local_to_global: Vec<usize>,
}

impl MapArray {
    /// Checks that entries are unique and below `global_count`.
    pub fn new(local_to_global: Vec<usize>, global_count: usize) -> Result<Self> {
        let mut seen = vec![false; global_count];
        for (i, &g) in local_to_global.iter().enumerate() {
            if g >= global_count {
                return Err(SdmError::Validation(format!(
                    "map entry {i} = {g} is outside [0, {global_count})"
                )));
            }
            if std::mem::replace(&mut seen[g], true) {
                return Err(SdmError::Validation(format!("map entry {i} repeats global index {g}")));
            }
        }
        Ok(MapArray { local_to_global })
    }

    pub fn identity(count: usize) -> Self {
        MapArray {
            local_to_global: (0..count).collect(),
        }
    }

    pub fn range(range: Range<usize>) -> Self {
        MapArray {
            local_to_global: range.collect(),
        }
    }

    /// Each entry `g` becomes `g*components .. (g+1)*components`, for
    /// datasets that store several values per mesh entity.
    pub fn expand(&self, components: usize) -> Self {
        MapArray {
            local_to_global: self
                .local_to_global
                .iter()
                .flat_map(|&g| g * components..(g + 1) * components)
                .collect(),
        }
    }

    pub(crate) fn from_vec_unchecked(local_to_global: Vec<usize>) -> Self {
        MapArray { local_to_global }
    }

    pub fn as_slice(&self) -> &[usize] {
        &self.local_to_global
    }

    pub fn len(&self) -> usize {
        self.local_to_global.len()
    }

    pub fn is_empty(&self) -> bool {
        self.local_to_global.is_empty()
    }

    pub fn max_entry(&self) -> Option<usize> {
        self.local_to_global.iter().copied().max()
    }
}

/// Storage whose capacity doubles exactly when a push would overflow it.
#[derive(Debug, Clone)]
pub struct GrowableBuffer<T> {
    items: Vec<T>,
    capacity: usize,
    growths: usize,
}

impl<T> GrowableBuffer<T> {
    pub fn with_capacity(capacity: usize) -> Self {
        let capacity = capacity.max(1);
        GrowableBuffer {
            items: Vec::with_capacity(capacity),
            capacity,
            growths: 0,
        }
    }

    pub fn push(&mut self, item: T) {
        if self.items.len() == self.capacity {
            self.grow();
        }
        self.items.push(item);
    }

    pub fn grow(&mut self) {
        self.capacity *= 2;
        self.items.reserve_exact(self.capacity - self.items.len());
        self.growths += 1;
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn growths(&self) -> usize {
        self.growths
    }

    pub fn as_slice(&self) -> &[T] {
        &self.items
    }

    pub fn into_vec(self) -> Vec<T> {
        self.items
    }
}

/// What one rank holds after index distribution.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LocalIndexSet {
    pub rank: usize,
    pub nprocs: usize,
    pub total_nodes: usize,
    pub total_edges: usize,
    /// Global ids of the held edges (own and ghost), in discovery order.
    pub held_edges: MapArray,
    pub held_edge_endpoints: Vec<(usize, usize)>,
    /// Owned nodes ascending, then ghost nodes in first-encounter order.
    pub node_map: MapArray,
    pub owned_node_count: usize,
}

impl LocalIndexSet {
    pub fn local_edges(&self) -> usize {
        self.held_edges.len()
    }

    pub fn local_nodes(&self) -> usize {
        self.node_map.len()
    }

    pub fn owned_nodes(&self) -> &[usize] {
        &self.node_map.as_slice()[..self.owned_node_count]
    }

    pub fn ghost_nodes(&self) -> &[usize] {
        &self.node_map.as_slice()[self.owned_node_count..]
    }
}

/// `localEdges` of the distribution.
pub fn partition_index_size(set: &LocalIndexSet) -> usize {
    set.local_edges()
}

/// `localNodes` of the distribution.
pub fn partition_data_size(set: &LocalIndexSet) -> usize {
    set.local_nodes()
}

/// Instrumentation from one rank's run of [`distribute_edges`].
#[derive(Debug, Default, Clone, Copy, PartialEq, Eq)]
pub struct DistributionStats {
    pub blocks_scanned: usize,
    pub edges_scanned: usize,
    pub ghost_rule_hits: usize,
    pub edge_appends: usize,
    pub ring_shifts: usize,
    pub edge_buffer_growths: usize,
    pub node_buffer_growths: usize,
}

struct Assembler<'a> {
    rank: usize,
    pv: &'a PartitioningVector,
    seen: Vec<bool>,
    edges: GrowableBuffer<(usize, usize, usize)>,
    nodes: GrowableBuffer<usize>,
    stats: DistributionStats,
}

impl<'a> Assembler<'a> {
    fn new(rank: usize, nprocs: usize, pv: &'a PartitioningVector, total_edges: usize) -> Self {
        let total_nodes = pv.total_nodes();
        let mut seen = vec![false; total_nodes];
        let mut nodes = GrowableBuffer::with_capacity(2 * (total_nodes / nprocs));
        for g in localize_vector(pv, rank) {
            seen[g] = true;
            nodes.push(g);
        }
        Assembler {
            rank,
            pv,
            seen,
            edges: GrowableBuffer::with_capacity(2 * (total_edges / nprocs)),
            nodes,
            stats: DistributionStats::default(),
        }
    }

    fn scan(&mut self, block: &EdgeBlock) {
        self.stats.blocks_scanned += 1;
        for (i, (&a, &b)) in block.edge1.iter().zip(&block.edge2).enumerate() {
            self.stats.edges_scanned += 1;
            if !self.pv.holds(self.rank, a, b) {
                continue;
            }
            self.stats.ghost_rule_hits += 1;
            self.edges.push((block.first + i, a, b));
            self.stats.edge_appends += 1;
            for g in [a, b] {
                if !std::mem::replace(&mut self.seen[g], true) {
                    self.nodes.push(g);
                }
            }
        }
    }

    fn finish(mut self, nprocs: usize, total_edges: usize, owned_node_count: usize) -> (LocalIndexSet, DistributionStats) {
        self.stats.edge_buffer_growths = self.edges.growths();
        self.stats.node_buffer_growths = self.nodes.growths();
        let records = self.edges.into_vec();
        let held_edges = MapArray::from_vec_unchecked(records.iter().map(|r| r.0).collect());
        let held_edge_endpoints = records.iter().map(|r| (r.1, r.2)).collect();
        let set = LocalIndexSet {
            rank: self.rank,
            nprocs,
            total_nodes: self.pv.total_nodes(),
            total_edges,
            held_edges,
            held_edge_endpoints,
            node_map: MapArray::from_vec_unchecked(self.nodes.into_vec()),
            owned_node_count,
        };
        (set, self.stats)
    }
}

/// Collective index distribution over a ring.
///
/// Every rank passes the edges it imported (normally
/// `block_range(total_edges, rank, nprocs)`). The blocks circulate through
/// `nprocs - 1` ring shifts so each rank sees each block once, own block
/// first, then blocks from ranks `p-1, p-2, ...` in arrival order.
pub fn distribute_edges(
    ctx: &RankContext,
    block: EdgeBlock,
    pv: &PartitioningVector,
) -> Result<(LocalIndexSet, DistributionStats)> {
    let nprocs = ctx.nprocs();
    ctx.agree("partitioning vector rank count", pv.nprocs() as u64)?;
    ctx.agree("partitioning vector length", pv.total_nodes() as u64)?;
    if pv.nprocs() != nprocs {
        return Err(SdmError::CollectiveMismatch(format!(
            "partitioning vector is for {} ranks but the job has {nprocs}",
            pv.nprocs()
        )));
    }

    let problems = ctx.allgather(block.validate(pv.total_nodes()).err().map(|e| e.to_string()))?;
    if let Some((r, msg)) = problems
        .iter()
        .enumerate()
        .find_map(|(r, p)| p.as_ref().map(|m| (r, m)))
    {
        return Err(SdmError::Validation(format!("rank {r}: {msg}")));
    }
    let total_edges: usize = ctx.allgather(block.len())?.iter().sum();

    let owned = localize_vector(pv, ctx.rank()).len();
    let mut asm = Assembler::new(ctx.rank(), nprocs, pv, total_edges);
    let mut current = block;
    for round in 0..nprocs {
        asm.scan(&current);
        if round + 1 < nprocs {
            current = ctx.ring_shift(current)?;
            asm.stats.ring_shifts += 1;
        }
    }
    Ok(asm.finish(nprocs, total_edges, owned))
}
