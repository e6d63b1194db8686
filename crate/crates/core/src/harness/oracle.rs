//! Single-context reference computations used by tests and `verify`.
//!
//! Nothing here communicates or touches the ring: each rank's index set is
//! rebuilt by scanning the whole edge list in the documented block order,
//! and file regions are rebuilt by evaluating every element in global
//! order, the way a serial code writes its output one value at a time.

use std::collections::BTreeSet;

use crate::dataio::{encode, Element};
use crate::partition::{EdgeList, LocalIndexSet, MapArray, PartitioningVector};

/// Start of block `b` when `total` items are split over `n` ranks with the
/// remainder going to the lowest ranks.
fn block_start(total: usize, b: usize, n: usize) -> usize {
    (0..b).map(|r| total / n + usize::from(r < total % n)).sum()
}

/// Index sets every rank should end up with, by brute force.
///
/// Rank `p` sees edges block by block: its own block, then the blocks of
/// ranks `p-1, p-2, ...` (wrapping), ascending edge id within a block.
pub fn sequential_index_sets(mesh: &EdgeList, pv: &PartitioningVector, nprocs: usize) -> Vec<LocalIndexSet> {
    let total_edges = mesh.len();
    let total_nodes = pv.total_nodes();
    (0..nprocs)
        .map(|p| {
            let owned: Vec<usize> = (0..total_nodes).filter(|&g| pv.owner(g) == p).collect();
            let mut held = Vec::new();
            let mut endpoints = Vec::new();
            for k in 0..nprocs {
                let b = (p + nprocs - k) % nprocs;
                let lo = block_start(total_edges, b, nprocs);
                let hi = block_start(total_edges, b + 1, nprocs);
                for e in lo..hi {
                    let (a, c) = (mesh.edge1[e], mesh.edge2[e]);
                    if pv.owner(a) == p || pv.owner(c) == p {
                        held.push(e);
                        endpoints.push((a, c));
                    }
                }
            }
            let mut node_map = owned.clone();
            let mut listed: BTreeSet<usize> = owned.iter().copied().collect();
            for &(a, c) in &endpoints {
                for g in [a, c] {
                    if listed.insert(g) {
                        node_map.push(g);
                    }
                }
            }
            LocalIndexSet {
                rank: p,
                nprocs,
                total_nodes,
                total_edges,
                held_edges: MapArray::from_vec_unchecked(held),
                held_edge_endpoints: endpoints,
                node_map: MapArray::from_vec_unchecked(node_map),
                owned_node_count: owned.len(),
            }
        })
        .collect()
}

/// Region bytes a correct collective write must produce.
pub fn region_bytes<T: Element>(global_count: usize, value: impl Fn(usize) -> T) -> Vec<u8> {
    let values: Vec<T> = (0..global_count).map(value).collect();
    encode(&values)
}
