//! Oracle comparisons: random meshes through the ring distribution and the
//! history round trip, and generated workloads through the full pipeline
//! at every level and several rank counts.

use std::collections::BTreeMap;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::catalog::{Catalog, FileOrgLevel};
use crate::error::{Result, SdmError};
use crate::harness::oracle::sequential_index_sets;
use crate::harness::pipeline::{run_pipeline, RunConfig};
use crate::harness::runtime::run_ranks;
use crate::harness::workload::{random_mesh, random_partitioning, WorkloadKind};
use crate::history::{index_registry, lookup_for_job, partition_index_with_history, Replay};
use crate::partition::{block_range, distribute_edges, DistributionStats, EdgeList, LocalIndexSet, PartitioningVector};

pub const VERIFY_NPROCS: [usize; 5] = [1, 2, 3, 4, 8];

fn mismatch(what: String) -> SdmError {
    SdmError::Verification(what)
}

/// Distributes `mesh` over `nprocs` ranks and checks the result against the
/// brute-force oracle, including the single-pass counters.
pub fn check_distribution(
    mesh: &EdgeList,
    pv: &PartitioningVector,
    nprocs: usize,
) -> Result<(Vec<LocalIndexSet>, Vec<DistributionStats>)> {
    let out = run_ranks(nprocs, |ctx| {
        distribute_edges(ctx, mesh.block(block_range(mesh.len(), ctx.rank(), nprocs)), pv)
    })?;
    let (sets, stats): (Vec<_>, Vec<_>) = out.into_iter().unzip();
    let expected = sequential_index_sets(mesh, pv, nprocs);
    for (p, (got, want)) in sets.iter().zip(&expected).enumerate() {
        if got != want {
            return Err(mismatch(format!(
                "rank {p} of {nprocs}: distributed {:?}/{:?}, oracle {:?}/{:?}",
                got.held_edges.as_slice(),
                got.node_map.as_slice(),
                want.held_edges.as_slice(),
                want.node_map.as_slice()
            )));
        }
    }
    for (p, s) in stats.iter().enumerate() {
        if s.edge_appends != s.ghost_rule_hits || s.edges_scanned != mesh.len() || s.blocks_scanned != nprocs {
            return Err(mismatch(format!("rank {p} of {nprocs}: scan counters {s:?}")));
        }
    }
    Ok((sets, stats))
}

/// Registers `sets` as a history, replays it on the same rank count and
/// checks it field for field. Returns ring shifts per rank spent on the
/// lookup and replay.
pub fn check_history_round_trip(
    catalog: &Catalog,
    history_dir: &Path,
    pv: &PartitioningVector,
    sets: &[LocalIndexSet],
) -> Result<Vec<u64>> {
    let nprocs = sets.len();
    let first = &sets[0];
    run_ranks(nprocs, |ctx| {
        let root_catalog = ctx.is_root().then_some(catalog);
        index_registry(ctx, root_catalog, history_dir, &sets[ctx.rank()])?.wait()?;
        let before = ctx.stats().ring_shifts;
        let record = lookup_for_job(ctx, root_catalog, first.total_nodes, first.total_edges)?
            .ok_or_else(|| mismatch("registered history not found".into()))?;
        let replayed = partition_index_with_history(&record, ctx.rank(), nprocs, pv)?;
        let shifts = ctx.stats().ring_shifts - before;
        match replayed {
            Replay::Hit(set) if set == sets[ctx.rank()] => Ok(shifts),
            Replay::Hit(_) => Err(mismatch(format!("rank {} replay differs from distribution", ctx.rank()))),
            Replay::Fallback { .. } => Err(mismatch("history fell back on its own rank count".into())),
        }
    })
}

#[derive(Debug, Default, Clone, PartialEq, Eq)]
pub struct VerifySummary {
    pub distribution_checks: usize,
    pub history_round_trips: usize,
    pub pipeline_runs: usize,
}

/// Random-mesh checks. Each case gets its own catalog under `work_dir`
/// since histories are keyed by mesh size.
pub fn verify_random_meshes(seed: u64, cases: usize, work_dir: &Path, summary: &mut VerifySummary) -> Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for case in 0..cases {
        let (mesh, total_nodes) = random_mesh(&mut rng, 1000, 200);
        let dir = work_dir.join(format!("case{case}"));
        let catalog = Catalog::initialize_at("verify", &dir, 1, Some(0))?;
        for nprocs in VERIFY_NPROCS {
            let pv = random_partitioning(&mut rng, total_nodes, nprocs);
            let (sets, _) = check_distribution(&mesh, &pv, nprocs)
                .map_err(|e| mismatch(format!("case {case}: {e}")))?;
            summary.distribution_checks += 1;
            let shifts = check_history_round_trip(&catalog, &dir.join("history"), &pv, &sets)?;
            if shifts.iter().any(|&s| s != 0) {
                return Err(mismatch(format!("case {case}: replay used ring shifts {shifts:?}")));
            }
            summary.history_round_trips += 1;
        }
        catalog.finalize()?;
    }
    Ok(())
}

/// Runs `kind` at every level for each rank count and checks that all
/// runs produce the same region bytes. The pipeline itself compares every
/// region with the oracle.
pub fn verify_levels(
    kind: WorkloadKind,
    scale: usize,
    nprocs_list: &[usize],
    work_dir: &Path,
    summary: &mut VerifySummary,
) -> Result<()> {
    let mut reference: Option<BTreeMap<(String, u64), Vec<u8>>> = None;
    for &nprocs in nprocs_list {
        for level in FileOrgLevel::ALL {
            let base = work_dir.join(format!("{}_p{nprocs}_l{}", kind.name(), level.number()));
            let mut cfg = RunConfig::new(kind, level, nprocs, &base);
            cfg.workload.scale = scale;
            cfg.collect_regions = true;
            let report = run_pipeline(&cfg)?;
            summary.pipeline_runs += 1;
            match &reference {
                None => reference = Some(report.regions),
                Some(r) if *r == report.regions => {}
                Some(_) => {
                    return Err(mismatch(format!(
                        "{} regions at nprocs {nprocs}, level {level} differ from the first run",
                        kind.name()
                    )))
                }
            }
        }
    }
    Ok(())
}

/// Everything `sdm verify` checks.
pub fn verify_all(seed: u64, cases: usize, work_dir: &Path) -> Result<VerifySummary> {
    let mut summary = VerifySummary::default();
    verify_random_meshes(seed, cases, &work_dir.join("random"), &mut summary)?;
    verify_levels(WorkloadKind::WorkedExample, 5, &[2], work_dir, &mut summary)?;
    verify_levels(WorkloadKind::Fun3dLike, 300, &[1, 2, 4], work_dir, &mut summary)?;
    verify_levels(WorkloadKind::RtLike, 200, &[1, 2, 4], work_dir, &mut summary)?;
    Ok(summary)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn small_verify_passes() {
        let dir = tempfile::tempdir().unwrap();
        let mut summary = VerifySummary::default();
        verify_random_meshes(3, 4, dir.path(), &mut summary).unwrap();
        assert_eq!(summary.distribution_checks, 4 * VERIFY_NPROCS.len());
        assert_eq!(summary.history_round_trips, summary.distribution_checks);
    }

    #[test]
    fn worked_example_levels_agree() {
        let dir = tempfile::tempdir().unwrap();
        let mut summary = VerifySummary::default();
        verify_levels(WorkloadKind::WorkedExample, 5, &[1, 2], dir.path(), &mut summary).unwrap();
        assert_eq!(summary.pipeline_runs, 6);
    }
}
