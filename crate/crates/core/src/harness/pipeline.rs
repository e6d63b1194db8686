//! End-to-end run: initialize, import, partition (fresh or from history),
//! register, write every timestep, read back, finalize.

use std::collections::BTreeMap;
use std::fs;
use std::os::unix::fs::FileExt;
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use crate::catalog::{Catalog, DataType, FileOrgLevel, GroupSpec};
use crate::dataio::{resolve_region, DataHandle, IoStats};
use crate::error::{Result, SdmError};
use crate::harness::oracle;
use crate::harness::runtime::{run_ranks, RankContext};
use crate::harness::workload::{
    edge_array_id, gen_workload, import_value, node_array_id, result_value, GeneratedFiles, ResultShape,
    WorkloadKind, WorkloadSpec,
};
use crate::history::{index_registry, lookup_for_job, partition_index_with_history, AsyncTicket, Replay};
use crate::partition::{block_range, distribute_edges, DistributionStats, LocalIndexSet, MapArray, PartitioningVector};

#[derive(Debug, Clone)]
pub struct RunConfig {
    pub app: String,
    pub workload: WorkloadSpec,
    /// Replay a matching history instead of redistributing.
    pub use_history: bool,
    /// Save the distribution when no history exists yet.
    pub register_history: bool,
    pub catalog_dir: PathBuf,
    pub data_dir: PathBuf,
    pub history_dir: PathBuf,
    /// Fixed run timestamp (for reproducible catalogs).
    pub timestamp: Option<u64>,
    /// Return the bytes of every written region in the report.
    pub collect_regions: bool,
}

impl RunConfig {
    /// Catalog, data and history directories under `base`.
    pub fn new(kind: WorkloadKind, level: FileOrgLevel, nprocs: usize, base: &Path) -> Self {
        RunConfig {
            app: kind.name().to_string(),
            workload: WorkloadSpec::new(kind, level, nprocs),
            use_history: false,
            register_history: true,
            catalog_dir: base.join("catalog"),
            data_dir: base.join("data"),
            history_dir: base.join("catalog").join("history"),
            timestamp: None,
            collect_regions: false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum IndexSource {
    /// Edges imported and distributed around the ring.
    Distributed,
    /// Replayed from a history file.
    History,
}

#[derive(Debug, Default, Clone, Copy, PartialEq)]
pub struct PhaseTimings {
    pub import: Duration,
    pub index_distribution: Duration,
    pub write: Duration,
    pub read: Duration,
}

#[derive(Debug, Clone)]
pub struct RunReport {
    pub run: u64,
    pub nprocs: usize,
    pub index_source: IndexSource,
    pub history_registered: bool,
    pub local_edges: Vec<usize>,
    pub local_nodes: Vec<usize>,
    pub ring_shifts: Vec<u64>,
    pub distribution: Vec<Option<DistributionStats>>,
    pub timings: PhaseTimings,
    pub bytes_imported: u64,
    pub bytes_written: u64,
    pub bytes_read: u64,
    /// Names of the result files in the data directory, sorted.
    pub data_files: Vec<String>,
    /// `(dataset, timestep)` to region bytes, when requested.
    pub regions: BTreeMap<(String, u64), Vec<u8>>,
}

struct RankOutcome {
    set: LocalIndexSet,
    source: IndexSource,
    registered: bool,
    stats: Option<DistributionStats>,
    ring_shifts: u64,
    timings: PhaseTimings,
    imported: IoStats,
    io: IoStats,
}

struct ResultDataset {
    index: usize,
    name: String,
    shape: ResultShape,
}

fn mismatch(what: String) -> SdmError {
    SdmError::Verification(what)
}

fn timed<T>(ctx: &RankContext, slot: &mut Duration, f: impl FnOnce() -> Result<T>) -> Result<T> {
    ctx.barrier()?;
    let start = Instant::now();
    let out = f()?;
    ctx.barrier()?;
    *slot = start.elapsed();
    Ok(out)
}

fn rank_program(ctx: &RankContext, cfg: &RunConfig, files: &GeneratedFiles, catalog: &Catalog) -> Result<RankOutcome> {
    let w = &files.workload;
    let nprocs = ctx.nprocs();
    let level = cfg.workload.level;
    let total_edges = w.mesh.len();
    let total_nodes = w.total_nodes;
    let layout = w.layout();
    let mut timings = PhaseTimings::default();

    let mut h = DataHandle::new(ctx, ctx.is_root().then(|| catalog.clone()), &cfg.data_dir)?;
    let mut results = Vec::new();
    for plan in &w.result_groups {
        h.define_group(GroupSpec::result(
            &plan.names,
            DataType::Float64,
            w.element_count(plan.shape),
            level,
        ))?;
        for name in &plan.names {
            results.push(ResultDataset {
                index: results.len(),
                name: name.clone(),
                shape: plan.shape,
            });
        }
    }

    let mut import_names: Vec<&str> = vec!["edge1", "edge2"];
    import_names.extend(w.edge_arrays.iter().map(String::as_str));
    import_names.extend(w.node_arrays.iter().map(String::as_str));
    let mut spec = GroupSpec::import(&import_names, DataType::Int32, total_edges);
    for name in &w.edge_arrays {
        spec = spec.with_attributes(name, DataType::Float64, total_edges);
    }
    for name in &w.node_arrays {
        spec = spec.with_attributes(name, DataType::Float64, total_nodes);
    }
    h.make_importlist(spec, &files.mesh_path)?;
    let pv = PartitioningVector::read_file(&files.pv_path, nprocs)?;

    // Index distribution, from history when allowed and available.
    let existing = lookup_for_job(ctx, ctx.is_root().then_some(catalog), total_nodes, total_edges)?;
    let replayed = match (&existing, cfg.use_history) {
        (Some(rec), true) => match partition_index_with_history(rec, ctx.rank(), nprocs, &pv)? {
            Replay::Hit(set) => Some(set),
            Replay::Fallback { .. } => None,
        },
        _ => None,
    };
    let (set, source, stats) = match replayed {
        Some(set) => {
            timed(ctx, &mut timings.index_distribution, || Ok(()))?;
            (set, IndexSource::History, None)
        }
        None => {
            let block = timed(ctx, &mut timings.import, || h.import_edge_block("edge1", "edge2", total_edges))?;
            let (set, stats) = timed(ctx, &mut timings.index_distribution, || distribute_edges(ctx, block, &pv))?;
            (set, IndexSource::Distributed, Some(stats))
        }
    };

    let mut ticket: Option<AsyncTicket> = None;
    if source == IndexSource::Distributed && existing.is_none() && cfg.register_history {
        ticket = Some(index_registry(
            ctx,
            ctx.is_root().then_some(catalog),
            &cfg.history_dir,
            &set,
        )?);
    }

    // Imported arrays through the edge and node maps.
    let mut import_time = Duration::ZERO;
    timed(ctx, &mut import_time, || {
        for (j, name) in w.edge_arrays.iter().enumerate() {
            h.set_edge_view(name, &set)?;
            let vals: Vec<f64> = h.import_with_view(name, layout.edge_array_offset(j), total_edges)?;
            check_values(name, 0, set.held_edges.as_slice(), &vals, |e| import_value(edge_array_id(j), e))?;
        }
        for (j, name) in w.node_arrays.iter().enumerate() {
            h.set_node_view(name, &set)?;
            let vals: Vec<f64> = h.import_with_view(name, layout.node_array_offset(j), total_nodes)?;
            check_values(name, 0, set.node_map.as_slice(), &vals, |g| import_value(node_array_id(j), g))?;
        }
        h.release_importlist()
    })?;
    timings.import += import_time;
    let imported = h.stats();

    let maps: Vec<(MapArray, usize)> = results
        .iter()
        .map(|r| match r.shape {
            ResultShape::Nodes { components } => (set.node_map.expand(components), set.owned_node_count * components),
            ResultShape::Triangles => {
                let range = block_range(w.triangles, ctx.rank(), nprocs);
                let n = range.len();
                (MapArray::range(range), n)
            }
        })
        .collect();
    for (r, (map, owned)) in results.iter().zip(&maps) {
        h.set_data_view_with_owned(&r.name, map.clone(), *owned)?;
    }

    timed(ctx, &mut timings.write, || {
        for t in 1..=w.timesteps {
            for (r, (map, _)) in results.iter().zip(&maps) {
                let vals: Vec<f64> = map.as_slice().iter().map(|&i| result_value(r.index, t, i)).collect();
                h.collective_write(&r.name, t, &vals)?;
            }
        }
        Ok(())
    })?;

    timed(ctx, &mut timings.read, || {
        for t in 1..=w.timesteps {
            for (r, (map, _)) in results.iter().zip(&maps) {
                let vals: Vec<f64> = h.collective_read(&r.name, t)?;
                check_values(&r.name, t, map.as_slice(), &vals, |i| result_value(r.index, t, i))?;
            }
        }
        Ok(())
    })?;

    let registered = match &ticket {
        Some(t) => {
            t.wait()?;
            true
        }
        None => false,
    };
    let io = h.stats();
    Ok(RankOutcome {
        set,
        source,
        registered,
        stats,
        ring_shifts: ctx.stats().ring_shifts,
        timings,
        imported,
        io,
    })
}

fn check_values(name: &str, t: u64, map: &[usize], vals: &[f64], expect: impl Fn(usize) -> f64) -> Result<()> {
    for (i, (&g, &v)) in map.iter().zip(vals).enumerate() {
        let want = expect(g);
        if v.to_bits() != want.to_bits() {
            return Err(mismatch(format!(
                "{name} at timestep {t}: local {i} (global {g}) read {v}, expected {want}"
            )));
        }
    }
    Ok(())
}

/// Runs the whole pipeline for `cfg` and checks every region against the
/// sequential oracle before finalizing the catalog.
pub fn run_pipeline(cfg: &RunConfig) -> Result<RunReport> {
    let nprocs = cfg.workload.nprocs;
    let files = gen_workload(&cfg.workload, &cfg.data_dir.join("input"))?;
    let catalog = Catalog::initialize_at(&cfg.app, &cfg.catalog_dir, nprocs, cfg.timestamp)?;
    let outcomes = run_ranks(nprocs, |ctx| rank_program(ctx, cfg, &files, &catalog))?;

    let w = &files.workload;
    let groups = catalog.groups()?;
    let mut regions = BTreeMap::new();
    let mut index = 0;
    for plan in &w.result_groups {
        let group = groups
            .iter()
            .find(|g| g.dataset(&plan.names[0]).is_some())
            .ok_or_else(|| SdmError::NotFound(format!("group of {}", plan.names[0])))?;
        let count = w.element_count(plan.shape);
        for name in &plan.names {
            for t in 1..=w.timesteps {
                let region = resolve_region(&catalog, group, name, t)?;
                let path = cfg.data_dir.join(&region.file_id);
                let mut bytes = vec![0u8; region.length as usize];
                fs::File::open(&path)
                    .and_then(|f| f.read_exact_at(&mut bytes, region.base_offset))
                    .map_err(|e| SdmError::io(&path, e))?;
                let expected = oracle::region_bytes(count, |i| result_value(index, t, i));
                if bytes != expected {
                    return Err(mismatch(format!("region of {name} at timestep {t} differs from the oracle")));
                }
                if cfg.collect_regions {
                    regions.insert((name.clone(), t), bytes);
                }
            }
            index += 1;
        }
    }
    catalog.finalize()?;

    let mut data_files: Vec<String> = fs::read_dir(&cfg.data_dir)
        .map_err(|e| SdmError::io(&cfg.data_dir, e))?
        .filter_map(|e| e.ok())
        .filter(|e| e.file_type().map(|t| t.is_file()).unwrap_or(false))
        .map(|e| e.file_name().to_string_lossy().into_owned())
        .collect();
    data_files.sort();

    let root = &outcomes[0];
    Ok(RunReport {
        run: catalog.run(),
        nprocs,
        index_source: root.source,
        history_registered: root.registered,
        local_edges: outcomes.iter().map(|o| o.set.local_edges()).collect(),
        local_nodes: outcomes.iter().map(|o| o.set.local_nodes()).collect(),
        ring_shifts: outcomes.iter().map(|o| o.ring_shifts).collect(),
        distribution: outcomes.iter().map(|o| o.stats).collect(),
        timings: root.timings,
        bytes_imported: outcomes.iter().map(|o| o.imported.bytes_read).sum(),
        bytes_written: outcomes.iter().map(|o| o.io.bytes_written).sum(),
        bytes_read: outcomes.iter().map(|o| o.io.bytes_read - o.imported.bytes_read).sum(),
        data_files,
        regions,
    })
}
