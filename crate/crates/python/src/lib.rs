//! Python bindings for the sdm data manager.

use std::collections::BTreeMap;
use std::path::PathBuf;

use pyo3::create_exception;
use pyo3::exceptions::{PyException, PyValueError};
use pyo3::prelude::*;

use sdm::harness::pipeline::{self, IndexSource, RunConfig};
use sdm::harness::verify;
use sdm::harness::workload::{self, WorkloadKind, WorkloadSpec};
use sdm::{FileOrgLevel, LocalIndexSet};

create_exception!(sdm_py, SdmError, PyException);

fn err(e: sdm::SdmError) -> PyErr {
    SdmError::new_err(e.to_string())
}

fn kind(name: &str) -> PyResult<WorkloadKind> {
    match name {
        "fun3d" => Ok(WorkloadKind::Fun3dLike),
        "rt" => Ok(WorkloadKind::RtLike),
        "worked-example" => Ok(WorkloadKind::WorkedExample),
        other => Err(PyValueError::new_err(format!("unknown workload {other:?}"))),
    }
}

fn level(n: u8) -> PyResult<FileOrgLevel> {
    FileOrgLevel::from_number(n).ok_or_else(|| PyValueError::new_err(format!("level must be 1, 2 or 3, got {n}")))
}

/// One rank's share of the mesh after index distribution.
#[pyclass(name = "IndexSet", get_all)]
struct PyIndexSet {
    rank: usize,
    nprocs: usize,
    held_edges: Vec<usize>,
    node_map: Vec<usize>,
    owned_node_count: usize,
    ghost_nodes: Vec<usize>,
}

impl From<&LocalIndexSet> for PyIndexSet {
    fn from(s: &LocalIndexSet) -> Self {
        PyIndexSet {
            rank: s.rank,
            nprocs: s.nprocs,
            held_edges: s.held_edges.as_slice().to_vec(),
            node_map: s.node_map.as_slice().to_vec(),
            owned_node_count: s.owned_node_count,
            ghost_nodes: s.ghost_nodes().to_vec(),
        }
    }
}

#[pymethods]
impl PyIndexSet {
    fn __repr__(&self) -> String {
        format!(
            "IndexSet(rank={}, held_edges={:?}, node_map={:?}, owned_node_count={})",
            self.rank, self.held_edges, self.node_map, self.owned_node_count
        )
    }
}

#[pyfunction]
fn block_range(total: usize, rank: usize, nprocs: usize) -> PyResult<(usize, usize)> {
    if nprocs == 0 || rank >= nprocs {
        return Err(PyValueError::new_err("need 0 <= rank < nprocs"));
    }
    let r = sdm::block_range(total, rank, nprocs);
    Ok((r.start, r.end))
}

#[pyfunction]
fn localize_vector(owners: Vec<u32>, nprocs: usize, rank: usize) -> PyResult<Vec<usize>> {
    let pv = sdm::PartitioningVector::new(owners, nprocs).map_err(err)?;
    Ok(sdm::localize_vector(&pv, rank))
}

/// Distributes `edges` over `nprocs` logical ranks according to `owners`
/// (the partitioning vector) and returns every rank's index set.
#[pyfunction]
fn distribute(edges: Vec<(usize, usize)>, owners: Vec<u32>, nprocs: usize) -> PyResult<Vec<PyIndexSet>> {
    let mesh = sdm::EdgeList::from_pairs(&edges);
    let pv = sdm::PartitioningVector::new(owners, nprocs).map_err(err)?;
    let out = sdm::run_ranks(nprocs, |ctx| {
        sdm::distribute_edges(ctx, mesh.block(sdm::block_range(mesh.len(), ctx.rank(), nprocs)), &pv)
    })
    .map_err(err)?;
    Ok(out.iter().map(|(s, _)| PyIndexSet::from(s)).collect())
}

/// Metadata catalog handle. Opening a catalog starts a new run.
#[pyclass(name = "Catalog")]
struct PyCatalog {
    inner: sdm::Catalog,
}

#[pymethods]
impl PyCatalog {
    #[new]
    #[pyo3(signature = (app, root, nprocs, timestamp=None))]
    fn new(app: &str, root: PathBuf, nprocs: usize, timestamp: Option<u64>) -> PyResult<Self> {
        let inner = sdm::Catalog::initialize_at(app, root, nprocs, timestamp).map_err(err)?;
        Ok(PyCatalog { inner })
    }

    #[getter]
    fn run(&self) -> u64 {
        self.inner.run()
    }

    /// Group labels mapped to their dataset names.
    fn groups(&self) -> PyResult<BTreeMap<String, Vec<String>>> {
        Ok(self
            .inner
            .groups()
            .map_err(err)?
            .iter()
            .map(|g| (g.label(), g.names().into_iter().map(String::from).collect()))
            .collect())
    }

    /// Path of the history file for this problem size, if one exists.
    fn lookup_index_history(&self, total_nodes: usize, total_edges: usize, nprocs: usize) -> PyResult<Option<PathBuf>> {
        Ok(self
            .inner
            .lookup_index_history(total_nodes, total_edges, nprocs)
            .map_err(err)?
            .map(|r| self.inner.resolve_path(&r.history_path)))
    }

    /// `(file_id, byte_offset, byte_length)` of the latest write of a dataset.
    fn get_offset(&self, dataset: &str, timestep: u64) -> PyResult<Option<(String, u64, u64)>> {
        Ok(self
            .inner
            .get_offset(dataset, timestep)
            .map_err(err)?
            .map(|r| (r.file_id, r.byte_offset, r.byte_length)))
    }

    fn finalize(&self) -> PyResult<()> {
        self.inner.finalize().map_err(err)
    }
}

#[pyfunction]
#[pyo3(signature = (root, normalize=false))]
fn dump_catalog(root: PathBuf, normalize: bool) -> PyResult<String> {
    sdm::catalog::dump(&root, normalize).map_err(err)
}

/// Writes a workload's mesh and partitioning vector files into `dir`.
#[pyfunction]
#[pyo3(signature = (workload, nprocs, dir, scale=None))]
fn gen_workload(workload: &str, nprocs: usize, dir: PathBuf, scale: Option<usize>) -> PyResult<(PathBuf, PathBuf)> {
    let mut spec = WorkloadSpec::new(kind(workload)?, FileOrgLevel::L3, nprocs);
    if let Some(s) = scale {
        spec.scale = s;
    }
    let files = workload::gen_workload(&spec, &dir).map_err(err)?;
    Ok((files.mesh_path, files.pv_path))
}

#[pyclass(name = "RunReport", get_all)]
struct PyRunReport {
    run: u64,
    history_hit: bool,
    history_registered: bool,
    local_edges: Vec<usize>,
    local_nodes: Vec<usize>,
    ring_shifts: Vec<u64>,
    data_files: Vec<String>,
    bytes_written: u64,
    bytes_read: u64,
    regions: BTreeMap<(String, u64), Vec<u8>>,
}

/// Runs the full pipeline with catalog, data and history under `base_dir`.
#[pyfunction]
#[pyo3(signature = (workload, level, nprocs, base_dir, use_history=false, scale=None, collect_regions=false))]
fn run_pipeline(
    workload: &str,
    level: u8,
    nprocs: usize,
    base_dir: PathBuf,
    use_history: bool,
    scale: Option<usize>,
    collect_regions: bool,
) -> PyResult<PyRunReport> {
    let mut cfg = RunConfig::new(kind(workload)?, self::level(level)?, nprocs, &base_dir);
    cfg.use_history = use_history;
    cfg.collect_regions = collect_regions;
    if let Some(s) = scale {
        cfg.workload.scale = s;
    }
    let r = pipeline::run_pipeline(&cfg).map_err(err)?;
    Ok(PyRunReport {
        run: r.run,
        history_hit: r.index_source == IndexSource::History,
        history_registered: r.history_registered,
        local_edges: r.local_edges,
        local_nodes: r.local_nodes,
        ring_shifts: r.ring_shifts,
        data_files: r.data_files,
        bytes_written: r.bytes_written,
        bytes_read: r.bytes_read,
        regions: r.regions,
    })
}

/// Oracle comparisons; returns (distributions, history round trips, pipeline runs).
#[pyfunction]
fn verify_all(seed: u64, cases: usize, work_dir: PathBuf) -> PyResult<(usize, usize, usize)> {
    let s = verify::verify_all(seed, cases, &work_dir).map_err(err)?;
    Ok((s.distribution_checks, s.history_round_trips, s.pipeline_runs))
}

#[pymodule]
fn sdm_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("SdmError", m.py().get_type::<SdmError>())?;
    m.add_class::<PyIndexSet>()?;
    m.add_class::<PyCatalog>()?;
    m.add_class::<PyRunReport>()?;
    m.add_function(wrap_pyfunction!(block_range, m)?)?;
    m.add_function(wrap_pyfunction!(localize_vector, m)?)?;
    m.add_function(wrap_pyfunction!(distribute, m)?)?;
    m.add_function(wrap_pyfunction!(dump_catalog, m)?)?;
    m.add_function(wrap_pyfunction!(gen_workload, m)?)?;
    m.add_function(wrap_pyfunction!(run_pipeline, m)?)?;
    m.add_function(wrap_pyfunction!(verify_all, m)?)?;
    Ok(())
}
