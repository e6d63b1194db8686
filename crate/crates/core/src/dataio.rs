//! Map-array data views and collective file I/O.
//!
//! A [`DataHandle`] is one rank's session: it knows the groups defined for
//! the run, the data view bound to each dataset, and (on rank 0 only) the
//! catalog. Result datasets are written in global index order into files
//! laid out by the group's [`FileOrgLevel`]; imported datasets are read from
//! a raw mesh file either in contiguous blocks or through a view.

use std::collections::HashMap;
use std::fs::{self, File, OpenOptions};
use std::os::unix::fs::FileExt;
use std::path::{Path, PathBuf};

use crate::catalog::{Catalog, DataGroupDescriptor, DataType, DatasetSpec, FileOrgLevel, GroupKind, GroupSpec};
use crate::error::{Result, SdmError};
use crate::harness::runtime::RankContext;
use crate::partition::{block_range, EdgeBlock, LocalIndexSet, MapArray};

/// Element types that can live in a dataset.
pub trait Element: Copy + Send + Sync + 'static {
    const DATA_TYPE: DataType;
    fn put(self, out: &mut Vec<u8>);
    fn get(bytes: &[u8]) -> Self;
}

impl Element for i32 {
    const DATA_TYPE: DataType = DataType::Int32;
    fn put(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn get(bytes: &[u8]) -> Self {
        i32::from_le_bytes(bytes.try_into().unwrap())
    }
}

impl Element for f64 {
    const DATA_TYPE: DataType = DataType::Float64;
    fn put(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn get(bytes: &[u8]) -> Self {
        f64::from_le_bytes(bytes.try_into().unwrap())
    }
}

pub fn encode<T: Element>(values: &[T]) -> Vec<u8> {
    let mut out = Vec::with_capacity(values.len() * T::DATA_TYPE.size());
    for &v in values {
        v.put(&mut out);
    }
    out
}

pub fn decode<T: Element>(bytes: &[u8]) -> Vec<T> {
    bytes.chunks_exact(T::DATA_TYPE.size()).map(T::get).collect()
}

/// Binding of a dataset to a local-to-global map.
///
/// Entries `map[..owned_count]` belong to this rank and are written;
/// the rest are ghosts, read but never written.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DataView {
    pub dataset: String,
    pub map: MapArray,
    pub owned_count: usize,
}

impl DataView {
    pub fn count(&self) -> usize {
        self.map.len()
    }
}

/// Where one dataset instance lives.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DatasetRegion {
    pub file_id: String,
    pub base_offset: u64,
    pub length: u64,
}

/// File name for a dataset instance under the given level.
pub fn region_file_id(level: FileOrgLevel, group_label: &str, dataset: &str, timestep: u64) -> String {
    match level {
        FileOrgLevel::L1 => format!("{group_label}_{dataset}_t{timestep}.dat"),
        FileOrgLevel::L2 => format!("{group_label}_{dataset}.dat"),
        FileOrgLevel::L3 => format!("{group_label}.dat"),
    }
}

/// Looks up the region recorded for `(dataset, timestep)` in the execution
/// table and checks it against the group's naming scheme.
pub fn resolve_region(
    catalog: &Catalog,
    group: &DataGroupDescriptor,
    dataset: &str,
    timestep: u64,
) -> Result<DatasetRegion> {
    let spec = group
        .dataset(dataset)
        .ok_or_else(|| SdmError::NotFound(format!("dataset {dataset:?} in group {}", group.label())))?;
    let level = group
        .org_level
        .ok_or_else(|| SdmError::State(format!("group {} is an import group", group.label())))?;
    let rec = catalog
        .get_offset(dataset, timestep)?
        .ok_or_else(|| SdmError::NotFound(format!("{dataset} at timestep {timestep} has not been written")))?;
    let expected = region_file_id(level, &group.label(), dataset, timestep);
    if rec.file_id != expected || rec.byte_length != spec.byte_len() {
        return Err(SdmError::Validation(format!(
            "execution record {}@{} -> {} [{}+{}] does not fit level {level} layout {expected}",
            dataset, timestep, rec.file_id, rec.byte_offset, rec.byte_length
        )));
    }
    if level == FileOrgLevel::L1 && rec.byte_offset != 0 {
        return Err(SdmError::Validation(format!("level 1 region {expected} must start at 0")));
    }
    Ok(DatasetRegion {
        file_id: rec.file_id,
        base_offset: rec.byte_offset,
        length: rec.byte_length,
    })
}

/// Byte layout of a raw mesh file: `edge1 | edge2 | edge arrays | node arrays`.
/// With one edge and one node array this is `edge1 | edge2 | x | y`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MeshFileLayout {
    pub total_edges: usize,
    pub total_nodes: usize,
    pub edge_arrays: usize,
    pub node_arrays: usize,
}

impl MeshFileLayout {
    pub fn edge1_offset(&self) -> u64 {
        0
    }

    pub fn edge2_offset(&self) -> u64 {
        self.total_edges as u64 * 4
    }

    pub fn edge_array_offset(&self, j: usize) -> u64 {
        2 * self.total_edges as u64 * 4 + (j * self.total_edges) as u64 * 8
    }

    pub fn node_array_offset(&self, j: usize) -> u64 {
        self.edge_array_offset(self.edge_arrays) + (j * self.total_nodes) as u64 * 8
    }

    pub fn file_len(&self) -> u64 {
        self.node_array_offset(self.node_arrays)
    }
}

/// Per-handle I/O counters.
#[derive(Debug, Default, Clone, Copy, PartialEq, Eq)]
pub struct IoStats {
    pub file_opens: u64,
    pub write_calls: u64,
    pub read_calls: u64,
    pub bytes_written: u64,
    pub bytes_read: u64,
}

#[derive(Debug)]
struct ImportList {
    group_id: u32,
    source: PathBuf,
    released: bool,
}

/// One rank's data-management session.
pub struct DataHandle<'a> {
    ctx: &'a RankContext,
    catalog: Option<Catalog>,
    data_dir: PathBuf,
    groups: Vec<DataGroupDescriptor>,
    views: HashMap<String, DataView>,
    import: Option<ImportList>,
    stats: IoStats,
}

/// Sorted `(global index, local index)` pairs split into maximal runs of
/// consecutive global indices.
fn runs(pairs: &mut [(usize, usize)]) -> Vec<&[(usize, usize)]> {
    pairs.sort_unstable();
    let mut out = Vec::new();
    let mut start = 0;
    for i in 1..=pairs.len() {
        if i == pairs.len() || pairs[i].0 != pairs[i - 1].0 + 1 {
            if i > start {
                out.push(&pairs[start..i]);
            }
            start = i;
        }
    }
    out
}

impl<'a> DataHandle<'a> {
    /// Opens a session. Rank 0 passes the catalog; the data directory is
    /// where result files are created.
    pub fn new(ctx: &'a RankContext, catalog: Option<Catalog>, data_dir: impl Into<PathBuf>) -> Result<Self> {
        if ctx.is_root() != catalog.is_some() {
            return Err(SdmError::State("exactly rank 0 must hold the catalog".into()));
        }
        let data_dir = data_dir.into();
        let created = ctx.is_root().then(|| {
            fs::create_dir_all(&data_dir)
                .map_err(|e| SdmError::io(&data_dir, e))
                .and_then(|_| catalog.as_ref().unwrap().groups())
        });
        let groups = ctx.share_root_result(created)?;
        Ok(DataHandle {
            ctx,
            catalog,
            data_dir,
            groups,
            views: HashMap::new(),
            import: None,
            stats: IoStats::default(),
        })
    }

    pub fn ctx(&self) -> &RankContext {
        self.ctx
    }

    pub fn catalog(&self) -> Option<&Catalog> {
        self.catalog.as_ref()
    }

    pub fn data_dir(&self) -> &Path {
        &self.data_dir
    }

    pub fn stats(&self) -> IoStats {
        self.stats
    }

    pub fn groups(&self) -> &[DataGroupDescriptor] {
        &self.groups
    }

    /// Collective: rank 0 persists the group, every rank learns it.
    pub fn define_group(&mut self, spec: GroupSpec) -> Result<DataGroupDescriptor> {
        let local = self.catalog.as_ref().map(|c| c.define_group(spec));
        let group = self.ctx.share_root_result(local)?;
        self.groups.push(group.clone());
        Ok(group)
    }

    /// Collective: defines the import group reading from `source` and makes
    /// it the active import list.
    pub fn make_importlist(&mut self, spec: GroupSpec, source: &Path) -> Result<DataGroupDescriptor> {
        if self.import.as_ref().is_some_and(|i| !i.released) {
            return Err(SdmError::Lifecycle("an import list is already active".into()));
        }
        let group = self.define_group(spec.with_source(source))?;
        self.import = Some(ImportList {
            group_id: group.group_id,
            source: source.to_path_buf(),
            released: false,
        });
        Ok(group)
    }

    fn find(&self, dataset: &str) -> Result<(&DataGroupDescriptor, &DatasetSpec)> {
        self.groups
            .iter()
            .find_map(|g| g.dataset(dataset).map(|d| (g, d)))
            .ok_or_else(|| SdmError::NotFound(format!("dataset {dataset:?} is not defined")))
    }

    /// Binds `map` to `dataset`; every entry counts as owned.
    pub fn set_data_view(&mut self, dataset: &str, map: MapArray, count: usize) -> Result<()> {
        let owned = map.len();
        self.bind(dataset, map, count, owned)
    }

    /// Binds a map whose first `owned_count` entries are owned by this rank.
    pub fn set_data_view_with_owned(&mut self, dataset: &str, map: MapArray, owned_count: usize) -> Result<()> {
        let count = map.len();
        self.bind(dataset, map, count, owned_count)
    }

    /// Binds the node map of `set` (owned nodes, then ghosts).
    pub fn set_node_view(&mut self, dataset: &str, set: &LocalIndexSet) -> Result<()> {
        self.set_data_view_with_owned(dataset, set.node_map.clone(), set.owned_node_count)
    }

    /// Binds the held-edge map of `set`.
    pub fn set_edge_view(&mut self, dataset: &str, set: &LocalIndexSet) -> Result<()> {
        self.set_data_view(dataset, set.held_edges.clone(), set.local_edges())
    }

    fn bind(&mut self, dataset: &str, map: MapArray, count: usize, owned_count: usize) -> Result<()> {
        let (group, spec) = self.find(dataset)?;
        if group.kind == GroupKind::Import {
            self.active_import(group.group_id)?;
        }
        if count != map.len() {
            return Err(SdmError::Validation(format!(
                "view count {count} differs from map length {}",
                map.len()
            )));
        }
        if owned_count > count {
            return Err(SdmError::Validation("owned prefix longer than the map".into()));
        }
        if let Some(m) = map.max_entry().filter(|&m| m >= spec.global_count) {
            return Err(SdmError::Validation(format!(
                "map entry {m} outside dataset {dataset} of {} elements",
                spec.global_count
            )));
        }
        self.views.insert(
            dataset.to_string(),
            DataView {
                dataset: dataset.to_string(),
                map,
                owned_count,
            },
        );
        Ok(())
    }

    pub fn view(&self, dataset: &str) -> Option<&DataView> {
        self.views.get(dataset)
    }

    fn active_import(&self, group_id: u32) -> Result<&ImportList> {
        match &self.import {
            Some(i) if i.group_id == group_id && !i.released => Ok(i),
            Some(i) if i.group_id == group_id => Err(SdmError::Lifecycle("import list has been released".into())),
            _ => Err(SdmError::Lifecycle(format!("group G{group_id} is not the active import list"))),
        }
    }

    /// Fails on every rank if any rank's local step failed.
    fn all_ok<T>(&self, local: Result<T>) -> Result<T> {
        let msgs = self.ctx.allgather(local.as_ref().err().map(|e| e.to_string()))?;
        let local = local?;
        match msgs.iter().enumerate().find_map(|(r, m)| m.as_ref().map(|m| (r, m))) {
            Some((rank, message)) => Err(SdmError::RankFailed {
                rank,
                message: message.clone(),
            }),
            None => Ok(local),
        }
    }

    fn check_write<T: Element>(&self, dataset: &str, timestep: u64, len: usize) -> Result<(&DataGroupDescriptor, &DataView)> {
        let (group, spec) = self.find(dataset)?;
        if group.kind != GroupKind::Result {
            return Err(SdmError::State(format!("{dataset} is an imported dataset and cannot be written")));
        }
        if timestep == 0 {
            return Err(SdmError::Validation("timesteps start at 1".into()));
        }
        if spec.data_type != T::DATA_TYPE {
            return Err(SdmError::Validation(format!(
                "{dataset} holds {} but the buffer holds {}",
                spec.data_type,
                T::DATA_TYPE
            )));
        }
        let view = self
            .views
            .get(dataset)
            .ok_or_else(|| SdmError::State(format!("no data view bound for {dataset}")))?;
        if len != view.count() {
            return Err(SdmError::Validation(format!(
                "buffer for {dataset} has {len} elements, view expects {}",
                view.count()
            )));
        }
        Ok((group, view))
    }

    /// Collective write of one timestep of a result dataset.
    ///
    /// Each rank contributes only the entries it owns; the file region ends
    /// up holding value `g` at `base + g * element_size`.
    pub fn collective_write<T: Element>(&mut self, dataset: &str, timestep: u64, values: &[T]) -> Result<()> {
        let checked = self.check_write::<T>(dataset, timestep, values.len()).map(|_| ());
        self.all_ok(checked)?;
        let (group, view) = self.check_write::<T>(dataset, timestep, values.len())?;
        let level = group.org_level.expect("result group has a level");
        let file_id = region_file_id(level, &group.label(), dataset, timestep);
        let length = group.dataset(dataset).unwrap().byte_len();
        let size = T::DATA_TYPE.size();

        let mut owned: Vec<(usize, usize)> = view.map.as_slice()[..view.owned_count]
            .iter()
            .enumerate()
            .map(|(i, &g)| (g, i))
            .collect();
        let owned_runs: Vec<Vec<(usize, usize)>> = runs(&mut owned).into_iter().map(<[_]>::to_vec).collect();
        let spans: Vec<(usize, usize)> = owned_runs
            .iter()
            .map(|r| (r[0].0, r.last().unwrap().0 + 1))
            .collect();

        // rank 0 checks that owned ranges are disjoint and places the region
        let all_spans = self.ctx.gather(spans)?;
        let planned = match (&self.catalog, all_spans) {
            (Some(catalog), Some(all_spans)) => Some(
                check_disjoint(dataset, all_spans)
                    .and_then(|_| plan_region(catalog, &self.data_dir, level, &file_id, length)),
            ),
            _ => None,
        };
        let region: DatasetRegion = self.ctx.share_root_result(planned)?;

        let path = self.data_dir.join(&region.file_id);
        let written = self.write_runs(&path, region.base_offset, size, &owned_runs, values);
        self.all_ok(written)?;

        let recorded = self.catalog.as_ref().map(|c| {
            c.record_offset(dataset, timestep, &region.file_id, region.base_offset, region.length)
        });
        self.ctx.share_root_result(recorded)
    }

    fn write_runs<T: Element>(
        &mut self,
        path: &Path,
        base: u64,
        size: usize,
        owned_runs: &[Vec<(usize, usize)>],
        values: &[T],
    ) -> Result<()> {
        if owned_runs.is_empty() {
            return Ok(());
        }
        let f = OpenOptions::new()
            .write(true)
            .open(path)
            .map_err(|e| SdmError::io(path, e))?;
        self.stats.file_opens += 1;
        let mut buf = Vec::new();
        for run in owned_runs {
            buf.clear();
            for &(_, local) in run {
                values[local].put(&mut buf);
            }
            f.write_all_at(&buf, base + (run[0].0 * size) as u64)
                .map_err(|e| SdmError::io(path, e))?;
            self.stats.write_calls += 1;
            self.stats.bytes_written += buf.len() as u64;
        }
        Ok(())
    }

    /// Collective read of one timestep through the bound view; ghosts are
    /// read as well.
    pub fn collective_read<T: Element>(&mut self, dataset: &str, timestep: u64) -> Result<Vec<T>> {
        let local = self.find(dataset).and_then(|(group, spec)| {
            if group.kind != GroupKind::Result {
                return Err(SdmError::State(format!("{dataset} is imported; use import")));
            }
            if spec.data_type != T::DATA_TYPE {
                return Err(SdmError::Validation(format!("{dataset} holds {}", spec.data_type)));
            }
            self.views
                .get(dataset)
                .map(|_| ())
                .ok_or_else(|| SdmError::State(format!("no data view bound for {dataset}")))
        });
        self.all_ok(local)?;
        let resolved = self.catalog.as_ref().map(|c| {
            let (group, _) = self.find(dataset)?;
            resolve_region(c, group, dataset, timestep)
        });
        let region: DatasetRegion = self.ctx.share_root_result(resolved)?;
        let path = self.data_dir.join(&region.file_id);
        let map = self.views[dataset].map.clone();
        let read = self.read_mapped::<T>(&path, region.base_offset, region.length, map.as_slice());
        self.all_ok(read)
    }

    fn read_mapped<T: Element>(&mut self, path: &Path, base: u64, extent: u64, map: &[usize]) -> Result<Vec<T>> {
        let size = T::DATA_TYPE.size();
        let f = File::open(path).map_err(|e| SdmError::io(path, e))?;
        self.stats.file_opens += 1;
        let file_len = f.metadata().map_err(|e| SdmError::io(path, e))?.len();
        let end = base + extent;
        if end > file_len {
            return Err(SdmError::Bounds {
                path: path.to_path_buf(),
                offset: base,
                end,
                len: file_len,
            });
        }
        let mut pairs: Vec<(usize, usize)> = map.iter().enumerate().map(|(i, &g)| (g, i)).collect();
        let mut out: Vec<Option<T>> = vec![None; map.len()];
        let mut buf = Vec::new();
        for run in runs(&mut pairs) {
            let lo = base + (run[0].0 * size) as u64;
            let n = run.len() * size;
            if lo + n as u64 > end {
                return Err(SdmError::Bounds {
                    path: path.to_path_buf(),
                    offset: lo,
                    end: lo + n as u64,
                    len: end,
                });
            }
            buf.resize(n, 0);
            f.read_exact_at(&mut buf, lo).map_err(|e| SdmError::io(path, e))?;
            self.stats.read_calls += 1;
            self.stats.bytes_read += n as u64;
            for (k, &(_, local)) in run.iter().enumerate() {
                out[local] = Some(T::get(&buf[k * size..(k + 1) * size]));
            }
        }
        Ok(out.into_iter().map(|v| v.expect("every map entry read")).collect())
    }

    fn import_target<T: Element>(&self, dataset: &str, file_offset: u64, total_count: usize) -> Result<PathBuf> {
        let (group, spec) = self.find(dataset)?;
        if group.kind != GroupKind::Import {
            return Err(SdmError::State(format!("{dataset} is not an imported dataset")));
        }
        let import = self.active_import(group.group_id)?;
        if spec.data_type != T::DATA_TYPE {
            return Err(SdmError::Validation(format!(
                "{dataset} holds {} but {} was requested",
                spec.data_type,
                T::DATA_TYPE
            )));
        }
        let path = import.source.clone();
        let len = fs::metadata(&path).map_err(|e| SdmError::io(&path, e))?.len();
        let end = file_offset + (total_count * T::DATA_TYPE.size()) as u64;
        if end > len {
            return Err(SdmError::Bounds {
                path,
                offset: file_offset,
                end,
                len,
            });
        }
        Ok(path)
    }

    /// Reads this rank's contiguous block of `total_count` elements
    /// starting at `file_offset` in the import source.
    pub fn import_contiguous<T: Element>(&mut self, dataset: &str, file_offset: u64, total_count: usize) -> Result<Vec<T>> {
        let path = self.import_target::<T>(dataset, file_offset, total_count)?;
        let range = block_range(total_count, self.ctx.rank(), self.ctx.nprocs());
        let size = T::DATA_TYPE.size();
        let mut buf = vec![0u8; range.len() * size];
        let f = File::open(&path).map_err(|e| SdmError::io(&path, e))?;
        self.stats.file_opens += 1;
        f.read_exact_at(&mut buf, file_offset + (range.start * size) as u64)
            .map_err(|e| SdmError::io(&path, e))?;
        self.stats.read_calls += 1;
        self.stats.bytes_read += buf.len() as u64;
        Ok(decode(&buf))
    }

    /// Reads `file[file_offset + map[i] * size]` for each entry of the view
    /// bound to `dataset`.
    pub fn import_with_view<T: Element>(&mut self, dataset: &str, file_offset: u64, total_count: usize) -> Result<Vec<T>> {
        let path = self.import_target::<T>(dataset, file_offset, total_count)?;
        let view = self
            .views
            .get(dataset)
            .ok_or_else(|| SdmError::State(format!("no data view bound for {dataset}")))?;
        if let Some(m) = view.map.max_entry().filter(|&m| m >= total_count) {
            return Err(SdmError::Validation(format!(
                "view entry {m} beyond the {total_count} imported elements"
            )));
        }
        let map = view.map.clone();
        let extent = (total_count * T::DATA_TYPE.size()) as u64;
        self.read_mapped(&path, file_offset, extent, map.as_slice())
    }

    /// Imports this rank's block of the edge list laid out as
    /// `edge1 | edge2` (both `INT32`) at the start of the source.
    pub fn import_edge_block(&mut self, edge1: &str, edge2: &str, total_edges: usize) -> Result<EdgeBlock> {
        let layout_edge2 = total_edges as u64 * 4;
        let a = self.import_contiguous::<i32>(edge1, 0, total_edges)?;
        let b = self.import_contiguous::<i32>(edge2, layout_edge2, total_edges)?;
        let to_ids = |v: Vec<i32>| -> Result<Vec<usize>> {
            v.into_iter()
                .map(|x| usize::try_from(x).map_err(|_| SdmError::Validation(format!("negative node id {x}"))))
                .collect()
        };
        Ok(EdgeBlock {
            first: block_range(total_edges, self.ctx.rank(), self.ctx.nprocs()).start,
            edge1: to_ids(a)?,
            edge2: to_ids(b)?,
        })
    }

    /// Drops the active import list and its views; result views stay bound.
    pub fn release_importlist(&mut self) -> Result<()> {
        let import = match &mut self.import {
            Some(i) if !i.released => i,
            Some(_) => return Err(SdmError::Lifecycle("import list already released".into())),
            None => return Err(SdmError::Lifecycle("no import list to release".into())),
        };
        import.released = true;
        let group_id = import.group_id;
        if let Some(group) = self.groups.iter().find(|g| g.group_id == group_id) {
            for name in group.names() {
                self.views.remove(name);
            }
        }
        Ok(())
    }
}

fn check_disjoint(dataset: &str, all_spans: Vec<Vec<(usize, usize)>>) -> Result<()> {
    let mut spans: Vec<(usize, usize, usize)> = all_spans
        .into_iter()
        .enumerate()
        .flat_map(|(r, s)| s.into_iter().map(move |(lo, hi)| (lo, hi, r)))
        .collect();
    spans.sort_unstable();
    for w in spans.windows(2) {
        if w[1].0 < w[0].1 {
            return Err(SdmError::Validation(format!(
                "{dataset}: ranks {} and {} both own global index {}",
                w[0].2, w[1].2, w[1].0
            )));
        }
    }
    Ok(())
}

/// Places a new region (rank 0). Level 1 always gets a fresh file; levels 2
/// and 3 append after the regions already recorded for the file in this
/// run, and start a fresh file on its first write of the run.
fn plan_region(catalog: &Catalog, data_dir: &Path, level: FileOrgLevel, file_id: &str, length: u64) -> Result<DatasetRegion> {
    let path = data_dir.join(file_id);
    let end = match level {
        FileOrgLevel::L1 => None,
        FileOrgLevel::L2 | FileOrgLevel::L3 => catalog.file_end(file_id)?,
    };
    let base_offset = end.unwrap_or(0);
    let f = match end {
        None => File::create(&path),
        Some(_) => OpenOptions::new().write(true).open(&path),
    }
    .map_err(|e| SdmError::io(&path, e))?;
    f.set_len(base_offset + length).map_err(|e| SdmError::io(&path, e))?;
    Ok(DatasetRegion {
        file_id: file_id.to_string(),
        base_offset,
        length,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::runtime::run_ranks;
    use crate::harness::workload::{worked_example, write_mesh_file};
    use crate::partition::{distribute_edges, PartitioningVector};

    #[test]
    fn file_ids_per_level() {
        assert_eq!(region_file_id(FileOrgLevel::L1, "G0", "p", 3), "G0_p_t3.dat");
        assert_eq!(region_file_id(FileOrgLevel::L2, "G0", "p", 3), "G0_p.dat");
        assert_eq!(region_file_id(FileOrgLevel::L3, "G0", "p", 3), "G0.dat");
    }

    #[test]
    fn mesh_layout_offsets() {
        let l = MeshFileLayout {
            total_edges: 4,
            total_nodes: 5,
            edge_arrays: 1,
            node_arrays: 1,
        };
        assert_eq!(l.edge2_offset(), 16);
        assert_eq!(l.edge_array_offset(0), 32);
        assert_eq!(l.node_array_offset(0), 64);
        assert_eq!(l.file_len(), 104);
    }

    #[test]
    fn runs_coalesce_consecutive_indices() {
        let mut pairs = vec![(4, 0), (1, 1), (2, 2), (7, 3), (3, 4)];
        let r = runs(&mut pairs);
        let spans: Vec<_> = r.iter().map(|r| (r[0].0, r.len())).collect();
        assert_eq!(spans, vec![(1, 4), (7, 1)]);
    }

    fn worked_setup(dir: &Path, level: FileOrgLevel) -> (Catalog, PathBuf) {
        let (mesh, _) = worked_example();
        let mesh_path = dir.join("mesh.bin");
        write_mesh_file(&mesh_path, &mesh, 5, 1, 1).unwrap();
        let cat = Catalog::initialize("demo", dir.join("cat"), 2).unwrap();
        cat.define_group(GroupSpec::result(&["p", "q"], DataType::Float64, 5, level))
            .unwrap();
        (cat, mesh_path)
    }

    fn import_spec() -> GroupSpec {
        GroupSpec::import(&["edge1", "edge2", "x", "y"], DataType::Int32, 4)
            .with_attributes("x", DataType::Float64, 4)
            .with_attributes("y", DataType::Float64, 5)
    }

    #[test]
    fn worked_example_import_write_read() {
        let dir = tempfile::tempdir().unwrap();
        let (cat, mesh_path) = worked_setup(dir.path(), FileOrgLevel::L3);
        let pv = worked_example().1;
        let layout = MeshFileLayout {
            total_edges: 4,
            total_nodes: 5,
            edge_arrays: 1,
            node_arrays: 1,
        };
        let out = run_ranks(2, |ctx| {
            let mut h = DataHandle::new(ctx, ctx.is_root().then(|| cat.clone()), dir.path().join("data"))?;
            h.make_importlist(import_spec(), &mesh_path)?;
            let block = h.import_edge_block("edge1", "edge2", 4)?;
            let (set, _) = distribute_edges(ctx, block.clone(), &pv)?;
            h.set_edge_view("x", &set)?;
            let x: Vec<f64> = h.import_with_view("x", layout.edge_array_offset(0), 4)?;
            h.set_node_view("y", &set)?;
            let y: Vec<f64> = h.import_with_view("y", layout.node_array_offset(0), 5)?;
            h.release_importlist()?;

            h.set_node_view("p", &set)?;
            let vals: Vec<f64> = set.node_map.as_slice().iter().map(|&g| g as f64).collect();
            h.collective_write("p", 1, &vals)?;
            let back: Vec<f64> = h.collective_read("p", 1)?;
            Ok((block, x, y, back))
        })
        .unwrap();
        assert_eq!(out[0].0.edge1, vec![0, 1]);
        assert_eq!(out[0].0.edge2, vec![1, 2]);
        assert_eq!(out[1].0.first, 2);
        assert_eq!(out[0].1, vec![0.0, 2.0]);
        let y = |g: f64| 1e6 + g;
        assert_eq!(out[0].2, vec![y(0.0), y(3.0), y(1.0)]);
        assert_eq!(out[1].2, vec![y(1.0), y(2.0), y(4.0), y(0.0)]);
        assert_eq!(out[0].3, vec![0.0, 3.0, 1.0]);
        let bytes = fs::read(dir.path().join("data/G0.dat")).unwrap();
        assert_eq!(decode::<f64>(&bytes), vec![0.0, 1.0, 2.0, 3.0, 4.0]);
        let rec = cat.get_offset("p", 1).unwrap().unwrap();
        assert_eq!((rec.byte_offset, rec.byte_length), (0, 40));
    }

    #[test]
    fn l3_packs_regions_in_write_order() {
        let dir = tempfile::tempdir().unwrap();
        let (cat, _) = worked_setup(dir.path(), FileOrgLevel::L3);
        run_ranks(1, |ctx| {
            let mut h = DataHandle::new(ctx, Some(cat.clone()), dir.path().join("data"))?;
            h.set_data_view("p", MapArray::identity(5), 5)?;
            h.set_data_view("q", MapArray::identity(5), 5)?;
            for t in 1..=2 {
                h.collective_write("p", t, &[1.0; 5])?;
                h.collective_write("q", t, &[2.0; 5])?;
            }
            Ok(())
        })
        .unwrap();
        let offs: Vec<_> = cat
            .executions()
            .unwrap()
            .iter()
            .map(|e| (e.dataset.clone(), e.timestep, e.byte_offset))
            .collect();
        assert_eq!(
            offs,
            vec![
                ("p".to_string(), 1, 0),
                ("q".to_string(), 1, 40),
                ("p".to_string(), 2, 80),
                ("q".to_string(), 2, 120)
            ]
        );
        assert_eq!(fs::metadata(dir.path().join("data/G0.dat")).unwrap().len(), 160);
    }

    #[test]
    fn identity_write_is_verbatim() {
        let dir = tempfile::tempdir().unwrap();
        let (cat, _) = worked_setup(dir.path(), FileOrgLevel::L1);
        let vals = [9.5, -1.0, 3.25, 0.0, 7.0];
        run_ranks(1, |ctx| {
            let mut h = DataHandle::new(ctx, Some(cat.clone()), dir.path().join("data"))?;
            h.set_data_view("p", MapArray::identity(5), 5)?;
            h.collective_write("p", 1, &vals)?;
            let back: Vec<f64> = h.collective_read("p", 1)?;
            assert_eq!(back, vals);
            Ok(())
        })
        .unwrap();
        assert_eq!(fs::read(dir.path().join("data/G0_p_t1.dat")).unwrap(), encode(&vals));
    }

    #[test]
    fn view_and_buffer_errors() {
        let dir = tempfile::tempdir().unwrap();
        let (cat, _) = worked_setup(dir.path(), FileOrgLevel::L2);
        run_ranks(1, |ctx| {
            let mut h = DataHandle::new(ctx, Some(cat.clone()), dir.path().join("data"))?;
            let bad = MapArray::new(vec![7], 10)?;
            assert!(matches!(h.set_data_view("p", bad, 1), Err(SdmError::Validation(_))));
            assert!(matches!(h.collective_write("p", 1, &[0.0; 5]), Err(SdmError::State(_))));
            h.set_data_view("p", MapArray::identity(5), 5)?;
            assert!(matches!(h.collective_write("p", 1, &[0.0; 4]), Err(SdmError::Validation(_))));
            assert!(matches!(h.collective_write("p", 1, &[0i32; 5]), Err(SdmError::Validation(_))));
            assert!(matches!(h.collective_read::<f64>("p", 3), Err(SdmError::NotFound(_))));
            assert!(matches!(
                h.set_data_view("nope", MapArray::identity(1), 1),
                Err(SdmError::NotFound(_))
            ));
            Ok(())
        })
        .unwrap();
    }

    #[test]
    fn overlapping_ownership_rejected_on_all_ranks() {
        let dir = tempfile::tempdir().unwrap();
        let (cat, _) = worked_setup(dir.path(), FileOrgLevel::L1);
        let err = run_ranks(2, |ctx| {
            let mut h = DataHandle::new(ctx, ctx.is_root().then(|| cat.clone()), dir.path().join("data"))?;
            h.set_data_view("p", MapArray::identity(5), 5)?;
            h.collective_write("p", 1, &[1.0; 5])
        })
        .unwrap_err();
        assert!(matches!(err, SdmError::Validation(_)), "{err}");
    }

    #[test]
    fn import_bounds_and_release() {
        let dir = tempfile::tempdir().unwrap();
        let (cat, mesh_path) = worked_setup(dir.path(), FileOrgLevel::L1);
        run_ranks(1, |ctx| {
            let mut h = DataHandle::new(ctx, Some(cat.clone()), dir.path().join("data"))?;
            h.set_data_view("p", MapArray::identity(5), 5)?;
            h.make_importlist(import_spec(), &mesh_path)?;
            let all: Vec<i32> = h.import_contiguous("edge1", 0, 4)?;
            assert_eq!(all, vec![0, 1, 0, 2]);
            assert!(matches!(
                h.import_contiguous::<f64>("y", 100, 5),
                Err(SdmError::Bounds { .. })
            ));
            h.set_data_view("y", MapArray::identity(5), 5)?;
            let ident: Vec<f64> = h.import_with_view("y", 64, 5)?;
            let contiguous: Vec<f64> = h.import_contiguous("y", 64, 5)?;
            assert_eq!(ident, contiguous);
            h.release_importlist()?;
            assert!(h.view("y").is_none());
            assert!(h.view("p").is_some());
            assert!(matches!(h.import_contiguous::<i32>("edge1", 0, 4), Err(SdmError::Lifecycle(_))));
            assert!(matches!(h.release_importlist(), Err(SdmError::Lifecycle(_))));
            Ok(())
        })
        .unwrap();
    }

    #[test]
    fn nprocs_invariant_region_bytes() {
        let (mesh, _) = worked_example();
        let mut images = Vec::new();
        for n in [1, 2, 4] {
            let dir = tempfile::tempdir().unwrap();
            let cat = Catalog::initialize("demo", dir.path().join("cat"), n).unwrap();
            cat.define_group(GroupSpec::result(&["p"], DataType::Float64, 5, FileOrgLevel::L2))
                .unwrap();
            let pv = PartitioningVector::slabs(5, n);
            run_ranks(n, |ctx| {
                let mut h = DataHandle::new(ctx, ctx.is_root().then(|| cat.clone()), dir.path().join("data"))?;
                let block = mesh.block(block_range(4, ctx.rank(), n));
                let (set, _) = distribute_edges(ctx, block, &pv)?;
                h.set_node_view("p", &set)?;
                let vals: Vec<f64> = set.node_map.as_slice().iter().map(|&g| g as f64 * 1.5).collect();
                h.collective_write("p", 1, &vals)
            })
            .unwrap();
            images.push(fs::read(dir.path().join("data/G0_p.dat")).unwrap());
        }
        assert_eq!(images[0], images[1]);
        assert_eq!(images[0], images[2]);
    }
}
