//! Embedded metadata catalog.
//!
//! Six tables live as text files under the catalog root, one record per
//! line, fields written as `name=value` pairs separated by tabs:
//!
//! | file                 | records                                                         |
//! |----------------------|-----------------------------------------------------------------|
//! | `run.tbl`            | `kind=run` (run, app, nprocs, timestamp) and `kind=group` rows  |
//! | `access_pattern.tbl` | result dataset to group and file-organization level             |
//! | `execution.tbl`      | (run, dataset, timestep) to file id, byte offset, byte length   |
//! | `import.tbl`         | imported datasets with type, element count and source file      |
//! | `index.tbl`          | index-history key (nodes, edges, nprocs) and history file path  |
//! | `index_history.tbl`  | per-rank edge count, node count and section offset              |
//!
//! Mutations append a line; [`Catalog::finalize`] syncs every file. Paths
//! are stored relative to the catalog root.

use std::collections::BTreeMap;
use std::fmt;
use std::fs::{self, File, OpenOptions};
use std::io::Write;
use std::path::{Component, Path, PathBuf};
use std::str::FromStr;
use std::sync::{Arc, Mutex, MutexGuard};
use std::time::{SystemTime, UNIX_EPOCH};

use crate::error::{Result, SdmError};

pub const TABLE_NAMES: [&str; 6] = [
    "run",
    "access_pattern",
    "execution",
    "import",
    "index",
    "index_history",
];

const RUN: usize = 0;
const ACCESS_PATTERN: usize = 1;
const EXECUTION: usize = 2;
const IMPORT: usize = 3;
const INDEX: usize = 4;
const INDEX_HISTORY: usize = 5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum DataType {
    Int32,
    Float64,
}

impl DataType {
    pub fn size(self) -> usize {
        match self {
            DataType::Int32 => 4,
            DataType::Float64 => 8,
        }
    }
}

impl fmt::Display for DataType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            DataType::Int32 => "INT32",
            DataType::Float64 => "FLOAT64",
        })
    }
}

impl FromStr for DataType {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "INT32" => Ok(DataType::Int32),
            "FLOAT64" => Ok(DataType::Float64),
            _ => Err(format!("unknown data type {s:?}")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum GroupKind {
    Result,
    Import,
}

/// How a result group's datasets are laid out in files.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum FileOrgLevel {
    /// One file per dataset per timestep.
    L1,
    /// One file per dataset, timesteps appended.
    L2,
    /// One file per group.
    L3,
}

impl FileOrgLevel {
    pub const ALL: [FileOrgLevel; 3] = [FileOrgLevel::L1, FileOrgLevel::L2, FileOrgLevel::L3];

    pub fn number(self) -> u8 {
        match self {
            FileOrgLevel::L1 => 1,
            FileOrgLevel::L2 => 2,
            FileOrgLevel::L3 => 3,
        }
    }

    pub fn from_number(n: u8) -> Option<Self> {
        match n {
            1 => Some(FileOrgLevel::L1),
            2 => Some(FileOrgLevel::L2),
            3 => Some(FileOrgLevel::L3),
            _ => None,
        }
    }
}

impl fmt::Display for FileOrgLevel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.number())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DatasetSpec {
    pub name: String,
    pub data_type: DataType,
    pub global_count: usize,
}

impl DatasetSpec {
    pub fn byte_len(&self) -> u64 {
        (self.global_count * self.data_type.size()) as u64
    }
}

/// A persisted data group.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DataGroupDescriptor {
    pub group_id: u32,
    pub kind: GroupKind,
    /// Set for result groups only.
    pub org_level: Option<FileOrgLevel>,
    pub datasets: Vec<DatasetSpec>,
    /// Raw file the datasets of an import group are read from.
    pub source: Option<PathBuf>,
}

impl DataGroupDescriptor {
    /// Name used in data file names, e.g. `G0`.
    pub fn label(&self) -> String {
        format!("G{}", self.group_id)
    }

    pub fn names(&self) -> Vec<&str> {
        self.datasets.iter().map(|d| d.name.as_str()).collect()
    }

    pub fn dataset(&self, name: &str) -> Option<&DatasetSpec> {
        self.datasets.iter().find(|d| d.name == name)
    }
}

/// Builder for [`Catalog::define_group`]. Result groups share one type and
/// size; import groups may override both per dataset.
#[derive(Debug, Clone)]
pub struct GroupSpec {
    names: Vec<String>,
    data_type: DataType,
    global_count: usize,
    kind: GroupKind,
    org_level: Option<FileOrgLevel>,
    overrides: BTreeMap<String, (DataType, usize)>,
    source: Option<PathBuf>,
}

impl GroupSpec {
    pub fn result<S: AsRef<str>>(names: &[S], data_type: DataType, global_count: usize, level: FileOrgLevel) -> Self {
        GroupSpec {
            names: names.iter().map(|s| s.as_ref().to_string()).collect(),
            data_type,
            global_count,
            kind: GroupKind::Result,
            org_level: Some(level),
            overrides: BTreeMap::new(),
            source: None,
        }
    }

    pub fn import<S: AsRef<str>>(names: &[S], data_type: DataType, global_count: usize) -> Self {
        GroupSpec {
            names: names.iter().map(|s| s.as_ref().to_string()).collect(),
            data_type,
            global_count,
            kind: GroupKind::Import,
            org_level: None,
            overrides: BTreeMap::new(),
            source: None,
        }
    }

    /// Per-dataset type and element count (import groups only).
    pub fn with_attributes(mut self, name: &str, data_type: DataType, global_count: usize) -> Self {
        self.overrides.insert(name.to_string(), (data_type, global_count));
        self
    }

    pub fn with_source(mut self, path: impl Into<PathBuf>) -> Self {
        self.source = Some(path.into());
        self
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ExecutionRecord {
    pub run: u64,
    pub dataset: String,
    pub timestep: u64,
    pub file_id: String,
    pub byte_offset: u64,
    pub byte_length: u64,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IndexHistoryRecord {
    pub total_nodes: usize,
    pub total_edges: usize,
    pub nprocs: usize,
    /// Relative to the catalog root unless absolute.
    pub history_path: PathBuf,
    pub per_rank_edge_counts: Vec<usize>,
    pub per_rank_node_counts: Vec<usize>,
    pub per_rank_byte_offsets: Vec<u64>,
}

impl IndexHistoryRecord {
    pub fn key(&self) -> (usize, usize, usize) {
        (self.total_nodes, self.total_edges, self.nprocs)
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.nprocs;
        if n == 0 {
            return Err(SdmError::Validation("history record with nprocs 0".into()));
        }
        for (what, len) in [
            ("per_rank_edge_counts", self.per_rank_edge_counts.len()),
            ("per_rank_node_counts", self.per_rank_node_counts.len()),
            ("per_rank_byte_offsets", self.per_rank_byte_offsets.len()),
        ] {
            if len != n {
                return Err(SdmError::Validation(format!("{what} has {len} entries, expected {n}")));
            }
        }
        let held: usize = self.per_rank_edge_counts.iter().sum();
        if held < self.total_edges {
            return Err(SdmError::Validation(format!(
                "ranks hold {held} edges in total, fewer than the mesh's {}",
                self.total_edges
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RunRecord {
    pub run: u64,
    pub app: String,
    pub nprocs: usize,
    pub timestamp: u64,
}

/// A history file write that [`Catalog::finalize`] must wait for.
pub trait PendingWrite: Send + Sync {
    fn wait(&self) -> Result<()>;
}

type Row = Vec<(String, String)>;

struct Table {
    path: PathBuf,
    rows: Vec<Row>,
}

impl Table {
    fn open(path: PathBuf) -> Result<Self> {
        if !path.exists() {
            File::create(&path).map_err(|e| SdmError::io(&path, e))?;
            return Ok(Table { path, rows: Vec::new() });
        }
        let text = fs::read(&path).map_err(|e| SdmError::io(&path, e))?;
        let text = String::from_utf8(text).map_err(|_| SdmError::CatalogCorrupt {
            file: path.clone(),
            line: 0,
            reason: "not valid UTF-8".into(),
        })?;
        if !text.is_empty() && !text.ends_with('\n') {
            return Err(SdmError::CatalogCorrupt {
                file: path.clone(),
                line: text.lines().count(),
                reason: "last record is truncated".into(),
            });
        }
        let mut rows = Vec::new();
        for (i, line) in text.lines().enumerate() {
            let row = parse_line(line).map_err(|reason| SdmError::CatalogCorrupt {
                file: path.clone(),
                line: i + 1,
                reason,
            })?;
            rows.push(row);
        }
        Ok(Table { path, rows })
    }

    fn append(&mut self, row: Row) -> Result<()> {
        let mut line = format_row(&row);
        line.push('\n');
        let mut f = OpenOptions::new()
            .append(true)
            .open(&self.path)
            .map_err(|e| SdmError::io(&self.path, e))?;
        f.write_all(line.as_bytes()).map_err(|e| SdmError::io(&self.path, e))?;
        self.rows.push(row);
        Ok(())
    }

    fn sync(&self) -> Result<()> {
        File::open(&self.path)
            .and_then(|f| f.sync_all())
            .map_err(|e| SdmError::io(&self.path, e))
    }
}

fn parse_line(line: &str) -> Result<Row, String> {
    if line.is_empty() {
        return Err("empty record".into());
    }
    line.split('\t')
        .map(|field| {
            field
                .split_once('=')
                .map(|(k, v)| (k.to_string(), v.to_string()))
                .ok_or_else(|| format!("field {field:?} has no '='"))
        })
        .collect()
}

fn format_row(row: &Row) -> String {
    row.iter()
        .map(|(k, v)| format!("{k}={v}"))
        .collect::<Vec<_>>()
        .join("\t")
}

fn row<const N: usize>(fields: [(&str, String); N]) -> Row {
    fields.into_iter().map(|(k, v)| (k.to_string(), v)).collect()
}

struct Fields<'a> {
    row: &'a Row,
}

impl Fields<'_> {
    fn get(&self, key: &str) -> Result<&str, String> {
        self.row
            .iter()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_str())
            .ok_or_else(|| format!("missing field {key:?}"))
    }

    fn parse<T: FromStr>(&self, key: &str) -> Result<T, String> {
        let v = self.get(key)?;
        v.parse().map_err(|_| format!("field {key}={v:?} is malformed"))
    }
}

fn check_text(what: &str, s: &str) -> Result<()> {
    if s.is_empty() || s.contains(['\t', '\n', '\r', ',', '=']) {
        return Err(SdmError::Validation(format!(
            "{what} {s:?} must be non-empty and free of tabs, newlines, ',' and '='"
        )));
    }
    Ok(())
}

fn path_text(p: &Path) -> Result<String> {
    let s = p.to_string_lossy().into_owned();
    if s.contains(['\t', '\n', '\r']) {
        return Err(SdmError::Validation(format!("path {s:?} contains tabs or newlines")));
    }
    Ok(s)
}

fn absolute(p: &Path) -> PathBuf {
    let p = if p.is_absolute() {
        p.to_path_buf()
    } else {
        std::env::current_dir().unwrap_or_default().join(p)
    };
    let mut out = PathBuf::new();
    for c in p.components() {
        match c {
            Component::CurDir => {}
            Component::ParentDir => {
                out.pop();
            }
            other => out.push(other),
        }
    }
    out
}

/// Lexical path of `path` relative to `base`.
pub(crate) fn relative_to(path: &Path, base: &Path) -> PathBuf {
    let path = absolute(path);
    let base = absolute(base);
    let pc: Vec<_> = path.components().collect();
    let bc: Vec<_> = base.components().collect();
    let common = pc.iter().zip(&bc).take_while(|(a, b)| a == b).count();
    let mut out = PathBuf::new();
    for _ in common..bc.len() {
        out.push("..");
    }
    for c in &pc[common..] {
        out.push(c);
    }
    if out.as_os_str().is_empty() {
        out.push(".");
    }
    out
}

struct State {
    finalized: bool,
    tables: Vec<Table>,
    runs: Vec<RunRecord>,
    groups: Vec<(u64, DataGroupDescriptor)>,
    executions: Vec<ExecutionRecord>,
    histories: Vec<IndexHistoryRecord>,
}

struct Inner {
    root: PathBuf,
    app: String,
    run: u64,
    nprocs: usize,
    state: Mutex<State>,
    pending: Mutex<Option<Arc<dyn PendingWrite>>>,
}

/// Handle to an opened catalog. Clones share the same state; the handle
/// belongs to rank 0 of a job.
#[derive(Clone)]
pub struct Catalog {
    inner: Arc<Inner>,
}

impl fmt::Debug for Catalog {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Catalog")
            .field("root", &self.inner.root)
            .field("app", &self.inner.app)
            .field("run", &self.inner.run)
            .finish()
    }
}

impl Catalog {
    /// Opens (or creates) the catalog under `root_dir` and records a new run.
    pub fn initialize(app_name: &str, root_dir: impl AsRef<Path>, nprocs: usize) -> Result<Catalog> {
        Self::initialize_at(app_name, root_dir, nprocs, None)
    }

    /// Like [`Catalog::initialize`] but with a fixed run timestamp.
    pub fn initialize_at(
        app_name: &str,
        root_dir: impl AsRef<Path>,
        nprocs: usize,
        timestamp: Option<u64>,
    ) -> Result<Catalog> {
        check_text("application name", app_name)?;
        if nprocs == 0 {
            return Err(SdmError::Validation("nprocs must be at least 1".into()));
        }
        let root = root_dir.as_ref().to_path_buf();
        fs::create_dir_all(&root).map_err(|e| SdmError::Init {
            path: root.clone(),
            source: e,
        })?;
        let probe = root.join(".sdm-probe");
        fs::write(&probe, b"")
            .and_then(|_| fs::remove_file(&probe))
            .map_err(|e| SdmError::Init {
                path: root.clone(),
                source: e,
            })?;

        let mut tables = Vec::with_capacity(TABLE_NAMES.len());
        for name in TABLE_NAMES {
            tables.push(Table::open(root.join(format!("{name}.tbl")))?);
        }
        let mut state = State {
            finalized: false,
            tables,
            runs: Vec::new(),
            groups: Vec::new(),
            executions: Vec::new(),
            histories: Vec::new(),
        };
        load(&mut state)?;

        let run = state.runs.iter().map(|r| r.run).max().unwrap_or(0) + 1;
        let timestamp = timestamp.unwrap_or_else(|| {
            SystemTime::now()
                .duration_since(UNIX_EPOCH)
                .map(|d| d.as_secs())
                .unwrap_or(0)
        });
        let record = RunRecord {
            run,
            app: app_name.to_string(),
            nprocs,
            timestamp,
        };
        state.tables[RUN].append(row([
            ("kind", "run".into()),
            ("run", run.to_string()),
            ("app", record.app.clone()),
            ("nprocs", nprocs.to_string()),
            ("timestamp", timestamp.to_string()),
        ]))?;
        state.runs.push(record);

        Ok(Catalog {
            inner: Arc::new(Inner {
                root,
                app: app_name.to_string(),
                run,
                nprocs,
                state: Mutex::new(state),
                pending: Mutex::new(None),
            }),
        })
    }

    pub fn root(&self) -> &Path {
        &self.inner.root
    }

    pub fn app_name(&self) -> &str {
        &self.inner.app
    }

    pub fn run(&self) -> u64 {
        self.inner.run
    }

    pub fn nprocs(&self) -> usize {
        self.inner.nprocs
    }

    fn state(&self) -> Result<MutexGuard<'_, State>> {
        let st = self.inner.state.lock().unwrap_or_else(|e| e.into_inner());
        if st.finalized {
            return Err(SdmError::Lifecycle("catalog has been finalized".into()));
        }
        Ok(st)
    }

    /// Stores `path` the way catalog rows reference files.
    pub fn stored_path(&self, path: &Path) -> PathBuf {
        relative_to(path, &self.inner.root)
    }

    /// Resolves a stored path against the catalog root.
    pub fn resolve_path(&self, stored: &Path) -> PathBuf {
        if stored.is_absolute() {
            stored.to_path_buf()
        } else {
            self.inner.root.join(stored)
        }
    }

    pub fn define_group(&self, spec: GroupSpec) -> Result<DataGroupDescriptor> {
        let mut st = self.state()?;
        let run = self.inner.run;
        if spec.names.is_empty() {
            return Err(SdmError::Validation("a data group needs at least one dataset".into()));
        }
        if spec.kind == GroupKind::Result && !spec.overrides.is_empty() {
            return Err(SdmError::Validation(
                "datasets of a result group share one type and size".into(),
            ));
        }
        for (i, name) in spec.names.iter().enumerate() {
            check_text("dataset name", name)?;
            if spec.names[..i].contains(name) {
                return Err(SdmError::Conflict(format!("dataset {name:?} listed twice")));
            }
            if st
                .groups
                .iter()
                .any(|(r, g)| *r == run && g.dataset(name).is_some())
            {
                return Err(SdmError::Conflict(format!(
                    "dataset {name:?} is already defined in run {run}"
                )));
            }
        }
        if let Some(unknown) = spec.overrides.keys().find(|k| !spec.names.contains(k)) {
            return Err(SdmError::Validation(format!("attributes given for unknown dataset {unknown:?}")));
        }

        let group_id = st.groups.iter().filter(|(r, _)| *r == run).count() as u32;
        let datasets: Vec<DatasetSpec> = spec
            .names
            .iter()
            .map(|name| {
                let (data_type, global_count) = spec
                    .overrides
                    .get(name)
                    .copied()
                    .unwrap_or((spec.data_type, spec.global_count));
                DatasetSpec {
                    name: name.clone(),
                    data_type,
                    global_count,
                }
            })
            .collect();
        let source = spec.source.as_ref().map(|p| self.stored_path(p));
        let group = DataGroupDescriptor {
            group_id,
            kind: spec.kind,
            org_level: spec.org_level,
            datasets,
            source,
        };

        match group.kind {
            GroupKind::Result => {
                let level = group.org_level.expect("result group has a level");
                st.tables[RUN].append(row([
                    ("kind", "group".into()),
                    ("run", run.to_string()),
                    ("group", group_id.to_string()),
                    ("names", spec.names.join(",")),
                    ("data_type", spec.data_type.to_string()),
                    ("global_count", spec.global_count.to_string()),
                    ("org_level", level.to_string()),
                ]))?;
                for d in &group.datasets {
                    st.tables[ACCESS_PATTERN].append(row([
                        ("run", run.to_string()),
                        ("group", group_id.to_string()),
                        ("dataset", d.name.clone()),
                        ("org_level", level.to_string()),
                    ]))?;
                }
            }
            GroupKind::Import => {
                let source = match &group.source {
                    Some(p) => path_text(p)?,
                    None => String::new(),
                };
                for d in &group.datasets {
                    st.tables[IMPORT].append(row([
                        ("run", run.to_string()),
                        ("group", group_id.to_string()),
                        ("dataset", d.name.clone()),
                        ("data_type", d.data_type.to_string()),
                        ("global_count", d.global_count.to_string()),
                        ("source", source.clone()),
                    ]))?;
                }
            }
        }
        st.groups.push((run, group.clone()));
        Ok(group)
    }

    /// Groups defined in the current run, in definition order.
    pub fn groups(&self) -> Result<Vec<DataGroupDescriptor>> {
        let st = self.state()?;
        Ok(st
            .groups
            .iter()
            .filter(|(r, _)| *r == self.inner.run)
            .map(|(_, g)| g.clone())
            .collect())
    }

    pub fn runs(&self) -> Result<Vec<RunRecord>> {
        Ok(self.state()?.runs.clone())
    }

    pub fn record_offset(
        &self,
        dataset: &str,
        timestep: u64,
        file_id: &str,
        byte_offset: u64,
        byte_length: u64,
    ) -> Result<()> {
        let mut st = self.state()?;
        let run = self.inner.run;
        if timestep == 0 {
            return Err(SdmError::Validation("timesteps start at 1".into()));
        }
        check_text("dataset name", dataset)?;
        if file_id.is_empty() || file_id.contains(['\t', '\n', '\r', '=']) {
            return Err(SdmError::Validation(format!("bad file id {file_id:?}")));
        }
        if st
            .executions
            .iter()
            .any(|e| e.run == run && e.dataset == dataset && e.timestep == timestep)
        {
            return Err(SdmError::Conflict(format!(
                "offset for {dataset} at timestep {timestep} already recorded in run {run}"
            )));
        }
        let end = byte_offset + byte_length;
        if let Some(o) = st.executions.iter().find(|e| {
            e.run == run
                && e.file_id == file_id
                && byte_length > 0
                && e.byte_length > 0
                && byte_offset < e.byte_offset + e.byte_length
                && e.byte_offset < end
        }) {
            return Err(SdmError::Conflict(format!(
                "bytes [{byte_offset}, {end}) of {file_id} overlap {} timestep {}",
                o.dataset, o.timestep
            )));
        }
        let record = ExecutionRecord {
            run,
            dataset: dataset.to_string(),
            timestep,
            file_id: file_id.to_string(),
            byte_offset,
            byte_length,
        };
        st.tables[EXECUTION].append(execution_row(&record))?;
        st.executions.push(record);
        Ok(())
    }

    /// The most recent run's record for `(dataset, timestep)`.
    pub fn get_offset(&self, dataset: &str, timestep: u64) -> Result<Option<ExecutionRecord>> {
        let st = self.state()?;
        Ok(st
            .executions
            .iter()
            .filter(|e| e.dataset == dataset && e.timestep == timestep)
            .max_by_key(|e| e.run)
            .cloned())
    }

    /// End of the last region recorded in `file_id` during this run.
    pub fn file_end(&self, file_id: &str) -> Result<Option<u64>> {
        let st = self.state()?;
        Ok(st
            .executions
            .iter()
            .filter(|e| e.run == self.inner.run && e.file_id == file_id)
            .map(|e| e.byte_offset + e.byte_length)
            .max())
    }

    pub fn executions(&self) -> Result<Vec<ExecutionRecord>> {
        Ok(self.state()?.executions.clone())
    }

    pub fn lookup_index_history(
        &self,
        total_nodes: usize,
        total_edges: usize,
        nprocs: usize,
    ) -> Result<Option<IndexHistoryRecord>> {
        let st = self.state()?;
        Ok(st
            .histories
            .iter()
            .find(|h| h.key() == (total_nodes, total_edges, nprocs))
            .cloned())
    }

    pub fn index_histories(&self) -> Result<Vec<IndexHistoryRecord>> {
        Ok(self.state()?.histories.clone())
    }

    pub fn insert_index_history(&self, record: IndexHistoryRecord) -> Result<()> {
        record.validate()?;
        let mut st = self.state()?;
        if st.histories.iter().any(|h| h.key() == record.key()) {
            return Err(SdmError::Conflict(format!(
                "an index history for nodes={} edges={} nprocs={} already exists",
                record.total_nodes, record.total_edges, record.nprocs
            )));
        }
        let history_id = st.histories.len();
        let path = path_text(&record.history_path)?;
        st.tables[INDEX].append(row([
            ("history_id", history_id.to_string()),
            ("total_nodes", record.total_nodes.to_string()),
            ("total_edges", record.total_edges.to_string()),
            ("nprocs", record.nprocs.to_string()),
            ("history_path", path),
        ]))?;
        for rank in 0..record.nprocs {
            st.tables[INDEX_HISTORY].append(row([
                ("history_id", history_id.to_string()),
                ("rank", rank.to_string()),
                ("edge_count", record.per_rank_edge_counts[rank].to_string()),
                ("node_count", record.per_rank_node_counts[rank].to_string()),
                ("byte_offset", record.per_rank_byte_offsets[rank].to_string()),
            ]))?;
        }
        st.histories.push(record);
        Ok(())
    }

    /// Registers the single outstanding history write of this handle.
    pub fn set_pending(&self, pending: Arc<dyn PendingWrite>) -> Result<()> {
        drop(self.state()?);
        let mut slot = self.inner.pending.lock().unwrap_or_else(|e| e.into_inner());
        if let Some(prev) = slot.take() {
            prev.wait()?;
        }
        *slot = Some(pending);
        Ok(())
    }

    /// Waits for any outstanding history write.
    pub fn wait_pending(&self) -> Result<()> {
        let pending = self
            .inner
            .pending
            .lock()
            .unwrap_or_else(|e| e.into_inner())
            .take();
        match pending {
            Some(p) => p.wait(),
            None => Ok(()),
        }
    }

    /// Waits for outstanding history writes, syncs every table and closes
    /// the handle (and all of its clones).
    pub fn finalize(&self) -> Result<()> {
        drop(self.state()?);
        self.wait_pending()?;
        let mut st = self.state()?;
        for t in &st.tables {
            t.sync()?;
        }
        st.finalized = true;
        Ok(())
    }

    pub fn is_finalized(&self) -> bool {
        self.inner
            .state
            .lock()
            .unwrap_or_else(|e| e.into_inner())
            .finalized
    }
}

fn execution_row(e: &ExecutionRecord) -> Row {
    row([
        ("run", e.run.to_string()),
        ("dataset", e.dataset.clone()),
        ("timestep", e.timestep.to_string()),
        ("file_id", e.file_id.clone()),
        ("byte_offset", e.byte_offset.to_string()),
        ("byte_length", e.byte_length.to_string()),
    ])
}

fn load(st: &mut State) -> Result<()> {
    fn corrupt(t: &Table, line: usize, reason: String) -> SdmError {
        SdmError::CatalogCorrupt {
            file: t.path.clone(),
            line: line + 1,
            reason,
        }
    }

    let t = &st.tables[RUN];
    let mut access: BTreeMap<(u64, u32), FileOrgLevel> = BTreeMap::new();
    for (i, r) in st.tables[ACCESS_PATTERN].rows.iter().enumerate() {
        let f = Fields { row: r };
        let parsed: Result<_, String> = (|| {
            let level: u8 = f.parse("org_level")?;
            let level = FileOrgLevel::from_number(level).ok_or("org_level must be 1, 2 or 3")?;
            Ok(((f.parse("run")?, f.parse("group")?), level))
        })();
        let (key, level) = parsed.map_err(|e| corrupt(&st.tables[ACCESS_PATTERN], i, e))?;
        access.insert(key, level);
    }
    for (i, r) in t.rows.iter().enumerate() {
        let f = Fields { row: r };
        let kind = f.get("kind").map_err(|e| corrupt(t, i, e))?;
        match kind {
            "run" => {
                let rec: Result<_, String> = (|| {
                    Ok(RunRecord {
                        run: f.parse("run")?,
                        app: f.get("app")?.to_string(),
                        nprocs: f.parse("nprocs")?,
                        timestamp: f.parse("timestamp")?,
                    })
                })();
                st.runs.push(rec.map_err(|e| corrupt(t, i, e))?);
            }
            "group" => {
                let rec: Result<_, String> = (|| {
                    let run: u64 = f.parse("run")?;
                    let group_id: u32 = f.parse("group")?;
                    let data_type: DataType = f.get("data_type")?.parse()?;
                    let global_count: usize = f.parse("global_count")?;
                    let level: u8 = f.parse("org_level")?;
                    let level = FileOrgLevel::from_number(level).ok_or("org_level must be 1, 2 or 3")?;
                    if access.get(&(run, group_id)).is_some_and(|l| *l != level) {
                        return Err("access_pattern level disagrees with run table".to_string());
                    }
                    let datasets = f
                        .get("names")?
                        .split(',')
                        .map(|n| DatasetSpec {
                            name: n.to_string(),
                            data_type,
                            global_count,
                        })
                        .collect();
                    Ok((
                        run,
                        DataGroupDescriptor {
                            group_id,
                            kind: GroupKind::Result,
                            org_level: Some(level),
                            datasets,
                            source: None,
                        },
                    ))
                })();
                st.groups.push(rec.map_err(|e| corrupt(t, i, e))?);
            }
            other => return Err(corrupt(t, i, format!("unknown record kind {other:?}"))),
        }
    }

    let t = &st.tables[IMPORT];
    for (i, r) in t.rows.iter().enumerate() {
        let f = Fields { row: r };
        let rec: Result<_, String> = (|| {
            let run: u64 = f.parse("run")?;
            let group_id: u32 = f.parse("group")?;
            let spec = DatasetSpec {
                name: f.get("dataset")?.to_string(),
                data_type: f.get("data_type")?.parse()?,
                global_count: f.parse("global_count")?,
            };
            let source = f.get("source")?;
            Ok((run, group_id, spec, (!source.is_empty()).then(|| PathBuf::from(source))))
        })();
        let (run, group_id, spec, source) = rec.map_err(|e| corrupt(t, i, e))?;
        match st
            .groups
            .iter_mut()
            .find(|(r, g)| *r == run && g.group_id == group_id && g.kind == GroupKind::Import)
        {
            Some((_, g)) => g.datasets.push(spec),
            None => st.groups.push((
                run,
                DataGroupDescriptor {
                    group_id,
                    kind: GroupKind::Import,
                    org_level: None,
                    datasets: vec![spec],
                    source,
                },
            )),
        }
    }
    st.groups.sort_by_key(|(r, g)| (*r, g.group_id));

    let t = &st.tables[EXECUTION];
    for (i, r) in t.rows.iter().enumerate() {
        let f = Fields { row: r };
        let rec: Result<_, String> = (|| {
            Ok(ExecutionRecord {
                run: f.parse("run")?,
                dataset: f.get("dataset")?.to_string(),
                timestep: f.parse("timestep")?,
                file_id: f.get("file_id")?.to_string(),
                byte_offset: f.parse("byte_offset")?,
                byte_length: f.parse("byte_length")?,
            })
        })();
        st.executions.push(rec.map_err(|e| corrupt(t, i, e))?);
    }

    let t = &st.tables[INDEX_HISTORY];
    let mut per_rank: BTreeMap<usize, Vec<(usize, usize, usize, u64)>> = BTreeMap::new();
    for (i, r) in t.rows.iter().enumerate() {
        let f = Fields { row: r };
        let rec: Result<_, String> = (|| {
            Ok((
                f.parse::<usize>("history_id")?,
                (
                    f.parse("rank")?,
                    f.parse("edge_count")?,
                    f.parse("node_count")?,
                    f.parse("byte_offset")?,
                ),
            ))
        })();
        let (id, entry) = rec.map_err(|e| corrupt(t, i, e))?;
        per_rank.entry(id).or_default().push(entry);
    }
    let t = &st.tables[INDEX];
    for (i, r) in t.rows.iter().enumerate() {
        let f = Fields { row: r };
        let rec: Result<_, String> = (|| {
            let id: usize = f.parse("history_id")?;
            let nprocs: usize = f.parse("nprocs")?;
            let mut ranks = per_rank.remove(&id).unwrap_or_default();
            ranks.sort_by_key(|e| e.0);
            if ranks.len() != nprocs || ranks.iter().enumerate().any(|(k, e)| e.0 != k) {
                return Err(format!("index_history rows for history {id} do not cover {nprocs} ranks"));
            }
            Ok(IndexHistoryRecord {
                total_nodes: f.parse("total_nodes")?,
                total_edges: f.parse("total_edges")?,
                nprocs,
                history_path: PathBuf::from(f.get("history_path")?),
                per_rank_edge_counts: ranks.iter().map(|e| e.1).collect(),
                per_rank_node_counts: ranks.iter().map(|e| e.2).collect(),
                per_rank_byte_offsets: ranks.iter().map(|e| e.3).collect(),
            })
        })();
        st.histories.push(rec.map_err(|e| corrupt(t, i, e))?);
    }
    Ok(())
}

/// Text dump of all six tables. With `normalize`, run timestamps are
/// replaced by `0` so dumps of identical runs compare equal.
pub fn dump(root: &Path, normalize: bool) -> Result<String> {
    let mut out = String::new();
    for name in TABLE_NAMES {
        let path = root.join(format!("{name}.tbl"));
        let table = Table::open_existing(&path)?;
        out.push_str(&format!("# {name} ({} records)\n", table.rows.len()));
        for r in &table.rows {
            let r: Row = r
                .iter()
                .map(|(k, v)| {
                    if normalize && k == "timestamp" {
                        (k.clone(), "0".to_string())
                    } else {
                        (k.clone(), v.clone())
                    }
                })
                .collect();
            out.push_str(&format_row(&r));
            out.push('\n');
        }
    }
    Ok(out)
}

impl Table {
    fn open_existing(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(SdmError::NotFound(format!("catalog table {}", path.display())));
        }
        Table::open(path.to_path_buf())
    }
}
