//! Mesh and workload generators.
//!
//! All data values are pure functions of indices so any run can be checked
//! against a sequential recomputation:
//!
//! * imported array `j`, element `i`: `import_value(j, i) = j * 1e6 + i`
//! * result dataset `d` (position in the workload's dataset list), timestep
//!   `t`, element `i`: `result_value(d, t, i) = t * 1e6 + d * 1e4 + i / 8`

use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::catalog::FileOrgLevel;
use crate::dataio::{encode, MeshFileLayout};
use crate::error::{Result, SdmError};
use crate::partition::{EdgeList, PartitioningVector};

/// The five-node, four-edge mesh with its two-rank partitioning vector.
/// Nodes 0 and 3 belong to rank 0, nodes 1, 2 and 4 to rank 1; edges are
/// (0,1), (1,2), (0,3), (2,4).
pub fn worked_example() -> (EdgeList, PartitioningVector) {
    let mesh = EdgeList::from_pairs(&[(0, 1), (1, 2), (0, 3), (2, 4)]);
    let pv = PartitioningVector::new(vec![0, 1, 1, 0, 1], 2).expect("valid vector");
    (mesh, pv)
}

pub fn import_value(array: usize, index: usize) -> f64 {
    (array * 1_000_000 + index) as f64
}

pub fn result_value(dataset: usize, timestep: u64, index: usize) -> f64 {
    timestep as f64 * 1e6 + dataset as f64 * 1e4 + index as f64 / 8.0
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum WorkloadKind {
    Fun3dLike,
    RtLike,
    WorkedExample,
}

impl WorkloadKind {
    pub fn name(self) -> &'static str {
        match self {
            WorkloadKind::Fun3dLike => "fun3d",
            WorkloadKind::RtLike => "rt",
            WorkloadKind::WorkedExample => "worked-example",
        }
    }

    pub fn default_scale(self) -> usize {
        match self {
            WorkloadKind::Fun3dLike => 2000,
            WorkloadKind::RtLike => 1000,
            WorkloadKind::WorkedExample => 5,
        }
    }

    pub fn default_timesteps(self) -> u64 {
        match self {
            WorkloadKind::Fun3dLike => 2,
            WorkloadKind::RtLike => 5,
            WorkloadKind::WorkedExample => 2,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct WorkloadSpec {
    pub kind: WorkloadKind,
    /// Approximate node count; ignored by the worked example.
    pub scale: usize,
    pub timesteps: u64,
    pub level: FileOrgLevel,
    pub nprocs: usize,
    pub seed: u64,
}

impl WorkloadSpec {
    pub fn new(kind: WorkloadKind, level: FileOrgLevel, nprocs: usize) -> Self {
        WorkloadSpec {
            kind,
            scale: kind.default_scale(),
            timesteps: kind.default_timesteps(),
            level,
            nprocs,
            seed: 7,
        }
    }
}

/// How a result dataset maps onto mesh entities.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ResultShape {
    /// `components` values per node, written through the node map.
    Nodes { components: usize },
    /// One value per triangle, written in contiguous blocks.
    Triangles,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ResultGroupPlan {
    pub names: Vec<String>,
    pub shape: ResultShape,
}

/// A generated workload, independent of where its files live.
#[derive(Debug, Clone, PartialEq)]
pub struct Workload {
    pub kind: WorkloadKind,
    pub mesh: EdgeList,
    pub total_nodes: usize,
    pub triangles: usize,
    pub edge_arrays: Vec<String>,
    pub node_arrays: Vec<String>,
    pub result_groups: Vec<ResultGroupPlan>,
    pub timesteps: u64,
}

impl Workload {
    pub fn layout(&self) -> MeshFileLayout {
        MeshFileLayout {
            total_edges: self.mesh.len(),
            total_nodes: self.total_nodes,
            edge_arrays: self.edge_arrays.len(),
            node_arrays: self.node_arrays.len(),
        }
    }

    /// Imported arrays: the edge list plus every edge and node array.
    pub fn imported_array_count(&self) -> usize {
        1 + self.edge_arrays.len() + self.node_arrays.len()
    }

    pub fn result_dataset_names(&self) -> Vec<&str> {
        self.result_groups
            .iter()
            .flat_map(|g| g.names.iter().map(String::as_str))
            .collect()
    }

    pub fn element_count(&self, shape: ResultShape) -> usize {
        match shape {
            ResultShape::Nodes { components } => self.total_nodes * components,
            ResultShape::Triangles => self.triangles,
        }
    }

    /// Partitioning vector used for a job of `nprocs` ranks.
    pub fn partitioning(&self, nprocs: usize) -> PartitioningVector {
        if self.kind == WorkloadKind::WorkedExample && nprocs == 2 {
            worked_example().1
        } else {
            PartitioningVector::slabs(self.total_nodes, nprocs)
        }
    }
}

fn names(prefix: &str, n: usize) -> Vec<String> {
    (0..n).map(|i| format!("{prefix}{i}")).collect()
}

pub fn build_workload(spec: &WorkloadSpec) -> Workload {
    match spec.kind {
        WorkloadKind::WorkedExample => Workload {
            kind: spec.kind,
            mesh: worked_example().0,
            total_nodes: 5,
            triangles: 0,
            edge_arrays: vec!["x".into()],
            node_arrays: vec!["y".into()],
            result_groups: vec![ResultGroupPlan {
                names: vec!["p".into(), "q".into()],
                shape: ResultShape::Nodes { components: 1 },
            }],
            timesteps: spec.timesteps,
        },
        WorkloadKind::Fun3dLike => {
            let (mesh, total_nodes) = tet_lattice(spec.scale, spec.seed);
            Workload {
                kind: spec.kind,
                mesh,
                total_nodes,
                triangles: 0,
                edge_arrays: names("xe", 4),
                node_arrays: names("yn", 4),
                result_groups: vec![
                    ResultGroupPlan {
                        names: names("q", 4),
                        shape: ResultShape::Nodes { components: 1 },
                    },
                    ResultGroupPlan {
                        names: vec!["flux".into()],
                        shape: ResultShape::Nodes { components: 5 },
                    },
                ],
                timesteps: spec.timesteps,
            }
        }
        WorkloadKind::RtLike => {
            let (mesh, total_nodes, triangles) = tri_grid(spec.scale, spec.seed);
            Workload {
                kind: spec.kind,
                mesh,
                total_nodes,
                triangles,
                edge_arrays: Vec::new(),
                node_arrays: vec!["coord_x".into(), "coord_y".into()],
                result_groups: vec![
                    ResultGroupPlan {
                        names: vec!["node".into()],
                        shape: ResultShape::Nodes { components: 1 },
                    },
                    ResultGroupPlan {
                        names: vec!["triangle".into()],
                        shape: ResultShape::Triangles,
                    },
                ],
                timesteps: spec.timesteps,
            }
        }
    }
}

fn shuffled(mut pairs: Vec<(usize, usize)>, seed: u64) -> EdgeList {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    pairs.shuffle(&mut rng);
    for p in &mut pairs {
        if rng.gen_bool(0.5) {
            *p = (p.1, p.0);
        }
    }
    EdgeList::from_pairs(&pairs)
}

/// Cube lattice with each cube split into tetrahedra (axis, face-diagonal
/// and body-diagonal edges), edge order shuffled by `seed`.
fn tet_lattice(scale: usize, seed: u64) -> (EdgeList, usize) {
    let side = ((scale.max(8) as f64).cbrt().round() as usize).max(2);
    let nz = scale.max(8).div_ceil(side * side).max(2);
    let (nx, ny) = (side, side);
    let id = |x: usize, y: usize, z: usize| (z * ny + y) * nx + x;
    let mut pairs = Vec::new();
    for z in 0..nz {
        for y in 0..ny {
            for x in 0..nx {
                let offsets: [(usize, usize, usize); 7] =
                    [(1, 0, 0), (0, 1, 0), (0, 0, 1), (1, 1, 0), (0, 1, 1), (1, 0, 1), (1, 1, 1)];
                for (dx, dy, dz) in offsets {
                    if x + dx < nx && y + dy < ny && z + dz < nz {
                        pairs.push((id(x, y, z), id(x + dx, y + dy, z + dz)));
                    }
                }
            }
        }
    }
    (shuffled(pairs, seed), nx * ny * nz)
}

/// Structured triangle grid; returns (edges, nodes, triangles).
fn tri_grid(scale: usize, seed: u64) -> (EdgeList, usize, usize) {
    let nx = ((scale.max(4) as f64).sqrt().round() as usize).max(2);
    let ny = scale.max(4).div_ceil(nx).max(2);
    let id = |x: usize, y: usize| y * nx + x;
    let mut pairs = Vec::new();
    for y in 0..ny {
        for x in 0..nx {
            if x + 1 < nx {
                pairs.push((id(x, y), id(x + 1, y)));
            }
            if y + 1 < ny {
                pairs.push((id(x, y), id(x, y + 1)));
            }
            if x + 1 < nx && y + 1 < ny {
                pairs.push((id(x, y), id(x + 1, y + 1)));
            }
        }
    }
    (shuffled(pairs, seed), nx * ny, 2 * (nx - 1) * (ny - 1))
}

/// Writes `edge1 | edge2 | edge arrays | node arrays`. Edge array `j` holds
/// `import_value(edge_array_id(j), e)`, node array `j` holds
/// `import_value(node_array_id(j), g)`.
pub fn write_mesh_file(path: &Path, mesh: &EdgeList, total_nodes: usize, edge_arrays: usize, node_arrays: usize) -> Result<()> {
    mesh.validate(total_nodes)?;
    let to_i32 = |v: usize| -> Result<i32> {
        i32::try_from(v).map_err(|_| SdmError::Validation(format!("node id {v} does not fit INT32")))
    };
    let e1 = mesh.edge1.iter().map(|&v| to_i32(v)).collect::<Result<Vec<_>>>()?;
    let e2 = mesh.edge2.iter().map(|&v| to_i32(v)).collect::<Result<Vec<_>>>()?;
    let mut bytes = encode(&e1);
    bytes.extend(encode(&e2));
    for j in 0..edge_arrays {
        let vals: Vec<f64> = (0..mesh.len()).map(|e| import_value(edge_array_id(j), e)).collect();
        bytes.extend(encode(&vals));
    }
    for j in 0..node_arrays {
        let vals: Vec<f64> = (0..total_nodes).map(|g| import_value(node_array_id(j), g)).collect();
        bytes.extend(encode(&vals));
    }
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| SdmError::io(parent, e))?;
    }
    fs::write(path, bytes).map_err(|e| SdmError::io(path, e))
}

/// Value id of edge array `j` for [`import_value`].
pub fn edge_array_id(j: usize) -> usize {
    2 * j
}

/// Value id of node array `j` for [`import_value`].
pub fn node_array_id(j: usize) -> usize {
    2 * j + 1
}

/// Files produced by [`gen_workload`].
#[derive(Debug, Clone)]
pub struct GeneratedFiles {
    pub mesh_path: PathBuf,
    pub pv_path: PathBuf,
    pub workload: Workload,
}

/// Generates the workload and writes its mesh file and the partitioning
/// vector for `spec.nprocs` ranks under `dir`.
pub fn gen_workload(spec: &WorkloadSpec, dir: &Path) -> Result<GeneratedFiles> {
    let workload = build_workload(spec);
    let mesh_path = dir.join(format!("{}_mesh.bin", spec.kind.name()));
    let pv_path = dir.join(format!("{}_pv_{}.bin", spec.kind.name(), spec.nprocs));
    write_mesh_file(
        &mesh_path,
        &workload.mesh,
        workload.total_nodes,
        workload.edge_arrays.len(),
        workload.node_arrays.len(),
    )?;
    workload.partitioning(spec.nprocs).write_file(&pv_path)?;
    Ok(GeneratedFiles {
        mesh_path,
        pv_path,
        workload,
    })
}

/// Random mesh with up to `max_edges` edges over up to `max_nodes` nodes.
/// Self-loops and duplicate edges occur.
pub fn random_mesh(rng: &mut impl Rng, max_edges: usize, max_nodes: usize) -> (EdgeList, usize) {
    let nodes = rng.gen_range(1..=max_nodes);
    let edges = rng.gen_range(0..=max_edges);
    let pairs: Vec<(usize, usize)> = (0..edges)
        .map(|_| (rng.gen_range(0..nodes), rng.gen_range(0..nodes)))
        .collect();
    (EdgeList::from_pairs(&pairs), nodes)
}

pub fn random_partitioning(rng: &mut impl Rng, total_nodes: usize, nprocs: usize) -> PartitioningVector {
    let owner = (0..total_nodes).map(|_| rng.gen_range(0..nprocs) as u32).collect();
    PartitioningVector::new(owner, nprocs).expect("owners drawn below nprocs")
}
