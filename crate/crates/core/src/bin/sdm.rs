use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Duration;

use clap::{Args, Parser, Subcommand, ValueEnum};

use sdm::harness::pipeline::{run_pipeline, IndexSource, RunConfig, RunReport};
use sdm::harness::verify::verify_all;
use sdm::harness::workload::{gen_workload, WorkloadKind, WorkloadSpec};
use sdm::{catalog, FileOrgLevel, SdmError};

#[derive(Parser)]
#[command(name = "sdm", version, about = "Scientific data manager for irregular mesh applications")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a workload's mesh and partitioning vector files.
    Gen(GenArgs),
    /// Run the full pipeline: import, partition, register, write, read back.
    Run(RunArgs),
    /// Compare distributions and written regions against the oracles.
    Verify(VerifyArgs),
    /// Dump the catalog tables.
    Catalog(CatalogArgs),
    /// Time import, index distribution, write and read per level.
    Bench(BenchArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum Workload {
    Fun3d,
    Rt,
    WorkedExample,
}

impl From<Workload> for WorkloadKind {
    fn from(w: Workload) -> Self {
        match w {
            Workload::Fun3d => WorkloadKind::Fun3dLike,
            Workload::Rt => WorkloadKind::RtLike,
            Workload::WorkedExample => WorkloadKind::WorkedExample,
        }
    }
}

#[derive(Args)]
struct WorkloadArgs {
    #[arg(long, value_enum, default_value = "worked-example")]
    workload: Workload,
    #[arg(long, default_value_t = 2, value_parser = clap::value_parser!(u32).range(1..=256))]
    nprocs: u32,
    /// Approximate node count (workload default when omitted).
    #[arg(long)]
    scale: Option<usize>,
    #[arg(long)]
    timesteps: Option<u64>,
    #[arg(long, default_value_t = 7)]
    seed: u64,
}

impl WorkloadArgs {
    fn spec(&self, level: FileOrgLevel) -> WorkloadSpec {
        let mut spec = WorkloadSpec::new(self.workload.into(), level, self.nprocs as usize);
        if let Some(s) = self.scale {
            spec.scale = s;
        }
        if let Some(t) = self.timesteps {
            spec.timesteps = t;
        }
        spec.seed = self.seed;
        spec
    }
}

#[derive(Args)]
struct GenArgs {
    #[command(flatten)]
    workload: WorkloadArgs,
    #[arg(long, default_value = "sdm-data")]
    data_dir: PathBuf,
}

#[derive(Args)]
struct RunArgs {
    #[command(flatten)]
    workload: WorkloadArgs,
    #[arg(long, default_value_t = 3, value_parser = clap::value_parser!(u8).range(1..=3))]
    level: u8,
    /// Replay a saved index distribution when one matches.
    #[arg(long)]
    use_history: bool,
    /// Defaults to `<catalog-dir>/history`.
    #[arg(long)]
    history_dir: Option<PathBuf>,
    #[arg(long, default_value = "sdm-data")]
    data_dir: PathBuf,
    #[arg(long, default_value = "sdm-catalog")]
    catalog_dir: PathBuf,
}

#[derive(Args)]
struct VerifyArgs {
    #[arg(long, default_value_t = 7)]
    seed: u64,
    /// Random meshes to check (each at nprocs 1, 2, 3, 4 and 8).
    #[arg(long, default_value_t = 20)]
    cases: usize,
    /// Scratch directory (a temporary one when omitted).
    #[arg(long)]
    work_dir: Option<PathBuf>,
}

#[derive(Args)]
struct CatalogArgs {
    #[arg(long, default_value = "sdm-catalog")]
    catalog_dir: PathBuf,
    /// Replace timestamps with 0.
    #[arg(long)]
    normalize: bool,
}

#[derive(Args)]
struct BenchArgs {
    #[command(flatten)]
    workload: WorkloadArgs,
    /// Scratch directory (a temporary one when omitted).
    #[arg(long)]
    work_dir: Option<PathBuf>,
}

fn run_config(args: &RunArgs) -> RunConfig {
    let level = FileOrgLevel::from_number(args.level).expect("range checked by clap");
    RunConfig {
        app: args.workload.workload.into_kind_name(),
        workload: args.workload.spec(level),
        use_history: args.use_history,
        register_history: true,
        catalog_dir: args.catalog_dir.clone(),
        data_dir: args.data_dir.clone(),
        history_dir: args
            .history_dir
            .clone()
            .unwrap_or_else(|| args.catalog_dir.join("history")),
        timestamp: None,
        collect_regions: false,
    }
}

impl Workload {
    fn into_kind_name(self) -> String {
        WorkloadKind::from(self).name().to_string()
    }
}

fn ms(d: Duration) -> f64 {
    d.as_secs_f64() * 1e3
}

fn mb_per_s(bytes: u64, d: Duration) -> f64 {
    if d.is_zero() {
        return 0.0;
    }
    bytes as f64 / 1e6 / d.as_secs_f64()
}

fn print_report(r: &RunReport) {
    println!("run {} on {} ranks", r.run, r.nprocs);
    match r.index_source {
        IndexSource::History => println!("index distribution: history hit (ring shifts {:?})", r.ring_shifts),
        IndexSource::Distributed => println!(
            "index distribution: distributed (ring shifts {:?}){}",
            r.ring_shifts,
            if r.history_registered { ", history registered" } else { "" }
        ),
    }
    println!("local edges {:?}", r.local_edges);
    println!("local nodes {:?}", r.local_nodes);
    println!("files {}", r.data_files.join(" "));
    let t = &r.timings;
    println!(
        "import {:.3} ms, index distribution {:.3} ms, write {:.3} ms ({} bytes), read {:.3} ms ({} bytes)",
        ms(t.import),
        ms(t.index_distribution),
        ms(t.write),
        r.bytes_written,
        ms(t.read),
        r.bytes_read
    );
}

fn scratch(dir: &Option<PathBuf>) -> Result<(Option<tempfile::TempDir>, PathBuf), SdmError> {
    match dir {
        Some(d) => Ok((None, d.clone())),
        None => {
            let tmp = tempfile::tempdir().map_err(|e| SdmError::Io {
                path: std::env::temp_dir(),
                source: e,
            })?;
            let path = tmp.path().to_path_buf();
            Ok((Some(tmp), path))
        }
    }
}

fn bench(args: &BenchArgs) -> Result<(), SdmError> {
    let (_tmp, dir) = scratch(&args.work_dir)?;
    println!(
        "{:<6} {:>12} {:>14} {:>14} {:>12} {:>12} {:>6}",
        "level", "import_ms", "index_ms", "replay_ms", "write_MB/s", "read_MB/s", "files"
    );
    for level in FileOrgLevel::ALL {
        let base = dir.join(format!("l{}", level.number()));
        let kind: WorkloadKind = args.workload.workload.into();
        let mut cfg = RunConfig::new(kind, level, args.workload.nprocs as usize, &base);
        cfg.workload = args.workload.spec(level);
        let fresh = run_pipeline(&cfg)?;
        cfg.use_history = true;
        let replay = run_pipeline(&cfg)?;
        println!(
            "{:<6} {:>12.3} {:>14.3} {:>14.3} {:>12.1} {:>12.1} {:>6}",
            level.to_string(),
            ms(fresh.timings.import),
            ms(fresh.timings.index_distribution),
            ms(replay.timings.index_distribution),
            mb_per_s(fresh.bytes_written, fresh.timings.write),
            mb_per_s(fresh.bytes_read, fresh.timings.read),
            fresh.data_files.len()
        );
    }
    Ok(())
}

fn dispatch(cli: Cli) -> Result<(), SdmError> {
    match cli.command {
        Command::Gen(args) => {
            let files = gen_workload(&args.workload.spec(FileOrgLevel::L3), &args.data_dir.join("input"))?;
            println!("mesh {}", files.mesh_path.display());
            println!("partitioning {}", files.pv_path.display());
            println!(
                "{} edges, {} nodes, {} imported arrays",
                files.workload.mesh.len(),
                files.workload.total_nodes,
                files.workload.imported_array_count()
            );
        }
        Command::Run(args) => print_report(&run_pipeline(&run_config(&args))?),
        Command::Verify(args) => {
            let (_tmp, dir) = scratch(&args.work_dir)?;
            let s = verify_all(args.seed, args.cases, &dir)?;
            println!(
                "ok: {} distributions, {} history round trips, {} pipeline runs",
                s.distribution_checks, s.history_round_trips, s.pipeline_runs
            );
        }
        Command::Catalog(args) => print!("{}", catalog::dump(&args.catalog_dir, args.normalize)?),
        Command::Bench(args) => bench(&args)?,
    }
    Ok(())
}

fn exit_code(e: &SdmError) -> u8 {
    match e {
        SdmError::Verification(_) => 3,
        SdmError::RankFailed { message, .. } if message.starts_with("verification") => 3,
        _ => 4,
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("sdm: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
