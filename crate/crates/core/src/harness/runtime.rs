//! Logical-rank runtime.
//!
//! Every rank runs on its own thread and talks to its peers only through
//! four collectives: barrier, ring shift, broadcast and gather-to-root.
//! Collectives are matched by call sequence number, so all ranks must
//! enter the same collectives in the same order. A rank that waits on a
//! collective some peer can no longer enter (because that peer has
//! returned or panicked) gets a [`SdmError::Deadlock`] instead of hanging.

use std::any::Any;
use std::cell::Cell;
use std::collections::HashMap;
use std::sync::{Arc, Condvar, Mutex, MutexGuard};
use std::thread;

use crate::error::{Result, SdmError};

type Payload = Box<dyn Any + Send>;

/// Per-rank counters of collective calls.
#[derive(Debug, Default, Clone, Copy, PartialEq, Eq)]
pub struct CommStats {
    pub barriers: u64,
    pub ring_shifts: u64,
    pub broadcasts: u64,
    pub gathers: u64,
}

struct Slot {
    tags: Vec<Option<&'static str>>,
    values: Vec<Option<Payload>>,
    arrived: usize,
    outputs: Option<Result<Vec<Option<Payload>>, String>>,
    taken: usize,
}

impl Slot {
    fn new(nprocs: usize) -> Self {
        Slot {
            tags: vec![None; nprocs],
            values: (0..nprocs).map(|_| None).collect(),
            arrived: 0,
            outputs: None,
            taken: 0,
        }
    }
}

struct State {
    slots: HashMap<u64, Slot>,
    /// Number of collectives each rank has entered.
    entered: Vec<u64>,
    exited: Vec<bool>,
}

struct Shared {
    nprocs: usize,
    state: Mutex<State>,
    wake: Condvar,
}

impl Shared {
    fn lock(&self) -> MutexGuard<'_, State> {
        self.state.lock().unwrap_or_else(|e| e.into_inner())
    }
}

/// A rank's view of the job: its id, the job size and the collectives.
pub struct RankContext {
    rank: usize,
    shared: Arc<Shared>,
    seq: Cell<u64>,
    stats: Cell<CommStats>,
}

impl RankContext {
    pub fn rank(&self) -> usize {
        self.rank
    }

    pub fn nprocs(&self) -> usize {
        self.shared.nprocs
    }

    pub fn is_root(&self) -> bool {
        self.rank == 0
    }

    pub fn stats(&self) -> CommStats {
        self.stats.get()
    }

    fn bump(&self, f: impl FnOnce(&mut CommStats)) {
        let mut s = self.stats.get();
        f(&mut s);
        self.stats.set(s);
    }

    /// Deposits `value`, waits for every rank, and returns this rank's share
    /// of `combine(all values in rank order)`. `combine` runs exactly once,
    /// on the last rank to arrive.
    fn collective<T, R, F>(&self, tag: &'static str, value: T, combine: F) -> Result<R>
    where
        T: Send + 'static,
        R: Send + 'static,
        F: FnOnce(Vec<T>) -> Result<Vec<R>, String>,
    {
        let n = self.nprocs();
        let seq = self.seq.get();
        self.seq.set(seq + 1);

        let mut st = self.shared.lock();
        st.entered[self.rank] = seq + 1;
        let slot = st.slots.entry(seq).or_insert_with(|| Slot::new(n));
        slot.tags[self.rank] = Some(tag);
        slot.values[self.rank] = Some(Box::new(value));
        slot.arrived += 1;

        if slot.arrived == n {
            let outputs = finish(slot, tag, combine);
            slot.outputs = Some(outputs);
            self.shared.wake.notify_all();
        }

        loop {
            if let Some(slot) = st.slots.get_mut(&seq) {
                if let Some(outputs) = slot.outputs.as_mut() {
                    let result = match outputs {
                        Ok(outs) => {
                            let out = outs[self.rank].take().expect("output taken twice");
                            Ok(*out.downcast::<R>().expect("collective output type"))
                        }
                        Err(msg) => Err(SdmError::CollectiveMismatch(msg.clone())),
                    };
                    slot.taken += 1;
                    if slot.taken == n {
                        st.slots.remove(&seq);
                    }
                    return result;
                }
            }
            if let Some(exited) = (0..n).find(|&r| st.exited[r] && st.entered[r] <= seq) {
                return Err(SdmError::Deadlock {
                    rank: self.rank,
                    seq,
                    exited,
                });
            }
            st = self.shared.wake.wait(st).unwrap_or_else(|e| e.into_inner());
        }
    }

    pub fn barrier(&self) -> Result<()> {
        self.bump(|s| s.barriers += 1);
        let n = self.nprocs();
        self.collective("barrier", (), |_| Ok(vec![(); n]))
    }

    /// Sends `value` to rank `(p + 1) mod nprocs` and returns the value
    /// received from rank `(p - 1) mod nprocs`.
    pub fn ring_shift<T: Send + 'static>(&self, value: T) -> Result<T> {
        self.bump(|s| s.ring_shifts += 1);
        self.collective("ring_shift", value, |mut vals| {
            let n = vals.len();
            // rotate right by one: rank i receives from rank i-1
            vals.rotate_right(1 % n.max(1));
            Ok(vals)
        })
    }

    /// `root` supplies `Some(value)`; every rank returns a clone of it.
    pub fn broadcast<T: Clone + Send + 'static>(&self, root: usize, value: Option<T>) -> Result<T> {
        self.bump(|s| s.broadcasts += 1);
        self.collective("broadcast", value, move |mut vals| {
            let n = vals.len();
            if root >= n {
                return Err(format!("broadcast root {root} outside job of {n} ranks"));
            }
            let v = vals[root]
                .take()
                .ok_or_else(|| format!("broadcast root {root} supplied no value"))?;
            Ok(vec![v; n])
        })
    }

    /// Collects one value per rank at rank 0, in rank order.
    pub fn gather<T: Send + 'static>(&self, value: T) -> Result<Option<Vec<T>>> {
        self.bump(|s| s.gathers += 1);
        self.collective("gather", value, |vals| {
            let n = vals.len();
            let mut out: Vec<Option<Vec<T>>> = (0..n).map(|_| None).collect();
            out[0] = Some(vals);
            Ok(out)
        })
    }

    /// Gather to rank 0 followed by a broadcast of the whole vector.
    pub fn allgather<T: Clone + Send + 'static>(&self, value: T) -> Result<Vec<T>> {
        let all = self.gather(value)?;
        self.broadcast(0, all)
    }

    /// Fails on every rank unless all ranks pass the same `value`.
    pub fn agree(&self, what: &str, value: u64) -> Result<()> {
        let all = self.allgather(value)?;
        if all.iter().any(|v| *v != all[0]) {
            return Err(SdmError::CollectiveMismatch(format!(
                "ranks disagree on {what}: {all:?}"
            )));
        }
        Ok(())
    }

    /// Makes a rank-0-only outcome visible to every rank: on success all
    /// ranks get rank 0's value, on failure all ranks fail.
    pub fn share_root_result<T: Clone + Send + 'static>(&self, local: Option<Result<T>>) -> Result<T> {
        let (value, err) = match local {
            Some(Ok(v)) => (Some(Ok(v)), None),
            Some(Err(e)) => {
                let msg = e.to_string();
                (Some(Err(msg)), Some(e))
            }
            None => (None, None),
        };
        let shared: Result<T, String> = self.broadcast(0, value)?;
        match (shared, err) {
            (Ok(v), _) => Ok(v),
            (Err(_), Some(e)) => Err(e),
            (Err(msg), None) => Err(SdmError::RankFailed { rank: 0, message: msg }),
        }
    }
}

fn finish<T, R, F>(slot: &mut Slot, tag: &'static str, combine: F) -> Result<Vec<Option<Payload>>, String>
where
    T: Send + 'static,
    R: Send + 'static,
    F: FnOnce(Vec<T>) -> Result<Vec<R>, String>,
{
    if let Some((r, other)) = slot
        .tags
        .iter()
        .enumerate()
        .find_map(|(r, t)| t.filter(|t| *t != tag).map(|t| (r, t)))
    {
        return Err(format!("rank {r} entered {other} while others entered {tag}"));
    }
    let mut vals = Vec::with_capacity(slot.values.len());
    for (r, v) in slot.values.iter_mut().enumerate() {
        match v.take().map(|b| b.downcast::<T>()) {
            Some(Ok(b)) => vals.push(*b),
            _ => return Err(format!("rank {r} passed a different payload type to {tag}")),
        }
    }
    let outs = combine(vals)?;
    Ok(outs.into_iter().map(|o| Some(Box::new(o) as Payload)).collect())
}

struct ExitGuard {
    rank: usize,
    shared: Arc<Shared>,
}

impl Drop for ExitGuard {
    fn drop(&mut self) {
        let mut st = self.shared.lock();
        st.exited[self.rank] = true;
        drop(st);
        self.shared.wake.notify_all();
    }
}

fn panic_message(payload: &(dyn Any + Send)) -> String {
    if let Some(s) = payload.downcast_ref::<&str>() {
        (*s).to_string()
    } else if let Some(s) = payload.downcast_ref::<String>() {
        s.clone()
    } else {
        "panic".to_string()
    }
}

/// Runs `program` on `nprocs` logical ranks and returns their results in
/// rank order. If any rank fails, the job fails with the lowest-ranked
/// primary error (peer deadlocks caused by that failure are suppressed).
pub fn run_ranks<T, F>(nprocs: usize, program: F) -> Result<Vec<T>>
where
    T: Send,
    F: Fn(&RankContext) -> Result<T> + Sync,
{
    if nprocs == 0 {
        return Err(SdmError::Validation("nprocs must be at least 1".into()));
    }
    let shared = Arc::new(Shared {
        nprocs,
        state: Mutex::new(State {
            slots: HashMap::new(),
            entered: vec![0; nprocs],
            exited: vec![false; nprocs],
        }),
        wake: Condvar::new(),
    });

    let outcomes: Vec<Result<T>> = thread::scope(|scope| {
        let handles: Vec<_> = (0..nprocs)
            .map(|rank| {
                let shared = Arc::clone(&shared);
                let program = &program;
                thread::Builder::new()
                    .name(format!("rank-{rank}"))
                    .spawn_scoped(scope, move || {
                        let _guard = ExitGuard {
                            rank,
                            shared: Arc::clone(&shared),
                        };
                        let ctx = RankContext {
                            rank,
                            shared,
                            seq: Cell::new(0),
                            stats: Cell::new(CommStats::default()),
                        };
                        program(&ctx)
                    })
                    .expect("spawn rank thread")
            })
            .collect();
        handles
            .into_iter()
            .enumerate()
            .map(|(rank, h)| {
                h.join().unwrap_or_else(|p| {
                    Err(SdmError::RankFailed {
                        rank,
                        message: panic_message(p.as_ref()),
                    })
                })
            })
            .collect()
    });

    let mut results = Vec::with_capacity(nprocs);
    let mut first_err: Option<SdmError> = None;
    for (rank, outcome) in outcomes.into_iter().enumerate() {
        match outcome {
            Ok(v) => results.push(v),
            Err(e) => {
                let e = match e {
                    e @ (SdmError::RankFailed { .. } | SdmError::Deadlock { .. }) => e,
                    other if nprocs > 1 => wrap_rank(rank, other),
                    other => other,
                };
                let replace = match &first_err {
                    None => true,
                    Some(prev) => prev.is_secondary() && !e.is_secondary(),
                };
                if replace {
                    first_err = Some(e);
                }
            }
        }
    }
    match first_err {
        Some(e) => Err(e),
        None => Ok(results),
    }
}

// Keeps the original error type for single-rank jobs and for rank 0, so
// callers can still match on it; other ranks are tagged with their id.
fn wrap_rank(rank: usize, e: SdmError) -> SdmError {
    if rank == 0 {
        e
    } else {
        SdmError::RankFailed {
            rank,
            message: e.to_string(),
        }
    }
}
