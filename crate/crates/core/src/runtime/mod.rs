//! SPMD simulation: virtual processes, each with one device, executing the
//! call sequence stage → exchange → stage → kernel → set update.

mod builtins;
mod kernel;
mod stats;

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use rayon::prelude::*;

pub use builtins::{builtin_kernels, reference_gemm, BUILTIN_SOURCE};
pub(crate) use kernel::BufView;
pub use kernel::{AccessError, ItemCtx, KernelBody, KernelFunction, ReadRecord};
pub use stats::{CommStats, Counts};

use crate::access::{
    derive_local_set, AbsoluteStore, AccessDecl, AccessKind, AccessPattern, OffsetTuple, Trapezoid,
};
use crate::cache::{CacheCounters, Lookup, PlanCache, PlanKey, UsedArray};
use crate::comm::{
    apply_gdef_update, byte_account, classify, plan_messages, plan_staging, ArrayExchange, ArrayPlan, ByteTotals,
    MessagePlan, Pattern,
};
use crate::cache::HistoryBuffer;
use crate::error::{Error, Result};
use crate::frontend;
use crate::model::{ElemKind, HDArrayMeta, Partition, PartitionId, PartitionKind, PartitionTable, ProcessArrayState};
use crate::oracle::{self, Declared, OracleAccess, OracleReport, ShadowWorld, TraceOp};
use crate::sections::{Section, SectionSet};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ReduceOp {
    Sum,
    Prod,
    Max,
    Min,
}

impl ReduceOp {
    pub fn combine(self, a: f64, b: f64) -> f64 {
        match self {
            ReduceOp::Sum => a + b,
            ReduceOp::Prod => a * b,
            ReduceOp::Max => a.max(b),
            ReduceOp::Min => a.min(b),
        }
    }

    /// Local reduction; `None` for an empty slice.
    pub fn fold(self, vals: &[f64]) -> Option<f64> {
        vals.iter().copied().reduce(|a, b| self.combine(a, b))
    }

    /// Combine per-process partials in rank order.
    pub fn finish(self, partials: &[f64]) -> Result<f64> {
        match self.fold(partials) {
            Some(v) => Ok(v),
            None => match self {
                ReduceOp::Sum => Ok(0.0),
                ReduceOp::Prod => Ok(1.0),
                _ => Err(Error::EmptyReduction(self)),
            },
        }
    }
}

impl FromStr for ReduceOp {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s.to_ascii_uppercase().as_str() {
            "SUM" => Ok(ReduceOp::Sum),
            "PROD" => Ok(ReduceOp::Prod),
            "MAX" => Ok(ReduceOp::Max),
            "MIN" => Ok(ReduceOp::Min),
            _ => Err(format!("unknown reduction `{s}`")),
        }
    }
}

impl fmt::Display for ReduceOp {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ReduceOp::Sum => "SUM",
            ReduceOp::Prod => "PROD",
            ReduceOp::Max => "MAX",
            ReduceOp::Min => "MIN",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Scheduler {
    /// Processes stepped in rank order within each phase.
    #[default]
    Sequential,
    /// Processes run concurrently within a phase, barrier between phases.
    Parallel,
}

impl FromStr for Scheduler {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "seq" | "sequential" => Ok(Scheduler::Sequential),
            "par" | "parallel" => Ok(Scheduler::Parallel),
            _ => Err(format!("unknown scheduler `{s}` (expected seq or par)")),
        }
    }
}

#[derive(Debug, Clone)]
pub struct RuntimeConfig {
    pub nprocs: usize,
    pub cache: bool,
    pub scheduler: Scheduler,
    /// Run the shadow oracle in lockstep and collect an [`OracleReport`].
    pub oracle: bool,
    /// Keep every plan and its trace lines.
    pub record: bool,
    /// Compare every process's GDEF replica after each operation.
    pub check_replicas: bool,
    /// Skip all data movement while still planning it. Only useful as a
    /// negative control for the oracle.
    #[doc(hidden)]
    pub disable_comm: bool,
}

impl RuntimeConfig {
    pub fn new(nprocs: usize) -> Self {
        RuntimeConfig {
            nprocs,
            cache: true,
            scheduler: Scheduler::Sequential,
            oracle: false,
            record: false,
            check_replicas: false,
            disable_comm: false,
        }
    }
}

#[derive(Debug, Clone)]
struct ProcessState {
    arrays: Vec<ProcessArrayState>,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
struct LocalKey {
    kernel: String,
    partition: PartitionId,
    array: usize,
    kind: AccessKind,
    formals: Vec<String>,
}

#[derive(Debug, Clone)]
struct LocalEntry {
    sets: Arc<Vec<SectionSet>>,
    stamp: u64,
    deps: Vec<u64>,
}

type Stamped = (Arc<Vec<SectionSet>>, u64);

/// One array's role in a call.
#[derive(Debug, Clone)]
struct CallArray {
    id: usize,
    luse: Option<Stamped>,
    ldef: Option<Stamped>,
}

/// Data movement for one array in one call.
#[derive(Debug, Clone)]
struct Movement {
    id: usize,
    exchange: Arc<ArrayExchange>,
    to_host: Vec<SectionSet>,
    to_device: Vec<SectionSet>,
    incoming: Vec<SectionSet>,
}

struct OracleState {
    world: ShadowWorld,
    report: OracleReport,
}

pub struct Runtime {
    config: RuntimeConfig,
    decls: HashMap<String, AccessDecl>,
    kernels: HashMap<String, KernelFunction>,
    metas: Vec<HDArrayMeta>,
    by_name: HashMap<String, usize>,
    procs: Vec<ProcessState>,
    partitions: PartitionTable,
    absolute: AbsoluteStore,
    local: HashMap<LocalKey, LocalEntry>,
    stamp: u64,
    history: Vec<HistoryBuffer>,
    cache: PlanCache,
    k: u64,
    stats: CommStats,
    trace: Vec<String>,
    plans: Vec<MessagePlan>,
    race_free: HashSet<(usize, Option<u64>, Option<u64>)>,
    oracle: Option<OracleState>,
    audit: ReplicaAudit,
    diverged: Vec<usize>,
}

/// Replica comparisons made after operations, one per touched array.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct ReplicaAudit {
    pub checks: u64,
    pub failures: u64,
}

fn run_procs<R, F>(procs: &mut [ProcessState], sched: Scheduler, f: F) -> Vec<R>
where
    R: Send,
    F: Fn(usize, &mut ProcessState) -> R + Sync + Send,
{
    match sched {
        Scheduler::Sequential => procs.iter_mut().enumerate().map(|(p, s)| f(p, s)).collect(),
        Scheduler::Parallel => procs.par_iter_mut().enumerate().map(|(p, s)| f(p, s)).collect(),
    }
}

fn first_err<T>(v: Vec<Result<T>>) -> Result<Vec<T>> {
    v.into_iter().collect()
}

fn mask(meta: &HDArrayMeta, set: &SectionSet) -> Vec<bool> {
    let mut m = vec![false; meta.len()];
    for pt in set.points() {
        m[meta.linear(&pt[..meta.ndim()])] = true;
    }
    m
}

impl Runtime {
    /// Runtime with declarations from metadata text and no kernels registered.
    pub fn init(metadata: &str, config: RuntimeConfig) -> Result<Self> {
        let decls = frontend::load_metadata(metadata)?;
        Runtime::new(decls, config)
    }

    pub fn new(decls: Vec<AccessDecl>, config: RuntimeConfig) -> Result<Self> {
        if config.nprocs < 1 {
            return Err(Error::Config("nprocs must be at least 1".into()));
        }
        let mut map = HashMap::new();
        for d in decls {
            if map.contains_key(&d.kernel) {
                return Err(Error::DuplicateKernel(d.kernel));
            }
            map.insert(d.kernel.clone(), d);
        }
        let oracle = config.oracle.then(|| OracleState {
            world: ShadowWorld::new(config.nprocs),
            report: OracleReport::default(),
        });
        Ok(Runtime {
            procs: vec![ProcessState { arrays: Vec::new() }; config.nprocs],
            cache: PlanCache::new(config.cache),
            config,
            decls: map,
            kernels: HashMap::new(),
            metas: Vec::new(),
            by_name: HashMap::new(),
            partitions: PartitionTable::default(),
            absolute: AbsoluteStore::default(),
            local: HashMap::new(),
            stamp: 0,
            history: Vec::new(),
            k: 0,
            stats: CommStats::default(),
            trace: Vec::new(),
            plans: Vec::new(),
            race_free: HashSet::new(),
            oracle,
            audit: ReplicaAudit::default(),
            diverged: Vec::new(),
        })
    }

    /// Runtime with the built-in benchmark kernels declared and registered.
    pub fn with_builtins(config: RuntimeConfig) -> Result<Self> {
        let decls = frontend::parse_decls(BUILTIN_SOURCE)?;
        let mut rt = Runtime::new(decls, config)?;
        for (name, k) in builtin_kernels() {
            rt.register_kernel(name, k)?;
        }
        Ok(rt)
    }

    pub fn nprocs(&self) -> usize {
        self.config.nprocs
    }

    pub fn config(&self) -> &RuntimeConfig {
        &self.config
    }

    pub fn decl(&self, kernel: &str) -> Option<&AccessDecl> {
        self.decls.get(kernel)
    }

    pub fn add_decl(&mut self, decl: AccessDecl) -> Result<()> {
        if self.decls.contains_key(&decl.kernel) {
            return Err(Error::DuplicateKernel(decl.kernel));
        }
        self.decls.insert(decl.kernel.clone(), decl);
        Ok(())
    }

    pub fn register_kernel(&mut self, name: &str, f: KernelFunction) -> Result<()> {
        let decl = self.decls.get(name).ok_or_else(|| Error::UnknownKernel(name.into()))?;
        if self.kernels.contains_key(name) {
            return Err(Error::DuplicateKernel(name.into()));
        }
        for a in &decl.arrays {
            if f.slot(&a.array).is_none() {
                return Err(Error::Config(format!(
                    "kernel `{name}` declares `{}` but has no parameter of that name",
                    a.array
                )));
            }
        }
        self.kernels.insert(name.to_string(), f);
        Ok(())
    }

    fn id(&self, name: &str) -> Result<usize> {
        self.by_name
            .get(name)
            .copied()
            .ok_or_else(|| Error::UnknownArray(name.into()))
    }

    pub fn meta(&self, name: &str) -> Result<&HDArrayMeta> {
        Ok(&self.metas[self.id(name)?])
    }

    pub fn array_names(&self) -> Vec<&str> {
        self.metas.iter().map(|m| m.name.as_str()).collect()
    }

    pub fn create(&mut self, name: &str, kind: ElemKind, shape: &[usize]) -> Result<()> {
        if self.by_name.contains_key(name) {
            return Err(Error::DuplicateArray(name.into()));
        }
        let meta = HDArrayMeta::new(name, kind, shape)?;
        for p in &mut self.procs {
            p.arrays.push(ProcessArrayState::new(&meta, self.config.nprocs));
        }
        if let Some(o) = &mut self.oracle {
            o.world.add_array(meta.clone());
        }
        self.by_name.insert(name.to_string(), self.metas.len());
        self.metas.push(meta);
        self.history.push(HistoryBuffer::default());
        Ok(())
    }

    pub fn partition_auto(&mut self, kind: PartitionKind, domain: &[usize], region: &Section) -> Result<PartitionId> {
        self.partitions.partition_auto(kind, domain, *region, self.config.nprocs)
    }

    pub fn partition_manual(&mut self, domain: &[usize], regions: &[Section]) -> Result<PartitionId> {
        self.partitions.partition_manual(domain, regions, self.config.nprocs)
    }

    pub fn partition(&self, id: PartitionId) -> Result<&Partition> {
        self.partitions.get(id)
    }

    fn next_stamp(&mut self) -> u64 {
        self.stamp += 1;
        self.stamp
    }

    pub fn set_absolute(
        &mut self,
        kind: AccessKind,
        kernel: &str,
        partition: PartitionId,
        array: &str,
        device: usize,
        sections: &[Section],
    ) -> Result<()> {
        let decl = self.decls.get(kernel).ok_or_else(|| Error::UnknownKernel(kernel.into()))?;
        let not_abs = || Error::NotAbsolute {
            kernel: kernel.into(),
            array: array.into(),
            kind: kind.as_str(),
        };
        match decl.array(array) {
            Some(a) => {
                if a.pattern(kind) != Some(&AccessPattern::Absolute) {
                    return Err(not_abs());
                }
            }
            None => {
                if !decl.arrays.iter().any(|a| a.pattern(kind) == Some(&AccessPattern::Absolute)) {
                    return Err(not_abs());
                }
            }
        }
        self.partitions.get(partition)?;
        let meta = self.meta(array)?.clone();
        if device >= self.config.nprocs {
            return Err(Error::UnknownDevice {
                device,
                nprocs: self.config.nprocs,
            });
        }
        let full = meta.full();
        for s in sections {
            if s.ndim() != meta.ndim() {
                return Err(Error::Arity {
                    expected: meta.ndim(),
                    got: s.ndim(),
                });
            }
            if !s.is_empty() && !full.contains(s) {
                return Err(Error::OutOfBounds {
                    region: *s,
                    domain: meta.shape.clone(),
                });
            }
        }
        let set = SectionSet::canonicalize(meta.ndim(), sections.iter().copied())?;
        let stamp = self.next_stamp();
        self.absolute
            .set((kernel.to_string(), partition, array.to_string(), device, kind), set, stamp);
        Ok(())
    }

    pub fn set_trapezoid(
        &mut self,
        kind: AccessKind,
        kernel: &str,
        partition: PartitionId,
        array: &str,
        device: usize,
        shape: &Trapezoid,
    ) -> Result<()> {
        if self.meta(array)?.ndim() != 2 {
            return Err(Error::BadTrapezoid(format!("`{array}` is not two-dimensional")));
        }
        let set = shape.rasterize()?;
        let secs: Vec<Section> = set.iter().copied().collect();
        self.set_absolute(kind, kernel, partition, array, device, &secs)
    }

    pub fn absolute_sets(&self) -> &AbsoluteStore {
        &self.absolute
    }

    /// Per-process LUSE or LDEF of `array` for the given formals, with a
    /// stamp that changes whenever the sets may have changed.
    fn local_sets(
        &mut self,
        kernel: &str,
        pid: PartitionId,
        array: usize,
        kind: AccessKind,
        pats: &[(String, AccessPattern)],
    ) -> Result<Stamped> {
        let part = self.partitions.get(pid)?.clone();
        let meta = self.metas[array].clone();
        let n = self.config.nprocs;
        let mut deps = Vec::new();
        let any_abs = pats.iter().any(|(_, p)| *p == AccessPattern::Absolute);
        if any_abs {
            for p in 0..n {
                let e = self.absolute.entry(kernel, pid, &meta.name, p, kind);
                match e {
                    Some(e) => deps.push(e.stamp),
                    None if part.regions[p].is_empty() => deps.push(0),
                    None => {
                        return Err(Error::MissingAbsolute {
                            kernel: kernel.into(),
                            array: meta.name.clone(),
                            kind: kind.as_str(),
                            device: p,
                        })
                    }
                }
            }
        }
        let key = LocalKey {
            kernel: kernel.to_string(),
            partition: pid,
            array,
            kind,
            formals: pats.iter().map(|(f, _)| f.clone()).collect(),
        };
        if let Some(e) = self.local.get(&key) {
            if e.deps == deps {
                return Ok((e.sets.clone(), e.stamp));
            }
        }
        let mut sets = Vec::with_capacity(n);
        for p in 0..n {
            let region = &part.regions[p];
            if region.ndim() != meta.ndim() {
                return Err(Error::Arity {
                    expected: meta.ndim(),
                    got: region.ndim(),
                });
            }
            let mut acc = SectionSet::empty(meta.ndim());
            for (_, pat) in pats {
                let s = match pat {
                    AccessPattern::Offsets(ts) => derive_local_set(ts, region, &meta.shape)?,
                    AccessPattern::Absolute => self
                        .absolute
                        .get(kernel, pid, &meta.name, p, kind)
                        .cloned()
                        .unwrap_or_else(|| SectionSet::empty(meta.ndim())),
                };
                acc = acc.union(&s)?;
            }
            sets.push(acc);
        }
        let stamp = self.next_stamp();
        let sets = Arc::new(sets);
        self.local.insert(
            key,
            LocalEntry {
                sets: sets.clone(),
                stamp,
                deps,
            },
        );
        Ok((sets, stamp))
    }

    fn check_races(&mut self, kernel: &str, calls: &[CallArray]) -> Result<()> {
        let n = self.config.nprocs;
        for c in calls {
            let Some((ldef, ds)) = &c.ldef else { continue };
            let key = (c.id, c.luse.as_ref().map(|x| x.1), Some(*ds));
            if self.race_free.contains(&key) {
                continue;
            }
            for p in 0..n {
                for q in 0..n {
                    if p == q {
                        continue;
                    }
                    let race = |what| Error::Race {
                        kernel: kernel.into(),
                        array: self.metas[c.id].name.clone(),
                        p,
                        q,
                        what,
                    };
                    if p < q && ldef[p].intersects(&ldef[q]) {
                        return Err(race("writes"));
                    }
                    if let Some((luse, _)) = &c.luse {
                        if luse[p].intersects(&ldef[q]) {
                            return Err(race("reads"));
                        }
                    }
                }
            }
            self.race_free.insert(key);
        }
        Ok(())
    }

    fn staging_inputs(&self, id: usize) -> (Vec<&SectionSet>, Vec<&SectionSet>) {
        let dev = self.procs.iter().map(|p| &p.arrays[id].device_fresh).collect();
        let host = self.procs.iter().map(|p| &p.arrays[id].host_fresh).collect();
        (dev, host)
    }

    /// Phases 1–3: stage device→host, exchange, stage host→device; then `post`
    /// runs on each process.
    fn execute<R, F>(&mut self, moves: &[Movement], post: F) -> Result<Vec<R>>
    where
        R: Send,
        F: Fn(usize, &mut ProcessState) -> Result<R> + Sync + Send,
    {
        let sched = self.config.scheduler;
        let metas = &self.metas;
        let active = !self.config.disable_comm && moves.iter().any(|m| {
            !m.exchange.is_empty()
                || m.to_host.iter().any(|s| !s.is_empty())
                || m.to_device.iter().any(|s| !s.is_empty())
        });
        let payloads: Vec<Vec<(usize, usize, Vec<f64>)>> = if active {
            first_err(run_procs(&mut self.procs, sched, |p, st| {
                let mut out = Vec::new();
                for (mi, m) in moves.iter().enumerate() {
                    let meta = &metas[m.id];
                    let a = &mut st.arrays[m.id];
                    if !m.to_host[p].is_empty() {
                        for pt in m.to_host[p].points() {
                            let off = meta.linear(&pt[..meta.ndim()]);
                            a.host[off] = a.device[off];
                        }
                        a.device_fresh = a.device_fresh.subtract(&m.to_host[p])?;
                    }
                    for q in 0..m.exchange.nprocs() {
                        let s = m.exchange.send(p, q);
                        if q == p || s.is_empty() {
                            continue;
                        }
                        let vals = s.points().map(|pt| a.host[meta.linear(&pt[..meta.ndim()])]).collect();
                        out.push((mi, q, vals));
                    }
                }
                Ok(out)
            }))?
        } else {
            Vec::new()
        };
        let payloads = &payloads;
        first_err(run_procs(&mut self.procs, sched, |q, st| {
            if active {
                for (p, msgs) in payloads.iter().enumerate() {
                    for (mi, dst, vals) in msgs {
                        if *dst != q {
                            continue;
                        }
                        let m = &moves[*mi];
                        let meta = &metas[m.id];
                        let a = &mut st.arrays[m.id];
                        for (pt, v) in m.exchange.send(p, q).points().zip(vals) {
                            a.host[meta.linear(&pt[..meta.ndim()])] = *v;
                        }
                    }
                }
                for m in moves {
                    let meta = &metas[m.id];
                    let a = &mut st.arrays[m.id];
                    if !m.incoming[q].is_empty() {
                        a.host_fresh = a.host_fresh.union(&m.incoming[q])?;
                        a.device_fresh = a.device_fresh.subtract(&m.incoming[q])?;
                    }
                    if !m.to_device[q].is_empty() {
                        for pt in m.to_device[q].points() {
                            let off = meta.linear(&pt[..meta.ndim()]);
                            a.device[off] = a.host[off];
                        }
                        a.host_fresh = a.host_fresh.subtract(&m.to_device[q])?;
                    }
                }
            }
            post(q, st)
        }))
    }

    /// Apply the GDEF update on this process's replica and record its own
    /// definitions as device-fresh.
    fn update_sets(
        st: &mut ProcessState,
        p: usize,
        updates: &[(usize, Arc<ArrayExchange>, Arc<Vec<SectionSet>>)],
    ) -> Result<()> {
        for (id, x, ldef) in updates {
            let a = &mut st.arrays[*id];
            apply_gdef_update(&mut a.tables, x, ldef)?;
            if !ldef[p].is_empty() {
                a.device_fresh = a.device_fresh.union(&ldef[p])?;
                a.host_fresh = a.host_fresh.subtract(&ldef[p])?;
            }
        }
        Ok(())
    }

    fn record_plan(&mut self, plan: MessagePlan, touched: &[usize]) {
        if self.config.check_replicas || self.oracle.is_some() {
            for &id in touched {
                self.audit.checks += 1;
                if !(self.replicas_consistent_id(id) && self.mirror_holds_id(id)) {
                    self.audit.failures += 1;
                    self.diverged.push(id);
                }
            }
        }
        for ap in &plan.arrays {
            self.stats.entry(&ap.array, &plan.kernel).record(byte_account(ap), ap.pattern);
        }
        for &id in touched {
            if !plan.arrays.iter().any(|a| a.array == self.metas[id].name) {
                let name = self.metas[id].name.clone();
                self.stats
                    .entry(&name, &plan.kernel)
                    .record(ByteTotals::default(), Pattern::None);
            }
        }
        if self.config.record {
            self.trace.extend(plan.trace_lines());
            self.plans.push(plan);
        }
    }

    fn oracle_step(&mut self, op: TraceOp, reads: &[Vec<ReadRecord>], moves: &[Movement], reduced: Option<f64>) -> Result<()> {
        let diverged = std::mem::take(&mut self.diverged);
        let k = self.k;
        let Some(o) = &mut self.oracle else { return Ok(()) };
        o.report.ops += 1;
        let step = o.world.apply(&op)?;
        if step.race {
            o.report.races += 1;
            o.report.note(format!("k={k}: oracle flagged a race"));
        }
        let rr = oracle::verify_reads(reads, &step.reads);
        o.report.reads_checked += rr.checked;
        o.report.read_mismatches += rr.mismatches;
        for m in rr.examples.iter().take(2) {
            o.report.note(format!(
                "k={k}: process {} read #{} of array {} cell {}: expected {} got {}",
                m.process,
                m.position,
                self.metas[m.array].name,
                m.offset,
                f64::from_bits(m.expected),
                f64::from_bits(m.got)
            ));
        }
        let xs: Vec<(usize, &ArrayExchange)> = moves.iter().map(|m| (m.id, m.exchange.as_ref())).collect();
        let bad = oracle::check_plan_exact(&self.metas, &step.flows, &xs);
        o.report.exactness_failures += bad.len() as u64;
        for b in bad.into_iter().take(2) {
            o.report.note(format!("k={k}: {b}"));
        }
        for id in diverged {
            o.report.replica_failures += 1;
            o.report.note(format!("k={k}: replicas of {} diverged", self.metas[id].name));
        }
        if let (Some(a), Some(b)) = (reduced, step.reduced) {
            if a.to_bits() != b.to_bits() {
                o.report.reduce_mismatches += 1;
                o.report.note(format!("k={k}: reduction gave {a}, oracle {b}"));
            }
        }
        Ok(())
    }

    /// Launch a kernel over a partition. Unlisted formals bind to the array of
    /// the same name.
    pub fn apply_kernel(&mut self, name: &str, pid: PartitionId, bindings: &[(&str, &str)], scalars: &[f64]) -> Result<()> {
        let decl = self.decls.get(name).ok_or_else(|| Error::UnknownKernel(name.into()))?.clone();
        let kf = self
            .kernels
            .get(name)
            .ok_or_else(|| Error::UnregisteredKernel(name.into()))?
            .clone();
        let part = self.partitions.get(pid)?.clone();
        for (f, _) in bindings {
            if kf.slot(f).is_none() {
                return Err(Error::Config(format!("kernel `{name}` has no parameter `{f}`")));
            }
        }
        let mut slot_arrays = Vec::with_capacity(kf.slots().len());
        for s in kf.slots() {
            let actual = bindings.iter().find(|(f, _)| f == s).map_or(s.as_str(), |(_, a)| *a);
            let id = self.by_name.get(actual).copied().ok_or_else(|| Error::UnboundArray {
                kernel: name.into(),
                formal: s.clone(),
            })?;
            slot_arrays.push(id);
        }
        // formals grouped by the actual array they are bound to
        let mut groups: BTreeMap<usize, (Vec<(String, AccessPattern)>, Vec<(String, AccessPattern)>)> = BTreeMap::new();
        for (slot, &id) in slot_arrays.iter().enumerate() {
            let g = groups.entry(id).or_default();
            if let Some(a) = decl.array(&kf.slots()[slot]) {
                if let Some(u) = &a.uses {
                    g.0.push((a.array.clone(), u.clone()));
                }
                if let Some(d) = &a.defs {
                    g.1.push((a.array.clone(), d.clone()));
                }
            }
        }
        let mut calls = Vec::with_capacity(groups.len());
        for (&id, (u, d)) in &groups {
            let luse = if u.is_empty() {
                None
            } else {
                Some(self.local_sets(name, pid, id, AccessKind::Use, u)?)
            };
            let ldef = if d.is_empty() {
                None
            } else {
                Some(self.local_sets(name, pid, id, AccessKind::Def, d)?)
            };
            calls.push(CallArray { id, luse, ldef });
        }
        self.check_races(name, &calls)?;

        self.k += 1;
        let k = self.k;
        let key = PlanKey {
            kernel: name.to_string(),
            partition: pid,
        };
        let used: Vec<&CallArray> = calls.iter().filter(|c| c.luse.is_some()).collect();
        let lookup = {
            let ua: Vec<UsedArray<'_>> = used
                .iter()
                .map(|c| UsedArray {
                    array: c.id,
                    luse_stamp: c.luse.as_ref().map(|x| x.1),
                    history: &self.history[c.id],
                    gdef: &self.procs[0].arrays[c.id].tables,
                })
                .collect();
            self.cache.try_reuse(&key, &ua)
        };
        let mut positions = HashMap::new();
        for c in &calls {
            let pos = self.history[c.id].push(
                k,
                c.ldef.as_ref().map(|x| x.1),
                c.luse.as_ref().map(|x| x.1),
            );
            positions.insert(c.id, pos);
        }
        let used_pos: Vec<usize> = used.iter().map(|c| positions[&c.id]).collect();
        let exchanges: Vec<Arc<ArrayExchange>> = match lookup {
            Lookup::Hit(xs) => {
                let ids: Vec<usize> = used.iter().map(|c| c.id).collect();
                self.cache.advance(&key, &ids, &used_pos);
                xs
            }
            Lookup::Miss(flags) => {
                let xs = used
                    .iter()
                    .map(|c| plan_messages(&self.procs[0].arrays[c.id].tables, &c.luse.as_ref().unwrap().0).map(Arc::new))
                    .collect::<Result<Vec<_>>>()?;
                let ua: Vec<UsedArray<'_>> = used
                    .iter()
                    .map(|c| UsedArray {
                        array: c.id,
                        luse_stamp: c.luse.as_ref().map(|x| x.1),
                        history: &self.history[c.id],
                        gdef: &self.procs[0].arrays[c.id].tables,
                    })
                    .collect();
                self.cache.store(key, &ua, &used_pos, &flags, &xs);
                xs
            }
        };

        let mut moves = Vec::with_capacity(used.len());
        let mut plan_arrays = Vec::with_capacity(used.len());
        for (c, x) in used.iter().zip(&exchanges) {
            let luse = &c.luse.as_ref().unwrap().0;
            let (dev, host) = self.staging_inputs(c.id);
            let (to_host, to_device) = plan_staging(x, luse, &dev, &host)?;
            let incoming = (0..self.config.nprocs).map(|p| x.incoming(p)).collect::<Result<Vec<_>>>()?;
            let meta = &self.metas[c.id];
            plan_arrays.push(ArrayPlan {
                array: meta.name.clone(),
                kind: meta.kind,
                exchange: x.clone(),
                pattern: classify(x),
                stage_to_host: to_host.clone(),
                stage_to_device: to_device.clone(),
            });
            moves.push(Movement {
                id: c.id,
                exchange: x.clone(),
                to_host,
                to_device,
                incoming,
            });
        }

        let n = self.config.nprocs;
        let updates: Vec<(usize, Arc<ArrayExchange>, Arc<Vec<SectionSet>>)> = calls
            .iter()
            .map(|c| {
                let nd = self.metas[c.id].ndim();
                let x = moves
                    .iter()
                    .find(|m| m.id == c.id)
                    .map_or_else(|| Arc::new(ArrayExchange::empty(n, nd)), |m| m.exchange.clone());
                let ldef = c
                    .ldef
                    .as_ref()
                    .map_or_else(|| Arc::new(vec![SectionSet::empty(nd); n]), |d| d.0.clone());
                (c.id, x, ldef)
            })
            .collect();

        let mut distinct: Vec<usize> = slot_arrays.clone();
        distinct.sort_unstable();
        distinct.dedup();
        let slot_buf: Vec<usize> = slot_arrays.iter().map(|a| distinct.binary_search(a).unwrap()).collect();
        let logging = self.oracle.is_some();
        let metas = self.metas.clone();
        let calls_ref = &calls;
        let reads = self.execute(&moves, |p, st| {
            let region = &part.regions[p];
            let mut log = Vec::new();
            if !region.is_empty() {
                let masks: Vec<(Vec<bool>, Vec<bool>)> = distinct
                    .iter()
                    .map(|id| {
                        let c = calls_ref.iter().find(|c| c.id == *id).unwrap();
                        let u = c.luse.as_ref().map_or_else(Vec::new, |x| mask(&metas[*id], &x.0[p]));
                        let d = c.ldef.as_ref().map_or_else(Vec::new, |x| mask(&metas[*id], &x.0[p]));
                        (u, d)
                    })
                    .collect();
                let bufs: Vec<BufView<'_>> = st
                    .arrays
                    .iter_mut()
                    .enumerate()
                    .filter(|(id, _)| distinct.binary_search(id).is_ok())
                    .zip(&masks)
                    .map(|((id, a), (u, d))| BufView {
                        id,
                        meta: &metas[id],
                        data: a.device.as_mut_slice(),
                        use_mask: Some(u.as_slice()),
                        def_mask: Some(d.as_slice()),
                    })
                    .collect();
                let mut cx = ItemCtx::new(bufs, &slot_buf, scalars, logging.then_some(&mut log));
                let nd = region.ndim();
                for w in region.points() {
                    kf.invoke(&w[..nd], &mut cx).map_err(|e| Error::Access {
                        kernel: name.into(),
                        process: p,
                        array: metas[slot_arrays[e.slot.min(slot_arrays.len() - 1)]].name.clone(),
                        index: e.index,
                        op: e.op,
                        set: e.set,
                    })?;
                }
            }
            Self::update_sets(st, p, &updates)?;
            Ok(log)
        })?;

        let touched: Vec<usize> = calls.iter().map(|c| c.id).collect();
        self.record_plan(
            MessagePlan {
                k,
                kernel: name.to_string(),
                arrays: plan_arrays,
            },
            &touched,
        );
        if self.oracle.is_some() {
            let access = groups
                .iter()
                .map(|(&id, (u, d))| OracleAccess {
                    array: id,
                    uses: u.iter().map(|(_, p)| self.declared(name, pid, id, AccessKind::Use, p)).collect(),
                    defs: d.iter().map(|(_, p)| self.declared(name, pid, id, AccessKind::Def, p)).collect(),
                })
                .collect();
            let op = TraceOp::Kernel {
                name: name.to_string(),
                kernel: kf,
                regions: part.regions.clone(),
                slot_arrays,
                scalars: scalars.to_vec(),
                access,
            };
            self.oracle_step(op, &reads, &moves, None)?;
        }
        Ok(())
    }

    fn declared(&self, kernel: &str, pid: PartitionId, id: usize, kind: AccessKind, pat: &AccessPattern) -> Declared {
        match pat {
            AccessPattern::Offsets(ts) => Declared::Offsets(ts.clone()),
            AccessPattern::Absolute => Declared::Absolute(
                (0..self.config.nprocs)
                    .map(|p| {
                        self.absolute
                            .get(kernel, pid, &self.metas[id].name, p, kind)
                            .cloned()
                            .unwrap_or_else(|| SectionSet::empty(self.metas[id].ndim()))
                    })
                    .collect(),
            ),
        }
    }

    fn identity_sets(&mut self, label: &str, pid: PartitionId, id: usize, kind: AccessKind) -> Result<Stamped> {
        let zero = AccessPattern::Offsets(vec![OffsetTuple::zero(self.metas[id].ndim())]);
        self.local_sets(label, pid, id, kind, &[(String::new(), zero)])
    }

    /// Copy user data into each process's device buffer over its region.
    pub fn write(&mut self, name: &str, data: &[f64], pid: PartitionId) -> Result<()> {
        let id = self.id(name)?;
        let meta = self.metas[id].clone();
        if data.len() != meta.len() {
            return Err(Error::DataShape {
                array: name.into(),
                expected: meta.len(),
                got: data.len(),
            });
        }
        let part = self.partitions.get(pid)?.clone();
        let (ldef, stamp) = self.identity_sets("<write>", pid, id, AccessKind::Def)?;
        self.k += 1;
        let k = self.k;
        self.history[id].push(k, Some(stamp), None);
        let n = self.config.nprocs;
        let updates = vec![(id, Arc::new(ArrayExchange::empty(n, meta.ndim())), ldef.clone())];
        self.execute(&[], |p, st| {
            let a = &mut st.arrays[id];
            for pt in ldef[p].points() {
                let off = meta.linear(&pt[..meta.ndim()]);
                a.device[off] = meta.kind.normalize(data[off]);
            }
            Self::update_sets(st, p, &updates)
        })?;
        self.record_plan(
            MessagePlan {
                k,
                kernel: "write".into(),
                arrays: Vec::new(),
            },
            &[id],
        );
        if self.oracle.is_some() {
            let op = TraceOp::Write {
                array: id,
                regions: part.regions.clone(),
                data: Arc::new(data.to_vec()),
            };
            self.oracle_step(op, &vec![Vec::new(); n], &[], None)?;
        }
        Ok(())
    }

    /// Make each process's region coherent in its host buffer. Returns the
    /// per-process regions (clipped to the array) and the movement performed.
    fn host_coherent(&mut self, id: usize, pid: PartitionId, label: &str) -> Result<(Arc<Vec<SectionSet>>, Movement)> {
        let (luse, stamp) = self.identity_sets("<read>", pid, id, AccessKind::Use)?;
        self.k += 1;
        let k = self.k;
        self.history[id].push(k, None, Some(stamp));
        let n = self.config.nprocs;
        let nd = self.metas[id].ndim();
        let x = Arc::new(plan_messages(&self.procs[0].arrays[id].tables, &luse)?);
        let mut to_host = Vec::with_capacity(n);
        for p in 0..n {
            let need = x.outgoing(p)?.union(&luse[p])?;
            to_host.push(self.procs[p].arrays[id].device_fresh.intersect(&need)?);
        }
        let incoming = (0..n).map(|p| x.incoming(p)).collect::<Result<Vec<_>>>()?;
        let mv = Movement {
            id,
            exchange: x.clone(),
            to_host: to_host.clone(),
            to_device: vec![SectionSet::empty(nd); n],
            incoming,
        };
        let updates = vec![(id, x.clone(), Arc::new(vec![SectionSet::empty(nd); n]))];
        self.execute(std::slice::from_ref(&mv), |p, st| Self::update_sets(st, p, &updates))?;
        let meta = &self.metas[id];
        let plan = MessagePlan {
            k,
            kernel: label.to_string(),
            arrays: vec![ArrayPlan {
                array: meta.name.clone(),
                kind: meta.kind,
                exchange: x.clone(),
                pattern: classify(&x),
                stage_to_host: to_host,
                stage_to_device: vec![SectionSet::empty(nd); n],
            }],
        };
        self.record_plan(plan, &[id]);
        Ok((luse, mv))
    }

    fn region_values(&self, id: usize, regions: &[SectionSet]) -> Vec<Vec<(usize, f64)>> {
        let meta = &self.metas[id];
        regions
            .iter()
            .enumerate()
            .map(|(p, r)| {
                let host = &self.procs[p].arrays[id].host;
                r.points()
                    .map(|pt| {
                        let off = meta.linear(&pt[..meta.ndim()]);
                        (off, host[off])
                    })
                    .collect()
            })
            .collect()
    }

    fn read_log(id: usize, vals: &[Vec<(usize, f64)>]) -> Vec<Vec<ReadRecord>> {
        vals.iter()
            .map(|v| {
                v.iter()
                    .map(|&(offset, x)| ReadRecord {
                        array: id,
                        offset,
                        bits: x.to_bits(),
                    })
                    .collect()
            })
            .collect()
    }

    /// Each process reads its region; the result holds every process's region
    /// at its position and zeros elsewhere.
    pub fn read(&mut self, name: &str, pid: PartitionId) -> Result<Vec<f64>> {
        let id = self.id(name)?;
        let (regions, mv) = self.host_coherent(id, pid, "read")?;
        let vals = self.region_values(id, &regions);
        let mut out = vec![0.0; self.metas[id].len()];
        for v in &vals {
            for &(off, x) in v {
                out[off] = x;
            }
        }
        if self.oracle.is_some() {
            let op = TraceOp::Read {
                array: id,
                regions: self.partitions.get(pid)?.regions.clone(),
            };
            self.oracle_step(op, &Self::read_log(id, &vals), &[mv], None)?;
        }
        Ok(out)
    }

    /// Local reduction per process over its region, combined in rank order.
    pub fn reduce(&mut self, name: &str, op: ReduceOp, pid: PartitionId) -> Result<f64> {
        let id = self.id(name)?;
        let (regions, mv) = self.host_coherent(id, pid, "reduce")?;
        let vals = self.region_values(id, &regions);
        let partials: Vec<f64> = vals
            .iter()
            .filter_map(|v| op.fold(&v.iter().map(|x| x.1).collect::<Vec<_>>()))
            .collect();
        let result = op.finish(&partials);
        if self.oracle.is_some() {
            let t = TraceOp::Reduce {
                array: id,
                regions: self.partitions.get(pid)?.regions.clone(),
                op,
            };
            self.oracle_step(t, &Self::read_log(id, &vals), &[mv], result.as_ref().ok().copied())?;
        }
        result
    }

    /// Coherent snapshot of the whole array. Does not change any state.
    pub fn gather(&self, name: &str) -> Result<Vec<f64>> {
        let id = self.id(name)?;
        let meta = &self.metas[id];
        let p0 = &self.procs[0].arrays[id];
        let mut out = vec![0.0; meta.len()];
        for pt in meta.full().points() {
            let idx = &pt[..meta.ndim()];
            out[meta.linear(idx)] = p0.latest(meta, idx);
        }
        let tables = &p0.tables;
        for p in 0..self.config.nprocs {
            for q in 0..self.config.nprocs {
                if p == q {
                    continue;
                }
                let st = &self.procs[p].arrays[id];
                for pt in tables.send(p, q).points() {
                    let idx = &pt[..meta.ndim()];
                    out[meta.linear(idx)] = st.latest(meta, idx);
                }
            }
        }
        Ok(out)
    }

    pub fn stats(&self) -> CommStats {
        let mut s = self.stats.clone();
        s.cache = self.cache.counters();
        s
    }

    pub fn cache_counters(&self) -> CacheCounters {
        self.cache.counters()
    }

    pub fn trace_lines(&self) -> &[String] {
        &self.trace
    }

    pub fn plans(&self) -> &[MessagePlan] {
        &self.plans
    }

    pub fn call_count(&self) -> u64 {
        self.k
    }

    pub fn replica_audit(&self) -> ReplicaAudit {
        self.audit
    }

    pub fn oracle_report(&self) -> Option<&OracleReport> {
        self.oracle.as_ref().map(|o| &o.report)
    }

    /// The oracle's global copy of an array, when the oracle is enabled.
    pub fn oracle_values(&self, name: &str) -> Result<Option<Vec<f64>>> {
        let id = self.id(name)?;
        Ok(self.oracle.as_ref().map(|o| o.world.values(id).to_vec()))
    }

    /// A process's replica of the GDEF tables for an array.
    pub fn gdef(&self, name: &str, process: usize) -> Result<&crate::model::GdefTable> {
        let id = self.id(name)?;
        self.procs
            .get(process)
            .map(|p| &p.arrays[id].tables)
            .ok_or(Error::UnknownDevice {
                device: process,
                nprocs: self.config.nprocs,
            })
    }

    pub fn device_fresh(&self, name: &str, process: usize) -> Result<&SectionSet> {
        let id = self.id(name)?;
        Ok(&self.procs[process].arrays[id].device_fresh)
    }

    fn replicas_consistent_id(&self, id: usize) -> bool {
        let first = &self.procs[0].arrays[id].tables;
        self.procs.iter().all(|p| p.arrays[id].tables.equals(first))
    }

    fn mirror_holds_id(&self, id: usize) -> bool {
        let n = self.config.nprocs;
        (0..n).all(|p| {
            (0..n).all(|q| {
                p == q
                    || self.procs[p].arrays[id].tables.send(p, q).equals(self.procs[q].arrays[id].tables.recv(q, p))
            })
        })
    }

    /// True iff every process holds an identical copy of the array's tables.
    pub fn replicas_consistent(&self, name: &str) -> Result<bool> {
        Ok(self.replicas_consistent_id(self.id(name)?))
    }

    /// True iff `p`'s send entry toward `q` equals `q`'s receive entry from `p`,
    /// each read from its owner's replica.
    pub fn mirror_holds(&self, name: &str) -> Result<bool> {
        let id = self.id(name)?;
        Ok(self.mirror_holds_id(id) && self.procs.iter().all(|p| p.arrays[id].tables.is_mirrored()))
    }

    /// Test-only: add one spurious cell to a single replica.
    #[doc(hidden)]
    pub fn corrupt_replica(&mut self, name: &str, process: usize) -> Result<()> {
        let id = self.id(name)?;
        let n = self.config.nprocs;
        if n < 2 {
            return Err(Error::Config("corrupting a replica needs at least two processes".into()));
        }
        let meta = &self.metas[id];
        let cell = Section::new(&vec![(0, 1); meta.ndim()])?;
        let t = &mut self.procs[process].arrays[id].tables;
        let e = t.send_mut(0, 1);
        let fresh = SectionSet::from_section(cell);
        *e = if e.intersects(&fresh) { e.subtract(&fresh)? } else { e.union(&fresh)? };
        Ok(())
    }
}
