//! Brute-force reference execution.
//!
//! [`ShadowWorld`] runs every operation sequentially on one global copy of
//! each array, tracks the last writer and write version of every cell, and
//! derives the transfers a cell-by-cell protocol would need. It shares no
//! set algebra with the runtime: access sets are rasterized per work item.

pub mod random;

use std::collections::BTreeMap;
use std::sync::Arc;

use crate::access::{Offset, OffsetTuple};
use crate::comm::ArrayExchange;
use crate::error::{Error, Result};
use crate::model::HDArrayMeta;
use crate::runtime::{BufView, ItemCtx, KernelFunction, ReadRecord, ReduceOp};
use crate::sections::{Section, SectionSet};

/// Declared access of one formal, as the oracle sees it.
#[derive(Debug, Clone)]
pub enum Declared {
    Offsets(Vec<OffsetTuple>),
    /// Absolute sections per process.
    Absolute(Vec<SectionSet>),
}

#[derive(Debug, Clone)]
pub struct OracleAccess {
    pub array: usize,
    pub uses: Vec<Declared>,
    pub defs: Vec<Declared>,
}

/// One operation of a program trace.
#[derive(Debug, Clone)]
pub enum TraceOp {
    Write {
        array: usize,
        regions: Vec<Section>,
        data: Arc<Vec<f64>>,
    },
    Kernel {
        name: String,
        kernel: KernelFunction,
        regions: Vec<Section>,
        /// array id per kernel slot
        slot_arrays: Vec<usize>,
        scalars: Vec<f64>,
        access: Vec<OracleAccess>,
    },
    Read {
        array: usize,
        regions: Vec<Section>,
    },
    Reduce {
        array: usize,
        regions: Vec<Section>,
        op: ReduceOp,
    },
}

/// Cells (linear offsets) that must move `src -> dst`, per array.
pub type FlowMap = BTreeMap<usize, BTreeMap<(usize, usize), Vec<usize>>>;

#[derive(Debug, Default)]
pub struct ShadowStep {
    /// Reads in execution order, per process.
    pub reads: Vec<Vec<ReadRecord>>,
    pub flows: FlowMap,
    pub race: bool,
    pub reduced: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct ShadowWorld {
    nprocs: usize,
    metas: Vec<HDArrayMeta>,
    values: Vec<Vec<f64>>,
    last_writer: Vec<Vec<Option<usize>>>,
    version: Vec<Vec<u64>>,
    /// [array][reader][cell] version last received by `reader`
    received: Vec<Vec<Vec<u64>>>,
    clock: u64,
}

fn rasterize_offsets(meta: &HDArrayMeta, region: &Section, tuples: &[OffsetTuple], mask: &mut [bool]) {
    let nd = meta.ndim();
    for w in region.points() {
        for t in tuples {
            // per dimension: candidate coordinates
            let mut ranges: Vec<(i64, i64)> = Vec::with_capacity(nd);
            for d in 0..nd {
                match t.0[d] {
                    Offset::Fixed(o) => ranges.push((w[d] + o, w[d] + o + 1)),
                    Offset::Star => ranges.push((0, meta.shape[d] as i64)),
                }
            }
            let mut idx = vec![0i64; nd];
            fill(meta, &ranges, 0, &mut idx, mask);
        }
    }
}

fn fill(meta: &HDArrayMeta, ranges: &[(i64, i64)], d: usize, idx: &mut Vec<i64>, mask: &mut [bool]) {
    if d == ranges.len() {
        if meta.in_bounds(idx) {
            mask[meta.linear(idx)] = true;
        }
        return;
    }
    for v in ranges[d].0..ranges[d].1 {
        idx[d] = v;
        fill(meta, ranges, d + 1, idx, mask);
    }
}

fn rasterize_sections(meta: &HDArrayMeta, set: &SectionSet, mask: &mut [bool]) {
    for s in set.iter() {
        for pt in s.points() {
            let idx = &pt[..meta.ndim()];
            if meta.in_bounds(idx) {
                mask[meta.linear(idx)] = true;
            }
        }
    }
}

fn region_cells(meta: &HDArrayMeta, region: &Section) -> Vec<usize> {
    region
        .points()
        .filter_map(|pt| {
            let idx = &pt[..meta.ndim()];
            meta.in_bounds(idx).then(|| meta.linear(idx))
        })
        .collect()
}

impl ShadowWorld {
    pub fn new(nprocs: usize) -> Self {
        ShadowWorld {
            nprocs,
            metas: Vec::new(),
            values: Vec::new(),
            last_writer: Vec::new(),
            version: Vec::new(),
            received: Vec::new(),
            clock: 0,
        }
    }

    /// Register an array; ids are assigned in creation order.
    pub fn add_array(&mut self, meta: HDArrayMeta) -> usize {
        let n = meta.len();
        self.values.push(vec![0.0; n]);
        self.last_writer.push(vec![None; n]);
        self.version.push(vec![0; n]);
        self.received.push(vec![vec![0; n]; self.nprocs]);
        self.metas.push(meta);
        self.metas.len() - 1
    }

    pub fn values(&self, array: usize) -> &[f64] {
        &self.values[array]
    }

    pub fn last_writer(&self, array: usize) -> &[Option<usize>] {
        &self.last_writer[array]
    }

    fn mask_of(&self, array: usize, p: usize, region: &Section, decls: &[Declared]) -> Vec<bool> {
        let meta = &self.metas[array];
        let mut mask = vec![false; meta.len()];
        for d in decls {
            match d {
                Declared::Offsets(ts) => rasterize_offsets(meta, region, ts, &mut mask),
                Declared::Absolute(per) => rasterize_sections(meta, &per[p], &mut mask),
            }
        }
        mask
    }

    /// Per-cell transfer requirements for readers reading `uses[q]`.
    fn naive_flow(&mut self, array: usize, uses: &[Vec<bool>]) -> BTreeMap<(usize, usize), Vec<usize>> {
        let mut out: BTreeMap<(usize, usize), Vec<usize>> = BTreeMap::new();
        for (q, mask) in uses.iter().enumerate() {
            for (cell, _) in mask.iter().enumerate().filter(|(_, u)| **u) {
                let Some(w) = self.last_writer[array][cell] else { continue };
                if w == q {
                    continue;
                }
                let v = self.version[array][cell];
                if self.received[array][q][cell] < v {
                    out.entry((w, q)).or_default().push(cell);
                    self.received[array][q][cell] = v;
                }
            }
        }
        out
    }

    fn define(&mut self, array: usize, p: usize, cells: impl Iterator<Item = usize>) {
        let v = self.clock;
        for c in cells {
            self.last_writer[array][c] = Some(p);
            self.version[array][c] = v;
        }
    }

    /// Execute one operation. This is the incremental form of `shadow_apply`.
    pub fn apply(&mut self, op: &TraceOp) -> Result<ShadowStep> {
        self.clock += 1;
        let n = self.nprocs;
        let mut step = ShadowStep {
            reads: vec![Vec::new(); n],
            ..Default::default()
        };
        match op {
            TraceOp::Write { array, regions, data } => {
                let a = *array;
                for (p, r) in regions.iter().enumerate() {
                    let cells = region_cells(&self.metas[a], r);
                    for &c in &cells {
                        self.values[a][c] = self.metas[a].kind.normalize(data[c]);
                    }
                    self.define(a, p, cells.into_iter());
                }
            }
            TraceOp::Read { array, regions } | TraceOp::Reduce { array, regions, .. } => {
                let a = *array;
                let meta = self.metas[a].clone();
                let uses: Vec<Vec<bool>> = regions
                    .iter()
                    .map(|r| {
                        let mut m = vec![false; meta.len()];
                        for c in region_cells(&meta, r) {
                            m[c] = true;
                        }
                        m
                    })
                    .collect();
                let f = self.naive_flow(a, &uses);
                step.flows.insert(a, f);
                let mut partials = Vec::new();
                for (p, r) in regions.iter().enumerate() {
                    let cells = region_cells(&meta, r);
                    let vals: Vec<f64> = cells.iter().map(|&c| self.values[a][c]).collect();
                    step.reads[p] = cells
                        .iter()
                        .zip(&vals)
                        .map(|(&c, v)| ReadRecord {
                            array: a,
                            offset: c,
                            bits: v.to_bits(),
                        })
                        .collect();
                    if let TraceOp::Reduce { op, .. } = op {
                        if let Some(x) = op.fold(&vals) {
                            partials.push(x);
                        }
                    }
                }
                if let TraceOp::Reduce { op, .. } = op {
                    step.reduced = Some(op.finish(&partials)?);
                }
            }
            TraceOp::Kernel {
                kernel,
                regions,
                slot_arrays,
                scalars,
                access,
                name,
            } => {
                let mut uses = Vec::new();
                let mut defs = Vec::new();
                for acc in access {
                    let u: Vec<Vec<bool>> = (0..n)
                        .map(|p| self.mask_of(acc.array, p, &regions[p], &acc.uses))
                        .collect();
                    let d: Vec<Vec<bool>> = (0..n)
                        .map(|p| self.mask_of(acc.array, p, &regions[p], &acc.defs))
                        .collect();
                    let len = self.metas[acc.array].len();
                    for c in 0..len {
                        let writers: Vec<usize> = (0..n).filter(|&p| d[p][c]).collect();
                        if writers.len() > 1 || writers.iter().any(|&w| (0..n).any(|q| q != w && u[q][c])) {
                            step.race = true;
                        }
                    }
                    uses.push(u);
                    defs.push(d);
                }
                for (acc, u) in access.iter().zip(&uses) {
                    let f = self.naive_flow(acc.array, u);
                    step.flows.insert(acc.array, f);
                }
                let mut distinct: Vec<usize> = slot_arrays.clone();
                distinct.sort_unstable();
                distinct.dedup();
                let slot_buf: Vec<usize> = slot_arrays
                    .iter()
                    .map(|a| distinct.binary_search(a).unwrap())
                    .collect();
                for p in 0..n {
                    let mut log = Vec::new();
                    {
                        let metas = &self.metas;
                        let bufs: Vec<BufView<'_>> = self
                            .values
                            .iter_mut()
                            .enumerate()
                            .filter(|(id, _)| distinct.binary_search(id).is_ok())
                            .map(|(id, data)| BufView {
                                id,
                                meta: &metas[id],
                                data: data.as_mut_slice(),
                                use_mask: None,
                                def_mask: None,
                            })
                            .collect();
                        let mut cx = ItemCtx::new(bufs, &slot_buf, scalars, Some(&mut log));
                        let nd = regions[p].ndim();
                        for w in regions[p].points() {
                            kernel.invoke(&w[..nd], &mut cx).map_err(|e| Error::Access {
                                kernel: name.clone(),
                                process: p,
                                array: self.metas[slot_arrays[e.slot.min(slot_arrays.len() - 1)]].name.clone(),
                                index: e.index,
                                op: e.op,
                                set: e.set,
                            })?;
                        }
                    }
                    step.reads[p] = log;
                }
                for (acc, d) in access.iter().zip(&defs) {
                    for (p, mask) in d.iter().enumerate() {
                        let cells: Vec<usize> = (0..mask.len()).filter(|&c| mask[c]).collect();
                        self.define(acc.array, p, cells.into_iter());
                    }
                }
            }
        }
        Ok(step)
    }
}

/// Run a whole trace from scratch.
pub fn shadow_apply(nprocs: usize, metas: &[HDArrayMeta], trace: &[TraceOp]) -> Result<(ShadowWorld, Vec<ShadowStep>)> {
    let mut w = ShadowWorld::new(nprocs);
    for m in metas {
        w.add_array(m.clone());
    }
    let steps = trace.iter().map(|op| w.apply(op)).collect::<Result<Vec<_>>>()?;
    Ok((w, steps))
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ReadMismatch {
    pub process: usize,
    pub position: usize,
    pub array: usize,
    pub offset: usize,
    pub expected: u64,
    pub got: u64,
}

#[derive(Debug, Clone, Default)]
pub struct ReadReport {
    pub checked: u64,
    pub mismatches: u64,
    pub examples: Vec<ReadMismatch>,
}

const MAX_EXAMPLES: usize = 8;

/// Compare the runtime's read log of one operation with the shadow's.
pub fn verify_reads(runtime: &[Vec<ReadRecord>], shadow: &[Vec<ReadRecord>]) -> ReadReport {
    let mut r = ReadReport::default();
    for p in 0..runtime.len().max(shadow.len()) {
        let empty = Vec::new();
        let a = runtime.get(p).unwrap_or(&empty);
        let b = shadow.get(p).unwrap_or(&empty);
        for i in 0..a.len().max(b.len()) {
            r.checked += 1;
            let ok = match (a.get(i), b.get(i)) {
                (Some(x), Some(y)) => x == y,
                _ => false,
            };
            if !ok {
                r.mismatches += 1;
                if r.examples.len() < MAX_EXAMPLES {
                    let x = a.get(i).or(b.get(i)).unwrap();
                    r.examples.push(ReadMismatch {
                        process: p,
                        position: i,
                        array: x.array,
                        offset: x.offset,
                        expected: b.get(i).map_or(u64::MAX, |y| y.bits),
                        got: a.get(i).map_or(u64::MAX, |y| y.bits),
                    });
                }
            }
        }
    }
    r
}

/// Check that every exchange covers exactly the cells the per-cell flow needs.
/// Returns one message per disagreeing `(array, src, dst)`.
pub fn check_plan_exact(metas: &[HDArrayMeta], flows: &FlowMap, exchanges: &[(usize, &ArrayExchange)]) -> Vec<String> {
    let mut bad = Vec::new();
    let empty = BTreeMap::new();
    for &(a, x) in exchanges {
        let meta = &metas[a];
        let need = flows.get(&a).unwrap_or(&empty);
        let n = x.nprocs();
        for p in 0..n {
            for q in 0..n {
                if p == q {
                    continue;
                }
                let mut got: Vec<usize> = x
                    .send(p, q)
                    .points()
                    .map(|pt| meta.linear(&pt[..meta.ndim()]))
                    .collect();
                got.sort_unstable();
                let want = need.get(&(p, q)).map_or(&[][..], |v| v.as_slice());
                if got != want {
                    bad.push(format!(
                        "array {} {p}->{q}: planned {} cells, flow needs {}",
                        meta.name,
                        got.len(),
                        want.len()
                    ));
                }
            }
        }
    }
    for (a, m) in flows {
        if !exchanges.iter().any(|(b, _)| b == a) && m.values().any(|v| !v.is_empty()) {
            bad.push(format!("array {}: flow needs transfers but nothing was planned", metas[*a].name));
        }
    }
    bad
}

/// Accumulated oracle findings for a run.
#[derive(Debug, Clone, Default)]
pub struct OracleReport {
    pub ops: u64,
    pub reads_checked: u64,
    pub read_mismatches: u64,
    pub exactness_failures: u64,
    pub replica_failures: u64,
    pub reduce_mismatches: u64,
    pub races: u64,
    pub notes: Vec<String>,
}

impl OracleReport {
    pub fn is_clean(&self) -> bool {
        self.read_mismatches == 0
            && self.exactness_failures == 0
            && self.replica_failures == 0
            && self.reduce_mismatches == 0
            && self.races == 0
    }

    pub(crate) fn note(&mut self, msg: String) {
        if self.notes.len() < 16 {
            self.notes.push(msg);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ElemKind;

    #[test]
    fn flows_follow_last_writer() {
        let meta = HDArrayMeta::new("B", ElemKind::Float64, &[4, 4]).unwrap();
        let mut w = ShadowWorld::new(2);
        let a = w.add_array(meta);
        let rows = |a: i64, b: i64| Section::new(&[(a, b), (0, 4)]).unwrap();
        let regions = vec![rows(0, 2), rows(2, 4)];
        w.apply(&TraceOp::Write {
            array: a,
            regions: regions.clone(),
            data: Arc::new((0..16).map(f64::from).collect()),
        })
        .unwrap();
        let full = vec![Section::new(&[(0, 4), (0, 4)]).unwrap(); 2];
        let s = w
            .apply(&TraceOp::Read {
                array: a,
                regions: full.clone(),
            })
            .unwrap();
        assert_eq!(s.flows[&a][&(0, 1)], (0..8).collect::<Vec<_>>());
        assert_eq!(s.flows[&a][&(1, 0)], (8..16).collect::<Vec<_>>());
        let again = w.apply(&TraceOp::Read { array: a, regions: full }).unwrap();
        assert!(again.flows[&a].is_empty());
        assert_eq!(w.last_writer(a)[0], Some(0));
        assert_eq!(w.last_writer(a)[15], Some(1));
    }

    #[test]
    fn verify_reads_counts_mismatches() {
        let r = |bits| ReadRecord {
            array: 0,
            offset: 0,
            bits,
        };
        let rep = verify_reads(&[vec![r(1), r(2)]], &[vec![r(1), r(3)]]);
        assert_eq!((rep.checked, rep.mismatches), (2, 1));
        let rep = verify_reads(&[vec![r(1)]], &[vec![r(1), r(3)]]);
        assert_eq!(rep.mismatches, 1);
    }
}
