//! The coherence engine: SENDMSG/RECVMSG planning, host/device staging, and
//! GDEF maintenance.
//!
//! For an ordered pair of processes `(p, q)` and a call `k` following `l`:
//!
//! ```text
//! SENDMSG[p,q](k) = sGDEF[p,q](l) ∩ LUSE[q](k)
//! RECVMSG[p,q](k) = rGDEF[p,q](l) ∩ LUSE[p](k)
//! sGDEF[p,q](k)   = (sGDEF[p,q](l) - SENDMSG[p,q](k) - LDEF[others of p](k)) ∪ LDEF[p](k)
//! rGDEF[p,q](k)   = (rGDEF[p,q](l) - RECVMSG[p,q](k) - LDEF[others of q](k)) ∪ LDEF[q](k)
//! ```
//!
//! The `LDEF[others]` term retires a stale copy as soon as another process
//! redefines the cell, so that each cell has at most one sender per column.

use std::fmt;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::model::{ElemKind, GdefTable};
use crate::sections::SectionSet;

/// Per-process LUSE and LDEF of one array for one call, with the version
/// stamps the plan cache keys on.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LocalSets {
    pub luse: Vec<SectionSet>,
    pub ldef: Vec<SectionSet>,
    pub luse_stamp: Option<u64>,
    pub ldef_stamp: Option<u64>,
}

impl LocalSets {
    pub fn empty(nprocs: usize, ndim: usize) -> Self {
        LocalSets {
            luse: vec![SectionSet::empty(ndim); nprocs],
            ldef: vec![SectionSet::empty(ndim); nprocs],
            luse_stamp: None,
            ldef_stamp: None,
        }
    }

    pub fn uses_anything(&self) -> bool {
        self.luse.iter().any(|s| !s.is_empty())
    }

    pub fn defines_anything(&self) -> bool {
        self.ldef.iter().any(|s| !s.is_empty())
    }
}

/// SENDMSG and RECVMSG of one array for every ordered pair of processes.
#[derive(Clone, PartialEq, Eq)]
pub struct ArrayExchange {
    nprocs: usize,
    sends: Vec<SectionSet>,
    recvs: Vec<SectionSet>,
}

impl ArrayExchange {
    pub fn empty(nprocs: usize, ndim: usize) -> Self {
        ArrayExchange {
            nprocs,
            sends: vec![SectionSet::empty(ndim); nprocs * nprocs],
            recvs: vec![SectionSet::empty(ndim); nprocs * nprocs],
        }
    }

    /// Assemble from per-process rows `(sends to q, receives from q)`, checking
    /// that every send is mirrored by the matching receive.
    pub fn from_rows(rows: Vec<(Vec<SectionSet>, Vec<SectionSet>)>) -> Result<Self> {
        let nprocs = rows.len();
        let mut sends = Vec::with_capacity(nprocs * nprocs);
        let mut recvs = Vec::with_capacity(nprocs * nprocs);
        for (s, r) in rows {
            debug_assert_eq!(s.len(), nprocs);
            sends.extend(s);
            recvs.extend(r);
        }
        let x = ArrayExchange { nprocs, sends, recvs };
        for p in 0..nprocs {
            for q in 0..nprocs {
                if !x.send(p, q).equals(x.recv(q, p)) {
                    return Err(Error::Incoherent(format!(
                        "send {p}->{q} {} does not match receive {}",
                        x.send(p, q),
                        x.recv(q, p)
                    )));
                }
            }
        }
        Ok(x)
    }

    pub fn nprocs(&self) -> usize {
        self.nprocs
    }

    /// SENDMSG from `p` to `q`.
    pub fn send(&self, p: usize, q: usize) -> &SectionSet {
        &self.sends[p * self.nprocs + q]
    }

    /// RECVMSG of `p` from `q`.
    pub fn recv(&self, p: usize, q: usize) -> &SectionSet {
        &self.recvs[p * self.nprocs + q]
    }

    pub fn is_empty(&self) -> bool {
        self.sends.iter().all(SectionSet::is_empty)
    }

    /// Nonempty messages as `(src, dst, sections)` in rank order.
    pub fn messages(&self) -> impl Iterator<Item = (usize, usize, &SectionSet)> {
        (0..self.nprocs).flat_map(move |p| {
            (0..self.nprocs).filter_map(move |q| {
                let s = self.send(p, q);
                (!s.is_empty()).then_some((p, q, s))
            })
        })
    }

    /// Union of everything `p` sends.
    pub fn outgoing(&self, p: usize) -> Result<SectionSet> {
        union_all(self.send(p, 0).ndim(), (0..self.nprocs).map(|q| self.send(p, q)))
    }

    /// Union of everything `p` receives.
    pub fn incoming(&self, p: usize) -> Result<SectionSet> {
        union_all(self.recv(p, 0).ndim(), (0..self.nprocs).map(|q| self.recv(p, q)))
    }
}

impl fmt::Debug for ArrayExchange {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mut m = f.debug_map();
        for (p, q, s) in self.messages() {
            m.entry(&format!("{p}->{q}"), s);
        }
        m.finish()
    }
}

pub(crate) fn union_all<'a>(ndim: usize, sets: impl IntoIterator<Item = &'a SectionSet>) -> Result<SectionSet> {
    let mut raw = Vec::new();
    for s in sets {
        if s.ndim() != ndim {
            return Err(crate::sections::SectionError::DimMismatch(ndim, s.ndim()).into());
        }
        raw.extend(s.iter().copied());
    }
    Ok(SectionSet::canonicalize(ndim, raw)?)
}

/// The part of the plan process `p` computes from its own replica:
/// what it sends to each peer and what it receives from each peer.
pub fn plan_rows(table: &GdefTable, p: usize, luse: &[SectionSet]) -> Result<(Vec<SectionSet>, Vec<SectionSet>)> {
    let n = table.nprocs();
    let mut sends = Vec::with_capacity(n);
    let mut recvs = Vec::with_capacity(n);
    for q in 0..n {
        if q == p {
            sends.push(SectionSet::empty(luse[p].ndim()));
            recvs.push(SectionSet::empty(luse[p].ndim()));
            continue;
        }
        sends.push(table.send(p, q).intersect(&luse[q])?);
        recvs.push(table.recv(p, q).intersect(&luse[p])?);
    }
    Ok((sends, recvs))
}

/// SENDMSG/RECVMSG for every pair, evaluated against a single replica.
pub fn plan_messages(table: &GdefTable, luse: &[SectionSet]) -> Result<ArrayExchange> {
    let rows = (0..table.nprocs())
        .map(|p| plan_rows(table, p, luse))
        .collect::<Result<Vec<_>>>()?;
    ArrayExchange::from_rows(rows)
}

/// Apply the post-call GDEF update to one replica.
pub fn apply_gdef_update(table: &mut GdefTable, exchange: &ArrayExchange, ldef: &[SectionSet]) -> Result<()> {
    let n = table.nprocs();
    let ndim = ldef.first().map_or(1, SectionSet::ndim);
    let any_def = ldef.iter().any(|s| !s.is_empty());
    // cells defined in this call by anyone other than p
    let others: Vec<SectionSet> = if any_def {
        (0..n)
            .map(|p| union_all(ndim, (0..n).filter(|&s| s != p).map(|s| &ldef[s])))
            .collect::<Result<_>>()?
    } else {
        vec![SectionSet::empty(ndim); n]
    };
    for p in 0..n {
        for q in 0..n {
            if p == q {
                continue;
            }
            let sent = exchange.send(p, q);
            let entry = table.send_mut(p, q);
            if !sent.is_empty() || entry.intersects(&others[p]) || !ldef[p].is_empty() {
                *entry = entry.subtract(sent)?.subtract(&others[p])?.union(&ldef[p])?;
            }
            let got = exchange.recv(p, q);
            let entry = table.recv_mut(p, q);
            if !got.is_empty() || entry.intersects(&others[q]) || !ldef[q].is_empty() {
                *entry = entry.subtract(got)?.subtract(&others[q])?.union(&ldef[q])?;
            }
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Pattern {
    None,
    PointToPoint,
    AllGather,
}

impl fmt::Display for Pattern {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Pattern::None => "none",
            Pattern::PointToPoint => "point-to-point",
            Pattern::AllGather => "all-gather",
        })
    }
}

/// All-gather when every process sends one identical nonempty contribution
/// to every other process; point-to-point for any other nonempty exchange.
pub fn classify(x: &ArrayExchange) -> Pattern {
    if x.is_empty() {
        return Pattern::None;
    }
    let n = x.nprocs();
    if n < 2 {
        return Pattern::PointToPoint;
    }
    let all_gather = (0..n).all(|p| {
        let first = if p == 0 { x.send(p, 1) } else { x.send(p, 0) };
        !first.is_empty() && (0..n).filter(|&q| q != p).all(|q| x.send(p, q).equals(first))
    });
    if all_gather {
        Pattern::AllGather
    } else {
        Pattern::PointToPoint
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct ByteTotals {
    pub messages: u64,
    pub inter_process: u64,
    pub host_device: u64,
}

/// Full plan for one array in one call: the (cacheable) exchange plus the
/// staging that depends on where fresh data currently lives.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ArrayPlan {
    pub array: String,
    pub kind: ElemKind,
    pub exchange: Arc<ArrayExchange>,
    pub pattern: Pattern,
    pub stage_to_host: Vec<SectionSet>,
    pub stage_to_device: Vec<SectionSet>,
}

impl ArrayPlan {
    pub fn bytes(&self) -> ByteTotals {
        byte_account(self)
    }
}

/// Inter-process bytes are summed over messages, host-device bytes over both
/// staging directions.
pub fn byte_account(plan: &ArrayPlan) -> ByteTotals {
    let eb = plan.kind.bytes();
    let mut t = ByteTotals::default();
    for (_, _, s) in plan.exchange.messages() {
        t.messages += 1;
        t.inter_process += s.volume() * eb;
    }
    t.host_device = plan
        .stage_to_host
        .iter()
        .chain(&plan.stage_to_device)
        .map(|s| s.volume() * eb)
        .sum();
    t
}

/// Staging for one array: which device-resident cells must reach the host
/// before sending, and which host-resident cells must reach the device before
/// the kernel reads them.
pub fn plan_staging(
    exchange: &ArrayExchange,
    luse: &[SectionSet],
    device_fresh: &[&SectionSet],
    host_fresh: &[&SectionSet],
) -> Result<(Vec<SectionSet>, Vec<SectionSet>)> {
    let n = exchange.nprocs();
    let mut to_host = Vec::with_capacity(n);
    let mut to_device = Vec::with_capacity(n);
    for p in 0..n {
        to_host.push(device_fresh[p].intersect(&exchange.outgoing(p)?)?);
        to_device.push(host_fresh[p].union(&exchange.incoming(p)?)?.intersect(&luse[p])?);
    }
    Ok((to_host, to_device))
}

/// Whole-call plan across arrays.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MessagePlan {
    pub k: u64,
    pub kernel: String,
    pub arrays: Vec<ArrayPlan>,
}

impl MessagePlan {
    /// One `k=<idx> array=<name> <src>-><dst> sections=<syntax> bytes=<n>` line per message.
    pub fn trace_lines(&self) -> Vec<String> {
        let mut out = Vec::new();
        for a in &self.arrays {
            for (p, q, s) in a.exchange.messages() {
                out.push(format!(
                    "k={} array={} {}->{} sections={} bytes={}",
                    self.k,
                    a.array,
                    p,
                    q,
                    s,
                    s.volume() * a.kind.bytes()
                ));
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sections::Section;

    fn s2(a: i64, b: i64, c: i64, d: i64) -> SectionSet {
        SectionSet::from_section(Section::new(&[(a, b), (c, d)]).unwrap())
    }

    fn e() -> SectionSet {
        SectionSet::empty(2)
    }

    /// 2 procs, ROW halves of a 4x4 array, both halves written locally.
    fn written_halves() -> GdefTable {
        let mut t = GdefTable::new(2, 2);
        let none = plan_messages(&t, &[e(), e()]).unwrap();
        apply_gdef_update(&mut t, &none, &[s2(0, 2, 0, 4), s2(2, 4, 0, 4)]).unwrap();
        t
    }

    #[test]
    fn first_kernel_after_create_is_empty() {
        let t = GdefTable::new(3, 2);
        let full = s2(0, 4, 0, 4);
        let x = plan_messages(&t, &[full.clone(), full.clone(), full]).unwrap();
        assert!(x.is_empty());
        assert_eq!(classify(&x), Pattern::None);
    }

    #[test]
    fn write_as_local_definition() {
        let t = written_halves();
        assert_eq!(t.send(0, 1), &s2(0, 2, 0, 4));
        assert_eq!(t.recv(0, 1), &s2(2, 4, 0, 4));
        assert!(t.is_mirrored());
    }

    #[test]
    fn intersection_is_sent() {
        // P0 holds rows [0,2); P1 uses rows [1,3) -> only row 1 moves.
        let t = written_halves();
        let x = plan_messages(&t, &[s2(0, 2, 0, 4), s2(1, 3, 0, 4)]).unwrap();
        assert_eq!(x.send(0, 1), &s2(1, 2, 0, 4));
        assert!(x.send(1, 0).is_empty());
        assert_eq!(classify(&x), Pattern::PointToPoint);
    }

    #[test]
    fn gemm_b_is_all_gather_then_drained() {
        let mut t = written_halves();
        // use(B,(*,0)) over ROW halves covers the whole array on both procs
        let luse = [s2(0, 4, 0, 4), s2(0, 4, 0, 4)];
        let x = plan_messages(&t, &luse).unwrap();
        assert_eq!(x.send(0, 1), &s2(0, 2, 0, 4));
        assert_eq!(x.send(1, 0), &s2(2, 4, 0, 4));
        assert_eq!(classify(&x), Pattern::AllGather);

        apply_gdef_update(&mut t, &x, &[e(), e()]).unwrap();
        assert!(t.send(0, 1).is_empty() && t.send(1, 0).is_empty());
        assert!(plan_messages(&t, &luse).unwrap().is_empty());
    }

    #[test]
    fn no_comm_ldef_grows_gdef() {
        let mut t = GdefTable::new(3, 2);
        let x = plan_messages(&t, &[e(), e(), e()]).unwrap();
        apply_gdef_update(&mut t, &x, &[s2(0, 1, 0, 4), e(), e()]).unwrap();
        assert_eq!(t.send(0, 1), &s2(0, 1, 0, 4));
        assert_eq!(t.send(0, 2), &s2(0, 1, 0, 4));
        assert!(t.send(1, 2).is_empty());
    }

    #[test]
    fn redefinition_retires_stale_sender() {
        let mut t = written_halves();
        // P1 now defines a row P0 used to own
        let x = plan_messages(&t, &[e(), e()]).unwrap();
        apply_gdef_update(&mut t, &x, &[e(), s2(1, 2, 0, 4)]).unwrap();
        assert_eq!(t.send(0, 1), &s2(0, 1, 0, 4));
        assert_eq!(t.send(1, 0), &s2(1, 4, 0, 4));
        assert!(t.is_mirrored());
    }

    #[test]
    fn byte_accounting() {
        let t = written_halves();
        let x = plan_messages(&t, &[e(), s2(0, 2, 0, 4)]).unwrap();
        let plan = ArrayPlan {
            array: "B".into(),
            kind: ElemKind::Float32,
            exchange: Arc::new(x),
            pattern: Pattern::PointToPoint,
            stage_to_host: vec![e(), e()],
            stage_to_device: vec![e(), e()],
        };
        assert_eq!(byte_account(&plan).inter_process, 32);
        assert_eq!(byte_account(&plan).messages, 1);
        let mp = MessagePlan {
            k: 3,
            kernel: "k".into(),
            arrays: vec![plan],
        };
        assert_eq!(mp.trace_lines(), vec!["k=3 array=B 0->1 sections=(0,2),(0,4) bytes=32"]);
    }

    #[test]
    fn mirror_mismatch_detected() {
        let rows = vec![(vec![e(), s2(0, 1, 0, 1)], vec![e(), e()]), (vec![e(), e()], vec![e(), e()])];
        assert!(ArrayExchange::from_rows(rows).is_err());
    }
}
