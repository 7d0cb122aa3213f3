//! Per-process HDArray state: buffers, freshness tracking, replicated GDEF
//! tables, and the partition table.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::sections::{Section, SectionSet, MAX_DIMS};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ElemKind {
    Float32,
    Float64,
    Int32,
    Int64,
}

impl ElemKind {
    pub fn bytes(self) -> u64 {
        match self {
            ElemKind::Float32 | ElemKind::Int32 => 4,
            ElemKind::Float64 | ElemKind::Int64 => 8,
        }
    }

    /// Round a value to what this element type can hold.
    pub fn normalize(self, v: f64) -> f64 {
        match self {
            ElemKind::Float32 => v as f32 as f64,
            ElemKind::Float64 => v,
            ElemKind::Int32 => v as i32 as f64,
            ElemKind::Int64 => v as i64 as f64,
        }
    }
}

impl FromStr for ElemKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "float32" | "float" => Ok(ElemKind::Float32),
            "float64" | "double" => Ok(ElemKind::Float64),
            "int32" | "int" => Ok(ElemKind::Int32),
            "int64" | "long" => Ok(ElemKind::Int64),
            other => Err(format!("unknown element kind `{other}`")),
        }
    }
}

impl fmt::Display for ElemKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ElemKind::Float32 => "float32",
            ElemKind::Float64 => "float64",
            ElemKind::Int32 => "int32",
            ElemKind::Int64 => "int64",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HDArrayMeta {
    pub name: String,
    pub kind: ElemKind,
    pub shape: Vec<usize>,
}

impl HDArrayMeta {
    pub fn new(name: &str, kind: ElemKind, shape: &[usize]) -> Result<Self> {
        if shape.is_empty() || shape.len() > MAX_DIMS || shape.contains(&0) {
            return Err(Error::BadShape(shape.to_vec()));
        }
        Ok(HDArrayMeta {
            name: name.to_string(),
            kind,
            shape: shape.to_vec(),
        })
    }

    pub fn ndim(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn full(&self) -> Section {
        Section::full(&self.shape).expect("validated shape")
    }

    /// Row-major linear offset of an in-bounds index.
    pub fn linear(&self, idx: &[i64]) -> usize {
        let mut off = 0usize;
        for (d, &e) in self.shape.iter().enumerate() {
            off = off * e + idx[d] as usize;
        }
        off
    }

    pub fn in_bounds(&self, idx: &[i64]) -> bool {
        idx.len() == self.shape.len() && idx.iter().zip(&self.shape).all(|(&i, &e)| i >= 0 && (i as usize) < e)
    }
}

/// Identifier handed out by the partition calls.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct PartitionId(pub u32);

impl fmt::Display for PartitionId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "part{}", self.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PartitionKind {
    Row,
    Col,
    Block,
}

impl FromStr for PartitionKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "ROW" => Ok(PartitionKind::Row),
            "COL" => Ok(PartitionKind::Col),
            "BLOCK" => Ok(PartitionKind::Block),
            other => Err(format!("unknown partition kind `{other}`")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Partition {
    pub domain: Vec<usize>,
    /// One work region per device; empty regions get no work.
    pub regions: Vec<Section>,
}

impl Partition {
    pub fn region(&self, p: usize) -> &Section {
        &self.regions[p]
    }

    pub fn coverage(&self) -> SectionSet {
        SectionSet::canonicalize(self.domain.len(), self.regions.iter().copied()).expect("uniform dims")
    }
}

#[derive(Debug, Default, Clone)]
pub struct PartitionTable {
    entries: Vec<Partition>,
}

impl PartitionTable {
    pub fn get(&self, id: PartitionId) -> Result<&Partition> {
        self.entries.get(id.0 as usize).ok_or(Error::UnknownPartition(id.0))
    }

    fn insert(&mut self, p: Partition) -> PartitionId {
        self.entries.push(p);
        PartitionId(self.entries.len() as u32 - 1)
    }

    /// Split `region` evenly over `nprocs` devices along rows, columns, or a
    /// near-square process grid. Remainder cells go one each to the lowest ranks.
    pub fn partition_auto(
        &mut self,
        kind: PartitionKind,
        domain: &[usize],
        region: Section,
        nprocs: usize,
    ) -> Result<PartitionId> {
        check_within(domain, &region)?;
        if region.is_empty() {
            return Err(Error::BadPartition(format!("empty region {region}")));
        }
        if kind != PartitionKind::Row && domain.len() < 2 {
            return Err(Error::BadPartition(format!("{kind:?} needs a domain of at least 2 dimensions")));
        }
        let regions = match kind {
            PartitionKind::Row => split_even(region.lb(0), region.ub(0), nprocs)
                .into_iter()
                .map(|(lb, ub)| region.with_dim(0, lb, ub))
                .collect(),
            PartitionKind::Col => split_even(region.lb(1), region.ub(1), nprocs)
                .into_iter()
                .map(|(lb, ub)| region.with_dim(1, lb, ub))
                .collect(),
            PartitionKind::Block => {
                let (pr, pc) = process_grid(nprocs);
                let rows = split_even(region.lb(0), region.ub(0), pr);
                let cols = split_even(region.lb(1), region.ub(1), pc);
                (0..nprocs)
                    .map(|r| {
                        let (i, j) = (r / pc, r % pc);
                        region.with_dim(0, rows[i].0, rows[i].1).with_dim(1, cols[j].0, cols[j].1)
                    })
                    .collect()
            }
        };
        Ok(self.insert(Partition {
            domain: domain.to_vec(),
            regions,
        }))
    }

    /// Install explicit per-device regions. Devices past the end of `regions`
    /// get an empty region; coverage of the domain may be partial.
    pub fn partition_manual(&mut self, domain: &[usize], regions: &[Section], nprocs: usize) -> Result<PartitionId> {
        if domain.is_empty() || domain.len() > MAX_DIMS {
            return Err(Error::BadShape(domain.to_vec()));
        }
        if regions.len() > nprocs {
            return Err(Error::UnknownDevice {
                device: regions.len() - 1,
                nprocs,
            });
        }
        for r in regions {
            if r.ndim() != domain.len() {
                return Err(Error::Arity {
                    expected: domain.len(),
                    got: r.ndim(),
                });
            }
            check_within(domain, r)?;
        }
        for i in 0..regions.len() {
            for j in i + 1..regions.len() {
                if regions[i].intersect(&regions[j]).is_some() {
                    return Err(Error::PartitionOverlap(i, j));
                }
            }
        }
        let empty = Section::new(&vec![(0, 0); domain.len()])?;
        let mut all = regions.to_vec();
        all.resize(nprocs, empty);
        Ok(self.insert(Partition {
            domain: domain.to_vec(),
            regions: all,
        }))
    }
}

fn check_within(domain: &[usize], region: &Section) -> Result<()> {
    let ok = region.ndim() == domain.len()
        && (region.is_empty()
            || (0..domain.len()).all(|d| region.lb(d) >= 0 && region.ub(d) <= domain[d] as i64));
    if ok {
        Ok(())
    } else {
        Err(Error::OutOfBounds {
            region: *region,
            domain: domain.to_vec(),
        })
    }
}

pub(crate) fn split_even(lo: i64, hi: i64, parts: usize) -> Vec<(i64, i64)> {
    let n = (hi - lo).max(0);
    let parts_i = parts as i64;
    let (base, rem) = (n / parts_i, n % parts_i);
    let mut out = Vec::with_capacity(parts);
    let mut at = lo;
    for r in 0..parts_i {
        let len = base + i64::from(r < rem);
        out.push((at, at + len));
        at += len;
    }
    out
}

/// `(rows, cols)` with `rows * cols == n` and `rows` the largest divisor not above sqrt(n).
pub(crate) fn process_grid(n: usize) -> (usize, usize) {
    let mut rows = 1;
    let mut r = 1;
    while r * r <= n {
        if n.is_multiple_of(r) {
            rows = r;
        }
        r += 1;
    }
    (rows, n / rows)
}

/// One replica of the global coherence tables of an array: `send(p, q)` is
/// sGDEF of `p` toward `q`, `recv(p, q)` is rGDEF of `p` from `q`.
/// Diagonal entries stay empty.
#[derive(Clone, PartialEq, Eq)]
pub struct GdefTable {
    nprocs: usize,
    send: Vec<SectionSet>,
    recv: Vec<SectionSet>,
}

impl GdefTable {
    pub fn new(nprocs: usize, ndim: usize) -> Self {
        GdefTable {
            nprocs,
            send: vec![SectionSet::empty(ndim); nprocs * nprocs],
            recv: vec![SectionSet::empty(ndim); nprocs * nprocs],
        }
    }

    pub fn nprocs(&self) -> usize {
        self.nprocs
    }

    pub fn send(&self, p: usize, q: usize) -> &SectionSet {
        &self.send[p * self.nprocs + q]
    }

    pub fn recv(&self, p: usize, q: usize) -> &SectionSet {
        &self.recv[p * self.nprocs + q]
    }

    pub(crate) fn send_mut(&mut self, p: usize, q: usize) -> &mut SectionSet {
        &mut self.send[p * self.nprocs + q]
    }

    pub(crate) fn recv_mut(&mut self, p: usize, q: usize) -> &mut SectionSet {
        &mut self.recv[p * self.nprocs + q]
    }

    /// Linear-time comparison of two canonical replicas.
    pub fn equals(&self, other: &GdefTable) -> bool {
        self.nprocs == other.nprocs
            && self.send.iter().zip(&other.send).all(|(a, b)| a.equals(b))
            && self.recv.iter().zip(&other.recv).all(|(a, b)| a.equals(b))
    }

    /// Every `send(p, q)` mirrored exactly by `recv(q, p)`.
    pub fn is_mirrored(&self) -> bool {
        (0..self.nprocs).all(|p| (0..self.nprocs).all(|q| self.send(p, q).equals(self.recv(q, p))))
    }

    /// Cells anyone still has to send, i.e. cells whose coherent copy is remote to someone.
    pub fn pending_from(&self, p: usize) -> impl Iterator<Item = &SectionSet> {
        (0..self.nprocs).map(move |q| self.send(p, q))
    }
}

impl fmt::Debug for GdefTable {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mut m = f.debug_map();
        for p in 0..self.nprocs {
            for q in 0..self.nprocs {
                if !self.send(p, q).is_empty() {
                    m.entry(&format!("s{p}->{q}"), self.send(p, q));
                }
            }
        }
        m.finish()
    }
}

/// What one virtual process holds for one array.
#[derive(Debug, Clone)]
pub struct ProcessArrayState {
    pub host: Vec<f64>,
    pub device: Vec<f64>,
    /// Latest value lives only in the device buffer.
    pub device_fresh: SectionSet,
    /// Latest value lives only in the host buffer (received, not yet staged).
    pub host_fresh: SectionSet,
    /// This process's replica of the global tables.
    pub tables: GdefTable,
}

impl ProcessArrayState {
    pub fn new(meta: &HDArrayMeta, nprocs: usize) -> Self {
        ProcessArrayState {
            host: vec![0.0; meta.len()],
            device: vec![0.0; meta.len()],
            device_fresh: SectionSet::empty(meta.ndim()),
            host_fresh: SectionSet::empty(meta.ndim()),
            tables: GdefTable::new(nprocs, meta.ndim()),
        }
    }

    /// Value of a cell as this process currently knows it.
    pub fn latest(&self, meta: &HDArrayMeta, idx: &[i64]) -> f64 {
        let off = meta.linear(idx);
        if self.host_fresh.contains_point(idx) {
            self.host[off]
        } else {
            self.device[off]
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn s2(a: i64, b: i64, c: i64, d: i64) -> Section {
        Section::new(&[(a, b), (c, d)]).unwrap()
    }

    #[test]
    fn row_split_even() {
        let mut t = PartitionTable::default();
        let id = t.partition_auto(PartitionKind::Row, &[8, 8], s2(0, 8, 0, 8), 4).unwrap();
        let p = t.get(id).unwrap();
        assert_eq!(
            p.regions,
            vec![s2(0, 2, 0, 8), s2(2, 4, 0, 8), s2(4, 6, 0, 8), s2(6, 8, 0, 8)]
        );
    }

    #[test]
    fn row_split_remainder_to_low_ranks() {
        let mut t = PartitionTable::default();
        let id = t.partition_auto(PartitionKind::Row, &[10, 3], s2(0, 10, 0, 3), 4).unwrap();
        let counts: Vec<i64> = t.get(id).unwrap().regions.iter().map(|r| r.extent(0)).collect();
        assert_eq!(counts, vec![3, 3, 2, 2]);
        assert_eq!(counts.iter().sum::<i64>(), 10);
    }

    #[test]
    fn col_and_block() {
        let mut t = PartitionTable::default();
        let id = t.partition_auto(PartitionKind::Col, &[4, 6], s2(0, 4, 0, 6), 3).unwrap();
        assert_eq!(t.get(id).unwrap().regions[1], s2(0, 4, 2, 4));

        let id = t.partition_auto(PartitionKind::Block, &[8, 8], s2(0, 8, 0, 8), 4).unwrap();
        let p = t.get(id).unwrap();
        assert_eq!(p.regions, vec![s2(0, 4, 0, 4), s2(0, 4, 4, 8), s2(4, 8, 0, 4), s2(4, 8, 4, 8)]);
        assert_eq!(process_grid(8), (2, 4));
        assert_eq!(process_grid(7), (1, 7));
    }

    #[test]
    fn auto_errors() {
        let mut t = PartitionTable::default();
        let one_d = Section::new(&[(0, 8)]).unwrap();
        assert!(t.partition_auto(PartitionKind::Col, &[8], one_d, 2).is_err());
        assert!(t.partition_auto(PartitionKind::Block, &[8], one_d, 2).is_err());
        assert!(t.partition_auto(PartitionKind::Row, &[8, 8], s2(0, 0, 0, 8), 2).is_err());
        assert!(t.partition_auto(PartitionKind::Row, &[8, 8], s2(0, 9, 0, 8), 2).is_err());
    }

    #[test]
    fn manual_listing_geometry() {
        let mut t = PartitionTable::default();
        let id = t
            .partition_manual(&[10240, 10240], &[s2(0, 3008, 0, 10240), s2(3008, 7232, 0, 10240)], 2)
            .unwrap();
        let p = t.get(id).unwrap();
        assert_eq!(p.coverage().volume(), 7232 * 10240);

        let overlap = t.partition_manual(&[8, 8], &[s2(0, 5, 0, 8), s2(4, 8, 0, 8)], 2);
        assert!(matches!(overlap, Err(Error::PartitionOverlap(0, 1))));

        let id = t.partition_manual(&[8, 8], &[s2(0, 0, 0, 0), s2(0, 8, 0, 8)], 2).unwrap();
        assert!(t.get(id).unwrap().regions[0].is_empty());

        assert!(t.partition_manual(&[8, 8], &[s2(0, 9, 0, 8)], 2).is_err());
    }

    #[test]
    fn meta_validation() {
        assert!(HDArrayMeta::new("a", ElemKind::Float32, &[4, 0]).is_err());
        assert!(HDArrayMeta::new("a", ElemKind::Float32, &[1, 1, 1, 1]).is_err());
        let m = HDArrayMeta::new("a", ElemKind::Float32, &[2, 3, 4]).unwrap();
        assert_eq!(m.len(), 24);
        assert_eq!(m.linear(&[1, 2, 3]), 23);
    }

    #[test]
    fn normalize_by_kind() {
        assert_eq!(ElemKind::Int32.normalize(2.7), 2.0);
        assert_eq!(ElemKind::Float32.normalize(0.1), 0.1f32 as f64);
        assert_eq!(ElemKind::Float64.normalize(0.1), 0.1);
    }
}
