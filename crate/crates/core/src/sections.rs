//! Rectangular section algebra.
//!
//! A [`Section`] is an axis-aligned box of array indices with half-open
//! bounds `[lb, ub)` in each of its 1 to 3 dimensions. A [`SectionSet`] is a
//! collection of pairwise disjoint sections kept in a canonical form that
//! depends only on the cells covered, so two sets cover the same cells
//! exactly when their member lists are identical. That is what lets the
//! coherence engine compare GDEF snapshots with one linear scan.
//!
//! The canonical form is built in two steps:
//!
//! 1. slab decomposition: dimension 0 is cut into maximal runs over which
//!    the lower-dimensional cross-section stays constant, recursively;
//! 2. coalescing: pairs that agree in every dimension but one, and touch in
//!    that one, are merged until no such pair remains.
//!
//! Both steps are deterministic functions of coverage, so the result is too.

use std::cmp::Ordering;
use std::fmt;
use std::str::FromStr;

use thiserror::Error;

pub const MAX_DIMS: usize = 3;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum SectionError {
    #[error("dimensionality mismatch: {0} vs {1}")]
    DimMismatch(usize, usize),
    #[error("unsupported dimensionality {0} (expected 1..=3)")]
    BadDims(usize),
    #[error("inverted bounds [{lb}, {ub}) in dimension {dim}")]
    Inverted { dim: usize, lb: i64, ub: i64 },
    #[error("malformed section syntax: {0}")]
    Syntax(String),
}

/// Half-open box `[lb, ub)` per dimension.
#[derive(Clone, Copy, PartialEq, Eq, Hash)]
pub struct Section {
    ndim: u8,
    lb: [i64; MAX_DIMS],
    ub: [i64; MAX_DIMS],
}

impl Section {
    pub fn new(bounds: &[(i64, i64)]) -> Result<Self, SectionError> {
        if bounds.is_empty() || bounds.len() > MAX_DIMS {
            return Err(SectionError::BadDims(bounds.len()));
        }
        let mut s = Section {
            ndim: bounds.len() as u8,
            lb: [0; MAX_DIMS],
            ub: [0; MAX_DIMS],
        };
        for (d, &(lb, ub)) in bounds.iter().enumerate() {
            if lb > ub {
                return Err(SectionError::Inverted { dim: d, lb, ub });
            }
            s.lb[d] = lb;
            s.ub[d] = ub;
        }
        Ok(s)
    }

    /// The box `[0, e0) x [0, e1) ...` covering a whole array of `shape`.
    pub fn full(shape: &[usize]) -> Result<Self, SectionError> {
        let b: Vec<(i64, i64)> = shape.iter().map(|&e| (0, e as i64)).collect();
        Section::new(&b)
    }

    pub fn ndim(&self) -> usize {
        self.ndim as usize
    }

    pub fn lb(&self, d: usize) -> i64 {
        self.lb[d]
    }

    pub fn ub(&self, d: usize) -> i64 {
        self.ub[d]
    }

    pub fn bounds(&self) -> Vec<(i64, i64)> {
        (0..self.ndim()).map(|d| (self.lb[d], self.ub[d])).collect()
    }

    pub fn extent(&self, d: usize) -> i64 {
        self.ub[d] - self.lb[d]
    }

    pub fn is_empty(&self) -> bool {
        (0..self.ndim()).any(|d| self.lb[d] >= self.ub[d])
    }

    pub fn volume(&self) -> u64 {
        if self.is_empty() {
            return 0;
        }
        (0..self.ndim()).map(|d| self.extent(d) as u64).product()
    }

    pub fn contains_point(&self, idx: &[i64]) -> bool {
        idx.len() == self.ndim() && (0..self.ndim()).all(|d| idx[d] >= self.lb[d] && idx[d] < self.ub[d])
    }

    /// True when `other` lies entirely inside `self` (empty boxes are inside everything).
    pub fn contains(&self, other: &Section) -> bool {
        other.is_empty() || (0..self.ndim()).all(|d| self.lb[d] <= other.lb[d] && other.ub[d] <= self.ub[d])
    }

    /// Box intersection; `None` when the overlap has no cells.
    pub fn intersect(&self, other: &Section) -> Option<Section> {
        debug_assert_eq!(self.ndim, other.ndim);
        let mut out = *self;
        for d in 0..self.ndim() {
            out.lb[d] = self.lb[d].max(other.lb[d]);
            out.ub[d] = self.ub[d].min(other.ub[d]);
            if out.lb[d] >= out.ub[d] {
                return None;
            }
        }
        Some(out)
    }

    /// `self - other` as at most `2 * ndim` disjoint boxes.
    pub fn subtract(&self, other: &Section) -> Vec<Section> {
        let Some(cut) = self.intersect(other) else {
            return if self.is_empty() { Vec::new() } else { vec![*self] };
        };
        let mut pieces = Vec::new();
        let mut rest = *self;
        for d in 0..self.ndim() {
            if rest.lb[d] < cut.lb[d] {
                let mut p = rest;
                p.ub[d] = cut.lb[d];
                pieces.push(p);
                rest.lb[d] = cut.lb[d];
            }
            if cut.ub[d] < rest.ub[d] {
                let mut p = rest;
                p.lb[d] = cut.ub[d];
                pieces.push(p);
                rest.ub[d] = cut.ub[d];
            }
        }
        pieces
    }

    /// Shift dimension `d` by `by`, then clamp to `[0, extent)`.
    pub(crate) fn shifted_clamped(&self, d: usize, by: i64, extent: i64) -> Section {
        let mut s = *self;
        s.lb[d] = (self.lb[d] + by).clamp(0, extent);
        s.ub[d] = (self.ub[d] + by).clamp(0, extent);
        if s.lb[d] > s.ub[d] {
            s.ub[d] = s.lb[d];
        }
        s
    }

    pub(crate) fn with_dim(&self, d: usize, lb: i64, ub: i64) -> Section {
        let mut s = *self;
        s.lb[d] = lb;
        s.ub[d] = ub;
        s
    }

    /// Iterate every index in the box in row-major order.
    pub fn points(&self) -> SectionPoints {
        SectionPoints {
            sec: *self,
            cur: self.lb,
            done: self.is_empty(),
        }
    }

    /// Dimension-`d` bounds blanked out; used as a grouping key when coalescing.
    fn key_without(&self, d: usize) -> Section {
        self.with_dim(d, 0, 0)
    }
}

impl Ord for Section {
    fn cmp(&self, other: &Self) -> Ordering {
        self.ndim.cmp(&other.ndim).then_with(|| {
            for d in 0..self.ndim() {
                let c = self.lb[d].cmp(&other.lb[d]).then(self.ub[d].cmp(&other.ub[d]));
                if c != Ordering::Equal {
                    return c;
                }
            }
            Ordering::Equal
        })
    }
}

impl PartialOrd for Section {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl fmt::Display for Section {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for d in 0..self.ndim() {
            if d > 0 {
                f.write_str(",")?;
            }
            write!(f, "({},{})", self.lb[d], self.ub[d])?;
        }
        Ok(())
    }
}

impl fmt::Debug for Section {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for d in 0..self.ndim() {
            if d > 0 {
                f.write_str("x")?;
            }
            write!(f, "[{},{})", self.lb[d], self.ub[d])?;
        }
        Ok(())
    }
}

/// Parses the juxtaposed `(lb,ub),(lb,ub)` syntax. Whitespace is ignored.
impl FromStr for Section {
    type Err = SectionError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let compact: String = s.chars().filter(|c| !c.is_whitespace()).collect();
        let mut bounds = Vec::new();
        let mut rest = compact.as_str();
        loop {
            let inner = rest
                .strip_prefix('(')
                .ok_or_else(|| SectionError::Syntax(s.to_string()))?;
            let close = inner.find(')').ok_or_else(|| SectionError::Syntax(s.to_string()))?;
            let (lb, ub) = inner[..close]
                .split_once(',')
                .ok_or_else(|| SectionError::Syntax(s.to_string()))?;
            let lb: i64 = lb.parse().map_err(|_| SectionError::Syntax(s.to_string()))?;
            let ub: i64 = ub.parse().map_err(|_| SectionError::Syntax(s.to_string()))?;
            bounds.push((lb, ub));
            rest = &inner[close + 1..];
            if rest.is_empty() {
                break;
            }
            rest = rest.strip_prefix(',').ok_or_else(|| SectionError::Syntax(s.to_string()))?;
        }
        Section::new(&bounds)
    }
}

pub struct SectionPoints {
    sec: Section,
    cur: [i64; MAX_DIMS],
    done: bool,
}

impl Iterator for SectionPoints {
    type Item = [i64; MAX_DIMS];

    fn next(&mut self) -> Option<Self::Item> {
        if self.done {
            return None;
        }
        let out = self.cur;
        let n = self.sec.ndim();
        let mut d = n;
        loop {
            if d == 0 {
                self.done = true;
                break;
            }
            d -= 1;
            self.cur[d] += 1;
            if self.cur[d] < self.sec.ub[d] {
                break;
            }
            self.cur[d] = self.sec.lb[d];
        }
        Some(out)
    }
}

/// Canonical, disjoint, sorted collection of sections of one dimensionality.
#[derive(Clone, PartialEq, Eq, Hash)]
pub struct SectionSet {
    ndim: u8,
    sections: Vec<Section>,
}

impl SectionSet {
    pub fn empty(ndim: usize) -> Self {
        debug_assert!((1..=MAX_DIMS).contains(&ndim));
        SectionSet {
            ndim: ndim as u8,
            sections: Vec::new(),
        }
    }

    pub fn from_section(s: Section) -> Self {
        let mut out = SectionSet::empty(s.ndim());
        if !s.is_empty() {
            out.sections.push(s);
        }
        out
    }

    /// Build the canonical form of an arbitrary list of boxes (overlapping,
    /// unsorted and empty members allowed).
    pub fn canonicalize(ndim: usize, raw: impl IntoIterator<Item = Section>) -> Result<Self, SectionError> {
        if !(1..=MAX_DIMS).contains(&ndim) {
            return Err(SectionError::BadDims(ndim));
        }
        let mut boxes = Vec::new();
        for s in raw {
            if s.ndim() != ndim {
                return Err(SectionError::DimMismatch(ndim, s.ndim()));
            }
            if !s.is_empty() {
                boxes.push(s);
            }
        }
        Ok(SectionSet {
            ndim: ndim as u8,
            sections: canonical_form(boxes, ndim),
        })
    }

    pub fn ndim(&self) -> usize {
        self.ndim as usize
    }

    pub fn sections(&self) -> &[Section] {
        &self.sections
    }

    pub fn len(&self) -> usize {
        self.sections.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sections.is_empty()
    }

    pub fn iter(&self) -> std::slice::Iter<'_, Section> {
        self.sections.iter()
    }

    /// Number of cells covered.
    pub fn volume(&self) -> u64 {
        self.sections.iter().map(Section::volume).sum()
    }

    pub fn contains_point(&self, idx: &[i64]) -> bool {
        self.sections.iter().any(|s| s.contains_point(idx))
    }

    /// Smallest box enclosing every member, or `None` when empty.
    pub fn bounding_box(&self) -> Option<Section> {
        let first = *self.sections.first()?;
        Some(self.sections.iter().skip(1).fold(first, |mut acc, s| {
            for d in 0..self.ndim() {
                acc.lb[d] = acc.lb[d].min(s.lb[d]);
                acc.ub[d] = acc.ub[d].max(s.ub[d]);
            }
            acc
        }))
    }

    fn check_dims(&self, other: &SectionSet) -> Result<(), SectionError> {
        if self.ndim != other.ndim {
            return Err(SectionError::DimMismatch(self.ndim(), other.ndim()));
        }
        Ok(())
    }

    pub fn intersect(&self, other: &SectionSet) -> Result<SectionSet, SectionError> {
        self.check_dims(other)?;
        if self.is_empty() || other.is_empty() {
            return Ok(SectionSet::empty(self.ndim()));
        }
        let mut raw = Vec::new();
        for a in &self.sections {
            for b in &other.sections {
                if let Some(c) = a.intersect(b) {
                    raw.push(c);
                }
            }
        }
        if raw.is_empty() {
            return Ok(SectionSet::empty(self.ndim()));
        }
        SectionSet::canonicalize(self.ndim(), raw)
    }

    pub fn union(&self, other: &SectionSet) -> Result<SectionSet, SectionError> {
        self.check_dims(other)?;
        if other.is_empty() {
            return Ok(self.clone());
        }
        if self.is_empty() {
            return Ok(other.clone());
        }
        SectionSet::canonicalize(self.ndim(), self.sections.iter().chain(other.sections.iter()).copied())
    }

    pub fn subtract(&self, other: &SectionSet) -> Result<SectionSet, SectionError> {
        self.check_dims(other)?;
        if self.is_empty() || other.is_empty() {
            return Ok(self.clone());
        }
        let mut cur = self.sections.clone();
        let mut touched = false;
        for b in &other.sections {
            if !cur.iter().any(|a| a.intersect(b).is_some()) {
                continue;
            }
            touched = true;
            cur = cur.iter().flat_map(|a| a.subtract(b)).collect();
        }
        if !touched {
            return Ok(self.clone());
        }
        SectionSet::canonicalize(self.ndim(), cur)
    }

    pub fn intersects(&self, other: &SectionSet) -> bool {
        self.sections
            .iter()
            .any(|a| other.sections.iter().any(|b| a.intersect(b).is_some()))
    }

    /// Coverage equality in one parallel scan; both operands are canonical.
    pub fn equals(&self, other: &SectionSet) -> bool {
        self.ndim == other.ndim
            && self.sections.len() == other.sections.len()
            && self.sections.iter().zip(&other.sections).all(|(a, b)| a == b)
    }

    /// Every covered index in row-major order within each member.
    pub fn points(&self) -> impl Iterator<Item = [i64; MAX_DIMS]> + '_ {
        self.sections.iter().flat_map(Section::points)
    }
}

impl fmt::Debug for SectionSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_set().entries(self.sections.iter()).finish()
    }
}

/// `;`-separated member list, `{}` when empty.
impl fmt::Display for SectionSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.sections.is_empty() {
            return f.write_str("{}");
        }
        for (i, s) in self.sections.iter().enumerate() {
            if i > 0 {
                f.write_str(";")?;
            }
            write!(f, "{s}")?;
        }
        Ok(())
    }
}

fn canonical_form(boxes: Vec<Section>, ndim: usize) -> Vec<Section> {
    if boxes.is_empty() {
        return boxes;
    }
    let mut out = slabs(&boxes, 0, ndim);
    coalesce(&mut out, ndim);
    out.sort_unstable();
    out
}

/// Slab decomposition from dimension `d` onward. Returned boxes have the
/// bounds of dimensions `< d` zeroed so cross-sections compare by value.
fn slabs(boxes: &[Section], d: usize, ndim: usize) -> Vec<Section> {
    if d + 1 == ndim {
        let mut iv: Vec<(i64, i64)> = boxes.iter().map(|b| (b.lb[d], b.ub[d])).collect();
        iv.sort_unstable();
        let mut merged: Vec<(i64, i64)> = Vec::with_capacity(iv.len());
        for (lb, ub) in iv {
            match merged.last_mut() {
                Some(last) if lb <= last.1 => last.1 = last.1.max(ub),
                _ => merged.push((lb, ub)),
            }
        }
        let blank = Section {
            ndim: ndim as u8,
            lb: [0; MAX_DIMS],
            ub: [0; MAX_DIMS],
        };
        return merged.into_iter().map(|(lb, ub)| blank.with_dim(d, lb, ub)).collect();
    }

    let mut cuts: Vec<i64> = boxes.iter().flat_map(|b| [b.lb[d], b.ub[d]]).collect();
    cuts.sort_unstable();
    cuts.dedup();

    let mut out = Vec::new();
    // (run start, run end, cross-section) of the slab being extended
    let mut run: Option<(i64, i64, Vec<Section>)> = None;
    for w in cuts.windows(2) {
        let (lo, hi) = (w[0], w[1]);
        let active: Vec<Section> = boxes
            .iter()
            .filter(|b| b.lb[d] <= lo && b.ub[d] >= hi)
            .copied()
            .collect();
        let cross = if active.is_empty() { Vec::new() } else { slabs(&active, d + 1, ndim) };
        match &mut run {
            Some((_, end, c)) if *end == lo && *c == cross && !cross.is_empty() => *end = hi,
            _ => {
                if let Some((s, e, c)) = run.take() {
                    emit_slab(&mut out, d, s, e, &c);
                }
                if !cross.is_empty() {
                    run = Some((lo, hi, cross));
                }
            }
        }
    }
    if let Some((s, e, c)) = run {
        emit_slab(&mut out, d, s, e, &c);
    }
    out
}

fn emit_slab(out: &mut Vec<Section>, d: usize, lo: i64, hi: i64, cross: &[Section]) {
    out.extend(cross.iter().map(|c| c.with_dim(d, lo, hi)));
}

/// Merge pairs identical in all dimensions but one and touching in it,
/// repeated to a fixpoint.
fn coalesce(boxes: &mut Vec<Section>, ndim: usize) {
    if ndim == 1 {
        return;
    }
    loop {
        let mut changed = false;
        for d in 0..ndim {
            boxes.sort_unstable_by(|a, b| a.key_without(d).cmp(&b.key_without(d)).then(a.lb[d].cmp(&b.lb[d])));
            let mut merged: Vec<Section> = Vec::with_capacity(boxes.len());
            for b in boxes.drain(..) {
                if let Some(last) = merged.last_mut() {
                    if last.key_without(d) == b.key_without(d) && last.ub[d] == b.lb[d] {
                        last.ub[d] = b.ub[d];
                        changed = true;
                        continue;
                    }
                }
                merged.push(b);
            }
            *boxes = merged;
        }
        if !changed {
            break;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::BTreeSet;

    fn s1(a: i64, b: i64) -> Section {
        Section::new(&[(a, b)]).unwrap()
    }

    fn s2(a: i64, b: i64, c: i64, d: i64) -> Section {
        Section::new(&[(a, b), (c, d)]).unwrap()
    }

    fn set(ndim: usize, v: &[Section]) -> SectionSet {
        SectionSet::canonicalize(ndim, v.iter().copied()).unwrap()
    }

    fn cells(s: &SectionSet) -> BTreeSet<[i64; 3]> {
        s.points().collect()
    }

    #[test]
    fn intersect_examples() {
        let a = set(1, &[s1(0, 4)]);
        assert!(a.intersect(&SectionSet::empty(1)).unwrap().is_empty());

        let a = set(2, &[s2(0, 4, 0, 4)]);
        let b = set(2, &[s2(2, 6, 2, 6)]);
        assert_eq!(a.intersect(&b).unwrap().sections(), &[s2(2, 4, 2, 4)]);

        let a = set(2, &[s2(0, 3, 0, 8), s2(5, 8, 0, 8)]);
        let b = set(2, &[s2(2, 6, 3, 5)]);
        // bitset oracle on the 8x8 grid: cells in rows {2,5} x cols {3,4}
        assert_eq!(a.intersect(&b).unwrap().sections(), &[s2(2, 3, 3, 5), s2(5, 6, 3, 5)]);
    }

    #[test]
    fn union_examples() {
        let e = SectionSet::empty(1);
        assert_eq!(e.union(&set(1, &[s1(1, 2)])).unwrap().sections(), &[s1(1, 2)]);

        let u = set(2, &[s2(0, 2, 0, 4)]).union(&set(2, &[s2(2, 4, 0, 4)])).unwrap();
        assert_eq!(u.sections(), &[s2(0, 4, 0, 4)]);

        let u = set(2, &[s2(0, 3, 0, 3)]).union(&set(2, &[s2(1, 5, 1, 5)])).unwrap();
        // 3x3 + 4x4 minus the 2x2 overlap
        assert_eq!(u.volume(), 21);
    }

    #[test]
    fn subtract_examples() {
        assert!(set(1, &[s1(0, 4)]).subtract(&set(1, &[s1(0, 4)])).unwrap().is_empty());
        let ring = set(2, &[s2(0, 4, 0, 4)]).subtract(&set(2, &[s2(1, 3, 1, 3)])).unwrap();
        assert_eq!(ring.volume(), 12);
        assert_eq!(ring.len(), 4);
        assert_eq!(set(1, &[s1(0, 4)]).subtract(&SectionSet::empty(1)).unwrap().sections(), &[s1(0, 4)]);
    }

    #[test]
    fn canonicalize_examples() {
        assert_eq!(set(1, &[s1(2, 3), s1(0, 2)]).sections(), &[s1(0, 3)]);
        assert_eq!(set(1, &[s1(0, 4), s1(1, 3)]).sections(), &[s1(0, 4)]);
        assert!(set(1, &[s1(3, 3)]).is_empty());
    }

    #[test]
    fn canonical_form_is_coverage_determined() {
        // An L-shape assembled two different ways.
        let a = set(2, &[s2(0, 2, 0, 1), s2(0, 1, 1, 2)]);
        let b = set(2, &[s2(0, 1, 0, 2), s2(1, 2, 0, 1)]);
        assert!(a.equals(&b));
        assert_eq!(a, b);
    }

    #[test]
    fn no_coalescible_pairs_after_slabbing() {
        // slab cross-sections differ but share a member
        let a = set(2, &[s2(0, 2, 0, 2), s2(1, 2, 5, 6)]);
        assert_eq!(a.sections(), &[s2(0, 2, 0, 2), s2(1, 2, 5, 6)]);
    }

    #[test]
    fn volume_examples() {
        assert_eq!(SectionSet::empty(2).volume(), 0);
        assert_eq!(set(2, &[s2(0, 3, 0, 4)]).volume(), 12);
    }

    #[test]
    fn dim_mismatch_is_an_error() {
        let a = set(1, &[s1(0, 4)]);
        let b = set(2, &[s2(0, 4, 0, 4)]);
        assert_eq!(a.intersect(&b), Err(SectionError::DimMismatch(1, 2)));
        assert!(a.union(&b).is_err());
        assert!(a.subtract(&b).is_err());
        assert!(SectionSet::canonicalize(1, [s2(0, 1, 0, 1)]).is_err());
    }

    #[test]
    fn section_syntax() {
        let s: Section = "(0,3008),(0,10240)".parse().unwrap();
        assert_eq!(s, s2(0, 3008, 0, 10240));
        assert_eq!(s.to_string(), "(0,3008),(0,10240)");
        assert!("(0,1".parse::<Section>().is_err());
        assert!("(3,1)".parse::<Section>().is_err());
        assert!("(0,1),(0,1),(0,1),(0,1)".parse::<Section>().is_err());
        let s: Section = " (1, 2) , (3,4)".parse().unwrap();
        assert_eq!(s, s2(1, 2, 3, 4));
    }

    #[test]
    fn points_row_major() {
        let pts: Vec<_> = s2(0, 2, 5, 7).points().map(|p| (p[0], p[1])).collect();
        assert_eq!(pts, vec![(0, 5), (0, 6), (1, 5), (1, 6)]);
        assert_eq!(s2(0, 0, 0, 3).points().count(), 0);
    }

    #[test]
    fn three_dimensional_ops() {
        let a = set(3, &[Section::new(&[(0, 2), (0, 3), (0, 4)]).unwrap()]);
        let b = set(3, &[Section::new(&[(1, 3), (1, 2), (2, 6)]).unwrap()]);
        let u = a.union(&b).unwrap();
        let i = a.intersect(&b).unwrap();
        assert_eq!(u.volume() + i.volume(), a.volume() + b.volume());
        let mut expect = cells(&a);
        expect.extend(cells(&b));
        assert_eq!(cells(&u), expect);
    }
}
