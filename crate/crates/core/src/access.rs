//! Access declarations and their translation into per-process LUSE/LDEF sets.

use std::collections::HashMap;
use std::fmt;

use crate::error::{Error, Result};
use crate::model::PartitionId;
use crate::sections::{Section, SectionSet};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Offset {
    Fixed(i64),
    /// Every index of the dimension.
    Star,
}

/// Per-dimension access offsets relative to a work item, e.g. `(0,*)`.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct OffsetTuple(pub Vec<Offset>);

impl OffsetTuple {
    pub fn zero(ndim: usize) -> Self {
        OffsetTuple(vec![Offset::Fixed(0); ndim])
    }

    pub fn arity(&self) -> usize {
        self.0.len()
    }
}

impl fmt::Display for OffsetTuple {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("(")?;
        for (i, o) in self.0.iter().enumerate() {
            if i > 0 {
                f.write_str(",")?;
            }
            match o {
                Offset::Fixed(d) => write!(f, "{d}")?,
                Offset::Star => f.write_str("*")?,
            }
        }
        f.write_str(")")
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum AccessPattern {
    Offsets(Vec<OffsetTuple>),
    /// `use@` / `def@`: sections come from the absolute store.
    Absolute,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum AccessKind {
    Use,
    Def,
}

impl AccessKind {
    pub fn as_str(self) -> &'static str {
        match self {
            AccessKind::Use => "use",
            AccessKind::Def => "def",
        }
    }
}

/// How one kernel touches one of its array parameters.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ArrayAccess {
    pub array: String,
    pub uses: Option<AccessPattern>,
    pub defs: Option<AccessPattern>,
}

impl ArrayAccess {
    pub fn pattern(&self, kind: AccessKind) -> Option<&AccessPattern> {
        match kind {
            AccessKind::Use => self.uses.as_ref(),
            AccessKind::Def => self.defs.as_ref(),
        }
    }
}

/// Use/def declaration of one kernel, arrays in order of first mention.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct AccessDecl {
    pub kernel: String,
    pub arrays: Vec<ArrayAccess>,
}

impl AccessDecl {
    pub fn new(kernel: &str) -> Self {
        AccessDecl {
            kernel: kernel.to_string(),
            arrays: Vec::new(),
        }
    }

    pub fn array(&self, name: &str) -> Option<&ArrayAccess> {
        self.arrays.iter().find(|a| a.array == name)
    }

    fn entry(&mut self, name: &str) -> &mut ArrayAccess {
        if let Some(i) = self.arrays.iter().position(|a| a.array == name) {
            return &mut self.arrays[i];
        }
        self.arrays.push(ArrayAccess {
            array: name.to_string(),
            uses: None,
            defs: None,
        });
        self.arrays.last_mut().unwrap()
    }

    /// Add an offset clause. Mixing offsets and absolute mode for the same
    /// array and access kind is rejected.
    pub fn add_offsets(&mut self, kind: AccessKind, name: &str, tuple: OffsetTuple) -> Result<(), String> {
        let slot = match kind {
            AccessKind::Use => &mut self.entry(name).uses,
            AccessKind::Def => &mut self.entry(name).defs,
        };
        match slot {
            None => *slot = Some(AccessPattern::Offsets(vec![tuple])),
            Some(AccessPattern::Offsets(v)) => {
                if let Some(first) = v.first() {
                    if first.arity() != tuple.arity() {
                        return Err(format!("offset arity mismatch for `{name}`"));
                    }
                }
                v.push(tuple)
            }
            Some(AccessPattern::Absolute) => {
                return Err(format!("`{name}` mixes {}@ with offset clauses", kind.as_str()))
            }
        }
        Ok(())
    }

    pub fn add_absolute(&mut self, kind: AccessKind, name: &str) -> Result<(), String> {
        let slot = match kind {
            AccessKind::Use => &mut self.entry(name).uses,
            AccessKind::Def => &mut self.entry(name).defs,
        };
        match slot {
            None | Some(AccessPattern::Absolute) => *slot = Some(AccessPattern::Absolute),
            Some(AccessPattern::Offsets(_)) => {
                return Err(format!("`{name}` mixes {}@ with offset clauses", kind.as_str()))
            }
        }
        Ok(())
    }
}

/// Compose offset tuples with a work region. Fixed offsets shift and clamp
/// to the array bounds, `*` expands to the whole dimension.
pub fn derive_local_set(offsets: &[OffsetTuple], region: &Section, shape: &[usize]) -> Result<SectionSet> {
    let ndim = shape.len();
    if region.ndim() != ndim {
        return Err(Error::Arity {
            expected: ndim,
            got: region.ndim(),
        });
    }
    if region.is_empty() {
        return Ok(SectionSet::empty(ndim));
    }
    let mut raw = Vec::with_capacity(offsets.len());
    for t in offsets {
        if t.arity() != ndim {
            return Err(Error::Arity {
                expected: ndim,
                got: t.arity(),
            });
        }
        let mut s = *region;
        for (d, o) in t.0.iter().enumerate() {
            let extent = shape[d] as i64;
            s = match o {
                Offset::Fixed(by) => s.shifted_clamped(d, *by, extent),
                Offset::Star => s.with_dim(d, 0, extent),
            };
        }
        raw.push(s);
    }
    Ok(SectionSet::canonicalize(ndim, raw)?)
}

/// A `(row, col)` corner of a trapezoid, inclusive.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Corner {
    pub row: i64,
    pub col: i64,
}

impl Corner {
    pub fn new(row: i64, col: i64) -> Self {
        Corner { row, col }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Trapezoid {
    pub upper_left: Corner,
    pub upper_right: Corner,
    pub lower_left: Corner,
    pub lower_right: Corner,
}

impl Trapezoid {
    /// One `[r, r+1) x [left(r), right(r)+1)` strip per row, with both edges
    /// floor-interpolated between the top and bottom corners.
    pub fn rasterize(&self) -> Result<SectionSet> {
        let (ul, ur, bl, br) = (self.upper_left, self.upper_right, self.lower_left, self.lower_right);
        if ul.row != ur.row || bl.row != br.row {
            return Err(Error::BadTrapezoid("top and bottom corners must share a row".into()));
        }
        if ul.row > bl.row {
            return Err(Error::BadTrapezoid(format!("upper row {} below lower row {}", ul.row, bl.row)));
        }
        if ul.col > ur.col || bl.col > br.col {
            return Err(Error::BadTrapezoid("left corner right of right corner".into()));
        }
        if ul.row < 0 || ul.col < 0 || bl.col < 0 {
            return Err(Error::BadTrapezoid("negative corner".into()));
        }
        let height = bl.row - ul.row;
        let interp = |top: i64, bottom: i64, r: i64| -> i64 {
            if height == 0 {
                top
            } else {
                top + ((bottom - top) * (r - ul.row)).div_euclid(height)
            }
        };
        let mut strips = Vec::new();
        for r in ul.row..=bl.row {
            let left = interp(ul.col, bl.col, r);
            let right = interp(ur.col, br.col, r);
            strips.push(Section::new(&[(r, r + 1), (left, right + 1)])?);
        }
        Ok(SectionSet::canonicalize(2, strips)?)
    }
}

#[derive(Debug, Clone)]
pub(crate) struct AbsoluteEntry {
    pub sections: SectionSet,
    pub stamp: u64,
}

/// Absolute LUSE/LDEF sections keyed by (kernel, partition, array, device, kind).
#[derive(Debug, Default, Clone)]
pub struct AbsoluteStore {
    entries: HashMap<(String, PartitionId, String, usize, AccessKind), AbsoluteEntry>,
}

impl AbsoluteStore {
    pub(crate) fn set(
        &mut self,
        key: (String, PartitionId, String, usize, AccessKind),
        sections: SectionSet,
        stamp: u64,
    ) {
        self.entries.insert(key, AbsoluteEntry { sections, stamp });
    }

    pub fn get(
        &self,
        kernel: &str,
        partition: PartitionId,
        array: &str,
        device: usize,
        kind: AccessKind,
    ) -> Option<&SectionSet> {
        self.entry(kernel, partition, array, device, kind).map(|e| &e.sections)
    }

    pub(crate) fn entry(
        &self,
        kernel: &str,
        partition: PartitionId,
        array: &str,
        device: usize,
        kind: AccessKind,
    ) -> Option<&AbsoluteEntry> {
        self.entries
            .get(&(kernel.to_string(), partition, array.to_string(), device, kind))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn s2(a: i64, b: i64, c: i64, d: i64) -> Section {
        Section::new(&[(a, b), (c, d)]).unwrap()
    }

    fn t(v: &[Option<i64>]) -> OffsetTuple {
        OffsetTuple(v.iter().map(|o| o.map_or(Offset::Star, Offset::Fixed)).collect())
    }

    #[test]
    fn identity_offset() {
        let got = derive_local_set(&[t(&[Some(0), Some(0)])], &s2(0, 2, 0, 4), &[4, 4]).unwrap();
        assert_eq!(got.sections(), &[s2(0, 2, 0, 4)]);
    }

    #[test]
    fn star_offset_row() {
        let got = derive_local_set(&[t(&[Some(0), None])], &s2(2, 4, 0, 4), &[4, 4]).unwrap();
        assert_eq!(got.sections(), &[s2(2, 4, 0, 4)]);
    }

    #[test]
    fn jacobi_cross() {
        let offs = [
            t(&[Some(0), Some(-1)]),
            t(&[Some(0), Some(1)]),
            t(&[Some(-1), Some(0)]),
            t(&[Some(1), Some(0)]),
        ];
        let got = derive_local_set(&offs, &s2(1, 3, 1, 3), &[4, 4]).unwrap();
        let expect = SectionSet::canonicalize(2, [s2(0, 4, 1, 3), s2(1, 3, 0, 4)]).unwrap();
        assert_eq!(got, expect);
        assert_eq!(got.volume(), 12);
    }

    #[test]
    fn clamps_to_bounds() {
        let got = derive_local_set(&[t(&[Some(-5), Some(0)])], &s2(0, 2, 0, 4), &[4, 4]).unwrap();
        assert!(got.is_empty());
        let got = derive_local_set(&[t(&[Some(1), Some(0)])], &s2(2, 4, 0, 4), &[4, 4]).unwrap();
        assert_eq!(got.sections(), &[s2(3, 4, 0, 4)]);
    }

    #[test]
    fn arity_mismatch() {
        assert!(derive_local_set(&[t(&[Some(0)])], &s2(0, 2, 0, 4), &[4, 4]).is_err());
    }

    #[test]
    fn trapezoid_square_and_triangle() {
        let sq = Trapezoid {
            upper_left: Corner::new(0, 0),
            upper_right: Corner::new(0, 3),
            lower_left: Corner::new(3, 0),
            lower_right: Corner::new(3, 3),
        };
        assert_eq!(sq.rasterize().unwrap().sections(), &[s2(0, 4, 0, 4)]);

        let tri = Trapezoid {
            upper_left: Corner::new(0, 0),
            upper_right: Corner::new(0, 0),
            lower_left: Corner::new(3, 0),
            lower_right: Corner::new(3, 3),
        };
        let set = tri.rasterize().unwrap();
        assert_eq!(set.volume(), 10);
        for r in 0..4 {
            let width = set.points().filter(|p| p[0] == r).count();
            assert_eq!(width as i64, r + 1);
        }

        let bad = Trapezoid {
            upper_left: Corner::new(4, 0),
            upper_right: Corner::new(4, 1),
            lower_left: Corner::new(3, 0),
            lower_right: Corner::new(3, 1),
        };
        assert!(bad.rasterize().is_err());
    }

    #[test]
    fn decl_rejects_mixed_modes() {
        let mut d = AccessDecl::new("k");
        d.add_absolute(AccessKind::Use, "A").unwrap();
        assert!(d.add_offsets(AccessKind::Use, "A", OffsetTuple::zero(2)).is_err());
        d.add_offsets(AccessKind::Def, "A", OffsetTuple::zero(2)).unwrap();
        assert_eq!(d.arrays.len(), 1);
    }
}
