use std::fmt;
use std::sync::Arc;

use crate::model::HDArrayMeta;

/// A rejected access from inside a kernel body.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AccessError {
    pub slot: usize,
    pub index: Vec<i64>,
    pub op: &'static str,
    pub set: &'static str,
}

/// One value read through a checked accessor, in execution order.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ReadRecord {
    pub array: usize,
    pub offset: usize,
    pub bits: u64,
}

pub type KernelBody = dyn Fn(&[i64], &mut ItemCtx<'_>) -> Result<(), AccessError> + Send + Sync;

/// A simulated device kernel: named array parameters plus an element-wise body
/// invoked once per work item.
#[derive(Clone)]
pub struct KernelFunction {
    slots: Vec<String>,
    body: Arc<KernelBody>,
}

impl KernelFunction {
    pub fn new<F>(slots: &[&str], body: F) -> Self
    where
        F: Fn(&[i64], &mut ItemCtx<'_>) -> Result<(), AccessError> + Send + Sync + 'static,
    {
        KernelFunction {
            slots: slots.iter().map(|s| s.to_string()).collect(),
            body: Arc::new(body),
        }
    }

    pub fn slots(&self) -> &[String] {
        &self.slots
    }

    pub fn slot(&self, name: &str) -> Option<usize> {
        self.slots.iter().position(|s| s == name)
    }

    pub fn invoke(&self, item: &[i64], ctx: &mut ItemCtx<'_>) -> Result<(), AccessError> {
        (self.body)(item, ctx)
    }
}

impl fmt::Debug for KernelFunction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("KernelFunction").field("slots", &self.slots).finish()
    }
}

/// Buffer view for one distinct array touched by a kernel call.
pub(crate) struct BufView<'a> {
    pub id: usize,
    pub meta: &'a HDArrayMeta,
    pub data: &'a mut [f64],
    /// `None` disables checking.
    pub use_mask: Option<&'a [bool]>,
    pub def_mask: Option<&'a [bool]>,
}

/// Accessors handed to a kernel body for one process.
pub struct ItemCtx<'a> {
    bufs: Vec<BufView<'a>>,
    slot_buf: &'a [usize],
    scalars: &'a [f64],
    log: Option<&'a mut Vec<ReadRecord>>,
}

impl<'a> ItemCtx<'a> {
    pub(crate) fn new(
        bufs: Vec<BufView<'a>>,
        slot_buf: &'a [usize],
        scalars: &'a [f64],
        log: Option<&'a mut Vec<ReadRecord>>,
    ) -> Self {
        ItemCtx {
            bufs,
            slot_buf,
            scalars,
            log,
        }
    }

    fn locate(&self, slot: usize, idx: &[i64], op: &'static str) -> Result<(usize, usize), AccessError> {
        let err = |set| AccessError {
            slot,
            index: idx.to_vec(),
            op,
            set,
        };
        let b = *self.slot_buf.get(slot).ok_or_else(|| err("parameter list"))?;
        let meta = self.bufs[b].meta;
        if !meta.in_bounds(idx) {
            return Err(err("array bounds"));
        }
        Ok((b, meta.linear(idx)))
    }

    pub fn read(&mut self, slot: usize, idx: &[i64]) -> Result<f64, AccessError> {
        let (b, off) = self.locate(slot, idx, "read")?;
        let view = &self.bufs[b];
        if let Some(m) = view.use_mask {
            if !m.get(off).copied().unwrap_or(false) {
                return Err(AccessError {
                    slot,
                    index: idx.to_vec(),
                    op: "read",
                    set: "LUSE",
                });
            }
        }
        let v = view.data[off];
        if let Some(log) = self.log.as_deref_mut() {
            log.push(ReadRecord {
                array: view.id,
                offset: off,
                bits: v.to_bits(),
            });
        }
        Ok(v)
    }

    pub fn write(&mut self, slot: usize, idx: &[i64], v: f64) -> Result<(), AccessError> {
        let (b, off) = self.locate(slot, idx, "write")?;
        let view = &mut self.bufs[b];
        if let Some(m) = view.def_mask {
            if !m.get(off).copied().unwrap_or(false) {
                return Err(AccessError {
                    slot,
                    index: idx.to_vec(),
                    op: "write",
                    set: "LDEF",
                });
            }
        }
        view.data[off] = view.meta.kind.normalize(v);
        Ok(())
    }

    pub fn shape(&self, slot: usize) -> &[usize] {
        &self.bufs[self.slot_buf[slot]].meta.shape
    }

    pub fn extent(&self, slot: usize, dim: usize) -> i64 {
        self.shape(slot)[dim] as i64
    }

    pub fn scalar_or(&self, i: usize, default: f64) -> f64 {
        self.scalars.get(i).copied().unwrap_or(default)
    }

    pub fn scalars(&self) -> &[f64] {
        self.scalars
    }
}
