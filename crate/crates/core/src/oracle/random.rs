//! Seeded random programs for differential testing against the shadow oracle.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::access::{AccessDecl, AccessKind, Offset, OffsetTuple};
use crate::error::{Error, Result};
use crate::model::{ElemKind, PartitionId, PartitionKind};
use crate::runtime::{CommStats, KernelFunction, ReduceOp, Runtime, RuntimeConfig};
use crate::sections::Section;

use super::OracleReport;

#[derive(Debug, Clone)]
pub struct KernelSpec {
    pub name: String,
    /// array index and offset of the single definition
    pub def: (usize, OffsetTuple),
    pub uses: Vec<(usize, OffsetTuple)>,
}

#[derive(Debug, Clone)]
pub enum PartSpec {
    Auto { kind: PartitionKind, region: Section },
    /// One region per device, pairwise disjoint, possibly empty.
    Manual(Vec<Section>),
}

#[derive(Debug, Clone)]
pub enum ProgOp {
    Write { array: usize, part: usize, seed: u64 },
    Call { kernel: usize, part: usize },
    Read { array: usize, part: usize },
    Reduce { array: usize, op: ReduceOp, part: usize },
}

/// A random program over arrays of one common shape.
#[derive(Debug, Clone)]
pub struct RandomProgram {
    pub nprocs: usize,
    pub shape: Vec<usize>,
    pub arrays: Vec<(String, ElemKind)>,
    pub kernels: Vec<KernelSpec>,
    pub partitions: Vec<PartSpec>,
    pub ops: Vec<ProgOp>,
}

/// Everything observable from one run.
#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub reads: Vec<Vec<f64>>,
    pub reductions: Vec<f64>,
    pub finals: Vec<Vec<f64>>,
    pub stats: CommStats,
    pub report: Option<OracleReport>,
}

fn rand_offset<R: Rng>(rng: &mut R, ndim: usize, star: bool) -> OffsetTuple {
    OffsetTuple(
        (0..ndim)
            .map(|_| {
                if star && rng.gen_bool(0.2) {
                    Offset::Star
                } else {
                    Offset::Fixed(rng.gen_range(-2..=2))
                }
            })
            .collect(),
    )
}

fn rand_subrange<R: Rng>(rng: &mut R, n: usize) -> (i64, i64) {
    if rng.gen_bool(0.5) {
        return (0, n as i64);
    }
    let lb = rng.gen_range(0..n);
    let ub = rng.gen_range(lb + 1..=n);
    (lb as i64, ub as i64)
}

/// Row bands cut at random points, dealt to devices in random order, each
/// with a random column range. Some devices get nothing.
fn rand_manual<R: Rng>(rng: &mut R, shape: &[usize], nprocs: usize) -> Vec<Section> {
    let mut cuts: Vec<i64> = (0..nprocs.saturating_sub(1))
        .map(|_| rng.gen_range(0..=shape[0] as i64))
        .collect();
    cuts.push(0);
    cuts.push(shape[0] as i64);
    cuts.sort_unstable();
    let mut order: Vec<usize> = (0..nprocs).collect();
    order.shuffle(rng);
    let empty = Section::new(&vec![(0, 0); shape.len()]).expect("valid bounds");
    let mut regions = vec![empty; nprocs];
    for (band, &dev) in order.iter().enumerate() {
        let (lb, ub) = (cuts[band], cuts[band + 1]);
        if lb == ub || rng.gen_bool(0.15) {
            continue;
        }
        let mut bounds = vec![(lb, ub)];
        for &n in &shape[1..] {
            bounds.push(rand_subrange(rng, n));
        }
        regions[dev] = Section::new(&bounds).expect("valid bounds");
    }
    regions
}

/// Deterministic fill used by `Write` ops.
pub fn fill_values(len: usize, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..len).map(|_| rng.gen_range(-4.0..4.0)).collect()
}

impl RandomProgram {
    pub fn generate(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let nprocs = *[1usize, 2, 4, 8].choose(&mut rng).unwrap();
        let ndim = rng.gen_range(1..=2);
        let shape: Vec<usize> = (0..ndim).map(|_| rng.gen_range(1..=32)).collect();
        let narrays = rng.gen_range(1..=4);
        let arrays: Vec<(String, ElemKind)> = (0..narrays)
            .map(|i| {
                let kind = if rng.gen_bool(0.25) { ElemKind::Float32 } else { ElemKind::Float64 };
                (format!("X{i}"), kind)
            })
            .collect();

        let nkernels = rng.gen_range(1..=4);
        let kernels = (0..nkernels)
            .map(|i| {
                let d = rng.gen_range(0..narrays);
                let def_t = rand_offset(&mut rng, ndim, false);
                let mut uses = Vec::new();
                for _ in 0..rng.gen_range(0..=3) {
                    let a = rng.gen_range(0..narrays);
                    if a == d {
                        uses.push((a, def_t.clone()));
                    } else {
                        uses.push((a, rand_offset(&mut rng, ndim, true)));
                    }
                }
                KernelSpec {
                    name: format!("k{i}"),
                    def: (d, def_t),
                    uses,
                }
            })
            .collect();

        let mut partitions = Vec::new();
        for _ in 0..rng.gen_range(1..=3) {
            if rng.gen_bool(0.3) {
                partitions.push(PartSpec::Manual(rand_manual(&mut rng, &shape, nprocs)));
                continue;
            }
            let kind = if ndim == 1 {
                PartitionKind::Row
            } else {
                *[PartitionKind::Row, PartitionKind::Col, PartitionKind::Block]
                    .choose(&mut rng)
                    .unwrap()
            };
            let bounds: Vec<(i64, i64)> = shape.iter().map(|&n| rand_subrange(&mut rng, n)).collect();
            partitions.push(PartSpec::Auto {
                kind,
                region: Section::new(&bounds).expect("valid bounds"),
            });
        }

        let np = partitions.len();
        let mut ops = Vec::new();
        let mut calls = 0;
        while calls < 25 && ops.len() < 40 {
            let part = rng.gen_range(0..np);
            match rng.gen_range(0..10) {
                0 => ops.push(ProgOp::Write {
                    array: rng.gen_range(0..narrays),
                    part,
                    seed: rng.gen(),
                }),
                1 => ops.push(ProgOp::Read {
                    array: rng.gen_range(0..narrays),
                    part,
                }),
                2 => ops.push(ProgOp::Reduce {
                    array: rng.gen_range(0..narrays),
                    op: *[ReduceOp::Sum, ReduceOp::Max, ReduceOp::Min].choose(&mut rng).unwrap(),
                    part,
                }),
                _ => {
                    // repeat the same call sometimes so the plan cache sees tight loops
                    let kernel = rng.gen_range(0..nkernels);
                    for _ in 0..rng.gen_range(1..=3) {
                        ops.push(ProgOp::Call { kernel, part });
                        calls += 1;
                    }
                }
            }
        }
        RandomProgram {
            nprocs,
            shape,
            arrays,
            kernels,
            partitions,
            ops,
        }
    }

    fn decl(&self, k: &KernelSpec) -> AccessDecl {
        let mut d = AccessDecl::new(&k.name);
        d.add_offsets(AccessKind::Def, &self.arrays[k.def.0].0, k.def.1.clone())
            .expect("uniform arity");
        for (a, t) in &k.uses {
            d.add_offsets(AccessKind::Use, &self.arrays[*a].0, t.clone())
                .expect("uniform arity");
        }
        d
    }

    fn kernel_fn(&self, k: &KernelSpec) -> KernelFunction {
        let mut slots: Vec<usize> = vec![k.def.0];
        for (a, _) in &k.uses {
            if !slots.contains(a) {
                slots.push(*a);
            }
        }
        let names: Vec<&str> = slots.iter().map(|&a| self.arrays[a].0.as_str()).collect();
        let def = k.def.1.clone();
        let uses: Vec<(usize, OffsetTuple)> = k
            .uses
            .iter()
            .map(|(a, t)| (slots.iter().position(|s| s == a).unwrap(), t.clone()))
            .collect();
        let shape = self.shape.clone();
        KernelFunction::new(&names, move |w, cx| {
            let nd = w.len();
            let salt: i64 = w.iter().sum();
            let mut acc = 0.125 * (salt % 5) as f64;
            for (slot, t) in &uses {
                let idx: Vec<i64> = (0..nd)
                    .map(|d| match t.0[d] {
                        Offset::Fixed(o) => w[d] + o,
                        Offset::Star => (salt * 7 + 3 * d as i64).rem_euclid(shape[d] as i64),
                    })
                    .collect();
                if idx.iter().zip(&shape).all(|(&i, &n)| i >= 0 && i < n as i64) {
                    acc += 0.3 * cx.read(*slot, &idx)?;
                }
            }
            let out: Vec<i64> = (0..nd)
                .map(|d| match def.0[d] {
                    Offset::Fixed(o) => w[d] + o,
                    Offset::Star => unreachable!("definitions never use *"),
                })
                .collect();
            if out.iter().zip(&shape).all(|(&i, &n)| i >= 0 && i < n as i64) {
                cx.write(0, &out, acc)?;
            }
            Ok(())
        })
    }

    /// Build a runtime for this program and execute every op.
    pub fn run(&self, mut config: RuntimeConfig) -> Result<RunOutcome> {
        config.nprocs = self.nprocs;
        let decls = self.kernels.iter().map(|k| self.decl(k)).collect();
        let mut rt = Runtime::new(decls, config)?;
        for k in &self.kernels {
            rt.register_kernel(&k.name, self.kernel_fn(k))?;
        }
        for (name, kind) in &self.arrays {
            rt.create(name, *kind, &self.shape)?;
        }
        let pids: Vec<PartitionId> = self
            .partitions
            .iter()
            .map(|p| match p {
                PartSpec::Auto { kind, region } => rt.partition_auto(*kind, &self.shape, region),
                PartSpec::Manual(regions) => rt.partition_manual(&self.shape, regions),
            })
            .collect::<Result<_>>()?;
        let len: usize = self.shape.iter().product();
        let mut out = RunOutcome {
            reads: Vec::new(),
            reductions: Vec::new(),
            finals: Vec::new(),
            stats: CommStats::default(),
            report: None,
        };
        for op in &self.ops {
            match op {
                ProgOp::Write { array, part, seed } => {
                    rt.write(&self.arrays[*array].0, &fill_values(len, *seed), pids[*part])?
                }
                ProgOp::Call { kernel, part } => rt.apply_kernel(&self.kernels[*kernel].name, pids[*part], &[], &[])?,
                ProgOp::Read { array, part } => out.reads.push(rt.read(&self.arrays[*array].0, pids[*part])?),
                ProgOp::Reduce { array, op, part } => match rt.reduce(&self.arrays[*array].0, *op, pids[*part]) {
                    Ok(v) => out.reductions.push(v),
                    // a manual partition may leave every device idle
                    Err(Error::EmptyReduction(_)) => out.reductions.push(f64::NAN),
                    Err(e) => return Err(e),
                },
            }
        }
        for (name, _) in &self.arrays {
            out.finals.push(rt.gather(name)?);
        }
        out.stats = rt.stats();
        out.report = rt.oracle_report().cloned();
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn generation_is_deterministic() {
        let a = RandomProgram::generate(7);
        let b = RandomProgram::generate(7);
        assert_eq!(format!("{a:?}"), format!("{b:?}"));
    }

    #[test]
    fn a_few_programs_are_clean() {
        for seed in 0..20 {
            let prog = RandomProgram::generate(seed);
            let mut cfg = RuntimeConfig::new(prog.nprocs);
            cfg.oracle = true;
            let out = prog.run(cfg).unwrap();
            let rep = out.report.unwrap();
            assert!(rep.is_clean(), "seed {seed}: {:?}", rep);
        }
    }
}
