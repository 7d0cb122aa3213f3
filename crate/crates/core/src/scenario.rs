//! Line-oriented scenario files driving the runtime, plus stats formatting.
//!
//! ```text
//! procs 4
//! array A float64 64x64
//! partition W auto ROW (0,64),(0,64)
//! partition M manual domain 64x64 dev:0 (0,19),(0,64) dev:1 (19,45),(0,64)
//! write A W rand:1
//! repeat 10
//!   call gemm W A=A B=B C=C 1.0
//! end
//! reduce C SUM W
//! read C W
//! absolute use corr_upper M data dev:0 (0,64),(0,64)
//! absolute use corr_mirror M symmat dev:1 (0,19),(19,45) trap:(19,20),(19,44),(43,44),(43,44)
//! trapezoid def corr_upper M symmat dev:0 (0,0) (0,63) (18,18) (18,63)
//! ```
//!
//! `#` starts a comment.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt::Write as _;

use crate::access::{AccessKind, Corner, Trapezoid};
use crate::error::{Error, Result};
use crate::model::{ElemKind, PartitionId, PartitionKind};
use crate::oracle::random::fill_values;
use crate::runtime::{CommStats, Counts, ReduceOp, Runtime, RuntimeConfig, Scheduler};
use crate::sections::Section;

#[derive(Debug, Clone, PartialEq)]
pub enum Fill {
    Zeros,
    Ones,
    Iota,
    Rand(u64),
}

impl Fill {
    pub fn values(&self, len: usize) -> Vec<f64> {
        match self {
            Fill::Zeros => vec![0.0; len],
            Fill::Ones => vec![1.0; len],
            Fill::Iota => (0..len).map(|i| i as f64).collect(),
            Fill::Rand(seed) => fill_values(len, *seed),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Stmt {
    Array {
        name: String,
        kind: ElemKind,
        shape: Vec<usize>,
    },
    PartitionAuto {
        name: String,
        kind: PartitionKind,
        region: Section,
        domain: Option<Vec<usize>>,
    },
    PartitionManual {
        name: String,
        domain: Option<Vec<usize>>,
        regions: Vec<(usize, Section)>,
    },
    Write {
        array: String,
        partition: String,
        fill: Fill,
    },
    Call {
        kernel: String,
        partition: String,
        bindings: Vec<(String, String)>,
        scalars: Vec<f64>,
    },
    Repeat {
        count: usize,
        body: Vec<(usize, Stmt)>,
    },
    Reduce {
        array: String,
        op: ReduceOp,
        partition: String,
    },
    Read {
        array: String,
        partition: String,
    },
    Absolute {
        kind: AccessKind,
        kernel: String,
        partition: String,
        array: String,
        sections: Vec<(usize, Vec<Section>)>,
    },
    Trapezoid {
        kind: AccessKind,
        kernel: String,
        partition: String,
        array: String,
        device: usize,
        shape: Trapezoid,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scenario {
    pub procs: Option<usize>,
    /// statements with their 1-based line numbers
    pub stmts: Vec<(usize, Stmt)>,
}

fn err(line: usize, msg: impl Into<String>) -> Error {
    Error::Scenario { line, msg: msg.into() }
}

fn parse_shape(line: usize, s: &str) -> Result<Vec<usize>> {
    s.split('x')
        .map(|d| d.parse::<usize>().map_err(|_| err(line, format!("bad shape `{s}`"))))
        .collect()
}

fn parse_section(line: usize, s: &str) -> Result<Section> {
    s.parse().map_err(|e| err(line, format!("bad section `{s}`: {e}")))
}

fn parse_kind(line: usize, s: &str) -> Result<AccessKind> {
    match s {
        "use" => Ok(AccessKind::Use),
        "def" => Ok(AccessKind::Def),
        _ => Err(err(line, format!("expected `use` or `def`, got `{s}`"))),
    }
}

fn parse_device(line: usize, s: &str) -> Result<Option<usize>> {
    match s.strip_prefix("dev:") {
        Some(d) => d
            .parse()
            .map(Some)
            .map_err(|_| err(line, format!("bad device `{s}`"))),
        None => Ok(None),
    }
}

fn parse_corner(line: usize, s: &str) -> Result<Corner> {
    let bad = || err(line, format!("bad corner `{s}`, expected (row,col)"));
    let inner = s.strip_prefix('(').and_then(|t| t.strip_suffix(')')).ok_or_else(bad)?;
    let (r, c) = inner.split_once(',').ok_or_else(bad)?;
    Ok(Corner::new(
        r.trim().parse().map_err(|_| bad())?,
        c.trim().parse().map_err(|_| bad())?,
    ))
}

/// `(r,c),(r,c),(r,c),(r,c)`: upper-left, upper-right, lower-left, lower-right.
fn parse_trap(line: usize, s: &str) -> Result<Trapezoid> {
    let bad = || err(line, format!("bad trapezoid `{s}`, expected four (row,col) corners"));
    let nums: Vec<i64> = s
        .split(['(', ')', ','])
        .filter(|t| !t.is_empty())
        .map(|t| t.parse().map_err(|_| bad()))
        .collect::<Result<_>>()?;
    if nums.len() != 8 {
        return Err(bad());
    }
    Ok(Trapezoid {
        upper_left: Corner::new(nums[0], nums[1]),
        upper_right: Corner::new(nums[2], nums[3]),
        lower_left: Corner::new(nums[4], nums[5]),
        lower_right: Corner::new(nums[6], nums[7]),
    })
}

/// `[domain AxB]` at the start of `toks`; returns the remaining tokens.
fn take_domain<'a>(line: usize, toks: &'a [&'a str]) -> Result<(Option<Vec<usize>>, &'a [&'a str])> {
    if toks.first() == Some(&"domain") {
        let s = toks.get(1).ok_or_else(|| err(line, "`domain` needs a shape"))?;
        Ok((Some(parse_shape(line, s)?), &toks[2..]))
    } else {
        Ok((None, toks))
    }
}

/// `dev:<i> <sections...>` groups.
fn device_groups(line: usize, toks: &[&str]) -> Result<Vec<(usize, Vec<Section>)>> {
    let mut out: Vec<(usize, Vec<Section>)> = Vec::new();
    for t in toks {
        if let Some(d) = parse_device(line, t)? {
            out.push((d, Vec::new()));
        } else {
            let last = out
                .last_mut()
                .ok_or_else(|| err(line, format!("section `{t}` before any dev:<i>")))?;
            match t.strip_prefix("trap:") {
                Some(spec) => {
                    let set = parse_trap(line, spec)?.rasterize().map_err(|e| err(line, e.to_string()))?;
                    last.1.extend(set.iter().copied());
                }
                None => last.1.push(parse_section(line, t)?),
            }
        }
    }
    Ok(out)
}

fn need(line: usize, toks: &[&str], n: usize, usage: &str) -> Result<()> {
    if toks.len() < n {
        Err(err(line, format!("usage: {usage}")))
    } else {
        Ok(())
    }
}

fn parse_stmt(line: usize, toks: &[&str]) -> Result<Stmt> {
    let rest = &toks[1..];
    Ok(match toks[0] {
        "array" => {
            need(line, rest, 3, "array <name> <float32|float64> <shape>")?;
            if rest.len() > 3 {
                return Err(err(line, "trailing tokens after array"));
            }
            Stmt::Array {
                name: rest[0].to_string(),
                kind: rest[1].parse().map_err(|e: String| err(line, e))?,
                shape: parse_shape(line, rest[2])?,
            }
        }
        "partition" => {
            need(line, rest, 2, "partition <name> auto|manual ...")?;
            let name = rest[0].to_string();
            match rest[1] {
                "auto" => {
                    need(line, rest, 4, "partition <name> auto <ROW|COL|BLOCK> <region> [domain AxB]")?;
                    let (domain, tail) = take_domain(line, &rest[4..])?;
                    if !tail.is_empty() {
                        return Err(err(line, format!("unexpected `{}`", tail[0])));
                    }
                    Stmt::PartitionAuto {
                        name,
                        kind: rest[2].parse().map_err(|e: String| err(line, e))?,
                        region: parse_section(line, rest[3])?,
                        domain,
                    }
                }
                "manual" => {
                    let (domain, tail) = take_domain(line, &rest[2..])?;
                    let mut regions = Vec::new();
                    for (d, secs) in device_groups(line, tail)? {
                        if secs.len() != 1 {
                            return Err(err(line, format!("dev:{d} needs exactly one region")));
                        }
                        regions.push((d, secs[0]));
                    }
                    Stmt::PartitionManual { name, domain, regions }
                }
                other => return Err(err(line, format!("unknown partition mode `{other}`"))),
            }
        }
        "write" => {
            need(line, rest, 3, "write <array> <partition> zeros|ones|iota|rand:<seed>")?;
            let fill = match rest[2] {
                "zeros" => Fill::Zeros,
                "ones" => Fill::Ones,
                "iota" => Fill::Iota,
                f => match f.strip_prefix("rand:").map(str::parse) {
                    Some(Ok(seed)) => Fill::Rand(seed),
                    _ => return Err(err(line, format!("unknown fill `{f}`"))),
                },
            };
            Stmt::Write {
                array: rest[0].to_string(),
                partition: rest[1].to_string(),
                fill,
            }
        }
        "call" => {
            need(line, rest, 2, "call <kernel> <partition> [formal=actual]... [scalar]...")?;
            let mut bindings = Vec::new();
            let mut scalars = Vec::new();
            for t in &rest[2..] {
                if let Some((f, a)) = t.split_once('=') {
                    bindings.push((f.to_string(), a.to_string()));
                } else {
                    scalars.push(t.parse().map_err(|_| err(line, format!("bad scalar `{t}`")))?);
                }
            }
            Stmt::Call {
                kernel: rest[0].to_string(),
                partition: rest[1].to_string(),
                bindings,
                scalars,
            }
        }
        "reduce" => {
            need(line, rest, 3, "reduce <array> <SUM|PROD|MAX|MIN> <partition>")?;
            Stmt::Reduce {
                array: rest[0].to_string(),
                op: rest[1].parse().map_err(|e: String| err(line, e))?,
                partition: rest[2].to_string(),
            }
        }
        "read" => {
            need(line, rest, 2, "read <array> <partition>")?;
            Stmt::Read {
                array: rest[0].to_string(),
                partition: rest[1].to_string(),
            }
        }
        "absolute" => {
            need(line, rest, 5, "absolute <use|def> <kernel> <partition> <array> dev:<i> <sections>...")?;
            Stmt::Absolute {
                kind: parse_kind(line, rest[0])?,
                kernel: rest[1].to_string(),
                partition: rest[2].to_string(),
                array: rest[3].to_string(),
                sections: device_groups(line, &rest[4..])?,
            }
        }
        "trapezoid" => {
            need(line, rest, 9, "trapezoid <use|def> <kernel> <partition> <array> dev:<i> UL UR BL BR")?;
            let device = parse_device(line, rest[4])?.ok_or_else(|| err(line, "expected dev:<i>"))?;
            Stmt::Trapezoid {
                kind: parse_kind(line, rest[0])?,
                kernel: rest[1].to_string(),
                partition: rest[2].to_string(),
                array: rest[3].to_string(),
                device,
                shape: Trapezoid {
                    upper_left: parse_corner(line, rest[5])?,
                    upper_right: parse_corner(line, rest[6])?,
                    lower_left: parse_corner(line, rest[7])?,
                    lower_right: parse_corner(line, rest[8])?,
                },
            }
        }
        other => return Err(err(line, format!("unknown statement `{other}`"))),
    })
}

/// Parse a scenario. `procs` may appear once, before any other statement.
pub fn parse_scenario(text: &str) -> Result<Scenario> {
    let mut procs = None;
    // stack of open `repeat` blocks: (line, count, body)
    let mut stack: Vec<(usize, usize, Vec<(usize, Stmt)>)> = vec![(0, 1, Vec::new())];
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let body = raw.split('#').next().unwrap_or("");
        let toks: Vec<&str> = body.split_whitespace().collect();
        if toks.is_empty() {
            continue;
        }
        match toks[0] {
            "procs" => {
                if procs.is_some() || stack.len() > 1 || !stack[0].2.is_empty() {
                    return Err(err(line, "`procs` must come first and only once"));
                }
                let n = toks
                    .get(1)
                    .and_then(|t| t.parse::<usize>().ok())
                    .filter(|&n| n >= 1)
                    .ok_or_else(|| err(line, "usage: procs <n>"))?;
                procs = Some(n);
            }
            "repeat" => {
                let n = toks
                    .get(1)
                    .and_then(|t| t.parse::<usize>().ok())
                    .ok_or_else(|| err(line, "usage: repeat <n>"))?;
                stack.push((line, n, Vec::new()));
            }
            "end" => {
                if stack.len() == 1 {
                    return Err(err(line, "`end` without `repeat`"));
                }
                let (start, count, body) = stack.pop().unwrap();
                stack.last_mut().unwrap().2.push((start, Stmt::Repeat { count, body }));
            }
            _ => {
                let s = parse_stmt(line, &toks)?;
                stack.last_mut().unwrap().2.push((line, s));
            }
        }
    }
    if stack.len() > 1 {
        return Err(err(stack.last().unwrap().0, "`repeat` without `end`"));
    }
    Ok(Scenario {
        procs,
        stmts: stack.pop().unwrap().2,
    })
}

#[derive(Debug, Clone)]
pub struct RunOptions {
    /// Overrides the scenario's `procs`.
    pub procs: Option<usize>,
    pub cache: bool,
    pub oracle: bool,
    pub scheduler: Scheduler,
    pub record: bool,
    pub check_replicas: bool,
}

impl Default for RunOptions {
    fn default() -> Self {
        RunOptions {
            procs: None,
            cache: true,
            oracle: false,
            scheduler: Scheduler::Sequential,
            record: false,
            check_replicas: false,
        }
    }
}

pub struct ScenarioRun {
    pub runtime: Runtime,
    /// One line per `read` or `reduce`, in execution order.
    pub outputs: Vec<String>,
    pub reads: Vec<Vec<f64>>,
    pub reductions: Vec<f64>,
}

/// FNV-1a over the bit patterns, for compact read fingerprints.
fn fingerprint(vals: &[f64]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for v in vals {
        for b in v.to_bits().to_le_bytes() {
            h ^= b as u64;
            h = h.wrapping_mul(0x100_0000_01b3);
        }
    }
    h
}

struct Exec {
    rt: Runtime,
    parts: HashMap<String, PartitionId>,
    outputs: Vec<String>,
    reads: Vec<Vec<f64>>,
    reductions: Vec<f64>,
}

impl Exec {
    fn pid(&self, line: usize, name: &str) -> Result<PartitionId> {
        self.parts
            .get(name)
            .copied()
            .ok_or_else(|| err(line, format!("unknown partition `{name}`")))
    }

    fn run(&mut self, stmts: &[(usize, Stmt)]) -> Result<()> {
        for (line, s) in stmts {
            let line = *line;
            match s {
                Stmt::Array { name, kind, shape } => self.rt.create(name, *kind, shape)?,
                Stmt::PartitionAuto {
                    name,
                    kind,
                    region,
                    domain,
                } => {
                    let domain = domain
                        .clone()
                        .unwrap_or_else(|| (0..region.ndim()).map(|d| region.ub(d).max(0) as usize).collect());
                    let id = self.rt.partition_auto(*kind, &domain, region)?;
                    self.define_partition(line, name, id)?;
                }
                Stmt::PartitionManual { name, domain, regions } => {
                    let n = self.rt.nprocs();
                    let ndim = regions
                        .first()
                        .map(|r| r.1.ndim())
                        .or(domain.as_ref().map(Vec::len))
                        .ok_or_else(|| err(line, "manual partition needs a region or a domain"))?;
                    let mut per = vec![None; n];
                    for (d, r) in regions {
                        if *d >= n {
                            return Err(Error::UnknownDevice { device: *d, nprocs: n });
                        }
                        if per[*d].replace(*r).is_some() {
                            return Err(err(line, format!("dev:{d} listed twice")));
                        }
                    }
                    let empty = Section::new(&vec![(0, 0); ndim])?;
                    let regs: Vec<Section> = per.into_iter().map(|r| r.unwrap_or(empty)).collect();
                    let domain = domain.clone().unwrap_or_else(|| {
                        (0..ndim)
                            .map(|d| regs.iter().map(|r| r.ub(d).max(0) as usize).max().unwrap_or(0))
                            .collect()
                    });
                    let id = self.rt.partition_manual(&domain, &regs)?;
                    self.define_partition(line, name, id)?;
                }
                Stmt::Write { array, partition, fill } => {
                    let len = self.rt.meta(array)?.len();
                    let pid = self.pid(line, partition)?;
                    self.rt.write(array, &fill.values(len), pid)?;
                }
                Stmt::Call {
                    kernel,
                    partition,
                    bindings,
                    scalars,
                } => {
                    let pid = self.pid(line, partition)?;
                    let b: Vec<(&str, &str)> = bindings.iter().map(|(f, a)| (f.as_str(), a.as_str())).collect();
                    self.rt.apply_kernel(kernel, pid, &b, scalars)?;
                }
                Stmt::Repeat { count, body } => {
                    for _ in 0..*count {
                        self.run(body)?;
                    }
                }
                Stmt::Reduce { array, op, partition } => {
                    let pid = self.pid(line, partition)?;
                    let v = self.rt.reduce(array, *op, pid)?;
                    self.outputs.push(format!("reduce {array} {op} {partition} = {v:?}"));
                    self.reductions.push(v);
                }
                Stmt::Read { array, partition } => {
                    let pid = self.pid(line, partition)?;
                    let v = self.rt.read(array, pid)?;
                    let sum: f64 = v.iter().sum();
                    self.outputs.push(format!(
                        "read {array} {partition} sum={sum:?} fingerprint={:016x}",
                        fingerprint(&v)
                    ));
                    self.reads.push(v);
                }
                Stmt::Absolute {
                    kind,
                    kernel,
                    partition,
                    array,
                    sections,
                } => {
                    let pid = self.pid(line, partition)?;
                    for (d, secs) in sections {
                        self.rt.set_absolute(*kind, kernel, pid, array, *d, secs)?;
                    }
                }
                Stmt::Trapezoid {
                    kind,
                    kernel,
                    partition,
                    array,
                    device,
                    shape,
                } => {
                    let pid = self.pid(line, partition)?;
                    self.rt.set_trapezoid(*kind, kernel, pid, array, *device, shape)?;
                }
            }
        }
        Ok(())
    }

    fn define_partition(&mut self, line: usize, name: &str, id: PartitionId) -> Result<()> {
        if self.parts.insert(name.to_string(), id).is_some() {
            return Err(err(line, format!("partition `{name}` defined twice")));
        }
        Ok(())
    }
}

/// Execute a parsed scenario against a runtime with the built-in kernels.
pub fn run_scenario(sc: &Scenario, opts: &RunOptions) -> Result<ScenarioRun> {
    let nprocs = opts
        .procs
        .or(sc.procs)
        .ok_or_else(|| Error::Config("number of processes not given (scenario `procs` or --procs)".into()))?;
    let mut cfg = RuntimeConfig::new(nprocs);
    cfg.cache = opts.cache;
    cfg.oracle = opts.oracle;
    cfg.scheduler = opts.scheduler;
    cfg.record = opts.record;
    cfg.check_replicas = opts.check_replicas;
    let mut ex = Exec {
        rt: Runtime::with_builtins(cfg)?,
        parts: HashMap::new(),
        outputs: Vec::new(),
        reads: Vec::new(),
        reductions: Vec::new(),
    };
    ex.run(&sc.stmts)?;
    Ok(ScenarioRun {
        runtime: ex.rt,
        outputs: ex.outputs,
        reads: ex.reads,
        reductions: ex.reductions,
    })
}

const FIELDS: [&str; 8] = [
    "calls",
    "messages",
    "epochs",
    "inter_bytes",
    "host_device_bytes",
    "none",
    "p2p",
    "allgather",
];

fn values(c: &Counts) -> [u64; 8] {
    [
        c.calls,
        c.messages,
        c.epochs,
        c.inter_bytes,
        c.host_device_bytes,
        c.none,
        c.p2p,
        c.allgather,
    ]
}

fn rows(stats: &CommStats) -> Vec<(String, String, Counts)> {
    let mut out = Vec::new();
    for a in stats.arrays() {
        for ((arr, k), c) in &stats.entries {
            if arr == a {
                out.push((a.to_string(), k.clone(), *c));
            }
        }
        out.push((a.to_string(), "*".into(), stats.array_total(a)));
    }
    out.push(("*".into(), "*".into(), stats.total()));
    out
}

fn cache_line(stats: &CommStats) -> String {
    let c = &stats.cache;
    format!(
        "cache lookups={} plans_computed={} step1_hits={} step2_comparisons={} step2_hits={}",
        c.lookups, c.plans_computed, c.step1_hits, c.step2_comparisons, c.step2_hits
    )
}

/// One `key=value` line per (array, kernel), per array (`kernel=*`), the
/// total (`array=* kernel=*`), then the cache counters.
pub fn format_stats_lines(stats: &CommStats) -> String {
    let mut s = String::new();
    for (a, k, c) in rows(stats) {
        let _ = write!(s, "array={a} kernel={k}");
        for (f, v) in FIELDS.iter().zip(values(&c)) {
            let _ = write!(s, " {f}={v}");
        }
        s.push('\n');
    }
    s.push_str(&cache_line(stats));
    s.push('\n');
    s
}

pub fn format_stats_table(stats: &CommStats) -> String {
    let mut cells: Vec<Vec<String>> = vec![["array", "kernel"]
        .iter()
        .chain(FIELDS.iter())
        .map(|s| s.to_string())
        .collect()];
    for (a, k, c) in rows(stats) {
        let mut r = vec![a, k];
        r.extend(values(&c).iter().map(u64::to_string));
        cells.push(r);
    }
    let widths: Vec<usize> = (0..cells[0].len())
        .map(|i| cells.iter().map(|r| r[i].len()).max().unwrap_or(0))
        .collect();
    let mut s = String::new();
    for r in &cells {
        let line: Vec<String> = r
            .iter()
            .zip(&widths)
            .enumerate()
            .map(|(i, (v, w))| if i < 2 { format!("{v:<w$}") } else { format!("{v:>w$}") })
            .collect();
        s.push_str(line.join("  ").trim_end());
        s.push('\n');
    }
    s.push_str(&cache_line(stats));
    s.push('\n');
    s
}

/// Per-array and total counters parsed back from [`format_stats_lines`].
pub fn parse_stats_lines(text: &str) -> Result<BTreeMap<(String, String), Counts>> {
    let mut out = BTreeMap::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with("cache ") {
            continue;
        }
        let mut kv = HashMap::new();
        for t in line.split_whitespace() {
            let (k, v) = t
                .split_once('=')
                .ok_or_else(|| Error::StatsMismatch(format!("line {}: bad token `{t}`", i + 1)))?;
            kv.insert(k, v);
        }
        let get = |k: &str| -> Result<u64> {
            kv.get(k)
                .and_then(|v| v.parse().ok())
                .ok_or_else(|| Error::StatsMismatch(format!("line {}: missing or bad `{k}`", i + 1)))
        };
        let (Some(a), Some(k)) = (kv.get("array"), kv.get("kernel")) else {
            return Err(Error::StatsMismatch(format!("line {}: missing array or kernel", i + 1)));
        };
        let c = Counts {
            calls: get("calls")?,
            messages: get("messages")?,
            epochs: get("epochs")?,
            inter_bytes: get("inter_bytes")?,
            host_device_bytes: get("host_device_bytes")?,
            none: get("none")?,
            p2p: get("p2p")?,
            allgather: get("allgather")?,
        };
        out.insert((a.to_string(), k.to_string()), c);
    }
    Ok(out)
}

fn ratio(a: u64, b: u64) -> String {
    if b == 0 {
        if a == 0 { "1.000".into() } else { "inf".into() }
    } else {
        format!("{:.3}", a as f64 / b as f64)
    }
}

/// Compare two stats files (lines format) array by array. Both must cover
/// the same arrays.
pub fn diff_stats(a: &str, b: &str) -> Result<String> {
    let pa = parse_stats_lines(a)?;
    let pb = parse_stats_lines(b)?;
    let arrays = |m: &BTreeMap<(String, String), Counts>| -> BTreeSet<String> {
        m.keys().filter(|(x, k)| k == "*" && x != "*").map(|(x, _)| x.clone()).collect()
    };
    let (sa, sb) = (arrays(&pa), arrays(&pb));
    if sa != sb {
        let only_a: Vec<_> = sa.difference(&sb).collect();
        let only_b: Vec<_> = sb.difference(&sa).collect();
        return Err(Error::StatsMismatch(format!(
            "array sets differ: only in first {only_a:?}, only in second {only_b:?}"
        )));
    }
    let mut s = String::new();
    let mut names: Vec<String> = sa.into_iter().collect();
    names.push("*".into());
    for n in names {
        let key = (n.clone(), "*".to_string());
        let (x, y) = (
            pa.get(&key).copied().unwrap_or_default(),
            pb.get(&key).copied().unwrap_or_default(),
        );
        let _ = writeln!(
            s,
            "array={n} inter_bytes={}/{} ratio={} host_device_bytes={}/{} ratio={} messages={}/{}",
            x.inter_bytes,
            y.inter_bytes,
            ratio(x.inter_bytes, y.inter_bytes),
            x.host_device_bytes,
            y.host_device_bytes,
            ratio(x.host_device_bytes, y.host_device_bytes),
            x.messages,
            y.messages
        );
    }
    Ok(s)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_nested_repeat() {
        let sc = parse_scenario(
            "procs 2\narray A float64 4x4\npartition W auto ROW (0,4),(0,4)\nrepeat 2\n repeat 3\n  call jacobi_copy W\n end\nend\n",
        )
        .unwrap();
        assert_eq!(sc.procs, Some(2));
        let Stmt::Repeat { count, body } = &sc.stmts[2].1 else { panic!() };
        assert_eq!(*count, 2);
        assert!(matches!(&body[0].1, Stmt::Repeat { count: 3, .. }));
    }

    #[test]
    fn parse_errors_carry_line() {
        let e = parse_scenario("procs 2\n\nfrobnicate\n").unwrap_err();
        assert!(matches!(e, Error::Scenario { line: 3, .. }), "{e}");
        let e = parse_scenario("repeat 2\ncall x W\n").unwrap_err();
        assert!(matches!(e, Error::Scenario { line: 1, .. }));
        let e = parse_scenario("end\n").unwrap_err();
        assert!(matches!(e, Error::Scenario { line: 1, .. }));
        let e = parse_scenario("write A W sparkles\n").unwrap_err();
        assert!(matches!(e, Error::Scenario { line: 1, .. }));
    }

    #[test]
    fn stats_lines_round_trip() {
        let mut st = CommStats::default();
        st.entries.insert(
            ("A".into(), "k".into()),
            Counts {
                calls: 2,
                messages: 3,
                epochs: 1,
                inter_bytes: 96,
                host_device_bytes: 64,
                none: 1,
                p2p: 1,
                allgather: 0,
            },
        );
        let text = format_stats_lines(&st);
        let back = parse_stats_lines(&text).unwrap();
        assert_eq!(back[&("A".to_string(), "k".to_string())].inter_bytes, 96);
        assert_eq!(back[&("*".to_string(), "*".to_string())].messages, 3);
        let d = diff_stats(&text, &text).unwrap();
        assert!(d.contains("array=A inter_bytes=96/96 ratio=1.000"));
    }

    #[test]
    fn diff_rejects_different_arrays() {
        let mut a = CommStats::default();
        a.entries.insert(("A".into(), "k".into()), Counts::default());
        let mut b = CommStats::default();
        b.entries.insert(("B".into(), "k".into()), Counts::default());
        let e = diff_stats(&format_stats_lines(&a), &format_stats_lines(&b)).unwrap_err();
        assert!(matches!(e, Error::StatsMismatch(_)));
    }
}
