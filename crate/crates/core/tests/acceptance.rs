//! Acceptance suite: one PASS/FAIL line per criterion.

use std::collections::{BTreeMap, HashMap};
use std::panic;
use std::path::PathBuf;
use std::time::Instant;

use hdarray::access::{AccessDecl, AccessKind, AccessPattern, Offset, OffsetTuple};
use hdarray::comm::Pattern;
use hdarray::frontend::{emit_metadata, load_metadata, parse_source};
use hdarray::oracle::random::RandomProgram;
use hdarray::runtime::{reference_gemm, CommStats, RuntimeConfig};
use hdarray::scenario::{parse_scenario, run_scenario, Fill, RunOptions, ScenarioRun};
use hdarray::sections::{Section, SectionSet};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const SCENARIOS: [&str; 8] = [
    "gemm",
    "2mm_row",
    "2mm_col",
    "jacobi",
    "conv2d",
    "corr_row",
    "corr_manual",
    "covariance",
];

type Outcome = Result<String, String>;

fn scenario_path(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR"))
        .join("../../scenarios")
        .join(format!("{name}.hds"))
}

fn run(name: &str, cache: bool, oracle: bool) -> ScenarioRun {
    let text = std::fs::read_to_string(scenario_path(name)).expect("scenario file");
    let sc = parse_scenario(&text).expect("scenario parses");
    let opts = RunOptions {
        cache,
        oracle,
        record: true,
        check_replicas: true,
        ..Default::default()
    };
    run_scenario(&sc, &opts).unwrap_or_else(|e| panic!("{name}: {e}"))
}

struct Runs {
    cached: HashMap<&'static str, ScenarioRun>,
    uncached: HashMap<&'static str, ScenarioRun>,
    replica_checks: u64,
    replica_failures: u64,
    oracle_replica_failures: u64,
}

fn collect_runs() -> Runs {
    let mut r = Runs {
        cached: HashMap::new(),
        uncached: HashMap::new(),
        replica_checks: 0,
        replica_failures: 0,
        oracle_replica_failures: 0,
    };
    for name in SCENARIOS {
        // the 2MM kernels are too large to shadow at full size on every call
        let oracle = !name.starts_with("2mm");
        for cache in [true, false] {
            let out = run(name, cache, oracle);
            let a = out.runtime.replica_audit();
            r.replica_checks += a.checks;
            r.replica_failures += a.failures;
            if let Some(rep) = out.runtime.oracle_report() {
                r.oracle_replica_failures += rep.replica_failures;
            }
            for arr in out.runtime.array_names() {
                if !out.runtime.replicas_consistent(arr).unwrap() || !out.runtime.mirror_holds(arr).unwrap() {
                    r.replica_failures += 1;
                }
            }
            if cache {
                r.cached.insert(name, out);
            } else {
                r.uncached.insert(name, out);
            }
        }
    }
    r
}

fn c1_random_programs(audit: &mut (u64, u64)) -> Outcome {
    let mut reads = 0u64;
    let mut calls = 0usize;
    let mut detected = 0usize;
    let mut needing_comm = 0usize;
    for seed in 0..500u64 {
        let prog = RandomProgram::generate(seed);
        let mut cfg = RuntimeConfig::new(prog.nprocs);
        cfg.oracle = true;
        let out = prog.run(cfg).map_err(|e| format!("seed {seed}: {e}"))?;
        let rep = out.report.unwrap();
        if !rep.is_clean() {
            return Err(format!("seed {seed}: {:?}", rep));
        }
        reads += rep.reads_checked;
        calls += prog.ops.len();
        audit.0 += rep.ops;
        audit.1 += rep.replica_failures;
        if out.stats.total().messages > 0 {
            needing_comm += 1;
            // negative control: the same program without any data movement
            let mut cfg = RuntimeConfig::new(prog.nprocs);
            cfg.oracle = true;
            cfg.disable_comm = true;
            let bad = prog.run(cfg).map_err(|e| format!("seed {seed} (control): {e}"))?;
            if bad.report.unwrap().read_mismatches > 0 {
                detected += 1;
            }
        }
    }
    if needing_comm == 0 || detected == 0 {
        return Err(format!(
            "negative control inert: {detected} of {needing_comm} communicating programs caught with movement disabled"
        ));
    }
    Ok(format!(
        "500 programs, {calls} ops, {reads} reads checked, 0 mismatches, plans exact; control caught {detected}/{needing_comm}"
    ))
}

fn c2_gemm(runs: &Runs) -> Outcome {
    let out = &runs.cached["gemm"];
    let rt = &out.runtime;
    let plans: Vec<_> = rt.plans().iter().filter(|p| p.kernel == "gemm").collect();
    if plans.len() != 10 {
        return Err(format!("expected 10 gemm calls, saw {}", plans.len()));
    }
    let b = plans[0]
        .arrays
        .iter()
        .find(|a| a.array == "B")
        .ok_or("no plan for B")?;
    if b.pattern != Pattern::AllGather {
        return Err(format!("B on call 1 classified {:?}", b.pattern));
    }
    for (i, p) in plans.iter().enumerate().skip(1) {
        let n: usize = p.arrays.iter().map(|a| a.exchange.messages().count()).sum();
        if n != 0 {
            return Err(format!("call {} sent {n} messages", i + 1));
        }
    }
    let a = Fill::Rand(1).values(64 * 64);
    let bv = Fill::Rand(2).values(64 * 64);
    let want = reference_gemm(&a, &bv, 64, 64, 64, 1.0);
    let got = rt.gather("C").map_err(|e| e.to_string())?;
    let diff = want.iter().zip(&got).filter(|(x, y)| x.to_bits() != y.to_bits()).count();
    if diff != 0 {
        return Err(format!("{diff} cells of C differ from the serial product"));
    }
    Ok("B all-gather on call 1, calls 2-10 silent, C bit-exact".into())
}

fn c3_2mm(runs: &Runs) -> Outcome {
    let row = runs.cached["2mm_row"].runtime.stats();
    let col = runs.cached["2mm_col"].runtime.stats();
    let epochs = |s: &CommStats, a: &str| s.array_total(a).epochs;
    let want_row = [("A", 0), ("B", 1), ("C", 0), ("D", 10), ("E", 0)];
    let want_col = [("A", 1), ("B", 0), ("C", 1), ("D", 0), ("E", 0)];
    for (a, n) in want_row {
        if epochs(&row, a) != n {
            return Err(format!("row: {a} in {} epochs, want {n}", epochs(&row, a)));
        }
    }
    for (a, n) in want_col {
        if epochs(&col, a) != n {
            return Err(format!("col: {a} in {} epochs, want {n}", epochs(&col, a)));
        }
    }
    // an all-gather of an N x N array over P bands moves (P-1) N^2 cells
    let (p, n, eb) = (4u64, 256u64, 8u64);
    let gather = (p - 1) * n * n * eb;
    let (rb, cb) = (row.total().inter_bytes, col.total().inter_bytes);
    if rb != 11 * gather || cb != 2 * gather {
        return Err(format!("row {rb} B, col {cb} B; analytic {} and {}", 11 * gather, 2 * gather));
    }
    Ok(format!("row {rb} B / col {cb} B = {:.3} (analytic 11/2)", rb as f64 / cb as f64))
}

fn c4_jacobi(runs: &Runs) -> Outcome {
    let rt = &runs.cached["jacobi"].runtime;
    let (p, ncols, eb) = (4usize, 64u64, 8u64);
    let want = 2 * (p as u64 - 1) * ncols * eb;
    let steps: Vec<_> = rt
        .plans()
        .iter()
        .filter(|pl| pl.kernel == "jacobi_step" || pl.kernel == "jacobi_copy")
        .collect();
    if steps.len() != 40 {
        return Err(format!("expected 40 kernel calls, saw {}", steps.len()));
    }
    for (it, pair) in steps.chunks(2).enumerate() {
        let mut bytes = 0;
        for pl in pair {
            for a in &pl.arrays {
                bytes += a.exchange.messages().map(|(_, _, s)| s.volume() * eb).sum::<u64>();
                if pl.kernel == "jacobi_copy" && a.exchange.messages().count() > 0 {
                    return Err(format!("iteration {}: jacobi_copy communicates", it + 1));
                }
            }
        }
        if bytes != want {
            return Err(format!("iteration {}: {bytes} B, want {want}", it + 1));
        }
        let b = pair[0].arrays.iter().find(|a| a.array == "B").ok_or("no plan for B")?;
        if b.pattern != Pattern::PointToPoint {
            return Err(format!("iteration {}: {:?}", it + 1, b.pattern));
        }
        let mut pairs: Vec<(usize, usize)> = Vec::new();
        for (s, d, set) in b.exchange.messages() {
            let one_row = set.len() == 1 && set.sections()[0].extent(0) == 1 && set.volume() == ncols;
            if !one_row || s.abs_diff(d) != 1 {
                return Err(format!("iteration {}: {s}->{d} sends {set}", it + 1));
            }
            pairs.push((s, d));
        }
        pairs.sort_unstable();
        let expect: Vec<(usize, usize)> = {
            let mut v: Vec<_> = (0..p - 1).flat_map(|i| [(i, i + 1), (i + 1, i)]).collect();
            v.sort_unstable();
            v
        };
        if pairs != expect {
            return Err(format!("iteration {}: message pairs {pairs:?}", it + 1));
        }
    }
    Ok(format!("20 iterations x {want} B, one row up and one down per neighbour, point-to-point"))
}

fn c5_cache(runs: &Runs) -> Outcome {
    for name in SCENARIOS {
        let (a, b) = (&runs.cached[name], &runs.uncached[name]);
        if a.runtime.trace_lines() != b.runtime.trace_lines() {
            return Err(format!("{name}: traces differ"));
        }
        if a.runtime.stats().entries != b.runtime.stats().entries {
            return Err(format!("{name}: stats differ"));
        }
        if a.outputs != b.outputs {
            return Err(format!("{name}: outputs differ"));
        }
        for arr in a.runtime.array_names() {
            let (x, y) = (a.runtime.gather(arr).unwrap(), b.runtime.gather(arr).unwrap());
            if x.iter().zip(&y).any(|(u, v)| u.to_bits() != v.to_bits()) {
                return Err(format!("{name}: {arr} differs"));
            }
        }
    }
    let c = runs.cached["jacobi"].runtime.cache_counters();
    if c.plans_computed > 3 || c.step1_hits < 17 {
        return Err(format!("jacobi cache: {c:?}"));
    }
    Ok(format!(
        "8 scenarios identical with and without cache; jacobi plans_computed={} step1_hits={}",
        c.plans_computed, c.step1_hits
    ))
}

struct Grid {
    shape: Vec<i64>,
}

impl Grid {
    fn len(&self) -> usize {
        self.shape.iter().product::<i64>() as usize
    }

    fn offset(&self, p: &[i64]) -> usize {
        p.iter().zip(&self.shape).fold(0, |acc, (&i, &e)| acc * e as usize + i as usize)
    }

    fn bits(&self, s: &SectionSet) -> Result<Vec<bool>, String> {
        let mut b = vec![false; self.len()];
        let nd = self.shape.len();
        for pt in s.points() {
            let o = self.offset(&pt[..nd]);
            if b[o] {
                return Err(format!("{s} covers a cell twice"));
            }
            b[o] = true;
        }
        Ok(b)
    }
}

fn rand_set(rng: &mut ChaCha8Rng, g: &Grid) -> SectionSet {
    let nd = g.shape.len();
    let boxes: Vec<Section> = (0..rng.gen_range(0..=4))
        .map(|_| {
            let b: Vec<(i64, i64)> = g
                .shape
                .iter()
                .map(|&e| {
                    let lb = rng.gen_range(0..=e);
                    (lb, rng.gen_range(lb..=e))
                })
                .collect();
            Section::new(&b).unwrap()
        })
        .collect();
    SectionSet::canonicalize(nd, boxes).unwrap()
}

fn c6_sections() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    for i in 0..10_000 {
        let nd = rng.gen_range(1..=3);
        let g = Grid {
            shape: (0..nd).map(|_| rng.gen_range(1..=32)).collect(),
        };
        let (a, b) = (rand_set(&mut rng, &g), rand_set(&mut rng, &g));
        let (ba, bb) = (g.bits(&a)?, g.bits(&b)?);
        let inter = a.intersect(&b).unwrap();
        let uni = a.union(&b).unwrap();
        let sub = a.subtract(&b).unwrap();
        let checks: [(&str, &SectionSet, fn(bool, bool) -> bool); 3] = [
            ("intersect", &inter, |x, y| x && y),
            ("union", &uni, |x, y| x || y),
            ("subtract", &sub, |x, y| x && !y),
        ];
        for (op, got, f) in checks {
            let want: Vec<bool> = ba.iter().zip(&bb).map(|(&x, &y)| f(x, y)).collect();
            if g.bits(got)? != want {
                return Err(format!("pair {i}: {op} of {a} and {b} gave {got}"));
            }
        }
        if uni.volume() + inter.volume() != a.volume() + b.volume() {
            return Err(format!("pair {i}: inclusion-exclusion fails for {a} and {b}"));
        }
        for s in [&a, &b, &inter, &uni, &sub] {
            let again = SectionSet::canonicalize(nd, s.sections().iter().copied()).unwrap();
            if again != *s {
                return Err(format!("pair {i}: canonicalize not idempotent on {s}"));
            }
        }
        if a.equals(&b) != (ba == bb) {
            return Err(format!("pair {i}: equals disagrees with coverage for {a} and {b}"));
        }
    }
    Ok("10000 pairs match the bitset oracle; inclusion-exclusion and idempotence hold".into())
}

fn c7_replicas(runs: &Runs, random: (u64, u64)) -> Outcome {
    let checks = runs.replica_checks + random.0;
    let failures = runs.replica_failures + runs.oracle_replica_failures + random.1;
    if failures > 0 {
        return Err(format!("{failures} diverged replica checks out of {checks}"));
    }
    if runs.replica_checks == 0 {
        return Err("no replica checks were made".into());
    }
    Ok(format!("{checks} post-operation checks, replicas identical and mirrored"))
}

fn rand_ident(rng: &mut ChaCha8Rng) -> String {
    let first = b"abcdefghijklmnopqrstuvwxyzABCDEFGHIJKLMNOPQRSTUVWXYZ_";
    let rest = b"abcdefghijklmnopqrstuvwxyz0123456789_";
    let mut s = String::new();
    s.push(first[rng.gen_range(0..first.len())] as char);
    for _ in 0..rng.gen_range(0..6) {
        s.push(rest[rng.gen_range(0..rest.len())] as char);
    }
    s
}

fn rand_decl(rng: &mut ChaCha8Rng, name: String) -> AccessDecl {
    let mut d = AccessDecl::new(&name);
    for _ in 0..rng.gen_range(1..=4) {
        let arr = rand_ident(rng);
        let nd = rng.gen_range(1..=3);
        for kind in [AccessKind::Use, AccessKind::Def] {
            match rng.gen_range(0..3) {
                0 => {}
                1 => {
                    let _ = d.add_absolute(kind, &arr);
                }
                _ => {
                    for _ in 0..rng.gen_range(1..=3) {
                        let t = OffsetTuple(
                            (0..nd)
                                .map(|_| {
                                    if rng.gen_bool(0.2) {
                                        Offset::Star
                                    } else {
                                        Offset::Fixed(rng.gen_range(-3..=3))
                                    }
                                })
                                .collect(),
                        );
                        let _ = d.add_offsets(kind, &arr, t);
                    }
                }
            }
        }
    }
    d.arrays.retain(|a| a.uses.is_some() || a.defs.is_some());
    d
}

fn fixed(v: &[i64]) -> OffsetTuple {
    OffsetTuple(v.iter().map(|&o| Offset::Fixed(o)).collect())
}

fn c8_frontend() -> Outcome {
    let gemm = "#pragma hdarray use(A,(0,*)) use(B,(*,0)) def(C,(0,0))\n\
                __kernel void gemm(__global double *A, __global double *B, __global double *C) {}\n";
    let unit = parse_source(gemm).map_err(|e| e.to_string())?;
    let d = unit.decls().map_err(|e| e.to_string())?;
    let star = |a: Offset, b: Offset| AccessPattern::Offsets(vec![OffsetTuple(vec![a, b])]);
    let g = &d[0];
    let ok = g.kernel == "gemm"
        && g.array("A").and_then(|a| a.uses.clone()) == Some(star(Offset::Fixed(0), Offset::Star))
        && g.array("B").and_then(|a| a.uses.clone()) == Some(star(Offset::Star, Offset::Fixed(0)))
        && g.array("C").and_then(|a| a.defs.clone()) == Some(AccessPattern::Offsets(vec![fixed(&[0, 0])]));
    if !ok {
        return Err(format!("gemm pragma parsed as {g:?}"));
    }
    let jac = "#pragma hdarray use(B,(0,-1)) use(B,(0,+1)) use(B,(-1,0)) use(B,(+1,0)) def(A,(0,0))\n\
               __kernel void jacobi(__global float *A, __global float *B) {}\n";
    let d = parse_source(jac).and_then(|u| u.decls()).map_err(|e| e.to_string())?;
    let want = AccessPattern::Offsets(vec![fixed(&[0, -1]), fixed(&[0, 1]), fixed(&[-1, 0]), fixed(&[1, 0])]);
    if d[0].array("B").and_then(|a| a.uses.clone()) != Some(want) {
        return Err(format!("jacobi pragma parsed as {:?}", d[0]));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for i in 0..1000 {
        let decls: Vec<AccessDecl> = (0..rng.gen_range(0..=3))
            .map(|k| rand_decl(&mut rng, format!("k{i}_{k}")))
            .filter(|d| !d.arrays.is_empty())
            .collect();
        let text = emit_metadata(&decls);
        let back = load_metadata(&text).map_err(|e| format!("decl set {i}: {e}\n{text}"))?;
        if back != decls {
            return Err(format!("decl set {i} did not round-trip:\n{text}"));
        }
    }

    let alphabet: Vec<char> = "#pragma hdarray use def partition dev:@(),*+-0123456789 \\\n\t_kernel void ABx?"
        .chars()
        .collect();
    let seeds = [gemm, jac, "kernel g\nuse A (0,*)\nendkernel\n"];
    let prev = panic::take_hook();
    panic::set_hook(Box::new(|_| {}));
    let mut panics = 0;
    for i in 0..10_000 {
        let input: String = if i % 2 == 0 {
            (0..rng.gen_range(0..120))
                .map(|_| alphabet[rng.gen_range(0..alphabet.len())])
                .collect()
        } else {
            let mut s: Vec<char> = seeds[i % 3].chars().collect();
            for _ in 0..rng.gen_range(1..6) {
                let pos = rng.gen_range(0..=s.len());
                match rng.gen_range(0..3) {
                    0 if pos < s.len() => {
                        s.remove(pos);
                    }
                    1 if pos < s.len() => s[pos] = alphabet[rng.gen_range(0..alphabet.len())],
                    _ => s.insert(pos, alphabet[rng.gen_range(0..alphabet.len())]),
                }
            }
            s.into_iter().collect()
        };
        let r = panic::catch_unwind(|| {
            let _ = parse_source(&input).and_then(|u| u.decls());
            let _ = load_metadata(&input);
        });
        if r.is_err() {
            panics += 1;
        }
    }
    panic::set_hook(prev);
    if panics > 0 {
        return Err(format!("{panics} of 10000 fuzz inputs panicked"));
    }
    Ok("gemm and jacobi pragmas exact; 1000 metadata round trips; 10000 fuzz inputs without panic".into())
}

fn c9_correlation(runs: &Runs) -> Outcome {
    let mut totals = BTreeMap::new();
    for name in ["corr_row", "corr_manual"] {
        let rt = &runs.cached[name].runtime;
        let rep = rt.oracle_report().ok_or("oracle off")?;
        if !rep.is_clean() {
            return Err(format!("{name}: oracle {rep:?}"));
        }
        totals.insert(name, rt.stats().total().inter_bytes);
    }
    let (row, manual) = (totals["corr_row"], totals["corr_manual"]);
    if manual >= row {
        return Err(format!("manual {manual} B is not below row {row} B"));
    }
    Ok(format!("oracle-clean; manual {manual} B < row {row} B"))
}

fn main() {
    let mut lines = Vec::new();
    let mut failed = 0;
    let mut report = |id: &str, title: &str, t: Instant, r: Outcome| {
        let secs = t.elapsed().as_secs_f64();
        match r {
            Ok(msg) => lines.push(format!("PASS {id} {title}: {msg} [{secs:.1}s]")),
            Err(msg) => {
                failed += 1;
                lines.push(format!("FAIL {id} {title}: {msg} [{secs:.1}s]"))
            }
        }
        println!("{}", lines.last().unwrap());
    };

    let t = Instant::now();
    let mut random_audit = (0, 0);
    let r = c1_random_programs(&mut random_audit);
    report("C1", "coherence oracle suite", t, r);

    let t0 = Instant::now();
    let runs = collect_runs();
    println!("(scenario runs: {:.1}s)", t0.elapsed().as_secs_f64());

    let t = Instant::now();
    report("C2", "gemm all-gather then silence", t, c2_gemm(&runs));
    let t = Instant::now();
    report("C3", "2mm row vs column", t, c3_2mm(&runs));
    let t = Instant::now();
    report("C4", "jacobi halo", t, c4_jacobi(&runs));
    let t = Instant::now();
    report("C5", "cache transparency and reuse", t, c5_cache(&runs));
    let t = Instant::now();
    report("C6", "section algebra", t, c6_sections());
    let t = Instant::now();
    report("C7", "replica consistency", t, c7_replicas(&runs, random_audit));
    let t = Instant::now();
    report("C8", "frontend", t, c8_frontend());
    let t = Instant::now();
    report("C9", "triangular manual partition", t, c9_correlation(&runs));

    println!("{} of 9 criteria passed", 9 - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
