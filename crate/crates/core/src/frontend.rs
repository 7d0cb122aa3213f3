//! `#pragma hdarray` parsing and the metadata file format.
//!
//! Kernel pragmas attach to the next `__kernel void <name>(` signature.
//! Partition pragmas may appear anywhere. Metadata looks like:
//!
//! ```text
//! kernel gemm
//! use A (0,*)
//! use B (*,0)
//! def C (0,0)
//! endkernel
//! ```

use std::collections::HashSet;
use std::fmt;
use std::sync::OnceLock;

use regex::Regex;

use crate::access::{AccessDecl, AccessKind, AccessPattern, Offset, OffsetTuple};
use crate::sections::{Section, MAX_DIMS};

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("line {line}, column {col}: {msg}")]
pub struct ParseError {
    pub line: usize,
    pub col: usize,
    pub msg: String,
}

impl ParseError {
    fn new(line: usize, col: usize, msg: impl Into<String>) -> Self {
        ParseError {
            line,
            col,
            msg: msg.into(),
        }
    }
}

type PResult<T> = Result<T, ParseError>;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PartitionClause {
    pub id: String,
    pub domain: Vec<usize>,
    pub regions: Vec<(usize, Section)>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Clause {
    Use(String, OffsetTuple),
    Def(String, OffsetTuple),
    UseAbs(String),
    DefAbs(String),
    Partition(PartitionClause),
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct PragmaAst {
    /// first physical line of the pragma
    pub line: usize,
    pub clauses: Vec<Clause>,
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct SourceUnit {
    pub kernels: Vec<(String, PragmaAst)>,
    pub partitions: Vec<PartitionClause>,
}

impl SourceUnit {
    pub fn decls(&self) -> PResult<Vec<AccessDecl>> {
        let mut out: Vec<AccessDecl> = Vec::new();
        let mut seen = HashSet::new();
        for (name, ast) in &self.kernels {
            if !seen.insert(name.clone()) {
                return Err(ParseError::new(ast.line, 1, format!("kernel `{name}` annotated twice")));
            }
            let mut d = AccessDecl::new(name);
            for c in &ast.clauses {
                let r = match c {
                    Clause::Use(a, t) => d.add_offsets(AccessKind::Use, a, t.clone()),
                    Clause::Def(a, t) => d.add_offsets(AccessKind::Def, a, t.clone()),
                    Clause::UseAbs(a) => d.add_absolute(AccessKind::Use, a),
                    Clause::DefAbs(a) => d.add_absolute(AccessKind::Def, a),
                    Clause::Partition(_) => Ok(()),
                };
                r.map_err(|m| ParseError::new(ast.line, 1, m))?;
            }
            out.push(d);
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
enum Tok {
    Ident(String),
    Int(i64),
    Star,
    At,
    Colon,
    Comma,
    LParen,
    RParen,
}

impl fmt::Display for Tok {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Tok::Ident(s) => write!(f, "`{s}`"),
            Tok::Int(v) => write!(f, "`{v}`"),
            Tok::Star => f.write_str("`*`"),
            Tok::At => f.write_str("`@`"),
            Tok::Colon => f.write_str("`:`"),
            Tok::Comma => f.write_str("`,`"),
            Tok::LParen => f.write_str("`(`"),
            Tok::RParen => f.write_str("`)`"),
        }
    }
}

/// A character with its 1-based source position.
type PosChar = (char, usize, usize);

fn lex(chars: &[PosChar], end: (usize, usize)) -> PResult<Vec<(Tok, usize, usize)>> {
    let mut toks = Vec::new();
    let mut i = 0;
    while i < chars.len() {
        let (c, line, col) = chars[i];
        if c.is_whitespace() {
            i += 1;
            continue;
        }
        let single = match c {
            '*' => Some(Tok::Star),
            '@' => Some(Tok::At),
            ':' => Some(Tok::Colon),
            ',' => Some(Tok::Comma),
            '(' => Some(Tok::LParen),
            ')' => Some(Tok::RParen),
            _ => None,
        };
        if let Some(t) = single {
            toks.push((t, line, col));
            i += 1;
            continue;
        }
        if c.is_ascii_alphabetic() || c == '_' {
            let mut s = String::new();
            while i < chars.len() && (chars[i].0.is_ascii_alphanumeric() || chars[i].0 == '_') {
                s.push(chars[i].0);
                i += 1;
            }
            toks.push((Tok::Ident(s), line, col));
            continue;
        }
        if c.is_ascii_digit() || c == '+' || c == '-' {
            let mut s = String::new();
            if c == '+' || c == '-' {
                s.push(c);
                i += 1;
            }
            let digits_start = i;
            while i < chars.len() && chars[i].0.is_ascii_digit() {
                s.push(chars[i].0);
                i += 1;
            }
            if i == digits_start {
                let (l, cl) = chars.get(i).map_or(end, |p| (p.1, p.2));
                return Err(ParseError::new(l, cl, format!("expected digits after `{c}`")));
            }
            let v = s
                .parse::<i64>()
                .map_err(|_| ParseError::new(line, col, format!("integer `{s}` out of range")))?;
            toks.push((Tok::Int(v), line, col));
            continue;
        }
        return Err(ParseError::new(line, col, format!("unexpected character `{c}`")));
    }
    Ok(toks)
}

struct Parser {
    toks: Vec<(Tok, usize, usize)>,
    pos: usize,
    end: (usize, usize),
}

impl Parser {
    fn peek(&self) -> Option<&Tok> {
        self.toks.get(self.pos).map(|t| &t.0)
    }

    fn here(&self) -> (usize, usize) {
        self.toks.get(self.pos).map_or(self.end, |t| (t.1, t.2))
    }

    fn err<T>(&self, msg: impl Into<String>) -> PResult<T> {
        let (l, c) = self.here();
        Err(ParseError::new(l, c, msg))
    }

    fn expect(&mut self, want: Tok) -> PResult<()> {
        match self.peek() {
            Some(t) if *t == want => {
                self.pos += 1;
                Ok(())
            }
            Some(t) => {
                let msg = format!("expected {want}, found {t}");
                self.err(msg)
            }
            None => self.err(format!("expected {want}, found end of pragma")),
        }
    }

    fn ident(&mut self) -> PResult<String> {
        match self.peek() {
            Some(Tok::Ident(s)) => {
                let s = s.clone();
                self.pos += 1;
                Ok(s)
            }
            Some(t) => {
                let msg = format!("expected a name, found {t}");
                self.err(msg)
            }
            None => self.err("expected a name, found end of pragma"),
        }
    }

    fn int(&mut self) -> PResult<i64> {
        match self.peek() {
            Some(Tok::Int(v)) => {
                let v = *v;
                self.pos += 1;
                Ok(v)
            }
            Some(t) => {
                let msg = format!("expected an integer, found {t}");
                self.err(msg)
            }
            None => self.err("expected an integer, found end of pragma"),
        }
    }

    fn offsets(&mut self) -> PResult<OffsetTuple> {
        self.expect(Tok::LParen)?;
        let mut v = Vec::new();
        loop {
            match self.peek() {
                Some(Tok::Star) => {
                    self.pos += 1;
                    v.push(Offset::Star);
                }
                Some(Tok::Int(d)) => {
                    v.push(Offset::Fixed(*d));
                    self.pos += 1;
                }
                Some(t) => {
                    let msg = format!("expected an offset or `*`, found {t}");
                    return self.err(msg);
                }
                None => return self.err("unterminated offset tuple"),
            }
            if v.len() > MAX_DIMS {
                return self.err(format!("more than {MAX_DIMS} dimensions"));
            }
            match self.peek() {
                Some(Tok::Comma) => self.pos += 1,
                _ => break,
            }
        }
        self.expect(Tok::RParen)?;
        Ok(OffsetTuple(v))
    }

    fn pair(&mut self) -> PResult<(i64, i64)> {
        self.expect(Tok::LParen)?;
        let a = self.int()?;
        self.expect(Tok::Comma)?;
        let b = self.int()?;
        self.expect(Tok::RParen)?;
        Ok((a, b))
    }

    fn partition(&mut self) -> PResult<PartitionClause> {
        self.expect(Tok::LParen)?;
        let id = self.ident()?;
        self.expect(Tok::Comma)?;
        self.expect(Tok::LParen)?;
        let mut domain = Vec::new();
        loop {
            let at = self.here();
            let v = self.int()?;
            if v < 1 {
                return Err(ParseError::new(at.0, at.1, "domain extents must be positive"));
            }
            domain.push(v as usize);
            if domain.len() > MAX_DIMS {
                return Err(ParseError::new(at.0, at.1, format!("more than {MAX_DIMS} dimensions")));
            }
            match self.peek() {
                Some(Tok::Comma) => self.pos += 1,
                _ => break,
            }
        }
        self.expect(Tok::RParen)?;
        let mut regions = Vec::new();
        while self.peek() == Some(&Tok::Comma) {
            self.pos += 1;
            let at = self.here();
            if self.ident()? != "dev" {
                return Err(ParseError::new(at.0, at.1, "expected `dev`"));
            }
            self.expect(Tok::Colon)?;
            let dat = self.here();
            let dev = self.int()?;
            if dev < 0 {
                return Err(ParseError::new(dat.0, dat.1, "device index must be non-negative"));
            }
            let mut bounds = Vec::with_capacity(domain.len());
            for _ in 0..domain.len() {
                self.expect(Tok::Comma)?;
                bounds.push(self.pair()?);
            }
            let sec = Section::new(&bounds).map_err(|e| ParseError::new(at.0, at.1, e.to_string()))?;
            regions.push((dev as usize, sec));
        }
        self.expect(Tok::RParen)?;
        Ok(PartitionClause { id, domain, regions })
    }

    fn clauses(&mut self) -> PResult<Vec<Clause>> {
        let mut out = Vec::new();
        let mut has_partition = false;
        while self.peek().is_some() {
            let at = self.here();
            let kw = self.ident()?;
            let abs = if self.peek() == Some(&Tok::At) {
                self.pos += 1;
                true
            } else {
                false
            };
            let c = match (kw.as_str(), abs) {
                ("use" | "def", false) => {
                    self.expect(Tok::LParen)?;
                    let a = self.ident()?;
                    self.expect(Tok::Comma)?;
                    let t = self.offsets()?;
                    self.expect(Tok::RParen)?;
                    if kw == "use" {
                        Clause::Use(a, t)
                    } else {
                        Clause::Def(a, t)
                    }
                }
                ("use" | "def", true) => {
                    self.expect(Tok::LParen)?;
                    let a = self.ident()?;
                    self.expect(Tok::RParen)?;
                    if kw == "use" {
                        Clause::UseAbs(a)
                    } else {
                        Clause::DefAbs(a)
                    }
                }
                ("partition", false) => {
                    if has_partition {
                        return Err(ParseError::new(at.0, at.1, "more than one partition clause"));
                    }
                    has_partition = true;
                    Clause::Partition(self.partition()?)
                }
                _ => {
                    let kw = if abs { format!("{kw}@") } else { kw };
                    return Err(ParseError::new(at.0, at.1, format!("unknown clause `{kw}`")));
                }
            };
            out.push(c);
        }
        Ok(out)
    }
}

fn kernel_signature() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"\b__kernel\s+void\s+([A-Za-z_]\w*)\s*\(").unwrap())
}

/// Parse the clause text of one (joined) pragma.
fn parse_pragma(chars: &[PosChar], end: (usize, usize)) -> PResult<Vec<Clause>> {
    let toks = lex(chars, end)?;
    Parser { toks, pos: 0, end }.clauses()
}

/// If `line` is a `#pragma hdarray` line, the character offset just after `hdarray`.
fn pragma_body_start(line: &str) -> Option<usize> {
    let t = line.trim_start();
    let lead = line.len() - t.len();
    let rest = t.strip_prefix('#')?;
    let r2 = rest.trim_start();
    let r3 = r2.strip_prefix("pragma")?;
    if !r3.starts_with(char::is_whitespace) {
        return None;
    }
    let r4 = r3.trim_start();
    let r5 = r4.strip_prefix("hdarray")?;
    if !(r5.is_empty() || r5.starts_with(char::is_whitespace) || r5.starts_with('\\')) {
        return None;
    }
    Some(lead + line[lead..].len() - r5.len())
}

fn strip_continuation(line: &str) -> (&str, bool) {
    let t = line.trim_end();
    match t.strip_suffix('\\') {
        Some(s) => (s, true),
        None => (line, false),
    }
}

/// Parse a kernel or host source file.
pub fn parse_source(text: &str) -> PResult<SourceUnit> {
    let lines: Vec<&str> = text.lines().collect();
    let mut unit = SourceUnit::default();
    let mut pending: Option<PragmaAst> = None;
    let mut i = 0;
    while i < lines.len() {
        let line = lines[i];
        if let Some(start) = pragma_body_start(line) {
            let first = i + 1;
            let mut chars: Vec<PosChar> = Vec::new();
            let mut cur = &line[start..];
            let mut col0 = start;
            let mut ln = i;
            loop {
                let (body, cont) = strip_continuation(cur);
                for (k, c) in body.char_indices() {
                    chars.push((c, ln + 1, col0 + k + 1));
                }
                chars.push((' ', ln + 1, col0 + body.len() + 1));
                if !cont {
                    break;
                }
                ln += 1;
                if ln >= lines.len() {
                    return Err(ParseError::new(ln, 1, "continuation at end of input"));
                }
                cur = lines[ln];
                col0 = 0;
            }
            let end = (ln + 1, lines[ln].len() + 1);
            let clauses = parse_pragma(&chars, end)?;
            let mut kernel_clauses = Vec::new();
            for c in clauses {
                match c {
                    Clause::Partition(p) => unit.partitions.push(p),
                    other => kernel_clauses.push(other),
                }
            }
            if !kernel_clauses.is_empty() {
                pending
                    .get_or_insert_with(|| PragmaAst {
                        line: first,
                        clauses: Vec::new(),
                    })
                    .clauses
                    .extend(kernel_clauses);
            }
            i = ln + 1;
            continue;
        }
        if !line.trim().is_empty() {
            if let Some(p) = pending.take() {
                match kernel_signature().captures(line) {
                    Some(cap) => unit.kernels.push((cap[1].to_string(), p)),
                    None => {
                        return Err(ParseError::new(
                            p.line,
                            1,
                            format!("pragma is not followed by a `__kernel void` signature (line {})", i + 1),
                        ))
                    }
                }
            }
        }
        i += 1;
    }
    if let Some(p) = pending {
        return Err(ParseError::new(p.line, 1, "pragma is not followed by a `__kernel void` signature"));
    }
    Ok(unit)
}

/// Parse a source file straight to access declarations.
pub fn parse_decls(text: &str) -> PResult<Vec<AccessDecl>> {
    parse_source(text)?.decls()
}

pub fn emit_metadata(decls: &[AccessDecl]) -> String {
    let mut out = String::new();
    for d in decls {
        out.push_str(&format!("kernel {}\n", d.kernel));
        for a in &d.arrays {
            for (kind, pat) in [(AccessKind::Use, &a.uses), (AccessKind::Def, &a.defs)] {
                match pat {
                    None => {}
                    Some(AccessPattern::Absolute) => out.push_str(&format!("{}abs {}\n", kind.as_str(), a.array)),
                    Some(AccessPattern::Offsets(ts)) => {
                        for t in ts {
                            out.push_str(&format!("{} {} {}\n", kind.as_str(), a.array, t));
                        }
                    }
                }
            }
        }
        out.push_str("endkernel\n");
    }
    out
}

fn is_name(s: &str) -> bool {
    let mut c = s.chars();
    matches!(c.next(), Some(f) if f.is_ascii_alphabetic() || f == '_') && c.all(|x| x.is_ascii_alphanumeric() || x == '_')
}

pub fn load_metadata(text: &str) -> PResult<Vec<AccessDecl>> {
    let mut out: Vec<AccessDecl> = Vec::new();
    let mut seen = HashSet::new();
    let mut cur: Option<AccessDecl> = None;
    let mut last_line = 0;
    for (n, raw) in text.lines().enumerate() {
        let ln = n + 1;
        last_line = ln;
        let line = raw.trim();
        if line.is_empty() {
            continue;
        }
        let col = raw.len() - raw.trim_start().len() + 1;
        let (word, rest) = line.split_once(char::is_whitespace).unwrap_or((line, ""));
        let rest = rest.trim();
        let bad = |m: String| ParseError::new(ln, col, m);
        match word {
            "kernel" => {
                if cur.is_some() {
                    return Err(bad("`kernel` inside an open kernel block".into()));
                }
                if !is_name(rest) {
                    return Err(bad(format!("invalid kernel name `{rest}`")));
                }
                if !seen.insert(rest.to_string()) {
                    return Err(bad(format!("duplicate kernel `{rest}`")));
                }
                cur = Some(AccessDecl::new(rest));
            }
            "endkernel" => {
                if !rest.is_empty() {
                    return Err(bad("unexpected text after `endkernel`".into()));
                }
                out.push(cur.take().ok_or_else(|| bad("`endkernel` without `kernel`".into()))?);
            }
            "use" | "def" | "useabs" | "defabs" => {
                let d = cur.as_mut().ok_or_else(|| bad(format!("`{word}` outside a kernel block")))?;
                let kind = if word.starts_with("use") { AccessKind::Use } else { AccessKind::Def };
                if word.ends_with("abs") {
                    if !is_name(rest) {
                        return Err(bad(format!("invalid array name `{rest}`")));
                    }
                    d.add_absolute(kind, rest).map_err(bad)?;
                } else {
                    let (name, tuple) = rest
                        .split_once(char::is_whitespace)
                        .ok_or_else(|| bad(format!("`{word}` needs an array name and an offset tuple")))?;
                    if !is_name(name) {
                        return Err(bad(format!("invalid array name `{name}`")));
                    }
                    let tcol = col + line.len() - tuple.trim_start().len();
                    let chars: Vec<PosChar> = tuple
                        .trim_start()
                        .char_indices()
                        .map(|(k, c)| (c, ln, tcol + k))
                        .collect();
                    let toks = lex(&chars, (ln, raw.len() + 1))?;
                    let mut p = Parser {
                        toks,
                        pos: 0,
                        end: (ln, raw.len() + 1),
                    };
                    let t = p.offsets()?;
                    if p.peek().is_some() {
                        return p.err("unexpected text after offset tuple");
                    }
                    d.add_offsets(kind, name, t).map_err(bad)?;
                }
            }
            other => return Err(bad(format!("unknown directive `{other}`"))),
        }
    }
    if let Some(d) = cur {
        return Err(ParseError::new(
            last_line.max(1),
            1,
            format!("kernel `{}` is missing `endkernel`", d.kernel),
        ));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    const LISTING: &str = "#pragma hdarray use(A,(0,*)) use(B,(*,0)) def(C,(0,0))\n\
__kernel void gemm(__global float *A, __global float *B, __global float *C,\n\
                   float alph, float beta, int ni, int nj, int nk) {\n}\n";

    fn t(v: &[Option<i64>]) -> OffsetTuple {
        OffsetTuple(v.iter().map(|o| o.map_or(Offset::Star, Offset::Fixed)).collect())
    }

    #[test]
    fn gemm_pragma() {
        let d = parse_decls(LISTING).unwrap();
        assert_eq!(d.len(), 1);
        assert_eq!(d[0].kernel, "gemm");
        assert_eq!(
            d[0].array("A").unwrap().uses,
            Some(AccessPattern::Offsets(vec![t(&[Some(0), None])]))
        );
        assert_eq!(
            d[0].array("B").unwrap().uses,
            Some(AccessPattern::Offsets(vec![t(&[None, Some(0)])]))
        );
        assert_eq!(
            d[0].array("C").unwrap().defs,
            Some(AccessPattern::Offsets(vec![t(&[Some(0), Some(0)])]))
        );
        assert_eq!(
            emit_metadata(&d),
            "kernel gemm\nuse A (0,*)\nuse B (*,0)\ndef C (0,0)\nendkernel\n"
        );
    }

    #[test]
    fn partition_with_continuations() {
        let src = "...\n#pragma hdarray partition(part0,        (10240,10240),\\\n                          dev:0,   (0,3008),(0,10240),\\  \n                          dev:1,(3008,7232),(0,10240))\n";
        let u = parse_source(src).unwrap();
        assert!(u.kernels.is_empty());
        let p = &u.partitions[0];
        assert_eq!(p.id, "part0");
        assert_eq!(p.domain, vec![10240, 10240]);
        assert_eq!(p.regions[0], (0, Section::new(&[(0, 3008), (0, 10240)]).unwrap()));
        assert_eq!(p.regions[1], (1, Section::new(&[(3008, 7232), (0, 10240)]).unwrap()));
    }

    #[test]
    fn bad_offset_is_positioned() {
        let e = parse_source("#pragma hdarray use(A,(0,?))\n__kernel void k(){}").unwrap_err();
        assert_eq!((e.line, e.col), (1, 26));
    }

    #[test]
    fn stacked_pragmas_merge() {
        let src = "#pragma hdarray use(B,(0,-1)) use(B,(0,+1))\n#pragma hdarray use(B,(-1,0)) use(B,(+1,0)) def(A,(0,0))\n\n__kernel  void jacobi(...)";
        let d = parse_decls(src).unwrap();
        let Some(AccessPattern::Offsets(v)) = &d[0].array("B").unwrap().uses else { panic!() };
        assert_eq!(
            v,
            &vec![
                t(&[Some(0), Some(-1)]),
                t(&[Some(0), Some(1)]),
                t(&[Some(-1), Some(0)]),
                t(&[Some(1), Some(0)])
            ]
        );
    }

    #[test]
    fn missing_signature() {
        assert!(parse_source("#pragma hdarray def(A,(0))\nint x;\n").is_err());
        assert!(parse_source("#pragma hdarray def(A,(0))\n").is_err());
    }

    #[test]
    fn unknown_clause() {
        let e = parse_source("#pragma hdarray reads(A,(0))\n__kernel void k(").unwrap_err();
        assert!(e.msg.contains("unknown clause"));
    }

    #[test]
    fn other_pragmas_ignored() {
        let u = parse_source("#pragma unroll\n#pragma OPENCL EXTENSION x : enable\nint y;").unwrap();
        assert!(u.kernels.is_empty());
    }

    #[test]
    fn metadata_errors() {
        assert!(load_metadata("kernel a\nendkernel\nkernel a\nendkernel\n").is_err());
        let e = load_metadata("kernel a\nuse A (0,0)\nfoo\nendkernel\n").unwrap_err();
        assert_eq!(e.line, 3);
        assert!(load_metadata("kernel a\n").is_err());
        assert!(load_metadata("").unwrap().is_empty());
        let d = load_metadata("kernel c\nuseabs data\ndefabs sym\nendkernel\n").unwrap();
        assert_eq!(d[0].array("data").unwrap().uses, Some(AccessPattern::Absolute));
        assert_eq!(emit_metadata(&d), "kernel c\nuseabs data\ndefabs sym\nendkernel\n");
    }
}
