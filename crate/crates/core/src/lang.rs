//! Source language frontend: parsing and checking.
//!
//! The surface syntax is a minimal ML-like language of datatype and
//! function definitions:
//!
//! ```text
//! data list = Nil | Cons int list      # constructors are capitalized
//! fn add1 x = x + 1                    # functions and variables lowercase
//! fn map l = match l { Nil -> Nil | Cons h t -> Cons (add1 h) (map t) }
//! ```
//!
//! `let x = e in e`, `match e { Ctor xs -> e | ... }`, 64-bit wrapping
//! integer addition, juxtaposition application with parentheses for
//! grouping, comments `# ...` to end of line.

use crate::term::{Ctor, CtorTable};
use std::collections::{HashMap, HashSet};
use std::fmt;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct Pos {
    pub line: u32,
    pub col: u32,
}

impl fmt::Display for Pos {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}", self.line, self.col)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum TypeExpr {
    Int,
    Name(String, Vec<TypeExpr>),
}

#[derive(Debug, Clone, PartialEq)]
pub enum Definition {
    Data {
        name: String,
        params: Vec<String>,
        ctors: Vec<(String, Vec<TypeExpr>)>,
        pos: Pos,
    },
    Fn {
        name: String,
        params: Vec<String>,
        body: Expr,
        pos: Pos,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub enum Expr {
    Var(String, Pos),
    Int(i64, Pos),
    Add(Box<Expr>, Box<Expr>, Pos),
    Let(String, Box<Expr>, Box<Expr>, Pos),
    CtorApp(String, Vec<Expr>, Pos),
    FnApp(String, Vec<Expr>, Pos),
    Match(Box<Expr>, Vec<Arm>, Pos),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Arm {
    pub ctor: String,
    pub binders: Vec<String>,
    pub body: Expr,
    pub pos: Pos,
}

impl Expr {
    pub fn pos(&self) -> Pos {
        match self {
            Expr::Var(_, p)
            | Expr::Int(_, p)
            | Expr::Add(_, _, p)
            | Expr::Let(_, _, _, p)
            | Expr::CtorApp(_, _, p)
            | Expr::FnApp(_, _, p)
            | Expr::Match(_, _, p) => *p,
        }
    }
}

// ---------------------------------------------------------------------------
// Lexer
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq)]
enum Tok {
    LIdent(String),
    UIdent(String),
    Int(i64),
    KwData,
    KwFn,
    KwLet,
    KwIn,
    KwMatch,
    KwInt,
    Eq,
    Bar,
    LBrace,
    RBrace,
    LParen,
    RParen,
    Arrow,
    Plus,
    Eof,
}

impl fmt::Display for Tok {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Tok::LIdent(s) | Tok::UIdent(s) => return write!(f, "'{s}'"),
            Tok::Int(i) => return write!(f, "'{i}'"),
            Tok::KwData => "'data'",
            Tok::KwFn => "'fn'",
            Tok::KwLet => "'let'",
            Tok::KwIn => "'in'",
            Tok::KwMatch => "'match'",
            Tok::KwInt => "'int'",
            Tok::Eq => "'='",
            Tok::Bar => "'|'",
            Tok::LBrace => "'{'",
            Tok::RBrace => "'}'",
            Tok::LParen => "'('",
            Tok::RParen => "')'",
            Tok::Arrow => "'->'",
            Tok::Plus => "'+'",
            Tok::Eof => "end of input",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, thiserror::Error)]
#[error("parse error at {pos}: {msg} (expected {expected})")]
pub struct ParseError {
    pub pos: Pos,
    pub msg: String,
    pub expected: String,
}

fn lex(src: &str) -> Result<Vec<(Tok, Pos)>, ParseError> {
    let mut out = Vec::new();
    let mut line = 1u32;
    let mut col = 1u32;
    let bytes = src.as_bytes();
    let mut i = 0;
    while i < bytes.len() {
        let c = bytes[i];
        let pos = Pos { line, col };
        match c {
            b'\n' => {
                line += 1;
                col = 1;
                i += 1;
            }
            c if c.is_ascii_whitespace() => {
                col += 1;
                i += 1;
            }
            b'#' => {
                while i < bytes.len() && bytes[i] != b'\n' {
                    i += 1;
                }
            }
            b'=' => {
                out.push((Tok::Eq, pos));
                i += 1;
                col += 1;
            }
            b'|' => {
                out.push((Tok::Bar, pos));
                i += 1;
                col += 1;
            }
            b'{' => {
                out.push((Tok::LBrace, pos));
                i += 1;
                col += 1;
            }
            b'}' => {
                out.push((Tok::RBrace, pos));
                i += 1;
                col += 1;
            }
            b'(' => {
                out.push((Tok::LParen, pos));
                i += 1;
                col += 1;
            }
            b')' => {
                out.push((Tok::RParen, pos));
                i += 1;
                col += 1;
            }
            b'+' => {
                out.push((Tok::Plus, pos));
                i += 1;
                col += 1;
            }
            b'-' => {
                if i + 1 < bytes.len() && bytes[i + 1] == b'>' {
                    out.push((Tok::Arrow, pos));
                    i += 2;
                    col += 2;
                } else if i + 1 < bytes.len() && bytes[i + 1].is_ascii_digit() {
                    let start = i;
                    i += 1;
                    while i < bytes.len() && bytes[i].is_ascii_digit() {
                        i += 1;
                    }
                    let text = &src[start..i];
                    let v = text.parse::<i64>().map_err(|e| ParseError {
                        pos,
                        msg: format!("integer literal {text}: {e}"),
                        expected: "integer".into(),
                    })?;
                    col += (i - start) as u32;
                    out.push((Tok::Int(v), pos));
                } else {
                    return Err(ParseError {
                        pos,
                        msg: "stray '-'".into(),
                        expected: "'->' or integer literal".into(),
                    });
                }
            }
            c if c.is_ascii_digit() => {
                let start = i;
                while i < bytes.len() && bytes[i].is_ascii_digit() {
                    i += 1;
                }
                let text = &src[start..i];
                let v = text.parse::<i64>().map_err(|e| ParseError {
                    pos,
                    msg: format!("integer literal {text}: {e}"),
                    expected: "integer".into(),
                })?;
                col += (i - start) as u32;
                out.push((Tok::Int(v), pos));
            }
            c if c.is_ascii_alphabetic() || c == b'_' => {
                let start = i;
                while i < bytes.len()
                    && (bytes[i].is_ascii_alphanumeric() || bytes[i] == b'_' || bytes[i] == b'\'')
                {
                    i += 1;
                }
                let text = &src[start..i];
                col += (i - start) as u32;
                let tok = match text {
                    "data" => Tok::KwData,
                    "fn" => Tok::KwFn,
                    "let" => Tok::KwLet,
                    "in" => Tok::KwIn,
                    "match" => Tok::KwMatch,
                    "int" => Tok::KwInt,
                    _ if text.as_bytes()[0].is_ascii_uppercase() => Tok::UIdent(text.to_string()),
                    _ => Tok::LIdent(text.to_string()),
                };
                out.push((tok, pos));
            }
            other => {
                return Err(ParseError {
                    pos,
                    msg: format!("unexpected character {:?}", other as char),
                    expected: "token".into(),
                })
            }
        }
    }
    out.push((Tok::Eof, Pos { line, col }));
    Ok(out)
}

// ---------------------------------------------------------------------------
// Parser
// ---------------------------------------------------------------------------

struct Parser {
    toks: Vec<(Tok, Pos)>,
    i: usize,
}

impl Parser {
    fn peek(&self) -> &Tok {
        &self.toks[self.i].0
    }

    fn pos(&self) -> Pos {
        self.toks[self.i].1
    }

    fn next(&mut self) -> Tok {
        let t = self.toks[self.i].0.clone();
        if self.i + 1 < self.toks.len() {
            self.i += 1;
        }
        t
    }

    fn err(&self, expected: &str) -> ParseError {
        ParseError {
            pos: self.pos(),
            msg: format!("unexpected {}", self.peek()),
            expected: expected.to_string(),
        }
    }

    fn expect(&mut self, tok: Tok, expected: &str) -> Result<(), ParseError> {
        if *self.peek() == tok {
            self.next();
            Ok(())
        } else {
            Err(self.err(expected))
        }
    }

    fn lident(&mut self, what: &str) -> Result<String, ParseError> {
        match self.peek().clone() {
            Tok::LIdent(s) => {
                self.next();
                Ok(s)
            }
            _ => Err(self.err(what)),
        }
    }

    fn uident(&mut self, what: &str) -> Result<String, ParseError> {
        match self.peek().clone() {
            Tok::UIdent(s) => {
                self.next();
                Ok(s)
            }
            _ => Err(self.err(what)),
        }
    }

    fn program(&mut self) -> Result<Vec<Definition>, ParseError> {
        let mut defs = Vec::new();
        while *self.peek() != Tok::Eof {
            defs.push(self.definition()?);
        }
        Ok(defs)
    }

    fn definition(&mut self) -> Result<Definition, ParseError> {
        let pos = self.pos();
        match self.peek() {
            Tok::KwData => {
                self.next();
                let name = self.lident("datatype name")?;
                let mut params = Vec::new();
                while let Tok::LIdent(p) = self.peek().clone() {
                    self.next();
                    params.push(p);
                }
                self.expect(Tok::Eq, "'=' after datatype header")?;
                let mut ctors = vec![self.ctor_def()?];
                while *self.peek() == Tok::Bar {
                    self.next();
                    ctors.push(self.ctor_def()?);
                }
                Ok(Definition::Data { name, params, ctors, pos })
            }
            Tok::KwFn => {
                self.next();
                let name = self.lident("function name")?;
                let mut params = Vec::new();
                while let Tok::LIdent(p) = self.peek().clone() {
                    self.next();
                    params.push(p);
                }
                self.expect(Tok::Eq, "'=' after function header")?;
                let body = self.expr()?;
                Ok(Definition::Fn { name, params, body, pos })
            }
            _ => Err(self.err("'data' or 'fn'")),
        }
    }

    fn ctor_def(&mut self) -> Result<(String, Vec<TypeExpr>), ParseError> {
        let name = self.uident("constructor name")?;
        let mut args = Vec::new();
        loop {
            match self.peek() {
                Tok::KwInt => {
                    self.next();
                    args.push(TypeExpr::Int);
                }
                Tok::LIdent(_) => {
                    let n = self.lident("type name").unwrap();
                    args.push(TypeExpr::Name(n, Vec::new()));
                }
                Tok::LParen => {
                    self.next();
                    let n = self.lident("type name")?;
                    let mut targs = Vec::new();
                    while *self.peek() != Tok::RParen {
                        targs.push(self.type_atom()?);
                    }
                    self.next();
                    args.push(TypeExpr::Name(n, targs));
                }
                _ => break,
            }
        }
        Ok((name, args))
    }

    fn type_atom(&mut self) -> Result<TypeExpr, ParseError> {
        match self.peek().clone() {
            Tok::KwInt => {
                self.next();
                Ok(TypeExpr::Int)
            }
            Tok::LIdent(n) => {
                self.next();
                Ok(TypeExpr::Name(n, Vec::new()))
            }
            Tok::LParen => {
                self.next();
                let n = self.lident("type name")?;
                let mut targs = Vec::new();
                while *self.peek() != Tok::RParen {
                    targs.push(self.type_atom()?);
                }
                self.next();
                Ok(TypeExpr::Name(n, targs))
            }
            _ => Err(self.err("type")),
        }
    }

    fn expr(&mut self) -> Result<Expr, ParseError> {
        let pos = self.pos();
        match self.peek() {
            Tok::KwLet => {
                self.next();
                let name = self.lident("let binder")?;
                self.expect(Tok::Eq, "'=' in let")?;
                let bound = self.expr()?;
                self.expect(Tok::KwIn, "'in'")?;
                let body = self.expr()?;
                Ok(Expr::Let(name, Box::new(bound), Box::new(body), pos))
            }
            Tok::KwMatch => {
                self.next();
                let scrutinee = self.expr()?;
                self.expect(Tok::LBrace, "'{' opening match arms")?;
                let mut arms = vec![self.arm()?];
                while *self.peek() == Tok::Bar {
                    self.next();
                    arms.push(self.arm()?);
                }
                self.expect(Tok::RBrace, "'}' or '|'")?;
                Ok(Expr::Match(Box::new(scrutinee), arms, pos))
            }
            _ => self.additive(),
        }
    }

    fn arm(&mut self) -> Result<Arm, ParseError> {
        let pos = self.pos();
        let ctor = self.uident("constructor pattern")?;
        let mut binders = Vec::new();
        while let Tok::LIdent(b) = self.peek().clone() {
            self.next();
            binders.push(b);
        }
        self.expect(Tok::Arrow, "'->'")?;
        let body = self.expr()?;
        Ok(Arm { ctor, binders, body, pos })
    }

    fn additive(&mut self) -> Result<Expr, ParseError> {
        let mut lhs = self.application()?;
        while *self.peek() == Tok::Plus {
            let pos = self.pos();
            self.next();
            let rhs = self.application()?;
            lhs = Expr::Add(Box::new(lhs), Box::new(rhs), pos);
        }
        Ok(lhs)
    }

    fn application(&mut self) -> Result<Expr, ParseError> {
        let pos = self.pos();
        match self.peek().clone() {
            Tok::UIdent(name) => {
                self.next();
                let args = self.atoms()?;
                Ok(Expr::CtorApp(name, args, pos))
            }
            Tok::LIdent(name) => {
                self.next();
                let args = self.atoms()?;
                if args.is_empty() {
                    Ok(Expr::Var(name, pos))
                } else {
                    Ok(Expr::FnApp(name, args, pos))
                }
            }
            _ => self.atom(),
        }
    }

    fn atoms(&mut self) -> Result<Vec<Expr>, ParseError> {
        let mut args = Vec::new();
        loop {
            match self.peek() {
                Tok::Int(_) | Tok::LParen => args.push(self.atom()?),
                Tok::LIdent(_) | Tok::UIdent(_) => {
                    let pos = self.pos();
                    match self.next() {
                        Tok::LIdent(n) => args.push(Expr::Var(n, pos)),
                        Tok::UIdent(n) => args.push(Expr::CtorApp(n, Vec::new(), pos)),
                        _ => unreachable!(),
                    }
                }
                _ => break,
            }
        }
        Ok(args)
    }

    fn atom(&mut self) -> Result<Expr, ParseError> {
        let pos = self.pos();
        match self.peek().clone() {
            Tok::Int(v) => {
                self.next();
                Ok(Expr::Int(v, pos))
            }
            Tok::LIdent(n) => {
                self.next();
                Ok(Expr::Var(n, pos))
            }
            Tok::UIdent(n) => {
                self.next();
                Ok(Expr::CtorApp(n, Vec::new(), pos))
            }
            Tok::LParen => {
                self.next();
                let e = self.expr()?;
                self.expect(Tok::RParen, "')'")?;
                Ok(e)
            }
            _ => Err(self.err("expression")),
        }
    }
}

pub fn parse_program(src: &str) -> Result<Vec<Definition>, ParseError> {
    let toks = lex(src)?;
    let mut p = Parser { toks, i: 0 };
    p.program()
}

// ---------------------------------------------------------------------------
// Checker
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, thiserror::Error)]
#[error("check error in '{def}' at {pos}: {msg}")]
pub struct CheckError {
    pub def: String,
    pub pos: Pos,
    pub msg: String,
}

#[derive(Debug, Clone)]
pub struct CtorMeta {
    pub ctor: Ctor,
    pub name: String,
    pub arity: u32,
    pub dtype: usize,
    pub ordinal: u32,
}

#[derive(Debug, Clone)]
pub struct DataMeta {
    pub name: String,
    pub ctor_names: Vec<String>,
}

#[derive(Debug, Clone)]
pub struct CheckedFn {
    pub name: String,
    pub params: Vec<String>,
    pub body: Expr,
    pub pos: Pos,
}

/// A parsed program with all names resolved, arities verified, and
/// constructors interned.
#[derive(Debug, Clone)]
pub struct CheckedProgram {
    pub fns: Vec<CheckedFn>,
    pub fn_index: HashMap<String, usize>,
    pub ctors: HashMap<String, CtorMeta>,
    pub datatypes: Vec<DataMeta>,
    /// Non-exhaustive matches and similar advisories; never fatal.
    pub warnings: Vec<String>,
}

pub fn check_program(
    defs: &[Definition],
    table: &mut CtorTable,
) -> Result<CheckedProgram, CheckError> {
    let mut ctors: HashMap<String, CtorMeta> = HashMap::new();
    let mut datatypes: Vec<DataMeta> = Vec::new();
    let mut dtype_index: HashMap<String, usize> = HashMap::new();
    let mut warnings = Vec::new();

    for def in defs {
        if let Definition::Data { name, params, ctors: cs, pos } = def {
            if dtype_index.contains_key(name) {
                return Err(CheckError {
                    def: name.clone(),
                    pos: *pos,
                    msg: format!("duplicate datatype '{name}'"),
                });
            }
            let dt = datatypes.len();
            dtype_index.insert(name.clone(), dt);
            let mut meta = DataMeta { name: name.clone(), ctor_names: Vec::new() };
            let mut seen_params = HashSet::new();
            for p in params {
                if !seen_params.insert(p.clone()) {
                    return Err(CheckError {
                        def: name.clone(),
                        pos: *pos,
                        msg: format!("duplicate type parameter '{p}'"),
                    });
                }
            }
            for (ordinal, (cname, args)) in cs.iter().enumerate() {
                if ctors.contains_key(cname) {
                    return Err(CheckError {
                        def: name.clone(),
                        pos: *pos,
                        msg: format!("duplicate constructor '{cname}'"),
                    });
                }
                let arity = args.len() as u32;
                let ctor = table.intern(cname, arity);
                ctors.insert(
                    cname.clone(),
                    CtorMeta {
                        ctor,
                        name: cname.clone(),
                        arity,
                        dtype: dt,
                        ordinal: ordinal as u32,
                    },
                );
                meta.ctor_names.push(cname.clone());
            }
            datatypes.push(meta);
        }
    }

    // second pass: type references inside data definitions
    for def in defs {
        if let Definition::Data { name, params, ctors: cs, pos } = def {
            let param_set: HashSet<&String> = params.iter().collect();
            for (_, args) in cs {
                for t in args {
                    check_type(t, name, &param_set, &dtype_index, *pos)?;
                }
            }
        }
    }

    let mut fns = Vec::new();
    let mut fn_index = HashMap::new();
    for def in defs {
        if let Definition::Fn { name, params, pos, .. } = def {
            if fn_index.contains_key(name) {
                return Err(CheckError {
                    def: name.clone(),
                    pos: *pos,
                    msg: format!("duplicate function '{name}'"),
                });
            }
            let mut seen = HashSet::new();
            for p in params {
                if !seen.insert(p.clone()) {
                    return Err(CheckError {
                        def: name.clone(),
                        pos: *pos,
                        msg: format!("duplicate parameter '{p}'"),
                    });
                }
            }
            fn_index.insert(name.clone(), fns.len());
            fns.push(CheckedFn {
                name: name.clone(),
                params: params.clone(),
                body: Expr::Int(0, *pos), // replaced below
                pos: *pos,
            });
        }
    }

    let mut checked_bodies = Vec::new();
    for def in defs {
        if let Definition::Fn { name, params, body, .. } = def {
            let mut scope: Vec<String> = params.clone();
            let body = check_expr(body, name, &mut scope, &ctors, &fn_index, defs, &datatypes, &mut warnings)?;
            checked_bodies.push((name.clone(), body));
        }
    }
    for (name, body) in checked_bodies {
        let idx = fn_index[&name];
        fns[idx].body = body;
    }

    Ok(CheckedProgram { fns, fn_index, ctors, datatypes, warnings })
}

fn check_type(
    t: &TypeExpr,
    def: &str,
    params: &HashSet<&String>,
    dtypes: &HashMap<String, usize>,
    pos: Pos,
) -> Result<(), CheckError> {
    match t {
        TypeExpr::Int => Ok(()),
        TypeExpr::Name(n, args) => {
            if args.is_empty() && params.contains(n) {
                return Ok(());
            }
            if !dtypes.contains_key(n) {
                return Err(CheckError {
                    def: def.to_string(),
                    pos,
                    msg: format!("unknown type '{n}'"),
                });
            }
            for a in args {
                check_type(a, def, params, dtypes, pos)?;
            }
            Ok(())
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn check_expr(
    e: &Expr,
    def: &str,
    scope: &mut Vec<String>,
    ctors: &HashMap<String, CtorMeta>,
    fn_index: &HashMap<String, usize>,
    defs: &[Definition],
    datatypes: &[DataMeta],
    warnings: &mut Vec<String>,
) -> Result<Expr, CheckError> {
    let fn_arity = |name: &str| -> Option<usize> {
        let idx = *fn_index.get(name)?;
        let mut seen = 0usize;
        for d in defs {
            if let Definition::Fn { params, .. } = d {
                if seen == idx {
                    return Some(params.len());
                }
                seen += 1;
            }
        }
        None
    };
    let err = |pos: Pos, msg: String| CheckError { def: def.to_string(), pos, msg };
    match e {
        Expr::Int(..) => Ok(e.clone()),
        Expr::Var(name, pos) => {
            if scope.iter().rev().any(|s| s == name) {
                Ok(e.clone())
            } else if let Some(arity) = fn_arity(name) {
                if arity == 0 {
                    Ok(Expr::FnApp(name.clone(), Vec::new(), *pos))
                } else {
                    Err(err(
                        *pos,
                        format!("function '{name}' takes {arity} arguments but none were given"),
                    ))
                }
            } else {
                Err(err(*pos, format!("unbound variable '{name}'")))
            }
        }
        Expr::Add(a, b, pos) => Ok(Expr::Add(
            Box::new(check_expr(a, def, scope, ctors, fn_index, defs, datatypes, warnings)?),
            Box::new(check_expr(b, def, scope, ctors, fn_index, defs, datatypes, warnings)?),
            *pos,
        )),
        Expr::Let(x, bound, body, pos) => {
            let bound = check_expr(bound, def, scope, ctors, fn_index, defs, datatypes, warnings)?;
            scope.push(x.clone());
            let body = check_expr(body, def, scope, ctors, fn_index, defs, datatypes, warnings)?;
            scope.pop();
            Ok(Expr::Let(x.clone(), Box::new(bound), Box::new(body), *pos))
        }
        Expr::CtorApp(name, args, pos) => {
            let meta = ctors
                .get(name)
                .ok_or_else(|| err(*pos, format!("unknown constructor '{name}'")))?;
            if meta.arity as usize != args.len() {
                return Err(err(
                    *pos,
                    format!(
                        "arity mismatch: constructor '{name}' takes {} arguments, got {}",
                        meta.arity,
                        args.len()
                    ),
                ));
            }
            let args = args
                .iter()
                .map(|a| check_expr(a, def, scope, ctors, fn_index, defs, datatypes, warnings))
                .collect::<Result<Vec<_>, _>>()?;
            Ok(Expr::CtorApp(name.clone(), args, *pos))
        }
        Expr::FnApp(name, args, pos) => {
            let arity = fn_arity(name)
                .ok_or_else(|| err(*pos, format!("unknown function '{name}'")))?;
            if arity != args.len() {
                return Err(err(
                    *pos,
                    format!(
                        "arity mismatch: function '{name}' takes {arity} arguments, got {}",
                        args.len()
                    ),
                ));
            }
            let args = args
                .iter()
                .map(|a| check_expr(a, def, scope, ctors, fn_index, defs, datatypes, warnings))
                .collect::<Result<Vec<_>, _>>()?;
            Ok(Expr::FnApp(name.clone(), args, *pos))
        }
        Expr::Match(scrutinee, arms, pos) => {
            let scrutinee =
                check_expr(scrutinee, def, scope, ctors, fn_index, defs, datatypes, warnings)?;
            let mut dtype: Option<usize> = None;
            let mut covered = HashSet::new();
            let mut new_arms = Vec::new();
            for arm in arms {
                let meta = ctors
                    .get(&arm.ctor)
                    .ok_or_else(|| err(arm.pos, format!("unknown constructor '{}'", arm.ctor)))?;
                match dtype {
                    None => dtype = Some(meta.dtype),
                    Some(d) if d == meta.dtype => {}
                    Some(d) => {
                        return Err(err(
                            arm.pos,
                            format!(
                                "match arms mix datatypes '{}' and '{}'",
                                datatypes[d].name, datatypes[meta.dtype].name
                            ),
                        ))
                    }
                }
                if !covered.insert(arm.ctor.clone()) {
                    return Err(err(arm.pos, format!("duplicate match arm '{}'", arm.ctor)));
                }
                if arm.binders.len() != meta.arity as usize {
                    return Err(err(
                        arm.pos,
                        format!(
                            "arm '{}' binds {} variables, constructor takes {}",
                            arm.ctor,
                            arm.binders.len(),
                            meta.arity
                        ),
                    ));
                }
                let mut seen = HashSet::new();
                for b in &arm.binders {
                    if !seen.insert(b.clone()) {
                        return Err(err(arm.pos, format!("duplicate binder '{b}'")));
                    }
                }
                let depth = scope.len();
                scope.extend(arm.binders.iter().cloned());
                let body =
                    check_expr(&arm.body, def, scope, ctors, fn_index, defs, datatypes, warnings)?;
                scope.truncate(depth);
                new_arms.push(Arm {
                    ctor: arm.ctor.clone(),
                    binders: arm.binders.clone(),
                    body,
                    pos: arm.pos,
                });
            }
            if let Some(d) = dtype {
                if covered.len() < datatypes[d].ctor_names.len() {
                    warnings.push(format!(
                        "{def}: non-exhaustive match at {pos} over '{}'",
                        datatypes[d].name
                    ));
                }
            }
            Ok(Expr::Match(Box::new(scrutinee), new_arms, *pos))
        }
    }
}

// ---------------------------------------------------------------------------
// Pretty printer
// ---------------------------------------------------------------------------

pub fn pretty_program(defs: &[Definition]) -> String {
    let mut out = String::new();
    for def in defs {
        match def {
            Definition::Data { name, params, ctors, .. } => {
                out.push_str("data ");
                out.push_str(name);
                for p in params {
                    out.push(' ');
                    out.push_str(p);
                }
                out.push_str(" = ");
                for (i, (cname, args)) in ctors.iter().enumerate() {
                    if i > 0 {
                        out.push_str(" | ");
                    }
                    out.push_str(cname);
                    for t in args {
                        out.push(' ');
                        pretty_type(t, &mut out);
                    }
                }
                out.push('\n');
            }
            Definition::Fn { name, params, body, .. } => {
                out.push_str("fn ");
                out.push_str(name);
                for p in params {
                    out.push(' ');
                    out.push_str(p);
                }
                out.push_str(" = ");
                pretty_expr(body, &mut out);
                out.push('\n');
            }
        }
    }
    out
}

fn pretty_type(t: &TypeExpr, out: &mut String) {
    match t {
        TypeExpr::Int => out.push_str("int"),
        TypeExpr::Name(n, args) if args.is_empty() => out.push_str(n),
        TypeExpr::Name(n, args) => {
            out.push('(');
            out.push_str(n);
            for a in args {
                out.push(' ');
                pretty_type(a, out);
            }
            out.push(')');
        }
    }
}

fn pretty_expr(e: &Expr, out: &mut String) {
    match e {
        Expr::Var(n, _) => out.push_str(n),
        Expr::Int(v, _) => {
            let _ = fmt::Write::write_fmt(out, format_args!("{v}"));
        }
        Expr::Add(a, b, _) => {
            pretty_arg(a, out);
            out.push_str(" + ");
            pretty_arg(b, out);
        }
        Expr::Let(x, bound, body, _) => {
            out.push_str("let ");
            out.push_str(x);
            out.push_str(" = ");
            pretty_expr(bound, out);
            out.push_str(" in ");
            pretty_expr(body, out);
        }
        Expr::CtorApp(n, args, _) | Expr::FnApp(n, args, _) => {
            out.push_str(n);
            for a in args {
                out.push(' ');
                pretty_atom(a, out);
            }
        }
        Expr::Match(scrutinee, arms, _) => {
            out.push_str("match ");
            pretty_arg(scrutinee, out);
            out.push_str(" { ");
            for (i, arm) in arms.iter().enumerate() {
                if i > 0 {
                    out.push_str(" | ");
                }
                out.push_str(&arm.ctor);
                for b in &arm.binders {
                    out.push(' ');
                    out.push_str(b);
                }
                out.push_str(" -> ");
                pretty_expr(&arm.body, out);
            }
            out.push_str(" }");
        }
    }
}

/// Operand position of `+` or match scrutinee: applications are fine,
/// lower-precedence forms need parens.
fn pretty_arg(e: &Expr, out: &mut String) {
    match e {
        Expr::Let(..) | Expr::Match(..) | Expr::Add(..) => {
            out.push('(');
            pretty_expr(e, out);
            out.push(')');
        }
        _ => pretty_expr(e, out),
    }
}

/// Argument position of an application: only bare atoms survive unwrapped.
fn pretty_atom(e: &Expr, out: &mut String) {
    match e {
        Expr::Var(..) | Expr::Int(..) => pretty_expr(e, out),
        Expr::CtorApp(_, args, _) if args.is_empty() => pretty_expr(e, out),
        _ => {
            out.push('(');
            pretty_expr(e, out);
            out.push(')');
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    pub const BITFLIP: &str = "\
data list = Nil | Cons0 list | Cons1 list
fn f l = match l { Nil -> Nil | Cons0 t -> Cons1 (f t) | Cons1 t -> Cons0 (f t) }
";

    #[test]
    fn parse_data_def() {
        let defs = parse_program("data nat = Z | S nat").unwrap();
        assert_eq!(defs.len(), 1);
        match &defs[0] {
            Definition::Data { name, params, ctors, .. } => {
                assert_eq!(name, "nat");
                assert!(params.is_empty());
                assert_eq!(ctors.len(), 2);
                assert_eq!(ctors[0].0, "Z");
                assert!(ctors[0].1.is_empty());
                assert_eq!(ctors[1].0, "S");
                assert_eq!(ctors[1].1, vec![TypeExpr::Name("nat".into(), vec![])]);
            }
            _ => panic!("expected data def"),
        }
    }

    #[test]
    fn parse_bitflip() {
        let defs = parse_program(BITFLIP).unwrap();
        assert_eq!(defs.len(), 2);
        assert!(matches!(&defs[0], Definition::Data { ctors, .. if true } if ctors.len() == 3));
        match &defs[1] {
            Definition::Fn { name, body, .. } => {
                assert_eq!(name, "f");
                assert!(matches!(body, Expr::Match(_, arms, _) if arms.len() == 3));
            }
            _ => panic!("expected fn"),
        }
    }

    #[test]
    fn parse_error_unbalanced() {
        let err = parse_program("data list = Nil | Cons int list\nfn f l = match l {").unwrap_err();
        assert_eq!(err.pos.line, 2);
        assert!(!err.expected.is_empty());
    }

    #[test]
    fn check_bitflip() {
        let defs = parse_program(BITFLIP).unwrap();
        let mut t = CtorTable::new();
        let p = check_program(&defs, &mut t).unwrap();
        assert_eq!(p.ctors["Nil"].arity, 0);
        assert_eq!(p.ctors["Cons0"].arity, 1);
        assert_eq!(p.ctors["Cons1"].arity, 1);
        assert!(p.warnings.is_empty());
        assert!(p.fn_index.contains_key("f"));
    }

    #[test]
    fn check_unknown_function() {
        let defs = parse_program("fn f x = g x").unwrap();
        let mut t = CtorTable::new();
        let err = check_program(&defs, &mut t).unwrap_err();
        assert!(err.msg.contains("unknown function 'g'"), "{}", err.msg);
    }

    #[test]
    fn check_ctor_arity() {
        let defs = parse_program("data nat = Z | S nat\nfn f = S Z Z").unwrap();
        let mut t = CtorTable::new();
        let err = check_program(&defs, &mut t).unwrap_err();
        assert!(err.msg.contains("arity mismatch"), "{}", err.msg);
    }

    #[test]
    fn check_unbound_and_warning() {
        let defs = parse_program("data nat = Z | S nat\nfn f n = match n { Z -> y }").unwrap();
        let mut t = CtorTable::new();
        let err = check_program(&defs, &mut t).unwrap_err();
        assert!(err.msg.contains("unbound variable 'y'"));

        let defs = parse_program("data nat = Z | S nat\nfn f n = match n { Z -> 0 }").unwrap();
        let p = check_program(&defs, &mut t).unwrap();
        assert_eq!(p.warnings.len(), 1, "non-exhaustive match should warn");
    }

    #[test]
    fn zero_arg_fn_resolves() {
        let defs = parse_program("fn c = 42\nfn f x = x + c").unwrap();
        let mut t = CtorTable::new();
        let p = check_program(&defs, &mut t).unwrap();
        let f = &p.fns[p.fn_index["f"]];
        match &f.body {
            Expr::Add(_, b, _) => assert!(matches!(&**b, Expr::FnApp(n, a, _) if n == "c" && a.is_empty())),
            other => panic!("unexpected body {other:?}"),
        }
    }

    #[test]
    fn pretty_parse_fixed_point() {
        for src in [
            BITFLIP,
            "data pairlist = PNil | PCons (pair) pairlist\ndata pair = P int int\nfn pairs l = 0",
            "fn f x = let y = x + 1 in let z = y + y in z + (f (z + 1))",
            "fn g a b = match a { T -> b + -3 }\ndata t = T",
        ] {
            if let Ok(defs) = parse_program(src) {
                let p1 = pretty_program(&defs);
                let defs2 = parse_program(&p1).unwrap();
                let p2 = pretty_program(&defs2);
                assert_eq!(p1, p2, "pretty not a fixed point for {src}");
            }
        }
    }
}
