//! Flattened terms in a monoid-annotated balanced sequence.
//!
//! A term is stored as its preorder constructor string. Every tree node
//! carries a `Summary` of its subsequence: degree sums for monoidal parsing
//! (a constructor of arity `a` has degree `1 - a`, so a complete subterm is
//! the shortest range whose degrees sum to 1), plus monoidal hashes so
//! prefix comparisons combine from part hashes instead of rescanning.
//!
//! Sequences are immutable and structurally shared; concat, split, point
//! reads, subterm location, and range hashing are all logarithmic.

use crate::crc::{self, CrcHash};
use crate::term::{degree_of_arity, CtorTable, Pattern, PatternVar};
use std::rc::Rc;
use std::sync::OnceLock;

/// Code of the nameless binder standing for a pattern variable.
pub const VAR_CODE: u32 = 0;

/// Target leaf chunk size.
pub const MAX_CHUNK: usize = 32;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Elem {
    pub code: u32,
    pub degree: i32,
}

/// Auxiliary polynomial hash over element codes, also monoidal. Carried
/// alongside the CRC so that trusted hash equality has far more than 32
/// bits behind it.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PolyHash {
    pub h: u64,
    pub pow: u64,
}

const POLY_BASE: u64 = 0x9E37_79B9_7F4A_7C15;

fn mix64(x: u64) -> u64 {
    let mut z = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

impl PolyHash {
    pub const EMPTY: PolyHash = PolyHash { h: 0, pow: 1 };

    pub fn combine(a: PolyHash, b: PolyHash) -> PolyHash {
        PolyHash {
            h: a.h.wrapping_mul(b.pow).wrapping_add(b.h),
            pow: a.pow.wrapping_mul(b.pow),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Summary {
    pub total_degree: i32,
    /// Maximum running degree over all prefixes, the empty prefix included.
    pub max_degree: i32,
    pub len: usize,
    pub hash: CrcHash,
    pub poly: PolyHash,
}

impl Summary {
    pub const EMPTY: Summary = Summary {
        total_degree: 0,
        max_degree: 0,
        len: 0,
        hash: CrcHash::EMPTY,
        poly: PolyHash::EMPTY,
    };

    pub fn combine(a: Summary, b: Summary) -> Summary {
        Summary {
            total_degree: a.total_degree + b.total_degree,
            max_degree: a.max_degree.max(a.total_degree + b.max_degree),
            len: a.len + b.len,
            hash: CrcHash::combine(a.hash, b.hash),
            poly: PolyHash::combine(a.poly, b.poly),
        }
    }

    /// Equality of hashed content (hash, shift factor, auxiliary hash, and
    /// length all agree).
    pub fn same_content_hash(&self, other: &Summary) -> bool {
        self.len == other.len && self.hash == other.hash && self.poly == other.poly
    }
}

fn shift_table() -> &'static [u32; MAX_CHUNK + 1] {
    static T: OnceLock<[u32; MAX_CHUNK + 1]> = OnceLock::new();
    T.get_or_init(|| {
        let mut t = [0u32; MAX_CHUNK + 1];
        for (n, slot) in t.iter_mut().enumerate() {
            *slot = crc::xnmodp(32 * n as u64);
        }
        t
    })
}

fn pow_table() -> &'static [u64; MAX_CHUNK + 1] {
    static T: OnceLock<[u64; MAX_CHUNK + 1]> = OnceLock::new();
    T.get_or_init(|| {
        let mut t = [1u64; MAX_CHUNK + 1];
        for n in 1..=MAX_CHUNK {
            t[n] = t[n - 1].wrapping_mul(POLY_BASE);
        }
        t
    })
}

fn summary_of_elems(elems: &[Elem]) -> Summary {
    let mut total = 0i32;
    let mut max = 0i32;
    let mut crc_acc = 0u32;
    let mut h = 0u64;
    for e in elems {
        total += e.degree;
        max = max.max(total);
        crc_acc = crc::update(crc_acc, &e.code.to_le_bytes());
        h = h.wrapping_mul(POLY_BASE).wrapping_add(mix64(e.code as u64));
    }
    Summary {
        total_degree: total,
        max_degree: max,
        len: elems.len(),
        hash: CrcHash { crc: crc_acc, shift: shift_table()[elems.len()] },
        poly: PolyHash { h, pow: pow_table()[elems.len()] },
    }
}

#[derive(Debug)]
struct Node {
    summary: Summary,
    height: u32,
    kind: Kind,
}

#[derive(Debug)]
enum Kind {
    Leaf(Box<[Elem]>),
    Branch(Rc<Node>, Rc<Node>),
}

fn leaf(elems: Box<[Elem]>) -> Rc<Node> {
    debug_assert!(!elems.is_empty() && elems.len() <= MAX_CHUNK);
    Rc::new(Node { summary: summary_of_elems(&elems), height: 1, kind: Kind::Leaf(elems) })
}

fn branch(l: Rc<Node>, r: Rc<Node>) -> Rc<Node> {
    debug_assert!(l.height.abs_diff(r.height) <= 1);
    Rc::new(Node {
        summary: Summary::combine(l.summary, r.summary),
        height: l.height.max(r.height) + 1,
        kind: Kind::Branch(l, r),
    })
}

fn parts(n: &Rc<Node>) -> (&Rc<Node>, &Rc<Node>) {
    match &n.kind {
        Kind::Branch(l, r) => (l, r),
        Kind::Leaf(_) => unreachable!("leaf has no parts"),
    }
}

/// Build a branch over children whose heights may differ by up to two,
/// restoring balance with single or double rotations.
fn balance(l: Rc<Node>, r: Rc<Node>) -> Rc<Node> {
    let (hl, hr) = (l.height, r.height);
    if hl.abs_diff(hr) <= 1 {
        return branch(l, r);
    }
    if hl == hr + 2 {
        let (ll, lr) = parts(&l);
        if ll.height >= lr.height {
            branch(ll.clone(), branch(lr.clone(), r))
        } else {
            let (lrl, lrr) = parts(lr);
            branch(branch(ll.clone(), lrl.clone()), branch(lrr.clone(), r))
        }
    } else if hr == hl + 2 {
        let (rl, rr) = parts(&r);
        if rr.height >= rl.height {
            branch(branch(l, rl.clone()), rr.clone())
        } else {
            let (rll, rlr) = parts(rl);
            branch(branch(l, rll.clone()), branch(rlr.clone(), rr.clone()))
        }
    } else {
        unreachable!("height gap beyond rebalance range: {hl} vs {hr}")
    }
}

fn cat(a: Rc<Node>, b: Rc<Node>) -> Rc<Node> {
    if a.height > b.height + 1 {
        let (l, r) = parts(&a);
        balance(l.clone(), cat(r.clone(), b))
    } else if b.height > a.height + 1 {
        let (l, r) = parts(&b);
        balance(cat(a, l.clone()), r.clone())
    } else if a.height == 1 && b.height == 1 && a.summary.len + b.summary.len <= MAX_CHUNK {
        let (Kind::Leaf(ea), Kind::Leaf(eb)) = (&a.kind, &b.kind) else { unreachable!() };
        let mut merged = Vec::with_capacity(ea.len() + eb.len());
        merged.extend_from_slice(ea);
        merged.extend_from_slice(eb);
        leaf(merged.into())
    } else {
        branch(a, b)
    }
}

fn cat_opt(a: Option<Rc<Node>>, b: Option<Rc<Node>>) -> Option<Rc<Node>> {
    match (a, b) {
        (None, x) | (x, None) => x,
        (Some(a), Some(b)) => Some(cat(a, b)),
    }
}

#[derive(Debug, Clone, Default)]
pub struct SeqTerm {
    root: Option<Rc<Node>>,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum SeqError {
    #[error("ill-formed sequence: {0}")]
    IllFormed(String),
    #[error("no complete subterm starts at index {0}")]
    NoSubterm(usize),
    #[error("hash collision detected at offset {0}")]
    HashCollision(usize),
}

impl SeqTerm {
    pub fn empty() -> SeqTerm {
        SeqTerm { root: None }
    }

    pub fn from_elems(elems: &[Elem]) -> SeqTerm {
        if elems.is_empty() {
            return SeqTerm::empty();
        }
        // Full chunks, then pair up levels bottom-up: heights stay balanced.
        let mut level: Vec<Rc<Node>> =
            elems.chunks(MAX_CHUNK).map(|c| leaf(c.to_vec().into())).collect();
        while level.len() > 1 {
            level = level
                .chunks(2)
                .map(|pair| {
                    if pair.len() == 2 {
                        branch(pair[0].clone(), pair[1].clone())
                    } else {
                        pair[0].clone()
                    }
                })
                .collect();
        }
        SeqTerm { root: level.pop() }
    }

    pub fn from_codes(codes: &[u32], table: &CtorTable) -> Result<SeqTerm, SeqError> {
        let mut elems = Vec::with_capacity(codes.len());
        for &code in codes {
            let degree = if code == VAR_CODE {
                1
            } else if (code as usize) < table.len() {
                degree_of_arity(table.arity(crate::term::Ctor(code)))
            } else {
                return Err(SeqError::IllFormed(format!("unknown constructor code {code}")));
            };
            elems.push(Elem { code, degree });
        }
        Ok(SeqTerm::from_elems(&elems))
    }

    pub fn len(&self) -> usize {
        self.root.as_ref().map_or(0, |n| n.summary.len)
    }

    pub fn is_empty(&self) -> bool {
        self.root.is_none()
    }

    pub fn summary(&self) -> Summary {
        self.root.as_ref().map_or(Summary::EMPTY, |n| n.summary)
    }

    /// One complete term: degrees sum to 1 and no proper prefix does.
    pub fn is_complete_term(&self) -> bool {
        let s = self.summary();
        s.len > 0 && s.total_degree == 1 && self.find_subterm(0) == Ok(s.len)
    }

    pub fn concat(a: &SeqTerm, b: &SeqTerm) -> SeqTerm {
        SeqTerm { root: cat_opt(a.root.clone(), b.root.clone()) }
    }

    pub fn split_at(&self, i: usize) -> (SeqTerm, SeqTerm) {
        assert!(i <= self.len());
        match &self.root {
            None => (SeqTerm::empty(), SeqTerm::empty()),
            Some(n) => {
                let (a, b) = split_node(n, i);
                (SeqTerm { root: a }, SeqTerm { root: b })
            }
        }
    }

    pub fn slice(&self, start: usize, end: usize) -> SeqTerm {
        assert!(start <= end && end <= self.len());
        if start == 0 && end == self.len() {
            return self.clone();
        }
        SeqTerm { root: slice_node(self.root.as_ref().unwrap(), start, end) }
    }

    pub fn get(&self, i: usize) -> Elem {
        assert!(i < self.len());
        let mut node = self.root.as_ref().unwrap();
        let mut i = i;
        loop {
            match &node.kind {
                Kind::Leaf(elems) => return elems[i],
                Kind::Branch(l, r) => {
                    if i < l.summary.len {
                        node = l;
                    } else {
                        i -= l.summary.len;
                        node = r;
                    }
                }
            }
        }
    }

    /// Summary of `self[start..end]` combined from tree annotations.
    pub fn summary_range(&self, start: usize, end: usize) -> Summary {
        assert!(start <= end && end <= self.len());
        if start == end {
            return Summary::EMPTY;
        }
        summary_range_node(self.root.as_ref().unwrap(), start, end)
    }

    /// Smallest `j > i` such that degrees over `self[i..j]` sum to 1,
    /// located by monotone prefix search on `max_degree`.
    pub fn find_subterm(&self, i: usize) -> Result<usize, SeqError> {
        if i >= self.len() {
            return Err(SeqError::NoSubterm(i));
        }
        match find_end(self.root.as_ref().unwrap(), i, 0) {
            Ok(j) => Ok(j),
            Err(_) => Err(SeqError::NoSubterm(i)),
        }
    }

    pub fn chunks(&self) -> Chunks<'_> {
        self.chunks_range(0, self.len())
    }

    pub fn chunks_range(&self, start: usize, end: usize) -> Chunks<'_> {
        assert!(start <= end && end <= self.len());
        let mut stack = Vec::new();
        if start < end {
            stack.push((self.root.as_ref().unwrap().as_ref(), start, end));
        }
        Chunks { stack }
    }

    pub fn codes(&self) -> Vec<u32> {
        let mut out = Vec::with_capacity(self.len());
        for chunk in self.chunks() {
            out.extend(chunk.iter().map(|e| e.code));
        }
        out
    }

    /// Exact elementwise equality of `self[s..s+len]` and `other[o..o+len]`.
    pub fn range_eq(&self, s: usize, other: &SeqTerm, o: usize, len: usize) -> bool {
        if len == 0 {
            return true;
        }
        if s + len > self.len() || o + len > other.len() {
            return false;
        }
        let mut a = self.chunks_range(s, s + len);
        let mut b = other.chunks_range(o, o + len);
        let (mut ca, mut cb): (&[Elem], &[Elem]) = (&[], &[]);
        loop {
            if ca.is_empty() {
                match a.next() {
                    Some(c) => ca = c,
                    None => return cb.is_empty() && b.next().is_none(),
                }
            }
            if cb.is_empty() {
                match b.next() {
                    Some(c) => cb = c,
                    None => return false,
                }
            }
            let n = ca.len().min(cb.len());
            if ca[..n] != cb[..n] {
                return false;
            }
            ca = &ca[n..];
            cb = &cb[n..];
        }
    }

    /// Does `needle` occur at `offset`, judged by monoidal hash equality?
    /// In verification mode a byte compare confirms the positive answer and
    /// a disagreement reports a collision.
    pub fn hash_prefix_eq(
        &self,
        offset: usize,
        needle: &SeqTerm,
        verify: bool,
    ) -> Result<bool, SeqError> {
        assert!(offset + needle.len() <= self.len());
        if needle.is_empty() {
            return Ok(true);
        }
        let got = self.summary_range(offset, offset + needle.len());
        let eq = got.same_content_hash(&needle.summary());
        if verify && eq && !self.range_eq(offset, needle, 0, needle.len()) {
            return Err(SeqError::HashCollision(offset));
        }
        Ok(eq)
    }

    /// Recheck every node annotation and the balance discipline.
    pub fn audit(&self) -> bool {
        fn go(n: &Node) -> Option<Summary> {
            match &n.kind {
                Kind::Leaf(elems) => {
                    if elems.is_empty() || elems.len() > MAX_CHUNK || n.height != 1 {
                        return None;
                    }
                    let s = summary_of_elems(elems);
                    (s == n.summary).then_some(s)
                }
                Kind::Branch(l, r) => {
                    if l.height.abs_diff(r.height) > 1 || n.height != l.height.max(r.height) + 1 {
                        return None;
                    }
                    let (sl, sr) = (go(l)?, go(r)?);
                    let s = Summary::combine(sl, sr);
                    (s == n.summary).then_some(s)
                }
            }
        }
        match &self.root {
            None => true,
            Some(n) => go(n).is_some(),
        }
    }
}

impl PartialEq for SeqTerm {
    fn eq(&self, other: &SeqTerm) -> bool {
        self.len() == other.len() && self.range_eq(0, other, 0, self.len())
    }
}

impl Eq for SeqTerm {}

pub struct Chunks<'a> {
    stack: Vec<(&'a Node, usize, usize)>,
}

impl<'a> Iterator for Chunks<'a> {
    type Item = &'a [Elem];

    fn next(&mut self) -> Option<&'a [Elem]> {
        loop {
            let (node, start, end) = self.stack.pop()?;
            match &node.kind {
                Kind::Leaf(elems) => return Some(&elems[start..end]),
                Kind::Branch(l, r) => {
                    let ll = l.summary.len;
                    if end > ll {
                        self.stack.push((r, start.saturating_sub(ll), end - ll));
                    }
                    if start < ll {
                        self.stack.push((l, start, end.min(ll)));
                    }
                }
            }
        }
    }
}

fn split_node(n: &Rc<Node>, i: usize) -> (Option<Rc<Node>>, Option<Rc<Node>>) {
    if i == 0 {
        return (None, Some(n.clone()));
    }
    if i == n.summary.len {
        return (Some(n.clone()), None);
    }
    match &n.kind {
        Kind::Leaf(elems) => (
            Some(leaf(elems[..i].to_vec().into())),
            Some(leaf(elems[i..].to_vec().into())),
        ),
        Kind::Branch(l, r) => {
            let ll = l.summary.len;
            if i <= ll {
                let (a, b) = split_node(l, i);
                (a, cat_opt(b, Some(r.clone())))
            } else {
                let (a, b) = split_node(r, i - ll);
                (cat_opt(Some(l.clone()), a), b)
            }
        }
    }
}

fn slice_node(n: &Rc<Node>, start: usize, end: usize) -> Option<Rc<Node>> {
    if start >= end {
        return None;
    }
    if start == 0 && end == n.summary.len {
        return Some(n.clone());
    }
    match &n.kind {
        Kind::Leaf(elems) => Some(leaf(elems[start..end].to_vec().into())),
        Kind::Branch(l, r) => {
            let ll = l.summary.len;
            let left = if start < ll { slice_node(l, start, end.min(ll)) } else { None };
            let right =
                if end > ll { slice_node(r, start.saturating_sub(ll), end - ll) } else { None };
            cat_opt(left, right)
        }
    }
}

fn summary_range_node(n: &Node, start: usize, end: usize) -> Summary {
    if start == 0 && end == n.summary.len {
        return n.summary;
    }
    match &n.kind {
        Kind::Leaf(elems) => summary_of_elems(&elems[start..end]),
        Kind::Branch(l, r) => {
            let ll = l.summary.len;
            if end <= ll {
                summary_range_node(l, start, end)
            } else if start >= ll {
                summary_range_node(r, start - ll, end - ll)
            } else {
                Summary::combine(
                    summary_range_node(l, start, ll),
                    summary_range_node(r, 0, end - ll),
                )
            }
        }
    }
}

/// `Ok(j)` = first absolute-relative position after `from` where the
/// running degree reaches 1; `Err(acc)` = final accumulator, never hit 1.
fn find_end(n: &Node, from: usize, acc: i32) -> Result<usize, i32> {
    if from == 0 && acc + n.summary.max_degree < 1 {
        return Err(acc + n.summary.total_degree);
    }
    match &n.kind {
        Kind::Leaf(elems) => {
            let mut acc = acc;
            for (k, e) in elems.iter().enumerate().skip(from) {
                acc += e.degree;
                if acc == 1 {
                    return Ok(k + 1);
                }
            }
            Err(acc)
        }
        Kind::Branch(l, r) => {
            let ll = l.summary.len;
            if from >= ll {
                return find_end(r, from - ll, acc).map(|j| ll + j);
            }
            match find_end(l, from, acc) {
                Ok(j) => Ok(j),
                Err(acc) => find_end(r, 0, acc).map(|j| ll + j),
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Pattern <-> sequence
// ---------------------------------------------------------------------------

/// Preorder-flatten a pattern; variables become the nameless-binder code.
pub fn flatten(p: &Pattern) -> SeqTerm {
    let mut elems = Vec::with_capacity(p.size());
    flatten_into(p, &mut elems);
    SeqTerm::from_elems(&elems)
}

pub fn flatten_into(p: &Pattern, elems: &mut Vec<Elem>) {
    match p {
        Pattern::Var(_) => elems.push(Elem { code: VAR_CODE, degree: 1 }),
        Pattern::Node(c, ch) => {
            elems.push(Elem { code: c.0, degree: degree_of_arity(ch.len() as u32) });
            for x in ch.iter() {
                flatten_into(x, elems);
            }
        }
    }
}

/// Rebuild a pattern from one complete flattened term. Binders are numbered
/// by preorder position, so `flatten . unflatten` is the identity and the
/// other direction is the identity up to variable renaming.
pub fn unflatten(s: &SeqTerm, table: &CtorTable) -> Result<Pattern, SeqError> {
    if s.summary().total_degree != 1 {
        return Err(SeqError::IllFormed(format!(
            "total_degree {} != 1",
            s.summary().total_degree
        )));
    }
    let mut next_var = 0u64;
    // (ctor, arity, collected children)
    let mut stack: Vec<(crate::term::Ctor, usize, Vec<Pattern>)> = Vec::new();
    let mut done: Option<Pattern> = None;
    for chunk in s.chunks() {
        for e in chunk {
            if done.is_some() {
                return Err(SeqError::IllFormed("trailing elements after term".into()));
            }
            let pat = if e.code == VAR_CODE {
                let v = Pattern::Var(PatternVar(next_var));
                next_var += 1;
                Some(v)
            } else {
                if e.code as usize >= table.len() {
                    return Err(SeqError::IllFormed(format!("unknown code {}", e.code)));
                }
                let c = crate::term::Ctor(e.code);
                let arity = table.arity(c) as usize;
                if arity == 0 {
                    Some(Pattern::leaf(c))
                } else {
                    stack.push((c, arity, Vec::with_capacity(arity)));
                    None
                }
            };
            let mut finished = pat;
            while let Some(p) = finished.take() {
                match stack.last_mut() {
                    None => done = Some(p),
                    Some((_, arity, ch)) => {
                        ch.push(p);
                        if ch.len() == *arity {
                            let (c, _, ch) = stack.pop().unwrap();
                            finished = Some(Pattern::node(c, ch));
                        }
                    }
                }
            }
        }
    }
    match (done, stack.is_empty()) {
        (Some(p), true) => Ok(p),
        _ => Err(SeqError::IllFormed("sequence ends mid-term".into())),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::term::{parse_pattern, CtorTable};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn naive_find(elems: &[Elem], i: usize) -> Option<usize> {
        let mut acc = 0;
        for (k, e) in elems.iter().enumerate().skip(i) {
            acc += e.degree;
            if acc == 1 {
                return Some(k + 1);
            }
        }
        None
    }

    fn random_elems(rng: &mut ChaCha8Rng, n: usize) -> Vec<Elem> {
        (0..n)
            .map(|_| {
                let arity = rng.gen_range(0..4u32);
                Elem { code: rng.gen_range(0..50), degree: 1 - arity as i32 }
            })
            .collect()
    }

    #[test]
    fn flatten_example_degrees() {
        let mut t = CtorTable::new();
        let p = parse_pattern("Cons(0,Nil)", &mut t).unwrap();
        let s = flatten(&p);
        let degrees: Vec<i32> = s.chunks().flatten().map(|e| e.degree).collect();
        assert_eq!(degrees, vec![-1, 1, 1]);
        assert_eq!(s.summary().total_degree, 1);
        assert!(s.is_complete_term());
    }

    #[test]
    fn unflatten_roundtrip() {
        let mut t = CtorTable::new();
        for src in [
            "Cons(0,Nil)",
            "Recurse(Cons1(Cons0(Nil)),Empty)",
            "F(G($0,H(1,2,$1)),$2)",
            "Nil",
            "$0",
        ] {
            let p = parse_pattern(src, &mut t).unwrap();
            let s = flatten(&p);
            let q = unflatten(&s, &t).unwrap();
            // preorder renumbering: flattening again gives the same string
            assert_eq!(flatten(&q), s);
            if p.is_ground() {
                assert_eq!(p, q);
            }
        }
    }

    #[test]
    fn unflatten_rejects_ill_formed() {
        let mut t = CtorTable::new();
        let p = parse_pattern("Cons(0,Nil)", &mut t).unwrap();
        let s = flatten(&p);
        let (prefix, _) = s.split_at(2);
        assert!(matches!(unflatten(&prefix, &t), Err(SeqError::IllFormed(_))));
        let junk = SeqTerm::concat(&s, &s);
        assert!(matches!(unflatten(&junk, &t), Err(SeqError::IllFormed(_))));
    }

    #[test]
    fn concat_matches_naive_append() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..200 {
            let a = { let n = rng.gen_range(0..120); random_elems(&mut rng, n) };
            let b = { let n = rng.gen_range(0..120); random_elems(&mut rng, n) };
            let sa = SeqTerm::from_elems(&a);
            let sb = SeqTerm::from_elems(&b);
            let cat = SeqTerm::concat(&sa, &sb);
            assert!(cat.audit());
            let mut expect = a.clone();
            expect.extend_from_slice(&b);
            let got: Vec<Elem> = cat.chunks().flatten().copied().collect();
            assert_eq!(got, expect);
            assert_eq!(cat.summary(), {
                Summary::combine(sa.summary(), sb.summary())
            });
            // empty identity
            assert_eq!(SeqTerm::concat(&SeqTerm::empty(), &sa), sa);
        }
    }

    #[test]
    fn split_and_slice_agree_with_vectors() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..200 {
            let v = { let n = rng.gen_range(1..200); random_elems(&mut rng, n) };
            let s = SeqTerm::from_elems(&v);
            let i = rng.gen_range(0..=v.len());
            let (a, b) = s.split_at(i);
            assert!(a.audit() && b.audit());
            assert_eq!(a.codes(), v[..i].iter().map(|e| e.code).collect::<Vec<_>>());
            assert_eq!(b.codes(), v[i..].iter().map(|e| e.code).collect::<Vec<_>>());
            let j = rng.gen_range(i..=v.len());
            let sl = s.slice(i, j);
            assert!(sl.audit());
            assert_eq!(sl.codes(), v[i..j].iter().map(|e| e.code).collect::<Vec<_>>());
            assert_eq!(sl.summary(), s.summary_range(i, j));
        }
    }

    #[test]
    fn summary_combine_is_monoid() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..500 {
            let a = summary_of_elems(&{ let n = rng.gen_range(0..40); random_elems(&mut rng, n) });
            let b = summary_of_elems(&{ let n = rng.gen_range(0..40); random_elems(&mut rng, n) });
            let c = summary_of_elems(&{ let n = rng.gen_range(0..40); random_elems(&mut rng, n) });
            assert_eq!(Summary::combine(a, Summary::EMPTY), a);
            assert_eq!(Summary::combine(Summary::EMPTY, a), a);
            assert_eq!(
                Summary::combine(Summary::combine(a, b), c),
                Summary::combine(a, Summary::combine(b, c))
            );
        }
    }

    #[test]
    fn find_subterm_matches_naive_scan() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for _ in 0..300 {
            let v = { let n = rng.gen_range(1..300); random_elems(&mut rng, n) };
            let s = SeqTerm::from_elems(&v);
            for _ in 0..10 {
                let i = rng.gen_range(0..v.len());
                match (s.find_subterm(i), naive_find(&v, i)) {
                    (Ok(j), Some(k)) => assert_eq!(j, k),
                    (Err(SeqError::NoSubterm(_)), None) => {}
                    (got, want) => panic!("mismatch at {i}: {got:?} vs {want:?}"),
                }
            }
        }
    }

    #[test]
    fn find_subterm_examples() {
        let mut t = CtorTable::new();
        let s = flatten(&parse_pattern("Cons(0,Nil)", &mut t).unwrap());
        assert_eq!(s.find_subterm(0), Ok(3));
        assert_eq!(s.find_subterm(1), Ok(2));
        assert_eq!(s.find_subterm(2), Ok(3));
    }

    #[test]
    fn hash_prefix_matches_byte_compare() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..300 {
            let v = { let n = rng.gen_range(1..200); random_elems(&mut rng, n) };
            let s = SeqTerm::from_elems(&v);
            let i = rng.gen_range(0..v.len());
            let j = rng.gen_range(i..=v.len());
            let needle = s.slice(i, j);
            assert_eq!(s.hash_prefix_eq(i, &needle, true), Ok(true));
            // corrupt one element
            if j > i {
                let mut w = v[i..j].to_vec();
                let k = rng.gen_range(0..w.len());
                w[k].code ^= 1 << rng.gen_range(0..16);
                let bad = SeqTerm::from_elems(&w);
                assert_eq!(s.hash_prefix_eq(i, &bad, true), Ok(false));
            }
            // whole string vs itself, empty needle
            assert_eq!(s.hash_prefix_eq(0, &s, true), Ok(true));
            assert_eq!(s.hash_prefix_eq(i, &SeqTerm::empty(), true), Ok(true));
        }
    }

    #[test]
    fn balance_independence() {
        // the same sequence assembled two different ways observes the same
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..100 {
            let v = { let n = rng.gen_range(1..150); random_elems(&mut rng, n) };
            let whole = SeqTerm::from_elems(&v);
            let mut built = SeqTerm::empty();
            let mut i = 0;
            while i < v.len() {
                let j = (i + rng.gen_range(1..8)).min(v.len());
                built = SeqTerm::concat(&built, &SeqTerm::from_elems(&v[i..j]));
                i = j;
            }
            assert!(built.audit());
            assert_eq!(built, whole);
            assert_eq!(built.summary(), whole.summary());
        }
    }
}
