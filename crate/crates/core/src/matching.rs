//! Associative-commutative pattern matching of kernel patterns against
//! expressions.
//!
//! Products are associative but not commutative: a k-factor pattern matches
//! any contiguous run of children of an n-ary product. Sums are associative
//! and commutative: a k-term pattern matches any k-subset of summands, in
//! any order. Variables bind single operands; constraints filter bindings.

use std::collections::BTreeMap;

use num_rational::Rational64;
use num_traits::One;

use crate::expr::{Expr, ExprKind, Operand};
use crate::props::PropertySet;

pub type Var = &'static str;

/// Shape requirement on a bound operand.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ShapeReq {
    /// Anything that is not 1x1.
    Matrix,
    /// Both dimensions greater than one.
    GeneralMatrix,
    /// A column vector (rows > 1, cols == 1).
    ColumnVector,
    /// A row vector (rows == 1, cols > 1).
    RowVector,
    /// Square matrix.
    SquareMatrix,
    /// A 1x1 operand or a scalar literal.
    ScalarAtom,
}

/// Per-variable constraint: shape plus required/forbidden properties.
#[derive(Debug, Clone, Copy)]
pub struct Constraint {
    pub shape: ShapeReq,
    pub requires: PropertySet,
    pub forbids: PropertySet,
}

impl Constraint {
    pub const fn any_matrix() -> Constraint {
        Constraint { shape: ShapeReq::Matrix, requires: PropertySet::EMPTY, forbids: PropertySet::EMPTY }
    }
    pub const fn vector() -> Constraint {
        Constraint { shape: ShapeReq::ColumnVector, requires: PropertySet::EMPTY, forbids: PropertySet::EMPTY }
    }
    pub const fn scalar() -> Constraint {
        Constraint { shape: ShapeReq::ScalarAtom, requires: PropertySet::EMPTY, forbids: PropertySet::EMPTY }
    }
    pub fn square_with(requires: PropertySet) -> Constraint {
        Constraint { shape: ShapeReq::SquareMatrix, requires, forbids: PropertySet::EMPTY }
    }

    fn admits_operand(&self, o: &Operand) -> bool {
        let shape_ok = match self.shape {
            ShapeReq::Matrix => !o.is_scalar(),
            ShapeReq::GeneralMatrix => o.rows() > 1 && o.cols() > 1,
            ShapeReq::ColumnVector => o.cols() == 1 && o.rows() > 1,
            ShapeReq::RowVector => o.rows() == 1 && o.cols() > 1,
            ShapeReq::SquareMatrix => o.is_square() && !o.is_scalar(),
            ShapeReq::ScalarAtom => o.is_scalar(),
        };
        shape_ok
            && self.requires.is_subset(o.props())
            && !o.props().iter().any(|p| self.forbids.has(p))
    }

    fn admits_literal(&self) -> bool {
        matches!(self.shape, ShapeReq::ScalarAtom)
    }
}

/// Transpose admission of a leaf pattern.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TransMode {
    /// Only a plain leaf.
    Plain,
    /// Only a transposed leaf.
    Transposed,
    /// Either; the actual flag is recorded in the match.
    Any,
}

/// A pattern leaf: one variable with modifier admission and a constraint.
#[derive(Debug, Clone, Copy)]
pub struct LeafPat {
    pub var: Var,
    pub trans: TransMode,
    /// Matches an inverted leaf (X^-1, or X^-T together with `trans`).
    pub inv: bool,
    pub constraint: Constraint,
}

impl LeafPat {
    pub const fn new(var: Var, trans: TransMode, inv: bool, constraint: Constraint) -> LeafPat {
        LeafPat { var, trans, inv, constraint }
    }
}

/// Coefficient admission of a term pattern.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CoeffMode {
    /// No leading scalar may be absorbed.
    None,
    /// A literal +1/-1 may be absorbed (sign recorded, nothing bound).
    SignOnly,
    /// One leading scalar atom may be absorbed and bound to the variable.
    OptionalAtom(Var),
    /// Exactly one leading scalar atom must be absorbed and bound.
    RequiredAtom(Var),
}

/// A product-of-leaves pattern with an optional leading coefficient.
#[derive(Debug, Clone)]
pub struct TermPat {
    pub coeff: CoeffMode,
    pub factors: Vec<LeafPat>,
}

/// A kernel pattern: either a single term or a commutative sum of terms.
#[derive(Debug, Clone)]
pub enum Pattern {
    Term(TermPat),
    Sum(Vec<TermPat>),
}

impl Pattern {
    /// All variables bound by the pattern, in pattern order.
    pub fn variables(&self) -> Vec<Var> {
        let mut out = Vec::new();
        let push = |v: Var, out: &mut Vec<Var>| {
            if !out.contains(&v) {
                out.push(v);
            }
        };
        let terms: &[TermPat] = match self {
            Pattern::Term(t) => std::slice::from_ref(t),
            Pattern::Sum(ts) => ts,
        };
        for t in terms {
            match t.coeff {
                CoeffMode::OptionalAtom(v) | CoeffMode::RequiredAtom(v) => push(v, &mut out),
                _ => {}
            }
            for f in &t.factors {
                push(f.var, &mut out);
            }
        }
        out
    }
}

/// A value bound to a pattern variable.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum BoundAtom {
    Op(Operand),
    Lit(Rational64),
}

impl BoundAtom {
    pub fn as_operand(&self) -> Option<&Operand> {
        match self {
            BoundAtom::Op(o) => Some(o),
            BoundAtom::Lit(_) => None,
        }
    }
}

/// One matched factor slot: the variable plus the modifiers seen on the leaf.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SlotBind {
    pub var: Var,
    pub trans: bool,
    pub inv: bool,
}

/// Binding of one pattern term.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct TermBind {
    /// Absorbed scalar atom, if any.
    pub coeff: Option<BoundAtom>,
    /// Absorbed literal -1 under `CoeffMode::SignOnly`.
    pub negated: bool,
    pub slots: Vec<SlotBind>,
}

/// Which part of the subject a match covers.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord)]
pub enum Selection {
    /// The entire node at `path`.
    Whole,
    /// A contiguous run of children of a product node.
    Run { start: usize, len: usize },
    /// A subset of children of a sum node, in increasing index order.
    Subset(Vec<usize>),
}

/// Position of a matched subexpression within the subject.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord)]
pub struct Site {
    pub path: Vec<usize>,
    pub sel: Selection,
}

/// A successful match: bindings, per-term slot records, and the value
/// computed (the instantiated template).
#[derive(Debug, Clone)]
pub struct Match {
    pub site: Site,
    pub binds: BTreeMap<Var, BoundAtom>,
    pub terms: Vec<TermBind>,
    pub value: Expr,
}

/// How many sum children to consider exhaustively; larger sums fall back
/// to pairs plus the full set.
pub const SUM_SUBSET_CAP: usize = 12;

/// All matches of `pattern` in `subject`, deterministic order: by site
/// position, then by the order key of the bindings.
pub fn find_matches(pattern: &Pattern, subject: &Expr) -> Vec<Match> {
    let mut out = Vec::new();
    walk(pattern, subject, &mut Vec::new(), &mut out);
    out
}

fn walk(pattern: &Pattern, node: &Expr, path: &mut Vec<usize>, out: &mut Vec<Match>) {
    match_at(pattern, node, path, out);
    match node.kind() {
        ExprKind::Times(cs) => {
            for (i, c) in cs.iter().enumerate() {
                // Leaves of products are covered by run enumeration.
                if matches!(c.kind(), ExprKind::Plus(_) | ExprKind::Inverse(_) | ExprKind::Transpose(_)) {
                    path.push(i);
                    walk_inside(pattern, c, path, out);
                    path.pop();
                }
            }
        }
        ExprKind::Plus(cs) => {
            for (i, c) in cs.iter().enumerate() {
                path.push(i);
                walk(pattern, c, path, out);
                path.pop();
            }
        }
        ExprKind::Transpose(c) | ExprKind::Inverse(c) => {
            path.push(0);
            walk(pattern, c, path, out);
            path.pop();
        }
        _ => {}
    }
}

/// Like `walk` but does not re-try the node itself as a whole-node site;
/// used for product children, which run enumeration already covers.
fn walk_inside(pattern: &Pattern, node: &Expr, path: &mut Vec<usize>, out: &mut Vec<Match>) {
    match node.kind() {
        ExprKind::Transpose(c) | ExprKind::Inverse(c) => {
            path.push(0);
            walk(pattern, c, path, out);
            path.pop();
        }
        ExprKind::Plus(_) => walk(pattern, node, path, out),
        _ => {}
    }
}

fn match_at(pattern: &Pattern, node: &Expr, path: &[usize], out: &mut Vec<Match>) {
    match (pattern, node.kind()) {
        (Pattern::Term(t), ExprKind::Times(cs)) => {
            let n = cs.len();
            // Runs of the factor length, plus runs one longer whose first
            // element is an absorbable scalar atom.
            for len in [t.factors.len(), t.factors.len() + 1] {
                if len > n || len == 0 {
                    continue;
                }
                for start in 0..=(n - len) {
                    let with_coeff = len == t.factors.len() + 1;
                    let mut binds = BTreeMap::new();
                    if let Some(tb) = match_seq(t, &cs[start..start + len], with_coeff, &mut binds)
                    {
                        out.push(build_match(
                            Site { path: path.to_vec(), sel: Selection::Run { start, len } },
                            binds,
                            vec![tb],
                            pattern,
                        ));
                    }
                }
            }
        }
        (Pattern::Term(t), _) if !matches!(node.kind(), ExprKind::Plus(_)) => {
            // Whole-node match (single leaf patterns on non-product nodes).
            if t.factors.len() != 1 {
                return;
            }
            let mut binds = BTreeMap::new();
            if let Some(tb) = match_seq(t, std::slice::from_ref(node), false, &mut binds) {
                out.push(build_match(
                    Site { path: path.to_vec(), sel: Selection::Whole },
                    binds,
                    vec![tb],
                    pattern,
                ));
            }
        }
        (Pattern::Sum(terms), ExprKind::Plus(cs)) => {
            let n = cs.len();
            let k = terms.len();
            if k > n {
                return;
            }
            let mut subsets: Vec<Vec<usize>> = Vec::new();
            if n <= SUM_SUBSET_CAP {
                enumerate_subsets(n, k, &mut subsets);
            } else {
                // Combinatorial guard: pairs and the full set only.
                if k == 2 {
                    enumerate_subsets(n, 2, &mut subsets);
                } else if k == n {
                    subsets.push((0..n).collect());
                }
            }
            for subset in subsets {
                assign_terms(terms, cs, &subset, path, pattern, out);
            }
        }
        _ => {}
    }
}

/// Matches a term pattern against a child sequence. With `with_coeff`,
/// the first element must be an absorbable scalar atom.
fn match_seq(
    t: &TermPat,
    seq: &[Expr],
    with_coeff: bool,
    binds: &mut BTreeMap<Var, BoundAtom>,
) -> Option<TermBind> {
    let mut tb = TermBind::default();
    let factors_seq = if with_coeff {
        let atom = scalar_atom(&seq[0])?;
        match t.coeff {
            CoeffMode::None => return None,
            CoeffMode::SignOnly => {
                match &atom {
                    BoundAtom::Lit(r) if *r == Rational64::one() => {}
                    BoundAtom::Lit(r) if *r == -Rational64::one() => tb.negated = true,
                    _ => return None,
                }
                tb.coeff = Some(atom);
            }
            CoeffMode::OptionalAtom(v) | CoeffMode::RequiredAtom(v) => {
                bind(binds, v, atom.clone())?;
                tb.coeff = Some(atom);
            }
        }
        &seq[1..]
    } else {
        if matches!(t.coeff, CoeffMode::RequiredAtom(_)) {
            return None;
        }
        seq
    };
    if factors_seq.len() != t.factors.len() {
        return None;
    }
    for (child, leaf) in factors_seq.iter().zip(&t.factors) {
        let slot = match_leaf(child, leaf, binds)?;
        tb.slots.push(slot);
    }
    Some(tb)
}

fn scalar_atom(e: &Expr) -> Option<BoundAtom> {
    match e.kind() {
        ExprKind::Scalar(r) => Some(BoundAtom::Lit(*r)),
        ExprKind::Op(o) if o.is_scalar() => Some(BoundAtom::Op(o.clone())),
        _ => None,
    }
}

fn bind(binds: &mut BTreeMap<Var, BoundAtom>, var: Var, atom: BoundAtom) -> Option<()> {
    match binds.get(var) {
        Some(existing) if *existing != atom => None,
        Some(_) => Some(()),
        None => {
            binds.insert(var, atom);
            Some(())
        }
    }
}

fn match_leaf(
    e: &Expr,
    p: &LeafPat,
    binds: &mut BTreeMap<Var, BoundAtom>,
) -> Option<SlotBind> {
    // Scalar-atom leaves admit literals and 1x1 operands.
    if matches!(p.constraint.shape, ShapeReq::ScalarAtom) && !p.inv {
        let atom = scalar_atom(e)?;
        if let BoundAtom::Op(o) = &atom {
            if !p.constraint.admits_operand(o) {
                return None;
            }
        } else if !p.constraint.admits_literal() {
            return None;
        }
        bind(binds, p.var, atom)?;
        return Some(SlotBind { var: p.var, trans: false, inv: false });
    }
    let (op, trans, inv) = classify_leaf(e)?;
    if inv != p.inv {
        return None;
    }
    match (p.trans, trans) {
        (TransMode::Plain, true) | (TransMode::Transposed, false) => return None,
        _ => {}
    }
    if !p.constraint.admits_operand(op) {
        return None;
    }
    bind(binds, p.var, BoundAtom::Op(op.clone()))?;
    Some(SlotBind { var: p.var, trans, inv })
}

fn classify_leaf(e: &Expr) -> Option<(&Operand, bool, bool)> {
    e.as_modified_operand()
}

fn enumerate_subsets(n: usize, k: usize, out: &mut Vec<Vec<usize>>) {
    fn rec(n: usize, k: usize, from: usize, cur: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
        if cur.len() == k {
            out.push(cur.clone());
            return;
        }
        for i in from..n {
            if n - i < k - cur.len() {
                break;
            }
            cur.push(i);
            rec(n, k, i + 1, cur, out);
            cur.pop();
        }
    }
    let mut cur = Vec::with_capacity(k);
    rec(n, k, 0, &mut cur, out);
}

/// Tries every bijection between pattern terms and the chosen subset.
fn assign_terms(
    terms: &[TermPat],
    cs: &[Expr],
    subset: &[usize],
    path: &[usize],
    pattern: &Pattern,
    out: &mut Vec<Match>,
) {
    #[allow(clippy::too_many_arguments)]
    fn rec(
        terms: &[TermPat],
        cs: &[Expr],
        subset: &[usize],
        used: &mut Vec<bool>,
        binds: &mut BTreeMap<Var, BoundAtom>,
        acc: &mut Vec<TermBind>,
        order: &mut Vec<usize>,
        path: &[usize],
        pattern: &Pattern,
        out: &mut Vec<Match>,
    ) {
        let ti = acc.len();
        if ti == terms.len() {
            out.push(build_match(
                Site { path: path.to_vec(), sel: Selection::Subset(subset.to_vec()) },
                binds.clone(),
                acc.clone(),
                pattern,
            ));
            return;
        }
        for (si, &ci) in subset.iter().enumerate() {
            if used[si] {
                continue;
            }
            let child = &cs[ci];
            let (seq, is_product): (Vec<Expr>, bool) = match child.kind() {
                ExprKind::Times(inner) => (inner.clone(), true),
                _ => (vec![child.clone()], false),
            };
            let with_coeff = is_product && seq.len() == terms[ti].factors.len() + 1;
            let mut trial = binds.clone();
            if let Some(tb) = match_seq(&terms[ti], &seq, with_coeff, &mut trial) {
                used[si] = true;
                let saved = std::mem::replace(binds, trial);
                acc.push(tb);
                order.push(ci);
                rec(terms, cs, subset, used, binds, acc, order, path, pattern, out);
                order.pop();
                acc.pop();
                *binds = saved;
                used[si] = false;
            }
        }
    }
    let mut used = vec![false; subset.len()];
    let mut binds = BTreeMap::new();
    let mut acc = Vec::new();
    let mut order = Vec::new();
    rec(terms, cs, subset, &mut used, &mut binds, &mut acc, &mut order, path, pattern, out);
}

fn build_match(
    site: Site,
    binds: BTreeMap<Var, BoundAtom>,
    terms: Vec<TermBind>,
    pattern: &Pattern,
) -> Match {
    let value = instantiate(pattern, &binds, &terms);
    Match { site, binds, terms, value }
}

/// Reconstructs the expression a match computes from the template and the
/// bindings.
pub fn instantiate(pattern: &Pattern, binds: &BTreeMap<Var, BoundAtom>, terms: &[TermBind]) -> Expr {
    let mut term_exprs = Vec::with_capacity(terms.len());
    for tb in terms {
        let mut parts: Vec<Expr> = Vec::new();
        if tb.negated {
            parts.push(Expr::scalar_int(-1));
        } else if let Some(c) = &tb.coeff {
            parts.push(atom_expr(c));
        }
        for slot in &tb.slots {
            let atom = binds.get(slot.var).expect("bound variable");
            let mut leaf = atom_expr(atom);
            if slot.trans {
                leaf = leaf.transposed().expect("transpose");
            }
            if slot.inv {
                leaf = leaf.inverted().expect("matched inverse is square");
            }
            parts.push(leaf);
        }
        let e = if parts.len() == 1 {
            parts.pop().unwrap()
        } else {
            Expr::times(parts).expect("matched site is conformable")
        };
        term_exprs.push(e);
    }
    let _ = pattern;
    if term_exprs.len() == 1 {
        term_exprs.pop().unwrap()
    } else {
        Expr::plus(term_exprs).expect("matched summands share dimensions")
    }
}

fn atom_expr(atom: &BoundAtom) -> Expr {
    match atom {
        BoundAtom::Op(o) => Expr::operand(o.clone()),
        BoundAtom::Lit(r) => Expr::scalar(*r),
    }
}

/// The subexpression content a site selects, as an expression.
pub fn site_content(subject: &Expr, site: &Site) -> Expr {
    let node = node_at(subject, &site.path);
    match (&site.sel, node.kind()) {
        (Selection::Whole, _) => node.clone(),
        (Selection::Run { start, len }, ExprKind::Times(cs)) => {
            let slice = cs[*start..*start + *len].to_vec();
            if slice.len() == 1 {
                slice.into_iter().next().unwrap()
            } else {
                Expr::times(slice).expect("site is conformable")
            }
        }
        (Selection::Subset(idx), ExprKind::Plus(cs)) => {
            let slice: Vec<Expr> = idx.iter().map(|&i| cs[i].clone()).collect();
            if slice.len() == 1 {
                slice.into_iter().next().unwrap()
            } else {
                Expr::plus(slice).expect("site children share dimensions")
            }
        }
        _ => panic!("selection does not fit node"),
    }
}

pub fn node_at<'a>(subject: &'a Expr, path: &[usize]) -> &'a Expr {
    let mut cur = subject;
    for &i in path {
        cur = match cur.kind() {
            ExprKind::Times(cs) | ExprKind::Plus(cs) => &cs[i],
            ExprKind::Transpose(c) | ExprKind::Inverse(c) => c,
            _ => panic!("path descends into a leaf"),
        };
    }
    cur
}

/// Rebuilds the subject with the site replaced by `replacement`.
pub fn replace_site(subject: &Expr, site: &Site, replacement: &Expr) -> Expr {
    fn rec(node: &Expr, depth: usize, site: &Site, replacement: &Expr) -> Expr {
        if depth == site.path.len() {
            return apply_selection(node, &site.sel, replacement);
        }
        let i = site.path[depth];
        match node.kind() {
            ExprKind::Times(cs) => {
                let mut cs = cs.clone();
                cs[i] = rec(&cs[i], depth + 1, site, replacement);
                Expr::times(cs).expect("replacement preserves dimensions")
            }
            ExprKind::Plus(cs) => {
                let mut cs = cs.clone();
                cs[i] = rec(&cs[i], depth + 1, site, replacement);
                Expr::plus(cs).expect("replacement preserves dimensions")
            }
            ExprKind::Transpose(c) => rec(c, depth + 1, site, replacement)
                .transposed()
                .expect("transpose"),
            ExprKind::Inverse(c) => rec(c, depth + 1, site, replacement)
                .inverted()
                .expect("replacement preserves squareness"),
            _ => panic!("path descends into a leaf"),
        }
    }
    rec(subject, 0, site, replacement)
}

fn apply_selection(node: &Expr, sel: &Selection, replacement: &Expr) -> Expr {
    match (sel, node.kind()) {
        (Selection::Whole, _) => replacement.clone(),
        (Selection::Run { start, len }, ExprKind::Times(cs)) => {
            let mut out = Vec::with_capacity(cs.len() - len + 1);
            out.extend_from_slice(&cs[..*start]);
            out.push(replacement.clone());
            out.extend_from_slice(&cs[start + len..]);
            if out.len() == 1 {
                out.pop().unwrap()
            } else {
                Expr::times(out).expect("replacement preserves dimensions")
            }
        }
        (Selection::Subset(idx), ExprKind::Plus(cs)) => {
            let mut out = Vec::with_capacity(cs.len() - idx.len() + 1);
            for (i, c) in cs.iter().enumerate() {
                if !idx.contains(&i) {
                    out.push(c.clone());
                }
            }
            out.push(replacement.clone());
            if out.len() == 1 {
                out.pop().unwrap()
            } else {
                Expr::plus(out).expect("replacement preserves dimensions")
            }
        }
        _ => panic!("selection does not fit node"),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::expr::{equivalent, Origin};
    use crate::props::Property;

    fn op(name: &str, r: usize, c: usize, props: &[Property]) -> Expr {
        Expr::operand(
            Operand::new(name, r, c, PropertySet::new(props), Origin::Input).unwrap(),
        )
    }

    fn product_pattern() -> Pattern {
        Pattern::Term(TermPat {
            coeff: CoeffMode::OptionalAtom("alpha"),
            factors: vec![
                LeafPat::new("X", TransMode::Plain, false, Constraint::any_matrix()),
                LeafPat::new("Y", TransMode::Plain, false, Constraint::any_matrix()),
            ],
        })
    }

    #[test]
    fn product_pattern_finds_contiguous_runs() {
        // XY on ABC: exactly AB and BC.
        let e = Expr::times(vec![op("A", 4, 4, &[]), op("B", 4, 4, &[]), op("C", 4, 4, &[])])
            .unwrap();
        let ms = find_matches(&product_pattern(), &e);
        assert_eq!(ms.len(), 2);
        let names: Vec<(String, String)> = ms
            .iter()
            .map(|m| {
                (
                    m.binds["X"].as_operand().unwrap().name().to_string(),
                    m.binds["Y"].as_operand().unwrap().name().to_string(),
                )
            })
            .collect();
        assert_eq!(names, vec![("A".into(), "B".into()), ("B".into(), "C".into())]);
    }

    #[test]
    fn sum_pattern_is_commutative() {
        // X^T + Y on A + B^T + C: matches (B^T, A) and (B^T, C).
        let pat = Pattern::Sum(vec![
            TermPat {
                coeff: CoeffMode::None,
                factors: vec![LeafPat::new("X", TransMode::Transposed, false, Constraint::any_matrix())],
            },
            TermPat {
                coeff: CoeffMode::None,
                factors: vec![LeafPat::new("Y", TransMode::Plain, false, Constraint::any_matrix())],
            },
        ]);
        let e = Expr::plus(vec![
            op("A", 4, 4, &[]),
            op("B", 4, 4, &[]).transposed().unwrap(),
            op("C", 4, 4, &[]),
        ])
        .unwrap();
        let ms = find_matches(&pat, &e);
        assert_eq!(ms.len(), 2);
        for m in &ms {
            assert_eq!(m.binds["X"].as_operand().unwrap().name(), "B");
        }
        let ys: Vec<&str> =
            ms.iter().map(|m| m.binds["Y"].as_operand().unwrap().name()).collect();
        assert_eq!(ys, vec!["A", "C"]);
    }

    #[test]
    fn constraints_filter_matches() {
        let pat = Pattern::Term(TermPat {
            coeff: CoeffMode::None,
            factors: vec![LeafPat::new(
                "X",
                TransMode::Plain,
                false,
                Constraint::square_with(PropertySet::new(&[Property::Spd])),
            )],
        });
        let plain = op("A", 4, 4, &[]);
        assert!(find_matches(&pat, &plain).is_empty());
        let spd = op("S", 4, 4, &[Property::Spd]);
        assert_eq!(find_matches(&pat, &spd).len(), 1);
    }

    #[test]
    fn coefficient_absorption() {
        // alpha X Y on (-1) A B: binds alpha = -1.
        let e = Expr::times(vec![
            Expr::scalar_int(-1),
            op("A", 4, 5, &[]),
            op("B", 5, 4, &[]),
        ])
        .unwrap();
        let ms = find_matches(&product_pattern(), &e);
        // run [A,B] with alpha = 1, and run [-1,A,B] with alpha = -1
        assert_eq!(ms.len(), 2);
        assert!(ms
            .iter()
            .any(|m| m.binds.get("alpha") == Some(&BoundAtom::Lit((-1).into()))));
    }

    #[test]
    fn repeated_variable_requires_same_operand() {
        // X^T X matches A^T A but not A^T B.
        let pat = Pattern::Term(TermPat {
            coeff: CoeffMode::None,
            factors: vec![
                LeafPat::new("X", TransMode::Transposed, false, Constraint::any_matrix()),
                LeafPat::new("X", TransMode::Plain, false, Constraint::any_matrix()),
            ],
        });
        let a = op("A", 6, 3, &[]);
        let b = op("B", 6, 3, &[]);
        let good = Expr::times(vec![a.transposed().unwrap(), a.clone()]).unwrap();
        let bad = Expr::times(vec![a.transposed().unwrap(), b]).unwrap();
        assert_eq!(find_matches(&pat, &good).len(), 1);
        assert!(find_matches(&pat, &bad).is_empty());
    }

    #[test]
    fn match_value_equals_site_content() {
        let e = Expr::times(vec![
            Expr::scalar_int(-1),
            op("A", 4, 5, &[]),
            op("B", 5, 4, &[]),
            op("C", 4, 4, &[]),
        ])
        .unwrap();
        for m in find_matches(&product_pattern(), &e) {
            let content = site_content(&e, &m.site);
            assert!(equivalent(&m.value, &content).unwrap());
        }
    }

    #[test]
    fn commutativity_invariance_of_sum_matches() {
        let pat = Pattern::Sum(vec![
            TermPat {
                coeff: CoeffMode::None,
                factors: vec![LeafPat::new("X", TransMode::Transposed, false, Constraint::any_matrix())],
            },
            TermPat {
                coeff: CoeffMode::None,
                factors: vec![LeafPat::new("Y", TransMode::Plain, false, Constraint::any_matrix())],
            },
        ]);
        let terms = vec![
            op("A", 4, 4, &[]),
            op("B", 4, 4, &[]).transposed().unwrap(),
            op("C", 4, 4, &[]),
        ];
        let e1 = Expr::plus(terms.clone()).unwrap();
        let e2 = Expr::plus(vec![terms[2].clone(), terms[0].clone(), terms[1].clone()]).unwrap();
        let key = |ms: Vec<Match>| {
            let mut v: Vec<String> = ms
                .iter()
                .map(|m| {
                    format!(
                        "{}|{}",
                        m.binds["X"].as_operand().unwrap(),
                        m.binds["Y"].as_operand().unwrap()
                    )
                })
                .collect();
            v.sort();
            v
        };
        assert_eq!(key(find_matches(&pat, &e1)), key(find_matches(&pat, &e2)));
    }

    #[test]
    fn replace_run_splices_result() {
        let e = Expr::times(vec![op("A", 4, 4, &[]), op("B", 4, 4, &[]), op("C", 4, 4, &[])])
            .unwrap();
        let ms = find_matches(&product_pattern(), &e);
        let t = op("T", 4, 4, &[]);
        let replaced = replace_site(&e, &ms[0].site, &t);
        let expected = Expr::times(vec![t, op("C", 4, 4, &[])]).unwrap();
        assert_eq!(replaced, expected);
    }

    #[test]
    fn determinism() {
        let e = Expr::times(vec![op("A", 4, 4, &[]), op("B", 4, 4, &[]), op("C", 4, 4, &[])])
            .unwrap();
        let a = find_matches(&product_pattern(), &e);
        let b = find_matches(&product_pattern(), &e);
        assert_eq!(a.len(), b.len());
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.site, y.site);
            assert_eq!(x.binds, y.binds);
        }
    }

    #[test]
    fn matches_inside_inverse_nodes() {
        // X Y inside (A B + C)^-1.
        let a = op("A", 4, 6, &[]);
        let b = op("B", 6, 4, &[]);
        let c = op("C", 4, 4, &[]);
        let inner = Expr::plus(vec![Expr::times(vec![a, b]).unwrap(), c]).unwrap();
        let e = inner.inverted().unwrap();
        let ms = find_matches(&product_pattern(), &e);
        assert_eq!(ms.len(), 1);
        assert_eq!(ms[0].site.path, vec![0, 0]);
    }

    #[test]
    fn brute_force_agreement_small_products() {
        // Against a naive enumerator over runs for products of <= 5 operands.
        let dims = [4usize, 4, 4, 4, 4, 4];
        for n in 2..=5 {
            let ops: Vec<Expr> =
                (0..n).map(|i| op(&format!("M{i}"), dims[i], dims[i + 1], &[])).collect();
            let e = Expr::times(ops.clone()).unwrap();
            let ms = find_matches(&product_pattern(), &e);
            let mut expected = 0;
            for len in 2..=2 {
                expected += n - len + 1;
            }
            assert_eq!(ms.len(), expected, "n = {n}");
            for m in &ms {
                let content = site_content(&e, &m.site);
                assert!(equivalent(&m.value, &content).unwrap());
            }
        }
    }
}
