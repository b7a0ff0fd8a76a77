//! Generation of alternative algebraically-equivalent representations:
//! product-of-sums conversion, inverse push-up, common-subexpression
//! detection modulo transpose/inverse identities, special-case rules, and
//! factorization application.

use std::collections::BTreeMap;

use num_rational::Rational64;
use thiserror::Error;

use crate::expr::{normalize, Expr, ExprError, ExprKind, Operand};
use crate::kernels::{factor_outputs, CallOp, FactorKind, KernelCall};
use crate::matching::{
    find_matches, BoundAtom, CoeffMode, Constraint, LeafPat, Pattern, Selection, Site, TermPat,
    TransMode, Var,
};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum RewriteError {
    #[error("operand {0} does not occur inside an inversion")]
    NotInsideInverse(String),
    #[error("operand {0} is a factor and cannot be factorized")]
    FactorOperand(String),
    #[error(transparent)]
    Expr(#[from] ExprError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RewriteKind {
    NormalForm,
    ProductOfSums,
    InversePushUp,
    CseReplacement,
    SpecialRule,
    Factorization,
}

/// A rewrite of `before` into `after`, possibly introducing auxiliary
/// assignments (special rules, CSE) or emitting a factorization call.
#[derive(Debug, Clone)]
pub struct Rewrite {
    pub kind: RewriteKind,
    pub before: Expr,
    pub after: Expr,
    pub new_assignments: Vec<(Operand, Expr)>,
    pub call: Option<KernelCall>,
}

/// Alternative representations of a normal-form expression, deterministic
/// order: product-of-sums form, inverse-pushed-up form, the input itself;
/// structural duplicates removed. At most three entries.
pub fn representations(e: &Expr) -> Vec<Expr> {
    let mut out: Vec<Expr> = Vec::new();
    for cand in [product_of_sums(e), inverse_push_up(e), e.clone()] {
        if !out.contains(&cand) {
            out.push(cand);
        }
    }
    out
}

/// Factors maximal common left/right factors out of sums, greedily.
pub fn product_of_sums(e: &Expr) -> Expr {
    match e.kind() {
        ExprKind::Plus(_) => {
            let terms = decompose_terms(e);
            factor_terms(&terms, e.rows(), e.cols()).unwrap_or_else(|_| e.clone())
        }
        ExprKind::Times(cs) => {
            let new: Vec<Expr> = cs.iter().map(product_of_sums).collect();
            Expr::times(new).unwrap_or_else(|_| e.clone())
        }
        ExprKind::Inverse(c) => product_of_sums(c).inverted().unwrap_or_else(|_| e.clone()),
        ExprKind::Transpose(c) => product_of_sums(c).transposed().unwrap_or_else(|_| e.clone()),
        _ => e.clone(),
    }
}

/// One summand of a sum split as (coefficient, scalar factors, matrix factors).
#[derive(Debug, Clone)]
struct Term {
    coeff: Rational64,
    scalars: Vec<Expr>,
    factors: Vec<Expr>,
}

impl Term {
    fn rebuild(&self, rows: usize, cols: usize) -> Result<Expr, ExprError> {
        let mut parts = Vec::new();
        if self.coeff != Rational64::from_integer(1) {
            parts.push(Expr::scalar(self.coeff));
        }
        parts.extend(self.scalars.iter().cloned());
        if self.factors.is_empty() {
            parts.push(Expr::operand(Operand::synthetic_identity(rows.max(cols))));
        } else {
            parts.extend(self.factors.iter().cloned());
        }
        match parts.len() {
            0 => Ok(Expr::scalar_int(1)),
            1 => Ok(parts.pop().unwrap()),
            _ => Expr::times(parts),
        }
    }
}

fn decompose_terms(e: &Expr) -> Vec<Term> {
    let ExprKind::Plus(children) = e.kind() else {
        return vec![split_term(e)];
    };
    children.iter().map(split_term).collect()
}

fn split_term(e: &Expr) -> Term {
    match e.kind() {
        ExprKind::Times(cs) => {
            let mut t = Term { coeff: 1.into(), scalars: vec![], factors: vec![] };
            for c in cs {
                match c.kind() {
                    ExprKind::Scalar(r) => t.coeff *= r,
                    _ if c.is_scalar_shaped() => t.scalars.push(c.clone()),
                    _ => t.factors.push(product_of_sums(c)),
                }
            }
            t
        }
        ExprKind::Scalar(r) => Term { coeff: *r, scalars: vec![], factors: vec![] },
        _ => Term { coeff: 1.into(), scalars: vec![], factors: vec![product_of_sums(e)] },
    }
}

fn factor_terms(terms: &[Term], rows: usize, cols: usize) -> Result<Expr, ExprError> {
    if terms.len() < 2 {
        return terms[0].rebuild(rows, cols);
    }
    for left in [true, false] {
        if let Some(expr) = try_factor(terms, rows, cols, left)? {
            return Ok(expr);
        }
    }
    let rebuilt: Vec<Expr> =
        terms.iter().map(|t| t.rebuild(rows, cols)).collect::<Result<_, _>>()?;
    Expr::plus(rebuilt)
}

/// Greedy extraction of the most common leading (or trailing) factor,
/// extended to the longest shared prefix (suffix) of its group.
fn try_factor(
    terms: &[Term],
    rows: usize,
    cols: usize,
    left: bool,
) -> Result<Option<Expr>, ExprError> {
    fn edge_of(t: &Term, left: bool) -> Option<&Expr> {
        if left {
            t.factors.first()
        } else {
            t.factors.last()
        }
    }
    // Most common edge factor, ties broken by expression order.
    let mut counts: Vec<(&Expr, usize)> = Vec::new();
    for t in terms {
        if let Some(f) = edge_of(t, left) {
            match counts.iter_mut().find(|(e, _)| *e == f) {
                Some((_, n)) => *n += 1,
                None => counts.push((f, 1)),
            }
        }
    }
    counts.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(b.0)));
    let Some(&(factor, count)) = counts.first() else {
        return Ok(None);
    };
    if count < 2 {
        return Ok(None);
    }
    let factor = factor.clone();
    let (mut group, rest): (Vec<Term>, Vec<Term>) =
        terms.iter().cloned().partition(|t| edge_of(t, left) == Some(&factor));
    // Extend the shared run while every group member agrees.
    let mut run = vec![factor];
    loop {
        let next: Option<Expr> = {
            let t = &group[0];
            if left {
                t.factors.get(run.len()).cloned()
            } else {
                let n = t.factors.len();
                if n > run.len() {
                    Some(t.factors[n - 1 - run.len()].clone())
                } else {
                    None
                }
            }
        };
        let Some(next) = next else { break };
        let all = group.iter().all(|t| {
            if left {
                t.factors.get(run.len()) == Some(&next)
            } else {
                let n = t.factors.len();
                n > run.len() && t.factors[n - 1 - run.len()] == next
            }
        });
        if all {
            run.push(next);
        } else {
            break;
        }
    }
    // Strip the run from each group term.
    for t in &mut group {
        if left {
            t.factors.drain(..run.len());
        } else {
            let n = t.factors.len();
            t.factors.drain(n - run.len()..);
        }
    }
    if !left {
        run.reverse();
    }
    let prefix = if run.len() == 1 { run[0].clone() } else { Expr::times(run)? };
    let (prows, pcols) = (prefix.rows(), prefix.cols());
    let (inner_r, inner_c) = if left { (pcols, cols) } else { (rows, prows) };
    // Identity remainders only make sense when square.
    if group.iter().any(|t| t.factors.is_empty()) && inner_r != inner_c {
        return Ok(None);
    }
    let inner = factor_terms(&group, inner_r, inner_c)?;
    let factored = if left {
        Expr::times(vec![prefix, inner])?
    } else {
        Expr::times(vec![inner, prefix])?
    };
    if rest.is_empty() {
        return Ok(Some(factored));
    }
    let rest_expr = factor_terms(&rest, rows, cols)?;
    Ok(Some(Expr::plus(vec![factored, rest_expr])?))
}

/// Rewrites runs of adjacent inverted factors as the inverse of a product:
/// B^-1 A^-1 becomes (A B)^-1.
pub fn inverse_push_up(e: &Expr) -> Expr {
    match e.kind() {
        ExprKind::Times(cs) => {
            let cs: Vec<Expr> = cs.iter().map(inverse_push_up).collect();
            let mut out: Vec<Expr> = Vec::new();
            let mut run: Vec<Expr> = Vec::new();
            let flush = |run: &mut Vec<Expr>, out: &mut Vec<Expr>| match run.len() {
                0 => {}
                1 => out.push(run.pop().unwrap().inverted().expect("square inverse")),
                _ => {
                    let rev: Vec<Expr> = run.drain(..).rev().collect();
                    let prod = Expr::times(rev).expect("conformable inverse run");
                    out.push(prod.inverted().expect("square inverse"));
                }
            };
            for c in cs {
                if let ExprKind::Inverse(inner) = c.kind() {
                    run.push((**inner).clone());
                } else {
                    flush(&mut run, &mut out);
                    out.push(c);
                }
            }
            flush(&mut run, &mut out);
            match out.len() {
                1 => out.pop().unwrap(),
                _ => Expr::times(out).expect("conformable product"),
            }
        }
        ExprKind::Plus(cs) => {
            let cs: Vec<Expr> = cs.iter().map(inverse_push_up).collect();
            Expr::plus(cs).expect("sum dimensions unchanged")
        }
        ExprKind::Transpose(c) => inverse_push_up(c).transposed().expect("transpose"),
        ExprKind::Inverse(c) => inverse_push_up(c).inverted().expect("square inverse"),
        _ => e.clone(),
    }
}

// ---------------------------------------------------------------------------
// Common subexpressions
// ---------------------------------------------------------------------------

/// How an occurrence relates to the representative expression.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OccVariant {
    Plain,
    Transposed,
    Inverted,
    InvertedTransposed,
}

#[derive(Debug, Clone)]
pub struct CseCandidate {
    /// Canonical representative (the least normal form over the variants).
    pub repr: Expr,
    pub sites: Vec<(Site, OccVariant)>,
    pub operand_count: usize,
}

impl CseCandidate {
    pub fn occurrences(&self) -> usize {
        self.sites.len()
    }
}

/// Finds subexpressions occurring at least twice, counting occurrences
/// modulo B^T A^T = (A B)^T and B^-1 A^-1 = (A B)^-1; sites are disjoint.
/// Ordered by descending occurrence count, then descending operand count,
/// then the representative's order key.
pub fn common_subexpressions(e: &Expr) -> Vec<CseCandidate> {
    let mut occs: Vec<(Expr, Site)> = Vec::new();
    collect_units(e, &mut Vec::new(), &mut occs);

    // Group by canonical representative.
    let mut groups: Vec<(Expr, Vec<(Site, OccVariant)>)> = Vec::new();
    for (unit, site) in occs {
        let Some((repr, variant)) = canonical_variant(&unit) else { continue };
        match groups.iter_mut().find(|(r, _)| *r == repr) {
            Some((_, sites)) => sites.push((site, variant)),
            None => groups.push((repr, vec![(site, variant)])),
        }
    }

    let mut out = Vec::new();
    for (repr, mut sites) in groups {
        if count_operand_leaves(&repr) < 2 {
            continue;
        }
        // Disjoint sites, greedy by position.
        sites.sort_by(|a, b| a.0.cmp(&b.0));
        let mut kept: Vec<(Site, OccVariant)> = Vec::new();
        for (site, v) in sites {
            if kept.iter().all(|(k, _)| !sites_overlap(k, &site)) {
                kept.push((site, v));
            }
        }
        if kept.len() >= 2 {
            let operand_count = count_operand_leaves(&repr);
            out.push(CseCandidate { repr, sites: kept, operand_count });
        }
    }
    out.sort_by(|a, b| {
        b.sites
            .len()
            .cmp(&a.sites.len())
            .then(b.operand_count.cmp(&a.operand_count))
            .then(a.repr.cmp(&b.repr))
    });
    out
}

/// Candidate units: every contiguous run of length >= 2 of every product
/// node, and every full sum node.
fn collect_units(e: &Expr, path: &mut Vec<usize>, out: &mut Vec<(Expr, Site)>) {
    match e.kind() {
        ExprKind::Times(cs) => {
            let n = cs.len();
            for len in 2..=n {
                for start in 0..=(n - len) {
                    if cs[start..start + len].iter().any(|c| c.is_scalar_shaped()) {
                        continue;
                    }
                    if let Ok(unit) = Expr::times(cs[start..start + len].to_vec()) {
                        out.push((
                            unit,
                            Site { path: path.clone(), sel: Selection::Run { start, len } },
                        ));
                    }
                }
            }
            for (i, child) in cs.iter().enumerate() {
                path.push(i);
                collect_units(child, path, out);
                path.pop();
            }
        }
        ExprKind::Plus(cs) => {
            out.push((e.clone(), Site { path: path.clone(), sel: Selection::Whole }));
            for (i, child) in cs.iter().enumerate() {
                path.push(i);
                collect_units(child, path, out);
                path.pop();
            }
        }
        ExprKind::Inverse(c) | ExprKind::Transpose(c) => {
            path.push(0);
            collect_units(c, path, out);
            path.pop();
        }
        _ => {}
    }
}

/// Normal forms of the unit and of its transpose/inverse variants; returns
/// the least one as the representative plus the variant that maps the
/// representative onto this occurrence.
fn canonical_variant(unit: &Expr) -> Option<(Expr, OccVariant)> {
    let plain = normalize(unit).ok()?;
    let mut best = (plain, OccVariant::Plain);
    if let Ok(t) = unit.transposed().and_then(|t| normalize(&t)) {
        if t < best.0 {
            best = (t, OccVariant::Transposed);
        }
    }
    if unit.is_square() {
        if let Ok(inv) = unit.inverted() {
            if let Ok(i) = normalize(&inv) {
                if i < best.0 {
                    best = (i, OccVariant::Inverted);
                }
            }
            if let Ok(it) = inv.transposed().and_then(|x| normalize(&x)) {
                if it < best.0 {
                    best = (it, OccVariant::InvertedTransposed);
                }
            }
        }
    }
    Some(best)
}

/// The expression standing for an occurrence of `t` under a variant.
pub fn variant_expr(t: &Operand, v: OccVariant) -> Expr {
    let base = Expr::operand(t.clone());
    match v {
        OccVariant::Plain => base,
        OccVariant::Transposed => base.transposed().expect("transpose"),
        OccVariant::Inverted => base.inverted().expect("square"),
        OccVariant::InvertedTransposed => {
            base.transposed().expect("transpose").inverted().expect("square")
        }
    }
}

fn count_operand_leaves(e: &Expr) -> usize {
    let mut n = 0;
    e.visit_operands(&mut |_| n += 1);
    n
}

fn sites_overlap(a: &Site, b: &Site) -> bool {
    let (shorter, longer) = if a.path.len() <= b.path.len() { (a, b) } else { (b, a) };
    if longer.path[..shorter.path.len()] != shorter.path[..] {
        return false;
    }
    if shorter.path.len() == longer.path.len() {
        match (&a.sel, &b.sel) {
            (Selection::Run { start: s1, len: l1 }, Selection::Run { start: s2, len: l2 }) => {
                s1 < &(s2 + l2) && s2 < &(s1 + l1)
            }
            _ => true,
        }
    } else {
        // The longer path descends into the shorter site's node; overlap
        // happens when it enters a selected child.
        let next = longer.path[shorter.path.len()];
        match &shorter.sel {
            Selection::Whole => true,
            Selection::Run { start, len } => next >= *start && next < start + len,
            Selection::Subset(idx) => idx.contains(&next),
        }
    }
}

/// Replaces every occurrence of the candidate with `t` (wrapped per
/// variant) and returns the rewritten, normalized expression.
pub fn apply_cse(e: &Expr, cand: &CseCandidate, t: &Operand) -> Result<Expr, ExprError> {
    let mut sites = cand.sites.clone();
    // Deepest and rightmost first so shallower indices stay valid.
    sites.sort_by(|a, b| b.0.cmp(&a.0));
    let mut cur = e.clone();
    for (site, v) in &sites {
        let repl = variant_expr(t, *v);
        cur = crate::matching::replace_site(&cur, site, &repl);
    }
    normalize(&cur)
}

// ---------------------------------------------------------------------------
// Special rules
// ---------------------------------------------------------------------------

/// A non-trivial rewrite that computes a specific shape at reduced cost by
/// introducing an auxiliary assignment.
pub struct SpecialRule {
    pub name: &'static str,
    pub pattern: Pattern,
    /// Right-hand side of the auxiliary assignment, over the bindings.
    pub aux: fn(&BTreeMap<Var, BoundAtom>) -> Expr,
    /// Replacement for the matched site, over the bindings and the
    /// auxiliary operand.
    pub replacement: fn(&BTreeMap<Var, BoundAtom>, &Operand) -> Expr,
}

fn bound_op(binds: &BTreeMap<Var, BoundAtom>, v: Var) -> Expr {
    Expr::operand(binds[v].as_operand().expect("matrix binding").clone())
}

fn plain(var: Var) -> LeafPat {
    LeafPat::new(var, TransMode::Plain, false, Constraint::any_matrix())
}

fn transposed(var: Var) -> LeafPat {
    LeafPat::new(var, TransMode::Transposed, false, Constraint::any_matrix())
}

fn bare(factors: Vec<LeafPat>) -> TermPat {
    TermPat { coeff: CoeffMode::None, factors }
}

/// The special-rule table. Each entry is validated numerically in tests.
pub fn special_rule_table() -> &'static [SpecialRule] {
    use std::sync::OnceLock;
    static TABLE: OnceLock<Vec<SpecialRule>> = OnceLock::new();
    TABLE.get_or_init(|| {
        vec![
            // A^T A + A^T B + B^T A  ->  Y := B + A/2;  A^T Y + Y^T A
            SpecialRule {
                name: "gram_cross_sum",
                pattern: Pattern::Sum(vec![
                    bare(vec![transposed("A"), plain("A")]),
                    bare(vec![transposed("A"), plain("B")]),
                    bare(vec![transposed("B"), plain("A")]),
                ]),
                aux: |b| {
                    let a = bound_op(b, "A");
                    let bb = bound_op(b, "B");
                    let half_a =
                        Expr::times(vec![Expr::scalar(Rational64::new(1, 2)), a]).unwrap();
                    Expr::plus(vec![bb, half_a]).unwrap()
                },
                replacement: |b, y| {
                    let a = bound_op(b, "A");
                    let ye = Expr::operand(y.clone());
                    Expr::plus(vec![
                        Expr::times(vec![a.transposed().unwrap(), ye.clone()]).unwrap(),
                        Expr::times(vec![ye.transposed().unwrap(), a]).unwrap(),
                    ])
                    .unwrap()
                },
            },
            // A A^T + A B^T + B A^T  ->  Y := B + A/2;  A Y^T + Y A^T
            SpecialRule {
                name: "gram_cross_sum_t",
                pattern: Pattern::Sum(vec![
                    bare(vec![plain("A"), transposed("A")]),
                    bare(vec![plain("A"), transposed("B")]),
                    bare(vec![plain("B"), transposed("A")]),
                ]),
                aux: |b| {
                    let a = bound_op(b, "A");
                    let bb = bound_op(b, "B");
                    let half_a =
                        Expr::times(vec![Expr::scalar(Rational64::new(1, 2)), a]).unwrap();
                    Expr::plus(vec![bb, half_a]).unwrap()
                },
                replacement: |b, y| {
                    let a = bound_op(b, "A");
                    let ye = Expr::operand(y.clone());
                    Expr::plus(vec![
                        Expr::times(vec![a.clone(), ye.transposed().unwrap()]).unwrap(),
                        Expr::times(vec![ye, a.transposed().unwrap()]).unwrap(),
                    ])
                    .unwrap()
                },
            },
        ]
    })
}

/// Applies the special-rule table to a normal-form expression. `fresh`
/// supplies the auxiliary operand for a given (normalized) right-hand side.
pub fn special_rules(
    e: &Expr,
    fresh: &mut dyn FnMut(&Expr) -> Operand,
) -> Result<Vec<Rewrite>, RewriteError> {
    let mut out: Vec<Rewrite> = Vec::new();
    for rule in special_rule_table() {
        for m in find_matches(&rule.pattern, e) {
            let aux_rhs = normalize(&(rule.aux)(&m.binds))?;
            let y = fresh(&aux_rhs);
            let repl = (rule.replacement)(&m.binds, &y);
            let after = normalize(&crate::matching::replace_site(e, &m.site, &repl))?;
            if out.iter().any(|r| r.after == after) {
                continue;
            }
            out.push(Rewrite {
                kind: RewriteKind::SpecialRule,
                before: e.clone(),
                after,
                new_assignments: vec![(y, aux_rhs)],
                call: None,
            });
        }
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Factorizations
// ---------------------------------------------------------------------------

/// Does `target` occur under an inversion anywhere in `e`?
pub fn occurs_inside_inverse(e: &Expr, target: &Operand) -> bool {
    fn rec(e: &Expr, target: &Operand, under_inv: bool) -> bool {
        match e.kind() {
            ExprKind::Op(o) => under_inv && o == target,
            ExprKind::Scalar(_) => false,
            ExprKind::Times(cs) | ExprKind::Plus(cs) => {
                cs.iter().any(|c| rec(c, target, under_inv))
            }
            ExprKind::Transpose(c) => rec(c, target, under_inv),
            ExprKind::Inverse(c) => rec(c, target, true),
        }
    }
    rec(e, target, false)
}

/// Replaces every occurrence of `target` in `e` by its factored form and
/// emits the factorization call.
pub fn apply_factorization(
    e: &Expr,
    target: &Operand,
    kind: FactorKind,
    outputs: &[Operand],
    replacement: &Expr,
) -> Result<Rewrite, RewriteError> {
    if target.is_factor() {
        return Err(RewriteError::FactorOperand(target.name().to_string()));
    }
    if !occurs_inside_inverse(e, target) {
        return Err(RewriteError::NotInsideInverse(target.name().to_string()));
    }
    let substituted = e.substitute(target, replacement)?;
    let after = normalize(&substituted)?;
    let call = KernelCall {
        op: CallOp::Factor(kind),
        binds: BTreeMap::new(),
        terms: vec![],
        results: outputs.to_vec(),
        flops: kind.cost(target.rows(), target.cols()),
        value: Expr::operand(target.clone()),
    };
    Ok(Rewrite {
        kind: RewriteKind::Factorization,
        before: e.clone(),
        after,
        new_assignments: vec![],
        call: Some(call),
    })
}

/// Convenience wrapper building the outputs with `factor_outputs`.
pub fn factorize_with_names(
    e: &Expr,
    target: &Operand,
    kind: FactorKind,
    names: &[String],
) -> Result<(Rewrite, Vec<Operand>), RewriteError> {
    let (outputs, replacement) = factor_outputs(kind, target, names);
    let rw = apply_factorization(e, target, kind, &outputs, &replacement)?;
    Ok((rw, outputs))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::expr::{equivalent, Origin};
    use crate::props::{Property, PropertySet};

    fn op(name: &str, r: usize, c: usize, props: &[Property]) -> Expr {
        Expr::operand(Operand::new(name, r, c, PropertySet::new(props), Origin::Input).unwrap())
    }

    fn fresh_namer() -> impl FnMut(&Expr) -> Operand {
        let mut n = 0;
        move |rhs: &Expr| {
            n += 1;
            Operand::new(
                format!("Y{n}"),
                rhs.rows(),
                rhs.cols(),
                PropertySet::EMPTY,
                Origin::Intermediate,
            )
            .unwrap()
        }
    }

    #[test]
    fn distributivity_gives_product_of_sums() {
        // AB + AC factors as A(B + C).
        let a = op("A", 4, 4, &[]);
        let b = op("B", 4, 4, &[]);
        let c = op("C", 4, 4, &[]);
        let e = Expr::plus(vec![
            Expr::times(vec![a.clone(), b.clone()]).unwrap(),
            Expr::times(vec![a.clone(), c.clone()]).unwrap(),
        ])
        .unwrap();
        let reps = representations(&normalize(&e).unwrap());
        let expected = Expr::times(vec![a, Expr::plus(vec![b, c]).unwrap()]).unwrap();
        assert!(reps.contains(&expected), "got {reps:?}");
        assert!(reps.len() <= 3);
    }

    #[test]
    fn inverse_push_up_groups_runs() {
        let a = op("A", 5, 5, &[Property::FullRank]);
        let b = op("B", 5, 5, &[Property::FullRank]);
        let e = Expr::times(vec![b.inverted().unwrap(), a.inverted().unwrap()]).unwrap();
        let reps = representations(&e);
        let expected = Expr::times(vec![a, b]).unwrap().inverted().unwrap();
        assert!(reps.contains(&expected), "got {reps:?}");
    }

    #[test]
    fn single_operand_representation_is_itself() {
        let a = op("A", 4, 4, &[]);
        assert_eq!(representations(&a), vec![a]);
    }

    #[test]
    fn cse_detects_transposed_occurrence() {
        // (A^-1 B) C + C (B^T A^-T): one candidate with a transposed site.
        let a = op("A", 4, 4, &[Property::FullRank]);
        let b = op("B", 4, 4, &[]);
        let u = Expr::times(vec![a.inverted().unwrap(), b.clone()]).unwrap();
        let ut = normalize(&u.transposed().unwrap()).unwrap();
        let c = op("C", 4, 4, &[]);
        let e = normalize(
            &Expr::plus(vec![
                Expr::times(vec![u.clone(), c.clone()]).unwrap(),
                Expr::times(vec![c, ut]).unwrap(),
            ])
            .unwrap(),
        )
        .unwrap();
        let cands = common_subexpressions(&e);
        assert!(!cands.is_empty());
        let top = &cands[0];
        assert_eq!(top.occurrences(), 2);
        assert!(top.sites.iter().any(|(_, v)| *v != OccVariant::Plain));
        let t = Operand::new("T1", 4, 4, PropertySet::EMPTY, Origin::Intermediate).unwrap();
        let replaced = apply_cse(&e, top, &t).unwrap();
        let mut count = 0;
        replaced.visit_operands(&mut |o| {
            if o.name() == "T1" {
                count += 1;
            }
        });
        assert_eq!(count, 2);
    }

    #[test]
    fn cse_reports_sandwich_product_runs() {
        // W^T A B A^T W: the W^T A run and its transpose count as one
        // candidate with two sites.
        let w = op("W", 20, 4, &[]);
        let a = op("A", 20, 8, &[]);
        let b = op("B", 8, 8, &[Property::Spd]);
        let wta = Expr::times(vec![w.transposed().unwrap(), a.clone()]).unwrap();
        let inner = normalize(
            &Expr::times(vec![
                wta.clone(),
                b.clone(),
                normalize(&wta.transposed().unwrap()).unwrap(),
            ])
            .unwrap(),
        )
        .unwrap();
        let cands = common_subexpressions(&inner);
        let hit = cands.iter().find(|c2| c2.occurrences() == 2);
        assert!(hit.is_some(), "candidates: {}", cands.len());
    }

    #[test]
    fn no_repeats_no_candidates() {
        let e = Expr::times(vec![op("A", 4, 5, &[]), op("B", 5, 6, &[])]).unwrap();
        assert!(common_subexpressions(&e).is_empty());
    }

    #[test]
    fn special_rule_fires_on_gram_cross_sum() {
        // A^T A + A^T B + B^T A -> Y := B + A/2, A^T Y + Y^T A.
        let a = op("A", 6, 4, &[]);
        let b = op("B", 6, 4, &[]);
        let e = normalize(
            &Expr::plus(vec![
                Expr::times(vec![a.transposed().unwrap(), a.clone()]).unwrap(),
                Expr::times(vec![a.transposed().unwrap(), b.clone()]).unwrap(),
                Expr::times(vec![b.transposed().unwrap(), a.clone()]).unwrap(),
            ])
            .unwrap(),
        )
        .unwrap();
        let mut namer = fresh_namer();
        let rws = special_rules(&e, &mut namer).unwrap();
        assert!(!rws.is_empty());
        let rw = &rws[0];
        assert_eq!(rw.new_assignments.len(), 1);
        let (y, rhs) = &rw.new_assignments[0];
        let expected = normalize(
            &Expr::plus(vec![
                b,
                Expr::times(vec![Expr::scalar(Rational64::new(1, 2)), a]).unwrap(),
            ])
            .unwrap(),
        )
        .unwrap();
        assert_eq!(*rhs, expected);
        let mut seen = false;
        rw.after.visit_operands(&mut |o| seen |= o == y);
        assert!(seen, "replacement references the auxiliary operand");
    }

    #[test]
    fn special_rules_preserve_value() {
        // Substituting the aux assignment back must restore the original.
        let a = op("A", 6, 4, &[]);
        let b = op("B", 6, 4, &[]);
        for terms in [
            vec![
                Expr::times(vec![a.transposed().unwrap(), a.clone()]).unwrap(),
                Expr::times(vec![a.transposed().unwrap(), b.clone()]).unwrap(),
                Expr::times(vec![b.transposed().unwrap(), a.clone()]).unwrap(),
            ],
            vec![
                Expr::times(vec![a.clone(), a.transposed().unwrap()]).unwrap(),
                Expr::times(vec![a.clone(), b.transposed().unwrap()]).unwrap(),
                Expr::times(vec![b.clone(), a.transposed().unwrap()]).unwrap(),
            ],
        ] {
            let e = normalize(&Expr::plus(terms).unwrap()).unwrap();
            let mut namer = fresh_namer();
            let rws = special_rules(&e, &mut namer).unwrap();
            assert!(!rws.is_empty(), "no rule fired on {e}");
            for rw in rws {
                let (y, rhs) = &rw.new_assignments[0];
                let back = rw.after.substitute(y, rhs).unwrap();
                assert!(equivalent(&back, &rw.before).unwrap(), "rule broke {e}");
            }
        }
    }

    #[test]
    fn unrelated_expression_no_special_rules() {
        let e = Expr::times(vec![op("A", 4, 5, &[]), op("B", 5, 6, &[])]).unwrap();
        let mut namer = fresh_namer();
        assert!(special_rules(&e, &mut namer).unwrap().is_empty());
    }

    #[test]
    fn cholesky_factorization_rewrite() {
        // S^-1 B with S SPD: S = L L^T gives L^-T L^-1 B.
        let s_op =
            Operand::new("S", 5, 5, PropertySet::new(&[Property::Spd]), Origin::Input).unwrap();
        let b = op("B", 5, 5, &[]);
        let e = Expr::times(vec![Expr::operand(s_op.clone()).inverted().unwrap(), b]).unwrap();
        let (rw, outs) =
            factorize_with_names(&e, &s_op, FactorKind::Cholesky, &["L1".to_string()]).unwrap();
        assert_eq!(outs.len(), 1);
        let call = rw.call.as_ref().unwrap();
        assert_eq!(call.op.name(), "cholesky");
        fn count_inv(e: &Expr, n: &mut usize) {
            match e.kind() {
                ExprKind::Inverse(c) => {
                    *n += 1;
                    count_inv(c, n);
                }
                ExprKind::Times(cs) | ExprKind::Plus(cs) => {
                    cs.iter().for_each(|c| count_inv(c, n))
                }
                ExprKind::Transpose(c) => count_inv(c, n),
                _ => {}
            }
        }
        let mut inv_count = 0;
        count_inv(&rw.after, &mut inv_count);
        assert_eq!(inv_count, 2, "after = {}", rw.after);
    }

    #[test]
    fn qr_on_gram_inverse_collapses() {
        // (X^T X)^-1 X^T y with X = Q R becomes R^-1 Q^T y.
        let x_op =
            Operand::new("X", 30, 5, PropertySet::new(&[Property::FullRank]), Origin::Input)
                .unwrap();
        let x = Expr::operand(x_op.clone());
        let y = op("y", 30, 1, &[]);
        let gram = Expr::times(vec![x.transposed().unwrap(), x.clone()]).unwrap();
        let e = normalize(
            &Expr::times(vec![gram.inverted().unwrap(), x.transposed().unwrap(), y]).unwrap(),
        )
        .unwrap();
        let (rw, outs) =
            factorize_with_names(&e, &x_op, FactorKind::Qr, &["Q1".into(), "R1".into()])
                .unwrap();
        if let ExprKind::Times(cs) = rw.after.kind() {
            assert_eq!(cs.len(), 3, "after = {}", rw.after);
        } else {
            panic!("after = {}", rw.after);
        }
        assert!(outs.iter().all(|o| o.is_factor()));
    }

    #[test]
    fn factorizing_factor_operand_is_rejected() {
        let s_op =
            Operand::new("S", 5, 5, PropertySet::new(&[Property::Spd]), Origin::Input).unwrap();
        let (l, _) = factor_outputs(FactorKind::Cholesky, &s_op, &["L1".to_string()]);
        let e = Expr::operand(l[0].clone()).inverted().unwrap();
        let r = factorize_with_names(&e, &l[0], FactorKind::Cholesky, &["L2".to_string()]);
        assert!(matches!(r, Err(RewriteError::FactorOperand(_))));
    }

    #[test]
    fn factorization_requires_inverse_context() {
        let s_op =
            Operand::new("S", 5, 5, PropertySet::new(&[Property::Spd]), Origin::Input).unwrap();
        let b = op("B", 5, 5, &[]);
        let e = Expr::times(vec![Expr::operand(s_op.clone()), b]).unwrap();
        let r = factorize_with_names(&e, &s_op, FactorKind::Cholesky, &["L1".to_string()]);
        assert!(matches!(r, Err(RewriteError::NotInsideInverse(_))));
    }

    #[test]
    fn representations_bounded_and_equivalent() {
        let a = op("A", 4, 4, &[Property::FullRank]);
        let b = op("B", 4, 4, &[Property::FullRank]);
        let c = op("C", 4, 4, &[]);
        let e = normalize(
            &Expr::plus(vec![
                Expr::times(vec![a.clone(), b.clone()]).unwrap(),
                Expr::times(vec![a.clone(), c.clone()]).unwrap(),
                Expr::times(vec![b.inverted().unwrap(), a.inverted().unwrap(), c]).unwrap(),
            ])
            .unwrap(),
        )
        .unwrap();
        let reps = representations(&e);
        assert!(reps.len() <= 3);
        for r in &reps {
            assert!(equivalent(r, &e).unwrap(), "rep {r} not equivalent to {e}");
        }
    }
}
