//! Constructive algorithms: the generalized matrix chain dynamic program
//! (transposed, inverted and property-annotated factors) and a greedy
//! algorithm for sums.
//!
//! Both plan with the same pair-kernel cost table the search uses, so a
//! constructive fragment is always a valid kernel sequence.

use thiserror::Error;

use crate::expr::{Expr, ExprKind, Operand, Origin};
use crate::kernels::{builtin_kernels, match_all, CallOp, KernelCall};
use crate::matching::{Match, Selection};
use crate::props::{infer, PropertySet};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ChainError {
    #[error("chain is not conformable: {0}")]
    NonConformable(String),
    #[error("inverted chain element is not square")]
    InvertedNotSquare,
    #[error("chain element is not a (possibly modified) operand: {0}")]
    NotALeaf(String),
    #[error("no kernel computes the chain")]
    NoKernel,
    #[error("empty chain")]
    Empty,
}

/// A planned sequence of kernel calls computing one subexpression.
#[derive(Debug, Clone, Default)]
pub struct Fragment {
    pub calls: Vec<KernelCall>,
    pub cost: f64,
}

/// Supplies result operands for planned kernel values. The search backs
/// this with its unique-intermediate table.
pub trait OperandAlloc {
    /// `value` is the expression the call computes, over current operands.
    fn operand_for(&mut self, value: &Expr) -> Operand;
}

/// A trivial allocator for tests and standalone planning.
pub struct CountingAlloc {
    next: usize,
    prefix: &'static str,
}

impl CountingAlloc {
    pub fn new(prefix: &'static str) -> CountingAlloc {
        CountingAlloc { next: 0, prefix }
    }
}

impl OperandAlloc for CountingAlloc {
    fn operand_for(&mut self, value: &Expr) -> Operand {
        self.next += 1;
        let props = infer(value).unwrap_or(PropertySet::EMPTY);
        Operand::new(
            format!("{}{}", self.prefix, self.next),
            value.rows(),
            value.cols(),
            props,
            Origin::Intermediate,
        )
        .expect("inferred properties are consistent")
    }
}

/// The cheapest kernel covering exactly the product of the two leaves.
pub fn best_pair_kernel(left: &Expr, right: &Expr) -> Option<(usize, Match, f64)> {
    let pair = Expr::times(vec![left.clone(), right.clone()]).ok()?;
    best_cover(&pair)
}

/// The cheapest kernel covering exactly the sum of the two terms.
pub fn best_sum_kernel(a: &Expr, b: &Expr) -> Option<(usize, Match, f64)> {
    let pair = Expr::plus(vec![a.clone(), b.clone()]).ok()?;
    best_cover(&pair)
}

fn best_cover(subject: &Expr) -> Option<(usize, Match, f64)> {
    let n_children = match subject.kind() {
        ExprKind::Times(cs) | ExprKind::Plus(cs) => cs.len(),
        _ => 1,
    };
    let mut best: Option<(usize, Match, f64)> = None;
    for (ki, m) in match_all(subject) {
        if !m.site.path.is_empty() {
            continue;
        }
        let covers = match &m.site.sel {
            Selection::Whole => true,
            Selection::Run { start, len } => *start == 0 && *len == n_children,
            Selection::Subset(idx) => idx.len() == n_children,
        };
        if !covers {
            continue;
        }
        let cost = builtin_kernels()[ki].cost_of_match(&m);
        let better = match &best {
            None => true,
            Some((bki, _, bcost)) => cost < *bcost || (cost == *bcost && ki < *bki),
        };
        if better {
            best = Some((ki, m, cost));
        }
    }
    best
}

fn leaf_check(e: &Expr) -> Result<(), ChainError> {
    match e.as_modified_operand() {
        Some((_, _, inv)) => {
            if inv && !e.is_square() {
                Err(ChainError::InvertedNotSquare)
            } else {
                Ok(())
            }
        }
        None => Err(ChainError::NotALeaf(e.to_string())),
    }
}

/// Is the chain expressible with direct pair kernels? Inverted elements
/// must be triangular or diagonal (solves); general inverses need a
/// factorization first and are left to the search.
pub fn chain_supported(elems: &[Expr]) -> bool {
    if elems.len() <= 1 {
        return true;
    }
    elems.iter().all(|e| match e.as_modified_operand() {
        Some((o, _, true)) => {
            o.props().triangular() || o.props().has(crate::props::Property::Diagonal)
        }
        Some(_) => true,
        None => false,
    })
}

/// Optimal parenthesization of a generalized matrix chain.
///
/// Interval dynamic program over split points; each pair is priced by the
/// cheapest applicable kernel, with interval properties propagated through
/// `infer` so that structured intermediates unlock cheaper kernels.
/// Returns the kernel fragment and its exact FLOP cost.
pub fn matrix_chain(elems: &[Expr], alloc: &mut dyn OperandAlloc) -> Result<Fragment, ChainError> {
    if elems.is_empty() {
        return Err(ChainError::Empty);
    }
    for e in elems {
        leaf_check(e)?;
    }
    // Validates conformability (1x1 elements are scalar-exempt).
    Expr::times(elems.to_vec()).map_err(|e| ChainError::NonConformable(e.to_string()))?;
    let n = elems.len();
    if n == 1 {
        return single_element_fragment(&elems[0], alloc);
    }

    // Planning representative of each interval: the element itself for
    // singletons, a synthetic operand with inferred properties otherwise.
    let mut repr: Vec<Vec<Option<Expr>>> = vec![vec![None; n]; n];
    let mut cost: Vec<Vec<f64>> = vec![vec![f64::INFINITY; n]; n];
    let mut split: Vec<Vec<usize>> = vec![vec![usize::MAX; n]; n];
    for i in 0..n {
        repr[i][i] = Some(elems[i].clone());
        cost[i][i] = 0.0;
    }
    for len in 2..=n {
        for i in 0..=(n - len) {
            let j = i + len - 1;
            for k in i..j {
                let (Some(l), Some(r)) = (&repr[i][k], &repr[k + 1][j]) else { continue };
                let Some((_, _, pair_cost)) = best_pair_kernel(l, r) else { continue };
                let total = cost[i][k] + cost[k + 1][j] + pair_cost;
                if total < cost[i][j] {
                    cost[i][j] = total;
                    split[i][j] = k;
                }
            }
            if cost[i][j].is_finite() {
                let sym = Expr::times(elems[i..=j].to_vec())
                    .map_err(|e| ChainError::NonConformable(e.to_string()))?;
                let props = infer(&sym).unwrap_or(PropertySet::EMPTY);
                let op = Operand::new(
                    format!("#chain{i}_{j}"),
                    sym.rows(),
                    sym.cols(),
                    props,
                    Origin::Intermediate,
                )
                .expect("inferred properties are consistent");
                repr[i][j] = Some(Expr::operand(op));
            }
        }
    }
    if !cost[0][n - 1].is_finite() {
        return Err(ChainError::NoKernel);
    }

    // Materialize the chosen splits bottom-up.
    let mut frag = Fragment::default();
    build_interval(elems, &split, 0, n - 1, alloc, &mut frag)?;
    Ok(frag)
}

fn single_element_fragment(
    e: &Expr,
    alloc: &mut dyn OperandAlloc,
) -> Result<Fragment, ChainError> {
    let (_, trans, inv) = e.as_modified_operand().expect("checked leaf");
    if !trans && !inv {
        return Ok(Fragment::default());
    }
    // A modified single element materializes with its whole-node kernel
    // (transpose copy or an explicit inverse).
    let Some((ki, m, cost)) = best_cover(e) else {
        return Err(ChainError::NoKernel);
    };
    let result = alloc.operand_for(&m.value);
    let call = KernelCall {
        op: CallOp::Kernel(ki),
        binds: m.binds.clone(),
        terms: m.terms.clone(),
        results: vec![result],
        flops: cost,
        value: m.value.clone(),
    };
    Ok(Fragment { calls: vec![call], cost })
}

fn build_interval(
    elems: &[Expr],
    split: &[Vec<usize>],
    i: usize,
    j: usize,
    alloc: &mut dyn OperandAlloc,
    frag: &mut Fragment,
) -> Result<Expr, ChainError> {
    if i == j {
        return Ok(elems[i].clone());
    }
    let k = split[i][j];
    let left = build_interval(elems, split, i, k, alloc, frag)?;
    let right = build_interval(elems, split, k + 1, j, alloc, frag)?;
    let (ki, m, cost) = best_pair_kernel(&left, &right).ok_or(ChainError::NoKernel)?;
    let result = alloc.operand_for(&m.value);
    frag.calls.push(KernelCall {
        op: CallOp::Kernel(ki),
        binds: m.binds.clone(),
        terms: m.terms.clone(),
        results: vec![result.clone()],
        flops: cost,
        value: m.value.clone(),
    });
    frag.cost += cost;
    Ok(Expr::operand(result))
}

/// Is a sum expressible by pairwise addition kernels? Terms must be plain
/// or sign-scaled (possibly transposed) non-inverted leaves.
pub fn sum_supported(terms: &[Expr]) -> bool {
    terms.len() >= 2
        && terms.iter().all(|t| match t.kind() {
            ExprKind::Times(cs) => {
                cs.len() == 2
                    && matches!(cs[0].kind(), ExprKind::Scalar(r) if *r == 1.into() || *r == (-1).into())
                    && cs[1].as_modified_operand().map(|(_, _, inv)| !inv).unwrap_or(false)
            }
            _ => t.as_modified_operand().map(|(_, _, inv)| !inv).unwrap_or(false),
        })
}

/// Folds the cheapest pairwise addition until one operand remains.
/// Deterministic: ties break on the pair's order keys.
pub fn greedy_sum(terms: &[Expr], alloc: &mut dyn OperandAlloc) -> Result<Fragment, ChainError> {
    if terms.is_empty() {
        return Err(ChainError::Empty);
    }
    if terms.len() == 1 {
        return Ok(Fragment::default());
    }
    let dims = (terms[0].rows(), terms[0].cols());
    for t in terms {
        if (t.rows(), t.cols()) != dims {
            return Err(ChainError::NonConformable(format!(
                "sum of {}x{} and {}x{}",
                dims.0,
                dims.1,
                t.rows(),
                t.cols()
            )));
        }
    }
    let mut work: Vec<Expr> = terms.to_vec();
    let mut frag = Fragment::default();
    while work.len() > 1 {
        let mut best: Option<(usize, usize, usize, Match, f64)> = None;
        for i in 0..work.len() {
            for j in (i + 1)..work.len() {
                let Some((ki, m, cost)) = best_sum_kernel(&work[i], &work[j]) else { continue };
                let better = match &best {
                    None => true,
                    Some((_, bi, bj, _, bcost)) => {
                        cost < *bcost
                            || (cost == *bcost && (&work[i], &work[j]) < (&work[*bi], &work[*bj]))
                    }
                };
                if better {
                    best = Some((ki, i, j, m, cost));
                }
            }
        }
        let Some((ki, i, j, m, cost)) = best else {
            return Err(ChainError::NoKernel);
        };
        let result = alloc.operand_for(&m.value);
        frag.calls.push(KernelCall {
            op: CallOp::Kernel(ki),
            binds: m.binds.clone(),
            terms: m.terms.clone(),
            results: vec![result.clone()],
            flops: cost,
            value: m.value.clone(),
        });
        frag.cost += cost;
        work.remove(j);
        work.remove(i);
        work.push(Expr::operand(result));
    }
    Ok(frag)
}

/// Exhaustive minimization over all parenthesizations with the same pair
/// cost table; the test oracle for the dynamic program.
pub fn exhaustive_chain_cost(elems: &[Expr]) -> Option<f64> {
    fn rec(elems: &[Expr], counter: &mut usize) -> Option<(Expr, f64)> {
        if elems.len() == 1 {
            return Some((elems[0].clone(), 0.0));
        }
        let mut best: Option<(Expr, f64)> = None;
        for k in 0..elems.len() - 1 {
            let Some((l, lc)) = rec(&elems[..=k], counter) else { continue };
            let Some((r, rc)) = rec(&elems[k + 1..], counter) else { continue };
            let Some((_, m, pc)) = best_pair_kernel(&l, &r) else { continue };
            let total = lc + rc + pc;
            if best.as_ref().map(|(_, b)| total < *b).unwrap_or(true) {
                let props = infer(&m.value).unwrap_or(PropertySet::EMPTY);
                *counter += 1;
                let op = Operand::new(
                    format!("#x{counter}"),
                    m.value.rows(),
                    m.value.cols(),
                    props,
                    Origin::Intermediate,
                )
                .ok()?;
                best = Some((Expr::operand(op), total));
            }
        }
        best
    }
    let mut counter = 0;
    rec(elems, &mut counter).map(|(_, c)| c)
}
