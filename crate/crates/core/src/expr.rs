//! Immutable symbolic expressions over matrix, vector and scalar operands,
//! with a sum-of-products normal form used for equivalence testing and
//! branch merging.
//!
//! Normal form, in brief:
//! - products are distributed over sums,
//! - transposes and inverses are pushed onto operands as far as the algebra
//!   permits ((AB)^T -> B^T A^T, (AB)^-1 -> B^-1 A^-1 for square factors),
//! - scalar literals are folded into a single leading coefficient per term,
//! - identity operands are dropped from products, zero terms annihilate,
//! - adjacent inverse pairs (X X^-1) and orthogonal pairs (Q^T Q) cancel,
//! - summands are sorted under a fixed total order and like terms combine.

use std::cmp::Ordering;
use std::fmt;
use std::sync::Arc;

use num_rational::Rational64;
use num_traits::{One, Zero};
use thiserror::Error;

use crate::props::{consistent, Property, PropertySet};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ExprError {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("inverse of a non-square expression ({0}x{1})")]
    InverseNotSquare(usize, usize),
    #[error("inverse of an exactly-zero scalar")]
    SingularLiteral,
    #[error("operand {0}: inconsistent properties for shape {1}x{2}")]
    InconsistentOperand(String, usize, usize),
    #[error("empty {0} node")]
    EmptyNode(&'static str),
}

/// Where an operand came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Origin {
    Input,
    Intermediate,
    FactorizationOutput,
}

#[derive(Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
struct OperandInner {
    name: String,
    rows: usize,
    cols: usize,
    props: PropertySet,
    origin: Origin,
}

/// A named matrix, vector or scalar. Cheap to clone; equality covers the
/// name, shape, properties and origin.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Operand(Arc<OperandInner>);

impl Operand {
    pub fn new(
        name: impl Into<String>,
        rows: usize,
        cols: usize,
        props: PropertySet,
        origin: Origin,
    ) -> Result<Operand, ExprError> {
        let name = name.into();
        if rows == 0 || cols == 0 {
            return Err(ExprError::DimensionMismatch(format!(
                "operand {name} has zero dimension {rows}x{cols}"
            )));
        }
        let props = props.close(rows, cols);
        if !consistent(props, rows, cols) {
            return Err(ExprError::InconsistentOperand(name, rows, cols));
        }
        Ok(Operand(Arc::new(OperandInner { name, rows, cols, props, origin })))
    }

    pub fn name(&self) -> &str {
        &self.0.name
    }
    pub fn rows(&self) -> usize {
        self.0.rows
    }
    pub fn cols(&self) -> usize {
        self.0.cols
    }
    pub fn props(&self) -> PropertySet {
        self.0.props
    }
    pub fn origin(&self) -> Origin {
        self.0.origin
    }
    /// True exactly when the operand was produced by a factorization.
    pub fn is_factor(&self) -> bool {
        self.0.origin == Origin::FactorizationOutput
    }
    pub fn is_scalar(&self) -> bool {
        self.0.rows == 1 && self.0.cols == 1
    }
    pub fn is_vector(&self) -> bool {
        !self.is_scalar() && (self.0.rows == 1 || self.0.cols == 1)
    }
    pub fn is_square(&self) -> bool {
        self.0.rows == self.0.cols
    }

    /// Synthetic identity operand produced by cancellation.
    pub fn synthetic_identity(n: usize) -> Operand {
        Operand::new(
            format!("#id{n}"),
            n,
            n,
            PropertySet::new(&[Property::Identity]),
            Origin::Input,
        )
        .expect("identity operand is consistent")
    }

    /// Synthetic zero operand produced by annihilation.
    pub fn synthetic_zero(rows: usize, cols: usize) -> Operand {
        Operand::new(
            format!("#zero{rows}x{cols}"),
            rows,
            cols,
            PropertySet::new(&[Property::Zero]),
            Origin::Input,
        )
        .expect("zero operand is consistent")
    }
}

impl fmt::Display for Operand {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ExprKind {
    /// Rational scalar literal.
    Scalar(Rational64),
    /// Operand reference.
    Op(Operand),
    /// N-ary product; no child is itself a product.
    Times(Vec<Expr>),
    /// N-ary sum; no child is itself a sum.
    Plus(Vec<Expr>),
    Transpose(Box<Expr>),
    Inverse(Box<Expr>),
}

/// An immutable expression tree with cached dimensions.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Expr {
    kind: ExprKind,
    rows: usize,
    cols: usize,
}

impl Expr {
    pub fn kind(&self) -> &ExprKind {
        &self.kind
    }
    pub fn rows(&self) -> usize {
        self.rows
    }
    pub fn cols(&self) -> usize {
        self.cols
    }
    pub fn is_scalar_shaped(&self) -> bool {
        self.rows == 1 && self.cols == 1
    }
    pub fn is_square(&self) -> bool {
        self.rows == self.cols
    }

    pub fn scalar(r: Rational64) -> Expr {
        Expr { kind: ExprKind::Scalar(r), rows: 1, cols: 1 }
    }

    pub fn scalar_int(n: i64) -> Expr {
        Expr::scalar(Rational64::from_integer(n))
    }

    pub fn operand(o: Operand) -> Expr {
        let (rows, cols) = (o.rows(), o.cols());
        Expr { kind: ExprKind::Op(o), rows, cols }
    }

    /// N-ary sum. Flattens nested sums and checks that all children share
    /// the same shape.
    pub fn plus(children: Vec<Expr>) -> Result<Expr, ExprError> {
        let mut flat = Vec::with_capacity(children.len());
        for c in children {
            match c.kind {
                ExprKind::Plus(cs) => flat.extend(cs),
                _ => flat.push(c),
            }
        }
        match flat.len() {
            0 => Err(ExprError::EmptyNode("sum")),
            1 => Ok(flat.pop().unwrap()),
            _ => {
                let (rows, cols) = (flat[0].rows, flat[0].cols);
                for c in &flat {
                    if (c.rows, c.cols) != (rows, cols) {
                        return Err(ExprError::DimensionMismatch(format!(
                            "sum of {rows}x{cols} and {}x{}",
                            c.rows, c.cols
                        )));
                    }
                }
                Ok(Expr { kind: ExprKind::Plus(flat), rows, cols })
            }
        }
    }

    /// N-ary product. Flattens nested products and checks conformability;
    /// children of shape 1x1 are treated as scalars and are exempt.
    pub fn times(children: Vec<Expr>) -> Result<Expr, ExprError> {
        let mut flat = Vec::with_capacity(children.len());
        for c in children {
            match c.kind {
                ExprKind::Times(cs) => flat.extend(cs),
                _ => flat.push(c),
            }
        }
        if flat.is_empty() {
            return Err(ExprError::EmptyNode("product"));
        }
        if flat.len() == 1 {
            return Ok(flat.pop().unwrap());
        }
        let mats: Vec<&Expr> = flat.iter().filter(|c| !c.is_scalar_shaped()).collect();
        let (mut rows, mut cols) = (1, 1);
        if let Some(first) = mats.first() {
            rows = first.rows;
            cols = first.cols;
            for w in mats.windows(2) {
                if w[0].cols != w[1].rows {
                    return Err(ExprError::DimensionMismatch(format!(
                        "product of {}x{} and {}x{}",
                        w[0].rows, w[0].cols, w[1].rows, w[1].cols
                    )));
                }
                cols = w[1].cols;
            }
        }
        Ok(Expr { kind: ExprKind::Times(flat), rows, cols })
    }

    pub fn transposed(&self) -> Result<Expr, ExprError> {
        Ok(Expr {
            kind: ExprKind::Transpose(Box::new(self.clone())),
            rows: self.cols,
            cols: self.rows,
        })
    }

    pub fn inverted(&self) -> Result<Expr, ExprError> {
        if self.rows != self.cols {
            return Err(ExprError::InverseNotSquare(self.rows, self.cols));
        }
        Ok(Expr {
            kind: ExprKind::Inverse(Box::new(self.clone())),
            rows: self.rows,
            cols: self.cols,
        })
    }

    /// `a - b` as `a + (-1) b`; there is no distinct minus node.
    pub fn minus(a: Expr, b: Expr) -> Result<Expr, ExprError> {
        let neg = Expr::times(vec![Expr::scalar_int(-1), b])?;
        Expr::plus(vec![a, neg])
    }

    /// The operand if the expression is a bare operand reference.
    pub fn as_operand(&self) -> Option<&Operand> {
        match &self.kind {
            ExprKind::Op(o) => Some(o),
            _ => None,
        }
    }

    /// The operand under at most one transpose and one inverse wrapper,
    /// with the modifier flags: (operand, transposed, inverted).
    pub fn as_modified_operand(&self) -> Option<(&Operand, bool, bool)> {
        match &self.kind {
            ExprKind::Op(o) => Some((o, false, false)),
            ExprKind::Transpose(c) => match c.kind() {
                ExprKind::Op(o) => Some((o, true, false)),
                _ => None,
            },
            ExprKind::Inverse(c) => match c.kind() {
                ExprKind::Op(o) => Some((o, false, true)),
                ExprKind::Transpose(cc) => match cc.kind() {
                    ExprKind::Op(o) => Some((o, true, true)),
                    _ => None,
                },
                _ => None,
            },
            _ => None,
        }
    }

    /// All distinct operands referenced by the expression, in first-seen order.
    pub fn operands(&self) -> Vec<Operand> {
        let mut out = Vec::new();
        self.visit_operands(&mut |o| {
            if !out.contains(o) {
                out.push(o.clone());
            }
        });
        out
    }

    pub fn visit_operands(&self, f: &mut impl FnMut(&Operand)) {
        match &self.kind {
            ExprKind::Op(o) => f(o),
            ExprKind::Scalar(_) => {}
            ExprKind::Times(cs) | ExprKind::Plus(cs) => {
                for c in cs {
                    c.visit_operands(f);
                }
            }
            ExprKind::Transpose(c) | ExprKind::Inverse(c) => c.visit_operands(f),
        }
    }

    /// Number of tree nodes; a well-founded size measure.
    pub fn size(&self) -> usize {
        match &self.kind {
            ExprKind::Op(_) | ExprKind::Scalar(_) => 1,
            ExprKind::Times(cs) | ExprKind::Plus(cs) => {
                1 + cs.iter().map(Expr::size).sum::<usize>()
            }
            ExprKind::Transpose(c) | ExprKind::Inverse(c) => 1 + c.size(),
        }
    }

    /// Replaces every occurrence of `from` (an operand leaf) by `to`.
    pub fn substitute(&self, from: &Operand, to: &Expr) -> Result<Expr, ExprError> {
        match &self.kind {
            ExprKind::Op(o) if o == from => Ok(to.clone()),
            ExprKind::Op(_) | ExprKind::Scalar(_) => Ok(self.clone()),
            ExprKind::Times(cs) => Expr::times(
                cs.iter().map(|c| c.substitute(from, to)).collect::<Result<_, _>>()?,
            ),
            ExprKind::Plus(cs) => Expr::plus(
                cs.iter().map(|c| c.substitute(from, to)).collect::<Result<_, _>>()?,
            ),
            ExprKind::Transpose(c) => c.substitute(from, to)?.transposed(),
            ExprKind::Inverse(c) => c.substitute(from, to)?.inverted(),
        }
    }

    /// Rewrites the expression into its normal form.
    pub fn normalized(&self) -> Result<Expr, ExprError> {
        normalize(self)
    }

    /// A deterministic, totally ordered key. Structural: two expressions
    /// compare equal exactly when their trees are identical.
    pub fn order_key(&self) -> &Expr {
        self
    }
}

impl fmt::Display for Expr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match &self.kind {
            ExprKind::Scalar(r) => {
                if r.is_integer() {
                    write!(f, "{}", r.numer())
                } else {
                    write!(f, "{}/{}", r.numer(), r.denom())
                }
            }
            ExprKind::Op(o) => write!(f, "{}", o.name()),
            ExprKind::Times(cs) => {
                for (i, c) in cs.iter().enumerate() {
                    if i > 0 {
                        write!(f, " ")?;
                    }
                    match c.kind() {
                        ExprKind::Plus(_) => write!(f, "({c})")?,
                        _ => write!(f, "{c}")?,
                    }
                }
                Ok(())
            }
            ExprKind::Plus(cs) => {
                for (i, c) in cs.iter().enumerate() {
                    if i > 0 {
                        write!(f, " + ")?;
                    }
                    write!(f, "{c}")?;
                }
                Ok(())
            }
            ExprKind::Transpose(c) => match c.kind() {
                ExprKind::Op(_) | ExprKind::Scalar(_) => write!(f, "{c}^T"),
                _ => write!(f, "({c})^T"),
            },
            ExprKind::Inverse(c) => match c.kind() {
                ExprKind::Op(_) | ExprKind::Scalar(_) | ExprKind::Transpose(_) => {
                    write!(f, "{c}^-1")
                }
                _ => write!(f, "({c})^-1"),
            },
        }
    }
}

/// True iff the two expressions have identical normal forms. Sound for
/// algebraic equality but not complete: distinct normal forms may still be
/// equal in rare cases, which only costs merging opportunities.
pub fn equivalent(a: &Expr, b: &Expr) -> Result<bool, ExprError> {
    Ok(normalize(a)? == normalize(b)?)
}

/// Computes the sum-of-products normal form.
pub fn normalize(e: &Expr) -> Result<Expr, ExprError> {
    let nf = nf(e)?;
    debug_assert!(flattening_holds(&nf));
    Ok(nf)
}

fn nf(e: &Expr) -> Result<Expr, ExprError> {
    match &e.kind {
        ExprKind::Scalar(_) | ExprKind::Op(_) => Ok(e.clone()),
        ExprKind::Transpose(c) => {
            let c = nf(c)?;
            push_transpose(&c)
        }
        ExprKind::Inverse(c) => {
            let c = nf(c)?;
            push_inverse(&c)
        }
        ExprKind::Times(cs) => {
            let cs = cs.iter().map(nf).collect::<Result<Vec<_>, _>>()?;
            product_nf(cs, e.rows, e.cols)
        }
        ExprKind::Plus(cs) => {
            let cs = cs.iter().map(nf).collect::<Result<Vec<_>, _>>()?;
            sum_nf(cs, e.rows, e.cols)
        }
    }
}

/// Transpose of an expression already in normal form.
fn push_transpose(e: &Expr) -> Result<Expr, ExprError> {
    match &e.kind {
        ExprKind::Scalar(_) => Ok(e.clone()),
        ExprKind::Op(o) => {
            if o.is_scalar() || o.props().has(Property::Symmetric) {
                Ok(e.clone())
            } else {
                e.transposed()
            }
        }
        ExprKind::Transpose(c) => Ok((**c).clone()),
        ExprKind::Inverse(c) => {
            // (X^-1)^T = (X^T)^-1, with the transpose pushed inside.
            let ct = push_transpose(c)?;
            push_inverse(&ct)
        }
        ExprKind::Times(cs) => {
            let rev = cs
                .iter()
                .rev()
                .map(push_transpose)
                .collect::<Result<Vec<_>, _>>()?;
            product_nf(rev, e.cols, e.rows)
        }
        ExprKind::Plus(cs) => {
            let ts = cs.iter().map(push_transpose).collect::<Result<Vec<_>, _>>()?;
            sum_nf(ts, e.cols, e.rows)
        }
    }
}

/// Inverse of an expression already in normal form.
fn push_inverse(e: &Expr) -> Result<Expr, ExprError> {
    if e.rows != e.cols {
        return Err(ExprError::InverseNotSquare(e.rows, e.cols));
    }
    match &e.kind {
        ExprKind::Scalar(r) => {
            if r.is_zero() {
                Err(ExprError::SingularLiteral)
            } else {
                Ok(Expr::scalar(r.recip()))
            }
        }
        ExprKind::Op(o) => {
            if o.props().has(Property::Identity) {
                Ok(e.clone())
            } else if o.props().has(Property::Orthogonal) {
                // Q^-1 = Q^T for square orthogonal operands.
                push_transpose(e)
            } else {
                e.inverted()
            }
        }
        ExprKind::Inverse(c) => Ok((**c).clone()),
        ExprKind::Transpose(c) => {
            if let ExprKind::Op(o) = c.kind() {
                if o.props().has(Property::Orthogonal) {
                    return Ok((**c).clone());
                }
            }
            e.inverted()
        }
        ExprKind::Times(cs) => {
            // Push down only when every matrix factor is square; scalar
            // factors become reciprocals.
            let all_square = cs
                .iter()
                .filter(|c| !c.is_scalar_shaped())
                .all(|c| c.rows == c.cols);
            if all_square {
                let rev = cs
                    .iter()
                    .rev()
                    .map(push_inverse)
                    .collect::<Result<Vec<_>, _>>()?;
                product_nf(rev, e.rows, e.cols)
            } else {
                e.inverted()
            }
        }
        ExprKind::Plus(_) => e.inverted(),
    }
}

/// Does an adjacent pair of normal-form product children cancel to identity?
fn cancels(a: &Expr, b: &Expr) -> bool {
    if a.cols != b.rows || a.rows != b.cols {
        return false;
    }
    // a b = I when b = a^-1 (covers both orders since inversion is involutive).
    if a.is_square() {
        if let Ok(ainv) = push_inverse(a) {
            if ainv == *b {
                return true;
            }
        }
    }
    // a b = I when b = a^T and a has orthogonal rows.
    if let Ok(at) = push_transpose(a) {
        if at == *b {
            if let Some((o, trans, inv)) = a.as_modified_operand() {
                if !inv {
                    let p = o.props();
                    let rows_orth = if trans {
                        p.has(Property::OrthogonalColumns)
                    } else {
                        p.has(Property::OrthogonalRows)
                    };
                    if rows_orth {
                        return true;
                    }
                }
            }
        }
    }
    false
}

/// Normal form of a product from normalized children. Distributes over
/// sums, folds scalars into a leading coefficient, drops identities,
/// cancels adjacent inverse/orthogonal pairs, annihilates on zero.
fn product_nf(children: Vec<Expr>, rows: usize, cols: usize) -> Result<Expr, ExprError> {
    // Flatten nested products produced by recursive rewrites.
    let mut flat: Vec<Expr> = Vec::with_capacity(children.len());
    for c in children {
        match c.kind {
            ExprKind::Times(cs) => flat.extend(cs),
            _ => flat.push(c),
        }
    }
    // Distribute over the first sum child, if any.
    if let Some(pos) = flat.iter().position(|c| matches!(c.kind, ExprKind::Plus(_))) {
        let ExprKind::Plus(summands) = flat[pos].kind.clone() else { unreachable!() };
        let mut terms = Vec::with_capacity(summands.len());
        for s in summands {
            let mut t = flat[..pos].to_vec();
            t.push(s);
            t.extend_from_slice(&flat[pos + 1..]);
            terms.push(product_nf(t, rows, cols)?);
        }
        return sum_nf(terms, rows, cols);
    }

    let mut coeff = Rational64::one();
    let mut scalars: Vec<Expr> = Vec::new();
    let mut mats: Vec<Expr> = Vec::new();
    for c in flat {
        match &c.kind {
            ExprKind::Scalar(r) => coeff *= r,
            _ if c.is_scalar_shaped() && c.as_modified_operand().is_some() => scalars.push(c),
            _ => mats.push(c),
        }
    }
    scalars.sort();

    // Zero annihilation.
    let zero_mat = mats.iter().any(|m| {
        m.as_operand().is_some_and(|o| o.props().has(Property::Zero))
    });
    if coeff.is_zero() || zero_mat {
        return Ok(zero_expr(rows, cols));
    }

    // Drop identity operands when other matrix factors remain.
    loop {
        let n_mats = mats.len();
        if n_mats <= 1 {
            break;
        }
        let Some(pos) = mats.iter().position(|m| {
            m.as_operand().is_some_and(|o| o.props().has(Property::Identity))
        }) else {
            break;
        };
        mats.remove(pos);
        if mats.len() == n_mats {
            break;
        }
    }

    // Cancel adjacent inverse and orthogonal pairs.
    let mut i = 0;
    while mats.len() >= 2 && i + 1 < mats.len() {
        if cancels(&mats[i], &mats[i + 1]) {
            mats.drain(i..=i + 1);
            i = i.saturating_sub(1);
        } else {
            i += 1;
        }
    }

    // Reassemble.
    let mut out: Vec<Expr> = Vec::new();
    if !coeff.is_one() {
        out.push(Expr::scalar(coeff));
    }
    out.extend(scalars);
    if mats.is_empty() && rows > 1 {
        // Everything cancelled; the matrix part is an identity.
        out.push(Expr::operand(Operand::synthetic_identity(rows)));
    } else {
        out.extend(mats);
    }
    match out.len() {
        0 => Ok(Expr::scalar(Rational64::one())),
        1 => Ok(out.pop().unwrap()),
        _ => Expr::times(out),
    }
}

/// Normal form of a sum from normalized children: combine like terms,
/// drop zeros, sort.
fn sum_nf(children: Vec<Expr>, rows: usize, cols: usize) -> Result<Expr, ExprError> {
    let mut flat: Vec<Expr> = Vec::with_capacity(children.len());
    for c in children {
        match c.kind {
            ExprKind::Plus(cs) => flat.extend(cs),
            _ => flat.push(c),
        }
    }
    // term -> accumulated coefficient, in first-seen order
    let mut keys: Vec<Vec<Expr>> = Vec::new();
    let mut coeffs: Vec<Rational64> = Vec::new();
    for c in flat {
        let (coeff, rest) = split_coefficient(c);
        if is_zero_term(&rest) {
            continue;
        }
        match keys.iter().position(|k| *k == rest) {
            Some(i) => coeffs[i] += coeff,
            None => {
                keys.push(rest);
                coeffs.push(coeff);
            }
        }
    }
    let mut terms: Vec<Expr> = Vec::new();
    for (rest, coeff) in keys.into_iter().zip(coeffs) {
        if coeff.is_zero() {
            continue;
        }
        let mut parts = Vec::with_capacity(rest.len() + 1);
        if !coeff.is_one() {
            parts.push(Expr::scalar(coeff));
        }
        parts.extend(rest);
        let term = match parts.len() {
            0 => Expr::scalar(Rational64::one()),
            1 => parts.pop().unwrap(),
            _ => Expr::times(parts)?,
        };
        terms.push(term);
    }
    terms.sort();
    match terms.len() {
        0 => Ok(zero_expr(rows, cols)),
        1 => Ok(terms.pop().unwrap()),
        _ => Expr::plus(terms),
    }
}

/// Splits a normal-form term into (scalar coefficient, remaining factors).
fn split_coefficient(e: Expr) -> (Rational64, Vec<Expr>) {
    match e.kind {
        ExprKind::Scalar(r) => (r, vec![]),
        ExprKind::Times(cs) => {
            let mut coeff = Rational64::one();
            let mut rest = Vec::with_capacity(cs.len());
            for c in cs {
                if let ExprKind::Scalar(r) = &c.kind {
                    coeff *= r;
                } else {
                    rest.push(c);
                }
            }
            (coeff, rest)
        }
        _ => (Rational64::one(), vec![e]),
    }
}

fn is_zero_term(rest: &[Expr]) -> bool {
    rest.len() == 1
        && rest[0]
            .as_operand()
            .is_some_and(|o| o.props().has(Property::Zero))
}

fn zero_expr(rows: usize, cols: usize) -> Expr {
    if rows == 1 && cols == 1 {
        Expr::scalar(Rational64::zero())
    } else {
        Expr::operand(Operand::synthetic_zero(rows, cols))
    }
}

/// Flattening invariant: no sum child of a sum, no product child of a product.
pub fn flattening_holds(e: &Expr) -> bool {
    match &e.kind {
        ExprKind::Op(_) | ExprKind::Scalar(_) => true,
        ExprKind::Times(cs) => {
            cs.iter().all(|c| !matches!(c.kind, ExprKind::Times(_)) && flattening_holds(c))
        }
        ExprKind::Plus(cs) => {
            cs.iter().all(|c| !matches!(c.kind, ExprKind::Plus(_)) && flattening_holds(c))
        }
        ExprKind::Transpose(c) | ExprKind::Inverse(c) => flattening_holds(c),
    }
}

/// A total order over expressions induced by the derived structural order;
/// exposed for callers that need an explicit comparator.
pub fn order_cmp(a: &Expr, b: &Expr) -> Ordering {
    a.cmp(b)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::props::Property::*;

    fn op(name: &str, r: usize, c: usize, props: &[Property]) -> Expr {
        Expr::operand(Operand::new(name, r, c, PropertySet::new(props), Origin::Input).unwrap())
    }

    fn sq(name: &str) -> Expr {
        op(name, 7, 7, &[FullRank])
    }

    #[test]
    fn inverse_of_product_pushes_down() {
        let (a, b) = (sq("A"), sq("B"));
        let ab = Expr::times(vec![a.clone(), b.clone()]).unwrap();
        let inv = ab.inverted().unwrap();
        let nf = normalize(&inv).unwrap();
        let expected = Expr::times(vec![
            b.inverted().unwrap(),
            a.inverted().unwrap(),
        ])
        .unwrap();
        assert_eq!(nf, expected);
    }

    #[test]
    fn transpose_of_sum_distributes() {
        let a = op("A", 3, 5, &[]);
        let b = op("B", 3, 5, &[]);
        let sum = Expr::plus(vec![a.clone(), b.clone()]).unwrap();
        let nf = normalize(&sum.transposed().unwrap()).unwrap();
        let expected = Expr::plus(vec![
            a.transposed().unwrap(),
            b.transposed().unwrap(),
        ])
        .unwrap();
        assert_eq!(nf, expected);
    }

    #[test]
    fn distributes_product_over_sum() {
        let a = op("A", 4, 4, &[]);
        let b = op("B", 4, 4, &[]);
        let c = op("C", 4, 4, &[]);
        let e = Expr::times(vec![a.clone(), Expr::plus(vec![b.clone(), c.clone()]).unwrap()])
            .unwrap();
        let nf = normalize(&e).unwrap();
        let expected = Expr::plus(vec![
            Expr::times(vec![a.clone(), b]).unwrap(),
            Expr::times(vec![a, c]).unwrap(),
        ])
        .unwrap();
        assert_eq!(nf, expected);
    }

    #[test]
    fn equivalent_detects_distributivity() {
        let a = op("A", 4, 4, &[]);
        let b = op("B", 4, 4, &[]);
        let c = op("C", 4, 4, &[]);
        let lhs = Expr::plus(vec![
            Expr::times(vec![a.clone(), b.clone()]).unwrap(),
            Expr::times(vec![a.clone(), c.clone()]).unwrap(),
        ])
        .unwrap();
        let rhs = Expr::times(vec![a, Expr::plus(vec![b, c]).unwrap()]).unwrap();
        assert!(equivalent(&lhs, &rhs).unwrap());
    }

    #[test]
    fn products_do_not_commute() {
        let a = sq("A");
        let b = sq("B");
        let ab = Expr::times(vec![a.clone(), b.clone()]).unwrap();
        let ba = Expr::times(vec![b, a]).unwrap();
        assert!(!equivalent(&ab, &ba).unwrap());
    }

    #[test]
    fn inverse_equivalence() {
        let (a, b) = (sq("A"), sq("B"));
        let lhs = Expr::times(vec![b.inverted().unwrap(), a.inverted().unwrap()]).unwrap();
        let rhs = Expr::times(vec![a, b]).unwrap().inverted().unwrap();
        assert!(equivalent(&lhs, &rhs).unwrap());
    }

    #[test]
    fn sum_terms_sort_under_order_key() {
        let a = op("A", 3, 3, &[]);
        let b = op("B", 3, 3, &[]);
        let c = op("C", 3, 3, &[]);
        let e = Expr::plus(vec![c.clone(), a.clone(), b.clone()]).unwrap();
        let nf = normalize(&e).unwrap();
        assert_eq!(nf, Expr::plus(vec![a, b, c]).unwrap());
    }

    #[test]
    fn order_key_on_operand_names() {
        let a = op("A", 3, 3, &[]);
        let b = op("B", 3, 3, &[]);
        assert!(a.order_key() < b.order_key());
        assert_eq!(a.order_key(), op("A", 3, 3, &[]).order_key());
    }

    #[test]
    fn double_transpose_and_double_inverse_collapse() {
        let a = sq("A");
        let tt = a.transposed().unwrap().transposed().unwrap();
        assert_eq!(normalize(&tt).unwrap(), a);
        let ii = a.inverted().unwrap().inverted().unwrap();
        assert_eq!(normalize(&ii).unwrap(), a);
    }

    #[test]
    fn identity_is_dropped_in_products() {
        let a = op("A", 4, 4, &[]);
        let id = op("I", 4, 4, &[Identity]);
        let e = Expr::times(vec![id, a.clone()]).unwrap();
        assert_eq!(normalize(&e).unwrap(), a);
    }

    #[test]
    fn like_terms_combine() {
        let a = op("A", 4, 4, &[]);
        let b = op("B", 4, 4, &[]);
        let ab = Expr::times(vec![a, b]).unwrap();
        let two = Expr::times(vec![Expr::scalar_int(2), ab.clone()]).unwrap();
        let three = Expr::times(vec![Expr::scalar_int(3), ab.clone()]).unwrap();
        let sum = Expr::plus(vec![two, three]).unwrap();
        let nf = normalize(&sum).unwrap();
        let expected = Expr::times(vec![Expr::scalar_int(5), ab]).unwrap();
        assert_eq!(nf, expected);
    }

    #[test]
    fn cancellation_to_zero() {
        let a = op("A", 4, 4, &[]);
        let diff = Expr::minus(a.clone(), a).unwrap();
        let nf = normalize(&diff).unwrap();
        assert!(nf.as_operand().unwrap().props().has(Zero));
    }

    #[test]
    fn inverse_cancels_neighbor() {
        let a = sq("A");
        let b = op("B", 7, 3, &[]);
        let e = Expr::times(vec![a.inverted().unwrap(), a.clone(), b.clone()]).unwrap();
        assert_eq!(normalize(&e).unwrap(), b);
    }

    #[test]
    fn orthogonal_columns_cancel() {
        let q = op("Q", 9, 4, &[OrthogonalColumns]);
        let r = op("R", 4, 4, &[UpperTriangular, NonSingular]);
        // (Q R)^T (Q R) -> R^T R
        let qr = Expr::times(vec![q, r.clone()]).unwrap();
        let gram = Expr::times(vec![qr.transposed().unwrap(), qr]).unwrap();
        let nf = normalize(&gram).unwrap();
        let expected =
            Expr::times(vec![r.transposed().unwrap(), r]).unwrap();
        assert_eq!(nf, expected);
    }

    #[test]
    fn qr_normal_equations_collapse() {
        // (R^T R)^-1 R^T Q^T y -> R^-1 Q^T y
        let q = op("Q", 9, 4, &[OrthogonalColumns]);
        let r = op("R", 4, 4, &[UpperTriangular, NonSingular]);
        let y = op("y", 9, 1, &[]);
        let rtr = Expr::times(vec![r.transposed().unwrap(), r.clone()]).unwrap();
        let e = Expr::times(vec![
            rtr.inverted().unwrap(),
            r.transposed().unwrap(),
            q.transposed().unwrap(),
            y.clone(),
        ])
        .unwrap();
        let nf = normalize(&e).unwrap();
        let expected = Expr::times(vec![
            r.inverted().unwrap(),
            q.transposed().unwrap(),
            y,
        ])
        .unwrap();
        assert_eq!(nf, expected);
    }

    #[test]
    fn symmetric_transpose_collapses() {
        let s = op("S", 5, 5, &[Symmetric]);
        let t = s.transposed().unwrap();
        assert_eq!(normalize(&t).unwrap(), s);
    }

    #[test]
    fn normalize_idempotent_on_samples() {
        let a = op("A", 4, 6, &[]);
        let b = op("B", 6, 4, &[]);
        let c = op("C", 4, 4, &[Spd]);
        let samples = vec![
            Expr::times(vec![a.clone(), b.clone(), c.clone()]).unwrap(),
            Expr::plus(vec![
                Expr::times(vec![a.clone(), b.clone()]).unwrap(),
                c.clone(),
            ])
            .unwrap()
            .inverted()
            .unwrap(),
            Expr::times(vec![a.clone(), b.clone()])
                .unwrap()
                .transposed()
                .unwrap(),
            Expr::minus(
                c.clone(),
                Expr::times(vec![a.clone(), b.clone()]).unwrap(),
            )
            .unwrap(),
        ];
        for e in samples {
            let n1 = normalize(&e).unwrap();
            let n2 = normalize(&n1).unwrap();
            assert_eq!(n1, n2, "normalize not idempotent on {e}");
            assert!(flattening_holds(&n1));
        }
    }

    #[test]
    fn dimension_mismatch_is_reported() {
        let a = op("A", 3, 4, &[]);
        let b = op("B", 5, 6, &[]);
        assert!(matches!(
            Expr::times(vec![a.clone(), b.clone()]),
            Err(ExprError::DimensionMismatch(_))
        ));
        assert!(matches!(
            Expr::plus(vec![a, b]),
            Err(ExprError::DimensionMismatch(_))
        ));
    }
}
