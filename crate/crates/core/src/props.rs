//! Matrix properties: representation, consistency checking, and bottom-up
//! inference over expressions.
//!
//! A [`PropertySet`] is a small bitset closed under implication (e.g. SPD
//! implies symmetric, positive semi-definite and non-singular). Inference
//! walks an expression bottom-up and applies a fixed rule table plus a few
//! structural rules (Gram products, syntactic symmetry).

use std::fmt;

use thiserror::Error;

use crate::expr::{Expr, ExprKind};

/// The supported operand annotations.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
#[repr(u8)]
pub enum Property {
    Diagonal = 0,
    LowerTriangular,
    UpperTriangular,
    Symmetric,
    /// Symmetric positive semi-definite.
    Spsd,
    /// Symmetric positive definite.
    Spd,
    Orthogonal,
    OrthogonalRows,
    OrthogonalColumns,
    Permutation,
    /// Unit diagonal, for triangular matrices.
    UnitDiagonal,
    /// Positive, for scalars.
    Positive,
    FullRank,
    NonSingular,
    Zero,
    Identity,
}

pub const ALL_PROPERTIES: [Property; 16] = [
    Property::Diagonal,
    Property::LowerTriangular,
    Property::UpperTriangular,
    Property::Symmetric,
    Property::Spsd,
    Property::Spd,
    Property::Orthogonal,
    Property::OrthogonalRows,
    Property::OrthogonalColumns,
    Property::Permutation,
    Property::UnitDiagonal,
    Property::Positive,
    Property::FullRank,
    Property::NonSingular,
    Property::Zero,
    Property::Identity,
];

impl Property {
    fn bit(self) -> u32 {
        1 << (self as u8)
    }

    pub fn name(self) -> &'static str {
        match self {
            Property::Diagonal => "Diagonal",
            Property::LowerTriangular => "LowerTriangular",
            Property::UpperTriangular => "UpperTriangular",
            Property::Symmetric => "Symmetric",
            Property::Spsd => "SPSD",
            Property::Spd => "SPD",
            Property::Orthogonal => "Orthogonal",
            Property::OrthogonalRows => "OrthogonalRows",
            Property::OrthogonalColumns => "OrthogonalColumns",
            Property::Permutation => "Permutation",
            Property::UnitDiagonal => "UnitDiagonal",
            Property::Positive => "Positive",
            Property::FullRank => "FullRank",
            Property::NonSingular => "NonSingular",
            Property::Zero => "Zero",
            Property::Identity => "Identity",
        }
    }

    /// Parses the canonical DSL spelling.
    pub fn from_name(s: &str) -> Option<Property> {
        ALL_PROPERTIES.iter().copied().find(|p| p.name() == s)
    }
}

impl fmt::Display for Property {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum PropsError {
    #[error("contradictory properties: {0} and {1}")]
    Contradiction(Property, Property),
    #[error("property {0} requires a square operand ({1}x{2})")]
    RequiresSquare(Property, usize, usize),
    #[error("property {0} is invalid for shape {1}x{2}")]
    BadShape(Property, usize, usize),
}

/// A set of matrix properties, kept closed under implication.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default)]
pub struct PropertySet(u32);

impl PropertySet {
    pub const EMPTY: PropertySet = PropertySet(0);

    pub fn new(props: &[Property]) -> PropertySet {
        let mut s = PropertySet(0);
        for &p in props {
            s.0 |= p.bit();
        }
        s
    }

    pub fn has(&self, p: Property) -> bool {
        self.0 & p.bit() != 0
    }

    pub fn insert(&mut self, p: Property) {
        self.0 |= p.bit();
    }

    pub fn remove(&mut self, p: Property) {
        self.0 &= !p.bit();
    }

    pub fn union(&self, other: PropertySet) -> PropertySet {
        PropertySet(self.0 | other.0)
    }

    pub fn is_subset(&self, other: PropertySet) -> bool {
        self.0 & !other.0 == 0
    }

    pub fn iter(&self) -> impl Iterator<Item = Property> + '_ {
        ALL_PROPERTIES.iter().copied().filter(move |p| self.has(*p))
    }

    pub fn is_empty(&self) -> bool {
        self.0 == 0
    }

    pub fn triangular(&self) -> bool {
        self.has(Property::LowerTriangular) || self.has(Property::UpperTriangular)
    }

    /// True when the set implies the operand is invertible.
    pub fn non_singular(&self) -> bool {
        self.has(Property::NonSingular)
    }

    /// Closes the set under implication for an operand of the given shape.
    /// The result may still be inconsistent; use [`PropertySet::check`].
    pub fn close(&self, rows: usize, cols: usize) -> PropertySet {
        let mut s = *self;
        let square = rows == cols;
        let scalar = rows == 1 && cols == 1;
        loop {
            let before = s.0;
            if s.has(Property::Identity) {
                s.insert(Property::Diagonal);
                s.insert(Property::Spd);
                s.insert(Property::Orthogonal);
                s.insert(Property::Permutation);
                s.insert(Property::UnitDiagonal);
            }
            if s.has(Property::Permutation) {
                s.insert(Property::Orthogonal);
            }
            if s.has(Property::Orthogonal) {
                s.insert(Property::OrthogonalRows);
                s.insert(Property::OrthogonalColumns);
                s.insert(Property::FullRank);
                s.insert(Property::NonSingular);
            }
            if square && s.has(Property::OrthogonalRows) && s.has(Property::OrthogonalColumns) {
                s.insert(Property::Orthogonal);
            }
            if s.has(Property::OrthogonalRows) || s.has(Property::OrthogonalColumns) {
                s.insert(Property::FullRank);
            }
            if s.has(Property::Spd) {
                s.insert(Property::Spsd);
                s.insert(Property::NonSingular);
            }
            if s.has(Property::Spsd) {
                s.insert(Property::Symmetric);
            }
            // A non-singular positive semi-definite matrix is positive definite.
            if s.has(Property::Spsd) && s.has(Property::NonSingular) {
                s.insert(Property::Spd);
            }
            if s.has(Property::Diagonal) {
                s.insert(Property::LowerTriangular);
                s.insert(Property::UpperTriangular);
            }
            if square && s.has(Property::Diagonal) {
                s.insert(Property::Symmetric);
            }
            if s.has(Property::LowerTriangular) && s.has(Property::UpperTriangular) {
                s.insert(Property::Diagonal);
            }
            if square && s.triangular() && s.has(Property::UnitDiagonal) {
                s.insert(Property::NonSingular);
            }
            if s.has(Property::NonSingular) {
                s.insert(Property::FullRank);
            }
            if square && s.has(Property::FullRank) {
                s.insert(Property::NonSingular);
            }
            if scalar && s.has(Property::Positive) {
                s.insert(Property::Spd);
                s.insert(Property::FullRank);
            }
            if s.has(Property::Zero) {
                s.insert(Property::Diagonal);
                if square {
                    s.insert(Property::Spsd);
                }
            }
            if s.0 == before {
                return s;
            }
        }
    }

    /// Checks shape requirements and contradictory pairs.
    pub fn check(&self, rows: usize, cols: usize) -> Result<(), PropsError> {
        let square = rows == cols;
        let scalar = rows == 1 && cols == 1;
        let square_only = [
            Property::Symmetric,
            Property::Spsd,
            Property::Spd,
            Property::Identity,
            Property::Permutation,
            Property::Orthogonal,
            Property::NonSingular,
        ];
        for p in square_only {
            if self.has(p) && !square {
                return Err(PropsError::RequiresSquare(p, rows, cols));
            }
        }
        if self.has(Property::OrthogonalRows) && rows > cols {
            return Err(PropsError::BadShape(Property::OrthogonalRows, rows, cols));
        }
        if self.has(Property::OrthogonalColumns) && cols > rows {
            return Err(PropsError::BadShape(Property::OrthogonalColumns, rows, cols));
        }
        if self.has(Property::Positive) && !scalar {
            return Err(PropsError::BadShape(Property::Positive, rows, cols));
        }
        if self.has(Property::Zero) {
            for p in [
                Property::Identity,
                Property::Spd,
                Property::Positive,
                Property::FullRank,
                Property::NonSingular,
                Property::Orthogonal,
                Property::OrthogonalRows,
                Property::OrthogonalColumns,
                Property::Permutation,
                Property::UnitDiagonal,
            ] {
                if self.has(p) {
                    return Err(PropsError::Contradiction(Property::Zero, p));
                }
            }
        }
        Ok(())
    }
}

impl fmt::Display for PropertySet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mut first = true;
        for p in self.iter() {
            if !first {
                write!(f, ", ")?;
            }
            write!(f, "{p}")?;
            first = false;
        }
        Ok(())
    }
}

/// True iff the set has no contradictory pair and all shape-dependent
/// properties fit the given shape.
pub fn consistent(p: PropertySet, rows: usize, cols: usize) -> bool {
    p.close(rows, cols).check(rows, cols).is_ok()
}

/// One entry of the unary rule table: `given` on the child implies
/// `concludes` on the parent node.
#[derive(Debug, Clone, Copy)]
pub struct UnaryRule {
    pub given: Property,
    pub concludes: Property,
}

/// One entry of the binary rule table for products and sums: `left` and
/// `right` on two adjacent children imply `concludes` on their combination.
#[derive(Debug, Clone, Copy)]
pub struct BinaryRule {
    pub left: Property,
    pub right: Property,
    pub concludes: Property,
}

use Property::*;

/// Transpose rules: property of A implies property of A^T.
pub const TRANSPOSE_RULES: &[UnaryRule] = &[
    UnaryRule { given: LowerTriangular, concludes: UpperTriangular },
    UnaryRule { given: UpperTriangular, concludes: LowerTriangular },
    UnaryRule { given: Diagonal, concludes: Diagonal },
    UnaryRule { given: Symmetric, concludes: Symmetric },
    UnaryRule { given: Spsd, concludes: Spsd },
    UnaryRule { given: Spd, concludes: Spd },
    UnaryRule { given: Orthogonal, concludes: Orthogonal },
    UnaryRule { given: OrthogonalRows, concludes: OrthogonalColumns },
    UnaryRule { given: OrthogonalColumns, concludes: OrthogonalRows },
    UnaryRule { given: Permutation, concludes: Permutation },
    UnaryRule { given: UnitDiagonal, concludes: UnitDiagonal },
    UnaryRule { given: Positive, concludes: Positive },
    UnaryRule { given: FullRank, concludes: FullRank },
    UnaryRule { given: NonSingular, concludes: NonSingular },
    UnaryRule { given: Zero, concludes: Zero },
    UnaryRule { given: Identity, concludes: Identity },
];

/// Inverse rules: property of A implies property of A^-1.
pub const INVERSE_RULES: &[UnaryRule] = &[
    UnaryRule { given: LowerTriangular, concludes: LowerTriangular },
    UnaryRule { given: UpperTriangular, concludes: UpperTriangular },
    UnaryRule { given: Diagonal, concludes: Diagonal },
    UnaryRule { given: Symmetric, concludes: Symmetric },
    UnaryRule { given: Spd, concludes: Spd },
    UnaryRule { given: Orthogonal, concludes: Orthogonal },
    UnaryRule { given: Permutation, concludes: Permutation },
    UnaryRule { given: UnitDiagonal, concludes: UnitDiagonal },
    UnaryRule { given: Positive, concludes: Positive },
    UnaryRule { given: NonSingular, concludes: NonSingular },
    UnaryRule { given: FullRank, concludes: FullRank },
    UnaryRule { given: Identity, concludes: Identity },
];

/// Product rules, applied to adjacent factors of a product.
pub const PRODUCT_RULES: &[BinaryRule] = &[
    BinaryRule { left: Diagonal, right: Diagonal, concludes: Diagonal },
    BinaryRule { left: LowerTriangular, right: LowerTriangular, concludes: LowerTriangular },
    BinaryRule { left: UpperTriangular, right: UpperTriangular, concludes: UpperTriangular },
    BinaryRule { left: Permutation, right: Permutation, concludes: Permutation },
    BinaryRule { left: Orthogonal, right: Orthogonal, concludes: Orthogonal },
    BinaryRule { left: NonSingular, right: NonSingular, concludes: NonSingular },
    BinaryRule { left: Positive, right: Positive, concludes: Positive },
    BinaryRule { left: Zero, right: Zero, concludes: Zero },
];

/// Sum rules, applied to pairs of summands.
pub const SUM_RULES: &[BinaryRule] = &[
    BinaryRule { left: Diagonal, right: Diagonal, concludes: Diagonal },
    BinaryRule { left: LowerTriangular, right: LowerTriangular, concludes: LowerTriangular },
    BinaryRule { left: UpperTriangular, right: UpperTriangular, concludes: UpperTriangular },
    BinaryRule { left: Symmetric, right: Symmetric, concludes: Symmetric },
    BinaryRule { left: Spsd, right: Spsd, concludes: Spsd },
    BinaryRule { left: Spd, right: Spd, concludes: Spd },
    BinaryRule { left: Spd, right: Spsd, concludes: Spd },
    BinaryRule { left: Spsd, right: Spd, concludes: Spd },
    BinaryRule { left: Positive, right: Positive, concludes: Positive },
    BinaryRule { left: Zero, right: Zero, concludes: Zero },
];

fn apply_unary(rules: &[UnaryRule], given: PropertySet) -> PropertySet {
    let mut out = PropertySet::EMPTY;
    for r in rules {
        if given.has(r.given) {
            out.insert(r.concludes);
        }
    }
    out
}

fn apply_binary(rules: &[BinaryRule], left: PropertySet, right: PropertySet) -> PropertySet {
    let mut out = PropertySet::EMPTY;
    for r in rules {
        if left.has(r.left) && right.has(r.right) {
            out.insert(r.concludes);
        }
    }
    out
}

/// Property set of a scalar-by-matrix scaling.
fn scale_props(scalar: PropertySet, mat: PropertySet) -> PropertySet {
    let mut out = PropertySet::EMPTY;
    let keep_always = [
        Diagonal,
        LowerTriangular,
        UpperTriangular,
        Symmetric,
        Zero,
    ];
    for p in keep_always {
        if mat.has(p) {
            out.insert(p);
        }
    }
    let nonzero = scalar.has(Positive) || scalar.has(NonSingular);
    if nonzero {
        if mat.has(NonSingular) {
            out.insert(NonSingular);
        }
        if mat.has(FullRank) {
            out.insert(FullRank);
        }
    }
    if scalar.has(Positive) {
        if mat.has(Spd) {
            out.insert(Spd);
        }
        if mat.has(Spsd) {
            out.insert(Spsd);
        }
    }
    if scalar.has(Zero) {
        out = PropertySet::new(&[Zero]);
    }
    out
}

/// Is `x` a leaf known to have full column rank (rank equal to its column
/// count)? Used to upgrade Gram products X^T M X from SPSD to SPD.
fn full_column_rank(x: &Expr) -> bool {
    let p = leafish_props(x);
    match p {
        Some(p) => p.has(FullRank) && x.rows() >= x.cols(),
        None => false,
    }
}

fn leafish_props(x: &Expr) -> Option<PropertySet> {
    match x.kind() {
        ExprKind::Op(o) => Some(o.props()),
        ExprKind::Transpose(c) | ExprKind::Inverse(c) => leafish_props(c),
        _ => None,
    }
}

/// Infers the property set of an expression bottom-up from its leaves.
///
/// The result is closed under implication and checked for consistency.
/// Inference is monotone: adding a leaf property never removes a conclusion.
pub fn infer(e: &Expr) -> Result<PropertySet, PropsError> {
    let p = infer_raw(e)?;
    let closed = p.close(e.rows(), e.cols());
    closed.check(e.rows(), e.cols())?;
    Ok(closed)
}

fn infer_raw(e: &Expr) -> Result<PropertySet, PropsError> {
    let rows = e.rows();
    let cols = e.cols();
    let mut props = match e.kind() {
        ExprKind::Op(o) => o.props(),
        ExprKind::Scalar(r) => {
            let mut s = PropertySet::EMPTY;
            use num_traits::Zero as _;
            if r.is_zero() {
                s.insert(Zero);
            } else {
                s.insert(NonSingular);
                if *r > num_rational::Rational64::zero() {
                    s.insert(Positive);
                }
            }
            s
        }
        ExprKind::Transpose(c) => apply_unary(TRANSPOSE_RULES, infer(c)?),
        ExprKind::Inverse(c) => apply_unary(INVERSE_RULES, infer(c)?),
        ExprKind::Times(children) => {
            let mut scalar = PropertySet::new(&[Positive]);
            let mut mats: Vec<&Expr> = Vec::new();
            for c in children {
                if c.is_scalar_shaped() && mats.is_empty() {
                    scalar = apply_binary(PRODUCT_RULES, scalar, infer(c)?);
                } else {
                    mats.push(c);
                }
            }
            let body = infer_product(&mats)?;
            if mats.is_empty() {
                scalar
            } else {
                scale_props(scalar, body)
            }
        }
        ExprKind::Plus(children) => {
            let mut acc = infer(&children[0])?;
            for c in &children[1..] {
                acc = apply_binary(SUM_RULES, acc, infer(c)?);
            }
            acc
        }
    };
    // Syntactic symmetry: e equal to its own transpose.
    if rows == cols && rows > 1 && !props.has(Symmetric) {
        if matches!(e.kind(), ExprKind::Times(_) | ExprKind::Plus(_)) {
            let t = e.transposed().and_then(|t| t.normalized());
            let n = e.normalized();
            if let (Ok(t), Ok(n)) = (t, n) {
                if t == n {
                    props.insert(Symmetric);
                }
            }
        }
    }
    Ok(props.close(rows, cols))
}

/// Infers properties of a product of matrix factors, including Gram-shaped
/// products X^T X and X^T M X.
fn infer_product(mats: &[&Expr]) -> Result<PropertySet, PropsError> {
    if mats.is_empty() {
        return Ok(PropertySet::new(&[Identity]));
    }
    if mats.len() == 1 {
        return infer(mats[0]);
    }
    // Pairwise fold for the plain rule table.
    let mut acc = infer(mats[0])?;
    for m in &mats[1..] {
        acc = apply_binary(PRODUCT_RULES, acc, infer(m)?);
    }
    // Gram shape: first factor is the transpose of the last.
    let first = mats[0];
    let last = mats[mats.len() - 1];
    let tlast = last.transposed().and_then(|t| t.normalized());
    let nfirst = first.normalized();
    if let (Ok(tlast), Ok(nfirst)) = (tlast, nfirst) {
        if tlast == nfirst {
            let inner = infer_product(&mats[1..mats.len() - 1])?;
            let inner = inner.close(first.cols(), first.cols());
            if inner.has(Spd) || inner.has(Identity) {
                if full_column_rank(last) {
                    acc.insert(Spd);
                } else {
                    acc.insert(Spsd);
                }
            } else if inner.has(Spsd) {
                acc.insert(Spsd);
            }
        }
    }
    Ok(acc)
}
