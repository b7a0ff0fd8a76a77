//! The catalogue of abstract computational kernels and factorizations:
//! patterns, variable constraints, FLOP formulas, output formats and
//! overwrite behavior.
//!
//! Kernels are BLAS/LAPACK-shaped plus a few snippets (diagonal scaling,
//! scalar folding, transpose copy, explicit inverses). Linear systems are
//! never computed by a black-box solve kernel: a factorization is applied
//! first and triangular/diagonal solves do the rest.

use std::collections::BTreeMap;
use std::fmt;
use std::sync::OnceLock;

use thiserror::Error;

use crate::expr::{Expr, Operand};
use crate::matching::{
    BoundAtom, CoeffMode as CM, Constraint, LeafPat, Match, Pattern, ShapeReq, SlotBind,
    TermBind, TermPat, TransMode, Var,
};
use crate::props::{Property, PropertySet};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum KernelError {
    #[error("cost formula of {kernel} needs dimension {dim}")]
    MissingDimension { kernel: &'static str, dim: &'static str },
    #[error("unknown kernel {0}")]
    UnknownKernel(String),
}

/// Storage layout of a kernel argument or result.
#[derive(
    Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, serde::Serialize, serde::Deserialize,
)]
pub enum StorageFormat {
    Full,
    LowerTriangularHalf,
    UpperTriangularHalf,
    DiagonalVector,
}

impl fmt::Display for StorageFormat {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            StorageFormat::Full => "full",
            StorageFormat::LowerTriangularHalf => "lower_half",
            StorageFormat::UpperTriangularHalf => "upper_half",
            StorageFormat::DiagonalVector => "diag_vector",
        };
        f.write_str(s)
    }
}

/// Format requirement of a kernel argument.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FormatReq {
    /// Needs the whole rectangle.
    Full,
    /// Reads only the operand's own triangle: full or the matching half.
    Triangle,
    /// Needs the diagonal-vector layout.
    Diag,
}

impl FormatReq {
    pub fn satisfied_by(self, fmt: StorageFormat, props: PropertySet) -> bool {
        match self {
            FormatReq::Full => fmt == StorageFormat::Full,
            FormatReq::Triangle => match fmt {
                StorageFormat::Full => true,
                StorageFormat::LowerTriangularHalf => props.has(Property::LowerTriangular),
                StorageFormat::UpperTriangularHalf => props.has(Property::UpperTriangular),
                StorageFormat::DiagonalVector => false,
            },
            FormatReq::Diag => fmt == StorageFormat::DiagonalVector,
        }
    }
}

/// Coarse classification used for reporting and acceptance checks.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum KernelClass {
    /// Matrix-matrix multiply class.
    MatMat,
    MatVec,
    VecVec,
    AddSub,
    Scale,
    ScalarOp,
    /// Data movement (transpose copy).
    Data,
    /// Explicit inverses.
    Inverse,
}

/// A closed-form FLOP count over named dimensions.
#[derive(Debug, Clone)]
pub enum CostExpr {
    Dim(&'static str),
    Const(f64),
    Sum(Vec<CostExpr>),
    Prod(Vec<CostExpr>),
}

impl CostExpr {
    pub fn eval(&self, dims: &DimAssignment) -> Result<f64, KernelError> {
        self.eval_named(dims, "<anonymous>")
    }

    fn eval_named(&self, dims: &DimAssignment, kernel: &'static str) -> Result<f64, KernelError> {
        match self {
            CostExpr::Dim(dname) => dims
                .0
                .get(dname)
                .map(|&v| v as f64)
                .ok_or(KernelError::MissingDimension { kernel, dim: dname }),
            CostExpr::Const(v) => Ok(*v),
            CostExpr::Sum(xs) => xs.iter().try_fold(0.0, |a, x| Ok(a + x.eval_named(dims, kernel)?)),
            CostExpr::Prod(xs) => xs.iter().try_fold(1.0, |a, x| Ok(a * x.eval_named(dims, kernel)?)),
        }
    }
}

impl fmt::Display for CostExpr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CostExpr::Dim(dname) => f.write_str(dname),
            CostExpr::Const(v) => write!(f, "{v}"),
            CostExpr::Sum(xs) => {
                for (i, x) in xs.iter().enumerate() {
                    if i > 0 {
                        write!(f, " + ")?;
                    }
                    write!(f, "{x}")?;
                }
                Ok(())
            }
            CostExpr::Prod(xs) => {
                for (i, x) in xs.iter().enumerate() {
                    if i > 0 {
                        write!(f, " ")?;
                    }
                    match x {
                        CostExpr::Sum(_) => write!(f, "({x})")?,
                        _ => write!(f, "{x}")?,
                    }
                }
                Ok(())
            }
        }
    }
}

fn dim(s: &'static str) -> CostExpr {
    CostExpr::Dim(s)
}
fn konst(v: f64) -> CostExpr {
    CostExpr::Const(v)
}
fn prod(xs: Vec<CostExpr>) -> CostExpr {
    CostExpr::Prod(xs)
}
fn csum(xs: Vec<CostExpr>) -> CostExpr {
    CostExpr::Sum(xs)
}

/// Dimension values extracted from a match, keyed by formula names.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct DimAssignment(pub BTreeMap<&'static str, usize>);

impl DimAssignment {
    pub fn of(pairs: &[(&'static str, usize)]) -> DimAssignment {
        DimAssignment(pairs.iter().copied().collect())
    }
}

/// An abstract computational kernel.
pub struct Kernel {
    pub name: &'static str,
    pub class: KernelClass,
    pub patterns: Vec<Pattern>,
    pub cost: CostExpr,
    pub dims: fn(&Match) -> DimAssignment,
    /// Pattern variable whose operand the result overwrites, if any.
    pub overwrites: Option<Var>,
    /// Non-default argument format requirements.
    pub arg_formats: Vec<(Var, FormatReq)>,
    pub result_format: StorageFormat,
}

impl Kernel {
    /// Evaluates the kernel's FLOP formula on an explicit assignment.
    pub fn cost_for(&self, dims: &DimAssignment) -> Result<f64, KernelError> {
        self.cost.eval_named(dims, self.name)
    }

    pub fn cost_of_match(&self, m: &Match) -> f64 {
        let dims = (self.dims)(m);
        self.cost.eval_named(&dims, self.name).expect("match provides all dimensions")
    }

    pub fn arg_format(&self, var: Var) -> FormatReq {
        self.arg_formats
            .iter()
            .find(|(v, _)| *v == var)
            .map(|(_, f)| *f)
            .unwrap_or(FormatReq::Full)
    }
}

/// Evaluates a kernel's cost formula against an explicit assignment.
pub fn cost(kernel: &Kernel, dims: &DimAssignment) -> Result<f64, KernelError> {
    kernel.cost_for(dims)
}

fn used_shape(binds: &BTreeMap<Var, BoundAtom>, slot: &SlotBind) -> (usize, usize) {
    let op = binds[slot.var].as_operand().expect("matrix slot");
    if slot.trans {
        (op.cols(), op.rows())
    } else {
        (op.rows(), op.cols())
    }
}

fn slot_shape(m: &Match, term: usize, slot: usize) -> (usize, usize) {
    used_shape(&m.binds, &m.terms[term].slots[slot])
}

fn dims_product2(m: &Match) -> DimAssignment {
    let a = slot_shape(m, 0, 0);
    let b = slot_shape(m, 0, 1);
    DimAssignment::of(&[("m", a.0), ("k", a.1), ("n", b.1)])
}

fn dims_result(m: &Match) -> DimAssignment {
    DimAssignment::of(&[("r", m.value.rows()), ("c", m.value.cols())])
}

/// For triangular multiply/solve: `t` is the triangular dimension, `r x c`
/// the other argument. The triangular slot is identified by its variable.
fn dims_tri_rhs(m: &Match) -> DimAssignment {
    let term = &m.terms[0];
    let ti = term
        .slots
        .iter()
        .position(|s| s.var == "T" || s.var == "L")
        .expect("triangular slot");
    let bi = 1 - ti;
    let tri = used_shape(&m.binds, &term.slots[ti]);
    if term.slots.len() == 1 {
        return DimAssignment::of(&[("t", tri.0), ("n", tri.0)]);
    }
    let b = used_shape(&m.binds, &term.slots[bi]);
    DimAssignment::of(&[("t", tri.0), ("r", b.0), ("c", b.1)])
}

fn dims_single(m: &Match) -> DimAssignment {
    let a = slot_shape(m, 0, 0);
    DimAssignment::of(&[("n", a.0.max(a.1)), ("r", a.0), ("c", a.1)])
}

fn dims_first_used(m: &Match) -> DimAssignment {
    let a = slot_shape(m, 0, 0);
    DimAssignment::of(&[("m", a.0), ("n", a.1)])
}

fn dims_none(_m: &Match) -> DimAssignment {
    DimAssignment::default()
}

// --- pattern-building helpers ---

fn with_props(shape: ShapeReq, requires: &[Property]) -> Constraint {
    Constraint { shape, requires: PropertySet::new(requires), forbids: PropertySet::EMPTY }
}

fn mat(var: Var, trans: TransMode) -> LeafPat {
    LeafPat::new(var, trans, false, Constraint::any_matrix())
}

fn general(var: Var, trans: TransMode) -> LeafPat {
    LeafPat::new(var, trans, false, with_props(ShapeReq::GeneralMatrix, &[]))
}

fn colvec(var: Var, trans: TransMode) -> LeafPat {
    LeafPat::new(var, trans, false, Constraint::vector())
}

fn rowvec(var: Var) -> LeafPat {
    LeafPat::new(var, TransMode::Plain, false, with_props(ShapeReq::RowVector, &[]))
}

fn scalar_leaf(var: Var) -> LeafPat {
    LeafPat::new(var, TransMode::Plain, false, Constraint::scalar())
}

fn tri_leaf(var: Var, orientation: Property, inv: bool) -> LeafPat {
    let mut requires = vec![orientation];
    if inv {
        requires.push(Property::NonSingular);
    }
    LeafPat {
        var,
        trans: TransMode::Any,
        inv,
        constraint: with_props(ShapeReq::SquareMatrix, &requires),
    }
}

fn diag_leaf(var: Var, inv: bool) -> LeafPat {
    let mut requires = vec![Property::Diagonal];
    if inv {
        requires.push(Property::NonSingular);
    }
    LeafPat {
        var,
        trans: TransMode::Plain,
        inv,
        constraint: with_props(ShapeReq::SquareMatrix, &requires),
    }
}

fn term(coeff: CM, factors: Vec<LeafPat>) -> TermPat {
    TermPat { coeff, factors }
}

/// For each triangular orientation, builds one pattern via `make`.
fn tri_patterns(make: impl Fn(Property) -> Pattern) -> Vec<Pattern> {
    vec![make(Property::LowerTriangular), make(Property::UpperTriangular)]
}

/// The fixed kernel catalogue.
pub fn builtin_kernels() -> &'static [Kernel] {
    static CATALOGUE: OnceLock<Vec<Kernel>> = OnceLock::new();
    CATALOGUE.get_or_init(build_catalogue)
}

pub fn kernel_index(name: &str) -> Option<usize> {
    builtin_kernels().iter().position(|k| k.name == name)
}

pub fn kernel_by_name(name: &str) -> Result<&'static Kernel, KernelError> {
    builtin_kernels()
        .iter()
        .find(|k| k.name == name)
        .ok_or_else(|| KernelError::UnknownKernel(name.to_string()))
}

fn build_catalogue() -> Vec<Kernel> {
    use TransMode::{Any, Plain, Transposed};

    let mut ks: Vec<Kernel> = Vec::new();

    // scalar folding snippets
    ks.push(Kernel {
        name: "scalar_mul",
        class: KernelClass::ScalarOp,
        patterns: vec![Pattern::Term(term(CM::None, vec![scalar_leaf("s"), scalar_leaf("t")]))],
        cost: konst(1.0),
        dims: dims_none,
        overwrites: None,
        arg_formats: vec![],
        result_format: StorageFormat::Full,
    });
    ks.push(Kernel {
        name: "scalar_add",
        class: KernelClass::ScalarOp,
        patterns: vec![Pattern::Sum(vec![
            term(CM::None, vec![scalar_leaf("s")]),
            term(CM::None, vec![scalar_leaf("t")]),
        ])],
        cost: konst(1.0),
        dims: dims_none,
        overwrites: None,
        arg_formats: vec![],
        result_format: StorageFormat::Full,
    });
    ks.push(Kernel {
        name: "scalar_rcp",
        class: KernelClass::ScalarOp,
        patterns: vec![Pattern::Term(term(
            CM::None,
            vec![LeafPat::new("s", Plain, true, Constraint::scalar())],
        ))],
        cost: konst(1.0),
        dims: dims_none,
        overwrites: None,
        arg_formats: vec![],
        result_format: StorageFormat::Full,
    });

    // diagonal snippets
    ks.push(Kernel {
        name: "diag_diag_mul",
        class: KernelClass::Scale,
        patterns: vec![Pattern::Term(term(
            CM::SignOnly,
            vec![diag_leaf("D", false), diag_leaf("E", false)],
        ))],
        cost: dim("r"),
        dims: dims_result,
        overwrites: None,
        arg_formats: vec![("D", FormatReq::Diag), ("E", FormatReq::Diag)],
        result_format: StorageFormat::DiagonalVector,
    });
    ks.push(Kernel {
        name: "diag_mm_left",
        class: KernelClass::Scale,
        patterns: vec![Pattern::Term(term(
            CM::SignOnly,
            vec![diag_leaf("D", false), mat("B", Plain)],
        ))],
        cost: prod(vec![dim("r"), dim("c")]),
        dims: dims_result,
        overwrites: Some("B"),
        arg_formats: vec![("D", FormatReq::Diag)],
        result_format: StorageFormat::Full,
    });
    ks.push(Kernel {
        name: "diag_mm_right",
        class: KernelClass::Scale,
        patterns: vec![Pattern::Term(term(
            CM::SignOnly,
            vec![mat("B", Plain), diag_leaf("D", false)],
        ))],
        cost: prod(vec![dim("r"), dim("c")]),
        dims: dims_result,
        overwrites: Some("B"),
        arg_formats: vec![("D", FormatReq::Diag)],
        result_format: StorageFormat::Full,
    });
    ks.push(Kernel {
        name: "diag_solve_left",
        class: KernelClass::Scale,
        patterns: vec![Pattern::Term(term(
            CM::SignOnly,
            vec![diag_leaf("D", true), mat("B", Plain)],
        ))],
        cost: prod(vec![dim("r"), dim("c")]),
        dims: dims_result,
        overwrites: Some("B"),
        arg_formats: vec![("D", FormatReq::Diag)],
        result_format: StorageFormat::Full,
    });
    ks.push(Kernel {
        name: "diag_solve_right",
        class: KernelClass::Scale,
        patterns: vec![Pattern::Term(term(
            CM::SignOnly,
            vec![mat("B", Plain), diag_leaf("D", true)],
        ))],
        cost: prod(vec![dim("r"), dim("c")]),
        dims: dims_result,
        overwrites: Some("B"),
        arg_formats: vec![("D", FormatReq::Diag)],
        result_format: StorageFormat::Full,
    });
    ks.push(Kernel {
        name: "diag_inv",
        class: KernelClass::Inverse,
        patterns: vec![Pattern::Term(term(CM::None, vec![diag_leaf("D", true)]))],
        cost: dim("n"),
        dims: dims_single,
        overwrites: None,
        arg_formats: vec![("D", FormatReq::Diag)],
        result_format: StorageFormat::DiagonalVector,
    });
    // Diagonal update of a full square matrix: X ± D.
    ks.push(Kernel {
        name: "diag_add",
        class: KernelClass::AddSub,
        patterns: vec![Pattern::Sum(vec![
            term(CM::SignOnly, vec![mat("X", Plain)]),
            term(CM::SignOnly, vec![diag_leaf("D", false)]),
        ])],
        cost: dim("c"),
        dims: dims_result,
        overwrites: Some("X"),
        arg_formats: vec![("D", FormatReq::Diag)],
        result_format: StorageFormat::Full,
    });
    ks.push(Kernel {
        name: "diag_diag_add",
        class: KernelClass::AddSub,
        patterns: vec![Pattern::Sum(vec![
            term(CM::SignOnly, vec![diag_leaf("D", false)]),
            term(CM::SignOnly, vec![diag_leaf("E", false)]),
        ])],
        cost: dim("c"),
        dims: dims_result,
        overwrites: None,
        arg_formats: vec![("D", FormatReq::Diag), ("E", FormatReq::Diag)],
        result_format: StorageFormat::DiagonalVector,
    });

    // permutation application
    ks.push(Kernel {
        name: "perm_mm_left",
        class: KernelClass::Scale,
        patterns: vec![Pattern::Term(term(
            CM::SignOnly,
            vec![
                LeafPat::new("P", Any, false, with_props(ShapeReq::SquareMatrix, &[Property::Permutation])),
                mat("B", Plain),
            ],
        ))],
        cost: prod(vec![dim("r"), dim("c")]),
        dims: dims_result,
        overwrites: None,
        arg_formats: vec![],
        result_format: StorageFormat::Full,
    });
    ks.push(Kernel {
        name: "perm_mm_right",
        class: KernelClass::Scale,
        patterns: vec![Pattern::Term(term(
            CM::SignOnly,
            vec![
                mat("B", Plain),
                LeafPat::new("P", Any, false, with_props(ShapeReq::SquareMatrix, &[Property::Permutation])),
            ],
        ))],
        cost: prod(vec![dim("r"), dim("c")]),
        dims: dims_result,
        overwrites: None,
        arg_formats: vec![],
        result_format: StorageFormat::Full,
    });

    // additions
    ks.push(Kernel {
        name: "add",
        class: KernelClass::AddSub,
        patterns: vec![Pattern::Sum(vec![
            term(CM::SignOnly, vec![mat("X", Any)]),
            term(CM::SignOnly, vec![mat("Y", Any)]),
        ])],
        cost: prod(vec![dim("r"), dim("c")]),
        dims: dims_result,
        overwrites: Some("Y"),
        arg_formats: vec![],
        result_format: StorageFormat::Full,
    });
    ks.push(Kernel {
        name: "tri_add",
        class: KernelClass::AddSub,
        patterns: tri_patterns(|o| {
            Pattern::Sum(vec![
                term(CM::SignOnly, vec![tri_leaf("X", o, false)]),
                term(CM::SignOnly, vec![tri_leaf("Y", o, false)]),
            ])
        }),
        cost: prod(vec![konst(0.5), dim("c"), csum(vec![dim("c"), konst(1.0)])]),
        dims: dims_result,
        overwrites: Some("Y"),
        arg_formats: vec![("X", FormatReq::Triangle), ("Y", FormatReq::Triangle)],
        result_format: StorageFormat::Full,
    });

    // scaling
    ks.push(Kernel {
        name: "scal",
        class: KernelClass::Scale,
        patterns: vec![Pattern::Term(term(CM::RequiredAtom("alpha"), vec![mat("X", Any)]))],
        cost: prod(vec![dim("r"), dim("c")]),
        dims: dims_result,
        overwrites: Some("X"),
        arg_formats: vec![],
        result_format: StorageFormat::Full,
    });

    // vector kernels
    ks.push(Kernel {
        name: "dot",
        class: KernelClass::VecVec,
        patterns: vec![
            Pattern::Term(term(
                CM::OptionalAtom("alpha"),
                vec![colvec("x", Transposed), colvec("y", Plain)],
            )),
            Pattern::Term(term(CM::OptionalAtom("alpha"), vec![rowvec("x"), colvec("y", Plain)])),
        ],
        cost: prod(vec![konst(2.0), dim("n")]),
        dims: |m| DimAssignment::of(&[("n", slot_shape(m, 0, 1).0)]),
        overwrites: None,
        arg_formats: vec![],
        result_format: StorageFormat::Full,
    });
    ks.push(Kernel {
        name: "gemv",
        class: KernelClass::MatVec,
        patterns: vec![Pattern::Sum(vec![
            term(CM::OptionalAtom("alpha"), vec![general("A", Any), colvec("x", Plain)]),
            term(CM::SignOnly, vec![colvec("y", Plain)]),
        ])],
        cost: prod(vec![konst(2.0), dim("m"), dim("n")]),
        dims: dims_first_used,
        overwrites: Some("y"),
        arg_formats: vec![],
        result_format: StorageFormat::Full,
    });
    ks.push(Kernel {
        name: "gemv_p",
        class: KernelClass::MatVec,
        patterns: vec![Pattern::Term(term(
            CM::OptionalAtom("alpha"),
            vec![general("A", Any), colvec("x", Plain)],
        ))],
        cost: prod(vec![konst(2.0), dim("m"), dim("n")]),
        dims: dims_first_used,
        overwrites: None,
        arg_formats: vec![],
        result_format: StorageFormat::Full,
    });
    ks.push(Kernel {
        name: "gevm_p",
        class: KernelClass::MatVec,
        patterns: vec![
            Pattern::Term(term(
                CM::OptionalAtom("alpha"),
                vec![colvec("x", Transposed), general("A", Any)],
            )),
            Pattern::Term(term(CM::OptionalAtom("alpha"), vec![rowvec("x"), general("A", Any)])),
        ],
        cost: prod(vec![konst(2.0), dim("m"), dim("n")]),
        dims: |m| {
            let a = slot_shape(m, 0, 1);
            DimAssignment::of(&[("m", a.0), ("n", a.1)])
        },
        overwrites: None,
        arg_formats: vec![],
        result_format: StorageFormat::Full,
    });
    ks.push(Kernel {
        name: "ger",
        class: KernelClass::MatVec,
        patterns: vec![Pattern::Sum(vec![
            term(CM::OptionalAtom("alpha"), vec![colvec("x", Plain), colvec("y", Transposed)]),
            term(CM::SignOnly, vec![general("Z", Plain)]),
        ])],
        cost: prod(vec![konst(2.0), dim("r"), dim("c")]),
        dims: dims_result,
        overwrites: Some("Z"),
        arg_formats: vec![],
        result_format: StorageFormat::Full,
    });
    ks.push(Kernel {
        name: "outer_p",
        class: KernelClass::MatVec,
        patterns: vec![
            Pattern::Term(term(
                CM::OptionalAtom("alpha"),
                vec![colvec("x", Plain), colvec("y", Transposed)],
            )),
            Pattern::Term(term(CM::OptionalAtom("alpha"), vec![colvec("x", Plain), rowvec("y")])),
        ],
        cost: prod(vec![dim("r"), dim("c")]),
        dims: dims_result,
        overwrites: None,
        arg_formats: vec![],
        result_format: StorageFormat::Full,
    });

    // triangular kernels
    ks.push(Kernel {
        name: "trmv",
        class: KernelClass::MatVec,
        patterns: tri_patterns(|o| {
            Pattern::Term(term(CM::SignOnly, vec![tri_leaf("T", o, false), colvec("x", Plain)]))
        }),
        cost: prod(vec![dim("t"), dim("t")]),
        dims: dims_tri_rhs,
        overwrites: Some("x"),
        arg_formats: vec![("T", FormatReq::Triangle)],
        result_format: StorageFormat::Full,
    });
    ks.push(Kernel {
        name: "trsv",
        class: KernelClass::MatVec,
        patterns: tri_patterns(|o| {
            Pattern::Term(term(CM::SignOnly, vec![tri_leaf("L", o, true), colvec("x", Plain)]))
        }),
        cost: prod(vec![dim("t"), dim("t")]),
        dims: dims_tri_rhs,
        overwrites: Some("x"),
        arg_formats: vec![("L", FormatReq::Triangle)],
        result_format: StorageFormat::Full,
    });
    ks.push(Kernel {
        name: "trmm",
        class: KernelClass::MatMat,
        patterns: {
            let mut ps = tri_patterns(|o| {
                Pattern::Term(term(CM::SignOnly, vec![tri_leaf("T", o, false), general("B", Plain)]))
            });
            ps.extend(tri_patterns(|o| {
                Pattern::Term(term(CM::SignOnly, vec![general("B", Plain), tri_leaf("T", o, false)]))
            }));
            ps
        },
        cost: prod(vec![dim("t"), dim("r"), dim("c")]),
        dims: dims_tri_rhs,
        overwrites: Some("B"),
        arg_formats: vec![("T", FormatReq::Triangle)],
        result_format: StorageFormat::Full,
    });
    ks.push(Kernel {
        name: "trsm",
        class: KernelClass::MatMat,
        patterns: {
            let mut ps = tri_patterns(|o| {
                Pattern::Term(term(CM::SignOnly, vec![tri_leaf("L", o, true), general("B", Plain)]))
            });
            ps.extend(tri_patterns(|o| {
                Pattern::Term(term(CM::SignOnly, vec![general("B", Plain), tri_leaf("L", o, true)]))
            }));
            ps
        },
        cost: prod(vec![dim("t"), dim("r"), dim("c")]),
        dims: dims_tri_rhs,
        overwrites: Some("B"),
        arg_formats: vec![("L", FormatReq::Triangle)],
        result_format: StorageFormat::Full,
    });

    // symmetric rank-k update
    ks.push(Kernel {
        name: "syrk",
        class: KernelClass::MatMat,
        patterns: vec![
            Pattern::Sum(vec![
                term(CM::SignOnly, vec![mat("X", Transposed), mat("X", Plain)]),
                term(
                    CM::SignOnly,
                    vec![LeafPat::new(
                        "C",
                        Plain,
                        false,
                        with_props(ShapeReq::SquareMatrix, &[Property::Symmetric]),
                    )],
                ),
            ]),
            Pattern::Sum(vec![
                term(CM::SignOnly, vec![mat("X", Plain), mat("X", Transposed)]),
                term(
                    CM::SignOnly,
                    vec![LeafPat::new(
                        "C",
                        Plain,
                        false,
                        with_props(ShapeReq::SquareMatrix, &[Property::Symmetric]),
                    )],
                ),
            ]),
        ],
        cost: prod(vec![dim("k"), dim("m"), csum(vec![dim("m"), konst(1.0)])]),
        dims: |m| {
            let a = slot_shape(m, 0, 0);
            DimAssignment::of(&[("m", a.0), ("k", a.1)])
        },
        overwrites: Some("C"),
        arg_formats: vec![],
        result_format: StorageFormat::LowerTriangularHalf,
    });
    ks.push(Kernel {
        name: "syrk_p",
        class: KernelClass::MatMat,
        patterns: vec![
            Pattern::Term(term(CM::SignOnly, vec![mat("X", Transposed), mat("X", Plain)])),
            Pattern::Term(term(CM::SignOnly, vec![mat("X", Plain), mat("X", Transposed)])),
        ],
        cost: prod(vec![dim("k"), dim("m"), csum(vec![dim("m"), konst(1.0)])]),
        dims: |m| {
            let a = slot_shape(m, 0, 0);
            DimAssignment::of(&[("m", a.0), ("k", a.1)])
        },
        overwrites: None,
        arg_formats: vec![],
        result_format: StorageFormat::LowerTriangularHalf,
    });

    // general matrix multiply
    ks.push(Kernel {
        name: "gemm",
        class: KernelClass::MatMat,
        patterns: vec![Pattern::Sum(vec![
            term(CM::SignOnly, vec![general("X", Any), general("Y", Any)]),
            term(CM::SignOnly, vec![general("Z", Plain)]),
        ])],
        cost: prod(vec![konst(2.0), dim("m"), dim("n"), dim("k")]),
        dims: dims_product2,
        overwrites: Some("Z"),
        arg_formats: vec![],
        result_format: StorageFormat::Full,
    });
    ks.push(Kernel {
        name: "gemm_p",
        class: KernelClass::MatMat,
        patterns: vec![Pattern::Term(term(
            CM::SignOnly,
            vec![general("X", Any), general("Y", Any)],
        ))],
        cost: prod(vec![konst(2.0), dim("m"), dim("n"), dim("k")]),
        dims: dims_product2,
        overwrites: None,
        arg_formats: vec![],
        result_format: StorageFormat::Full,
    });

    // data movement and explicit inverses
    ks.push(Kernel {
        name: "transpose_copy",
        class: KernelClass::Data,
        patterns: vec![Pattern::Term(term(CM::None, vec![mat("X", Transposed)]))],
        cost: prod(vec![dim("r"), dim("c")]),
        dims: dims_result,
        overwrites: None,
        arg_formats: vec![],
        result_format: StorageFormat::Full,
    });
    ks.push(Kernel {
        name: "inv_tri",
        class: KernelClass::Inverse,
        patterns: tri_patterns(|o| Pattern::Term(term(CM::None, vec![tri_leaf("L", o, true)]))),
        cost: prod(vec![konst(1.0 / 3.0), dim("n"), dim("n"), dim("n")]),
        dims: dims_tri_rhs,
        overwrites: None,
        arg_formats: vec![("L", FormatReq::Triangle)],
        result_format: StorageFormat::Full,
    });
    ks.push(Kernel {
        name: "inv_full",
        class: KernelClass::Inverse,
        patterns: vec![Pattern::Term(term(
            CM::None,
            vec![LeafPat {
                var: "X",
                trans: Any,
                inv: true,
                constraint: Constraint {
                    shape: ShapeReq::SquareMatrix,
                    requires: PropertySet::new(&[Property::NonSingular]),
                    forbids: PropertySet::new(&[
                        Property::LowerTriangular,
                        Property::UpperTriangular,
                        Property::Diagonal,
                        Property::Orthogonal,
                        Property::Permutation,
                        Property::Identity,
                    ]),
                },
            }],
        ))],
        cost: prod(vec![konst(2.0), dim("n"), dim("n"), dim("n")]),
        dims: dims_single,
        overwrites: None,
        arg_formats: vec![],
        result_format: StorageFormat::Full,
    });

    ks
}

/// Matches every kernel pattern against the subject, tagged by catalogue
/// index, in catalogue order.
pub fn match_all(subject: &Expr) -> Vec<(usize, Match)> {
    let mut out = Vec::new();
    for (i, k) in builtin_kernels().iter().enumerate() {
        for p in &k.patterns {
            for m in crate::matching::find_matches(p, subject) {
                out.push((i, m));
            }
        }
    }
    out
}

// ---------------------------------------------------------------------------
// Factorizations
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum FactorKind {
    Cholesky,
    Lu,
    Qr,
    Eigendecomposition,
    Svd,
}

impl FactorKind {
    pub fn name(self) -> &'static str {
        match self {
            FactorKind::Cholesky => "cholesky",
            FactorKind::Lu => "lu",
            FactorKind::Qr => "qr",
            FactorKind::Eigendecomposition => "eig",
            FactorKind::Svd => "svd",
        }
    }

    pub fn cost_formula(self) -> CostExpr {
        match self {
            FactorKind::Cholesky => prod(vec![konst(1.0 / 3.0), dim("n"), dim("n"), dim("n")]),
            FactorKind::Lu => prod(vec![konst(2.0 / 3.0), dim("n"), dim("n"), dim("n")]),
            FactorKind::Qr => csum(vec![
                prod(vec![konst(2.0), dim("m"), dim("n"), dim("n")]),
                prod(vec![konst(-2.0 / 3.0), dim("n"), dim("n"), dim("n")]),
            ]),
            FactorKind::Eigendecomposition => {
                prod(vec![konst(9.0), dim("n"), dim("n"), dim("n")])
            }
            FactorKind::Svd => prod(vec![konst(14.0), dim("m"), dim("n"), dim("n")]),
        }
    }

    pub fn cost(self, rows: usize, cols: usize) -> f64 {
        let dims = DimAssignment::of(&[("m", rows), ("n", cols)]);
        self.cost_formula().eval(&dims).expect("factorization dims")
    }
}

impl fmt::Display for FactorKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Candidate factorizations for an operand appearing inside an inversion.
///
/// SPD operands go to Cholesky; symmetric ones to the eigendecomposition or
/// LU; general square ones to LU, QR or SVD. Triangular, diagonal,
/// orthogonal and factor operands are never factorized. Rectangular
/// full-rank operands with more rows than columns admit QR, which
/// simplifies Gram-shaped inverses.
pub fn factorizations_for(op: &Operand) -> Vec<FactorKind> {
    if op.is_factor() || op.is_scalar() {
        return vec![];
    }
    let p = op.props();
    if p.triangular()
        || p.has(Property::Diagonal)
        || p.has(Property::Orthogonal)
        || p.has(Property::OrthogonalRows)
        || p.has(Property::OrthogonalColumns)
        || p.has(Property::Permutation)
        || p.has(Property::Identity)
        || p.has(Property::Zero)
    {
        return vec![];
    }
    if op.is_square() {
        if p.has(Property::Spd) {
            vec![FactorKind::Cholesky]
        } else if p.has(Property::Symmetric) {
            vec![FactorKind::Eigendecomposition, FactorKind::Lu]
        } else {
            vec![FactorKind::Lu, FactorKind::Qr, FactorKind::Svd]
        }
    } else if op.rows() > op.cols() && p.has(Property::FullRank) {
        vec![FactorKind::Qr]
    } else {
        vec![]
    }
}

/// The factor operands and the replacement expression for applying `kind`
/// to `target`. `names` supplies fresh deterministic operand names.
pub fn factor_outputs(kind: FactorKind, target: &Operand, names: &[String]) -> (Vec<Operand>, Expr) {
    use crate::expr::Origin::FactorizationOutput as FOut;
    let n = target.cols();
    let mk = |name: &str, r: usize, c2: usize, props: &[Property]| {
        Operand::new(name, r, c2, PropertySet::new(props), FOut)
            .expect("factor operand is consistent")
    };
    match kind {
        FactorKind::Cholesky => {
            // target = L L^T, L lower triangular.
            let l = mk(&names[0], n, n, &[Property::LowerTriangular, Property::NonSingular]);
            let le = Expr::operand(l.clone());
            let e = Expr::times(vec![le.clone(), le.transposed().unwrap()]).unwrap();
            (vec![l], e)
        }
        FactorKind::Lu => {
            // target = P L U with unit lower triangular L.
            let p = mk(&names[0], n, n, &[Property::Permutation]);
            let l = mk(
                &names[1],
                n,
                n,
                &[Property::LowerTriangular, Property::UnitDiagonal, Property::NonSingular],
            );
            let u = mk(&names[2], n, n, &[Property::UpperTriangular, Property::NonSingular]);
            let e = Expr::times(vec![
                Expr::operand(p.clone()),
                Expr::operand(l.clone()),
                Expr::operand(u.clone()),
            ])
            .unwrap();
            (vec![p, l, u], e)
        }
        FactorKind::Qr => {
            // target (m x n, m >= n) = Q R, Q with orthogonal columns.
            let m = target.rows();
            let qprops: &[Property] = if m == n {
                &[Property::Orthogonal]
            } else {
                &[Property::OrthogonalColumns, Property::FullRank]
            };
            let q = mk(&names[0], m, n, qprops);
            let r = mk(&names[1], n, n, &[Property::UpperTriangular, Property::NonSingular]);
            let e =
                Expr::times(vec![Expr::operand(q.clone()), Expr::operand(r.clone())]).unwrap();
            (vec![q, r], e)
        }
        FactorKind::Eigendecomposition => {
            // target = Z W Z^T, Z orthogonal, W diagonal.
            let z = mk(&names[0], n, n, &[Property::Orthogonal]);
            let mut wprops = vec![Property::Diagonal, Property::NonSingular];
            if target.props().has(Property::Spd) {
                wprops.push(Property::Spd);
            }
            let w = mk(&names[1], n, n, &wprops);
            let ze = Expr::operand(z.clone());
            let e = Expr::times(vec![
                ze.clone(),
                Expr::operand(w.clone()),
                ze.transposed().unwrap(),
            ])
            .unwrap();
            (vec![z, w], e)
        }
        FactorKind::Svd => {
            // Square target = U S V^T.
            let u = mk(&names[0], n, n, &[Property::Orthogonal]);
            let s = mk(&names[1], n, n, &[Property::Diagonal, Property::NonSingular]);
            let v = mk(&names[2], n, n, &[Property::Orthogonal]);
            let e = Expr::times(vec![
                Expr::operand(u.clone()),
                Expr::operand(s.clone()),
                Expr::operand(v.clone()).transposed().unwrap(),
            ])
            .unwrap();
            (vec![u, s, v], e)
        }
    }
}

pub fn factor_output_count(kind: FactorKind) -> usize {
    match kind {
        FactorKind::Cholesky => 1,
        FactorKind::Eigendecomposition | FactorKind::Qr => 2,
        FactorKind::Lu | FactorKind::Svd => 3,
    }
}

pub fn factor_result_formats(kind: FactorKind) -> Vec<StorageFormat> {
    use StorageFormat::*;
    match kind {
        FactorKind::Cholesky => vec![LowerTriangularHalf],
        FactorKind::Lu => vec![Full, LowerTriangularHalf, UpperTriangularHalf],
        FactorKind::Qr => vec![Full, UpperTriangularHalf],
        FactorKind::Eigendecomposition => vec![Full, DiagonalVector],
        FactorKind::Svd => vec![Full, DiagonalVector, Full],
    }
}

// ---------------------------------------------------------------------------
// Kernel calls
// ---------------------------------------------------------------------------

/// What a call invokes: a catalogue kernel or a factorization.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CallOp {
    Kernel(usize),
    Factor(FactorKind),
}

impl CallOp {
    pub fn name(&self) -> &'static str {
        match self {
            CallOp::Kernel(i) => builtin_kernels()[*i].name,
            CallOp::Factor(k) => k.name(),
        }
    }
}

/// One step of a generated program.
#[derive(Debug, Clone)]
pub struct KernelCall {
    pub op: CallOp,
    pub binds: BTreeMap<Var, BoundAtom>,
    pub terms: Vec<TermBind>,
    pub results: Vec<Operand>,
    pub flops: f64,
    /// The expression the call computes over its bound operands (for
    /// factorizations: the factorized operand).
    pub value: Expr,
}

impl KernelCall {
    pub fn result(&self) -> &Operand {
        &self.results[0]
    }

    /// Operand arguments in slot order, with (transposed, inverted) flags.
    pub fn operand_args(&self) -> Vec<(Operand, bool, bool)> {
        let mut out = Vec::new();
        for t in &self.terms {
            if let Some(BoundAtom::Op(o)) = &t.coeff {
                out.push((o.clone(), false, false));
            }
            for s in &t.slots {
                if let Some(o) = self.binds[s.var].as_operand() {
                    out.push((o.clone(), s.trans, s.inv));
                }
            }
        }
        if let CallOp::Factor(_) = self.op {
            for o in self.value.operands() {
                out.push((o, false, false));
            }
        }
        out
    }

    /// True when all operand arguments are factorization outputs, which the
    /// termination rule forbids.
    pub fn all_args_are_factors(&self) -> bool {
        let args = self.operand_args();
        !args.is_empty() && args.iter().all(|(o, _, _)| o.is_factor())
    }
}

/// Renders the catalogue as a human-readable table.
pub fn format_catalogue() -> String {
    use std::fmt::Write;
    let mut s = String::new();
    writeln!(s, "{:<16} {:<9} {:<46} cost", "kernel", "class", "pattern").unwrap();
    for k in builtin_kernels() {
        writeln!(
            s,
            "{:<16} {:<9} {:<46} {}",
            k.name,
            format!("{:?}", k.class),
            render_pattern(&k.patterns[0]),
            k.cost
        )
        .unwrap();
        for extra in &k.patterns[1..] {
            writeln!(s, "{:<16} {:<9} {:<46}", "", "", render_pattern(extra)).unwrap();
        }
    }
    s
}

fn render_pattern(p: &Pattern) -> String {
    let terms: &[TermPat] = match p {
        Pattern::Term(t) => std::slice::from_ref(t),
        Pattern::Sum(ts) => ts,
    };
    let mut parts = Vec::new();
    for t in terms {
        let mut s = String::new();
        match t.coeff {
            CM::None => {}
            CM::SignOnly => s.push('±'),
            CM::OptionalAtom(v) | CM::RequiredAtom(v) => {
                s.push_str(v);
                s.push(' ');
            }
        }
        for (i, f) in t.factors.iter().enumerate() {
            if i > 0 {
                s.push(' ');
            }
            s.push_str(f.var);
            match (f.trans, f.inv) {
                (TransMode::Transposed, false) => s.push_str("^T"),
                (TransMode::Transposed, true) => s.push_str("^-T"),
                (_, true) => s.push_str("^-1"),
                _ => {}
            }
            let req = f.constraint.requires;
            if !req.is_empty() {
                s.push_str(&format!("{{{req}}}"));
            }
        }
        parts.push(s);
    }
    parts.join(" + ")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::expr::Origin;

    fn opnd(name: &str, r: usize, cdim: usize, props: &[Property]) -> Operand {
        Operand::new(name, r, cdim, PropertySet::new(props), Origin::Input).unwrap()
    }

    fn op(name: &str, r: usize, cdim: usize, props: &[Property]) -> Expr {
        Expr::operand(opnd(name, r, cdim, props))
    }

    #[test]
    fn gemm_cost_formula() {
        let k = kernel_by_name("gemm").unwrap();
        let dims = DimAssignment::of(&[("m", 1000), ("n", 1000), ("k", 1000)]);
        assert_eq!(k.cost_for(&dims).unwrap(), 2e9);
    }

    #[test]
    fn missing_dimension_is_an_error() {
        let k = kernel_by_name("gemm").unwrap();
        let dims = DimAssignment::of(&[("m", 10), ("n", 10)]);
        assert!(matches!(
            k.cost_for(&dims),
            Err(KernelError::MissingDimension { dim: "k", .. })
        ));
    }

    #[test]
    fn factorization_and_solve_costs() {
        assert!((FactorKind::Cholesky.cost(1000, 1000) - 1e9 / 3.0).abs() < 1.0);
        let k = kernel_by_name("trsv").unwrap();
        let dims = DimAssignment::of(&[("t", 1000)]);
        assert_eq!(k.cost_for(&dims).unwrap(), 1e6);
    }

    #[test]
    fn catalogue_contains_gemm_pattern() {
        // X Y + Z, all full matrices, matches the gemm kernel.
        let e = Expr::plus(vec![
            Expr::times(vec![op("A", 8, 5, &[]), op("B", 5, 9, &[])]).unwrap(),
            op("C", 8, 9, &[]),
        ])
        .unwrap();
        let names: Vec<&str> =
            match_all(&e).iter().map(|(i, _)| builtin_kernels()[*i].name).collect();
        assert!(names.contains(&"gemm"), "got {names:?}");
        assert!(names.contains(&"gemm_p"), "got {names:?}");
    }

    #[test]
    fn trsv_usable_for_triangular_solves() {
        let l = op("L", 6, 6, &[Property::LowerTriangular, Property::NonSingular]);
        let b = op("b", 6, 1, &[]);
        let e = Expr::times(vec![l.inverted().unwrap(), b.clone()]).unwrap();
        assert!(match_all(&e).iter().any(|(i, _)| builtin_kernels()[*i].name == "trsv"));
        // Transposed solve matches too.
        let lt = op("L", 6, 6, &[Property::LowerTriangular, Property::NonSingular])
            .transposed()
            .unwrap()
            .inverted()
            .unwrap();
        let e2 = Expr::times(vec![lt, b]).unwrap();
        assert!(match_all(&e2).iter().any(|(i, _)| builtin_kernels()[*i].name == "trsv"));
    }

    #[test]
    fn full_times_diagonal_snippet_exists() {
        let a = op("A", 6, 6, &[]);
        let w = op("W", 6, 6, &[Property::Diagonal]);
        let e = Expr::times(vec![a, w]).unwrap();
        assert!(match_all(&e)
            .iter()
            .any(|(i, _)| builtin_kernels()[*i].name == "diag_mm_right"));
    }

    #[test]
    fn spd_inverse_has_no_direct_solve() {
        // S^-1 B with S SPD and no factorization applied: no solve kernel.
        let s = op("S", 6, 6, &[Property::Spd]);
        let b = op("B", 6, 6, &[]);
        let e = Expr::times(vec![s.inverted().unwrap(), b]).unwrap();
        let solves = ["trsm", "trsv", "diag_solve_left", "diag_solve_right"];
        for (i, _) in match_all(&e) {
            assert!(
                !solves.contains(&builtin_kernels()[i].name),
                "unexpected solve match {}",
                builtin_kernels()[i].name
            );
        }
    }

    #[test]
    fn only_addition_kernels_match_plain_sums() {
        let e = Expr::plus(vec![op("A", 5, 5, &[]), op("B", 5, 5, &[])]).unwrap();
        for (i, _) in match_all(&e) {
            let k = &builtin_kernels()[i];
            assert_eq!(k.class, KernelClass::AddSub, "kernel {}", k.name);
        }
    }

    #[test]
    fn factorizations_for_respects_properties() {
        let spd = opnd("S", 6, 6, &[Property::Spd]);
        assert_eq!(factorizations_for(&spd), vec![FactorKind::Cholesky]);
        let gen = opnd("A", 6, 6, &[Property::FullRank]);
        assert_eq!(
            factorizations_for(&gen),
            vec![FactorKind::Lu, FactorKind::Qr, FactorKind::Svd]
        );
        let lt = opnd("L", 6, 6, &[Property::LowerTriangular]);
        assert!(factorizations_for(&lt).is_empty());
        let tall = opnd("X", 30, 5, &[Property::FullRank]);
        assert_eq!(factorizations_for(&tall), vec![FactorKind::Qr]);
    }

    #[test]
    fn factor_outputs_are_factors() {
        let s = opnd("S", 6, 6, &[Property::Spd]);
        let (outs, repl) = factor_outputs(FactorKind::Cholesky, &s, &["L1".to_string()]);
        assert!(outs.iter().all(|o| o.is_factor()));
        assert_eq!(repl.rows(), 6);
        assert!(outs[0].props().has(Property::LowerTriangular));
        // Factorizing a factor operand yields no candidates.
        assert!(factorizations_for(&outs[0]).is_empty());
    }

    #[test]
    fn costs_are_dimension_monotone() {
        // Doubling every dimension never decreases any kernel cost.
        let base = [("m", 40), ("n", 30), ("k", 20), ("r", 40), ("c", 30), ("t", 25)];
        let doubled: Vec<(&'static str, usize)> =
            base.iter().map(|&(d2, v)| (d2, v * 2)).collect();
        for k in builtin_kernels() {
            let lo = k.cost_for(&DimAssignment::of(&base)).unwrap();
            let hi = k.cost_for(&DimAssignment::of(&doubled)).unwrap();
            assert!(hi >= lo, "kernel {} not monotone: {lo} -> {hi}", k.name);
            assert!(lo >= 0.0);
        }
        for f in [
            FactorKind::Cholesky,
            FactorKind::Lu,
            FactorKind::Qr,
            FactorKind::Eigendecomposition,
            FactorKind::Svd,
        ] {
            assert!(f.cost(80, 40) >= f.cost(40, 20));
        }
    }

    #[test]
    fn catalogue_table_renders() {
        let t = format_catalogue();
        assert!(t.contains("gemm"));
        assert!(t.contains("2 m n k"));
    }
}
