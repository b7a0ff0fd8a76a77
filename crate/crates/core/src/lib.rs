//! Translates high-level linear algebra assignments, annotated with matrix
//! properties, into low-cost sequences of BLAS/LAPACK-style kernel calls.
//!
//! The pipeline: a small input language is parsed into a [`cli::ProblemSpec`];
//! [`search::generate`] builds a derivation graph by best-first search over
//! algebraic rewrites and kernel applications; [`search::k_best`] extracts the
//! cheapest programs; [`codegen`] lowers a program to buffers, storage formats
//! and printable listings; [`verify`] checks generated programs numerically
//! against a reference evaluator.

pub mod chain;
pub mod codegen;
pub mod expr;
pub mod kernels;
pub mod matching;
pub mod props;
pub mod rewrite;
pub mod search;

pub use expr::{Expr, ExprKind, Operand, Origin};
pub use props::{Property, PropertySet};
