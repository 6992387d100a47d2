//! Expression trees with variable and parameter leaves.
//!
//! A tree owns its structure and the parameter vector `theta`. Parameter
//! leaves refer to `theta` by slot. Evaluation uses protected operator
//! semantics (see [`eval`]) so every finite input yields a finite output.

mod eval;
mod sexpr;

use std::collections::BTreeSet;
use std::fmt;

use thiserror::Error;

pub use eval::{protected, Program, Workspace};
pub use sexpr::{parse, parse_with_theta};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ExprError {
    #[error("tree references feature x{index} but the data has {dim} columns")]
    Dimension { index: usize, dim: usize },
    #[error("theta has length {got}, tree has {expected} parameter slots")]
    ThetaLength { expected: usize, got: usize },
    #[error("input matrix has {len} values, not a multiple of dimension {dim}")]
    RaggedInput { len: usize, dim: usize },
    #[error("parameter slots are not contiguous from 0 (missing slot {missing})")]
    NonContiguousSlots { missing: usize },
    #[error("operator `{op}` takes {expected} operand(s), got {got}")]
    Arity {
        op: Operator,
        expected: usize,
        got: usize,
    },
    #[error("syntax error at byte {pos}: {msg}")]
    Syntax { pos: usize, msg: String },
    #[error("unknown symbol `{symbol}` at byte {pos}")]
    UnknownSymbol { pos: usize, symbol: String },
}

/// Operator alphabet used by both the ground-truth trees and mutations.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Operator {
    Add,
    Sub,
    Mul,
    Div,
    Pow,
    Sin,
    Cos,
    Sqrt,
    Exp,
}

impl Operator {
    pub const ALL: [Operator; 9] = [
        Operator::Add,
        Operator::Sub,
        Operator::Mul,
        Operator::Div,
        Operator::Pow,
        Operator::Sin,
        Operator::Cos,
        Operator::Sqrt,
        Operator::Exp,
    ];

    pub fn arity(self) -> usize {
        match self {
            Operator::Add | Operator::Sub | Operator::Mul | Operator::Div | Operator::Pow => 2,
            Operator::Sin | Operator::Cos | Operator::Sqrt | Operator::Exp => 1,
        }
    }

    pub fn symbol(self) -> &'static str {
        match self {
            Operator::Add => "+",
            Operator::Sub => "-",
            Operator::Mul => "*",
            Operator::Div => "/",
            Operator::Pow => "pow",
            Operator::Sin => "sin",
            Operator::Cos => "cos",
            Operator::Sqrt => "sqrt",
            Operator::Exp => "exp",
        }
    }

    pub fn from_symbol(s: &str) -> Option<Operator> {
        Some(match s {
            "+" => Operator::Add,
            // U+2212 MINUS SIGN is accepted as an alias.
            "-" | "\u{2212}" => Operator::Sub,
            "*" => Operator::Mul,
            "/" => Operator::Div,
            "pow" => Operator::Pow,
            "sin" => Operator::Sin,
            "cos" => Operator::Cos,
            "sqrt" => Operator::Sqrt,
            "exp" => Operator::Exp,
            _ => return None,
        })
    }
}

impl fmt::Display for Operator {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.symbol())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Node {
    /// Feature column, 0-based.
    Var(usize),
    /// Slot into the owning tree's `theta`.
    Param(usize),
    Op(Operator, Vec<Node>),
}

impl Node {
    pub fn unary(op: Operator, child: Node) -> Node {
        debug_assert_eq!(op.arity(), 1);
        Node::Op(op, vec![child])
    }

    pub fn binary(op: Operator, left: Node, right: Node) -> Node {
        debug_assert_eq!(op.arity(), 2);
        Node::Op(op, vec![left, right])
    }

    pub fn size(&self) -> usize {
        match self {
            Node::Var(_) | Node::Param(_) => 1,
            Node::Op(_, children) => 1 + children.iter().map(Node::size).sum::<usize>(),
        }
    }

    /// Depth counted in levels: a lone leaf has depth 1.
    pub fn depth(&self) -> usize {
        match self {
            Node::Var(_) | Node::Param(_) => 1,
            Node::Op(_, children) => 1 + children.iter().map(Node::depth).max().unwrap_or(0),
        }
    }

    pub fn is_leaf(&self) -> bool {
        !matches!(self, Node::Op(..))
    }

    /// Pre-order traversal.
    pub fn visit<'a>(&'a self, f: &mut impl FnMut(&'a Node)) {
        f(self);
        if let Node::Op(_, children) = self {
            for c in children {
                c.visit(f);
            }
        }
    }

    /// Node at the given pre-order index.
    pub fn get(&self, index: usize) -> Option<&Node> {
        let mut remaining = index;
        self.get_inner(&mut remaining)
    }

    fn get_inner(&self, remaining: &mut usize) -> Option<&Node> {
        if *remaining == 0 {
            return Some(self);
        }
        *remaining -= 1;
        if let Node::Op(_, children) = self {
            for c in children {
                let size = c.size();
                if *remaining < size {
                    return c.get_inner(remaining);
                }
                *remaining -= size;
            }
        }
        None
    }

    /// Copy of `self` with the subtree at pre-order `index` replaced.
    /// Returns `None` when `index >= self.size()`.
    pub fn replaced(&self, index: usize, replacement: &Node) -> Option<Node> {
        if index == 0 {
            return Some(replacement.clone());
        }
        let Node::Op(op, children) = self else {
            return None;
        };
        let mut offset = 1;
        let mut out = children.clone();
        for (i, c) in children.iter().enumerate() {
            let size = c.size();
            if index < offset + size {
                out[i] = c.replaced(index - offset, replacement)?;
                return Some(Node::Op(*op, out));
            }
            offset += size;
        }
        None
    }

    fn check_arity(&self) -> Result<(), ExprError> {
        if let Node::Op(op, children) = self {
            if children.len() != op.arity() {
                return Err(ExprError::Arity {
                    op: *op,
                    expected: op.arity(),
                    got: children.len(),
                });
            }
            for c in children {
                c.check_arity()?;
            }
        }
        Ok(())
    }

    fn map_params(&self, f: &mut impl FnMut(usize) -> usize) -> Node {
        match self {
            Node::Var(i) => Node::Var(*i),
            Node::Param(s) => Node::Param(f(*s)),
            Node::Op(op, children) => {
                Node::Op(*op, children.iter().map(|c| c.map_params(f)).collect())
            }
        }
    }
}

/// A tree together with its parameter vector.
///
/// Invariants: operator arities hold, and the parameter slots used by the
/// tree are exactly `0..theta.len()`.
#[derive(Debug, Clone, PartialEq)]
pub struct ExpressionTree {
    root: Node,
    theta: Vec<f64>,
}

impl ExpressionTree {
    pub fn new(root: Node, theta: Vec<f64>) -> Result<Self, ExprError> {
        root.check_arity()?;
        let mut slots = BTreeSet::new();
        root.visit(&mut |n| {
            if let Node::Param(s) = n {
                slots.insert(*s);
            }
        });
        for (expected, &slot) in slots.iter().enumerate() {
            if slot != expected {
                return Err(ExprError::NonContiguousSlots { missing: expected });
            }
        }
        if slots.len() != theta.len() {
            return Err(ExprError::ThetaLength {
                expected: slots.len(),
                got: theta.len(),
            });
        }
        Ok(Self { root, theta })
    }

    /// Builds a tree from arbitrary slot ids, renumbering them by first
    /// pre-order appearance and dropping unused `theta` entries.
    pub fn canonicalized(root: &Node, theta: &[f64]) -> Result<Self, ExprError> {
        let mut order: Vec<usize> = Vec::new();
        root.visit(&mut |n| {
            if let Node::Param(s) = n {
                if !order.contains(s) {
                    order.push(*s);
                }
            }
        });
        let mut new_theta = Vec::with_capacity(order.len());
        for &s in &order {
            let v = *theta.get(s).ok_or(ExprError::ThetaLength {
                expected: s + 1,
                got: theta.len(),
            })?;
            new_theta.push(v);
        }
        let renumbered =
            root.map_params(&mut |s| order.iter().position(|&o| o == s).expect("collected"));
        Self::new(renumbered, new_theta)
    }

    pub fn root(&self) -> &Node {
        &self.root
    }

    pub fn theta(&self) -> &[f64] {
        &self.theta
    }

    /// Same structure with a different parameter vector.
    pub fn with_theta(&self, theta: Vec<f64>) -> Result<Self, ExprError> {
        if theta.len() != self.theta.len() {
            return Err(ExprError::ThetaLength {
                expected: self.theta.len(),
                got: theta.len(),
            });
        }
        Ok(Self {
            root: self.root.clone(),
            theta,
        })
    }

    pub fn num_params(&self) -> usize {
        self.theta.len()
    }

    /// Total node count (operators and leaves).
    pub fn size(&self) -> usize {
        self.root.size()
    }

    pub fn depth(&self) -> usize {
        self.root.depth()
    }

    /// Distinct operator kinds + distinct variables + one shared symbol for
    /// all parameters (if any).
    pub fn distinct_symbols(&self) -> usize {
        let mut ops = BTreeSet::new();
        let mut vars = BTreeSet::new();
        let mut has_param = false;
        self.root.visit(&mut |n| match n {
            Node::Op(op, _) => {
                ops.insert(*op);
            }
            Node::Var(i) => {
                vars.insert(*i);
            }
            Node::Param(_) => has_param = true,
        });
        ops.len() + vars.len() + usize::from(has_param)
    }

    /// Largest feature index used plus one (0 if the tree has no variables).
    pub fn min_dim(&self) -> usize {
        let mut d = 0;
        self.root.visit(&mut |n| {
            if let Node::Var(i) = n {
                d = d.max(i + 1);
            }
        });
        d
    }

    /// True when every parameter slot occurs once, numbered in pre-order.
    /// Canonical trees survive a print/parse round trip with inline literals.
    pub fn is_canonical(&self) -> bool {
        let mut next = 0;
        let mut ok = true;
        self.root.visit(&mut |n| {
            if let Node::Param(s) = n {
                ok &= *s == next;
                next += 1;
            }
        });
        ok
    }

    pub fn compile(&self) -> Program {
        Program::compile(&self.root, self.theta.len())
    }

    /// Evaluates the tree on a row-major `n x dim` input matrix.
    pub fn evaluate(&self, theta: &[f64], x: &[f64], dim: usize) -> Result<Vec<f64>, ExprError> {
        self.compile().evaluate(theta, x, dim)
    }

    /// Evaluates with the tree's own parameter vector.
    pub fn evaluate_embedded(&self, x: &[f64], dim: usize) -> Result<Vec<f64>, ExprError> {
        self.evaluate(&self.theta, x, dim)
    }

    /// Canonical text form with inline 17-significant-digit literals.
    pub fn to_sexpr(&self) -> String {
        let mut out = String::new();
        sexpr::write_node(&self.root, &mut |s, out| sexpr::write_literal(self.theta[s], out), &mut out);
        out
    }

    /// Text form with `(p k)` slot references; `theta` travels separately.
    pub fn to_slot_sexpr(&self) -> String {
        let mut out = String::new();
        sexpr::write_node(
            &self.root,
            &mut |s, out: &mut String| {
                out.push_str("(p ");
                out.push_str(&s.to_string());
                out.push(')');
            },
            &mut out,
        );
        out
    }
}

impl fmt::Display for ExpressionTree {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_sexpr())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn x(i: usize) -> Node {
        Node::Var(i)
    }
    fn p(s: usize) -> Node {
        Node::Param(s)
    }

    #[test]
    fn size_counts_every_node() {
        let leaf = ExpressionTree::new(x(0), vec![]).unwrap();
        assert_eq!(leaf.size(), 1);
        let t = ExpressionTree::new(Node::binary(Operator::Add, x(0), p(0)), vec![1.0]).unwrap();
        assert_eq!(t.size(), 3);
    }

    #[test]
    fn distinct_symbols_rule() {
        let t = ExpressionTree::new(Node::binary(Operator::Add, x(0), p(0)), vec![1.0]).unwrap();
        assert_eq!(t.distinct_symbols(), 3);
        let t = ExpressionTree::new(Node::binary(Operator::Add, x(0), x(0)), vec![]).unwrap();
        assert_eq!(t.distinct_symbols(), 2);
        let t = ExpressionTree::new(
            Node::binary(
                Operator::Mul,
                Node::binary(Operator::Add, x(0), p(0)),
                Node::binary(Operator::Add, x(1), p(1)),
            ),
            vec![1.0, 2.0],
        )
        .unwrap();
        assert_eq!(t.distinct_symbols(), 5);
    }

    #[test]
    fn rejects_gapped_slots_and_bad_arity() {
        let err = ExpressionTree::new(Node::binary(Operator::Add, p(0), p(2)), vec![0.0; 3]);
        assert_eq!(err, Err(ExprError::NonContiguousSlots { missing: 1 }));
        let err = ExpressionTree::new(Node::Op(Operator::Sin, vec![x(0), x(1)]), vec![]);
        assert!(matches!(err, Err(ExprError::Arity { expected: 1, got: 2, .. })));
        let err = ExpressionTree::new(p(0), vec![]);
        assert!(matches!(err, Err(ExprError::ThetaLength { .. })));
    }

    #[test]
    fn canonicalize_renumbers_in_preorder() {
        let root = Node::binary(Operator::Sub, p(4), Node::binary(Operator::Mul, p(1), p(4)));
        let t = ExpressionTree::canonicalized(&root, &[0.0, 10.0, 0.0, 0.0, 40.0]).unwrap();
        assert_eq!(t.theta(), &[40.0, 10.0]);
        assert_eq!(
            t.root(),
            &Node::binary(Operator::Sub, p(0), Node::binary(Operator::Mul, p(1), p(0)))
        );
        assert!(!t.is_canonical());
    }

    #[test]
    fn preorder_get_and_replace() {
        // (* (+ x0 p0) (sin x1))
        let root = Node::binary(
            Operator::Mul,
            Node::binary(Operator::Add, x(0), p(0)),
            Node::unary(Operator::Sin, x(1)),
        );
        assert_eq!(root.get(2), Some(&x(0)));
        assert_eq!(root.get(5), Some(&x(1)));
        assert_eq!(root.get(6), None);
        let r = root.replaced(4, &x(7)).unwrap();
        assert_eq!(r.get(4), Some(&x(7)));
        assert_eq!(r.size(), 5);
        assert_eq!(root.replaced(0, &x(3)), Some(x(3)));
        assert_eq!(root.replaced(6, &x(3)), None);
    }

    #[test]
    fn depth_levels() {
        assert_eq!(x(0).depth(), 1);
        assert_eq!(Node::unary(Operator::Sin, x(0)).depth(), 2);
    }
}
