//! S-expression text format.
//!
//! ```text
//! expr  := "(" op expr+ ")" | var | param
//! var   := "x" digits
//! param := "(p " slot ")" | float literal
//! ```
//!
//! Inline literals become parameter slots numbered in order of appearance.
//! `(p k)` references take their values from a separately supplied vector.
//! The two notations cannot be mixed within one expression.

use super::{ExprError, ExpressionTree, Node, Operator};

#[derive(Debug, Clone, Copy, PartialEq)]
enum Tok<'a> {
    Open,
    Close,
    Atom(&'a str),
}

fn tokenize(text: &str) -> Vec<(usize, Tok<'_>)> {
    let mut out = Vec::new();
    let mut start = None;
    for (i, c) in text.char_indices() {
        let delim = c == '(' || c == ')' || c.is_whitespace();
        if delim {
            if let Some(s) = start.take() {
                out.push((s, Tok::Atom(&text[s..i])));
            }
            match c {
                '(' => out.push((i, Tok::Open)),
                ')' => out.push((i, Tok::Close)),
                _ => {}
            }
        } else if start.is_none() {
            start = Some(i);
        }
    }
    if let Some(s) = start {
        out.push((s, Tok::Atom(&text[s..])));
    }
    out
}

#[derive(Default)]
struct Parser<'a> {
    toks: Vec<(usize, Tok<'a>)>,
    at: usize,
    end: usize,
    literals: Vec<f64>,
    max_slot: Option<usize>,
}

impl<'a> Parser<'a> {
    fn peek(&self) -> Option<(usize, Tok<'a>)> {
        self.toks.get(self.at).copied()
    }

    fn next(&mut self) -> Result<(usize, Tok<'a>), ExprError> {
        let t = self.peek().ok_or(ExprError::Syntax {
            pos: self.end,
            msg: "unexpected end of input".into(),
        })?;
        self.at += 1;
        Ok(t)
    }

    fn mixed(pos: usize) -> ExprError {
        ExprError::Syntax {
            pos,
            msg: "inline literals and (p k) references cannot be mixed".into(),
        }
    }

    fn expr(&mut self) -> Result<Node, ExprError> {
        match self.next()? {
            (pos, Tok::Close) => Err(ExprError::Syntax {
                pos,
                msg: "unexpected `)`".into(),
            }),
            (pos, Tok::Atom(a)) => self.atom(pos, a),
            (_, Tok::Open) => {
                let (pos, head) = self.next()?;
                let head = match head {
                    Tok::Atom(h) => h,
                    _ => {
                        return Err(ExprError::Syntax {
                            pos,
                            msg: "expected operator after `(`".into(),
                        })
                    }
                };
                if head == "p" {
                    return self.slot_ref(pos);
                }
                let op = Operator::from_symbol(head).ok_or_else(|| ExprError::UnknownSymbol {
                    pos,
                    symbol: head.to_string(),
                })?;
                let mut children = Vec::new();
                loop {
                    match self.peek() {
                        Some((_, Tok::Close)) => {
                            self.at += 1;
                            break;
                        }
                        Some(_) => children.push(self.expr()?),
                        None => {
                            return Err(ExprError::Syntax {
                                pos: self.end,
                                msg: "unclosed `(`".into(),
                            })
                        }
                    }
                }
                if children.len() != op.arity() {
                    return Err(ExprError::Arity {
                        op,
                        expected: op.arity(),
                        got: children.len(),
                    });
                }
                Ok(Node::Op(op, children))
            }
        }
    }

    fn slot_ref(&mut self, pos: usize) -> Result<Node, ExprError> {
        if !self.literals.is_empty() {
            return Err(Self::mixed(pos));
        }
        let (spos, tok) = self.next()?;
        let slot = match tok {
            Tok::Atom(a) => a.parse::<usize>().map_err(|_| ExprError::Syntax {
                pos: spos,
                msg: format!("invalid parameter slot `{a}`"),
            })?,
            _ => {
                return Err(ExprError::Syntax {
                    pos: spos,
                    msg: "expected parameter slot".into(),
                })
            }
        };
        match self.next()? {
            (_, Tok::Close) => {}
            (cpos, _) => {
                return Err(ExprError::Syntax {
                    pos: cpos,
                    msg: "expected `)` after parameter slot".into(),
                })
            }
        }
        self.max_slot = Some(self.max_slot.map_or(slot, |m| m.max(slot)));
        Ok(Node::Param(slot))
    }

    fn atom(&mut self, pos: usize, a: &str) -> Result<Node, ExprError> {
        if let Some(digits) = a.strip_prefix('x') {
            if !digits.is_empty() && digits.bytes().all(|b| b.is_ascii_digit()) {
                let index = digits.parse::<usize>().map_err(|_| ExprError::Syntax {
                    pos,
                    msg: format!("feature index `{digits}` out of range"),
                })?;
                return Ok(Node::Var(index));
            }
        }
        let starts_numeric = a
            .bytes()
            .next()
            .is_some_and(|b| b.is_ascii_digit() || b == b'-' || b == b'+' || b == b'.');
        if starts_numeric {
            if let Ok(v) = a.parse::<f64>() {
                if !v.is_finite() {
                    return Err(ExprError::Syntax {
                        pos,
                        msg: format!("non-finite literal `{a}`"),
                    });
                }
                if self.max_slot.is_some() {
                    return Err(Self::mixed(pos));
                }
                self.literals.push(v);
                return Ok(Node::Param(self.literals.len() - 1));
            }
        }
        if Operator::from_symbol(a).is_some() {
            return Err(ExprError::Syntax {
                pos,
                msg: format!("operator `{a}` must follow `(`"),
            });
        }
        Err(ExprError::UnknownSymbol {
            pos,
            symbol: a.to_string(),
        })
    }
}

fn parse_inner(text: &str) -> Result<(Node, Vec<f64>, Option<usize>), ExprError> {
    let mut p = Parser {
        toks: tokenize(text),
        end: text.len(),
        ..Default::default()
    };
    let root = p.expr()?;
    if let Some((pos, _)) = p.peek() {
        return Err(ExprError::Syntax {
            pos,
            msg: "trailing input after expression".into(),
        });
    }
    Ok((root, p.literals, p.max_slot))
}

/// Parses an expression. Inline literals become the tree's `theta`;
/// `(p k)` references are initialised to zero.
pub fn parse(text: &str) -> Result<ExpressionTree, ExprError> {
    let (root, literals, max_slot) = parse_inner(text)?;
    match max_slot {
        Some(m) => ExpressionTree::new(root, vec![0.0; m + 1]),
        None => ExpressionTree::new(root, literals),
    }
}

/// Parses an expression written with `(p k)` references and attaches
/// `theta`. Inline literals are rejected unless `theta` is empty.
pub fn parse_with_theta(text: &str, theta: &[f64]) -> Result<ExpressionTree, ExprError> {
    let (root, literals, max_slot) = parse_inner(text)?;
    if max_slot.is_none() && !literals.is_empty() {
        if !theta.is_empty() {
            return Err(Parser::mixed(0));
        }
        return ExpressionTree::new(root, literals);
    }
    ExpressionTree::new(root, theta.to_vec())
}

pub(super) fn write_literal(v: f64, out: &mut String) {
    out.push_str(&format!("{v:.16e}"));
}

pub(super) fn write_node(
    node: &Node,
    param: &mut impl FnMut(usize, &mut String),
    out: &mut String,
) {
    match node {
        Node::Var(i) => {
            out.push('x');
            out.push_str(&i.to_string());
        }
        Node::Param(s) => param(*s, out),
        Node::Op(op, children) => {
            out.push('(');
            out.push_str(op.symbol());
            for c in children {
                out.push(' ');
                write_node(c, param, out);
            }
            out.push(')');
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn parses_slot_form() {
        let t = parse("(+ x0 (p 0))").unwrap();
        assert_eq!(
            t.root(),
            &Node::binary(Operator::Add, Node::Var(0), Node::Param(0))
        );
        assert_eq!(t.theta(), &[0.0]);
        let t = parse_with_theta("(* (p 0) (+ x1 (p 1)))", &[2.0, 3.0]).unwrap();
        assert_eq!(t.theta(), &[2.0, 3.0]);
    }

    #[test]
    fn arity_mismatch() {
        assert!(matches!(
            parse("(sin x0 x1)"),
            Err(ExprError::Arity {
                op: Operator::Sin,
                expected: 1,
                got: 2
            })
        ));
        assert!(matches!(parse("(+ x0)"), Err(ExprError::Arity { .. })));
    }

    #[test]
    fn syntax_errors_carry_positions() {
        assert!(matches!(parse("(+ x0 x1"), Err(ExprError::Syntax { pos: 8, .. })));
        assert!(matches!(parse("(+ x0 x1))"), Err(ExprError::Syntax { pos: 9, .. })));
        assert!(matches!(
            parse("(tan x0)"),
            Err(ExprError::UnknownSymbol { pos: 1, .. })
        ));
        assert!(matches!(
            parse("(+ y0 1)"),
            Err(ExprError::UnknownSymbol { pos: 3, .. })
        ));
        assert!(matches!(parse("(+ x0 (p 0) 1.0)"), Err(ExprError::Syntax { .. })));
        assert!(matches!(parse("(+ 1.0 (p 0))"), Err(ExprError::Syntax { .. })));
        assert!(matches!(parse("(+ x0 inf)"), Err(ExprError::UnknownSymbol { .. })));
    }

    #[test]
    fn accepts_unicode_minus() {
        let t = parse("(\u{2212} x0 1.5)").unwrap();
        assert_eq!(t.to_sexpr(), "(- x0 1.5000000000000000e0)");
    }

    #[test]
    fn canonical_print_is_fixed_point() {
        let s = "(+ (* -2.5000000000000000e0 x0) (sin (pow x1 3.0000000000000000e0)))";
        assert_eq!(parse(s).unwrap().to_sexpr(), s);
    }

    fn arb_node() -> impl Strategy<Value = Node> {
        let leaf = prop_oneof![
            (0usize..4).prop_map(Node::Var),
            Just(Node::Param(usize::MAX)),
        ];
        leaf.prop_recursive(6, 48, 2, |inner| {
            (
                proptest::sample::select(Operator::ALL.to_vec()),
                inner.clone(),
                inner,
            )
                .prop_map(|(op, a, b)| {
                    if op.arity() == 1 {
                        Node::unary(op, a)
                    } else {
                        Node::binary(op, a, b)
                    }
                })
        })
    }

    /// Numbers placeholder params in pre-order.
    fn number(node: &Node, next: &mut usize) -> Node {
        match node {
            Node::Param(_) => {
                *next += 1;
                Node::Param(*next - 1)
            }
            Node::Var(i) => Node::Var(*i),
            Node::Op(op, c) => Node::Op(*op, c.iter().map(|c| number(c, next)).collect()),
        }
    }

    proptest! {
        #[test]
        fn round_trip_preserves_structure_and_theta(
            node in arb_node(),
            vals in proptest::collection::vec(-1e6f64..1e6, 64),
        ) {
            let mut p = 0;
            let root = number(&node, &mut p);
            let tree = ExpressionTree::new(root, vals[..p].to_vec()).unwrap();
            prop_assert!(tree.is_canonical());
            let back = parse(&tree.to_sexpr()).unwrap();
            prop_assert_eq!(&back, &tree);
            let back = parse_with_theta(&tree.to_slot_sexpr(), tree.theta()).unwrap();
            prop_assert_eq!(&back, &tree);
        }
    }
}
