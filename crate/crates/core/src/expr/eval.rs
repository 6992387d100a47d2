use super::{ExprError, Node, Operator};

/// Protected operator semantics. All functions are total on finite inputs
/// and return finite values.
pub mod protected {
    /// Division threshold: `|r| <= DIV_TAU` returns the numerator.
    pub const DIV_TAU: f64 = 1e-6;
    /// Exponent arguments are clamped to `[-EXP_CAP, EXP_CAP]`.
    pub const EXP_CAP: f64 = 700.0;
    /// Offset keeping `log(|base|)` finite at zero.
    pub const POW_LOG_EPS: f64 = 1e-12;
    /// Exponents this close to an integer keep the sign of a negative base.
    pub const POW_INT_TOL: f64 = 1e-9;

    /// Clamps overflowed results to the largest finite magnitude.
    #[inline]
    pub fn saturate(v: f64) -> f64 {
        v.clamp(-f64::MAX, f64::MAX)
    }

    #[inline]
    pub fn div(l: f64, r: f64) -> f64 {
        if r.abs() > DIV_TAU {
            l / r
        } else {
            l
        }
    }

    #[inline]
    pub fn sqrt(v: f64) -> f64 {
        v.abs().sqrt()
    }

    #[inline]
    pub fn exp(v: f64) -> f64 {
        v.clamp(-EXP_CAP, EXP_CAP).exp()
    }

    /// Sign factor applied to `|l|^r`: -1 for a negative base raised to an
    /// odd near-integer exponent, otherwise 1.
    #[inline]
    pub(crate) fn pow_sign(l: f64, r: f64) -> f64 {
        if l < 0.0 {
            let k = r.round();
            if (r - k).abs() < POW_INT_TOL && k.rem_euclid(2.0) == 1.0 {
                return -1.0;
            }
        }
        1.0
    }

    /// `log(|l| + POW_LOG_EPS)`, shared by `pow` and its derivatives.
    #[inline]
    pub(crate) fn pow_log(l: f64) -> f64 {
        (l.abs() + POW_LOG_EPS).ln()
    }

    /// `pow` given `ln_base = pow_log(l)`.
    #[inline(always)]
    pub(crate) fn pow_with_log(l: f64, r: f64, ln_base: f64) -> f64 {
        pow_sign(l, r) * (r * ln_base).clamp(-EXP_CAP, EXP_CAP).exp()
    }

    #[inline]
    pub fn pow(l: f64, r: f64) -> f64 {
        pow_with_log(l, r, pow_log(l))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Instr {
    Var(usize),
    Param(usize),
    /// Operands are tape positions of earlier instructions.
    Unary(Operator, usize),
    Binary(Operator, usize, usize),
}

/// A tree flattened to post-order. Each instruction writes one tape column,
/// which lets the same layout serve forward evaluation and reverse-mode
/// gradients.
#[derive(Debug, Clone)]
pub struct Program {
    instrs: Vec<Instr>,
    /// Whether each instruction depends on a parameter.
    dynamic: Vec<bool>,
    num_params: usize,
    min_dim: usize,
}

/// Runs `$body` with `$o` bound to `$op` as a constant, so per-row loops
/// get one specialised copy per operator instead of a match per element.
macro_rules! per_operator {
    ($op:expr, |$o:ident| $body:expr) => {
        match $op {
            Operator::Add => { let $o = Operator::Add; $body }
            Operator::Sub => { let $o = Operator::Sub; $body }
            Operator::Mul => { let $o = Operator::Mul; $body }
            Operator::Div => { let $o = Operator::Div; $body }
            Operator::Pow => { let $o = Operator::Pow; $body }
            Operator::Sin => { let $o = Operator::Sin; $body }
            Operator::Cos => { let $o = Operator::Cos; $body }
            Operator::Sqrt => { let $o = Operator::Sqrt; $body }
            Operator::Exp => { let $o = Operator::Exp; $body }
        }
    };
}

#[inline(always)]
fn apply(op: Operator, a: f64, b: f64) -> f64 {
    use protected::*;
    let v = match op {
        Operator::Add => a + b,
        Operator::Sub => a - b,
        Operator::Mul => a * b,
        Operator::Div => div(a, b),
        Operator::Pow => pow(a, b),
        Operator::Sin => a.sin(),
        Operator::Cos => a.cos(),
        Operator::Sqrt => sqrt(a),
        Operator::Exp => exp(a),
    };
    saturate(v)
}

/// Local partial derivatives `(d/da, d/db)` of `apply(op, a, b)`.
/// `out` is the saturated output; saturated nodes have zero slope.
#[inline(always)]
fn partials(op: Operator, a: f64, b: f64, out: f64) -> (f64, f64) {
    use protected::*;
    if out.abs() == f64::MAX {
        return (0.0, 0.0);
    }
    let (da, db) = match op {
        Operator::Add => (1.0, 1.0),
        Operator::Sub => (1.0, -1.0),
        Operator::Mul => (b, a),
        Operator::Div => {
            if b.abs() > DIV_TAU {
                (1.0 / b, -a / (b * b))
            } else {
                (1.0, 0.0)
            }
        }
        Operator::Pow => return pow_partials(a, b, out, pow_log(a)),
        Operator::Sin => (a.cos(), 0.0),
        Operator::Cos => (-a.sin(), 0.0),
        Operator::Sqrt => {
            if a == 0.0 {
                (0.0, 0.0)
            } else {
                (a.signum() * 0.5 / out, 0.0)
            }
        }
        Operator::Exp => {
            if a.abs() > EXP_CAP {
                (0.0, 0.0)
            } else {
                (out, 0.0)
            }
        }
    };
    (saturate(da), saturate(db))
}

/// `partials` of `pow` given `ln_base = pow_log(a)`.
#[inline(always)]
fn pow_partials(a: f64, b: f64, out: f64, ln_base: f64) -> (f64, f64) {
    use protected::*;
    if out.abs() == f64::MAX || (b * ln_base).abs() > EXP_CAP {
        return (0.0, 0.0);
    }
    let sgn_a = if a > 0.0 {
        1.0
    } else if a < 0.0 {
        -1.0
    } else {
        0.0
    };
    (saturate(out * b * sgn_a / (a.abs() + POW_LOG_EPS)), saturate(out * ln_base))
}

impl Program {
    pub(super) fn compile(root: &Node, num_params: usize) -> Program {
        fn emit(node: &Node, instrs: &mut Vec<Instr>, min_dim: &mut usize) -> usize {
            let instr = match node {
                Node::Var(i) => {
                    *min_dim = (*min_dim).max(i + 1);
                    Instr::Var(*i)
                }
                Node::Param(s) => Instr::Param(*s),
                Node::Op(op, children) => match children.as_slice() {
                    [c] => {
                        let a = emit(c, instrs, min_dim);
                        Instr::Unary(*op, a)
                    }
                    [l, r] => {
                        let a = emit(l, instrs, min_dim);
                        let b = emit(r, instrs, min_dim);
                        Instr::Binary(*op, a, b)
                    }
                    _ => unreachable!("arity is validated on construction"),
                },
            };
            instrs.push(instr);
            instrs.len() - 1
        }
        let mut instrs = Vec::with_capacity(root.size());
        let mut min_dim = 0;
        emit(root, &mut instrs, &mut min_dim);
        let mut dynamic = Vec::with_capacity(instrs.len());
        for instr in &instrs {
            let d = match *instr {
                Instr::Var(_) => false,
                Instr::Param(_) => true,
                Instr::Unary(_, a) => dynamic[a],
                Instr::Binary(_, a, b) => dynamic[a] || dynamic[b],
            };
            dynamic.push(d);
        }
        Program {
            instrs,
            dynamic,
            num_params,
            min_dim,
        }
    }

    pub fn num_params(&self) -> usize {
        self.num_params
    }

    pub fn len(&self) -> usize {
        self.instrs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.instrs.is_empty()
    }

    /// Checks `theta` and the input layout; returns the row count.
    pub fn check_inputs(&self, theta: &[f64], x: &[f64], dim: usize) -> Result<usize, ExprError> {
        if theta.len() != self.num_params {
            return Err(ExprError::ThetaLength {
                expected: self.num_params,
                got: theta.len(),
            });
        }
        if self.min_dim > dim {
            return Err(ExprError::Dimension {
                index: self.min_dim - 1,
                dim,
            });
        }
        if dim == 0 {
            return Ok(if x.is_empty() { 0 } else { x.len() });
        }
        if x.len() % dim != 0 {
            return Err(ExprError::RaggedInput { len: x.len(), dim });
        }
        Ok(x.len() / dim)
    }

    /// Binds the program to a row-major input matrix. Parameter-free
    /// subtrees are evaluated once here and reused by every later call.
    /// Unchecked: callers must have passed `check_inputs`.
    pub fn workspace(&self, x: &[f64], dim: usize) -> Workspace {
        let n = if dim == 0 { 0 } else { x.len() / dim };
        let len = self.instrs.len();
        let has_pow = self.instrs.iter().any(|i| matches!(i, Instr::Binary(Operator::Pow, ..)));
        let mut ws = Workspace {
            n,
            tape: vec![0.0; len * n],
            adj: Vec::new(),
            pow_logs: if has_pow { vec![0.0; len * n] } else { Vec::new() },
            last_theta: None,
        };
        for (i, instr) in self.instrs.iter().enumerate() {
            if self.dynamic[i] {
                // A parameter-free base keeps its logarithm for good.
                if let Instr::Binary(Operator::Pow, a, _) = *instr {
                    if !self.dynamic[a] {
                        ws.fill_pow_logs(i, a);
                    }
                }
                continue;
            }
            match *instr {
                Instr::Var(j) => {
                    let col = &mut ws.tape[i * n..(i + 1) * n];
                    for (k, c) in col.iter_mut().enumerate() {
                        *c = x[k * dim + j];
                    }
                }
                _ => ws.forward_op(i, *instr, true),
            }
        }
        ws
    }

    pub fn evaluate(&self, theta: &[f64], x: &[f64], dim: usize) -> Result<Vec<f64>, ExprError> {
        self.check_inputs(theta, x, dim)?;
        let mut out = Vec::new();
        self.evaluate_into(theta, x, dim, &mut out);
        Ok(out)
    }

    /// Unchecked evaluation into a reusable buffer. Callers must have passed
    /// `check_inputs`.
    pub fn evaluate_into(&self, theta: &[f64], x: &[f64], dim: usize, out: &mut Vec<f64>) {
        let mut ws = self.workspace(x, dim);
        out.clear();
        out.extend_from_slice(ws.predict(self, theta));
    }

    /// Sum of squared residuals against `y`. Unchecked like `evaluate_into`.
    pub fn sse(&self, theta: &[f64], x: &[f64], dim: usize, y: &[f64]) -> f64 {
        self.workspace(x, dim).sse(self, theta, y)
    }

    /// Sum of squared residuals and its gradient with respect to `theta`,
    /// by reverse accumulation over the tape.
    pub fn sse_with_gradient(
        &self,
        theta: &[f64],
        x: &[f64],
        dim: usize,
        y: &[f64],
        grad: &mut [f64],
    ) -> f64 {
        self.workspace(x, dim).sse_with_gradient(self, theta, y, grad)
    }
}

fn same_bits(a: &[f64], b: &[f64]) -> bool {
    a.len() == b.len() && a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits())
}

/// Column-major tape for one program bound to one input matrix: column `i`
/// holds instruction `i` for every row.
#[derive(Debug, Clone)]
pub struct Workspace {
    n: usize,
    tape: Vec<f64>,
    adj: Vec<f64>,
    /// `pow_log` of the base column of every `pow` instruction.
    pow_logs: Vec<f64>,
    /// Parameters of the last forward pass; the tape is reused when they
    /// repeat, as they do after a line search accepts a step.
    last_theta: Option<Vec<f64>>,
}

impl Workspace {
    pub fn rows(&self) -> usize {
        self.n
    }

    fn fill_pow_logs(&mut self, i: usize, a: usize) {
        let n = self.n;
        let base = &self.tape[a * n..(a + 1) * n];
        for (l, &v) in self.pow_logs[i * n..(i + 1) * n].iter_mut().zip(base) {
            *l = protected::pow_log(v);
        }
    }

    /// Evaluates instruction `i`; `fresh_base` recomputes the cached
    /// logarithm of a `pow` base.
    fn forward_op(&mut self, i: usize, instr: Instr, fresh_base: bool) {
        let n = self.n;
        if let Instr::Binary(Operator::Pow, a, b) = instr {
            if fresh_base {
                self.fill_pow_logs(i, a);
            }
            let (done, rest) = self.tape.split_at_mut(i * n);
            let (ca, cb) = (&done[a * n..(a + 1) * n], &done[b * n..(b + 1) * n]);
            let logs = &self.pow_logs[i * n..(i + 1) * n];
            for (((out, &va), &vb), &lg) in rest[..n].iter_mut().zip(ca).zip(cb).zip(logs) {
                *out = protected::saturate(protected::pow_with_log(va, vb, lg));
            }
            return;
        }
        let (done, rest) = self.tape.split_at_mut(i * n);
        let out = &mut rest[..n];
        match instr {
            Instr::Unary(op, a) => {
                let ca = &done[a * n..(a + 1) * n];
                per_operator!(op, |o| for (out, &va) in out.iter_mut().zip(ca) {
                    *out = apply(o, va, 0.0);
                })
            }
            Instr::Binary(op, a, b) => {
                let ca = &done[a * n..(a + 1) * n];
                let cb = &done[b * n..(b + 1) * n];
                per_operator!(op, |o| for ((out, &va), &vb) in out.iter_mut().zip(ca).zip(cb) {
                    *out = apply(o, va, vb);
                })
            }
            Instr::Var(_) | Instr::Param(_) => unreachable!("leaves are filled directly"),
        }
    }

    fn forward(&mut self, prog: &Program, theta: &[f64]) {
        if self.last_theta.as_deref().is_some_and(|t| same_bits(t, theta)) {
            return;
        }
        let n = self.n;
        for (i, instr) in prog.instrs.iter().enumerate() {
            if !prog.dynamic[i] {
                continue;
            }
            match *instr {
                Instr::Param(s) => self.tape[i * n..(i + 1) * n].fill(theta[s]),
                Instr::Binary(_, a, _) => self.forward_op(i, *instr, prog.dynamic[a]),
                _ => self.forward_op(i, *instr, true),
            }
        }
        self.remember(theta);
    }

    fn remember(&mut self, theta: &[f64]) {
        match &mut self.last_theta {
            Some(t) => {
                t.clear();
                t.extend_from_slice(theta);
            }
            None => self.last_theta = Some(theta.to_vec()),
        }
    }

    fn output(&self, prog: &Program) -> &[f64] {
        let last = prog.instrs.len() - 1;
        &self.tape[last * self.n..(last + 1) * self.n]
    }

    /// Predictions at `theta`, valid until the next call.
    pub fn predict(&mut self, prog: &Program, theta: &[f64]) -> &[f64] {
        self.forward(prog, theta);
        self.output(prog)
    }

    pub fn sse(&mut self, prog: &Program, theta: &[f64], y: &[f64]) -> f64 {
        self.forward(prog, theta);
        self.output(prog)
            .iter()
            .zip(y)
            .map(|(p, t)| {
                let r = p - t;
                r * r
            })
            .sum()
    }

    pub fn sse_with_gradient(&mut self, prog: &Program, theta: &[f64], y: &[f64], grad: &mut [f64]) -> f64 {
        let n = self.n;
        let len = prog.instrs.len();
        grad.iter_mut().for_each(|g| *g = 0.0);
        self.forward(prog, theta);
        self.adj.resize(len * n, 0.0);
        let mut total = 0.0;
        {
            let out = &self.tape[(len - 1) * n..len * n];
            let seed = &mut self.adj[(len - 1) * n..len * n];
            for ((s, &p), &t) in seed.iter_mut().zip(out).zip(y) {
                let r = p - t;
                total += r * r;
                *s = 2.0 * r;
            }
        }
        if !prog.dynamic[len - 1] {
            return total;
        }
        // Every instruction has exactly one consumer, so each adjoint column
        // is written once by its parent before it is read.
        let tape = &self.tape;
        for i in (0..len).rev() {
            if !prog.dynamic[i] {
                continue;
            }
            let (lower, upper) = self.adj.split_at_mut(i * n);
            let g = &upper[..n];
            let to = &tape[i * n..(i + 1) * n];
            match prog.instrs[i] {
                Instr::Var(_) => {}
                Instr::Param(s) => grad[s] += g.iter().sum::<f64>(),
                Instr::Unary(op, a) => {
                    let ta = &tape[a * n..(a + 1) * n];
                    let ga = &mut lower[a * n..(a + 1) * n];
                    per_operator!(op, |o| for k in 0..n {
                        ga[k] = g[k] * partials(o, ta[k], 0.0, to[k]).0;
                    })
                }
                Instr::Binary(op, a, b) => {
                    let ta = &tape[a * n..(a + 1) * n];
                    let tb = &tape[b * n..(b + 1) * n];
                    let (da_on, db_on) = (prog.dynamic[a], prog.dynamic[b]);
                    // a < b < i
                    let (la, lb) = lower.split_at_mut(b * n);
                    let ga = &mut la[a * n..(a + 1) * n];
                    let gb = &mut lb[..n];
                    if op == Operator::Pow {
                        let logs = &self.pow_logs[i * n..(i + 1) * n];
                        for k in 0..n {
                            let (da, db) = pow_partials(ta[k], tb[k], to[k], logs[k]);
                            if da_on {
                                ga[k] = g[k] * da;
                            }
                            if db_on {
                                gb[k] = g[k] * db;
                            }
                        }
                        continue;
                    }
                    per_operator!(op, |o| for k in 0..n {
                        let (da, db) = partials(o, ta[k], tb[k], to[k]);
                        if da_on {
                            ga[k] = g[k] * da;
                        }
                        if db_on {
                            gb[k] = g[k] * db;
                        }
                    })
                }
            }
        }
        total
    }
}

#[cfg(test)]
mod tests {
    use super::protected::*;
    use super::*;
    use crate::expr::{parse, ExpressionTree};

    fn eval1(src: &str, row: &[f64]) -> f64 {
        let t = parse(src).unwrap();
        t.evaluate_embedded(row, row.len()).unwrap()[0]
    }

    #[test]
    fn protected_division_returns_numerator_below_tau() {
        assert_eq!(eval1("(/ x0 x1)", &[5.0, 1e-9]), 5.0);
        assert_eq!(eval1("(/ x0 x1)", &[5.0, -1e-6]), 5.0);
        assert_eq!(eval1("(/ x0 x1)", &[5.0, 2.0]), 2.5);
    }

    #[test]
    fn protected_sqrt_uses_absolute_value() {
        assert_eq!(eval1("(sqrt x0)", &[-4.0]), 2.0);
    }

    #[test]
    fn sin_of_zero() {
        assert_eq!(eval1("(sin x0)", &[0.0]), 0.0);
    }

    #[test]
    fn exp_is_capped() {
        assert_eq!(exp(1e6), 700f64.exp());
        assert_eq!(exp(-1e6), (-700f64).exp());
        assert!(eval1("(exp x0)", &[1e300]).is_finite());
    }

    #[test]
    fn pow_sign_handling() {
        // integer exponent keeps the sign of a negative base
        assert!((pow(-2.0, 3.0) + 8.0).abs() < 1e-9);
        assert!((pow(-2.0, 2.0) - 4.0).abs() < 1e-9);
        // non-integer exponent uses |base|
        assert!((pow(-4.0, 0.5) - 2.0).abs() < 1e-9);
        assert!((pow(-2.0, 3.0 + 1e-10) + 8.0).abs() < 1e-6);
        assert!(pow(-2.0, 3.0 + 1e-6) > 0.0);
        assert!(pow(0.0, 2.0) < 1e-20);
        assert!((pow(0.0, -5.0) / 1e60 - 1.0).abs() < 1e-9);
        assert_eq!(pow(0.0, -100.0), 700f64.exp());
        assert_eq!(pow(1e10, 1e10), 700f64.exp());
    }

    #[test]
    fn overflow_saturates() {
        let v = eval1("(* (exp x0) (exp x0))", &[800.0]);
        assert_eq!(v, f64::MAX);
        let v = eval1("(- (* (exp x0) (exp x0)) (* (exp x0) (- 0 (exp x0))))", &[800.0]);
        assert!(v.is_finite());
    }

    #[test]
    fn dimension_and_theta_errors() {
        let t = parse("(+ x2 1.0)").unwrap();
        assert!(matches!(
            t.evaluate_embedded(&[1.0, 2.0], 2),
            Err(ExprError::Dimension { index: 2, dim: 2 })
        ));
        assert!(matches!(
            t.evaluate(&[], &[1.0, 2.0, 3.0], 3),
            Err(ExprError::ThetaLength { expected: 1, got: 0 })
        ));
        assert!(matches!(
            t.evaluate_embedded(&[1.0, 2.0, 3.0, 4.0], 3),
            Err(ExprError::RaggedInput { .. })
        ));
    }

    /// Plain recursive evaluation, one row at a time.
    fn reference(node: &Node, theta: &[f64], row: &[f64]) -> f64 {
        match node {
            Node::Var(i) => row[*i],
            Node::Param(s) => theta[*s],
            Node::Op(op, c) => {
                let a = reference(&c[0], theta, row);
                let b = c.get(1).map_or(0.0, |n| reference(n, theta, row));
                apply(*op, a, b)
            }
        }
    }

    #[test]
    fn reused_workspace_matches_recursive_evaluation() {
        use crate::poolgen::{random_subtree, GrowConfig};
        use crate::rng::substream;
        use rand::Rng;
        let mut r = substream(11, "eval-reference", 0);
        let dim = 3;
        let x: Vec<f64> = (0..40 * dim).map(|_| r.random_range(-3.0..3.0)).collect();
        for _ in 0..200 {
            let t = random_subtree(dim, &GrowConfig::default(), &mut r);
            let prog = t.compile();
            let mut ws = prog.workspace(&x, dim);
            for _ in 0..3 {
                let theta: Vec<f64> = (0..t.num_params()).map(|_| r.random_range(-4.0..4.0)).collect();
                let got = ws.predict(&prog, &theta).to_vec();
                for (k, row) in x.chunks(dim).enumerate() {
                    assert_eq!(got[k].to_bits(), reference(t.root(), &theta, row).to_bits(), "{}", t.to_sexpr());
                }
            }
        }
    }

    fn fd_sse_grad(t: &ExpressionTree, theta: &[f64], x: &[f64], dim: usize, y: &[f64]) -> Vec<f64> {
        let prog = t.compile();
        (0..theta.len())
            .map(|i| {
                let h = 1e-6 * theta[i].abs().max(1.0);
                let mut tp = theta.to_vec();
                tp[i] += h;
                let fp = prog.sse(&tp, x, dim, y);
                tp[i] -= 2.0 * h;
                let fm = prog.sse(&tp, x, dim, y);
                (fp - fm) / (2.0 * h)
            })
            .collect()
    }

    #[test]
    fn reverse_gradient_matches_finite_differences() {
        let cases = [
            "(+ (* 1.5 (sin (* 0.7 x0))) (/ x1 (+ 2.0 (cos x0))))",
            "(* (exp (* -0.3 x0)) (pow x1 2.2))",
            "(- (sqrt (+ x0 0.4)) (* 1.1 (pow (- x1 3.0) 2.0)))",
            "(/ (+ x0 0.5) (- x1 4.5))",
        ];
        let x: Vec<f64> = (0..40).map(|k| 0.3 + 0.137 * k as f64).collect();
        let y: Vec<f64> = (0..20).map(|k| (k as f64 * 0.41).sin()).collect();
        for src in cases {
            let t = parse(src).unwrap();
            let prog = t.compile();
            let mut g = vec![0.0; t.num_params()];
            prog.sse_with_gradient(t.theta(), &x, 2, &y, &mut g);
            let fd = fd_sse_grad(&t, t.theta(), &x, 2, &y);
            for (a, b) in g.iter().zip(&fd) {
                assert!((a - b).abs() <= 1e-5 * (1.0 + b.abs()), "{src}: {a} vs {b}");
            }
        }
    }
}
