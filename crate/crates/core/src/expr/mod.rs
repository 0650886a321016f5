//! Arithmetic expression language for model coefficients.
//!
//! Drift, diffusion and cost coefficients are supplied as plain-text
//! formulas over a fixed vocabulary of variables:
//!
//! * `s`            — time,
//! * `x1 .. xd`     — state coordinates,
//! * `u1_1 .. u1_k` — first player's control coordinates,
//! * `u2_1 .. u2_k` — second player's control coordinates,
//! * `u_1 .. u_k`   — the control in single-controller problems,
//! * `p1 .. pd`     — gradient coordinates (costate slots).
//!
//! Grammar (binary operators are left-associative within a level, `^` is
//! right-associative, unary minus binds tighter than `^`):
//!
//! ```text
//! expr    := term (('+'|'-') term)*
//! term    := factor (('*'|'/') factor)*
//! factor  := power ('^' factor)?
//! power   := '-' power | number | variable | call | '(' expr ')'
//! call    := name '(' expr (',' expr)* ')'
//! ```
//!
//! Built-in functions: `sin cos exp log abs sqrt sign step` (unary),
//! `min max pow` (binary), `clamp` (ternary). `step(a)` is the right-continuous
//! Heaviside function: 1 for `a >= 0`, 0 otherwise.
//!
//! Evaluation is pure and deterministic IEEE double arithmetic. Domain
//! faults (`log` of a non-positive value, `sqrt` of a negative value, or any
//! operation manufacturing a NaN from non-NaN inputs) are reported as errors
//! carrying the byte span of the offending node rather than silently
//! propagating NaN.

mod eval;
mod parse;

pub use eval::{eval, eval_ctx, Bindings, EvalError};
pub use parse::{parse, ParseError};

use std::collections::BTreeSet;
use std::fmt;

/// Byte range of a node in the original source text.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Span {
    pub start: usize,
    pub end: usize,
}

impl Span {
    pub fn new(start: usize, end: usize) -> Self {
        Span { start, end }
    }
}

/// A variable reference. Indices are stored zero-based; the surface syntax
/// is one-based (`x1` is `Var::X(0)`).
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Var {
    /// Time `s`.
    S,
    /// State coordinate `x{i+1}`.
    X(usize),
    /// First player's control coordinate `u1_{i+1}`.
    U1(usize),
    /// Second player's control coordinate `u2_{i+1}`.
    U2(usize),
    /// Single-controller coordinate `u_{i+1}`.
    U(usize),
    /// Gradient coordinate `p{i+1}`.
    P(usize),
}

impl fmt::Display for Var {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Var::S => write!(f, "s"),
            Var::X(i) => write!(f, "x{}", i + 1),
            Var::U1(i) => write!(f, "u1_{}", i + 1),
            Var::U2(i) => write!(f, "u2_{}", i + 1),
            Var::U(i) => write!(f, "u_{}", i + 1),
            Var::P(i) => write!(f, "p{}", i + 1),
        }
    }
}

/// Built-in function.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Func {
    Sin,
    Cos,
    Exp,
    Log,
    Abs,
    Sqrt,
    Sign,
    Step,
    Min,
    Max,
    Pow,
    Clamp,
}

impl Func {
    pub fn name(self) -> &'static str {
        match self {
            Func::Sin => "sin",
            Func::Cos => "cos",
            Func::Exp => "exp",
            Func::Log => "log",
            Func::Abs => "abs",
            Func::Sqrt => "sqrt",
            Func::Sign => "sign",
            Func::Step => "step",
            Func::Min => "min",
            Func::Max => "max",
            Func::Pow => "pow",
            Func::Clamp => "clamp",
        }
    }

    pub fn arity(self) -> usize {
        match self {
            Func::Sin
            | Func::Cos
            | Func::Exp
            | Func::Log
            | Func::Abs
            | Func::Sqrt
            | Func::Sign
            | Func::Step => 1,
            Func::Min | Func::Max | Func::Pow => 2,
            Func::Clamp => 3,
        }
    }

    pub fn from_name(name: &str) -> Option<Func> {
        Some(match name {
            "sin" => Func::Sin,
            "cos" => Func::Cos,
            "exp" => Func::Exp,
            "log" => Func::Log,
            "abs" => Func::Abs,
            "sqrt" => Func::Sqrt,
            "sign" => Func::Sign,
            "step" => Func::Step,
            "min" => Func::Min,
            "max" => Func::Max,
            "pow" => Func::Pow,
            "clamp" => Func::Clamp,
            _ => return None,
        })
    }
}

/// Binary operator.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BinOp {
    Add,
    Sub,
    Mul,
    Div,
    Pow,
}

impl BinOp {
    fn symbol(self) -> &'static str {
        match self {
            BinOp::Add => "+",
            BinOp::Sub => "-",
            BinOp::Mul => "*",
            BinOp::Div => "/",
            BinOp::Pow => "^",
        }
    }

    /// Printing precedence level (higher binds tighter).
    fn prec(self) -> u8 {
        match self {
            BinOp::Add | BinOp::Sub => 1,
            BinOp::Mul | BinOp::Div => 2,
            BinOp::Pow => 3,
        }
    }
}

/// Parsed expression tree. Every node carries the byte span it was read
/// from so that evaluation faults can point back into the source text.
#[derive(Debug, Clone)]
pub enum Ast {
    Num(f64, Span),
    Var(Var, Span),
    Neg(Box<Ast>, Span),
    Bin(BinOp, Box<Ast>, Box<Ast>, Span),
    Call(Func, Vec<Ast>, Span),
}

impl Ast {
    pub fn span(&self) -> Span {
        match self {
            Ast::Num(_, s) | Ast::Var(_, s) | Ast::Neg(_, s) | Ast::Bin(_, _, _, s) | Ast::Call(_, _, s) => *s,
        }
    }

    /// The set of variables occurring in the expression.
    pub fn free_vars(&self) -> BTreeSet<Var> {
        let mut out = BTreeSet::new();
        self.collect_vars(&mut out);
        out
    }

    fn collect_vars(&self, out: &mut BTreeSet<Var>) {
        match self {
            Ast::Num(..) => {}
            Ast::Var(v, _) => {
                out.insert(*v);
            }
            Ast::Neg(a, _) => a.collect_vars(out),
            Ast::Bin(_, a, b, _) => {
                a.collect_vars(out);
                b.collect_vars(out);
            }
            Ast::Call(_, args, _) => {
                for a in args {
                    a.collect_vars(out);
                }
            }
        }
    }

    /// True when the expression mentions no variable at all.
    pub fn is_constant(&self) -> bool {
        self.free_vars().is_empty()
    }

    /// If the node is a literal, its value.
    pub fn as_num(&self) -> Option<f64> {
        match self {
            Ast::Num(v, _) => Some(*v),
            _ => None,
        }
    }

    /// Structural equality, ignoring spans. This is the identity used by the
    /// print/re-parse round-trip guarantee.
    pub fn structurally_eq(&self, other: &Ast) -> bool {
        match (self, other) {
            (Ast::Num(a, _), Ast::Num(b, _)) => a.to_bits() == b.to_bits(),
            (Ast::Var(a, _), Ast::Var(b, _)) => a == b,
            (Ast::Neg(a, _), Ast::Neg(b, _)) => a.structurally_eq(b),
            (Ast::Bin(op_a, la, ra, _), Ast::Bin(op_b, lb, rb, _)) => {
                op_a == op_b && la.structurally_eq(lb) && ra.structurally_eq(rb)
            }
            (Ast::Call(fa, aa, _), Ast::Call(fb, ab, _)) => {
                fa == fb && aa.len() == ab.len() && aa.iter().zip(ab).all(|(x, y)| x.structurally_eq(y))
            }
            _ => false,
        }
    }

    /// Collapse every variable-free subtree into a literal. Subtrees whose
    /// evaluation faults (domain errors) or overflows to a non-finite value
    /// are left intact so the fault is reported at evaluation time with its
    /// original span.
    pub fn fold_constants(self) -> Ast {
        match self {
            Ast::Num(..) | Ast::Var(..) => self,
            Ast::Neg(a, sp) => {
                let a = a.fold_constants();
                if let Some(v) = a.as_num() {
                    return Ast::Num(-v, sp);
                }
                Ast::Neg(Box::new(a), sp)
            }
            Ast::Bin(op, a, b, sp) => {
                let a = a.fold_constants();
                let b = b.fold_constants();
                let node = Ast::Bin(op, Box::new(a), Box::new(b), sp);
                node.try_fold_literal()
            }
            Ast::Call(f, args, sp) => {
                let args: Vec<Ast> = args.into_iter().map(Ast::fold_constants).collect();
                let node = Ast::Call(f, args, sp);
                node.try_fold_literal()
            }
        }
    }

    fn try_fold_literal(self) -> Ast {
        let all_literal = match &self {
            Ast::Bin(_, a, b, _) => a.as_num().is_some() && b.as_num().is_some(),
            Ast::Call(_, args, _) => args.iter().all(|a| a.as_num().is_some()),
            _ => false,
        };
        if !all_literal {
            return self;
        }
        let empty = Bindings::default();
        match eval_ctx(&self, &empty) {
            Ok(v) if v.is_finite() => Ast::Num(v, self.span()),
            _ => self,
        }
    }
}

/// Render the expression back to source text. The output re-parses to a
/// structurally identical tree: parentheses are inserted exactly where the
/// precedence and associativity rules would otherwise regroup the nodes.
impl fmt::Display for Ast {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        self.print(f, 0)
    }
}

impl Ast {
    /// Printing precedence of this node (higher binds tighter).
    fn print_prec(&self) -> u8 {
        match self {
            Ast::Num(..) | Ast::Var(..) | Ast::Call(..) => 5,
            Ast::Neg(..) => 4,
            Ast::Bin(op, ..) => op.prec(),
        }
    }

    fn print(&self, f: &mut fmt::Formatter<'_>, min_prec: u8) -> fmt::Result {
        let prec = self.print_prec();
        let needs_parens = prec < min_prec;
        if needs_parens {
            write!(f, "(")?;
        }
        match self {
            Ast::Num(v, _) => write!(f, "{v}")?,
            Ast::Var(v, _) => write!(f, "{v}")?,
            Ast::Neg(a, _) => {
                write!(f, "-")?;
                a.print(f, 4)?;
            }
            Ast::Bin(op, a, b, _) => {
                let p = op.prec();
                // Left-associative levels reproduce `a op b op c` as-is but
                // parenthesize a right-leaning tree; `^` is the mirror image.
                let (lp, rp) = match op {
                    BinOp::Pow => (p + 1, p),
                    _ => (p, p + 1),
                };
                a.print(f, lp)?;
                write!(f, " {} ", op.symbol())?;
                b.print(f, rp)?;
            }
            Ast::Call(func, args, _) => {
                write!(f, "{}(", func.name())?;
                for (i, a) in args.iter().enumerate() {
                    if i > 0 {
                        write!(f, ", ")?;
                    }
                    a.print(f, 0)?;
                }
                write!(f, ")")?;
            }
        }
        if needs_parens {
            write!(f, ")")?;
        }
        Ok(())
    }
}
