//! Expression evaluation.
//!
//! Evaluation is a pure function of the tree and the variable bindings; the
//! same inputs always produce bit-identical IEEE doubles. Two binding styles
//! are supported: a string-keyed map (convenient at API boundaries and in
//! tests) and [`Bindings`], a slice-backed context used by the numerical
//! kernels where variable lookup must not allocate.

use super::{Ast, BinOp, Func, Span, Var};
use std::collections::HashMap;
use thiserror::Error;

/// Evaluation failure. Domain faults carry the byte span of the node that
/// produced them so the message can point back into the coefficient text.
#[derive(Debug, Clone, Error, PartialEq)]
pub enum EvalError {
    #[error("unbound variable `{var}` at bytes {}..{}", span.start, span.end)]
    Unbound { var: Var, span: Span },
    #[error("domain error at bytes {}..{}: {message}", span.start, span.end)]
    Domain { span: Span, message: String },
}

/// Slice-backed variable bindings. A variable is bound when its slot exists:
/// `x3` resolves only if `x.len() >= 3`. Unbound lookups are reported as
/// errors, never defaulted.
#[derive(Debug, Clone, Copy, Default)]
pub struct Bindings<'a> {
    pub s: Option<f64>,
    pub x: &'a [f64],
    pub u1: &'a [f64],
    pub u2: &'a [f64],
    pub u: &'a [f64],
    pub p: &'a [f64],
}

impl<'a> Bindings<'a> {
    fn resolve(&self, var: Var) -> Option<f64> {
        match var {
            Var::S => self.s,
            Var::X(i) => self.x.get(i).copied(),
            Var::U1(i) => self.u1.get(i).copied(),
            Var::U2(i) => self.u2.get(i).copied(),
            Var::U(i) => self.u.get(i).copied(),
            Var::P(i) => self.p.get(i).copied(),
        }
    }
}

/// Evaluate against a string-keyed environment (keys are the surface names:
/// `"s"`, `"x1"`, `"u1_2"`, ...).
pub fn eval(ast: &Ast, env: &HashMap<String, f64>) -> Result<f64, EvalError> {
    eval_node(ast, &|var| env.get(&var.to_string()).copied())
}

/// Evaluate against slice-backed bindings. This is the hot-path entry point.
pub fn eval_ctx(ast: &Ast, bindings: &Bindings<'_>) -> Result<f64, EvalError> {
    eval_node(ast, &|var| bindings.resolve(var))
}

/// A non-NaN result is accepted as-is (infinities are legitimate IEEE
/// outcomes, flagged by callers that require finiteness). A NaN manufactured
/// from non-NaN inputs is a domain fault and is reported, not propagated.
fn guard_nan(value: f64, inputs: &[f64], span: Span, what: &str) -> Result<f64, EvalError> {
    if value.is_nan() && inputs.iter().all(|v| !v.is_nan()) {
        return Err(EvalError::Domain {
            span,
            message: format!("{what} produced NaN from non-NaN inputs"),
        });
    }
    Ok(value)
}

fn eval_node(ast: &Ast, resolve: &impl Fn(Var) -> Option<f64>) -> Result<f64, EvalError> {
    match ast {
        Ast::Num(v, _) => Ok(*v),
        Ast::Var(var, span) => resolve(*var).ok_or(EvalError::Unbound { var: *var, span: *span }),
        Ast::Neg(a, _) => Ok(-eval_node(a, resolve)?),
        Ast::Bin(op, a, b, span) => {
            let x = eval_node(a, resolve)?;
            let y = eval_node(b, resolve)?;
            match op {
                BinOp::Add => Ok(x + y),
                BinOp::Sub => Ok(x - y),
                BinOp::Mul => guard_nan(x * y, &[x, y], *span, "multiplication"),
                BinOp::Div => guard_nan(x / y, &[x, y], *span, "division"),
                BinOp::Pow => guard_nan(x.powf(y), &[x, y], *span, "power"),
            }
        }
        Ast::Call(func, args, span) => {
            let mut vals = [0.0f64; 3];
            for (slot, arg) in vals.iter_mut().zip(args.iter()) {
                *slot = eval_node(arg, resolve)?;
            }
            let a = vals[0];
            match func {
                Func::Sin => Ok(a.sin()),
                Func::Cos => Ok(a.cos()),
                Func::Exp => Ok(a.exp()),
                Func::Log => {
                    if a <= 0.0 {
                        Err(EvalError::Domain {
                            span: *span,
                            message: format!("log of non-positive value {a}"),
                        })
                    } else {
                        Ok(a.ln())
                    }
                }
                Func::Abs => Ok(a.abs()),
                Func::Sqrt => {
                    if a < 0.0 {
                        Err(EvalError::Domain {
                            span: *span,
                            message: format!("sqrt of negative value {a}"),
                        })
                    } else {
                        Ok(a.sqrt())
                    }
                }
                Func::Sign => Ok(if a.is_nan() {
                    f64::NAN
                } else if a > 0.0 {
                    1.0
                } else if a < 0.0 {
                    -1.0
                } else {
                    0.0
                }),
                Func::Step => Ok(if a.is_nan() {
                    f64::NAN
                } else if a >= 0.0 {
                    1.0
                } else {
                    0.0
                }),
                Func::Min => Ok(vals[0].min(vals[1])),
                Func::Max => Ok(vals[0].max(vals[1])),
                Func::Pow => guard_nan(vals[0].powf(vals[1]), &vals[..2], *span, "pow"),
                Func::Clamp => {
                    let (v, lo, hi) = (vals[0], vals[1], vals[2]);
                    if lo > hi {
                        return Err(EvalError::Domain {
                            span: *span,
                            message: format!("clamp bounds inverted: lo={lo} > hi={hi}"),
                        });
                    }
                    Ok(v.max(lo).min(hi))
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::super::parse;
    use super::*;

    fn b<'a>() -> Bindings<'a> {
        Bindings::default()
    }

    #[test]
    fn unbound_variables_are_errors() {
        let ast = parse("x2 + 1").unwrap();
        let x = [0.5];
        let ctx = Bindings { x: &x, ..b() };
        match eval_ctx(&ast, &ctx).unwrap_err() {
            EvalError::Unbound { var, .. } => assert_eq!(var, Var::X(1)),
            other => panic!("expected unbound, got {other:?}"),
        }
    }

    #[test]
    fn domain_errors_are_reported_not_nan() {
        for text in ["log(-1)", "log(0)", "sqrt(-4)", "(-2)^0.5", "0/0"] {
            let ast = parse(text).unwrap();
            assert!(eval_ctx(&ast, &b()).is_err(), "{text} should fault");
        }
    }

    #[test]
    fn infinities_are_allowed() {
        let ast = parse("1/0").unwrap();
        assert_eq!(eval_ctx(&ast, &b()).unwrap(), f64::INFINITY);
        let ast = parse("exp(1000)").unwrap();
        assert_eq!(eval_ctx(&ast, &b()).unwrap(), f64::INFINITY);
    }

    #[test]
    fn evaluation_is_pure() {
        let ast = parse("sin(x1) * exp(s) + u1_1 ^ 2").unwrap();
        let x = [1.2];
        let u1 = [0.7];
        let ctx = Bindings { s: Some(0.3), x: &x, u1: &u1, ..b() };
        let first = eval_ctx(&ast, &ctx).unwrap();
        for _ in 0..8 {
            assert_eq!(eval_ctx(&ast, &ctx).unwrap().to_bits(), first.to_bits());
        }
    }

    #[test]
    fn map_and_ctx_agree() {
        let ast = parse("p1 * (u1_1 - u2_1) + u2_1^2/2 - u1_1^2/2").unwrap();
        let mut env = HashMap::new();
        env.insert("p1".to_string(), 1.0);
        env.insert("u1_1".to_string(), 1.0);
        env.insert("u2_1".to_string(), 0.0);
        let by_map = eval(&ast, &env).unwrap();
        let (p, u1, u2) = ([1.0], [1.0], [0.0]);
        let by_ctx = eval_ctx(&ast, &Bindings { p: &p, u1: &u1, u2: &u2, ..b() }).unwrap();
        assert_eq!(by_map, by_ctx);
        assert_eq!(by_map, 0.5);
    }

    #[test]
    fn clamp_rejects_inverted_bounds() {
        let ast = parse("clamp(0, 1, -1)").unwrap();
        assert!(eval_ctx(&ast, &b()).is_err());
    }
}
