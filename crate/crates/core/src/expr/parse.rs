//! Tokenizer and Pratt parser for the coefficient expression language.

use super::{Ast, BinOp, Func, Span, Var};
use thiserror::Error;

/// Parse failure, pointing at the byte offset where the problem was found.
#[derive(Debug, Clone, Error, PartialEq, Eq)]
pub enum ParseError {
    #[error("syntax error at byte {offset}: {message}")]
    Syntax { offset: usize, message: String },
    #[error("unknown identifier `{name}` at byte {offset}")]
    UnknownIdentifier { offset: usize, name: String },
    #[error("`{name}` expects {expected} argument(s), got {got} (at byte {offset})")]
    Arity {
        offset: usize,
        name: String,
        expected: usize,
        got: usize,
    },
}

#[derive(Debug, Clone, PartialEq)]
enum Tok {
    Num(f64),
    Ident(String),
    Plus,
    Minus,
    Star,
    Slash,
    Caret,
    LParen,
    RParen,
    Comma,
    End,
}

#[derive(Debug, Clone)]
struct SpannedTok {
    tok: Tok,
    start: usize,
    end: usize,
}

fn lex(text: &str) -> Result<Vec<SpannedTok>, ParseError> {
    let bytes = text.as_bytes();
    let mut toks = Vec::new();
    let mut i = 0;
    while i < bytes.len() {
        let c = bytes[i];
        let start = i;
        match c {
            b' ' | b'\t' | b'\r' | b'\n' => {
                i += 1;
                continue;
            }
            b'+' => toks.push(SpannedTok { tok: Tok::Plus, start, end: i + 1 }),
            b'-' => toks.push(SpannedTok { tok: Tok::Minus, start, end: i + 1 }),
            b'*' => toks.push(SpannedTok { tok: Tok::Star, start, end: i + 1 }),
            b'/' => toks.push(SpannedTok { tok: Tok::Slash, start, end: i + 1 }),
            b'^' => toks.push(SpannedTok { tok: Tok::Caret, start, end: i + 1 }),
            b'(' => toks.push(SpannedTok { tok: Tok::LParen, start, end: i + 1 }),
            b')' => toks.push(SpannedTok { tok: Tok::RParen, start, end: i + 1 }),
            b',' => toks.push(SpannedTok { tok: Tok::Comma, start, end: i + 1 }),
            b'0'..=b'9' | b'.' => {
                let mut j = i;
                while j < bytes.len() && bytes[j].is_ascii_digit() {
                    j += 1;
                }
                if j < bytes.len() && bytes[j] == b'.' {
                    j += 1;
                    while j < bytes.len() && bytes[j].is_ascii_digit() {
                        j += 1;
                    }
                }
                if j < bytes.len() && (bytes[j] == b'e' || bytes[j] == b'E') {
                    let mut k = j + 1;
                    if k < bytes.len() && (bytes[k] == b'+' || bytes[k] == b'-') {
                        k += 1;
                    }
                    if k < bytes.len() && bytes[k].is_ascii_digit() {
                        j = k;
                        while j < bytes.len() && bytes[j].is_ascii_digit() {
                            j += 1;
                        }
                    }
                }
                let lit = &text[i..j];
                let value: f64 = lit.parse().map_err(|_| ParseError::Syntax {
                    offset: i,
                    message: format!("invalid number literal `{lit}`"),
                })?;
                toks.push(SpannedTok { tok: Tok::Num(value), start: i, end: j });
                i = j;
                continue;
            }
            b'a'..=b'z' | b'A'..=b'Z' | b'_' => {
                let mut j = i;
                while j < bytes.len() && (bytes[j].is_ascii_alphanumeric() || bytes[j] == b'_') {
                    j += 1;
                }
                toks.push(SpannedTok {
                    tok: Tok::Ident(text[i..j].to_string()),
                    start: i,
                    end: j,
                });
                i = j;
                continue;
            }
            _ => {
                return Err(ParseError::Syntax {
                    offset: i,
                    message: format!("unexpected character `{}`", &text[i..i + c.len_utf8_at(text, i)]),
                })
            }
        }
        i += 1;
    }
    toks.push(SpannedTok { tok: Tok::End, start: text.len(), end: text.len() });
    Ok(toks)
}

/// Helper for slicing a single (possibly multi-byte) character for error text.
trait Utf8Len {
    fn len_utf8_at(&self, text: &str, at: usize) -> usize;
}

impl Utf8Len for u8 {
    fn len_utf8_at(&self, text: &str, at: usize) -> usize {
        text[at..].chars().next().map_or(1, |c| c.len_utf8())
    }
}

/// Recognize a variable name from the fixed vocabulary. Indices in the
/// surface syntax start at 1.
fn variable_from_name(name: &str) -> Option<Var> {
    if name == "s" {
        return Some(Var::S);
    }
    let index = |digits: &str| -> Option<usize> {
        if digits.is_empty() || !digits.bytes().all(|b| b.is_ascii_digit()) {
            return None;
        }
        let n: usize = digits.parse().ok()?;
        if n == 0 {
            None
        } else {
            Some(n - 1)
        }
    };
    if let Some(rest) = name.strip_prefix("u1_") {
        return index(rest).map(Var::U1);
    }
    if let Some(rest) = name.strip_prefix("u2_") {
        return index(rest).map(Var::U2);
    }
    if let Some(rest) = name.strip_prefix("u_") {
        return index(rest).map(Var::U);
    }
    if let Some(rest) = name.strip_prefix("x") {
        return index(rest).map(Var::X);
    }
    if let Some(rest) = name.strip_prefix("p") {
        return index(rest).map(Var::P);
    }
    None
}

struct Parser<'a> {
    toks: &'a [SpannedTok],
    pos: usize,
}

impl<'a> Parser<'a> {
    fn peek(&self) -> &SpannedTok {
        &self.toks[self.pos]
    }

    fn bump(&mut self) -> SpannedTok {
        let t = self.toks[self.pos].clone();
        if self.pos + 1 < self.toks.len() {
            self.pos += 1;
        }
        t
    }

    /// Pratt loop. `min_bp` is the minimum left binding power a following
    /// operator must have to extend the expression parsed so far.
    fn expr(&mut self, min_bp: u8) -> Result<Ast, ParseError> {
        let mut lhs = self.prefix()?;
        loop {
            let (op, lbp, rbp) = match self.peek().tok {
                Tok::Plus => (BinOp::Add, 1, 2),
                Tok::Minus => (BinOp::Sub, 1, 2),
                Tok::Star => (BinOp::Mul, 3, 4),
                Tok::Slash => (BinOp::Div, 3, 4),
                // Right-associative: the right operand is parsed with a
                // binding power *below* the operator's own.
                Tok::Caret => (BinOp::Pow, 6, 6),
                _ => break,
            };
            if lbp < min_bp {
                break;
            }
            self.bump();
            let rhs = self.expr(rbp)?;
            let span = Span::new(lhs.span().start, rhs.span().end);
            lhs = Ast::Bin(op, Box::new(lhs), Box::new(rhs), span);
        }
        Ok(lhs)
    }

    fn prefix(&mut self) -> Result<Ast, ParseError> {
        let t = self.bump();
        match t.tok {
            Tok::Num(v) => Ok(Ast::Num(v, Span::new(t.start, t.end))),
            Tok::Minus => {
                // Unary minus binds tighter than `^`: `-2^2` is `(-2)^2`.
                let operand = self.expr(7)?;
                let span = Span::new(t.start, operand.span().end);
                Ok(Ast::Neg(Box::new(operand), span))
            }
            Tok::LParen => {
                let inner = self.expr(0)?;
                let close = self.bump();
                if close.tok != Tok::RParen {
                    return Err(ParseError::Syntax {
                        offset: close.start,
                        message: "expected `)`".into(),
                    });
                }
                Ok(inner)
            }
            Tok::Ident(name) => {
                if self.peek().tok == Tok::LParen {
                    let func = Func::from_name(&name).ok_or(ParseError::UnknownIdentifier {
                        offset: t.start,
                        name: name.clone(),
                    })?;
                    self.bump(); // consume `(`
                    let mut args = Vec::new();
                    if self.peek().tok != Tok::RParen {
                        loop {
                            args.push(self.expr(0)?);
                            match self.peek().tok {
                                Tok::Comma => {
                                    self.bump();
                                }
                                Tok::RParen => break,
                                _ => {
                                    let bad = self.peek();
                                    return Err(ParseError::Syntax {
                                        offset: bad.start,
                                        message: "expected `,` or `)` in argument list".into(),
                                    });
                                }
                            }
                        }
                    }
                    let close = self.bump(); // consume `)`
                    if args.len() != func.arity() {
                        return Err(ParseError::Arity {
                            offset: t.start,
                            name: name.clone(),
                            expected: func.arity(),
                            got: args.len(),
                        });
                    }
                    Ok(Ast::Call(func, args, Span::new(t.start, close.end)))
                } else {
                    let var = variable_from_name(&name).ok_or(ParseError::UnknownIdentifier {
                        offset: t.start,
                        name: name.clone(),
                    })?;
                    Ok(Ast::Var(var, Span::new(t.start, t.end)))
                }
            }
            Tok::End => Err(ParseError::Syntax {
                offset: t.start,
                message: "unexpected end of expression".into(),
            }),
            other => Err(ParseError::Syntax {
                offset: t.start,
                message: format!("unexpected token `{other:?}`"),
            }),
        }
    }
}

/// Parse an expression. The whole input must be consumed: trailing tokens
/// (as in `2x`, which lexes to a number followed by an identifier) are
/// syntax errors at the position of the first unconsumed token.
pub fn parse(text: &str) -> Result<Ast, ParseError> {
    let toks = lex(text)?;
    let mut p = Parser { toks: &toks, pos: 0 };
    let ast = p.expr(0)?;
    let rest = p.peek();
    if rest.tok != Tok::End {
        return Err(ParseError::Syntax {
            offset: rest.start,
            message: "trailing input after expression".into(),
        });
    }
    Ok(ast)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_implicit_multiplication_at_position() {
        match parse("2x").unwrap_err() {
            ParseError::Syntax { offset, .. } => assert_eq!(offset, 1),
            other => panic!("expected syntax error, got {other:?}"),
        }
    }

    #[test]
    fn rejects_unknown_function() {
        match parse("foo(3)").unwrap_err() {
            ParseError::UnknownIdentifier { offset, name } => {
                assert_eq!(offset, 0);
                assert_eq!(name, "foo");
            }
            other => panic!("expected unknown identifier, got {other:?}"),
        }
    }

    #[test]
    fn rejects_wrong_arity() {
        match parse("sin(x1, x2)").unwrap_err() {
            ParseError::Arity { name, expected, got, .. } => {
                assert_eq!(name, "sin");
                assert_eq!(expected, 1);
                assert_eq!(got, 2);
            }
            other => panic!("expected arity error, got {other:?}"),
        }
        assert!(matches!(parse("min(1)").unwrap_err(), ParseError::Arity { .. }));
        assert!(matches!(parse("clamp(1, 2)").unwrap_err(), ParseError::Arity { .. }));
    }

    #[test]
    fn rejects_zero_indexed_variables() {
        assert!(matches!(parse("x0").unwrap_err(), ParseError::UnknownIdentifier { .. }));
        assert!(matches!(parse("u1_0").unwrap_err(), ParseError::UnknownIdentifier { .. }));
    }

    #[test]
    fn rejects_unbalanced_parens() {
        assert!(matches!(parse("(1 + 2").unwrap_err(), ParseError::Syntax { .. }));
        assert!(matches!(parse("1 + 2)").unwrap_err(), ParseError::Syntax { .. }));
    }

    #[test]
    fn lexes_scientific_notation() {
        let ast = parse("1.5e-3 + 2E+2").unwrap();
        match ast {
            Ast::Bin(BinOp::Add, l, r, _) => {
                assert_eq!(l.as_num(), Some(1.5e-3));
                assert_eq!(r.as_num(), Some(2e2));
            }
            other => panic!("unexpected shape: {other:?}"),
        }
    }

    #[test]
    fn spans_cover_source_ranges() {
        let ast = parse("1 + sin(x1)").unwrap();
        assert_eq!(ast.span(), Span::new(0, 11));
        match ast {
            Ast::Bin(_, _, r, _) => assert_eq!(r.span(), Span::new(4, 11)),
            other => panic!("unexpected shape: {other:?}"),
        }
    }

    #[test]
    fn vocabulary_patterns() {
        assert_eq!(variable_from_name("s"), Some(Var::S));
        assert_eq!(variable_from_name("x2"), Some(Var::X(1)));
        assert_eq!(variable_from_name("u1_3"), Some(Var::U1(2)));
        assert_eq!(variable_from_name("u2_1"), Some(Var::U2(0)));
        assert_eq!(variable_from_name("u_1"), Some(Var::U(0)));
        assert_eq!(variable_from_name("p12"), Some(Var::P(11)));
        assert_eq!(variable_from_name("q1"), None);
        assert_eq!(variable_from_name("x"), None);
        assert_eq!(variable_from_name("x1a"), None);
    }
}
