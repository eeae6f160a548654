//! Prefix-notation arithmetic expressions for custom scheduling fields.
//!
//! One expression per weight-vector coordinate, written as s-expressions over
//! constants, coordinates `x1..xm` (1-based), and the operators `+ - * / pow
//! exp log sin neg`. Example: `(* x1 (+ 1 (sin x2)))`. The tree is small by
//! design so the analysis module can differentiate it numerically.

use crate::fields::FieldError;

#[derive(Debug, Clone, PartialEq)]
pub enum Expr {
    Const(f64),
    /// Zero-based coordinate index.
    Coord(usize),
    Add(Vec<Expr>),
    Mul(Vec<Expr>),
    Sub(Box<Expr>, Box<Expr>),
    Div(Box<Expr>, Box<Expr>),
    Pow(Box<Expr>, Box<Expr>),
    Exp(Box<Expr>),
    Log(Box<Expr>),
    Sin(Box<Expr>),
    Neg(Box<Expr>),
}

impl Expr {
    pub fn eval(&self, x: &[f64]) -> f64 {
        match self {
            Expr::Const(v) => *v,
            Expr::Coord(i) => x[*i],
            Expr::Add(terms) => terms.iter().map(|t| t.eval(x)).sum(),
            Expr::Mul(terms) => terms.iter().map(|t| t.eval(x)).product(),
            Expr::Sub(a, b) => a.eval(x) - b.eval(x),
            Expr::Div(a, b) => a.eval(x) / b.eval(x),
            Expr::Pow(a, b) => a.eval(x).powf(b.eval(x)),
            Expr::Exp(a) => a.eval(x).exp(),
            Expr::Log(a) => a.eval(x).ln(),
            Expr::Sin(a) => a.eval(x).sin(),
            Expr::Neg(a) => -a.eval(x),
        }
    }

    /// Largest coordinate index referenced, if any.
    pub fn max_coord(&self) -> Option<usize> {
        match self {
            Expr::Const(_) => None,
            Expr::Coord(i) => Some(*i),
            Expr::Add(ts) | Expr::Mul(ts) => ts.iter().filter_map(Expr::max_coord).max(),
            Expr::Sub(a, b) | Expr::Div(a, b) | Expr::Pow(a, b) => {
                a.max_coord().into_iter().chain(b.max_coord()).max()
            }
            Expr::Exp(a) | Expr::Log(a) | Expr::Sin(a) | Expr::Neg(a) => a.max_coord(),
        }
    }
}

fn tokenize(src: &str) -> Vec<String> {
    src.replace('(', " ( ")
        .replace(')', " ) ")
        .split_whitespace()
        .map(str::to_owned)
        .collect()
}

fn parse_atom(tok: &str) -> Result<Expr, FieldError> {
    if let Some(rest) = tok.strip_prefix('x') {
        if let Ok(idx) = rest.parse::<usize>() {
            if idx == 0 {
                return Err(FieldError::InvalidParams(
                    "coordinates are 1-based: use x1, x2, ...".into(),
                ));
            }
            return Ok(Expr::Coord(idx - 1));
        }
    }
    tok.parse::<f64>()
        .map(Expr::Const)
        .map_err(|_| FieldError::InvalidParams(format!("unrecognized token '{tok}'")))
}

fn parse_tokens(tokens: &[String], pos: &mut usize) -> Result<Expr, FieldError> {
    let tok = tokens
        .get(*pos)
        .ok_or_else(|| FieldError::InvalidParams("unexpected end of expression".into()))?;
    *pos += 1;
    if tok != "(" {
        if tok == ")" {
            return Err(FieldError::InvalidParams("unexpected ')'".into()));
        }
        return parse_atom(tok);
    }
    let op = tokens
        .get(*pos)
        .ok_or_else(|| FieldError::InvalidParams("missing operator after '('".into()))?
        .clone();
    *pos += 1;
    let mut args = Vec::new();
    while tokens.get(*pos).map(String::as_str) != Some(")") {
        if *pos >= tokens.len() {
            return Err(FieldError::InvalidParams("missing closing ')'".into()));
        }
        args.push(parse_tokens(tokens, pos)?);
    }
    *pos += 1; // consume ')'

    let unary = |mut args: Vec<Expr>, name: &str| -> Result<Expr, FieldError> {
        if args.len() != 1 {
            return Err(FieldError::InvalidParams(format!(
                "'{name}' takes exactly one argument"
            )));
        }
        Ok(args.remove(0))
    };
    let binary = |mut args: Vec<Expr>, name: &str| -> Result<(Expr, Expr), FieldError> {
        if args.len() != 2 {
            return Err(FieldError::InvalidParams(format!(
                "'{name}' takes exactly two arguments"
            )));
        }
        let b = args.remove(1);
        let a = args.remove(0);
        Ok((a, b))
    };

    match op.as_str() {
        "+" => {
            if args.is_empty() {
                return Err(FieldError::InvalidParams("'+' needs arguments".into()));
            }
            Ok(Expr::Add(args))
        }
        "*" => {
            if args.is_empty() {
                return Err(FieldError::InvalidParams("'*' needs arguments".into()));
            }
            Ok(Expr::Mul(args))
        }
        "-" => match args.len() {
            1 => Ok(Expr::Neg(Box::new(args.remove(0)))),
            2 => {
                let (a, b) = binary(args, "-")?;
                Ok(Expr::Sub(Box::new(a), Box::new(b)))
            }
            _ => Err(FieldError::InvalidParams(
                "'-' takes one or two arguments".into(),
            )),
        },
        "/" => {
            let (a, b) = binary(args, "/")?;
            Ok(Expr::Div(Box::new(a), Box::new(b)))
        }
        "pow" => {
            let (a, b) = binary(args, "pow")?;
            Ok(Expr::Pow(Box::new(a), Box::new(b)))
        }
        "exp" => Ok(Expr::Exp(Box::new(unary(args, "exp")?))),
        "log" => Ok(Expr::Log(Box::new(unary(args, "log")?))),
        "sin" => Ok(Expr::Sin(Box::new(unary(args, "sin")?))),
        "neg" => Ok(Expr::Neg(Box::new(unary(args, "neg")?))),
        other => Err(FieldError::InvalidParams(format!(
            "unknown operator '{other}'"
        ))),
    }
}

/// Parses one prefix-notation expression.
pub fn parse(src: &str) -> Result<Expr, FieldError> {
    let tokens = tokenize(src);
    if tokens.is_empty() {
        return Err(FieldError::InvalidParams("empty expression".into()));
    }
    let mut pos = 0;
    let expr = parse_tokens(&tokens, &mut pos)?;
    if pos != tokens.len() {
        return Err(FieldError::InvalidParams(format!(
            "trailing tokens after expression: {:?}",
            &tokens[pos..]
        )));
    }
    Ok(expr)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn atoms_and_operators_evaluate() {
        assert_eq!(parse("3.5").unwrap().eval(&[]), 3.5);
        assert_eq!(parse("x2").unwrap().eval(&[1.0, 7.0]), 7.0);
        assert_eq!(parse("(+ 1 2 3)").unwrap().eval(&[]), 6.0);
        assert_eq!(parse("(* x1 (+ 1 x2))").unwrap().eval(&[2.0, 3.0]), 8.0);
        assert_eq!(parse("(- 5 x1)").unwrap().eval(&[2.0]), 3.0);
        assert_eq!(parse("(- x1)").unwrap().eval(&[2.0]), -2.0);
        assert_eq!(parse("(/ x1 4)").unwrap().eval(&[2.0]), 0.5);
        assert_eq!(parse("(pow x1 2)").unwrap().eval(&[3.0]), 9.0);
        let v = parse("(+ 1 (sin x1))").unwrap().eval(&[0.0]);
        assert_eq!(v, 1.0);
        let v = parse("(exp (log x1))").unwrap().eval(&[5.0]);
        assert!((v - 5.0).abs() < 1e-12);
    }

    #[test]
    fn parse_errors_are_reported() {
        assert!(parse("").is_err());
        assert!(parse("(bogus 1)").is_err());
        assert!(parse("(+ 1").is_err());
        assert!(parse("(sin 1 2)").is_err());
        assert!(parse("x0").is_err());
        assert!(parse("(+ 1 2) junk").is_err());
    }

    #[test]
    fn max_coord_tracks_references() {
        assert_eq!(parse("(+ x1 (* x3 2))").unwrap().max_coord(), Some(2));
        assert_eq!(parse("4").unwrap().max_coord(), None);
    }
}
