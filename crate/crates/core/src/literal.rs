//! Python literal values used as assertion expectations.

use std::fmt::Write as _;

use rustpython_parser::ast::{self, Constant, Expr};
use rustpython_parser::Parse;
use serde::Serialize;
use serde_json::Value;

#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(untagged)]
pub enum ExpectedValue {
    None,
    Bool(bool),
    Int(i64),
    Float(f64),
    Str(String),
    List(Vec<ExpectedValue>),
    Tuple(Vec<ExpectedValue>),
    /// Keys kept in insertion order; callers sort when needed.
    Dict(Vec<(ExpectedValue, ExpectedValue)>),
}

impl ExpectedValue {
    pub fn render(&self) -> String {
        let mut out = String::new();
        self.write(&mut out);
        out
    }

    fn write(&self, out: &mut String) {
        match self {
            ExpectedValue::None => out.push_str("None"),
            ExpectedValue::Bool(b) => out.push_str(if *b { "True" } else { "False" }),
            ExpectedValue::Int(i) => write!(out, "{i}").unwrap(),
            ExpectedValue::Float(f) => out.push_str(&render_float(*f)),
            ExpectedValue::Str(s) => out.push_str(&py_repr(s)),
            ExpectedValue::List(items) => {
                out.push('[');
                write_items(out, items);
                out.push(']');
            }
            ExpectedValue::Tuple(items) => {
                out.push('(');
                write_items(out, items);
                if items.len() == 1 {
                    out.push(',');
                }
                out.push(')');
            }
            ExpectedValue::Dict(items) => {
                out.push('{');
                for (i, (k, v)) in items.iter().enumerate() {
                    if i > 0 {
                        out.push_str(", ");
                    }
                    k.write(out);
                    out.push_str(": ");
                    v.write(out);
                }
                out.push('}');
            }
        }
    }

    /// Parses a rendered literal back.
    pub fn parse(src: &str) -> Option<ExpectedValue> {
        let expr = ast::Expr::parse(src, "<literal>").ok()?;
        from_expr(&expr)
    }

    pub fn from_json(v: &Value) -> ExpectedValue {
        match v {
            Value::Null => ExpectedValue::None,
            Value::Bool(b) => ExpectedValue::Bool(*b),
            Value::Number(n) => match n.as_i64() {
                Some(i) => ExpectedValue::Int(i),
                None => ExpectedValue::Float(n.as_f64().unwrap_or(f64::NAN)),
            },
            Value::String(s) => ExpectedValue::Str(s.clone()),
            Value::Array(a) => ExpectedValue::List(a.iter().map(Self::from_json).collect()),
            Value::Object(o) => ExpectedValue::Dict(
                o.iter()
                    .map(|(k, v)| (ExpectedValue::Str(k.clone()), Self::from_json(v)))
                    .collect(),
            ),
        }
    }
}

fn write_items(out: &mut String, items: &[ExpectedValue]) {
    for (i, item) in items.iter().enumerate() {
        if i > 0 {
            out.push_str(", ");
        }
        item.write(out);
    }
}

/// Shortest decimal that round-trips, always recognisable as a float.
pub fn render_float(f: f64) -> String {
    if f.is_nan() {
        "float('nan')".into()
    } else if f.is_infinite() {
        if f > 0.0 { "float('inf')" } else { "float('-inf')" }.into()
    } else {
        format!("{f:?}")
    }
}

pub fn py_repr(s: &str) -> String {
    let mut out = String::with_capacity(s.len() + 2);
    out.push('\'');
    for c in s.chars() {
        match c {
            '\\' => out.push_str("\\\\"),
            '\'' => out.push_str("\\'"),
            '\n' => out.push_str("\\n"),
            '\r' => out.push_str("\\r"),
            '\t' => out.push_str("\\t"),
            c if (c as u32) < 0x20 || c as u32 == 0x7f => write!(out, "\\x{:02x}", c as u32).unwrap(),
            c => out.push(c),
        }
    }
    out.push('\'');
    out
}

fn from_expr(expr: &Expr) -> Option<ExpectedValue> {
    Some(match expr {
        Expr::Constant(c) => match &c.value {
            Constant::None => ExpectedValue::None,
            Constant::Bool(b) => ExpectedValue::Bool(*b),
            Constant::Int(i) => ExpectedValue::Int(i.to_string().parse().ok()?),
            Constant::Float(f) => ExpectedValue::Float(*f),
            Constant::Str(s) => ExpectedValue::Str(s.clone()),
            _ => return None,
        },
        Expr::UnaryOp(u) if matches!(u.op, ast::UnaryOp::USub) => match from_expr(&u.operand)? {
            ExpectedValue::Int(i) => ExpectedValue::Int(i.checked_neg()?),
            ExpectedValue::Float(f) => ExpectedValue::Float(-f),
            _ => return None,
        },
        Expr::List(l) => ExpectedValue::List(l.elts.iter().map(from_expr).collect::<Option<_>>()?),
        Expr::Tuple(t) => ExpectedValue::Tuple(t.elts.iter().map(from_expr).collect::<Option<_>>()?),
        Expr::Dict(d) => ExpectedValue::Dict(
            d.keys
                .iter()
                .zip(&d.values)
                .map(|(k, v)| Some((from_expr(k.as_ref()?)?, from_expr(v)?)))
                .collect::<Option<_>>()?,
        ),
        Expr::Call(c) if c.args.len() == 1 && c.keywords.is_empty() => {
            let Expr::Name(n) = c.func.as_ref() else { return None };
            if n.id.as_str() != "float" {
                return None;
            }
            let ExpectedValue::Str(s) = from_expr(&c.args[0])? else { return None };
            ExpectedValue::Float(match s.as_str() {
                "nan" => f64::NAN,
                "inf" => f64::INFINITY,
                "-inf" => f64::NEG_INFINITY,
                _ => return None,
            })
        }
        _ => return None,
    })
}
