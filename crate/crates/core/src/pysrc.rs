//! Shared helpers over Python cell source: parsing with IPython magics
//! masked out, line bookkeeping, AST walking, and normalization.

use std::borrow::Cow;
use std::collections::BTreeSet;

use rustpython_parser::ast::{self, Expr, Ranged, Stmt};
use rustpython_parser::text_size::TextRange;
use rustpython_parser::{lexer, Mode, Parse, Tok};

/// Replaces IPython magic and shell-escape lines with `0` padded to the same
/// byte length, so offsets and line numbers stay valid for the real source.
pub fn mask_magics(src: &str) -> Cow<'_, str> {
    let needs_mask = src.split('\n').any(is_magic_line);
    if !needs_mask {
        return Cow::Borrowed(src);
    }
    let mut out = String::with_capacity(src.len());
    for (i, line) in src.split('\n').enumerate() {
        if i > 0 {
            out.push('\n');
        }
        if is_magic_line(line) {
            let indent = leading_ws(line);
            out.push_str(indent);
            let rest = line.len() - indent.len();
            out.push('0');
            out.extend(std::iter::repeat(' ').take(rest.saturating_sub(1)));
        } else {
            out.push_str(line);
        }
    }
    Cow::Owned(out)
}

pub fn is_magic_line(line: &str) -> bool {
    let t = line.trim_start();
    t.starts_with('%') || t.starts_with('!') || (t.ends_with('?') && !t.starts_with('#'))
}

pub fn leading_ws(line: &str) -> &str {
    let n = line.len() - line.trim_start_matches([' ', '\t']).len();
    &line[..n]
}

/// A successfully parsed code cell.
#[derive(Debug, Clone)]
pub struct ParsedCell {
    text: String,
    line_starts: Vec<usize>,
    pub suite: ast::Suite,
}

impl ParsedCell {
    pub fn parse(src: &str) -> Result<Self, String> {
        let text = mask_magics(src).into_owned();
        let suite = ast::Suite::parse(&text, "<cell>").map_err(|e| e.to_string())?;
        let line_starts = line_starts(&text);
        Ok(Self {
            text,
            line_starts,
            suite,
        })
    }

    pub fn text(&self) -> &str {
        &self.text
    }

    /// 1-based line containing the byte offset.
    pub fn line_of(&self, offset: usize) -> usize {
        match self.line_starts.binary_search(&offset) {
            Ok(i) => i + 1,
            Err(i) => i,
        }
    }

    /// First and last (1-based) line of a node.
    pub fn span(&self, range: TextRange) -> (usize, usize) {
        let start = usize::from(range.start());
        let end = usize::from(range.end()).max(start + 1);
        (self.line_of(start), self.line_of(end - 1))
    }

    pub fn slice(&self, range: TextRange) -> &str {
        &self.text[usize::from(range.start())..usize::from(range.end())]
    }

    /// Byte offset of the start of a 1-based line.
    pub fn line_start(&self, line: usize) -> usize {
        self.line_starts[line - 1]
    }

    pub fn line_count(&self) -> usize {
        line_count(&self.text)
    }
}

fn line_starts(text: &str) -> Vec<usize> {
    std::iter::once(0)
        .chain(text.match_indices('\n').map(|(i, _)| i + 1))
        .collect()
}

/// Number of lines, not counting the empty remainder after a final newline.
pub fn line_count(text: &str) -> usize {
    if text.is_empty() {
        0
    } else {
        text.split_inclusive('\n').count()
    }
}

/// Statement together with its nesting depth and whether it sits inside a
/// function or class body.
#[derive(Debug, Clone, Copy)]
pub struct StmtRef<'a> {
    pub stmt: &'a Stmt,
    pub depth: usize,
    pub in_definition: bool,
}

/// Pre-order walk over statements, descending into compound bodies.
pub fn walk_stmts<'a>(suite: &'a [Stmt], f: &mut impl FnMut(StmtRef<'a>)) {
    walk_stmts_inner(suite, 0, false, f)
}

fn walk_stmts_inner<'a>(
    suite: &'a [Stmt],
    depth: usize,
    in_def: bool,
    f: &mut impl FnMut(StmtRef<'a>),
) {
    for stmt in suite {
        f(StmtRef {
            stmt,
            depth,
            in_definition: in_def,
        });
        for (body, is_def) in child_bodies(stmt) {
            walk_stmts_inner(body, depth + 1, in_def || is_def, f);
        }
    }
}

/// Nested statement blocks of a compound statement; the flag marks
/// function/class bodies.
pub fn child_bodies(stmt: &Stmt) -> Vec<(&[Stmt], bool)> {
    match stmt {
        Stmt::FunctionDef(s) => vec![(&s.body[..], true)],
        Stmt::AsyncFunctionDef(s) => vec![(&s.body[..], true)],
        Stmt::ClassDef(s) => vec![(&s.body[..], true)],
        Stmt::For(s) => vec![(&s.body[..], false), (&s.orelse[..], false)],
        Stmt::AsyncFor(s) => vec![(&s.body[..], false), (&s.orelse[..], false)],
        Stmt::While(s) => vec![(&s.body[..], false), (&s.orelse[..], false)],
        Stmt::If(s) => vec![(&s.body[..], false), (&s.orelse[..], false)],
        Stmt::With(s) => vec![(&s.body[..], false)],
        Stmt::AsyncWith(s) => vec![(&s.body[..], false)],
        Stmt::Try(s) => {
            let mut v = vec![(&s.body[..], false)];
            for ast::ExceptHandler::ExceptHandler(h) in &s.handlers {
                v.push((&h.body[..], false));
            }
            v.push((&s.orelse[..], false));
            v.push((&s.finalbody[..], false));
            v
        }
        Stmt::TryStar(s) => {
            let mut v = vec![(&s.body[..], false)];
            for ast::ExceptHandler::ExceptHandler(h) in &s.handlers {
                v.push((&h.body[..], false));
            }
            v.push((&s.orelse[..], false));
            v.push((&s.finalbody[..], false));
            v
        }
        Stmt::Match(s) => s.cases.iter().map(|c| (&c.body[..], false)).collect(),
        _ => Vec::new(),
    }
}

/// Expressions owned directly by a statement, excluding nested bodies.
pub fn header_exprs(stmt: &Stmt) -> Vec<&Expr> {
    match stmt {
        Stmt::FunctionDef(s) => s.decorator_list.iter().collect(),
        Stmt::AsyncFunctionDef(s) => s.decorator_list.iter().collect(),
        Stmt::ClassDef(s) => s
            .bases
            .iter()
            .chain(s.keywords.iter().map(|k| &k.value))
            .chain(&s.decorator_list)
            .collect(),
        Stmt::Return(s) => s.value.as_deref().into_iter().collect(),
        Stmt::Delete(s) => s.targets.iter().collect(),
        Stmt::Assign(s) => s.targets.iter().chain(std::iter::once(&*s.value)).collect(),
        Stmt::TypeAlias(s) => vec![&*s.value],
        Stmt::AugAssign(s) => vec![&*s.target, &*s.value],
        Stmt::AnnAssign(s) => std::iter::once(&*s.target)
            .chain(s.value.as_deref())
            .collect(),
        Stmt::For(s) => vec![&*s.target, &*s.iter],
        Stmt::AsyncFor(s) => vec![&*s.target, &*s.iter],
        Stmt::While(s) => vec![&*s.test],
        Stmt::If(s) => vec![&*s.test],
        Stmt::With(s) => s
            .items
            .iter()
            .flat_map(|i| std::iter::once(&i.context_expr).chain(i.optional_vars.as_deref()))
            .collect(),
        Stmt::AsyncWith(s) => s
            .items
            .iter()
            .flat_map(|i| std::iter::once(&i.context_expr).chain(i.optional_vars.as_deref()))
            .collect(),
        Stmt::Match(s) => vec![&*s.subject],
        Stmt::Raise(s) => s.exc.as_deref().into_iter().chain(s.cause.as_deref()).collect(),
        Stmt::Assert(s) => std::iter::once(&*s.test).chain(s.msg.as_deref()).collect(),
        Stmt::Expr(s) => vec![&*s.value],
        _ => Vec::new(),
    }
}

/// Pre-order walk over an expression tree.
pub fn walk_expr<'a>(expr: &'a Expr, f: &mut impl FnMut(&'a Expr)) {
    f(expr);
    let mut go = |e: &'a Expr| walk_expr(e, f);
    match expr {
        Expr::BoolOp(e) => e.values.iter().for_each(&mut go),
        Expr::NamedExpr(e) => {
            go(&e.target);
            go(&e.value)
        }
        Expr::BinOp(e) => {
            go(&e.left);
            go(&e.right)
        }
        Expr::UnaryOp(e) => go(&e.operand),
        Expr::Lambda(e) => go(&e.body),
        Expr::IfExp(e) => {
            go(&e.test);
            go(&e.body);
            go(&e.orelse)
        }
        Expr::Dict(e) => {
            for (k, v) in e.keys.iter().zip(&e.values) {
                if let Some(k) = k {
                    go(k);
                }
                go(v);
            }
        }
        Expr::Set(e) => e.elts.iter().for_each(&mut go),
        Expr::ListComp(e) => {
            go(&e.elt);
            comprehensions(&e.generators, &mut go)
        }
        Expr::SetComp(e) => {
            go(&e.elt);
            comprehensions(&e.generators, &mut go)
        }
        Expr::GeneratorExp(e) => {
            go(&e.elt);
            comprehensions(&e.generators, &mut go)
        }
        Expr::DictComp(e) => {
            go(&e.key);
            go(&e.value);
            comprehensions(&e.generators, &mut go)
        }
        Expr::Await(e) => go(&e.value),
        Expr::Yield(e) => {
            if let Some(v) = &e.value {
                go(v);
            }
        }
        Expr::YieldFrom(e) => go(&e.value),
        Expr::Compare(e) => {
            go(&e.left);
            e.comparators.iter().for_each(&mut go)
        }
        Expr::Call(e) => {
            go(&e.func);
            e.args.iter().for_each(&mut go);
            e.keywords.iter().for_each(|k| go(&k.value));
        }
        Expr::FormattedValue(e) => {
            go(&e.value);
            if let Some(s) = &e.format_spec {
                go(s);
            }
        }
        Expr::JoinedStr(e) => e.values.iter().for_each(&mut go),
        Expr::Constant(_) | Expr::Name(_) => {}
        Expr::Attribute(e) => go(&e.value),
        Expr::Subscript(e) => {
            go(&e.value);
            go(&e.slice)
        }
        Expr::Starred(e) => go(&e.value),
        Expr::List(e) => e.elts.iter().for_each(&mut go),
        Expr::Tuple(e) => e.elts.iter().for_each(&mut go),
        Expr::Slice(e) => {
            for part in [&e.lower, &e.upper, &e.step].into_iter().flatten() {
                go(part);
            }
        }
    }
}

fn comprehensions<'a>(gens: &'a [ast::Comprehension], go: &mut impl FnMut(&'a Expr)) {
    for g in gens {
        go(&g.target);
        go(&g.iter);
        g.ifs.iter().for_each(&mut *go);
    }
}

/// Every call expression reachable from a statement's own expressions.
pub fn calls_in_stmt(stmt: &Stmt) -> Vec<&ast::ExprCall> {
    let mut out = Vec::new();
    for e in header_exprs(stmt) {
        walk_expr(e, &mut |x| {
            if let Expr::Call(c) = x {
                out.push(c);
            }
        });
    }
    out
}

/// Every name read inside an expression.
pub fn names_in(expr: &Expr) -> BTreeSet<String> {
    let mut out = BTreeSet::new();
    walk_expr(expr, &mut |x| {
        if let Expr::Name(n) = x {
            out.insert(n.id.to_string());
        }
    });
    out
}

/// Dotted rendering of a callee. Receivers that are not plain names or
/// attribute chains render as `?`, e.g. `pd.read_csv(p).dropna` -> `?.dropna`.
pub fn callee_path(expr: &Expr) -> String {
    match expr {
        Expr::Name(n) => n.id.to_string(),
        Expr::Attribute(a) => format!("{}.{}", callee_path(&a.value), a.attr),
        _ => "?".to_string(),
    }
}

/// Names bound by an assignment target, flattening tuples and lists.
pub fn target_names(target: &Expr) -> Vec<String> {
    match target {
        Expr::Name(n) => vec![n.id.to_string()],
        Expr::Tuple(t) => t.elts.iter().flat_map(target_names).collect(),
        Expr::List(t) => t.elts.iter().flat_map(target_names).collect(),
        Expr::Starred(s) => target_names(&s.value),
        _ => Vec::new(),
    }
}

/// Assignment targets in source form, including attribute/subscript targets.
pub fn target_texts(cell: &ParsedCell, target: &Expr) -> Vec<String> {
    match target {
        Expr::Tuple(t) => t.elts.iter().flat_map(|e| target_texts(cell, e)).collect(),
        Expr::List(t) => t.elts.iter().flat_map(|e| target_texts(cell, e)).collect(),
        Expr::Starred(s) => target_texts(cell, &s.value),
        other => vec![cell.slice(other.range()).to_string()],
    }
}

/// Structural rendering of a statement that ignores source positions,
/// comments, whitespace and string quoting but keeps identifiers.
pub fn normalized_stmt(stmt: &Stmt) -> String {
    strip_ranges(&format!("{stmt:?}"))
}

pub fn normalized_expr(expr: &Expr) -> String {
    strip_ranges(&format!("{expr:?}"))
}

fn strip_ranges(debug: &str) -> String {
    const KEY: &str = "range: ";
    let mut out = String::with_capacity(debug.len());
    let mut rest = debug;
    while let Some(pos) = rest.find(KEY) {
        out.push_str(&rest[..pos]);
        let after = &rest[pos + KEY.len()..];
        let skip = after
            .find(|c: char| !(c.is_ascii_digit() || c == '.' || c == '(' || c == ')'))
            .unwrap_or(after.len());
        let mut tail = &after[skip..];
        if let Some(t) = tail.strip_prefix(", ") {
            tail = t;
        }
        rest = tail;
    }
    out.push_str(rest);
    out
}

/// Source with comments removed, trailing whitespace trimmed and blank lines
/// dropped. Falls back to line-based trimming when the text does not lex.
pub fn strip_comments(src: &str) -> String {
    let masked = mask_magics(src);
    let mut comment_ranges = Vec::new();
    let mut lexed = true;
    for tok in lexer::lex(&masked, Mode::Module) {
        match tok {
            Ok((Tok::Comment(_), r)) => comment_ranges.push(r),
            Ok(_) => {}
            Err(_) => {
                lexed = false;
                break;
            }
        }
    }
    let text: String = if lexed {
        let mut s = String::with_capacity(src.len());
        let mut last = 0;
        for r in comment_ranges {
            s.push_str(&src[last..usize::from(r.start())]);
            last = usize::from(r.end());
        }
        s.push_str(&src[last..]);
        s
    } else {
        src.lines()
            .map(|l| match l.trim_start().starts_with('#') {
                true => "",
                false => l,
            })
            .collect::<Vec<_>>()
            .join("\n")
    };
    text.lines()
        .map(str::trim_end)
        .filter(|l| !l.is_empty())
        .collect::<Vec<_>>()
        .join("\n")
}

/// 1-based lines whose line break falls inside a string literal, where no
/// trailing comment may be appended.
pub fn lines_inside_strings(src: &str) -> BTreeSet<usize> {
    let masked = mask_magics(src);
    let starts = line_starts(&masked);
    let line_of = |off: usize| match starts.binary_search(&off) {
        Ok(i) => i + 1,
        Err(i) => i,
    };
    let mut out = BTreeSet::new();
    for (tok, range) in lexer::lex(&masked, Mode::Module).flatten() {
        if matches!(tok, Tok::String { .. }) {
            let first = line_of(usize::from(range.start()));
            let last = line_of(usize::from(range.end()).saturating_sub(1).max(usize::from(range.start())));
            out.extend(first..last);
        }
    }
    out
}

/// Indentation for statements inserted after `anchor_line`: that of the
/// innermost statement ending on the anchor line, else of the nearest
/// preceding non-blank line.
pub fn indent_for_insertion(src: &str, anchor_line: usize) -> String {
    let lines: Vec<&str> = src.split('\n').collect();
    if anchor_line == 0 {
        return lines
            .iter()
            .find(|l| !l.trim().is_empty())
            .map(|l| leading_ws(l).to_string())
            .unwrap_or_default();
    }
    if let Ok(cell) = ParsedCell::parse(src) {
        let mut best: Option<(usize, usize)> = None;
        walk_stmts(&cell.suite, &mut |s| {
            let (start, end) = cell.span(s.stmt.range());
            if end == anchor_line && best.map_or(true, |(d, _)| s.depth >= d) {
                best = Some((s.depth, start));
            }
        });
        if let Some((_, start)) = best {
            return leading_ws(lines[start - 1]).to_string();
        }
    }
    lines[..anchor_line.min(lines.len())]
        .iter()
        .rev()
        .find(|l| !l.trim().is_empty())
        .map(|l| leading_ws(l).to_string())
        .unwrap_or_default()
}
