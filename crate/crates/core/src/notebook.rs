//! In-memory notebook model over the nbformat 4 JSON container.
//!
//! Parsing keeps everything it does not interpret (metadata, outputs, cell
//! ids, attachments, unknown keys) so that serialization reproduces the
//! container. Serialization follows Jupyter's own layout: one-space indent,
//! sorted keys, multi-line sources stored as line lists, trailing newline.

use serde::Serialize;
use serde_json::{Map, Value};

use crate::error::{Error, Result};
use crate::pysrc;

/// Suffix carried by every line the tool writes into a cell.
pub const GENERATED_MARKER: &str = "# nbtest:generated";

/// Prefix for an original line that a generated rewrite replaces while
/// instrumented. `strip` restores such lines.
pub const ORIGINAL_PREFIX: &str = "# nbtest:original ";

const GENERATED_CELL_KEY: &str = "nbtest";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum CellKind {
    Code,
    Markdown,
    Raw,
}

impl CellKind {
    fn parse(s: &str) -> Option<Self> {
        match s {
            "code" => Some(CellKind::Code),
            "markdown" => Some(CellKind::Markdown),
            "raw" => Some(CellKind::Raw),
            _ => None,
        }
    }

    fn as_str(self) -> &'static str {
        match self {
            CellKind::Code => "code",
            CellKind::Markdown => "markdown",
            CellKind::Raw => "raw",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum SourceForm {
    Lines,
    Text,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Cell {
    pub index: usize,
    pub kind: CellKind,
    pub source: String,
    /// Present for code cells; never interpreted.
    pub outputs: Option<Vec<Value>>,
    pub metadata: Value,
    extra: Map<String, Value>,
    source_form: SourceForm,
}

impl Cell {
    pub fn code(source: impl Into<String>) -> Self {
        Cell {
            index: 0,
            kind: CellKind::Code,
            source: source.into(),
            outputs: Some(Vec::new()),
            metadata: Value::Object(Map::new()),
            extra: Map::from_iter([("execution_count".to_string(), Value::Null)]),
            source_form: SourceForm::Lines,
        }
    }

    pub fn markdown(source: impl Into<String>) -> Self {
        Cell {
            index: 0,
            kind: CellKind::Markdown,
            source: source.into(),
            outputs: None,
            metadata: Value::Object(Map::new()),
            extra: Map::new(),
            source_form: SourceForm::Lines,
        }
    }

    pub fn is_code(&self) -> bool {
        self.kind == CellKind::Code
    }

    /// A whole cell added by the tool (preamble).
    pub fn is_generated(&self) -> bool {
        self.metadata
            .get(GENERATED_CELL_KEY)
            .and_then(|v| v.get("generated"))
            .and_then(Value::as_bool)
            .unwrap_or(false)
    }

    pub(crate) fn mark_generated(mut self) -> Self {
        let mut tag = Map::new();
        tag.insert("generated".into(), Value::Bool(true));
        if let Value::Object(m) = &mut self.metadata {
            m.insert(GENERATED_CELL_KEY.into(), Value::Object(tag));
        }
        self
    }

    pub fn line_count(&self) -> usize {
        pysrc::line_count(&self.source)
    }

    fn from_json(index: usize, value: Value) -> Result<Self> {
        let Value::Object(mut obj) = value else {
            return Err(Error::MalformedNotebook(format!("cell {index} is not an object")));
        };
        let kind = obj
            .remove("cell_type")
            .and_then(|v| v.as_str().and_then(CellKind::parse))
            .ok_or_else(|| Error::MalformedNotebook(format!("cell {index}: bad cell_type")))?;
        let (source, source_form) = match obj.remove("source") {
            Some(Value::String(s)) => (s, SourceForm::Text),
            Some(Value::Array(parts)) => {
                let mut s = String::new();
                for p in parts {
                    match p {
                        Value::String(p) => s.push_str(&p),
                        _ => {
                            return Err(Error::MalformedNotebook(format!(
                                "cell {index}: non-string source line"
                            )))
                        }
                    }
                }
                (s, SourceForm::Lines)
            }
            _ => return Err(Error::MalformedNotebook(format!("cell {index}: missing source"))),
        };
        let outputs = match obj.remove("outputs") {
            Some(Value::Array(o)) => Some(o),
            Some(_) => {
                return Err(Error::MalformedNotebook(format!("cell {index}: outputs not a list")))
            }
            None => None,
        };
        let metadata = obj
            .remove("metadata")
            .unwrap_or_else(|| Value::Object(Map::new()));
        Ok(Cell {
            index,
            kind,
            source,
            outputs,
            metadata,
            extra: obj,
            source_form,
        })
    }

    fn to_json(&self) -> Value {
        let mut obj = self.extra.clone();
        obj.insert("cell_type".into(), Value::String(self.kind.as_str().into()));
        obj.insert("metadata".into(), self.metadata.clone());
        let source = match self.source_form {
            SourceForm::Text => Value::String(self.source.clone()),
            SourceForm::Lines => Value::Array(
                self.source
                    .split_inclusive('\n')
                    .map(|l| Value::String(l.to_string()))
                    .collect(),
            ),
        };
        obj.insert("source".into(), source);
        if let Some(outputs) = &self.outputs {
            obj.insert("outputs".into(), Value::Array(outputs.clone()));
        }
        Value::Object(obj)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Notebook {
    pub format_version: (u64, u64),
    pub cells: Vec<Cell>,
    pub metadata: Value,
    extra: Map<String, Value>,
}

impl Default for Notebook {
    fn default() -> Self {
        Notebook {
            format_version: (4, 5),
            cells: Vec::new(),
            metadata: Value::Object(Map::new()),
            extra: Map::new(),
        }
    }
}

pub fn parse_notebook(bytes: &[u8]) -> Result<Notebook> {
    let value: Value =
        serde_json::from_slice(bytes).map_err(|e| Error::MalformedNotebook(e.to_string()))?;
    let Value::Object(mut obj) = value else {
        return Err(Error::MalformedNotebook("top level is not an object".into()));
    };
    let major = obj
        .remove("nbformat")
        .and_then(|v| v.as_u64())
        .ok_or_else(|| Error::MalformedNotebook("missing nbformat".into()))?;
    let minor = obj
        .remove("nbformat_minor")
        .and_then(|v| v.as_u64())
        .unwrap_or(0);
    if major < 4 {
        return Err(Error::UnsupportedVersion { major, minor });
    }
    let cells = match obj.remove("cells") {
        Some(Value::Array(cells)) => cells
            .into_iter()
            .enumerate()
            .map(|(i, c)| Cell::from_json(i, c))
            .collect::<Result<Vec<_>>>()?,
        _ => return Err(Error::MalformedNotebook("missing cells".into())),
    };
    let metadata = obj
        .remove("metadata")
        .ok_or_else(|| Error::MalformedNotebook("missing metadata".into()))?;
    Ok(Notebook {
        format_version: (major, minor),
        cells,
        metadata,
        extra: obj,
    })
}

pub fn serialize_notebook(nb: &Notebook) -> Vec<u8> {
    let mut obj = nb.extra.clone();
    obj.insert(
        "cells".into(),
        Value::Array(nb.cells.iter().map(Cell::to_json).collect()),
    );
    obj.insert("metadata".into(), nb.metadata.clone());
    obj.insert("nbformat".into(), nb.format_version.0.into());
    obj.insert("nbformat_minor".into(), nb.format_version.1.into());
    let mut out = Vec::new();
    let fmt = serde_json::ser::PrettyFormatter::with_indent(b" ");
    let mut ser = serde_json::Serializer::with_formatter(&mut out, fmt);
    Value::Object(obj)
        .serialize(&mut ser)
        .expect("serializing a JSON value to memory cannot fail");
    out.push(b'\n');
    out
}

impl Notebook {
    pub fn new(cells: Vec<Cell>) -> Self {
        let mut nb = Notebook {
            cells,
            ..Notebook::default()
        };
        nb.reindex();
        nb
    }

    pub fn code_cells(&self) -> impl Iterator<Item = &Cell> {
        self.cells.iter().filter(|c| c.is_code())
    }

    pub(crate) fn reindex(&mut self) {
        for (i, c) in self.cells.iter_mut().enumerate() {
            c.index = i;
        }
    }

    fn code_cell(&self, cell_index: usize) -> Result<&Cell> {
        match self.cells.get(cell_index) {
            Some(c) if c.is_code() => Ok(c),
            _ => Err(Error::NotACodeCell(cell_index)),
        }
    }

    /// Inserts marked statements right after `anchor_line` (1-based; 0 means
    /// before the first line), indented like the statement ending there.
    pub fn insert_statements(
        &self,
        cell_index: usize,
        anchor_line: usize,
        statements: &[String],
    ) -> Result<Notebook> {
        let cell = self.code_cell(cell_index)?;
        let len = cell.line_count();
        if anchor_line > len {
            return Err(Error::AnchorOutOfRange {
                cell: cell_index,
                line: anchor_line,
                len,
            });
        }
        let indent = pysrc::indent_for_insertion(&cell.source, anchor_line);
        let new_lines: Vec<String> = statements
            .iter()
            .flat_map(|s| s.split('\n').map(str::to_string).collect::<Vec<_>>())
            .map(|l| mark_line(&format!("{indent}{l}")))
            .collect();
        let mut nb = self.clone();
        nb.cells[cell_index].source = splice_lines(&cell.source, anchor_line, &new_lines);
        Ok(nb)
    }

    /// Replaces lines `first..=last` of a cell: the originals are kept as
    /// `ORIGINAL_PREFIX` comments and `replacement` is inserted after them as
    /// generated lines. Returns the new notebook and the 1-based line of the
    /// last replacement line.
    pub fn rewrite_lines(
        &self,
        cell_index: usize,
        first: usize,
        last: usize,
        replacement: &[String],
    ) -> Result<(Notebook, usize)> {
        let cell = self.code_cell(cell_index)?;
        let len = cell.line_count();
        if first == 0 || first > last || last > len {
            return Err(Error::AnchorOutOfRange {
                cell: cell_index,
                line: last,
                len,
            });
        }
        let mut lines: Vec<String> = cell.source.split_inclusive('\n').map(String::from).collect();
        for line in &mut lines[first - 1..last] {
            *line = format!("{ORIGINAL_PREFIX}{line}");
        }
        let commented = lines.concat();
        let marked: Vec<String> = replacement.iter().map(|l| mark_line(l)).collect();
        let mut nb = self.clone();
        nb.cells[cell_index].source = splice_lines(&commented, last, &marked);
        Ok((nb, last + marked.len()))
    }

    /// Adds a tool-owned code cell at the front.
    pub fn with_preamble(&self, lines: &[String]) -> Notebook {
        let source = lines
            .iter()
            .map(|l| mark_line(l))
            .collect::<Vec<_>>()
            .join("\n");
        let mut nb = self.clone();
        nb.cells.insert(0, Cell::code(source).mark_generated());
        nb.reindex();
        nb
    }

    /// Removes everything the tool added: generated cells and lines, and
    /// restores lines held under `ORIGINAL_PREFIX`.
    pub fn strip(&self) -> Notebook {
        let mut nb = self.clone();
        nb.cells.retain(|c| !c.is_generated());
        for cell in nb.cells.iter_mut().filter(|c| c.is_code()) {
            cell.source = strip_source(&cell.source);
        }
        nb.reindex();
        nb
    }

    pub fn has_generated_content(&self) -> bool {
        self.cells.iter().any(|c| {
            c.is_generated()
                || c.source
                    .split('\n')
                    .any(|l| is_generated_line(l) || l.starts_with(ORIGINAL_PREFIX))
        })
    }
}

pub fn mark_line(line: &str) -> String {
    format!("{line}  {GENERATED_MARKER}")
}

pub fn is_generated_line(line: &str) -> bool {
    line.trim_end_matches(['\n', '\r']).ends_with(GENERATED_MARKER)
}

/// Inserts `new_lines` after 1-based line `after` of `source`.
fn splice_lines(source: &str, after: usize, new_lines: &[String]) -> String {
    if new_lines.is_empty() {
        return source.to_string();
    }
    let mut lines: Vec<String> = source.split_inclusive('\n').map(String::from).collect();
    let at_end = after == lines.len();
    let mut inserted: Vec<String> = new_lines.iter().map(|l| format!("{l}\n")).collect();
    if at_end {
        match lines.last_mut() {
            Some(last) if !last.ends_with('\n') => {
                last.push('\n');
                let tail = inserted.last_mut().expect("non-empty");
                tail.pop();
            }
            None => {
                let tail = inserted.last_mut().expect("non-empty");
                tail.pop();
            }
            _ => {}
        }
    }
    lines.splice(after..after, inserted);
    lines.concat()
}

/// Cell source with generated lines removed and original lines restored.
pub fn strip_source(source: &str) -> String {
    let lines: Vec<&str> = source.split_inclusive('\n').collect();
    let ends_without_newline = lines.last().is_some_and(|l| !l.ends_with('\n'));
    let mut out = String::with_capacity(source.len());
    let mut last_kept_was_final = false;
    for (i, line) in lines.iter().enumerate() {
        if is_generated_line(line) {
            continue;
        }
        match line.strip_prefix(ORIGINAL_PREFIX) {
            Some(orig) => out.push_str(orig),
            None => out.push_str(line),
        }
        last_kept_was_final = i + 1 == lines.len();
    }
    if ends_without_newline && !last_kept_was_final && out.ends_with('\n') {
        out.pop();
    }
    out
}
