//! Turns collected traces into assertion specs and writes them into the
//! notebook.

use std::collections::BTreeMap;

use log::warn;
use serde::Serialize;
use serde_json::Value;

use crate::bounds::bound;
use crate::error::{Error, Result};
use crate::finder::{AnalysisReport, TrackedProperty};
use crate::literal::{py_repr, render_float, ExpectedValue};
use crate::notebook::Notebook;
use crate::protocol::{LayerSummary, PropertySummary, TraceSet};

pub const RUNTIME_MODULE: &str = "nbtest";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
pub enum AssertionKind {
    AllClose,
    Equal,
    True,
    False,
    ColumnNames,
    ColumnTypes,
    Shape,
    DfMean,
    DfVar,
    ModelLayers,
}

impl AssertionKind {
    pub const ALL: [AssertionKind; 10] = [
        AssertionKind::AllClose,
        AssertionKind::Equal,
        AssertionKind::True,
        AssertionKind::False,
        AssertionKind::ColumnNames,
        AssertionKind::ColumnTypes,
        AssertionKind::Shape,
        AssertionKind::DfMean,
        AssertionKind::DfVar,
        AssertionKind::ModelLayers,
    ];

    pub fn function(self) -> &'static str {
        match self {
            AssertionKind::AllClose => "assert_allclose",
            AssertionKind::Equal => "assert_equal",
            AssertionKind::True => "assert_true",
            AssertionKind::False => "assert_false",
            AssertionKind::ColumnNames => "assert_column_names",
            AssertionKind::ColumnTypes => "assert_column_types",
            AssertionKind::Shape => "assert_shape",
            AssertionKind::DfMean => "assert_df_mean",
            AssertionKind::DfVar => "assert_df_var",
            AssertionKind::ModelLayers => "assert_model_layers",
        }
    }

    pub fn from_function(name: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|k| k.function() == name)
    }

    pub fn carries_atol(self) -> bool {
        matches!(
            self,
            AssertionKind::AllClose | AssertionKind::DfMean | AssertionKind::DfVar
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AssertionSpec {
    pub test_id: String,
    pub kind: AssertionKind,
    pub target_expr: String,
    pub expected: ExpectedValue,
    pub atol: Option<f64>,
    pub property_id: String,
    pub cell_index: usize,
    pub anchor_line: usize,
}

impl AssertionSpec {
    pub fn render(&self) -> String {
        let mut s = format!(
            "{RUNTIME_MODULE}.{}({}, {}",
            self.kind.function(),
            self.target_expr,
            self.expected.render()
        );
        if let Some(atol) = self.atol {
            s.push_str(&format!(", atol={}", render_float(atol)));
        }
        s.push_str(&format!(", test_id={})", py_repr(&self.test_id)));
        s
    }
}

/// Expected value plus optional tolerance for one spec.
type Draft = (AssertionKind, ExpectedValue, Option<f64>);

pub fn synthesize(
    traces: &TraceSet,
    report: &AnalysisReport,
    confidence: f64,
) -> Result<Vec<AssertionSpec>> {
    crate::bounds::chebyshev_k(confidence)?;
    let mut props: Vec<&TrackedProperty> = report.properties.iter().collect();
    props.sort_by_key(|p| (p.cell_index, p.anchor_line, id_number(&p.id)));
    let mut counters: BTreeMap<usize, usize> = BTreeMap::new();
    let mut specs = Vec::new();
    for prop in props {
        let Some(all) = traces.samples.get(&prop.id).filter(|v| !v.is_empty()) else {
            return Err(Error::NoSamples(prop.id.clone()));
        };
        let samples = traces.ok_samples(&prop.id);
        if samples.is_empty() {
            warn!(
                "{}: every probe reported an error ({} runs), no assertions",
                prop.id,
                all.len()
            );
            continue;
        }
        let variant = samples[0].variant();
        if samples.iter().any(|s| s.variant() != variant) {
            warn!("{}: summary variant changed across runs, skipped", prop.id);
            continue;
        }
        let drafts = drafts_for(prop, &samples, confidence)?;
        for (kind, expected, atol) in drafts {
            let counter = counters.entry(prop.cell_index).or_insert(0);
            specs.push(AssertionSpec {
                test_id: format!("{}_{}", prop.cell_index, counter),
                kind,
                target_expr: prop.target.clone(),
                expected,
                atol,
                property_id: prop.id.clone(),
                cell_index: prop.cell_index,
                anchor_line: prop.anchor_line,
            });
            *counter += 1;
        }
    }
    Ok(specs)
}

fn id_number(id: &str) -> u64 {
    id.trim_start_matches(|c: char| !c.is_ascii_digit())
        .parse()
        .unwrap_or(u64::MAX)
}

fn drafts_for(
    prop: &TrackedProperty,
    samples: &[&PropertySummary],
    confidence: f64,
) -> Result<Vec<Draft>> {
    let mut out = Vec::new();
    match samples[0] {
        PropertySummary::Scalar { .. } => {
            let values = samples.iter().map(|s| match s {
                PropertySummary::Scalar { value } => *value,
                _ => unreachable!(),
            });
            push_numeric(&mut out, prop, AssertionKind::AllClose, values, confidence)?;
        }
        PropertySummary::Table { .. } => {
            let field = |f: fn(&PropertySummary) -> ExpectedValue| samples.iter().map(move |s| f(s));
            push_exact(&mut out, prop, AssertionKind::Shape, field(|s| match s {
                PropertySummary::Table { shape, .. } => ExpectedValue::Tuple(vec![
                    ExpectedValue::Int(shape.0 as i64),
                    ExpectedValue::Int(shape.1 as i64),
                ]),
                _ => unreachable!(),
            }));
            push_exact(&mut out, prop, AssertionKind::ColumnNames, field(|s| match s {
                PropertySummary::Table { column_names, .. } => ExpectedValue::List(
                    column_names.iter().cloned().map(ExpectedValue::Str).collect(),
                ),
                _ => unreachable!(),
            }));
            push_exact(&mut out, prop, AssertionKind::ColumnTypes, field(|s| match s {
                PropertySummary::Table { column_types, .. } => ExpectedValue::List(
                    column_types.iter().cloned().map(ExpectedValue::Str).collect(),
                ),
                _ => unreachable!(),
            }));
            let means = samples.iter().map(|s| match s {
                PropertySummary::Table { numeric_mean, .. } => *numeric_mean,
                _ => unreachable!(),
            });
            push_numeric(&mut out, prop, AssertionKind::DfMean, means, confidence)?;
            let vars = samples.iter().map(|s| match s {
                PropertySummary::Table { numeric_variance, .. } => *numeric_variance,
                _ => unreachable!(),
            });
            push_numeric(&mut out, prop, AssertionKind::DfVar, vars, confidence)?;
        }
        PropertySummary::Array { .. } => {
            push_exact(&mut out, prop, AssertionKind::Shape, samples.iter().map(|s| match s {
                PropertySummary::Array { shape, .. } => ExpectedValue::Tuple(
                    shape.iter().map(|d| ExpectedValue::Int(*d as i64)).collect(),
                ),
                _ => unreachable!(),
            }));
            let means = samples.iter().map(|s| match s {
                PropertySummary::Array { mean, .. } => *mean,
                _ => unreachable!(),
            });
            push_numeric(&mut out, prop, AssertionKind::DfMean, means, confidence)?;
            let vars = samples.iter().map(|s| match s {
                PropertySummary::Array { variance, .. } => *variance,
                _ => unreachable!(),
            });
            push_numeric(&mut out, prop, AssertionKind::DfVar, vars, confidence)?;
        }
        PropertySummary::Model { .. } => {
            if let Some(expected) = model_expectation(prop, samples) {
                out.push((AssertionKind::ModelLayers, expected, None));
            }
        }
        PropertySummary::Error { .. } => unreachable!("error payloads are not ok samples"),
    }
    Ok(out)
}

fn push_exact(
    out: &mut Vec<Draft>,
    prop: &TrackedProperty,
    kind: AssertionKind,
    mut values: impl Iterator<Item = ExpectedValue>,
) {
    let first = values.next().expect("at least one sample");
    if values.all(|v| v == first) {
        out.push((kind, first, None));
    } else {
        warn!("{}: {:?} differs across runs, dropped", prop.id, kind);
    }
}

fn push_numeric(
    out: &mut Vec<Draft>,
    prop: &TrackedProperty,
    kind: AssertionKind,
    values: impl Iterator<Item = Option<f64>>,
    confidence: f64,
) -> Result<()> {
    let values: Option<Vec<f64>> = values.collect();
    let Some(values) = values.filter(|v| v.iter().all(|x| x.is_finite())) else {
        warn!("{}: {:?} has missing or non-finite values, dropped", prop.id, kind);
        return Ok(());
    };
    let b = bound(&values, confidence)?;
    out.push((kind, ExpectedValue::Float(b.mean), Some(b.atol)));
    Ok(())
}

fn layer_literal(l: &LayerSummary) -> ExpectedValue {
    let shape = match &l.output_shape {
        None => ExpectedValue::None,
        Some(dims) => ExpectedValue::Tuple(
            dims.iter()
                .map(|d| d.map_or(ExpectedValue::None, ExpectedValue::Int))
                .collect(),
        ),
    };
    ExpectedValue::Tuple(vec![
        ExpectedValue::Str(l.layer_type.clone()),
        shape,
        ExpectedValue::Int(l.param_count as i64),
    ])
}

/// Layers must agree across runs; hyperparameters that vary are left out.
fn model_expectation(prop: &TrackedProperty, samples: &[&PropertySummary]) -> Option<ExpectedValue> {
    let parts: Vec<(&Vec<LayerSummary>, &BTreeMap<String, Value>)> = samples
        .iter()
        .map(|s| match s {
            PropertySummary::Model { layers, hyperparams } => (layers, hyperparams),
            _ => unreachable!(),
        })
        .collect();
    let (layers, first_hp) = parts[0];
    if parts.iter().any(|(l, _)| *l != layers) {
        warn!("{}: model layers differ across runs, dropped", prop.id);
        return None;
    }
    let mut hyper = Vec::new();
    for (key, value) in first_hp {
        if parts.iter().all(|(_, hp)| hp.get(key) == Some(value)) {
            hyper.push((ExpectedValue::Str(key.clone()), ExpectedValue::from_json(value)));
        } else {
            warn!("{}: hyperparameter {key} varies across runs, left out", prop.id);
        }
    }
    Some(ExpectedValue::Dict(vec![
        (
            ExpectedValue::Str("layers".into()),
            ExpectedValue::List(layers.iter().map(layer_literal).collect()),
        ),
        (ExpectedValue::Str("hyperparams".into()), ExpectedValue::Dict(hyper)),
    ]))
}

/// Writes each spec right after its anchor, replacing any earlier generated
/// content, and prepends a preamble importing the runtime.
pub fn inject(nb: &Notebook, specs: &[AssertionSpec]) -> Result<Notebook> {
    let mut out = nb.strip();
    let mut groups: BTreeMap<(usize, usize), Vec<String>> = BTreeMap::new();
    for spec in specs {
        groups
            .entry((spec.cell_index, spec.anchor_line))
            .or_default()
            .push(spec.render());
    }
    for ((cell, line), stmts) in groups.into_iter().rev() {
        out = out.insert_statements(cell, line, &stmts).map_err(|e| match e {
            Error::AnchorOutOfRange { .. } | Error::NotACodeCell(_) => {
                Error::InstrumentationConflict(format!("assertion anchor cell {cell} line {line}: {e}"))
            }
            other => other,
        })?;
    }
    Ok(out.with_preamble(&[format!("import {RUNTIME_MODULE}")]))
}
