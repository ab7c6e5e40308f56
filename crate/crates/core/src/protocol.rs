//! JSON-lines wire protocol between the harness and the in-kernel driver,
//! and the trace types collected from it.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};

pub const ENV_ASSERTS: &str = "NBTEST_ASSERTS";
pub const ENV_EVENT_PATH: &str = "NBTEST_EVENT_PATH";
pub const ENV_SEED: &str = "NBTEST_SEED";
pub const ENV_HASH_SEED: &str = "PYTHONHASHSEED";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AssertStatus {
    Pass,
    Fail,
    Error,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "ev", rename_all = "snake_case")]
pub enum Event {
    CellStart {
        cell: usize,
    },
    Probe {
        id: String,
        kind: String,
        payload: PropertySummary,
    },
    Assert {
        test_id: String,
        status: AssertStatus,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        msg: Option<String>,
    },
    CellError {
        cell: usize,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        msg: Option<String>,
    },
    Done,
}

impl Event {
    pub fn to_line(&self) -> String {
        serde_json::to_string(self).expect("event serialization")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerSummary {
    #[serde(rename = "type")]
    pub layer_type: String,
    /// `None` entries are unknown (batch) dimensions.
    pub output_shape: Option<Vec<Option<i64>>>,
    pub param_count: u64,
}

/// Per-run summary of one property value. Non-finite floats travel as null.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum PropertySummary {
    Scalar {
        value: Option<f64>,
    },
    Table {
        shape: (u64, u64),
        column_names: Vec<String>,
        column_types: Vec<String>,
        numeric_mean: Option<f64>,
        numeric_variance: Option<f64>,
    },
    Model {
        layers: Vec<LayerSummary>,
        hyperparams: BTreeMap<String, Value>,
    },
    Array {
        shape: Vec<u64>,
        mean: Option<f64>,
        variance: Option<f64>,
    },
    Error {
        #[serde(default)]
        msg: String,
    },
}

impl PropertySummary {
    pub fn variant(&self) -> &'static str {
        match self {
            PropertySummary::Scalar { .. } => "scalar",
            PropertySummary::Table { .. } => "table",
            PropertySummary::Model { .. } => "model",
            PropertySummary::Array { .. } => "array",
            PropertySummary::Error { .. } => "error",
        }
    }

    fn check(&self) -> std::result::Result<(), String> {
        if let PropertySummary::Table {
            shape,
            column_names,
            column_types,
            ..
        } = self
        {
            let cols = shape.1 as usize;
            if column_names.len() != cols || column_types.len() != cols {
                return Err(format!(
                    "table with {cols} columns lists {} names and {} types",
                    column_names.len(),
                    column_types.len()
                ));
            }
        }
        Ok(())
    }
}

/// Parses a dedicated event stream: every non-blank line must be an event.
pub fn parse_event_stream(text: &str) -> Result<Vec<Event>> {
    let mut events = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        events.push(parse_line(line).map_err(|e| {
            Error::ProtocolViolation(format!("line {}: {e}", i + 1))
        })?);
    }
    Ok(events)
}

/// Extracts events from output that may interleave user prints: only lines
/// that are JSON objects carrying an `ev` field count, and those must be
/// well formed.
pub fn scan_mixed_output(text: &str) -> Result<Vec<Event>> {
    let mut events = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let trimmed = line.trim();
        if !trimmed.starts_with('{') {
            continue;
        }
        let Ok(Value::Object(obj)) = serde_json::from_str::<Value>(trimmed) else {
            continue;
        };
        if !obj.contains_key("ev") {
            continue;
        }
        events.push(parse_line(trimmed).map_err(|e| {
            Error::ProtocolViolation(format!("line {}: {e}", i + 1))
        })?);
    }
    Ok(events)
}

fn parse_line(line: &str) -> std::result::Result<Event, String> {
    let ev: Event = serde_json::from_str(line.trim()).map_err(|e| e.to_string())?;
    if let Event::Probe { payload, .. } = &ev {
        payload.check()?;
    }
    Ok(ev)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SampleStatus {
    Ok,
    Error,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceSample {
    pub property_id: String,
    pub run_index: usize,
    pub payload: PropertySummary,
    pub status: SampleStatus,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunExit {
    Ok,
    CellError,
    Timeout,
    Crash,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunOutcome {
    pub run_index: usize,
    pub exit: RunExit,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub message: Option<String>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TraceSet {
    pub samples: BTreeMap<String, Vec<TraceSample>>,
    pub run_outcomes: Vec<RunOutcome>,
}

impl TraceSet {
    /// Adds the probe events of one ok run. A property probed several times
    /// in a run (loop bodies) keeps its last value.
    pub fn record_run(&mut self, run_index: usize, events: &[Event]) {
        let mut last: BTreeMap<&str, &PropertySummary> = BTreeMap::new();
        for ev in events {
            if let Event::Probe { id, payload, .. } = ev {
                last.insert(id, payload);
            }
        }
        for (id, payload) in last {
            let status = match payload {
                PropertySummary::Error { .. } => SampleStatus::Error,
                _ => SampleStatus::Ok,
            };
            let list = self.samples.entry(id.to_string()).or_default();
            list.push(TraceSample {
                property_id: id.to_string(),
                run_index,
                payload: payload.clone(),
                status,
            });
            list.sort_by_key(|s| s.run_index);
        }
    }

    pub fn ok_samples(&self, property_id: &str) -> Vec<&PropertySummary> {
        self.samples
            .get(property_id)
            .map(|v| {
                v.iter()
                    .filter(|s| s.status == SampleStatus::Ok)
                    .map(|s| &s.payload)
                    .collect()
            })
            .unwrap_or_default()
    }

    pub fn failed_runs(&self) -> usize {
        self.run_outcomes
            .iter()
            .filter(|o| o.exit != RunExit::Ok)
            .count()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn wire_field_names() {
        assert_eq!(Event::CellStart { cell: 2 }.to_line(), r#"{"ev":"cell_start","cell":2}"#);
        assert_eq!(Event::Done.to_line(), r#"{"ev":"done"}"#);
        let ev = Event::Probe {
            id: "p0".into(),
            kind: "ModelPerf".into(),
            payload: PropertySummary::Scalar { value: Some(0.85) },
        };
        assert_eq!(
            ev.to_line(),
            r#"{"ev":"probe","id":"p0","kind":"ModelPerf","payload":{"type":"scalar","value":0.85}}"#
        );
        let ev = Event::Assert {
            test_id: "0_1".into(),
            status: AssertStatus::Fail,
            msg: Some("x".into()),
        };
        assert_eq!(
            ev.to_line(),
            r#"{"ev":"assert","test_id":"0_1","status":"fail","msg":"x"}"#
        );
    }

    #[test]
    fn table_payload_parses() {
        let line = r#"{"ev":"probe","id":"p1","kind":"Dataset","payload":{"type":"table","shape":[2,2],"column_names":["a","b"],"column_types":["int64","object"],"numeric_mean":1.5,"numeric_variance":null}}"#;
        let evs = parse_event_stream(line).unwrap();
        match &evs[0] {
            Event::Probe { payload: PropertySummary::Table { shape, numeric_variance, .. }, .. } => {
                assert_eq!(*shape, (2, 2));
                assert_eq!(*numeric_variance, None);
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn inconsistent_table_is_violation() {
        let line = r#"{"ev":"probe","id":"p1","kind":"Dataset","payload":{"type":"table","shape":[2,3],"column_names":["a","b"],"column_types":["x","y"],"numeric_mean":1,"numeric_variance":1}}"#;
        assert!(matches!(parse_event_stream(line), Err(Error::ProtocolViolation(_))));
    }

    #[test]
    fn strict_stream_rejects_garbage() {
        assert!(parse_event_stream("{\"ev\":\"done\"}\nhello").is_err());
        assert!(parse_event_stream("{\"ev\":\"nope\"}").is_err());
    }

    #[test]
    fn mixed_output_skips_user_prints() {
        let out = "hello\n{\"a\": 1}\n{\"ev\":\"cell_start\",\"cell\":0}\n[1, 2]\n{\"ev\":\"done\"}\n";
        let evs = scan_mixed_output(out).unwrap();
        assert_eq!(evs, vec![Event::CellStart { cell: 0 }, Event::Done]);
        assert!(scan_mixed_output("{\"ev\":\"probe\"}").is_err());
    }

    #[test]
    fn loop_probe_keeps_last() {
        let mut ts = TraceSet::default();
        let probe = |v| Event::Probe {
            id: "p0".into(),
            kind: "ModelPerf".into(),
            payload: PropertySummary::Scalar { value: Some(v) },
        };
        ts.record_run(0, &[probe(1.0), probe(2.0)]);
        assert_eq!(ts.samples["p0"].len(), 1);
        assert_eq!(ts.ok_samples("p0"), vec![&PropertySummary::Scalar { value: Some(2.0) }]);
    }
}
