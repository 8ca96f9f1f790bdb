use std::path::Path;
use std::time::Duration;

use serde::Serialize;
use serde_json::{Map, Number, Value};

use crate::inputs::DataSummary;
use crate::CliError;

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Status {
    Ok,
    PropertyFailure,
    Divergence,
}

impl Status {
    pub fn exit_code(self) -> u8 {
        match self {
            Status::Ok => 0,
            Status::PropertyFailure => 2,
            Status::Divergence => 3,
        }
    }
}

#[derive(Debug, Serialize)]
pub struct RunReport<C: Serialize, R: Serialize> {
    pub schema_version: u32,
    pub command: &'static str,
    pub config: C,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub data: Option<DataSummary>,
    pub status: Status,
    pub results: R,
}

/// Rewrites every non-integer number with 17 significant digits.
fn normalize_floats(v: &mut Value) {
    match v {
        Value::Number(n) if !(n.is_i64() || n.is_u64()) => {
            if let Some(f) = n.as_f64() {
                *n = convexity_lab::serde_f17::format(f).parse::<Number>().expect("formatted float parses");
            }
        }
        Value::Array(items) => items.iter_mut().for_each(normalize_floats),
        Value::Object(map) => map.values_mut().for_each(normalize_floats),
        _ => {}
    }
}

pub fn to_value<T: Serialize>(v: &T) -> Value {
    let mut value = serde_json::to_value(v).expect("reports serialize");
    normalize_floats(&mut value);
    value
}

/// `{"report": …, "envelope": {tool_version, wall_clock_seconds}}`. Everything
/// outside the envelope depends only on the configuration and seeds.
pub fn emit(report: Value, elapsed: Duration, path: Option<&Path>) -> Result<(), CliError> {
    let mut envelope = Map::new();
    envelope.insert("tool_version".into(), Value::String(env!("CARGO_PKG_VERSION").into()));
    envelope.insert("wall_clock_seconds".into(), to_value(&elapsed.as_secs_f64()));
    let mut top = Map::new();
    top.insert("report".into(), report);
    top.insert("envelope".into(), Value::Object(envelope));
    let mut text = serde_json::to_string_pretty(&Value::Object(top)).expect("json");
    text.push('\n');
    match path {
        Some(p) => std::fs::write(p, text).map_err(|e| CliError::usage(format!("{}: {e}", p.display()))),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}
