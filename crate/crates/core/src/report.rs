//! Tabular result reports in CSV or JSON.
//!
//! Floats are written with 9 significant digits, as the shortest decimal that
//! parses back to the rounded value, so re-reading a report and writing it
//! again is byte-identical.

use std::io::Write;
use std::str::FromStr;

use serde_json::{Map, Number, Value as Json};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Format {
    Csv,
    Json,
}

impl FromStr for Format {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "csv" => Ok(Format::Csv),
            "json" => Ok(Format::Json),
            other => Err(Error::InvalidConfig(format!("unknown report format {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Value {
    Int(i64),
    Float(f64),
    Text(String),
    Empty,
}

impl From<f64> for Value {
    fn from(v: f64) -> Self {
        Value::Float(v)
    }
}

impl From<usize> for Value {
    fn from(v: usize) -> Self {
        Value::Int(v as i64)
    }
}

impl From<&str> for Value {
    fn from(v: &str) -> Self {
        Value::Text(v.to_string())
    }
}

impl From<String> for Value {
    fn from(v: String) -> Self {
        Value::Text(v)
    }
}

impl From<bool> for Value {
    fn from(v: bool) -> Self {
        Value::Int(v as i64)
    }
}

/// Rounds to 9 significant digits.
pub fn round_sig9(x: f64) -> f64 {
    if !x.is_finite() || x == 0.0 {
        return x;
    }
    format!("{x:.8e}").parse().expect("formatted float parses")
}

pub fn fmt_sig9(x: f64) -> String {
    if x.is_nan() {
        "nan".into()
    } else if x.is_infinite() {
        if x > 0.0 { "inf".into() } else { "-inf".into() }
    } else {
        format!("{:?}", round_sig9(x))
    }
}

impl Value {
    fn to_text(&self) -> String {
        match self {
            Value::Int(i) => i.to_string(),
            Value::Float(f) => fmt_sig9(*f),
            Value::Text(s) => s.clone(),
            Value::Empty => String::new(),
        }
    }

    fn to_json(&self) -> Json {
        match self {
            Value::Int(i) => Json::from(*i),
            Value::Float(f) => Number::from_f64(round_sig9(*f)).map_or(Json::Null, Json::Number),
            Value::Text(s) => Json::from(s.clone()),
            Value::Empty => Json::Null,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Table {
    pub columns: Vec<&'static str>,
    pub rows: Vec<Vec<Value>>,
}

/// Anything that can be written as a report.
pub trait Report {
    /// Short identifier written into JSON output.
    fn kind(&self) -> &'static str;
    /// Scalar summary fields, in output order.
    fn summary(&self) -> Vec<(&'static str, Value)>;
    /// Row data; the CSV form of the report is exactly this table.
    fn table(&self) -> Table;
}

/// Key/value pairs describing the effective run configuration.
pub type Provenance = Vec<(String, String)>;

pub fn write_report<W: Write>(
    report: &dyn Report,
    format: Format,
    provenance: &[(String, String)],
    mut sink: W,
) -> Result<()> {
    match format {
        Format::Csv => {
            for (k, v) in provenance {
                writeln!(sink, "# {k} = {v}")?;
            }
            let table = report.table();
            let mut w = csv::WriterBuilder::new().from_writer(&mut sink);
            w.write_record(&table.columns)?;
            for row in &table.rows {
                w.write_record(row.iter().map(Value::to_text))?;
            }
            w.flush()?;
        }
        Format::Json => {
            let mut root = Map::new();
            root.insert("report".into(), Json::from(report.kind()));
            if !provenance.is_empty() {
                let cfg: Map<String, Json> = provenance
                    .iter()
                    .map(|(k, v)| (k.clone(), Json::from(v.clone())))
                    .collect();
                root.insert("config".into(), Json::Object(cfg));
            }
            let summary: Map<String, Json> = report
                .summary()
                .into_iter()
                .map(|(k, v)| (k.to_string(), v.to_json()))
                .collect();
            root.insert("summary".into(), Json::Object(summary));
            let table = report.table();
            let rows: Vec<Json> = table
                .rows
                .iter()
                .map(|row| {
                    Json::Object(
                        table
                            .columns
                            .iter()
                            .zip(row)
                            .map(|(c, v)| (c.to_string(), v.to_json()))
                            .collect(),
                    )
                })
                .collect();
            root.insert("rows".into(), Json::Array(rows));
            serde_json::to_writer_pretty(&mut sink, &Json::Object(root))?;
            writeln!(sink)?;
        }
    }
    Ok(())
}

pub fn report_to_string(report: &dyn Report, format: Format, provenance: &[(String, String)]) -> Result<String> {
    let mut buf = Vec::new();
    write_report(report, format, provenance, &mut buf)?;
    Ok(String::from_utf8(buf).expect("reports are UTF-8"))
}

/// Reads a CSV report written by [`write_report`]: skips `#` lines, returns
/// the header and the raw string rows.
pub fn read_csv_table(text: &str) -> Result<(Vec<String>, Vec<Vec<String>>)> {
    let body: String = text
        .lines()
        .filter(|l| !l.starts_with('#'))
        .map(|l| format!("{l}\n"))
        .collect();
    let mut r = csv::ReaderBuilder::new().from_reader(body.as_bytes());
    let header = r.headers()?.iter().map(str::to_string).collect();
    let mut rows = Vec::new();
    for rec in r.records() {
        rows.push(rec?.iter().map(str::to_string).collect());
    }
    Ok((header, rows))
}
