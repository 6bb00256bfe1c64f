//! CSV and JSON serialisation of robustness reports. Numbers are written with
//! four decimals and rows in `(kind, target, severity)` order, so emitting a
//! parsed report reproduces the original bytes.

use std::fmt::Write as _;
use std::path::Path;

use serde_json::Value;

use crate::error::{Error, Result};
use crate::metrics::{CkaRow, ReportRow, RobustnessReport};
use crate::scenesim::CorruptionSpec;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ReportFormat {
    Csv,
    Json,
}

impl std::str::FromStr for ReportFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "csv" => Ok(ReportFormat::Csv),
            "json" => Ok(ReportFormat::Json),
            other => Err(Error::Config(format!("unknown report format {other:?}"))),
        }
    }
}

impl ReportFormat {
    pub fn extension(self) -> &'static str {
        match self {
            ReportFormat::Csv => "csv",
            ReportFormat::Json => "json",
        }
    }
}

pub const CSV_HEADER: &str = "corruption_kind,target,severity,mAP";

fn sorted(report: &RobustnessReport) -> (Vec<ReportRow>, Vec<CkaRow>) {
    let mut rows = report.rows.clone();
    rows.sort_by_key(|a| a.spec);
    let mut cka = report.cka_rows.clone();
    cka.sort_by_key(|a| a.spec);
    (rows, cka)
}

pub fn to_csv(report: &RobustnessReport) -> String {
    let (rows, _) = sorted(report);
    let mut s = String::new();
    writeln!(s, "{CSV_HEADER}").unwrap();
    for r in rows {
        writeln!(s, "{},{},{},{:.4}", r.spec.kind, r.spec.target, r.spec.severity, r.map).unwrap();
    }
    writeln!(s, "clean_mAP,,,{:.4}", report.clean_map).unwrap();
    writeln!(s, "mRR,,,{:.4}", report.mrr).unwrap();
    s
}

/// CSV of the CKA rows alone.
pub fn cka_to_csv(report: &RobustnessReport) -> String {
    let (_, cka) = sorted(report);
    let mut s = String::from("corruption_kind,target,severity,invariant_cka,specific_cka\n");
    for r in cka {
        writeln!(
            s,
            "{},{},{},{:.4},{:.4}",
            r.spec.kind, r.spec.target, r.spec.severity, r.invariant, r.specific
        )
        .unwrap();
    }
    s
}

fn spec_fields(spec: &CorruptionSpec) -> String {
    format!(
        "\"corruption_kind\": \"{}\", \"target\": \"{}\", \"severity\": \"{}\"",
        spec.kind, spec.target, spec.severity
    )
}

pub fn to_json(report: &RobustnessReport) -> String {
    let (rows, cka) = sorted(report);
    let mut s = String::from("{\n  \"rows\": [");
    for (i, r) in rows.iter().enumerate() {
        let sep = if i + 1 < rows.len() { "," } else { "" };
        write!(s, "\n    {{{}, \"mAP\": {:.4}}}{sep}", spec_fields(&r.spec), r.map).unwrap();
    }
    if !rows.is_empty() {
        s.push_str("\n  ");
    }
    write!(s, "],\n  \"clean_mAP\": {:.4},\n  \"mRR\": {:.4},\n  \"cka_rows\": [", report.clean_map, report.mrr).unwrap();
    for (i, r) in cka.iter().enumerate() {
        let sep = if i + 1 < cka.len() { "," } else { "" };
        write!(
            s,
            "\n    {{{}, \"invariant_cka\": {:.4}, \"specific_cka\": {:.4}}}{sep}",
            spec_fields(&r.spec),
            r.invariant,
            r.specific
        )
        .unwrap();
    }
    if !cka.is_empty() {
        s.push_str("\n  ");
    }
    s.push_str("]\n}\n");
    s
}

pub fn render(report: &RobustnessReport, format: ReportFormat) -> String {
    match format {
        ReportFormat::Csv => to_csv(report),
        ReportFormat::Json => to_json(report),
    }
}

pub fn emit_report(report: &RobustnessReport, format: ReportFormat, path: &Path) -> Result<()> {
    std::fs::write(path, render(report, format)).map_err(|e| Error::io(path, e))
}

fn parse_num(s: &str, what: &str) -> Result<f64> {
    s.trim()
        .parse::<f64>()
        .map_err(|_| Error::Parse(format!("{what}: {s:?} is not a number")))
}

fn parse_spec(kind: &str, target: &str, severity: &str) -> Result<CorruptionSpec> {
    let spec = CorruptionSpec::new(kind.parse()?, target.parse()?, severity.parse()?);
    spec.validate()?;
    Ok(spec)
}

pub fn parse_csv(text: &str) -> Result<RobustnessReport> {
    let mut lines = text.lines();
    if lines.next() != Some(CSV_HEADER) {
        return Err(Error::Parse(format!("report CSV must start with {CSV_HEADER:?}")));
    }
    let mut rows = Vec::new();
    let (mut clean, mut mrr) = (None, None);
    for (n, line) in lines.enumerate() {
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 4 {
            return Err(Error::Parse(format!("line {}: expected 4 fields", n + 2)));
        }
        match f[0] {
            "clean_mAP" => clean = Some(parse_num(f[3], "clean_mAP")?),
            "mRR" => mrr = Some(parse_num(f[3], "mRR")?),
            _ => rows.push(ReportRow {
                spec: parse_spec(f[0], f[1], f[2])?,
                map: parse_num(f[3], "mAP")?,
            }),
        }
    }
    match (clean, mrr) {
        (Some(clean_map), Some(mrr)) => Ok(RobustnessReport {
            clean_map,
            rows,
            mrr,
            cka_rows: Vec::new(),
        }),
        _ => Err(Error::Parse("report CSV lacks the clean_mAP or mRR footer".into())),
    }
}

fn field<'a>(v: &'a Value, key: &str) -> Result<&'a Value> {
    v.get(key).ok_or_else(|| Error::Parse(format!("report JSON lacks {key:?}")))
}

fn num(v: &Value, key: &str) -> Result<f64> {
    field(v, key)?
        .as_f64()
        .ok_or_else(|| Error::Parse(format!("{key:?} is not a number")))
}

fn text<'a>(v: &'a Value, key: &str) -> Result<&'a str> {
    field(v, key)?
        .as_str()
        .ok_or_else(|| Error::Parse(format!("{key:?} is not a string")))
}

fn json_spec(v: &Value) -> Result<CorruptionSpec> {
    parse_spec(text(v, "corruption_kind")?, text(v, "target")?, text(v, "severity")?)
}

fn array<'a>(v: &'a Value, key: &str) -> Result<&'a Vec<Value>> {
    field(v, key)?
        .as_array()
        .ok_or_else(|| Error::Parse(format!("{key:?} is not an array")))
}

pub fn parse_json(text_in: &str) -> Result<RobustnessReport> {
    let v: Value = serde_json::from_str(text_in).map_err(|e| Error::Parse(e.to_string()))?;
    let rows = array(&v, "rows")?
        .iter()
        .map(|r| {
            Ok(ReportRow {
                spec: json_spec(r)?,
                map: num(r, "mAP")?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let cka_rows = array(&v, "cka_rows")?
        .iter()
        .map(|r| {
            Ok(CkaRow {
                spec: json_spec(r)?,
                invariant: num(r, "invariant_cka")?,
                specific: num(r, "specific_cka")?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(RobustnessReport {
        clean_map: num(&v, "clean_mAP")?,
        rows,
        mrr: num(&v, "mRR")?,
        cka_rows,
    })
}

pub fn parse(text: &str, format: ReportFormat) -> Result<RobustnessReport> {
    match format {
        ReportFormat::Csv => parse_csv(text),
        ReportFormat::Json => parse_json(text),
    }
}
