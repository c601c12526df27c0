//! Panel ingestion (wide CSV, long CSV, JSON), covariates, and JSON results.

use std::collections::{BTreeSet, HashMap};
use std::io::{Read, Write};
use std::path::Path;
use std::str::FromStr;

use ndarray::{Array2, Array3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::panel::PanelData;
use crate::scalar::Real;

/// Version tag written into every result document.
pub const SCHEMA_VERSION: u32 = 1;

/// On-disk panel layouts.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PanelFormat {
    /// Header `unit,<time labels...>`, one row per unit.
    WideCsv,
    /// Header `unit,time,value`, one row per cell, any order.
    LongCsv,
    /// `{"units": [...], "times": [...], "values": [[...], ...]}`.
    Json,
}

impl FromStr for PanelFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "wide-csv" | "wide" | "csv" => Ok(Self::WideCsv),
            "long-csv" | "long" => Ok(Self::LongCsv),
            "json" => Ok(Self::Json),
            other => Err(Error::arg(format!("unknown panel format {other:?}; expected wide-csv, long-csv or json"))),
        }
    }
}

impl PanelFormat {
    /// `.json` is JSON; anything else is sniffed from the header (`unit,time,value` is long).
    pub fn detect(path: &Path, head: &str) -> Self {
        if path.extension().is_some_and(|e| e.eq_ignore_ascii_case("json")) {
            return Self::Json;
        }
        let first = head.lines().next().unwrap_or("").trim();
        let cells: Vec<&str> = first.split(',').map(str::trim).collect();
        if cells == ["unit", "time", "value"] {
            Self::LongCsv
        } else {
            Self::WideCsv
        }
    }
}

fn parse_value<T: Real>(raw: &str, location: impl Fn() -> String) -> Result<T> {
    let v: f64 = raw.trim().parse().map_err(|_| Error::Parse {
        location: location(),
        message: format!("{raw:?} is not a number"),
    })?;
    if !v.is_finite() {
        return Err(Error::Parse { location: location(), message: format!("non-finite value {raw:?}") });
    }
    Ok(T::lit(v))
}

fn csv_err(e: csv::Error) -> Error {
    let location = e
        .position()
        .map(|p| format!("line {}", p.line()))
        .unwrap_or_else(|| "input".to_string());
    Error::Parse { location, message: e.to_string() }
}

/// Reads a panel in the given format.
pub fn load_panel<T: Real, R: Read>(source: R, format: PanelFormat) -> Result<PanelData<T>> {
    match format {
        PanelFormat::WideCsv => load_wide(source),
        PanelFormat::LongCsv => load_long(source),
        PanelFormat::Json => load_json(source),
    }
}

fn load_wide<T: Real, R: Read>(source: R) -> Result<PanelData<T>> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(false).flexible(true).from_reader(source);
    let mut records = rdr.records();
    let header = records
        .next()
        .ok_or_else(|| Error::Parse { location: "line 1".into(), message: "empty input".into() })?
        .map_err(csv_err)?;
    if header.get(0).map(str::trim) != Some("unit") {
        return Err(Error::Parse {
            location: "line 1, column 1".into(),
            message: "wide CSV must start with the cell \"unit\"".into(),
        });
    }
    let times: Vec<String> = header.iter().skip(1).map(|s| s.trim().to_string()).collect();
    let mut units = Vec::new();
    let mut data = Vec::new();
    for (idx, rec) in records.enumerate() {
        let rec = rec.map_err(csv_err)?;
        let line = idx + 2;
        if rec.len() != times.len() + 1 {
            return Err(Error::Parse {
                location: format!("line {line}"),
                message: format!("expected {} fields, found {}", times.len() + 1, rec.len()),
            });
        }
        units.push(rec[0].trim().to_string());
        for (c, raw) in rec.iter().enumerate().skip(1) {
            data.push(parse_value(raw, || format!("line {line}, column {}", c + 1))?);
        }
    }
    let values = Array2::from_shape_vec((units.len(), times.len()), data).map_err(|e| Error::arg(e.to_string()))?;
    PanelData::new(values, units, times)
}

/// Orders labels numerically when they all parse as numbers, else lexically;
/// the result does not depend on the order rows arrive in.
fn order_labels(set: BTreeSet<String>) -> Vec<String> {
    let mut labels: Vec<String> = set.into_iter().collect();
    if labels.iter().all(|l| l.parse::<f64>().is_ok()) {
        labels.sort_by(|a, b| {
            let (x, y) = (a.parse::<f64>().unwrap(), b.parse::<f64>().unwrap());
            x.partial_cmp(&y).unwrap_or(std::cmp::Ordering::Equal).then_with(|| a.cmp(b))
        });
    }
    labels
}

type LongRows = Vec<(String, String, Vec<String>, usize)>;

fn read_long<R: Read>(source: R, value_cols: Option<usize>) -> Result<(Vec<String>, LongRows)> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(source);
    let header: Vec<String> = rdr.headers().map_err(csv_err)?.iter().map(|s| s.trim().to_string()).collect();
    if header.len() < 3 || header[0] != "unit" || header[1] != "time" {
        return Err(Error::Parse { location: "line 1".into(), message: "header must begin with unit,time".into() });
    }
    if let Some(n) = value_cols {
        if header.len() != 2 + n {
            return Err(Error::Parse { location: "line 1".into(), message: "header must be unit,time,value".into() });
        }
    }
    let mut rows = Vec::new();
    for (idx, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(csv_err)?;
        let line = idx + 2;
        let vals = rec.iter().skip(2).map(|s| s.to_string()).collect();
        rows.push((rec[0].trim().to_string(), rec[1].trim().to_string(), vals, line));
    }
    Ok((header, rows))
}

/// Cell index of every (unit, time) pair, erroring on duplicates and gaps.
fn grid_index(rows: &LongRows) -> Result<(Vec<String>, Vec<String>, Vec<usize>)> {
    let units = order_labels(rows.iter().map(|r| r.0.clone()).collect());
    let times = order_labels(rows.iter().map(|r| r.1.clone()).collect());
    let ui: HashMap<&str, usize> = units.iter().enumerate().map(|(i, u)| (u.as_str(), i)).collect();
    let ti: HashMap<&str, usize> = times.iter().enumerate().map(|(i, t)| (t.as_str(), i)).collect();
    let mut slot = vec![usize::MAX; units.len() * times.len()];
    for (row, (u, t, _, _)) in rows.iter().enumerate() {
        let cell = ui[u.as_str()] * times.len() + ti[t.as_str()];
        if slot[cell] != usize::MAX {
            return Err(Error::Duplicate(format!("cell (unit {u:?}, time {t:?})")));
        }
        slot[cell] = row;
    }
    if let Some(cell) = slot.iter().position(|s| *s == usize::MAX) {
        return Err(Error::IncompleteGrid {
            unit: units[cell / times.len()].clone(),
            time: times[cell % times.len()].clone(),
        });
    }
    Ok((units, times, slot))
}

fn load_long<T: Real, R: Read>(source: R) -> Result<PanelData<T>> {
    let (header, rows) = read_long(source, Some(1))?;
    if header[2] != "value" {
        return Err(Error::Parse { location: "line 1".into(), message: "header must be unit,time,value".into() });
    }
    let (units, times, slot) = grid_index(&rows)?;
    let data = slot
        .iter()
        .map(|&r| {
            let (_, _, vals, line) = &rows[r];
            parse_value(&vals[0], || format!("line {line}, column 3"))
        })
        .collect::<Result<Vec<T>>>()?;
    let values = Array2::from_shape_vec((units.len(), times.len()), data).map_err(|e| Error::arg(e.to_string()))?;
    PanelData::new(values, units, times)
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct JsonPanel {
    units: Vec<serde_json::Value>,
    times: Vec<serde_json::Value>,
    values: Vec<Vec<f64>>,
}

fn label(v: &serde_json::Value) -> String {
    match v {
        serde_json::Value::String(s) => s.clone(),
        other => other.to_string(),
    }
}

fn load_json<T: Real, R: Read>(source: R) -> Result<PanelData<T>> {
    let doc: JsonPanel = serde_json::from_reader(source)?;
    let units: Vec<String> = doc.units.iter().map(label).collect();
    let times: Vec<String> = doc.times.iter().map(label).collect();
    if doc.values.len() != units.len() {
        return Err(Error::Parse {
            location: "values".into(),
            message: format!("{} rows for {} units", doc.values.len(), units.len()),
        });
    }
    let mut data = Vec::with_capacity(units.len() * times.len());
    for (i, row) in doc.values.iter().enumerate() {
        if row.len() != times.len() {
            return Err(Error::Parse {
                location: format!("values[{i}]"),
                message: format!("{} entries for {} times", row.len(), times.len()),
            });
        }
        data.extend(row.iter().map(|v| T::lit(*v)));
    }
    let values = Array2::from_shape_vec((units.len(), times.len()), data).map_err(|e| Error::arg(e.to_string()))?;
    PanelData::new(values, units, times)
}

/// Writes the panel as wide CSV; values use the shortest round-trip decimal form.
pub fn write_wide_csv<T: Real, W: Write>(panel: &PanelData<T>, sink: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(sink);
    let mut header = vec!["unit".to_string()];
    header.extend(panel.time_labels().iter().cloned());
    w.write_record(&header).map_err(csv_io)?;
    for (i, unit) in panel.unit_labels().iter().enumerate() {
        let mut rec = vec![unit.clone()];
        rec.extend(panel.values().row(i).iter().map(|v| v.to_string()));
        w.write_record(&rec).map_err(csv_io)?;
    }
    w.flush()?;
    Ok(())
}

fn csv_io(e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::Io(io),
        other => Error::Parse { location: "output".into(), message: format!("{other:?}") },
    }
}

/// Reads covariates in long form (`unit,time,x1,...,xd`) aligned to `panel`;
/// returns an N x T x d array.
pub fn load_covariates<T: Real, R: Read>(source: R, panel: &PanelData<T>) -> Result<Array3<T>> {
    let (header, rows) = read_long(source, None)?;
    let d = header.len() - 2;
    let ui: HashMap<&str, usize> = panel.unit_labels().iter().enumerate().map(|(i, u)| (u.as_str(), i)).collect();
    let ti: HashMap<&str, usize> = panel.time_labels().iter().enumerate().map(|(i, t)| (t.as_str(), i)).collect();
    let (n, t_len) = (panel.n_units(), panel.n_times());
    let mut out = Array3::zeros((n, t_len, d));
    let mut seen = vec![false; n * t_len];
    for (u, t, vals, line) in &rows {
        let (Some(&i), Some(&tt)) = (ui.get(u.as_str()), ti.get(t.as_str())) else {
            return Err(Error::Parse {
                location: format!("line {line}"),
                message: format!("cell (unit {u:?}, time {t:?}) is not in the panel"),
            });
        };
        if std::mem::replace(&mut seen[i * t_len + tt], true) {
            return Err(Error::Duplicate(format!("covariate cell (unit {u:?}, time {t:?})")));
        }
        if vals.len() != d {
            return Err(Error::Parse { location: format!("line {line}"), message: format!("expected {d} covariates") });
        }
        for (j, raw) in vals.iter().enumerate() {
            out[[i, tt, j]] = parse_value(raw, || format!("line {line}, column {}", j + 3))?;
        }
    }
    if let Some(cell) = seen.iter().position(|s| !s) {
        return Err(Error::IncompleteGrid {
            unit: panel.unit_labels()[cell / t_len].clone(),
            time: panel.time_labels()[cell % t_len].clone(),
        });
    }
    Ok(out)
}

/// Writes covariates in long form.
pub fn write_covariates<T: Real, W: Write>(panel: &PanelData<T>, cov: &Array3<T>, sink: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(sink);
    let d = cov.dim().2;
    let mut header = vec!["unit".to_string(), "time".to_string()];
    header.extend((1..=d).map(|j| format!("x{j}")));
    w.write_record(&header).map_err(csv_io)?;
    for (i, u) in panel.unit_labels().iter().enumerate() {
        for (t, tl) in panel.time_labels().iter().enumerate() {
            let mut rec = vec![u.clone(), tl.clone()];
            rec.extend((0..d).map(|j| cov[[i, t, j]].to_string()));
            w.write_record(&rec).map_err(csv_io)?;
        }
    }
    w.flush()?;
    Ok(())
}

#[derive(Serialize)]
struct Document<'a, R> {
    schema_version: u32,
    kind: &'a str,
    result: &'a R,
}

#[derive(Deserialize)]
struct OwnedDocument<R> {
    schema_version: u32,
    kind: String,
    result: R,
}

/// Writes `{"schema_version": 1, "kind": kind, "result": ...}` as one JSON document.
pub fn save_result<R: Serialize, W: Write>(result: &R, kind: &str, mut sink: W) -> Result<()> {
    let doc = Document { schema_version: SCHEMA_VERSION, kind, result };
    serde_json::to_writer_pretty(&mut sink, &doc).map_err(json_io)?;
    sink.write_all(b"\n")?;
    sink.flush()?;
    Ok(())
}

/// Reads a document written by [`save_result`], checking version and kind.
pub fn load_result<R: for<'de> Deserialize<'de>, S: Read>(source: S, kind: &str) -> Result<R> {
    let doc: OwnedDocument<R> = serde_json::from_reader(source)?;
    if doc.schema_version != SCHEMA_VERSION || doc.kind != kind {
        return Err(Error::Parse {
            location: "schema_version".into(),
            message: format!("expected {kind} v{SCHEMA_VERSION}, found {} v{}", doc.kind, doc.schema_version),
        });
    }
    Ok(doc.result)
}

fn json_io(e: serde_json::Error) -> Error {
    if e.is_io() {
        Error::Io(std::io::Error::from(e))
    } else {
        Error::Json(e)
    }
}

/// Serde adapter: `Array2` as a row-major list of rows.
pub mod matrix {
    use ndarray::Array2;
    use serde::de::Error as _;
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    pub fn serialize<S: Serializer, T: Serialize + Clone>(m: &Array2<T>, s: S) -> Result<S::Ok, S::Error> {
        s.collect_seq(m.rows().into_iter().map(|r| r.to_vec()))
    }

    pub fn deserialize<'de, D: Deserializer<'de>, T: Deserialize<'de>>(d: D) -> Result<Array2<T>, D::Error> {
        let rows: Vec<Vec<T>> = Vec::deserialize(d)?;
        let ncols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != ncols) {
            return Err(D::Error::custom("ragged matrix"));
        }
        let nrows = rows.len();
        Array2::from_shape_vec((nrows, ncols), rows.into_iter().flatten().collect()).map_err(D::Error::custom)
    }
}

/// Serde adapter for `Option<Array2>`.
pub mod option_matrix {
    use ndarray::Array2;
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    pub fn serialize<S: Serializer, T: Serialize + Clone>(m: &Option<Array2<T>>, s: S) -> Result<S::Ok, S::Error> {
        match m {
            Some(m) => s.serialize_some(&Wrap(m)),
            None => s.serialize_none(),
        }
    }

    struct Wrap<'a, T>(&'a Array2<T>);

    impl<T: Serialize + Clone> Serialize for Wrap<'_, T> {
        fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
            super::matrix::serialize(self.0, s)
        }
    }

    #[derive(Deserialize)]
    #[serde(bound = "T: Deserialize<'de>")]
    struct Unwrap<T>(#[serde(with = "super::matrix")] Array2<T>);

    pub fn deserialize<'de, D: Deserializer<'de>, T: Deserialize<'de>>(d: D) -> Result<Option<Array2<T>>, D::Error> {
        Ok(Option::<Unwrap<T>>::deserialize(d)?.map(|u| u.0))
    }
}
