//! Load series ingestion, windowing, splits and normalization.

mod adf;
mod scenario;

use std::collections::BTreeMap;
use std::path::Path;

use chrono::{DateTime, Datelike, NaiveDateTime, Timelike, Utc};
use serde::{Deserialize, Serialize};

use crate::array::Array2;
use crate::error::{Error, Result};
use crate::model::Batch;
use crate::tensor::{Scalar, Tensor};

pub use adf::{adf_critical_value_1pct, adf_lag_order, adf_test, AdfResult};
pub use scenario::{generate_scenario, Generator, NewEntity, ScenarioSpec, Segment};

/// Number of temporal mark features per step.
pub const MARK_DIM: usize = 2;

/// A uniformly sampled multivariate load series.
#[derive(Clone, Debug, PartialEq)]
pub struct LoadSeries {
    pub series_id: String,
    /// Epoch seconds, strictly increasing by `interval`.
    pub timestamps: Vec<i64>,
    pub interval: i64,
    /// `n × d` values.
    pub values: Array2,
    pub static_context: Vec<f64>,
    /// Rows whose values were forward-filled during ingestion.
    pub filled_rows: Vec<usize>,
}

impl LoadSeries {
    pub fn new(
        series_id: impl Into<String>,
        start: i64,
        interval: i64,
        values: Array2,
        static_context: Vec<f64>,
    ) -> Result<Self> {
        if interval <= 0 {
            return Err(Error::input("sampling interval must be positive"));
        }
        let timestamps = (0..values.rows() as i64).map(|i| start + i * interval).collect();
        Ok(LoadSeries {
            series_id: series_id.into(),
            timestamps,
            interval,
            values,
            static_context,
            filled_rows: Vec::new(),
        })
    }

    pub fn len(&self) -> usize {
        self.values.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.values.rows() == 0
    }

    pub fn features(&self) -> usize {
        self.values.cols()
    }

    /// Rows `start..end` as a new series.
    pub fn segment(&self, start: usize, end: usize) -> LoadSeries {
        LoadSeries {
            series_id: self.series_id.clone(),
            timestamps: self.timestamps[start..end].to_vec(),
            interval: self.interval,
            values: self.values.slice_rows(start, end),
            static_context: self.static_context.clone(),
            filled_rows: self
                .filled_rows
                .iter()
                .filter(|&&r| r >= start && r < end)
                .map(|r| r - start)
                .collect(),
        }
    }
}

/// How empty value cells are treated.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MissingPolicy {
    #[default]
    Reject,
    ForwardFill,
}

/// Column layout of an input CSV.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CsvSchema {
    #[serde(default = "default_timestamp")]
    pub timestamp_column: String,
    /// Value columns; all remaining non-static columns when empty.
    #[serde(default)]
    pub value_columns: Vec<String>,
    /// Column grouping rows into separate series, if present in the file.
    #[serde(default = "default_series")]
    pub series_column: String,
    #[serde(default)]
    pub missing: MissingPolicy,
}

fn default_timestamp() -> String {
    "timestamp".into()
}

fn default_series() -> String {
    "series_id".into()
}

impl Default for CsvSchema {
    fn default() -> Self {
        CsvSchema {
            timestamp_column: default_timestamp(),
            value_columns: Vec::new(),
            series_column: default_series(),
            missing: MissingPolicy::Reject,
        }
    }
}

pub const STATIC_PREFIX: &str = "static_";

/// Parses RFC 3339, `YYYY-MM-DD HH:MM:SS` (UTC) or integer epoch seconds.
pub fn parse_timestamp(cell: &str) -> Option<i64> {
    let cell = cell.trim();
    if let Ok(v) = cell.parse::<i64>() {
        return Some(v);
    }
    if let Ok(t) = DateTime::parse_from_rfc3339(cell) {
        return Some(t.timestamp());
    }
    NaiveDateTime::parse_from_str(cell, "%Y-%m-%d %H:%M:%S")
        .ok()
        .map(|t| t.and_utc().timestamp())
}

pub fn format_timestamp(t: i64) -> String {
    DateTime::<Utc>::from_timestamp(t, 0)
        .map(|d| d.to_rfc3339_opts(chrono::SecondsFormat::Secs, true))
        .unwrap_or_else(|| t.to_string())
}

struct RawSeries {
    timestamps: Vec<(usize, i64)>,
    values: Vec<Vec<Option<f64>>>,
    statics: Vec<Vec<String>>,
}

pub fn load_csv(path: impl AsRef<Path>, schema: &CsvSchema) -> Result<Vec<LoadSeries>> {
    let file = std::fs::File::open(path.as_ref())?;
    read_csv(file, schema)
}

/// Reads one or more series from CSV text, grouped by the series column.
pub fn read_csv(reader: impl std::io::Read, schema: &CsvSchema) -> Result<Vec<LoadSeries>> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let headers: Vec<String> = rdr.headers()?.iter().map(str::to_string).collect();
    let find = |name: &str| headers.iter().position(|h| h == name);
    let ts_col = find(&schema.timestamp_column)
        .ok_or_else(|| Error::input(format!("missing timestamp column {:?}", schema.timestamp_column)))?;
    let id_col = find(&schema.series_column);
    let static_cols: Vec<usize> = (0..headers.len())
        .filter(|&i| headers[i].starts_with(STATIC_PREFIX))
        .collect();
    let value_cols: Vec<usize> = if schema.value_columns.is_empty() {
        (0..headers.len())
            .filter(|&i| i != ts_col && Some(i) != id_col && !static_cols.contains(&i))
            .collect()
    } else {
        schema
            .value_columns
            .iter()
            .map(|c| find(c).ok_or_else(|| Error::input(format!("missing value column {c:?}"))))
            .collect::<Result<_>>()?
    };
    if value_cols.is_empty() {
        return Err(Error::input("no value columns"));
    }

    let mut groups: BTreeMap<String, RawSeries> = BTreeMap::new();
    let mut order = Vec::new();
    for (i, record) in rdr.records().enumerate() {
        let record = record?;
        let line = i + 2;
        let cell = |c: usize| record.get(c).unwrap_or("");
        let id = id_col.map_or_else(|| "series".to_string(), |c| cell(c).to_string());
        let ts = parse_timestamp(cell(ts_col)).ok_or_else(|| {
            Error::input(format!("line {line}: unparseable timestamp {:?}", cell(ts_col)))
        })?;
        let values = value_cols
            .iter()
            .map(|&c| {
                let v = cell(c);
                if v.is_empty() || v.eq_ignore_ascii_case("nan") {
                    Ok(None)
                } else {
                    v.parse::<f64>().map(Some).map_err(|_| {
                        Error::input(format!("line {line}: unparseable value {v:?} in column {:?}", headers[c]))
                    })
                }
            })
            .collect::<Result<Vec<_>>>()?;
        let raw = groups.entry(id.clone()).or_insert_with(|| {
            order.push(id.clone());
            RawSeries {
                timestamps: Vec::new(),
                values: Vec::new(),
                statics: Vec::new(),
            }
        });
        raw.timestamps.push((line, ts));
        raw.values.push(values);
        raw.statics.push(static_cols.iter().map(|&c| cell(c).to_string()).collect());
    }
    if groups.is_empty() {
        return Err(Error::input("CSV has no data rows"));
    }
    order
        .into_iter()
        .map(|id| {
            let raw = groups.remove(&id).expect("grouped above");
            assemble(id, raw, &static_cols, &headers, schema.missing)
        })
        .collect()
}

fn assemble(
    id: String,
    raw: RawSeries,
    static_cols: &[usize],
    headers: &[String],
    missing: MissingPolicy,
) -> Result<LoadSeries> {
    let n = raw.timestamps.len();
    if n < 2 {
        return Err(Error::input(format!("series {id:?} has fewer than 2 rows")));
    }
    let interval = raw.timestamps[1].1 - raw.timestamps[0].1;
    let bad: Vec<usize> = raw
        .timestamps
        .windows(2)
        .filter(|w| w[1].1 - w[0].1 != interval || interval <= 0)
        .map(|w| w[1].0)
        .collect();
    if !bad.is_empty() {
        return Err(Error::input(format!(
            "series {id:?}: timestamps are not strictly increasing at a fixed interval; offending lines {bad:?}"
        )));
    }
    let d = raw.values[0].len();
    let mut data = Vec::with_capacity(n * d);
    let mut filled = Vec::new();
    for (r, row) in raw.values.iter().enumerate() {
        let mut any = false;
        for (c, v) in row.iter().enumerate() {
            let v = match (v, missing) {
                (Some(v), _) => *v,
                (None, MissingPolicy::ForwardFill) if r > 0 => {
                    any = true;
                    data[(r - 1) * d + c]
                }
                (None, _) => {
                    return Err(Error::input(format!(
                        "series {id:?}: missing value on line {}",
                        raw.timestamps[r].0
                    )))
                }
            };
            data.push(v);
        }
        if any {
            filled.push(r);
        }
    }
    let mut static_context = Vec::with_capacity(static_cols.len());
    for (j, &c) in static_cols.iter().enumerate() {
        let first = &raw.statics[0][j];
        if raw.statics.iter().any(|row| &row[j] != first) {
            return Err(Error::input(format!(
                "series {id:?}: static column {:?} is not constant",
                headers[c]
            )));
        }
        static_context.push(first.parse::<f64>().map_err(|_| {
            Error::input(format!("series {id:?}: static column {:?} holds {first:?}", headers[c]))
        })?);
    }
    Ok(LoadSeries {
        series_id: id,
        timestamps: raw.timestamps.into_iter().map(|(_, t)| t).collect(),
        interval,
        values: Array2::new(n, d, data)?,
        static_context,
        filled_rows: filled,
    })
}

/// Writes series in the layout [`read_csv`] accepts.
pub fn write_csv(series: &[LoadSeries], out: impl std::io::Write) -> Result<()> {
    let first = series.first().ok_or_else(|| Error::input("no series to write"))?;
    let mut w = csv::Writer::from_writer(out);
    let mut header = vec!["series_id".to_string(), "timestamp".to_string()];
    header.extend((0..first.features()).map(|j| format!("value_{j}")));
    header.extend((0..first.static_context.len()).map(|j| format!("{STATIC_PREFIX}{j}")));
    w.write_record(&header)?;
    for s in series {
        if s.features() != first.features() || s.static_context.len() != first.static_context.len() {
            return Err(Error::input("series disagree on value or static widths"));
        }
        for (r, &t) in s.timestamps.iter().enumerate() {
            let mut row = vec![s.series_id.clone(), format_timestamp(t)];
            row.extend(s.values.row(r).iter().map(f64::to_string));
            row.extend(s.static_context.iter().map(f64::to_string));
            w.write_record(&row)?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Hour-of-day and day-of-week, each scaled into `[-0.5, 0.5]`.
pub fn time_marks(t: i64) -> [f64; MARK_DIM] {
    let dt = DateTime::<Utc>::from_timestamp(t, 0).unwrap_or_default();
    [
        dt.hour() as f64 / 23.0 - 0.5,
        dt.weekday().num_days_from_monday() as f64 / 6.0 - 0.5,
    ]
}

fn marks_for(times: impl Iterator<Item = i64>) -> Array2 {
    let rows: Vec<Vec<f64>> = times.map(|t| time_marks(t).to_vec()).collect();
    Array2::from_rows(&rows).expect("fixed width")
}

/// One training or inference instance.
#[derive(Clone, Debug, PartialEq)]
pub struct WindowSample {
    pub x: Array2,
    pub y: Array2,
    pub marks_x: Array2,
    pub marks_y: Array2,
    pub statics: Vec<f64>,
    /// Epoch seconds of the first horizon step.
    pub y_start: i64,
    pub series_id: String,
}

/// Window geometry.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct WindowSpec {
    pub lookback: usize,
    pub horizon: usize,
    pub start_token: usize,
    pub stride: usize,
}

/// Sliding windows: `floor((n - L - L_y) / stride) + 1` of them.
pub fn make_windows(series: &LoadSeries, spec: WindowSpec) -> Result<Vec<WindowSample>> {
    let WindowSpec {
        lookback: l,
        horizon: ly,
        start_token,
        stride,
    } = spec;
    let n = series.len();
    if stride == 0 || l == 0 || ly == 0 || start_token > l {
        return Err(Error::config("window lengths and stride must be positive, start token ≤ L"));
    }
    if n < l + ly {
        return Err(Error::input(format!(
            "series {:?} has {n} steps, windows need L + L_y = {}",
            series.series_id,
            l + ly
        )));
    }
    let count = (n - l - ly) / stride + 1;
    let ts = &series.timestamps;
    Ok((0..count)
        .map(|w| {
            let s = w * stride;
            WindowSample {
                x: series.values.slice_rows(s, s + l),
                y: series.values.slice_rows(s + l, s + l + ly),
                marks_x: marks_for(ts[s..s + l].iter().copied()),
                marks_y: marks_for(ts[s + l - start_token..s + l + ly].iter().copied()),
                statics: series.static_context.clone(),
                y_start: ts[s + l],
                series_id: series.series_id.clone(),
            }
        })
        .collect())
}

/// Input for forecasting past the end of a series: the last `L` steps with
/// marks extended over the horizon.
pub fn forecast_input(series: &LoadSeries, spec: WindowSpec) -> Result<WindowSample> {
    let n = series.len();
    let l = spec.lookback;
    if n < l {
        return Err(Error::input(format!(
            "series {:?} has {n} steps, forecasting needs L = {l}",
            series.series_id
        )));
    }
    let ts = &series.timestamps;
    let last = ts[n - 1];
    let future = (1..=spec.horizon as i64).map(|i| last + i * series.interval);
    Ok(WindowSample {
        x: series.values.slice_rows(n - l, n),
        y: Array2::zeros(spec.horizon, series.features()),
        marks_x: marks_for(ts[n - l..].iter().copied()),
        marks_y: marks_for(ts[n - spec.start_token..].iter().copied().chain(future)),
        statics: series.static_context.clone(),
        y_start: last + series.interval,
        series_id: series.series_id.clone(),
    })
}

/// Train/validation/test fractions.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitRatios {
    pub train: f64,
    pub val: f64,
    pub test: f64,
}

impl Default for SplitRatios {
    fn default() -> Self {
        SplitRatios {
            train: 0.7,
            val: 0.1,
            test: 0.2,
        }
    }
}

/// Contiguous split of one series.
#[derive(Clone, Debug)]
pub struct Split {
    pub train: LoadSeries,
    pub val: LoadSeries,
    pub test: LoadSeries,
}

/// Splits by time. Validation and test segments begin `lookback` steps
/// before their first target so every target step belongs to exactly one
/// split.
pub fn split_series(series: &LoadSeries, ratios: SplitRatios, lookback: usize) -> Result<Split> {
    let total = ratios.train + ratios.val + ratios.test;
    if [ratios.train, ratios.val, ratios.test].iter().any(|r| *r <= 0.0) || (total - 1.0).abs() > 1e-9 {
        return Err(Error::config("split ratios must be positive and sum to 1"));
    }
    let n = series.len();
    let train_end = (n as f64 * ratios.train).round() as usize;
    let val_end = (n as f64 * (ratios.train + ratios.val)).round() as usize;
    if train_end < lookback || val_end <= train_end || n <= val_end {
        return Err(Error::input(format!(
            "series {:?} of {n} steps is too short to split",
            series.series_id
        )));
    }
    Ok(Split {
        train: series.segment(0, train_end),
        val: series.segment(train_end - lookback, val_end),
        test: series.segment(val_end - lookback, n),
    })
}

/// Per-feature z-normalization.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Normalizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Normalizer {
    /// Statistics of `values`; features with zero spread keep unit scale.
    pub fn fit(values: &Array2) -> Self {
        let n = values.rows().max(1) as f64;
        let (mean, std) = (0..values.cols())
            .map(|c| {
                let col = values.col(c);
                let m = col.iter().sum::<f64>() / n;
                let var = col.iter().map(|v| (v - m).powi(2)).sum::<f64>() / n;
                let sd = var.sqrt();
                (m, if sd < 1e-8 { 1.0 } else { sd })
            })
            .unzip();
        Normalizer { mean, std }
    }

    pub fn identity(features: usize) -> Self {
        Normalizer {
            mean: vec![0.0; features],
            std: vec![1.0; features],
        }
    }

    pub fn apply(&self, values: &Array2) -> Array2 {
        self.map(values, |v, m, s| (v - m) / s)
    }

    pub fn invert(&self, values: &Array2) -> Array2 {
        self.map(values, |v, m, s| v * s + m)
    }

    fn map(&self, values: &Array2, f: impl Fn(f64, f64, f64) -> f64) -> Array2 {
        let mut out = values.clone();
        let d = values.cols();
        for (i, v) in out.data_mut().iter_mut().enumerate() {
            let c = i % d;
            *v = f(*v, self.mean[c], self.std[c]);
        }
        out
    }

    pub fn apply_series(&self, series: &LoadSeries) -> LoadSeries {
        LoadSeries {
            values: self.apply(&series.values),
            ..series.clone()
        }
    }
}

/// Windows of every series, split by time and z-normalized with each
/// series' training-split statistics.
#[derive(Clone, Debug, Default)]
pub struct PreparedData {
    pub train: Vec<WindowSample>,
    pub val: Vec<WindowSample>,
    pub test: Vec<WindowSample>,
    pub normalizers: BTreeMap<String, Normalizer>,
}

pub fn prepare_dataset(series: &[LoadSeries], spec: WindowSpec, ratios: SplitRatios) -> Result<PreparedData> {
    if series.is_empty() {
        return Err(Error::input("no series to prepare"));
    }
    let mut out = PreparedData::default();
    for s in series {
        if out.normalizers.contains_key(&s.series_id) {
            return Err(Error::input(format!("duplicate series id {:?}", s.series_id)));
        }
        let split = split_series(s, ratios, spec.lookback)?;
        let norm = Normalizer::fit(&split.train.values);
        out.train.extend(make_windows(&norm.apply_series(&split.train), spec)?);
        out.val.extend(make_windows(&norm.apply_series(&split.val), spec)?);
        out.test.extend(make_windows(&norm.apply_series(&split.test), spec)?);
        out.normalizers.insert(s.series_id.clone(), norm);
    }
    Ok(out)
}

/// Stacks samples into model tensors.
pub fn to_batch<T: Scalar>(samples: &[&WindowSample]) -> Result<Batch<T>> {
    let first = samples.first().ok_or_else(|| Error::input("empty batch"))?;
    let b = samples.len();
    let stack = |get: &dyn Fn(&WindowSample) -> &Array2| -> Result<Tensor<T>> {
        let (r, c) = get(first).shape();
        let mut data = Vec::with_capacity(b * r * c);
        for s in samples {
            let a = get(s);
            if a.shape() != (r, c) {
                return Err(Error::input("samples in a batch differ in shape"));
            }
            data.extend(a.data().iter().map(|&v| T::of(v)));
        }
        Tensor::new(vec![b, r, c], data)
    };
    let c = first.statics.len();
    let statics = if c == 0 {
        None
    } else {
        let mut data = Vec::with_capacity(b * c);
        for s in samples {
            if s.statics.len() != c {
                return Err(Error::input("samples in a batch differ in static width"));
            }
            data.extend(s.statics.iter().map(|&v| T::of(v)));
        }
        Some(Tensor::new(vec![b, c], data)?)
    };
    Ok(Batch {
        x: stack(&|s| &s.x)?,
        marks_x: stack(&|s| &s.marks_x)?,
        marks_y: stack(&|s| &s.marks_y)?,
        statics,
        y: Some(stack(&|s| &s.y)?),
    })
}
