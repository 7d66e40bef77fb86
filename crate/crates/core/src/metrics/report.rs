//! CSV export of evaluation results.
//!
//! One row per frame followed by an `aggregate` row. Reals are written with
//! six decimals; an undefined Hausdorff distance is written as `NA`. In frame
//! rows `ec` is the 0/1 indicator; in the aggregate row it is the EC.

use std::io::{Read, Write};

use super::{EvalReport, MetricRecord};
use crate::error::{Error, Result};

pub const CSV_COLUMNS: [&str; 12] = [
    "frame_id",
    "dsc_rv",
    "dsc_myo",
    "dsc_lv",
    "dsc_avg",
    "hd_rv",
    "hd_myo",
    "hd_lv",
    "hd_avg",
    "end_dsc_avg",
    "ec",
    "hd_undefined",
];

/// Frame id of the summary row.
pub const AGGREGATE_ID: &str = "aggregate";

/// One CSV row as parsed back.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricRow {
    pub frame_id: String,
    pub dsc: [f64; 3],
    pub dsc_avg: f64,
    pub hd: [Option<f64>; 3],
    pub hd_avg: Option<f64>,
    pub end_dsc_avg: f64,
    pub ec: f64,
    pub hd_undefined: usize,
}

impl MetricRow {
    fn from_record(r: &MetricRecord) -> Self {
        MetricRow {
            frame_id: r.frame_id.clone(),
            dsc: r.dsc,
            dsc_avg: r.average_dsc,
            hd: r.hd,
            hd_avg: r.hd_average(),
            end_dsc_avg: r.end_slice_avg_dsc,
            ec: if r.ec_pass { 1.0 } else { 0.0 },
            hd_undefined: r.hd_undefined(),
        }
    }

    fn fields(&self) -> Vec<String> {
        let real = |v: f64| format!("{v:.6}");
        let opt = |v: Option<f64>| v.map_or_else(|| "NA".to_string(), real);
        let mut out = vec![self.frame_id.clone()];
        out.extend(self.dsc.iter().map(|&v| real(v)));
        out.push(real(self.dsc_avg));
        out.extend(self.hd.iter().map(|&v| opt(v)));
        out.push(opt(self.hd_avg));
        out.push(real(self.end_dsc_avg));
        out.push(real(self.ec));
        out.push(self.hd_undefined.to_string());
        out
    }
}

/// Rows of a report in output order, aggregate last.
pub fn report_rows(report: &EvalReport) -> Vec<MetricRow> {
    let a = &report.aggregate;
    let mut rows: Vec<MetricRow> = report.records.iter().map(MetricRow::from_record).collect();
    rows.push(MetricRow {
        frame_id: AGGREGATE_ID.into(),
        dsc: a.dsc,
        dsc_avg: a.average_dsc,
        hd: a.hd,
        hd_avg: a.hd_average,
        end_dsc_avg: a.end_slice_avg_dsc,
        ec: a.ec,
        hd_undefined: a.hd_undefined,
    });
    rows
}

pub fn write_metrics_csv<W: Write>(out: W, report: &EvalReport) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let err = |e: csv::Error| Error::Data(format!("writing metrics csv: {e}"));
    w.write_record(CSV_COLUMNS).map_err(err)?;
    for row in report_rows(report) {
        w.write_record(row.fields()).map_err(err)?;
    }
    w.flush().map_err(|e| Error::io("flushing metrics csv", e))
}

pub fn read_metrics_csv<R: Read>(input: R) -> Result<Vec<MetricRow>> {
    let mut r = csv::Reader::from_reader(input);
    let bad = |msg: String| Error::Data(format!("metrics csv: {msg}"));
    let headers = r.headers().map_err(|e| bad(e.to_string()))?.clone();
    if headers.iter().ne(CSV_COLUMNS) {
        return Err(bad(format!("unexpected header {headers:?}")));
    }
    let real = |s: &str| s.parse::<f64>().map_err(|e| bad(format!("{s:?}: {e}")));
    let opt = |s: &str| if s == "NA" { Ok(None) } else { real(s).map(Some) };
    let mut rows = Vec::new();
    for rec in r.records() {
        let rec = rec.map_err(|e| bad(e.to_string()))?;
        let f = |i: usize| rec.get(i).ok_or_else(|| bad(format!("short row {rec:?}")));
        rows.push(MetricRow {
            frame_id: f(0)?.to_string(),
            dsc: [real(f(1)?)?, real(f(2)?)?, real(f(3)?)?],
            dsc_avg: real(f(4)?)?,
            hd: [opt(f(5)?)?, opt(f(6)?)?, opt(f(7)?)?],
            hd_avg: opt(f(8)?)?,
            end_dsc_avg: real(f(9)?)?,
            ec: real(f(10)?)?,
            hd_undefined: f(11)?.parse().map_err(|e| bad(format!("hd_undefined: {e}")))?,
        });
    }
    Ok(rows)
}
