//! Plot-ready CSV rows.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::Result;

pub const CSV_HEADER: [&str; 10] = [
    "application",
    "regime",
    "level",
    "parameter",
    "value",
    "gap",
    "status",
    "span_id",
    "seed",
    "config_hash",
];

/// One result row. Empty strings mark fields that do not apply.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OutputRow {
    pub application: String,
    pub regime: String,
    pub level: Option<usize>,
    pub parameter: Option<f64>,
    pub value: f64,
    pub gap: Option<f64>,
    pub status: String,
    pub span_id: Option<String>,
    pub seed: Option<u64>,
    pub config_hash: String,
}

impl OutputRow {
    fn fields(&self) -> [String; 10] {
        let opt = |v: Option<f64>| v.map(sig9).unwrap_or_default();
        [
            self.application.clone(),
            self.regime.clone(),
            self.level.map(|l| l.to_string()).unwrap_or_default(),
            opt(self.parameter),
            sig9(self.value),
            opt(self.gap),
            self.status.clone(),
            self.span_id.clone().unwrap_or_default(),
            self.seed.map(|s| s.to_string()).unwrap_or_default(),
            self.config_hash.clone(),
        ]
    }
}

/// Nine significant digits in scientific notation, e.g. `2.82842712e+00`.
pub fn sig9(v: f64) -> String {
    if v.is_nan() {
        return "nan".into();
    }
    if v.is_infinite() {
        return if v > 0.0 { "inf".into() } else { "-inf".into() };
    }
    let v = if v == 0.0 { 0.0 } else { v };
    let s = format!("{v:.8e}");
    let (mant, exp) = s.split_once('e').expect("exponent");
    let exp: i32 = exp.parse().expect("exponent digits");
    let sign = if exp < 0 { '-' } else { '+' };
    format!("{mant}e{sign}{:02}", exp.abs())
}

pub fn write_csv<W: Write>(w: W, rows: &[OutputRow]) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(CSV_HEADER).map_err(csv_err)?;
    for r in rows {
        out.write_record(r.fields()).map_err(csv_err)?;
    }
    out.flush()?;
    Ok(())
}

fn csv_err(e: csv::Error) -> crate::Error {
    crate::Error::Io(std::io::Error::other(e))
}
