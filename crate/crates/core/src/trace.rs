//! Per-step training records and their CSV/JSON forms.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub step: usize,
    /// Share of groups in the batch whose mode was performance.
    pub mode_fraction: f64,
    pub v_c: f64,
    pub v_f: f64,
    pub v_r_clean: f64,
    pub p0_bar: f64,
    pub mean_reward: f64,
    pub parse_fail_rate: f64,
}

pub const CSV_HEADER: &str = "step,mode_fraction,V_c,V_f,V_r_clean,p0_bar,mean_reward,parse_fail_rate";

impl TraceRow {
    /// Shortest round-trip float formatting, so equal runs give equal bytes.
    pub fn to_csv_line(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{}",
            self.step,
            self.mode_fraction,
            self.v_c,
            self.v_f,
            self.v_r_clean,
            self.p0_bar,
            self.mean_reward,
            self.parse_fail_rate
        )
    }

    pub fn from_csv_line(line: &str) -> Result<Self> {
        let f: Vec<&str> = line.trim().split(',').collect();
        if f.len() != 8 {
            return Err(Error::InvalidInput(format!("trace row needs 8 fields, got {}", f.len())));
        }
        let num = |s: &str| s.parse::<f64>().map_err(|e| Error::InvalidInput(format!("`{s}`: {e}")));
        Ok(TraceRow {
            step: f[0].parse().map_err(|e| Error::InvalidInput(format!("step `{}`: {e}", f[0])))?,
            mode_fraction: num(f[1])?,
            v_c: num(f[2])?,
            v_f: num(f[3])?,
            v_r_clean: num(f[4])?,
            p0_bar: num(f[5])?,
            mean_reward: num(f[6])?,
            parse_fail_rate: num(f[7])?,
        })
    }
}

/// Writes rows as they arrive and flushes after each one.
pub struct CsvTraceWriter<W: Write> {
    out: W,
}

impl<W: Write> CsvTraceWriter<W> {
    pub fn new(mut out: W) -> Result<Self> {
        writeln!(out, "{CSV_HEADER}")?;
        out.flush()?;
        Ok(CsvTraceWriter { out })
    }

    pub fn push(&mut self, row: &TraceRow) -> Result<()> {
        writeln!(self.out, "{}", row.to_csv_line())?;
        self.out.flush()?;
        Ok(())
    }
}

pub fn read_trace_csv(text: &str) -> Result<Vec<TraceRow>> {
    let mut lines = text.lines();
    match lines.next() {
        Some(h) if h.trim() == CSV_HEADER => {}
        _ => return Err(Error::InvalidInput("missing trace header".into())),
    }
    lines.filter(|l| !l.trim().is_empty()).map(TraceRow::from_csv_line).collect()
}
