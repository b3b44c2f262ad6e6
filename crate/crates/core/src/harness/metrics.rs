//! Per-step training metrics, one JSON object per line.

use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub step: usize,
    pub nf_loss: f64,
    /// Absent when no alignment sites are configured.
    pub align_loss: Option<f64>,
    pub total: f64,
    /// Seconds since the start of the run.
    pub wallclock: f64,
}

impl MetricRecord {
    pub fn to_line(&self) -> String {
        serde_json::to_string(self).expect("metric records serialize")
    }

    /// The record without its timing field, for determinism comparisons.
    pub fn deterministic(&self) -> (usize, u64, Option<u64>, u64) {
        (
            self.step,
            self.nf_loss.to_bits(),
            self.align_loss.map(f64::to_bits),
            self.total.to_bits(),
        )
    }
}

pub fn write_record(out: &mut dyn Write, rec: &MetricRecord) -> Result<()> {
    writeln!(out, "{}", rec.to_line())?;
    Ok(())
}

pub fn read_records(input: impl BufRead) -> Result<Vec<MetricRecord>> {
    let mut out = Vec::new();
    for line in input.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(
            serde_json::from_str(&line)
                .map_err(|e| Error::Invalid(format!("bad metrics line: {e}")))?,
        );
    }
    Ok(out)
}
