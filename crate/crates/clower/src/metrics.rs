//! Per-step metrics as CSV.

use std::io::{self, Write};

use clower_core::losses::LossBreakdown;

pub const HEADER: &str = "step,l_mlm,l_tcl,l_scl,l_sop,l_con,total,n_anchors";

/// One CSV row; floats use the shortest representation that parses back
/// to the same value.
pub fn row(step: usize, b: &LossBreakdown) -> String {
    format!(
        "{step},{:?},{:?},{:?},{:?},{:?},{:?},{}",
        b.l_mlm, b.l_tcl, b.l_scl, b.l_sop, b.l_con, b.total, b.n_anchors
    )
}

pub struct MetricsWriter<W: Write> {
    out: W,
}

impl<W: Write> MetricsWriter<W> {
    pub fn new(mut out: W) -> io::Result<Self> {
        writeln!(out, "{HEADER}")?;
        Ok(MetricsWriter { out })
    }

    pub fn write(&mut self, step: usize, b: &LossBreakdown) -> io::Result<()> {
        writeln!(self.out, "{}", row(step, b))
    }

    pub fn flush(&mut self) -> io::Result<()> {
        self.out.flush()
    }

    pub fn into_inner(self) -> W {
        self.out
    }
}

/// Parses a metrics file back into `(step, total)` pairs and the
/// `l_con` column.
pub fn parse_totals(csv: &str) -> Option<Vec<(usize, f64, f64)>> {
    let mut lines = csv.lines();
    if lines.next()? != HEADER {
        return None;
    }
    lines
        .map(|l| {
            let c: Vec<&str> = l.split(',').collect();
            Some((c.first()?.parse().ok()?, c.get(6)?.parse().ok()?, c.get(5)?.parse().ok()?))
        })
        .collect()
}
