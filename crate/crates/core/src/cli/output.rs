//! File emitters. Every writer produces bytes that depend only on its
//! inputs, so reruns with the same config and seed reproduce files exactly.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::Serialize;

use crate::error::Result;
use crate::metrics::{MetricReport, SweepSummary};

pub fn samples_csv(samples: &[Vec<f64>], dim: usize) -> String {
    let mut out = String::from("chain_index");
    for k in 0..dim {
        let _ = write!(out, ",dim_{k}");
    }
    out.push('\n');
    for (i, x) in samples.iter().enumerate() {
        let _ = write!(out, "{i}");
        for v in x {
            let _ = write!(out, ",{v}");
        }
        out.push('\n');
    }
    out
}

pub fn trace_csv(trace: &[(usize, f64)]) -> String {
    let mut out = String::from("step,t,mean_distance\n");
    for (k, (t, d)) in trace.iter().enumerate() {
        let _ = writeln!(out, "{k},{t},{d}");
    }
    out
}

pub fn sweep_csv(summary: &SweepSummary) -> String {
    let mut out = String::from("lambda,coupling_median,nll_a,nll_b,residual_b\n");
    for p in &summary.points {
        let residual = p.residual_b.map(|r| r.to_string()).unwrap_or_default();
        let _ = writeln!(out, "{},{},{},{},{}", p.lambda, p.coupling_median, p.nll_a, p.nll_b, residual);
    }
    out
}

pub fn write_text(dir: &Path, name: &str, text: &str) -> Result<()> {
    fs::write(dir.join(name), text)?;
    Ok(())
}

pub fn write_json<T: Serialize + ?Sized>(dir: &Path, name: &str, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    write_text(dir, name, &text)
}

pub fn write_metrics(dir: &Path, reports: &[MetricReport]) -> Result<()> {
    write_json(dir, "metrics.json", reports)
}

/// Fixed-width table of reports for the terminal.
pub fn metrics_table(reports: &[MetricReport]) -> String {
    let width = reports.iter().map(|r| r.name.len()).max().unwrap_or(4).max(6);
    let mut out = format!("{:<width$}  {:>14}  {:>14}  status\n", "metric", "value", "threshold");
    for r in reports {
        let threshold = r.threshold.map(|t| format!("{t:.6e}")).unwrap_or_else(|| "-".into());
        let status = match r.pass {
            Some(true) => "pass",
            Some(false) => "FAIL",
            None => "info",
        };
        let _ = writeln!(out, "{:<width$}  {:>14.6e}  {:>14}  {status}", r.name, r.value, threshold);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn csv_layout() {
        let csv = samples_csv(&[vec![0.5, -1.0], vec![2.0, 3.25]], 2);
        assert_eq!(csv, "chain_index,dim_0,dim_1\n0,0.5,-1\n1,2,3.25\n");
        assert_eq!(trace_csv(&[(3, 1.5), (1, 0.25)]), "step,t,mean_distance\n0,3,1.5\n1,1,0.25\n");
    }

    #[test]
    fn csv_values_round_trip() {
        let v = 0.1 + 0.2;
        let csv = samples_csv(&[vec![v]], 1);
        let field = csv.lines().nth(1).unwrap().split(',').nth(1).unwrap();
        assert_eq!(field.parse::<f64>().unwrap(), v);
    }
}
