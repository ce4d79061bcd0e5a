//! Per-instance results in two renderings: JSON records and a text table.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::tsp::gap;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRow {
    pub name: String,
    pub n: usize,
    pub method: String,
    pub length: f64,
    /// Percentage above the reference; `None` when no reference is known.
    pub gap_pct: Option<f64>,
    pub seconds: f64,
    pub seed: u64,
}

impl RunRow {
    /// Fills `gap_pct` from an optional reference length.
    pub fn with_reference(mut self, reference: Option<f64>) -> Result<Self> {
        self.gap_pct = reference.map(|r| gap(self.length, r)).transpose()?;
        Ok(self)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MethodSummary {
    pub method: String,
    pub instances: usize,
    pub mean_length: f64,
    pub mean_gap_pct: Option<f64>,
    pub total_seconds: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub rows: Vec<RunRow>,
}

impl RunReport {
    pub fn push(&mut self, row: RunRow) {
        self.rows.push(row);
    }

    /// Means per method, in first-appearance order. The gap mean is only
    /// reported when every row of that method has a gap.
    pub fn summaries(&self) -> Vec<MethodSummary> {
        let mut order = Vec::new();
        let mut groups: BTreeMap<&str, Vec<&RunRow>> = BTreeMap::new();
        for r in &self.rows {
            let g = groups.entry(r.method.as_str()).or_default();
            if g.is_empty() {
                order.push(r.method.as_str());
            }
            g.push(r);
        }
        order
            .into_iter()
            .map(|m| {
                let rows = &groups[m];
                let k = rows.len() as f64;
                let gaps: Option<Vec<f64>> = rows.iter().map(|r| r.gap_pct).collect();
                MethodSummary {
                    method: m.to_string(),
                    instances: rows.len(),
                    mean_length: rows.iter().map(|r| r.length).sum::<f64>() / k,
                    mean_gap_pct: gaps.map(|g| g.iter().sum::<f64>() / k),
                    total_seconds: rows.iter().map(|r| r.seconds).sum(),
                }
            })
            .collect()
    }

    pub fn to_json(&self) -> String {
        #[derive(Serialize)]
        struct Doc<'a> {
            rows: &'a [RunRow],
            summary: Vec<MethodSummary>,
        }
        serde_json::to_string_pretty(&Doc { rows: &self.rows, summary: self.summaries() }).expect("plain data")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        #[derive(Deserialize)]
        struct Doc {
            rows: Vec<RunRow>,
        }
        let doc: Doc = serde_json::from_str(text)
            .map_err(|e| crate::error::GeldError::Argument(format!("report: {e}")))?;
        Ok(Self { rows: doc.rows })
    }

    pub fn to_table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "{:<28} {:>7} {:<10} {:>14} {:>9} {:>9}", "name", "n", "method", "length", "gap%", "time(s)");
        for r in &self.rows {
            let g = r.gap_pct.map(|g| format!("{g:.3}")).unwrap_or_default();
            let _ = writeln!(
                s,
                "{:<28} {:>7} {:<10} {:>14.4} {:>9} {:>9.3}",
                r.name, r.n, r.method, r.length, g, r.seconds
            );
        }
        for m in self.summaries() {
            let g = m.mean_gap_pct.map(|g| format!("{g:.3}")).unwrap_or_default();
            let _ = writeln!(
                s,
                "{:<28} {:>7} {:<10} {:>14.4} {:>9} {:>9.3}",
                "mean", m.instances, m.method, m.mean_length, g, m.total_seconds
            );
        }
        s
    }
}
