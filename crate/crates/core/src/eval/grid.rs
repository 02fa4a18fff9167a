//! Method × metric comparison grid with per-seed values.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

/// Scores of one feature-extraction method; each vector holds one value per
/// seed.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct GridRow {
    pub method: String,
    pub ood_f1: Vec<f64>,
    pub indomain_f1: Vec<f64>,
    pub probe_z1: Vec<f64>,
    pub probe_z2: Vec<f64>,
    pub probe_z12: Vec<f64>,
}

pub const GRID_COLUMNS: [&str; 5] = ["ood_f1", "indomain_f1", "probe_z1", "probe_z2", "probe_z12"];

impl GridRow {
    pub fn columns(&self) -> [&[f64]; 5] {
        [&self.ood_f1, &self.indomain_f1, &self.probe_z1, &self.probe_z2, &self.probe_z12]
    }
}

fn mean(v: &[f64]) -> f64 {
    if v.is_empty() {
        f64::NAN
    } else {
        v.iter().sum::<f64>() / v.len() as f64
    }
}

fn std(v: &[f64]) -> f64 {
    let m = mean(v);
    (v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (v.len() as f64 - 1.0)).sqrt()
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ResultGrid {
    pub seeds: Vec<u64>,
    pub rows: Vec<GridRow>,
}

impl ResultGrid {
    pub fn row(&self, method: &str) -> Option<&GridRow> {
        self.rows.iter().find(|r| r.method == method)
    }

    fn with_spread(&self) -> bool {
        self.seeds.len() > 1
    }

    /// Long-format table: `method metric mean [std] seed...`. The spread
    /// column only appears with more than one seed.
    pub fn to_tsv(&self) -> String {
        let mut out = String::from("method\tmetric\tmean");
        if self.with_spread() {
            out.push_str("\tstd");
        }
        for s in &self.seeds {
            write!(out, "\tseed{s}").unwrap();
        }
        out.push('\n');
        for r in &self.rows {
            for (name, vals) in GRID_COLUMNS.iter().zip(r.columns()) {
                write!(out, "{}\t{name}\t{:.6}", r.method, mean(vals)).unwrap();
                if self.with_spread() {
                    write!(out, "\t{:.6}", std(vals)).unwrap();
                }
                for v in vals {
                    write!(out, "\t{v:.6}").unwrap();
                }
                out.push('\n');
            }
        }
        out
    }

    /// Wide human-readable table of means (± std across seeds).
    pub fn to_markdown(&self) -> String {
        let mut out = String::from("| method | OOD F1 | in-domain F1 | probe z1 | probe z2 | probe z12 |\n");
        out.push_str("|---|---|---|---|---|---|\n");
        for r in &self.rows {
            write!(out, "| {} |", r.method).unwrap();
            for vals in r.columns() {
                if self.with_spread() {
                    write!(out, " {:.3} ± {:.3} |", mean(vals), std(vals)).unwrap();
                } else {
                    write!(out, " {:.3} |", mean(vals)).unwrap();
                }
            }
            out.push('\n');
        }
        out
    }
}
