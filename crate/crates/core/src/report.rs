//! Result tables and pairwise win matrices.
//!
//! Result files are CSV with the columns
//! `dataset,backbone,method,mean,sd,seeds,metric`; one row per
//! (dataset, backbone, method) configuration.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ReportError {
    #[error("result csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("invalid result cell {method} on {dataset}/{backbone}: {msg}")]
    Cell {
        dataset: String,
        backbone: String,
        method: String,
        msg: String,
    },
    #[error("no result for method {method} on {dataset}/{backbone}")]
    Coverage {
        dataset: String,
        backbone: String,
        method: String,
    },
    #[error("unknown win rule {0:?}; valid: opponent-sd, own-sd")]
    UnknownRule(String),
    #[error("unknown table format {0:?}; valid: csv, markdown")]
    UnknownFormat(String),
}

pub type Result<T> = std::result::Result<T, ReportError>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultCell {
    pub dataset: String,
    pub backbone: String,
    pub method: String,
    pub mean: f64,
    pub sd: f64,
    pub seeds: usize,
    pub metric: String,
}

impl ResultCell {
    fn config(&self) -> (String, String) {
        (self.dataset.clone(), self.backbone.clone())
    }

    fn validate(&self) -> Result<()> {
        if !(self.sd >= 0.0) || !self.mean.is_finite() {
            return Err(ReportError::Cell {
                dataset: self.dataset.clone(),
                backbone: self.backbone.clone(),
                method: self.method.clone(),
                msg: format!("mean {} sd {}", self.mean, self.sd),
            });
        }
        Ok(())
    }
}

pub fn read_cells(text: &str) -> Result<Vec<ResultCell>> {
    let mut rdr = csv::Reader::from_reader(text.as_bytes());
    let cells = rdr.deserialize().collect::<std::result::Result<Vec<ResultCell>, _>>()?;
    for c in &cells {
        c.validate()?;
    }
    Ok(cells)
}

pub fn write_cells(cells: &[ResultCell]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for c in cells {
        w.serialize(c)?;
    }
    let bytes = w.into_inner().map_err(|e| csv::Error::from(e.into_error()))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

/// How "one sd above the opponent" is read.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum WinRule {
    /// `mean_a > mean_b + sd_b`
    #[default]
    OpponentSd,
    /// `mean_a - sd_a > mean_b`
    OwnSd,
}

impl std::str::FromStr for WinRule {
    type Err = ReportError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "opponent-sd" => Ok(Self::OpponentSd),
            "own-sd" => Ok(Self::OwnSd),
            other => Err(ReportError::UnknownRule(other.to_string())),
        }
    }
}

pub fn beats(a: &ResultCell, b: &ResultCell, rule: WinRule) -> bool {
    match rule {
        WinRule::OpponentSd => a.mean > b.mean + b.sd,
        WinRule::OwnSd => a.mean - a.sd > b.mean,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct WinMatrix {
    /// Methods in order of first appearance.
    pub methods: Vec<String>,
    /// `wins[i][j]`: configurations where method `i` beats method `j`.
    pub wins: Vec<Vec<usize>>,
    pub configurations: usize,
}

fn methods_in_order(cells: &[ResultCell]) -> Vec<String> {
    let mut methods: Vec<String> = Vec::new();
    for c in cells {
        if !methods.contains(&c.method) {
            methods.push(c.method.clone());
        }
    }
    methods
}

/// `(dataset, backbone) -> method -> cell`, checking every method covers
/// every configuration.
fn grid(cells: &[ResultCell]) -> Result<BTreeMap<(String, String), BTreeMap<String, &ResultCell>>> {
    let methods = methods_in_order(cells);
    let mut grid: BTreeMap<(String, String), BTreeMap<String, &ResultCell>> = BTreeMap::new();
    for c in cells {
        c.validate()?;
        let slot = grid.entry(c.config()).or_default();
        if slot.insert(c.method.clone(), c).is_some() {
            return Err(ReportError::Cell {
                dataset: c.dataset.clone(),
                backbone: c.backbone.clone(),
                method: c.method.clone(),
                msg: "duplicate result".into(),
            });
        }
    }
    for ((dataset, backbone), row) in &grid {
        if let Some(m) = methods.iter().find(|m| !row.contains_key(*m)) {
            return Err(ReportError::Coverage {
                dataset: dataset.clone(),
                backbone: backbone.clone(),
                method: m.clone(),
            });
        }
    }
    Ok(grid)
}

pub fn win_matrix(cells: &[ResultCell], rule: WinRule) -> Result<WinMatrix> {
    let methods = methods_in_order(cells);
    let grid = grid(cells)?;
    let m = methods.len();
    let mut wins = vec![vec![0usize; m]; m];
    for row in grid.values() {
        for (i, a) in methods.iter().enumerate() {
            for (j, b) in methods.iter().enumerate() {
                if i != j && beats(row[a], row[b], rule) {
                    wins[i][j] += 1;
                }
            }
        }
    }
    Ok(WinMatrix {
        methods,
        wins,
        configurations: grid.len(),
    })
}

impl WinMatrix {
    pub fn to_markdown(&self) -> String {
        let mut out = String::new();
        write!(out, "| wins |").unwrap();
        for m in &self.methods {
            write!(out, " {m} |").unwrap();
        }
        out.push('\n');
        out.push_str(&"|---".repeat(self.methods.len() + 1));
        out.push_str("|\n");
        for (i, m) in self.methods.iter().enumerate() {
            write!(out, "| {m} |").unwrap();
            for (j, w) in self.wins[i].iter().enumerate() {
                if i == j {
                    out.push_str(" - |");
                } else {
                    write!(out, " {w} |").unwrap();
                }
            }
            out.push('\n');
        }
        out
    }
}

/// For each cell, whether it has the highest mean within its
/// (dataset, backbone) configuration. Ties all count as best.
pub fn best_flags(cells: &[ResultCell]) -> Vec<bool> {
    let mut best: BTreeMap<(String, String), f64> = BTreeMap::new();
    for c in cells {
        let e = best.entry(c.config()).or_insert(f64::NEG_INFINITY);
        *e = e.max(c.mean);
    }
    cells.iter().map(|c| c.mean == best[&c.config()]).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TableFormat {
    Csv,
    Markdown,
}

impl std::str::FromStr for TableFormat {
    type Err = ReportError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "csv" => Ok(Self::Csv),
            "markdown" | "md" => Ok(Self::Markdown),
            other => Err(ReportError::UnknownFormat(other.to_string())),
        }
    }
}

/// CSV output is the result schema itself. Markdown puts methods in rows and
/// `dataset / backbone` configurations in columns, with the best mean of each
/// column in bold.
pub fn emit_table(cells: &[ResultCell], format: TableFormat) -> Result<String> {
    match format {
        TableFormat::Csv => write_cells(cells),
        TableFormat::Markdown => {
            let methods = methods_in_order(cells);
            let mut configs: Vec<(String, String)> = Vec::new();
            for c in cells {
                if !configs.contains(&c.config()) {
                    configs.push(c.config());
                }
            }
            let flags = best_flags(cells);
            let mut out = String::from("| method |");
            for (d, b) in &configs {
                write!(out, " {d} / {b} |").unwrap();
            }
            out.push('\n');
            out.push_str(&"|---".repeat(configs.len() + 1));
            out.push_str("|\n");
            for m in &methods {
                write!(out, "| {m} |").unwrap();
                for cfg in &configs {
                    let found = cells.iter().zip(&flags).find(|(c, _)| &c.method == m && &c.config() == cfg);
                    match found {
                        Some((c, &best)) => {
                            let text = format!("{:.4} ± {:.4}", c.mean, c.sd);
                            if best {
                                write!(out, " **{text}** |").unwrap();
                            } else {
                                write!(out, " {text} |").unwrap();
                            }
                        }
                        None => out.push_str(" |"),
                    }
                }
                out.push('\n');
            }
            Ok(out)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::RngStream;

    fn cell(dataset: &str, method: &str, mean: f64, sd: f64) -> ResultCell {
        ResultCell {
            dataset: dataset.into(),
            backbone: "synthetic".into(),
            method: method.into(),
            mean,
            sd,
            seeds: 5,
            metric: "mAP".into(),
        }
    }

    #[test]
    fn win_rule_examples() {
        let cells = vec![cell("d", "A", 10.0, 1.0), cell("d", "B", 8.5, 1.0)];
        let wm = win_matrix(&cells, WinRule::OpponentSd).unwrap();
        assert_eq!(wm.wins, vec![vec![0, 1], vec![0, 0]]);
        let cells = vec![cell("d", "A", 9.2, 0.1), cell("d", "B", 8.5, 1.0)];
        let wm = win_matrix(&cells, WinRule::OpponentSd).unwrap();
        assert_eq!(wm.wins, vec![vec![0, 0], vec![0, 0]]);
        // the alternative reading counts this one
        let wm = win_matrix(&cells, WinRule::OwnSd).unwrap();
        assert_eq!(wm.wins, vec![vec![0, 1], vec![0, 0]]);
    }

    #[test]
    fn coverage_hole_is_named() {
        let cells = vec![cell("d1", "A", 1.0, 0.0), cell("d1", "B", 1.0, 0.0), cell("d2", "A", 1.0, 0.0)];
        let err = win_matrix(&cells, WinRule::OpponentSd).unwrap_err().to_string();
        assert!(err.contains("B") && err.contains("d2"), "{err}");
    }

    #[test]
    fn random_cells_match_pairwise_loop() {
        let mut rng = RngStream::new(6, 0);
        let methods = ["linear", "mhca", "proto", "protobin"];
        for _ in 0..20 {
            let mut cells = Vec::new();
            for d in 0..5 {
                for m in methods {
                    cells.push(cell(&format!("d{d}"), m, rng.uniform(), 0.1 * rng.uniform()));
                }
            }
            let wm = win_matrix(&cells, WinRule::OpponentSd).unwrap();
            for (i, a) in methods.iter().enumerate() {
                for (j, b) in methods.iter().enumerate() {
                    let mut count = 0;
                    for d in 0..5 {
                        let ca = cells.iter().find(|c| c.method == *a && c.dataset == format!("d{d}")).unwrap();
                        let cb = cells.iter().find(|c| c.method == *b && c.dataset == format!("d{d}")).unwrap();
                        if a != b && ca.mean > cb.mean + cb.sd {
                            count += 1;
                        }
                    }
                    assert_eq!(wm.wins[i][j], count);
                    assert!(wm.wins[i][j] + wm.wins[j][i] <= wm.configurations);
                }
                assert_eq!(wm.wins[i][i], 0);
            }
        }
    }

    #[test]
    fn csv_round_trip_is_byte_identical() {
        let mut rng = RngStream::new(8, 0);
        let cells: Vec<ResultCell> = (0..6)
            .map(|i| cell(&format!("d{}", i % 2), &format!("m{}", i / 2), rng.uniform(), rng.uniform() * 0.01))
            .collect();
        let text = emit_table(&cells, TableFormat::Csv).unwrap();
        assert_eq!(text.lines().count(), 7);
        let again = emit_table(&read_cells(&text).unwrap(), TableFormat::Csv).unwrap();
        assert_eq!(text, again);
    }

    #[test]
    fn markdown_marks_the_best_cell() {
        let one = emit_table(&[cell("d", "A", 0.5, 0.01)], TableFormat::Markdown).unwrap();
        assert_eq!(one.lines().count(), 3);
        let mut rng = RngStream::new(2, 0);
        let cells: Vec<ResultCell> = (0..12)
            .map(|i| cell(&format!("d{}", i % 3), &format!("m{}", i / 3), rng.uniform(), 0.0))
            .collect();
        let flags = best_flags(&cells);
        for d in 0..3 {
            let name = format!("d{d}");
            let col: Vec<(usize, &ResultCell)> = cells.iter().enumerate().filter(|(_, c)| c.dataset == name).collect();
            let max = col.iter().map(|(_, c)| c.mean).fold(f64::MIN, f64::max);
            for (i, c) in col {
                assert_eq!(flags[i], c.mean == max);
            }
        }
        let md = emit_table(&cells, TableFormat::Markdown).unwrap();
        assert_eq!(md.matches("**").count(), 2 * 3);
    }

    #[test]
    fn negative_sd_rejected() {
        let text = "dataset,backbone,method,mean,sd,seeds,metric\nd,b,m,0.5,-0.1,5,mAP\n";
        assert!(read_cells(text).is_err());
    }
}
