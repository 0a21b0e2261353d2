//! Transfer verdicts and sweep tables.

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use super::SweepRecord;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum WidthVerdict {
    Argmin { index: usize, alpha: f64 },
    /// Every cell of the row diverged or failed.
    Indeterminate,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TransferVerdict {
    Transfers,
    DoesNotTransfer,
    /// Only one width, so there is nothing to transfer to.
    Vacuous,
    Indeterminate,
}

impl TransferVerdict {
    /// `Some(true)` for transfer, including the vacuous case.
    pub fn transfers(self) -> Option<bool> {
        match self {
            TransferVerdict::Transfers | TransferVerdict::Vacuous => Some(true),
            TransferVerdict::DoesNotTransfer => Some(false),
            TransferVerdict::Indeterminate => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Verdict {
    pub tolerance_cells: usize,
    pub per_width: Vec<(usize, WidthVerdict)>,
    pub overall: TransferVerdict,
}

/// The optimum transfers when every width's argmin lies within
/// `tolerance_cells` grid steps of the smallest width's argmin.
pub fn transfer_report(record: &SweepRecord, tolerance_cells: usize) -> Result<Verdict> {
    if record.widths.is_empty() || record.alphas.is_empty() {
        return Err(Error::InvalidRun("cannot judge an empty sweep".into()));
    }
    let per_width: Vec<(usize, WidthVerdict)> = record
        .widths
        .iter()
        .zip(record.argmins())
        .map(|(&w, a)| {
            let v = match a {
                Some(index) => WidthVerdict::Argmin {
                    index,
                    alpha: record.alphas[index],
                },
                None => WidthVerdict::Indeterminate,
            };
            (w, v)
        })
        .collect();
    let indices: Option<Vec<usize>> = per_width
        .iter()
        .map(|(_, v)| match v {
            WidthVerdict::Argmin { index, .. } => Some(*index),
            WidthVerdict::Indeterminate => None,
        })
        .collect();
    let overall = match indices {
        None => TransferVerdict::Indeterminate,
        Some(_) if record.widths.len() == 1 => TransferVerdict::Vacuous,
        Some(ix) => {
            let base = ix[0];
            if ix.iter().all(|&i| i.abs_diff(base) <= tolerance_cells) {
                TransferVerdict::Transfers
            } else {
                TransferVerdict::DoesNotTransfer
            }
        }
    };
    Ok(Verdict {
        tolerance_cells,
        per_width,
        overall,
    })
}

/// Column label such as `2^-6`, or the plain value off the power-of-two grid.
pub fn alpha_label(alpha: f64) -> String {
    let l = alpha.log2();
    if l.fract() == 0.0 && 2f64.powi(l as i32) == alpha {
        format!("2^{}", l as i32)
    } else {
        format!("{alpha}")
    }
}

/// Width rows by ascending-α columns. Each row's minimum is wrapped in
/// `**`; excluded cells read `diverged` or `failed`.
pub fn render_text(record: &SweepRecord) -> String {
    let argmins = record.argmins();
    let mut rows: Vec<Vec<String>> = Vec::new();
    let mut header = vec!["width".to_string()];
    header.extend(record.alphas.iter().map(|&a| alpha_label(a)));
    rows.push(header);
    for (wi, &w) in record.widths.iter().enumerate() {
        let mut row = vec![w.to_string()];
        for (ai, cell) in record.row(wi).iter().enumerate() {
            let text = match (cell.mean, cell.std) {
                (Some(m), std) => {
                    let body = match std {
                        Some(s) if !cell.runs.is_empty() && cell.runs.len() > 1 => {
                            format!("{m:.3} ± {s:.3}")
                        }
                        _ => format!("{m:.3}"),
                    };
                    if argmins[wi] == Some(ai) {
                        format!("**{body}**")
                    } else {
                        body
                    }
                }
                (None, _) if cell.failed > 0 => "failed".into(),
                (None, _) => "diverged".into(),
            };
            row.push(text);
        }
        rows.push(row);
    }
    let cols = rows[0].len();
    let widths: Vec<usize> = (0..cols)
        .map(|c| rows.iter().map(|r| r[c].chars().count()).max().unwrap_or(0))
        .collect();
    let mut out = String::new();
    for (i, row) in rows.iter().enumerate() {
        let line: Vec<String> = row
            .iter()
            .zip(&widths)
            .map(|(cell, &w)| format!("{cell:>w$}", w = w))
            .collect();
        out.push_str(line.join("  ").trim_end());
        out.push('\n');
        if i == 0 {
            out.push_str(&"-".repeat(widths.iter().sum::<usize>() + 2 * (cols - 1)));
            out.push('\n');
        }
    }
    out
}

/// One row of the long-form CSV table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TableRow {
    pub width: usize,
    pub alpha: f64,
    pub log2_alpha: f64,
    pub mean: Option<f64>,
    pub std: Option<f64>,
    pub seeds: usize,
    pub diverged: usize,
    pub failed: usize,
    pub argmin: bool,
}

pub fn table_rows(record: &SweepRecord) -> Vec<TableRow> {
    let argmins = record.argmins();
    let mut out = Vec::with_capacity(record.cells.len());
    for wi in 0..record.widths.len() {
        for (ai, cell) in record.row(wi).iter().enumerate() {
            out.push(TableRow {
                width: cell.width,
                alpha: cell.alpha,
                log2_alpha: cell.alpha.log2(),
                mean: cell.mean,
                std: cell.std,
                seeds: cell.runs.len(),
                diverged: cell.diverged,
                failed: cell.failed,
                argmin: argmins[wi] == Some(ai),
            });
        }
    }
    out
}

pub fn write_csv<W: Write>(record: &SweepRecord, writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    let err = |e: csv::Error| Error::InvalidRun(format!("csv: {e}"));
    for row in table_rows(record) {
        w.serialize(row).map_err(err)?;
    }
    w.flush()
        .map_err(|e| Error::InvalidRun(format!("csv: {e}")))
}

pub fn read_csv<R: Read>(reader: R) -> Result<Vec<TableRow>> {
    csv::Reader::from_reader(reader)
        .deserialize()
        .collect::<std::result::Result<Vec<TableRow>, _>>()
        .map_err(|e| Error::InvalidRun(format!("csv: {e}")))
}
