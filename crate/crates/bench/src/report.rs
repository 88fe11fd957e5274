//! Methods × variants benchmark tables with best and second-best flags.

use std::fmt::Write as _;
use std::path::Path;

use ssct_core::losses::Method;
use ssct_core::metrics::{Aggregate, MetricReport};

use crate::config::{ExperimentConfig, Split, Variant};
use crate::evaluate::{read_metrics, BASELINE_LABEL};
use crate::{fmt_f64, write_text, BenchError};

/// Row labels in canonical order; earlier rows win ties.
pub fn canonical_labels() -> Vec<String> {
    std::iter::once(BASELINE_LABEL.to_string())
        .chain(Method::ALL.iter().map(|m| m.to_string()))
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Flag {
    None,
    Best,
    Second,
}

impl Flag {
    fn csv(self) -> &'static str {
        match self {
            Flag::None => "",
            Flag::Best => "best",
            Flag::Second => "second",
        }
    }

    fn mark(self) -> &'static str {
        match self {
            Flag::None => "",
            Flag::Best => "**",
            Flag::Second => "*",
        }
    }
}

#[derive(Clone, Debug)]
pub struct Cell {
    pub psnr: Aggregate,
    pub ssim: Aggregate,
    pub psnr_flag: Flag,
    pub ssim_flag: Flag,
    /// Result file the cell was read from.
    pub source: String,
}

#[derive(Clone, Debug)]
pub struct Table {
    pub rows: Vec<String>,
    pub columns: Vec<Variant>,
    /// `cells[row][column]`.
    pub cells: Vec<Vec<Option<Cell>>>,
}

impl Table {
    pub fn cell(&self, row: &str, column: Variant) -> Option<&Cell> {
        let r = self.rows.iter().position(|l| l == row)?;
        let c = self.columns.iter().position(|&v| v == column)?;
        self.cells[r][c].as_ref()
    }
}

/// Best and second-best per column by descending value; ties keep row
/// order.
pub fn flags(values: &[Option<f64>]) -> Vec<Flag> {
    let mut order: Vec<usize> = (0..values.len()).filter(|&i| values[i].is_some()).collect();
    order.sort_by(|&a, &b| {
        values[b]
            .partial_cmp(&values[a])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    let mut out = vec![Flag::None; values.len()];
    if let Some(&i) = order.first() {
        out[i] = Flag::Best;
    }
    if let Some(&i) = order.get(1) {
        out[i] = Flag::Second;
    }
    out
}

/// Picks the result file for `label` among the files of one variant. A
/// bare `<label>_<split>.csv` (written by a sweep) wins; otherwise the
/// λ-suffixed run with the highest mean PSNR.
fn pick(dir: &Path, label: &str, split: Split) -> Result<Option<(String, MetricReport)>, BenchError> {
    let bare = format!("{label}_{split}.csv");
    if dir.join(&bare).exists() {
        return Ok(Some((bare.clone(), read_metrics(&dir.join(bare))?)));
    }
    let prefix = format!("{label}_lambda=");
    let suffix = format!("_{split}.csv");
    let mut names: Vec<String> = std::fs::read_dir(dir)
        .map_err(|e| BenchError::io(dir, e))?
        .filter_map(|e| e.ok()?.file_name().into_string().ok())
        .filter(|n| n.starts_with(&prefix) && n.ends_with(&suffix))
        .collect();
    names.sort();
    let mut best: Option<(String, MetricReport)> = None;
    for n in names {
        let r = read_metrics(&dir.join(&n))?;
        if best.as_ref().is_none_or(|(_, b)| r.psnr.mean > b.psnr.mean) {
            best = Some((n, r));
        }
    }
    Ok(best)
}

/// Collects every evaluated method and variant on `split`.
pub fn build_table(results_dir: &Path, split: Split) -> Result<Table, BenchError> {
    let labels = canonical_labels();
    let mut columns = Vec::new();
    let mut raw: Vec<Vec<Option<(String, MetricReport)>>> = vec![Vec::new(); labels.len()];
    for v in Variant::ALL {
        let dir = results_dir.join(v.name());
        if !dir.is_dir() {
            continue;
        }
        let col: Vec<_> = labels
            .iter()
            .map(|l| pick(&dir, l, split))
            .collect::<Result<_, _>>()?;
        if col.iter().all(Option::is_none) {
            continue;
        }
        columns.push(v);
        for (r, c) in raw.iter_mut().zip(col) {
            r.push(c);
        }
    }
    let keep: Vec<usize> = (0..labels.len()).filter(|&r| raw[r].iter().any(Option::is_some)).collect();
    if keep.is_empty() {
        return Err(BenchError::Missing {
            what: "evaluation results (run `ssct evaluate`)",
            path: results_dir.to_path_buf(),
        });
    }
    let rows: Vec<String> = keep.iter().map(|&r| labels[r].clone()).collect();
    let mut cells: Vec<Vec<Option<Cell>>> = keep
        .iter()
        .map(|&r| {
            raw[r]
                .iter()
                .map(|c| {
                    c.as_ref().map(|(source, m)| Cell {
                        psnr: m.psnr,
                        ssim: m.ssim,
                        psnr_flag: Flag::None,
                        ssim_flag: Flag::None,
                        source: source.clone(),
                    })
                })
                .collect()
        })
        .collect();
    for c in 0..columns.len() {
        let psnr: Vec<Option<f64>> = cells.iter().map(|r| r[c].as_ref().map(|x| x.psnr.mean)).collect();
        let ssim: Vec<Option<f64>> = cells.iter().map(|r| r[c].as_ref().map(|x| x.ssim.mean)).collect();
        for (r, (pf, sf)) in flags(&psnr).into_iter().zip(flags(&ssim)).enumerate() {
            if let Some(cell) = cells[r][c].as_mut() {
                cell.psnr_flag = pf;
                cell.ssim_flag = sf;
            }
        }
    }
    Ok(Table { rows, columns, cells })
}

pub fn table_csv(t: &Table) -> String {
    let mut s = String::from("method,variant,psnr_mean,psnr_std,psnr_flag,ssim_mean,ssim_std,ssim_flag,source\n");
    for (r, label) in t.rows.iter().enumerate() {
        for (c, v) in t.columns.iter().enumerate() {
            if let Some(cell) = &t.cells[r][c] {
                let _ = writeln!(
                    s,
                    "{label},{v},{},{},{},{},{},{},{}",
                    fmt_f64(cell.psnr.mean),
                    fmt_f64(cell.psnr.std),
                    cell.psnr_flag.csv(),
                    fmt_f64(cell.ssim.mean),
                    fmt_f64(cell.ssim.std),
                    cell.ssim_flag.csv(),
                    cell.source
                );
            }
        }
    }
    s
}

pub fn table_text(t: &Table) -> String {
    let header: Vec<String> = std::iter::once("method".to_string())
        .chain(t.columns.iter().map(|v| format!("{v} PSNR")))
        .chain(t.columns.iter().map(|v| format!("{v} SSIM")))
        .collect();
    let mut body: Vec<Vec<String>> = Vec::new();
    for (r, label) in t.rows.iter().enumerate() {
        let mut line = vec![label.clone()];
        for c in 0..t.columns.len() {
            line.push(t.cells[r][c].as_ref().map_or("-".into(), |x| {
                format!("{:.2} ± {:.2}{}", x.psnr.mean, x.psnr.std, x.psnr_flag.mark())
            }));
        }
        for c in 0..t.columns.len() {
            line.push(t.cells[r][c].as_ref().map_or("-".into(), |x| {
                format!("{:.3} ± {:.3}{}", x.ssim.mean, x.ssim.std, x.ssim_flag.mark())
            }));
        }
        body.push(line);
    }
    let widths: Vec<usize> = (0..header.len())
        .map(|i| {
            body.iter()
                .map(|l| l[i].chars().count())
                .chain(std::iter::once(header[i].chars().count()))
                .max()
                .unwrap_or(0)
        })
        .collect();
    let fmt_line = |cols: &[String]| -> String {
        let cells: Vec<String> = cols
            .iter()
            .zip(&widths)
            .enumerate()
            .map(|(i, (s, &w))| {
                let pad = w - s.chars().count();
                if i == 0 {
                    format!("{s}{}", " ".repeat(pad))
                } else {
                    format!("{}{s}", " ".repeat(pad))
                }
            })
            .collect();
        cells.join("  ").trim_end().to_string()
    };
    let mut s = String::from("# mean ± std over the test images; ** best, * second best; ties go to the earlier row\n");
    s.push_str(&fmt_line(&header));
    s.push('\n');
    for l in &body {
        s.push_str(&fmt_line(l));
        s.push('\n');
    }
    s
}

/// The `report` command: reads every evaluation and writes `table.csv`
/// and `table.txt`.
pub fn report(cfg: &ExperimentConfig) -> Result<Table, BenchError> {
    let layout = cfg.layout();
    let table = build_table(&layout.results_dir(), cfg.run.split)?;
    let dir = layout.report_dir();
    write_text(&dir.join("table.csv"), &table_csv(&table))?;
    write_text(&dir.join("table.txt"), &table_text(&table))?;
    Ok(table)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flags_break_ties_by_row_order() {
        let f = flags(&[Some(1.0), Some(3.0), None, Some(3.0), Some(2.0)]);
        assert_eq!(f, vec![Flag::None, Flag::Best, Flag::None, Flag::Second, Flag::None]);
        assert_eq!(flags(&[Some(1.0)]), vec![Flag::Best]);
        assert_eq!(flags(&[None, None]), vec![Flag::None, Flag::None]);
    }

    #[test]
    fn labels_start_with_the_baseline() {
        let l = canonical_labels();
        assert_eq!(l[0], "FBP");
        assert_eq!(l[1], "SUP");
        assert_eq!(l.len(), 9);
    }
}
