//! Reporting: damage summaries over all-pairs matrices, CSV and SVG heatmap
//! emission, confusion-matrix files, and the percentile/threshold ablation
//! grid. Every emitter has a matching parser so artifacts round-trip.

use std::fmt::Write as _;
use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::attack::PairMatrix;
use crate::data::{ClassIndex, LabeledDataset};
use crate::error::{Error, Result};
use crate::model::{Classifier, EvalResult, TrainConfig};
use crate::optimize::{
    build_compound_plan, fit_line, percentile, run_compound, PairObservation, PlanMode,
};
use crate::rng::RunRng;

/// Aggregates of the all-pairs damage matrices, following the tables' sign
/// convention: drops are negative, so the "max" drop is the minimum value.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DeltaSummary {
    pub max_delta_attacked: f64,
    pub pctl95_delta_attacked: f64,
    pub mean_delta_attacked: f64,
    pub max_delta_total: f64,
}

/// Summarize attacked-class and total deltas over all pairs. The 95th
/// percentile uses the same nearest-rank rule as pair planning, applied to
/// the drop-sorted list (so it sits between the max and the mean drop).
pub fn delta_summary(attacked: &[f64], totals: &[f64]) -> Result<DeltaSummary> {
    if attacked.is_empty() || totals.is_empty() {
        return Err(Error::InvalidArgument(
            "delta summary needs at least one pair".into(),
        ));
    }
    if attacked.iter().chain(totals).any(|v| !v.is_finite()) {
        return Err(Error::InvalidArgument(
            "delta summary input contains a non-finite value".into(),
        ));
    }
    let drops: Vec<f64> = attacked.iter().map(|d| -d).collect();
    Ok(DeltaSummary {
        max_delta_attacked: attacked.iter().copied().fold(f64::INFINITY, f64::min),
        pctl95_delta_attacked: -percentile(&drops, 95.0)?,
        mean_delta_attacked: attacked.iter().sum::<f64>() / attacked.len() as f64,
        max_delta_total: totals.iter().copied().fold(f64::INFINITY, f64::min),
    })
}

/// Summary over the off-diagonal cells of an all-pairs matrix.
pub fn matrix_summary(matrix: &PairMatrix) -> Result<DeltaSummary> {
    let mut attacked = Vec::new();
    let mut totals = Vec::new();
    for a in 0..matrix.k {
        for c in 0..matrix.k {
            if a == c {
                continue;
            }
            attacked.push(matrix.delta_attacked[[a, c]]);
            totals.push(matrix.delta_total[[a, c]]);
        }
    }
    delta_summary(&attacked, &totals)
}

fn check_heatmap_shape(matrix: &Array2<f64>, class_names: &[String]) -> Result<usize> {
    let k = matrix.nrows();
    if matrix.ncols() != k {
        return Err(Error::InvalidArgument(format!(
            "heatmap matrix must be square, got {}x{}",
            matrix.nrows(),
            matrix.ncols()
        )));
    }
    if class_names.len() != k {
        return Err(Error::InvalidArgument(format!(
            "{} class names for a {k}x{k} matrix",
            class_names.len()
        )));
    }
    for a in 0..k {
        for c in 0..k {
            if a != c && !matrix[[a, c]].is_finite() {
                return Err(Error::InvalidArgument(format!(
                    "off-diagonal heatmap cell ({a}, {c}) is not finite"
                )));
            }
        }
    }
    Ok(k)
}

/// Write a pair matrix as CSV: a header row of class names, one row per
/// attacked class, and empty diagonal cells. Values print in shortest
/// round-trip form, so `parse_heatmap` recovers them bit for bit.
pub fn emit_heatmap(matrix: &Array2<f64>, class_names: &[String], path: &Path) -> Result<()> {
    let k = check_heatmap_shape(matrix, class_names)?;
    let mut w = csv::Writer::from_path(path)?;
    let mut header = vec![String::new()];
    header.extend(class_names.iter().cloned());
    w.write_record(&header)?;
    for a in 0..k {
        let mut row = vec![class_names[a].clone()];
        for c in 0..k {
            if a == c {
                row.push(String::new());
            } else {
                row.push(format!("{}", matrix[[a, c]]));
            }
        }
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

/// Read a heatmap CSV back into a matrix (NaN on the diagonal) plus the
/// class names from its header.
pub fn parse_heatmap(path: &Path) -> Result<(Array2<f64>, Vec<String>)> {
    let mut r = csv::ReaderBuilder::new().has_headers(false).from_path(path)?;
    let mut rows = r.records();
    let header = rows
        .next()
        .ok_or_else(|| Error::Format("heatmap file is empty".into()))??;
    let class_names: Vec<String> = header.iter().skip(1).map(str::to_owned).collect();
    let k = class_names.len();
    let mut matrix = Array2::from_elem((k, k), f64::NAN);
    for (a, record) in rows.enumerate() {
        let record = record?;
        if record.len() != k + 1 {
            return Err(Error::Format(format!(
                "heatmap row {a} has {} fields, expected {}",
                record.len(),
                k + 1
            )));
        }
        if a >= k {
            return Err(Error::Format(format!(
                "heatmap has more than {k} data rows"
            )));
        }
        for c in 0..k {
            let cell = &record[c + 1];
            if cell.is_empty() {
                continue;
            }
            matrix[[a, c]] = cell
                .parse()
                .map_err(|_| Error::Format(format!("bad heatmap cell ({a}, {c}): {cell:?}")))?;
        }
    }
    Ok((matrix, class_names))
}

fn diverging_color(value: f64, amax: f64) -> String {
    if amax == 0.0 || value == 0.0 {
        return "rgb(255,255,255)".into();
    }
    let t = (value.abs() / amax).clamp(0.0, 1.0);
    // White toward red for drops, white toward blue for gains.
    let (er, eg, eb) = if value < 0.0 {
        (178.0, 24.0, 43.0)
    } else {
        (33.0, 102.0, 172.0)
    };
    let lerp = |end: f64| (255.0 + (end - 255.0) * t).round() as u8;
    format!("rgb({},{},{})", lerp(er), lerp(eg), lerp(eb))
}

/// Render the matrix as a standalone SVG heatmap with a diverging scale
/// (drops red, gains blue), values printed in the cells. Pure text output;
/// nothing is rasterized.
pub fn emit_heatmap_svg(matrix: &Array2<f64>, class_names: &[String], path: &Path) -> Result<()> {
    let k = check_heatmap_shape(matrix, class_names)?;
    let cell = 64usize;
    let left = 110usize;
    let top = 40usize;
    let width = left + k * cell + 10;
    let height = top + k * cell + 10;
    let amax = matrix
        .iter()
        .filter(|v| v.is_finite())
        .fold(0.0f64, |m, &v| m.max(v.abs()));

    let mut s = String::new();
    let _ = writeln!(
        s,
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{width}\" height=\"{height}\" \
         viewBox=\"0 0 {width} {height}\" font-family=\"sans-serif\" font-size=\"12\">"
    );
    let _ = writeln!(s, "<rect width=\"{width}\" height=\"{height}\" fill=\"white\"/>");
    for (c, name) in class_names.iter().enumerate() {
        let x = left + c * cell + cell / 2;
        let _ = writeln!(
            s,
            "<text x=\"{x}\" y=\"{}\" text-anchor=\"middle\">{}</text>",
            top - 12,
            xml_escape(name)
        );
    }
    for (a, name) in class_names.iter().enumerate() {
        let y = top + a * cell + cell / 2 + 4;
        let _ = writeln!(
            s,
            "<text x=\"{}\" y=\"{y}\" text-anchor=\"end\">{}</text>",
            left - 8,
            xml_escape(name)
        );
    }
    for a in 0..k {
        for c in 0..k {
            let x = left + c * cell;
            let y = top + a * cell;
            if a == c {
                let _ = writeln!(
                    s,
                    "<rect x=\"{x}\" y=\"{y}\" width=\"{cell}\" height=\"{cell}\" \
                     fill=\"rgb(240,240,240)\" stroke=\"rgb(200,200,200)\"/>"
                );
                continue;
            }
            let v = matrix[[a, c]];
            let fill = diverging_color(v, amax);
            let _ = writeln!(
                s,
                "<rect x=\"{x}\" y=\"{y}\" width=\"{cell}\" height=\"{cell}\" \
                 fill=\"{fill}\" stroke=\"rgb(200,200,200)\"/>"
            );
            let dark_cell = amax > 0.0 && v.abs() / amax > 0.6;
            let text_fill = if dark_cell { "white" } else { "black" };
            let _ = writeln!(
                s,
                "<text x=\"{}\" y=\"{}\" text-anchor=\"middle\" fill=\"{text_fill}\">{v:.2}</text>",
                x + cell / 2,
                y + cell / 2 + 4
            );
        }
    }
    s.push_str("</svg>\n");
    std::fs::write(path, s)?;
    Ok(())
}

fn xml_escape(raw: &str) -> String {
    raw.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

fn emit_counts(counts: &[Vec<i64>], class_names: &[String], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let mut header = vec![String::new()];
    header.extend(class_names.iter().cloned());
    w.write_record(&header)?;
    for (a, row) in counts.iter().enumerate() {
        let mut record = vec![class_names[a].clone()];
        record.extend(row.iter().map(|v| v.to_string()));
        w.write_record(&record)?;
    }
    w.flush()?;
    Ok(())
}

/// Read a confusion-count CSV back: (counts, class names). Also parses the
/// signed difference matrices.
pub fn parse_counts(path: &Path) -> Result<(Vec<Vec<i64>>, Vec<String>)> {
    let mut r = csv::ReaderBuilder::new().has_headers(false).from_path(path)?;
    let mut rows = r.records();
    let header = rows
        .next()
        .ok_or_else(|| Error::Format("count file is empty".into()))??;
    let class_names: Vec<String> = header.iter().skip(1).map(str::to_owned).collect();
    let mut counts = Vec::new();
    for record in rows {
        let record = record?;
        let mut row = Vec::with_capacity(class_names.len());
        for cell in record.iter().skip(1) {
            row.push(
                cell.parse()
                    .map_err(|_| Error::Format(format!("bad count cell: {cell:?}")))?,
            );
        }
        counts.push(row);
    }
    Ok((counts, class_names))
}

/// Write pre- and post-attack confusion matrices plus their difference
/// (post minus pre) as three CSV files in `dir`: `confusion_pre.csv`,
/// `confusion_post.csv`, `confusion_diff.csv`. Rows are true classes,
/// columns predictions.
pub fn emit_confusion(
    pre: &EvalResult,
    post: &EvalResult,
    class_names: &[String],
    dir: &Path,
) -> Result<()> {
    let k = class_names.len();
    if pre.confusion.len() != k || post.confusion.len() != k {
        return Err(Error::InvalidArgument(format!(
            "confusion matrices must be {k}x{k} to match {k} class names"
        )));
    }
    let signed = |m: &Vec<Vec<u64>>| -> Vec<Vec<i64>> {
        m.iter()
            .map(|row| row.iter().map(|&v| v as i64).collect())
            .collect()
    };
    let pre_counts = signed(&pre.confusion);
    let post_counts = signed(&post.confusion);
    let diff: Vec<Vec<i64>> = post_counts
        .iter()
        .zip(&pre_counts)
        .map(|(p, b)| p.iter().zip(b).map(|(x, y)| x - y).collect())
        .collect();
    std::fs::create_dir_all(dir)?;
    emit_counts(&pre_counts, class_names, &dir.join("confusion_pre.csv"))?;
    emit_counts(&post_counts, class_names, &dir.join("confusion_post.csv"))?;
    emit_counts(&diff, class_names, &dir.join("confusion_diff.csv"))?;
    Ok(())
}

/// One cell of the percentile/threshold ablation grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationCell {
    pub percentile_p: f64,
    pub rho_threshold: f64,
    /// Selected pairs in plan order; empty when nothing passed the
    /// threshold or the fit degenerated.
    pub pairs: Vec<(usize, usize)>,
    /// Each selected pair's rho at this cell's percentile, in pair order.
    pub rhos: Vec<f64>,
    pub n_tilde: usize,
    /// Most negative total-accuracy delta across trials; 0 for empty cells.
    pub max_delta_total: f64,
    /// The line fit for this percentile degenerated; the cell records an
    /// empty plan instead of failing the grid.
    pub degenerate_fit: bool,
}

/// Refit the percentile line and rerun the compound attack for every
/// (percentile, threshold) combination. Cells are emitted row-major,
/// percentiles outer. A degenerate fit or an all-filtered threshold
/// produces an empty cell, never an error.
#[allow(clippy::too_many_arguments)]
pub fn run_ablation(
    victim: &Classifier,
    source: &LabeledDataset,
    index: &ClassIndex,
    test: &LabeledDataset,
    observations: &[PairObservation],
    p_values: &[f64],
    rho_thresholds: &[f64],
    quantum: usize,
    trials: usize,
    cfg: &TrainConfig,
    base: &RunRng,
) -> Result<Vec<AblationCell>> {
    if p_values.is_empty() || rho_thresholds.is_empty() {
        return Err(Error::InvalidArgument("empty ablation grid".into()));
    }
    if trials == 0 {
        return Err(Error::InvalidArgument("ablation needs trials >= 1".into()));
    }
    let k = source.k();
    let mut candidates = Vec::new();
    for a in 0..k {
        for c in 0..k {
            if a != c {
                candidates.push((a, c));
            }
        }
    }
    let mut cells = Vec::with_capacity(p_values.len() * rho_thresholds.len());
    for (pi, &p) in p_values.iter().enumerate() {
        let line = match fit_line(observations, p) {
            Ok(line) => Some(line),
            Err(Error::DegenerateFit(_)) => None,
            Err(e) => return Err(e),
        };
        for (ri, &rho_threshold) in rho_thresholds.iter().enumerate() {
            let empty = |degenerate: bool| AblationCell {
                percentile_p: p,
                rho_threshold,
                pairs: Vec::new(),
                rhos: Vec::new(),
                n_tilde: 0,
                max_delta_total: 0.0,
                degenerate_fit: degenerate,
            };
            let Some(line) = line.as_ref() else {
                cells.push(empty(true));
                continue;
            };
            let mode = PlanMode::Offline;
            let plan = build_compound_plan(
                victim,
                source,
                index,
                &candidates,
                line,
                rho_threshold,
                quantum,
                mode,
                mode.default_threshold_on(),
            )?;
            if plan.is_empty() {
                cells.push(empty(false));
                continue;
            }
            let mut max_delta_total = f64::INFINITY;
            for t in 0..trials {
                let mut rng = base.derive("ablate", (pi * rho_thresholds.len() + ri) as u64)
                    .stream_at("trial", t as u64);
                let (outcome, _) =
                    run_compound(victim, victim, source, index, test, &plan, cfg, &mut rng)?;
                max_delta_total = max_delta_total.min(outcome.delta_total);
            }
            cells.push(AblationCell {
                percentile_p: p,
                rho_threshold,
                pairs: plan.pairs.iter().map(|q| (q.attacked, q.confounding)).collect(),
                rhos: plan.pairs.iter().map(|q| q.rho).collect(),
                n_tilde: plan.n_tilde,
                max_delta_total,
                degenerate_fit: false,
            });
        }
    }
    Ok(cells)
}

/// Write the ablation grid as CSV, one row per cell.
pub fn emit_ablation(cells: &[AblationCell], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record([
        "percentile_p",
        "rho_threshold",
        "pairs",
        "rhos",
        "n_tilde",
        "max_delta_total",
        "degenerate_fit",
    ])?;
    for cell in cells {
        let pairs = cell
            .pairs
            .iter()
            .map(|(a, c)| format!("{a}-{c}"))
            .collect::<Vec<_>>()
            .join(";");
        let rhos = cell
            .rhos
            .iter()
            .map(|r| format!("{r}"))
            .collect::<Vec<_>>()
            .join(";");
        w.write_record([
            format!("{}", cell.percentile_p),
            format!("{}", cell.rho_threshold),
            pairs,
            rhos,
            cell.n_tilde.to_string(),
            format!("{}", cell.max_delta_total),
            cell.degenerate_fit.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Read an ablation CSV back into cells.
pub fn parse_ablation(path: &Path) -> Result<Vec<AblationCell>> {
    let mut r = csv::Reader::from_path(path)?;
    let mut cells = Vec::new();
    for record in r.records() {
        let record = record?;
        if record.len() != 7 {
            return Err(Error::Format(format!(
                "ablation row has {} fields, expected 7",
                record.len()
            )));
        }
        let num = |i: usize| -> Result<f64> {
            record[i]
                .parse()
                .map_err(|_| Error::Format(format!("bad ablation number: {:?}", &record[i])))
        };
        let pairs = if record[2].is_empty() {
            Vec::new()
        } else {
            record[2]
                .split(';')
                .map(|s| {
                    let (a, c) = s
                        .split_once('-')
                        .ok_or_else(|| Error::Format(format!("bad ablation pair: {s:?}")))?;
                    Ok((
                        a.parse()
                            .map_err(|_| Error::Format(format!("bad ablation pair: {s:?}")))?,
                        c.parse()
                            .map_err(|_| Error::Format(format!("bad ablation pair: {s:?}")))?,
                    ))
                })
                .collect::<Result<Vec<(usize, usize)>>>()?
        };
        let rhos = if record[3].is_empty() {
            Vec::new()
        } else {
            record[3]
                .split(';')
                .map(|s| {
                    s.parse()
                        .map_err(|_| Error::Format(format!("bad ablation rho: {s:?}")))
                })
                .collect::<Result<Vec<f64>>>()?
        };
        cells.push(AblationCell {
            percentile_p: num(0)?,
            rho_threshold: num(1)?,
            pairs,
            rhos,
            n_tilde: record[4]
                .parse()
                .map_err(|_| Error::Format(format!("bad ablation count: {:?}", &record[4])))?,
            max_delta_total: num(5)?,
            degenerate_fit: record[6]
                .parse()
                .map_err(|_| Error::Format(format!("bad ablation flag: {:?}", &record[6])))?,
        });
    }
    Ok(cells)
}
