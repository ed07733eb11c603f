//! Landmark evaluation: mean point error, CED, AUC and failure rate.
//!
//! Errors are unnormalised Euclidean distances (no inter-ocular scaling).
//! They are reported in input pixels by default; the quarter-resolution unit
//! divides every distance by the heatmap stride.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::heatmap::{LandmarkSet, STRIDE};

pub const DEFAULT_THRESHOLD: f64 = 1.2;
pub const CED_GRID: usize = 512;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ErrorUnit {
    /// Input-image pixels.
    #[default]
    Input,
    /// Heatmap pixels (input / 4).
    Quarter,
}

impl ErrorUnit {
    fn scale(self) -> f64 {
        match self {
            ErrorUnit::Input => 1.0,
            ErrorUnit::Quarter => 1.0 / STRIDE as f64,
        }
    }
}

/// Which error population the CED, AUC and FR are computed over.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CedMode {
    /// One value per image: the mean over its landmarks.
    #[default]
    PerImage,
    /// One value per landmark.
    PerPoint,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalOptions {
    pub unit: ErrorUnit,
    pub ced_mode: CedMode,
    pub threshold: f64,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            unit: ErrorUnit::Input,
            ced_mode: CedMode::PerImage,
            threshold: DEFAULT_THRESHOLD,
        }
    }
}

/// Per-image distances of every landmark.
pub fn point_errors(preds: &[LandmarkSet], truths: &[LandmarkSet]) -> Result<Vec<Vec<f64>>> {
    if preds.len() != truths.len() {
        return Err(Error::shape(format!(
            "{} predictions for {} ground-truth sets",
            preds.len(),
            truths.len()
        )));
    }
    preds
        .iter()
        .zip(truths)
        .map(|(p, t)| {
            if p.len() != t.len() || p.is_empty() {
                return Err(Error::shape(format!(
                    "landmark count mismatch: {} predicted vs {} labelled",
                    p.len(),
                    t.len()
                )));
            }
            Ok(p.points
                .iter()
                .zip(&t.points)
                .map(|(a, b)| {
                    let dx = (a[0] - b[0]) as f64;
                    let dy = (a[1] - b[1]) as f64;
                    (dx * dx + dy * dy).sqrt()
                })
                .collect())
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct MeanError {
    pub me: f64,
    /// Population standard deviation of the per-image errors.
    pub sd: f64,
    pub per_image: Vec<f64>,
}

fn mean_sd(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Mean over images of the per-image mean landmark distance (input pixels).
pub fn mean_error(preds: &[LandmarkSet], truths: &[LandmarkSet]) -> Result<MeanError> {
    if preds.is_empty() {
        return Err(Error::usage("mean error of an empty set"));
    }
    let per_image: Vec<f64> = point_errors(preds, truths)?
        .iter()
        .map(|e| e.iter().sum::<f64>() / e.len() as f64)
        .collect();
    let (me, sd) = mean_sd(&per_image);
    Ok(MeanError { me, sd, per_image })
}

/// Fraction of errors `≤ t`, sampled on `points` uniform values of `t` from
/// 0 to `max(threshold, max error)`.
pub fn ced(errors: &[f64], threshold: f64, points: usize) -> Result<Vec<(f64, f64)>> {
    if errors.is_empty() {
        return Err(Error::usage("CED of an empty error list"));
    }
    if points < 2 {
        return Err(Error::usage("CED needs at least two grid points"));
    }
    let mut sorted = errors.to_vec();
    sorted.sort_by(f64::total_cmp);
    let top = sorted.last().copied().unwrap_or(0.0).max(threshold);
    Ok(ced_on_grid(&sorted, top, points))
}

fn ced_on_grid(sorted: &[f64], top: f64, points: usize) -> Vec<(f64, f64)> {
    let n = sorted.len() as f64;
    (0..points)
        .map(|j| {
            let t = if j == points - 1 {
                top
            } else {
                top * j as f64 / (points - 1) as f64
            };
            let below = sorted.partition_point(|&e| e <= t);
            (t, below as f64 / n)
        })
        .collect()
}

/// `(AUC, FR)` at `threshold`: AUC is the trapezoidal integral of the CED
/// over `[0, threshold]` divided by `threshold`; FR is the fraction of
/// errors strictly above `threshold`.
pub fn auc_fr(errors: &[f64], threshold: f64) -> Result<(f64, f64)> {
    if !(threshold > 0.0) {
        return Err(Error::config(format!("threshold must be positive, got {threshold}")));
    }
    if errors.is_empty() {
        return Err(Error::usage("AUC of an empty error list"));
    }
    let mut sorted = errors.to_vec();
    sorted.sort_by(f64::total_cmp);
    let curve = ced_on_grid(&sorted, threshold, CED_GRID);
    let area: f64 = curve
        .windows(2)
        .map(|w| (w[1].0 - w[0].0) * (w[0].1 + w[1].1) / 2.0)
        .sum();
    let failures = sorted.iter().filter(|&&e| e > threshold).count();
    Ok((area / threshold, failures as f64 / sorted.len() as f64))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageError {
    pub id: String,
    pub error: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub unit: ErrorUnit,
    pub ced_mode: CedMode,
    pub threshold: f64,
    pub auc_cutoff: f64,
    pub num_images: usize,
    pub me: f64,
    pub sd: f64,
    pub fr: f64,
    pub auc: f64,
    pub per_image: Vec<ImageError>,
    pub ced: Vec<(f64, f64)>,
}

pub fn evaluate(ids: &[String], preds: &[LandmarkSet], truths: &[LandmarkSet], options: &EvalOptions) -> Result<EvalReport> {
    if ids.len() != preds.len() {
        return Err(Error::shape("one id per prediction required"));
    }
    let scale = options.unit.scale();
    let me = mean_error(preds, truths)?;
    let per_image: Vec<f64> = me.per_image.iter().map(|e| e * scale).collect();
    let population: Vec<f64> = match options.ced_mode {
        CedMode::PerImage => per_image.clone(),
        CedMode::PerPoint => point_errors(preds, truths)?
            .into_iter()
            .flatten()
            .map(|e| e * scale)
            .collect(),
    };
    let (auc, fr) = auc_fr(&population, options.threshold)?;
    Ok(EvalReport {
        unit: options.unit,
        ced_mode: options.ced_mode,
        threshold: options.threshold,
        auc_cutoff: options.threshold,
        num_images: preds.len(),
        me: me.me * scale,
        sd: me.sd * scale,
        fr,
        auc,
        per_image: ids
            .iter()
            .zip(&per_image)
            .map(|(id, &error)| ImageError { id: id.clone(), error })
            .collect(),
        ced: ced(&population, options.threshold, CED_GRID)?,
    })
}

pub fn ced_csv(curve: &[(f64, f64)]) -> String {
    let mut s = String::from("t,fraction\n");
    for (t, f) in curve {
        let _ = writeln!(s, "{t},{f}");
    }
    s
}

/// Write `report` as JSON and its CED samples as CSV.
pub fn write_report(report: &EvalReport, json_path: &Path, ced_path: &Path) -> Result<()> {
    for p in [json_path, ced_path] {
        if let Some(dir) = p.parent() {
            if !dir.as_os_str().is_empty() {
                fs::create_dir_all(dir)?;
            }
        }
    }
    let mut json = serde_json::to_string_pretty(report)?;
    json.push('\n');
    fs::write(json_path, json)?;
    fs::write(ced_path, ced_csv(&report.ced))?;
    Ok(())
}

// ---------------------------------------------------------------------------
// Prediction files: `id,x0,y0,…,x{K−1},y{K−1}`

pub fn predictions_csv(k: usize, rows: &[(String, LandmarkSet)]) -> String {
    let mut s = String::from("id");
    for i in 0..k {
        let _ = write!(s, ",x{i},y{i}");
    }
    s.push('\n');
    for (id, lm) in rows {
        s.push_str(id);
        for [x, y] in &lm.points {
            let _ = write!(s, ",{x},{y}");
        }
        s.push('\n');
    }
    s
}

pub fn write_predictions(path: &Path, k: usize, rows: &[(String, LandmarkSet)]) -> Result<()> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir)?;
        }
    }
    fs::write(path, predictions_csv(k, rows))?;
    Ok(())
}

pub fn parse_predictions(text: &str) -> Result<Vec<(String, LandmarkSet)>> {
    let mut lines = text.lines();
    let header = lines.next().ok_or_else(|| Error::format("empty predictions file"))?;
    let cols = header.split(',').count();
    if cols < 3 || cols % 2 == 0 || !header.starts_with("id,") {
        return Err(Error::format(format!("bad predictions header `{header}`")));
    }
    let k = (cols - 1) / 2;
    let mut rows = Vec::new();
    for (lineno, line) in lines.enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != cols {
            return Err(Error::format(format!("line {}: expected {cols} fields", lineno + 2)));
        }
        let mut points = Vec::with_capacity(k);
        for pair in fields[1..].chunks_exact(2) {
            let parse = |s: &str| {
                s.trim()
                    .parse::<f32>()
                    .map_err(|e| Error::format(format!("line {}: `{s}`: {e}", lineno + 2)))
            };
            points.push([parse(pair[0])?, parse(pair[1])?]);
        }
        let lm = LandmarkSet::new(points).map_err(|e| Error::format(e.to_string()))?;
        rows.push((fields[0].to_string(), lm));
    }
    Ok(rows)
}

pub fn read_predictions(path: &Path) -> Result<Vec<(String, LandmarkSet)>> {
    parse_predictions(&fs::read_to_string(path)?)
}
