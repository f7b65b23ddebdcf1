//! Evaluation metrics and report serialization.
//!
//! The headline metric is the median translation / rotation error over a
//! sequence. For even-length lists the median takes the lower-middle order
//! statistic, so reported values are always realized errors. CSV output is
//! gnuplot-friendly: `# key = value` comment lines, a single header row,
//! then data rows; floats carry 17 significant digits so a parse-back is
//! bit-exact.

use crate::align::AlignReport;
use crate::error::{Error, Result};
use crate::geometry::{rotation_angle_deg, Pose};
use serde::{Deserialize, Serialize};

/// Per-frame pose errors and their medians.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorTable {
    /// Per-frame `‖x − x̂‖₂`, meters.
    pub translation_errors: Vec<f64>,
    /// Per-frame geodesic rotation error, degrees.
    pub rotation_errors_deg: Vec<f64>,
    pub median_translation: f64,
    pub median_rotation_deg: f64,
    pub frame_count: usize,
}

/// Lower-middle order statistic; the realized-value median convention.
pub fn median_lower(values: &[f64]) -> f64 {
    assert!(!values.is_empty(), "median of an empty list");
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    sorted[(sorted.len() - 1) / 2]
}

/// Per-frame translation/rotation errors of predictions against ground
/// truth, plus their medians. Lists must be aligned and non-empty.
pub fn pose_errors(pred: &[Pose], gt: &[Pose]) -> Result<ErrorTable> {
    if pred.len() != gt.len() {
        return Err(Error::InvalidInput(format!(
            "pose list lengths differ: {} vs {}",
            pred.len(),
            gt.len()
        )));
    }
    if pred.is_empty() {
        return Err(Error::InvalidInput("pose lists are empty".into()));
    }
    let translation_errors: Vec<f64> = pred
        .iter()
        .zip(gt)
        .map(|(p, g)| (p.position - g.position).norm())
        .collect();
    let rotation_errors_deg: Vec<f64> = pred
        .iter()
        .zip(gt)
        .map(|(p, g)| rotation_angle_deg(&p.orientation, &g.orientation))
        .collect();
    Ok(ErrorTable {
        median_translation: median_lower(&translation_errors),
        median_rotation_deg: median_lower(&rotation_errors_deg),
        frame_count: pred.len(),
        translation_errors,
        rotation_errors_deg,
    })
}

/// Output encoding for reports.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReportFormat {
    Csv,
    Json,
}

impl std::str::FromStr for ReportFormat {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "csv" => Ok(Self::Csv),
            "json" => Ok(Self::Json),
            other => Err(Error::Parse(format!(
                "unknown format '{other}' (expected csv | json)"
            ))),
        }
    }
}

/// 17 significant digits: enough to reproduce any f64 bit-exactly.
pub fn format_f64(v: f64) -> String {
    format!("{v:.16e}")
}

fn json_string<T: Serialize>(value: &T) -> String {
    let mut s = serde_json::to_string_pretty(value).expect("report types serialize");
    s.push('\n');
    s
}

/// Serializes an error table; `preamble` lines become `#` comments in CSV
/// and are ignored for JSON (callers embed their config there instead).
pub fn emit_error_table(table: &ErrorTable, format: ReportFormat, preamble: &[String]) -> String {
    match format {
        ReportFormat::Json => json_string(table),
        ReportFormat::Csv => {
            let mut out = String::new();
            for line in preamble {
                out.push_str(&format!("# {line}\n"));
            }
            out.push_str(&format!(
                "# median_translation = {}\n# median_rotation_deg = {}\n# frame_count = {}\n",
                format_f64(table.median_translation),
                format_f64(table.median_rotation_deg),
                table.frame_count
            ));
            out.push_str("frame,translation_error_m,rotation_error_deg\n");
            for i in 0..table.frame_count {
                out.push_str(&format!(
                    "{},{},{}\n",
                    i,
                    format_f64(table.translation_errors[i]),
                    format_f64(table.rotation_errors_deg[i])
                ));
            }
            out
        }
    }
}

/// Serializes an alignment report. The CSV form carries the scalar summary
/// as comments and the loss trajectory as rows (possibly zero of them).
pub fn emit_align_report(
    report: &AlignReport,
    format: ReportFormat,
    preamble: &[String],
) -> String {
    match format {
        ReportFormat::Json => json_string(report),
        ReportFormat::Csv => {
            let mut out = String::new();
            for line in preamble {
                out.push_str(&format!("# {line}\n"));
            }
            let p = &report.pose_prev;
            let c = &report.pose_curr;
            out.push_str(&format!(
                "# converged = {}\n# iterations = {}\n# optimized_params = {}\n# degenerate = {}\n",
                report.converged, report.iterations, report.optimized_params, report.degenerate
            ));
            out.push_str(&format!(
                "# total = {}\n# l_d = {}\n# l_p = {}\n# l_s = {}\n",
                format_f64(report.final_loss.total),
                format_f64(report.final_loss.l_d),
                format_f64(report.final_loss.l_p),
                format_f64(report.final_loss.l_s)
            ));
            out.push_str(&format!(
                "# pose_prev = {} {} {} {} {} {} {}\n",
                format_f64(p.position.x),
                format_f64(p.position.y),
                format_f64(p.position.z),
                format_f64(p.orientation.w),
                format_f64(p.orientation.x),
                format_f64(p.orientation.y),
                format_f64(p.orientation.z)
            ));
            out.push_str(&format!(
                "# pose_curr = {} {} {} {} {} {} {}\n",
                format_f64(c.position.x),
                format_f64(c.position.y),
                format_f64(c.position.z),
                format_f64(c.orientation.w),
                format_f64(c.orientation.x),
                format_f64(c.orientation.y),
                format_f64(c.orientation.z)
            ));
            out.push_str("iteration,total_loss\n");
            for (i, total) in report.trajectory.iter().enumerate() {
                out.push_str(&format!("{},{}\n", i, format_f64(*total)));
            }
            out
        }
    }
}
