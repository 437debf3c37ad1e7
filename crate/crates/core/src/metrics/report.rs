use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{average_accuracy, backward_transfer, pooled_accuracy, AccuracyMatrix, MetricsError};

pub const SCHEMA_VERSION: u64 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BufferStats {
    pub capacity: usize,
    pub size: usize,
    pub seen: u64,
    pub stored_bytes: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CodebookStats {
    pub split: usize,
    pub m: usize,
    pub k: usize,
    pub dim: usize,
    pub sse: Vec<f64>,
    pub final_sse: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLoss {
    pub episode: usize,
    pub epoch: usize,
    pub loss: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub schema_version: u64,
    /// Display name of the strategy, e.g. `der_pp`.
    pub strategy: String,
    pub seed: u64,
    /// Whether evaluation was given task identity (independent models).
    pub task_oracle: bool,
    /// Fully resolved configuration of the run.
    pub config: serde_json::Value,
    pub registry: Vec<String>,
    pub matrix: AccuracyMatrix,
    pub average_accuracy: Vec<f64>,
    pub pooled_accuracy: Vec<f64>,
    pub backward_transfer: Option<f64>,
    pub wall_clock_secs: f64,
    pub buffer: Option<BufferStats>,
    pub codebook: Option<CodebookStats>,
    pub losses: Vec<EpochLoss>,
    pub notes: Vec<String>,
}

impl RunReport {
    /// Fills the derived curves from `matrix`.
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        strategy: &str,
        seed: u64,
        task_oracle: bool,
        config: serde_json::Value,
        registry: Vec<String>,
        matrix: AccuracyMatrix,
        wall_clock_secs: f64,
        losses: Vec<EpochLoss>,
    ) -> Self {
        let t = matrix.episodes();
        RunReport {
            schema_version: SCHEMA_VERSION,
            strategy: strategy.to_string(),
            seed,
            task_oracle,
            config,
            registry,
            average_accuracy: (1..=t).map(|s| average_accuracy(&matrix, s)).collect(),
            pooled_accuracy: (1..=t).map(|s| pooled_accuracy(&matrix, s)).collect(),
            backward_transfer: backward_transfer(&matrix),
            matrix,
            wall_clock_secs,
            buffer: None,
            codebook: None,
            losses,
            notes: Vec::new(),
        }
    }

    pub fn final_average_accuracy(&self) -> f64 {
        self.average_accuracy.last().copied().unwrap_or(0.0)
    }

    /// Label used in charts and summaries.
    pub fn label(&self) -> String {
        if self.task_oracle {
            format!("{} (task oracle)", self.strategy)
        } else {
            self.strategy.clone()
        }
    }
}

/// `episode,i,accuracy,n`, one row per lower-triangular cell.
pub fn matrix_csv(r: &AccuracyMatrix) -> String {
    let mut out = String::from("episode,i,accuracy,n\n");
    for t in 1..=r.episodes() {
        for i in 1..=t {
            let c = r.cell(t, i);
            writeln!(out, "{t},{i},{:.1},{}", c.accuracy, c.n).expect("write to string");
        }
    }
    out
}

const PALETTE: [&str; 8] = [
    "#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#17becf",
];

fn xml_escape(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
        .replace('"', "&quot;")
}

/// Line chart of average-accuracy curves, one polyline per series.
pub fn render_curves(series: &[(String, Vec<f64>)]) -> String {
    let (w, h) = (640.0, 400.0);
    let (left, right, top, bottom) = (60.0, 180.0, 20.0, 50.0);
    let pw = w - left - right;
    let ph = h - top - bottom;
    let t_max = series.iter().map(|s| s.1.len()).max().unwrap_or(1).max(2);
    let x = |t: usize| left + pw * (t - 1) as f64 / (t_max - 1) as f64;
    let y = |a: f64| top + ph * (1.0 - a.clamp(0.0, 100.0) / 100.0);

    let mut s = String::new();
    writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}" font-family="sans-serif" font-size="12">"#).unwrap();
    writeln!(s, r#"<rect width="{w}" height="{h}" fill="white"/>"#).unwrap();
    for a in (0..=100).step_by(20) {
        let yy = y(a as f64);
        writeln!(
            s,
            r##"<line x1="{left}" y1="{yy:.1}" x2="{:.1}" y2="{yy:.1}" stroke="#ddd"/>"##,
            left + pw
        )
        .unwrap();
        writeln!(
            s,
            r#"<text x="{:.1}" y="{:.1}" text-anchor="end">{a}</text>"#,
            left - 6.0,
            yy + 4.0
        )
        .unwrap();
    }
    for t in 1..=t_max {
        writeln!(
            s,
            r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">{t}</text>"#,
            x(t),
            top + ph + 18.0
        )
        .unwrap();
    }
    writeln!(
        s,
        r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">episode</text>"#,
        left + pw / 2.0,
        h - 10.0
    )
    .unwrap();
    writeln!(s, r#"<text x="16" y="{:.1}" text-anchor="middle" transform="rotate(-90 16 {:.1})">average accuracy (%)</text>"#, top + ph / 2.0, top + ph / 2.0).unwrap();
    for (k, (label, curve)) in series.iter().enumerate() {
        let color = PALETTE[k % PALETTE.len()];
        let pts: Vec<String> = curve
            .iter()
            .enumerate()
            .map(|(i, &a)| format!("{:.1},{:.1}", x(i + 1), y(a)))
            .collect();
        writeln!(
            s,
            r#"<polyline fill="none" stroke="{color}" stroke-width="2" points="{}"/>"#,
            pts.join(" ")
        )
        .unwrap();
        let ly = top + 14.0 + 18.0 * k as f64;
        writeln!(s, r#"<line x1="{:.1}" y1="{ly:.1}" x2="{:.1}" y2="{ly:.1}" stroke="{color}" stroke-width="2"/>"#, w - right + 12.0, w - right + 32.0).unwrap();
        writeln!(
            s,
            r#"<text x="{:.1}" y="{:.1}">{}</text>"#,
            w - right + 38.0,
            ly + 4.0,
            xml_escape(label)
        )
        .unwrap();
    }
    s.push_str("</svg>\n");
    s
}

fn write(path: PathBuf, contents: &str) -> Result<(), MetricsError> {
    std::fs::write(&path, contents).map_err(|source| MetricsError::Io { path, source })
}

/// Writes `report.json`, `matrix.csv` and `curves.svg` into `dir`.
pub fn emit_report(report: &RunReport, dir: &Path) -> Result<(), MetricsError> {
    std::fs::create_dir_all(dir).map_err(|source| MetricsError::Io {
        path: dir.to_path_buf(),
        source,
    })?;
    let json = serde_json::to_string_pretty(report).expect("report serializes");
    write(dir.join("report.json"), &(json + "\n"))?;
    write(dir.join("matrix.csv"), &matrix_csv(&report.matrix))?;
    let svg = render_curves(&[(report.label(), report.average_accuracy.clone())]);
    write(dir.join("curves.svg"), &svg)
}

/// Reads `report.json` from a report directory (or the file itself).
pub fn load_report(path: &Path) -> Result<RunReport, MetricsError> {
    let file = if path.is_dir() {
        path.join("report.json")
    } else {
        path.to_path_buf()
    };
    let text = std::fs::read_to_string(&file).map_err(|source| MetricsError::Io {
        path: file.clone(),
        source,
    })?;
    let value: serde_json::Value =
        serde_json::from_str(&text).map_err(|e| MetricsError::Parse {
            path: file.clone(),
            detail: e.to_string(),
        })?;
    let found = value
        .get("schema_version")
        .and_then(|v| v.as_u64())
        .unwrap_or(0);
    if found != SCHEMA_VERSION {
        return Err(MetricsError::SchemaMismatch {
            path: file,
            found,
            expected: SCHEMA_VERSION,
        });
    }
    serde_json::from_value(value).map_err(|e| MetricsError::Parse {
        path: file,
        detail: e.to_string(),
    })
}

/// `strategy,seed,final_average_accuracy,backward_transfer`, one row per report.
pub fn summary_csv(reports: &[RunReport]) -> String {
    let mut out = String::from("strategy,seed,final_average_accuracy,backward_transfer\n");
    for r in reports {
        let bwt = r
            .backward_transfer
            .map(|b| format!("{b:.4}"))
            .unwrap_or_default();
        writeln!(
            out,
            "{},{},{:.4},{bwt}",
            r.label(),
            r.seed,
            r.final_average_accuracy()
        )
        .unwrap();
    }
    out
}

/// Loads report directories and writes `summary.csv` and a merged
/// `curves.svg` into `out`.
pub fn compare_reports(dirs: &[PathBuf], out: &Path) -> Result<Vec<RunReport>, MetricsError> {
    if dirs.is_empty() {
        return Err(MetricsError::NoReports);
    }
    let reports = dirs
        .iter()
        .map(|d| load_report(d))
        .collect::<Result<Vec<_>, _>>()?;
    std::fs::create_dir_all(out).map_err(|source| MetricsError::Io {
        path: out.to_path_buf(),
        source,
    })?;
    write(out.join("summary.csv"), &summary_csv(&reports))?;
    let series: Vec<(String, Vec<f64>)> = reports
        .iter()
        .map(|r| {
            (
                format!("{} seed {}", r.label(), r.seed),
                r.average_accuracy.clone(),
            )
        })
        .collect();
    write(out.join("curves.svg"), &render_curves(&series))?;
    Ok(reports)
}
