//! Runs a configured sweep and writes per-seed timelines, the mean timeline
//! and a summary table.
//!
//! Layout under `<root>/<name>/`:
//! `config.txt`, `summary.csv`, `summary.txt` and one `ttl<k>/` directory per
//! sweep value holding `seed<s>.csv` and `mean.csv`. A failed run leaves an
//! `INCOMPLETE` file with the error next to whatever was written.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use selfheal::engine::{run_batch, BatchOutput, MetricsTimeline};

use crate::config::ScenarioConfig;

pub const INCOMPLETE_MARKER: &str = "INCOMPLETE";

/// Aggregates over the seeds of one sweep value.
#[derive(Debug, Clone, PartialEq)]
pub struct SummaryRow {
    pub ttl: u32,
    pub runs: usize,
    pub reached_95: usize,
    pub mean_time_95: Option<f64>,
    pub reached_100: usize,
    pub mean_time_100: Option<f64>,
    pub reached_updated: usize,
    pub mean_time_updated: Option<f64>,
    pub mean_peak_blank: f64,
    pub mean_peak_corrupt: f64,
}

pub const SUMMARY_HEADER: &str = "ttl,runs,reached_95,mean_time_95,reached_100,mean_time_100,reached_updated,mean_time_updated,mean_peak_blank,mean_peak_corrupt";

fn mean_of(values: &[Option<f64>]) -> (usize, Option<f64>) {
    let hit: Vec<f64> = values.iter().flatten().copied().collect();
    let mean = (!hit.is_empty()).then(|| hit.iter().sum::<f64>() / hit.len() as f64);
    (hit.len(), mean)
}

impl SummaryRow {
    pub fn from_batch(ttl: u32, batch: &BatchOutput) -> Self {
        let tls: Vec<&MetricsTimeline> = batch.runs.iter().map(|r| &r.timeline).collect();
        let pick = |f: fn(&MetricsTimeline) -> Option<f64>| tls.iter().map(|t| f(t)).collect::<Vec<_>>();
        let (reached_95, mean_time_95) = mean_of(&pick(|t| t.convergence.correct_95));
        let (reached_100, mean_time_100) = mean_of(&pick(|t| t.convergence.correct_100));
        let (reached_updated, mean_time_updated) = mean_of(&pick(|t| t.convergence.updated_100));
        let n = tls.len() as f64;
        SummaryRow {
            ttl,
            runs: tls.len(),
            reached_95,
            mean_time_95,
            reached_100,
            mean_time_100,
            reached_updated,
            mean_time_updated,
            mean_peak_blank: tls.iter().map(|t| t.peak_blank()).sum::<f64>() / n,
            mean_peak_corrupt: tls.iter().map(|t| t.peak_corrupt()).sum::<f64>() / n,
        }
    }

    pub fn csv_line(&self) -> String {
        let o = |v: Option<f64>| v.map_or(String::new(), |x| format!("{x:.1}"));
        format!(
            "{},{},{},{},{},{},{},{},{:.6},{:.6}",
            self.ttl,
            self.runs,
            self.reached_95,
            o(self.mean_time_95),
            self.reached_100,
            o(self.mean_time_100),
            self.reached_updated,
            o(self.mean_time_updated),
            self.mean_peak_blank,
            self.mean_peak_corrupt
        )
    }
}

/// Aligned plain-text rendering of the summary rows.
pub fn summary_text(name: &str, rows: &[SummaryRow]) -> String {
    let o = |v: Option<f64>, k: usize, n: usize| match v {
        Some(x) if k == n => format!("{x:.1}"),
        Some(x) => format!("{x:.1} ({k}/{n})"),
        None => "-".to_string(),
    };
    let mut s = format!("{name}\n");
    writeln!(s, "{:>4} {:>16} {:>16} {:>16} {:>10} {:>12}", "ttl", "t95 [s]", "t100 [s]", "updated [s]", "peak blank", "peak corrupt")
        .unwrap();
    for r in rows {
        writeln!(
            s,
            "{:>4} {:>16} {:>16} {:>16} {:>10.4} {:>12.4}",
            r.ttl,
            o(r.mean_time_95, r.reached_95, r.runs),
            o(r.mean_time_100, r.reached_100, r.runs),
            o(r.mean_time_updated, r.reached_updated, r.runs),
            r.mean_peak_blank,
            r.mean_peak_corrupt
        )
        .unwrap();
    }
    s
}

#[derive(Debug, Clone)]
pub struct ExperimentReport {
    pub dir: PathBuf,
    pub rows: Vec<SummaryRow>,
}

fn write(path: &Path, body: &str) -> Result<()> {
    fs::write(path, body).with_context(|| format!("writing {}", path.display()))
}

/// Runs every sweep value over all seeds and writes the outputs below `root`.
pub fn run_experiment(cfg: &ScenarioConfig, root: &Path) -> Result<ExperimentReport> {
    let dir = root.join(&cfg.name);
    fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    let marker = dir.join(INCOMPLETE_MARKER);
    let result = run_into(cfg, &dir);
    match &result {
        Ok(_) => {
            if marker.exists() {
                fs::remove_file(&marker).with_context(|| format!("removing {}", marker.display()))?;
            }
        }
        Err(e) => write(&marker, &format!("{e:#}\n"))?,
    }
    result
}

fn run_into(cfg: &ScenarioConfig, dir: &Path) -> Result<ExperimentReport> {
    write(&dir.join("config.txt"), &cfg.to_text())?;
    let scenarios = cfg.scenarios()?;
    let mut rows = Vec::new();
    for (ttl, sc) in scenarios {
        let batch = run_batch(&sc, &cfg.seeds).with_context(|| format!("running ttl={ttl}"))?;
        let sub = dir.join(format!("ttl{ttl}"));
        fs::create_dir_all(&sub).with_context(|| format!("creating {}", sub.display()))?;
        for r in &batch.runs {
            write(&sub.join(format!("seed{}.csv", r.seed)), &r.timeline.to_csv_string())?;
        }
        write(&sub.join("mean.csv"), &batch.mean.to_csv_string())?;
        rows.push(SummaryRow::from_batch(ttl, &batch));
    }
    let mut csv = format!("{SUMMARY_HEADER}\n");
    for r in &rows {
        csv.push_str(&r.csv_line());
        csv.push('\n');
    }
    write(&dir.join("summary.csv"), &csv)?;
    write(&dir.join("summary.txt"), &summary_text(&cfg.name, &rows))?;
    Ok(ExperimentReport { dir: dir.to_path_buf(), rows })
}
