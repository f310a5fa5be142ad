//! Aggregates completed run directories into human-readable comparison
//! tables. Read-only over its inputs: malformed runs are skipped with a
//! counted warning.

use std::collections::BTreeMap;
use std::path::Path;

use crate::error::{Error, Result};
use crate::eval::MetricsReport;
use crate::harness::config::{config_hash, ExperimentConfig};

#[derive(Debug, Clone)]
struct RunEntry {
    run_id: String,
    mode: String,
    seed: u64,
    report: MetricsReport,
}

#[derive(Debug, Clone)]
pub struct ReportSummary {
    pub runs: usize,
    pub groups: usize,
    pub warnings: usize,
    pub markdown_path: std::path::PathBuf,
    pub csv_path: std::path::PathBuf,
}

/// Scans `dir` for run subdirectories (those holding `config.json` and
/// `metrics.json`), groups them by config hash, and writes `report.md` plus
/// a long-format `report.csv` into `dir`.
pub fn write_report(dir: &Path) -> Result<ReportSummary> {
    if !dir.is_dir() {
        return Err(Error::Usage(format!("{} is not a directory", dir.display())));
    }
    let mut groups: BTreeMap<String, Vec<RunEntry>> = BTreeMap::new();
    let mut warnings = 0usize;
    let mut entries: Vec<_> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok())
        .map(|e| e.path())
        .filter(|p| p.is_dir())
        .collect();
    entries.sort();
    for child in entries {
        let config_path = child.join("config.json");
        let metrics_path = child.join("metrics.json");
        if !config_path.exists() || !metrics_path.exists() {
            continue;
        }
        let parsed = (|| -> Result<RunEntry> {
            let cfg: ExperimentConfig =
                serde_json::from_str(&std::fs::read_to_string(&config_path)?)?;
            let report: MetricsReport =
                serde_json::from_str(&std::fs::read_to_string(&metrics_path)?)?;
            let mode = serde_json::to_value(cfg.distill.mode)?
                .as_str()
                .expect("mode serializes to a string")
                .to_string();
            Ok(RunEntry {
                run_id: child
                    .file_name()
                    .map(|s| s.to_string_lossy().into_owned())
                    .unwrap_or_default(),
                mode,
                seed: cfg.seed,
                report,
            })
            .and_then(|entry| config_hash(&cfg).map(|h| (h, entry)))
            .map(|(h, entry)| {
                groups.entry(h).or_default().push(entry.clone());
                entry
            })
        })();
        if parsed.is_err() {
            warnings += 1;
        }
    }

    let runs: usize = groups.values().map(|v| v.len()).sum();
    if runs == 0 {
        return Err(Error::Usage(format!(
            "no runs found under {}",
            dir.display()
        )));
    }

    let mut md = String::from("# Run report\n");
    let mut csv = String::from("run_id,mode,metric,value,seed\n");
    for (hash, entries) in &groups {
        md.push_str(&format!(
            "\n## Config {hash} ({} run{})\n\n",
            entries.len(),
            if entries.len() == 1 { "" } else { "s" }
        ));
        md.push_str("| run | mode | seed | eer | min_dcf | accuracy |\n");
        md.push_str("|---|---|---|---|---|---|\n");
        let best_eer = entries
            .iter()
            .map(|e| e.report.eer)
            .fold(f64::INFINITY, f64::min);
        let best_dcf = entries
            .iter()
            .map(|e| e.report.min_dcf)
            .fold(f64::INFINITY, f64::min);
        let best_acc = entries
            .iter()
            .map(|e| e.report.accuracy)
            .fold(f64::NEG_INFINITY, f64::max);
        for e in entries {
            let flag = |v: f64, best: f64| if v == best { " *" } else { "" };
            md.push_str(&format!(
                "| {} | {} | {} | {:.4}{} | {:.4}{} | {:.4}{} |\n",
                e.run_id,
                e.mode,
                e.seed,
                e.report.eer,
                flag(e.report.eer, best_eer),
                e.report.min_dcf,
                flag(e.report.min_dcf, best_dcf),
                e.report.accuracy,
                flag(e.report.accuracy, best_acc),
            ));
            for row in e.report.csv_rows(&e.run_id, &e.mode) {
                csv.push_str(&row);
                csv.push('\n');
            }
        }
        md.push_str("\n`*` best in group (lower eer/min_dcf, higher accuracy).\n");
    }
    if warnings > 0 {
        md.push_str(&format!("\n_{warnings} malformed run(s) skipped._\n"));
    }

    let markdown_path = dir.join("report.md");
    let csv_path = dir.join("report.csv");
    std::fs::write(&markdown_path, md)?;
    std::fs::write(&csv_path, csv)?;
    Ok(ReportSummary {
        runs,
        groups: groups.len(),
        warnings,
        markdown_path,
        csv_path,
    })
}
