//! Per-day counters and their CSV / JSON output.

use std::fs;
use std::io;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::SimConfig;

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct DayMetrics {
    pub day: u32,
    pub day_index: u32,
    pub new_patients: usize,
    pub healthy: usize,
    pub suspected: usize,
    pub sick: usize,

    pub true_contacts: usize,
    pub detected: usize,
    pub true_positives: usize,
    pub false_positives: usize,
    pub missed: usize,
    pub baseline_detected: usize,
    pub baseline_true_positives: usize,
    pub baseline_false_positives: usize,

    pub coarse_hits: usize,
    pub wormhole_suspects: usize,
    pub replay_suspects: usize,
    pub fine_sessions: usize,
    pub fine_inside: usize,
    pub fine_outside: usize,
    pub session_errors: usize,
    pub warnings: usize,

    pub upload_records: usize,
    pub upload_bytes: usize,
    pub baseline_upload_records: usize,
    pub baseline_upload_bytes: usize,

    pub server_epoch: u64,
    pub server_records: usize,
    pub server_bytes: usize,
    pub baseline_server_records: usize,
    pub baseline_server_bytes: usize,
    pub device_log_bytes_mean: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Totals {
    pub patients: usize,
    pub true_contacts: usize,
    pub detected: usize,
    pub true_positives: usize,
    pub false_positives: usize,
    pub missed: usize,
    pub baseline_detected: usize,
    pub baseline_false_positives: usize,
    pub coarse_hits: usize,
    pub wormhole_suspects: usize,
    pub replay_suspects: usize,
    pub fine_sessions: usize,
    pub warnings: usize,
    pub upload_bytes: usize,
    pub baseline_upload_bytes: usize,
    /// Filtered upload volume over the upload-everything volume. Absent when
    /// nobody uploaded.
    pub upload_ratio: Option<f64>,
}

impl Totals {
    pub fn from_days(days: &[DayMetrics]) -> Self {
        let mut t = Totals::default();
        for d in days {
            t.patients += d.new_patients;
            t.true_contacts += d.true_contacts;
            t.detected += d.detected;
            t.true_positives += d.true_positives;
            t.false_positives += d.false_positives;
            t.missed += d.missed;
            t.baseline_detected += d.baseline_detected;
            t.baseline_false_positives += d.baseline_false_positives;
            t.coarse_hits += d.coarse_hits;
            t.wormhole_suspects += d.wormhole_suspects;
            t.replay_suspects += d.replay_suspects;
            t.fine_sessions += d.fine_sessions;
            t.warnings += d.warnings;
            t.upload_bytes += d.upload_bytes;
            t.baseline_upload_bytes += d.baseline_upload_bytes;
        }
        t.upload_ratio =
            (t.baseline_upload_bytes > 0).then(|| t.upload_bytes as f64 / t.baseline_upload_bytes as f64);
        t
    }
}

/// Deterministic outcome of a run: equal seeds give equal reports.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub config: SimConfig,
    pub days: Vec<DayMetrics>,
    pub totals: Totals,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    Filtered,
    UploadAll,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StrategyDay {
    pub day: u32,
    pub upload_records: usize,
    pub upload_bytes: usize,
    pub server_records: usize,
    pub detected: usize,
    pub true_positives: usize,
    pub false_positives: usize,
}

/// One strategy's slice of a [`MetricsReport`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StrategyReport {
    pub strategy: Strategy,
    pub days: Vec<StrategyDay>,
}

impl MetricsReport {
    pub fn strategy(&self, s: Strategy) -> StrategyReport {
        let days = self
            .days
            .iter()
            .map(|d| match s {
                Strategy::Filtered => StrategyDay {
                    day: d.day,
                    upload_records: d.upload_records,
                    upload_bytes: d.upload_bytes,
                    server_records: d.server_records,
                    detected: d.detected,
                    true_positives: d.true_positives,
                    false_positives: d.false_positives,
                },
                Strategy::UploadAll => StrategyDay {
                    day: d.day,
                    upload_records: d.baseline_upload_records,
                    upload_bytes: d.baseline_upload_bytes,
                    server_records: d.baseline_server_records,
                    detected: d.baseline_detected,
                    true_positives: d.baseline_true_positives,
                    false_positives: d.baseline_false_positives,
                },
            })
            .collect();
        StrategyReport { strategy: s, days }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct DayTiming {
    pub day: u32,
    pub users: usize,
    pub verify_us_mean: f64,
    pub baseline_sampled: usize,
    pub baseline_verify_us_mean: f64,
    pub upload_prep_us_mean: f64,
}

/// Wall-clock measurements. Kept apart from [`MetricsReport`] because they
/// vary between runs.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TimingReport {
    pub days: Vec<DayTiming>,
}

impl TimingReport {
    /// User-weighted mean verification time and sample-weighted mean
    /// baseline time, in microseconds.
    pub fn means(&self) -> (f64, f64) {
        let (mut a, mut n, mut b, mut m) = (0.0, 0usize, 0.0, 0usize);
        for d in &self.days {
            a += d.verify_us_mean * d.users as f64;
            n += d.users;
            b += d.baseline_verify_us_mean * d.baseline_sampled as f64;
            m += d.baseline_sampled;
        }
        (a / n.max(1) as f64, b / m.max(1) as f64)
    }
}

fn write_csv<const N: usize>(
    path: &Path,
    header: [&str; N],
    rows: impl Iterator<Item = [String; N]>,
) -> io::Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(header)?;
    for r in rows {
        w.write_record(&r)?;
    }
    w.flush()
}

/// Writes contacts.csv, uploads.csv, server.csv and summary.json, plus
/// timing.csv when `timing` is given.
pub fn emit_metrics(
    report: &MetricsReport,
    timing: Option<&TimingReport>,
    out: &Path,
) -> io::Result<()> {
    fs::create_dir_all(out)?;
    write_csv(
        &out.join("contacts.csv"),
        [
            "day",
            "new_patients",
            "healthy",
            "suspected",
            "sick",
            "true_contacts",
            "detected",
            "true_positives",
            "false_positives",
            "missed",
            "baseline_detected",
            "baseline_false_positives",
            "coarse_hits",
            "wormhole_suspects",
            "replay_suspects",
            "fine_sessions",
            "fine_inside",
            "warnings",
        ],
        report.days.iter().map(|d| {
            [
                d.day as usize,
                d.new_patients,
                d.healthy,
                d.suspected,
                d.sick,
                d.true_contacts,
                d.detected,
                d.true_positives,
                d.false_positives,
                d.missed,
                d.baseline_detected,
                d.baseline_false_positives,
                d.coarse_hits,
                d.wormhole_suspects,
                d.replay_suspects,
                d.fine_sessions,
                d.fine_inside,
                d.warnings,
            ]
            .map(|v| v.to_string())
        }),
    )?;
    write_csv(
        &out.join("uploads.csv"),
        [
            "day",
            "patients",
            "records",
            "bytes",
            "baseline_records",
            "baseline_bytes",
            "ratio",
        ],
        report.days.iter().map(|d| {
            let ratio = if d.baseline_upload_bytes > 0 {
                format!("{:.6}", d.upload_bytes as f64 / d.baseline_upload_bytes as f64)
            } else {
                String::new()
            };
            [
                d.day.to_string(),
                d.new_patients.to_string(),
                d.upload_records.to_string(),
                d.upload_bytes.to_string(),
                d.baseline_upload_records.to_string(),
                d.baseline_upload_bytes.to_string(),
                ratio,
            ]
        }),
    )?;
    write_csv(
        &out.join("server.csv"),
        [
            "day",
            "epoch",
            "records",
            "bytes",
            "baseline_records",
            "baseline_bytes",
            "device_log_bytes_mean",
        ],
        report.days.iter().map(|d| {
            [
                d.day.to_string(),
                d.server_epoch.to_string(),
                d.server_records.to_string(),
                d.server_bytes.to_string(),
                d.baseline_server_records.to_string(),
                d.baseline_server_bytes.to_string(),
                format!("{:.1}", d.device_log_bytes_mean),
            ]
        }),
    )?;
    if let Some(t) = timing {
        write_csv(
            &out.join("timing.csv"),
            [
                "day",
                "users",
                "verify_us_mean",
                "baseline_sampled",
                "baseline_verify_us_mean",
                "upload_prep_us_mean",
            ],
            t.days.iter().map(|d| {
                [
                    d.day.to_string(),
                    d.users.to_string(),
                    format!("{:.1}", d.verify_us_mean),
                    d.baseline_sampled.to_string(),
                    format!("{:.1}", d.baseline_verify_us_mean),
                    format!("{:.1}", d.upload_prep_us_mean),
                ]
            }),
        )?;
    }
    let json = serde_json::to_string_pretty(report).map_err(io::Error::other)?;
    fs::write(out.join("summary.json"), json + "\n")
}
