//! Verification cost against the upload-everything comparator.

use serde::{Deserialize, Serialize};

use super::{simulate, SimConfig, SimError};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub users: usize,
    pub places: usize,
    pub days: u32,
    pub fine_sessions: usize,
    /// Mean per-user time to parse the day's download, screen it and run
    /// every fine session (both ends), in microseconds.
    pub verify_us_mean: f64,
    /// Mean per-user time to parse the upload-everything download and scan
    /// it, in microseconds.
    pub baseline_verify_us_mean: f64,
    pub ratio: f64,
}

pub fn bench(users: usize, seed: u64) -> Result<BenchReport, SimError> {
    let cfg = SimConfig {
        users,
        places: (users / 20).max(50),
        days: 3,
        seed,
        timing_sample: 32,
        ..SimConfig::default()
    };
    let out = simulate(&cfg)?;
    let (ours, theirs) = out.timing.means();
    Ok(BenchReport {
        users,
        places: cfg.places,
        days: cfg.days,
        fine_sessions: out.report.totals.fine_sessions,
        verify_us_mean: ours,
        baseline_verify_us_mean: theirs,
        ratio: if theirs > 0.0 { ours / theirs } else { f64::NAN },
    })
}
