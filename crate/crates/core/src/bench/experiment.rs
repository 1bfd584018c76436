use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt::Write as _;
use std::io;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use super::{
    by_category, end_to_end, table2, write_fig8a, write_fig8b, write_table2, LatencyStats, MsgKey, PointRow,
    TapRecord, TapRecorder, REFERENCE_DEEPDISH_MS, REFERENCE_MEAN_MS, REFERENCE_TABLE2,
};
use crate::simfleet::{run_fleet, standard_fleet, DeviceProfile, FleetReport};
use crate::stack::{ConservationAudit, Stack, StackConfig, StackError};

/// Incomplete records above this fraction earn a warning in the report.
pub const INCOMPLETE_WARN: f64 = 0.01;

#[derive(Debug, Clone)]
pub struct ExperimentConfig {
    pub n: usize,
    pub duration_s: f64,
    pub seed: u64,
    pub stack: StackConfig,
    /// Replaces the standard mixed fleet of `n` devices.
    pub profiles: Option<Vec<DeviceProfile>>,
    pub out_dir: Option<PathBuf>,
}

impl ExperimentConfig {
    pub fn new(n: usize, duration_s: f64) -> Self {
        Self {
            n,
            duration_s,
            seed: 1,
            stack: StackConfig::default(),
            profiles: None,
            out_dir: None,
        }
    }

    pub fn fleet(&self) -> Vec<DeviceProfile> {
        self.profiles.clone().unwrap_or_else(|| standard_fleet(self.n))
    }
}

#[derive(Debug)]
pub struct ExperimentResult {
    pub n: usize,
    /// Records of messages in the emission log.
    pub records: Vec<TapRecord>,
    pub rows: Vec<PointRow>,
    pub categories: BTreeMap<String, LatencyStats>,
    pub end_to_end: Option<LatencyStats>,
    pub duplicates: u64,
    /// Logged emissions that left no tap at all.
    pub unseen: usize,
    pub fleet: FleetReport,
    pub audit: ConservationAudit,
}

impl ExperimentResult {
    pub fn complete(&self) -> usize {
        self.records.iter().filter(|r| r.is_complete()).count()
    }

    pub fn incomplete_fraction(&self) -> f64 {
        let total = self.records.len() + self.unseen;
        if total == 0 {
            return 0.0;
        }
        (total - self.complete()) as f64 / total as f64
    }

    pub fn ordered_fraction(&self) -> f64 {
        let complete = self.complete();
        if complete == 0 {
            return 1.0;
        }
        self.records.iter().filter(|r| r.is_complete() && r.is_ordered()).count() as f64 / complete as f64
    }

    pub fn warnings(&self) -> Vec<String> {
        let mut out = Vec::new();
        let frac = self.incomplete_fraction();
        if frac > INCOMPLETE_WARN {
            out.push(format!(
                "warning: {:.2}% of messages have incomplete tap records",
                frac * 100.0
            ));
        }
        if self.fleet.total_dropped() > 0 || self.fleet.undelivered > 0 {
            out.push(format!(
                "warning: {} readings dropped from device buffers, {} undelivered",
                self.fleet.total_dropped(),
                self.fleet.undelivered
            ));
        }
        if !self.audit.holds() {
            out.push("warning: conservation audit failed".into());
        }
        out
    }

    /// Plain-text summary with the original deployment's numbers alongside.
    pub fn report(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "sensors: {}", self.n);
        let _ = writeln!(
            s,
            "emitted: {}  complete records: {}  duplicates: {}",
            self.fleet.log.len(),
            self.complete(),
            self.duplicates
        );
        let _ = writeln!(s, "tap ordering holds for {:.2}% of complete records", self.ordered_fraction() * 100.0);
        let _ = writeln!(s);
        let _ = writeln!(
            s,
            "{:<10} {:>7} {:>10} {:>10} {:>10} {:>10} {:>12} {:>12}",
            "point", "count", "mean_ms", "stddev_ms", "p95_ms", "p99_ms", "ref_mean", "ref_stddev"
        );
        for row in &self.rows {
            let (_, ref_mean, ref_sd) = REFERENCE_TABLE2
                .iter()
                .find(|(p, _, _)| *p == row.point)
                .copied()
                .expect("every tap point has a reference row");
            let st = &row.stats;
            let _ = writeln!(
                s,
                "{:<10} {:>7} {:>10.3} {:>10.3} {:>10.3} {:>10.3} {:>12.2} {:>12.2}",
                row.point.label(),
                st.count,
                st.mean_ms,
                st.stddev_ms,
                st.p95_ms,
                st.p99_ms,
                ref_mean,
                ref_sd
            );
        }
        let _ = writeln!(s);
        for (category, st) in &self.categories {
            let _ = writeln!(s, "{category:<10} mean {:>9.3} ms  stddev {:>9.3} ms", st.mean_ms, st.stddev_ms);
        }
        let _ = writeln!(
            s,
            "reference deployment: about {REFERENCE_MEAN_MS} ms end to end, {REFERENCE_DEEPDISH_MS} ms for deepdish, radio hops included"
        );
        for w in self.warnings() {
            let _ = writeln!(s, "{w}");
        }
        s
    }

    pub fn write_outputs(&self, dir: &Path) -> io::Result<()> {
        std::fs::create_dir_all(dir)?;
        write_table2(&dir.join("table2.csv"), &self.rows)?;
        write_fig8b(&dir.join("fig8b.csv"), &self.categories)?;
        write_fig8a(&dir.join("fig8a.csv"), &[(self.n, self.end_to_end)])?;
        std::fs::write(dir.join("report.txt"), self.report())
    }
}

/// Summarizes the taps of one run, keeping only messages the fleet logged.
pub fn summarize(
    n: usize,
    profiles: &[DeviceProfile],
    recorder: &TapRecorder,
    fleet: FleetReport,
    audit: ConservationAudit,
) -> ExperimentResult {
    let logged: HashSet<MsgKey> = fleet.log.iter().map(|e| MsgKey::new(e.device_id.clone(), e.sim_t0)).collect();
    let records: Vec<TapRecord> = recorder.records().into_iter().filter(|r| logged.contains(&r.key)).collect();
    let unseen = logged.len() - records.len();
    let category: HashMap<&str, &str> = profiles
        .iter()
        .map(|p| (p.device_id.as_str(), p.family.category()))
        .collect();
    ExperimentResult {
        n,
        rows: table2(&records),
        categories: by_category(&records, |id| category.get(id).map(|c| c.to_string())),
        end_to_end: end_to_end(&records).ok(),
        duplicates: recorder.duplicates(),
        unseen,
        records,
        fleet,
        audit,
    }
}

/// Runs a fresh stack with a tapped fleet of `config.n` devices in real time.
pub async fn run_experiment(config: &ExperimentConfig) -> Result<ExperimentResult, StackError> {
    let profiles = config.fleet();
    let recorder = Arc::new(TapRecorder::new());
    let stack = Stack::start(&config.stack, Some(Arc::clone(&recorder))).await?;
    stack.ready(Duration::from_secs(10)).await?;
    let fleet = if profiles.is_empty() {
        FleetReport::default()
    } else {
        let fleet_config = stack.fleet_config().seed(config.seed).speed(1.0);
        run_fleet(&profiles, None, config.duration_s, &fleet_config)
            .await
            .map_err(|e| StackError::Config(e.to_string()))?
    };
    if !stack.drain(Duration::from_millis(500), Duration::from_secs(15)).await {
        tracing::warn!("stack did not drain before the deadline");
    }
    let audit = stack.audit();
    stack.stop().await;
    let result = summarize(profiles.len(), &profiles, &recorder, fleet, audit);
    for w in result.warnings() {
        tracing::warn!("{w}");
    }
    if let Some(dir) = &config.out_dir {
        result.write_outputs(dir)?;
    }
    Ok(result)
}

/// One experiment per fleet size; per-size outputs go to `n<N>/` and the
/// sweep summary to `fig8a.csv` under the output directory.
pub async fn run_sweep(ns: &[usize], base: &ExperimentConfig) -> Result<Vec<ExperimentResult>, StackError> {
    let mut results = Vec::new();
    for &n in ns {
        let mut config = base.clone();
        config.n = n;
        config.profiles = None;
        config.out_dir = base.out_dir.as_ref().map(|d| d.join(format!("n{n}")));
        results.push(run_experiment(&config).await?);
    }
    if let Some(dir) = &base.out_dir {
        std::fs::create_dir_all(dir)?;
        let sweep: Vec<_> = results.iter().map(|r| (r.n, r.end_to_end)).collect();
        write_fig8a(&dir.join("fig8a.csv"), &sweep)?;
    }
    Ok(results)
}
