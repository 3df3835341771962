//! Phase-breakdown benchmark: times the eight migration sub-steps over
//! repeated honest in-memory runs and reports min/max/mean/std per row.
//! Absolute numbers depend on this machine and the mock backend; the
//! report's value is the structure and relative scaling across scenarios.

use std::collections::HashMap;

use super::adversary::Adversary;
use super::memory::run_migration;
use super::TestBed;
use crate::node::NodeError;

/// Sub-step rows in report order.
pub const SUBSTEPS: [&str; 8] = [
    "Verify TMN",
    "Extract App. State",
    "Mask State",
    "Verify SMN",
    "UnMask State",
    "Dump App State",
    "SC-CFI",
    "ELF Conf",
];

#[derive(Debug, Clone)]
pub struct BenchRow {
    pub name: &'static str,
    pub min_ms: f64,
    pub max_ms: f64,
    pub mean_ms: f64,
    pub std_ms: f64,
}

#[derive(Debug, Clone)]
pub struct BenchReport {
    pub scenario: u8,
    pub iterations: u32,
    pub rows: Vec<BenchRow>,
}

impl BenchReport {
    pub fn row(&self, name: &str) -> Option<&BenchRow> {
        self.rows.iter().find(|r| r.name == name)
    }

    pub fn render(&self) -> String {
        let mut out = format!(
            "migration phase breakdown — scenario {}, {} iterations\n",
            self.scenario, self.iterations
        );
        out.push_str(&format!(
            "{:<22} {:>10} {:>10} {:>10} {:>10}\n",
            "Subcontrol", "Min(ms)", "Max(ms)", "Mean(ms)", "std(ms)"
        ));
        for row in &self.rows {
            out.push_str(&format!(
                "{:<22} {:>10.3} {:>10.3} {:>10.3} {:>10.3}\n",
                row.name, row.min_ms, row.max_ms, row.mean_ms, row.std_ms
            ));
        }
        out
    }

    /// One record per line, tab-separated.
    pub fn to_tsv(&self) -> String {
        let mut out = String::new();
        for row in &self.rows {
            out.push_str(&format!(
                "bench\tscenario\t{}\tsubstep\t{}\tmin_ms\t{:.6}\tmax_ms\t{:.6}\tmean_ms\t{:.6}\tstd_ms\t{:.6}\n",
                self.scenario, row.name, row.min_ms, row.max_ms, row.mean_ms, row.std_ms
            ));
        }
        out
    }
}

/// Runs `iterations` honest migrations of the scenario fixture, timing
/// every sub-step on whichever node executes it.
pub fn run_benchmark(scenario: u8, iterations: u32) -> Result<BenchReport, NodeError> {
    assert!((1..=3).contains(&scenario), "scenario must be 1..=3");
    let mut samples: HashMap<&'static str, Vec<f64>> =
        SUBSTEPS.iter().map(|s| (*s, Vec::new())).collect();

    for _ in 0..iterations {
        let bed = TestBed::new(scenario)?;
        bed.source.take_timings();
        bed.target.take_timings();
        let mut adversary = Adversary::passive();
        let result = run_migration(&bed.target, &bed.source, &bed.measurement, &mut adversary)?;
        if !result.confirmed() {
            return Err(NodeError::Io(format!(
                "benchmark run aborted: {:?}",
                result.source_outcome
            )));
        }
        for (label, elapsed) in bed
            .source
            .take_timings()
            .into_iter()
            .chain(bed.target.take_timings())
        {
            if let Some(bucket) = samples.get_mut(label) {
                bucket.push(elapsed.as_secs_f64() * 1e3);
            }
        }
    }

    let mut rows = Vec::with_capacity(SUBSTEPS.len());
    for name in SUBSTEPS {
        let bucket = &samples[name];
        assert_eq!(
            bucket.len(),
            iterations as usize,
            "substep {name} must be measured exactly once per run"
        );
        let min = bucket.iter().copied().fold(f64::INFINITY, f64::min);
        let max = bucket.iter().copied().fold(0.0f64, f64::max);
        let mean = bucket.iter().sum::<f64>() / bucket.len() as f64;
        let var = bucket.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / bucket.len() as f64;
        rows.push(BenchRow {
            name,
            min_ms: min,
            max_ms: max,
            mean_ms: mean,
            std_ms: var.sqrt(),
        });
    }
    Ok(BenchReport {
        scenario,
        iterations,
        rows,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn report_covers_every_substep() {
        let report = run_benchmark(1, 3).unwrap();
        assert_eq!(report.rows.len(), 8);
        for name in SUBSTEPS {
            let row = report.row(name).unwrap();
            assert!(row.min_ms <= row.mean_ms && row.mean_ms <= row.max_ms + 1e-9);
        }
        assert!(report.render().contains("SC-CFI"));
        assert_eq!(report.to_tsv().lines().count(), 8);
    }
}
