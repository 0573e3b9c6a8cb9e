//! Wall-time benchmarking of a scenario's controller.

use super::runner::{run_closed_loop, SimLog};
use super::scenario::Scenario;
use super::HarnessError;

#[derive(Clone, Debug)]
pub struct BenchReport {
    pub repetitions: usize,
    pub steps_per_run: usize,
    pub ts_s: f64,
    pub mean_s: f64,
    pub max_s: f64,
    pub p50_s: f64,
    pub p95_s: f64,
    pub p99_s: f64,
    pub within_budget: bool,
}

impl std::fmt::Display for BenchReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        writeln!(
            f,
            "per-step controller wall time over {} run(s), {} steps each:",
            self.repetitions, self.steps_per_run
        )?;
        writeln!(f, "  mean {:.6} s", self.mean_s)?;
        writeln!(f, "  p50  {:.6} s", self.p50_s)?;
        writeln!(f, "  p95  {:.6} s", self.p95_s)?;
        writeln!(f, "  p99  {:.6} s", self.p99_s)?;
        writeln!(f, "  max  {:.6} s", self.max_s)?;
        write!(
            f,
            "  sampling budget {} s: {}",
            self.ts_s,
            if self.within_budget { "met at every step" } else { "EXCEEDED" }
        )
    }
}

/// Run the scenario `repetitions` times and aggregate per-step solve times.
pub fn benchmark(scenario: &Scenario, repetitions: usize) -> Result<(BenchReport, SimLog), HarnessError> {
    assert!(repetitions >= 1);
    let mut times = Vec::new();
    let mut last: Option<SimLog> = None;
    for _ in 0..repetitions {
        let log = run_closed_loop(scenario)?;
        if let Some(abort) = &log.abort {
            return Err(HarnessError::Scenario(format!("benchmark run aborted: {abort}")));
        }
        times.extend(log.rows.iter().map(|r| r.solve_time_s));
        last = Some(log);
    }
    let log = last.expect("at least one repetition");
    let mut sorted = times.clone();
    sorted.sort_by(f64::total_cmp);
    let pct = |p: f64| sorted[((sorted.len() as f64 - 1.0) * p).round() as usize];
    let mean = times.iter().sum::<f64>() / times.len() as f64;
    let max = *sorted.last().unwrap();
    let report = BenchReport {
        repetitions,
        steps_per_run: log.rows.len(),
        ts_s: log.ts_s,
        mean_s: mean,
        max_s: max,
        p50_s: pct(0.5),
        p95_s: pct(0.95),
        p99_s: pct(0.99),
        within_budget: max < log.ts_s,
    };
    Ok((report, log))
}
