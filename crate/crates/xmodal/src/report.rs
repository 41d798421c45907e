//! Result emission: RFC-4180 CSV tables and the JSON run summary.
//!
//! Metric and trace tables contain no timestamps or wall-clock values, so a
//! rerun with the same config and seed reproduces them byte for byte. Phase
//! timings live in the JSON summary (and the ablation grid, where timing is
//! the point).

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use crate::binio::create_file;
use crate::error::Result;
use crate::evo::EvolveTrace;

/// One metrics table row: retrieval quality of one modality in one phase.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct MetricRow {
    pub run_id: String,
    pub phase: String,
    pub modality: u16,
    pub rank1: f64,
    pub rank5: f64,
    pub rank10: f64,
    pub map: f64,
    pub success_rate: f64,
    /// Complementarity of the sparse layer over the dense one; only present
    /// on `uap+eta` rows with a nonzero dense baseline.
    pub alpha: Option<f64>,
    /// Weighted success diagnostic for the row's phase (uniform weights).
    pub fitness: f64,
}

/// One ablation grid cell.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct AblateRow {
    pub seed: u64,
    pub k: usize,
    pub n_models: usize,
    pub p_c: f64,
    pub p_m: f64,
    pub pop_size: usize,
    pub generations: usize,
    /// Mean per-model rank-1 mismatch rate of the returned individual on the
    /// cell's auxiliary models.
    pub success_rate: f64,
    pub wall_clock_s: f64,
}

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct PhaseTiming {
    pub phase: String,
    pub seconds: f64,
}

/// The JSON run summary: config echo, metric tables, archive state, phase
/// wall-clock, and artifact paths.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct RunReport {
    pub run_id: String,
    pub mode: String,
    pub config: BTreeMap<String, String>,
    pub phase_timings: Vec<PhaseTiming>,
    pub metrics: Vec<MetricRow>,
    pub archive_baselines: Vec<f64>,
    pub archive_best: Vec<Option<f64>>,
    pub artifacts: BTreeMap<String, String>,
}

fn csv_field(s: &str) -> String {
    if s.contains(',') || s.contains('"') || s.contains('\n') {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

fn float_field(v: f64) -> String {
    // Shortest round-trip representation keeps tables lossless and stable.
    format!("{v}")
}

pub fn metrics_csv(rows: &[MetricRow]) -> String {
    let mut out =
        String::from("run_id,phase,modality,rank1,rank5,rank10,map,success_rate,alpha,fitness\r\n");
    for r in rows {
        let alpha = r.alpha.map(float_field).unwrap_or_default();
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{},{},{}\r\n",
            csv_field(&r.run_id),
            csv_field(&r.phase),
            r.modality,
            float_field(r.rank1),
            float_field(r.rank5),
            float_field(r.rank10),
            float_field(r.map),
            float_field(r.success_rate),
            alpha,
            float_field(r.fitness),
        ));
    }
    out
}

pub fn write_metrics_csv(rows: &[MetricRow], path: &Path) -> Result<()> {
    let mut f = create_file(path)?;
    f.write_all(metrics_csv(rows).as_bytes())?;
    f.flush()?;
    Ok(())
}

/// Archive trace: one row per generation with the incumbent's objective and
/// the archived per-model alpha values.
pub fn trace_csv(trace: &EvolveTrace) -> String {
    let n_models = trace.baseline_rates.len();
    let mut header = String::from("generation,best_success_rate,best_d_tilde,best_eta_l2");
    for m in 0..n_models {
        header.push_str(&format!(",alpha_m{m}"));
    }
    let mut out = header;
    out.push_str("\r\n");
    for g in &trace.generations {
        let mut line = format!(
            "{},{},{},{}",
            g.generation,
            float_field(g.best_success),
            float_field(g.best_d_tilde),
            float_field(g.best_eta_l2),
        );
        for a in &g.archive_best {
            line.push(',');
            if let Some(v) = a {
                line.push_str(&float_field(*v));
            }
        }
        out.push_str(&line);
        out.push_str("\r\n");
    }
    out
}

pub fn write_trace_csv(trace: &EvolveTrace, path: &Path) -> Result<()> {
    let mut f = create_file(path)?;
    f.write_all(trace_csv(trace).as_bytes())?;
    f.flush()?;
    Ok(())
}

pub fn ablate_csv(rows: &[AblateRow]) -> String {
    let mut out =
        String::from("seed,k,n_models,p_c,p_m,pop_size,generations,success_rate,wall_clock_s\r\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{},{}\r\n",
            r.seed,
            r.k,
            r.n_models,
            float_field(r.p_c),
            float_field(r.p_m),
            r.pop_size,
            r.generations,
            float_field(r.success_rate),
            float_field(r.wall_clock_s),
        ));
    }
    out
}

pub fn write_ablate_csv(rows: &[AblateRow], path: &Path) -> Result<()> {
    let mut f = create_file(path)?;
    f.write_all(ablate_csv(rows).as_bytes())?;
    f.flush()?;
    Ok(())
}

pub fn write_summary_json(report: &RunReport, path: &Path) -> Result<()> {
    let mut f = create_file(path)?;
    let json = serde_json::to_string_pretty(report).expect("report serialization cannot fail");
    f.write_all(json.as_bytes())?;
    f.write_all(b"\n")?;
    f.flush()?;
    Ok(())
}

/// Human-readable rendering of a run summary for the `report` subcommand.
pub fn render_summary(report: &RunReport) -> String {
    let mut out = String::new();
    out.push_str(&format!("run     : {}\n", report.run_id));
    out.push_str(&format!("mode    : {}\n", report.mode));
    for t in &report.phase_timings {
        out.push_str(&format!("phase   : {:<10} {:.3}s\n", t.phase, t.seconds));
    }
    out.push_str("\nphase      modality  rank1    rank5    rank10   mAP      success  alpha\n");
    for r in &report.metrics {
        let alpha = r
            .alpha
            .map(|a| format!("{a:+.3}"))
            .unwrap_or_else(|| "-".into());
        out.push_str(&format!(
            "{:<10} {:<9} {:<8.4} {:<8.4} {:<8.4} {:<8.4} {:<8.4} {}\n",
            r.phase, r.modality, r.rank1, r.rank5, r.rank10, r.map, r.success_rate, alpha
        ));
    }
    if !report.archive_baselines.is_empty() {
        out.push_str("\nper-model archive (baseline rate -> best alpha):\n");
        for (i, (b, a)) in report
            .archive_baselines
            .iter()
            .zip(report.archive_best.iter())
            .enumerate()
        {
            let alpha = a
                .map(|v| format!("{v:+.4}"))
                .unwrap_or_else(|| "baseline-zero".into());
            out.push_str(&format!("  model {i}: {b:.4} -> {alpha}\n"));
        }
    }
    out
}
