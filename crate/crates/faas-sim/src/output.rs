//! Run artifacts: `summary.json`, `requests.csv`, `vm_usage.csv`, the
//! optional `events.log` dispatch log, and the side-by-side comparison table.

use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::Path;

use crate::metrics::{request_records, RunSummary};
use crate::simulation::RunOutput;

pub fn write_run_outputs(dir: &Path, out: &RunOutput) -> std::io::Result<()> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join("summary.json"), summary_json(&out.summary)?)?;

    let mut requests = csv::Writer::from_path(dir.join("requests.csv"))?;
    for record in request_records(&out.requests, &out.functions) {
        requests.serialize(record)?;
    }
    requests.flush()?;

    let mut usage = std::io::BufWriter::new(fs::File::create(dir.join("vm_usage.csv"))?);
    writeln!(usage, "time,vm_id,allocated_frac,busy_frac")?;
    let mut points: Vec<(f64, u32, f64, f64)> = Vec::new();
    for series in &out.vm_series {
        for p in &series.points {
            points.push((p.time, series.vm, p.allocated_frac, p.busy_frac));
        }
    }
    points.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    for (time, vm, alloc, busy) in points {
        writeln!(usage, "{time},{vm},{alloc},{busy}")?;
    }

    if let Some(log) = &out.event_log {
        let mut events = std::io::BufWriter::new(fs::File::create(dir.join("events.log"))?);
        for ev in log {
            writeln!(
                events,
                "t={} seq={} kind={} req={} cont={} vm={}",
                ev.time,
                ev.seq,
                ev.kind.name(),
                ev.payload.request.map_or("-".to_string(), |v| v.to_string()),
                ev.payload.container.map_or("-".to_string(), |v| v.to_string()),
                ev.payload.vm.map_or("-".to_string(), |v| v.to_string()),
            )?;
        }
    }
    Ok(())
}

pub fn summary_json(summary: &RunSummary) -> std::io::Result<String> {
    let mut text = serde_json::to_string_pretty(summary)?;
    text.push('\n');
    Ok(text)
}

/// Flat one-line CSV rendering of a summary (`--format csv`).
pub fn summary_csv(summary: &RunSummary) -> String {
    let mut s = String::from(
        "arrt_s,avg_vm_util_allocated,avg_vm_util_busy,cold_start_fraction,\
         completed,rejected,throughput_rps,vm_seconds,makespan_s\n",
    );
    let _ = writeln!(
        s,
        "{},{},{},{},{},{},{},{},{}",
        fmt_opt(summary.arrt_s),
        fmt_opt(summary.avg_vm_util_allocated),
        fmt_opt(summary.avg_vm_util_busy),
        summary.cold_start_fraction,
        summary.completed_count,
        summary.rejected_count,
        summary.throughput_rps,
        summary.vm_seconds,
        summary.makespan_s,
    );
    s
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or(String::new(), |v| v.to_string())
}

pub struct ComparisonRow {
    pub scenario: String,
    pub result: Result<RunSummary, String>,
}

const COMPARE_COLUMNS: [&str; 8] = [
    "scenario",
    "arrt_s",
    "util_alloc",
    "util_busy",
    "cold_frac",
    "rejected",
    "vm_seconds",
    "throughput_rps",
];

fn row_cells(row: &ComparisonRow) -> Vec<String> {
    match &row.result {
        Ok(s) => vec![
            row.scenario.clone(),
            s.arrt_s.map_or("-".into(), |v| format!("{v:.4}")),
            s.avg_vm_util_allocated
                .map_or("-".into(), |v| format!("{v:.4}")),
            s.avg_vm_util_busy.map_or("-".into(), |v| format!("{v:.4}")),
            format!("{:.4}", s.cold_start_fraction),
            s.rejected_count.to_string(),
            format!("{:.1}", s.vm_seconds),
            format!("{:.3}", s.throughput_rps),
        ],
        Err(e) => {
            let mut cells = vec![row.scenario.clone(), format!("error: {e}")];
            cells.resize(COMPARE_COLUMNS.len(), String::new());
            cells
        }
    }
}

/// Aligned text table, one row per scenario.
pub fn render_comparison_table(rows: &[ComparisonRow]) -> String {
    let mut table: Vec<Vec<String>> = vec![COMPARE_COLUMNS.iter().map(|c| c.to_string()).collect()];
    table.extend(rows.iter().map(row_cells));
    let widths: Vec<usize> = (0..COMPARE_COLUMNS.len())
        .map(|i| table.iter().map(|r| r[i].len()).max().unwrap_or(0))
        .collect();
    let mut out = String::new();
    for row in &table {
        for (i, cell) in row.iter().enumerate() {
            if i > 0 {
                out.push_str("  ");
            }
            let _ = write!(out, "{cell:<width$}", width = widths[i]);
        }
        // trim the padding on the last column
        while out.ends_with(' ') {
            out.pop();
        }
        out.push('\n');
    }
    out
}

pub fn comparison_csv(rows: &[ComparisonRow]) -> String {
    let mut out = COMPARE_COLUMNS.join(",");
    out.push('\n');
    for row in rows {
        out.push_str(&row_cells(row).join(","));
        out.push('\n');
    }
    out
}
