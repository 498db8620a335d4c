//! Report artifacts: `report.json`, `report.md`, `per_instance.csv`.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{write, HarnessError, Result};
use crate::runner::RunReport;

pub fn report_json(r: &RunReport) -> String {
    serde_json::to_string_pretty(r).expect("report serialises") + "\n"
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

pub fn per_instance_csv(r: &RunReport) -> String {
    let mut s = String::from("id,chosen,truth,triggered,flipped,forward_passes,w_t,hes\n");
    for i in &r.instances {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{},{}",
            csv_field(&i.id),
            csv_field(i.chosen.as_deref().unwrap_or("")),
            csv_field(&i.truth),
            i.triggered,
            i.flipped,
            i.forward_passes,
            i.w_t,
            i.hes
        );
    }
    s
}

pub fn summary_rows(r: &RunReport) -> Vec<(&'static str, String)> {
    vec![
        ("instances", r.decoded.to_string()),
        ("failed", r.failed.to_string()),
        ("accuracy", format!("{:.4}", r.accuracy)),
        ("f1", format!("{:.4}", r.f1)),
        ("trigger rate", format!("{:.4}", r.trigger_rate)),
        ("n_fwd", format!("{:.4}", r.n_fwd)),
        ("flip rate", format!("{:.4}", r.flip_rate)),
        ("wall ms/step (mean)", format!("{:.4}", r.wall_ms_per_step.mean)),
        ("wall ms/step (p95)", format!("{:.4}", r.wall_ms_per_step.p95)),
    ]
}

pub fn report_md(r: &RunReport) -> String {
    let mut s = String::from("# Run report\n\n| metric | value |\n|---|---|\n");
    for (k, v) in summary_rows(r) {
        let _ = writeln!(s, "| {k} | {v} |");
    }
    let _ = write!(
        s,
        "\nbackend: `{}`\n\nconfig fingerprint: `{}`\n\ndataset fingerprint: `{}`\n\nreport fingerprint: `{}`\n",
        r.backend, r.config_fingerprint, r.dataset_fingerprint, r.fingerprint
    );
    let failed: Vec<_> = r.instances.iter().filter(|i| i.error.is_some()).collect();
    if !failed.is_empty() {
        s.push_str("\n## Failed instances\n\n");
        for i in failed {
            let _ = writeln!(s, "- `{}`: {}", i.id, i.error.as_deref().unwrap_or(""));
        }
    }
    s
}

pub fn write_run_artifacts(dir: &Path, r: &RunReport) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| HarnessError::io(dir, e))?;
    write(dir.join("report.json"), report_json(r))?;
    write(dir.join("report.md"), report_md(r))?;
    write(dir.join("per_instance.csv"), per_instance_csv(r))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn csv_quoting() {
        assert_eq!(csv_field("a"), "a");
        assert_eq!(csv_field("a,b"), "\"a,b\"");
        assert_eq!(csv_field("say \"hi\""), "\"say \"\"hi\"\"\"");
    }
}
