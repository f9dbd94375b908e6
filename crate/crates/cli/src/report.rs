//! The `report` command: regenerates histogram CSVs from a run's
//! checkpoints and renders human-readable summaries.
//!
//! Every output is a pure function of the run directory's artifacts, so
//! rerunning the command reproduces the same bytes.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use dsd_core::checkpoint::load_checkpoint;
use dsd_core::flow::{histogram_file_name, phase_checkpoint_name, PhaseKind};
use dsd_core::network::Network;
use dsd_core::reporting::{histogram, max_abs, Histogram, Stage};
use dsd_core::stats::MethodSummary;

use crate::commands::{
    CompareSummary, RunSummary, CONFIG_FILE, RECORD_FILE, REPORT_FILE, START_CHECKPOINT,
    SUMMARY_FILE,
};
use crate::error::CliError;

/// Subdirectory of a run directory that `report` writes into.
pub const REPORT_DIR: &str = "report";

fn pct(v: f64) -> String {
    format!("{:.2}%", 100.0 * v)
}

fn opt_pct(v: Option<f64>) -> String {
    v.map_or_else(|| "n/a".to_string(), pct)
}

/// Absolute and relative improvement lines of `after` over `before`.
fn improvement(out: &mut String, label: &str, before: f64, after: f64) {
    let abs = before - after;
    let _ = writeln!(out, "Improve (abs){label}: {}", pct(abs));
    if before > 0.0 {
        let _ = writeln!(out, "Improve (rel){label}: {}", pct(abs / before));
    } else {
        let _ = writeln!(out, "Improve (rel){label}: n/a");
    }
}

/// Preferred error of a phase: test error when a test split exists.
fn phase_error(p: &dsd_core::flow::PhaseSummary) -> f64 {
    p.test_err.unwrap_or(p.val_err)
}

pub fn run_text(s: &RunSummary) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "{} run, seed {}", s.command, s.seed);
    if s.source_checkpoint.is_some() {
        let _ = writeln!(out, "started from a checkpoint");
    }
    let _ = writeln!(out);
    let _ = writeln!(
        out,
        "{:<6}{:<9}{:>9}{:>8}{:>11}{:>10}{:>10}",
        "phase", "kind", "sparsity", "epochs", "lr", "val_err", "test_err"
    );
    for p in &s.phases {
        let _ = writeln!(
            out,
            "{:<6}{:<9}{:>9}{:>8}{:>11.3e}{:>10}{:>10}",
            p.index,
            p.kind.as_str(),
            format!("{:.0}%", 100.0 * p.sparsity),
            p.epochs,
            p.lr,
            pct(p.val_err),
            opt_pct(p.test_err)
        );
    }
    let _ = writeln!(out);

    let baseline = s.start_test_error.or_else(|| {
        s.phases
            .iter()
            .take_while(|p| p.kind == PhaseKind::Dense)
            .last()
            .map(phase_error)
    });
    let sparse = s
        .phases
        .iter()
        .rfind(|p| p.kind == PhaseKind::Sparse)
        .map(phase_error);
    let last = s.phases.last().map(phase_error);
    let _ = writeln!(out, "Baseline error: {}", opt_pct(baseline));
    if sparse.is_some() {
        let _ = writeln!(out, "Sparse error: {}", opt_pct(sparse));
        let _ = writeln!(out, "DSD error: {}", opt_pct(last));
    } else {
        let _ = writeln!(out, "Final error: {}", opt_pct(last));
    }
    if let (Some(b), Some(l)) = (baseline, last) {
        improvement(&mut out, "", b, l);
    }
    if !s.redense_checks.is_empty() {
        let ok = s.redense_checks.iter().all(|c| c.passed());
        let _ = writeln!(
            out,
            "Re-dense entry contract: {}",
            if ok { "held" } else { "VIOLATED" }
        );
    }
    if !s.diagnostics.is_empty() {
        let _ = writeln!(out);
        let _ = writeln!(
            out,
            "{:<5}{:<10}{:>12}{:>14}{:>16}{:>16}{:>14}",
            "iter",
            "layer",
            "threshold",
            "kept/total",
            "mean|w| dense",
            "mean|w| final",
            "inside_thr"
        );
        for d in &s.diagnostics {
            let _ = writeln!(
                out,
                "{:<5}{:<10}{:>12.4e}{:>14}{:>16.4e}{:>16}{:>14}",
                d.iteration,
                d.layer,
                d.threshold,
                format!("{}/{}", d.kept, d.total),
                d.mean_abs_dense_final,
                d.mean_abs_redense_final
                    .map_or_else(|| "n/a".to_string(), |m| format!("{m:.4e}")),
                d.inside_threshold_after_sparse
                    .map_or_else(|| "n/a".to_string(), |c| c.to_string())
            );
        }
    }
    out
}

fn method_line(out: &mut String, m: &MethodSummary) {
    let sd = m.summary.sd.map_or_else(|| "n/a".to_string(), pct);
    let _ = writeln!(
        out,
        "{:<10}{:>4}{:>10}{:>10}{:>8}",
        m.method,
        m.summary.n,
        pct(m.summary.mean),
        sd,
        m.failed
    );
}

pub fn compare_text(s: &CompareSummary) -> String {
    let mut out = String::new();
    let _ = writeln!(
        out,
        "DSD vs LLR comparison, {} seeds, {} post-baseline epochs per arm",
        s.seeds.len(),
        s.budget_epochs
    );
    let _ = writeln!(out, "Baseline error: {}", pct(s.baseline_test_error));
    let _ = writeln!(out);
    let _ = writeln!(
        out,
        "{:<10}{:>4}{:>10}{:>10}{:>8}",
        "method", "n", "mean_err", "sd_err", "failed"
    );
    for m in &s.methods {
        method_line(&mut out, m);
    }
    for t in &s.tests {
        match &t.result {
            Some(r) => {
                let _ = writeln!(
                    out,
                    "Welch t-test {} vs {}: t = {:.4}, df = {:.2}, p = {:.3e}",
                    t.method_a, t.method_b, r.t_statistic, r.degrees_of_freedom, r.p_value
                );
            }
            None => {
                let _ = writeln!(
                    out,
                    "Welch t-test {} vs {}: n/a (fewer than two runs)",
                    t.method_a, t.method_b
                );
            }
        }
    }
    let _ = writeln!(out);
    let _ = writeln!(out, "After the first post-baseline phase:");
    for m in &s.halfway {
        method_line(&mut out, m);
    }
    for t in &s.halfway_tests {
        if let Some(r) = &t.result {
            let _ = writeln!(
                out,
                "Welch t-test {} vs {}: t = {:.4}, df = {:.2}, p = {:.3e}",
                t.method_a, t.method_b, r.t_statistic, r.degrees_of_freedom, r.p_value
            );
        }
    }
    let _ = writeln!(out);
    if let (Some(d), Some(l)) = (s.method("dsd"), s.method("llr")) {
        improvement(&mut out, " vs LLR", l.summary.mean, d.summary.mean);
        improvement(
            &mut out,
            " vs baseline",
            s.baseline_test_error,
            d.summary.mean,
        );
        if let (Some(sd_d), Some(sd_l)) = (d.summary.sd, l.summary.sd) {
            let rel = if sd_d <= sd_l { "<=" } else { ">" };
            let _ = writeln!(out, "SD(dsd) {rel} SD(llr): {} vs {}", pct(sd_d), pct(sd_l));
        }
    }
    let incomplete = s.per_seed.iter().filter(|r| r.error.is_some()).count();
    if incomplete > 0 {
        let _ = writeln!(
            out,
            "INCOMPLETE: {incomplete} arm runs failed, see per_seed.csv"
        );
    }
    if s.low_power {
        let _ = writeln!(
            out,
            "LOW STATISTICAL POWER: fewer than {} completed seeds per arm",
            s.min_seeds_for_power
        );
    }
    out
}

/// One histogram per `(layer, range)` of `net`, optionally with the layer's
/// mask from `mask_source` applied first.
fn stage_histograms(
    out: &mut Vec<(String, Histogram)>,
    iteration: usize,
    stage: Stage,
    net: &Network,
    layers: &[(String, f64)],
    mask_source: Option<&Network>,
    bins: usize,
) -> Result<(), CliError> {
    for (layer, range) in layers {
        let d = net
            .dense_by_name(layer)
            .ok_or_else(|| CliError::Runtime(format!("checkpoint lacks layer {layer:?}")))?;
        let mut w = d.weight.clone();
        let mask = mask_source
            .and_then(|n| n.dense_by_name(layer))
            .and_then(|d| d.mask.as_ref());
        if let Some(m) = mask {
            m.apply_in_place(&mut w);
        }
        let h = histogram(layer, stage, &w, bins, Some((-range, *range)))?;
        out.push((histogram_file_name(layer, stage, iteration), h));
    }
    Ok(())
}

/// Histograms for every pruned layer at the five stages of each DSD
/// iteration, rebuilt from the start and phase-boundary checkpoints.
pub fn regenerate_histograms(
    dir: &Path,
    s: &RunSummary,
) -> Result<Vec<(String, Histogram)>, CliError> {
    let bins = s.config.harness.histogram_bins;
    let load = |name: &str| load_checkpoint(&dir.join(name)).map_err(CliError::from);
    let mut prev: Network = load(START_CHECKPOINT)?;
    let mut out = Vec::new();
    let mut iteration = 0;
    // (layer, half-range fixed at the iteration's dense_final stage)
    let mut ranges: Vec<(String, f64)> = Vec::new();
    for p in &s.phases {
        let net = load(&phase_checkpoint_name(p.index, p.kind))?;
        match p.kind {
            PhaseKind::Sparse => {
                if !prev.has_masks() {
                    iteration += 1;
                    ranges = net
                        .dense()
                        .filter(|d| d.mask.is_some())
                        .map(|d| {
                            let m = prev
                                .dense_by_name(&d.name)
                                .map_or(0.0, |b| max_abs(b.weight.data()));
                            (d.name.clone(), m)
                        })
                        .collect();
                    stage_histograms(
                        &mut out,
                        iteration,
                        Stage::DenseFinal,
                        &prev,
                        &ranges,
                        None,
                        bins,
                    )?;
                    stage_histograms(
                        &mut out,
                        iteration,
                        Stage::PostPrune,
                        &prev,
                        &ranges,
                        Some(&net),
                        bins,
                    )?;
                }
                stage_histograms(
                    &mut out,
                    iteration,
                    Stage::SparseFinal,
                    &net,
                    &ranges,
                    None,
                    bins,
                )?;
            }
            PhaseKind::Redense => {
                stage_histograms(
                    &mut out,
                    iteration,
                    Stage::ZeroRestored,
                    &prev,
                    &ranges,
                    Some(&prev),
                    bins,
                )?;
                stage_histograms(
                    &mut out,
                    iteration,
                    Stage::RedenseFinal,
                    &net,
                    &ranges,
                    None,
                    bins,
                )?;
            }
            PhaseKind::Dense | PhaseKind::Llr => {}
        }
        prev = net;
    }
    Ok(out)
}

/// Files a run directory must contain for `report`.
fn expected_files(dir: &Path) -> Vec<PathBuf> {
    match fs::read_to_string(dir.join(SUMMARY_FILE)) {
        Ok(text) if text.contains("\"command\": \"compare\"") => {
            vec![dir.join(SUMMARY_FILE), dir.join(CONFIG_FILE)]
        }
        Ok(text) => {
            let mut files = vec![
                dir.join(SUMMARY_FILE),
                dir.join(CONFIG_FILE),
                dir.join(RECORD_FILE),
                dir.join(START_CHECKPOINT),
            ];
            if let Ok(s) = serde_json::from_str::<RunSummary>(&text) {
                files.extend(
                    s.phases
                        .iter()
                        .map(|p| dir.join(phase_checkpoint_name(p.index, p.kind))),
                );
            }
            files
        }
        Err(_) => vec![
            dir.join(SUMMARY_FILE),
            dir.join(CONFIG_FILE),
            dir.join(RECORD_FILE),
            dir.join(START_CHECKPOINT),
        ],
    }
}

/// Regenerates the report for `dir` and returns the summary text.
pub fn report(dir: &Path) -> Result<String, CliError> {
    let missing: Vec<PathBuf> = expected_files(dir)
        .into_iter()
        .filter(|p| !p.is_file())
        .collect();
    if !missing.is_empty() {
        return Err(CliError::MissingArtifacts {
            dir: dir.to_path_buf(),
            missing,
        });
    }
    let text = fs::read_to_string(dir.join(SUMMARY_FILE))?;
    let out_dir = dir.join(REPORT_DIR);
    fs::create_dir_all(&out_dir)?;
    let body = if text.contains("\"command\": \"compare\"") {
        let s: CompareSummary = serde_json::from_str(&text)
            .map_err(|e| CliError::Runtime(format!("malformed {SUMMARY_FILE}: {e}")))?;
        let body = compare_text(&s);
        fs::write(dir.join(REPORT_FILE), &body)?;
        body
    } else {
        let s = RunSummary::load(dir)?;
        for (name, h) in regenerate_histograms(dir, &s)? {
            fs::write(out_dir.join(name), h.to_csv())?;
        }
        run_text(&s)
    };
    fs::write(out_dir.join("summary.txt"), &body)?;
    Ok(body)
}
