//! The `train`, `dsd`, `llr` and `compare` commands.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use dsd_core::checkpoint::{load_checkpoint_matching, save_checkpoint};
use dsd_core::flow::{
    histogram_file_name, run_dsd, run_llr, FlowOutcome, LayerDiagnostics, PhaseKind, PhasePlan,
    PhaseSummary, RedenseCheck,
};
use dsd_core::network::{error_rate, Network};
use dsd_core::reporting::{audit_csv, LayerAudit};
use dsd_core::stats::{
    comparison_csv, repeat_runs, summarize, tests_csv, welch_t_test, MethodSummary, PairwiseTest,
    TTestResult,
};
use serde::{Deserialize, Serialize};

use crate::config::{ExperimentConfig, LoadedData};
use crate::error::CliError;
use crate::report;

pub const SUMMARY_FILE: &str = "summary.json";
pub const CONFIG_FILE: &str = "config.resolved.toml";
pub const RECORD_FILE: &str = "record.csv";
pub const START_CHECKPOINT: &str = "start.dsdc";
pub const FINAL_CHECKPOINT: &str = "final.dsdc";
pub const REPORT_FILE: &str = "report.txt";

/// Command-line overrides shared by all run commands.
#[derive(Clone, Debug, Default)]
pub struct RunOptions {
    pub out: Option<PathBuf>,
    pub seed: Option<u64>,
    pub jobs: Option<usize>,
    pub from_checkpoint: Option<PathBuf>,
}

impl RunOptions {
    fn out_dir(&self, cfg: &ExperimentConfig) -> PathBuf {
        self.out
            .clone()
            .unwrap_or_else(|| cfg.harness.output_dir.clone())
    }
}

/// Contents of a single run's `summary.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub command: String,
    pub seed: u64,
    /// Checkpoint the run started from, if any.
    pub source_checkpoint: Option<String>,
    /// Errors of the starting network, recorded for runs that skip the
    /// dense phase.
    pub start_val_error: Option<f64>,
    pub start_test_error: Option<f64>,
    pub final_val_error: Option<f64>,
    pub final_test_error: Option<f64>,
    pub epochs: usize,
    pub phases: Vec<PhaseSummary>,
    pub redense_checks: Vec<RedenseCheck>,
    pub diagnostics: Vec<LayerDiagnostics>,
    pub final_sparsity: Vec<LayerAudit>,
    /// File names relative to the run directory.
    pub checkpoints: Vec<String>,
    pub histograms: Vec<String>,
    pub wall_clock_secs: f64,
    pub config: ExperimentConfig,
}

impl RunSummary {
    pub fn load(dir: &Path) -> Result<Self, CliError> {
        let path = dir.join(SUMMARY_FILE);
        let text = fs::read_to_string(&path)
            .map_err(|e| CliError::Runtime(format!("cannot read {}: {e}", path.display())))?;
        serde_json::from_str(&text)
            .map_err(|e| CliError::Runtime(format!("malformed {}: {e}", path.display())))
    }
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<(), CliError> {
    fs::write(path, contents)
        .map_err(|e| CliError::Runtime(format!("cannot write {}: {e}", path.display())))
}

fn create_dir(dir: &Path) -> Result<(), CliError> {
    fs::create_dir_all(dir)
        .map_err(|e| CliError::Runtime(format!("cannot create {}: {e}", dir.display())))
}

fn file_name(p: &Path) -> String {
    p.file_name()
        .map_or_else(String::new, |n| n.to_string_lossy().into_owned())
}

struct Start {
    network: Network,
    source: Option<PathBuf>,
}

impl Start {
    fn fresh(cfg: &ExperimentConfig, seed: u64) -> Result<Self, CliError> {
        Ok(Start {
            network: Network::build(&cfg.model.layers, &cfg.init_spec(seed))?,
            source: None,
        })
    }

    fn from_checkpoint(cfg: &ExperimentConfig, path: &Path) -> Result<Self, CliError> {
        Ok(Start {
            network: load_checkpoint_matching(path, &cfg.model.layers)?,
            source: Some(path.to_path_buf()),
        })
    }
}

/// Writes the record, summary, audit, config echo and final checkpoint of a
/// finished run.
fn write_run(
    dir: &Path,
    command: &str,
    cfg: &ExperimentConfig,
    seed: u64,
    start: &Start,
    data: &LoadedData,
    outcome: &FlowOutcome,
) -> Result<RunSummary, CliError> {
    let record = &outcome.record;
    let (start_val_error, start_test_error) = if start.source.is_some() {
        (
            Some(error_rate(&start.network, &data.val)?),
            Some(error_rate(&start.network, &data.test)?),
        )
    } else {
        (None, None)
    };
    save_checkpoint(&outcome.network, None, &dir.join(FINAL_CHECKPOINT))?;
    write_file(&dir.join(RECORD_FILE), record.to_csv())?;
    write_file(&dir.join("audit.csv"), audit_csv(&record.final_sparsity))?;
    write_file(&dir.join(CONFIG_FILE), cfg.to_toml())?;
    let mut histograms: Vec<String> = outcome
        .snapshots
        .iter()
        .map(|s| histogram_file_name(&s.histogram.layer_name, s.histogram.stage, s.iteration))
        .collect();
    histograms.dedup();
    let summary = RunSummary {
        command: command.to_string(),
        seed,
        source_checkpoint: start.source.as_ref().map(|p| p.display().to_string()),
        start_val_error,
        start_test_error,
        final_val_error: record.final_val_error,
        final_test_error: record.final_test_error,
        epochs: record.epochs(),
        phases: record.phases.clone(),
        redense_checks: record.redense_checks.clone(),
        diagnostics: record.diagnostics.clone(),
        final_sparsity: record.final_sparsity.clone(),
        checkpoints: outcome.checkpoints.iter().map(|p| file_name(p)).collect(),
        histograms,
        wall_clock_secs: record.wall_clock_secs,
        config: cfg.clone(),
    };
    let json = serde_json::to_string_pretty(&summary).expect("summary serializes");
    write_file(&dir.join(SUMMARY_FILE), json)?;
    Ok(summary)
}

fn run_plan(
    cfg: &ExperimentConfig,
    data: &LoadedData,
    dir: &Path,
    command: &str,
    plan: &PhasePlan,
    start: Start,
    early_stopping: bool,
) -> Result<RunSummary, CliError> {
    create_dir(dir)?;
    save_checkpoint(&start.network, None, &dir.join(START_CHECKPOINT))?;
    let flow = cfg.flow_config(Some(dir.to_path_buf()), early_stopping);
    let outcome = run_dsd(
        plan,
        start.network.clone(),
        data.flow_data(),
        &flow,
        &mut (),
    )?;
    write_run(dir, command, cfg, plan.seed, &start, data, &outcome)
}

/// Dense training to convergence.
pub fn train(cfg: &ExperimentConfig, opts: &RunOptions) -> Result<RunSummary, CliError> {
    let cfg = cfg.clone().resolve(opts.seed)?;
    let data = LoadedData::load(&cfg.dataset)?;
    train_with(&cfg, &data, &opts.out_dir(&cfg), "train")
}

fn train_with(
    cfg: &ExperimentConfig,
    data: &LoadedData,
    dir: &Path,
    command: &str,
) -> Result<RunSummary, CliError> {
    let seed = cfg.harness.seeds[0];
    let plan = PhasePlan {
        phases: cfg.baseline_phases(),
        seed,
    };
    run_plan(
        cfg,
        data,
        dir,
        command,
        &plan,
        Start::fresh(cfg, seed)?,
        true,
    )
}

/// A full DSD plan, or its post-baseline part when starting from a
/// checkpoint.
pub fn dsd(cfg: &ExperimentConfig, opts: &RunOptions) -> Result<RunSummary, CliError> {
    let cfg = cfg.clone().resolve(opts.seed)?;
    if cfg.dsd.phases.is_empty() {
        return Err(CliError::Config(
            "dsd.phases: the dsd command needs a phase plan".into(),
        ));
    }
    let seed = cfg.harness.seeds[0];
    let data = LoadedData::load(&cfg.dataset)?;
    let (plan, start) = match &opts.from_checkpoint {
        Some(path) => {
            let phases = cfg.post_baseline_phases();
            if phases.is_empty() {
                return Err(CliError::Config(
                    "dsd.phases: nothing to run after the dense phase of a checkpoint".into(),
                ));
            }
            (
                PhasePlan { phases, seed },
                Start::from_checkpoint(&cfg, path)?,
            )
        }
        None => (cfg.plan(seed), Start::fresh(&cfg, seed)?),
    };
    run_plan(&cfg, &data, &opts.out_dir(&cfg), "dsd", &plan, start, true)
}

/// Fails with a fairness error unless the LLR schedule spends exactly the
/// DSD plan's post-baseline epochs.
fn check_budget(cfg: &ExperimentConfig) -> Result<usize, CliError> {
    let budget = cfg.plan(0).post_baseline_epochs();
    let spent: usize = cfg.llr_schedule().iter().map(|&(e, _)| e).sum();
    if budget == 0 {
        return Err(CliError::Config(
            "dsd.phases: the control arm needs a plan with post-baseline phases".into(),
        ));
    }
    if spent != budget {
        return Err(CliError::Fairness(format!(
            "LLR arm trains {spent} epochs but the DSD arm trains {budget} after the baseline"
        )));
    }
    Ok(budget)
}

fn baseline(
    cfg: &ExperimentConfig,
    data: &LoadedData,
    opts: &RunOptions,
    dir: &Path,
) -> Result<Start, CliError> {
    match &opts.from_checkpoint {
        Some(path) => Start::from_checkpoint(cfg, path),
        None => {
            let bdir = dir.join("baseline");
            train_with(cfg, data, &bdir, "train")?;
            Start::from_checkpoint(cfg, &bdir.join(FINAL_CHECKPOINT))
        }
    }
}

fn llr_arm(
    cfg: &ExperimentConfig,
    data: &LoadedData,
    dir: &Path,
    start: Start,
    seed: u64,
    budget: usize,
) -> Result<RunSummary, CliError> {
    create_dir(dir)?;
    save_checkpoint(&start.network, None, &dir.join(START_CHECKPOINT))?;
    let flow = cfg.flow_config(Some(dir.to_path_buf()), false);
    let schedule = cfg.llr_schedule();
    let outcome = run_llr(
        start.network.clone(),
        budget,
        &schedule,
        data.flow_data(),
        &flow,
        seed,
        &mut (),
    )?;
    write_run(dir, "llr", cfg, seed, &start, data, &outcome)
}

/// The lowered-learning-rate control from a converged baseline.
pub fn llr(cfg: &ExperimentConfig, opts: &RunOptions) -> Result<RunSummary, CliError> {
    let cfg = cfg.clone().resolve(opts.seed)?;
    let budget = check_budget(&cfg)?;
    let data = LoadedData::load(&cfg.dataset)?;
    let dir = opts.out_dir(&cfg);
    let start = baseline(&cfg, &data, opts, &dir)?;
    llr_arm(&cfg, &data, &dir, start, cfg.harness.seeds[0], budget)
}

/// Per-seed outcome of both arms.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeedRow {
    pub seed: u64,
    pub method: String,
    pub halfway_test_error: Option<f64>,
    pub final_test_error: Option<f64>,
    pub error: Option<String>,
}

/// Contents of a comparison directory's `summary.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CompareSummary {
    pub command: String,
    pub seeds: Vec<u64>,
    pub budget_epochs: usize,
    pub baseline_val_error: f64,
    pub baseline_test_error: f64,
    pub methods: Vec<MethodSummary>,
    pub tests: Vec<PairwiseTest>,
    pub halfway: Vec<MethodSummary>,
    pub halfway_tests: Vec<PairwiseTest>,
    pub per_seed: Vec<SeedRow>,
    pub low_power: bool,
    pub min_seeds_for_power: usize,
    pub config: ExperimentConfig,
}

impl CompareSummary {
    pub fn method(&self, name: &str) -> Option<&MethodSummary> {
        self.methods.iter().find(|m| m.method == name)
    }
}

fn method_summary(name: &str, values: &[f64], failed: usize) -> Option<MethodSummary> {
    summarize(values).ok().map(|summary| MethodSummary {
        method: name.to_string(),
        summary,
        failed,
    })
}

fn pairwise(
    a: Option<&MethodSummary>,
    b: Option<&MethodSummary>,
    names: (&str, &str),
) -> PairwiseTest {
    let result: Option<TTestResult> = match (a, b) {
        (Some(a), Some(b)) => welch_t_test(&a.summary, &b.summary).ok(),
        _ => None,
    };
    PairwiseTest {
        method_a: names.0.to_string(),
        method_b: names.1.to_string(),
        result,
    }
}

fn seed_row(seed: u64, method: &str, r: &Result<RunSummary, CliError>) -> SeedRow {
    match r {
        Ok(s) => SeedRow {
            seed,
            method: method.to_string(),
            halfway_test_error: s.phases.first().and_then(|p| p.test_err),
            final_test_error: s.final_test_error,
            error: None,
        },
        Err(e) => SeedRow {
            seed,
            method: method.to_string(),
            halfway_test_error: None,
            final_test_error: None,
            error: Some(e.to_string()),
        },
    }
}

fn per_seed_csv(rows: &[SeedRow]) -> String {
    let opt = |v: Option<f64>| v.map_or_else(|| "NA".to_string(), |v| v.to_string());
    let mut out = String::from("seed,method,halfway_test_err,final_test_err,status\n");
    for r in rows {
        let status = if r.error.is_some() { "failed" } else { "ok" };
        let _ = writeln!(
            out,
            "{},{},{},{},{status}",
            r.seed,
            r.method,
            opt(r.halfway_test_error),
            opt(r.final_test_error)
        );
    }
    out
}

/// DSD and LLR arms for every seed from one shared baseline, followed by
/// the comparison report.
pub fn compare(cfg: &ExperimentConfig, opts: &RunOptions) -> Result<CompareSummary, CliError> {
    let mut cfg = cfg.clone();
    if let Some(s) = opts.seed {
        cfg.harness.seeds = vec![s];
    }
    if let Some(j) = opts.jobs {
        cfg.harness.jobs = j;
    }
    let cfg = cfg.resolve(None)?;
    let budget = check_budget(&cfg)?;
    let arm_phases = cfg.post_baseline_phases();
    PhasePlan {
        phases: arm_phases.clone(),
        seed: 0,
    }
    .validate(true)
    .map_err(|e| CliError::Config(format!("dsd.phases: {e}")))?;

    let data = LoadedData::load(&cfg.dataset)?;
    let dir = opts.out_dir(&cfg);
    create_dir(&dir)?;
    write_file(&dir.join(CONFIG_FILE), cfg.to_toml())?;
    let base = baseline(&cfg, &data, opts, &dir)?;
    let baseline_val_error = error_rate(&base.network, &data.val)?;
    let baseline_test_error = error_rate(&base.network, &data.test)?;

    let seeds = cfg.harness.seeds.clone();
    let outcomes = repeat_runs(&seeds, cfg.harness.jobs, |seed| {
        let sdir = dir.join(format!("seed_{seed:04}"));
        let arm = || Start {
            network: base.network.clone(),
            source: base.source.clone(),
        };
        let plan = PhasePlan {
            phases: arm_phases.clone(),
            seed,
        };
        let d = run_plan(&cfg, &data, &sdir.join("dsd"), "dsd", &plan, arm(), false);
        let l = llr_arm(&cfg, &data, &sdir.join("llr"), arm(), seed, budget);
        Ok((d, l))
    })?;

    let mut per_seed = Vec::new();
    for o in &outcomes {
        let (d, l) = o.result.as_ref().expect("arms report their own failures");
        per_seed.push(seed_row(o.seed, "dsd", d));
        per_seed.push(seed_row(o.seed, "llr", l));
    }
    let collect = |method: &str, halfway: bool| -> (Vec<f64>, usize) {
        let rows = per_seed.iter().filter(|r| r.method == method);
        let values: Vec<f64> = rows
            .clone()
            .filter_map(|r| {
                if halfway {
                    r.halfway_test_error
                } else {
                    r.final_test_error
                }
            })
            .collect();
        let failed = rows.filter(|r| r.error.is_some()).count();
        (values, failed)
    };
    let mut methods = Vec::new();
    let mut halfway = Vec::new();
    for name in ["dsd", "llr"] {
        let (v, f) = collect(name, false);
        methods.extend(method_summary(name, &v, f));
        let (v, f) = collect(name, true);
        halfway.extend(method_summary(name, &v, f));
    }
    let find = |list: &[MethodSummary], name: &str| list.iter().find(|m| m.method == name).cloned();
    let tests = vec![pairwise(
        find(&methods, "dsd").as_ref(),
        find(&methods, "llr").as_ref(),
        ("dsd", "llr"),
    )];
    let halfway_tests = vec![pairwise(
        find(&halfway, "dsd").as_ref(),
        find(&halfway, "llr").as_ref(),
        ("dsd", "llr"),
    )];
    let min_n = ["dsd", "llr"]
        .iter()
        .map(|m| find(&methods, m).map_or(0, |s| s.summary.n))
        .min()
        .unwrap_or(0);
    let summary = CompareSummary {
        command: "compare".into(),
        seeds,
        budget_epochs: budget,
        baseline_val_error,
        baseline_test_error,
        methods,
        tests,
        halfway,
        halfway_tests,
        per_seed,
        low_power: min_n < cfg.harness.min_seeds_for_power,
        min_seeds_for_power: cfg.harness.min_seeds_for_power,
        config: cfg.clone(),
    };
    write_file(
        &dir.join("comparison.csv"),
        comparison_csv(&summary.methods),
    )?;
    write_file(&dir.join("tests.csv"), tests_csv(&summary.tests))?;
    write_file(&dir.join("halfway.csv"), comparison_csv(&summary.halfway))?;
    write_file(
        &dir.join("halfway_tests.csv"),
        tests_csv(&summary.halfway_tests),
    )?;
    write_file(&dir.join("per_seed.csv"), per_seed_csv(&summary.per_seed))?;
    let json = serde_json::to_string_pretty(&summary).expect("summary serializes");
    write_file(&dir.join(SUMMARY_FILE), json)?;
    write_file(&dir.join(REPORT_FILE), report::compare_text(&summary))?;
    if summary.method("dsd").is_none() || summary.method("llr").is_none() {
        return Err(CliError::Runtime(format!(
            "every run of at least one arm failed; see {}",
            dir.join("per_seed.csv").display()
        )));
    }
    Ok(summary)
}

/// Sanity check used by `compare` callers: all re-dense entries obeyed the
/// zero-restoration contract.
pub fn redense_contract_held(summary: &RunSummary) -> bool {
    summary.redense_checks.iter().all(RedenseCheck::passed)
        && summary
            .phases
            .iter()
            .filter(|p| p.kind == PhaseKind::Redense)
            .count()
            == summary.redense_checks.len()
}

/// Seed-suffixed directory of one comparison arm.
pub fn arm_dir(compare_dir: &Path, seed: u64, method: &str) -> PathBuf {
    compare_dir.join(format!("seed_{seed:04}")).join(method)
}
