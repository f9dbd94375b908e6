//! Dense → sparse → re-dense orchestration.
//!
//! A [`PhasePlan`] is executed phase by phase:
//!
//! * **dense**: unconstrained SGD.
//! * **sparse**: on entry every prunable, non-excluded layer gets a top-k
//!   magnitude mask computed from its current weights; after every optimizer
//!   step the masks are re-applied so pruned weights stay exactly zero.
//! * **redense**: masks are dropped, pruned weights restart from 0.0 and the
//!   whole network trains again, by default at a tenth of the preceding
//!   sparse phase's rate.
//!
//! Optimizer momentum is reset at every phase boundary. Shuffling and dropout
//! are keyed by `(seed, global epoch, step)`, so a run is a pure function of
//! plan, seed and data, and can be resumed from any epoch-boundary
//! checkpoint.

use std::collections::BTreeMap;
use std::fmt::{self, Write as _};
use std::fs;
use std::path::PathBuf;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::checkpoint::{self, ResumeState};
use crate::data::{batches, BatchPlan, Dataset};
use crate::error::{Error, Result};
use crate::network::{error_rate, Mode, Network};
use crate::optimizer::{effective_lr, sgd_step, OptimizerSpec, OptimizerState};
use crate::pruning::{self, SparsitySpec};
use crate::reporting::{self, Histogram, LayerAudit, Stage};
use crate::rng::derive_seed;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PhaseKind {
    Dense,
    Sparse,
    Redense,
    /// Dense continuation at lowered rates, the equal-budget control arm.
    Llr,
}

impl PhaseKind {
    pub fn as_str(self) -> &'static str {
        match self {
            PhaseKind::Dense => "dense",
            PhaseKind::Sparse => "sparse",
            PhaseKind::Redense => "redense",
            PhaseKind::Llr => "llr",
        }
    }
}

impl fmt::Display for PhaseKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Phase {
    pub kind: PhaseKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sparsity: Option<f64>,
    pub epochs: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lr: Option<f64>,
}

impl Phase {
    pub fn dense(epochs: usize, lr: f64) -> Self {
        Phase {
            kind: PhaseKind::Dense,
            sparsity: None,
            epochs,
            lr: Some(lr),
        }
    }

    pub fn sparse(sparsity: f64, epochs: usize, lr: f64) -> Self {
        Phase {
            kind: PhaseKind::Sparse,
            sparsity: Some(sparsity),
            epochs,
            lr: Some(lr),
        }
    }

    /// Re-dense phase; `None` takes a tenth of the preceding sparse rate.
    pub fn redense(epochs: usize, lr: Option<f64>) -> Self {
        Phase {
            kind: PhaseKind::Redense,
            sparsity: None,
            epochs,
            lr,
        }
    }

    pub fn llr(epochs: usize, lr: f64) -> Self {
        Phase {
            kind: PhaseKind::Llr,
            sparsity: None,
            epochs,
            lr: Some(lr),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhasePlan {
    pub phases: Vec<Phase>,
    pub seed: u64,
}

impl PhasePlan {
    /// Checks phase ordering and per-phase fields. `from_checkpoint` lifts
    /// the dense-first requirement.
    pub fn validate(&self, from_checkpoint: bool) -> Result<()> {
        if self.phases.is_empty() {
            return Err(Error::Config("phase plan is empty".into()));
        }
        if !from_checkpoint && self.phases[0].kind != PhaseKind::Dense {
            return Err(Error::Config(format!(
                "first phase must be dense unless resuming from a checkpoint, got {}",
                self.phases[0].kind
            )));
        }
        for (i, p) in self.phases.iter().enumerate() {
            let prev = i.checked_sub(1).map(|j| self.phases[j].kind);
            let at = format!("phase {i} ({})", p.kind);
            if p.epochs == 0 {
                return Err(Error::Config(format!("{at}: epochs must be positive")));
            }
            if let Some(lr) = p.lr {
                if !(lr >= 0.0 && lr.is_finite()) {
                    return Err(Error::Config(format!("{at}: lr must be >= 0, got {lr}")));
                }
            }
            match p.kind {
                PhaseKind::Sparse => match p.sparsity {
                    Some(s) if s > 0.0 && s < 1.0 => {}
                    Some(s) => {
                        return Err(Error::Config(format!("{at}: sparsity {s} outside (0, 1)")))
                    }
                    None => return Err(Error::Config(format!("{at}: sparsity is required"))),
                },
                _ if p.sparsity.is_some() => {
                    return Err(Error::Config(format!(
                        "{at}: only sparse phases take a sparsity"
                    )))
                }
                PhaseKind::Redense => {
                    let ok = prev == Some(PhaseKind::Sparse) || (prev.is_none() && from_checkpoint);
                    if !ok {
                        return Err(Error::Config(format!(
                            "{at}: must directly follow a sparse phase"
                        )));
                    }
                }
                PhaseKind::Dense if prev == Some(PhaseKind::Sparse) => {
                    return Err(Error::Config(format!(
                        "{at}: a sparse phase must be followed by redense or another sparse phase"
                    )))
                }
                PhaseKind::Llr => {
                    return Err(Error::Config(format!(
                        "{at}: llr phases belong to the control arm"
                    )))
                }
                _ => {}
            }
        }
        Ok(())
    }

    /// Learning rate of every phase: explicit values, `base_lr` for dense or
    /// sparse phases without one, a tenth of the preceding sparse rate for
    /// redense phases without one.
    pub fn resolved_lrs(&self, base_lr: f64) -> Vec<f64> {
        let mut out: Vec<f64> = Vec::with_capacity(self.phases.len());
        for (i, p) in self.phases.iter().enumerate() {
            let lr = match (p.lr, p.kind) {
                (Some(lr), _) => lr,
                (None, PhaseKind::Redense) => {
                    let sparse = i
                        .checked_sub(1)
                        .filter(|&j| self.phases[j].kind == PhaseKind::Sparse)
                        .map_or(base_lr, |j| out[j]);
                    sparse * 0.1
                }
                (None, _) => base_lr,
            };
            out.push(lr);
        }
        out
    }

    /// `(epochs, lr)` of every phase after the leading dense phase(s): the
    /// budget an LLR control must match.
    pub fn post_baseline_schedule(&self, base_lr: f64) -> Vec<(usize, f64)> {
        let lrs = self.resolved_lrs(base_lr);
        self.phases
            .iter()
            .zip(lrs)
            .skip_while(|(p, _)| p.kind == PhaseKind::Dense)
            .map(|(p, lr)| (p.epochs, lr))
            .collect()
    }

    pub fn post_baseline_epochs(&self) -> usize {
        self.phases
            .iter()
            .skip_while(|p| p.kind == PhaseKind::Dense)
            .map(|p| p.epochs)
            .sum()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ConvergenceSpec {
    pub patience: usize,
    pub min_delta: f64,
    pub max_epochs: usize,
}

impl Default for ConvergenceSpec {
    fn default() -> Self {
        ConvergenceSpec {
            patience: 5,
            min_delta: 1e-4,
            max_epochs: 200,
        }
    }
}

impl ConvergenceSpec {
    pub fn validate(&self) -> Result<()> {
        if self.patience == 0 || self.max_epochs == 0 || self.patience > self.max_epochs {
            return Err(Error::Config(format!(
                "convergence needs 1 <= patience <= max_epochs, got {self:?}"
            )));
        }
        if !(self.min_delta >= 0.0) {
            return Err(Error::Config(format!(
                "min_delta must be >= 0, got {}",
                self.min_delta
            )));
        }
        Ok(())
    }
}

/// Early stopping on validation loss.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EarlyStopping {
    pub best: f64,
    pub stale: usize,
    pub epochs: usize,
}

impl Default for EarlyStopping {
    fn default() -> Self {
        EarlyStopping {
            best: f64::INFINITY,
            stale: 0,
            epochs: 0,
        }
    }
}

impl EarlyStopping {
    /// Records one epoch's validation loss; true once `patience` epochs have
    /// passed without an improvement larger than `min_delta`, or at
    /// `max_epochs`.
    pub fn observe(&mut self, val_loss: f64, spec: &ConvergenceSpec) -> bool {
        self.epochs += 1;
        if val_loss < self.best - spec.min_delta {
            self.best = val_loss;
            self.stale = 0;
        } else {
            self.stale += 1;
        }
        self.stale >= spec.patience || self.epochs >= spec.max_epochs
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRow {
    pub epoch: usize,
    pub phase: PhaseKind,
    pub lr: f64,
    pub train_loss: f64,
    pub val_loss: f64,
    pub val_err: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhaseSummary {
    pub index: usize,
    pub kind: PhaseKind,
    /// Mask sparsity during the phase; 0 for unmasked phases.
    pub sparsity: f64,
    pub epochs: usize,
    pub lr: f64,
    pub stopped_early: bool,
    pub train_loss: f64,
    pub val_loss: f64,
    pub val_err: f64,
    pub test_err: Option<f64>,
}

/// What was observed when a re-dense phase started.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RedenseCheck {
    pub phase_index: usize,
    /// Every previously pruned coordinate read exactly 0.0.
    pub pruned_zero: bool,
    /// Every kept coordinate is bit-identical to the sparse-phase result.
    pub kept_bit_equal: bool,
    pub lr: f64,
    pub lr_defaulted: bool,
    pub preceding_sparse_lr: f64,
}

impl RedenseCheck {
    pub fn passed(&self) -> bool {
        self.pruned_zero && self.kept_bit_equal
    }
}

/// Per-layer pruning statistics for one sparse/redense iteration.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerDiagnostics {
    pub iteration: usize,
    pub layer: String,
    pub threshold: f64,
    pub kept: usize,
    pub total: usize,
    pub mean_abs_dense_final: f64,
    pub mean_abs_redense_final: Option<f64>,
    /// Nonzero weights with |w| below the threshold at the end of the sparse
    /// phase.
    pub inside_threshold_after_sparse: Option<usize>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub seed: u64,
    pub rows: Vec<EpochRow>,
    pub phases: Vec<PhaseSummary>,
    pub final_val_error: Option<f64>,
    pub final_test_error: Option<f64>,
    pub final_sparsity: Vec<LayerAudit>,
    pub redense_checks: Vec<RedenseCheck>,
    pub diagnostics: Vec<LayerDiagnostics>,
    pub wall_clock_secs: f64,
}

impl RunRecord {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,phase,lr,train_loss,val_loss,val_err\n");
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{}",
                r.epoch, r.phase, r.lr, r.train_loss, r.val_loss, r.val_err
            );
        }
        out
    }

    pub fn epochs(&self) -> usize {
        self.rows.len()
    }
}

/// Training, validation and optional test splits for one run.
#[derive(Clone, Copy, Debug)]
pub struct TrainData<'a> {
    pub train: &'a Dataset,
    pub val: &'a Dataset,
    pub test: Option<&'a Dataset>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FlowConfig {
    pub optimizer: OptimizerSpec,
    pub batch_size: usize,
    pub drop_last: bool,
    /// Early stopping; `None` runs every phase for its full epoch count.
    pub convergence: Option<ConvergenceSpec>,
    pub excluded_layers: Vec<String>,
    pub histogram_bins: usize,
    /// Where checkpoints and histogram CSVs go; nothing is written if unset.
    pub out_dir: Option<PathBuf>,
    /// Also write a resumable checkpoint every k epochs within a phase.
    pub checkpoint_every: Option<usize>,
}

impl FlowConfig {
    pub fn new(optimizer: OptimizerSpec, batch_size: usize) -> Self {
        FlowConfig {
            optimizer,
            batch_size,
            drop_last: false,
            convergence: None,
            excluded_layers: Vec::new(),
            histogram_bins: reporting::DEFAULT_BINS,
            out_dir: None,
            checkpoint_every: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.optimizer.validate()?;
        if let Some(c) = &self.convergence {
            c.validate()?;
        }
        if self.batch_size == 0 || self.histogram_bins == 0 {
            return Err(Error::Config(
                "batch_size and histogram_bins must be positive".into(),
            ));
        }
        if self.checkpoint_every == Some(0) {
            return Err(Error::Config("checkpoint_every must be positive".into()));
        }
        Ok(())
    }
}

/// Position of one optimizer step, passed to [`FlowObserver::after_step`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct StepInfo {
    pub phase_index: usize,
    pub kind: PhaseKind,
    pub epoch: usize,
    pub step: usize,
}

/// Hooks into a running flow; every method has a no-op default.
pub trait FlowObserver {
    /// Called after the optimizer step and, in sparse phases, the mask
    /// re-application.
    fn after_step(&mut self, _info: &StepInfo, _net: &Network) {}
    /// Called once a phase's entry transition (pruning, zero-restoration)
    /// is complete, before its first epoch.
    fn on_phase_start(&mut self, _phase_index: usize, _kind: PhaseKind, _net: &Network) {}
    fn on_phase_end(&mut self, _summary: &PhaseSummary, _net: &Network) {}
}

impl FlowObserver for () {}

#[derive(Clone, Debug, PartialEq)]
pub struct Snapshot {
    pub iteration: usize,
    pub histogram: Histogram,
}

#[derive(Clone, Debug)]
pub struct FlowOutcome {
    pub network: Network,
    pub record: RunRecord,
    pub snapshots: Vec<Snapshot>,
    pub checkpoints: Vec<PathBuf>,
}

/// File name of the checkpoint written at the end of phase `index`.
pub fn phase_checkpoint_name(index: usize, kind: PhaseKind) -> String {
    format!("ckpt_{index:02}_{kind}.dsdc")
}

/// File name of a histogram CSV. Iterations after the first carry a suffix.
pub fn histogram_file_name(layer: &str, stage: Stage, iteration: usize) -> String {
    if iteration <= 1 {
        format!("hist_{layer}_{stage}.csv")
    } else {
        format!("hist_{layer}_{stage}_iter{iteration}.csv")
    }
}

struct Engine<'a> {
    cfg: &'a FlowConfig,
    data: TrainData<'a>,
    seed: u64,
    observer: &'a mut dyn FlowObserver,
    global_epoch: usize,
    state: OptimizerState,
    iteration: usize,
    /// Per-layer (histogram half-range, threshold) of the current iteration.
    layer_stats: BTreeMap<String, (f64, f64)>,
    record: RunRecord,
    snapshots: Vec<Snapshot>,
    checkpoints: Vec<PathBuf>,
}

impl<'a> Engine<'a> {
    fn new(
        net: &Network,
        data: TrainData<'a>,
        cfg: &'a FlowConfig,
        seed: u64,
        observer: &'a mut dyn FlowObserver,
    ) -> Result<Self> {
        cfg.validate()?;
        if data.train.dim() != net.input_dim() {
            return Err(Error::Dimension(format!(
                "training features have dim {}, network expects {}",
                data.train.dim(),
                net.input_dim()
            )));
        }
        BatchPlan {
            batch_size: cfg.batch_size,
            shuffle_seed: seed,
            drop_last: cfg.drop_last,
        }
        .validate(data.train.len())?;
        if let Some(dir) = &cfg.out_dir {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        Ok(Engine {
            cfg,
            data,
            seed,
            observer,
            global_epoch: 0,
            state: OptimizerState::new(net),
            iteration: 0,
            layer_stats: BTreeMap::new(),
            record: RunRecord {
                seed,
                ..RunRecord::default()
            },
            snapshots: Vec::new(),
            checkpoints: Vec::new(),
        })
    }

    fn sparsity_spec(&self, sparsity: f64) -> SparsitySpec {
        SparsitySpec {
            sparsity,
            excluded_layers: self.cfg.excluded_layers.clone(),
        }
    }

    fn snapshot(&mut self, net: &Network, stage: Stage) -> Result<()> {
        for d in net.dense() {
            let Some(&(range, _)) = self.layer_stats.get(&d.name) else {
                continue;
            };
            let h = reporting::histogram(
                &d.name,
                stage,
                &d.weight,
                self.cfg.histogram_bins,
                Some((-range, range)),
            )?;
            if let Some(dir) = &self.cfg.out_dir {
                h.write_csv(&dir.join(histogram_file_name(&d.name, stage, self.iteration)))?;
            }
            self.snapshots.push(Snapshot {
                iteration: self.iteration,
                histogram: h,
            });
        }
        Ok(())
    }

    fn diagnostics_mut(&mut self, layer: &str) -> Option<&mut LayerDiagnostics> {
        let it = self.iteration;
        self.record
            .diagnostics
            .iter_mut()
            .find(|d| d.iteration == it && d.layer == layer)
    }

    /// Sparse-phase entry: record the pre-prune distribution, build masks
    /// from the current weights, record the pruned distribution.
    fn enter_sparse(&mut self, net: &mut Network, sparsity: f64) -> Result<()> {
        if net.has_masks() {
            return Ok(());
        }
        self.iteration += 1;
        let spec = self.sparsity_spec(sparsity);
        let targets = pruning::pruned_layer_names(net, &spec);
        self.layer_stats.clear();
        for d in net.dense().filter(|d| targets.contains(&d.name)) {
            self.layer_stats
                .insert(d.name.clone(), (reporting::max_abs(d.weight.data()), 0.0));
        }
        self.snapshot(net, Stage::DenseFinal)?;
        let mean_abs: BTreeMap<String, f64> = net
            .dense()
            .map(|d| (d.name.clone(), reporting::mean_abs(d.weight.data())))
            .collect();
        for p in pruning::prune_network(net, &spec)? {
            if let Some(stats) = self.layer_stats.get_mut(&p.layer) {
                stats.1 = p.threshold;
            }
            self.record.diagnostics.push(LayerDiagnostics {
                iteration: self.iteration,
                layer: p.layer.clone(),
                threshold: p.threshold,
                kept: p.kept,
                total: p.total,
                mean_abs_dense_final: mean_abs[&p.layer],
                mean_abs_redense_final: None,
                inside_threshold_after_sparse: None,
            });
        }
        self.snapshot(net, Stage::PostPrune)
    }

    fn finish_sparse(&mut self, net: &Network) -> Result<()> {
        self.snapshot(net, Stage::SparseFinal)?;
        let stats: Vec<(String, f64)> = self
            .layer_stats
            .iter()
            .map(|(k, v)| (k.clone(), v.1))
            .collect();
        for (layer, lambda) in stats {
            let count = net
                .dense_by_name(&layer)
                .map(|d| reporting::count_inside_threshold(d.weight.data(), lambda));
            if let Some(diag) = self.diagnostics_mut(&layer) {
                diag.inside_threshold_after_sparse = count;
            }
        }
        Ok(())
    }

    /// Re-dense entry: pruned coordinates restart at exactly 0.0 and the
    /// masks are removed.
    fn enter_redense(
        &mut self,
        net: &mut Network,
        index: usize,
        lr: f64,
        lr_defaulted: bool,
        sparse_lr: f64,
    ) -> Result<()> {
        let mut pruned_zero = true;
        let mut kept_bit_equal = true;
        for d in net.dense_mut() {
            let Some(mask) = d.mask.take() else { continue };
            let before = d.weight.clone();
            for (w, &keep) in d.weight.data_mut().iter_mut().zip(mask.bits()) {
                if !keep {
                    *w = 0.0;
                }
            }
            for ((after, before), &keep) in
                d.weight.data().iter().zip(before.data()).zip(mask.bits())
            {
                if keep {
                    kept_bit_equal &= after.to_bits() == before.to_bits();
                } else {
                    pruned_zero &= before.to_bits() == 0.0f64.to_bits() && *after == 0.0;
                }
            }
        }
        self.record.redense_checks.push(RedenseCheck {
            phase_index: index,
            pruned_zero,
            kept_bit_equal,
            lr,
            lr_defaulted,
            preceding_sparse_lr: sparse_lr,
        });
        if !(pruned_zero && kept_bit_equal) {
            return Err(Error::Contract(format!(
                "phase {index}: re-dense entry found nonzero pruned weights or altered kept weights"
            )));
        }
        self.snapshot(net, Stage::ZeroRestored)
    }

    fn finish_redense(&mut self, net: &Network) -> Result<()> {
        self.snapshot(net, Stage::RedenseFinal)?;
        let layers: Vec<String> = self.layer_stats.keys().cloned().collect();
        for layer in layers {
            let m = net
                .dense_by_name(&layer)
                .map(|d| reporting::mean_abs(d.weight.data()));
            if let Some(diag) = self.diagnostics_mut(&layer) {
                diag.mean_abs_redense_final = m;
            }
        }
        Ok(())
    }

    fn run_epoch(&mut self, net: &mut Network, info: StepInfo, lr: f64) -> Result<f64> {
        let plan = BatchPlan {
            batch_size: self.cfg.batch_size,
            shuffle_seed: self.seed,
            drop_last: self.cfg.drop_last,
        };
        let masked = info.kind == PhaseKind::Sparse;
        let mut loss_sum = 0.0;
        let mut seen = 0usize;
        let epoch_key = info.epoch as u64;
        for (step, idx) in batches(self.data.train.len(), &plan, epoch_key)
            .iter()
            .enumerate()
        {
            let (x, y) = self.data.train.batch(idx)?;
            let mode = Mode::Train {
                dropout_seed: derive_seed(self.seed, &[epoch_key, step as u64, 0xd0]),
            };
            let (loss, grads) = net.loss_and_grads(&x, &y, mode)?;
            if !loss.is_finite() {
                return Err(Error::Numeric(format!(
                    "phase {} ({}), epoch {}, step {step}: non-finite training loss",
                    info.phase_index,
                    info.kind,
                    info.epoch + 1
                )));
            }
            sgd_step(net, &grads, &mut self.state, &self.cfg.optimizer, lr).map_err(
                |e| match e {
                    Error::Numeric(m) => Error::Numeric(format!(
                        "phase {} ({}), epoch {}: {m}",
                        info.phase_index,
                        info.kind,
                        info.epoch + 1
                    )),
                    other => other,
                },
            )?;
            if masked {
                net.apply_masks();
            }
            self.observer.after_step(&StepInfo { step, ..info }, net);
            loss_sum += loss * idx.len() as f64;
            seen += idx.len();
        }
        Ok(loss_sum / seen as f64)
    }

    fn resume_state(&self, index: usize, done: usize, detector: EarlyStopping) -> ResumeState {
        ResumeState {
            phase_index: index,
            epochs_done_in_phase: done,
            global_epoch: self.global_epoch,
            detector,
            optimizer: self.state.clone(),
            rows: self.record.rows.clone(),
            layer_stats: self
                .layer_stats
                .iter()
                .map(|(k, &(r, l))| (k.clone(), r, l))
                .collect(),
        }
    }

    /// Trains one phase's epochs; entry/exit transitions are the caller's.
    #[allow(clippy::too_many_arguments)]
    fn train_phase(
        &mut self,
        net: &mut Network,
        index: usize,
        phase: &Phase,
        lr: f64,
        mut done: usize,
        mut detector: EarlyStopping,
        fixed_length: bool,
    ) -> Result<PhaseSummary> {
        let convergence = if fixed_length {
            None
        } else {
            self.cfg.convergence
        };
        let cap = convergence.map_or(phase.epochs, |c| phase.epochs.min(c.max_epochs));
        let mut stopped_early = false;
        let mut last = self.record.rows.last().copied();
        while done < cap {
            let epoch_lr = effective_lr(&self.cfg.optimizer, done, Some(lr));
            let info = StepInfo {
                phase_index: index,
                kind: phase.kind,
                epoch: self.global_epoch,
                step: 0,
            };
            let train_loss = self.run_epoch(net, info, epoch_lr)?;
            let val_loss = net.loss(self.data.val)?;
            if !val_loss.is_finite() {
                return Err(Error::Numeric(format!(
                    "phase {index} ({}), epoch {}: non-finite validation loss",
                    phase.kind,
                    self.global_epoch + 1
                )));
            }
            let val_err = error_rate(net, self.data.val)?;
            done += 1;
            self.global_epoch += 1;
            let row = EpochRow {
                epoch: self.global_epoch,
                phase: phase.kind,
                lr: epoch_lr,
                train_loss,
                val_loss,
                val_err,
            };
            self.record.rows.push(row);
            last = Some(row);
            let stop = convergence.is_some_and(|c| detector.observe(val_loss, &c));
            if stop && done < cap {
                stopped_early = true;
            }
            if let (Some(k), Some(dir)) = (self.cfg.checkpoint_every, &self.cfg.out_dir) {
                if done.is_multiple_of(k) && done < cap && !stop {
                    let path = dir.join(format!("resume_{index:02}_e{done:04}.dsdc"));
                    checkpoint::save_checkpoint(
                        net,
                        Some(&self.resume_state(index, done, detector)),
                        &path,
                    )?;
                }
            }
            if stop {
                break;
            }
        }
        let last = last.ok_or_else(|| Error::Contract(format!("phase {index} ran no epochs")))?;
        let test_err = self.data.test.map(|t| error_rate(net, t)).transpose()?;
        Ok(PhaseSummary {
            index,
            kind: phase.kind,
            sparsity: if phase.kind == PhaseKind::Sparse {
                phase.sparsity.unwrap_or(0.0)
            } else {
                0.0
            },
            epochs: done,
            lr,
            stopped_early,
            train_loss: last.train_loss,
            val_loss: last.val_loss,
            val_err: last.val_err,
            test_err,
        })
    }

    fn run(
        mut self,
        mut net: Network,
        phases: &[Phase],
        lrs: &[f64],
        resume: Option<ResumeState>,
        fixed_length: bool,
    ) -> Result<FlowOutcome> {
        let started = Instant::now();
        let mut start = 0;
        let mut resume_at: Option<(usize, EarlyStopping)> = None;
        if let Some(r) = resume {
            if r.phase_index >= phases.len() {
                return Err(Error::Format(format!(
                    "resume state points at phase {} of a {}-phase plan",
                    r.phase_index,
                    phases.len()
                )));
            }
            start = r.phase_index;
            self.global_epoch = r.global_epoch;
            self.state = r.optimizer;
            self.record.rows = r.rows;
            self.layer_stats = r
                .layer_stats
                .into_iter()
                .map(|(k, a, b)| (k, (a, b)))
                .collect();
            self.iteration = phases[..=start]
                .iter()
                .filter(|p| p.kind == PhaseKind::Sparse)
                .count();
            resume_at = Some((r.epochs_done_in_phase, r.detector));
        }

        for (index, phase) in phases.iter().enumerate().skip(start) {
            let lr = lrs[index];
            let resumed = resume_at.take();
            if resumed.is_none() {
                match phase.kind {
                    PhaseKind::Dense | PhaseKind::Llr => net.clear_masks(),
                    PhaseKind::Sparse => {
                        self.enter_sparse(&mut net, phase.sparsity.expect("validated sparsity"))?
                    }
                    PhaseKind::Redense => {
                        let sparse_lr = index.checked_sub(1).map_or(f64::NAN, |j| lrs[j]);
                        self.enter_redense(&mut net, index, lr, phase.lr.is_none(), sparse_lr)?
                    }
                }
                self.state.reset();
            }
            self.observer.on_phase_start(index, phase.kind, &net);
            let (done, detector) = resumed.unwrap_or_default();
            let summary =
                self.train_phase(&mut net, index, phase, lr, done, detector, fixed_length)?;
            match phase.kind {
                PhaseKind::Sparse => self.finish_sparse(&net)?,
                PhaseKind::Redense => self.finish_redense(&net)?,
                _ => {}
            }
            if let Some(dir) = &self.cfg.out_dir {
                let path = dir.join(phase_checkpoint_name(index, phase.kind));
                checkpoint::save_checkpoint(&net, None, &path)?;
                self.checkpoints.push(path);
            }
            self.observer.on_phase_end(&summary, &net);
            self.record.phases.push(summary);
        }

        let last = self.record.rows.last();
        self.record.final_val_error = last.map(|r| r.val_err);
        self.record.final_test_error = self.data.test.map(|t| error_rate(&net, t)).transpose()?;
        self.record.final_sparsity = reporting::sparsity_audit(&net);
        self.record.wall_clock_secs = started.elapsed().as_secs_f64();
        Ok(FlowOutcome {
            network: net,
            record: self.record,
            snapshots: self.snapshots,
            checkpoints: self.checkpoints,
        })
    }
}

/// Executes a DSD plan from `net`. Plans that do not begin with a dense
/// phase are treated as continuing from a checkpoint.
pub fn run_dsd(
    plan: &PhasePlan,
    net: Network,
    data: TrainData<'_>,
    cfg: &FlowConfig,
    observer: &mut dyn FlowObserver,
) -> Result<FlowOutcome> {
    let from_checkpoint = plan.phases.first().map(|p| p.kind) != Some(PhaseKind::Dense);
    plan.validate(from_checkpoint)?;
    let lrs = plan.resolved_lrs(cfg.optimizer.lr);
    Engine::new(&net, data, cfg, plan.seed, observer)?.run(net, &plan.phases, &lrs, None, false)
}

/// Continues a plan from a checkpoint written with `checkpoint_every`.
pub fn resume_dsd(
    plan: &PhasePlan,
    checkpoint_path: &std::path::Path,
    data: TrainData<'_>,
    cfg: &FlowConfig,
    observer: &mut dyn FlowObserver,
) -> Result<FlowOutcome> {
    let (net, state) = checkpoint::load_checkpoint_with_state(checkpoint_path)?;
    let state = state.ok_or_else(|| {
        Error::Format(format!(
            "{} holds no resume state",
            checkpoint_path.display()
        ))
    })?;
    let from_checkpoint = plan.phases.first().map(|p| p.kind) != Some(PhaseKind::Dense);
    plan.validate(from_checkpoint)?;
    if state.optimizer.velocities.len() != net.dense().count() {
        return Err(Error::Format("resume state does not match network".into()));
    }
    let lrs = plan.resolved_lrs(cfg.optimizer.lr);
    Engine::new(&net, data, cfg, plan.seed, observer)?.run(
        net,
        &plan.phases,
        &lrs,
        Some(state),
        false,
    )
}

/// Runs a single phase standalone, including its entry transition: a
/// sparse phase prunes unless masks are already present, a re-dense phase
/// restores pruned weights to zero.
pub fn run_phase(
    net: Network,
    phase: &Phase,
    data: TrainData<'_>,
    cfg: &FlowConfig,
    seed: u64,
    observer: &mut dyn FlowObserver,
) -> Result<FlowOutcome> {
    let plan = PhasePlan {
        phases: vec![*phase],
        seed,
    };
    if phase.kind != PhaseKind::Llr {
        plan.validate(true)?;
    }
    let lrs = plan.resolved_lrs(cfg.optimizer.lr);
    Engine::new(&net, data, cfg, seed, observer)?.run(net, &plan.phases, &lrs, None, false)
}

/// Equal-budget control: continues dense training from the same starting
/// network through `lr_sequence` (`(epochs, lr)` pairs), never masking.
/// Fails with a fairness error unless the sequence spends exactly
/// `total_extra_epochs`.
pub fn run_llr(
    net: Network,
    total_extra_epochs: usize,
    lr_sequence: &[(usize, f64)],
    data: TrainData<'_>,
    cfg: &FlowConfig,
    seed: u64,
    observer: &mut dyn FlowObserver,
) -> Result<FlowOutcome> {
    let spent: usize = lr_sequence.iter().map(|&(e, _)| e).sum();
    if spent != total_extra_epochs {
        return Err(Error::Fairness(format!(
            "LLR schedule spends {spent} epochs but the paired DSD budget is {total_extra_epochs}"
        )));
    }
    let phases: Vec<Phase> = lr_sequence
        .iter()
        .map(|&(e, lr)| Phase::llr(e, lr))
        .collect();
    for (i, p) in phases.iter().enumerate() {
        if p.epochs == 0 || !(p.lr.unwrap_or(0.0) >= 0.0) {
            return Err(Error::Config(format!(
                "llr step {i}: needs epochs > 0 and lr >= 0"
            )));
        }
    }
    let lrs: Vec<f64> = lr_sequence.iter().map(|&(_, lr)| lr).collect();
    Engine::new(&net, data, cfg, seed, observer)?.run(net, &phases, &lrs, None, true)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn plan_validation() {
        let ok = PhasePlan {
            phases: vec![
                Phase::dense(3, 0.1),
                Phase::sparse(0.3, 2, 0.01),
                Phase::redense(2, None),
            ],
            seed: 1,
        };
        ok.validate(false).unwrap();
        let mut bad = ok.clone();
        bad.phases[1].sparsity = Some(1.5);
        assert!(matches!(bad.validate(false), Err(Error::Config(_))));
        let mut bad = ok.clone();
        bad.phases.swap(1, 2);
        assert!(bad.validate(false).is_err());
        let sparse_first = PhasePlan {
            phases: ok.phases[1..].to_vec(),
            seed: 1,
        };
        assert!(sparse_first.validate(false).is_err());
        sparse_first.validate(true).unwrap();
        let mut bad = ok.clone();
        bad.phases[0].sparsity = Some(0.2);
        assert!(bad.validate(false).is_err());
    }

    #[test]
    fn redense_lr_defaults_to_a_tenth() {
        let plan = PhasePlan {
            phases: vec![
                Phase::dense(3, 1e-2),
                Phase::sparse(0.5, 2, 1e-3),
                Phase::redense(2, None),
                Phase::sparse(0.25, 2, 1e-3),
                Phase::redense(2, Some(5e-5)),
            ],
            seed: 0,
        };
        let lrs = plan.resolved_lrs(0.5);
        assert_eq!(lrs[2], 1e-3 * 0.1);
        assert_eq!(lrs[4], 5e-5);
        assert_eq!(plan.post_baseline_epochs(), 8);
        assert_eq!(plan.post_baseline_schedule(0.5).len(), 4);
    }

    #[test]
    fn early_stopping_waits_for_patience() {
        let spec = ConvergenceSpec {
            patience: 3,
            min_delta: 0.0,
            max_epochs: 100,
        };
        let mut es = EarlyStopping::default();
        assert!(!es.observe(1.0, &spec));
        assert!(!es.observe(1.0, &spec));
        assert!(!es.observe(1.0, &spec));
        assert!(es.observe(1.0, &spec));
        let mut es = EarlyStopping::default();
        for (i, loss) in [5.0, 4.0, 3.0, 2.0].iter().enumerate() {
            assert!(!es.observe(*loss, &spec), "epoch {i}");
        }
        let capped = ConvergenceSpec {
            max_epochs: 2,
            ..spec
        };
        let mut es = EarlyStopping::default();
        assert!(!es.observe(3.0, &capped));
        assert!(es.observe(2.0, &capped));
    }

    #[test]
    fn convergence_validation() {
        assert!(ConvergenceSpec {
            patience: 10,
            min_delta: 0.0,
            max_epochs: 5
        }
        .validate()
        .is_err());
        ConvergenceSpec::default().validate().unwrap();
    }
}
