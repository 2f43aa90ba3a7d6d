//! Experiment protocol: seeded repeated training runs, grid sweeps with a
//! least-squares trend fit, and the 2-D normaliser cloud visualisation data.
//!
//! Every run is reproducible from its config alone: repeat `r` trains with
//! seed `seed + r`, datasets are immutable and shared read-only across
//! worker threads, and results are merged by repeat index so the output is
//! independent of `--jobs`.

use std::sync::mpsc;
use std::time::Instant;

use sha2::{Digest, Sha256};

use crate::data::{batches, synthetic_gaussian, BatchPlan, Dataset};
use crate::error::{Error, Result};
use crate::layers::{
    affine_like_forward, argmax_rows, l2_forward, layernorm_forward, rmsnorm_forward,
    softmax_cross_entropy, AffineParams, BatchNorm, CorrectionConfig,
};
use crate::network::{
    build_conv_network, build_dense_network, ActivationKind, ConvPreset, Network, NormaliserKind,
};
use crate::optim::AdamConfig;
use crate::rng::Rng;
use crate::stats::{mean, ols_line, standard_error, LineFit};
use crate::tensor::Tensor;

/// Tag covering the parameter initialisation scheme; bump when it changes so
/// fingerprints separate runs that are not comparable.
const INIT_SCHEME: &str = "fanin-uniform-v1";

/// Rows per evaluation chunk (bounds peak memory on large test sets).
const EVAL_CHUNK: usize = 512;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

impl OptimizerKind {
    pub fn name(self) -> &'static str {
        match self {
            OptimizerKind::Sgd => "sgd",
            OptimizerKind::Adam => "adam",
        }
    }

    pub fn parse(s: &str) -> Result<OptimizerKind> {
        match s {
            "sgd" => Ok(OptimizerKind::Sgd),
            "adam" => Ok(OptimizerKind::Adam),
            other => Err(Error::Config(format!("unknown optimizer '{other}'; expected sgd or adam"))),
        }
    }
}

/// What network a run trains.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ArchSpec {
    /// Fully connected widths, e.g. `[3072, 32, 10]`.
    Dense(Vec<usize>),
    /// A convolutional preset for `[3, 32, 32]` inputs.
    Conv(ConvPreset),
}

impl ArchSpec {
    fn describe(&self) -> String {
        match self {
            ArchSpec::Dense(widths) => widths
                .iter()
                .map(|w| w.to_string())
                .collect::<Vec<_>>()
                .join(","),
            ArchSpec::Conv(preset) => preset.name().to_string(),
        }
    }

    pub fn input_dim(&self) -> usize {
        match self {
            ArchSpec::Dense(widths) => widths.first().copied().unwrap_or(0),
            ArchSpec::Conv(_) => 3 * 32 * 32,
        }
    }

    pub fn classes(&self) -> Option<usize> {
        match self {
            ArchSpec::Dense(widths) => widths.last().copied(),
            ArchSpec::Conv(_) => None,
        }
    }
}

/// Everything that defines a training run.
#[derive(Debug, Clone)]
pub struct ExperimentConfig {
    pub arch: ArchSpec,
    pub normaliser: NormaliserKind,
    pub activation: ActivationKind,
    pub epochs: usize,
    pub batch_size: usize,
    pub eta: f64,
    pub optimizer: OptimizerKind,
    pub repeats: usize,
    pub seed: u64,
    pub standardize: bool,
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        if let ArchSpec::Dense(widths) = &self.arch {
            if widths.len() < 2 || widths.contains(&0) {
                return Err(Error::Config(format!(
                    "arch must list at least two positive widths, got {widths:?}"
                )));
            }
        }
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be at least 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if !(self.eta > 0.0 && self.eta.is_finite()) {
            return Err(Error::Config(format!("eta must be positive, got {}", self.eta)));
        }
        if self.repeats == 0 {
            return Err(Error::Config("repeats must be at least 1".into()));
        }
        Ok(())
    }

    /// Stable hash of every semantic field (architecture, normaliser,
    /// activation, schedule, optimizer, seeds, preprocessing, and the
    /// initialisation scheme). Identical configs produce identical
    /// fingerprints on any platform.
    pub fn fingerprint(&self) -> String {
        let canonical = format!(
            "arch={};normaliser={};activation={};epochs={};batch_size={};eta={:?};optimizer={};repeats={};seed={};standardize={};init={}",
            self.arch.describe(),
            self.normaliser.name(),
            self.activation.name(),
            self.epochs,
            self.batch_size,
            self.eta,
            self.optimizer.name(),
            self.repeats,
            self.seed,
            self.standardize,
            INIT_SCHEME,
        );
        let digest = Sha256::digest(canonical.as_bytes());
        digest.iter().take(8).map(|b| format!("{b:02x}")).collect()
    }

    pub fn build_network(&self, rng: &mut Rng, classes: usize) -> Result<Network> {
        match &self.arch {
            ArchSpec::Dense(widths) => {
                if *widths.last().unwrap() != classes {
                    return Err(Error::Config(format!(
                        "arch output width {} does not match {classes} classes",
                        widths.last().unwrap()
                    )));
                }
                build_dense_network(widths, self.normaliser, self.activation, rng)
            }
            ArchSpec::Conv(preset) => {
                build_conv_network(*preset, self.normaliser, self.activation, classes, rng)
            }
        }
    }
}

/// Metrics recorded after one full pass over the training data.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochStats {
    /// 1-based epoch index.
    pub epoch: usize,
    /// Test accuracy as a fraction in [0, 1].
    pub test_acc: f64,
    /// Sample-weighted mean training loss over the epoch.
    pub train_loss: f64,
}

/// One repeat's full trajectory.
#[derive(Debug, Clone)]
pub struct RunRecord {
    pub fingerprint: String,
    pub repeat: usize,
    pub seed: u64,
    pub epochs: Vec<EpochStats>,
    pub wall_time_secs: f64,
}

impl RunRecord {
    pub fn final_accuracy(&self) -> f64 {
        self.epochs.last().map(|e| e.test_acc).unwrap_or(0.0)
    }
}

/// Fraction of `test` samples the network classifies correctly, evaluated
/// in fixed-size chunks.
pub fn evaluate_accuracy(net: &Network, test: &Dataset) -> Result<f64> {
    if test.is_empty() {
        return Err(Error::Config("cannot evaluate on an empty dataset".into()));
    }
    let mut correct = 0usize;
    let mut i = 0;
    while i < test.len() {
        let end = (i + EVAL_CHUNK).min(test.len());
        let indices: Vec<usize> = (i..end).collect();
        let (x, labels) = test.gather(&indices)?;
        let logits = net.forward_eval(&x)?;
        for (p, l) in argmax_rows(&logits).into_iter().zip(&labels) {
            correct += usize::from(p == *l);
        }
        i = end;
    }
    Ok(correct as f64 / test.len() as f64)
}

fn run_single_repeat(
    cfg: &ExperimentConfig,
    train: &Dataset,
    test: &Dataset,
    repeat: usize,
) -> Result<RunRecord> {
    let started = Instant::now();
    let seed = cfg.seed + repeat as u64;
    let mut rng = Rng::new(seed);
    let mut net = cfg.build_network(&mut rng, train.classes())?;
    let plan = BatchPlan::new(seed, cfg.batch_size)?;
    let sgd = net.sgd_config(cfg.eta)?;
    let mut adam_states = net.adam_states();
    let adam = AdamConfig { eta: cfg.eta, ..AdamConfig::default() };

    let mut epochs = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let mut loss_sum = 0.0;
        for batch in batches(train, &plan, epoch) {
            let (x, labels) = batch?;
            let (logits, caches) = net.forward_train(&x)?;
            let (loss, g) = softmax_cross_entropy(&logits, &labels)?;
            loss_sum += loss * labels.len() as f64;
            let (grads, _) = net.backward(&caches, &g)?;
            match cfg.optimizer {
                OptimizerKind::Sgd => net.sgd_step(&grads, &sgd)?,
                OptimizerKind::Adam => net.adam_step(&grads, &mut adam_states, &adam)?,
            }
        }
        epochs.push(EpochStats {
            epoch: epoch + 1,
            test_acc: evaluate_accuracy(&net, test)?,
            train_loss: loss_sum / train.len() as f64,
        });
    }
    Ok(RunRecord {
        fingerprint: cfg.fingerprint(),
        repeat,
        seed,
        epochs,
        wall_time_secs: started.elapsed().as_secs_f64(),
    })
}

/// Train `cfg.repeats` independent repeats, `jobs` at a time. Records come
/// back ordered by repeat index regardless of scheduling.
pub fn run_training(
    cfg: &ExperimentConfig,
    train: &Dataset,
    test: &Dataset,
    jobs: usize,
) -> Result<Vec<RunRecord>> {
    cfg.validate()?;
    if train.classes() != test.classes() {
        return Err(Error::Config(format!(
            "train has {} classes but test has {}",
            train.classes(),
            test.classes()
        )));
    }
    let jobs = jobs.max(1).min(cfg.repeats);
    if jobs == 1 {
        return (0..cfg.repeats)
            .map(|r| run_single_repeat(cfg, train, test, r))
            .collect();
    }
    let (tx, rx) = mpsc::channel::<(usize, Result<RunRecord>)>();
    std::thread::scope(|scope| {
        for worker in 0..jobs {
            let tx = tx.clone();
            scope.spawn(move || {
                let mut r = worker;
                while r < cfg.repeats {
                    let outcome = run_single_repeat(cfg, train, test, r);
                    if tx.send((r, outcome)).is_err() {
                        return;
                    }
                    r += jobs;
                }
            });
        }
        drop(tx);
        let mut slots: Vec<Option<Result<RunRecord>>> = (0..cfg.repeats).map(|_| None).collect();
        for (r, outcome) in rx {
            slots[r] = Some(outcome);
        }
        slots
            .into_iter()
            .map(|s| s.expect("every repeat reports exactly once"))
            .collect()
    })
}

// --- CSV and summaries ---------------------------------------------------

pub const RUN_CSV_HEADER: &str = "epoch,repeat,seed,test_acc,train_loss";

/// Per-epoch CSV rows for a set of repeats, sorted by (epoch, repeat).
/// Accuracies and losses are written at full precision.
pub fn records_to_csv(records: &[RunRecord]) -> String {
    let mut out = String::from(RUN_CSV_HEADER);
    out.push('\n');
    let max_epochs = records.iter().map(|r| r.epochs.len()).max().unwrap_or(0);
    for e in 0..max_epochs {
        for rec in records {
            if let Some(stats) = rec.epochs.get(e) {
                out.push_str(&format!(
                    "{},{},{},{},{}\n",
                    stats.epoch, rec.repeat, rec.seed, stats.test_acc, stats.train_loss
                ));
            }
        }
    }
    out
}

/// Mean and standard error of the final-epoch test accuracy across repeats.
pub fn final_accuracy_stats(records: &[RunRecord]) -> (f64, f64) {
    let finals: Vec<f64> = records.iter().map(RunRecord::final_accuracy).collect();
    (mean(&finals), standard_error(&finals))
}

/// Human-readable per-epoch summary: mean ± standard error over repeats,
/// in percent with two decimals.
pub fn summary_lines(records: &[RunRecord]) -> Vec<String> {
    let max_epochs = records.iter().map(|r| r.epochs.len()).max().unwrap_or(0);
    let mut lines = Vec::with_capacity(max_epochs);
    for e in 0..max_epochs {
        let accs: Vec<f64> = records
            .iter()
            .filter_map(|r| r.epochs.get(e).map(|s| s.test_acc))
            .collect();
        let losses: Vec<f64> = records
            .iter()
            .filter_map(|r| r.epochs.get(e).map(|s| s.train_loss))
            .collect();
        lines.push(format!(
            "epoch {:>3}: test_acc {:.2}% ± {:.2}%  train_loss {:.4}",
            e + 1,
            100.0 * mean(&accs),
            100.0 * standard_error(&accs),
            mean(&losses),
        ));
    }
    lines
}

// --- sweeps --------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SweepKind {
    /// Vary every hidden width in a dense arch.
    Width,
    /// Vary the minibatch size.
    BatchSize,
}

impl SweepKind {
    pub fn name(self) -> &'static str {
        match self {
            SweepKind::Width => "width",
            SweepKind::BatchSize => "batch_size",
        }
    }

    pub fn parse(s: &str) -> Result<SweepKind> {
        match s {
            "width" => Ok(SweepKind::Width),
            "batch_size" => Ok(SweepKind::BatchSize),
            other => Err(Error::Config(format!(
                "unknown sweep kind '{other}'; expected width or batch_size"
            ))),
        }
    }
}

/// One grid point's outcome.
#[derive(Debug, Clone, Copy)]
pub struct SweepPoint {
    pub grid_value: usize,
    pub accuracy_mean: f64,
    pub accuracy_se: f64,
}

/// A swept grid with its least-squares accuracy-vs-grid-value line.
#[derive(Debug, Clone)]
pub struct SweepResult {
    pub kind: SweepKind,
    pub points: Vec<SweepPoint>,
    pub fit: LineFit,
}

pub const SWEEP_CSV_HEADER: &str = "grid_value,accuracy_mean,accuracy_se";

impl SweepResult {
    pub fn to_csv(&self) -> String {
        let mut out = String::from(SWEEP_CSV_HEADER);
        out.push('\n');
        for p in &self.points {
            out.push_str(&format!("{},{},{}\n", p.grid_value, p.accuracy_mean, p.accuracy_se));
        }
        out
    }
}

/// Ordinary least squares of accuracy against the raw grid value.
pub fn fit_sweep(points: &[(f64, f64)]) -> Result<LineFit> {
    let xs: Vec<f64> = points.iter().map(|p| p.0).collect();
    let ys: Vec<f64> = points.iter().map(|p| p.1).collect();
    ols_line(&xs, &ys)
}

fn config_at(cfg: &ExperimentConfig, kind: SweepKind, value: usize) -> Result<ExperimentConfig> {
    let mut out = cfg.clone();
    match kind {
        SweepKind::Width => {
            let ArchSpec::Dense(widths) = &cfg.arch else {
                return Err(Error::Config(
                    "width sweeps need a dense arch (width list)".into(),
                ));
            };
            let mut widths = widths.clone();
            if widths.len() < 3 {
                return Err(Error::Config(format!(
                    "width sweep needs at least one hidden layer, arch was {widths:?}"
                )));
            }
            for w in widths.iter_mut().skip(1).take(cfg.arch_hidden_count()) {
                *w = value;
            }
            out.arch = ArchSpec::Dense(widths);
        }
        SweepKind::BatchSize => out.batch_size = value,
    }
    Ok(out)
}

impl ExperimentConfig {
    fn arch_hidden_count(&self) -> usize {
        match &self.arch {
            ArchSpec::Dense(widths) => widths.len().saturating_sub(2),
            ArchSpec::Conv(_) => 0,
        }
    }
}

/// Run the grid and fit the accuracy trend against the raw grid value.
pub fn run_sweep(
    cfg: &ExperimentConfig,
    kind: SweepKind,
    grid: &[usize],
    train: &Dataset,
    test: &Dataset,
    jobs: usize,
) -> Result<SweepResult> {
    if grid.len() < 2 {
        return Err(Error::Config(format!(
            "a sweep needs at least two grid points, got {grid:?}"
        )));
    }
    if grid.contains(&0) {
        return Err(Error::Config(format!("grid values must be positive, got {grid:?}")));
    }
    let mut points = Vec::with_capacity(grid.len());
    for &value in grid {
        let point_cfg = config_at(cfg, kind, value)?;
        let records = run_training(&point_cfg, train, test, jobs)?;
        let (acc_mean, acc_se) = final_accuracy_stats(&records);
        points.push(SweepPoint { grid_value: value, accuracy_mean: acc_mean, accuracy_se: acc_se });
    }
    let fit = fit_sweep(
        &points
            .iter()
            .map(|p| (p.grid_value as f64, p.accuracy_mean))
            .collect::<Vec<_>>(),
    )?;
    Ok(SweepResult { kind, points, fit })
}

// --- normaliser clouds ---------------------------------------------------

/// One input point and its image under the chosen map.
#[derive(Debug, Clone, Copy)]
pub struct CloudPoint {
    pub input: [f64; 2],
    pub output: [f64; 2],
}

impl CloudPoint {
    pub fn output_radius(&self) -> f64 {
        (self.output[0] * self.output[0] + self.output[1] * self.output[1]).sqrt()
    }
}

pub const CLOUD_CSV_HEADER: &str = "input_x,input_y,output_x,output_y";

pub fn clouds_to_csv(points: &[CloudPoint]) -> String {
    let mut out = String::from(CLOUD_CSV_HEADER);
    out.push('\n');
    for p in points {
        out.push_str(&format!("{},{},{},{}\n", p.input[0], p.input[1], p.output[0], p.output[1]));
    }
    out
}

/// Push `n` standard-normal 2-D points through the chosen normaliser.
///
/// The corrected affine-like map uses `W = I`, `b = 0` so only its intrinsic
/// scaling shows; batch statistics (for batchnorm) are computed over the
/// whole cloud.
pub fn make_clouds(normaliser: NormaliserKind, n: usize, seed: u64) -> Result<Vec<CloudPoint>> {
    if n == 0 {
        return Err(Error::Config("cloud needs at least one point".into()));
    }
    let inputs = synthetic_gaussian(n, 2, 1, seed)?;
    let x = inputs.features().clone();
    let y = match normaliser {
        NormaliserKind::None => x.clone(),
        NormaliserKind::Batchnorm => BatchNorm::new(2).forward_train(&x)?.0,
        NormaliserKind::Layernorm => layernorm_forward(&x)?.0,
        NormaliserKind::Rmsnorm => rmsnorm_forward(&x)?.0,
        NormaliserKind::L2Full | NormaliserKind::L2Half => l2_forward(&x)?.0,
        NormaliserKind::AffineCorrection => {
            let params = AffineParams::new(
                Tensor::new(&[2, 2], vec![1.0, 0.0, 0.0, 1.0])?,
                Tensor::zeros(&[2]),
            )?;
            affine_like_forward(&params, &x, &CorrectionConfig::default())?.0
        }
        NormaliserKind::PatchnormAffine | NormaliserKind::PatchnormL2 => {
            return Err(Error::Config(format!(
                "normaliser '{}' has no 2-D cloud form; it belongs to the convolutional presets",
                normaliser.name()
            )));
        }
    };
    Ok((0..n)
        .map(|i| CloudPoint {
            input: [x.row(i)[0], x.row(i)[1]],
            output: [y.row(i)[0], y.row(i)[1]],
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_config(normaliser: NormaliserKind) -> ExperimentConfig {
        ExperimentConfig {
            arch: ArchSpec::Dense(vec![4, 6, 3]),
            normaliser,
            activation: ActivationKind::Tanh,
            epochs: 2,
            batch_size: 8,
            eta: 0.05,
            optimizer: OptimizerKind::Sgd,
            repeats: 2,
            seed: 11,
            standardize: false,
        }
    }

    fn tiny_data() -> (Dataset, Dataset) {
        (
            synthetic_gaussian(96, 4, 3, 100).unwrap(),
            synthetic_gaussian(48, 4, 3, 200).unwrap(),
        )
    }

    #[test]
    fn csv_has_one_row_per_epoch_and_repeat() {
        let (train, test) = tiny_data();
        let mut cfg = tiny_config(NormaliserKind::None);
        cfg.epochs = 1;
        let records = run_training(&cfg, &train, &test, 1).unwrap();
        let csv = records_to_csv(&records);
        let lines: Vec<&str> = csv.trim_end().lines().collect();
        assert_eq!(lines[0], RUN_CSV_HEADER);
        assert_eq!(lines.len(), 1 + cfg.repeats);
        for (r, line) in lines[1..].iter().enumerate() {
            assert!(line.starts_with(&format!("1,{r},{}", cfg.seed + r as u64)), "{line}");
        }
    }

    #[test]
    fn training_beats_chance_on_separated_classes() {
        let (train, test) = tiny_data();
        let mut cfg = tiny_config(NormaliserKind::AffineCorrection);
        cfg.epochs = 6;
        cfg.repeats = 1;
        let records = run_training(&cfg, &train, &test, 1).unwrap();
        let acc = records[0].final_accuracy();
        assert!(acc > 0.5, "accuracy {acc} on 3 well-separated classes");
        // Loss decreases over the run.
        let losses: Vec<f64> = records[0].epochs.iter().map(|e| e.train_loss).collect();
        assert!(losses.last().unwrap() < losses.first().unwrap());
    }

    #[test]
    fn repeats_are_deterministic_and_job_count_invariant() {
        let (train, test) = tiny_data();
        let cfg = tiny_config(NormaliserKind::Batchnorm);
        let a = run_training(&cfg, &train, &test, 1).unwrap();
        let b = run_training(&cfg, &train, &test, 2).unwrap();
        assert_eq!(a.len(), b.len());
        for (ra, rb) in a.iter().zip(&b) {
            assert_eq!(ra.repeat, rb.repeat);
            assert_eq!(ra.seed, rb.seed);
            assert_eq!(ra.epochs, rb.epochs, "repeat {} diverged across job counts", ra.repeat);
        }
    }

    #[test]
    fn fingerprint_changes_only_with_semantic_fields() {
        let base = tiny_config(NormaliserKind::None);
        assert_eq!(base.fingerprint(), tiny_config(NormaliserKind::None).fingerprint());

        let mut eta = base.clone();
        eta.eta = 0.051;
        assert_ne!(base.fingerprint(), eta.fingerprint());

        let mut seed = base.clone();
        seed.seed = 12;
        assert_ne!(base.fingerprint(), seed.fingerprint());

        let mut norm = base.clone();
        norm.normaliser = NormaliserKind::Rmsnorm;
        assert_ne!(base.fingerprint(), norm.fingerprint());

        let mut std = base.clone();
        std.standardize = true;
        assert_ne!(base.fingerprint(), std.fingerprint());
    }

    #[test]
    fn standard_error_matches_definition() {
        let accs = [0.5, 0.52, 0.48, 0.51, 0.49];
        let m = mean(&accs);
        let sd = (accs.iter().map(|a| (a - m) * (a - m)).sum::<f64>() / 4.0).sqrt();
        let records: Vec<RunRecord> = accs
            .iter()
            .enumerate()
            .map(|(r, &acc)| RunRecord {
                fingerprint: "x".into(),
                repeat: r,
                seed: r as u64,
                epochs: vec![EpochStats { epoch: 1, test_acc: acc, train_loss: 1.0 }],
                wall_time_secs: 0.0,
            })
            .collect();
        let (got_mean, got_se) = final_accuracy_stats(&records);
        assert!((got_mean - m).abs() < 1e-15);
        assert!((got_se - sd / 5.0_f64.sqrt()).abs() < 1e-15);
    }

    #[test]
    fn sweep_two_point_slope_matches_hand_value() {
        let fit = fit_sweep(&[(8.0, 0.5), (128.0, 0.4)]).unwrap();
        assert!((fit.slope - (-1.0 / 1200.0)).abs() < 1e-15, "slope {}", fit.slope);
        let flat = fit_sweep(&[(8.0, 0.4), (64.0, 0.4), (128.0, 0.4)]).unwrap();
        assert_eq!(flat.slope, 0.0);
    }

    #[test]
    fn width_sweep_runs_and_fits() {
        let (train, test) = tiny_data();
        let mut cfg = tiny_config(NormaliserKind::None);
        cfg.epochs = 1;
        cfg.repeats = 1;
        let result = run_sweep(&cfg, SweepKind::Width, &[4, 8], &train, &test, 1).unwrap();
        assert_eq!(result.points.len(), 2);
        assert!(result.fit.slope.is_finite());
        let csv = result.to_csv();
        assert!(csv.starts_with(SWEEP_CSV_HEADER));
        assert_eq!(csv.trim_end().lines().count(), 3);

        assert!(run_sweep(&cfg, SweepKind::Width, &[4], &train, &test, 1).is_err());
    }

    #[test]
    fn cloud_geometry_per_normaliser() {
        let n = 400;
        for (kind, expect) in [
            (NormaliserKind::Rmsnorm, Some(2.0_f64.sqrt())),
            (NormaliserKind::L2Full, Some(1.0)),
        ] {
            let cloud = make_clouds(kind, n, 3).unwrap();
            for p in &cloud {
                assert!((p.output_radius() - expect.unwrap()).abs() < 1e-10);
            }
        }

        // LayerNorm in 2-D keeps only sign information: the cloud collapses
        // exactly onto the ±(1, −1) axis. The ε inside the root leaves rare
        // near-diagonal samples (variance ≲ ε) short of the cluster points
        // along that axis, so cluster membership is asserted for the bulk.
        let cloud = make_clouds(NormaliserKind::Layernorm, n, 3).unwrap();
        let (mut near_pos, mut near_neg) = (0usize, 0usize);
        for p in &cloud {
            let (ox, oy) = (p.output[0], p.output[1]);
            assert!((ox + oy).abs() < 1e-9, "output ({ox}, {oy}) off the collapse axis");
            if (ox - 1.0).abs() < 0.01 {
                near_pos += 1;
            } else if (ox + 1.0).abs() < 0.01 {
                near_neg += 1;
            }
        }
        assert!(near_pos > 0 && near_neg > 0, "both clusters should be populated");
        assert!(
            near_pos + near_neg >= n * 95 / 100,
            "only {}/{n} points reached the clusters",
            near_pos + near_neg
        );

        // Affine-like with W=I, b=0 fills the unit ball: radii < 1, spread.
        let cloud = make_clouds(NormaliserKind::AffineCorrection, n, 3).unwrap();
        let radii: Vec<f64> = cloud.iter().map(CloudPoint::output_radius).collect();
        assert!(radii.iter().all(|&r| r < 1.0));
        let m = mean(&radii);
        let std = (radii.iter().map(|r| (r - m) * (r - m)).sum::<f64>() / (n as f64 - 1.0)).sqrt();
        assert!(std > 0.05, "radial spread {std}");

        assert!(make_clouds(NormaliserKind::PatchnormAffine, 10, 3).is_err());
        let csv = clouds_to_csv(&cloud);
        assert!(csv.starts_with(CLOUD_CSV_HEADER));
        assert_eq!(csv.trim_end().lines().count(), n + 1);
    }

    #[test]
    fn config_validation_rejects_bad_values() {
        let mut cfg = tiny_config(NormaliserKind::None);
        cfg.eta = 0.0;
        assert!(cfg.validate().is_err());
        let mut cfg = tiny_config(NormaliserKind::None);
        cfg.repeats = 0;
        assert!(cfg.validate().is_err());
        let mut cfg = tiny_config(NormaliserKind::None);
        cfg.arch = ArchSpec::Dense(vec![4]);
        assert!(cfg.validate().is_err());
    }
}
