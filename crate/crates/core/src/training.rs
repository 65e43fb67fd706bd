//! Optimization, evaluation over folds and the ablation harness.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::container::sha256_hex;
use crate::data::{Dataset, Fold};
use crate::error::{Error, Result};
use crate::layers::{receptive_field, Mode};
use crate::loss::{combined_loss, LossConfig};
use crate::metrics::{evaluate_pair, mean_report, trial_rows, F1Report, TrialRow, DEFAULT_THRESHOLDS};
use crate::models::{DilationSchedule, Model, ModelConfig};
use crate::tensor::{ParamStore, Tape, Tensor};

pub const MANIFEST_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub loss: LossConfig,
    pub seed: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 0.0005,
            epochs: 100,
            batch_size: 4,
            loss: LossConfig::default(),
            seed: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("epochs and batch_size must be at least 1".into()));
        }
        let positive = [self.learning_rate, self.eps];
        if positive.iter().any(|v| !(*v > 0.0 && v.is_finite())) {
            return Err(Error::Config("learning_rate and eps must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::Config("adam betas must lie in [0, 1)".into()));
        }
        self.loss.validate()
    }
}

/// Bias-corrected Adam with per-parameter moment buffers.
#[derive(Clone, Debug)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub t: u64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl Adam {
    pub fn new(store: &ParamStore, cfg: &TrainConfig) -> Self {
        let zeros: Vec<Tensor> = store.iter().map(|p| Tensor::zeros(p.value.shape())).collect();
        Adam {
            lr: cfg.learning_rate,
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            eps: cfg.eps,
            t: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn moments(&self, index: usize) -> (&Tensor, &Tensor) {
        (&self.m[index], &self.v[index])
    }

    /// Apply one update from the gradients currently held in `store`.
    pub fn step(&mut self, store: &mut ParamStore) -> Result<()> {
        if let Some(p) = store.iter().find(|p| !p.grad.all_finite()) {
            return Err(Error::NonFinite(format!("gradient of parameter {}", p.name)));
        }
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for (k, p) in store.iter_mut().enumerate() {
            let m = self.m[k].data_mut();
            let v = self.v[k].data_mut();
            let g = p.grad.data();
            for (i, w) in p.value.data_mut().iter_mut().enumerate() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g[i];
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g[i] * g[i];
                let mh = m[i] / bc1;
                let vh = v[i] / bc2;
                *w -= self.lr * mh / (vh.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

/// Record the loss of one labelled sequence and backpropagate it into the
/// model's parameter gradients. Returns the loss value.
pub fn accumulate_sequence(model: &mut Model, values: &Tensor, labels: &[usize], loss: &LossConfig) -> Result<f64> {
    let mut tape = Tape::new();
    let x = tape.constant(values.clone());
    let stages = model.forward_tape(&mut tape, x, Mode::Train)?;
    let l = combined_loss(&mut tape, &stages, labels, loss)?;
    let value = tape.value(l).item();
    if !value.is_finite() {
        return Err(Error::NonFinite(format!("loss is {value}")));
    }
    tape.backward(l, &mut model.store)?;
    Ok(value)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    /// Mean per-sequence loss of each epoch.
    pub epoch_losses: Vec<f64>,
    pub optimizer_steps: u64,
}

/// Train on every trial of `data`. `on_epoch` sees (epoch, mean loss).
pub fn train(
    model: &mut Model,
    data: &Dataset,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(usize, f64),
) -> Result<TrainLog> {
    cfg.validate()?;
    if data.trials.is_empty() {
        return Err(Error::Data("training set is empty".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(1);
    let mut adam = Adam::new(&model.store, cfg);
    let mut order: Vec<usize> = (0..data.trials.len()).collect();
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            model.store.zero_grad();
            for &i in batch {
                let trial = &data.trials[i];
                total += accumulate_sequence(model, &trial.sequence.values, &trial.labels.labels, &cfg.loss)
                    .map_err(|e| match e {
                        Error::NonFinite(m) => {
                            Error::NonFinite(format!("epoch {epoch}, trial {}: {m}", trial.sequence.trial_id))
                        }
                        other => other,
                    })?;
            }
            adam.step(&mut model.store)?;
        }
        let mean = total / data.trials.len() as f64;
        on_epoch(epoch, mean);
        epoch_losses.push(mean);
    }
    model.store.zero_grad();
    Ok(TrainLog {
        epoch_losses,
        optimizer_steps: adam.t,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrialReport {
    pub trial: String,
    pub subject: String,
    pub report: F1Report,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub trials: Vec<TrialReport>,
    pub mean: F1Report,
}

impl EvalReport {
    pub fn rows(&self) -> Vec<TrialRow> {
        self.trials.iter().flat_map(|t| trial_rows(&t.trial, &t.report)).collect()
    }
}

/// Score the final stage's argmax on every trial (batch norm in eval mode).
pub fn evaluate(model: &mut Model, data: &Dataset, thresholds: &[f64]) -> Result<EvalReport> {
    let mut trials = Vec::with_capacity(data.trials.len());
    for t in &data.trials {
        let pred = model.predict(&t.sequence.values)?.labels();
        trials.push(TrialReport {
            trial: t.sequence.trial_id.clone(),
            subject: t.sequence.subject_id.clone(),
            report: evaluate_pair(&pred, &t.labels.labels, thresholds)?,
        });
    }
    let reports: Vec<F1Report> = trials.iter().map(|t| t.report.clone()).collect();
    let mean = mean_report(&reports).ok_or_else(|| Error::Data("evaluation set is empty".into()))?;
    Ok(EvalReport { trials, mean })
}

pub struct FoldResult {
    pub fold: String,
    pub model: Model,
    pub log: TrainLog,
    pub report: EvalReport,
}

/// Seed for fold `index`; folds never share random streams.
pub fn fold_seed(seed: u64, index: usize) -> u64 {
    seed.wrapping_add(index as u64)
}

fn run_fold(
    model_cfg: &ModelConfig,
    train_cfg: &TrainConfig,
    data: &Dataset,
    fold: &Fold,
    index: usize,
) -> Result<FoldResult> {
    let seed = fold_seed(train_cfg.seed, index);
    let cfg = TrainConfig {
        seed,
        ..train_cfg.clone()
    };
    let mut model = Model::new(model_cfg.clone(), seed)?;
    let log = train(&mut model, &data.subset(&fold.train), &cfg, |_, _| {})?;
    let report = evaluate(&mut model, &data.subset(&fold.test), &DEFAULT_THRESHOLDS)?;
    Ok(FoldResult {
        fold: fold.name.clone(),
        model,
        log,
        report,
    })
}

/// Train and evaluate every fold, running up to `parallel` folds at once.
/// Results are in fold order and independent of `parallel`.
pub fn run_folds(
    model_cfg: &ModelConfig,
    train_cfg: &TrainConfig,
    data: &Dataset,
    folds: &[Fold],
    parallel: usize,
) -> Result<Vec<FoldResult>> {
    let parallel = parallel.max(1);
    let mut results: Vec<Option<Result<FoldResult>>> = (0..folds.len()).map(|_| None).collect();
    let indexed: Vec<(usize, &Fold)> = folds.iter().enumerate().collect();
    for group in indexed.chunks(parallel) {
        let done: Vec<(usize, Result<FoldResult>)> = std::thread::scope(|s| {
            let handles: Vec<_> = group
                .iter()
                .map(|&(i, f)| (i, s.spawn(move || run_fold(model_cfg, train_cfg, data, f, i))))
                .collect();
            handles
                .into_iter()
                .map(|(i, h)| (i, h.join().unwrap_or_else(|_| Err(Error::Config("fold worker panicked".into())))))
                .collect()
        });
        for (i, r) in done {
            results[i] = Some(r);
        }
    }
    results.into_iter().map(|r| r.expect("every fold ran")).collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AblationAxis {
    Causal,
    Dilation,
}

impl std::str::FromStr for AblationAxis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "causal" => Ok(AblationAxis::Causal),
            "dilation" => Ok(AblationAxis::Dilation),
            _ => Err(Error::Config(format!("unknown ablation axis '{s}'"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationVariant {
    pub name: String,
    pub config: ModelConfig,
    pub receptive_field: usize,
    pub folds: Vec<EvalReport>,
    pub mean: F1Report,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub axis: AblationAxis,
    pub variants: [AblationVariant; 2],
}

impl AblationReport {
    /// Two-column comparison: one row per metric.
    pub fn to_csv(&self) -> String {
        let [a, b] = &self.variants;
        let mut out = format!("metric,{},{}\n", a.name, b.name);
        for (ea, eb) in a.mean.entries.iter().zip(&b.mean.entries) {
            out += &format!("F1@{},{},{}\n", (ea.tau * 100.0).round(), ea.f1 * 100.0, eb.f1 * 100.0);
        }
        out += &format!("accuracy,{},{}\n", a.mean.accuracy * 100.0, b.mean.accuracy * 100.0);
        out += &format!("receptive_field,{},{}\n", a.receptive_field, b.receptive_field);
        out
    }
}

/// The two configurations compared along `axis`: (reference, ablated).
pub fn ablation_pair(base: &ModelConfig, axis: AblationAxis) -> [(String, ModelConfig); 2] {
    let mut a = base.clone();
    let mut b = base.clone();
    match axis {
        AblationAxis::Causal => {
            a.causal = false;
            b.causal = true;
            [("acausal".into(), a), ("causal".into(), b)]
        }
        AblationAxis::Dilation => {
            a.dilation = DilationSchedule::Doubling;
            b.dilation = DilationSchedule::Regular;
            [("dilated".into(), a), ("regular".into(), b)]
        }
    }
}

/// Train and evaluate both variants with identical seeds and folds.
pub fn ablate(
    base: &ModelConfig,
    train_cfg: &TrainConfig,
    data: &Dataset,
    folds: &[Fold],
    axis: AblationAxis,
    parallel: usize,
) -> Result<AblationReport> {
    let variants = ablation_pair(base, axis).map(|(name, cfg)| -> Result<AblationVariant> {
        let results = run_folds(&cfg, train_cfg, data, folds, parallel)?;
        let reports: Vec<EvalReport> = results.into_iter().map(|r| r.report).collect();
        let means: Vec<F1Report> = reports.iter().map(|r| r.mean.clone()).collect();
        Ok(AblationVariant {
            name,
            receptive_field: receptive_field(cfg.kernel, &cfg.dilations()),
            config: cfg,
            mean: mean_report(&means).ok_or_else(|| Error::Config("no folds".into()))?,
            folds: reports,
        })
    });
    let [a, b] = variants;
    Ok(AblationReport {
        axis,
        variants: [a?, b?],
    })
}

/// Everything needed to re-run a command bit-identically.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub manifest_version: u32,
    pub crate_version: String,
    pub command: String,
    pub data: String,
    pub data_sha256: String,
    pub model: Option<ModelConfig>,
    pub train: Option<TrainConfig>,
    pub folds: Vec<FoldRecord>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FoldRecord {
    pub name: String,
    pub seed: u64,
    pub train_trials: Vec<String>,
    pub test_trials: Vec<String>,
    pub epoch_losses: Vec<f64>,
    pub metrics: Option<F1Report>,
    pub checkpoint_sha256: Option<String>,
}

impl RunManifest {
    pub fn new(command: &str, data: &str, data_sha256: String) -> Self {
        RunManifest {
            manifest_version: MANIFEST_VERSION,
            crate_version: env!("CARGO_PKG_VERSION").to_string(),
            command: command.to_string(),
            data: data.to_string(),
            data_sha256,
            model: None,
            train: None,
            folds: Vec::new(),
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("manifest serializes")
    }
}

/// Digest over every trial's values and labels, in order.
pub fn dataset_sha256(data: &Dataset) -> String {
    let mut bytes = Vec::new();
    for t in &data.trials {
        bytes.extend(crate::data::sequence_to_bytes(&t.sequence, &t.labels));
    }
    sha256_hex(&bytes)
}

impl FoldRecord {
    pub fn from_result(data: &Dataset, fold: &Fold, seed: u64, result: &mut FoldResult) -> Self {
        let ids = |idx: &[usize]| idx.iter().map(|&i| data.trials[i].sequence.trial_id.clone()).collect();
        FoldRecord {
            name: fold.name.clone(),
            seed,
            train_trials: ids(&fold.train),
            test_trials: ids(&fold.test),
            epoch_losses: result.log.epoch_losses.clone(),
            metrics: Some(result.report.mean.clone()),
            checkpoint_sha256: Some(sha256_hex(&result.model.to_bytes())),
        }
    }
}
