//! Experiment configuration and the multi-seed comparison runner.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::bench::DataConfig;
use crate::error::{io_err, LabError, Result};
use crate::evalkit::{confusion, AveragedReport, EvalReport};
use crate::iern::{Architecture, LossWeights};
use crate::runner::{predict_dataset, train_method, Method, TrainSettings, Trained};
use crate::synth::{ConfoundedDataset, ImageShape};

pub const CONFIG_FORMAT: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Channel width of the convolutional stacks.
    pub width: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self { width: 16 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimizerConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    /// Linear warmup length in steps; 5% of all steps when absent.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub warmup_steps: Option<u64>,
    pub epochs: usize,
    pub batch_size: usize,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        let t = TrainSettings::default();
        Self {
            lr: t.lr,
            beta1: t.beta1,
            beta2: t.beta2,
            epsilon: t.epsilon,
            warmup_steps: t.warmup_steps,
            epochs: t.epochs,
            batch_size: t.batch_size,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CompareConfig {
    pub methods: Vec<Method>,
    /// Runs use seeds `seed, seed + 1, ..`.
    pub seeds: usize,
    /// λ2 values to sweep; empty means only `weights.lambda2`.
    pub lambda2_grid: Vec<f64>,
}

impl Default for CompareConfig {
    fn default() -> Self {
        Self { methods: Method::ALL.to_vec(), seeds: 5, lambda2_grid: Vec::new() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub format_version: u32,
    pub method: Method,
    pub seed: u64,
    pub out: PathBuf,
    pub model: ModelConfig,
    pub optimizer: OptimizerConfig,
    pub weights: LossWeights,
    pub compare: CompareConfig,
    pub data: DataConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            format_version: CONFIG_FORMAT,
            method: Method::Iern,
            seed: 0,
            out: PathBuf::from("runs"),
            model: ModelConfig::default(),
            optimizer: OptimizerConfig::default(),
            weights: LossWeights::default(),
            compare: CompareConfig::default(),
            data: DataConfig::default(),
        }
    }
}

impl ExperimentConfig {
    /// Parses TOML; missing keys take their defaults, unknown keys are errors.
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| LabError::Config(e.to_string()))?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(io_err(path))?;
        Self::from_toml(&text).map_err(|e| LabError::Config(format!("{}: {e}", path.display())))
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| LabError::Config(e.to_string()))
    }

    /// Schema checks that do not touch the file system.
    pub fn validate_settings(&self) -> Result<()> {
        if self.format_version != CONFIG_FORMAT {
            return Err(LabError::Config(format!(
                "config format {} (expected {CONFIG_FORMAT})",
                self.format_version
            )));
        }
        if self.model.width == 0 {
            return Err(LabError::Config("model.width must be at least 1".into()));
        }
        if self.compare.seeds == 0 {
            return Err(LabError::Config("compare.seeds must be at least 1".into()));
        }
        if self.compare.methods.is_empty() {
            return Err(LabError::Config("compare.methods is empty".into()));
        }
        for &l in &self.compare.lambda2_grid {
            LossWeights { lambda2: l, ..self.weights }.validate()?;
        }
        self.settings(self.seed).validate()
    }

    pub fn validate(&self) -> Result<()> {
        self.validate_settings()?;
        self.data.validate()
    }

    pub fn settings(&self, seed: u64) -> TrainSettings {
        let o = self.optimizer;
        TrainSettings {
            epochs: o.epochs,
            batch_size: o.batch_size,
            lr: o.lr,
            beta1: o.beta1,
            beta2: o.beta2,
            epsilon: o.epsilon,
            warmup_steps: o.warmup_steps,
            weights: self.weights,
            seed,
        }
    }

    /// Architecture matching the image shape and label spaces of `data`.
    pub fn architecture(&self, data: &ConfoundedDataset) -> Result<Architecture> {
        let shape = data
            .samples
            .first()
            .map(|s| s.x.shape().to_vec())
            .ok_or_else(|| LabError::Validation("dataset is empty".into()))?;
        if shape.len() != 3 {
            return Err(LabError::Compatibility(format!("samples of shape {shape:?} are not images")));
        }
        let image = ImageShape { height: shape[0], width: shape[1], channels: shape[2] };
        Ok(Architecture::desk(image, data.n_emotions(), data.n_confounders(), self.model.width))
    }
}

/// Accuracy report of `trained` on `data`.
pub fn evaluate(trained: &Trained, data: &ConfoundedDataset) -> Result<EvalReport> {
    let preds = predict_dataset(&trained.model, data)?;
    let labels: Vec<usize> = data.samples.iter().map(|s| s.y_e).collect();
    confusion(&preds, &labels, data.n_emotions())
}

/// Trains and evaluates one method on one seed of `cfg`'s data.
pub fn run_single(
    cfg: &ExperimentConfig,
    method: Method,
    lambda2: f64,
    seed: u64,
    data: &(ConfoundedDataset, ConfoundedDataset),
) -> Result<(Trained, EvalReport)> {
    let (train, test) = data;
    let mut settings = cfg.settings(seed);
    settings.weights.lambda2 = lambda2;
    let arch = cfg.architecture(train)?;
    let trained = train_method(method, &arch, train, &settings)?;
    let mut report = evaluate(&trained, test)?;
    report.split = Some("test".into());
    Ok((trained, report))
}

/// All runs of one `(method, λ2)` pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub method: Method,
    pub lambda2: f64,
    pub seeds: Vec<u64>,
    pub reports: Vec<EvalReport>,
    pub summary: AveragedReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub format_version: u32,
    pub n_emotions: usize,
    pub rows: Vec<ComparisonRow>,
}

/// Trains every configured method over the configured seeds (and λ2 grid)
/// on shared data. All configs must agree on everything except the method
/// list and the loss weights.
pub fn compare(configs: &[ExperimentConfig], mut progress: impl FnMut(&str)) -> Result<Comparison> {
    let base = configs.first().ok_or_else(|| LabError::Config("no configs to compare".into()))?;
    for c in configs {
        c.validate()?;
        if c.data != base.data
            || c.seed != base.seed
            || c.compare.seeds != base.compare.seeds
            || c.model != base.model
            || c.optimizer != base.optimizer
        {
            return Err(LabError::Config("compared configs disagree on data, seeds, model or optimizer".into()));
        }
    }
    let seeds: Vec<u64> = (0..base.compare.seeds as u64).map(|i| base.seed + i).collect();
    let mut data = BTreeMap::new();
    for &s in &seeds {
        data.insert(s, base.data.realize(s)?);
    }
    let n_emotions = data[&seeds[0]].0.n_emotions();
    let mut rows = Vec::new();
    for cfg in configs {
        let grid = if cfg.compare.lambda2_grid.is_empty() { vec![cfg.weights.lambda2] } else { cfg.compare.lambda2_grid.clone() };
        for &method in &cfg.compare.methods {
            for &lambda2 in &grid {
                let mut reports = Vec::new();
                for &s in &seeds {
                    let (_, r) = run_single(cfg, method, lambda2, s, &data[&s])?;
                    progress(&format!("{method} lambda2={lambda2:e} seed={s} mean_acc={:.4}", r.mean_acc));
                    reports.push(r);
                }
                let summary = EvalReport::average(&reports)?;
                rows.push(ComparisonRow { method, lambda2, seeds: seeds.clone(), reports, summary });
            }
        }
    }
    Ok(Comparison { format_version: crate::evalkit::REPORT_FORMAT, n_emotions, rows })
}

impl Comparison {
    /// Plain-text table: one row per `(method, λ2)`, one column per class and
    /// an average column, each cell `mean ± std` in percent. The best average
    /// is marked with `*`.
    pub fn table(&self) -> String {
        let best = self
            .rows
            .iter()
            .map(|r| r.summary.mean_acc)
            .fold(f64::NEG_INFINITY, f64::max);
        let mut out = String::new();
        let _ = write!(out, "{:<12} {:>9}", "method", "lambda2");
        for c in 0..self.n_emotions {
            let _ = write!(out, " {:>13}", format!("class{c}"));
        }
        let _ = writeln!(out, " {:>14}", "average");
        for r in &self.rows {
            let _ = write!(out, "{:<12} {:>9.0e}", r.method.name(), r.lambda2);
            for (m, s) in r.summary.per_class_mean.iter().zip(&r.summary.per_class_std) {
                let _ = write!(out, " {:>6.2}±{:<6.2}", 100.0 * m, 100.0 * s);
            }
            let mark = if r.summary.mean_acc == best { "*" } else { " " };
            let _ = writeln!(out, " {:>6.2}±{:<6.2}{mark}", 100.0 * r.summary.mean_acc, 100.0 * r.summary.mean_acc_std);
        }
        out
    }

    pub fn row(&self, method: Method, lambda2: Option<f64>) -> Option<&ComparisonRow> {
        self.rows.iter().find(|r| r.method == method && lambda2.is_none_or(|l| r.lambda2 == l))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_config_is_all_defaults() {
        assert_eq!(ExperimentConfig::from_toml("").unwrap(), ExperimentConfig::default());
        let d = ExperimentConfig::default();
        assert_eq!(d.optimizer.lr, 2e-4);
        assert_eq!(d.optimizer.epochs, 80);
    }

    #[test]
    fn printed_config_parses_back() {
        let d = ExperimentConfig::default();
        assert_eq!(ExperimentConfig::from_toml(&d.to_toml().unwrap()).unwrap(), d);
        let mut m = d.clone();
        m.data = DataConfig::Mixed(Default::default());
        m.optimizer.warmup_steps = Some(7);
        assert_eq!(ExperimentConfig::from_toml(&m.to_toml().unwrap()).unwrap(), m);
    }

    #[test]
    fn unknown_keys_and_bad_values_rejected() {
        assert!(matches!(ExperimentConfig::from_toml("colour = 1"), Err(LabError::Config(_))));
        assert!(matches!(ExperimentConfig::from_toml("[data]\nkind = \"toy\"\nblurr = 2.0"), Err(LabError::Config(_))));
        let c = ExperimentConfig::from_toml("[optimizer]\nepochs = 0").unwrap();
        assert!(matches!(c.validate(), Err(LabError::Config(_))));
        let c = ExperimentConfig::from_toml("method = \"iern\"\n[data]\nkind = \"mixed\"\nfold = 9").unwrap();
        assert!(matches!(c.validate(), Err(LabError::Config(_))));
    }
}
