//! Epoch loops for every method, shared by the CLI and the benchmarks.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use numcore::{AdamConfig, Graph, Mode, Tensor};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::baselines::{build_nwgm_dictionary, resample_dataset, NwgmDictionary, NwgmHead, VanillaModel, NWGM_HEAD};
use crate::error::{LabError, Result};
use crate::iern::{
    chunked, count_correct, disentangle_stages, predict, predict_direct_logits, sub_seed,
    train_step_observed, Architecture, ClassifierRoute, IernModel, LossWeights, Optimizer, BACKBONE, EMOTION_GEN,
};
use crate::synth::{Batch, ConfoundedDataset};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Baseline,
    Disentangle,
    Resample,
    Nwgm,
    Iern,
}

impl Method {
    pub const ALL: [Method; 5] = [Method::Baseline, Method::Disentangle, Method::Resample, Method::Nwgm, Method::Iern];

    pub fn name(self) -> &'static str {
        match self {
            Method::Baseline => "baseline",
            Method::Disentangle => "disentangle",
            Method::Resample => "resample",
            Method::Nwgm => "nwgm",
            Method::Iern => "iern",
        }
    }

    /// Loss terms recorded in this method's training log.
    pub fn logged_terms(self) -> &'static [&'static str] {
        match self {
            Method::Baseline | Method::Resample => &["l_cls"],
            Method::Disentangle | Method::Nwgm => &["l_e", "l_c", "l_r", "l_cls"],
            Method::Iern => &["l_e", "l_c", "l_r", "l_cb", "l_cls"],
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = LabError;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| LabError::Config(format!("unknown method {s:?}")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSettings {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    /// Linear warmup length; `None` means 5% of all steps.
    pub warmup_steps: Option<u64>,
    pub weights: LossWeights,
    pub seed: u64,
}

impl Default for TrainSettings {
    fn default() -> Self {
        let adam = AdamConfig::default();
        Self {
            epochs: 80,
            batch_size: 32,
            lr: adam.lr,
            beta1: adam.beta1,
            beta2: adam.beta2,
            epsilon: adam.epsilon,
            warmup_steps: None,
            weights: LossWeights::default(),
            seed: 0,
        }
    }
}

impl TrainSettings {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(LabError::Config("epochs must be at least 1".into()));
        }
        if self.batch_size == 0 {
            return Err(LabError::Config("batch_size must be at least 1".into()));
        }
        self.adam().validate()?;
        self.weights.validate()
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig { lr: self.lr, beta1: self.beta1, beta2: self.beta2, epsilon: self.epsilon }
    }

    fn optimizer(&self, n: usize) -> Result<Optimizer> {
        let total = (self.epochs * n.div_ceil(self.batch_size)) as u64;
        let warmup = self.warmup_steps.unwrap_or(total / 20);
        Optimizer::new(self.adam(), warmup)
    }
}

/// One structured training-log record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    /// Sample-weighted mean of each logged term over the epoch.
    pub losses: BTreeMap<String, f64>,
    pub total: f64,
    pub train_acc: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub enum TrainedModel {
    Vanilla(VanillaModel),
    /// IERN, or the disentanglement-only ablation when `route` is direct.
    Iern { model: IernModel, route: ClassifierRoute },
    Nwgm { trunk: IernModel, head: NwgmHead, dictionary: NwgmDictionary },
}

#[derive(Debug, Clone)]
pub struct Trained {
    pub method: Method,
    pub model: TrainedModel,
    pub log: Vec<EpochLog>,
    /// Optimizer steps taken.
    pub steps: u64,
}

impl TrainedModel {
    pub fn predict(&self, x: &Tensor) -> Result<Vec<usize>> {
        match self {
            TrainedModel::Vanilla(m) => m.predict(x),
            TrainedModel::Iern { model, route: ClassifierRoute::Intervened } => predict(model, x),
            TrainedModel::Iern { model, route: ClassifierRoute::Direct } => {
                Ok(predict_direct_logits(model, x)?.argmax_rows())
            }
            TrainedModel::Nwgm { trunk, head, dictionary } => {
                let logits = chunked(x, |xs| {
                    let mut g = Graph::new();
                    let f = trunk.features(&mut g, xs, Mode::Eval)?;
                    let q = g.global_avg_pool(f.emotion)?;
                    let (logits, _) = head.forward(&mut g, q, dictionary)?;
                    Ok(g.value(logits).clone())
                })?;
                Ok(logits.argmax_rows())
            }
        }
    }

    /// The trunk for methods that have one.
    pub fn trunk(&self) -> Option<&IernModel> {
        match self {
            TrainedModel::Vanilla(_) => None,
            TrainedModel::Iern { model, .. } => Some(model),
            TrainedModel::Nwgm { trunk, .. } => Some(trunk),
        }
    }
}

/// Accumulates per-batch values into an epoch record.
#[derive(Default)]
struct EpochMeter {
    sums: BTreeMap<String, f64>,
    total: f64,
    correct: usize,
    seen: usize,
}

impl EpochMeter {
    fn add(&mut self, terms: &[(&str, f64)], total: f64, correct: usize, n: usize) {
        for &(name, v) in terms {
            *self.sums.entry(name.to_owned()).or_default() += v * n as f64;
        }
        self.total += total * n as f64;
        self.correct += correct;
        self.seen += n;
    }

    fn finish(self, epoch: usize) -> EpochLog {
        let n = self.seen.max(1) as f64;
        EpochLog {
            epoch,
            losses: self.sums.into_iter().map(|(k, v)| (k, v / n)).collect(),
            total: self.total / n,
            train_acc: self.correct as f64 / n,
        }
    }
}

fn epoch_batches(data: &ConfoundedDataset, batch_size: usize, rng: &mut ChaCha8Rng) -> Vec<Batch> {
    let mut order: Vec<usize> = (0..data.len()).collect();
    order.shuffle(rng);
    order.chunks(batch_size).map(|idx| data.batch(idx)).collect()
}

fn check_compatible(arch: &Architecture, data: &ConfoundedDataset) -> Result<()> {
    if data.is_empty() {
        return Err(LabError::Validation("training set is empty".into()));
    }
    let shape = data.samples[0].x.shape();
    if shape != arch.input.as_slice() || data.n_emotions() != arch.n_emotions || data.n_confounders() != arch.n_confounders
    {
        return Err(LabError::Compatibility(format!(
            "data ({:?}, {} emotions, {} confounders) vs architecture ({:?}, {}, {})",
            shape,
            data.n_emotions(),
            data.n_confounders(),
            arch.input,
            arch.n_emotions,
            arch.n_confounders
        )));
    }
    Ok(())
}

/// Trains `method` on `data` from a fresh model seeded by `settings.seed`.
pub fn train_method(method: Method, arch: &Architecture, data: &ConfoundedDataset, settings: &TrainSettings) -> Result<Trained> {
    settings.validate()?;
    check_compatible(arch, data)?;
    let seed = settings.seed;
    let mut rng = ChaCha8Rng::seed_from_u64(sub_seed(seed, "batches"));
    let weights = settings.weights;
    let mut log = Vec::with_capacity(settings.epochs);
    let steps;
    let model = match method {
        Method::Baseline | Method::Resample => {
            let resampled;
            let data = if method == Method::Resample {
                let mut r = ChaCha8Rng::seed_from_u64(sub_seed(seed, "resample"));
                resampled = resample_dataset(data, &mut r)?;
                &resampled
            } else {
                data
            };
            let mut model = VanillaModel::new(arch, seed)?;
            let mut opt = settings.optimizer(data.len())?;
            for epoch in 0..settings.epochs {
                let mut meter = EpochMeter::default();
                for batch in epoch_batches(data, settings.batch_size, &mut rng) {
                    let (loss, correct) = model.train_step(&batch, &mut opt)?;
                    meter.add(&[("l_cls", loss)], weights.lambda3 * loss, correct, batch.len());
                }
                log.push(meter.finish(epoch));
            }
            steps = opt.steps();
            TrainedModel::Vanilla(model)
        }
        Method::Disentangle | Method::Iern => {
            let route = if method == Method::Iern { ClassifierRoute::Intervened } else { ClassifierRoute::Direct };
            let mut model = IernModel::new(arch.clone(), seed)?;
            let mut opt = settings.optimizer(data.len())?;
            for epoch in 0..settings.epochs {
                let mut meter = EpochMeter::default();
                for batch in epoch_batches(data, settings.batch_size, &mut rng) {
                    let r = train_step_observed(&mut model, &batch, &weights, &mut opt, route, &mut |_, _| {})?;
                    let named = r.losses.named();
                    let terms: Vec<(&str, f64)> =
                        named.iter().copied().filter(|(n, _)| method.logged_terms().contains(n)).collect();
                    meter.add(&terms, r.total, r.correct, batch.len());
                }
                log.push(meter.finish(epoch));
            }
            steps = opt.steps();
            TrainedModel::Iern { model, route }
        }
        Method::Nwgm => {
            // Disentanglement-only training for the first half, then the
            // dictionary is frozen and the head replaces the direct path.
            let warm = settings.epochs.div_ceil(2);
            let mut trunk = IernModel::new(arch.clone(), seed)?;
            let mut opt = settings.optimizer(data.len())?;
            for epoch in 0..warm {
                let mut meter = EpochMeter::default();
                for batch in epoch_batches(data, settings.batch_size, &mut rng) {
                    let r = train_step_observed(&mut trunk, &batch, &weights, &mut opt, ClassifierRoute::Direct, &mut |_, _| {})?;
                    let terms = [("l_e", r.losses.l_e), ("l_c", r.losses.l_c), ("l_r", r.losses.l_r), ("l_cls", r.losses.l_cls)];
                    meter.add(&terms, r.total, r.correct, batch.len());
                }
                log.push(meter.finish(epoch));
            }
            let dictionary = nwgm_dictionary(&trunk, data)?;
            let mut hrng = ChaCha8Rng::seed_from_u64(sub_seed(seed, NWGM_HEAD));
            let mut head = NwgmHead::new(dictionary.dim(), arch.n_emotions, &mut hrng)?;
            for epoch in warm..settings.epochs {
                let mut meter = EpochMeter::default();
                for batch in epoch_batches(data, settings.batch_size, &mut rng) {
                    let mut losses = disentangle_stages(&mut trunk, &batch, &weights, &mut opt, false, &mut |_, _| {})?;
                    let (l_cls, correct) = nwgm_stage(&mut trunk, &mut head, &dictionary, &batch, &weights, &mut opt)?;
                    losses.l_cls = l_cls;
                    opt.finish_step();
                    let terms = [("l_e", losses.l_e), ("l_c", losses.l_c), ("l_r", losses.l_r), ("l_cls", l_cls)];
                    meter.add(&terms, losses.weighted_total(&weights), correct, batch.len());
                }
                log.push(meter.finish(epoch));
            }
            trunk.set_trainable(&crate::iern::COMPONENTS);
            steps = opt.steps();
            TrainedModel::Nwgm { trunk, head, dictionary }
        }
    };
    Ok(Trained { method, model, log, steps })
}

/// Dictionary of pooled context features of `data` under `trunk`.
pub fn nwgm_dictionary(trunk: &IernModel, data: &ConfoundedDataset) -> Result<NwgmDictionary> {
    let all = data.all();
    let pooled = chunked(&all.x, |xs| {
        let mut g = Graph::new();
        let f = trunk.features(&mut g, xs, Mode::Eval)?;
        let p = g.global_avg_pool(f.context)?;
        Ok(g.value(p).clone())
    })?;
    build_nwgm_dictionary(&pooled, &all.y_c, data.n_confounders())
}

fn nwgm_stage(
    trunk: &mut IernModel,
    head: &mut NwgmHead,
    dictionary: &NwgmDictionary,
    batch: &Batch,
    weights: &LossWeights,
    opt: &mut Optimizer,
) -> Result<(f64, usize)> {
    let comps = [EMOTION_GEN, BACKBONE];
    trunk.set_trainable(&comps);
    let mut g = Graph::new();
    let f = trunk.features(&mut g, &batch.x, Mode::Train)?;
    let q = g.global_avg_pool(f.emotion)?;
    let (logits, _) = head.forward(&mut g, q, dictionary)?;
    let loss = g.cross_entropy(logits, &batch.y_e)?;
    let value = g.scalar(loss);
    let correct = count_correct(g.value(logits), &batch.y_e);
    if weights.lambda3 != 0.0 {
        let scaled = g.scale(loss, weights.lambda3);
        let grads = g.backward(scaled)?;
        opt.apply(trunk, &comps, &grads)?;
        opt.apply(head, &[NWGM_HEAD], &grads)?;
    }
    Ok((value, correct))
}

pub fn predict_dataset(model: &TrainedModel, data: &ConfoundedDataset) -> Result<Vec<usize>> {
    if data.is_empty() {
        return Err(LabError::Validation("evaluation set is empty".into()));
    }
    model.predict(&data.all().x)
}

/// Stratum predictions of the context discriminator on the context feature.
pub fn stratum_accuracy(model: &IernModel, data: &ConfoundedDataset) -> Result<f64> {
    let all = data.all();
    let pred = crate::iern::predict_strata(model, &all.x)?;
    Ok(pred.iter().zip(&all.y_c).filter(|(p, y)| p == y).count() as f64 / all.len() as f64)
}
