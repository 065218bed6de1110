use std::collections::BTreeMap;

use numcore::{AdamConfig, AdamState, BatchStats, Gradients, Graph, Mode, Tensor, Var};
use serde::{Deserialize, Serialize};

use super::losses::{check_batch, LossBreakdown, LossWeights};
use super::model::*;
use crate::error::{LabError, Result};
use crate::synth::Batch;

/// The three update stages of one training step.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Stage {
    /// Discriminators learn to read their own factor.
    Discriminators,
    /// Generators, reconstruction and bank: fool the opposite discriminator,
    /// reconstruct the backbone output, pull context toward its center.
    Generators,
    /// Classifier path: backbone, emotion generator, classifier.
    Classifier,
}

/// How the classifier stage reads the emotion feature.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ClassifierRoute {
    /// Average of `f_c(g_r(emotion ‖ C_i))` over strata.
    Intervened,
    /// `f_c(emotion)`, no bank.
    Direct,
}

/// One Adam state per component with a shared warmup schedule.
#[derive(Debug, Clone)]
pub struct Optimizer {
    pub adam: AdamConfig,
    pub warmup_steps: u64,
    steps: u64,
    states: BTreeMap<String, AdamState>,
}

impl Optimizer {
    pub fn new(adam: AdamConfig, warmup_steps: u64) -> Result<Self> {
        adam.validate()?;
        Ok(Self { adam, warmup_steps, steps: 0, states: BTreeMap::new() })
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    pub fn current_lr(&self) -> f64 {
        numcore::warmup_lr(self.adam.lr, self.warmup_steps, self.steps)
    }

    /// Adam state for a component, if it has been stepped.
    pub fn state(&self, component: &str) -> Option<&AdamState> {
        self.states.get(component)
    }

    /// Steps every listed parameter set of `model` with `grads`.
    pub fn apply<M: numcore::Parameterized>(&mut self, model: &mut M, components: &[&str], grads: &Gradients) -> Result<()> {
        let lr = self.current_lr();
        for &name in components {
            let ps = model
                .param_set_mut(name)
                .ok_or_else(|| LabError::Contract(format!("unknown component {name}")))?;
            let state = match self.states.entry(name.to_owned()) {
                std::collections::btree_map::Entry::Occupied(e) => e.into_mut(),
                std::collections::btree_map::Entry::Vacant(e) => e.insert(AdamState::new(self.adam)?),
            };
            state.lr = lr;
            state.step(name, ps, grads)?;
        }
        Ok(())
    }

    /// Advances the warmup schedule; called once per training step.
    pub fn finish_step(&mut self) {
        self.steps += 1;
    }
}

/// What one training step observed.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct StepReport {
    pub losses: LossBreakdown,
    pub total: f64,
    /// Correct emotion predictions among the batch, from the classifier stage.
    pub correct: usize,
    pub batch: usize,
}

/// Folds batch statistics for `components` into running buffers, averaging
/// repeated visits of the same layer first.
pub(crate) fn absorb(model: &mut IernModel, stats: Vec<BatchStats>, components: &[&str]) -> Result<()> {
    let mut merged: BTreeMap<(String, String), (BatchStats, usize)> = BTreeMap::new();
    for s in stats.into_iter().filter(|s| components.contains(&s.set.as_str())) {
        let key = (s.set.clone(), s.prefix.clone());
        match merged.get_mut(&key) {
            Some((acc, n)) => {
                acc.mean.iter_mut().zip(&s.mean).for_each(|(a, b)| *a += b);
                acc.var.iter_mut().zip(&s.var).for_each(|(a, b)| *a += b);
                *n += 1;
            }
            None => {
                merged.insert(key, (s, 1));
            }
        }
    }
    let mut by_set: BTreeMap<String, Vec<BatchStats>> = BTreeMap::new();
    for (_, (mut s, n)) in merged {
        let k = n as f64;
        s.mean.iter_mut().for_each(|v| *v /= k);
        s.var.iter_mut().for_each(|v| *v /= k);
        by_set.entry(s.set.clone()).or_default().push(s);
    }
    for (set, stats) in by_set {
        if let Some(stack) = model.stack_mut(&set) {
            stack.absorb_batch_stats(&set, &stats)?;
        }
    }
    Ok(())
}

fn weighted_sum(g: &mut Graph, terms: &[(f64, Var)]) -> Result<Option<Var>> {
    let scaled: Vec<Var> = terms.iter().filter(|(w, _)| *w != 0.0).map(|&(w, v)| g.scale(v, w)).collect();
    if scaled.is_empty() {
        return Ok(None);
    }
    Ok(Some(g.add_all(&scaled)?))
}

/// Discriminator and generator stages. With `use_bank` false the
/// confounder-builder term is dropped. Returns the breakdown with `l_cls`
/// left at zero.
pub fn disentangle_stages(
    model: &mut IernModel,
    batch: &Batch,
    weights: &LossWeights,
    opt: &mut Optimizer,
    use_bank: bool,
    hook: &mut dyn FnMut(Stage, &IernModel),
) -> Result<LossBreakdown> {
    check_batch(model, batch)?;
    weights.validate()?;
    let mut out = LossBreakdown::default();

    // Forward everything once with the discriminator mask, reuse it for the
    // discriminator update.
    let disc = [EMOTION_DISC, CONTEXT_DISC];
    model.set_trainable(&disc);
    let mut g = Graph::new();
    let f = model.features(&mut g, &batch.x, Mode::Train)?;
    let (e_ce, e_uni) = model.emotion_terms(&mut g, &f, &batch.y_e, Mode::Train)?;
    let (c_ce, c_uni) = model.context_terms(&mut g, &f, &batch.y_c, Mode::Train)?;
    out.l_e = g.scalar(e_ce) + g.scalar(e_uni);
    out.l_c = g.scalar(c_ce) + g.scalar(c_uni);
    absorb(model, g.take_batch_stats(), &[BACKBONE, EMOTION_GEN, CONTEXT_GEN])?;
    if let Some(loss) = weighted_sum(&mut g, &[(weights.lambda1, e_ce), (weights.lambda1, c_ce)])? {
        let grads = g.backward(loss)?;
        opt.apply(model, &disc, &grads)?;
    }
    hook(Stage::Discriminators, model);

    let mut active: Vec<&str> = Vec::new();
    if weights.lambda1 != 0.0 {
        active.extend([EMOTION_GEN, CONTEXT_GEN, RECON]);
    }
    let bank_active = use_bank && weights.lambda2 != 0.0;
    if bank_active {
        if !active.contains(&CONTEXT_GEN) {
            active.push(CONTEXT_GEN);
        }
        active.push(BANK);
    }
    model.set_trainable(&active);
    let mut g = Graph::new();
    let f = model.features(&mut g, &batch.x, Mode::Train)?;
    let (_, e_uni) = model.emotion_terms(&mut g, &f, &batch.y_e, Mode::Train)?;
    let (_, c_uni) = model.context_terms(&mut g, &f, &batch.y_c, Mode::Train)?;
    let r = model.recon_term(&mut g, &f, Mode::Train)?;
    out.l_r = g.scalar(r);
    let mut terms = vec![(weights.lambda1, e_uni), (weights.lambda1, c_uni), (weights.lambda1, r)];
    if use_bank {
        let cb = model.confounder_term(&mut g, &f, &batch.y_c)?;
        out.l_cb = g.scalar(cb);
        terms.push((weights.lambda2, cb));
    }
    if let Some(loss) = weighted_sum(&mut g, &terms)? {
        let grads = g.backward(loss)?;
        opt.apply(model, &active, &grads)?;
    }
    hook(Stage::Generators, model);
    Ok(out)
}

/// Classifier stage: updates `f_c`, `g_e`, `f_b` on `λ3 · CE`. Returns the
/// loss value and the number of correct training predictions.
pub fn classifier_stage(
    model: &mut IernModel,
    batch: &Batch,
    weights: &LossWeights,
    opt: &mut Optimizer,
    route: ClassifierRoute,
    hook: &mut dyn FnMut(Stage, &IernModel),
) -> Result<(f64, usize)> {
    check_batch(model, batch)?;
    let comps = [CLASSIFIER, EMOTION_GEN, BACKBONE];
    model.set_trainable(&comps);
    let mut g = Graph::new();
    let f = model.features(&mut g, &batch.x, Mode::Train)?;
    let logits = match route {
        ClassifierRoute::Intervened => model.averaged_logits(&mut g, f.emotion, Mode::Train)?,
        ClassifierRoute::Direct => model.direct_logits(&mut g, f.emotion, Mode::Train)?,
    };
    let loss = g.cross_entropy(logits, &batch.y_e)?;
    let value = g.scalar(loss);
    let correct = count_correct(g.value(logits), &batch.y_e);
    let stats = g.take_batch_stats();
    absorb(model, stats, &[RECON, CLASSIFIER])?;
    if weights.lambda3 != 0.0 {
        let scaled = g.scale(loss, weights.lambda3);
        let grads = g.backward(scaled)?;
        opt.apply(model, &comps, &grads)?;
    }
    hook(Stage::Classifier, model);
    Ok((value, correct))
}

pub(crate) fn count_correct(logits: &Tensor, labels: &[usize]) -> usize {
    logits.argmax_rows().iter().zip(labels).filter(|(p, y)| p == y).count()
}

/// One staged IERN update on `batch`.
pub fn train_step(model: &mut IernModel, batch: &Batch, weights: &LossWeights, opt: &mut Optimizer) -> Result<StepReport> {
    train_step_observed(model, batch, weights, opt, ClassifierRoute::Intervened, &mut |_, _| {})
}

/// [`train_step`] with a choice of classifier route and a hook called after
/// each stage's update.
pub fn train_step_observed(
    model: &mut IernModel,
    batch: &Batch,
    weights: &LossWeights,
    opt: &mut Optimizer,
    route: ClassifierRoute,
    hook: &mut dyn FnMut(Stage, &IernModel),
) -> Result<StepReport> {
    let use_bank = route == ClassifierRoute::Intervened;
    let mut losses = disentangle_stages(model, batch, weights, opt, use_bank, hook)?;
    let (l_cls, correct) = classifier_stage(model, batch, weights, opt, route, hook)?;
    losses.l_cls = l_cls;
    model.set_trainable(&COMPONENTS);
    opt.finish_step();
    Ok(StepReport { losses, total: losses.weighted_total(weights), correct, batch: batch.len() })
}

const PREDICT_CHUNK: usize = 256;

pub(crate) fn chunked(x: &Tensor, mut f: impl FnMut(&Tensor) -> Result<Tensor>) -> Result<Tensor> {
    let n = x.batch();
    let mut data = Vec::new();
    let mut row_shape = Vec::new();
    let mut start = 0;
    while start < n {
        let count = PREDICT_CHUNK.min(n - start);
        let part = f(&x.slice_batch(start, count))?;
        row_shape = part.shape()[1..].to_vec();
        data.extend(part.into_data());
        start += count;
    }
    let mut shape = vec![n];
    shape.extend(row_shape);
    Ok(Tensor::new(shape, data)?)
}

/// Stratum-averaged logits in evaluation mode.
pub fn predict_logits(model: &IernModel, x: &Tensor) -> Result<Tensor> {
    chunked(x, |xs| {
        let mut g = Graph::new();
        let f = model.features(&mut g, xs, Mode::Eval)?;
        let logits = model.averaged_logits(&mut g, f.emotion, Mode::Eval)?;
        Ok(g.value(logits).clone())
    })
}

/// Emotion predictions: argmax of the softmax of the averaged logits.
pub fn predict(model: &IernModel, x: &Tensor) -> Result<Vec<usize>> {
    Ok(predict_logits(model, x)?.argmax_rows())
}

/// Predicted labels with the softmax of the averaged logits, one row per
/// sample.
pub fn predict_proba(model: &IernModel, x: &Tensor) -> Result<(Vec<usize>, Tensor)> {
    let logits = predict_logits(model, x)?;
    Ok((logits.argmax_rows(), numcore::softmax(&logits)?))
}

/// Logits of `f_c(g_e(f_b(x)))`, bypassing the bank.
pub fn predict_direct_logits(model: &IernModel, x: &Tensor) -> Result<Tensor> {
    chunked(x, |xs| {
        let mut g = Graph::new();
        let f = model.features(&mut g, xs, Mode::Eval)?;
        let logits = model.direct_logits(&mut g, f.emotion, Mode::Eval)?;
        Ok(g.value(logits).clone())
    })
}

/// Context-discriminator stratum predictions on the context feature.
pub fn predict_strata(model: &IernModel, x: &Tensor) -> Result<Vec<usize>> {
    let logits = chunked(x, |xs| {
        let mut g = Graph::new();
        let f = model.features(&mut g, xs, Mode::Eval)?;
        let logits = model.context_disc.forward(&mut g, CONTEXT_DISC, &[f.context], Mode::Eval)?;
        Ok(g.value(logits).clone())
    })?;
    Ok(logits.argmax_rows())
}
