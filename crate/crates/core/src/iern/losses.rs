use numcore::{Graph, Mode, Tensor, Var};
use serde::{Deserialize, Serialize};

use super::model::*;
use crate::error::{LabError, Result};
use crate::synth::Batch;

/// Weights of the combined objective
/// `λ1 (L_e + L_c + L_r) + λ2 L_CB + λ3 L_Cls`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub lambda1: f64,
    pub lambda2: f64,
    pub lambda3: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { lambda1: 1.0, lambda2: 5e-4, lambda3: 1.0 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("lambda1", self.lambda1), ("lambda2", self.lambda2), ("lambda3", self.lambda3)] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(LabError::Config(format!("{name} = {v} must be finite and non-negative")));
            }
        }
        Ok(())
    }
}

/// Per-term values of the combined objective.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_e: f64,
    pub l_c: f64,
    pub l_r: f64,
    pub l_cb: f64,
    pub l_cls: f64,
}

impl LossBreakdown {
    pub fn weighted_total(&self, w: &LossWeights) -> f64 {
        w.lambda1 * (self.l_e + self.l_c + self.l_r) + w.lambda2 * self.l_cb + w.lambda3 * self.l_cls
    }

    pub fn named(&self) -> [(&'static str, f64); 5] {
        [("l_e", self.l_e), ("l_c", self.l_c), ("l_r", self.l_r), ("l_cb", self.l_cb), ("l_cls", self.l_cls)]
    }
}

/// Backbone output and the two disentangled features for one batch.
#[derive(Debug, Clone, Copy)]
pub struct Features {
    pub base: Var,
    pub emotion: Var,
    pub context: Var,
}

impl IernModel {
    pub fn features(&self, g: &mut Graph, x: &Tensor, mode: Mode) -> Result<Features> {
        if x.shape()[1..] != self.arch.input[..] {
            return Err(LabError::Compatibility(format!(
                "input {:?} for a model expecting [_, {:?}]",
                x.shape(),
                self.arch.input
            )));
        }
        let xi = g.input(x.clone());
        let base = self.backbone.forward(g, BACKBONE, &[xi], mode)?;
        let emotion = self.emotion_gen.forward(g, EMOTION_GEN, &[base], mode)?;
        let context = self.context_gen.forward(g, CONTEXT_GEN, &[base], mode)?;
        Ok(Features { base, emotion, context })
    }

    /// `(CE(d_e(emotion), y_e), MSE(softmax(d_c(emotion)), 1/N_c))`.
    pub fn emotion_terms(&self, g: &mut Graph, f: &Features, y_e: &[usize], mode: Mode) -> Result<(Var, Var)> {
        let de = self.emotion_disc.forward(g, EMOTION_DISC, &[f.emotion], mode)?;
        let ce = g.cross_entropy(de, y_e)?;
        let dc = self.context_disc.forward(g, CONTEXT_DISC, &[f.emotion], mode)?;
        let p = g.softmax(dc);
        let uniform = g.mse_scalar(p, 1.0 / self.n_confounders() as f64);
        Ok((ce, uniform))
    }

    /// `(CE(d_c(context), y_c), MSE(softmax(d_e(context)), 1/N_e))`.
    pub fn context_terms(&self, g: &mut Graph, f: &Features, y_c: &[usize], mode: Mode) -> Result<(Var, Var)> {
        let dc = self.context_disc.forward(g, CONTEXT_DISC, &[f.context], mode)?;
        let ce = g.cross_entropy(dc, y_c)?;
        let de = self.emotion_disc.forward(g, EMOTION_DISC, &[f.context], mode)?;
        let p = g.softmax(de);
        let uniform = g.mse_scalar(p, 1.0 / self.n_emotions() as f64);
        Ok((ce, uniform))
    }

    /// `MSE(g_r(emotion ‖ context), base)`.
    pub fn recon_term(&self, g: &mut Graph, f: &Features, mode: Mode) -> Result<Var> {
        let rec = self.recon.forward(g, RECON, &[f.emotion, f.context], mode)?;
        Ok(g.mse(rec, f.base)?)
    }

    /// `MSE(context, C[y_c])` over the batch.
    pub fn confounder_term(&self, g: &mut Graph, f: &Features, y_c: &[usize]) -> Result<Var> {
        if let Some(&bad) = y_c.iter().find(|&&c| c >= self.n_confounders()) {
            return Err(LabError::Contract(format!("confounder label {bad} out of range")));
        }
        let bank = g.param(BANK, BANK_PARAM, &self.bank)?;
        let centers = g.gather(bank, y_c)?;
        Ok(g.mse(f.context, centers)?)
    }

    /// Logits of one branch: `f_c(g_r(emotion ‖ C[stratum]))`.
    pub fn branch_logits(&self, g: &mut Graph, emotion: Var, stratum: usize, mode: Mode) -> Result<Var> {
        let batch = g.shape(emotion)[0];
        let bank = g.param(BANK, BANK_PARAM, &self.bank)?;
        let center = g.gather(bank, &vec![stratum; batch])?;
        let rec = self.recon.forward(g, RECON, &[emotion, center], mode)?;
        Ok(self.classifier.forward(g, CLASSIFIER, &[rec], mode)?)
    }

    /// Logits averaged over every confounder stratum with weight `1/N_c`,
    /// summed in stratum order.
    pub fn averaged_logits(&self, g: &mut Graph, emotion: Var, mode: Mode) -> Result<Var> {
        let branches = (0..self.n_confounders())
            .map(|i| self.branch_logits(g, emotion, i, mode))
            .collect::<Result<Vec<_>>>()?;
        let sum = g.add_all(&branches)?;
        Ok(g.scale(sum, 1.0 / self.n_confounders() as f64))
    }

    pub fn classifier_term(&self, g: &mut Graph, emotion: Var, y_e: &[usize], mode: Mode) -> Result<Var> {
        let logits = self.averaged_logits(g, emotion, mode)?;
        Ok(g.cross_entropy(logits, y_e)?)
    }

    /// Plain `f_c(emotion)`: the classifier without the confounder bank.
    pub fn direct_logits(&self, g: &mut Graph, emotion: Var, mode: Mode) -> Result<Var> {
        Ok(self.classifier.forward(g, CLASSIFIER, &[emotion], mode)?)
    }
}

fn check_labels(batch: &Batch, n_e: usize, n_c: usize) -> Result<()> {
    if batch.is_empty() {
        return Err(LabError::Contract("empty batch".into()));
    }
    if batch.y_e.len() != batch.y_c.len() || batch.y_e.len() != batch.x.batch() {
        return Err(LabError::Contract("batch labels and inputs disagree in length".into()));
    }
    if batch.y_e.iter().any(|&e| e >= n_e) || batch.y_c.iter().any(|&c| c >= n_c) {
        return Err(LabError::Contract("batch label out of range".into()));
    }
    Ok(())
}

pub(crate) fn check_batch(model: &IernModel, batch: &Batch) -> Result<()> {
    check_labels(batch, model.n_emotions(), model.n_confounders())
}

/// Both terms of the emotion disentanglement objective.
pub fn loss_emotion(model: &IernModel, batch: &Batch) -> Result<(f64, f64)> {
    check_batch(model, batch)?;
    let mut g = Graph::new();
    let f = model.features(&mut g, &batch.x, Mode::Train)?;
    let (a, b) = model.emotion_terms(&mut g, &f, &batch.y_e, Mode::Train)?;
    Ok((g.scalar(a), g.scalar(b)))
}

/// Both terms of the context disentanglement objective.
pub fn loss_context(model: &IernModel, batch: &Batch) -> Result<(f64, f64)> {
    check_batch(model, batch)?;
    let mut g = Graph::new();
    let f = model.features(&mut g, &batch.x, Mode::Train)?;
    let (a, b) = model.context_terms(&mut g, &f, &batch.y_c, Mode::Train)?;
    Ok((g.scalar(a), g.scalar(b)))
}

pub fn loss_recon(model: &IernModel, batch: &Batch) -> Result<f64> {
    check_batch(model, batch)?;
    let mut g = Graph::new();
    let f = model.features(&mut g, &batch.x, Mode::Train)?;
    let r = model.recon_term(&mut g, &f, Mode::Train)?;
    Ok(g.scalar(r))
}

pub fn loss_confounder_builder(model: &IernModel, batch: &Batch) -> Result<f64> {
    check_batch(model, batch)?;
    let mut g = Graph::new();
    let f = model.features(&mut g, &batch.x, Mode::Train)?;
    let r = model.confounder_term(&mut g, &f, &batch.y_c)?;
    Ok(g.scalar(r))
}

pub fn loss_classifier(model: &IernModel, batch: &Batch) -> Result<f64> {
    check_batch(model, batch)?;
    let mut g = Graph::new();
    let f = model.features(&mut g, &batch.x, Mode::Train)?;
    let r = model.classifier_term(&mut g, f.emotion, &batch.y_e, Mode::Train)?;
    Ok(g.scalar(r))
}

/// Weighted objective and its per-term breakdown, all measured at the
/// current parameters. Reporting only: updates follow the staged step.
pub fn total_loss(model: &IernModel, batch: &Batch, weights: &LossWeights) -> Result<(f64, LossBreakdown)> {
    check_batch(model, batch)?;
    weights.validate()?;
    let mut g = Graph::new();
    let f = model.features(&mut g, &batch.x, Mode::Train)?;
    let (e1, e2) = model.emotion_terms(&mut g, &f, &batch.y_e, Mode::Train)?;
    let (c1, c2) = model.context_terms(&mut g, &f, &batch.y_c, Mode::Train)?;
    let r = model.recon_term(&mut g, &f, Mode::Train)?;
    let cb = model.confounder_term(&mut g, &f, &batch.y_c)?;
    let cls = model.classifier_term(&mut g, f.emotion, &batch.y_e, Mode::Train)?;
    let b = LossBreakdown {
        l_e: g.scalar(e1) + g.scalar(e2),
        l_c: g.scalar(c1) + g.scalar(c2),
        l_r: g.scalar(r),
        l_cb: g.scalar(cb),
        l_cls: g.scalar(cls),
    };
    Ok((b.weighted_total(weights), b))
}

/// Components differentiated by each term of the objective.
pub fn term_components(term: &str) -> Option<&'static [&'static str]> {
    Some(match term {
        "l_e_disc" => &[EMOTION_DISC],
        "l_e_gen" => &[EMOTION_GEN],
        "l_c_disc" => &[CONTEXT_DISC],
        "l_c_gen" => &[CONTEXT_GEN],
        "l_r" => &[RECON, EMOTION_GEN, CONTEXT_GEN],
        "l_cb" => &[CONTEXT_GEN, BANK],
        "l_cls" => &[CLASSIFIER, EMOTION_GEN, BACKBONE],
        _ => return None,
    })
}

/// Records one named term on a fresh graph; gradients reach whatever the
/// model's current freeze flags allow.
pub fn record_term(model: &IernModel, batch: &Batch, term: &str, g: &mut Graph) -> Result<Var> {
    check_batch(model, batch)?;
    let f = model.features(g, &batch.x, Mode::Train)?;
    match term {
        "l_e_disc" => Ok(model.emotion_terms(g, &f, &batch.y_e, Mode::Train)?.0),
        "l_e_gen" => Ok(model.emotion_terms(g, &f, &batch.y_e, Mode::Train)?.1),
        "l_c_disc" => Ok(model.context_terms(g, &f, &batch.y_c, Mode::Train)?.0),
        "l_c_gen" => Ok(model.context_terms(g, &f, &batch.y_c, Mode::Train)?.1),
        "l_r" => model.recon_term(g, &f, Mode::Train),
        "l_cb" => model.confounder_term(g, &f, &batch.y_c),
        "l_cls" => model.classifier_term(g, f.emotion, &batch.y_e, Mode::Train),
        other => Err(LabError::Config(format!("unknown loss term {other}"))),
    }
}
